//! Optimization loop: batched objective through both towers, Adam with a
//! linear warmup and two step decays, resumable from checkpoints.

use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::corpus::Corpus;
use crate::encoders::{EncoderDims, EncoderParams, Narration};
use crate::error::{Error, Result};
use crate::losses::{score_batch_objective, BatchScores, LossKind, DEFAULT_MARGIN};
use crate::numkernel::{dot, score_matrix, Backward, Matrix};
use crate::rng::{derive_seed, Rng};
use crate::sampling::{build_positive_bag, concat_candidates, sample_anchors, NegativeMode};

const INIT_TAG: u64 = 0x1417;
const BATCH_TAG: u64 = 0xba7c;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Positive candidates per clip, odd.
    pub bag_size: usize,
    pub negative_mode: NegativeMode,
    pub batch_size: usize,
    pub total_steps: u64,
    pub seed: u64,
    pub encoder: EncoderDims,
    pub base_lr: f64,
    pub warmup_steps: u64,
    /// Steps after which the rate drops by `decay_factor`; defaults to 60% and
    /// 80% of `total_steps`.
    pub decay_steps: Option<[u64; 2]>,
    pub decay_factor: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub margin: f64,
    pub log_every: u64,
    /// Wall-clock seconds in metrics records. Off by default so metric files
    /// are reproducible byte for byte.
    pub record_wall_time: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::MilNce,
            bag_size: 5,
            negative_mode: NegativeMode::Joint,
            batch_size: 32,
            total_steps: 2000,
            seed: 0,
            encoder: EncoderDims::default(),
            base_lr: 3e-3,
            warmup_steps: 100,
            decay_steps: None,
            decay_factor: 0.1,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            margin: DEFAULT_MARGIN,
            log_every: 50,
            record_wall_time: false,
        }
    }
}

impl TrainConfig {
    pub fn schedule(&self) -> Schedule {
        let decay = self.decay_steps.unwrap_or([
            (self.total_steps as f64 * 0.6).round() as u64,
            (self.total_steps as f64 * 0.8).round() as u64,
        ]);
        Schedule {
            base_lr: self.base_lr,
            warmup_steps: self.warmup_steps,
            decay_steps: decay,
            decay_factor: self.decay_factor,
        }
    }

    /// Narrations scored per sample.
    pub fn narrations_per_sample(&self) -> usize {
        if self.loss.uses_bag() {
            self.bag_size
        } else {
            1
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.batch_size < 2 {
            return bad(format!("batch_size {} must be at least 2", self.batch_size));
        }
        if self.bag_size == 0 || self.bag_size.is_multiple_of(2) {
            return bad(format!("bag_size {} must be odd", self.bag_size));
        }
        self.encoder.validate()?;
        if !(self.base_lr >= 0.0 && self.base_lr.is_finite()) {
            return bad(format!("base_lr {} must be finite and >= 0", self.base_lr));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) {
            return bad("Adam betas must lie in [0, 1)".into());
        }
        if self.eps.is_nan() || self.eps <= 0.0 {
            return bad("eps must be positive".into());
        }
        if self.log_every == 0 {
            return bad("log_every must be at least 1".into());
        }
        if self.total_steps > 0 {
            self.schedule().validate(self.total_steps)?;
        }
        Ok(())
    }

    pub fn check_corpus(&self, corpus: &Corpus) -> Result<()> {
        let g = &corpus.config;
        if g.clip_dim != self.encoder.clip_dim {
            return Err(Error::InvalidConfig(format!(
                "corpus clips have {} values, encoder expects {}",
                g.clip_dim, self.encoder.clip_dim
            )));
        }
        if g.vocab_size > self.encoder.vocab {
            return Err(Error::InvalidConfig(format!(
                "corpus vocabulary {} exceeds encoder vocabulary {}",
                g.vocab_size, self.encoder.vocab
            )));
        }
        let shortest = corpus.train_streams().iter().map(|s| s.len()).min().unwrap_or(0);
        if (self.loss.uses_bag() || self.loss == LossKind::CatNce) && self.bag_size > shortest {
            return Err(Error::InvalidConfig(format!(
                "bag_size {} exceeds shortest training stream ({shortest})",
                self.bag_size
            )));
        }
        let total: usize = corpus.train_streams().iter().map(|s| s.len()).sum();
        if self.batch_size > total {
            return Err(Error::InvalidConfig(format!(
                "batch_size {} exceeds {total} training segments",
                self.batch_size
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Schedule {
    pub base_lr: f64,
    pub warmup_steps: u64,
    pub decay_steps: [u64; 2],
    pub decay_factor: f64,
}

impl Schedule {
    pub fn validate(&self, total_steps: u64) -> Result<()> {
        let [d0, d1] = self.decay_steps;
        if !(self.warmup_steps < d0 && d0 < d1 && d1 <= total_steps) {
            return Err(Error::InvalidConfig(format!(
                "schedule needs warmup {} < decay {d0} < decay {d1} <= total {total_steps}",
                self.warmup_steps
            )));
        }
        Ok(())
    }

    /// `base_lr · min(1, t / warmup)`, times `decay_factor` per decay step `<= t`.
    pub fn lr_at(&self, t: u64) -> f64 {
        let ramp = if self.warmup_steps == 0 {
            1.0
        } else {
            (t as f64 / self.warmup_steps as f64).min(1.0)
        };
        let drops = self.decay_steps.iter().filter(|&&d| d <= t).count() as i32;
        self.base_lr * ramp * self.decay_factor.powi(drops)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub t: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub m: Vec<Matrix>,
    pub v: Vec<Matrix>,
}

impl AdamState {
    pub fn new(params: &[&Matrix], beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = || params.iter().map(|p| Matrix::zeros(p.rows(), p.cols())).collect();
        Self {
            t: 0,
            beta1,
            beta2,
            eps,
            m: zeros(),
            v: zeros(),
        }
    }
}

/// One bias-corrected Adam update. A non-finite gradient aborts before any
/// parameter changes.
pub fn adam_step(
    params: &mut [&mut Matrix],
    grads: &[&Matrix],
    names: &[&str],
    state: &mut AdamState,
    lr: f64,
) -> Result<()> {
    if params.len() != grads.len() || params.len() != state.m.len() {
        return Err(Error::InvalidArgument(format!(
            "{} parameters, {} gradients, {} moment slots",
            params.len(),
            grads.len(),
            state.m.len()
        )));
    }
    for (i, (p, g)) in params.iter().zip(grads).enumerate() {
        if p.shape() != g.shape() || p.shape() != state.m[i].shape() {
            return Err(Error::InvalidArgument(format!(
                "shape mismatch for {}",
                names.get(i).copied().unwrap_or("?")
            )));
        }
        if !g.is_finite() {
            return Err(Error::NonFinite {
                step: state.t,
                what: format!("gradient of {}", names.get(i).copied().unwrap_or("?")),
            });
        }
    }
    state.t += 1;
    let (b1, b2) = (state.beta1, state.beta2);
    let c1 = 1.0 - b1.powi(state.t as i32);
    let c2 = 1.0 - b2.powi(state.t as i32);
    for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((w, &gi), mi), vi) in p.data_mut().iter_mut().zip(g.data()).zip(m).zip(v) {
            *mi = b1 * *mi + (1.0 - b1) * gi;
            *vi = b2 * *vi + (1.0 - b2) * gi * gi;
            let m_hat = *mi / c1;
            let v_hat = *vi / c2;
            *w -= lr * m_hat / (v_hat.sqrt() + state.eps);
        }
    }
    Ok(())
}

/// Inputs of one optimization step.
#[derive(Debug, Clone)]
pub struct TrainBatch {
    /// `B × clip_dim`.
    pub clips: Matrix,
    /// `narrations_per_sample` consecutive narrations per sample.
    pub narrations: Vec<Narration>,
    pub per_sample: usize,
    /// Position of each sample's own narration within its group.
    pub anchor_pos: Vec<usize>,
}

impl TrainBatch {
    pub fn len(&self) -> usize {
        self.clips.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.clips.rows() == 0
    }
}

/// Samples anchors from the training streams and assembles candidates for `cfg.loss`.
pub fn sample_batch(cfg: &TrainConfig, corpus: &Corpus, rng: &mut Rng) -> Result<TrainBatch> {
    let streams = corpus.train_streams();
    let anchors = sample_anchors(streams, cfg.batch_size, rng)?;
    let mut clips = Vec::with_capacity(anchors.len());
    let mut narrations = Vec::new();
    let mut anchor_pos = Vec::with_capacity(anchors.len());
    for a in &anchors {
        let stream = &streams[a.stream];
        clips.push(stream.segments[a.segment].clip.0.clone());
        if cfg.loss.uses_bag() {
            let bag = build_positive_bag(stream, a.stream, a.segment, cfg.bag_size)?;
            narrations.extend(bag.candidates.iter().map(|c| stream.segments[c.segment].narration.clone()));
            anchor_pos.push(bag.anchor_pos);
        } else if cfg.loss == LossKind::CatNce {
            let bag = build_positive_bag(stream, a.stream, a.segment, cfg.bag_size)?;
            narrations.push(concat_candidates(stream, &bag, cfg.encoder.max_words));
            anchor_pos.push(0);
        } else {
            narrations.push(stream.segments[a.segment].narration.clone());
            anchor_pos.push(0);
        }
    }
    Ok(TrainBatch {
        clips: Matrix::from_rows(&clips)?,
        narrations,
        per_sample: cfg.narrations_per_sample(),
        anchor_pos,
    })
}

/// Minimized batch loss and its gradient with respect to every trainable
/// tensor. The returned gradient has the same layout as `params`; its word
/// table stays zero.
pub fn batch_loss(
    params: &EncoderParams,
    batch: &TrainBatch,
    loss: LossKind,
    mode: NegativeMode,
    margin: f64,
) -> Result<(f64, EncoderParams)> {
    let b = batch.len();
    let k = batch.per_sample;
    if batch.narrations.len() != b * k || batch.anchor_pos.len() != b {
        return Err(Error::InvalidArgument("batch narration layout".into()));
    }
    if loss.needs_attention() && !params.has_heads() {
        return Err(Error::MissingHead);
    }
    let vf = params.video.forward(&batch.clips)?;
    let refs: Vec<&Narration> = batch.narrations.iter().collect();
    let tf = params.text.forward(&refs)?;

    let anchor_rows: Vec<usize> = (0..b).map(|i| i * k + batch.anchor_pos[i]).collect();
    let anchors = tf.embeddings.select_rows(&anchor_rows);
    let pair = score_matrix(&vf.embeddings, &anchors)?;

    let group_scores = |f: &Matrix, g: &Matrix| {
        let mut m = Matrix::zeros(b, k);
        for i in 0..b {
            for c in 0..k {
                m.set(i, c, dot(f.row(i), g.row(i * k + c)));
            }
        }
        m
    };
    let bag = loss.uses_bag().then(|| group_scores(&vf.embeddings, &tf.embeddings));
    let attn = match (loss.needs_attention(), &vf.attention, &tf.attention) {
        (true, Some(fa), Some(ga)) => Some(group_scores(fa, ga)),
        _ => None,
    };
    let scores = BatchScores {
        pair: pair.value.clone(),
        bag,
        attn,
    };
    let grad = score_batch_objective(loss, &scores, mode, margin)?;

    let (mut d_f, d_anchor) = pair.grad_fn.backward(&grad.d_pair);
    let mut d_g = Matrix::zeros(tf.embeddings.rows(), tf.embeddings.cols());
    for (i, &r) in anchor_rows.iter().enumerate() {
        for (o, v) in d_g.row_mut(r).iter_mut().zip(d_anchor.row(i)) {
            *o += v;
        }
    }
    // Scatters per-candidate score gradients onto both sides' embeddings.
    let scatter = |d: &Matrix, f: &Matrix, g: &Matrix, d_f: &mut Matrix, d_g: &mut Matrix| {
        for i in 0..b {
            for c in 0..k {
                let w = d.get(i, c);
                if w == 0.0 {
                    continue;
                }
                let row = i * k + c;
                for (o, v) in d_f.row_mut(i).iter_mut().zip(g.row(row)) {
                    *o += w * v;
                }
                for (o, v) in d_g.row_mut(row).iter_mut().zip(f.row(i)) {
                    *o += w * v;
                }
            }
        }
    };
    if let Some(d_bag) = &grad.d_bag {
        scatter(d_bag, &vf.embeddings, &tf.embeddings, &mut d_f, &mut d_g);
    }
    let (d_fa, d_ga) = match (&grad.d_attn, &vf.attention, &tf.attention) {
        (Some(d), Some(fa), Some(ga)) => {
            let mut d_fa = Matrix::zeros(fa.rows(), fa.cols());
            let mut d_ga = Matrix::zeros(ga.rows(), ga.cols());
            scatter(d, fa, ga, &mut d_fa, &mut d_ga);
            (Some(d_fa), Some(d_ga))
        }
        _ => (None, None),
    };

    let mut grads = params.zeros_like();
    params.video.backward(&vf, &d_f, d_fa.as_ref(), &mut grads.video);
    params.text.backward(&tf, &d_g, d_ga.as_ref(), &mut grads.text);
    Ok((grad.loss, grads))
}

/// One line of the metrics stream.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub step: u64,
    pub lr: f64,
    /// Mean minimized loss over the steps since the previous record.
    pub loss: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub wall_time: Option<f64>,
}

pub struct Trainer<'a> {
    cfg: TrainConfig,
    corpus: &'a Corpus,
    params: EncoderParams,
    adam: AdamState,
    rng: Rng,
    step: u64,
    window_loss: f64,
    window_len: u64,
    started: Instant,
}

impl<'a> Trainer<'a> {
    pub fn new(cfg: TrainConfig, corpus: &'a Corpus) -> Result<Self> {
        cfg.validate()?;
        cfg.check_corpus(corpus)?;
        let mut init = Rng::new(derive_seed(cfg.seed, INIT_TAG));
        let params = EncoderParams::init(&cfg.encoder, cfg.loss.needs_attention(), &mut init)?;
        let adam = AdamState::new(
            &params.trainable().into_iter().map(|(_, m)| m).collect::<Vec<_>>(),
            cfg.beta1,
            cfg.beta2,
            cfg.eps,
        );
        Ok(Self {
            rng: Rng::new(derive_seed(cfg.seed, BATCH_TAG)),
            cfg,
            corpus,
            params,
            adam,
            step: 0,
            window_loss: 0.0,
            window_len: 0,
            started: Instant::now(),
        })
    }

    pub fn from_checkpoint(ckpt: Checkpoint, corpus: &'a Corpus) -> Result<Self> {
        ckpt.config.validate()?;
        ckpt.config.check_corpus(corpus)?;
        Ok(Self {
            rng: Rng::from_state(ckpt.rng),
            cfg: ckpt.config,
            corpus,
            params: ckpt.params,
            adam: ckpt.adam,
            step: ckpt.step,
            window_loss: ckpt.metrics_window.0,
            window_len: ckpt.metrics_window.1,
            started: Instant::now(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn params(&self) -> &EncoderParams {
        &self.params
    }

    pub fn step_count(&self) -> u64 {
        self.step
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.cfg.total_steps
    }

    /// Runs one update; returns the batch loss.
    pub fn step(&mut self) -> Result<f64> {
        let batch = sample_batch(&self.cfg, self.corpus, &mut self.rng)?;
        let (loss, grads) = batch_loss(
            &self.params,
            &batch,
            self.cfg.loss,
            self.cfg.negative_mode,
            self.cfg.margin,
        )?;
        if !loss.is_finite() {
            return Err(Error::NonFinite {
                step: self.step,
                what: "loss".into(),
            });
        }
        let lr = self.cfg.schedule().lr_at(self.step);
        let named = grads.trainable();
        let names: Vec<&str> = named.iter().map(|(n, _)| *n).collect();
        let g: Vec<&Matrix> = named.iter().map(|(_, m)| *m).collect();
        let mut p = self.params.trainable_mut();
        adam_step(&mut p, &g, &names, &mut self.adam, lr).map_err(|e| match e {
            Error::NonFinite { what, .. } => Error::NonFinite { step: self.step, what },
            other => other,
        })?;
        self.step += 1;
        self.window_loss += loss;
        self.window_len += 1;
        Ok(loss)
    }

    /// Steps until `until` (capped at `total_steps`), handing each metrics record to `sink`.
    pub fn run_until(
        &mut self,
        until: u64,
        sink: &mut dyn FnMut(&MetricsRecord) -> Result<()>,
    ) -> Result<()> {
        let until = until.min(self.cfg.total_steps);
        while self.step < until {
            self.step()?;
            if self.step.is_multiple_of(self.cfg.log_every) || self.step == self.cfg.total_steps {
                let rec = MetricsRecord {
                    step: self.step,
                    lr: self.cfg.schedule().lr_at(self.step - 1),
                    loss: self.window_loss / self.window_len as f64,
                    wall_time: self
                        .cfg
                        .record_wall_time
                        .then(|| self.started.elapsed().as_secs_f64()),
                };
                self.window_loss = 0.0;
                self.window_len = 0;
                sink(&rec)?;
            }
        }
        Ok(())
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config: self.cfg.clone(),
            params: self.params.clone(),
            adam: self.adam.clone(),
            rng: self.rng.state(),
            step: self.step,
            metrics_window: (self.window_loss, self.window_len),
        }
    }
}

/// Full run from initialization; returns the final checkpoint and every metrics record.
pub fn train(cfg: &TrainConfig, corpus: &Corpus) -> Result<(Checkpoint, Vec<MetricsRecord>)> {
    let mut t = Trainer::new(cfg.clone(), corpus)?;
    let mut records = Vec::new();
    t.run_until(cfg.total_steps, &mut |r| {
        records.push(r.clone());
        Ok(())
    })?;
    Ok((t.checkpoint(), records))
}
