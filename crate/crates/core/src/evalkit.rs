//! Retrieval, step localization, a frozen-feature linear probe, and the
//! ablation grid that runs train + evaluate per configuration cell.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{write_atomic, Corpus, Stream};
use crate::encoders::{EncoderParams, Narration};
use crate::error::{shape_err, Error, Result};
use crate::losses::LossKind;
use crate::numkernel::{dot, Matrix};
use crate::rng::{derive_seed, Rng};
use crate::sampling::{NegativeMode, SegmentRef};
use crate::trainer::{train, TrainConfig};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetrievalResult {
    pub recall_at_k: BTreeMap<usize, f64>,
    pub median_rank: f64,
    pub queries: usize,
}

/// `1 + #{j : S[q][j] > S[q][gt]}`: ties with the correct item never count
/// against it.
pub fn rank_of(row: &[f64], gt: usize) -> usize {
    let target = row[gt];
    1 + row.iter().filter(|&&s| s > target).count()
}

pub fn median(values: &mut [f64]) -> Option<f64> {
    if values.is_empty() {
        return None;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    Some(if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    })
}

pub fn summarize_ranks(ranks: &[usize], ks: &[usize]) -> Result<RetrievalResult> {
    if ranks.is_empty() {
        return Err(Error::Empty("retrieval ranks"));
    }
    let n = ranks.len() as f64;
    let recall_at_k = ks
        .iter()
        .map(|&k| (k, ranks.iter().filter(|&&r| r <= k).count() as f64 / n))
        .collect();
    let mut r: Vec<f64> = ranks.iter().map(|&r| r as f64).collect();
    Ok(RetrievalResult {
        recall_at_k,
        median_rank: median(&mut r).expect("nonempty"),
        queries: ranks.len(),
    })
}

/// Recall at each `k` and median rank for queries (rows of `scores`) whose
/// correct item is `gt[q]`.
pub fn retrieval_eval(scores: &Matrix, gt: &[usize], ks: &[usize]) -> Result<RetrievalResult> {
    if gt.len() != scores.rows() {
        return Err(shape_err(
            "retrieval_eval",
            format!("{} ground-truth entries for {} queries", gt.len(), scores.rows()),
        ));
    }
    if let Some((q, &g)) = gt.iter().enumerate().find(|(_, &g)| g >= scores.cols()) {
        return Err(Error::InvalidArgument(format!(
            "query {q}: ground truth {g} outside {} items",
            scores.cols()
        )));
    }
    let ranks: Vec<usize> = gt.iter().enumerate().map(|(q, &g)| rank_of(scores.row(q), g)).collect();
    summarize_ranks(&ranks, ks)
}

/// Scores narrations (of `queries`) against clips (of `items`).
pub trait PairScorer {
    fn scores(&self, streams: &[Stream], queries: &[SegmentRef], items: &[SegmentRef]) -> Result<Matrix>;
}

impl PairScorer for EncoderParams {
    fn scores(&self, streams: &[Stream], queries: &[SegmentRef], items: &[SegmentRef]) -> Result<Matrix> {
        let narrations: Vec<&Narration> = queries
            .iter()
            .map(|q| &streams[q.stream].segments[q.segment].narration)
            .collect();
        let clips: Vec<Vec<f64>> = items
            .iter()
            .map(|i| streams[i.stream].segments[i.segment].clip.0.clone())
            .collect();
        let g = self.text.forward(&narrations)?.embeddings;
        let f = self.video.forward(&Matrix::from_rows(&clips)?)?.embeddings;
        g.dot_nt(&f)
    }
}

/// Scores 1 for the ground-truth pair and 0 otherwise.
pub struct OracleScorer;

impl PairScorer for OracleScorer {
    fn scores(&self, streams: &[Stream], queries: &[SegmentRef], items: &[SegmentRef]) -> Result<Matrix> {
        let mut m = Matrix::zeros(queries.len(), items.len());
        for (r, q) in queries.iter().enumerate() {
            let src = streams[q.stream].segments[q.segment].source_index;
            for (c, it) in items.iter().enumerate() {
                if it.stream == q.stream && src == Some(it.segment) {
                    m.set(r, c, 1.0);
                }
            }
        }
        Ok(m)
    }
}

/// Baseline with an independent unit-normal embedding per narration and per
/// clip, derived from the seed and the segment's position.
pub struct RandomScorer {
    pub seed: u64,
    pub dim: usize,
}

impl RandomScorer {
    fn embedding(&self, r: &SegmentRef, side: u64) -> Vec<f64> {
        let s = derive_seed(derive_seed(self.seed, r.stream as u64 + 1), 2 * r.segment as u64 + side);
        let mut rng = Rng::new(s);
        (0..self.dim).map(|_| rng.normal()).collect()
    }
}

impl PairScorer for RandomScorer {
    fn scores(&self, _streams: &[Stream], queries: &[SegmentRef], items: &[SegmentRef]) -> Result<Matrix> {
        let q: Vec<Vec<f64>> = queries.iter().map(|r| self.embedding(r, 0)).collect();
        let it: Vec<Vec<f64>> = items.iter().map(|r| self.embedding(r, 1)).collect();
        let mut m = Matrix::zeros(q.len(), it.len());
        for (a, qa) in q.iter().enumerate() {
            for (b, ib) in it.iter().enumerate() {
                m.set(a, b, dot(qa, ib));
            }
        }
        Ok(m)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LocalizationResult {
    /// Per-stream recall averaged over streams.
    pub average_recall: f64,
    pub streams: usize,
    /// Relevant narrations scored.
    pub queries: usize,
}

/// For every relevant narration, predicts the stream segment with the
/// highest score (lowest index on ties) and checks it against the segment the
/// narration describes. Streams without relevant narrations are skipped.
pub fn localize_steps(streams: &[Stream], scorer: &dyn PairScorer) -> Result<LocalizationResult> {
    let mut total = 0.0;
    let mut counted = 0usize;
    let mut scored = 0usize;
    for (s, stream) in streams.iter().enumerate() {
        let queries: Vec<SegmentRef> = stream
            .segments
            .iter()
            .enumerate()
            .filter(|(_, seg)| seg.source_index.is_some())
            .map(|(j, _)| SegmentRef { stream: s, segment: j })
            .collect();
        if queries.is_empty() {
            continue;
        }
        let items: Vec<SegmentRef> = (0..stream.len()).map(|j| SegmentRef { stream: s, segment: j }).collect();
        let scores = scorer.scores(streams, &queries, &items)?;
        let mut hits = 0usize;
        for (r, q) in queries.iter().enumerate() {
            let row = scores.row(r);
            let mut best = 0;
            for (j, &v) in row.iter().enumerate().skip(1) {
                if v > row[best] {
                    best = j;
                }
            }
            if stream.segments[q.segment].source_index == Some(best) {
                hits += 1;
            }
        }
        total += hits as f64 / queries.len() as f64;
        counted += 1;
        scored += queries.len();
    }
    Ok(LocalizationResult {
        average_recall: if counted == 0 { 0.0 } else { total / counted as f64 },
        streams: counted,
        queries: scored,
    })
}

/// Narration-to-clip retrieval over the relevant narrations of `streams`,
/// taken in order and split into pools of `pool_size` queries. Each pool's
/// gallery is the set of distinct clips its queries describe. A trailing pool
/// smaller than `pool_size` is dropped unless it is the only one.
pub fn pooled_retrieval(
    streams: &[Stream],
    scorer: &dyn PairScorer,
    pool_size: usize,
    ks: &[usize],
) -> Result<RetrievalResult> {
    if pool_size == 0 {
        return Err(Error::InvalidArgument("retrieval pool size must be positive".into()));
    }
    let pairs: Vec<(SegmentRef, SegmentRef)> = streams
        .iter()
        .enumerate()
        .flat_map(|(s, st)| {
            st.segments.iter().enumerate().filter_map(move |(j, seg)| {
                seg.source_index.map(|src| {
                    (SegmentRef { stream: s, segment: j }, SegmentRef { stream: s, segment: src })
                })
            })
        })
        .collect();
    let mut chunks: Vec<&[(SegmentRef, SegmentRef)]> = pairs.chunks(pool_size).collect();
    if chunks.len() > 1 && chunks.last().is_some_and(|c| c.len() < pool_size) {
        chunks.pop();
    }
    let mut ranks = Vec::with_capacity(pairs.len());
    for chunk in chunks {
        let queries: Vec<SegmentRef> = chunk.iter().map(|p| p.0).collect();
        let items: Vec<SegmentRef> = chunk
            .iter()
            .map(|p| p.1)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let gt: Vec<usize> = chunk
            .iter()
            .map(|p| items.binary_search(&p.1).expect("item listed"))
            .collect();
        let scores = scorer.scores(streams, &queries, &items)?;
        ranks.extend(gt.iter().enumerate().map(|(q, &g)| rank_of(scores.row(q), g)));
    }
    summarize_ranks(&ranks, ks)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ProbeConfig {
    /// L2 penalty on the weights.
    pub lambda: f64,
    /// Stop when the full gradient norm falls below this.
    pub tolerance: f64,
    pub max_iters: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            lambda: 1e-4,
            tolerance: 1e-6,
            max_iters: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeResult {
    pub accuracy: f64,
    /// Held-out accuracy per class present in the test split.
    pub per_class: BTreeMap<usize, f64>,
    pub iterations: usize,
    pub converged: bool,
}

struct Softmax {
    classes: usize,
}

impl Softmax {
    /// Objective `mean CE + λ/2 ‖W‖²` with gradient. `x` carries a trailing
    /// column of ones for the (unpenalized) bias.
    fn eval(&self, x: &Matrix, y: &[usize], w: &Matrix, lambda: f64) -> (f64, Matrix) {
        let logits = x.dot(w).expect("probe shapes");
        let n = x.rows() as f64;
        let mut d_logits = Matrix::zeros(logits.rows(), self.classes);
        let mut loss = 0.0;
        for i in 0..logits.rows() {
            let row = logits.row(i);
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            loss += m + z.ln() - row[y[i]];
            for (c, (&v, d)) in row.iter().zip(d_logits.row_mut(i)).enumerate() {
                let t = if c == y[i] { 1.0 } else { 0.0 };
                *d = ((v - m).exp() / z - t) / n;
            }
        }
        let mut grad = x.dot_tn(&d_logits).expect("probe shapes");
        let bias_row = w.rows() - 1;
        let mut penalty = 0.0;
        for r in 0..bias_row {
            for c in 0..self.classes {
                let wv = w.get(r, c);
                penalty += wv * wv;
                grad.set(r, c, grad.get(r, c) + lambda * wv);
            }
        }
        (loss / n + 0.5 * lambda * penalty, grad)
    }
}

fn standardized_with_bias(features: &Matrix, rows: &[usize], mean: &[f64], sd: &[f64]) -> Matrix {
    let d = features.cols();
    let mut out = Matrix::zeros(rows.len(), d + 1);
    for (o, &r) in rows.iter().enumerate() {
        let src = features.row(r);
        let dst = out.row_mut(o);
        for c in 0..d {
            dst[c] = (src[c] - mean[c]) / sd[c];
        }
        dst[d] = 1.0;
    }
    out
}

/// Multinomial logistic regression on frozen features, fit by full-batch
/// gradient descent with Armijo backtracking. Features are standardized with
/// training-split statistics.
pub fn linear_probe(
    features: &Matrix,
    labels: &[usize],
    train_idx: &[usize],
    test_idx: &[usize],
    cfg: &ProbeConfig,
) -> Result<ProbeResult> {
    if labels.len() != features.rows() {
        return Err(shape_err("linear_probe", "one label per feature row required"));
    }
    if train_idx.is_empty() || test_idx.is_empty() {
        return Err(Error::Empty("linear_probe split"));
    }
    let train_set: BTreeSet<usize> = train_idx.iter().copied().collect();
    if test_idx.iter().any(|i| train_set.contains(i)) {
        return Err(Error::InvalidArgument("train and test splits overlap".into()));
    }
    if train_idx.iter().chain(test_idx).any(|&i| i >= features.rows()) {
        return Err(Error::InvalidArgument("split index outside features".into()));
    }
    let train_classes: BTreeSet<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    if train_classes.len() < 2 {
        return Err(Error::InvalidArgument("training split has a single class".into()));
    }
    let classes = labels.iter().max().map_or(0, |m| m + 1);
    let d = features.cols();
    let n = train_idx.len() as f64;
    let mut mean = vec![0.0; d];
    for &i in train_idx {
        for (m, v) in mean.iter_mut().zip(features.row(i)) {
            *m += v / n;
        }
    }
    let mut sd = vec![0.0; d];
    for &i in train_idx {
        for ((s, v), m) in sd.iter_mut().zip(features.row(i)).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in &mut sd {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    let x = standardized_with_bias(features, train_idx, &mean, &sd);
    let y: Vec<usize> = train_idx.iter().map(|&i| labels[i]).collect();
    let model = Softmax { classes };

    let mut w = Matrix::zeros(d + 1, classes);
    let (mut loss, mut grad) = model.eval(&x, &y, &w, cfg.lambda);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut converged = grad.l2_norm() <= cfg.tolerance;
    while !converged && iterations < cfg.max_iters {
        let g2 = grad.l2_norm().powi(2);
        step *= 2.0;
        loop {
            let mut trial = w.clone();
            for (t, g) in trial.data_mut().iter_mut().zip(grad.data()) {
                *t -= step * g;
            }
            let (l, gr) = model.eval(&x, &y, &trial, cfg.lambda);
            if l <= loss - 0.5 * step * g2 || step < 1e-12 {
                w = trial;
                loss = l;
                grad = gr;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        converged = grad.l2_norm() <= cfg.tolerance;
    }

    let xt = standardized_with_bias(features, test_idx, &mean, &sd);
    let logits = xt.dot(&w)?;
    let mut per: BTreeMap<usize, (usize, usize)> = BTreeMap::new();
    let mut correct = 0usize;
    for (r, &i) in test_idx.iter().enumerate() {
        let row = logits.row(r);
        let mut best = 0;
        for (c, &v) in row.iter().enumerate().skip(1) {
            if v > row[best] {
                best = c;
            }
        }
        let e = per.entry(labels[i]).or_insert((0, 0));
        e.1 += 1;
        if best == labels[i] {
            e.0 += 1;
            correct += 1;
        }
    }
    Ok(ProbeResult {
        accuracy: correct as f64 / test_idx.len() as f64,
        per_class: per
            .into_iter()
            .map(|(c, (hit, tot))| (c, hit as f64 / tot as f64))
            .collect(),
        iterations,
        converged,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalOptions {
    pub ks: Vec<usize>,
    /// Queries per retrieval pool.
    pub retrieval_pool: usize,
    pub probe: ProbeConfig,
    pub run_probe: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            ks: vec![1, 5, 10],
            retrieval_pool: 200,
            probe: ProbeConfig::default(),
            run_probe: true,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub retrieval: RetrievalResult,
    pub localization: LocalizationResult,
    pub probe: Option<ProbeResult>,
}

/// Probe on clip trunk features of the held-out streams: even-positioned
/// streams train the classifier, odd-positioned ones test it.
pub fn probe_heldout(params: &EncoderParams, corpus: &Corpus, cfg: &ProbeConfig) -> Result<ProbeResult> {
    let streams = corpus.heldout_streams();
    let mut rows = Vec::new();
    let mut labels = Vec::new();
    let mut train_idx = Vec::new();
    let mut test_idx = Vec::new();
    for (s, st) in streams.iter().enumerate() {
        for seg in &st.segments {
            let i = rows.len();
            rows.push(seg.clip.0.clone());
            labels.push(seg.topic_id as usize);
            if s % 2 == 0 {
                train_idx.push(i);
            } else {
                test_idx.push(i);
            }
        }
    }
    let features = params.video.trunk_features(&Matrix::from_rows(&rows)?)?;
    linear_probe(&features, &labels, &train_idx, &test_idx, cfg)
}

/// All held-out evaluations for one parameter set.
pub fn evaluate(params: &EncoderParams, corpus: &Corpus, opts: &EvalOptions) -> Result<EvalReport> {
    evaluate_with(params, params, corpus, opts)
}

/// As [`evaluate`], with retrieval and localization scored by `scorer`.
pub fn evaluate_with(
    scorer: &dyn PairScorer,
    params: &EncoderParams,
    corpus: &Corpus,
    opts: &EvalOptions,
) -> Result<EvalReport> {
    let held = corpus.heldout_streams();
    let mut ks = opts.ks.clone();
    ks.extend([1, 5, 10]);
    ks.sort_unstable();
    ks.dedup();
    Ok(EvalReport {
        retrieval: pooled_retrieval(held, scorer, opts.retrieval_pool, &ks)?,
        localization: localize_steps(held, scorer)?,
        probe: if opts.run_probe {
            Some(probe_heldout(params, corpus, &opts.probe)?)
        } else {
            None
        },
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationAxes {
    pub losses: Vec<LossKind>,
    pub bag_sizes: Vec<usize>,
    pub batch_sizes: Vec<usize>,
    pub negative_modes: Vec<NegativeMode>,
}

impl Default for AblationAxes {
    fn default() -> Self {
        let base = TrainConfig::default();
        Self {
            losses: vec![base.loss],
            bag_sizes: vec![base.bag_size],
            batch_sizes: vec![base.batch_size],
            negative_modes: vec![base.negative_mode],
        }
    }
}

/// One ablation cell: a full training configuration minus the seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationCell {
    pub id: usize,
    pub loss: LossKind,
    pub bag_size: usize,
    pub batch_size: usize,
    pub negative_mode: NegativeMode,
}

impl AblationAxes {
    /// Cartesian product in loss, bag size, batch size, negative mode order.
    pub fn cells(&self) -> Result<Vec<AblationCell>> {
        if self.losses.is_empty()
            || self.bag_sizes.is_empty()
            || self.batch_sizes.is_empty()
            || self.negative_modes.is_empty()
        {
            return Err(Error::InvalidConfig("every ablation axis needs a value".into()));
        }
        let mut out = Vec::new();
        for &loss in &self.losses {
            for &bag_size in &self.bag_sizes {
                for &batch_size in &self.batch_sizes {
                    for &negative_mode in &self.negative_modes {
                        out.push(AblationCell {
                            id: out.len(),
                            loss,
                            bag_size,
                            batch_size,
                            negative_mode,
                        });
                    }
                }
            }
        }
        Ok(out)
    }
}

/// One CSV row. `seed` is the training seed, or `median` for a summary row.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub cell: usize,
    pub loss: LossKind,
    pub bag_size: usize,
    pub batch_size: usize,
    pub negative_mode: NegativeMode,
    pub seed: String,
    pub status: String,
    pub final_loss: Option<f64>,
    pub r1: Option<f64>,
    pub r5: Option<f64>,
    pub r10: Option<f64>,
    pub medr: Option<f64>,
    pub loc_recall: Option<f64>,
    pub probe_acc: Option<f64>,
}

/// Column order of the ablation CSV.
pub const ABLATION_COLUMNS: [&str; 14] = [
    "cell",
    "loss",
    "bag_size",
    "batch_size",
    "negative_mode",
    "seed",
    "status",
    "final_loss",
    "r1",
    "r5",
    "r10",
    "medr",
    "loc_recall",
    "probe_acc",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationTable {
    pub cells: Vec<AblationCell>,
    pub seeds: Vec<u64>,
    /// Seed rows for each cell in seed order, followed by that cell's median row.
    pub rows: Vec<AblationRow>,
}

impl AblationTable {
    pub fn median_row(&self, cell: usize) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.cell == cell && r.seed == "median")
    }

    pub fn seed_rows(&self, cell: usize) -> impl Iterator<Item = &AblationRow> {
        self.rows.iter().filter(move |r| r.cell == cell && r.seed != "median")
    }

    /// CSV with a leading `# ` comment line holding `echo`.
    pub fn to_csv(&self, echo: &str) -> Result<Vec<u8>> {
        let mut buf = format!("# {}\n", echo.replace('\n', " ")).into_bytes();
        {
            let mut w = csv::Writer::from_writer(&mut buf);
            for r in &self.rows {
                w.serialize(r)?;
            }
            w.flush()?;
        }
        Ok(buf)
    }

    pub fn write_csv(&self, path: &Path, echo: &str) -> Result<()> {
        write_atomic(path, &self.to_csv(echo)?)
    }
}

fn row_for(cell: &AblationCell, seed: String) -> AblationRow {
    AblationRow {
        cell: cell.id,
        loss: cell.loss,
        bag_size: cell.bag_size,
        batch_size: cell.batch_size,
        negative_mode: cell.negative_mode,
        seed,
        status: "ok".into(),
        final_loss: None,
        r1: None,
        r5: None,
        r10: None,
        medr: None,
        loc_recall: None,
        probe_acc: None,
    }
}

/// Config of one (cell, seed) run.
pub fn cell_config(base: &TrainConfig, cell: &AblationCell, seed: u64) -> TrainConfig {
    TrainConfig {
        loss: cell.loss,
        bag_size: cell.bag_size,
        batch_size: cell.batch_size,
        negative_mode: cell.negative_mode,
        seed,
        ..base.clone()
    }
}

/// Trains and evaluates one run.
pub fn run_cell(cfg: &TrainConfig, corpus: &Corpus, opts: &EvalOptions) -> Result<(f64, EvalReport)> {
    let (ckpt, records) = train(cfg, corpus)?;
    let report = evaluate(&ckpt.params, corpus, opts)?;
    let final_loss = records.last().map_or(f64::NAN, |r| r.loss);
    Ok((final_loss, report))
}

/// Trains one model per cell and seed, evaluates each on the held-out
/// streams, and appends per-cell medians over the seeds that succeeded.
/// A failing run is recorded with its error and the grid continues.
pub fn ablation_grid(
    axes: &AblationAxes,
    base: &TrainConfig,
    corpus: &Corpus,
    seeds: &[u64],
    opts: &EvalOptions,
) -> Result<AblationTable> {
    if seeds.is_empty() {
        return Err(Error::InvalidConfig("ablation needs at least one seed".into()));
    }
    let cells = axes.cells()?;
    let mut rows = Vec::new();
    for cell in &cells {
        let mut done = Vec::new();
        for &seed in seeds {
            let mut row = row_for(cell, seed.to_string());
            match run_cell(&cell_config(base, cell, seed), corpus, opts) {
                Ok((final_loss, rep)) => {
                    row.final_loss = Some(final_loss);
                    row.r1 = rep.retrieval.recall_at_k.get(&1).copied();
                    row.r5 = rep.retrieval.recall_at_k.get(&5).copied();
                    row.r10 = rep.retrieval.recall_at_k.get(&10).copied();
                    row.medr = Some(rep.retrieval.median_rank);
                    row.loc_recall = Some(rep.localization.average_recall);
                    row.probe_acc = rep.probe.map(|p| p.accuracy);
                    done.push(row.clone());
                }
                Err(e) => row.status = format!("failed: {e}"),
            }
            rows.push(row);
        }
        let mut med = row_for(cell, "median".into());
        if done.is_empty() {
            med.status = "failed: no successful seeds".into();
        }
        let pick = |f: fn(&AblationRow) -> Option<f64>| {
            let mut v: Vec<f64> = done.iter().filter_map(f).collect();
            median(&mut v)
        };
        med.final_loss = pick(|r| r.final_loss);
        med.r1 = pick(|r| r.r1);
        med.r5 = pick(|r| r.r5);
        med.r10 = pick(|r| r.r10);
        med.medr = pick(|r| r.medr);
        med.loc_recall = pick(|r| r.loc_recall);
        med.probe_acc = pick(|r| r.probe_acc);
        rows.push(med);
    }
    Ok(AblationTable {
        cells,
        seeds: seeds.to_vec(),
        rows,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_scores_rank_first() {
        let s = Matrix::from_rows(&[vec![9.0, 1.0, 0.0], vec![0.5, 8.0, 1.0], vec![0.0, 2.0, 7.0]])
            .unwrap();
        let r = retrieval_eval(&s, &[0, 1, 2], &[1, 5]).unwrap();
        assert_eq!(r.recall_at_k[&1], 1.0);
        assert_eq!(r.median_rank, 1.0);
    }

    #[test]
    fn constant_scores_rank_first_under_the_tie_rule() {
        let s = Matrix::from_rows(&[vec![0.3; 4], vec![0.3; 4], vec![0.3; 4], vec![0.3; 4]]).unwrap();
        let r = retrieval_eval(&s, &[0, 1, 2, 3], &[1]).unwrap();
        assert_eq!(r.recall_at_k[&1], 1.0);
    }

    #[test]
    fn anti_diagonal_ranks() {
        let s = Matrix::from_rows(&[vec![0.0, 1.0, 5.0], vec![0.0, 5.0, 1.0], vec![5.0, 1.0, 0.0]])
            .unwrap();
        let r = retrieval_eval(&s, &[0, 1, 2], &[1, 2, 3]).unwrap();
        assert_eq!(r.recall_at_k[&1], 1.0 / 3.0);
        assert_eq!(r.recall_at_k[&3], 1.0);
        assert_eq!(r.median_rank, 3.0);
    }

    #[test]
    fn even_query_count_median_is_a_midpoint() {
        let r = summarize_ranks(&[1, 2, 4, 7], &[1]).unwrap();
        assert_eq!(r.median_rank, 3.0);
        let r = summarize_ranks(&[1, 2], &[1]).unwrap();
        assert_eq!(r.median_rank, 1.5);
    }

    #[test]
    fn retrieval_rejects_bad_ground_truth() {
        let s = Matrix::zeros(2, 2);
        assert!(retrieval_eval(&s, &[0, 2], &[1]).is_err());
        assert!(retrieval_eval(&s, &[0], &[1]).is_err());
    }

    #[test]
    fn probe_separable() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..40 {
            let c = i % 2;
            let x = if c == 0 { -2.0 } else { 2.0 };
            rows.push(vec![x + 0.01 * i as f64, 0.3 * (i % 5) as f64]);
            labels.push(c);
        }
        let f = Matrix::from_rows(&rows).unwrap();
        let train: Vec<usize> = (0..30).collect();
        let test: Vec<usize> = (30..40).collect();
        let r = linear_probe(&f, &labels, &train, &test, &ProbeConfig::default()).unwrap();
        assert_eq!(r.accuracy, 1.0);
        assert_eq!(r.per_class.len(), 2);
    }

    #[test]
    fn probe_huge_penalty_predicts_the_majority() {
        let mut rows = Vec::new();
        let mut labels = Vec::new();
        for i in 0..60 {
            let c = usize::from(i % 3 == 0);
            rows.push(vec![c as f64 * 3.0 + 0.1 * (i % 7) as f64]);
            labels.push(c);
        }
        let f = Matrix::from_rows(&rows).unwrap();
        let train: Vec<usize> = (0..45).collect();
        let test: Vec<usize> = (45..60).collect();
        let cfg = ProbeConfig { lambda: 1e6, ..ProbeConfig::default() };
        let r = linear_probe(&f, &labels, &train, &test, &cfg).unwrap();
        let majority = test.iter().filter(|&&i| labels[i] == 0).count() as f64 / test.len() as f64;
        assert!((r.accuracy - majority).abs() < 1e-12, "{} vs {majority}", r.accuracy);
    }

    #[test]
    fn probe_rejects_degenerate_splits() {
        let f = Matrix::zeros(4, 2);
        let cfg = ProbeConfig::default();
        assert!(linear_probe(&f, &[0, 0, 1, 1], &[0, 1], &[2, 3], &cfg).is_err());
        assert!(linear_probe(&f, &[0, 1, 0, 1], &[0, 1], &[1, 3], &cfg).is_err());
        assert!(linear_probe(&f, &[0, 1, 0, 1], &[0, 1], &[], &cfg).is_err());
    }

    #[test]
    fn probe_accuracy_is_weighted_per_class_mean() {
        let rows: Vec<Vec<f64>> = (0..30).map(|i| vec![(i % 3) as f64 + 0.2 * ((i * 7) % 5) as f64]).collect();
        let labels: Vec<usize> = (0..30).map(|i| (i * 7 / 3) % 3).collect();
        let f = Matrix::from_rows(&rows).unwrap();
        let train: Vec<usize> = (0..20).collect();
        let test: Vec<usize> = (20..30).collect();
        let r = linear_probe(&f, &labels, &train, &test, &ProbeConfig::default()).unwrap();
        let weighted: f64 = r
            .per_class
            .iter()
            .map(|(c, a)| a * test.iter().filter(|&&i| labels[i] == *c).count() as f64)
            .sum::<f64>()
            / test.len() as f64;
        assert!((weighted - r.accuracy).abs() < 1e-12);
    }

    #[test]
    fn cells_are_a_cartesian_product() {
        let axes = AblationAxes {
            losses: vec![LossKind::Nce, LossKind::MilNce],
            bag_sizes: vec![1, 3, 5],
            ..AblationAxes::default()
        };
        let cells = axes.cells().unwrap();
        assert_eq!(cells.len(), 6);
        assert_eq!(cells[4].loss, LossKind::MilNce);
        assert_eq!(cells[4].bag_size, 3);
        let empty = AblationAxes { losses: vec![], ..AblationAxes::default() };
        assert!(empty.cells().is_err());
    }
}
