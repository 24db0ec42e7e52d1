//! Central finite-difference checks of the full loss gradient, composed
//! through both encoders, on a deliberately small problem.

use serde::{Deserialize, Serialize};

use crate::encoders::{EncoderDims, EncoderParams, Narration};
use crate::error::Result;
use crate::losses::{LossKind, DEFAULT_MARGIN};
use crate::numkernel::Matrix;
use crate::rng::Rng;
use crate::sampling::NegativeMode;
use crate::trainer::{batch_loss, TrainBatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradcheckConfig {
    pub seed: u64,
    pub step: f64,
    pub tolerance: f64,
    pub dims: EncoderDims,
    pub batch_size: usize,
    pub bag_size: usize,
    pub negative_mode: NegativeMode,
    pub margin: f64,
    /// Test hook: perturbs one analytic gradient entry so a failing report
    /// can be produced on demand.
    #[serde(skip)]
    pub corrupt: bool,
}

impl Default for GradcheckConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            step: 1e-5,
            tolerance: 1e-6,
            dims: EncoderDims {
                clip_dim: 5,
                word_dim: 4,
                hidden: 6,
                embed_dim: 3,
                vocab: 20,
                max_words: 6,
            },
            batch_size: 3,
            bag_size: 3,
            negative_mode: NegativeMode::Joint,
            margin: DEFAULT_MARGIN,
            corrupt: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TensorCheck {
    pub loss: LossKind,
    pub tensor: String,
    pub analytic_norm: f64,
    pub rel_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GradcheckReport {
    pub seed: u64,
    pub tolerance: f64,
    pub max_rel_error: f64,
    pub passed: bool,
    pub checks: Vec<TensorCheck>,
}

/// Denominator floor. Some tensors have an exactly zero gradient (a bias that
/// shifts every attention logit of a sample equally, or a hinge that is
/// inactive everywhere); their difference quotients are pure rounding noise
/// of order `1e-16 / h`.
pub const NORM_FLOOR: f64 = 1e-3;

/// `‖a − n‖ / max(‖a‖ + ‖n‖, NORM_FLOOR)`.
pub fn relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    let diff: f64 = analytic.iter().zip(numeric).map(|(a, n)| (a - n).powi(2)).sum::<f64>().sqrt();
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / (norm(analytic) + norm(numeric)).max(NORM_FLOOR)
}

fn random_batch(kind: LossKind, cfg: &GradcheckConfig, rng: &mut Rng) -> Result<TrainBatch> {
    let d = cfg.dims;
    let b = cfg.batch_size;
    let k = if kind.uses_bag() { cfg.bag_size } else { 1 };
    let clips: Vec<f64> = (0..b * d.clip_dim).map(|_| rng.normal()).collect();
    let narrations = (0..b * k)
        .map(|_| {
            let len = 1 + rng.below_usize(d.max_words);
            Narration((0..len).map(|_| rng.below_usize(d.vocab) as u32).collect())
        })
        .collect();
    let anchor_pos = (0..b).map(|_| if k > 1 { rng.below_usize(k) } else { 0 }).collect();
    Ok(TrainBatch {
        clips: Matrix::from_vec(b, d.clip_dim, clips)?,
        narrations,
        per_sample: k,
        anchor_pos,
    })
}

fn tensor_mut(p: &mut EncoderParams, idx: usize) -> &mut Matrix {
    p.trainable_mut().into_iter().nth(idx).expect("tensor index")
}

/// Checks one loss kind. Each trainable tensor gets its own relative error.
pub fn check_loss(kind: LossKind, cfg: &GradcheckConfig) -> Result<Vec<TensorCheck>> {
    let mut rng = Rng::new(crate::rng::derive_seed(cfg.seed, kind as u64 + 1));
    let mut params = EncoderParams::init(&cfg.dims, kind.needs_attention(), &mut rng)?;
    // Zero biases plus a dead hidden row would make every bag score of that
    // sample exactly equal, which puts the hard max on a kink.
    for t in params.trainable_mut() {
        if t.rows() == 1 {
            t.data_mut().iter_mut().for_each(|v| *v = 0.1 * rng.normal());
        }
    }
    let batch = random_batch(kind, cfg, &mut rng)?;
    let eval = |p: &EncoderParams| batch_loss(p, &batch, kind, cfg.negative_mode, cfg.margin);
    let (_, grads) = eval(&params)?;

    let names: Vec<&'static str> = params.trainable().iter().map(|(n, _)| *n).collect();
    let mut out = Vec::with_capacity(names.len());
    let mut probe = params.clone();
    for (t, name) in names.iter().enumerate() {
        let mut analytic = grads.trainable()[t].1.data().to_vec();
        if cfg.corrupt && t == 0 {
            analytic[0] += 1e-3_f64.max(0.1 * analytic[0].abs());
        }
        let mut numeric = vec![0.0; analytic.len()];
        for (e, slot) in numeric.iter_mut().enumerate() {
            let orig = tensor_mut(&mut probe, t).data()[e];
            tensor_mut(&mut probe, t).data_mut()[e] = orig + cfg.step;
            let up = eval(&probe)?.0;
            tensor_mut(&mut probe, t).data_mut()[e] = orig - cfg.step;
            let down = eval(&probe)?.0;
            tensor_mut(&mut probe, t).data_mut()[e] = orig;
            *slot = (up - down) / (2.0 * cfg.step);
        }
        out.push(TensorCheck {
            loss: kind,
            tensor: (*name).to_string(),
            analytic_norm: analytic.iter().map(|x| x * x).sum::<f64>().sqrt(),
            rel_error: relative_error(&analytic, &numeric),
        });
    }
    Ok(out)
}

/// Checks every loss kind for `cfg.seed`.
pub fn gradcheck(cfg: &GradcheckConfig) -> Result<GradcheckReport> {
    let mut checks = Vec::new();
    for kind in LossKind::ALL {
        checks.extend(check_loss(kind, cfg)?);
    }
    let max_rel_error = checks.iter().map(|c| c.rel_error).fold(0.0, f64::max);
    Ok(GradcheckReport {
        seed: cfg.seed,
        tolerance: cfg.tolerance,
        max_rel_error,
        passed: max_rel_error <= cfg.tolerance,
        checks,
    })
}
