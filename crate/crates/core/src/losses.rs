//! Training objectives over raw pair scores `f(x)ᵀg(y)`.
//!
//! The NCE family (`nce`, `mil-nce`, `max-nce`, `attn-nce`, `cat-nce`) reports
//! a log-ratio to maximize and is always evaluated as a difference of
//! log-sum-exps. `max-margin` and `binary-ce` report a value to minimize.
//! Gradients are with respect to the score vectors.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numkernel::{logsumexp, Backward, Matrix};
use crate::sampling::NegativeMode;

pub const DEFAULT_MARGIN: f64 = 0.2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum LossKind {
    #[serde(rename = "nce")]
    Nce,
    #[serde(rename = "mil-nce")]
    MilNce,
    #[serde(rename = "max-nce")]
    MaxNce,
    #[serde(rename = "attn-nce")]
    AttnNce,
    #[serde(rename = "cat-nce")]
    CatNce,
    #[serde(rename = "max-margin")]
    MaxMargin,
    #[serde(rename = "binary-ce")]
    BinaryCe,
}

impl LossKind {
    pub const ALL: [LossKind; 7] = [
        LossKind::Nce,
        LossKind::MilNce,
        LossKind::MaxNce,
        LossKind::AttnNce,
        LossKind::CatNce,
        LossKind::MaxMargin,
        LossKind::BinaryCe,
    ];

    pub fn name(self) -> &'static str {
        match self {
            LossKind::Nce => "nce",
            LossKind::MilNce => "mil-nce",
            LossKind::MaxNce => "max-nce",
            LossKind::AttnNce => "attn-nce",
            LossKind::CatNce => "cat-nce",
            LossKind::MaxMargin => "max-margin",
            LossKind::BinaryCe => "binary-ce",
        }
    }

    /// True when the per-sample value is a log-likelihood ratio to maximize.
    pub fn is_nce_family(self) -> bool {
        !matches!(self, LossKind::MaxMargin | LossKind::BinaryCe)
    }

    /// Whether the objective scores the whole candidate bag.
    pub fn uses_bag(self) -> bool {
        matches!(self, LossKind::MilNce | LossKind::MaxNce | LossKind::AttnNce)
    }

    pub fn needs_attention(self) -> bool {
        self == LossKind::AttnNce
    }
}

impl std::fmt::Display for LossKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for LossKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| Error::InvalidArgument(format!("unknown loss kind {s:?}")))
    }
}

/// Scores for one sample: its positive candidates, its negatives and,
/// for attention pooling, the attention logits over the candidates.
#[derive(Debug, Clone, PartialEq)]
pub struct SampleScores {
    pub positives: Vec<f64>,
    pub negatives: Vec<f64>,
    pub attn: Option<Vec<f64>>,
}

impl SampleScores {
    pub fn new(positives: Vec<f64>, negatives: Vec<f64>) -> Self {
        Self {
            positives,
            negatives,
            attn: None,
        }
    }

    pub fn with_attention(mut self, attn: Vec<f64>) -> Self {
        self.attn = Some(attn);
        self
    }

    fn check(&self, op: &'static str) -> Result<()> {
        if self.positives.is_empty() || self.negatives.is_empty() {
            return Err(Error::Empty(op));
        }
        if let Some(a) = &self.attn {
            if a.len() != self.positives.len() {
                return Err(shape_err(
                    op,
                    format!("{} attention logits for {} positives", a.len(), self.positives.len()),
                ));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossResult {
    pub value: f64,
    pub d_positives: Vec<f64>,
    pub d_negatives: Vec<f64>,
    pub d_attn: Option<Vec<f64>>,
}

/// `top - logsumexp([top] ∪ negatives)` and its gradients w.r.t. `top` and the negatives.
fn single_positive(top: f64, negatives: &[f64]) -> (f64, f64, Vec<f64>) {
    let mut all = Vec::with_capacity(negatives.len() + 1);
    all.push(top);
    all.extend_from_slice(negatives);
    let lse = logsumexp(&all).expect("nonempty");
    let grad = lse.grad_fn.backward(&1.0);
    let d_top = 1.0 - grad[0];
    let d_neg = grad[1..].iter().map(|p| -p).collect();
    (top - lse.value, d_top, d_neg)
}

/// Softmax NCE with exactly one positive.
pub fn nce(s: &SampleScores) -> Result<LossResult> {
    s.check("nce")?;
    if s.positives.len() != 1 {
        return Err(Error::InvalidArgument(format!(
            "nce takes one positive, got {}",
            s.positives.len()
        )));
    }
    let (value, d_top, d_negatives) = single_positive(s.positives[0], &s.negatives);
    Ok(LossResult {
        value,
        d_positives: vec![d_top],
        d_negatives,
        d_attn: None,
    })
}

/// `logsumexp(positives) - logsumexp(positives ∪ negatives)`.
pub fn mil_nce(s: &SampleScores) -> Result<LossResult> {
    s.check("mil_nce")?;
    let pos = logsumexp(&s.positives)?;
    let mut all = s.positives.clone();
    all.extend_from_slice(&s.negatives);
    let full = logsumexp(&all)?;
    let d_pos_num = pos.grad_fn.backward(&1.0);
    let d_full = full.grad_fn.backward(&1.0);
    let np = s.positives.len();
    let d_positives = d_pos_num
        .iter()
        .zip(&d_full[..np])
        .map(|(a, b)| a - b)
        .collect();
    let d_negatives = d_full[np..].iter().map(|p| -p).collect();
    Ok(LossResult {
        value: pos.value - full.value,
        d_positives,
        d_negatives,
        d_attn: None,
    })
}

/// Index of the largest value, lowest index on ties.
fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in v.iter().enumerate().skip(1) {
        if x > v[best] {
            best = i;
        }
    }
    best
}

/// NCE on the best-scoring positive; only that positive receives gradient.
pub fn max_nce(s: &SampleScores) -> Result<LossResult> {
    s.check("max_nce")?;
    let m = argmax(&s.positives);
    let (value, d_top, d_negatives) = single_positive(s.positives[m], &s.negatives);
    let mut d_positives = vec![0.0; s.positives.len()];
    d_positives[m] = d_top;
    Ok(LossResult {
        value,
        d_positives,
        d_negatives,
        d_attn: None,
    })
}

/// NCE on the attention-weighted mean positive score, with weights
/// `softmax(attn)` over the candidates.
pub fn attn_nce(s: &SampleScores) -> Result<LossResult> {
    s.check("attn_nce")?;
    let logits = s
        .attn
        .as_ref()
        .ok_or_else(|| Error::InvalidArgument("attn_nce needs attention scores".into()))?;
    let weights = logsumexp(logits)?.grad_fn.softmax().to_vec();
    let pooled: f64 = weights.iter().zip(&s.positives).map(|(a, p)| a * p).sum();
    let (value, d_pooled, d_negatives) = single_positive(pooled, &s.negatives);
    let d_positives = weights.iter().map(|a| a * d_pooled).collect();
    let d_attn = weights
        .iter()
        .zip(&s.positives)
        .map(|(a, p)| d_pooled * a * (p - pooled))
        .collect();
    Ok(LossResult {
        value,
        d_positives,
        d_negatives,
        d_attn: Some(d_attn),
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct MatrixLossResult {
    pub value: f64,
    pub d_scores: Matrix,
}

/// Bidirectional ranking hinge on a square score matrix whose diagonal holds
/// the positive pairs:
/// `(1/B) Σ_i Σ_{j≠i} [max(0, δ - S_ii + S_ij) + max(0, δ - S_ii + S_ji)]`.
pub fn max_margin(scores: &Matrix, margin: f64) -> Result<MatrixLossResult> {
    let (b, c) = scores.shape();
    if b != c {
        return Err(shape_err("max_margin", format!("{b}x{c} is not square")));
    }
    if b == 0 {
        return Err(Error::Empty("max_margin"));
    }
    let inv = 1.0 / b as f64;
    let mut value = 0.0;
    let mut d = Matrix::zeros(b, b);
    for i in 0..b {
        let pos = scores.get(i, i);
        for j in (0..b).filter(|&j| j != i) {
            for (r, cidx) in [(i, j), (j, i)] {
                let h = margin - pos + scores.get(r, cidx);
                if h > 0.0 {
                    value += h;
                    d.set(r, cidx, d.get(r, cidx) + inv);
                    d.set(i, i, d.get(i, i) - inv);
                }
            }
        }
    }
    Ok(MatrixLossResult {
        value: value * inv,
        d_scores: d,
    })
}

/// `ln(1 + e^x)` without overflow.
fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Sigmoid cross-entropy: mean `-ln σ(s)` over positives plus mean
/// `-ln(1 - σ(s))` over negatives.
pub fn binary_ce(positives: &[f64], negatives: &[f64]) -> Result<LossResult> {
    if positives.is_empty() || negatives.is_empty() {
        return Err(Error::Empty("binary_ce"));
    }
    let np = positives.len() as f64;
    let nn = negatives.len() as f64;
    let value = positives.iter().map(|&s| softplus(-s)).sum::<f64>() / np
        + negatives.iter().map(|&s| softplus(s)).sum::<f64>() / nn;
    Ok(LossResult {
        value,
        d_positives: positives.iter().map(|&s| -sigmoid(-s) / np).collect(),
        d_negatives: negatives.iter().map(|&s| sigmoid(s) / nn).collect(),
        d_attn: None,
    })
}

/// Per-sample objective for the kinds that work on [`SampleScores`].
/// `cat-nce` and `nce` share the single-positive rule.
pub fn sample_objective(kind: LossKind, s: &SampleScores) -> Result<LossResult> {
    match kind {
        LossKind::Nce | LossKind::CatNce => nce(s),
        LossKind::MilNce => mil_nce(s),
        LossKind::MaxNce => max_nce(s),
        LossKind::AttnNce => attn_nce(s),
        LossKind::BinaryCe => binary_ce(&s.positives, &s.negatives),
        LossKind::MaxMargin => Err(Error::InvalidArgument(
            "max-margin works on the full score matrix".into(),
        )),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BatchObjective {
    /// Mean loss to minimize: the negated objective for the NCE family.
    pub loss: f64,
    /// Per-sample results, gradients already scaled to `d loss`.
    pub samples: Vec<LossResult>,
}

/// Mean over samples, with gradients of the minimized loss.
pub fn batch_objective(kind: LossKind, batch: &[SampleScores]) -> Result<BatchObjective> {
    let first = batch.first().ok_or(Error::Empty("batch_objective"))?;
    let (np, nn) = (first.positives.len(), first.negatives.len());
    if let Some(i) = batch
        .iter()
        .position(|s| s.positives.len() != np || s.negatives.len() != nn)
    {
        return Err(shape_err(
            "batch_objective",
            format!("sample {i} differs from sample 0 in positive or negative count"),
        ));
    }
    let sign = if kind.is_nce_family() { -1.0 } else { 1.0 };
    let scale = sign / batch.len() as f64;
    let mut loss = 0.0;
    let mut samples = Vec::with_capacity(batch.len());
    for s in batch {
        let mut r = sample_objective(kind, s)?;
        loss += r.value;
        r.d_positives.iter_mut().for_each(|g| *g *= scale);
        r.d_negatives.iter_mut().for_each(|g| *g *= scale);
        if let Some(a) = r.d_attn.as_mut() {
            a.iter_mut().for_each(|g| *g *= scale);
        }
        samples.push(r);
    }
    Ok(BatchObjective {
        loss: loss * scale,
        samples,
    })
}

/// Raw scores of one training batch.
#[derive(Debug, Clone)]
pub struct BatchScores {
    /// `B × B`, entry `(i, j)` scores clip `i` against narration `j`; the
    /// diagonal holds each sample's own pair.
    pub pair: Matrix,
    /// `B × K` scores of each clip against its candidate narrations.
    pub bag: Option<Matrix>,
    /// `B × K` attention logits over the candidates.
    pub attn: Option<Matrix>,
}

#[derive(Debug, Clone)]
pub struct BatchGrad {
    pub loss: f64,
    pub d_pair: Matrix,
    pub d_bag: Option<Matrix>,
    pub d_attn: Option<Matrix>,
}

/// Scores of the negatives of sample `i`, in the order of
/// [`crate::sampling::build_negatives`], with their matrix coordinates.
fn negative_cells(mode: NegativeMode, b: usize, i: usize) -> impl Iterator<Item = (usize, usize)> {
    let text = (0..b).filter(move |&j| j != i).map(move |j| (i, j));
    let video = (0..b).filter(move |&j| j != i).map(move |j| (j, i));
    let (t, v): (Vec<_>, Vec<_>) = match mode {
        NegativeMode::Joint => (text.collect(), video.collect()),
        NegativeMode::TextGivenVideo => (text.collect(), Vec::new()),
        NegativeMode::VideoGivenText => (Vec::new(), video.collect()),
    };
    t.into_iter().chain(v)
}

/// Full batch objective over score matrices, scattering gradients back onto them.
pub fn score_batch_objective(
    kind: LossKind,
    scores: &BatchScores,
    mode: NegativeMode,
    margin: f64,
) -> Result<BatchGrad> {
    let b = scores.pair.rows();
    if scores.pair.cols() != b {
        return Err(shape_err("score_batch_objective", "pair matrix is not square"));
    }
    if b < 2 {
        return Err(Error::InvalidArgument(format!("batch of {b} has no negatives")));
    }
    if kind == LossKind::MaxMargin {
        let r = max_margin(&scores.pair, margin)?;
        return Ok(BatchGrad {
            loss: r.value,
            d_pair: r.d_scores,
            d_bag: None,
            d_attn: None,
        });
    }
    let bag = if kind.uses_bag() {
        let bag = scores
            .bag
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument(format!("{kind} needs bag scores")))?;
        if bag.rows() != b {
            return Err(shape_err("score_batch_objective", "bag rows differ from batch"));
        }
        Some(bag)
    } else {
        None
    };
    let attn = if kind.needs_attention() {
        let a = scores
            .attn
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("attn-nce needs attention logits".into()))?;
        Some(a)
    } else {
        None
    };

    let mut samples = Vec::with_capacity(b);
    let mut cells = Vec::with_capacity(b);
    for i in 0..b {
        let c: Vec<(usize, usize)> = negative_cells(mode, b, i).collect();
        let negatives = c.iter().map(|&(r, k)| scores.pair.get(r, k)).collect();
        let positives = match bag {
            Some(m) => m.row(i).to_vec(),
            None => vec![scores.pair.get(i, i)],
        };
        let mut s = SampleScores::new(positives, negatives);
        if let Some(a) = attn {
            s = s.with_attention(a.row(i).to_vec());
        }
        samples.push(s);
        cells.push(c);
    }
    let obj = batch_objective(kind, &samples)?;

    let mut d_pair = Matrix::zeros(b, b);
    let mut d_bag = bag.map(|m| Matrix::zeros(m.rows(), m.cols()));
    let mut d_attn = attn.map(|m| Matrix::zeros(m.rows(), m.cols()));
    for (i, (r, c)) in obj.samples.iter().zip(&cells).enumerate() {
        for (&(row, col), g) in c.iter().zip(&r.d_negatives) {
            d_pair.set(row, col, d_pair.get(row, col) + g);
        }
        match d_bag.as_mut() {
            Some(db) => db.row_mut(i).copy_from_slice(&r.d_positives),
            None => d_pair.set(i, i, d_pair.get(i, i) + r.d_positives[0]),
        }
        if let (Some(da), Some(g)) = (d_attn.as_mut(), &r.d_attn) {
            da.row_mut(i).copy_from_slice(g);
        }
    }
    Ok(BatchGrad {
        loss: obj.loss,
        d_pair,
        d_bag,
        d_attn,
    })
}
