//! The two embedding towers: a clip encoder `f` and a narration encoder `g`,
//! each optionally carrying an attention projection that shares the trunk.
//!
//! Clip tower: `f(x) = W2ᵀ relu(W1ᵀ x + b1) + b2`.
//! Narration tower: `g(y) = W2ᵀ colmax_w relu(W1ᵀ E[w] + b1) + b2`, where `E`
//! is a frozen word table. An attention head replaces the final `(W2, b2)` with
//! its own `(Wa, ba)` on the same trunk activations.
//!
//! The narration trunk is evaluated once per distinct token in a batch, since
//! `relu(W1ᵀ E[w] + b1)` depends only on the token id. Max-pooling then reads
//! rows of that table, so repeated tokens cost nothing extra.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};
use crate::numkernel::{
    add_row_bias, col_max_pool, column_sums, matmul, relu, Backward, Matrix, ReluGrad,
};
use crate::rng::Rng;

/// Pooled backbone features standing in for one clip.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ClipFeature(pub Vec<f64>);

/// Token ids of one narration.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Narration(pub Vec<u32>);

impl Narration {
    pub fn tokens(&self) -> &[u32] {
        &self.0
    }

    /// First `max_words` tokens.
    pub fn truncated(&self, max_words: usize) -> &[u32] {
        &self.0[..self.0.len().min(max_words)]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderDims {
    pub clip_dim: usize,
    pub word_dim: usize,
    pub hidden: usize,
    pub embed_dim: usize,
    pub vocab: usize,
    pub max_words: usize,
}

impl Default for EncoderDims {
    fn default() -> Self {
        Self {
            clip_dim: 32,
            word_dim: 16,
            hidden: 64,
            embed_dim: 16,
            vocab: 200,
            max_words: 16,
        }
    }
}

impl EncoderDims {
    /// Shapes of the full-size model: 1024-d pooled clip features, 300-d word
    /// vectors, a 2048-wide narration trunk and a 512-d joint space.
    pub fn full_scale() -> Self {
        Self {
            clip_dim: 1024,
            word_dim: 300,
            hidden: 2048,
            embed_dim: 512,
            vocab: 10_000,
            max_words: 16,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let named = [
            ("clip_dim", self.clip_dim),
            ("word_dim", self.word_dim),
            ("hidden", self.hidden),
            ("embed_dim", self.embed_dim),
            ("vocab", self.vocab),
            ("max_words", self.max_words),
        ];
        for (name, v) in named {
            if v == 0 {
                return Err(Error::InvalidConfig(format!("{name} must be at least 1")));
            }
        }
        Ok(())
    }
}

/// Final projection `(W, b)` of a tower or of its attention head.
#[derive(Debug, Clone, PartialEq)]
pub struct Projection {
    pub weight: Matrix,
    pub bias: Matrix,
}

impl Projection {
    fn zeros(input: usize, output: usize) -> Self {
        Self {
            weight: Matrix::zeros(input, output),
            bias: Matrix::zeros(1, output),
        }
    }

    fn xavier(input: usize, output: usize, rng: &mut Rng) -> Self {
        Self {
            weight: xavier_uniform(input, output, rng),
            bias: Matrix::zeros(1, output),
        }
    }

    fn apply(&self, x: &Matrix) -> Result<Matrix> {
        let lin = matmul(x, &self.weight)?;
        Ok(add_row_bias(&lin.value, self.bias.data())?.value)
    }

    /// Accumulates parameter gradients and returns the input gradient.
    fn backward(&self, input: &Matrix, d_out: &Matrix, grad: &mut Projection) -> Matrix {
        let dw = input.dot_tn(d_out).expect("projection backward");
        grad.weight.add_assign(&dw).expect("projection grad shape");
        for (g, s) in grad.bias.data_mut().iter_mut().zip(column_sums(d_out)) {
            *g += s;
        }
        d_out.dot_nt(&self.weight).expect("projection backward")
    }
}

/// Symmetric uniform initialization with limit `sqrt(6 / (fan_in + fan_out))`.
pub fn xavier_uniform(fan_in: usize, fan_out: usize, rng: &mut Rng) -> Matrix {
    let limit = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out)
        .map(|_| rng.uniform_range(-limit, limit))
        .collect();
    Matrix::from_vec(fan_in, fan_out, data).expect("sized by construction")
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoEncoderParams {
    pub trunk: Projection,
    pub out: Projection,
    pub head: Option<Projection>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TextEncoderParams {
    /// Frozen word table, `vocab × word_dim`.
    pub embedding: Matrix,
    pub trunk: Projection,
    pub out: Projection,
    pub head: Option<Projection>,
    pub max_words: usize,
}

/// Forward cache of the clip tower over a batch.
pub struct VideoForward {
    input: Matrix,
    hidden: Matrix,
    relu: ReluGrad,
    pub embeddings: Matrix,
    pub attention: Option<Matrix>,
}

/// Forward cache of the narration tower over a batch.
pub struct TextForward {
    unique_tokens: Vec<u32>,
    token_rows: Matrix,
    relu: ReluGrad,
    /// For each narration and hidden unit, the row of `unique_tokens` that won the pool.
    winners: Vec<Vec<usize>>,
    pooled: Matrix,
    pub embeddings: Matrix,
    pub attention: Option<Matrix>,
}

fn check_head(head: &Option<Projection>) -> Result<&Projection> {
    head.as_ref().ok_or(Error::MissingHead)
}

impl VideoEncoderParams {
    pub fn zeros(dims: &EncoderDims, with_head: bool) -> Self {
        Self {
            trunk: Projection::zeros(dims.clip_dim, dims.hidden),
            out: Projection::zeros(dims.hidden, dims.embed_dim),
            head: with_head.then(|| Projection::zeros(dims.hidden, dims.embed_dim)),
        }
    }

    pub fn clip_dim(&self) -> usize {
        self.trunk.weight.rows()
    }

    /// Batched forward over clips stacked as rows.
    pub fn forward(&self, clips: &Matrix) -> Result<VideoForward> {
        if clips.cols() != self.clip_dim() {
            return Err(shape_err(
                "embed_video",
                format!("clip of {} values, encoder expects {}", clips.cols(), self.clip_dim()),
            ));
        }
        let pre = self.trunk.apply(clips)?;
        let act = relu(&pre);
        let embeddings = self.out.apply(&act.value)?;
        let attention = match &self.head {
            Some(h) => Some(h.apply(&act.value)?),
            None => None,
        };
        Ok(VideoForward {
            input: clips.clone(),
            hidden: act.value,
            relu: act.grad_fn,
            embeddings,
            attention,
        })
    }

    /// Trunk activations `relu(W1ᵀ x + b1)`, the representation probed downstream.
    pub fn trunk_features(&self, clips: &Matrix) -> Result<Matrix> {
        Ok(self.forward(clips)?.hidden)
    }

    pub fn embed_video(&self, x: &ClipFeature) -> Result<Vec<f64>> {
        let fwd = self.forward(&Matrix::row_vector(&x.0))?;
        Ok(fwd.embeddings.into_data())
    }

    pub fn embed_attention(&self, x: &ClipFeature) -> Result<Vec<f64>> {
        check_head(&self.head)?;
        let fwd = self.forward(&Matrix::row_vector(&x.0))?;
        Ok(fwd.attention.expect("head present").into_data())
    }

    /// Accumulates parameter gradients into `grad`; returns the clip-input gradient.
    pub fn backward(
        &self,
        fwd: &VideoForward,
        d_embed: &Matrix,
        d_attn: Option<&Matrix>,
        grad: &mut VideoEncoderParams,
    ) -> Matrix {
        let mut d_hidden = self.out.backward(&fwd.hidden, d_embed, &mut grad.out);
        if let (Some(d_a), Some(head), Some(g_head)) = (d_attn, &self.head, grad.head.as_mut()) {
            let dh = head.backward(&fwd.hidden, d_a, g_head);
            d_hidden.add_assign(&dh).expect("hidden grad shape");
        }
        let d_pre = fwd.relu.backward(&d_hidden);
        self.trunk.backward(&fwd.input, &d_pre, &mut grad.trunk)
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = vec![
            ("video.w1", &self.trunk.weight),
            ("video.b1", &self.trunk.bias),
            ("video.w2", &self.out.weight),
            ("video.b2", &self.out.bias),
        ];
        if let Some(h) = &self.head {
            v.push(("video.wa", &h.weight));
            v.push(("video.ba", &h.bias));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![
            &mut self.trunk.weight,
            &mut self.trunk.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ];
        if let Some(h) = &mut self.head {
            v.push(&mut h.weight);
            v.push(&mut h.bias);
        }
        v
    }
}

impl TextEncoderParams {
    pub fn zeros(dims: &EncoderDims, with_head: bool) -> Self {
        Self {
            embedding: Matrix::zeros(dims.vocab, dims.word_dim),
            trunk: Projection::zeros(dims.word_dim, dims.hidden),
            out: Projection::zeros(dims.hidden, dims.embed_dim),
            head: with_head.then(|| Projection::zeros(dims.hidden, dims.embed_dim)),
            max_words: dims.max_words,
        }
    }

    pub fn vocab(&self) -> usize {
        self.embedding.rows()
    }

    /// Batched forward. Each narration is truncated to its first `max_words`
    /// tokens; an empty narration is rejected.
    pub fn forward(&self, narrations: &[&Narration]) -> Result<TextForward> {
        let mut slot: BTreeMap<u32, usize> = BTreeMap::new();
        for (n, y) in narrations.iter().enumerate() {
            let toks = y.truncated(self.max_words);
            if toks.is_empty() {
                return Err(Error::InvalidArgument(format!("narration {n} is empty")));
            }
            for &t in toks {
                if t as usize >= self.vocab() {
                    return Err(Error::InvalidArgument(format!(
                        "token {t} outside vocabulary of {}",
                        self.vocab()
                    )));
                }
                slot.entry(t).or_insert(0);
            }
        }
        let unique_tokens: Vec<u32> = slot.keys().copied().collect();
        for (i, v) in slot.values_mut().enumerate() {
            *v = i;
        }
        let idx: Vec<usize> = unique_tokens.iter().map(|&t| t as usize).collect();
        let token_rows = self.embedding.select_rows(&idx);
        let pre = self.trunk.apply(&token_rows)?;
        let act = relu(&pre);

        let hidden = self.trunk.weight.cols();
        let mut pooled = Matrix::zeros(narrations.len(), hidden);
        let mut winners = Vec::with_capacity(narrations.len());
        for (n, y) in narrations.iter().enumerate() {
            let rows: Vec<usize> = y.truncated(self.max_words).iter().map(|t| slot[t]).collect();
            let words = act.value.select_rows(&rows);
            let pool = col_max_pool(&words)?;
            pooled.row_mut(n).copy_from_slice(&pool.value);
            winners.push(pool.grad_fn.argmax().iter().map(|&w| rows[w]).collect());
        }

        let embeddings = self.out.apply(&pooled)?;
        let attention = match &self.head {
            Some(h) => Some(h.apply(&pooled)?),
            None => None,
        };
        Ok(TextForward {
            unique_tokens,
            token_rows,
            relu: act.grad_fn,
            winners,
            pooled,
            embeddings,
            attention,
        })
    }

    pub fn embed_text(&self, y: &Narration) -> Result<Vec<f64>> {
        Ok(self.forward(&[y])?.embeddings.into_data())
    }

    pub fn embed_attention(&self, y: &Narration) -> Result<Vec<f64>> {
        check_head(&self.head)?;
        Ok(self.forward(&[y])?.attention.expect("head present").into_data())
    }

    /// Accumulates gradients of the trainable parameters into `grad`. The word
    /// table receives nothing.
    pub fn backward(
        &self,
        fwd: &TextForward,
        d_embed: &Matrix,
        d_attn: Option<&Matrix>,
        grad: &mut TextEncoderParams,
    ) {
        let mut d_pooled = self.out.backward(&fwd.pooled, d_embed, &mut grad.out);
        if let (Some(d_a), Some(head), Some(g_head)) = (d_attn, &self.head, grad.head.as_mut()) {
            let dp = head.backward(&fwd.pooled, d_a, g_head);
            d_pooled.add_assign(&dp).expect("pooled grad shape");
        }
        let mut d_table = Matrix::zeros(fwd.unique_tokens.len(), d_pooled.cols());
        for (n, winners) in fwd.winners.iter().enumerate() {
            for (c, &row) in winners.iter().enumerate() {
                let cur = d_table.get(row, c);
                d_table.set(row, c, cur + d_pooled.get(n, c));
            }
        }
        let d_pre = fwd.relu.backward(&d_table);
        // Input gradient would land on the frozen table; dropped.
        let _ = self.trunk.backward(&fwd.token_rows, &d_pre, &mut grad.trunk);
    }

    pub fn tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = vec![
            ("text.w1", &self.trunk.weight),
            ("text.b1", &self.trunk.bias),
            ("text.w2", &self.out.weight),
            ("text.b2", &self.out.bias),
        ];
        if let Some(h) = &self.head {
            v.push(("text.wa", &h.weight));
            v.push(("text.ba", &h.bias));
        }
        v
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = vec![
            &mut self.trunk.weight,
            &mut self.trunk.bias,
            &mut self.out.weight,
            &mut self.out.bias,
        ];
        if let Some(h) = &mut self.head {
            v.push(&mut h.weight);
            v.push(&mut h.bias);
        }
        v
    }
}

/// Both towers together. Gradients use the same type, with the word table
/// left at zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EncoderParams {
    pub video: VideoEncoderParams,
    pub text: TextEncoderParams,
}

impl EncoderParams {
    /// Seeded initialization. Draw order: word table (unit normal, row-major),
    /// then clip `W1`, `W2`, `Wa`, then narration `W1`, `W2`, `Wa`; biases are zero.
    pub fn init(dims: &EncoderDims, with_heads: bool, rng: &mut Rng) -> Result<Self> {
        dims.validate()?;
        let table: Vec<f64> = (0..dims.vocab * dims.word_dim).map(|_| rng.normal()).collect();
        let embedding = Matrix::from_vec(dims.vocab, dims.word_dim, table)?;
        let video = VideoEncoderParams {
            trunk: Projection::xavier(dims.clip_dim, dims.hidden, rng),
            out: Projection::xavier(dims.hidden, dims.embed_dim, rng),
            head: with_heads.then(|| Projection::xavier(dims.hidden, dims.embed_dim, rng)),
        };
        let text = TextEncoderParams {
            embedding,
            trunk: Projection::xavier(dims.word_dim, dims.hidden, rng),
            out: Projection::xavier(dims.hidden, dims.embed_dim, rng),
            head: with_heads.then(|| Projection::xavier(dims.hidden, dims.embed_dim, rng)),
            max_words: dims.max_words,
        };
        Ok(Self { video, text })
    }

    /// Zero-valued gradient accumulator shaped like `self`.
    pub fn zeros_like(&self) -> Self {
        let dims = self.dims();
        Self {
            video: VideoEncoderParams::zeros(&dims, self.video.head.is_some()),
            text: TextEncoderParams::zeros(&dims, self.text.head.is_some()),
        }
    }

    pub fn dims(&self) -> EncoderDims {
        EncoderDims {
            clip_dim: self.video.trunk.weight.rows(),
            word_dim: self.text.embedding.cols(),
            hidden: self.video.trunk.weight.cols(),
            embed_dim: self.video.out.weight.cols(),
            vocab: self.text.embedding.rows(),
            max_words: self.text.max_words,
        }
    }

    pub fn has_heads(&self) -> bool {
        self.video.head.is_some() && self.text.head.is_some()
    }

    /// Trainable tensors in a fixed order: clip tower then narration tower.
    pub fn trainable(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = self.video.tensors();
        v.extend(self.text.tensors());
        v
    }

    pub fn trainable_mut(&mut self) -> Vec<&mut Matrix> {
        let mut v = self.video.tensors_mut();
        v.extend(self.text.tensors_mut());
        v
    }

    /// Every stored tensor, the frozen word table included.
    pub fn all_tensors(&self) -> Vec<(&'static str, &Matrix)> {
        let mut v = self.trainable();
        v.push(("text.embedding", &self.text.embedding));
        v
    }
}
