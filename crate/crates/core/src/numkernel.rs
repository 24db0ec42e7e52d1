//! Dense row-major `f64` kernel with hand-written reverse-mode rules.
//!
//! Every differentiable op returns a [`GradPair`]: the forward value together
//! with a record that maps an output gradient back to input gradients. The
//! records hold copies of whatever the rule needs, so they can outlive the
//! inputs. All reductions run in a fixed index order.

use serde::{Deserialize, Serialize};

use crate::error::{shape_err, Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn identity(n: usize) -> Self {
        let mut m = Self::zeros(n, n);
        for i in 0..n {
            m.data[i * n + i] = 1.0;
        }
        m
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(shape_err(
                "Matrix::from_vec",
                format!("{} values for {rows}x{cols}", data.len()),
            ));
        }
        Ok(Self { rows, cols, data })
    }

    /// Builds a matrix from equal-length rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().position(|r| r.len() != cols) {
            return Err(shape_err(
                "Matrix::from_rows",
                format!("row {bad} has {} values, expected {cols}", rows[bad].len()),
            ));
        }
        let data = rows.iter().flatten().copied().collect();
        Ok(Self {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn row_vector(values: &[f64]) -> Self {
        Self {
            rows: 1,
            cols: values.len(),
            data: values.to_vec(),
        }
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn shape(&self) -> (usize, usize) {
        (self.rows, self.cols)
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn row_mut(&mut self, r: usize) -> &mut [f64] {
        &mut self.data[r * self.cols..(r + 1) * self.cols]
    }

    pub fn transpose(&self) -> Self {
        let mut t = Self::zeros(self.cols, self.rows);
        for r in 0..self.rows {
            for c in 0..self.cols {
                t.data[c * self.rows + r] = self.data[r * self.cols + c];
            }
        }
        t
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn add_assign(&mut self, other: &Matrix) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(shape_err(
                "add_assign",
                format!("{:?} += {:?}", self.shape(), other.shape()),
            ));
        }
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
        Ok(())
    }

    pub fn scale(&mut self, s: f64) {
        for v in &mut self.data {
            *v *= s;
        }
    }

    pub fn l2_norm(&self) -> f64 {
        self.data.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    /// Rows selected by index, in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Self {
        let mut out = Self::zeros(idx.len(), self.cols);
        for (o, &i) in idx.iter().enumerate() {
            out.row_mut(o).copy_from_slice(self.row(i));
        }
        out
    }

    /// `self · other`, without gradient bookkeeping.
    pub fn dot(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.rows {
            return Err(shape_err(
                "matmul",
                format!("{}x{} · {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.cols);
        for i in 0..self.rows {
            let a_row = self.row(i);
            let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
            for (k, &a) in a_row.iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                for (o, &b) in o_row.iter_mut().zip(other.row(k)) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `selfᵀ · other`.
    pub fn dot_tn(&self, other: &Matrix) -> Result<Matrix> {
        if self.rows != other.rows {
            return Err(shape_err(
                "matmul_tn",
                format!("({}x{})ᵀ · {}x{}", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.cols, other.cols);
        for k in 0..self.rows {
            let b_row = other.row(k);
            for (i, &a) in self.row(k).iter().enumerate() {
                if a == 0.0 {
                    continue;
                }
                let o_row = &mut out.data[i * other.cols..(i + 1) * other.cols];
                for (o, &b) in o_row.iter_mut().zip(b_row) {
                    *o += a * b;
                }
            }
        }
        Ok(out)
    }

    /// `self · otherᵀ`.
    pub fn dot_nt(&self, other: &Matrix) -> Result<Matrix> {
        if self.cols != other.cols {
            return Err(shape_err(
                "matmul_nt",
                format!("{}x{} · ({}x{})ᵀ", self.rows, self.cols, other.rows, other.cols),
            ));
        }
        let mut out = Matrix::zeros(self.rows, other.rows);
        for i in 0..self.rows {
            let a_row = self.row(i);
            for j in 0..other.rows {
                out.data[i * other.rows + j] = dot(a_row, other.row(j));
            }
        }
        Ok(out)
    }
}

pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Backward rule of a differentiable op.
pub trait Backward {
    /// Gradient type of the op's output.
    type OutputGrad: ?Sized;
    /// Gradients with respect to the op's inputs.
    type InputGrad;

    fn backward(&self, d_out: &Self::OutputGrad) -> Self::InputGrad;
}

/// A forward value and the record needed to differentiate it.
#[derive(Debug, Clone)]
pub struct GradPair<V, G> {
    pub value: V,
    pub grad_fn: G,
}

#[derive(Debug, Clone)]
pub struct MatmulGrad {
    a: Matrix,
    b: Matrix,
}

impl Backward for MatmulGrad {
    type OutputGrad = Matrix;
    type InputGrad = (Matrix, Matrix);

    /// `dA = dC·Bᵀ`, `dB = Aᵀ·dC`.
    fn backward(&self, dc: &Matrix) -> (Matrix, Matrix) {
        let da = dc.dot_nt(&self.b).expect("matmul backward: dC shape");
        let db = self.a.dot_tn(dc).expect("matmul backward: dC shape");
        (da, db)
    }
}

pub fn matmul(a: &Matrix, b: &Matrix) -> Result<GradPair<Matrix, MatmulGrad>> {
    let value = a.dot(b)?;
    Ok(GradPair {
        value,
        grad_fn: MatmulGrad {
            a: a.clone(),
            b: b.clone(),
        },
    })
}

#[derive(Debug, Clone)]
pub struct ReluGrad {
    rows: usize,
    cols: usize,
    active: Vec<bool>,
}

impl Backward for ReluGrad {
    type OutputGrad = Matrix;
    type InputGrad = Matrix;

    fn backward(&self, d_out: &Matrix) -> Matrix {
        assert_eq!(d_out.shape(), (self.rows, self.cols), "relu backward shape");
        let data = d_out
            .data()
            .iter()
            .zip(&self.active)
            .map(|(&g, &on)| if on { g } else { 0.0 })
            .collect();
        Matrix {
            rows: self.rows,
            cols: self.cols,
            data,
        }
    }
}

/// Elementwise `max(0, m)`. The subgradient at exactly 0 is 0.
pub fn relu(m: &Matrix) -> GradPair<Matrix, ReluGrad> {
    let active: Vec<bool> = m.data().iter().map(|&v| v > 0.0).collect();
    let data = m.data().iter().map(|&v| if v > 0.0 { v } else { 0.0 }).collect();
    GradPair {
        value: Matrix {
            rows: m.rows,
            cols: m.cols,
            data,
        },
        grad_fn: ReluGrad {
            rows: m.rows,
            cols: m.cols,
            active,
        },
    }
}

#[derive(Debug, Clone)]
pub struct ColMaxGrad {
    rows: usize,
    argmax: Vec<usize>,
}

impl ColMaxGrad {
    pub fn argmax(&self) -> &[usize] {
        &self.argmax
    }
}

impl Backward for ColMaxGrad {
    type OutputGrad = [f64];
    type InputGrad = Matrix;

    fn backward(&self, d_out: &[f64]) -> Matrix {
        assert_eq!(d_out.len(), self.argmax.len(), "col_max_pool backward shape");
        let mut dm = Matrix::zeros(self.rows, self.argmax.len());
        for (c, (&r, &g)) in self.argmax.iter().zip(d_out).enumerate() {
            dm.set(r, c, g);
        }
        dm
    }
}

/// Column-wise maximum over rows. Ties go to the lowest row index.
pub fn col_max_pool(m: &Matrix) -> Result<GradPair<Vec<f64>, ColMaxGrad>> {
    if m.rows == 0 {
        return Err(Error::Empty("col_max_pool"));
    }
    let mut value = m.row(0).to_vec();
    let mut argmax = vec![0usize; m.cols];
    for r in 1..m.rows {
        for (c, &v) in m.row(r).iter().enumerate() {
            if v > value[c] {
                value[c] = v;
                argmax[c] = r;
            }
        }
    }
    Ok(GradPair {
        value,
        grad_fn: ColMaxGrad {
            rows: m.rows,
            argmax,
        },
    })
}

#[derive(Debug, Clone)]
pub struct LogSumExpGrad {
    softmax: Vec<f64>,
}

impl LogSumExpGrad {
    pub fn softmax(&self) -> &[f64] {
        &self.softmax
    }
}

impl Backward for LogSumExpGrad {
    type OutputGrad = f64;
    type InputGrad = Vec<f64>;

    fn backward(&self, d_out: &f64) -> Vec<f64> {
        self.softmax.iter().map(|p| p * d_out).collect()
    }
}

/// Shifted log-sum-exp, `m + ln Σ exp(v_i - m)` with `m = max(v)`.
pub fn logsumexp(v: &[f64]) -> Result<GradPair<f64, LogSumExpGrad>> {
    if v.is_empty() {
        return Err(Error::Empty("logsumexp"));
    }
    let m = v.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = v.iter().map(|x| (x - m).exp()).collect();
    let total: f64 = exps.iter().sum();
    let softmax = exps.iter().map(|e| e / total).collect();
    Ok(GradPair {
        value: m + total.ln(),
        grad_fn: LogSumExpGrad { softmax },
    })
}

#[derive(Debug, Clone)]
pub struct ScoreGrad {
    f: Matrix,
    g: Matrix,
}

impl Backward for ScoreGrad {
    type OutputGrad = Matrix;
    type InputGrad = (Matrix, Matrix);

    /// `dF = dS·G`, `dG = dSᵀ·F`.
    fn backward(&self, ds: &Matrix) -> (Matrix, Matrix) {
        let df = ds.dot(&self.g).expect("score backward: dS shape");
        let dg = ds.dot_tn(&self.f).expect("score backward: dS shape");
        (df, dg)
    }
}

/// All pairwise dot products `S[i][j] = F_i · G_j`.
pub fn score_matrix(f: &Matrix, g: &Matrix) -> Result<GradPair<Matrix, ScoreGrad>> {
    if f.cols != g.cols {
        return Err(shape_err(
            "score_matrix",
            format!("embedding widths {} vs {}", f.cols, g.cols),
        ));
    }
    let value = f.dot_nt(g)?;
    Ok(GradPair {
        value,
        grad_fn: ScoreGrad {
            f: f.clone(),
            g: g.clone(),
        },
    })
}

#[derive(Debug, Clone)]
pub struct BiasGrad;

impl Backward for BiasGrad {
    type OutputGrad = Matrix;
    type InputGrad = (Matrix, Vec<f64>);

    fn backward(&self, d_out: &Matrix) -> (Matrix, Vec<f64>) {
        (d_out.clone(), column_sums(d_out))
    }
}

/// Adds `bias` to every row.
pub fn add_row_bias(m: &Matrix, bias: &[f64]) -> Result<GradPair<Matrix, BiasGrad>> {
    if bias.len() != m.cols {
        return Err(shape_err(
            "add_row_bias",
            format!("bias of {} for {} columns", bias.len(), m.cols),
        ));
    }
    let mut value = m.clone();
    for r in 0..value.rows {
        for (v, b) in value.row_mut(r).iter_mut().zip(bias) {
            *v += b;
        }
    }
    Ok(GradPair {
        value,
        grad_fn: BiasGrad,
    })
}

pub fn column_sums(m: &Matrix) -> Vec<f64> {
    let mut out = vec![0.0; m.cols];
    for r in 0..m.rows {
        for (o, v) in out.iter_mut().zip(m.row(r)) {
            *o += v;
        }
    }
    out
}
