//! Dense numeric kernels: row-major matrices, stabilised softmax, rotary
//! position encoding, and the three-layer GELU MLP used by the importance
//! predictor, with exact reverse-mode gradients and a central-difference
//! gradient checker.
//!
//! All arithmetic is `f64`.

use crate::error::{Error, Result};
use rand::Rng;
use serde::{Deserialize, Serialize};

/// Rotary frequency base.
pub const ROTARY_BASE: f64 = 10000.0;

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Matrix {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Matrix {
    /// Builds a matrix, checking the data length and finiteness.
    pub fn new(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::Shape(format!(
                "matrix {rows}x{cols} needs {} values, got {}",
                rows * cols,
                data.len()
            )));
        }
        if let Some(bad) = data.iter().find(|v| !v.is_finite()) {
            return Err(Error::Value(format!("non-finite matrix entry {bad}")));
        }
        Ok(Self { rows, cols, data })
    }

    pub fn zeros(rows: usize, cols: usize) -> Self {
        Self { rows, cols, data: vec![0.0; rows * cols] }
    }

    pub fn from_fn(rows: usize, cols: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for c in 0..cols {
                data.push(f(r, c));
            }
        }
        Self { rows, cols, data }
    }

    #[inline]
    pub fn get(&self, r: usize, c: usize) -> f64 {
        self.data[r * self.cols + c]
    }

    #[inline]
    pub fn set(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] = v;
    }

    #[inline]
    pub fn add_at(&mut self, r: usize, c: usize, v: f64) {
        self.data[r * self.cols + c] += v;
    }

    #[inline]
    pub fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    /// `y = self · x`.
    pub fn matvec(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.cols {
            return Err(Error::Shape(format!(
                "matvec: matrix has {} cols, vector has {}",
                self.cols,
                x.len()
            )));
        }
        Ok(self.matvec_unchecked(x))
    }

    pub(crate) fn matvec_unchecked(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }

    /// `y = selfᵀ · x`.
    pub fn matvec_t(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.rows {
            return Err(Error::Shape(format!(
                "matvec_t: matrix has {} rows, vector has {}",
                self.rows,
                x.len()
            )));
        }
        let mut y = vec![0.0; self.cols];
        for (r, &xr) in x.iter().enumerate() {
            if xr != 0.0 {
                for (yc, &m) in y.iter_mut().zip(self.row(r)) {
                    *yc += m * xr;
                }
            }
        }
        Ok(y)
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Numerically stable softmax of a single row.
pub fn softmax(row: &[f64]) -> Result<Vec<f64>> {
    if row.is_empty() {
        return Err(Error::Shape("softmax of an empty row".into()));
    }
    if row.iter().any(|v| v.is_nan()) {
        return Err(Error::Value("NaN in softmax input".into()));
    }
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !max.is_finite() {
        return Err(Error::Value(format!("softmax row maximum is {max}")));
    }
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    Ok(exps.into_iter().map(|e| e / sum).collect())
}

/// Row-wise softmax with row-max subtraction.
pub fn softmax_rows(m: &Matrix) -> Result<Matrix> {
    let mut data = Vec::with_capacity(m.data.len());
    for r in 0..m.rows {
        data.extend(softmax(m.row(r))?);
    }
    Ok(Matrix { rows: m.rows, cols: m.cols, data })
}

/// Rotary frequency of pair `j` for a head of width `d_head`.
#[inline]
pub fn rotary_theta(j: usize, d_head: usize) -> f64 {
    ROTARY_BASE.powf(-2.0 * j as f64 / d_head as f64)
}

/// Rotates adjacent coordinate pairs `(v[2j], v[2j+1])` by `θ_j · position`.
pub fn rotary_apply(v: &[f64], position: usize) -> Result<Vec<f64>> {
    if v.len() % 2 != 0 {
        return Err(Error::Shape(format!("rotary needs an even length, got {}", v.len())));
    }
    let mut out = v.to_vec();
    rotary_in_place(&mut out, position);
    Ok(out)
}

pub(crate) fn rotary_in_place(v: &mut [f64], position: usize) {
    let d_head = v.len();
    for j in 0..d_head / 2 {
        let angle = rotary_theta(j, d_head) * position as f64;
        let (s, c) = angle.sin_cos();
        let (x, y) = (v[2 * j], v[2 * j + 1]);
        v[2 * j] = x * c - y * s;
        v[2 * j + 1] = x * s + y * c;
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_C: f64 = 0.044_715;

/// GELU, tanh form: `0.5·x·(1 + tanh(√(2/π)(x + 0.044715x³)))`.
#[inline]
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (GELU_K * (x + GELU_C * x * x * x)).tanh())
}

/// Derivative of [`gelu`].
#[inline]
pub fn gelu_grad(x: f64) -> f64 {
    let u = GELU_K * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = GELU_K * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

/// Parameters of the `d → h1 → h2 → 1` MLP (GELU on both hidden layers).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub w1: Matrix,
    pub b1: Vec<f64>,
    pub w2: Matrix,
    pub b2: Vec<f64>,
    pub w3: Matrix,
    pub b3: Vec<f64>,
}

impl MlpParams {
    /// All-zero parameters with hidden widths `h1`, `h2`.
    pub fn zeros(d: usize, h1: usize, h2: usize) -> Self {
        Self {
            w1: Matrix::zeros(h1, d),
            b1: vec![0.0; h1],
            w2: Matrix::zeros(h2, h1),
            b2: vec![0.0; h2],
            w3: Matrix::zeros(1, h2),
            b3: vec![0.0; 1],
        }
    }

    /// Default predictor shape `d → 2d → d/2 → 1`.
    pub fn default_shape(d: usize) -> Result<(usize, usize)> {
        if d < 2 || d % 2 != 0 {
            return Err(Error::Config(format!("predictor input dim must be even and >= 2, got {d}")));
        }
        Ok((2 * d, d / 2))
    }

    /// Seeded initialisation: uniform in ±1/√fan_in, zero biases.
    pub fn init<R: Rng>(d: usize, h1: usize, h2: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(d, h1, h2);
        for (m, fan_in) in [(&mut p.w1, d), (&mut p.w2, h1), (&mut p.w3, h2)] {
            let a = 1.0 / (fan_in as f64).sqrt();
            for v in m.data.iter_mut() {
                *v = rng.gen_range(-a..a);
            }
        }
        p
    }

    pub fn input_dim(&self) -> usize {
        self.w1.cols
    }

    pub fn hidden_dims(&self) -> (usize, usize) {
        (self.w1.rows, self.w2.rows)
    }

    /// Checks the shape chain `w1: h1×d`, `w2: h2×h1`, `w3: 1×h2` and biases.
    pub fn validate(&self) -> Result<()> {
        let (h1, h2) = self.hidden_dims();
        let ok = self.w1.data.len() == self.w1.rows * self.w1.cols
            && self.w2.data.len() == self.w2.rows * self.w2.cols
            && self.w3.data.len() == self.w3.rows * self.w3.cols
            && self.b1.len() == h1
            && self.w2.cols == h1
            && self.b2.len() == h2
            && self.w3.rows == 1
            && self.w3.cols == h2
            && self.b3.len() == 1;
        if !ok {
            return Err(Error::Shape("inconsistent MLP parameter chain".into()));
        }
        Ok(())
    }

    pub fn num_params(&self) -> usize {
        self.w1.data.len() + self.b1.len() + self.w2.data.len() + self.b2.len() + self.w3.data.len() + 1
    }

    /// Parameters in a fixed order: w1, b1, w2, b2, w3, b3.
    pub fn to_flat(&self) -> Vec<f64> {
        let mut v = Vec::with_capacity(self.num_params());
        for part in self.parts() {
            v.extend_from_slice(part);
        }
        v
    }

    /// Inverse of [`MlpParams::to_flat`], using `self` as the shape template.
    pub fn with_flat(&self, flat: &[f64]) -> Result<Self> {
        if flat.len() != self.num_params() {
            return Err(Error::Shape(format!(
                "flat parameter vector has {} entries, expected {}",
                flat.len(),
                self.num_params()
            )));
        }
        let mut out = self.clone();
        let mut off = 0;
        for part in out.parts_mut() {
            let n = part.len();
            part.copy_from_slice(&flat[off..off + n]);
            off += n;
        }
        Ok(out)
    }

    pub fn parts(&self) -> [&[f64]; 6] {
        [&self.w1.data, &self.b1, &self.w2.data, &self.b2, &self.w3.data, &self.b3]
    }

    pub fn parts_mut(&mut self) -> [&mut [f64]; 6] {
        [
            &mut self.w1.data,
            &mut self.b1,
            &mut self.w2.data,
            &mut self.b2,
            &mut self.w3.data,
            &mut self.b3,
        ]
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for part in self.parts() {
            h = (h ^ part.len() as u64).wrapping_mul(0x0000_0100_0000_01b3);
            for v in part {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }
}

/// Intermediates of one [`mlp_forward`] call, consumed by [`mlp_backward`].
#[derive(Debug, Clone)]
pub struct Activations {
    pub x: Vec<f64>,
    pub z1: Vec<f64>,
    pub a1: Vec<f64>,
    pub z2: Vec<f64>,
    pub a2: Vec<f64>,
    pub score: f64,
    fingerprint: u64,
}

pub(crate) fn forward_raw(p: &MlpParams, x: &[f64]) -> Activations {
    let mut z1 = p.w1.matvec_unchecked(x);
    for (z, b) in z1.iter_mut().zip(&p.b1) {
        *z += b;
    }
    let a1: Vec<f64> = z1.iter().map(|&z| gelu(z)).collect();
    let mut z2 = p.w2.matvec_unchecked(&a1);
    for (z, b) in z2.iter_mut().zip(&p.b2) {
        *z += b;
    }
    let a2: Vec<f64> = z2.iter().map(|&z| gelu(z)).collect();
    let score = dot(p.w3.row(0), &a2) + p.b3[0];
    Activations { x: x.to_vec(), z1, a1, z2, a2, score, fingerprint: 0 }
}

/// Accumulates `upstream · ∂score/∂θ` into `grads`; returns `∂score/∂x · upstream`.
pub(crate) fn backward_raw(p: &MlpParams, act: &Activations, upstream: f64, grads: &mut MlpParams) -> Vec<f64> {
    let (h1, h2) = p.hidden_dims();
    grads.b3[0] += upstream;
    let mut d_z2 = vec![0.0; h2];
    for k in 0..h2 {
        grads.w3.data[k] += upstream * act.a2[k];
        d_z2[k] = upstream * p.w3.data[k] * gelu_grad(act.z2[k]);
    }
    let mut d_a1 = vec![0.0; h1];
    for (k, &g) in d_z2.iter().enumerate() {
        grads.b2[k] += g;
        if g == 0.0 {
            continue;
        }
        let wrow = p.w2.row(k);
        let grow = &mut grads.w2.data[k * h1..(k + 1) * h1];
        for j in 0..h1 {
            grow[j] += g * act.a1[j];
            d_a1[j] += g * wrow[j];
        }
    }
    let d = p.input_dim();
    let mut d_x = vec![0.0; d];
    for j in 0..h1 {
        let g = d_a1[j] * gelu_grad(act.z1[j]);
        grads.b1[j] += g;
        if g == 0.0 {
            continue;
        }
        let wrow = p.w1.row(j);
        let grow = &mut grads.w1.data[j * d..(j + 1) * d];
        for i in 0..d {
            grow[i] += g * act.x[i];
            d_x[i] += g * wrow[i];
        }
    }
    d_x
}

/// `score = W₃·gelu(W₂·gelu(W₁x + b₁) + b₂) + b₃`, with cached intermediates.
pub fn mlp_forward(params: &MlpParams, x: &[f64]) -> Result<(f64, Activations)> {
    params.validate()?;
    if x.len() != params.input_dim() {
        return Err(Error::Shape(format!(
            "MLP expects input dim {}, got {}",
            params.input_dim(),
            x.len()
        )));
    }
    let mut act = forward_raw(params, x);
    act.fingerprint = params.fingerprint();
    Ok((act.score, act))
}

/// Reverse-mode gradients of the forward map scaled by `upstream`:
/// returns parameter gradients (shaped like `params`) and the input gradient.
pub fn mlp_backward(params: &MlpParams, act: &Activations, upstream: f64) -> Result<(MlpParams, Vec<f64>)> {
    params.validate()?;
    if act.fingerprint != params.fingerprint() || act.x.len() != params.input_dim() {
        return Err(Error::StaleActivations(
            "activations were produced by different parameters".into(),
        ));
    }
    let (h1, h2) = params.hidden_dims();
    let mut grads = MlpParams::zeros(params.input_dim(), h1, h2);
    let dx = backward_raw(params, act, upstream, &mut grads);
    Ok((grads, dx))
}

/// Max over parameters of `|g_analytic − g_fd| / max(1, |g_fd|)` with central
/// differences of step `eps`.
pub fn finite_diff_check(
    f: impl Fn(&[f64]) -> f64,
    params: &[f64],
    analytic: &[f64],
    eps: f64,
) -> Result<f64> {
    if params.len() != analytic.len() {
        return Err(Error::Shape(format!(
            "{} parameters but {} analytic gradients",
            params.len(),
            analytic.len()
        )));
    }
    if !(eps > 0.0) {
        return Err(Error::Value(format!("finite-difference step must be positive, got {eps}")));
    }
    let mut probe = params.to_vec();
    let mut worst = 0.0f64;
    for i in 0..params.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let fp = f(&probe);
        probe[i] = orig - eps;
        let fm = f(&probe);
        probe[i] = orig;
        if !fp.is_finite() || !fm.is_finite() {
            return Err(Error::Value(format!("objective is non-finite around parameter {i}")));
        }
        let g_fd = (fp - fm) / (2.0 * eps);
        let rel = (analytic[i] - g_fd).abs() / g_fd.abs().max(1.0);
        worst = worst.max(rel);
    }
    Ok(worst)
}
