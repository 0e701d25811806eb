//! Importance predictor: an MLP head `d → 2d → d/2 → 1` regressing a think
//! token's normalised importance from its final hidden state, plus the
//! ranking diagnostics used to judge it (Kendall tau-b, top-set overlap).
//!
//! Training minimises the per-token mean squared error over all think tokens
//! of the training traces with AdamW (decoupled weight decay on the weight
//! matrices), a cosine learning-rate schedule, global-norm gradient clipping
//! and micro-batch gradient accumulation.

use crate::error::{Error, Result};
use crate::importance::{retained_count, top_indices};
use crate::numkernel::{backward_raw, forward_raw, mlp_forward, Matrix, MlpParams};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::io::{Read, Write};

pub type PredictorParams = MlpParams;

/// Seeded predictor of the default shape for input dim `d`.
pub fn init_params(d: usize, seed: u64) -> Result<PredictorParams> {
    let (h1, h2) = MlpParams::default_shape(d)?;
    Ok(MlpParams::init(d, h1, h2, &mut ChaCha8Rng::seed_from_u64(seed)))
}

/// Predicted importance of a token with hidden state `h`.
pub fn predict(params: &PredictorParams, h: &[f64]) -> Result<f64> {
    Ok(mlp_forward(params, h)?.0)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub clip_norm: f64,
    /// Samples (think tokens) per optimiser step.
    pub global_batch: usize,
    /// Samples per accumulation chunk.
    pub micro_batch: usize,
    /// Fraction of traces held out for validation.
    pub val_fraction: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 15,
            lr: 5e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.95,
            adam_eps: 1e-8,
            clip_norm: 1.0,
            global_batch: 32,
            micro_batch: 8,
            val_fraction: 0.1,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |k: &str, v: String| Err(Error::Config(format!("{k} = {v} is invalid")));
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad("lr", self.lr.to_string());
        }
        if !(self.weight_decay >= 0.0) {
            return bad("weight_decay", self.weight_decay.to_string());
        }
        if !(0.0..1.0).contains(&self.beta1) {
            return bad("beta1", self.beta1.to_string());
        }
        if !(0.0..1.0).contains(&self.beta2) {
            return bad("beta2", self.beta2.to_string());
        }
        if !(self.adam_eps > 0.0) {
            return bad("adam_eps", self.adam_eps.to_string());
        }
        if !(self.clip_norm > 0.0) {
            return bad("clip_norm", self.clip_norm.to_string());
        }
        if self.global_batch == 0 {
            return bad("global_batch", "0".into());
        }
        if self.micro_batch == 0 || self.micro_batch > self.global_batch {
            return bad("micro_batch", self.micro_batch.to_string());
        }
        if !(self.val_fraction > 0.0 && self.val_fraction < 1.0) {
            return bad("val_fraction", self.val_fraction.to_string());
        }
        Ok(())
    }
}

/// Think-token samples of one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSamples {
    pub trace_id: u64,
    pub hidden: Vec<Vec<f64>>,
    pub labels: Vec<f64>,
}

/// Per-epoch diagnostics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochMetrics {
    pub epoch: usize,
    pub train_mse: f64,
    pub val_mse: f64,
    /// Mean per-trace Kendall tau-b on the validation traces.
    pub kendall: f64,
    /// `(p, overlap of GT top-20% within predicted top-p%)` for p = 20, 30, …, 90.
    pub overlap: Vec<(u32, f64)>,
}

impl EpochMetrics {
    pub fn overlap_at(&self, p: u32) -> Option<f64> {
        self.overlap.iter().find(|(q, _)| *q == p).map(|(_, v)| *v)
    }
}

pub const OVERLAP_GRID: [u32; 8] = [20, 30, 40, 50, 60, 70, 80, 90];

#[derive(Debug, Clone)]
pub struct TrainResult {
    pub params: PredictorParams,
    pub history: Vec<EpochMetrics>,
    pub train_ids: Vec<u64>,
    pub val_ids: Vec<u64>,
}

/// Tie-corrected Kendall rank correlation (tau-b). Returns 0 when either
/// input is constant (no ordering to correlate).
pub fn kendall_tau(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Shape(format!("kendall_tau on lengths {} and {}", a.len(), b.len())));
    }
    if a.len() < 2 {
        return Err(Error::Value("kendall_tau needs at least two observations".into()));
    }
    let n = a.len();
    let (mut conc, mut disc, mut ties_a, mut ties_b) = (0i64, 0i64, 0i64, 0i64);
    for i in 0..n {
        for j in i + 1..n {
            let da = a[i].partial_cmp(&a[j]).ok_or_else(|| Error::Value("NaN in kendall_tau".into()))?;
            let db = b[i].partial_cmp(&b[j]).ok_or_else(|| Error::Value("NaN in kendall_tau".into()))?;
            use std::cmp::Ordering::Equal;
            match (da, db) {
                (Equal, Equal) => {
                    ties_a += 1;
                    ties_b += 1;
                }
                (Equal, _) => ties_a += 1,
                (_, Equal) => ties_b += 1,
                _ if da == db => conc += 1,
                _ => disc += 1,
            }
        }
    }
    let n0 = (n * (n - 1) / 2) as i64;
    let den = (((n0 - ties_a) as f64) * ((n0 - ties_b) as f64)).sqrt();
    if den == 0.0 {
        return Ok(0.0);
    }
    Ok((conc - disc) as f64 / den)
}

/// Fraction of the ground-truth top-`gt_p`% contained in the predicted
/// top-`pred_p`% (sets rounded up, ties toward later positions).
pub fn overlap_rate(gt: &[f64], pred: &[f64], gt_p: f64, pred_p: f64) -> Result<f64> {
    if gt.len() != pred.len() {
        return Err(Error::Shape(format!("overlap_rate on lengths {} and {}", gt.len(), pred.len())));
    }
    for p in [gt_p, pred_p] {
        if !(p > 0.0 && p <= 100.0) {
            return Err(Error::Config(format!("overlap percentage must be in (0, 100], got {p}")));
        }
    }
    let g = top_indices(gt, retained_count(gt.len(), gt_p));
    if g.is_empty() {
        return Ok(1.0);
    }
    let pset: HashSet<usize> = top_indices(pred, retained_count(pred.len(), pred_p)).into_iter().collect();
    Ok(g.iter().filter(|i| pset.contains(i)).count() as f64 / g.len() as f64)
}

/// Deterministic trace-level split: returns `(train, validation)` indices.
pub fn split_traces(n: usize, val_fraction: f64, seed: u64) -> Result<(Vec<usize>, Vec<usize>)> {
    let n_val = (n as f64 * val_fraction).round() as usize;
    if n_val == 0 || n_val >= n {
        return Err(Error::Config(format!(
            "{n} traces cannot be split with validation fraction {val_fraction}: a split would be empty"
        )));
    }
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let val = idx.split_off(n - n_val);
    Ok((idx, val))
}

/// `(mse, mean Kendall tau, overlap grid)` of `params` on `traces`.
pub fn evaluate(params: &PredictorParams, traces: &[&TraceSamples]) -> Result<(f64, f64, Vec<(u32, f64)>)> {
    params.validate()?;
    let mut se = 0.0;
    let mut count = 0usize;
    let mut tau = 0.0;
    let mut ranked = 0usize;
    let mut overlap = vec![0.0; OVERLAP_GRID.len()];
    for t in traces {
        let preds: Vec<f64> = t.hidden.iter().map(|h| predict(params, h)).collect::<Result<_>>()?;
        for (p, l) in preds.iter().zip(&t.labels) {
            se += (p - l) * (p - l);
        }
        count += preds.len();
        if preds.len() >= 2 {
            tau += kendall_tau(&t.labels, &preds)?;
            for (o, &p) in overlap.iter_mut().zip(&OVERLAP_GRID) {
                *o += overlap_rate(&t.labels, &preds, 20.0, p as f64)?;
            }
            ranked += 1;
        }
    }
    if count == 0 {
        return Err(Error::Value("no samples to evaluate".into()));
    }
    let r = ranked.max(1) as f64;
    Ok((se / count as f64, tau / r, OVERLAP_GRID.iter().zip(overlap).map(|(&p, o)| (p, o / r)).collect()))
}

struct AdamW {
    m: Vec<f64>,
    v: Vec<f64>,
    t: i32,
}

/// Trains from the default seeded initialisation.
pub fn train(traces: &[TraceSamples], cfg: &TrainConfig) -> Result<TrainResult> {
    let d = traces
        .iter()
        .flat_map(|t| t.hidden.first())
        .map(|h| h.len())
        .next()
        .ok_or_else(|| Error::Config("no training samples".into()))?;
    train_from(init_params(d, cfg.seed)?, traces, cfg)
}

/// Trains starting from `init`.
pub fn train_from(init: PredictorParams, traces: &[TraceSamples], cfg: &TrainConfig) -> Result<TrainResult> {
    cfg.validate()?;
    init.validate()?;
    let d = init.input_dim();
    for t in traces {
        if t.hidden.len() != t.labels.len() {
            return Err(Error::Shape(format!("trace {}: {} hidden states but {} labels", t.trace_id, t.hidden.len(), t.labels.len())));
        }
        if let Some(h) = t.hidden.iter().find(|h| h.len() != d) {
            return Err(Error::Shape(format!("trace {}: hidden dim {} but predictor expects {d}", t.trace_id, h.len())));
        }
        if t.labels.iter().any(|l| !(*l >= 0.0) || !l.is_finite()) {
            return Err(Error::Value(format!("trace {}: labels must be finite and >= 0", t.trace_id)));
        }
    }
    let (tr_idx, va_idx) = split_traces(traces.len(), cfg.val_fraction, cfg.seed)?;
    let train_set: Vec<&TraceSamples> = tr_idx.iter().map(|&i| &traces[i]).collect();
    let val_set: Vec<&TraceSamples> = va_idx.iter().map(|&i| &traces[i]).collect();
    let samples: Vec<(&[f64], f64)> = train_set
        .iter()
        .flat_map(|t| t.hidden.iter().zip(&t.labels).map(|(h, &l)| (h.as_slice(), l)))
        .collect();
    if samples.is_empty() || val_set.iter().all(|t| t.labels.is_empty()) {
        return Err(Error::Config("empty training or validation split".into()));
    }

    let mut params = init;
    let (h1, h2) = params.hidden_dims();
    let np = params.num_params();
    let mut opt = AdamW { m: vec![0.0; np], v: vec![0.0; np], t: 0 };
    let steps_per_epoch = samples.len().div_ceil(cfg.global_batch);
    let total_steps = (steps_per_epoch * cfg.epochs).max(1);
    let mut order: Vec<usize> = (0..samples.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_0f_7a41);
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut grads = MlpParams::zeros(d, h1, h2);
    let mut micro = MlpParams::zeros(d, h1, h2);

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.global_batch) {
            zero(&mut grads);
            let scale = 2.0 / batch.len() as f64;
            for chunk in batch.chunks(cfg.micro_batch) {
                zero(&mut micro);
                for &i in chunk {
                    let (x, label) = samples[i];
                    let act = forward_raw(&params, x);
                    backward_raw(&params, &act, scale * (act.score - label), &mut micro);
                }
                for (g, m) in grads.parts_mut().into_iter().zip(micro.parts()) {
                    for (a, b) in g.iter_mut().zip(m) {
                        *a += b;
                    }
                }
            }
            let lr_t = cfg.lr * 0.5 * (1.0 + (std::f64::consts::PI * opt.t as f64 / total_steps as f64).cos());
            adamw_step(&mut params, &grads, &mut opt, cfg, lr_t);
        }
        let (train_mse, _, _) = evaluate(&params, &train_set)?;
        let (val_mse, kendall, overlap) = evaluate(&params, &val_set)?;
        if !train_mse.is_finite() || !val_mse.is_finite() {
            return Err(Error::Value(format!(
                "training diverged at epoch {epoch} (loss is not finite); last good epoch {}",
                epoch - 1
            )));
        }
        history.push(EpochMetrics { epoch, train_mse, val_mse, kendall, overlap });
    }
    Ok(TrainResult {
        params,
        history,
        train_ids: train_set.iter().map(|t| t.trace_id).collect(),
        val_ids: val_set.iter().map(|t| t.trace_id).collect(),
    })
}

fn zero(p: &mut MlpParams) {
    for part in p.parts_mut() {
        part.fill(0.0);
    }
}

fn adamw_step(params: &mut MlpParams, grads: &MlpParams, opt: &mut AdamW, cfg: &TrainConfig, lr: f64) {
    let norm = grads.parts().iter().flat_map(|p| p.iter()).map(|g| g * g).sum::<f64>().sqrt();
    let clip = if norm > cfg.clip_norm { cfg.clip_norm / norm } else { 1.0 };
    opt.t += 1;
    let bc1 = 1.0 - cfg.beta1.powi(opt.t);
    let bc2 = 1.0 - cfg.beta2.powi(opt.t);
    let mut off = 0;
    for (k, (p, g)) in params.parts_mut().into_iter().zip(grads.parts()).enumerate() {
        // Weight matrices sit at even indices (w1, w2, w3); biases are not decayed.
        let decay = if k % 2 == 0 { cfg.weight_decay } else { 0.0 };
        for (j, (w, &gr)) in p.iter_mut().zip(g).enumerate() {
            let gr = gr * clip;
            let m = &mut opt.m[off + j];
            let v = &mut opt.v[off + j];
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * gr;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * gr * gr;
            let update = (*m / bc1) / ((*v / bc2).sqrt() + cfg.adam_eps);
            *w -= lr * (update + decay * *w);
        }
        off += p.len();
    }
}

/// History CSV: `epoch,train_mse,val_mse,kendall,overlap_20_in_20,…,overlap_20_in_90`.
pub fn write_history_csv<W: Write>(mut w: W, history: &[EpochMetrics]) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    let cols: Vec<String> = OVERLAP_GRID.iter().map(|p| format!("overlap_20_in_{p}")).collect();
    writeln!(w, "epoch,train_mse,val_mse,kendall,{}", cols.join(",")).map_err(io)?;
    for m in history {
        let ov: Vec<String> = m.overlap.iter().map(|(_, v)| v.to_string()).collect();
        writeln!(w, "{},{},{},{},{}", m.epoch, m.train_mse, m.val_mse, m.kendall, ov.join(",")).map_err(io)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct Tensor {
    name: String,
    shape: Vec<usize>,
    data: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct CheckpointFile {
    format: String,
    input_dim: usize,
    hidden: [usize; 2],
    tensors: Vec<Tensor>,
    train_config: Option<TrainConfig>,
}

const CHECKPOINT_FORMAT: &str = "dynts-predictor-v1";

/// JSON checkpoint of named tensors with shapes and an optional config echo.
pub fn save_checkpoint<W: Write>(w: W, params: &PredictorParams, cfg: Option<&TrainConfig>) -> Result<()> {
    params.validate()?;
    let (h1, h2) = params.hidden_dims();
    let t = |name: &str, shape: Vec<usize>, data: &[f64]| Tensor { name: name.into(), shape, data: data.to_vec() };
    let file = CheckpointFile {
        format: CHECKPOINT_FORMAT.into(),
        input_dim: params.input_dim(),
        hidden: [h1, h2],
        tensors: vec![
            t("w1", vec![params.w1.rows, params.w1.cols], &params.w1.data),
            t("b1", vec![h1], &params.b1),
            t("w2", vec![params.w2.rows, params.w2.cols], &params.w2.data),
            t("b2", vec![h2], &params.b2),
            t("w3", vec![params.w3.rows, params.w3.cols], &params.w3.data),
            t("b3", vec![1], &params.b3),
        ],
        train_config: cfg.copied(),
    };
    serde_json::to_writer_pretty(w, &file).map_err(|e| Error::Format(e.to_string()))
}

pub fn load_checkpoint<R: Read>(r: R) -> Result<PredictorParams> {
    let file: CheckpointFile = serde_json::from_reader(r).map_err(|e| Error::Format(e.to_string()))?;
    if file.format != CHECKPOINT_FORMAT {
        return Err(Error::Format(format!("unknown checkpoint format '{}'", file.format)));
    }
    let get = |name: &str| -> Result<&Tensor> {
        file.tensors.iter().find(|t| t.name == name).ok_or_else(|| Error::Format(format!("checkpoint is missing tensor {name}")))
    };
    let mat = |name: &str| -> Result<Matrix> {
        let t = get(name)?;
        if t.shape.len() != 2 {
            return Err(Error::Format(format!("tensor {name} must be 2-D")));
        }
        Matrix::new(t.shape[0], t.shape[1], t.data.clone())
    };
    let vec = |name: &str| -> Result<Vec<f64>> {
        let t = get(name)?;
        if t.shape.len() != 1 || t.shape[0] != t.data.len() {
            return Err(Error::Format(format!("tensor {name} shape does not match its data")));
        }
        Ok(t.data.clone())
    };
    let p = MlpParams { w1: mat("w1")?, b1: vec("b1")?, w2: mat("w2")?, b2: vec("b2")?, w3: mat("w3")?, b3: vec("b3")? };
    p.validate()?;
    if p.input_dim() != file.input_dim || p.hidden_dims() != (file.hidden[0], file.hidden[1]) {
        return Err(Error::Format("checkpoint header disagrees with tensor shapes".into()));
    }
    Ok(p)
}
