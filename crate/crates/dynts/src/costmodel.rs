//! Analytic compute/memory model of batched eviction.
//!
//! - predictor overhead per decode step: `6d² + d` (MLP `d → 2d → d/2 → 1`, 2 FLOPs per MAC)
//! - attention cost per decode step over `S` cached entries: `4·L·d·S`
//! - eviction count by step `i`: `n_i = max(0, ⌊(M + i − B)/K⌋ + 1)`
//! - gain: `ΔC(i) = n_i·4·L·d·K − (6d² + d)`
//!
//! Static costs (projections, logit head) are identical with and without
//! eviction and cancel out of `ΔC`; [`static_flops`] reports them separately.
//!
//! Step `i` attends to the cache as it is after appending token `i` and
//! before that step's eviction, so the compute saved by an eviction is
//! realised from the following step on.

use crate::error::{Error, Result};
use crate::toymodel::StepTrace;
use serde::{Deserialize, Serialize};
use std::io::Write;

/// `6d² + d`.
pub fn predictor_flops(d: u64) -> u64 {
    6 * d * d + d
}

/// `2(d·m₁ + m₁·m₂ + m₂·m₃)` for an MLP `d → m₁ → m₂ → m₃`.
pub fn mlp_flops(d: u64, m1: u64, m2: u64, m3: u64) -> u64 {
    2 * (d * m1 + m1 * m2 + m2 * m3)
}

/// `4·L·d·S`: query·key scores plus softmax·value mixing.
pub fn attn_flops(l: u64, d: u64, s: u64) -> u64 {
    4 * l * d * s
}

/// Per-step FLOPs of the Q/K/V/O projections and the logit head, which do not
/// depend on the cache length.
pub fn static_flops(l: u64, d: u64, vocab: u64) -> u64 {
    2 * (4 * l * d * d + vocab * d)
}

/// Number of eviction events up to and including step `i`.
pub fn eviction_count(m: u64, i: u64, b: u64, k: u64) -> Result<u64> {
    if k == 0 {
        return Err(Error::Config("eviction volume K must be >= 1".into()));
    }
    let total = m + i;
    Ok(if total < b { 0 } else { (total - b) / k + 1 })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostParams {
    pub n_layers: u64,
    pub d_model: u64,
    pub prefill: u64,
    pub budget: u64,
    pub k_evict: u64,
}

impl CostParams {
    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.d_model == 0 || self.budget == 0 || self.k_evict == 0 {
            return Err(Error::Config("cost parameters L, d, B, K must be positive".into()));
        }
        if self.budget <= self.prefill {
            return Err(Error::Config(format!("budget {} must exceed prefill {}", self.budget, self.prefill)));
        }
        Ok(())
    }
}

/// `ΔC` for `n` eviction events.
pub fn gain_for_events(n: u64, l: u64, d: u64, k: u64) -> i128 {
    n as i128 * attn_flops(l, d, k) as i128 - predictor_flops(d) as i128
}

/// `ΔC(i)` with `n_i` from [`eviction_count`].
pub fn gain(i: u64, p: &CostParams) -> Result<i128> {
    p.validate()?;
    let n = eviction_count(p.prefill, i, p.budget, p.k_evict)?;
    Ok(gain_for_events(n, p.n_layers, p.d_model, p.k_evict))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BreakEven {
    /// Smallest integer `K` with positive gain.
    pub k: u64,
    /// Exact threshold `(6d² + d) / (4·L·d·n) = 1.5d/(nL) + 1/(4nL)`.
    pub threshold: f64,
    /// The `1.5d/(nL)` approximation.
    pub approx: f64,
}

pub fn break_even_k(d: u64, l: u64, n: u64) -> Result<BreakEven> {
    if d == 0 || l == 0 || n == 0 {
        return Err(Error::Config("break-even needs positive d, L and n".into()));
    }
    let num = predictor_flops(d);
    let den = 4 * l * d * n;
    Ok(BreakEven {
        k: num / den + 1,
        threshold: num as f64 / den as f64,
        approx: 3.0 * d as f64 / (2.0 * (n * l) as f64),
    })
}

/// One row of the per-step cost series.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SeriesRow {
    pub step: u64,
    /// `M + i`: entries a full cache attends to at step `i`.
    pub eff_len_base: u64,
    /// Entries the budgeted cache attends to at step `i`.
    pub eff_len_opt: u64,
    /// Entries left after the step's eviction hook.
    pub post_len_opt: u64,
    pub cum_flops_base: u64,
    /// Attention plus predictor FLOPs.
    pub cum_flops_opt: u64,
    pub mem_ratio: f64,
    /// Realised per-step gain: base attention FLOPs minus optimised attention
    /// plus predictor FLOPs.
    pub gain: i128,
    /// Instrumented FLOPs reported by the attention kernels.
    pub measured_flops: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostSeries {
    pub rows: Vec<SeriesRow>,
    /// Max optimised length over the final base length.
    pub peak_mem_ratio: f64,
    pub static_flops_per_step: u64,
}

impl CostSeries {
    /// Cumulative FLOPs ratio (optimised / base) at the last step.
    pub fn cum_flops_ratio(&self) -> f64 {
        self.rows.last().map(|r| r.cum_flops_opt as f64 / r.cum_flops_base as f64).unwrap_or(1.0)
    }

    /// CSV `step,eff_len_base,eff_len_opt,cum_flops_base,cum_flops_opt,mem_ratio,gain`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        writeln!(w, "step,eff_len_base,eff_len_opt,cum_flops_base,cum_flops_opt,mem_ratio,gain").map_err(io)?;
        for r in &self.rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                r.step, r.eff_len_base, r.eff_len_opt, r.cum_flops_base, r.cum_flops_opt, r.mem_ratio, r.gain
            )
            .map_err(io)?;
        }
        Ok(())
    }
}

/// Builds the cost series of a decode trace. `with_predictor` charges the
/// predictor head on every decode step of the optimised run; `vocab` sizes
/// the (cancelling) static term.
pub fn series(trace: &[StepTrace], p: &CostParams, with_predictor: bool, vocab: u64) -> Result<CostSeries> {
    if trace.is_empty() {
        return Err(Error::Value("empty decode trace".into()));
    }
    let (l, d) = (p.n_layers, p.d_model);
    let pred = if with_predictor { predictor_flops(d) } else { 0 };
    let mut rows = Vec::with_capacity(trace.len());
    let (mut cb, mut co) = (0u64, 0u64);
    let mut peak = 0u64;
    for (idx, t) in trace.iter().enumerate() {
        let i = idx as u64 + 1;
        if t.step as u64 != i {
            return Err(Error::Value(format!("decode trace is missing step {i} (found step {})", t.step)));
        }
        let base_len = p.prefill + i;
        let opt_len = t.pre_len as u64;
        let fb = attn_flops(l, d, base_len);
        let fo = attn_flops(l, d, opt_len) + pred;
        cb += fb;
        co += fo;
        peak = peak.max(opt_len);
        rows.push(SeriesRow {
            step: i,
            eff_len_base: base_len,
            eff_len_opt: opt_len,
            post_len_opt: t.post_len as u64,
            cum_flops_base: cb,
            cum_flops_opt: co,
            mem_ratio: opt_len as f64 / base_len as f64,
            gain: fb as i128 - fo as i128,
            measured_flops: t.macs.flops(),
        });
    }
    let final_base = rows.last().map(|r| r.eff_len_base).unwrap_or(1);
    Ok(CostSeries {
        rows,
        peak_mem_ratio: peak as f64 / final_base as f64,
        static_flops_per_step: static_flops(l, d, vocab),
    })
}
