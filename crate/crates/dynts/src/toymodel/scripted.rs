//! Scripted model: attention rows are fabricated from the instance's ground
//! truth instead of computed from weights.
//!
//! - Question/think rows attend uniformly to everything present.
//! - Answer rows put `1 − ε` uniformly on the critical positions present and
//!   `ε` on the remaining think positions present (uniformly, or in
//!   proportion to a fixed per-token weight).
//! - Logits replay the instance sequence; from THINK_CLOSE on, the correct
//!   token is only produced while every critical position is still cached.
//! - `h_t` is a token embedding plus a critical-flag direction plus seeded noise.

use super::{MacCount, ModelConfig, StepOutput};
use crate::cachemgr::CacheEntry;
use crate::error::{Error, Result};
use crate::numkernel::Matrix;
use crate::synthdata::{assemble_sequence, Instance, TokenId, Vocab, ANSWER_END};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::HashSet;
use std::sync::Arc;

/// How the answer rows spread the `ε` mass over non-critical think tokens.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RestWeighting {
    Uniform,
    /// Proportional to [`token_weight`].
    TokenWeighted,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ScriptedParams {
    pub epsilon: f64,
    pub rest: RestWeighting,
    /// Norm of the critical-flag direction added to `h_t`.
    pub signal: f64,
    /// Standard deviation of the per-position noise in `h_t`.
    pub noise: f64,
    pub seed: u64,
}

impl Default for ScriptedParams {
    fn default() -> Self {
        Self { epsilon: 0.1, rest: RestWeighting::Uniform, signal: 1.0, noise: 0.05, seed: 0 }
    }
}

/// Fixed weight in `1..=8` per token id.
pub fn token_weight(t: TokenId) -> f64 {
    let h = (t as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15) >> 61;
    1.0 + h as f64
}

#[derive(Debug, Clone)]
pub(crate) struct Binding {
    sequence: Vec<TokenId>,
    critical: Vec<usize>,
    critical_set: HashSet<usize>,
    think_start: usize,
    think_close: usize,
    instance_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ScriptedModel {
    pub params: ScriptedParams,
    embed: Arc<Matrix>,
    direction: Arc<Vec<f64>>,
    binding: Option<Arc<Binding>>,
}

/// A scripted model for `config`; bind it to an instance with [`super::Model::bind`].
pub fn build_scripted_model(config: ModelConfig, params: ScriptedParams) -> Result<super::Model> {
    config.validate()?;
    if !(0.0..=1.0).contains(&params.epsilon) {
        return Err(Error::Config(format!("epsilon must be in [0, 1], got {}", params.epsilon)));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let d = config.d_model;
    let embed = Matrix::from_fn(config.vocab_size, d, |_, _| rng.gen_range(-1.0..1.0) * 3f64.sqrt() / (d as f64).sqrt());
    let mut dir: Vec<f64> = (0..d).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt();
    for v in dir.iter_mut() {
        *v *= params.signal / norm;
    }
    Ok(super::Model {
        config,
        kind: super::ModelKind::Scripted(ScriptedModel {
            params,
            embed: Arc::new(embed),
            direction: Arc::new(dir),
            binding: None,
        }),
    })
}

impl ScriptedModel {
    pub(crate) fn bind(&self, inst: &Instance) -> Self {
        let think_start = inst.trace_start();
        let critical = inst.critical_positions();
        let b = Binding {
            sequence: assemble_sequence(inst),
            critical_set: critical.iter().cloned().collect(),
            critical,
            think_start,
            think_close: inst.think_close_pos(),
            instance_seed: inst.seed,
        };
        Self { binding: Some(Arc::new(b)), ..self.clone() }
    }

    pub(crate) fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for v in self.embed.data.iter().chain(self.direction.iter()) {
            h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
        }
        h
    }

    fn hidden(&self, b: &Binding, token: TokenId, position: usize) -> Vec<f64> {
        let mut h = self.embed.row(token as usize).to_vec();
        if b.critical_set.contains(&position) {
            for (x, u) in h.iter_mut().zip(self.direction.iter()) {
                *x += u;
            }
        }
        if self.params.noise > 0.0 {
            let seed = self
                .params
                .seed
                .wrapping_mul(0x9E37_79B9_7F4A_7C15)
                ^ b.instance_seed.wrapping_mul(0xC2B2_AE3D_27D4_EB4F)
                ^ (position as u64).wrapping_mul(0x1656_67B1_9E37_79F9);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let scale = self.params.noise * 3f64.sqrt();
            for x in h.iter_mut() {
                *x += rng.gen_range(-1.0..1.0) * scale;
            }
        }
        h
    }

    fn row(&self, b: &Binding, positions: &[usize], token_at: impl Fn(usize) -> TokenId, position: usize) -> Vec<f64> {
        let n = positions.len();
        if position <= b.think_close {
            return vec![1.0 / n as f64; n];
        }
        let is_crit = |p: usize| b.critical_set.contains(&p);
        let is_rest = |p: usize| p >= b.think_start && p < b.think_close && !is_crit(p);
        let n_crit = positions.iter().filter(|&&p| is_crit(p)).count();
        let rest_w: Vec<f64> = positions
            .iter()
            .map(|&p| {
                if !is_rest(p) {
                    0.0
                } else {
                    match self.params.rest {
                        RestWeighting::Uniform => 1.0,
                        RestWeighting::TokenWeighted => token_weight(token_at(p)),
                    }
                }
            })
            .collect();
        let rest_total: f64 = rest_w.iter().sum();
        let eps = self.params.epsilon;
        let (crit_mass, rest_mass) = match (n_crit > 0, rest_total > 0.0) {
            (true, true) => (1.0 - eps, eps),
            (true, false) => (1.0, 0.0),
            (false, true) => (0.0, 1.0),
            (false, false) => return vec![1.0 / n as f64; n],
        };
        positions
            .iter()
            .zip(&rest_w)
            .map(|(&p, &w)| {
                if is_crit(p) {
                    crit_mass / n_crit as f64
                } else if w > 0.0 {
                    rest_mass * w / rest_total
                } else {
                    0.0
                }
            })
            .collect()
    }

    pub(crate) fn forward(&self, cfg: &ModelConfig, view: &[&CacheEntry], token: TokenId, position: usize) -> Result<StepOutput> {
        let b = self
            .binding
            .as_ref()
            .ok_or_else(|| Error::Config("scripted model used before binding it to an instance".into()))?;
        let mut positions: Vec<usize> = view.iter().map(|e| e.position).collect();
        positions.push(position);
        let token_at = |p: usize| {
            if p == position {
                token
            } else {
                view.iter().find(|e| e.position == p).map(|e| e.token).unwrap_or(0)
            }
        };
        let row = self.row(b, &positions, token_at, position);
        let attention = vec![row; cfg.n_layers * cfg.n_heads];

        let next = if position + 1 >= b.sequence.len() {
            ANSWER_END
        } else {
            let want = b.sequence[position + 1];
            let all_present = b.critical.iter().all(|p| positions.binary_search(p).is_ok());
            if position < b.think_close || all_present {
                want
            } else {
                wrong_token(want)
            }
        };
        let mut logits = vec![0.0; cfg.vocab_size];
        logits[next as usize] = 1.0;
        Ok(StepOutput {
            logits,
            hidden: self.hidden(b, token, position),
            positions,
            attention,
            new_keys: vec![Vec::new(); cfg.n_layers],
            new_values: vec![Vec::new(); cfg.n_layers],
            macs: MacCount::default(),
        })
    }
}

fn wrong_token(want: TokenId) -> TokenId {
    match Vocab::digit_value(want) {
        Some(v) => Vocab::digit((v + 1) % 10),
        None => Vocab::digit(0),
    }
}
