//! Hand-constructed three-layer attention circuit for the needle task.
//!
//! Residual stream features (one-hot unless noted):
//! `BIAS` (constant 1), `TOK` (token id), `PREV_s` (token at offset `s`,
//! `s = 1..=D+1`), `DUP` (this digit already occurred), `MATCH` (token lies in
//! the queried binding), `COPY` (digit to emit).
//!
//! - Layer 0: head `s−1` attends exactly `s` positions back (rotary peak from
//!   the highest-frequency pairs) and writes `PREV_s`; the next head writes
//!   `DUP` by finding an earlier copy of the current digit.
//! - Layer 1: a matching head compares the key ids in the row's window
//!   (`TOK`, `PREV_1..D+1`) with the question's key token; a hit writes `MATCH`.
//! - Layer 2: an induction head. THINK_CLOSE looks for the `MATCH` token
//!   preceded by `VAL`; an answer digit `v` (flagged by `DUP`) looks for the
//!   `MATCH` token preceded by `v`. The found digit goes to `COPY`.
//! - Logit head: digits read `COPY`; ANSWER_END is a constant that wins once
//!   the induction head spreads out over the binding (end of value).
//!
//! Duplicate detection uses one rotary pair per digit with key `(1, 0)` and
//! query `(0, −A)`, giving logit `A·sin(θΔ)`: zero for the row itself,
//! positive for every earlier copy. All layer-0/1 heads carry this term, which
//! makes answer rows attend the critical trace digits.
//!
//! Logit gaps are kept above ~800 so every softmax is exactly one-hot (or
//! exactly uniform) in `f64`.

use super::{LayerWeights, Model, ModelConfig, ModelKind, TransformerWeights};
use crate::error::{Error, Result};
use crate::numkernel::{rotary_theta, Matrix};
use crate::synthdata::{TaskParams, Vocab, ANSWER_END, NUM_DIGITS, QUESTION, THINK_CLOSE, THINK_OPEN, VAL};
use std::sync::Arc;

const POS_PAIRS: usize = 4;
const POS_SCALE: f64 = 1000.0;
/// Minimum logit of the duplicate term at the smallest relevant distance.
const DUP_FLOOR: f64 = 10_000.0;
const MATCH_A: f64 = 4000.0;
const MATCH_B: f64 = 4000.0;
const MATCH_SINK: f64 = 6000.0;
const IND_A: f64 = 4000.0;
const IND_SINK: f64 = 6000.0;
const DUP_SINK: f64 = 6000.0;
const LOGIT_SCALE: f64 = 10.0;
const END_LEVEL: f64 = 0.7;

/// Default model shape for the circuit.
pub fn planted_config(task: &TaskParams) -> Result<ModelConfig> {
    Ok(ModelConfig {
        n_layers: 3,
        n_heads: 4,
        d_model: 256,
        vocab_size: task.vocab()?.size(),
        max_pos: task.max_pos,
    })
}

struct Layout {
    v: usize,
    p: usize,
    tok: usize,
    prev: usize,
    dup: usize,
    matched: usize,
    copy: usize,
    total: usize,
}

impl Layout {
    fn new(v: usize, p: usize) -> Self {
        let tok = 1;
        let prev = tok + v;
        let dup = prev + p * v;
        let matched = dup + 1;
        let copy = matched + 1;
        Self { v, p, tok, prev, dup, matched, copy, total: copy + NUM_DIGITS }
    }
    const BIAS: usize = 0;
    fn tok(&self, t: u32) -> usize {
        self.tok + t as usize
    }
    fn prev(&self, s: usize, t: u32) -> usize {
        debug_assert!(s >= 1 && s <= self.p);
        self.prev + (s - 1) * self.v + t as usize
    }
}

/// Writes into one head's query/key rows, pre-scaled so that
/// `q·k / √d_head` equals the requested logit contribution.
struct HeadWriter<'a> {
    wq: &'a mut Matrix,
    wk: &'a mut Matrix,
    base: usize,
    sqrt_dh: f64,
}

impl HeadWriter<'_> {
    fn q(&mut self, pair: usize, coord: usize, feat: usize, logit: f64) {
        self.wq.add_at(self.base + 2 * pair + coord, feat, logit * self.sqrt_dh);
    }
    fn k(&mut self, pair: usize, coord: usize, feat: usize, val: f64) {
        self.wk.add_at(self.base + 2 * pair + coord, feat, val);
    }
}

struct Pairs {
    dup: Vec<usize>,
    dup_scale: f64,
    /// Low-frequency pairs, lowest frequency first.
    content: Vec<usize>,
}

fn choose_pairs(dh: usize, max_pos: usize) -> Result<Pairs> {
    let n = dh / 2;
    // Duplicate pairs: sin(θΔ) must stay positive on 1..max_pos.
    let first_dup = (POS_PAIRS..n)
        .find(|&j| rotary_theta(j, dh) * max_pos as f64 <= 0.97 * std::f64::consts::PI)
        .ok_or_else(|| too_small(dh, max_pos))?;
    let dup: Vec<usize> = (first_dup..first_dup + NUM_DIGITS).collect();
    if *dup.last().unwrap() >= n {
        return Err(too_small(dh, max_pos));
    }
    let min_sin = dup
        .iter()
        .map(|&j| {
            let t = rotary_theta(j, dh);
            (t).sin().min((t * max_pos as f64).sin())
        })
        .fold(f64::INFINITY, f64::min);
    let content: Vec<usize> = (first_dup + NUM_DIGITS..n).rev().collect();
    Ok(Pairs { dup, dup_scale: DUP_FLOOR / min_sin, content })
}

fn too_small(dh: usize, max_pos: usize) -> Error {
    Error::Config(format!(
        "head dim {dh} cannot host the circuit at max_pos {max_pos}: need 4 positional, 10 duplicate and enough low-frequency rotary pairs (d_head >= 64 for max_pos <= 96)"
    ))
}

/// Builds the planted circuit for tasks drawn from `task`.
pub fn build_planted_model(task: &TaskParams, config: ModelConfig) -> Result<Model> {
    config.validate()?;
    task.validate()?;
    let vocab = task.vocab()?;
    let v = vocab.size();
    let d = task.digits_per_value;
    let p = d + 1;
    let dh = config.d_head();
    let requirements = format!(
        "minimum: n_layers >= 3, n_heads >= {} (digits_per_value + 2), d_head >= max(vocab {v}, 64), d_model >= residual width",
        d + 2
    );
    if config.vocab_size != v {
        return Err(Error::Config(format!("vocab_size {} does not match vocabulary {v}", config.vocab_size)));
    }
    if config.n_layers < 3 || config.n_heads < d + 2 || dh < v {
        return Err(Error::Config(format!("config too small for the planted circuit; {requirements}")));
    }
    let lay = Layout::new(v, p);
    if lay.total > config.d_model {
        return Err(Error::Config(format!(
            "residual needs {} dims, d_model is {}; {requirements}",
            lay.total, config.d_model
        )));
    }
    if config.max_pos < task.sequence_len() {
        return Err(Error::Config(format!("max_pos {} below sequence length {}", config.max_pos, task.sequence_len())));
    }
    let pairs = choose_pairs(dh, config.max_pos)?;
    let layer1_pairs = vocab.num_keys + 2;
    let layer2_pairs = NUM_DIGITS + 3;
    if pairs.content.len() < layer1_pairs || dh / 2 - POS_PAIRS < layer2_pairs {
        return Err(too_small(dh, config.max_pos));
    }

    let dm = config.d_model;
    let sqrt_dh = (dh as f64).sqrt();
    let digit_tok = |i: usize| Vocab::digit(i);

    let mut embed = Matrix::zeros(v, dm);
    for t in 0..v {
        embed.set(t, Layout::BIAS, 1.0);
        embed.set(t, lay.tok(t as u32), 1.0);
    }

    let dup_terms = |w: &mut HeadWriter| {
        for (i, &j) in pairs.dup.iter().enumerate() {
            w.k(j, 0, lay.tok(digit_tok(i)), 1.0);
            w.q(j, 1, lay.tok(digit_tok(i)), -pairs.dup_scale);
        }
    };
    let sink = |w: &mut HeadWriter, pair: usize, logit: f64| {
        w.q(pair, 0, Layout::BIAS, logit);
        w.k(pair, 0, lay.tok(QUESTION), 1.0);
    };

    let mut layers = Vec::with_capacity(config.n_layers);

    // Layer 0: offset heads and the duplicate head.
    {
        let mut l = LayerWeights { wq: Matrix::zeros(dm, dm), wk: Matrix::zeros(dm, dm), wv: Matrix::zeros(dm, dm), wo: Matrix::zeros(dm, dm) };
        for h in 0..config.n_heads {
            let mut w = HeadWriter { wq: &mut l.wq, wk: &mut l.wk, base: h * dh, sqrt_dh };
            dup_terms(&mut w);
            if h < p {
                let s = (h + 1) as f64;
                for j in 0..POS_PAIRS {
                    let th = rotary_theta(j, dh) * s;
                    w.q(j, 0, Layout::BIAS, POS_SCALE * th.cos());
                    w.q(j, 1, Layout::BIAS, -POS_SCALE * th.sin());
                    w.k(j, 0, Layout::BIAS, 1.0);
                }
                for t in 0..v {
                    l.wv.set(h * dh + t, lay.tok(t as u32), 1.0);
                    l.wo.set(lay.prev(h + 1, t as u32), h * dh + t, 1.0);
                }
            } else {
                sink(&mut w, pairs.content[0], DUP_SINK);
                if h == p {
                    for i in 0..NUM_DIGITS {
                        l.wv.set(h * dh, lay.tok(digit_tok(i)), 1.0);
                    }
                    l.wo.set(lay.dup, h * dh, 1.0);
                }
            }
        }
        layers.push(l);
    }

    // Layer 1: matching heads (head 0 writes MATCH, the others are silent copies).
    {
        let mut l = LayerWeights { wq: Matrix::zeros(dm, dm), wk: Matrix::zeros(dm, dm), wv: Matrix::zeros(dm, dm), wo: Matrix::zeros(dm, dm) };
        let sink_pair = pairs.content[0];
        let b_pair = pairs.content[1];
        let key_pairs = &pairs.content[2..2 + vocab.num_keys];
        for h in 0..config.n_heads {
            let mut w = HeadWriter { wq: &mut l.wq, wk: &mut l.wk, base: h * dh, sqrt_dh };
            dup_terms(&mut w);
            sink(&mut w, sink_pair, MATCH_SINK);
            w.q(b_pair, 0, Layout::BIAS, MATCH_B);
            w.k(b_pair, 0, lay.prev(1, QUESTION), 1.0);
            w.k(b_pair, 0, lay.tok(QUESTION), -1.0);
            for (kidx, &j) in key_pairs.iter().enumerate() {
                let kt = vocab.key(kidx);
                w.k(j, 0, lay.tok(kt), 1.0);
                w.q(j, 0, lay.tok(kt), MATCH_A);
                for s in 1..=p {
                    w.q(j, 0, lay.prev(s, kt), MATCH_A);
                }
                // THINK_OPEN at offset s−1 means the question's key sits at offset s.
                w.q(j, 0, lay.tok(THINK_OPEN), -MATCH_A);
                for s in 1..p {
                    w.q(j, 0, lay.prev(s, THINK_OPEN), -MATCH_A);
                }
            }
        }
        l.wv.set(0, lay.prev(1, QUESTION), 1.0);
        l.wv.set(0, lay.tok(QUESTION), -1.0);
        l.wo.set(lay.matched, 0, 1.0);
        layers.push(l);
    }

    // Layer 2 (and any further layers): induction heads; only the first
    // head of layer 2 writes COPY.
    for li in 2..config.n_layers {
        let mut l = LayerWeights { wq: Matrix::zeros(dm, dm), wk: Matrix::zeros(dm, dm), wv: Matrix::zeros(dm, dm), wo: Matrix::zeros(dm, dm) };
        let low: Vec<usize> = (POS_PAIRS..dh / 2).rev().collect();
        let sink_pair = low[0];
        let match_pair = low[1];
        let val_pair = low[2];
        let digit_pairs = &low[3..3 + NUM_DIGITS];
        for h in 0..config.n_heads {
            let mut w = HeadWriter { wq: &mut l.wq, wk: &mut l.wk, base: h * dh, sqrt_dh };
            sink(&mut w, sink_pair, IND_SINK);
            w.q(match_pair, 0, lay.dup, 2.0 * IND_A);
            w.q(match_pair, 0, lay.tok(THINK_CLOSE), 2.0 * IND_A);
            w.k(match_pair, 0, lay.matched, 1.0);
            w.k(match_pair, 0, lay.prev(1, QUESTION), -1.0);
            w.k(match_pair, 0, lay.tok(QUESTION), 1.0);
            w.q(val_pair, 0, lay.tok(THINK_CLOSE), IND_A);
            w.k(val_pair, 0, lay.prev(1, VAL), 1.0);
            for (i, &j) in digit_pairs.iter().enumerate() {
                w.q(j, 0, lay.tok(digit_tok(i)), IND_A);
                w.k(j, 0, lay.prev(1, digit_tok(i)), 1.0);
            }
        }
        if li == 2 {
            for i in 0..NUM_DIGITS {
                l.wv.set(i, lay.tok(digit_tok(i)), 1.0);
                l.wo.set(lay.copy + i, i, 1.0);
            }
        }
        layers.push(l);
    }

    let mut out = Matrix::zeros(v, dm);
    for i in 0..NUM_DIGITS {
        out.set(digit_tok(i) as usize, lay.copy + i, LOGIT_SCALE);
    }
    out.set(ANSWER_END as usize, Layout::BIAS, END_LEVEL * LOGIT_SCALE);

    let w = TransformerWeights { embed, layers, out };
    w.check(&config)?;
    Ok(Model { config, kind: ModelKind::Planted(Arc::new(w)) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cachemgr::FullPolicy;
    use crate::synthdata::{assemble_sequence, gen_dataset, gen_instance, Instance};
    use crate::toymodel::{decode, teacher_forced_trace, DecodeOptions, Prompt};

    pub(crate) fn prompt(inst: &Instance) -> Prompt {
        let mut forced = vec![THINK_OPEN];
        forced.extend(&inst.trace);
        forced.push(THINK_CLOSE);
        Prompt { prefill: inst.question.clone(), forced }
    }

    #[test]
    fn degenerate_instance_solved() {
        let tp = TaskParams { num_keys: 1, num_distractor_pairs: 0, filler_length: 0, digits_per_value: 1, ..TaskParams::default() };
        let m = build_planted_model(&tp, planted_config(&tp).unwrap()).unwrap();
        for seed in 0..10 {
            let inst = gen_instance(&TaskParams { seed, ..tp }).unwrap();
            let r = decode(&m, &prompt(&inst), &mut FullPolicy::default(), &DecodeOptions::greedy(4)).unwrap();
            assert!(r.exact_match(&inst.answer), "seed {seed}: {:?} vs {:?}", r.generated, inst.answer);
        }
    }

    #[test]
    fn solves_default_task_with_concentrated_attention() {
        let tp = TaskParams::default();
        let m = build_planted_model(&tp, planted_config(&tp).unwrap()).unwrap();
        for inst in gen_dataset(&tp, 20, 100).unwrap() {
            let r = decode(&m, &prompt(&inst), &mut FullPolicy::default(), &DecodeOptions::greedy(6)).unwrap();
            assert!(r.exact_match(&inst.answer), "seed {}: {:?} vs {:?}", inst.seed, r.generated, inst.answer);
            let seq = assemble_sequence(&inst);
            let (rec, _) = teacher_forced_trace(&m, &seq).unwrap();
            let crit: std::collections::HashSet<usize> = inst.critical_positions().into_iter().collect();
            let a0 = inst.think_close_pos() + 1;
            for step in &rec.steps[a0..a0 + inst.answer.len()] {
                let mut on = 0.0;
                for r in &step.rows {
                    on += r.keys.iter().zip(&r.weights).filter(|(p, _)| crit.contains(p)).map(|(_, w)| w).sum::<f64>();
                }
                assert!(on / step.rows.len() as f64 > 0.99);
            }
        }
    }

    #[test]
    fn too_small_configs_rejected() {
        let tp = TaskParams::default();
        let mut cfg = planted_config(&tp).unwrap();
        cfg.n_layers = 2;
        let e = build_planted_model(&tp, cfg).unwrap_err();
        assert!(e.to_string().contains("minimum"));
        let mut cfg = planted_config(&tp).unwrap();
        cfg.n_heads = 8;
        cfg.d_model = 256;
        assert!(build_planted_model(&tp, cfg).is_err());
        let mut cfg = planted_config(&tp).unwrap();
        cfg.vocab_size += 1;
        assert!(build_planted_model(&tp, cfg).is_err());
    }
}
