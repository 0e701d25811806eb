//! Decoder-only, attention-only transformer with an explicit KV cache and
//! exposed attention weights.
//!
//! Three model sources share one `forward_step`:
//! - [`planted`]: a hand-built induction circuit that solves the needle task,
//! - [`scripted`]: attention rows fabricated from ground truth (pipeline oracle),
//! - random weights (for equivalence and cost instrumentation).
//!
//! Keys are rotated with their absolute position when produced and are never
//! re-rotated, so evicting entries leaves gaps but does not re-index anything.

pub mod planted;
pub mod scripted;

use crate::cachemgr::{CacheEntry, CachePolicy, EvictionEvent, Phase, PhaseTracker};
use crate::error::{Error, Result};
use crate::numkernel::{dot, rotary_in_place, softmax, Matrix};
use crate::synthdata::{TokenId, ANSWER_END};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};
use std::sync::Arc;

pub use planted::build_planted_model;
pub use scripted::{build_scripted_model, RestWeighting, ScriptedParams};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub vocab_size: usize,
    pub max_pos: usize,
}

impl ModelConfig {
    pub fn d_head(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_layers == 0 || self.n_heads == 0 || self.d_model == 0 || self.vocab_size == 0 {
            return Err(Error::Config("model dimensions must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model={} not divisible by n_heads={}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_head() % 2 != 0 {
            return Err(Error::Config(format!("head dim {} must be even for rotary", self.d_head())));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerWeights {
    pub wq: Matrix,
    pub wk: Matrix,
    pub wv: Matrix,
    pub wo: Matrix,
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerWeights {
    /// `V × d` token embeddings.
    pub embed: Matrix,
    pub layers: Vec<LayerWeights>,
    /// `V × d` logit head.
    pub out: Matrix,
}

impl TransformerWeights {
    fn check(&self, cfg: &ModelConfig) -> Result<()> {
        let d = cfg.d_model;
        let sq = |m: &Matrix| m.rows == d && m.cols == d;
        let ok = self.embed.rows == cfg.vocab_size
            && self.embed.cols == d
            && self.out.rows == cfg.vocab_size
            && self.out.cols == d
            && self.layers.len() == cfg.n_layers
            && self.layers.iter().all(|l| sq(&l.wq) && sq(&l.wk) && sq(&l.wv) && sq(&l.wo));
        if !ok {
            return Err(Error::Shape("weights inconsistent with model config".into()));
        }
        Ok(())
    }

    /// Order-sensitive hash of all weights (used to assert the backbone is frozen).
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut mix = |m: &Matrix| {
            for v in &m.data {
                h = (h ^ v.to_bits()).wrapping_mul(0x0000_0100_0000_01b3);
            }
        };
        mix(&self.embed);
        for l in &self.layers {
            mix(&l.wq);
            mix(&l.wk);
            mix(&l.wv);
            mix(&l.wo);
        }
        mix(&self.out);
        h
    }
}

#[derive(Debug, Clone)]
pub enum ModelKind {
    Planted(Arc<TransformerWeights>),
    Random(Arc<TransformerWeights>),
    Scripted(scripted::ScriptedModel),
}

/// An immutable model. Cloning is cheap (weights are shared).
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub kind: ModelKind,
}

impl Model {
    pub fn variant(&self) -> &'static str {
        match self.kind {
            ModelKind::Planted(_) => "planted",
            ModelKind::Random(_) => "random",
            ModelKind::Scripted(_) => "scripted",
        }
    }

    /// Binds a scripted model to the instance whose ground truth drives it;
    /// weight-based models are returned unchanged.
    pub fn bind(&self, instance: &crate::synthdata::Instance) -> Model {
        match &self.kind {
            ModelKind::Scripted(s) => Model { config: self.config, kind: ModelKind::Scripted(s.bind(instance)) },
            _ => self.clone(),
        }
    }

    pub fn weights(&self) -> Option<&TransformerWeights> {
        match &self.kind {
            ModelKind::Planted(w) | ModelKind::Random(w) => Some(w),
            ModelKind::Scripted(_) => None,
        }
    }

    /// Checksum of everything that defines the backbone.
    pub fn checksum(&self) -> u64 {
        match &self.kind {
            ModelKind::Planted(w) | ModelKind::Random(w) => w.checksum(),
            ModelKind::Scripted(s) => s.checksum(),
        }
    }
}

/// Seeded Gaussian-ish random weights (uniform with matching variance).
pub fn build_random_model(config: ModelConfig, seed: u64) -> Result<Model> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = config.d_model;
    let a = (3.0 / d as f64).sqrt();
    let mut mat = |rows: usize, cols: usize, scale: f64| {
        Matrix::from_fn(rows, cols, |_, _| rng.gen_range(-scale..scale))
    };
    let embed = mat(config.vocab_size, d, 3f64.sqrt());
    let layers = (0..config.n_layers)
        .map(|_| LayerWeights { wq: mat(d, d, a), wk: mat(d, d, a), wv: mat(d, d, a), wo: mat(d, d, a) })
        .collect();
    let out = mat(config.vocab_size, d, a);
    let w = TransformerWeights { embed, layers, out };
    w.check(&config)?;
    Ok(Model { config, kind: ModelKind::Random(Arc::new(w)) })
}

/// Multiply-add counts of the attention kernels for one step.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct MacCount {
    /// Query·key products.
    pub score: u64,
    /// Weight·value accumulations.
    pub mix: u64,
}

impl MacCount {
    /// FLOPs counting one multiply and one add per MAC.
    pub fn flops(&self) -> u64 {
        2 * (self.score + self.mix)
    }
}

/// Everything one decode step produces.
#[derive(Debug, Clone)]
pub struct StepOutput {
    pub logits: Vec<f64>,
    /// Final-block output feeding the logit head (predictor input).
    pub hidden: Vec<f64>,
    /// Absolute positions attended to: the cache view followed by the current position.
    pub positions: Vec<usize>,
    /// One row per `(layer, head)`, index `layer * n_heads + head`, aligned with `positions`.
    pub attention: Vec<Vec<f64>>,
    pub new_keys: Vec<Vec<f64>>,
    pub new_values: Vec<Vec<f64>>,
    pub macs: MacCount,
}

impl StepOutput {
    pub fn argmax(&self) -> TokenId {
        argmax(&self.logits)
    }
}

/// Greedy choice; ties go to the lower id.
pub fn argmax(logits: &[f64]) -> TokenId {
    let mut best = 0;
    for (i, &v) in logits.iter().enumerate() {
        if v > logits[best] {
            best = i;
        }
    }
    best as TokenId
}

/// One forward step over `cache_view` plus the new token. Pure: the cache is
/// not modified.
pub fn forward_step(model: &Model, cache_view: &[&CacheEntry], token: TokenId, position: usize) -> Result<StepOutput> {
    if let Some(last) = cache_view.last() {
        if position <= last.position {
            return Err(Error::Value(format!(
                "position collision: new position {position} not after cached position {}",
                last.position
            )));
        }
    }
    if token as usize >= model.config.vocab_size {
        return Err(Error::Value(format!("token id {token} outside vocabulary")));
    }
    match &model.kind {
        ModelKind::Planted(w) | ModelKind::Random(w) => Ok(forward_weights(w, &model.config, cache_view, token, position)),
        ModelKind::Scripted(s) => s.forward(&model.config, cache_view, token, position),
    }
}

fn forward_weights(w: &TransformerWeights, cfg: &ModelConfig, view: &[&CacheEntry], token: TokenId, position: usize) -> StepOutput {
    let d = cfg.d_model;
    let dh = cfg.d_head();
    let scale = 1.0 / (dh as f64).sqrt();
    let s = view.len() + 1;
    let mut positions: Vec<usize> = view.iter().map(|e| e.position).collect();
    positions.push(position);

    let mut x = w.embed.row(token as usize).to_vec();
    let mut attention = Vec::with_capacity(cfg.n_layers * cfg.n_heads);
    let mut new_keys = Vec::with_capacity(cfg.n_layers);
    let mut new_values = Vec::with_capacity(cfg.n_layers);
    let mut macs = MacCount::default();
    let mut scores = vec![0.0; s];

    for (l, lw) in w.layers.iter().enumerate() {
        let mut q = lw.wq.matvec_unchecked(&x);
        let mut k = lw.wk.matvec_unchecked(&x);
        let v = lw.wv.matvec_unchecked(&x);
        for h in 0..cfg.n_heads {
            rotary_in_place(&mut q[h * dh..(h + 1) * dh], position);
            rotary_in_place(&mut k[h * dh..(h + 1) * dh], position);
        }
        let mut concat = vec![0.0; d];
        for h in 0..cfg.n_heads {
            let r = h * dh..(h + 1) * dh;
            let qh = &q[r.clone()];
            for (i, e) in view.iter().enumerate() {
                scores[i] = dot(qh, &e.keys[l][r.clone()]) * scale;
            }
            scores[s - 1] = dot(qh, &k[r.clone()]) * scale;
            macs.score += (s * dh) as u64;
            let weights = softmax(&scores).expect("finite attention logits");
            let out = &mut concat[r.clone()];
            for (i, &a) in weights.iter().enumerate() {
                let vv = if i + 1 == s { &v[r.clone()] } else { &view[i].values[l][r.clone()] };
                for (o, &vj) in out.iter_mut().zip(vv) {
                    *o += a * vj;
                }
            }
            macs.mix += (s * dh) as u64;
            attention.push(weights);
        }
        let delta = lw.wo.matvec_unchecked(&concat);
        for (xi, di) in x.iter_mut().zip(delta) {
            *xi += di;
        }
        new_keys.push(k);
        new_values.push(v);
    }
    let logits = w.out.matvec_unchecked(&x);
    StepOutput { logits, hidden: x, positions, attention, new_keys, new_values, macs }
}

/// Attention row for one `(layer, head)` at one step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionRow {
    pub layer: usize,
    pub head: usize,
    pub keys: Vec<usize>,
    pub weights: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AttentionStep {
    pub position: usize,
    pub token: TokenId,
    pub rows: Vec<AttentionRow>,
}

/// Per-step attention rows keyed by absolute positions.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct AttentionRecord {
    pub n_layers: usize,
    pub n_heads: usize,
    pub steps: Vec<AttentionStep>,
}

impl AttentionRecord {
    pub fn new(n_layers: usize, n_heads: usize) -> Self {
        Self { n_layers, n_heads, steps: Vec::new() }
    }

    pub fn push(&mut self, out: &StepOutput, token: TokenId, position: usize) {
        let rows = out
            .attention
            .iter()
            .enumerate()
            .map(|(i, w)| AttentionRow {
                layer: i / self.n_heads,
                head: i % self.n_heads,
                keys: out.positions.clone(),
                weights: w.clone(),
            })
            .collect();
        self.steps.push(AttentionStep { position, token, rows });
    }

    pub fn step_at(&self, position: usize) -> Option<&AttentionStep> {
        self.steps.iter().find(|s| s.position == position)
    }

    /// One JSON object per step.
    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<()> {
        for s in &self.steps {
            let line = serde_json::to_string(s).map_err(|e| Error::Format(e.to_string()))?;
            writeln!(w, "{line}").map_err(|e| Error::Format(e.to_string()))?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R, n_layers: usize, n_heads: usize) -> Result<Self> {
        let mut rec = Self::new(n_layers, n_heads);
        for line in r.lines() {
            let line = line.map_err(|e| Error::Format(e.to_string()))?;
            if !line.trim().is_empty() {
                rec.steps.push(serde_json::from_str(&line).map_err(|e| Error::Format(e.to_string()))?);
            }
        }
        Ok(rec)
    }
}

/// Sampling settings; temperature 0 means greedy.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Sampling {
    pub temperature: f64,
    pub top_k: usize,
    pub top_p: f64,
    pub seed: u64,
}

impl Default for Sampling {
    fn default() -> Self {
        Self { temperature: 0.0, top_k: 0, top_p: 1.0, seed: 0 }
    }
}

fn sample(logits: &[f64], s: &Sampling, rng: &mut ChaCha8Rng) -> TokenId {
    if s.temperature <= 0.0 {
        return argmax(logits);
    }
    let mut idx: Vec<usize> = (0..logits.len()).collect();
    idx.sort_by(|&a, &b| logits[b].total_cmp(&logits[a]).then(a.cmp(&b)));
    if s.top_k > 0 {
        idx.truncate(s.top_k);
    }
    let scaled: Vec<f64> = idx.iter().map(|&i| logits[i] / s.temperature).collect();
    let probs = softmax(&scaled).expect("finite logits");
    let mut cum = 0.0;
    let mut keep = probs.len();
    for (i, p) in probs.iter().enumerate() {
        cum += p;
        if cum >= s.top_p {
            keep = i + 1;
            break;
        }
    }
    let total: f64 = probs[..keep].iter().sum();
    let mut u = rng.gen_range(0.0..total);
    for (i, p) in probs[..keep].iter().enumerate() {
        if u < *p {
            return idx[i] as TokenId;
        }
        u -= p;
    }
    idx[keep - 1] as TokenId
}

/// Question prefill plus tokens replayed (teacher forced) through the policy
/// before free generation starts. The think trace is replayed because the
/// backbone cannot author a random trace itself.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Prompt {
    pub prefill: Vec<TokenId>,
    pub forced: Vec<TokenId>,
}

impl Prompt {
    /// The question as prefill, then `THINK_OPEN trace THINK_CLOSE` forced.
    pub fn from_instance(instance: &crate::synthdata::Instance) -> Self {
        let mut forced = Vec::with_capacity(instance.trace.len() + 2);
        forced.push(crate::synthdata::THINK_OPEN);
        forced.extend_from_slice(&instance.trace);
        forced.push(crate::synthdata::THINK_CLOSE);
        Self { prefill: instance.question.clone(), forced }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DecodeOptions {
    /// Maximum number of freely generated tokens.
    pub max_steps: usize,
    pub record_attention: bool,
    pub sampling: Sampling,
}

impl DecodeOptions {
    pub fn greedy(max_steps: usize) -> Self {
        Self { max_steps, record_attention: false, sampling: Sampling::default() }
    }
}

/// Cache bookkeeping for one decode step (prefill excluded).
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepTrace {
    /// 1-based decode step index.
    pub step: usize,
    pub position: usize,
    pub token: TokenId,
    /// Effective length attended by this step (cache after append, before eviction).
    pub pre_len: usize,
    /// Effective length after the eviction hook.
    pub post_len: usize,
    pub macs: MacCount,
}

#[derive(Debug, Clone)]
pub struct DecodeResult {
    /// Freely generated tokens (including a terminating ANSWER_END if emitted).
    pub generated: Vec<TokenId>,
    pub record: Option<AttentionRecord>,
    /// `h_t` for every decode step (forced and generated).
    pub hidden: Vec<Vec<f64>>,
    pub steps: Vec<StepTrace>,
    pub events: Vec<EvictionEvent>,
    pub prefill_len: usize,
}

impl DecodeResult {
    /// Generated tokens before the terminator.
    pub fn answer(&self) -> &[TokenId] {
        match self.generated.iter().position(|&t| t == ANSWER_END) {
            Some(i) => &self.generated[..i],
            None => &self.generated,
        }
    }

    /// Exact match: the expected tokens followed by ANSWER_END.
    pub fn exact_match(&self, expected: &[TokenId]) -> bool {
        self.generated.len() == expected.len() + 1
            && &self.generated[..expected.len()] == expected
            && self.generated[expected.len()] == ANSWER_END
    }
}

/// Prefills the prompt, hands the prefill entries to `policy.init`, then runs
/// forced and free decode steps with the policy's append/evict hooks.
pub fn decode(model: &Model, prompt: &Prompt, policy: &mut dyn CachePolicy, opts: &DecodeOptions) -> Result<DecodeResult> {
    if opts.max_steps == 0 {
        return Err(Error::Config("max_steps must be >= 1".into()));
    }
    if prompt.prefill.is_empty() && prompt.forced.is_empty() {
        return Err(Error::Config("empty prompt".into()));
    }
    let mut record = opts.record_attention.then(|| AttentionRecord::new(model.config.n_layers, model.config.n_heads));
    let mut entries: Vec<CacheEntry> = Vec::with_capacity(prompt.prefill.len());
    let mut last = None;
    for (pos, &tok) in prompt.prefill.iter().enumerate() {
        let refs: Vec<&CacheEntry> = entries.iter().collect();
        let out = forward_step(model, &refs, tok, pos)?;
        if let Some(r) = record.as_mut() {
            r.push(&out, tok, pos);
        }
        entries.push(CacheEntry::from_step(&out, tok, pos, f64::INFINITY, Phase::Question));
        last = Some(out.logits);
    }
    let m = entries.len();
    policy.init(entries)?;
    run_loop(model, policy, m, &prompt.forced, last, opts, record)
}

/// Decodes from an already-built cache (e.g. a retention experiment's
/// question + selected think entries), starting at `start_pos`.
pub fn decode_from_cache(
    model: &Model,
    entries: Vec<CacheEntry>,
    start_pos: usize,
    forced: &[TokenId],
    policy: &mut dyn CachePolicy,
    opts: &DecodeOptions,
) -> Result<DecodeResult> {
    if opts.max_steps == 0 {
        return Err(Error::Config("max_steps must be >= 1".into()));
    }
    if forced.is_empty() {
        return Err(Error::Config("decoding from a cache needs at least one forced token".into()));
    }
    let record = opts.record_attention.then(|| AttentionRecord::new(model.config.n_layers, model.config.n_heads));
    policy.init(entries)?;
    run_loop(model, policy, start_pos, forced, None, opts, record)
}

fn run_loop(
    model: &Model,
    policy: &mut dyn CachePolicy,
    start_pos: usize,
    forced: &[TokenId],
    mut last_logits: Option<Vec<f64>>,
    opts: &DecodeOptions,
    mut record: Option<AttentionRecord>,
) -> Result<DecodeResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(opts.sampling.seed);
    let mut tracker = PhaseTracker::default();
    let mut res = DecodeResult {
        generated: Vec::new(),
        record: None,
        hidden: Vec::new(),
        steps: Vec::new(),
        events: Vec::new(),
        prefill_len: policy.len(),
    };
    let mut pos = start_pos;
    let mut fi = 0;
    loop {
        let token = if fi < forced.len() {
            fi += 1;
            forced[fi - 1]
        } else {
            let logits = last_logits.as_ref().ok_or_else(|| Error::Config("no logits to decode from".into()))?;
            let t = sample(logits, &opts.sampling, &mut rng);
            res.generated.push(t);
            if t == ANSWER_END || res.generated.len() >= opts.max_steps || pos >= model.config.max_pos {
                break;
            }
            t
        };
        let out = {
            let view = policy.view();
            forward_step(model, &view, token, pos)?
        };
        if let Some(r) = record.as_mut() {
            r.push(&out, token, pos);
        }
        let phase = tracker.advance(token);
        let score = policy.score(&out, token, phase)?;
        let step = res.steps.len() + 1;
        policy.append(CacheEntry::from_step(&out, token, pos, score, phase))?;
        let pre_len = policy.len();
        let event = policy.maybe_evict(step)?;
        let post_len = policy.len();
        if post_len > policy.budget() {
            return Err(Error::Cache(format!(
                "policy {} holds {post_len} entries after step {step}, budget {}",
                policy.name(),
                policy.budget()
            )));
        }
        res.steps.push(StepTrace { step, position: pos, token, pre_len, post_len, macs: out.macs });
        if let Some(e) = event {
            res.events.push(e);
        }
        res.hidden.push(out.hidden);
        last_logits = Some(out.logits);
        pos += 1;
    }
    res.record = record;
    Ok(res)
}

/// Result of teacher forcing a full sequence with an unbounded cache.
#[derive(Debug, Clone)]
pub struct TeacherRun {
    pub record: AttentionRecord,
    pub hidden: Vec<Vec<f64>>,
    /// Cache entry of every position (keys/values computed with full context).
    pub entries: Vec<CacheEntry>,
}

/// Processes every token of `sequence` with a full cache, recording attention
/// and hidden states.
pub fn teacher_force(model: &Model, sequence: &[TokenId]) -> Result<TeacherRun> {
    if sequence.len() > model.config.max_pos {
        return Err(Error::Value(format!(
            "sequence length {} exceeds max positions {}",
            sequence.len(),
            model.config.max_pos
        )));
    }
    let mut record = AttentionRecord::new(model.config.n_layers, model.config.n_heads);
    let mut hidden = Vec::with_capacity(sequence.len());
    let mut entries: Vec<CacheEntry> = Vec::with_capacity(sequence.len());
    let mut tracker = PhaseTracker::default();
    let prefill = sequence.iter().position(|&t| t == crate::synthdata::THINK_OPEN).unwrap_or(0);
    for (pos, &tok) in sequence.iter().enumerate() {
        let refs: Vec<&CacheEntry> = entries.iter().collect();
        let out = forward_step(model, &refs, tok, pos)?;
        record.push(&out, tok, pos);
        let phase = if pos < prefill { Phase::Question } else { tracker.advance(tok) };
        entries.push(CacheEntry::from_step(&out, tok, pos, 0.0, phase));
        hidden.push(out.hidden);
    }
    Ok(TeacherRun { record, hidden, entries })
}

/// `(AttentionRecord, h_t list)` for a teacher-forced sequence.
pub fn teacher_forced_trace(model: &Model, sequence: &[TokenId]) -> Result<(AttentionRecord, Vec<Vec<f64>>)> {
    let run = teacher_force(model, sequence)?;
    Ok((run.record, run.hidden))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cachemgr::FullPolicy;

    fn tiny() -> Model {
        build_random_model(ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, vocab_size: 12, max_pos: 64 }, 1).unwrap()
    }

    #[test]
    fn empty_cache_attends_self() {
        let m = tiny();
        let out = forward_step(&m, &[], 3, 0).unwrap();
        assert_eq!(out.attention.len(), 4);
        for row in &out.attention {
            assert_eq!(row, &vec![1.0]);
        }
        assert_eq!(out.hidden.len(), 8);
    }

    #[test]
    fn forward_is_pure() {
        let m = tiny();
        let e0 = CacheEntry::from_step(&forward_step(&m, &[], 3, 0).unwrap(), 3, 0, 0.0, Phase::Question);
        let a = forward_step(&m, &[&e0], 5, 1).unwrap();
        let b = forward_step(&m, &[&e0], 5, 1).unwrap();
        assert_eq!(a.logits, b.logits);
        assert_eq!(a.attention, b.attention);
        assert!(forward_step(&m, &[&e0], 5, 0).is_err());
    }

    #[test]
    fn matching_key_gets_attention() {
        // One layer, one head, d=2: keys are the embedding itself.
        let cfg = ModelConfig { n_layers: 1, n_heads: 1, d_model: 2, vocab_size: 3, max_pos: 8 };
        let ident = Matrix::new(2, 2, vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let big = Matrix::new(2, 2, vec![40.0, 0.0, 0.0, 40.0]).unwrap();
        let w = TransformerWeights {
            embed: Matrix::new(3, 2, vec![1.0, 0.0, 0.0, 1.0, 1.0, 0.0]).unwrap(),
            layers: vec![LayerWeights { wq: big, wk: ident.clone(), wv: ident.clone(), wo: Matrix::zeros(2, 2) }],
            out: Matrix::zeros(3, 2),
        };
        let m = Model { config: cfg, kind: ModelKind::Random(Arc::new(w)) };
        // positions 0 and 0 would collide, so use 0 and 1 with rotation angle θ·Δ = 1 rad at most
        let e0 = CacheEntry::from_step(&forward_step(&m, &[], 0, 0).unwrap(), 0, 0, 0.0, Phase::Question);
        let e1 = CacheEntry::from_step(&forward_step(&m, &[&e0], 1, 1).unwrap(), 1, 1, 0.0, Phase::Question);
        // query token 2 has embedding (1,0), same direction as entry 0; at position 2
        // the rotation differences are 2 rad and 1 rad, so compare against a direct evaluation.
        let out = forward_step(&m, &[&e0, &e1], 2, 2).unwrap();
        let q = crate::numkernel::rotary_apply(&[40.0, 0.0], 2).unwrap();
        let logits: Vec<f64> = [&e0, &e1]
            .iter()
            .map(|e| dot(&q, &e.keys[0]) / 2f64.sqrt())
            .chain(std::iter::once(dot(&q, &crate::numkernel::rotary_apply(&[1.0, 0.0], 2).unwrap()) / 2f64.sqrt()))
            .collect();
        let expect = softmax(&logits).unwrap();
        for (a, b) in out.attention[0].iter().zip(&expect) {
            assert!((a - b).abs() < 1e-12);
        }
        // self (identical direction, Δ=0) gets the most weight
        assert_eq!(argmax(&out.attention[0]), 2);
    }

    #[test]
    fn decode_max_steps_and_determinism() {
        let m = tiny();
        let prompt = Prompt { prefill: vec![0, 5], forced: vec![1, 7, 7] };
        let mut p1 = FullPolicy::default();
        let r1 = decode(&m, &prompt, &mut p1, &DecodeOptions::greedy(1)).unwrap();
        assert_eq!(r1.generated.len(), 1);
        let mut p2 = FullPolicy::default();
        let mut opts = DecodeOptions::greedy(5);
        let a = decode(&m, &prompt, &mut p2, &opts).unwrap();
        opts.record_attention = true;
        let mut p3 = FullPolicy::default();
        let b = decode(&m, &prompt, &mut p3, &opts).unwrap();
        assert_eq!(a.generated, b.generated);
        assert!(b.record.is_some());
        for s in &b.record.as_ref().unwrap().steps {
            for r in &s.rows {
                assert!((r.weights.iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn sampling_is_seeded() {
        let m = tiny();
        let prompt = Prompt { prefill: vec![0, 5], forced: vec![] };
        let mut opts = DecodeOptions::greedy(6);
        opts.sampling = Sampling { temperature: 0.6, top_k: 20, top_p: 0.95, seed: 9 };
        let a = decode(&m, &prompt, &mut FullPolicy::default(), &opts).unwrap();
        let b = decode(&m, &prompt, &mut FullPolicy::default(), &opts).unwrap();
        assert_eq!(a.generated, b.generated);
    }

    #[test]
    fn teacher_force_lengths() {
        let m = tiny();
        let seq = vec![0, 5, 1, 7, 8, 2, 9, 3];
        let (rec, hs) = teacher_forced_trace(&m, &seq).unwrap();
        assert_eq!(rec.steps.len(), seq.len());
        assert_eq!(hs.len(), seq.len());
        let mut buf = Vec::new();
        rec.write_jsonl(&mut buf).unwrap();
        let back = AttentionRecord::read_jsonl(&buf[..], 2, 2).unwrap();
        assert_eq!(back, rec);
        let long: Vec<TokenId> = vec![0; 65];
        assert!(teacher_force(&m, &long).is_err());
    }
}
