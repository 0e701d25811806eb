//! Budgeted KV cache: the dual-window state machine and the baseline
//! eviction policies, all behind one [`CachePolicy`] contract
//! (`init`, `append`, `maybe_evict`).
//!
//! Budget `B = W_q + W_s + W_l`: `W_q` is the prefill (question) size `M`,
//! `W_l` the local recency window and `W_s` the scored selection window. When
//! the cache reaches `B` entries, the top `k = ⌊r·W_s⌋` selection entries by
//! score survive and the other `K_evict = W_s − k` are evicted in one batch.
//! Ties always break toward the more recent position.

use crate::error::{Error, Result};
use crate::synthdata::{TokenId, THINK_CLOSE};
use crate::toymodel::StepOutput;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::Write;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    Question,
    Think,
    Answer,
}

/// Phase of decoded tokens: thinking up to and including THINK_CLOSE, answer after it.
#[derive(Debug, Clone, Copy, Default)]
pub struct PhaseTracker {
    closed: bool,
}

impl PhaseTracker {
    pub fn advance(&mut self, token: TokenId) -> Phase {
        if self.closed {
            return Phase::Answer;
        }
        if token == THINK_CLOSE {
            self.closed = true;
        }
        Phase::Think
    }
}

/// Score used by policies that do not score tokens themselves.
pub fn protected_score(phase: Phase) -> f64 {
    match phase {
        Phase::Think => 0.0,
        Phase::Question | Phase::Answer => f64::INFINITY,
    }
}

/// One cached position: keys/values for every layer plus bookkeeping.
#[derive(Debug, Clone, PartialEq)]
pub struct CacheEntry {
    pub position: usize,
    pub token: TokenId,
    pub keys: Vec<Vec<f64>>,
    pub values: Vec<Vec<f64>>,
    pub score: f64,
    pub phase: Phase,
}

impl CacheEntry {
    pub fn from_step(out: &StepOutput, token: TokenId, position: usize, score: f64, phase: Phase) -> Self {
        Self { position, token, keys: out.new_keys.clone(), values: out.new_values.clone(), score, phase }
    }

    /// An entry without key/value payload (for cache-logic tests and fuzzing).
    pub fn bare(position: usize, token: TokenId, score: f64, phase: Phase) -> Self {
        Self { position, token, keys: Vec::new(), values: Vec::new(), score, phase }
    }
}

/// `(B, W_l, r)`; `W_s` follows from the prefill size.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BudgetConfig {
    pub budget: usize,
    pub local: usize,
    pub ratio: f64,
}

/// Window sizes derived for a given prefill size.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Windows {
    pub question: usize,
    pub selection: usize,
    pub local: usize,
    /// `k = ⌊r·W_s⌋`
    pub retain: usize,
    /// `K_evict = W_s − k`
    pub evict: usize,
}

impl BudgetConfig {
    pub fn windows(&self, m: usize) -> Result<Windows> {
        if !(0.0..1.0).contains(&self.ratio) {
            return Err(Error::Config(format!("retention ratio must be in [0, 1), got {}", self.ratio)));
        }
        if m > self.budget {
            return Err(Error::Config(format!("prefill of {m} entries exceeds budget {}", self.budget)));
        }
        if m + self.local >= self.budget {
            return Err(Error::Config(format!(
                "prefill {m} + local window {} leave no selection window in budget {}",
                self.local, self.budget
            )));
        }
        let selection = self.budget - m - self.local;
        let retain = (self.ratio * selection as f64).floor() as usize;
        Ok(Windows { question: m, selection, local: self.local, retain, evict: selection - retain })
    }
}

/// One batched eviction.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct EvictionEvent {
    pub step: usize,
    pub pre_len: usize,
    pub post_len: usize,
    pub evicted: Vec<usize>,
    pub retained: Vec<usize>,
    pub policy: String,
}

/// JSON-lines eviction log.
pub fn write_eviction_log<W: Write>(mut w: W, events: &[EvictionEvent]) -> Result<()> {
    for e in events {
        let line = serde_json::to_string(e).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

/// The common policy contract driven by the decode loop:
/// `score` → `append` → `maybe_evict` once per decode step.
pub trait CachePolicy {
    fn name(&self) -> &'static str;
    /// Installs the prefill entries.
    fn init(&mut self, prefill: Vec<CacheEntry>) -> Result<()>;
    /// Score to attach to the entry produced by `out`.
    fn score(&mut self, _out: &StepOutput, _token: TokenId, phase: Phase) -> Result<f64> {
        Ok(protected_score(phase))
    }
    fn append(&mut self, entry: CacheEntry) -> Result<()>;
    fn maybe_evict(&mut self, step: usize) -> Result<Option<EvictionEvent>>;
    /// Entries in position order.
    fn view(&self) -> Vec<&CacheEntry>;
    fn len(&self) -> usize;
    fn budget(&self) -> usize;
    fn events(&self) -> &[EvictionEvent];
}

fn check_increasing(last: Option<usize>, pos: usize) -> Result<()> {
    if let Some(l) = last {
        if pos <= l {
            return Err(Error::Cache(format!("duplicate or out-of-order position {pos} (last {l})")));
        }
    }
    Ok(())
}

fn check_sorted(entries: &[CacheEntry]) -> Result<()> {
    if entries.windows(2).any(|w| w[0].position >= w[1].position) {
        return Err(Error::Cache("prefill positions must be strictly increasing".into()));
    }
    Ok(())
}

/// Dual-window state: protected question entries, a scored selection window
/// ordered by position, and a recency ring.
#[derive(Debug, Clone)]
pub struct DualWindowState {
    question: Vec<CacheEntry>,
    selection: Vec<CacheEntry>,
    local: VecDeque<CacheEntry>,
    config: BudgetConfig,
    windows: Windows,
    log: Vec<EvictionEvent>,
    last_pos: Option<usize>,
    label: &'static str,
}

impl DualWindowState {
    /// Installs the prefill entries with score `+∞`.
    pub fn init(prefill: Vec<CacheEntry>, config: BudgetConfig) -> Result<Self> {
        check_sorted(&prefill)?;
        let windows = config.windows(prefill.len())?;
        if windows.evict == 0 {
            return Err(Error::Config("retention ratio keeps the whole selection window; nothing would be evicted".into()));
        }
        let last_pos = prefill.last().map(|e| e.position);
        let question = prefill
            .into_iter()
            .map(|mut e| {
                e.score = f64::INFINITY;
                e.phase = Phase::Question;
                e
            })
            .collect();
        Ok(Self {
            question,
            selection: Vec::new(),
            local: VecDeque::new(),
            config,
            windows,
            log: Vec::new(),
            last_pos,
            label: "dynts",
        })
    }

    pub(crate) fn with_label(mut self, label: &'static str) -> Self {
        self.label = label;
        self
    }

    pub fn windows(&self) -> Windows {
        self.windows
    }

    pub fn config(&self) -> BudgetConfig {
        self.config
    }

    /// New entries enter the local window; its oldest entry overflows into
    /// the selection window with its score. Answer entries get `+∞`.
    pub fn append(&mut self, mut entry: CacheEntry, score: f64) -> Result<()> {
        check_increasing(self.last_pos, entry.position)?;
        self.last_pos = Some(entry.position);
        entry.score = if entry.phase == Phase::Answer { f64::INFINITY } else { score };
        self.local.push_back(entry);
        if self.local.len() > self.windows.local {
            let oldest = self.local.pop_front().expect("non-empty local window");
            self.selection.push(oldest);
        }
        Ok(())
    }

    /// Batched eviction once the total reaches `B`.
    pub fn maybe_evict(&mut self, step: usize) -> Result<Option<EvictionEvent>> {
        let total = self.len();
        let b = self.config.budget;
        if total > b {
            return Err(Error::Cache(format!("{total} entries exceed budget {b}")));
        }
        if total < b {
            return Ok(None);
        }
        if self.selection.len() != self.windows.selection {
            return Err(Error::Cache(format!(
                "selection window holds {} entries at the budget, expected {}",
                self.selection.len(),
                self.windows.selection
            )));
        }
        let mut order: Vec<usize> = (0..self.selection.len()).collect();
        order.sort_by(|&a, &b| {
            let (ea, eb) = (&self.selection[a], &self.selection[b]);
            eb.score.total_cmp(&ea.score).then(eb.position.cmp(&ea.position))
        });
        let mut keep = vec![false; self.selection.len()];
        for &i in &order[..self.windows.retain] {
            keep[i] = true;
        }
        let mut evicted = Vec::with_capacity(self.windows.evict);
        let mut retained = Vec::with_capacity(self.windows.retain);
        let old = std::mem::take(&mut self.selection);
        for (e, k) in old.into_iter().zip(keep) {
            if k {
                retained.push(e.position);
                self.selection.push(e);
            } else {
                evicted.push(e.position);
            }
        }
        let ev = EvictionEvent {
            step,
            pre_len: total,
            post_len: self.len(),
            evicted,
            retained,
            policy: self.label.to_string(),
        };
        self.log.push(ev.clone());
        Ok(Some(ev))
    }

    pub fn len(&self) -> usize {
        self.question.len() + self.selection.len() + self.local.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries sorted by original position (gaps where evicted).
    pub fn cache_view(&self) -> Vec<&CacheEntry> {
        self.question.iter().chain(self.selection.iter()).chain(self.local.iter()).collect()
    }

    pub fn question(&self) -> &[CacheEntry] {
        &self.question
    }

    pub fn selection(&self) -> &[CacheEntry] {
        &self.selection
    }

    pub fn local(&self) -> &VecDeque<CacheEntry> {
        &self.local
    }

    pub fn log(&self) -> &[EvictionEvent] {
        &self.log
    }
}

/// Never evicts.
#[derive(Debug, Clone, Default)]
pub struct FullPolicy {
    entries: Vec<CacheEntry>,
}

impl CachePolicy for FullPolicy {
    fn name(&self) -> &'static str {
        "full"
    }
    fn init(&mut self, prefill: Vec<CacheEntry>) -> Result<()> {
        check_sorted(&prefill)?;
        self.entries = prefill;
        Ok(())
    }
    fn append(&mut self, entry: CacheEntry) -> Result<()> {
        check_increasing(self.entries.last().map(|e| e.position), entry.position)?;
        self.entries.push(entry);
        Ok(())
    }
    fn maybe_evict(&mut self, _step: usize) -> Result<Option<EvictionEvent>> {
        Ok(None)
    }
    fn view(&self) -> Vec<&CacheEntry> {
        self.entries.iter().collect()
    }
    fn len(&self) -> usize {
        self.entries.len()
    }
    fn budget(&self) -> usize {
        usize::MAX
    }
    fn events(&self) -> &[EvictionEvent] {
        &[]
    }
}

/// Sliding window: the question entries stay pinned and only the last
/// `window` generated entries are kept.
#[derive(Debug, Clone)]
pub struct WindowPolicy {
    window: usize,
    question: Vec<CacheEntry>,
    entries: VecDeque<CacheEntry>,
    log: Vec<EvictionEvent>,
}

impl WindowPolicy {
    pub fn new(window: usize) -> Result<Self> {
        if window == 0 {
            return Err(Error::Config("window size must be >= 1".into()));
        }
        Ok(Self { window, question: Vec::new(), entries: VecDeque::new(), log: Vec::new() })
    }
}

impl CachePolicy for WindowPolicy {
    fn name(&self) -> &'static str {
        "window"
    }
    fn init(&mut self, prefill: Vec<CacheEntry>) -> Result<()> {
        check_sorted(&prefill)?;
        self.question = prefill;
        self.entries.clear();
        self.log.clear();
        Ok(())
    }
    fn append(&mut self, entry: CacheEntry) -> Result<()> {
        let last = self.entries.back().or(self.question.last()).map(|e| e.position);
        check_increasing(last, entry.position)?;
        self.entries.push_back(entry);
        Ok(())
    }
    fn maybe_evict(&mut self, step: usize) -> Result<Option<EvictionEvent>> {
        if self.entries.len() <= self.window {
            return Ok(None);
        }
        let pre = self.len();
        let mut evicted = Vec::new();
        while self.entries.len() > self.window {
            evicted.push(self.entries.pop_front().expect("non-empty").position);
        }
        let ev = EvictionEvent {
            step,
            pre_len: pre,
            post_len: self.len(),
            evicted,
            retained: self.view().iter().map(|e| e.position).collect(),
            policy: "window".into(),
        };
        self.log.push(ev.clone());
        Ok(Some(ev))
    }
    fn view(&self) -> Vec<&CacheEntry> {
        self.question.iter().chain(self.entries.iter()).collect()
    }
    fn len(&self) -> usize {
        self.question.len() + self.entries.len()
    }
    fn budget(&self) -> usize {
        self.question.len() + self.window
    }
    fn events(&self) -> &[EvictionEvent] {
        &self.log
    }
}

/// Attention-sink pattern: the first `n_sink` entries (and the question) are
/// kept as sinks, the last `W_l` are kept as recent context, and whenever the
/// cache reaches `B` the oldest entry in between is evicted.
#[derive(Debug, Clone)]
pub struct SinkRecentPolicy {
    n_sink: usize,
    inner: Steady,
}

impl SinkRecentPolicy {
    pub fn new(n_sink: usize, local: usize, budget: usize) -> Result<Self> {
        if n_sink + local >= budget {
            return Err(Error::Config(format!(
                "n_sink {n_sink} + local {local} must be below budget {budget}"
            )));
        }
        Ok(Self { n_sink, inner: Steady::new(budget, local)? })
    }
}

impl CachePolicy for SinkRecentPolicy {
    fn name(&self) -> &'static str {
        "sink_recent"
    }
    fn init(&mut self, prefill: Vec<CacheEntry>) -> Result<()> {
        self.inner.init(prefill)
    }
    fn append(&mut self, entry: CacheEntry) -> Result<()> {
        self.inner.append(entry)
    }
    fn maybe_evict(&mut self, step: usize) -> Result<Option<EvictionEvent>> {
        let Some(range) = self.inner.due()? else { return Ok(None) };
        let victim = range.start.max(self.n_sink);
        if victim >= range.end {
            return Err(Error::Cache("sink and local windows fill the whole budget".into()));
        }
        Ok(Some(self.inner.evict(step, victim, "sink_recent")))
    }
    fn view(&self) -> Vec<&CacheEntry> {
        self.inner.entries.iter().collect()
    }
    fn len(&self) -> usize {
        self.inner.entries.len()
    }
    fn budget(&self) -> usize {
        self.inner.budget
    }
    fn events(&self) -> &[EvictionEvent] {
        &self.inner.log
    }
}

/// Shared skeleton for the steady-state baselines: the question and the
/// last `local` entries are protected, and one entry is evicted whenever the
/// cache reaches the budget, so it never attends to more than `B` entries.
#[derive(Debug, Clone)]
struct Steady {
    budget: usize,
    local: usize,
    question: usize,
    entries: Vec<CacheEntry>,
    log: Vec<EvictionEvent>,
}

impl Steady {
    fn new(budget: usize, local: usize) -> Result<Self> {
        if local + 1 >= budget {
            return Err(Error::Config(format!("local window {local} leaves no evictable entries in budget {budget}")));
        }
        Ok(Self { budget, local, question: 0, entries: Vec::new(), log: Vec::new() })
    }

    fn init(&mut self, prefill: Vec<CacheEntry>) -> Result<()> {
        check_sorted(&prefill)?;
        if prefill.len() + self.local >= self.budget {
            return Err(Error::Config(format!(
                "prefill {} + local window {} leave no evictable entries in budget {}",
                prefill.len(),
                self.local,
                self.budget
            )));
        }
        self.question = prefill.len();
        self.entries = prefill;
        self.log.clear();
        Ok(())
    }

    fn append(&mut self, entry: CacheEntry) -> Result<()> {
        check_increasing(self.entries.last().map(|e| e.position), entry.position)?;
        self.entries.push(entry);
        Ok(())
    }

    /// Candidate index range (between the question and the local window) once
    /// the budget is reached.
    fn due(&self) -> Result<Option<std::ops::Range<usize>>> {
        let n = self.entries.len();
        if n > self.budget {
            return Err(Error::Cache(format!("{n} entries exceed budget {}", self.budget)));
        }
        if n < self.budget {
            return Ok(None);
        }
        Ok(Some(self.question..n - self.local))
    }

    fn evict(&mut self, step: usize, victim: usize, label: &str) -> EvictionEvent {
        let pre = self.entries.len();
        let e = self.entries.remove(victim);
        let retained = self.entries[self.question..self.entries.len() - self.local].iter().map(|e| e.position).collect();
        let ev = EvictionEvent { step, pre_len: pre, post_len: self.entries.len(), evicted: vec![e.position], retained, policy: label.into() };
        self.log.push(ev.clone());
        ev
    }
}

/// Heavy-hitter pattern: each entry's score is the attention it has received
/// so far (summed over layers and heads); on reaching the budget the lowest
/// entry outside the question and local windows is evicted (older first on ties).
#[derive(Debug, Clone)]
pub struct AccumAttentionPolicy {
    inner: Steady,
}

impl AccumAttentionPolicy {
    pub fn new(budget: usize, local: usize) -> Result<Self> {
        Ok(Self { inner: Steady::new(budget, local)? })
    }
}

impl CachePolicy for AccumAttentionPolicy {
    fn name(&self) -> &'static str {
        "accum_attention"
    }
    fn init(&mut self, prefill: Vec<CacheEntry>) -> Result<()> {
        self.inner.init(prefill)?;
        for e in self.inner.entries.iter_mut() {
            e.score = 0.0;
        }
        Ok(())
    }
    fn score(&mut self, out: &StepOutput, _token: TokenId, _phase: Phase) -> Result<f64> {
        let n = out.positions.len();
        let mut received = vec![0.0; n];
        for row in &out.attention {
            for (r, w) in received.iter_mut().zip(row) {
                *r += w;
            }
        }
        let entries = &mut self.inner.entries;
        let mut j = 0;
        for (i, &p) in out.positions[..n - 1].iter().enumerate() {
            while j < entries.len() && entries[j].position < p {
                j += 1;
            }
            match entries.get_mut(j) {
                Some(e) if e.position == p => e.score += received[i],
                _ => return Err(Error::Cache(format!("attention row references uncached position {p}"))),
            }
        }
        Ok(received[n - 1])
    }
    fn append(&mut self, entry: CacheEntry) -> Result<()> {
        self.inner.append(entry)
    }
    fn maybe_evict(&mut self, step: usize) -> Result<Option<EvictionEvent>> {
        let Some(range) = self.inner.due()? else { return Ok(None) };
        let es = &self.inner.entries;
        let victim = range
            .min_by(|&a, &b| es[a].score.total_cmp(&es[b].score).then(es[a].position.cmp(&es[b].position)))
            .expect("non-empty candidate range");
        Ok(Some(self.inner.evict(step, victim, "accum_attention")))
    }
    fn view(&self) -> Vec<&CacheEntry> {
        self.inner.entries.iter().collect()
    }
    fn len(&self) -> usize {
        self.inner.entries.len()
    }
    fn budget(&self) -> usize {
        self.inner.budget
    }
    fn events(&self) -> &[EvictionEvent] {
        &self.inner.log
    }
}

/// Control for [`AccumAttentionPolicy`]: same geometry, but the evicted entry
/// is drawn uniformly (seeded) from outside the question and local windows.
#[derive(Debug, Clone)]
pub struct RandomPolicy {
    inner: Steady,
    rng: ChaCha8Rng,
}

impl RandomPolicy {
    pub fn new(budget: usize, local: usize, seed: u64) -> Result<Self> {
        Ok(Self { inner: Steady::new(budget, local)?, rng: ChaCha8Rng::seed_from_u64(seed) })
    }
}

impl CachePolicy for RandomPolicy {
    fn name(&self) -> &'static str {
        "random"
    }
    fn init(&mut self, prefill: Vec<CacheEntry>) -> Result<()> {
        self.inner.init(prefill)
    }
    fn append(&mut self, entry: CacheEntry) -> Result<()> {
        self.inner.append(entry)
    }
    fn maybe_evict(&mut self, step: usize) -> Result<Option<EvictionEvent>> {
        let Some(range) = self.inner.due()? else { return Ok(None) };
        let victim = self.rng.gen_range(range);
        Ok(Some(self.inner.evict(step, victim, "random")))
    }
    fn view(&self) -> Vec<&CacheEntry> {
        self.inner.entries.iter().collect()
    }
    fn len(&self) -> usize {
        self.inner.entries.len()
    }
    fn budget(&self) -> usize {
        self.inner.budget
    }
    fn events(&self) -> &[EvictionEvent] {
        &self.inner.log
    }
}

/// Dual-window state scored by a caller-supplied rule (protected phases get
/// `+∞`, think tokens get `score_fn`). `DyntsPolicy` plugs the predictor in;
/// with a constant rule eviction degenerates to recency.
pub struct ScoredDualPolicy<F: FnMut(&StepOutput) -> Result<f64>> {
    config: BudgetConfig,
    state: Option<DualWindowState>,
    score_fn: F,
    label: &'static str,
}

impl<F: FnMut(&StepOutput) -> Result<f64>> ScoredDualPolicy<F> {
    pub fn new(config: BudgetConfig, label: &'static str, score_fn: F) -> Self {
        Self { config, state: None, score_fn, label }
    }

    pub fn state(&self) -> Option<&DualWindowState> {
        self.state.as_ref()
    }

    fn st(&self) -> Result<&DualWindowState> {
        self.state.as_ref().ok_or_else(|| Error::Cache("policy used before init".into()))
    }
}

impl<F: FnMut(&StepOutput) -> Result<f64>> CachePolicy for ScoredDualPolicy<F> {
    fn name(&self) -> &'static str {
        self.label
    }
    fn init(&mut self, prefill: Vec<CacheEntry>) -> Result<()> {
        self.state = Some(DualWindowState::init(prefill, self.config)?.with_label(self.label));
        Ok(())
    }
    fn score(&mut self, out: &StepOutput, _token: TokenId, phase: Phase) -> Result<f64> {
        match phase {
            Phase::Think => (self.score_fn)(out),
            _ => Ok(f64::INFINITY),
        }
    }
    fn append(&mut self, entry: CacheEntry) -> Result<()> {
        let score = entry.score;
        self.state.as_mut().ok_or_else(|| Error::Cache("policy used before init".into()))?.append(entry, score)
    }
    fn maybe_evict(&mut self, step: usize) -> Result<Option<EvictionEvent>> {
        self.state.as_mut().ok_or_else(|| Error::Cache("policy used before init".into()))?.maybe_evict(step)
    }
    fn view(&self) -> Vec<&CacheEntry> {
        self.state.as_ref().map(|s| s.cache_view()).unwrap_or_default()
    }
    fn len(&self) -> usize {
        self.state.as_ref().map(|s| s.len()).unwrap_or(0)
    }
    fn budget(&self) -> usize {
        self.config.budget
    }
    fn events(&self) -> &[EvictionEvent] {
        self.st().map(|s| s.log()).unwrap_or(&[])
    }
}
