//! Ground-truth token importance from answer-time attention, and the
//! retention experiments built on it.
//!
//! `I[j]` is the attention mass position `j` receives from every answer
//! token, summed over layers and heads. Only question and think positions
//! are scored; mass landing on delimiters, earlier answer tokens or the
//! query itself is reported as unscored, so that
//! `Σ I + unscored = K_ans · L · H` holds exactly up to rounding.

use crate::cachemgr::{CacheEntry, FullPolicy};
use crate::error::{Error, Result};
use crate::synthdata::{assemble_sequence, Instance, TokenId, ANSWER_END, THINK_CLOSE, THINK_OPEN};
use crate::toymodel::{decode_from_cache, teacher_force, AttentionRecord, DecodeOptions, Model};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::ops::Range;

/// Spans of an assembled sequence.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segments {
    pub question: Range<usize>,
    pub think_open: usize,
    pub think: Range<usize>,
    pub think_close: usize,
    pub answer: Range<usize>,
    /// Position of ANSWER_END, if the sequence has one.
    pub terminator: Option<usize>,
}

impl Segments {
    pub fn m(&self) -> usize {
        self.question.len()
    }

    pub fn think_len(&self) -> usize {
        self.think.len()
    }

    pub fn k_ans(&self) -> usize {
        self.answer.len()
    }
}

/// Splits `tokens` into question / think / answer spans.
pub fn segment(tokens: &[TokenId]) -> Result<Segments> {
    let find_all = |t: TokenId| tokens.iter().enumerate().filter(|(_, &x)| x == t).map(|(i, _)| i).collect::<Vec<_>>();
    let opens = find_all(THINK_OPEN);
    let closes = find_all(THINK_CLOSE);
    let open = match opens.as_slice() {
        [] => return Err(Error::Segment("missing think open delimiter".into())),
        [o] => *o,
        _ => return Err(Error::Segment("duplicated think open delimiter".into())),
    };
    let close = match closes.as_slice() {
        [] => return Err(Error::Segment("unterminated trace".into())),
        [c] => *c,
        _ => return Err(Error::Segment("duplicated think close delimiter".into())),
    };
    if close < open {
        return Err(Error::Segment("misordered delimiters".into()));
    }
    if close == open + 1 {
        return Err(Error::Segment("empty think span".into()));
    }
    let terminator = tokens[close + 1..].iter().position(|&t| t == ANSWER_END).map(|i| close + 1 + i);
    let answer_end = terminator.unwrap_or(tokens.len());
    if answer_end == close + 1 {
        return Err(Error::Segment("empty answer span".into()));
    }
    Ok(Segments {
        question: 0..open,
        think_open: open,
        think: open + 1..close,
        think_close: close,
        answer: close + 1..answer_end,
        terminator,
    })
}

/// Raw importance of question and think positions for one trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImportanceScores {
    /// `I` of question positions `0..M`.
    pub question: Vec<f64>,
    /// `I` of think positions, in trace order.
    pub think: Vec<f64>,
    /// Answer-step mass that landed on delimiters, answer tokens or self.
    pub unscored_mass: f64,
    pub n_layers: usize,
    pub n_heads: usize,
    pub k_ans: usize,
    pub segments: Segments,
}

impl ImportanceScores {
    pub fn scored_mass(&self) -> f64 {
        self.question.iter().chain(&self.think).sum()
    }

    /// `K_ans · L · H`: the total attention mass issued by answer steps.
    pub fn expected_mass(&self) -> f64 {
        (self.k_ans * self.n_layers * self.n_heads) as f64
    }

    /// Mean importance over the think tokens (the default threshold line).
    pub fn mean_think(&self) -> f64 {
        self.think.iter().sum::<f64>() / self.think.len() as f64
    }

    /// Mean importance over question and think tokens together.
    pub fn mean_question_think(&self) -> f64 {
        self.scored_mass() / (self.question.len() + self.think.len()) as f64
    }
}

/// Sums answer-step attention into per-position importance.
pub fn importance_scores(record: &AttentionRecord, segments: &Segments) -> Result<ImportanceScores> {
    let heads = record.n_layers * record.n_heads;
    let mut question = vec![0.0; segments.m()];
    let mut think = vec![0.0; segments.think_len()];
    let mut unscored = 0.0;
    for a in segments.answer.clone() {
        let step = record
            .steps
            .get(a)
            .filter(|s| s.position == a)
            .or_else(|| record.step_at(a))
            .ok_or_else(|| Error::Value(format!("attention record is missing answer step at position {a}")))?;
        if step.rows.len() != heads {
            return Err(Error::Shape(format!("answer step {a} has {} rows, expected {heads}", step.rows.len())));
        }
        for row in &step.rows {
            if row.keys.len() != row.weights.len() {
                return Err(Error::Shape(format!("answer step {a}: keys and weights differ in length")));
            }
            for (&k, &w) in row.keys.iter().zip(&row.weights) {
                if !(w >= 0.0) {
                    return Err(Error::Value(format!("negative or NaN attention weight at step {a}")));
                }
                if segments.question.contains(&k) {
                    question[k] += w;
                } else if segments.think.contains(&k) {
                    think[k - segments.think.start] += w;
                } else {
                    unscored += w;
                }
            }
        }
    }
    Ok(ImportanceScores {
        question,
        think,
        unscored_mass: unscored,
        n_layers: record.n_layers,
        n_heads: record.n_heads,
        k_ans: segments.k_ans(),
        segments: segments.clone(),
    })
}

/// Predictor targets for think tokens: mean attention received per answer
/// step per head, `I / (K_ans · L · H)`.
pub fn normalize_labels(scores: &ImportanceScores) -> Vec<f64> {
    let z = scores.expected_mass();
    scores.think.iter().map(|v| v / z).collect()
}

/// CSV export: `trace_id,position,segment,token,raw_I,label,critical_gt`.
pub fn write_scores_csv<W: Write>(
    mut w: W,
    trace_id: u64,
    scores: &ImportanceScores,
    tokens: &[TokenId],
    critical_think: &[bool],
    header: bool,
) -> Result<()> {
    let io = |e: std::io::Error| Error::Format(e.to_string());
    if header {
        writeln!(w, "trace_id,position,segment,token,raw_I,label,critical_gt").map_err(io)?;
    }
    let z = scores.expected_mass();
    for (p, v) in scores.question.iter().enumerate() {
        writeln!(w, "{trace_id},{p},question,{},{v},{},false", tokens[p], v / z).map_err(io)?;
    }
    let start = scores.segments.think.start;
    for (i, v) in scores.think.iter().enumerate() {
        let crit = critical_think.get(i).copied().unwrap_or(false);
        writeln!(w, "{trace_id},{},think,{},{v},{},{crit}", start + i, tokens[start + i], v / z).map_err(io)?;
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Strategy {
    Top,
    Bottom,
    Random,
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Top => "top",
            Strategy::Bottom => "bottom",
            Strategy::Random => "random",
        }
    }
}

impl std::str::FromStr for Strategy {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "top" => Ok(Strategy::Top),
            "bottom" => Ok(Strategy::Bottom),
            "random" => Ok(Strategy::Random),
            _ => Err(Error::Config(format!("unknown retention strategy '{s}'"))),
        }
    }
}

/// Number of items kept when retaining `p` percent of `n` (rounded up).
pub fn retained_count(n: usize, p: f64) -> usize {
    // Guard against 30% of 10 becoming 3.0000000000000004 → 4.
    let c = ((p * n as f64 / 100.0) - 1e-9).ceil();
    (c.max(0.0) as usize).min(n)
}

/// Indices of the `count` highest scores, ties toward later indices.
pub fn top_indices(scores: &[f64], count: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(b.cmp(&a)));
    idx.truncate(count);
    idx
}

/// Selection mask over the think span.
pub fn retention_mask(think_scores: &[f64], strategy: Strategy, p: f64, seed: u64) -> Result<Vec<bool>> {
    if !(p > 0.0 && p <= 100.0) {
        return Err(Error::Config(format!("retention percentage must be in (0, 100], got {p}")));
    }
    let n = think_scores.len();
    let count = retained_count(n, p);
    let picked: Vec<usize> = match strategy {
        Strategy::Top => top_indices(think_scores, count),
        Strategy::Bottom => {
            let mut idx: Vec<usize> = (0..n).collect();
            idx.sort_by(|&a, &b| think_scores[a].total_cmp(&think_scores[b]).then(b.cmp(&a)));
            idx.truncate(count);
            idx
        }
        Strategy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            sample(&mut rng, n, count).into_vec()
        }
    };
    let mut mask = vec![false; n];
    for i in picked {
        mask[i] = true;
    }
    Ok(mask)
}

/// One instance's teacher-forced run together with its importance scores.
#[derive(Debug, Clone)]
pub struct ScoredTrace {
    pub sequence: Vec<TokenId>,
    pub segments: Segments,
    pub scores: ImportanceScores,
    pub record: AttentionRecord,
    pub hidden: Vec<Vec<f64>>,
    pub entries: Vec<CacheEntry>,
}

/// Teacher-forces the instance and scores it.
pub fn score_instance(model: &Model, instance: &Instance) -> Result<ScoredTrace> {
    let bound = model.bind(instance);
    let sequence = assemble_sequence(instance);
    let segments = segment(&sequence)?;
    let run = teacher_force(&bound, &sequence)?;
    let scores = importance_scores(&run.record, &segments)?;
    Ok(ScoredTrace { sequence, segments, scores, record: run.record, hidden: run.hidden, entries: run.entries })
}

impl ScoredTrace {
    /// Predictor training samples: `h_t` and normalised label of every think token.
    pub fn samples(&self, trace_id: u64) -> crate::predictor::TraceSamples {
        crate::predictor::TraceSamples {
            trace_id,
            hidden: self.hidden[self.segments.think.clone()].to_vec(),
            labels: normalize_labels(&self.scores),
        }
    }
}

/// Greedily decodes the answer from THINK_CLOSE onward over a cache holding
/// the protected prefix (question and THINK_OPEN) plus the selected think
/// entries, at their original positions.
pub fn answer_from_subset(model: &Model, instance: &Instance, trace: &ScoredTrace, think_mask: &[bool]) -> Result<bool> {
    let seg = &trace.segments;
    let mut cache: Vec<CacheEntry> = trace.entries[..=seg.think_open].to_vec();
    for (i, &keep) in think_mask.iter().enumerate() {
        if keep {
            cache.push(trace.entries[seg.think.start + i].clone());
        }
    }
    let bound = model.bind(instance);
    let opts = DecodeOptions::greedy(instance.answer.len() + 1);
    let r = decode_from_cache(&bound, cache, seg.think_close, &[THINK_CLOSE], &mut FullPolicy::default(), &opts)?;
    Ok(r.exact_match(&instance.answer))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionRow {
    pub strategy: Strategy,
    pub p: f64,
    pub accuracy: f64,
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RetentionTable {
    pub full_accuracy: f64,
    pub n: usize,
    pub rows: Vec<RetentionRow>,
}

impl RetentionTable {
    pub fn accuracy(&self, strategy: Strategy, p: f64) -> Option<f64> {
        self.rows.iter().find(|r| r.strategy == strategy && (r.p - p).abs() < 1e-9).map(|r| r.accuracy)
    }

    /// Pools tables computed on disjoint instance sets with the same grid.
    pub fn merge(parts: &[RetentionTable]) -> Result<RetentionTable> {
        let first = parts.first().ok_or_else(|| Error::Value("nothing to merge".into()))?;
        let hits = |acc: f64, n: usize| (acc * n as f64).round();
        let n: usize = parts.iter().map(|t| t.n).sum();
        let mut out = first.clone();
        out.n = n;
        out.full_accuracy = parts.iter().map(|t| hits(t.full_accuracy, t.n)).sum::<f64>() / n as f64;
        for (i, row) in out.rows.iter_mut().enumerate() {
            let mut h = 0.0;
            for t in parts {
                match t.rows.get(i) {
                    Some(r) if r.strategy == row.strategy && r.p == row.p => h += hits(r.accuracy, r.n),
                    _ => return Err(Error::Value("retention tables use different grids".into())),
                }
            }
            row.n = n;
            row.accuracy = h / n as f64;
        }
        Ok(out)
    }

    /// CSV with a `full` reference row first.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let io = |e: std::io::Error| Error::Format(e.to_string());
        writeln!(w, "strategy,p,accuracy,n").map_err(io)?;
        writeln!(w, "full,100,{},{}", self.full_accuracy, self.n).map_err(io)?;
        for r in &self.rows {
            writeln!(w, "{},{},{},{}", r.strategy.name(), r.p, r.accuracy, r.n).map_err(io)?;
        }
        Ok(())
    }
}

/// Accuracy of answering from question + a `p`% subset of think tokens, for
/// every `(strategy, p)`, against the full-cache reference.
pub fn retention_experiment(
    model: &Model,
    instances: &[Instance],
    strategies: &[Strategy],
    p_grid: &[f64],
    seed: u64,
) -> Result<RetentionTable> {
    if instances.is_empty() {
        return Err(Error::Config("retention experiment needs at least one instance".into()));
    }
    let mut hits = vec![0usize; strategies.len() * p_grid.len()];
    let mut full_hits = 0;
    for inst in instances {
        let trace = score_instance(model, inst)?;
        let all = vec![true; trace.segments.think_len()];
        full_hits += answer_from_subset(model, inst, &trace, &all)? as usize;
        for (si, &s) in strategies.iter().enumerate() {
            for (pi, &p) in p_grid.iter().enumerate() {
                let mseed = seed ^ inst.seed.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ (p.to_bits() >> 7);
                let mask = retention_mask(&trace.scores.think, s, p, mseed)?;
                hits[si * p_grid.len() + pi] += answer_from_subset(model, inst, &trace, &mask)? as usize;
            }
        }
    }
    let n = instances.len();
    let rows = strategies
        .iter()
        .enumerate()
        .flat_map(|(si, &s)| {
            p_grid.iter().enumerate().map(move |(pi, &p)| (si, pi, s, p))
        })
        .map(|(si, pi, s, p)| RetentionRow { strategy: s, p, accuracy: hits[si * p_grid.len() + pi] as f64 / n as f64, n })
        .collect();
    Ok(RetentionTable { full_accuracy: full_hits as f64 / n as f64, n, rows })
}
