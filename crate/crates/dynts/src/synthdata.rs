//! The "needle-trace" task: a question names a key, the thinking trace
//! contains several `K VAL d…d` bindings buried in filler, and the answer is
//! the digits bound to the queried key. The critical tokens are known by
//! construction.

use crate::error::{Error, Result};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, Write};

pub type TokenId = u32;

/// Structural token ids are fixed so sequences can be segmented without a vocabulary.
pub const QUESTION: TokenId = 0;
pub const THINK_OPEN: TokenId = 1;
pub const THINK_CLOSE: TokenId = 2;
pub const ANSWER_END: TokenId = 3;
pub const PAD: TokenId = 4;
pub const VAL: TokenId = 5;
pub const DIGIT_BASE: TokenId = 6;
pub const NUM_DIGITS: usize = 10;
const KEY_BASE: TokenId = DIGIT_BASE + NUM_DIGITS as TokenId;

/// Symbol table: structural tokens, VAL, digits 0–9, keys K0..K(n−1), fillers F0..F(m−1).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Vocab {
    pub num_keys: usize,
    pub num_fillers: usize,
}

impl Vocab {
    pub fn new(num_keys: usize, num_fillers: usize) -> Result<Self> {
        let v = Self { num_keys, num_fillers };
        if num_keys == 0 || num_fillers == 0 {
            return Err(Error::Config("vocabulary needs at least one key and one filler".into()));
        }
        if v.size() > 256 {
            return Err(Error::Config(format!("vocabulary size {} exceeds 256", v.size())));
        }
        Ok(v)
    }

    pub fn size(&self) -> usize {
        KEY_BASE as usize + self.num_keys + self.num_fillers
    }

    pub fn digit(d: usize) -> TokenId {
        DIGIT_BASE + d as TokenId
    }

    pub fn key(&self, k: usize) -> TokenId {
        KEY_BASE + k as TokenId
    }

    pub fn filler(&self, f: usize) -> TokenId {
        KEY_BASE + (self.num_keys + f) as TokenId
    }

    pub fn is_digit(t: TokenId) -> bool {
        (DIGIT_BASE..KEY_BASE).contains(&t)
    }

    /// Digit value of a digit token.
    pub fn digit_value(t: TokenId) -> Option<usize> {
        Self::is_digit(t).then(|| (t - DIGIT_BASE) as usize)
    }

    pub fn is_key(&self, t: TokenId) -> bool {
        (KEY_BASE..KEY_BASE + self.num_keys as TokenId).contains(&t)
    }

    pub fn key_index(&self, t: TokenId) -> Option<usize> {
        self.is_key(t).then(|| (t - KEY_BASE) as usize)
    }

    pub fn is_filler(&self, t: TokenId) -> bool {
        let lo = KEY_BASE + self.num_keys as TokenId;
        (lo..lo + self.num_fillers as TokenId).contains(&t)
    }

    pub fn symbol(&self, t: TokenId) -> Option<String> {
        Some(match t {
            QUESTION => "QUESTION".into(),
            THINK_OPEN => "THINK_OPEN".into(),
            THINK_CLOSE => "THINK_CLOSE".into(),
            ANSWER_END => "ANSWER_END".into(),
            PAD => "PAD".into(),
            VAL => "VAL".into(),
            _ if Self::is_digit(t) => format!("{}", t - DIGIT_BASE),
            _ if self.is_key(t) => format!("K{}", t - KEY_BASE),
            _ if self.is_filler(t) => format!("F{}", t - KEY_BASE - self.num_keys as TokenId),
            _ => return None,
        })
    }

    pub fn id(&self, symbol: &str) -> Option<TokenId> {
        (0..self.size() as TokenId).find(|&t| self.symbol(t).as_deref() == Some(symbol))
    }
}

/// Generation parameters for one instance.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskParams {
    pub num_keys: usize,
    pub num_distractor_pairs: usize,
    pub filler_length: usize,
    pub digits_per_value: usize,
    pub seed: u64,
    /// Size of the filler alphabet.
    pub num_fillers: usize,
    /// Maximum length of the assembled sequence.
    pub max_pos: usize,
}

impl Default for TaskParams {
    fn default() -> Self {
        Self {
            num_keys: 8,
            num_distractor_pairs: 3,
            filler_length: 44,
            digits_per_value: 2,
            seed: 0,
            num_fillers: 16,
            max_pos: 96,
        }
    }
}

impl TaskParams {
    pub fn vocab(&self) -> Result<Vocab> {
        Vocab::new(self.num_keys, self.num_fillers)
    }

    pub fn pair_len(&self) -> usize {
        self.digits_per_value + 2
    }

    pub fn trace_len(&self) -> usize {
        (self.num_distractor_pairs + 1) * self.pair_len() + self.filler_length
    }

    /// Length of the assembled sequence (question, delimiters, trace, answer, terminator).
    pub fn sequence_len(&self) -> usize {
        2 + 1 + self.trace_len() + 1 + self.digits_per_value + 1
    }

    /// Number of distinct (query key, answer) bindings.
    pub fn binding_capacity(&self) -> usize {
        let mut perms = 1usize;
        for i in 0..self.digits_per_value {
            perms *= NUM_DIGITS - i;
        }
        self.num_keys * perms
    }

    pub fn validate(&self) -> Result<()> {
        self.vocab()?;
        if self.digits_per_value == 0 {
            return Err(Error::Config("digits_per_value must be >= 1".into()));
        }
        let pairs = self.num_distractor_pairs + 1;
        if pairs > self.num_keys {
            return Err(Error::Config(format!(
                "num_keys={} cannot host {} distinct pairs",
                self.num_keys, pairs
            )));
        }
        if pairs * self.digits_per_value > NUM_DIGITS {
            return Err(Error::Config(format!(
                "{} pairs x {} digits need more than {} distinct digits",
                pairs, self.digits_per_value, NUM_DIGITS
            )));
        }
        if self.sequence_len() > self.max_pos {
            return Err(Error::Config(format!(
                "sequence length {} exceeds max_pos {}",
                self.sequence_len(),
                self.max_pos
            )));
        }
        Ok(())
    }
}

/// One synthetic reasoning episode.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Instance {
    pub seed: u64,
    pub question: Vec<TokenId>,
    pub trace: Vec<TokenId>,
    pub answer: Vec<TokenId>,
    pub critical_mask: Vec<bool>,
}

impl Instance {
    pub fn query_key(&self) -> TokenId {
        self.question[1]
    }

    /// Absolute positions of critical trace tokens in the assembled sequence.
    pub fn critical_positions(&self) -> Vec<usize> {
        let off = self.question.len() + 1;
        self.critical_mask
            .iter()
            .enumerate()
            .filter(|(_, &c)| c)
            .map(|(i, _)| off + i)
            .collect()
    }

    /// Absolute position of the first trace token.
    pub fn trace_start(&self) -> usize {
        self.question.len() + 1
    }

    /// Absolute position of THINK_CLOSE.
    pub fn think_close_pos(&self) -> usize {
        self.trace_start() + self.trace.len()
    }
}

/// Decodes binding number `idx` into (key index, ordered distinct digits).
fn binding(idx: usize, num_keys: usize, digits: usize) -> (usize, Vec<usize>) {
    let key = idx % num_keys;
    let mut t = idx / num_keys;
    let mut pool: Vec<usize> = (0..NUM_DIGITS).collect();
    let mut out = Vec::with_capacity(digits);
    for _ in 0..digits {
        let i = t % pool.len();
        t /= pool.len();
        out.push(pool.remove(i));
    }
    (key, out)
}

/// Generates the instance for `params.seed`. The queried binding is the
/// `seed mod capacity`-th binding, so consecutive seeds never collide.
pub fn gen_instance(params: &TaskParams) -> Result<Instance> {
    params.validate()?;
    let vocab = params.vocab()?;
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed);
    let cap = params.binding_capacity();
    let (qkey, qdigits) = binding((params.seed % cap as u64) as usize, params.num_keys, params.digits_per_value);

    let mut other_keys: Vec<usize> = (0..params.num_keys).filter(|&k| k != qkey).collect();
    other_keys.shuffle(&mut rng);
    let mut other_digits: Vec<usize> = (0..NUM_DIGITS).filter(|d| !qdigits.contains(d)).collect();
    other_digits.shuffle(&mut rng);

    let pair_tokens = |key: usize, digits: &[usize]| -> Vec<TokenId> {
        let mut p = vec![vocab.key(key), VAL];
        p.extend(digits.iter().map(|&d| Vocab::digit(d)));
        p
    };
    let d = params.digits_per_value;
    // (tokens, is_query)
    let mut pairs: Vec<(Vec<TokenId>, bool)> = vec![(pair_tokens(qkey, &qdigits), true)];
    for i in 0..params.num_distractor_pairs {
        pairs.push((pair_tokens(other_keys[i], &other_digits[i * d..(i + 1) * d]), false));
    }
    pairs.shuffle(&mut rng);

    // Split the filler into one run before each pair plus a trailing run.
    let mut cuts: Vec<usize> = (0..pairs.len()).map(|_| rng.gen_range(0..=params.filler_length)).collect();
    cuts.sort_unstable();
    let mut trace = Vec::with_capacity(params.trace_len());
    let mut mask = Vec::with_capacity(params.trace_len());
    let mut filler = |n: usize, trace: &mut Vec<TokenId>, mask: &mut Vec<bool>| {
        for _ in 0..n {
            trace.push(vocab.filler(rng.gen_range(0..params.num_fillers)));
            mask.push(false);
        }
    };
    let mut prev = 0;
    for ((tokens, is_query), &cut) in pairs.iter().zip(&cuts) {
        filler(cut - prev, &mut trace, &mut mask);
        prev = cut;
        mask.extend(std::iter::repeat(*is_query).take(tokens.len()));
        trace.extend_from_slice(tokens);
    }
    filler(params.filler_length - prev, &mut trace, &mut mask);

    Ok(Instance {
        seed: params.seed,
        question: vec![QUESTION, vocab.key(qkey)],
        trace,
        answer: qdigits.iter().map(|&x| Vocab::digit(x)).collect(),
        critical_mask: mask,
    })
}

/// `n` instances with seeds `seed..seed+n`.
pub fn gen_dataset(params: &TaskParams, n: usize, seed: u64) -> Result<Vec<Instance>> {
    if n == 0 {
        return Err(Error::Config("dataset size must be >= 1".into()));
    }
    if n > params.binding_capacity() {
        return Err(Error::Config(format!(
            "n={} exceeds the {} distinct (query, binding) pairs the vocabulary permits",
            n,
            params.binding_capacity()
        )));
    }
    (0..n as u64)
        .map(|i| gen_instance(&TaskParams { seed: seed + i, ..*params }))
        .collect()
}

/// `[question, THINK_OPEN, trace, THINK_CLOSE, answer, ANSWER_END]`.
pub fn assemble_sequence(instance: &Instance) -> Vec<TokenId> {
    let mut s = instance.question.clone();
    s.push(THINK_OPEN);
    s.extend_from_slice(&instance.trace);
    s.push(THINK_CLOSE);
    s.extend_from_slice(&instance.answer);
    s.push(ANSWER_END);
    s
}

/// Applies the task rule using only the question and the masked trace tokens:
/// find the queried key, skip VAL, read the following digits.
pub fn solve_from_masked(question: &[TokenId], trace: &[TokenId], mask: &[bool]) -> Vec<TokenId> {
    let kept: Vec<TokenId> = trace.iter().zip(mask).filter(|(_, &m)| m).map(|(&t, _)| t).collect();
    let Some(&query) = question.get(1) else { return Vec::new() };
    let Some(i) = kept.iter().position(|&t| t == query) else { return Vec::new() };
    if kept.get(i + 1) != Some(&VAL) {
        return Vec::new();
    }
    kept[i + 2..].iter().take_while(|&&t| Vocab::is_digit(t)).cloned().collect()
}

pub fn write_jsonl<W: Write>(mut w: W, instances: &[Instance]) -> Result<()> {
    for inst in instances {
        let line = serde_json::to_string(inst).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(w, "{line}").map_err(|e| Error::Format(e.to_string()))?;
    }
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line.map_err(|e| Error::Format(e.to_string()))?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?);
    }
    Ok(out)
}
