//! Flat `key = value` run configuration.
//!
//! Blank lines and `#` comments are ignored. Every key is typed and checked;
//! unknown or repeated keys are rejected with the offending key in the message.

use anyhow::{anyhow, bail, Context, Result};
use dynts::cachemgr::BudgetConfig;
use dynts::importance::Strategy;
use dynts::predictor::TrainConfig;
use dynts::synthdata::TaskParams;
use dynts::toymodel::RestWeighting;
use std::collections::HashSet;
use std::path::{Path, PathBuf};
use std::str::FromStr;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ModelSource {
    Planted,
    Scripted,
    Random,
}

impl FromStr for ModelSource {
    type Err = String;
    fn from_str(s: &str) -> std::result::Result<Self, String> {
        match s {
            "planted" => Ok(Self::Planted),
            "scripted" => Ok(Self::Scripted),
            "random" => Ok(Self::Random),
            _ => Err(format!("expected planted, scripted or random, got {s:?}")),
        }
    }
}

pub const POLICIES: [&str; 6] = ["full", "window", "sink_recent", "accum_attention", "random", "dynts"];

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub n: usize,
    pub task: TaskParams,
    pub model: ModelSource,
    pub model_seed: u64,
    pub n_layers: usize,
    pub n_heads: usize,
    pub d_model: usize,
    pub epsilon: f64,
    pub rest: RestWeighting,
    pub signal: f64,
    pub noise: f64,
    pub policy: String,
    pub budget: BudgetConfig,
    /// Generated entries kept by the window baseline; `None` = `B − M − 1`,
    /// which makes it attend to at most `B` entries like the other policies.
    pub window_size: Option<usize>,
    /// Sink entries of `sink_recent`; `None` = the question length.
    pub n_sink: Option<usize>,
    pub train: TrainConfig,
    pub p_grid: Vec<f64>,
    pub strategies: Vec<Strategy>,
    pub workers: usize,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            out: PathBuf::from("run"),
            n: 200,
            task: TaskParams::default(),
            model: ModelSource::Planted,
            model_seed: 0,
            n_layers: 2,
            n_heads: 2,
            d_model: 64,
            epsilon: 0.1,
            rest: RestWeighting::TokenWeighted,
            signal: 1.0,
            noise: 0.05,
            policy: "dynts".into(),
            budget: BudgetConfig { budget: 40, local: 8, ratio: 0.7 },
            window_size: None,
            n_sink: None,
            train: TrainConfig::default(),
            p_grid: vec![10.0, 20.0, 30.0, 40.0, 50.0, 60.0, 70.0, 80.0, 90.0, 100.0],
            strategies: vec![Strategy::Top, Strategy::Bottom, Strategy::Random],
            workers: 0,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T>
where
    T::Err: std::fmt::Display,
{
    value.parse::<T>().map_err(|e| anyhow!("invalid value {value:?} for key '{key}': {e}"))
}

fn optional(key: &str, value: &str) -> Result<Option<usize>> {
    if value == "auto" {
        Ok(None)
    } else {
        parse(key, value).map(Some)
    }
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading config {}", path.display()))?;
        Self::parse_str(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn parse_str(text: &str) -> Result<Self> {
        let mut cfg = Self::default();
        let mut seen = HashSet::new();
        for (lineno, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| anyhow!("line {}: expected key = value, got {line:?}", lineno + 1))?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                bail!("key '{key}' given more than once");
            }
            cfg.set(key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "seed" => self.set_seed(parse(key, v)?),
            "out" => self.out = PathBuf::from(v),
            "data.n" => self.n = parse(key, v)?,
            "task.num_keys" => self.task.num_keys = parse(key, v)?,
            "task.num_distractor_pairs" => self.task.num_distractor_pairs = parse(key, v)?,
            "task.filler_length" => self.task.filler_length = parse(key, v)?,
            "task.digits_per_value" => self.task.digits_per_value = parse(key, v)?,
            "task.num_fillers" => self.task.num_fillers = parse(key, v)?,
            "task.max_pos" => self.task.max_pos = parse(key, v)?,
            "model.source" => self.model = parse(key, v)?,
            "model.seed" => self.model_seed = parse(key, v)?,
            "model.n_layers" => self.n_layers = parse(key, v)?,
            "model.n_heads" => self.n_heads = parse(key, v)?,
            "model.d_model" => self.d_model = parse(key, v)?,
            "scripted.epsilon" => self.epsilon = parse(key, v)?,
            "scripted.rest" => {
                self.rest = match v {
                    "uniform" => RestWeighting::Uniform,
                    "token_weighted" => RestWeighting::TokenWeighted,
                    _ => bail!("invalid value {v:?} for key '{key}': expected uniform or token_weighted"),
                }
            }
            "scripted.signal" => self.signal = parse(key, v)?,
            "scripted.noise" => self.noise = parse(key, v)?,
            "policy" => self.policy = v.to_string(),
            "budget.B" => self.budget.budget = parse(key, v)?,
            "budget.local" => self.budget.local = parse(key, v)?,
            "budget.ratio" => self.budget.ratio = parse(key, v)?,
            "window.size" => self.window_size = optional(key, v)?,
            "sink.n_sink" => self.n_sink = optional(key, v)?,
            "train.epochs" => self.train.epochs = parse(key, v)?,
            "train.lr" => self.train.lr = parse(key, v)?,
            "train.weight_decay" => self.train.weight_decay = parse(key, v)?,
            "train.beta1" => self.train.beta1 = parse(key, v)?,
            "train.beta2" => self.train.beta2 = parse(key, v)?,
            "train.clip_norm" => self.train.clip_norm = parse(key, v)?,
            "train.global_batch" => self.train.global_batch = parse(key, v)?,
            "train.micro_batch" => self.train.micro_batch = parse(key, v)?,
            "train.val_fraction" => self.train.val_fraction = parse(key, v)?,
            "retention.p" => {
                self.p_grid = v.split(',').map(|s| parse::<f64>(key, s.trim())).collect::<Result<_>>()?;
            }
            "retention.strategies" => {
                self.strategies = v.split(',').map(|s| parse::<Strategy>(key, s.trim())).collect::<Result<_>>()?;
            }
            "workers" => self.workers = parse(key, v)?,
            _ => bail!("unknown config key '{key}'"),
        }
        Ok(())
    }

    /// Re-derives everything that depends on `seed`.
    pub fn set_seed(&mut self, seed: u64) {
        self.seed = seed;
        self.train.seed = seed;
    }

    pub fn validate(&self) -> Result<()> {
        let mut task = self.task;
        task.seed = self.seed;
        task.validate().map_err(|e| anyhow!("invalid task.* keys: {e}"))?;
        if self.n == 0 {
            bail!("invalid value for key 'data.n': must be >= 1");
        }
        if self.n > task.binding_capacity() {
            bail!("invalid value for key 'data.n': {} exceeds the {} distinct questions of this task", self.n, task.binding_capacity());
        }
        if !POLICIES.contains(&self.policy.as_str()) {
            bail!("invalid value {:?} for key 'policy': expected one of {}", self.policy, POLICIES.join(", "));
        }
        let b = self.budget;
        if !(0.0..1.0).contains(&b.ratio) {
            bail!("invalid value {} for key 'budget.ratio': must lie in [0, 1)", b.ratio);
        }
        if b.budget == 0 {
            bail!("invalid value for key 'budget.B': must be >= 1");
        }
        if b.local == 0 || b.local >= b.budget {
            bail!("invalid value {} for key 'budget.local': must lie in [1, budget.B)", b.local);
        }
        if self.window_size == Some(0) {
            bail!("invalid value for key 'window.size': must be >= 1");
        }
        for (key, v) in [("model.n_layers", self.n_layers), ("model.n_heads", self.n_heads), ("model.d_model", self.d_model)] {
            if v == 0 {
                bail!("invalid value for key '{key}': must be >= 1");
            }
        }
        if self.d_model % self.n_heads != 0 {
            bail!("invalid value for key 'model.d_model': {} is not divisible by model.n_heads", self.d_model);
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            bail!("invalid value {} for key 'scripted.epsilon': must lie in [0, 1]", self.epsilon);
        }
        if !(self.signal.is_finite() && self.noise.is_finite() && self.noise >= 0.0) {
            bail!("invalid value for key 'scripted.signal' or 'scripted.noise': must be finite, noise >= 0");
        }
        self.train.validate().map_err(|e| anyhow!("invalid train.* keys: {e}"))?;
        if self.p_grid.is_empty() || self.p_grid.iter().any(|p| !(*p > 0.0 && *p <= 100.0)) {
            bail!("invalid value for key 'retention.p': every entry must lie in (0, 100]");
        }
        if self.strategies.is_empty() {
            bail!("invalid value for key 'retention.strategies': empty");
        }
        Ok(())
    }

    pub fn task_params(&self) -> TaskParams {
        TaskParams { seed: self.seed, ..self.task }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_and_rejects() {
        let c = RunConfig::parse_str("# comment\nseed = 7\nbudget.B = 50 # inline\npolicy=window\n").unwrap();
        assert_eq!((c.seed, c.budget.budget, c.policy.as_str()), (7, 50, "window"));
        let e = RunConfig::parse_str("bogus = 1").unwrap_err().to_string();
        assert!(e.contains("'bogus'"), "{e}");
        let e = RunConfig::parse_str("budget.ratio = 1.5").unwrap_err().to_string();
        assert!(e.contains("'budget.ratio'"), "{e}");
        let e = RunConfig::parse_str("data.n = ten").unwrap_err().to_string();
        assert!(e.contains("'data.n'"), "{e}");
        assert!(RunConfig::parse_str("seed = 1\nseed = 2").unwrap_err().to_string().contains("'seed'"));
        assert!(RunConfig::parse_str("retention.strategies = top,sideways").is_err());
        assert!(RunConfig::parse_str("window.size = auto").unwrap().window_size.is_none());
    }
}
