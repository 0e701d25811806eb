//! The DynTS policy: every think token is scored once, at generation time,
//! by the importance predictor applied to the hidden state that produced the
//! next token; question and answer tokens are pinned with `+∞`. Scores feed
//! the dual-window cache, which evicts the lowest-scored selection entries
//! whenever the budget is reached.

use crate::cachemgr::{BudgetConfig, CacheEntry, CachePolicy, DualWindowState, EvictionEvent, Phase};
use crate::error::{Error, Result};
use crate::numkernel::MlpParams;
use crate::predictor::{predict, PredictorParams};
use crate::synthdata::TokenId;
use crate::toymodel::StepOutput;
use std::sync::Arc;

#[derive(Debug, Clone)]
pub struct DyntsPolicy {
    predictor: Arc<PredictorParams>,
    config: BudgetConfig,
    state: Option<DualWindowState>,
}

impl DyntsPolicy {
    /// Fails if the predictor input dim differs from the model's hidden size.
    pub fn new(predictor: Arc<PredictorParams>, config: BudgetConfig, model_dim: usize) -> Result<Self> {
        predictor.validate()?;
        if predictor.input_dim() != model_dim {
            return Err(Error::Shape(format!(
                "predictor expects hidden dim {} but the model produces {model_dim}",
                predictor.input_dim()
            )));
        }
        Ok(Self { predictor, config, state: None })
    }

    /// An all-zero predictor: every think token scores 0, so eviction falls
    /// back to the recency tie rule.
    pub fn zero(config: BudgetConfig, model_dim: usize) -> Result<Self> {
        let (h1, h2) = MlpParams::default_shape(model_dim)?;
        Self::new(Arc::new(MlpParams::zeros(model_dim, h1, h2)), config, model_dim)
    }

    pub fn state(&self) -> Option<&DualWindowState> {
        self.state.as_ref()
    }

    fn state_mut(&mut self) -> Result<&mut DualWindowState> {
        self.state.as_mut().ok_or_else(|| Error::Cache("policy used before init".into()))
    }
}

impl CachePolicy for DyntsPolicy {
    fn name(&self) -> &'static str {
        "dynts"
    }

    fn init(&mut self, prefill: Vec<CacheEntry>) -> Result<()> {
        self.state = Some(DualWindowState::init(prefill, self.config)?);
        Ok(())
    }

    fn score(&mut self, out: &StepOutput, _token: TokenId, phase: Phase) -> Result<f64> {
        match phase {
            Phase::Think => predict(&self.predictor, &out.hidden),
            Phase::Question | Phase::Answer => Ok(f64::INFINITY),
        }
    }

    fn append(&mut self, entry: CacheEntry) -> Result<()> {
        let score = entry.score;
        self.state_mut()?.append(entry, score)
    }

    fn maybe_evict(&mut self, step: usize) -> Result<Option<EvictionEvent>> {
        self.state_mut()?.maybe_evict(step)
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
        self.state.as_ref().map(|s| s.log()).unwrap_or(&[])
    }
}
