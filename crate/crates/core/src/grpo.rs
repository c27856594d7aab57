//! Group-relative advantages and the clip-higher surrogate loss.

use serde::{Deserialize, Serialize};

use crate::entropy::log_softmax;
use crate::error::{MedvrError, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GrpoConfig {
    pub eps_low: f64,
    pub eps_high: f64,
    pub learning_rate: f64,
    pub iterations: u64,
    pub batch_prompts: usize,
    /// Sampling temperature the old log-probabilities were recorded at.
    pub temperature: f64,
}

impl Default for GrpoConfig {
    fn default() -> Self {
        Self {
            eps_low: 0.2,
            eps_high: 0.28,
            learning_rate: 0.05,
            iterations: 300,
            batch_prompts: 8,
            temperature: 1.0,
        }
    }
}

impl GrpoConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eps_low > 0.0 && self.eps_low <= self.eps_high && self.eps_high < 1.0) {
            return Err(MedvrError::Config("need 0 < grpo.eps_low <= grpo.eps_high < 1".into()));
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(MedvrError::Config("grpo.learning_rate must be positive".into()));
        }
        if self.batch_prompts == 0 {
            return Err(MedvrError::Config("grpo.batch_prompts must be positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(MedvrError::Config("grpo.temperature must be positive".into()));
        }
        Ok(())
    }
}

/// `A_i = r_i - mean(r)`. The flag is set when every reward is equal.
pub fn group_advantages(rewards: &[f64]) -> Result<(Vec<f64>, bool)> {
    if rewards.len() < 2 {
        return Err(MedvrError::InvalidArgument("a group needs at least two rewards".into()));
    }
    let mean = rewards.iter().sum::<f64>() / rewards.len() as f64;
    let degenerate = rewards.iter().all(|&r| r == rewards[0]);
    if degenerate {
        return Ok((vec![0.0; rewards.len()], true));
    }
    Ok((rewards.iter().map(|r| r - mean).collect(), false))
}

/// `min(r A, clamp(r, 1 - eps_low, 1 + eps_high) A)`.
pub fn surrogate_term(ratio: f64, advantage: f64, cfg: &GrpoConfig) -> f64 {
    let clipped = ratio.clamp(1.0 - cfg.eps_low, 1.0 + cfg.eps_high);
    (ratio * advantage).min(clipped * advantage)
}

/// One unmasked token: its active features, the slot prior, and the
/// rollout-time log-probability.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSample {
    pub features: Vec<usize>,
    pub prior: Vec<f64>,
    pub token: u32,
    pub old_logprob: f64,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossReport {
    pub loss: f64,
    /// Gradient of `loss` with respect to theta (feature-major).
    pub grad: Vec<f64>,
    pub tokens: usize,
    pub clipped_fraction: f64,
}

/// Mean of `-surrogate` over each group's unmasked tokens, averaged over
/// non-empty groups, with its analytic gradient for a linear-softmax policy.
pub fn policy_loss(theta: &[f64], vocab: usize, groups: &[Vec<TokenSample>], cfg: &GrpoConfig) -> Result<LossReport> {
    linear_policy_loss(theta, vocab, groups, cfg)
}

pub fn linear_policy_loss(
    theta: &[f64],
    vocab: usize,
    groups: &[Vec<TokenSample>],
    cfg: &GrpoConfig,
) -> Result<LossReport> {
    let mut grad = vec![0.0; theta.len()];
    let active = groups.iter().filter(|g| !g.is_empty()).count();
    let (mut loss, mut tokens, mut clipped) = (0.0, 0usize, 0usize);
    if active == 0 {
        return Ok(LossReport { loss: 0.0, grad, tokens: 0, clipped_fraction: 0.0 });
    }
    let t = cfg.temperature;
    for group in groups.iter().filter(|g| !g.is_empty()) {
        let scale = 1.0 / (group.len() as f64 * active as f64);
        for s in group {
            let mut z = s.prior.clone();
            for &f in &s.features {
                for (zv, w) in z.iter_mut().zip(&theta[f * vocab..(f + 1) * vocab]) {
                    *zv += w;
                }
            }
            let logp = log_softmax(&z, t)?;
            let ratio = (logp[s.token as usize] - s.old_logprob).exp();
            let a = s.advantage;
            let unclipped = ratio * a;
            let surrogate = surrogate_term(ratio, a, cfg);
            if !surrogate.is_finite() {
                return Err(MedvrError::NonFinite("surrogate objective".into()));
            }
            loss -= surrogate * scale;
            tokens += 1;
            // the gradient flows only through the unclipped branch
            if unclipped > surrogate {
                clipped += 1;
                continue;
            }
            let coef = -a * ratio * scale / t;
            for &f in &s.features {
                let row = &mut grad[f * vocab..(f + 1) * vocab];
                for (v, g) in row.iter_mut().enumerate() {
                    let indicator = if v == s.token as usize { 1.0 } else { 0.0 };
                    *g += coef * (indicator - logp[v].exp());
                }
            }
        }
    }
    Ok(LossReport { loss, grad, tokens, clipped_fraction: clipped as f64 / tokens as f64 })
}
