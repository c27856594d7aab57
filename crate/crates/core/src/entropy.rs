//! Token-level uncertainty tracking for entropy-gated branching.

use std::collections::VecDeque;

use crate::error::{MedvrError, Result};
use crate::types::{EvrConfig, TokenEvent};

/// Numerically stable `log_softmax(logits / temperature)`.
pub fn log_softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    check_finite(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let scaled: Vec<f64> = logits.iter().map(|&z| (z - max) / temperature).collect();
    let log_z = scaled.iter().map(|s| s.exp()).sum::<f64>().ln();
    Ok(scaled.into_iter().map(|s| s - log_z).collect())
}

pub fn softmax(logits: &[f64], temperature: f64) -> Result<Vec<f64>> {
    Ok(log_softmax(logits, temperature)?.into_iter().map(f64::exp).collect())
}

fn check_finite(logits: &[f64]) -> Result<()> {
    if logits.is_empty() {
        return Err(MedvrError::InvalidArgument("empty logit vector".into()));
    }
    if let Some((i, z)) = logits.iter().enumerate().find(|(_, z)| !z.is_finite()) {
        return Err(MedvrError::NonFinite(format!("logit[{i}] = {z}")));
    }
    Ok(())
}

/// Shannon entropy (nats) of `softmax(logits / temperature)`.
///
/// Evaluated as `ln Z - sum_i p_i s_i` with `s_i = (z_i - max) / T`, which
/// never takes the log of an underflowed probability.
pub fn token_entropy(logits: &[f64], temperature: f64) -> Result<f64> {
    if !(temperature > 0.0) || !temperature.is_finite() {
        return Err(MedvrError::InvalidArgument(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    check_finite(logits)?;
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut z = 0.0;
    let mut weighted = 0.0;
    for &l in logits {
        let s = (l - max) / temperature;
        let e = s.exp();
        z += e;
        weighted += e * s;
    }
    let h = z.ln() - weighted / z;
    let upper = (logits.len() as f64).ln();
    Ok(h.clamp(0.0, upper))
}

/// Running baseline and rolling tool-window entropy for one trajectory.
#[derive(Debug, Clone)]
pub struct EntropyState {
    baseline_window: usize,
    tool_window: usize,
    baseline_sum: f64,
    baseline_count: usize,
    tool_ring: VecDeque<f64>,
}

impl EntropyState {
    pub fn new(cfg: &EvrConfig) -> Self {
        Self::with_windows(cfg.baseline_window, cfg.tool_window)
    }

    pub fn with_windows(baseline_window: usize, tool_window: usize) -> Self {
        assert!(baseline_window > 0 && tool_window > 0);
        Self {
            baseline_window,
            tool_window,
            baseline_sum: 0.0,
            baseline_count: 0,
            tool_ring: VecDeque::with_capacity(tool_window),
        }
    }

    /// Folds one event in. Observation and injected tokens are skipped.
    pub fn update(&mut self, event: &TokenEvent) {
        if !event.is_trainable() {
            return;
        }
        self.observe(event.entropy_nats, event.in_tool_span);
    }

    pub fn observe(&mut self, entropy: f64, in_tool_span: bool) {
        if self.baseline_count < self.baseline_window {
            self.baseline_sum += entropy;
            self.baseline_count += 1;
        }
        if in_tool_span {
            if self.tool_ring.len() == self.tool_window {
                self.tool_ring.pop_front();
            }
            self.tool_ring.push_back(entropy);
        }
    }

    /// Final baseline, available once the window has filled.
    pub fn h_base(&self) -> Option<f64> {
        (self.baseline_count == self.baseline_window)
            .then(|| self.baseline_sum / self.baseline_count as f64)
    }

    /// Mean over whatever part of the baseline window has been seen.
    pub fn provisional_base(&self) -> Option<f64> {
        (self.baseline_count > 0).then(|| self.baseline_sum / self.baseline_count as f64)
    }

    pub fn h_tool(&self) -> Option<f64> {
        (!self.tool_ring.is_empty())
            .then(|| self.tool_ring.iter().sum::<f64>() / self.tool_ring.len() as f64)
    }

    pub fn tool_ring_len(&self) -> usize {
        self.tool_ring.len()
    }
}

/// `h_tool - h_base`, using the provisional baseline when the window is
/// still filling.
pub fn entropy_delta(state: &EntropyState) -> Result<f64> {
    let h_tool = state.h_tool().ok_or(MedvrError::NoToolTokens)?;
    // a non-empty ring implies at least one baseline sample
    let h_base = state.h_base().or_else(|| state.provisional_base()).unwrap_or(0.0);
    Ok(h_tool - h_base)
}

/// `clamp(p_base + gamma * delta_h, 0, 1)`.
pub fn branch_probability(delta_h: f64, cfg: &EvrConfig) -> f64 {
    let p = cfg.p_base + cfg.gamma * delta_h;
    if p.is_nan() {
        return cfg.p_base.clamp(0.0, 1.0);
    }
    p.clamp(0.0, 1.0)
}
