//! Run configuration: a flat `section.key = value` file (TOML syntax, so
//! `[section]` headers work too) mapped onto the module configs.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::cca::CcaConfig;
use crate::error::{MedvrError, Result};
use crate::grpo::GrpoConfig;
use crate::policy::{LinearPolicyConfig, Optimizer};
use crate::rollout::RolloutLimits;
use crate::synthenv::SynthConfig;
use crate::types::{EvrConfig, VocabSpec};

/// Keys that must appear in every config file.
pub const REQUIRED_KEYS: [&str; 3] = ["evr.m_rollouts", "grpo.iterations", "grpo.batch_prompts"];

/// Everything a training or evaluation run needs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub seed: u64,
    pub evr: EvrConfig,
    /// When false, `r_tool` is always 0.
    pub cca_enabled: bool,
    pub cca: CcaConfig,
    pub grpo: GrpoConfig,
    pub limits: RolloutLimits,
    pub eval_limits: RolloutLimits,
    pub env: SynthConfig,
    pub policy: LinearPolicyConfig,
    pub vocab: VocabSpec,
    pub eval_tasks: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            evr: EvrConfig::default(),
            cca_enabled: true,
            cca: CcaConfig::default(),
            grpo: GrpoConfig::default(),
            limits: RolloutLimits::default(),
            eval_limits: RolloutLimits::eval(),
            env: SynthConfig::default(),
            policy: LinearPolicyConfig::default(),
            vocab: VocabSpec::default(),
            eval_tasks: 200,
        }
    }
}

/// A scalar config value before it is typed.
#[derive(Debug, Clone, PartialEq)]
pub enum RawValue {
    Int(i64),
    Float(f64),
    Bool(bool),
    Str(String),
}

impl std::fmt::Display for RawValue {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            RawValue::Int(i) => write!(f, "{i}"),
            RawValue::Float(x) => write!(f, "{x}"),
            RawValue::Bool(b) => write!(f, "{b}"),
            RawValue::Str(s) => write!(f, "{s:?}"),
        }
    }
}

fn flatten(prefix: &str, table: &toml::Table, out: &mut BTreeMap<String, RawValue>) -> Result<()> {
    for (k, v) in table {
        let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
        let raw = match v {
            toml::Value::Table(t) => {
                flatten(&key, t, out)?;
                continue;
            }
            toml::Value::Integer(i) => RawValue::Int(*i),
            toml::Value::Float(x) => RawValue::Float(*x),
            toml::Value::Boolean(b) => RawValue::Bool(*b),
            toml::Value::String(s) => RawValue::Str(s.clone()),
            other => return Err(MedvrError::Config(format!("{key}: unsupported value {other}"))),
        };
        out.insert(key, raw);
    }
    Ok(())
}

/// Parses config text into flat `section.key -> value` pairs.
pub fn parse_flat(text: &str) -> Result<BTreeMap<String, RawValue>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| MedvrError::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    flatten("", &table, &mut out)?;
    Ok(out)
}

fn want_f64(key: &str, v: &RawValue) -> Result<f64> {
    match v {
        RawValue::Float(x) => Ok(*x),
        RawValue::Int(i) => Ok(*i as f64),
        _ => Err(MedvrError::Config(format!("{key}: expected a number, got {v}"))),
    }
}

fn want_u64(key: &str, v: &RawValue) -> Result<u64> {
    match v {
        RawValue::Int(i) if *i >= 0 => Ok(*i as u64),
        _ => Err(MedvrError::Config(format!("{key}: expected a nonnegative integer, got {v}"))),
    }
}

fn want_bool(key: &str, v: &RawValue) -> Result<bool> {
    match v {
        RawValue::Bool(b) => Ok(*b),
        _ => Err(MedvrError::Config(format!("{key}: expected true or false, got {v}"))),
    }
}

impl TrainConfig {
    /// Sets one key; unknown keys are an error.
    pub fn set(&mut self, key: &str, v: &RawValue) -> Result<()> {
        let f = || want_f64(key, v);
        let u = || want_u64(key, v);
        let us = || want_u64(key, v).map(|x| x as usize);
        match key {
            "run.seed" => self.seed = u()?,
            "evr.p_base" => self.evr.p_base = f()?,
            "evr.gamma" => self.evr.gamma = f()?,
            "evr.baseline_window" => self.evr.baseline_window = us()?,
            "evr.tool_window" => self.evr.tool_window = us()?,
            "evr.m_rollouts" => self.evr.m_rollouts = us()?,
            "evr.temperature" => self.evr.temperature = f()?,
            "cca.enabled" => self.cca_enabled = want_bool(key, v)?,
            "cca.eta" => self.cca.eta = f()?,
            "cca.success_threshold" => self.cca.success_threshold = f()?,
            "grpo.eps_low" => self.grpo.eps_low = f()?,
            "grpo.eps_high" => self.grpo.eps_high = f()?,
            "grpo.learning_rate" => self.grpo.learning_rate = f()?,
            "grpo.iterations" => self.grpo.iterations = u()?,
            "grpo.batch_prompts" => self.grpo.batch_prompts = us()?,
            "limits.max_tool_calls" => self.limits.max_tool_calls = us()?,
            "limits.max_tokens_per_turn" => self.limits.max_tokens_per_turn = us()?,
            "limits.max_total_tokens" => self.limits.max_total_tokens = us()?,
            "limits.eval_max_tool_calls" => self.eval_limits.max_tool_calls = us()?,
            "env.width" => self.env.width = u()? as u32,
            "env.height" => self.env.height = u()? as u32,
            "env.target_size" => self.env.target_size = u()? as u32,
            "env.n_glyphs" => self.env.n_glyphs = u()? as u32,
            "env.distractor_density" => self.env.distractor_density = f()?,
            "env.noise" => self.env.noise = u()?.min(255) as u8,
            "policy.format_prior" => self.policy.format_prior = f()?,
            "policy.saliency_prior" => self.policy.saliency_prior = f()?,
            "policy.optimizer" => {
                self.policy.optimizer = match v {
                    RawValue::Str(s) if s == "sgd" => Optimizer::Sgd,
                    RawValue::Str(s) if s == "adam" => Optimizer::Adam,
                    _ => return Err(MedvrError::Config(format!("{key}: expected \"sgd\" or \"adam\", got {v}"))),
                }
            }
            "eval.n_tasks" => self.eval_tasks = us()?,
            _ => return Err(MedvrError::Config(format!("unknown config key {key}"))),
        }
        Ok(())
    }

    /// Builds a config from file text. Every key in [`REQUIRED_KEYS`] must
    /// be present.
    pub fn from_text(text: &str) -> Result<Self> {
        let flat = parse_flat(text)?;
        for k in REQUIRED_KEYS {
            if !flat.contains_key(k) {
                return Err(MedvrError::Config(format!("missing required key {k}")));
            }
        }
        let mut cfg = Self::default();
        for (k, v) in &flat {
            cfg.set(k, v)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MedvrError::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_text(&text)
    }

    pub fn validate(&self) -> Result<()> {
        self.evr.validate()?;
        self.cca.validate()?;
        self.grpo.validate()?;
        self.limits.validate()?;
        self.eval_limits.validate()?;
        self.vocab.validate()?;
        self.env.validate(&self.vocab)?;
        if self.evr.m_rollouts < 2 {
            return Err(MedvrError::Config("evr.m_rollouts must be at least 2".into()));
        }
        Ok(())
    }

    /// Flat `key = value` rendering that [`TrainConfig::from_text`] reads back.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut line = |k: &str, v: String| {
            s.push_str(k);
            s.push_str(" = ");
            s.push_str(&v);
            s.push('\n');
        };
        let fl = |x: f64| format!("{x:?}");
        line("run.seed", self.seed.to_string());
        line("evr.p_base", fl(self.evr.p_base));
        line("evr.gamma", fl(self.evr.gamma));
        line("evr.baseline_window", self.evr.baseline_window.to_string());
        line("evr.tool_window", self.evr.tool_window.to_string());
        line("evr.m_rollouts", self.evr.m_rollouts.to_string());
        line("evr.temperature", fl(self.evr.temperature));
        line("cca.enabled", self.cca_enabled.to_string());
        line("cca.eta", fl(self.cca.eta));
        line("cca.success_threshold", fl(self.cca.success_threshold));
        line("grpo.eps_low", fl(self.grpo.eps_low));
        line("grpo.eps_high", fl(self.grpo.eps_high));
        line("grpo.learning_rate", fl(self.grpo.learning_rate));
        line("grpo.iterations", self.grpo.iterations.to_string());
        line("grpo.batch_prompts", self.grpo.batch_prompts.to_string());
        line("limits.max_tool_calls", self.limits.max_tool_calls.to_string());
        line("limits.max_tokens_per_turn", self.limits.max_tokens_per_turn.to_string());
        line("limits.max_total_tokens", self.limits.max_total_tokens.to_string());
        line("limits.eval_max_tool_calls", self.eval_limits.max_tool_calls.to_string());
        line("env.width", self.env.width.to_string());
        line("env.height", self.env.height.to_string());
        line("env.target_size", self.env.target_size.to_string());
        line("env.n_glyphs", self.env.n_glyphs.to_string());
        line("env.distractor_density", fl(self.env.distractor_density));
        line("env.noise", self.env.noise.to_string());
        line("policy.format_prior", fl(self.policy.format_prior));
        line("policy.saliency_prior", fl(self.policy.saliency_prior));
        let opt = match self.policy.optimizer {
            Optimizer::Sgd => "\"sgd\"",
            Optimizer::Adam => "\"adam\"",
        };
        line("policy.optimizer", opt.to_string());
        line("eval.n_tasks", self.eval_tasks.to_string());
        s
    }
}
