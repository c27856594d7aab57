//! Policy abstraction plus the built-in linear-softmax reference policy and
//! scripted stubs used for baselines and tests.

use std::sync::{Arc, Mutex, RwLock};

use serde::{Deserialize, Serialize};

use crate::error::{MedvrError, Result};
use crate::grpo::{self, GrpoConfig, LossReport};
use crate::types::VocabSpec;

/// A forkable generative state.
pub trait PolicySession: Send {
    /// Raw next-token logits for the current context.
    fn next_logits(&mut self) -> Result<Vec<f64>>;
    fn append(&mut self, tokens: &[u32], is_observation: bool) -> Result<()>;
    /// Independent copy of the current context.
    fn fork(&mut self) -> Result<Box<dyn PolicySession>>;
}

pub trait Policy: Send + Sync {
    fn vocab(&self) -> &VocabSpec;
    /// Opens a session whose context is the prompt (treated as observation).
    fn open_session(&self, prompt: &[u32]) -> Result<Box<dyn PolicySession>>;
}

/// One trajectory's contribution to a policy update.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrajectoryUpdate {
    pub prompt: Vec<u32>,
    pub tokens: Vec<u32>,
    /// `true` where the token enters the loss.
    pub mask: Vec<bool>,
    pub is_observation: Vec<bool>,
    pub old_logprobs: Vec<f64>,
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct GroupUpdate {
    pub trajectories: Vec<TrajectoryUpdate>,
}

/// A policy that can be trained from group-relative advantages.
pub trait Learner: Policy {
    fn apply_update(&self, groups: &[GroupUpdate], cfg: &GrpoConfig) -> Result<LossReport>;
    /// Trainable state to store in a checkpoint, for policies that own it
    /// in this process.
    fn state(&self) -> Option<PolicyState> {
        None
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Slot {
    Outside,
    Coord(u8),
    ExpectToolEnd,
    Label,
    ExpectAnsEnd,
}

impl Slot {
    fn index(self) -> usize {
        match self {
            Slot::Outside => 0,
            Slot::Coord(k) => 1 + k as usize,
            Slot::ExpectToolEnd => 5,
            Slot::Label => 6,
            Slot::ExpectAnsEnd => 7,
        }
    }
}

const N_SLOTS: usize = 8;
const MAX_COUNT_FEATURE: usize = 3;

/// Offsets of each feature group inside the parameter table.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FeatureLayout {
    pub cells: usize,
    pub levels: usize,
    pub bins: usize,
    slot_count: usize,
    prompt_cells: usize,
    outside_obs: usize,
    label_obs: usize,
    prev_coord: usize,
    total: usize,
}

impl FeatureLayout {
    pub fn new(cells: usize, levels: usize, bins: usize) -> Self {
        let slot_count = N_SLOTS;
        let prompt_cells = slot_count + N_SLOTS * (MAX_COUNT_FEATURE + 1);
        let outside_obs = prompt_cells + 4 * cells * levels;
        let label_obs = outside_obs + cells * levels;
        let prev_coord = label_obs + cells * levels;
        let total = prev_coord + 2 * bins;
        Self { cells, levels, bins, slot_count, prompt_cells, outside_obs, label_obs, prev_coord, total }
    }

    pub fn for_vocab(vocab: &VocabSpec, cells: usize) -> Self {
        Self::new(cells, vocab.n_obs_levels as usize, vocab.bins_per_axis as usize)
    }

    pub fn len(&self) -> usize {
        self.total
    }

    pub fn is_empty(&self) -> bool {
        self.total == 0
    }
}

/// Incremental context summary from which features are read.
#[derive(Debug, Clone)]
pub struct FeatureTracker {
    vocab: VocabSpec,
    layout: FeatureLayout,
    slot: Slot,
    coords: [u32; 4],
    in_obs: bool,
    obs_buf: Vec<u8>,
    prompt_levels: Option<Vec<u8>>,
    last_obs: Option<Vec<u8>>,
    tool_obs_count: usize,
}

impl FeatureTracker {
    pub fn new(vocab: VocabSpec, layout: FeatureLayout) -> Self {
        Self {
            vocab,
            layout,
            slot: Slot::Outside,
            coords: [0; 4],
            in_obs: false,
            obs_buf: Vec::new(),
            prompt_levels: None,
            last_obs: None,
            tool_obs_count: 0,
        }
    }

    pub fn push(&mut self, t: u32) {
        let sp = self.vocab.special;
        if t == sp.obs_start {
            self.in_obs = true;
            self.obs_buf.clear();
            return;
        }
        if self.in_obs {
            if t == sp.obs_end {
                self.in_obs = false;
                let mut levels = std::mem::take(&mut self.obs_buf);
                levels.resize(self.layout.cells, 0);
                if self.prompt_levels.is_none() {
                    self.prompt_levels = Some(levels);
                } else {
                    self.last_obs = Some(levels);
                    self.tool_obs_count += 1;
                }
            } else if let Some(l) = self.vocab.obs_level(t) {
                if self.obs_buf.len() < self.layout.cells {
                    self.obs_buf.push(l as u8);
                }
            }
            return;
        }
        self.slot = match self.slot {
            Slot::Outside => self.from_outside(t),
            Slot::Coord(k) => match self.vocab.coord_bin(t) {
                Some(b) => {
                    self.coords[k as usize] = b;
                    if k == 3 {
                        Slot::ExpectToolEnd
                    } else {
                        Slot::Coord(k + 1)
                    }
                }
                None => self.from_outside(t),
            },
            Slot::ExpectToolEnd => {
                if t == sp.tool_end || self.vocab.is_coord(t) {
                    if t == sp.tool_end {
                        Slot::Outside
                    } else {
                        Slot::ExpectToolEnd
                    }
                } else {
                    self.from_outside(t)
                }
            }
            Slot::Label => {
                if self.vocab.is_answer(t) {
                    Slot::ExpectAnsEnd
                } else {
                    Slot::Outside
                }
            }
            Slot::ExpectAnsEnd => Slot::Outside,
        };
    }

    fn from_outside(&self, t: u32) -> Slot {
        let sp = self.vocab.special;
        if t == sp.tool_start {
            Slot::Coord(0)
        } else if t == sp.ans_start {
            Slot::Label
        } else {
            Slot::Outside
        }
    }

    fn slot_index(&self) -> usize {
        self.slot.index()
    }

    /// Prompt cells holding the least frequent level; empty when the prompt
    /// is uniform or not seen yet.
    pub fn salient_cells(&self) -> Vec<usize> {
        let Some(p) = &self.prompt_levels else { return Vec::new() };
        let top = self.layout.levels.max(1) - 1;
        let mut freq = vec![0usize; top + 1];
        for &l in p {
            freq[(l as usize).min(top)] += 1;
        }
        let present: Vec<usize> = (0..freq.len()).filter(|&l| freq[l] > 0).collect();
        if present.len() < 2 {
            return Vec::new();
        }
        let rarest = present.iter().map(|&l| freq[l]).min().unwrap_or(0);
        (0..p.len()).filter(|&c| freq[(p[c] as usize).min(top)] == rarest).collect()
    }

    /// Active (binary) feature indices for the next token.
    pub fn features(&self) -> Vec<usize> {
        let l = &self.layout;
        let s = self.slot_index();
        let mut out = Vec::with_capacity(2 + l.cells);
        out.push(s);
        out.push(l.slot_count + s * (MAX_COUNT_FEATURE + 1) + self.tool_obs_count.min(MAX_COUNT_FEATURE));
        let obs_block = |base: usize, levels: &[u8], out: &mut Vec<usize>| {
            for (cell, &lv) in levels.iter().enumerate() {
                out.push(base + cell * l.levels + (lv as usize).min(l.levels - 1));
            }
        };
        match self.slot {
            Slot::Coord(k) => {
                if let Some(p) = &self.prompt_levels {
                    obs_block(l.prompt_cells + k as usize * l.cells * l.levels, p, &mut out);
                }
                if k >= 2 {
                    let prev = self.coords[k as usize - 2] as usize;
                    out.push(l.prev_coord + (k as usize - 2) * l.bins + prev.min(l.bins - 1));
                }
            }
            Slot::Outside => {
                if let Some(o) = &self.last_obs {
                    obs_block(l.outside_obs, o, &mut out);
                }
            }
            Slot::Label => {
                if let Some(o) = &self.last_obs {
                    obs_block(l.label_obs, o, &mut out);
                }
            }
            _ => {}
        }
        out
    }
}

/// Settings of the built-in policy.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinearPolicyConfig {
    /// Logit bonus for tokens the grammar allows in the current slot.
    pub format_prior: f64,
    /// Pooling cells per observation.
    pub cells: usize,
    /// Logit bonus for coordinate bins inside the most salient prompt cell.
    #[serde(default)]
    pub saliency_prior: f64,
    #[serde(default)]
    pub optimizer: Optimizer,
}

/// Update rule applied to the policy-loss gradient.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Sgd,
    Adam,
}

/// Parameters plus optimizer moments.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PolicyState {
    pub theta: Vec<f64>,
    pub optimizer: AdamState,
}

/// First and second moment estimates for Adam.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct AdamState {
    pub step: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn apply(&mut self, theta: &[f64], grad: &[f64], lr: f64) -> Vec<f64> {
        if self.m.len() != theta.len() {
            self.m = vec![0.0; theta.len()];
            self.v = vec![0.0; theta.len()];
        }
        self.step += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.step as i32);
        let c2 = 1.0 - ADAM_BETA2.powi(self.step as i32);
        let mut out = Vec::with_capacity(theta.len());
        for i in 0..theta.len() {
            let g = grad[i];
            self.m[i] = ADAM_BETA1 * self.m[i] + (1.0 - ADAM_BETA1) * g;
            self.v[i] = ADAM_BETA2 * self.v[i] + (1.0 - ADAM_BETA2) * g * g;
            let (mh, vh) = (self.m[i] / c1, self.v[i] / c2);
            out.push(theta[i] - lr * mh / (vh.sqrt() + ADAM_EPS));
        }
        out
    }
}

impl Default for LinearPolicyConfig {
    fn default() -> Self {
        Self { format_prior: 10.0, cells: 16, saliency_prior: 5.0, optimizer: Optimizer::Sgd }
    }
}

struct Shared {
    vocab: VocabSpec,
    layout: FeatureLayout,
    saliency: f64,
    /// `N_SLOTS x V` additive logit prior.
    prior: Vec<f64>,
}

/// `logits = prior[slot] + theta^T phi(context)` with binary sparse features.
///
/// Parameters are stored feature-major (`theta[f * V + v]`). Sessions hold a
/// snapshot of the parameters taken when they are opened.
pub struct LinearSoftmaxPolicy {
    shared: Arc<Shared>,
    config: LinearPolicyConfig,
    theta: RwLock<Arc<Vec<f64>>>,
    adam: Mutex<AdamState>,
}

impl std::fmt::Debug for LinearSoftmaxPolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LinearSoftmaxPolicy")
            .field("features", &self.shared.layout.len())
            .field("vocab", &self.shared.vocab.size)
            .finish()
    }
}

fn grammar_prior(vocab: &VocabSpec, strength: f64) -> Vec<f64> {
    let v = vocab.size as usize;
    let sp = vocab.special;
    let mut prior = vec![0.0; N_SLOTS * v];
    let mut allow = |slot: Slot, t: u32| prior[slot.index() * v + t as usize] = strength;
    allow(Slot::Outside, sp.tool_start);
    allow(Slot::Outside, sp.ans_start);
    for k in 0..4 {
        for b in 0..vocab.bins_per_axis {
            allow(Slot::Coord(k), vocab.coord_token(b));
        }
    }
    allow(Slot::ExpectToolEnd, sp.tool_end);
    for a in 0..vocab.n_answers {
        allow(Slot::Label, vocab.answer_token(a));
    }
    allow(Slot::ExpectAnsEnd, sp.ans_end);
    prior
}

impl LinearSoftmaxPolicy {
    pub fn new(vocab: VocabSpec, config: LinearPolicyConfig) -> Result<Self> {
        vocab.validate()?;
        if config.cells == 0 {
            return Err(MedvrError::Config("policy.cells must be positive".into()));
        }
        let layout = FeatureLayout::for_vocab(&vocab, config.cells);
        let theta = vec![0.0; layout.len() * vocab.size as usize];
        let prior = grammar_prior(&vocab, config.format_prior);
        Ok(Self {
            shared: Arc::new(Shared { vocab, layout, saliency: config.saliency_prior, prior }),
            config,
            theta: RwLock::new(Arc::new(theta)),
            adam: Mutex::new(AdamState::default()),
        })
    }

    pub fn layout(&self) -> FeatureLayout {
        self.shared.layout
    }

    pub fn config(&self) -> &LinearPolicyConfig {
        &self.config
    }

    pub fn theta(&self) -> Arc<Vec<f64>> {
        self.theta.read().expect("theta lock poisoned").clone()
    }

    pub fn set_theta(&self, theta: Vec<f64>) -> Result<()> {
        let expected = self.shared.layout.len() * self.shared.vocab.size as usize;
        if theta.len() != expected {
            return Err(MedvrError::InvalidArgument(format!(
                "expected {expected} parameters, got {}",
                theta.len()
            )));
        }
        if theta.iter().any(|x| !x.is_finite()) {
            return Err(MedvrError::NonFinite("parameter vector".into()));
        }
        *self.theta.write().expect("theta lock poisoned") = Arc::new(theta);
        Ok(())
    }

    pub fn restore(&self, state: PolicyState) -> Result<()> {
        self.set_theta(state.theta)?;
        self.set_optimizer_state(state.optimizer);
        Ok(())
    }

    pub fn optimizer_state(&self) -> AdamState {
        self.adam.lock().expect("optimizer lock poisoned").clone()
    }

    pub fn set_optimizer_state(&self, state: AdamState) {
        *self.adam.lock().expect("optimizer lock poisoned") = state;
    }

    pub fn tracker(&self) -> FeatureTracker {
        FeatureTracker::new(self.shared.vocab.clone(), self.shared.layout)
    }


    /// Logits for an explicit feature list and slot prior under `theta`.
    pub fn logits_with(&self, theta: &[f64], tracker: &FeatureTracker) -> Vec<f64> {
        compute_logits(&self.shared, theta, tracker)
    }

    /// Replays a trajectory and returns `(features, context prior)` for every
    /// token position where `mask` is set.
    pub fn replay(&self, prompt: &[u32], tokens: &[u32], mask: &[bool]) -> Vec<(Vec<usize>, Vec<f64>)> {
        let mut tr = self.tracker();
        for &t in prompt {
            tr.push(t);
        }
        let mut out = Vec::new();
        for (i, &t) in tokens.iter().enumerate() {
            if mask[i] {
                out.push((tr.features(), context_prior(&self.shared, &tr)));
            }
            tr.push(t);
        }
        out
    }
}

/// Parameter-free part of the logits: grammar prior plus saliency bonus.
fn context_prior(shared: &Shared, tracker: &FeatureTracker) -> Vec<f64> {
    let v = shared.vocab.size as usize;
    let s = tracker.slot_index();
    let mut prior = shared.prior[s * v..(s + 1) * v].to_vec();
    if let (Slot::Coord(k), true) = (tracker.slot, shared.saliency != 0.0) {
        let grid = (shared.layout.cells as f64).sqrt() as usize;
        let bins = shared.vocab.bins_per_axis as usize;
        if grid > 0 && grid * grid == shared.layout.cells && bins.is_multiple_of(grid) {
            let per_cell = bins / grid;
            let mut bonus = vec![0.0f64; bins];
            for c in tracker.salient_cells() {
                // x coordinates follow the cell column, y coordinates its row;
                // start corners lean to the cell start, end corners to its end
                let pos = if k % 2 == 0 { c % grid } else { c / grid };
                for j in 0..=per_cell {
                    let b = pos * per_cell + j;
                    if b >= bins {
                        break;
                    }
                    let frac = j as f64 / per_cell as f64;
                    let w = if k < 2 { 1.0 - frac } else { frac };
                    bonus[b] = bonus[b].max(shared.saliency * w);
                }
            }
            for (b, x) in bonus.into_iter().enumerate() {
                prior[shared.vocab.coord_token(b as u32) as usize] += x;
            }
        }
    }
    prior
}

fn compute_logits(shared: &Shared, theta: &[f64], tracker: &FeatureTracker) -> Vec<f64> {
    let mut logits = context_prior(shared, tracker);
    let v = shared.vocab.size as usize;
    for f in tracker.features() {
        let row = &theta[f * v..(f + 1) * v];
        for (z, w) in logits.iter_mut().zip(row) {
            *z += w;
        }
    }
    logits
}

struct LinearSession {
    shared: Arc<Shared>,
    theta: Arc<Vec<f64>>,
    tracker: FeatureTracker,
}

impl PolicySession for LinearSession {
    fn next_logits(&mut self) -> Result<Vec<f64>> {
        Ok(compute_logits(&self.shared, &self.theta, &self.tracker))
    }
    fn append(&mut self, tokens: &[u32], _is_observation: bool) -> Result<()> {
        for &t in tokens {
            if t >= self.shared.vocab.size {
                return Err(MedvrError::InvalidArgument(format!("token {t} outside vocabulary")));
            }
            self.tracker.push(t);
        }
        Ok(())
    }
    fn fork(&mut self) -> Result<Box<dyn PolicySession>> {
        Ok(Box::new(LinearSession {
            shared: self.shared.clone(),
            theta: self.theta.clone(),
            tracker: self.tracker.clone(),
        }))
    }
}

impl Policy for LinearSoftmaxPolicy {
    fn vocab(&self) -> &VocabSpec {
        &self.shared.vocab
    }
    fn open_session(&self, prompt: &[u32]) -> Result<Box<dyn PolicySession>> {
        let mut s = LinearSession { shared: self.shared.clone(), theta: self.theta(), tracker: self.tracker() };
        s.append(prompt, true)?;
        Ok(Box::new(s))
    }
}

impl Learner for LinearSoftmaxPolicy {
    fn apply_update(&self, groups: &[GroupUpdate], cfg: &GrpoConfig) -> Result<LossReport> {
        let theta = self.theta();
        let samples = self.samples(groups)?;
        let report = grpo::linear_policy_loss(&theta, self.shared.vocab.size as usize, &samples, cfg)?;
        if report.loss.is_nan() || report.grad.iter().any(|g| !g.is_finite()) {
            return Err(MedvrError::NonFinite("policy gradient".into()));
        }
        let updated: Vec<f64> = match self.config.optimizer {
            Optimizer::Sgd => theta.iter().zip(&report.grad).map(|(w, g)| w - cfg.learning_rate * g).collect(),
            Optimizer::Adam => self.adam.lock().expect("optimizer lock poisoned").apply(&theta, &report.grad, cfg.learning_rate),
        };
        self.set_theta(updated)?;
        Ok(report)
    }
    fn state(&self) -> Option<PolicyState> {
        Some(PolicyState { theta: self.theta().as_ref().clone(), optimizer: self.optimizer_state() })
    }
}

impl LinearSoftmaxPolicy {
    /// Converts updates into per-group token samples for the loss.
    pub fn samples(&self, groups: &[GroupUpdate]) -> Result<Vec<Vec<grpo::TokenSample>>> {
        let mut out = Vec::with_capacity(groups.len());
        for g in groups {
            let mut samples = Vec::new();
            for t in &g.trajectories {
                if t.tokens.len() != t.mask.len() || t.tokens.len() != t.old_logprobs.len() {
                    return Err(MedvrError::InvalidArgument("update vectors differ in length".into()));
                }
                let rows = self.replay(&t.prompt, &t.tokens, &t.mask);
                let masked = t.tokens.iter().zip(&t.old_logprobs).zip(&t.mask).filter(|(_, &m)| m);
                for ((feats, prior), ((&tok, &old), _)) in rows.into_iter().zip(masked) {
                    samples.push(grpo::TokenSample {
                        features: feats,
                        prior,
                        token: tok,
                        old_logprob: old,
                        advantage: t.advantage,
                    });
                }
            }
            out.push(samples);
        }
        Ok(out)
    }
}

/// Fixed token script emitted with a large logit margin; ignores
/// observations entirely. Used for oracle and random baselines.
#[derive(Debug, Clone)]
pub struct ScriptedPolicy {
    vocab: VocabSpec,
    script: Arc<Vec<u32>>,
    margin: f64,
}

impl ScriptedPolicy {
    pub fn new(vocab: VocabSpec, script: Vec<u32>) -> Self {
        Self { vocab, script: Arc::new(script), margin: 40.0 }
    }

    pub fn script(&self) -> &[u32] {
        &self.script
    }
}

struct ScriptedSession {
    vocab_size: usize,
    eos: u32,
    script: Arc<Vec<u32>>,
    pos: usize,
    margin: f64,
}

impl PolicySession for ScriptedSession {
    fn next_logits(&mut self) -> Result<Vec<f64>> {
        let tok = self.script.get(self.pos).copied().unwrap_or(self.eos);
        let mut z = vec![0.0; self.vocab_size];
        z[tok as usize] = self.margin;
        Ok(z)
    }
    fn append(&mut self, tokens: &[u32], is_observation: bool) -> Result<()> {
        if !is_observation {
            self.pos += tokens.len();
        }
        Ok(())
    }
    fn fork(&mut self) -> Result<Box<dyn PolicySession>> {
        Ok(Box::new(ScriptedSession { script: self.script.clone(), ..*self }))
    }
}

impl Policy for ScriptedPolicy {
    fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }
    fn open_session(&self, _prompt: &[u32]) -> Result<Box<dyn PolicySession>> {
        Ok(Box::new(ScriptedSession {
            vocab_size: self.vocab.size as usize,
            eos: self.vocab.special.eos,
            script: self.script.clone(),
            pos: 0,
            margin: self.margin,
        }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn vocab() -> VocabSpec {
        VocabSpec::default()
    }

    fn prompt(v: &VocabSpec, levels: &[u32]) -> Vec<u32> {
        let mut p = vec![v.special.obs_start];
        p.extend(levels.iter().map(|&l| v.obs_level_token(l)));
        p.push(v.special.obs_end);
        p
    }

    #[test]
    fn layout_is_dense_and_sized() {
        let l = FeatureLayout::new(16, 8, 32);
        assert_eq!(l.len(), 8 + 32 + 512 + 128 + 128 + 64);
    }

    #[test]
    fn fresh_policy_follows_grammar_prior() {
        let v = vocab();
        let pol = LinearSoftmaxPolicy::new(v.clone(), LinearPolicyConfig::default()).unwrap();
        let mut s = pol.open_session(&prompt(&v, &[0; 16])).unwrap();
        let z = s.next_logits().unwrap();
        assert_eq!(z[v.special.tool_start as usize], 10.0);
        assert_eq!(z[v.special.ans_start as usize], 10.0);
        assert_eq!(z[v.special.eos as usize], 0.0);
        s.append(&[v.special.tool_start], false).unwrap();
        let z = s.next_logits().unwrap();
        assert_eq!(z[v.coord_token(5) as usize], 10.0);
        assert_eq!(z[v.special.tool_end as usize], 0.0);
    }

    #[test]
    fn tracker_walks_the_grammar() {
        let v = vocab();
        let l = FeatureLayout::for_vocab(&v, 16);
        let mut t = FeatureTracker::new(v.clone(), l);
        for tok in prompt(&v, &[1; 16]) {
            t.push(tok);
        }
        assert_eq!(t.slot, Slot::Outside);
        t.push(v.special.tool_start);
        assert_eq!(t.slot, Slot::Coord(0));
        // prompt-cell features present for coordinate slots
        assert_eq!(t.features().len(), 2 + 16);
        for b in [3, 4, 9, 10] {
            t.push(v.coord_token(b));
        }
        assert_eq!(t.slot, Slot::ExpectToolEnd);
        t.push(v.special.tool_end);
        for tok in prompt(&v, &[7; 16]) {
            t.push(tok);
        }
        assert_eq!(t.tool_obs_count, 1);
        assert_eq!(t.last_obs.as_deref(), Some(&[7u8; 16][..]));
        t.push(v.special.ans_start);
        assert_eq!(t.slot, Slot::Label);
        assert_eq!(t.features().len(), 2 + 16);
    }

    #[test]
    fn second_corner_sees_first() {
        let v = vocab();
        let l = FeatureLayout::for_vocab(&v, 16);
        let mut t = FeatureTracker::new(v.clone(), l);
        t.push(v.special.tool_start);
        t.push(v.coord_token(4));
        t.push(v.coord_token(2));
        let f = t.features();
        assert!(f.contains(&(l.prev_coord + 4)));
        t.push(v.coord_token(10));
        assert!(t.features().contains(&(l.prev_coord + l.bins + 2)));
    }

    #[test]
    fn fork_isolates_context() {
        let v = vocab();
        let pol = LinearSoftmaxPolicy::new(v.clone(), LinearPolicyConfig::default()).unwrap();
        let mut a = pol.open_session(&prompt(&v, &[0; 16])).unwrap();
        let mut b = a.fork().unwrap();
        let before = b.next_logits().unwrap();
        a.append(&[v.special.tool_start], false).unwrap();
        assert_eq!(b.next_logits().unwrap(), before);
        assert_ne!(a.next_logits().unwrap(), before);
    }

    #[test]
    fn sessions_snapshot_parameters() {
        let v = vocab();
        let pol = LinearSoftmaxPolicy::new(v.clone(), LinearPolicyConfig::default()).unwrap();
        let mut s = pol.open_session(&[]).unwrap();
        let n = pol.theta().len();
        pol.set_theta(vec![1.0; n]).unwrap();
        assert_eq!(s.next_logits().unwrap()[v.special.tool_start as usize], 10.0);
        let mut s2 = pol.open_session(&[]).unwrap();
        assert!(s2.next_logits().unwrap()[v.special.tool_start as usize] > 10.0);
        assert!(pol.set_theta(vec![f64::NAN; n]).is_err());
        assert!(pol.set_theta(vec![0.0; 3]).is_err());
    }

    #[test]
    fn scripted_policy_replays_script() {
        let v = vocab();
        let pol = ScriptedPolicy::new(v.clone(), vec![v.special.ans_start, v.answer_token(2), v.special.ans_end]);
        let mut s = pol.open_session(&[]).unwrap();
        for &want in pol.script() {
            let z = s.next_logits().unwrap();
            let best = z.iter().enumerate().max_by(|a, b| a.1.total_cmp(b.1)).unwrap().0 as u32;
            assert_eq!(best, want);
            s.append(&[best], false).unwrap();
        }
        let z = s.next_logits().unwrap();
        assert_eq!(z[v.special.eos as usize], 40.0);
    }
}
