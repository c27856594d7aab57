//! Token generation with tool execution, entropy-gated branching, and the
//! two-phase rollout budget.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::distributions::{Distribution, WeightedIndex};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::entropy::{branch_probability, entropy_delta, log_softmax, token_entropy, EntropyState};
use crate::error::{MedvrError, Result};
use crate::policy::{Policy, PolicySession};
use crate::tools::ZoomEnv;
use crate::types::{BoundingBox, EvrConfig, Lineage, Phase, Termination, TokenEvent, ToolCall, Trajectory, VocabSpec};

/// Longest tool span, TOOL_START and TOOL_END included.
pub const MAX_SPAN_TOKENS: usize = 8;

/// How many times a failed base or fill trajectory is regenerated.
const MAX_RETRIES: usize = 2;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RolloutLimits {
    pub max_tool_calls: usize,
    pub max_tokens_per_turn: usize,
    pub max_total_tokens: usize,
}

impl Default for RolloutLimits {
    fn default() -> Self {
        Self { max_tool_calls: 6, max_tokens_per_turn: 4096, max_total_tokens: 16384 }
    }
}

impl RolloutLimits {
    pub fn eval() -> Self {
        Self { max_tool_calls: 4, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_tool_calls == 0 || self.max_tokens_per_turn == 0 || self.max_total_tokens == 0 {
            return Err(MedvrError::Config("rollout limits must be positive".into()));
        }
        Ok(())
    }
}

/// One evaluation of the branching rule.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchDecision {
    pub trajectory: u64,
    pub step: usize,
    pub delta_h: f64,
    pub p: f64,
    pub u: f64,
    pub branched: bool,
}

/// Parser position inside the output grammar.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub enum StreamState {
    #[default]
    Outside,
    Tool { start: usize, coords: Vec<u32>, len: usize },
    Answer { label: Option<u32> },
}

impl StreamState {
    /// True when the next token fills a coordinate slot of an open span.
    pub fn at_coordinate_slot(&self) -> bool {
        matches!(self, StreamState::Tool { coords, .. } if coords.len() < 4)
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ParseEvent {
    None,
    ToolStart,
    ToolCall { bins: [u32; 4], span_start: usize },
    AnswerStart,
    Answer(u32),
    MalformedAnswer,
    Eos,
    /// A structural or payload token outside any span.
    Stray,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ParseStep {
    pub event: ParseEvent,
    /// The open tool span was abandoned before this token's own event.
    pub malformed_span: bool,
    pub in_tool_span: bool,
}

/// Advances the grammar by one token at position `index`.
pub fn parse_step(state: &mut StreamState, vocab: &VocabSpec, token: u32, index: usize) -> ParseStep {
    let sp = vocab.special;
    match std::mem::take(state) {
        StreamState::Tool { start, mut coords, len } => {
            if token == sp.tool_end {
                let event = if coords.len() == 4 {
                    ParseEvent::ToolCall { bins: [coords[0], coords[1], coords[2], coords[3]], span_start: start }
                } else {
                    ParseEvent::None
                };
                let malformed = coords.len() != 4;
                return ParseStep { event, malformed_span: malformed, in_tool_span: true };
            }
            if let Some(b) = vocab.coord_bin(token) {
                coords.push(b);
                let len = len + 1;
                if len >= MAX_SPAN_TOKENS {
                    return ParseStep { event: ParseEvent::None, malformed_span: true, in_tool_span: true };
                }
                *state = StreamState::Tool { start, coords, len };
                return ParseStep { event: ParseEvent::None, malformed_span: false, in_tool_span: true };
            }
            // abandon the span and read the token as if outside
            let mut step = parse_outside(state, vocab, token, index);
            step.malformed_span = true;
            step
        }
        StreamState::Answer { label } => {
            let event = match (label, vocab.answer_label(token)) {
                (None, Some(l)) => {
                    *state = StreamState::Answer { label: Some(l) };
                    ParseEvent::None
                }
                (Some(l), None) if token == sp.ans_end => ParseEvent::Answer(l),
                _ => ParseEvent::MalformedAnswer,
            };
            ParseStep { event, malformed_span: false, in_tool_span: false }
        }
        StreamState::Outside => parse_outside(state, vocab, token, index),
    }
}

fn parse_outside(state: &mut StreamState, vocab: &VocabSpec, token: u32, index: usize) -> ParseStep {
    let sp = vocab.special;
    let (event, in_tool) = if token == sp.tool_start {
        *state = StreamState::Tool { start: index, coords: Vec::with_capacity(4), len: 1 };
        (ParseEvent::ToolStart, true)
    } else if token == sp.ans_start {
        *state = StreamState::Answer { label: None };
        (ParseEvent::AnswerStart, false)
    } else if token == sp.eos {
        (ParseEvent::Eos, false)
    } else {
        (ParseEvent::Stray, false)
    };
    ParseStep { event, malformed_span: false, in_tool_span: in_tool }
}

/// Pixel box from four coordinate bins: `bin * extent / bins`, rounded down.
pub fn decode_box(bins: [u32; 4], view: (u32, u32), bins_per_axis: u32) -> BoundingBox {
    let x = |b: u32| (b as u64 * view.0 as u64 / bins_per_axis as u64) as i32;
    let y = |b: u32| (b as u64 * view.1 as u64 / bins_per_axis as u64) as i32;
    BoundingBox::new(x(bins[0]), y(bins[1]), x(bins[2]), y(bins[3]))
}

/// Shared exploration counter; decrements never go below zero.
#[derive(Debug)]
pub struct ExplorationBudget(AtomicUsize);

impl ExplorationBudget {
    pub fn new(units: usize) -> Self {
        Self(AtomicUsize::new(units))
    }
    pub fn remaining(&self) -> usize {
        self.0.load(Ordering::SeqCst)
    }
    pub fn try_consume(&self) -> bool {
        self.0
            .fetch_update(Ordering::SeqCst, Ordering::SeqCst, |n| n.checked_sub(1))
            .is_ok()
    }
    pub fn refund(&self, units: usize) {
        self.0.fetch_add(units, Ordering::SeqCst);
    }
}

/// Sampling regime for a rollout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decoding {
    Sample { temperature: f64 },
    Greedy,
}

impl Decoding {
    /// Temperature used for recorded entropies and log-probabilities.
    fn scoring_temperature(self) -> f64 {
        match self {
            Decoding::Sample { temperature } => temperature,
            Decoding::Greedy => 1.0,
        }
    }
}

/// Per-group rollout settings.
#[derive(Debug, Clone)]
pub struct GroupContext {
    pub seed: u64,
    pub iteration: u64,
    pub prompt_id: u64,
    /// Id of the first trajectory in the group; the rest follow in order.
    pub id_base: u64,
    pub evr: EvrConfig,
    pub limits: RolloutLimits,
    pub decoding: Decoding,
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Deterministic stream seed from a sequence of keys.
pub fn stream_seed(keys: &[u64]) -> u64 {
    keys.iter().fold(0x5EED_u64, |acc, &k| splitmix(acc ^ splitmix(k)))
}

impl GroupContext {
    fn rng(&self, ordinal: usize, attempt: usize) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(stream_seed(&[self.seed, self.iteration, self.prompt_id, ordinal as u64, attempt as u64]))
    }
}

/// Draws a token index. Greedy picks the first maximum.
pub fn sample_token(logits: &[f64], decoding: Decoding, rng: &mut impl Rng) -> Result<u32> {
    match decoding {
        Decoding::Greedy => {
            let mut best = 0;
            for (i, &z) in logits.iter().enumerate() {
                if z > logits[best] {
                    best = i;
                }
            }
            Ok(best as u32)
        }
        Decoding::Sample { temperature } => {
            let lp = log_softmax(logits, temperature)?;
            let w = WeightedIndex::new(lp.iter().map(|l| l.exp()))
                .map_err(|e| MedvrError::NonFinite(format!("sampling weights: {e}")))?;
            Ok(w.sample(rng) as u32)
        }
    }
}

/// In-progress trajectory; cloned (with a forked session) on branching.
struct Cursor {
    session: Box<dyn PolicySession>,
    events: Vec<TokenEvent>,
    tool_calls: Vec<ToolCall>,
    stream: StreamState,
    entropy: EntropyState,
    format_ok: bool,
    turn_tokens: usize,
    branched_this_span: bool,
}

impl Cursor {
    fn open(policy: &dyn Policy, prompt: &[u32], evr: &EvrConfig) -> Result<Self> {
        Ok(Self {
            session: policy.open_session(prompt)?,
            events: Vec::new(),
            tool_calls: Vec::new(),
            stream: StreamState::Outside,
            entropy: EntropyState::new(evr),
            format_ok: true,
            turn_tokens: 0,
            branched_this_span: false,
        })
    }

    fn fork(&mut self) -> Result<Self> {
        Ok(Self {
            session: self.session.fork()?,
            events: self.events.clone(),
            tool_calls: self.tool_calls.clone(),
            stream: self.stream.clone(),
            entropy: self.entropy.clone(),
            format_ok: self.format_ok,
            turn_tokens: self.turn_tokens,
            branched_this_span: true,
        })
    }
}

/// A fork waiting to be completed after its parent.
struct PendingBranch {
    cursor: Cursor,
    parent: u64,
    fork_step: usize,
}

/// Branching hooks for base trajectories.
struct BranchSink<'a> {
    budget: &'a ExplorationBudget,
    pending: Vec<PendingBranch>,
    decisions: Vec<BranchDecision>,
}

struct Finished {
    events: Vec<TokenEvent>,
    tool_calls: Vec<ToolCall>,
    answer: Option<u32>,
    format_ok: bool,
    termination: Termination,
}

fn drive(
    mut c: Cursor,
    env: &dyn ZoomEnv,
    vocab: &VocabSpec,
    ctx: &GroupContext,
    traj_id: u64,
    rng: &mut ChaCha8Rng,
    mut sink: Option<&mut BranchSink<'_>>,
) -> Result<Finished> {
    let t_score = ctx.decoding.scoring_temperature();
    let view = env.view_size();
    let finish = |c: Cursor, answer, termination| Finished {
        events: c.events,
        tool_calls: c.tool_calls,
        answer,
        format_ok: c.format_ok,
        termination,
    };
    loop {
        if c.events.len() >= ctx.limits.max_total_tokens || c.turn_tokens >= ctx.limits.max_tokens_per_turn {
            c.format_ok = false;
            return Ok(finish(c, None, Termination::TokenLimit));
        }
        let logits = c.session.next_logits()?;
        if logits.len() != vocab.size as usize {
            return Err(MedvrError::Protocol {
                code: "BAD_DIST".into(),
                detail: format!("expected {} logits, got {}", vocab.size, logits.len()),
            });
        }
        let h = token_entropy(&logits, t_score)?;

        if let Some(s) = sink.as_deref_mut() {
            if c.stream.at_coordinate_slot() && !c.branched_this_span {
                let mut probe = c.entropy.clone();
                probe.observe(h, true);
                let delta_h = entropy_delta(&probe)?;
                let p = branch_probability(delta_h, &ctx.evr);
                let u: f64 = rng.gen();
                let branched = u < p && s.budget.try_consume();
                if branched {
                    c.branched_this_span = true;
                    let fork_step = c.events.len();
                    s.pending.push(PendingBranch { cursor: c.fork()?, parent: traj_id, fork_step });
                }
                s.decisions.push(BranchDecision { trajectory: traj_id, step: c.events.len(), delta_h, p, u, branched });
            }
        }

        let token = sample_token(&logits, ctx.decoding, rng)?;
        let logprob = log_softmax(&logits, t_score)?[token as usize];
        let index = c.events.len();
        let step = parse_step(&mut c.stream, vocab, token, index);
        let event = TokenEvent {
            token_id: token,
            entropy_nats: h,
            logprob,
            is_observation: false,
            in_tool_span: step.in_tool_span,
            step_index: index as u32,
            injected: false,
        };
        c.entropy.update(&event);
        c.events.push(event);
        c.turn_tokens += 1;
        c.session.append(&[token], false)?;
        if step.malformed_span {
            c.format_ok = false;
        }
        if !matches!(c.stream, StreamState::Tool { .. }) {
            c.branched_this_span = false;
        }

        match step.event {
            ParseEvent::None | ParseEvent::AnswerStart => {}
            ParseEvent::Stray => c.format_ok = false,
            ParseEvent::ToolStart => {
                if c.tool_calls.len() >= ctx.limits.max_tool_calls {
                    // out of calls: compel an answer
                    c.format_ok = false;
                    let ans = vocab.special.ans_start;
                    c.stream = StreamState::Answer { label: None };
                    c.events.push(TokenEvent {
                        token_id: ans,
                        entropy_nats: 0.0,
                        logprob: 0.0,
                        is_observation: false,
                        in_tool_span: false,
                        step_index: c.events.len() as u32,
                        injected: true,
                    });
                    c.session.append(&[ans], false)?;
                }
            }
            ParseEvent::ToolCall { bins, span_start } => {
                let view_box = decode_box(bins, view, vocab.bins_per_axis);
                match env.zoom(&view_box) {
                    Ok((orig, obs)) => {
                        c.tool_calls.push(ToolCall {
                            bbox: orig,
                            span: span_start..c.events.len(),
                            call_index: c.tool_calls.len() as u32,
                        });
                        for &t in &obs {
                            c.events.push(TokenEvent {
                                token_id: t,
                                entropy_nats: 0.0,
                                logprob: 0.0,
                                is_observation: true,
                                in_tool_span: false,
                                step_index: c.events.len() as u32,
                                injected: false,
                            });
                        }
                        c.session.append(&obs, true)?;
                        c.turn_tokens = 0;
                    }
                    Err(MedvrError::EmptyBox) | Err(MedvrError::InvalidArgument(_)) => c.format_ok = false,
                    Err(e) => return Err(e),
                }
            }
            ParseEvent::Answer(label) => return Ok(finish(c, Some(label), Termination::Answer)),
            ParseEvent::MalformedAnswer => {
                c.format_ok = false;
                return Ok(finish(c, None, Termination::MalformedAnswer));
            }
            ParseEvent::Eos => {
                c.format_ok = false;
                return Ok(finish(c, None, Termination::Eos));
            }
        }
    }
}

fn assemble(f: Finished, id: u64, ctx: &GroupContext, env: &dyn ZoomEnv, phase: Phase, lineage: Lineage) -> Trajectory {
    let (w, h) = env.original_size();
    Trajectory {
        id,
        prompt_id: ctx.prompt_id,
        iteration: ctx.iteration,
        events: f.events,
        tool_calls: f.tool_calls,
        answer: f.answer,
        format_ok: f.format_ok,
        termination: f.termination,
        reward: None,
        lineage,
        phase,
        image_width: w,
        image_height: h,
        footprint: None,
        gt_box: None,
    }
}

/// Runs one trajectory without branching.
pub fn run_trajectory(
    policy: &dyn Policy,
    env: &dyn ZoomEnv,
    ctx: &GroupContext,
    id: u64,
    rng: &mut ChaCha8Rng,
) -> Result<Trajectory> {
    let vocab = policy.vocab().clone();
    let cursor = Cursor::open(policy, &env.prompt_tokens(), &ctx.evr)?;
    let f = drive(cursor, env, &vocab, ctx, id, rng, None)?;
    Ok(assemble(f, id, ctx, env, Phase::Base, Lineage::default()))
}

/// Result of one rollout group.
#[derive(Debug, Clone)]
pub struct GroupOutcome {
    pub trajectories: Vec<Trajectory>,
    pub decisions: Vec<BranchDecision>,
    /// Trajectories discarded after policy failures.
    pub failures: usize,
}

impl GroupOutcome {
    pub fn count(&self, phase: Phase) -> usize {
        self.trajectories.iter().filter(|t| t.phase == phase).count()
    }
}

fn retryable(e: &MedvrError) -> bool {
    matches!(e, MedvrError::PolicyUnavailable(_) | MedvrError::Protocol { .. })
}

/// Generates exactly `m` trajectories: `m/2` base paths (which may fork
/// branches), their branches, then independent fills.
pub fn generate_group(policy: &dyn Policy, env: &dyn ZoomEnv, ctx: &GroupContext) -> Result<GroupOutcome> {
    ctx.evr.validate()?;
    ctx.limits.validate()?;
    let m = ctx.evr.m_rollouts;
    let half = m / 2;
    let vocab = policy.vocab().clone();
    let prompt = env.prompt_tokens();
    let budget = ExplorationBudget::new(half);
    let mut sink = BranchSink { budget: &budget, pending: Vec::new(), decisions: Vec::new() };
    let mut out: Vec<Trajectory> = Vec::with_capacity(m);
    let mut failures = 0;

    for i in 0..half {
        let id = ctx.id_base + i as u64;
        let mut attempt = 0;
        loop {
            let (pending_before, decisions_before) = (sink.pending.len(), sink.decisions.len());
            let mut rng = ctx.rng(i, attempt);
            let result = Cursor::open(policy, &prompt, &ctx.evr)
                .and_then(|c| drive(c, env, &vocab, ctx, id, &mut rng, Some(&mut sink)));
            match result {
                Ok(f) => {
                    out.push(assemble(f, id, ctx, env, Phase::Base, Lineage::default()));
                    break;
                }
                Err(e) if retryable(&e) && attempt < MAX_RETRIES => {
                    log::warn!("base trajectory {id} failed, retrying: {e}");
                    budget.refund(sink.pending.len() - pending_before);
                    sink.pending.truncate(pending_before);
                    sink.decisions.truncate(decisions_before);
                    failures += 1;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let pending = std::mem::take(&mut sink.pending);
    let decisions = std::mem::take(&mut sink.decisions);
    for p in pending {
        let ordinal = out.len();
        let id = ctx.id_base + ordinal as u64;
        let mut rng = ctx.rng(ordinal, 0);
        match drive(p.cursor, env, &vocab, ctx, id, &mut rng, None) {
            Ok(f) => {
                let lineage = Lineage { parent: Some(p.parent), fork_step: Some(p.fork_step) };
                out.push(assemble(f, id, ctx, env, Phase::Branch, lineage));
            }
            Err(e) if retryable(&e) => {
                log::warn!("branch of {} failed, refunding: {e}", p.parent);
                budget.refund(1);
                failures += 1;
            }
            Err(e) => return Err(e),
        }
    }

    while out.len() < m {
        let ordinal = out.len();
        let id = ctx.id_base + ordinal as u64;
        let mut attempt = 0;
        loop {
            let mut rng = ctx.rng(ordinal, attempt);
            let result = Cursor::open(policy, &prompt, &ctx.evr)
                .and_then(|c| drive(c, env, &vocab, ctx, id, &mut rng, None));
            match result {
                Ok(f) => {
                    out.push(assemble(f, id, ctx, env, Phase::Fill, Lineage::default()));
                    break;
                }
                Err(e) if retryable(&e) && attempt < MAX_RETRIES => {
                    log::warn!("fill trajectory {id} failed, retrying: {e}");
                    failures += 1;
                    attempt += 1;
                }
                Err(e) => return Err(e),
            }
        }
    }

    let n_base = out.iter().filter(|t| t.phase == Phase::Base).count();
    if out.len() != m || n_base != half {
        return Err(MedvrError::BudgetViolation { expected: m, actual: out.len() });
    }
    Ok(GroupOutcome { trajectories: out, decisions, failures })
}

/// Tokens reused by branches instead of being regenerated.
pub fn shared_prefix_tokens(group: &[Trajectory]) -> usize {
    group
        .iter()
        .filter(|t| t.phase == Phase::Branch)
        .filter_map(|t| t.lineage.fork_step)
        .sum()
}

/// Token accounting for one group.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct TokenCost {
    /// Tokens actually produced for this group (branch prefixes excluded).
    pub generated: usize,
    pub shared: usize,
    /// What independent sampling of the same trajectories would have cost.
    pub independent: usize,
}

impl TokenCost {
    pub fn of(group: &[Trajectory]) -> Self {
        let independent: usize = group.iter().map(|t| t.events.len()).sum();
        let shared = shared_prefix_tokens(group);
        Self { generated: independent - shared, shared, independent }
    }

    pub fn add(&mut self, other: TokenCost) {
        self.generated += other.generated;
        self.shared += other.shared;
        self.independent += other.independent;
    }

    /// `shared / independent`, 0 for an empty log.
    pub fn savings_ratio(&self) -> f64 {
        if self.independent == 0 {
            0.0
        } else {
            self.shared as f64 / self.independent as f64
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{LinearPolicyConfig, LinearSoftmaxPolicy, ScriptedPolicy};
    use crate::tools::{ImageHandle, ObservationEncoding, ZoomTool};
    use proptest::prelude::*;

    fn vocab() -> VocabSpec {
        VocabSpec::default()
    }

    fn env() -> ZoomTool {
        let img = ImageHandle::from_fn(64, 64, 1, |u, v| ((u * 7 + v * 13) % 256) as u8);
        ZoomTool::new(img, ObservationEncoding::default(), vocab())
    }

    fn ctx(evr: EvrConfig) -> GroupContext {
        GroupContext {
            seed: 9,
            iteration: 0,
            prompt_id: 3,
            id_base: 0,
            evr,
            limits: RolloutLimits::default(),
            decoding: Decoding::Sample { temperature: 1.0 },
        }
    }

    fn tool_span(v: &VocabSpec, bins: [u32; 4]) -> Vec<u32> {
        let mut s = vec![v.special.tool_start];
        s.extend(bins.iter().map(|&b| v.coord_token(b)));
        s.push(v.special.tool_end);
        s
    }

    fn answer(v: &VocabSpec, l: u32) -> Vec<u32> {
        vec![v.special.ans_start, v.answer_token(l), v.special.ans_end]
    }

    fn feed(v: &VocabSpec, tokens: &[u32]) -> Vec<ParseStep> {
        let mut st = StreamState::default();
        tokens.iter().enumerate().map(|(i, &t)| parse_step(&mut st, v, t, i)).collect()
    }

    #[test]
    fn parse_tool_span_decodes_box() {
        let v = vocab();
        let steps = feed(&v, &tool_span(&v, [4, 2, 10, 9]));
        let last = steps.last().unwrap();
        assert_eq!(last.event, ParseEvent::ToolCall { bins: [4, 2, 10, 9], span_start: 0 });
        assert!(steps.iter().all(|s| s.in_tool_span && !s.malformed_span));
        assert_eq!(decode_box([4, 2, 10, 9], (64, 64), 32), BoundingBox::new(8, 4, 20, 18));
    }

    #[test]
    fn overlong_span_is_malformed() {
        let v = vocab();
        let mut tokens = vec![v.special.tool_start];
        tokens.extend(std::iter::repeat_n(v.coord_token(1), 9));
        let steps = feed(&v, &tokens);
        assert!(steps.iter().any(|s| s.malformed_span));
        assert!(steps.iter().all(|s| !matches!(s.event, ParseEvent::ToolCall { .. })));
    }

    #[test]
    fn span_with_foreign_token_is_abandoned() {
        let v = vocab();
        let mut tokens = vec![v.special.tool_start, v.coord_token(1)];
        tokens.extend(answer(&v, 3));
        let steps = feed(&v, &tokens);
        assert!(steps[2].malformed_span);
        assert_eq!(steps[2].event, ParseEvent::AnswerStart);
        assert_eq!(steps[4].event, ParseEvent::Answer(3));
        // three coordinates then TOOL_END
        let steps = feed(&v, &[v.special.tool_start, v.coord_token(1), v.coord_token(1), v.coord_token(2), v.special.tool_end]);
        assert!(steps[4].malformed_span);
    }

    #[test]
    fn parse_answer() {
        let v = vocab();
        let steps = feed(&v, &answer(&v, 5));
        assert_eq!(steps[2].event, ParseEvent::Answer(5));
        let steps = feed(&v, &[v.special.ans_start, v.special.ans_end]);
        assert_eq!(steps[1].event, ParseEvent::MalformedAnswer);
        let steps = feed(&v, &[v.special.tool_end]);
        assert_eq!(steps[0].event, ParseEvent::Stray);
    }

    fn run_script(script: Vec<u32>, limits: RolloutLimits) -> Trajectory {
        let v = vocab();
        let pol = ScriptedPolicy::new(v, script);
        let mut c = ctx(EvrConfig::default());
        c.limits = limits;
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        run_trajectory(&pol, &env(), &c, 0, &mut rng).unwrap()
    }

    #[test]
    fn stub_answer_only() {
        let v = vocab();
        let t = run_script(answer(&v, 2), RolloutLimits::default());
        assert_eq!(t.events.len(), 3);
        assert_eq!(t.tool_calls.len(), 0);
        assert_eq!(t.answer, Some(2));
        assert!(t.format_ok);
        assert_eq!(t.termination, Termination::Answer);
    }

    #[test]
    fn stub_one_tool_call_then_answer() {
        let v = vocab();
        let mut s = tool_span(&v, [4, 2, 10, 9]);
        s.extend(answer(&v, 1));
        let t = run_script(s, RolloutLimits::default());
        assert_eq!(t.tool_calls.len(), 1);
        assert_eq!(t.tool_calls[0].bbox, BoundingBox::new(8, 4, 20, 18));
        assert_eq!(t.tool_calls[0].span, 0..6);
        assert_eq!(t.observation_tokens(), 18);
        assert!(t.events[6..24].iter().all(|e| e.is_observation));
        assert_eq!(t.events.len(), 6 + 18 + 3);
        assert_eq!(t.answer, Some(1));
        assert!(t.format_ok);
        for (i, e) in t.events.iter().enumerate() {
            assert_eq!(e.step_index as usize, i);
        }
    }

    #[test]
    fn tool_limit_forces_answer() {
        let v = vocab();
        let mut s = Vec::new();
        for _ in 0..7 {
            s.extend(tool_span(&v, [0, 0, 8, 8]));
        }
        s.extend(answer(&v, 1));
        let t = run_script(s, RolloutLimits::default());
        assert_eq!(t.tool_calls.len(), 6);
        assert!(!t.format_ok);
        assert!(t.events.iter().any(|e| e.injected && e.token_id == v.special.ans_start));
        assert_ne!(t.termination, Termination::TokenLimit);
    }

    #[test]
    fn malformed_span_is_not_executed() {
        let v = vocab();
        // zero-width box
        let mut s = tool_span(&v, [3, 3, 3, 9]);
        s.extend(answer(&v, 0));
        let t = run_script(s, RolloutLimits::default());
        assert_eq!(t.tool_calls.len(), 0);
        assert_eq!(t.observation_tokens(), 0);
        assert!(!t.format_ok);
        assert_eq!(t.answer, Some(0));
    }

    #[test]
    fn eos_and_token_limit() {
        let v = vocab();
        let t = run_script(vec![], RolloutLimits::default());
        assert_eq!(t.termination, Termination::Eos);
        assert!(!t.format_ok);
        let limits = RolloutLimits { max_total_tokens: 4, ..RolloutLimits::default() };
        let t = run_script(vec![v.coord_token(0); 10], limits);
        assert_eq!(t.termination, Termination::TokenLimit);
        assert_eq!(t.events.len(), 4);
    }

    #[test]
    fn budget_gate() {
        let b = ExplorationBudget::new(3);
        assert!(b.try_consume());
        assert_eq!(b.remaining(), 2);
        let b = ExplorationBudget::new(0);
        assert!(!b.try_consume());
        assert_eq!(b.remaining(), 0);
    }

    fn one_call_script(v: &VocabSpec) -> Vec<u32> {
        let mut s = tool_span(v, [4, 4, 12, 12]);
        s.extend(answer(v, 1));
        s
    }

    #[test]
    fn no_branching_splits_base_and_fill() {
        let v = vocab();
        let pol = ScriptedPolicy::new(v.clone(), one_call_script(&v));
        let evr = EvrConfig { p_base: 0.0, gamma: 0.0, ..EvrConfig::default() };
        let g = generate_group(&pol, &env(), &ctx(evr)).unwrap();
        assert_eq!((g.count(Phase::Base), g.count(Phase::Branch), g.count(Phase::Fill)), (8, 0, 8));
        assert_eq!(shared_prefix_tokens(&g.trajectories), 0);
    }

    #[test]
    fn forced_branching_exhausts_budget() {
        let v = vocab();
        let pol = ScriptedPolicy::new(v.clone(), one_call_script(&v));
        let evr = EvrConfig { p_base: 1.0, gamma: 0.0, ..EvrConfig::default() };
        let g = generate_group(&pol, &env(), &ctx(evr)).unwrap();
        assert_eq!((g.count(Phase::Base), g.count(Phase::Branch), g.count(Phase::Fill)), (8, 8, 0));
        for t in g.trajectories.iter().filter(|t| t.phase == Phase::Branch) {
            let parent = &g.trajectories[t.lineage.parent.unwrap() as usize];
            let k = t.lineage.fork_step.unwrap();
            assert_eq!(k, 1);
            assert_eq!(t.events[..k], parent.events[..k]);
        }
        assert_eq!(shared_prefix_tokens(&g.trajectories), 8);
    }

    #[test]
    fn shared_prefix_examples() {
        let v = vocab();
        let pol = ScriptedPolicy::new(v.clone(), answer(&v, 0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let base = run_trajectory(&pol, &env(), &ctx(EvrConfig::default()), 0, &mut rng).unwrap();
        let branch = |step| Trajectory {
            phase: Phase::Branch,
            lineage: Lineage { parent: Some(0), fork_step: Some(step) },
            ..base.clone()
        };
        assert_eq!(shared_prefix_tokens(std::slice::from_ref(&base)), 0);
        assert_eq!(shared_prefix_tokens(&[base.clone(), branch(40)]), 40);
        assert_eq!(shared_prefix_tokens(&[base.clone(), branch(10), branch(25)]), 35);
    }

    #[test]
    fn generation_is_reproducible() {
        let v = vocab();
        let pol = LinearSoftmaxPolicy::new(v, LinearPolicyConfig::default()).unwrap();
        let a = generate_group(&pol, &env(), &ctx(EvrConfig::default())).unwrap();
        let b = generate_group(&pol, &env(), &ctx(EvrConfig::default())).unwrap();
        assert_eq!(a.trajectories, b.trajectories);
        assert_eq!(a.decisions, b.decisions);
    }

    struct Flaky {
        inner: LinearSoftmaxPolicy,
        calls: std::sync::Arc<AtomicUsize>,
        fail_every: usize,
    }

    struct FlakySession {
        inner: Box<dyn PolicySession>,
        calls: std::sync::Arc<AtomicUsize>,
        fail_every: usize,
    }

    impl Policy for Flaky {
        fn vocab(&self) -> &VocabSpec {
            self.inner.vocab()
        }
        fn open_session(&self, prompt: &[u32]) -> Result<Box<dyn PolicySession>> {
            Ok(Box::new(FlakySession {
                inner: self.inner.open_session(prompt)?,
                calls: self.calls.clone(),
                fail_every: self.fail_every,
            }))
        }
    }

    impl PolicySession for FlakySession {
        fn next_logits(&mut self) -> Result<Vec<f64>> {
            let n = self.calls.fetch_add(1, Ordering::SeqCst);
            if n % self.fail_every == self.fail_every - 1 {
                return Err(MedvrError::PolicyUnavailable("injected".into()));
            }
            self.inner.next_logits()
        }
        fn append(&mut self, tokens: &[u32], obs: bool) -> Result<()> {
            self.inner.append(tokens, obs)
        }
        fn fork(&mut self) -> Result<Box<dyn PolicySession>> {
            Ok(Box::new(FlakySession {
                inner: self.inner.fork()?,
                calls: self.calls.clone(),
                fail_every: self.fail_every,
            }))
        }
    }

    #[test]
    fn failures_are_replaced_not_zero_filled() {
        let pol = Flaky {
            inner: LinearSoftmaxPolicy::new(vocab(), LinearPolicyConfig::default()).unwrap(),
            calls: Default::default(),
            fail_every: 97,
        };
        let g = generate_group(&pol, &env(), &ctx(EvrConfig::default())).unwrap();
        assert_eq!(g.trajectories.len(), 16);
        assert_eq!(g.count(Phase::Base), 8);
        assert!(g.failures > 0);
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(64))]
        #[test]
        fn group_budget_and_prefix_invariants(seed in any::<u64>(), p in 0.0f64..=1.0, gamma in 0.0f64..2.0, half in 1usize..6) {
            let pol = LinearSoftmaxPolicy::new(vocab(), LinearPolicyConfig::default()).unwrap();
            let evr = EvrConfig { p_base: p, gamma, m_rollouts: 2 * half, ..EvrConfig::default() };
            let mut c = ctx(evr);
            c.seed = seed;
            let g = generate_group(&pol, &env(), &c).unwrap();
            prop_assert_eq!(g.trajectories.len(), 2 * half);
            prop_assert_eq!(g.count(Phase::Base), half);
            for t in &g.trajectories {
                prop_assert!(t.tool_calls.len() <= c.limits.max_tool_calls);
                prop_assert_eq!(t.lineage.parent.is_some(), t.phase == Phase::Branch);
                if let (Some(parent), Some(k)) = (t.lineage.parent, t.lineage.fork_step) {
                    let parent = &g.trajectories[(parent - c.id_base) as usize];
                    prop_assert_eq!(&t.events[..k], &parent.events[..k]);
                    prop_assert!(k > 0);
                }
            }
            let branched = g.decisions.iter().filter(|d| d.branched).count();
            prop_assert_eq!(branched, g.count(Phase::Branch));
            if branched > 0 {
                prop_assert!(shared_prefix_tokens(&g.trajectories) > 0);
            }
        }
    }
}
