//! Domain types shared by every stage of the pipeline.
//!
//! Everything here is a plain value: cheap to clone, `Send + Sync`, and
//! serializable into the line-delimited trajectory log.

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{MedvrError, Result};

/// Reserved structural token ids.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SpecialTokens {
    pub eos: u32,
    pub tool_start: u32,
    pub tool_end: u32,
    pub obs_start: u32,
    pub obs_end: u32,
    pub ans_start: u32,
    pub ans_end: u32,
}

impl SpecialTokens {
    pub fn all(&self) -> [u32; 7] {
        [
            self.eos,
            self.tool_start,
            self.tool_end,
            self.obs_start,
            self.obs_end,
            self.ans_start,
            self.ans_end,
        ]
    }
}

/// Token vocabulary layout: seven structural tokens followed by contiguous
/// ranges for coordinate bins, answer labels and observation levels.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct VocabSpec {
    pub size: u32,
    pub special: SpecialTokens,
    pub coord_start: u32,
    pub bins_per_axis: u32,
    pub answer_start: u32,
    pub n_answers: u32,
    pub obs_level_start: u32,
    pub n_obs_levels: u32,
}

impl Default for VocabSpec {
    fn default() -> Self {
        Self::new(32, 8, 8)
    }
}

impl VocabSpec {
    /// Packs the ranges densely after the structural tokens.
    pub fn new(bins_per_axis: u32, n_answers: u32, n_obs_levels: u32) -> Self {
        let special = SpecialTokens {
            eos: 0,
            tool_start: 1,
            tool_end: 2,
            obs_start: 3,
            obs_end: 4,
            ans_start: 5,
            ans_end: 6,
        };
        let coord_start = 7;
        let answer_start = coord_start + bins_per_axis;
        let obs_level_start = answer_start + n_answers;
        Self {
            size: obs_level_start + n_obs_levels,
            special,
            coord_start,
            bins_per_axis,
            answer_start,
            n_answers,
            obs_level_start,
            n_obs_levels,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.bins_per_axis < 2 {
            return Err(MedvrError::Config("bins_per_axis must be >= 2".into()));
        }
        let mut ranges: Vec<(u32, u32, &str)> = self
            .special
            .all()
            .iter()
            .map(|&t| (t, t + 1, "special"))
            .collect();
        ranges.push((self.coord_start, self.coord_start + self.bins_per_axis, "coord"));
        ranges.push((self.answer_start, self.answer_start + self.n_answers, "answer"));
        ranges.push((
            self.obs_level_start,
            self.obs_level_start + self.n_obs_levels,
            "obs_level",
        ));
        ranges.sort_unstable();
        for w in ranges.windows(2) {
            if w[0].1 > w[1].0 {
                return Err(MedvrError::Config(format!(
                    "vocabulary ranges overlap: {} and {}",
                    w[0].2, w[1].2
                )));
            }
        }
        if let Some(last) = ranges.last() {
            if last.1 > self.size {
                return Err(MedvrError::Config(format!(
                    "reserved id {} exceeds vocab size {}",
                    last.1 - 1,
                    self.size
                )));
            }
        }
        Ok(())
    }

    pub fn is_coord(&self, t: u32) -> bool {
        t >= self.coord_start && t < self.coord_start + self.bins_per_axis
    }
    pub fn coord_bin(&self, t: u32) -> Option<u32> {
        self.is_coord(t).then(|| t - self.coord_start)
    }
    pub fn coord_token(&self, bin: u32) -> u32 {
        debug_assert!(bin < self.bins_per_axis);
        self.coord_start + bin
    }
    pub fn is_answer(&self, t: u32) -> bool {
        t >= self.answer_start && t < self.answer_start + self.n_answers
    }
    pub fn answer_label(&self, t: u32) -> Option<u32> {
        self.is_answer(t).then(|| t - self.answer_start)
    }
    pub fn answer_token(&self, label: u32) -> u32 {
        debug_assert!(label < self.n_answers);
        self.answer_start + label
    }
    pub fn obs_level(&self, t: u32) -> Option<u32> {
        (t >= self.obs_level_start && t < self.obs_level_start + self.n_obs_levels)
            .then(|| t - self.obs_level_start)
    }
    pub fn obs_level_token(&self, level: u32) -> u32 {
        debug_assert!(level < self.n_obs_levels);
        self.obs_level_start + level
    }
}

/// One step of a trajectory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TokenEvent {
    pub token_id: u32,
    pub entropy_nats: f64,
    pub logprob: f64,
    pub is_observation: bool,
    pub in_tool_span: bool,
    pub step_index: u32,
    /// Structural token inserted by the engine rather than sampled.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub injected: bool,
}

impl TokenEvent {
    /// Tokens that carry policy-gradient signal.
    pub fn is_trainable(&self) -> bool {
        !self.is_observation && !self.injected
    }
}

/// Half-open integer pixel box `[x0, x1) x [y0, y1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct BoundingBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl BoundingBox {
    pub const fn new(x0: i32, y0: i32, x1: i32, y1: i32) -> Self {
        Self { x0, y0, x1, y1 }
    }
    pub fn width(&self) -> u32 {
        (self.x1 - self.x0).max(0) as u32
    }
    pub fn height(&self) -> u32 {
        (self.y1 - self.y0).max(0) as u32
    }
    pub fn area(&self) -> u64 {
        self.width() as u64 * self.height() as u64
    }
    pub fn is_empty(&self) -> bool {
        self.x0 >= self.x1 || self.y0 >= self.y1
    }
}

/// Swaps reversed coordinates, clamps into `[0,w] x [0,h]` and rejects
/// zero-area results.
pub fn validate_box(b: BoundingBox, w: u32, h: u32) -> Result<BoundingBox> {
    if w == 0 || h == 0 {
        return Err(MedvrError::InvalidArgument("image dimensions must be positive".into()));
    }
    let (x0, x1) = if b.x1 < b.x0 { (b.x1, b.x0) } else { (b.x0, b.x1) };
    let (y0, y1) = if b.y1 < b.y0 { (b.y1, b.y0) } else { (b.y0, b.y1) };
    let cx = |v: i32| v.clamp(0, w as i32);
    let cy = |v: i32| v.clamp(0, h as i32);
    let out = BoundingBox::new(cx(x0), cy(y0), cx(x1), cy(y1));
    if out.is_empty() {
        return Err(MedvrError::EmptyBox);
    }
    Ok(out)
}

/// An executed Zoom-in call. `span` indexes into the trajectory events,
/// covering TOOL_START..=TOOL_END as a half-open range.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCall {
    #[serde(rename = "box")]
    pub bbox: BoundingBox,
    pub span: std::ops::Range<usize>,
    pub call_index: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Base,
    Branch,
    Fill,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Lineage {
    pub parent: Option<u64>,
    pub fork_step: Option<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    Answer,
    Eos,
    MalformedAnswer,
    TokenLimit,
}

/// Terminal reward components.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RewardBreakdown {
    pub r_acc: f64,
    pub r_format: f64,
    pub r_tool: f64,
    pub total: f64,
}

impl RewardBreakdown {
    /// `r_acc + r_format + [r_acc > 0] * r_tool`, evaluated in that order.
    pub fn expected_total(&self) -> f64 {
        let gate = if self.r_acc > 0.0 { 1.0 } else { 0.0 };
        self.r_acc + self.r_format + gate * self.r_tool
    }
    pub fn is_consistent(&self) -> bool {
        self.total.to_bits() == self.expected_total().to_bits()
            && !(self.r_tool > 0.0 && self.r_acc <= 0.0)
    }
}

/// One complete rollout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Trajectory {
    pub id: u64,
    pub prompt_id: u64,
    pub iteration: u64,
    pub events: Vec<TokenEvent>,
    pub tool_calls: Vec<ToolCall>,
    pub answer: Option<u32>,
    pub format_ok: bool,
    pub termination: Termination,
    pub reward: Option<RewardBreakdown>,
    pub lineage: Lineage,
    pub phase: Phase,
    pub image_width: u32,
    pub image_height: u32,
    /// Union of executed boxes, filled in once the group is scored.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub footprint: Option<FootprintMask>,
    /// Ground-truth region, recorded for offline evaluation only.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gt_box: Option<BoundingBox>,
}

impl Trajectory {
    pub fn token_ids(&self) -> Vec<u32> {
        self.events.iter().map(|e| e.token_id).collect()
    }
    pub fn observation_tokens(&self) -> usize {
        self.events.iter().filter(|e| e.is_observation).count()
    }
    /// Mean entropy over sampled tokens inside tool spans.
    pub fn mean_tool_entropy(&self) -> Option<f64> {
        let (sum, n) = self
            .events
            .iter()
            .filter(|e| e.in_tool_span && !e.is_observation && !e.injected)
            .fold((0.0, 0usize), |(s, n), e| (s + e.entropy_nats, n + 1));
        (n > 0).then(|| sum / n as f64)
    }
}

/// Binary pixel grid. Stored dense, serialized as alternating run lengths
/// starting with a run of zeros.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FootprintMask {
    width: u32,
    height: u32,
    bits: Vec<bool>,
}

impl FootprintMask {
    pub fn empty(width: u32, height: u32) -> Self {
        Self {
            width,
            height,
            bits: vec![false; width as usize * height as usize],
        }
    }

    pub fn from_bits(width: u32, height: u32, bits: Vec<bool>) -> Result<Self> {
        if bits.len() != width as usize * height as usize {
            return Err(MedvrError::InvalidArgument(format!(
                "mask of {}x{} needs {} bits, got {}",
                width,
                height,
                width as usize * height as usize,
                bits.len()
            )));
        }
        Ok(Self { width, height, bits })
    }

    pub fn width(&self) -> u32 {
        self.width
    }
    pub fn height(&self) -> u32 {
        self.height
    }
    pub fn bits(&self) -> &[bool] {
        &self.bits
    }
    pub fn get(&self, u: u32, v: u32) -> bool {
        self.bits[v as usize * self.width as usize + u as usize]
    }
    pub fn set(&mut self, u: u32, v: u32, on: bool) {
        let w = self.width as usize;
        self.bits[v as usize * w + u as usize] = on;
    }
    pub fn popcount(&self) -> u64 {
        self.bits.iter().filter(|&&b| b).count() as u64
    }
    pub fn same_shape(&self, other: &Self) -> bool {
        self.width == other.width && self.height == other.height
    }

    /// Rasterizes a box (already validated against this grid) into the mask.
    pub fn paint(&mut self, b: &BoundingBox) {
        let x0 = b.x0.clamp(0, self.width as i32) as usize;
        let x1 = b.x1.clamp(0, self.width as i32) as usize;
        let y0 = b.y0.clamp(0, self.height as i32) as usize;
        let y1 = b.y1.clamp(0, self.height as i32) as usize;
        let w = self.width as usize;
        for y in y0..y1 {
            self.bits[y * w + x0..y * w + x1].fill(true);
        }
    }

    pub fn to_runs(&self) -> Vec<u32> {
        let mut runs = Vec::new();
        let mut current = false;
        let mut len = 0u32;
        for &b in &self.bits {
            if b == current {
                len += 1;
            } else {
                runs.push(len);
                current = b;
                len = 1;
            }
        }
        runs.push(len);
        runs
    }

    pub fn from_runs(width: u32, height: u32, runs: &[u32]) -> Result<Self> {
        let n = width as usize * height as usize;
        let mut bits = Vec::with_capacity(n);
        let mut value = false;
        for &r in runs {
            bits.extend(std::iter::repeat_n(value, r as usize));
            value = !value;
        }
        if bits.len() != n {
            return Err(MedvrError::InvalidArgument(format!(
                "run lengths sum to {}, expected {}",
                bits.len(),
                n
            )));
        }
        Ok(Self { width, height, bits })
    }
}

#[derive(Serialize, Deserialize)]
struct MaskRepr {
    width: u32,
    height: u32,
    runs: Vec<u32>,
}

impl Serialize for FootprintMask {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        MaskRepr {
            width: self.width,
            height: self.height,
            runs: self.to_runs(),
        }
        .serialize(s)
    }
}

impl<'de> Deserialize<'de> for FootprintMask {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let r = MaskRepr::deserialize(d)?;
        FootprintMask::from_runs(r.width, r.height, &r.runs).map_err(serde::de::Error::custom)
    }
}

/// Pixel-wise vote counts over successful footprints and their
/// strict-majority binarization.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConsensusMap {
    pub counts: Vec<u32>,
    pub mask: FootprintMask,
    pub n_success: u32,
}

/// Exploration settings for entropy-gated branching.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvrConfig {
    pub p_base: f64,
    pub gamma: f64,
    pub baseline_window: usize,
    pub tool_window: usize,
    pub m_rollouts: usize,
    pub temperature: f64,
}

impl Default for EvrConfig {
    fn default() -> Self {
        Self {
            p_base: 0.5,
            gamma: 0.5,
            baseline_window: 16,
            tool_window: 8,
            m_rollouts: 16,
            temperature: 1.0,
        }
    }
}

impl EvrConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..=1.0).contains(&self.p_base) {
            return Err(MedvrError::Config("evr.p_base must lie in [0,1]".into()));
        }
        if !(self.gamma >= 0.0) {
            return Err(MedvrError::Config("evr.gamma must be >= 0".into()));
        }
        if self.baseline_window == 0 || self.tool_window == 0 {
            return Err(MedvrError::Config("entropy windows must be positive".into()));
        }
        if self.m_rollouts == 0 || !self.m_rollouts.is_multiple_of(2) {
            return Err(MedvrError::Config("evr.m_rollouts must be even and positive".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(MedvrError::Config("evr.temperature must be positive".into()));
        }
        Ok(())
    }

    /// Branching switched off entirely.
    pub fn is_disabled(&self) -> bool {
        self.p_base == 0.0 && self.gamma == 0.0
    }
}
