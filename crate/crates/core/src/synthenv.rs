//! Synthetic visual-grounding tasks: a glyph hidden in one pooling cell of a
//! noisy image. The full-view observation shows where the target is but not
//! which glyph it holds; only a zoom reveals the answer.

use std::fmt::Write as _;
use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cca::iou;
use crate::error::{MedvrError, Result};
use crate::policy::Policy;
use crate::rollout::{run_trajectory, stream_seed, Decoding, GroupContext, RolloutLimits};
use crate::tools::{ImageHandle, ObservationEncoding, ZoomTool};
use crate::types::{BoundingBox, EvrConfig, FootprintMask, Trajectory, VocabSpec};

/// 3x3 block patterns, row-major. Every glyph inks exactly four blocks, so
/// all of them pool to the same mean intensity; pairwise Hamming distance
/// is at least 4.
pub const GLYPHS: [&str; 8] = [
    "001110001",
    "011010100",
    "110100010",
    "100010011",
    "001101010",
    "101001100",
    "001000111",
    "011001001",
];

const INK: u8 = 255;
const BACKGROUND: u8 = 0;
const TASK_HEADER: &str = "medvr-task/1";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub width: u32,
    pub height: u32,
    pub target_size: u32,
    pub n_glyphs: u32,
    /// Probability that a non-target cell carries an equal-mass decoy.
    pub distractor_density: f64,
    /// Half-width of the uniform integer background noise.
    pub noise: u8,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self { width: 64, height: 64, target_size: 12, n_glyphs: 8, distractor_density: 0.0, noise: 8 }
    }
}

impl SynthConfig {
    pub fn encoding(&self) -> ObservationEncoding {
        ObservationEncoding::default()
    }

    fn cell(&self) -> (u32, u32) {
        let g = self.encoding().pool_grid;
        (self.width / g, self.height / g)
    }

    pub fn validate(&self, vocab: &VocabSpec) -> Result<()> {
        let g = self.encoding().pool_grid;
        if !self.width.is_multiple_of(g) || !self.height.is_multiple_of(g) {
            return Err(MedvrError::Config(format!("env image sides must be multiples of {g}")));
        }
        let (cw, ch) = self.cell();
        if !self.target_size.is_multiple_of(3) || self.target_size == 0 || self.target_size + 2 > cw.min(ch) {
            return Err(MedvrError::Config(
                "env.target_size must be a positive multiple of 3 that fits in a pooling cell with 2 px to spare".into(),
            ));
        }
        if self.n_glyphs == 0 || self.n_glyphs as usize > GLYPHS.len() || self.n_glyphs > vocab.n_answers {
            return Err(MedvrError::Config(format!(
                "env.n_glyphs must lie in 1..={}",
                (GLYPHS.len() as u32).min(vocab.n_answers)
            )));
        }
        if !(0.0..=1.0).contains(&self.distractor_density) {
            return Err(MedvrError::Config("env.distractor_density must lie in [0,1]".into()));
        }
        if self.noise > 15 {
            return Err(MedvrError::Config("env.noise must be at most 15".into()));
        }
        Ok(())
    }
}

/// Everything about a task except the glyph identity.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskLayout {
    pub target_box: BoundingBox,
    pub cell_levels: Vec<u8>,
    pub decoys: Vec<usize>,
    pub noise_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthTask {
    pub seed: u64,
    pub image: ImageHandle,
    pub target_box: BoundingBox,
    pub glyph_id: u32,
    pub config: SynthConfig,
}

pub fn glyph_ink(glyph: u32, row: u32, col: u32) -> bool {
    GLYPHS[glyph as usize].as_bytes()[(row * 3 + col) as usize] == b'1'
}

pub fn draw_layout(seed: u64, cfg: &SynthConfig) -> TaskLayout {
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0x7A5C]));
    let g = cfg.encoding().pool_grid;
    let (cw, ch) = cfg.cell();
    let cells = (g * g) as usize;
    let target_cell = rng.gen_range(0..cells);
    let (cx, cy) = ((target_cell as u32 % g), (target_cell as u32 / g));
    let ox = 2 * rng.gen_range(0..=1u32);
    let oy = 2 * rng.gen_range(0..=1u32);
    let x0 = (cx * cw + ox) as i32;
    let y0 = (cy * ch + oy) as i32;
    let s = cfg.target_size as i32;
    let cell_levels = (0..cells).map(|_| rng.gen_range(0..=1u8)).collect();
    let decoys = (0..cells)
        .filter(|&c| c != target_cell)
        .filter(|_| rng.gen_bool(cfg.distractor_density))
        .collect();
    TaskLayout {
        target_box: BoundingBox::new(x0, y0, x0 + s, y0 + s),
        cell_levels,
        decoys,
        noise_seed: rng.gen(),
    }
}

/// Paints a glyph into a layout.
pub fn render(cfg: &SynthConfig, layout: &TaskLayout, glyph: u32, source_id: u64) -> ImageHandle {
    let g = cfg.encoding().pool_grid;
    let (cw, ch) = cfg.cell();
    let mut noise = ChaCha8Rng::seed_from_u64(layout.noise_seed);
    let a = cfg.noise as i32;
    let mut pixels = Vec::with_capacity((cfg.width * cfg.height) as usize);
    for v in 0..cfg.height {
        for u in 0..cfg.width {
            let cell = ((v / ch) * g + u / cw) as usize;
            let base = 32 * layout.cell_levels[cell] as i32 + 16;
            let n = if a > 0 { noise.gen_range(-a..=a) } else { 0 };
            pixels.push((base + n).clamp(0, 255) as u8);
        }
    }
    let block = cfg.target_size / 3;
    // equal-mass decoy: a solid square with the glyph's ink area
    let side = ((4 * block * block) as f64).sqrt() as u32;
    for &c in &layout.decoys {
        let (cx, cy) = ((c as u32 % g) * cw, (c as u32 / g) * ch);
        let (x0, y0) = (cx + (cw - side) / 2, cy + (ch - side) / 2);
        for v in y0..y0 + side {
            for u in x0..x0 + side {
                pixels[(v * cfg.width + u) as usize] = INK;
            }
        }
    }
    let t = layout.target_box;
    for v in t.y0..t.y1 {
        for u in t.x0..t.x1 {
            let (row, col) = ((v - t.y0) as u32 / block, (u - t.x0) as u32 / block);
            pixels[(v as u32 * cfg.width + u as u32) as usize] = if glyph_ink(glyph, row, col) { INK } else { BACKGROUND };
        }
    }
    ImageHandle::new(cfg.width, cfg.height, pixels, source_id).expect("sizes come from the config")
}

/// Deterministic task for `seed`.
pub fn gen_task(seed: u64, cfg: &SynthConfig) -> SynthTask {
    let layout = draw_layout(seed, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(stream_seed(&[seed, 0x6177]));
    let glyph_id = rng.gen_range(0..cfg.n_glyphs);
    SynthTask {
        seed,
        image: render(cfg, &layout, glyph_id, seed),
        target_box: layout.target_box,
        glyph_id,
        config: cfg.clone(),
    }
}

impl SynthTask {
    pub fn zoom_tool(&self, vocab: &VocabSpec) -> ZoomTool {
        ZoomTool::new(self.image.clone(), self.config.encoding(), vocab.clone())
    }

    pub fn target_mask(&self) -> FootprintMask {
        let mut m = FootprintMask::empty(self.image.width(), self.image.height());
        m.paint(&self.target_box);
        m
    }

    /// Header line followed by one row of intensities per image row.
    pub fn to_text(&self) -> String {
        let b = self.target_box;
        let mut s = format!(
            "{TASK_HEADER} {} {} {} {} {} {} {} {}\n",
            self.image.width(),
            self.image.height(),
            self.seed,
            self.glyph_id,
            b.x0,
            b.y0,
            b.x1,
            b.y1
        );
        for row in self.image.pixels().chunks(self.image.width() as usize) {
            let line: Vec<String> = row.iter().map(|p| p.to_string()).collect();
            let _ = writeln!(s, "{}", line.join(" "));
        }
        s
    }

    pub fn from_text(text: &str, cfg: &SynthConfig) -> Result<Self> {
        let bad = |what: &str| MedvrError::InvalidArgument(format!("task file: {what}"));
        let mut lines = text.lines();
        let header: Vec<&str> = lines.next().ok_or_else(|| bad("empty"))?.split_whitespace().collect();
        if header.len() != 9 || header[0] != TASK_HEADER {
            return Err(bad("bad header"));
        }
        let num = |i: usize| header[i].parse::<i64>().map_err(|_| bad("non-numeric header field"));
        let (w, h) = (num(1)? as u32, num(2)? as u32);
        let seed = header[3].parse::<u64>().map_err(|_| bad("bad seed"))?;
        let glyph_id = num(4)? as u32;
        let target_box = BoundingBox::new(num(5)? as i32, num(6)? as i32, num(7)? as i32, num(8)? as i32);
        let mut pixels = Vec::with_capacity((w * h) as usize);
        for line in lines.filter(|l| !l.trim().is_empty()) {
            for p in line.split_whitespace() {
                pixels.push(p.parse::<u8>().map_err(|_| bad("pixel out of range"))?);
            }
        }
        let image = ImageHandle::new(w, h, pixels, seed)?;
        Ok(Self { seed, image, target_box, glyph_id, config: SynthConfig { width: w, height: h, ..cfg.clone() } })
    }
}

/// Tokens that zoom exactly onto `b` (grown by `inflate` bins per side)
/// and then answer `label`.
pub fn zoom_answer_script(vocab: &VocabSpec, view: (u32, u32), b: &BoundingBox, inflate: i32, label: u32) -> Vec<u32> {
    let nb = vocab.bins_per_axis as i32;
    let to_bin = |px: i32, extent: u32| ((px as i64 * nb as i64) / extent as i64) as i32;
    let clampb = |x: i32| x.clamp(0, nb - 1) as u32;
    let sp = vocab.special;
    vec![
        sp.tool_start,
        vocab.coord_token(clampb(to_bin(b.x0, view.0) - inflate)),
        vocab.coord_token(clampb(to_bin(b.y0, view.1) - inflate)),
        vocab.coord_token(clampb(to_bin(b.x1, view.0) + inflate)),
        vocab.coord_token(clampb(to_bin(b.y1, view.1) + inflate)),
        sp.tool_end,
        sp.ans_start,
        vocab.answer_token(label),
        sp.ans_end,
    ]
}

pub fn answer_script(vocab: &VocabSpec, label: u32) -> Vec<u32> {
    vec![vocab.special.ans_start, vocab.answer_token(label), vocab.special.ans_end]
}

/// Uniformly random coordinates, then a uniformly random answer.
pub fn random_zoom_script(vocab: &VocabSpec, n_answers: u32, rng: &mut impl Rng) -> Vec<u32> {
    let sp = vocab.special;
    let mut s = vec![sp.tool_start];
    for _ in 0..4 {
        s.push(vocab.coord_token(rng.gen_range(0..vocab.bins_per_axis)));
    }
    s.push(sp.tool_end);
    s.extend(answer_script(vocab, rng.gen_range(0..n_answers)));
    s
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalMetrics {
    pub n_tasks: usize,
    pub accuracy: f64,
    pub mean_iou_vs_gt: f64,
    pub mean_tool_calls: f64,
    pub mean_tokens: f64,
    pub mean_extra_tokens: f64,
}

/// Seeds of the held-out evaluation tasks.
pub fn eval_task_seeds(seed: u64, n: usize) -> Vec<u64> {
    (0..n as u64).map(|k| stream_seed(&[seed, 0xE7A1, k])).collect()
}

/// IoU between a trajectory's footprint and the task's target region.
pub fn iou_vs_gt(traj: &Trajectory, task: &SynthTask) -> f64 {
    let fp = crate::cca::footprint(traj, task.image.width(), task.image.height());
    iou(&fp, &task.target_mask()).unwrap_or(0.0)
}

/// Greedy evaluation with a per-task policy.
pub fn evaluate_with<F>(tasks: &[SynthTask], limits: &RolloutLimits, policy_for: F) -> Result<(EvalMetrics, Vec<Trajectory>)>
where
    F: Fn(&SynthTask) -> Result<Arc<dyn Policy>> + Sync,
{
    if tasks.is_empty() {
        return Err(MedvrError::InsufficientData("no evaluation tasks".into()));
    }
    let trajectories: Vec<Trajectory> = tasks
        .par_iter()
        .enumerate()
        .map(|(k, task)| {
            let policy = policy_for(task)?;
            let vocab = policy.vocab().clone();
            let env = task.zoom_tool(&vocab);
            let ctx = GroupContext {
                seed: task.seed,
                iteration: 0,
                prompt_id: task.seed,
                id_base: k as u64,
                evr: EvrConfig::default(),
                limits: limits.clone(),
                decoding: Decoding::Greedy,
            };
            let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
            let mut t = run_trajectory(policy.as_ref(), &env, &ctx, k as u64, &mut rng)?;
            t.gt_box = Some(task.target_box);
            Ok(t)
        })
        .collect::<Result<_>>()?;
    let n = tasks.len() as f64;
    let mut m = EvalMetrics { n_tasks: tasks.len(), accuracy: 0.0, mean_iou_vs_gt: 0.0, mean_tool_calls: 0.0, mean_tokens: 0.0, mean_extra_tokens: 0.0 };
    for (t, task) in trajectories.iter().zip(tasks) {
        m.accuracy += (t.answer == Some(task.glyph_id)) as u8 as f64;
        m.mean_iou_vs_gt += iou_vs_gt(t, task);
        m.mean_tool_calls += t.tool_calls.len() as f64;
        m.mean_tokens += t.events.len() as f64;
        m.mean_extra_tokens += t.observation_tokens() as f64;
    }
    m.accuracy /= n;
    m.mean_iou_vs_gt /= n;
    m.mean_tool_calls /= n;
    m.mean_tokens /= n;
    m.mean_extra_tokens /= n;
    Ok((m, trajectories))
}

pub fn evaluate(policy: Arc<dyn Policy>, tasks: &[SynthTask], limits: &RolloutLimits) -> Result<(EvalMetrics, Vec<Trajectory>)> {
    evaluate_with(tasks, limits, |_| Ok(policy.clone()))
}
