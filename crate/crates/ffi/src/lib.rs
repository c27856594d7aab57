//! C ABI over the medvr engine.
//!
//! Every fallible function returns a [`MedvrStatus`]; on failure the message
//! is available from [`medvr_last_error`] on the same thread. Objects are
//! opaque handles created by `*_new` and released by the matching `*_free`.
//! Panics never cross the boundary; they surface as `MEDVR_ERR_PANIC`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use medvr::cca::{credit_assign_masks, CcaConfig};
use medvr::config::TrainConfig;
use medvr::entropy::{branch_probability, token_entropy};
use medvr::reward::compose;
use medvr::train::Trainer;
use medvr::types::{validate_box, BoundingBox, EvrConfig, FootprintMask};
use medvr::MedvrError;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MedvrStatus {
    Ok = 0,
    ErrNullPointer = 1,
    ErrInvalidArgument = 2,
    ErrEmptyBox = 3,
    ErrNonFinite = 4,
    ErrNoToolTokens = 5,
    ErrDimensionMismatch = 6,
    ErrInconsistentGate = 7,
    ErrConfig = 8,
    ErrInsufficientData = 9,
    ErrPolicyUnavailable = 10,
    ErrProtocol = 11,
    ErrIo = 12,
    ErrBudget = 13,
    ErrPanic = 99,
}

/// Half-open pixel box `[x0, x1) x [y0, y1)`.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MedvrBox {
    pub x0: i32,
    pub y0: i32,
    pub x1: i32,
    pub y1: i32,
}

impl From<MedvrBox> for BoundingBox {
    fn from(b: MedvrBox) -> Self {
        BoundingBox::new(b.x0, b.y0, b.x1, b.y1)
    }
}

impl From<BoundingBox> for MedvrBox {
    fn from(b: BoundingBox) -> Self {
        MedvrBox { x0: b.x0, y0: b.y0, x1: b.x1, y1: b.y1 }
    }
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MedvrReward {
    pub r_acc: f64,
    pub r_format: f64,
    pub r_tool: f64,
    pub total: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MedvrIterationStats {
    pub iteration: u64,
    pub mean_reward: f64,
    pub mean_r_acc: f64,
    pub mean_r_tool: f64,
    pub format_violation_rate: f64,
    pub mean_tool_calls: f64,
    pub generated_tokens: u64,
    pub shared_prefix_tokens: u64,
    pub branches: u64,
    pub degenerate_groups: u64,
    pub loss: f64,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct MedvrEvalMetrics {
    pub n_tasks: u64,
    pub accuracy: f64,
    pub mean_iou_vs_gt: f64,
    pub mean_tool_calls: f64,
    pub mean_extra_tokens: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &MedvrError) -> MedvrStatus {
    match e {
        MedvrError::EmptyBox => MedvrStatus::ErrEmptyBox,
        MedvrError::NonFinite(_) => MedvrStatus::ErrNonFinite,
        MedvrError::NoToolTokens => MedvrStatus::ErrNoToolTokens,
        MedvrError::NoConsensus(_) => MedvrStatus::ErrInsufficientData,
        MedvrError::DimensionMismatch(..) => MedvrStatus::ErrDimensionMismatch,
        MedvrError::InconsistentGate(_) => MedvrStatus::ErrInconsistentGate,
        MedvrError::BudgetViolation { .. } => MedvrStatus::ErrBudget,
        MedvrError::PolicyUnavailable(_) => MedvrStatus::ErrPolicyUnavailable,
        MedvrError::Protocol { .. } => MedvrStatus::ErrProtocol,
        MedvrError::InsufficientData(_) => MedvrStatus::ErrInsufficientData,
        MedvrError::Config(_) => MedvrStatus::ErrConfig,
        MedvrError::InvalidArgument(_) => MedvrStatus::ErrInvalidArgument,
        MedvrError::Io(_) => MedvrStatus::ErrIo,
    }
}

enum Fail {
    Null(&'static str),
    Engine(MedvrError),
}

impl From<MedvrError> for Fail {
    fn from(e: MedvrError) -> Self {
        Fail::Engine(e)
    }
}

/// Runs `f`, translating errors and panics into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> MedvrStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            MedvrStatus::Ok
        }
        Ok(Err(Fail::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            MedvrStatus::ErrNullPointer
        }
        Ok(Err(Fail::Engine(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            MedvrStatus::ErrPanic
        }
    }
}

fn out<'a, T>(p: *mut T, what: &'static str) -> Result<&'a mut T, Fail> {
    // SAFETY: caller guarantees `p` is null or valid for writes.
    unsafe { p.as_mut() }.ok_or(Fail::Null(what))
}

fn slice<'a, T>(p: *const T, n: usize, what: &'static str) -> Result<&'a [T], Fail> {
    if n == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: caller guarantees `p` points to `n` readable elements.
    Ok(unsafe { std::slice::from_raw_parts(p, n) })
}

fn slice_mut<'a, T>(p: *mut T, n: usize, what: &'static str) -> Result<&'a mut [T], Fail> {
    if n == 0 {
        return Ok(&mut []);
    }
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: caller guarantees `p` points to `n` writable elements.
    Ok(unsafe { std::slice::from_raw_parts_mut(p, n) })
}

fn c_str<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    // SAFETY: caller guarantees a NUL-terminated string.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| Fail::Engine(MedvrError::InvalidArgument(format!("{what} is not UTF-8"))))
}

/// Message of the last failed call on this thread, or NULL. Valid until
/// the next call into this library on the same thread.
#[no_mangle]
pub extern "C" fn medvr_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn medvr_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Shannon entropy (nats) of `softmax(logits / temperature)`.
///
/// # Safety
/// `logits` must point to `n` doubles; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn medvr_token_entropy(logits: *const f64, n: usize, temperature: f64, out_h: *mut f64) -> MedvrStatus {
    guard(|| {
        let z = slice(logits, n, "logits")?;
        *out(out_h, "out_h")? = token_entropy(z, temperature)?;
        Ok(())
    })
}

/// `clamp(p_base + gamma * delta_h, 0, 1)`.
///
/// # Safety
/// `out_p` must be writable.
#[no_mangle]
pub unsafe extern "C" fn medvr_branch_probability(delta_h: f64, p_base: f64, gamma: f64, out_p: *mut f64) -> MedvrStatus {
    guard(|| {
        let cfg = EvrConfig { p_base, gamma, ..EvrConfig::default() };
        cfg.validate()?;
        *out(out_p, "out_p")? = branch_probability(delta_h, &cfg);
        Ok(())
    })
}

/// Orders, clamps and checks a box against a `width x height` image.
///
/// # Safety
/// `out_box` must be writable.
#[no_mangle]
pub unsafe extern "C" fn medvr_validate_box(b: MedvrBox, width: u32, height: u32, out_box: *mut MedvrBox) -> MedvrStatus {
    guard(|| {
        *out(out_box, "out_box")? = validate_box(b.into(), width, height)?.into();
        Ok(())
    })
}

/// Pixel IoU of two boxes rasterized on a `width x height` grid; 0 when
/// both are empty.
///
/// # Safety
/// `out_iou` must be writable.
#[no_mangle]
pub unsafe extern "C" fn medvr_box_iou(a: MedvrBox, b: MedvrBox, width: u32, height: u32, out_iou: *mut f64) -> MedvrStatus {
    guard(|| {
        let mut ma = FootprintMask::empty(width, height);
        let mut mb = FootprintMask::empty(width, height);
        ma.paint(&a.into());
        mb.paint(&b.into());
        *out(out_iou, "out_iou")? = medvr::cca::iou(&ma, &mb)?;
        Ok(())
    })
}

/// Terminal reward `r_acc + r_format + [r_acc > 0] * r_tool`.
///
/// # Safety
/// `out_reward` must be writable.
#[no_mangle]
pub unsafe extern "C" fn medvr_compose_reward(r_acc: f64, format_ok: bool, r_tool: f64, out_reward: *mut MedvrReward) -> MedvrStatus {
    guard(|| {
        let r = compose(r_acc, format_ok, r_tool)?;
        *out(out_reward, "out_reward")? =
            MedvrReward { r_acc: r.r_acc, r_format: r.r_format, r_tool: r.r_tool, total: r.total };
        Ok(())
    })
}

/// Trajectories of one rollout group awaiting consensus credit assignment.
pub struct MedvrCcaGroup {
    width: u32,
    height: u32,
    masks: Vec<FootprintMask>,
    r_acc: Vec<f64>,
}

/// New empty group on a `width x height` image. Returns NULL on invalid
/// dimensions.
#[no_mangle]
pub extern "C" fn medvr_cca_group_new(width: u32, height: u32) -> *mut MedvrCcaGroup {
    if width == 0 || height == 0 {
        set_error("image dimensions must be positive".into());
        return ptr::null_mut();
    }
    Box::into_raw(Box::new(MedvrCcaGroup { width, height, masks: Vec::new(), r_acc: Vec::new() }))
}

/// # Safety
/// `group` must come from [`medvr_cca_group_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn medvr_cca_group_free(group: *mut MedvrCcaGroup) {
    if !group.is_null() {
        drop(Box::from_raw(group));
    }
}

/// Adds a trajectory whose footprint is the union of `n_boxes` executed
/// zoom boxes (zero boxes means no tool use).
///
/// # Safety
/// `group` must be a live handle; `boxes` must point to `n_boxes` boxes.
#[no_mangle]
pub unsafe extern "C" fn medvr_cca_group_add(group: *mut MedvrCcaGroup, boxes: *const MedvrBox, n_boxes: usize, r_acc: f64) -> MedvrStatus {
    guard(|| {
        let g = out(group, "group")?;
        let bs = slice(boxes, n_boxes, "boxes")?;
        if !r_acc.is_finite() {
            return Err(MedvrError::NonFinite("r_acc".into()).into());
        }
        let mut mask = FootprintMask::empty(g.width, g.height);
        for b in bs {
            mask.paint(&validate_box((*b).into(), g.width, g.height)?);
        }
        g.masks.push(mask);
        g.r_acc.push(r_acc);
        Ok(())
    })
}

/// Number of trajectories added so far; 0 for NULL.
///
/// # Safety
/// `group` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn medvr_cca_group_len(group: *const MedvrCcaGroup) -> usize {
    group.as_ref().map_or(0, |g| g.masks.len())
}

/// Computes `r_tool` for every trajectory, in insertion order. `out_iou`
/// may be NULL; otherwise it receives the IoU against the consensus, or
/// NaN where none applies. `out_consensus_pixels` may be NULL; it receives
/// the consensus size, or -1 without a consensus.
///
/// # Safety
/// `group` must be a live handle; output arrays must hold `n` doubles,
/// where `n` equals [`medvr_cca_group_len`].
#[no_mangle]
pub unsafe extern "C" fn medvr_cca_group_assign(
    group: *const MedvrCcaGroup,
    eta: f64,
    success_threshold: f64,
    out_r_tool: *mut f64,
    out_iou: *mut f64,
    n: usize,
    out_consensus_pixels: *mut i64,
) -> MedvrStatus {
    guard(|| {
        let g = group.as_ref().ok_or(Fail::Null("group"))?;
        if n != g.masks.len() {
            return Err(MedvrError::InvalidArgument(format!("output length {n}, group holds {}", g.masks.len())).into());
        }
        let cfg = CcaConfig { eta, success_threshold };
        cfg.validate()?;
        let ca = credit_assign_masks(&g.masks, &g.r_acc, &cfg)?;
        let r = slice_mut(out_r_tool, n, "out_r_tool")?;
        for (dst, c) in r.iter_mut().zip(&ca.credits) {
            *dst = c.r_tool;
        }
        if !out_iou.is_null() {
            let io = slice_mut(out_iou, n, "out_iou")?;
            for (dst, c) in io.iter_mut().zip(&ca.credits) {
                *dst = c.iou.unwrap_or(f64::NAN);
            }
        }
        if let Some(p) = out_consensus_pixels.as_mut() {
            *p = ca.consensus.map_or(-1, |c| c.mask.popcount() as i64);
        }
        Ok(())
    })
}

/// A training run of the built-in policy on synthetic tasks.
pub struct MedvrTrainer {
    inner: Trainer,
}

/// Builds a trainer from config file text (same format as the CLI).
///
/// # Safety
/// `config_text` must be a NUL-terminated string; `out_trainer` writable.
#[no_mangle]
pub unsafe extern "C" fn medvr_trainer_new(config_text: *const c_char, out_trainer: *mut *mut MedvrTrainer) -> MedvrStatus {
    guard(|| {
        let dst = out(out_trainer, "out_trainer")?;
        *dst = ptr::null_mut();
        let cfg = TrainConfig::from_text(c_str(config_text, "config_text")?)?;
        let (inner, _) = Trainer::builtin(cfg)?;
        *dst = Box::into_raw(Box::new(MedvrTrainer { inner }));
        Ok(())
    })
}

/// # Safety
/// `trainer` must come from [`medvr_trainer_new`] and not be used again.
#[no_mangle]
pub unsafe extern "C" fn medvr_trainer_free(trainer: *mut MedvrTrainer) {
    if !trainer.is_null() {
        drop(Box::from_raw(trainer));
    }
}

/// True once the configured iteration count is reached.
///
/// # Safety
/// `trainer` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn medvr_trainer_is_done(trainer: *const MedvrTrainer) -> bool {
    trainer.as_ref().is_none_or(|t| t.inner.is_done())
}

/// Runs one training iteration. `out_stats` may be NULL.
///
/// # Safety
/// `trainer` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn medvr_trainer_step(trainer: *mut MedvrTrainer, out_stats: *mut MedvrIterationStats) -> MedvrStatus {
    guard(|| {
        let t = out(trainer, "trainer")?;
        let s = t.inner.step()?.stats;
        if let Some(o) = out_stats.as_mut() {
            *o = MedvrIterationStats {
                iteration: s.iteration,
                mean_reward: s.mean_reward,
                mean_r_acc: s.mean_r_acc,
                mean_r_tool: s.mean_r_tool,
                format_violation_rate: s.format_violation_rate,
                mean_tool_calls: s.mean_tool_calls,
                generated_tokens: s.generated_tokens as u64,
                shared_prefix_tokens: s.shared_prefix_tokens as u64,
                branches: s.branches as u64,
                degenerate_groups: s.degenerate_groups as u64,
                loss: s.loss,
            };
        }
        Ok(())
    })
}

/// Greedy evaluation on `n_tasks` held-out tasks.
///
/// # Safety
/// `trainer` must be a live handle; `out_metrics` writable.
#[no_mangle]
pub unsafe extern "C" fn medvr_trainer_evaluate(trainer: *const MedvrTrainer, n_tasks: usize, out_metrics: *mut MedvrEvalMetrics) -> MedvrStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or(Fail::Null("trainer"))?;
        let dst = out(out_metrics, "out_metrics")?;
        let (m, _) = t.inner.evaluate(n_tasks)?;
        *dst = MedvrEvalMetrics {
            n_tasks: m.n_tasks as u64,
            accuracy: m.accuracy,
            mean_iou_vs_gt: m.mean_iou_vs_gt,
            mean_tool_calls: m.mean_tool_calls,
            mean_extra_tokens: m.mean_extra_tokens,
        };
        Ok(())
    })
}

/// Writes a checkpoint readable by the CLI (`eval --checkpoint`).
///
/// # Safety
/// `trainer` must be a live handle; `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn medvr_trainer_save_checkpoint(trainer: *const MedvrTrainer, path: *const c_char) -> MedvrStatus {
    guard(|| {
        let t = trainer.as_ref().ok_or(Fail::Null("trainer"))?;
        let p = c_str(path, "path")?;
        t.inner.checkpoint().save(std::path::Path::new(p))?;
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn last_error() -> String {
        let p = medvr_last_error();
        assert!(!p.is_null());
        unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
    }

    #[test]
    fn entropy_of_uniform() {
        let z = [0.0; 4];
        let mut h = 0.0;
        assert_eq!(unsafe { medvr_token_entropy(z.as_ptr(), 4, 1.0, &mut h) }, MedvrStatus::Ok);
        assert!((h - 4f64.ln()).abs() < 1e-12);
        assert!(medvr_last_error().is_null());
    }

    #[test]
    fn null_output_is_reported() {
        let z = [0.0; 2];
        let s = unsafe { medvr_token_entropy(z.as_ptr(), 2, 1.0, ptr::null_mut()) };
        assert_eq!(s, MedvrStatus::ErrNullPointer);
        assert!(last_error().contains("out_h"));
    }

    #[test]
    fn engine_errors_map_to_codes() {
        let mut b = MedvrBox { x0: 0, y0: 0, x1: 0, y1: 0 };
        let s = unsafe { medvr_validate_box(MedvrBox { x0: 5, y0: 5, x1: 5, y1: 9 }, 10, 10, &mut b) };
        assert_eq!(s, MedvrStatus::ErrEmptyBox);
        let s = unsafe { medvr_validate_box(MedvrBox { x0: 8, y0: 9, x1: 2, y1: -3 }, 10, 10, &mut b) };
        assert_eq!(s, MedvrStatus::Ok);
        assert_eq!(b, MedvrBox { x0: 2, y0: 0, x1: 8, y1: 9 });
        let mut r = MedvrReward { r_acc: 0.0, r_format: 0.0, r_tool: 0.0, total: 0.0 };
        assert_eq!(unsafe { medvr_compose_reward(0.0, true, 1.0, &mut r) }, MedvrStatus::ErrInconsistentGate);
        assert_eq!(unsafe { medvr_compose_reward(1.0, false, 0.5, &mut r) }, MedvrStatus::Ok);
        assert_eq!(r.total, 1.0);
        let mut p = 0.0;
        assert_eq!(unsafe { medvr_branch_probability(0.4, 0.5, 0.5, &mut p) }, MedvrStatus::Ok);
        assert!((p - 0.7).abs() < 1e-15);
        assert_eq!(unsafe { medvr_branch_probability(0.0, 1.5, 0.5, &mut p) }, MedvrStatus::ErrConfig);
    }

    #[test]
    fn cca_group_tiers() {
        let g = medvr_cca_group_new(16, 16);
        let tl = MedvrBox { x0: 0, y0: 0, x1: 8, y1: 8 };
        let br = MedvrBox { x0: 8, y0: 8, x1: 16, y1: 16 };
        unsafe {
            for (b, acc) in [(Some(tl), 1.0), (Some(tl), 1.0), (Some(br), 1.0), (Some(tl), 0.0), (None, 1.0)] {
                let (p, n) = b.as_ref().map_or((ptr::null(), 0), |b| (b as *const MedvrBox, 1));
                assert_eq!(medvr_cca_group_add(g, p, n, acc), MedvrStatus::Ok);
            }
            assert_eq!(medvr_cca_group_len(g), 5);
            let mut r = [0.0; 5];
            let mut io = [0.0; 5];
            let mut px = 0i64;
            assert_eq!(medvr_cca_group_assign(g, 0.5, 0.0, r.as_mut_ptr(), io.as_mut_ptr(), 5, &mut px), MedvrStatus::Ok);
            // four successes: top-left has 2 of 4 votes, so no strict majority
            assert_eq!(px, 0);
            assert_eq!(r, [0.5, 0.5, 0.5, 0.0, 0.0]);
            assert_eq!(medvr_cca_group_assign(g, 0.5, 0.0, r.as_mut_ptr(), ptr::null_mut(), 4, ptr::null_mut()), MedvrStatus::ErrInvalidArgument);
            medvr_cca_group_free(g);
        }
        assert!(medvr_cca_group_new(0, 4).is_null());
    }
}
