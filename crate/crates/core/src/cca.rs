//! Consensus-based credit assignment.
//!
//! Successful trajectories vote with the union of the boxes they zoomed into;
//! pixels inspected by a strict majority form the consensus mask, and each
//! successful tool-using trajectory is paid by its IoU against that mask.

use serde::{Deserialize, Serialize};

use crate::error::{MedvrError, Result};
use crate::types::{ConsensusMap, FootprintMask, Trajectory};

/// Tool reward for a correct answer reached through consensus-aligned zooms.
pub const TOOL_REWARD_ALIGNED: f64 = 1.0;
/// Tool reward for a correct answer reached through any executed zoom.
pub const TOOL_REWARD_BASE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CcaConfig {
    pub eta: f64,
    /// A trajectory joins the successful set when `r_acc` exceeds this.
    pub success_threshold: f64,
}

impl Default for CcaConfig {
    fn default() -> Self {
        Self { eta: 0.5, success_threshold: 0.0 }
    }
}

impl CcaConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.eta > 0.0 && self.eta < 1.0) {
            return Err(MedvrError::Config("cca.eta must lie in (0,1)".into()));
        }
        if !self.success_threshold.is_finite() {
            return Err(MedvrError::Config("cca.success_threshold must be finite".into()));
        }
        Ok(())
    }
}

/// Union of the executed zoom boxes, rasterized on a `w x h` grid.
pub fn footprint(traj: &Trajectory, w: u32, h: u32) -> FootprintMask {
    let mut mask = FootprintMask::empty(w, h);
    for call in &traj.tool_calls {
        mask.paint(&call.bbox);
    }
    mask
}

/// Strict-majority consensus over the footprints of successful trajectories.
pub fn consensus(masks: &[&FootprintMask]) -> Result<ConsensusMap> {
    if masks.len() < 2 {
        return Err(MedvrError::NoConsensus(masks.len()));
    }
    let first = masks[0];
    let mut counts = vec![0u32; first.bits().len()];
    for m in masks {
        if !m.same_shape(first) {
            return Err(MedvrError::DimensionMismatch(
                first.width(),
                first.height(),
                m.width(),
                m.height(),
            ));
        }
        for (c, &b) in counts.iter_mut().zip(m.bits()) {
            *c += b as u32;
        }
    }
    let n = masks.len() as u32;
    // C > n/2  <=>  2C > n, kept in integers
    let bits = counts.iter().map(|&c| 2 * c > n).collect();
    let mask = FootprintMask::from_bits(first.width(), first.height(), bits)?;
    Ok(ConsensusMap { counts, mask, n_success: n })
}

/// Intersection and union pixel counts.
pub fn overlap(a: &FootprintMask, b: &FootprintMask) -> Result<(u64, u64)> {
    if !a.same_shape(b) {
        return Err(MedvrError::DimensionMismatch(a.width(), a.height(), b.width(), b.height()));
    }
    let (mut inter, mut union) = (0u64, 0u64);
    for (&x, &y) in a.bits().iter().zip(b.bits()) {
        inter += (x && y) as u64;
        union += (x || y) as u64;
    }
    Ok((inter, union))
}

/// `|a ∩ b| / |a ∪ b|`; two empty masks score 0.
pub fn iou(a: &FootprintMask, b: &FootprintMask) -> Result<f64> {
    let (inter, union) = overlap(a, b)?;
    if union == 0 {
        return Ok(0.0);
    }
    Ok(inter as f64 / union as f64)
}

/// Per-trajectory outcome of credit assignment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ToolCredit {
    pub r_tool: f64,
    /// IoU against the consensus mask, when one exists and the trajectory
    /// is a successful tool user.
    pub iou: Option<f64>,
}

/// Group-level result: the consensus (if any) and one credit per input.
#[derive(Debug, Clone)]
pub struct CreditAssignment {
    pub consensus: Option<ConsensusMap>,
    pub credits: Vec<ToolCredit>,
}

/// Assigns `r_tool` to every trajectory in a group.
///
/// `r_acc[i]` must already be computed for `group[i]`. Footprints are taken
/// from `traj.footprint` when present, otherwise rasterized from tool calls.
pub fn credit_assign(
    group: &[Trajectory],
    r_acc: &[f64],
    cfg: &CcaConfig,
    w: u32,
    h: u32,
) -> Result<CreditAssignment> {
    if group.len() != r_acc.len() {
        return Err(MedvrError::InvalidArgument(format!(
            "{} trajectories but {} accuracy rewards",
            group.len(),
            r_acc.len()
        )));
    }
    let masks: Vec<FootprintMask> = group
        .iter()
        .map(|t| t.footprint.clone().unwrap_or_else(|| footprint(t, w, h)))
        .collect();
    credit_assign_masks(&masks, r_acc, cfg)
}

/// Mask-level core of [`credit_assign`]; an empty mask means no executed call.
pub fn credit_assign_masks(
    masks: &[FootprintMask],
    r_acc: &[f64],
    cfg: &CcaConfig,
) -> Result<CreditAssignment> {
    let successful: Vec<usize> = (0..masks.len())
        .filter(|&i| r_acc[i] > cfg.success_threshold && r_acc[i] > 0.0)
        .collect();
    let consensus_map = if successful.len() >= 2 {
        let refs: Vec<&FootprintMask> = successful.iter().map(|&i| &masks[i]).collect();
        Some(consensus(&refs)?)
    } else {
        None
    };

    let mut credits = vec![ToolCredit { r_tool: 0.0, iou: None }; masks.len()];
    for &i in &successful {
        if masks[i].popcount() == 0 {
            continue;
        }
        credits[i] = match &consensus_map {
            Some(c) => {
                let score = iou(&masks[i], &c.mask)?;
                let r_tool = if score > cfg.eta { TOOL_REWARD_ALIGNED } else { TOOL_REWARD_BASE };
                ToolCredit { r_tool, iou: Some(score) }
            }
            None => ToolCredit { r_tool: TOOL_REWARD_BASE, iou: None },
        };
    }
    Ok(CreditAssignment { consensus: consensus_map, credits })
}
