//! Offline analyses over trajectory logs: entropy vs grounding quality,
//! branching token cost, tool usage over training, and CCA replay.

use std::collections::BTreeMap;
use std::io::Write;

use serde::Serialize;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::cca::{credit_assign_masks, footprint, iou, CcaConfig};
use crate::error::{MedvrError, Result};
use crate::rollout::TokenCost;
use crate::train::LogRecord;
use crate::types::{FootprintMask, Trajectory};

/// Minimum number of (entropy, IoU) pairs for a log-based report.
pub const MIN_ENTROPY_RECORDS: usize = 20;

pub fn trajectories(records: &[LogRecord]) -> impl Iterator<Item = &Trajectory> {
    records.iter().filter_map(|r| match r {
        LogRecord::Trajectory(t) => Some(t),
        LogRecord::Group(_) => None,
    })
}

/// Ranks with ties averaged, 1-based.
pub fn average_ranks(x: &[f64]) -> Vec<f64> {
    let mut idx: Vec<usize> = (0..x.len()).collect();
    idx.sort_by(|&a, &b| x[a].total_cmp(&x[b]));
    let mut ranks = vec![0.0; x.len()];
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && x[idx[j + 1]] == x[idx[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &idx[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

fn pearson(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let (mx, my) = (x.iter().sum::<f64>() / n, y.iter().sum::<f64>() / n);
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (a, b) in x.iter().zip(y) {
        sxy += (a - mx) * (b - my);
        sxx += (a - mx) * (a - mx);
        syy += (b - my) * (b - my);
    }
    if sxx == 0.0 || syy == 0.0 {
        return f64::NAN;
    }
    (sxy / (sxx * syy).sqrt()).clamp(-1.0, 1.0)
}

/// Spearman rank correlation and its two-sided p-value (t approximation).
/// Both are NaN when either variable is constant; the p-value is NaN for
/// fewer than three points.
pub fn spearman(x: &[f64], y: &[f64]) -> Result<(f64, f64)> {
    if x.len() != y.len() {
        return Err(MedvrError::InvalidArgument(format!("{} vs {} samples", x.len(), y.len())));
    }
    if x.len() < 2 {
        return Err(MedvrError::InsufficientData(format!("{} pairs", x.len())));
    }
    let rho = pearson(&average_ranks(x), &average_ranks(y));
    let n = x.len() as f64;
    let p = if rho.is_nan() || x.len() < 3 {
        f64::NAN
    } else if rho.abs() == 1.0 {
        0.0
    } else {
        let df = n - 2.0;
        let t = rho * (df / (1.0 - rho * rho)).sqrt();
        let dist = StudentsT::new(0.0, 1.0, df).map_err(|e| MedvrError::InvalidArgument(e.to_string()))?;
        2.0 * dist.sf(t.abs())
    };
    Ok((rho, p))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EntropyIouPair {
    pub iou: f64,
    pub entropy: f64,
}

/// IoU of the executed footprint against the ground-truth box.
pub fn iou_vs_gt(t: &Trajectory) -> Option<f64> {
    let gt = t.gt_box?;
    let (w, h) = (t.image_width, t.image_height);
    let fp = t.footprint.clone().unwrap_or_else(|| footprint(t, w, h));
    let mut g = FootprintMask::empty(w, h);
    g.paint(&gt);
    iou(&fp, &g).ok()
}

/// Pairs for every trajectory that sampled tool-span tokens and carries a
/// ground-truth box.
pub fn entropy_iou_pairs(records: &[LogRecord]) -> Vec<EntropyIouPair> {
    trajectories(records)
        .filter_map(|t| Some(EntropyIouPair { entropy: t.mean_tool_entropy()?, iou: iou_vs_gt(t)? }))
        .collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IouBin {
    pub iou_bin: String,
    pub mean_tool_entropy: f64,
    pub count: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EntropyIouReport {
    /// Non-empty deciles in increasing IoU order.
    pub bins: Vec<IouBin>,
    pub rho: f64,
    pub p_value: f64,
    pub n: usize,
}

pub fn entropy_iou_report(pairs: &[EntropyIouPair], min_records: usize) -> Result<EntropyIouReport> {
    if pairs.len() < min_records.max(2) {
        return Err(MedvrError::InsufficientData(format!(
            "{} entropy/IoU records, need {}",
            pairs.len(),
            min_records.max(2)
        )));
    }
    let mut acc = [(0.0f64, 0usize); 10];
    for p in pairs {
        let d = ((p.iou * 10.0).floor() as usize).min(9);
        acc[d].0 += p.entropy;
        acc[d].1 += 1;
    }
    let bins = acc
        .iter()
        .enumerate()
        .filter(|(_, (_, c))| *c > 0)
        .map(|(d, &(s, c))| IouBin {
            iou_bin: format!("[{:.1},{:.1}{}", d as f64 / 10.0, (d + 1) as f64 / 10.0, if d == 9 { "]" } else { ")" }),
            mean_tool_entropy: s / c as f64,
            count: c,
        })
        .collect();
    let ious: Vec<f64> = pairs.iter().map(|p| p.iou).collect();
    let ents: Vec<f64> = pairs.iter().map(|p| p.entropy).collect();
    let (rho, p_value) = spearman(&ents, &ious)?;
    if rho.is_nan() {
        log::warn!("spearman correlation undefined: entropy or IoU is constant across records");
    }
    Ok(EntropyIouReport { bins, rho, p_value, n: pairs.len() })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CostRow {
    pub iteration: u64,
    pub generated_tokens: usize,
    pub shared_prefix_tokens: usize,
    pub independent_tokens: usize,
    pub savings_ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CostReport {
    pub rows: Vec<CostRow>,
    pub total: TokenCost,
}

impl CostReport {
    pub fn savings_ratio(&self) -> f64 {
        self.total.savings_ratio()
    }
}

/// Token cost per iteration and overall.
pub fn cost_report(records: &[LogRecord]) -> Result<CostReport> {
    let mut by_iter: BTreeMap<u64, Vec<Trajectory>> = BTreeMap::new();
    for t in trajectories(records) {
        by_iter.entry(t.iteration).or_default().push(t.clone());
    }
    if by_iter.is_empty() {
        return Err(MedvrError::InsufficientData("log holds no trajectories".into()));
    }
    let mut total = TokenCost::default();
    let rows = by_iter
        .iter()
        .map(|(&iteration, group)| {
            let c = TokenCost::of(group);
            total.add(c);
            CostRow {
                iteration,
                generated_tokens: c.generated,
                shared_prefix_tokens: c.shared,
                independent_tokens: c.independent,
                savings_ratio: c.savings_ratio(),
            }
        })
        .collect();
    Ok(CostReport { rows, total })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ToolUsageRow {
    pub iteration: u64,
    pub trajectories: usize,
    pub mean_tool_calls: f64,
    pub tool_use_rate: f64,
}

pub fn tool_usage(records: &[LogRecord]) -> Result<Vec<ToolUsageRow>> {
    let mut by_iter: BTreeMap<u64, (usize, usize, usize)> = BTreeMap::new();
    for t in trajectories(records) {
        let e = by_iter.entry(t.iteration).or_default();
        e.0 += 1;
        e.1 += t.tool_calls.len();
        e.2 += usize::from(!t.tool_calls.is_empty());
    }
    if by_iter.is_empty() {
        return Err(MedvrError::InsufficientData("log holds no trajectories".into()));
    }
    Ok(by_iter
        .into_iter()
        .map(|(iteration, (n, calls, users))| ToolUsageRow {
            iteration,
            trajectories: n,
            mean_tool_calls: calls as f64 / n as f64,
            tool_use_rate: users as f64 / n as f64,
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ReplayRow {
    pub trajectory_id: u64,
    /// IoU against the group consensus; absent without one.
    pub iou: Option<f64>,
    pub r_tool: f64,
}

/// Recomputes consensus and `r_tool` for every logged group. Groups are
/// keyed by (iteration, prompt_id); accuracy rewards come from the log.
pub fn cca_replay(records: &[LogRecord], cfg: &CcaConfig) -> Result<Vec<ReplayRow>> {
    let mut groups: BTreeMap<(u64, u64), Vec<&Trajectory>> = BTreeMap::new();
    for t in trajectories(records) {
        groups.entry((t.iteration, t.prompt_id)).or_default().push(t);
    }
    let mut rows = Vec::new();
    for ((it, pid), group) in groups {
        let mut r_acc = Vec::with_capacity(group.len());
        for t in &group {
            let r = t.reward.ok_or_else(|| {
                MedvrError::InvalidArgument(format!("trajectory {} (iteration {it}, prompt {pid}) is unscored", t.id))
            })?;
            r_acc.push(r.r_acc);
        }
        let masks: Vec<FootprintMask> = group
            .iter()
            .map(|t| t.footprint.clone().unwrap_or_else(|| footprint(t, t.image_width, t.image_height)))
            .collect();
        let ca = credit_assign_masks(&masks, &r_acc, cfg)?;
        rows.extend(group.iter().zip(ca.credits).map(|(t, c)| ReplayRow { trajectory_id: t.id, iou: c.iou, r_tool: c.r_tool }));
    }
    Ok(rows)
}

fn csv_err(e: csv::Error) -> MedvrError {
    MedvrError::Io(e.to_string())
}

/// Writes rows as CSV with a header taken from the field names.
pub fn write_csv<W: Write, T: Serialize>(out: W, rows: &[T]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::types::{BoundingBox, Lineage, Phase, RewardBreakdown, Termination, TokenEvent, ToolCall};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn pair(iou: f64, entropy: f64) -> EntropyIouPair {
        EntropyIouPair { iou, entropy }
    }

    #[test]
    fn two_point_monotone() {
        let r = entropy_iou_report(&[pair(0.9, 0.2), pair(0.1, 1.4)], 0).unwrap();
        assert_eq!(r.bins.len(), 2);
        assert_eq!(r.rho, -1.0);
    }

    #[test]
    fn constant_iou_gives_nan() {
        let pairs: Vec<_> = (0..30).map(|i| pair(0.5, i as f64)).collect();
        let r = entropy_iou_report(&pairs, MIN_ENTROPY_RECORDS).unwrap();
        assert!(r.rho.is_nan());
        assert!(r.p_value.is_nan());
        assert_eq!(r.bins.len(), 1);
    }

    #[test]
    fn constructed_negative_correlation() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let normal = rand_distr_normal(0.01);
        let pairs: Vec<_> = (0..100)
            .map(|_| {
                let iou: f64 = rng.gen();
                pair(iou, 2.0 - 2.0 * iou + normal(&mut rng))
            })
            .collect();
        let r = entropy_iou_report(&pairs, MIN_ENTROPY_RECORDS).unwrap();
        assert!(r.rho < -0.9, "{}", r.rho);
        assert!(r.p_value < 1e-6);
        assert_eq!(r.bins.iter().map(|b| b.count).sum::<usize>(), 100);
    }

    // Box-Muller; avoids pulling in a distributions crate for one test.
    fn rand_distr_normal(sigma: f64) -> impl Fn(&mut ChaCha8Rng) -> f64 {
        move |rng| {
            let u1: f64 = rng.gen_range(f64::EPSILON..1.0);
            let u2: f64 = rng.gen();
            sigma * (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
        }
    }

    #[test]
    fn too_few_records() {
        let pairs: Vec<_> = (0..19).map(|i| pair(i as f64 / 19.0, 1.0)).collect();
        assert!(matches!(entropy_iou_report(&pairs, MIN_ENTROPY_RECORDS), Err(MedvrError::InsufficientData(_))));
    }

    #[test]
    fn ranks_average_ties() {
        assert_eq!(average_ranks(&[3.0, 1.0, 3.0, 2.0]), vec![3.5, 1.0, 3.5, 2.0]);
    }

    #[test]
    fn spearman_matches_reference_value() {
        // scipy.stats.spearmanr([1,2,3,4,5],[5,6,7,8,7]) = (0.8207826816681233, 0.08858700531354381)
        let (rho, p) = spearman(&[1.0, 2.0, 3.0, 4.0, 5.0], &[5.0, 6.0, 7.0, 8.0, 7.0]).unwrap();
        assert!((rho - 0.8207826816681233).abs() < 1e-12);
        assert!((p - 0.08858700531354381).abs() < 1e-9);
    }

    fn traj(id: u64, len: usize, phase: Phase, fork: Option<usize>) -> Trajectory {
        let ev = |i: usize| TokenEvent {
            token_id: 0,
            entropy_nats: 0.0,
            logprob: 0.0,
            is_observation: false,
            in_tool_span: false,
            step_index: i as u32,
            injected: false,
        };
        Trajectory {
            id,
            prompt_id: 1,
            iteration: 0,
            events: (0..len).map(ev).collect(),
            tool_calls: vec![],
            answer: None,
            format_ok: true,
            termination: Termination::Eos,
            reward: None,
            lineage: Lineage { parent: fork.map(|_| 0), fork_step: fork },
            phase,
            image_width: 16,
            image_height: 16,
            footprint: None,
            gt_box: None,
        }
    }

    #[test]
    fn cost_without_branches_saves_nothing() {
        let log = vec![LogRecord::Trajectory(traj(0, 100, Phase::Base, None)), LogRecord::Trajectory(traj(1, 80, Phase::Fill, None))];
        assert_eq!(cost_report(&log).unwrap().savings_ratio(), 0.0);
    }

    #[test]
    fn constructed_branch_log() {
        // 100-token base plus a branch forked at its midpoint that runs 100
        // further tokens: 200 generated, 250 if sampled independently.
        let log = vec![LogRecord::Trajectory(traj(0, 100, Phase::Base, None)), LogRecord::Trajectory(traj(1, 150, Phase::Branch, Some(50)))];
        let r = cost_report(&log).unwrap();
        assert_eq!(r.total, TokenCost { generated: 200, shared: 50, independent: 250 });
        assert_eq!(r.savings_ratio(), 0.2);
    }

    #[test]
    fn empty_log_is_insufficient() {
        assert!(matches!(cost_report(&[]), Err(MedvrError::InsufficientData(_))));
        assert!(matches!(tool_usage(&[]), Err(MedvrError::InsufficientData(_))));
    }

    fn scored(id: u64, r_acc: f64, b: Option<BoundingBox>) -> Trajectory {
        let mut t = traj(id, 4, Phase::Base, None);
        if let Some(b) = b {
            t.tool_calls.push(ToolCall { bbox: b, span: 0..1, call_index: 0 });
        }
        t.reward = Some(RewardBreakdown { r_acc, r_format: 0.0, r_tool: 0.0, total: r_acc });
        t
    }

    #[test]
    fn replay_recomputes_tiers() {
        let b = |x0, y0, x1, y1| Some(BoundingBox { x0, y0, x1, y1 });
        let log: Vec<LogRecord> = vec![
            scored(0, 1.0, b(0, 0, 8, 8)),
            scored(1, 1.0, b(0, 0, 8, 8)),
            scored(2, 1.0, b(8, 8, 16, 16)),
            scored(3, 0.0, b(0, 0, 8, 8)),
            scored(4, 1.0, None),
            scored(5, 1.0, b(0, 0, 8, 8)),
        ]
        .into_iter()
        .map(LogRecord::Trajectory)
        .collect();
        let rows = cca_replay(&log, &CcaConfig::default()).unwrap();
        let r: Vec<f64> = rows.iter().map(|r| r.r_tool).collect();
        assert_eq!(r, vec![1.0, 1.0, 0.5, 0.0, 0.0, 1.0]);
        assert_eq!(rows[0].iou, Some(1.0));
        assert_eq!(rows[2].iou, Some(0.0));
        let mut buf = Vec::new();
        write_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert!(text.starts_with("trajectory_id,iou,r_tool\n0,1.0,1.0\n"), "{text}");
        assert!(text.contains("\n4,,0.0\n"));
    }
}
