//! Outer training loop: rollout groups on synthetic tasks, score them,
//! compute group-relative advantages and update the policy.

use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cca::{credit_assign, footprint};
use crate::config::TrainConfig;
use crate::error::{MedvrError, Result};
use crate::grpo::group_advantages;
use crate::policy::{GroupUpdate, Learner, LinearSoftmaxPolicy, Policy, PolicyState, TrajectoryUpdate};
use crate::reward::{accuracy_mc, compose};
use crate::rollout::{generate_group, stream_seed, BranchDecision, Decoding, GroupContext, TokenCost};
use crate::synthenv::{eval_task_seeds, evaluate, gen_task, EvalMetrics, SynthTask};
use crate::tools::ZoomEnv;
use crate::types::{Phase, Trajectory};

pub const CHECKPOINT_FORMAT: &str = "medvr-checkpoint/1";
const TRAIN_TASK_TAG: u64 = 0x7A1E;

/// Seed of the `b`-th training task of an iteration.
pub fn train_task_seed(seed: u64, iteration: u64, b: usize) -> u64 {
    stream_seed(&[seed, TRAIN_TASK_TAG, iteration, b as u64])
}

/// Per-group record written after the group's trajectories.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSummary {
    pub iteration: u64,
    pub prompt_id: u64,
    pub glyph_id: u32,
    pub n_base: usize,
    pub n_branch: usize,
    pub n_fill: usize,
    pub failures: usize,
    pub n_success: usize,
    pub consensus_pixels: Option<u64>,
    pub degenerate: bool,
    pub cost: TokenCost,
    pub decisions: Vec<BranchDecision>,
}

/// One line of the trajectory log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LogRecord {
    Trajectory(Trajectory),
    Group(GroupSummary),
}

#[derive(Debug, Clone)]
pub struct ScoredGroup {
    pub trajectories: Vec<Trajectory>,
    pub summary: GroupSummary,
}

/// Aggregates written as one CSV row per iteration.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationStats {
    pub iteration: u64,
    pub mean_reward: f64,
    pub mean_r_acc: f64,
    pub mean_r_tool: f64,
    pub format_violation_rate: f64,
    pub mean_entropy: f64,
    pub mean_tool_calls: f64,
    pub generated_tokens: usize,
    pub shared_prefix_tokens: usize,
    pub branches: usize,
    pub branch_rate: f64,
    pub degenerate_groups: usize,
    pub policy_failures: usize,
    pub loss: f64,
    pub clipped_fraction: f64,
}

#[derive(Debug, Clone)]
pub struct IterationOutput {
    pub stats: IterationStats,
    pub groups: Vec<ScoredGroup>,
}

/// Fills rewards, footprints and the ground-truth box of one group.
/// Returns `(n_success, consensus pixel count)`.
pub fn score_group(trajs: &mut [Trajectory], task: &SynthTask, cfg: &TrainConfig) -> Result<(usize, Option<u64>)> {
    let (w, h) = (task.image.width(), task.image.height());
    for t in trajs.iter_mut() {
        t.footprint = Some(footprint(t, w, h));
        t.gt_box = Some(task.target_box);
    }
    let r_acc: Vec<f64> = trajs.iter().map(|t| accuracy_mc(t.answer, task.glyph_id)).collect();
    let n_success = r_acc.iter().filter(|&&r| r > cfg.cca.success_threshold && r > 0.0).count();
    let (r_tool, consensus) = if cfg.cca_enabled {
        let ca = credit_assign(trajs, &r_acc, &cfg.cca, w, h)?;
        (ca.credits.iter().map(|c| c.r_tool).collect(), ca.consensus.map(|c| c.mask.popcount()))
    } else {
        (vec![0.0; trajs.len()], None)
    };
    for (i, t) in trajs.iter_mut().enumerate() {
        t.reward = Some(compose(r_acc[i], t.format_ok, r_tool[i])?);
    }
    Ok((n_success, consensus))
}

/// Loss inputs for one trajectory.
pub fn trajectory_update(t: &Trajectory, prompt: &[u32], advantage: f64) -> TrajectoryUpdate {
    TrajectoryUpdate {
        prompt: prompt.to_vec(),
        tokens: t.token_ids(),
        mask: t.events.iter().map(|e| e.is_trainable()).collect(),
        is_observation: t.events.iter().map(|e| e.is_observation).collect(),
        old_logprobs: t.events.iter().map(|e| e.logprob).collect(),
        advantage,
    }
}

pub struct Trainer {
    cfg: TrainConfig,
    learner: Arc<dyn Learner>,
    next_iteration: u64,
}

impl Trainer {
    pub fn new(mut cfg: TrainConfig, learner: Arc<dyn Learner>) -> Result<Self> {
        cfg.validate()?;
        if learner.vocab() != &cfg.vocab {
            return Err(MedvrError::Config("policy vocabulary differs from the run configuration".into()));
        }
        cfg.grpo.temperature = cfg.evr.temperature;
        Ok(Self { cfg, learner, next_iteration: 0 })
    }

    /// Trainer with a fresh built-in policy.
    pub fn builtin(cfg: TrainConfig) -> Result<(Self, Arc<LinearSoftmaxPolicy>)> {
        let policy = Arc::new(LinearSoftmaxPolicy::new(cfg.vocab.clone(), cfg.policy.clone())?);
        Ok((Self::new(cfg, policy.clone())?, policy))
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    pub fn next_iteration(&self) -> u64 {
        self.next_iteration
    }

    pub fn set_next_iteration(&mut self, it: u64) {
        self.next_iteration = it;
    }

    pub fn learner(&self) -> &Arc<dyn Learner> {
        &self.learner
    }

    pub fn is_done(&self) -> bool {
        self.next_iteration >= self.cfg.grpo.iterations
    }

    /// Runs one iteration: a batch of groups, then a single policy update.
    pub fn step(&mut self) -> Result<IterationOutput> {
        let cfg = &self.cfg;
        let it = self.next_iteration;
        let m = cfg.evr.m_rollouts;
        let batch = cfg.grpo.batch_prompts;
        let policy: &dyn Policy = self.learner.as_ref();
        let results: Vec<Result<(ScoredGroup, Option<GroupUpdate>)>> = (0..batch)
            .into_par_iter()
            .map(|b| {
                let task = gen_task(train_task_seed(cfg.seed, it, b), &cfg.env);
                let env = task.zoom_tool(&cfg.vocab);
                let ctx = GroupContext {
                    seed: cfg.seed,
                    iteration: it,
                    prompt_id: task.seed,
                    id_base: (it * batch as u64 + b as u64) * m as u64,
                    evr: cfg.evr.clone(),
                    limits: cfg.limits.clone(),
                    decoding: Decoding::Sample { temperature: cfg.evr.temperature },
                };
                let outcome = generate_group(policy, &env, &ctx)?;
                let mut trajs = outcome.trajectories;
                let (n_success, consensus_pixels) = score_group(&mut trajs, &task, cfg)?;
                let rewards: Vec<f64> = trajs.iter().map(|t| t.reward.expect("scored").total).collect();
                let (adv, degenerate) = group_advantages(&rewards)?;
                let prompt = env.prompt_tokens();
                let update = (!degenerate).then(|| GroupUpdate {
                    trajectories: trajs.iter().zip(&adv).map(|(t, &a)| trajectory_update(t, &prompt, a)).collect(),
                });
                let count = |p: Phase| trajs.iter().filter(|t| t.phase == p).count();
                let summary = GroupSummary {
                    iteration: it,
                    prompt_id: task.seed,
                    glyph_id: task.glyph_id,
                    n_base: count(Phase::Base),
                    n_branch: count(Phase::Branch),
                    n_fill: count(Phase::Fill),
                    failures: outcome.failures,
                    n_success,
                    consensus_pixels,
                    degenerate,
                    cost: TokenCost::of(&trajs),
                    decisions: outcome.decisions,
                };
                Ok((ScoredGroup { trajectories: trajs, summary }, update))
            })
            .collect();

        let mut groups = Vec::with_capacity(batch);
        let mut updates = Vec::new();
        for r in results {
            let (g, u) = r?;
            groups.push(g);
            updates.extend(u);
        }
        let report = if updates.is_empty() {
            None
        } else {
            Some(self.learner.apply_update(&updates, &cfg.grpo)?)
        };
        let stats = summarize(it, &groups, report.as_ref().map(|r| (r.loss, r.clipped_fraction)), m);
        self.next_iteration += 1;
        Ok(IterationOutput { stats, groups })
    }

    /// Greedy evaluation on held-out tasks derived from the run seed.
    pub fn evaluate(&self, n_tasks: usize) -> Result<(EvalMetrics, Vec<Trajectory>)> {
        let tasks = eval_tasks(&self.cfg, n_tasks);
        let policy: Arc<dyn Policy> = self.learner.clone();
        evaluate(policy, &tasks, &self.cfg.eval_limits)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            format: CHECKPOINT_FORMAT.into(),
            config: self.cfg.clone(),
            next_iteration: self.next_iteration,
            policy: self.learner.state(),
        }
    }

    /// Runs until the configured iteration count or until `stop` is set,
    /// writing logs after every iteration.
    pub fn run(&mut self, logs: &mut TrainLogs, stop: &AtomicBool) -> Result<()> {
        while !self.is_done() && !stop.load(Ordering::SeqCst) {
            let out = self.step()?;
            logs.write_iteration(&out)?;
            log::info!(
                "iteration {} reward {:.3} acc {:.3} tool calls {:.2} branches {}",
                out.stats.iteration,
                out.stats.mean_reward,
                out.stats.mean_r_acc,
                out.stats.mean_tool_calls,
                out.stats.branches
            );
        }
        Ok(())
    }
}

/// Held-out evaluation tasks for a run.
pub fn eval_tasks(cfg: &TrainConfig, n: usize) -> Vec<SynthTask> {
    eval_task_seeds(cfg.seed, n).into_iter().map(|s| gen_task(s, &cfg.env)).collect()
}

fn summarize(iteration: u64, groups: &[ScoredGroup], report: Option<(f64, f64)>, m: usize) -> IterationStats {
    let trajs: Vec<&Trajectory> = groups.iter().flat_map(|g| &g.trajectories).collect();
    let n = trajs.len().max(1) as f64;
    let mean = |f: &dyn Fn(&Trajectory) -> f64| trajs.iter().map(|t| f(t)).sum::<f64>() / n;
    let reward = |t: &Trajectory| t.reward.expect("scored");
    let (ent_sum, ent_n) = trajs
        .iter()
        .flat_map(|t| t.events.iter().filter(|e| e.is_trainable()))
        .fold((0.0, 0usize), |(s, k), e| (s + e.entropy_nats, k + 1));
    let mut cost = TokenCost::default();
    for g in groups {
        cost.add(g.summary.cost);
    }
    let branches: usize = groups.iter().map(|g| g.summary.n_branch).sum();
    let (loss, clipped_fraction) = report.unwrap_or((0.0, 0.0));
    IterationStats {
        iteration,
        mean_reward: mean(&|t| reward(t).total),
        mean_r_acc: mean(&|t| reward(t).r_acc),
        mean_r_tool: mean(&|t| reward(t).r_tool),
        format_violation_rate: mean(&|t| if t.format_ok { 0.0 } else { 1.0 }),
        mean_entropy: if ent_n > 0 { ent_sum / ent_n as f64 } else { 0.0 },
        mean_tool_calls: mean(&|t| t.tool_calls.len() as f64),
        generated_tokens: cost.generated,
        shared_prefix_tokens: cost.shared,
        branches,
        branch_rate: branches as f64 / (groups.len().max(1) * (m / 2)) as f64,
        degenerate_groups: groups.iter().filter(|g| g.summary.degenerate).count(),
        policy_failures: groups.iter().map(|g| g.summary.failures).sum(),
        loss,
        clipped_fraction,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub format: String,
    pub config: TrainConfig,
    pub next_iteration: u64,
    /// Built-in policy state; absent for external policies.
    pub policy: Option<PolicyState>,
}

impl Checkpoint {
    pub fn save(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("tmp");
        {
            let mut w = BufWriter::new(File::create(&tmp)?);
            serde_json::to_writer(&mut w, self)?;
            w.write_all(b"\n")?;
            w.flush()?;
        }
        std::fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let ck: Checkpoint = serde_json::from_str(&text)?;
        if ck.format != CHECKPOINT_FORMAT {
            return Err(MedvrError::InvalidArgument(format!("unsupported checkpoint format {:?}", ck.format)));
        }
        Ok(ck)
    }

    /// Rebuilds the built-in policy stored in this checkpoint.
    pub fn builtin_policy(&self) -> Result<Arc<LinearSoftmaxPolicy>> {
        let state = self
            .policy
            .clone()
            .ok_or_else(|| MedvrError::InvalidArgument("checkpoint holds no built-in parameters".into()))?;
        let p = LinearSoftmaxPolicy::new(self.config.vocab.clone(), self.config.policy.clone())?;
        p.restore(state)?;
        Ok(Arc::new(p))
    }
}

/// SHA-256 of the canonical config text.
pub fn config_hash(cfg: &TrainConfig) -> String {
    let digest = Sha256::digest(cfg.to_text().as_bytes());
    digest.iter().map(|b| format!("{b:02x}")).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub code_version: String,
    pub policy: String,
}

impl Manifest {
    pub fn new(command: &str, cfg: &TrainConfig, policy: &str) -> Self {
        Self {
            command: command.into(),
            config_hash: config_hash(cfg),
            seed: cfg.seed,
            code_version: env!("CARGO_PKG_VERSION").into(),
            policy: policy.into(),
        }
    }

    pub fn write(&self, dir: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(dir.join("manifest.json"), text + "\n")?;
        Ok(())
    }
}

/// Column order of `train.csv`.
pub const TRAIN_CSV_HEADER: [&str; 15] = [
    "iteration",
    "mean_reward",
    "mean_r_acc",
    "mean_r_tool",
    "format_violation_rate",
    "mean_entropy",
    "mean_tool_calls",
    "generated_tokens",
    "shared_prefix_tokens",
    "branches",
    "branch_rate",
    "degenerate_groups",
    "policy_failures",
    "loss",
    "clipped_fraction",
];

/// `train.csv` and `trajectories.jsonl` inside an output directory.
pub struct TrainLogs {
    csv: csv::Writer<File>,
    jsonl: BufWriter<File>,
    dir: PathBuf,
}

impl TrainLogs {
    /// Opens the logs, truncating them unless `append` is set.
    pub fn open(dir: &Path, append: bool) -> Result<Self> {
        std::fs::create_dir_all(dir)?;
        let open = |name: &str| -> Result<(File, bool)> {
            let path = dir.join(name);
            let existed = append && path.exists() && std::fs::metadata(&path)?.len() > 0;
            let f = OpenOptions::new().create(true).write(true).append(append).truncate(!append).open(path)?;
            Ok((f, existed))
        };
        let (csv_file, had_rows) = open("train.csv")?;
        let mut csv = csv::WriterBuilder::new().has_headers(false).from_writer(csv_file);
        if !had_rows {
            csv.write_record(TRAIN_CSV_HEADER).map_err(csv_err)?;
            csv.flush()?;
        }
        let (jf, _) = open("trajectories.jsonl")?;
        Ok(Self { csv, jsonl: BufWriter::new(jf), dir: dir.to_path_buf() })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn write_iteration(&mut self, out: &IterationOutput) -> Result<()> {
        for g in &out.groups {
            for t in &g.trajectories {
                write_record(&mut self.jsonl, &LogRecord::Trajectory(t.clone()))?;
            }
            write_record(&mut self.jsonl, &LogRecord::Group(g.summary.clone()))?;
        }
        self.jsonl.flush()?;
        let s = &out.stats;
        self.csv
            .write_record([
                s.iteration.to_string(),
                s.mean_reward.to_string(),
                s.mean_r_acc.to_string(),
                s.mean_r_tool.to_string(),
                s.format_violation_rate.to_string(),
                s.mean_entropy.to_string(),
                s.mean_tool_calls.to_string(),
                s.generated_tokens.to_string(),
                s.shared_prefix_tokens.to_string(),
                s.branches.to_string(),
                s.branch_rate.to_string(),
                s.degenerate_groups.to_string(),
                s.policy_failures.to_string(),
                s.loss.to_string(),
                s.clipped_fraction.to_string(),
            ])
            .map_err(csv_err)?;
        self.csv.flush()?;
        Ok(())
    }
}

fn csv_err(e: csv::Error) -> MedvrError {
    MedvrError::Io(format!("csv: {e}"))
}

fn write_record(w: &mut impl Write, rec: &LogRecord) -> Result<()> {
    serde_json::to_writer(&mut *w, rec)?;
    w.write_all(b"\n")?;
    Ok(())
}

/// Drops log rows from iteration `next_iteration` onward, so a resumed run
/// continues exactly where its checkpoint left off.
pub fn truncate_logs(dir: &Path, next_iteration: u64) -> Result<()> {
    let csv_path = dir.join("train.csv");
    if csv_path.exists() {
        let text = std::fs::read_to_string(&csv_path)?;
        let mut out = String::new();
        for (i, line) in text.lines().enumerate() {
            let keep = i == 0
                || line
                    .split(',')
                    .next()
                    .and_then(|f| f.parse::<u64>().ok())
                    .is_some_and(|it| it < next_iteration);
            if keep {
                out.push_str(line);
                out.push('\n');
            }
        }
        std::fs::write(&csv_path, out)?;
    }
    let log_path = dir.join("trajectories.jsonl");
    if log_path.exists() {
        let mut out = String::new();
        for rec in read_log(&log_path)? {
            let it = match &rec {
                LogRecord::Trajectory(t) => t.iteration,
                LogRecord::Group(g) => g.iteration,
            };
            if it < next_iteration {
                out.push_str(&serde_json::to_string(&rec)?);
                out.push('\n');
            }
        }
        std::fs::write(&log_path, out)?;
    }
    Ok(())
}

/// Reads every record of a trajectory log.
pub fn read_log(path: &Path) -> Result<Vec<LogRecord>> {
    let text = std::fs::read_to_string(path)?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            serde_json::from_str(l).map_err(|e| MedvrError::InvalidArgument(format!("{}:{}: {e}", path.display(), i + 1)))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small() -> TrainConfig {
        let mut cfg = TrainConfig::default();
        cfg.seed = 3;
        cfg.evr.m_rollouts = 4;
        cfg.grpo.batch_prompts = 2;
        cfg.grpo.iterations = 2;
        cfg
    }

    #[test]
    fn step_produces_consistent_groups() {
        let (mut tr, _) = Trainer::builtin(small()).unwrap();
        let out = tr.step().unwrap();
        assert_eq!(out.groups.len(), 2);
        for g in &out.groups {
            assert_eq!(g.trajectories.len(), 4);
            assert_eq!(g.summary.n_base, 2);
            for t in &g.trajectories {
                let r = t.reward.unwrap();
                assert!(r.is_consistent());
                assert!(t.footprint.is_some() && t.gt_box.is_some());
            }
        }
        assert_eq!(tr.next_iteration(), 1);
    }

    #[test]
    fn disabled_cca_pays_no_tool_reward() {
        let mut cfg = small();
        cfg.cca_enabled = false;
        let (mut tr, _) = Trainer::builtin(cfg).unwrap();
        for _ in 0..2 {
            let out = tr.step().unwrap();
            assert!(out.groups.iter().flat_map(|g| &g.trajectories).all(|t| t.reward.unwrap().r_tool == 0.0));
        }
    }

    #[test]
    fn degenerate_batch_leaves_parameters_unchanged() {
        // a single glyph and a policy that is certain to answer it makes
        // every reward identical
        let mut cfg = small();
        cfg.env.n_glyphs = 1;
        cfg.cca_enabled = false;
        let (mut tr, policy) = Trainer::builtin(cfg.clone()).unwrap();
        let v = cfg.vocab.size as usize;
        let mut theta = vec![0.0; policy.theta().len()];
        // bias feature of the outside slot strongly prefers ANS_START,
        // the label slot prefers answer 0, then ANS_END is forced by the prior
        theta[cfg.vocab.special.ans_start as usize] = 50.0;
        theta[6 * v + cfg.vocab.answer_token(0) as usize] = 50.0;
        policy.set_theta(theta.clone()).unwrap();
        let out = tr.step().unwrap();
        assert_eq!(out.stats.degenerate_groups, 2);
        assert_eq!(policy.theta().as_ref(), &theta);
    }

    #[test]
    fn runs_are_reproducible() {
        let run = || {
            let (mut tr, p) = Trainer::builtin(small()).unwrap();
            let a = tr.step().unwrap();
            let b = tr.step().unwrap();
            (a.stats, b.stats, b.groups[0].trajectories.clone(), p.theta())
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn checkpoint_round_trip_resumes_identically() {
        let dir = tempfile::tempdir().unwrap();
        let mut cfg = small();
        cfg.policy.optimizer = crate::policy::Optimizer::Adam;
        cfg.grpo.learning_rate = 0.01;
        let (mut a, _) = Trainer::builtin(cfg).unwrap();
        a.step().unwrap();
        let path = dir.path().join("ck.json");
        a.checkpoint().save(&path).unwrap();
        let ck = Checkpoint::load(&path).unwrap();
        assert_eq!(ck, a.checkpoint());
        let policy = ck.builtin_policy().unwrap();
        let mut b = Trainer::new(ck.config.clone(), policy).unwrap();
        b.set_next_iteration(ck.next_iteration);
        assert_eq!(a.step().unwrap().stats, b.step().unwrap().stats);
    }

    #[test]
    fn logs_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let (mut tr, _) = Trainer::builtin(small()).unwrap();
        let mut logs = TrainLogs::open(dir.path(), false).unwrap();
        tr.run(&mut logs, &AtomicBool::new(false)).unwrap();
        let recs = read_log(&dir.path().join("trajectories.jsonl")).unwrap();
        assert_eq!(recs.len(), 2 * 2 * (4 + 1));
        let csv = std::fs::read_to_string(dir.path().join("train.csv")).unwrap();
        assert_eq!(csv.lines().count(), 3);
        assert!(csv.starts_with("iteration,mean_reward"));
    }

    #[test]
    fn stop_flag_halts_before_work() {
        let dir = tempfile::tempdir().unwrap();
        let (mut tr, _) = Trainer::builtin(small()).unwrap();
        let mut logs = TrainLogs::open(dir.path(), false).unwrap();
        tr.run(&mut logs, &AtomicBool::new(true)).unwrap();
        assert_eq!(tr.next_iteration(), 0);
    }
}
