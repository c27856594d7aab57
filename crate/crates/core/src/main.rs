use std::fs::File;
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use medvr::analysis::{self, MIN_ENTROPY_RECORDS};
use medvr::config::TrainConfig;
use medvr::policy::{Learner, LinearSoftmaxPolicy, Policy, ScriptedPolicy};
use medvr::protocol::{self, Endpoint, RemotePolicy};
use medvr::rollout::stream_seed;
use medvr::synthenv::{self, answer_script, evaluate_with, gen_task, random_zoom_script, zoom_answer_script, EvalMetrics};
use medvr::train::{self, read_log, Checkpoint, Manifest, TrainLogs, Trainer};
use medvr::{MedvrError, Result};

#[derive(Parser)]
#[command(name = "medvr", version, about = "Entropy-gated agentic rollouts with consensus tool rewards")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Args, Clone)]
struct Overrides {
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    iterations: Option<u64>,
    #[arg(long = "m-rollouts")]
    m_rollouts: Option<usize>,
    #[arg(long = "max-tool-calls")]
    max_tool_calls: Option<usize>,
}

impl Overrides {
    fn apply(&self, cfg: &mut TrainConfig) -> Result<()> {
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(i) = self.iterations {
            cfg.grpo.iterations = i;
        }
        if let Some(m) = self.m_rollouts {
            cfg.evr.m_rollouts = m;
        }
        if let Some(k) = self.max_tool_calls {
            cfg.limits.max_tool_calls = k;
        }
        cfg.validate()
    }
}

#[derive(Subcommand)]
enum Cmd {
    /// Train a policy on synthetic zoom-in tasks.
    Train {
        #[arg(long)]
        config: Option<PathBuf>,
        /// builtin, cmd:"<command line>" or tcp:<host:port>
        #[arg(long, default_value = "builtin")]
        policy: String,
        #[arg(long = "out-dir", default_value = "runs/train")]
        out_dir: PathBuf,
        /// Continue from <out-dir>/checkpoint.json.
        #[arg(long)]
        resume: bool,
        #[arg(long = "checkpoint-every", default_value_t = 10)]
        checkpoint_every: u64,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Greedy evaluation on held-out tasks.
    Eval {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// builtin (untrained unless --checkpoint), cmd:..., tcp:...
        #[arg(long)]
        policy: Option<String>,
        /// Scripted reference policy instead of a learned one.
        #[arg(long, value_enum)]
        baseline: Option<Baseline>,
        #[arg(long = "n-tasks")]
        n_tasks: Option<usize>,
        /// Metrics CSV path; stdout when absent.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Also write the evaluation trajectories here.
        #[arg(long = "trajectories")]
        trajectories: Option<PathBuf>,
        #[command(flatten)]
        overrides: Overrides,
    },
    /// Plot-ready CSV reports over a trajectory log.
    Analyze {
        log: PathBuf,
        #[arg(long, value_enum)]
        mode: Mode,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Recompute consensus and tool rewards of a trajectory log.
    CcaReplay {
        log: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Serve the built-in policy over the wire protocol.
    ServePolicy {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        checkpoint: Option<PathBuf>,
        /// Listen on host:port instead of standard I/O.
        #[arg(long)]
        listen: Option<String>,
    },
    /// Dump synthetic tasks as text grids.
    GenTasks {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long = "out-dir")]
        out_dir: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum Mode {
    EntropyIou,
    Cost,
    ToolUsage,
}

#[derive(Clone, Copy, ValueEnum)]
enum Baseline {
    Oracle,
    RandomAnswer,
    RandomZoom,
}

fn exit_code(e: &MedvrError) -> u8 {
    match e {
        MedvrError::Config(_) => 2,
        MedvrError::PolicyUnavailable(_) | MedvrError::Protocol { .. } => 3,
        MedvrError::NonFinite(_) => 4,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("MEDVR_LOG_LEVEL", "info")).init();
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn run(cli: Cli) -> Result<()> {
    match cli.cmd {
        Cmd::Train { config, policy, out_dir, resume, checkpoint_every, overrides } => {
            cmd_train(config.as_deref(), &policy, &out_dir, resume, checkpoint_every, &overrides)
        }
        Cmd::Eval { checkpoint, config, policy, baseline, n_tasks, out, trajectories, overrides } => cmd_eval(
            checkpoint.as_deref(),
            config.as_deref(),
            policy.as_deref(),
            baseline,
            n_tasks,
            out.as_deref(),
            trajectories.as_deref(),
            &overrides,
        ),
        Cmd::Analyze { log, mode, out } => cmd_analyze(&log, mode, out.as_deref()),
        Cmd::CcaReplay { log, config, out } => {
            let cfg = load_config(config.as_deref())?;
            let rows = analysis::cca_replay(&read_log(&log)?, &cfg.cca)?;
            with_output(out.as_deref(), |w| analysis::write_csv(w, &rows))
        }
        Cmd::ServePolicy { config, checkpoint, listen } => cmd_serve(config.as_deref(), checkpoint.as_deref(), listen.as_deref()),
        Cmd::GenTasks { config, seed, n, out_dir } => {
            let cfg = load_config(config.as_deref())?;
            std::fs::create_dir_all(&out_dir)?;
            for k in 0..n {
                let task = gen_task(stream_seed(&[seed, 0x6E7, k as u64]), &cfg.env);
                std::fs::write(out_dir.join(format!("task_{k:05}.txt")), task.to_text())?;
            }
            log::info!("wrote {n} tasks to {}", out_dir.display());
            Ok(())
        }
    }
}

/// Config from a file, or defaults when no file is given.
fn load_config(path: Option<&Path>) -> Result<TrainConfig> {
    match path {
        Some(p) => TrainConfig::from_path(p),
        None => Ok(TrainConfig::default()),
    }
}

fn with_output(path: Option<&Path>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match path {
        Some(p) => {
            let mut file = io::BufWriter::new(File::create(p)?);
            f(&mut file)?;
            file.flush()?;
            Ok(())
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)
        }
    }
}

fn remote(spec: &str, cfg: &TrainConfig) -> Result<RemotePolicy> {
    let endpoint = Endpoint::parse(spec)?;
    let init = serde_json::json!({ "seed": cfg.seed, "grpo": cfg.grpo });
    RemotePolicy::connect(&endpoint, cfg.vocab.clone(), init, protocol::DEFAULT_TIMEOUT)
}

fn cmd_train(
    config: Option<&Path>,
    policy: &str,
    out_dir: &Path,
    resume: bool,
    checkpoint_every: u64,
    overrides: &Overrides,
) -> Result<()> {
    let ck_path = out_dir.join("checkpoint.json");
    let mut trainer = if resume {
        let ck = Checkpoint::load(&ck_path)?;
        let mut cfg = ck.config.clone();
        // Only the iteration budget may change on resume.
        if let Some(i) = overrides.iterations {
            cfg.grpo.iterations = i;
        }
        let learner: Arc<dyn Learner> = if policy == "builtin" {
            ck.builtin_policy()?
        } else {
            Arc::new(remote(policy, &cfg)?)
        };
        let mut t = Trainer::new(cfg, learner)?;
        t.set_next_iteration(ck.next_iteration);
        train::truncate_logs(out_dir, ck.next_iteration)?;
        log::info!("resuming at iteration {}", ck.next_iteration);
        t
    } else {
        let path = config.ok_or_else(|| MedvrError::Config("train needs --config".into()))?;
        let mut cfg = TrainConfig::from_path(path)?;
        overrides.apply(&mut cfg)?;
        if policy == "builtin" {
            Trainer::builtin(cfg)?.0
        } else {
            let p = Arc::new(remote(policy, &cfg)?);
            Trainer::new(cfg, p)?
        }
    };
    std::fs::create_dir_all(out_dir)?;
    Manifest::new("train", trainer.config(), policy).write(out_dir)?;
    std::fs::write(out_dir.join("config.toml"), trainer.config().to_text())?;
    let mut logs = TrainLogs::open(out_dir, resume)?;

    let stop = Arc::new(AtomicBool::new(false));
    {
        let stop = stop.clone();
        if let Err(e) = ctrlc::set_handler(move || stop.store(true, Ordering::SeqCst)) {
            log::warn!("cannot install interrupt handler: {e}");
        }
    }

    let result = (|| -> Result<()> {
        while !trainer.is_done() && !stop.load(Ordering::SeqCst) {
            let out = trainer.step()?;
            logs.write_iteration(&out)?;
            let s = &out.stats;
            log::info!(
                "iteration {} reward {:.3} acc {:.3} tool calls {:.2} branches {} degenerate {}",
                s.iteration,
                s.mean_reward,
                s.mean_r_acc,
                s.mean_tool_calls,
                s.branches,
                s.degenerate_groups
            );
            if checkpoint_every > 0 && trainer.next_iteration() % checkpoint_every == 0 {
                trainer.checkpoint().save(&ck_path)?;
            }
        }
        Ok(())
    })();
    // Logs are flushed per iteration; the checkpoint matches the last
    // completed iteration even when a step failed.
    trainer.checkpoint().save(&ck_path)?;
    result?;
    if stop.load(Ordering::SeqCst) {
        log::warn!("interrupted; checkpoint at iteration {}", trainer.next_iteration());
        return Ok(());
    }
    let (m, _) = trainer.evaluate(trainer.config().eval_tasks)?;
    write_metrics(&out_dir.join("eval.csv"), &m)?;
    log::info!(
        "final eval: accuracy {:.3} mIoU {:.3} tool calls {:.2}",
        m.accuracy,
        m.mean_iou_vs_gt,
        m.mean_tool_calls
    );
    Ok(())
}

const METRICS_HEADER: [&str; 5] = ["accuracy", "mIoU", "mean_tool_calls", "mean_extra_tokens", "n_tasks"];

fn metrics_csv(w: &mut dyn Write, m: &EvalMetrics) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    let err = |e: csv::Error| MedvrError::Io(e.to_string());
    c.write_record(METRICS_HEADER).map_err(err)?;
    c.write_record([
        m.accuracy.to_string(),
        m.mean_iou_vs_gt.to_string(),
        m.mean_tool_calls.to_string(),
        m.mean_extra_tokens.to_string(),
        m.n_tasks.to_string(),
    ])
    .map_err(err)?;
    c.flush()?;
    Ok(())
}

fn write_metrics(path: &Path, m: &EvalMetrics) -> Result<()> {
    with_output(Some(path), |w| metrics_csv(w, m))
}

#[allow(clippy::too_many_arguments)]
fn cmd_eval(
    checkpoint: Option<&Path>,
    config: Option<&Path>,
    policy: Option<&str>,
    baseline: Option<Baseline>,
    n_tasks: Option<usize>,
    out: Option<&Path>,
    traj_out: Option<&Path>,
    overrides: &Overrides,
) -> Result<()> {
    let ck = checkpoint.map(Checkpoint::load).transpose()?;
    let mut cfg = match (&ck, config) {
        (_, Some(p)) => TrainConfig::from_path(p)?,
        (Some(ck), None) => ck.config.clone(),
        (None, None) => TrainConfig::default(),
    };
    overrides.apply(&mut cfg)?;
    let n = n_tasks.unwrap_or(cfg.eval_tasks);
    let tasks = train::eval_tasks(&cfg, n);
    let vocab = cfg.vocab.clone();
    let (metrics, trajs) = match baseline {
        Some(b) => {
            let n_answers = cfg.env.n_glyphs;
            evaluate_with(&tasks, &cfg.eval_limits, |task| {
                let view = (task.image.width(), task.image.height());
                let script = match b {
                    Baseline::Oracle => zoom_answer_script(&vocab, view, &task.target_box, 0, task.glyph_id),
                    Baseline::RandomAnswer => {
                        let mut rng = ChaCha8Rng::seed_from_u64(task.seed);
                        answer_script(&vocab, rand::Rng::gen_range(&mut rng, 0..n_answers))
                    }
                    Baseline::RandomZoom => random_zoom_script(&vocab, n_answers, &mut ChaCha8Rng::seed_from_u64(task.seed)),
                };
                Ok(Arc::new(ScriptedPolicy::new(vocab.clone(), script)) as Arc<dyn Policy>)
            })?
        }
        None => {
            let p: Arc<dyn Policy> = match policy.unwrap_or("builtin") {
                "builtin" => match &ck {
                    Some(ck) => ck.builtin_policy()?,
                    None => Arc::new(LinearSoftmaxPolicy::new(vocab.clone(), cfg.policy.clone())?),
                },
                endpoint => Arc::new(remote(endpoint, &cfg)?),
            };
            synthenv::evaluate(p, &tasks, &cfg.eval_limits)?
        }
    };
    if let Some(path) = traj_out {
        let mut w = io::BufWriter::new(File::create(path)?);
        for t in &trajs {
            serde_json::to_writer(&mut w, &train::LogRecord::Trajectory(t.clone()))?;
            w.write_all(b"\n")?;
        }
        w.flush()?;
    }
    with_output(out, |w| metrics_csv(w, &metrics))
}

fn cmd_analyze(log_path: &Path, mode: Mode, out: Option<&Path>) -> Result<()> {
    let records = read_log(log_path)?;
    match mode {
        Mode::EntropyIou => {
            let pairs = analysis::entropy_iou_pairs(&records);
            let r = analysis::entropy_iou_report(&pairs, MIN_ENTROPY_RECORDS)?;
            with_output(out, |w| analysis::write_csv(w, &r.bins))?;
            eprintln!("spearman_rho={} p_value={} n={}", r.rho, r.p_value, r.n);
        }
        Mode::Cost => {
            let r = analysis::cost_report(&records)?;
            with_output(out, |w| analysis::write_csv(w, &r.rows))?;
            eprintln!(
                "generated={} shared_prefix={} independent={} savings_ratio={}",
                r.total.generated,
                r.total.shared,
                r.total.independent,
                r.savings_ratio()
            );
        }
        Mode::ToolUsage => {
            let rows = analysis::tool_usage(&records)?;
            with_output(out, |w| analysis::write_csv(w, &rows))?;
        }
    }
    Ok(())
}

fn cmd_serve(config: Option<&Path>, checkpoint: Option<&Path>, listen: Option<&str>) -> Result<()> {
    let policy: Arc<LinearSoftmaxPolicy> = match checkpoint {
        Some(p) => Checkpoint::load(p)?.builtin_policy()?,
        None => {
            let cfg = load_config(config)?;
            Arc::new(LinearSoftmaxPolicy::new(cfg.vocab, cfg.policy)?)
        }
    };
    match listen {
        Some(addr) => {
            let listener = std::net::TcpListener::bind(addr)?;
            // Report the bound address so callers can use port 0.
            println!("listening {}", listener.local_addr()?);
            io::stdout().flush()?;
            protocol::serve_tcp(policy, listener)
        }
        None => {
            let stdin = io::stdin();
            protocol::serve(policy.as_ref(), BufReader::new(stdin.lock()), io::stdout().lock())
        }
    }
}
