use std::io::{BufRead, BufReader, Write};
use std::net::TcpListener;
use std::path::Path;
use std::process::Command;
use std::sync::Arc;
use std::time::Duration;

use medvr::policy::{LinearPolicyConfig, LinearSoftmaxPolicy, Policy, PolicySession};
use medvr::protocol::{codes, serve_tcp, Endpoint, Message, RemotePolicy, DEFAULT_TIMEOUT, PROTOCOL_VERSION};
use medvr::rollout::{generate_group, Decoding, GroupContext, RolloutLimits};
use medvr::synthenv::{gen_task, zoom_answer_script, SynthConfig};
use medvr::tools::ZoomEnv;
use medvr::types::{EvrConfig, VocabSpec};
use medvr::MedvrError;

fn softmax(z: &[f64]) -> Vec<f64> {
    let m = z.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = z.iter().map(|x| (x - m).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

fn max_prob_gap(a: &mut dyn PolicySession, b: &mut dyn PolicySession) -> f64 {
    let (pa, pb) = (softmax(&a.next_logits().unwrap()), softmax(&b.next_logits().unwrap()));
    assert_eq!(pa.len(), pb.len());
    pa.iter().zip(&pb).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

fn builtin() -> Arc<LinearSoftmaxPolicy> {
    Arc::new(LinearSoftmaxPolicy::new(VocabSpec::default(), LinearPolicyConfig::default()).unwrap())
}

/// Serves `policy` on an ephemeral loopback port.
fn loopback(policy: Arc<LinearSoftmaxPolicy>) -> RemotePolicy {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    std::thread::spawn(move || serve_tcp(policy, listener));
    RemotePolicy::connect(&Endpoint::Tcp(addr.to_string()), VocabSpec::default(), serde_json::Value::Null, DEFAULT_TIMEOUT)
        .unwrap()
}

#[test]
fn tcp_loopback_matches_builtin() {
    let local = builtin();
    let remote = loopback(local.clone());
    let vocab = VocabSpec::default();
    let task = gen_task(7, &SynthConfig::default());
    let env = task.zoom_tool(&vocab);
    let prompt = env.prompt_tokens();
    let script = zoom_answer_script(&vocab, (task.image.width(), task.image.height()), &task.target_box, 1, task.glyph_id);

    let mut a = local.open_session(&prompt).unwrap();
    let mut b = remote.open_session(&prompt).unwrap();
    let mut worst = max_prob_gap(a.as_mut(), b.as_mut());
    for (k, &t) in script.iter().enumerate() {
        let obs = k % 5 == 4;
        let tok = if obs { vocab.obs_level_token(k as u32 % vocab.n_obs_levels) } else { t };
        a.append(&[tok], obs).unwrap();
        b.append(&[tok], obs).unwrap();
        worst = worst.max(max_prob_gap(a.as_mut(), b.as_mut()));
    }
    assert!(worst <= 1e-6, "max probability gap {worst}");
}

#[test]
fn remote_rollouts_match_builtin() {
    let local = builtin();
    let remote = loopback(local.clone());
    let vocab = VocabSpec::default();
    let task = gen_task(11, &SynthConfig::default());
    let env = task.zoom_tool(&vocab);
    let ctx = GroupContext {
        seed: 3,
        iteration: 0,
        prompt_id: task.seed,
        id_base: 0,
        evr: EvrConfig { m_rollouts: 8, ..EvrConfig::default() },
        limits: RolloutLimits::default(),
        decoding: Decoding::Sample { temperature: 1.0 },
    };
    let g1 = generate_group(local.as_ref(), &env, &ctx).unwrap();
    let g2 = generate_group(&remote, &env, &ctx).unwrap();
    assert_eq!(g1.trajectories.len(), g2.trajectories.len());
    for (x, y) in g1.trajectories.iter().zip(&g2.trajectories) {
        assert_eq!(x.token_ids(), y.token_ids());
        assert_eq!(x.lineage, y.lineage);
        for (ex, ey) in x.events.iter().zip(&y.events) {
            assert!((ex.entropy_nats - ey.entropy_nats).abs() < 1e-9);
        }
    }
}

#[test]
fn remote_fork_isolation() {
    let remote = loopback(builtin());
    let vocab = VocabSpec::default();
    let prompt: Vec<u32> = (0..16).map(|k| vocab.obs_level_token(k % vocab.n_obs_levels)).collect();
    let mut parent = remote.open_session(&prompt).unwrap();
    let before = parent.next_logits().unwrap();
    let mut child = parent.fork().unwrap();
    assert_eq!(child.next_logits().unwrap(), before);
    child.append(&[vocab.special.tool_start], false).unwrap();
    let c = child.next_logits().unwrap();
    assert_ne!(c, before);
    assert_eq!(parent.next_logits().unwrap(), before);
    // and the other way round
    parent.append(&[vocab.special.ans_start], false).unwrap();
    assert_ne!(parent.next_logits().unwrap(), before);
    assert_eq!(child.next_logits().unwrap(), c);
    let mut grandchild = child.fork().unwrap();
    assert_eq!(grandchild.next_logits().unwrap(), c);
    drop(parent);
    assert_eq!(child.next_logits().unwrap(), c);
}

/// A server that completes the handshake and acks appends, then answers
/// every distribution request with `reply`, or never when it is `None`.
fn fake_server(reply: Option<&'static str>) -> String {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap().to_string();
    std::thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut w = stream.try_clone().unwrap();
        let mut lines = BufReader::new(stream).lines();
        let init = Message::from_line(&lines.next().unwrap().unwrap()).unwrap();
        assert!(matches!(init, Message::Init { .. }));
        writeln!(w, "{}", Message::Ready { version: PROTOCOL_VERSION.into() }.to_line()).unwrap();
        while let Some(Ok(line)) = lines.next() {
            match (Message::from_line(&line).unwrap(), reply) {
                (Message::Append { .. }, _) => writeln!(w, "{}", Message::Ack { loss: None }.to_line()).unwrap(),
                (_, Some(r)) => writeln!(w, "{r}").unwrap(),
                (_, None) => std::thread::sleep(Duration::from_secs(5)),
            }
        }
    });
    addr
}

#[test]
fn bad_probabilities_are_rejected() {
    let vocab = VocabSpec::default();
    let p = 0.8 / vocab.size as f64;
    let probs = vec![p; vocab.size as usize];
    let line: &'static str = Box::leak(Message::Dist { logits: None, probs: Some(probs) }.to_line().into_boxed_str());
    let addr = fake_server(Some(line));
    let remote = RemotePolicy::connect(&Endpoint::Tcp(addr), vocab, serde_json::Value::Null, DEFAULT_TIMEOUT).unwrap();
    match remote.open_session(&[]).and_then(|mut s| s.next_logits()) {
        Err(MedvrError::Protocol { code, .. }) => assert_eq!(code, codes::BAD_DIST),
        other => panic!("expected a protocol error, got {other:?}"),
    }
}

#[test]
fn bad_probability_sum_is_bad_dist() {
    let vocab = VocabSpec::default();
    let p = 0.8 / vocab.size as f64;
    let err = medvr::protocol::dist_to_logits(None, Some(vec![p; vocab.size as usize]), vocab.size as usize).unwrap_err();
    match err {
        MedvrError::Protocol { code, .. } => assert_eq!(code, codes::BAD_DIST),
        other => panic!("{other:?}"),
    }
}

#[test]
fn silent_policy_times_out() {
    let addr = fake_server(None);
    let remote = RemotePolicy::connect(&Endpoint::Tcp(addr), VocabSpec::default(), serde_json::Value::Null, Duration::from_millis(300)).unwrap();
    let started = std::time::Instant::now();
    let r = remote.open_session(&[1, 2, 3]).and_then(|mut s| s.next_logits());
    assert!(matches!(r, Err(MedvrError::PolicyUnavailable(_))), "{r:?}");
    assert!(started.elapsed() < Duration::from_secs(3));
}

#[test]
fn refused_connection_is_unavailable() {
    let r = RemotePolicy::connect(&Endpoint::Tcp("127.0.0.1:1".into()), VocabSpec::default(), serde_json::Value::Null, DEFAULT_TIMEOUT);
    assert!(matches!(r, Err(MedvrError::PolicyUnavailable(_))));
}

#[test]
fn training_through_a_command_policy_matches_builtin() {
    let bin = env!("CARGO_BIN_EXE_medvr");
    let cfg = Path::new(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures/tiny.cfg");
    let tmp = tempfile::tempdir().unwrap();
    let run = |dir: &Path, policy: &str| {
        let out = Command::new(bin)
            .args(["train", "--config", cfg.to_str().unwrap(), "--out-dir", dir.to_str().unwrap(), "--policy", policy])
            .env("MEDVR_LOG_LEVEL", "warn")
            .output()
            .unwrap();
        assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    };
    let (a, b) = (tmp.path().join("builtin"), tmp.path().join("cmd"));
    run(&a, "builtin");
    run(&b, &format!("cmd:{bin} serve-policy --config {}", cfg.display()));
    let read = |d: &Path, f: &str| std::fs::read(d.join(f)).unwrap();
    assert_eq!(read(&a, "trajectories.jsonl"), read(&b, "trajectories.jsonl"));
    // The wire ack carries the loss but not the clipped fraction, which a
    // remote run logs as NaN.
    let strip = |bytes: Vec<u8>| -> Vec<String> {
        String::from_utf8(bytes).unwrap().lines().map(|l| l.rsplit_once(',').unwrap().0.to_string()).collect()
    };
    assert_eq!(strip(read(&a, "train.csv")), strip(read(&b, "train.csv")));
}

#[test]
fn stdio_server_speaks_line_json() {
    let bin = env!("CARGO_BIN_EXE_medvr");
    let mut child = Command::new(bin)
        .arg("serve-policy")
        .stdin(std::process::Stdio::piped())
        .stdout(std::process::Stdio::piped())
        .spawn()
        .unwrap();
    let mut stdin = child.stdin.take().unwrap();
    let mut lines = BufReader::new(child.stdout.take().unwrap()).lines();
    let mut ask = |m: &Message| {
        writeln!(stdin, "{}", m.to_line()).unwrap();
        Message::from_line(&lines.next().unwrap().unwrap()).unwrap()
    };
    let ready = ask(&Message::Init { version: PROTOCOL_VERSION.into(), vocab_spec: VocabSpec::default(), config: serde_json::Value::Null });
    assert!(matches!(ready, Message::Ready { .. }));
    let r = ask(&Message::NextDist { session: "nope".into(), temperature: 1.0 });
    assert!(matches!(r, Message::Error { ref code, .. } if code == codes::UNKNOWN_SESSION), "{r:?}");
    let r = ask(&Message::Append { session: "s".into(), token_ids: vec![2], is_observation: false });
    assert!(matches!(r, Message::Ack { .. }), "{r:?}");
    match ask(&Message::NextDist { session: "s".into(), temperature: 1.0 }) {
        Message::Dist { logits: Some(z), probs: None } => assert_eq!(z.len(), VocabSpec::default().size as usize),
        other => panic!("{other:?}"),
    }
    drop(stdin);
    assert!(child.wait().unwrap().success());
}
