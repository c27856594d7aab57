//! Line-delimited JSON protocol ("medvr-policy/1") that lets an external
//! process act as the policy, plus a client ([`RemotePolicy`]) and a server
//! loop that exposes any [`Learner`].
//!
//! Frames are one JSON object per line with a `"type"` tag. Every request
//! gets exactly one response. Sessions are opaque strings; the engine names
//! root sessions, `append` to an unknown name creates it, and the policy
//! names the children it creates on `fork`. Reals are written as JSON
//! numbers (shortest round-trip decimal); a string holding a decimal, `inf`,
//! `-inf` or `nan` is accepted wherever a real is expected.

use std::collections::HashMap;
use std::io::{BufRead, BufReader, Write};
use std::net::TcpStream;
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::error::{MedvrError, Result};
use crate::grpo::{GrpoConfig, LossReport};
use crate::policy::{GroupUpdate, Learner, Policy, PolicySession, TrajectoryUpdate};
use crate::types::VocabSpec;

pub const PROTOCOL_VERSION: &str = "medvr-policy/1";
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(10);
/// Tolerance on `sum(probs) - 1`.
pub const PROB_SUM_TOL: f64 = 1e-6;

pub mod codes {
    pub const BAD_DIST: &str = "BAD_DIST";
    pub const BAD_FRAME: &str = "BAD_FRAME";
    pub const UNKNOWN_SESSION: &str = "UNKNOWN_SESSION";
    pub const VERSION_MISMATCH: &str = "VERSION_MISMATCH";
    pub const NOT_READY: &str = "NOT_READY";
    pub const UNEXPECTED: &str = "UNEXPECTED";
    pub const INTERNAL: &str = "INTERNAL";
}

mod real {
    use super::*;

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Num(f64),
        Str(String),
    }

    fn parse(r: Repr) -> std::result::Result<f64, String> {
        match r {
            Repr::Num(x) => Ok(x),
            Repr::Str(s) => match s.trim() {
                "inf" | "+inf" | "Infinity" => Ok(f64::INFINITY),
                "-inf" | "-Infinity" => Ok(f64::NEG_INFINITY),
                "nan" | "NaN" => Ok(f64::NAN),
                t => t.parse().map_err(|_| format!("not a real: {s:?}")),
            },
        }
    }

    fn put<S: Serializer>(x: f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        if x.is_finite() {
            s.serialize_f64(x)
        } else if x.is_nan() {
            s.serialize_str("nan")
        } else if x > 0.0 {
            s.serialize_str("inf")
        } else {
            s.serialize_str("-inf")
        }
    }

    pub fn serialize<S: Serializer>(x: &f64, s: S) -> std::result::Result<S::Ok, S::Error> {
        put(*x, s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
        parse(Repr::deserialize(d)?).map_err(serde::de::Error::custom)
    }

    pub mod vec {
        use super::*;
        use serde::ser::SerializeSeq;

        pub fn serialize<S: Serializer>(xs: &[f64], s: S) -> std::result::Result<S::Ok, S::Error> {
            struct One(f64);
            impl Serialize for One {
                fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
                    put(self.0, s)
                }
            }
            let mut seq = s.serialize_seq(Some(xs.len()))?;
            for &x in xs {
                seq.serialize_element(&One(x))?;
            }
            seq.end()
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Vec<f64>, D::Error> {
            Vec::<Repr>::deserialize(d)?.into_iter().map(|r| parse(r).map_err(serde::de::Error::custom)).collect()
        }
    }

    pub mod opt {
        use super::*;

        pub fn serialize<S: Serializer>(x: &Option<f64>, s: S) -> std::result::Result<S::Ok, S::Error> {
            match x {
                Some(x) => put(*x, s),
                None => s.serialize_none(),
            }
        }

        pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<f64>, D::Error> {
            Option::<Repr>::deserialize(d)?.map(|r| parse(r).map_err(serde::de::Error::custom)).transpose()
        }
    }
}

/// Trajectory payload of an `update` request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireTrajectory {
    #[serde(default)]
    pub prompt: Vec<u32>,
    pub token_ids: Vec<u32>,
    /// `true` where the token enters the loss.
    pub mask: Vec<bool>,
    #[serde(default)]
    pub is_observation: Vec<bool>,
    #[serde(default, with = "real::vec")]
    pub old_logprobs: Vec<f64>,
    #[serde(with = "real")]
    pub advantage: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WireGroup {
    pub trajectories: Vec<WireTrajectory>,
}

impl From<&GroupUpdate> for WireGroup {
    fn from(g: &GroupUpdate) -> Self {
        WireGroup {
            trajectories: g
                .trajectories
                .iter()
                .map(|t| WireTrajectory {
                    prompt: t.prompt.clone(),
                    token_ids: t.tokens.clone(),
                    mask: t.mask.clone(),
                    is_observation: t.is_observation.clone(),
                    old_logprobs: t.old_logprobs.clone(),
                    advantage: t.advantage,
                })
                .collect(),
        }
    }
}

impl WireGroup {
    /// Back to the engine form; missing optional columns default to
    /// "not an observation" and a zero old log-probability.
    pub fn to_update(&self) -> Result<GroupUpdate> {
        let trajectories = self
            .trajectories
            .iter()
            .map(|t| {
                let n = t.token_ids.len();
                let fill = |v: &Vec<bool>| if v.is_empty() { vec![false; n] } else { v.clone() };
                let u = TrajectoryUpdate {
                    prompt: t.prompt.clone(),
                    tokens: t.token_ids.clone(),
                    mask: t.mask.clone(),
                    is_observation: fill(&t.is_observation),
                    old_logprobs: if t.old_logprobs.is_empty() { vec![0.0; n] } else { t.old_logprobs.clone() },
                    advantage: t.advantage,
                };
                if u.mask.len() != n || u.is_observation.len() != n || u.old_logprobs.len() != n {
                    return Err(MedvrError::Protocol {
                        code: codes::BAD_FRAME.into(),
                        detail: "update columns differ in length".into(),
                    });
                }
                Ok(u)
            })
            .collect::<Result<_>>()?;
        Ok(GroupUpdate { trajectories })
    }
}

/// Every frame of the protocol.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "snake_case")]
pub enum Message {
    Init {
        version: String,
        vocab_spec: VocabSpec,
        #[serde(default)]
        config: serde_json::Value,
    },
    Ready {
        version: String,
    },
    NextDist {
        session: String,
        #[serde(with = "real")]
        temperature: f64,
    },
    /// Exactly one of `logits` and `probs`.
    Dist {
        #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_vec")]
        logits: Option<Vec<f64>>,
        #[serde(default, skip_serializing_if = "Option::is_none", with = "opt_vec")]
        probs: Option<Vec<f64>>,
    },
    Append {
        session: String,
        token_ids: Vec<u32>,
        is_observation: bool,
    },
    Fork {
        session: String,
    },
    Forked {
        new_session: String,
    },
    Update {
        groups: Vec<WireGroup>,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        grpo: Option<GrpoConfig>,
    },
    Ack {
        #[serde(default, skip_serializing_if = "Option::is_none", with = "real::opt")]
        loss: Option<f64>,
    },
    Close {
        session: String,
    },
    Error {
        code: String,
        detail: String,
    },
}

mod opt_vec {
    use super::*;

    pub fn serialize<S: Serializer>(x: &Option<Vec<f64>>, s: S) -> std::result::Result<S::Ok, S::Error> {
        match x {
            Some(v) => real::vec::serialize(v, s),
            None => s.serialize_none(),
        }
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<Option<Vec<f64>>, D::Error> {
        Ok(Some(real::vec::deserialize(d)?))
    }
}

impl Message {
    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("protocol frames serialize");
        s.push('\n');
        s
    }

    pub fn from_line(line: &str) -> Result<Self> {
        serde_json::from_str(line.trim_end()).map_err(|e| MedvrError::Protocol { code: codes::BAD_FRAME.into(), detail: e.to_string() })
    }

    fn error(code: &str, detail: impl Into<String>) -> Self {
        Message::Error { code: code.into(), detail: detail.into() }
    }

    fn kind(&self) -> &'static str {
        match self {
            Message::Init { .. } => "init",
            Message::Ready { .. } => "ready",
            Message::NextDist { .. } => "next_dist",
            Message::Dist { .. } => "dist",
            Message::Append { .. } => "append",
            Message::Fork { .. } => "fork",
            Message::Forked { .. } => "forked",
            Message::Update { .. } => "update",
            Message::Ack { .. } => "ack",
            Message::Close { .. } => "close",
            Message::Error { .. } => "error",
        }
    }
}

/// Validates a `dist` payload and returns logits. Probabilities become
/// log-probabilities, with zeros mapped to a large finite negative value so
/// entropies stay finite.
pub fn dist_to_logits(logits: Option<Vec<f64>>, probs: Option<Vec<f64>>, vocab_size: usize) -> Result<Vec<f64>> {
    let bad = |detail: String| MedvrError::Protocol { code: codes::BAD_DIST.into(), detail };
    match (logits, probs) {
        (Some(z), None) => {
            if z.len() != vocab_size {
                return Err(bad(format!("{} logits for a vocabulary of {vocab_size}", z.len())));
            }
            if z.iter().any(|x| x.is_nan() || *x == f64::INFINITY) || z.iter().all(|x| *x == f64::NEG_INFINITY) {
                return Err(bad("logits must be finite or -inf, with at least one finite".into()));
            }
            Ok(z)
        }
        (None, Some(p)) => {
            if p.len() != vocab_size {
                return Err(bad(format!("{} probabilities for a vocabulary of {vocab_size}", p.len())));
            }
            if p.iter().any(|x| !(x.is_finite() && *x >= 0.0)) {
                return Err(bad("probabilities must be finite and nonnegative".into()));
            }
            let sum: f64 = p.iter().sum();
            if (sum - 1.0).abs() > PROB_SUM_TOL {
                return Err(bad(format!("probabilities sum to {sum}")));
            }
            let floor = f64::MIN_POSITIVE.ln();
            Ok(p.iter().map(|&x| if x > 0.0 { x.ln() } else { floor }).collect())
        }
        _ => Err(bad("dist carries neither or both of logits and probs".into())),
    }
}

// ----------------------------------------------------------------------------
// Client

/// Where the external policy lives.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Endpoint {
    /// Shell-style command line, spawned with piped stdio.
    Command(String),
    /// `host:port`
    Tcp(String),
}

impl Endpoint {
    /// Parses `cmd:<command line>` or `tcp:<host:port>`.
    pub fn parse(s: &str) -> Result<Self> {
        if let Some(c) = s.strip_prefix("cmd:") {
            let c = c.trim();
            if c.is_empty() {
                return Err(MedvrError::InvalidArgument("empty policy command".into()));
            }
            Ok(Endpoint::Command(c.to_string()))
        } else if let Some(a) = s.strip_prefix("tcp:") {
            if !a.contains(':') {
                return Err(MedvrError::InvalidArgument(format!("expected tcp:<host:port>, got {s}")));
            }
            Ok(Endpoint::Tcp(a.to_string()))
        } else {
            Err(MedvrError::InvalidArgument(format!("policy must be builtin, cmd:... or tcp:..., got {s}")))
        }
    }
}

struct Link {
    writer: Box<dyn Write + Send>,
    lines: Receiver<std::io::Result<String>>,
    /// Set once the stream can no longer be trusted to be in sync.
    broken: Option<String>,
}

struct Connection {
    link: Mutex<Link>,
    child: Mutex<Option<Child>>,
    timeout: Duration,
    next_session: std::sync::atomic::AtomicU64,
}

impl Connection {
    fn request(&self, msg: &Message) -> Result<Message> {
        let mut link = self.link.lock().expect("connection lock poisoned");
        if let Some(why) = &link.broken {
            return Err(MedvrError::PolicyUnavailable(why.clone()));
        }
        let line = msg.to_line();
        log::trace!("-> {}", line.trim_end());
        if let Err(e) = link.writer.write_all(line.as_bytes()).and_then(|_| link.writer.flush()) {
            let why = format!("write failed: {e}");
            link.broken = Some(why.clone());
            return Err(MedvrError::PolicyUnavailable(why));
        }
        let reply = match link.lines.recv_timeout(self.timeout) {
            Ok(Ok(l)) => l,
            Ok(Err(e)) => {
                link.broken = Some(format!("read failed: {e}"));
                return Err(MedvrError::PolicyUnavailable(format!("read failed: {e}")));
            }
            Err(RecvTimeoutError::Timeout) => {
                let why = format!("no reply to {} within {:?}", msg.kind(), self.timeout);
                link.broken = Some(why.clone());
                return Err(MedvrError::PolicyUnavailable(why));
            }
            Err(RecvTimeoutError::Disconnected) => {
                link.broken = Some("policy closed the connection".into());
                return Err(MedvrError::PolicyUnavailable("policy closed the connection".into()));
            }
        };
        log::trace!("<- {reply}");
        match Message::from_line(&reply) {
            Ok(Message::Error { code, detail }) => Err(MedvrError::Protocol { code, detail }),
            Ok(m) => Ok(m),
            Err(e) => {
                link.broken = Some(format!("malformed reply: {e}"));
                Err(e)
            }
        }
    }
}

impl Drop for Connection {
    fn drop(&mut self) {
        if let Some(mut c) = self.child.lock().ok().and_then(|mut g| g.take()) {
            // Closing stdin asks the child to exit; give it a moment.
            if let Ok(mut link) = self.link.lock() {
                link.writer = Box::new(std::io::sink());
            }
            for _ in 0..20 {
                if matches!(c.try_wait(), Ok(Some(_))) {
                    return;
                }
                std::thread::sleep(Duration::from_millis(10));
            }
            let _ = c.kill();
            let _ = c.wait();
        }
    }
}

fn unexpected(want: &str, got: &Message) -> MedvrError {
    MedvrError::Protocol { code: codes::UNEXPECTED.into(), detail: format!("expected {want}, got {}", got.kind()) }
}

fn spawn_reader<R: std::io::Read + Send + 'static>(r: R) -> Receiver<std::io::Result<String>> {
    let (tx, rx) = mpsc::channel();
    std::thread::spawn(move || {
        let mut reader = BufReader::new(r);
        loop {
            let mut line = String::new();
            match reader.read_line(&mut line) {
                Ok(0) => break,
                Ok(_) => {
                    if line.trim().is_empty() {
                        continue;
                    }
                    if tx.send(Ok(line)).is_err() {
                        break;
                    }
                }
                Err(e) => {
                    let _ = tx.send(Err(e));
                    break;
                }
            }
        }
    });
    rx
}

/// Policy served by an external process over the wire protocol.
#[derive(Clone)]
pub struct RemotePolicy {
    conn: Arc<Connection>,
    vocab: VocabSpec,
}

impl std::fmt::Debug for RemotePolicy {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("RemotePolicy").field("vocab_size", &self.vocab.size).finish()
    }
}

impl RemotePolicy {
    /// Connects and performs the init/ready handshake.
    pub fn connect(endpoint: &Endpoint, vocab: VocabSpec, config: serde_json::Value, timeout: Duration) -> Result<Self> {
        let unavailable = |what: String| MedvrError::PolicyUnavailable(what);
        let (writer, lines, child): (Box<dyn Write + Send>, _, Option<Child>) = match endpoint {
            Endpoint::Command(cmd) => {
                let argv = shlex::split(cmd).filter(|a| !a.is_empty()).ok_or_else(|| {
                    MedvrError::InvalidArgument(format!("cannot parse policy command {cmd:?}"))
                })?;
                let mut child = Command::new(&argv[0])
                    .args(&argv[1..])
                    .stdin(Stdio::piped())
                    .stdout(Stdio::piped())
                    .stderr(Stdio::inherit())
                    .spawn()
                    .map_err(|e| unavailable(format!("cannot start {:?}: {e}", argv[0])))?;
                let stdin: ChildStdin = child.stdin.take().expect("piped stdin");
                let rx = spawn_reader(child.stdout.take().expect("piped stdout"));
                (Box::new(stdin), rx, Some(child))
            }
            Endpoint::Tcp(addr) => {
                let stream = TcpStream::connect(addr).map_err(|e| unavailable(format!("cannot connect to {addr}: {e}")))?;
                stream.set_nodelay(true).ok();
                let rx = spawn_reader(stream.try_clone()?);
                (Box::new(stream), rx, None)
            }
        };
        Self::handshake(writer, lines, child, vocab, config, timeout)
    }

    /// Runs the client over an arbitrary byte stream pair.
    pub fn over<R, W>(reader: R, writer: W, vocab: VocabSpec, config: serde_json::Value, timeout: Duration) -> Result<Self>
    where
        R: std::io::Read + Send + 'static,
        W: Write + Send + 'static,
    {
        Self::handshake(Box::new(writer), spawn_reader(reader), None, vocab, config, timeout)
    }

    fn handshake(
        writer: Box<dyn Write + Send>,
        lines: Receiver<std::io::Result<String>>,
        child: Option<Child>,
        vocab: VocabSpec,
        config: serde_json::Value,
        timeout: Duration,
    ) -> Result<Self> {
        let conn = Arc::new(Connection {
            link: Mutex::new(Link { writer, lines, broken: None }),
            child: Mutex::new(child),
            timeout,
            next_session: 0.into(),
        });
        let init = Message::Init { version: PROTOCOL_VERSION.into(), vocab_spec: vocab.clone(), config };
        match conn.request(&init)? {
            Message::Ready { version } if version == PROTOCOL_VERSION => Ok(Self { conn, vocab }),
            Message::Ready { version } => Err(MedvrError::Protocol {
                code: codes::VERSION_MISMATCH.into(),
                detail: format!("policy speaks {version}, engine speaks {PROTOCOL_VERSION}"),
            }),
            other => Err(unexpected("ready", &other)),
        }
    }

    fn new_root_name(&self) -> String {
        format!("e{}", self.conn.next_session.fetch_add(1, std::sync::atomic::Ordering::Relaxed))
    }
}

struct RemoteSession {
    conn: Arc<Connection>,
    id: String,
    vocab_size: usize,
}

impl RemoteSession {
    fn append_raw(&self, tokens: &[u32], is_observation: bool) -> Result<()> {
        let msg = Message::Append { session: self.id.clone(), token_ids: tokens.to_vec(), is_observation };
        match self.conn.request(&msg)? {
            Message::Ack { .. } => Ok(()),
            other => Err(unexpected("ack", &other)),
        }
    }
}

impl PolicySession for RemoteSession {
    fn next_logits(&mut self) -> Result<Vec<f64>> {
        // The engine applies temperature itself; ask for raw scores.
        match self.conn.request(&Message::NextDist { session: self.id.clone(), temperature: 1.0 })? {
            Message::Dist { logits, probs } => dist_to_logits(logits, probs, self.vocab_size),
            other => Err(unexpected("dist", &other)),
        }
    }

    fn append(&mut self, tokens: &[u32], is_observation: bool) -> Result<()> {
        self.append_raw(tokens, is_observation)
    }

    fn fork(&mut self) -> Result<Box<dyn PolicySession>> {
        match self.conn.request(&Message::Fork { session: self.id.clone() })? {
            Message::Forked { new_session } => {
                Ok(Box::new(RemoteSession { conn: self.conn.clone(), id: new_session, vocab_size: self.vocab_size }))
            }
            other => Err(unexpected("forked", &other)),
        }
    }
}

impl Drop for RemoteSession {
    fn drop(&mut self) {
        if let Err(e) = self.conn.request(&Message::Close { session: self.id.clone() }) {
            log::debug!("close {}: {e}", self.id);
        }
    }
}

impl Policy for RemotePolicy {
    fn vocab(&self) -> &VocabSpec {
        &self.vocab
    }

    fn open_session(&self, prompt: &[u32]) -> Result<Box<dyn PolicySession>> {
        let s = RemoteSession { conn: self.conn.clone(), id: self.new_root_name(), vocab_size: self.vocab.size as usize };
        s.append_raw(prompt, true)?;
        Ok(Box::new(s))
    }
}

impl Learner for RemotePolicy {
    fn apply_update(&self, groups: &[GroupUpdate], cfg: &GrpoConfig) -> Result<LossReport> {
        let msg = Message::Update { groups: groups.iter().map(WireGroup::from).collect(), grpo: Some(cfg.clone()) };
        match self.conn.request(&msg)? {
            Message::Ack { loss } => Ok(LossReport {
                loss: loss.unwrap_or(f64::NAN),
                grad: Vec::new(),
                tokens: groups.iter().flat_map(|g| &g.trajectories).map(|t| t.mask.iter().filter(|&&m| m).count()).sum(),
                clipped_fraction: f64::NAN,
            }),
            other => Err(unexpected("ack", &other)),
        }
    }
}

// ----------------------------------------------------------------------------
// Server

/// Serves one connection until the peer hangs up. Sessions are private to
/// the connection; parameters are shared through `learner`.
pub fn serve<R: BufRead, W: Write>(learner: &dyn Learner, reader: R, mut writer: W) -> Result<()> {
    let mut server = Server { learner, sessions: HashMap::new(), ready: false, next_child: 0, grpo: GrpoConfig::default() };
    for line in reader.lines() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let reply = server.handle_line(&line);
        writer.write_all(reply.to_line().as_bytes())?;
        writer.flush()?;
    }
    Ok(())
}

/// Accepts connections forever, one thread per connection.
pub fn serve_tcp(learner: Arc<dyn Learner>, listener: std::net::TcpListener) -> Result<()> {
    for stream in listener.incoming() {
        let stream = stream?;
        let learner = learner.clone();
        std::thread::spawn(move || {
            let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
            let run = || -> Result<()> {
                let reader = BufReader::new(stream.try_clone()?);
                serve(learner.as_ref(), reader, stream)
            };
            if let Err(e) = run() {
                log::warn!("connection {peer}: {e}");
            }
        });
    }
    Ok(())
}

struct Server<'a> {
    learner: &'a dyn Learner,
    sessions: HashMap<String, Box<dyn PolicySession>>,
    ready: bool,
    next_child: u64,
    grpo: GrpoConfig,
}

impl Server<'_> {
    fn handle_line(&mut self, line: &str) -> Message {
        let msg = match Message::from_line(line) {
            Ok(m) => m,
            Err(e) => {
                // Close whatever session the frame named, if any.
                if let Some(s) = serde_json::from_str::<serde_json::Value>(line)
                    .ok()
                    .and_then(|v| v.get("session").and_then(|s| s.as_str()).map(str::to_string))
                {
                    self.sessions.remove(&s);
                }
                return Message::error(codes::BAD_FRAME, e.to_string());
            }
        };
        match self.handle(msg) {
            Ok(m) => m,
            Err(MedvrError::Protocol { code, detail }) => Message::Error { code, detail },
            Err(e) => Message::error(codes::INTERNAL, e.to_string()),
        }
    }

    fn session(&mut self, id: &str) -> Result<&mut Box<dyn PolicySession>> {
        self.sessions
            .get_mut(id)
            .ok_or_else(|| MedvrError::Protocol { code: codes::UNKNOWN_SESSION.into(), detail: id.to_string() })
    }

    fn handle(&mut self, msg: Message) -> Result<Message> {
        if !self.ready && !matches!(msg, Message::Init { .. }) {
            return Err(MedvrError::Protocol { code: codes::NOT_READY.into(), detail: "send init first".into() });
        }
        Ok(match msg {
            Message::Init { version, vocab_spec, config } => {
                if version != PROTOCOL_VERSION {
                    return Err(MedvrError::Protocol {
                        code: codes::VERSION_MISMATCH.into(),
                        detail: format!("server speaks {PROTOCOL_VERSION}, got {version}"),
                    });
                }
                if &vocab_spec != self.learner.vocab() {
                    return Err(MedvrError::Protocol {
                        code: codes::BAD_FRAME.into(),
                        detail: "vocabulary differs from the served policy".into(),
                    });
                }
                if let Some(g) = config.get("grpo") {
                    self.grpo = serde_json::from_value(g.clone())
                        .map_err(|e| MedvrError::Protocol { code: codes::BAD_FRAME.into(), detail: e.to_string() })?;
                }
                self.ready = true;
                Message::Ready { version: PROTOCOL_VERSION.into() }
            }
            Message::NextDist { session, temperature } => {
                if !(temperature > 0.0 && temperature.is_finite()) {
                    return Err(MedvrError::Protocol { code: codes::BAD_FRAME.into(), detail: "temperature must be positive".into() });
                }
                let z = self.session(&session)?.next_logits()?;
                Message::Dist { logits: Some(z.iter().map(|x| x / temperature).collect()), probs: None }
            }
            Message::Append { session, token_ids, is_observation } => {
                if !self.sessions.contains_key(&session) {
                    let s = self.learner.open_session(&[])?;
                    self.sessions.insert(session.clone(), s);
                }
                self.session(&session)?.append(&token_ids, is_observation)?;
                Message::Ack { loss: None }
            }
            Message::Fork { session } => {
                let child = self.session(&session)?.fork()?;
                self.next_child += 1;
                let name = format!("{session}/{}", self.next_child);
                self.sessions.insert(name.clone(), child);
                Message::Forked { new_session: name }
            }
            Message::Update { groups, grpo } => {
                let updates = groups.iter().map(WireGroup::to_update).collect::<Result<Vec<_>>>()?;
                let cfg = grpo.unwrap_or_else(|| self.grpo.clone());
                let report = self.learner.apply_update(&updates, &cfg)?;
                Message::Ack { loss: Some(report.loss) }
            }
            Message::Close { session } => {
                self.sessions.remove(&session);
                Message::Ack { loss: None }
            }
            other => {
                return Err(MedvrError::Protocol {
                    code: codes::UNEXPECTED.into(),
                    detail: format!("{} is a response, not a request", other.kind()),
                })
            }
        })
    }
}
