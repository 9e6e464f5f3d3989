//! TCP coordinator and worker.
//!
//! The coordinator binds, waits for all `k` workers to JOIN (validating a
//! config hash so the processes agree on every deterministic input), runs
//! the optional pretraining stage and then drives the outer loop, sending
//! full PARAMS frames to participating workers, empty PARAMS frames to
//! workers dropped this round, and gathering OUTER_GRAD / ACK replies.
//!
//! Failure policy: a read timeout counts as a drop for that round only; an
//! I/O error or protocol violation marks the worker dead for the rest of
//! the run. Stale frames from a previously timed-out round are discarded
//! by their `outer_step`. The run finishes as long as the coordinator
//! survives, even with every worker gone.

use crate::config::Config;
use crate::data::{Corpus, Shard};
use crate::engine::{
    self, EngineError, OuterGradient, PhaseContext, RoundBackend, RoundOutcome, RunResult,
    WorkerState,
};
use crate::model;
use crate::numerics::ParamVector;
use crate::transport::{
    join_payload, parse_join_payload, read_message, write_message, Message, MsgKind,
    ProtocolError,
};
use std::io::ErrorKind;
use std::net::{TcpListener, TcpStream};
use std::time::{Duration, Instant};

impl From<ProtocolError> for EngineError {
    fn from(e: ProtocolError) -> Self {
        EngineError::Transport(e.to_string())
    }
}

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
/// Gather timeout before any round has been measured.
const INITIAL_ROUND_TIMEOUT: Duration = Duration::from_secs(60);
/// Adaptive timeout = `TIMEOUT_FACTOR` × median observed round duration.
const TIMEOUT_FACTOR: u32 = 10;

fn is_timeout(e: &ProtocolError) -> bool {
    matches!(e, ProtocolError::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

fn send_reject(stream: &mut TcpStream, reason: &str) {
    let mut msg = Message::control(MsgKind::Shutdown, 0, 0);
    msg.payload = reason.as_bytes().to_vec();
    let _ = write_message(stream, &msg);
}

struct Peer {
    stream: TcpStream,
    alive: bool,
}

struct TcpBackend<'a> {
    peers: Vec<Peer>,
    shards: &'a [Shard],
    f32_payload: bool,
    /// Fixed gather timeout; 0 selects the adaptive median-based one.
    timeout_ms: u64,
    round_durations: Vec<Duration>,
}

impl TcpBackend<'_> {
    fn read_timeout(&self) -> Duration {
        if self.timeout_ms > 0 {
            return Duration::from_millis(self.timeout_ms);
        }
        if self.round_durations.is_empty() {
            return INITIAL_ROUND_TIMEOUT;
        }
        let mut sorted = self.round_durations.clone();
        sorted.sort();
        (sorted[sorted.len() / 2] * TIMEOUT_FACTOR).max(Duration::from_millis(500))
    }
}

impl RoundBackend for TcpBackend<'_> {
    fn worker_count(&self) -> usize {
        self.peers.len()
    }

    fn set_worker_count(&mut self, _k: usize, _params: &ParamVector) -> Result<(), EngineError> {
        Err(EngineError::Transport("adaptive worker count requires the in-process transport".into()))
    }

    fn round(&mut self, t: u32, params: &ParamVector, dropped: &[bool]) -> Result<RoundOutcome, EngineError> {
        let started = Instant::now();
        let k = self.peers.len();
        let mut received = vec![false; k];
        for (i, peer) in self.peers.iter_mut().enumerate() {
            if !peer.alive {
                continue;
            }
            let msg = if dropped[i] {
                Message::control(MsgKind::Params, i as u32, t)
            } else {
                Message::with_params(MsgKind::Params, i as u32, t, params, self.f32_payload)
            };
            match write_message(&mut peer.stream, &msg) {
                Ok(()) => received[i] = !dropped[i],
                Err(_) => peer.alive = false,
            }
        }

        let timeout = self.read_timeout();
        let mut deltas: Vec<Option<OuterGradient>> = (0..k).map(|_| None).collect();
        for (i, peer) in self.peers.iter_mut().enumerate() {
            if !peer.alive {
                continue;
            }
            let _ = peer.stream.set_read_timeout(Some(timeout));
            loop {
                match read_message(&mut peer.stream) {
                    // Leftover reply from a round this worker timed out of.
                    Ok(msg) if msg.outer_step < t => continue,
                    Ok(msg) if msg.kind == MsgKind::OuterGrad && msg.outer_step == t && !dropped[i] => {
                        match msg.params() {
                            Ok(delta) if delta.len() == params.len() => {
                                deltas[i] = Some(OuterGradient {
                                    worker_id: i as u32,
                                    outer_step: t,
                                    delta,
                                    shard_tokens: self.shards[i].num_tokens,
                                });
                            }
                            _ => peer.alive = false,
                        }
                        break;
                    }
                    // A dropped worker checks in with an ACK and no upload.
                    Ok(msg) if msg.kind == MsgKind::Ack && msg.outer_step == t => break,
                    Ok(_) => {
                        peer.alive = false;
                        break;
                    }
                    Err(ref e) if is_timeout(e) => break,
                    Err(_) => {
                        peer.alive = false;
                        break;
                    }
                }
            }
        }
        self.round_durations.push(started.elapsed());
        Ok(RoundOutcome { received, deltas })
    }

    fn worker_params(&self) -> Vec<ParamVector> {
        Vec::new()
    }

    fn finish(&mut self) -> Result<(), EngineError> {
        for peer in &mut self.peers {
            if peer.alive {
                let _ = write_message(&mut peer.stream, &Message::control(MsgKind::Shutdown, 0, 0));
            }
        }
        Ok(())
    }
}

/// Bind `bind` and run a full coordinated training run.
pub fn coordinator_serve(bind: &str, cfg: &Config, corpus: &Corpus) -> Result<RunResult, EngineError> {
    let listener = TcpListener::bind(bind)
        .map_err(|e| EngineError::Transport(format!("bind {bind}: {e}")))?;
    coordinator_serve_on(listener, cfg, corpus)
}

/// Coordinate on an already-bound listener (lets callers pick port 0 and
/// read the chosen address back before starting workers).
pub fn coordinator_serve_on(listener: TcpListener, cfg: &Config, corpus: &Corpus) -> Result<RunResult, EngineError> {
    let setup = engine::prepare(cfg, corpus)?;
    if !cfg.replica_schedule.is_empty() {
        return Err(EngineError::Transport("adaptive worker count requires the in-process transport".into()));
    }
    let k = cfg.k;

    let mut slots: Vec<Option<TcpStream>> = (0..k).map(|_| None).collect();
    let mut joined = 0;
    while joined < k {
        let (mut stream, _) = listener
            .accept()
            .map_err(|e| EngineError::Transport(format!("accept: {e}")))?;
        let _ = stream.set_nodelay(true);
        let _ = stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT));
        let msg = match read_message(&mut stream) {
            Ok(m) if m.kind == MsgKind::Join => m,
            // Not a worker (or too slow to say so); drop the connection.
            _ => continue,
        };
        let id = msg.worker_id as usize;
        match parse_join_payload(&msg.payload) {
            Err(_) => send_reject(&mut stream, "malformed join payload"),
            Ok(hash) if hash != setup.config_hash => {
                send_reject(&mut stream, "config mismatch: coordinator and worker resolve different runs")
            }
            Ok(_) if id >= k => send_reject(&mut stream, "worker id out of range"),
            Ok(_) if slots[id].is_some() => send_reject(&mut stream, "duplicate worker id"),
            Ok(_) => {
                write_message(&mut stream, &Message::control(MsgKind::Ack, msg.worker_id, 0))?;
                slots[id] = Some(stream);
                joined += 1;
            }
        }
    }

    let theta0 = engine::pretrain(cfg, &setup.train)?;
    let mut backend = TcpBackend {
        peers: slots
            .into_iter()
            .map(|s| Peer { stream: s.expect("all slots filled"), alive: true })
            .collect(),
        shards: &setup.shards,
        f32_payload: cfg.payload_f32,
        timeout_ms: cfg.tcp_timeout_ms,
        round_durations: Vec::new(),
    };
    engine::run_outer_loop(cfg, &setup, theta0, &mut backend)
}

fn connect_with_retry(addr: &str, budget: Duration) -> Result<TcpStream, EngineError> {
    let start = Instant::now();
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return Ok(s),
            Err(e) => {
                if start.elapsed() >= budget {
                    return Err(EngineError::Transport(format!("connect {addr}: {e}")));
                }
                std::thread::sleep(Duration::from_millis(200));
            }
        }
    }
}

/// Run one worker process: join the coordinator at `connect`, then serve
/// phases until a SHUTDOWN arrives. The worker derives its shard and data
/// streams locally from the shared config and corpus.
pub fn worker_run(connect: &str, worker_id: u32, cfg: &Config, corpus: &Corpus) -> Result<(), EngineError> {
    let setup = engine::prepare(cfg, corpus)?;
    if worker_id as usize >= cfg.k {
        return Err(EngineError::Transport(format!(
            "worker id {worker_id} out of range for k={}",
            cfg.k
        )));
    }
    let mut stream = connect_with_retry(connect, Duration::from_secs(30))?;
    let _ = stream.set_nodelay(true);

    let mut join = Message::control(MsgKind::Join, worker_id, 0);
    join.payload = join_payload(setup.config_hash);
    write_message(&mut stream, &join)?;
    let reply = read_message(&mut stream)?;
    match reply.kind {
        MsgKind::Ack => {}
        MsgKind::Shutdown => {
            return Err(EngineError::Transport(format!(
                "join rejected: {}",
                String::from_utf8_lossy(&reply.payload)
            )))
        }
        other => return Err(EngineError::Transport(format!("unexpected {other:?} reply to join"))),
    }

    let ctx = PhaseContext::new(cfg, &setup.train);
    // Placeholder until the round-1 broadcast arrives (round 1 always
    // carries full parameters).
    let theta0 = model::init_params(&setup.model, cfg.master_seed);
    let mut worker = WorkerState::new(worker_id, &theta0, setup.shards[worker_id as usize].clone());

    loop {
        let msg = read_message(&mut stream)?;
        match msg.kind {
            MsgKind::Params => {
                let t = msg.outer_step;
                if msg.payload.is_empty() {
                    worker.run_phase(None, t, &ctx)?;
                    write_message(&mut stream, &Message::control(MsgKind::Ack, worker_id, t))?;
                } else {
                    let params = msg.params()?;
                    let (grad, _) = worker.run_phase(Some(&params), t, &ctx)?;
                    write_message(
                        &mut stream,
                        &Message::with_params(MsgKind::OuterGrad, worker_id, t, &grad.delta, cfg.payload_f32),
                    )?;
                }
            }
            MsgKind::Shutdown => return Ok(()),
            other => return Err(EngineError::Transport(format!("unexpected {other:?} from coordinator"))),
        }
    }
}
