//! TCP shell around [`MasterState`]: one reader thread and one writer thread
//! per connection, and a single event loop that owns the state.

use std::collections::HashMap;
use std::io::{self, BufReader, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use crossbeam_channel::{unbounded, Receiver, RecvTimeoutError, Sender};
use log::{debug, info, warn};
use rand::Rng;

use super::audit::AuditLog;
use super::state::{Action, ConnState, Input, MasterState};
use super::MasterConfig;
use crate::topology::{solve_exact_cancellable, RingTopology};
use crate::wire::{read_frame_limited, Bye, ByeReason, JoinRequest, JoinRole, Message, WireMessage, PROTOCOL_VERSION};

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(10);
const MAX_CONTROL_PAYLOAD: usize = 16 << 20;
const TICK: Duration = Duration::from_millis(100);

enum Event {
    Joined {
        peer: u64,
        host: String,
        p2p_port: u16,
        stream: TcpStream,
    },
    Input(Input),
    Shutdown,
}

/// Observable summary of the running master.
#[derive(Debug, Clone, Default)]
pub struct MasterStatus {
    pub ring: Vec<u64>,
    pub registered: usize,
    pub conn_state: Option<ConnState>,
    /// Measured link costs (seconds per probe) between accepted peers.
    pub costs: MatrixDump,
}

#[derive(Debug, Clone, Default, PartialEq, serde::Serialize)]
pub struct MatrixDump {
    /// Row/column order.
    pub peers: Vec<u64>,
    pub costs_s: Vec<Vec<f64>>,
}

pub struct MasterHandle {
    addr: SocketAddr,
    epoch: u64,
    audit: AuditLog,
    status: Arc<Mutex<MasterStatus>>,
    stop: Arc<AtomicBool>,
    events: Sender<Event>,
    threads: Vec<JoinHandle<()>>,
}

impl MasterHandle {
    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn audit(&self) -> &AuditLog {
        &self.audit
    }

    /// Accepted peers in ring order.
    pub fn ring(&self) -> Vec<u64> {
        self.status.lock().unwrap().ring.clone()
    }

    pub fn status(&self) -> MasterStatus {
        self.status.lock().unwrap().clone()
    }

    pub fn is_stopped(&self) -> bool {
        self.stop.load(Ordering::SeqCst)
    }

    /// Says goodbye to every peer and joins the service threads.
    pub fn shutdown(mut self) {
        self.stop_threads();
    }

    fn stop_threads(&mut self) {
        if self.stop.swap(true, Ordering::SeqCst) {
            return;
        }
        let _ = self.events.send(Event::Shutdown);
        // wake the accept loop
        let _ = TcpStream::connect_timeout(&self.addr, Duration::from_secs(1));
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for MasterHandle {
    fn drop(&mut self) {
        self.stop_threads();
    }
}

/// Binds `cfg.listen` and starts serving.
pub fn spawn_master(cfg: MasterConfig) -> io::Result<MasterHandle> {
    let listener = TcpListener::bind(&cfg.listen)?;
    let addr = listener.local_addr()?;
    let epoch = cfg.epoch.unwrap_or_else(|| rand::thread_rng().gen_range(1..u64::MAX));
    let audit = AuditLog::default();
    let status = Arc::new(Mutex::new(MasterStatus::default()));
    let stop = Arc::new(AtomicBool::new(false));
    let (tx, rx) = unbounded();
    info!("master listening on {addr}, epoch {epoch}");

    let mut threads = Vec::new();
    {
        let tx = tx.clone();
        let stop = Arc::clone(&stop);
        threads.push(
            thread::Builder::new()
                .name("master-accept".into())
                .spawn(move || accept_loop(listener, epoch, tx, stop))?,
        );
    }
    {
        let state = MasterState::new(cfg, epoch, audit.clone());
        let tx = tx.clone();
        let status = Arc::clone(&status);
        threads.push(
            thread::Builder::new()
                .name("master-loop".into())
                .spawn(move || event_loop(state, rx, tx, status))?,
        );
    }
    Ok(MasterHandle {
        addr,
        epoch,
        audit,
        status,
        stop,
        events: tx,
        threads,
    })
}

fn accept_loop(listener: TcpListener, epoch: u64, tx: Sender<Event>, stop: Arc<AtomicBool>) {
    let next_id = Arc::new(AtomicU64::new(1));
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let stream = match conn {
            Ok(s) => s,
            Err(e) => {
                warn!("accept failed: {e}");
                continue;
            }
        };
        let tx = tx.clone();
        let next_id = Arc::clone(&next_id);
        let spawned = thread::Builder::new()
            .name("master-conn".into())
            .spawn(move || serve_conn(stream, epoch, next_id, tx));
        if let Err(e) = spawned {
            warn!("cannot spawn connection thread: {e}");
        }
    }
}

fn refuse(stream: &mut TcpStream, reason: ByeReason, message: String) {
    debug!("refusing connection: {message}");
    let _ = stream.write_all(&Bye { reason, message }.to_frame_bytes());
    let _ = stream.shutdown(Shutdown::Both);
}

fn serve_conn(mut stream: TcpStream, epoch: u64, next_id: Arc<AtomicU64>, tx: Sender<Event>) {
    let _ = stream.set_nodelay(true);
    let _ = stream.set_read_timeout(Some(HANDSHAKE_TIMEOUT));
    let host = match stream.peer_addr() {
        Ok(a) => a.ip().to_string(),
        Err(_) => return,
    };
    let first = match read_frame_limited(&mut stream, MAX_CONTROL_PAYLOAD).and_then(|f| Message::from_frame(&f)) {
        Ok(Message::JoinRequest(j)) => j,
        Ok(other) => {
            return refuse(&mut stream, ByeReason::Protocol, format!("expected JoinRequest, got {:?}", other.msg_type()))
        }
        Err(e) => {
            debug!("handshake from {host} failed: {e}");
            return;
        }
    };
    let JoinRequest { version, role } = first;
    if version != PROTOCOL_VERSION {
        return refuse(
            &mut stream,
            ByeReason::VersionMismatch,
            format!("protocol version {version} is not supported, expected {PROTOCOL_VERSION}"),
        );
    }
    let (p2p_port, known_epoch) = match role {
        JoinRole::Client { p2p_port, known_epoch } => (p2p_port, known_epoch),
        other => return refuse(&mut stream, ByeReason::Protocol, format!("master does not accept {other:?}")),
    };
    if known_epoch != 0 && known_epoch != epoch {
        return refuse(
            &mut stream,
            ByeReason::EpochMismatch,
            format!("peer belongs to epoch {known_epoch}, this master runs epoch {epoch}"),
        );
    }
    let _ = stream.set_read_timeout(None);
    let peer = next_id.fetch_add(1, Ordering::SeqCst);
    let Ok(clone) = stream.try_clone() else { return };
    if tx
        .send(Event::Joined {
            peer,
            host,
            p2p_port,
            stream: clone,
        })
        .is_err()
    {
        return;
    }

    let mut reader = BufReader::new(stream);
    let reason = loop {
        match read_frame_limited(&mut reader, MAX_CONTROL_PAYLOAD).and_then(|f| Message::from_frame(&f)) {
            Ok(msg) => {
                let bye = matches!(msg, Message::Bye(_));
                if tx.send(Event::Input(Input::Message { peer, msg })).is_err() || bye {
                    return;
                }
            }
            Err(e) if e.is_disconnect() => break "connection closed".to_string(),
            Err(e) => break format!("read error: {e}"),
        }
    };
    let _ = tx.send(Event::Input(Input::Lost { peer, reason }));
}


/// Writes queued frames; closing the queue closes the socket once the
/// backlog is flushed.
fn writer_loop(mut stream: TcpStream, frames: Receiver<Vec<u8>>) {
    for f in frames {
        if stream.write_all(&f).is_err() {
            break;
        }
    }
    let _ = stream.shutdown(Shutdown::Both);
}

fn event_loop(mut state: MasterState, rx: Receiver<Event>, tx: Sender<Event>, status: Arc<Mutex<MasterStatus>>) {
    let mut conns: HashMap<u64, Sender<Vec<u8>>> = HashMap::new();
    let mut last_tick = Instant::now();
    loop {
        let ev = match rx.recv_timeout(TICK) {
            Ok(ev) => Some(ev),
            Err(RecvTimeoutError::Timeout) => None,
            Err(RecvTimeoutError::Disconnected) => break,
        };
        let now = Instant::now();
        let input = match ev {
            Some(Event::Shutdown) => break,
            Some(Event::Joined {
                peer,
                host,
                p2p_port,
                stream,
            }) => {
                let (ftx, frx) = unbounded();
                let _ = thread::Builder::new()
                    .name(format!("master-tx-{peer}"))
                    .spawn(move || writer_loop(stream, frx));
                conns.insert(peer, ftx);
                Some(Input::Joined { peer, host, p2p_port })
            }
            Some(Event::Input(i)) => Some(i),
            None => None,
        };
        let mut actions = match input {
            Some(i) => state.handle(i, now),
            None => Vec::new(),
        };
        if now.duration_since(last_tick) >= TICK {
            last_tick = now;
            actions.extend(state.handle(Input::Tick, now));
        }
        for a in actions {
            match a {
                Action::Send(peer, msg) => {
                    if let Some(c) = conns.get(&peer) {
                        let _ = c.send(msg.to_frame_bytes());
                    }
                }
                Action::Disconnect(peer) => {
                    conns.remove(&peer);
                }
                Action::StartMoonshot {
                    generation,
                    ids,
                    matrix,
                    cancel,
                } => {
                    let tx = tx.clone();
                    let _ = thread::Builder::new().name("master-moonshot".into()).spawn(move || {
                        match solve_exact_cancellable(&matrix, &cancel) {
                            Ok(tour) => {
                                let ring = RingTopology::from_tour(&ids, &tour);
                                let _ = tx.send(Event::Input(Input::Moonshot {
                                    generation,
                                    order: ring.order,
                                    cost: ring.cost,
                                }));
                            }
                            Err(e) => debug!("exact solve {generation} ended: {e}"),
                        }
                    });
                }
            }
        }
        let mut st = status.lock().unwrap();
        st.ring = state.ring().to_vec();
        st.registered = conns.len();
        st.conn_state = Some(state.conn_state());
        if st.costs.peers != state.ring() || st.costs.peers.is_empty() {
            let (peers, m) = state.cost_matrix();
            st.costs = MatrixDump {
                peers,
                costs_s: m.rows(),
            };
        }
    }

    let bye = Bye {
        reason: ByeReason::Shutdown,
        message: "master shutting down".into(),
    }
    .to_frame_bytes();
    for (_, c) in conns.drain() {
        let _ = c.send(bye.clone());
    }
    info!("master stopped");
}
