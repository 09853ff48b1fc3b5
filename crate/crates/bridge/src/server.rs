//! Session host. One thread owns the [`Session`] and steps it; one thread
//! accepts connections; each connection gets its own thread. They share a
//! bounded input queue (drained by the simulation at tick boundaries), a
//! latest-state slot that connections read when their socket can take
//! another frame, and an append-only journal of discovered cells and
//! notifications from which each connection cuts its own deltas.

use std::io::ErrorKind;
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{sync_channel, Receiver, RecvTimeoutError, SyncSender, TryRecvError};
use std::sync::{Arc, Mutex, MutexGuard};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use nalgebra::{Point3, Vector6};
use thiserror::Error;
use tungstenite::protocol::WebSocketConfig;
use tungstenite::{Message, WebSocket};

use teleop_core::grid::{CellClass, OccupancyGrid};
use teleop_core::harness::record::finish_record;
use teleop_core::harness::{Condition, OperatorInput, OperatorSource, OperatorView, Session, TickRow, TrialRecord};
use teleop_core::harness::session::SessionError;
use teleop_core::model::{wrap_angle, Pose6, Wrench6};
use teleop_core::scenario::Scenario;

use crate::protocol::{
    decode_client, encode_server, ClientMessage, GridFrame, GridFull, InputAck, InputMessage, Keys, LeaderInput,
    ServerMessage, StateMessage, DEFAULT_PORT, PROTOCOL_SCHEMA_VERSION,
};

/// Label stored in trial records driven through the bridge.
pub const REMOTE_OPERATOR: &str = "remote";

const POLL: Duration = Duration::from_millis(2);
const STATS_WINDOW_TICKS: u64 = 100;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Pace {
    /// One tick per simulated time step of wall clock.
    Realtime,
    /// As fast as the CPU allows.
    Unpaced,
    /// Exactly one tick per operator input message. A script driving the
    /// session this way gets the same trial as a direct run.
    Lockstep,
}

#[derive(Debug, Clone)]
pub struct ServeOptions {
    pub bind: SocketAddr,
    pub pace: Pace,
    /// Upper bound on state frames per second per connection.
    pub state_hz: f64,
    pub heartbeat_s: f64,
    /// A connection silent for this long is closed.
    pub heartbeat_timeout_s: f64,
    /// After the operator disconnects, the last wrench ramps to zero over
    /// this much simulated time.
    pub decay_s: f64,
    /// Stop ticking once no operator has been connected for this long.
    pub pause_after_s: Option<f64>,
    /// Turns displacement inputs into a wrench: K (target - offset) - D twist.
    pub displacement_stiffness: [f64; 6],
    pub displacement_damping: [f64; 6],
    pub input_queue: usize,
    /// Keep every tick row for the returned record.
    pub keep_rows: bool,
    /// Kernel send buffer per connection. Small enough that a slow reader
    /// backs up within a second instead of queueing seconds of old state.
    pub send_buffer_bytes: usize,
}

impl Default for ServeOptions {
    fn default() -> Self {
        Self {
            bind: SocketAddr::from(([127, 0, 0, 1], DEFAULT_PORT)),
            pace: Pace::Realtime,
            state_hz: 60.0,
            heartbeat_s: 1.0,
            heartbeat_timeout_s: 3.0,
            decay_s: 0.25,
            pause_after_s: None,
            displacement_stiffness: [300.0, 300.0, 300.0, 10.0, 10.0, 10.0],
            displacement_damping: [20.0, 20.0, 20.0, 0.5, 0.5, 0.5],
            input_queue: 1024,
            keep_rows: false,
            send_buffer_bytes: 64 * 1024,
        }
    }
}

#[derive(Debug, Error)]
pub enum ServeError {
    #[error("bind {addr}: {source}")]
    Bind { addr: SocketAddr, source: std::io::Error },
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error("simulation thread panicked")]
    Panicked,
}

/// Counters for tests and the CLI.
#[derive(Debug, Clone, Default)]
pub struct ServerStats {
    pub ticks: u64,
    pub dropped_inputs: u64,
    pub connections: u64,
    pub frames_sent: u64,
    /// State updates a connection skipped because its socket was still busy.
    pub frames_skipped: u64,
    /// Wall time of each block of 100 ticks, paused stretches excluded.
    pub window_s: Vec<f64>,
}

enum Queued {
    Connected,
    Input { msg: InputMessage, received_tick: u64 },
    Disconnected,
}

struct Snapshot {
    version: u64,
    state: StateMessage,
    cells: usize,
    notes: usize,
}

#[derive(Default)]
struct Journal {
    cells: Vec<[u32; 3]>,
    notes: Vec<String>,
}

struct Shared {
    opts: ServeOptions,
    stop: AtomicBool,
    finished: AtomicBool,
    next_tick: AtomicU64,
    operator_taken: AtomicBool,
    latest: Mutex<Option<Arc<Snapshot>>>,
    journal: Mutex<Journal>,
    prior: GridFull,
    stats: Mutex<ServerStats>,
}

fn lock<T>(m: &Mutex<T>) -> MutexGuard<'_, T> {
    m.lock().unwrap_or_else(|p| p.into_inner())
}

impl Shared {
    fn stopping(&self) -> bool {
        self.stop.load(Ordering::Relaxed)
    }

    fn latest(&self) -> Option<Arc<Snapshot>> {
        lock(&self.latest).clone()
    }
}

/// Running bridge. Dropping it stops every thread.
pub struct BridgeHandle {
    addr: SocketAddr,
    shared: Arc<Shared>,
    sim: Option<JoinHandle<Result<TrialRecord, SessionError>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl BridgeHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn stats(&self) -> ServerStats {
        lock(&self.shared.stats).clone()
    }

    /// The session reached an outcome.
    pub fn is_finished(&self) -> bool {
        self.shared.finished.load(Ordering::Relaxed)
    }

    /// Ticks completed so far.
    pub fn ticks(&self) -> u64 {
        self.shared.next_tick.load(Ordering::Relaxed)
    }

    /// Waits for the session to end on its own, then shuts down.
    pub fn wait(mut self) -> Result<TrialRecord, ServeError> {
        let r = self.join_sim();
        self.shutdown_threads();
        r
    }

    /// Stops the session where it is and returns what was recorded.
    pub fn stop(mut self) -> Result<TrialRecord, ServeError> {
        self.shared.stop.store(true, Ordering::Relaxed);
        let r = self.join_sim();
        self.shutdown_threads();
        r
    }

    fn join_sim(&mut self) -> Result<TrialRecord, ServeError> {
        let h = self.sim.take().ok_or(ServeError::Panicked)?;
        Ok(h.join().map_err(|_| ServeError::Panicked)??)
    }

    fn shutdown_threads(&mut self) {
        // give connections a moment to push the final state
        let until = Instant::now() + Duration::from_millis(100);
        while Instant::now() < until && lock(&self.shared.stats).connections > 0 {
            thread::sleep(POLL);
        }
        self.shared.stop.store(true, Ordering::Relaxed);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
    }
}

impl Drop for BridgeHandle {
    fn drop(&mut self) {
        self.shared.stop.store(true, Ordering::Relaxed);
    }
}

/// Starts a session and listens for clients.
pub fn serve(scenario: &Scenario, condition: Condition, seed: u64, opts: ServeOptions) -> Result<BridgeHandle, ServeError> {
    let session = Session::new(scenario, condition, seed)?;
    let listener = TcpListener::bind(opts.bind).map_err(|source| ServeError::Bind { addr: opts.bind, source })?;
    let addr = listener.local_addr().map_err(|source| ServeError::Bind { addr: opts.bind, source })?;
    listener
        .set_nonblocking(true)
        .map_err(|source| ServeError::Bind { addr, source })?;
    let (tx, rx) = sync_channel(opts.input_queue.max(1));
    let shared = Arc::new(Shared {
        prior: prior_grid(&session.world().state().grid),
        opts,
        stop: AtomicBool::new(false),
        finished: AtomicBool::new(false),
        next_tick: AtomicU64::new(0),
        operator_taken: AtomicBool::new(false),
        latest: Mutex::new(None),
        journal: Mutex::new(Journal::default()),
        stats: Mutex::new(ServerStats::default()),
    });
    log::info!("bridge listening on {addr}");
    let sim = {
        let shared = shared.clone();
        thread::Builder::new()
            .name("bridge-sim".into())
            .spawn(move || sim_loop(session, seed, rx, &shared))
            .expect("spawn simulation thread")
    };
    let acceptor = {
        let shared = shared.clone();
        thread::Builder::new()
            .name("bridge-accept".into())
            .spawn(move || accept_loop(listener, tx, shared))
            .expect("spawn acceptor thread")
    };
    Ok(BridgeHandle {
        addr,
        shared,
        sim: Some(sim),
        acceptor: Some(acceptor),
    })
}

/// The map with only its known obstacles; discovered cells arrive through
/// the journal.
fn prior_grid(grid: &OccupancyGrid) -> GridFull {
    let mut g = crate::protocol::grid_full(grid);
    for row in &mut g.rows {
        *row = row.replace('s', ".");
    }
    g
}

fn class_code(c: CellClass) -> u32 {
    match c {
        CellClass::Known => 1,
        _ => 2,
    }
}

/// Prior map plus the first `n` journal cells.
fn grid_at(prior: &GridFull, cells: &[[u32; 3]]) -> GridFull {
    let mut rows: Vec<Vec<u8>> = prior.rows.iter().map(|r| r.as_bytes().to_vec()).collect();
    for [x, y, class] in cells {
        let (x, y) = (*x as usize, *y as usize);
        if y < prior.height && x < prior.width {
            rows[prior.height - 1 - y][x] = if *class == 1 { b'#' } else { b's' };
        }
    }
    GridFull {
        rows: rows.into_iter().map(|r| String::from_utf8(r).expect("ascii")).collect(),
        ..prior.clone()
    }
}

/// Operator input assembled from network messages.
struct RemoteOperator {
    command: Option<LeaderInput>,
    keys: Keys,
    last_seq: Option<u64>,
    dropped: u64,
    connected: bool,
    lost_at: Instant,
    decay_from: Option<f64>,
    pending_ack: Option<(u64, u64)>,
    ack: Option<InputAck>,
    inputs_waiting: usize,
    k: Vector6<f64>,
    d: Vector6<f64>,
    decay_s: f64,
}

impl RemoteOperator {
    fn new(opts: &ServeOptions) -> Self {
        Self {
            command: None,
            keys: Keys::default(),
            last_seq: None,
            dropped: 0,
            connected: false,
            lost_at: Instant::now(),
            decay_from: None,
            pending_ack: None,
            ack: None,
            inputs_waiting: 0,
            k: Vector6::from(opts.displacement_stiffness),
            d: Vector6::from(opts.displacement_damping),
            decay_s: opts.decay_s,
        }
    }

    fn handle(&mut self, q: Queued, sim_time: f64) {
        match q {
            Queued::Connected => {
                self.connected = true;
                // a new operator numbers its inputs from scratch
                self.last_seq = None;
                self.decay_from = None;
            }
            Queued::Disconnected => {
                self.connected = false;
                self.lost_at = Instant::now();
                self.keys = Keys::default();
                if self.command.is_some() {
                    self.decay_from = Some(sim_time);
                }
            }
            Queued::Input { msg, received_tick } => {
                if self.last_seq.is_some_and(|s| msg.seq <= s) {
                    self.dropped += 1;
                    log::debug!("dropped stale input seq {}", msg.seq);
                    return;
                }
                self.last_seq = Some(msg.seq);
                self.command = Some(msg.leader);
                self.keys.drop |= msg.keys.drop;
                self.keys.grasp |= msg.keys.grasp;
                self.keys.manual_override |= msg.keys.manual_override;
                self.pending_ack = Some((msg.seq, received_tick));
                self.inputs_waiting += 1;
            }
        }
    }

    fn wrench(&self, v: &OperatorView) -> Wrench6 {
        match self.command {
            None => Wrench6::zero(),
            Some(LeaderInput::Wrench { value }) => Wrench6::from_array(value),
            Some(LeaderInput::Displacement { value }) => {
                let here = Pose6::from_isometry(&v.leader_ee);
                let home = Pose6::from_isometry(&v.leader_home);
                let off = here.position - home.position;
                let offset = Vector6::new(
                    off.x,
                    off.y,
                    off.z,
                    wrap_angle(here.rpy[0] - home.rpy[0]),
                    wrap_angle(here.rpy[1] - home.rpy[1]),
                    wrap_angle(here.rpy[2] - home.rpy[2]),
                );
                let w = self.k.component_mul(&(Vector6::from(value) - offset)) - self.d.component_mul(&v.leader_twist);
                Wrench6::from_vector(&w)
            }
        }
    }
}

impl OperatorSource for RemoteOperator {
    fn input(&mut self, v: &OperatorView) -> OperatorInput {
        let mut scale = 1.0;
        if let Some(t0) = self.decay_from {
            scale = (1.0 - (v.time - t0) / self.decay_s).max(0.0);
            if scale == 0.0 {
                self.command = None;
                self.decay_from = None;
            }
        }
        let wrench = self.wrench(v).scale(scale);
        let keys = std::mem::take(&mut self.keys);
        if let Some((seq, received_tick)) = self.pending_ack.take() {
            self.ack = Some(InputAck {
                seq,
                received_tick,
                applied_tick: v.tick,
            });
        }
        self.inputs_waiting = 0;
        OperatorInput {
            wrench,
            grasp_key: keys.grasp,
            drop_key: keys.drop,
            override_key: keys.manual_override,
        }
    }
}

fn state_message(session: &Session, row: Option<&TickRow>, remote: &RemoteOperator) -> StateMessage {
    let v = session.view();
    let here = Pose6::from_isometry(&v.leader_ee);
    let home = Pose6::from_isometry(&v.leader_home);
    let object = session.marker_seen().map(|p| {
        let w = session.world().arm_base() * Point3::from(p);
        [w.x, w.y, w.z]
    });
    StateMessage {
        schema_version: PROTOCOL_SCHEMA_VERSION,
        tick: v.tick,
        time: v.time,
        mode: session.mode().as_str().to_string(),
        base: [v.base.x, v.base.y, v.base.gamma],
        leader_pose: [
            here.position.x,
            here.position.y,
            here.position.z,
            here.rpy[0],
            here.rpy[1],
            here.rpy[2],
        ],
        home_offset_d: here.x() - home.x(),
        follower_q: session.world().state().follower_q.into(),
        cue: session.cue().to_array(),
        boundary: row.map_or("inside_deadzone", |r| r.boundary.as_str()).to_string(),
        inhibited: v.inhibited,
        object,
        grid: None,
        notifications: Vec::new(),
        ack: remote.ack.clone(),
        dropped_inputs: remote.dropped,
        outcome: session.outcome().map(|o| format!("{o:?}").to_lowercase()),
    }
}

struct Publisher {
    version: u64,
    cells: usize,
    events: usize,
    period: Duration,
    last: Option<Instant>,
}

impl Publisher {
    fn publish(&mut self, session: &Session, row: Option<&TickRow>, remote: &RemoteOperator, shared: &Shared, force: bool) {
        if !force && self.last.is_some_and(|t| t.elapsed() < self.period) {
            return;
        }
        self.last = Some(Instant::now());
        let (cells, notes) = {
            let mut j = lock(&shared.journal);
            let grid = &session.world().state().grid;
            for c in &session.discovered()[self.cells..] {
                j.cells.push([c.x as u32, c.y as u32, class_code(grid.class(*c))]);
            }
            self.cells = session.discovered().len();
            for e in &session.events()[self.events..] {
                j.notes.push(format!("{}: {}", e.kind, e.detail));
            }
            self.events = session.events().len();
            (j.cells.len(), j.notes.len())
        };
        self.version += 1;
        let snap = Snapshot {
            version: self.version,
            state: state_message(session, row, remote),
            cells,
            notes,
        };
        *lock(&shared.latest) = Some(Arc::new(snap));
    }
}

fn sim_loop(mut session: Session, seed: u64, rx: Receiver<Queued>, shared: &Shared) -> Result<TrialRecord, SessionError> {
    let opts = &shared.opts;
    let dt = session.scenario().config.sim.dt_s;
    let mut remote = RemoteOperator::new(opts);
    let mut publisher = Publisher {
        version: 0,
        cells: 0,
        events: 0,
        period: Duration::from_secs_f64(1.0 / opts.state_hz.max(1.0)),
        last: None,
    };
    publisher.publish(&session, None, &remote, shared, true);
    let started = Instant::now();
    let mut rows = Vec::new();
    let mut ticks = 0u64;
    let mut pace_origin = Instant::now();
    let mut paced_ticks = 0u64;
    let mut window_start = Instant::now();
    let mut feed_closed = false;

    'run: while !session.is_finished() && !shared.stopping() {
        let now_time = session.world().state().time;
        loop {
            match rx.try_recv() {
                Ok(q) => {
                    remote.handle(q, now_time);
                    // in lockstep each input drives exactly one tick
                    if opts.pace == Pace::Lockstep && remote.inputs_waiting > 0 {
                        break;
                    }
                }
                Err(TryRecvError::Empty) => break,
                Err(TryRecvError::Disconnected) => {
                    feed_closed = true;
                    break;
                }
            }
        }
        if opts.pace == Pace::Lockstep {
            while remote.inputs_waiting == 0 {
                if shared.stopping() || feed_closed {
                    break 'run;
                }
                match rx.recv_timeout(Duration::from_millis(20)) {
                    Ok(q) => remote.handle(q, now_time),
                    Err(RecvTimeoutError::Timeout) => {}
                    Err(RecvTimeoutError::Disconnected) => feed_closed = true,
                }
            }
        }
        if let Some(p) = opts.pause_after_s {
            if !remote.connected && remote.lost_at.elapsed().as_secs_f64() > p {
                thread::sleep(Duration::from_millis(5));
                pace_origin = Instant::now();
                paced_ticks = 0;
                window_start = Instant::now();
                continue;
            }
        }

        let input = {
            let view = session.view();
            remote.input(&view)
        };
        let row = session.step(&input)?;
        ticks += 1;
        shared.next_tick.store(session.world().state().tick, Ordering::Relaxed);
        publisher.publish(&session, Some(&row), &remote, shared, session.is_finished());
        if opts.keep_rows {
            rows.push(row);
        }
        if ticks % STATS_WINDOW_TICKS == 0 {
            let mut s = lock(&shared.stats);
            s.ticks = ticks;
            s.dropped_inputs = remote.dropped;
            s.window_s.push(window_start.elapsed().as_secs_f64());
            window_start = Instant::now();
        }
        if opts.pace == Pace::Realtime {
            paced_ticks += 1;
            let due = pace_origin + Duration::from_secs_f64(paced_ticks as f64 * dt);
            let now = Instant::now();
            if due > now {
                thread::sleep(due - now);
            } else if now - due > Duration::from_millis(250) {
                // fell far behind (debugger, suspend): do not sprint to catch up
                pace_origin = now;
                paced_ticks = 0;
            }
        }
    }
    publisher.publish(&session, None, &remote, shared, true);
    {
        let mut s = lock(&shared.stats);
        s.ticks = ticks;
        s.dropped_inputs = remote.dropped;
    }
    shared.finished.store(true, Ordering::Relaxed);
    log::info!("session ended after {ticks} ticks: {:?}", session.outcome());
    Ok(finish_record(
        &session,
        seed,
        REMOTE_OPERATOR,
        ticks,
        started.elapsed().as_secs_f64(),
        rows,
    ))
}

fn accept_loop(listener: TcpListener, tx: SyncSender<Queued>, shared: Arc<Shared>) {
    let mut workers: Vec<JoinHandle<()>> = Vec::new();
    while !shared.stopping() {
        match listener.accept() {
            Ok((stream, peer)) => {
                let shared = shared.clone();
                let tx = tx.clone();
                let spawned = thread::Builder::new()
                    .name(format!("bridge-conn-{peer}"))
                    .spawn(move || {
                        lock(&shared.stats).connections += 1;
                        if let Err(e) = connection(stream, &tx, &shared) {
                            log::debug!("connection {peer} ended: {e}");
                        }
                        lock(&shared.stats).connections -= 1;
                    });
                match spawned {
                    Ok(h) => workers.push(h),
                    Err(e) => log::warn!("could not start connection thread: {e}"),
                }
            }
            Err(e) if e.kind() == ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(5)),
            Err(e) => {
                log::warn!("accept failed: {e}");
                thread::sleep(Duration::from_millis(50));
            }
        }
        workers.retain(|h| !h.is_finished());
    }
    drop(tx);
    for h in workers {
        let _ = h.join();
    }
}

fn is_timeout(e: &tungstenite::Error) -> bool {
    matches!(e, tungstenite::Error::Io(io) if matches!(io.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut))
}

/// Per-connection cursor into the shared journal.
struct Cursor {
    sent_version: u64,
    cells: Option<usize>,
    notes: usize,
}

impl Cursor {
    fn frame(&mut self, snap: &Snapshot, shared: &Shared) -> ServerMessage {
        let mut state = snap.state.clone();
        let j = lock(&shared.journal);
        state.grid = match self.cells {
            None => Some(GridFrame::Full(grid_at(&shared.prior, &j.cells[..snap.cells]))),
            Some(n) if n < snap.cells => Some(GridFrame::Delta {
                cells: j.cells[n..snap.cells].to_vec(),
            }),
            Some(_) => None,
        };
        self.cells = Some(snap.cells.max(self.cells.unwrap_or(0)));
        if self.notes < snap.notes {
            state.notifications = j.notes[self.notes..snap.notes].to_vec();
            self.notes = snap.notes;
        }
        self.sent_version = snap.version;
        ServerMessage::State(state)
    }
}

fn connection(stream: TcpStream, tx: &SyncSender<Queued>, shared: &Shared) -> Result<(), tungstenite::Error> {
    stream.set_nonblocking(false)?;
    stream.set_nodelay(true)?;
    socket2::SockRef::from(&stream).set_send_buffer_size(shared.opts.send_buffer_bytes)?;
    stream.set_read_timeout(Some(Duration::from_secs(5)))?;
    let config = WebSocketConfig::default().max_message_size(Some(1 << 20));
    let mut ws = tungstenite::accept_with_config(stream, Some(config)).map_err(|e| match e {
        tungstenite::HandshakeError::Failure(e) => e,
        tungstenite::HandshakeError::Interrupted(_) => {
            tungstenite::Error::Io(std::io::Error::new(ErrorKind::TimedOut, "handshake timed out"))
        }
    })?;
    ws.get_ref().set_read_timeout(Some(POLL))?;
    ws.get_ref().set_write_timeout(Some(POLL))?;

    let operator = !shared.operator_taken.swap(true, Ordering::AcqRel);
    if operator && tx.send(Queued::Connected).is_err() {
        shared.operator_taken.store(false, Ordering::Release);
        return Ok(());
    }
    let role = if operator { "operator" } else { "observer" };
    log::info!("client connected as {role}");
    let result = serve_connection(&mut ws, operator, role, tx, shared);
    if operator {
        let _ = tx.send(Queued::Disconnected);
        shared.operator_taken.store(false, Ordering::Release);
    }
    let _ = ws.close(None);
    let _ = ws.flush();
    result
}

fn serve_connection(
    ws: &mut WebSocket<TcpStream>,
    operator: bool,
    role: &str,
    tx: &SyncSender<Queued>,
    shared: &Shared,
) -> Result<(), tungstenite::Error> {
    let opts = &shared.opts;
    let send = |ws: &mut WebSocket<TcpStream>, m: &ServerMessage| -> Result<(), tungstenite::Error> {
        match ws.write(Message::text(encode_server(m))) {
            Err(e) if is_timeout(&e) => Ok(()),
            other => other,
        }
    };
    send(
        ws,
        &ServerMessage::Welcome {
            schema_version: PROTOCOL_SCHEMA_VERSION,
            role: role.to_string(),
        },
    )?;
    let frame_period = Duration::from_secs_f64(1.0 / opts.state_hz.max(1.0));
    let heartbeat = Duration::from_secs_f64(opts.heartbeat_s);
    let silence = Duration::from_secs_f64(opts.heartbeat_timeout_s);
    let mut cursor = Cursor {
        sent_version: 0,
        cells: None,
        notes: 0,
    };
    let mut last_heard = Instant::now();
    let mut last_frame: Option<Instant> = None;
    let mut last_heartbeat = Instant::now();
    let mut drained = true;
    let started = Instant::now();

    loop {
        let stopping = shared.stopping();
        match ws.read() {
            Ok(Message::Text(text)) => {
                last_heard = Instant::now();
                match decode_client(text.as_str()) {
                    Ok(ClientMessage::Input(msg)) if operator => {
                        let received_tick = shared.next_tick.load(Ordering::Relaxed);
                        if tx.send(Queued::Input { msg, received_tick }).is_err() {
                            // session over; keep serving the final state
                        }
                    }
                    Ok(ClientMessage::Input(_)) => send(
                        ws,
                        &ServerMessage::Error {
                            message: "observer connections are read-only".into(),
                            byte_offset: None,
                        },
                    )?,
                    Ok(ClientMessage::Heartbeat { .. }) => {}
                    Err(e) => {
                        log::debug!("bad client message: {e}");
                        send(ws, &e.reply())?;
                    }
                }
            }
            Ok(Message::Close(_)) => return Ok(()),
            Ok(_) => last_heard = Instant::now(),
            Err(e) if is_timeout(&e) => {}
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
        if last_heard.elapsed() > silence {
            log::info!("{role} silent for {:.1} s; closing", silence.as_secs_f64());
            return Ok(());
        }

        if let Some(snap) = shared.latest() {
            let due = last_frame.is_none_or(|t| t.elapsed() >= frame_period);
            if snap.version != cursor.sent_version && due {
                if drained {
                    let m = cursor.frame(&snap, shared);
                    send(ws, &m)?;
                    last_frame = Some(Instant::now());
                    lock(&shared.stats).frames_sent += 1;
                } else {
                    // latest wins: a busy socket never queues stale state
                    lock(&shared.stats).frames_skipped += 1;
                    last_frame = Some(Instant::now());
                }
            }
        }
        if drained && last_heartbeat.elapsed() >= heartbeat {
            last_heartbeat = Instant::now();
            send(
                ws,
                &ServerMessage::Heartbeat {
                    schema_version: PROTOCOL_SCHEMA_VERSION,
                    time: started.elapsed().as_secs_f64(),
                },
            )?;
        }
        match ws.flush() {
            Ok(()) => drained = true,
            Err(e) if is_timeout(&e) => drained = false,
            Err(tungstenite::Error::ConnectionClosed | tungstenite::Error::AlreadyClosed) => return Ok(()),
            Err(e) => return Err(e),
        }
        if stopping {
            let final_sent = shared.latest().is_none_or(|s| s.version == cursor.sent_version);
            if (final_sent && drained) || last_heard.elapsed() > Duration::from_millis(500) {
                return Ok(());
            }
        }
    }
}
