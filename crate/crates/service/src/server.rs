//! Live teleoperation service. One control thread owns the rover and the
//! perception pipeline; WebSocket sessions feed it through a single
//! command queue and receive its output through per-client queues.

use std::collections::{BTreeMap, HashMap};
use std::net::SocketAddr;
use std::ops::ControlFlow;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{mpsc as std_mpsc, Arc, Mutex};
use std::thread;
use std::time::Instant;

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::State;
use axum::response::Response;
use axum::routing::get;
use axum::Router;
use futures::{SinkExt, StreamExt};
use serde::Serialize;
use tokio::sync::{mpsc, oneshot};

use rover_core::detect::Detection;
use rover_core::eval::TelemetryGenerator;
use rover_core::geometry::CameraIntrinsics;
use rover_core::monodepth::BackendRegistry;
use rover_core::pipeline::{
    ClockKind, DepthJob, DetectOutput, PerceptionSnapshot, Pipeline, World,
};
use rover_core::rover::{
    map_key, nearest_in_corridor, step, DriveParams, MotorCommand, PathExecutor, PathPlan,
    Perception, RoverState, SafetyConfig, SafetyDecision, SafetyGate,
};
use rover_core::scene::{render_view, RenderOptions, SceneDescription};
use rover_core::sim::{CameraMount, SimPerception};

use crate::config::AppConfig;
use crate::protocol::{
    depth_payload, frame_payload, parse_client, ClientRequest, DetectionsPayload, DriveMode,
    ErrorCode, ErrorPayload, HaltEventPayload, HelloPayload, MessageType, PosePayload,
    SnapshotMetaPayload, PROTOCOL_VERSION,
};
use crate::CliError;

/// Pipeline runs are restarted after this many seconds so their traces
/// stay bounded.
const SEGMENT_S: f64 = 3600.0;

/// A server message before its per-client `seq` is assigned. The payload
/// is serialized once and shared by every client.
#[derive(Debug)]
pub struct Outgoing {
    pub kind: MessageType,
    pub ts: f64,
    payload: String,
}

impl Outgoing {
    pub fn new<P: Serialize>(kind: MessageType, ts: f64, payload: &P) -> Arc<Self> {
        Arc::new(Self {
            kind,
            ts,
            payload: serde_json::to_string(payload).expect("payloads serialize"),
        })
    }

    pub fn to_wire(&self, seq: u64) -> String {
        format!(
            r#"{{"type":"{}","seq":{seq},"ts":{},"payload":{}}}"#,
            self.kind,
            serde_json::to_string(&self.ts).expect("finite ts"),
            self.payload
        )
    }
}

struct Slot {
    bulk: mpsc::Sender<Arc<Outgoing>>,
    priority: mpsc::UnboundedSender<Arc<Outgoing>>,
}

/// Receiving ends of one client's queues.
pub struct ClientQueues {
    pub bulk: mpsc::Receiver<Arc<Outgoing>>,
    pub priority: mpsc::UnboundedReceiver<Arc<Outgoing>>,
}

/// Fan-out to connected clients. Bulk messages go through a bounded queue
/// and are dropped for a client whose queue is full; priority messages
/// (hello, errors, halt events) are never dropped.
pub struct Hub {
    slots: Mutex<HashMap<u64, Slot>>,
    next_id: AtomicU64,
    capacity: usize,
    dropped: AtomicU64,
}

impl Hub {
    pub fn new(capacity: usize) -> Self {
        Self {
            slots: Mutex::new(HashMap::new()),
            next_id: AtomicU64::new(1),
            capacity: capacity.max(1),
            dropped: AtomicU64::new(0),
        }
    }

    pub fn register(&self) -> (u64, ClientQueues) {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let (bulk_tx, bulk) = mpsc::channel(self.capacity);
        let (prio_tx, priority) = mpsc::unbounded_channel();
        self.slots.lock().expect("hub lock").insert(
            id,
            Slot {
                bulk: bulk_tx,
                priority: prio_tx,
            },
        );
        (id, ClientQueues { bulk, priority })
    }

    pub fn unregister(&self, id: u64) {
        self.slots.lock().expect("hub lock").remove(&id);
    }

    /// Disconnects every client.
    pub fn close_all(&self) {
        self.slots.lock().expect("hub lock").clear();
    }

    pub fn client_count(&self) -> usize {
        self.slots.lock().expect("hub lock").len()
    }

    /// Bulk messages dropped so far, summed over clients.
    pub fn dropped(&self) -> u64 {
        self.dropped.load(Ordering::Relaxed)
    }

    pub fn broadcast(&self, msg: Arc<Outgoing>) {
        let mut slots = self.slots.lock().expect("hub lock");
        slots.retain(|_, s| match s.bulk.try_send(msg.clone()) {
            Ok(()) => true,
            Err(mpsc::error::TrySendError::Full(_)) => {
                self.dropped.fetch_add(1, Ordering::Relaxed);
                true
            }
            Err(mpsc::error::TrySendError::Closed(_)) => false,
        });
    }

    pub fn broadcast_priority(&self, msg: Arc<Outgoing>) {
        let mut slots = self.slots.lock().expect("hub lock");
        slots.retain(|_, s| s.priority.send(msg.clone()).is_ok());
    }

    pub fn send_to(&self, id: u64, msg: Arc<Outgoing>) {
        if let Some(s) = self.slots.lock().expect("hub lock").get(&id) {
            let _ = s.priority.send(msg);
        }
    }
}

/// One client request on the control queue.
#[derive(Debug)]
pub struct Command {
    pub client: u64,
    pub seq: u64,
    pub request: ClientRequest,
}

enum Mode {
    Manual(MotorCommand),
    Path {
        name: String,
        exec: Box<PathExecutor>,
    },
}

struct ControlLoop {
    scene: Arc<SceneDescription>,
    mount: CameraMount,
    intrinsics: CameraIntrinsics,
    perception: SimPerception,
    drive: DriveParams,
    safety: SafetyConfig,
    gate: SafetyGate,
    state: RoverState,
    mode: Mode,
    control_rate: f64,
    staleness_bound: f64,
    commands: std_mpsc::Receiver<Command>,
    hub: Arc<Hub>,
    paths: BTreeMap<String, PathPlan>,
    stop: Arc<AtomicBool>,
    ticks: Arc<AtomicU64>,
    offset: f64,
    publish_period: f64,
    last_publish: Option<f64>,
    last_depth_sent: Option<f64>,
    depth_downsample: usize,
    telemetry: TelemetryGenerator,
}

impl ControlLoop {
    fn error(
        &self,
        client: u64,
        now: f64,
        code: ErrorCode,
        message: impl Into<String>,
        ref_seq: u64,
    ) {
        let payload = ErrorPayload {
            code,
            message: message.into(),
            ref_seq: Some(ref_seq),
        };
        self.hub
            .send_to(client, Outgoing::new(MessageType::Error, now, &payload));
    }

    fn handle(&mut self, cmd: Command, now: f64) {
        let Command {
            client,
            seq,
            request,
        } = cmd;
        match request {
            ClientRequest::Cmd { key } => {
                let mapping = map_key(&key);
                if let Some(w) = mapping.warning {
                    self.error(client, now, ErrorCode::UnknownKey, w, seq);
                }
                if self.state.halted && mapping.command != MotorCommand::STOP {
                    self.error(
                        client,
                        now,
                        ErrorCode::Halted,
                        "rover is halted; send resume first",
                        seq,
                    );
                    return;
                }
                self.mode = Mode::Manual(mapping.command);
            }
            ClientRequest::PathLoad(load) => {
                let (name, plan) = match (load.name, load.plan) {
                    (Some(name), _) => match self.paths.get(&name) {
                        Some(plan) => (name, plan.clone()),
                        None => {
                            self.error(
                                client,
                                now,
                                ErrorCode::UnknownPath,
                                format!("no path named {name:?}"),
                                seq,
                            );
                            return;
                        }
                    },
                    (None, Some(plan)) => (plan.name.clone(), plan),
                    (None, None) => return,
                };
                if self.state.halted {
                    self.error(
                        client,
                        now,
                        ErrorCode::Halted,
                        "rover is halted; send resume first",
                        seq,
                    );
                    return;
                }
                match PathExecutor::new(
                    plan,
                    self.state.clone(),
                    self.drive,
                    self.safety,
                    self.control_rate,
                ) {
                    Ok(exec) => {
                        self.mode = Mode::Path {
                            name,
                            exec: Box::new(exec),
                        }
                    }
                    Err(e) => self.error(client, now, ErrorCode::InvalidPlan, e.to_string(), seq),
                }
            }
            ClientRequest::Resume => {
                if !self.state.halted {
                    self.error(
                        client,
                        now,
                        ErrorCode::NotHalted,
                        "rover is not halted",
                        seq,
                    );
                    return;
                }
                self.state.resume();
                self.gate.resume();
                self.mode = Mode::Manual(MotorCommand::STOP);
            }
        }
    }

    fn announce_halt(&self, snapshot: &PerceptionSnapshot, now: f64) {
        let payload = HaltEventPayload {
            reason: self.state.halt_reason.clone().unwrap_or_default(),
            x: self.state.x,
            y: self.state.y,
            range_m: nearest_in_corridor(snapshot, &self.safety),
        };
        tracing::info!(reason = %payload.reason, range_m = ?payload.range_m, "safety halt");
        self.hub
            .broadcast_priority(Outgoing::new(MessageType::HaltEvent, now, &payload));
    }

    fn drive_tick(&mut self, snapshot: &PerceptionSnapshot, now: f64) {
        let was_halted = self.state.halted;
        match &mut self.mode {
            Mode::Manual(cmd) => {
                let cmd = *cmd;
                // only forward motion is gated
                if !was_halted && cmd.left() + cmd.right() > 0 {
                    if let SafetyDecision::Halt(reason) = self.gate.evaluate(snapshot) {
                        self.state.halt(reason);
                    }
                }
                self.state = step(&self.state, cmd, 1.0 / self.control_rate, &self.drive)
                    .expect("positive dt");
            }
            Mode::Path { exec, .. } => {
                let flow = exec.on_snapshot(snapshot);
                self.state = exec.state().clone();
                if flow.is_break() && !self.state.halted {
                    self.mode = Mode::Manual(MotorCommand::STOP);
                }
            }
        }
        if self.state.halted && !was_halted {
            self.announce_halt(snapshot, now);
        }
    }

    fn publish(&mut self, snapshot: &PerceptionSnapshot, now: f64) {
        if self
            .last_publish
            .is_some_and(|last| now - last < self.publish_period - 1e-6)
        {
            return;
        }
        self.last_publish = Some(now);
        let (mode, path) = match &self.mode {
            Mode::Manual(_) => (DriveMode::Manual, None),
            Mode::Path { name, .. } => (DriveMode::Path, Some(name.clone())),
        };
        let s = &self.state;
        let pose = PosePayload {
            x: s.x,
            y: s.y,
            heading: s.heading,
            linear_speed: s.linear_speed,
            angular_speed: s.angular_speed,
            halted: s.halted,
            mode,
            path,
        };
        self.hub
            .broadcast(Outgoing::new(MessageType::Pose, now, &pose));

        let detections: Vec<Detection> = snapshot
            .detections
            .iter()
            .cloned()
            .map(|mut d| {
                d.source_timestamp += self.offset;
                d
            })
            .collect();
        let dets = DetectionsPayload {
            snapshot_seq: snapshot.seq,
            frame_width: snapshot.frame_width,
            detections,
        };
        self.hub
            .broadcast(Outgoing::new(MessageType::Detections, now, &dets));

        let meta = SnapshotMetaPayload {
            snapshot_seq: snapshot.seq,
            detections_ts: snapshot.detections_timestamp + self.offset,
            depth_capture_ts: snapshot
                .depth
                .as_ref()
                .map(|d| d.capture_timestamp + self.offset),
            depth_staleness_s: snapshot.depth_staleness,
            staleness_bound_s: self.staleness_bound,
        };
        self.hub
            .broadcast(Outgoing::new(MessageType::SnapshotMeta, now, &meta));

        let tel = self.telemetry.sample(now);
        self.hub
            .broadcast(Outgoing::new(MessageType::Telemetry, now, &tel));

        let pose = self.mount.pose(&self.scene, &self.state);
        match render_view(
            &self.scene,
            &self.intrinsics,
            &pose,
            &RenderOptions::default(),
        ) {
            Ok(view) => self.hub.broadcast(Outgoing::new(
                MessageType::Frame,
                now,
                &frame_payload(&view.image),
            )),
            Err(e) => tracing::warn!(error = %e, "frame render failed"),
        }

        if let (Some(depth), Some(staleness)) = (&snapshot.depth, snapshot.depth_staleness) {
            let capture = depth.capture_timestamp + self.offset;
            if self.last_depth_sent != Some(capture) {
                self.last_depth_sent = Some(capture);
                let payload =
                    depth_payload(&depth.depth, self.depth_downsample, capture, staleness);
                self.hub
                    .broadcast(Outgoing::new(MessageType::Depth, now, &payload));
            }
        }
    }
}

impl World for ControlLoop {
    fn detect(&mut self, t: f64) -> DetectOutput {
        let state = self.state.clone();
        self.perception.detect(t, &state)
    }

    fn depth_job(&mut self, t: f64) -> DepthJob {
        let state = self.state.clone();
        self.perception.depth_job(t, &state)
    }

    fn on_snapshot(&mut self, snapshot: &Arc<PerceptionSnapshot>) -> ControlFlow<()> {
        if self.stop.load(Ordering::Acquire) {
            return ControlFlow::Break(());
        }
        let now = self.offset + snapshot.timestamp;
        while let Ok(cmd) = self.commands.try_recv() {
            self.handle(cmd, now);
        }
        self.drive_tick(snapshot, now);
        self.publish(snapshot, now);
        self.ticks.fetch_add(1, Ordering::Release);
        ControlFlow::Continue(())
    }
}

struct AppState {
    hub: Arc<Hub>,
    commands: std_mpsc::Sender<Command>,
    origin: Instant,
    hello: HelloPayload,
}

/// A running service; drop-safe, but call [`ServerHandle::shutdown`] for a
/// clean stop.
pub struct ServerHandle {
    pub addr: SocketAddr,
    hub: Arc<Hub>,
    stop: Arc<AtomicBool>,
    ticks: Arc<AtomicU64>,
    control: Option<thread::JoinHandle<Result<(), String>>>,
    shutdown: Option<oneshot::Sender<()>>,
    http: Option<tokio::task::JoinHandle<()>>,
}

impl ServerHandle {
    pub fn hub(&self) -> &Arc<Hub> {
        &self.hub
    }

    /// Control ticks completed so far.
    pub fn ticks(&self) -> u64 {
        self.ticks.load(Ordering::Acquire)
    }

    pub async fn shutdown(mut self) -> Result<(), CliError> {
        self.stop_all();
        if let Some(http) = self.http.take() {
            let _ = http.await;
        }
        if let Some(control) = self.control.take() {
            let res = tokio::task::spawn_blocking(move || control.join())
                .await
                .map_err(|e| CliError::Validation(format!("control thread: {e}")))?;
            match res {
                Ok(Ok(())) => {}
                Ok(Err(e)) => return Err(CliError::Validation(e)),
                Err(_) => return Err(CliError::Validation("control thread panicked".into())),
            }
        }
        Ok(())
    }

    fn stop_all(&mut self) {
        self.stop.store(true, Ordering::Release);
        self.hub.close_all();
        if let Some(tx) = self.shutdown.take() {
            let _ = tx.send(());
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop_all();
    }
}

/// Binds the listener, starts the control thread on a real clock, and
/// serves `/ws`.
pub async fn start(config: AppConfig) -> Result<ServerHandle, CliError> {
    config.validate()?;
    let addr = config.server.validate()?;
    let paths = config.server.path_library()?;
    let sim = &config.sim;
    let mut schedule = sim.schedule;
    schedule.clock = ClockKind::Real;

    let scene = Arc::new(
        SceneDescription::from_spec(&sim.scene).map_err(|e| CliError::Validation(e.to_string()))?,
    );
    let perception = SimPerception::new(
        Arc::clone(&scene),
        sim,
        &BackendRegistry::with_builtin(),
        None,
    )
    .map_err(|e| CliError::Validation(e.to_string()))?;
    let intrinsics = sim
        .rig
        .intrinsics()
        .map_err(|e| CliError::Validation(e.to_string()))?;
    let hub = Arc::new(Hub::new(config.server.client_buffer));
    let stop = Arc::new(AtomicBool::new(false));
    let ticks = Arc::new(AtomicU64::new(0));
    let (cmd_tx, cmd_rx) = std_mpsc::channel();

    let hello = HelloPayload {
        protocol_version: PROTOCOL_VERSION,
        detection_rate: schedule.detection_rate,
        frame_rate_limit: config.server.frame_rate_limit,
        frame_width: intrinsics.width(),
        frame_height: intrinsics.height(),
        paths: paths.keys().cloned().collect(),
    };
    let mut ctl = ControlLoop {
        scene,
        mount: sim.rig,
        intrinsics,
        perception,
        drive: sim.rover.drive(),
        safety: sim.safety,
        gate: SafetyGate::new(sim.safety),
        state: sim.rover.start_state(),
        mode: Mode::Manual(MotorCommand::STOP),
        control_rate: schedule.detection_rate,
        staleness_bound: schedule.staleness_bound(),
        commands: cmd_rx,
        hub: Arc::clone(&hub),
        paths,
        stop: Arc::clone(&stop),
        ticks: Arc::clone(&ticks),
        offset: 0.0,
        publish_period: 1.0 / config.server.frame_rate_limit,
        last_publish: None,
        last_depth_sent: None,
        depth_downsample: config.server.depth_downsample,
        telemetry: TelemetryGenerator::new(sim.telemetry),
    };

    let listener = tokio::net::TcpListener::bind(addr)
        .await
        .map_err(|e| CliError::Io(format!("bind {addr}: {e}")))?;
    let addr = listener
        .local_addr()
        .map_err(|e| CliError::Io(e.to_string()))?;
    let origin = Instant::now();

    let control = {
        let stop = Arc::clone(&stop);
        thread::Builder::new()
            .name("control".into())
            .spawn(move || -> Result<(), String> {
                while !stop.load(Ordering::Acquire) {
                    ctl.offset = origin.elapsed().as_secs_f64();
                    let pipeline = Pipeline::new(schedule).map_err(|e| e.to_string())?;
                    pipeline
                        .run(SEGMENT_S, &mut ctl)
                        .map_err(|e| e.to_string())?;
                }
                Ok(())
            })
            .map_err(|e| CliError::Io(format!("control thread: {e}")))?
    };

    let state = Arc::new(AppState {
        hub: Arc::clone(&hub),
        commands: cmd_tx,
        origin,
        hello,
    });
    let app = Router::new()
        .route("/ws", get(ws_handler))
        .route("/health", get(|| async { "ok" }))
        .with_state(state);
    let (shutdown_tx, shutdown_rx) = oneshot::channel::<()>();
    let http = tokio::spawn(async move {
        let res = axum::serve(listener, app)
            .with_graceful_shutdown(async {
                let _ = shutdown_rx.await;
            })
            .await;
        if let Err(e) = res {
            tracing::error!(error = %e, "http server failed");
        }
    });
    tracing::info!(%addr, "serving /ws");
    Ok(ServerHandle {
        addr,
        hub,
        stop,
        ticks,
        control: Some(control),
        shutdown: Some(shutdown_tx),
        http: Some(http),
    })
}

/// Serves until Ctrl-C.
pub async fn run(config: AppConfig) -> Result<(), CliError> {
    let handle = start(config).await?;
    println!("listening on ws://{}/ws", handle.addr);
    let _ = tokio::signal::ctrl_c().await;
    handle.shutdown().await
}

async fn ws_handler(ws: WebSocketUpgrade, State(app): State<Arc<AppState>>) -> Response {
    ws.on_upgrade(move |socket| client_session(socket, app))
}

async fn client_session(socket: WebSocket, app: Arc<AppState>) {
    let (id, mut queues) = app.hub.register();
    app.hub.send_to(
        id,
        Outgoing::new(
            MessageType::Hello,
            app.origin.elapsed().as_secs_f64(),
            &app.hello,
        ),
    );
    let (mut sink, mut stream) = socket.split();

    let writer = async move {
        let mut seq = 0u64;
        loop {
            let msg = tokio::select! {
                biased;
                m = queues.priority.recv() => m,
                m = queues.bulk.recv() => m,
            };
            let Some(msg) = msg else { break };
            seq += 1;
            if sink
                .send(Message::Text(msg.to_wire(seq).into()))
                .await
                .is_err()
            {
                break;
            }
        }
        let _ = sink.close().await;
    };

    let reader = {
        let app = Arc::clone(&app);
        async move {
            let mut last_seq: Option<u64> = None;
            while let Some(Ok(msg)) = stream.next().await {
                let now = app.origin.elapsed().as_secs_f64();
                let text = match msg {
                    Message::Text(t) => t,
                    Message::Binary(_) => {
                        let e = ErrorPayload {
                            code: ErrorCode::Malformed,
                            message: "binary frames are not accepted".into(),
                            ref_seq: None,
                        };
                        app.hub
                            .send_to(id, Outgoing::new(MessageType::Error, now, &e));
                        continue;
                    }
                    Message::Close(_) => break,
                    _ => continue,
                };
                match parse_client(text.as_str()) {
                    Ok((seq, request)) => {
                        if last_seq.is_some_and(|l| seq <= l) {
                            let e = ErrorPayload {
                                code: ErrorCode::BadSeq,
                                message: format!(
                                    "seq {seq} does not follow {}",
                                    last_seq.unwrap_or(0)
                                ),
                                ref_seq: Some(seq),
                            };
                            app.hub
                                .send_to(id, Outgoing::new(MessageType::Error, now, &e));
                            continue;
                        }
                        last_seq = Some(seq);
                        if app
                            .commands
                            .send(Command {
                                client: id,
                                seq,
                                request,
                            })
                            .is_err()
                        {
                            break;
                        }
                    }
                    Err(e) => app
                        .hub
                        .send_to(id, Outgoing::new(MessageType::Error, now, &e.payload())),
                }
            }
        }
    };

    tokio::select! {
        _ = writer => {}
        _ = reader => {}
    }
    app.hub.unregister(id);
}
