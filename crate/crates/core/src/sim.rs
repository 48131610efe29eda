//! Discrete-time plant and scripted scenario playback.
//!
//! The plant is a lumped per-joint model: each joint sees its own inertia
//! (evaluated once at the home pose), viscous friction and the exact gravity
//! torque of the arm model. The controller applies the impedance law with
//! gravity feed-forward at 50 Hz while the scripted scene, latency and link
//! state drive the payload stream.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::io::{Read, Write};
use std::net::SocketAddr;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::comms::{
    client_tick, Client, Delivered, FreshnessPolicy, OnboardState, PayloadSlot, Pipeline,
    SceneQuery,
};
use crate::impedance::{impedance_torque, JointCommand, JointState, PayloadReason};
use crate::kinematics::{
    forward_kinematics, gravity_torques, solve_ik, ArmModel, IkOptions, JointVector, Pose6D,
};
use crate::safety::SafetyLimits;
use crate::scenario_db::{NominalSpeed, NUM_JOINTS};

pub const DEFAULT_DT: f64 = 0.02;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("non-finite {0}")]
    NonFinite(&'static str),
    #[error("script `{script}`: {message}")]
    Script { script: String, message: String },
    #[error("log: {0}")]
    Log(String),
    #[error("empty run log")]
    EmptyLog,
    #[error(transparent)]
    Kinematics(#[from] crate::kinematics::KinematicsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlantState {
    pub q: JointVector,
    pub qd: JointVector,
    /// Lumped per-joint inertia, kg·m².
    pub inertia: JointVector,
    /// Viscous friction, N·m·s/rad.
    pub friction: f64,
    pub time: f64,
}

impl PlantState {
    /// At rest at `q`, with inertia lumped at the model's home pose.
    pub fn at_rest(model: &ArmModel, q: JointVector, friction: f64) -> Self {
        Self {
            q,
            qd: JointVector::zeros(),
            inertia: model.lumped_inertia(&model.home),
            friction,
            time: 0.0,
        }
    }
}

/// Semi-implicit Euler step of `I q'' = tau - tau_g(q) - b q'`.
pub fn plant_step(
    model: &ArmModel,
    state: &PlantState,
    tau: &JointVector,
    dt: f64,
) -> Result<PlantState, SimError> {
    if tau.iter().any(|t| !t.is_finite()) {
        return Err(SimError::NonFinite("torque"));
    }
    let tau_g = gravity_torques(model, &state.q);
    let qdd = (tau - tau_g - state.qd * state.friction).component_div(&state.inertia);
    let qd = state.qd + qdd * dt;
    let q = state.q + qd * dt;
    if q.iter().chain(qd.iter()).any(|v| !v.is_finite()) {
        return Err(SimError::NonFinite("plant state"));
    }
    Ok(PlantState {
        q,
        qd,
        time: state.time + dt,
        ..state.clone()
    })
}

/// End-effector speed bound for each nominal speed class, m/s.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SpeedMap {
    pub slow: f64,
    pub mid: f64,
    pub normal: f64,
}

impl Default for SpeedMap {
    fn default() -> Self {
        Self {
            slow: 0.05,
            mid: 0.15,
            normal: 0.25,
        }
    }
}

impl SpeedMap {
    pub fn get(&self, v: NominalSpeed) -> f64 {
        match v {
            NominalSpeed::Slow => self.slow,
            NominalSpeed::Mid => self.mid,
            NominalSpeed::Normal => self.normal,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub dt: f64,
    pub friction: f64,
    pub speeds: SpeedMap,
    /// Half-width of uniform joint-angle measurement noise, rad.
    pub measurement_noise: f64,
    /// Wall-clock seconds per simulated second when running over TCP.
    pub time_scale: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            dt: DEFAULT_DT,
            friction: 0.1,
            speeds: SpeedMap::default(),
            measurement_noise: 0.0,
            time_scale: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Waypoint {
    /// `[x, y, z, qw, qx, qy, qz]`
    pub left: [f64; 7],
    pub right: [f64; 7],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "snake_case")]
pub enum Event {
    SetScene {
        stub: String,
        /// Human separation in mm while this scene holds.
        #[serde(default)]
        separation_mm: Option<f64>,
    },
    SetTarget {
        waypoint: String,
    },
    InjectLatency {
        seconds: f64,
    },
    DropConnection {
        duration: f64,
    },
}

impl Event {
    pub fn marker(&self) -> String {
        match self {
            Event::SetScene { stub, .. } => format!("set_scene:{stub}"),
            Event::SetTarget { waypoint } => format!("set_target:{waypoint}"),
            Event::InjectLatency { seconds } => format!("inject_latency:{seconds}"),
            Event::DropConnection { duration } => format!("drop_connection:{duration}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimedEvent {
    pub time: f64,
    #[serde(flatten)]
    pub event: Event,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioScript {
    pub name: String,
    /// Run length, s.
    pub duration: f64,
    #[serde(default)]
    pub waypoints: BTreeMap<String, Waypoint>,
    #[serde(default)]
    pub events: Vec<TimedEvent>,
}

impl ScenarioScript {
    pub fn from_toml(text: &str) -> Result<Self, SimError> {
        toml::from_str(text).map_err(|e| SimError::Script {
            script: "<toml>".into(),
            message: e.to_string(),
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path)?;
        toml::from_str(&text).map_err(|e| SimError::Script {
            script: path.display().to_string(),
            message: e.to_string(),
        })
    }

    fn err(&self, message: impl Into<String>) -> SimError {
        SimError::Script {
            script: self.name.clone(),
            message: message.into(),
        }
    }

    /// Structural checks. `known_stubs`, when given, must contain every
    /// scene the script refers to.
    pub fn validate(&self, known_stubs: Option<&BTreeSet<String>>) -> Result<(), SimError> {
        if !(self.duration > 0.0 && self.duration.is_finite()) {
            return Err(self.err(format!("duration {} must be positive", self.duration)));
        }
        let mut last = 0.0;
        for (i, ev) in self.events.iter().enumerate() {
            if !(ev.time >= 0.0 && ev.time.is_finite()) {
                return Err(self.err(format!("event {i}: bad time {}", ev.time)));
            }
            if ev.time < last {
                return Err(self.err(format!("event {i}: time {} before {last}", ev.time)));
            }
            last = ev.time;
            match &ev.event {
                Event::SetScene {
                    stub,
                    separation_mm,
                } => {
                    if known_stubs.is_some_and(|k| !k.contains(stub)) {
                        return Err(self.err(format!("unknown scene stub `{stub}`")));
                    }
                    if separation_mm.is_some_and(|s| !(s >= 0.0 && s.is_finite())) {
                        return Err(self.err(format!("event {i}: bad separation")));
                    }
                }
                Event::SetTarget { waypoint } => {
                    if !self.waypoints.contains_key(waypoint) {
                        return Err(self.err(format!("unknown waypoint `{waypoint}`")));
                    }
                }
                Event::InjectLatency { seconds } => {
                    if !(*seconds >= 0.0 && seconds.is_finite()) {
                        return Err(self.err(format!("event {i}: bad latency {seconds}")));
                    }
                }
                Event::DropConnection { duration } => {
                    if !(*duration > 0.0 && duration.is_finite()) {
                        return Err(self.err(format!("event {i}: bad drop duration {duration}")));
                    }
                }
            }
        }
        for (name, wp) in &self.waypoints {
            Pose6D::from_array(wp.left)
                .and(Pose6D::from_array(wp.right))
                .map_err(|e| self.err(format!("waypoint `{name}`: {e}")))?;
        }
        Ok(())
    }
}

/// One control tick.
#[derive(Debug, Clone, PartialEq)]
pub struct TickRecord {
    pub tick: u64,
    pub time: f64,
    pub scene: String,
    pub reason: PayloadReason,
    pub scenario_id: String,
    pub nominal_v: NominalSpeed,
    pub kp: [f64; NUM_JOINTS],
    pub kd: [f64; NUM_JOINTS],
    pub q: [f64; NUM_JOINTS],
    pub q_ref: [f64; NUM_JOINTS],
    pub tau: [f64; NUM_JOINTS],
    /// The tick started later than its wall-clock deadline (TCP runs only).
    pub overrun: bool,
    /// Script events applied at this tick, `|`-separated.
    pub events: String,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct RunLog {
    pub name: String,
    pub records: Vec<TickRecord>,
}

fn arr(v: &JointVector) -> [f64; NUM_JOINTS] {
    let mut out = [0.0; NUM_JOINTS];
    out.copy_from_slice(v.as_slice());
    out
}

const LOG_META: [&str; 8] = [
    "tick",
    "time",
    "scene",
    "reason",
    "scenario_id",
    "nominal_v",
    "overrun",
    "events",
];
const LOG_ARRAYS: [&str; 5] = ["kp", "kd", "q", "q_ref", "tau"];

impl RunLog {
    pub fn header() -> Vec<String> {
        let mut h: Vec<String> = LOG_META.iter().map(|s| s.to_string()).collect();
        for name in LOG_ARRAYS {
            h.extend((0..NUM_JOINTS).map(|j| format!("{name}_{j}")));
        }
        h
    }

    pub fn write_csv<W: Write>(&self, writer: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(writer);
        let log_err = |e: csv::Error| SimError::Log(e.to_string());
        w.write_record(Self::header()).map_err(log_err)?;
        for r in &self.records {
            let mut row = vec![
                r.tick.to_string(),
                r.time.to_string(),
                r.scene.clone(),
                r.reason.to_string(),
                r.scenario_id.clone(),
                r.nominal_v.to_string(),
                r.overrun.to_string(),
                r.events.clone(),
            ];
            for a in [&r.kp, &r.kd, &r.q, &r.q_ref, &r.tau] {
                row.extend(a.iter().map(f64::to_string));
            }
            w.write_record(&row).map_err(log_err)?;
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_csv<R: Read>(name: impl Into<String>, reader: R) -> Result<Self, SimError> {
        let mut rdr = csv::Reader::from_reader(reader);
        let header = rdr
            .headers()
            .map_err(|e| SimError::Log(e.to_string()))?
            .clone();
        if header.iter().collect::<Vec<_>>() != Self::header() {
            return Err(SimError::Log("unexpected column layout".into()));
        }
        let mut records = Vec::new();
        for (line, row) in rdr.records().enumerate() {
            let row = row.map_err(|e| SimError::Log(e.to_string()))?;
            let bad = |what: &str| SimError::Log(format!("row {}: bad {what}", line + 1));
            let num = |i: usize| row[i].parse::<f64>().map_err(|_| bad(&Self::header()[i]));
            let block = |k: usize| -> Result<[f64; NUM_JOINTS], SimError> {
                let mut out = [0.0; NUM_JOINTS];
                for (j, o) in out.iter_mut().enumerate() {
                    *o = num(LOG_META.len() + k * NUM_JOINTS + j)?;
                }
                Ok(out)
            };
            records.push(TickRecord {
                tick: row[0].parse().map_err(|_| bad("tick"))?,
                time: num(1)?,
                scene: row[2].to_string(),
                reason: row[3].parse().map_err(|_| bad("reason"))?,
                scenario_id: row[4].to_string(),
                nominal_v: row[5].parse().map_err(|_| bad("nominal_v"))?,
                overrun: row[6].parse().map_err(|_| bad("overrun"))?,
                events: row[7].to_string(),
                kp: block(0)?,
                kd: block(1)?,
                q: block(2)?,
                q_ref: block(3)?,
                tau: block(4)?,
            });
        }
        Ok(Self {
            name: name.into(),
            records,
        })
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), SimError> {
        let file = std::fs::File::create(path)?;
        self.write_csv(std::io::BufWriter::new(file))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self, SimError> {
        let path = path.as_ref();
        let name = path
            .file_stem()
            .map(|s| s.to_string_lossy().into_owned())
            .unwrap_or_default();
        Self::read_csv(name, std::fs::File::open(path)?)
    }
}

/// Minimum-jerk blend `10s^3 - 15s^4 + 6s^5` and its derivative.
pub fn min_jerk(s: f64) -> (f64, f64) {
    let s = s.clamp(0.0, 1.0);
    let (s2, s3) = (s * s, s * s * s);
    (
        s3 * (10.0 - 15.0 * s + 6.0 * s2),
        30.0 * s2 * (1.0 - 2.0 * s + s2),
    )
}

/// Peak of the min-jerk velocity profile, at `s = 0.5`.
const MIN_JERK_PEAK: f64 = 1.875;

/// Point-to-point joint motion whose progress rate follows the current
/// speed class, so end-effector speed stays under the mapped bound.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    start: JointVector,
    goal: JointVector,
    phase: f64,
    /// Largest end-effector displacement per unit of blend, m.
    path_gain: f64,
}

impl Trajectory {
    pub fn hold(q: JointVector) -> Self {
        Self {
            start: q,
            goal: q,
            phase: 1.0,
            path_gain: 0.0,
        }
    }

    pub fn new(model: &ArmModel, start: JointVector, goal: JointVector) -> Self {
        // sample |dp/du| along the joint-space line for both hands
        const SAMPLES: usize = 64;
        let point = |u: f64| {
            let (l, r) = forward_kinematics(model, &(start + (goal - start) * u));
            (l.position, r.position)
        };
        let mut path_gain: f64 = 0.0;
        let mut prev = point(0.0);
        for k in 1..=SAMPLES {
            let cur = point(k as f64 / SAMPLES as f64);
            let step = (cur.0 - prev.0).norm().max((cur.1 - prev.1).norm());
            path_gain = path_gain.max(step * SAMPLES as f64);
            prev = cur;
        }
        Self {
            start,
            goal,
            phase: if path_gain > 1e-12 { 0.0 } else { 1.0 },
            path_gain,
        }
    }

    pub fn done(&self) -> bool {
        self.phase >= 1.0
    }

    pub fn goal(&self) -> &JointVector {
        &self.goal
    }

    /// Reference at the current phase without advancing.
    pub fn reference(&self, speed: f64) -> (JointVector, JointVector) {
        let (h, dh) = min_jerk(self.phase);
        let q = self.start + (self.goal - self.start) * h;
        let qd = if self.done() {
            JointVector::zeros()
        } else {
            (self.goal - self.start) * (dh * self.rate(speed))
        };
        (q, qd)
    }

    fn rate(&self, speed: f64) -> f64 {
        speed / (MIN_JERK_PEAK * self.path_gain)
    }

    /// Advances by `dt` at end-effector speed bound `speed` (m/s) and
    /// returns `(q_ref, qd_ref)`.
    pub fn advance(&mut self, speed: f64, dt: f64) -> (JointVector, JointVector) {
        if !self.done() {
            self.phase = (self.phase + self.rate(speed) * dt).min(1.0);
        }
        self.reference(speed)
    }
}

/// Where scene queries go.
pub enum Link {
    /// Server pipeline evaluated in-process on the simulated clock;
    /// deterministic.
    InProcess(Arc<Pipeline>),
    /// A running server; arrival times depend on the wall clock.
    Tcp(SocketAddr),
}

/// Everything a run needs besides the script and the link.
#[derive(Debug, Clone)]
pub struct SimContext {
    pub model: ArmModel,
    pub policy: FreshnessPolicy,
    pub limits: SafetyLimits,
    pub slew: f64,
    pub sim: SimConfig,
    pub ik: IkOptions,
    pub seed: u64,
}

impl SimContext {
    pub fn new(model: ArmModel) -> Self {
        Self {
            model,
            policy: FreshnessPolicy::default(),
            limits: SafetyLimits::default(),
            slew: crate::impedance::GainScheduler::DEFAULT_SLEW,
            sim: SimConfig::default(),
            ik: IkOptions::default(),
            seed: 0,
        }
    }
}

struct InFlight {
    deliver_tick: u64,
    delivered: Delivered,
}

trait Transport {
    fn send(&mut self, tick: u64, query: SceneQuery, latency_ticks: u64);
    /// Moves replies due at `tick` into the onboard slot.
    fn poll(&mut self, tick: u64, slot: &PayloadSlot, latency_ticks: u64);
    fn disconnect(&mut self);
    fn reconnect(&mut self);
}

struct InProcessTransport {
    pipeline: Arc<Pipeline>,
    sequence: u64,
    in_flight: VecDeque<InFlight>,
}

impl Transport for InProcessTransport {
    fn send(&mut self, tick: u64, query: SceneQuery, latency_ticks: u64) {
        self.sequence += 1;
        let body = self.pipeline.respond(&query);
        if let Some(Ok(delivered)) = Delivered::from_body(self.sequence, &body) {
            self.in_flight.push_back(InFlight {
                deliver_tick: tick + latency_ticks,
                delivered,
            });
        }
    }

    fn poll(&mut self, tick: u64, slot: &PayloadSlot, _latency_ticks: u64) {
        // latency may change between sends, so scan rather than pop the front
        let mut i = 0;
        while i < self.in_flight.len() {
            if self.in_flight[i].deliver_tick <= tick {
                let f = self.in_flight.remove(i).expect("index in range");
                slot.offer(f.delivered);
            } else {
                i += 1;
            }
        }
    }

    fn disconnect(&mut self) {
        self.in_flight.clear();
    }

    fn reconnect(&mut self) {}
}

struct TcpTransport {
    addr: SocketAddr,
    client: Option<Client>,
    heartbeat: Duration,
    next_sequence: u64,
    seen: Option<u64>,
    held: VecDeque<InFlight>,
}

impl TcpTransport {
    fn connect(&mut self) {
        match Client::connect_from(
            &self.addr,
            Duration::from_secs(2),
            self.heartbeat,
            self.next_sequence,
        ) {
            Ok(c) => self.client = Some(c),
            Err(e) => log::warn!("connect to {} failed: {e}", self.addr),
        }
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, _tick: u64, query: SceneQuery, _latency_ticks: u64) {
        if let Some(c) = &self.client {
            if let Err(e) = c.send_query(query) {
                log::warn!("query not sent: {e}");
            }
            self.next_sequence = c.next_sequence();
        }
    }

    fn poll(&mut self, tick: u64, slot: &PayloadSlot, latency_ticks: u64) {
        // scripted latency is added on top of the real round trip
        if let Some(c) = &self.client {
            if let Some(d) = c.slot().load() {
                if self.seen != Some(d.sequence) {
                    self.seen = Some(d.sequence);
                    self.held.push_back(InFlight {
                        deliver_tick: tick + latency_ticks,
                        delivered: (*d).clone(),
                    });
                }
            }
        }
        while self.held.front().is_some_and(|f| f.deliver_tick <= tick) {
            slot.offer(self.held.pop_front().expect("non-empty").delivered);
        }
    }

    fn disconnect(&mut self) {
        if let Some(c) = self.client.take() {
            self.next_sequence = c.next_sequence();
            c.close();
        }
        self.held.clear();
    }

    fn reconnect(&mut self) {
        self.connect();
    }
}

fn ticks_for(seconds: f64, dt: f64) -> u64 {
    // first tick at or after `seconds`, tolerant of dt rounding
    (seconds / dt - 1e-9).ceil().max(0.0) as u64
}

/// Plays a script against the full pipeline and logs every control tick.
pub fn run_scenario(
    script: &ScenarioScript,
    ctx: &SimContext,
    link: Link,
) -> Result<RunLog, SimError> {
    let realtime = matches!(link, Link::Tcp(_));
    let known = match &link {
        Link::InProcess(p) => p.known_stubs(),
        Link::Tcp(_) => None,
    };
    script.validate(known.as_ref())?;
    ctx.policy
        .validate()
        .map_err(|m| script.err(format!("policy: {m}")))?;
    let dt = ctx.sim.dt;
    if !(dt > 0.0) {
        return Err(script.err("dt must be positive"));
    }

    // IK for every waypoint, chained from home in event order
    let mut solutions: BTreeMap<String, JointVector> = BTreeMap::new();
    let mut q_prev = ctx.model.home;
    for ev in &script.events {
        if let Event::SetTarget { waypoint } = &ev.event {
            if solutions.contains_key(waypoint) {
                continue;
            }
            let wp = &script.waypoints[waypoint];
            let targets = (Pose6D::from_array(wp.left)?, Pose6D::from_array(wp.right)?);
            let sol = solve_ik(&ctx.model, (&targets.0, &targets.1), &q_prev, &ctx.ik)?;
            if sol.residual > 5e-2 {
                log::warn!(
                    "waypoint `{waypoint}` reached with residual {:.2e}",
                    sol.residual
                );
            }
            q_prev = sol.q;
            solutions.insert(waypoint.clone(), sol.q);
        }
    }

    let mut transport: Box<dyn Transport> = match link {
        Link::InProcess(pipeline) => Box::new(InProcessTransport {
            pipeline,
            sequence: 0,
            in_flight: VecDeque::new(),
        }),
        Link::Tcp(addr) => {
            let mut t = TcpTransport {
                addr,
                client: None,
                heartbeat: Duration::from_secs_f64(ctx.policy.heartbeat_interval),
                next_sequence: 1,
                seen: None,
                held: VecDeque::new(),
            };
            t.connect();
            if t.client.is_none() {
                return Err(SimError::Io(std::io::Error::new(
                    std::io::ErrorKind::ConnectionRefused,
                    format!("cannot reach server at {addr}"),
                )));
            }
            Box::new(t)
        }
    };

    let slot = Arc::new(PayloadSlot::new());
    let mut onboard = OnboardState::new(Arc::clone(&slot), ctx.policy, ctx.limits, ctx.slew);
    let mut plant = PlantState::at_rest(&ctx.model, ctx.model.home, ctx.sim.friction);
    let mut traj = Trajectory::hold(ctx.model.home);
    let mut rng = ChaCha8Rng::seed_from_u64(ctx.seed);

    let n_ticks = ticks_for(script.duration, dt);
    let stream_every = ticks_for(1.0 / ctx.policy.stream_rate, dt).max(1);
    let mut event_ticks: VecDeque<(u64, &Event)> = script
        .events
        .iter()
        .map(|e| (ticks_for(e.time, dt), &e.event))
        .collect();
    let mut scene: Option<(String, Option<f64>)> = None;
    let mut latency_ticks = 0u64;
    let mut link_down_until: Option<u64> = None;
    let mut records = Vec::with_capacity(n_ticks as usize);
    let started = Instant::now();

    for tick in 0..n_ticks {
        let now = tick as f64 * dt;
        let mut overrun = false;
        if realtime {
            let deadline = started + Duration::from_secs_f64(now * ctx.sim.time_scale);
            let elapsed = Instant::now();
            if elapsed < deadline {
                std::thread::sleep(deadline - elapsed);
            } else if elapsed - deadline > Duration::from_secs_f64(dt * ctx.sim.time_scale) {
                overrun = true;
            }
        }

        if link_down_until.is_some_and(|until| tick >= until) {
            link_down_until = None;
            transport.reconnect();
        }
        let mut markers = Vec::new();
        while event_ticks.front().is_some_and(|(t, _)| *t <= tick) {
            let (_, ev) = event_ticks.pop_front().expect("non-empty");
            markers.push(ev.marker());
            match ev {
                Event::SetScene {
                    stub,
                    separation_mm,
                } => scene = Some((stub.clone(), *separation_mm)),
                Event::SetTarget { waypoint } => {
                    let (q_ref, _) = traj.reference(0.0);
                    traj = Trajectory::new(&ctx.model, q_ref, solutions[waypoint]);
                }
                Event::InjectLatency { seconds } => latency_ticks = ticks_for(*seconds, dt),
                Event::DropConnection { duration } => {
                    transport.disconnect();
                    link_down_until = Some(tick + ticks_for(*duration, dt));
                }
            }
        }

        let link_up = link_down_until.is_none();
        if link_up && tick % stream_every == 0 {
            if let Some((stub, separation)) = &scene {
                let mut q = SceneQuery::stub(stub.clone());
                q.separation_mm = *separation;
                transport.send(tick, q, latency_ticks);
            }
        }
        if link_up {
            transport.poll(tick, &slot, latency_ticks);
        }

        onboard.set_separation(scene.as_ref().and_then(|s| s.1));
        let payload = client_tick(&mut onboard, now);
        let (q_ref, qd_ref) = traj.advance(ctx.sim.speeds.get(payload.nominal_v), dt);

        let mut measured = plant.q;
        if ctx.sim.measurement_noise > 0.0 {
            let a = ctx.sim.measurement_noise;
            measured
                .iter_mut()
                .for_each(|v| *v += rng.random_range(-a..=a));
        }
        let cmd = JointCommand {
            q_ref,
            qd_ref,
            tau_ff: gravity_torques(&ctx.model, &measured),
            kp: JointVector::from_row_slice(&payload.kp),
            kd: JointVector::from_row_slice(&payload.kd),
        };
        let tau = impedance_torque(
            &cmd,
            &JointState {
                q: measured,
                qd: plant.qd,
            },
        )
        .map_err(|_| SimError::NonFinite("controller input"))?;

        records.push(TickRecord {
            tick,
            time: now,
            scene: scene.as_ref().map(|s| s.0.clone()).unwrap_or_default(),
            reason: payload.reason,
            scenario_id: payload.scenario_id.clone(),
            nominal_v: payload.nominal_v,
            kp: payload.kp,
            kd: payload.kd,
            q: arr(&plant.q),
            q_ref: arr(&q_ref),
            tau: arr(&tau),
            overrun,
            events: markers.join("|"),
        });
        plant = plant_step(&ctx.model, &plant, &tau, dt)?;
    }
    transport.disconnect();
    Ok(RunLog {
        name: script.name.clone(),
        records,
    })
}

/// Summary of one stretch of constant scene.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PhaseSummary {
    pub scene: String,
    pub start: f64,
    pub end: f64,
    pub ticks: usize,
    pub mean_kp: f64,
    pub mean_kd: f64,
    /// Gains and speed on the last tick of the phase.
    pub final_kp: [f64; NUM_JOINTS],
    pub final_kd: [f64; NUM_JOINTS],
    pub final_v: NominalSpeed,
    pub max_tracking_error: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Modulation {
    pub time: f64,
    pub from_scene: String,
    pub to_scene: String,
    /// Scene change to 90 % of the gain transition, s; `None` when the
    /// gains did not change.
    pub time_to_modulate: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub name: String,
    pub ticks: usize,
    pub duration: f64,
    pub max_tracking_error: f64,
    pub phases: Vec<PhaseSummary>,
    pub modulations: Vec<Modulation>,
    /// Tick indices absent from the log plus ticks that overran.
    pub missed_ticks: usize,
    pub reasons: BTreeMap<String, usize>,
}

fn tracking_error(r: &TickRecord) -> f64 {
    r.q.iter()
        .zip(&r.q_ref)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max)
}

fn gain_distance(a: &TickRecord, kp: &[f64], kd: &[f64]) -> f64 {
    a.kp.iter().zip(kp).map(|(x, y)| (x - y).abs()).sum::<f64>()
        + a.kd.iter().zip(kd).map(|(x, y)| (x - y).abs()).sum::<f64>()
}

/// Metrics for a run. These are proxies for task success, not measurements
/// of it.
pub fn analyze(log: &RunLog) -> Result<RunReport, SimError> {
    let recs = &log.records;
    let (first, last) = match (recs.first(), recs.last()) {
        (Some(f), Some(l)) => (f, l),
        _ => return Err(SimError::EmptyLog),
    };

    let mut bounds = vec![0];
    bounds.extend((1..recs.len()).filter(|&i| recs[i].scene != recs[i - 1].scene));
    bounds.push(recs.len());

    let phases: Vec<PhaseSummary> = bounds
        .windows(2)
        .map(|w| {
            let span = &recs[w[0]..w[1]];
            let n = span.len() as f64;
            let end = &span[span.len() - 1];
            PhaseSummary {
                scene: span[0].scene.clone(),
                start: span[0].time,
                end: end.time,
                ticks: span.len(),
                mean_kp: span.iter().map(|r| r.kp.iter().sum::<f64>()).sum::<f64>()
                    / (n * NUM_JOINTS as f64),
                mean_kd: span.iter().map(|r| r.kd.iter().sum::<f64>()).sum::<f64>()
                    / (n * NUM_JOINTS as f64),
                final_kp: end.kp,
                final_kd: end.kd,
                final_v: end.nominal_v,
                max_tracking_error: span.iter().map(tracking_error).fold(0.0, f64::max),
            }
        })
        .collect();

    let modulations = bounds[1..bounds.len() - 1]
        .iter()
        .zip(phases.windows(2))
        .map(|(&b, pair)| {
            let pre = &recs[b - 1];
            let post = &pair[1];
            let total = gain_distance(pre, &post.final_kp, &post.final_kd);
            let ttm = (total > 1e-12)
                .then(|| {
                    recs[b..b + post.ticks]
                        .iter()
                        .find(|r| gain_distance(r, &post.final_kp, &post.final_kd) <= 0.1 * total)
                        .map(|r| r.time - recs[b].time)
                })
                .flatten();
            Modulation {
                time: recs[b].time,
                from_scene: pair[0].scene.clone(),
                to_scene: post.scene.clone(),
                time_to_modulate: ttm,
            }
        })
        .collect();

    let gaps: u64 = recs
        .windows(2)
        .map(|w| w[1].tick.saturating_sub(w[0].tick + 1))
        .sum();
    let overruns = recs.iter().filter(|r| r.overrun).count();
    let mut reasons = BTreeMap::new();
    for r in recs {
        *reasons.entry(r.reason.to_string()).or_insert(0) += 1;
    }

    Ok(RunReport {
        name: log.name.clone(),
        ticks: recs.len(),
        duration: last.time - first.time,
        max_tracking_error: recs.iter().map(tracking_error).fold(0.0, f64::max),
        phases,
        modulations,
        missed_ticks: gaps as usize + overruns,
        reasons,
    })
}

impl RunReport {
    /// Human-readable summary table.
    pub fn to_text(&self) -> String {
        let mut s = format!(
            "run {}: {} ticks over {:.2} s, max tracking error {:.4} rad, missed ticks {}\n",
            self.name, self.ticks, self.duration, self.max_tracking_error, self.missed_ticks
        );
        s.push_str("phase  start    end      mean_kp  mean_kd  final_v  max_err  scene\n");
        for (i, p) in self.phases.iter().enumerate() {
            s.push_str(&format!(
                "{i:<6} {:<8.2} {:<8.2} {:<8.2} {:<8.3} {:<8} {:<8.4} {}\n",
                p.start,
                p.end,
                p.mean_kp,
                p.mean_kd,
                p.final_v.to_string(),
                p.max_tracking_error,
                p.scene
            ));
        }
        for m in &self.modulations {
            let ttm = m
                .time_to_modulate
                .map_or("none".to_string(), |t| format!("{t:.2} s"));
            s.push_str(&format!(
                "scene change at {:.2} s: {} -> {}, time to modulate {ttm}\n",
                m.time, m.from_scene, m.to_scene
            ));
        }
        let hist: Vec<String> = self
            .reasons
            .iter()
            .map(|(k, v)| format!("{k}={v}"))
            .collect();
        s.push_str(&format!("payload reasons: {}\n", hist.join(" ")));
        s
    }

    /// Per-phase table as CSV.
    pub fn write_phases_csv<W: Write>(&self, writer: W) -> Result<(), SimError> {
        let mut w = csv::Writer::from_writer(writer);
        let e = |e: csv::Error| SimError::Log(e.to_string());
        w.write_record([
            "phase",
            "scene",
            "start",
            "end",
            "ticks",
            "mean_kp",
            "mean_kd",
            "final_v",
            "max_tracking_error",
            "time_to_modulate",
        ])
        .map_err(e)?;
        for (i, p) in self.phases.iter().enumerate() {
            let ttm = i
                .checked_sub(1)
                .and_then(|k| self.modulations[k].time_to_modulate)
                .map(|t| t.to_string())
                .unwrap_or_default();
            w.write_record([
                i.to_string(),
                p.scene.clone(),
                p.start.to_string(),
                p.end.to_string(),
                p.ticks.to_string(),
                p.mean_kp.to_string(),
                p.mean_kd.to_string(),
                p.final_v.to_string(),
                p.max_tracking_error.to_string(),
                ttm,
            ])
            .map_err(e)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Modulation direction between matched ticks of a human-absent and a
/// human-present run: lower-or-equal Kp, higher-or-equal Kd, lower-or-equal
/// speed on every joint. Returns the first offending tick.
pub fn check_modulation_direction(absent: &TickRecord, present: &TickRecord) -> Result<(), String> {
    for j in 0..NUM_JOINTS {
        if present.kp[j] > absent.kp[j] {
            return Err(format!(
                "t={}: Kp[{j}] {} > {}",
                present.time, present.kp[j], absent.kp[j]
            ));
        }
        if present.kd[j] < absent.kd[j] {
            return Err(format!(
                "t={}: Kd[{j}] {} < {}",
                present.time, present.kd[j], absent.kd[j]
            ));
        }
    }
    if present.nominal_v > absent.nominal_v {
        return Err(format!(
            "t={}: v {} > {}",
            present.time, present.nominal_v, absent.nominal_v
        ));
    }
    Ok(())
}

/// Hold at home under uniform gains: the step response used for the
/// stability sweep. Returns the joint trajectory, one entry per tick.
pub fn step_response(
    model: &ArmModel,
    kp: f64,
    kd: f64,
    step: f64,
    duration: f64,
    sim: &SimConfig,
) -> Result<Vec<JointVector>, SimError> {
    let q_ref = model.home.add_scalar(step);
    let mut plant = PlantState::at_rest(model, model.home, sim.friction);
    let n = ticks_for(duration, sim.dt);
    let mut out = Vec::with_capacity(n as usize + 1);
    out.push(plant.q);
    for _ in 0..n {
        let cmd = JointCommand {
            q_ref,
            qd_ref: JointVector::zeros(),
            tau_ff: gravity_torques(model, &plant.q),
            kp: JointVector::repeat(kp),
            kd: JointVector::repeat(kd),
        };
        let tau = impedance_torque(
            &cmd,
            &JointState {
                q: plant.q,
                qd: plant.qd,
            },
        )
        .map_err(|_| SimError::NonFinite("controller input"))?;
        plant = plant_step(model, &plant, &tau, sim.dt)?;
        out.push(plant.q);
    }
    Ok(out)
}
