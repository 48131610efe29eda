//! Onboard/offboard protocol: length-prefixed JSON frames over TCP, the
//! server-side query pipeline, and the onboard freshness watchdog.
//!
//! Frames are a 4-byte big-endian body length followed by a UTF-8 JSON
//! object `{"type", "sequence", "timestamp_ms", "body"}`. Replies carry the
//! sequence number of the query they answer.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use arc_swap::ArcSwapOption;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::embedding::Embedder;
use crate::impedance::{
    fallback_payload, GainScheduler, ImpedancePayload, PayloadReason, PAYLOAD_VALUES,
};
use crate::perception::{
    descriptor_from_value, Frame, NormalizationTable, NormalizedDescriptor, VlmClient,
};
use crate::retrieval::{format_payload, retrieve, RetrievalConfig, ScenarioIndex};
use crate::safety::{apply_guards, SafetyLimits};

/// Largest accepted frame body.
pub const MAX_FRAME_BYTES: usize = 4 << 20;

#[derive(Debug, Error)]
pub enum WireError {
    #[error("framing error: {0}")]
    Framing(String),
    #[error("parse error: {0}")]
    Parse(String),
    #[error("cannot encode: {0}")]
    Encode(String),
    #[error(transparent)]
    Io(#[from] io::Error),
}

impl WireError {
    /// Errors after which the byte stream is still aligned on a frame.
    pub fn is_recoverable(&self) -> bool {
        match self {
            WireError::Parse(_) | WireError::Encode(_) => true,
            WireError::Framing(msg) => !msg.starts_with("truncated"),
            WireError::Io(_) => false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MessageKind {
    SceneQuery,
    PayloadReply,
    Heartbeat,
    Error,
}

/// What the robot asks the server to describe.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "source", rename_all = "snake_case")]
pub enum SceneSource {
    /// Named scene for the mock perception client.
    Stub { name: String },
    /// A structured scene message, validated server-side.
    Descriptor { descriptor: Value },
    /// Encoded camera frame for a real perception model.
    Image { bytes: Vec<u8> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneQuery {
    #[serde(flatten)]
    pub source: SceneSource,
    /// Measured human separation in mm, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub separation_mm: Option<f64>,
}

impl SceneQuery {
    pub fn stub(name: impl Into<String>) -> Self {
        Self {
            source: SceneSource::Stub { name: name.into() },
            separation_mm: None,
        }
    }
}

/// A payload on the wire: the 29 values plus metadata.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PayloadReply {
    pub values: Vec<f64>,
    pub scenario_id: String,
    pub reason: PayloadReason,
    /// Normalized scene the payload was selected for; lets the robot re-apply
    /// the guards with its own separation measurement.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scene: Option<NormalizedDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub distance: Option<f64>,
}

impl PayloadReply {
    pub fn new(
        payload: &ImpedancePayload,
        scene: Option<NormalizedDescriptor>,
        distance: Option<f64>,
    ) -> Self {
        Self {
            values: payload.to_values().to_vec(),
            scenario_id: payload.scenario_id.clone(),
            reason: payload.reason,
            scene,
            distance: distance.filter(|d| d.is_finite()),
        }
    }

    pub fn payload(&self) -> Result<ImpedancePayload, WireError> {
        ImpedancePayload::from_values(&self.values, self.scenario_id.clone(), self.reason)
            .map_err(|e| WireError::Parse(e.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorReply {
    pub message: String,
    /// Conservative payload the robot may apply instead.
    pub fallback: PayloadReply,
}

#[derive(Debug, Clone, PartialEq)]
pub enum Body {
    SceneQuery(SceneQuery),
    PayloadReply(PayloadReply),
    Heartbeat,
    Error(ErrorReply),
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::SceneQuery(_) => MessageKind::SceneQuery,
            Body::PayloadReply(_) => MessageKind::PayloadReply,
            Body::Heartbeat => MessageKind::Heartbeat,
            Body::Error(_) => MessageKind::Error,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WireMessage {
    pub sequence: u64,
    pub timestamp_ms: u64,
    pub body: Body,
}

#[derive(Serialize, Deserialize)]
struct Envelope {
    #[serde(rename = "type")]
    kind: MessageKind,
    sequence: u64,
    timestamp_ms: u64,
    #[serde(default)]
    body: Value,
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn check_finite(values: &[f64]) -> Result<(), WireError> {
    // JSON has no spelling for NaN or infinity
    match values.iter().position(|v| !v.is_finite()) {
        Some(i) => Err(WireError::Encode(format!("non-finite value at {i}"))),
        None => Ok(()),
    }
}

/// Serializes the message body as JSON, without the length prefix.
pub fn encode_body(msg: &WireMessage) -> Result<Vec<u8>, WireError> {
    let to_value =
        |v: Result<Value, serde_json::Error>| v.map_err(|e| WireError::Encode(e.to_string()));
    let body = match &msg.body {
        Body::SceneQuery(q) => {
            check_finite(q.separation_mm.as_slice())?;
            to_value(serde_json::to_value(q))?
        }
        Body::PayloadReply(r) => {
            check_finite(&r.values)?;
            to_value(serde_json::to_value(r))?
        }
        Body::Heartbeat => Value::Null,
        Body::Error(e) => {
            check_finite(&e.fallback.values)?;
            to_value(serde_json::to_value(e))?
        }
    };
    let env = Envelope {
        kind: msg.body.kind(),
        sequence: msg.sequence,
        timestamp_ms: msg.timestamp_ms,
        body,
    };
    serde_json::to_vec(&env).map_err(|e| WireError::Encode(e.to_string()))
}

/// Full frame: length prefix plus body.
pub fn encode(msg: &WireMessage) -> Result<Vec<u8>, WireError> {
    let body = encode_body(msg)?;
    if body.len() > MAX_FRAME_BYTES {
        return Err(WireError::Encode(format!(
            "body of {} bytes exceeds limit",
            body.len()
        )));
    }
    let mut out = Vec::with_capacity(4 + body.len());
    out.extend_from_slice(&(body.len() as u32).to_be_bytes());
    out.extend_from_slice(&body);
    Ok(out)
}

pub fn decode_body(body: &[u8]) -> Result<WireMessage, WireError> {
    let text = std::str::from_utf8(body).map_err(|e| WireError::Parse(e.to_string()))?;
    let env: Envelope = serde_json::from_str(text).map_err(|e| WireError::Parse(e.to_string()))?;
    let parse = |e: serde_json::Error| WireError::Parse(format!("{:?} body: {e}", env.kind));
    let body = match env.kind {
        MessageKind::SceneQuery => {
            Body::SceneQuery(serde_json::from_value(env.body.clone()).map_err(parse)?)
        }
        MessageKind::PayloadReply => {
            let r: PayloadReply = serde_json::from_value(env.body.clone()).map_err(parse)?;
            if r.values.len() != PAYLOAD_VALUES {
                return Err(WireError::Parse(format!(
                    "payload_reply carries {} values, expected {PAYLOAD_VALUES}",
                    r.values.len()
                )));
            }
            Body::PayloadReply(r)
        }
        MessageKind::Heartbeat => Body::Heartbeat,
        MessageKind::Error => Body::Error(serde_json::from_value(env.body.clone()).map_err(parse)?),
    };
    Ok(WireMessage {
        sequence: env.sequence,
        timestamp_ms: env.timestamp_ms,
        body,
    })
}

/// Decodes one complete frame.
pub fn decode(frame: &[u8]) -> Result<WireMessage, WireError> {
    if frame.len() < 4 {
        return Err(WireError::Framing(format!(
            "truncated header: {} bytes",
            frame.len()
        )));
    }
    let len = u32::from_be_bytes([frame[0], frame[1], frame[2], frame[3]]) as usize;
    if len == 0 {
        return Err(WireError::Framing("empty body".into()));
    }
    let body = &frame[4..];
    if body.len() < len {
        return Err(WireError::Framing(format!(
            "truncated body: {} of {len} bytes",
            body.len()
        )));
    }
    if body.len() > len {
        return Err(WireError::Framing(format!(
            "{} trailing bytes",
            body.len() - len
        )));
    }
    decode_body(body)
}

/// Reads one frame body. `Ok(None)` is a clean end of stream.
///
/// Empty and oversized frames are consumed and reported as framing errors,
/// so the stream stays aligned for the next frame.
pub fn read_frame<R: Read>(reader: &mut R, max: usize) -> Result<Option<Vec<u8>>, WireError> {
    let mut header = [0u8; 4];
    let mut got = 0;
    while got < 4 {
        match reader.read(&mut header[got..]) {
            Ok(0) if got == 0 => return Ok(None),
            Ok(0) => return Err(WireError::Framing(format!("truncated header: {got} bytes"))),
            Ok(n) => got += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    let len = u32::from_be_bytes(header) as usize;
    if len == 0 {
        return Err(WireError::Framing("empty body".into()));
    }
    if len > max {
        let skipped = io::copy(&mut reader.take(len as u64), &mut io::sink())?;
        if skipped < len as u64 {
            return Err(WireError::Framing(format!(
                "truncated body: {skipped} of {len} bytes"
            )));
        }
        return Err(WireError::Framing(format!(
            "frame of {len} bytes exceeds {max}"
        )));
    }
    let mut body = vec![0u8; len];
    let mut filled = 0;
    while filled < len {
        match reader.read(&mut body[filled..]) {
            Ok(0) => {
                return Err(WireError::Framing(format!(
                    "truncated body: {filled} of {len} bytes"
                )))
            }
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(e.into()),
        }
    }
    Ok(Some(body))
}

pub fn write_message<W: Write>(writer: &mut W, msg: &WireMessage) -> Result<(), WireError> {
    writer.write_all(&encode(msg)?)?;
    writer.flush()?;
    Ok(())
}

/// describe → normalize → embed → retrieve → guard.
pub struct Pipeline {
    pub vlm: Arc<dyn VlmClient>,
    pub embedder: Arc<dyn Embedder>,
    pub normalization: Arc<NormalizationTable>,
    pub index: ScenarioIndex,
    pub retrieval: RetrievalConfig,
    pub limits: SafetyLimits,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Processed {
    /// Guarded payload.
    pub payload: ImpedancePayload,
    pub scene: NormalizedDescriptor,
    pub distance: f64,
    pub query_text: String,
}

#[derive(Debug, Error)]
pub enum PipelineError {
    #[error(transparent)]
    Perception(#[from] crate::perception::PerceptionError),
    #[error(transparent)]
    Embedding(#[from] crate::embedding::EmbeddingError),
    #[error(transparent)]
    Retrieval(#[from] crate::retrieval::RetrievalError),
}

impl Pipeline {
    pub fn known_stubs(&self) -> Option<std::collections::BTreeSet<String>> {
        self.vlm.known_stubs()
    }

    pub fn process(&self, query: &SceneQuery) -> Result<Processed, PipelineError> {
        let descriptor = match &query.source {
            SceneSource::Stub { name } => self.vlm.describe(&Frame::Stub(name.clone()))?,
            SceneSource::Descriptor { descriptor } => descriptor_from_value(descriptor)?,
            SceneSource::Image { bytes } => self.vlm.describe(&Frame::Image(bytes.clone()))?,
        };
        let scene = self.normalization.normalize(&descriptor);
        let query_text = crate::perception::to_query_text(&scene);
        let vector = self.embedder.embed(&query_text)?;
        let result = retrieve(&self.index, &vector, &self.retrieval)?;
        let raw = format_payload(&result, self.index.db(), &fallback_payload())?;
        let payload = apply_guards(&raw, &scene, query.separation_mm, &self.limits);
        Ok(Processed {
            payload,
            scene,
            distance: result.distance,
            query_text,
        })
    }

    /// The reply body for a query; failures become an error reply carrying
    /// the fallback profile.
    pub fn respond(&self, query: &SceneQuery) -> Body {
        match self.process(query) {
            Ok(p) => Body::PayloadReply(PayloadReply::new(
                &p.payload,
                Some(p.scene),
                Some(p.distance),
            )),
            Err(e) => {
                log::warn!("pipeline failed: {e}");
                Body::Error(ErrorReply {
                    message: e.to_string(),
                    fallback: PayloadReply::new(
                        &fallback_payload().with_reason(PayloadReason::Error),
                        None,
                        None,
                    ),
                })
            }
        }
    }
}

/// Per-query processing delay, adjustable while the server runs.
#[derive(Debug, Clone, Default)]
pub struct LatencyHandle(Arc<AtomicU64>);

impl LatencyHandle {
    pub fn new(latency: Duration) -> Self {
        let h = Self::default();
        h.set(latency);
        h
    }

    pub fn set(&self, latency: Duration) {
        self.0.store(latency.as_micros() as u64, Ordering::Relaxed);
    }

    pub fn get(&self) -> Duration {
        Duration::from_micros(self.0.load(Ordering::Relaxed))
    }
}

fn error_reply(sequence: u64, message: String) -> WireMessage {
    WireMessage {
        sequence,
        timestamp_ms: now_ms(),
        body: Body::Error(ErrorReply {
            message,
            fallback: PayloadReply::new(
                &fallback_payload().with_reason(PayloadReason::Error),
                None,
                None,
            ),
        }),
    }
}

fn send_locked(writer: &Mutex<TcpStream>, msg: &WireMessage) -> Result<(), WireError> {
    let mut w = writer.lock().unwrap_or_else(|e| e.into_inner());
    write_message(&mut *w, msg)
}

fn handle_connection(
    stream: TcpStream,
    pipeline: Arc<Pipeline>,
    latency: LatencyHandle,
    shutdown: Arc<AtomicBool>,
) {
    let peer = stream.peer_addr().ok();
    let writer = match stream.try_clone() {
        Ok(w) => Arc::new(Mutex::new(w)),
        Err(e) => {
            log::error!("cannot clone stream: {e}");
            return;
        }
    };
    let mut reader = io::BufReader::new(stream);
    while !shutdown.load(Ordering::Relaxed) {
        let frame = match read_frame(&mut reader, MAX_FRAME_BYTES) {
            Ok(Some(f)) => f,
            Ok(None) => break,
            Err(e) if e.is_recoverable() => {
                log::warn!("{peer:?}: {e}");
                if send_locked(&writer, &error_reply(0, e.to_string())).is_err() {
                    break;
                }
                continue;
            }
            Err(e) => {
                log::debug!("{peer:?}: closing: {e}");
                break;
            }
        };
        let msg = match decode_body(&frame) {
            Ok(m) => m,
            Err(e) => {
                log::warn!("{peer:?}: {e}");
                if send_locked(&writer, &error_reply(0, e.to_string())).is_err() {
                    break;
                }
                continue;
            }
        };
        match msg.body {
            Body::SceneQuery(query) => {
                // answered off the read loop so a slow query does not hold
                // up later ones
                let pipeline = Arc::clone(&pipeline);
                let writer = Arc::clone(&writer);
                let delay = latency.get();
                let sequence = msg.sequence;
                thread::spawn(move || {
                    if !delay.is_zero() {
                        thread::sleep(delay);
                    }
                    let reply = WireMessage {
                        sequence,
                        timestamp_ms: now_ms(),
                        body: pipeline.respond(&query),
                    };
                    if let Err(e) = send_locked(&writer, &reply) {
                        log::debug!("reply {sequence} not delivered: {e}");
                    }
                });
            }
            Body::Heartbeat => {
                let echo = WireMessage {
                    sequence: msg.sequence,
                    timestamp_ms: now_ms(),
                    body: Body::Heartbeat,
                };
                if send_locked(&writer, &echo).is_err() {
                    break;
                }
            }
            other => {
                let text = format!("unexpected {:?} from client", other.kind());
                if send_locked(&writer, &error_reply(msg.sequence, text)).is_err() {
                    break;
                }
            }
        }
    }
}

/// Accepts connections until `shutdown` is set. Each connection gets its own
/// handler thread; the pipeline is shared read-only.
pub fn server_loop(
    listener: TcpListener,
    pipeline: Arc<Pipeline>,
    latency: LatencyHandle,
    shutdown: Arc<AtomicBool>,
) -> io::Result<()> {
    listener.set_nonblocking(true)?;
    let mut open: Vec<(TcpStream, JoinHandle<()>)> = Vec::new();
    while !shutdown.load(Ordering::Relaxed) {
        match listener.accept() {
            Ok((stream, addr)) => {
                log::info!("connection from {addr}");
                stream.set_nonblocking(false)?;
                stream.set_nodelay(true)?;
                let handle = stream.try_clone()?;
                let (p, l, s) = (
                    Arc::clone(&pipeline),
                    latency.clone(),
                    Arc::clone(&shutdown),
                );
                open.push((
                    handle,
                    thread::spawn(move || handle_connection(stream, p, l, s)),
                ));
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(10))
            }
            Err(e) => return Err(e),
        }
        open.retain(|(_, h)| !h.is_finished());
    }
    for (stream, handle) in open {
        let _ = stream.shutdown(Shutdown::Both);
        let _ = handle.join();
    }
    Ok(())
}

/// A received payload with the scene it was chosen for.
#[derive(Debug, Clone, PartialEq)]
pub struct Delivered {
    pub sequence: u64,
    pub payload: ImpedancePayload,
    pub scene: Option<NormalizedDescriptor>,
}

impl Delivered {
    pub fn from_body(sequence: u64, body: &Body) -> Option<Result<Self, WireError>> {
        let (reply, scene) = match body {
            Body::PayloadReply(r) => (r, r.scene.clone()),
            Body::Error(e) => (&e.fallback, None),
            _ => return None,
        };
        Some(reply.payload().map(|payload| Self {
            sequence,
            payload,
            scene,
        }))
    }
}

/// Freshest payload, replaced atomically. Offers older than the current
/// one are discarded.
#[derive(Debug, Default)]
pub struct PayloadSlot(ArcSwapOption<Delivered>);

impl PayloadSlot {
    pub fn new() -> Self {
        Self::default()
    }

    /// Returns whether `d` became the current payload.
    pub fn offer(&self, d: Delivered) -> bool {
        let new = Arc::new(d);
        let mut accepted = false;
        self.0.rcu(|cur| match cur {
            Some(c) if c.sequence >= new.sequence => {
                accepted = false;
                Some(Arc::clone(c))
            }
            _ => {
                accepted = true;
                Some(Arc::clone(&new))
            }
        });
        accepted
    }

    pub fn load(&self) -> Option<Arc<Delivered>> {
        self.0.load_full()
    }

    /// Forgets the current payload; later offers with any sequence succeed.
    pub fn clear(&self) {
        self.0.store(None);
    }
}

/// Timing contract between streaming and control.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FreshnessPolicy {
    /// Payload age (s) after which the controller reverts to fallback.
    pub staleness_timeout: f64,
    /// Scene query rate, Hz.
    pub stream_rate: f64,
    /// Control loop rate, Hz.
    pub control_rate: f64,
    /// Heartbeat period, s.
    pub heartbeat_interval: f64,
}

impl Default for FreshnessPolicy {
    fn default() -> Self {
        Self {
            staleness_timeout: 3.0,
            stream_rate: 1.0,
            control_rate: 50.0,
            heartbeat_interval: 1.0,
        }
    }
}

const AGE_EPSILON: f64 = 1e-9;

/// Worst-case server latency the timeout must exceed, s.
pub const LATENCY_BUDGET: f64 = 1.4;

impl FreshnessPolicy {
    pub fn validate(&self) -> Result<(), String> {
        if !(self.staleness_timeout > LATENCY_BUDGET) {
            return Err(format!(
                "staleness_timeout {} must exceed the {LATENCY_BUDGET} s latency budget",
                self.staleness_timeout
            ));
        }
        if !(1.0..=2.0).contains(&self.stream_rate) {
            return Err(format!(
                "stream_rate {} outside [1, 2] Hz",
                self.stream_rate
            ));
        }
        if !(self.control_rate > 0.0 && self.control_rate.is_finite()) {
            return Err(format!(
                "control_rate {} must be positive",
                self.control_rate
            ));
        }
        if !(self.heartbeat_interval > 0.0) {
            return Err("heartbeat_interval must be positive".into());
        }
        Ok(())
    }

    pub fn dt(&self) -> f64 {
        1.0 / self.control_rate
    }
}

/// Onboard side of the link: watches payload freshness and feeds the gain
/// scheduler.
#[derive(Debug)]
pub struct OnboardState {
    slot: Arc<PayloadSlot>,
    scheduler: GainScheduler,
    policy: FreshnessPolicy,
    limits: SafetyLimits,
    separation_mm: Option<f64>,
    seen_sequence: Option<u64>,
    received_at: f64,
    last_now: Option<f64>,
}

impl OnboardState {
    /// Starts on the fallback profile.
    pub fn new(
        slot: Arc<PayloadSlot>,
        policy: FreshnessPolicy,
        limits: SafetyLimits,
        slew: f64,
    ) -> Self {
        Self {
            slot,
            scheduler: GainScheduler::new(fallback_payload(), slew),
            policy,
            limits,
            separation_mm: None,
            seen_sequence: None,
            received_at: f64::NEG_INFINITY,
            last_now: None,
        }
    }

    pub fn slot(&self) -> &Arc<PayloadSlot> {
        &self.slot
    }

    pub fn scheduler(&self) -> &GainScheduler {
        &self.scheduler
    }

    pub fn policy(&self) -> &FreshnessPolicy {
        &self.policy
    }

    /// Latest onboard separation measurement, mm.
    pub fn set_separation(&mut self, separation_mm: Option<f64>) {
        self.separation_mm = separation_mm;
    }

    /// Age of the newest payload at `now`, if one was ever received.
    pub fn payload_age(&self, now: f64) -> Option<f64> {
        self.seen_sequence.map(|_| now - self.received_at)
    }
}

/// One control-rate tick: the effective payload at time `now` (s).
///
/// Uses the freshest payload while it is younger than the staleness timeout
/// and the fallback profile otherwise; changes in either direction go
/// through the gain scheduler. Never blocks.
pub fn client_tick(state: &mut OnboardState, now: f64) -> ImpedancePayload {
    let latest = state.slot.load();
    if let Some(d) = &latest {
        if state.seen_sequence != Some(d.sequence) {
            state.seen_sequence = Some(d.sequence);
            state.received_at = now;
        }
    }
    // tick times are multiples of dt; absorb their rounding
    let fresh =
        latest.filter(|_| now - state.received_at < state.policy.staleness_timeout - AGE_EPSILON);
    let desired = match fresh {
        Some(d) => match &d.scene {
            Some(scene) => apply_guards(&d.payload, scene, state.separation_mm, &state.limits),
            None => d.payload.clone(),
        },
        None => fallback_payload(),
    };
    state.scheduler.set_target(desired);
    let dt = match state.last_now {
        Some(prev) => now - prev,
        None => state.policy.dt(),
    };
    state.last_now = Some(now);
    if dt > 0.0 {
        state.scheduler.step(dt)
    } else {
        state.scheduler.current()
    }
}

/// TCP client: a receiver thread fills the payload slot and a heartbeat
/// thread keeps the link observable. Sending never waits for replies.
pub struct Client {
    writer: Arc<Mutex<TcpStream>>,
    slot: Arc<PayloadSlot>,
    next_sequence: Arc<AtomicU64>,
    shutdown: Arc<AtomicBool>,
    last_heartbeat_ms: Arc<AtomicU64>,
    threads: Vec<JoinHandle<()>>,
}

impl Client {
    pub fn connect(addr: impl ToSocketAddrs, heartbeat: Duration) -> io::Result<Self> {
        let stream = TcpStream::connect(addr)?;
        Self::from_stream(stream, heartbeat, 1)
    }

    /// Connects with sequence numbers starting at `first_sequence`, so a
    /// reconnecting client keeps its numbering monotone.
    pub fn connect_from(
        addr: &SocketAddr,
        timeout: Duration,
        heartbeat: Duration,
        first_sequence: u64,
    ) -> io::Result<Self> {
        let stream = TcpStream::connect_timeout(addr, timeout)?;
        Self::from_stream(stream, heartbeat, first_sequence)
    }

    fn from_stream(
        stream: TcpStream,
        heartbeat: Duration,
        first_sequence: u64,
    ) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        let writer = Arc::new(Mutex::new(stream.try_clone()?));
        let slot = Arc::new(PayloadSlot::new());
        let next_sequence = Arc::new(AtomicU64::new(first_sequence.max(1)));
        let shutdown = Arc::new(AtomicBool::new(false));
        let last_heartbeat_ms = Arc::new(AtomicU64::new(0));

        let receiver = {
            let slot = Arc::clone(&slot);
            let shutdown = Arc::clone(&shutdown);
            let last_hb = Arc::clone(&last_heartbeat_ms);
            let mut reader = io::BufReader::new(stream);
            thread::spawn(move || {
                while !shutdown.load(Ordering::Relaxed) {
                    let frame = match read_frame(&mut reader, MAX_FRAME_BYTES) {
                        Ok(Some(f)) => f,
                        Ok(None) => break,
                        Err(e) if e.is_recoverable() => {
                            log::warn!("client: {e}");
                            continue;
                        }
                        Err(e) => {
                            log::debug!("client receiver stopping: {e}");
                            break;
                        }
                    };
                    let msg = match decode_body(&frame) {
                        Ok(m) => m,
                        Err(e) => {
                            log::warn!("client: {e}");
                            continue;
                        }
                    };
                    if msg.body == Body::Heartbeat {
                        last_hb.store(now_ms(), Ordering::Relaxed);
                        continue;
                    }
                    if let Body::Error(e) = &msg.body {
                        log::warn!("server error for query {}: {}", msg.sequence, e.message);
                    }
                    match Delivered::from_body(msg.sequence, &msg.body) {
                        Some(Ok(d)) => {
                            if !slot.offer(d) {
                                log::debug!("discarded stale reply {}", msg.sequence);
                            }
                        }
                        Some(Err(e)) => log::warn!("client: {e}"),
                        None => {}
                    }
                }
            })
        };

        let heartbeat_thread = {
            let writer = Arc::clone(&writer);
            let shutdown = Arc::clone(&shutdown);
            let seq = Arc::clone(&next_sequence);
            thread::spawn(move || {
                let tick = Duration::from_millis(20).min(heartbeat);
                let mut waited = Duration::ZERO;
                while !shutdown.load(Ordering::Relaxed) {
                    thread::sleep(tick);
                    waited += tick;
                    if waited < heartbeat {
                        continue;
                    }
                    waited = Duration::ZERO;
                    let msg = WireMessage {
                        sequence: seq.fetch_add(1, Ordering::Relaxed),
                        timestamp_ms: now_ms(),
                        body: Body::Heartbeat,
                    };
                    if send_locked(&writer, &msg).is_err() {
                        break;
                    }
                }
            })
        };

        Ok(Self {
            writer,
            slot,
            next_sequence,
            shutdown,
            last_heartbeat_ms,
            threads: vec![receiver, heartbeat_thread],
        })
    }

    /// Sends a scene query and returns its sequence number.
    pub fn send_query(&self, query: SceneQuery) -> Result<u64, WireError> {
        let sequence = self.next_sequence.fetch_add(1, Ordering::Relaxed);
        let msg = WireMessage {
            sequence,
            timestamp_ms: now_ms(),
            body: Body::SceneQuery(query),
        };
        send_locked(&self.writer, &msg)?;
        Ok(sequence)
    }

    pub fn slot(&self) -> Arc<PayloadSlot> {
        Arc::clone(&self.slot)
    }

    /// Sequence number the next message will carry.
    pub fn next_sequence(&self) -> u64 {
        self.next_sequence.load(Ordering::Relaxed)
    }

    /// Wall-clock ms of the last heartbeat echo, 0 if none yet.
    pub fn last_heartbeat_ms(&self) -> u64 {
        self.last_heartbeat_ms.load(Ordering::Relaxed)
    }

    pub fn close(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::Relaxed);
        if let Ok(w) = self.writer.lock() {
            let _ = w.shutdown(Shutdown::Both);
        }
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Client {
    fn drop(&mut self) {
        self.stop();
    }
}
