//! Streaming fusion centre over UDP using a subset of OSC 1.0 messages
//! (no bundles, no pattern matching).
//!
//! Wire formats, all big-endian and 4-byte aligned with zero padding:
//!
//! | address          | tags    | payload                                        |
//! |------------------|---------|------------------------------------------------|
//! | `/em/sensor`     | `,ifff` | sensor id, x, y, value in dB                    |
//! | `/em/field`      | `,iib`  | frame id, row, 49 × f32 predictive means        |
//! | `/em/field/var`  | `,iib`  | frame id, row, 49 × f32 predictive variances    |
//! | `/em/error`      | `,s`    | message                                         |
//! | `/em/stats`      | none    | query; answered to the sender with `,s` text    |
//!
//! Row `r` of the published grid holds the points with the `r`-th x value,
//! ordered by increasing y.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::net::{SocketAddr, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use crate::error::{Error, Result};
use crate::evalsel::fit_centered;
use crate::geometry::{Point, SensorArray};
use crate::gp::predict;
use crate::hyper_opt::{optimize, HyperPrior, OptimizeConfig};
use crate::kernels::KernelSpec;
use crate::meanfn::MeanSpec;

pub const SENSOR_ADDRESS: &str = "/em/sensor";
pub const FIELD_ADDRESS: &str = "/em/field";
pub const FIELD_VAR_ADDRESS: &str = "/em/field/var";
pub const ERROR_ADDRESS: &str = "/em/error";
pub const STATS_ADDRESS: &str = "/em/stats";

pub const DEFAULT_PARTIAL_TIMEOUT: Duration = Duration::from_millis(250);
pub const DEFAULT_QUORUM: usize = 5;

#[derive(Debug, Clone, PartialEq)]
pub enum OscArg {
    Int(i32),
    Float(f32),
    Str(String),
    Blob(Vec<u8>),
}

impl OscArg {
    fn tag(&self) -> char {
        match self {
            OscArg::Int(_) => 'i',
            OscArg::Float(_) => 'f',
            OscArg::Str(_) => 's',
            OscArg::Blob(_) => 'b',
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct OscMessage {
    pub address: String,
    pub args: Vec<OscArg>,
}

impl OscMessage {
    pub fn new(address: impl Into<String>, args: Vec<OscArg>) -> Self {
        OscMessage { address: address.into(), args }
    }

    pub fn type_tags(&self) -> String {
        std::iter::once(',').chain(self.args.iter().map(OscArg::tag)).collect()
    }
}

fn pad4(buf: &mut Vec<u8>) {
    while buf.len() % 4 != 0 {
        buf.push(0);
    }
}

fn push_str(buf: &mut Vec<u8>, s: &str) {
    buf.extend_from_slice(s.as_bytes());
    buf.push(0);
    pad4(buf);
}

pub fn encode(msg: &OscMessage) -> Vec<u8> {
    let mut buf = Vec::with_capacity(64);
    push_str(&mut buf, &msg.address);
    push_str(&mut buf, &msg.type_tags());
    for a in &msg.args {
        match a {
            OscArg::Int(v) => buf.extend_from_slice(&v.to_be_bytes()),
            OscArg::Float(v) => buf.extend_from_slice(&v.to_be_bytes()),
            OscArg::Str(s) => push_str(&mut buf, s),
            OscArg::Blob(b) => {
                buf.extend_from_slice(&(b.len() as i32).to_be_bytes());
                buf.extend_from_slice(b);
                pad4(&mut buf);
            }
        }
    }
    buf
}

struct Cursor<'a> {
    data: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.data.len() - self.pos < n {
            return Err(Error::Protocol(format!("truncated {what} at byte {}", self.pos)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn padding(&mut self, what: &str) -> Result<()> {
        while self.pos % 4 != 0 {
            if self.take(1, what)?[0] != 0 {
                return Err(Error::Protocol(format!("non-zero padding after {what}")));
            }
        }
        Ok(())
    }

    fn string(&mut self, what: &str) -> Result<String> {
        let rest = &self.data[self.pos..];
        let end = rest
            .iter()
            .position(|&b| b == 0)
            .ok_or_else(|| Error::Protocol(format!("unterminated {what}")))?;
        let s = std::str::from_utf8(&rest[..end]).map_err(|_| Error::Protocol(format!("{what} is not UTF-8")))?;
        self.pos += end + 1;
        self.padding(what)?;
        Ok(s.to_string())
    }

    fn word(&mut self, what: &str) -> Result<[u8; 4]> {
        Ok(self.take(4, what)?.try_into().expect("4 bytes"))
    }
}

/// Parses one OSC message. Bundles and unknown type tags are errors.
pub fn decode(data: &[u8]) -> Result<OscMessage> {
    if data.len() % 4 != 0 {
        return Err(Error::Protocol(format!("datagram length {} is not a multiple of 4", data.len())));
    }
    let mut c = Cursor { data, pos: 0 };
    let address = c.string("address")?;
    if !address.starts_with('/') {
        return Err(Error::Protocol(format!("address '{address}' does not start with '/'")));
    }
    let mut args = Vec::new();
    if c.pos == data.len() {
        return Ok(OscMessage { address, args });
    }
    let tags = c.string("type tag")?;
    let Some(tags) = tags.strip_prefix(',') else {
        return Err(Error::Protocol(format!("type tag '{tags}' does not start with ','")));
    };
    for t in tags.chars() {
        args.push(match t {
            'i' => OscArg::Int(i32::from_be_bytes(c.word("int32")?)),
            'f' => OscArg::Float(f32::from_be_bytes(c.word("float32")?)),
            's' => OscArg::Str(c.string("string argument")?),
            'b' => {
                let n = i32::from_be_bytes(c.word("blob size")?);
                let n = usize::try_from(n).map_err(|_| Error::Protocol("negative blob size".into()))?;
                let b = c.take(n, "blob")?.to_vec();
                c.padding("blob")?;
                OscArg::Blob(b)
            }
            other => return Err(Error::Protocol(format!("unsupported type tag '{other}'"))),
        });
    }
    if c.pos != data.len() {
        return Err(Error::Protocol(format!("{} trailing bytes", data.len() - c.pos)));
    }
    Ok(OscMessage { address, args })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SensorReading {
    pub sensor_id: i32,
    pub x: f64,
    pub y: f64,
    pub value_db: f64,
    pub recv_time: Instant,
}

pub fn encode_reading(sensor_id: i32, x: f32, y: f32, value_db: f32) -> Vec<u8> {
    encode(&OscMessage::new(
        SENSOR_ADDRESS,
        vec![OscArg::Int(sensor_id), OscArg::Float(x), OscArg::Float(y), OscArg::Float(value_db)],
    ))
}

/// What became of one datagram.
#[derive(Debug, Clone, PartialEq)]
pub enum Inbound {
    Reading(SensorReading),
    StatsQuery,
    /// Well-formed, but for another address.
    Ignored(String),
    /// Well-formed reading for an unknown sensor or with a non-finite value.
    Rejected(String),
}

/// Decodes a datagram. Malformed messages and sensor messages with the
/// wrong type tags are protocol errors.
pub fn decode_reading(data: &[u8], sensors: &SensorArray, now: Instant) -> Result<Inbound> {
    let msg = decode(data)?;
    if msg.address == STATS_ADDRESS {
        return Ok(Inbound::StatsQuery);
    }
    if msg.address != SENSOR_ADDRESS {
        return Ok(Inbound::Ignored(msg.address));
    }
    let [OscArg::Int(id), OscArg::Float(x), OscArg::Float(y), OscArg::Float(v)] = msg.args[..] else {
        return Err(Error::Protocol(format!("{SENSOR_ADDRESS} expects ,ifff, got {}", msg.type_tags())));
    };
    if !sensors.ids.contains(&id) {
        return Ok(Inbound::Rejected(format!("unknown sensor id {id}")));
    }
    if ![x, y, v].iter().all(|f| f.is_finite()) {
        return Ok(Inbound::Rejected(format!("sensor {id}: non-finite field")));
    }
    Ok(Inbound::Reading(SensorReading {
        sensor_id: id,
        x: x as f64,
        y: y as f64,
        value_db: v as f64,
        recv_time: now,
    }))
}

#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub frame_id: u64,
    pub readings: BTreeMap<i32, SensorReading>,
    pub complete: bool,
}

impl Frame {
    /// Locations and values in sensor-id order.
    pub fn observations(&self) -> (Vec<Point<f64>>, Vec<f64>) {
        self.readings.values().map(|r| (Point::new(r.x, r.y), r.value_db)).unzip()
    }
}

/// Groups readings into frames. A frame is emitted when every sensor has
/// reported, or when it has been open for `timeout` with at least `quorum`
/// readings. A repeated sensor id closes the open frame (emitting it if it
/// has a quorum) and starts the next one.
#[derive(Debug)]
pub struct FrameAssembler {
    sensor_ids: Vec<i32>,
    quorum: usize,
    timeout: Duration,
    next_id: u64,
    open: BTreeMap<i32, SensorReading>,
    opened_at: Option<Instant>,
    pub dropped: u64,
}

impl FrameAssembler {
    pub fn new(sensors: &SensorArray, quorum: usize, timeout: Duration) -> Self {
        FrameAssembler {
            sensor_ids: sensors.ids.clone(),
            quorum: quorum.min(sensors.len()).max(1),
            timeout,
            next_id: 1,
            open: BTreeMap::new(),
            opened_at: None,
            dropped: 0,
        }
    }

    fn close(&mut self) -> Option<Frame> {
        let readings = std::mem::take(&mut self.open);
        self.opened_at = None;
        if readings.is_empty() {
            return None;
        }
        if readings.len() < self.quorum {
            self.dropped += 1;
            return None;
        }
        let complete = readings.len() == self.sensor_ids.len();
        let frame = Frame { frame_id: self.next_id, readings, complete };
        self.next_id += 1;
        Some(frame)
    }

    pub fn push(&mut self, r: SensorReading) -> Vec<Frame> {
        let mut out = Vec::new();
        if self.open.contains_key(&r.sensor_id) {
            out.extend(self.close());
        }
        if self.open.is_empty() {
            self.opened_at = Some(r.recv_time);
        }
        self.open.insert(r.sensor_id, r);
        if self.open.len() == self.sensor_ids.len() {
            out.extend(self.close());
        }
        out
    }

    /// Closes the open frame if its timeout has passed.
    pub fn poll(&mut self, now: Instant) -> Option<Frame> {
        match self.opened_at {
            Some(t) if now.duration_since(t) >= self.timeout => self.close(),
            _ => None,
        }
    }

    pub fn pending(&self) -> usize {
        self.open.len()
    }

    /// Time until the open frame times out.
    pub fn until_deadline(&self, now: Instant) -> Option<Duration> {
        self.opened_at.map(|t| self.timeout.saturating_sub(now.duration_since(t)))
    }
}

/// Everything needed to turn a frame into a published grid.
#[derive(Debug, Clone)]
pub struct FieldEngine {
    pub kernel: KernelSpec<f64>,
    pub mean: MeanSpec<f64>,
    pub grid: Vec<Point<f64>>,
    /// Number of grid rows (distinct x values).
    pub rows: usize,
    pub center: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct FieldGrid {
    pub mean: Vec<f32>,
    pub variance: Vec<f32>,
}

impl FieldEngine {
    pub fn new(kernel: KernelSpec<f64>, mean: MeanSpec<f64>, grid: Vec<Point<f64>>, rows: usize, center: bool) -> Result<Self> {
        if rows == 0 || grid.len() % rows != 0 {
            return Err(Error::Config(format!("{} grid points do not split into {rows} rows", grid.len())));
        }
        Ok(FieldEngine { kernel, mean, grid, rows, center })
    }

    pub fn cols(&self) -> usize {
        self.grid.len() / self.rows
    }

    /// Conditions on the frame and predicts the grid, as f32.
    pub fn predict_frame(&self, frame: &Frame) -> Result<FieldGrid> {
        let (x, y) = frame.observations();
        let cm = fit_centered(&x, &y, &self.kernel, &self.mean, self.center)?;
        let p = predict(&cm.model, &self.grid, false, false);
        Ok(FieldGrid {
            mean: p.mean.iter().map(|m| (m + cm.offset) as f32).collect(),
            variance: p.variance.iter().map(|&v| v as f32).collect(),
        })
    }

    /// Re-learns the kernel hyperparameters from the frame's readings.
    pub fn refit(&mut self, frame: &Frame, prior: &HyperPrior, cfg: &OptimizeConfig) -> Result<()> {
        let (x, y) = frame.observations();
        let offset = if self.center { y.iter().sum::<f64>() / y.len() as f64 } else { 0.0 };
        let yc: Vec<f64> = y.iter().map(|v| v - offset).collect();
        let r = optimize(&x, &yc, self.kernel.family, &self.mean, prior, cfg)?;
        self.kernel = r.kernel();
        Ok(())
    }
}

/// The `/em/field` (and optionally `/em/field/var`) messages for one frame.
pub fn field_messages(frame_id: u64, grid: &FieldGrid, cols: usize, with_variance: bool) -> Vec<Vec<u8>> {
    let rows = grid.mean.len() / cols;
    let blob = |v: &[f32]| -> Vec<u8> { v.iter().flat_map(|f| f.to_be_bytes()).collect() };
    let mut out = Vec::with_capacity(rows * (1 + usize::from(with_variance)));
    let mut streams = vec![(FIELD_ADDRESS, &grid.mean)];
    if with_variance {
        streams.push((FIELD_VAR_ADDRESS, &grid.variance));
    }
    for (addr, values) in streams {
        for r in 0..rows {
            out.push(encode(&OscMessage::new(
                addr,
                vec![
                    OscArg::Int(frame_id as i32),
                    OscArg::Int(r as i32),
                    OscArg::Blob(blob(&values[r * cols..(r + 1) * cols])),
                ],
            )));
        }
    }
    out
}

#[derive(Debug, Default)]
pub struct ServerStats {
    pub datagrams: AtomicU64,
    pub readings: AtomicU64,
    pub ignored: AtomicU64,
    pub malformed: AtomicU64,
    pub rejected: AtomicU64,
    pub frames_dropped: AtomicU64,
    pub frames_published: AtomicU64,
    pub frames_failed: AtomicU64,
    pub frames_superseded: AtomicU64,
    pub refits: AtomicU64,
}

impl ServerStats {
    pub fn snapshot(&self) -> BTreeMap<&'static str, u64> {
        let g = |a: &AtomicU64| a.load(Ordering::SeqCst);
        BTreeMap::from([
            ("datagrams", g(&self.datagrams)),
            ("readings", g(&self.readings)),
            ("ignored", g(&self.ignored)),
            ("malformed", g(&self.malformed)),
            ("rejected", g(&self.rejected)),
            ("frames_dropped", g(&self.frames_dropped)),
            ("frames_published", g(&self.frames_published)),
            ("frames_failed", g(&self.frames_failed)),
            ("frames_superseded", g(&self.frames_superseded)),
            ("refits", g(&self.refits)),
        ])
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for (k, v) in self.snapshot() {
            let _ = writeln!(s, "{k} = {v}");
        }
        s
    }
}

#[derive(Debug, Clone)]
pub enum ServeMode {
    PredictOnly,
    /// Re-learn hyperparameters from incoming frames, at most once per
    /// `interval`.
    RefitOnFrame { interval: Duration, prior: HyperPrior, optimizer: OptimizeConfig },
}

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub listen: SocketAddr,
    pub publish: SocketAddr,
    pub sensors: SensorArray,
    pub mode: ServeMode,
    pub publish_variance: bool,
    pub partial_timeout: Duration,
    pub quorum: usize,
}

impl ServeConfig {
    pub fn new(listen: SocketAddr, publish: SocketAddr) -> Self {
        ServeConfig {
            listen,
            publish,
            sensors: SensorArray::default(),
            mode: ServeMode::PredictOnly,
            publish_variance: false,
            partial_timeout: DEFAULT_PARTIAL_TIMEOUT,
            quorum: DEFAULT_QUORUM,
        }
    }
}

pub struct ServerHandle {
    pub local_addr: SocketAddr,
    pub stats: Arc<ServerStats>,
    shutdown: Arc<AtomicBool>,
    threads: Vec<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn is_running(&self) -> bool {
        !self.shutdown.load(Ordering::SeqCst)
    }

    /// Stops receiving, lets the worker finish frames already handed to it,
    /// and joins both threads.
    pub fn shutdown(mut self) {
        self.stop();
    }

    /// Blocks until another handle clone or signal stops the server.
    pub fn wait(mut self) {
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }

    pub fn shutdown_flag(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }

    fn stop(&mut self) {
        self.shutdown.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

const RECV_POLL: Duration = Duration::from_millis(10);

/// Binds the listen socket and starts the receiver and prediction threads.
pub fn serve(engine: FieldEngine, cfg: ServeConfig) -> Result<ServerHandle> {
    if cfg.sensors.is_empty() {
        return Err(Error::Config("no sensors configured".into()));
    }
    let rx_sock = UdpSocket::bind(cfg.listen)
        .map_err(|e| Error::Config(format!("cannot bind listen address {}: {e}", cfg.listen)))?;
    rx_sock.set_read_timeout(Some(RECV_POLL))?;
    let local_addr = rx_sock.local_addr()?;
    let tx_bind: SocketAddr = if cfg.publish.is_ipv4() { "0.0.0.0:0" } else { "[::]:0" }.parse().expect("literal");
    let tx_sock = UdpSocket::bind(tx_bind)?;

    let stats = Arc::new(ServerStats::default());
    let shutdown = Arc::new(AtomicBool::new(false));
    let (frames_tx, frames_rx) = mpsc::channel::<Frame>();

    let receiver = {
        let stats = stats.clone();
        let shutdown = shutdown.clone();
        let cfg = cfg.clone();
        std::thread::Builder::new().name("em-recv".into()).spawn(move || {
            receive_loop(rx_sock, &cfg, &stats, &shutdown, frames_tx);
        })?
    };
    let worker = {
        let stats = stats.clone();
        std::thread::Builder::new().name("em-predict".into()).spawn(move || {
            predict_loop(engine, &cfg, tx_sock, &stats, frames_rx);
        })?
    };
    Ok(ServerHandle { local_addr, stats, shutdown, threads: vec![receiver, worker] })
}

fn receive_loop(
    sock: UdpSocket,
    cfg: &ServeConfig,
    stats: &ServerStats,
    shutdown: &AtomicBool,
    frames: mpsc::Sender<Frame>,
) {
    let mut asm = FrameAssembler::new(&cfg.sensors, cfg.quorum, cfg.partial_timeout);
    let mut buf = vec![0u8; 65536];
    let emit = |f: Frame, asm: &FrameAssembler| {
        stats.frames_dropped.store(asm.dropped, Ordering::SeqCst);
        let _ = frames.send(f);
    };
    while !shutdown.load(Ordering::SeqCst) {
        match sock.recv_from(&mut buf) {
            Ok((n, from)) => {
                stats.datagrams.fetch_add(1, Ordering::SeqCst);
                match decode_reading(&buf[..n], &cfg.sensors, Instant::now()) {
                    Ok(Inbound::Reading(r)) => {
                        stats.readings.fetch_add(1, Ordering::SeqCst);
                        for f in asm.push(r) {
                            emit(f, &asm);
                        }
                    }
                    Ok(Inbound::StatsQuery) => {
                        let reply = encode(&OscMessage::new(STATS_ADDRESS, vec![OscArg::Str(stats.to_text())]));
                        let _ = sock.send_to(&reply, from);
                    }
                    Ok(Inbound::Ignored(addr)) => {
                        log::debug!("ignored message for {addr}");
                        stats.ignored.fetch_add(1, Ordering::SeqCst);
                    }
                    Ok(Inbound::Rejected(why)) => {
                        log::debug!("rejected reading: {why}");
                        stats.rejected.fetch_add(1, Ordering::SeqCst);
                    }
                    Err(e) => {
                        log::debug!("malformed datagram: {e}");
                        stats.malformed.fetch_add(1, Ordering::SeqCst);
                    }
                }
            }
            Err(e) if matches!(e.kind(), std::io::ErrorKind::WouldBlock | std::io::ErrorKind::TimedOut) => {}
            Err(e) => log::warn!("receive failed: {e}"),
        }
        if let Some(f) = asm.poll(Instant::now()) {
            emit(f, &asm);
        }
        stats.frames_dropped.store(asm.dropped, Ordering::SeqCst);
    }
}

fn predict_loop(
    mut engine: FieldEngine,
    cfg: &ServeConfig,
    sock: UdpSocket,
    stats: &ServerStats,
    frames: mpsc::Receiver<Frame>,
) {
    let mut last_refit: Option<Instant> = None;
    while let Ok(mut frame) = frames.recv() {
        // Newest wins: skip frames that queued up behind a slow prediction.
        while let Ok(newer) = frames.try_recv() {
            stats.frames_superseded.fetch_add(1, Ordering::SeqCst);
            frame = newer;
        }
        if let ServeMode::RefitOnFrame { interval, prior, optimizer } = &cfg.mode {
            if last_refit.is_none_or(|t| t.elapsed() >= *interval) {
                last_refit = Some(Instant::now());
                match engine.refit(&frame, prior, optimizer) {
                    Ok(()) => {
                        stats.refits.fetch_add(1, Ordering::SeqCst);
                    }
                    Err(e) => log::warn!("refit on frame {} failed: {e}", frame.frame_id),
                }
            }
        }
        match engine.predict_frame(&frame) {
            Ok(grid) => {
                for msg in field_messages(frame.frame_id, &grid, engine.cols(), cfg.publish_variance) {
                    if let Err(e) = sock.send_to(&msg, cfg.publish) {
                        log::warn!("publish failed: {e}");
                    }
                }
                stats.frames_published.fetch_add(1, Ordering::SeqCst);
            }
            Err(e) => {
                stats.frames_failed.fetch_add(1, Ordering::SeqCst);
                let text = format!("frame {}: {e}", frame.frame_id);
                let _ = sock.send_to(&encode(&OscMessage::new(ERROR_ADDRESS, vec![OscArg::Str(text)])), cfg.publish);
            }
        }
    }
}
