//! Live operator server. One acceptor; per-connection reader feeding a
//! bounded ordered queue; a single sim loop owns the session; each
//! connection's writer publishes telemetry snapshots at a fixed rate.

use std::future::Future;
use std::io;
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant, SystemTime, UNIX_EPOCH};

use futures_util::stream::{SplitSink, SplitStream};
use futures_util::{SinkExt, StreamExt};
use teleimp_core::scenario::Scenario;
use tokio::io::{AsyncBufReadExt, AsyncReadExt, AsyncWriteExt, BufReader};
use tokio::net::tcp::{OwnedReadHalf, OwnedWriteHalf};
use tokio::net::{TcpListener, TcpStream};
use tokio::sync::{broadcast, mpsc, watch};
use tokio_tungstenite::tungstenite::protocol::WebSocketConfig;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::WebSocketStream;

use crate::protocol::{decode_client, encode, ErrorCode, ServerMessage, Telemetry};
use crate::queue::CommandQueue;
use crate::session::{Applied, Session, SessionError};

/// Environment variable holding the host to bind; defaults to loopback.
pub const BIND_ENV: &str = "TELEIMP_BIND";
pub const DEFAULT_PORT: u16 = 8765;
/// Longest accepted frame (bytes).
pub const MAX_FRAME: usize = 1 << 20;
/// Wall-clock period of the sim loop.
const TICK: Duration = Duration::from_millis(2);
/// Steps the loop may run in one tick before dropping behind real time.
const MAX_CATCHUP: u32 = 200;
/// How long a new connection may stay silent before it is taken as NDJSON.
const SNIFF_WINDOW: Duration = Duration::from_millis(200);
const HAPTIC_EPS: f64 = 0.01;
const BARS_EPS: f64 = 0.001;

#[derive(Debug, Clone)]
pub struct ServeConfig {
    pub scenario: Scenario,
    /// Telemetry publication rate (Hz).
    pub telemetry_rate: f64,
    /// Directory receiving one episode file per engagement.
    pub log_dir: PathBuf,
    pub queue_capacity: usize,
    /// Simulated seconds per wall-clock second.
    pub speed: f64,
}

impl ServeConfig {
    pub fn new(scenario: Scenario, log_dir: PathBuf) -> Self {
        Self {
            telemetry_rate: scenario.episode.telemetry_rate,
            scenario,
            log_dir,
            queue_capacity: 256,
            speed: 1.0,
        }
    }
}

/// Host from `TELEIMP_BIND` (or loopback) paired with `port`.
pub fn bind_address(port: u16) -> (String, u16) {
    let host = std::env::var(BIND_ENV).unwrap_or_else(|_| "127.0.0.1".into());
    (host, port)
}

enum Control {
    Connected,
    Disconnected,
}

struct Shared {
    queue: Mutex<CommandQueue>,
    operator: AtomicBool,
    telemetry: watch::Receiver<Telemetry>,
    events: broadcast::Sender<ServerMessage>,
    control: mpsc::UnboundedSender<Control>,
    period: Duration,
}

/// Binds from the environment and serves until ctrl-c.
pub async fn serve(port: u16, cfg: ServeConfig) -> anyhow::Result<()> {
    let listener = TcpListener::bind(bind_address(port)).await?;
    tracing::info!("listening on {}", listener.local_addr()?);
    serve_on(listener, cfg, async {
        let _ = tokio::signal::ctrl_c().await;
    })
    .await
}

/// Serves on an already bound listener until `shutdown` resolves; the active
/// episode file is finalized before returning.
pub async fn serve_on(
    listener: TcpListener,
    cfg: ServeConfig,
    shutdown: impl Future<Output = ()>,
) -> anyhow::Result<()> {
    anyhow::ensure!(
        cfg.telemetry_rate > 0.0 && cfg.telemetry_rate.is_finite(),
        "telemetry rate must be positive"
    );
    anyhow::ensure!(
        cfg.speed > 0.0 && cfg.speed.is_finite(),
        "speed must be positive"
    );
    std::fs::create_dir_all(&cfg.log_dir)?;
    let session = Session::new(cfg.scenario)?;
    let (tele_tx, tele_rx) = watch::channel(session.telemetry());
    let (events, _) = broadcast::channel(256);
    let (control_tx, control_rx) = mpsc::unbounded_channel();
    let shared = Arc::new(Shared {
        queue: Mutex::new(CommandQueue::new(cfg.queue_capacity)),
        operator: AtomicBool::new(false),
        telemetry: tele_rx,
        events,
        control: control_tx,
        period: Duration::from_secs_f64(1.0 / cfg.telemetry_rate),
    });
    let (stop_tx, stop_rx) = watch::channel(false);
    let mut sim =
        tokio::spawn(SimLoop::new(session, cfg, shared.clone(), tele_tx).run(control_rx, stop_rx));

    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            res = &mut sim => return res?,
            accepted = listener.accept() => match accepted {
                Ok((stream, peer)) => {
                    let shared = shared.clone();
                    tokio::spawn(async move {
                        if let Err(e) = handle_connection(stream, shared).await {
                            tracing::debug!(%peer, "connection ended: {e}");
                        }
                    });
                }
                Err(e) => tracing::warn!("accept failed: {e}"),
            },
        }
    }
    let _ = stop_tx.send(true);
    sim.await?
}

struct SimLoop {
    session: Session,
    cfg: ServeConfig,
    shared: Arc<Shared>,
    telemetry: watch::Sender<Telemetry>,
    episodes: u64,
    last_haptic: f64,
    last_bars: (f64, f64),
}

fn wall_time() -> f64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0.0, |d| d.as_secs_f64())
}

impl SimLoop {
    fn new(
        session: Session,
        cfg: ServeConfig,
        shared: Arc<Shared>,
        telemetry: watch::Sender<Telemetry>,
    ) -> Self {
        Self {
            session,
            cfg,
            shared,
            telemetry,
            episodes: 0,
            last_haptic: f64::NAN,
            last_bars: (f64::NAN, f64::NAN),
        }
    }

    async fn run(
        mut self,
        mut control: mpsc::UnboundedReceiver<Control>,
        mut stop: watch::Receiver<bool>,
    ) -> anyhow::Result<()> {
        let mut interval = tokio::time::interval(TICK);
        interval.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
        let dt = self.cfg.scenario.sim.dt;
        let mut origin = (Instant::now(), self.session.t());
        loop {
            tokio::select! {
                _ = interval.tick() => {}
                _ = stop.changed() => break,
            }
            self.apply_queued()?;
            while let Ok(c) = control.try_recv() {
                self.apply_queued()?;
                match c {
                    Control::Connected => {
                        if self.session.status().success {
                            self.session = Session::new(self.cfg.scenario)?;
                            origin = (Instant::now(), self.session.t());
                        }
                        self.last_haptic = f64::NAN;
                        self.last_bars = (f64::NAN, f64::NAN);
                    }
                    Control::Disconnected => {
                        if self.session.teleop().engaged() {
                            self.session
                                .apply(&crate::protocol::ClientMessage::TeleopToggle)
                                .ok();
                        }
                        self.finish_episode("operator left")?;
                        self.shared.operator.store(false, Ordering::Release);
                    }
                }
            }
            let target = origin.1 + origin.0.elapsed().as_secs_f64() * self.cfg.speed;
            let mut steps = 0;
            while self.session.t() + 0.5 * dt < target {
                if steps == MAX_CATCHUP {
                    tracing::warn!("sim loop behind real time; skipping ahead");
                    origin = (Instant::now(), self.session.t());
                    break;
                }
                self.session.step()?;
                steps += 1;
                if self.session.status().success && self.session.is_recording() {
                    self.finish_episode("success")?;
                }
            }
            self.publish();
        }
        self.finish_episode("shutdown")?;
        Ok(())
    }

    fn apply_queued(&mut self) -> Result<(), SessionError> {
        let msgs: Vec<_> = self
            .shared
            .queue
            .lock()
            .expect("queue lock")
            .drain()
            .collect();
        for msg in msgs {
            match self.session.apply(&msg) {
                Ok(Applied::Engaged) => self.start_episode()?,
                Ok(Applied::Disengaged) => self.finish_episode("disengaged")?,
                Ok(Applied::Nothing) => {}
                Err(r) => {
                    let _ = self
                        .shared
                        .events
                        .send(ServerMessage::error(ErrorCode::Rejected, r.to_string()));
                }
            }
        }
        Ok(())
    }

    fn start_episode(&mut self) -> Result<(), SessionError> {
        self.episodes += 1;
        let wall = wall_time();
        let id = format!("ep-{}-{:04}", (wall * 1e3) as u64, self.episodes);
        let path = self.cfg.log_dir.join(format!("{id}.jsonl"));
        let file = std::fs::File::create(&path)
            .map_err(|e| SessionError::Config(format!("{}: {e}", path.display())))?;
        self.session
            .start_recording(Box::new(file), id, Some(wall))?;
        tracing::info!("recording {}", path.display());
        Ok(())
    }

    fn finish_episode(&mut self, why: &str) -> Result<(), SessionError> {
        if let Some(records) = self.session.stop_recording()? {
            tracing::info!(records, "episode finalized: {why}");
        }
        Ok(())
    }

    fn publish(&mut self) {
        self.telemetry.send_replace(self.session.telemetry());
        let amp = self.session.haptic_amplitude();
        if changed(amp, self.last_haptic, HAPTIC_EPS) {
            self.last_haptic = amp;
            let _ = self
                .shared
                .events
                .send(ServerMessage::Haptic { amplitude: amp });
        }
        let bars = self.session.bars();
        if changed(bars.0, self.last_bars.0, BARS_EPS)
            || changed(bars.1, self.last_bars.1, BARS_EPS)
        {
            self.last_bars = bars;
            let _ = self.shared.events.send(ServerMessage::Bars {
                kt_frac: bars.0,
                kr_frac: bars.1,
            });
        }
    }
}

/// Change worth publishing for a value in [0, 1]; reaching either end always is.
fn changed(new: f64, last: f64, eps: f64) -> bool {
    !((new - last).abs() <= eps) || (new != last && (new == 0.0 || new == 1.0))
}

enum FrameReader {
    Ws(SplitStream<WebSocketStream<TcpStream>>),
    Lines(BufReader<OwnedReadHalf>),
}

enum FrameWriter {
    Ws(SplitSink<WebSocketStream<TcpStream>, Message>),
    Lines(OwnedWriteHalf),
}

enum Frame {
    Text(String),
    Invalid(String),
}

impl FrameReader {
    async fn next(&mut self) -> io::Result<Option<Frame>> {
        match self {
            FrameReader::Ws(ws) => loop {
                return match ws.next().await {
                    None => Ok(None),
                    Some(Err(e)) => Err(io::Error::other(e)),
                    Some(Ok(Message::Text(text))) => {
                        Ok(Some(Frame::Text(text.as_str().to_owned())))
                    }
                    Some(Ok(Message::Binary(_))) => Ok(Some(Frame::Invalid(
                        "binary frames are not accepted".into(),
                    ))),
                    Some(Ok(Message::Close(_))) => Ok(None),
                    Some(Ok(_)) => continue,
                };
            },
            FrameReader::Lines(reader) => {
                let mut buf = Vec::new();
                let n = (&mut *reader)
                    .take(MAX_FRAME as u64 + 1)
                    .read_until(b'\n', &mut buf)
                    .await?;
                if n == 0 {
                    return Ok(None);
                }
                if buf.last() != Some(&b'\n') && buf.len() > MAX_FRAME {
                    skip_line(reader).await?;
                    return Ok(Some(Frame::Invalid(format!(
                        "frame longer than {MAX_FRAME} bytes"
                    ))));
                }
                match String::from_utf8(buf) {
                    Ok(s) => Ok(Some(Frame::Text(s))),
                    Err(_) => Ok(Some(Frame::Invalid("frame is not UTF-8".into()))),
                }
            }
        }
    }
}

/// Discards input up to and including the next newline.
async fn skip_line(reader: &mut BufReader<OwnedReadHalf>) -> io::Result<()> {
    loop {
        let chunk = reader.fill_buf().await?;
        if chunk.is_empty() {
            return Ok(());
        }
        match chunk.iter().position(|b| *b == b'\n') {
            Some(i) => {
                reader.consume(i + 1);
                return Ok(());
            }
            None => {
                let n = chunk.len();
                reader.consume(n);
            }
        }
    }
}

impl FrameWriter {
    async fn send(&mut self, text: String) -> io::Result<()> {
        match self {
            FrameWriter::Ws(ws) => ws.send(Message::text(text)).await.map_err(io::Error::other),
            FrameWriter::Lines(w) => {
                let mut line = text.into_bytes();
                line.push(b'\n');
                w.write_all(&line).await
            }
        }
    }

    async fn close(mut self) {
        match &mut self {
            FrameWriter::Ws(ws) => {
                let _ = ws.close().await;
            }
            FrameWriter::Lines(w) => {
                let _ = w.shutdown().await;
            }
        }
    }
}

/// WebSocket if the client opens with an HTTP request, otherwise NDJSON. A
/// client that stays silent past `SNIFF_WINDOW` is taken as NDJSON.
async fn open_transport(stream: TcpStream) -> io::Result<(FrameReader, FrameWriter)> {
    stream.set_nodelay(true)?;
    let mut first = [0u8; 1];
    let n = match tokio::time::timeout(SNIFF_WINDOW, stream.peek(&mut first)).await {
        Ok(peeked) => peeked?,
        Err(_) => 0,
    };
    if n == 1 && first[0] == b'G' {
        let config = WebSocketConfig::default()
            .max_message_size(Some(MAX_FRAME))
            .max_frame_size(Some(MAX_FRAME));
        let ws = tokio_tungstenite::accept_async_with_config(stream, Some(config))
            .await
            .map_err(io::Error::other)?;
        let (sink, stream) = ws.split();
        Ok((FrameReader::Ws(stream), FrameWriter::Ws(sink)))
    } else {
        let (r, w) = stream.into_split();
        Ok((FrameReader::Lines(BufReader::new(r)), FrameWriter::Lines(w)))
    }
}

static CONNECTIONS: AtomicU64 = AtomicU64::new(0);

async fn handle_connection(stream: TcpStream, shared: Arc<Shared>) -> io::Result<()> {
    let (mut reader, mut writer) = open_transport(stream).await?;
    if shared
        .operator
        .compare_exchange(false, true, Ordering::AcqRel, Ordering::Acquire)
        .is_err()
    {
        writer
            .send(encode(&ServerMessage::error(
                ErrorCode::Busy,
                "another operator is connected",
            )))
            .await?;
        writer.close().await;
        return Ok(());
    }
    let id = CONNECTIONS.fetch_add(1, Ordering::Relaxed);
    tracing::info!(id, "operator connected");
    let events = shared.events.subscribe();
    let _ = shared.control.send(Control::Connected);
    let (reply_tx, reply_rx) = mpsc::channel(64);
    let publisher = tokio::spawn(write_loop(
        writer,
        reply_rx,
        shared.telemetry.clone(),
        events,
        shared.period,
    ));

    let result = read_loop(&mut reader, &shared, &reply_tx).await;
    drop(reply_tx);
    let _ = publisher.await;
    // the sim loop releases the operator slot once it has handled this
    let _ = shared.control.send(Control::Disconnected);
    tracing::info!(id, "operator disconnected");
    result
}

async fn read_loop(
    reader: &mut FrameReader,
    shared: &Shared,
    replies: &mpsc::Sender<ServerMessage>,
) -> io::Result<()> {
    while let Some(frame) = reader.next().await? {
        let text = match frame {
            Frame::Text(t) => t,
            Frame::Invalid(detail) => {
                let _ = replies
                    .send(ServerMessage::error(ErrorCode::Parse, detail))
                    .await;
                continue;
            }
        };
        let text = text.trim();
        if text.is_empty() {
            continue;
        }
        match decode_client(text) {
            Ok(decoded) => {
                for w in &decoded.warnings {
                    tracing::debug!("{}: {w}", decoded.msg.kind());
                }
                if let Some(dropped) = shared.queue.lock().expect("queue lock").push(decoded.msg) {
                    tracing::debug!("queue full, dropped {}", dropped.kind());
                }
            }
            Err(e) => {
                let _ = replies
                    .send(ServerMessage::error(ErrorCode::Parse, e.detail))
                    .await;
            }
        }
    }
    Ok(())
}

async fn write_loop(
    mut writer: FrameWriter,
    mut replies: mpsc::Receiver<ServerMessage>,
    telemetry: watch::Receiver<Telemetry>,
    mut events: broadcast::Receiver<ServerMessage>,
    period: Duration,
) {
    let mut ticker = tokio::time::interval(period);
    ticker.set_missed_tick_behavior(tokio::time::MissedTickBehavior::Delay);
    loop {
        let msg = tokio::select! {
            biased;
            reply = replies.recv() => match reply {
                Some(m) => m,
                None => break,
            },
            event = events.recv() => match event {
                Ok(m) => m,
                Err(broadcast::error::RecvError::Lagged(n)) => {
                    tracing::debug!("publisher lagged by {n} events");
                    continue;
                }
                Err(broadcast::error::RecvError::Closed) => break,
            },
            _ = ticker.tick() => ServerMessage::Telemetry(*telemetry.borrow()),
        };
        if writer.send(encode(&msg)).await.is_err() {
            break;
        }
    }
    writer.close().await;
}
