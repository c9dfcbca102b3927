//! TCP tunnel endpoints.
//!
//! A CLIENT endpoint accepts local connections (typically from the user's
//! encrypted proxy), dials the SERVER endpoint and shapes the local stream
//! into frames. The SERVER endpoint accepts tunnel connections, dials the
//! forward destination and de-shapes. Replies travel the mirror path, so both
//! directions are shaped, each with its own constraint set and packet
//! ordinals. Every proxied connection gets its own tunnel connection.

mod pump;
mod stats;

use std::future::Future;
use std::io;
use std::path::PathBuf;
use std::sync::Arc;
use std::time::Duration;

use log::{debug, info, warn};
use thiserror::Error;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinSet;

pub use pump::{
    pump_deshape_direction, pump_shaped_direction, FrameCapture, PumpHooks, PumpSummary,
    CONNECT_TIMEOUT,
};
pub use stats::{ConnStats, Counters, CountersSnapshot, EndpointStats};

use crate::clock::MonotonicClock;
use crate::constraint::ConstraintSet;
use crate::framing::FrameError;
use crate::shaper::{ShapeError, Shaper, ShaperConfig};
use crate::timer::{QueueError, TimingPolicy};

#[derive(Debug, Error)]
pub enum ProxyError {
    #[error("cannot bind {addr}: {source}")]
    BindFailure { addr: String, source: io::Error },
    #[error("peer {addr} unreachable: {reason}")]
    PeerUnreachable { addr: String, reason: String },
    #[error("invalid endpoint configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Shape(#[from] ShapeError),
    #[error(transparent)]
    Frame(#[from] FrameError),
    #[error(transparent)]
    Queue(#[from] QueueError),
    #[error("stream ended inside a frame ({residual} bytes buffered)")]
    TruncatedFrame { residual: usize },
    #[error(transparent)]
    Io(#[from] io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Client,
    Server,
}

#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub role: Role,
    pub listen_address: String,
    /// Peer endpoint for CLIENT, forward destination for SERVER.
    pub remote_address: String,
    /// Constraints this endpoint shapes its outgoing tunnel stream with.
    pub outbound_constraints: ConstraintSet,
    /// Constraints the peer is expected to honour; received frames are audited.
    pub inbound_constraints: ConstraintSet,
    pub timing: TimingPolicy,
    pub shaper: ShaperConfig,
    /// Frames sent into the tunnel go to `<path>.<connection id>`.
    pub capture_frames: Option<PathBuf>,
    pub stats_interval: Option<Duration>,
    pub seed: Option<u64>,
}

impl ProxyConfig {
    pub fn new(role: Role, listen_address: impl Into<String>, remote: impl Into<String>) -> Self {
        Self {
            role,
            listen_address: listen_address.into(),
            remote_address: remote.into(),
            outbound_constraints: ConstraintSet::default(),
            inbound_constraints: ConstraintSet::default(),
            timing: TimingPolicy::default(),
            shaper: ShaperConfig::default(),
            capture_frames: None,
            stats_interval: None,
            seed: None,
        }
    }

    pub fn validate(&self) -> Result<(), ProxyError> {
        for addr in [&self.listen_address, &self.remote_address] {
            let well_formed = addr
                .rsplit_once(':')
                .is_some_and(|(host, port)| !host.is_empty() && port.parse::<u16>().is_ok());
            if !well_formed {
                return Err(ProxyError::InvalidConfig(format!(
                    "`{addr}` is not a host:port address"
                )));
            }
        }
        if self.listen_address == self.remote_address {
            return Err(ProxyError::InvalidConfig(
                "remote address equals listen address".into(),
            ));
        }
        self.shaper.validate()?;
        self.timing
            .validate(self.shaper.max_frame_len)
            .map_err(|e| ProxyError::InvalidConfig(e.to_string()))
    }
}

/// Binds `config.listen_address` and serves until `shutdown` resolves.
pub async fn run_endpoint<F>(config: ProxyConfig, shutdown: F) -> Result<(), ProxyError>
where
    F: Future<Output = ()>,
{
    config.validate()?;
    let listener = TcpListener::bind(&config.listen_address)
        .await
        .map_err(|source| ProxyError::BindFailure {
            addr: config.listen_address.clone(),
            source,
        })?;
    serve(listener, config, EndpointStats::new(), shutdown).await
}

/// Serves connections from an already bound listener. Connection failures are
/// logged and never stop the endpoint; open connections are aborted when
/// `shutdown` resolves.
pub async fn serve<F>(
    listener: TcpListener,
    config: ProxyConfig,
    stats: Arc<EndpointStats>,
    shutdown: F,
) -> Result<(), ProxyError>
where
    F: Future<Output = ()>,
{
    config.validate()?;
    let shaper = Arc::new(Shaper::new(
        config.outbound_constraints.clone(),
        config.shaper.clone(),
    )?);
    let config = Arc::new(config);
    info!(
        "{:?} endpoint listening on {} -> {}",
        config.role,
        listener.local_addr()?,
        config.remote_address
    );

    let mut connections = JoinSet::new();
    let mut ticker = config.stats_interval.map(tokio::time::interval);
    tokio::pin!(shutdown);
    loop {
        tokio::select! {
            _ = &mut shutdown => break,
            accepted = listener.accept() => {
                let (stream, addr) = match accepted {
                    Ok(a) => a,
                    Err(e) => {
                        warn!("accept failed: {e}");
                        continue;
                    }
                };
                let (id, conn_stats) = stats.open_connection();
                debug!("connection {id} from {addr}");
                let (config, shaper, stats) = (config.clone(), shaper.clone(), stats.clone());
                connections.spawn(async move {
                    match handle_connection(stream, id, &config, &shaper, conn_stats.clone()).await {
                        Ok(()) => info!("connection {id} closed: {}", conn_stats.snapshot()),
                        Err(e) => warn!("connection {id} aborted: {e}"),
                    }
                    stats.close_connection(id);
                });
            }
            _ = async { ticker.as_mut().unwrap().tick().await }, if ticker.is_some() => {
                for line in stats.report_lines() {
                    info!("{line}");
                }
            }
            Some(_) = connections.join_next(), if !connections.is_empty() => {}
        }
    }
    connections.shutdown().await;
    Ok(())
}

async fn connect(addr: &str) -> Result<TcpStream, ProxyError> {
    let unreachable = |reason: String| ProxyError::PeerUnreachable {
        addr: addr.to_string(),
        reason,
    };
    let stream = tokio::time::timeout(CONNECT_TIMEOUT, TcpStream::connect(addr))
        .await
        .map_err(|_| unreachable("connect timed out".into()))?
        .map_err(|e| unreachable(e.to_string()))?;
    stream.set_nodelay(true)?;
    Ok(stream)
}

async fn handle_connection(
    accepted: TcpStream,
    id: u64,
    config: &ProxyConfig,
    shaper: &Shaper,
    stats: ConnStats,
) -> Result<(), ProxyError> {
    accepted.set_nodelay(true)?;
    let dialed = connect(&config.remote_address).await?;
    // `plain` carries unshaped bytes, `tunnel` carries frames.
    let (plain, tunnel) = match config.role {
        Role::Client => (accepted, dialed),
        Role::Server => (dialed, accepted),
    };
    let (plain_rd, plain_wr) = plain.into_split();
    let (tunnel_rd, tunnel_wr) = tunnel.into_split();

    let capture = match &config.capture_frames {
        Some(path) => {
            let mut name = path.clone().into_os_string();
            name.push(format!(".{id}"));
            Some(FrameCapture::create_file(&PathBuf::from(name))?)
        }
        None => None,
    };
    let hooks = PumpHooks {
        stats: stats.clone(),
        capture,
        seed: config.seed.map(|s| s.wrapping_add(id)),
    };
    let clock = MonotonicClock::new();
    let shaped = pump_shaped_direction(plain_rd, tunnel_wr, shaper, &config.timing, &clock, &hooks);
    let deshaped = pump_deshape_direction(
        tunnel_rd,
        plain_wr,
        Some(&config.inbound_constraints),
        &stats,
    );
    let (sent, received) = tokio::try_join!(shaped, deshaped)?;
    debug!(
        "connection {id}: shaped {} bytes into {} frames, recovered {} bytes from {} frames",
        sent.bytes, sent.frames, received.bytes, received.frames
    );
    Ok(())
}
