use std::collections::BTreeMap;
use std::fmt;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};

#[derive(Debug, Default)]
pub struct Counters {
    pub bytes_in: AtomicU64,
    pub bytes_out: AtomicU64,
    pub frames_out: AtomicU64,
    pub frames_in: AtomicU64,
    pub padding_bytes: AtomicU64,
    pub shaping_retries: AtomicU64,
    pub shaping_failures: AtomicU64,
    pub inbound_violations: AtomicU64,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CountersSnapshot {
    pub bytes_in: u64,
    pub bytes_out: u64,
    pub frames_out: u64,
    pub frames_in: u64,
    pub padding_bytes: u64,
    pub shaping_retries: u64,
    pub shaping_failures: u64,
    pub inbound_violations: u64,
}

impl Counters {
    pub fn snapshot(&self) -> CountersSnapshot {
        let get = |c: &AtomicU64| c.load(Ordering::Relaxed);
        CountersSnapshot {
            bytes_in: get(&self.bytes_in),
            bytes_out: get(&self.bytes_out),
            frames_out: get(&self.frames_out),
            frames_in: get(&self.frames_in),
            padding_bytes: get(&self.padding_bytes),
            shaping_retries: get(&self.shaping_retries),
            shaping_failures: get(&self.shaping_failures),
            inbound_violations: get(&self.inbound_violations),
        }
    }
}

impl fmt::Display for CountersSnapshot {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "bytes_in={} bytes_out={} frames_out={} frames_in={} padding_bytes={} \
             shaping_retries={} shaping_failures={} inbound_violations={}",
            self.bytes_in,
            self.bytes_out,
            self.frames_out,
            self.frames_in,
            self.padding_bytes,
            self.shaping_retries,
            self.shaping_failures,
            self.inbound_violations
        )
    }
}

/// Counter handle for one connection; every update also lands in the
/// endpoint-wide totals.
#[derive(Debug, Clone, Default)]
pub struct ConnStats {
    conn: Arc<Counters>,
    total: Arc<Counters>,
}

macro_rules! counter_fn {
    ($name:ident, $field:ident) => {
        pub fn $name(&self, n: u64) {
            self.conn.$field.fetch_add(n, Ordering::Relaxed);
            self.total.$field.fetch_add(n, Ordering::Relaxed);
        }
    };
}

impl ConnStats {
    counter_fn!(add_bytes_in, bytes_in);
    counter_fn!(add_bytes_out, bytes_out);
    counter_fn!(add_frames_out, frames_out);
    counter_fn!(add_frames_in, frames_in);
    counter_fn!(add_padding_bytes, padding_bytes);
    counter_fn!(add_shaping_retries, shaping_retries);
    counter_fn!(add_shaping_failures, shaping_failures);
    counter_fn!(add_inbound_violations, inbound_violations);

    pub fn snapshot(&self) -> CountersSnapshot {
        self.conn.snapshot()
    }
}

/// Endpoint-wide totals plus the counters of live connections.
#[derive(Debug, Default)]
pub struct EndpointStats {
    total: Arc<Counters>,
    live: Mutex<BTreeMap<u64, Arc<Counters>>>,
    next_id: AtomicU64,
}

impl EndpointStats {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    pub fn open_connection(&self) -> (u64, ConnStats) {
        let id = self.next_id.fetch_add(1, Ordering::Relaxed);
        let conn = Arc::new(Counters::default());
        self.live.lock().unwrap().insert(id, conn.clone());
        (
            id,
            ConnStats {
                conn,
                total: self.total.clone(),
            },
        )
    }

    pub fn close_connection(&self, id: u64) {
        self.live.lock().unwrap().remove(&id);
    }

    pub fn totals(&self) -> CountersSnapshot {
        self.total.snapshot()
    }

    /// One line for the totals followed by one per live connection.
    pub fn report_lines(&self) -> Vec<String> {
        let live = self.live.lock().unwrap();
        let mut lines = vec![format!("stats total live={} {}", live.len(), self.totals())];
        lines.extend(
            live.iter()
                .map(|(id, c)| format!("stats conn={id} {}", c.snapshot())),
        );
        lines
    }
}
