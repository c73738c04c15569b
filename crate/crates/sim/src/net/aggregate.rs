//! Collects publish streams into one append-only CSV.
//!
//! Every flush re-reads the registry file, so an operator can swap it while
//! the aggregator runs. Parent and child columns always come from the
//! registry in force at flush time. A record from a module the registry does
//! not know keeps empty topology columns and counts as a warning.

use std::fs;
use std::io;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use vmc_core::topology::{ModuleId, TopologyGraph};

use crate::fabric::child_ids;
use crate::net::publish::Subscription;
use crate::telemetry::{CsvLog, TelemetryError, TelemetryRecord};

/// Synchronous part of the aggregator: registry join and CSV output.
pub struct Collector {
    log: CsvLog,
    registry_path: Option<PathBuf>,
    registry: Option<TopologyGraph>,
    unknown: u64,
    registry_errors: u64,
}

impl Collector {
    pub fn open(csv: &Path, registry_path: Option<PathBuf>) -> Result<Self, TelemetryError> {
        Ok(Collector { log: CsvLog::open(csv)?, registry_path, registry: None, unknown: 0, registry_errors: 0 })
    }

    /// Reloads the registry file. A missing or malformed file keeps the
    /// previous registry.
    pub fn reload_registry(&mut self) {
        let Some(path) = &self.registry_path else { return };
        match fs::read_to_string(path) {
            Ok(text) => match TopologyGraph::registry_import(&text) {
                Ok(g) => self.registry = Some(g),
                Err(e) => {
                    self.registry_errors += 1;
                    log::warn!("registry {}: {e}; keeping previous", path.display());
                }
            },
            Err(e) => {
                self.registry_errors += 1;
                log::warn!("registry {}: {e}; keeping previous", path.display());
            }
        }
    }

    pub fn set_registry(&mut self, graph: TopologyGraph) {
        self.registry = Some(graph);
    }

    /// Replaces the topology columns of `record` from the registry.
    /// Without any registry configured the record passes through as is.
    pub fn join(&mut self, mut record: TelemetryRecord) -> TelemetryRecord {
        if self.registry.is_none() && self.registry_path.is_none() {
            return record;
        }
        let known = self
            .registry
            .as_ref()
            .and_then(|g| ModuleId::new(record.module.clone()).ok().filter(|id| g.contains(id)).map(|id| (g, id)));
        match known {
            Some((g, id)) => {
                record.parent_ids = g.parents_of(&id).into_iter().map(|(_, s)| s.to_string()).collect();
                record.child_ids = child_ids(g, &id);
            }
            None => {
                self.unknown += 1;
                log::warn!("module {} is not in the registry", record.module);
                record.parent_ids.clear();
                record.child_ids.clear();
            }
        }
        record
    }

    /// Joins and appends a batch ordered by timestamp. An empty batch leaves
    /// the file untouched.
    pub fn flush(&mut self, mut batch: Vec<TelemetryRecord>) -> Result<usize, TelemetryError> {
        if batch.is_empty() {
            return Ok(0);
        }
        self.reload_registry();
        batch.sort_by(|a, b| (a.ts, &a.module, a.iter).cmp(&(b.ts, &b.module, b.iter)));
        let n = batch.len();
        for r in batch {
            let r = self.join(r);
            self.log.append(&r)?;
        }
        self.log.flush()?;
        Ok(n)
    }

    /// Records whose module was missing from the registry.
    pub fn unknown_modules(&self) -> u64 {
        self.unknown
    }

    pub fn registry_errors(&self) -> u64 {
        self.registry_errors
    }

    pub fn rows(&self) -> u64 {
        self.log.rows()
    }
}

#[derive(Debug, Clone)]
pub struct AggregatorConfig {
    pub sources: Vec<SocketAddr>,
    pub csv: PathBuf,
    pub registry: Option<PathBuf>,
    pub cadence: Duration,
}

impl AggregatorConfig {
    pub fn new(sources: Vec<SocketAddr>, csv: impl Into<PathBuf>) -> Self {
        AggregatorConfig { sources, csv: csv.into(), registry: None, cadence: Duration::from_secs(1) }
    }
}

#[derive(Debug, Default)]
pub struct AggregatorStats {
    pub rows: AtomicU64,
    pub flushes: AtomicU64,
    pub unknown_modules: AtomicU64,
    pub bad_lines: AtomicU64,
}

pub struct Aggregator {
    stop: Arc<AtomicBool>,
    stats: Arc<AggregatorStats>,
    threads: Vec<JoinHandle<()>>,
}

impl Aggregator {
    pub fn spawn(config: AggregatorConfig) -> Result<Aggregator, TelemetryError> {
        let mut collector = Collector::open(&config.csv, config.registry.clone())?;
        collector.reload_registry();
        let stop = Arc::new(AtomicBool::new(false));
        let stats = Arc::new(AggregatorStats::default());
        let (tx, rx) = mpsc::channel();
        let mut threads = Vec::new();
        for addr in &config.sources {
            let (addr, tx, stop, stats) = (*addr, tx.clone(), stop.clone(), stats.clone());
            threads.push(
                thread::Builder::new()
                    .name(format!("aggregate-{addr}"))
                    .spawn(move || read_source(addr, tx, stop, stats))?,
            );
        }
        drop(tx);
        let (flag, st) = (stop.clone(), stats.clone());
        threads.push(
            thread::Builder::new()
                .name("aggregate-flush".into())
                .spawn(move || flush_loop(collector, rx, config.cadence, flag, st))?,
        );
        Ok(Aggregator { stop, stats, threads })
    }

    pub fn stats(&self) -> &AggregatorStats {
        &self.stats
    }

    /// Stops reading, flushes what arrived and joins every thread.
    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Aggregator {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn read_source(addr: SocketAddr, tx: Sender<TelemetryRecord>, stop: Arc<AtomicBool>, stats: Arc<AggregatorStats>) {
    while !stop.load(Ordering::SeqCst) {
        let Ok(mut sub) = Subscription::connect(addr) else {
            thread::sleep(Duration::from_millis(100));
            continue;
        };
        let _ = sub.set_read_timeout(Some(Duration::from_millis(100)));
        loop {
            if stop.load(Ordering::SeqCst) {
                return;
            }
            match sub.next_line() {
                Ok(Some(line)) => match TelemetryRecord::from_json_line(&line) {
                    Ok(r) => {
                        if tx.send(r).is_err() {
                            return;
                        }
                    }
                    Err(e) => {
                        stats.bad_lines.fetch_add(1, Ordering::Relaxed);
                        log::warn!("{addr}: dropping line: {e}");
                    }
                },
                Ok(None) => break,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(_) => break,
            }
        }
    }
}

fn flush_loop(
    mut collector: Collector,
    rx: Receiver<TelemetryRecord>,
    cadence: Duration,
    stop: Arc<AtomicBool>,
    stats: Arc<AggregatorStats>,
) {
    let mut batch = Vec::new();
    let mut due = Instant::now() + cadence;
    loop {
        let stopping = stop.load(Ordering::SeqCst);
        let wait = due.saturating_duration_since(Instant::now()).min(Duration::from_millis(50));
        match rx.recv_timeout(wait) {
            Ok(r) => batch.push(r),
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => {
                if !stopping {
                    thread::sleep(wait);
                }
            }
        }
        if Instant::now() >= due || stopping {
            batch.extend(rx.try_iter());
            match collector.flush(std::mem::take(&mut batch)) {
                Ok(n) => {
                    stats.rows.fetch_add(n as u64, Ordering::Relaxed);
                    stats.flushes.fetch_add(1, Ordering::Relaxed);
                }
                Err(e) => log::error!("aggregate flush failed: {e}"),
            }
            stats.unknown_modules.store(collector.unknown_modules(), Ordering::Relaxed);
            due = Instant::now() + cadence;
            if stopping {
                return;
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::telemetry::{read_csv, sim_epoch, SlotTelemetry};

    fn rec(module: &str, t: i64) -> TelemetryRecord {
        TelemetryRecord {
            ts: sim_epoch() + chrono::Duration::seconds(t),
            module: module.into(),
            iter: t as u64,
            r_in: 0.5,
            r_gen: 0.0,
            s_out: 0.1,
            slots: vec![SlotTelemetry { s: 0.0, v: 0.01, r: 0.25, live: false, light: 0.3, upright: 1.0 }; 2],
            parent_ids: vec!["stale".into()],
            child_ids: vec![],
        }
    }

    #[test]
    fn joins_registry_and_counts_unknown_modules() {
        let dir = tempfile::tempdir().unwrap();
        let reg = dir.path().join("registry.txt");
        fs::write(&reg, "module RPN1 level=0\nmodule RPN2 level=1\nRPN1.2 -> RPN2\n").unwrap();
        let csv = dir.path().join("agg.csv");
        let mut c = Collector::open(&csv, Some(reg.clone())).unwrap();
        assert_eq!(c.flush(vec![rec("RPN2", 2), rec("RPN1", 1), rec("RPN7", 3)]).unwrap(), 3);
        let rows = read_csv(&csv).unwrap();
        assert_eq!(rows.iter().map(|r| r.module.as_str()).collect::<Vec<_>>(), ["RPN1", "RPN2", "RPN7"]);
        assert_eq!(rows[0].child_ids, ["2:RPN2"]);
        assert_eq!(rows[1].parent_ids, ["RPN1.2"]);
        assert!(rows[2].parent_ids.is_empty());
        assert_eq!(c.unknown_modules(), 1);

        // A broken registry keeps the last good one.
        fs::write(&reg, "RPN1.9 -> RPN2\n").unwrap();
        c.flush(vec![rec("RPN2", 4)]).unwrap();
        assert_eq!(read_csv(&csv).unwrap()[3].parent_ids, ["RPN1.2"]);
        assert_eq!(c.registry_errors(), 1);
    }

    #[test]
    fn empty_flush_leaves_file_unchanged() {
        let dir = tempfile::tempdir().unwrap();
        let csv = dir.path().join("agg.csv");
        let mut c = Collector::open(&csv, None).unwrap();
        c.flush(vec![rec("RPN1", 1)]).unwrap();
        let before = fs::read(&csv).unwrap();
        assert_eq!(c.flush(vec![]).unwrap(), 0);
        assert_eq!(fs::read(&csv).unwrap(), before);
    }
}
