//! Telemetry publish stream: newline-delimited JSON over TCP.
//!
//! `publish` never blocks on the network. Lines wait in a bounded buffer
//! until a writer thread hands them to every connected subscriber; with no
//! subscriber, or a slow one, the oldest lines are dropped beyond
//! [`BUFFER_CAPACITY`].

use std::collections::VecDeque;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::telemetry::{TelemetryError, TelemetryRecord};

pub const BUFFER_CAPACITY: usize = 1000;

const POLL: Duration = Duration::from_millis(20);

struct Inner {
    buffer: Mutex<VecDeque<String>>,
    ready: Condvar,
    subscribers: Mutex<Vec<TcpStream>>,
    capacity: usize,
    published: AtomicU64,
    dropped: AtomicU64,
    sent: AtomicU64,
    stop: AtomicBool,
}

pub struct Publisher {
    inner: Arc<Inner>,
    addr: SocketAddr,
    threads: Vec<JoinHandle<()>>,
}

impl Publisher {
    pub fn bind(addr: impl ToSocketAddrs) -> io::Result<Publisher> {
        Self::bind_with_capacity(addr, BUFFER_CAPACITY)
    }

    pub fn bind_with_capacity(addr: impl ToSocketAddrs, capacity: usize) -> io::Result<Publisher> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let inner = Arc::new(Inner {
            buffer: Mutex::new(VecDeque::with_capacity(capacity)),
            ready: Condvar::new(),
            subscribers: Mutex::new(Vec::new()),
            capacity: capacity.max(1),
            published: AtomicU64::new(0),
            dropped: AtomicU64::new(0),
            sent: AtomicU64::new(0),
            stop: AtomicBool::new(false),
        });
        let accept = {
            let inner = inner.clone();
            thread::Builder::new().name("publish-accept".into()).spawn(move || accept_loop(listener, inner))?
        };
        let writer = {
            let inner = inner.clone();
            thread::Builder::new().name("publish-write".into()).spawn(move || write_loop(inner))?
        };
        Ok(Publisher { inner, addr, threads: vec![accept, writer] })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn publish(&self, record: &TelemetryRecord) {
        self.publish_line(record.to_json_line());
    }

    /// Queues one line (without its newline) for all subscribers.
    pub fn publish_line(&self, line: String) {
        let mut buf = self.inner.buffer.lock().expect("publisher buffer");
        if buf.len() == self.inner.capacity {
            buf.pop_front();
            self.inner.dropped.fetch_add(1, Ordering::Relaxed);
        }
        buf.push_back(line);
        self.inner.published.fetch_add(1, Ordering::Relaxed);
        self.inner.ready.notify_one();
    }

    pub fn published(&self) -> u64 {
        self.inner.published.load(Ordering::Relaxed)
    }

    /// Lines evicted from a full buffer.
    pub fn dropped(&self) -> u64 {
        self.inner.dropped.load(Ordering::Relaxed)
    }

    /// Lines handed to at least one subscriber.
    pub fn sent(&self) -> u64 {
        self.inner.sent.load(Ordering::Relaxed)
    }

    pub fn buffered(&self) -> usize {
        self.inner.buffer.lock().expect("publisher buffer").len()
    }

    pub fn subscriber_count(&self) -> usize {
        self.inner.subscribers.lock().expect("subscribers").len()
    }

    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.inner.stop.store(true, Ordering::SeqCst);
        self.inner.ready.notify_all();
        for t in self.threads.drain(..) {
            let _ = t.join();
        }
    }
}

impl Drop for Publisher {
    fn drop(&mut self) {
        self.stop();
    }
}

fn accept_loop(listener: TcpListener, inner: Arc<Inner>) {
    while !inner.stop.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                let _ = stream.set_nonblocking(false);
                let _ = stream.set_nodelay(true);
                let _ = stream.set_write_timeout(Some(Duration::from_secs(1)));
                inner.subscribers.lock().expect("subscribers").push(stream);
                inner.ready.notify_one();
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
            Err(e) => {
                log::warn!("publish accept failed: {e}");
                thread::sleep(POLL);
            }
        }
    }
}

fn write_loop(inner: Arc<Inner>) {
    loop {
        let batch: Vec<String> = {
            let mut buf = inner.buffer.lock().expect("publisher buffer");
            loop {
                if inner.stop.load(Ordering::SeqCst) {
                    return;
                }
                let has_subscribers = !inner.subscribers.lock().expect("subscribers").is_empty();
                if !buf.is_empty() && has_subscribers {
                    break;
                }
                buf = inner.ready.wait_timeout(buf, POLL).expect("publisher buffer").0;
            }
            buf.drain(..).collect()
        };
        let mut payload = String::with_capacity(batch.iter().map(|l| l.len() + 1).sum());
        for line in &batch {
            payload.push_str(line);
            payload.push('\n');
        }
        let mut subs = inner.subscribers.lock().expect("subscribers");
        subs.retain_mut(|s| s.write_all(payload.as_bytes()).and_then(|_| s.flush()).is_ok());
        if !subs.is_empty() {
            inner.sent.fetch_add(batch.len() as u64, Ordering::Relaxed);
        }
    }
}

/// A client of a publish stream.
pub struct Subscription {
    reader: BufReader<TcpStream>,
}

impl Subscription {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<Subscription> {
        let stream = TcpStream::connect(addr)?;
        Ok(Subscription { reader: BufReader::new(stream) })
    }

    /// Retries the connection until it succeeds or `attempts` run out.
    pub fn connect_retry(addr: SocketAddr, attempts: u32, pause: Duration) -> io::Result<Subscription> {
        let mut last = None;
        for _ in 0..attempts.max(1) {
            match Self::connect(addr) {
                Ok(s) => return Ok(s),
                Err(e) => last = Some(e),
            }
            thread::sleep(pause);
        }
        Err(last.expect("one attempt"))
    }

    pub fn set_read_timeout(&self, timeout: Option<Duration>) -> io::Result<()> {
        self.reader.get_ref().set_read_timeout(timeout)
    }

    /// Next raw line; `None` at end of stream.
    pub fn next_line(&mut self) -> io::Result<Option<String>> {
        let mut line = String::new();
        if self.reader.read_line(&mut line)? == 0 {
            return Ok(None);
        }
        while line.ends_with('\n') || line.ends_with('\r') {
            line.pop();
        }
        Ok(Some(line))
    }

    pub fn next_record(&mut self) -> Result<Option<TelemetryRecord>, TelemetryError> {
        match self.next_line()? {
            Some(line) => TelemetryRecord::from_json_line(&line).map(Some),
            None => Ok(None),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::time::Instant;

    fn wait_for(mut f: impl FnMut() -> bool) {
        let start = Instant::now();
        while !f() {
            assert!(start.elapsed() < Duration::from_secs(5), "timed out");
            thread::sleep(Duration::from_millis(5));
        }
    }

    #[test]
    fn buffer_drops_oldest_without_subscribers() {
        let p = Publisher::bind_with_capacity("127.0.0.1:0", 10).unwrap();
        let start = Instant::now();
        for i in 0..25 {
            p.publish_line(format!("{{\"n\":{i}}}"));
        }
        assert!(start.elapsed() < Duration::from_millis(200));
        assert_eq!(p.buffered(), 10);
        assert_eq!(p.dropped(), 15);
        let mut sub = Subscription::connect(p.local_addr()).unwrap();
        assert_eq!(sub.next_line().unwrap().unwrap(), "{\"n\":15}");
    }

    #[test]
    fn subscriber_receives_lines_in_order() {
        let p = Publisher::bind("127.0.0.1:0").unwrap();
        let mut sub = Subscription::connect(p.local_addr()).unwrap();
        wait_for(|| p.subscriber_count() == 1);
        for i in 0..100 {
            p.publish_line(format!("line {i}"));
        }
        for i in 0..100 {
            assert_eq!(sub.next_line().unwrap().unwrap(), format!("line {i}"));
        }
        assert_eq!(p.dropped(), 0);
    }
}
