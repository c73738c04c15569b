//! WebSocket gateway for browser consoles.
//!
//! Every telemetry line from an upstream publish stream goes out to every
//! connected WebSocket client as one text message. Text messages from a
//! client are command lines; when a command stream is configured they are
//! forwarded to it and the ack comes back as a text message, otherwise the
//! gateway answers with a `read_only` rejection.

use std::io;
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, Sender};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use tungstenite::{Message, WebSocket};

use crate::command::{Ack, Rejection};
use crate::net::control::CommandClient;
use crate::net::publish::Subscription;

const POLL: Duration = Duration::from_millis(20);

type Clients = Arc<Mutex<Vec<Sender<String>>>>;

pub struct Gateway {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    forwarded: Arc<AtomicU64>,
    clients: Clients,
    threads: Vec<JoinHandle<()>>,
}

impl Gateway {
    pub fn spawn(addr: impl ToSocketAddrs, telemetry: SocketAddr, commands: Option<SocketAddr>) -> io::Result<Gateway> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let forwarded = Arc::new(AtomicU64::new(0));
        let clients: Clients = Arc::new(Mutex::new(Vec::new()));

        let upstream = {
            let (stop, clients, forwarded) = (stop.clone(), clients.clone(), forwarded.clone());
            thread::Builder::new()
                .name("gateway-upstream".into())
                .spawn(move || relay_upstream(telemetry, clients, stop, forwarded))?
        };
        let accept = {
            let (stop, clients) = (stop.clone(), clients.clone());
            thread::Builder::new().name("gateway-accept".into()).spawn(move || {
                while !stop.load(Ordering::SeqCst) {
                    match listener.accept() {
                        Ok((stream, _)) => {
                            let (tx, rx) = mpsc::channel();
                            clients.lock().expect("clients").push(tx);
                            let stop = stop.clone();
                            let _ = thread::Builder::new()
                                .name("gateway-client".into())
                                .spawn(move || serve_client(stream, rx, commands, stop));
                        }
                        Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(POLL),
                        Err(e) => {
                            log::warn!("gateway accept failed: {e}");
                            thread::sleep(POLL);
                        }
                    }
                }
            })?
        };
        Ok(Gateway { addr, stop, forwarded, clients, threads: vec![upstream, accept] })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Telemetry lines received from upstream.
    pub fn forwarded(&self) -> u64 {
        self.forwarded.load(Ordering::Relaxed)
    }

    pub fn client_count(&self) -> usize {
        self.clients.lock().expect("clients").len()
    }

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

impl Drop for Gateway {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn relay_upstream(addr: SocketAddr, clients: Clients, stop: Arc<AtomicBool>, forwarded: Arc<AtomicU64>) {
    while !stop.load(Ordering::SeqCst) {
        let Ok(mut sub) = Subscription::connect(addr) else {
            thread::sleep(Duration::from_millis(100));
            continue;
        };
        let _ = sub.set_read_timeout(Some(Duration::from_millis(100)));
        while !stop.load(Ordering::SeqCst) {
            match sub.next_line() {
                Ok(Some(line)) => {
                    forwarded.fetch_add(1, Ordering::Relaxed);
                    clients.lock().expect("clients").retain(|c| c.send(line.clone()).is_ok());
                }
                Ok(None) => break,
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                Err(_) => break,
            }
        }
    }
}

fn answer(line: &str, commands: Option<SocketAddr>, client: &mut Option<CommandClient>) -> Ack {
    let Some(addr) = commands else {
        return Ack::from_result(None, None, Err(Rejection::new("read_only", "gateway has no command stream")));
    };
    let mut attempt = || -> io::Result<Ack> {
        if client.is_none() {
            *client = Some(CommandClient::connect(addr)?);
        }
        client.as_mut().expect("connected").send_raw(line)
    };
    attempt().unwrap_or_else(|e| {
        *client = None;
        Ack::from_result(None, None, Err(Rejection::new("unavailable", e.to_string())))
    })
}

fn serve_client(stream: TcpStream, rx: Receiver<String>, commands: Option<SocketAddr>, stop: Arc<AtomicBool>) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_nodelay(true);
    let mut ws: WebSocket<TcpStream> = match tungstenite::accept(stream) {
        Ok(ws) => ws,
        Err(e) => {
            log::warn!("websocket handshake failed: {e}");
            return;
        }
    };
    let _ = ws.get_ref().set_read_timeout(Some(POLL));
    let mut command_client = None;
    while !stop.load(Ordering::SeqCst) {
        match ws.read() {
            Ok(Message::Text(t)) => {
                let ack = answer(t.as_str().trim(), commands, &mut command_client);
                let reply = serde_json::to_string(&ack).expect("ack serializes");
                if ws.send(Message::text(reply)).is_err() {
                    return;
                }
            }
            Ok(Message::Close(_)) => {
                let _ = ws.flush();
                return;
            }
            Ok(_) => {}
            Err(tungstenite::Error::Io(e)) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => return,
        }
        for line in rx.try_iter() {
            if ws.write(Message::text(line)).is_err() {
                return;
            }
        }
        if ws.flush().is_err() {
            return;
        }
    }
    let _ = ws.close(None);
    let _ = ws.flush();
}
