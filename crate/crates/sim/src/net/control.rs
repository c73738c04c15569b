//! Command stream: one JSON command per line in, one ack per line out.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use crate::command::{Ack, Command, Envelope, Rejection};

/// Applies one command and reports the outcome.
pub type Handler = Arc<dyn Fn(Command) -> Result<(), Rejection> + Send + Sync>;

/// Answers one raw line. Lines that are not a command get `ok=false` with
/// error code `parse`.
pub fn handle_line(line: &str, handler: &Handler) -> Ack {
    match serde_json::from_str::<Envelope>(line) {
        Ok(env) => {
            let op = env.command.name();
            Ack::from_result(env.id, Some(op), handler(env.command))
        }
        Err(e) => {
            // Keep the id when the line is JSON with an id but an unknown op.
            let id = serde_json::from_str::<serde_json::Value>(line).ok().and_then(|v| v.get("id")?.as_u64());
            Ack::from_result(id, None, Err(Rejection::new("parse", e.to_string())))
        }
    }
}

pub struct CommandServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl CommandServer {
    pub fn spawn(addr: impl ToSocketAddrs, handler: Handler) -> io::Result<CommandServer> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let accept = thread::Builder::new().name("command-accept".into()).spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, peer)) => {
                        let handler = handler.clone();
                        let flag = flag.clone();
                        let _ = thread::Builder::new()
                            .name(format!("command-{peer}"))
                            .spawn(move || serve(stream, handler, flag));
                    }
                    Err(e) if e.kind() == io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(20)),
                    Err(e) => {
                        log::warn!("command accept failed: {e}");
                        thread::sleep(Duration::from_millis(20));
                    }
                }
            }
        })?;
        Ok(CommandServer { addr, stop, accept: Some(accept) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.accept.take() {
            let _ = t.join();
        }
    }
}

impl Drop for CommandServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn serve(stream: TcpStream, handler: Handler, stop: Arc<AtomicBool>) {
    let _ = stream.set_nonblocking(false);
    let _ = stream.set_read_timeout(Some(Duration::from_millis(100)));
    let Ok(mut writer) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    while !stop.load(Ordering::SeqCst) {
        match reader.read_line(&mut line) {
            Ok(0) => return,
            Ok(_) => {
                let text = line.trim();
                if !text.is_empty() {
                    let ack = handle_line(text, &handler);
                    let out = serde_json::to_string(&ack).expect("ack serializes") + "\n";
                    if writer.write_all(out.as_bytes()).is_err() {
                        return;
                    }
                }
                line.clear();
            }
            // A timeout keeps any partial line in `line` for the next read.
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
            Err(_) => return,
        }
    }
}

/// Blocking client of a command stream.
pub struct CommandClient {
    writer: TcpStream,
    reader: BufReader<TcpStream>,
    next_id: u64,
}

impl CommandClient {
    pub fn connect(addr: impl ToSocketAddrs) -> io::Result<CommandClient> {
        let stream = TcpStream::connect(addr)?;
        stream.set_read_timeout(Some(Duration::from_secs(10)))?;
        Ok(CommandClient { writer: stream.try_clone()?, reader: BufReader::new(stream), next_id: 1 })
    }

    /// Sends a command with a fresh id and waits for its ack.
    pub fn send(&mut self, command: Command) -> io::Result<Ack> {
        let id = self.next_id;
        self.next_id += 1;
        let line = serde_json::to_string(&Envelope { id: Some(id), command }).expect("command serializes");
        self.send_raw(&line)
    }

    /// Sends one raw line and waits for the reply line.
    pub fn send_raw(&mut self, line: &str) -> io::Result<Ack> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(io::Error::new(io::ErrorKind::UnexpectedEof, "command stream closed"));
        }
        serde_json::from_str(reply.trim()).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, e))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pause_only() -> Handler {
        Arc::new(|c| match c {
            Command::Pause => Ok(()),
            other => Err(Rejection::new("unsupported", other.name())),
        })
    }

    #[test]
    fn lines_map_to_acks() {
        let h = pause_only();
        let ok = handle_line(r#"{"id":4,"op":"pause"}"#, &h);
        assert_eq!(ok, Ack { id: Some(4), ok: true, op: Some("pause".into()), error: None });
        let no = handle_line(r#"{"id":5,"op":"resume"}"#, &h);
        assert_eq!(no.error.unwrap().code, "unsupported");
        let bad = handle_line(r#"{"id":6,"op":"explode"}"#, &h);
        assert_eq!((bad.id, bad.ok, bad.error.unwrap().code.as_str()), (Some(6), false, "parse"));
        let junk = handle_line("not json", &h);
        assert_eq!((junk.id, junk.error.unwrap().code.as_str()), (None, "parse"));
    }

    #[test]
    fn server_acks_over_tcp() {
        let server = CommandServer::spawn("127.0.0.1:0", pause_only()).unwrap();
        let mut client = CommandClient::connect(server.local_addr()).unwrap();
        let ack = client.send(Command::Pause).unwrap();
        assert!(ack.ok);
        assert_eq!(ack.id, Some(1));
        let ack = client.send_raw("{").unwrap();
        assert!(!ack.ok);
        let ack = client.send(Command::Resume).unwrap();
        assert_eq!(ack.id, Some(2));
        assert!(!ack.ok);
    }
}
