//! Read-only HTTP view of the topology registry.
//!
//! `GET /registry` returns the registry document as text and
//! `GET /registry.json` the same graph as JSON. Other paths get 404 and
//! other methods 405.

use std::fs;
use std::io;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, RwLock};
use std::thread::{self, JoinHandle};
use std::time::Duration;

use serde_json::json;
use tiny_http::{Header, Method, Response, Server};
use vmc_core::topology::TopologyGraph;

/// Where the served registry text comes from.
#[derive(Clone)]
pub enum RegistrySource {
    /// Read on every request.
    File(PathBuf),
    /// Kept current by the runtime.
    Shared(Arc<RwLock<String>>),
}

impl RegistrySource {
    fn text(&self) -> io::Result<String> {
        match self {
            RegistrySource::File(p) => fs::read_to_string(p),
            RegistrySource::Shared(s) => Ok(s.read().expect("registry text").clone()),
        }
    }
}

pub fn registry_json(graph: &TopologyGraph) -> serde_json::Value {
    json!({
        "modules": graph.modules().map(|m| json!({"id": m.id.as_str(), "level": m.level})).collect::<Vec<_>>(),
        "edges": graph
            .edges()
            .map(|(slot, e)| json!({"parent": slot.to_string(), "child": e.child.as_str()}))
            .collect::<Vec<_>>(),
    })
}

pub struct RegistryServer {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl RegistryServer {
    pub fn spawn(addr: impl ToSocketAddrs, source: RegistrySource) -> io::Result<RegistryServer> {
        let server = Server::http(addr).map_err(io::Error::other)?;
        let addr = server
            .server_addr()
            .to_ip()
            .ok_or_else(|| io::Error::other("registry server is not on an IP socket"))?;
        let stop = Arc::new(AtomicBool::new(false));
        let flag = stop.clone();
        let thread = thread::Builder::new().name("registry-http".into()).spawn(move || {
            while !flag.load(Ordering::SeqCst) {
                match server.recv_timeout(Duration::from_millis(50)) {
                    Ok(Some(req)) => {
                        let resp = respond(req.method(), req.url(), &source);
                        let _ = req.respond(resp);
                    }
                    Ok(None) => {}
                    Err(e) => log::warn!("registry http: {e}"),
                }
            }
        })?;
        Ok(RegistryServer { addr, stop, thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for RegistryServer {
    fn drop(&mut self) {
        self.stop_now();
    }
}

fn header(name: &str, value: &str) -> Header {
    Header::from_bytes(name.as_bytes(), value.as_bytes()).expect("static header")
}

fn text(status: u16, body: String) -> Response<io::Cursor<Vec<u8>>> {
    Response::from_string(body).with_status_code(status).with_header(header("Content-Type", "text/plain; charset=utf-8"))
}

fn respond(method: &Method, url: &str, source: &RegistrySource) -> Response<io::Cursor<Vec<u8>>> {
    let path = url.split('?').next().unwrap_or("");
    let as_json = match path {
        "/registry" => false,
        "/registry.json" => true,
        _ => return text(404, "not found\n".into()),
    };
    if *method != Method::Get {
        return text(405, "read-only endpoint\n".into()).with_header(header("Allow", "GET"));
    }
    let doc = match source.text() {
        Ok(d) => d,
        Err(e) => return text(503, format!("registry unavailable: {e}\n")),
    };
    if !as_json {
        return text(200, doc);
    }
    match TopologyGraph::registry_import(&doc) {
        Ok(g) => Response::from_string(registry_json(&g).to_string())
            .with_header(header("Content-Type", "application/json")),
        Err(e) => text(500, format!("registry malformed: {e}\n")),
    }
}
