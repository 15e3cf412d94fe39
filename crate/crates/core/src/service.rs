//! Newline-delimited JSON position service over TCP.
//!
//! Request: `{"id":"…","rss_mw":[9 numbers]}` or `{"id":"…","drss_mw":[…]}`.
//! Response: `{"id":"…","x_m":…,"y_m":…,"latency_ms":…}` or
//! `{"id":"…","error":{"code":"…","message":"…"}}`.

use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::Path;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::Serialize;
use serde_json::Value;

use crate::ensemble::{ensemble_predict, EnsembleBundle};
use crate::error::{Error, Result};
use crate::fingerprint::{delta_rss, Baseline};

const POLL: Duration = Duration::from_millis(20);

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    BadArity,
    BadValue,
    NoBaseline,
    Parse,
    /// Missing or unknown fields, or both or neither payload present.
    BadRequest,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct WireError {
    pub code: ErrorCode,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(untagged)]
pub enum WireResponse {
    Position {
        id: String,
        x_m: f64,
        y_m: f64,
        latency_ms: f64,
    },
    Error {
        id: String,
        error: WireError,
    },
}

impl WireResponse {
    pub fn id(&self) -> &str {
        match self {
            WireResponse::Position { id, .. } | WireResponse::Error { id, .. } => id,
        }
    }

    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("response serializes")
    }
}

/// Read-only state shared by all connections.
#[derive(Debug)]
pub struct ServiceState {
    bundle: EnsembleBundle,
    baseline: Option<Baseline>,
}

impl ServiceState {
    /// Refuses a baseline simulated for a different scene than the bundle.
    pub fn new(bundle: EnsembleBundle, baseline: Option<Baseline>) -> Result<Self> {
        bundle.validate()?;
        if let Some(b) = &baseline {
            if b.scene_digest != bundle.scene_digest {
                return Err(Error::Invalidation {
                    expected: bundle.scene_digest.clone(),
                    found: b.scene_digest.clone(),
                });
            }
        }
        Ok(ServiceState { bundle, baseline })
    }

    pub fn load(bundle: &Path, baseline: Option<&Path>) -> Result<Self> {
        Self::new(
            EnsembleBundle::load(bundle)?,
            baseline.map(Baseline::load).transpose()?,
        )
    }

    pub fn bundle(&self) -> &EnsembleBundle {
        &self.bundle
    }

    pub fn baseline(&self) -> Option<&Baseline> {
        self.baseline.as_ref()
    }
}

fn fail(id: String, code: ErrorCode, message: impl Into<String>) -> WireResponse {
    WireResponse::Error {
        id,
        error: WireError {
            code,
            message: message.into(),
        },
    }
}

fn numbers(v: &Value, field: &str) -> std::result::Result<Vec<f64>, (ErrorCode, String)> {
    let arr = v.as_array().ok_or_else(|| {
        (
            ErrorCode::BadValue,
            format!("{field} must be an array of numbers"),
        )
    })?;
    if arr.len() != 9 {
        return Err((
            ErrorCode::BadArity,
            format!("{field} needs 9 values, got {}", arr.len()),
        ));
    }
    arr.iter()
        .map(|x| match x.as_f64() {
            Some(f) if f.is_finite() => Ok(f),
            _ => Err((
                ErrorCode::BadValue,
                format!("{field} holds a non-finite or non-numeric value: {x}"),
            )),
        })
        .collect()
}

/// Answers one request line.
pub fn handle_request(state: &ServiceState, line: &str) -> WireResponse {
    let t0 = Instant::now();
    let value: Value = match serde_json::from_str(line) {
        Ok(v) => v,
        Err(e) => {
            return fail(
                String::new(),
                ErrorCode::Parse,
                format!("malformed JSON: {e}"),
            )
        }
    };
    let Some(obj) = value.as_object() else {
        return fail(
            String::new(),
            ErrorCode::Parse,
            "request must be a JSON object",
        );
    };
    let id = match obj.get("id") {
        Some(Value::String(s)) => s.clone(),
        _ => {
            return fail(
                String::new(),
                ErrorCode::BadRequest,
                "missing string field id",
            )
        }
    };
    if let Some(k) = obj
        .keys()
        .find(|k| !matches!(k.as_str(), "id" | "rss_mw" | "drss_mw"))
    {
        return fail(id, ErrorCode::BadRequest, format!("unknown field {k}"));
    }
    let drss = match (obj.get("rss_mw"), obj.get("drss_mw")) {
        (Some(_), Some(_)) | (None, None) => {
            return fail(
                id,
                ErrorCode::BadRequest,
                "exactly one of rss_mw or drss_mw is required",
            )
        }
        (None, Some(d)) => match numbers(d, "drss_mw") {
            Ok(v) => v,
            Err((c, m)) => return fail(id, c, m),
        },
        (Some(r), None) => {
            let rss = match numbers(r, "rss_mw") {
                Ok(v) => v,
                Err((c, m)) => return fail(id, c, m),
            };
            let Some(b) = &state.baseline else {
                return fail(id, ErrorCode::NoBaseline, "rss_mw needs a loaded baseline");
            };
            match delta_rss(&rss, &b.rss_mw) {
                Ok(d) => d.to_vec(),
                Err(e) => return fail(id, ErrorCode::BadValue, e.to_string()),
            }
        }
    };
    match ensemble_predict(&state.bundle, &drss) {
        Ok((x, y)) => WireResponse::Position {
            id,
            x_m: x,
            y_m: y,
            latency_ms: t0.elapsed().as_secs_f64() * 1e3,
        },
        Err(e) => fail(id, ErrorCode::BadValue, e.to_string()),
    }
}

fn serve_connection(
    stream: TcpStream,
    state: &ServiceState,
    shutdown: &AtomicBool,
) -> std::io::Result<()> {
    stream.set_read_timeout(Some(POLL))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut buf = Vec::new();
    loop {
        match reader.read_until(b'\n', &mut buf) {
            Ok(0) => return Ok(()),
            Ok(_) if buf.ends_with(b"\n") => {
                let line = String::from_utf8_lossy(&buf);
                let line = line.trim_end_matches(['\n', '\r']);
                if !line.trim().is_empty() {
                    let mut out = handle_request(state, line).to_line();
                    out.push('\n');
                    writer.write_all(out.as_bytes())?;
                }
                buf.clear();
            }
            // Partial line at end of stream.
            Ok(_) => continue,
            Err(e)
                if matches!(
                    e.kind(),
                    ErrorKind::WouldBlock | ErrorKind::TimedOut | ErrorKind::Interrupted
                ) => {}
            Err(e) => return Err(e),
        }
        if shutdown.load(Ordering::SeqCst) && buf.is_empty() {
            return Ok(());
        }
    }
}

/// A running server; dropping it without [`Server::shutdown`] leaves the
/// threads running until the flag is set elsewhere.
pub struct Server {
    addr: SocketAddr,
    flag: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl Server {
    pub fn start(state: Arc<ServiceState>, bind: impl ToSocketAddrs) -> Result<Server> {
        Self::start_with_flag(state, bind, Arc::new(AtomicBool::new(false)))
    }

    /// Like [`Server::start`], stopping when `flag` becomes true.
    pub fn start_with_flag(
        state: Arc<ServiceState>,
        bind: impl ToSocketAddrs,
        flag: Arc<AtomicBool>,
    ) -> Result<Server> {
        let listener = TcpListener::bind(bind).map_err(|e| Error::io("<bind address>", e))?;
        let addr = listener
            .local_addr()
            .map_err(|e| Error::io("<bind address>", e))?;
        listener
            .set_nonblocking(true)
            .map_err(|e| Error::io("<bind address>", e))?;
        let stop = flag.clone();
        let accept = std::thread::spawn(move || {
            let mut workers: Vec<JoinHandle<()>> = Vec::new();
            while !stop.load(Ordering::SeqCst) {
                match listener.accept() {
                    Ok((stream, _)) => {
                        let _ = stream.set_nonblocking(false);
                        let (state, stop) = (state.clone(), stop.clone());
                        workers.push(std::thread::spawn(move || {
                            let _ = serve_connection(stream, &state, &stop);
                        }));
                        workers.retain(|w| !w.is_finished());
                    }
                    Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(POLL),
                    Err(_) => std::thread::sleep(POLL),
                }
            }
            for w in workers {
                let _ = w.join();
            }
        });
        Ok(Server {
            addr,
            flag,
            accept: Some(accept),
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Blocks until the shutdown flag is set and all connections finish.
    pub fn wait(mut self) {
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }

    /// Stops accepting, lets in-flight responses complete and joins.
    pub fn shutdown(self) {
        self.flag.store(true, Ordering::SeqCst);
        self.wait();
    }
}

/// Loads the bundle and baseline, then serves until `flag` is set.
pub fn serve_loop(
    bundle: &Path,
    baseline: Option<&Path>,
    bind: &str,
    flag: Arc<AtomicBool>,
) -> Result<()> {
    let state = Arc::new(ServiceState::load(bundle, baseline)?);
    let server = Server::start_with_flag(state, bind, flag)?;
    eprintln!("listening on {}", server.local_addr());
    server.wait();
    Ok(())
}
