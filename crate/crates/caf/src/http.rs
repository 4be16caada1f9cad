//! Minimal HTTP plumbing over `tiny_http`: a threaded server with a plain
//! request/reply handler, the artifact server, and the remote upstream.

use std::collections::BTreeMap;
use std::io::{self, Read};
use std::net::SocketAddr;
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::Duration;

use caf_core::cache::ProxyError;
use caf_core::ArtifactId;
use serde::Serialize;

use crate::proxy::Upstream;

/// A request with its body read and its query string decoded.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct Incoming {
    pub method: String,
    pub path: String,
    pub query: BTreeMap<String, String>,
    pub body: Vec<u8>,
}

impl Incoming {
    pub fn new(method: &str, url: &str, body: impl Into<Vec<u8>>) -> Self {
        let (path, query) = url.split_once('?').unwrap_or((url, ""));
        Incoming {
            method: method.to_ascii_uppercase(),
            path: path.to_string(),
            query: form_urlencoded::parse(query.as_bytes()).into_owned().collect(),
            body: body.into(),
        }
    }

    /// Path split on `/`, empty segments dropped.
    pub fn segments(&self) -> Vec<&str> {
        self.path.split('/').filter(|s| !s.is_empty()).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Reply {
    pub status: u16,
    pub content_type: &'static str,
    pub body: Vec<u8>,
}

#[derive(Serialize)]
struct ErrorBody<'a> {
    error: &'a str,
    message: String,
}

impl Reply {
    pub fn json<T: Serialize + ?Sized>(status: u16, value: &T) -> Self {
        Reply {
            status,
            content_type: "application/json",
            body: serde_json::to_vec(value).expect("API types serialize"),
        }
    }

    pub fn bytes(body: Vec<u8>) -> Self {
        Reply { status: 200, content_type: "application/octet-stream", body }
    }

    /// `{"error": kind, "message": ...}` with the given status.
    pub fn error(status: u16, kind: &str, message: impl ToString) -> Self {
        Reply::json(status, &ErrorBody { error: kind, message: message.to_string() })
    }

    pub fn not_found() -> Self {
        Reply::error(404, "NotFound", "no such resource")
    }
}

/// A running server; stops and joins its workers on drop.
pub struct HttpServer {
    server: Arc<tiny_http::Server>,
    addr: SocketAddr,
    workers: Vec<JoinHandle<()>>,
}

impl HttpServer {
    /// Bind `addr` (port 0 picks a free one) and serve with `threads`
    /// concurrent workers.
    pub fn start<H>(addr: &str, threads: usize, handler: H) -> io::Result<Self>
    where
        H: Fn(&Incoming) -> Reply + Send + Sync + 'static,
    {
        let server = Arc::new(tiny_http::Server::http(addr).map_err(io::Error::other)?);
        let addr = server.server_addr().to_ip().ok_or_else(|| io::Error::other("not an IP listener"))?;
        let handler = Arc::new(handler);
        let workers = (0..threads.max(1))
            .map(|_| {
                let (server, handler) = (server.clone(), handler.clone());
                std::thread::spawn(move || {
                    for mut rq in server.incoming_requests() {
                        let mut body = Vec::new();
                        let reply = match rq.as_reader().read_to_end(&mut body) {
                            Ok(_) => handler(&Incoming::new(rq.method().as_str(), rq.url(), body)),
                            Err(e) => Reply::error(400, "BadRequest", e),
                        };
                        let _ = rq.respond(to_response(reply));
                    }
                })
            })
            .collect();
        Ok(HttpServer { server, addr, workers })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Block the calling thread until the server stops.
    pub fn join(mut self) {
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

impl Drop for HttpServer {
    fn drop(&mut self) {
        for _ in &self.workers {
            self.server.unblock();
        }
        for w in self.workers.drain(..) {
            let _ = w.join();
        }
    }
}

fn to_response(reply: Reply) -> tiny_http::Response<io::Cursor<Vec<u8>>> {
    let mut resp = tiny_http::Response::from_data(reply.body).with_status_code(reply.status);
    for (k, v) in [("Content-Type", reply.content_type), ("Access-Control-Allow-Origin", "*")] {
        resp.add_header(tiny_http::Header::from_bytes(k, v).expect("static header"));
    }
    resp
}

/// Routes of an origin or proxy: `GET /artifacts/{hex-id}` and
/// `GET /cache/stats`.
pub fn artifact_handler<U: Upstream + 'static>(source: U) -> impl Fn(&Incoming) -> Reply + Send + Sync + 'static {
    move |rq| {
        if rq.method != "GET" {
            return Reply::error(405, "MethodNotAllowed", &rq.method);
        }
        match rq.segments().as_slice() {
            ["artifacts", hex] => {
                let Ok(id) = hex.parse::<ArtifactId>() else {
                    return Reply::error(400, "BadArtifactId", hex);
                };
                match source.fetch(&id) {
                    Ok(bytes) => Reply::bytes(bytes),
                    Err(e @ ProxyError::NotFound(_)) => Reply::error(404, "NotFound", e),
                    Err(e @ ProxyError::IntegrityMismatch { .. }) => Reply::error(502, "IntegrityMismatch", e),
                    Err(e @ ProxyError::OriginUnreachable(_)) => Reply::error(502, "OriginUnreachable", e),
                }
            }
            ["cache", "stats"] => match source.stats() {
                Some(c) => Reply::json(200, &c),
                None => Reply::error(404, "NotFound", "this server does not cache"),
            },
            _ => Reply::not_found(),
        }
    }
}

/// An origin or proxy reached over HTTP. Bytes are returned unverified;
/// the consumer checks them against the id.
#[derive(Clone, Debug)]
pub struct HttpUpstream {
    base: String,
    agent: ureq::Agent,
}

impl HttpUpstream {
    pub fn new(base: impl Into<String>) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build();
        HttpUpstream { base: base.into().trim_end_matches('/').to_string(), agent }
    }
}

impl Upstream for HttpUpstream {
    fn fetch(&self, id: &ArtifactId) -> Result<Vec<u8>, ProxyError> {
        let url = format!("{}/artifacts/{}", self.base, id.to_hex());
        match self.agent.get(&url).call() {
            Ok(resp) => {
                let mut bytes = Vec::new();
                resp.into_reader()
                    .read_to_end(&mut bytes)
                    .map_err(|e| ProxyError::OriginUnreachable(e.to_string()))?;
                Ok(bytes)
            }
            Err(ureq::Error::Status(404, _)) => Err(ProxyError::NotFound(id.clone())),
            Err(e) => Err(ProxyError::OriginUnreachable(e.to_string())),
        }
    }
}
