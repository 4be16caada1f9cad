//! Blocking client for the portal API. Every call returns the raw body so
//! the CLI can echo it under `--json`.

use std::io::Read;
use std::time::Duration;

use serde::de::DeserializeOwned;
use serde::Serialize;

#[derive(Debug, thiserror::Error)]
pub enum ClientError {
    /// The portal answered with an error status.
    #[error("{kind}: {message}")]
    Api { status: u16, kind: String, message: String, body: String },
    /// No usable answer: connection refused, timeout, garbled body.
    #[error("transport: {0}")]
    Transport(String),
}

impl ClientError {
    /// 4xx answers are the caller's fault.
    pub fn is_user_error(&self) -> bool {
        matches!(self, ClientError::Api { status, .. } if (400..500).contains(status))
    }
}

/// A successful answer: raw body and its parse.
#[derive(Clone, Debug)]
pub struct Answer<T> {
    pub raw: String,
    pub value: T,
}

#[derive(Clone, Debug)]
pub struct PortalClient {
    base: String,
    agent: ureq::Agent,
}

impl PortalClient {
    pub fn new(base: &str) -> Self {
        let agent = ureq::AgentBuilder::new().timeout(Duration::from_secs(30)).build();
        PortalClient { base: base.trim_end_matches('/').to_string(), agent }
    }

    pub fn get<T: DeserializeOwned>(&self, path: &str) -> Result<Answer<T>, ClientError> {
        self.finish(self.agent.get(&format!("{}{path}", self.base)).call())
    }

    pub fn post<B: Serialize, T: DeserializeOwned>(&self, path: &str, body: &B) -> Result<Answer<T>, ClientError> {
        let json = serde_json::to_string(body).map_err(|e| ClientError::Transport(e.to_string()))?;
        let rq = self.agent.post(&format!("{}{path}", self.base)).set("Content-Type", "application/json");
        self.finish(rq.send_string(&json))
    }

    fn finish<T: DeserializeOwned>(&self, r: Result<ureq::Response, ureq::Error>) -> Result<Answer<T>, ClientError> {
        match r {
            Ok(resp) => {
                let raw = read_body(resp)?;
                let value = serde_json::from_str(&raw).map_err(|e| ClientError::Transport(format!("bad response body: {e}")))?;
                Ok(Answer { raw, value })
            }
            Err(ureq::Error::Status(status, resp)) => {
                let body = read_body(resp).unwrap_or_default();
                let v: serde_json::Value = serde_json::from_str(&body).unwrap_or_default();
                let field = |k: &str| v.get(k).and_then(|x| x.as_str()).unwrap_or_default().to_string();
                Err(ClientError::Api { status, kind: field("error"), message: field("message"), body })
            }
            Err(e) => Err(ClientError::Transport(e.to_string())),
        }
    }
}

fn read_body(resp: ureq::Response) -> Result<String, ClientError> {
    let mut s = String::new();
    resp.into_reader().read_to_string(&mut s).map_err(|e| ClientError::Transport(e.to_string()))?;
    Ok(s)
}

/// Percent-encode a query value.
pub fn encode(v: &str) -> String {
    form_urlencoded::byte_serialize(v.as_bytes()).collect()
}
