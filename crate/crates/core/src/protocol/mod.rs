//! Client/server rationale exchange.
//!
//! The client only ever sends perturbed tokens. Frames are newline-delimited
//! JSON, UTF-8:
//!
//! ```text
//! request   {"id":"s-000001","tokens":["..."],"task":"qa","eps":3.0}
//! response  {"id":"s-000001","rationale":["..."],"gen":"mock-0","lat_ms":0}
//! error     {"id":"s-000001","error":{"code":"bad_frame","msg":"..."}}
//! ```

mod client;
mod http;
mod mock;
mod server;

pub use client::{FrameLog, LoopbackTransport, RationaleClient, TcpTransport, Transport};
pub use http::{HttpGenerator, HttpGeneratorConfig, COT_INSTRUCTION};
pub use mock::{MockGenerator, STOPWORDS};
pub use server::{serve, ServerHandle};

use std::io;
use std::time::Instant;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::vocab::Token;

#[derive(Debug, Error)]
pub enum GeneratorError {
    #[error("generator configuration: {0}")]
    Config(String),
    #[error("http request failed: {0}")]
    Http(String),
    #[error("unexpected http status {0}")]
    Status(u16),
    #[error("gave up after {attempts} attempts (last status {last_status})")]
    RetriesExhausted { attempts: u32, last_status: u16 },
    #[error("response schema mismatch: {0}")]
    Schema(String),
    #[error("{0}")]
    Failed(String),
}

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("cannot bind server: {0}")]
    Bind(io::Error),
    #[error("transport failure: {0}")]
    Transport(#[from] io::Error),
    #[error("timed out waiting for the server")]
    Timeout,
    #[error("server error {code}: {msg}")]
    Server { code: String, msg: String },
    #[error("refusing to send an empty prompt")]
    EmptyPrompt,
    #[error("malformed frame: {0}")]
    Frame(#[from] serde_json::Error),
    #[error("response id `{got}` does not match request `{expected}`")]
    Mismatch { expected: String, got: String },
}

/// Produces a rationale for a (perturbed) prompt.
pub trait GeneratorBackend: Send + Sync {
    fn id(&self) -> &str;
    fn generate(&self, prompt: &[Token]) -> Result<Vec<Token>, GeneratorError>;
}

/// Free-text completion, used by in-context decoding.
pub trait TextCompletion: Send + Sync {
    fn complete(&self, prompt: &str) -> Result<String, GeneratorError>;
}

impl<F> TextCompletion for F
where
    F: Fn(&str) -> Result<String, GeneratorError> + Send + Sync,
{
    fn complete(&self, prompt: &str) -> Result<String, GeneratorError> {
        self(prompt)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PromptRequest {
    #[serde(rename = "id")]
    pub request_id: String,
    #[serde(rename = "tokens")]
    pub perturbed_tokens: Vec<Token>,
    #[serde(rename = "task")]
    pub task_tag: String,
    #[serde(rename = "eps")]
    pub epsilon_reported: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RationaleResponse {
    #[serde(rename = "id")]
    pub request_id: String,
    #[serde(rename = "rationale")]
    pub rationale_tokens: Vec<Token>,
    #[serde(rename = "gen")]
    pub generator_id: String,
    pub lat_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorBody {
    pub code: String,
    pub msg: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ErrorFrame {
    pub id: Option<String>,
    pub error: ErrorBody,
}

/// Anything the server may write back.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ResponseFrame {
    Rationale(RationaleResponse),
    Error(ErrorFrame),
}

pub mod codes {
    pub const BAD_FRAME: &str = "bad_frame";
    pub const EMPTY_PROMPT: &str = "empty_prompt";
    pub const BAD_EPSILON: &str = "bad_epsilon";
    pub const GENERATOR_FAILED: &str = "generator_failed";
    pub const EMPTY_RATIONALE: &str = "empty_rationale";
}

fn error_frame(id: Option<String>, code: &str, msg: impl Into<String>) -> ResponseFrame {
    ResponseFrame::Error(ErrorFrame {
        id,
        error: ErrorBody {
            code: code.to_string(),
            msg: msg.into(),
        },
    })
}

/// Serve one request frame. Never fails: problems become error frames.
pub fn handle_frame(backend: &dyn GeneratorBackend, line: &str) -> ResponseFrame {
    let request: PromptRequest = match serde_json::from_str(line) {
        Ok(r) => r,
        Err(e) => {
            let id = serde_json::from_str::<serde_json::Value>(line)
                .ok()
                .and_then(|v| v.get("id").and_then(|id| id.as_str()).map(str::to_owned));
            return error_frame(id, codes::BAD_FRAME, e.to_string());
        }
    };
    let id = Some(request.request_id.clone());
    if request.perturbed_tokens.is_empty() {
        return error_frame(id, codes::EMPTY_PROMPT, "request carries no tokens");
    }
    if !(request.epsilon_reported.is_finite() && request.epsilon_reported >= 0.0) {
        return error_frame(id, codes::BAD_EPSILON, "eps must be finite and non-negative");
    }
    let started = Instant::now();
    match backend.generate(&request.perturbed_tokens) {
        Ok(rationale) if rationale.is_empty() => {
            error_frame(id, codes::EMPTY_RATIONALE, "generator returned no tokens")
        }
        Ok(rationale) => ResponseFrame::Rationale(RationaleResponse {
            request_id: request.request_id,
            rationale_tokens: rationale,
            generator_id: backend.id().to_string(),
            lat_ms: started.elapsed().as_millis() as u64,
        }),
        Err(e) => error_frame(id, codes::GENERATOR_FAILED, e.to_string()),
    }
}

/// [`handle_frame`] rendered as one JSON line without the trailing newline.
pub fn handle_line(backend: &dyn GeneratorBackend, line: &str) -> String {
    serde_json::to_string(&handle_frame(backend, line)).expect("frames always serialize")
}
