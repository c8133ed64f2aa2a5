use std::io::{self, BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpStream};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use super::{handle_line, GeneratorBackend, PromptRequest, ProtocolError, RationaleResponse, ResponseFrame};
use crate::mechanism::PerturbedPrompt;

/// Moves one request frame to the server and returns its response frame.
pub trait Transport: Send {
    fn exchange(&mut self, frame: &str) -> Result<String, ProtocolError>;

    /// Drop any connection state so the next exchange reconnects.
    fn reset(&mut self) {}
}

/// Shared record of every frame that crossed a transport, in order.
#[derive(Debug, Clone, Default)]
pub struct FrameLog(Arc<Mutex<Vec<String>>>);

impl FrameLog {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&self, frame: &str) {
        self.0.lock().expect("frame log poisoned").push(frame.to_string());
    }

    pub fn frames(&self) -> Vec<String> {
        self.0.lock().expect("frame log poisoned").clone()
    }
}

/// In-process transport that calls the server's frame handler directly.
pub struct LoopbackTransport {
    backend: Arc<dyn GeneratorBackend>,
    log: FrameLog,
}

impl LoopbackTransport {
    pub fn new(backend: Arc<dyn GeneratorBackend>) -> Self {
        Self {
            backend,
            log: FrameLog::new(),
        }
    }

    /// Handle on the captured frames; stays valid after the transport moves.
    pub fn log(&self) -> FrameLog {
        self.log.clone()
    }
}

impl Transport for LoopbackTransport {
    fn exchange(&mut self, frame: &str) -> Result<String, ProtocolError> {
        self.log.push(frame);
        let out = handle_line(self.backend.as_ref(), frame);
        self.log.push(&out);
        Ok(out)
    }
}

/// NDJSON over a lazily (re)connected TCP stream.
pub struct TcpTransport {
    addr: SocketAddr,
    deadline: Duration,
    conn: Option<(TcpStream, BufReader<TcpStream>)>,
    log: Option<FrameLog>,
}

impl TcpTransport {
    pub fn new(addr: SocketAddr, deadline: Duration) -> Self {
        Self {
            addr,
            deadline,
            conn: None,
            log: None,
        }
    }

    pub fn with_log(mut self, log: FrameLog) -> Self {
        self.log = Some(log);
        self
    }

    fn connect(&mut self) -> Result<&mut (TcpStream, BufReader<TcpStream>), ProtocolError> {
        if self.conn.is_none() {
            let stream = TcpStream::connect_timeout(&self.addr, self.deadline).map_err(classify)?;
            stream.set_read_timeout(Some(self.deadline))?;
            stream.set_write_timeout(Some(self.deadline))?;
            stream.set_nodelay(true)?;
            let reader = BufReader::new(stream.try_clone()?);
            self.conn = Some((stream, reader));
        }
        Ok(self.conn.as_mut().expect("connected above"))
    }
}

fn classify(e: io::Error) -> ProtocolError {
    match e.kind() {
        ErrorKind::WouldBlock | ErrorKind::TimedOut => ProtocolError::Timeout,
        _ => ProtocolError::Transport(e),
    }
}

impl Transport for TcpTransport {
    fn exchange(&mut self, frame: &str) -> Result<String, ProtocolError> {
        if let Some(log) = &self.log {
            log.push(frame);
        }
        let result = (|| {
            let (stream, reader) = self.connect()?;
            stream.write_all(frame.as_bytes()).map_err(classify)?;
            stream.write_all(b"\n").map_err(classify)?;
            stream.flush().map_err(classify)?;
            let mut line = String::new();
            let n = reader.read_line(&mut line).map_err(classify)?;
            if n == 0 {
                return Err(ProtocolError::Transport(io::Error::new(
                    ErrorKind::UnexpectedEof,
                    "server closed the connection",
                )));
            }
            Ok(line.trim_end_matches(['\n', '\r']).to_string())
        })();
        match &result {
            Ok(out) => {
                if let Some(log) = &self.log {
                    log.push(out);
                }
            }
            // The stream may hold a stale or partial response.
            Err(_) => self.conn = None,
        }
        result
    }

    fn reset(&mut self) {
        self.conn = None;
    }
}

/// Client half of the rationale exchange.
///
/// Request ids are `<session>-<counter>`, so a seeded run produces the same
/// frames every time.
pub struct RationaleClient {
    transport: Box<dyn Transport>,
    session: String,
    next: u64,
    retries: u32,
}

impl RationaleClient {
    pub fn new(transport: impl Transport + 'static, session: impl Into<String>) -> Self {
        Self {
            transport: Box::new(transport),
            session: session.into(),
            next: 0,
            retries: 1,
        }
    }

    /// Reconnect-and-resend attempts after a transport failure.
    pub fn with_retries(mut self, retries: u32) -> Self {
        self.retries = retries;
        self
    }

    pub fn next_request_id(&mut self) -> String {
        self.next += 1;
        format!("{}-{:06}", self.session, self.next)
    }

    /// Ask the server for a rationale of `perturbed`. Only the perturbed
    /// tokens and the spent budget leave the client.
    pub fn request_rationale(
        &mut self,
        perturbed: &PerturbedPrompt,
        task_tag: &str,
    ) -> Result<RationaleResponse, ProtocolError> {
        if perturbed.perturbed.is_empty() {
            return Err(ProtocolError::EmptyPrompt);
        }
        let request = PromptRequest {
            request_id: self.next_request_id(),
            perturbed_tokens: perturbed.perturbed.clone(),
            task_tag: task_tag.to_string(),
            epsilon_reported: perturbed.epsilon_max(),
        };
        self.send(&request)
    }

    /// Send a fully formed request, retrying transport failures with the same id.
    pub fn send(&mut self, request: &PromptRequest) -> Result<RationaleResponse, ProtocolError> {
        if request.perturbed_tokens.is_empty() {
            return Err(ProtocolError::EmptyPrompt);
        }
        let frame = serde_json::to_string(request)?;
        let mut attempt = 0;
        let line = loop {
            match self.transport.exchange(&frame) {
                Ok(line) => break line,
                Err(ProtocolError::Transport(_)) if attempt < self.retries => {
                    attempt += 1;
                    self.transport.reset();
                }
                Err(e) => return Err(e),
            }
        };
        match serde_json::from_str::<ResponseFrame>(&line)? {
            ResponseFrame::Rationale(r) if r.request_id == request.request_id => Ok(r),
            ResponseFrame::Rationale(r) => Err(ProtocolError::Mismatch {
                expected: request.request_id.clone(),
                got: r.request_id,
            }),
            ResponseFrame::Error(e) => Err(ProtocolError::Server {
                code: e.error.code,
                msg: e.error.msg,
            }),
        }
    }
}
