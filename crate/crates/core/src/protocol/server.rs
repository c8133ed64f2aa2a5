use std::io::{BufRead, BufReader, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use log::{debug, warn};

use super::{handle_line, GeneratorBackend, ProtocolError};

const POLL: Duration = Duration::from_millis(100);

/// A running rationale server. Dropping the handle stops it.
pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Block until the accept loop exits.
    pub fn join(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }

    pub fn shutdown(mut self) {
        self.stop_now();
    }

    fn stop_now(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        let _ = TcpStream::connect_timeout(&self.addr, POLL);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.acceptor.is_some() {
            self.stop_now();
        }
    }
}

/// Bind `addr` and answer NDJSON prompt requests with `backend`.
///
/// Connections are served concurrently, one thread each; frames on a single
/// connection are answered strictly in order.
pub fn serve(addr: impl ToSocketAddrs, backend: Arc<dyn GeneratorBackend>) -> Result<ServerHandle, ProtocolError> {
    let listener = TcpListener::bind(addr).map_err(ProtocolError::Bind)?;
    let local = listener.local_addr().map_err(ProtocolError::Bind)?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&stop);
    let acceptor = thread::Builder::new()
        .name("fedcot-accept".into())
        .spawn(move || {
            for conn in listener.incoming() {
                if flag.load(Ordering::SeqCst) {
                    break;
                }
                match conn {
                    Ok(stream) => {
                        let backend = Arc::clone(&backend);
                        let flag = Arc::clone(&flag);
                        thread::spawn(move || {
                            if let Err(e) = serve_connection(stream, backend.as_ref(), &flag) {
                                debug!("connection closed: {e}");
                            }
                        });
                    }
                    Err(e) => warn!("accept failed: {e}"),
                }
            }
        })
        .map_err(ProtocolError::Bind)?;
    Ok(ServerHandle {
        addr: local,
        stop,
        acceptor: Some(acceptor),
    })
}

fn serve_connection(stream: TcpStream, backend: &dyn GeneratorBackend, stop: &AtomicBool) -> std::io::Result<()> {
    stream.set_read_timeout(Some(POLL))?;
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = Vec::new();
    loop {
        match reader.read_until(b'\n', &mut line) {
            Ok(0) => return Ok(()),
            Ok(_) => {
                let out = match std::str::from_utf8(&line) {
                    Ok(text) => {
                        let frame = text.trim_end_matches(['\n', '\r']);
                        (!frame.trim().is_empty()).then(|| handle_line(backend, frame))
                    }
                    Err(_) => Some(handle_line(backend, "\u{FFFD}")),
                };
                if let Some(mut out) = out {
                    out.push('\n');
                    writer.write_all(out.as_bytes())?;
                    writer.flush()?;
                }
                line.clear();
            }
            // A partial line stays buffered across timeouts.
            Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                if stop.load(Ordering::SeqCst) {
                    return Ok(());
                }
            }
            Err(e) => return Err(e),
        }
    }
}
