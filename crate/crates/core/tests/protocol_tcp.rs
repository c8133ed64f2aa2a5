use std::io::{BufRead, BufReader, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;
use std::time::Duration;

use fedcot::protocol::{
    serve, GeneratorBackend, GeneratorError, MockGenerator, PromptRequest, ProtocolError, RationaleClient,
    ResponseFrame, TcpTransport,
};
use fedcot::vocab::{tokenize, Token};

fn request(id: &str, text: &str) -> PromptRequest {
    PromptRequest {
        request_id: id.into(),
        perturbed_tokens: tokenize(text),
        task_tag: "qa".into(),
        epsilon_reported: 1.0,
    }
}

fn connect(addr: std::net::SocketAddr) -> (TcpStream, BufReader<TcpStream>) {
    let s = TcpStream::connect(addr).unwrap();
    s.set_read_timeout(Some(Duration::from_secs(10))).unwrap();
    let r = BufReader::new(s.try_clone().unwrap());
    (s, r)
}

#[test]
fn hundred_pipelined_requests_come_back_in_order() {
    let server = serve("127.0.0.1:0", Arc::new(MockGenerator::new(0))).unwrap();
    let (mut w, mut r) = connect(server.local_addr());
    let mut batch = String::new();
    for i in 0..100 {
        batch += &serde_json::to_string(&request(&format!("r{i}"), &format!("river bank number{i}"))).unwrap();
        batch.push('\n');
    }
    w.write_all(batch.as_bytes()).unwrap();
    for i in 0..100 {
        let mut line = String::new();
        r.read_line(&mut line).unwrap();
        match serde_json::from_str::<ResponseFrame>(&line).unwrap() {
            ResponseFrame::Rationale(resp) => {
                assert_eq!(resp.request_id, format!("r{i}"));
                assert!(resp
                    .rationale_tokens
                    .contains(&Token::new(format!("number{i}")).unwrap()));
            }
            ResponseFrame::Error(e) => panic!("unexpected error frame {e:?}"),
        }
    }
    server.shutdown();
}

#[test]
fn malformed_frame_keeps_the_connection() {
    let server = serve("127.0.0.1:0", Arc::new(MockGenerator::new(0))).unwrap();
    let (mut w, mut r) = connect(server.local_addr());
    w.write_all(b"{not json\n").unwrap();
    w.write_all(b"{\"id\":\"half\",\"tokens\":[]}\n").unwrap();
    w.write_all(serde_json::to_string(&request("ok", "beaver dam")).unwrap().as_bytes())
        .unwrap();
    w.write_all(b"\n").unwrap();

    let mut lines = Vec::new();
    for _ in 0..3 {
        let mut line = String::new();
        r.read_line(&mut line).unwrap();
        lines.push(serde_json::from_str::<ResponseFrame>(&line).unwrap());
    }
    assert!(matches!(&lines[0], ResponseFrame::Error(_)));
    match &lines[1] {
        ResponseFrame::Error(e) => assert_eq!(e.id.as_deref(), Some("half")),
        other => panic!("{other:?}"),
    }
    assert!(matches!(&lines[2], ResponseFrame::Rationale(resp) if resp.request_id == "ok"));
    server.shutdown();
}

#[test]
fn silent_server_times_out() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let hold = thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        thread::sleep(Duration::from_millis(800));
        drop(stream);
    });
    let mut client = RationaleClient::new(TcpTransport::new(addr, Duration::from_millis(150)), "t").with_retries(0);
    let err = client.send(&request("a", "beaver")).unwrap_err();
    assert!(matches!(err, ProtocolError::Timeout), "{err:?}");
    hold.join().unwrap();
}

#[test]
fn closed_port_is_a_transport_error() {
    let addr = {
        let l = TcpListener::bind("127.0.0.1:0").unwrap();
        l.local_addr().unwrap()
    };
    let mut client = RationaleClient::new(TcpTransport::new(addr, Duration::from_millis(500)), "t").with_retries(0);
    let err = client.send(&request("a", "beaver")).unwrap_err();
    assert!(matches!(err, ProtocolError::Transport(_)), "{err:?}");
}

#[test]
fn reconnects_and_resends_the_same_id() {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = listener.local_addr().unwrap();
    let seen = Arc::new(Mutex::new(Vec::new()));
    let seen2 = Arc::clone(&seen);
    let mock = MockGenerator::new(0);
    let srv = thread::spawn(move || {
        for (n, conn) in listener.incoming().take(2).enumerate() {
            let stream = conn.unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            let req: PromptRequest = serde_json::from_str(line.trim()).unwrap();
            seen2.lock().unwrap().push(req.request_id.clone());
            if n == 0 {
                // Drop the first connection without answering.
                continue;
            }
            let out = fedcot::protocol::handle_line(&mock, line.trim());
            let mut w = stream;
            w.write_all(out.as_bytes()).unwrap();
            w.write_all(b"\n").unwrap();
        }
    });
    let mut client = RationaleClient::new(TcpTransport::new(addr, Duration::from_secs(5)), "sess").with_retries(1);
    let id = client.next_request_id();
    let resp = client.send(&request(&id, "beaver dam river")).unwrap();
    srv.join().unwrap();
    assert_eq!(resp.request_id, id);
    assert_eq!(*seen.lock().unwrap(), vec![id.clone(), id]);
}

struct Flaky(AtomicUsize);

impl GeneratorBackend for Flaky {
    fn id(&self) -> &str {
        "flaky"
    }
    fn generate(&self, prompt: &[Token]) -> Result<Vec<Token>, GeneratorError> {
        if self.0.fetch_add(1, Ordering::SeqCst).is_multiple_of(2) {
            Err(GeneratorError::Failed("overloaded".into()))
        } else {
            Ok(prompt.to_vec())
        }
    }
}

#[test]
fn server_error_frame_reaches_the_client() {
    let server = serve("127.0.0.1:0", Arc::new(Flaky(AtomicUsize::new(0)))).unwrap();
    let mut client = RationaleClient::new(TcpTransport::new(server.local_addr(), Duration::from_secs(5)), "t");
    let err = client.send(&request("a", "x y")).unwrap_err();
    assert!(matches!(err, ProtocolError::Server { .. }), "{err:?}");
    // Same connection, next request succeeds.
    let ok = client.send(&request("b", "x y")).unwrap();
    assert_eq!(ok.rationale_tokens, tokenize("x y"));
    server.shutdown();
}

#[test]
fn empty_prompt_is_refused_locally() {
    // Nothing listens here; an attempted send would be a transport error.
    let addr = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut client = RationaleClient::new(TcpTransport::new(addr, Duration::from_millis(100)), "t");
    let err = client.send(&request("a", "")).unwrap_err();
    assert!(matches!(err, ProtocolError::EmptyPrompt));
}
