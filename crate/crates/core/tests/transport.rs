use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Mutex;
use std::thread;
use std::time::Duration;

use crave_core::providers::{network_request_count, HttpRequest, HttpTransport, ReqwestTransport};
use serde_json::json;

// The request counter is process-wide.
static SERIAL: Mutex<()> = Mutex::new(());

/// Serves one HTTP request with a fixed JSON body and returns what was
/// received.
fn serve_once(listener: TcpListener, body: &'static str) -> thread::JoinHandle<String> {
    thread::spawn(move || {
        let (stream, _) = listener.accept().unwrap();
        let mut reader = BufReader::new(stream.try_clone().unwrap());
        let mut head = String::new();
        let mut length = 0usize;
        loop {
            let mut line = String::new();
            reader.read_line(&mut line).unwrap();
            if let Some(v) = line.to_ascii_lowercase().strip_prefix("content-length:") {
                length = v.trim().parse().unwrap();
            }
            head.push_str(&line);
            if line == "\r\n" {
                break;
            }
        }
        let mut payload = vec![0; length];
        reader.read_exact(&mut payload).unwrap();
        head.push_str(&String::from_utf8(payload).unwrap());
        let mut stream = stream;
        write!(
            stream,
            "HTTP/1.1 200 OK\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
            body.len()
        )
        .unwrap();
        head
    })
}

#[test]
fn real_requests_are_counted() {
    let _guard = SERIAL.lock().unwrap();
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let url = format!("http://{}/search", listener.local_addr().unwrap());
    let server = serve_once(listener, r#"{"ok": true}"#);

    let before = network_request_count();
    let transport = ReqwestTransport::new().unwrap();
    let request = HttpRequest::post(url, json!({"q": "paris"})).query("limit", "3").header("x-key", "secret");
    let response = transport.send(&request, Duration::from_secs(5)).unwrap();

    assert_eq!(network_request_count(), before + 1);
    assert_eq!(response.status, 200);
    assert_eq!(response.body, json!({"ok": true}));
    let seen = server.join().unwrap();
    assert!(seen.starts_with("POST /search?limit=3 "), "{seen}");
    assert!(seen.to_ascii_lowercase().contains("x-key: secret"));
    assert!(seen.ends_with(r#"{"q":"paris"}"#), "{seen}");
}

#[test]
fn refused_connections_still_count_as_attempts() {
    let _guard = SERIAL.lock().unwrap();
    let port = {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        listener.local_addr().unwrap().port()
    };
    let before = network_request_count();
    let transport = ReqwestTransport::new().unwrap();
    let result = transport.send(&HttpRequest::get(format!("http://127.0.0.1:{port}/")), Duration::from_secs(2));
    assert!(result.is_err());
    assert!(network_request_count() > before);
}
