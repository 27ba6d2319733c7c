use std::io::{BufRead, BufReader, Read, Write};
use std::net::TcpListener;
use std::sync::Arc;
use std::thread;
use std::time::Duration;

use coma_core::llm::{HttpBackend, LlmBackend, LlmClient, LlmError, LlmRequest, RetryPolicy, Role};

struct Captured {
    request_line: String,
    auth: Option<String>,
    body: serde_json::Value,
}

/// Serves one canned `(status, body)` per connection, in order.
fn serve(replies: Vec<(u16, String)>) -> (String, thread::JoinHandle<Vec<Captured>>) {
    let listener = TcpListener::bind("127.0.0.1:0").unwrap();
    let base = format!("http://{}/v1", listener.local_addr().unwrap());
    let handle = thread::spawn(move || {
        let mut seen = Vec::new();
        for (status, reply) in replies {
            let (stream, _) = listener.accept().unwrap();
            let mut reader = BufReader::new(stream.try_clone().unwrap());
            let mut request_line = String::new();
            reader.read_line(&mut request_line).unwrap();
            let mut len = 0;
            let mut auth = None;
            loop {
                let mut h = String::new();
                reader.read_line(&mut h).unwrap();
                let h = h.trim_end();
                if h.is_empty() {
                    break;
                }
                let (k, v) = h.split_once(':').unwrap();
                match k.to_ascii_lowercase().as_str() {
                    "content-length" => len = v.trim().parse().unwrap(),
                    "authorization" => auth = Some(v.trim().to_string()),
                    _ => {}
                }
            }
            let mut buf = vec![0; len];
            reader.read_exact(&mut buf).unwrap();
            let body = if buf.is_empty() { serde_json::Value::Null } else { serde_json::from_slice(&buf).unwrap() };
            seen.push(Captured {
                request_line: request_line.trim_end().to_string(),
                auth,
                body,
            });
            let mut stream = stream;
            write!(
                stream,
                "HTTP/1.1 {status} X\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{reply}",
                reply.len()
            )
            .unwrap();
            stream.flush().unwrap();
        }
        seen
    });
    (base, handle)
}

fn request() -> LlmRequest {
    LlmRequest {
        model: "m-1".into(),
        system: String::new(),
        user: "hello".into(),
        temperature: 0.0,
        max_output_tokens: 64,
        role: Role::Extract,
    }
}

const OK: &str = r#"{"choices":[{"message":{"role":"assistant","content":"gathered_facts: []"}}],"usage":{"prompt_tokens":7,"completion_tokens":3}}"#;

#[test]
fn posts_chat_completion_and_reads_usage() {
    let (base, server) = serve(vec![(200, OK.into())]);
    let backend = HttpBackend::new(&base, "sekret", Duration::from_secs(5)).unwrap();
    let resp = backend.complete(&request()).unwrap();
    assert_eq!(resp.text, "gathered_facts: []");
    assert_eq!((resp.prompt_tokens, resp.completion_tokens), (7, 3));

    let seen = server.join().unwrap();
    assert_eq!(seen[0].request_line, "POST /v1/chat/completions HTTP/1.1");
    assert_eq!(seen[0].auth.as_deref(), Some("Bearer sekret"));
    let body = &seen[0].body;
    assert_eq!(body["model"], "m-1");
    assert_eq!(body["max_tokens"], 64);
    assert_eq!(body["temperature"], 0.0);
    // empty system text is not sent
    assert_eq!(body["messages"].as_array().unwrap().len(), 1);
    assert_eq!(body["messages"][0]["role"], "user");
    assert_eq!(body["messages"][0]["content"], "hello");
}

#[test]
fn server_errors_are_retried_client_errors_are_not() {
    let (base, server) = serve(vec![(503, "{}".into()), (200, OK.into()), (401, "{\"error\":\"bad key\"}".into())]);
    let backend = HttpBackend::new(&base, "k", Duration::from_secs(5)).unwrap();
    let client = LlmClient::new(Arc::new(backend))
        .with_retry(RetryPolicy { max_retries: 2, base_delay_ms: 1, max_delay_ms: 1 })
        .with_sleep(|_| {});
    client.complete(&request()).unwrap();
    assert_eq!(client.usage().retries(), 1);
    assert_eq!(client.usage().role(Role::Extract).calls, 1);
    let err = client.complete(&request()).unwrap_err();
    assert!(matches!(err, LlmError::Provider { status: 401, .. }));
    assert_eq!(server.join().unwrap().len(), 3);
}

#[test]
fn malformed_body_is_reported() {
    let (base, server) = serve(vec![(200, "{\"choices\":[]}".into())]);
    let backend = HttpBackend::new(&base, "k", Duration::from_secs(5)).unwrap();
    assert!(matches!(backend.complete(&request()), Err(LlmError::Malformed(_))));
    server.join().unwrap();
}

#[test]
fn capability_check_hits_models() {
    let (base, server) = serve(vec![(200, "{\"data\":[]}".into())]);
    let backend = HttpBackend::new(&base, "k", Duration::from_secs(5)).unwrap();
    backend.check().unwrap();
    assert_eq!(server.join().unwrap()[0].request_line, "GET /v1/models HTTP/1.1");
}

#[test]
fn refused_connection_is_a_transport_error() {
    let port = TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port();
    let backend = HttpBackend::new(&format!("http://127.0.0.1:{port}/v1"), "k", Duration::from_secs(2)).unwrap();
    let err = backend.complete(&request()).unwrap_err();
    assert!(matches!(err, LlmError::Transport(_)));
    assert!(err.is_retryable());
}
