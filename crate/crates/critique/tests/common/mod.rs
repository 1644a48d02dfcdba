//! A tiny HTTP/1.1 stub server for the client tests. One thread per
//! connection, `Connection: close` on every reply.

#![allow(dead_code)]

use std::io::{BufRead, BufReader, Read, Write};
use std::net::{TcpListener, TcpStream};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex};
use std::thread;

use rpo_core::experiment::CritiqueEndpoint;

#[derive(Clone, Debug)]
pub struct Recorded {
    pub method: String,
    pub path: String,
    pub headers: Vec<(String, String)>,
    pub body: String,
}

impl Recorded {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers
            .iter()
            .find(|(k, _)| k.eq_ignore_ascii_case(name))
            .map(|(_, v)| v.as_str())
    }

    pub fn json(&self) -> serde_json::Value {
        serde_json::from_str(&self.body).expect("request body is JSON")
    }

    /// The user message of a chat-completions request.
    pub fn user_content(&self) -> String {
        self.json()["messages"][1]["content"].as_str().unwrap().to_string()
    }
}

pub type Handler = dyn Fn(usize, &Recorded) -> (u16, String) + Send + Sync;

pub struct StubServer {
    pub addr: String,
    pub requests: Arc<Mutex<Vec<Recorded>>>,
    pub max_concurrent: Arc<AtomicUsize>,
}

impl StubServer {
    /// `handler(n, req)` gets the 0-based arrival index.
    pub fn start(handler: Arc<Handler>) -> Self {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap().to_string();
        let requests = Arc::new(Mutex::new(Vec::new()));
        let max_concurrent = Arc::new(AtomicUsize::new(0));
        let current = Arc::new(AtomicUsize::new(0));
        let counter = Arc::new(AtomicUsize::new(0));
        {
            let requests = requests.clone();
            let max_concurrent = max_concurrent.clone();
            thread::spawn(move || {
                for stream in listener.incoming() {
                    let Ok(stream) = stream else { continue };
                    let (handler, requests) = (handler.clone(), requests.clone());
                    let (current, max_concurrent, counter) = (current.clone(), max_concurrent.clone(), counter.clone());
                    thread::spawn(move || {
                        let now = current.fetch_add(1, Ordering::SeqCst) + 1;
                        max_concurrent.fetch_max(now, Ordering::SeqCst);
                        serve(stream, &*handler, &requests, &counter);
                        current.fetch_sub(1, Ordering::SeqCst);
                    });
                }
            });
        }
        StubServer {
            addr,
            requests,
            max_concurrent,
        }
    }

    /// Replies from `script` in order, repeating the last entry.
    pub fn scripted(script: Vec<(u16, String)>) -> Self {
        Self::start(Arc::new(move |n, _| script[n.min(script.len() - 1)].clone()))
    }

    pub fn base_url(&self) -> String {
        format!("http://{}/v1", self.addr)
    }

    pub fn endpoint(&self, key_env: &str) -> CritiqueEndpoint {
        CritiqueEndpoint {
            base_url: self.base_url(),
            model_name: "stub-critic".into(),
            api_key_env: key_env.into(),
            timeout_ms: 5_000,
            max_retries: 3,
            max_in_flight: 4,
        }
    }

    pub fn recorded(&self) -> Vec<Recorded> {
        self.requests.lock().unwrap().clone()
    }
}

fn serve(stream: TcpStream, handler: &Handler, requests: &Mutex<Vec<Recorded>>, counter: &AtomicUsize) {
    let mut reader = BufReader::new(stream.try_clone().unwrap());
    let mut line = String::new();
    if reader.read_line(&mut line).unwrap_or(0) == 0 {
        return;
    }
    let mut parts = line.split_whitespace();
    let method = parts.next().unwrap_or_default().to_string();
    let path = parts.next().unwrap_or_default().to_string();
    let mut headers = Vec::new();
    let mut len = 0usize;
    loop {
        let mut h = String::new();
        reader.read_line(&mut h).unwrap();
        let h = h.trim_end();
        if h.is_empty() {
            break;
        }
        if let Some((k, v)) = h.split_once(':') {
            if k.eq_ignore_ascii_case("content-length") {
                len = v.trim().parse().unwrap();
            }
            headers.push((k.trim().to_string(), v.trim().to_string()));
        }
    }
    let mut body = vec![0u8; len];
    reader.read_exact(&mut body).unwrap();
    let rec = Recorded {
        method,
        path,
        headers,
        body: String::from_utf8(body).unwrap(),
    };
    let n = counter.fetch_add(1, Ordering::SeqCst);
    requests.lock().unwrap().push(rec.clone());
    let (status, body) = handler(n, &rec);
    let reply = format!(
        "HTTP/1.1 {status} Stub\r\nContent-Type: application/json\r\nContent-Length: {}\r\nConnection: close\r\n\r\n{body}",
        body.len()
    );
    let mut stream = stream;
    let _ = stream.write_all(reply.as_bytes());
    let _ = stream.flush();
}

/// A chat-completions response whose assistant content is `content`.
pub fn completion(content: &str) -> String {
    serde_json::json!({
        "id": "chatcmpl-stub",
        "object": "chat.completion",
        "choices": [{"index": 0, "message": {"role": "assistant", "content": content}, "finish_reason": "stop"}],
    })
    .to_string()
}

/// Sets `name` to a dummy key once; tests use distinct names so parallel
/// tests never race on the same variable.
pub fn with_key(name: &str) -> &str {
    std::env::set_var(name, "test-key");
    name
}
