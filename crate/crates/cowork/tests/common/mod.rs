#![allow(dead_code)]

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream};

use cowork::{Response, Status};
use serde_json::{json, Value};

/// Minimal line-protocol client for tests.
pub struct Client {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    next: u64,
    pub session: Option<String>,
}

impl Client {
    pub fn connect(addr: SocketAddr) -> Self {
        let s = TcpStream::connect(addr).expect("connect");
        s.set_nodelay(true).unwrap();
        Client {
            reader: BufReader::new(s.try_clone().unwrap()),
            writer: s,
            next: 0,
            session: None,
        }
    }

    pub fn send_raw(&mut self, line: &str) -> Response {
        self.writer.write_all(line.as_bytes()).unwrap();
        self.writer.write_all(b"\n").unwrap();
        let mut buf = String::new();
        self.reader.read_line(&mut buf).unwrap();
        serde_json::from_str(&buf).unwrap_or_else(|e| panic!("bad response {buf:?}: {e}"))
    }

    pub fn call(&mut self, op: &str, args: Value) -> Response {
        self.next += 1;
        let mut req = json!({"op": op, "request_id": self.next.to_string(), "args": args});
        if let Some(s) = &self.session {
            req["session_id"] = json!(s);
        }
        let resp = self.send_raw(&req.to_string());
        assert_eq!(resp.request_id.as_deref(), Some(self.next.to_string().as_str()));
        resp
    }

    pub fn ok(&mut self, op: &str, args: Value) -> Value {
        let r = self.call(op, args);
        assert_eq!(r.status, Status::Ok, "{op}: {:?}", r.body);
        r.body
    }

    pub fn open(addr: SocketAddr, role: &str, author: &str) -> Self {
        let mut c = Self::connect(addr);
        let body = c.ok("open_session", json!({"role": role, "author": author}));
        c.session = Some(body["session_id"].as_str().unwrap().to_string());
        c
    }

    pub fn read(&mut self, path: &str) -> (String, u64) {
        let b = self.ok("read", json!({"path": path}));
        (b["content_text"].as_str().unwrap().to_string(), b["version"].as_u64().unwrap())
    }

    pub fn write(&mut self, path: &str, expected: u64, text: &str) -> Value {
        self.ok("write", json!({"path": path, "expected_version": expected, "content_text": text}))
    }
}
