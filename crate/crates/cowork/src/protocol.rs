//! Line-delimited JSON request/response protocol.
//!
//! One request object per line in, one response object per line out, in
//! the same order:
//!
//! ```text
//! {"op": "read", "request_id": "7", "session_id": "s1", "args": {"path": "a.py"}}
//! {"request_id": "7", "status": "ok", "body": {"content_text": "...", "version": 3}}
//! ```
//!
//! Write rejections are `ok` responses whose body has `"status": "rejected"`.
//! `err` is reserved for requests that could not be carried out.

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::path::PathBuf;
use std::sync::Arc;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use cowork_core::conflict::Reservation;
use cowork_core::diff::is_text;
use cowork_core::{Coordinator, Error, OpenSession, RefreshStatus, Role, WriteOutcome, WriteRequest};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};

pub const OPS: [&str; 11] = [
    "open_session",
    "close_session",
    "read",
    "write",
    "refresh",
    "prune",
    "reserve_status",
    "release_reservation",
    "annotations",
    "stats",
    "sync_fs",
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub op: String,
    pub request_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub session_id: Option<String>,
    #[serde(default)]
    pub args: Value,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Err,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Response {
    /// Null only when the request line could not be parsed at all.
    pub request_id: Option<String>,
    pub status: Status,
    pub body: Value,
}

impl Response {
    fn ok(id: String, body: Value) -> Self {
        Response {
            request_id: Some(id),
            status: Status::Ok,
            body,
        }
    }

    fn err(id: Option<String>, e: Failure) -> Self {
        Response {
            request_id: id,
            status: Status::Err,
            body: json!({"code": e.code, "message": e.message, "detail": e.detail}),
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == Status::Ok
    }

    /// The `code` of an error response.
    pub fn code(&self) -> Option<&str> {
        match self.status {
            Status::Err => self.body.get("code").and_then(Value::as_str),
            Status::Ok => None,
        }
    }

    pub fn to_line(&self) -> String {
        let mut s = serde_json::to_string(self).expect("response serializes");
        s.push('\n');
        s
    }
}

#[derive(Debug)]
struct Failure {
    code: &'static str,
    message: String,
    detail: Value,
}

impl Failure {
    fn new(code: &'static str, message: impl Into<String>) -> Self {
        Failure {
            code,
            message: message.into(),
            detail: Value::Null,
        }
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let detail = match &e {
            Error::ExpectedVersionMismatch { path, expected, observed } => {
                json!({"path": path, "expected_version": expected, "observed_version": observed})
            }
            Error::NotFound(p) | Error::InvalidPath(p) => json!({"path": p}),
            Error::NotHolder { path, session } => json!({"path": path, "session_id": session}),
            _ => Value::Null,
        };
        Failure {
            code: e.code(),
            message: e.to_string(),
            detail,
        }
    }
}

type OpResult = Result<Value, Failure>;

/// Encodes content as `content_text` when it is text, else `content_b64`.
pub fn content_fields(prefix: &str, bytes: &[u8]) -> (String, Value) {
    if is_text(bytes) {
        let text = std::str::from_utf8(bytes).expect("text is utf-8");
        (format!("{prefix}_text"), Value::from(text))
    } else {
        (format!("{prefix}_b64"), Value::from(B64.encode(bytes)))
    }
}

/// State a connection carries between requests.
#[derive(Debug, Default)]
pub struct Connection {
    seen: HashSet<String>,
    /// Sessions opened here and not yet closed; closed on disconnect.
    pub sessions: BTreeSet<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct OpenArgs {
    #[serde(default)]
    role: Role,
    author: Option<String>,
    task: Option<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PathArgs {
    path: String,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct PathsArgs {
    paths: Vec<String>,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WriteArgs {
    path: String,
    expected_version: u64,
    content_text: Option<String>,
    content_b64: Option<String>,
    #[serde(default)]
    delete: bool,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct NoArgs {}

fn args<T: DeserializeOwned>(v: &Value) -> Result<T, Failure> {
    let v = if v.is_null() { json!({}) } else { v.clone() };
    serde_json::from_value(v).map_err(|e| Failure::new("bad_args", e.to_string()))
}

/// The coordinator plus the directory it mirrors.
pub struct Service {
    pub co: Arc<Coordinator>,
    pub root: Option<PathBuf>,
}

impl Service {
    pub fn new(co: Arc<Coordinator>, root: Option<PathBuf>) -> Self {
        Service { co, root }
    }

    /// Parses and handles one request line.
    pub fn handle_line(&self, conn: &mut Connection, line: &str) -> Response {
        let value: Value = match serde_json::from_str(line) {
            Ok(v) => v,
            Err(e) => return Response::err(None, Failure::new("malformed", e.to_string())),
        };
        let id = value.get("request_id").and_then(Value::as_str).map(str::to_string);
        match serde_json::from_value::<Request>(value) {
            Ok(req) => self.handle(conn, req),
            Err(e) => Response::err(id, Failure::new("malformed", e.to_string())),
        }
    }

    pub fn handle(&self, conn: &mut Connection, req: Request) -> Response {
        if !conn.seen.insert(req.request_id.clone()) {
            let f = Failure::new("duplicate_request_id", format!("request_id {:?} already used", req.request_id));
            return Response::err(Some(req.request_id), f);
        }
        match self.dispatch(conn, &req) {
            Ok(body) => Response::ok(req.request_id, body),
            Err(f) => Response::err(Some(req.request_id), f),
        }
    }

    fn session<'r>(&self, req: &'r Request) -> Result<&'r str, Failure> {
        req.session_id
            .as_deref()
            .ok_or_else(|| Failure::new("missing_session", format!("{} needs a session_id", req.op)))
    }

    /// sync_fs and stats are for manager sessions or session-less tooling.
    fn require_manager(&self, req: &Request) -> Result<(), Failure> {
        if let Some(s) = &req.session_id {
            let session = self.co.session(s)?;
            if session.role != Role::Manager {
                return Err(Failure::new("forbidden", format!("{} is reserved for the manager role", req.op)));
            }
        }
        Ok(())
    }

    fn reservation_json(&self, r: &Reservation) -> Value {
        let now = self.co.with_workspace(|w| w.now());
        json!({"holder": r.holder, "ttl_ms": r.remaining(now)})
    }

    fn dispatch(&self, conn: &mut Connection, req: &Request) -> OpResult {
        match req.op.as_str() {
            "open_session" => {
                let a: OpenArgs = args(&req.args)?;
                let id = self.co.open_session(OpenSession {
                    role: a.role,
                    author: a.author,
                    task: a.task,
                })?;
                conn.sessions.insert(id.clone());
                Ok(json!({"session_id": id}))
            }
            "close_session" => {
                let _: NoArgs = args(&req.args)?;
                let s = self.session(req)?;
                self.co.close_session(s)?;
                conn.sessions.remove(s);
                Ok(json!({}))
            }
            "read" => {
                let a: PathArgs = args(&req.args)?;
                let (content, version) = self.co.read(self.session(req)?, &a.path)?;
                let (key, value) = content_fields("content", &content);
                let mut body = json!({"version": version});
                body[key] = value;
                Ok(body)
            }
            "write" => self.write(req),
            "refresh" => {
                let a: PathsArgs = args(&req.args)?;
                let out = self.co.refresh(self.session(req)?, a.paths.iter().map(String::as_str))?;
                let mut entries = BTreeMap::new();
                let mut missing = Vec::new();
                for (path, status) in out {
                    match status {
                        RefreshStatus::Current(v) => {
                            entries.insert(path, v);
                        }
                        RefreshStatus::NotFound => missing.push(path),
                    }
                }
                Ok(json!({"entries": entries, "missing": missing}))
            }
            "prune" => {
                let a: PathsArgs = args(&req.args)?;
                self.co.prune(self.session(req)?, a.paths.iter().map(String::as_str))?;
                Ok(json!({}))
            }
            "reserve_status" => {
                let a: PathArgs = args(&req.args)?;
                Ok(match self.co.reservation_status(&a.path)? {
                    Some((r, remaining)) => json!({"holder": r.holder, "ttl_remaining_ms": remaining}),
                    None => json!({}),
                })
            }
            "release_reservation" => {
                let a: PathArgs = args(&req.args)?;
                self.co.release_reservation(self.session(req)?, &a.path)?;
                Ok(json!({}))
            }
            "annotations" => {
                let a: PathArgs = args(&req.args)?;
                Ok(json!({"annotations": self.co.annotations(&a.path)?}))
            }
            "stats" => {
                let _: NoArgs = args(&req.args)?;
                self.require_manager(req)?;
                Ok(json!({"counters": self.co.stats()}))
            }
            "sync_fs" => {
                let _: NoArgs = args(&req.args)?;
                self.require_manager(req)?;
                let root = self
                    .root
                    .as_ref()
                    .ok_or_else(|| Failure::new("no_root", "service has no backing directory"))?;
                Ok(json!({"changed": self.co.sync_dir(root)?}))
            }
            other => Err(Failure {
                code: "unknown_op",
                message: format!("unknown op {other:?}"),
                detail: json!({"ops": OPS}),
            }),
        }
    }

    fn write(&self, req: &Request) -> OpResult {
        let a: WriteArgs = args(&req.args)?;
        let session = self.session(req)?;
        let content = match (a.content_text, a.content_b64, a.delete) {
            (Some(t), None, false) => Some(t.into_bytes()),
            (None, Some(b), false) => {
                Some(B64.decode(b).map_err(|e| Failure::new("bad_args", format!("content_b64: {e}")))?)
            }
            (None, None, true) => None,
            _ => {
                return Err(Failure::new(
                    "bad_args",
                    "write needs exactly one of content_text, content_b64 or delete",
                ))
            }
        };
        let outcome = match content {
            Some(bytes) => self.co.submit_write(WriteRequest {
                session_id: session.to_string(),
                path: a.path,
                new_content: bytes.into(),
                expected_version: a.expected_version,
            })?,
            None => self.co.submit_delete(session, &a.path, a.expected_version)?,
        };
        Ok(match outcome {
            WriteOutcome::Accepted { new_version } => json!({"status": "accepted", "new_version": new_version}),
            WriteOutcome::Rejected(c) => {
                let (key, value) = content_fields("current_content", &c.current_target_content);
                let mut conflict = json!({
                        "kind": c.kind,
                        "target": c.target,
                        "target_diff": c.target_diff.as_ref().map(|d| d.as_text()),
                        "stale": c.stale,
                        "reservation": c.reservation.as_ref().map(|r| self.reservation_json(r)),
                        "blocking": c.blocking.as_ref().map(|r| self.reservation_json(r)),
                        "removed_annotations": c.removed_annotations,
                });
                conflict[key] = value;
                json!({"status": "rejected", "conflict": conflict})
            }
        })
    }

    /// Closes whatever a dropped connection left open.
    pub fn disconnect(&self, conn: &mut Connection) {
        for s in std::mem::take(&mut conn.sessions) {
            // Already closed through another path is fine.
            let _ = self.co.close_session(&s);
        }
    }
}
