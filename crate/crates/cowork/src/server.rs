//! Opening a workspace directory and serving it over TCP.

use std::fs::{self, OpenOptions};
use std::io::{self, BufRead, BufReader, Read, Seek, SeekFrom, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::thread;

use anyhow::{bail, Context};
use cowork_core::event::{parse_log, replay, WorkspaceEvent};
use cowork_core::store::{repair_dir, scan_dir, DirBacking};
use cowork_core::{Clock, Coordinator, EventLog, SystemClock, Workspace};

use crate::config::ServiceConfig;
use crate::protocol::{Connection, Service};

/// Env var naming the bind address.
pub const BIND_ENV: &str = "COWORK_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:7878";

/// Where the event log lives when none is given: beside the workspace
/// root, never inside it.
pub fn default_log_path(root: &Path) -> PathBuf {
    let name = root.file_name().map(|n| n.to_string_lossy().into_owned()).unwrap_or_else(|| "workspace".into());
    root.with_file_name(format!("{name}.events.jsonl"))
}

fn max_session_number(events: &[WorkspaceEvent]) -> u64 {
    events
        .iter()
        .filter_map(|e| e.session.as_deref()?.strip_prefix('s')?.parse::<u64>().ok())
        .max()
        .unwrap_or(0)
}

/// Cuts a torn final line so new events start on a fresh line.
fn trim_torn_tail(path: &Path) -> io::Result<()> {
    let mut f = OpenOptions::new().read(true).write(true).open(path)?;
    let mut bytes = Vec::new();
    f.read_to_end(&mut bytes)?;
    if bytes.last().is_some_and(|&b| b != b'\n') {
        let keep = bytes.iter().rposition(|&b| b == b'\n').map_or(0, |i| i + 1);
        f.set_len(keep as u64)?;
        f.seek(SeekFrom::End(0))?;
    }
    Ok(())
}

/// Opens `root` for serving. A non-empty log at `log_path` means a
/// restart: half-done changes are settled against the log, then anything
/// that changed on disk meanwhile is logged as external. Otherwise the
/// directory is ingested fresh and a new log started.
pub fn open_workspace(root: &Path, log_path: &Path, config: &ServiceConfig) -> anyhow::Result<Service> {
    open_workspace_with_clock(root, log_path, config, Arc::new(SystemClock))
}

pub fn open_workspace_with_clock(
    root: &Path,
    log_path: &Path,
    config: &ServiceConfig,
    clock: Arc<dyn Clock>,
) -> anyhow::Result<Service> {
    if !root.is_dir() {
        bail!("workspace root {} is not a directory", root.display());
    }
    let resuming = fs::metadata(log_path).is_ok_and(|m| m.len() > 0);
    let (ws, last_session) = if resuming {
        trim_torn_tail(log_path).with_context(|| format!("opening {}", log_path.display()))?;
        let events = parse_log(BufReader::new(fs::File::open(log_path)?))?;
        let replayed = replay(&events);
        if !replayed.is_consistent() {
            bail!("event log {} is inconsistent: {}", log_path.display(), replayed.issues.join("; "));
        }
        repair_dir(root, &replayed)?;
        let sink = OpenOptions::new().append(true).open(log_path)?;
        let log = EventLog::with_sink(Box::new(sink), false);
        let ws = Workspace::recover(&events, &scan_dir(root)?, log, clock)?;
        (ws, max_session_number(&events))
    } else {
        let sink = fs::File::create(log_path).with_context(|| format!("creating {}", log_path.display()))?;
        let ws = Workspace::init_from_dir(root, EventLog::with_sink(Box::new(sink), false), clock)?;
        (ws, 0)
    };
    let mut ws = ws;
    ws.set_backing(Box::new(DirBacking::new(root)));
    let co = Coordinator::new(ws, config.coordinator());
    co.resume_sessions_after(last_session);
    Ok(Service::new(Arc::new(co), Some(root.to_path_buf())))
}

pub struct Server {
    listener: TcpListener,
    service: Arc<Service>,
}

impl Server {
    pub fn bind(addr: impl ToSocketAddrs, service: Service) -> anyhow::Result<Self> {
        let listener = TcpListener::bind(addr).context("binding listener")?;
        Ok(Server {
            listener,
            service: Arc::new(service),
        })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    pub fn service(&self) -> &Arc<Service> {
        &self.service
    }

    /// Starts the periodic out-of-band sync, if configured.
    pub fn start_sync(&self, every: std::time::Duration) {
        let service = self.service.clone();
        thread::spawn(move || loop {
            thread::sleep(every);
            if let Some(root) = &service.root {
                if let Err(e) = service.co.sync_dir(root) {
                    eprintln!("sync_fs failed: {e}");
                }
            }
        });
    }

    /// Accepts connections forever, one thread each.
    pub fn run(self) -> anyhow::Result<()> {
        for stream in self.listener.incoming() {
            let stream = match stream {
                Ok(s) => s,
                Err(e) => {
                    eprintln!("accept failed: {e}");
                    continue;
                }
            };
            let service = self.service.clone();
            thread::spawn(move || {
                if let Err(e) = serve_connection(&service, stream) {
                    eprintln!("connection ended: {e}");
                }
            });
        }
        Ok(())
    }

    /// Runs on a background thread and returns the bound address.
    pub fn spawn(self) -> io::Result<SocketAddr> {
        let addr = self.local_addr()?;
        thread::spawn(move || self.run());
        Ok(addr)
    }
}

fn serve_connection(service: &Service, stream: TcpStream) -> io::Result<()> {
    stream.set_nodelay(true)?;
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    let mut conn = Connection::default();
    let result = (|| {
        for line in reader.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let resp = service.handle_line(&mut conn, &line);
            writer.write_all(resp.to_line().as_bytes())?;
            writer.flush()?;
        }
        Ok(())
    })();
    service.disconnect(&mut conn);
    result
}
