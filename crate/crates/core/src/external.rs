//! Line-delimited JSON protocol over a child process.
//!
//! Used by the external similarity scorer and the external reflection
//! generator: each request is one JSON object on the child's stdin, each
//! response one JSON object on its stdout. The child is spawned lazily on
//! first use and kept alive across calls; responses are awaited with a
//! configurable timeout.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Mutex;
use std::time::Duration;

use serde_json::Value;
use thiserror::Error;

/// Default response timeout for external processes, in milliseconds.
pub const DEFAULT_TIMEOUT_MS: u64 = 10_000;

/// Failure talking to an external process.
#[derive(Debug, Error)]
pub enum ExternalError {
    #[error("external command is empty")]
    EmptyCommand,
    #[error("failed to spawn external process `{command}`: {message}")]
    Spawn { command: String, message: String },
    #[error("failed to write request to external process: {0}")]
    Write(String),
    #[error("external process produced no response within {timeout_ms} ms")]
    Timeout { timeout_ms: u64 },
    #[error("external process closed its output")]
    Closed,
    #[error("external process sent invalid JSON: {0}")]
    InvalidResponse(String),
}

struct Session {
    child: Child,
    stdin: ChildStdin,
    lines: Receiver<std::io::Result<String>>,
}

/// A lazily spawned child process speaking one JSON object per line.
pub struct LineClient {
    command: Vec<String>,
    timeout: Duration,
    session: Mutex<Option<Session>>,
}

impl std::fmt::Debug for LineClient {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("LineClient")
            .field("command", &self.command)
            .field("timeout", &self.timeout)
            .finish()
    }
}

impl LineClient {
    pub fn new(command: Vec<String>, timeout_ms: u64) -> Self {
        Self {
            command,
            timeout: Duration::from_millis(timeout_ms),
            session: Mutex::new(None),
        }
    }

    /// Sends one request object and waits for one response line.
    ///
    /// Calls are serialized internally, so the client is safe to share
    /// across threads.
    pub fn call(&self, request: &Value) -> Result<Value, ExternalError> {
        let mut guard = self.session.lock().unwrap_or_else(|e| e.into_inner());
        if guard.is_none() {
            *guard = Some(self.spawn()?);
        }
        let session = guard.as_mut().expect("session just initialized");

        let mut line = serde_json::to_string(request).expect("request serializes");
        line.push('\n');
        let write_result = session
            .stdin
            .write_all(line.as_bytes())
            .and_then(|()| session.stdin.flush());
        if let Err(e) = write_result {
            *guard = None; // drop the broken session so the next call respawns
            return Err(ExternalError::Write(e.to_string()));
        }

        match session.lines.recv_timeout(self.timeout) {
            Ok(Ok(text)) => serde_json::from_str(&text)
                .map_err(|e| ExternalError::InvalidResponse(e.to_string())),
            Ok(Err(e)) => {
                *guard = None;
                Err(ExternalError::InvalidResponse(e.to_string()))
            }
            Err(RecvTimeoutError::Timeout) => {
                *guard = None;
                Err(ExternalError::Timeout {
                    timeout_ms: self.timeout.as_millis() as u64,
                })
            }
            Err(RecvTimeoutError::Disconnected) => {
                *guard = None;
                Err(ExternalError::Closed)
            }
        }
    }

    fn spawn(&self) -> Result<Session, ExternalError> {
        let (program, args) = self
            .command
            .split_first()
            .ok_or(ExternalError::EmptyCommand)?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::null())
            .spawn()
            .map_err(|e| ExternalError::Spawn {
                command: self.command.join(" "),
                message: e.to_string(),
            })?;
        let stdin = child.stdin.take().expect("stdin piped");
        let stdout = child.stdout.take().expect("stdout piped");
        let (tx, rx) = mpsc::channel();
        std::thread::spawn(move || {
            let reader = BufReader::new(stdout);
            for line in reader.lines() {
                if tx.send(line).is_err() {
                    break;
                }
            }
        });
        Ok(Session {
            child,
            stdin,
            lines: rx,
        })
    }
}

impl Drop for LineClient {
    fn drop(&mut self) {
        if let Ok(mut guard) = self.session.lock() {
            if let Some(session) = guard.as_mut() {
                let _ = session.child.kill();
                let _ = session.child.wait();
            }
        }
    }
}
