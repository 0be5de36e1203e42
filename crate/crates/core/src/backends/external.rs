//! Child-process backend speaking a newline-delimited protocol.
//!
//! Each request is written to the child's stdin as one line
//! `{"request_key": ..., "prompt": ..., "image_b64": ...}` and each reply is
//! read from stdout as `{"request_key": ..., "text": ...}` (or `"error"`).
//! Replies are matched to requests by key, so the child may answer out of
//! order. Writes to stdin are serialized; any number of callers may wait
//! concurrently.

use std::collections::{HashMap, VecDeque};
use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, Command, Stdio};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use base64::Engine;
use serde::{Deserialize, Serialize};

use super::{Backend, BackendError, BackendRequest, BackendResponse, CallError};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolRequest {
    pub request_key: String,
    pub prompt: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_b64: Option<String>,
}

impl ProtocolRequest {
    pub fn from_request(request: &BackendRequest) -> Self {
        ProtocolRequest {
            request_key: request.request_key.clone(),
            prompt: request.prompt_text.clone(),
            image_b64: request.image.as_ref().map(|i| base64::engine::general_purpose::STANDARD.encode(&i.bytes)),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProtocolResponse {
    pub request_key: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

type Reply = Result<String, BackendError>;

#[derive(Default)]
struct Pending {
    waiters: HashMap<String, VecDeque<Sender<Reply>>>,
    closed: Option<String>,
}

impl Pending {
    fn fail_all(&mut self, err: &BackendError) {
        for (_, queue) in self.waiters.drain() {
            for tx in queue {
                let _ = tx.send(Err(err.clone()));
            }
        }
    }
}

/// One running child process.
struct Session {
    child: Mutex<Child>,
    stdin: Mutex<Option<ChildStdin>>,
    pending: Arc<Mutex<Pending>>,
    reader: Mutex<Option<JoinHandle<()>>>,
}

impl Session {
    fn spawn(command: &[String]) -> Result<Self, BackendError> {
        let (program, args) = command.split_first().ok_or_else(|| BackendError::Config("empty command".into()))?;
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::inherit())
            .spawn()
            .map_err(|e| BackendError::Config(format!("cannot start `{program}`: {e}")))?;
        let stdin = child.stdin.take();
        let stdout = child.stdout.take().expect("stdout is piped");
        let pending = Arc::new(Mutex::new(Pending::default()));

        let shared = Arc::clone(&pending);
        let reader = std::thread::spawn(move || {
            for line in BufReader::new(stdout).lines() {
                let line = match line {
                    Ok(l) => l,
                    Err(e) => {
                        log::warn!("external backend stdout: {e}");
                        break;
                    }
                };
                if line.trim().is_empty() {
                    continue;
                }
                let mut pending = shared.lock().unwrap();
                match serde_json::from_str::<ProtocolResponse>(&line) {
                    Ok(resp) => {
                        let waiter = pending.waiters.get_mut(&resp.request_key).and_then(VecDeque::pop_front);
                        if pending.waiters.get(&resp.request_key).is_some_and(VecDeque::is_empty) {
                            pending.waiters.remove(&resp.request_key);
                        }
                        let reply = match (resp.text, resp.error) {
                            (_, Some(err)) => Err(BackendError::Protocol(format!("child reported: {err}"))),
                            (Some(text), None) => Ok(text),
                            (None, None) => Err(BackendError::Protocol("response without text".into())),
                        };
                        match waiter {
                            Some(tx) => {
                                let _ = tx.send(reply);
                            }
                            None => log::warn!("external backend answered unknown key {}", resp.request_key),
                        }
                    }
                    Err(e) => {
                        let err = BackendError::Protocol(format!("malformed response line {line:?}: {e}"));
                        log::warn!("{err}");
                        pending.fail_all(&err);
                    }
                }
            }
            let mut pending = shared.lock().unwrap();
            pending.closed = Some("stdout closed".into());
            pending.fail_all(&BackendError::ProcessExited("stdout closed".into()));
        });

        Ok(Session {
            child: Mutex::new(child),
            stdin: Mutex::new(stdin),
            pending,
            reader: Mutex::new(Some(reader)),
        })
    }

    fn submit(&self, request: &ProtocolRequest) -> Result<Receiver<Reply>, BackendError> {
        let (tx, rx) = mpsc::channel();
        {
            let mut pending = self.pending.lock().unwrap();
            if let Some(reason) = &pending.closed {
                return Err(BackendError::ProcessExited(reason.clone()));
            }
            pending.waiters.entry(request.request_key.clone()).or_default().push_back(tx);
        }
        let mut line = serde_json::to_string(request).expect("protocol request serializes");
        line.push('\n');
        let mut stdin = self.stdin.lock().unwrap();
        let pipe = stdin.as_mut().ok_or_else(|| BackendError::ProcessExited("stdin closed".into()))?;
        pipe.write_all(line.as_bytes())
            .and_then(|_| pipe.flush())
            .map_err(|e| BackendError::ProcessExited(format!("write to child failed: {e}")))?;
        Ok(rx)
    }

    fn close_stdin(&self) {
        self.stdin.lock().unwrap().take();
    }

    fn shutdown(&self) {
        self.close_stdin();
        let mut child = self.child.lock().unwrap();
        let deadline = Instant::now() + Duration::from_secs(2);
        loop {
            match child.try_wait() {
                Ok(Some(_)) | Err(_) => break,
                Ok(None) if Instant::now() >= deadline => {
                    let _ = child.kill();
                    let _ = child.wait();
                    break;
                }
                Ok(None) => std::thread::sleep(Duration::from_millis(10)),
            }
        }
        if let Some(reader) = self.reader.lock().unwrap().take() {
            let _ = reader.join();
        }
    }
}

fn wait_reply(rx: Receiver<Reply>, key: &str, deadline: Instant) -> Reply {
    let remaining = deadline.saturating_duration_since(Instant::now());
    match rx.recv_timeout(remaining) {
        Ok(reply) => reply,
        Err(RecvTimeoutError::Timeout) => Err(BackendError::Timeout { key: key.to_owned() }),
        Err(RecvTimeoutError::Disconnected) => Err(BackendError::MissingResponse { key: key.to_owned() }),
    }
}

/// Long-lived external process, started on first use and shared by all
/// callers.
pub struct ExternalBackend {
    command: Vec<String>,
    timeout: Duration,
    session: Mutex<Option<Arc<Session>>>,
}

impl ExternalBackend {
    pub fn new(command: Vec<String>, timeout: Duration) -> Self {
        ExternalBackend { command, timeout, session: Mutex::new(None) }
    }

    fn session(&self) -> Result<Arc<Session>, BackendError> {
        let mut guard = self.session.lock().unwrap();
        if let Some(s) = guard.as_ref() {
            return Ok(Arc::clone(s));
        }
        let s = Arc::new(Session::spawn(&self.command)?);
        *guard = Some(Arc::clone(&s));
        Ok(s)
    }
}

impl Backend for ExternalBackend {
    fn call(&self, request: &BackendRequest) -> Result<String, CallError> {
        let session = self.session().map_err(CallError::Fatal)?;
        let rx = session.submit(&ProtocolRequest::from_request(request)).map_err(CallError::Fatal)?;
        wait_reply(rx, &request.request_key, Instant::now() + self.timeout).map_err(CallError::Fatal)
    }
}

impl Drop for ExternalBackend {
    fn drop(&mut self) {
        if let Some(s) = self.session.get_mut().unwrap().take() {
            s.shutdown();
        }
    }
}

/// Run a batch of requests through a fresh child process.
///
/// All requests are written, stdin is closed, and replies are collected and
/// returned in request order. A child that exits before answering every
/// request yields `MissingResponse` naming the first unanswered key.
pub fn external_predict<I>(command: &[String], requests: I, timeout: Duration) -> Result<Vec<BackendResponse>, BackendError>
where
    I: IntoIterator<Item = BackendRequest>,
{
    let session = Session::spawn(command)?;
    let start = Instant::now();
    let mut waiting = Vec::new();
    let mut write_error = None;
    for request in requests {
        match session.submit(&ProtocolRequest::from_request(&request)) {
            Ok(rx) => waiting.push((request.request_key, rx)),
            Err(e) => {
                write_error = Some(e);
                break;
            }
        }
    }
    session.close_stdin();

    let deadline = Instant::now() + timeout;
    let mut out = Vec::with_capacity(waiting.len());
    let mut failure = None;
    for (key, rx) in waiting {
        match wait_reply(rx, &key, deadline) {
            Ok(text) => out.push(BackendResponse { text, latency_ms: start.elapsed().as_millis() as u64, attempt_count: 1 }),
            Err(BackendError::ProcessExited(_)) | Err(BackendError::MissingResponse { .. }) => {
                failure = Some(BackendError::MissingResponse { key });
                break;
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    session.shutdown();
    match (failure, write_error) {
        (Some(e), _) => Err(e),
        (None, Some(e)) => Err(e),
        (None, None) => Ok(out),
    }
}
