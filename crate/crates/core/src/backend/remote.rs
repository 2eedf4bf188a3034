use std::collections::VecDeque;
use std::io::{BufRead, BufReader, Write};
use std::net::{TcpStream, ToSocketAddrs};
use std::sync::mpsc::{self, Receiver, TryRecvError};
use std::thread;
use std::time::Duration;

use super::wire::{ClientFrame, ServerFrame};
use super::{Backend, BackendEvent, CancelHandle, GenerationRequest, RequestId};
use crate::clock::SimTime;

/// Poll interval reported while a request is outstanding.
const POLL_TICK: Duration = Duration::from_millis(5);

struct Outstanding {
    request_id: RequestId,
    cancel: CancelHandle,
    cancel_sent: bool,
    classified: bool,
    last_activity: SimTime,
}

struct Connection {
    writer: TcpStream,
    frames: Receiver<Result<ServerFrame, String>>,
}

impl Drop for Connection {
    fn drop(&mut self) {
        // The reader thread holds a clone of the socket; shut it down so both
        // the peer and that thread see the close.
        let _ = self.writer.shutdown(std::net::Shutdown::Both);
    }
}

/// Adapter for a model server speaking newline-delimited JSON over TCP.
///
/// Connection failures, silence beyond `timeout`, a dropped socket and
/// malformed or out-of-order frames all surface as `Failed` for the affected
/// request. After a protocol or transport failure the connection is dropped
/// and the next submission reconnects.
pub struct RemoteBackend {
    endpoint: String,
    timeout: Duration,
    conn: Option<Connection>,
    outstanding: VecDeque<Outstanding>,
    ready: VecDeque<(RequestId, BackendEvent)>,
    last_poll: SimTime,
}

impl RemoteBackend {
    /// `endpoint` is `host:port`, optionally prefixed with `tcp://`.
    pub fn new(endpoint: impl Into<String>, timeout: Duration) -> Self {
        Self {
            endpoint: endpoint.into(),
            timeout,
            conn: None,
            outstanding: VecDeque::new(),
            ready: VecDeque::new(),
            last_poll: SimTime::ZERO,
        }
    }

    fn address(&self) -> &str {
        self.endpoint
            .strip_prefix("tcp://")
            .unwrap_or(&self.endpoint)
    }

    fn connect(&self) -> std::io::Result<Connection> {
        let addr = self
            .address()
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::NotFound, "no address"))?;
        let stream = TcpStream::connect_timeout(&addr, self.timeout)?;
        stream.set_nodelay(true)?;
        let reader = stream.try_clone()?;
        let (tx, rx) = mpsc::channel();
        thread::spawn(move || {
            for line in BufReader::new(reader).lines() {
                let msg = match line {
                    Ok(l) if l.trim().is_empty() => continue,
                    Ok(l) => serde_json::from_str::<ServerFrame>(&l)
                        .map_err(|_| "protocol: malformed frame".to_string()),
                    Err(_) => Err("disconnected".to_string()),
                };
                let stop = msg.is_err();
                if tx.send(msg).is_err() || stop {
                    return;
                }
            }
            let _ = tx.send(Err("disconnected".to_string()));
        });
        Ok(Connection {
            writer: stream,
            frames: rx,
        })
    }

    fn send(&mut self, frame: &ClientFrame) -> bool {
        let Some(conn) = self.conn.as_mut() else {
            return false;
        };
        let mut line = serde_json::to_string(frame).expect("client frame serializes");
        line.push('\n');
        conn.writer.write_all(line.as_bytes()).is_ok()
    }

    /// Fails the front request with `reason` and every other outstanding
    /// request as disconnected, then drops the connection.
    fn fail_all(&mut self, reason: String) {
        if let Some(conn) = self.conn.take() {
            let _ = conn.writer.shutdown(std::net::Shutdown::Both);
        }
        let mut reason = Some(reason);
        while let Some(out) = self.outstanding.pop_front() {
            let r = reason.take().unwrap_or_else(|| "disconnected".into());
            let event = if out.cancel.is_cancelled() {
                BackendEvent::Cancelled
            } else {
                BackendEvent::Failed(r)
            };
            self.ready.push_back((out.request_id, event));
        }
    }

    fn send_pending_cancels(&mut self) {
        let ids: Vec<RequestId> = self
            .outstanding
            .iter_mut()
            .filter(|o| o.cancel.is_cancelled() && !o.cancel_sent)
            .map(|o| {
                o.cancel_sent = true;
                o.request_id.clone()
            })
            .collect();
        for request_id in ids {
            if !self.send(&ClientFrame::Cancel { request_id }) {
                self.fail_all("disconnected".into());
                return;
            }
        }
    }

    fn apply(&mut self, frame: ServerFrame, now: SimTime) {
        let Some(front) = self.outstanding.front_mut() else {
            self.fail_all("protocol: unexpected frame".into());
            return;
        };
        front.last_activity = now;
        let event = BackendEvent::from(frame);
        match &event {
            BackendEvent::Token(_) if !front.classified => {
                self.fail_all("protocol: token before state token".into());
                return;
            }
            BackendEvent::Classified(_) => front.classified = true,
            _ => {}
        }
        let id = front.request_id.clone();
        if event.is_terminal() {
            self.outstanding.pop_front();
        }
        self.ready.push_back((id, event));
    }
}

impl Backend for RemoteBackend {
    fn submit(&mut self, request: GenerationRequest, now: SimTime) {
        self.last_poll = self.last_poll.max(now);
        if self.conn.is_none() {
            match self.connect() {
                Ok(conn) => self.conn = Some(conn),
                Err(e) => {
                    tracing::warn!(endpoint = %self.endpoint, error = %e, "remote connect failed");
                    self.ready
                        .push_back((request.request_id, BackendEvent::Failed("connect".into())));
                    return;
                }
            }
        }
        let frame = ClientFrame::Submit {
            request_id: request.request_id.clone(),
            prompt: request.history.render(),
            query: request.query,
        };
        self.outstanding.push_back(Outstanding {
            request_id: request.request_id,
            cancel: request.cancel_handle,
            cancel_sent: false,
            classified: false,
            last_activity: now,
        });
        if !self.send(&frame) {
            self.fail_all("disconnected".into());
        }
    }

    fn next_deadline(&self) -> Option<SimTime> {
        if !self.ready.is_empty() {
            Some(self.last_poll)
        } else if !self.outstanding.is_empty() {
            Some(self.last_poll + POLL_TICK)
        } else {
            None
        }
    }

    fn poll(&mut self, now: SimTime) -> Option<(RequestId, BackendEvent)> {
        self.last_poll = self.last_poll.max(now);
        if let Some(ev) = self.ready.pop_front() {
            return Some(ev);
        }
        self.send_pending_cancels();
        while self.ready.is_empty() && !self.outstanding.is_empty() {
            let Some(conn) = self.conn.as_ref() else {
                self.fail_all("disconnected".into());
                break;
            };
            match conn.frames.try_recv() {
                Ok(Ok(frame)) => self.apply(frame, now),
                Ok(Err(reason)) => self.fail_all(reason),
                Err(TryRecvError::Disconnected) => self.fail_all("disconnected".into()),
                Err(TryRecvError::Empty) => {
                    let front = self.outstanding.front().expect("non-empty");
                    if now.saturating_since(front.last_activity) > self.timeout {
                        self.fail_all("timeout".into());
                    }
                    break;
                }
            }
        }
        self.ready.pop_front()
    }
}
