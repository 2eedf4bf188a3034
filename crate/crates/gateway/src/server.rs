//! Live service: one thread per connection, newline-delimited JSON both ways.

use std::io::{BufRead, BufReader, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::path::PathBuf;
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError};
use std::sync::Arc;
use std::thread::{self, JoinHandle};
use std::time::Duration;

use anyhow::Context;
use duplex_core::clock::ClockMode;
use duplex_core::config::EngineConfig;
use duplex_core::protocol::{ClientMessage, ServerMessage};
use duplex_core::session::{Session, SessionSettings};

/// Longest a session loop sleeps without checking for shutdown.
const TICK: Duration = Duration::from_millis(10);

enum Inbound {
    Message(ClientMessage),
    Malformed(String),
    Closed,
}

pub struct Server {
    listener: TcpListener,
    config: Arc<EngineConfig>,
    shutdown: Arc<AtomicBool>,
    next_session: Arc<AtomicU64>,
}

impl Server {
    pub fn bind(config: EngineConfig) -> anyhow::Result<Self> {
        config.validate()?;
        let listener = TcpListener::bind(&config.gateway.bind)
            .with_context(|| format!("cannot listen on {}", config.gateway.bind))?;
        listener.set_nonblocking(true)?;
        if config.trace.enabled {
            std::fs::create_dir_all(&config.trace.dir).with_context(|| {
                format!("cannot create trace dir {}", config.trace.dir.display())
            })?;
        }
        Ok(Self {
            listener,
            config: Arc::new(config),
            shutdown: Arc::new(AtomicBool::new(false)),
            next_session: Arc::new(AtomicU64::new(1)),
        })
    }

    pub fn local_addr(&self) -> std::io::Result<SocketAddr> {
        self.listener.local_addr()
    }

    /// Flag that stops the accept loop and asks every session to wind down.
    pub fn shutdown_handle(&self) -> Arc<AtomicBool> {
        self.shutdown.clone()
    }

    /// Serves until the shutdown flag is set, then waits for open sessions.
    pub fn run(self) -> anyhow::Result<()> {
        tracing::info!(addr = %self.local_addr()?, "listening");
        let mut sessions: Vec<JoinHandle<()>> = Vec::new();
        while !self.shutdown.load(Ordering::SeqCst) {
            match self.listener.accept() {
                Ok((stream, peer)) => {
                    let id = self.next_session.fetch_add(1, Ordering::SeqCst);
                    let config = self.config.clone();
                    let shutdown = self.shutdown.clone();
                    sessions.push(thread::spawn(move || {
                        tracing::info!(session = id, %peer, "session opened");
                        if let Err(e) = serve_connection(id, stream, &config, &shutdown) {
                            tracing::warn!(session = id, error = %e, "session error");
                        }
                        tracing::info!(session = id, "session closed");
                    }));
                    sessions.retain(|h| !h.is_finished());
                }
                Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(TICK),
                Err(e) => return Err(e.into()),
            }
        }
        tracing::info!(open = sessions.len(), "draining sessions");
        for handle in sessions {
            let _ = handle.join();
        }
        Ok(())
    }

    /// Runs the accept loop on a background thread.
    pub fn spawn(self) -> JoinHandle<anyhow::Result<()>> {
        thread::spawn(move || self.run())
    }
}

fn spawn_reader(stream: TcpStream) -> Receiver<Inbound> {
    let (tx, rx) = mpsc::channel();
    thread::spawn(move || {
        for line in BufReader::new(stream).lines() {
            let inbound = match line {
                Ok(l) if l.trim().is_empty() => continue,
                Ok(l) => match serde_json::from_str::<ClientMessage>(&l) {
                    Ok(msg) => Inbound::Message(msg),
                    Err(e) => Inbound::Malformed(e.to_string()),
                },
                Err(_) => break,
            };
            let stop = matches!(inbound, Inbound::Malformed(_));
            if tx.send(inbound).is_err() || stop {
                return;
            }
        }
        let _ = tx.send(Inbound::Closed);
    });
    rx
}

struct Outbound(BufWriter<TcpStream>);

impl Outbound {
    fn send_all(
        &mut self,
        messages: impl IntoIterator<Item = ServerMessage>,
    ) -> std::io::Result<()> {
        for msg in messages {
            serde_json::to_writer(&mut self.0, &msg)?;
            self.0.write_all(b"\n")?;
        }
        self.0.flush()
    }
}

fn trace_path(config: &EngineConfig, id: u64) -> Option<PathBuf> {
    config
        .trace
        .enabled
        .then(|| config.trace.dir.join(format!("session-{id}.jsonl")))
}

fn serve_connection(
    id: u64,
    stream: TcpStream,
    config: &EngineConfig,
    shutdown: &AtomicBool,
) -> anyhow::Result<()> {
    stream.set_nodelay(true)?;
    let inbox = spawn_reader(stream.try_clone()?);
    let mut out = Outbound(BufWriter::new(stream.try_clone()?));
    let close = |stream: &TcpStream| {
        let _ = stream.shutdown(std::net::Shutdown::Both);
    };

    let hello = loop {
        match inbox.recv_timeout(TICK) {
            Ok(Inbound::Message(ClientMessage::Hello { config })) => break config,
            Ok(Inbound::Message(_)) => {
                out.send_all([ServerMessage::error("hello_required", "send hello first")])?;
                close(&stream);
                return Ok(());
            }
            Ok(Inbound::Malformed(e)) => {
                out.send_all([ServerMessage::error("bad_frame", e)])?;
                close(&stream);
                return Ok(());
            }
            Ok(Inbound::Closed) | Err(RecvTimeoutError::Disconnected) => return Ok(()),
            Err(RecvTimeoutError::Timeout) if shutdown.load(Ordering::SeqCst) => {
                close(&stream);
                return Ok(());
            }
            Err(RecvTimeoutError::Timeout) => {}
        }
    };

    let mut settings = SessionSettings::from_config(config);
    settings.apply_hello(&hello);
    let mut session = match Session::new(settings) {
        Ok(s) => s,
        Err(e) => {
            out.send_all([ServerMessage::error(e.code(), e.to_string())])?;
            close(&stream);
            return Ok(());
        }
    };
    if let Some(path) = trace_path(config, id) {
        let file = std::fs::File::create(&path)
            .with_context(|| format!("cannot create {}", path.display()))?;
        session.set_trace_sink(Box::new(BufWriter::new(file)));
    }
    let real = session.settings().clock == ClockMode::Real;

    loop {
        let wait = match session.next_deadline() {
            Some(due) if real => due.saturating_since(session.now()).min(TICK),
            _ => TICK,
        };
        match inbox.recv_timeout(wait) {
            Ok(Inbound::Message(ClientMessage::Bye)) => {
                session.close();
                out.send_all(session.take_outbox())?;
                break;
            }
            Ok(Inbound::Message(msg)) => {
                if let Err(e) = session.handle_client(msg) {
                    out.send_all(session.take_outbox())?;
                    out.send_all([ServerMessage::error(e.code(), e.to_string())])?;
                }
            }
            Ok(Inbound::Malformed(e)) => {
                out.send_all(session.take_outbox())?;
                out.send_all([ServerMessage::error("bad_frame", e)])?;
                session.close();
                break;
            }
            Ok(Inbound::Closed) | Err(RecvTimeoutError::Disconnected) => {
                session.close();
                break;
            }
            Err(RecvTimeoutError::Timeout) => {
                if shutdown.load(Ordering::SeqCst) {
                    session.close();
                    out.send_all(session.take_outbox())?;
                    break;
                }
            }
        }
        if real {
            session.pump();
        }
        out.send_all(session.take_outbox())?;
    }
    close(&stream);
    Ok(())
}
