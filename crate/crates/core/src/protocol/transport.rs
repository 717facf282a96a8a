//! Byte-stream transports carrying newline-delimited envelopes.

use std::io::{BufRead, BufReader, ErrorKind, Read, Write};
use std::net::{TcpListener, TcpStream, ToSocketAddrs};
use std::sync::mpsc::{channel, Receiver, RecvTimeoutError, Sender};
use std::time::Duration;

use super::{decode_envelope, encode_envelope, Envelope, ProtocolError};

/// Frames longer than this are refused.
pub const MAX_FRAME_BYTES: usize = 64 * 1024 * 1024;

pub const DEFAULT_ENGINE_ADDR: &str = "127.0.0.1:7878";

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("connection closed")]
    Closed,
    #[error("timed out waiting for a frame")]
    Timeout,
    #[error("transport i/o error: {0}")]
    Io(String),
    #[error(transparent)]
    Protocol(#[from] ProtocolError),
}

pub trait Connection: Send {
    fn send_line(&mut self, line: &str) -> Result<(), TransportError>;
    /// Next raw line without its terminator. `None` timeout blocks.
    fn recv_line(&mut self, timeout: Option<Duration>) -> Result<String, TransportError>;

    fn send(&mut self, env: &Envelope) -> Result<(), TransportError> {
        let line = encode_envelope(env)?;
        self.send_line(&line)
    }

    fn recv(&mut self, timeout: Option<Duration>) -> Result<Envelope, TransportError> {
        let line = self.recv_line(timeout)?;
        Ok(decode_envelope(&line)?)
    }
}

/// In-process connection end. Created in pairs by [`memory_pair`].
pub struct MemoryConnection {
    tx: Sender<String>,
    rx: Receiver<String>,
}

pub fn memory_pair() -> (MemoryConnection, MemoryConnection) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (MemoryConnection { tx: a_tx, rx: a_rx }, MemoryConnection { tx: b_tx, rx: b_rx })
}

impl Connection for MemoryConnection {
    fn send_line(&mut self, line: &str) -> Result<(), TransportError> {
        self.tx.send(line.to_string()).map_err(|_| TransportError::Closed)
    }

    fn recv_line(&mut self, timeout: Option<Duration>) -> Result<String, TransportError> {
        match timeout {
            None => self.rx.recv().map_err(|_| TransportError::Closed),
            Some(t) => self.rx.recv_timeout(t).map_err(|e| match e {
                RecvTimeoutError::Timeout => TransportError::Timeout,
                RecvTimeoutError::Disconnected => TransportError::Closed,
            }),
        }
    }
}

pub struct TcpConnection {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
    pending: Vec<u8>,
}

impl TcpConnection {
    pub fn new(stream: TcpStream) -> std::io::Result<Self> {
        stream.set_nodelay(true)?;
        let writer = stream.try_clone()?;
        Ok(TcpConnection { reader: BufReader::new(stream), writer, pending: Vec::new() })
    }

    pub fn connect(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        Self::new(TcpStream::connect(addr)?)
    }
}

impl Connection for TcpConnection {
    fn send_line(&mut self, line: &str) -> Result<(), TransportError> {
        if line.contains('\n') {
            return Err(ProtocolError::Invalid("frame contains a newline".into()).into());
        }
        let io = |e: std::io::Error| TransportError::Io(e.to_string());
        self.writer.write_all(line.as_bytes()).map_err(io)?;
        self.writer.write_all(b"\n").map_err(io)?;
        self.writer.flush().map_err(io)
    }

    fn recv_line(&mut self, timeout: Option<Duration>) -> Result<String, TransportError> {
        self.reader.get_ref().set_read_timeout(timeout).map_err(|e| TransportError::Io(e.to_string()))?;
        loop {
            let limit = (MAX_FRAME_BYTES + 1).saturating_sub(self.pending.len()) as u64;
            match Read::take(&mut self.reader, limit).read_until(b'\n', &mut self.pending) {
                Ok(_) if self.pending.ends_with(b"\n") => {
                    let mut line = std::mem::take(&mut self.pending);
                    line.pop();
                    if line.ends_with(b"\r") {
                        line.pop();
                    }
                    return String::from_utf8(line)
                        .map_err(|e| ProtocolError::Invalid(format!("frame is not UTF-8: {e}")).into());
                }
                Ok(_) if self.pending.len() > MAX_FRAME_BYTES => {
                    self.pending.clear();
                    return Err(ProtocolError::Invalid("frame too large".into()).into());
                }
                Ok(_) => return Err(TransportError::Closed),
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Err(TransportError::Timeout)
                }
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) => return Err(TransportError::Io(e.to_string())),
            }
        }
    }
}

/// Accepts tool connections on `POSY_ENGINE_ADDR`.
pub struct EngineListener {
    listener: TcpListener,
}

impl EngineListener {
    pub fn bind(addr: &str) -> std::io::Result<Self> {
        Ok(EngineListener { listener: TcpListener::bind(addr)? })
    }

    pub fn from_env() -> std::io::Result<Self> {
        let addr = std::env::var("POSY_ENGINE_ADDR").unwrap_or_else(|_| DEFAULT_ENGINE_ADDR.to_string());
        Self::bind(&addr)
    }

    pub fn local_addr(&self) -> std::io::Result<std::net::SocketAddr> {
        self.listener.local_addr()
    }

    pub fn accept(&self) -> std::io::Result<TcpConnection> {
        let (stream, _) = self.listener.accept()?;
        TcpConnection::new(stream)
    }

    /// Polls for a connection until `timeout`; `None` when nobody came.
    pub fn accept_timeout(&self, timeout: Duration) -> std::io::Result<Option<TcpConnection>> {
        self.listener.set_nonblocking(true)?;
        let deadline = std::time::Instant::now() + timeout;
        let res = loop {
            match self.listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    break TcpConnection::new(stream).map(Some);
                }
                Err(e) if e.kind() == ErrorKind::WouldBlock => {
                    if std::time::Instant::now() >= deadline {
                        break Ok(None);
                    }
                    std::thread::sleep(Duration::from_millis(10));
                }
                Err(e) => break Err(e),
            }
        };
        self.listener.set_nonblocking(false)?;
        res
    }
}
