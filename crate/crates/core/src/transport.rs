//! Request/response transports for line-delimited services.
//!
//! A request is one line of text and so is its response. The same codec runs
//! over every transport: in-process, TCP, and the simulated network in
//! [`crate::sim`].

use std::io::{BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use thiserror::Error;

/// A service that answers one request line with one response line.
pub trait LineService: Send {
    fn handle_line(&mut self, line: &str) -> String;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum TransportError {
    /// The request was not delivered.
    #[error("unreachable: {0}")]
    Unreachable(String),
    /// The request may have been processed but no response arrived.
    #[error("connection lost: {0}")]
    Lost(String),
}

pub trait Transport: Send {
    fn call(&mut self, request: &str) -> Result<String, TransportError>;
}

impl<T: Transport + ?Sized> Transport for Box<T> {
    fn call(&mut self, request: &str) -> Result<String, TransportError> {
        (**self).call(request)
    }
}

pub type Shared<S> = Arc<Mutex<S>>;

pub fn shared<S>(service: S) -> Shared<S> {
    Arc::new(Mutex::new(service))
}

/// Direct in-process calls. Every request still goes through the text codec.
pub struct LocalTransport<S> {
    service: Shared<S>,
}

impl<S> LocalTransport<S> {
    pub fn new(service: Shared<S>) -> Self {
        LocalTransport { service }
    }
}

impl<S> Clone for LocalTransport<S> {
    fn clone(&self) -> Self {
        LocalTransport { service: self.service.clone() }
    }
}

impl<S: LineService> Transport for LocalTransport<S> {
    fn call(&mut self, request: &str) -> Result<String, TransportError> {
        let mut guard = self.service.lock().map_err(|_| TransportError::Unreachable("service poisoned".into()))?;
        Ok(guard.handle_line(request))
    }
}

/// Blocking TCP client. Connects lazily and reconnects after a failure.
pub struct TcpTransport {
    addr: SocketAddr,
    conn: Option<(BufReader<TcpStream>, TcpStream)>,
    timeout: Duration,
}

impl TcpTransport {
    pub fn new(addr: impl ToSocketAddrs) -> std::io::Result<Self> {
        let addr = addr
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "no address"))?;
        Ok(TcpTransport { addr, conn: None, timeout: Duration::from_secs(30) })
    }

    fn connect(&mut self) -> Result<&mut (BufReader<TcpStream>, TcpStream), TransportError> {
        if self.conn.is_none() {
            let stream = TcpStream::connect_timeout(&self.addr, self.timeout)
                .map_err(|e| TransportError::Unreachable(format!("{}: {e}", self.addr)))?;
            stream.set_read_timeout(Some(self.timeout)).ok();
            stream.set_nodelay(true).ok();
            let reader = BufReader::new(stream.try_clone().map_err(|e| TransportError::Unreachable(e.to_string()))?);
            self.conn = Some((reader, stream));
        }
        Ok(self.conn.as_mut().expect("just connected"))
    }
}

impl Transport for TcpTransport {
    fn call(&mut self, request: &str) -> Result<String, TransportError> {
        let (reader, writer) = self.connect()?;
        let mut out = Vec::with_capacity(request.len() + 1);
        out.extend_from_slice(request.as_bytes());
        out.push(b'\n');
        if let Err(e) = writer.write_all(&out) {
            self.conn = None;
            return Err(TransportError::Unreachable(e.to_string()));
        }
        let mut line = String::new();
        match reader.read_line(&mut line) {
            Ok(0) => {
                self.conn = None;
                Err(TransportError::Lost("connection closed".into()))
            }
            Ok(_) => {
                while line.ends_with('\n') || line.ends_with('\r') {
                    line.pop();
                }
                Ok(line)
            }
            Err(e) => {
                self.conn = None;
                Err(TransportError::Lost(e.to_string()))
            }
        }
    }
}
