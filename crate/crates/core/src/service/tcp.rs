//! Thread-per-connection TCP front end for any [`LineService`]. All
//! connections share one service behind a mutex, so each request executes
//! atomically.

use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::thread::{self, JoinHandle};

use tracing::{debug, warn};

use crate::transport::{LineService, Shared};

pub struct ServerHandle {
    addr: SocketAddr,
    stop: Arc<AtomicBool>,
    thread: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    /// Stops accepting connections and waits for the accept loop to end.
    pub fn stop(mut self) {
        self.shutdown();
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // Wake the blocking accept.
        TcpStream::connect(self.addr).ok();
        if let Some(t) = self.thread.take() {
            t.join().ok();
        }
    }
}

impl Drop for ServerHandle {
    fn drop(&mut self) {
        if self.thread.is_some() {
            self.shutdown();
        }
    }
}

/// Binds `addr` and serves in a background thread.
pub fn spawn<S: LineService + 'static>(addr: impl ToSocketAddrs, service: Shared<S>) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let flag = stop.clone();
    let thread = thread::spawn(move || accept_loop(listener, service, flag));
    Ok(ServerHandle { addr, stop, thread: Some(thread) })
}

fn accept_loop<S: LineService + 'static>(listener: TcpListener, service: Shared<S>, stop: Arc<AtomicBool>) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        match conn {
            Ok(stream) => {
                let svc = service.clone();
                thread::spawn(move || {
                    if let Err(e) = serve_connection(stream, svc) {
                        debug!(error = %e, "connection closed");
                    }
                });
            }
            Err(e) => warn!(error = %e, "accept failed"),
        }
    }
}

fn serve_connection<S: LineService>(stream: TcpStream, service: Shared<S>) -> io::Result<()> {
    stream.set_nodelay(true).ok();
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let mut reply = {
            let mut guard = service.lock().map_err(|_| io::Error::other("service poisoned"))?;
            guard.handle_line(&line)
        };
        reply.push('\n');
        writer.write_all(reply.as_bytes())?;
    }
    Ok(())
}
