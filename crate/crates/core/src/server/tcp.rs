use std::io::{self, BufRead, BufReader, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Mutex};
use std::thread::{self, JoinHandle};

use tracing::{debug, info, warn};

use super::protocol::{ErrorCode, WireMessage};
use super::MusicService;

pub const DEFAULT_PORT: u16 = 7474;
const MAX_LINE_BYTES: u64 = 1 << 20;

/// A running TCP front end. Dropping it does not stop the server; call
/// [`ServerHandle::shutdown`].
pub struct ServerHandle {
    addr: SocketAddr,
    service: MusicService,
    stopping: Arc<AtomicBool>,
    connections: Arc<Mutex<Vec<TcpStream>>>,
    acceptor: Option<JoinHandle<()>>,
}

impl ServerHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn service(&self) -> &MusicService {
        &self.service
    }

    /// Stops accepting, closes open connections and stops the workers.
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        if self.stopping.swap(true, Ordering::SeqCst) {
            return;
        }
        // wake the blocking accept
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
        for c in self.connections.lock().unwrap_or_else(|e| e.into_inner()).drain(..) {
            let _ = c.shutdown(std::net::Shutdown::Both);
        }
        self.service.shutdown();
    }

    /// Blocks until the accept loop ends.
    pub fn join(mut self) {
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn connection(service: MusicService, stream: TcpStream) -> io::Result<()> {
    let peer = stream.peer_addr()?;
    stream.set_nodelay(true)?;
    debug!(%peer, "client connected");
    let mut writer = stream.try_clone()?;
    let mut reader = BufReader::new(stream);
    let mut line = String::new();
    loop {
        line.clear();
        let n = reader.by_ref().take(MAX_LINE_BYTES).read_line(&mut line)?;
        if n == 0 {
            break;
        }
        if !line.ends_with('\n') && n as u64 >= MAX_LINE_BYTES {
            let reply = WireMessage::error(ErrorCode::BadRequest, "record too long");
            writer.write_all(format!("{}\n", reply.to_line()).as_bytes())?;
            break;
        }
        if line.trim().is_empty() {
            continue;
        }
        let reply = service.handle_line(&line);
        writer.write_all(format!("{}\n", reply.to_line()).as_bytes())?;
    }
    debug!(%peer, "client gone");
    Ok(())
}

/// Binds `addr` and serves newline-delimited JSON, one thread per
/// connection. Records on one connection are answered in order.
pub fn serve(service: MusicService, addr: impl ToSocketAddrs) -> io::Result<ServerHandle> {
    let listener = TcpListener::bind(addr)?;
    let addr = listener.local_addr()?;
    let stopping = Arc::new(AtomicBool::new(false));
    let connections = Arc::new(Mutex::new(Vec::new()));
    let acceptor = {
        let (service, stopping, connections) = (service.clone(), stopping.clone(), connections.clone());
        thread::Builder::new().name("accept".into()).spawn(move || {
            for stream in listener.incoming() {
                if stopping.load(Ordering::SeqCst) {
                    break;
                }
                let stream = match stream {
                    Ok(s) => s,
                    Err(e) => {
                        warn!(error = %e, "accept failed");
                        continue;
                    }
                };
                if let Ok(clone) = stream.try_clone() {
                    connections.lock().unwrap_or_else(|e| e.into_inner()).push(clone);
                }
                let service = service.clone();
                let _ = thread::Builder::new().name("client".into()).spawn(move || {
                    if let Err(e) = connection(service, stream) {
                        debug!(error = %e, "connection ended with an error");
                    }
                });
            }
        })?
    };
    info!(%addr, "listening");
    Ok(ServerHandle {
        addr,
        service,
        stopping,
        connections,
        acceptor: Some(acceptor),
    })
}
