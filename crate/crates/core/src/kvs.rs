//! Bootstrap key-value store.
//!
//! Writes are buffered until the next fence. A fence is a full barrier across
//! every registered process; once it completes, all writes issued before it
//! become visible to every process and the epoch counter advances.
//!
//! Two backends share the [`KvsClient`] interface: [`InProcKvs`] for
//! in-memory jobs and [`TcpKvsServer`]/[`TcpKvsClient`], a line-oriented
//! registry on localhost.

use std::collections::BTreeMap;
use std::io::{self, BufRead, BufReader, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum KvsError {
    #[error("key not found: {0}")]
    KeyNotFound(String),
    #[error("keys and values must be nonempty and contain no whitespace")]
    InvalidKey,
    #[error("kvs transport: {0}")]
    Io(#[from] io::Error),
    #[error("kvs protocol: {0}")]
    Protocol(String),
}

pub trait KvsClient {
    fn put(&mut self, key: &str, value: &str) -> Result<(), KvsError>;
    fn get(&mut self, key: &str) -> Result<String, KvsError>;
    /// Blocks until every registered process has fenced. Returns the new epoch.
    fn fence(&mut self) -> Result<u64, KvsError>;
}

fn check_token(s: &str) -> Result<(), KvsError> {
    if s.is_empty() || s.chars().any(char::is_whitespace) {
        return Err(KvsError::InvalidKey);
    }
    Ok(())
}

#[derive(Debug, Default)]
struct Store {
    committed: BTreeMap<String, String>,
    pending: BTreeMap<String, String>,
    fence_epoch: u64,
    arrived: usize,
}

#[derive(Debug)]
struct Shared {
    participants: usize,
    store: Mutex<Store>,
    cv: Condvar,
}

impl Shared {
    fn put(&self, key: &str, value: &str) -> Result<(), KvsError> {
        check_token(key)?;
        check_token(value)?;
        let mut s = self.store.lock().unwrap();
        s.pending.insert(key.to_string(), value.to_string());
        Ok(())
    }

    fn get(&self, key: &str) -> Result<String, KvsError> {
        check_token(key)?;
        let s = self.store.lock().unwrap();
        s.committed
            .get(key)
            .cloned()
            .ok_or_else(|| KvsError::KeyNotFound(key.to_string()))
    }

    fn fence(&self) -> u64 {
        let mut s = self.store.lock().unwrap();
        let epoch = s.fence_epoch;
        s.arrived += 1;
        if s.arrived == self.participants {
            let pending = std::mem::take(&mut s.pending);
            s.committed.extend(pending);
            s.arrived = 0;
            s.fence_epoch += 1;
            self.cv.notify_all();
            return s.fence_epoch;
        }
        while s.fence_epoch == epoch {
            s = self.cv.wait(s).unwrap();
        }
        epoch + 1
    }

    fn epoch(&self) -> u64 {
        self.store.lock().unwrap().fence_epoch
    }
}

/// In-memory store shared by all logical processes of a job.
#[derive(Debug, Clone)]
pub struct InProcKvs {
    shared: Arc<Shared>,
}

impl InProcKvs {
    pub fn new(participants: usize) -> Self {
        InProcKvs {
            shared: Arc::new(Shared {
                participants: participants.max(1),
                store: Mutex::new(Store::default()),
                cv: Condvar::new(),
            }),
        }
    }

    pub fn fence_epoch(&self) -> u64 {
        self.shared.epoch()
    }
}

impl KvsClient for InProcKvs {
    fn put(&mut self, key: &str, value: &str) -> Result<(), KvsError> {
        self.shared.put(key, value)
    }

    fn get(&mut self, key: &str) -> Result<String, KvsError> {
        self.shared.get(key)
    }

    fn fence(&mut self) -> Result<u64, KvsError> {
        Ok(self.shared.fence())
    }
}

/// Localhost registry speaking a line protocol:
/// `PUT k v` → `OK`, `GET k` → `VAL v` | `ERR notfound`, `FENCE` → `EPOCH n`.
pub struct TcpKvsServer {
    addr: SocketAddr,
    shared: Arc<Shared>,
    stop: Arc<AtomicBool>,
    accept: Option<JoinHandle<()>>,
}

impl TcpKvsServer {
    /// Binds an ephemeral port on 127.0.0.1.
    pub fn start(participants: usize) -> io::Result<Self> {
        let listener = TcpListener::bind("127.0.0.1:0")?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared {
            participants: participants.max(1),
            store: Mutex::new(Store::default()),
            cv: Condvar::new(),
        });
        let accept_shared = Arc::clone(&shared);
        let stop = Arc::new(AtomicBool::new(false));
        let accept_stop = Arc::clone(&stop);
        let accept = std::thread::spawn(move || {
            for stream in listener.incoming() {
                if accept_stop.load(Ordering::SeqCst) {
                    break;
                }
                let Ok(stream) = stream else { break };
                let shared = Arc::clone(&accept_shared);
                std::thread::spawn(move || {
                    let _ = serve(stream, &shared);
                });
            }
        });
        Ok(TcpKvsServer {
            addr,
            shared,
            stop,
            accept: Some(accept),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn fence_epoch(&self) -> u64 {
        self.shared.epoch()
    }
}

impl Drop for TcpKvsServer {
    fn drop(&mut self) {
        self.stop.store(true, Ordering::SeqCst);
        // wake the accept loop so it observes the flag
        let _ = TcpStream::connect(self.addr);
        if let Some(h) = self.accept.take() {
            let _ = h.join();
        }
    }
}

fn serve(stream: TcpStream, shared: &Shared) -> io::Result<()> {
    let mut writer = stream.try_clone()?;
    let reader = BufReader::new(stream);
    for line in reader.lines() {
        let line = line?;
        let mut parts = line.splitn(3, ' ');
        let reply = match (parts.next(), parts.next(), parts.next()) {
            (Some("PUT"), Some(k), Some(v)) => match shared.put(k, v) {
                Ok(()) => "OK".to_string(),
                Err(_) => "ERR invalid".to_string(),
            },
            (Some("GET"), Some(k), None) => match shared.get(k) {
                Ok(v) => format!("VAL {v}"),
                Err(_) => "ERR notfound".to_string(),
            },
            (Some("FENCE"), None, None) => format!("EPOCH {}", shared.fence()),
            (Some("BYE"), None, None) => return Ok(()),
            _ => "ERR protocol".to_string(),
        };
        writer.write_all(reply.as_bytes())?;
        writer.write_all(b"\n")?;
    }
    Ok(())
}

pub struct TcpKvsClient {
    reader: BufReader<TcpStream>,
    writer: TcpStream,
}

impl TcpKvsClient {
    pub fn connect(addr: SocketAddr) -> Result<Self, KvsError> {
        let stream = TcpStream::connect(addr)?;
        stream.set_nodelay(true)?;
        Ok(TcpKvsClient {
            reader: BufReader::new(stream.try_clone()?),
            writer: stream,
        })
    }

    fn call(&mut self, line: &str) -> Result<String, KvsError> {
        self.writer.write_all(line.as_bytes())?;
        self.writer.write_all(b"\n")?;
        let mut reply = String::new();
        if self.reader.read_line(&mut reply)? == 0 {
            return Err(KvsError::Protocol("registry closed the connection".into()));
        }
        Ok(reply.trim_end().to_string())
    }
}

impl Drop for TcpKvsClient {
    fn drop(&mut self) {
        let _ = self.writer.write_all(b"BYE\n");
    }
}

impl KvsClient for TcpKvsClient {
    fn put(&mut self, key: &str, value: &str) -> Result<(), KvsError> {
        check_token(key)?;
        check_token(value)?;
        match self.call(&format!("PUT {key} {value}"))?.as_str() {
            "OK" => Ok(()),
            other => Err(KvsError::Protocol(other.to_string())),
        }
    }

    fn get(&mut self, key: &str) -> Result<String, KvsError> {
        check_token(key)?;
        let reply = self.call(&format!("GET {key}"))?;
        if let Some(v) = reply.strip_prefix("VAL ") {
            Ok(v.to_string())
        } else if reply == "ERR notfound" {
            Err(KvsError::KeyNotFound(key.to_string()))
        } else {
            Err(KvsError::Protocol(reply))
        }
    }

    fn fence(&mut self) -> Result<u64, KvsError> {
        let reply = self.call("FENCE")?;
        reply
            .strip_prefix("EPOCH ")
            .and_then(|e| e.parse().ok())
            .ok_or(KvsError::Protocol(reply))
    }
}
