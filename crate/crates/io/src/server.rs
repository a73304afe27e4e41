//! TCP publisher with one bounded queue and writer thread per subscriber.
//!
//! A subscriber connects and sends two bytes: its topic mask and delivery
//! mode (0 lossy, 1 lossless). The server answers one status byte (0 on
//! success) and then streams frames. Lossy queues drop their oldest frame
//! when full and announce each gap with a heartbeat carrying the running
//! drop count; lossless queues make the publisher wait. Every stream ends
//! with a final heartbeat.

use std::collections::VecDeque;
use std::io::{ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::wire::{encode, HeartbeatMsg, StreamDecoder, WireError, WireMessage, TOPIC_ALL};

pub const STATUS_OK: u8 = 0;
pub const STATUS_EMPTY_MASK: u8 = 1;
pub const STATUS_BAD_DELIVERY: u8 = 2;

#[derive(Debug, Error)]
pub enum ServerError {
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("subscriber {id} vanished: {reason}")]
    SubscriberVanished { id: usize, reason: String },
    #[error("handshake rejected with status {0}")]
    Rejected(u8),
    #[error(transparent)]
    Wire(#[from] WireError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Delivery {
    /// Drop-oldest with gap heartbeats.
    Lossy,
    /// Publisher waits for queue space.
    Lossless,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubscriberPolicy {
    pub topic_mask: u8,
    pub delivery: Delivery,
}

impl SubscriberPolicy {
    fn handshake(self) -> [u8; 2] {
        [self.topic_mask, matches!(self.delivery, Delivery::Lossless) as u8]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ServerConfig {
    pub lossy_queue: usize,
    /// Lossless queue length at which the publisher blocks.
    pub lossless_high_water: usize,
    pub handshake_timeout_ms: u64,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            lossy_queue: 16,
            lossless_high_water: 256,
            handshake_timeout_ms: 5000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubscriberSummary {
    pub id: usize,
    pub policy: SubscriberPolicy,
    pub delivered: u64,
    pub dropped: u64,
    pub vanished: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct RunSummary {
    pub published: u64,
    pub subscribers: Vec<SubscriberSummary>,
}

#[derive(Default)]
struct QueueState {
    frames: VecDeque<Arc<[u8]>>,
    gap_pending: bool,
    dropped: u64,
    delivered: u64,
    heartbeats: u64,
    closed: bool,
    vanished: bool,
}

struct SubQueue {
    id: usize,
    policy: SubscriberPolicy,
    capacity: usize,
    state: Mutex<QueueState>,
    cv: Condvar,
}

impl SubQueue {
    fn push(&self, frame: &Arc<[u8]>) {
        let mut s = self.state.lock().unwrap();
        match self.policy.delivery {
            Delivery::Lossy => {
                if s.vanished {
                    return;
                }
                if s.frames.len() >= self.capacity {
                    s.frames.pop_front();
                    s.dropped += 1;
                    s.gap_pending = true;
                }
            }
            Delivery::Lossless => {
                while s.frames.len() >= self.capacity && !s.vanished {
                    s = self.cv.wait(s).unwrap();
                }
                if s.vanished {
                    return;
                }
            }
        }
        s.frames.push_back(frame.clone());
        self.cv.notify_all();
    }

    fn heartbeat(s: &mut QueueState) -> Vec<u8> {
        s.heartbeats += 1;
        encode(&WireMessage::Heartbeat(HeartbeatMsg {
            sequence: s.heartbeats,
            dropped: s.dropped,
        }))
    }

    fn run_writer(&self, mut stream: TcpStream) {
        loop {
            let (heartbeat, frame) = {
                let mut s = self.state.lock().unwrap();
                while s.frames.is_empty() && !s.closed {
                    s = self.cv.wait(s).unwrap();
                }
                match s.frames.pop_front() {
                    Some(f) => {
                        let hb = std::mem::take(&mut s.gap_pending).then(|| Self::heartbeat(&mut s));
                        self.cv.notify_all();
                        (hb, Some(f))
                    }
                    None => (Some(Self::heartbeat(&mut s)), None),
                }
            };
            let result = heartbeat
                .map_or(Ok(()), |hb| stream.write_all(&hb))
                .and_then(|_| frame.as_ref().map_or(Ok(()), |f| stream.write_all(f)));
            let mut s = self.state.lock().unwrap();
            if let Err(e) = result {
                let err = ServerError::SubscriberVanished {
                    id: self.id,
                    reason: e.to_string(),
                };
                log::warn!("{err}");
                s.vanished = true;
                s.frames.clear();
                self.cv.notify_all();
                return;
            }
            match frame {
                Some(_) => s.delivered += 1,
                None => break,
            }
        }
        let _ = stream.flush();
        let _ = stream.shutdown(Shutdown::Write);
    }

    fn summary(&self) -> SubscriberSummary {
        let s = self.state.lock().unwrap();
        SubscriberSummary {
            id: self.id,
            policy: self.policy,
            delivered: s.delivered,
            dropped: s.dropped,
            vanished: s.vanished,
        }
    }
}

#[derive(Default)]
struct Registry {
    queues: Vec<Arc<SubQueue>>,
    writers: Vec<JoinHandle<()>>,
}

pub struct PubSubServer {
    addr: SocketAddr,
    registry: Arc<Mutex<Registry>>,
    stop: Arc<AtomicBool>,
    acceptor: Option<JoinHandle<()>>,
    published: u64,
}

fn handshake(stream: &mut TcpStream, cfg: &ServerConfig) -> std::io::Result<Result<SubscriberPolicy, u8>> {
    stream.set_nonblocking(false)?;
    stream.set_read_timeout(Some(Duration::from_millis(cfg.handshake_timeout_ms)))?;
    let mut hs = [0u8; 2];
    stream.read_exact(&mut hs)?;
    stream.set_read_timeout(None)?;
    let status = if hs[0] & TOPIC_ALL == 0 {
        STATUS_EMPTY_MASK
    } else if hs[1] > 1 {
        STATUS_BAD_DELIVERY
    } else {
        STATUS_OK
    };
    stream.write_all(&[status])?;
    Ok(if status == STATUS_OK {
        Ok(SubscriberPolicy {
            topic_mask: hs[0] & TOPIC_ALL,
            delivery: if hs[1] == 1 { Delivery::Lossless } else { Delivery::Lossy },
        })
    } else {
        Err(status)
    })
}

impl PubSubServer {
    pub fn bind<A: ToSocketAddrs>(addr: A, cfg: ServerConfig) -> Result<Self, ServerError> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let registry = Arc::new(Mutex::new(Registry::default()));
        let stop = Arc::new(AtomicBool::new(false));
        let acceptor = {
            let (registry, stop) = (registry.clone(), stop.clone());
            std::thread::spawn(move || {
                while !stop.load(Ordering::Relaxed) {
                    match listener.accept() {
                        Ok((mut stream, peer)) => match handshake(&mut stream, &cfg) {
                            Ok(Ok(policy)) => {
                                let _ = stream.set_nodelay(true);
                                let mut reg = registry.lock().unwrap();
                                let capacity = match policy.delivery {
                                    Delivery::Lossy => cfg.lossy_queue.max(1),
                                    Delivery::Lossless => cfg.lossless_high_water.max(1),
                                };
                                let queue = Arc::new(SubQueue {
                                    id: reg.queues.len(),
                                    policy,
                                    capacity,
                                    state: Mutex::new(QueueState::default()),
                                    cv: Condvar::new(),
                                });
                                log::info!("subscriber {} from {peer}: {policy:?}", queue.id);
                                let q = queue.clone();
                                reg.writers.push(std::thread::spawn(move || q.run_writer(stream)));
                                reg.queues.push(queue);
                            }
                            Ok(Err(status)) => log::warn!("rejected subscriber {peer}: status {status}"),
                            Err(e) => log::warn!("handshake with {peer} failed: {e}"),
                        },
                        Err(e) if e.kind() == ErrorKind::WouldBlock => std::thread::sleep(Duration::from_millis(2)),
                        Err(e) => log::warn!("accept failed: {e}"),
                    }
                }
            })
        };
        Ok(Self {
            addr,
            registry,
            stop,
            acceptor: Some(acceptor),
            published: 0,
        })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn subscriber_count(&self) -> usize {
        self.registry.lock().unwrap().queues.len()
    }

    /// Waits until `n` subscribers have completed the handshake.
    pub fn wait_for_subscribers(&self, n: usize, timeout: Duration) -> bool {
        let start = Instant::now();
        while self.subscriber_count() < n {
            if start.elapsed() > timeout {
                return false;
            }
            std::thread::sleep(Duration::from_millis(2));
        }
        true
    }

    /// Queues `msg` for every subscriber of its topic, blocking on full
    /// lossless queues.
    pub fn publish(&mut self, msg: &WireMessage) {
        let frame: Arc<[u8]> = encode(msg).into();
        let bit = msg.msg_type().topic_bit();
        let queues: Vec<Arc<SubQueue>> = self.registry.lock().unwrap().queues.clone();
        for q in queues.iter().filter(|q| bit == 0 || q.policy.topic_mask & bit != 0) {
            q.push(&frame);
        }
        self.published += 1;
    }

    /// Drains all queues, closes every connection and reports counts.
    pub fn finish(mut self) -> RunSummary {
        self.shutdown();
        let reg = self.registry.lock().unwrap();
        RunSummary {
            published: self.published,
            subscribers: reg.queues.iter().map(|q| q.summary()).collect(),
        }
    }

    fn shutdown(&mut self) {
        self.stop.store(true, Ordering::Relaxed);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        let writers = {
            let mut reg = self.registry.lock().unwrap();
            for q in &reg.queues {
                q.state.lock().unwrap().closed = true;
                q.cv.notify_all();
            }
            std::mem::take(&mut reg.writers)
        };
        for w in writers {
            let _ = w.join();
        }
    }
}

impl Drop for PubSubServer {
    fn drop(&mut self) {
        self.shutdown();
    }
}

/// Publishes `messages` in order and closes the run.
pub fn publish_run<I: IntoIterator<Item = WireMessage>>(mut server: PubSubServer, messages: I) -> RunSummary {
    for m in messages {
        server.publish(&m);
    }
    server.finish()
}

/// Client side of a subscription.
pub struct Subscriber {
    stream: TcpStream,
    decoder: StreamDecoder,
    buf: Vec<u8>,
}

impl Subscriber {
    pub fn connect<A: ToSocketAddrs>(addr: A, policy: SubscriberPolicy) -> Result<Self, ServerError> {
        let mut stream = TcpStream::connect(addr)?;
        stream.write_all(&policy.handshake())?;
        let mut status = [0u8; 1];
        stream.read_exact(&mut status)?;
        if status[0] != STATUS_OK {
            return Err(ServerError::Rejected(status[0]));
        }
        Ok(Self {
            stream,
            decoder: StreamDecoder::new(),
            buf: vec![0; 64 * 1024],
        })
    }

    /// Next message, `None` once the server has closed the stream.
    pub fn recv(&mut self) -> Result<Option<WireMessage>, ServerError> {
        loop {
            if let Some(m) = self.decoder.next_message()? {
                return Ok(Some(m));
            }
            let n = self.stream.read(&mut self.buf)?;
            if n == 0 {
                return if self.decoder.buffered() == 0 {
                    Ok(None)
                } else {
                    Err(WireError::Truncated {
                        needed: self.decoder.buffered() + 1,
                        have: self.decoder.buffered(),
                    }
                    .into())
                };
            }
            self.decoder.push(&self.buf[..n]);
        }
    }
}
