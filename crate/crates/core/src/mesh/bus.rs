//! In-process topics and services.

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::mpsc;
use std::sync::{Arc, Condvar, Mutex, Weak};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::wire::{Body, Header, Kind, Message};
use super::MeshError;

/// Queue depth used for image topics: the newest frame wins.
pub const IMAGE_DEPTH: usize = 1;

#[derive(Default)]
struct SlotState {
    queue: VecDeque<Arc<Message>>,
    dropped: u64,
    closed: bool,
}

struct Slot {
    depth: usize,
    state: Mutex<SlotState>,
    ready: Condvar,
}

impl Slot {
    fn push(&self, msg: Arc<Message>) {
        let mut st = self.state.lock().expect("slot lock");
        st.queue.push_back(msg);
        while st.queue.len() > self.depth {
            st.queue.pop_front();
            st.dropped += 1;
        }
        self.ready.notify_all();
    }

    fn close(&self) {
        self.state.lock().expect("slot lock").closed = true;
        self.ready.notify_all();
    }
}

type ServiceTx = mpsc::Sender<(Message, mpsc::Sender<Message>)>;

#[derive(Default)]
struct BusInner {
    topics: HashMap<String, Vec<Weak<Slot>>>,
    services: HashMap<String, ServiceTx>,
}

/// Broker shared by all nodes of one process.
#[derive(Clone, Default)]
pub struct Bus {
    inner: Arc<Mutex<BusInner>>,
    next_request: Arc<AtomicU32>,
}

impl Bus {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn advertise(&self, topic: &str) -> Publisher {
        self.inner.lock().expect("bus lock").topics.entry(topic.to_string()).or_default();
        Publisher { bus: self.clone(), topic: topic.to_string(), seq: 0, last_ts: 0 }
    }

    /// Subscribes with a bounded queue; on overflow the oldest message is
    /// dropped and counted.
    pub fn subscribe(&self, topic: &str, depth: usize) -> Subscription {
        let slot = Arc::new(Slot { depth: depth.max(1), state: Mutex::default(), ready: Condvar::new() });
        self.inner
            .lock()
            .expect("bus lock")
            .topics
            .entry(topic.to_string())
            .or_default()
            .push(Arc::downgrade(&slot));
        Subscription { slot }
    }

    fn deliver(&self, topic: &str, msg: Arc<Message>) {
        let slots: Vec<Arc<Slot>> = {
            let mut inner = self.inner.lock().expect("bus lock");
            let list = inner.topics.entry(topic.to_string()).or_default();
            list.retain(|w| w.strong_count() > 0);
            list.iter().filter_map(Weak::upgrade).collect()
        };
        for s in slots {
            s.push(Arc::clone(&msg));
        }
    }

    /// Wakes every subscriber of `topic` with a closed error once its queue
    /// is drained.
    pub fn close_topic(&self, topic: &str) {
        let inner = self.inner.lock().expect("bus lock");
        if let Some(list) = inner.topics.get(topic) {
            list.iter().filter_map(Weak::upgrade).for_each(|s| s.close());
        }
    }

    /// Runs `handler` on its own thread for every request to `name`. The
    /// thread exits once the bus drops the service or `shutdown` is called.
    pub fn serve<F>(&self, name: &str, mut handler: F) -> ServiceHandle
    where
        F: FnMut(&Message) -> Body + Send + 'static,
    {
        let (tx, rx) = mpsc::channel::<(Message, mpsc::Sender<Message>)>();
        self.inner.lock().expect("bus lock").services.insert(name.to_string(), tx);
        let service = name.to_string();
        let thread = std::thread::Builder::new()
            .name(format!("srv-{name}"))
            .spawn(move || {
                for (req, reply) in rx {
                    let body = handler(&req);
                    let resp = Message {
                        kind: Kind::Response,
                        header: Header {
                            name: service.clone(),
                            seq: req.header.seq,
                            timestamp_ns: req.header.timestamp_ns,
                        },
                        body,
                    };
                    // The caller may have timed out and gone away.
                    let _ = reply.send(resp);
                }
            })
            .expect("spawn service thread");
        ServiceHandle { bus: self.clone(), name: name.to_string(), thread: Some(thread) }
    }

    /// Synchronous request/reply correlated by request id.
    pub fn call(&self, name: &str, body: Body, timeout: Duration) -> Result<Body, MeshError> {
        let tx = self
            .inner
            .lock()
            .expect("bus lock")
            .services
            .get(name)
            .cloned()
            .ok_or_else(|| MeshError::UnknownService(name.to_string()))?;
        let id = self.next_request.fetch_add(1, Ordering::Relaxed);
        let req = Message {
            kind: Kind::Request,
            header: Header { name: name.to_string(), seq: id, timestamp_ns: 0 },
            body,
        };
        let (rtx, rrx) = mpsc::channel();
        tx.send((req, rtx)).map_err(|_| MeshError::Closed)?;
        let deadline = Instant::now() + timeout;
        loop {
            let left = deadline.saturating_duration_since(Instant::now());
            match rrx.recv_timeout(left) {
                Ok(resp) if resp.header.seq == id => return Ok(resp.body),
                Ok(_) => continue,
                Err(mpsc::RecvTimeoutError::Timeout) => return Err(MeshError::Timeout),
                Err(mpsc::RecvTimeoutError::Disconnected) => return Err(MeshError::Closed),
            }
        }
    }

    fn unregister(&self, name: &str) {
        self.inner.lock().expect("bus lock").services.remove(name);
    }
}

/// Owns a service thread; stops it on drop.
pub struct ServiceHandle {
    bus: Bus,
    name: String,
    thread: Option<JoinHandle<()>>,
}

impl ServiceHandle {
    pub fn shutdown(mut self) {
        self.stop();
    }

    fn stop(&mut self) {
        self.bus.unregister(&self.name);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
    }
}

impl Drop for ServiceHandle {
    fn drop(&mut self) {
        self.stop();
    }
}

pub struct Publisher {
    bus: Bus,
    topic: String,
    seq: u32,
    last_ts: u64,
}

impl Publisher {
    /// Publishes with the next sequence number. Timestamps are clamped so
    /// they never go backwards.
    pub fn publish(&mut self, timestamp_ns: u64, body: Body) -> Arc<Message> {
        self.last_ts = self.last_ts.max(timestamp_ns);
        let msg = Arc::new(Message::topic(&self.topic, self.seq, self.last_ts, body));
        self.seq = self.seq.wrapping_add(1);
        self.bus.deliver(&self.topic, Arc::clone(&msg));
        msg
    }

    /// Forwards a message received elsewhere, keeping its header.
    pub fn forward(&mut self, msg: Message) -> Arc<Message> {
        let msg = Arc::new(msg);
        self.bus.deliver(&self.topic, Arc::clone(&msg));
        msg
    }

    pub fn topic(&self) -> &str {
        &self.topic
    }

    pub fn next_seq(&self) -> u32 {
        self.seq
    }
}

pub struct Subscription {
    slot: Arc<Slot>,
}

impl Subscription {
    pub fn recv_timeout(&self, timeout: Duration) -> Result<Arc<Message>, MeshError> {
        let deadline = Instant::now() + timeout;
        let mut st = self.slot.state.lock().expect("slot lock");
        loop {
            if let Some(m) = st.queue.pop_front() {
                return Ok(m);
            }
            if st.closed {
                return Err(MeshError::Closed);
            }
            let left = deadline.saturating_duration_since(Instant::now());
            if left.is_zero() {
                return Err(MeshError::Timeout);
            }
            st = self.slot.ready.wait_timeout(st, left).expect("slot lock").0;
        }
    }

    pub fn try_recv(&self) -> Option<Arc<Message>> {
        self.slot.state.lock().expect("slot lock").queue.pop_front()
    }

    /// Messages discarded because the queue was full.
    pub fn dropped(&self) -> u64 {
        self.slot.state.lock().expect("slot lock").dropped
    }
}
