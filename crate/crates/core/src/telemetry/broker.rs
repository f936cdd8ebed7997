//! In-process MQTT 3.1.1 broker stub with scripted faults.
//!
//! Good enough for a LAN of one device and a dashboard: CONNECT, QoS 0/1
//! PUBLISH, SUBSCRIBE with `+`/`#` filters, retained messages and PING.
//! Every PUBLISH it accepts is appended to an inspectable log.

use std::collections::HashMap;
use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, Condvar, Mutex};
use std::thread::{self, JoinHandle};
use std::time::{Duration, Instant};

use bytes::BytesMut;
use mqttbytes::v4::{self, Packet};
use mqttbytes::QoS;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LoggedPublish {
    pub client_id: String,
    pub topic: String,
    pub payload: Vec<u8>,
    pub retain: bool,
    pub dup: bool,
}

/// Scripted misbehaviour, consumed in order as publishes arrive.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BrokerFault {
    /// Accept `n` more publishes, then drop the connection on the next one
    /// and refuse connections until [`StubBroker::heal`].
    FailAfter(usize),
    /// Close the connection as soon as the first byte of the next publish
    /// arrives; the publish is neither logged nor acked.
    DropMidPublish,
    /// Log the next publish but close before sending its PUBACK, so a
    /// retrying client produces a duplicate.
    DropBeforeAck,
}

#[derive(Debug)]
struct Client {
    id: u64,
    writer: Mutex<TcpStream>,
    filters: Mutex<Vec<String>>,
}

#[derive(Debug, Default)]
struct Shared {
    log: Mutex<Vec<LoggedPublish>>,
    log_changed: Condvar,
    retained: Mutex<HashMap<String, Vec<u8>>>,
    clients: Mutex<Vec<Arc<Client>>>,
    faults: Mutex<Vec<BrokerFault>>,
    accepted_since_fault: Mutex<usize>,
    down: AtomicBool,
    shutdown: AtomicBool,
    next_client: AtomicU64,
    connections: AtomicU64,
}

/// Handle to a running stub broker. Shuts down on drop.
#[derive(Debug)]
pub struct StubBroker {
    addr: SocketAddr,
    shared: Arc<Shared>,
    acceptor: Option<JoinHandle<()>>,
}

pub(crate) fn topic_matches(filter: &str, topic: &str) -> bool {
    let mut f = filter.split('/');
    let mut t = topic.split('/');
    loop {
        match (f.next(), t.next()) {
            (Some("#"), _) => return true,
            (Some("+"), Some(_)) => {}
            (Some(a), Some(b)) if a == b => {}
            (None, None) => return true,
            _ => return false,
        }
    }
}

impl StubBroker {
    /// Starts on `127.0.0.1` with an ephemeral port.
    pub fn start() -> io::Result<Self> {
        Self::bind("127.0.0.1:0")
    }

    pub fn bind(addr: &str) -> io::Result<Self> {
        let listener = TcpListener::bind(addr)?;
        listener.set_nonblocking(true)?;
        let addr = listener.local_addr()?;
        let shared = Arc::new(Shared::default());
        let s = Arc::clone(&shared);
        let acceptor = thread::Builder::new()
            .name("stub-broker".into())
            .spawn(move || accept_loop(listener, s))?;
        Ok(StubBroker {
            addr,
            shared,
            acceptor: Some(acceptor),
        })
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    /// Every publish accepted so far, in arrival order.
    pub fn log(&self) -> Vec<LoggedPublish> {
        self.shared.log.lock().unwrap().clone()
    }

    pub fn messages_on(&self, topic: &str) -> Vec<Vec<u8>> {
        self.log()
            .into_iter()
            .filter(|m| m.topic == topic)
            .map(|m| m.payload)
            .collect()
    }

    pub fn retained(&self, topic: &str) -> Option<Vec<u8>> {
        self.shared.retained.lock().unwrap().get(topic).cloned()
    }

    /// Blocks until the log holds at least `n` entries or `timeout` passes.
    pub fn wait_for_count(&self, n: usize, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut log = self.shared.log.lock().unwrap();
        while log.len() < n {
            let now = Instant::now();
            if now >= deadline {
                return false;
            }
            log = self.shared.log_changed.wait_timeout(log, deadline - now).unwrap().0;
        }
        true
    }

    /// Total connections accepted while up.
    pub fn connection_count(&self) -> u64 {
        self.shared.connections.load(Ordering::SeqCst)
    }

    pub fn script(&self, fault: BrokerFault) {
        self.shared.faults.lock().unwrap().push(fault);
        *self.shared.accepted_since_fault.lock().unwrap() = 0;
    }

    /// Drops every client and refuses new connections.
    pub fn take_down(&self) {
        self.shared.down.store(true, Ordering::SeqCst);
        let clients = std::mem::take(&mut *self.shared.clients.lock().unwrap());
        for c in clients {
            let _ = c.writer.lock().unwrap().shutdown(Shutdown::Both);
        }
    }

    /// Accepts connections again and clears pending faults.
    pub fn heal(&self) {
        self.shared.faults.lock().unwrap().clear();
        self.shared.down.store(false, Ordering::SeqCst);
    }

    pub fn is_down(&self) -> bool {
        self.shared.down.load(Ordering::SeqCst)
    }

    /// Publishes from the broker side, as another client would.
    pub fn inject(&self, topic: &str, payload: &[u8], retain: bool) {
        route(&self.shared, topic, payload, retain);
    }
}

impl Drop for StubBroker {
    fn drop(&mut self) {
        self.shared.shutdown.store(true, Ordering::SeqCst);
        self.take_down();
        if let Some(h) = self.acceptor.take() {
            let _ = h.join();
        }
    }
}

fn accept_loop(listener: TcpListener, shared: Arc<Shared>) {
    while !shared.shutdown.load(Ordering::SeqCst) {
        match listener.accept() {
            Ok((stream, _)) => {
                if shared.down.load(Ordering::SeqCst) {
                    drop(stream);
                    continue;
                }
                shared.connections.fetch_add(1, Ordering::SeqCst);
                let s = Arc::clone(&shared);
                let _ = thread::Builder::new()
                    .name("stub-broker-conn".into())
                    .spawn(move || {
                        if let Err(e) = serve(stream, &s) {
                            log::debug!("stub broker connection ended: {e}");
                        }
                    });
            }
            Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                thread::sleep(Duration::from_millis(2));
            }
            Err(e) => {
                log::warn!("stub broker accept failed: {e}");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn write_packet<F>(stream: &Mutex<TcpStream>, f: F) -> io::Result<()>
where
    F: FnOnce(&mut BytesMut) -> Result<usize, mqttbytes::Error>,
{
    let mut buf = BytesMut::new();
    f(&mut buf).map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("{e:?}")))?;
    stream.lock().unwrap().write_all(&buf)
}

fn route(shared: &Shared, topic: &str, payload: &[u8], retain: bool) {
    if retain {
        let mut retained = shared.retained.lock().unwrap();
        if payload.is_empty() {
            retained.remove(topic);
        } else {
            retained.insert(topic.to_string(), payload.to_vec());
        }
    }
    let clients = shared.clients.lock().unwrap().clone();
    for c in clients {
        let wants = c.filters.lock().unwrap().iter().any(|f| topic_matches(f, topic));
        if wants {
            let out = v4::Publish::new(topic, QoS::AtMostOnce, payload.to_vec());
            let _ = write_packet(&c.writer, |b| out.write(b));
        }
    }
}

enum Verdict {
    Proceed,
    DropNow,
    DropAfterLog,
}

fn next_verdict(shared: &Shared) -> Verdict {
    let mut faults = shared.faults.lock().unwrap();
    let Some(&fault) = faults.first() else {
        return Verdict::Proceed;
    };
    match fault {
        BrokerFault::FailAfter(n) => {
            let mut accepted = shared.accepted_since_fault.lock().unwrap();
            if *accepted < n {
                *accepted += 1;
                Verdict::Proceed
            } else {
                faults.remove(0);
                *accepted = 0;
                shared.down.store(true, Ordering::SeqCst);
                Verdict::DropNow
            }
        }
        BrokerFault::DropMidPublish => {
            faults.remove(0);
            Verdict::DropNow
        }
        BrokerFault::DropBeforeAck => {
            faults.remove(0);
            Verdict::DropAfterLog
        }
    }
}

fn serve(stream: TcpStream, shared: &Arc<Shared>) -> io::Result<()> {
    stream.set_nodelay(true).ok();
    stream.set_read_timeout(Some(Duration::from_millis(50)))?;
    let mut reader = stream.try_clone()?;
    let client = Arc::new(Client {
        id: shared.next_client.fetch_add(1, Ordering::SeqCst),
        writer: Mutex::new(stream),
        filters: Mutex::new(Vec::new()),
    });
    let result = serve_client(&mut reader, &client, shared);
    shared.clients.lock().unwrap().retain(|c| c.id != client.id);
    let _ = reader.shutdown(Shutdown::Both);
    result
}

fn serve_client(reader: &mut TcpStream, client: &Arc<Client>, shared: &Arc<Shared>) -> io::Result<()> {
    let mut buf = BytesMut::with_capacity(4096);
    let mut client_id: Option<String> = None;
    let mut chunk = [0u8; 4096];
    loop {
        if shared.shutdown.load(Ordering::SeqCst) {
            return Ok(());
        }
        // A publish is recognisable from its first byte; faults that cut
        // the connection mid-packet act before the rest is parsed.
        if client_id.is_some() && buf.first().is_some_and(|b| b >> 4 == 3) {
            if let Verdict::DropNow = peek_fault(shared) {
                return Ok(());
            }
        }
        let packet = match v4::read(&mut buf, 256 * 1024) {
            Ok(p) => p,
            Err(mqttbytes::Error::InsufficientBytes(_)) => {
                match reader.read(&mut chunk) {
                    Ok(0) => return Ok(()),
                    Ok(n) => buf.extend_from_slice(&chunk[..n]),
                    Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {}
                    Err(e) => return Err(e),
                }
                continue;
            }
            Err(e) => {
                return Err(io::Error::new(io::ErrorKind::InvalidData, format!("{e:?}")));
            }
        };
        match packet {
            Packet::Connect(c) if client_id.is_none() => {
                client_id = Some(c.client_id);
                write_packet(&client.writer, |b| {
                    v4::ConnAck::new(v4::ConnectReturnCode::Success, false).write(b)
                })?;
                shared.clients.lock().unwrap().push(Arc::clone(client));
            }
            _ if client_id.is_none() => return Ok(()),
            Packet::Publish(p) => {
                let drop_after = matches!(take_fault(shared), Verdict::DropAfterLog);
                {
                    let mut log = shared.log.lock().unwrap();
                    log.push(LoggedPublish {
                        client_id: client_id.clone().unwrap_or_default(),
                        topic: p.topic.clone(),
                        payload: p.payload.to_vec(),
                        retain: p.retain,
                        dup: p.dup,
                    });
                    shared.log_changed.notify_all();
                }
                route(shared, &p.topic, &p.payload, p.retain);
                if drop_after {
                    return Ok(());
                }
                if p.qos != QoS::AtMostOnce {
                    write_packet(&client.writer, |b| v4::PubAck::new(p.pkid).write(b))?;
                }
            }
            Packet::Subscribe(s) => {
                let codes = s
                    .filters
                    .iter()
                    .map(|f| {
                        let granted = if f.qos == QoS::AtMostOnce { QoS::AtMostOnce } else { QoS::AtLeastOnce };
                        v4::SubscribeReasonCode::Success(granted)
                    })
                    .collect();
                write_packet(&client.writer, |b| v4::SubAck::new(s.pkid, codes).write(b))?;
                let retained = shared.retained.lock().unwrap().clone();
                for f in &s.filters {
                    client.filters.lock().unwrap().push(f.path.clone());
                    for (topic, payload) in retained.iter().filter(|(t, _)| topic_matches(&f.path, t)) {
                        let mut out = v4::Publish::new(topic.clone(), QoS::AtMostOnce, payload.clone());
                        out.retain = true;
                        write_packet(&client.writer, |b| out.write(b))?;
                    }
                }
            }
            Packet::PingReq => write_packet(&client.writer, |b| v4::PingResp.write(b))?,
            Packet::Disconnect => return Ok(()),
            _ => {}
        }
    }
}

// Peeks at the fault queue for faults that fire before parsing.
fn peek_fault(shared: &Shared) -> Verdict {
    let first = shared.faults.lock().unwrap().first().copied();
    match first {
        Some(BrokerFault::DropMidPublish) => next_verdict(shared),
        Some(BrokerFault::FailAfter(n)) if *shared.accepted_since_fault.lock().unwrap() >= n => {
            next_verdict(shared)
        }
        _ => Verdict::Proceed,
    }
}

// Consumes the fault decision for a fully parsed publish.
fn take_fault(shared: &Shared) -> Verdict {
    let first = shared.faults.lock().unwrap().first().copied();
    match first {
        Some(BrokerFault::FailAfter(_)) | Some(BrokerFault::DropBeforeAck) => next_verdict(shared),
        _ => Verdict::Proceed,
    }
}
