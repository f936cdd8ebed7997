//! Blocking MQTT 3.1.1 client session: QoS 1 publish, subscribe, keepalive.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpStream, ToSocketAddrs};
use std::time::{Duration, Instant};

use bytes::BytesMut;
use mqttbytes::v4::{self, Packet};
use mqttbytes::QoS;
use thiserror::Error;

use super::{Publisher, TelemetryRecord};

const MAX_PACKET: usize = 256 * 1024;

#[derive(Debug, Clone, Error, PartialEq, Eq)]
pub enum TransportError {
    #[error("cannot reach broker {addr}: {reason}")]
    Connect { addr: String, reason: String },
    #[error("broker refused connection: {0}")]
    Refused(String),
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("connection closed by broker")]
    Closed,
    #[error("i/o error: {0}")]
    Io(String),
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("link down")]
    LinkDown,
}

impl From<io::Error> for TransportError {
    fn from(e: io::Error) -> Self {
        match e.kind() {
            io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => TransportError::Timeout("broker"),
            io::ErrorKind::UnexpectedEof
            | io::ErrorKind::ConnectionReset
            | io::ErrorKind::ConnectionAborted
            | io::ErrorKind::BrokenPipe => TransportError::Closed,
            _ => TransportError::Io(e.to_string()),
        }
    }
}

#[derive(Debug, Clone)]
pub struct SessionConfig {
    pub broker: String,
    pub client_id: String,
    pub keep_alive_s: u16,
    pub connect_timeout: Duration,
    pub ack_timeout: Duration,
}

impl SessionConfig {
    pub fn new(broker: impl Into<String>, client_id: impl Into<String>) -> Self {
        SessionConfig {
            broker: broker.into(),
            client_id: client_id.into(),
            keep_alive_s: 30,
            connect_timeout: Duration::from_secs(2),
            ack_timeout: Duration::from_secs(2),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IncomingMessage {
    pub topic: String,
    pub payload: Vec<u8>,
    pub retain: bool,
}

/// One publisher-owned connection to the broker. Reconnects lazily on the
/// next operation after any transport error.
#[derive(Debug)]
pub struct BrokerSession {
    cfg: SessionConfig,
    stream: Option<TcpStream>,
    rx: BytesMut,
    next_pkid: u16,
    inbox: VecDeque<IncomingMessage>,
    subscriptions: Vec<String>,
    last_sent: Instant,
    link_up: bool,
}

impl BrokerSession {
    pub fn new(cfg: SessionConfig) -> Self {
        BrokerSession {
            cfg,
            stream: None,
            rx: BytesMut::with_capacity(4096),
            next_pkid: 0,
            inbox: VecDeque::new(),
            subscriptions: Vec::new(),
            last_sent: Instant::now(),
            link_up: true,
        }
    }

    pub fn config(&self) -> &SessionConfig {
        &self.cfg
    }

    pub fn is_connected(&self) -> bool {
        self.stream.is_some()
    }

    /// Simulates the network path going away. While down every operation
    /// fails with [`TransportError::LinkDown`].
    pub fn set_link(&mut self, up: bool) {
        if !up {
            self.stream = None;
        }
        self.link_up = up;
    }

    fn resolve(&self) -> Result<SocketAddr, TransportError> {
        self.cfg
            .broker
            .to_socket_addrs()
            .map_err(|e| TransportError::Connect {
                addr: self.cfg.broker.clone(),
                reason: e.to_string(),
            })?
            .next()
            .ok_or_else(|| TransportError::Connect {
                addr: self.cfg.broker.clone(),
                reason: "no address".into(),
            })
    }

    pub fn connect(&mut self) -> Result<(), TransportError> {
        if !self.link_up {
            return Err(TransportError::LinkDown);
        }
        if self.stream.is_some() {
            return Ok(());
        }
        let addr = self.resolve()?;
        let stream = TcpStream::connect_timeout(&addr, self.cfg.connect_timeout).map_err(|e| {
            TransportError::Connect {
                addr: self.cfg.broker.clone(),
                reason: e.to_string(),
            }
        })?;
        stream.set_nodelay(true).ok();
        self.stream = Some(stream);
        self.rx.clear();

        let mut connect = v4::Connect::new(self.cfg.client_id.clone());
        connect.keep_alive = self.cfg.keep_alive_s;
        connect.clean_session = true;
        let result = self.send(|buf| connect.write(buf)).and_then(|_| {
            let deadline = Instant::now() + self.cfg.connect_timeout;
            match self.read_until(deadline, |p| matches!(p, Packet::ConnAck(_)), "CONNACK")? {
                Packet::ConnAck(ack) if ack.code == v4::ConnectReturnCode::Success => Ok(()),
                Packet::ConnAck(ack) => Err(TransportError::Refused(format!("{:?}", ack.code))),
                _ => unreachable!(),
            }
        });
        if let Err(e) = result {
            self.stream = None;
            return Err(e);
        }
        for filter in self.subscriptions.clone() {
            if let Err(e) = self.send_subscribe(&filter) {
                self.stream = None;
                return Err(e);
            }
        }
        Ok(())
    }

    pub fn disconnect(&mut self) {
        if self.stream.is_some() {
            let _ = self.send(|buf| v4::Disconnect.write(buf));
        }
        self.stream = None;
    }

    /// QoS 1 publish; returns once the broker's PUBACK arrives.
    pub fn publish_message(&mut self, topic: &str, payload: &[u8], retain: bool) -> Result<(), TransportError> {
        self.connect()?;
        let pkid = self.alloc_pkid();
        let mut publish = v4::Publish::new(topic, QoS::AtLeastOnce, payload.to_vec());
        publish.pkid = pkid;
        publish.retain = retain;
        let result = self.send(|buf| publish.write(buf)).and_then(|_| {
            let deadline = Instant::now() + self.cfg.ack_timeout;
            self.read_until(deadline, |p| matches!(p, Packet::PubAck(a) if a.pkid == pkid), "PUBACK")
                .map(|_| ())
        });
        if result.is_err() {
            self.stream = None;
        }
        result
    }

    /// Subscribes now if connected and again on every reconnect.
    pub fn subscribe(&mut self, filter: &str) -> Result<(), TransportError> {
        if !self.subscriptions.iter().any(|f| f == filter) {
            self.subscriptions.push(filter.to_string());
        }
        self.connect()?;
        let r = self.send_subscribe(filter);
        if r.is_err() {
            self.stream = None;
        }
        r
    }

    fn send_subscribe(&mut self, filter: &str) -> Result<(), TransportError> {
        let pkid = self.alloc_pkid();
        let mut sub = v4::Subscribe::new(filter, QoS::AtLeastOnce);
        sub.pkid = pkid;
        self.send(|buf| sub.write(buf))?;
        let deadline = Instant::now() + self.cfg.ack_timeout;
        self.read_until(deadline, |p| matches!(p, Packet::SubAck(a) if a.pkid == pkid), "SUBACK")?;
        Ok(())
    }

    /// Collects messages that arrived on subscriptions, waiting up to
    /// `wait` for the first one. Sends a PINGREQ when the link is idle.
    pub fn poll(&mut self, wait: Duration) -> Result<Vec<IncomingMessage>, TransportError> {
        if self.stream.is_some() {
            let idle = Duration::from_secs(u64::from(self.cfg.keep_alive_s.max(1))) / 2;
            if self.last_sent.elapsed() >= idle {
                if let Err(e) = self.send(|buf| v4::PingReq.write(buf)) {
                    self.stream = None;
                    return Err(e);
                }
            }
            if self.inbox.is_empty() {
                let deadline = Instant::now() + wait;
                loop {
                    match self.read_packet(deadline) {
                        Ok(Some(p)) => {
                            self.dispatch(p)?;
                            if !self.inbox.is_empty() {
                                break;
                            }
                        }
                        Ok(None) => break,
                        Err(e) => {
                            self.stream = None;
                            return Err(e);
                        }
                    }
                }
            }
        }
        Ok(self.inbox.drain(..).collect())
    }

    fn alloc_pkid(&mut self) -> u16 {
        self.next_pkid = self.next_pkid.wrapping_add(1);
        if self.next_pkid == 0 {
            self.next_pkid = 1;
        }
        self.next_pkid
    }

    fn send<F>(&mut self, write: F) -> Result<(), TransportError>
    where
        F: FnOnce(&mut BytesMut) -> Result<usize, mqttbytes::Error>,
    {
        let mut buf = BytesMut::new();
        write(&mut buf).map_err(|e| TransportError::Protocol(format!("{e:?}")))?;
        let stream = self.stream.as_mut().ok_or(TransportError::Closed)?;
        stream.write_all(&buf)?;
        self.last_sent = Instant::now();
        Ok(())
    }

    /// Reads one packet, or `None` if the deadline passes first.
    fn read_packet(&mut self, deadline: Instant) -> Result<Option<Packet>, TransportError> {
        loop {
            match v4::read(&mut self.rx, MAX_PACKET) {
                Ok(p) => return Ok(Some(p)),
                Err(mqttbytes::Error::InsufficientBytes(_)) => {}
                Err(e) => return Err(TransportError::Protocol(format!("{e:?}"))),
            }
            let now = Instant::now();
            if now >= deadline {
                return Ok(None);
            }
            let stream = self.stream.as_mut().ok_or(TransportError::Closed)?;
            stream.set_read_timeout(Some((deadline - now).max(Duration::from_millis(1))))?;
            let mut chunk = [0u8; 4096];
            match stream.read(&mut chunk) {
                Ok(0) => return Err(TransportError::Closed),
                Ok(n) => self.rx.extend_from_slice(&chunk[..n]),
                Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => {
                    return Ok(None)
                }
                Err(e) => return Err(e.into()),
            }
        }
    }

    fn read_until<F>(&mut self, deadline: Instant, want: F, what: &'static str) -> Result<Packet, TransportError>
    where
        F: Fn(&Packet) -> bool,
    {
        loop {
            match self.read_packet(deadline)? {
                Some(p) if want(&p) => return Ok(p),
                Some(p) => self.dispatch(p)?,
                None => return Err(TransportError::Timeout(what)),
            }
        }
    }

    fn dispatch(&mut self, packet: Packet) -> Result<(), TransportError> {
        if let Packet::Publish(p) = packet {
            if p.qos == QoS::AtLeastOnce {
                let pkid = p.pkid;
                self.send(|buf| v4::PubAck::new(pkid).write(buf))?;
            }
            self.inbox.push_back(IncomingMessage {
                topic: p.topic,
                payload: p.payload.to_vec(),
                retain: p.retain,
            });
        }
        Ok(())
    }
}

impl Publisher for BrokerSession {
    fn publish(&mut self, record: &TelemetryRecord) -> Result<(), TransportError> {
        self.publish_message(record.topic.as_str(), &record.payload, false)
    }
}

impl Drop for BrokerSession {
    fn drop(&mut self) {
        self.disconnect();
    }
}
