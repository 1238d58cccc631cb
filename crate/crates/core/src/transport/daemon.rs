//! Echo responders behind a UDP socket.
//!
//! Each datagram is `[8-byte big-endian virtual address][ICMP echo bytes]`.
//! One daemon emulates any number of virtual devices; a reply goes back to
//! the sending peer with the same address prefix. Malformed frames are
//! dropped silently.

use std::collections::HashMap;
use std::io::{self, ErrorKind};
use std::net::{SocketAddr, ToSocketAddrs, UdpSocket};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::Arc;
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{DeviceAddress, Delivered, EchoTransport, TransportError};
use crate::responder::{handle_datagram, ResponderBehavior};

pub const PREFIX_LEN: usize = 8;
const MAX_DATAGRAM: usize = 65_536;
/// Requested socket buffer size; the kernel may clamp it.
const SOCKET_BUFFER: usize = 4 << 20;

/// Best effort: bursts of small datagrams overflow default buffers long
/// before bandwidth is an issue.
fn enlarge_buffers(socket: &UdpSocket) {
    let s = socket2::SockRef::from(socket);
    let _ = s.set_recv_buffer_size(SOCKET_BUFFER);
    let _ = s.set_send_buffer_size(SOCKET_BUFFER);
}

pub fn frame(address: DeviceAddress, icmp: &[u8]) -> Vec<u8> {
    let mut buf = Vec::with_capacity(PREFIX_LEN + icmp.len());
    buf.extend_from_slice(&address.0.to_be_bytes());
    buf.extend_from_slice(icmp);
    buf
}

pub fn unframe(buf: &[u8]) -> Option<(DeviceAddress, &[u8])> {
    if buf.len() < PREFIX_LEN {
        return None;
    }
    let (head, rest) = buf.split_at(PREFIX_LEN);
    let address = u64::from_be_bytes(head.try_into().ok()?);
    Some((DeviceAddress(address), rest))
}

/// Behavior per virtual address. Addresses without an explicit entry are
/// split by `validating:non_validating` ratio on `address mod (v + nv)`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BehaviorMap {
    explicit: HashMap<DeviceAddress, ResponderBehavior>,
    validating: u32,
    non_validating: u32,
}

impl BehaviorMap {
    pub fn new(validating: u32, non_validating: u32) -> Self {
        BehaviorMap {
            explicit: HashMap::new(),
            validating,
            non_validating,
        }
    }

    pub fn all(behavior: ResponderBehavior) -> Self {
        match behavior {
            ResponderBehavior::Validating => BehaviorMap::new(1, 0),
            ResponderBehavior::NonValidating => BehaviorMap::new(0, 1),
        }
    }

    pub fn insert(&mut self, address: DeviceAddress, behavior: ResponderBehavior) {
        self.explicit.insert(address, behavior);
    }

    pub fn behavior_for(&self, address: DeviceAddress) -> ResponderBehavior {
        if let Some(&b) = self.explicit.get(&address) {
            return b;
        }
        let total = (self.validating + self.non_validating).max(1) as u64;
        if address.0 % total < self.validating as u64 {
            ResponderBehavior::Validating
        } else {
            ResponderBehavior::NonValidating
        }
    }
}

impl Default for BehaviorMap {
    fn default() -> Self {
        BehaviorMap::new(1, 0)
    }
}

/// Parses a `V:NV` ratio such as `3:1`.
pub fn parse_mix(s: &str) -> Result<(u32, u32), String> {
    let (v, nv) = s
        .split_once(':')
        .ok_or_else(|| format!("behavior mix `{s}` is not of the form V:NV"))?;
    let v: u32 = v.trim().parse().map_err(|e| format!("bad V in `{s}`: {e}"))?;
    let nv: u32 = nv.trim().parse().map_err(|e| format!("bad NV in `{s}`: {e}"))?;
    if v + nv == 0 {
        return Err("behavior mix must not be 0:0".into());
    }
    Ok((v, nv))
}

/// Answers one framed datagram.
pub fn handle_frame(buf: &[u8], behaviors: &BehaviorMap) -> Option<Vec<u8>> {
    let (address, icmp) = unframe(buf)?;
    let reply = handle_datagram(icmp, behaviors.behavior_for(address))?;
    Some(frame(address, &reply))
}

/// A running daemon. Dropping the handle stops the workers.
#[derive(Debug)]
pub struct DaemonHandle {
    local_addr: SocketAddr,
    stop: Arc<AtomicBool>,
    answered: Arc<AtomicU64>,
    workers: Vec<JoinHandle<io::Result<()>>>,
}

impl DaemonHandle {
    pub fn local_addr(&self) -> SocketAddr {
        self.local_addr
    }

    pub fn answered(&self) -> u64 {
        self.answered.load(Ordering::Relaxed)
    }

    /// Stops all workers and returns the number of replies sent.
    pub fn stop(mut self) -> io::Result<u64> {
        self.shutdown()?;
        Ok(self.answered())
    }

    fn shutdown(&mut self) -> io::Result<()> {
        self.stop.store(true, Ordering::Relaxed);
        for w in self.workers.drain(..) {
            w.join()
                .map_err(|_| io::Error::other("daemon worker panicked"))??;
        }
        Ok(())
    }
}

impl Drop for DaemonHandle {
    fn drop(&mut self) {
        let _ = self.shutdown();
    }
}

/// Binds `addr` and serves on `workers` threads sharing the socket.
pub fn spawn<A: ToSocketAddrs>(
    addr: A,
    behaviors: BehaviorMap,
    workers: usize,
) -> Result<DaemonHandle, TransportError> {
    let socket = UdpSocket::bind(addr)?;
    enlarge_buffers(&socket);
    socket.set_read_timeout(Some(Duration::from_millis(50)))?;
    let local_addr = socket.local_addr()?;
    let stop = Arc::new(AtomicBool::new(false));
    let answered = Arc::new(AtomicU64::new(0));
    let behaviors = Arc::new(behaviors);
    let mut handles = Vec::with_capacity(workers.max(1));
    for _ in 0..workers.max(1) {
        let socket = socket.try_clone()?;
        let stop = Arc::clone(&stop);
        let answered = Arc::clone(&answered);
        let behaviors = Arc::clone(&behaviors);
        handles.push(std::thread::spawn(move || {
            serve_loop(&socket, &behaviors, &stop, &answered)
        }));
    }
    Ok(DaemonHandle {
        local_addr,
        stop,
        answered,
        workers: handles,
    })
}

/// Blocking server loop; returns once `stop` is set.
pub fn serve_loop(
    socket: &UdpSocket,
    behaviors: &BehaviorMap,
    stop: &AtomicBool,
    answered: &AtomicU64,
) -> io::Result<()> {
    let mut buf = vec![0u8; MAX_DATAGRAM];
    while !stop.load(Ordering::Relaxed) {
        let (n, peer) = match socket.recv_from(&mut buf) {
            Ok(x) => x,
            Err(e) if is_timeout(&e) => continue,
            Err(e) if e.kind() == ErrorKind::ConnectionReset => continue,
            Err(e) => return Err(e),
        };
        if let Some(reply) = handle_frame(&buf[..n], behaviors) {
            match socket.send_to(&reply, peer) {
                Ok(_) => {
                    answered.fetch_add(1, Ordering::Relaxed);
                }
                // an unreliable channel: a failed send is a lost reply
                Err(e) if is_timeout(&e) => {}
                Err(_) => {}
            }
        }
    }
    Ok(())
}

fn is_timeout(e: &io::Error) -> bool {
    matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut)
}

/// Client side of the daemon protocol, usable as an [`EchoTransport`] on
/// wall-clock time.
#[derive(Debug)]
pub struct UdpEchoClient {
    socket: UdpSocket,
    start: Instant,
    buf: Vec<u8>,
    sent: u64,
}

impl UdpEchoClient {
    pub fn connect<A: ToSocketAddrs>(daemon: A) -> Result<Self, TransportError> {
        let target = daemon
            .to_socket_addrs()?
            .next()
            .ok_or_else(|| io::Error::new(ErrorKind::InvalidInput, "no daemon address"))?;
        let bind: SocketAddr = if target.is_ipv4() {
            "0.0.0.0:0".parse().expect("literal")
        } else {
            "[::]:0".parse().expect("literal")
        };
        let socket = UdpSocket::bind(bind)?;
        enlarge_buffers(&socket);
        socket.connect(target)?;
        Ok(UdpEchoClient {
            socket,
            start: Instant::now(),
            buf: vec![0u8; MAX_DATAGRAM],
            sent: 0,
        })
    }

    pub fn sent(&self) -> u64 {
        self.sent
    }

    fn recv_one(&mut self, timeout: Option<Duration>) -> io::Result<Option<Delivered>> {
        match timeout {
            Some(t) => {
                self.socket.set_nonblocking(false)?;
                self.socket.set_read_timeout(Some(t.max(Duration::from_micros(1))))?;
            }
            None => self.socket.set_nonblocking(true)?,
        }
        loop {
            match self.socket.recv(&mut self.buf) {
                Ok(n) => {
                    let at_us = self.now_us();
                    if let Some((address, icmp)) = unframe(&self.buf[..n]) {
                        return Ok(Some(Delivered {
                            address,
                            payload: icmp.to_vec(),
                            at_us,
                        }));
                    }
                }
                Err(e) if is_timeout(&e) => return Ok(None),
                Err(e) if e.kind() == ErrorKind::ConnectionRefused => return Ok(None),
                Err(e) => return Err(e),
            }
        }
    }
}

impl EchoTransport for UdpEchoClient {
    fn now_us(&self) -> u64 {
        self.start.elapsed().as_micros() as u64
    }

    fn send_request(&mut self, address: DeviceAddress, bytes: &[u8]) -> Result<(), TransportError> {
        match self.socket.send(&frame(address, bytes)) {
            Ok(_) => {}
            // the channel is allowed to lose datagrams
            Err(e) if is_timeout(&e) || e.kind() == ErrorKind::ConnectionRefused => {}
            Err(e) => return Err(e.into()),
        }
        self.sent += 1;
        Ok(())
    }

    fn wait_for_replies(&mut self, deadline_us: u64) -> Vec<Delivered> {
        let mut out = Vec::new();
        let now = self.now_us();
        let first = if deadline_us > now {
            self.recv_one(Some(Duration::from_micros(deadline_us - now)))
        } else {
            self.recv_one(None)
        };
        match first {
            Ok(Some(d)) => out.push(d),
            _ => return out,
        }
        while let Ok(Some(d)) = self.recv_one(None) {
            out.push(d);
        }
        out
    }

    fn pause(&mut self, delta_us: u64) {
        if delta_us > 0 {
            std::thread::sleep(Duration::from_micros(delta_us));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn framing_roundtrip() {
        let f = frame(DeviceAddress(0x0102_0304_0506_0708), &[8, 0, 1, 2]);
        assert_eq!(&f[..8], &[1, 2, 3, 4, 5, 6, 7, 8]);
        assert_eq!(unframe(&f), Some((DeviceAddress(0x0102_0304_0506_0708), &[8, 0, 1, 2][..])));
        assert_eq!(unframe(&[1, 2, 3]), None);
    }

    #[test]
    fn mix_parsing_and_assignment() {
        assert_eq!(parse_mix("3:1"), Ok((3, 1)));
        assert!(parse_mix("3").is_err());
        assert!(parse_mix("0:0").is_err());
        let mut map = BehaviorMap::new(3, 1);
        assert_eq!(map.behavior_for(DeviceAddress(2)), ResponderBehavior::Validating);
        assert_eq!(map.behavior_for(DeviceAddress(3)), ResponderBehavior::NonValidating);
        map.insert(DeviceAddress(3), ResponderBehavior::Validating);
        assert_eq!(map.behavior_for(DeviceAddress(3)), ResponderBehavior::Validating);
    }

    #[test]
    fn malformed_prefix_dropped() {
        assert_eq!(handle_frame(&[0, 1, 2], &BehaviorMap::default()), None);
    }
}
