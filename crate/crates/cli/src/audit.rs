//! Connection audits read from `/proc`: which sockets a process holds, whom
//! they talk to and whether any of them listens.

use std::collections::HashSet;
use std::fs;
use std::io;
use std::net::{IpAddr, Ipv4Addr, Ipv6Addr, SocketAddr};

use serde::Serialize;

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct SocketEntry {
    pub protocol: &'static str,
    pub local: SocketAddr,
    pub remote: SocketAddr,
    pub state: String,
}

impl SocketEntry {
    pub fn is_listening(&self) -> bool {
        self.protocol.starts_with("tcp") && self.state == "LISTEN"
    }

    fn is_unconnected(&self) -> bool {
        self.remote.ip().is_unspecified() && self.remote.port() == 0
    }
}

fn tcp_state(code: &str) -> String {
    match code {
        "01" => "ESTABLISHED",
        "02" => "SYN_SENT",
        "03" => "SYN_RECV",
        "04" => "FIN_WAIT1",
        "05" => "FIN_WAIT2",
        "06" => "TIME_WAIT",
        "07" => "CLOSE",
        "08" => "CLOSE_WAIT",
        "09" => "LAST_ACK",
        "0A" => "LISTEN",
        "0B" => "CLOSING",
        other => other,
    }
    .to_string()
}

/// Decodes `/proc/net` address notation: the address in host-order 32-bit
/// words, then the port.
fn parse_addr(field: &str) -> Option<SocketAddr> {
    let (ip_hex, port_hex) = field.split_once(':')?;
    let port = u16::from_str_radix(port_hex, 16).ok()?;
    let word = |s: &str| u32::from_str_radix(s, 16).ok().map(|w| w.to_ne_bytes());
    let ip = match ip_hex.len() {
        8 => IpAddr::V4(Ipv4Addr::from(word(ip_hex)?)),
        32 => {
            let mut bytes = [0u8; 16];
            for i in 0..4 {
                bytes[i * 4..i * 4 + 4].copy_from_slice(&word(&ip_hex[i * 8..i * 8 + 8])?);
            }
            let v6 = Ipv6Addr::from(bytes);
            v6.to_ipv4_mapped().map(IpAddr::V4).unwrap_or(IpAddr::V6(v6))
        }
        _ => return None,
    };
    Some(SocketAddr::new(ip, port))
}

fn socket_inodes(pid: u32) -> io::Result<HashSet<u64>> {
    let mut out = HashSet::new();
    for entry in fs::read_dir(format!("/proc/{pid}/fd"))? {
        let Ok(entry) = entry else { continue };
        let Ok(target) = fs::read_link(entry.path()) else { continue };
        let target = target.to_string_lossy();
        if let Some(inode) = target.strip_prefix("socket:[").and_then(|s| s.strip_suffix(']')) {
            if let Ok(n) = inode.parse() {
                out.insert(n);
            }
        }
    }
    Ok(out)
}

/// Every TCP and UDP socket held by `pid`.
pub fn process_sockets(pid: u32) -> io::Result<Vec<SocketEntry>> {
    let inodes = socket_inodes(pid)?;
    let mut out = Vec::new();
    for protocol in ["tcp", "tcp6", "udp", "udp6"] {
        let Ok(table) = fs::read_to_string(format!("/proc/{pid}/net/{protocol}")) else { continue };
        for line in table.lines().skip(1) {
            let cols: Vec<&str> = line.split_whitespace().collect();
            if cols.len() < 10 {
                continue;
            }
            let Ok(inode) = cols[9].parse::<u64>() else { continue };
            if !inodes.contains(&inode) {
                continue;
            }
            let (Some(local), Some(remote)) = (parse_addr(cols[1]), parse_addr(cols[2])) else { continue };
            let state = if protocol.starts_with("tcp") { tcp_state(cols[3]) } else { cols[3].to_string() };
            out.push(SocketEntry { protocol, local, remote, state });
        }
    }
    Ok(out)
}

/// Accumulated findings over repeated samples of one process.
#[derive(Debug, Clone, Default, Serialize)]
pub struct ConnectionAudit {
    pub samples: u64,
    pub sockets_seen: u64,
    pub violations: Vec<SocketEntry>,
}

impl ConnectionAudit {
    pub fn passed(&self) -> bool {
        self.samples > 0 && self.violations.is_empty()
    }

    fn record(&mut self, sockets: Vec<SocketEntry>, bad: impl Fn(&SocketEntry) -> bool) {
        self.samples += 1;
        self.sockets_seen += sockets.len() as u64;
        for s in sockets {
            if bad(&s) && !self.violations.contains(&s) {
                self.violations.push(s);
            }
        }
    }

    /// An execution-side process: no listeners, and every connection goes to
    /// `server`.
    pub fn sample_outbound_only(&mut self, pid: u32, server: SocketAddr) -> io::Result<()> {
        let sockets = process_sockets(pid)?;
        self.record(sockets, |s| s.is_listening() || (!s.is_unconnected() && s.remote != server));
        Ok(())
    }

    /// The service process: it listens on `bind` and every other socket is a
    /// connection accepted on that port.
    pub fn sample_inbound_only(&mut self, pid: u32, bind: SocketAddr) -> io::Result<()> {
        let sockets = process_sockets(pid)?;
        self.record(sockets, |s| {
            if s.is_listening() {
                s.local.port() != bind.port()
            } else {
                !s.is_unconnected() && s.local.port() != bind.port()
            }
        });
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::{TcpListener, TcpStream};

    #[test]
    fn decodes_proc_addresses() {
        assert_eq!(parse_addr("0100007F:1F90").unwrap(), "127.0.0.1:8080".parse().unwrap());
        assert_eq!(
            parse_addr("0000000000000000FFFF00000100007F:0050").unwrap(),
            "127.0.0.1:80".parse().unwrap()
        );
        assert_eq!(parse_addr("00000000000000000000000001000000:0016").unwrap(), "[::1]:22".parse().unwrap());
        assert!(parse_addr("zz").is_none());
    }

    #[test]
    fn sees_own_listener_and_connection() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let _client = TcpStream::connect(addr).unwrap();
        let (_served, _) = listener.accept().unwrap();
        let pid = std::process::id();
        let sockets = process_sockets(pid).unwrap();
        assert!(sockets.iter().any(|s| s.is_listening() && s.local == addr));
        assert!(sockets.iter().any(|s| s.remote == addr && s.state == "ESTABLISHED"));

        let mut outbound = ConnectionAudit::default();
        outbound.sample_outbound_only(pid, addr).unwrap();
        assert!(!outbound.passed(), "a listener is a violation for an outbound-only process");
        let mut inbound = ConnectionAudit::default();
        inbound.sample_inbound_only(pid, addr).unwrap();
        assert!(inbound.violations.iter().all(|s| s.local.port() != addr.port()));
    }
}
