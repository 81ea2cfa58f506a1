//! Byte transports for one hop between two roles. A hop carries whole
//! frames; the frame bytes are identical whichever transport carries them.

use std::collections::VecDeque;
use std::io::{self, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::Duration;

use thiserror::Error;

#[derive(Debug, Error)]
pub enum TransportError {
    #[error("transport I/O error: {0}")]
    Io(#[from] io::Error),
}

/// One direction of one hop.
pub trait Link: Send {
    /// Sends `bytes` (or nothing, when the frame was dropped in flight) and
    /// returns what the far end received, or `None` if nothing arrived
    /// before the receive timeout.
    fn carry(&mut self, bytes: Option<Vec<u8>>) -> Result<Option<Vec<u8>>, TransportError>;

    fn kind(&self) -> &'static str;
}

/// Ordered in-process queue; deterministic and instantaneous.
#[derive(Debug, Default)]
pub struct MemoryLink {
    queue: VecDeque<Vec<u8>>,
}

impl Link for MemoryLink {
    fn carry(&mut self, bytes: Option<Vec<u8>>) -> Result<Option<Vec<u8>>, TransportError> {
        self.queue.extend(bytes);
        Ok(self.queue.pop_front())
    }

    fn kind(&self) -> &'static str {
        "memory"
    }
}

/// A loopback TCP connection. Frames travel with a 4-byte big-endian
/// length prefix so a corrupted frame header cannot desynchronise the
/// stream.
#[derive(Debug)]
pub struct TcpLink {
    writer: TcpStream,
    reader: TcpStream,
}

impl TcpLink {
    /// Listens on `addr` (port 0 picks a free one) and connects to it.
    pub fn bind(addr: SocketAddr, timeout: Duration) -> Result<Self, TransportError> {
        let listener = TcpListener::bind(addr)?;
        let writer = TcpStream::connect(listener.local_addr()?)?;
        let (reader, _) = listener.accept()?;
        reader.set_read_timeout(Some(timeout))?;
        writer.set_nodelay(true)?;
        Ok(Self { writer, reader })
    }

    pub fn local_addr(&self) -> io::Result<SocketAddr> {
        self.reader.local_addr()
    }
}

impl Link for TcpLink {
    fn carry(&mut self, bytes: Option<Vec<u8>>) -> Result<Option<Vec<u8>>, TransportError> {
        let Some(bytes) = bytes else { return TcpLink::receive_from(&mut self.reader) };
        let len =
            u32::try_from(bytes.len()).map_err(|_| io::Error::new(io::ErrorKind::InvalidInput, "frame over 4 GiB"))?;
        let writer = &mut self.writer;
        let reader = &mut self.reader;
        // Write on a helper thread so frames larger than the socket buffers
        // cannot deadlock against the reader.
        std::thread::scope(|s| {
            let w = s.spawn(move || -> io::Result<()> {
                writer.write_all(&len.to_be_bytes())?;
                writer.write_all(&bytes)?;
                writer.flush()
            });
            let got = TcpLink::receive_from(reader);
            w.join().expect("writer thread panicked")?;
            got
        })
    }

    fn kind(&self) -> &'static str {
        "tcp"
    }
}

impl TcpLink {
    fn receive_from(reader: &mut TcpStream) -> Result<Option<Vec<u8>>, TransportError> {
        let mut len = [0u8; 4];
        match reader.read_exact(&mut len) {
            Ok(()) => {}
            Err(e) if matches!(e.kind(), io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut) => return Ok(None),
            Err(e) => return Err(e.into()),
        }
        let mut buf = vec![0u8; u32::from_be_bytes(len) as usize];
        reader.read_exact(&mut buf)?;
        Ok(Some(buf))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn memory_link_is_fifo_and_drops_cleanly() {
        let mut l = MemoryLink::default();
        assert_eq!(l.carry(Some(vec![1, 2])).unwrap(), Some(vec![1, 2]));
        assert_eq!(l.carry(None).unwrap(), None);
    }

    #[test]
    fn tcp_link_carries_large_frames_and_times_out() {
        let mut l = TcpLink::bind("127.0.0.1:0".parse().unwrap(), Duration::from_millis(100)).unwrap();
        let big: Vec<u8> = (0..3_000_000u32).map(|i| i as u8).collect();
        assert_eq!(l.carry(Some(big.clone())).unwrap(), Some(big));
        assert_eq!(l.carry(Some(vec![])).unwrap(), Some(vec![]));
        assert_eq!(l.carry(None).unwrap(), None);
    }
}
