//! Message streams over TCP.

use std::io::{BufReader, BufWriter, ErrorKind, Write};
use std::net::{SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::time::Duration;

use super::wire::{read_message, write_message, Message, WireError};
use super::MeshError;

/// Listen address variable for the processing side of a split pipeline.
pub const BIND_ENV: &str = "VLP_BIND";
pub const DEFAULT_BIND: &str = "127.0.0.1:0";

/// `VLP_BIND` if set, otherwise an ephemeral loopback port.
pub fn bind_address() -> String {
    std::env::var(BIND_ENV).ok().filter(|s| !s.trim().is_empty()).unwrap_or_else(|| DEFAULT_BIND.to_string())
}

pub fn listen(addr: &str) -> Result<(TcpListener, SocketAddr), MeshError> {
    let listener = TcpListener::bind(addr)?;
    let local = listener.local_addr()?;
    Ok((listener, local))
}

pub struct TcpSender {
    writer: BufWriter<TcpStream>,
    pub bytes: u64,
}

impl TcpSender {
    pub fn send(&mut self, msg: &Message) -> Result<usize, MeshError> {
        let n = write_message(&mut self.writer, msg)?;
        self.bytes += n as u64;
        Ok(n)
    }

    /// Sends an already encoded message.
    pub fn send_bytes(&mut self, bytes: &[u8]) -> Result<(), MeshError> {
        self.writer.write_all(bytes)?;
        self.writer.flush()?;
        self.bytes += bytes.len() as u64;
        Ok(())
    }
}

pub struct TcpReceiver {
    reader: BufReader<TcpStream>,
    pub bytes: u64,
}

impl TcpReceiver {
    /// Next message, or `None` once the peer closed the connection.
    pub fn recv(&mut self) -> Result<Option<Message>, MeshError> {
        match read_message(&mut self.reader) {
            Ok(got) => Ok(got.map(|(m, n)| {
                self.bytes += n as u64;
                m
            })),
            Err(WireError::Io(e)) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                Err(MeshError::Timeout)
            }
            Err(e) => Err(e.into()),
        }
    }

    pub fn set_timeout(&mut self, timeout: Option<Duration>) -> Result<(), MeshError> {
        self.reader.get_ref().set_read_timeout(timeout)?;
        Ok(())
    }
}

/// Splits a connected stream into independent send and receive halves.
pub fn split(stream: TcpStream) -> Result<(TcpSender, TcpReceiver), MeshError> {
    stream.set_nodelay(true)?;
    let read_half = stream.try_clone()?;
    Ok((
        TcpSender { writer: BufWriter::with_capacity(1 << 16, stream), bytes: 0 },
        TcpReceiver { reader: BufReader::with_capacity(1 << 16, read_half), bytes: 0 },
    ))
}

pub fn connect<A: ToSocketAddrs>(addr: A) -> Result<(TcpSender, TcpReceiver), MeshError> {
    split(TcpStream::connect(addr)?)
}
