//! Byte-stream connections: TCP or an in-process pipe.

use std::io::{self, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::sync::{Arc, Mutex};

/// One end of an in-process duplex pipe.
#[derive(Debug)]
pub struct MemEnd {
    tx: Sender<Vec<u8>>,
    rx: Arc<Mutex<Receiver<Vec<u8>>>>,
    // sender into our own inbound queue, used to wake a blocked reader on shutdown
    wake: Sender<Vec<u8>>,
    closed: Arc<AtomicBool>,
    peer_closed: Arc<AtomicBool>,
    pending: Vec<u8>,
}

/// Two connected in-process endpoints.
pub fn duplex() -> (MemEnd, MemEnd) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    let a_closed = Arc::new(AtomicBool::new(false));
    let b_closed = Arc::new(AtomicBool::new(false));
    let a = MemEnd {
        tx: a_tx.clone(),
        rx: Arc::new(Mutex::new(a_rx)),
        wake: b_tx.clone(),
        closed: a_closed.clone(),
        peer_closed: b_closed.clone(),
        pending: Vec::new(),
    };
    let b = MemEnd {
        tx: b_tx,
        rx: Arc::new(Mutex::new(b_rx)),
        wake: a_tx,
        closed: b_closed,
        peer_closed: a_closed,
        pending: Vec::new(),
    };
    (a, b)
}

impl MemEnd {
    fn try_clone(&self) -> MemEnd {
        MemEnd {
            tx: self.tx.clone(),
            rx: self.rx.clone(),
            wake: self.wake.clone(),
            closed: self.closed.clone(),
            peer_closed: self.peer_closed.clone(),
            pending: Vec::new(),
        }
    }

    fn shutdown(&self) {
        if !self.closed.swap(true, Ordering::SeqCst) {
            // empty chunks are end-of-stream markers for both readers
            let _ = self.wake.send(Vec::new());
            let _ = self.tx.send(Vec::new());
        }
    }
}

impl Read for MemEnd {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        if self.pending.is_empty() {
            if self.closed.load(Ordering::SeqCst) {
                return Ok(0);
            }
            let rx = self.rx.lock().expect("pipe lock");
            let chunk = if self.peer_closed.load(Ordering::SeqCst) {
                rx.try_recv().unwrap_or_default()
            } else {
                rx.recv().unwrap_or_default()
            };
            drop(rx);
            if chunk.is_empty() {
                return Ok(0);
            }
            self.pending = chunk;
        }
        let n = buf.len().min(self.pending.len());
        buf[..n].copy_from_slice(&self.pending[..n]);
        self.pending.drain(..n);
        Ok(n)
    }
}

impl Write for MemEnd {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        if self.closed.load(Ordering::SeqCst) || self.peer_closed.load(Ordering::SeqCst) {
            return Err(io::Error::new(io::ErrorKind::BrokenPipe, "pipe closed"));
        }
        if buf.is_empty() {
            return Ok(0);
        }
        self.tx
            .send(buf.to_vec())
            .map_err(|_| io::Error::new(io::ErrorKind::BrokenPipe, "pipe closed"))?;
        Ok(buf.len())
    }

    fn flush(&mut self) -> io::Result<()> {
        Ok(())
    }
}

/// A reliable byte stream the broker and client can run over.
#[derive(Debug)]
pub enum Conn {
    Tcp(TcpStream),
    Mem(MemEnd),
}

impl Conn {
    pub fn try_clone(&self) -> io::Result<Conn> {
        match self {
            Conn::Tcp(s) => Ok(Conn::Tcp(s.try_clone()?)),
            Conn::Mem(m) => Ok(Conn::Mem(m.try_clone())),
        }
    }

    /// Closes both directions; a blocked reader on either side sees end of stream.
    pub fn shutdown(&self) {
        match self {
            Conn::Tcp(s) => {
                let _ = s.shutdown(Shutdown::Both);
            }
            Conn::Mem(m) => m.shutdown(),
        }
    }
}

impl Read for Conn {
    fn read(&mut self, buf: &mut [u8]) -> io::Result<usize> {
        match self {
            Conn::Tcp(s) => s.read(buf),
            Conn::Mem(m) => m.read(buf),
        }
    }
}

impl Write for Conn {
    fn write(&mut self, buf: &[u8]) -> io::Result<usize> {
        match self {
            Conn::Tcp(s) => s.write(buf),
            Conn::Mem(m) => m.write(buf),
        }
    }

    fn flush(&mut self) -> io::Result<()> {
        match self {
            Conn::Tcp(s) => s.flush(),
            Conn::Mem(m) => m.flush(),
        }
    }
}

impl From<TcpStream> for Conn {
    fn from(s: TcpStream) -> Self {
        let _ = s.set_nodelay(true);
        Conn::Tcp(s)
    }
}

impl From<MemEnd> for Conn {
    fn from(m: MemEnd) -> Self {
        Conn::Mem(m)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn pipe_carries_bytes_and_closes() {
        let (mut a, mut b) = duplex();
        a.write_all(b"hello").unwrap();
        let mut buf = [0u8; 3];
        b.read_exact(&mut buf).unwrap();
        assert_eq!(&buf, b"hel");
        let mut rest = [0u8; 2];
        b.read_exact(&mut rest).unwrap();
        assert_eq!(&rest, b"lo");
        let reader = std::thread::spawn(move || {
            let mut v = Vec::new();
            b.read_to_end(&mut v).unwrap();
            v
        });
        a.write_all(b"!").unwrap();
        a.shutdown();
        assert_eq!(reader.join().unwrap(), b"!");
        assert!(a.write_all(b"x").is_err());
    }

    #[test]
    fn shutdown_wakes_own_reader() {
        let (a, _b) = duplex();
        let mut r = Conn::Mem(a.try_clone());
        let h = std::thread::spawn(move || {
            let mut buf = [0u8; 4];
            r.read(&mut buf).unwrap()
        });
        std::thread::sleep(std::time::Duration::from_millis(20));
        a.shutdown();
        assert_eq!(h.join().unwrap(), 0);
    }
}
