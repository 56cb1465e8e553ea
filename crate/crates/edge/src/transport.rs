//! Frame transports: TCP and an in-process duplex channel.

use std::io;
use std::net::TcpStream;
use std::sync::mpsc::{channel, Receiver, Sender};

use crate::wire::{read_frame, write_frame, Frame, WireError, WireMessage};

pub trait Transport: Send {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), WireError>;

    /// Next frame, or `None` once the peer has closed the connection.
    fn recv_frame(&mut self) -> Result<Option<Frame>, WireError>;

    fn send(&mut self, msg: &WireMessage) -> Result<(), WireError> {
        self.send_frame(&msg.to_frame())
    }
}

impl Transport for TcpStream {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), WireError> {
        Ok(write_frame(self, frame)?)
    }

    fn recv_frame(&mut self) -> Result<Option<Frame>, WireError> {
        read_frame(self)
    }
}

/// One end of an in-process connection. Frames cross the channel in their
/// encoded form so both transports share the same parsing path.
pub struct ChannelTransport {
    tx: Sender<Vec<u8>>,
    rx: Receiver<Vec<u8>>,
    buf: Vec<u8>,
}

pub fn channel_pair() -> (ChannelTransport, ChannelTransport) {
    let (a_tx, b_rx) = channel();
    let (b_tx, a_rx) = channel();
    (
        ChannelTransport {
            tx: a_tx,
            rx: a_rx,
            buf: Vec::new(),
        },
        ChannelTransport {
            tx: b_tx,
            rx: b_rx,
            buf: Vec::new(),
        },
    )
}

impl ChannelTransport {
    /// Sends raw bytes, which need not form a valid frame.
    pub fn send_bytes(&mut self, bytes: Vec<u8>) -> Result<(), WireError> {
        self.tx
            .send(bytes)
            .map_err(|_| WireError::Io(io::Error::new(io::ErrorKind::BrokenPipe, "peer closed")))
    }
}

impl Transport for ChannelTransport {
    fn send_frame(&mut self, frame: &Frame) -> Result<(), WireError> {
        self.send_bytes(frame.encode())
    }

    fn recv_frame(&mut self) -> Result<Option<Frame>, WireError> {
        loop {
            if let Some((frame, used)) = Frame::decode(&self.buf)? {
                self.buf.drain(..used);
                return Ok(Some(frame));
            }
            match self.rx.recv() {
                Ok(bytes) => self.buf.extend_from_slice(&bytes),
                Err(_) if self.buf.is_empty() => return Ok(None),
                Err(_) => {
                    return Err(WireError::Io(io::Error::new(
                        io::ErrorKind::UnexpectedEof,
                        "connection closed mid-frame",
                    )))
                }
            }
        }
    }
}
