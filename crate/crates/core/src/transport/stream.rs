//! Length-prefixed frames over TCP.

use std::io::{self, ErrorKind, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpStream};
use std::time::Duration;

use crate::error::{Error, Result};
use crate::frame::{
    parse_header, verify_checksum, write_frame, write_value_frame, Flags, Frame, FrameRef, MsgType,
    HEADER_LEN, TRAILER_LEN,
};
use crate::value::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PeerStatus {
    Idle,
    DataReady,
    Closed,
}

pub struct StreamChannel {
    stream: TcpStream,
    peer: SocketAddr,
    max_frame: usize,
    read_timeout: Option<Duration>,
    wbuf: Vec<u8>,
}

fn lost(e: io::Error) -> Error {
    Error::ConnectionLost(e.to_string())
}

impl StreamChannel {
    pub fn new(stream: TcpStream, max_frame: usize) -> Result<Self> {
        stream.set_nodelay(true)?;
        let peer = stream.peer_addr()?;
        Ok(StreamChannel {
            stream,
            peer,
            max_frame,
            read_timeout: None,
            wbuf: Vec::new(),
        })
    }

    pub fn peer_addr(&self) -> SocketAddr {
        self.peer
    }

    pub fn local_addr(&self) -> Result<SocketAddr> {
        Ok(self.stream.local_addr()?)
    }

    pub fn max_frame(&self) -> usize {
        self.max_frame
    }

    pub fn set_read_timeout(&mut self, t: Option<Duration>) -> Result<()> {
        if self.read_timeout != t {
            self.stream.set_read_timeout(t)?;
            self.read_timeout = t;
        }
        Ok(())
    }

    pub fn try_clone_stream(&self) -> Result<TcpStream> {
        Ok(self.stream.try_clone()?)
    }

    pub fn shutdown(&self) {
        let _ = self.stream.shutdown(Shutdown::Both);
    }

    fn flush_wbuf(&mut self) -> Result<usize> {
        let n = self.wbuf.len();
        let res = self.stream.write_all(&self.wbuf);
        self.wbuf.clear();
        res.map_err(lost)?;
        Ok(n)
    }

    /// Writes one frame; returns the octets put on the wire.
    pub fn send(&mut self, f: FrameRef<'_>) -> Result<usize> {
        self.wbuf.clear();
        write_frame(&mut self.wbuf, f, self.max_frame)?;
        self.flush_wbuf()
    }

    pub fn send_value(&mut self, msg_type: MsgType, flags: Flags, request_id: u64, v: &Value) -> Result<usize> {
        self.wbuf.clear();
        write_value_frame(&mut self.wbuf, msg_type, flags, request_id, v, self.max_frame)?;
        self.flush_wbuf()
    }

    /// Writes a frame whose payload is produced by `fill`, which appends
    /// exactly `payload_len` octets.
    pub fn send_with(
        &mut self,
        msg_type: MsgType,
        flags: Flags,
        request_id: u64,
        payload_len: usize,
        fill: impl FnOnce(&mut Vec<u8>) -> Result<()>,
    ) -> Result<usize> {
        if payload_len > self.max_frame {
            return Err(Error::FrameTooLarge {
                len: payload_len,
                max: self.max_frame,
            });
        }
        self.wbuf.clear();
        self.wbuf.reserve(HEADER_LEN + payload_len + TRAILER_LEN);
        write_frame(
            &mut self.wbuf,
            FrameRef { msg_type, flags, request_id, payload: &[] },
            self.max_frame,
        )?;
        self.wbuf.truncate(HEADER_LEN);
        self.wbuf[16..20].copy_from_slice(&(payload_len as u32).to_le_bytes());
        fill(&mut self.wbuf)?;
        if self.wbuf.len() != HEADER_LEN + payload_len {
            self.wbuf.clear();
            return Err(Error::Encoding("payload writer produced an unexpected length".into()));
        }
        let crc = crate::frame::crc32(&self.wbuf[HEADER_LEN..]);
        self.wbuf.extend_from_slice(&crc.to_le_bytes());
        self.flush_wbuf()
    }

    fn read_full(&mut self, buf: &mut [u8], started: bool) -> Result<()> {
        match self.stream.read_exact(buf) {
            Ok(()) => Ok(()),
            Err(e) => Err(match e.kind() {
                ErrorKind::WouldBlock | ErrorKind::TimedOut => match self.read_timeout {
                    Some(t) if !started => Error::Timeout(t),
                    // a partial frame leaves the stream unusable either way
                    _ => Error::ConnectionLost(format!("stalled mid-frame: {e}")),
                },
                ErrorKind::UnexpectedEof if started => {
                    Error::ConnectionLost("peer closed mid-frame".into())
                }
                ErrorKind::UnexpectedEof => Error::ConnectionLost("peer closed the connection".into()),
                _ => lost(e),
            }),
        }
    }

    /// Reads exactly one frame.
    pub fn recv(&mut self) -> Result<Frame> {
        let mut head = [0u8; HEADER_LEN];
        // distinguish "nothing arrived" from "part of a frame arrived"
        let first = loop {
            match self.stream.read(&mut head) {
                Ok(0) => return Err(Error::ConnectionLost("peer closed the connection".into())),
                Ok(n) => break n,
                Err(e) if e.kind() == ErrorKind::Interrupted => continue,
                Err(e) if matches!(e.kind(), ErrorKind::WouldBlock | ErrorKind::TimedOut) => {
                    return Err(Error::Timeout(self.read_timeout.unwrap_or_default()))
                }
                Err(e) => return Err(lost(e)),
            }
        };
        if first < HEADER_LEN {
            self.read_full(&mut head[first..], true)?;
        }
        let h = parse_header(&head, self.max_frame)?;
        let mut body = vec![0u8; h.payload_len as usize + TRAILER_LEN];
        self.read_full(&mut body, true)?;
        let trailer: [u8; 4] = body[body.len() - TRAILER_LEN..].try_into().unwrap();
        body.truncate(h.payload_len as usize);
        verify_checksum(&body, trailer)?;
        Ok(Frame {
            msg_type: h.msg_type,
            flags: h.flags,
            request_id: h.request_id,
            payload: body,
        })
    }

    /// Non-blocking probe of the connection.
    pub fn poll_peer(&self) -> Result<PeerStatus> {
        self.stream.set_nonblocking(true)?;
        let mut b = [0u8; 1];
        let r = self.stream.peek(&mut b);
        self.stream.set_nonblocking(false)?;
        match r {
            Ok(0) => Ok(PeerStatus::Closed),
            Ok(_) => Ok(PeerStatus::DataReady),
            Err(e) if e.kind() == ErrorKind::WouldBlock => Ok(PeerStatus::Idle),
            Err(e) if e.kind() == ErrorKind::Interrupted => Ok(PeerStatus::Idle),
            Err(_) => Ok(PeerStatus::Closed),
        }
    }
}
