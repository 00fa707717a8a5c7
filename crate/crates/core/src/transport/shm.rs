//! Single-slot shared-memory rendezvous segment.
//!
//! ```text
//! offset  size  field
//!      0     8  magic "VLAGSHM1"
//!      8    16  session nonce
//!     24     4  state (u32, atomic): 0 IDLE, 1 REQUEST_READY, 2 PROCESSING,
//!               3 RESPONSE_READY, 4 CLOSED
//!     28     8  request_id (LE)
//!     36     1  msg_type
//!     37     2  flags (LE)
//!     39     1  reserved
//!     40     4  payload_len (LE)
//!     44     -  payload region (capacity - 44 octets)
//! ```
//!
//! The state word is the only synchronization point. The client owns the
//! segment in IDLE and RESPONSE_READY, the server in REQUEST_READY and
//! PROCESSING. Every transition is a compare-and-swap, so CLOSED is sticky:
//! once either side (or a server shutdown) stores it, no further transition
//! can succeed.

use std::fs::{self, File, OpenOptions};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU32, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use memmap2::MmapRaw;

use crate::error::{Error, Result};
use crate::frame::{Flags, FrameRef, MsgType};
use crate::obs::ObsWriter;
use crate::transport::WaitStrategy;
use crate::value::{encoded_len, write_value, Value};

pub const SHM_MAGIC: [u8; 8] = *b"VLAGSHM1";
pub const OFF_NONCE: usize = 8;
pub const OFF_STATE: usize = 24;
pub const OFF_REQUEST_ID: usize = 28;
pub const OFF_MSG_TYPE: usize = 36;
pub const OFF_FLAGS: usize = 37;
pub const OFF_RESERVED: usize = 39;
pub const OFF_PAYLOAD_LEN: usize = 40;
pub const SHM_HEADER_LEN: usize = 44;

pub const MIN_CAPACITY: usize = 1 << 20;
pub const DEFAULT_CAPACITY: usize = 8 << 20;

pub type Nonce = [u8; 16];

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u32)]
pub enum ShmState {
    Idle = 0,
    RequestReady = 1,
    Processing = 2,
    ResponseReady = 3,
    Closed = 4,
}

impl ShmState {
    fn from_u32(v: u32) -> Option<Self> {
        Some(match v {
            0 => ShmState::Idle,
            1 => ShmState::RequestReady,
            2 => ShmState::Processing,
            3 => ShmState::ResponseReady,
            4 => ShmState::Closed,
            _ => return None,
        })
    }
}

/// Directory holding segment files: `/dev/shm` where available.
pub fn shm_dir() -> PathBuf {
    if let Some(dir) = std::env::var_os("POLSERVE_SHM_DIR") {
        return dir.into();
    }
    let dev = Path::new("/dev/shm");
    if dev.is_dir() {
        dev.to_path_buf()
    } else {
        std::env::temp_dir()
    }
}

pub fn segment_path(name: &str) -> Result<PathBuf> {
    if name.is_empty() || name.contains(['/', '\\']) || name.starts_with('.') {
        return Err(Error::Config(format!("invalid segment name {name:?}")));
    }
    Ok(shm_dir().join(name))
}

/// Something that can be serialized straight into the payload region.
pub trait ShmPayload {
    fn payload_len(&self) -> Result<usize>;
    fn write_to(&self, dst: &mut [u8]) -> Result<()>;
}

impl ShmPayload for [u8] {
    fn payload_len(&self) -> Result<usize> {
        Ok(self.len())
    }
    fn write_to(&self, dst: &mut [u8]) -> Result<()> {
        dst.copy_from_slice(self);
        Ok(())
    }
}

impl ShmPayload for Value {
    fn payload_len(&self) -> Result<usize> {
        encoded_len(self)
    }
    fn write_to(&self, mut dst: &mut [u8]) -> Result<()> {
        write_value(&mut dst, self)
    }
}

impl ShmPayload for ObsWriter<'_> {
    fn payload_len(&self) -> Result<usize> {
        self.encoded_len()
    }
    fn write_to(&self, mut dst: &mut [u8]) -> Result<()> {
        self.write(&mut dst)
    }
}

struct Mapping {
    map: MmapRaw,
}

impl Mapping {
    fn ptr(&self) -> *mut u8 {
        self.map.as_mut_ptr()
    }

    fn state(&self) -> &AtomicU32 {
        // SAFETY: the mapping is page aligned and at least MIN_CAPACITY long,
        // so offset 24 is a valid, 4-aligned u32 for the mapping's lifetime.
        unsafe { &*(self.ptr().add(OFF_STATE) as *const AtomicU32) }
    }
}

/// Marks a segment CLOSED from another thread, e.g. on server shutdown.
#[derive(Clone)]
pub struct ShmCloser(Arc<Mapping>);

impl ShmCloser {
    pub fn close(&self) {
        self.0.state().store(ShmState::Closed as u32, Ordering::Release);
    }
}

/// One end of a mapped rendezvous segment.
pub struct ShmSegment {
    mapping: Arc<Mapping>,
    name: String,
    path: PathBuf,
    capacity: usize,
    creator: bool,
    unlinked: bool,
    last_request_id: u64,
}

/// A message read out of the segment. The payload borrows the mapping.
pub type ShmMessage<'a> = FrameRef<'a>;

impl ShmSegment {
    /// Creates a fresh segment with a random nonce, state IDLE.
    pub fn create(name: &str, capacity: usize) -> Result<Self> {
        if capacity < MIN_CAPACITY {
            return Err(Error::Config(format!(
                "shared-memory capacity {capacity} below the {MIN_CAPACITY}-octet minimum"
            )));
        }
        let path = segment_path(name)?;
        let file = OpenOptions::new()
            .read(true)
            .write(true)
            .create_new(true)
            .open(&path)?;
        file.set_len(capacity as u64)?;
        let seg = Self::map(file, name, path, capacity, true)?;
        let nonce: Nonce = rand::random();
        // SAFETY: freshly created file; nobody else has attached yet.
        unsafe {
            let p = seg.mapping.ptr();
            std::ptr::copy_nonoverlapping(SHM_MAGIC.as_ptr(), p, 8);
            std::ptr::copy_nonoverlapping(nonce.as_ptr(), p.add(OFF_NONCE), 16);
        }
        seg.mapping.state().store(ShmState::Idle as u32, Ordering::Release);
        Ok(seg)
    }

    /// Maps an existing segment and checks that it carries `expected` as its
    /// nonce. A stale or foreign segment is rejected.
    pub fn attach(name: &str, expected: &Nonce) -> Result<Self> {
        let path = segment_path(name)?;
        let file = OpenOptions::new().read(true).write(true).open(&path)?;
        let capacity = file.metadata()?.len() as usize;
        if capacity < MIN_CAPACITY {
            return Err(Error::Protocol(format!("segment {name} is only {capacity} octets")));
        }
        let seg = Self::map(file, name, path, capacity, false)?;
        let (magic, nonce) = seg.identity();
        if magic != SHM_MAGIC {
            return Err(Error::Protocol(format!("segment {name} has bad magic")));
        }
        if &nonce != expected {
            return Err(Error::Protocol(format!("segment {name} nonce mismatch")));
        }
        Ok(seg)
    }

    fn map(file: File, name: &str, path: PathBuf, capacity: usize, creator: bool) -> Result<Self> {
        let map = MmapRaw::map_raw(&file)?;
        Ok(ShmSegment {
            mapping: Arc::new(Mapping { map }),
            name: name.to_owned(),
            path,
            capacity,
            creator,
            unlinked: false,
            last_request_id: 0,
        })
    }

    fn identity(&self) -> ([u8; 8], Nonce) {
        let mut magic = [0u8; 8];
        let mut nonce = [0u8; 16];
        // SAFETY: both ranges lie within the header; these octets are
        // written once at creation and never again.
        unsafe {
            let p = self.mapping.ptr();
            std::ptr::copy_nonoverlapping(p, magic.as_mut_ptr(), 8);
            std::ptr::copy_nonoverlapping(p.add(OFF_NONCE), nonce.as_mut_ptr(), 16);
        }
        (magic, nonce)
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn max_payload(&self) -> usize {
        self.capacity - SHM_HEADER_LEN
    }

    pub fn nonce(&self) -> Nonce {
        self.identity().1
    }

    pub fn state(&self) -> ShmState {
        let raw = self.mapping.state().load(Ordering::Acquire);
        ShmState::from_u32(raw).unwrap_or(ShmState::Closed)
    }

    pub fn closer(&self) -> ShmCloser {
        ShmCloser(self.mapping.clone())
    }

    pub fn close(&self) {
        self.closer().close();
    }

    /// Removes the backing file. Existing mappings stay valid.
    pub fn unlink(&mut self) {
        if !self.unlinked {
            let _ = fs::remove_file(&self.path);
            self.unlinked = true;
        }
    }

    fn transition(&self, from: ShmState, to: ShmState) -> Result<()> {
        match self.mapping.state().compare_exchange(
            from as u32,
            to as u32,
            Ordering::AcqRel,
            Ordering::Acquire,
        ) {
            Ok(_) => Ok(()),
            Err(cur) if cur == ShmState::Closed as u32 => Err(Error::ChannelClosed),
            Err(cur) => Err(Error::Protocol(format!(
                "segment in state {:?}, expected {from:?}",
                ShmState::from_u32(cur)
            ))),
        }
    }

    fn expect_state(&self, want: ShmState) -> Result<()> {
        match self.state() {
            s if s == want => Ok(()),
            ShmState::Closed => Err(Error::ChannelClosed),
            s => Err(Error::Protocol(format!("segment in state {s:?}, expected {want:?}"))),
        }
    }

    fn write_message<P: ShmPayload + ?Sized>(
        &mut self,
        msg_type: MsgType,
        flags: Flags,
        request_id: u64,
        payload: &P,
    ) -> Result<()> {
        let len = payload.payload_len()?;
        if len > self.max_payload() {
            return Err(Error::FrameTooLarge {
                len,
                max: self.max_payload(),
            });
        }
        // SAFETY: the caller verified this side owns the segment, and `&mut
        // self` guarantees no message borrowed from this mapping is alive.
        unsafe {
            let p = self.mapping.ptr();
            let dst = std::slice::from_raw_parts_mut(p.add(SHM_HEADER_LEN), len);
            payload.write_to(dst)?;
            std::ptr::copy_nonoverlapping(request_id.to_le_bytes().as_ptr(), p.add(OFF_REQUEST_ID), 8);
            *p.add(OFF_MSG_TYPE) = msg_type as u8;
            std::ptr::copy_nonoverlapping(flags.bits().to_le_bytes().as_ptr(), p.add(OFF_FLAGS), 2);
            *p.add(OFF_RESERVED) = 0;
            std::ptr::copy_nonoverlapping((len as u32).to_le_bytes().as_ptr(), p.add(OFF_PAYLOAD_LEN), 4);
        }
        Ok(())
    }

    /// Reads the message currently in the slot. Only meaningful while this
    /// side owns the segment.
    pub fn read_message(&mut self) -> Result<ShmMessage<'_>> {
        let mut id = [0u8; 8];
        let mut fl = [0u8; 2];
        let mut ln = [0u8; 4];
        // SAFETY: header reads within the mapping; ordered after the
        // acquiring state load that handed us ownership.
        let (raw_type, payload) = unsafe {
            let p = self.mapping.ptr();
            std::ptr::copy_nonoverlapping(p.add(OFF_REQUEST_ID), id.as_mut_ptr(), 8);
            std::ptr::copy_nonoverlapping(p.add(OFF_FLAGS), fl.as_mut_ptr(), 2);
            std::ptr::copy_nonoverlapping(p.add(OFF_PAYLOAD_LEN), ln.as_mut_ptr(), 4);
            let len = u32::from_le_bytes(ln) as usize;
            if len > self.max_payload() {
                return Err(Error::Protocol(format!("segment payload_len {len} exceeds capacity")));
            }
            (*p.add(OFF_MSG_TYPE), std::slice::from_raw_parts(p.add(SHM_HEADER_LEN), len))
        };
        let msg_type = MsgType::from_u8(raw_type)
            .ok_or_else(|| Error::Protocol(format!("unknown message type {raw_type:#04x} in segment")))?;
        let bits = u16::from_le_bytes(fl);
        let flags = Flags::from_bits(bits)
            .ok_or_else(|| Error::Protocol(format!("reserved flag bits set: {bits:#06x}")))?;
        Ok(FrameRef {
            msg_type,
            flags,
            request_id: u64::from_le_bytes(id),
            payload,
        })
    }

    /// Client side: IDLE -> REQUEST_READY with the payload written in place.
    pub fn send_request<P: ShmPayload + ?Sized>(
        &mut self,
        msg_type: MsgType,
        flags: Flags,
        request_id: u64,
        payload: &P,
    ) -> Result<()> {
        self.expect_state(ShmState::Idle)?;
        if request_id <= self.last_request_id {
            return Err(Error::Protocol(format!(
                "request_id {request_id} not above previous {}",
                self.last_request_id
            )));
        }
        self.write_message(msg_type, flags, request_id, payload)?;
        self.transition(ShmState::Idle, ShmState::RequestReady)?;
        self.last_request_id = request_id;
        Ok(())
    }

    /// Server side: REQUEST_READY -> PROCESSING.
    pub fn begin_processing(&self) -> Result<()> {
        self.transition(ShmState::RequestReady, ShmState::Processing)
    }

    /// Server side: PROCESSING -> RESPONSE_READY with the reply in place.
    pub fn send_response<P: ShmPayload + ?Sized>(
        &mut self,
        msg_type: MsgType,
        flags: Flags,
        request_id: u64,
        payload: &P,
    ) -> Result<()> {
        self.expect_state(ShmState::Processing)?;
        self.write_message(msg_type, flags, request_id, payload)?;
        self.transition(ShmState::Processing, ShmState::ResponseReady)
    }

    /// Client side: RESPONSE_READY -> IDLE once the reply has been consumed.
    pub fn finish_response(&self) -> Result<()> {
        self.transition(ShmState::ResponseReady, ShmState::Idle)
    }

    /// Waits until the state word equals `target`.
    ///
    /// Spins for `wait.spin`, then yields for `wait.yield_for`, then sleeps
    /// in slices of `wait.sleep`. `liveness` runs about once per
    /// `wait.liveness_interval` outside the spin phase and aborts the wait by
    /// returning an error.
    pub fn await_state(
        &self,
        target: ShmState,
        deadline: Option<Instant>,
        wait: &WaitStrategy,
        liveness: &mut dyn FnMut() -> Result<()>,
    ) -> Result<()> {
        let state = self.mapping.state();
        let start = Instant::now();
        let mut last_check = start;
        let mut spins = 0u32;
        loop {
            let s = state.load(Ordering::Acquire);
            if s == target as u32 {
                return Ok(());
            }
            if s == ShmState::Closed as u32 {
                return Err(Error::ChannelClosed);
            }
            spins = spins.wrapping_add(1);
            // reading the clock every iteration would dominate the spin
            if !spins.is_multiple_of(64) {
                std::hint::spin_loop();
                continue;
            }
            let now = Instant::now();
            let elapsed = now - start;
            if elapsed < wait.spin {
                std::hint::spin_loop();
                continue;
            }
            if let Some(d) = deadline {
                if now >= d {
                    return Err(Error::Timeout(d.saturating_duration_since(start)));
                }
            }
            if now - last_check >= wait.liveness_interval {
                last_check = now;
                liveness()?;
            }
            if elapsed < wait.spin + wait.yield_for {
                std::thread::yield_now();
            } else {
                let mut nap = wait.sleep;
                if let Some(d) = deadline {
                    nap = nap.min(d.saturating_duration_since(now));
                }
                std::thread::sleep(nap.max(Duration::from_micros(1)));
            }
        }
    }
}

impl Drop for ShmSegment {
    fn drop(&mut self) {
        if self.creator {
            self.close();
            self.unlink();
        }
    }
}

impl std::fmt::Debug for ShmSegment {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ShmSegment")
            .field("name", &self.name)
            .field("capacity", &self.capacity)
            .field("state", &self.state())
            .finish()
    }
}
