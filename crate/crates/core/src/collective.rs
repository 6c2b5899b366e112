//! The synchronization layer: all-gather, dense mean all-reduce, and an
//! unmetered control gather, over an in-process or a TCP full mesh.
//!
//! Both backends move the same encoded frames, so reductions and gathered
//! sequences are bitwise identical whichever one is used. Every collective
//! reads one frame from each peer in rank order; per-peer streams are FIFO,
//! which is what gives the calls their barrier semantics.
//!
//! Metering follows a full-mesh model: a worker sends its payload body to
//! each of the `W - 1` peers and receives each peer's body once. Frame
//! headers and the worker's own contribution are not counted.

use std::io::{self, Read, Write};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread;
use std::time::{Duration, Instant};

use thiserror::Error;

use crate::dct::{compressed_size, TENSOR_HEADER_BYTES};
use crate::tensor::{ChunkGrid, Tensor};

pub const MAGIC: u32 = 0x444D_4C43;
pub const VERSION: u8 = 1;
pub const FRAME_HEADER_BYTES: usize = 20;
pub const DEFAULT_TIMEOUT: Duration = Duration::from_secs(30);
const MAX_BODY: u64 = 1 << 32;
const HELLO: &[u8] = b"HELO";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
#[repr(u8)]
pub enum MsgType {
    Compressed = 1,
    Dense = 2,
    Control = 3,
}

impl MsgType {
    fn from_u8(v: u8) -> Option<Self> {
        match v {
            1 => Some(Self::Compressed),
            2 => Some(Self::Dense),
            3 => Some(Self::Control),
            _ => None,
        }
    }
}

#[derive(Debug, Error)]
pub enum CollectiveError {
    #[error("protocol violation from rank {peer}: expected {expected_kind:?} round {expected_round}, got {got_kind:?} round {got_round}")]
    RoundMismatch {
        peer: usize,
        expected_kind: MsgType,
        expected_round: u32,
        got_kind: MsgType,
        got_round: u32,
    },
    #[error("rank {peer} disconnected")]
    Disconnected { peer: usize },
    #[error("timed out after {after:?} waiting for rank {peer}")]
    Timeout { peer: usize, after: Duration },
    #[error("malformed frame from rank {peer}: {reason}")]
    MalformedFrame { peer: usize, reason: String },
    #[error("i/o error with rank {peer}: {source}")]
    Io {
        peer: usize,
        #[source]
        source: io::Error,
    },
    #[error("payload from rank {peer} does not match: {reason}")]
    PayloadMismatch { peer: usize, reason: String },
    #[error("mesh setup failed: {0}")]
    Setup(String),
}

pub type Result<T> = std::result::Result<T, CollectiveError>;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Frame {
    pub kind: MsgType,
    pub round: u32,
    pub rank: u16,
    pub body: Vec<u8>,
}

impl Frame {
    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(FRAME_HEADER_BYTES + self.body.len());
        out.extend_from_slice(&MAGIC.to_le_bytes());
        out.push(VERSION);
        out.push(self.kind as u8);
        out.extend_from_slice(&self.round.to_le_bytes());
        out.extend_from_slice(&self.rank.to_le_bytes());
        out.extend_from_slice(&(self.body.len() as u64).to_le_bytes());
        out.extend_from_slice(&self.body);
        out
    }

    fn parse_header(h: &[u8; FRAME_HEADER_BYTES]) -> std::result::Result<(MsgType, u32, u16, u64), String> {
        let magic = u32::from_le_bytes(h[0..4].try_into().unwrap());
        if magic != MAGIC {
            return Err(format!("bad magic {magic:#010x}"));
        }
        if h[4] != VERSION {
            return Err(format!("unsupported version {}", h[4]));
        }
        let kind = MsgType::from_u8(h[5]).ok_or_else(|| format!("unknown message type {}", h[5]))?;
        let round = u32::from_le_bytes(h[6..10].try_into().unwrap());
        let rank = u16::from_le_bytes(h[10..12].try_into().unwrap());
        let len = u64::from_le_bytes(h[12..20].try_into().unwrap());
        if len > MAX_BODY {
            return Err(format!("body length {len} exceeds limit"));
        }
        Ok((kind, round, rank, len))
    }

    /// Decodes one complete frame; `peer` is only used in error reports.
    pub fn decode(bytes: &[u8], peer: usize) -> Result<Frame> {
        let malformed = |reason: String| CollectiveError::MalformedFrame { peer, reason };
        let header: &[u8; FRAME_HEADER_BYTES] = bytes
            .get(..FRAME_HEADER_BYTES)
            .and_then(|h| h.try_into().ok())
            .ok_or_else(|| malformed(format!("{} bytes is shorter than a header", bytes.len())))?;
        let (kind, round, rank, len) = Self::parse_header(header).map_err(malformed)?;
        let body = &bytes[FRAME_HEADER_BYTES..];
        if body.len() as u64 != len {
            return Err(malformed(format!("body is {} bytes, header says {len}", body.len())));
        }
        Ok(Frame {
            kind,
            round,
            rank,
            body: body.to_vec(),
        })
    }

    /// Reads one frame from a stream. `Ok(None)` on clean EOF before a header.
    pub fn read_from(r: &mut impl Read, peer: usize) -> Result<Option<Frame>> {
        let mut header = [0u8; FRAME_HEADER_BYTES];
        let mut filled = 0;
        while filled < FRAME_HEADER_BYTES {
            match r.read(&mut header[filled..]) {
                Ok(0) if filled == 0 => return Ok(None),
                Ok(0) => {
                    return Err(CollectiveError::MalformedFrame {
                        peer,
                        reason: "stream ended inside a frame header".into(),
                    })
                }
                Ok(n) => filled += n,
                Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
                Err(e) => return Err(CollectiveError::Io { peer, source: e }),
            }
        }
        let (kind, round, rank, len) =
            Self::parse_header(&header).map_err(|reason| CollectiveError::MalformedFrame { peer, reason })?;
        let mut body = vec![0u8; len as usize];
        r.read_exact(&mut body).map_err(|e| match e.kind() {
            io::ErrorKind::UnexpectedEof => CollectiveError::MalformedFrame {
                peer,
                reason: "stream ended inside a frame body".into(),
            },
            _ => CollectiveError::Io { peer, source: e },
        })?;
        Ok(Some(Frame {
            kind,
            round,
            rank,
            body,
        }))
    }
}

/// Point-to-point links to every peer.
pub trait Transport: Send {
    fn send(&mut self, peer: usize, frame: &Frame) -> Result<()>;
    fn recv(&mut self, peer: usize, timeout: Duration) -> Result<Frame>;
}

/// In-process mesh built from channels; frames travel encoded.
pub struct LocalTransport {
    rank: usize,
    senders: Vec<Option<Sender<Vec<u8>>>>,
    receivers: Vec<Option<Receiver<Vec<u8>>>>,
}

impl LocalTransport {
    pub fn mesh(world: usize) -> Vec<LocalTransport> {
        let mut senders: Vec<Vec<Option<Sender<Vec<u8>>>>> =
            (0..world).map(|_| (0..world).map(|_| None).collect()).collect();
        let mut receivers: Vec<Vec<Option<Receiver<Vec<u8>>>>> =
            (0..world).map(|_| (0..world).map(|_| None).collect()).collect();
        for from in 0..world {
            for to in 0..world {
                if from != to {
                    let (tx, rx) = mpsc::channel();
                    senders[from][to] = Some(tx);
                    receivers[to][from] = Some(rx);
                }
            }
        }
        senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(rank, (senders, receivers))| LocalTransport {
                rank,
                senders,
                receivers,
            })
            .collect()
    }
}

impl Transport for LocalTransport {
    fn send(&mut self, peer: usize, frame: &Frame) -> Result<()> {
        let tx = self.senders[peer]
            .as_ref()
            .ok_or_else(|| CollectiveError::Setup(format!("rank {} has no link to itself", self.rank)))?;
        tx.send(frame.encode())
            .map_err(|_| CollectiveError::Disconnected { peer })
    }

    fn recv(&mut self, peer: usize, timeout: Duration) -> Result<Frame> {
        let rx = self.receivers[peer]
            .as_ref()
            .ok_or_else(|| CollectiveError::Setup(format!("rank {} has no link to itself", self.rank)))?;
        match rx.recv_timeout(timeout) {
            Ok(bytes) => Frame::decode(&bytes, peer),
            Err(RecvTimeoutError::Timeout) => Err(CollectiveError::Timeout { peer, after: timeout }),
            Err(RecvTimeoutError::Disconnected) => Err(CollectiveError::Disconnected { peer }),
        }
    }
}

/// Full TCP mesh. Each link has a reader thread that drains incoming frames
/// into a channel, so concurrent large sends cannot deadlock.
pub struct TcpTransport {
    writers: Vec<Option<TcpStream>>,
    inbox: Vec<Option<Receiver<Result<Frame>>>>,
}

impl TcpTransport {
    /// Connects to every lower rank and accepts every higher rank on
    /// `listener`. `peers[r]` is the listening address of rank `r`.
    pub fn establish(
        rank: usize,
        listener: TcpListener,
        peers: &[SocketAddr],
        timeout: Duration,
    ) -> Result<Self> {
        let world = peers.len();
        if rank >= world {
            return Err(CollectiveError::Setup(format!("rank {rank} outside world of {world}")));
        }
        let deadline = Instant::now() + timeout;
        let mut streams: Vec<Option<TcpStream>> = (0..world).map(|_| None).collect();

        for (peer, addr) in peers.iter().enumerate().take(rank) {
            let mut stream = loop {
                match TcpStream::connect_timeout(addr, Duration::from_millis(500)) {
                    Ok(s) => break s,
                    Err(e) if Instant::now() < deadline => {
                        log::debug!("rank {rank}: connect to {peer} at {addr} failed ({e}), retrying");
                        thread::sleep(Duration::from_millis(50));
                    }
                    Err(e) => return Err(CollectiveError::Io { peer, source: e }),
                }
            };
            stream.set_nodelay(true).map_err(|e| CollectiveError::Io { peer, source: e })?;
            let hello = Frame {
                kind: MsgType::Control,
                round: u32::MAX,
                rank: rank as u16,
                body: HELLO.to_vec(),
            };
            stream
                .write_all(&hello.encode())
                .map_err(|e| CollectiveError::Io { peer, source: e })?;
            streams[peer] = Some(stream);
        }

        listener
            .set_nonblocking(true)
            .map_err(|e| CollectiveError::Setup(format!("listener: {e}")))?;
        let mut pending = world - rank - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((mut stream, from)) => {
                    stream
                        .set_nonblocking(false)
                        .and_then(|_| stream.set_nodelay(true))
                        .and_then(|_| stream.set_read_timeout(Some(timeout)))
                        .map_err(|e| CollectiveError::Setup(format!("accept from {from}: {e}")))?;
                    let hello = Frame::read_from(&mut stream, usize::MAX)?
                        .ok_or_else(|| CollectiveError::Setup(format!("{from} closed before hello")))?;
                    let peer = hello.rank as usize;
                    if hello.kind != MsgType::Control || hello.body != HELLO || peer <= rank || peer >= world {
                        return Err(CollectiveError::Setup(format!("bad hello from {from} claiming rank {peer}")));
                    }
                    if streams[peer].is_some() {
                        return Err(CollectiveError::Setup(format!("rank {peer} connected twice")));
                    }
                    stream
                        .set_read_timeout(None)
                        .map_err(|e| CollectiveError::Io { peer, source: e })?;
                    streams[peer] = Some(stream);
                    pending -= 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(CollectiveError::Setup(format!(
                            "rank {rank}: {pending} peers never connected"
                        )));
                    }
                    thread::sleep(Duration::from_millis(5));
                }
                Err(e) => return Err(CollectiveError::Setup(format!("accept: {e}"))),
            }
        }

        let mut writers = Vec::with_capacity(world);
        let mut inbox = Vec::with_capacity(world);
        for (peer, stream) in streams.into_iter().enumerate() {
            let Some(stream) = stream else {
                writers.push(None);
                inbox.push(None);
                continue;
            };
            let mut reader = stream
                .try_clone()
                .map_err(|e| CollectiveError::Io { peer, source: e })?;
            let (tx, rx) = mpsc::channel();
            thread::spawn(move || loop {
                let msg = match Frame::read_from(&mut reader, peer) {
                    Ok(Some(frame)) => Ok(frame),
                    Ok(None) => Err(CollectiveError::Disconnected { peer }),
                    Err(e) => Err(e),
                };
                let stop = msg.is_err();
                if tx.send(msg).is_err() || stop {
                    break;
                }
            });
            writers.push(Some(stream));
            inbox.push(Some(rx));
        }
        Ok(Self { writers, inbox })
    }
}

impl Transport for TcpTransport {
    fn send(&mut self, peer: usize, frame: &Frame) -> Result<()> {
        let stream = self.writers[peer]
            .as_mut()
            .ok_or_else(|| CollectiveError::Setup(format!("no link to rank {peer}")))?;
        stream
            .write_all(&frame.encode())
            .map_err(|e| CollectiveError::Io { peer, source: e })
    }

    fn recv(&mut self, peer: usize, timeout: Duration) -> Result<Frame> {
        let rx = self.inbox[peer]
            .as_ref()
            .ok_or_else(|| CollectiveError::Setup(format!("no link to rank {peer}")))?;
        match rx.recv_timeout(timeout) {
            Ok(msg) => msg,
            Err(RecvTimeoutError::Timeout) => Err(CollectiveError::Timeout { peer, after: timeout }),
            Err(RecvTimeoutError::Disconnected) => Err(CollectiveError::Disconnected { peer }),
        }
    }
}

impl Drop for TcpTransport {
    fn drop(&mut self) {
        for s in self.writers.iter().flatten() {
            let _ = s.shutdown(Shutdown::Both);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MeterEntry {
    pub round: u32,
    pub kind: MsgType,
    pub sent: u64,
    pub received: u64,
}

/// Cumulative network bytes for one worker.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct CommMeter {
    pub bytes_sent: u64,
    pub bytes_received: u64,
    pub log: Vec<MeterEntry>,
}

impl CommMeter {
    fn record(&mut self, round: u32, kind: MsgType, sent: u64, received: u64) {
        self.bytes_sent += sent;
        self.bytes_received += received;
        self.log.push(MeterEntry {
            round,
            kind,
            sent,
            received,
        });
    }

    pub fn total(&self) -> u64 {
        self.bytes_sent + self.bytes_received
    }
}

/// Synchronization primitives used by the optimizers and the trainer.
pub trait Collective: Send {
    fn rank(&self) -> usize;
    fn world_size(&self) -> usize;
    /// Every worker's payload, in rank order. Metered.
    fn all_gather(&mut self, round: u32, payload: &[u8]) -> Result<Vec<Vec<u8>>>;
    /// Elementwise mean over workers, accumulated in `f64` in rank order.
    /// Metered.
    fn all_reduce_mean(&mut self, round: u32, tensors: &[Tensor]) -> Result<Vec<Tensor>>;
    /// Like [`Collective::all_gather`] but for bookkeeping traffic; not
    /// metered.
    fn control_gather(&mut self, round: u32, payload: &[u8]) -> Result<Vec<Vec<u8>>>;
    fn meter(&self) -> &CommMeter;
}

pub struct Communicator<T: Transport> {
    rank: usize,
    world: usize,
    transport: T,
    timeout: Duration,
    meter: CommMeter,
}

pub type LocalCollective = Communicator<LocalTransport>;
pub type TcpCollective = Communicator<TcpTransport>;

/// One in-process communicator per rank.
pub fn local_mesh(world: usize, timeout: Duration) -> Vec<LocalCollective> {
    LocalTransport::mesh(world)
        .into_iter()
        .enumerate()
        .map(|(rank, transport)| Communicator::new(rank, world, transport, timeout))
        .collect()
}

impl<T: Transport> Communicator<T> {
    pub fn new(rank: usize, world: usize, transport: T, timeout: Duration) -> Self {
        assert!(rank < world, "rank {rank} outside world of {world}");
        Self {
            rank,
            world,
            transport,
            timeout,
            meter: CommMeter::default(),
        }
    }

    fn exchange(&mut self, kind: MsgType, round: u32, payload: &[u8]) -> Result<Vec<Vec<u8>>> {
        let frame = Frame {
            kind,
            round,
            rank: self.rank as u16,
            body: payload.to_vec(),
        };
        for peer in (0..self.world).filter(|&p| p != self.rank) {
            self.transport.send(peer, &frame)?;
        }
        let mut out = Vec::with_capacity(self.world);
        for peer in 0..self.world {
            if peer == self.rank {
                out.push(payload.to_vec());
                continue;
            }
            let got = self.transport.recv(peer, self.timeout)?;
            if got.kind != kind || got.round != round {
                return Err(CollectiveError::RoundMismatch {
                    peer,
                    expected_kind: kind,
                    expected_round: round,
                    got_kind: got.kind,
                    got_round: got.round,
                });
            }
            if got.rank as usize != peer {
                return Err(CollectiveError::MalformedFrame {
                    peer,
                    reason: format!("frame claims rank {}", got.rank),
                });
            }
            out.push(got.body);
        }
        Ok(out)
    }

    fn metered_exchange(&mut self, kind: MsgType, round: u32, payload: &[u8]) -> Result<Vec<Vec<u8>>> {
        let out = self.exchange(kind, round, payload)?;
        let sent = (self.world as u64 - 1) * payload.len() as u64;
        let received: u64 = out
            .iter()
            .enumerate()
            .filter(|&(r, _)| r != self.rank)
            .map(|(_, p)| p.len() as u64)
            .sum();
        self.meter.record(round, kind, sent, received);
        Ok(out)
    }
}

impl TcpCollective {
    /// Builds the mesh and runs a readiness barrier before returning.
    pub fn connect(rank: usize, listener: TcpListener, peers: &[SocketAddr], timeout: Duration) -> Result<Self> {
        let transport = TcpTransport::establish(rank, listener, peers, timeout)?;
        let mut comm = Communicator::new(rank, peers.len(), transport, timeout);
        comm.exchange(MsgType::Control, u32::MAX, b"READY")?;
        Ok(comm)
    }
}

impl<T: Transport> Collective for Communicator<T> {
    fn rank(&self) -> usize {
        self.rank
    }

    fn world_size(&self) -> usize {
        self.world
    }

    fn all_gather(&mut self, round: u32, payload: &[u8]) -> Result<Vec<Vec<u8>>> {
        self.metered_exchange(MsgType::Compressed, round, payload)
    }

    fn all_reduce_mean(&mut self, round: u32, tensors: &[Tensor]) -> Result<Vec<Tensor>> {
        let body = encode_dense(tensors);
        let gathered = self.metered_exchange(MsgType::Dense, round, &body)?;
        let mut sums: Vec<Vec<f64>> = tensors.iter().map(|t| vec![0.0; t.len()]).collect();
        for (peer, bytes) in gathered.iter().enumerate() {
            let values = decode_dense(bytes, tensors, peer)?;
            for (sum, vals) in sums.iter_mut().zip(values) {
                for (s, v) in sum.iter_mut().zip(vals) {
                    *s += f64::from(v);
                }
            }
        }
        let w = self.world as f64;
        tensors
            .iter()
            .zip(sums)
            .map(|(t, sum)| {
                Tensor::new(t.shape().to_vec(), sum.into_iter().map(|s| (s / w) as f32).collect()).map_err(|e| {
                    CollectiveError::PayloadMismatch {
                        peer: self.rank,
                        reason: e.to_string(),
                    }
                })
            })
            .collect()
    }

    fn control_gather(&mut self, round: u32, payload: &[u8]) -> Result<Vec<Vec<u8>>> {
        self.exchange(MsgType::Control, round, payload)
    }

    fn meter(&self) -> &CommMeter {
        &self.meter
    }
}

/// Dense body: per tensor id (u16), element count (u32), dtype tag (u16,
/// 0 = f32), then the raw values. Little-endian.
pub fn encode_dense(tensors: &[Tensor]) -> Vec<u8> {
    let mut out = Vec::with_capacity(dense_payload_size(tensors.iter().map(Tensor::len)));
    for (id, t) in tensors.iter().enumerate() {
        out.extend_from_slice(&(id as u16).to_le_bytes());
        out.extend_from_slice(&(t.len() as u32).to_le_bytes());
        out.extend_from_slice(&0u16.to_le_bytes());
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

fn decode_dense(bytes: &[u8], like: &[Tensor], peer: usize) -> Result<Vec<Vec<f32>>> {
    let bad = |reason: String| CollectiveError::PayloadMismatch { peer, reason };
    let mut pos = 0;
    let mut out = Vec::with_capacity(like.len());
    for (id, t) in like.iter().enumerate() {
        let header = bytes
            .get(pos..pos + TENSOR_HEADER_BYTES)
            .ok_or_else(|| bad(format!("truncated before tensor {id}")))?;
        let got_id = u16::from_le_bytes(header[0..2].try_into().unwrap()) as usize;
        let count = u32::from_le_bytes(header[2..6].try_into().unwrap()) as usize;
        let dtype = u16::from_le_bytes(header[6..8].try_into().unwrap());
        if got_id != id || count != t.len() || dtype != 0 {
            return Err(bad(format!(
                "tensor {id}: header says id {got_id}, {count} values, dtype {dtype}; expected {} f32 values",
                t.len()
            )));
        }
        pos += TENSOR_HEADER_BYTES;
        let raw = bytes
            .get(pos..pos + 4 * count)
            .ok_or_else(|| bad(format!("truncated inside tensor {id}")))?;
        out.push(
            raw.chunks_exact(4)
                .map(|b| f32::from_le_bytes(b.try_into().unwrap()))
                .collect(),
        );
        pos += 4 * count;
    }
    if pos != bytes.len() {
        return Err(bad(format!("{} trailing bytes", bytes.len() - pos)));
    }
    Ok(out)
}

/// Size of a compressed payload set: header plus `C * k * 8` per tensor.
pub fn payload_size(grids: &[ChunkGrid], ks: &[usize]) -> u64 {
    grids
        .iter()
        .zip(ks)
        .map(|(g, &k)| compressed_size(g, k) as u64)
        .sum()
}

/// Size of a dense payload set: header plus `4 n` per tensor.
pub fn dense_payload_size(lens: impl IntoIterator<Item = usize>) -> usize {
    lens.into_iter().map(|n| TENSOR_HEADER_BYTES + 4 * n).sum()
}

/// Aggregate (sent + received, summed over workers) bytes of one full-mesh
/// collective where every worker contributes `payload` bytes.
pub fn mesh_traffic(world: usize, payload: u64) -> u64 {
    let w = world as u64;
    2 * w * (w - 1) * payload
}
