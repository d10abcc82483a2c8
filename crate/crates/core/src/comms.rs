//! Message passing between workers and the collectives built on top of it.
//!
//! A [`Transport`] moves framed byte messages between ranks. Messages between
//! a fixed ordered pair arrive in send order; a receive names the tag it
//! expects and earlier messages with other tags are parked until asked for.
//!
//! Wire framing of every message: `tag: u64 LE | length: u64 LE | payload`.

use std::cell::RefCell;
use std::collections::VecDeque;
use std::ops::Range;

use crossbeam_channel::{unbounded, Receiver, Sender};
use thiserror::Error;

use crate::blockgrid::{Block, BlockStorage, GridError};
use crate::field::Field;

#[derive(Debug, Error)]
pub enum CommError {
    #[error("peer {0} disconnected")]
    Disconnected(usize),
    #[error("malformed frame: {0}")]
    Frame(String),
    #[error("rank {0} out of range")]
    BadRank(usize),
    #[error("reduction operators differ across workers")]
    OpMismatch,
    #[error("field '{name}': ghost layers differ across blocks ({a} vs {b})")]
    GhostMismatch { name: String, a: usize, b: usize },
    #[error("field '{name}' needs at least one ghost layer")]
    NoGhostLayers { name: String },
    #[error("line {0:?} lies outside the domain")]
    LineOutside(LineSpec),
    #[error("coarsening factor must be at least 1")]
    BadCoarsen,
    #[error("payload is not valid UTF-8")]
    Utf8,
    #[error(transparent)]
    Grid(#[from] GridError),
}

pub type CommResult<T> = Result<T, CommError>;

/// Encodes one message frame.
pub fn encode_frame(tag: u64, payload: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + payload.len());
    out.extend_from_slice(&tag.to_le_bytes());
    out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
    out.extend_from_slice(payload);
    out
}

/// Splits a frame into tag and payload.
pub fn decode_frame(frame: &[u8]) -> CommResult<(u64, &[u8])> {
    if frame.len() < 16 {
        return Err(CommError::Frame(format!("{} bytes is shorter than the header", frame.len())));
    }
    let tag = u64::from_le_bytes(frame[0..8].try_into().unwrap());
    let len = u64::from_le_bytes(frame[8..16].try_into().unwrap()) as usize;
    if frame.len() != 16 + len {
        return Err(CommError::Frame(format!("length field {len} but {} payload bytes", frame.len() - 16)));
    }
    Ok((tag, &frame[16..]))
}

pub trait Transport {
    fn rank(&self) -> usize;
    fn size(&self) -> usize;
    fn send(&self, dest: usize, tag: u64, payload: &[u8]) -> CommResult<()>;
    fn recv(&self, source: usize, tag: u64) -> CommResult<Vec<u8>>;

    fn is_root(&self) -> bool {
        self.rank() == 0
    }
}

/// In-process transport: one thread per worker, one unbounded channel per
/// ordered pair of ranks.
pub struct LocalTransport {
    rank: usize,
    senders: Vec<Sender<Vec<u8>>>,
    receivers: Vec<Receiver<Vec<u8>>>,
    parked: RefCell<Vec<VecDeque<(u64, Vec<u8>)>>>,
}

impl LocalTransport {
    /// Creates connected endpoints for `size` workers, indexed by rank.
    pub fn create(size: usize) -> Vec<LocalTransport> {
        // channels[i][j] carries messages from rank i to rank j
        let mut channels: Vec<Vec<Option<(Sender<Vec<u8>>, Receiver<Vec<u8>>)>>> =
            (0..size).map(|_| (0..size).map(|_| Some(unbounded())).collect()).collect();
        let mut senders: Vec<Vec<Option<Sender<Vec<u8>>>>> = vec![vec![None; size]; size];
        let mut receivers: Vec<Vec<Option<Receiver<Vec<u8>>>>> = (0..size).map(|_| vec![None; size]).collect();
        for (i, row) in channels.iter_mut().enumerate() {
            for (j, slot) in row.iter_mut().enumerate() {
                let (tx, rx) = slot.take().unwrap();
                senders[i][j] = Some(tx);
                receivers[j][i] = Some(rx);
            }
        }
        senders
            .into_iter()
            .zip(receivers)
            .enumerate()
            .map(|(rank, (s, r))| LocalTransport {
                rank,
                senders: s.into_iter().map(Option::unwrap).collect(),
                receivers: r.into_iter().map(Option::unwrap).collect(),
                parked: RefCell::new(vec![VecDeque::new(); size]),
            })
            .collect()
    }

    /// Single-worker transport.
    pub fn solo() -> LocalTransport {
        Self::create(1).pop().unwrap()
    }
}

impl Transport for LocalTransport {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.senders.len()
    }

    fn send(&self, dest: usize, tag: u64, payload: &[u8]) -> CommResult<()> {
        let tx = self.senders.get(dest).ok_or(CommError::BadRank(dest))?;
        tx.send(encode_frame(tag, payload)).map_err(|_| CommError::Disconnected(dest))
    }

    fn recv(&self, source: usize, tag: u64) -> CommResult<Vec<u8>> {
        let rx = self.receivers.get(source).ok_or(CommError::BadRank(source))?;
        {
            let mut parked = self.parked.borrow_mut();
            let queue = &mut parked[source];
            if let Some(pos) = queue.iter().position(|(t, _)| *t == tag) {
                return Ok(queue.remove(pos).unwrap().1);
            }
        }
        loop {
            let frame = rx.recv().map_err(|_| CommError::Disconnected(source))?;
            let (t, payload) = decode_frame(&frame)?;
            if t == tag {
                return Ok(payload.to_vec());
            }
            self.parked.borrow_mut()[source].push_back((t, payload.to_vec()));
        }
    }
}

// Collective tags live in the upper part of the tag space; exchange tags are
// FNV hashes with the top bit cleared.
const TAG_BCAST: u64 = 0xF000_0000_0000_0001;
const TAG_GATHER: u64 = 0xF000_0000_0000_0002;
const TAG_REDUCE: u64 = 0xF000_0000_0000_0003;
const TAG_SCATTER: u64 = 0xF000_0000_0000_0004;
const TAG_SLICE: u64 = 0xF000_0000_0000_0005;

/// Root-to-all broadcast. Root passes `Some(data)`.
pub fn broadcast_bytes<T: Transport + ?Sized>(t: &T, data: Option<&[u8]>) -> CommResult<Vec<u8>> {
    if t.is_root() {
        let data = data.unwrap_or_default();
        for dest in 1..t.size() {
            t.send(dest, TAG_BCAST, data)?;
        }
        Ok(data.to_vec())
    } else {
        t.recv(0, TAG_BCAST)
    }
}

/// Collects one payload per rank on root, in rank order.
pub fn gather_bytes<T: Transport + ?Sized>(t: &T, data: &[u8]) -> CommResult<Option<Vec<Vec<u8>>>> {
    if t.is_root() {
        let mut all = vec![data.to_vec()];
        for src in 1..t.size() {
            all.push(t.recv(src, TAG_GATHER)?);
        }
        Ok(Some(all))
    } else {
        t.send(0, TAG_GATHER, data)?;
        Ok(None)
    }
}

/// Root hands out one payload per rank.
pub fn scatter_bytes<T: Transport + ?Sized>(t: &T, parts: Option<Vec<Vec<u8>>>) -> CommResult<Vec<u8>> {
    if t.is_root() {
        let mut parts = parts.unwrap_or_default();
        parts.resize(t.size(), Vec::new());
        for (dest, p) in parts.iter().enumerate().skip(1) {
            t.send(dest, TAG_SCATTER, p)?;
        }
        Ok(std::mem::take(&mut parts[0]))
    } else {
        t.recv(0, TAG_SCATTER)
    }
}

pub fn barrier<T: Transport + ?Sized>(t: &T) -> CommResult<()> {
    gather_bytes(t, &[])?;
    broadcast_bytes(t, Some(&[]))?;
    Ok(())
}

/// Broadcasts a line of text from root to every worker.
pub fn broadcast_line<T: Transport + ?Sized>(t: &T, text: Option<&str>) -> CommResult<String> {
    let bytes = broadcast_bytes(t, text.map(str::as_bytes))?;
    String::from_utf8(bytes).map_err(|_| CommError::Utf8)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ReduceOp {
    Min,
    Max,
    Sum,
}

impl ReduceOp {
    fn code(self) -> u8 {
        match self {
            ReduceOp::Min => 0,
            ReduceOp::Max => 1,
            ReduceOp::Sum => 2,
        }
    }

    pub fn apply(self, a: f64, b: f64) -> f64 {
        match self {
            ReduceOp::Min => a.min(b),
            ReduceOp::Max => a.max(b),
            ReduceOp::Sum => a + b,
        }
    }

    pub fn parse(name: &str) -> Option<Self> {
        match name.to_ascii_uppercase().as_str() {
            "MIN" => Some(ReduceOp::Min),
            "MAX" => Some(ReduceOp::Max),
            "SUM" => Some(ReduceOp::Sum),
            _ => None,
        }
    }
}

/// Folds one value per worker in rank order; only root gets `Some`.
pub fn reduce_scalar<T: Transport + ?Sized>(t: &T, value: f64, op: ReduceOp) -> CommResult<Option<f64>> {
    let mut msg = vec![op.code()];
    msg.extend_from_slice(&value.to_le_bytes());
    if t.is_root() {
        let mut acc = value;
        let mut mismatch = false;
        for src in 1..t.size() {
            let m = t.recv(src, TAG_REDUCE)?;
            if m.len() != 9 {
                return Err(CommError::Frame("reduce payload".into()));
            }
            mismatch |= m[0] != op.code();
            acc = op.apply(acc, f64::from_le_bytes(m[1..9].try_into().unwrap()));
        }
        if mismatch {
            return Err(CommError::OpMismatch);
        }
        Ok(Some(acc))
    } else {
        t.send(0, TAG_REDUCE, &msg)?;
        Ok(None)
    }
}

/// Reduction whose result is broadcast to every worker.
pub fn allreduce_scalar<T: Transport + ?Sized>(t: &T, value: f64, op: ReduceOp) -> CommResult<f64> {
    let r = reduce_scalar(t, value, op)?;
    let bytes = broadcast_bytes(t, r.map(f64::to_le_bytes).as_ref().map(|b| b.as_slice()))?;
    Ok(f64::from_le_bytes(bytes[..8].try_into().map_err(|_| CommError::Frame("allreduce".into()))?))
}

pub fn f64s_to_bytes(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

pub fn bytes_to_f64s(bytes: &[u8]) -> CommResult<Vec<f64>> {
    if bytes.len() % 8 != 0 {
        return Err(CommError::Frame("f64 payload not a multiple of 8".into()));
    }
    Ok(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
}

fn fnv1a(parts: &[&[u8]]) -> u64 {
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for p in parts {
        for &b in *p {
            h ^= b as u64;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        }
        h ^= 0xff;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    h
}

/// Deterministic tag for data destined to `block`'s ghost slab on `side` of `axis`.
pub fn exchange_tag(block: usize, axis: usize, side: i64, field: &str, reverse: bool) -> u64 {
    let h = fnv1a(&[
        &(block as u64).to_le_bytes(),
        &[axis as u8, (side > 0) as u8, reverse as u8],
        field.as_bytes(),
    ]);
    h & !(1u64 << 63)
}

/// One face link of a local block.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExchangeLink {
    pub block: usize,
    pub axis: usize,
    /// Side of `block` the link sits on: -1 or +1.
    pub side: i64,
    pub peer_block: usize,
    pub peer_worker: usize,
}

/// Face links of every block owned by one worker, ordered by axis, block, side.
#[derive(Debug, Clone)]
pub struct ExchangePlan {
    worker: usize,
    links: Vec<ExchangeLink>,
}

impl ExchangePlan {
    pub fn new(storage: &BlockStorage, worker: usize) -> CommResult<Self> {
        let mut links = Vec::new();
        for axis in 0..3 {
            for b in storage.local_blocks(worker)? {
                for side in [-1i64, 1] {
                    if let Some(p) = storage.neighbor(b, axis, side) {
                        links.push(ExchangeLink {
                            block: b.id(),
                            axis,
                            side,
                            peer_block: p.id(),
                            peer_worker: storage.owner(p.id()).unwrap(),
                        });
                    }
                }
            }
        }
        Ok(Self { worker, links })
    }

    pub fn worker(&self) -> usize {
        self.worker
    }

    pub fn links(&self) -> &[ExchangeLink] {
        &self.links
    }

    fn axis_links(&self, axis: usize) -> impl Iterator<Item = &ExchangeLink> {
        self.links.iter().filter(move |l| l.axis == axis)
    }
}

type Slab = [Range<isize>; 3];

/// Interior slab of thickness `g` adjacent to `side` of `axis`.
/// Other axes span `other` ghost cells beyond the interior.
fn boundary_slab(n: [usize; 3], g: usize, axis: usize, side: i64, other: usize) -> Slab {
    let g = g as isize;
    let o = other as isize;
    [0, 1, 2].map(|d| {
        let nd = n[d] as isize;
        if d == axis {
            if side < 0 {
                0..g
            } else {
                nd - g..nd
            }
        } else {
            -o..nd + o
        }
    })
}

fn ghost_slab(n: [usize; 3], g: usize, axis: usize, side: i64, other: usize) -> Slab {
    let gi = g as isize;
    let o = other as isize;
    [0, 1, 2].map(|d| {
        let nd = n[d] as isize;
        if d == axis {
            if side < 0 {
                -gi..0
            } else {
                nd..nd + gi
            }
        } else {
            -o..nd + o
        }
    })
}

fn read_slab(field: &Field, slab: &Slab, out: &mut Vec<f64>) {
    let fs = field.f_size();
    out.clear();
    for z in slab[2].clone() {
        for y in slab[1].clone() {
            for x in slab[0].clone() {
                let base = field.cell_index(x, y, z);
                let stride = field.strides()[3];
                let data = field.data();
                out.extend((0..fs).map(|f| data[base + f * stride]));
            }
        }
    }
}

fn write_slab(field: &mut Field, slab: &Slab, values: &[f64], accumulate: bool) {
    let fs = field.f_size();
    let stride = field.strides()[3];
    let mut it = values.iter();
    for z in slab[2].clone() {
        for y in slab[1].clone() {
            for x in slab[0].clone() {
                let base = field.cell_index(x, y, z);
                let data = field.data_mut();
                for f in 0..fs {
                    let v = *it.next().expect("slab payload too short");
                    if accumulate {
                        data[base + f * stride] += v;
                    } else {
                        data[base + f * stride] = v;
                    }
                }
            }
        }
    }
}

fn zero_slab(field: &mut Field, slab: &Slab) {
    let fs = field.f_size();
    let stride = field.strides()[3];
    for z in slab[2].clone() {
        for y in slab[1].clone() {
            for x in slab[0].clone() {
                let base = field.cell_index(x, y, z);
                for f in 0..fs {
                    field.data_mut()[base + f * stride] = 0.0;
                }
            }
        }
    }
}

/// Ghost-layer count shared by `name` on every block.
fn common_ghost_layers(storage: &BlockStorage, name: &str) -> CommResult<usize> {
    let mut g = None;
    for b in storage.blocks() {
        let gb = b.field(name)?.read().ghost_layers();
        match g {
            None => g = Some(gb),
            Some(g0) if g0 != gb => {
                return Err(CommError::GhostMismatch {
                    name: name.to_string(),
                    a: g0,
                    b: gb,
                })
            }
            _ => {}
        }
    }
    let g = g.unwrap_or(1);
    if g == 0 {
        return Err(CommError::NoGhostLayers { name: name.to_string() });
    }
    Ok(g)
}

fn block<'a>(storage: &'a BlockStorage, id: usize) -> &'a Block {
    storage.block(id).expect("plan refers to a kept block")
}

/// Synchronises the ghost layers of the named fields.
///
/// Three sweeps, x then y then z. Each sweep copies full-width slabs (ghosts of
/// the other axes included), so edge and corner ghosts are correct after the
/// last sweep.
pub fn exchange_ghost_layers<T: Transport + ?Sized>(
    storage: &BlockStorage,
    plan: &ExchangePlan,
    fields: &[&str],
    t: &T,
) -> CommResult<()> {
    let me = plan.worker;
    let mut buf = Vec::new();
    for &name in fields {
        let g = common_ghost_layers(storage, name)?;
        for axis in 0..3 {
            for l in plan.axis_links(axis) {
                let src = block(storage, l.block).field(name)?.read();
                let n = src.spatial_size();
                read_slab(&src, &boundary_slab(n, g, axis, l.side, g), &mut buf);
                drop(src);
                if l.peer_worker == me {
                    let mut dst = block(storage, l.peer_block).field(name)?.write();
                    let n = dst.spatial_size();
                    write_slab(&mut dst, &ghost_slab(n, g, axis, -l.side, g), &buf, false);
                } else {
                    let tag = exchange_tag(l.peer_block, axis, -l.side, name, false);
                    t.send(l.peer_worker, tag, &f64s_to_bytes(&buf))?;
                }
            }
            for l in plan.axis_links(axis).filter(|l| l.peer_worker != me) {
                let bytes = t.recv(l.peer_worker, exchange_tag(l.block, axis, l.side, name, false))?;
                let values = bytes_to_f64s(&bytes)?;
                let mut dst = block(storage, l.block).field(name)?.write();
                let n = dst.spatial_size();
                write_slab(&mut dst, &ghost_slab(n, g, axis, l.side, g), &values, false);
            }
        }
    }
    Ok(())
}

/// Reverse of the exchange: values accumulated in face ghost slabs are added
/// into the owning neighbor's boundary cells, then the ghosts are cleared.
/// Only face ghosts (interior extent along the other axes) take part.
pub fn accumulate_ghost_layers<T: Transport + ?Sized>(
    storage: &BlockStorage,
    plan: &ExchangePlan,
    fields: &[&str],
    t: &T,
) -> CommResult<()> {
    let me = plan.worker;
    let mut buf = Vec::new();
    for &name in fields {
        let g = common_ghost_layers(storage, name)?;
        let mut incoming: Vec<(usize, Slab, Vec<f64>)> = Vec::new();
        for l in &plan.links {
            let mut src = block(storage, l.block).field(name)?.write();
            let n = src.spatial_size();
            let gs = ghost_slab(n, g, l.axis, l.side, 0);
            read_slab(&src, &gs, &mut buf);
            zero_slab(&mut src, &gs);
            drop(src);
            if l.peer_worker == me {
                let peer = block(storage, l.peer_block).field(name)?.read();
                let n = peer.spatial_size();
                incoming.push((l.peer_block, boundary_slab(n, g, l.axis, -l.side, 0), buf.clone()));
            } else {
                let tag = exchange_tag(l.peer_block, l.axis, -l.side, name, true);
                t.send(l.peer_worker, tag, &f64s_to_bytes(&buf))?;
            }
        }
        for l in plan.links.iter().filter(|l| l.peer_worker != me) {
            let bytes = t.recv(l.peer_worker, exchange_tag(l.block, l.axis, l.side, name, true))?;
            let dst = block(storage, l.block).field(name)?.read();
            let n = dst.spatial_size();
            incoming.push((l.block, boundary_slab(n, g, l.axis, l.side, 0), bytes_to_f64s(&bytes)?));
        }
        for (id, slab, values) in incoming {
            let mut dst = block(storage, id).field(name)?.write();
            write_slab(&mut dst, &slab, &values, true);
        }
    }
    Ok(())
}

/// A line through the domain: two fixed coordinates, one free axis.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LineSpec {
    pub free_axis: usize,
    /// Global coordinates; the entry for `free_axis` is ignored.
    pub fixed: [i64; 3],
}

impl LineSpec {
    /// Line along z through `(x, y)`.
    pub fn along_z(x: i64, y: i64) -> Self {
        Self {
            free_axis: 2,
            fixed: [x, y, 0],
        }
    }
}

/// Gathers every `coarsen`-th value of a line onto root.
///
/// Entry `k` of the result holds the value at free coordinate `k * coarsen`.
/// Cells in discarded blocks come back as NaN.
pub fn gather_slice<T: Transport + ?Sized>(
    storage: &BlockStorage,
    line: LineSpec,
    field: &str,
    f_index: usize,
    coarsen: usize,
    t: &T,
) -> CommResult<Option<Vec<f64>>> {
    if coarsen == 0 {
        return Err(CommError::BadCoarsen);
    }
    let size = storage.cell_count();
    let a = line.free_axis;
    if a > 2 || (0..3).any(|d| d != a && (line.fixed[d] < 0 || line.fixed[d] >= size[d] as i64)) {
        return Err(CommError::LineOutside(line));
    }
    let count = size[a].div_ceil(coarsen);
    let mut mine: Vec<u8> = Vec::new();
    for b in storage.local_blocks(t.rank())? {
        let iv = b.interval();
        if (0..3).any(|d| d != a && (line.fixed[d] < iv.min[d] || line.fixed[d] > iv.max[d])) {
            continue;
        }
        let f = b.field(field)?.read();
        for k in 0..count {
            let mut cell = line.fixed;
            cell[a] = (k * coarsen) as i64;
            if iv.contains(cell) {
                let l = b.to_local(cell);
                mine.extend_from_slice(&(k as u64).to_le_bytes());
                mine.extend_from_slice(&f.get(l[0], l[1], l[2], f_index).to_le_bytes());
            }
        }
    }
    if t.is_root() {
        let mut out = vec![f64::NAN; count];
        let mut parts = vec![mine];
        for src in 1..t.size() {
            parts.push(t.recv(src, TAG_SLICE)?);
        }
        for p in parts {
            for rec in p.chunks_exact(16) {
                let k = u64::from_le_bytes(rec[..8].try_into().unwrap()) as usize;
                out[k] = f64::from_le_bytes(rec[8..].try_into().unwrap());
            }
        }
        Ok(Some(out))
    } else {
        t.send(0, TAG_SLICE, &mine)?;
        Ok(None)
    }
}

/// Runs `body` once per rank on its own thread with connected local transports.
/// Results come back in rank order; a panicking worker propagates its panic.
pub fn run_workers<R: Send>(size: usize, body: impl Fn(LocalTransport) -> R + Sync) -> Vec<R> {
    let transports = LocalTransport::create(size);
    std::thread::scope(|s| {
        let handles: Vec<_> = transports
            .into_iter()
            .map(|t| {
                let body = &body;
                s.spawn(move || body(t))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().unwrap_or_else(|e| std::panic::resume_unwind(e)))
            .collect()
    })
}
