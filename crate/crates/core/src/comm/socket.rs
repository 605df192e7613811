//! Multi-process backend over local TCP streams.
//!
//! Rank 0 is the rendezvous point: every other rank holds one connection to
//! it. Each collective is a single request frame from every non-root rank
//! followed by a reply frame from the root; the root sums with the same
//! fixed tree as the in-process backend. Frames are little-endian:
//! `u32 sequence, u32 tag, u64 payload bytes, payload`.

use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{SocketAddr, TcpListener, TcpStream};
use std::time::{Duration, Instant};

use super::{
    flat_sum, tree_sum, CommStats, Communicator, ReduceOrder, ENV_COORD, ENV_RANK, ENV_WORLD,
};
use crate::error::{Error, Result};

const TAG_HELLO: u32 = 1;
const TAG_ALL_REDUCE: u32 = 2;
const TAG_BARRIER: u32 = 3;
const TAG_GATHER: u32 = 4;
const TAG_ERROR: u32 = 0xFFFF;

fn tag_name(tag: u32) -> &'static str {
    match tag {
        TAG_HELLO => "hello",
        TAG_ALL_REDUCE => "all_reduce",
        TAG_BARRIER => "barrier",
        TAG_GATHER => "gather",
        TAG_ERROR => "error",
        _ => "unknown",
    }
}

#[derive(Debug)]
struct Frame {
    seq: u32,
    tag: u32,
    payload: Vec<u8>,
}

struct Peer {
    reader: BufReader<TcpStream>,
    writer: BufWriter<TcpStream>,
}

impl Peer {
    fn new(stream: TcpStream, timeout: Duration) -> io::Result<Self> {
        stream.set_nodelay(true)?;
        stream.set_read_timeout(Some(timeout))?;
        stream.set_write_timeout(Some(timeout))?;
        Ok(Peer {
            reader: BufReader::new(stream.try_clone()?),
            writer: BufWriter::new(stream),
        })
    }

    fn send(&mut self, seq: u32, tag: u32, payload: &[u8]) -> io::Result<()> {
        self.writer.write_all(&seq.to_le_bytes())?;
        self.writer.write_all(&tag.to_le_bytes())?;
        self.writer
            .write_all(&(payload.len() as u64).to_le_bytes())?;
        self.writer.write_all(payload)?;
        self.writer.flush()
    }

    fn recv(&mut self) -> io::Result<Frame> {
        let mut head = [0u8; 16];
        self.reader.read_exact(&mut head)?;
        let seq = u32::from_le_bytes(head[0..4].try_into().unwrap());
        let tag = u32::from_le_bytes(head[4..8].try_into().unwrap());
        let len = u64::from_le_bytes(head[8..16].try_into().unwrap()) as usize;
        let mut payload = vec![0u8; len];
        self.reader.read_exact(&mut payload)?;
        Ok(Frame { seq, tag, payload })
    }
}

fn encode(values: &[f64]) -> Vec<u8> {
    values.iter().flat_map(|v| v.to_le_bytes()).collect()
}

fn decode(bytes: &[u8]) -> Vec<f64> {
    bytes
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect()
}

pub struct SocketComm {
    rank: usize,
    world: usize,
    seq: u32,
    order: ReduceOrder,
    timeout: Duration,
    /// Root: connections to ranks `1..world` in rank order. Others: the root.
    peers: Vec<Peer>,
    stats: CommStats,
}

impl SocketComm {
    /// Root side: accepts `world - 1` ranks on `listener`.
    pub fn coordinator(
        listener: TcpListener,
        world: usize,
        order: ReduceOrder,
        timeout: Duration,
    ) -> Result<Self> {
        let mut slots: Vec<Option<Peer>> = (1..world).map(|_| None).collect();
        let deadline = Instant::now() + timeout;
        listener.set_nonblocking(true)?;
        let mut pending = world - 1;
        while pending > 0 {
            match listener.accept() {
                Ok((stream, _)) => {
                    stream.set_nonblocking(false)?;
                    let mut peer = Peer::new(stream, timeout)?;
                    let hello = peer
                        .recv()
                        .map_err(|e| io_to_error(e, 0, "hello", timeout))?;
                    let fields = decode(&hello.payload);
                    if hello.tag != TAG_HELLO || fields.len() != 2 {
                        return Err(Error::Protocol {
                            rank: 0,
                            reason: "expected hello frame".into(),
                        });
                    }
                    let (r, w) = (fields[0] as usize, fields[1] as usize);
                    if w != world || r == 0 || r >= world || slots[r - 1].is_some() {
                        return Err(Error::Protocol {
                            rank: 0,
                            reason: format!(
                                "bad hello: rank {r} of world {w} (expected world {world})"
                            ),
                        });
                    }
                    slots[r - 1] = Some(peer);
                    pending -= 1;
                }
                Err(e) if e.kind() == io::ErrorKind::WouldBlock => {
                    if Instant::now() >= deadline {
                        return Err(Error::Timeout {
                            operation: "rendezvous",
                            rank: 0,
                            secs: timeout.as_secs_f64(),
                        });
                    }
                    std::thread::sleep(Duration::from_millis(2));
                }
                Err(e) => return Err(e.into()),
            }
        }
        Ok(SocketComm {
            rank: 0,
            world,
            seq: 0,
            order,
            timeout,
            peers: slots.into_iter().map(Option::unwrap).collect(),
            stats: CommStats::default(),
        })
    }

    /// Non-root side: connects to the root at `coord`, retrying until the
    /// timeout while the root is still starting.
    pub fn connect(
        coord: SocketAddr,
        rank: usize,
        world: usize,
        order: ReduceOrder,
        timeout: Duration,
    ) -> Result<Self> {
        assert!(rank > 0 && rank < world);
        let deadline = Instant::now() + timeout;
        let stream = loop {
            match TcpStream::connect_timeout(&coord, timeout) {
                Ok(s) => break s,
                Err(_) if Instant::now() < deadline => {
                    std::thread::sleep(Duration::from_millis(10))
                }
                Err(e) => return Err(e.into()),
            }
        };
        let mut peer = Peer::new(stream, timeout)?;
        peer.send(0, TAG_HELLO, &encode(&[rank as f64, world as f64]))?;
        Ok(SocketComm {
            rank,
            world,
            seq: 0,
            order,
            timeout,
            peers: vec![peer],
            stats: CommStats::default(),
        })
    }

    /// Joins the group described by `SHAPFLOW_RANK`, `SHAPFLOW_WORLD` and
    /// `SHAPFLOW_COORD`. Rank 0 binds the coordinator address itself.
    pub fn from_env(order: ReduceOrder, timeout: Duration) -> Result<Self> {
        let var = |name: &str| {
            std::env::var(name)
                .map_err(|_| Error::Format(format!("environment variable {name} not set")))
        };
        let rank: usize = var(ENV_RANK)?
            .parse()
            .map_err(|e| Error::Format(format!("{ENV_RANK}: {e}")))?;
        let world: usize = var(ENV_WORLD)?
            .parse()
            .map_err(|e| Error::Format(format!("{ENV_WORLD}: {e}")))?;
        let coord: SocketAddr = var(ENV_COORD)?
            .parse()
            .map_err(|e| Error::Format(format!("{ENV_COORD}: {e}")))?;
        if world == 0 || rank >= world {
            return Err(Error::Format(format!(
                "rank {rank} invalid for world {world}"
            )));
        }
        if rank == 0 {
            Self::coordinator(TcpListener::bind(coord)?, world, order, timeout)
        } else {
            Self::connect(coord, rank, world, order, timeout)
        }
    }

    fn fail_all(&mut self, reason: &str) {
        for p in &mut self.peers {
            let _ = p.send(self.seq, TAG_ERROR, reason.as_bytes());
        }
    }

    fn collective(&mut self, tag: u32, data: &[f64]) -> Result<Vec<f64>> {
        self.seq = self.seq.wrapping_add(1);
        let (rank, seq, timeout) = (self.rank, self.seq, self.timeout);
        if rank != 0 {
            let peer = &mut self.peers[0];
            peer.send(seq, tag, &encode(data))
                .map_err(|e| io_to_error(e, rank, tag_name(tag), timeout))?;
            let reply = peer
                .recv()
                .map_err(|e| io_to_error(e, rank, tag_name(tag), timeout))?;
            if reply.tag == TAG_ERROR {
                return Err(Error::Protocol {
                    rank,
                    reason: String::from_utf8_lossy(&reply.payload).into_owned(),
                });
            }
            if reply.seq != seq || reply.tag != tag {
                return Err(Error::Protocol {
                    rank,
                    reason: format!(
                        "reply #{} {} does not match request #{seq} {}",
                        reply.seq,
                        tag_name(reply.tag),
                        tag_name(tag)
                    ),
                });
            }
            return Ok(decode(&reply.payload));
        }

        let mut contributions = vec![data.to_vec()];
        for r in 1..self.world {
            let frame = match self.peers[r - 1].recv() {
                Ok(f) => f,
                Err(e) => {
                    let err = io_to_error(e, 0, tag_name(tag), timeout);
                    self.fail_all(&format!("root failed receiving from rank {r}: {err}"));
                    return Err(err);
                }
            };
            let values = decode(&frame.payload);
            let mismatch = if frame.seq != seq || frame.tag != tag {
                Some(format!(
                    "mismatched collectives: rank 0 issued {} #{seq}, rank {r} issued {} #{}",
                    tag_name(tag),
                    tag_name(frame.tag),
                    frame.seq
                ))
            } else if tag == TAG_ALL_REDUCE && values.len() != data.len() {
                Some(format!(
                    "all_reduce length mismatch: rank 0 has {}, rank {r} has {}",
                    data.len(),
                    values.len()
                ))
            } else {
                None
            };
            if let Some(reason) = mismatch {
                // drain the remaining requests so peers are not left blocked
                for rest in r + 1..self.world {
                    let _ = self.peers[rest - 1].recv();
                }
                self.fail_all(&reason);
                return Err(Error::Protocol { rank: 0, reason });
            }
            contributions.push(values);
        }

        let parts: Vec<&[f64]> = contributions.iter().map(|v| v.as_slice()).collect();
        let (reply, mine) = match tag {
            TAG_ALL_REDUCE => {
                let sum = match self.order {
                    ReduceOrder::Tree => tree_sum(&parts),
                    ReduceOrder::Arrival => flat_sum(&parts),
                };
                (encode(&sum), sum)
            }
            TAG_GATHER => (Vec::new(), parts.concat()),
            _ => (Vec::new(), Vec::new()),
        };
        for r in 1..self.world {
            self.peers[r - 1]
                .send(seq, tag, &reply)
                .map_err(|e| io_to_error(e, 0, tag_name(tag), timeout))?;
        }
        Ok(mine)
    }
}

fn io_to_error(e: io::Error, rank: usize, operation: &'static str, timeout: Duration) -> Error {
    match e.kind() {
        io::ErrorKind::WouldBlock | io::ErrorKind::TimedOut => Error::Timeout {
            operation,
            rank,
            secs: timeout.as_secs_f64(),
        },
        io::ErrorKind::UnexpectedEof
        | io::ErrorKind::ConnectionReset
        | io::ErrorKind::BrokenPipe => Error::Protocol {
            rank,
            reason: format!("peer disconnected during {operation}: {e}"),
        },
        _ => Error::Io(e),
    }
}

impl Communicator for SocketComm {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.world
    }

    fn reduce_order(&self) -> ReduceOrder {
        self.order
    }

    fn all_reduce_sum(&mut self, buf: &mut [f64]) -> Result<()> {
        self.stats.record_reduce(buf.len());
        if self.world == 1 {
            return Ok(());
        }
        let out = self.collective(TAG_ALL_REDUCE, buf)?;
        buf.copy_from_slice(&out);
        Ok(())
    }

    fn barrier(&mut self) -> Result<()> {
        self.stats.barriers += 1;
        if self.world == 1 {
            return Ok(());
        }
        self.collective(TAG_BARRIER, &[]).map(|_| ())
    }

    fn gather_to_root(&mut self, buf: &[f64]) -> Result<Vec<f64>> {
        self.stats.gathers += 1;
        if self.world == 1 {
            return Ok(buf.to_vec());
        }
        self.collective(TAG_GATHER, buf)
    }

    fn stats(&self) -> CommStats {
        self.stats
    }

    fn reset_stats(&mut self) {
        self.stats = CommStats::default();
    }
}

/// Runs `f` on `world` threads that communicate through real sockets on the
/// loopback interface. Used to exercise the wire protocol in one process.
pub fn run_local_sockets<R, F>(
    world: usize,
    order: ReduceOrder,
    timeout: Duration,
    f: F,
) -> Result<Vec<R>>
where
    R: Send,
    F: Fn(&mut SocketComm) -> R + Sync,
{
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let addr = listener.local_addr()?;
    std::thread::scope(|scope| {
        let f = &f;
        let root = scope.spawn(move || -> Result<R> {
            let mut comm = SocketComm::coordinator(listener, world, order, timeout)?;
            Ok(f(&mut comm))
        });
        let others: Vec<_> = (1..world)
            .map(|rank| {
                scope.spawn(move || -> Result<R> {
                    let mut comm = SocketComm::connect(addr, rank, world, order, timeout)?;
                    Ok(f(&mut comm))
                })
            })
            .collect();
        let mut out = vec![root.join().expect("rank 0 panicked")?];
        for h in others {
            out.push(h.join().expect("rank panicked")?);
        }
        Ok(out)
    })
}
