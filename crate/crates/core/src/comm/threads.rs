//! In-process backend: one thread per rank, meeting at a shared rendezvous.

use std::sync::{Arc, Condvar, Mutex, MutexGuard};
use std::time::{Duration, Instant};

use super::{flat_sum, tree_sum, CommStats, Communicator, ReduceOrder};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Op {
    AllReduce,
    Barrier,
    Gather,
}

impl Op {
    fn name(self) -> &'static str {
        match self {
            Op::AllReduce => "all_reduce",
            Op::Barrier => "barrier",
            Op::Gather => "gather",
        }
    }
}

struct Slot {
    seq: u64,
    op: Op,
    data: Vec<f64>,
}

#[derive(Default)]
struct Round {
    generation: u64,
    slots: Vec<Option<Slot>>,
    arrivals: Vec<usize>,
    departed: usize,
    result: Option<Arc<Vec<f64>>>,
    poisoned: Option<String>,
}

struct Rendezvous {
    world: usize,
    order: ReduceOrder,
    timeout: Duration,
    round: Mutex<Round>,
    changed: Condvar,
}

pub struct ThreadComm {
    rank: usize,
    seq: u64,
    shared: Arc<Rendezvous>,
    stats: CommStats,
}

impl ThreadComm {
    /// Creates the communicators for a `world`-rank group.
    pub fn group(world: usize, order: ReduceOrder, timeout: Duration) -> Vec<ThreadComm> {
        assert!(world > 0, "world size must be positive");
        let shared = Arc::new(Rendezvous {
            world,
            order,
            timeout,
            round: Mutex::new(Round {
                slots: (0..world).map(|_| None).collect(),
                ..Round::default()
            }),
            changed: Condvar::new(),
        });
        (0..world)
            .map(|rank| ThreadComm {
                rank,
                seq: 0,
                shared: Arc::clone(&shared),
                stats: CommStats::default(),
            })
            .collect()
    }

    fn wait<'a>(
        &self,
        mut guard: MutexGuard<'a, Round>,
        deadline: Instant,
        op: Op,
        mut ready: impl FnMut(&Round) -> bool,
    ) -> Result<MutexGuard<'a, Round>> {
        loop {
            if let Some(reason) = &guard.poisoned {
                return Err(Error::Protocol {
                    rank: self.rank,
                    reason: reason.clone(),
                });
            }
            if ready(&guard) {
                return Ok(guard);
            }
            let now = Instant::now();
            if now >= deadline {
                guard.poisoned = Some(format!("rank {} timed out in {}", self.rank, op.name()));
                self.shared.changed.notify_all();
                return Err(Error::Timeout {
                    operation: op.name(),
                    rank: self.rank,
                    secs: self.shared.timeout.as_secs_f64(),
                });
            }
            guard = self
                .shared
                .changed
                .wait_timeout(guard, deadline - now)
                .unwrap()
                .0;
        }
    }

    fn collective(&mut self, op: Op, data: Vec<f64>) -> Result<Arc<Vec<f64>>> {
        self.seq += 1;
        let shared = Arc::clone(&self.shared);
        let deadline = Instant::now() + shared.timeout;
        let guard = shared.round.lock().unwrap();
        // A previous round may still be draining.
        let mut guard = self.wait(guard, deadline, op, |r| r.result.is_none())?;

        guard.slots[self.rank] = Some(Slot {
            seq: self.seq,
            op,
            data,
        });
        guard.arrivals.push(self.rank);
        let generation = guard.generation;

        if guard.arrivals.len() == shared.world {
            match combine(&guard, shared.order) {
                Ok(result) => guard.result = Some(Arc::new(result)),
                Err(reason) => {
                    guard.poisoned = Some(reason.clone());
                    shared.changed.notify_all();
                    return Err(Error::Protocol {
                        rank: self.rank,
                        reason,
                    });
                }
            }
            shared.changed.notify_all();
        }

        let mut guard = self.wait(guard, deadline, op, |r| {
            r.generation == generation && r.result.is_some()
        })?;
        let result = Arc::clone(guard.result.as_ref().unwrap());
        guard.departed += 1;
        if guard.departed == shared.world {
            guard.slots.iter_mut().for_each(|s| *s = None);
            guard.arrivals.clear();
            guard.departed = 0;
            guard.result = None;
            guard.generation += 1;
            shared.changed.notify_all();
        }
        Ok(result)
    }
}

fn combine(round: &Round, order: ReduceOrder) -> std::result::Result<Vec<f64>, String> {
    let slots: Vec<&Slot> = round.slots.iter().map(|s| s.as_ref().unwrap()).collect();
    let first = slots[0];
    for (r, s) in slots.iter().enumerate() {
        if s.seq != first.seq || s.op != first.op {
            return Err(format!(
                "mismatched collectives: rank 0 issued {} #{}, rank {r} issued {} #{}",
                first.op.name(),
                first.seq,
                s.op.name(),
                s.seq
            ));
        }
        if s.op == Op::AllReduce && s.data.len() != first.data.len() {
            return Err(format!(
                "all_reduce length mismatch: rank 0 has {}, rank {r} has {}",
                first.data.len(),
                s.data.len()
            ));
        }
    }
    Ok(match first.op {
        Op::Barrier => Vec::new(),
        Op::Gather => slots.iter().flat_map(|s| s.data.iter().copied()).collect(),
        Op::AllReduce => match order {
            ReduceOrder::Tree => {
                let parts: Vec<&[f64]> = slots.iter().map(|s| s.data.as_slice()).collect();
                tree_sum(&parts)
            }
            ReduceOrder::Arrival => {
                let parts: Vec<&[f64]> = round
                    .arrivals
                    .iter()
                    .map(|&r| slots[r].data.as_slice())
                    .collect();
                flat_sum(&parts)
            }
        },
    })
}

impl Communicator for ThreadComm {
    fn rank(&self) -> usize {
        self.rank
    }

    fn size(&self) -> usize {
        self.shared.world
    }

    fn reduce_order(&self) -> ReduceOrder {
        self.shared.order
    }

    fn all_reduce_sum(&mut self, buf: &mut [f64]) -> Result<()> {
        self.stats.record_reduce(buf.len());
        if self.shared.world == 1 {
            return Ok(());
        }
        let result = self.collective(Op::AllReduce, buf.to_vec())?;
        buf.copy_from_slice(&result);
        Ok(())
    }

    fn barrier(&mut self) -> Result<()> {
        self.stats.barriers += 1;
        if self.shared.world == 1 {
            return Ok(());
        }
        self.collective(Op::Barrier, Vec::new()).map(|_| ())
    }

    fn gather_to_root(&mut self, buf: &[f64]) -> Result<Vec<f64>> {
        self.stats.gathers += 1;
        if self.shared.world == 1 {
            return Ok(buf.to_vec());
        }
        let all = self.collective(Op::Gather, buf.to_vec())?;
        Ok(if self.rank == 0 {
            all.to_vec()
        } else {
            Vec::new()
        })
    }

    fn stats(&self) -> CommStats {
        self.stats
    }

    fn reset_stats(&mut self) {
        self.stats = CommStats::default();
    }
}

/// Runs `f` on `world` scoped threads, one per rank, and returns the per-rank
/// results in rank order.
pub fn run_threads<R, F>(world: usize, order: ReduceOrder, timeout: Duration, f: F) -> Vec<R>
where
    R: Send,
    F: Fn(&mut ThreadComm) -> R + Sync,
{
    let comms = ThreadComm::group(world, order, timeout);
    std::thread::scope(|scope| {
        let handles: Vec<_> = comms
            .into_iter()
            .map(|mut comm| {
                let f = &f;
                scope.spawn(move || f(&mut comm))
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("worker thread panicked"))
            .collect()
    })
}
