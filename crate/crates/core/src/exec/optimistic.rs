use std::collections::{HashMap, VecDeque};
use std::sync::mpsc::{channel, Receiver, Sender};
use std::thread::JoinHandle;

use super::CriticalNodeCategory;
use crate::judge::{JudgeError, JudgeQuery, JudgeRegistry, JudgeVerdict};
use crate::session::TokenId;

/// An optimistically released action whose verdict is still outstanding.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PendingVerdict {
    pub seq: u64,
    pub session: TokenId,
    pub category: CriticalNodeCategory,
    /// The decision record of the released action.
    pub record_id: u64,
    pub api: String,
}

type Job = (u64, JudgeQuery);
type Done = (u64, Result<JudgeVerdict, JudgeError>);

/// Validates released actions on a worker thread. Results are handed back
/// strictly in submission order and only when asked for, so when they are
/// published is decided by the caller, not by thread timing.
pub struct AsyncValidator {
    jobs: Option<Sender<Job>>,
    done: Receiver<Done>,
    worker: Option<JoinHandle<()>>,
    pending: VecDeque<PendingVerdict>,
    arrived: HashMap<u64, Result<JudgeVerdict, JudgeError>>,
    next_seq: u64,
}

impl AsyncValidator {
    pub fn new(judges: JudgeRegistry) -> Self {
        let (jobs, job_rx) = channel::<Job>();
        let (done_tx, done) = channel::<Done>();
        let worker = std::thread::Builder::new()
            .name("aura-async-validator".into())
            .spawn(move || {
                while let Ok((seq, q)) = job_rx.recv() {
                    if done_tx.send((seq, judges.judge(&q))).is_err() {
                        break;
                    }
                }
            })
            .expect("spawn validator thread");
        Self {
            jobs: Some(jobs),
            done,
            worker: Some(worker),
            pending: VecDeque::new(),
            arrived: HashMap::new(),
            next_seq: 1,
        }
    }

    pub fn submit(&mut self, session: TokenId, category: CriticalNodeCategory, record_id: u64, api: &str, q: JudgeQuery) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.pending.push_back(PendingVerdict {
            seq,
            session,
            category,
            record_id,
            api: api.to_string(),
        });
        if let Some(tx) = &self.jobs {
            // A dead worker surfaces as an unavailable verdict below.
            let _ = tx.send((seq, q));
        }
    }

    pub fn pending_for(&self, session: TokenId, category: CriticalNodeCategory) -> usize {
        self.pending
            .iter()
            .filter(|p| p.session == session && p.category == category)
            .count()
    }

    pub fn has_pending(&self) -> bool {
        !self.pending.is_empty()
    }

    /// Blocks for the oldest outstanding verdict.
    pub fn next(&mut self) -> Option<(PendingVerdict, Result<JudgeVerdict, JudgeError>)> {
        let p = self.pending.pop_front()?;
        let result = loop {
            if let Some(r) = self.arrived.remove(&p.seq) {
                break r;
            }
            match self.done.recv() {
                Ok((seq, r)) => {
                    self.arrived.insert(seq, r);
                }
                Err(_) => break Err(JudgeError::Unavailable("validator worker stopped".into())),
            }
        };
        Some((p, result))
    }
}

impl Drop for AsyncValidator {
    fn drop(&mut self) {
        self.jobs.take();
        if let Some(w) = self.worker.take() {
            let _ = w.join();
        }
    }
}
