//! Per-expert FIFO work queues, one per (layer, expert) pair.

use std::collections::{HashSet, VecDeque};

use crate::error::ModelError;
use crate::types::{ExpertId, SeqId};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ExpertQueueEntry {
    pub seq: SeqId,
    /// Index of the token within its sequence's in-flight token list.
    pub token: usize,
    pub layer: usize,
    pub expert: ExpertId,
    pub weight: f64,
}

impl ExpertQueueEntry {
    fn key(&self) -> (SeqId, usize, usize, ExpertId) {
        (self.seq, self.token, self.layer, self.expert)
    }
}

#[derive(Debug, Clone)]
pub struct ExpertQueues {
    queues: Vec<Vec<VecDeque<ExpertQueueEntry>>>,
    live: HashSet<(SeqId, usize, usize, ExpertId)>,
}

impl ExpertQueues {
    pub fn new(num_layers: usize, num_experts: usize) -> Self {
        ExpertQueues {
            queues: vec![vec![VecDeque::new(); num_experts]; num_layers],
            live: HashSet::new(),
        }
    }

    pub fn num_experts(&self) -> usize {
        self.queues.first().map_or(0, Vec::len)
    }

    /// Appends entries FIFO to their expert queues. Rejects the whole call if
    /// any (sequence, token, layer, expert) tuple is already queued.
    pub fn enqueue(&mut self, entries: &[ExpertQueueEntry]) -> Result<usize, ModelError> {
        let mut seen = HashSet::with_capacity(entries.len());
        for e in entries {
            if self.live.contains(&e.key()) || !seen.insert(e.key()) {
                return Err(ModelError::DuplicateQueueEntry {
                    seq: e.seq,
                    token: e.token,
                    layer: e.layer,
                    expert: e.expert,
                });
            }
        }
        for e in entries {
            self.live.insert(e.key());
            self.queues[e.layer][e.expert].push_back(*e);
        }
        Ok(entries.len())
    }

    pub fn len(&self, layer: usize, expert: ExpertId) -> usize {
        self.queues[layer][expert].len()
    }

    pub fn peek(&self, layer: usize, expert: ExpertId) -> impl Iterator<Item = &ExpertQueueEntry> {
        self.queues[layer][expert].iter()
    }

    /// Removes and returns everything queued for one expert at one layer.
    pub fn drain(&mut self, layer: usize, expert: ExpertId) -> Vec<ExpertQueueEntry> {
        let out: Vec<ExpertQueueEntry> = self.queues[layer][expert].drain(..).collect();
        for e in &out {
            self.live.remove(&e.key());
        }
        out
    }

    /// Empties every expert queue of a layer (used when a batch is preempted).
    pub fn clear_layer(&mut self, layer: usize) -> usize {
        let mut n = 0;
        for e in 0..self.queues[layer].len() {
            n += self.drain(layer, e).len();
        }
        n
    }

    pub fn layer_is_empty(&self, layer: usize) -> bool {
        self.queues[layer].iter().all(VecDeque::is_empty)
    }

    pub fn is_empty(&self) -> bool {
        self.live.is_empty()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn entry(seq: SeqId, token: usize, expert: ExpertId) -> ExpertQueueEntry {
        ExpertQueueEntry { seq, token, layer: 0, expert, weight: 0.5 }
    }

    #[test]
    fn tokens_times_k_entries() {
        let mut q = ExpertQueues::new(1, 8);
        let entries: Vec<_> = (0..32).flat_map(|t| [entry(1, t, t % 8), entry(1, t, (t + 3) % 8)]).collect();
        assert_eq!(q.enqueue(&entries).unwrap(), 64);
        let total: usize = (0..8).map(|e| q.len(0, e)).sum();
        assert_eq!(total, 64);
    }

    #[test]
    fn single_token_lands_in_two_queues() {
        let mut q = ExpertQueues::new(1, 8);
        q.enqueue(&[entry(4, 0, 1), entry(4, 0, 6)]).unwrap();
        for e in 0..8 {
            assert_eq!(q.len(0, e), usize::from(e == 1 || e == 6));
        }
    }

    #[test]
    fn duplicates_rejected() {
        let mut q = ExpertQueues::new(1, 4);
        q.enqueue(&[entry(1, 0, 2)]).unwrap();
        let err = q.enqueue(&[entry(1, 0, 2)]).unwrap_err();
        assert!(matches!(err, ModelError::DuplicateQueueEntry { seq: 1, expert: 2, .. }));
        assert!(q.enqueue(&[entry(2, 0, 1), entry(2, 0, 1)]).is_err());
        assert_eq!(q.len(0, 1), 0);
        // after draining, the same tuple may be queued again
        q.drain(0, 2);
        q.enqueue(&[entry(1, 0, 2)]).unwrap();
    }

    #[test]
    fn drain_is_fifo_and_clear_empties_layer() {
        let mut q = ExpertQueues::new(2, 2);
        q.enqueue(&[entry(3, 0, 0), entry(1, 0, 0), entry(2, 0, 1)]).unwrap();
        let d: Vec<SeqId> = q.drain(0, 0).iter().map(|e| e.seq).collect();
        assert_eq!(d, vec![3, 1]);
        assert!(!q.layer_is_empty(0));
        assert_eq!(q.clear_layer(0), 1);
        assert!(q.layer_is_empty(0));
        assert!(q.is_empty());
    }
}
