//! Unified Dynamic Cache: per-sequence KV storage with a byte ledger.
//!
//! Each sequence owns its own per-layer key/value buffers. Batches only hold
//! handles, so changing batch composition never moves or copies KV data.
//! Admission reserves the worst-case footprint of a sequence up front; appends
//! are then charged against the ledger one entry at a time.

use std::collections::HashMap;

use crate::error::ModelError;
use crate::types::{CacheHandle, SeqId};

#[derive(Debug, Clone, Default)]
pub struct LayerKv {
    keys: Vec<f64>,
    values: Vec<f64>,
}

impl LayerKv {
    pub fn keys(&self) -> &[f64] {
        &self.keys
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }
}

#[derive(Debug, Clone)]
struct SeqKv {
    reserved: u64,
    layers: Vec<LayerKv>,
}

#[derive(Debug, Clone)]
pub struct UnifiedDynamicCache {
    dim: usize,
    num_layers: usize,
    capacity: u64,
    used: u64,
    reserved: u64,
    seqs: HashMap<SeqId, SeqKv>,
}

impl UnifiedDynamicCache {
    pub fn new(dim: usize, num_layers: usize, capacity_bytes: u64) -> Self {
        UnifiedDynamicCache {
            dim,
            num_layers,
            capacity: capacity_bytes,
            used: 0,
            reserved: 0,
            seqs: HashMap::new(),
        }
    }

    /// Bytes of one (key, value) pair at one layer.
    pub fn entry_bytes(&self) -> u64 {
        2 * self.dim as u64 * 8
    }

    /// Bytes of one token across all layers.
    pub fn token_bytes(&self) -> u64 {
        self.entry_bytes() * self.num_layers as u64
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn usage(&self) -> u64 {
        self.used
    }

    pub fn reserved(&self) -> u64 {
        self.reserved
    }

    pub fn num_sequences(&self) -> usize {
        self.seqs.len()
    }

    pub fn contains(&self, handle: CacheHandle) -> bool {
        self.seqs.contains_key(&handle.0)
    }

    /// Reserves room for `max_tokens` tokens at every layer.
    pub fn admit(&mut self, seq: SeqId, max_tokens: usize) -> Result<CacheHandle, ModelError> {
        let needed = max_tokens as u64 * self.token_bytes();
        let available = self.capacity.saturating_sub(self.reserved);
        if needed > available {
            return Err(ModelError::AdmissionRefused { seq, needed, available });
        }
        self.reserved += needed;
        self.seqs.insert(
            seq,
            SeqKv { reserved: needed, layers: vec![LayerKv::default(); self.num_layers] },
        );
        Ok(CacheHandle(seq))
    }

    pub fn append(
        &mut self,
        handle: CacheHandle,
        layer: usize,
        key: &[f64],
        value: &[f64],
    ) -> Result<(), ModelError> {
        debug_assert_eq!(key.len(), self.dim);
        debug_assert_eq!(value.len(), self.dim);
        let entry = self.entry_bytes();
        if self.used + entry > self.capacity {
            return Err(ModelError::CapacityExceeded { seq: handle.0 });
        }
        let kv = self.seqs.get_mut(&handle.0).ok_or(ModelError::UnknownHandle(handle.0))?;
        let l = &mut kv.layers[layer];
        l.keys.extend_from_slice(key);
        l.values.extend_from_slice(value);
        self.used += entry;
        Ok(())
    }

    pub fn entries(&self, handle: CacheHandle, layer: usize) -> Result<usize, ModelError> {
        let kv = self.seqs.get(&handle.0).ok_or(ModelError::UnknownHandle(handle.0))?;
        Ok(kv.layers[layer].keys.len() / self.dim)
    }

    pub fn layer(&self, handle: CacheHandle, layer: usize) -> Result<&LayerKv, ModelError> {
        let kv = self.seqs.get(&handle.0).ok_or(ModelError::UnknownHandle(handle.0))?;
        Ok(&kv.layers[layer])
    }

    /// Drops every entry and the reservation of a sequence; returns the bytes freed.
    pub fn evict(&mut self, handle: CacheHandle) -> Result<u64, ModelError> {
        let kv = self.seqs.remove(&handle.0).ok_or(ModelError::UnknownHandle(handle.0))?;
        let bytes: u64 = kv.layers.iter().map(|l| (l.keys.len() / self.dim) as u64).sum::<u64>()
            * self.entry_bytes();
        self.used -= bytes;
        self.reserved -= kv.reserved;
        Ok(bytes)
    }

    /// Walks every stored vector and recounts the bytes held, ignoring the ledger.
    pub fn recount(&self) -> u64 {
        let mut bytes = 0u64;
        for kv in self.seqs.values() {
            for l in &kv.layers {
                let pairs = l.keys.chunks_exact(self.dim).zip(l.values.chunks_exact(self.dim));
                bytes += pairs.count() as u64 * 2 * self.dim as u64 * 8;
            }
        }
        bytes
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn append_accounts_exactly() {
        let mut c = UnifiedDynamicCache::new(4, 2, 1 << 20);
        let h = c.admit(1, 8).unwrap();
        for _ in 0..5 {
            c.append(h, 0, &[0.0; 4], &[1.0; 4]).unwrap();
        }
        assert_eq!(c.usage(), 5 * c.entry_bytes());
        assert_eq!(c.entries(h, 0).unwrap(), 5);
        assert_eq!(c.entries(h, 1).unwrap(), 0);
        assert_eq!(c.recount(), c.usage());
    }

    #[test]
    fn evict_restores_prior_usage() {
        let mut c = UnifiedDynamicCache::new(2, 1, 1 << 20);
        let a = c.admit(1, 4).unwrap();
        c.append(a, 0, &[0.0; 2], &[0.0; 2]).unwrap();
        let before = c.usage();
        let b = c.admit(2, 4).unwrap();
        for _ in 0..3 {
            c.append(b, 0, &[0.0; 2], &[0.0; 2]).unwrap();
        }
        assert_eq!(c.evict(b).unwrap(), 3 * c.entry_bytes());
        assert_eq!(c.usage(), before);
        c.evict(a).unwrap();
        assert_eq!(c.usage(), 0);
        assert_eq!(c.reserved(), 0);
    }

    #[test]
    fn admission_refused_over_capacity() {
        let mut c = UnifiedDynamicCache::new(2, 2, 10 * 64);
        // token_bytes = 2 * 2 * 8 * 2 = 64
        c.admit(1, 6).unwrap();
        let err = c.admit(2, 5).unwrap_err();
        assert!(matches!(err, ModelError::AdmissionRefused { seq: 2, .. }));
        c.admit(3, 4).unwrap();
    }

    #[test]
    fn unknown_handle_is_an_error() {
        let mut c = UnifiedDynamicCache::new(2, 1, 1024);
        assert_eq!(c.evict(CacheHandle(9)), Err(ModelError::UnknownHandle(9)));
        assert!(c.append(CacheHandle(9), 0, &[0.0; 2], &[0.0; 2]).is_err());
    }

    #[test]
    fn ledger_matches_recount_under_random_mutation() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let mut c = UnifiedDynamicCache::new(3, 4, u64::MAX);
        let mut live: Vec<CacheHandle> = Vec::new();
        let mut next = 0;
        for _ in 0..2000 {
            match rng.gen_range(0..10) {
                0..=1 => {
                    live.push(c.admit(next, 64).unwrap());
                    next += 1;
                }
                2 if !live.is_empty() => {
                    let h = live.swap_remove(rng.gen_range(0..live.len()));
                    c.evict(h).unwrap();
                }
                _ if !live.is_empty() => {
                    let h = live[rng.gen_range(0..live.len())];
                    c.append(h, rng.gen_range(0..4), &[0.5; 3], &[0.25; 3]).unwrap();
                }
                _ => {}
            }
            assert_eq!(c.recount(), c.usage());
        }
        for h in live {
            c.evict(h).unwrap();
        }
        assert_eq!(c.usage(), 0);
    }
}
