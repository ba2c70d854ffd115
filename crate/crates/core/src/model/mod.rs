//! A small deterministic MoE compute core.
//!
//! Every layer is attention (softmax over cached keys) followed by a top-k
//! router and affine-tanh experts. All parameters derive from a seed, all
//! arithmetic is `f64` with a fixed reduction order, so any run can be
//! replayed bit for bit regardless of how it was batched or interrupted.

pub mod cache;
pub mod queues;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use cache::{LayerKv, UnifiedDynamicCache};
pub use queues::{ExpertQueueEntry, ExpertQueues};

use crate::error::ModelError;
use crate::types::{CacheHandle, ExpertId, SeqId, TokenId, TokenState};

const NORM_EPS: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub num_layers: usize,
    pub hidden_dim: usize,
    pub num_experts: usize,
    pub top_k: usize,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { num_layers: 8, hidden_dim: 16, num_experts: 8, top_k: 2, vocab_size: 256, seed: 0 }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<(), ModelError> {
        let bad = |m: &str| Err(ModelError::InvalidConfig(m.to_string()));
        if self.num_layers == 0 || self.num_layers > 32 {
            return bad("num_layers must be in 1..=32");
        }
        if self.hidden_dim == 0 || self.num_experts == 0 || self.vocab_size < 2 {
            return bad("hidden_dim and num_experts must be >= 1, vocab_size >= 2");
        }
        if self.top_k == 0 || self.top_k > self.num_experts {
            return bad("top_k must satisfy 1 <= top_k <= num_experts");
        }
        Ok(())
    }
}

/// Row-major dense matrix.
#[derive(Debug, Clone, PartialEq)]
struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Matrix {
    fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize, scale: f64) -> Self {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0) * scale).collect();
        Matrix { rows, cols, data }
    }

    fn row(&self, r: usize) -> &[f64] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows).map(|r| dot(self.row(r), x)).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
struct LayerWeights {
    key: Matrix,
    value: Matrix,
    router: Matrix,
    experts: Vec<(Matrix, Vec<f64>)>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MoeModel {
    cfg: ModelConfig,
    embedding: Matrix,
    layers: Vec<LayerWeights>,
    output: Matrix,
    output_bias: Vec<f64>,
}

/// Dot product with a fixed four-lane summation order:
/// `((l0 + l1) + (l2 + l3)) + tail`, where lane `i` sums indices `≡ i (mod 4)`.
pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    let (ca, cb) = (a.chunks_exact(4), b.chunks_exact(4));
    let (ra, rb) = (ca.remainder(), cb.remainder());
    let mut acc = [0.0f64; 4];
    for (x, y) in ca.zip(cb) {
        for i in 0..4 {
            acc[i] += x[i] * y[i];
        }
    }
    let mut tail = 0.0;
    for (x, y) in ra.iter().zip(rb) {
        tail += x * y;
    }
    ((acc[0] + acc[1]) + (acc[2] + acc[3])) + tail
}

pub(crate) fn normalize(v: &mut [f64]) {
    let norm = dot(v, v).sqrt() + NORM_EPS;
    for x in v.iter_mut() {
        *x /= norm;
    }
}

/// Softmax with max subtraction, summed in index order.
pub(crate) fn softmax(scores: &mut [f64]) {
    let max = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for s in scores.iter_mut() {
        *s = (*s - max).exp();
        sum += *s;
    }
    for s in scores.iter_mut() {
        *s /= sum;
    }
}

impl MoeModel {
    pub fn new(cfg: ModelConfig) -> Result<Self, ModelError> {
        cfg.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let d = cfg.hidden_dim;
        let inv = 1.0 / (d as f64).sqrt();
        let mut embedding = Matrix::random(&mut rng, cfg.vocab_size, d, 1.0);
        for r in 0..cfg.vocab_size {
            normalize(&mut embedding.data[r * d..(r + 1) * d]);
        }
        let layers = (0..cfg.num_layers)
            .map(|_| LayerWeights {
                key: Matrix::random(&mut rng, d, d, inv),
                value: Matrix::random(&mut rng, d, d, inv),
                router: Matrix::random(&mut rng, cfg.num_experts, d, 1.0),
                experts: (0..cfg.num_experts)
                    .map(|_| {
                        let a = Matrix::random(&mut rng, d, d, inv);
                        let b = (0..d).map(|_| rng.gen_range(-0.1..0.1)).collect();
                        (a, b)
                    })
                    .collect(),
            })
            .collect();
        let output = Matrix::random(&mut rng, cfg.vocab_size, d, 1.0);
        let output_bias = (0..cfg.vocab_size).map(|_| rng.gen_range(-0.1..0.1)).collect();
        Ok(MoeModel { cfg, embedding, layers, output, output_bias })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn embed(&self, token: TokenId) -> Vec<f64> {
        self.embedding.row(token as usize % self.cfg.vocab_size).to_vec()
    }

    /// Appends the token's K/V at `layer` and attends over every entry now
    /// cached for the sequence at that layer (causal by construction).
    pub fn attend(
        &self,
        cache: &mut UnifiedDynamicCache,
        handle: CacheHandle,
        layer: usize,
        h: &[f64],
    ) -> Result<Vec<f64>, ModelError> {
        let w = &self.layers[layer];
        let k = w.key.matvec(h);
        let v = w.value.matvec(h);
        cache.append(handle, layer, &k, &v)?;
        let kv = cache.layer(handle, layer)?;
        let d = self.cfg.hidden_dim;
        // single pass: accumulate exp-weighted values, normalize by the weight sum once
        let mut acc = vec![0.0; d];
        let mut total = 0.0;
        for (key, value) in kv.keys().chunks_exact(d).zip(kv.values().chunks_exact(d)) {
            let w = dot(h, key).exp();
            total += w;
            for (a, x) in acc.iter_mut().zip(value) {
                *a += w * x;
            }
        }
        let mut out: Vec<f64> = h.iter().zip(&acc).map(|(x, a)| x + a / total).collect();
        normalize(&mut out);
        Ok(out)
    }

    /// Attention for every in-flight token of one sequence at one layer.
    /// `expected_prior` is the number of entries that must already be cached.
    pub fn attention_for_sequence(
        &self,
        cache: &mut UnifiedDynamicCache,
        seq: SeqId,
        handle: CacheHandle,
        layer: usize,
        expected_prior: usize,
        tokens: &mut [TokenState],
    ) -> Result<(), ModelError> {
        let found = cache.entries(handle, layer)?;
        if found != expected_prior {
            return Err(ModelError::StateCorruption { seq, layer, expected: expected_prior, found });
        }
        for t in tokens.iter_mut() {
            let out = self.attend(cache, handle, layer, &t.hidden)?;
            t.residual = out.clone();
            t.hidden = out;
        }
        Ok(())
    }

    /// Raw router scores for one token.
    pub fn router_scores(&self, layer: usize, h: &[f64]) -> Vec<f64> {
        self.layers[layer].router.matvec(h)
    }

    /// Top-k experts by score (ties to the lower id) with softmax weights over
    /// the selected scores, in selection order.
    pub fn route(&self, layer: usize, h: &[f64]) -> Vec<(ExpertId, f64)> {
        let scores = self.router_scores(layer, h);
        let mut order: Vec<ExpertId> = (0..scores.len()).collect();
        order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
        order.truncate(self.cfg.top_k);
        let mut w: Vec<f64> = order.iter().map(|&e| scores[e]).collect();
        softmax(&mut w);
        order.into_iter().zip(w).collect()
    }

    /// `tanh(A_e · h + b_e)` for expert `expert` at `layer`.
    pub fn expert_forward(&self, layer: usize, expert: ExpertId, h: &[f64]) -> Vec<f64> {
        let (a, b) = &self.layers[layer].experts[expert];
        a.matvec(h).into_iter().zip(b).map(|(x, bias)| (x + bias).tanh()).collect()
    }

    /// Runs one expert over a drained queue. `input` resolves an entry to its
    /// token's hidden state.
    pub fn run_expert<'a>(
        &self,
        expert: ExpertId,
        entries: &[ExpertQueueEntry],
        mut input: impl FnMut(&ExpertQueueEntry) -> &'a [f64],
    ) -> Vec<Vec<f64>> {
        entries.iter().map(|e| self.expert_forward(e.layer, expert, input(e))).collect()
    }

    /// `residual + Σ weight_e · output_e`, only for fully processed tokens.
    pub fn combine(&self, seq: SeqId, index: usize, token: &TokenState) -> Result<Vec<f64>, ModelError> {
        if !token.pending.is_empty() {
            return Err(ModelError::PartialToken { seq, token: index, pending: token.pending.len() });
        }
        let routing = token
            .routing
            .as_ref()
            .ok_or(ModelError::PartialToken { seq, token: index, pending: self.cfg.top_k })?;
        let mut out = token.residual.clone();
        for &(e, w) in routing {
            let y = token.completed.get(&e).ok_or(ModelError::PartialToken { seq, token: index, pending: 1 })?;
            for (o, x) in out.iter_mut().zip(y) {
                *o += w * x;
            }
        }
        Ok(out)
    }

    pub fn logits(&self, h: &[f64]) -> Vec<f64> {
        self.output.matvec(h).into_iter().zip(&self.output_bias).map(|(x, b)| x + b).collect()
    }

    /// Greedy argmax over the vocabulary, ties to the lowest id.
    pub fn emit(&self, h: &[f64]) -> TokenId {
        let logits = self.logits(h);
        let mut best = 0;
        for (i, &l) in logits.iter().enumerate() {
            if l > logits[best] {
                best = i;
            }
        }
        best as TokenId
    }

    pub fn output_bias(&self) -> &[f64] {
        &self.output_bias
    }
}
