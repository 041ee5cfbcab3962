//! Pixel-level contrastive objective: cosine compatibility, the NCE loss
//! against a queue of negatives, and the momentum encoder.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::encoder::EmbeddingMap;
use crate::error::{bail, Result};
use crate::tensor::{Graph, ParamSet, Real, Tensor, Var};
use crate::views::CorrespondenceMap;

pub const NORM_EPS: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub tau: f32,
    pub loss_scale: f32,
    pub n_positive: usize,
    pub queue_capacity: usize,
    pub momentum: f32,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            tau: 0.07,
            loss_scale: 10.0,
            n_positive: 32,
            queue_capacity: 4096,
            momentum: 0.99,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) || !self.tau.is_finite() {
            bail!(Config, "tau must be positive, got {}", self.tau);
        }
        if !(0.0..1.0).contains(&self.momentum) {
            bail!(Config, "momentum must lie in [0, 1), got {}", self.momentum);
        }
        if self.queue_capacity == 0 || self.n_positive == 0 {
            bail!(Config, "queue_capacity and n_positive must be at least 1");
        }
        if !(self.loss_scale > 0.0) {
            bail!(Config, "loss_scale must be positive");
        }
        Ok(())
    }
}

fn norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| x as f64 * x as f64).sum::<f64>().sqrt()
}

fn cosine(z1: &[f32], z2: &[f32]) -> f64 {
    let dot: f64 = z1.iter().zip(z2).map(|(&a, &b)| a as f64 * b as f64).sum();
    dot / (norm(z1).max(NORM_EPS) * norm(z2).max(NORM_EPS))
}

/// `(1/τ)·cos(z1, z2)`. Norms are clamped at [`NORM_EPS`].
pub fn compatibility(z1: &[f32], z2: &[f32], tau: f32) -> Result<f32> {
    if z1.len() != z2.len() {
        bail!(Dimension, "compatibility of {}-d and {}-d vectors", z1.len(), z2.len());
    }
    if !(tau > 0.0) {
        bail!(Config, "tau must be positive");
    }
    debug_assert!(norm(z1) > NORM_EPS && norm(z2) > NORM_EPS, "zero vector in compatibility");
    Ok((cosine(z1, z2) / tau as f64) as f32)
}

fn unit_rows<T: Real>(rows: &[f32], d: usize) -> Vec<T> {
    let mut out = Vec::with_capacity(rows.len());
    for r in rows.chunks(d) {
        let n = norm(r).max(NORM_EPS);
        out.extend(r.iter().map(|&v| T::of(v as f64 / n)));
    }
    out
}

/// Records the NCE loss on `g`.
///
/// `anchors` is a `[P,D]` node from the online encoder; `positives` (`P×D`)
/// and `negatives` (`K×D`) are plain row-major buffers and are therefore
/// outside the gradient path. The result is
/// `scale · mean_i −log softmax([c(a_i,p_i), c(a_i,n_1), …, c(a_i,n_K)])_0`.
pub fn nce_loss_graph<T: Real>(
    g: &mut Graph<T>,
    anchors: Var,
    positives: &[f32],
    negatives: &[f32],
    tau: f32,
    scale: f32,
) -> Result<Var> {
    let s = g.shape(anchors).to_vec();
    if s.len() != 2 {
        bail!(Dimension, "anchors must be [P,D], got {s:?}");
    }
    let (p, d) = (s[0], s[1]);
    if p == 0 || positives.len() != p * d {
        bail!(Usage, "{p} anchors but {} positive values for D={d}", positives.len());
    }
    if negatives.is_empty() || negatives.len() % d != 0 {
        bail!(Usage, "negative bank must be a non-empty K×{d} buffer");
    }
    let k = negatives.len() / d;
    let a = g.l2_normalize(anchors, 1, T::of(NORM_EPS))?;
    let pos = g.constant(Tensor::new(&[p, d], unit_rows(positives, d))?);
    let neg_rows: Vec<T> = unit_rows(negatives, d);
    let neg_t = Tensor::from_fn(&[d, k], |i| neg_rows[(i % k) * d + i / k]);
    let neg = g.constant(neg_t);

    let prod = g.mul(a, pos)?;
    let l_pos = g.sum_axis(prod, 1)?;
    let l_pos = g.reshape(l_pos, &[p, 1])?;
    let l_neg = g.matmul(a, neg)?;
    let logits = g.concat_cols(l_pos, l_neg)?;
    let logits = g.scalar_mul(logits, T::of(1.0 / tau as f64))?;
    let logp = g.log_softmax(logits, 1)?;
    let picked = g.pick(logp, &vec![0; p])?;
    let mean = g.mean(picked)?;
    g.scalar_mul(mean, T::of(-(scale as f64)))
}

/// Value of the NCE loss for explicit embedding lists.
pub fn nce_loss(anchors: &[Vec<f32>], positives: &[Vec<f32>], queue: &NegativeQueue, cfg: &LossConfig) -> Result<f32> {
    if anchors.len() != positives.len() {
        bail!(Usage, "{} anchors but {} positives", anchors.len(), positives.len());
    }
    if anchors.len() != cfg.n_positive {
        bail!(Usage, "expected {} pairs, got {}", cfg.n_positive, anchors.len());
    }
    if queue.is_empty() {
        bail!(Usage, "negative queue is empty");
    }
    let d = queue.dim();
    if anchors.iter().chain(positives).any(|v| v.len() != d) {
        bail!(Dimension, "embedding length differs from queue dimension {d}");
    }
    // Evaluated in f64: near-perfect matches leave a loss far below the f32
    // spacing of the logits it is computed from.
    let mut g: Graph<f64> = Graph::new();
    let a = g.constant(Tensor::new(&[anchors.len(), d], anchors.concat())?.cast());
    let loss = nce_loss_graph(&mut g, a, &positives.concat(), queue.rows(), cfg.tau, cfg.loss_scale)?;
    Ok(g.value(loss)[0] as f32)
}

/// Fixed-capacity FIFO of unit vectors.
#[derive(Clone, Debug, PartialEq)]
pub struct NegativeQueue {
    dim: usize,
    capacity: usize,
    slots: Vec<f32>,
    /// Slot the next vector is written to.
    head: usize,
    count: usize,
}

impl NegativeQueue {
    pub fn new(capacity: usize, dim: usize) -> Result<Self> {
        if capacity == 0 || dim == 0 {
            bail!(Config, "queue needs positive capacity and dimension");
        }
        Ok(NegativeQueue {
            dim,
            capacity,
            slots: vec![0.0; capacity * dim],
            head: 0,
            count: 0,
        })
    }

    /// A full queue of random unit vectors (Gaussian directions).
    pub fn random<R: Rng + ?Sized>(capacity: usize, dim: usize, rng: &mut R) -> Result<Self> {
        let mut q = Self::new(capacity, dim)?;
        let mut v = vec![0.0f32; dim];
        for _ in 0..capacity {
            loop {
                for x in v.iter_mut() {
                    *x = rng.sample(StandardNormal);
                }
                if norm(&v) > 1e-6 {
                    break;
                }
            }
            q.enqueue(&v)?;
        }
        Ok(q)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn len(&self) -> usize {
        self.count
    }

    pub fn is_empty(&self) -> bool {
        self.count == 0
    }

    /// Normalises `v` and appends it, evicting the oldest entry when full.
    pub fn enqueue(&mut self, v: &[f32]) -> Result<()> {
        if v.len() != self.dim {
            bail!(Usage, "queue holds {}-d vectors, got {}", self.dim, v.len());
        }
        let n = norm(v).max(NORM_EPS);
        let slot = &mut self.slots[self.head * self.dim..(self.head + 1) * self.dim];
        for (s, &x) in slot.iter_mut().zip(v) {
            *s = (x as f64 / n) as f32;
        }
        self.head = (self.head + 1) % self.capacity;
        self.count = (self.count + 1).min(self.capacity);
        Ok(())
    }

    pub fn enqueue_all<'a>(&mut self, vs: impl IntoIterator<Item = &'a [f32]>) -> Result<()> {
        vs.into_iter().try_for_each(|v| self.enqueue(v))
    }

    /// Stored vectors in slot order (`len() × dim`). Slot order is not age
    /// order once the buffer has wrapped; use [`NegativeQueue::iter`] for that.
    pub fn rows(&self) -> &[f32] {
        &self.slots[..self.count * self.dim]
    }

    /// Entries from oldest to newest.
    pub fn iter(&self) -> impl Iterator<Item = &[f32]> {
        let start = if self.count < self.capacity { 0 } else { self.head };
        (0..self.count).map(move |i| {
            let s = (start + i) % self.capacity;
            &self.slots[s * self.dim..(s + 1) * self.dim]
        })
    }

    /// Serialises to two tensors: the slot buffer and `[head, count]`.
    pub fn to_tensors(&self) -> (Tensor, Tensor) {
        let slots = Tensor::new(&[self.capacity, self.dim], self.slots.clone()).expect("consistent");
        let meta = Tensor::new(&[2], vec![self.head as f32, self.count as f32]).expect("consistent");
        (slots, meta)
    }

    pub fn from_tensors(slots: &Tensor, meta: &Tensor) -> Result<Self> {
        if slots.rank() != 2 || meta.shape() != [2] {
            bail!(Checkpoint, "malformed queue tensors");
        }
        let (capacity, dim) = (slots.shape()[0], slots.shape()[1]);
        let (head, count) = (meta.data()[0] as usize, meta.data()[1] as usize);
        if head >= capacity || count > capacity {
            bail!(Checkpoint, "queue head/count out of range");
        }
        Ok(NegativeQueue {
            dim,
            capacity,
            slots: slots.data().to_vec(),
            head,
            count,
        })
    }
}

/// The key encoder `g`: an exponential moving average of the online encoder.
#[derive(Clone, Debug, PartialEq)]
pub struct MomentumEncoder {
    pub params: ParamSet,
    pub momentum: f32,
}

impl MomentumEncoder {
    /// Starts as an exact, gradient-free copy of `f`.
    pub fn from_online(f: &ParamSet, momentum: f32) -> Self {
        let mut params = f.clone();
        params.zero_grads();
        params.set_requires_grad(false);
        MomentumEncoder { params, momentum }
    }
}

/// `θg ← m·θg + (1−m)·θf` for every parameter.
pub fn momentum_update(f: &ParamSet, g: &mut MomentumEncoder) -> Result<()> {
    g.params.check_compatible(f)?;
    let m = g.momentum;
    for ((_, tg), (_, tf)) in g.params.iter_mut().zip(f.iter()) {
        for (a, &b) in tg.data_mut().iter_mut().zip(tf.data()) {
            *a = m * *a + (1.0 - m) * b;
        }
    }
    Ok(())
}

/// Fraction of matched pairs whose positive similarity beats every distractor.
pub fn constraint_satisfaction(
    f_map: &EmbeddingMap,
    g_map: &EmbeddingMap,
    corr: &CorrespondenceMap,
    distractors: &NegativeQueue,
) -> Result<f64> {
    if corr.is_empty() {
        bail!(Usage, "constraint satisfaction of an empty correspondence map");
    }
    if f_map.dim() != g_map.dim() || f_map.dim() != distractors.dim() {
        bail!(Dimension, "embedding dimensions differ");
    }
    let mut hits = 0usize;
    for &(a, b) in &corr.pairs {
        let fa = f_map.embed_at(a)?;
        let pos = cosine(&fa, &g_map.embed_at(b)?);
        if distractors.iter().all(|n| cosine(&fa, n) < pos) {
            hits += 1;
        }
    }
    Ok(hits as f64 / corr.len() as f64)
}
