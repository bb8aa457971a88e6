//! Quantization machinery: k-means tokenizer, VQ with EMA codebook updates,
//! residual VQ, straight-through binding into graphs, detokenization by
//! code-vector summation, and codebook health statistics.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::math::sq_dist;
use crate::nn::{Graph, NodeId, Real};

pub const EMA_DECAY: f64 = 0.99;
pub const EMA_EPSILON: f64 = 1e-5;
/// Codes whose EMA count falls below this are reseeded from the batch.
pub const DEAD_CODE_THRESHOLD: f64 = 1e-3;
/// Commitment loss weight used by trainable-encoder objectives.
pub const COMMITMENT_BETA: f64 = 0.25;

/// Discrete token indices, `layers × T`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TokenSequence {
    /// One row of T indices per quantizer layer.
    pub indices: Vec<Vec<u32>>,
}

impl TokenSequence {
    pub fn n_layers(&self) -> usize {
        self.indices.len()
    }

    pub fn len(&self) -> usize {
        self.indices.first().map_or(0, |l| l.len())
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// K×D code vectors with EMA accumulators.
#[derive(Debug, Clone)]
pub struct Codebook<S: Real> {
    pub k: usize,
    pub dim: usize,
    pub vectors: Vec<S>,
    pub ema_count: Vec<S>,
    pub ema_sum: Vec<S>,
    pub decay: S,
    pub epsilon: S,
}

impl<S: Real> Codebook<S> {
    /// Initialize code vectors from random rows of `data` (N×dim).
    pub fn init_from_data(k: usize, dim: usize, data: &[S], rng: &mut ChaCha8Rng) -> Result<Self> {
        let n = data.len() / dim;
        if n == 0 || k == 0 {
            return Err(Error::Config(format!(
                "codebook init needs data and k >= 1, got n={n}, k={k}"
            )));
        }
        let mut vectors = Vec::with_capacity(k * dim);
        for _ in 0..k {
            let row = rng.gen_range(0..n);
            vectors.extend_from_slice(&data[row * dim..(row + 1) * dim]);
        }
        let ema_sum = vectors.clone();
        Ok(Self {
            k,
            dim,
            vectors,
            ema_count: vec![S::ONE; k],
            ema_sum,
            decay: S::from_f64(EMA_DECAY),
            epsilon: S::from_f64(EMA_EPSILON),
        })
    }

    pub fn zeros(k: usize, dim: usize) -> Self {
        Self::from_vectors(vec![S::ZERO; k * dim], k, dim)
    }

    pub fn from_vectors(vectors: Vec<S>, k: usize, dim: usize) -> Self {
        debug_assert_eq!(vectors.len(), k * dim);
        let ema_sum = vectors.clone();
        Self {
            k,
            dim,
            vectors,
            ema_count: vec![S::ONE; k],
            ema_sum,
            decay: S::from_f64(EMA_DECAY),
            epsilon: S::from_f64(EMA_EPSILON),
        }
    }

    pub fn code(&self, idx: usize) -> &[S] {
        &self.vectors[idx * self.dim..(idx + 1) * self.dim]
    }
}

/// Argmin of squared Euclidean distance, ties broken by lowest index.
pub fn nearest_code<S: Real>(vectors: &[S], k: usize, dim: usize, x: &[S]) -> (usize, S) {
    debug_assert_eq!(vectors.len(), k * dim);
    debug_assert_eq!(x.len(), dim);
    let mut best = 0usize;
    let mut best_d = sq_dist(&vectors[0..dim], x);
    for c in 1..k {
        let d = sq_dist(&vectors[c * dim..(c + 1) * dim], x);
        if d < best_d {
            best_d = d;
            best = c;
        }
    }
    (best, best_d)
}

/// VQ of a T×D batch: per-frame nearest code, its vector, and residual².
pub fn vq_forward<S: Real>(cb: &Codebook<S>, x: &[S], t: usize) -> (Vec<u32>, Vec<S>, Vec<S>) {
    debug_assert_eq!(x.len(), t * cb.dim);
    let mut indices = Vec::with_capacity(t);
    let mut quantized = vec![S::ZERO; t * cb.dim];
    let mut residual_sq = Vec::with_capacity(t);
    for row in 0..t {
        let xr = &x[row * cb.dim..(row + 1) * cb.dim];
        let (idx, d) = nearest_code(&cb.vectors, cb.k, cb.dim, xr);
        indices.push(idx as u32);
        quantized[row * cb.dim..(row + 1) * cb.dim].copy_from_slice(cb.code(idx));
        residual_sq.push(d);
    }
    (indices, quantized, residual_sq)
}

impl<S: Real> Codebook<S> {
    /// EMA update from one batch of assigned vectors:
    ///   count_k ← γ·count_k + (1−γ)·n_k
    ///   sum_k   ← γ·sum_k   + (1−γ)·Σ_{assigned} x
    ///   vector_k ← sum_k / laplace(count)_k
    /// where laplace(count)_k = (count_k+ε)/(Σcounts+Kε)·Σcounts.
    pub fn ema_update(&mut self, x: &[S], indices: &[u32]) {
        let t = indices.len();
        debug_assert_eq!(x.len(), t * self.dim);
        let gamma = self.decay;
        let one_m = S::ONE - gamma;
        let mut batch_count = vec![S::ZERO; self.k];
        let mut batch_sum = vec![S::ZERO; self.k * self.dim];
        for (row, &idx) in indices.iter().enumerate() {
            let idx = idx as usize;
            batch_count[idx] += S::ONE;
            let xr = &x[row * self.dim..(row + 1) * self.dim];
            let sr = &mut batch_sum[idx * self.dim..(idx + 1) * self.dim];
            for (s, &v) in sr.iter_mut().zip(xr.iter()) {
                *s += v;
            }
        }
        for c in 0..self.k {
            self.ema_count[c] = gamma * self.ema_count[c] + one_m * batch_count[c];
            let sr = &mut self.ema_sum[c * self.dim..(c + 1) * self.dim];
            let br = &batch_sum[c * self.dim..(c + 1) * self.dim];
            for (s, &b) in sr.iter_mut().zip(br.iter()) {
                *s = gamma * *s + one_m * b;
            }
        }
        let total: S = self.ema_count.iter().copied().sum();
        let denom_norm = total + S::from_usize(self.k) * self.epsilon;
        for c in 0..self.k {
            let smoothed = (self.ema_count[c] + self.epsilon) / denom_norm * total;
            let sr = &self.ema_sum[c * self.dim..(c + 1) * self.dim];
            let vr = &mut self.vectors[c * self.dim..(c + 1) * self.dim];
            for (v, &s) in vr.iter_mut().zip(sr.iter()) {
                *v = s / smoothed;
            }
        }
    }

    /// Reassign codes whose EMA count collapsed to a random batch vector.
    /// Returns how many codes were reseeded.
    pub fn reseed_dead_codes(&mut self, x: &[S], t: usize, rng: &mut ChaCha8Rng) -> usize {
        let threshold = S::from_f64(DEAD_CODE_THRESHOLD);
        let mut reseeded = 0;
        for c in 0..self.k {
            if self.ema_count[c] < threshold {
                let row = rng.gen_range(0..t);
                let xr = &x[row * self.dim..(row + 1) * self.dim];
                self.vectors[c * self.dim..(c + 1) * self.dim].copy_from_slice(xr);
                self.ema_sum[c * self.dim..(c + 1) * self.dim].copy_from_slice(xr);
                self.ema_count[c] = S::ONE;
                reseeded += 1;
            }
        }
        reseeded
    }
}

/// Residual VQ: stage i quantizes the residual left by stages < i.
/// Returns (per-layer indices, summed quantization, final residual² per frame).
/// With a single codebook this is bitwise identical to [`vq_forward`].
pub fn rvq_forward<S: Real>(
    cbs: &[Codebook<S>],
    x: &[S],
    t: usize,
) -> Result<(Vec<Vec<u32>>, Vec<S>, Vec<S>)> {
    let dim = match cbs.first() {
        Some(cb) => cb.dim,
        None => return Err(Error::Config("rvq_forward: no codebooks".into())),
    };
    if cbs.iter().any(|cb| cb.dim != dim) {
        return Err(Error::Shape(format!(
            "rvq_forward: codebook dims differ: {:?}",
            cbs.iter().map(|cb| cb.dim).collect::<Vec<_>>()
        )));
    }
    let mut residual = x.to_vec();
    let mut quantized_sum = vec![S::ZERO; t * dim];
    let mut all_indices = Vec::with_capacity(cbs.len());
    let mut final_res = vec![S::ZERO; t];
    for (stage, cb) in cbs.iter().enumerate() {
        let (indices, quantized, res_sq) = vq_forward(cb, &residual, t);
        for i in 0..t * dim {
            quantized_sum[i] += quantized[i];
            residual[i] -= quantized[i];
        }
        if stage == cbs.len() - 1 {
            final_res = res_sq;
        }
        all_indices.push(indices);
    }
    Ok((all_indices, quantized_sum, final_res))
}

/// Like [`rvq_forward`] but also returns each stage's input (the residual
/// left by earlier stages), which EMA updates need during training.
pub fn rvq_forward_with_inputs<S: Real>(
    cbs: &[Codebook<S>],
    x: &[S],
    t: usize,
) -> Result<(Vec<Vec<u32>>, Vec<S>, Vec<S>, Vec<Vec<S>>)> {
    let dim = match cbs.first() {
        Some(cb) => cb.dim,
        None => return Err(Error::Config("rvq_forward: no codebooks".into())),
    };
    let mut residual = x.to_vec();
    let mut quantized_sum = vec![S::ZERO; t * dim];
    let mut all_indices = Vec::with_capacity(cbs.len());
    let mut stage_inputs = Vec::with_capacity(cbs.len());
    let mut final_res = vec![S::ZERO; t];
    for (stage, cb) in cbs.iter().enumerate() {
        stage_inputs.push(residual.clone());
        let (indices, quantized, res_sq) = vq_forward(cb, &residual, t);
        for i in 0..t * dim {
            quantized_sum[i] += quantized[i];
            residual[i] -= quantized[i];
        }
        if stage == cbs.len() - 1 {
            final_res = res_sq;
        }
        all_indices.push(indices);
    }
    Ok((all_indices, quantized_sum, final_res, stage_inputs))
}

/// Per frame, sum the selected code vector from each layer. This continuous
/// representation (not the raw indices) is what downstream models consume.
pub fn detokenize<S: Real>(cbs: &[Codebook<S>], tokens: &TokenSequence) -> Result<Vec<S>> {
    if cbs.len() != tokens.n_layers() {
        return Err(Error::Shape(format!(
            "detokenize: {} codebooks vs {} token layers",
            cbs.len(),
            tokens.n_layers()
        )));
    }
    let dim = cbs[0].dim;
    let t = tokens.len();
    let mut out = vec![S::ZERO; t * dim];
    for (cb, layer) in cbs.iter().zip(tokens.indices.iter()) {
        for (row, &idx) in layer.iter().enumerate() {
            if idx as usize >= cb.k {
                return Err(Error::Data(format!(
                    "detokenize: index {idx} out of range for K={}",
                    cb.k
                )));
            }
            let code = cb.code(idx as usize);
            let orow = &mut out[row * dim..(row + 1) * dim];
            for (o, &c) in orow.iter_mut().zip(code.iter()) {
                *o += c;
            }
        }
    }
    Ok(out)
}

/// Bind a quantization bottleneck into a graph: the node's values become the
/// (externally computed) quantized vectors while gradients pass straight
/// through to `x`. Also returns the commitment loss β·‖x − sg(q)‖².
pub fn bind_straight_through<S: Real>(
    g: &mut Graph<S>,
    x: NodeId,
    quantized: &[S],
    beta: f64,
) -> Result<(NodeId, NodeId)> {
    let st = g.straight_through(x, quantized.to_vec())?;
    let commit = g.mse_const(x, quantized)?;
    let commit = g.scale(commit, S::from_f64(beta));
    Ok((st, commit))
}

// ---- k-means ----------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct KMeansModel<S: Real> {
    pub k: usize,
    pub dim: usize,
    pub centroids: Vec<S>,
    /// Objective value after each Lloyd update; non-increasing.
    pub inertia_history: Vec<f64>,
}

impl<S: Real> KMeansModel<S> {
    pub fn assign(&self, x: &[S]) -> u32 {
        nearest_code(&self.centroids, self.k, self.dim, x).0 as u32
    }

    pub fn tokenize(&self, features: &[S], t: usize) -> TokenSequence {
        let indices = (0..t)
            .map(|row| self.assign(&features[row * self.dim..(row + 1) * self.dim]))
            .collect();
        TokenSequence {
            indices: vec![indices],
        }
    }

    pub fn as_codebook(&self) -> Codebook<S> {
        Codebook::from_vectors(self.centroids.clone(), self.k, self.dim)
    }
}

/// Lloyd iterations with k-means++ initialization. Stops when assignments
/// stabilize or `max_iters` is reached.
pub fn kmeans_fit<S: Real>(
    features: &[S],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<KMeansModel<S>> {
    let n = features.len() / dim;
    if n < k {
        return Err(Error::Config(format!(
            "kmeans needs at least K={k} points, got {n}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centroids = kmeans_pp_init(features, n, dim, k, &mut rng);
    let mut assignments = vec![0u32; n];
    let mut history = Vec::new();

    for _iter in 0..max_iters {
        // assignment step
        let mut changed = false;
        let mut inertia = 0f64;
        for i in 0..n {
            let (idx, d) = nearest_code(&centroids, k, dim, &features[i * dim..(i + 1) * dim]);
            inertia += d.to_f64();
            if assignments[i] != idx as u32 {
                assignments[i] = idx as u32;
                changed = true;
            }
        }
        history.push(inertia);
        if !changed && history.len() > 1 {
            break;
        }
        // update step; empty clusters keep their previous centroid
        let mut sums = vec![S::ZERO; k * dim];
        let mut counts = vec![0usize; k];
        for i in 0..n {
            let c = assignments[i] as usize;
            counts[c] += 1;
            let xr = &features[i * dim..(i + 1) * dim];
            let sr = &mut sums[c * dim..(c + 1) * dim];
            for (s, &v) in sr.iter_mut().zip(xr.iter()) {
                *s += v;
            }
        }
        for c in 0..k {
            if counts[c] > 0 {
                let inv = S::ONE / S::from_usize(counts[c]);
                for j in 0..dim {
                    centroids[c * dim + j] = sums[c * dim + j] * inv;
                }
            }
        }
    }

    Ok(KMeansModel {
        k,
        dim,
        centroids,
        inertia_history: history,
    })
}

fn kmeans_pp_init<S: Real>(
    features: &[S],
    n: usize,
    dim: usize,
    k: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<S> {
    let mut centroids = Vec::with_capacity(k * dim);
    let first = rng.gen_range(0..n);
    centroids.extend_from_slice(&features[first * dim..(first + 1) * dim]);
    let mut dists: Vec<f64> = (0..n)
        .map(|i| sq_dist(&features[i * dim..(i + 1) * dim], &centroids[0..dim]).to_f64())
        .collect();
    for c in 1..k {
        let total: f64 = dists.iter().sum();
        let pick = if total <= 0.0 {
            rng.gen_range(0..n)
        } else {
            let mut dart = rng.gen_range(0.0..total);
            let mut chosen = n - 1;
            for (i, &d) in dists.iter().enumerate() {
                dart -= d;
                if dart <= 0.0 {
                    chosen = i;
                    break;
                }
            }
            chosen
        };
        let start = c * dim;
        centroids.extend_from_slice(&features[pick * dim..(pick + 1) * dim]);
        for i in 0..n {
            let d = sq_dist(
                &features[i * dim..(i + 1) * dim],
                &centroids[start..start + dim],
            )
            .to_f64();
            if d < dists[i] {
                dists[i] = d;
            }
        }
    }
    centroids
}

// ---- statistics ---------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CodebookStats {
    /// Fraction of codes used at least once.
    pub utilization: f64,
    /// exp(entropy) of the empirical code distribution.
    pub perplexity: f64,
}

pub fn codebook_stats(indices: &[u32], k: usize) -> Result<CodebookStats> {
    if indices.is_empty() {
        return Err(Error::Data("codebook_stats: empty index stream".into()));
    }
    let mut counts = vec![0u64; k];
    for &i in indices {
        counts[i as usize] += 1;
    }
    let used = counts.iter().filter(|&&c| c > 0).count();
    let total = indices.len() as f64;
    let entropy: f64 = counts
        .iter()
        .filter(|&&c| c > 0)
        .map(|&c| {
            let p = c as f64 / total;
            -p * p.ln()
        })
        .sum();
    Ok(CodebookStats {
        utilization: used as f64 / k as f64,
        perplexity: entropy.exp(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kmeans_separable_two_clusters() {
        let pts = vec![0.0f64, 10.0];
        let model = kmeans_fit(&pts, 1, 2, 20, 0).unwrap();
        let mut cs = model.centroids.clone();
        cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(cs, vec![0.0, 10.0]);
        assert_eq!(*model.inertia_history.last().unwrap(), 0.0);
    }

    #[test]
    fn kmeans_matches_best_two_partition() {
        // brute force over all 2-partitions of {0,1,9,10}
        let pts = [0.0f64, 1.0, 9.0, 10.0];
        let mut best_obj = f64::INFINITY;
        let mut best_cents = (0.0, 0.0);
        for mask in 1u32..15 {
            let (mut a, mut b): (Vec<f64>, Vec<f64>) = (vec![], vec![]);
            for (i, &p) in pts.iter().enumerate() {
                if mask & (1 << i) != 0 {
                    a.push(p);
                } else {
                    b.push(p);
                }
            }
            if a.is_empty() || b.is_empty() {
                continue;
            }
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let obj: f64 = a.iter().map(|p| (p - ma).powi(2)).sum::<f64>()
                + b.iter().map(|p| (p - mb).powi(2)).sum::<f64>();
            if obj < best_obj {
                best_obj = obj;
                best_cents = (ma.min(mb), ma.max(mb));
            }
        }
        assert_eq!(best_cents, (0.5, 9.5));

        let model = kmeans_fit(&pts, 1, 2, 50, 3).unwrap();
        let mut cs = model.centroids.clone();
        cs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert!((cs[0] - 0.5).abs() < 1e-12 && (cs[1] - 9.5).abs() < 1e-12, "{cs:?}");
        let obj = model.inertia_history.last().unwrap();
        assert!((obj - best_obj).abs() < 1e-9);
    }

    #[test]
    fn kmeans_needs_enough_points() {
        assert!(kmeans_fit(&[1.0f32, 2.0], 1, 3, 5, 0).is_err());
    }

    #[test]
    fn nearest_code_examples_and_tie_break() {
        let cb = [0.0f64, 0.0, 4.0, 4.0];
        let (idx, _) = nearest_code(&cb, 2, 2, &[0.1, 0.0]);
        assert_eq!(idx, 0);

        let cb = [1.0f64, 1.0, 3.0, 3.0];
        let (idx, d) = nearest_code(&cb, 2, 2, &[2.0, 2.0]);
        assert_eq!(idx, 0, "tie must go to the lowest index");
        assert_eq!(d, 2.0);
    }

    #[test]
    fn nearest_code_matches_brute_force_scan() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(21);
        let k = 64;
        let dim = 8;
        let cb: Vec<f32> = (0..k * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        for _ in 0..100 {
            let x: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (idx, d) = nearest_code(&cb, k, dim, &x);
            // oracle: exhaustive scan with explicit loop
            let mut best = (0usize, f32::INFINITY);
            for c in 0..k {
                let mut acc = 0f32;
                for j in 0..dim {
                    let diff = cb[c * dim + j] - x[j];
                    acc += diff * diff;
                }
                if acc < best.1 {
                    best = (c, acc);
                }
            }
            assert_eq!(idx, best.0);
            assert!((d - best.1).abs() < 1e-6);
        }
    }

    #[test]
    fn vq_idempotent_on_code_vectors() {
        let cb = Codebook::from_vectors(vec![1.0f64, 0.0, 0.0, 1.0], 2, 2);
        let (idx, q, res) = vq_forward(&cb, &cb.vectors.clone(), 2);
        assert_eq!(idx, vec![0, 1]);
        assert_eq!(q, cb.vectors);
        assert!(res.iter().all(|&r| r == 0.0));
    }

    #[test]
    fn vq_nearest_example() {
        let cb = Codebook::from_vectors(vec![1.0f64, 0.0, 0.0, 1.0], 2, 2);
        let (idx, q, _) = vq_forward(&cb, &[0.9, 0.1], 1);
        assert_eq!(idx, vec![0]);
        assert_eq!(q, vec![1.0, 0.0]);
    }

    #[test]
    fn ema_hand_case() {
        // γ=0.9, count=1, sum=[0,0]; two inputs [1,0] assigned to code 0.
        // count' = 1.1, sum' = [0.2, 0], vector ≈ [0.1818..., 0] as ε→0.
        let mut cb = Codebook::from_vectors(vec![0.0f64, 0.0], 1, 2);
        cb.decay = 0.9;
        cb.epsilon = 0.0;
        cb.ema_count = vec![1.0];
        cb.ema_sum = vec![0.0, 0.0];
        cb.ema_update(&[1.0, 0.0, 1.0, 0.0], &[0, 0]);
        assert!((cb.ema_count[0] - 1.1).abs() < 1e-12);
        assert!((cb.ema_sum[0] - 0.2).abs() < 1e-12);
        assert!((cb.vectors[0] - 0.2 / 1.1).abs() < 1e-12);
        assert_eq!(cb.vectors[1], 0.0);
    }

    #[test]
    fn ema_unassigned_code_keeps_its_vector() {
        let mut cb = Codebook::from_vectors(vec![5.0f64, -3.0, 2.0, 2.0], 2, 2);
        cb.epsilon = 0.0;
        cb.ema_count = vec![2.0, 2.0];
        cb.ema_sum = vec![10.0, -6.0, 4.0, 4.0];
        let before = cb.vectors.clone();
        // only code 1 receives points equal to its own mean
        cb.ema_update(&[2.0, 2.0], &[1]);
        assert!((cb.vectors[0] - before[0]).abs() < 1e-12);
        assert!((cb.vectors[1] - before[1]).abs() < 1e-12);
    }

    #[test]
    fn ema_converges_to_constant_point() {
        let mut cb = Codebook::from_vectors(vec![0.0f64, 0.0], 1, 2);
        let p = [3.0f64, -1.5];
        for _ in 0..2000 {
            cb.ema_update(&p, &[0]);
        }
        assert!((cb.vectors[0] - 3.0).abs() < 1e-6, "{:?}", cb.vectors);
        assert!((cb.vectors[1] + 1.5).abs() < 1e-6);
    }

    #[test]
    fn rvq_two_stage_hand_trace() {
        let cb1 = Codebook::from_vectors(vec![1.0f64, 0.0, 0.0, 1.0], 2, 2);
        let cb2 = Codebook::from_vectors(vec![-0.1f64, 0.0, 0.1, 0.0], 2, 2);
        let (idx, sum, res) = rvq_forward(&[cb1, cb2], &[0.9, 0.0], 1).unwrap();
        assert_eq!(idx, vec![vec![0], vec![0]]);
        assert!((sum[0] - 0.9).abs() < 1e-12 && sum[1].abs() < 1e-12);
        assert!(res[0].abs() < 1e-12);
    }

    #[test]
    fn rvq_single_layer_is_bitwise_vq() {
        use rand::{Rng, SeedableRng};
        let mut rng = ChaCha8Rng::seed_from_u64(33);
        let dim = 6;
        let cbv: Vec<f32> = (0..8 * dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cb = Codebook::from_vectors(cbv, 8, dim);
        for _ in 0..100 {
            let x: Vec<f32> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let (i1, q1, r1) = vq_forward(&cb, &x, 1);
            let (i2, q2, r2) = rvq_forward(std::slice::from_ref(&cb), &x, 1).unwrap();
            assert_eq!(i2, vec![i1.clone()]);
            assert_eq!(q1, q2);
            assert_eq!(r1, r2);
        }
    }

    #[test]
    fn detokenize_examples_and_round_trip() {
        let cb = Codebook::from_vectors(vec![1.0f64, 0.0, 0.0, 1.0], 2, 2);
        let toks = TokenSequence {
            indices: vec![vec![0, 1]],
        };
        let out = detokenize(std::slice::from_ref(&cb), &toks).unwrap();
        assert_eq!(out, vec![1.0, 0.0, 0.0, 1.0]);

        // two layers sum elementwise
        let cb2 = Codebook::from_vectors(vec![0.5f64, 0.5, -0.5, -0.5], 2, 2);
        let toks2 = TokenSequence {
            indices: vec![vec![0, 1], vec![1, 0]],
        };
        let out2 = detokenize(&[cb.clone(), cb2], &toks2).unwrap();
        assert_eq!(out2, vec![0.5, -0.5, 0.5, 1.5]);

        // detokenize(vq_forward(x).indices) == vq_forward(x).quantized
        let x = vec![0.8f64, 0.1, 0.2, 0.9];
        let (idx, q, _) = vq_forward(&cb, &x, 2);
        let rt = detokenize(
            std::slice::from_ref(&cb),
            &TokenSequence {
                indices: vec![idx],
            },
        )
        .unwrap();
        assert_eq!(rt, q);
    }

    #[test]
    fn detokenize_rejects_out_of_range() {
        let cb = Codebook::from_vectors(vec![1.0f64, 0.0, 0.0, 1.0], 2, 2);
        let toks = TokenSequence {
            indices: vec![vec![2]],
        };
        assert!(detokenize(&[cb], &toks).is_err());
    }

    #[test]
    fn stats_hand_cases() {
        let s = codebook_stats(&[0, 0, 0, 0], 4).unwrap();
        assert_eq!(s.utilization, 0.25);
        assert!((s.perplexity - 1.0).abs() < 1e-12);

        let s = codebook_stats(&[0, 1, 2, 3], 4).unwrap();
        assert!((s.perplexity - 4.0).abs() < 1e-12);

        let s = codebook_stats(&[0, 0, 1, 1], 4).unwrap();
        assert_eq!(s.utilization, 0.5);
        assert!((s.perplexity - 2.0).abs() < 1e-12);

        assert!(codebook_stats(&[], 4).is_err());
    }

    #[test]
    fn straight_through_binding_grad_equals_downstream() {
        use crate::nn::Graph;
        let mut g: Graph<f64> = Graph::new();
        let x = g.input_with_grad(vec![0.4, -0.3, 0.8, 0.1], 2, 2);
        let cb = Codebook::from_vectors(vec![1.0f64, 0.0, 0.0, 1.0], 2, 2);
        let (_, q, _) = vq_forward(&cb, g.value(x), 2);
        let (st, _commit) = bind_straight_through(&mut g, x, &q, 0.0).unwrap();
        let loss = g.mse_const(st, &[0.0, 0.0, 0.0, 0.0]).unwrap();
        g.backward(loss).unwrap();
        let xg = g.grad(x).unwrap().to_vec();
        let qg = g.grad(st).unwrap().to_vec();
        assert_eq!(xg, qg);
    }

    mod proptests {
        use super::*;
        use proptest::prelude::*;

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(50))]

            /// Lloyd objective is non-increasing on random data.
            #[test]
            fn lloyd_objective_monotone(seed in 0u64..10_000) {
                use rand::{Rng, SeedableRng};
                let mut rng = ChaCha8Rng::seed_from_u64(seed);
                let n = rng.gen_range(8..60);
                let dim = rng.gen_range(1..5);
                let k = rng.gen_range(1..=n.min(8));
                let data: Vec<f64> = (0..n*dim).map(|_| rng.gen_range(-5.0..5.0)).collect();
                let model = kmeans_fit(&data, dim, k, 25, seed).unwrap();
                for w in model.inertia_history.windows(2) {
                    prop_assert!(w[1] <= w[0] + 1e-9, "inertia increased: {:?}", model.inertia_history);
                }
            }
        }
    }
}
