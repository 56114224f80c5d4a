//! The compression pipeline: periodic query insertion over flattened frame
//! patches, a stack of bidirectional scan blocks with gated aggregation,
//! query extraction, and frame-level secondary sampling.
//!
//! Token accounting is exact: a video of `M` frames with `N` patches each,
//! query interval `k` and sampling ratio `s` hands `ceil(M*s) * ceil(N/k)`
//! tokens downstream.

use crate::aggregate::{
    apply_gated_aggregation, apply_gated_aggregation_cached, gated_aggregation_backward,
    AggCache, AggregatorWeights, EmptyChunkPolicy,
};
use crate::blocks::{
    bimamba_backward, bimamba_forward, bimamba_forward_cached, BiMambaBlockWeights, BiMambaCache,
};
use crate::error::{Error, Result};
use crate::num::Element;
use crate::params::{key, ParamBundle};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Exact sampling ratio, kept rational so budgets like 1/3 stay exact.
/// Always reduced, with `0 < num <= den`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Rational {
    num: u64,
    den: u64,
}

impl Rational {
    pub fn new(num: u64, den: u64) -> Result<Self> {
        if num == 0 || den == 0 || num > den {
            return Err(Error::InvalidParameter {
                name: "s",
                reason: format!("sampling ratio {num}/{den} must lie in (0, 1]"),
            });
        }
        let g = gcd(num, den);
        Ok(Rational { num: num / g, den: den / g })
    }

    pub fn one() -> Self {
        Rational { num: 1, den: 1 }
    }

    /// Parses "num/den" or a bare integer (which must be 1).
    pub fn parse(text: &str) -> Result<Self> {
        let bad = |reason: String| Error::InvalidParameter { name: "s", reason };
        match text.split_once('/') {
            Some((n, d)) => {
                let num = n.trim().parse::<u64>().map_err(|e| bad(format!("{text:?}: {e}")))?;
                let den = d.trim().parse::<u64>().map_err(|e| bad(format!("{text:?}: {e}")))?;
                Rational::new(num, den)
            }
            None => {
                let v = text.trim().parse::<u64>().map_err(|e| bad(format!("{text:?}: {e}")))?;
                Rational::new(v, 1)
            }
        }
    }

    pub fn num(&self) -> u64 {
        self.num
    }

    pub fn den(&self) -> u64 {
        self.den
    }

    pub fn is_one(&self) -> bool {
        self.num == self.den
    }

    pub fn as_f64(&self) -> f64 {
        self.num as f64 / self.den as f64
    }

    /// `ceil(m * num / den)` in exact integer arithmetic.
    pub fn ceil_mul(&self, m: usize) -> usize {
        let v = (m as u128 * self.num as u128 + self.den as u128 - 1) / self.den as u128;
        v as usize
    }
}

impl std::fmt::Display for Rational {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        if self.den == 1 {
            write!(f, "{}", self.num)
        } else {
            write!(f, "{}/{}", self.num, self.den)
        }
    }
}

fn gcd(mut a: u64, mut b: u64) -> u64 {
    while b != 0 {
        (a, b) = (b, a % b);
    }
    a
}

/// All pipeline hyperparameters.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaMiaConfig {
    /// model width
    pub d: usize,
    pub d_state: usize,
    pub expand: usize,
    pub w_conv: usize,
    /// stacked block count
    pub layers: usize,
    /// query interval: patches per query
    pub k: usize,
    /// secondary sampling ratio
    pub s: Rational,
    /// patches per frame
    pub n_patches: usize,
    /// maximum frames the config is meant for (presets only; ops accept any M)
    pub m_max: usize,
}

impl MambaMiaConfig {
    pub fn with_defaults(d: usize) -> Self {
        MambaMiaConfig {
            d,
            d_state: 16,
            expand: 2,
            w_conv: 4,
            layers: 2,
            k: 10,
            s: Rational::new(1, 3).expect("valid"),
            n_patches: 100,
            m_max: 128,
        }
    }

    pub fn d_inner(&self) -> usize {
        self.expand * self.d
    }

    /// `ceil(N / k)`: queries inserted per frame.
    pub fn queries_per_frame(&self) -> usize {
        self.n_patches.div_ceil(self.k)
    }

    pub fn validate(&self) -> Result<()> {
        let check = |ok: bool, name: &'static str, reason: &str| -> Result<()> {
            if ok {
                Ok(())
            } else {
                Err(Error::InvalidParameter { name, reason: reason.to_string() })
            }
        };
        check(self.d >= 1, "d", "must be >= 1")?;
        check(self.d_state >= 1, "d_state", "must be >= 1")?;
        check(self.expand >= 1, "expand", "must be >= 1")?;
        check(self.w_conv >= 1, "w_conv", "must be >= 1")?;
        check(self.layers >= 1, "layers", "must be >= 1")?;
        check(self.k >= 1, "k", "must be >= 1")?;
        check(self.n_patches >= 1, "n_patches", "must be >= 1")?;
        check(self.m_max >= 1, "m_max", "must be >= 1")?;
        Ok(())
    }
}

/// Interleaved patch/query token matrix plus position metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenSequence<T> {
    /// [T, d]
    pub tokens: Tensor<T>,
    pub is_query: Vec<bool>,
    /// source frame index per position, non-decreasing
    pub frame_of: Vec<usize>,
}

impl<T: Element> TokenSequence<T> {
    pub fn len(&self) -> usize {
        self.is_query.len()
    }

    pub fn is_empty(&self) -> bool {
        self.is_query.is_empty()
    }

    pub fn d(&self) -> usize {
        self.tokens.shape()[1]
    }

    pub fn query_positions(&self) -> Vec<usize> {
        self.is_query
            .iter()
            .enumerate()
            .filter_map(|(i, &q)| q.then_some(i))
            .collect()
    }
}

/// The learnable anchor vector replicated at every insertion point.
#[derive(Debug, Clone, PartialEq)]
pub struct QueryEmbedding<T> {
    /// [d]
    pub vec: Tensor<T>,
}

impl<T: Element> QueryEmbedding<T> {
    pub fn init(d: usize, rng: &mut Rng) -> Self {
        QueryEmbedding { vec: rng.normal_tensor_scaled(&[d], 1.0 / (d as f64).sqrt()) }
    }

    pub fn zeros(d: usize) -> Self {
        QueryEmbedding { vec: Tensor::zeros(&[d]) }
    }
}

/// One compression layer: bidirectional scan block followed by gated
/// aggregation onto the query tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorLayer<T> {
    pub bimamba: BiMambaBlockWeights<T>,
    pub aggregator: AggregatorWeights<T>,
}

/// Full compressor: shared query embedding plus `layers` stacked layers.
#[derive(Debug, Clone, PartialEq)]
pub struct CompressorWeights<T> {
    pub query: QueryEmbedding<T>,
    pub layers: Vec<CompressorLayer<T>>,
}

impl<T: Element> CompressorWeights<T> {
    pub fn init(cfg: &MambaMiaConfig, rng: &mut Rng) -> Self {
        let layers = (0..cfg.layers)
            .map(|_| CompressorLayer {
                bimamba: BiMambaBlockWeights::init(
                    cfg.d,
                    cfg.d_inner(),
                    cfg.d_state,
                    cfg.w_conv,
                    rng,
                ),
                aggregator: AggregatorWeights::init(cfg.d, cfg.k, rng),
            })
            .collect();
        CompressorWeights { query: QueryEmbedding::init(cfg.d, rng), layers }
    }

    pub fn zeros(cfg: &MambaMiaConfig) -> Self {
        let layers = (0..cfg.layers)
            .map(|_| CompressorLayer {
                bimamba: BiMambaBlockWeights::zeros(
                    cfg.d,
                    cfg.d_inner(),
                    cfg.d_state,
                    cfg.w_conv,
                ),
                aggregator: AggregatorWeights::zeros(cfg.d, cfg.k),
            })
            .collect();
        CompressorWeights { query: QueryEmbedding::zeros(cfg.d), layers }
    }
}

impl<T: Element> ParamBundle<T> for CompressorWeights<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((key(prefix, "query"), &self.query.vec));
        for (i, layer) in self.layers.iter().enumerate() {
            let lk = key(prefix, &format!("layer{i}"));
            layer.bimamba.collect(&lk, out);
            layer.aggregator.collect(&key(&lk, "agg"), out);
        }
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((key(prefix, "query"), &mut self.query.vec));
        for (i, layer) in self.layers.iter_mut().enumerate() {
            let lk = key(prefix, &format!("layer{i}"));
            layer.bimamba.collect_mut(&lk, out);
            layer.aggregator.collect_mut(&key(&lk, "agg"), out);
        }
    }
}

/// Flattens frames in temporal-then-spatial order and inserts one query
/// after every `k` patches, plus one after any trailing partial group of a
/// frame. Chunks never straddle frame boundaries; queries inherit the frame
/// index of their chunk.
pub fn insert_queries<T: Element>(
    frames: &Tensor<T>,
    q: &QueryEmbedding<T>,
    k: usize,
) -> Result<TokenSequence<T>> {
    let (m, n, d) = frames.dims3()?;
    if m == 0 || n == 0 {
        return Err(Error::InvalidParameter {
            name: "frames",
            reason: format!("need at least one frame and one patch, got [{m}, {n}, {d}]"),
        });
    }
    if q.vec.len() != d {
        return Err(Error::ShapeMismatch {
            op: "insert_queries",
            lhs: frames.shape().to_vec(),
            rhs: q.vec.shape().to_vec(),
        });
    }
    if k == 0 {
        return Err(Error::InvalidParameter { name: "k", reason: "must be >= 1".into() });
    }
    let per_frame_queries = n.div_ceil(k);
    let total = m * n + m * per_frame_queries;
    let mut tokens = Tensor::zeros(&[total, d]);
    let mut is_query = vec![false; total];
    let mut frame_of = vec![0usize; total];
    let mut pos = 0usize;
    for frame in 0..m {
        let mut in_chunk = 0usize;
        for patch in 0..n {
            let src = &frames.data()[(frame * n + patch) * d..(frame * n + patch + 1) * d];
            tokens.row_mut(pos).copy_from_slice(src);
            frame_of[pos] = frame;
            pos += 1;
            in_chunk += 1;
            if in_chunk == k || patch + 1 == n {
                tokens.row_mut(pos).copy_from_slice(q.vec.data());
                is_query[pos] = true;
                frame_of[pos] = frame;
                pos += 1;
                in_chunk = 0;
            }
        }
    }
    debug_assert_eq!(pos, total);
    Ok(TokenSequence { tokens, is_query, frame_of })
}

fn extract_queries<T: Element>(
    seq: &TokenSequence<T>,
    m: usize,
    q_per_frame: usize,
) -> Tensor<T> {
    let d = seq.d();
    let mut out = Tensor::zeros(&[m, q_per_frame, d]);
    let mut write = 0usize;
    for (i, &is_q) in seq.is_query.iter().enumerate() {
        if is_q {
            out.data_mut()[write * d..(write + 1) * d].copy_from_slice(seq.tokens.row(i));
            write += 1;
        }
    }
    debug_assert_eq!(write, m * q_per_frame);
    out
}

/// Joint compression: insert queries, run every layer (scan then
/// aggregation) over the full interleaved sequence, extract per-frame query
/// tokens. Output is [M, ceil(N/k), d].
pub fn mambamia_compress<T: Element>(
    frames: &Tensor<T>,
    weights: &CompressorWeights<T>,
    cfg: &MambaMiaConfig,
) -> Result<Tensor<T>> {
    let (m, n, _) = frames.dims3()?;
    if n != cfg.n_patches {
        return Err(Error::InvalidParameter {
            name: "frames",
            reason: format!("{n} patches per frame, config expects {}", cfg.n_patches),
        });
    }
    let mut seq = insert_queries(frames, &weights.query, cfg.k)?;
    for layer in &weights.layers {
        let mixed = bimamba_forward(&seq.tokens, &layer.bimamba)?;
        seq.tokens = mixed;
        seq = apply_gated_aggregation(&seq, &layer.aggregator, EmptyChunkPolicy::Reject)?;
    }
    Ok(extract_queries(&seq, m, cfg.queries_per_frame()))
}

/// Per-layer intermediates for [`compress_backward`].
pub struct CompressCache<T> {
    layer_caches: Vec<(BiMambaCache<T>, AggCache<T>)>,
    query_positions: Vec<usize>,
    m: usize,
    n: usize,
    q_per_frame: usize,
    d: usize,
}

pub fn mambamia_compress_cached<T: Element>(
    frames: &Tensor<T>,
    weights: &CompressorWeights<T>,
    cfg: &MambaMiaConfig,
) -> Result<(Tensor<T>, CompressCache<T>)> {
    let (m, n, d) = frames.dims3()?;
    if n != cfg.n_patches {
        return Err(Error::InvalidParameter {
            name: "frames",
            reason: format!("{n} patches per frame, config expects {}", cfg.n_patches),
        });
    }
    let mut seq = insert_queries(frames, &weights.query, cfg.k)?;
    let query_positions = seq.query_positions();
    let mut layer_caches = Vec::with_capacity(weights.layers.len());
    for layer in &weights.layers {
        let (mixed, bl_cache) = bimamba_forward_cached(&seq.tokens, &layer.bimamba)?;
        seq.tokens = mixed;
        let (aggregated, agg_cache) =
            apply_gated_aggregation_cached(&seq, &layer.aggregator, EmptyChunkPolicy::Reject)?;
        seq = aggregated;
        layer_caches.push((bl_cache, agg_cache));
    }
    let out = extract_queries(&seq, m, cfg.queries_per_frame());
    let cache = CompressCache {
        layer_caches,
        query_positions,
        m,
        n,
        q_per_frame: cfg.queries_per_frame(),
        d,
    };
    Ok((out, cache))
}

/// Gradients of a scalar loss w.r.t. the input frames and all compressor
/// parameters, given the cotangent of the extracted query tensor.
pub fn compress_backward<T: Element>(
    weights: &CompressorWeights<T>,
    cache: &CompressCache<T>,
    d_queries: &Tensor<T>,
) -> Result<(Tensor<T>, CompressorWeights<T>)> {
    let (m, q_per_frame, d) = d_queries.dims3()?;
    if m != cache.m || q_per_frame != cache.q_per_frame || d != cache.d {
        return Err(Error::CacheMismatch(format!(
            "cotangent {:?} vs cached [{}, {}, {}]",
            d_queries.shape(),
            cache.m,
            cache.q_per_frame,
            cache.d
        )));
    }
    let total = cache.m * cache.n + cache.query_positions.len();
    let mut d_tokens = Tensor::zeros(&[total, d]);
    for (w_idx, &pos) in cache.query_positions.iter().enumerate() {
        d_tokens
            .row_mut(pos)
            .copy_from_slice(&d_queries.data()[w_idx * d..(w_idx + 1) * d]);
    }

    let mut grads: Vec<CompressorLayer<T>> = Vec::with_capacity(weights.layers.len());
    for (layer, (bl_cache, agg_cache)) in
        weights.layers.iter().zip(&cache.layer_caches).rev()
    {
        let (after_agg, d_agg) =
            gated_aggregation_backward(&layer.aggregator, agg_cache, &d_tokens)?;
        let (after_block, d_block) = bimamba_backward(&layer.bimamba, bl_cache, &after_agg)?;
        d_tokens = after_block;
        grads.push(CompressorLayer { bimamba: d_block, aggregator: d_agg });
    }
    grads.reverse();

    // Entry sequence: patch rows map back to frames, query rows sum into the
    // shared embedding.
    let mut d_frames = Tensor::zeros(&[cache.m, cache.n, d]);
    let mut d_query_vec = Tensor::zeros(&[d]);
    let mut patch_write = 0usize;
    for pos in 0..total {
        let row = d_tokens.row(pos);
        if cache.query_positions.binary_search(&pos).is_ok() {
            for (acc, &v) in d_query_vec.data_mut().iter_mut().zip(row) {
                *acc = *acc + v;
            }
        } else {
            d_frames.data_mut()[patch_write * d..(patch_write + 1) * d].copy_from_slice(row);
            patch_write += 1;
        }
    }
    debug_assert_eq!(patch_write, cache.m * cache.n);

    let grads = CompressorWeights {
        query: QueryEmbedding { vec: d_query_vec },
        layers: grads,
    };
    Ok((d_frames, grads))
}

/// Per-frame variant: each frame is compressed as its own one-frame
/// sequence, so no information crosses frame boundaries. No secondary
/// sampling applies in this mode.
pub fn mambamia_compress_per_frame<T: Element>(
    frames: &Tensor<T>,
    weights: &CompressorWeights<T>,
    cfg: &MambaMiaConfig,
) -> Result<Tensor<T>> {
    let (m, n, d) = frames.dims3()?;
    let q_per_frame = cfg.queries_per_frame();
    let mut out = Tensor::zeros(&[m, q_per_frame, d]);
    let frame_len = n * d;
    for frame in 0..m {
        let one = Tensor::new(
            vec![1, n, d],
            frames.data()[frame * frame_len..(frame + 1) * frame_len].to_vec(),
        )?;
        let compressed = mambamia_compress(&one, weights, cfg)?;
        out.data_mut()[frame * q_per_frame * d..(frame + 1) * q_per_frame * d]
            .copy_from_slice(compressed.data());
    }
    Ok(out)
}

/// Frame indices retained by secondary sampling: stride `den` when
/// `s = 1/den`, otherwise evenly spaced `round(j / s)` clamped to the last
/// frame. Always `ceil(M * s)` indices, anchored at frame 0.
pub fn sample_indices(m: usize, s: Rational) -> Vec<usize> {
    let m_keep = s.ceil_mul(m);
    if s.num() == 1 {
        let stride = s.den() as usize;
        return (0..m_keep).map(|j| j * stride).collect();
    }
    (0..m_keep)
        .map(|j| {
            let num = s.num() as u128;
            let den = s.den() as u128;
            // round(j * den / num), half away from zero
            let idx = (2 * j as u128 * den + num) / (2 * num);
            (idx as usize).min(m - 1)
        })
        .collect()
}

/// Keeps `ceil(M * s)` frames of a [M, Q, d] query tensor.
pub fn secondary_sample<T: Element>(per_frame_queries: &Tensor<T>, s: Rational) -> Result<Tensor<T>> {
    let (m, q, d) = per_frame_queries.dims3()?;
    if s.is_one() {
        return Ok(per_frame_queries.clone());
    }
    let indices = sample_indices(m, s);
    let mut out = Tensor::zeros(&[indices.len(), q, d]);
    let frame_len = q * d;
    for (dst, &src) in indices.iter().enumerate() {
        out.data_mut()[dst * frame_len..(dst + 1) * frame_len]
            .copy_from_slice(&per_frame_queries.data()[src * frame_len..(src + 1) * frame_len]);
    }
    Ok(out)
}

/// Tokens handed downstream: `ceil(M * s) * ceil(N / k)`.
pub fn token_budget(m: usize, n: usize, k: usize, s: Rational) -> usize {
    s.ceil_mul(m) * n.div_ceil(k)
}
