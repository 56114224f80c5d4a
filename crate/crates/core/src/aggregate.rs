//! Gated patch aggregation.
//!
//! Each chunk is up to `k` patch tokens followed by one query token. The
//! query produces softmaxed aggregation weights over its chunk's patches,
//! pools them into a summary `a`, and is updated with a clamped scalar gate:
//! `q_new = (1 - g) q + g a`. Patch tokens pass through unchanged, so chunks
//! are independent of one another; cross-chunk context only arrives through
//! the scan that runs before aggregation.

use crate::error::{Error, Result};
use crate::num::{sigmoid, Element};
use crate::params::{key, ParamBundle};
use crate::pipeline::TokenSequence;
use crate::rng::Rng;
use crate::tensor::{dot, softmax_masked, Tensor};

#[derive(Debug, Clone, PartialEq)]
pub struct AggregatorWeights<T> {
    /// [d, k]: row j weights coordinate j of the query for each within-chunk
    /// position.
    pub w_alpha: Tensor<T>,
    /// [k]
    pub b_alpha: Tensor<T>,
    /// [d]
    pub w_g: Tensor<T>,
    /// scalar
    pub b_g: Tensor<T>,
    /// Gate clamp margin; the applied gate always lies in
    /// [epsilon, 1 - epsilon]. Not a learnable parameter.
    pub epsilon: f64,
}

pub const DEFAULT_GATE_EPSILON: f64 = 0.01;

impl<T: Element> AggregatorWeights<T> {
    pub fn init(d: usize, k: usize, rng: &mut Rng) -> Self {
        let scale = 1.0 / (d as f64).sqrt();
        AggregatorWeights {
            w_alpha: rng.normal_tensor_scaled(&[d, k], scale),
            b_alpha: Tensor::zeros(&[k]),
            w_g: rng.normal_tensor_scaled(&[d], scale),
            b_g: Tensor::scalar(T::zero()),
            epsilon: DEFAULT_GATE_EPSILON,
        }
    }

    pub fn zeros(d: usize, k: usize) -> Self {
        AggregatorWeights {
            w_alpha: Tensor::zeros(&[d, k]),
            b_alpha: Tensor::zeros(&[k]),
            w_g: Tensor::zeros(&[d]),
            b_g: Tensor::scalar(T::zero()),
            epsilon: DEFAULT_GATE_EPSILON,
        }
    }

    /// Chunk capacity (patches per query).
    pub fn k(&self) -> usize {
        self.w_alpha.shape()[1]
    }

    pub fn d(&self) -> usize {
        self.w_alpha.shape()[0]
    }
}

impl<T: Element> ParamBundle<T> for AggregatorWeights<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((key(prefix, "w_alpha"), &self.w_alpha));
        out.push((key(prefix, "b_alpha"), &self.b_alpha));
        out.push((key(prefix, "w_g"), &self.w_g));
        out.push((key(prefix, "b_g"), &self.b_g));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((key(prefix, "w_alpha"), &mut self.w_alpha));
        out.push((key(prefix, "b_alpha"), &mut self.b_alpha));
        out.push((key(prefix, "w_g"), &mut self.w_g));
        out.push((key(prefix, "b_g"), &mut self.b_g));
    }
}

/// One aggregation unit: a query and the patches preceding it. `valid[i]`
/// marks which of the `k` slots are present (trailing chunks may be short).
#[derive(Debug, Clone)]
pub struct Chunk<T> {
    pub query: Vec<T>,
    /// [k_valid, d]
    pub patches: Tensor<T>,
    pub valid: Vec<bool>,
}

impl<T: Element> Chunk<T> {
    pub fn new(query: Vec<T>, patches: Tensor<T>, k: usize) -> Result<Self> {
        let (k_valid, _) = patches.dims2()?;
        if k_valid == 0 || k_valid > k {
            return Err(Error::MalformedMask(format!(
                "chunk holds {k_valid} patches, capacity {k}"
            )));
        }
        let mut valid = vec![false; k];
        valid[..k_valid].fill(true);
        Ok(Chunk { query, patches, valid })
    }
}

/// Aggregation weights for one chunk: masked softmax of a linear map of the
/// query. Sums to one over the valid positions.
pub fn aggregation_weights<T: Element>(
    q: &[T],
    w: &AggregatorWeights<T>,
    valid: &[bool],
) -> Result<Vec<T>> {
    let k = w.k();
    debug_assert_eq!(valid.len(), k);
    debug_assert_eq!(q.len(), w.d());
    let mut logits = vec![T::zero(); k];
    for (i, l) in logits.iter_mut().enumerate() {
        let mut acc = w.b_alpha.data()[i];
        for (j, &qv) in q.iter().enumerate() {
            acc = acc + qv * w.w_alpha.get2(j, i);
        }
        *l = acc;
    }
    softmax_masked(&logits, valid)
}

/// Gated skip update of a query toward its pooled chunk summary. Returns the
/// new query and the gate that was actually applied (after clamping).
pub fn gated_merge<T: Element>(q: &[T], a: &[T], w: &AggregatorWeights<T>) -> (Vec<T>, T) {
    let g_raw = sigmoid(dot(q, w.w_g.data()) + w.b_g.item());
    let lo = T::from_f64(w.epsilon);
    let hi = T::from_f64(1.0 - w.epsilon);
    let g = if g_raw < lo {
        lo
    } else if g_raw > hi {
        hi
    } else {
        g_raw
    };
    let one = T::one();
    let q_new = q
        .iter()
        .zip(a)
        .map(|(&qv, &av)| (one - g) * qv + g * av)
        .collect();
    (q_new, g)
}

/// Full per-chunk update: pooled summary then gated merge.
pub fn aggregate_chunk<T: Element>(
    chunk: &Chunk<T>,
    w: &AggregatorWeights<T>,
) -> Result<(Vec<T>, T)> {
    let alpha = aggregation_weights(&chunk.query, w, &chunk.valid)?;
    let d = chunk.query.len();
    let mut a = vec![T::zero(); d];
    for (i, row) in (0..chunk.patches.shape()[0]).map(|i| (i, chunk.patches.row(i))) {
        let ai = alpha[i];
        for (acc, &v) in a.iter_mut().zip(row) {
            *acc = *acc + ai * v;
        }
    }
    Ok(gated_merge(&chunk.query, &a, w))
}

/// What to do with a query that has no patches in front of it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EmptyChunkPolicy {
    /// Treat as a malformed mask (the default; the insertion op never
    /// produces empty chunks).
    Reject,
    /// Leave the query untouched.
    Passthrough,
}

struct ChunkSpan {
    patch_start: usize,
    patch_len: usize,
    query_idx: usize,
}

/// Splits a token sequence into chunk spans, validating the mask.
fn chunk_spans<T: Element>(
    tokens: &TokenSequence<T>,
    k: usize,
    policy: EmptyChunkPolicy,
) -> Result<Vec<ChunkSpan>> {
    let mut spans = Vec::new();
    let mut run_start = 0usize;
    for (idx, &is_q) in tokens.is_query.iter().enumerate() {
        if !is_q {
            continue;
        }
        let patch_len = idx - run_start;
        if patch_len > k {
            return Err(Error::MalformedMask(format!(
                "{patch_len} patches before query at position {idx}, capacity {k}"
            )));
        }
        if patch_len == 0 && policy == EmptyChunkPolicy::Reject {
            return Err(Error::MalformedMask(format!(
                "query at position {idx} has no patches"
            )));
        }
        spans.push(ChunkSpan { patch_start: run_start, patch_len, query_idx: idx });
        run_start = idx + 1;
    }
    if run_start != tokens.len() {
        return Err(Error::MalformedMask(format!(
            "{} trailing patches after the last query",
            tokens.len() - run_start
        )));
    }
    Ok(spans)
}

struct ChunkCache<T> {
    span: ChunkSpan,
    alpha: Vec<T>,
    a: Vec<T>,
    g_raw: T,
    g: T,
}

pub struct AggCache<T> {
    input: Tensor<T>,
    chunks: Vec<ChunkCache<T>>,
}

fn apply_impl<T: Element>(
    tokens: &TokenSequence<T>,
    w: &AggregatorWeights<T>,
    policy: EmptyChunkPolicy,
    want_cache: bool,
) -> Result<(TokenSequence<T>, Option<AggCache<T>>)> {
    let spans = chunk_spans(tokens, w.k(), policy)?;
    let d = tokens.d();
    let mut out = tokens.tokens.clone();
    let mut chunk_caches = Vec::new();
    let mut valid = vec![false; w.k()];

    for span in spans {
        if span.patch_len == 0 {
            // Passthrough policy: query keeps its value, nothing to cache
            // beyond an identity chunk (skipped in backward).
            continue;
        }
        let q = tokens.tokens.row(span.query_idx);
        valid.iter_mut().for_each(|v| *v = false);
        valid[..span.patch_len].fill(true);
        let alpha = aggregation_weights(q, w, &valid)?;
        let mut a = vec![T::zero(); d];
        for i in 0..span.patch_len {
            let row = tokens.tokens.row(span.patch_start + i);
            let ai = alpha[i];
            for (acc, &v) in a.iter_mut().zip(row) {
                *acc = *acc + ai * v;
            }
        }
        let g_raw = sigmoid(dot(q, w.w_g.data()) + w.b_g.item());
        let (q_new, g) = gated_merge(q, &a, w);
        out.row_mut(span.query_idx).copy_from_slice(&q_new);
        if want_cache {
            chunk_caches.push(ChunkCache { span, alpha, a, g_raw, g });
        }
    }

    let result = TokenSequence {
        tokens: out,
        is_query: tokens.is_query.clone(),
        frame_of: tokens.frame_of.clone(),
    };
    let cache = want_cache.then(|| AggCache {
        input: tokens.tokens.clone(),
        chunks: chunk_caches,
    });
    Ok((result, cache))
}

/// Replace every query token with its gated chunk aggregate; patch tokens
/// pass through unchanged.
pub fn apply_gated_aggregation<T: Element>(
    tokens: &TokenSequence<T>,
    w: &AggregatorWeights<T>,
    policy: EmptyChunkPolicy,
) -> Result<TokenSequence<T>> {
    Ok(apply_impl(tokens, w, policy, false)?.0)
}

pub fn apply_gated_aggregation_cached<T: Element>(
    tokens: &TokenSequence<T>,
    w: &AggregatorWeights<T>,
    policy: EmptyChunkPolicy,
) -> Result<(TokenSequence<T>, AggCache<T>)> {
    let (out, cache) = apply_impl(tokens, w, policy, true)?;
    Ok((out, cache.expect("cache requested")))
}

/// Gradients w.r.t. the input token matrix and the aggregator parameters.
/// The clamp is hard: a saturated gate contributes zero gradient.
pub fn gated_aggregation_backward<T: Element>(
    w: &AggregatorWeights<T>,
    cache: &AggCache<T>,
    d_tokens: &Tensor<T>,
) -> Result<(Tensor<T>, AggregatorWeights<T>)> {
    if d_tokens.shape() != cache.input.shape() {
        return Err(Error::CacheMismatch(format!(
            "cotangent {:?} vs cached input {:?}",
            d_tokens.shape(),
            cache.input.shape()
        )));
    }
    let d = w.d();
    // Patch rows and untouched queries pass through; chunk terms add on top.
    let mut dx = d_tokens.clone();
    let mut grads = AggregatorWeights::zeros(d, w.k());
    grads.epsilon = w.epsilon;
    let lo = T::from_f64(w.epsilon);
    let hi = T::from_f64(1.0 - w.epsilon);

    for ck in &cache.chunks {
        let span = &ck.span;
        let dq_new = d_tokens.row(span.query_idx).to_vec();
        let q = cache.input.row(span.query_idx);
        let one = T::one();

        // Output query replaced the input query entirely.
        for v in dx.row_mut(span.query_idx) {
            *v = T::zero();
        }

        // q_new = (1 - g) q + g a
        let mut dq: Vec<T> = dq_new.iter().map(|&v| (one - ck.g) * v).collect();
        let da: Vec<T> = dq_new.iter().map(|&v| ck.g * v).collect();
        let mut dg = T::zero();
        for j in 0..d {
            dg = dg + dq_new[j] * (ck.a[j] - q[j]);
        }

        // Hard clamp: gradient flows only while the raw gate is inside.
        if ck.g_raw >= lo && ck.g_raw <= hi {
            let d_graw_in = dg * ck.g_raw * (one - ck.g_raw);
            for j in 0..d {
                let cur = grads.w_g.data()[j];
                grads.w_g.data_mut()[j] = cur + d_graw_in * q[j];
                dq[j] = dq[j] + d_graw_in * w.w_g.data()[j];
            }
            grads.b_g = Tensor::scalar(grads.b_g.item() + d_graw_in);
        }

        // a = sum_i alpha_i x_i
        let mut d_alpha = vec![T::zero(); w.k()];
        for i in 0..span.patch_len {
            let row = cache.input.row(span.patch_start + i);
            d_alpha[i] = dot(&da, row);
            let drow = dx.row_mut(span.patch_start + i);
            for (o, &g) in drow.iter_mut().zip(&da) {
                *o = *o + ck.alpha[i] * g;
            }
        }

        // Softmax backward; masked slots have alpha = 0 and drop out.
        let mut inner = T::zero();
        for i in 0..w.k() {
            inner = inner + d_alpha[i] * ck.alpha[i];
        }
        for i in 0..w.k() {
            let d_logit = ck.alpha[i] * (d_alpha[i] - inner);
            if d_logit == T::zero() {
                continue;
            }
            for j in 0..d {
                let cur = grads.w_alpha.get2(j, i);
                grads.w_alpha.set2(j, i, cur + d_logit * q[j]);
                dq[j] = dq[j] + d_logit * w.w_alpha.get2(j, i);
            }
            grads.b_alpha.data_mut()[i] = grads.b_alpha.data()[i] + d_logit;
        }

        let dst = dx.row_mut(span.query_idx);
        for (o, &v) in dst.iter_mut().zip(&dq) {
            *o = *o + v;
        }
    }
    Ok((dx, grads))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn weights_with(d: usize, k: usize) -> AggregatorWeights<f64> {
        AggregatorWeights::zeros(d, k)
    }

    #[test]
    fn zero_weights_give_uniform_alpha() {
        let w = weights_with(3, 4);
        let alpha = aggregation_weights(&[0.5, -1.0, 2.0], &w, &[true; 4]).unwrap();
        for &a in &alpha {
            assert!((a - 0.25).abs() < 1e-12);
        }
    }

    #[test]
    fn single_valid_position_is_one_hot() {
        let w = weights_with(2, 5);
        let valid = [false, false, false, true, false];
        let alpha = aggregation_weights(&[1.0, 1.0], &w, &valid).unwrap();
        assert_eq!(alpha, vec![0.0, 0.0, 0.0, 1.0, 0.0]);
    }

    #[test]
    fn closed_form_softmax_ratio() {
        // d = 1, q = [1]; logits = [0, ln 2].
        let mut w = weights_with(1, 2);
        w.w_alpha = Tensor::from_rows(&[vec![0.0, 2.0f64.ln()]]);
        let alpha = aggregation_weights(&[1.0], &w, &[true, true]).unwrap();
        assert!((alpha[0] - 1.0 / 3.0).abs() < 1e-12);
        assert!((alpha[1] - 2.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn gate_clamps_at_floor() {
        let mut w = weights_with(2, 2);
        w.b_g = Tensor::scalar(-1e9);
        let (q_new, g) = gated_merge(&[1.0, 0.0], &[0.0, 1.0], &w);
        assert_eq!(g, 0.01);
        assert!((q_new[0] - 0.99).abs() < 1e-12);
        assert!((q_new[1] - 0.01).abs() < 1e-12);
    }

    #[test]
    fn neutral_gate_is_half() {
        let w = weights_with(2, 2);
        let (q_new, g) = gated_merge(&[1.0, 0.0], &[0.0, 1.0], &w);
        assert_eq!(g, 0.5);
        assert_eq!(q_new, vec![0.5, 0.5]);
    }

    #[test]
    fn forced_quarter_gate() {
        let mut w = weights_with(2, 2);
        // sigmoid(ln(1/3)) = 0.25
        w.b_g = Tensor::scalar((1.0f64 / 3.0).ln());
        let (q_new, g) = gated_merge(&[1.0, 0.0], &[0.0, 1.0], &w);
        assert!((g - 0.25).abs() < 1e-12);
        assert!((q_new[0] - 0.75).abs() < 1e-12);
        assert!((q_new[1] - 0.25).abs() < 1e-12);
    }

    fn one_chunk_sequence() -> TokenSequence<f64> {
        // Two patches then a query, all width 2.
        TokenSequence {
            tokens: Tensor::from_rows(&[vec![1.0, 3.0], vec![3.0, 5.0], vec![10.0, 20.0]]),
            is_query: vec![false, false, true],
            frame_of: vec![0, 0, 0],
        }
    }

    #[test]
    fn single_chunk_uniform_alpha_half_gate() {
        let seq = one_chunk_sequence();
        let w = weights_with(2, 2);
        let out = apply_gated_aggregation(&seq, &w, EmptyChunkPolicy::Reject).unwrap();
        // mean(x) = [2, 4]; query -> (q + mean)/2 = [6, 12]
        assert_eq!(out.tokens.row(0), seq.tokens.row(0));
        assert_eq!(out.tokens.row(1), seq.tokens.row(1));
        assert_eq!(out.tokens.row(2), &[6.0, 12.0]);
    }

    #[test]
    fn forced_low_gate_is_near_passthrough() {
        let seq = one_chunk_sequence();
        let mut w = weights_with(2, 2);
        w.b_g = Tensor::scalar(-1e9);
        let out = apply_gated_aggregation(&seq, &w, EmptyChunkPolicy::Reject).unwrap();
        assert_eq!(out.tokens.row(0), seq.tokens.row(0));
        assert_eq!(out.tokens.row(1), seq.tokens.row(1));
        let q = seq.tokens.row(2);
        let a = [2.0, 4.0];
        for j in 0..2 {
            let want = 0.99 * q[j] + 0.01 * a[j];
            assert!((out.tokens.row(2)[j] - want).abs() < 1e-12);
        }
    }

    #[test]
    fn two_chunks_match_per_chunk_processing() {
        let mut rng = Rng::new(12);
        let tokens = rng.normal_tensor::<f64>(&[7, 3]);
        let seq = TokenSequence {
            tokens: tokens.clone(),
            is_query: vec![false, false, true, false, false, false, true],
            frame_of: vec![0; 7],
        };
        let mut w = AggregatorWeights::<f64>::init(3, 3, &mut rng);
        w.b_g = Tensor::scalar(0.3);
        let out = apply_gated_aggregation(&seq, &w, EmptyChunkPolicy::Reject).unwrap();

        // Chunk 1: rows 0..2, query 2 (2 patches). Chunk 2: rows 3..6, query 6.
        let c1 = Chunk::new(
            tokens.row(2).to_vec(),
            Tensor::from_rows(&[tokens.row(0).to_vec(), tokens.row(1).to_vec()]),
            3,
        )
        .unwrap();
        let (q1, _) = aggregate_chunk(&c1, &w).unwrap();
        let c2 = Chunk::new(
            tokens.row(6).to_vec(),
            Tensor::from_rows(&[
                tokens.row(3).to_vec(),
                tokens.row(4).to_vec(),
                tokens.row(5).to_vec(),
            ]),
            3,
        )
        .unwrap();
        let (q2, _) = aggregate_chunk(&c2, &w).unwrap();

        assert_eq!(out.tokens.row(2), &q1[..]);
        assert_eq!(out.tokens.row(6), &q2[..]);
    }

    #[test]
    fn chunk_locality() {
        let mut rng = Rng::new(13);
        let tokens = rng.normal_tensor::<f64>(&[6, 3]);
        let seq = TokenSequence {
            tokens,
            is_query: vec![false, false, true, false, false, true],
            frame_of: vec![0; 6],
        };
        let w = AggregatorWeights::<f64>::init(3, 2, &mut rng);
        let base = apply_gated_aggregation(&seq, &w, EmptyChunkPolicy::Reject).unwrap();

        let mut perturbed = seq.clone();
        perturbed.tokens.row_mut(0)[1] += 2.0;
        let out = apply_gated_aggregation(&perturbed, &w, EmptyChunkPolicy::Reject).unwrap();
        // Chunk B's query (position 5) is untouched by changes in chunk A.
        assert_eq!(base.tokens.row(5), out.tokens.row(5));
        assert_ne!(base.tokens.row(2), out.tokens.row(2));
    }

    #[test]
    fn adjacent_queries_rejected_unless_allowed() {
        let seq = TokenSequence {
            tokens: Tensor::<f64>::zeros(&[3, 2]),
            is_query: vec![false, true, true],
            frame_of: vec![0; 3],
        };
        let w = weights_with(2, 2);
        assert!(matches!(
            apply_gated_aggregation(&seq, &w, EmptyChunkPolicy::Reject),
            Err(Error::MalformedMask(_))
        ));
        let out = apply_gated_aggregation(&seq, &w, EmptyChunkPolicy::Passthrough).unwrap();
        assert_eq!(out.tokens.row(2), seq.tokens.row(2));
    }

    #[test]
    fn trailing_patches_are_malformed() {
        let seq = TokenSequence {
            tokens: Tensor::<f64>::zeros(&[3, 2]),
            is_query: vec![false, true, false],
            frame_of: vec![0; 3],
        };
        let w = weights_with(2, 2);
        assert!(matches!(
            apply_gated_aggregation(&seq, &w, EmptyChunkPolicy::Reject),
            Err(Error::MalformedMask(_))
        ));
    }

    #[test]
    fn oversized_chunk_is_malformed() {
        let seq = TokenSequence {
            tokens: Tensor::<f64>::zeros(&[4, 2]),
            is_query: vec![false, false, false, true],
            frame_of: vec![0; 4],
        };
        let w = weights_with(2, 2); // capacity 2, but 3 patches
        assert!(matches!(
            apply_gated_aggregation(&seq, &w, EmptyChunkPolicy::Reject),
            Err(Error::MalformedMask(_))
        ));
    }
}
