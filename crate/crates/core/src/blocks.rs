//! Sequence-processing blocks: the gated selective-scan block, its
//! bidirectional composition, and the attention / pooling baselines used for
//! controlled comparisons.
//!
//! Every block is residual: `forward(x) = x + core(x)`. The bidirectional
//! block runs one core left-to-right and an independently parameterized core
//! right-to-left, concatenates, and merges back to width `d`.

use crate::error::{Error, Result};
use crate::num::{silu, silu_prime, Element};
use crate::params::{key, ParamBundle};
use crate::rng::Rng;
use crate::ssm::{
    selective_scan, selective_scan_backward, selective_scan_forward, ScanCache,
    SelectiveSsmParams,
};
use crate::tensor::{debug_assert_finite, matmul, matmul_nt, matmul_tn, Tensor};

/// One scan direction: input projection (SSM branch + gate branch),
/// depthwise causal conv, selective scan, output projection.
#[derive(Debug, Clone, PartialEq)]
pub struct MambaBlockWeights<T> {
    /// [d, 2 * d_inner]; columns split into the SSM branch and the gate z.
    pub w_in: Tensor<T>,
    /// [d_inner, w_conv] depthwise causal kernel; last tap is the current step.
    pub conv_kernel: Tensor<T>,
    pub ssm: SelectiveSsmParams<T>,
    /// [d_inner, d]
    pub w_out: Tensor<T>,
}

impl<T: Element> MambaBlockWeights<T> {
    pub fn init(d: usize, d_inner: usize, d_state: usize, w_conv: usize, rng: &mut Rng) -> Self {
        MambaBlockWeights {
            w_in: rng.normal_tensor_scaled(&[d, 2 * d_inner], 1.0 / (d as f64).sqrt()),
            conv_kernel: rng
                .normal_tensor_scaled(&[d_inner, w_conv], 1.0 / (w_conv as f64).sqrt()),
            ssm: SelectiveSsmParams::init(d_inner, d_state, rng),
            w_out: rng.normal_tensor_scaled(&[d_inner, d], 1.0 / (d_inner as f64).sqrt()),
        }
    }

    pub fn zeros(d: usize, d_inner: usize, d_state: usize, w_conv: usize) -> Self {
        MambaBlockWeights {
            w_in: Tensor::zeros(&[d, 2 * d_inner]),
            conv_kernel: Tensor::zeros(&[d_inner, w_conv]),
            ssm: SelectiveSsmParams::zeros(d_inner, d_state),
            w_out: Tensor::zeros(&[d_inner, d]),
        }
    }

    pub fn d(&self) -> usize {
        self.w_in.shape()[0]
    }

    pub fn d_inner(&self) -> usize {
        self.ssm.d_inner()
    }

    pub fn w_conv(&self) -> usize {
        self.conv_kernel.shape()[1]
    }
}

impl<T: Element> ParamBundle<T> for MambaBlockWeights<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((key(prefix, "w_in"), &self.w_in));
        out.push((key(prefix, "conv"), &self.conv_kernel));
        self.ssm.collect(&key(prefix, "ssm"), out);
        out.push((key(prefix, "w_out"), &self.w_out));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((key(prefix, "w_in"), &mut self.w_in));
        out.push((key(prefix, "conv"), &mut self.conv_kernel));
        self.ssm.collect_mut(&key(prefix, "ssm"), out);
        out.push((key(prefix, "w_out"), &mut self.w_out));
    }
}

/// Depthwise causal convolution with zero left-padding: output at step `t`
/// sees inputs at steps `t - w_conv + 1 ..= t`.
fn causal_conv<T: Element>(u: &Tensor<T>, kernel: &Tensor<T>) -> Tensor<T> {
    let (t_len, d_inner) = (u.shape()[0], u.shape()[1]);
    let w_conv = kernel.shape()[1];
    let mut out = Tensor::zeros(&[t_len, d_inner]);
    for t in 0..t_len {
        for c in 0..d_inner {
            let mut acc = T::zero();
            for j in 0..w_conv {
                let src = t as isize - (w_conv as isize - 1) + j as isize;
                if src >= 0 {
                    acc = acc + kernel.get2(c, j) * u.get2(src as usize, c);
                }
            }
            out.set2(t, c, acc);
        }
    }
    out
}

fn causal_conv_backward<T: Element>(
    dv: &Tensor<T>,
    u: &Tensor<T>,
    kernel: &Tensor<T>,
) -> (Tensor<T>, Tensor<T>) {
    let (t_len, d_inner) = (u.shape()[0], u.shape()[1]);
    let w_conv = kernel.shape()[1];
    let mut du = Tensor::zeros(&[t_len, d_inner]);
    let mut dk = Tensor::zeros(&[d_inner, w_conv]);
    for t in 0..t_len {
        for c in 0..d_inner {
            let g = dv.get2(t, c);
            if g == T::zero() {
                continue;
            }
            for j in 0..w_conv {
                let src = t as isize - (w_conv as isize - 1) + j as isize;
                if src >= 0 {
                    let s = src as usize;
                    du.set2(s, c, du.get2(s, c) + g * kernel.get2(c, j));
                    dk.set2(c, j, dk.get2(c, j) + g * u.get2(s, c));
                }
            }
        }
    }
    (du, dk)
}

/// Intermediates for one core evaluation.
#[derive(Debug, Clone)]
pub struct MambaCoreCache<T> {
    x: Tensor<T>,
    u_ssm: Tensor<T>,
    z: Tensor<T>,
    /// conv output, pre-activation
    v: Tensor<T>,
    scan: ScanCache<T>,
    y_ssm: Tensor<T>,
    gate: Tensor<T>,
    y_gated: Tensor<T>,
}

/// The block body without the residual: projection, conv, activation, scan,
/// gating, output projection. Output is [T, d].
pub fn mamba_core<T: Element>(x: &Tensor<T>, w: &MambaBlockWeights<T>) -> Result<Tensor<T>> {
    let u = matmul(x, &w.w_in)?;
    let (u_ssm, z) = u.split_cols(w.d_inner());
    let s = causal_conv(&u_ssm, &w.conv_kernel).map(silu);
    let (y_ssm, _) = selective_scan(&s, &w.ssm)?;
    let y_gated = y_ssm.hadamard(&z.map(silu));
    matmul(&y_gated, &w.w_out)
}

pub fn mamba_core_forward<T: Element>(
    x: &Tensor<T>,
    w: &MambaBlockWeights<T>,
) -> Result<(Tensor<T>, MambaCoreCache<T>)> {
    let u = matmul(x, &w.w_in)?;
    let (u_ssm, z) = u.split_cols(w.d_inner());
    let v = causal_conv(&u_ssm, &w.conv_kernel);
    let s = v.map(silu);
    let (y_ssm, scan) = selective_scan_forward(&s, &w.ssm)?;
    let gate = z.map(silu);
    let y_gated = y_ssm.hadamard(&gate);
    let out = matmul(&y_gated, &w.w_out)?;
    let cache = MambaCoreCache {
        x: x.clone(),
        u_ssm,
        z,
        v,
        scan,
        y_ssm,
        gate,
        y_gated,
    };
    Ok((out, cache))
}

pub fn mamba_core_backward<T: Element>(
    w: &MambaBlockWeights<T>,
    cache: &MambaCoreCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, MambaBlockWeights<T>)> {
    let d_y_gated = matmul_nt(d_out, &w.w_out)?;
    let dw_out = matmul_tn(&cache.y_gated, d_out)?;

    let d_y_ssm = d_y_gated.hadamard(&cache.gate);
    let d_gate = d_y_gated.hadamard(&cache.y_ssm);
    let dz = d_gate.hadamard(&cache.z.map(silu_prime));

    let (ds, d_ssm) = selective_scan_backward(&cache.scan, &d_y_ssm)?;
    let dv = ds.hadamard(&cache.v.map(silu_prime));
    let (du_ssm, d_kernel) = causal_conv_backward(&dv, &cache.u_ssm, &w.conv_kernel);

    let du = du_ssm.concat_cols(&dz);
    let dx = matmul_nt(&du, &w.w_in)?;
    let dw_in = matmul_tn(&cache.x, &du)?;

    let grads = MambaBlockWeights {
        w_in: dw_in,
        conv_kernel: d_kernel,
        ssm: d_ssm,
        w_out: dw_out,
    };
    Ok((dx, grads))
}

/// Residual unidirectional block: `x + core(x)`.
pub fn mamba_block_forward<T: Element>(
    x: &Tensor<T>,
    w: &MambaBlockWeights<T>,
) -> Result<Tensor<T>> {
    let out = x.add(&mamba_core(x, w)?);
    debug_assert_finite("mamba_block_forward", &out);
    Ok(out)
}

/// Parallel left-to-right and right-to-left cores with separate parameters;
/// outputs are concatenated and merged back to width `d`.
#[derive(Debug, Clone, PartialEq)]
pub struct BiMambaBlockWeights<T> {
    pub fwd: MambaBlockWeights<T>,
    pub bwd: MambaBlockWeights<T>,
    /// [2d, d]
    pub w_merge: Tensor<T>,
}

impl<T: Element> BiMambaBlockWeights<T> {
    pub fn init(d: usize, d_inner: usize, d_state: usize, w_conv: usize, rng: &mut Rng) -> Self {
        BiMambaBlockWeights {
            fwd: MambaBlockWeights::init(d, d_inner, d_state, w_conv, rng),
            bwd: MambaBlockWeights::init(d, d_inner, d_state, w_conv, rng),
            w_merge: rng.normal_tensor_scaled(&[2 * d, d], 1.0 / (2.0 * d as f64).sqrt()),
        }
    }

    pub fn zeros(d: usize, d_inner: usize, d_state: usize, w_conv: usize) -> Self {
        BiMambaBlockWeights {
            fwd: MambaBlockWeights::zeros(d, d_inner, d_state, w_conv),
            bwd: MambaBlockWeights::zeros(d, d_inner, d_state, w_conv),
            w_merge: Tensor::zeros(&[2 * d, d]),
        }
    }

    pub fn d(&self) -> usize {
        self.fwd.d()
    }

    /// Same block scanning the sequence the other way: directions swapped
    /// and the merge matrix's row blocks swapped with them.
    pub fn swap_directions(&self) -> Self {
        let d = self.d();
        let mut w_merge = Tensor::zeros(&[2 * d, d]);
        for i in 0..d {
            for j in 0..d {
                w_merge.set2(i, j, self.w_merge.get2(d + i, j));
                w_merge.set2(d + i, j, self.w_merge.get2(i, j));
            }
        }
        BiMambaBlockWeights {
            fwd: self.bwd.clone(),
            bwd: self.fwd.clone(),
            w_merge,
        }
    }
}

impl<T: Element> ParamBundle<T> for BiMambaBlockWeights<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.fwd.collect(&key(prefix, "fwd"), out);
        self.bwd.collect(&key(prefix, "bwd"), out);
        out.push((key(prefix, "w_merge"), &self.w_merge));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.fwd.collect_mut(&key(prefix, "fwd"), out);
        self.bwd.collect_mut(&key(prefix, "bwd"), out);
        out.push((key(prefix, "w_merge"), &mut self.w_merge));
    }
}

#[derive(Debug, Clone)]
pub struct BiMambaCache<T> {
    fwd: MambaCoreCache<T>,
    /// cache of the backward-direction core, taken over the reversed input
    bwd: MambaCoreCache<T>,
    cat: Tensor<T>,
}

pub fn bimamba_forward<T: Element>(
    x: &Tensor<T>,
    w: &BiMambaBlockWeights<T>,
) -> Result<Tensor<T>> {
    let y_f = mamba_core(x, &w.fwd)?;
    let y_b = mamba_core(&x.reverse_rows(), &w.bwd)?.reverse_rows();
    let merged = matmul(&y_f.concat_cols(&y_b), &w.w_merge)?;
    let out = x.add(&merged);
    debug_assert_finite("bimamba_forward", &out);
    Ok(out)
}

pub fn bimamba_forward_cached<T: Element>(
    x: &Tensor<T>,
    w: &BiMambaBlockWeights<T>,
) -> Result<(Tensor<T>, BiMambaCache<T>)> {
    let (y_f, fwd_cache) = mamba_core_forward(x, &w.fwd)?;
    let (y_b_rev, bwd_cache) = mamba_core_forward(&x.reverse_rows(), &w.bwd)?;
    let cat = y_f.concat_cols(&y_b_rev.reverse_rows());
    let out = x.add(&matmul(&cat, &w.w_merge)?);
    Ok((out, BiMambaCache { fwd: fwd_cache, bwd: bwd_cache, cat }))
}

pub fn bimamba_backward<T: Element>(
    w: &BiMambaBlockWeights<T>,
    cache: &BiMambaCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, BiMambaBlockWeights<T>)> {
    let d = w.d();
    let d_cat = matmul_nt(d_out, &w.w_merge)?;
    let dw_merge = matmul_tn(&cache.cat, d_out)?;
    let (d_y_f, d_y_b) = d_cat.split_cols(d);

    let (dx_f, g_fwd) = mamba_core_backward(&w.fwd, &cache.fwd, &d_y_f)?;
    // The bwd core ran on reversed input, so its cotangent reverses in and
    // its input gradient reverses back out.
    let (dx_b_rev, g_bwd) = mamba_core_backward(&w.bwd, &cache.bwd, &d_y_b.reverse_rows())?;

    let dx = d_out.add(&dx_f).add(&dx_b_rev.reverse_rows());
    let grads = BiMambaBlockWeights { fwd: g_fwd, bwd: g_bwd, w_merge: dw_merge };
    Ok((dx, grads))
}

/// Bidirectional softmax attention with a residual add; the quadratic-cost
/// baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionBlockWeights<T> {
    pub w_q: Tensor<T>,
    pub w_k: Tensor<T>,
    pub w_v: Tensor<T>,
    pub w_o: Tensor<T>,
    pub head_count: usize,
}

impl<T: Element> AttentionBlockWeights<T> {
    pub fn init(d: usize, head_count: usize, rng: &mut Rng) -> Self {
        assert!(head_count >= 1 && d % head_count == 0, "d must divide into heads");
        let scale = 1.0 / (d as f64).sqrt();
        AttentionBlockWeights {
            w_q: rng.normal_tensor_scaled(&[d, d], scale),
            w_k: rng.normal_tensor_scaled(&[d, d], scale),
            w_v: rng.normal_tensor_scaled(&[d, d], scale),
            w_o: rng.normal_tensor_scaled(&[d, d], scale),
            head_count,
        }
    }

    pub fn d(&self) -> usize {
        self.w_q.shape()[0]
    }
}

impl<T: Element> ParamBundle<T> for AttentionBlockWeights<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        out.push((key(prefix, "w_q"), &self.w_q));
        out.push((key(prefix, "w_k"), &self.w_k));
        out.push((key(prefix, "w_v"), &self.w_v));
        out.push((key(prefix, "w_o"), &self.w_o));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        out.push((key(prefix, "w_q"), &mut self.w_q));
        out.push((key(prefix, "w_k"), &mut self.w_k));
        out.push((key(prefix, "w_v"), &mut self.w_v));
        out.push((key(prefix, "w_o"), &mut self.w_o));
    }
}

/// Forward pass streaming one query row at a time, so memory stays O(T·d)
/// even though time is Θ(T²·d).
pub fn attention_block_forward<T: Element>(
    x: &Tensor<T>,
    w: &AttentionBlockWeights<T>,
) -> Result<Tensor<T>> {
    let (t_len, d) = x.dims2()?;
    if d != w.d() {
        return Err(Error::ShapeMismatch {
            op: "attention_block_forward",
            lhs: x.shape().to_vec(),
            rhs: w.w_q.shape().to_vec(),
        });
    }
    let h = w.head_count;
    let d_h = d / h;
    let scale = T::from_f64(1.0 / (d_h as f64).sqrt());
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    let v = matmul(x, &w.w_v)?;

    let mut ctx = Tensor::zeros(&[t_len, d]);
    let mut scores = vec![T::zero(); t_len];
    for i in 0..t_len {
        for head in 0..h {
            let cols = head * d_h..(head + 1) * d_h;
            let q_i = &q.row(i)[cols.clone()];
            let mut max = T::neg_infinity();
            for (j, sc) in scores.iter_mut().enumerate() {
                let k_j = &k.row(j)[cols.clone()];
                let mut acc = T::zero();
                for (&a, &b) in q_i.iter().zip(k_j) {
                    acc = acc + a * b;
                }
                let s = acc * scale;
                *sc = s;
                if s > max {
                    max = s;
                }
            }
            let mut denom = T::zero();
            for sc in scores.iter_mut() {
                *sc = (*sc - max).exp();
                denom = denom + *sc;
            }
            let ctx_i = &mut ctx.row_mut(i)[cols.clone()];
            for (j, &p) in scores.iter().enumerate() {
                let wgt = p / denom;
                let v_j = &v.row(j)[cols.clone()];
                for (o, &vv) in ctx_i.iter_mut().zip(v_j) {
                    *o = *o + wgt * vv;
                }
            }
        }
    }
    let out = x.add(&matmul(&ctx, &w.w_o)?);
    debug_assert_finite("attention_block_forward", &out);
    Ok(out)
}

#[derive(Debug, Clone)]
pub struct AttentionCache<T> {
    x: Tensor<T>,
    q: Tensor<T>,
    k: Tensor<T>,
    v: Tensor<T>,
    /// per head: [T, T] attention probabilities
    probs: Vec<Tensor<T>>,
    ctx: Tensor<T>,
}

pub fn attention_block_forward_cached<T: Element>(
    x: &Tensor<T>,
    w: &AttentionBlockWeights<T>,
) -> Result<(Tensor<T>, AttentionCache<T>)> {
    let (t_len, d) = x.dims2()?;
    let h = w.head_count;
    let d_h = d / h;
    let scale = T::from_f64(1.0 / (d_h as f64).sqrt());
    let q = matmul(x, &w.w_q)?;
    let k = matmul(x, &w.w_k)?;
    let v = matmul(x, &w.w_v)?;
    let mut probs = Vec::with_capacity(h);
    let mut ctx = Tensor::zeros(&[t_len, d]);
    for head in 0..h {
        let cols = head * d_h..(head + 1) * d_h;
        let mut p = Tensor::zeros(&[t_len, t_len]);
        for i in 0..t_len {
            let q_i = &q.row(i)[cols.clone()];
            let mut max = T::neg_infinity();
            for j in 0..t_len {
                let k_j = &k.row(j)[cols.clone()];
                let mut acc = T::zero();
                for (&a, &b) in q_i.iter().zip(k_j) {
                    acc = acc + a * b;
                }
                let s = acc * scale;
                p.set2(i, j, s);
                if s > max {
                    max = s;
                }
            }
            let mut denom = T::zero();
            for j in 0..t_len {
                let e = (p.get2(i, j) - max).exp();
                p.set2(i, j, e);
                denom = denom + e;
            }
            for j in 0..t_len {
                p.set2(i, j, p.get2(i, j) / denom);
            }
            let ctx_i = &mut ctx.row_mut(i)[cols.clone()];
            for j in 0..t_len {
                let wgt = p.get2(i, j);
                let v_j = &v.row(j)[cols.clone()];
                for (o, &vv) in ctx_i.iter_mut().zip(v_j) {
                    *o = *o + wgt * vv;
                }
            }
        }
        probs.push(p);
    }
    let out = x.add(&matmul(&ctx, &w.w_o)?);
    let cache = AttentionCache { x: x.clone(), q, k, v, probs, ctx };
    Ok((out, cache))
}

pub fn attention_block_backward<T: Element>(
    w: &AttentionBlockWeights<T>,
    cache: &AttentionCache<T>,
    d_out: &Tensor<T>,
) -> Result<(Tensor<T>, AttentionBlockWeights<T>)> {
    let (t_len, d) = cache.x.dims2()?;
    let h = w.head_count;
    let d_h = d / h;
    let scale = T::from_f64(1.0 / (d_h as f64).sqrt());

    let d_ctx = matmul_nt(d_out, &w.w_o)?;
    let dw_o = matmul_tn(&cache.ctx, d_out)?;

    let mut dq = Tensor::zeros(&[t_len, d]);
    let mut dk = Tensor::zeros(&[t_len, d]);
    let mut dv = Tensor::zeros(&[t_len, d]);

    for head in 0..h {
        let cols = head * d_h..(head + 1) * d_h;
        let p = &cache.probs[head];
        for i in 0..t_len {
            let d_ctx_i = &d_ctx.row(i)[cols.clone()];
            // dP[i,j] = d_ctx_i · v_j ; dV_j += P[i,j] * d_ctx_i
            let mut dp = vec![T::zero(); t_len];
            for j in 0..t_len {
                let v_j = &cache.v.row(j)[cols.clone()];
                let mut acc = T::zero();
                for (&a, &b) in d_ctx_i.iter().zip(v_j) {
                    acc = acc + a * b;
                }
                dp[j] = acc;
                let pij = p.get2(i, j);
                let dv_j = &mut dv.row_mut(j)[cols.clone()];
                for (o, &g) in dv_j.iter_mut().zip(d_ctx_i) {
                    *o = *o + pij * g;
                }
            }
            // softmax row backward
            let mut inner = T::zero();
            for j in 0..t_len {
                inner = inner + dp[j] * p.get2(i, j);
            }
            for (j, dpj) in dp.iter_mut().enumerate() {
                *dpj = p.get2(i, j) * (*dpj - inner) * scale;
            }
            // ds[i,j] -> dq_i += ds * k_j ; dk_j += ds * q_i
            let q_i: Vec<T> = cache.q.row(i)[cols.clone()].to_vec();
            let dq_i = &mut dq.row_mut(i)[cols.clone()];
            for (j, &ds) in dp.iter().enumerate() {
                if ds == T::zero() {
                    continue;
                }
                let k_j = &cache.k.row(j)[cols.clone()];
                for (o, &kv) in dq_i.iter_mut().zip(k_j) {
                    *o = *o + ds * kv;
                }
                let dk_j = &mut dk.row_mut(j)[cols.clone()];
                for (o, &qv) in dk_j.iter_mut().zip(&q_i) {
                    *o = *o + ds * qv;
                }
            }
        }
    }

    let dw_q = matmul_tn(&cache.x, &dq)?;
    let dw_k = matmul_tn(&cache.x, &dk)?;
    let dw_v = matmul_tn(&cache.x, &dv)?;
    let dx = d_out
        .add(&matmul_nt(&dq, &w.w_q)?)
        .add(&matmul_nt(&dk, &w.w_k)?)
        .add(&matmul_nt(&dv, &w.w_v)?);
    let grads = AttentionBlockWeights {
        w_q: dw_q,
        w_k: dw_k,
        w_v: dw_v,
        w_o: dw_o,
        head_count: w.head_count,
    };
    Ok((dx, grads))
}

/// Non-overlapping group means along the token axis.
pub fn avg_pool_frame<T: Element>(frame_tokens: &Tensor<T>, factor: usize) -> Result<Tensor<T>> {
    let (n, d) = frame_tokens.dims2()?;
    if factor == 0 || n % factor != 0 {
        return Err(Error::InvalidParameter {
            name: "factor",
            reason: format!("{n} tokens not divisible by pooling factor {factor}"),
        });
    }
    let groups = n / factor;
    let inv = T::from_f64(1.0 / factor as f64);
    let mut out = Tensor::zeros(&[groups, d]);
    for g in 0..groups {
        for i in 0..factor {
            let src = frame_tokens.row(g * factor + i);
            let dst = out.row_mut(g);
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = *o + v;
            }
        }
        for o in out.row_mut(g) {
            *o = *o * inv;
        }
    }
    Ok(out)
}
