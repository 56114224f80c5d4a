//! Naive reference implementations used as oracles. Everything here re-runs
//! the underlying recurrences step by step on plain `Vec<f64>` rows, with no
//! caching and its own numerics (`exp_m1` instead of the series-switched
//! production kernel), independent of the library code paths it checks.

#![allow(dead_code)]

use sstc_core::aggregate::AggregatorWeights;
use sstc_core::blocks::{BiMambaBlockWeights, MambaBlockWeights};
use sstc_core::ssm::SelectiveSsmParams;
use sstc_core::tensor::Tensor;

pub fn rows_of(t: &Tensor<f64>) -> Vec<Vec<f64>> {
    let (r, c) = (t.shape()[0], t.shape()[1]);
    (0..r).map(|i| t.data()[i * c..(i + 1) * c].to_vec()).collect()
}

pub fn softplus(x: f64) -> f64 {
    if x > 20.0 {
        x
    } else {
        (1.0 + x.exp()).ln()
    }
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

pub fn silu(x: f64) -> f64 {
    x * sigmoid(x)
}

/// y = x @ w (+ b), rows as vectors.
pub fn naive_matmul(x: &[Vec<f64>], w: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let p = w[0].len();
    x.iter()
        .map(|row| {
            let mut out = vec![0.0; p];
            for (t, &xv) in row.iter().enumerate() {
                for (o, &wv) in out.iter_mut().zip(&w[t]) {
                    *o += xv * wv;
                }
            }
            out
        })
        .collect()
}

/// One scan step at a time, given per-step (delta, B, C) streams.
/// `a` is the diagonal transition matrix, [d_inner][d_state].
pub fn naive_scan_streams(
    x: &[Vec<f64>],
    a: &[Vec<f64>],
    steps: &[(f64, Vec<f64>, Vec<f64>)],
) -> Vec<Vec<f64>> {
    let d_inner = a.len();
    let d_state = a[0].len();
    let mut h = vec![vec![0.0; d_state]; d_inner];
    let mut ys = Vec::with_capacity(x.len());
    for (x_k, (delta, b_k, c_k)) in x.iter().zip(steps) {
        let mut y_k = vec![0.0; d_inner];
        for c in 0..d_inner {
            for s in 0..d_state {
                let z = delta * a[c][s];
                let a_bar = z.exp();
                // exp_m1 keeps (e^z - 1)/z well conditioned without branches
                let b_bar = delta * b_k[s] * (z.exp_m1() / z);
                h[c][s] = a_bar * h[c][s] + b_bar * x_k[c];
                y_k[c] += c_k[s] * h[c][s];
            }
        }
        ys.push(y_k);
    }
    ys
}

/// Full selective oracle: derives the per-step streams from the input, then
/// unrolls the recurrence.
pub fn naive_selective_scan(x: &[Vec<f64>], params: &SelectiveSsmParams<f64>) -> Vec<Vec<f64>> {
    let d_inner = params.d_inner();
    let d_state = params.d_state();
    let a: Vec<Vec<f64>> = (0..d_inner)
        .map(|c| (0..d_state).map(|s| -params.a_log.get2(c, s).exp()).collect())
        .collect();
    let steps: Vec<(f64, Vec<f64>, Vec<f64>)> = x
        .iter()
        .map(|x_k| {
            let raw: f64 = x_k
                .iter()
                .zip(params.w_delta.data())
                .map(|(&xv, &wv)| xv * wv)
                .sum::<f64>()
                + params.b_delta.item();
            let delta = softplus(raw);
            let mut b_k = vec![0.0; d_state];
            let mut c_k = vec![0.0; d_state];
            for s in 0..d_state {
                for (c, &xv) in x_k.iter().enumerate() {
                    b_k[s] += xv * params.w_b.get2(c, s);
                    c_k[s] += xv * params.w_c.get2(c, s);
                }
            }
            (delta, b_k, c_k)
        })
        .collect();
    naive_scan_streams(x, &a, &steps)
}

pub fn naive_causal_conv(u: &[Vec<f64>], kernel: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let w_conv = kernel[0].len();
    let t_len = u.len();
    let d_inner = u[0].len();
    let mut out = vec![vec![0.0; d_inner]; t_len];
    for t in 0..t_len {
        for c in 0..d_inner {
            for j in 0..w_conv {
                let src = t as isize - (w_conv as isize - 1) + j as isize;
                if src >= 0 {
                    out[t][c] += kernel[c][j] * u[src as usize][c];
                }
            }
        }
    }
    out
}

/// The block body without the residual, composed from the naive pieces.
pub fn naive_mamba_core(x: &[Vec<f64>], w: &MambaBlockWeights<f64>) -> Vec<Vec<f64>> {
    let d_inner = w.d_inner();
    let u = naive_matmul(x, &rows_of(&w.w_in));
    let u_ssm: Vec<Vec<f64>> = u.iter().map(|r| r[..d_inner].to_vec()).collect();
    let z: Vec<Vec<f64>> = u.iter().map(|r| r[d_inner..].to_vec()).collect();
    let v = naive_causal_conv(&u_ssm, &rows_of(&w.conv_kernel));
    let s: Vec<Vec<f64>> = v.iter().map(|r| r.iter().map(|&x| silu(x)).collect()).collect();
    let y = naive_selective_scan(&s, &w.ssm);
    let gated: Vec<Vec<f64>> = y
        .iter()
        .zip(&z)
        .map(|(yr, zr)| yr.iter().zip(zr).map(|(&a, &b)| a * silu(b)).collect())
        .collect();
    naive_matmul(&gated, &rows_of(&w.w_out))
}

pub fn naive_bimamba(x: &[Vec<f64>], w: &BiMambaBlockWeights<f64>) -> Vec<Vec<f64>> {
    let y_f = naive_mamba_core(x, &w.fwd);
    let rev: Vec<Vec<f64>> = x.iter().rev().cloned().collect();
    let mut y_b = naive_mamba_core(&rev, &w.bwd);
    y_b.reverse();
    let cat: Vec<Vec<f64>> = y_f
        .iter()
        .zip(&y_b)
        .map(|(f, b)| f.iter().chain(b).copied().collect())
        .collect();
    let merged = naive_matmul(&cat, &rows_of(&w.w_merge));
    x.iter()
        .zip(&merged)
        .map(|(xr, mr)| xr.iter().zip(mr).map(|(&a, &b)| a + b).collect())
        .collect()
}

/// Gated aggregation over explicit chunk boundaries, one chunk at a time.
pub fn naive_aggregate(
    tokens: &mut [Vec<f64>],
    is_query: &[bool],
    w: &AggregatorWeights<f64>,
) {
    let mut run_start = 0usize;
    for idx in 0..tokens.len() {
        if !is_query[idx] {
            continue;
        }
        let patch_len = idx - run_start;
        assert!(patch_len >= 1, "oracle assumes well formed chunks");
        let q = tokens[idx].clone();
        let mut logits = Vec::with_capacity(patch_len);
        for i in 0..patch_len {
            let mut acc = w.b_alpha.data()[i];
            for (j, &qv) in q.iter().enumerate() {
                acc += qv * w.w_alpha.get2(j, i);
            }
            logits.push(acc);
        }
        let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
        let sum: f64 = exps.iter().sum();
        let alpha: Vec<f64> = exps.into_iter().map(|e| e / sum).collect();

        let d = q.len();
        let mut a = vec![0.0; d];
        for (i, &al) in alpha.iter().enumerate() {
            for (acc, &v) in a.iter_mut().zip(&tokens[run_start + i]) {
                *acc += al * v;
            }
        }
        let g_raw = sigmoid(
            q.iter().zip(w.w_g.data()).map(|(&a, &b)| a * b).sum::<f64>() + w.b_g.item(),
        );
        let g = g_raw.clamp(w.epsilon, 1.0 - w.epsilon);
        for (slot, (&qv, &av)) in tokens[idx].iter_mut().zip(q.iter().zip(&a)) {
            *slot = (1.0 - g) * qv + g * av;
        }
        run_start = idx + 1;
    }
}

pub fn max_abs_diff(a: &[Vec<f64>], b: &[Vec<f64>]) -> f64 {
    a.iter()
        .zip(b)
        .flat_map(|(x, y)| x.iter().zip(y).map(|(&p, &q)| (p - q).abs()))
        .fold(0.0, f64::max)
}
