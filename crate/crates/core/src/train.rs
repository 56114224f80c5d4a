//! Desk-scale optimization and verification: Adam with a warmup + cosine
//! schedule, a central finite-difference gradient oracle, and a synthetic
//! needle-retrieval task that exercises every gradient in the stack.
//!
//! The needle task: a video of Gaussian background patches with exactly one
//! (frame, patch) slot overwritten by a codebook vector. The model compresses
//! the video, mean-pools the retained query tokens, and a linear head must
//! recover which codebook entry was planted.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::num::Element;
use crate::params::ParamBundle;
use crate::pipeline::{
    compress_backward, mambamia_compress, mambamia_compress_cached, sample_indices,
    CompressorWeights, MambaMiaConfig,
};
use crate::rng::Rng;
use crate::tensor::Tensor;

/// Adam hyperparameters. Defaults are the usual toy-scale choices.
#[derive(Debug, Clone, Copy)]
pub struct AdamParams {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        AdamParams { lr: 1e-3, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Linear warmup over 3% of the run, then cosine decay to zero.
#[derive(Debug, Clone, Copy)]
pub struct LrSchedule {
    pub total_steps: usize,
}

pub const WARMUP_FRACTION: f64 = 0.03;

impl LrSchedule {
    /// Multiplier at 1-based step `t`. Reaches 1.0 at the end of warmup and
    /// ~0 at the final step.
    pub fn multiplier(&self, t: usize) -> f64 {
        let total = self.total_steps.max(1);
        let warmup = ((total as f64 * WARMUP_FRACTION).round() as usize).max(1);
        if t <= warmup {
            t as f64 / warmup as f64
        } else if t >= total {
            0.0
        } else {
            let progress = (t - warmup) as f64 / (total - warmup) as f64;
            0.5 * (1.0 + (std::f64::consts::PI * progress).cos())
        }
    }
}

/// Per-parameter first and second moments, aligned with the bundle's
/// canonical parameter order.
#[derive(Debug, Clone)]
pub struct AdamState<T> {
    names: Vec<String>,
    m: Vec<Tensor<T>>,
    v: Vec<Tensor<T>>,
    pub t: usize,
    pub hyper: AdamParams,
    pub schedule: Option<LrSchedule>,
}

impl<T: Element> AdamState<T> {
    pub fn new<B: ParamBundle<T>>(
        bundle: &B,
        hyper: AdamParams,
        schedule: Option<LrSchedule>,
    ) -> Self {
        let mut names = Vec::new();
        let mut m = Vec::new();
        let mut v = Vec::new();
        for (name, t) in bundle.params() {
            names.push(name);
            m.push(Tensor::zeros(t.shape()));
            v.push(Tensor::zeros(t.shape()));
        }
        AdamState { names, m, v, t: 0, hyper, schedule }
    }
}

/// One Adam update with bias correction. `grads` must be a bundle of the
/// same type (hence same names, order, shapes) as `params`.
pub fn adam_step<T: Element, B: ParamBundle<T>>(
    params: &mut B,
    grads: &B,
    state: &mut AdamState<T>,
) -> Result<()> {
    state.t += 1;
    let t = state.t;
    let h = state.hyper;
    let lr = h.lr * state.schedule.map_or(1.0, |s| s.multiplier(t));
    let bc1 = 1.0 - h.beta1.powi(t as i32);
    let bc2 = 1.0 - h.beta2.powi(t as i32);

    let grad_list = grads.params();
    let mut param_list = params.params_mut();
    if grad_list.len() != param_list.len() {
        return Err(Error::InvalidParameter {
            name: "grads",
            reason: format!(
                "{} gradient tensors for {} parameters",
                grad_list.len(),
                param_list.len()
            ),
        });
    }

    let b1 = T::from_f64(h.beta1);
    let b2 = T::from_f64(h.beta2);
    let one = T::one();
    let eps = T::from_f64(h.eps);
    let lr_t = T::from_f64(lr / bc1);
    let inv_bc2 = T::from_f64(1.0 / bc2);

    for (i, ((g_name, g), (p_name, p))) in
        grad_list.iter().zip(param_list.iter_mut()).enumerate()
    {
        if g_name != p_name || g.shape() != p.shape() || state.names[i] != *p_name {
            return Err(Error::ShapeMismatch {
                op: "adam_step",
                lhs: p.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        let m = state.m[i].data_mut();
        let v = state.v[i].data_mut();
        for (((pv, &gv), mv), vv) in
            p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut())
        {
            *mv = b1 * *mv + (one - b1) * gv;
            *vv = b2 * *vv + (one - b2) * gv * gv;
            let v_hat = *vv * inv_bc2;
            *pv = *pv - lr_t * *mv / (v_hat.sqrt() + eps);
        }
    }
    Ok(())
}

/// Synthetic retrieval task parameters.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct NeedleTaskSpec {
    pub m: usize,
    pub n: usize,
    pub d: usize,
    pub codebook_size: usize,
    pub noise_std: f64,
    pub seed: u64,
}

#[derive(Debug, Clone)]
pub struct NeedleSample<T> {
    /// [M, N, d]
    pub video: Tensor<T>,
    pub label: usize,
}

/// The class codebook: one standard-normal row per class, drawn once from
/// the task seed.
pub fn needle_codebook<T: Element>(spec: &NeedleTaskSpec) -> Tensor<T> {
    let mut rng = Rng::new(spec.seed);
    rng.normal_tensor(&[spec.codebook_size, spec.d])
}

/// Generates `count` samples. Each sample has Gaussian background patches
/// and one uniformly random (frame, patch) slot replaced by the codebook row
/// of its label. Per-sample streams are split off the task seed, so the
/// dataset is fully determined by `spec`.
pub fn gen_needle_dataset<T: Element>(spec: &NeedleTaskSpec, count: usize) -> Vec<NeedleSample<T>> {
    assert!(spec.codebook_size >= 2, "need at least two classes");
    let codebook = needle_codebook::<T>(spec);
    let mut base = Rng::new(spec.seed);
    // Keep sample streams independent of the codebook draw.
    let mut sampler = base.split();
    (0..count)
        .map(|_| {
            let mut rng = sampler.split();
            let mut video =
                rng.normal_tensor_scaled::<T>(&[spec.m, spec.n, spec.d], spec.noise_std);
            let label = rng.usize_below(spec.codebook_size);
            let frame = rng.usize_below(spec.m);
            let patch = rng.usize_below(spec.n);
            let at = (frame * spec.n + patch) * spec.d;
            video.data_mut()[at..at + spec.d]
                .copy_from_slice(&codebook.data()[label * spec.d..(label + 1) * spec.d]);
            NeedleSample { video, label }
        })
        .collect()
}

/// Compressor plus a linear classification head over mean-pooled retained
/// query tokens.
#[derive(Debug, Clone, PartialEq)]
pub struct NeedleModel<T> {
    pub compressor: CompressorWeights<T>,
    /// [d, classes]
    pub head_w: Tensor<T>,
    /// [classes]
    pub head_b: Tensor<T>,
}

impl<T: Element> NeedleModel<T> {
    pub fn init(cfg: &MambaMiaConfig, classes: usize, rng: &mut Rng) -> Self {
        NeedleModel {
            compressor: CompressorWeights::init(cfg, rng),
            head_w: rng.normal_tensor_scaled(&[cfg.d, classes], 1.0 / (cfg.d as f64).sqrt()),
            head_b: Tensor::zeros(&[classes]),
        }
    }
}

impl<T: Element> ParamBundle<T> for NeedleModel<T> {
    fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<T>)>) {
        self.compressor.collect(prefix, out);
        out.push((crate::params::key(prefix, "head.w"), &self.head_w));
        out.push((crate::params::key(prefix, "head.b"), &self.head_b));
    }

    fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor<T>)>) {
        self.compressor.collect_mut(prefix, out);
        out.push((crate::params::key(prefix, "head.w"), &mut self.head_w));
        out.push((crate::params::key(prefix, "head.b"), &mut self.head_b));
    }
}

fn pooled_logits<T: Element>(
    model: &NeedleModel<T>,
    retained: &Tensor<T>,
) -> (Vec<f64>, Vec<f64>) {
    let rows = retained.shape()[0] * retained.shape()[1];
    let d = retained.shape()[2];
    let classes = model.head_b.len();
    let mut pooled = vec![0.0f64; d];
    for r in 0..rows {
        for (j, p) in pooled.iter_mut().enumerate() {
            *p += retained.data()[r * d + j].as_f64();
        }
    }
    for p in &mut pooled {
        *p /= rows as f64;
    }
    let mut logits = vec![0.0f64; classes];
    for (c, l) in logits.iter_mut().enumerate() {
        let mut acc = model.head_b.data()[c].as_f64();
        for (j, &p) in pooled.iter().enumerate() {
            acc += p * model.head_w.get2(j, c).as_f64();
        }
        *l = acc;
    }
    (pooled, logits)
}

fn softmax_ce(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&l| (l - max).exp()).collect();
    let sum: f64 = exps.iter().sum();
    let loss = -(exps[label] / sum).ln();
    let probs = exps.into_iter().map(|e| e / sum).collect();
    (loss, probs)
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in xs.iter().enumerate() {
        if v > xs[best] {
            best = i;
        }
    }
    best
}

/// Cross-entropy of one sample, forward only.
pub fn needle_loss<T: Element>(
    model: &NeedleModel<T>,
    cfg: &MambaMiaConfig,
    sample: &NeedleSample<T>,
) -> Result<f64> {
    let compressed = mambamia_compress(&sample.video, &model.compressor, cfg)?;
    let retained = crate::pipeline::secondary_sample(&compressed, cfg.s)?;
    let (_, logits) = pooled_logits(model, &retained);
    Ok(softmax_ce(&logits, sample.label).0)
}

/// Predicted class of one sample.
pub fn needle_predict<T: Element>(
    model: &NeedleModel<T>,
    cfg: &MambaMiaConfig,
    video: &Tensor<T>,
) -> Result<usize> {
    let compressed = mambamia_compress(video, &model.compressor, cfg)?;
    let retained = crate::pipeline::secondary_sample(&compressed, cfg.s)?;
    let (_, logits) = pooled_logits(model, &retained);
    Ok(argmax(&logits))
}

/// Loss, prediction, and gradients for one sample.
pub fn needle_loss_and_grads<T: Element>(
    model: &NeedleModel<T>,
    cfg: &MambaMiaConfig,
    sample: &NeedleSample<T>,
) -> Result<(f64, usize, NeedleModel<T>)> {
    let (compressed, cache) = mambamia_compress_cached(&sample.video, &model.compressor, cfg)?;
    let (m, q_per_frame, d) = compressed.dims3()?;
    let kept = sample_indices(m, cfg.s);
    let frame_len = q_per_frame * d;
    let mut retained = Tensor::zeros(&[kept.len(), q_per_frame, d]);
    for (dst, &src) in kept.iter().enumerate() {
        retained.data_mut()[dst * frame_len..(dst + 1) * frame_len]
            .copy_from_slice(&compressed.data()[src * frame_len..(src + 1) * frame_len]);
    }

    let (pooled, logits) = pooled_logits(model, &retained);
    let (loss, probs) = softmax_ce(&logits, sample.label);
    let predicted = argmax(&logits);
    let classes = probs.len();

    // d loss / d logits = p - onehot
    let mut d_logits = probs;
    d_logits[sample.label] -= 1.0;

    let mut d_head_w = Tensor::zeros(&[d, classes]);
    let mut d_head_b = Tensor::zeros(&[classes]);
    for c in 0..classes {
        d_head_b.data_mut()[c] = T::from_f64(d_logits[c]);
        for j in 0..d {
            d_head_w.set2(j, c, T::from_f64(pooled[j] * d_logits[c]));
        }
    }
    let mut d_pooled = vec![0.0f64; d];
    for (j, dp) in d_pooled.iter_mut().enumerate() {
        for c in 0..classes {
            *dp += model.head_w.get2(j, c).as_f64() * d_logits[c];
        }
    }

    // Mean pool spreads the gradient uniformly over the retained rows;
    // dropped frames get exactly zero.
    let rows = kept.len() * q_per_frame;
    let mut d_queries = Tensor::zeros(&[m, q_per_frame, d]);
    for &src in &kept {
        for qi in 0..q_per_frame {
            let at = (src * q_per_frame + qi) * d;
            for j in 0..d {
                let cur = d_queries.data()[at + j];
                d_queries.data_mut()[at + j] =
                    cur + T::from_f64(d_pooled[j] / rows as f64);
            }
        }
    }

    let (_, d_compressor) = compress_backward(&model.compressor, &cache, &d_queries)?;
    let grads = NeedleModel { compressor: d_compressor, head_w: d_head_w, head_b: d_head_b };
    Ok((loss, predicted, grads))
}

fn scale_bundle<T: Element, B: ParamBundle<T>>(bundle: &mut B, factor: f64) {
    let f = T::from_f64(factor);
    for (_, t) in bundle.params_mut() {
        for v in t.data_mut() {
            *v = *v * f;
        }
    }
}

fn accumulate_bundle<T: Element, B: ParamBundle<T>>(into: &mut B, from: &B) {
    let mut dst = into.params_mut();
    let src = from.params();
    for ((_, d), (_, s)) in dst.iter_mut().zip(src) {
        d.add_assign(s);
    }
}

/// Knobs of the training run that are not part of the task itself.
#[derive(Debug, Clone, Copy, Serialize)]
pub struct TrainOptions {
    pub steps: usize,
    pub batch_size: usize,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub lr: f64,
}

impl Default for TrainOptions {
    fn default() -> Self {
        TrainOptions { steps: 2000, batch_size: 8, train_samples: 512, eval_samples: 256, lr: 1e-3 }
    }
}

/// Config echo embedded in the training report, mirroring the JSON config
/// schema.
#[derive(Debug, Clone, Serialize)]
pub struct ConfigEcho {
    pub d: usize,
    pub d_state: usize,
    pub expand: usize,
    pub w_conv: usize,
    pub layers: usize,
    pub k: usize,
    pub s: String,
    pub n_patches: usize,
    pub m_max: usize,
}

impl ConfigEcho {
    pub fn from_config(cfg: &MambaMiaConfig) -> Self {
        ConfigEcho {
            d: cfg.d,
            d_state: cfg.d_state,
            expand: cfg.expand,
            w_conv: cfg.w_conv,
            layers: cfg.layers,
            k: cfg.k,
            s: cfg.s.to_string(),
            n_patches: cfg.n_patches,
            m_max: cfg.m_max,
        }
    }
}

#[derive(Debug, Clone, Serialize)]
pub struct TrainReport {
    pub seed: u64,
    pub steps: usize,
    pub losses: Vec<f64>,
    pub final_accuracy: f64,
    pub config: ConfigEcho,
    pub task: NeedleTaskSpec,
    pub options: TrainOptions,
}

/// Trains the compressor and head on the needle task, returning the held-out
/// accuracy. Deterministic per (cfg, spec, opts, seed). A non-finite loss
/// aborts with the last step that was still finite.
pub fn train_needle_probe<T: Element>(
    cfg: &MambaMiaConfig,
    spec: &NeedleTaskSpec,
    opts: &TrainOptions,
    seed: u64,
) -> Result<TrainReport> {
    cfg.validate()?;
    let mut rng = Rng::new(seed);
    let mut model = NeedleModel::<T>::init(cfg, spec.codebook_size, &mut rng);
    let data = gen_needle_dataset::<T>(spec, opts.train_samples + opts.eval_samples);
    let (train, eval) = data.split_at(opts.train_samples);

    let hyper = AdamParams { lr: opts.lr, ..AdamParams::default() };
    let schedule = (opts.steps > 0).then_some(LrSchedule { total_steps: opts.steps });
    let mut adam = AdamState::new(&model, hyper, schedule);

    let mut losses = Vec::with_capacity(opts.steps);
    let mut cursor = 0usize;
    for step in 0..opts.steps {
        let mut batch_grads: Option<NeedleModel<T>> = None;
        let mut batch_loss = 0.0;
        for _ in 0..opts.batch_size {
            let sample = &train[cursor % train.len()];
            cursor += 1;
            let (loss, _, grads) = needle_loss_and_grads(&model, cfg, sample)?;
            batch_loss += loss;
            match &mut batch_grads {
                None => batch_grads = Some(grads),
                Some(acc) => accumulate_bundle(acc, &grads),
            }
        }
        let mut grads = batch_grads.expect("batch_size >= 1");
        scale_bundle(&mut grads, 1.0 / opts.batch_size as f64);
        batch_loss /= opts.batch_size as f64;

        if !batch_loss.is_finite() {
            let last_good_step = step;
            let last_loss = losses.last().copied().unwrap_or(f64::NAN);
            return Err(Error::Diverged { last_good_step, last_loss });
        }
        losses.push(batch_loss);
        adam_step(&mut model, &grads, &mut adam)?;
    }

    let mut correct = 0usize;
    for sample in eval {
        if needle_predict(&model, cfg, &sample.video)? == sample.label {
            correct += 1;
        }
    }
    let final_accuracy = correct as f64 / eval.len().max(1) as f64;
    Ok(TrainReport {
        seed,
        steps: opts.steps,
        losses,
        final_accuracy,
        config: ConfigEcho::from_config(cfg),
        task: *spec,
        options: *opts,
    })
}

/// Per-group outcome of a finite-difference check.
#[derive(Debug, Clone, Serialize)]
pub struct GradcheckGroup {
    pub name: String,
    pub max_rel_err: f64,
    pub coords_checked: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradcheckReport {
    pub groups: Vec<GradcheckGroup>,
    /// true when the bundle was small enough to check coordinate by
    /// coordinate; false when random probe directions were used
    pub exhaustive: bool,
}

impl GradcheckReport {
    pub fn max_rel_err(&self) -> f64 {
        self.groups.iter().map(|g| g.max_rel_err).fold(0.0, f64::max)
    }

    pub fn passed(&self, tol: f64) -> bool {
        self.groups.iter().all(|g| g.max_rel_err <= tol)
    }

    pub fn worst_group(&self) -> Option<&GradcheckGroup> {
        self.groups
            .iter()
            .max_by(|a, b| a.max_rel_err.total_cmp(&b.max_rel_err))
    }
}

impl std::fmt::Display for GradcheckReport {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        for g in &self.groups {
            writeln!(
                f,
                "{:<28} max_rel_err {:.3e}  ({} coords)",
                g.name, g.max_rel_err, g.coords_checked
            )?;
        }
        Ok(())
    }
}

/// Above this coordinate count the check switches from exhaustive
/// per-coordinate differences to random probe directions per group.
pub const GRADCHECK_EXHAUSTIVE_LIMIT: usize = 1_000;
pub const GRADCHECK_PROBES_PER_GROUP: usize = 8;

fn rel_err(an: f64, fd: f64) -> f64 {
    (an - fd).abs() / an.abs().max(fd.abs()).max(1e-8)
}

/// Central finite differences against an analytic gradient, at 64-bit
/// precision. `f` is the scalar loss; `analytic` is its gradient at `theta`
/// (a bundle of the same type). Reports the max relative error per parameter
/// group.
pub fn finite_diff_gradcheck<B>(
    f: &mut dyn FnMut(&B) -> Result<f64>,
    theta: &B,
    analytic: &B,
    eps: f64,
    rng: &mut Rng,
) -> Result<GradcheckReport>
where
    B: ParamBundle<f64> + Clone,
{
    let total: usize = theta.param_count();
    let exhaustive = total <= GRADCHECK_EXHAUSTIVE_LIMIT;
    let group_count = theta.params().len();
    let mut groups = Vec::with_capacity(group_count);

    for gi in 0..group_count {
        let (name, group_len) = {
            let ps = theta.params();
            (ps[gi].0.clone(), ps[gi].1.len())
        };
        let grad: Vec<f64> = analytic.params()[gi].1.data().to_vec();
        let mut max_err = 0.0f64;
        let mut checked = 0usize;

        if exhaustive {
            for ci in 0..group_len {
                let fd = {
                    let mut plus = theta.clone();
                    plus.params_mut()[gi].1.data_mut()[ci] += eps;
                    let fp = eval(f, &plus, &name)?;
                    let mut minus = theta.clone();
                    minus.params_mut()[gi].1.data_mut()[ci] -= eps;
                    let fm = eval(f, &minus, &name)?;
                    (fp - fm) / (2.0 * eps)
                };
                max_err = max_err.max(rel_err(grad[ci], fd));
                checked += 1;
            }
        } else {
            for _ in 0..GRADCHECK_PROBES_PER_GROUP {
                let dir = rng.normal_vec(group_len);
                let norm = dir.iter().map(|v| v * v).sum::<f64>().sqrt().max(1e-12);
                let dir: Vec<f64> = dir.into_iter().map(|v| v / norm).collect();
                let mut plus = theta.clone();
                let mut minus = theta.clone();
                {
                    let mut plus_params = plus.params_mut();
                    let mut minus_params = minus.params_mut();
                    let p = plus_params[gi].1.data_mut();
                    let m = minus_params[gi].1.data_mut();
                    for ((pv, mv), &dv) in p.iter_mut().zip(m.iter_mut()).zip(&dir) {
                        *pv += eps * dv;
                        *mv -= eps * dv;
                    }
                }
                let fd = (eval(f, &plus, &name)? - eval(f, &minus, &name)?) / (2.0 * eps);
                let an: f64 = grad.iter().zip(&dir).map(|(&g, &d)| g * d).sum();
                max_err = max_err.max(rel_err(an, fd));
                checked += 1;
            }
        }
        groups.push(GradcheckGroup { name, max_rel_err: max_err, coords_checked: checked });
    }
    Ok(GradcheckReport { groups, exhaustive })
}

fn eval<B>(f: &mut dyn FnMut(&B) -> Result<f64>, at: &B, group: &str) -> Result<f64> {
    let v = f(at)?;
    if !v.is_finite() {
        return Err(Error::NonFiniteLoss { group: group.to_string() });
    }
    Ok(v)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn schedule_endpoints() {
        let s = LrSchedule { total_steps: 1000 };
        // warmup = 30 steps
        assert!((s.multiplier(30) - 1.0).abs() < 1e-12);
        assert!(s.multiplier(1) < 0.05);
        assert!(s.multiplier(1000) < 1e-12);
        assert!(s.multiplier(500) > 0.2 && s.multiplier(500) < 0.9);
    }

    #[test]
    fn schedule_short_runs_have_full_first_step() {
        let s = LrSchedule { total_steps: 10 };
        assert!((s.multiplier(1) - 1.0).abs() < 1e-12);
    }

    /// Minimal one-tensor bundle for optimizer tests.
    #[derive(Clone)]
    struct Single(Tensor<f64>);

    impl ParamBundle<f64> for Single {
        fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor<f64>)>) {
            out.push((crate::params::key(prefix, "w"), &self.0));
        }
        fn collect_mut<'a>(
            &'a mut self,
            prefix: &str,
            out: &mut Vec<(String, &'a mut Tensor<f64>)>,
        ) {
            out.push((crate::params::key(prefix, "w"), &mut self.0));
        }
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut p = Single(Tensor::from_vec(vec![1.0, -2.0]));
        let g = Single(Tensor::zeros(&[2]));
        let mut st = AdamState::new(&p, AdamParams::default(), None);
        adam_step(&mut p, &g, &mut st).unwrap();
        assert_eq!(p.0.data(), &[1.0, -2.0]);
        assert_eq!(st.t, 1);
    }

    #[test]
    fn adam_first_step_magnitude() {
        let mut p = Single(Tensor::from_vec(vec![0.0]));
        let g = Single(Tensor::from_vec(vec![1.0]));
        let hyper = AdamParams { lr: 0.1, ..AdamParams::default() };
        let mut st = AdamState::new(&p, hyper, None);
        adam_step(&mut p, &g, &mut st).unwrap();
        let update = -p.0.data()[0];
        assert!((update - 0.1 / (1.0 + 1e-8)).abs() < 1e-9, "update {update}");
    }

    #[test]
    fn adam_rejects_shape_mismatch() {
        let mut p = Single(Tensor::from_vec(vec![0.0, 0.0]));
        let g = Single(Tensor::from_vec(vec![1.0]));
        let mut st = AdamState::new(&p, AdamParams::default(), None);
        assert!(adam_step(&mut p, &g, &mut st).is_err());
    }

    #[test]
    fn gradcheck_quadratic_is_tight() {
        let theta = Single(Tensor::from_vec(vec![0.3, -1.7, 2.2]));
        let analytic = Single(theta.0.scale(2.0));
        let mut f = |b: &Single| Ok(b.0.data().iter().map(|v| v * v).sum());
        let mut rng = Rng::new(1);
        let report = finite_diff_gradcheck(&mut f, &theta, &analytic, 1e-5, &mut rng).unwrap();
        assert!(report.exhaustive);
        assert!(report.max_rel_err() < 1e-9, "{}", report.max_rel_err());
    }

    #[test]
    fn gradcheck_eps_sweep_is_v_shaped() {
        // Truncation error dominates at large eps, roundoff at tiny eps.
        let mut rng = Rng::new(3);
        let theta = Single(rng.normal_tensor(&[24]));
        let analytic = Single(theta.0.map(|v| v.exp()));
        let mut errs = Vec::new();
        for &eps in &[1e-4, 1e-5, 1e-6] {
            let mut f = |b: &Single| Ok(b.0.data().iter().map(|v| v.exp()).sum());
            let r = finite_diff_gradcheck(&mut f, &theta, &analytic, eps, &mut rng).unwrap();
            errs.push(r.max_rel_err());
        }
        assert!(errs[1] < errs[0], "mid eps should beat coarse: {errs:?}");
        assert!(errs[1] < errs[2], "mid eps should beat fine: {errs:?}");
    }

    #[test]
    fn gradcheck_flags_non_finite_loss() {
        let theta = Single(Tensor::from_vec(vec![1.0]));
        let analytic = Single(Tensor::from_vec(vec![0.0]));
        let mut f = |_: &Single| Ok(f64::NAN);
        let mut rng = Rng::new(4);
        let err = finite_diff_gradcheck(&mut f, &theta, &analytic, 1e-5, &mut rng).unwrap_err();
        assert!(matches!(err, Error::NonFiniteLoss { .. }));
    }

    fn tiny_spec() -> NeedleTaskSpec {
        NeedleTaskSpec { m: 2, n: 3, d: 4, codebook_size: 8, noise_std: 0.1, seed: 99 }
    }

    #[test]
    fn noiseless_needle_has_one_nonzero_patch() {
        let spec = NeedleTaskSpec { noise_std: 0.0, ..tiny_spec() };
        let codebook = needle_codebook::<f64>(&spec);
        for sample in gen_needle_dataset::<f64>(&spec, 20) {
            let mut nonzero_patches = Vec::new();
            for p in 0..spec.m * spec.n {
                let row = &sample.video.data()[p * spec.d..(p + 1) * spec.d];
                if row.iter().any(|&v| v != 0.0) {
                    nonzero_patches.push(p);
                }
            }
            assert_eq!(nonzero_patches.len(), 1);
            let row =
                &sample.video.data()[nonzero_patches[0] * spec.d..(nonzero_patches[0] + 1) * spec.d];
            let want = &codebook.data()[sample.label * spec.d..(sample.label + 1) * spec.d];
            assert_eq!(row, want);
        }
    }

    #[test]
    fn dataset_is_deterministic() {
        let spec = tiny_spec();
        let a = gen_needle_dataset::<f32>(&spec, 10);
        let b = gen_needle_dataset::<f32>(&spec, 10);
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.label, y.label);
            assert_eq!(x.video, y.video);
        }
    }

    #[test]
    fn label_histogram_is_uniform() {
        let spec = NeedleTaskSpec { m: 1, n: 1, d: 2, codebook_size: 8, noise_std: 0.0, seed: 5 };
        let n = 10_000;
        let mut counts = [0usize; 8];
        for s in gen_needle_dataset::<f32>(&spec, n) {
            counts[s.label] += 1;
        }
        let p = 1.0 / 8.0;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        for &c in &counts {
            let dev = (c as f64 - n as f64 * p).abs();
            assert!(dev <= 3.0 * sigma, "count {c} deviates {dev:.1} > 3 sigma");
        }
    }
}
