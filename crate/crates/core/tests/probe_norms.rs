use sstc_core::params::ParamBundle;
use sstc_core::pipeline::MambaMiaConfig;
use sstc_core::rng::Rng;
use sstc_core::tensor::Tensor;
use sstc_core::train::*;

#[test]
fn norms() {
    let mut cfg = MambaMiaConfig::with_defaults(8);
    cfg.d_state = 4; cfg.expand = 2; cfg.w_conv = 2; cfg.layers = 1; cfg.k = 2; cfg.n_patches = 4;
    cfg.s = sstc_core::pipeline::Rational::new(1,2).unwrap();
    let spec = NeedleTaskSpec { m:2, n:4, d:8, codebook_size:3, noise_std:0.1, seed:55 };
    let sample = &gen_needle_dataset::<f64>(&spec, 1)[0];
    for adjust in [false, true] {
        let mut rng = Rng::new(200);
        let mut model = NeedleModel::<f64>::init(&cfg, 3, &mut rng);
        if adjust {
            let target: f64 = 0.5; let b = (target.exp() - 1.0).ln();
            for l in &mut model.compressor.layers {
                l.bimamba.fwd.ssm.b_delta = Tensor::scalar(b);
                l.bimamba.bwd.ssm.b_delta = Tensor::scalar(b);
            }
        }
        let (_, _, g) = needle_loss_and_grads(&model, &cfg, sample).unwrap();
        println!("=== adjust={adjust}");
        for (name, t) in g.params() {
            let norm = t.data().iter().map(|v| v*v).sum::<f64>().sqrt();
            let maxc = t.max_abs();
            if name.contains("a_log") || name.contains("delta") || name.contains("conv") || name.contains("w_b") || name.contains("w_c") {
                println!("{name:<26} norm {norm:.3e} max {maxc:.3e}");
            }
        }
    }
}
