mod common;

use common::random_params;
use common::reference::reference_forward;
use lpx_core::cnn::{
    backward, forward, forward_batch, gradcheck_params, gradient_check, Mode, ModelParams, PARAM_NAMES,
};
use lpx_core::linegen::{generate_dataset, rasterize_line};
use lpx_core::{BitGrid, ManifoldPoint};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random_image(dim: usize, rng: &mut ChaCha8Rng) -> BitGrid {
    let mut g = BitGrid::new(dim);
    for r in 0..dim {
        for c in 0..dim {
            if rng.gen_bool(0.2) {
                g.set(r, c, true);
            }
        }
    }
    g
}

#[test]
fn forward_matches_scalar_reference() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for dim in [16usize, 32] {
        let p = random_params(dim, 5);
        for k in 0..10 {
            let img = if k % 2 == 0 {
                random_image(dim, &mut rng)
            } else {
                rasterize_line(ManifoldPoint::from_mdeg(12 + k % 3, 7_000 * k), dim).unwrap()
            };
            let (probs, _) = forward::<f32>(&p, &img, Mode::Eval, 0.25, 0).unwrap();
            let want = reference_forward(&p, &img);
            for u in 0..2 {
                assert!(
                    (f64::from(probs[u]) - want[u]).abs() < 1e-6,
                    "dim {dim} case {k}: {probs:?} vs {want:?}"
                );
            }
        }
    }
}

#[test]
fn gradients_match_finite_differences() {
    let ds = generate_dataset(16, 2.0).unwrap();
    let images: Vec<&BitGrid> = [3usize, 40, 77, 120].iter().map(|&i| &ds.images[i].bits).collect();
    let labels: Vec<u8> = [3usize, 40, 77, 120].iter().map(|&i| ds.images[i].label).collect();
    let p: ModelParams<f64> = random_params(16, 21).cast();
    // 1e-5 keeps roundoff near 1e-11; kink crossings are re-stepped
    let report = gradient_check(&p, &images, &labels, 0.25, 99, 200, 1e-5, 3).unwrap();
    for t in &report.tensors {
        eprintln!("{:8} n={:3} rel={:.3e} abs={:.3e}", t.name, t.sampled, t.max_rel_err, t.max_abs_err);
    }
    assert!(report.max_rel_err() < 1e-5, "{report:?}");
}

#[test]
fn gradient_check_survives_kink_crossings() {
    // these parameters put a block of conv2 units within 1e-5 of a switch
    let ds = generate_dataset(16, 2.0).unwrap();
    let picks: Vec<usize> = (0..4).map(|k| (2 * k + 1) * ds.len() / 8).collect();
    let images: Vec<&BitGrid> = picks.iter().map(|&i| &ds.images[i].bits).collect();
    let labels: Vec<u8> = picks.iter().map(|&i| ds.images[i].label).collect();
    for seed in [1, 4] {
        let p = gradcheck_params(16, seed).unwrap();
        let report = gradient_check(&p, &images, &labels, 0.25, seed, 200, 1e-5, seed).unwrap();
        let bias = report.tensors.iter().find(|t| t.name == "conv2_b").unwrap();
        assert!(bias.reduced_step + bias.replaced > 0, "{bias:?}");
        assert_eq!(bias.sampled + bias.replaced, 32);
        assert!(report.max_rel_err() < 1e-5, "seed {seed}: {report:?}");
    }
}

#[test]
fn zero_input_gives_zero_conv1_weight_gradient() {
    let mut p: ModelParams<f64> = random_params(16, 2).cast();
    p.conv1_b.data.iter_mut().for_each(|b| *b = 0.0);
    let img = BitGrid::new(16);
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let cache = forward_batch(&p, &[&img], Mode::Train, 0.25, Some(&mut rng)).unwrap();
    let g = backward(&p, &cache, &[1]).unwrap();
    assert!(g.conv1_w.data.iter().all(|&v| v == 0.0));
}

#[test]
fn duplicated_batch_gradient_is_linear() {
    // the loss is a batch mean, so summing the same sample twice doubles it
    let p: ModelParams<f64> = random_params(16, 8).cast();
    let img = rasterize_line(ManifoldPoint::from_mdeg(13, 36_000), 16).unwrap();
    let run = |imgs: &[&BitGrid], labels: &[u8]| {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let cache = forward_batch(&p, imgs, Mode::Train, 0.0, Some(&mut rng)).unwrap();
        backward(&p, &cache, labels).unwrap()
    };
    let single = run(&[&img], &[1]);
    let double = run(&[&img, &img], &[1, 1]);
    for (ti, name) in PARAM_NAMES.iter().enumerate() {
        for (a, b) in single.tensors()[ti].data.iter().zip(&double.tensors()[ti].data) {
            // mean over two identical samples equals the single-sample value
            assert!((a - b).abs() <= 1e-12 * a.abs().max(1.0), "{name}");
            assert!((2.0 * a - (b + b)).abs() <= 1e-12 * a.abs().max(1.0));
        }
    }
}

#[test]
fn stale_cache_rejected() {
    let mut p: ModelParams<f64> = random_params(16, 8).cast();
    let img = BitGrid::new(16);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let cache = forward_batch(&p, &[&img], Mode::Train, 0.25, Some(&mut rng)).unwrap();
    p.out_b.data[0] += 1.0;
    assert!(backward(&p, &cache, &[0]).is_err());
    let eval = forward_batch(&p, &[&img], Mode::Eval, 0.25, None).unwrap();
    assert!(backward(&p, &eval, &[0]).is_err());
}
