mod common;

use common::random_params;
use lpx_core::analytics::{average_ranks, boundary_distance_deg, spearman};
use lpx_core::attack::{canonical_probs, IncrementalNet};
use lpx_core::linegen::{label_of_mdeg, rasterize_line};
use lpx_core::{BitGrid, ManifoldPoint};
use proptest::prelude::*;

fn dims() -> impl Strategy<Value = usize> {
    prop_oneof![Just(16usize), Just(32), Just(48), Just(64), Just(80)]
}

fn point(dim: usize) -> impl Strategy<Value = ManifoldPoint> {
    (12..=(dim as u32 - 2), 0u32..360).prop_map(|(l, k)| ManifoldPoint::from_mdeg(l, k * 500))
}

fn dim_and_point() -> impl Strategy<Value = (usize, ManifoldPoint)> {
    dims().prop_flat_map(|d| (Just(d), point(d)))
}

fn mirror_cols(g: &BitGrid) -> BitGrid {
    let d = g.dim();
    let mut out = BitGrid::new(d);
    for (r, c) in g.ones() {
        out.set(r, d - 1 - c, true);
    }
    out
}

fn transpose(g: &BitGrid) -> BitGrid {
    let mut out = BitGrid::new(g.dim());
    for (r, c) in g.ones() {
        out.set(c, r, true);
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn raster_is_point_symmetric((dim, p) in dim_and_point()) {
        let g = rasterize_line(p, dim).unwrap();
        prop_assert!(g.count_ones() > 0);
        for (r, c) in g.ones() {
            prop_assert!(g.get(dim - 1 - r, dim - 1 - c));
        }
    }

    #[test]
    fn supplementary_angle_mirrors_columns((dim, p) in dim_and_point()) {
        prop_assume!(p.angle_mdeg > 0);
        let g = rasterize_line(p, dim).unwrap();
        let q = ManifoldPoint::from_mdeg(p.length_px, 180_000 - p.angle_mdeg);
        prop_assert_eq!(rasterize_line(q, dim).unwrap(), mirror_cols(&g));
    }

    #[test]
    fn complementary_angle_transposes((dim, p) in dim_and_point()) {
        prop_assume!(p.angle_mdeg <= 90_000);
        let g = rasterize_line(p, dim).unwrap();
        let q = ManifoldPoint::from_mdeg(p.length_px, 90_000 - p.angle_mdeg);
        prop_assert_eq!(rasterize_line(q, dim).unwrap(), transpose(&g));
    }

    #[test]
    fn longer_line_contains_shorter((dim, p) in dim_and_point()) {
        prop_assume!(p.length_px < dim as u32 - 2);
        let short = rasterize_line(p, dim).unwrap();
        let long = rasterize_line(ManifoldPoint::from_mdeg(p.length_px + 1, p.angle_mdeg), dim).unwrap();
        for (r, c) in short.ones() {
            prop_assert!(long.get(r, c));
        }
    }

    #[test]
    fn label_and_boundary_distance_agree(k in 0u32..360) {
        let a = k * 500;
        let d = boundary_distance_deg(a);
        prop_assert!((0.0..=70.0).contains(&d));
        // crossing into the other class needs at least d degrees
        if d > 0.0 {
            let step = (d * 1000.0) as u32 - 1;
            let lo = (a + 180_000 - step) % 180_000;
            let hi = (a + step) % 180_000;
            prop_assert_eq!(label_of_mdeg(lo), label_of_mdeg(a));
            prop_assert_eq!(label_of_mdeg(hi), label_of_mdeg(a));
        }
    }

    #[test]
    fn grid_flip_and_hamming(bits in proptest::collection::vec(any::<bool>(), 256), r in 0usize..16, c in 0usize..16) {
        let mut g = BitGrid::new(16);
        for (k, &b) in bits.iter().enumerate() {
            g.set(k / 16, k % 16, b);
        }
        let mut h = g.clone();
        h.flip(r, c);
        prop_assert_eq!(g.hamming(&h), 1);
        prop_assert_eq!(h.hamming(&g), 1);
        h.flip(r, c);
        prop_assert_eq!(&h, &g);
        let back = BitGrid::from_packed(16, g.as_packed().to_vec()).unwrap();
        prop_assert_eq!(back, g);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn incremental_flip_equals_full_forward(
        seed in 0u64..1000,
        dim in prop_oneof![Just(16usize), Just(32)],
        density in 0.0f64..0.3,
        pix in any::<(u16, u16)>(),
    ) {
        let params = random_params(dim, seed);
        let net = IncrementalNet::new(&params).unwrap();
        let mut g = BitGrid::new(dim);
        let mut s = seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) | 1;
        for r in 0..dim {
            for c in 0..dim {
                s ^= s << 13;
                s ^= s >> 7;
                s ^= s << 17;
                g.set(r, c, (s % 1000) as f64 / 1000.0 < density);
            }
        }
        let (r, c) = (pix.0 as usize % dim, pix.1 as usize % dim);
        let src = net.source(&g).unwrap();
        let fast = net.flip_probs(&src, r, c).unwrap();
        g.flip(r, c);
        let full = canonical_probs(&params, &g).unwrap();
        prop_assert!((fast[0] - full[0]).abs() < 1e-5 && (fast[1] - full[1]).abs() < 1e-5, "{:?} vs {:?}", fast, full);
    }
}

proptest! {
    #[test]
    fn ranks_sum_and_spearman_bounds(xs in proptest::collection::vec(-5i32..5, 2..30), ys_seed in any::<u64>()) {
        let x: Vec<f64> = xs.iter().map(|&v| f64::from(v)).collect();
        let n = x.len() as f64;
        let ranks = average_ranks(&x);
        prop_assert!((ranks.iter().sum::<f64>() - n * (n + 1.0) / 2.0).abs() < 1e-9);
        let y: Vec<f64> = (0..x.len()).map(|i| ((ys_seed >> (i % 60)) & 7) as f64).collect();
        let rho = spearman(&x, &y);
        prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&rho));
        prop_assert!((rho - spearman(&y, &x)).abs() < 1e-12);
    }

    #[test]
    fn spearman_is_rank_invariant(xs in proptest::collection::vec(-1e3f64..1e3, 3..30)) {
        let distinct = xs.iter().any(|&v| v != xs[0]);
        prop_assume!(distinct);
        let y: Vec<f64> = xs.iter().map(|v| v * 8.0).collect();
        prop_assert!((spearman(&xs, &y) - 1.0).abs() < 1e-12);
        let z: Vec<f64> = xs.iter().map(|v| -v * 0.5).collect();
        prop_assert!((spearman(&xs, &z) + 1.0).abs() < 1e-12);
    }
}
