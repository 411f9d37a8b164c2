use num_complex::Complex64;
use proptest::prelude::*;

use smrlab_core::coefficients::{ellipticity_margin_2m, sample_operator_path, OperatorSpec};
use smrlab_core::grid::{self, band_limited_random, Field, TorusGrid};
use smrlab_core::noise::{generate_noise, ito_integral};
use smrlab_core::normlab::{mc_lp_omega, scalar_path, weighted_lp_time_norm, SpatialNorm, WeightSpec};
use smrlab_core::tent::{tent_norm, TentField, TentNormParams, DEFAULT_RATIO};
use smrlab_core::transform::Shift;
use smrlab_core::TimeGrid;

fn c(v: f64) -> Complex64 {
    Complex64::new(v, 0.0)
}

fn config(cases: u32) -> ProptestConfig {
    ProptestConfig {
        cases,
        ..ProptestConfig::default()
    }
}

proptest! {
    #![proptest_config(config(48))]

    #[test]
    fn parseval(seed in any::<u64>(), dim in 1usize..=3, comps in 1usize..=2) {
        let n = if dim == 3 { 8 } else { 16 };
        let g = TorusGrid::new(dim, n).unwrap();
        let f = band_limited_random(g, comps, n / 2, seed);
        let l2 = f.l2_norm();
        let e = f.to_spectral().energy().sqrt();
        prop_assert!((l2 - e).abs() <= 1e-10 * l2.max(1e-300));
    }

    #[test]
    fn derivative_commutes_with_round_trip(seed in any::<u64>(), order in 0usize..=3) {
        let g = TorusGrid::new(2, 16).unwrap();
        let f = band_limited_random(g, 1, 4, seed);
        let round = f.to_spectral().to_physical();
        let a = grid::apply_derivative(&f, &[order, 1]).unwrap();
        let b = grid::apply_derivative(&round, &[order, 1]).unwrap();
        prop_assert!((&a - &b).sup_norm() <= 1e-9 * a.sup_norm().max(1.0));
    }

    #[test]
    fn shift_group_law(seed in any::<u64>(), a in -3.0f64..3.0, b in -3.0f64..3.0, e in -2.0f64..2.0) {
        let g = TorusGrid::new(2, 16).unwrap();
        let f = band_limited_random(g, 2, 5, seed);
        let s = Shift::new(2, 2, vec![a, e, b, -e]).unwrap();
        let t = Shift::new(2, 2, vec![b, a, e, 0.5]).unwrap();
        let lhs = s.apply(&t.apply(&f).unwrap()).unwrap();
        let rhs = s.compose(&t).unwrap().apply(&f).unwrap();
        prop_assert!((&lhs - &rhs).sup_norm() <= 1e-10 * f.sup_norm());
        let back = s.inverse().apply(&s.apply(&f).unwrap()).unwrap();
        prop_assert!((&back - &f).sup_norm() <= 1e-10 * f.sup_norm());
        prop_assert!((s.apply(&f).unwrap().l2_norm() - f.l2_norm()).abs() <= 1e-10 * f.l2_norm());
    }

    #[test]
    fn shift_commutes_with_multipliers(seed in any::<u64>(), a in -3.0f64..3.0) {
        let g = TorusGrid::new(1, 32).unwrap();
        let f = band_limited_random(g, 1, 10, seed);
        let s = Shift::new(1, 1, vec![a]).unwrap();
        let lhs = grid::bessel_potential(&s.apply(&f).unwrap(), 2.0);
        let rhs = s.apply(&grid::bessel_potential(&f, 2.0)).unwrap();
        prop_assert!((&lhs - &rhs).sup_norm() <= 1e-10 * lhs.sup_norm());
    }

    #[test]
    fn interpolation_inequality(seed in any::<u64>(), band in 1usize..16) {
        // (1 + k^2)^{1/2} <= eps k^2 + C with eps = 0.1 and C = 2.6 for every k.
        let g = TorusGrid::new(1, 32).unwrap();
        let u = band_limited_random(g, 1, band, seed);
        let lhs = grid::bessel_norm(&u, 1.0, 2.0);
        let rhs = 0.1 * grid::derivative_tensor_norm(&u, 2, 2.0) + 2.6 * u.l2_norm();
        prop_assert!(lhs <= rhs);
    }

    #[test]
    fn bessel_zero_is_lq(seed in any::<u64>(), q in 1.0f64..6.0) {
        let g = TorusGrid::new(1, 32).unwrap();
        let u = band_limited_random(g, 2, 8, seed);
        prop_assert!((grid::bessel_norm(&u, 0.0, q) - u.lq_norm(q)).abs() <= 1e-12 * u.lq_norm(q));
    }
}

proptest! {
    #![proptest_config(config(24))]

    #[test]
    fn margin_is_concave_along_homotopy(a0 in 0.2f64..3.0, a1 in 0.2f64..3.0, b in -0.5f64..0.5, lambda in 0.0f64..1.0) {
        let g = TorusGrid::new(2, 8).unwrap();
        let times = TimeGrid::uniform(1.0, 4).unwrap();
        let noise = generate_noise(1, &times, 0).unwrap();
        let p0 = sample_operator_path(&OperatorSpec::second_order(2, 1, &[a0, b, b, 1.0]).unwrap(), &g, &noise, 0).unwrap();
        let p1 = sample_operator_path(&OperatorSpec::second_order(2, 1, &[1.0, -b, -b, a1]).unwrap(), &g, &noise, 0).unwrap();
        let m0 = ellipticity_margin_2m(&p0, 4096);
        let m1 = ellipticity_margin_2m(&p1, 4096);
        // homotopy(tilde, lambda) = lambda * self + (1 - lambda) * tilde
        let mix = ellipticity_margin_2m(&p1.homotopy(&p0, lambda).unwrap(), 4096);
        prop_assert!(mix >= (1.0 - lambda) * m0 + lambda * m1 - 1e-6);
    }

    #[test]
    fn margin_is_unitarily_invariant(a in 0.5f64..2.0, d in 0.5f64..2.0, off in -0.4f64..0.4, angle in 0.0f64..6.3, phase in 0.0f64..6.3) {
        let g = TorusGrid::new(1, 8).unwrap();
        let times = TimeGrid::uniform(1.0, 2).unwrap();
        let noise = generate_noise(1, &times, 0).unwrap();
        let block = [c(a), Complex64::new(off, 0.3), Complex64::new(off, -0.3), c(d)];
        let (cs, sn) = (angle.cos(), angle.sin());
        let e = Complex64::from_polar(1.0, phase);
        // U = [[cos, -sin e], [sin, cos e]], unitary.
        let u = [c(cs), -e * sn, c(sn), e * cs];
        let mut conj = [Complex64::new(0.0, 0.0); 4];
        for i in 0..2 {
            for j in 0..2 {
                for k in 0..2 {
                    for l in 0..2 {
                        conj[i * 2 + j] += u[k * 2 + i].conj() * block[k * 2 + l] * u[l * 2 + j];
                    }
                }
            }
        }
        let margin = |b: &[Complex64]| {
            let spec = OperatorSpec::from_tensor(1, 1, 2, b.to_vec(), 4.0).unwrap();
            ellipticity_margin_2m(&sample_operator_path(&spec, &g, &noise, 0).unwrap(), 256)
        };
        prop_assert!((margin(&block) - margin(&conj)).abs() <= 1e-9);
    }

    #[test]
    fn weight_monotone_on_unit_interval(vals in proptest::collection::vec(-3.0f64..3.0, 17), a in 0.0f64..2.0, da in 0.0f64..2.0) {
        let times = TimeGrid::uniform(1.0, 16).unwrap();
        let path = scalar_path(times, &vals).unwrap();
        let w0 = WeightSpec::new(2.0, a, 1.0).unwrap();
        let w1 = WeightSpec::new(2.0, a + da, 1.0).unwrap();
        let n0 = weighted_lp_time_norm(&path, &w0, SpatialNorm::lq(2.0));
        let n1 = weighted_lp_time_norm(&path, &w1, SpatialNorm::lq(2.0));
        prop_assert!(n1 <= n0 * (1.0 + 1e-14));
    }

    #[test]
    fn power_mean_monotone(vals in proptest::collection::vec(0.0f64..5.0, 2..40), p in 1.0f64..6.0, dp in 0.0f64..3.0) {
        let lo = mc_lp_omega(&vals, p).unwrap().value;
        let hi = mc_lp_omega(&vals, p + dp).unwrap().value;
        prop_assert!(hi >= lo * (1.0 - 1e-12));
    }
}

fn random_tent(grid: TorusGrid, edges: &TimeGrid, seed: u64) -> TentField {
    let count = edges.steps();
    let slices = (0..count)
        .map(|l| band_limited_random(grid, 1, 4, seed.wrapping_mul(31).wrapping_add(l as u64)))
        .collect();
    TentField::new(edges.clone(), slices).unwrap()
}

proptest! {
    #![proptest_config(config(16))]

    #[test]
    fn tent_norm_is_a_norm(seed in any::<u64>(), p in 1.0f64..4.0, sigma in 0.0f64..2.0, scale in -3.0f64..3.0) {
        let g = TorusGrid::new(1, 32).unwrap();
        let edges = TimeGrid::geometric(0.05, 2.0, DEFAULT_RATIO).unwrap();
        let f = random_tent(g, &edges, seed);
        let h = random_tent(g, &edges, seed ^ 0xFFFF);
        let params = TentNormParams::new(p, sigma, 1.0).unwrap();
        let nf = tent_norm(&f, params);
        let nh = tent_norm(&h, params);
        let sum = tent_norm(&f.sum(&h).unwrap(), params);
        prop_assert!(sum <= (nf + nh) * (1.0 + 1e-10));
        let scaled = tent_norm(&f.scaled(scale), params);
        prop_assert!((scaled - scale.abs() * nf).abs() <= 1e-10 * nf);
    }

    #[test]
    fn tent_norm_decreases_in_sigma(seed in any::<u64>(), p in 1.0f64..4.0, sigma in 0.0f64..2.0, ds in 0.0f64..2.0) {
        let g = TorusGrid::new(1, 32).unwrap();
        let edges = TimeGrid::geometric(1.0, 4.0, DEFAULT_RATIO).unwrap();
        let f = random_tent(g, &edges, seed);
        let lo = tent_norm(&f, TentNormParams::new(p, sigma + ds, 1.0).unwrap());
        let hi = tent_norm(&f, TentNormParams::new(p, sigma, 1.0).unwrap());
        prop_assert!(lo <= hi * (1.0 + 1e-14));
    }
}

#[test]
fn ito_isometry_and_doob_bound() {
    let grid = TorusGrid::new(1, 8).unwrap();
    let times = TimeGrid::uniform(1.0, 32).unwrap();
    let profile = |i: usize| Field::from_fn(grid, 1, |x, _| c((1.0 + i as f64 / 16.0) * x[0].cos()));
    let isometry: f64 = (0..32).map(|i| profile(i).l2_norm().powi(2) / 32.0).sum();
    let samples = 4000u64;
    let (mut sq, mut sup) = (Vec::new(), Vec::new());
    for seed in 0..samples {
        let noise = generate_noise(1, &times, seed).unwrap();
        let value = ito_integral(|_, i, _| profile(i), &noise).unwrap();
        sq.push(value.l2_norm().powi(2));
        // Running maximum of the partial sums.
        let mut acc = Field::zeros(grid, 1);
        let mut best: f64 = 0.0;
        for i in 0..32 {
            acc.axpy(noise.increment(i, 0).into(), &profile(i));
            best = best.max(acc.l2_norm());
        }
        sup.push(best * best);
    }
    let mean = sq.iter().sum::<f64>() / samples as f64;
    let var = sq.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (samples - 1) as f64;
    let se = (var / samples as f64).sqrt();
    assert!((mean - isometry).abs() <= 3.0 * se, "{mean} vs {isometry} (se {se})");
    let sup_mean = sup.iter().sum::<f64>() / samples as f64;
    assert!(sup_mean <= 4.0 * isometry, "{sup_mean} > 4 * {isometry}");
}
