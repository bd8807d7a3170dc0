mod common;

use common::rel_l2;
use cwf_inversion::domain::MediumModel;
use cwf_inversion::forward::{synthesize_sweep, LippmannSchwinger, SolverOptions};
use cwf_inversion::preprocess::{
    max_magnitude, preprocess_sweep, smooth_and_retrieve, truncate_field, PreprocessOptions,
};
use cwf_inversion::{make_grid, Cplx, DomainBox, MeasurementPlane, PhysicalConstants, SourceLine};
use proptest::prelude::*;

#[test]
fn propagated_derivative_matches_direct_synthesis() {
    // The recorded aperture must cover the angles that reach Gamma; it is
    // four times wider than Gamma here and compared on Gamma only.
    let dom = DomainBox::with_default_theta(5.0, 2.0).unwrap();
    let grid = make_grid(&dom, 50, 0.05).unwrap();
    let medium = MediumModel::with_box_inclusion(grid, [0.0; 3], [1.0; 3], 1.5, 0.0).unwrap();
    let ls = LippmannSchwinger::new(&medium, 8.51, &PhysicalConstants::default()).unwrap();
    let sources = SourceLine::new(9.0, 0.1, 0.6, 0.1).unwrap();
    let far = MeasurementPlane::new(-8.0, 20.0, 200).unwrap();
    let near = MeasurementPlane::new(-2.0, 20.0, 200).unwrap();
    let opts = SolverOptions::default();
    let measured = synthesize_sweep(&ls, &sources, &far, &opts).unwrap();
    let direct = synthesize_sweep(&ls, &sources, &near, &opts).unwrap();
    let pre = PreprocessOptions { kappa1: 0.0, smooth: false, ..PreprocessOptions::default() };
    let out = preprocess_sweep(&measured.scattered, -2.0, &pre).unwrap();
    let n = near.n();
    let on_gamma: Vec<usize> =
        (0..n * n).filter(|&i| near.coord(i / n).abs() < 5.0 && near.coord(i % n).abs() < 5.0).collect();
    let pick = |v: &[Cplx<f64>]| on_gamma.iter().map(|&i| v[i]).collect::<Vec<_>>();
    let f1 = out.propagated.f1.as_ref().unwrap();
    let want = direct.scattered.f1.as_ref().unwrap();
    for l in 0..f1.len() {
        let e1 = rel_l2(&pick(&f1[l]), &pick(&want[l]));
        assert!(e1 <= 0.05, "source {l}: F1 error {e1}");
    }
}

fn grid_strategy() -> impl Strategy<Value = (usize, Vec<(f64, f64)>)> {
    (4usize..12).prop_flat_map(|n| (Just(n), prop::collection::vec((-1.0..1.0f64, -1.0..1.0f64), n * n)))
}

fn to_cplx(v: &[(f64, f64)]) -> Vec<Cplx<f64>> {
    v.iter().map(|&(a, b)| Cplx::new(a, b)).collect()
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 64, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn truncation_is_idempotent((_n, v) in grid_strategy(), kappa in 0.0..1.0f64) {
        let f = to_cplx(&v);
        let once = truncate_field(&f, kappa).unwrap();
        let twice = truncate_field(&once, kappa).unwrap();
        prop_assert_eq!(once, twice);
    }

    #[test]
    fn larger_fraction_keeps_fewer_samples((_n, v) in grid_strategy(), a in 0.0..1.0f64, b in 0.0..1.0f64) {
        let f = to_cplx(&v);
        let (lo, hi) = if a < b { (a, b) } else { (b, a) };
        let kept = |k: f64| truncate_field(&f, k).unwrap().iter().map(|z| z.norm() > 0.0).collect::<Vec<_>>();
        let (klo, khi) = (kept(lo), kept(hi));
        prop_assert!(khi.iter().zip(&klo).all(|(h, l)| !*h || *l));
    }

    #[test]
    fn smoothing_stays_within_blur_radius(
        n in 8usize..16,
        peak in (0usize..16, 0usize..16),
        sparse in prop::collection::vec((0usize..16, 0usize..16, -0.1..0.1f64), 0..6),
    ) {
        // one dominant peak plus a few weak samples
        let mut f = vec![Cplx::new(0.0, 0.0); n * n];
        let (pi, pj) = (peak.0 % n, peak.1 % n);
        for &(i, j, a) in &sparse {
            f[(i % n) * n + j % n] = Cplx::new(a, -a);
        }
        f[pi * n + pj] = Cplx::new(1.0, 0.5);
        let sm = smooth_and_retrieve(&f, n, n).unwrap();
        prop_assert!((max_magnitude(&sm) - max_magnitude(&f)).abs() <= 1e-12);
        let near_support = |i: usize, j: usize| {
            (0..n).any(|a| (0..n).any(|b| f[a * n + b].norm() > 0.0 && a.abs_diff(i) <= 2 && b.abs_diff(j) <= 2))
        };
        for i in 0..n {
            for j in 0..n {
                if sm[i * n + j].norm() > 0.0 {
                    prop_assert!(near_support(i, j));
                }
            }
        }
        let arg = (0..n * n).max_by(|&a, &b| sm[a].norm().total_cmp(&sm[b].norm())).unwrap();
        prop_assert!((arg / n).abs_diff(pi) <= 2 && (arg % n).abs_diff(pj) <= 2);
    }
}
