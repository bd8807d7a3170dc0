use cwf_inversion::convexification::{carleman_sums, CarlemanWeight, Convexifier, DescentOptions, StopReason};
use cwf_inversion::lift::LiftedField;
use cwf_inversion::{BasisSet, Grid3};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const K: f64 = 8.51;
const D: f64 = 9.0;

fn grid() -> Grid3 {
    Grid3 { r: 0.8, b: 0.8, z_h: 8, h: 0.2, nz: 9 }
}

fn random_field(n: usize, g: Grid3, rng: &mut ChaCha8Rng, amp: f64) -> LiftedField<f64> {
    let mut f = LiftedField::zeros(n, g);
    f.data.iter_mut().for_each(|v| *v = amp * rng.gen_range(-1.0..1.0));
    f
}

fn convexifier(n: usize, g: Grid3, lambda: f64, reference: &LiftedField<f64>) -> Convexifier<f64> {
    let basis = BasisSet::build(0.1, 0.6, n, 32).unwrap();
    let w = CarlemanWeight::new(&g, lambda, 1.25 * g.b).unwrap();
    Convexifier::new(&basis, K, D, w, reference).unwrap()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Violations of `J(V + r) - J(V) - J'(V) r >= 0` over random pairs.
fn convexity_violations(lambda: f64, pairs: usize) -> usize {
    let g = grid();
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let reference = random_field(2, g, &mut rng, 0.3);
    let cv = convexifier(2, g, lambda, &reference);
    let mut bad = 0;
    for _ in 0..pairs {
        let mut v = random_field(2, g, &mut rng, 0.3);
        cv.enforce(&mut v);
        let mut r: Vec<f64> = (0..v.data.len()).map(|_| rng.gen_range(-0.05..0.05)).collect();
        cv.admissible_direction(&mut r);
        let e = cv.cost_and_gradient(&v).unwrap();
        let mut w = v.clone();
        w.data.iter_mut().zip(&r).for_each(|(x, d)| *x += d);
        let gap = cv.cost(&w).unwrap() - e.j - dot(&e.grad, &r);
        if gap < -1e-12 * e.j.abs().max(1e-300) {
            bad += 1;
        }
    }
    bad
}

#[test]
fn convexity_gap_scan() {
    let counts: Vec<(f64, usize)> = [1.0, 5.0, 20.0, 50.0].iter().map(|&l| (l, convexity_violations(l, 50))).collect();
    println!("violations per lambda: {counts:?}");
    assert_eq!(counts.last().unwrap().1, 0);
    assert!(counts.windows(2).all(|w| w[1].1 <= w[0].1));
}

#[test]
fn carleman_estimate_smoke() {
    let g = grid();
    let lambda = 50.0;
    let w = CarlemanWeight::new(&g, lambda, 1.25 * g.b).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let mut best = f64::INFINITY;
    for _ in 0..50 {
        let mut u: Vec<f64> = (0..g.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // zero Cauchy traces at z = -b
        for p in 0..g.nx() {
            for q in 0..g.ny() {
                u[g.idx(p, q, 0)] = 0.0;
                u[g.idx(p, q, 1)] = 0.0;
            }
        }
        let (lhs, t2, t1, t0) = carleman_sums(&u, &g, &w);
        let c = lhs / (t2 + lambda * t1 + lambda.powi(3) * t0);
        assert!(c.is_finite() && c > 0.0);
        best = best.min(c);
    }
    println!("largest admissible Carleman constant over 50 fields: {best:.3e}");
    assert!(best > 0.0);
}

#[test]
fn weight_scale_leaves_iterates_unchanged() {
    let g = grid();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let reference = random_field(2, g, &mut rng, 0.3);
    let cv = convexifier(2, g, 1.1, &reference);
    let raw: Vec<f64> = cv.weight().values.iter().map(|v| v * cv.weight().log_scale.exp()).collect();
    let opts = DescentOptions { max_iter: 25, ..DescentOptions::default() };
    let base = cv.minimize(&reference, &opts).unwrap();
    for scale in [1e-3, 7.0, 1e6] {
        let table: Vec<f64> = raw.iter().map(|v| v * scale).collect();
        let w = CarlemanWeight::from_table(1.1, 1.25 * g.b, &table).unwrap();
        let scaled = cv.clone().with_weight(w).unwrap().minimize(&reference, &opts).unwrap();
        assert_eq!(scaled.log.len(), base.log.len());
        for (a, b) in scaled.log.iter().zip(&base.log) {
            assert_eq!(a.gamma, b.gamma);
            assert_eq!(a.accepted, b.accepted);
            assert!((a.j - b.j).abs() <= 1e-12 * b.j.abs());
        }
        let diff = scaled.field.data.iter().zip(&base.field.data).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
        assert!(diff <= 1e-12, "iterates differ by {diff}");
    }
}

/// Free unknowns: interior columns on layers `s >= 2`.
fn free_dofs(g: &Grid3, n: usize) -> Vec<usize> {
    let len = g.len();
    let mut out = Vec::new();
    for c in 0..2 * n {
        for p in 1..g.nx() - 1 {
            for q in 1..g.ny() - 1 {
                for s in 2..g.nz {
                    out.push(c * len + g.idx(p, q, s));
                }
            }
        }
    }
    out
}

fn solve_dense(mut a: Vec<Vec<f64>>, mut b: Vec<f64>) -> Vec<f64> {
    let n = b.len();
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        a.swap(c, p);
        b.swap(c, p);
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
            b[r] -= f * b[c];
        }
    }
    let mut x = vec![0.0; n];
    for r in (0..n).rev() {
        x[r] = (b[r] - (r + 1..n).map(|k| a[r][k] * x[k]).sum::<f64>()) / a[r][r];
    }
    x
}

#[test]
fn linear_part_matches_dense_normal_equations() {
    let g = Grid3 { r: 0.4, b: 0.4, z_h: 4, h: 0.2, nz: 5 };
    let n = 1;
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let reference = random_field(n, g, &mut rng, 0.5);
    let cv = convexifier(n, g, 1.1, &reference).without_nonlinearity();
    let dofs = free_dofs(&g, n);
    let mut base = LiftedField::zeros(n, g);
    cv.enforce(&mut base);
    let residual = |v: &LiftedField<f64>| -> Vec<f64> {
        cv.residuals(v).unwrap().iter().flat_map(|z| [z.re, z.im]).collect()
    };
    let weights: Vec<f64> = cv.residual_weights().iter().flat_map(|w| [*w, *w]).collect();
    let r0 = residual(&base);
    let cols: Vec<Vec<f64>> = dofs
        .iter()
        .map(|&d| {
            let mut v = base.clone();
            v.data[d] += 1.0;
            cv.enforce(&mut v);
            residual(&v).iter().zip(&r0).map(|(a, b)| a - b).collect()
        })
        .collect();
    let m = dofs.len();
    let mut normal = vec![vec![0.0; m]; m];
    let mut rhs = vec![0.0; m];
    for i in 0..m {
        for j in 0..m {
            normal[i][j] = (0..r0.len()).map(|k| weights[k] * cols[i][k] * cols[j][k]).sum();
        }
        rhs[i] = -(0..r0.len()).map(|k| weights[k] * cols[i][k] * r0[k]).sum::<f64>();
    }
    let x = solve_dense(normal, rhs);
    let mut best = base.clone();
    for (&d, xi) in dofs.iter().zip(&x) {
        best.data[d] += xi;
    }
    cv.enforce(&mut best);
    let at_best = cv.cost_and_gradient(&best).unwrap();
    let at_start = cv.cost_and_gradient(&base).unwrap();
    let gnorm = |e: &[f64]| e.iter().map(|v| v * v).sum::<f64>().sqrt();
    assert!(gnorm(&at_best.grad) <= 1e-8 * gnorm(&at_start.grad), "gradient at the dense minimizer");
    let opts = DescentOptions { max_iter: 20000, ..DescentOptions::default() };
    let res = cv.minimize(&base, &opts).unwrap();
    assert!(res.j_final >= at_best.j * (1.0 - 1e-9));
    assert!(res.j_final - at_best.j <= 1e-6 * (at_start.j - at_best.j), "{} vs {}", res.j_final, at_best.j);
}

proptest! {
    #![proptest_config(ProptestConfig { cases: 12, failure_persistence: None, ..ProptestConfig::default() })]

    #[test]
    fn gradient_matches_central_differences(seed in 0u64..1000, lambda in 0.0..3.0f64, n in 1usize..4) {
        let g = Grid3 { r: 0.6, b: 0.6, z_h: 6, h: 0.2, nz: 7 };
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = random_field(n, g, &mut rng, 0.3);
        let cv = convexifier(n, g, lambda, &reference);
        let mut v = random_field(n, g, &mut rng, 0.4);
        cv.enforce(&mut v);
        let mut r: Vec<f64> = (0..v.data.len()).map(|_| rng.gen_range(-1.0..1.0)).collect();
        cv.admissible_direction(&mut r);
        let e = cv.cost_and_gradient(&v).unwrap();
        let analytic = dot(&e.grad, &r);
        let eps = 1e-6;
        let at = |s: f64| {
            let mut w = v.clone();
            w.data.iter_mut().zip(&r).for_each(|(x, d)| *x += s * eps * d);
            cv.cost(&w).unwrap()
        };
        let fd = (at(1.0) - at(-1.0)) / (2.0 * eps);
        prop_assert!((analytic - fd).abs() <= 1e-6 * analytic.abs(), "{} vs {}", analytic, fd);
    }

    #[test]
    fn descent_never_increases_j(seed in 0u64..1000, gamma1 in 0.01..0.5f64) {
        let g = grid();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let reference = random_field(2, g, &mut rng, 0.3);
        let cv = convexifier(2, g, 1.1, &reference);
        let opts = DescentOptions { gamma1, max_iter: 40, ..DescentOptions::default() };
        let res = cv.minimize(&reference, &opts).unwrap();
        prop_assert!(res.j_final <= res.j_initial);
        let mut gamma = gamma1;
        let mut last = res.j_initial;
        for rec in &res.log {
            prop_assert_eq!(rec.gamma, gamma);
            if rec.accepted {
                prop_assert!(rec.j <= last);
                last = rec.j;
            } else {
                gamma *= 0.5;
            }
        }
        if res.stop == StopReason::MaxIterations {
            prop_assert_eq!(res.log.len(), 40);
        }
    }
}
