#![allow(dead_code)]

use std::f64::consts::PI;

use cwf_inversion::domain::MediumModel;
use cwf_inversion::forward::{incident_field, LippmannSchwinger, SolverOptions};
use cwf_inversion::lift::{log_ratio, project_fourier, LiftedField};
use cwf_inversion::{BasisSet, Cplx, Grid3};

/// Gaussian elimination with partial pivoting on a dense complex system.
pub fn dense_solve(mut a: Vec<Vec<Cplx<f64>>>, mut b: Vec<Cplx<f64>>) -> Vec<Cplx<f64>> {
    let n = b.len();
    for col in 0..n {
        let piv = (col..n).max_by(|&i, &j| a[i][col].norm().total_cmp(&a[j][col].norm())).unwrap();
        a.swap(col, piv);
        b.swap(col, piv);
        for row in col + 1..n {
            let f = a[row][col] / a[col][col];
            if f.norm() == 0.0 {
                continue;
            }
            for c in col..n {
                let t = a[col][c];
                a[row][c] -= f * t;
            }
            let t = b[col];
            b[row] -= f * t;
        }
    }
    let mut x = vec![Cplx::new(0.0, 0.0); n];
    for row in (0..n).rev() {
        let mut acc = b[row];
        for c in row + 1..n {
            acc -= a[row][c] * x[c];
        }
        x[row] = acc / a[row][row];
    }
    x
}

pub fn rel_l2(a: &[Cplx<f64>], b: &[Cplx<f64>]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).norm_sqr()).sum();
    let den: f64 = b.iter().map(|y| y.norm_sqr()).sum();
    (num / den).sqrt()
}

/// Cube grid with `n` nodes per axis and spacing `h`, centered on the origin.
pub fn cube_grid(n: usize, h: f64) -> Grid3 {
    let half = 0.5 * h * (n - 1) as f64;
    Grid3 { r: half, b: half, z_h: n - 1, h, nz: n }
}

/// `log(u / u_i)` of the true total field on every node, per source,
/// projected on the basis. Phases are unwrapped per z layer and then aligned
/// with the layer below.
pub fn exact_lift(
    medium: &MediumModel<f64>,
    k: f64,
    d: f64,
    alphas: &[f64],
    basis: &BasisSet,
    opts: &SolverOptions,
) -> LiftedField<f64> {
    let g = medium.grid;
    let ls = LippmannSchwinger::new(medium, k, &Default::default()).unwrap();
    let lat = g.nx() * g.ny();
    let mut per_alpha = Vec::new();
    for &a in alphas {
        let xa = [a, 0.0, -d];
        let sol = ls.solve(xa, opts).unwrap();
        let u = ls.total_on_grid(&sol).unwrap().values;
        let mut v = vec![Cplx::new(0.0, 0.0); g.len()];
        let mut below: Option<Vec<Cplx<f64>>> = None;
        for s in 0..g.nz {
            let us: Vec<_> = (0..lat).map(|j| u[j * g.nz + s]).collect();
            let ui: Vec<_> = (0..lat)
                .map(|j| {
                    let (p, q, _) = g.unidx(j * g.nz);
                    incident_field(g.point(p, q, s), xa, k).unwrap()
                })
                .collect();
            let mut layer = log_ratio(&us, &ui, g.nx(), g.ny(), 1e-14).unwrap().values;
            if let Some(prev) = &below {
                for (l, p) in layer.iter_mut().zip(prev) {
                    l.im += 2.0 * PI * ((p.im - l.im) / (2.0 * PI)).round();
                }
            }
            for j in 0..lat {
                v[j * g.nz + s] = layer[j];
            }
            below = Some(layer);
        }
        per_alpha.push(v);
    }
    let coeffs = project_fourier(&per_alpha, alphas, basis).unwrap();
    let mut out = LiftedField::zeros(basis.n(), g);
    for (n, c) in coeffs.iter().enumerate() {
        for (i, z) in c.iter().enumerate() {
            out.set(n, i, *z);
        }
    }
    out
}

/// Determinant by partial-pivot elimination.
pub fn det(mut a: Vec<Vec<f64>>) -> f64 {
    let n = a.len();
    let mut d = 1.0;
    for c in 0..n {
        let p = (c..n).max_by(|&i, &j| a[i][c].abs().total_cmp(&a[j][c].abs())).unwrap();
        if p != c {
            a.swap(p, c);
            d = -d;
        }
        d *= a[c][c];
        for r in c + 1..n {
            let f = a[r][c] / a[c][c];
            for k in c..n {
                a[r][k] -= f * a[c][k];
            }
        }
    }
    d
}
