//! Lippmann-Schwinger forward solver used to manufacture sweep data.
//!
//! Midpoint collocation on the grid nodes carrying contrast: for every support
//! node `x_i`
//!
//! ```text
//! u_i - sum_j K_ij q_j u_j = u_inc(x_i),   q = k^2 (c - 1) - i k eta0 0.1 sigma
//! K_ij = h^3 G(x_i, x_j)   (i != j),   K_ii = int_{ball} G
//! ```
//!
//! where the self term integrates `exp(ikr) / (4 pi r)` over the ball of volume
//! `h^3`. The system is solved by a relaxed Born iteration, falling back to
//! restarted GMRES when the series stalls or diverges.

use rayon::prelude::*;

use crate::domain::{Grid3, MediumModel, MeasurementPlane, PhysicalConstants, SourceLine};
use crate::error::{Error, Result};
use crate::scalar::{cplx, czero, Cplx, Real};
use crate::sweep::{PlaneGeometry, SourceSweepData, Stage};

/// `exp(ik|x - x_a|) / (4 pi |x - x_a|)`.
pub fn incident_field<T: Real>(x: [T; 3], x_alpha: [T; 3], k: T) -> Result<Cplx<T>> {
    let r = dist(x, x_alpha);
    if r == T::zero() {
        return Err(Error::Singular);
    }
    Ok(green(r, k))
}

/// `d/dz` of the incident field.
pub fn incident_field_dz<T: Real>(x: [T; 3], x_alpha: [T; 3], k: T) -> Result<Cplx<T>> {
    let r = dist(x, x_alpha);
    if r == T::zero() {
        return Err(Error::Singular);
    }
    Ok(green_dz(r, x[2] - x_alpha[2], k))
}

#[inline]
pub(crate) fn dist<T: Real>(a: [T; 3], b: [T; 3]) -> T {
    let (dx, dy, dz) = (a[0] - b[0], a[1] - b[1], a[2] - b[2]);
    (dx * dx + dy * dy + dz * dz).sqrt()
}

#[inline]
fn green<T: Real>(r: T, k: T) -> Cplx<T> {
    let four_pi_r = T::lit(4.0) * T::PI() * r;
    let (s, c) = (k * r).sin_cos();
    cplx(c / four_pi_r, s / four_pi_r)
}

/// `d/dz G` with `dz = z - z'`.
#[inline]
fn green_dz<T: Real>(r: T, dz: T, k: T) -> Cplx<T> {
    green(r, k) * cplx(-T::one() / r, k) * (dz / r)
}

/// Integral of `exp(ikr) / (4 pi r)` over the ball of volume `h^3`.
pub fn self_cell_integral<T: Real>(h: T, k: T) -> Cplx<T> {
    let a = (T::lit(3.0) / (T::lit(4.0) * T::PI())).cbrt() * h;
    let ka = k * a;
    if ka.abs() < T::lit(1e-4) {
        // series of [(1 - ika) e^{ika} - 1] / k^2
        return cplx(a * a / T::lit(2.0), k * a * a * a / T::lit(3.0));
    }
    let e = Cplx::from_polar(T::one(), ka);
    (cplx(T::one(), -ka) * e - T::one()) / (k * k)
}

#[derive(Debug, Clone, Copy)]
pub struct SolverOptions {
    pub tol: f64,
    pub born_max_iter: usize,
    pub relaxation: f64,
    pub gmres_restart: usize,
    pub gmres_max_iter: usize,
}

impl Default for SolverOptions {
    fn default() -> Self {
        Self { tol: 1e-8, born_max_iter: 200, relaxation: 1.0, gmres_restart: 60, gmres_max_iter: 3000 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMethod {
    Born,
    Gmres,
}

/// Complex values on every node of a grid.
#[derive(Debug, Clone, PartialEq)]
pub struct ComplexField3<T> {
    pub grid: Grid3,
    pub values: Vec<Cplx<T>>,
}

/// Converged total field on the contrast support.
#[derive(Debug, Clone)]
pub struct LsSolution<T> {
    pub x_alpha: [T; 3],
    /// Total field at the support nodes (same order as [`LippmannSchwinger::support`]).
    pub u: Vec<Cplx<T>>,
    pub relative_residual: f64,
    pub iterations: usize,
    pub method: SolveMethod,
}

/// Discretized Lippmann-Schwinger operator for one medium and wavenumber.
#[derive(Debug, Clone)]
pub struct LippmannSchwinger<T> {
    k: T,
    grid: Grid3,
    support: Vec<usize>,
    positions: Vec<[T; 3]>,
    contrast: Vec<Cplx<T>>,
    cell_volume: T,
    self_term: Cplx<T>,
    /// Row-major `K_ij q_j`.
    matrix: Vec<Cplx<T>>,
}

impl<T: Real> LippmannSchwinger<T> {
    pub fn new(medium: &MediumModel<T>, k: f64, constants: &PhysicalConstants) -> Result<Self> {
        if !(k > 0.0) {
            return Err(Error::Domain(format!("wavenumber must be positive, got {k}")));
        }
        medium.validate()?;
        let grid = medium.grid;
        let support = medium.support();
        let kk = T::lit(k);
        let kappa = T::lit(constants.conductivity_factor(k));
        let positions: Vec<[T; 3]> = support
            .iter()
            .map(|&i| {
                let (p, q, s) = grid.unidx(i);
                let x = grid.point(p, q, s);
                [T::lit(x[0]), T::lit(x[1]), T::lit(x[2])]
            })
            .collect();
        let contrast: Vec<Cplx<T>> = support
            .iter()
            .map(|&i| cplx(kk * kk * (medium.c[i] - T::one()), -kappa * medium.sigma[i]))
            .collect();
        let h = T::lit(grid.h);
        let cell_volume = h * h * h;
        let self_term = self_cell_integral(h, kk);
        let n = support.len();
        let mut matrix = vec![czero(); n * n];
        matrix.par_chunks_mut(n.max(1)).enumerate().for_each(|(i, row)| {
            for j in 0..n {
                let kij = if i == j {
                    self_term
                } else {
                    green(dist(positions[i], positions[j]), kk) * cell_volume
                };
                row[j] = kij * contrast[j];
            }
        });
        Ok(Self { k: kk, grid, support, positions, contrast, cell_volume, self_term, matrix })
    }

    pub fn support(&self) -> &[usize] {
        &self.support
    }

    pub fn k(&self) -> T {
        self.k
    }

    /// Incident field at the support nodes.
    pub fn rhs(&self, x_alpha: [T; 3]) -> Result<Vec<Cplx<T>>> {
        self.positions.iter().map(|&x| incident_field(x, x_alpha, self.k)).collect()
    }

    /// Dense `I - K Q` for inspection and direct solves.
    pub fn system_matrix(&self) -> Vec<Vec<Cplx<T>>> {
        let n = self.support.len();
        (0..n)
            .map(|i| {
                (0..n)
                    .map(|j| {
                        let id = if i == j { Cplx::new(T::one(), T::zero()) } else { czero() };
                        id - self.matrix[i * n + j]
                    })
                    .collect()
            })
            .collect()
    }

    fn apply(&self, u: &[Cplx<T>]) -> Vec<Cplx<T>> {
        let n = u.len();
        (0..n)
            .into_par_iter()
            .map(|i| {
                let row = &self.matrix[i * n..(i + 1) * n];
                let mut acc = czero();
                for j in 0..n {
                    acc += row[j] * u[j];
                }
                u[i] - acc
            })
            .collect()
    }

    fn residual_norm(&self, u: &[Cplx<T>], b: &[Cplx<T>]) -> T {
        let au = self.apply(u);
        norm(&au.iter().zip(b).map(|(a, b)| b - a).collect::<Vec<_>>())
    }

    pub fn solve(&self, x_alpha: [T; 3], opts: &SolverOptions) -> Result<LsSolution<T>> {
        let b = self.rhs(x_alpha)?;
        let bnorm = norm(&b);
        if self.support.is_empty() || bnorm == T::zero() {
            return Ok(LsSolution { x_alpha, u: b, relative_residual: 0.0, iterations: 0, method: SolveMethod::Born });
        }
        let tol = T::lit(opts.tol);
        let omega = T::lit(opts.relaxation);

        // relaxed Born series: u <- u + omega (b - A u)
        let mut u = b.clone();
        let mut prev = T::infinity();
        for it in 0..opts.born_max_iter {
            let au = self.apply(&u);
            let r: Vec<Cplx<T>> = b.iter().zip(&au).map(|(b, a)| b - a).collect();
            let rn = norm(&r);
            if rn <= tol * bnorm {
                return Ok(LsSolution {
                    x_alpha,
                    u,
                    relative_residual: (rn / bnorm).as_f64(),
                    iterations: it,
                    method: SolveMethod::Born,
                });
            }
            if !(rn < prev * T::lit(0.999)) {
                break;
            }
            prev = rn;
            for (ui, ri) in u.iter_mut().zip(&r) {
                *ui += *ri * omega;
            }
        }

        let (u, iterations) = self.gmres(&b, b.clone(), opts)?;
        let rel = self.residual_norm(&u, &b) / bnorm;
        if !(rel <= tol * T::lit(10.0)) {
            return Err(Error::NotConverged { iterations, residual: rel.as_f64() });
        }
        Ok(LsSolution { x_alpha, u, relative_residual: rel.as_f64(), iterations, method: SolveMethod::Gmres })
    }

    fn gmres(&self, b: &[Cplx<T>], mut x: Vec<Cplx<T>>, opts: &SolverOptions) -> Result<(Vec<Cplx<T>>, usize)> {
        let n = b.len();
        let m = opts.gmres_restart.max(1).min(n.max(1));
        let bnorm = norm(b);
        let tol = T::lit(opts.tol) * bnorm;
        let mut total = 0;
        while total < opts.gmres_max_iter {
            let ax = self.apply(&x);
            let r: Vec<Cplx<T>> = b.iter().zip(&ax).map(|(b, a)| b - a).collect();
            let beta = norm(&r);
            if beta <= tol {
                return Ok((x, total));
            }
            let mut v: Vec<Vec<Cplx<T>>> = vec![r.iter().map(|z| z / beta).collect()];
            let mut hmat = vec![vec![czero::<T>(); m]; m + 1];
            let mut cs = vec![T::zero(); m];
            let mut sn = vec![czero::<T>(); m];
            let mut g = vec![czero::<T>(); m + 1];
            g[0] = cplx(beta, T::zero());
            let mut used = 0;
            for j in 0..m {
                let mut w = self.apply(&v[j]);
                for i in 0..=j {
                    let hij: Cplx<T> = v[i].iter().zip(&w).map(|(a, b)| a.conj() * b).sum();
                    hmat[i][j] = hij;
                    for (wk, vk) in w.iter_mut().zip(&v[i]) {
                        *wk -= hij * vk;
                    }
                }
                let wn = norm(&w);
                hmat[j + 1][j] = cplx(wn, T::zero());
                for i in 0..j {
                    let (a, bb) = (hmat[i][j], hmat[i + 1][j]);
                    hmat[i][j] = a * cs[i] + sn[i] * bb;
                    hmat[i + 1][j] = -sn[i].conj() * a + bb * cs[i];
                }
                let (a, bb) = (hmat[j][j], hmat[j + 1][j]);
                let nu = (a.norm_sqr() + bb.norm_sqr()).sqrt();
                if nu == T::zero() {
                    cs[j] = T::one();
                    sn[j] = czero();
                } else if a.norm() == T::zero() {
                    cs[j] = T::zero();
                    sn[j] = bb.conj() / nu;
                } else {
                    cs[j] = a.norm() / nu;
                    sn[j] = (a / a.norm()) * bb.conj() / nu;
                }
                hmat[j][j] = a * cs[j] + sn[j] * bb;
                hmat[j + 1][j] = czero();
                g[j + 1] = -sn[j].conj() * g[j];
                g[j] *= cs[j];
                used = j + 1;
                total += 1;
                if g[j + 1].norm() <= tol || wn == T::zero() {
                    break;
                }
                v.push(w.iter().map(|z| z / wn).collect());
            }
            // back substitution on the leading used x used block
            let mut y = vec![czero::<T>(); used];
            for i in (0..used).rev() {
                let mut acc = g[i];
                for kx in i + 1..used {
                    acc -= hmat[i][kx] * y[kx];
                }
                y[i] = acc / hmat[i][i];
            }
            for (i, yi) in y.iter().enumerate() {
                for (xk, vk) in x.iter_mut().zip(&v[i]) {
                    *xk += *yi * vk;
                }
            }
            if x.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
                return Err(Error::NonFinite("GMRES iterate".into()));
            }
        }
        let rel = self.residual_norm(&x, b) / bnorm;
        Err(Error::NotConverged { iterations: total, residual: rel.as_f64() })
    }

    /// Scattered field `u_s(x) = sum_j K(x, x_j) q_j u_j`. A point on a support
    /// node uses the self-cell integral.
    pub fn scattered_at(&self, sol: &LsSolution<T>, x: [T; 3]) -> Cplx<T> {
        let tiny = T::lit(1e-9 * self.grid.h);
        let mut acc = czero();
        for j in 0..self.positions.len() {
            let r = dist(x, self.positions[j]);
            let kern = if r <= tiny { self.self_term } else { green(r, self.k) * self.cell_volume };
            acc += kern * self.contrast[j] * sol.u[j];
        }
        acc
    }

    /// `d/dz` of the scattered field by differentiating the kernel.
    pub fn scattered_dz_at(&self, sol: &LsSolution<T>, x: [T; 3]) -> Cplx<T> {
        let tiny = T::lit(1e-9 * self.grid.h);
        let mut acc = czero();
        for j in 0..self.positions.len() {
            let r = dist(x, self.positions[j]);
            if r <= tiny {
                continue;
            }
            let kern = green_dz(r, x[2] - self.positions[j][2], self.k) * self.cell_volume;
            acc += kern * self.contrast[j] * sol.u[j];
        }
        acc
    }

    /// Total field on every node of the grid.
    pub fn total_on_grid(&self, sol: &LsSolution<T>) -> Result<ComplexField3<T>> {
        let g = self.grid;
        let values = (0..g.len())
            .into_par_iter()
            .map(|i| {
                let (p, q, s) = g.unidx(i);
                let x = g.point(p, q, s);
                let x = [T::lit(x[0]), T::lit(x[1]), T::lit(x[2])];
                Ok(incident_field(x, sol.x_alpha, self.k)? + self.scattered_at(sol, x))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(ComplexField3 { grid: g, values })
    }
}

pub(crate) fn norm<T: Real>(v: &[Cplx<T>]) -> T {
    v.iter().map(|z| z.norm_sqr()).sum::<T>().sqrt()
}

/// Total and background-subtracted sweeps for one configuration.
#[derive(Debug, Clone)]
pub struct SynthesizedSweep<T> {
    pub total: SourceSweepData<T>,
    pub scattered: SourceSweepData<T>,
    pub solutions: Vec<LsSolution<T>>,
}

/// Solves once per source and samples `u` and `u_z` on the measurement plane.
/// Sources are solved concurrently; failures are collected and reported together.
pub fn synthesize_sweep<T: Real>(
    solver: &LippmannSchwinger<T>,
    sources: &SourceLine,
    plane: &MeasurementPlane,
    opts: &SolverOptions,
) -> Result<SynthesizedSweep<T>> {
    let alphas = sources.alphas();
    let geometry = PlaneGeometry {
        z: plane.z(),
        nx: plane.n(),
        ny: plane.n(),
        x0: plane.coord(0),
        y0: plane.coord(0),
        spacing: plane.spacing(),
    };
    let pts: Vec<[T; 3]> =
        plane.points().iter().map(|x| [T::lit(x[0]), T::lit(x[1]), T::lit(x[2])]).collect();
    let results: Vec<Result<_>> = alphas
        .par_iter()
        .map(|&a| {
            let xa = sources.position(a);
            let xa = [T::lit(xa[0]), T::lit(xa[1]), T::lit(xa[2])];
            let sol = solver.solve(xa, opts)?;
            let mut us = Vec::with_capacity(pts.len());
            let mut usz = Vec::with_capacity(pts.len());
            let mut ut = Vec::with_capacity(pts.len());
            let mut utz = Vec::with_capacity(pts.len());
            for &x in &pts {
                let s = solver.scattered_at(&sol, x);
                let sz = solver.scattered_dz_at(&sol, x);
                ut.push(incident_field(x, xa, solver.k)? + s);
                utz.push(incident_field_dz(x, xa, solver.k)? + sz);
                us.push(s);
                usz.push(sz);
            }
            Ok((sol, us, usz, ut, utz))
        })
        .collect();

    let total = results.len();
    let mut failures = Vec::new();
    let mut ok = Vec::new();
    for r in results {
        match r {
            Ok(v) => ok.push(v),
            Err(e) => failures.push(e),
        }
    }
    if !failures.is_empty() {
        let count = failures.len();
        return Err(Error::Sweep { count, total, first: Box::new(failures.swap_remove(0)) });
    }
    let mk = |f0: Vec<Vec<Cplx<T>>>, f1: Vec<Vec<Cplx<T>>>, bg: bool| SourceSweepData {
        k: solver.k.as_f64(),
        alphas: alphas.clone(),
        source_depth: sources.d(),
        plane: geometry,
        stage: Stage::Raw,
        background_subtracted: bg,
        f0,
        f1: Some(f1),
    };
    let mut solutions = Vec::new();
    let (mut s0, mut s1, mut t0, mut t1) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (sol, us, usz, ut, utz) in ok {
        solutions.push(sol);
        s0.push(us);
        s1.push(usz);
        t0.push(ut);
        t1.push(utz);
    }
    Ok(SynthesizedSweep { total: mk(t0, t1, false), scattered: mk(s0, s1, true), solutions })
}
