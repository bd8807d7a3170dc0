//! Carleman-weighted least-squares functional for the coupled elliptic system
//! `Delta V + K(grad V) = 0`, its gradient and the descent loop.
//!
//! Unknowns live on the full node grid. Layers `s = 0, 1` are pinned by the
//! Cauchy data. Lateral boundary nodes copy their nearest interior neighbour
//! (zero normal derivative); at the top `z = b` a mirror ghost is used. The
//! residual is evaluated at lateral-interior nodes for `s = 1 ..= top`, with
//! trapezoid weights in `z`.

use std::io::Write;
use std::path::PathBuf;

use rayon::prelude::*;

use crate::basis::BasisSet;
use crate::domain::Grid3;
use crate::error::{Error, Result};
use crate::lift::{tail_hat, tail_tilde, LiftedField};
use crate::scalar::{cdot, czero, CVec3, Cplx, Real};

pub const DEFAULT_LAMBDA: f64 = 1.1;
pub const DEFAULT_GAMMA1: f64 = 0.1;
pub const DEFAULT_GAMMA_MIN: f64 = 1e-10;
pub const DEFAULT_DJ_TOL: f64 = 1e-10;
pub const DEFAULT_MAX_ITER: usize = 5000;

/// `exp(2 lambda (z - theta)^2)`.
pub fn cwf(z: f64, lambda: f64, theta: f64) -> f64 {
    (2.0 * lambda * (z - theta) * (z - theta)).exp()
}

/// Weight tabulated on the `z` layers and normalized by its value at `z = -b`.
#[derive(Debug, Clone, PartialEq)]
pub struct CarlemanWeight {
    pub lambda: f64,
    pub theta: f64,
    /// `mu(z_s) / mu(z_0)`.
    pub values: Vec<f64>,
    /// `ln mu(z_0)`; the raw weight is `values * exp(log_scale)`.
    pub log_scale: f64,
}

impl CarlemanWeight {
    pub fn new(grid: &Grid3, lambda: f64, theta: f64) -> Result<Self> {
        if !(lambda >= 0.0) {
            return Err(Error::Domain(format!("lambda must be non-negative, got {lambda}")));
        }
        if !(theta > grid.b) {
            return Err(Error::Domain(format!("theta = {theta} must exceed b = {}", grid.b)));
        }
        let top = (grid.b + theta) * (grid.b + theta);
        let values = (0..grid.nz)
            .map(|s| {
                let z = grid.z(s);
                (2.0 * lambda * ((z - theta) * (z - theta) - top)).exp()
            })
            .collect();
        Ok(Self { lambda, theta, values, log_scale: 2.0 * lambda * top })
    }

    /// Weight from an arbitrary positive table, normalized by its first entry.
    pub fn from_table(lambda: f64, theta: f64, table: &[f64]) -> Result<Self> {
        let w0 = *table.first().ok_or_else(|| Error::Domain("empty weight table".into()))?;
        if !(w0 > 0.0 && w0.is_finite()) || table.iter().any(|w| !(*w > 0.0)) {
            return Err(Error::Domain("weight table must be positive and finite".into()));
        }
        Ok(Self { lambda, theta, values: table.iter().map(|w| w / w0).collect(), log_scale: w0.ln() })
    }
}

/// Value and gradient of the functional. The gradient is zero on pinned and
/// copied nodes; its entries on free nodes are the exact partial derivatives.
#[derive(Debug, Clone)]
pub struct CostEvaluation<T> {
    /// Value with the normalized weight.
    pub j: T,
    pub grad: Vec<T>,
}

impl<T: Real> CostEvaluation<T> {
    /// Value with the raw weight, if representable.
    pub fn j_raw(&self, weight: &CarlemanWeight) -> Option<f64> {
        let v = self.j.as_f64() * weight.log_scale.exp();
        v.is_finite().then_some(v)
    }
}

/// Finite-difference derivatives of component `comp` at a node that is
/// lateral-interior with `1 <= s <= top`.
#[inline]
fn stencil<T: Real>(v: &LiftedField<T>, comp: usize, p: usize, q: usize, s: usize) -> (CVec3<T>, Cplx<T>) {
    let g = &v.grid;
    let h = T::lit(g.h);
    let two_h = h + h;
    let top = g.top();
    let at = |p: usize, q: usize, s: usize| v.value(comp, g.idx(p, q, s));
    let c = at(p, q, s);
    let (xp, xm) = (at(p + 1, q, s), at(p - 1, q, s));
    let (yp, ym) = (at(p, q + 1, s), at(p, q - 1, s));
    let zm = at(p, q, s - 1);
    let zp = if s < top { at(p, q, s + 1) } else { zm };
    let grad = [(xp - xm) / two_h, (yp - ym) / two_h, (zp - zm) / two_h];
    let lap = (xp + xm + yp + ym + zp + zm - c * T::lit(6.0)) / (h * h);
    (grad, lap)
}

/// Finite-difference gradient and Laplacian of every component at a
/// lateral-interior node with `1 <= s <= top`.
pub fn derivatives_at<T: Real>(v: &LiftedField<T>, p: usize, q: usize, s: usize) -> (Vec<CVec3<T>>, Vec<Cplx<T>>) {
    (0..v.n).map(|c| stencil(v, c, p, q, s)).unzip()
}

/// Descent options.
#[derive(Debug, Clone)]
pub struct DescentOptions {
    pub gamma1: f64,
    pub gamma_min: f64,
    pub dj_tol: f64,
    pub max_iter: usize,
    /// Radius `M` of the ball; enables the projection step with radius `2M`.
    pub ball_radius: Option<f64>,
    /// Write a checkpoint every this many accepted steps.
    pub checkpoint_every: Option<usize>,
    pub checkpoint_dir: Option<PathBuf>,
}

impl Default for DescentOptions {
    fn default() -> Self {
        Self {
            gamma1: DEFAULT_GAMMA1,
            gamma_min: DEFAULT_GAMMA_MIN,
            dj_tol: DEFAULT_DJ_TOL,
            max_iter: DEFAULT_MAX_ITER,
            ball_radius: None,
            checkpoint_every: None,
            checkpoint_dir: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IterRecord {
    pub step: usize,
    /// Step size used for this trial step.
    pub gamma: f64,
    /// Functional value after the step (or the kept value if rejected).
    pub j: f64,
    pub grad_norm: f64,
    pub accepted: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StopReason {
    StepTooSmall,
    Stalled,
    MaxIterations,
    ZeroResidual,
}

#[derive(Debug, Clone)]
pub struct DescentResult<T> {
    pub field: LiftedField<T>,
    pub j_initial: f64,
    pub j_final: f64,
    pub log: Vec<IterRecord>,
    pub stop: StopReason,
}

impl<T> DescentResult<T> {
    pub fn write_log_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "step,gamma,j,grad_norm,accepted")?;
        for r in &self.log {
            writeln!(w, "{},{:e},{:e},{:e},{}", r.step, r.gamma, r.j, r.grad_norm, r.accepted)?;
        }
        Ok(())
    }
}

/// The discretized functional with its precomputed source-geometry tensors.
#[derive(Debug, Clone)]
pub struct Convexifier<T> {
    grid: Grid3,
    n: usize,
    weight: CarlemanWeight,
    /// `2 S^-1 T` flattened as `[j][n][l]`.
    ttil: Vec<T>,
    /// `S^-1 (A + B)` per residual point, flattened as `[j][n]`.
    ctil: Vec<CVec3<T>>,
    /// Provides the pinned layers.
    reference: LiftedField<T>,
}

impl<T: Real> Convexifier<T> {
    /// `reference` supplies the values of the two bottom layers (normally the
    /// starting point built from the Cauchy data).
    pub fn new(
        basis: &BasisSet<T>,
        k: f64,
        source_depth: f64,
        weight: CarlemanWeight,
        reference: &LiftedField<T>,
    ) -> Result<Self> {
        let grid = reference.grid;
        let n = basis.n();
        if reference.n != n {
            return Err(Error::Shape(format!("field has {} components, basis {}", reference.n, n)));
        }
        if weight.values.len() != grid.nz {
            return Err(Error::Shape("weight table does not match the z layers".into()));
        }
        if grid.nz < 3 || grid.nx() < 3 {
            return Err(Error::Shape("grid needs at least three nodes per axis".into()));
        }
        let mut ttil = vec![T::zero(); n * n * n];
        for j in 0..n {
            for a in 0..n {
                for l in 0..n {
                    let mut acc = T::zero();
                    for m in 0..n {
                        acc += basis.s_inv[j][m] * basis.triple[m][a][l];
                    }
                    ttil[(j * n + a) * n + l] = T::lit(2.0) * acc;
                }
            }
        }
        let points: Vec<[f64; 3]> = {
            let mut pts = Vec::new();
            for p in 1..grid.nx() - 1 {
                for q in 1..grid.ny() - 1 {
                    for s in 1..=grid.top() {
                        pts.push(grid.point(p, q, s));
                    }
                }
            }
            pts
        };
        let quad = &basis.quad;
        let per_point: Vec<Result<Vec<CVec3<T>>>> = points
            .par_iter()
            .map(|&x| {
                let mut ab = vec![[czero::<T>(); 3]; n * n];
                for (node, (&a, &w)) in quad.nodes.iter().zip(&quad.weights).enumerate() {
                    let tt: CVec3<T> = tail_tilde(x, a.as_f64(), source_depth, k)?;
                    let th: CVec3<T> = tail_hat(x, a.as_f64(), source_depth, k)?;
                    for m in 0..n {
                        let wm = T::lit(2.0) * w * basis.psi[m][node];
                        for a_ in 0..n {
                            let ct = wm * basis.dpsi[a_][node];
                            let ch = wm * basis.psi[a_][node];
                            let e = &mut ab[m * n + a_];
                            for c in 0..3 {
                                e[c] += tt[c] * ct + th[c] * ch;
                            }
                        }
                    }
                }
                let mut out = vec![[czero::<T>(); 3]; n * n];
                for j in 0..n {
                    for a_ in 0..n {
                        let e = &mut out[j * n + a_];
                        for m in 0..n {
                            let sj = basis.s_inv[j][m];
                            for c in 0..3 {
                                e[c] += ab[m * n + a_][c] * sj;
                            }
                        }
                    }
                }
                Ok(out)
            })
            .collect();
        let mut ctil = Vec::with_capacity(points.len() * n * n);
        for r in per_point {
            ctil.extend(r?);
        }
        let mut reference = reference.clone();
        enforce_neumann(&mut reference);
        Ok(Self { grid, n, weight, ttil, ctil, reference })
    }

    pub fn grid(&self) -> &Grid3 {
        &self.grid
    }
    pub fn n(&self) -> usize {
        self.n
    }
    pub fn weight(&self) -> &CarlemanWeight {
        &self.weight
    }
    pub fn reference(&self) -> &LiftedField<T> {
        &self.reference
    }

    /// Replaces the weight; tensors are kept.
    pub fn with_weight(mut self, weight: CarlemanWeight) -> Result<Self> {
        if weight.values.len() != self.grid.nz {
            return Err(Error::Shape("weight table does not match the z layers".into()));
        }
        self.weight = weight;
        Ok(self)
    }

    #[inline]
    fn res_index(&self, p: usize, q: usize, s: usize) -> usize {
        let inner = self.grid.ny() - 2;
        ((p - 1) * inner + (q - 1)) * self.grid.top() + (s - 1)
    }

    #[inline]
    fn quad_weight(&self, s: usize) -> T {
        let h = self.grid.h;
        let trap = if s == self.grid.top() { 0.5 } else { 1.0 };
        T::lit(h * h * h * trap * self.weight.values[s])
    }

    /// `K(grad V)` from gradients at a residual point.
    fn nonlinearity(&self, r: usize, grads: &[CVec3<T>]) -> Vec<Cplx<T>> {
        let n = self.n;
        let ct = &self.ctil[r * n * n..(r + 1) * n * n];
        let mut dots = vec![czero::<T>(); n * n];
        for a in 0..n {
            for l in a..n {
                let d = cdot(&grads[a], &grads[l]);
                dots[a * n + l] = d;
                dots[l * n + a] = d;
            }
        }
        (0..n)
            .map(|j| {
                let mut acc = czero::<T>();
                for a in 0..n {
                    for l in 0..n {
                        acc += dots[a * n + l] * self.ttil[(j * n + a) * n + l];
                    }
                    acc += cdot(&ct[j * n + a], &grads[a]);
                }
                acc
            })
            .collect()
    }

    /// `K(grad^h V)` at a lateral-interior node with `1 <= s <= top`.
    pub fn nonlinearity_at(&self, v: &LiftedField<T>, p: usize, q: usize, s: usize) -> Vec<Cplx<T>> {
        let (grads, _) = derivatives_at(v, p, q, s);
        self.nonlinearity(self.res_index(p, q, s), &grads)
    }

    /// `L^h V = Delta^h V + K(grad^h V)` at a lateral-interior node.
    pub fn operator_at(&self, v: &LiftedField<T>, p: usize, q: usize, s: usize) -> Vec<Cplx<T>> {
        let (grads, laps) = derivatives_at(v, p, q, s);
        let k = self.nonlinearity(self.res_index(p, q, s), &grads);
        laps.iter().zip(&k).map(|(a, b)| *a + *b).collect()
    }

    /// Residuals at all evaluation points, ordered by column, layer, component.
    pub fn residuals(&self, v: &LiftedField<T>) -> Result<Vec<Cplx<T>>> {
        self.check_field(v)?;
        let mut out = Vec::new();
        for (p, q) in self.columns() {
            for s in 1..=self.grid.top() {
                out.extend(self.operator_at(v, p, q, s));
            }
        }
        Ok(out)
    }

    /// Quadrature weight of each entry of [`Self::residuals`].
    pub fn residual_weights(&self) -> Vec<T> {
        let mut out = Vec::new();
        for _ in self.columns() {
            for s in 1..=self.grid.top() {
                out.extend(std::iter::repeat(self.quad_weight(s)).take(self.n));
            }
        }
        out
    }

    /// Same functional with `K` removed.
    pub fn without_nonlinearity(mut self) -> Self {
        self.ttil.iter_mut().for_each(|t| *t = T::zero());
        self.ctil.iter_mut().for_each(|c| *c = [czero(); 3]);
        self
    }

    fn columns(&self) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for p in 1..self.grid.nx() - 1 {
            for q in 1..self.grid.ny() - 1 {
                out.push((p, q));
            }
        }
        out
    }

    fn check_field(&self, v: &LiftedField<T>) -> Result<()> {
        if v.grid != self.grid || v.n != self.n || v.data.len() != 2 * self.n * self.grid.len() {
            return Err(Error::Shape("field does not match the functional".into()));
        }
        Ok(())
    }

    /// Value of the functional (normalized weight).
    pub fn cost(&self, v: &LiftedField<T>) -> Result<T> {
        self.check_field(v)?;
        let top = self.grid.top();
        let partial: Vec<T> = self
            .columns()
            .par_iter()
            .map(|&(p, q)| {
                let mut acc = T::zero();
                for s in 1..=top {
                    let w = self.quad_weight(s);
                    for l in self.operator_at(v, p, q, s) {
                        acc += w * l.norm_sqr();
                    }
                }
                acc
            })
            .collect();
        Ok(partial.into_iter().fold(T::zero(), |a, b| a + b))
    }

    /// Value and exact gradient of the discrete functional.
    pub fn cost_and_gradient(&self, v: &LiftedField<T>) -> Result<CostEvaluation<T>> {
        self.check_field(v)?;
        let g = self.grid;
        let n = self.n;
        let top = g.top();
        let nres = (g.nx() - 2) * (g.ny() - 2) * top;
        // per residual point: Q_j = 2 w L_j, E_{n,c} = sum_j Q_j conj(dK_j / d grad_c v_n)
        let cols = self.columns();
        let per_col: Vec<(T, Vec<Cplx<T>>, Vec<CVec3<T>>)> = cols
            .par_iter()
            .map(|&(p, q)| {
                let mut jsum = T::zero();
                let mut qv = Vec::with_capacity(top * n);
                let mut ev = Vec::with_capacity(top * n);
                for s in 1..=top {
                    let r = self.res_index(p, q, s);
                    let (grads, laps) = derivatives_at(v, p, q, s);
                    let kk = self.nonlinearity(r, &grads);
                    let w = self.quad_weight(s);
                    let two_w = w + w;
                    let qs: Vec<Cplx<T>> = laps
                        .iter()
                        .zip(&kk)
                        .map(|(a, b)| {
                            let l = *a + *b;
                            jsum += w * l.norm_sqr();
                            l * two_w
                        })
                        .collect();
                    let ct = &self.ctil[r * n * n..(r + 1) * n * n];
                    for a in 0..n {
                        let mut e = [czero::<T>(); 3];
                        for j in 0..n {
                            let mut pj = ct[j * n + a];
                            for l in 0..n {
                                let coef = self.ttil[(j * n + a) * n + l] + self.ttil[(j * n + l) * n + a];
                                for c in 0..3 {
                                    pj[c] += grads[l][c] * coef;
                                }
                            }
                            for c in 0..3 {
                                e[c] += qs[j] * pj[c].conj();
                            }
                        }
                        ev.push(e);
                    }
                    qv.extend(qs);
                }
                (jsum, qv, ev)
            })
            .collect();
        let mut j = T::zero();
        let mut qall = vec![czero::<T>(); nres * n];
        let mut eall = vec![[czero::<T>(); 3]; nres * n];
        for (ci, (js, qv, ev)) in per_col.into_iter().enumerate() {
            j += js;
            let base = ci * top * n;
            qall[base..base + top * n].copy_from_slice(&qv);
            eall[base..base + top * n].copy_from_slice(&ev);
        }
        // gather the adjoint contributions at every node
        let h = T::lit(g.h);
        let inv_h2 = T::one() / (h * h);
        let inv_2h = T::one() / (h + h);
        let is_res = |p: usize, q: usize, s: usize| g.is_lateral_interior(p, q) && s >= 1 && s <= top;
        let len = g.len();
        let mut grad_c = vec![czero::<T>(); n * len];
        grad_c.par_chunks_mut(len).enumerate().for_each(|(a, out)| {
            for (i, o) in out.iter_mut().enumerate() {
                let (p, q, s) = g.unidx(i);
                let mut acc = czero::<T>();
                let qe = |pp: usize, qq: usize, ss: usize| {
                    let r = self.res_index(pp, qq, ss) * n + a;
                    (qall[r], eall[r])
                };
                if is_res(p, q, s) {
                    let (qq, _) = qe(p, q, s);
                    acc += qq * (T::lit(-6.0) * inv_h2);
                }
                // lateral neighbours
                let lat: [(isize, isize, usize); 4] = [(1, 0, 0), (-1, 0, 0), (0, 1, 1), (0, -1, 1)];
                for (dp, dq, c) in lat {
                    let (pp, qq) = (p as isize + dp, q as isize + dq);
                    if pp < 0 || qq < 0 {
                        continue;
                    }
                    let (pp, qq) = (pp as usize, qq as usize);
                    if pp >= g.nx() || qq >= g.ny() || !is_res(pp, qq, s) {
                        continue;
                    }
                    let (qv, ev) = qe(pp, qq, s);
                    // node sits at offset -(dp, dq) from the residual point
                    let sign = if dp + dq > 0 { -T::one() } else { T::one() };
                    acc += qv * inv_h2 + ev[c] * (sign * inv_2h);
                }
                // residual at s + 1 sees this node as its lower neighbour
                if s + 1 <= top && is_res(p, q, s + 1) {
                    let (qv, ev) = qe(p, q, s + 1);
                    if s + 1 == top {
                        acc += qv * (T::lit(2.0) * inv_h2);
                    } else {
                        acc += qv * inv_h2 - ev[2] * inv_2h;
                    }
                }
                // residual at s - 1 sees this node as its upper neighbour
                if s >= 2 && is_res(p, q, s - 1) {
                    let (qv, ev) = qe(p, q, s - 1);
                    acc += qv * inv_h2 + ev[2] * inv_2h;
                }
                *o = acc;
            }
        });
        // fold copied lateral nodes onto their masters, zero pinned entries
        let mut grad = vec![T::zero(); 2 * n * len];
        for a in 0..n {
            let src = &grad_c[a * len..(a + 1) * len];
            let (re, rest) = grad[2 * a * len..].split_at_mut(len);
            let im = &mut rest[..len];
            for p in 0..g.nx() {
                for q in 0..g.ny() {
                    for s in 2..g.nz {
                        let i = g.idx(p, q, s);
                        let (mp, mq) = master(&g, p, q);
                        let m = g.idx(mp, mq, s);
                        re[m] += src[i].re;
                        im[m] += src[i].im;
                    }
                }
            }
        }
        Ok(CostEvaluation { j, grad })
    }

    /// Overwrites pinned layers with the reference and re-copies lateral
    /// boundary nodes from their interior neighbours.
    pub fn enforce(&self, v: &mut LiftedField<T>) {
        let g = self.grid;
        let len = g.len();
        for c in 0..2 * self.n {
            for p in 0..g.nx() {
                for q in 0..g.ny() {
                    for s in 0..2 {
                        let i = c * len + g.idx(p, q, s);
                        v.data[i] = self.reference.data[i];
                    }
                }
            }
        }
        v.psi0.clone_from(&self.reference.psi0);
        v.psi1.clone_from(&self.reference.psi1);
        enforce_neumann(v);
    }

    /// Projects a direction onto the admissible increments: zero on the pinned
    /// layers, lateral boundary copied from the interior.
    pub fn admissible_direction(&self, r: &mut [T]) {
        let g = self.grid;
        let len = g.len();
        for c in 0..2 * self.n {
            let vol = &mut r[c * len..(c + 1) * len];
            for p in 0..g.nx() {
                for q in 0..g.ny() {
                    for s in 0..g.nz {
                        let i = g.idx(p, q, s);
                        if s < 2 {
                            vol[i] = T::zero();
                        } else {
                            let (mp, mq) = master(&g, p, q);
                            vol[i] = vol[g.idx(mp, mq, s)];
                        }
                    }
                }
            }
        }
    }

    /// Gradient descent with step halving on increase. A step that raises `J`
    /// is discarded.
    pub fn minimize(&self, v0: &LiftedField<T>, opts: &DescentOptions) -> Result<DescentResult<T>> {
        self.check_field(v0)?;
        if !(opts.gamma1 > 0.0) {
            return Err(Error::Config("gamma1 must be positive".into()));
        }
        let mut v = v0.clone();
        self.enforce(&mut v);
        let anchor = v.clone();
        let mut eval = self.cost_and_gradient(&v)?;
        self.guard(&eval, &v, 0, opts)?;
        let j_initial = eval.j.as_f64();
        let mut log = Vec::new();
        let mut gamma = opts.gamma1;
        let mut stop = StopReason::MaxIterations;
        let mut accepted_steps = 0;
        if j_initial == 0.0 {
            stop = StopReason::ZeroResidual;
        } else {
            for step in 1..=opts.max_iter {
                if gamma < opts.gamma_min {
                    stop = StopReason::StepTooSmall;
                    break;
                }
                let grad_norm = eval.grad.iter().map(|g| g.as_f64() * g.as_f64()).sum::<f64>().sqrt();
                let mut trial = v.clone();
                let gm = T::lit(gamma);
                for (t, g) in trial.data.iter_mut().zip(&eval.grad) {
                    *t -= gm * *g;
                }
                self.enforce(&mut trial);
                if let Some(m) = opts.ball_radius {
                    self.project_onto_ball(&mut trial, &anchor, 2.0 * m);
                }
                let next = self.cost_and_gradient(&trial)?;
                self.guard(&next, &trial, step, opts)?;
                let (jo, jn) = (eval.j.as_f64(), next.j.as_f64());
                if jn > jo {
                    log.push(IterRecord { step, gamma, j: jo, grad_norm, accepted: false });
                    gamma *= 0.5;
                    continue;
                }
                log.push(IterRecord { step, gamma, j: jn, grad_norm, accepted: true });
                v = trial;
                eval = next;
                accepted_steps += 1;
                if let (Some(every), Some(dir)) = (opts.checkpoint_every, &opts.checkpoint_dir) {
                    if every > 0 && accepted_steps % every == 0 {
                        v.save(&dir.join(format!("checkpoint_{step:06}.lifted")))?;
                    }
                }
                if jn == 0.0 {
                    stop = StopReason::ZeroResidual;
                    break;
                }
                if (jo - jn).abs() < opts.dj_tol {
                    stop = StopReason::Stalled;
                    break;
                }
            }
        }
        Ok(DescentResult { j_initial, j_final: eval.j.as_f64(), field: v, log, stop })
    }

    fn guard(&self, e: &CostEvaluation<T>, v: &LiftedField<T>, step: usize, opts: &DescentOptions) -> Result<()> {
        if e.j.is_finite() && e.grad.iter().all(|g| g.is_finite()) {
            return Ok(());
        }
        let mut what = format!("functional or gradient at iteration {step}");
        if let Some(dir) = &opts.checkpoint_dir {
            let path = dir.join(format!("nonfinite_{step:06}.lifted"));
            if v.save(&path).is_ok() {
                what.push_str(&format!(", iterate written to {}", path.display()));
            }
        }
        Err(Error::NonFinite(what))
    }

    /// `anchor + P(v - anchor)` with `P` the radial projection on the ball.
    fn project_onto_ball(&self, v: &mut LiftedField<T>, anchor: &LiftedField<T>, radius: f64) {
        let mut w = v.clone();
        for (a, b) in w.data.iter_mut().zip(&anchor.data) {
            *a -= *b;
        }
        let pw = project_ball(&w, radius);
        for ((o, a), b) in v.data.iter_mut().zip(&pw.data).zip(&anchor.data) {
            *o = *a + *b;
        }
    }
}

/// Interior node whose value a lateral boundary node copies.
#[inline]
fn master(g: &Grid3, p: usize, q: usize) -> (usize, usize) {
    (p.clamp(1, g.nx() - 2), q.clamp(1, g.ny() - 2))
}

/// Copies lateral boundary nodes from their interior neighbours on `s >= 2`.
pub fn enforce_neumann<T: Real>(v: &mut LiftedField<T>) {
    let g = v.grid;
    let len = g.len();
    for c in 0..2 * v.n {
        let vol = &mut v.data[c * len..(c + 1) * len];
        for p in 0..g.nx() {
            for q in 0..g.ny() {
                if g.is_lateral_interior(p, q) {
                    continue;
                }
                let (mp, mq) = master(&g, p, q);
                for s in 2..g.nz {
                    vol[g.idx(p, q, s)] = vol[g.idx(mp, mq, s)];
                }
            }
        }
    }
}

/// Trapezoid weights on the `z` layers.
fn trapezoid(nz: usize, h: f64) -> Vec<f64> {
    (0..nz).map(|s| if s == 0 || s + 1 == nz { 0.5 * h } else { h }).collect()
}

/// Discrete `H^2` norm: lateral-interior columns, every real volume, `z`
/// derivatives of order up to two.
pub fn h2_norm<T: Real>(v: &LiftedField<T>) -> f64 {
    let g = v.grid;
    let len = g.len();
    let h = g.h;
    let tw = trapezoid(g.nz, h);
    let nz = g.nz;
    let mut total = 0.0;
    for c in 0..2 * v.n {
        let vol = &v.data[c * len..(c + 1) * len];
        for p in 1..g.nx() - 1 {
            for q in 1..g.ny() - 1 {
                let col: Vec<f64> = (0..nz).map(|s| vol[g.idx(p, q, s)].as_f64()).collect();
                for s in 0..nz {
                    let d1 = if s == 0 {
                        (col[1] - col[0]) / h
                    } else if s + 1 == nz {
                        (col[s] - col[s - 1]) / h
                    } else {
                        (col[s + 1] - col[s - 1]) / (2.0 * h)
                    };
                    let sc = s.clamp(1, nz - 2);
                    let d2 = (col[sc + 1] - 2.0 * col[sc] + col[sc - 1]) / (h * h);
                    total += h * h * tw[s] * (col[s] * col[s] + d1 * d1 + d2 * d2);
                }
            }
        }
    }
    total.sqrt()
}

/// Radial projection onto the ball of radius `two_m` in the discrete `H^2` norm.
pub fn project_ball<T: Real>(w: &LiftedField<T>, two_m: f64) -> LiftedField<T> {
    let norm = h2_norm(w);
    if norm <= two_m {
        return w.clone();
    }
    let f = T::lit(two_m / norm);
    let mut out = w.clone();
    for x in out.data.iter_mut() {
        *x = *x * f;
    }
    out
}

/// Weighted sums of a single real grid function appearing in the Carleman
/// inequality: `(lhs, second, first, zeroth)` with
/// `lhs = sum h^2 int (Delta^h u)^2 mu`, `second = sum h^2 int u_zz^2 mu`,
/// `first = sum h^2 int u_z^2 mu`, `zeroth = sum h^2 int (|grad^h u|^2 + u^2) mu`,
/// using the same stencils and weights as the functional.
pub fn carleman_sums(u: &[f64], grid: &Grid3, weight: &CarlemanWeight) -> (f64, f64, f64, f64) {
    let g = grid;
    let h = g.h;
    let top = g.top();
    let at = |p: usize, q: usize, s: usize| u[g.idx(p, q, s)];
    let (mut lhs, mut t2, mut t1, mut t0) = (0.0, 0.0, 0.0, 0.0);
    for p in 1..g.nx() - 1 {
        for q in 1..g.ny() - 1 {
            for s in 1..=top {
                let w = h * h * h * if s == top { 0.5 } else { 1.0 } * weight.values[s];
                let c = at(p, q, s);
                let zm = at(p, q, s - 1);
                let zp = if s < top { at(p, q, s + 1) } else { zm };
                let uzz = (zp - 2.0 * c + zm) / (h * h);
                let uxx = (at(p + 1, q, s) - 2.0 * c + at(p - 1, q, s)) / (h * h);
                let uyy = (at(p, q + 1, s) - 2.0 * c + at(p, q - 1, s)) / (h * h);
                let uz = (zp - zm) / (2.0 * h);
                let ux = (at(p + 1, q, s) - at(p - 1, q, s)) / (2.0 * h);
                let uy = (at(p, q + 1, s) - at(p, q - 1, s)) / (2.0 * h);
                let lap = uxx + uyy + uzz;
                lhs += w * lap * lap;
                t2 += w * uzz * uzz;
                t1 += w * uz * uz;
                t0 += w * (ux * ux + uy * uy + uz * uz + c * c);
            }
        }
    }
    (lhs, t2, t1, t0)
}
