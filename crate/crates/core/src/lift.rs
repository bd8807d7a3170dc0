//! Change of variables `v = log(u / u_i)`, Fourier projection in the source
//! parameter, source-geometry tail vectors and the starting point.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::domain::Grid3;
use crate::error::{Error, Result};
use crate::forward::{incident_field, incident_field_dz};
use crate::preprocess::resample_to_lattice;
use crate::scalar::{cplx, czero, CVec3, Cplx, Real};
use crate::sweep::SourceSweepData;

const MAGIC: &[u8; 8] = b"CWFLIFT1";
pub const DEFAULT_LOG_FLOOR: f64 = 1e-14;

/// `v = log(u / u_i)` on one plane grid.
#[derive(Debug, Clone)]
pub struct LogRatio<T> {
    pub values: Vec<Cplx<T>>,
    /// Samples below the floor, replaced by a neighbouring value.
    pub filled: usize,
}

/// Log of `u / u_i` on an `nx x ny` grid (row-major, `y` fastest).
///
/// The phase is unwrapped along the row through the largest `|u|`, then along
/// every column starting from that row; the anchor keeps its principal value.
/// Samples with `|u| < floor * max|u|` take the value of the previously
/// visited sample.
pub fn log_ratio<T: Real>(u: &[Cplx<T>], u_i: &[Cplx<T>], nx: usize, ny: usize, floor: f64) -> Result<LogRatio<T>> {
    if u.len() != nx * ny || u_i.len() != u.len() || u.is_empty() {
        return Err(Error::Shape("log_ratio needs matching non-empty grids".into()));
    }
    let mags: Vec<f64> = u.iter().map(|z| z.norm().as_f64()).collect();
    let (anchor, umax) = mags
        .iter()
        .enumerate()
        .fold((0, 0.0), |(bi, bm), (i, &m)| if m > bm { (i, m) } else { (bi, bm) });
    if umax == 0.0 {
        return Err(Error::Domain("field vanishes on the whole plane".into()));
    }
    let thr = floor * umax;
    let mut ok = vec![true; u.len()];
    let mut raw = vec![(0.0f64, 0.0f64); u.len()];
    for i in 0..u.len() {
        if u_i[i].norm() == T::zero() {
            return Err(Error::Singular);
        }
        if mags[i] < thr || !mags[i].is_finite() {
            ok[i] = false;
            continue;
        }
        let w = u[i] / u_i[i];
        raw[i] = (w.norm().as_f64().ln(), w.arg().as_f64());
    }
    let tau = std::f64::consts::TAU;
    let mut out = vec![(f64::NAN, f64::NAN); u.len()];
    let mut filled = 0;
    let mut visit = |i: usize, prev: Option<(f64, f64)>, out: &mut Vec<(f64, f64)>| {
        out[i] = match (ok[i], prev) {
            (true, None) => raw[i],
            (true, Some((_, pphase))) => {
                let d = raw[i].1 - pphase;
                (raw[i].0, raw[i].1 - tau * (d / tau).round())
            }
            (false, Some(p)) => {
                filled += 1;
                p
            }
            (false, None) => {
                filled += 1;
                (0.0, 0.0)
            }
        };
    };
    let (ap, aq) = (anchor / ny, anchor % ny);
    visit(anchor, None, &mut out);
    for q in (0..aq).rev() {
        let prev = out[ap * ny + q + 1];
        visit(ap * ny + q, Some(prev), &mut out);
    }
    for q in aq + 1..ny {
        let prev = out[ap * ny + q - 1];
        visit(ap * ny + q, Some(prev), &mut out);
    }
    for q in 0..ny {
        for p in (0..ap).rev() {
            let prev = out[(p + 1) * ny + q];
            visit(p * ny + q, Some(prev), &mut out);
        }
        for p in ap + 1..nx {
            let prev = out[(p - 1) * ny + q];
            visit(p * ny + q, Some(prev), &mut out);
        }
    }
    Ok(LogRatio { values: out.into_iter().map(|(a, b)| cplx(T::lit(a), T::lit(b))).collect(), filled })
}

/// Linear interpolation weights of `alpha` in the ascending `alphas`,
/// constant beyond the ends.
fn interp_weights(alphas: &[f64], alpha: f64) -> (usize, usize, f64) {
    let last = alphas.len() - 1;
    if alpha <= alphas[0] {
        return (0, 0, 0.0);
    }
    if alpha >= alphas[last] {
        return (last, last, 0.0);
    }
    let j = alphas.windows(2).position(|w| alpha <= w[1]).unwrap_or(last - 1);
    let t = (alpha - alphas[j]) / (alphas[j + 1] - alphas[j]);
    (j, j + 1, t)
}

/// `psi_n(x) = int v(x, alpha) Psi_n(alpha) d alpha` for every grid sample,
/// with `v` interpolated linearly between the source positions.
pub fn project_fourier<T: Real>(samples: &[Vec<Cplx<T>>], alphas: &[f64], basis: &BasisSet<T>) -> Result<Vec<Vec<Cplx<T>>>> {
    if alphas.len() < 2 || samples.len() != alphas.len() {
        return Err(Error::Domain(format!(
            "Fourier projection needs at least two sources with data, got {} positions and {} grids",
            alphas.len(),
            samples.len()
        )));
    }
    if alphas.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::Domain("source positions must be strictly increasing".into()));
    }
    let len = samples[0].len();
    if samples.iter().any(|g| g.len() != len) {
        return Err(Error::Shape("source grids differ in size".into()));
    }
    let n = basis.n();
    let mut out = vec![vec![czero::<T>(); len]; n];
    for (node, (&a, &w)) in basis.quad.nodes.iter().zip(&basis.quad.weights).enumerate() {
        let (j0, j1, t) = interp_weights(alphas, a.as_f64());
        let (w0, w1) = (T::lit(1.0 - t), T::lit(t));
        for (k, comp) in out.iter_mut().enumerate() {
            let c = w * basis.psi[k][node];
            for (o, (a0, a1)) in comp.iter_mut().zip(samples[j0].iter().zip(&samples[j1])) {
                *o += (*a0 * w0 + *a1 * w1) * c;
            }
        }
    }
    Ok(out)
}

fn displacement(x: [f64; 3], alpha: f64, d: f64) -> Result<[f64; 3]> {
    let r = [x[0] - alpha, x[1], x[2] + d];
    if r.iter().all(|&c| c == 0.0) {
        return Err(Error::Singular);
    }
    Ok(r)
}

/// `grad log u_i = ik r/|r| - r/|r|^2` with `r = x - (alpha, 0, -d)`.
pub fn tail_tilde<T: Real>(x: [f64; 3], alpha: f64, d: f64, k: f64) -> Result<CVec3<T>> {
    let r = displacement(x, alpha, d)?;
    let n2 = r[0] * r[0] + r[1] * r[1] + r[2] * r[2];
    let n1 = n2.sqrt();
    Ok(r.map(|c| cplx(T::lit(-c / n2), T::lit(k * c / n1))))
}

/// `d/d alpha` of [`tail_tilde`].
pub fn tail_hat<T: Real>(x: [f64; 3], alpha: f64, d: f64, k: f64) -> Result<CVec3<T>> {
    let [xa, y, zd] = displacement(x, alpha, d)?;
    let n2 = xa * xa + y * y + zd * zd;
    let n3 = n2 * n2.sqrt();
    let n4 = n2 * n2;
    let ik = [-y * y - zd * zd, xa * y, xa * zd];
    let re = [xa * xa - y * y - zd * zd, 2.0 * xa * y, 2.0 * xa * zd];
    Ok([0, 1, 2].map(|i| cplx(T::lit(-re[i] / n4), T::lit(k * ik[i] / n3))))
}

/// Tail vectors at a set of points for a set of source positions.
#[derive(Debug, Clone)]
pub struct TailVectors<T> {
    pub alphas: Vec<f64>,
    /// `tilde[point][alpha]`.
    pub tilde: Vec<Vec<CVec3<T>>>,
    pub hat: Vec<Vec<CVec3<T>>>,
}

pub fn tail_vectors<T: Real>(points: &[[f64; 3]], alphas: &[f64], d: f64, k: f64) -> Result<TailVectors<T>> {
    let mut tilde = Vec::with_capacity(points.len());
    let mut hat = Vec::with_capacity(points.len());
    for &x in points {
        tilde.push(alphas.iter().map(|&a| tail_tilde(x, a, d, k)).collect::<Result<Vec<_>>>()?);
        hat.push(alphas.iter().map(|&a| tail_hat(x, a, d, k)).collect::<Result<Vec<_>>>()?);
    }
    Ok(TailVectors { alphas: alphas.to_vec(), tilde, hat })
}

/// Cutoff equal to 1 at `z = -b` and vanishing for `z >= 0`.
pub fn chi(z: f64, b: f64) -> f64 {
    if z >= 0.0 {
        return 0.0;
    }
    let s = (z + b) * (z + b);
    (2.0 * s / (s - b * b)).exp()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LiftedHeader {
    pub n: usize,
    pub grid: Grid3,
}

/// `N` complex grid functions stored as `2N` real volumes in the order
/// `Re v_0, Im v_0, Re v_1, ...`, plus the Cauchy data on the bottom face.
#[derive(Debug, Clone, PartialEq)]
pub struct LiftedField<T> {
    pub n: usize,
    pub grid: Grid3,
    /// Flat storage, volume `c` occupies `c * grid.len() ..`.
    pub data: Vec<T>,
    /// `N` lateral grids of the Dirichlet data at `z = -b` (`y` fastest).
    pub psi0: Vec<Vec<Cplx<T>>>,
    /// `N` lateral grids of the `z`-derivative data.
    pub psi1: Vec<Vec<Cplx<T>>>,
}

impl<T: Real> LiftedField<T> {
    pub fn zeros(n: usize, grid: Grid3) -> Self {
        let lateral = grid.nx() * grid.ny();
        Self {
            n,
            grid,
            data: vec![T::zero(); 2 * n * grid.len()],
            psi0: vec![vec![czero(); lateral]; n],
            psi1: vec![vec![czero(); lateral]; n],
        }
    }

    #[inline]
    pub fn value(&self, comp: usize, i: usize) -> Cplx<T> {
        let len = self.grid.len();
        cplx(self.data[2 * comp * len + i], self.data[(2 * comp + 1) * len + i])
    }

    #[inline]
    pub fn set(&mut self, comp: usize, i: usize, v: Cplx<T>) {
        let len = self.grid.len();
        self.data[2 * comp * len + i] = v.re;
        self.data[(2 * comp + 1) * len + i] = v.im;
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    fn check(&self) -> Result<()> {
        let lateral = self.grid.nx() * self.grid.ny();
        if self.data.len() != 2 * self.n * self.grid.len()
            || self.psi0.len() != self.n
            || self.psi1.len() != self.n
            || self.psi0.iter().chain(&self.psi1).any(|g| g.len() != lateral)
        {
            return Err(Error::Shape("lifted field arrays do not match N and the grid".into()));
        }
        Ok(())
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.check()?;
        let header = serde_json::to_vec(&LiftedHeader { n: self.n, grid: self.grid })
            .map_err(|e| Error::Config(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for v in &self.data {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        for z in self.psi0.iter().chain(&self.psi1).flatten() {
            w.write_all(&z.re.as_f64().to_le_bytes())?;
            w.write_all(&z.im.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: "<lifted>".into(), reason };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut hbuf = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut hbuf)?;
        let h: LiftedHeader = serde_json::from_slice(&hbuf).map_err(|e| bad(e.to_string()))?;
        let mut next = || -> Result<T> {
            let mut b = [0u8; 8];
            r.read_exact(&mut b)?;
            Ok(T::lit(f64::from_le_bytes(b)))
        };
        let mut out = Self::zeros(h.n, h.grid);
        for v in out.data.iter_mut() {
            *v = next()?;
        }
        for z in out.psi0.iter_mut().chain(out.psi1.iter_mut()).flatten() {
            let re = next()?;
            *z = cplx(re, next()?);
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.write_to(BufWriter::new(File::create(path)?))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::read_from(BufReader::new(File::open(path)?)).map_err(|e| match e {
            Error::Format { reason, .. } => Error::Format { path: path.to_path_buf(), reason },
            other => other,
        })
    }
}

/// `v_n(x, y, z) = (psi0_n + psi1_n (z + b)) chi(z)`.
pub fn starting_point<T: Real>(psi0: &[Vec<Cplx<T>>], psi1: &[Vec<Cplx<T>>], grid: &Grid3) -> Result<LiftedField<T>> {
    let n = psi0.len();
    let mut out = LiftedField::zeros(n, *grid);
    out.psi0 = psi0.to_vec();
    out.psi1 = psi1.to_vec();
    out.check()?;
    for comp in 0..n {
        for p in 0..grid.nx() {
            for q in 0..grid.ny() {
                let lat = p * grid.ny() + q;
                for s in 0..grid.nz {
                    let z = grid.z(s);
                    let c = T::lit(chi(z, grid.b));
                    let v = (psi0[comp][lat] + psi1[comp][lat] * T::lit(z + grid.b)) * c;
                    out.set(comp, grid.idx(p, q, s), v);
                }
            }
        }
    }
    Ok(out)
}

/// Cauchy data on the bottom face from a preprocessed scattered sweep.
#[derive(Debug, Clone)]
pub struct BoundaryData<T> {
    pub psi0: Vec<Vec<Cplx<T>>>,
    pub psi1: Vec<Vec<Cplx<T>>>,
    /// Total number of floor-filled samples over all sources.
    pub filled: usize,
}

/// Resamples the near-field scattered data onto the lateral grid nodes, adds
/// the incident field, forms `v` and `dv/dz` per source and projects both.
pub fn boundary_data<T: Real>(near: &SourceSweepData<T>, grid: &Grid3, basis: &BasisSet<T>, floor: f64) -> Result<BoundaryData<T>> {
    near.validate()?;
    let f1 = near.f1.as_ref().ok_or_else(|| Error::Domain("near-field data lack the z-derivative".into()))?;
    if !near.background_subtracted {
        return Err(Error::Domain("boundary data expect the scattered field".into()));
    }
    if grid.nx() != grid.ny() {
        return Err(Error::Shape("lateral grid must be square".into()));
    }
    let n = grid.nx();
    let z = -grid.b;
    let k = T::lit(near.k);
    let mut v_all = Vec::with_capacity(near.alphas.len());
    let mut vz_all = Vec::with_capacity(near.alphas.len());
    let mut filled = 0;
    for (l, (g0, g1)) in near.f0.iter().zip(f1).enumerate() {
        let src = near.source_position(l).map(T::lit);
        let us = resample_to_lattice(g0, &near.plane, -grid.r, grid.h, n);
        let usz = resample_to_lattice(g1, &near.plane, -grid.r, grid.h, n);
        let mut u = Vec::with_capacity(n * n);
        let mut ui = Vec::with_capacity(n * n);
        let mut vz = Vec::with_capacity(n * n);
        for p in 0..n {
            for q in 0..n {
                let x = [grid.x(p), grid.y(q), z].map(T::lit);
                let inc = incident_field(x, src, k)?;
                let inc_z = incident_field_dz(x, src, k)?;
                let i = p * n + q;
                let tot = inc + us[i];
                u.push(tot);
                ui.push(inc);
                let ratio = if tot.norm() == T::zero() { czero() } else { (inc_z + usz[i]) / tot };
                vz.push(ratio - inc_z / inc);
            }
        }
        let lr = log_ratio(&u, &ui, n, n, floor)?;
        filled += lr.filled;
        v_all.push(lr.values);
        vz_all.push(vz);
    }
    Ok(BoundaryData {
        psi0: project_fourier(&v_all, &near.alphas, basis)?,
        psi1: project_fourier(&vz_all, &near.alphas, basis)?,
        filled,
    })
}
