//! Coefficients from the minimizer, post-processing, classification and
//! volume export.

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::basis::BasisSet;
use crate::convexification::derivatives_at;
use crate::domain::{Grid3, PhysicalConstants};
use crate::error::{Error, Result};
use crate::lift::{tail_tilde, LiftedField};
use crate::preprocess::{max_magnitude, truncate_field};
use crate::scalar::{czero, CVec3, Real};

pub const DEFAULT_COEFF_KAPPA: f64 = 0.2;
pub const ISO_FRACTION: f64 = 0.1;
pub const CONDUCTIVE_THRESHOLD: f64 = 1.0;

/// Raw `c` and `sigma` on the node grid. Nodes without a full stencil (the
/// lateral boundary and the bottom layer) keep the background `c = 1`,
/// `sigma = 0`.
pub fn extract_coefficients<T: Real>(
    v: &LiftedField<T>,
    basis: &BasisSet<T>,
    alphas: &[f64],
    source_depth: f64,
    k: f64,
    constants: &PhysicalConstants,
) -> Result<(Vec<T>, Vec<T>)> {
    if alphas.is_empty() {
        return Err(Error::Domain("extraction needs at least one source position".into()));
    }
    if v.n != basis.n() {
        return Err(Error::Shape("field and basis disagree on N".into()));
    }
    let g = v.grid;
    let psi: Vec<Vec<T>> = alphas.iter().map(|&a| (0..v.n).map(|m| basis.psi_at(m, a)).collect()).collect();
    let k2 = T::lit(k * k);
    let cond = T::lit(constants.conductivity_factor(k));
    let inv_l = T::lit(1.0 / alphas.len() as f64);
    let per_node: Vec<Result<(T, T)>> = (0..g.len())
        .into_par_iter()
        .map(|i| {
            let (p, q, s) = g.unidx(i);
            if !g.is_lateral_interior(p, q) || s == 0 {
                return Ok((T::one(), T::zero()));
            }
            let (grads, laps) = derivatives_at(v, p, q, s);
            let x = g.point(p, q, s);
            let (mut c_acc, mut s_acc) = (T::zero(), T::zero());
            for (l, &a) in alphas.iter().enumerate() {
                let mut gv: CVec3<T> = [czero(); 3];
                let mut lap = czero::<T>();
                for m in 0..v.n {
                    let w = psi[l][m];
                    lap += laps[m] * w;
                    for c in 0..3 {
                        gv[c] += grads[m][c] * w;
                    }
                }
                let tt: CVec3<T> = tail_tilde(x, a, source_depth, k)?;
                let mut e = lap;
                for c in 0..3 {
                    e += gv[c] * gv[c] + gv[c] * tt[c] * T::lit(2.0);
                }
                c_acc += (-e / k2).re.abs();
                s_acc += (-e / cond).im.abs();
            }
            Ok((c_acc * inv_l + T::one(), s_acc * inv_l))
        })
        .collect();
    let mut c = Vec::with_capacity(g.len());
    let mut sigma = Vec::with_capacity(g.len());
    for r in per_node {
        let (a, b) = r?;
        c.push(a);
        sigma.push(b);
    }
    Ok((c, sigma))
}

/// 3x3x3 box average, renormalized at the faces.
pub fn box_smooth3<T: Real>(f: &[T], g: &Grid3) -> Vec<T> {
    let (nx, ny, nz) = (g.nx() as isize, g.ny() as isize, g.nz as isize);
    (0..f.len())
        .into_par_iter()
        .map(|i| {
            let (p, q, s) = g.unidx(i);
            let (mut acc, mut cnt) = (T::zero(), 0usize);
            for dp in -1..=1isize {
                for dq in -1..=1isize {
                    for ds in -1..=1isize {
                        let (pp, qq, ss) = (p as isize + dp, q as isize + dq, s as isize + ds);
                        if pp < 0 || qq < 0 || ss < 0 || pp >= nx || qq >= ny || ss >= nz {
                            continue;
                        }
                        acc += f[g.idx(pp as usize, qq as usize, ss as usize)];
                        cnt += 1;
                    }
                }
            }
            acc / T::from_usize_lossy(cnt)
        })
        .collect()
}

/// Truncation, two box passes on `|.|`, and rescaling so the maximum of the
/// truncated grid is restored.
pub fn postprocess<T: Real>(raw: &[T], g: &Grid3, kappa1: f64) -> Result<Vec<T>> {
    if raw.len() != g.len() {
        return Err(Error::Shape("volume does not match the grid".into()));
    }
    let trunc: Vec<T> = truncate_field(raw, kappa1)?.into_iter().map(|v| v.abs()).collect();
    let before = max_magnitude(&trunc);
    if before == 0.0 {
        return Ok(trunc);
    }
    let sm = box_smooth3(&trunc, g);
    let after = max_magnitude(&sm);
    if after == 0.0 {
        return Ok(sm);
    }
    let rho = T::lit(before / after);
    Ok(sm.into_iter().map(|v| v * rho).collect())
}

/// Conductive iff the largest conductivity exceeds 1 S/m.
pub fn classify_conductive<T: Real>(sigma: &[T]) -> bool {
    sigma.iter().any(|s| s.as_f64() > CONDUCTIVE_THRESHOLD)
}

/// Bounding box and centroid of the nodes at or above a threshold.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Region {
    pub threshold: f64,
    pub nodes: usize,
    pub min: [f64; 3],
    pub max: [f64; 3],
    pub centroid: [f64; 3],
}

pub fn superlevel_region<T: Real>(f: &[T], g: &Grid3, fraction: f64) -> Option<Region> {
    let m = f.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    if !(m > 0.0) {
        return None;
    }
    let thr = fraction * m;
    let mut min = [f64::INFINITY; 3];
    let mut max = [f64::NEG_INFINITY; 3];
    let mut sum = [0.0; 3];
    let mut nodes = 0;
    for (i, v) in f.iter().enumerate() {
        if v.as_f64() < thr {
            continue;
        }
        let (p, q, s) = g.unidx(i);
        let x = g.point(p, q, s);
        for c in 0..3 {
            min[c] = min[c].min(x[c]);
            max[c] = max[c].max(x[c]);
            sum[c] += x[c];
        }
        nodes += 1;
    }
    Some(Region { threshold: thr, nodes, min, max, centroid: sum.map(|s| s / nodes as f64) })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub lambda: f64,
    pub theta: f64,
    pub n: usize,
    pub k: f64,
    pub grid: Grid3,
    pub iterations: usize,
}

#[derive(Debug, Clone)]
pub struct ReconstructionResult<T> {
    pub grid: Grid3,
    pub c_raw: Vec<T>,
    pub sigma_raw: Vec<T>,
    pub c_comp: Vec<T>,
    pub sigma_comp: Vec<T>,
    pub max_c: f64,
    pub max_sigma: f64,
    pub conductive: bool,
    pub c_region: Option<Region>,
    pub provenance: Provenance,
}

/// Post-processes both raw coefficients and gathers the summary numbers.
pub fn reconstruct<T: Real>(c_raw: Vec<T>, sigma_raw: Vec<T>, kappa1: f64, provenance: Provenance) -> Result<ReconstructionResult<T>> {
    let g = provenance.grid;
    let c_comp = postprocess(&c_raw, &g, kappa1)?;
    let sigma_comp = postprocess(&sigma_raw, &g, kappa1)?;
    let max_c = max_magnitude(&c_comp);
    let max_sigma = max_magnitude(&sigma_comp);
    let conductive = classify_conductive(&sigma_comp);
    let c_region = superlevel_region(&c_comp, &g, ISO_FRACTION);
    Ok(ReconstructionResult { grid: g, c_raw, sigma_raw, c_comp, sigma_comp, max_c, max_sigma, conductive, c_region, provenance })
}

impl<T: Real> ReconstructionResult<T> {
    pub fn summary_text(&self) -> String {
        let mut s = String::new();
        s.push_str(&format!("max c_comp      {:.4}\n", self.max_c));
        s.push_str(&format!("max sigma_comp  {:.4}\n", self.max_sigma));
        s.push_str(&format!("conductive      {}\n", self.conductive));
        if let Some(r) = &self.c_region {
            s.push_str(&format!(
                "c isovalue      {:.4}\nc bounding box  [{:.3}, {:.3}] x [{:.3}, {:.3}] x [{:.3}, {:.3}]\nc centroid      ({:.3}, {:.3}, {:.3})\n",
                r.threshold, r.min[0], r.max[0], r.min[1], r.max[1], r.min[2], r.max[2], r.centroid[0], r.centroid[1], r.centroid[2]
            ));
        }
        let p = &self.provenance;
        s.push_str(&format!(
            "lambda {} theta {} N {} k {} h {} iterations {}\n",
            p.lambda, p.theta, p.n, p.k, p.grid.h, p.iterations
        ));
        s
    }

    pub fn summary_csv(&self) -> String {
        let r = self.c_region;
        let f = |v: Option<f64>| v.map(|x| format!("{x}")).unwrap_or_default();
        format!(
            "max_c,max_sigma,conductive,xmin,xmax,ymin,ymax,zmin,zmax,cx,cy,cz\n{},{},{},{},{},{},{},{},{},{},{},{}\n",
            self.max_c,
            self.max_sigma,
            self.conductive,
            f(r.map(|r| r.min[0])),
            f(r.map(|r| r.max[0])),
            f(r.map(|r| r.min[1])),
            f(r.map(|r| r.max[1])),
            f(r.map(|r| r.min[2])),
            f(r.map(|r| r.max[2])),
            f(r.map(|r| r.centroid[0])),
            f(r.map(|r| r.centroid[1])),
            f(r.map(|r| r.centroid[2])),
        )
    }
}

/// Writes a legacy VTK structured-points file (big-endian doubles, `x`
/// fastest) and a sidecar `<path>.iso` holding the 10%-of-max isovalue.
pub fn export_volume<T: Real>(values: &[T], g: &Grid3, name: &str, path: &Path) -> Result<PathBuf> {
    if values.is_empty() || values.len() != g.len() {
        return Err(Error::Shape("cannot export an empty or mismatched volume".into()));
    }
    if values.iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite(format!("volume {name}")));
    }
    let mut w = BufWriter::new(File::create(path)?);
    write!(
        w,
        "# vtk DataFile Version 3.0\n{name}\nBINARY\nDATASET STRUCTURED_POINTS\nDIMENSIONS {} {} {}\nORIGIN {} {} {}\nSPACING {} {} {}\nPOINT_DATA {}\nSCALARS {name} double 1\nLOOKUP_TABLE default\n",
        g.nx(), g.ny(), g.nz, -g.r, -g.r, -g.b, g.h, g.h, g.h, g.len()
    )?;
    for s in 0..g.nz {
        for q in 0..g.ny() {
            for p in 0..g.nx() {
                w.write_all(&values[g.idx(p, q, s)].as_f64().to_be_bytes())?;
            }
        }
    }
    w.write_all(b"\n")?;
    w.flush()?;
    let max = values.iter().map(|v| v.as_f64()).fold(f64::NEG_INFINITY, f64::max);
    let side = sidecar_path(path);
    std::fs::write(&side, format!("isovalue {}\nmax {}\nfraction {}\n", ISO_FRACTION * max, max, ISO_FRACTION))?;
    Ok(side)
}

pub fn sidecar_path(path: &Path) -> PathBuf {
    let mut s = path.as_os_str().to_owned();
    s.push(".iso");
    PathBuf::from(s)
}

/// Reads a volume written by [`export_volume`] back into grid storage order.
pub fn read_volume(path: &Path) -> Result<(Grid3, Vec<f64>)> {
    if !path.exists() {
        return Err(Error::MissingInput(path.to_path_buf()));
    }
    let bad = |reason: &str| Error::Format { path: path.to_path_buf(), reason: reason.into() };
    let mut r = BufReader::new(File::open(path)?);
    let mut dims = None;
    let mut origin = None;
    let mut spacing = None;
    loop {
        let mut line = String::new();
        if r.read_line(&mut line)? == 0 {
            return Err(bad("unexpected end of header"));
        }
        let parts: Vec<&str> = line.split_whitespace().collect();
        let nums = |n: usize| -> Option<Vec<f64>> {
            (parts.len() == n + 1).then(|| parts[1..].iter().filter_map(|t| t.parse().ok()).collect::<Vec<f64>>()).filter(|v| v.len() == n)
        };
        match parts.first().copied() {
            Some("DIMENSIONS") => dims = nums(3),
            Some("ORIGIN") => origin = nums(3),
            Some("SPACING") => spacing = nums(3),
            Some("LOOKUP_TABLE") => break,
            _ => {}
        }
    }
    let (d, o, sp) = match (dims, origin, spacing) {
        (Some(d), Some(o), Some(s)) => (d, o, s),
        _ => return Err(bad("missing DIMENSIONS, ORIGIN or SPACING")),
    };
    let (nx, nz) = (d[0] as usize, d[2] as usize);
    if nx < 2 || d[1] as usize != nx {
        return Err(bad("lateral dimensions must be equal"));
    }
    let g = Grid3 { r: -o[0], b: -o[2], z_h: nx - 1, h: sp[0], nz };
    let mut vals = vec![0.0; g.len()];
    let mut b = [0u8; 8];
    for s in 0..g.nz {
        for q in 0..g.ny() {
            for p in 0..g.nx() {
                r.read_exact(&mut b)?;
                vals[g.idx(p, q, s)] = f64::from_be_bytes(b);
            }
        }
    }
    Ok((g, vals))
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn grid() -> Grid3 {
        Grid3 { r: 1.0, b: 1.0, z_h: 10, h: 0.2, nz: 11 }
    }

    #[test]
    fn constant_field_gives_background() {
        let g = grid();
        let basis = BasisSet::<f64>::build(0.1, 0.6, 3, 32).unwrap();
        let mut v = LiftedField::zeros(3, g);
        v.data.iter_mut().for_each(|x| *x = 0.4);
        let alphas = [0.1, 0.2, 0.3, 0.4, 0.5, 0.6];
        let (c, s) = extract_coefficients(&v, &basis, &alphas, 9.0, 8.51, &PhysicalConstants::default()).unwrap();
        for (a, b) in c.iter().zip(&s) {
            assert_abs_diff_eq!(*a, 1.0, epsilon = 1e-10);
            assert_abs_diff_eq!(*b, 0.0, epsilon = 1e-10);
        }
    }

    #[test]
    fn postprocess_preserves_maximum() {
        let g = grid();
        let mut f = vec![1.0; g.len()];
        f[g.idx(5, 5, 5)] = 10.0;
        f[g.idx(5, 6, 5)] = 8.0;
        let out = postprocess(&f, &g, DEFAULT_COEFF_KAPPA).unwrap();
        assert_abs_diff_eq!(max_magnitude(&out), 10.0, epsilon = 1e-12);
        let zero = vec![0.0; g.len()];
        assert_eq!(postprocess(&zero, &g, 0.2).unwrap(), zero);
        // support grows by at most two cells per axis and shrinks with kappa
        let loose = postprocess(&f, &g, 0.05).unwrap();
        let tight = postprocess(&f, &g, 0.5).unwrap();
        let supp = |v: &[f64]| v.iter().filter(|x| **x > 0.0).count();
        assert!(supp(&tight) <= supp(&loose));
    }

    #[test]
    fn classification_rule() {
        assert!(classify_conductive(&[0.1, 2.33]));
        assert!(!classify_conductive(&[0.94, 0.2]));
        assert!(!classify_conductive(&[0.0; 4]));
        let g = grid();
        let mut s = vec![0.0; g.len()];
        s[g.idx(4, 4, 4)] = 2.33;
        let p = postprocess(&s, &g, 0.2).unwrap();
        assert_eq!(classify_conductive(&p), classify_conductive(&s));
    }

    #[test]
    fn volume_roundtrip_and_isovalue() {
        let g = grid();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("c.vtk");
        let ones = vec![1.0f64; g.len()];
        let side = export_volume(&ones, &g, "c", &path).unwrap();
        let (g2, back) = read_volume(&path).unwrap();
        assert_eq!(g2.nx(), g.nx());
        assert_eq!(g2.nz, g.nz);
        assert!(back.iter().zip(&ones).all(|(a, b)| a.to_bits() == b.to_bits()));
        let mut ramp: Vec<f64> = (0..g.len()).map(|i| i as f64 * 0.01).collect();
        ramp[3] = 50.0;
        export_volume(&ramp, &g, "c", &path).unwrap();
        let text = std::fs::read_to_string(&side).unwrap();
        assert!(text.starts_with("isovalue 5\n"), "{text}");
        let (_, back) = read_volume(&path).unwrap();
        assert_eq!(back, ramp);
        assert!(export_volume::<f64>(&[], &g, "c", &path).is_err());
    }

    #[test]
    fn region_of_single_block() {
        let g = grid();
        let mut f = vec![0.0; g.len()];
        for p in 6..=7 {
            for q in 2..=3 {
                f[g.idx(p, q, 4)] = 3.0;
            }
        }
        let r = superlevel_region(&f, &g, 0.1).unwrap();
        assert_eq!(r.nodes, 4);
        assert_abs_diff_eq!(r.centroid[0], 0.3, epsilon = 1e-12);
        assert_abs_diff_eq!(r.centroid[1], -0.5, epsilon = 1e-12);
        assert_abs_diff_eq!(r.centroid[2], -0.2, epsilon = 1e-12);
    }
}
