//! Near-field data from far-field sweeps: angular-spectrum continuation,
//! amplitude truncation and Gaussian smoothing with max retrieval.

use std::sync::Arc;

use rayon::prelude::*;
use rustfft::{Fft, FftPlanner};

use crate::error::{Error, Result};
use crate::scalar::{cplx, czero, Cplx, Real};
use crate::sweep::{PlaneGeometry, SourceSweepData, Stage};

pub const DEFAULT_DATA_KAPPA: f64 = 0.4;
pub const DEFAULT_PAD_FACTOR: usize = 2;

/// Direction in which the recorded waves travel along `z`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Travel {
    PlusZ,
    /// Backscattered waves moving from the target towards the detectors.
    MinusZ,
}

#[derive(Debug, Clone, Copy)]
pub struct PropagationSpec {
    pub from_z: f64,
    pub to_z: f64,
    pub k: f64,
    pub spacing: f64,
    pub travel: Travel,
    /// Zero-padding factor applied before the transforms (1 = none).
    pub pad_factor: usize,
}

impl PropagationSpec {
    pub fn check(&self) -> Result<()> {
        let limit = std::f64::consts::PI / self.k;
        if !(self.k > 0.0) || !(self.spacing > 0.0) {
            return Err(Error::Domain("propagation needs k > 0 and positive spacing".into()));
        }
        if self.spacing > limit {
            return Err(Error::Nyquist { h: self.spacing, limit });
        }
        if self.pad_factor == 0 {
            return Err(Error::Config("pad_factor must be at least 1".into()));
        }
        Ok(())
    }

    fn sign(&self) -> f64 {
        match self.travel {
            Travel::PlusZ => 1.0,
            Travel::MinusZ => -1.0,
        }
    }
}

/// 2-D FFT helper for an `n x n` complex grid stored row-major.
struct Fft2<T: Real> {
    n: usize,
    fwd: Arc<dyn Fft<T>>,
    inv: Arc<dyn Fft<T>>,
}

impl<T: Real> Fft2<T> {
    fn new(n: usize) -> Self {
        let mut planner = FftPlanner::new();
        Self { n, fwd: planner.plan_fft_forward(n), inv: planner.plan_fft_inverse(n) }
    }

    fn run(&self, data: &mut [Cplx<T>], inverse: bool) {
        let n = self.n;
        let plan = if inverse { &self.inv } else { &self.fwd };
        for row in data.chunks_mut(n) {
            plan.process(row);
        }
        let mut col = vec![czero::<T>(); n];
        for j in 0..n {
            for i in 0..n {
                col[i] = data[i * n + j];
            }
            plan.process(&mut col);
            for i in 0..n {
                data[i * n + j] = col[i];
            }
        }
        if inverse {
            let scale = T::one() / T::from_usize_lossy(n * n);
            for z in data.iter_mut() {
                *z = *z * scale;
            }
        }
    }
}

/// Angular frequency of FFT bin `m` on a grid of `n` samples with spacing `h`.
fn wavenumber_of_bin(m: usize, n: usize, h: f64) -> f64 {
    let signed = if m <= n / 2 { m as f64 } else { m as f64 - n as f64 };
    2.0 * std::f64::consts::PI * signed / (n as f64 * h)
}

/// Applies a per-mode multiplier in the (padded) spectral domain.
fn spectral_map<T: Real, F>(field: &[Cplx<T>], n: usize, spec: &PropagationSpec, mode: F) -> Result<Vec<Cplx<T>>>
where
    F: Fn(f64) -> Option<Cplx<f64>>,
{
    spec.check()?;
    if field.len() != n * n {
        return Err(Error::Shape(format!("expected a square {n}x{n} grid, got {} samples", field.len())));
    }
    let np = n * spec.pad_factor;
    let mut buf = vec![czero::<T>(); np * np];
    for i in 0..n {
        buf[i * np..i * np + n].copy_from_slice(&field[i * n..(i + 1) * n]);
    }
    let fft = Fft2::<T>::new(np);
    fft.run(&mut buf, false);
    let k2 = spec.k * spec.k;
    for a in 0..np {
        let kx = wavenumber_of_bin(a, np, spec.spacing);
        for b in 0..np {
            let ky = wavenumber_of_bin(b, np, spec.spacing);
            let kt2 = kx * kx + ky * ky;
            let z = &mut buf[a * np + b];
            *z = if kt2 <= k2 {
                match mode((k2 - kt2).sqrt()) {
                    Some(f) => *z * cplx(T::lit(f.re), T::lit(f.im)),
                    None => czero(),
                }
            } else {
                czero()
            };
        }
    }
    fft.run(&mut buf, true);
    let mut out = Vec::with_capacity(n * n);
    for i in 0..n {
        out.extend_from_slice(&buf[i * np..i * np + n]);
    }
    Ok(out)
}

/// Continues the field from `spec.from_z` to `spec.to_z`. Propagating modes
/// are multiplied by `exp(i s k_z dz)` (`s = +-1` from the travel direction);
/// evanescent modes are dropped.
pub fn propagate_plane<T: Real>(field: &[Cplx<T>], n: usize, spec: &PropagationSpec) -> Result<Vec<Cplx<T>>> {
    let dz = spec.sign() * (spec.to_z - spec.from_z);
    spectral_map(field, n, spec, |kz| Some(num_complex::Complex::from_polar(1.0, kz * dz)))
}

/// `d/dz` of the continued field at `spec.to_z`.
pub fn propagate_derivative<T: Real>(field: &[Cplx<T>], n: usize, spec: &PropagationSpec) -> Result<Vec<Cplx<T>>> {
    let s = spec.sign();
    let dz = s * (spec.to_z - spec.from_z);
    spectral_map(field, n, spec, |kz| {
        Some(num_complex::Complex::from_polar(1.0, kz * dz) * num_complex::Complex::new(0.0, s * kz))
    })
}

/// Magnitude access for real and complex samples.
pub trait Magnitude: Copy + Send + Sync {
    fn magnitude(&self) -> f64;
    fn zeroed() -> Self;
    fn scaled(self, f: f64) -> Self;
}

impl<T: Real> Magnitude for T {
    fn magnitude(&self) -> f64 {
        self.abs().as_f64()
    }
    fn zeroed() -> Self {
        T::zero()
    }
    fn scaled(self, f: f64) -> Self {
        self * T::lit(f)
    }
}

impl<T: Real> Magnitude for Cplx<T> {
    fn magnitude(&self) -> f64 {
        self.norm().as_f64()
    }
    fn zeroed() -> Self {
        czero()
    }
    fn scaled(self, f: f64) -> Self {
        self * T::lit(f)
    }
}

pub fn max_magnitude<S: Magnitude>(field: &[S]) -> f64 {
    field.iter().map(|v| v.magnitude()).fold(0.0, f64::max)
}

/// Zeroes samples with `|value| < kappa1 * max |value|`.
pub fn truncate_field<S: Magnitude>(field: &[S], kappa1: f64) -> Result<Vec<S>> {
    Ok(truncate_with_mask(field, kappa1)?.0)
}

/// Truncated field and the mask of retained samples.
pub fn truncate_with_mask<S: Magnitude>(field: &[S], kappa1: f64) -> Result<(Vec<S>, Vec<bool>)> {
    if !(0.0..=1.0).contains(&kappa1) {
        return Err(Error::Domain(format!("truncation fraction must lie in [0, 1], got {kappa1}")));
    }
    let thr = kappa1 * max_magnitude(field);
    let mask: Vec<bool> = field.iter().map(|v| v.magnitude() >= thr).collect();
    let out = field.iter().zip(&mask).map(|(&v, &keep)| if keep { v } else { S::zeroed() }).collect();
    Ok((out, mask))
}

/// 5-tap Gaussian with unit standard deviation.
fn gauss5() -> [f64; 5] {
    let w: Vec<f64> = (-2i32..=2).map(|i| (-0.5 * (i * i) as f64).exp()).collect();
    [w[0], w[1], w[2], w[3], w[4]]
}

/// Separable 5x5 Gaussian blur of an `nx x ny` grid, renormalized near the
/// edges, followed by rescaling with `max|input| / max|blurred|` so the
/// global maximum magnitude is restored. An all-zero grid is returned as is.
pub fn smooth_and_retrieve<T: Real>(field: &[Cplx<T>], nx: usize, ny: usize) -> Result<Vec<Cplx<T>>> {
    if field.is_empty() || field.len() != nx * ny {
        return Err(Error::Shape(format!("smoothing expects {nx}x{ny} samples, got {}", field.len())));
    }
    let before = max_magnitude(field);
    if before == 0.0 {
        return Ok(field.to_vec());
    }
    let w = gauss5();
    let blur_axis = |src: &[Cplx<T>], along_x: bool| -> Vec<Cplx<T>> {
        let mut out = vec![czero::<T>(); src.len()];
        for i in 0..nx {
            for j in 0..ny {
                let (mut acc, mut wsum) = (czero::<T>(), 0.0);
                for (t, &wt) in w.iter().enumerate() {
                    let off = t as isize - 2;
                    let (ii, jj) = if along_x { (i as isize + off, j as isize) } else { (i as isize, j as isize + off) };
                    if ii < 0 || jj < 0 || ii >= nx as isize || jj >= ny as isize {
                        continue;
                    }
                    acc += src[ii as usize * ny + jj as usize] * T::lit(wt);
                    wsum += wt;
                }
                out[i * ny + j] = acc / T::lit(wsum);
            }
        }
        out
    };
    let smoothed = blur_axis(&blur_axis(field, true), false);
    let after = max_magnitude(&smoothed);
    if after == 0.0 {
        return Ok(smoothed);
    }
    let kappa2 = T::lit(before / after);
    Ok(smoothed.into_iter().map(|z| z * kappa2).collect())
}

/// Bilinear resampling of plane data onto the lattice `x0 + i h`, `i < n`
/// (same for `y`). Points outside the data footprint use the nearest edge.
pub fn resample_to_lattice<T: Real>(
    data: &[Cplx<T>],
    geom: &PlaneGeometry,
    x0: f64,
    h: f64,
    n: usize,
) -> Vec<Cplx<T>> {
    let locate = |x: f64, start: f64, m: usize| -> (usize, f64) {
        let t = ((x - start) / geom.spacing).clamp(0.0, (m - 1) as f64);
        let i = (t.floor() as usize).min(m.saturating_sub(2));
        (i, t - i as f64)
    };
    let mut out = Vec::with_capacity(n * n);
    for p in 0..n {
        let (i, fx) = locate(x0 + p as f64 * h, geom.x0, geom.nx);
        for q in 0..n {
            let (j, fy) = locate(x0 + q as f64 * h, geom.y0, geom.ny);
            let at = |a: usize, b: usize| data[a.min(geom.nx - 1) * geom.ny + b.min(geom.ny - 1)];
            let (fx_t, fy_t) = (T::lit(fx), T::lit(fy));
            let one = T::one();
            let v = at(i, j) * ((one - fx_t) * (one - fy_t))
                + at(i + 1, j) * (fx_t * (one - fy_t))
                + at(i, j + 1) * ((one - fx_t) * fy_t)
                + at(i + 1, j + 1) * (fx_t * fy_t);
            out.push(v);
        }
    }
    out
}

#[derive(Debug, Clone, Copy)]
pub struct PreprocessOptions {
    pub kappa1: f64,
    pub pad_factor: usize,
    pub smooth: bool,
}

impl Default for PreprocessOptions {
    fn default() -> Self {
        Self { kappa1: DEFAULT_DATA_KAPPA, pad_factor: DEFAULT_PAD_FACTOR, smooth: true }
    }
}

/// Stage output of [`preprocess_sweep`].
#[derive(Debug, Clone)]
pub struct NearField<T> {
    pub propagated: SourceSweepData<T>,
    pub truncated: SourceSweepData<T>,
}

/// Propagates each background-subtracted far-field grid to `target_z`
/// (values and `z`-derivative), truncates with the mask of `F0`, smooths both
/// with max retrieval, and keeps the original lateral sampling.
pub fn preprocess_sweep<T: Real>(
    sweep: &SourceSweepData<T>,
    target_z: f64,
    opts: &PreprocessOptions,
) -> Result<NearField<T>> {
    sweep.validate()?;
    if sweep.plane.nx != sweep.plane.ny {
        return Err(Error::Shape("propagation requires a square aperture".into()));
    }
    let n = sweep.plane.nx;
    let spec = PropagationSpec {
        from_z: sweep.plane.z,
        to_z: target_z,
        k: sweep.k,
        spacing: sweep.plane.spacing,
        travel: Travel::MinusZ,
        pad_factor: opts.pad_factor,
    };
    spec.check()?;
    let per_source: Vec<Result<_>> = sweep
        .f0
        .par_iter()
        .map(|g| {
            let f0 = propagate_plane(g, n, &spec)?;
            let f1 = propagate_derivative(g, n, &spec)?;
            let (t0, mask) = truncate_with_mask(&f0, opts.kappa1)?;
            let t1: Vec<Cplx<T>> =
                f1.iter().zip(&mask).map(|(&z, &keep)| if keep { z } else { czero() }).collect();
            let (s0, s1) = if opts.smooth {
                (smooth_and_retrieve(&t0, n, n)?, smooth_and_retrieve(&t1, n, n)?)
            } else {
                (t0, t1)
            };
            Ok((f0, f1, s0, s1))
        })
        .collect();
    let mut parts = Vec::with_capacity(per_source.len());
    for r in per_source {
        parts.push(r?);
    }
    let mut plane = sweep.plane;
    plane.z = target_z;
    let base = SourceSweepData {
        k: sweep.k,
        alphas: sweep.alphas.clone(),
        source_depth: sweep.source_depth,
        plane,
        stage: Stage::Propagated,
        background_subtracted: sweep.background_subtracted,
        f0: parts.iter().map(|p| p.0.clone()).collect(),
        f1: Some(parts.iter().map(|p| p.1.clone()).collect()),
    };
    let truncated = SourceSweepData {
        stage: Stage::Truncated,
        f0: parts.iter().map(|p| p.2.clone()).collect(),
        f1: Some(parts.iter().map(|p| p.3.clone()).collect()),
        ..base.clone()
    };
    Ok(NearField { propagated: base, truncated })
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    type C = Cplx<f64>;

    fn spec(dz: f64, pad: usize) -> PropagationSpec {
        PropagationSpec { from_z: 0.0, to_z: dz, k: 8.51, spacing: 0.2, travel: Travel::PlusZ, pad_factor: pad }
    }

    #[test]
    fn plane_wave_is_an_eigenfunction() {
        let (k, z0, dz, n) = (8.51, -0.3, 1.7, 16);
        let field = vec![C::from_polar(1.0, k * z0); n * n];
        let out = propagate_plane(&field, n, &spec(dz, 1)).unwrap();
        let d = propagate_derivative(&field, n, &spec(dz, 1)).unwrap();
        let want = C::from_polar(1.0, k * (z0 + dz));
        for (o, dd) in out.iter().zip(&d) {
            assert!((o - want).norm() < 1e-6);
            assert!((dd - C::new(0.0, k) * want).norm() < 1e-6 * k);
        }
    }

    #[test]
    fn zero_in_zero_out() {
        let z = vec![C::new(0.0, 0.0); 64];
        assert!(propagate_plane(&z, 8, &spec(1.0, 2)).unwrap().iter().all(|v| v.norm() == 0.0));
        assert!(propagate_derivative(&z, 8, &spec(1.0, 2)).unwrap().iter().all(|v| v.norm() == 0.0));
    }

    #[test]
    fn nyquist_guard() {
        let mut s = spec(1.0, 1);
        s.spacing = 0.5;
        let z = vec![C::new(1.0, 0.0); 4];
        assert!(matches!(propagate_plane(&z, 2, &s), Err(Error::Nyquist { .. })));
    }

    #[test]
    fn truncation_rule() {
        let f = [3.0f64, 5.0, 10.0];
        assert_eq!(truncate_field(&f, 0.4).unwrap(), vec![0.0, 5.0, 10.0]);
        assert_eq!(truncate_field(&f, 0.0).unwrap(), f.to_vec());
        let once = truncate_field(&f, 0.4).unwrap();
        assert_eq!(truncate_field(&once, 0.4).unwrap(), once);
        assert!(truncate_field(&f, 1.5).is_err());
    }

    #[test]
    fn smoothing_edge_cases() {
        let c = vec![C::new(2.0, -1.0); 49];
        let out = smooth_and_retrieve(&c, 7, 7).unwrap();
        for z in &out {
            assert_abs_diff_eq!(z.re, 2.0, epsilon = 1e-14);
            assert_abs_diff_eq!(z.im, -1.0, epsilon = 1e-14);
        }
        let mut spike = vec![C::new(0.0, 0.0); 81];
        spike[40] = C::new(3.0, 4.0);
        let out = smooth_and_retrieve(&spike, 9, 9).unwrap();
        assert_abs_diff_eq!(max_magnitude(&out), 5.0, epsilon = 1e-14);
        let (imax, _) = out
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.norm().total_cmp(&b.1.norm()))
            .unwrap();
        assert_eq!(imax, 40);
        for (i, z) in out.iter().enumerate() {
            let (r, c) = (i / 9, i % 9);
            if (r as i32 - 4).abs() > 2 || (c as i32 - 4).abs() > 2 {
                assert_eq!(z.norm(), 0.0);
            }
        }
        let zero = vec![C::new(0.0, 0.0); 9];
        assert_eq!(smooth_and_retrieve(&zero, 3, 3).unwrap(), zero);
    }

    /// Explicit DFT band-pass on an unpadded `n x n` grid.
    fn band_pass_oracle(f: &[C], n: usize, h: f64, k: f64) -> Vec<C> {
        let tau = 2.0 * std::f64::consts::PI;
        let mut out = vec![C::new(0.0, 0.0); n * n];
        for a in 0..n {
            for b in 0..n {
                let (kx, ky) = (wavenumber_of_bin(a, n, h), wavenumber_of_bin(b, n, h));
                if kx * kx + ky * ky > k * k {
                    continue;
                }
                let mut c = C::new(0.0, 0.0);
                for i in 0..n {
                    for j in 0..n {
                        c += f[i * n + j] * C::from_polar(1.0, -tau * ((a * i + b * j) as f64) / n as f64);
                    }
                }
                for i in 0..n {
                    for j in 0..n {
                        out[i * n + j] +=
                            c * C::from_polar(1.0, tau * ((a * i + b * j) as f64) / n as f64) / (n * n) as f64;
                    }
                }
            }
        }
        out
    }

    proptest::proptest! {
        #![proptest_config(proptest::prelude::ProptestConfig::with_cases(12))]
        #[test]
        fn round_trip_is_band_projection(
            vals in proptest::collection::vec((-1.0f64..1.0, -1.0f64..1.0), 100),
            dz in 0.1f64..3.0,
        ) {
            let n = 10;
            let f: Vec<C> = vals.iter().map(|&(a, b)| C::new(a, b)).collect();
            let fw = spec(dz, 1);
            let mut bw = fw;
            bw.from_z = dz;
            bw.to_z = 0.0;
            let there = propagate_plane(&f, n, &fw).unwrap();
            let back = propagate_plane(&there, n, &bw).unwrap();
            let band = band_pass_oracle(&f, n, 0.2, 8.51);
            let norm = |v: &[C]| v.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
            let diff: Vec<C> = back.iter().zip(&band).map(|(a, b)| a - b).collect();
            proptest::prop_assert!(norm(&diff) <= 1e-10 * norm(&f).max(1.0));
            proptest::prop_assert!((norm(&there) - norm(&band)).abs() <= 1e-10 * norm(&f).max(1.0));
        }
    }

    #[test]
    fn resample_identity_on_matching_lattice() {
        let geom = PlaneGeometry { z: 0.0, nx: 4, ny: 4, x0: -1.0, y0: -1.0, spacing: 0.5 };
        let data: Vec<C> = (0..16).map(|i| C::new(i as f64, 0.0)).collect();
        let out = resample_to_lattice(&data, &geom, -1.0, 0.5, 4);
        for (a, b) in out.iter().zip(&data) {
            assert_abs_diff_eq!(a.re, b.re, epsilon = 1e-12);
        }
    }
}
