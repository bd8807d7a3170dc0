//! Geometry, grids, physical constants and the medium description.
//!
//! Lengths are dimensionless (1 unit = 10 cm). Frequencies are in Hz.

use std::io::{Read, Write};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::Real;

/// Impedance of free space in S^-1.
pub const ETA0: f64 = 377.0;
/// Divisor turning `2 pi f` (Hz) into the dimensionless wavenumber.
pub const WAVENUMBER_DIVISOR: f64 = 2_997_924_580.0;
/// One dimensionless length unit in metres.
pub const LENGTH_UNIT_M: f64 = 0.1;
/// Default lower bound on the grid spacing.
pub const DEFAULT_H0: f64 = 0.05;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PhysicalConstants {
    pub eta0: f64,
    pub wavenumber_divisor: f64,
    /// Conversion of conductivity in S/m into the dimensionless equation.
    pub length_unit_m: f64,
}

impl Default for PhysicalConstants {
    fn default() -> Self {
        Self { eta0: ETA0, wavenumber_divisor: WAVENUMBER_DIVISOR, length_unit_m: LENGTH_UNIT_M }
    }
}

impl PhysicalConstants {
    /// Coefficient multiplying `sigma` in the imaginary part of the contrast,
    /// i.e. `k^2 (c - 1) - i * conductivity_factor(k) * sigma`.
    pub fn conductivity_factor(&self, k: f64) -> f64 {
        self.length_unit_m * k * self.eta0
    }
}

/// `k = 2 pi f / 2 997 924 580`.
pub fn wavenumber_from_frequency(f_hz: f64) -> Result<f64> {
    if !(f_hz >= 0.0) {
        return Err(Error::Domain(format!("frequency must be non-negative, got {f_hz}")));
    }
    Ok(2.0 * std::f64::consts::PI * f_hz / WAVENUMBER_DIVISOR)
}

/// The prism `(-R, R) x (-R, R) x (-b, b)` and the Carleman pseudo-center `theta`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DomainBox {
    r: f64,
    b: f64,
    theta: f64,
}

impl DomainBox {
    pub fn new(r: f64, b: f64, theta: f64) -> Result<Self> {
        if !(r > 0.0 && b > 0.0) {
            return Err(Error::Config(format!("domain half-sizes must be positive (R={r}, b={b})")));
        }
        if !(theta > b) {
            return Err(Error::Config(format!("theta = {theta} must exceed b = {b}")));
        }
        Ok(Self { r, b, theta })
    }

    /// `theta` defaults to `1.25 b`.
    pub fn with_default_theta(r: f64, b: f64) -> Result<Self> {
        Self::new(r, b, 1.25 * b)
    }

    pub fn r(&self) -> f64 {
        self.r
    }
    pub fn b(&self) -> f64 {
        self.b
    }
    pub fn theta(&self) -> f64 {
        self.theta
    }
}

/// Point sources `(alpha, 0, -d)` for `alpha` in `[a1, a2]` with uniform spacing.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SourceLine {
    d: f64,
    a1: f64,
    a2: f64,
    step: f64,
}

impl SourceLine {
    pub fn new(d: f64, a1: f64, a2: f64, step: f64) -> Result<Self> {
        if !(a1 < a2) || !(step > 0.0) {
            return Err(Error::Config(format!("bad source line a1={a1}, a2={a2}, step={step}")));
        }
        let n = (a2 - a1) / step;
        if (n - n.round()).abs() > 1e-9 * n.max(1.0) {
            return Err(Error::Config(format!(
                "(a2 - a1) / step = {n} is not a whole number"
            )));
        }
        if !d.is_finite() {
            return Err(Error::Config("source depth must be finite".into()));
        }
        Ok(Self { d, a1, a2, step })
    }

    /// Checks `d > b`, i.e. the line lies outside the closed domain.
    pub fn validate_against(&self, domain: &DomainBox) -> Result<()> {
        if !(self.d > domain.b()) {
            return Err(Error::Config(format!(
                "source depth d = {} must exceed b = {}",
                self.d,
                domain.b()
            )));
        }
        Ok(())
    }

    pub fn d(&self) -> f64 {
        self.d
    }
    pub fn a1(&self) -> f64 {
        self.a1
    }
    pub fn a2(&self) -> f64 {
        self.a2
    }
    pub fn step(&self) -> f64 {
        self.step
    }

    pub fn count(&self) -> usize {
        ((self.a2 - self.a1) / self.step).round() as usize + 1
    }

    pub fn alphas(&self) -> Vec<f64> {
        let n = self.count();
        (0..n).map(|i| if i + 1 == n { self.a2 } else { self.a1 + i as f64 * self.step }).collect()
    }

    pub fn position(&self, alpha: f64) -> [f64; 3] {
        [alpha, 0.0, -self.d]
    }
}

/// Square detector aperture in the plane `z = z_meas`, sampled cell-centered:
/// `x_j = -half_width + (j + 1/2) * spacing` with `spacing = 2 half_width / n`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeasurementPlane {
    z_meas: f64,
    half_width: f64,
    n_detectors: usize,
}

impl MeasurementPlane {
    pub fn new(z_meas: f64, half_width: f64, n_detectors: usize) -> Result<Self> {
        if n_detectors < 2 || !(half_width > 0.0) {
            return Err(Error::Config(format!(
                "measurement plane needs n_detectors >= 2 and half_width > 0 (got {n_detectors}, {half_width})"
            )));
        }
        Ok(Self { z_meas, half_width, n_detectors })
    }

    pub fn z(&self) -> f64 {
        self.z_meas
    }
    pub fn half_width(&self) -> f64 {
        self.half_width
    }
    pub fn n(&self) -> usize {
        self.n_detectors
    }
    pub fn spacing(&self) -> f64 {
        2.0 * self.half_width / self.n_detectors as f64
    }
    pub fn coord(&self, j: usize) -> f64 {
        -self.half_width + (j as f64 + 0.5) * self.spacing()
    }
    pub fn coords(&self) -> Vec<f64> {
        (0..self.n_detectors).map(|j| self.coord(j)).collect()
    }

    /// Sample points in row-major order (`x` slow, `y` fast).
    pub fn points(&self) -> Vec<[f64; 3]> {
        let c = self.coords();
        let mut out = Vec::with_capacity(c.len() * c.len());
        for &x in &c {
            for &y in &c {
                out.push([x, y, self.z_meas]);
            }
        }
        out
    }
}

/// Uniform node grid over the closed prism with identical spacing on all axes.
///
/// Nodes are `x_p = -R + p h`, `y_q = -R + q h` for `p, q in 0..=z_h` and
/// `z_s = -b + s h` for `s in 0..=nz-1`. Storage is column major: `z` varies
/// fastest, then `y`, then `x`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Grid3 {
    pub r: f64,
    pub b: f64,
    pub z_h: usize,
    pub h: f64,
    pub nz: usize,
}

impl Grid3 {
    #[inline]
    pub fn nx(&self) -> usize {
        self.z_h + 1
    }
    #[inline]
    pub fn ny(&self) -> usize {
        self.z_h + 1
    }
    #[inline]
    pub fn len(&self) -> usize {
        self.nx() * self.ny() * self.nz
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    #[inline]
    pub fn idx(&self, p: usize, q: usize, s: usize) -> usize {
        (p * self.ny() + q) * self.nz + s
    }
    #[inline]
    pub fn unidx(&self, i: usize) -> (usize, usize, usize) {
        let s = i % self.nz;
        let pq = i / self.nz;
        (pq / self.ny(), pq % self.ny(), s)
    }
    #[inline]
    pub fn x(&self, p: usize) -> f64 {
        -self.r + p as f64 * self.h
    }
    #[inline]
    pub fn y(&self, q: usize) -> f64 {
        -self.r + q as f64 * self.h
    }
    #[inline]
    pub fn z(&self, s: usize) -> f64 {
        -self.b + s as f64 * self.h
    }
    pub fn point(&self, p: usize, q: usize, s: usize) -> [f64; 3] {
        [self.x(p), self.y(q), self.z(s)]
    }
    /// Index of the top layer `z = b`.
    pub fn top(&self) -> usize {
        self.nz - 1
    }
    pub fn is_lateral_interior(&self, p: usize, q: usize) -> bool {
        p >= 1 && q >= 1 && p + 1 < self.nx() && q + 1 < self.ny()
    }
    /// True on the outermost shell of nodes.
    pub fn is_shell(&self, p: usize, q: usize, s: usize) -> bool {
        p == 0 || q == 0 || s == 0 || p + 1 == self.nx() || q + 1 == self.ny() || s + 1 == self.nz
    }
}

/// Builds the uniform grid with `z_h` subdivisions of `[-R, R]`.
pub fn make_grid(domain: &DomainBox, z_h: usize, h0: f64) -> Result<Grid3> {
    if z_h < 2 {
        return Err(Error::Config(format!("Z_h must be at least 2, got {z_h}")));
    }
    let h = 2.0 * domain.r() / z_h as f64;
    if h < h0 {
        return Err(Error::SpacingFloor { h, h0 });
    }
    let nz_f = 2.0 * domain.b() / h;
    let nz_cells = nz_f.round();
    if (nz_f - nz_cells).abs() > 1e-9 * nz_f.max(1.0) || nz_cells < 2.0 {
        return Err(Error::Config(format!(
            "2b / h = {nz_f} must be a whole number >= 2 for a uniform grid"
        )));
    }
    Ok(Grid3 { r: domain.r(), b: domain.b(), z_h, h, nz: nz_cells as usize + 1 })
}

/// Dielectric constant and conductivity (S/m) sampled at the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct MediumModel<T> {
    pub grid: Grid3,
    pub c: Vec<T>,
    pub sigma: Vec<T>,
}

impl<T: Real> MediumModel<T> {
    pub fn homogeneous(grid: Grid3) -> Self {
        Self { grid, c: vec![T::one(); grid.len()], sigma: vec![T::zero(); grid.len()] }
    }

    pub fn from_parts(grid: Grid3, c: Vec<T>, sigma: Vec<T>) -> Result<Self> {
        let m = Self { grid, c, sigma };
        m.validate()?;
        Ok(m)
    }

    /// Homogeneous background with an axis-aligned box inclusion. Nodes with
    /// every coordinate strictly inside `center +- size/2` take the inclusion values.
    pub fn with_box_inclusion(
        grid: Grid3,
        center: [f64; 3],
        size: [f64; 3],
        c_in: f64,
        sigma_in: f64,
    ) -> Result<Self> {
        let mut m = Self::homogeneous(grid);
        for p in 0..grid.nx() {
            for q in 0..grid.ny() {
                for s in 0..grid.nz {
                    let x = grid.point(p, q, s);
                    let inside = (0..3).all(|a| (x[a] - center[a]).abs() < 0.5 * size[a] - 1e-12);
                    if inside {
                        let i = grid.idx(p, q, s);
                        m.c[i] = T::lit(c_in);
                        m.sigma[i] = T::lit(sigma_in);
                    }
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    /// `c >= 1`, `sigma >= 0` inside; vacuum values on the outermost shell.
    pub fn validate(&self) -> Result<()> {
        let g = &self.grid;
        if self.c.len() != g.len() || self.sigma.len() != g.len() {
            return Err(Error::Shape("medium arrays do not match the grid".into()));
        }
        for p in 0..g.nx() {
            for q in 0..g.ny() {
                for s in 0..g.nz {
                    let i = g.idx(p, q, s);
                    let (c, sg) = (self.c[i], self.sigma[i]);
                    if !c.is_finite() || !sg.is_finite() || c < T::one() || sg < T::zero() {
                        return Err(Error::Domain(format!(
                            "medium violates c >= 1, sigma >= 0 at node ({p}, {q}, {s})"
                        )));
                    }
                    if g.is_shell(p, q, s) && (c != T::one() || sg != T::zero()) {
                        return Err(Error::Domain(format!(
                            "contrast touches the boundary shell at node ({p}, {q}, {s})"
                        )));
                    }
                }
            }
        }
        Ok(())
    }

    /// True where the node carries non-vacuum values.
    pub fn support(&self) -> Vec<usize> {
        (0..self.grid.len())
            .filter(|&i| self.c[i] != T::one() || self.sigma[i] != T::zero())
            .collect()
    }

    /// Writes `MEDIUM01`, the JSON grid header, then `c` and `sigma` as LE f64.
    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        let header = serde_json::to_vec(&self.grid).map_err(|e| Error::Config(e.to_string()))?;
        w.write_all(b"MEDIUM01")?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        for v in self.c.iter().chain(self.sigma.iter()) {
            w.write_all(&v.as_f64().to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: &str| Error::Format { path: "<medium>".into(), reason: reason.into() };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != b"MEDIUM01" {
            return Err(bad("bad magic"));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut header = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut header)?;
        let grid: Grid3 = serde_json::from_slice(&header).map_err(|e| bad(&e.to_string()))?;
        let n = grid.len();
        let mut vals = Vec::with_capacity(2 * n);
        let mut buf = [0u8; 8];
        for _ in 0..2 * n {
            r.read_exact(&mut buf)?;
            vals.push(T::lit(f64::from_le_bytes(buf)));
        }
        let sigma = vals.split_off(n);
        Ok(Self { grid, c: vals, sigma })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn wavenumbers_of_the_first_two_examples() {
        assert_abs_diff_eq!(wavenumber_from_frequency(4.06e9).unwrap(), 8.51, epsilon = 0.01);
        assert_abs_diff_eq!(wavenumber_from_frequency(3.16e9).unwrap(), 6.62, epsilon = 0.01);
        assert_eq!(wavenumber_from_frequency(0.0).unwrap(), 0.0);
        assert!(wavenumber_from_frequency(-1.0).is_err());
    }

    #[test]
    fn grid_spacing() {
        let d = DomainBox::with_default_theta(5.0, 2.0).unwrap();
        let g = make_grid(&d, 50, DEFAULT_H0).unwrap();
        assert_abs_diff_eq!(g.h, 0.2, epsilon = 1e-15);
        assert_eq!(g.nz, 21);
        for p in 1..g.nx() {
            assert_abs_diff_eq!(g.x(p) - g.x(p - 1), g.h, epsilon = 1e-12);
            assert_abs_diff_eq!(g.y(p) - g.y(p - 1), g.h, epsilon = 1e-12);
        }
        let d1 = DomainBox::with_default_theta(1.0, 1.0).unwrap();
        assert_eq!(make_grid(&d1, 2, DEFAULT_H0).unwrap().h, 1.0);
        match make_grid(&d, 1_000_000, 0.05) {
            Err(Error::SpacingFloor { .. }) => {}
            other => panic!("expected floor violation, got {other:?}"),
        }
    }

    #[test]
    fn theta_must_exceed_b() {
        assert!(DomainBox::new(5.0, 2.0, 2.0).is_err());
        assert!(DomainBox::new(5.0, 2.0, 1.0).is_err());
        assert!(DomainBox::new(5.0, 2.0, 2.01).is_ok());
        assert_eq!(DomainBox::with_default_theta(5.0, 2.0).unwrap().theta(), 2.5);
    }

    #[test]
    fn source_line_positions() {
        let s = SourceLine::new(9.0, 0.1, 0.6, 0.1).unwrap();
        assert_eq!(s.count(), 6);
        assert_eq!(s.alphas().last().copied(), Some(0.6));
        assert!(SourceLine::new(9.0, 0.1, 0.65, 0.1).is_err());
        let d = DomainBox::with_default_theta(5.0, 2.0).unwrap();
        assert!(SourceLine::new(1.0, 0.1, 0.6, 0.1).unwrap().validate_against(&d).is_err());
    }

    #[test]
    fn plane_samples() {
        let m = MeasurementPlane::new(-14.0, 5.0, 50).unwrap();
        assert_eq!(m.points().len(), 2500);
        assert_abs_diff_eq!(m.spacing(), 0.2, epsilon = 1e-15);
        assert!(MeasurementPlane::new(-14.0, 5.0, 1).is_err());
    }

    #[test]
    fn vacuum_medium_roundtrip_is_bit_exact() {
        let d = DomainBox::with_default_theta(1.0, 1.0).unwrap();
        let g = make_grid(&d, 4, DEFAULT_H0).unwrap();
        let m = MediumModel::<f64>::homogeneous(g);
        let mut buf = Vec::new();
        m.write_to(&mut buf).unwrap();
        let back = MediumModel::<f64>::read_from(buf.as_slice()).unwrap();
        assert_eq!(m, back);
    }

    #[test]
    fn inclusion_on_shell_rejected() {
        let d = DomainBox::with_default_theta(1.0, 1.0).unwrap();
        let g = make_grid(&d, 4, DEFAULT_H0).unwrap();
        assert!(MediumModel::<f64>::with_box_inclusion(g, [0.0; 3], [0.6; 3], 4.0, 0.0).is_ok());
        assert!(MediumModel::<f64>::with_box_inclusion(g, [0.0; 3], [3.0; 3], 4.0, 0.0).is_err());
    }
}
