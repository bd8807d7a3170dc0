//! Per-source complex plane data and its on-disk formats.
//!
//! Binary layout (all integers and floats little-endian):
//!
//! ```text
//! b"CWFSWEEP"            magic
//! u64                    header length in bytes
//! [u8; len]              JSON header (SweepHeader)
//! per source: nx*ny      (re, im) f64 pairs of F0, row-major (x slow, y fast)
//! per source: nx*ny      (re, im) f64 pairs of F1, only if header.has_f1
//! ```

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::scalar::{Cplx, Real};

const MAGIC: &[u8; 8] = b"CWFSWEEP";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stage {
    Raw,
    Propagated,
    Truncated,
}

/// Lateral sample layout of a plane `z = const`: `x_i = x0 + i * spacing`,
/// `y_j = y0 + j * spacing`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlaneGeometry {
    pub z: f64,
    pub nx: usize,
    pub ny: usize,
    pub x0: f64,
    pub y0: f64,
    pub spacing: f64,
}

impl PlaneGeometry {
    pub fn len(&self) -> usize {
        self.nx * self.ny
    }
    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
    pub fn x(&self, i: usize) -> f64 {
        self.x0 + i as f64 * self.spacing
    }
    pub fn y(&self, j: usize) -> f64 {
        self.y0 + j as f64 * self.spacing
    }
    pub fn points(&self) -> Vec<[f64; 3]> {
        let mut out = Vec::with_capacity(self.len());
        for i in 0..self.nx {
            for j in 0..self.ny {
                out.push([self.x(i), self.y(j), self.z]);
            }
        }
        out
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepHeader {
    pub k: f64,
    pub alphas: Vec<f64>,
    pub source_depth: f64,
    pub plane: PlaneGeometry,
    pub stage: Stage,
    /// True once the incident field has been removed.
    pub background_subtracted: bool,
    pub has_f1: bool,
}

/// One complex plane grid of `F0` (and optionally `F1 = d/dz`) per source.
#[derive(Debug, Clone, PartialEq)]
pub struct SourceSweepData<T> {
    pub k: f64,
    pub alphas: Vec<f64>,
    pub source_depth: f64,
    pub plane: PlaneGeometry,
    pub stage: Stage,
    pub background_subtracted: bool,
    pub f0: Vec<Vec<Cplx<T>>>,
    pub f1: Option<Vec<Vec<Cplx<T>>>>,
}

impl<T: Real> SourceSweepData<T> {
    pub fn validate(&self) -> Result<()> {
        let n = self.plane.len();
        if self.f0.len() != self.alphas.len() || self.f0.iter().any(|g| g.len() != n) {
            return Err(Error::Shape("F0 grids do not match the plane and source list".into()));
        }
        if let Some(f1) = &self.f1 {
            if f1.len() != self.alphas.len() || f1.iter().any(|g| g.len() != n) {
                return Err(Error::Shape("F1 grids do not match F0".into()));
            }
        }
        Ok(())
    }

    pub fn header(&self) -> SweepHeader {
        SweepHeader {
            k: self.k,
            alphas: self.alphas.clone(),
            source_depth: self.source_depth,
            plane: self.plane,
            stage: self.stage,
            background_subtracted: self.background_subtracted,
            has_f1: self.f1.is_some(),
        }
    }

    pub fn source_position(&self, l: usize) -> [f64; 3] {
        [self.alphas[l], 0.0, -self.source_depth]
    }

    pub fn write_to<W: Write>(&self, mut w: W) -> Result<()> {
        self.validate()?;
        let header = serde_json::to_vec(&self.header()).map_err(|e| Error::Config(e.to_string()))?;
        w.write_all(MAGIC)?;
        w.write_all(&(header.len() as u64).to_le_bytes())?;
        w.write_all(&header)?;
        let grids = self.f0.iter().chain(self.f1.iter().flatten());
        for g in grids {
            for z in g {
                w.write_all(&z.re.as_f64().to_le_bytes())?;
                w.write_all(&z.im.as_f64().to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_from<R: Read>(mut r: R) -> Result<Self> {
        let bad = |reason: String| Error::Format { path: "<sweep>".into(), reason };
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic)?;
        if &magic != MAGIC {
            return Err(bad("bad magic".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let mut hbuf = vec![0u8; u64::from_le_bytes(len) as usize];
        r.read_exact(&mut hbuf)?;
        let h: SweepHeader = serde_json::from_slice(&hbuf).map_err(|e| bad(e.to_string()))?;
        let read_grid = |r: &mut R| -> Result<Vec<Cplx<T>>> {
            let mut g = Vec::with_capacity(h.plane.len());
            let mut b = [0u8; 16];
            for _ in 0..h.plane.len() {
                r.read_exact(&mut b)?;
                let re = f64::from_le_bytes(b[..8].try_into().expect("8 bytes"));
                let im = f64::from_le_bytes(b[8..].try_into().expect("8 bytes"));
                g.push(Cplx::new(T::lit(re), T::lit(im)));
            }
            Ok(g)
        };
        let f0 = (0..h.alphas.len()).map(|_| read_grid(&mut r)).collect::<Result<Vec<_>>>()?;
        let f1 = if h.has_f1 {
            Some((0..h.alphas.len()).map(|_| read_grid(&mut r)).collect::<Result<Vec<_>>>()?)
        } else {
            None
        };
        let out = Self {
            k: h.k,
            alphas: h.alphas,
            source_depth: h.source_depth,
            plane: h.plane,
            stage: h.stage,
            background_subtracted: h.background_subtracted,
            f0,
            f1,
        };
        out.validate()?;
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

    /// `x,y,alpha,re,im` rows of `F0` for inspection.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "x,y,alpha,re,im")?;
        for (l, g) in self.f0.iter().enumerate() {
            for i in 0..self.plane.nx {
                for j in 0..self.plane.ny {
                    let z = g[i * self.plane.ny + j];
                    writeln!(
                        w,
                        "{},{},{},{:e},{:e}",
                        self.plane.x(i),
                        self.plane.y(j),
                        self.alphas[l],
                        z.re.as_f64(),
                        z.im.as_f64()
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Multiplies every sample by `1 + delta * xi`, `xi ~ U[-1, 1]`, drawn from a
/// ChaCha stream seeded with `seed` in storage order (F0 grids, then F1).
pub fn add_noise<T: Real>(sweep: &SourceSweepData<T>, delta: f64, seed: u64) -> Result<SourceSweepData<T>> {
    if !(delta >= 0.0) {
        return Err(Error::Domain(format!("noise level must be non-negative, got {delta}")));
    }
    let mut out = sweep.clone();
    if delta == 0.0 {
        return Ok(out);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let d = T::lit(delta);
    let grids = out.f0.iter_mut().chain(out.f1.iter_mut().flatten());
    for g in grids {
        for z in g.iter_mut() {
            let xi = T::lit(rng.gen_range(-1.0..=1.0));
            *z = *z * (T::one() + d * xi);
        }
    }
    Ok(out)
}
