//! File-based pipeline stages driven by one TOML configuration.

use std::fs::{self, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::basis::{BasisSet, DEFAULT_N, DEFAULT_QUAD_ORDER};
use crate::convexification::{
    CarlemanWeight, Convexifier, DescentOptions, DEFAULT_DJ_TOL, DEFAULT_GAMMA1, DEFAULT_GAMMA_MIN, DEFAULT_LAMBDA,
    DEFAULT_MAX_ITER,
};
use crate::domain::{
    make_grid, wavenumber_from_frequency, DomainBox, Grid3, MeasurementPlane, MediumModel, PhysicalConstants,
    SourceLine, DEFAULT_H0, ETA0, LENGTH_UNIT_M, WAVENUMBER_DIVISOR,
};
use crate::error::{Error, Result};
use crate::extract::{export_volume, extract_coefficients, reconstruct, Provenance, DEFAULT_COEFF_KAPPA};
use crate::forward::{synthesize_sweep, LippmannSchwinger, SolverOptions};
use crate::lift::{boundary_data, starting_point, LiftedField, DEFAULT_LOG_FLOOR};
use crate::preprocess::{preprocess_sweep, PreprocessOptions, DEFAULT_DATA_KAPPA, DEFAULT_PAD_FACTOR};
use crate::sweep::{add_noise, SourceSweepData};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DomainSection {
    pub r: f64,
    pub b: f64,
    /// Defaults to `1.25 b`.
    pub theta: Option<f64>,
}

impl Default for DomainSection {
    fn default() -> Self {
        Self { r: 5.0, b: 2.0, theta: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SourcesSection {
    pub d: f64,
    pub a1: f64,
    pub a2: f64,
    pub step: f64,
}

impl Default for SourcesSection {
    fn default() -> Self {
        Self { d: 9.0, a1: 0.1, a2: 0.6, step: 0.1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MeasurementSection {
    pub z: f64,
    pub half_width: f64,
    pub n: usize,
}

impl Default for MeasurementSection {
    fn default() -> Self {
        Self { z: -14.0, half_width: 5.0, n: 50 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSection {
    pub z_h: usize,
    pub h0: f64,
}

impl Default for GridSection {
    fn default() -> Self {
        Self { z_h: 50, h0: DEFAULT_H0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct WaveSection {
    /// Dimensionless wavenumber; ignored when `frequency_hz` is set.
    pub k: f64,
    pub frequency_hz: Option<f64>,
}

impl Default for WaveSection {
    fn default() -> Self {
        Self { k: 8.51, frequency_hz: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConstantsSection {
    pub eta0: f64,
    pub wavenumber_divisor: f64,
    pub length_unit_m: f64,
}

impl Default for ConstantsSection {
    fn default() -> Self {
        Self { eta0: ETA0, wavenumber_divisor: WAVENUMBER_DIVISOR, length_unit_m: LENGTH_UNIT_M }
    }
}

/// Axis-aligned box inclusion.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BoxTarget {
    pub center: [f64; 3],
    pub size: [f64; 3],
    pub c: f64,
    #[serde(default)]
    pub sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ForwardSection {
    pub tol: f64,
    pub born_max_iter: usize,
    pub gmres_restart: usize,
    pub gmres_max_iter: usize,
}

impl Default for ForwardSection {
    fn default() -> Self {
        let d = SolverOptions::default();
        Self { tol: d.tol, born_max_iter: d.born_max_iter, gmres_restart: d.gmres_restart, gmres_max_iter: d.gmres_max_iter }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PreprocessSection {
    pub kappa1: f64,
    pub pad_factor: usize,
    pub smooth: bool,
    /// Near-field plane; defaults to `z = -b`.
    pub target_z: Option<f64>,
}

impl Default for PreprocessSection {
    fn default() -> Self {
        Self { kappa1: DEFAULT_DATA_KAPPA, pad_factor: DEFAULT_PAD_FACTOR, smooth: true, target_z: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct InversionSection {
    pub n: usize,
    pub quad_order: usize,
    pub lambda: f64,
    pub gamma1: f64,
    pub gamma_min: f64,
    pub dj_tol: f64,
    pub max_iter: usize,
    pub ball_radius: Option<f64>,
    pub checkpoint_every: Option<usize>,
    pub log_floor: f64,
}

impl Default for InversionSection {
    fn default() -> Self {
        Self {
            n: DEFAULT_N,
            quad_order: DEFAULT_QUAD_ORDER,
            lambda: DEFAULT_LAMBDA,
            gamma1: DEFAULT_GAMMA1,
            gamma_min: DEFAULT_GAMMA_MIN,
            dj_tol: DEFAULT_DJ_TOL,
            max_iter: DEFAULT_MAX_ITER,
            ball_radius: None,
            checkpoint_every: None,
            log_floor: DEFAULT_LOG_FLOOR,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExtractSection {
    pub kappa1: f64,
}

impl Default for ExtractSection {
    fn default() -> Self {
        Self { kappa1: DEFAULT_COEFF_KAPPA }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunSection {
    pub out_dir: PathBuf,
    pub noise: f64,
    pub seed: u64,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { out_dir: PathBuf::from("run"), noise: 0.0, seed: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub domain: DomainSection,
    pub sources: SourcesSection,
    pub measurement: MeasurementSection,
    pub grid: GridSection,
    pub wave: WaveSection,
    pub constants: ConstantsSection,
    pub targets: Vec<BoxTarget>,
    pub forward: ForwardSection,
    pub preprocess: PreprocessSection,
    pub inversion: InversionSection,
    pub extract: ExtractSection,
    pub run: RunSection,
}

impl PipelineConfig {
    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(Error::MissingInput(path.to_path_buf()));
        }
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    pub fn domain_box(&self) -> Result<DomainBox> {
        match self.domain.theta {
            Some(t) => DomainBox::new(self.domain.r, self.domain.b, t),
            None => DomainBox::with_default_theta(self.domain.r, self.domain.b),
        }
    }

    pub fn grid3(&self) -> Result<Grid3> {
        make_grid(&self.domain_box()?, self.grid.z_h, self.grid.h0)
    }

    pub fn source_line(&self) -> Result<SourceLine> {
        let s = SourceLine::new(self.sources.d, self.sources.a1, self.sources.a2, self.sources.step)?;
        s.validate_against(&self.domain_box()?)?;
        Ok(s)
    }

    pub fn plane(&self) -> Result<MeasurementPlane> {
        MeasurementPlane::new(self.measurement.z, self.measurement.half_width, self.measurement.n)
    }

    pub fn physical_constants(&self) -> PhysicalConstants {
        PhysicalConstants {
            eta0: self.constants.eta0,
            wavenumber_divisor: self.constants.wavenumber_divisor,
            length_unit_m: self.constants.length_unit_m,
        }
    }

    pub fn wavenumber(&self) -> Result<f64> {
        match self.wave.frequency_hz {
            Some(f) => {
                let k = wavenumber_from_frequency(f)?;
                Ok(k * WAVENUMBER_DIVISOR / self.constants.wavenumber_divisor)
            }
            None => Ok(self.wave.k),
        }
    }

    pub fn medium(&self) -> Result<MediumModel<f64>> {
        let grid = self.grid3()?;
        let mut m = MediumModel::homogeneous(grid);
        for t in &self.targets {
            let inc = MediumModel::with_box_inclusion(grid, t.center, t.size, t.c, t.sigma)?;
            for i in 0..grid.len() {
                if inc.c[i] != 1.0 || inc.sigma[i] != 0.0 {
                    m.c[i] = inc.c[i];
                    m.sigma[i] = inc.sigma[i];
                }
            }
        }
        m.validate()?;
        Ok(m)
    }

    pub fn paths(&self) -> Paths {
        Paths::new(&self.run.out_dir)
    }

    /// Sanity checks that do not need any file.
    pub fn validate(&self) -> Result<()> {
        let grid = self.grid3()?;
        self.source_line()?;
        self.plane()?;
        if !(self.wavenumber()? > 0.0) {
            return Err(Error::Config("wavenumber must be positive".into()));
        }
        if self.inversion.n == 0 {
            return Err(Error::Config("inversion.n must be at least 1".into()));
        }
        if !(self.run.noise >= 0.0) {
            return Err(Error::Config("run.noise must be non-negative".into()));
        }
        CarlemanWeight::new(&grid, self.inversion.lambda, self.domain_box()?.theta())?;
        Ok(())
    }
}

/// Artifact locations inside the output directory.
#[derive(Debug, Clone)]
pub struct Paths {
    pub dir: PathBuf,
}

impl Paths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }
    pub fn medium(&self) -> PathBuf {
        self.dir.join("medium.bin")
    }
    pub fn raw_total(&self) -> PathBuf {
        self.dir.join("raw_total.sweep")
    }
    pub fn raw_scattered(&self) -> PathBuf {
        self.dir.join("raw_scattered.sweep")
    }
    pub fn propagated(&self) -> PathBuf {
        self.dir.join("near_propagated.sweep")
    }
    pub fn near(&self) -> PathBuf {
        self.dir.join("near_truncated.sweep")
    }
    pub fn lifted_start(&self) -> PathBuf {
        self.dir.join("lifted_start.lifted")
    }
    pub fn lifted_min(&self) -> PathBuf {
        self.dir.join("lifted_min.lifted")
    }
    pub fn descent_log(&self) -> PathBuf {
        self.dir.join("descent.csv")
    }
    pub fn checkpoints(&self) -> PathBuf {
        self.dir.join("checkpoints")
    }
    pub fn c_volume(&self) -> PathBuf {
        self.dir.join("c_comp.vtk")
    }
    pub fn sigma_volume(&self) -> PathBuf {
        self.dir.join("sigma_comp.vtk")
    }
    pub fn summary_text(&self) -> PathBuf {
        self.dir.join("summary.txt")
    }
    pub fn summary_csv(&self) -> PathBuf {
        self.dir.join("summary.csv")
    }
    pub fn report(&self) -> PathBuf {
        self.dir.join("report.jsonl")
    }
}

fn require(path: &Path) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingInput(path.to_path_buf()))
    }
}

/// One line of the run report.
#[derive(Debug, Clone, Serialize)]
pub struct ReportEntry<'a> {
    pub stage: &'a str,
    pub wall_seconds: f64,
    pub details: serde_json::Value,
    pub config: &'a PipelineConfig,
}

fn append_report(cfg: &PipelineConfig, stage: &str, started: Instant, details: serde_json::Value) -> Result<()> {
    let entry = ReportEntry { stage, wall_seconds: started.elapsed().as_secs_f64(), details, config: cfg };
    let line = serde_json::to_string(&entry).map_err(|e| Error::Config(e.to_string()))?;
    let mut f = OpenOptions::new().create(true).append(true).open(cfg.paths().report())?;
    writeln!(f, "{line}")?;
    Ok(())
}

#[derive(Debug, Clone, Serialize)]
pub struct SimulateOutcome {
    pub sources: usize,
    pub samples_per_source: usize,
    pub support_nodes: usize,
    pub max_relative_residual: f64,
}

/// Forward solves for every source; writes the medium, the total sweep and
/// the (noisy) background-subtracted sweep.
pub fn run_simulate(cfg: &PipelineConfig) -> Result<SimulateOutcome> {
    let t0 = Instant::now();
    cfg.validate()?;
    let paths = cfg.paths();
    fs::create_dir_all(&paths.dir)?;
    let medium = cfg.medium()?;
    let k = cfg.wavenumber()?;
    let solver = LippmannSchwinger::new(&medium, k, &cfg.physical_constants())?;
    let opts = SolverOptions {
        tol: cfg.forward.tol,
        born_max_iter: cfg.forward.born_max_iter,
        gmres_restart: cfg.forward.gmres_restart,
        gmres_max_iter: cfg.forward.gmres_max_iter,
        ..SolverOptions::default()
    };
    log::info!("simulate: {} contrast nodes, k = {k}", solver.support().len());
    let sweep = synthesize_sweep(&solver, &cfg.source_line()?, &cfg.plane()?, &opts)?;
    let scattered = add_noise(&sweep.scattered, cfg.run.noise, cfg.run.seed)?;
    medium.write_to(BufWriter::new(fs::File::create(paths.medium())?))?;
    sweep.total.save(&paths.raw_total())?;
    scattered.save(&paths.raw_scattered())?;
    let out = SimulateOutcome {
        sources: scattered.alphas.len(),
        samples_per_source: scattered.plane.len(),
        support_nodes: solver.support().len(),
        max_relative_residual: sweep.solutions.iter().map(|s| s.relative_residual).fold(0.0, f64::max),
    };
    append_report(cfg, "simulate", t0, serde_json::to_value(&out).unwrap_or_default())?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct PreprocessOutcome {
    pub target_z: f64,
    pub max_near_field: f64,
}

pub fn run_preprocess(cfg: &PipelineConfig) -> Result<PreprocessOutcome> {
    let t0 = Instant::now();
    let paths = cfg.paths();
    require(&paths.raw_scattered())?;
    let raw = SourceSweepData::<f64>::load(&paths.raw_scattered())?;
    let target_z = cfg.preprocess.target_z.unwrap_or(-cfg.domain.b);
    let opts = PreprocessOptions {
        kappa1: cfg.preprocess.kappa1,
        pad_factor: cfg.preprocess.pad_factor,
        smooth: cfg.preprocess.smooth,
    };
    let near = preprocess_sweep(&raw, target_z, &opts)?;
    near.propagated.save(&paths.propagated())?;
    near.truncated.save(&paths.near())?;
    let out = PreprocessOutcome {
        target_z,
        max_near_field: near.truncated.f0.iter().flatten().map(|z| z.norm()).fold(0.0, f64::max),
    };
    append_report(cfg, "preprocess", t0, serde_json::to_value(&out).unwrap_or_default())?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct InvertOutcome {
    pub filled_samples: usize,
    pub j_initial: f64,
    pub j_final: f64,
    pub iterations: usize,
    pub accepted: usize,
    pub stop: String,
    pub lambda: f64,
    pub weight_is_constant: bool,
}

pub fn run_invert(cfg: &PipelineConfig) -> Result<InvertOutcome> {
    let t0 = Instant::now();
    let paths = cfg.paths();
    require(&paths.near())?;
    let near = SourceSweepData::<f64>::load(&paths.near())?;
    let grid = cfg.grid3()?;
    let dbox = cfg.domain_box()?;
    let basis = BasisSet::<f64>::build(cfg.sources.a1, cfg.sources.a2, cfg.inversion.n, cfg.inversion.quad_order)?;
    let bd = boundary_data(&near, &grid, &basis, cfg.inversion.log_floor)?;
    let v0 = starting_point(&bd.psi0, &bd.psi1, &grid)?;
    v0.save(&paths.lifted_start())?;
    let weight = CarlemanWeight::new(&grid, cfg.inversion.lambda, dbox.theta())?;
    let weight_is_constant = weight.values.iter().all(|w| *w == 1.0);
    let cv = Convexifier::new(&basis, near.k, near.source_depth, weight, &v0)?;
    let ckdir = paths.checkpoints();
    if cfg.inversion.checkpoint_every.is_some() {
        fs::create_dir_all(&ckdir)?;
    }
    let opts = DescentOptions {
        gamma1: cfg.inversion.gamma1,
        gamma_min: cfg.inversion.gamma_min,
        dj_tol: cfg.inversion.dj_tol,
        max_iter: cfg.inversion.max_iter,
        ball_radius: cfg.inversion.ball_radius,
        checkpoint_every: cfg.inversion.checkpoint_every,
        checkpoint_dir: Some(ckdir),
    };
    let res = cv.minimize(&v0, &opts)?;
    log::info!("invert: J {:.4e} -> {:.4e} after {} steps ({:?})", res.j_initial, res.j_final, res.log.len(), res.stop);
    res.field.save(&paths.lifted_min())?;
    res.write_log_csv(BufWriter::new(fs::File::create(paths.descent_log())?))?;
    let out = InvertOutcome {
        filled_samples: bd.filled,
        j_initial: res.j_initial,
        j_final: res.j_final,
        iterations: res.log.len(),
        accepted: res.log.iter().filter(|r| r.accepted).count(),
        stop: format!("{:?}", res.stop),
        lambda: cfg.inversion.lambda,
        weight_is_constant,
    };
    append_report(cfg, "invert", t0, serde_json::to_value(&out).unwrap_or_default())?;
    Ok(out)
}

#[derive(Debug, Clone, Serialize)]
pub struct ExtractOutcome {
    pub max_c: f64,
    pub max_sigma: f64,
    pub conductive: bool,
    pub c_centroid: Option<[f64; 3]>,
    pub c_box_min: Option<[f64; 3]>,
    pub c_box_max: Option<[f64; 3]>,
}

pub fn run_extract(cfg: &PipelineConfig) -> Result<ExtractOutcome> {
    let t0 = Instant::now();
    let paths = cfg.paths();
    require(&paths.lifted_min())?;
    require(&paths.near())?;
    let near = SourceSweepData::<f64>::load(&paths.near())?;
    let v = LiftedField::<f64>::load(&paths.lifted_min())?;
    let basis = BasisSet::<f64>::build(cfg.sources.a1, cfg.sources.a2, v.n, cfg.inversion.quad_order)?;
    let (c_raw, s_raw) =
        extract_coefficients(&v, &basis, &near.alphas, near.source_depth, near.k, &cfg.physical_constants())?;
    let iterations = count_descent_rows(&paths.descent_log());
    let prov = Provenance {
        lambda: cfg.inversion.lambda,
        theta: cfg.domain_box()?.theta(),
        n: v.n,
        k: near.k,
        grid: v.grid,
        iterations,
    };
    let rec = reconstruct(c_raw, s_raw, cfg.extract.kappa1, prov)?;
    export_volume(&rec.c_comp, &rec.grid, "c_comp", &paths.c_volume())?;
    export_volume(&rec.sigma_comp, &rec.grid, "sigma_comp", &paths.sigma_volume())?;
    fs::write(paths.summary_text(), rec.summary_text())?;
    fs::write(paths.summary_csv(), rec.summary_csv())?;
    let out = ExtractOutcome {
        max_c: rec.max_c,
        max_sigma: rec.max_sigma,
        conductive: rec.conductive,
        c_centroid: rec.c_region.map(|r| r.centroid),
        c_box_min: rec.c_region.map(|r| r.min),
        c_box_max: rec.c_region.map(|r| r.max),
    };
    append_report(cfg, "extract", t0, serde_json::to_value(&out).unwrap_or_default())?;
    Ok(out)
}

fn count_descent_rows(path: &Path) -> usize {
    fs::read_to_string(path).map(|s| s.lines().count().saturating_sub(1)).unwrap_or(0)
}

#[derive(Debug, Clone, Serialize)]
pub struct PipelineOutcome {
    pub simulate: SimulateOutcome,
    pub preprocess: PreprocessOutcome,
    pub invert: InvertOutcome,
    pub extract: ExtractOutcome,
}

pub fn run_pipeline(cfg: &PipelineConfig) -> Result<PipelineOutcome> {
    Ok(PipelineOutcome {
        simulate: run_simulate(cfg)?,
        preprocess: run_preprocess(cfg)?,
        invert: run_invert(cfg)?,
        extract: run_extract(cfg)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_follow_published_values() {
        let c = PipelineConfig::default();
        assert_eq!(c.inversion.lambda, 1.1);
        assert_eq!(c.inversion.gamma1, 0.1);
        assert_eq!(c.inversion.gamma_min, 1e-10);
        assert_eq!(c.inversion.dj_tol, 1e-10);
        assert_eq!(c.preprocess.kappa1, 0.4);
        assert_eq!(c.extract.kappa1, 0.2);
        assert_eq!(c.constants.eta0, 377.0);
        assert_eq!(c.source_line().unwrap().count(), 6);
        assert_eq!(c.plane().unwrap().points().len(), 2500);
        c.validate().unwrap();
    }

    #[test]
    fn unknown_key_is_named() {
        let err = PipelineConfig::from_toml_str("[inversion]\nlambdaa = 2.0\n").unwrap_err();
        assert!(err.to_string().contains("lambdaa"), "{err}");
        let err = PipelineConfig::from_toml_str("bogus = 1\n").unwrap_err();
        assert!(err.to_string().contains("bogus"), "{err}");
    }

    #[test]
    fn toml_roundtrip() {
        let mut c = PipelineConfig::default();
        c.targets.push(BoxTarget { center: [1.0, 0.6, -1.0], size: [1.0; 3], c: 10.0, sigma: 0.5 });
        c.domain.theta = Some(3.0);
        let back = PipelineConfig::from_toml_str(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn missing_stage_input_is_reported() {
        let dir = tempfile::tempdir().unwrap();
        let mut c = PipelineConfig::default();
        c.run.out_dir = dir.path().to_path_buf();
        match run_invert(&c) {
            Err(Error::MissingInput(p)) => assert!(p.ends_with("near_truncated.sweep")),
            other => panic!("unexpected {other:?}"),
        }
    }
}
