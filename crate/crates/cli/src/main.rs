use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use clap::{Args, Parser, Subcommand};
use cwf_inversion::pipeline::{self, PipelineConfig};

const DEMO_CONFIG: &str = include_str!("../demo.toml");

#[derive(Parser, Debug)]
#[command(name = "cwfi", version, about = "Convexification inversion of buried-target backscatter data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Forward solves for every source; writes raw sweeps.
    Simulate(Common),
    /// Propagation to the near-field plane, truncation, smoothing.
    Preprocess(Common),
    /// Minimizes the weighted functional from the data-driven starting point.
    Invert(Common),
    /// Coefficients, post-processing, VTK volumes and summary.
    Extract(Common),
    /// All four stages in order.
    Pipeline(Common),
    /// Prints the bundled demo configuration.
    DemoConfig,
}

#[derive(Args, Debug)]
struct Common {
    /// TOML configuration; the bundled demo is used when omitted.
    #[arg(short, long)]
    config: Option<PathBuf>,
    #[arg(long)]
    out_dir: Option<PathBuf>,
    #[arg(long)]
    lambda: Option<f64>,
    #[arg(long)]
    theta: Option<f64>,
    /// Number of basis functions.
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    k: Option<f64>,
    #[arg(long)]
    frequency_hz: Option<f64>,
    #[arg(long)]
    z_h: Option<usize>,
    #[arg(long)]
    max_iter: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Generic override, e.g. `--set inversion.gamma1=0.05`. Repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    sets: Vec<String>,
    #[arg(short, long)]
    verbose: bool,
}

impl Common {
    fn config(&self) -> Result<PipelineConfig> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).with_context(|| format!("reading {}", p.display()))?,
            None => DEMO_CONFIG.to_string(),
        };
        let mut table: toml::Table = text.parse().context("parsing configuration")?;
        for s in &self.sets {
            let (key, value) = s.split_once('=').with_context(|| format!("--set expects KEY=VALUE, got {s:?}"))?;
            set_key(&mut table, key.trim(), parse_value(value.trim()))?;
        }
        let mut cfg = PipelineConfig::from_toml_str(&table.to_string())?;
        if let Some(v) = &self.out_dir {
            cfg.run.out_dir = v.clone();
        }
        if let Some(v) = self.lambda {
            cfg.inversion.lambda = v;
        }
        if let Some(v) = self.theta {
            cfg.domain.theta = Some(v);
        }
        if let Some(v) = self.n {
            cfg.inversion.n = v;
        }
        if let Some(v) = self.k {
            cfg.wave.k = v;
            cfg.wave.frequency_hz = None;
        }
        if let Some(v) = self.frequency_hz {
            cfg.wave.frequency_hz = Some(v);
        }
        if let Some(v) = self.z_h {
            cfg.grid.z_h = v;
        }
        if let Some(v) = self.max_iter {
            cfg.inversion.max_iter = v;
        }
        if let Some(v) = self.noise {
            cfg.run.noise = v;
        }
        if let Some(v) = self.seed {
            cfg.run.seed = v;
        }
        cfg.validate()?;
        Ok(cfg)
    }
}

fn parse_value(raw: &str) -> toml::Value {
    // bare words fall back to strings so paths need no quoting
    let doc = format!("v = {raw}");
    match doc.parse::<toml::Table>() {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

fn set_key(table: &mut toml::Table, dotted: &str, value: toml::Value) -> Result<()> {
    let mut parts: Vec<&str> = dotted.split('.').collect();
    let last = parts.pop().filter(|s| !s.is_empty()).with_context(|| format!("empty key in --set {dotted:?}"))?;
    let mut cur = table;
    for part in parts {
        let entry = cur.entry(part.to_string()).or_insert_with(|| toml::Value::Table(Default::default()));
        cur = entry.as_table_mut().with_context(|| format!("{part} is not a section"))?;
    }
    cur.insert(last.to_string(), value);
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let common = match &cli.command {
        Command::DemoConfig => {
            print!("{DEMO_CONFIG}");
            return Ok(());
        }
        Command::Simulate(c)
        | Command::Preprocess(c)
        | Command::Invert(c)
        | Command::Extract(c)
        | Command::Pipeline(c) => c,
    };
    let level = if common.verbose { "info" } else { "warn" };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let cfg = common.config()?;
    let json = match &cli.command {
        Command::Simulate(_) => serde_json::to_string_pretty(&pipeline::run_simulate(&cfg)?)?,
        Command::Preprocess(_) => serde_json::to_string_pretty(&pipeline::run_preprocess(&cfg)?)?,
        Command::Invert(_) => serde_json::to_string_pretty(&pipeline::run_invert(&cfg)?)?,
        Command::Extract(_) => serde_json::to_string_pretty(&pipeline::run_extract(&cfg)?)?,
        Command::Pipeline(_) => serde_json::to_string_pretty(&pipeline::run_pipeline(&cfg)?)?,
        Command::DemoConfig => unreachable!(),
    };
    println!("{json}");
    Ok(())
}

fn main() -> ExitCode {
    match run(Cli::parse()) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
