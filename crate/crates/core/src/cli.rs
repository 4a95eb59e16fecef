//! Experiment orchestration behind the `gendix` binary.
//!
//! Every command reads one JSON config, materializes its defaults, and
//! stamps outputs with the SHA-256 of the materialized config. Files live in
//! the output directory under fixed names so that commands chain:
//! `forward` → `invert` / `recover` → `compare`.

use crate::error::{Error, Result};
use crate::forward::{
    add_noise, forward_dataset, read_dataset, sample_surface_family, write_dataset, Sigma0Spec, WavefrontDataset,
    XhatGrid,
};
use crate::inversion::{reconstruct_along_geodesic, InversionOptions, Reconstruction};
use crate::manifold::{ChartBox, DerivativeMode, MetricField, MetricKind};
use crate::metric_recovery::{
    chart_error, chart_sectional_curvatures, ground_truth_chart, read_chart, recover_chart, stitch_restarts,
    write_chart, ReconstructedChart,
};
use crate::series::UniformGrid;
use crate::surfacedata::{ChainGraph, SurfaceFamily};
use clap::{Parser, Subcommand};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};

pub const EXIT_OK: i32 = 0;
pub const EXIT_INPUT: i32 = 1;
pub const EXIT_NUMERIC: i32 = 2;
pub const EXIT_TOLERANCE: i32 = 3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Grids {
    pub dt: f64,
    pub dr: f64,
    pub t_max: f64,
    pub r_max: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InversionConfig {
    #[serde(default)]
    pub strict_step: bool,
    #[serde(default)]
    pub curvature_bound: Option<f64>,
    #[serde(default)]
    pub ball_radius: Option<f64>,
    #[serde(default)]
    pub restart_offsets: Vec<f64>,
    #[serde(default = "default_max_window")]
    pub max_window: f64,
    #[serde(default = "default_step_length")]
    pub step_length: f64,
    #[serde(default = "default_behind_nodes")]
    pub behind_nodes: usize,
    #[serde(default = "default_noise_factor")]
    pub noise_factor: Option<f64>,
}

fn default_max_window() -> f64 {
    InversionOptions::default().max_window
}
fn default_step_length() -> f64 {
    InversionOptions::default().step_length
}
fn default_behind_nodes() -> usize {
    InversionOptions::default().behind_nodes
}
fn default_noise_factor() -> Option<f64> {
    InversionOptions::default().noise_factor
}

impl Default for InversionConfig {
    fn default() -> Self {
        InversionConfig {
            strict_step: false,
            curvature_bound: None,
            ball_radius: None,
            restart_offsets: Vec::new(),
            max_window: default_max_window(),
            step_length: default_step_length(),
            behind_nodes: default_behind_nodes(),
            noise_factor: default_noise_factor(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NoiseConfig {
    #[serde(default)]
    pub sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CompareConfig {
    /// `compare` exits with code 3 when the maximum relative chart error
    /// exceeds this.
    #[serde(default = "default_tolerance")]
    pub tolerance: f64,
    /// `x̂` spacing of the finite differences in the true chart.
    #[serde(default = "default_dxhat")]
    pub dxhat: f64,
}

fn default_tolerance() -> f64 {
    1e-3
}
fn default_dxhat() -> f64 {
    0.01
}

impl Default for CompareConfig {
    fn default() -> Self {
        CompareConfig {
            tolerance: default_tolerance(),
            dxhat: default_dxhat(),
        }
    }
}

/// Random family of geodesic spheres for the `distance` command.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DistanceConfig {
    pub surfaces: usize,
    pub radius_min: f64,
    pub radius_max: f64,
    pub points_per_surface: usize,
    /// Centers are drawn in the ball of this chart radius around `origin`.
    pub center_radius: f64,
    #[serde(default)]
    pub origin: Option<Vec<f64>>,
    pub pairs: usize,
    #[serde(default)]
    pub snap_radius: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub dim: usize,
    pub metric: MetricKind,
    #[serde(default)]
    pub derivative_mode: Option<DerivativeMode>,
    pub sigma0: Sigma0Spec,
    pub grids: Grids,
    #[serde(default)]
    pub inversion: InversionConfig,
    #[serde(default)]
    pub noise: NoiseConfig,
    #[serde(default)]
    pub compare: CompareConfig,
    #[serde(default)]
    pub distance: Option<DistanceConfig>,
}

impl ExperimentConfig {
    pub fn parse(text: &str, file: &str) -> Result<Self> {
        let cfg: ExperimentConfig = serde_json::from_str(text).map_err(|e| Error::Parse {
            file: file.to_string(),
            line: e.line(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Io(format!("{}: {e}", path.display())))?;
        Self::parse(&text, &path.display().to_string())
    }

    pub fn validate(&self) -> Result<()> {
        let g = &self.grids;
        for (name, v) in [("dt", g.dt), ("dr", g.dr), ("t_max", g.t_max), ("r_max", g.r_max)] {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Invalid(format!("grids.{name} must be positive, got {v}")));
            }
        }
        let min_window = 4.0 * g.dt * 5.0;
        if !(g.t_max > g.r_max + min_window) {
            return Err(Error::Invalid(format!(
                "grids.t_max = {} must exceed r_max + {min_window} (r_max = {})",
                g.t_max, g.r_max
            )));
        }
        self.metric_field()?;
        self.sigma0.validate(self.dim)?;
        self.t_grid()?;
        for s in &self.inversion.restart_offsets {
            on_grid(self.sigma0.t0 + s, g.dt, "sigma0.t0 + restart offset")?;
            on_grid(*s, g.dr, "restart offset")?;
        }
        if !(self.noise.sigma >= 0.0) {
            return Err(Error::Invalid("noise.sigma must be non-negative".into()));
        }
        if let Some(d) = &self.distance {
            if !(d.radius_min > 0.0 && d.radius_max >= d.radius_min && d.center_radius > 0.0) {
                return Err(Error::Invalid("distance radii must satisfy 0 < radius_min ≤ radius_max".into()));
            }
            if d.surfaces == 0 || d.points_per_surface == 0 {
                return Err(Error::Invalid("distance family needs surfaces and points".into()));
            }
        }
        Ok(())
    }

    pub fn metric_field(&self) -> Result<MetricField> {
        let m = MetricField::new(self.dim, self.metric.clone())?;
        Ok(match self.derivative_mode {
            Some(mode) => m.with_mode(mode),
            None => m,
        })
    }

    /// Data grid `δt, 2δt, …` up to `t_max`; `t₀` must be a node.
    pub fn t_grid(&self) -> Result<UniformGrid> {
        let g = &self.grids;
        on_grid(self.sigma0.t0, g.dt, "sigma0.t0")?;
        UniformGrid::spanning(g.dt, g.t_max, g.dt)
    }

    pub fn inversion_options(&self) -> InversionOptions {
        let i = &self.inversion;
        InversionOptions {
            max_window: i.max_window,
            step_length: i.step_length,
            strict_step: i.strict_step,
            curvature_bound: i.curvature_bound,
            ball_radius: i.ball_radius,
            behind_nodes: i.behind_nodes,
            noise_factor: i.noise_factor,
            dr: Some(self.grids.dr),
            ..InversionOptions::default()
        }
    }

    /// SHA-256 of the materialized config, hex encoded.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        hex::encode(Sha256::digest(text.as_bytes()))
    }
}

fn on_grid(x: f64, step: f64, what: &str) -> Result<()> {
    let k = x / step;
    if (k - k.round()).abs() > 1e-6 || k.round() < 1.0 {
        return Err(Error::Invalid(format!("{what} = {x} is not a positive multiple of {step}")));
    }
    Ok(())
}

#[derive(Debug, Parser)]
#[command(name = "gendix", version, about = "Curvature and metric reconstruction from wavefront shape operators")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
    /// JSON experiment config.
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = "out")]
    pub output: PathBuf,
    /// Worker threads (default: all cores).
    #[arg(long, global = true)]
    pub jobs: Option<usize>,
    /// Cap every inversion step by the fixed-point bound.
    #[arg(long, global = true)]
    pub strict_step: bool,
    /// Override the Gaussian noise level added by `forward`.
    #[arg(long, global = true)]
    pub noise_sigma: Option<f64>,
    /// Override the noise seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Comma-separated offsets of restart surfaces, e.g. `0.5,1.0`.
    #[arg(long, global = true, value_delimiter = ',')]
    pub restart_offsets: Option<Vec<f64>>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Subcommand)]
pub enum Command {
    /// Simulate the shape-operator dataset (and restart datasets).
    Forward,
    /// Recover curvature and shape operators along every geodesic.
    Invert,
    /// Recover the chart metric from the dataset.
    Recover,
    /// Compare the recovered chart with the true one.
    Compare,
    /// Chain distances on a sampled surface family.
    Distance,
    /// Run forward, invert, recover and compare on a flat example.
    Demo,
}

/// Outcome of a command: the exit code and a human-readable summary.
#[derive(Debug)]
pub struct Outcome {
    pub code: i32,
    pub summary: String,
}

pub fn exit_code(e: &Error) -> i32 {
    if e.is_input_error() || matches!(e, Error::EmptySurface) {
        EXIT_INPUT
    } else {
        EXIT_NUMERIC
    }
}

/// Parses arguments, runs the command and returns the exit code; messages
/// go to stdout, diagnostics to stderr.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_INPUT } else { EXIT_OK };
        }
    };
    match run(&cli) {
        Ok(out) => {
            print!("{}", out.summary);
            out.code
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

pub fn run(cli: &Cli) -> Result<Outcome> {
    if cli.command == Command::Demo {
        return run_demo(cli);
    }
    let path = cli
        .config
        .as_ref()
        .ok_or_else(|| Error::Invalid("--config is required".into()))?;
    let cfg = apply_flags(ExperimentConfig::load(path)?, cli)?;
    with_jobs(cli.jobs, || run_command(cli.command, &cfg, &cli.output))
}

fn apply_flags(mut cfg: ExperimentConfig, cli: &Cli) -> Result<ExperimentConfig> {
    if cli.strict_step {
        cfg.inversion.strict_step = true;
    }
    if let Some(s) = cli.noise_sigma {
        cfg.noise.sigma = s;
    }
    if let Some(s) = cli.seed {
        cfg.noise.seed = s;
    }
    if let Some(r) = &cli.restart_offsets {
        cfg.inversion.restart_offsets = r.clone();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn with_jobs<T: Send>(jobs: Option<usize>, f: impl FnOnce() -> Result<T> + Send) -> Result<T> {
    match jobs {
        Some(0) => Err(Error::Invalid("--jobs must be at least 1".into())),
        Some(n) => rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build()
            .map_err(|e| Error::Invalid(e.to_string()))?
            .install(f),
        None => f(),
    }
}

pub fn run_command(cmd: Command, cfg: &ExperimentConfig, out: &Path) -> Result<Outcome> {
    std::fs::create_dir_all(out).map_err(|e| Error::Io(format!("{}: {e}", out.display())))?;
    let hash = cfg.hash();
    let cfg_text = serde_json::to_string_pretty(cfg).expect("config serializes");
    std::fs::write(out.join("config.json"), cfg_text)?;
    match cmd {
        Command::Forward => cmd_forward(cfg, out, &hash),
        Command::Invert => cmd_invert(cfg, out, &hash),
        Command::Recover => cmd_recover(cfg, out, &hash),
        Command::Compare => cmd_compare(cfg, out, &hash),
        Command::Distance => cmd_distance(cfg, out, &hash),
        Command::Demo => unreachable!("demo runs without a config"),
    }
}

pub fn dataset_path(out: &Path) -> PathBuf {
    out.join("dataset.json")
}

pub fn restart_dataset_path(out: &Path, k: usize) -> PathBuf {
    out.join(format!("dataset.restart{k}.json"))
}

pub fn chart_path(out: &Path) -> PathBuf {
    out.join("chart.json")
}

fn shifted_sigma(cfg: &ExperimentConfig, s: f64) -> Sigma0Spec {
    Sigma0Spec {
        t0: cfg.sigma0.t0 + s,
        ..cfg.sigma0.clone()
    }
}

fn simulate(cfg: &ExperimentConfig, sigma: &Sigma0Spec, seed_offset: u64) -> Result<WavefrontDataset> {
    let m = cfg.metric_field()?;
    let mut ds = forward_dataset(&m, sigma, cfg.t_grid()?, cfg.grids.dr)?;
    add_noise(&mut ds, cfg.noise.sigma, cfg.noise.seed.wrapping_add(seed_offset));
    Ok(ds)
}

/// Samples with `‖S‖` above this are reported as near-caustic.
pub const NEAR_CAUSTIC_NORM: f64 = 100.0;

/// Ranges of `t` (union over `x̂`) where some sample has `‖S‖` above
/// [`NEAR_CAUSTIC_NORM`] or is masked.
pub fn near_caustic_bands(ds: &WavefrontDataset) -> Vec<(f64, f64)> {
    let mut bands: Vec<(f64, f64)> = Vec::new();
    for it in 0..ds.t_grid.len {
        let hit = ds
            .samples
            .iter()
            .zip(&ds.mask)
            .any(|(row, m)| m[it] || !(row[it].norm() <= NEAR_CAUSTIC_NORM));
        if hit {
            let t = ds.t_grid.node(it);
            match bands.last_mut() {
                Some(b) if (t - b.1 - ds.t_grid.step).abs() < 1e-9 => b.1 = t,
                _ => bands.push((t, t)),
            }
        }
    }
    bands
}

fn mask_summary(ds: &WavefrontDataset) -> String {
    let mut s = format!("{} of {} samples masked", ds.masked_count(), ds.xhat_grid.len() * ds.t_grid.len);
    for (a, b) in ds.masked_bands() {
        let _ = write!(s, "; masked t ∈ [{a:.4}, {b:.4}]");
    }
    for (a, b) in near_caustic_bands(ds) {
        let _ = write!(s, "; near-caustic t ∈ [{a:.4}, {b:.4}]");
    }
    s
}

fn cmd_forward(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<Outcome> {
    let ds = simulate(cfg, &cfg.sigma0, 0)?;
    write_dataset(&ds, &dataset_path(out), hash)?;
    let mut summary = format!("dataset: {}\n", mask_summary(&ds));
    for (k, &s) in cfg.inversion.restart_offsets.iter().enumerate() {
        let ds = simulate(cfg, &shifted_sigma(cfg, s), k as u64 + 1)?;
        write_dataset(&ds, &restart_dataset_path(out, k), hash)?;
        let _ = writeln!(summary, "restart {k} (offset {s}): {}", mask_summary(&ds));
    }
    Ok(Outcome {
        code: EXIT_OK,
        summary,
    })
}

fn load_dataset(path: &Path, hash: &str) -> Result<WavefrontDataset> {
    let (ds, stamp) = read_dataset(path)?;
    if stamp != hash {
        eprintln!(
            "warning: {} was written with config hash {stamp}, current config is {hash}",
            path.display()
        );
    }
    Ok(ds)
}

#[derive(Serialize)]
struct GeodesicReport {
    xhat: Vec<f64>,
    reached: f64,
    conjugate_points: Vec<f64>,
    joints: usize,
    max_joint_jump: f64,
    error: Option<String>,
}

fn matrix_header(prefix: &str, k: usize) -> String {
    let mut s = String::new();
    for a in 0..k {
        for b in 0..k {
            let _ = write!(s, ",{prefix}{a}{b}");
        }
    }
    s
}

fn push_matrix(line: &mut String, m: &nalgebra::DMatrix<f64>) {
    for a in 0..m.nrows() {
        for b in 0..m.ncols() {
            let _ = write!(line, ",{}", m[(a, b)]);
        }
    }
}

fn cmd_invert(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<Outcome> {
    let ds = load_dataset(&dataset_path(out), hash)?;
    let opts = cfg.inversion_options();
    let results: Vec<Result<Reconstruction>> = (0..ds.xhat_grid.len())
        .into_par_iter()
        .map(|i| reconstruct_along_geodesic(&ds.slice(i), cfg.grids.r_max, &opts))
        .collect();
    let k = ds.dim - 1;
    let mut curv = format!("# config_hash={hash}\ni_xhat,r{}\n", matrix_header("R", k));
    let mut shapes = format!("# config_hash={hash}\ni_xhat,r,t{}\n", matrix_header("S", k));
    let mut reports = Vec::new();
    let mut summary = String::new();
    let mut failures = 0;
    for (i, res) in results.iter().enumerate() {
        let xhat = ds.xhat_grid.point(i);
        match res {
            Ok(rec) => {
                for (ir, v) in rec.profile.values.iter().enumerate() {
                    let mut line = format!("{i},{}", rec.profile.r_grid.node(ir));
                    push_matrix(&mut line, v);
                    curv.push_str(&line);
                    curv.push('\n');
                }
                for (r, row) in &rec.shapes {
                    for (it, s) in row.iter().enumerate() {
                        if let Some(s) = s {
                            let mut line = format!("{i},{r},{}", rec.t_grid.node(it));
                            push_matrix(&mut line, s);
                            shapes.push_str(&line);
                            shapes.push('\n');
                        }
                    }
                }
                // crossed: the march continued at least one step past it
                let reach = rec.profile.r_max();
                let n = rec
                    .conjugate_points
                    .iter()
                    .filter(|&&r| r <= reach - rec.profile.r_grid.step)
                    .count();
                let _ = writeln!(
                    summary,
                    "x̂ {i}: reached r = {:.4}, crossed {n} conjugate point{}",
                    rec.profile.r_max(),
                    if n == 1 { "" } else { "s" }
                );
                reports.push(GeodesicReport {
                    xhat,
                    reached: rec.profile.r_max(),
                    conjugate_points: rec.conjugate_points.clone(),
                    joints: rec.joints.len(),
                    max_joint_jump: rec.max_joint_jump(),
                    error: None,
                });
            }
            Err(e) => {
                failures += 1;
                let _ = writeln!(summary, "x̂ {i}: failed: {e}");
                reports.push(GeodesicReport {
                    xhat,
                    reached: e.reached().unwrap_or(0.0),
                    conjugate_points: Vec::new(),
                    joints: 0,
                    max_joint_jump: 0.0,
                    error: Some(e.to_string()),
                });
            }
        }
    }
    std::fs::write(out.join("curvature.csv"), curv)?;
    std::fs::write(out.join("shapes.csv"), shapes)?;
    write_json(
        &out.join("inversion_report.json"),
        &serde_json::json!({ "config_hash": hash, "geodesics": reports }),
    )?;
    if failures == results.len() {
        if let Some(Err(e)) = results.into_iter().next() {
            return Err(e);
        }
    }
    Ok(Outcome {
        code: if failures > 0 { EXIT_NUMERIC } else { EXIT_OK },
        summary,
    })
}

fn write_json(path: &Path, v: &serde_json::Value) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(v).expect("json value serializes"))?;
    Ok(())
}

fn cmd_recover(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<Outcome> {
    let ds = load_dataset(&dataset_path(out), hash)?;
    let opts = cfg.inversion_options();
    let base = recover_chart(&ds, cfg.grids.r_max, &opts)?;
    let mut chart = base.chart;
    let mut summary = format!(
        "chart: {} nodes, {:.2}% masked\n",
        chart.node_count(),
        100.0 * chart.masked_fraction()
    );
    for (k, &s) in cfg.inversion.restart_offsets.iter().enumerate() {
        let path = restart_dataset_path(out, k);
        if !path.exists() {
            return Err(Error::Invalid(format!(
                "restart offset {s} needs {}; rerun forward with the same offsets",
                path.display()
            )));
        }
        let rds = load_dataset(&path, hash)?;
        let rc = recover_chart(&rds, cfg.grids.r_max + s, &opts)?;
        chart = stitch_restarts(&chart, &[(s, rc.chart)])?;
        let _ = writeln!(summary, "after restart {k} (offset {s}): {:.2}% masked", 100.0 * chart.masked_fraction());
    }
    write_chart(&chart, &chart_path(out), hash)?;
    write_sectional(&chart, &out.join("sectional.csv"), hash)?;
    Ok(Outcome {
        code: EXIT_OK,
        summary,
    })
}

fn write_sectional(chart: &ReconstructedChart, path: &Path, hash: &str) -> Result<()> {
    let n = chart.dim;
    let mut s = format!("# config_hash={hash}\n");
    for a in 0..n {
        let _ = write!(s, "x{a},");
    }
    s.push_str("plane_a,plane_b,curvature\n");
    for sample in chart_sectional_curvatures(chart)? {
        for c in &sample.point {
            let _ = write!(s, "{c},");
        }
        let _ = writeln!(s, "{},{},{}", sample.plane.0, sample.plane.1, sample.curvature);
    }
    std::fs::write(path, s)?;
    Ok(())
}

fn cmd_compare(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<Outcome> {
    let (chart, stamp) = read_chart(&chart_path(out))?;
    if stamp != hash {
        eprintln!("warning: chart was written with config hash {stamp}, current config is {hash}");
    }
    let m = cfg.metric_field()?;
    let truth = ground_truth_chart(&m, &cfg.sigma0, chart.r_grid, cfg.compare.dxhat)?;
    write_chart(&truth, &out.join("truth_chart.json"), hash)?;
    let report = chart_error(&chart, &truth)?;
    let mut v = serde_json::to_value(&report).expect("report serializes");
    v["config_hash"] = serde_json::Value::String(hash.to_string());
    v["tolerance"] = serde_json::json!(cfg.compare.tolerance);
    write_json(&out.join("error_report.json"), &v)?;
    let mut s = format!("# config_hash={hash}\nr,max_rel\n");
    for e in &report.per_r_profile {
        let _ = writeln!(s, "{},{}", e.r, e.max_rel.map(|x| x.to_string()).unwrap_or_default());
    }
    std::fs::write(out.join("error_profile.csv"), s)?;
    let pass = report.max_rel <= cfg.compare.tolerance;
    Ok(Outcome {
        code: if pass { EXIT_OK } else { EXIT_TOLERANCE },
        summary: format!(
            "max_rel = {:.3e}, median_rel = {:.3e}, masked {:.2}%: {} (tolerance {:e})\n",
            report.max_rel,
            report.median_rel,
            100.0 * report.masked_frac,
            if pass { "within tolerance" } else { "TOLERANCE EXCEEDED" },
            cfg.compare.tolerance
        ),
    })
}

/// Draws the surface family of the `distance` block.
pub fn distance_family(cfg: &ExperimentConfig) -> Result<SurfaceFamily> {
    let d = cfg
        .distance
        .as_ref()
        .ok_or_else(|| Error::Invalid("config has no distance block".into()))?;
    let m = cfg.metric_field()?;
    let n = cfg.dim;
    let origin = d.origin.clone().unwrap_or_else(|| vec![0.0; n]);
    if origin.len() != n {
        return Err(Error::Invalid("distance.origin has the wrong dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed);
    let mut centers = Vec::with_capacity(d.surfaces);
    while centers.len() < d.surfaces {
        let off: Vec<f64> = (0..n).map(|_| rng.random_range(-d.center_radius..d.center_radius)).collect();
        if off.iter().map(|c| c * c).sum::<f64>() <= d.center_radius * d.center_radius {
            centers.push(origin.iter().zip(&off).map(|(o, c)| o + c).collect::<Vec<f64>>());
        }
    }
    let radii: Vec<f64> = (0..d.surfaces).map(|_| rng.random_range(d.radius_min..=d.radius_max)).collect();
    let half = d.center_radius + d.radius_max;
    let region = ChartBox {
        lo: origin.iter().map(|o| o - half).collect(),
        hi: origin.iter().map(|o| o + half).collect(),
    };
    SurfaceFamily::new(sample_surface_family(&m, &region, &centers, &radii, d.points_per_surface)?, region)
}

#[derive(Serialize)]
struct PairReport {
    x: Vec<f64>,
    z: Vec<f64>,
    chain_distance: Option<f64>,
    /// Straight-line distance, reported for the euclidean metric only.
    true_distance: Option<f64>,
    error: Option<String>,
}

fn cmd_distance(cfg: &ExperimentConfig, out: &Path, hash: &str) -> Result<Outcome> {
    let d = cfg
        .distance
        .as_ref()
        .ok_or_else(|| Error::Invalid("config has no distance block".into()))?;
    let fam = distance_family(cfg)?;
    fam.write(&out.join("family.json"), Some(&out.join("family.truth.json")))?;
    let graph = ChainGraph::build(&fam, d.snap_radius)?;
    let all: Vec<&Vec<f64>> = fam.surfaces.iter().flat_map(|s| &s.points).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(d.seed.wrapping_add(1));
    let euclid = cfg.metric == MetricKind::Euclidean;
    let mut pairs = Vec::new();
    let (mut connected, mut rel) = (0usize, Vec::new());
    for _ in 0..d.pairs {
        let x = all[rng.random_range(0..all.len())].clone();
        let z = all[rng.random_range(0..all.len())].clone();
        let truth = euclid.then(|| x.iter().zip(&z).map(|(a, b)| (a - b) * (a - b)).sum::<f64>().sqrt());
        let (est, err) = match graph.chain_distance(&x, &z) {
            Ok(v) => (Some(v), None),
            Err(e) => (None, Some(e.to_string())),
        };
        if let Some(v) = est {
            connected += 1;
            if let Some(t) = truth.filter(|t| *t > 0.0) {
                rel.push((v - t) / t);
            }
        }
        pairs.push(PairReport {
            x,
            z,
            chain_distance: est,
            true_distance: truth,
            error: err,
        });
    }
    let max_rel = rel.iter().map(|r| r.abs()).fold(0.0, f64::max);
    write_json(
        &out.join("distance_report.json"),
        &serde_json::json!({
            "config_hash": hash,
            "snap_radius": graph.snap_radius,
            "connected": connected,
            "pairs": pairs,
        }),
    )?;
    let mut summary = format!("{connected} of {} pairs connected (snap radius {:.3e})\n", d.pairs, graph.snap_radius);
    if !rel.is_empty() {
        let _ = writeln!(summary, "max relative error {max_rel:.3e}");
    }
    Ok(Outcome {
        code: EXIT_OK,
        summary,
    })
}

/// The flat example run by `demo`.
pub fn demo_config() -> ExperimentConfig {
    ExperimentConfig {
        dim: 2,
        metric: MetricKind::Euclidean,
        derivative_mode: None,
        sigma0: Sigma0Spec {
            center: vec![0.0, 0.0],
            t0: 1.0,
            xhat: XhatGrid {
                start: vec![-0.05],
                step: vec![0.01],
                count: vec![11],
            },
        },
        grids: Grids {
            dt: 0.01,
            dr: 0.01,
            t_max: 1.6,
            r_max: 0.9,
        },
        inversion: InversionConfig::default(),
        noise: NoiseConfig::default(),
        compare: CompareConfig {
            tolerance: 1e-5,
            dxhat: 0.01,
        },
        distance: None,
    }
}

fn run_demo(cli: &Cli) -> Result<Outcome> {
    let cfg = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => demo_config(),
    };
    let cfg = apply_flags(cfg, cli)?;
    let mut summary = String::new();
    let mut code = EXIT_OK;
    for cmd in [Command::Forward, Command::Invert, Command::Recover, Command::Compare] {
        let o = with_jobs(cli.jobs, || run_command(cmd, &cfg, &cli.output))?;
        let _ = write!(summary, "[{cmd:?}]\n{}", o.summary);
        code = code.max(o.code);
    }
    Ok(Outcome { code, summary })
}
