//! Command-line surface: `simulate`, `fit`, `metrics` and `maps`.
//!
//! Settings resolve as defaults, then the `--config` file, then flags.
//! Every failure prints one `error[<kind>]: <message>` line to stderr and
//! exits nonzero (1 for runtime errors, 2 for usage errors, 3 when `fit`
//! leaves voxels that neither converged nor were flagged degenerate).

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};
use serde_json::json;

use crate::baselines::Curvature;
use crate::batch::{all_settled, fit_batch, FitConfig};
use crate::config::{parse_decimal, KeyValues};
use crate::em::{Acceleration, InitMethod, ScoringMode};
use crate::error::{Error, Result};
use crate::io::{self, fmt_f64, Dataset, ResultHeader, ResultRow, VoxelRecord, FORMAT_VERSION, RESULT_FORMAT};
use crate::metrics::{mse_report, raw_snr_curve, signal_curve, snr_curve};
use crate::report::{Estimate, Method, ParameterEstimate};
use crate::scheme::{AcquisitionScheme, Design};
use crate::synth::{self, GroundTruth, NoiseLevel, FIXTURE_VERSION};
use crate::tensor::{TensorOrder, TensorParams};

pub const EXIT_ERROR: i32 = 1;
pub const EXIT_USAGE: i32 = 2;
pub const EXIT_UNSETTLED: i32 = 3;

#[derive(Debug, Parser)]
#[command(name = "rice-em", version, about = "Diffusion tensor estimation under Rician noise")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Draw synthetic datasets.
    Simulate(SimulateArgs),
    /// Fit every voxel of a dataset.
    Fit(FitArgs),
    /// SNR curves, MSE tables and signal curves from fitted results.
    Metrics(MetricsArgs),
    /// FA, MD and noise maps on a voxel grid.
    Maps(MapsArgs),
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

fn parse_order(s: &str) -> std::result::Result<TensorOrder, String> {
    let n: u8 = s.parse().map_err(|_| format!("order must be 2 or 4, got `{s}`"))?;
    TensorOrder::try_from(n).map_err(|e| e.to_string())
}

fn parse_noise(s: &str) -> std::result::Result<NoiseLevel, String> {
    match s {
        "high" => Ok(NoiseLevel::High),
        "low" => Ok(NoiseLevel::Low),
        _ => Err(format!("noise must be high or low, got `{s}`")),
    }
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Flat key = value file (directions, knots, repetitions, order, noise,
    /// s0, sigma_sq, theta, ensemble, seed, zero_threshold, layout, out).
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long, value_parser = parse_order)]
    pub order: Option<TensorOrder>,
    #[arg(long, value_parser = parse_noise)]
    pub noise: Option<NoiseLevel>,
    #[arg(long, value_parser = parse_decimal)]
    pub sigma_sq: Option<f64>,
    #[arg(long, value_parser = parse_decimal)]
    pub s0: Option<f64>,
    #[arg(long)]
    pub directions: Option<usize>,
    #[arg(long)]
    pub repetitions: Option<usize>,
    /// Number of datasets.
    #[arg(long)]
    pub ensemble: Option<usize>,
    /// Magnitudes below this are recorded as 0.
    #[arg(long, value_parser = parse_decimal)]
    pub zero_threshold: Option<f64>,
    /// `files`: one file per dataset in the `--out` directory; `voxels`:
    /// one file, one voxel block per dataset.
    #[arg(long, value_parser = ["files", "voxels"])]
    pub layout: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct FitArgs {
    pub dataset: PathBuf,
    /// Flat key = value file; keys mirror the fit option and prior names.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_method)]
    pub method: Option<Method>,
    #[arg(long, value_parser = parse_order)]
    pub order: Option<TensorOrder>,
    #[arg(long, value_parser = parse_decimal)]
    pub alpha: Option<f64>,
    /// b cutoff of the truncated baselines.
    #[arg(long, value_parser = parse_decimal)]
    pub b_cutoff: Option<f64>,
    /// Worker threads; 0 uses the available parallelism.
    #[arg(long, env = "RICE_EM_WORKERS")]
    pub workers: Option<usize>,
    #[arg(long, value_parser = parse_decimal)]
    pub omega_scale: Option<f64>,
    #[arg(long, value_parser = parse_decimal)]
    pub c1: Option<f64>,
    #[arg(long, value_parser = parse_decimal)]
    pub c2: Option<f64>,
    #[arg(long)]
    pub sigma_prior: Option<bool>,
    #[arg(long)]
    pub positivity_project: bool,
    #[arg(long, value_parser = parse_decimal)]
    pub anneal_threshold: Option<f64>,
    #[arg(long)]
    pub max_em_iters: Option<usize>,
    #[arg(long)]
    pub max_scoring_iters: Option<usize>,
    #[arg(long, value_parser = parse_decimal)]
    pub scoring_tol: Option<f64>,
    #[arg(long, value_parser = parse_decimal)]
    pub tol_theta: Option<f64>,
    #[arg(long, value_parser = parse_decimal)]
    pub tol_loglik: Option<f64>,
    #[arg(long, value_parser = parse_decimal)]
    pub init_b_cutoff: Option<f64>,
    #[arg(long, value_parser = ["ls", "wls"])]
    pub init_method: Option<String>,
    #[arg(long, value_parser = ["to-convergence", "single-step"])]
    pub scoring: Option<String>,
    #[arg(long, value_parser = ["none", "squarem"])]
    pub acceleration: Option<String>,
    #[arg(long)]
    pub ecme_sigma: Option<bool>,
    #[arg(long, value_parser = ["exact", "approximate"])]
    pub curvature: Option<String>,
    #[arg(long, value_parser = parse_decimal)]
    pub y_min: Option<f64>,
    /// Result file; wall times go to `<out>.timing`.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MetricsArgs {
    /// Dataset files the results were fitted on.
    #[arg(long = "dataset", required = true, num_args = 1..)]
    pub datasets: Vec<PathBuf>,
    /// Result files; any mix of methods.
    #[arg(long = "results", required = true, num_args = 1..)]
    pub results: Vec<PathBuf>,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct MapsArgs {
    pub results: PathBuf,
    /// `WIDTHxHEIGHT`; voxel ids fill the grid row-major from `--first-id`.
    #[arg(long)]
    pub geometry: String,
    #[arg(long, default_value_t = 0)]
    pub first_id: usize,
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
}

/// Parses arguments, runs the command and returns the exit code.
pub fn run_from<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                print!("{e}");
                return 0;
            }
            let rendered = e.to_string();
            let first = rendered.lines().next().unwrap_or("invalid arguments");
            eprintln!("error[usage]: {}", first.trim_start_matches("error: "));
            return EXIT_USAGE;
        }
    };
    match run(cli.command) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error[{}]: {}", e.kind(), e.to_string().replace('\n', " "));
            EXIT_ERROR
        }
    }
}

pub fn run(command: Command) -> Result<i32> {
    match command {
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Fit(a) => cmd_fit(&a),
        Command::Metrics(a) => cmd_metrics(&a),
        Command::Maps(a) => cmd_maps(&a),
    }
}

fn load_config(path: Option<&PathBuf>) -> Result<KeyValues> {
    match path {
        Some(p) => KeyValues::parse(&io::read_text(p)?),
        None => Ok(KeyValues::default()),
    }
}

/// Resolved `simulate` settings.
#[derive(Debug, Clone, PartialEq)]
pub struct SimulateSpec {
    pub directions: usize,
    pub knots: Vec<f64>,
    pub repetitions: usize,
    pub order: TensorOrder,
    pub s0: f64,
    pub sigma_sq: f64,
    pub theta: Option<Vec<f64>>,
    pub ensemble: usize,
    pub seed: u64,
    pub zero_threshold: Option<f64>,
    pub layout_files: bool,
    pub out: Option<PathBuf>,
}

impl Default for SimulateSpec {
    fn default() -> Self {
        Self {
            directions: synth::DEFAULT_DIRECTIONS,
            knots: synth::default_knots(),
            repetitions: synth::DEFAULT_REPETITIONS,
            order: TensorOrder::Four,
            s0: synth::DEFAULT_S0,
            sigma_sq: NoiseLevel::High.sigma_sq(),
            theta: None,
            ensemble: 1,
            seed: 1,
            zero_threshold: None,
            layout_files: true,
            out: None,
        }
    }
}

impl SimulateSpec {
    pub fn resolve(kv: &KeyValues, a: &SimulateArgs) -> Result<Self> {
        let mut s = Self::default();
        if let Some(v) = kv.get("directions")? {
            s.directions = v;
        }
        if let Some(v) = kv.get_f64_list("knots")? {
            s.knots = v;
        }
        if let Some(v) = kv.get("repetitions")? {
            s.repetitions = v;
        }
        if let Some(v) = kv.get::<String>("order")? {
            s.order = parse_order(&v).map_err(|m| Error::config("order", m))?;
        }
        if let Some(v) = kv.get::<String>("noise")? {
            s.sigma_sq = parse_noise(&v).map_err(|m| Error::config("noise", m))?.sigma_sq();
        }
        if let Some(v) = kv.get_f64("sigma_sq")? {
            s.sigma_sq = v;
        }
        if let Some(v) = kv.get_f64("s0")? {
            s.s0 = v;
        }
        s.theta = kv.get_f64_list("theta")?;
        if let Some(v) = kv.get("ensemble")? {
            s.ensemble = v;
        }
        if let Some(v) = kv.get("seed")? {
            s.seed = v;
        }
        s.zero_threshold = kv.get_f64("zero_threshold")?;
        if let Some(v) = kv.get::<String>("layout")? {
            s.layout_files = match v.as_str() {
                "files" => true,
                "voxels" => false,
                _ => return Err(Error::config("layout", format!("must be files or voxels, got `{v}`"))),
            };
        }
        s.out = kv.get::<String>("out")?.map(PathBuf::from);
        kv.reject_unknown()?;

        if let Some(v) = a.seed {
            s.seed = v;
        }
        if let Some(v) = a.order {
            s.order = v;
        }
        if let Some(v) = a.noise {
            s.sigma_sq = v.sigma_sq();
        }
        if let Some(v) = a.sigma_sq {
            s.sigma_sq = v;
        }
        if let Some(v) = a.s0 {
            s.s0 = v;
        }
        if let Some(v) = a.directions {
            s.directions = v;
        }
        if let Some(v) = a.repetitions {
            s.repetitions = v;
        }
        if let Some(v) = a.ensemble {
            s.ensemble = v;
        }
        if a.zero_threshold.is_some() {
            s.zero_threshold = a.zero_threshold;
        }
        if let Some(v) = &a.layout {
            s.layout_files = v == "files";
        }
        if a.out.is_some() {
            s.out = a.out.clone();
        }
        if s.ensemble == 0 {
            return Err(Error::config("ensemble", "must be >= 1"));
        }
        if s.directions == 0 {
            return Err(Error::config("directions", "must be >= 1"));
        }
        if s.repetitions == 0 {
            return Err(Error::config("repetitions", "must be >= 1"));
        }
        if let Some(t) = s.zero_threshold {
            if !(t >= 0.0 && t.is_finite()) {
                return Err(Error::config("zero_threshold", "must be >= 0"));
            }
        }
        Ok(s)
    }

    fn is_fixture(&self) -> bool {
        self.directions == synth::DEFAULT_DIRECTIONS
            && self.knots == synth::default_knots()
            && self.repetitions == synth::DEFAULT_REPETITIONS
            && self.theta.is_none()
    }

    pub fn truth(&self) -> Result<GroundTruth> {
        let theta = match &self.theta {
            Some(t) => TensorParams::new(self.order, t.clone()).map_err(|e| Error::config("theta", e.to_string()))?,
            None => match self.order {
                TensorOrder::Two => synth::default_order2_truth(),
                TensorOrder::Four => synth::default_order4_truth(),
            },
        };
        GroundTruth::new(theta, self.s0, self.sigma_sq, self.seed).map_err(|e| match e {
            Error::Domain(m) => Error::config("truth", m),
            other => other,
        })
    }

    /// The scheme plus one dataset per output file.
    pub fn generate(&self) -> Result<(AcquisitionScheme, Vec<Dataset>)> {
        let scheme = synth::make_scheme(self.directions, self.knots.clone(), self.repetitions)
            .map_err(|e| Error::config("knots", e.to_string()))?;
        let truth = self.truth()?;
        let voxels = if self.ensemble == 1 {
            vec![synth::synthesize_with(&scheme, &truth, self.zero_threshold)]
        } else {
            synth::make_ensemble(&scheme, &truth, self.ensemble, self.zero_threshold)?
        };
        let header_for = |seeds: Vec<u64>| {
            let mut ds = Dataset::new(scheme.clone(), Vec::new());
            ds.header.truth = Some(truth.clone());
            ds.header.seed = Some(self.seed);
            ds.header.voxel_seeds = seeds;
            ds.header.fixture = self.is_fixture().then(|| FIXTURE_VERSION.to_string());
            ds
        };
        let record = |v: &synth::VoxelData| VoxelRecord { voxel_id: v.voxel_id, magnitudes: v.magnitudes.clone() };
        let sets = if self.layout_files && self.ensemble > 1 {
            voxels
                .iter()
                .map(|v| {
                    let mut ds = header_for(vec![v.seed]);
                    ds.voxels = vec![record(v)];
                    ds
                })
                .collect()
        } else {
            let mut ds = header_for(voxels.iter().map(|v| v.seed).collect());
            ds.voxels = voxels.iter().map(record).collect();
            vec![ds]
        };
        Ok((scheme, sets))
    }
}

fn cmd_simulate(a: &SimulateArgs) -> Result<i32> {
    let kv = load_config(a.config.as_ref())?;
    let spec = SimulateSpec::resolve(&kv, a)?;
    let out = spec.out.clone().ok_or_else(|| Error::config("out", "output path is required"))?;
    let (scheme, sets) = spec.generate()?;
    let paths: Vec<PathBuf> = if sets.len() == 1 {
        vec![out.clone()]
    } else {
        let width = (sets.len() - 1).to_string().len();
        (0..sets.len()).map(|i| out.join(format!("dataset_{i:0width$}.csv"))).collect()
    };
    for (ds, p) in sets.iter().zip(&paths) {
        io::write_dataset(p, ds)?;
    }
    println!(
        "wrote {} file(s) to {}: rows={} knots={} voxels={} snr_b0={}",
        paths.len(),
        out.display(),
        scheme.len(),
        scheme.knots().len(),
        spec.ensemble,
        fmt_f64(spec.s0 / spec.sigma_sq.sqrt())
    );
    Ok(0)
}

/// Resolves the fit settings: defaults, config file, flags.
pub fn resolve_fit_config(kv: &KeyValues, a: &FitArgs) -> Result<(FitConfig, Option<usize>)> {
    let mut c = FitConfig::default();
    c.apply(kv)?;
    let workers_cfg = kv.get::<usize>("workers")?;
    kv.reject_unknown()?;
    let o = &mut c.options;
    macro_rules! over {
        ($dst:expr, $src:expr) => {
            if let Some(v) = $src.clone() {
                $dst = v;
            }
        };
    }
    over!(o.alpha, a.alpha);
    over!(o.anneal_threshold, a.anneal_threshold);
    over!(o.max_em_iters, a.max_em_iters);
    over!(o.max_scoring_iters, a.max_scoring_iters);
    over!(o.scoring_tol, a.scoring_tol);
    over!(o.tol_theta, a.tol_theta);
    over!(o.tol_loglik, a.tol_loglik);
    over!(o.init_b_cutoff, a.init_b_cutoff);
    over!(o.ecme_sigma, a.ecme_sigma);
    if a.positivity_project {
        o.positivity_projection = true;
    }
    if let Some(v) = &a.init_method {
        o.init_method = if v == "ls" { InitMethod::Ls } else { InitMethod::Wls };
    }
    if let Some(v) = &a.scoring {
        o.scoring = if v == "single-step" { ScoringMode::SingleStep } else { ScoringMode::ToConvergence };
    }
    if let Some(v) = &a.acceleration {
        o.acceleration = if v == "none" { Acceleration::None } else { Acceleration::Squarem };
    }
    over!(c.method, a.method);
    over!(c.order, a.order);
    over!(c.b_cutoff, a.b_cutoff);
    over!(c.omega_scale, a.omega_scale);
    over!(c.c1, a.c1);
    over!(c.c2, a.c2);
    over!(c.sigma_prior, a.sigma_prior);
    if let Some(v) = &a.curvature {
        c.curvature = if v == "approximate" { Curvature::Approximate } else { Curvature::Exact };
    }
    if a.y_min.is_some() {
        c.y_min = a.y_min;
    }
    c.validate()?;
    Ok((c, a.workers.or(workers_cfg)))
}

fn cmd_fit(a: &FitArgs) -> Result<i32> {
    let kv = load_config(a.config.as_ref())?;
    let (config, workers) = resolve_fit_config(&kv, a)?;
    let ds = io::read_dataset(&a.dataset)?;
    let design = Design::new(&ds.scheme, config.order);
    if design.len() < config.order.dim() + 1 {
        return Err(Error::invalid(format!(
            "{} acquisitions cannot support an order-{} fit",
            design.len(),
            config.order
        )));
    }
    let outcomes = fit_batch(&design, &config, &ds.voxels, workers.unwrap_or(0))?;
    let rows: Vec<ResultRow> = outcomes.iter().map(|o| o.row.clone()).collect();
    let header = ResultHeader {
        format: RESULT_FORMAT.into(),
        version: FORMAT_VERSION,
        method: config.method,
        order: config.order,
        dataset_seed: ds.header.seed,
        settings: config.settings(),
    };
    io::write_text(&a.out, &io::format_results(&header, &rows))?;
    let timing: Vec<(usize, f64)> = outcomes.iter().map(|o| (o.row.voxel_id, o.wall_seconds)).collect();
    io::write_text(&io::timing_path(&a.out), &io::format_timing(&timing))?;

    let converged = rows.iter().filter(|r| r.converged).count();
    let degenerate = rows.iter().filter(|r| r.degenerate).count();
    println!(
        "fitted {} voxel(s) with {} (order {}): converged={} degenerate={}",
        rows.len(),
        config.method,
        config.order,
        converged,
        degenerate
    );
    if all_settled(&rows) {
        Ok(0)
    } else {
        let bad: Vec<String> = rows
            .iter()
            .filter(|r| !(r.converged || r.degenerate))
            .map(|r| r.voxel_id.to_string())
            .collect();
        eprintln!("error[unsettled]: voxels neither converged nor degenerate: {}", bad.join(" "));
        Ok(EXIT_UNSETTLED)
    }
}

struct VoxelSource {
    magnitudes: Vec<f64>,
    truth: Option<GroundTruth>,
}

fn fmt_ids<'a>(ids: impl IntoIterator<Item = &'a usize>) -> String {
    ids.into_iter().map(|i| i.to_string()).collect::<Vec<_>>().join(" ")
}

fn cmd_metrics(a: &MetricsArgs) -> Result<i32> {
    let mut scheme: Option<AcquisitionScheme> = None;
    let mut sources: BTreeMap<usize, VoxelSource> = BTreeMap::new();
    for path in &a.datasets {
        let ds = io::read_dataset(path)?;
        match &scheme {
            None => scheme = Some(ds.scheme.clone()),
            Some(s) if *s != ds.scheme => {
                return Err(Error::invalid(format!("{} uses a different scheme", path.display())));
            }
            Some(_) => {}
        }
        for (i, v) in ds.voxels.into_iter().enumerate() {
            let truth = ds.header.truth.clone().map(|mut t| {
                if let Some(s) = ds.header.voxel_seeds.get(i) {
                    t.seed = *s;
                }
                t
            });
            if sources.insert(v.voxel_id, VoxelSource { magnitudes: v.magnitudes, truth }).is_some() {
                return Err(Error::invalid(format!("voxel {} appears in more than one dataset", v.voxel_id)));
            }
        }
    }
    let scheme = scheme.expect("at least one dataset");

    let mut by_method: BTreeMap<Method, BTreeMap<usize, ResultRow>> = BTreeMap::new();
    let mut order: Option<TensorOrder> = None;
    for path in &a.results {
        let (header, rows) = io::read_results(path)?;
        if *order.get_or_insert(header.order) != header.order {
            return Err(Error::invalid("result files mix tensor orders"));
        }
        let missing: Vec<usize> = rows.iter().map(|r| r.voxel_id).filter(|id| !sources.contains_key(id)).collect();
        if !missing.is_empty() {
            return Err(Error::invalid(format!(
                "{}: voxel ids not in any dataset: {}",
                path.display(),
                fmt_ids(&missing)
            )));
        }
        let slot = by_method.entry(header.method).or_default();
        for r in rows {
            if slot.insert(r.voxel_id, r.clone()).is_some() {
                return Err(Error::invalid(format!("duplicate {} result for voxel {}", header.method, r.voxel_id)));
            }
        }
    }

    // Rows usable for statistics: fitted, finite, not degenerate.
    let mut excluded = BTreeMap::new();
    let mut estimates: BTreeMap<Method, Vec<(usize, Estimate)>> = BTreeMap::new();
    for (method, rows) in &by_method {
        let mut keep = Vec::new();
        let mut dropped = Vec::new();
        for (id, r) in rows {
            let finite = r.theta.iter().all(|t| t.is_finite()) && r.s0_sq.is_finite() && r.sigma_sq.is_finite();
            if r.degenerate || !finite || r.sigma_sq <= 0.0 {
                dropped.push(*id);
                continue;
            }
            let theta = TensorParams::new(r.order, r.theta.clone())?;
            keep.push((*id, Estimate { method: *method, theta, s0_sq: r.s0_sq, sigma_sq: r.sigma_sq }));
        }
        if !dropped.is_empty() {
            excluded.insert(method.to_string(), dropped);
        }
        estimates.insert(*method, keep);
    }

    let knots = scheme.knots();
    let mut warnings: Vec<String> = Vec::new();

    // SNR: voxel-averaged fitted curve per method plus the raw-moment curve.
    let mut snr = String::from("method,b,snr,voxels\n");
    for (method, fits) in &estimates {
        let curves: Vec<_> = fits.iter().map(|(_, e)| snr_curve(e, &scheme)).collect();
        for (k, b) in knots.iter().enumerate() {
            let mean = mean_sorted(curves.iter().map(|c| c.snr[k]).collect());
            let _ = writeln!(snr, "{method},{},{},{}", fmt_f64(*b), fmt_f64(mean), curves.len());
        }
    }
    let raw: Vec<_> = sources.values().map(|s| raw_snr_curve(&scheme, &s.magnitudes)).collect::<Result<_>>()?;
    for (k, b) in knots.iter().enumerate() {
        let mean = mean_sorted(raw.iter().map(|c| c.snr[k]).collect());
        let _ = writeln!(snr, "raw,{},{},{}", fmt_f64(*b), fmt_f64(mean), raw.len());
    }

    // Signal curves: voxel-averaged fitted signal per knot and direction.
    let dirs = scheme.directions();
    let mut signal = String::from("method,b,direction,signal\n");
    let mut emit_signal = |label: &str, fits: &[&dyn ParameterEstimate]| -> Result<()> {
        let per_fit: Vec<Vec<Vec<f64>>> = fits
            .iter()
            .map(|f| knots.iter().map(|b| signal_curve(*f, &scheme, *b)).collect::<Result<_>>())
            .collect::<Result<_>>()?;
        for (k, b) in knots.iter().enumerate() {
            for j in 0..dirs.len() {
                let mean = mean_sorted(per_fit.iter().map(|c| c[k][j]).collect());
                let _ = writeln!(signal, "{label},{},{j},{}", fmt_f64(*b), fmt_f64(mean));
            }
        }
        Ok(())
    };
    for (method, fits) in &estimates {
        let refs: Vec<&dyn ParameterEstimate> = fits.iter().map(|(_, e)| e as &dyn ParameterEstimate).collect();
        emit_signal(method.as_str(), &refs)?;
    }

    // MSE against the ground truth, when every voxel carries one.
    let mut summary = serde_json::Map::new();
    let truths_complete = sources.values().all(|s| s.truth.is_some());
    let files_written;
    if truths_complete {
        let truth_fit = |t: &GroundTruth| Estimate {
            method: Method::Mle,
            theta: t.theta_true.clone(),
            s0_sq: t.s0_true * t.s0_true,
            sigma_sq: t.sigma_sq_true,
        };
        let first = sources.values().next().and_then(|s| s.truth.clone()).expect("truth present");
        let tf = truth_fit(&first);
        emit_signal("truth", &[&tf])?;

        let mut mse = String::new();
        let mut signal_mse = String::from("method,b,signal_mse\n");
        let d = order.map(|o| o.dim()).unwrap_or(0);
        let _ = write!(mse, "method,datasets,theta_mse_mean,sigma_sq_mse,sigma_sq_bias");
        for j in 0..d {
            let _ = write!(mse, ",theta_mse_{j}");
        }
        mse.push('\n');
        let mut sigma_mse = BTreeMap::new();
        for (method, fits) in &estimates {
            if fits.is_empty() {
                continue;
            }
            let pairs: Vec<(&dyn ParameterEstimate, &GroundTruth)> = fits
                .iter()
                .map(|(id, e)| (e as &dyn ParameterEstimate, sources[id].truth.as_ref().expect("checked")))
                .collect();
            let table = mse_report(&pairs, &scheme)?;
            let row = &table.rows[0];
            let _ = write!(
                mse,
                "{method},{},{},{},{}",
                row.datasets,
                fmt_f64(row.theta_mse_mean),
                fmt_f64(row.sigma_sq_mse),
                fmt_f64(row.sigma_sq_bias)
            );
            for v in &row.theta_mse {
                let _ = write!(mse, ",{}", fmt_f64(*v));
            }
            mse.push('\n');
            for (b, v) in table.knots.iter().zip(&row.signal_mse) {
                let _ = writeln!(signal_mse, "{method},{},{}", fmt_f64(*b), fmt_f64(*v));
            }
            sigma_mse.insert(*method, row.sigma_sq_mse);
        }
        io::write_text(&a.out.join("mse.csv"), &mse)?;
        io::write_text(&a.out.join("signal_mse.csv"), &signal_mse)?;
        if let (Some(mle), Some(wls)) = (sigma_mse.get(&Method::Mle), sigma_mse.get(&Method::WlsTrunc)) {
            summary.insert("sigma_sq_mse_ratio_wls_trunc_over_mle".into(), json!(wls / mle));
        }
        summary.insert(
            "sigma_sq_mse".into(),
            json!(sigma_mse.iter().map(|(m, v)| (m.to_string(), json!(v))).collect::<serde_json::Map<_, _>>()),
        );
        files_written = vec!["snr.csv", "signal.csv", "mse.csv", "signal_mse.csv", "summary.json"];
    } else {
        let w = "ground truth missing for some voxels; MSE tables omitted".to_string();
        eprintln!("warning[no-truth]: {w}");
        warnings.push(w);
        files_written = vec!["snr.csv", "signal.csv", "summary.json"];
    }
    io::write_text(&a.out.join("snr.csv"), &snr)?;
    io::write_text(&a.out.join("signal.csv"), &signal)?;

    summary.insert("voxels".into(), json!(sources.len()));
    summary.insert(
        "methods".into(),
        json!(estimates.iter().map(|(m, f)| (m.to_string(), json!(f.len()))).collect::<serde_json::Map<_, _>>()),
    );
    summary.insert("excluded".into(), json!(excluded));
    summary.insert("warnings".into(), json!(warnings));
    let text = serde_json::to_string_pretty(&summary).expect("summary serialises") + "\n";
    io::write_text(&a.out.join("summary.json"), &text)?;
    println!("wrote {} to {}", files_written.join(", "), a.out.display());
    Ok(0)
}

fn mean_sorted(mut v: Vec<f64>) -> f64 {
    v.sort_by(|a, b| a.total_cmp(b));
    v.iter().sum::<f64>() / v.len() as f64
}

/// Parses `WIDTHxHEIGHT`.
pub fn parse_geometry(s: &str) -> Result<(usize, usize)> {
    let bad = || Error::invalid(format!("geometry must be WIDTHxHEIGHT, got `{s}`"));
    let (w, h) = s.split_once(['x', 'X', '×']).ok_or_else(bad)?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    if w == 0 || h == 0 {
        return Err(bad());
    }
    Ok((w, h))
}

/// Binary greyscale PGM with a linear min-max map onto 0..=255. Masked
/// cells are 0. Returns the image and the value range used.
pub fn to_pgm(width: usize, height: usize, values: &[f64], masked: &[bool]) -> (Vec<u8>, Option<(f64, f64)>) {
    let live = values.iter().zip(masked).filter(|(v, m)| !**m && v.is_finite()).map(|(v, _)| *v);
    let range = live.fold(None, |acc: Option<(f64, f64)>, v| match acc {
        None => Some((v, v)),
        Some((lo, hi)) => Some((lo.min(v), hi.max(v))),
    });
    let mut out = format!("P5\n{width} {height}\n255\n").into_bytes();
    out.extend(values.iter().zip(masked).map(|(v, m)| match range {
        Some((lo, hi)) if !*m && v.is_finite() && hi > lo => (255.0 * (v - lo) / (hi - lo)).round() as u8,
        _ => 0,
    }));
    (out, range)
}

fn cmd_maps(a: &MapsArgs) -> Result<i32> {
    let (width, height) = parse_geometry(&a.geometry)?;
    let (header, rows) = io::read_results(&a.results)?;
    let by_id: BTreeMap<usize, &ResultRow> = rows.iter().map(|r| (r.voxel_id, r)).collect();
    let ids: Vec<usize> = (a.first_id..a.first_id + width * height).collect();
    let missing: Vec<usize> = ids.iter().copied().filter(|i| !by_id.contains_key(i)).collect();
    if !missing.is_empty() {
        return Err(Error::invalid(format!("geometry {width}x{height} has no result for voxel ids: {}", fmt_ids(&missing))));
    }
    let grid: BTreeSet<usize> = ids.iter().copied().collect();
    let outside: Vec<usize> = by_id.keys().copied().filter(|i| !grid.contains(i)).collect();
    if !outside.is_empty() {
        return Err(Error::invalid(format!("voxel ids outside geometry {width}x{height}: {}", fmt_ids(&outside))));
    }
    let cells: Vec<&ResultRow> = ids.iter().map(|i| by_id[i]).collect();
    let masked: Vec<bool> = cells.iter().map(|r| r.degenerate).collect();

    let mut maps: Vec<(&str, Vec<f64>)> = Vec::new();
    if header.order == TensorOrder::Two {
        maps.push(("fa", cells.iter().map(|r| r.fa.unwrap_or(f64::NAN)).collect()));
    }
    maps.push(("md", cells.iter().map(|r| r.md).collect()));
    maps.push(("sigma", cells.iter().map(|r| r.sigma_sq.sqrt()).collect()));

    let mut ranges = serde_json::Map::new();
    for (name, values) in &maps {
        let mut csv = String::new();
        for row in 0..height {
            let line: Vec<String> = (0..width)
                .map(|col| {
                    let k = row * width + col;
                    if masked[k] || !values[k].is_finite() { "0".to_string() } else { fmt_f64(values[k]) }
                })
                .collect();
            csv.push_str(&line.join(","));
            csv.push('\n');
        }
        io::write_text(&a.out.join(format!("{name}.csv")), &csv)?;
        let (pgm, range) = to_pgm(width, height, values, &masked);
        let p = a.out.join(format!("{name}.pgm"));
        std::fs::write(&p, pgm).map_err(|e| Error::io(&p, e))?;
        ranges.insert(name.to_string(), json!(range.map(|(lo, hi)| [lo, hi])));
    }
    let nonfinite: Vec<usize> = cells
        .iter()
        .filter(|r| !r.degenerate && !(r.md.is_finite() && r.sigma_sq.is_finite()))
        .map(|r| r.voxel_id)
        .collect();
    let sidecar = json!({
        "width": width,
        "height": height,
        "first_id": a.first_id,
        "layout": "row-major",
        "method": header.method,
        "order": header.order,
        "ranges": ranges,
        "degenerate": cells.iter().filter(|r| r.degenerate).map(|r| r.voxel_id).collect::<Vec<_>>(),
        "nonfinite": nonfinite,
    });
    let text = serde_json::to_string_pretty(&sidecar).expect("sidecar serialises") + "\n";
    io::write_text(&a.out.join("maps.json"), &text)?;
    println!("wrote {} map(s) to {}", maps.len(), a.out.display());
    Ok(0)
}
