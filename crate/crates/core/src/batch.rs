//! Per-voxel dispatch and the parallel batch driver.

use std::time::Instant;

use rayon::prelude::*;
use serde_json::{json, Map, Value};

use crate::baselines::{self, BaselineReport, Curvature, DirectOptions, TRUNCATION_CUTOFF};
use crate::config::KeyValues;
use crate::em::{self, Acceleration, FitOptions, InitMethod, PriorSpec, ScoringMode};
use crate::error::{Error, Result};
use crate::io::{ResultRow, VoxelRecord};
use crate::report::Method;
use crate::scheme::Design;
use crate::tensor::{eigen_2nd_order, fractional_anisotropy, mean_diffusivity, positivity_check, TensorOrder, TensorParams};

const POSITIVITY_GRID: usize = 500;

/// Everything needed to fit one voxel.
#[derive(Debug, Clone, PartialEq)]
pub struct FitConfig {
    pub method: Method,
    pub order: TensorOrder,
    pub options: FitOptions,
    /// b cutoff of the truncated log-linear baselines.
    pub b_cutoff: f64,
    /// MAP: `omega = omega_scale * I`.
    pub omega_scale: f64,
    pub c1: f64,
    pub c2: f64,
    pub sigma_prior: bool,
    pub curvature: Curvature,
    /// Censoring floor of the direct fit; `None` picks it per voxel.
    pub y_min: Option<f64>,
}

impl Default for FitConfig {
    fn default() -> Self {
        let prior = PriorSpec::weak(TensorOrder::Two);
        Self {
            method: Method::Mle,
            order: TensorOrder::Two,
            options: FitOptions::default(),
            b_cutoff: TRUNCATION_CUTOFF,
            omega_scale: 0.0,
            c1: prior.c1,
            c2: prior.c2,
            sigma_prior: prior.sigma_prior,
            curvature: Curvature::Exact,
            y_min: None,
        }
    }
}

fn parse_choice<T>(kv: &KeyValues, key: &str, choices: &[(&str, T)]) -> Result<Option<T>>
where
    T: Copy,
{
    match kv.raw(key) {
        None => Ok(None),
        Some(v) => choices
            .iter()
            .find(|(name, _)| *name == v)
            .map(|(_, t)| Some(*t))
            .ok_or_else(|| {
                let names: Vec<&str> = choices.iter().map(|c| c.0).collect();
                Error::config(key, format!("`{v}` is not one of {}", names.join("|")))
            }),
    }
}

impl FitConfig {
    /// Overrides fields from a flat config; keys mirror the field names of
    /// [`FitOptions`] and [`PriorSpec`].
    pub fn apply(&mut self, kv: &KeyValues) -> Result<()> {
        if let Some(m) = kv.raw("method") {
            self.method = m.parse().map_err(|_| Error::config("method", format!("unknown method `{m}`")))?;
        }
        if let Some(o) = kv.get::<u8>("order")? {
            self.order = TensorOrder::try_from(o).map_err(|e| Error::config("order", e.to_string()))?;
        }
        let o = &mut self.options;
        macro_rules! set {
            ($field:expr, $key:literal, f64) => {
                if let Some(v) = kv.get_f64($key)? {
                    $field = v;
                }
            };
            ($field:expr, $key:literal, $t:ty) => {
                if let Some(v) = kv.get::<$t>($key)? {
                    $field = v;
                }
            };
        }
        set!(o.alpha, "alpha", f64);
        set!(o.anneal_threshold, "anneal_threshold", f64);
        set!(o.max_em_iters, "max_em_iters", usize);
        set!(o.max_scoring_iters, "max_scoring_iters", usize);
        set!(o.scoring_tol, "scoring_tol", f64);
        set!(o.tol_theta, "tol_theta", f64);
        set!(o.tol_loglik, "tol_loglik", f64);
        set!(o.init_b_cutoff, "init_b_cutoff", f64);
        set!(o.positivity_projection, "positivity_projection", bool);
        set!(o.ecme_sigma, "ecme_sigma", bool);
        if let Some(v) = parse_choice(kv, "init_method", &[("ls", InitMethod::Ls), ("wls", InitMethod::Wls)])? {
            o.init_method = v;
        }
        if let Some(v) = parse_choice(
            kv,
            "scoring",
            &[("to-convergence", ScoringMode::ToConvergence), ("single-step", ScoringMode::SingleStep)],
        )? {
            o.scoring = v;
        }
        if let Some(v) = parse_choice(kv, "acceleration", &[("none", Acceleration::None), ("squarem", Acceleration::Squarem)])? {
            o.acceleration = v;
        }
        set!(self.b_cutoff, "b_cutoff", f64);
        set!(self.omega_scale, "omega_scale", f64);
        set!(self.c1, "c1", f64);
        set!(self.c2, "c2", f64);
        set!(self.sigma_prior, "sigma_prior", bool);
        if let Some(v) = parse_choice(kv, "curvature", &[("exact", Curvature::Exact), ("approximate", Curvature::Approximate)])? {
            self.curvature = v;
        }
        if let Some(v) = kv.get_f64("y_min")? {
            self.y_min = Some(v);
        }
        Ok(())
    }

    pub fn prior(&self) -> PriorSpec {
        let mut p = PriorSpec::isotropic(self.order, self.omega_scale);
        p.c1 = self.c1;
        p.c2 = self.c2;
        p.sigma_prior = self.sigma_prior;
        p
    }

    pub fn validate(&self) -> Result<()> {
        self.options.validate()?;
        if !(self.omega_scale >= 0.0 && self.omega_scale.is_finite()) {
            return Err(Error::config("omega_scale", format!("must be >= 0, got {}", self.omega_scale)));
        }
        if !(self.b_cutoff >= 0.0) {
            return Err(Error::config("b_cutoff", "must be >= 0"));
        }
        if let Some(y) = self.y_min {
            if !(y > 0.0 && y.is_finite()) {
                return Err(Error::config("y_min", "must be positive"));
            }
        }
        self.prior().validate(self.order.dim())
    }

    /// Settings recorded in result headers; only those the method reads.
    pub fn settings(&self) -> Map<String, Value> {
        let o = &self.options;
        let mut m = Map::new();
        match self.method {
            Method::Mle | Method::Map => {
                m.insert("options".into(), serde_json::to_value(o).expect("options serialise"));
                if self.method == Method::Map {
                    m.insert("omega_scale".into(), json!(self.omega_scale));
                    m.insert("c1".into(), json!(self.c1));
                    m.insert("c2".into(), json!(self.c2));
                    m.insert("sigma_prior".into(), json!(self.sigma_prior));
                }
            }
            Method::LsTrunc | Method::WlsTrunc => {
                m.insert("b_cutoff".into(), json!(self.b_cutoff));
            }
            Method::Ls | Method::Wls => {}
            Method::RicianDirect => {
                m.insert("curvature".into(), serde_json::to_value(self.curvature).expect("serialises"));
                m.insert("y_min".into(), json!(self.y_min));
                m.insert("init_b_cutoff".into(), json!(o.init_b_cutoff));
            }
        }
        m
    }
}

/// One fitted voxel plus the wall time it took.
#[derive(Debug, Clone, PartialEq)]
pub struct VoxelOutcome {
    pub row: ResultRow,
    pub wall_seconds: f64,
}

struct Fitted {
    theta: TensorParams,
    s0_sq: f64,
    sigma_sq: f64,
    converged: bool,
    iterations: usize,
    loglik: f64,
    degenerate: bool,
    positivity_fail: Option<bool>,
}

fn from_baseline(r: BaselineReport) -> Fitted {
    Fitted {
        theta: r.theta,
        s0_sq: r.s0_sq,
        sigma_sq: r.sigma_sq,
        converged: r.converged,
        iterations: r.iterations,
        loglik: r.loglik,
        degenerate: r.degenerate,
        positivity_fail: None,
    }
}

fn run_method(design: &Design, y: &[f64], config: &FitConfig) -> Result<Fitted> {
    let cutoff = Some(config.b_cutoff);
    Ok(match config.method {
        Method::Mle | Method::Map => {
            let r = if config.method == Method::Mle {
                em::fit_mle(design, y, &config.options)?
            } else {
                em::fit_map(design, y, &config.prior(), &config.options)?
            };
            Fitted {
                converged: r.converged,
                iterations: r.iterations,
                loglik: r.loglik,
                degenerate: r.flags.degenerate,
                positivity_fail: Some(r.flags.positivity_fail),
                theta: r.theta,
                s0_sq: r.s0_sq,
                sigma_sq: r.sigma_sq,
            }
        }
        Method::Ls => from_baseline(baselines::fit_ls(design, y, None)?),
        Method::LsTrunc => from_baseline(baselines::fit_ls(design, y, cutoff)?),
        Method::Wls => from_baseline(baselines::fit_wls(design, y, None)?),
        Method::WlsTrunc => from_baseline(baselines::fit_wls(design, y, cutoff)?),
        Method::RicianDirect => {
            let opts = DirectOptions {
                curvature: config.curvature,
                y_min: config.y_min,
                init: config.options.clone(),
                ..DirectOptions::default()
            };
            from_baseline(baselines::fit_rician_direct(design, y, &opts)?)
        }
    })
}

fn empty_row(order: TensorOrder, method: Method, voxel_id: usize) -> ResultRow {
    ResultRow {
        voxel_id,
        method,
        order,
        theta: vec![f64::NAN; order.dim()],
        s0_sq: f64::NAN,
        sigma_sq: f64::NAN,
        converged: false,
        iterations: 0,
        loglik: f64::NAN,
        fa: (order == TensorOrder::Two).then_some(f64::NAN),
        md: f64::NAN,
        degenerate: false,
        non_converged: true,
        positivity_fail: false,
        status: "ok".into(),
    }
}

/// Fits one voxel, propagating estimator errors.
pub fn try_fit_voxel(design: &Design, config: &FitConfig, voxel_id: usize, y: &[f64]) -> Result<ResultRow> {
    let order = design.order();
    let f = run_method(design, y, config)?;
    let positivity_fail = match f.positivity_fail {
        Some(p) => p,
        None => !positivity_check(&f.theta, POSITIVITY_GRID).map(|r| r.pass).unwrap_or(false),
    };
    let mut row = empty_row(order, config.method, voxel_id);
    row.fa = match order {
        TensorOrder::Two => Some(
            eigen_2nd_order(&f.theta)
                .and_then(|e| fractional_anisotropy(&e))
                .unwrap_or(f64::NAN),
        ),
        TensorOrder::Four => None,
    };
    row.md = mean_diffusivity(&f.theta);
    row.theta = f.theta.into_theta();
    row.s0_sq = f.s0_sq;
    row.sigma_sq = f.sigma_sq;
    row.converged = f.converged;
    row.non_converged = !f.converged && !f.degenerate;
    row.iterations = f.iterations;
    row.loglik = f.loglik;
    row.degenerate = f.degenerate;
    row.positivity_fail = positivity_fail;
    Ok(row)
}

/// Fits one voxel. Estimator errors do not abort: they become a row with
/// NaN parameters, `status` set to the error kind, and `degenerate` set
/// when the data cannot support a fit.
pub fn fit_voxel(design: &Design, config: &FitConfig, voxel: &VoxelRecord) -> ResultRow {
    try_fit_voxel(design, config, voxel.voxel_id, &voxel.magnitudes).unwrap_or_else(|e| {
        let mut row = empty_row(design.order(), config.method, voxel.voxel_id);
        row.degenerate = matches!(e, Error::Degenerate(_) | Error::Initialization { .. } | Error::RankDeficient(_));
        row.non_converged = !row.degenerate;
        row.status = format!("error:{}", e.kind());
        row
    })
}

/// Fits every voxel on a pool of `workers` threads (0 = available
/// parallelism). Output is sorted by voxel id whatever the completion order.
pub fn fit_batch(design: &Design, config: &FitConfig, voxels: &[VoxelRecord], workers: usize) -> Result<Vec<VoxelOutcome>> {
    config.validate()?;
    if design.order() != config.order {
        return Err(Error::invalid(format!(
            "design order {} differs from requested order {}",
            design.order(),
            config.order
        )));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(workers)
        .build()
        .map_err(|e| Error::invalid(format!("cannot start worker pool: {e}")))?;
    let mut out: Vec<VoxelOutcome> = pool.install(|| {
        voxels
            .par_iter()
            .map(|v| {
                let start = Instant::now();
                let row = fit_voxel(design, config, v);
                VoxelOutcome { row, wall_seconds: start.elapsed().as_secs_f64() }
            })
            .collect()
    });
    out.sort_by_key(|o| o.row.voxel_id);
    Ok(out)
}

/// Exit-status rule: every voxel converged or was flagged degenerate.
pub fn all_settled(rows: &[ResultRow]) -> bool {
    rows.iter().all(|r| r.converged || r.degenerate)
}
