//! Config-driven experiments: a JSON [`ExperimentConfig`] in, CSV tables,
//! SVG plots and a `manifest.json` out.
//!
//! Wall-clock axes are replaced by the modeled cost of [`ComputeCostModel`].
//! Every random draw is keyed by the config seed, so reruns of the same
//! config produce byte-identical files. The manifest is written last and
//! records which artifacts completed.

use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::bounds::{
    brute_force_tv, equal_variance_tv_bound, escape_frequency, good_region_escape_bound, random_equal_variance_config,
    random_region_config, random_tv_config, responsibility_dominance_bound, sample_good_region, tv_bound,
    write_bound_csv, BoundCheckRow,
};
use crate::divergence::{cosine_similarity_histogram, knn_kl_to_target, CosSimHistogram, KLEstimate, DEFAULT_BINS};
use crate::error::{Error, Result};
use crate::gaussian::{GaussianMixtureTarget, Schedule, Target, UnimodalGaussianTarget};
use crate::plot::{histogram_chart, line_chart, LineChart, Scale, Series};
use crate::posterior::{mixture_posterior, responsibilities, sample_posterior};
use crate::recursion::{fm_variance_trace, fmt_f64, gaussian_kl_from_trace, tm_variance_trace};
use crate::rng::{aux_rng, fill_standard_normal};
use crate::samplers::{run_sampler, InnerMode, SamplerKind};

/// Image-task backbone cost per evaluation, seconds.
pub const IMAGE_C_BACKBONE: f64 = 0.01120;
/// Image-task flow-head cost per evaluation, seconds.
pub const IMAGE_C_HEAD: f64 = 0.00238;
pub const IMAGE_KAPPA: f64 = 4.70;
/// Video-task backbone cost per evaluation, seconds.
pub const VIDEO_C_BACKBONE: f64 = 0.00965;
/// Video-task flow-head cost per evaluation, seconds.
pub const VIDEO_C_HEAD: f64 = 0.00024;
pub const VIDEO_KAPPA: f64 = 40.08;
/// A reported `kappa` must agree with `C_B / C_H` to this relative tolerance.
pub const KAPPA_RTOL: f64 = 0.01;

pub const DEFAULT_KL_SAMPLES: usize = 100_000;
pub const DEFAULT_HIST_SAMPLES: usize = 10_000;
pub const DEFAULT_HIST_TIMES: [f64; 5] = [0.05, 0.1, 0.25, 0.5, 0.9];

const ANCHOR_TAG: u64 = 0x616e_6300;
const DRAW_TAG: u64 = 0x6472_6100;
const TV_TAG: u64 = 0x7476_0000;
const EQUAL_VARIANCE_TAG: u64 = 0x636f_7200;
const REGION_TAG: u64 = 0x7267_0000;
const ESCAPE_TAG: u64 = 0x6573_0000;
const POINTS_TAG: u64 = 0x7074_0000;

/// Linear cost accounting: `N C_B` for FM, `N C_B + N S C_H` for TM.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct ComputeCostModel {
    pub c_backbone: f64,
    pub c_head: f64,
    /// `C_B / C_H`, or the reported value when built by
    /// [`ComputeCostModel::with_reported_kappa`].
    pub kappa: f64,
}

impl ComputeCostModel {
    pub fn new(c_backbone: f64, c_head: f64) -> Result<Self> {
        if !(c_backbone > 0.0 && c_backbone.is_finite() && c_head > 0.0 && c_head.is_finite()) {
            return Err(Error::Config(format!(
                "costs must be positive and finite, got C_B = {c_backbone}, C_H = {c_head}"
            )));
        }
        Ok(Self { c_backbone, c_head, kappa: c_backbone / c_head })
    }

    /// Keep a separately reported (rounded) `kappa`, checked against `C_B / C_H`.
    pub fn with_reported_kappa(c_backbone: f64, c_head: f64, kappa: f64) -> Result<Self> {
        let mut m = Self::new(c_backbone, c_head)?;
        if !((kappa - m.kappa).abs() <= KAPPA_RTOL * kappa) {
            return Err(Error::Config(format!(
                "reported kappa {kappa} disagrees with C_B / C_H = {} by more than {}%",
                m.kappa,
                KAPPA_RTOL * 100.0
            )));
        }
        m.kappa = kappa;
        Ok(m)
    }

    pub fn image() -> Self {
        Self::with_reported_kappa(IMAGE_C_BACKBONE, IMAGE_C_HEAD, IMAGE_KAPPA).expect("image preset is consistent")
    }

    pub fn video() -> Self {
        Self::with_reported_kappa(VIDEO_C_BACKBONE, VIDEO_C_HEAD, VIDEO_KAPPA).expect("video preset is consistent")
    }

    /// Modeled seconds for `N` outer steps (and `S` inner steps for TM).
    pub fn cost(&self, kind: SamplerKind, n_outer: usize, n_inner: usize) -> Result<f64> {
        if n_outer == 0 {
            return Err(Error::Config("N must be at least 1".into()));
        }
        match kind {
            SamplerKind::Fm => Ok(n_outer as f64 * self.c_backbone),
            SamplerKind::Tm(_) => {
                if n_inner == 0 {
                    return Err(Error::Config("S must be at least 1 for TM".into()));
                }
                Ok(n_outer as f64 * self.c_backbone + (n_outer * n_inner) as f64 * self.c_head)
            }
        }
    }

    /// Extra inner steps per outer step bought by one fewer backbone call:
    /// `kappa / N`, not rounded.
    pub fn delta_inner_steps(&self, n_outer: f64) -> Result<f64> {
        if !(n_outer >= 1.0) {
            return Err(Error::Config(format!("N must be at least 1, got {n_outer}")));
        }
        Ok(self.kappa / n_outer)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExperimentKind {
    UnimodalKl,
    MixtureKl,
    PosteriorHist,
    BoundsCheck,
    CostModel,
}

impl ExperimentKind {
    pub fn as_str(&self) -> &'static str {
        match self {
            ExperimentKind::UnimodalKl => "unimodal_kl",
            ExperimentKind::MixtureKl => "mixture_kl",
            ExperimentKind::PosteriorHist => "posterior_hist",
            ExperimentKind::BoundsCheck => "bounds_check",
            ExperimentKind::CostModel => "cost_model",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CostPreset {
    Image,
    Video,
}

/// Either a preset or explicit `C_B`, `C_H` (with an optional reported kappa).
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CostModelSpec {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub preset: Option<CostPreset>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_backbone: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_head: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kappa: Option<f64>,
}

impl CostModelSpec {
    pub fn build(&self) -> Result<ComputeCostModel> {
        match (self.preset, self.c_backbone, self.c_head) {
            (Some(_), Some(_), _) | (Some(_), _, Some(_)) => {
                Err(Error::Config("cost_model: give either a preset or explicit costs, not both".into()))
            }
            (Some(_), None, None) if self.kappa.is_some() => {
                Err(Error::Config("cost_model: kappa is fixed by the preset".into()))
            }
            (Some(CostPreset::Image), None, None) | (None, None, None) => Ok(ComputeCostModel::image()),
            (Some(CostPreset::Video), None, None) => Ok(ComputeCostModel::video()),
            (None, Some(cb), Some(ch)) => match self.kappa {
                Some(k) => ComputeCostModel::with_reported_kappa(cb, ch, k),
                None => ComputeCostModel::new(cb, ch),
            },
            _ => Err(Error::Config("cost_model: c_backbone and c_head must be given together".into())),
        }
    }
}

/// A target distribution in a config.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    Unimodal(UnimodalGaussianTarget),
    Mixture(GaussianMixtureTarget),
    /// Two equal-weight modes at polar angles `+angle`, `-angle` (radians).
    SymmetricPair {
        radius: f64,
        angle: f64,
        sigma: f64,
    },
    /// `per_side x per_side` equal-weight modes on a centred square lattice in
    /// two dimensions, so `D_min = spacing`.
    Grid {
        spacing: f64,
        per_side: usize,
        sigma: f64,
    },
}

impl TargetSpec {
    pub fn build(&self) -> Result<Target> {
        match self {
            TargetSpec::Unimodal(u) => Ok(Target::Unimodal(u.clone())),
            TargetSpec::Mixture(m) => Ok(Target::Mixture(m.clone())),
            TargetSpec::SymmetricPair { radius, angle, sigma } => {
                GaussianMixtureTarget::symmetric_pair_on_circle(*radius, *angle, *sigma).map(Target::Mixture)
            }
            TargetSpec::Grid { spacing, per_side, sigma } => {
                grid_target(*spacing, *per_side, *sigma).map(Target::Mixture)
            }
        }
    }
}

/// Equal-weight lattice mixture; component `i * per_side + j` has mean
/// `spacing * (i - c, j - c)` with `c = (per_side - 1) / 2`.
pub fn grid_target(spacing: f64, per_side: usize, sigma: f64) -> Result<GaussianMixtureTarget> {
    if per_side == 0 {
        return Err(Error::InvalidTarget("grid needs at least one mode per side".into()));
    }
    if !(spacing > 0.0 && spacing.is_finite()) {
        return Err(Error::InvalidTarget(format!("grid spacing must be positive, got {spacing}")));
    }
    let c = (per_side as f64 - 1.0) / 2.0;
    let means = (0..per_side)
        .flat_map(|i| (0..per_side).map(move |j| vec![spacing * (i as f64 - c), spacing * (j as f64 - c)]))
        .collect();
    GaussianMixtureTarget::equal_weights(means, sigma)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NamedTarget {
    /// Used in output file names: ASCII letters, digits, `_`, `-`.
    pub name: String,
    pub target: TargetSpec,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Fm,
    TmEuler,
    TmExact,
}

impl Method {
    pub fn kind(&self) -> SamplerKind {
        match self {
            Method::Fm => SamplerKind::Fm,
            Method::TmEuler => SamplerKind::Tm(InnerMode::Euler),
            Method::TmExact => SamplerKind::Tm(InnerMode::Exact),
        }
    }

    pub fn as_str(&self) -> &'static str {
        match self {
            Method::Fm => "fm",
            Method::TmEuler => "tm_euler",
            Method::TmExact => "tm_exact",
        }
    }
}

/// Cartesian product of outer step counts `n` and inner step counts `s`.
/// `s` is required for `tm_euler` and must be empty otherwise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SamplerGrid {
    pub method: Method,
    pub n: Vec<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub s: Vec<usize>,
}

/// One sampler configuration from a [`SamplerGrid`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GridCell {
    pub method: Method,
    pub n: usize,
    pub s: Option<usize>,
}

impl GridCell {
    pub fn schedule(&self) -> Result<Schedule> {
        Schedule::new(self.n, self.s.unwrap_or(1))
    }

    /// `None` for exact inner sampling, whose head cost is not modeled.
    pub fn modeled_cost(&self, model: &ComputeCostModel) -> Result<Option<f64>> {
        match self.method {
            Method::TmExact => Ok(None),
            m => model.cost(m.kind(), self.n, self.s.unwrap_or(1)).map(Some),
        }
    }
}

impl SamplerGrid {
    fn validate(&self) -> Result<()> {
        if self.n.is_empty() || self.n.contains(&0) {
            return Err(Error::Config(format!(
                "{}: n must be a non-empty list of positive counts",
                self.method.as_str()
            )));
        }
        match self.method {
            Method::TmEuler if self.s.is_empty() || self.s.contains(&0) => {
                Err(Error::Config("tm_euler: s must be a non-empty list of positive counts".into()))
            }
            Method::Fm | Method::TmExact if !self.s.is_empty() => {
                Err(Error::Config(format!("{}: s is only meaningful for tm_euler", self.method.as_str())))
            }
            _ => Ok(()),
        }
    }

    pub fn cells(&self) -> Vec<GridCell> {
        let ss: Vec<Option<usize>> =
            if self.s.is_empty() { vec![None] } else { self.s.iter().map(|&s| Some(s)).collect() };
        self.n.iter().flat_map(|&n| ss.iter().map(move |&s| GridCell { method: self.method, n, s })).collect()
    }
}

/// Settings of the randomized bound-validation suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BoundSuiteConfig {
    /// Random configurations for the general TV bound.
    pub tv_configs: usize,
    /// Random equal-variance configurations for the simplified TV bound.
    pub equal_variance_configs: usize,
    /// Random good-region configurations for the escape and dominance bounds.
    pub region_configs: usize,
    /// Path-marginal draws per escape-frequency estimate.
    pub escape_draws: usize,
    /// In-region points per dominance check.
    pub region_points: usize,
}

impl Default for BoundSuiteConfig {
    fn default() -> Self {
        Self {
            tv_configs: 200,
            equal_variance_configs: 200,
            region_configs: 50,
            escape_draws: 100_000,
            region_points: 1000,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    #[serde(default)]
    pub seed: u64,
    /// Monte Carlo sample count `M`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub samples: Option<usize>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub targets: Vec<NamedTarget>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub samplers: Vec<SamplerGrid>,
    #[serde(default)]
    pub cost_model: CostModelSpec,
    /// Used when no output directory is given on the command line.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output_dir: Option<PathBuf>,
    /// `unimodal_kl`: also estimate KL from samples (default true).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub monte_carlo: Option<bool>,
    /// `posterior_hist`: evaluation times.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub times: Vec<f64>,
    /// `posterior_hist`: histogram bins on `[-1, 1]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bins: Option<usize>,
    /// `posterior_hist`: component whose path the evaluation point follows.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub anchor_component: Option<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bounds: Option<BoundSuiteConfig>,
}

impl ExperimentConfig {
    /// Parse and validate; the result has every default filled in.
    pub fn from_json(text: &str) -> Result<Self> {
        let raw: Self = serde_json::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        raw.resolved()
    }

    pub fn from_path(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_json(&text)
    }

    /// Validate and fill defaults. Idempotent.
    pub fn resolved(&self) -> Result<Self> {
        let mut c = self.clone();
        c.cost_model.build()?;
        let mut names = std::collections::BTreeSet::new();
        for t in &c.targets {
            if t.name.is_empty() || !t.name.chars().all(|ch| ch.is_ascii_alphanumeric() || ch == '_' || ch == '-') {
                return Err(Error::Config(format!("target name {:?} must be non-empty ASCII [A-Za-z0-9_-]", t.name)));
            }
            if !names.insert(t.name.clone()) {
                return Err(Error::Config(format!("duplicate target name {:?}", t.name)));
            }
            t.target.build().map_err(|e| Error::Config(format!("target {}: {e}", t.name)))?;
        }
        for g in &c.samplers {
            g.validate()?;
        }
        let needs = |what: &str, ok: bool| {
            if ok {
                Ok(())
            } else {
                Err(Error::Config(format!("{} needs {what}", self.kind.as_str())))
            }
        };
        let only = |what: &str, present: bool| {
            if present {
                Err(Error::Config(format!("{} does not use {what}", self.kind.as_str())))
            } else {
                Ok(())
            }
        };
        match c.kind {
            ExperimentKind::UnimodalKl | ExperimentKind::MixtureKl => {
                needs("at least one target", !c.targets.is_empty())?;
                needs("at least one sampler grid", !c.samplers.is_empty())?;
                only("times", !c.times.is_empty())?;
                only("bins", c.bins.is_some())?;
                only("anchor_component", c.anchor_component.is_some())?;
                only("bounds", c.bounds.is_some())?;
                if c.kind == ExperimentKind::UnimodalKl {
                    for t in &c.targets {
                        if !matches!(t.target, TargetSpec::Unimodal(_)) {
                            return Err(Error::Config(format!("unimodal_kl target {} must be unimodal", t.name)));
                        }
                    }
                    c.monte_carlo.get_or_insert(true);
                } else {
                    only("monte_carlo", c.monte_carlo.is_some())?;
                }
                let mc = c.monte_carlo.unwrap_or(true);
                let m = *c.samples.get_or_insert(DEFAULT_KL_SAMPLES);
                if mc && m < crate::divergence::MIN_KNN_SAMPLES {
                    return Err(Error::Config(format!(
                        "samples must be at least {} for the nearest-neighbour KL",
                        crate::divergence::MIN_KNN_SAMPLES
                    )));
                }
                for t in &c.targets {
                    let d = t.target.build()?.dim();
                    if mc && d > crate::divergence::MAX_KNN_DIM {
                        return Err(Error::Config(format!(
                            "target {} has d = {d} > {}",
                            t.name,
                            crate::divergence::MAX_KNN_DIM
                        )));
                    }
                }
            }
            ExperimentKind::PosteriorHist => {
                needs("at least one target", !c.targets.is_empty())?;
                only("samplers", !c.samplers.is_empty())?;
                only("monte_carlo", c.monte_carlo.is_some())?;
                only("bounds", c.bounds.is_some())?;
                if c.times.is_empty() {
                    c.times = DEFAULT_HIST_TIMES.to_vec();
                }
                if c.times.iter().any(|t| !(0.0..=1.0).contains(t)) {
                    return Err(Error::Config("times must lie in [0, 1]".into()));
                }
                if *c.samples.get_or_insert(DEFAULT_HIST_SAMPLES) == 0 {
                    return Err(Error::Config("samples must be at least 1".into()));
                }
                if *c.bins.get_or_insert(DEFAULT_BINS) == 0 {
                    return Err(Error::Config("bins must be at least 1".into()));
                }
                let k = *c.anchor_component.get_or_insert(0);
                let dims: Vec<usize> =
                    c.targets.iter().map(|t| t.target.build().map(|x| x.dim())).collect::<Result<_>>()?;
                for (t, d) in c.targets.iter().zip(&dims) {
                    if k >= t.target.build()?.to_mixture().len() {
                        return Err(Error::Config(format!("anchor_component {k} out of range for target {}", t.name)));
                    }
                    if *d != dims[0] {
                        return Err(Error::Config("posterior_hist targets must share a dimension".into()));
                    }
                }
            }
            ExperimentKind::BoundsCheck => {
                only("targets", !c.targets.is_empty())?;
                only("samplers", !c.samplers.is_empty())?;
                only("samples", c.samples.is_some())?;
                only("times", !c.times.is_empty())?;
                only("monte_carlo", c.monte_carlo.is_some())?;
                let b = c.bounds.get_or_insert_with(BoundSuiteConfig::default);
                if b.escape_draws == 0 || b.region_points == 0 {
                    return Err(Error::Config("bounds: escape_draws and region_points must be positive".into()));
                }
            }
            ExperimentKind::CostModel => {
                needs("at least one sampler grid", !c.samplers.is_empty())?;
                only("targets", !c.targets.is_empty())?;
                only("samples", c.samples.is_some())?;
                only("times", !c.times.is_empty())?;
                only("monte_carlo", c.monte_carlo.is_some())?;
                only("bounds", c.bounds.is_some())?;
            }
        }
        Ok(c)
    }

    pub fn cells(&self) -> Vec<GridCell> {
        self.samplers.iter().flat_map(SamplerGrid::cells).collect()
    }
}

/// Name of one output column and the library operation that produced it.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ColumnSource {
    pub name: String,
    pub source: String,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub format: String,
    pub complete: bool,
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub columns: Vec<ColumnSource>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Manifest {
    pub tool: String,
    pub version: String,
    pub kind: ExperimentKind,
    pub complete: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub config: ExperimentConfig,
    pub cost_model: ComputeCostModel,
    pub artifacts: Vec<Artifact>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

struct Bundle {
    dir: PathBuf,
    artifacts: Vec<Artifact>,
}

impl Bundle {
    fn begin(&mut self, path: String, columns: &[(&str, &str)]) -> usize {
        let format = path.rsplit('.').next().unwrap_or("").to_string();
        self.artifacts.push(Artifact {
            path,
            format,
            complete: false,
            columns: columns.iter().map(|(n, s)| ColumnSource { name: n.to_string(), source: s.to_string() }).collect(),
        });
        self.artifacts.len() - 1
    }

    fn finish(&mut self, idx: usize, bytes: &[u8]) -> Result<()> {
        fs::write(self.dir.join(&self.artifacts[idx].path), bytes)?;
        self.artifacts[idx].complete = true;
        Ok(())
    }

    fn emit(&mut self, path: String, columns: &[(&str, &str)], make: impl FnOnce() -> Result<Vec<u8>>) -> Result<()> {
        let idx = self.begin(path, columns);
        let bytes = make()?;
        self.finish(idx, &bytes)
    }
}

fn opt(v: Option<f64>) -> String {
    v.map(fmt_f64).unwrap_or_default()
}

fn csv_bytes(header: &[&str], rows: &[Vec<String>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(header)?;
    for r in rows {
        w.write_record(r)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.to_string()))
}

/// Run an experiment and write its bundle into `out_dir` (created if
/// missing). On failure a manifest marked incomplete is still written.
pub fn run_experiment(config: &ExperimentConfig, out_dir: &Path) -> Result<Manifest> {
    let config = config.resolved()?;
    let model = config.cost_model.build()?;
    fs::create_dir_all(out_dir)?;
    let mut bundle = Bundle { dir: out_dir.to_path_buf(), artifacts: Vec::new() };
    let outcome = match config.kind {
        ExperimentKind::UnimodalKl => run_unimodal_kl(&config, &model, &mut bundle),
        ExperimentKind::MixtureKl => run_mixture_kl(&config, &model, &mut bundle),
        ExperimentKind::PosteriorHist => run_posterior_hist(&config, &mut bundle),
        ExperimentKind::BoundsCheck => run_bounds_check(&config, &mut bundle),
        ExperimentKind::CostModel => run_cost_model(&config, &model, &mut bundle),
    };
    let manifest = Manifest {
        tool: env!("CARGO_PKG_NAME").to_string(),
        version: env!("CARGO_PKG_VERSION").to_string(),
        kind: config.kind,
        complete: outcome.is_ok(),
        error: outcome.as_ref().err().map(|e| e.to_string()),
        config,
        cost_model: model,
        artifacts: bundle.artifacts,
    };
    let mut text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Io(e.to_string()))?;
    text.push('\n');
    fs::write(out_dir.join(MANIFEST_FILE), text)?;
    outcome.map(|_| manifest)
}

/// One row of a KL-versus-cost table.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct KLCostRow {
    pub method: Method,
    pub n: usize,
    pub s: Option<usize>,
    pub modeled_cost: Option<f64>,
    pub kl_closed_form: Option<f64>,
    pub kl_mc: Option<KLEstimate>,
}

impl KLCostRow {
    fn record(&self) -> Vec<String> {
        vec![
            self.method.as_str().to_string(),
            self.n.to_string(),
            self.s.map(|s| s.to_string()).unwrap_or_default(),
            opt(self.modeled_cost),
            opt(self.kl_closed_form),
            opt(self.kl_mc.map(|k| k.value)),
            opt(self.kl_mc.and_then(|k| k.std_error)),
        ]
    }
}

const KL_COLUMNS: [(&str, &str); 7] = [
    ("method", "config sampler grid"),
    ("N", "config sampler grid"),
    ("S", "config sampler grid"),
    ("modeled_cost", "harness::ComputeCostModel::cost"),
    ("kl_closed_form", "recursion::gaussian_kl_from_trace"),
    ("kl_mc", "divergence::knn_kl_to_target on samplers::run_sampler output"),
    ("mc_se", "divergence::knn_kl bootstrap standard error"),
];

/// KL of one sampler configuration against `target`: closed form for
/// unimodal targets, nearest-neighbour estimate from `m` trajectories when
/// `m` is given.
pub fn kl_cost_row(
    target: &Target,
    cell: GridCell,
    model: &ComputeCostModel,
    m: Option<usize>,
    seed: u64,
) -> Result<KLCostRow> {
    let sched = cell.schedule()?;
    let kl_closed_form = match target {
        Target::Unimodal(u) => {
            let (sigma, d) = (u.sigma(), u.dim());
            Some(match cell.method {
                Method::Fm => gaussian_kl_from_trace(&fm_variance_trace(sigma, cell.n, d)?).kl_fm,
                Method::TmEuler | Method::TmExact => {
                    let mode = if cell.method == Method::TmEuler { InnerMode::Euler } else { InnerMode::Exact };
                    gaussian_kl_from_trace(&tm_variance_trace(sigma, &sched, mode, d)?)
                        .kl_tm
                        .expect("TM trace carries a TM column")
                }
            })
        }
        Target::Mixture(_) => None,
    };
    let kl_mc = match m {
        Some(m) => {
            let run = run_sampler(target, cell.method.kind(), &sched, m, seed, false)?;
            Some(knn_kl_to_target(&run.final_batch, target, seed)?)
        }
        None => None,
    };
    Ok(KLCostRow {
        method: cell.method,
        n: cell.n,
        s: cell.s,
        modeled_cost: cell.modeled_cost(model)?,
        kl_closed_form,
        kl_mc,
    })
}

fn kl_series(rows: &[KLCostRow], prefix: &str, value: impl Fn(&KLCostRow) -> Option<f64>) -> Vec<Series> {
    let mut out: Vec<Series> = Vec::new();
    for r in rows {
        let label = match (r.method, r.s) {
            (Method::TmEuler, _) if rows.iter().any(|o| o.method == Method::TmEuler && o.n != r.n) => {
                format!("{prefix}{} N={}", r.method.as_str(), r.n)
            }
            _ => format!("{prefix}{}", r.method.as_str()),
        };
        let (Some(c), Some(v)) = (r.modeled_cost, value(r)) else { continue };
        match out.iter_mut().find(|s| s.label == label) {
            Some(s) => s.points.push((c, v)),
            None => out.push(Series { label, points: vec![(c, v)] }),
        }
    }
    for s in &mut out {
        s.points.sort_by(|a, b| a.0.total_cmp(&b.0));
    }
    out
}

fn run_kl_rows(
    config: &ExperimentConfig,
    model: &ComputeCostModel,
    target: &Target,
    mc: bool,
) -> Result<Vec<KLCostRow>> {
    let m = if mc { config.samples } else { None };
    config.cells().into_par_iter().map(|cell| kl_cost_row(target, cell, model, m, config.seed)).collect()
}

fn run_unimodal_kl(config: &ExperimentConfig, model: &ComputeCostModel, bundle: &mut Bundle) -> Result<()> {
    let mc = config.monte_carlo.unwrap_or(true);
    for nt in &config.targets {
        let target = nt.target.build()?;
        let csv_idx = bundle.begin(format!("unimodal_kl_{}.csv", nt.name), &KL_COLUMNS);
        let rows = run_kl_rows(config, model, &target, mc)?;
        let records: Vec<Vec<String>> = rows.iter().map(KLCostRow::record).collect();
        let header: Vec<&str> = KL_COLUMNS.iter().map(|c| c.0).collect();
        bundle.finish(csv_idx, &csv_bytes(&header, &records)?)?;
        bundle.emit(format!("unimodal_kl_{}.svg", nt.name), &[], || {
            let mut series = kl_series(&rows, "", |r| r.kl_closed_form);
            if mc {
                series.extend(kl_series(&rows, "MC ", |r| r.kl_mc.map(|k| k.value)));
            }
            Ok(line_chart(&LineChart {
                title: &format!("KL to target vs modeled cost ({})", nt.name),
                x_label: "modeled cost (s)",
                y_label: "KL",
                x_scale: Scale::Log,
                y_scale: Scale::Log,
                series,
            })
            .into_bytes())
        })?;
    }
    Ok(())
}

fn run_mixture_kl(config: &ExperimentConfig, model: &ComputeCostModel, bundle: &mut Bundle) -> Result<()> {
    let mut all_series = Vec::new();
    let columns: Vec<(&str, &str)> = KL_COLUMNS.iter().copied().filter(|c| c.0 != "kl_closed_form").collect();
    for nt in &config.targets {
        let target = nt.target.build()?;
        let idx = bundle.begin(format!("mixture_kl_{}.csv", nt.name), &columns);
        let rows = run_kl_rows(config, model, &target, true)?;
        let records: Vec<Vec<String>> = rows
            .iter()
            .map(|r| {
                let mut rec = r.record();
                rec.remove(4);
                rec
            })
            .collect();
        let header: Vec<&str> = columns.iter().map(|c| c.0).collect();
        bundle.finish(idx, &csv_bytes(&header, &records)?)?;
        all_series.extend(kl_series(&rows, &format!("{} ", nt.name), |r| r.kl_mc.map(|k| k.value)));
    }
    bundle.emit("mixture_kl.svg".into(), &[], || {
        Ok(line_chart(&LineChart {
            title: "Mixture KL vs modeled cost",
            x_label: "modeled cost (s)",
            y_label: "KL (nearest-neighbour estimate)",
            x_scale: Scale::Log,
            y_scale: Scale::Log,
            series: all_series,
        })
        .into_bytes())
    })
}

/// Point `x_t = (1 - t) z0 + t (mu_k + sigma_k z1)` on one interpolation
/// path into component `k`. The noise pair depends only on `seed`, so
/// targets of equal dimension are compared at matched paths.
pub fn anchored_path_point(target: &GaussianMixtureTarget, k: usize, t: f64, seed: u64) -> Result<Vec<f64>> {
    if k >= target.len() {
        return Err(Error::domain(format!("component index {k} out of range")));
    }
    let d = target.dim();
    let mut rng = aux_rng(seed, ANCHOR_TAG);
    let mut z0 = vec![0.0; d];
    let mut z1 = vec![0.0; d];
    fill_standard_normal(&mut rng, &mut z0);
    fill_standard_normal(&mut rng, &mut z1);
    let c = target.component(k);
    Ok((0..d).map(|i| (1.0 - t) * z0[i] + t * (c.mean[i] + c.sigma * z1[i])).collect())
}

/// Cosine histogram of `m` exact posterior draws of `V` at the anchored path
/// point, against the exact conditional mean `E[V | x]`.
pub fn posterior_cosine_histogram(
    target: &GaussianMixtureTarget,
    k: usize,
    t: f64,
    m: usize,
    bins: usize,
    seed: u64,
) -> Result<CosSimHistogram> {
    let x = anchored_path_point(target, k, t, seed)?;
    let post = mixture_posterior(target, t, &x)?;
    let tag = DRAW_TAG ^ t.to_bits();
    let draws: Vec<f64> = sample_posterior(&post, &mut aux_rng(seed, tag), m).concat();
    let reference = Target::Mixture(target.clone()).conditional_mean(t, &x)?;
    cosine_similarity_histogram(t, &draws, target.dim(), &reference, bins)
}

fn run_posterior_hist(config: &ExperimentConfig, bundle: &mut Bundle) -> Result<()> {
    let m = config.samples.unwrap_or(DEFAULT_HIST_SAMPLES);
    let bins = config.bins.unwrap_or(DEFAULT_BINS);
    let k = config.anchor_component.unwrap_or(0);
    let mut summary = Vec::new();
    for nt in &config.targets {
        let target = nt.target.build()?.to_mixture();
        let idx = bundle.begin(
            format!("posterior_hist_{}.csv", nt.name),
            &[
                ("t", "config times"),
                ("bin_left", "divergence::cosine_similarity_histogram"),
                ("bin_right", "divergence::cosine_similarity_histogram"),
                ("count", "divergence::cosine_similarity_histogram"),
            ],
        );
        let hists: Vec<CosSimHistogram> = config
            .times
            .iter()
            .map(|&t| posterior_cosine_histogram(&target, k, t, m, bins, config.seed))
            .collect::<Result<_>>()?;
        let mut records = Vec::new();
        for h in &hists {
            for (i, c) in h.counts.iter().enumerate() {
                records.push(vec![fmt_f64(h.t), fmt_f64(h.bin_edges[i]), fmt_f64(h.bin_edges[i + 1]), c.to_string()]);
            }
            let w = responsibilities(&target, h.t, &anchored_path_point(&target, k, h.t, config.seed)?)?;
            summary.push(vec![
                nt.name.clone(),
                opt(target.min_separation()),
                fmt_f64(h.t),
                fmt_f64(h.frac_above_0_9),
                fmt_f64(h.frac_std_error()),
                fmt_f64(w[k]),
                h.m.to_string(),
                h.excluded.to_string(),
            ]);
        }
        bundle.finish(idx, &csv_bytes(&["t", "bin_left", "bin_right", "count"], &records)?)?;
        bundle.emit(format!("posterior_hist_{}.svg", nt.name), &[], || {
            let labelled: Vec<(String, Vec<u64>)> =
                hists.iter().map(|h| (format!("t = {}", h.t), h.counts.clone())).collect();
            Ok(histogram_chart(
                &format!("cos(V, E[V | x]) ({})", nt.name),
                "cosine similarity",
                &hists[0].bin_edges,
                &labelled,
            )
            .into_bytes())
        })?;
    }
    bundle.emit(
        "posterior_hist_summary.csv".into(),
        &[
            ("target", "config targets"),
            ("d_min", "gaussian::GaussianMixtureTarget::min_separation"),
            ("t", "config times"),
            ("frac_above_0_9", "divergence::cosine_similarity_histogram"),
            ("frac_se", "divergence::CosSimHistogram::frac_std_error"),
            ("anchor_responsibility", "posterior::responsibilities"),
            ("M", "config samples"),
            ("excluded", "divergence::cosine_similarity_histogram"),
        ],
        || {
            csv_bytes(
                &["target", "d_min", "t", "frac_above_0_9", "frac_se", "anchor_responsibility", "M", "excluded"],
                &summary,
            )
        },
    )
}

/// Randomized soundness checks of the mixture bounds. Each configuration
/// draws from its own stream of `seed`.
pub fn bound_check_rows(suite: &BoundSuiteConfig, seed: u64) -> Result<Vec<BoundCheckRow>> {
    let tv: Vec<BoundCheckRow> = (0..suite.tv_configs)
        .into_par_iter()
        .map(|i| {
            let cfg = random_tv_config(&mut aux_rng(seed, TV_TAG + i as u64));
            let rep = tv_bound(&cfg.target, cfg.t, &cfg.x)?;
            let oracle = brute_force_tv(&cfg.target, cfg.t, &cfg.x)?;
            Ok(BoundCheckRow {
                config_id: format!("tv-{i:03}"),
                bound_name: "tv_localized".into(),
                bound_value: rep.bound_value,
                oracle_value: oracle,
                vacuous: rep.vacuous,
                pass: oracle <= rep.bound_value.min(1.0),
            })
        })
        .collect::<Result<_>>()?;
    let equal_variance: Vec<BoundCheckRow> = (0..suite.equal_variance_configs)
        .into_par_iter()
        .map(|i| {
            let cfg = random_equal_variance_config(&mut aux_rng(seed, EQUAL_VARIANCE_TAG + i as u64));
            let bound = equal_variance_tv_bound(&cfg.target, cfg.t, &cfg.x)?;
            let oracle = brute_force_tv(&cfg.target, cfg.t, &cfg.x)?;
            Ok(BoundCheckRow {
                config_id: format!("equal-variance-{i:03}"),
                bound_name: "tv_equal_variance".into(),
                bound_value: bound,
                oracle_value: oracle,
                vacuous: !(bound < 1.0),
                pass: oracle <= bound.min(1.0),
            })
        })
        .collect::<Result<_>>()?;
    let region: Vec<Vec<BoundCheckRow>> = (0..suite.region_configs)
        .into_par_iter()
        .map(|i| {
            let mut rng = aux_rng(seed, REGION_TAG + i as u64);
            let (target, spec) = random_region_config(&mut rng);
            let k = rng.random_range(0..target.len());
            let id = format!("region-{i:03}");
            let esc = good_region_escape_bound(&target, &spec)?;
            let freq = escape_frequency(&target, &spec, suite.escape_draws, seed ^ (ESCAPE_TAG + i as u64))?;
            let slack = 3.0 * freq.std_error;
            let mut pts_rng = aux_rng(seed, POINTS_TAG + i as u64);
            let pts =
                sample_good_region(&mut pts_rng, &target, &spec, k, suite.region_points, 1000 * suite.region_points)?;
            let worst = pts
                .iter()
                .map(|x| responsibilities(&target, spec.t, x).map(|w| 1.0 - w[k]))
                .collect::<Result<Vec<f64>>>()?
                .into_iter()
                .fold(0.0, f64::max);
            let eps = responsibility_dominance_bound(&target, &spec, k)?;
            Ok(vec![
                BoundCheckRow {
                    config_id: id.clone(),
                    bound_name: "escape".into(),
                    bound_value: esc.bound.value,
                    oracle_value: freq.frequency,
                    vacuous: esc.bound.vacuous,
                    pass: freq.frequency <= esc.bound.value + slack,
                },
                BoundCheckRow {
                    config_id: id.clone(),
                    bound_name: "escape_b_max".into(),
                    bound_value: esc.with_b_max.value,
                    oracle_value: freq.frequency,
                    vacuous: esc.with_b_max.vacuous,
                    pass: freq.frequency <= esc.with_b_max.value + slack,
                },
                BoundCheckRow {
                    config_id: id,
                    bound_name: "dominance".into(),
                    bound_value: eps.value,
                    oracle_value: worst,
                    vacuous: eps.vacuous,
                    pass: worst <= eps.value,
                },
            ])
        })
        .collect::<Result<_>>()?;
    Ok(tv.into_iter().chain(equal_variance).chain(region.into_iter().flatten()).collect())
}

fn run_bounds_check(config: &ExperimentConfig, bundle: &mut Bundle) -> Result<()> {
    let suite = config.bounds.clone().unwrap_or_default();
    bundle.emit(
        "bounds_check.csv".into(),
        &[
            ("config_id", "harness::bound_check_rows"),
            ("bound_name", "harness::bound_check_rows"),
            ("bound_value", "bounds::tv_bound | bounds::equal_variance_tv_bound | bounds::good_region_escape_bound | bounds::responsibility_dominance_bound"),
            ("oracle_value", "bounds::brute_force_tv | bounds::escape_frequency | posterior::responsibilities"),
            ("vacuous_flag", "bound value >= 1"),
            ("pass", "oracle <= min(1, bound) for TV; oracle <= bound + 3 SE for escape; oracle <= bound for dominance"),
        ],
        || {
            let rows = bound_check_rows(&suite, config.seed)?;
            let mut buf = Vec::new();
            write_bound_csv(&rows, &mut buf)?;
            Ok(buf)
        },
    )
}

fn run_cost_model(config: &ExperimentConfig, model: &ComputeCostModel, bundle: &mut Bundle) -> Result<()> {
    let cells = config.cells();
    let rows: Vec<(GridCell, Option<f64>, f64)> = cells
        .iter()
        .map(|c| Ok((*c, c.modeled_cost(model)?, model.delta_inner_steps(c.n as f64)?)))
        .collect::<Result<_>>()?;
    bundle.emit(
        "cost_model.csv".into(),
        &[
            ("method", "config sampler grid"),
            ("N", "config sampler grid"),
            ("S", "config sampler grid"),
            ("modeled_cost", "harness::ComputeCostModel::cost"),
            ("delta_inner_steps", "harness::ComputeCostModel::delta_inner_steps"),
        ],
        || {
            let records: Vec<Vec<String>> = rows
                .iter()
                .map(|(c, cost, ds)| {
                    vec![
                        c.method.as_str().to_string(),
                        c.n.to_string(),
                        c.s.map(|s| s.to_string()).unwrap_or_default(),
                        opt(*cost),
                        fmt_f64(*ds),
                    ]
                })
                .collect();
            csv_bytes(&["method", "N", "S", "modeled_cost", "delta_inner_steps"], &records)
        },
    )?;
    bundle.emit("cost_model.svg".into(), &[], || {
        let mut series: Vec<Series> = Vec::new();
        for (c, cost, _) in &rows {
            let Some(cost) = cost else { continue };
            let label = match c.s {
                Some(s) => format!("{} S={s}", c.method.as_str()),
                None => c.method.as_str().to_string(),
            };
            match series.iter_mut().find(|s| s.label == label) {
                Some(s) => s.points.push((c.n as f64, *cost)),
                None => series.push(Series { label, points: vec![(c.n as f64, *cost)] }),
            }
        }
        Ok(line_chart(&LineChart {
            title: "Modeled cost",
            x_label: "N",
            y_label: "modeled cost (s)",
            x_scale: Scale::Log,
            y_scale: Scale::Log,
            series,
        })
        .into_bytes())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_preset_cost() {
        let m = ComputeCostModel::image();
        let c = m.cost(SamplerKind::Tm(InnerMode::Euler), 16, 8).unwrap();
        assert_eq!(c, 16.0 * 0.01120 + 128.0 * 0.00238);
        assert_eq!(m.cost(SamplerKind::Fm, 3, 99).unwrap(), 3.0 * 0.01120);
        assert!(m.cost(SamplerKind::Fm, 0, 1).is_err());
        assert!(m.cost(SamplerKind::Tm(InnerMode::Euler), 1, 0).is_err());
    }

    #[test]
    fn kappa_and_delta_s() {
        let v = ComputeCostModel::video();
        assert_eq!(v.kappa, 40.08);
        assert_eq!(v.delta_inner_steps(1.0).unwrap(), 40.08);
        let m = ComputeCostModel { c_backbone: 4.7, c_head: 1.0, kappa: 4.70 };
        assert_eq!(m.delta_inner_steps(4.70).unwrap(), 1.0);
        assert!(v.delta_inner_steps(1e12).unwrap() < 1e-10);
        assert!(v.delta_inner_steps(0.5).is_err());
    }

    #[test]
    fn reported_kappa_is_checked() {
        assert!(ComputeCostModel::with_reported_kappa(1.0, 0.5, 2.01).is_ok());
        assert!(ComputeCostModel::with_reported_kappa(1.0, 0.5, 2.5).is_err());
        assert!(ComputeCostModel::new(0.0, 1.0).is_err());
    }

    #[test]
    fn cost_spec_resolution() {
        assert_eq!(CostModelSpec::default().build().unwrap(), ComputeCostModel::image());
        let s = CostModelSpec { preset: Some(CostPreset::Video), ..Default::default() };
        assert_eq!(s.build().unwrap(), ComputeCostModel::video());
        let both = CostModelSpec { preset: Some(CostPreset::Video), c_backbone: Some(1.0), ..Default::default() };
        assert!(both.build().is_err());
        let half = CostModelSpec { c_head: Some(1.0), ..Default::default() };
        assert!(half.build().is_err());
    }

    #[test]
    fn grid_target_spacing() {
        let g = grid_target(8.0, 5, 1.0).unwrap();
        assert_eq!(g.len(), 25);
        assert_eq!(g.min_separation(), Some(8.0));
        assert_eq!(g.component(18).mean, vec![8.0, 8.0]);
        assert_eq!(g.component(12).mean, vec![0.0, 0.0]);
    }

    #[test]
    fn config_defaults_and_errors() {
        let c = ExperimentConfig::from_json(r#"{"kind":"posterior_hist","targets":[{"name":"a","target":{"grid":{"spacing":8,"per_side":5,"sigma":1}}}]}"#).unwrap();
        assert_eq!(c.times, DEFAULT_HIST_TIMES.to_vec());
        assert_eq!(c.samples, Some(DEFAULT_HIST_SAMPLES));
        assert_eq!(c.bins, Some(DEFAULT_BINS));
        assert_eq!(c.resolved().unwrap(), c);

        let bad = [
            r#"{"kind":"unimodal_kl","bogus":1}"#,
            r#"{"kind":"unimodal_kl","targets":[]}"#,
            r#"{"kind":"unimodal_kl","targets":[{"name":"x","target":{"unimodal":{"mu":[0],"sigma":1}}}],"samplers":[{"method":"fm","n":[2],"s":[2]}]}"#,
            r#"{"kind":"unimodal_kl","targets":[{"name":"x","target":{"unimodal":{"mu":[0],"sigma":1}}}],"samplers":[{"method":"tm_euler","n":[2]}]}"#,
            r#"{"kind":"unimodal_kl","targets":[{"name":"a b","target":{"unimodal":{"mu":[0],"sigma":1}}}],"samplers":[{"method":"fm","n":[2]}]}"#,
            r#"{"kind":"mixture_kl","targets":[{"name":"x","target":{"unimodal":{"mu":[0],"sigma":-1}}}],"samplers":[{"method":"fm","n":[2]}]}"#,
            r#"{"kind":"cost_model","samplers":[{"method":"fm","n":[0]}]}"#,
            r#"{"kind":"bounds_check","samples":10}"#,
            r#"{"kind":"posterior_hist","targets":[{"name":"a","target":{"grid":{"spacing":8,"per_side":2,"sigma":1}}}],"anchor_component":4}"#,
        ];
        for b in bad {
            assert!(matches!(ExperimentConfig::from_json(b), Err(Error::Config(_))), "{b}");
        }
    }

    #[test]
    fn anchored_point_is_shared_across_scales() {
        let a = grid_target(8.0, 5, 1.0).unwrap();
        let b = grid_target(45.0, 5, 1.0).unwrap();
        let xa = anchored_path_point(&a, 18, 0.0, 7).unwrap();
        let xb = anchored_path_point(&b, 18, 0.0, 7).unwrap();
        assert_eq!(xa, xb);
        let xa = anchored_path_point(&a, 18, 1.0, 7).unwrap();
        let xb = anchored_path_point(&b, 18, 1.0, 7).unwrap();
        // at t = 1 both sit at mu_k + z1, and the means differ by the scale
        assert!(((xb[0] - 45.0) - (xa[0] - 8.0)).abs() < 1e-12);
    }
}
