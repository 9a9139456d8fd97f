//! End-to-end experiment harness: data, sampler, K tuning, calibration,
//! test-time sets, metric aggregation and report files.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Deserializer, Serialize, Serializer};

use crate::clustering::Ensemble;
use crate::conformal::{calibrate_scores, fit_score, predict_set, Cp4GenConfig, HdPcpConfig, ScoreMethod, RANK_SLACK};
use crate::datasets::{
    gen_synthetic_with_axis, load_csv, split, standardize, LabeledDataset, ResponseAxis, SplitSpec, SyntheticKind,
};
use crate::error::{Error, Result};
use crate::genmodel::{fm_train, FlowModel, FmTrainConfig, JointSource, Sampler};
use crate::mixture::{default_beta_sq, CovStructure};
use crate::numerics::{derive_seed, Rng};
use crate::setgeometry::{structural_complexity, volume};

/// Either chosen by the harness or fixed by the user. Written as the string
/// `"auto"` or a plain value in config files.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Setting<T> {
    Auto,
    Value(T),
}

impl<T: Serialize> Serialize for Setting<T> {
    fn serialize<S: Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        match self {
            Setting::Auto => s.serialize_str("auto"),
            Setting::Value(v) => v.serialize(s),
        }
    }
}

impl<'de, T: Deserialize<'de>> Deserialize<'de> for Setting<T> {
    fn deserialize<D: Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Repr<T> {
            Value(T),
            Word(String),
        }
        match Repr::deserialize(d)? {
            Repr::Value(v) => Ok(Setting::Value(v)),
            Repr::Word(w) if w == "auto" => Ok(Setting::Auto),
            Repr::Word(w) => Err(serde::de::Error::custom(format!("expected \"auto\" or a number, got \"{w}\""))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum MethodKind {
    Pcp,
    Cp4Gen,
    HdPcp,
}

impl MethodKind {
    pub fn name(&self) -> &'static str {
        match self {
            MethodKind::Pcp => "pcp",
            MethodKind::Cp4Gen => "cp4gen",
            MethodKind::HdPcp => "hdpcp",
        }
    }
}

impl fmt::Display for MethodKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['-', '_'], "").as_str() {
            "pcp" => Ok(MethodKind::Pcp),
            "cp4gen" => Ok(MethodKind::Cp4Gen),
            "hdpcp" => Ok(MethodKind::HdPcp),
            _ => Err(Error::InvalidParameter(format!("unknown method `{s}`"))),
        }
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplerKind {
    #[default]
    Oracle,
    Flow,
}

/// Flat experiment configuration; every key is optional in the file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Synthetic dataset name, or the directory name under `data_dir`.
    pub dataset: String,
    /// Read `<data_dir>/<dataset>/{train,calib,test}.csv` instead of generating.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub data_dir: Option<PathBuf>,
    /// Covariate and response widths of cached CSV data.
    pub p: usize,
    pub d: usize,
    pub response_axis: ResponseAxis,
    pub n: usize,
    pub train_frac: f64,
    pub calib_frac: f64,
    pub test_frac: f64,
    pub standardize: bool,

    pub sampler: SamplerKind,
    pub window_h: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub fm_checkpoint: Option<PathBuf>,
    pub fm_epochs: usize,
    pub fm_batch_size: usize,
    pub fm_step_size: f64,
    pub fm_t_clamp_delta: f64,
    pub fm_euler_steps: usize,
    pub fm_hidden: usize,

    pub methods: Vec<MethodKind>,
    pub alpha: f64,
    pub m: usize,
    pub k: Setting<usize>,
    pub k_grid: Vec<usize>,
    pub beta_sq: Setting<f64>,
    /// Multipliers of `beta_sq` tried alongside the K grid during tuning.
    pub beta_scales: Vec<f64>,
    pub structure: CovStructure,
    /// HD-PCP kept fractions; several entries sweep them, one row each.
    pub keep_ratios: Vec<f64>,
    /// Mixture size for HD-PCP's member confidence; defaults to CP4Gen's K.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub confidence_k: Option<usize>,
    pub mc_samples: usize,
    /// Cap on D_p points used for K tuning.
    pub tune_max_points: usize,
    pub tune_mc_samples: usize,
    /// Held-out volumes within this many standard errors of the best count as
    /// ties during tuning; 0 picks the strict minimum.
    pub tune_tie_se: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub max_test: Option<usize>,
    /// Check that CP4Gen with K = M covers exactly the test points PCP does.
    pub reduction_check: bool,
    pub seeds: Vec<u64>,
    pub out_dir: PathBuf,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let fm = FmTrainConfig::default();
        Self {
            dataset: SyntheticKind::TwentyFiveGaussians.name().into(),
            data_dir: None,
            p: 1,
            d: 1,
            response_axis: ResponseAxis::Second,
            n: 5000,
            train_frac: 0.6,
            calib_frac: 0.2,
            test_frac: 0.2,
            standardize: false,
            sampler: SamplerKind::Oracle,
            window_h: 0.02,
            fm_checkpoint: None,
            fm_epochs: fm.epochs,
            fm_batch_size: fm.batch_size,
            fm_step_size: fm.step_size,
            fm_t_clamp_delta: fm.t_clamp_delta,
            fm_euler_steps: fm.euler_steps,
            fm_hidden: fm.hidden,
            methods: vec![MethodKind::Pcp, MethodKind::Cp4Gen, MethodKind::HdPcp],
            alpha: 0.1,
            m: 30,
            k: Setting::Auto,
            k_grid: vec![1, 2, 3, 5, 10, 15, 20, 30],
            beta_sq: Setting::Auto,
            beta_scales: vec![1.0, 0.5, 0.25, 0.1],
            structure: CovStructure::Full,
            keep_ratios: vec![0.6],
            confidence_k: None,
            mc_samples: 100_000,
            tune_max_points: 3000,
            tune_mc_samples: 20_000,
            tune_tie_se: 1.0,
            max_test: None,
            reduction_check: true,
            seeds: vec![0],
            out_dir: PathBuf::from("results"),
        }
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidParameter(m));
        if !(self.alpha > 0.0 && self.alpha < 1.0) {
            return Err(Error::InvalidAlpha(self.alpha));
        }
        if self.m < 1 {
            return bad("m must be at least 1".into());
        }
        if self.methods.is_empty() {
            return bad("methods must not be empty".into());
        }
        if self.seeds.is_empty() {
            return bad("seeds must not be empty".into());
        }
        if self.k_grid.is_empty() || self.k_grid.contains(&0) {
            return bad("k_grid must be non-empty with entries ≥ 1".into());
        }
        if let Setting::Value(k) = self.k {
            if k < 1 || k > self.m {
                return Err(Error::InvalidClusterCount { k, m: self.m });
            }
        }
        if let Setting::Value(b) = self.beta_sq {
            if !(b > 0.0 && b.is_finite()) {
                return bad(format!("beta_sq must be positive, got {b}"));
            }
        }
        if self.beta_scales.is_empty() || self.beta_scales.iter().any(|s| !(*s > 0.0 && s.is_finite())) {
            return bad(format!("beta_scales must hold positive values, got {:?}", self.beta_scales));
        }
        if self.keep_ratios.is_empty() {
            return bad("keep_ratios must not be empty".into());
        }
        if let Some(r) = self.keep_ratios.iter().find(|r| !(**r > 0.0 && **r <= 1.0)) {
            return bad(format!("keep_ratios entries must lie in (0, 1], got {r}"));
        }
        if self.confidence_k == Some(0) {
            return bad("confidence_k must be at least 1".into());
        }
        if !(self.window_h > 0.0) {
            return bad(format!("window_h must be positive, got {}", self.window_h));
        }
        if self.mc_samples == 0 || self.tune_mc_samples == 0 {
            return bad("mc_samples must be positive".into());
        }
        if !(self.tune_tie_se >= 0.0 && self.tune_tie_se.is_finite()) {
            return bad(format!("tune_tie_se must be finite and non-negative, got {}", self.tune_tie_se));
        }
        if self.tune_max_points < 2 {
            return bad("tune_max_points must be at least 2".into());
        }
        if self.data_dir.is_some() && (self.p == 0 && self.d == 0) {
            return bad("cached data needs d ≥ 1".into());
        }
        if self.data_dir.is_none() && self.dataset.parse::<SyntheticKind>().is_err() {
            return bad(format!("unknown synthetic dataset `{}` (set data_dir to load CSV data)", self.dataset));
        }
        self.split_spec(0).validate()?;
        self.fm_config(0).validate()
    }

    /// Tuning grid and settings around the base nugget `base_beta`.
    pub fn tune_spec(&self, base_beta: f64) -> TuneSpec {
        TuneSpec {
            grid: match self.k {
                Setting::Value(k) => vec![k],
                Setting::Auto => self.k_grid.clone(),
            },
            m: self.m,
            alpha: self.alpha,
            beta_grid: self.beta_scales.iter().map(|s| s * base_beta).collect(),
            structure: self.structure,
            mc_samples: self.tune_mc_samples,
            max_points: self.tune_max_points,
            tie_se: self.tune_tie_se,
        }
    }

    pub fn split_spec(&self, seed: u64) -> SplitSpec {
        SplitSpec { train: self.train_frac, calib: self.calib_frac, test: self.test_frac, seed }
    }

    pub fn fm_config(&self, seed: u64) -> FmTrainConfig {
        FmTrainConfig {
            epochs: self.fm_epochs,
            batch_size: self.fm_batch_size,
            step_size: self.fm_step_size,
            t_clamp_delta: self.fm_t_clamp_delta,
            euler_steps: self.fm_euler_steps,
            hidden: self.fm_hidden,
            layers: FmTrainConfig::default().layers,
            seed,
        }
    }
}

/// One row per (dataset, method, M, seed).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    pub dataset: String,
    pub method: String,
    pub m: usize,
    /// Mixture size for CP4Gen, kept members for HD-PCP, M for PCP.
    pub k: usize,
    pub seed: u64,
    pub alpha: f64,
    #[serde(deserialize_with = "null_as_inf")]
    pub q_hat: f64,
    pub n_calib: usize,
    pub n_test: usize,
    pub coverage: f64,
    /// Over bounded sets only; infinite when every set was unbounded.
    #[serde(deserialize_with = "null_as_inf")]
    pub volume_mean: f64,
    #[serde(deserialize_with = "null_as_inf")]
    pub volume_median: f64,
    #[serde(deserialize_with = "null_as_inf")]
    pub complexity_median: f64,
    pub n_unbounded: usize,
}

pub const RECORD_HEADER: [&str; 14] = [
    "dataset",
    "method",
    "m",
    "k",
    "seed",
    "alpha",
    "q_hat",
    "n_calib",
    "n_test",
    "coverage",
    "volume_mean",
    "volume_median",
    "complexity_median",
    "n_unbounded",
];

// JSON has no infinity; serde_json writes it as null.
fn null_as_inf<'de, D: Deserializer<'de>>(d: D) -> std::result::Result<f64, D::Error> {
    Ok(Option::<f64>::deserialize(d)?.unwrap_or(f64::INFINITY))
}

/// CP4Gen with K = M against PCP on one run's test points.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReductionCheck {
    pub seed: u64,
    pub m: usize,
    pub n_points: usize,
    pub mismatches: usize,
}

#[derive(Debug, Clone, Default)]
pub struct RunOutput {
    pub records: Vec<MetricsRecord>,
    pub reduction_checks: Vec<ReductionCheck>,
}

/// Splits in the space the sampler and sets live in.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub train: LabeledDataset,
    pub calib: LabeledDataset,
    pub test: LabeledDataset,
    pub kind: Option<SyntheticKind>,
    /// Multiplies response-space volumes back to raw units.
    pub volume_factor: f64,
}

pub fn prepare_data(cfg: &ExperimentConfig, seed: u64) -> Result<PreparedData> {
    let (train, calib, test, kind) = match &cfg.data_dir {
        Some(dir) => {
            let base = dir.join(&cfg.dataset);
            let load = |part: &str| load_csv(&base.join(format!("{part}.csv")), cfg.p, cfg.d);
            (load("train")?, load("calib")?, load("test")?, cfg.dataset.parse().ok())
        }
        None => {
            let kind: SyntheticKind = cfg.dataset.parse()?;
            let base = Rng::new(seed);
            let data = gen_synthetic_with_axis(kind, cfg.n, cfg.response_axis, &mut base.child(0));
            let (tr, ca, te) = split(&data, &cfg.split_spec(derive_seed(seed, 1)))?;
            (tr, ca, te, Some(kind))
        }
    };
    if !cfg.standardize {
        return Ok(PreparedData { train, calib, test, kind, volume_factor: 1.0 });
    }
    let (st, train, mut rest) = standardize(&train, &[&calib, &test])?;
    let test = rest.pop().unwrap();
    let calib = rest.pop().unwrap();
    Ok(PreparedData { train, calib, test, kind, volume_factor: st.y_volume_factor() })
}

pub fn build_sampler(cfg: &ExperimentConfig, data: &PreparedData, seed: u64) -> Result<Sampler> {
    match cfg.sampler {
        SamplerKind::Oracle => {
            let source = match (data.kind, cfg.standardize, &cfg.data_dir) {
                (Some(kind), false, None) => JointSource::Synthetic { kind, axis: cfg.response_axis },
                _ => JointSource::Empirical(data.train.clone()),
            };
            Ok(Sampler::Oracle { source, window_h: cfg.window_h })
        }
        SamplerKind::Flow => {
            let fm = cfg.fm_config(derive_seed(seed, 2));
            let model = match &cfg.fm_checkpoint {
                Some(path) => {
                    let model = FlowModel::load(path)?;
                    if model.response_dim() != data.train.d || model.covariate_dim() != data.train.p {
                        return Err(Error::Checkpoint(format!(
                            "checkpoint expects p={}, d={} but data has p={}, d={}",
                            model.covariate_dim(),
                            model.response_dim(),
                            data.train.p,
                            data.train.d
                        )));
                    }
                    model
                }
                None => fm_train(&data.train, &fm)?.model,
            };
            Ok(Sampler::Flow { model, euler_steps: fm.euler_steps, delta: fm.t_clamp_delta })
        }
    }
}

/// Knobs for [`tune_k`].
#[derive(Debug, Clone)]
pub struct TuneSpec {
    pub grid: Vec<usize>,
    pub m: usize,
    pub alpha: f64,
    /// Candidate nuggets; on equal volume the earlier entry wins.
    pub beta_grid: Vec<f64>,
    pub structure: CovStructure,
    pub mc_samples: usize,
    pub max_points: usize,
    /// A candidate whose held-out volume exceeds the best by at most this
    /// many paired standard errors counts as tied with it.
    pub tie_se: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TuneOutcome {
    pub k: usize,
    pub beta_sq: f64,
    /// `(K, β², mean held-out volume)` for every candidate tried.
    pub volumes: Vec<(usize, f64, f64)>,
}

fn draw_ensembles(data: &LabeledDataset, sampler: &Sampler, m: usize, rng: &Rng) -> Result<Vec<Ensemble>> {
    (0..data.len())
        .into_par_iter()
        .map(|i| sampler.draw(data.x_row(i), m, &mut rng.child(i as u64)))
        .collect()
}

/// True when the mean of `a − b` is at most `tie_se` standard errors.
fn within_noise(a: &[f64], b: &[f64], tie_se: f64) -> bool {
    let n = a.len() as f64;
    let diffs: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let mean = diffs.iter().sum::<f64>() / n;
    if n < 2.0 {
        return mean <= 0.0;
    }
    let var = diffs.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / (n - 1.0);
    mean <= tie_se * (var / n).sqrt()
}

/// Calibrates CP4Gen on the first 80% of `d_p` for every K in the grid that
/// fits in `[1, M]` (and every candidate nugget) and returns the pair with the
/// smallest mean held-out volume. Candidates within `tie_se` paired standard
/// errors of the best count as ties, and the smallest such K wins.
pub fn tune_k(d_p: &LabeledDataset, sampler: &Sampler, spec: &TuneSpec, rng: &Rng) -> Result<TuneOutcome> {
    let mut grid: Vec<usize> = spec.grid.iter().copied().filter(|&k| k >= 1 && k <= spec.m).collect();
    grid.sort_unstable();
    grid.dedup();
    if grid.is_empty() {
        return Err(Error::InvalidParameter(format!("no K in the grid fits ensemble size {}", spec.m)));
    }
    if spec.beta_grid.is_empty() || spec.beta_grid.iter().any(|b| !(*b > 0.0 && b.is_finite())) {
        return Err(Error::InvalidParameter(format!("nugget grid must hold positive values, got {:?}", spec.beta_grid)));
    }
    let pool = d_p.head(spec.max_points.min(d_p.len()));
    let n_fit = ((pool.len() as f64 * 0.8).round() as usize).clamp(1, pool.len().saturating_sub(1));
    if pool.len() < 2 {
        return Err(Error::Empty("tuning split"));
    }
    let ensembles = draw_ensembles(&pool, sampler, spec.m, &rng.child(0))?;
    let mut volumes = Vec::with_capacity(grid.len() * spec.beta_grid.len());
    // best nugget per K, with its per-point held-out volumes
    let mut per_k: Vec<(usize, f64, f64, Vec<f64>)> = Vec::with_capacity(grid.len());
    for &k in &grid {
        for (bi, &beta_sq) in spec.beta_grid.iter().enumerate() {
            let method = ScoreMethod::Cp4Gen(Cp4GenConfig { k, beta_sq, structure: spec.structure });
            let fit_rng = rng.child(1 + k as u64).child(bi as u64);
            let scores = (0..n_fit)
                .into_par_iter()
                .map(|i| fit_score(&ensembles[i], &method, &mut fit_rng.child(i as u64))?.score(pool.y_row(i)))
                .collect::<Result<Vec<f64>>>()?;
            let q_hat = calibrate_scores(scores, spec.alpha)?.q_hat;
            let vols = (n_fit..pool.len())
                .into_par_iter()
                .map(|i| {
                    let mut r = fit_rng.child(i as u64);
                    let set = predict_set(&ensembles[i], &method, q_hat, &mut r)?;
                    Ok(volume(&set, spec.mc_samples, &mut r)?.value)
                })
                .collect::<Result<Vec<f64>>>()?;
            let mean = vols.iter().sum::<f64>() / vols.len() as f64;
            volumes.push((k, beta_sq, mean));
            match per_k.last_mut() {
                Some(entry) if entry.0 == k => {
                    if mean < entry.2 {
                        *entry = (k, beta_sq, mean, vols);
                    }
                }
                _ => per_k.push((k, beta_sq, mean, vols)),
            }
        }
    }
    let best = per_k.iter().min_by(|a, b| a.2.total_cmp(&b.2)).unwrap();
    let (k, beta_sq, _, _) = per_k
        .iter()
        .find(|c| within_noise(&c.3, &best.3, spec.tie_se))
        .unwrap_or(best);
    let (k, beta_sq) = (*k, *beta_sq);
    Ok(TuneOutcome { k, beta_sq, volumes })
}

struct PointOutcome {
    covered: bool,
    volume: f64,
    complexity: Option<usize>,
}

fn median(values: &mut [f64]) -> f64 {
    if values.is_empty() {
        return f64::INFINITY;
    }
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// One configured method inside a run.
#[derive(Debug, Clone)]
pub struct ResolvedMethod {
    pub label: String,
    pub kind: MethodKind,
    pub score: ScoreMethod,
    /// Value of the K column: ensemble size, mixture size or kept members.
    pub k_col: usize,
}

/// The score methods a config asks for. HD-PCP expands to one entry per
/// kept fraction.
pub fn resolve_methods(cfg: &ExperimentConfig, k: usize, beta_sq: f64) -> Vec<ResolvedMethod> {
    let cp = Cp4GenConfig { k, beta_sq, structure: cfg.structure };
    let mut out = Vec::new();
    for &kind in &cfg.methods {
        match kind {
            MethodKind::Pcp => out.push(ResolvedMethod { label: kind.name().into(), kind, score: ScoreMethod::Pcp, k_col: cfg.m }),
            MethodKind::Cp4Gen => out.push(ResolvedMethod { label: kind.name().into(), kind, score: ScoreMethod::Cp4Gen(cp), k_col: k }),
            MethodKind::HdPcp => {
                let conf = Cp4GenConfig { k: cfg.confidence_k.unwrap_or(k).min(cfg.m), ..cp };
                for &keep_ratio in &cfg.keep_ratios {
                    let label = if cfg.keep_ratios.len() == 1 { kind.name().to_string() } else { format!("{}@{keep_ratio}", kind.name()) };
                    let kept = ((keep_ratio * cfg.m as f64 - RANK_SLACK).ceil() as usize).clamp(1, cfg.m);
                    let score = ScoreMethod::HdPcp(HdPcpConfig { keep_ratio, confidence: conf });
                    out.push(ResolvedMethod { label, kind, score, k_col: kept });
                }
            }
        }
    }
    out
}

/// One seed of the full pipeline.
pub fn run_seed(cfg: &ExperimentConfig, seed: u64) -> Result<RunOutput> {
    let data = prepare_data(cfg, seed).map_err(|e| e.in_stage("data"))?;
    if data.calib.is_empty() {
        return Err(Error::Empty("calibration split").in_stage("data"));
    }
    let sampler = build_sampler(cfg, &data, seed).map_err(|e| e.in_stage("sampler"))?;
    let base = Rng::new(seed);
    let d = data.train.d;

    let base_beta = match cfg.beta_sq {
        Setting::Value(b) => b,
        Setting::Auto => default_beta_sq(&data.train.y, d).map_err(|e| e.in_stage("nugget"))?,
    };
    let needs_k = cfg.methods.iter().any(|m| *m != MethodKind::Pcp);
    let tune = needs_k && (cfg.k == Setting::Auto || cfg.beta_scales.len() > 1);
    let (k, beta_sq) = if tune {
        let spec = cfg.tune_spec(base_beta);
        let out = tune_k(&data.train, &sampler, &spec, &base.child(3)).map_err(|e| e.in_stage("tune-k"))?;
        log::info!("seed {seed}: tuned K = {}, β² = {} from {:?}", out.k, out.beta_sq, out.volumes);
        (out.k, out.beta_sq)
    } else {
        let k = match cfg.k {
            Setting::Value(k) => k,
            Setting::Auto => 1,
        };
        (k, base_beta * cfg.beta_scales[0])
    };

    let resolved = resolve_methods(cfg, k, beta_sq);
    let mut methods: Vec<ScoreMethod> = resolved.iter().map(|r| r.score).collect();
    let reduction = cfg.reduction_check && cfg.methods.contains(&MethodKind::Pcp);
    if reduction {
        methods.push(ScoreMethod::Cp4Gen(Cp4GenConfig { k: cfg.m, beta_sq, structure: CovStructure::Full }));
    }

    let calib_rng = base.child(4);
    let per_point = (0..data.calib.len())
        .into_par_iter()
        .map(|i| {
            let r = calib_rng.child(i as u64);
            let ens = sampler.draw(data.calib.x_row(i), cfg.m, &mut r.child(0))?;
            methods
                .iter()
                .enumerate()
                .map(|(mi, method)| fit_score(&ens, method, &mut r.child(1 + mi as u64))?.score(data.calib.y_row(i)))
                .collect::<Result<Vec<f64>>>()
        })
        .collect::<Result<Vec<Vec<f64>>>>()
        .map_err(|e| e.in_stage("calibrate"))?;
    let q_hats = (0..methods.len())
        .map(|mi| Ok(calibrate_scores(per_point.iter().map(|s| s[mi]).collect(), cfg.alpha)?.q_hat))
        .collect::<Result<Vec<f64>>>()
        .map_err(|e| e.in_stage("calibrate"))?;

    let n_test = cfg.max_test.map_or(data.test.len(), |c| c.min(data.test.len()));
    let test_rng = base.child(5);
    let outcomes = (0..n_test)
        .into_par_iter()
        .map(|j| {
            let r = test_rng.child(j as u64);
            let ens = sampler.draw(data.test.x_row(j), cfg.m, &mut r.child(0))?;
            let y = data.test.y_row(j);
            methods
                .iter()
                .enumerate()
                .map(|(mi, method)| {
                    let mut mr = r.child(1 + mi as u64);
                    let set = predict_set(&ens, method, q_hats[mi], &mut mr)?;
                    let covered = set.contains(y)?;
                    let vol = volume(&set, cfg.mc_samples, &mut mr)?.value * data.volume_factor;
                    let complexity = structural_complexity(&set).map(|c| c.pieces);
                    Ok(PointOutcome { covered, volume: vol, complexity })
                })
                .collect::<Result<Vec<PointOutcome>>>()
        })
        .collect::<Result<Vec<Vec<PointOutcome>>>>()
        .map_err(|e| e.in_stage("predict"))?;

    let mut out = RunOutput::default();
    for (mi, rm) in resolved.iter().enumerate() {
        let covered = outcomes.iter().filter(|o| o[mi].covered).count();
        let mut vols: Vec<f64> = outcomes.iter().map(|o| o[mi].volume).filter(|v| v.is_finite()).collect();
        let n_unbounded = n_test - vols.len();
        let volume_mean = if vols.is_empty() { f64::INFINITY } else { vols.iter().sum::<f64>() / vols.len() as f64 };
        let volume_median = median(&mut vols);
        let mut cx: Vec<f64> = outcomes.iter().filter_map(|o| o[mi].complexity.map(|c| c as f64)).collect();
        out.records.push(MetricsRecord {
            dataset: cfg.dataset.clone(),
            method: rm.label.clone(),
            m: cfg.m,
            k: rm.k_col,
            seed,
            alpha: cfg.alpha,
            q_hat: q_hats[mi],
            n_calib: data.calib.len(),
            n_test,
            coverage: if n_test == 0 { f64::NAN } else { covered as f64 / n_test as f64 },
            volume_mean,
            volume_median,
            complexity_median: median(&mut cx),
            n_unbounded,
        });
    }
    if reduction {
        let pcp = resolved.iter().position(|r| r.kind == MethodKind::Pcp).unwrap();
        let red = methods.len() - 1;
        let mismatches = outcomes.iter().filter(|o| o[pcp].covered != o[red].covered).count();
        if mismatches > 0 {
            log::warn!("seed {seed}: CP4Gen with K = M disagrees with PCP on {mismatches} of {n_test} test points");
        }
        out.reduction_checks.push(ReductionCheck { seed, m: cfg.m, n_points: n_test, mismatches });
    }
    Ok(out)
}

/// Every seed of `cfg`, records in seed order.
pub fn run_experiment(cfg: &ExperimentConfig) -> Result<RunOutput> {
    cfg.validate()?;
    let mut out = RunOutput::default();
    for &seed in &cfg.seeds {
        let run = run_seed(cfg, seed)?;
        out.records.extend(run.records);
        out.reduction_checks.extend(run.reduction_checks);
    }
    Ok(out)
}

/// Reruns the experiment for each ensemble size in `m_grid`.
pub fn ablate_m(cfg: &ExperimentConfig, m_grid: &[usize]) -> Result<RunOutput> {
    if m_grid.is_empty() {
        return Err(Error::InvalidParameter("ablation grid must not be empty".into()));
    }
    let mut out = RunOutput::default();
    for &m in m_grid {
        let cfg = ExperimentConfig { m, ..cfg.clone() };
        let run = run_experiment(&cfg)?;
        out.records.extend(run.records);
        out.reduction_checks.extend(run.reduction_checks);
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
}

impl FromStr for ReportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            _ => Err(Error::InvalidParameter(format!("unknown report format `{s}`"))),
        }
    }
}

/// Across-seed aggregate for one (dataset, method, M); spreads are sample
/// standard deviations, zero for a single seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRow {
    pub dataset: String,
    pub method: String,
    pub m: usize,
    pub n_seeds: usize,
    pub k_mean: f64,
    pub coverage_mean: f64,
    pub coverage_std: f64,
    #[serde(deserialize_with = "null_as_inf")]
    pub volume_mean: f64,
    #[serde(deserialize_with = "null_as_inf")]
    pub volume_std: f64,
    #[serde(deserialize_with = "null_as_inf")]
    pub complexity_mean: f64,
    #[serde(deserialize_with = "null_as_inf")]
    pub complexity_std: f64,
    pub n_unbounded: usize,
}

fn mean_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    if values.len() < 2 {
        return (mean, 0.0);
    }
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1.0);
    (mean, var.sqrt())
}

pub fn summarize(records: &[MetricsRecord]) -> Vec<SummaryRow> {
    let mut groups: BTreeMap<(String, String, usize), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        groups.entry((r.dataset.clone(), r.method.clone(), r.m)).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|((dataset, method, m), rows)| {
            let col = |f: fn(&MetricsRecord) -> f64| rows.iter().map(|r| f(r)).collect::<Vec<f64>>();
            let (coverage_mean, coverage_std) = mean_std(&col(|r| r.coverage));
            let (volume_mean, volume_std) = mean_std(&col(|r| r.volume_mean));
            let (complexity_mean, complexity_std) = mean_std(&col(|r| r.complexity_median));
            SummaryRow {
                dataset,
                method,
                m,
                n_seeds: rows.len(),
                k_mean: mean_std(&col(|r| r.k as f64)).0,
                coverage_mean,
                coverage_std,
                volume_mean,
                volume_std,
                complexity_mean,
                complexity_std,
                n_unbounded: rows.iter().map(|r| r.n_unbounded).sum(),
            }
        })
        .collect()
}

const SUMMARY_HEADER: [&str; 12] = [
    "dataset",
    "method",
    "m",
    "n_seeds",
    "k_mean",
    "coverage_mean",
    "coverage_std",
    "volume_mean",
    "volume_std",
    "complexity_mean",
    "complexity_std",
    "n_unbounded",
];

fn write_rows<T: Serialize>(path: &Path, header: &[&str], rows: &[T]) -> Result<()> {
    let csv_err = |e: csv::Error| Error::Csv { path: path.to_path_buf(), message: e.to_string() };
    let mut w = csv::WriterBuilder::new().has_headers(false).from_path(path).map_err(csv_err)?;
    w.write_record(header).map_err(csv_err)?;
    for r in rows {
        w.serialize(r).map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, rows: &[T]) -> Result<()> {
    let mut text = serde_json::to_string_pretty(rows)?;
    text.push('\n');
    std::fs::write(path, text)?;
    Ok(())
}

/// Long-format `(dataset, method, m, seed, metric, value)` rows.
pub fn plot_rows(records: &[MetricsRecord]) -> Vec<(String, String, usize, u64, &'static str, f64)> {
    let mut rows = Vec::with_capacity(records.len() * 4);
    for r in records {
        for (metric, value) in [
            ("coverage", r.coverage),
            ("volume_mean", r.volume_mean),
            ("volume_median", r.volume_median),
            ("complexity_median", r.complexity_median),
        ] {
            rows.push((r.dataset.clone(), r.method.clone(), r.m, r.seed, metric, value));
        }
    }
    rows
}

/// Writes `records`, `summary` and (for CSV) `plot` files into `dir`.
pub fn write_report(records: &[MetricsRecord], dir: &Path, format: ReportFormat) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir)?;
    let summary = summarize(records);
    let mut paths = Vec::new();
    match format {
        ReportFormat::Csv => {
            let p = dir.join("records.csv");
            write_rows(&p, &RECORD_HEADER, records)?;
            paths.push(p);
            let p = dir.join("summary.csv");
            write_rows(&p, &SUMMARY_HEADER, &summary)?;
            paths.push(p);
            let p = dir.join("plot.csv");
            write_rows(&p, &["dataset", "method", "m", "seed", "metric", "value"], &plot_rows(records))?;
            paths.push(p);
        }
        ReportFormat::Json => {
            let p = dir.join("records.json");
            write_json(&p, records)?;
            paths.push(p);
            let p = dir.join("summary.json");
            write_json(&p, &summary)?;
            paths.push(p);
        }
    }
    Ok(paths)
}

/// Reads a `records.csv` or `records.json` file written by [`write_report`].
pub fn read_records(path: &Path) -> Result<Vec<MetricsRecord>> {
    let is_json = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("json"));
    if is_json {
        return Ok(serde_json::from_str(&std::fs::read_to_string(path)?)?);
    }
    let csv_err = |e: csv::Error| Error::Csv { path: path.to_path_buf(), message: e.to_string() };
    let mut r = csv::Reader::from_path(path).map_err(csv_err)?;
    let header: Vec<String> = r.headers().map_err(csv_err)?.iter().map(str::to_string).collect();
    if header != RECORD_HEADER {
        return Err(Error::Csv { path: path.to_path_buf(), message: format!("unexpected header {header:?}") });
    }
    r.deserialize().map(|row| row.map_err(csv_err)).collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> ExperimentConfig {
        ExperimentConfig {
            n: 1000,
            methods: vec![MethodKind::Pcp, MethodKind::Cp4Gen],
            k: Setting::Value(5),
            max_test: Some(100),
            ..Default::default()
        }
    }

    fn record(method: &str, seed: u64, coverage: f64, volume: f64) -> MetricsRecord {
        MetricsRecord {
            dataset: "25-gaussians".into(),
            method: method.into(),
            m: 30,
            k: 5,
            seed,
            alpha: 0.1,
            q_hat: 1.25,
            n_calib: 999,
            n_test: 999,
            coverage,
            volume_mean: volume,
            volume_median: volume / 2.0,
            complexity_median: 5.0,
            n_unbounded: 0,
        }
    }

    #[test]
    fn record_header_matches_fields() {
        let v = serde_json::to_value(record("pcp", 0, 0.9, 1.0)).unwrap();
        let keys: Vec<&str> = v.as_object().unwrap().keys().map(String::as_str).collect();
        let mut sorted_header = RECORD_HEADER.to_vec();
        sorted_header.sort_unstable();
        let mut sorted_keys = keys.clone();
        sorted_keys.sort_unstable();
        assert_eq!(sorted_keys, sorted_header);
    }

    #[test]
    fn setting_parses_auto_and_values() {
        let k: Setting<usize> = serde_json::from_str("\"auto\"").unwrap();
        assert_eq!(k, Setting::Auto);
        let k: Setting<usize> = serde_json::from_str("7").unwrap();
        assert_eq!(k, Setting::Value(7));
        let b: Setting<f64> = serde_json::from_str("0.001").unwrap();
        assert_eq!(b, Setting::Value(0.001));
        assert!(serde_json::from_str::<Setting<usize>>("\"many\"").is_err());
        assert_eq!(serde_json::to_string(&Setting::<usize>::Auto).unwrap(), "\"auto\"");
    }

    #[test]
    fn config_validation() {
        assert!(ExperimentConfig::default().validate().is_ok());
        let bad = [
            ExperimentConfig { alpha: 1.0, ..Default::default() },
            ExperimentConfig { m: 0, ..Default::default() },
            ExperimentConfig { k: Setting::Value(31), ..Default::default() },
            ExperimentConfig { k_grid: vec![], ..Default::default() },
            ExperimentConfig { dataset: "nope".into(), ..Default::default() },
            ExperimentConfig { train_frac: 0.9, ..Default::default() },
            ExperimentConfig { fm_euler_steps: 0, ..Default::default() },
            ExperimentConfig { keep_ratios: vec![0.0], ..Default::default() },
            ExperimentConfig { keep_ratios: vec![], ..Default::default() },
        ];
        for cfg in bad {
            assert!(cfg.validate().is_err(), "{cfg:?}");
        }
    }

    #[test]
    fn pipeline_covers_and_reduces() {
        let out = run_experiment(&small_cfg()).unwrap();
        assert_eq!(out.records.len(), 2);
        let pcp = &out.records[0];
        assert_eq!((pcp.method.as_str(), pcp.k, pcp.n_calib, pcp.n_test), ("pcp", 30, 200, 100));
        assert_eq!(pcp.complexity_median, 30.0);
        for r in &out.records {
            assert!((0.75..=1.0).contains(&r.coverage), "{r:?}");
            assert!(r.volume_mean.is_finite() && r.volume_mean > 0.0);
        }
        assert_eq!(out.reduction_checks.len(), 1);
        assert_eq!(out.reduction_checks[0].mismatches, 0);
    }

    #[test]
    fn keep_ratio_sweep_emits_one_row_each() {
        let cfg = ExperimentConfig {
            methods: vec![MethodKind::Pcp, MethodKind::HdPcp],
            keep_ratios: vec![0.3, 0.6, 1.0],
            k: Setting::Value(5),
            beta_scales: vec![1.0],
            ..small_cfg()
        };
        let out = run_experiment(&cfg).unwrap();
        let rows: Vec<(&str, usize)> = out.records.iter().map(|r| (r.method.as_str(), r.k)).collect();
        assert_eq!(rows, [("pcp", 30), ("hdpcp@0.3", 9), ("hdpcp@0.6", 18), ("hdpcp@1", 30)]);
        // keeping every member is PCP itself
        assert_eq!(out.records[3].q_hat, out.records[0].q_hat);
        assert_eq!(out.records[3].coverage, out.records[0].coverage);
        assert_eq!(out.reduction_checks[0].mismatches, 0);
    }

    #[test]
    fn pipeline_is_deterministic() {
        let a = run_experiment(&small_cfg()).unwrap().records;
        let b = run_experiment(&small_cfg()).unwrap().records;
        assert_eq!(a, b);
        let other = run_experiment(&ExperimentConfig { seeds: vec![1], ..small_cfg() }).unwrap().records;
        assert_ne!(a, other);
    }

    #[test]
    fn tiny_calibration_gives_unbounded_sets() {
        // ⌈0.9 · 4⌉ = 4 > 3 calibration points
        let cfg = ExperimentConfig { n: 15, max_test: None, ..small_cfg() };
        let out = run_experiment(&cfg).unwrap();
        for r in &out.records {
            assert_eq!(r.q_hat, f64::INFINITY);
            assert_eq!(r.coverage, 1.0);
            assert_eq!(r.n_unbounded, r.n_test);
            assert_eq!(r.volume_mean, f64::INFINITY);
        }
    }

    #[test]
    fn high_alpha_tracks_half_coverage() {
        let cfg = ExperimentConfig {
            n: 2500,
            alpha: 0.5,
            methods: vec![MethodKind::Pcp],
            max_test: None,
            seeds: vec![3],
            ..small_cfg()
        };
        let out = run_experiment(&cfg).unwrap();
        assert!((out.records[0].coverage - 0.5).abs() < 0.06, "{:?}", out.records[0]);
    }

    #[test]
    fn noise_tie_rule() {
        let best = [1.0, 2.0, 3.0, 4.0];
        // constant offset has zero spread, so any positive gap is real
        assert!(!within_noise(&[1.1, 2.1, 3.1, 4.1], &best, 1.0));
        assert!(within_noise(&best, &best, 0.0));
        // diffs (+0.2, −0.2, +0.2, −0.1): mean 0.025, SE ≈ 0.1031
        let noisy = [1.2, 1.8, 3.2, 3.9];
        assert!(within_noise(&noisy, &best, 1.0));
        assert!(!within_noise(&noisy, &best, 0.2));
        assert!(!within_noise(&noisy, &best, 0.0));
    }

    #[test]
    fn tuning_examples() {
        let sampler = Sampler::Oracle {
            source: JointSource::Synthetic { kind: SyntheticKind::TwentyFiveGaussians, axis: ResponseAxis::Second },
            window_h: 0.02,
        };
        let data = gen_synthetic_with_axis(SyntheticKind::TwentyFiveGaussians, 400, ResponseAxis::Second, &mut Rng::new(1));
        let spec = TuneSpec {
            grid: vec![7],
            m: 30,
            alpha: 0.1,
            beta_grid: vec![2e-4],
            structure: CovStructure::Full,
            mc_samples: 1000,
            max_points: 100,
            tie_se: 0.0,
        };
        assert_eq!(tune_k(&data, &sampler, &spec, &Rng::new(2)).unwrap().k, 7);
        let spec = TuneSpec { grid: vec![40], ..spec };
        assert!(tune_k(&data, &sampler, &spec, &Rng::new(2)).is_err());

        let spec = TuneSpec { grid: vec![1, 2, 3, 5, 10, 15, 20, 30], max_points: 300, ..spec };
        let grid_k = tune_k(&data, &sampler, &spec, &Rng::new(2)).unwrap();
        assert!((4..=10).contains(&grid_k.k), "{grid_k:?}");

        // a single Gaussian response ignores the covariate
        let mut r = Rng::new(4);
        let gauss = LabeledDataset::new("g", 1, 1, (0..400).map(|_| r.uniform()).collect(), (0..400).map(|_| r.normal()).collect())
            .unwrap();
        let sampler = Sampler::Oracle { source: JointSource::Empirical(gauss.clone()), window_h: f64::INFINITY };
        let spec = TuneSpec { beta_grid: vec![1e-4, 1e-5], ..spec };
        let out = tune_k(&gauss, &sampler, &spec, &Rng::new(5)).unwrap();
        assert_eq!(out.k, 1, "{out:?}");
    }

    #[test]
    fn report_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let mut records = vec![record("pcp", 0, 0.9, 1.5), record("pcp", 1, 0.92, 1.25), record("cp4gen", 0, 0.91, 0.75)];
        records[2].q_hat = f64::INFINITY;
        records[2].volume_mean = f64::INFINITY;
        for format in [ReportFormat::Csv, ReportFormat::Json] {
            let first = dir.path().join("a");
            let paths = write_report(&records, &first, format).unwrap();
            let back = read_records(&paths[0]).unwrap();
            assert_eq!(back, records);
            let second = dir.path().join("b");
            let again = write_report(&back, &second, format).unwrap();
            for (p, q) in paths.iter().zip(&again) {
                assert_eq!(std::fs::read(p).unwrap(), std::fs::read(q).unwrap(), "{p:?}");
            }
        }
    }

    #[test]
    fn summary_and_empty_report() {
        let rows = summarize(&[record("pcp", 0, 0.9, 1.0), record("pcp", 1, 0.92, 3.0)]);
        assert_eq!(rows.len(), 1);
        let s = &rows[0];
        assert_eq!(s.n_seeds, 2);
        assert!((s.coverage_mean - 0.91).abs() < 1e-12);
        assert!((s.coverage_std - 0.02f64.hypot(0.0) / 2f64.sqrt()).abs() < 1e-12);
        assert_eq!((s.volume_mean, s.volume_std), (2.0, 2f64.sqrt()));

        let dir = tempfile::tempdir().unwrap();
        let paths = write_report(&[], dir.path(), ReportFormat::Csv).unwrap();
        let text = std::fs::read_to_string(&paths[0]).unwrap();
        assert_eq!(text.trim_end(), RECORD_HEADER.join(","));
        assert!(read_records(&paths[0]).unwrap().is_empty());
    }

    #[test]
    fn unwritable_report_path_errors() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("f");
        std::fs::write(&file, "x").unwrap();
        assert!(write_report(&[], &file.join("sub"), ReportFormat::Csv).is_err());
    }
}
