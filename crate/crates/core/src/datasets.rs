//! Synthetic 2-d benchmark generators, seeded splits, train-only
//! standardization and CSV ingestion.
//!
//! Each synthetic joint sample is a point in the plane; coordinate 0 is the
//! covariate and coordinate 1 the response unless the response axis is
//! swapped.

use std::fmt;
use std::fs;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Rng;

/// Noise level of the Gaussian-cluster, moon, circle and spiral generators.
pub const NOISE_SIGMA: f64 = 0.01;
/// Half extent of the 5×5 grid: centers at {−2, −1, 0, 1, 2}².
pub const GRID_EXTENT: f64 = 2.0;
pub const EIGHT_GAUSSIANS_RADIUS: f64 = 2.0;
pub const CIRCLE_INNER_RATIO: f64 = 0.7;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum SyntheticKind {
    #[serde(rename = "25-gaussians")]
    TwentyFiveGaussians,
    #[serde(rename = "8-gaussians")]
    EightGaussians,
    #[serde(rename = "moon")]
    Moon,
    #[serde(rename = "circle")]
    Circle,
    #[serde(rename = "spiral")]
    Spiral,
    #[serde(rename = "s-curve")]
    SCurve,
}

impl SyntheticKind {
    pub const ALL: [SyntheticKind; 6] = [
        SyntheticKind::TwentyFiveGaussians,
        SyntheticKind::EightGaussians,
        SyntheticKind::Moon,
        SyntheticKind::Circle,
        SyntheticKind::Spiral,
        SyntheticKind::SCurve,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            SyntheticKind::TwentyFiveGaussians => "25-gaussians",
            SyntheticKind::EightGaussians => "8-gaussians",
            SyntheticKind::Moon => "moon",
            SyntheticKind::Circle => "circle",
            SyntheticKind::Spiral => "spiral",
            SyntheticKind::SCurve => "s-curve",
        }
    }

    /// One joint sample in the plane.
    pub fn draw_joint(&self, rng: &mut Rng) -> [f64; 2] {
        use std::f64::consts::PI;
        let noisy = |p: [f64; 2], rng: &mut Rng| [p[0] + NOISE_SIGMA * rng.normal(), p[1] + NOISE_SIGMA * rng.normal()];
        match self {
            SyntheticKind::TwentyFiveGaussians => {
                let i = rng.index(5) as f64;
                let j = rng.index(5) as f64;
                let step = GRID_EXTENT / 2.0;
                noisy([(i - 2.0) * step, (j - 2.0) * step], rng)
            }
            SyntheticKind::EightGaussians => {
                let angle = 2.0 * PI * rng.index(8) as f64 / 8.0;
                noisy([EIGHT_GAUSSIANS_RADIUS * angle.cos(), EIGHT_GAUSSIANS_RADIUS * angle.sin()], rng)
            }
            SyntheticKind::Moon => {
                let outer = rng.uniform() < 0.5;
                let t = rng.uniform_range(0.0, PI);
                let p = if outer { [t.cos(), t.sin()] } else { [1.0 - t.cos(), 0.5 - t.sin()] };
                noisy(p, rng)
            }
            SyntheticKind::Circle => {
                let r = if rng.uniform() < 0.5 { 1.0 } else { CIRCLE_INNER_RATIO };
                let theta = rng.uniform_range(0.0, 2.0 * PI);
                noisy([r * theta.cos(), r * theta.sin()], rng)
            }
            SyntheticKind::Spiral => {
                let t = rng.uniform_range(1.5 * PI, 4.5 * PI);
                let scale = 1.0 / (4.5 * PI);
                noisy([scale * t * t.cos(), scale * t * t.sin()], rng)
            }
            SyntheticKind::SCurve => {
                let t = 3.0 * PI * (rng.uniform() - 0.5);
                [t.sin(), t.signum() * (t.cos() - 1.0)]
            }
        }
    }
}

impl fmt::Display for SyntheticKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SyntheticKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.to_ascii_lowercase().replace('_', "-");
        SyntheticKind::ALL
            .into_iter()
            .find(|k| k.name() == key || k.name().replace('-', "") == key.replace('-', ""))
            .ok_or_else(|| Error::InvalidParameter(format!("unknown synthetic dataset `{s}`")))
    }
}

/// Which planar coordinate is the response.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ResponseAxis {
    /// x = coordinate 0, y = coordinate 1.
    #[default]
    Second,
    First,
}

/// `n` paired rows of covariates (`p` columns) and responses (`d` columns).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledDataset {
    pub name: String,
    pub p: usize,
    pub d: usize,
    /// Row-major `n × p`.
    pub x: Vec<f64>,
    /// Row-major `n × d`.
    pub y: Vec<f64>,
}

impl LabeledDataset {
    pub fn new(name: impl Into<String>, p: usize, d: usize, x: Vec<f64>, y: Vec<f64>) -> Result<Self> {
        if d == 0 {
            return Err(Error::InvalidParameter("response dimension must be at least 1".into()));
        }
        let n = y.len() / d;
        if y.len() % d != 0 || x.len() != n * p {
            return Err(Error::InvalidParameter(format!(
                "row counts disagree: {} covariate values for p={p}, {} response values for d={d}",
                x.len(),
                y.len()
            )));
        }
        if x.iter().chain(&y).any(|v| !v.is_finite()) {
            return Err(Error::InvalidParameter("dataset contains non-finite values".into()));
        }
        Ok(Self { name: name.into(), p, d, x, y })
    }

    pub fn len(&self) -> usize {
        self.y.len() / self.d
    }

    pub fn is_empty(&self) -> bool {
        self.y.is_empty()
    }

    pub fn x_row(&self, i: usize) -> &[f64] {
        &self.x[i * self.p..(i + 1) * self.p]
    }

    pub fn y_row(&self, i: usize) -> &[f64] {
        &self.y[i * self.d..(i + 1) * self.d]
    }

    pub fn subset(&self, indices: &[usize]) -> Self {
        let mut x = Vec::with_capacity(indices.len() * self.p);
        let mut y = Vec::with_capacity(indices.len() * self.d);
        for &i in indices {
            x.extend_from_slice(self.x_row(i));
            y.extend_from_slice(self.y_row(i));
        }
        Self { name: self.name.clone(), p: self.p, d: self.d, x, y }
    }

    pub fn head(&self, n: usize) -> Self {
        let idx: Vec<usize> = (0..n.min(self.len())).collect();
        self.subset(&idx)
    }
}

pub fn gen_synthetic(kind: SyntheticKind, n: usize, rng: &mut Rng) -> LabeledDataset {
    gen_synthetic_with_axis(kind, n, ResponseAxis::Second, rng)
}

pub fn gen_synthetic_with_axis(kind: SyntheticKind, n: usize, axis: ResponseAxis, rng: &mut Rng) -> LabeledDataset {
    let mut x = Vec::with_capacity(n);
    let mut y = Vec::with_capacity(n);
    for _ in 0..n {
        let [a, b] = kind.draw_joint(rng);
        let (xi, yi) = match axis {
            ResponseAxis::Second => (a, b),
            ResponseAxis::First => (b, a),
        };
        x.push(xi);
        y.push(yi);
    }
    LabeledDataset { name: kind.name().to_string(), p: 1, d: 1, x, y }
}

/// Train/calibration/test fractions and the shuffle seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SplitSpec {
    pub train: f64,
    pub calib: f64,
    pub test: f64,
    pub seed: u64,
}

impl Default for SplitSpec {
    fn default() -> Self {
        Self { train: 0.6, calib: 0.2, test: 0.2, seed: 0 }
    }
}

impl SplitSpec {
    pub fn validate(&self) -> Result<()> {
        let parts = [self.train, self.calib, self.test];
        if parts.iter().any(|f| !(*f >= 0.0)) || ((parts.iter().sum::<f64>()) - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidParameter(format!(
                "split fractions must be non-negative and sum to 1, got {parts:?}"
            )));
        }
        Ok(())
    }

    /// `(train, calib, test)` sizes: `⌊f·n⌋` for calibration and test, the
    /// remainder to training.
    pub fn sizes(&self, n: usize) -> (usize, usize, usize) {
        let floor = |f: f64| ((f * n as f64) + 1e-9).floor() as usize;
        let calib = floor(self.calib).min(n);
        let test = floor(self.test).min(n - calib);
        (n - calib - test, calib, test)
    }
}

/// Seeded shuffle followed by a contiguous partition.
pub fn split(data: &LabeledDataset, spec: &SplitSpec) -> Result<(LabeledDataset, LabeledDataset, LabeledDataset)> {
    spec.validate()?;
    let n = data.len();
    let mut order: Vec<usize> = (0..n).collect();
    Rng::new(spec.seed).shuffle(&mut order);
    let (tr, ca, _) = spec.sizes(n);
    Ok((
        data.subset(&order[..tr]),
        data.subset(&order[tr..tr + ca]),
        data.subset(&order[tr + ca..]),
    ))
}

fn csv_err(path: &Path, message: impl Into<String>) -> Error {
    Error::Csv { path: path.to_path_buf(), message: message.into() }
}

/// Expected header `x_1,…,x_p,y_1,…,y_d`.
pub fn csv_header(p: usize, d: usize) -> Vec<String> {
    (1..=p).map(|i| format!("x_{i}")).chain((1..=d).map(|i| format!("y_{i}"))).collect()
}

/// Reads a dataset whose header is `x_1,…,x_p,y_1,…,y_d`. Row numbers in
/// errors count data rows from 1.
pub fn load_csv(path: &Path, p: usize, d: usize) -> Result<LabeledDataset> {
    let file = fs::File::open(path).map_err(|e| csv_err(path, e.to_string()))?;
    let mut reader = csv::ReaderBuilder::new().has_headers(true).flexible(true).from_reader(file);
    let header: Vec<String> = reader
        .headers()
        .map_err(|e| csv_err(path, e.to_string()))?
        .iter()
        .map(|h| h.trim().to_string())
        .collect();
    let expected = csv_header(p, d);
    if header != expected {
        return Err(csv_err(path, format!("header {header:?} does not match {expected:?}")));
    }
    let mut x = Vec::new();
    let mut y = Vec::new();
    for (i, record) in reader.records().enumerate() {
        let row = i + 1;
        let record = record.map_err(|e| Error::Parse { row, message: e.to_string() })?;
        if record.len() != p + d {
            return Err(Error::Parse { row, message: format!("expected {} fields, found {}", p + d, record.len()) });
        }
        for (j, cell) in record.iter().enumerate() {
            let v: f64 = cell
                .trim()
                .parse()
                .map_err(|_| Error::Parse { row, message: format!("column {} is not a number: `{cell}`", j + 1) })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, message: format!("column {} is not finite", j + 1) });
            }
            if j < p {
                x.push(v);
            } else {
                y.push(v);
            }
        }
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    LabeledDataset::new(name, p, d, x, y)
}

/// Writes the dataset with shortest round-trip float formatting.
pub fn write_csv(data: &LabeledDataset, path: &Path) -> Result<()> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent)?;
    }
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e.to_string()))?;
    w.write_record(csv_header(data.p, data.d)).map_err(|e| csv_err(path, e.to_string()))?;
    for i in 0..data.len() {
        let row: Vec<String> = data.x_row(i).iter().chain(data.y_row(i)).map(|v| format!("{v:?}")).collect();
        w.write_record(&row).map_err(|e| csv_err(path, e.to_string()))?;
    }
    w.flush()?;
    Ok(())
}

/// Writes `<dir>/<name>/{train,calib,test}.csv`.
pub fn write_split_cache(
    dir: &Path,
    name: &str,
    train: &LabeledDataset,
    calib: &LabeledDataset,
    test: &LabeledDataset,
) -> Result<Vec<PathBuf>> {
    let mut out = Vec::new();
    for (part, data) in [("train", train), ("calib", calib), ("test", test)] {
        let path = dir.join(name).join(format!("{part}.csv"));
        write_csv(data, &path)?;
        out.push(path);
    }
    Ok(out)
}

/// Per-column affine maps fitted on the training split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Standardizer {
    pub x_mean: Vec<f64>,
    pub x_scale: Vec<f64>,
    pub y_mean: Vec<f64>,
    pub y_scale: Vec<f64>,
}

fn column_params(values: &[f64], cols: usize) -> (Vec<f64>, Vec<f64>) {
    let n = values.len() / cols.max(1);
    let mut mean = vec![0.0; cols];
    let mut scale = vec![1.0; cols];
    for j in 0..cols {
        let col = values.iter().skip(j).step_by(cols);
        let m = col.clone().sum::<f64>() / n as f64;
        let var = col.map(|v| (v - m) * (v - m)).sum::<f64>() / n as f64;
        let sd = var.sqrt();
        if sd > 0.0 {
            mean[j] = m;
            scale[j] = sd;
        }
    }
    (mean, scale)
}

impl Standardizer {
    /// Population mean/std per column; constant columns map to themselves.
    pub fn fit(train: &LabeledDataset) -> Result<Self> {
        if train.is_empty() {
            return Err(Error::Empty("training split"));
        }
        let (x_mean, x_scale) = column_params(&train.x, train.p);
        let (y_mean, y_scale) = column_params(&train.y, train.d);
        Ok(Self { x_mean, x_scale, y_mean, y_scale })
    }

    pub fn transform(&self, data: &LabeledDataset) -> LabeledDataset {
        let map = |v: &[f64], mean: &[f64], scale: &[f64]| -> Vec<f64> {
            v.iter().enumerate().map(|(i, x)| (x - mean[i % mean.len()]) / scale[i % scale.len()]).collect()
        };
        LabeledDataset {
            name: data.name.clone(),
            p: data.p,
            d: data.d,
            x: if data.p == 0 { Vec::new() } else { map(&data.x, &self.x_mean, &self.x_scale) },
            y: map(&data.y, &self.y_mean, &self.y_scale),
        }
    }

    pub fn inverse(&self, data: &LabeledDataset) -> LabeledDataset {
        let map = |v: &[f64], mean: &[f64], scale: &[f64]| -> Vec<f64> {
            v.iter().enumerate().map(|(i, x)| x * scale[i % scale.len()] + mean[i % mean.len()]).collect()
        };
        LabeledDataset {
            name: data.name.clone(),
            p: data.p,
            d: data.d,
            x: if data.p == 0 { Vec::new() } else { map(&data.x, &self.x_mean, &self.x_scale) },
            y: map(&data.y, &self.y_mean, &self.y_scale),
        }
    }

    /// Response-space volume factor from standardized to raw units.
    pub fn y_volume_factor(&self) -> f64 {
        self.y_scale.iter().product()
    }
}

/// Fits on `train` and applies the same map to it and to every other split.
pub fn standardize(train: &LabeledDataset, others: &[&LabeledDataset]) -> Result<(Standardizer, LabeledDataset, Vec<LabeledDataset>)> {
    let st = Standardizer::fit(train)?;
    let t = st.transform(train);
    let rest = others.iter().map(|d| st.transform(d)).collect();
    Ok((st, t, rest))
}
