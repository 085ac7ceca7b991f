//! Synthetic regression tasks, datasets, RMSE and data poisoning.

use std::path::Path;

use ndarray::{Array2, ArrayView2, Axis};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

/// Inputs row-major `n x d`, targets `n x m`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub x: Array2<f64>,
    pub y: Array2<f64>,
}

impl Dataset {
    pub fn new(x: Array2<f64>, y: Array2<f64>) -> Result<Self> {
        if x.nrows() != y.nrows() {
            return Err(KanError::shape(format!("{} target rows", x.nrows()), y.nrows()));
        }
        Ok(Dataset { x, y })
    }

    pub fn len(&self) -> usize {
        self.x.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn n_features(&self) -> usize {
        self.x.ncols()
    }

    /// Rows `idx` in that order.
    pub fn select(&self, idx: &[usize]) -> Dataset {
        Dataset {
            x: self.x.select(Axis(0), idx),
            y: self.y.select(Axis(0), idx),
        }
    }

    /// Writes a header row (`names` for features, then `y`, `y1`, ...) and one
    /// row per sample.
    pub fn write_csv(&self, path: impl AsRef<Path>, names: &[String]) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        let mut header: Vec<String> = (0..self.n_features())
            .map(|j| names.get(j).cloned().unwrap_or_else(|| format!("x{j}")))
            .collect();
        header.extend((0..self.y.ncols()).map(|i| if i == 0 { "y".into() } else { format!("y{i}") }));
        w.write_record(&header)?;
        for (xr, yr) in self.x.rows().into_iter().zip(self.y.rows()) {
            w.write_record(xr.iter().chain(yr.iter()).map(|v| format!("{v:?}")))?;
        }
        w.flush()?;
        Ok(())
    }

    /// Reads a headed CSV whose last `n_targets` columns are targets.
    pub fn read_csv(path: impl AsRef<Path>, n_targets: usize) -> Result<Self> {
        let (cols, rows) = read_matrix(path)?;
        if cols <= n_targets {
            return Err(KanError::Data(format!(
                "need more than {n_targets} columns, found {cols}"
            )));
        }
        let d = cols - n_targets;
        let x = rows.slice(ndarray::s![.., ..d]).to_owned();
        let y = rows.slice(ndarray::s![.., d..]).to_owned();
        Dataset::new(x, y)
    }
}

/// Reads a headed CSV of numbers into a matrix; returns the column count too.
pub fn read_matrix(path: impl AsRef<Path>) -> Result<(usize, Array2<f64>)> {
    let mut r = csv::Reader::from_path(path)?;
    let cols = r.headers()?.len();
    let mut data = Vec::new();
    let mut n = 0;
    for (line, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != cols {
            return Err(KanError::Data(format!(
                "row {} has {} fields, header has {cols}",
                line + 1,
                rec.len()
            )));
        }
        for field in rec.iter() {
            let v: f64 = field.trim().parse().map_err(|_| {
                KanError::Data(format!("row {}: cannot parse {field:?} as a number", line + 1))
            })?;
            data.push(v);
        }
        n += 1;
    }
    let m = Array2::from_shape_vec((n, cols), data).expect("rows checked against header");
    Ok((cols, m))
}

/// Writes a matrix as headed CSV.
pub fn write_matrix(path: impl AsRef<Path>, header: &[&str], m: ArrayView2<f64>) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    w.write_record(header)?;
    for row in m.rows() {
        w.write_record(row.iter().map(|v| format!("{v:?}")))?;
    }
    w.flush()?;
    Ok(())
}

/// Root mean squared error over all entries.
pub fn rmse(pred: ArrayView2<f64>, target: ArrayView2<f64>) -> f64 {
    let n = pred.len();
    if n == 0 {
        return 0.0;
    }
    let sq: f64 = pred.iter().zip(target.iter()).map(|(p, t)| (p - t) * (p - t)).sum();
    (sq / n as f64).sqrt()
}

/// Tasks shipped by name.
pub const TASK_NAMES: [&str; 6] = ["II.38.3", "I.6.2", "I.16.6", "I.40.1", "II.2.42", "I.12.11"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TaskConfig {
    pub name: String,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
    /// Replaces the default input ranges when present.
    pub ranges: Option<Vec<(f64, f64)>>,
}

impl Default for TaskConfig {
    fn default() -> Self {
        TaskConfig {
            name: "II.38.3".into(),
            n_train: 3000,
            n_test: 1000,
            seed: 0,
            ranges: None,
        }
    }
}

#[derive(Debug, Clone)]
pub struct SymbolicTask {
    pub name: String,
    pub inputs: Vec<String>,
    pub ranges: Vec<(f64, f64)>,
    pub target: fn(&[f64]) -> f64,
    pub n_train: usize,
    pub n_test: usize,
    pub seed: u64,
}

fn ab(v: &[f64]) -> f64 {
    v[0] * v[1]
}

fn gaussian(v: &[f64]) -> f64 {
    let (theta, sigma) = (v[0], v[1]);
    (-theta * theta / (2.0 * sigma * sigma)).exp() / (2.0 * std::f64::consts::PI * sigma * sigma).sqrt()
}

fn velocity_add(v: &[f64]) -> f64 {
    (v[0] + v[1]) / (1.0 + v[0] * v[1])
}

fn decay(v: &[f64]) -> f64 {
    v[0] * (-v[1]).exp()
}

fn shifted_product(v: &[f64]) -> f64 {
    (v[0] - 1.0) * v[1]
}

fn sine_ratio(v: &[f64]) -> f64 {
    1.0 / (1.0 + v[0] * v[1].sin())
}

impl SymbolicTask {
    pub fn from_config(cfg: &TaskConfig) -> Result<Self> {
        type Entry = (&'static [&'static str], &'static [(f64, f64)], fn(&[f64]) -> f64);
        let (names, ranges, target): Entry = match cfg.name.as_str() {
            "II.38.3" => (&["a", "b"], &[(-1.0, 1.0), (-1.0, 1.0)], ab),
            "I.6.2" => (&["theta", "sigma"], &[(-1.0, 1.0), (0.5, 2.0)], gaussian),
            "I.16.6" => (&["a", "b"], &[(-0.8, 0.8), (-0.8, 0.8)], velocity_add),
            "I.40.1" => (&["n0", "a"], &[(-1.0, 1.0), (-1.0, 1.0)], decay),
            "II.2.42" => (&["a", "b"], &[(-1.0, 1.0), (-1.0, 1.0)], shifted_product),
            "I.12.11" => (
                &["a", "theta"],
                &[(-0.5, 0.5), (0.0, 2.0 * std::f64::consts::PI)],
                sine_ratio,
            ),
            other => {
                return Err(KanError::Config(format!(
                    "unknown task {other:?}; known: {}",
                    TASK_NAMES.join(", ")
                )))
            }
        };
        let ranges = match &cfg.ranges {
            Some(r) if r.len() != names.len() => {
                return Err(KanError::Config(format!(
                    "task {} takes {} ranges, got {}",
                    cfg.name,
                    names.len(),
                    r.len()
                )))
            }
            Some(r) => r.clone(),
            None => ranges.to_vec(),
        };
        if let Some((lo, hi)) = ranges.iter().find(|(lo, hi)| !(lo < hi) || !lo.is_finite() || !hi.is_finite()) {
            return Err(KanError::Config(format!("invalid range [{lo}, {hi}]")));
        }
        Ok(SymbolicTask {
            name: cfg.name.clone(),
            inputs: names.iter().map(|s| s.to_string()).collect(),
            ranges,
            target,
            n_train: cfg.n_train,
            n_test: cfg.n_test,
            seed: cfg.seed,
        })
    }

    pub fn by_name(name: &str) -> Result<Self> {
        Self::from_config(&TaskConfig {
            name: name.into(),
            ..Default::default()
        })
    }

    pub fn arity(&self) -> usize {
        self.inputs.len()
    }

    pub fn eval(&self, x: &[f64]) -> f64 {
        (self.target)(x)
    }

    fn sample(&self, n: usize, rng: &mut ChaCha8Rng) -> Dataset {
        let d = self.arity();
        let dists: Vec<Uniform<f64>> = self
            .ranges
            .iter()
            .map(|&(lo, hi)| Uniform::new(lo, hi).expect("range validated"))
            .collect();
        let mut x = Array2::zeros((n, d));
        let mut y = Array2::zeros((n, 1));
        for s in 0..n {
            for (j, dist) in dists.iter().enumerate() {
                x[[s, j]] = dist.sample(rng);
            }
            y[[s, 0]] = self.eval(x.row(s).as_slice().expect("standard layout"));
        }
        Dataset { x, y }
    }

    /// Independent uniform train and test sets from one seeded stream.
    pub fn generate(&self) -> (Dataset, Dataset) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        let train = self.sample(self.n_train, &mut rng);
        let test = self.sample(self.n_test, &mut rng);
        (train, test)
    }
}

/// Replaces the inputs of selected epochs with scaled standard normal noise.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PoisonPlan {
    pub epochs: usize,
    pub n_high: usize,
    pub n_low: usize,
    pub high_scale: f64,
    pub low_scale: f64,
    pub seed: u64,
}

impl Default for PoisonPlan {
    fn default() -> Self {
        PoisonPlan {
            epochs: 1000,
            n_high: 5,
            n_low: 5,
            high_scale: 10.0,
            low_scale: 0.1,
            seed: 0,
        }
    }
}

impl PoisonPlan {
    pub fn none(epochs: usize) -> Self {
        PoisonPlan {
            epochs,
            n_high: 0,
            n_low: 0,
            ..Default::default()
        }
    }

    /// Scale applied at each epoch, `None` for clean epochs.
    pub fn schedule(&self) -> Result<Vec<Option<f64>>> {
        if self.n_high + self.n_low > self.epochs {
            return Err(KanError::Config(format!(
                "{} poisoned epochs requested out of {}",
                self.n_high + self.n_low,
                self.epochs
            )));
        }
        let mut order: Vec<usize> = (0..self.epochs).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(self.seed));
        let mut out = vec![None; self.epochs];
        for (r, &e) in order.iter().take(self.n_high + self.n_low).enumerate() {
            out[e] = Some(if r < self.n_high {
                self.high_scale
            } else {
                self.low_scale
            });
        }
        Ok(out)
    }

    /// Overwrites `x` with `scale * N(0, 1)` noise for a poisoned epoch.
    pub fn corrupt(&self, epoch: usize, scale: f64, x: &mut Array2<f64>) {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15));
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        x.iter_mut().for_each(|v| *v = scale * normal.sample(&mut rng));
    }
}
