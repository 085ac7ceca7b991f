//! Post-hoc out-of-distribution scoring from per-feature histograms, with
//! optional maximum-softmax-probability fusion, and AUROC.

use ndarray::ArrayView2;
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::exec::Exec;
use crate::histogram::FeatureHistogram;
use crate::spline::GridDomain;

pub const DEFAULT_BINS: usize = 200;
pub const DEFAULT_MSP_BINS: usize = 50;
pub const DEFAULT_MSP_LAMBDA: f64 = 0.1;
/// Half-width added around a constant feature.
pub const DEGENERATE_WIDEN: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind", content = "ranges")]
pub enum Bounds {
    /// Per-feature min and max of the fit data.
    FromData,
    Fixed(Vec<(f64, f64)>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OodScorer {
    pub histograms: Vec<FeatureHistogram>,
    pub msp_lambda: f64,
    pub num_classes: Option<usize>,
    /// True when bounds came from the fit data rather than the caller.
    pub bounds_from_data: bool,
}

impl OodScorer {
    pub fn fit(features: ArrayView2<f64>, bins: usize, bounds: &Bounds) -> Result<Self> {
        let (n, nf) = features.dim();
        if n == 0 || nf == 0 {
            return Err(KanError::Data(format!("cannot fit on a {n}x{nf} feature matrix")));
        }
        if features.iter().any(|v| !v.is_finite()) {
            return Err(KanError::NonFinite("fit features".into()));
        }
        let ranges: Vec<(f64, f64)> = match bounds {
            Bounds::FromData => features
                .columns()
                .into_iter()
                .map(|c| {
                    let lo = c.iter().copied().fold(f64::INFINITY, f64::min);
                    let hi = c.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if lo == hi {
                        (lo - DEGENERATE_WIDEN, hi + DEGENERATE_WIDEN)
                    } else {
                        (lo, hi)
                    }
                })
                .collect(),
            Bounds::Fixed(r) if r.len() == nf => r.clone(),
            Bounds::Fixed(r) => return Err(KanError::shape(format!("{nf} bounds"), r.len())),
        };
        let mut histograms = Vec::with_capacity(nf);
        for (j, (a, b)) in ranges.into_iter().enumerate() {
            let col: Vec<f64> = features.column(j).to_vec();
            let h = FeatureHistogram::from_batch(GridDomain::new(a, b, bins)?, 1.0, &col)?;
            if h.hist.iter().sum::<f64>() <= 0.0 {
                return Err(KanError::Data(format!("feature {j} has no samples inside its bounds")));
            }
            histograms.push(h);
        }
        Ok(OodScorer {
            histograms,
            msp_lambda: 0.0,
            num_classes: None,
            bounds_from_data: matches!(bounds, Bounds::FromData),
        })
    }

    /// Wraps existing histograms, e.g. those recorded by a trained network.
    pub fn from_histograms(histograms: Vec<FeatureHistogram>) -> Result<Self> {
        if histograms.is_empty() {
            return Err(KanError::Data("no histograms".into()));
        }
        Ok(OodScorer {
            histograms,
            msp_lambda: 0.0,
            num_classes: None,
            bounds_from_data: false,
        })
    }

    pub fn with_msp(mut self, lambda: f64, num_classes: usize) -> Self {
        self.msp_lambda = lambda;
        self.num_classes = Some(num_classes);
        self
    }

    pub fn n_features(&self) -> usize {
        self.histograms.len()
    }

    /// Mean log marginal probability over features; lower is more unusual.
    pub fn score_hist(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.n_features() {
            return Err(KanError::shape(self.n_features(), x.len()));
        }
        let total: f64 = self
            .histograms
            .iter()
            .zip(x)
            .map(|(h, &v)| h.marginal_prob(v).ln())
            .sum();
        Ok(total / self.n_features() as f64)
    }

    /// `score_hist + lambda * log(max softmax(logits))`.
    pub fn score_hist_msp(&self, x: &[f64], logits: &[f64]) -> Result<f64> {
        if let Some(k) = self.num_classes {
            if logits.len() != k {
                return Err(KanError::shape(k, logits.len()));
            }
        }
        let base = self.score_hist(x)?;
        if self.msp_lambda == 0.0 {
            return Ok(base);
        }
        Ok(base + self.msp_lambda * log_max_softmax(logits)?)
    }

    /// Scores every row of `x`.
    pub fn score_batch(&self, x: ArrayView2<f64>, exec: Exec) -> Result<Vec<f64>> {
        if x.ncols() != self.n_features() {
            return Err(KanError::shape(self.n_features(), x.ncols()));
        }
        Ok(exec.map(x.nrows(), |i| {
            let row: Vec<f64> = x.row(i).to_vec();
            self.score_hist(&row).expect("width checked")
        }))
    }
}

/// Log of the largest softmax probability, computed stably.
pub fn log_max_softmax(logits: &[f64]) -> Result<f64> {
    if logits.is_empty() || logits.iter().any(|v| v.is_nan()) {
        return Err(KanError::Data("logits must be non-empty and not NaN".into()));
    }
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::INFINITY {
        let ties = logits.iter().filter(|&&v| v == max).count();
        return Ok(-(ties as f64).ln());
    }
    let lse: f64 = logits.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
    Ok(-lse)
}

/// Probability that an in-distribution score exceeds an OOD score, ties
/// counting one half. NaN when either set is empty.
pub fn auroc(id_scores: &[f64], ood_scores: &[f64]) -> f64 {
    let (n1, n2) = (id_scores.len(), ood_scores.len());
    if n1 == 0 || n2 == 0 {
        return f64::NAN;
    }
    let mut all: Vec<(f64, bool)> = id_scores
        .iter()
        .map(|&s| (s, true))
        .chain(ood_scores.iter().map(|&s| (s, false)))
        .collect();
    all.sort_by(|a, b| a.0.total_cmp(&b.0));
    // sum of mid-ranks of the in-distribution scores
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < all.len() {
        let mut j = i;
        while j + 1 < all.len() && all[j + 1].0 == all[i].0 {
            j += 1;
        }
        let mid = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += mid * all[i..=j].iter().filter(|e| e.1).count() as f64;
        i = j + 1;
    }
    let (n1, n2) = (n1 as f64, n2 as f64);
    (rank_sum - n1 * (n1 + 1.0) / 2.0) / (n1 * n2)
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use ndarray::{array, Array2};

    #[test]
    fn two_bin_fit() {
        let s = OodScorer::fit(array![[0.0], [1.0]].view(), 2, &Bounds::FromData).unwrap();
        assert_eq!(s.histograms[0].marginal_prob(0.25), 0.5);
        assert_eq!(s.histograms[0].marginal_prob(1.0), 0.5);
    }

    #[test]
    fn constant_feature_is_widened() {
        let s = OodScorer::fit(array![[2.0], [2.0], [2.0]].view(), 10, &Bounds::FromData).unwrap();
        let d = s.histograms[0].domain;
        assert_eq!((d.a, d.b), (2.0 - 1e-6, 2.0 + 1e-6));
        assert_eq!(s.histograms[0].hist.iter().filter(|&&v| v > 0.0).count(), 1);
    }

    #[test]
    fn fitting_twice_matches() {
        let x = Array2::from_shape_fn((100, 3), |(i, j)| ((i * 13 + j * 7) % 23) as f64);
        let a = OodScorer::fit(x.view(), 20, &Bounds::FromData).unwrap();
        assert_eq!(a, OodScorer::fit(x.view(), 20, &Bounds::FromData).unwrap());
    }

    #[test]
    fn score_examples() {
        let x = Array2::from_shape_fn((1000, 2), |(i, _)| (i % 10) as f64 + 0.5);
        let s = OodScorer::fit(x.view(), 10, &Bounds::Fixed(vec![(0.0, 10.0); 2])).unwrap();
        assert_abs_diff_eq!(s.score_hist(&[3.3, 7.7]).unwrap(), 0.1f64.ln(), epsilon = 1e-12);
        assert_abs_diff_eq!(
            s.score_hist(&[3.3, 11.0]).unwrap(),
            (0.1f64.ln() + 1e-12f64.ln()) / 2.0,
            epsilon = 1e-12
        );
        // P = 0.5 on one feature and 0.125 on the other
        let mut h1 = FeatureHistogram::new(GridDomain::new(0.0, 2.0, 2).unwrap(), 1.0).unwrap();
        h1.hist = vec![3.0, 3.0];
        let mut h2 = FeatureHistogram::new(GridDomain::new(0.0, 8.0, 8).unwrap(), 1.0).unwrap();
        h2.hist = vec![1.0; 8];
        let s = OodScorer::from_histograms(vec![h1, h2]).unwrap();
        assert_abs_diff_eq!(
            s.score_hist(&[0.5, 0.5]).unwrap(),
            (0.5f64.ln() + 0.125f64.ln()) / 2.0,
            epsilon = 1e-12
        );
        assert_abs_diff_eq!(s.score_hist(&[0.5, 0.5]).unwrap(), -1.386294, epsilon = 1e-6);
    }

    #[test]
    fn msp_examples() {
        let x = Array2::from_shape_fn((100, 1), |(i, _)| i as f64);
        let s = OodScorer::fit(x.view(), 10, &Bounds::FromData).unwrap();
        let base = s.score_hist(&[5.0]).unwrap();
        let s0 = s.clone().with_msp(0.0, 10);
        assert_eq!(s0.score_hist_msp(&[5.0], &[0.3; 10]).unwrap(), base);
        let s1 = s.clone().with_msp(0.1, 10);
        assert_abs_diff_eq!(
            s1.score_hist_msp(&[5.0], &[0.3; 10]).unwrap(),
            base + 0.1 * 0.1f64.ln(),
            epsilon = 1e-12
        );
        let mut logits = [0.0; 10];
        logits[4] = 1e6;
        let v = s1.score_hist_msp(&[5.0], &logits).unwrap();
        assert!(v <= base && base - v < 1e-12);
        logits[4] = f64::INFINITY;
        assert_eq!(s1.score_hist_msp(&[5.0], &logits).unwrap(), base);
        assert!(s1.score_hist_msp(&[5.0], &[0.0; 3]).is_err());
    }

    #[test]
    fn auroc_examples() {
        assert_eq!(auroc(&[-1.0, -1.0], &[-5.0, -5.0]), 1.0);
        assert_eq!(auroc(&[-1.0, -3.0], &[-2.0, -4.0]), 0.75);
        assert_eq!(auroc(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]), 0.5);
        assert!(auroc(&[], &[1.0]).is_nan());
    }
}
