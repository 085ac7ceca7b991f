//! Per-feature exponential-moving-average histograms.
//!
//! Each histogram keeps `omega` in-domain bins aligned with the feature's
//! spline intervals, two out-of-domain bins (below `a`, above `b`) and the
//! running extremes seen outside the domain.

use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::spline::GridDomain;

/// Floor applied to marginal probabilities so log-scores stay finite.
pub const PROB_FLOOR: f64 = 1e-12;

/// Uniform-width bin counts of the in-domain samples. A sample equal to `b`
/// lands in the last bin; samples outside `[a, b]` are ignored.
pub fn create_histogram(samples: &[f64], dom: &GridDomain) -> Vec<f64> {
    let mut counts = vec![0.0; dom.omega];
    for &x in samples {
        if dom.contains(x) {
            counts[dom.bin_index(x)] += 1.0;
        }
    }
    counts
}

/// How out-of-domain mass is handled when a histogram moves to a new domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Absorb {
    /// Domain widened: out-of-domain tallies move into the new bins holding
    /// `ood_a` / `ood_b`, then the extremes reset to the new bounds.
    Stretch,
    /// Domain narrowed: in-domain mass that falls outside the new bounds
    /// moves into the out-of-domain tallies.
    Shrink,
    /// Same bounds, different bin count.
    Refine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureHistogram {
    pub domain: GridDomain,
    pub hist: Vec<f64>,
    /// `[below a, above b]`.
    pub ood_hist: [f64; 2],
    pub ood_a: f64,
    pub ood_b: f64,
    pub alpha: f64,
}

impl FeatureHistogram {
    /// Empty histogram. The extremes start at the domain bounds.
    pub fn new(domain: GridDomain, alpha: f64) -> Result<Self> {
        domain.validate()?;
        if !(alpha > 0.0 && alpha <= 1.0) {
            return Err(KanError::Config(format!("EMA rate must lie in (0, 1], got {alpha}")));
        }
        Ok(FeatureHistogram {
            domain,
            hist: vec![0.0; domain.omega],
            ood_hist: [0.0; 2],
            ood_a: domain.a,
            ood_b: domain.b,
            alpha,
        })
    }

    /// Histogram holding the raw counts of a single batch.
    pub fn from_batch(domain: GridDomain, alpha: f64, batch: &[f64]) -> Result<Self> {
        let mut h = Self::new(domain, alpha)?;
        check_finite(batch)?;
        h.hist = create_histogram(batch, &domain);
        Ok(h)
    }

    pub fn n_bins(&self) -> usize {
        self.hist.len()
    }

    /// Sum of all bins including the two out-of-domain bins.
    pub fn total(&self) -> f64 {
        self.hist.iter().sum::<f64>() + self.ood_hist[0] + self.ood_hist[1]
    }

    pub fn max_bin(&self) -> f64 {
        self.hist.iter().copied().fold(0.0, f64::max)
    }

    /// One EMA step on a batch of feature values.
    pub fn ema_update(&mut self, batch: &[f64]) -> Result<()> {
        check_finite(batch)?;
        let (a, b) = (self.domain.a, self.domain.b);
        let mut batch_ood = [0.0f64; 2];
        let mut in_domain = Vec::with_capacity(batch.len());
        for &x in batch {
            if x < a {
                batch_ood[0] += 1.0;
                self.ood_a = self.ood_a.min(x);
            } else if x > b {
                batch_ood[1] += 1.0;
                self.ood_b = self.ood_b.max(x);
            } else {
                in_domain.push(x);
            }
        }
        let batch_hist = create_histogram(&in_domain, &self.domain);
        let keep = 1.0 - self.alpha;
        for (h, c) in self.hist.iter_mut().zip(&batch_hist) {
            *h = keep * *h + self.alpha * c;
        }
        for (h, c) in self.ood_hist.iter_mut().zip(batch_ood) {
            *h = keep * *h + self.alpha * c;
        }
        Ok(())
    }

    /// Moves the histogram onto `new_dom` (which may have a different bin
    /// count). Values are linearly interpolated between old bin centers and
    /// converted to the new bin width; the total count is preserved.
    pub fn refit(&mut self, new_dom: GridDomain, absorb: Absorb) -> Result<()> {
        new_dom.validate()?;
        let old = self.domain;
        let total = self.total();
        let in_mass: f64 = self.hist.iter().sum();
        let scale = new_dom.width() / old.width();
        let mut hist: Vec<f64> = (0..new_dom.omega)
            .map(|i| interp_bins(&self.hist, &old, new_dom.center(i)) * scale)
            .collect();
        let mut ood = self.ood_hist;

        if hist.iter().sum::<f64>() <= 0.0 && in_mass > 0.0 {
            // every new center missed the occupied old bins
            let mid = 0.5 * (old.a + old.b);
            if new_dom.contains(mid) {
                hist[new_dom.bin_index(mid)] += in_mass;
            }
        }

        match absorb {
            Absorb::Stretch => {
                hist[new_dom.bin_index(self.ood_a)] += ood[0];
                hist[new_dom.bin_index(self.ood_b)] += ood[1];
                ood = [0.0; 2];
                self.ood_a = new_dom.a;
                self.ood_b = new_dom.b;
            }
            Absorb::Shrink => {
                let w = old.width();
                for (i, &h) in self.hist.iter().enumerate() {
                    let (lo, hi) = (old.edge(i), old.edge(i + 1));
                    let below = (new_dom.a.min(hi) - lo).max(0.0) / w;
                    let above = (hi - new_dom.b.max(lo)).max(0.0) / w;
                    ood[0] += h * below;
                    ood[1] += h * above;
                }
                self.ood_a = self.ood_a.min(new_dom.a);
                self.ood_b = self.ood_b.max(new_dom.b);
            }
            Absorb::Refine => {}
        }

        let new_total = hist.iter().sum::<f64>() + ood[0] + ood[1];
        if new_total > 0.0 {
            let r = total / new_total;
            hist.iter_mut().for_each(|h| *h *= r);
            ood.iter_mut().for_each(|h| *h *= r);
        }
        self.hist = hist;
        self.ood_hist = ood;
        self.domain = new_dom;
        Ok(())
    }

    /// Normalized in-domain bin value for `x`, floored at [`PROB_FLOOR`].
    pub fn marginal_prob(&self, x: f64) -> f64 {
        if !self.domain.contains(x) {
            return PROB_FLOOR;
        }
        let sum: f64 = self.hist.iter().sum();
        if sum <= 0.0 {
            return PROB_FLOOR;
        }
        (self.hist[self.domain.bin_index(x)] / sum).max(PROB_FLOOR)
    }
}

/// Old bin values as a function of position: linear between old bin
/// centers, held constant out to the old domain edges, zero beyond them.
fn interp_bins(values: &[f64], dom: &GridDomain, x: f64) -> f64 {
    if !dom.contains(x) {
        return 0.0;
    }
    let n = values.len();
    let u = (x - dom.a) / dom.width() - 0.5;
    if u <= 0.0 {
        return values[0];
    }
    if u >= (n - 1) as f64 {
        return values[n - 1];
    }
    let i = (u.floor() as usize).min(n - 2);
    let t = u - i as f64;
    values[i] + t * (values[i + 1] - values[i])
}

fn check_finite(batch: &[f64]) -> Result<()> {
    match batch.iter().position(|x| !x.is_finite()) {
        Some(i) => Err(KanError::Data(format!("non-finite sample at index {i}"))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn unit(omega: usize) -> GridDomain {
        GridDomain::new(0.0, 1.0, omega).unwrap()
    }

    #[test]
    fn create_examples() {
        assert_eq!(create_histogram(&[0.1, 0.1, 0.9], &unit(2)), vec![2.0, 1.0]);
        assert_eq!(create_histogram(&[], &unit(3)), vec![0.0; 3]);
        assert_eq!(create_histogram(&[1.0], &unit(4)), vec![0.0, 0.0, 0.0, 1.0]);
    }

    #[test]
    fn ema_blends_raw_counts() {
        let mut h = FeatureHistogram::new(unit(2), 0.5).unwrap();
        h.hist = vec![4.0, 0.0];
        h.ema_update(&[0.1, 0.2]).unwrap();
        assert_eq!(h.hist, vec![3.0, 0.0]);
    }

    #[test]
    fn ema_tracks_out_of_domain() {
        let mut h = FeatureHistogram::new(unit(2), 1.0).unwrap();
        h.ema_update(&[-0.5, 0.2, 1.5, 0.7]).unwrap();
        assert_eq!(h.ood_hist, [1.0, 1.0]);
        assert_eq!(h.ood_a, -0.5);
        assert_eq!(h.ood_b, 1.5);
        h.ema_update(&[-0.1, 3.0]).unwrap();
        assert_eq!(h.ood_a, -0.5);
        assert_eq!(h.ood_b, 3.0);
    }

    #[test]
    fn alpha_one_has_no_memory() {
        let mut h = FeatureHistogram::new(unit(4), 1.0).unwrap();
        h.hist = vec![9.0, 9.0, 9.0, 9.0];
        let batch = [0.1, 0.6, 0.61, 0.99];
        h.ema_update(&batch).unwrap();
        assert_eq!(h.hist, create_histogram(&batch, &unit(4)));
    }

    #[test]
    fn rejects_non_finite() {
        let mut h = FeatureHistogram::new(unit(4), 0.1).unwrap();
        let before = h.clone();
        assert!(h.ema_update(&[0.1, f64::NAN]).is_err());
        assert_eq!(h, before);
        assert!(FeatureHistogram::new(unit(4), 0.0).is_err());
        assert!(FeatureHistogram::new(unit(4), 1.5).is_err());
    }

    #[test]
    fn identical_refit_is_identity() {
        let mut h = FeatureHistogram::new(unit(4), 0.1).unwrap();
        h.hist = vec![1.0, 3.0, 2.0, 5.0];
        h.ood_hist = [0.5, 0.25];
        let before = h.clone();
        h.refit(unit(4), Absorb::Refine).unwrap();
        assert_eq!(h.hist, before.hist);
        assert_eq!(h.ood_hist, before.ood_hist);
    }

    #[test]
    fn stretch_deposits_ood_mass() {
        let mut h = FeatureHistogram::new(unit(4), 0.1).unwrap();
        h.hist = vec![1.0, 1.0, 1.0, 1.0];
        h.ood_hist = [5.0, 0.0];
        h.ood_a = -2.0;
        let total = h.total();
        let new_dom = GridDomain::new(-2.0, 1.0, 4).unwrap();
        h.refit(new_dom, Absorb::Stretch).unwrap();
        assert_eq!(h.ood_hist, [0.0, 0.0]);
        assert_eq!(h.ood_a, -2.0);
        assert_eq!(h.ood_b, 1.0);
        // bin 0 holds -2 and is the largest after the deposit
        let max = h.max_bin();
        assert_eq!(h.hist[0], max);
        assert_abs_diff_eq!(h.total(), total, epsilon = 1e-12);
    }

    #[test]
    fn shrink_moves_edge_mass_out() {
        let mut h = FeatureHistogram::new(unit(4), 0.1).unwrap();
        h.hist = vec![0.01, 5.0, 5.0, 0.02];
        let total = h.total();
        h.refit(GridDomain::new(0.25, 0.75, 4).unwrap(), Absorb::Shrink)
            .unwrap();
        assert!(h.ood_hist[0] > 0.0 && h.ood_hist[1] > 0.0);
        assert_abs_diff_eq!(h.total(), total, epsilon = 1e-12);
        assert!(h.ood_a <= 0.25 && h.ood_b >= 0.75);
    }

    #[test]
    fn marginal_prob_examples() {
        let mut h = FeatureHistogram::new(GridDomain::new(0.0, 1.0, 10).unwrap(), 1.0).unwrap();
        h.hist = vec![2.0; 10];
        assert_abs_diff_eq!(h.marginal_prob(0.55), 0.1, epsilon = 1e-15);
        assert_eq!(h.marginal_prob(-0.1), PROB_FLOOR);
        let mut h = FeatureHistogram::new(unit(2), 1.0).unwrap();
        h.hist = vec![3.0, 1.0];
        assert_eq!(h.marginal_prob(0.75), 0.25);
        h.hist = vec![0.0, 1.0];
        assert_eq!(h.marginal_prob(0.25), PROB_FLOOR);
    }
}
