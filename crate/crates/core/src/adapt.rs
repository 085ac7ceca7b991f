//! Stretch/shrink decisions for a feature's grid domain and the refits that
//! follow them.

use std::collections::hash_map::Entry;
use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::histogram::{Absorb, FeatureHistogram};
use crate::spline::{self, GridDomain, LstsqFitter};

/// When out-of-domain tallies are large enough to widen the domain.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StretchMode {
    /// An out-of-domain bin exceeds the largest in-domain bin.
    Max,
    /// An out-of-domain bin exceeds half the largest in-domain bin.
    #[default]
    HalfMax,
    /// An out-of-domain bin exceeds the mean in-domain bin.
    Mean,
    /// An out-of-domain bin exceeds its adjacent edge bin.
    Edge,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShrinkRule {
    /// `N * (1 - alpha)^p * alpha`.
    #[default]
    Fixed,
    /// `max(hist) * alpha`.
    Relative,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefitMode {
    /// Least squares against the old activation on a dense grid.
    #[default]
    ExactLsq,
    /// Linear interpolation of coefficients at Greville abscissae.
    Greville,
}

/// How domains are kept in step with the data during training.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum AdaptMethod {
    /// Histogram-driven stretch/shrink, checked every training step.
    #[default]
    Auto,
    /// Reset every domain to the batch range every `every` steps.
    Manual { every: usize },
    /// Domains stay fixed; histograms are still recorded.
    Off,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AdaptConfig {
    pub alpha: f64,
    pub patience: u32,
    pub stretch_mode: StretchMode,
    pub shrink_rule: ShrinkRule,
    pub refit_mode: RefitMode,
    pub outlier_count: u32,
    pub method: AdaptMethod,
}

impl Default for AdaptConfig {
    fn default() -> Self {
        AdaptConfig {
            alpha: 1e-3,
            patience: 1,
            stretch_mode: StretchMode::HalfMax,
            shrink_rule: ShrinkRule::Fixed,
            refit_mode: RefitMode::ExactLsq,
            outlier_count: 1,
            method: AdaptMethod::Auto,
        }
    }
}

impl AdaptConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.alpha > 0.0 && self.alpha <= 1.0) {
            return Err(KanError::Config(format!(
                "alpha must lie in (0, 1], got {}",
                self.alpha
            )));
        }
        if self.patience < 1 {
            return Err(KanError::Config("patience must be at least 1".into()));
        }
        if self.outlier_count < 1 {
            return Err(KanError::Config("outlier_count must be at least 1".into()));
        }
        if let AdaptMethod::Manual { every: 0 } = self.method {
            return Err(KanError::Config("manual adapt period must be at least 1".into()));
        }
        Ok(())
    }
}

/// Threshold below which an edge bin counts as stale.
///
/// The fixed rule is accumulated as `N * alpha` followed by `p`
/// multiplications by `1 - alpha`, the same operation sequence an EMA bin
/// goes through when a single outlier is followed by `p` clean batches.
pub fn shrink_threshold(cfg: &AdaptConfig, h: &FeatureHistogram) -> f64 {
    match cfg.shrink_rule {
        ShrinkRule::Fixed => {
            let keep = 1.0 - cfg.alpha;
            let mut tau = cfg.outlier_count as f64 * cfg.alpha;
            for _ in 0..cfg.patience {
                tau *= keep;
            }
            tau
        }
        ShrinkRule::Relative => h.max_bin() * cfg.alpha,
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Decision {
    None,
    Shrink { a: f64, b: f64 },
    Stretch { a: f64, b: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Diagnostic {
    /// A shrink was triggered but no bin is above the threshold.
    ShrinkWouldCollapse,
}

/// Decides whether a feature's domain should shrink, stretch or stay.
///
/// Edge bins at or below the shrink threshold (together with their
/// out-of-domain neighbour) trigger a shrink to the outermost bins above it.
/// The stretch check runs afterwards and wins: when either out-of-domain bin
/// exceeds the stretch threshold the domain becomes `[ood_a, ood_b]`.
pub fn decide(h: &FeatureHistogram, cfg: &AdaptConfig) -> (Decision, Option<Diagnostic>) {
    let dom = &h.domain;
    let n = h.hist.len();
    let tau = shrink_threshold(cfg, h);
    let mut decision = Decision::None;
    let mut diagnostic = None;

    let left_stale = h.ood_hist[0] <= tau && h.hist[0] <= tau;
    let right_stale = h.ood_hist[1] <= tau && h.hist[n - 1] <= tau;
    if left_stale || right_stale {
        let first = h.hist.iter().position(|&v| v > tau);
        let last = h.hist.iter().rposition(|&v| v > tau);
        match (first, last) {
            (Some(i), Some(j)) => {
                decision = Decision::Shrink {
                    a: dom.edge(i),
                    b: dom.edge(j + 1),
                }
            }
            _ => diagnostic = Some(Diagnostic::ShrinkWouldCollapse),
        }
    }

    let max = h.max_bin();
    let (lo_limit, hi_limit) = match cfg.stretch_mode {
        StretchMode::Max => (max, max),
        StretchMode::HalfMax => (0.5 * max, 0.5 * max),
        StretchMode::Mean => {
            let mean = h.hist.iter().sum::<f64>() / n as f64;
            (mean, mean)
        }
        StretchMode::Edge => (h.hist[0], h.hist[n - 1]),
    };
    if h.ood_hist[0] > lo_limit || h.ood_hist[1] > hi_limit {
        decision = Decision::Stretch {
            a: h.ood_a,
            b: h.ood_b,
        };
    }

    let unchanged = match decision {
        Decision::Shrink { a, b } | Decision::Stretch { a, b } => a == dom.a && b == dom.b,
        Decision::None => false,
    };
    if unchanged {
        decision = Decision::None;
    }
    (decision, diagnostic)
}

/// Least-squares projectors keyed by interval count.
#[derive(Debug, Default, Clone)]
pub struct FitterCache {
    fitters: HashMap<usize, LstsqFitter>,
}

impl FitterCache {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn get(&mut self, omega: usize) -> Result<&LstsqFitter> {
        match self.fitters.entry(omega) {
            Entry::Occupied(e) => Ok(e.into_mut()),
            Entry::Vacant(e) => Ok(e.insert(LstsqFitter::new(omega)?)),
        }
    }
}

/// One input feature of a layer: its histogram (which owns the grid domain)
/// and the coefficient rows of every activation reading that feature,
/// stored row-major as `n_out x (omega + k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureState {
    pub histogram: FeatureHistogram,
    pub coef: Vec<f64>,
}

impl FeatureState {
    pub fn domain(&self) -> &GridDomain {
        &self.histogram.domain
    }

    pub fn n_rows(&self) -> usize {
        self.coef.len() / self.domain().n_weights()
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let nw = self.domain().n_weights();
        &self.coef[i * nw..(i + 1) * nw]
    }

    /// Refits every coefficient row onto `new_dom`. Returns the largest
    /// per-row residual and whether any solve was rank deficient.
    pub fn refit_rows(
        &mut self,
        new_dom: &GridDomain,
        mode: RefitMode,
        fitters: &mut FitterCache,
    ) -> Result<(Vec<f64>, bool)> {
        let old_dom = *self.domain();
        let (nw_old, nw_new) = (old_dom.n_weights(), new_dom.n_weights());
        let n_rows = self.n_rows();
        let mut coef = Vec::with_capacity(n_rows * nw_new);
        let mut residuals = Vec::with_capacity(n_rows);
        let mut deficient = false;
        let fitter = match mode {
            RefitMode::ExactLsq => Some(fitters.get(new_dom.omega)?),
            RefitMode::Greville => None,
        };
        for row in self.coef.chunks(nw_old) {
            match fitter {
                Some(f) => {
                    let out = f.refit(row, &old_dom, new_dom)?;
                    deficient |= out.rank_deficient;
                    residuals.push(out.max_residual);
                    coef.extend(out.weights);
                }
                None => {
                    let w = spline::refit_greville(row, &old_dom, new_dom);
                    residuals.push(spline::refit_residual(row, &old_dom, &w, new_dom));
                    coef.extend(w);
                }
            }
        }
        self.coef = coef;
        Ok((residuals, deficient))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdaptKind {
    Shrink,
    Stretch,
    Manual,
    Refine,
}

/// Record of one domain change.
#[derive(Debug, Clone, PartialEq)]
pub struct AdaptEvent {
    pub kind: AdaptKind,
    pub old: GridDomain,
    pub new: GridDomain,
    /// Per-row spline residuals of the refit.
    pub row_residuals: Vec<f64>,
    pub rank_deficient: bool,
    /// Set by manual adaptation when the batch had zero spread.
    pub degenerate: bool,
}

impl AdaptEvent {
    pub fn max_residual(&self) -> f64 {
        self.row_residuals.iter().copied().fold(0.0, f64::max)
    }
}

/// Applies a decision: new domain, refit coefficients and histogram.
pub fn apply_adapt(
    state: &mut FeatureState,
    decision: Decision,
    cfg: &AdaptConfig,
    fitters: &mut FitterCache,
) -> Result<Option<AdaptEvent>> {
    let (kind, a, b, absorb) = match decision {
        Decision::None => return Ok(None),
        Decision::Shrink { a, b } => (AdaptKind::Shrink, a, b, Absorb::Shrink),
        Decision::Stretch { a, b } => (AdaptKind::Stretch, a, b, Absorb::Stretch),
    };
    let old = *state.domain();
    let new = old.with_bounds(a, b)?;
    let (row_residuals, rank_deficient) = state.refit_rows(&new, cfg.refit_mode, fitters)?;
    state.histogram.refit(new, absorb)?;
    Ok(Some(AdaptEvent {
        kind,
        old,
        new,
        row_residuals,
        rank_deficient,
        degenerate: false,
    }))
}

/// Degenerate batches are widened by this much on each side.
pub const DEGENERATE_HALF_WIDTH: f64 = 1e-6;

/// Manual baseline: the domain becomes the batch range, coefficients are
/// refit and the histogram is rebuilt from the batch alone.
pub fn manual_adapt(
    state: &mut FeatureState,
    batch: &[f64],
    cfg: &AdaptConfig,
    fitters: &mut FitterCache,
) -> Result<AdaptEvent> {
    if batch.is_empty() {
        return Err(KanError::Data("manual adapt needs a non-empty batch".into()));
    }
    if batch.iter().any(|x| !x.is_finite()) {
        return Err(KanError::Data("non-finite value in manual adapt batch".into()));
    }
    let lo = batch.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = batch.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let degenerate = !(hi > lo);
    let (lo, hi) = if degenerate {
        (lo - DEGENERATE_HALF_WIDTH, hi + DEGENERATE_HALF_WIDTH)
    } else {
        (lo, hi)
    };
    let old = *state.domain();
    let new = old.with_bounds(lo, hi)?;
    let (row_residuals, rank_deficient) = state.refit_rows(&new, cfg.refit_mode, fitters)?;
    state.histogram = FeatureHistogram::from_batch(new, state.histogram.alpha, batch)?;
    Ok(AdaptEvent {
        kind: AdaptKind::Manual,
        old,
        new,
        row_residuals,
        rank_deficient,
        degenerate,
    })
}
