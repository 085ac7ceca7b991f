//! Uniform cubic B-spline activations in closed (non-recursive) form.
//!
//! An activation on a grid domain `[a, b]` with `omega` uniform intervals of
//! width `d` owns `omega + 3` coefficients. For an input `z` the active
//! interval is `idx = min(floor((z - a) / d), omega - 1)` and the local
//! coordinate is `theta = (z - a) / d - idx`. The value is the window
//! `w[idx..idx + 4]` times [`CUBIC_BASIS`] times `[theta^3, theta^2, theta, 1]`.
//!
//! The same matrix is used on every interval, including the ones at the edge
//! of the grid, so the leading and trailing coefficients act like the
//! coefficients of a uniform spline whose knots continue past `[a, b]`.
//! Outside the domain `theta` is clamped to `[0, 1]`, which extends every
//! activation as a constant.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};

/// Spline degree. Only cubic splines are implemented.
pub const DEGREE: usize = 3;

/// Basis matrix of the uniform cubic B-spline. Rows index the four active
/// coefficients, columns the powers `theta^3, theta^2, theta, 1`.
pub const CUBIC_BASIS: [[f64; 4]; 4] = [
    [-2.0 / 12.0, 6.0 / 12.0, -6.0 / 12.0, 2.0 / 12.0],
    [6.0 / 12.0, -12.0 / 12.0, 0.0, 8.0 / 12.0],
    [-6.0 / 12.0, 6.0 / 12.0, 6.0 / 12.0, 2.0 / 12.0],
    [2.0 / 12.0, 0.0, 0.0, 0.0],
];

/// Samples per interval used by the least-squares refit.
pub const LSTSQ_SAMPLES_PER_INTERVAL: usize = 10;

/// Returns the basis matrix for degree `k`.
pub fn basis_matrix(k: usize) -> Result<[[f64; 4]; 4]> {
    if k == DEGREE {
        Ok(CUBIC_BASIS)
    } else {
        Err(KanError::UnsupportedDegree(k))
    }
}

/// A uniform grid over `[a, b]` with `omega` intervals.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridDomain {
    pub a: f64,
    pub b: f64,
    pub omega: usize,
    #[serde(default = "default_degree")]
    pub k: usize,
}

fn default_degree() -> usize {
    DEGREE
}

impl GridDomain {
    pub fn new(a: f64, b: f64, omega: usize) -> Result<Self> {
        Self::with_degree(a, b, omega, DEGREE)
    }

    pub fn with_degree(a: f64, b: f64, omega: usize, k: usize) -> Result<Self> {
        if k != DEGREE {
            return Err(KanError::UnsupportedDegree(k));
        }
        let dom = GridDomain { a, b, omega, k };
        dom.validate()?;
        Ok(dom)
    }

    pub fn validate(&self) -> Result<()> {
        if self.k != DEGREE {
            return Err(KanError::UnsupportedDegree(self.k));
        }
        let ok = self.a.is_finite()
            && self.b.is_finite()
            && self.a < self.b
            && self.omega >= 1
            && self.width() > 0.0;
        if ok {
            Ok(())
        } else {
            Err(KanError::InvalidDomain {
                a: self.a,
                b: self.b,
                omega: self.omega,
            })
        }
    }

    /// Interval width `d = (b - a) / omega`.
    #[inline]
    pub fn width(&self) -> f64 {
        (self.b - self.a) / self.omega as f64
    }

    /// Number of coefficients per activation, `omega + k`.
    #[inline]
    pub fn n_weights(&self) -> usize {
        self.omega + self.k
    }

    /// Same interval count on a new `[a, b]`.
    pub fn with_bounds(&self, a: f64, b: f64) -> Result<Self> {
        Self::with_degree(a, b, self.omega, self.k)
    }

    #[inline]
    pub fn contains(&self, z: f64) -> bool {
        z >= self.a && z <= self.b
    }

    /// Interval index and clamped local coordinate used for evaluation.
    #[inline]
    pub fn locate(&self, z: f64) -> (usize, f64) {
        // exact at and beyond b, where (b - a) / d can round below omega
        if z >= self.b {
            return (self.omega - 1, 1.0);
        }
        let t = (z - self.a) / self.width();
        let last = (self.omega - 1) as f64;
        let idx = t.floor().clamp(0.0, last);
        (idx as usize, (t - idx).clamp(0.0, 1.0))
    }

    /// Index of the interval containing `z`, clamped to `[0, omega - 1]`.
    #[inline]
    pub fn bin_index(&self, z: f64) -> usize {
        self.locate(z).0
    }

    /// Fractional position of `z` inside its interval. Returns 1 at `z = b`
    /// and the clamped value (0 or 1) outside the domain.
    #[inline]
    pub fn interp_value(&self, z: f64) -> f64 {
        self.locate(z).1
    }

    /// Knot `i` of the uniformly extended knot vector, `a + (i - k) d`.
    #[inline]
    pub fn knot(&self, i: usize) -> f64 {
        self.a + (i as f64 - self.k as f64) * self.width()
    }

    /// Left edge of bin `i`.
    #[inline]
    pub fn edge(&self, i: usize) -> f64 {
        if i == self.omega {
            self.b
        } else {
            self.a + i as f64 * self.width()
        }
    }

    /// Center of bin `i`.
    #[inline]
    pub fn center(&self, i: usize) -> f64 {
        self.a + (i as f64 + 0.5) * self.width()
    }
}

/// Basis values `M * [theta^3, theta^2, theta, 1]`.
#[inline]
pub fn basis_values(theta: f64) -> [f64; 4] {
    let powers = [theta * theta * theta, theta * theta, theta, 1.0];
    mat_vec(&powers)
}

/// Derivative of [`basis_values`] with respect to `theta`.
#[inline]
pub fn basis_d1(theta: f64) -> [f64; 4] {
    mat_vec(&[3.0 * theta * theta, 2.0 * theta, 1.0, 0.0])
}

/// Second derivative of [`basis_values`] with respect to `theta`.
#[inline]
pub fn basis_d2(theta: f64) -> [f64; 4] {
    mat_vec(&[6.0 * theta, 2.0, 0.0, 0.0])
}

#[inline]
fn mat_vec(p: &[f64; 4]) -> [f64; 4] {
    let m = &CUBIC_BASIS;
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2] + m[0][3] * p[3],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2] + m[1][3] * p[3],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2] + m[2][3] * p[3],
        m[3][0] * p[0] + m[3][1] * p[1] + m[3][2] * p[2] + m[3][3] * p[3],
    ]
}

#[inline]
fn window_dot(w: &[f64], idx: usize, basis: &[f64; 4]) -> f64 {
    let win = &w[idx..idx + 4];
    win[0] * basis[0] + win[1] * basis[1] + win[2] * basis[2] + win[3] * basis[3]
}

/// True when `z` lies strictly outside `[a, b]`, where the activation is constant.
#[inline]
fn outside(z: f64, dom: &GridDomain) -> bool {
    z < dom.a || z > dom.b
}

/// Evaluates the activation with coefficients `w` at `z`.
#[inline]
pub fn eval_activation(z: f64, w: &[f64], dom: &GridDomain) -> f64 {
    debug_assert_eq!(w.len(), dom.n_weights());
    let (idx, theta) = dom.locate(z);
    window_dot(w, idx, &basis_values(theta))
}

/// Derivative of the activation with respect to `z`; right limit at knots,
/// zero outside the domain.
#[inline]
pub fn activation_dz(z: f64, w: &[f64], dom: &GridDomain) -> f64 {
    if outside(z, dom) {
        return 0.0;
    }
    let (idx, theta) = dom.locate(z);
    window_dot(w, idx, &basis_d1(theta)) / dom.width()
}

/// Second derivative with respect to `z`.
#[inline]
pub fn activation_d2z(z: f64, w: &[f64], dom: &GridDomain) -> f64 {
    if outside(z, dom) {
        return 0.0;
    }
    let (idx, theta) = dom.locate(z);
    let d = dom.width();
    window_dot(w, idx, &basis_d2(theta)) / (d * d)
}

/// The four nonzero entries of the gradient of an activation with respect to
/// its coefficients, starting at `offset`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActiveBasis {
    pub offset: usize,
    pub values: [f64; 4],
}

impl ActiveBasis {
    /// Expands to a dense vector of length `n`.
    pub fn to_dense(&self, n: usize) -> Vec<f64> {
        let mut out = vec![0.0; n];
        out[self.offset..self.offset + 4].copy_from_slice(&self.values);
        out
    }
}

/// Gradient of the activation at `z` with respect to its coefficients.
#[inline]
pub fn activation_dw(z: f64, dom: &GridDomain) -> ActiveBasis {
    let (offset, theta) = dom.locate(z);
    ActiveBasis {
        offset,
        values: basis_values(theta),
    }
}

/// Greville abscissae of the `omega + k` coefficients: the mean of `k`
/// consecutive knots of the uniformly extended knot vector.
pub fn greville_abscissae(dom: &GridDomain) -> Vec<f64> {
    (0..dom.n_weights())
        .map(|i| {
            let sum: f64 = (1..=dom.k).map(|s| dom.knot(i + s)).sum();
            sum / dom.k as f64
        })
        .collect()
}

/// Result of a least-squares refit.
#[derive(Debug, Clone, PartialEq)]
pub struct RefitOutcome {
    pub weights: Vec<f64>,
    /// Largest absolute deviation between the new and old activation on the
    /// check grid (fit samples, their midpoints and the old knots).
    pub max_residual: f64,
    /// Set when the normal equations were numerically singular and the
    /// minimum-norm solution was used.
    pub rank_deficient: bool,
}

/// Least-squares projector onto the spline space of a fixed interval count.
///
/// The design matrix only depends on `omega` once samples are expressed in
/// interval units, so one pseudo-inverse serves every domain.
#[derive(Debug, Clone)]
pub struct LstsqFitter {
    omega: usize,
    /// Sample positions in interval units, `0..=omega`.
    samples: Vec<f64>,
    pinv: DMatrix<f64>,
    rank_deficient: bool,
}

impl LstsqFitter {
    pub fn new(omega: usize) -> Result<Self> {
        if omega == 0 {
            return Err(KanError::InvalidDomain {
                a: 0.0,
                b: 1.0,
                omega,
            });
        }
        let n_samples = LSTSQ_SAMPLES_PER_INTERVAL * omega + 1;
        let n_weights = omega + DEGREE;
        let unit = GridDomain {
            a: 0.0,
            b: omega as f64,
            omega,
            k: DEGREE,
        };
        let samples: Vec<f64> = (0..n_samples)
            .map(|s| s as f64 / LSTSQ_SAMPLES_PER_INTERVAL as f64)
            .collect();
        let mut design = DMatrix::<f64>::zeros(n_samples, n_weights);
        for (r, &u) in samples.iter().enumerate() {
            let basis = activation_dw(u, &unit);
            for (c, v) in basis.values.iter().enumerate() {
                design[(r, basis.offset + c)] = *v;
            }
        }
        let svd = design.svd(true, true);
        let smax = svd.singular_values.max();
        let smin = svd.singular_values.min();
        let rank_deficient = !(smin > smax * 1e-12);
        let pinv = svd
            .pseudo_inverse(smax * 1e-12)
            .map_err(|e| KanError::Data(e.to_string()))?;
        Ok(LstsqFitter {
            omega,
            samples,
            pinv,
            rank_deficient,
        })
    }

    pub fn omega(&self) -> usize {
        self.omega
    }

    /// Fits `omega + k` coefficients on `new_dom` to an arbitrary function
    /// sampled on the fit grid.
    pub fn fit_fn(&self, new_dom: &GridDomain, f: impl Fn(f64) -> f64) -> Result<Vec<f64>> {
        if new_dom.omega != self.omega {
            return Err(KanError::shape(
                format!("{} intervals", self.omega),
                format!("{} intervals", new_dom.omega),
            ));
        }
        let d = new_dom.width();
        let y = DVector::from_iterator(
            self.samples.len(),
            self.samples.iter().map(|&u| f(new_dom.a + u * d)),
        );
        Ok((&self.pinv * y).iter().copied().collect())
    }

    /// Refits an activation from `old_dom` onto `new_dom`.
    pub fn refit(
        &self,
        old_weights: &[f64],
        old_dom: &GridDomain,
        new_dom: &GridDomain,
    ) -> Result<RefitOutcome> {
        if old_weights.len() != old_dom.n_weights() {
            return Err(KanError::shape(old_dom.n_weights(), old_weights.len()));
        }
        let weights = self.fit_fn(new_dom, |z| eval_activation(z, old_weights, old_dom))?;
        let max_residual = refit_residual(old_weights, old_dom, &weights, new_dom);
        Ok(RefitOutcome {
            weights,
            max_residual,
            rank_deficient: self.rank_deficient,
        })
    }
}

/// Largest deviation between two activations over `new_dom`.
///
/// The difference is a cubic on every piece between consecutive breakpoints
/// (new knots plus old knots inside the new domain), so the maximum is taken
/// over piece ends and the stationary points of each piece, with the dense
/// check grid added as a guard.
pub fn refit_residual(
    old_weights: &[f64],
    old_dom: &GridDomain,
    new_weights: &[f64],
    new_dom: &GridDomain,
) -> f64 {
    let diff = |z: f64| {
        (eval_activation(z, new_weights, new_dom) - eval_activation(z, old_weights, old_dom)).abs()
    };
    let slope = |z: f64| {
        activation_dz(z, new_weights, new_dom) - activation_dz(z, old_weights, old_dom)
    };
    let mut breaks: Vec<f64> = (0..=new_dom.omega)
        .map(|i| new_dom.edge(i))
        .chain((0..=old_dom.omega).map(|i| old_dom.edge(i)).filter(|z| new_dom.contains(*z)))
        .collect();
    breaks.sort_by(f64::total_cmp);
    breaks.dedup();
    let mut worst = check_grid(old_dom, new_dom).map(diff).fold(0.0, f64::max);
    for w in breaks.windows(2) {
        let (p, q) = (w[0], w[1]);
        let h = q - p;
        if h <= 0.0 {
            continue;
        }
        // quadratic derivative through three interior-safe samples
        let (t0, t1, t2) = (0.05, 0.5, 0.95);
        let (s0, s1, s2) = (slope(p + t0 * h), slope(p + t1 * h), slope(p + t2 * h));
        // Lagrange form in t, expanded to c2 t^2 + c1 t + c0
        let l0 = s0 / ((t0 - t1) * (t0 - t2));
        let l1 = s1 / ((t1 - t0) * (t1 - t2));
        let l2 = s2 / ((t2 - t0) * (t2 - t1));
        let c2 = l0 + l1 + l2;
        let c1 = -(l0 * (t1 + t2) + l1 * (t0 + t2) + l2 * (t0 + t1));
        let c0 = l0 * t1 * t2 + l1 * t0 * t2 + l2 * t0 * t1;
        let mut roots = Vec::with_capacity(2);
        if c2.abs() > 1e-300 {
            let disc = c1 * c1 - 4.0 * c2 * c0;
            if disc >= 0.0 {
                let r = disc.sqrt();
                roots.push((-c1 - r) / (2.0 * c2));
                roots.push((-c1 + r) / (2.0 * c2));
            }
        } else if c1.abs() > 1e-300 {
            roots.push(-c0 / c1);
        }
        worst = worst.max(diff(p)).max(diff(q));
        for t in roots {
            if t > 0.0 && t < 1.0 {
                worst = worst.max(diff(p + t * h));
            }
        }
    }
    worst
}

/// Points where refit residuals are measured: the fit samples, the midpoints
/// between them, and old knots that fall inside the new domain.
fn check_grid<'a>(old: &'a GridDomain, new: &'a GridDomain) -> impl Iterator<Item = f64> + 'a {
    let n = 2 * LSTSQ_SAMPLES_PER_INTERVAL * new.omega;
    let step = (new.b - new.a) / n as f64;
    let dense = (0..=n).map(move |s| new.a + s as f64 * step);
    let knots = (0..=old.omega)
        .map(move |i| old.edge(i))
        .filter(move |z| new.contains(*z));
    dense.chain(knots)
}

/// Least-squares refit of one activation onto a new domain.
pub fn refit_least_squares(
    old_weights: &[f64],
    old_dom: &GridDomain,
    new_dom: &GridDomain,
) -> Result<RefitOutcome> {
    LstsqFitter::new(new_dom.omega)?.refit(old_weights, old_dom, new_dom)
}

/// Approximate refit: treats coefficients as samples at their Greville
/// abscissae and linearly interpolates them at the new abscissae. Queries
/// outside the old abscissae take the nearest end coefficient.
pub fn refit_greville(old_weights: &[f64], old_dom: &GridDomain, new_dom: &GridDomain) -> Vec<f64> {
    let old_g = greville_abscissae(old_dom);
    greville_abscissae(new_dom)
        .into_iter()
        .map(|x| interp_clamped(&old_g, old_weights, x))
        .collect()
}

/// Piecewise-linear interpolation through `(xs, ys)` with `xs` uniformly
/// spaced, clamped to the end values.
fn interp_clamped(xs: &[f64], ys: &[f64], x: f64) -> f64 {
    let n = xs.len();
    if x <= xs[0] {
        return ys[0];
    }
    if x >= xs[n - 1] {
        return ys[n - 1];
    }
    let step = xs[1] - xs[0];
    let i = (((x - xs[0]) / step).floor() as usize).min(n - 2);
    let t = (x - xs[i]) / step;
    ys[i] + t * (ys[i + 1] - ys[i])
}

/// Grid refinement: same `[a, b]`, more intervals, least-squares refit.
pub fn refine_grid(
    old_weights: &[f64],
    old_dom: &GridDomain,
    new_omega: usize,
) -> Result<(RefitOutcome, GridDomain)> {
    if new_omega <= old_dom.omega {
        return Err(KanError::Config(format!(
            "refinement must increase the interval count ({} -> {new_omega})",
            old_dom.omega
        )));
    }
    let new_dom = GridDomain::with_degree(old_dom.a, old_dom.b, new_omega, old_dom.k)?;
    let out = refit_least_squares(old_weights, old_dom, &new_dom)?;
    Ok((out, new_dom))
}
