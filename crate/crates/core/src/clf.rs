//! Control Lyapunov functions for the planar system
//! `x1' = x2^3 + u`, `x2' = -x1^3`: training losses, Sontag's controller,
//! RK4 closed-loop simulation and conformal statistics on final distances.

use ndarray::{Array1, Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Uniform};
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::exec::Exec;
use crate::network::AdaptKanNet;
use crate::optim::{adam_step, lr_at, AdamState, Optimizer};

pub type State = [f64; 2];

/// Drift of the uncontrolled system.
#[inline]
pub fn drift(x: State) -> State {
    [x[1] * x[1] * x[1], -x[0] * x[0] * x[0]]
}

/// Control direction.
pub const G: State = [1.0, 0.0];

#[inline]
pub fn xdot(x: State, u: f64) -> State {
    let f = drift(x);
    [f[0] + G[0] * u, f[1] + G[1] * u]
}

#[inline]
pub fn norm(x: State) -> f64 {
    x[0].hypot(x[1])
}

/// Quantity conserved by the uncontrolled flow.
pub fn quartic_energy(x: State) -> f64 {
    x[0].powi(4) + x[1].powi(4)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputMode {
    /// `V` is the scalar network output.
    #[default]
    Direct,
    /// `V = 0.5 * |f(x)|^2` over all outputs.
    SquaredNorm,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClfLossConfig {
    /// Weights of the origin, `L_fV`, `L_gV`, bowl and positivity terms.
    pub lambda: [f64; 5],
    /// Threshold above which `L_gV` counts as large.
    pub tau: f64,
    pub k1: f64,
    pub k2: f64,
    pub eps: f64,
    pub output_mode: OutputMode,
}

impl Default for ClfLossConfig {
    fn default() -> Self {
        ClfLossConfig {
            lambda: [10.0, 0.1, 1.0, 1.0, 1.0],
            tau: 0.1,
            k1: 0.001,
            k2: 10.0,
            eps: 1e-8,
            output_mode: OutputMode::Direct,
        }
    }
}

impl ClfLossConfig {
    pub fn validate(&self) -> Result<()> {
        if self.lambda.iter().any(|l| !(*l >= 0.0)) {
            return Err(KanError::Config("loss weights must be >= 0".into()));
        }
        if !(self.k1 < self.k2) || !(self.k1 >= 0.0) {
            return Err(KanError::Config(format!(
                "need 0 <= k1 < k2, got k1={} k2={}",
                self.k1, self.k2
            )));
        }
        if !(self.tau >= 0.0 && self.eps >= 0.0) {
            return Err(KanError::Config("tau and eps must be >= 0".into()));
        }
        Ok(())
    }
}

/// Loss terms with gradients of the total with respect to each sample's
/// `V`, `L_fV`, `L_gV` and to `V` at the origin.
#[derive(Debug, Clone, PartialEq)]
pub struct ClfLosses {
    pub origin: f64,
    pub bowl: f64,
    pub f: f64,
    pub g: f64,
    pub pos: f64,
    pub total: f64,
    pub d_v: Vec<f64>,
    pub d_lfv: Vec<f64>,
    pub d_lgv: Vec<f64>,
    pub d_v0: f64,
}

#[inline]
fn step(v: f64) -> f64 {
    if v > 0.0 {
        1.0
    } else {
        0.0
    }
}

/// The five loss terms on a batch. `x` gives the states, `v`, `lfv`, `lgv`
/// the candidate's value and Lie derivatives there, `v0` its value at the
/// origin.
pub fn clf_losses(
    x: &[State],
    v: &[f64],
    lfv: &[f64],
    lgv: &[f64],
    v0: f64,
    cfg: &ClfLossConfig,
) -> Result<ClfLosses> {
    let n = x.len();
    if v.len() != n || lfv.len() != n || lgv.len() != n {
        return Err(KanError::shape(n, format!("{}/{}/{}", v.len(), lfv.len(), lgv.len())));
    }
    if n == 0 {
        return Err(KanError::Data("empty batch".into()));
    }
    let inv = 1.0 / n as f64;
    let [l1, l2, l3, l4, l5] = cfg.lambda;
    let (mut bowl, mut lf, mut lg, mut pos) = (0.0, 0.0, 0.0, 0.0);
    let mut d_v = vec![0.0; n];
    let mut d_lfv = vec![0.0; n];
    let mut d_lgv = vec![0.0; n];
    for i in 0..n {
        let r = norm(x[i]);
        let lower = cfg.k1 * r - v[i];
        let upper = v[i] - cfg.k2 * r;
        bowl += lower.max(0.0) + upper.max(0.0);
        d_v[i] += l4 * inv * (step(upper) - step(lower));

        let m = if lgv[i] > cfg.tau { 1.0 } else { 0.0 };
        lf += m * (-lfv[i]).max(0.0) + (1.0 - m) * lfv[i].max(0.0);
        d_lfv[i] = l2 * inv * (-m * step(-lfv[i]) + (1.0 - m) * step(lfv[i]));

        let shifted = lgv[i] + cfg.eps;
        let gap = cfg.tau - shifted.abs();
        lg += (1.0 - m) * gap.max(0.0);
        d_lgv[i] = l3 * inv * (1.0 - m) * step(gap) * -shifted.signum();

        pos += (-v[i]).max(0.0);
        d_v[i] -= l5 * inv * step(-v[i]);
    }
    let (bowl, f, g, pos) = (bowl * inv, lf * inv, lg * inv, pos * inv);
    let origin = v0 * v0;
    Ok(ClfLosses {
        origin,
        bowl,
        f,
        g,
        pos,
        total: l1 * origin + l2 * f + l3 * g + l4 * bowl + l5 * pos,
        d_v,
        d_lfv,
        d_lgv,
        d_v0: 2.0 * l1 * v0,
    })
}

/// `-(LfV + sqrt(LfV^2 + LgV^4)) / LgV`, or 0 when `|LgV| <= eps`.
pub fn sontag_control(lfv: f64, lgv: f64, eps: f64) -> f64 {
    if lgv.abs() > eps {
        -(lfv + (lfv * lfv + lgv.powi(4)).sqrt()) / lgv
    } else {
        0.0
    }
}

/// `V = 0.5 (x1^2 + x2^2 + (x1 - x2)^2)` with its gradient.
pub fn analytical_clf(x: State) -> (f64, State) {
    let d = x[0] - x[1];
    (
        0.5 * (x[0] * x[0] + x[1] * x[1] + d * d),
        [2.0 * x[0] - x[1], 2.0 * x[1] - x[0]],
    )
}

/// Lie derivatives from a gradient.
#[inline]
pub fn lie(x: State, grad: State) -> (f64, f64) {
    let f = drift(x);
    (grad[0] * f[0] + grad[1] * f[1], grad[0] * G[0] + grad[1] * G[1])
}

/// Anything that can supply `V`, `L_fV` and `L_gV` for a batch of states.
pub trait Lyapunov: Sync {
    /// Returns `(V, LfV, LgV)` per state.
    fn eval_batch(&self, xs: &[State]) -> Result<Vec<(f64, f64, f64)>>;
}

#[derive(Debug, Clone, Copy, Default)]
pub struct Analytical;

impl Lyapunov for Analytical {
    fn eval_batch(&self, xs: &[State]) -> Result<Vec<(f64, f64, f64)>> {
        Ok(xs
            .iter()
            .map(|&x| {
                let (v, g) = analytical_clf(x);
                let (lf, lg) = lie(x, g);
                (v, lf, lg)
            })
            .collect())
    }
}

/// A network-backed candidate.
#[derive(Debug, Clone)]
pub struct NetClf {
    pub net: AdaptKanNet,
    pub mode: OutputMode,
}

impl NetClf {
    pub fn new(net: AdaptKanNet, mode: OutputMode) -> Result<Self> {
        if net.n_inputs() != 2 {
            return Err(KanError::shape("2 inputs", net.n_inputs()));
        }
        if mode == OutputMode::Direct && net.n_outputs() != 1 {
            return Err(KanError::shape("1 output in direct mode", net.n_outputs()));
        }
        Ok(NetClf { net, mode })
    }
}

fn states_to_array(xs: &[State]) -> Array2<f64> {
    Array2::from_shape_fn((xs.len(), 2), |(i, j)| xs[i][j])
}

/// Tangent directions `f(x)` and `g` for each state.
fn lie_directions(xs: &[State]) -> [Array2<f64>; 2] {
    [
        Array2::from_shape_fn((xs.len(), 2), |(i, j)| drift(xs[i])[j]),
        Array2::from_shape_fn((xs.len(), 2), |(_, j)| G[j]),
    ]
}

/// `(V, LfV, LgV)` from network outputs and their tangents.
fn combine(mode: OutputMode, y: &Array2<f64>, tf: &Array2<f64>, tg: &Array2<f64>) -> Vec<(f64, f64, f64)> {
    (0..y.nrows())
        .map(|i| match mode {
            OutputMode::Direct => (y[[i, 0]], tf[[i, 0]], tg[[i, 0]]),
            OutputMode::SquaredNorm => {
                let (mut v, mut lf, mut lg) = (0.0, 0.0, 0.0);
                for k in 0..y.ncols() {
                    v += 0.5 * y[[i, k]] * y[[i, k]];
                    lf += y[[i, k]] * tf[[i, k]];
                    lg += y[[i, k]] * tg[[i, k]];
                }
                (v, lf, lg)
            }
        })
        .collect()
}

impl Lyapunov for NetClf {
    fn eval_batch(&self, xs: &[State]) -> Result<Vec<(f64, f64, f64)>> {
        let x = states_to_array(xs);
        let c = self.net.forward_cached(x.view(), &lie_directions(xs))?;
        Ok(combine(self.mode, &c.output, &c.output_tangents[0], &c.output_tangents[1]))
    }
}

/// `V` and `dV/dx` for each row of `x` through one backward pass.
pub fn lyapunov_value_and_grad(
    net: &AdaptKanNet,
    x: ArrayView2<f64>,
    mode: OutputMode,
) -> Result<(Array1<f64>, Array2<f64>)> {
    let c = net.forward_cached(x, &[])?;
    let (v, seed) = match mode {
        OutputMode::Direct => {
            if net.n_outputs() != 1 {
                return Err(KanError::shape("1 output in direct mode", net.n_outputs()));
            }
            (c.output.column(0).to_owned(), Array2::ones(c.output.dim()))
        }
        OutputMode::SquaredNorm => (
            c.output.rows().into_iter().map(|r| 0.5 * r.dot(&r)).collect(),
            c.output.clone(),
        ),
    };
    let (_, gx) = net.backward(&c, seed.view(), &[], 0.0)?;
    Ok((v, gx))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub horizon: f64,
    pub dt: f64,
    /// Threshold below which `L_gV` is treated as zero by the controller.
    pub eps: f64,
    pub record_path: bool,
}

impl Default for SimConfig {
    fn default() -> Self {
        SimConfig {
            horizon: 10.0,
            dt: 0.01,
            eps: 1e-8,
            record_path: false,
        }
    }
}

impl SimConfig {
    pub fn steps(&self) -> usize {
        (self.horizon / self.dt).round() as usize
    }

    fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0 && self.horizon >= 0.0 && self.dt.is_finite() && self.horizon.is_finite()) {
            return Err(KanError::Config(format!(
                "need dt > 0 and horizon >= 0, got dt={} horizon={}",
                self.dt, self.horizon
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub start: State,
    pub end: State,
    /// Every state including the start when paths are recorded.
    pub path: Vec<State>,
    /// `V` at every state when paths are recorded.
    pub values: Vec<f64>,
    pub failed: bool,
}

impl Trajectory {
    /// Final distance to the origin; infinite for failed runs.
    pub fn distance(&self) -> f64 {
        if self.failed {
            f64::INFINITY
        } else {
            norm(self.end)
        }
    }
}

/// Closed-loop vector field for a batch of states.
/// Rows that cannot be evaluated (a diverged stage state, an overflow inside
/// the candidate, or a non-finite candidate output) get a NaN field, which
/// fails only that trajectory.
fn field(clf: &dyn Lyapunov, xs: &[State], eps: f64) -> Result<(Vec<State>, Vec<f64>)> {
    let finite = |x: &State| x.iter().chain(&drift(*x)).all(|v| v.is_finite());
    let ok: Vec<bool> = xs.iter().map(finite).collect();
    let safe: Vec<State> = xs.iter().zip(&ok).map(|(&x, &o)| if o { x } else { [0.0; 2] }).collect();
    let nan = (f64::NAN, f64::NAN, f64::NAN);
    let vals = match clf.eval_batch(&safe) {
        Ok(v) => v,
        Err(e) if e.is_numerical() => safe
            .iter()
            .map(|x| clf.eval_batch(std::slice::from_ref(x)).map_or(nan, |v| v[0]))
            .collect(),
        Err(e) => return Err(e),
    };
    Ok(xs
        .iter()
        .zip(&vals)
        .zip(&ok)
        .map(|((&x, &(v, lf, lg)), &o)| {
            if o && lf.is_finite() && lg.is_finite() {
                (xdot(x, sontag_control(lf, lg, eps)), v)
            } else {
                ([f64::NAN; 2], f64::NAN)
            }
        })
        .unzip())
}

/// RK4 with the controller recomputed at every stage; all starts advance in
/// lockstep. A trajectory whose state turns non-finite stops and is flagged.
pub fn simulate_batch(starts: &[State], clf: &dyn Lyapunov, cfg: &SimConfig) -> Result<Vec<Trajectory>> {
    cfg.validate()?;
    let n = starts.len();
    let h = cfg.dt;
    let mut x: Vec<State> = starts.to_vec();
    let mut out: Vec<Trajectory> = starts
        .iter()
        .map(|&s| Trajectory {
            start: s,
            end: s,
            path: if cfg.record_path { vec![s] } else { Vec::new() },
            values: Vec::new(),
            failed: !(s[0].is_finite() && s[1].is_finite()),
        })
        .collect();
    let mut failed: Vec<bool> = out.iter().map(|t| t.failed).collect();
    let shift = |x: &[State], k: &[State], c: f64| -> Vec<State> {
        x.iter()
            .zip(k)
            .map(|(a, b)| [a[0] + c * b[0], a[1] + c * b[1]])
            .collect()
    };
    for _ in 0..cfg.steps() {
        let (k1, v) = field(clf, &x, cfg.eps)?;
        if cfg.record_path {
            for (t, vi) in out.iter_mut().zip(&v) {
                t.values.push(*vi);
            }
        }
        let (k2, _) = field(clf, &shift(&x, &k1, h / 2.0), cfg.eps)?;
        let (k3, _) = field(clf, &shift(&x, &k2, h / 2.0), cfg.eps)?;
        let (k4, _) = field(clf, &shift(&x, &k3, h), cfg.eps)?;
        for i in 0..n {
            if failed[i] {
                continue;
            }
            let next = [
                x[i][0] + h / 6.0 * (k1[i][0] + 2.0 * k2[i][0] + 2.0 * k3[i][0] + k4[i][0]),
                x[i][1] + h / 6.0 * (k1[i][1] + 2.0 * k2[i][1] + 2.0 * k3[i][1] + k4[i][1]),
            ];
            if next[0].is_finite() && next[1].is_finite() {
                x[i] = next;
                if cfg.record_path {
                    out[i].path.push(next);
                }
            } else {
                failed[i] = true;
            }
        }
    }
    if cfg.record_path {
        let (_, v) = field(clf, &x, cfg.eps)?;
        for (t, vi) in out.iter_mut().zip(v) {
            t.values.push(vi);
        }
    }
    for i in 0..n {
        out[i].end = x[i];
        out[i].failed = failed[i];
    }
    Ok(out)
}

pub fn simulate(start: State, clf: &dyn Lyapunov, cfg: &SimConfig) -> Result<Trajectory> {
    Ok(simulate_batch(&[start], clf, cfg)?.remove(0))
}

/// Uncontrolled RK4 path, for checking the integrator.
pub fn simulate_uncontrolled(start: State, cfg: &SimConfig) -> Vec<State> {
    let h = cfg.dt;
    let mut x = start;
    let mut path = vec![x];
    for _ in 0..cfg.steps() {
        let k1 = drift(x);
        let k2 = drift([x[0] + h / 2.0 * k1[0], x[1] + h / 2.0 * k1[1]]);
        let k3 = drift([x[0] + h / 2.0 * k2[0], x[1] + h / 2.0 * k2[1]]);
        let k4 = drift([x[0] + h * k3[0], x[1] + h * k3[1]]);
        x = [
            x[0] + h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0]),
            x[1] + h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1]),
        ];
        path.push(x);
    }
    path
}

/// Trajectories per work unit when simulating many starts.
pub const SIM_CHUNK: usize = 32;

/// Simulates many starts, split into fixed chunks run under `exec`.
pub fn simulate_many(starts: &[State], clf: &dyn Lyapunov, cfg: &SimConfig, exec: Exec) -> Result<Vec<Trajectory>> {
    let parts = exec.map_chunks(starts.len(), SIM_CHUNK, |s, e| simulate_batch(&starts[s..e], clf, cfg));
    let mut out = Vec::with_capacity(starts.len());
    for p in parts {
        out.extend(p?);
    }
    Ok(out)
}

/// `n` starts uniform on `[-r, r]^2`.
pub fn uniform_starts(n: usize, r: f64, seed: u64) -> Vec<State> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let u = Uniform::new_inclusive(-r, r).expect("r >= 0");
    (0..n).map(|_| [u.sample(&mut rng), u.sample(&mut rng)]).collect()
}

/// Sorted final distances of `K` trajectories.
#[derive(Debug, Clone, PartialEq)]
pub struct ConformalReport {
    sorted: Vec<f64>,
}

impl ConformalReport {
    pub fn new(mut distances: Vec<f64>) -> Result<Self> {
        if distances.iter().any(|d| d.is_nan()) {
            return Err(KanError::Data("NaN distance".into()));
        }
        distances.sort_by(f64::total_cmp);
        Ok(ConformalReport { sorted: distances })
    }

    pub fn from_trajectories(ts: &[Trajectory]) -> Result<Self> {
        Self::new(ts.iter().map(Trajectory::distance).collect())
    }

    pub fn k(&self) -> usize {
        self.sorted.len()
    }

    pub fn distances(&self) -> &[f64] {
        &self.sorted
    }

    /// `R^(p)` with `p = ceil((K+1)(1-delta))`; infinite when `p > K`.
    pub fn quantile(&self, delta: f64) -> f64 {
        let k = self.k();
        // guard against products like 19.000000000000004
        let p = (((k + 1) as f64) * (1.0 - delta) - 1e-9).ceil().max(1.0) as usize;
        if p > k {
            f64::INFINITY
        } else {
            self.sorted[p - 1]
        }
    }

    /// `|{R <= c}| / (K + 1)`.
    pub fn confidence(&self, c: f64) -> f64 {
        let count = self.sorted.partition_point(|&r| r <= c);
        count as f64 / (self.k() + 1) as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClfTrainPlan {
    pub n_train: usize,
    pub n_test: usize,
    /// Half-width of the square the states are drawn from.
    pub radius: f64,
    pub steps: usize,
    pub lr: f64,
    pub poly_decay: bool,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub loss: ClfLossConfig,
}

impl Default for ClfTrainPlan {
    fn default() -> Self {
        ClfTrainPlan {
            n_train: 8000,
            n_test: 2000,
            radius: 3.0,
            steps: 2000,
            lr: 1e-2,
            poly_decay: true,
            optimizer: Optimizer::Adam,
            weight_decay: 0.0,
            batch_size: 256,
            seed: 0,
            loss: ClfLossConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ClfHistory {
    pub train_loss: Vec<f64>,
    pub test_loss: f64,
    pub adapt_events: usize,
    pub failed: bool,
}

fn batch_losses(net: &AdaptKanNet, xs: &[State], cfg: &ClfLossConfig) -> Result<ClfLosses> {
    let vals = NetClf {
        net: net.clone(),
        mode: cfg.output_mode,
    }
    .eval_batch(xs)?;
    let v0 = net.forward(Array2::zeros((1, 2)).view())?;
    let v0 = match cfg.output_mode {
        OutputMode::Direct => v0[[0, 0]],
        OutputMode::SquaredNorm => 0.5 * v0.row(0).dot(&v0.row(0)),
    };
    let (v, (lf, lg)): (Vec<f64>, (Vec<f64>, Vec<f64>)) = vals.into_iter().map(|(a, b, c)| (a, (b, c))).unzip();
    clf_losses(xs, &v, &lf, &lg, v0, cfg)
}

/// Trains a candidate on uniformly sampled states with Adam.
pub fn train_clf(net: &mut AdaptKanNet, plan: &ClfTrainPlan) -> Result<ClfHistory> {
    plan.loss.validate()?;
    if plan.batch_size == 0 || plan.n_train == 0 || plan.steps == 0 {
        return Err(KanError::Config("batch_size, n_train and steps must be > 0".into()));
    }
    NetClf::new(net.clone(), plan.loss.output_mode)?;
    let train = uniform_starts(plan.n_train, plan.radius, plan.seed);
    let test = uniform_starts(plan.n_test, plan.radius, plan.seed.wrapping_add(1));
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed.wrapping_add(2));
    let pick = Uniform::new(0, plan.n_train).expect("n_train > 0");
    let mut state = AdamState::new(net.n_params());
    let mut hist = ClfHistory::default();
    let mode = plan.loss.output_mode;

    for t in 0..plan.steps {
        let xs: Vec<State> = (0..plan.batch_size).map(|_| train[pick.sample(&mut rng)]).collect();
        let x = states_to_array(&xs);
        let dirs = lie_directions(&xs);
        let (cache, events) = match net.forward_train(x.view(), &dirs, t) {
            Ok(r) => r,
            Err(e) if e.is_numerical() => {
                hist.failed = true;
                break;
            }
            Err(e) => return Err(e),
        };
        hist.adapt_events += events.len();
        let (y, tf, tg) = (&cache.output, &cache.output_tangents[0], &cache.output_tangents[1]);
        let vals = combine(mode, y, tf, tg);
        let origin = net.forward_cached(Array2::zeros((1, 2)).view(), &[])?;
        let v0 = match mode {
            OutputMode::Direct => origin.output[[0, 0]],
            OutputMode::SquaredNorm => 0.5 * origin.output.row(0).dot(&origin.output.row(0)),
        };
        let v: Vec<f64> = vals.iter().map(|t| t.0).collect();
        let lf: Vec<f64> = vals.iter().map(|t| t.1).collect();
        let lg: Vec<f64> = vals.iter().map(|t| t.2).collect();
        let loss = clf_losses(&xs, &v, &lf, &lg, v0, &plan.loss)?;
        hist.train_loss.push(loss.total);
        if !loss.total.is_finite() {
            hist.failed = true;
            break;
        }
        // chain the per-sample loss gradients onto outputs and tangents
        let m = net.n_outputs();
        let (mut gy, mut gf, mut gg) = (Array2::zeros((xs.len(), m)), Array2::zeros((xs.len(), m)), Array2::zeros((xs.len(), m)));
        for i in 0..xs.len() {
            match mode {
                OutputMode::Direct => {
                    gy[[i, 0]] = loss.d_v[i];
                    gf[[i, 0]] = loss.d_lfv[i];
                    gg[[i, 0]] = loss.d_lgv[i];
                }
                OutputMode::SquaredNorm => {
                    for k in 0..m {
                        gy[[i, k]] = loss.d_v[i] * y[[i, k]] + loss.d_lfv[i] * tf[[i, k]] + loss.d_lgv[i] * tg[[i, k]];
                        gf[[i, k]] = loss.d_lfv[i] * y[[i, k]];
                        gg[[i, k]] = loss.d_lgv[i] * y[[i, k]];
                    }
                }
            }
        }
        let (grads, _) = net.backward(&cache, gy.view(), &[gf, gg], 0.0)?;
        let mut g = grads.flatten(net);
        let seed0 = match mode {
            OutputMode::Direct => Array2::from_elem((1, 1), loss.d_v0),
            OutputMode::SquaredNorm => origin.output.mapv(|o| o * loss.d_v0),
        };
        let (g0, _) = net.backward(&origin, seed0.view(), &[], 0.0)?;
        g.iter_mut().zip(g0.flatten(net)).for_each(|(a, b)| *a += b);

        let mut p = net.params();
        if state.m.len() != p.len() {
            state = AdamState::new(p.len());
        }
        let lr = lr_at(plan.lr, t, plan.steps, plan.poly_decay);
        adam_step(&mut p, &g, &mut state, plan.optimizer, lr, plan.weight_decay)?;
        if p.iter().any(|v| !v.is_finite()) {
            hist.failed = true;
            break;
        }
        net.set_params(&p)?;
    }
    hist.test_loss = if plan.n_test > 0 {
        batch_losses(net, &test, &plan.loss).map(|l| l.total).unwrap_or(f64::NAN)
    } else {
        f64::NAN
    };
    Ok(hist)
}
