//! Adam/AdamW, the per-round learning-rate curve and the multi-round
//! regression training loop with grid refinement.

use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{KanError, Result};
use crate::network::AdaptKanNet;
use crate::tasks::{rmse, Dataset};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Optimizer {
    #[default]
    Adam,
    AdamW,
}

pub const BETA1: f64 = 0.9;
pub const BETA2: f64 = 0.999;
pub const EPS: f64 = 1e-8;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(n: usize) -> Self {
        AdamState {
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }
}

/// One bias-corrected Adam step. `Adam` folds `weight_decay` into the
/// gradient as an L2 term; `AdamW` decays the parameters directly.
pub fn adam_step(
    params: &mut [f64],
    grads: &[f64],
    state: &mut AdamState,
    opt: Optimizer,
    lr: f64,
    weight_decay: f64,
) -> Result<()> {
    if grads.len() != params.len() {
        return Err(KanError::shape(params.len(), grads.len()));
    }
    if state.m.len() != params.len() {
        *state = AdamState::new(params.len());
    }
    state.t += 1;
    let c1 = 1.0 - BETA1.powi(state.t as i32);
    let c2 = 1.0 - BETA2.powi(state.t as i32);
    for k in 0..params.len() {
        let mut g = grads[k];
        match opt {
            Optimizer::Adam => g += weight_decay * params[k],
            Optimizer::AdamW => params[k] -= lr * weight_decay * params[k],
        }
        state.m[k] = BETA1 * state.m[k] + (1.0 - BETA1) * g;
        state.v[k] = BETA2 * state.v[k] + (1.0 - BETA2) * g * g;
        let m_hat = state.m[k] / c1;
        let v_hat = state.v[k] / c2;
        params[k] -= lr * m_hat / (v_hat.sqrt() + EPS);
    }
    Ok(())
}

/// Learning rate at step `t` of a round of `steps` steps starting at `lr0`:
/// `lr0 * (1 - 0.9 (t/steps)^2)` with decay, `lr0` without.
pub fn lr_at(lr0: f64, t: usize, steps: usize, decay: bool) -> f64 {
    if !decay || steps == 0 {
        return lr0;
    }
    let r = (t.min(steps) as f64) / steps as f64;
    lr0 * (1.0 - 0.9 * r * r)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Round {
    pub lr: f64,
    pub steps: usize,
    pub omega: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainPlan {
    pub rounds: Vec<Round>,
    pub optimizer: Optimizer,
    pub weight_decay: f64,
    pub poly_decay: bool,
    /// Minibatch size; full batch when absent.
    pub batch_size: Option<usize>,
    pub seed: u64,
    /// Weight of the activation-magnitude penalty.
    pub sparsity: f64,
    /// Record histograms and adapt during training.
    pub record: bool,
}

impl Default for TrainPlan {
    fn default() -> Self {
        TrainPlan {
            rounds: [3, 5, 10, 20, 50]
                .iter()
                .map(|&omega| Round {
                    lr: 1e-2,
                    steps: 2000,
                    omega,
                })
                .collect(),
            optimizer: Optimizer::Adam,
            weight_decay: 0.0,
            poly_decay: true,
            batch_size: None,
            seed: 0,
            sparsity: 0.0,
            record: true,
        }
    }
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.rounds.is_empty() {
            return Err(KanError::Config("plan has no rounds".into()));
        }
        for (i, r) in self.rounds.iter().enumerate() {
            if r.steps == 0 {
                return Err(KanError::Config(format!("round {i}: steps must be > 0")));
            }
            if !(r.lr >= 0.0 && r.lr.is_finite()) {
                return Err(KanError::Config(format!("round {i}: lr must be >= 0, got {}", r.lr)));
            }
            if r.omega == 0 {
                return Err(KanError::Config(format!("round {i}: omega must be > 0")));
            }
            if i > 0 && r.omega < self.rounds[i - 1].omega {
                return Err(KanError::Config(format!(
                    "round {i}: omega {} is smaller than the previous {}",
                    r.omega,
                    self.rounds[i - 1].omega
                )));
            }
        }
        if self.batch_size == Some(0) {
            return Err(KanError::Config("batch_size must be > 0".into()));
        }
        if !(self.weight_decay >= 0.0 && self.sparsity >= 0.0) {
            return Err(KanError::Config("weight_decay and sparsity must be >= 0".into()));
        }
        Ok(())
    }

    pub fn total_steps(&self) -> usize {
        self.rounds.iter().map(|r| r.steps).sum()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoundRecord {
    pub round: usize,
    pub omega: usize,
    pub lr: f64,
    pub train_rmse: f64,
    pub test_rmse: f64,
    pub adapt_events: usize,
    pub fail: bool,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct TrainHistory {
    pub rounds: Vec<RoundRecord>,
    /// Training loss at every step taken.
    pub losses: Vec<f64>,
}

impl TrainHistory {
    /// Lowest finite test RMSE over all rounds.
    pub fn best_test_rmse(&self) -> Option<f64> {
        self.rounds
            .iter()
            .map(|r| r.test_rmse)
            .filter(|v| v.is_finite())
            .min_by(f64::total_cmp)
    }

    pub fn any_fail(&self) -> bool {
        self.rounds.iter().any(|r| r.fail)
    }

    pub fn write_csv(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let mut w = csv::Writer::from_path(path)?;
        for r in &self.rounds {
            w.serialize(r)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// RMSE of the network on a dataset, NaN if evaluation fails.
pub fn evaluate(net: &AdaptKanNet, data: &Dataset) -> f64 {
    match net.forward(data.x.view()) {
        Ok(pred) => rmse(pred.view(), data.y.view()),
        Err(_) => f64::NAN,
    }
}

/// Hook called on the inputs of every step's batch with the global step.
pub type BatchHook<'a> = dyn FnMut(usize, &mut Array2<f64>) + 'a;

pub fn train(net: &mut AdaptKanNet, train: &Dataset, test: &Dataset, plan: &TrainPlan) -> Result<TrainHistory> {
    train_with_hook(net, train, test, plan, &mut |_, _| {})
}

/// Mean squared error training over the plan's rounds. Each round first
/// refines every feature to the round's interval count, then takes its steps.
/// A non-finite loss or activation ends the round and marks it failed.
pub fn train_with_hook(
    net: &mut AdaptKanNet,
    train: &Dataset,
    test: &Dataset,
    plan: &TrainPlan,
    hook: &mut BatchHook<'_>,
) -> Result<TrainHistory> {
    plan.validate()?;
    if train.is_empty() {
        return Err(KanError::Data("empty training set".into()));
    }
    if train.n_features() != net.n_inputs() || train.y.ncols() != net.n_outputs() {
        return Err(KanError::shape(
            format!("{} inputs and {} targets", net.n_inputs(), net.n_outputs()),
            format!("{} and {}", train.n_features(), train.y.ncols()),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    let n = train.len();
    let bs = plan.batch_size.unwrap_or(n).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    let mut cursor = n;
    let mut history = TrainHistory::default();
    let mut state = AdamState::new(net.n_params());
    let mut step = 0usize;

    for (ri, round) in plan.rounds.iter().enumerate() {
        let mut events = net.refine_all(round.omega)?.len();
        if events > 0 {
            state = AdamState::new(net.n_params());
        }
        let mut fail = false;
        for t in 0..round.steps {
            let mut batch = if bs == n {
                train.clone()
            } else {
                if cursor + bs > n {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                let b = train.select(&order[cursor..cursor + bs]);
                cursor += bs;
                b
            };
            hook(step, &mut batch.x);
            let fwd = if plan.record {
                net.forward_train(batch.x.view(), &[], step).map(|(c, ev)| {
                    events += ev.len();
                    c
                })
            } else {
                net.forward_cached(batch.x.view(), &[])
            };
            step += 1;
            let cache = match fwd {
                Ok(c) => c,
                Err(e) if e.is_numerical() => {
                    fail = true;
                    break;
                }
                Err(e) => return Err(e),
            };
            let diff = &cache.output - &batch.y;
            let count = diff.len() as f64;
            let loss = diff.iter().map(|d| d * d).sum::<f64>() / count
                + net.sparsity_penalty(&cache, plan.sparsity);
            history.losses.push(loss);
            if !loss.is_finite() {
                fail = true;
                break;
            }
            let grad_out = diff.mapv(|d| 2.0 * d / count);
            let (grads, _) = net.backward(&cache, grad_out.view(), &[], plan.sparsity)?;
            let g = grads.flatten(net);
            let mut p = net.params();
            if state.m.len() != p.len() {
                state = AdamState::new(p.len());
            }
            let lr = lr_at(round.lr, t, round.steps, plan.poly_decay);
            adam_step(&mut p, &g, &mut state, plan.optimizer, lr, plan.weight_decay)?;
            if p.iter().any(|v| !v.is_finite()) {
                fail = true;
                break;
            }
            net.set_params(&p)?;
        }
        history.rounds.push(RoundRecord {
            round: ri,
            omega: net.omega(),
            lr: round.lr,
            train_rmse: evaluate(net, train),
            test_rmse: evaluate(net, test),
            adapt_events: events,
            fail,
        });
    }
    Ok(history)
}
