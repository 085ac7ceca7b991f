//! AdaptKAN layers and networks: forward evaluation with optional tangent
//! propagation, reverse-mode gradients, initialization, refinement and
//! histogram-driven domain adaptation.
//!
//! Every layer output is a plain sum of univariate activations, one per
//! (input, output) pair. Under [`InitMode::Kan`] an activation is
//! `base_scale * silu(x) + spline_scale * spline(x)`; under
//! [`InitMode::Linear`] it is the spline alone.
//!
//! Forward passes can carry tangent directions: alongside the values, the
//! directional derivatives of every layer output along caller-supplied input
//! directions. Backward accepts gradients for both the outputs and their
//! tangents, which is what losses built on `dV/dx` need.

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Uniform};
use serde::{Deserialize, Serialize};

use crate::adapt::{
    self, AdaptConfig, AdaptEvent, AdaptKind, AdaptMethod, Decision, FeatureState, FitterCache,
};
use crate::error::{KanError, Result};
use crate::exec::Exec;
use crate::histogram::{Absorb, FeatureHistogram};
use crate::spline::{basis_d1, basis_d2, basis_values, greville_abscissae, GridDomain};

/// Samples per work unit in the data-parallel loops.
pub const CHUNK: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InitMode {
    /// SiLU base branch plus scaled spline, coefficients drawn as noise.
    #[default]
    Kan,
    /// Spline only, coefficients on a random-slope line plus noise.
    Linear,
}

#[inline]
fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

/// `z / (1 + exp(-z))`.
#[inline]
pub fn silu(z: f64) -> f64 {
    z * sigmoid(z)
}

/// SiLU with its first and second derivatives.
#[inline]
fn silu3(z: f64) -> [f64; 3] {
    let s = sigmoid(z);
    let ds = s * (1.0 - s);
    [z * s, s + z * ds, ds * (2.0 + z * (1.0 - 2.0 * s))]
}

#[inline]
fn dot4(row: &[f64], b: &[f64; 4]) -> f64 {
    row[0] * b[0] + row[1] * b[1] + row[2] * b[2] + row[3] * b[3]
}

/// Per-(sample, feature) quantities shared by all outputs.
struct Local {
    idx: usize,
    b0: [f64; 4],
    b1: [f64; 4],
    b2: [f64; 4],
    silu: [f64; 3],
}

impl Local {
    #[inline]
    fn new(x: f64, dom: &GridDomain, kan: bool) -> Self {
        let (idx, theta) = dom.locate(x);
        let (b1, b2) = if dom.contains(x) {
            let d = dom.width();
            let mut b1 = basis_d1(theta);
            let mut b2 = basis_d2(theta);
            b1.iter_mut().for_each(|v| *v /= d);
            b2.iter_mut().for_each(|v| *v /= d * d);
            (b1, b2)
        } else {
            ([0.0; 4], [0.0; 4])
        };
        Local {
            idx,
            b0: basis_values(theta),
            b1,
            b2,
            silu: if kan { silu3(x) } else { [0.0; 3] },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptKanLayer {
    pub n_in: usize,
    pub n_out: usize,
    pub init_mode: InitMode,
    /// One entry per input feature.
    pub features: Vec<FeatureState>,
    /// Indexed `j * n_out + i` for input `j`, output `i`.
    pub base_scale: Vec<f64>,
    pub spline_scale: Vec<f64>,
}

/// Parameter gradients of one layer, laid out like the layer itself.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerGrads {
    pub coef: Vec<Vec<f64>>,
    pub base_scale: Vec<f64>,
    pub spline_scale: Vec<f64>,
}

impl LayerGrads {
    fn zeros_like(layer: &AdaptKanLayer) -> Self {
        LayerGrads {
            coef: layer.features.iter().map(|f| vec![0.0; f.coef.len()]).collect(),
            base_scale: vec![0.0; layer.base_scale.len()],
            spline_scale: vec![0.0; layer.spline_scale.len()],
        }
    }

    fn add(&mut self, other: &LayerGrads) {
        for (a, b) in self.coef.iter_mut().zip(&other.coef) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
        self.base_scale
            .iter_mut()
            .zip(&other.base_scale)
            .for_each(|(x, y)| *x += y);
        self.spline_scale
            .iter_mut()
            .zip(&other.spline_scale)
            .for_each(|(x, y)| *x += y);
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct NetGrads {
    pub layers: Vec<LayerGrads>,
}

impl NetGrads {
    /// Flattened in the order of [`AdaptKanNet::params`].
    pub fn flatten(&self, net: &AdaptKanNet) -> Vec<f64> {
        let mut out = Vec::with_capacity(net.n_params());
        for (g, layer) in self.layers.iter().zip(&net.layers) {
            for c in &g.coef {
                out.extend_from_slice(c);
            }
            if layer.init_mode == InitMode::Kan {
                out.extend_from_slice(&g.base_scale);
                out.extend_from_slice(&g.spline_scale);
            }
        }
        out
    }
}

/// Inputs and tangents seen by one layer during a forward pass.
#[derive(Debug, Clone)]
struct LayerCache {
    input: Vec<f64>,
    tangents: Vec<Vec<f64>>,
}

/// Everything backward needs from a forward pass.
#[derive(Debug, Clone)]
pub struct ForwardCache {
    layers: Vec<LayerCache>,
    batch: usize,
    pub output: Array2<f64>,
    /// Directional derivatives of the output, one matrix per direction.
    pub output_tangents: Vec<Array2<f64>>,
}

impl ForwardCache {
    pub fn batch_size(&self) -> usize {
        self.batch
    }

    /// Inputs seen by layer `l`, row-major `batch x n_in`.
    pub fn layer_input(&self, l: usize) -> &[f64] {
        &self.layers[l].input
    }
}

impl AdaptKanLayer {
    #[inline]
    fn kan(&self) -> bool {
        self.init_mode == InitMode::Kan
    }

    /// Value of activation `(i, j)` at `x`.
    pub fn activation(&self, i: usize, j: usize, x: f64) -> f64 {
        let f = &self.features[j];
        let dom = f.domain();
        let loc = Local::new(x, dom, self.kan());
        let nw = dom.n_weights();
        let row = &f.coef[i * nw + loc.idx..i * nw + loc.idx + 4];
        let s = dot4(row, &loc.b0);
        if self.kan() {
            let k = j * self.n_out + i;
            self.base_scale[k] * loc.silu[0] + self.spline_scale[k] * s
        } else {
            s
        }
    }

    fn forward_rows(
        &self,
        x: &[f64],
        xt: &[Vec<f64>],
        start: usize,
        end: usize,
    ) -> (Vec<f64>, Vec<Vec<f64>>) {
        let (n, m) = (self.n_in, self.n_out);
        let rows = end - start;
        let n_dirs = xt.len();
        let kan = self.kan();
        let mut y = vec![0.0; rows * m];
        let mut yt = vec![vec![0.0; rows * m]; n_dirs];
        for s in start..end {
            let r = s - start;
            for (j, feat) in self.features.iter().enumerate() {
                let dom = feat.domain();
                let nw = dom.n_weights();
                let xv = x[s * n + j];
                let loc = Local::new(xv, dom, kan);
                for i in 0..m {
                    let off = i * nw + loc.idx;
                    let row = &feat.coef[off..off + 4];
                    let sp = dot4(row, &loc.b0);
                    let k = j * m + i;
                    let phi = if kan {
                        self.base_scale[k] * loc.silu[0] + self.spline_scale[k] * sp
                    } else {
                        sp
                    };
                    y[r * m + i] += phi;
                    if n_dirs > 0 {
                        let sp1 = dot4(row, &loc.b1);
                        let phi1 = if kan {
                            self.base_scale[k] * loc.silu[1] + self.spline_scale[k] * sp1
                        } else {
                            sp1
                        };
                        for t in 0..n_dirs {
                            yt[t][r * m + i] += phi1 * xt[t][s * n + j];
                        }
                    }
                }
            }
        }
        (y, yt)
    }

    fn forward(&self, x: &[f64], xt: &[Vec<f64>], batch: usize, exec: Exec) -> (Vec<f64>, Vec<Vec<f64>>) {
        let parts = exec.map_chunks(batch, CHUNK, |s, e| self.forward_rows(x, xt, s, e));
        let mut y = Vec::with_capacity(batch * self.n_out);
        let mut yt = vec![Vec::with_capacity(batch * self.n_out); xt.len()];
        for (py, pyt) in parts {
            y.extend(py);
            for (dst, src) in yt.iter_mut().zip(pyt) {
                dst.extend(src);
            }
        }
        (y, yt)
    }

    #[allow(clippy::too_many_arguments)]
    fn backward_rows(
        &self,
        cache: &LayerCache,
        gy: &[f64],
        gyt: &[Vec<f64>],
        penalty: f64,
        start: usize,
        end: usize,
    ) -> (LayerGrads, Vec<f64>, Vec<Vec<f64>>) {
        let (n, m) = (self.n_in, self.n_out);
        let rows = end - start;
        let n_dirs = gyt.len();
        let kan = self.kan();
        let mut grads = LayerGrads::zeros_like(self);
        let mut gx = vec![0.0; rows * n];
        let mut gxt = vec![vec![0.0; rows * n]; n_dirs];
        for s in start..end {
            let r = s - start;
            for (j, feat) in self.features.iter().enumerate() {
                let dom = feat.domain();
                let nw = dom.n_weights();
                let xv = cache.input[s * n + j];
                let loc = Local::new(xv, dom, kan);
                let cg = &mut grads.coef[j];
                let mut gxj = 0.0;
                for i in 0..m {
                    let off = i * nw + loc.idx;
                    let row = &feat.coef[off..off + 4];
                    let k = j * m + i;
                    let sp = dot4(row, &loc.b0);
                    let sp1 = dot4(row, &loc.b1);
                    let sp2 = dot4(row, &loc.b2);
                    let (wb, ws) = if kan {
                        (self.base_scale[k], self.spline_scale[k])
                    } else {
                        (0.0, 1.0)
                    };
                    let phi = wb * loc.silu[0] + ws * sp;
                    let phi1 = wb * loc.silu[1] + ws * sp1;
                    let phi2 = wb * loc.silu[2] + ws * sp2;

                    let mut g = gy[s * m + i];
                    if penalty != 0.0 && phi != 0.0 {
                        g += penalty * phi.signum();
                    }
                    let mut q = 0.0;
                    for t in 0..n_dirs {
                        let gt = gyt[t][s * m + i];
                        q += gt * cache.tangents[t][s * n + j];
                        gxt[t][r * n + j] += gt * phi1;
                    }
                    if g == 0.0 && q == 0.0 {
                        continue;
                    }
                    for c in 0..4 {
                        cg[off + c] += ws * (g * loc.b0[c] + q * loc.b1[c]);
                    }
                    if kan {
                        grads.spline_scale[k] += g * sp + q * sp1;
                        grads.base_scale[k] += g * loc.silu[0] + q * loc.silu[1];
                    }
                    gxj += g * phi1 + q * phi2;
                }
                gx[r * n + j] = gxj;
            }
        }
        (grads, gx, gxt)
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &mut self,
        input: &[f64],
        batch: usize,
        cfg: &AdaptConfig,
        step: usize,
        fitters: &mut FitterCache,
        layer: usize,
        events: &mut Vec<NetEvent>,
    ) -> Result<()> {
        let n = self.n_in;
        for j in 0..n {
            let column: Vec<f64> = (0..batch).map(|s| input[s * n + j]).collect();
            let feat = &mut self.features[j];
            feat.histogram.ema_update(&column)?;
            let event = match cfg.method {
                AdaptMethod::Auto => {
                    let (decision, _) = adapt::decide(&feat.histogram, cfg);
                    adapt::apply_adapt(feat, decision, cfg, fitters)?
                }
                AdaptMethod::Manual { every } if step.is_multiple_of(every) => {
                    Some(adapt::manual_adapt(feat, &column, cfg, fitters)?)
                }
                _ => None,
            };
            if let Some(event) = event {
                events.push(NetEvent {
                    layer,
                    feature: j,
                    event,
                });
            }
        }
        Ok(())
    }

    fn n_params(&self) -> usize {
        let coef: usize = self.features.iter().map(|f| f.coef.len()).sum();
        if self.kan() {
            coef + 2 * self.n_in * self.n_out
        } else {
            coef
        }
    }
}

/// A domain change inside a network.
#[derive(Debug, Clone, PartialEq)]
pub struct NetEvent {
    pub layer: usize,
    pub feature: usize,
    pub event: AdaptEvent,
}

impl NetEvent {
    /// Bound on how much any output of the affected layer moved for inputs
    /// inside the new domain: per-row spline residual times `|spline_scale|`.
    pub fn output_bound(&self, net: &AdaptKanNet) -> f64 {
        let layer = &net.layers[self.layer];
        self.event
            .row_residuals
            .iter()
            .enumerate()
            .map(|(i, r)| match layer.init_mode {
                InitMode::Kan => r * layer.spline_scale[self.feature * layer.n_out + i].abs(),
                InitMode::Linear => *r,
            })
            .fold(0.0, f64::max)
    }
}

/// Construction parameters for [`AdaptKanNet::init`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct InitConfig {
    /// Layer widths including input and output, e.g. `[2, 5, 1]`.
    pub widths: Vec<usize>,
    pub omega: usize,
    pub mode: InitMode,
    /// Standard deviation of the coefficient noise.
    pub noise: f64,
    pub seed: u64,
    /// Initial domain of every feature.
    pub domain: (f64, f64),
    /// Fixed slope for linear init; drawn per activation when absent.
    pub slope: Option<f64>,
}

impl Default for InitConfig {
    fn default() -> Self {
        InitConfig {
            widths: vec![2, 5, 1],
            omega: 3,
            mode: InitMode::Kan,
            noise: 0.5,
            seed: 0,
            domain: (-1.0, 1.0),
            slope: None,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct AdaptKanNet {
    pub layers: Vec<AdaptKanLayer>,
    pub adapt: AdaptConfig,
    #[serde(skip)]
    pub exec: Exec,
    #[serde(skip)]
    fitters: FitterCache,
}

fn to_flat(x: ArrayView2<f64>) -> Vec<f64> {
    x.iter().copied().collect()
}

fn from_flat(rows: usize, cols: usize, v: Vec<f64>) -> Array2<f64> {
    Array2::from_shape_vec((rows, cols), v).expect("row-major buffer has rows * cols entries")
}

impl AdaptKanNet {
    pub fn init(cfg: &InitConfig, adapt_cfg: AdaptConfig) -> Result<Self> {
        adapt_cfg.validate()?;
        if cfg.widths.len() < 2 || cfg.widths.contains(&0) {
            return Err(KanError::Config(format!(
                "widths must list at least two positive sizes, got {:?}",
                cfg.widths
            )));
        }
        if !(cfg.noise >= 0.0 && cfg.noise.is_finite()) {
            return Err(KanError::Config(format!("noise must be >= 0, got {}", cfg.noise)));
        }
        let dom = GridDomain::new(cfg.domain.0, cfg.domain.1, cfg.omega)?;
        let greville = greville_abscissae(&dom);
        let nw = dom.n_weights();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let unit = Uniform::new_inclusive(-1.0, 1.0).expect("valid range");

        let mut layers = Vec::with_capacity(cfg.widths.len() - 1);
        for w in cfg.widths.windows(2) {
            let (n_in, n_out) = (w[0], w[1]);
            let fan = 1.0 / (n_in as f64).sqrt();
            let mut features = Vec::with_capacity(n_in);
            for _ in 0..n_in {
                let mut coef = Vec::with_capacity(n_out * nw);
                for _ in 0..n_out {
                    let slope = match cfg.mode {
                        InitMode::Kan => 0.0,
                        InitMode::Linear => cfg.slope.unwrap_or_else(|| unit.sample(&mut rng) * fan),
                    };
                    for g in &greville {
                        coef.push(slope * g + cfg.noise * normal.sample(&mut rng));
                    }
                }
                features.push(FeatureState {
                    histogram: FeatureHistogram::new(dom, adapt_cfg.alpha)?,
                    coef,
                });
            }
            let (base_scale, spline_scale) = match cfg.mode {
                InitMode::Kan => (
                    (0..n_in * n_out).map(|_| unit.sample(&mut rng) * fan).collect(),
                    vec![fan; n_in * n_out],
                ),
                InitMode::Linear => (vec![0.0; n_in * n_out], vec![1.0; n_in * n_out]),
            };
            layers.push(AdaptKanLayer {
                n_in,
                n_out,
                init_mode: cfg.mode,
                features,
                base_scale,
                spline_scale,
            });
        }
        Ok(AdaptKanNet {
            layers,
            adapt: adapt_cfg,
            exec: Exec::default(),
            fitters: FitterCache::new(),
        })
    }

    /// Builds a network from explicit layers.
    pub fn from_layers(layers: Vec<AdaptKanLayer>, adapt: AdaptConfig) -> Result<Self> {
        let net = AdaptKanNet {
            layers,
            adapt,
            exec: Exec::default(),
            fitters: FitterCache::new(),
        };
        net.validate()?;
        Ok(net)
    }

    /// Checks layer chaining and coefficient shapes.
    pub fn validate(&self) -> Result<()> {
        if self.layers.is_empty() {
            return Err(KanError::Config("network has no layers".into()));
        }
        for (l, layer) in self.layers.iter().enumerate() {
            if layer.features.len() != layer.n_in
                || layer.base_scale.len() != layer.n_in * layer.n_out
                || layer.spline_scale.len() != layer.n_in * layer.n_out
            {
                return Err(KanError::shape(
                    format!("layer {l} with {} inputs and {} outputs", layer.n_in, layer.n_out),
                    "inconsistent parameter arrays",
                ));
            }
            for f in &layer.features {
                f.domain().validate()?;
                if f.coef.len() != layer.n_out * f.domain().n_weights()
                    || f.histogram.hist.len() != f.domain().omega
                {
                    return Err(KanError::shape(
                        format!("{} coefficients", layer.n_out * f.domain().n_weights()),
                        f.coef.len(),
                    ));
                }
            }
            if l + 1 < self.layers.len() && self.layers[l + 1].n_in != layer.n_out {
                return Err(KanError::shape(
                    format!("layer {} input width {}", l + 1, layer.n_out),
                    self.layers[l + 1].n_in,
                ));
            }
        }
        Ok(())
    }

    pub fn with_exec(mut self, exec: Exec) -> Self {
        self.exec = exec;
        self
    }

    pub fn n_inputs(&self) -> usize {
        self.layers[0].n_in
    }

    pub fn n_outputs(&self) -> usize {
        self.layers.last().map(|l| l.n_out).unwrap_or(0)
    }

    pub fn widths(&self) -> Vec<usize> {
        let mut w = vec![self.n_inputs()];
        w.extend(self.layers.iter().map(|l| l.n_out));
        w
    }

    pub fn n_activations(&self) -> usize {
        self.layers.iter().map(|l| l.n_in * l.n_out).sum()
    }

    pub fn n_params(&self) -> usize {
        self.layers.iter().map(|l| l.n_params()).sum()
    }

    /// Trainable parameters: per layer, every feature's coefficients, then
    /// base and spline scales for `kan` layers.
    pub fn params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.n_params());
        for layer in &self.layers {
            for f in &layer.features {
                out.extend_from_slice(&f.coef);
            }
            if layer.kan() {
                out.extend_from_slice(&layer.base_scale);
                out.extend_from_slice(&layer.spline_scale);
            }
        }
        out
    }

    pub fn set_params(&mut self, params: &[f64]) -> Result<()> {
        if params.len() != self.n_params() {
            return Err(KanError::shape(self.n_params(), params.len()));
        }
        let mut it = params.iter().copied();
        for layer in &mut self.layers {
            let kan = layer.kan();
            for f in &mut layer.features {
                f.coef.iter_mut().for_each(|c| *c = it.next().unwrap_or(0.0));
            }
            if kan {
                layer.base_scale.iter_mut().for_each(|c| *c = it.next().unwrap_or(0.0));
                layer.spline_scale.iter_mut().for_each(|c| *c = it.next().unwrap_or(0.0));
            }
        }
        Ok(())
    }

    fn check_input(&self, x: &ArrayView2<f64>, tangents: &[Array2<f64>]) -> Result<()> {
        if x.ncols() != self.n_inputs() {
            return Err(KanError::shape(
                format!("{} input columns", self.n_inputs()),
                x.ncols(),
            ));
        }
        for t in tangents {
            if t.dim() != x.dim() {
                return Err(KanError::shape(format!("{:?}", x.dim()), format!("{:?}", t.dim())));
            }
        }
        Ok(())
    }

    /// Evaluates the network without recording histograms.
    pub fn forward(&self, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        Ok(self.forward_cached(x, &[])?.output)
    }

    /// Pure forward pass carrying tangent directions; returns the cache.
    pub fn forward_cached(&self, x: ArrayView2<f64>, tangents: &[Array2<f64>]) -> Result<ForwardCache> {
        self.check_input(&x, tangents)?;
        let batch = x.nrows();
        let mut input = to_flat(x);
        let mut tans: Vec<Vec<f64>> = tangents.iter().map(|t| to_flat(t.view())).collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        for (l, layer) in self.layers.iter().enumerate() {
            let (y, yt) = layer.forward(&input, &tans, batch, self.exec);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(KanError::NonFiniteActivation { layer: l });
            }
            caches.push(LayerCache {
                input: std::mem::replace(&mut input, y),
                tangents: std::mem::replace(&mut tans, yt),
            });
        }
        let m = self.n_outputs();
        Ok(ForwardCache {
            layers: caches,
            batch,
            output: from_flat(batch, m, input),
            output_tangents: tans.into_iter().map(|t| from_flat(batch, m, t)).collect(),
        })
    }

    /// Training forward pass. Before each layer evaluates, its input
    /// histograms take an EMA step on the layer's inputs and the configured
    /// adaptation runs, so the layer computes on its updated domains.
    pub fn forward_train(
        &mut self,
        x: ArrayView2<f64>,
        tangents: &[Array2<f64>],
        step: usize,
    ) -> Result<(ForwardCache, Vec<NetEvent>)> {
        self.check_input(&x, tangents)?;
        let batch = x.nrows();
        let cfg = self.adapt;
        let exec = self.exec;
        let mut events = Vec::new();
        let mut input = to_flat(x);
        let mut tans: Vec<Vec<f64>> = tangents.iter().map(|t| to_flat(t.view())).collect();
        let mut caches = Vec::with_capacity(self.layers.len());
        for l in 0..self.layers.len() {
            if input.iter().any(|v| !v.is_finite()) {
                return Err(KanError::NonFiniteActivation { layer: l.saturating_sub(1) });
            }
            let layer = &mut self.layers[l];
            layer.record(&input, batch, &cfg, step, &mut self.fitters, l, &mut events)?;
            let (y, yt) = layer.forward(&input, &tans, batch, exec);
            if y.iter().any(|v| !v.is_finite()) {
                return Err(KanError::NonFiniteActivation { layer: l });
            }
            caches.push(LayerCache {
                input: std::mem::replace(&mut input, y),
                tangents: std::mem::replace(&mut tans, yt),
            });
        }
        let m = self.n_outputs();
        let cache = ForwardCache {
            layers: caches,
            batch,
            output: from_flat(batch, m, input),
            output_tangents: tans.into_iter().map(|t| from_flat(batch, m, t)).collect(),
        };
        Ok((cache, events))
    }

    /// Reverse pass. `grad_out` is dL/d(output); `grad_tangents` holds
    /// dL/d(output tangent) per direction (may be empty). `sparsity` is the
    /// penalty weight lambda of [`AdaptKanNet::sparsity_penalty`], whose
    /// gradient is folded in. Returns parameter gradients and dL/d(input).
    pub fn backward(
        &self,
        cache: &ForwardCache,
        grad_out: ArrayView2<f64>,
        grad_tangents: &[Array2<f64>],
        sparsity: f64,
    ) -> Result<(NetGrads, Array2<f64>)> {
        let batch = cache.batch;
        if grad_out.dim() != (batch, self.n_outputs()) || cache.layers.len() != self.layers.len() {
            return Err(KanError::shape(
                format!("({batch}, {})", self.n_outputs()),
                format!("{:?}", grad_out.dim()),
            ));
        }
        let n_dirs = cache.output_tangents.len();
        if !grad_tangents.is_empty() && grad_tangents.len() != n_dirs {
            return Err(KanError::shape(format!("{n_dirs} tangent gradients"), grad_tangents.len()));
        }
        let penalty = if sparsity != 0.0 && batch > 0 {
            sparsity / (self.n_activations() as f64 * batch as f64)
        } else {
            0.0
        };
        let mut gy = to_flat(grad_out);
        let mut gyt: Vec<Vec<f64>> = if grad_tangents.is_empty() {
            Vec::new()
        } else {
            grad_tangents.iter().map(|g| to_flat(g.view())).collect()
        };
        let mut layer_grads = Vec::with_capacity(self.layers.len());
        for (layer, lc) in self.layers.iter().zip(&cache.layers).rev() {
            if lc.input.len() != batch * layer.n_in {
                return Err(KanError::shape(batch * layer.n_in, lc.input.len()));
            }
            if !gyt.is_empty() && lc.tangents.len() != gyt.len() {
                return Err(KanError::shape(gyt.len(), lc.tangents.len()));
            }
            let parts = self
                .exec
                .map_chunks(batch, CHUNK, |s, e| layer.backward_rows(lc, &gy, &gyt, penalty, s, e));
            let mut grads = LayerGrads::zeros_like(layer);
            let mut gx = Vec::with_capacity(batch * layer.n_in);
            let mut gxt = vec![Vec::with_capacity(batch * layer.n_in); gyt.len()];
            for (g, px, pxt) in parts {
                grads.add(&g);
                gx.extend(px);
                for (dst, src) in gxt.iter_mut().zip(pxt) {
                    dst.extend(src);
                }
            }
            layer_grads.push(grads);
            gy = gx;
            gyt = gxt;
        }
        layer_grads.reverse();
        Ok((
            NetGrads {
                layers: layer_grads,
            },
            from_flat(batch, self.n_inputs(), gy),
        ))
    }

    /// `lambda` times the mean over activations of the batch-mean absolute
    /// activation value.
    pub fn sparsity_penalty(&self, cache: &ForwardCache, lambda: f64) -> f64 {
        if lambda == 0.0 || cache.batch == 0 {
            return 0.0;
        }
        let mut total = 0.0;
        for (layer, lc) in self.layers.iter().zip(&cache.layers) {
            for s in 0..cache.batch {
                for j in 0..layer.n_in {
                    let x = lc.input[s * layer.n_in + j];
                    for i in 0..layer.n_out {
                        total += layer.activation(i, j, x).abs();
                    }
                }
            }
        }
        lambda * total / (self.n_activations() as f64 * cache.batch as f64)
    }

    /// Refines every feature to `new_omega` intervals on its current domain.
    /// Features already at or above `new_omega` are left alone.
    pub fn refine_all(&mut self, new_omega: usize) -> Result<Vec<NetEvent>> {
        let mut events = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (j, feat) in layer.features.iter_mut().enumerate() {
                let old = *feat.domain();
                if old.omega >= new_omega {
                    continue;
                }
                let new = GridDomain::with_degree(old.a, old.b, new_omega, old.k)?;
                let (row_residuals, rank_deficient) =
                    feat.refit_rows(&new, adapt::RefitMode::ExactLsq, &mut self.fitters)?;
                feat.histogram.refit(new, Absorb::Refine)?;
                events.push(NetEvent {
                    layer: l,
                    feature: j,
                    event: AdaptEvent {
                        kind: AdaptKind::Refine,
                        old,
                        new,
                        row_residuals,
                        rank_deficient,
                        degenerate: false,
                    },
                });
            }
        }
        Ok(events)
    }

    /// Runs the stretch/shrink decision on every feature's current histogram.
    pub fn adapt_all(&mut self) -> Result<Vec<NetEvent>> {
        let cfg = self.adapt;
        let mut events = Vec::new();
        for (l, layer) in self.layers.iter_mut().enumerate() {
            for (j, feat) in layer.features.iter_mut().enumerate() {
                let (decision, _) = adapt::decide(&feat.histogram, &cfg);
                if decision == Decision::None {
                    continue;
                }
                if let Some(event) = adapt::apply_adapt(feat, decision, &cfg, &mut self.fitters)? {
                    events.push(NetEvent {
                        layer: l,
                        feature: j,
                        event,
                    });
                }
            }
        }
        Ok(events)
    }

    /// Current interval count of the first feature (all features share it
    /// unless edited by hand).
    pub fn omega(&self) -> usize {
        self.layers[0].features[0].domain().omega
    }
}
