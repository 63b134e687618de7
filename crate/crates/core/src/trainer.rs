//! Mini-batch training of the network on aligned patch pairs.
//!
//! The objective is the mean per-sample squared error
//! `E = 1/I sum_s |x_s - f(A* z_s)|^2`. Parameters are updated by ADAM (or
//! plain gradient descent) with separate rate multipliers for the `tau`,
//! `sigma` and `L` groups. Step sizes are clamped to a positive floor after
//! every update.
//!
//! Batches are drawn from per-epoch permutations seeded by
//! `(seed, epoch)`, so a run is fully determined by its config, dataset
//! order and step counter, and can be resumed from a saved [`TrainState`].

use std::time::Instant;

use ndarray::Array1;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::backprop::{sample_gradient, ParamGrads};
use crate::cpsolver::spectral_norm;
use crate::error::{Error, Result};
use crate::imaging::PatchPairSet;
use crate::linops::CirculantOp;
use crate::pdnet::{build_feature_operator, predict, FeatureDesign, LayerParams, NetworkParams};

/// Samples reduced sequentially inside one parallel work unit. Fixed so the
/// floating-point summation order does not depend on the thread count.
const REDUCTION_CHUNK: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum OptimizerKind {
    Adam,
    Sgd,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AdamParams {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamParams {
    fn default() -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// Per-group learning-rate multipliers.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroupRates {
    pub tau: f64,
    pub sigma: f64,
    pub l: f64,
}

impl Default for GroupRates {
    fn default() -> Self {
        Self {
            tau: 1.0,
            sigma: 1.0,
            l: 1.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InitParams {
    /// Standard deviation of the nonzero entries of `L`.
    pub l_std: f64,
    /// `tau = sigma = step_factor / |L|`, so `tau sigma |L|^2 = step_factor^2`.
    pub step_factor: f64,
}

impl Default for InitParams {
    fn default() -> Self {
        Self {
            l_std: 1e-2,
            step_factor: 0.9,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    /// Number of layers `K`.
    pub layers: usize,
    pub batch_size: usize,
    pub max_steps: usize,
    pub optimizer: OptimizerKind,
    /// Base learning rate, scaled per group by `group_rates`.
    pub learning_rate: f64,
    pub group_rates: GroupRates,
    pub adam: AdamParams,
    pub init: InitParams,
    pub seed: u64,
    /// Keep `L` zero outside the feature-design support.
    pub enforce_mask: bool,
    pub positivity_floor: f64,
    /// Feature design string such as `f5s2n30+f7s3n30+f10s10n30`.
    pub feature_design: String,
    pub patch_side: usize,
    /// Steps between checkpoints and held-out evaluations; 0 disables both.
    pub checkpoint_every: usize,
    /// Samples (from the front of the dataset) used to score checkpoints.
    pub eval_samples: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            layers: 10,
            batch_size: 200,
            max_steps: 800_000,
            optimizer: OptimizerKind::Adam,
            learning_rate: 1e-3,
            group_rates: GroupRates::default(),
            adam: AdamParams::default(),
            init: InitParams::default(),
            seed: 0,
            enforce_mask: true,
            positivity_floor: 1e-8,
            feature_design: "f5s2n30+f7s3n30+f10s10n30".into(),
            patch_side: 10,
            checkpoint_every: 10_000,
            eval_samples: 2_000,
        }
    }
}

impl TrainConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: TrainConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serialises")
    }

    pub fn design(&self) -> Result<FeatureDesign> {
        FeatureDesign::parse(&self.feature_design, self.patch_side)
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |key: &str, msg: &str| Err(Error::Config(format!("`{key}`: {msg}")));
        if self.layers == 0 {
            return fail("layers", "must be >= 1");
        }
        if self.batch_size == 0 {
            return fail("batch_size", "must be >= 1");
        }
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return fail("learning_rate", "must be > 0");
        }
        let GroupRates { tau, sigma, l } = self.group_rates;
        if [tau, sigma, l].iter().any(|r| !(*r > 0.0 && r.is_finite())) {
            return fail("group_rates", "multipliers must be > 0");
        }
        if !(0.0..1.0).contains(&self.adam.beta1) || !(0.0..1.0).contains(&self.adam.beta2) || self.adam.eps <= 0.0 {
            return fail("adam", "need beta1, beta2 in [0, 1) and eps > 0");
        }
        if self.init.l_std.is_nan() || self.init.l_std <= 0.0 {
            return fail("init.l_std", "must be > 0");
        }
        if !(self.init.step_factor > 0.0 && self.init.step_factor < 1.0) {
            return fail("init.step_factor", "must lie in (0, 1)");
        }
        if self.positivity_floor.is_nan() || self.positivity_floor <= 0.0 {
            return fail("positivity_floor", "must be > 0");
        }
        self.design()
            .map_err(|e| Error::Config(format!("`feature_design`: {e}")))?;
        Ok(())
    }
}

/// Builds `K` identical layers: `L` drawn on the design support, then
/// `tau = sigma = step_factor / |L|`.
pub fn init_network(config: &TrainConfig, design: &FeatureDesign, op: &CirculantOp) -> Result<NetworkParams> {
    let (l, mask) = build_feature_operator(design, config.seed, config.init.l_std)?;
    let norm = spectral_norm(&l, 1000, 1e-12);
    if norm.is_nan() || norm <= 0.0 {
        return Err(Error::FeatureDesign(format!("{design} produced a zero operator")));
    }
    let step = config.init.step_factor / norm;
    let mut layer = LayerParams::new(step, step, l);
    if config.enforce_mask {
        layer = layer.with_mask(mask);
    }
    NetworkParams::tied(layer, config.layers, op.clone(), design.clone())
}

/// Number of scalars in the flattened parameter vector.
pub fn parameter_count(net: &NetworkParams) -> usize {
    net.layers.iter().map(|l| 2 + l.l.len()).sum()
}

/// Parameters as `[tau, sigma, L (row-major)]` per layer.
pub fn flatten_params(net: &NetworkParams) -> Vec<f64> {
    let mut out = Vec::with_capacity(parameter_count(net));
    for layer in &net.layers {
        out.push(layer.tau);
        out.push(layer.sigma);
        out.extend(layer.l.iter().copied());
    }
    out
}

fn flatten_grads(grads: &ParamGrads) -> Vec<f64> {
    let mut out = Vec::new();
    for g in &grads.layers {
        out.push(g.d_tau);
        out.push(g.d_sigma);
        out.extend(g.d_l.iter().copied());
    }
    out
}

fn unflatten_into(net: &mut NetworkParams, flat: &[f64]) {
    let mut i = 0;
    for layer in &mut net.layers {
        layer.tau = flat[i];
        layer.sigma = flat[i + 1];
        i += 2;
        let len = layer.l.len();
        for (dst, &src) in layer.l.iter_mut().zip(&flat[i..i + len]) {
            *dst = src;
        }
        i += len;
    }
}

/// Optimiser moments over the flattened parameter vector.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerState {
    pub kind: OptimizerKind,
    /// Completed updates.
    pub t: u64,
    pub m: Vec<f64>,
    pub v: Vec<f64>,
}

impl OptimizerState {
    pub fn new(kind: OptimizerKind, len: usize) -> Self {
        let moments = if kind == OptimizerKind::Adam { len } else { 0 };
        Self {
            kind,
            t: 0,
            m: vec![0.0; moments],
            v: vec![0.0; moments],
        }
    }

    /// In-place update; `rates[i]` is the learning rate of coordinate `i`.
    fn update(&mut self, params: &mut [f64], grads: &[f64], rates: &[f64], adam: &AdamParams) {
        self.t += 1;
        match self.kind {
            OptimizerKind::Sgd => {
                for ((p, g), r) in params.iter_mut().zip(grads).zip(rates) {
                    *p -= r * g;
                }
            }
            OptimizerKind::Adam => {
                let bc1 = 1.0 - adam.beta1.powf(self.t as f64);
                let bc2 = 1.0 - adam.beta2.powf(self.t as f64);
                for i in 0..params.len() {
                    let g = grads[i];
                    self.m[i] = adam.beta1 * self.m[i] + (1.0 - adam.beta1) * g;
                    self.v[i] = adam.beta2 * self.v[i] + (1.0 - adam.beta2) * g * g;
                    let m_hat = self.m[i] / bc1;
                    let v_hat = self.v[i] / bc2;
                    params[i] -= rates[i] * m_hat / (v_hat.sqrt() + adam.eps);
                }
            }
        }
    }
}

/// Everything needed to continue a run.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub config: TrainConfig,
    pub net: NetworkParams,
    /// Completed steps.
    pub step: usize,
    pub optimizer: OptimizerState,
    /// Batch loss after each step.
    pub loss_history: Vec<f64>,
}

impl TrainState {
    pub fn new(config: TrainConfig, net: NetworkParams) -> Self {
        let optimizer = OptimizerState::new(config.optimizer, parameter_count(&net));
        Self {
            config,
            net,
            step: 0,
            optimizer,
            loss_history: Vec::new(),
        }
    }

    /// Initialises the network from the config.
    pub fn init(config: TrainConfig, op: &CirculantOp) -> Result<Self> {
        config.validate()?;
        let design = config.design()?;
        let net = init_network(&config, &design, op)?;
        Ok(Self::new(config, net))
    }

    fn rates(&self) -> Vec<f64> {
        let base = self.config.learning_rate;
        let g = self.config.group_rates;
        let mut rates = Vec::with_capacity(self.optimizer.m.len().max(parameter_count(&self.net)));
        for layer in &self.net.layers {
            rates.push(base * g.tau);
            rates.push(base * g.sigma);
            rates.extend(std::iter::repeat_n(base * g.l, layer.l.len()));
        }
        rates
    }

    /// Sample indices of the batch for step `step` over a dataset of `len`.
    pub fn batch_indices(&self, step: usize, len: usize) -> Vec<usize> {
        batch_indices(self.config.seed, self.config.batch_size, step, len)
    }
}

fn epoch_permutation(seed: u64, epoch: u64, len: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..len).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ epoch.wrapping_mul(0x9E37_79B9_7F4A_7C15));
    idx.shuffle(&mut rng);
    idx
}

/// Batch for `step`: consecutive slices of concatenated per-epoch
/// permutations.
pub fn batch_indices(seed: u64, batch_size: usize, step: usize, len: usize) -> Vec<usize> {
    let start = step as u64 * batch_size as u64;
    let mut out = Vec::with_capacity(batch_size);
    let mut epoch = u64::MAX;
    let mut perm = Vec::new();
    for pos in start..start + batch_size as u64 {
        let e = pos / len as u64;
        if e != epoch {
            epoch = e;
            perm = epoch_permutation(seed, e, len);
        }
        out.push(perm[(pos % len as u64) as usize]);
    }
    out
}

/// Loss and summed gradient over a batch, reduced in a fixed order.
pub fn batch_gradient(net: &NetworkParams, batch: &PatchPairSet) -> Result<(f64, ParamGrads)> {
    let count = batch.len();
    if count == 0 {
        return Err(Error::param("batch", "must not be empty"));
    }
    let partials = (0..count)
        .collect::<Vec<_>>()
        .par_chunks(REDUCTION_CHUNK)
        .map(|chunk| {
            let mut loss = 0.0;
            let mut acc = ParamGrads::zeros_like(net);
            for &i in chunk {
                let (l, g) = sample_gradient(net, batch.degraded[i].view(), batch.clean[i].view(), count)?;
                loss += l;
                acc.add_assign(&g);
            }
            Ok((loss, acc))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut loss = 0.0;
    let mut total = ParamGrads::zeros_like(net);
    for (l, g) in &partials {
        loss += l;
        total.add_assign(g);
    }
    Ok((loss, total))
}

/// One optimiser step on `batch`. Returns the batch loss (before the
/// update). On a non-finite loss or gradient the state is left untouched.
pub fn train_step(state: &mut TrainState, batch: &PatchPairSet) -> Result<f64> {
    let (loss, grads) = batch_gradient(&state.net, batch)?;
    if let Some((layer, param)) = grads.first_non_finite() {
        return Err(Error::NonFiniteGradient { layer, param });
    }
    if !loss.is_finite() {
        return Err(Error::NonFiniteGradient {
            layer: state.net.depth() - 1,
            param: "loss",
        });
    }

    let mut params = flatten_params(&state.net);
    let rates = state.rates();
    state
        .optimizer
        .update(&mut params, &flatten_grads(&grads), &rates, &state.config.adam);
    unflatten_into(&mut state.net, &params);

    let floor = state.config.positivity_floor.max(crate::pdnet::SIGMA_GUARD);
    for layer in &mut state.net.layers {
        layer.tau = layer.tau.max(floor);
        layer.sigma = layer.sigma.max(floor);
        layer.apply_mask();
    }
    state.step += 1;
    state.loss_history.push(loss);
    Ok(loss)
}

/// Mean per-sample squared error of `net` on `set`.
pub fn dataset_loss(net: &NetworkParams, set: &PatchPairSet) -> Result<f64> {
    if set.is_empty() {
        return Err(Error::param("dataset", "must not be empty"));
    }
    let errs = (0..set.len())
        .into_par_iter()
        .map(|i| {
            let x = predict(net, set.degraded[i].view())?;
            let d: Array1<f64> = x - &set.clean[i];
            Ok(d.dot(&d))
        })
        .collect::<Result<Vec<f64>>>()?;
    Ok(errs.iter().sum::<f64>() / set.len() as f64)
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub config: TrainConfig,
    pub steps: usize,
    /// Loss on the evaluation subset before the first step of this run.
    pub initial_eval_loss: f64,
    pub final_eval_loss: f64,
    pub best_eval_loss: f64,
    pub best_step: usize,
    /// `(step, eval loss)` at every checkpoint.
    pub eval_curve: Vec<(usize, f64)>,
    /// `(step, batch loss)` for every step of this run.
    pub loss_curve: Vec<(usize, f64)>,
    pub elapsed_secs: f64,
}

pub struct TrainOutcome {
    /// Network with the lowest evaluation loss seen.
    pub best: NetworkParams,
    pub state: TrainState,
    pub report: TrainReport,
}

/// Trains from scratch.
pub fn train(config: &TrainConfig, dataset: &PatchPairSet, op: &CirculantOp) -> Result<TrainOutcome> {
    let state = TrainState::init(config.clone(), op)?;
    train_from(state, dataset, |_| Ok(()))
}

/// Continues `state` until `config.max_steps`, calling `on_checkpoint` every
/// `checkpoint_every` steps. A hook error aborts training.
pub fn train_from(
    mut state: TrainState,
    dataset: &PatchPairSet,
    mut on_checkpoint: impl FnMut(&TrainState) -> Result<()>,
) -> Result<TrainOutcome> {
    if dataset.is_empty() {
        return Err(Error::param("dataset", "must not be empty"));
    }
    if dataset.patch_side != state.net.patch_side() {
        return Err(Error::dim(
            "dataset patch side",
            state.net.patch_side(),
            dataset.patch_side,
        ));
    }
    let started = Instant::now();
    let eval_n = state.config.eval_samples.clamp(1, dataset.len());
    let eval_set = dataset.select(&(0..eval_n).collect::<Vec<_>>());

    let initial = dataset_loss(&state.net, &eval_set)?;
    let mut best = (initial, state.step, state.net.clone());
    let mut eval_curve = vec![(state.step, initial)];
    let mut loss_curve = Vec::new();
    let every = state.config.checkpoint_every;

    while state.step < state.config.max_steps {
        let batch = dataset.select(&state.batch_indices(state.step, dataset.len()));
        let loss = train_step(&mut state, &batch)?;
        loss_curve.push((state.step, loss));
        if every > 0 && state.step.is_multiple_of(every) {
            let eval = dataset_loss(&state.net, &eval_set)?;
            eval_curve.push((state.step, eval));
            if eval < best.0 {
                best = (eval, state.step, state.net.clone());
            }
            on_checkpoint(&state)?;
        }
    }

    let final_eval = match eval_curve.last() {
        Some(&(s, e)) if s == state.step => e,
        _ => {
            let e = dataset_loss(&state.net, &eval_set)?;
            eval_curve.push((state.step, e));
            if e < best.0 {
                best = (e, state.step, state.net.clone());
            }
            e
        }
    };

    let report = TrainReport {
        config: state.config.clone(),
        steps: state.step,
        initial_eval_loss: initial,
        final_eval_loss: final_eval,
        best_eval_loss: best.0,
        best_step: best.1,
        eval_curve,
        loss_curve,
        elapsed_secs: started.elapsed().as_secs_f64(),
    };
    Ok(TrainOutcome {
        best: best.2,
        state,
        report,
    })
}
