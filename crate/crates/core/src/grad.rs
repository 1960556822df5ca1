//! VFE gradients, Adam, and the training loop.
//!
//! Trainable scalars are enumerated canonically: `(μ̂, ρ)` for every
//! parameter in layer/block/row-major order, then `(log-shape, log-rate)`
//! for every output dimension. A [`GradientVector`] lists only the active
//! entries; optimizer state is kept for every slot so that pruning never
//! reshuffles it, and pruned slots are simply never touched.

use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::net::{ForwardMode, MeanFieldNet};
use crate::tape::Tape;

/// Stream reserved for evaluation draws, so that every evaluation of a
/// given seed uses the same noise.
const EVAL_STREAM: u64 = u64::MAX;

#[derive(Debug, Clone, PartialEq)]
pub struct GradientVector {
    pub values: Vec<f64>,
}

impl GradientVector {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn norm(&self) -> f64 {
        self.values.iter().map(|g| g * g).sum::<f64>().sqrt()
    }
}

/// Number of entries in a gradient for `net`.
pub fn active_scalar_count(net: &MeanFieldNet) -> usize {
    2 * net.active_params() + 2 * net.noise().dims()
}

/// Number of optimizer slots for `net`, pruned or not.
pub fn scalar_count(net: &MeanFieldNet) -> usize {
    2 * net.total_params() + 2 * net.noise().dims()
}

/// Value and gradient of `complexity_scale · KL − Σ_batch accuracy`.
pub fn objective_and_gradient<R: Rng + ?Sized>(
    net: &MeanFieldNet,
    batch: &Dataset,
    mode: ForwardMode,
    n_samples: usize,
    complexity_scale: f64,
    rng: &mut R,
) -> Result<(f64, GradientVector)> {
    let mut tape = Tape::new();
    let params = net.register(&mut tape, true);
    let root = net.objective_on_tape(
        &mut tape,
        &params,
        &batch.inputs,
        &batch.targets,
        mode,
        n_samples,
        complexity_scale,
        rng,
    )?;
    let grads = tape.backward(root);
    let pick = |v| {
        grads
            .get(v)
            .cloned()
            .unwrap_or_else(|| Array2::zeros(tape.value(v).dim()))
    };

    let mut values = Vec::with_capacity(active_scalar_count(net));
    for (l, layer) in net.blocks.iter().enumerate() {
        for (b, block) in layer.iter().enumerate() {
            let g_mu = pick(params.mu[l][b]);
            let g_rho = pick(params.rho[l][b]);
            for ((&m, &gm), &gr) in block.mask.iter().zip(&g_mu).zip(&g_rho) {
                if m != 0.0 {
                    values.push(gm);
                    values.push(gr);
                }
            }
        }
    }
    let g_shape = pick(params.log_shape);
    let g_rate = pick(params.log_rate);
    for (&gs, &gr) in g_shape.iter().zip(&g_rate) {
        values.push(gs);
        values.push(gr);
    }
    Ok((tape.scalar(root), GradientVector { values }))
}

/// Gradient of the single-sample VFE estimate on `batch`.
pub fn vfe_gradient<R: Rng + ?Sized>(
    net: &MeanFieldNet,
    batch: &Dataset,
    mode: ForwardMode,
    rng: &mut R,
) -> Result<GradientVector> {
    Ok(objective_and_gradient(net, batch, mode, 1, 1.0, rng)?.1)
}

/// Every trainable scalar in canonical order, with an activity flag.
pub fn flat_params(net: &MeanFieldNet) -> (Vec<f64>, Vec<bool>) {
    let mut values = Vec::with_capacity(scalar_count(net));
    let mut active = Vec::with_capacity(scalar_count(net));
    for block in net.blocks.iter().flatten() {
        for ((&mu, &rho), &mask) in block.mu.iter().zip(&block.rho).zip(&block.mask) {
            values.extend([mu, rho]);
            active.extend([mask != 0.0; 2]);
        }
    }
    let noise = net.noise();
    for (&s, &r) in noise.log_shape.iter().zip(&noise.log_rate) {
        values.extend([s, r]);
        active.extend([true, true]);
    }
    (values, active)
}

fn set_flat_params(net: &mut MeanFieldNet, values: &[f64]) {
    let mut it = values.iter();
    for block in net.blocks.iter_mut().flatten() {
        for (mu, rho) in block.mu.iter_mut().zip(block.rho.iter_mut()) {
            *mu = *it.next().expect("length");
            *rho = *it.next().expect("length");
        }
    }
    let noise = net.noise_mut();
    for m in 0..noise.dims() {
        noise.log_shape[m] = *it.next().expect("length");
        noise.log_rate[m] = *it.next().expect("length");
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub learning_rate: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
        }
    }
}

/// Adam moment estimates, one slot per trainable scalar.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub m: Vec<f64>,
    pub v: Vec<f64>,
    pub t: u64,
}

impl AdamState {
    pub fn new(slots: usize) -> Self {
        Self {
            m: vec![0.0; slots],
            v: vec![0.0; slots],
            t: 0,
        }
    }

    pub fn for_net(net: &MeanFieldNet) -> Self {
        Self::new(scalar_count(net))
    }

    /// One bias-corrected update of the active entries of `params`.
    /// `grad` holds one value per active entry, in order.
    pub fn update(
        &mut self,
        params: &mut [f64],
        active: &[bool],
        grad: &[f64],
        config: &AdamConfig,
    ) -> Result<()> {
        if params.len() != self.m.len() || active.len() != self.m.len() {
            return Err(Error::DimensionMismatch {
                expected: self.m.len(),
                found: params.len(),
            });
        }
        let n_active = active.iter().filter(|&&a| a).count();
        if grad.len() != n_active {
            return Err(Error::DimensionMismatch {
                expected: n_active,
                found: grad.len(),
            });
        }
        self.t += 1;
        let t = self.t as i32;
        let c1 = 1.0 - config.beta1.powi(t);
        let c2 = 1.0 - config.beta2.powi(t);
        let mut g_iter = grad.iter();
        for (slot, &on) in active.iter().enumerate() {
            if !on {
                continue;
            }
            let g = *g_iter.next().expect("counted");
            let m = &mut self.m[slot];
            let v = &mut self.v[slot];
            *m = config.beta1 * *m + (1.0 - config.beta1) * g;
            *v = config.beta2 * *v + (1.0 - config.beta2) * g * g;
            let m_hat = *m / c1;
            let v_hat = *v / c2;
            params[slot] -= config.learning_rate * m_hat / (v_hat.sqrt() + config.epsilon);
        }
        Ok(())
    }
}

/// Apply one Adam update to the network; pruned parameters are skipped.
pub fn adam_step(
    state: &mut AdamState,
    net: &mut MeanFieldNet,
    grad: &GradientVector,
    config: &AdamConfig,
) -> Result<()> {
    let (mut values, active) = flat_params(net);
    state.update(&mut values, &active, &grad.values, config)?;
    set_flat_params(net, &values);
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub epochs: usize,
    pub batch_size: usize,
    pub mode: ForwardMode,
    pub seed: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_epsilon: f64,
    /// Weight draws per gradient step in sampled modes.
    pub train_samples: usize,
    /// Weight draws per evaluation in sampled modes.
    pub eval_samples: usize,
}

impl TrainConfig {
    pub fn new(mode: ForwardMode, epochs: usize, seed: u64) -> Self {
        Self {
            learning_rate: 0.01,
            epochs,
            batch_size: 32,
            mode,
            seed,
            beta1: 0.9,
            beta2: 0.999,
            adam_epsilon: 1e-8,
            train_samples: 1,
            eval_samples: 10,
        }
    }

    pub fn adam(&self) -> AdamConfig {
        AdamConfig {
            learning_rate: self.learning_rate,
            beta1: self.beta1,
            beta2: self.beta2,
            epsilon: self.adam_epsilon,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: &str| Err(Error::Config(msg.to_string()));
        if !(self.learning_rate >= 0.0 && self.learning_rate.is_finite()) {
            return bad("learning rate must be finite and non-negative");
        }
        if self.batch_size == 0 {
            return bad("batch size must be positive");
        }
        if !(0.0 < self.beta1 && self.beta1 < 1.0 && 0.0 < self.beta2 && self.beta2 < 1.0) {
            return bad("Adam betas must lie in (0, 1)");
        }
        if !(self.adam_epsilon > 0.0) {
            return bad("Adam epsilon must be positive");
        }
        if self.train_samples == 0 || self.eval_samples == 0 {
            return bad("sample counts must be positive");
        }
        Ok(())
    }
}

/// VFE on `data` with the fixed evaluation noise of `seed`.
pub fn evaluation_vfe(
    net: &MeanFieldNet,
    data: &Dataset,
    mode: ForwardMode,
    eval_samples: usize,
    seed: u64,
) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(EVAL_STREAM);
    net.vfe(&data.inputs, &data.targets, mode, eval_samples, &mut rng)
}

/// Train in place; returns the evaluation VFE after every epoch.
pub fn train(net: &mut MeanFieldNet, data: &Dataset, config: &TrainConfig) -> Result<Vec<f64>> {
    train_on_stream(net, data, config, 0)
}

/// As [`train`], drawing shuffles and weight noise from RNG stream `stream`
/// of the configured seed. Used to keep retraining rounds independent.
pub fn train_on_stream(
    net: &mut MeanFieldNet,
    data: &Dataset,
    config: &TrainConfig,
    stream: u64,
) -> Result<Vec<f64>> {
    config.validate()?;
    let n = data.len();
    if n == 0 {
        return Err(Error::Config("training set is empty".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(stream);
    let adam = config.adam();
    let mut state = AdamState::for_net(net);
    let mut order: Vec<usize> = (0..n).collect();
    let mut trace = Vec::with_capacity(config.epochs);

    for epoch in 0..config.epochs {
        order.shuffle(&mut rng);
        for chunk in order.chunks(config.batch_size) {
            let batch = data.select(chunk);
            let scale = chunk.len() as f64 / n as f64;
            let (value, grad) = objective_and_gradient(
                net,
                &batch,
                config.mode,
                config.train_samples,
                scale,
                &mut rng,
            )?;
            if !value.is_finite() || grad.values.iter().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss { epoch });
            }
            adam_step(&mut state, net, &grad, &adam)?;
        }
        let vfe = evaluation_vfe(net, data, config.mode, config.eval_samples, config.seed)?;
        if !vfe.is_finite() {
            return Err(Error::NonFiniteLoss { epoch });
        }
        trace.push(vfe);
    }
    Ok(trace)
}

/// Root-mean-square error of the posterior-mean prediction.
pub fn rmse(net: &MeanFieldNet, data: &Dataset) -> Result<f64> {
    let pred = net.forward_mean(&data.inputs)?;
    let diff = &pred - &data.targets;
    let per_row = (&diff * &diff).sum_axis(Axis(1));
    Ok((per_row.sum() / diff.len() as f64).sqrt())
}
