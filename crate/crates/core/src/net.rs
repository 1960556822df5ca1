//! Mean-field Bayesian networks: parameters, forward modes and the VFE.
//!
//! Every weight and bias carries an independent Gaussian posterior
//! `N(μ̂, softplus(ρ)²)` and a fixed Gaussian prior. Pruned parameters are
//! masked to an exact zero in every forward mode and drop out of the KL.
//! Each output dimension has a Gamma posterior over its noise precision.
//!
//! Parameters within a layer are indexed row-major across the layer's
//! blocks: `[weight (in x out), bias (1 x out)]` for dense layers and
//! `[W_z, W_r, W_h, U_z, U_r, U_h, b_z, b_r, b_h]` for a GRU.

use std::collections::HashSet;
use std::f64::consts::PI;
use std::fmt;
use std::path::Path;

use ndarray::{s, Array2};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::bmr::ParamId;
use crate::dists::{gamma_kl, gaussian_kl, Gamma1D, Gaussian1D};
use crate::error::{Error, Result};
use crate::special::{ln_gamma, sigmoid, softplus, softplus_inv};
use crate::tape::{Tape, Var};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LayerKind {
    Dense,
    Gru,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Identity,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LayerSpec {
    pub kind: LayerKind,
    pub input_dim: usize,
    pub output_dim: usize,
    pub activation: Activation,
}

const GRU_BLOCKS: [&str; 9] = ["w_z", "w_r", "w_h", "u_z", "u_r", "u_h", "b_z", "b_r", "b_h"];

impl LayerSpec {
    pub fn dense(input_dim: usize, output_dim: usize, activation: Activation) -> Self {
        Self {
            kind: LayerKind::Dense,
            input_dim,
            output_dim,
            activation,
        }
    }

    pub fn gru(input_dim: usize, hidden: usize) -> Self {
        Self {
            kind: LayerKind::Gru,
            input_dim,
            output_dim: hidden,
            activation: Activation::Identity,
        }
    }

    /// `(name, rows, cols)` of each parameter block, in index order.
    pub fn blocks(&self) -> Vec<(&'static str, usize, usize)> {
        let (i, o) = (self.input_dim, self.output_dim);
        match self.kind {
            LayerKind::Dense => vec![("weight", i, o), ("bias", 1, o)],
            LayerKind::Gru => GRU_BLOCKS
                .iter()
                .enumerate()
                .map(|(k, &name)| match k {
                    0..=2 => (name, i, o),
                    3..=5 => (name, o, o),
                    _ => (name, 1, o),
                })
                .collect(),
        }
    }

    pub fn param_count(&self) -> usize {
        self.blocks().iter().map(|(_, r, c)| r * c).sum()
    }
}

/// Network shapes used in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Architecture {
    /// One ReLU hidden layer of 50 units.
    Fcn50,
    /// One GRU layer of 16 units over sequences of 8 steps, linear readout.
    Gru16,
}

impl Architecture {
    pub const GRU_SEQUENCE_LEN: usize = 8;

    /// Layer list and sequence length for `input_dim` inputs and `output_dim` targets.
    pub fn build(self, input_dim: usize, output_dim: usize) -> Result<(Vec<LayerSpec>, usize)> {
        match self {
            Architecture::Fcn50 => Ok((
                vec![
                    LayerSpec::dense(input_dim, 50, Activation::Relu),
                    LayerSpec::dense(50, output_dim, Activation::Identity),
                ],
                1,
            )),
            Architecture::Gru16 => {
                let t = Self::GRU_SEQUENCE_LEN;
                if input_dim == 0 || input_dim % t != 0 {
                    return Err(Error::Config(format!(
                        "gru16 needs inputs made of {t} time steps, got {input_dim} columns"
                    )));
                }
                Ok((
                    vec![
                        LayerSpec::gru(input_dim / t, 16),
                        LayerSpec::dense(16, output_dim, Activation::Identity),
                    ],
                    t,
                ))
            }
        }
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Architecture::Fcn50 => "fcn50",
            Architecture::Gru16 => "gru16",
        })
    }
}

impl std::str::FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "fcn50" => Ok(Architecture::Fcn50),
            "gru16" => Ok(Architecture::Gru16),
            other => Err(Error::Config(format!("unknown architecture {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ForwardMode {
    Moments,
    SampleGlobal,
    SampleLocal,
}

impl ForwardMode {
    pub fn is_sampled(self) -> bool {
        !matches!(self, ForwardMode::Moments)
    }
}

impl fmt::Display for ForwardMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            ForwardMode::Moments => "moments",
            ForwardMode::SampleGlobal => "sample-global",
            ForwardMode::SampleLocal => "sample-local",
        })
    }
}

impl std::str::FromStr for ForwardMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "moments" => Ok(ForwardMode::Moments),
            "sample-global" => Ok(ForwardMode::SampleGlobal),
            "sample-local" => Ok(ForwardMode::SampleLocal),
            other => Err(Error::Config(format!("unknown forward mode {other:?}"))),
        }
    }
}

/// One scalar parameter as stored in snapshots.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanFieldParam {
    pub mu_hat: f64,
    pub rho: f64,
    pub prior: Gaussian1D,
    pub pruned: bool,
}

impl MeanFieldParam {
    pub fn sigma(&self) -> f64 {
        softplus(self.rho)
    }

    pub fn posterior(&self) -> Gaussian1D {
        let s = self.sigma();
        Gaussian1D {
            mean: self.mu_hat,
            variance: s * s,
        }
    }
}

/// Gamma priors and posteriors over the per-output noise precisions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModel {
    pub prior: Vec<Gamma1D>,
    pub log_shape: Vec<f64>,
    pub log_rate: Vec<f64>,
}

impl NoiseModel {
    /// Posterior initialized at the prior.
    pub fn at_prior(prior: Vec<Gamma1D>) -> Self {
        Self {
            log_shape: prior.iter().map(|g| g.shape.ln()).collect(),
            log_rate: prior.iter().map(|g| g.rate.ln()).collect(),
            prior,
        }
    }

    pub fn dims(&self) -> usize {
        self.prior.len()
    }

    pub fn posterior(&self, m: usize) -> Gamma1D {
        Gamma1D {
            shape: self.log_shape[m].exp(),
            rate: self.log_rate[m].exp(),
        }
    }

    pub fn complexity(&self) -> f64 {
        (0..self.dims())
            .map(|m| gamma_kl(self.posterior(m), self.prior[m]))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PriorSettings {
    pub weight: Gaussian1D,
    pub noise: Gamma1D,
}

impl Default for PriorSettings {
    fn default() -> Self {
        Self {
            weight: Gaussian1D {
                mean: 0.0,
                variance: 1.0,
            },
            noise: Gamma1D {
                shape: 1.0,
                rate: 1.0,
            },
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InitSettings {
    /// Standard deviation of the random initial posterior means.
    pub mean_std: f64,
    /// Initial posterior standard deviation.
    pub sigma: f64,
}

impl Default for InitSettings {
    fn default() -> Self {
        Self {
            mean_std: 0.05,
            sigma: 0.05,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub(crate) struct ParamBlock {
    pub(crate) mu: Array2<f64>,
    pub(crate) rho: Array2<f64>,
    pub(crate) prior_mean: Array2<f64>,
    pub(crate) prior_var: Array2<f64>,
    /// 1.0 for active parameters, 0.0 for pruned ones.
    pub(crate) mask: Array2<f64>,
}

impl ParamBlock {
    fn filled(rows: usize, cols: usize, mu: f64, rho: f64, prior: Gaussian1D) -> Self {
        Self {
            mu: Array2::from_elem((rows, cols), mu),
            rho: Array2::from_elem((rows, cols), rho),
            prior_mean: Array2::from_elem((rows, cols), prior.mean),
            prior_var: Array2::from_elem((rows, cols), prior.variance),
            mask: Array2::ones((rows, cols)),
        }
    }

    fn len(&self) -> usize {
        self.mu.len()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MeanFieldNet {
    layers: Vec<LayerSpec>,
    sequence_len: usize,
    pub(crate) blocks: Vec<Vec<ParamBlock>>,
    pub(crate) noise: NoiseModel,
}

/// Realized GRU weights for one sampled sequence pass.
#[derive(Debug, Clone, PartialEq)]
pub struct GruWeights {
    pub w_z: Array2<f64>,
    pub w_r: Array2<f64>,
    pub w_h: Array2<f64>,
    pub u_z: Array2<f64>,
    pub u_r: Array2<f64>,
    pub u_h: Array2<f64>,
    pub b_z: Array2<f64>,
    pub b_r: Array2<f64>,
    pub b_h: Array2<f64>,
}

impl GruWeights {
    fn from_blocks(b: &[Array2<f64>]) -> Self {
        Self {
            w_z: b[0].clone(),
            w_r: b[1].clone(),
            w_h: b[2].clone(),
            u_z: b[3].clone(),
            u_r: b[4].clone(),
            u_h: b[5].clone(),
            b_z: b[6].clone(),
            b_r: b[7].clone(),
            b_h: b[8].clone(),
        }
    }

    /// One recurrence step for a batch: `h` is `B x H`, `x` is `B x D`.
    pub fn step(&self, h: &Array2<f64>, x: &Array2<f64>) -> Array2<f64> {
        let z = (x.dot(&self.w_z) + h.dot(&self.u_z) + &self.b_z).mapv(sigmoid);
        let r = (x.dot(&self.w_r) + h.dot(&self.u_r) + &self.b_r).mapv(sigmoid);
        let cand = (x.dot(&self.w_h) + (&r * h).dot(&self.u_h) + &self.b_h).mapv(f64::tanh);
        (1.0 - &z) * h + &z * &cand
    }
}

/// Draw a GRU weight realization and advance one step.
pub fn gru_step_sample<R: Rng + ?Sized>(
    net: &MeanFieldNet,
    layer: usize,
    h_prev: &Array2<f64>,
    x_t: &Array2<f64>,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if net.layers.get(layer).map(|l| l.kind) != Some(LayerKind::Gru) {
        return Err(Error::Config(format!("layer {layer} is not a GRU layer")));
    }
    let noise = net.draw_block_noise(layer, rng);
    Ok(GruWeights::from_blocks(&net.realize_layer(layer, &noise)).step(h_prev, x_t))
}

/// Tape handles for every parameter of a network.
pub(crate) struct TapeParams {
    pub(crate) mu: Vec<Vec<Var>>,
    pub(crate) rho: Vec<Vec<Var>>,
    /// μ̂ ⊙ mask
    mean: Vec<Vec<Var>>,
    /// σ̂ ⊙ mask
    sigma: Vec<Vec<Var>>,
    /// σ̂² ⊙ mask
    var: Vec<Vec<Var>>,
    pub(crate) log_shape: Var,
    pub(crate) log_rate: Var,
}

fn row(values: &[f64]) -> Array2<f64> {
    Array2::from_shape_vec((1, values.len()), values.to_vec()).expect("row shape")
}

fn normal_array<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample::<f64, _>(StandardNormal))
}

impl MeanFieldNet {
    /// Network with random posterior means and a common initial spread.
    pub fn new<R: Rng + ?Sized>(
        layers: Vec<LayerSpec>,
        sequence_len: usize,
        priors: PriorSettings,
        init: InitSettings,
        output_dims: usize,
        rng: &mut R,
    ) -> Result<Self> {
        if !(init.sigma > 0.0 && init.mean_std >= 0.0) {
            return Err(Error::Config("initial spreads must be positive".into()));
        }
        let mut net = Self::at_prior(layers, sequence_len, priors, output_dims)?;
        let rho = softplus_inv(init.sigma);
        for layer in &mut net.blocks {
            for block in layer {
                let (r, c) = block.mu.dim();
                block.mu = normal_array(r, c, rng) * init.mean_std;
                block.rho.fill(rho);
            }
        }
        Ok(net)
    }

    /// Network whose posterior equals its prior everywhere.
    pub fn at_prior(
        layers: Vec<LayerSpec>,
        sequence_len: usize,
        priors: PriorSettings,
        output_dims: usize,
    ) -> Result<Self> {
        validate_layers(&layers, sequence_len, output_dims)?;
        Gaussian1D::new(priors.weight.mean, priors.weight.variance)?;
        Gamma1D::new(priors.noise.shape, priors.noise.rate)?;
        let rho = softplus_inv(priors.weight.std_dev());
        let blocks = layers
            .iter()
            .map(|l| {
                l.blocks()
                    .into_iter()
                    .map(|(_, r, c)| ParamBlock::filled(r, c, priors.weight.mean, rho, priors.weight))
                    .collect()
            })
            .collect();
        Ok(Self {
            layers,
            sequence_len,
            blocks,
            noise: NoiseModel::at_prior(vec![priors.noise; output_dims]),
        })
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn sequence_len(&self) -> usize {
        self.sequence_len
    }

    pub fn noise(&self) -> &NoiseModel {
        &self.noise
    }

    pub fn noise_mut(&mut self) -> &mut NoiseModel {
        &mut self.noise
    }

    /// Width of one input row: per-step input size times sequence length for GRUs.
    pub fn input_width(&self) -> usize {
        let first = &self.layers[0];
        match first.kind {
            LayerKind::Dense => first.input_dim,
            LayerKind::Gru => first.input_dim * self.sequence_len,
        }
    }

    pub fn output_dim(&self) -> usize {
        self.layers.last().map(|l| l.output_dim).unwrap_or(0)
    }

    pub fn has_gru(&self) -> bool {
        self.layers.iter().any(|l| l.kind == LayerKind::Gru)
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(LayerSpec::param_count).sum()
    }

    pub fn pruned_params(&self) -> usize {
        self.blocks
            .iter()
            .flatten()
            .map(|b| b.mask.iter().filter(|&&m| m == 0.0).count())
            .sum()
    }

    pub fn active_params(&self) -> usize {
        self.total_params() - self.pruned_params()
    }

    pub fn pruning_rate(&self) -> f64 {
        self.pruned_params() as f64 / self.total_params() as f64
    }

    fn locate(&self, id: ParamId) -> Result<(usize, usize, usize)> {
        let unknown = Error::UnknownParameter {
            layer: id.layer,
            index: id.index,
        };
        let blocks = self.blocks.get(id.layer).ok_or(unknown)?;
        let mut index = id.index;
        for (b, block) in blocks.iter().enumerate() {
            if index < block.len() {
                let cols = block.mu.ncols();
                return Ok((b, index / cols, index % cols));
            }
            index -= block.len();
        }
        Err(Error::UnknownParameter {
            layer: id.layer,
            index: id.index,
        })
    }

    pub fn param(&self, id: ParamId) -> Result<MeanFieldParam> {
        let (b, r, c) = self.locate(id)?;
        let block = &self.blocks[id.layer][b];
        Ok(MeanFieldParam {
            mu_hat: block.mu[[r, c]],
            rho: block.rho[[r, c]],
            prior: Gaussian1D {
                mean: block.prior_mean[[r, c]],
                variance: block.prior_var[[r, c]],
            },
            pruned: block.mask[[r, c]] == 0.0,
        })
    }

    /// Overwrite the variational parameters of one scalar.
    pub fn set_posterior(&mut self, id: ParamId, mu_hat: f64, rho: f64) -> Result<()> {
        let (b, r, c) = self.locate(id)?;
        let block = &mut self.blocks[id.layer][b];
        block.mu[[r, c]] = mu_hat;
        block.rho[[r, c]] = rho;
        Ok(())
    }

    pub fn set_prior(&mut self, id: ParamId, prior: Gaussian1D) -> Result<()> {
        let (b, r, c) = self.locate(id)?;
        let block = &mut self.blocks[id.layer][b];
        block.prior_mean[[r, c]] = prior.mean;
        block.prior_var[[r, c]] = prior.variance;
        Ok(())
    }

    /// Every parameter id in canonical order.
    pub fn param_ids(&self) -> Vec<ParamId> {
        self.layers
            .iter()
            .enumerate()
            .flat_map(|(l, spec)| (0..spec.param_count()).map(move |i| ParamId::new(l, i)))
            .collect()
    }

    /// Active parameters with their current values, in canonical order.
    pub fn active(&self) -> Vec<(ParamId, MeanFieldParam)> {
        let mut out = Vec::with_capacity(self.active_params());
        for (l, layer) in self.blocks.iter().enumerate() {
            let mut index = 0;
            for block in layer {
                for (((&mu, &rho), (&pm, &pv)), &mask) in block
                    .mu
                    .iter()
                    .zip(&block.rho)
                    .zip(block.prior_mean.iter().zip(&block.prior_var))
                    .zip(&block.mask)
                {
                    if mask != 0.0 {
                        out.push((
                            ParamId::new(l, index),
                            MeanFieldParam {
                                mu_hat: mu,
                                rho,
                                prior: Gaussian1D {
                                    mean: pm,
                                    variance: pv,
                                },
                                pruned: false,
                            },
                        ));
                    }
                    index += 1;
                }
            }
        }
        out
    }

    /// Mark parameters as pruned. Either all are pruned or none is.
    pub fn apply_prune(&mut self, ids: &[ParamId]) -> Result<()> {
        let mut seen = HashSet::with_capacity(ids.len());
        let mut slots = Vec::with_capacity(ids.len());
        for &id in ids {
            let slot = self.locate(id)?;
            let (b, r, c) = slot;
            if self.blocks[id.layer][b].mask[[r, c]] == 0.0 || !seen.insert(id) {
                return Err(Error::AlreadyPruned {
                    layer: id.layer,
                    index: id.index,
                });
            }
            slots.push((id.layer, slot));
        }
        for (l, (b, r, c)) in slots {
            self.blocks[l][b].mask[[r, c]] = 0.0;
        }
        Ok(())
    }

    /// Posterior means with pruned entries zeroed.
    fn effective_means(&self) -> Vec<Vec<Array2<f64>>> {
        self.blocks
            .iter()
            .map(|layer| layer.iter().map(|b| &b.mu * &b.mask).collect())
            .collect()
    }

    fn draw_block_noise<R: Rng + ?Sized>(&self, layer: usize, rng: &mut R) -> Vec<Array2<f64>> {
        self.blocks[layer]
            .iter()
            .map(|b| normal_array(b.mu.nrows(), b.mu.ncols(), rng))
            .collect()
    }

    fn realize_layer(&self, layer: usize, noise: &[Array2<f64>]) -> Vec<Array2<f64>> {
        self.blocks[layer]
            .iter()
            .zip(noise)
            .map(|(b, xi)| (&b.mu + &(b.rho.mapv(softplus) * xi)) * &b.mask)
            .collect()
    }

    /// Deterministic pass through the posterior means.
    pub fn forward_mean(&self, x: &Array2<f64>) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let means = self.effective_means();
        Ok(self.forward_with(x, &means))
    }

    /// Deterministic pass with explicit weights, laid out like the parameter blocks.
    pub fn forward_with(&self, x: &Array2<f64>, weights: &[Vec<Array2<f64>>]) -> Array2<f64> {
        let mut h = x.clone();
        for (l, spec) in self.layers.iter().enumerate() {
            let w = &weights[l];
            h = match spec.kind {
                LayerKind::Dense => {
                    let a = h.dot(&w[0]) + &w[1];
                    match spec.activation {
                        Activation::Relu => a.mapv(|v| v.max(0.0)),
                        Activation::Identity => a,
                    }
                }
                LayerKind::Gru => {
                    let cell = GruWeights::from_blocks(w);
                    let d = spec.input_dim;
                    let mut state = Array2::zeros((h.nrows(), spec.output_dim));
                    for t in 0..self.sequence_len {
                        let xt = h.slice(s![.., t * d..(t + 1) * d]).to_owned();
                        state = cell.step(&state, &xt);
                    }
                    state
                }
            };
        }
        h
    }

    fn check_input(&self, x: &Array2<f64>) -> Result<()> {
        if x.ncols() != self.input_width() {
            return Err(Error::DimensionMismatch {
                expected: self.input_width(),
                found: x.ncols(),
            });
        }
        Ok(())
    }

    fn check_targets(&self, x: &Array2<f64>, y: &Array2<f64>) -> Result<()> {
        self.check_input(x)?;
        if y.ncols() != self.output_dim() {
            return Err(Error::DimensionMismatch {
                expected: self.output_dim(),
                found: y.ncols(),
            });
        }
        if y.nrows() != x.nrows() {
            return Err(Error::DimensionMismatch {
                expected: x.nrows(),
                found: y.nrows(),
            });
        }
        if x.nrows() == 0 {
            return Err(Error::Config("empty dataset".into()));
        }
        Ok(())
    }

    /// Output means and variances by moment propagation (dense networks only).
    pub fn forward_moments(&self, x: &Array2<f64>) -> Result<(Array2<f64>, Array2<f64>)> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let xv = tape.constant(x.clone());
        let (m, v) = self.moments_on_tape(&mut tape, &params, xv)?;
        Ok((tape.value(m).clone(), tape.value(v).clone()))
    }

    /// One network output per row under a single shared weight draw.
    pub fn forward_sample_global<R: Rng + ?Sized>(
        &self,
        x: &Array2<f64>,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        self.forward_sample(x, false, rng)
    }

    /// One network output per row with pre-activations sampled per datapoint.
    pub fn forward_sample_local<R: Rng + ?Sized>(
        &self,
        x: &Array2<f64>,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        self.forward_sample(x, true, rng)
    }

    fn forward_sample<R: Rng + ?Sized>(
        &self,
        x: &Array2<f64>,
        local: bool,
        rng: &mut R,
    ) -> Result<Array2<f64>> {
        self.check_input(x)?;
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let out = self.sample_on_tape(&mut tape, &params, x, local, rng);
        Ok(tape.value(out).clone())
    }

    /// Summed over rows of `x`: `Σ_n Σ_m ½[E ln γ_m − ln 2π − E[γ_m] S_nm]`.
    pub fn expected_log_likelihood<R: Rng + ?Sized>(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        mode: ForwardMode,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        self.check_targets(x, y)?;
        let mut tape = Tape::new();
        let params = self.register(&mut tape, false);
        let acc = self.accuracy_on_tape(&mut tape, &params, x, y, mode, n_samples, rng)?;
        Ok(tape.scalar(acc))
    }

    /// KL of the posterior from the prior over active parameters and noise precisions.
    pub fn complexity(&self) -> f64 {
        let weights: f64 = self
            .active()
            .iter()
            .map(|(_, p)| gaussian_kl(p.posterior(), p.prior))
            .sum();
        weights + self.noise.complexity()
    }

    /// Variational free energy on `(x, y)`.
    pub fn vfe<R: Rng + ?Sized>(
        &self,
        x: &Array2<f64>,
        y: &Array2<f64>,
        mode: ForwardMode,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<f64> {
        Ok(self.complexity() - self.expected_log_likelihood(x, y, mode, n_samples, rng)?)
    }

    /// Put every parameter on `tape`, as variables or as constants.
    pub(crate) fn register(&self, tape: &mut Tape, differentiable: bool) -> TapeParams {
        let leaf = |t: &mut Tape, a: Array2<f64>| {
            if differentiable {
                t.variable(a)
            } else {
                t.constant(a)
            }
        };
        let log_shape = leaf(tape, row(&self.noise.log_shape));
        let log_rate = leaf(tape, row(&self.noise.log_rate));
        let mut out = TapeParams {
            mu: Vec::new(),
            rho: Vec::new(),
            mean: Vec::new(),
            sigma: Vec::new(),
            var: Vec::new(),
            log_shape,
            log_rate,
        };
        for layer in &self.blocks {
            let (mut mu, mut rho, mut mean, mut sigma, mut var) =
                (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
            for block in layer {
                let m = leaf(tape, block.mu.clone());
                let r = leaf(tape, block.rho.clone());
                let mask = tape.constant(block.mask.clone());
                let me = tape.mul(m, mask);
                let sp = tape.softplus(r);
                let sd = tape.mul(sp, mask);
                let v = tape.square(sd);
                mu.push(m);
                rho.push(r);
                mean.push(me);
                sigma.push(sd);
                var.push(v);
            }
            out.mu.push(mu);
            out.rho.push(rho);
            out.mean.push(mean);
            out.sigma.push(sigma);
            out.var.push(var);
        }
        out
    }

    pub(crate) fn moments_on_tape(
        &self,
        tape: &mut Tape,
        p: &TapeParams,
        x: Var,
    ) -> Result<(Var, Var)> {
        if self.has_gru() {
            return Err(Error::ArchitectureUnsupported(
                "moment propagation is defined for dense layers only; use a sampled mode for GRU networks"
                    .into(),
            ));
        }
        // (mean, variance, second moment) of the current layer input; None = deterministic
        let mut mean = x;
        let mut spread: Option<(Var, Var)> = None;
        let last = self.layers.len() - 1;
        for (l, spec) in self.layers.iter().enumerate() {
            let (wm, wv, bm, bv) = (p.mean[l][0], p.var[l][0], p.mean[l][1], p.var[l][1]);
            let (am, av) = dense_moments(tape, mean, spread, wm, wv, bm, bv);
            if l == last {
                return Ok((am, av));
            }
            match spec.activation {
                Activation::Relu => {
                    let m = tape.relu_mean(am, av);
                    let s2 = tape.relu_second(am, av);
                    let m2 = tape.square(m);
                    let v = tape.sub(s2, m2);
                    mean = m;
                    spread = Some((v, s2));
                }
                Activation::Identity => {
                    let m2 = tape.square(am);
                    let s2 = tape.add(av, m2);
                    mean = am;
                    spread = Some((av, s2));
                }
            }
        }
        unreachable!("network has at least one layer")
    }

    pub(crate) fn sample_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &TapeParams,
        x: &Array2<f64>,
        local: bool,
        rng: &mut R,
    ) -> Var {
        let batch = x.nrows();
        // global mode: one draw for every block up front, in canonical order
        let mut global_noise: Vec<Option<Vec<Array2<f64>>>> = vec![None; self.layers.len()];
        for (l, spec) in self.layers.iter().enumerate() {
            if !local || spec.kind == LayerKind::Gru {
                global_noise[l] = Some(self.draw_block_noise(l, rng));
            }
        }
        let mut h = tape.constant(x.clone());
        for (l, spec) in self.layers.iter().enumerate() {
            let realized = |tape: &mut Tape, noise: &[Array2<f64>]| -> Vec<Var> {
                noise
                    .iter()
                    .enumerate()
                    .map(|(b, xi)| {
                        let xi = tape.constant(xi.clone());
                        let scaled = tape.mul(p.sigma[l][b], xi);
                        tape.add(p.mean[l][b], scaled)
                    })
                    .collect()
            };
            h = match (spec.kind, &global_noise[l]) {
                (LayerKind::Gru, Some(noise)) => {
                    let w = realized(tape, noise);
                    gru_on_tape(tape, &w, x, spec, self.sequence_len)
                }
                (LayerKind::Dense, Some(noise)) => {
                    let w = realized(tape, noise);
                    let a = tape.matmul(h, w[0]);
                    let a = tape.add_row(a, w[1]);
                    activate(tape, a, spec.activation)
                }
                (LayerKind::Dense, None) => {
                    let mean = tape.matmul(h, p.mean[l][0]);
                    let mean = tape.add_row(mean, p.mean[l][1]);
                    let h2 = tape.square(h);
                    let var = tape.matmul(h2, p.var[l][0]);
                    let var = tape.add_row(var, p.var[l][1]);
                    let sd = tape.sqrt(var);
                    let xi = tape.constant(normal_array(batch, spec.output_dim, rng));
                    let noise = tape.mul(sd, xi);
                    let a = tape.add(mean, noise);
                    activate(tape, a, spec.activation)
                }
                (LayerKind::Gru, None) => unreachable!("GRU layers always use a global draw"),
            };
        }
        h
    }

    /// Summed expected log-likelihood as a tape node.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn accuracy_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &TapeParams,
        x: &Array2<f64>,
        y: &Array2<f64>,
        mode: ForwardMode,
        n_samples: usize,
        rng: &mut R,
    ) -> Result<Var> {
        let yv = tape.constant(y.clone());
        let sq = match mode {
            ForwardMode::Moments => {
                let xv = tape.constant(x.clone());
                let (m, v) = self.moments_on_tape(tape, p, xv)?;
                let r = tape.sub(yv, m);
                let r2 = tape.square(r);
                tape.add(r2, v)
            }
            ForwardMode::SampleGlobal | ForwardMode::SampleLocal => {
                if n_samples == 0 {
                    return Err(Error::Config("at least one sample is required".into()));
                }
                let local = mode == ForwardMode::SampleLocal;
                let mut total: Option<Var> = None;
                for _ in 0..n_samples {
                    let f = self.sample_on_tape(tape, p, x, local, rng);
                    let r = tape.sub(yv, f);
                    let r2 = tape.square(r);
                    total = Some(match total {
                        Some(t) => tape.add(t, r2),
                        None => r2,
                    });
                }
                let total = total.expect("n_samples > 0");
                tape.scale(total, 1.0 / n_samples as f64)
            }
        };
        let rows = x.nrows() as f64;
        let dims = y.ncols() as f64;
        let alpha = tape.exp(p.log_shape);
        let log_mean = tape.sub(p.log_shape, p.log_rate);
        let e_gamma = tape.exp(log_mean);
        let psi = tape.digamma(alpha);
        let e_ln_gamma = tape.sub(psi, p.log_rate);
        let ln_sum = tape.sum(e_ln_gamma);
        let ln_part = tape.scale(ln_sum, rows);
        let ln_part = tape.add_scalar(ln_part, -rows * dims * (2.0 * PI).ln());
        let s_cols = tape.sum_rows(sq);
        let weighted = tape.mul(e_gamma, s_cols);
        let risk = tape.sum(weighted);
        let diff = tape.sub(ln_part, risk);
        Ok(tape.scale(diff, 0.5))
    }

    /// KL complexity as a tape node.
    pub(crate) fn complexity_on_tape(&self, tape: &mut Tape, p: &TapeParams) -> Var {
        let mut total: Option<Var> = None;
        let mut push = |tape: &mut Tape, v: Var| {
            total = Some(match total {
                Some(t) => tape.add(t, v),
                None => v,
            });
        };
        for (l, layer) in self.blocks.iter().enumerate() {
            for (b, block) in layer.iter().enumerate() {
                let inv_pv = tape.constant(block.prior_var.mapv(|v| 1.0 / v));
                let offset = tape.constant(block.prior_var.mapv(|v| v.ln() - 1.0));
                let pm = tape.constant(block.prior_mean.clone());
                let mask = tape.constant(block.mask.clone());
                let sd = tape.softplus(p.rho[l][b]);
                let var = tape.square(sd);
                let ratio = tape.mul(var, inv_pv);
                let d = tape.sub(p.mu[l][b], pm);
                let d2 = tape.square(d);
                let d2 = tape.mul(d2, inv_pv);
                let ln_sd = tape.ln(sd);
                let ln_var = tape.scale(ln_sd, 2.0);
                let a = tape.add(ratio, d2);
                let a = tape.add(a, offset);
                let a = tape.sub(a, ln_var);
                let a = tape.mul(a, mask);
                let s = tape.sum(a);
                let s = tape.scale(s, 0.5);
                push(tape, s);
            }
        }
        let ap: Vec<f64> = self.noise.prior.iter().map(|g| g.shape).collect();
        let bp: Vec<f64> = self.noise.prior.iter().map(|g| g.rate).collect();
        let konst: Vec<f64> = self
            .noise
            .prior
            .iter()
            .map(|g| ln_gamma(g.shape) - g.shape * g.rate.ln())
            .collect();
        let ap_v = tape.constant(row(&ap));
        let bp_v = tape.constant(row(&bp));
        let konst_v = tape.constant(row(&konst));
        let alpha = tape.exp(p.log_shape);
        let shape_gap = tape.sub(alpha, ap_v);
        let psi = tape.digamma(alpha);
        let t1 = tape.mul(shape_gap, psi);
        let t2 = tape.ln_gamma(alpha);
        let t4 = tape.mul(ap_v, p.log_rate);
        let neg_lr = tape.scale(p.log_rate, -1.0);
        let inv_beta = tape.exp(neg_lr);
        let rate_ratio = tape.mul(bp_v, inv_beta);
        let rate_ratio = tape.add_scalar(rate_ratio, -1.0);
        let t5 = tape.mul(alpha, rate_ratio);
        let g = tape.sub(t1, t2);
        let g = tape.add(g, konst_v);
        let g = tape.add(g, t4);
        let g = tape.add(g, t5);
        let g = tape.sum(g);
        push(tape, g);
        total.expect("noise term always present")
    }

    /// `scale · complexity − accuracy` as a tape node.
    #[allow(clippy::too_many_arguments)]
    pub(crate) fn objective_on_tape<R: Rng + ?Sized>(
        &self,
        tape: &mut Tape,
        p: &TapeParams,
        x: &Array2<f64>,
        y: &Array2<f64>,
        mode: ForwardMode,
        n_samples: usize,
        complexity_scale: f64,
        rng: &mut R,
    ) -> Result<Var> {
        self.check_targets(x, y)?;
        let acc = self.accuracy_on_tape(tape, p, x, y, mode, n_samples, rng)?;
        let kl = self.complexity_on_tape(tape, p);
        let kl = tape.scale(kl, complexity_scale);
        Ok(tape.sub(kl, acc))
    }
}

fn validate_layers(layers: &[LayerSpec], sequence_len: usize, output_dims: usize) -> Result<()> {
    if layers.is_empty() {
        return Err(Error::Config("network needs at least one layer".into()));
    }
    for (l, spec) in layers.iter().enumerate() {
        if spec.input_dim == 0 || spec.output_dim == 0 {
            return Err(Error::Config(format!("layer {l} has a zero dimension")));
        }
        if l > 0 && layers[l - 1].output_dim != spec.input_dim {
            return Err(Error::DimensionMismatch {
                expected: layers[l - 1].output_dim,
                found: spec.input_dim,
            });
        }
        if spec.kind == LayerKind::Gru && l != 0 {
            return Err(Error::ArchitectureUnsupported(
                "a GRU layer is supported only as the first layer".into(),
            ));
        }
    }
    if layers.last().map(|l| l.kind) != Some(LayerKind::Dense) {
        return Err(Error::ArchitectureUnsupported(
            "the network must end in a dense readout".into(),
        ));
    }
    if layers.last().map(|l| l.output_dim) != Some(output_dims) {
        return Err(Error::DimensionMismatch {
            expected: output_dims,
            found: layers.last().map(|l| l.output_dim).unwrap_or(0),
        });
    }
    if sequence_len == 0 || (layers[0].kind == LayerKind::Dense && sequence_len != 1) {
        return Err(Error::Config(format!(
            "sequence length {sequence_len} does not fit the first layer"
        )));
    }
    Ok(())
}

fn activate(tape: &mut Tape, a: Var, activation: Activation) -> Var {
    match activation {
        Activation::Relu => tape.relu(a),
        Activation::Identity => a,
    }
}

/// Moments of `h·W + b` for independent `W`, `b` and input `h`.
/// `spread` is `(Var[h], E[h²])`, or `None` for a deterministic input.
pub(crate) fn dense_moments(
    tape: &mut Tape,
    mean_in: Var,
    spread: Option<(Var, Var)>,
    w_mean: Var,
    w_var: Var,
    b_mean: Var,
    b_var: Var,
) -> (Var, Var) {
    let m = tape.matmul(mean_in, w_mean);
    let m = tape.add_row(m, b_mean);
    let v = match spread {
        None => {
            let x2 = tape.square(mean_in);
            tape.matmul(x2, w_var)
        }
        Some((var_in, second_in)) => {
            // Σ E[w²]E[h²] − E[w]²E[h]² = Σ μ²·Var[h] + σ²·E[h²]
            let wm2 = tape.square(w_mean);
            let a = tape.matmul(var_in, wm2);
            let b = tape.matmul(second_in, w_var);
            tape.add(a, b)
        }
    };
    let v = tape.add_row(v, b_var);
    (m, v)
}

fn gru_on_tape(tape: &mut Tape, w: &[Var], x: &Array2<f64>, spec: &LayerSpec, steps: usize) -> Var {
    let d = spec.input_dim;
    let mut h = tape.constant(Array2::zeros((x.nrows(), spec.output_dim)));
    let gate = |tape: &mut Tape, xt: Var, hin: Var, wk: Var, uk: Var, bk: Var| {
        let a = tape.matmul(xt, wk);
        let b = tape.matmul(hin, uk);
        let c = tape.add(a, b);
        tape.add_row(c, bk)
    };
    for t in 0..steps {
        let xt = tape.constant(x.slice(s![.., t * d..(t + 1) * d]).to_owned());
        let z = gate(tape, xt, h, w[0], w[3], w[6]);
        let z = tape.sigmoid(z);
        let r = gate(tape, xt, h, w[1], w[4], w[7]);
        let r = tape.sigmoid(r);
        let rh = tape.mul(r, h);
        let cand = gate(tape, xt, rh, w[2], w[5], w[8]);
        let cand = tape.tanh(cand);
        let neg_z = tape.scale(z, -1.0);
        let keep = tape.add_scalar(neg_z, 1.0);
        let kept = tape.mul(keep, h);
        let fresh = tape.mul(z, cand);
        h = tape.add(kept, fresh);
    }
    h
}

pub const SNAPSHOT_FORMAT: &str = "bnn-bmr-snapshot";
pub const SNAPSHOT_VERSION: u32 = 1;

/// Serialized network: layer specs, every parameter in canonical order, noise model.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NetSnapshot {
    pub format: String,
    pub version: u32,
    pub layers: Vec<LayerSpec>,
    pub sequence_len: usize,
    pub params: Vec<Vec<MeanFieldParam>>,
    pub noise: NoiseModel,
    /// Run record of the experiment that produced the network, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<serde_json::Value>,
}

impl MeanFieldNet {
    pub fn to_snapshot(&self, manifest: Option<serde_json::Value>) -> NetSnapshot {
        let params = self
            .blocks
            .iter()
            .map(|layer| {
                layer
                    .iter()
                    .flat_map(|b| {
                        b.mu.iter()
                            .zip(&b.rho)
                            .zip(b.prior_mean.iter().zip(&b.prior_var))
                            .zip(&b.mask)
                            .map(|(((&mu, &rho), (&pm, &pv)), &mask)| MeanFieldParam {
                                mu_hat: mu,
                                rho,
                                prior: Gaussian1D {
                                    mean: pm,
                                    variance: pv,
                                },
                                pruned: mask == 0.0,
                            })
                    })
                    .collect()
            })
            .collect();
        NetSnapshot {
            format: SNAPSHOT_FORMAT.into(),
            version: SNAPSHOT_VERSION,
            layers: self.layers.clone(),
            sequence_len: self.sequence_len,
            params,
            noise: self.noise.clone(),
            manifest,
        }
    }

    pub fn from_snapshot(snap: &NetSnapshot) -> Result<Self> {
        if snap.format != SNAPSHOT_FORMAT || snap.version != SNAPSHOT_VERSION {
            return Err(Error::Snapshot(format!(
                "expected {SNAPSHOT_FORMAT} v{SNAPSHOT_VERSION}, found {} v{}",
                snap.format, snap.version
            )));
        }
        let m = snap.noise.dims();
        if snap.noise.log_shape.len() != m || snap.noise.log_rate.len() != m {
            return Err(Error::Snapshot("noise model lengths disagree".into()));
        }
        let mut net = Self::at_prior(
            snap.layers.clone(),
            snap.sequence_len,
            PriorSettings::default(),
            m,
        )?;
        if snap.params.len() != net.layers.len() {
            return Err(Error::Snapshot("layer count does not match parameters".into()));
        }
        for (l, (layer, values)) in net.blocks.iter_mut().zip(&snap.params).enumerate() {
            let expected: usize = layer.iter().map(ParamBlock::len).sum();
            if values.len() != expected {
                return Err(Error::Snapshot(format!(
                    "layer {l} has {} parameters, expected {expected}",
                    values.len()
                )));
            }
            let mut it = values.iter();
            for block in layer.iter_mut() {
                for ((((mu, rho), pm), pv), mask) in block
                    .mu
                    .iter_mut()
                    .zip(block.rho.iter_mut())
                    .zip(block.prior_mean.iter_mut())
                    .zip(block.prior_var.iter_mut())
                    .zip(block.mask.iter_mut())
                {
                    let p = it.next().expect("length checked");
                    Gaussian1D::new(p.prior.mean, p.prior.variance)?;
                    *mu = p.mu_hat;
                    *rho = p.rho;
                    *pm = p.prior.mean;
                    *pv = p.prior.variance;
                    *mask = if p.pruned { 0.0 } else { 1.0 };
                }
            }
        }
        for g in &snap.noise.prior {
            Gamma1D::new(g.shape, g.rate)?;
        }
        net.noise = snap.noise.clone();
        Ok(net)
    }

    pub fn save(&self, path: &Path, manifest: Option<serde_json::Value>) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.to_snapshot(manifest))
            .map_err(|e| Error::json(path, e))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<(Self, Option<serde_json::Value>)> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let snap: NetSnapshot = serde_json::from_str(&text).map_err(|e| Error::json(path, e))?;
        Ok((Self::from_snapshot(&snap)?, snap.manifest))
    }
}
