//! Bayesian model reduction for Gaussian parameters, and the SNR/SPR
//! ranking baselines.
//!
//! Replacing a parameter's prior `p` by a shrunken prior `p̃ = N(0, ε)`
//! changes the free energy by `ΔF = -ln ∫ q p̃ / p dθ`. A parameter is
//! prunable when `ΔF <= 0`: adopting the reduced prior does not make the
//! free energy worse.

use std::cmp::Ordering;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::dists::{from_natural, to_natural, Gaussian1D, NaturalGaussian};
use crate::error::{Error, Result};

/// Location of a scalar parameter: layer index and row-major index within
/// the layer's concatenated parameter blocks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct ParamId {
    pub layer: usize,
    pub index: usize,
}

impl ParamId {
    pub fn new(layer: usize, index: usize) -> Self {
        Self { layer, index }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ReducedPriorConfig {
    pub epsilon: f64,
    pub reduced_mean: f64,
}

impl Default for ReducedPriorConfig {
    fn default() -> Self {
        Self {
            epsilon: 1e-16,
            reduced_mean: 0.0,
        }
    }
}

impl ReducedPriorConfig {
    pub fn new(epsilon: f64) -> Result<Self> {
        if !(epsilon > 0.0 && epsilon.is_finite()) {
            return Err(Error::InvalidParameter(format!(
                "reduced prior variance {epsilon} must be positive and finite"
            )));
        }
        Ok(Self {
            epsilon,
            reduced_mean: 0.0,
        })
    }

    pub fn prior(&self) -> NaturalGaussian {
        NaturalGaussian {
            eta: self.reduced_mean / self.epsilon,
            lambda: 1.0 / self.epsilon,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Criterion {
    #[serde(rename = "bmr")]
    BmrDeltaF,
    Snr,
    Spr,
}

impl Criterion {
    pub fn name(self) -> &'static str {
        match self {
            Criterion::BmrDeltaF => "bmr",
            Criterion::Snr => "snr",
            Criterion::Spr => "spr",
        }
    }
}

impl fmt::Display for Criterion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl std::str::FromStr for Criterion {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_lowercase().as_str() {
            "bmr" => Ok(Criterion::BmrDeltaF),
            "snr" => Ok(Criterion::Snr),
            "spr" => Ok(Criterion::Spr),
            other => Err(Error::Config(format!("unknown pruning method {other:?}"))),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PruneScore {
    pub param_id: ParamId,
    pub value: f64,
    pub criterion: Criterion,
}

fn reduced_product(
    q: Gaussian1D,
    p: Gaussian1D,
    reduced: ReducedPriorConfig,
) -> Result<(NaturalGaussian, NaturalGaussian, NaturalGaussian, NaturalGaussian)> {
    let nq = to_natural(q);
    let np = to_natural(p);
    let nr = reduced.prior();
    let star = nq + nr - np;
    if !(star.lambda > 0.0) {
        return Err(Error::NonPositivePrecision(star.lambda));
    }
    Ok((nq, np, nr, star))
}

/// Change in free energy from swapping the prior `p` for `N(m̃, ε)`.
pub fn delta_f_gaussian(q: Gaussian1D, p: Gaussian1D, reduced: ReducedPriorConfig) -> Result<f64> {
    let (nq, np, nr, star) = reduced_product(q, p, reduced)?;
    // ln(λq λr / (λp λ*)) with λ* = λr (1 + (λq - λp)/λr) kept in log space
    let log_det = (nq.lambda / np.lambda).ln() - ((nq.lambda - np.lambda) / nr.lambda).ln_1p();
    // η*²/λ* − ηr²/λr expanded around the reduced prior: with a = ηq − ηp and
    // c = λq − λp it equals (a² + λr m̃ (2a − c m̃)) / λ*, which avoids
    // subtracting two terms of order m̃²/ε
    let (a, c, m) = (nq.eta - np.eta, nq.lambda - np.lambda, reduced.reduced_mean);
    let reduced_part = a * a / star.lambda + m * (2.0 * a - c * m) / (1.0 + c / nr.lambda);
    let quad = reduced_part - nq.eta * nq.eta / nq.lambda + np.eta * np.eta / np.lambda;
    Ok(-0.5 * log_det - 0.5 * quad)
}

/// Normalized `q p̃ / p`.
pub fn reduced_posterior_gaussian(
    q: Gaussian1D,
    p: Gaussian1D,
    reduced: ReducedPriorConfig,
) -> Result<Gaussian1D> {
    let (_, _, _, star) = reduced_product(q, p, reduced)?;
    from_natural(star)
}

pub fn score_snr(q: Gaussian1D) -> f64 {
    q.mean.abs() / q.std_dev()
}

pub fn score_spr(q: Gaussian1D) -> f64 {
    q.mean.abs() + q.std_dev()
}

/// Score one posterior/prior pair under `criterion`.
pub fn score(
    criterion: Criterion,
    q: Gaussian1D,
    p: Gaussian1D,
    reduced: ReducedPriorConfig,
) -> Result<f64> {
    match criterion {
        Criterion::BmrDeltaF => delta_f_gaussian(q, p, reduced),
        Criterion::Snr => Ok(score_snr(q)),
        Criterion::Spr => Ok(score_spr(q)),
    }
}

fn rank_order(a: &PruneScore, b: &PruneScore) -> Ordering {
    a.value
        .total_cmp(&b.value)
        .then_with(|| a.param_id.cmp(&b.param_id))
}

/// Sort scores ascending, ties broken by parameter id.
pub fn rank(scores: &[PruneScore]) -> Vec<PruneScore> {
    let mut sorted = scores.to_vec();
    sorted.sort_by(rank_order);
    sorted
}

/// Number of parameters pruned at `rate` out of `n`, rounded down.
pub fn budget_count(rate: f64, n: usize) -> usize {
    // guard against 0.29 * 100 = 28.999...
    let raw = rate * n as f64;
    let nearest = raw.round();
    let count = if (raw - nearest).abs() < 1e-9 * n.max(1) as f64 {
        nearest
    } else {
        raw.floor()
    };
    (count.max(0.0) as usize).min(n)
}

/// Pick the parameters to prune, in ascending score order.
///
/// BMR without a budget returns every parameter with `ΔF <= 0`. With a
/// budget (mandatory for SNR and SPR) the lowest `⌊budget·n⌋` are returned.
pub fn select_prunable(
    scores: &[PruneScore],
    criterion: Criterion,
    budget: Option<f64>,
) -> Result<Vec<PruneScore>> {
    if let Some(bad) = scores.iter().find(|s| s.criterion != criterion) {
        return Err(Error::MixedCriteria {
            expected: criterion.name(),
            found: bad.criterion.name(),
        });
    }
    if let Some(rate) = budget {
        if !(0.0..=1.0).contains(&rate) {
            return Err(Error::Config(format!("pruning rate {rate} is outside [0, 1]")));
        }
    }
    let sorted = rank(scores);
    match (criterion, budget) {
        (Criterion::BmrDeltaF, None) => Ok(sorted.into_iter().take_while(|s| s.value <= 0.0).collect()),
        (_, None) => Err(Error::MissingBudget(criterion.name())),
        (_, Some(rate)) => {
            let k = budget_count(rate, sorted.len());
            Ok(sorted.into_iter().take(k).collect())
        }
    }
}
