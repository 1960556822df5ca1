//! Oracle suites shared by the integration tests and the acceptance runner.
//! Each returns an [`Outcome`] instead of panicking so the runner can report
//! every criterion.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use bnn_bmr::bmr::{delta_f_gaussian, ParamId, ReducedPriorConfig};
use bnn_bmr::dists::{gamma_kl, gamma_moments, gaussian_kl, relu_moments, Gamma1D, Gaussian1D};
use bnn_bmr::grad::vfe_gradient;
use bnn_bmr::harness::{export_prune_region, zero_contour, RegionGrid};
use bnn_bmr::net::{Activation, ForwardMode, LayerSpec, MeanFieldNet, PriorSettings};
use bnn_bmr::special::softplus_inv;

use super::{
    gaussian_support, integrate, ks_statistic, log_gamma_ln_pdf, log_gamma_support, mean_and_se,
    normal_ln_pdf, rel_err,
};

#[derive(Debug, Clone)]
pub struct Outcome {
    pub passed: bool,
    pub detail: String,
}

impl Outcome {
    pub fn new(passed: bool, detail: impl Into<String>) -> Self {
        Self {
            passed,
            detail: detail.into(),
        }
    }

    pub fn all(parts: Vec<Outcome>) -> Outcome {
        let passed = parts.iter().all(|o| o.passed);
        let detail = parts
            .iter()
            .map(|o| o.detail.as_str())
            .collect::<Vec<_>>()
            .join("; ");
        Outcome { passed, detail }
    }
}

fn log_uniform<R: Rng>(rng: &mut R, lo: f64, hi: f64) -> f64 {
    (rng.random_range(lo.ln()..hi.ln())).exp()
}

/// `∫ q ln(q/p)` by quadrature over `q`'s support.
fn gaussian_kl_quadrature(q: Gaussian1D, p: Gaussian1D) -> f64 {
    let f = |x: f64| {
        let lq = normal_ln_pdf(x, q.mean, q.variance);
        lq.exp() * (lq - normal_ln_pdf(x, p.mean, p.variance))
    };
    integrate(f, &gaussian_support(q.mean, q.variance.sqrt()), 1e-300, 1e-13)
}

/// Same integral in `t = ln x`, where the Jacobian cancels inside the log ratio.
fn gamma_kl_quadrature(q: Gamma1D, p: Gamma1D) -> f64 {
    let f = |t: f64| {
        let lq = log_gamma_ln_pdf(t, q.shape, q.rate);
        lq.exp() * (lq - log_gamma_ln_pdf(t, p.shape, p.rate))
    };
    integrate(f, &log_gamma_support(q.shape, q.rate), 1e-300, 1e-13)
}

/// Both KL divergences against quadrature on `draws` random pairs each.
pub fn kl_quadrature(draws: usize, tol: f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst_gauss = 0.0f64;
    let mut worst_gamma = 0.0f64;
    for _ in 0..draws {
        let q = Gaussian1D::new(rng.random_range(-5.0..5.0), log_uniform(&mut rng, 1e-3, 1e3)).unwrap();
        let p = Gaussian1D::new(rng.random_range(-5.0..5.0), log_uniform(&mut rng, 1e-3, 1e3)).unwrap();
        worst_gauss = worst_gauss.max(rel_err(gaussian_kl(q, p), gaussian_kl_quadrature(q, p)));

        let q = Gamma1D::new(log_uniform(&mut rng, 1e-3, 1e3), log_uniform(&mut rng, 1e-3, 1e3)).unwrap();
        let p = Gamma1D::new(log_uniform(&mut rng, 1e-3, 1e3), log_uniform(&mut rng, 1e-3, 1e3)).unwrap();
        worst_gamma = worst_gamma.max(rel_err(gamma_kl(q, p), gamma_kl_quadrature(q, p)));
    }
    Outcome::new(
        worst_gauss <= tol && worst_gamma <= tol,
        format!("KL vs quadrature, {draws} draws: max rel err gaussian {worst_gauss:.2e}, gamma {worst_gamma:.2e} (tol {tol:.0e})"),
    )
}

/// `E[x]` and `E[ln x]` against quadrature. `E[ln x]` can sit at zero, so its
/// error is taken relative to `max(|E ln x|, 1)`.
pub fn gamma_moments_quadrature(draws: usize, tol: f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let g = Gamma1D::new(log_uniform(&mut rng, 1e-3, 1e3), log_uniform(&mut rng, 1e-3, 1e3)).unwrap();
        let breaks = log_gamma_support(g.shape, g.rate);
        let density = |t: f64| log_gamma_ln_pdf(t, g.shape, g.rate).exp();
        let mean = integrate(|t| density(t) * t.exp(), &breaks, 1e-300, 1e-13);
        let mean_log = integrate(|t| density(t) * t, &breaks, 1e-300, 1e-13);
        let (m, ml) = gamma_moments(g);
        worst = worst
            .max(rel_err(m, mean))
            .max((ml - mean_log).abs() / mean_log.abs().max(1.0));
    }
    Outcome::new(
        worst <= tol,
        format!("gamma moments vs quadrature, {draws} draws: max err {worst:.2e} (tol {tol:.0e})"),
    )
}

/// ReLU moments against Monte Carlo, within `k` standard errors.
pub fn relu_monte_carlo(pairs: usize, samples: usize, k: f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mut worst = 0.0f64;
    let mut ordered = true;
    let mut clipped = (0, true);
    for _ in 0..pairs {
        let m: f64 = rng.random_range(-3.0..3.0);
        let s: f64 = rng.random_range(0.01..3.0);
        let mut first = Vec::with_capacity(samples);
        let mut second = Vec::with_capacity(samples);
        for _ in 0..samples {
            let z: f64 = m + s * rng.sample::<f64, _>(StandardNormal);
            let h = z.max(0.0);
            first.push(h);
            second.push(h * h);
        }
        let (mean, se1) = mean_and_se(&first);
        let (sq, se2) = mean_and_se(&second);
        let (e1, e2) = relu_moments(m, s * s);
        if se1 > 0.0 {
            worst = worst.max((e1 - mean).abs() / se1).max((e2 - sq).abs() / se2);
        } else {
            // no draw survived the ReLU: by the rule of three P(z > 0) < 3/n,
            // and E[z | z > 0] stays below |m| + 3s
            let reach = m.abs() + 3.0 * s;
            let bound = 3.0 / samples as f64;
            clipped.0 += 1;
            clipped.1 &= e1 <= bound * reach && e2 <= bound * reach * reach;
        }
        ordered &= e2 >= e1 * e1;
    }
    Outcome::new(
        worst <= k && ordered && clipped.1,
        format!(
            "relu moments vs MC, {pairs} pairs x {samples}: max deviation {worst:.2} SE (limit {k}), E[h²] ≥ E[h]²: {ordered}, {} fully clipped pairs within the zero-hit bound: {}",
            clipped.0, clipped.1
        ),
    )
}

/// `−ln ∫ q p̃ / p` by quadrature around the reduced prior, in log space.
fn delta_f_quadrature(q: Gaussian1D, p: Gaussian1D, eps: f64) -> f64 {
    let g = |w: f64| {
        normal_ln_pdf(w, q.mean, q.variance) + normal_ln_pdf(w, 0.0, eps)
            - normal_ln_pdf(w, p.mean, p.variance)
    };
    let g0 = g(0.0);
    let integral = integrate(|w| (g(w) - g0).exp(), &gaussian_support(0.0, eps.sqrt()), 1e-300, 1e-13);
    -(g0 + integral.ln())
}

/// Closed-form ΔF against quadrature on random configurations.
pub fn delta_f_oracle(draws: usize, tol: f64) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(21);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let mu = rng.random_range(-3.0..3.0);
        let var = log_uniform(&mut rng, 1e-4, 10.0);
        let prior_var = rng.random_range(0.1..10.0);
        let eps = log_uniform(&mut rng, 1e-16, 1e-8);
        let q = Gaussian1D::new(mu, var).unwrap();
        let p = Gaussian1D::new(0.0, prior_var).unwrap();
        let got = delta_f_gaussian(q, p, ReducedPriorConfig::new(eps).unwrap()).unwrap();
        worst = worst.max(rel_err(got, delta_f_quadrature(q, p, eps)));
    }
    let secs = start.elapsed().as_secs_f64();
    Outcome::new(
        worst <= tol && secs < 10.0,
        format!("ΔF vs quadrature, {draws} draws: max rel err {worst:.2e} (tol {tol:.0e}), {secs:.2}s (limit 10s)"),
    )
}

/// At ε = 1e-16 with zero-mean priors, ΔF against ½[μ̂²/σ̂² − ln(σ²_p/σ̂²)].
pub fn delta_f_limit(draws: usize, tol: f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(22);
    let mut worst = 0.0f64;
    for _ in 0..draws {
        let mu: f64 = rng.random_range(-3.0..3.0);
        let var = log_uniform(&mut rng, 1e-4, 10.0);
        let prior_var: f64 = rng.random_range(0.1..10.0);
        let limit = 0.5 * (mu * mu / var - (prior_var / var).ln());
        let got = delta_f_gaussian(
            Gaussian1D::new(mu, var).unwrap(),
            Gaussian1D::new(0.0, prior_var).unwrap(),
            ReducedPriorConfig::default(),
        )
        .unwrap();
        worst = worst.max((got - limit).abs());
    }
    Outcome::new(
        worst <= tol,
        format!("ΔF vs ε→0 limit, {draws} draws: max abs err {worst:.2e} (tol {tol:.0e})"),
    )
}

/// `ln N(y; mean·1, noise·I + var·11ᵀ)` by Cholesky.
fn marginal_evidence(y: &[f64], mean: f64, var: f64, noise: f64) -> f64 {
    let n = y.len();
    let cov = DMatrix::from_fn(n, n, |i, j| var + if i == j { noise } else { 0.0 });
    let chol = cov.cholesky().expect("covariance is positive definite");
    let r = DVector::from_iterator(n, y.iter().map(|v| v - mean));
    let solved = chol.solve(&r);
    let log_det: f64 = 2.0 * chol.l().diagonal().iter().map(|d| d.ln()).sum::<f64>();
    -0.5 * (n as f64 * (2.0 * std::f64::consts::PI).ln() + log_det + r.dot(&solved))
}

/// One-parameter Gaussian-mean model with known noise: the reduced evidence
/// `ln p(Y) − ΔF` from the exact posterior against the reduced model's own
/// evidence.
pub fn conjugate_exactness(cases: usize, tol: f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(31);
    let mut worst = 0.0f64;
    for _ in 0..cases {
        let n = rng.random_range(1..40usize);
        let noise = log_uniform(&mut rng, 0.05, 5.0);
        let truth: f64 = rng.random_range(-2.0..2.0);
        let y: Vec<f64> = (0..n)
            .map(|_| truth + noise.sqrt() * rng.sample::<f64, _>(StandardNormal))
            .collect();
        let p = Gaussian1D::new(rng.random_range(-1.0..1.0), log_uniform(&mut rng, 0.1, 10.0)).unwrap();
        let reduced = ReducedPriorConfig {
            epsilon: log_uniform(&mut rng, 1e-6, 0.5 * p.variance),
            reduced_mean: rng.random_range(-1.0..1.0),
        };
        let lambda = 1.0 / p.variance + n as f64 / noise;
        let eta = p.mean / p.variance + y.iter().sum::<f64>() / noise;
        let q = Gaussian1D::new(eta / lambda, 1.0 / lambda).unwrap();

        let full = marginal_evidence(&y, p.mean, p.variance, noise);
        let direct = marginal_evidence(&y, reduced.reduced_mean, reduced.epsilon, noise);
        let via_bmr = full - delta_f_gaussian(q, p, reduced).unwrap();
        worst = worst.max(rel_err(via_bmr, direct));
    }
    Outcome::new(
        worst <= tol,
        format!("conjugate reduced evidence, {cases} cases: max rel err {worst:.2e} (tol {tol:.0e})"),
    )
}

fn dense_net(dims: &[usize], rng: &mut ChaCha8Rng, sigma: (f64, f64)) -> MeanFieldNet {
    let layers: Vec<LayerSpec> = dims
        .windows(2)
        .enumerate()
        .map(|(i, w)| {
            let act = if i + 2 == dims.len() {
                Activation::Identity
            } else {
                Activation::Relu
            };
            LayerSpec::dense(w[0], w[1], act)
        })
        .collect();
    let out = *dims.last().unwrap();
    let mut net = MeanFieldNet::at_prior(layers, 1, PriorSettings::default(), out).unwrap();
    randomize(&mut net, rng, sigma);
    net
}

fn randomize(net: &mut MeanFieldNet, rng: &mut ChaCha8Rng, sigma: (f64, f64)) {
    for id in net.param_ids() {
        let mu = 0.7 * rng.sample::<f64, _>(StandardNormal);
        let s = rng.random_range(sigma.0..sigma.1);
        net.set_posterior(id, mu, softplus_inv(s)).unwrap();
    }
    let noise = net.noise_mut();
    for m in 0..noise.dims() {
        noise.log_shape[m] = rng.random_range(-0.5..1.5);
        noise.log_rate[m] = rng.random_range(-0.5..0.5);
    }
}

/// Draw the weights of a dense network directly from each posterior.
fn draw_dense(net: &MeanFieldNet, rng: &mut ChaCha8Rng) -> Vec<(Array2<f64>, Array2<f64>)> {
    net.layers()
        .iter()
        .enumerate()
        .map(|(l, spec)| {
            let (i, o) = (spec.input_dim, spec.output_dim);
            let mut draw = |idx: usize| {
                let p = net.param(ParamId::new(l, idx)).unwrap();
                if p.pruned {
                    0.0
                } else {
                    p.mu_hat + p.sigma() * rng.sample::<f64, _>(StandardNormal)
                }
            };
            let w = Array2::from_shape_fn((i, o), |(r, c)| draw(r * o + c));
            let b = Array2::from_shape_fn((1, o), |(_, c)| draw(i * o + c));
            (w, b)
        })
        .collect()
}

fn dense_forward(weights: &[(Array2<f64>, Array2<f64>)], x: &Array2<f64>) -> Array2<f64> {
    let mut h = x.clone();
    let last = weights.len() - 1;
    for (l, (w, b)) in weights.iter().enumerate() {
        h = h.dot(w) + b;
        if l != last {
            h.mapv_inplace(|v| v.max(0.0));
        }
    }
    h
}

/// Moment propagation through a 2-layer ReLU network against Monte Carlo
/// over weight draws: mean and variance within `k` standard errors.
pub fn moments_monte_carlo(nets: usize, draws: usize, k: f64) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(41);
    let mut worst = 0.0f64;
    for _ in 0..nets {
        let net = dense_net(&[3, 5, 1], &mut rng, (0.05, 0.5));
        let x = Array2::from_shape_fn((1, 3), |_| rng.random_range(-1.5..1.5));
        let (mean, var) = net.forward_moments(&x).unwrap();
        let outs: Vec<f64> = (0..draws)
            .map(|_| dense_forward(&draw_dense(&net, &mut rng), &x)[[0, 0]])
            .collect();
        let (mc_mean, se_mean) = mean_and_se(&outs);
        let n = outs.len() as f64;
        let mc_var = outs.iter().map(|o| (o - mc_mean).powi(2)).sum::<f64>() / (n - 1.0);
        let m4 = outs.iter().map(|o| (o - mc_mean).powi(4)).sum::<f64>() / n;
        let se_var = ((m4 - mc_var * mc_var) / n).sqrt();
        worst = worst
            .max((mean[[0, 0]] - mc_mean).abs() / se_mean)
            .max((var[[0, 0]] - mc_var).abs() / se_var);
    }
    Outcome::new(
        worst <= k,
        format!("moment propagation vs MC, {nets} nets x {draws} draws: max deviation {worst:.2} SE (limit {k})"),
    )
}

/// Two-sample KS test at α = 0.01 between global and local sampling of one
/// datapoint's output.
pub fn global_local_ks(nets: usize, samples: usize) -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(42);
    let mut worst = 0.0f64;
    let critical = 1.628 * (2.0 / samples as f64).sqrt();
    for _ in 0..nets {
        let net = dense_net(&[2, 4, 1], &mut rng, (0.1, 0.6));
        let row = Array2::from_shape_fn((1, 2), |_| rng.random_range(-1.0..1.0));
        let global: Vec<f64> = (0..samples)
            .map(|_| net.forward_sample_global(&row, &mut rng).unwrap()[[0, 0]])
            .collect();
        let batch = Array2::from_shape_fn((samples, 2), |(_, j)| row[[0, j]]);
        let local: Vec<f64> = net.forward_sample_local(&batch, &mut rng).unwrap().iter().copied().collect();
        worst = worst.max(ks_statistic(&global, &local) / critical);
    }
    Outcome::new(
        worst <= 1.0,
        format!("global vs local KS, {nets} nets x {samples}: max D/D_crit {worst:.3} (α = 0.01)"),
    )
}

/// Floor of the denominator in the per-coordinate relative error.
pub const GRAD_FLOOR: f64 = 1e-3;

/// A random small network for the gradient check; sampled modes alternate
/// between dense and GRU front ends.
fn gradient_case(mode: ForwardMode, k: usize, rng: &mut ChaCha8Rng) -> (MeanFieldNet, Array2<f64>, Array2<f64>) {
    let out = 1 + k % 2;
    let mut net = if mode.is_sampled() && k % 2 == 1 {
        let layers = vec![LayerSpec::gru(2, 3), LayerSpec::dense(3, out, Activation::Identity)];
        MeanFieldNet::at_prior(layers, 3, PriorSettings::default(), out).unwrap()
    } else {
        let hidden = 2 + k % 4;
        let mut dims = vec![2 + k % 3, hidden];
        if k % 3 == 0 {
            dims.push(3);
        }
        dims.push(out);
        dense_net(&dims, rng, (0.05, 0.5))
    };
    randomize(&mut net, rng, (0.05, 0.5));
    if k % 5 == 4 {
        // a pruned coordinate must vanish from the gradient
        net.apply_prune(&[ParamId::new(0, 0)]).unwrap();
    }
    let rows = 4;
    let x = Array2::from_shape_fn((rows, net.input_width()), |_| rng.random_range(-1.5..1.5));
    let y = Array2::from_shape_fn((rows, out), |_| rng.random_range(-1.5..1.5));
    (net, x, y)
}

fn objective(net: &MeanFieldNet, x: &Array2<f64>, y: &Array2<f64>, mode: ForwardMode, seed: u64) -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    net.vfe(x, y, mode, 1, &mut rng).unwrap()
}

/// Reverse-mode gradient of the VFE against central differences of the
/// directly evaluated, identically seeded VFE.
pub fn gradient_gate(nets_per_mode: usize, step: f64, tol: f64) -> Outcome {
    let start = Instant::now();
    let mut rng = ChaCha8Rng::seed_from_u64(51);
    let mut parts = Vec::new();
    for mode in [ForwardMode::Moments, ForwardMode::SampleGlobal, ForwardMode::SampleLocal] {
        let mut worst = 0.0f64;
        let mut coords = 0;
        let mut shape_ok = true;
        for k in 0..nets_per_mode {
            let (net, x, y) = gradient_case(mode, k, &mut rng);
            let seed = 1000 + k as u64;
            let batch = bnn_bmr::data::Dataset::new(x.clone(), y.clone()).unwrap();
            let grad = vfe_gradient(&net, &batch, mode, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            shape_ok &= grad.len() == 2 * net.active_params() + 2 * net.noise().dims();

            let mut numeric = Vec::with_capacity(grad.len());
            for (id, p) in net.active() {
                for which in 0..2 {
                    let eval = |delta: f64| {
                        let mut n = net.clone();
                        if which == 0 {
                            n.set_posterior(id, p.mu_hat + delta, p.rho).unwrap();
                        } else {
                            n.set_posterior(id, p.mu_hat, p.rho + delta).unwrap();
                        }
                        objective(&n, &x, &y, mode, seed)
                    };
                    numeric.push((eval(step) - eval(-step)) / (2.0 * step));
                }
            }
            for m in 0..net.noise().dims() {
                for which in 0..2 {
                    let eval = |delta: f64| {
                        let mut n = net.clone();
                        let noise = n.noise_mut();
                        if which == 0 {
                            noise.log_shape[m] += delta;
                        } else {
                            noise.log_rate[m] += delta;
                        }
                        objective(&n, &x, &y, mode, seed)
                    };
                    numeric.push((eval(step) - eval(-step)) / (2.0 * step));
                }
            }
            shape_ok &= numeric.len() == grad.len();
            for (a, n) in grad.values.iter().zip(&numeric) {
                let denom = a.abs().max(n.abs()).max(GRAD_FLOOR);
                worst = worst.max((a - n).abs() / denom);
                coords += 1;
            }
        }
        parts.push(Outcome::new(
            worst <= tol && shape_ok,
            format!("{mode}: {coords} coords, max rel err {worst:.2e}"),
        ));
    }
    let secs = start.elapsed().as_secs_f64();
    let mut all = Outcome::all(parts);
    all.passed &= secs < 120.0;
    all.detail = format!(
        "gradient vs central differences (h = {step:.0e}, tol {tol:.0e}, denominator max(|a|,|n|,{GRAD_FLOOR:.0e})), {nets_per_mode} nets per mode: {}; {secs:.1}s (limit 120s)",
        all.detail
    );
    all
}

/// The ΔF zero contour against `μ̂² = −σ̂² ln σ̂²` (σ_p = 1, ε = 1e-16), and
/// the absence of a zero-level boundary for SNR and SPR.
pub fn prune_region(points: usize, tol: f64) -> Outcome {
    let prior = Gaussian1D::new(0.0, 1.0).unwrap();
    let reduced = ReducedPriorConfig::default();
    let mut worst = 0.0f64;
    let mut missing = 0;
    for i in 0..points {
        let sigma = 0.001 + (0.999 - 0.001) * i as f64 / (points - 1) as f64;
        let s2 = sigma * sigma;
        let want = (-s2 * s2.ln()).sqrt();
        match zero_contour(prior, reduced, sigma).unwrap() {
            Some(mu) => worst = worst.max((mu - want).abs()),
            None => missing += 1,
        }
    }
    let contour_ok = worst <= tol && missing == 0;

    let grid = RegionGrid::default();
    let rows = export_prune_region(prior, reduced, &grid).unwrap();
    let mut heuristics_ok = true;
    for sigma_idx in 0..grid.sigma_points {
        let slice = &rows[sigma_idx * grid.mu_points..(sigma_idx + 1) * grid.mu_points];
        for pick in [|r: &bnn_bmr::harness::RegionRow| r.snr, |r: &bnn_bmr::harness::RegionRow| r.spr] {
            let values: Vec<f64> = slice.iter().map(pick).collect();
            let (argmin, min) = values
                .iter()
                .enumerate()
                .fold((0, f64::INFINITY), |acc, (i, &v)| if v < acc.1 { (i, v) } else { acc });
            let sign_change = values.iter().any(|&v| v < 0.0) && values.iter().any(|&v| v > 0.0);
            heuristics_ok &= slice[argmin].mu == 0.0 && !sign_change && min >= 0.0;
        }
    }
    Outcome::new(
        contour_ok && heuristics_ok,
        format!(
            "ΔF zero contour on {points} σ̂ points: max |μ̂ − √(−σ̂² ln σ̂²)| {worst:.2e} (tol {tol:.0e}), {missing} missing; SNR/SPR minima at μ̂ = 0 with no sign change: {heuristics_ok}"
        ),
    )
}
