//! Independent numerical oracles shared by the integration tests.
#![allow(dead_code)]

pub mod suites;

use std::collections::BinaryHeap;

use statrs::function::gamma::ln_gamma;

const XK: [f64; 8] = [
    0.991_455_371_120_812_6,
    0.949_107_912_342_758_5,
    0.864_864_423_359_769_1,
    0.741_531_185_599_394_4,
    0.586_087_235_467_691_1,
    0.405_845_151_377_397_2,
    0.207_784_955_007_898_5,
    0.0,
];
const WK: [f64; 8] = [
    0.022_935_322_010_529_22,
    0.063_092_092_629_978_55,
    0.104_790_010_322_250_2,
    0.140_653_259_715_525_9,
    0.169_004_726_639_267_9,
    0.190_350_578_064_785_4,
    0.204_432_940_075_298_9,
    0.209_482_141_084_727_8,
];
// Gauss weights for the odd Kronrod nodes (1, 3, 5, 7)
const WG: [f64; 4] = [
    0.129_484_966_168_869_7,
    0.279_705_391_489_276_7,
    0.381_830_050_505_118_9,
    0.417_959_183_673_469_4,
];

fn gk15<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
    let c = 0.5 * (a + b);
    let h = 0.5 * (b - a);
    let fc = f(c);
    let mut kronrod = WK[7] * fc;
    let mut gauss = WG[3] * fc;
    for i in 0..7 {
        let dx = h * XK[i];
        let pair = f(c - dx) + f(c + dx);
        kronrod += WK[i] * pair;
        if i % 2 == 1 {
            gauss += WG[i / 2] * pair;
        }
    }
    (kronrod * h, ((kronrod - gauss) * h).abs())
}

struct Piece {
    err: f64,
    a: f64,
    b: f64,
    value: f64,
}

impl PartialEq for Piece {
    fn eq(&self, other: &Self) -> bool {
        self.err == other.err
    }
}
impl Eq for Piece {}
impl PartialOrd for Piece {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Piece {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.err.total_cmp(&other.err)
    }
}

/// Globally adaptive 7/15-point Gauss–Kronrod quadrature over the given
/// breakpoints. Splits the interval with the largest error estimate until
/// the summed estimate meets `max(abs_tol, rel_tol·|I|)`.
pub fn integrate<F: Fn(f64) -> f64>(f: F, breaks: &[f64], abs_tol: f64, rel_tol: f64) -> f64 {
    let mut heap = BinaryHeap::new();
    let (mut total, mut err) = (0.0, 0.0);
    for w in breaks.windows(2) {
        let (value, e) = gk15(&f, w[0], w[1]);
        total += value;
        err += e;
        heap.push(Piece {
            err: e,
            a: w[0],
            b: w[1],
            value,
        });
    }
    for _ in 0..5_000 {
        if err <= abs_tol.max(rel_tol * total.abs()) {
            break;
        }
        let worst = heap.pop().expect("non-empty");
        total -= worst.value;
        err -= worst.err;
        let mid = 0.5 * (worst.a + worst.b);
        for (a, b) in [(worst.a, mid), (mid, worst.b)] {
            let (value, e) = gk15(&f, a, b);
            total += value;
            err += e;
            heap.push(Piece { err: e, a, b, value });
        }
    }
    heap.iter().map(|p| p.value).sum()
}

pub fn normal_ln_pdf(x: f64, mean: f64, var: f64) -> f64 {
    -0.5 * ((2.0 * std::f64::consts::PI * var).ln() + (x - mean).powi(2) / var)
}

/// Log density of `ln x` when `x ~ Gamma(shape, rate)`.
pub fn log_gamma_ln_pdf(t: f64, shape: f64, rate: f64) -> f64 {
    shape * rate.ln() + shape * t - rate * t.exp() - ln_gamma(shape)
}

/// Breakpoints covering `ln x` for `x ~ Gamma(shape, rate)` out to where the
/// density is below `e^-700` of its peak, spaced geometrically away from the
/// mode so that no single panel hides a narrow feature.
pub fn log_gamma_support(shape: f64, rate: f64) -> Vec<f64> {
    let mode = (shape / rate).ln();
    let peak = log_gamma_ln_pdf(mode, shape, rate);
    let below = |t: f64| log_gamma_ln_pdf(t, shape, rate) < peak - 700.0;
    let unit = (1.0 / shape.sqrt()).min(1.0) / 8.0;
    let mut left = vec![mode];
    let mut d = unit;
    while !below(mode - d) {
        left.push(mode - d);
        d *= 2.0;
    }
    left.push(mode - d);
    let mut right = Vec::new();
    let mut d = unit;
    while !below(mode + d) {
        right.push(mode + d);
        d *= 2.0;
    }
    right.push(mode + d);
    left.reverse();
    left.extend(right);
    left
}

/// Breakpoints for a Gaussian-shaped integrand centred at `mean` with spread `sd`.
pub fn gaussian_support(mean: f64, sd: f64) -> Vec<f64> {
    [-40.0, -8.0, -3.0, -1.0, 0.0, 1.0, 3.0, 8.0, 40.0]
        .iter()
        .map(|k| mean + k * sd)
        .collect()
}

pub fn rel_err(got: f64, want: f64) -> f64 {
    if want == 0.0 {
        got.abs()
    } else {
        ((got - want) / want).abs()
    }
}

/// Asymptotic two-sample Kolmogorov–Smirnov statistic `sup |F1 - F2|`.
pub fn ks_statistic(a: &[f64], b: &[f64]) -> f64 {
    let mut a = a.to_vec();
    let mut b = b.to_vec();
    a.sort_by(f64::total_cmp);
    b.sort_by(f64::total_cmp);
    let (mut i, mut j, mut d) = (0usize, 0usize, 0.0f64);
    while i < a.len() && j < b.len() {
        let x = a[i].min(b[j]);
        while i < a.len() && a[i] <= x {
            i += 1;
        }
        while j < b.len() && b[j] <= x {
            j += 1;
        }
        d = d.max((i as f64 / a.len() as f64 - j as f64 / b.len() as f64).abs());
    }
    d
}

/// Mean and standard error of a sample.
pub fn mean_and_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}
