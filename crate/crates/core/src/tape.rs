//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every operation as it is evaluated. Calling
//! [`Tape::backward`] on a scalar (1x1) node walks the record in reverse and
//! accumulates the adjoint of every node that depends on a differentiable
//! leaf. Constants are leaves created with [`Tape::constant`]; their
//! adjoints are never computed.
//!
//! Broadcasting is explicit: `add_row`/`mul_row` combine an `n x m` node
//! with a `1 x m` row, everything else is shape-preserving or a matmul.

use ndarray::{Array2, Axis, Zip};

use crate::special::{
    digamma, ln_gamma, sigmoid, softplus, std_normal_cdf, std_normal_pdf, trigamma,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MatMul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sqrt(Var),
    Exp(Var),
    Ln(Var),
    Softplus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    ReluMean(Var, Var),
    ReluSecond(Var, Var),
    Digamma(Var),
    LnGamma(Var),
    Sum(Var),
    SumRows(Var),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    needs_grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    /// Adjoint of `v`, or `None` when `v` does not influence the output.
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Differentiable input.
    pub fn variable(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn scalar_constant(&mut self, value: f64) -> Var {
        self.constant(Array2::from_elem((1, 1), value))
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    /// Value of a 1x1 node.
    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        debug_assert_eq!(value.dim(), (1, 1));
        value[[0, 0]]
    }

    fn push(&mut self, value: Array2<f64>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Var {
        let value = self.value(a).mapv(f);
        let needs = self.nodes[a.0].needs_grad;
        self.push(value, op, needs)
    }

    fn binary_needs(&self, a: Var, b: Var) -> bool {
        self.nodes[a.0].needs_grad || self.nodes[b.0].needs_grad
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) + self.value(b);
        let needs = self.binary_needs(a, b);
        self.push(value, Op::Add(a, b), needs)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) - self.value(b);
        let needs = self.binary_needs(a, b);
        self.push(value, Op::Sub(a, b), needs)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a) * self.value(b);
        let needs = self.binary_needs(a, b);
        self.push(value, Op::Mul(a, b), needs)
    }

    /// `a + row` with `row` broadcast over the rows of `a`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) + self.value(row);
        let needs = self.binary_needs(a, row);
        self.push(value, Op::AddRow(a, row), needs)
    }

    /// `a * row` with `row` broadcast over the rows of `a`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Var {
        debug_assert_eq!(self.value(row).nrows(), 1);
        let value = self.value(a) * self.value(row);
        let needs = self.binary_needs(a, row);
        self.push(value, Op::MulRow(a, row), needs)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).dot(self.value(b));
        let needs = self.binary_needs(a, b);
        self.push(value, Op::MatMul(a, b), needs)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::Scale(a, c), |x| c * x)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, Op::AddScalar(a), |x| x + c)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Op::Square(a), |x| x * x)
    }

    /// Square root; the derivative at zero is taken as zero.
    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sqrt(a), |x| x.max(0.0).sqrt())
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn ln(&mut self, a: Var) -> Var {
        self.unary(a, Op::Ln(a), f64::ln)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    /// `E[max(z, 0)]` for `z ~ N(mean, var)`, element-wise.
    pub fn relu_mean(&mut self, mean: Var, var: Var) -> Var {
        let mut value = self.value(mean).clone();
        Zip::from(&mut value)
            .and(self.value(var))
            .for_each(|m, &v| *m = crate::dists::relu_moments(*m, v.max(0.0)).0);
        let needs = self.binary_needs(mean, var);
        self.push(value, Op::ReluMean(mean, var), needs)
    }

    /// `E[max(z, 0)^2]` for `z ~ N(mean, var)`, element-wise.
    pub fn relu_second(&mut self, mean: Var, var: Var) -> Var {
        let mut value = self.value(mean).clone();
        Zip::from(&mut value)
            .and(self.value(var))
            .for_each(|m, &v| *m = crate::dists::relu_moments(*m, v.max(0.0)).1);
        let needs = self.binary_needs(mean, var);
        self.push(value, Op::ReluSecond(mean, var), needs)
    }

    pub fn digamma(&mut self, a: Var) -> Var {
        self.unary(a, Op::Digamma(a), digamma)
    }

    pub fn ln_gamma(&mut self, a: Var) -> Var {
        self.unary(a, Op::LnGamma(a), ln_gamma)
    }

    /// Sum of all entries, as a 1x1 node.
    pub fn sum(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let needs = self.nodes[a.0].needs_grad;
        self.push(value, Op::Sum(a), needs)
    }

    /// Column sums, as a `1 x m` node.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let value = self.value(a).sum_axis(Axis(0)).insert_axis(Axis(0));
        let needs = self.nodes[a.0].needs_grad;
        self.push(value, Op::SumRows(a), needs)
    }

    /// Reverse sweep from the 1x1 node `root`.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.value(root).dim(), (1, 1), "backward needs a scalar root");
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Array2::ones((1, 1)));

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(node, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn propagate(&self, node: &Node, g: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let val = |v: Var| &self.nodes[v.0].value;
        let mut acc = |v: Var, contribution: Array2<f64>| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &contribution,
                slot @ None => *slot = Some(contribution),
            }
        };
        let wants = |v: Var| self.nodes[v.0].needs_grad;

        match node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(a, g.clone());
                acc(b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(a, g.clone());
                if wants(b) {
                    acc(b, -g);
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    acc(a, g * val(b));
                }
                if wants(b) {
                    acc(b, g * val(a));
                }
            }
            Op::AddRow(a, row) => {
                acc(a, g.clone());
                if wants(row) {
                    acc(row, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MulRow(a, row) => {
                if wants(a) {
                    acc(a, g * val(row));
                }
                if wants(row) {
                    acc(row, (g * val(a)).sum_axis(Axis(0)).insert_axis(Axis(0)));
                }
            }
            Op::MatMul(a, b) => {
                if wants(a) {
                    acc(a, g.dot(&val(b).t()));
                }
                if wants(b) {
                    acc(b, val(a).t().dot(g));
                }
            }
            Op::Scale(a, c) => acc(a, g * c),
            Op::AddScalar(a) => acc(a, g.clone()),
            Op::Square(a) => acc(a, g * val(a) * 2.0),
            Op::Sqrt(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(&node.value)
                    .for_each(|d, &y| *d = if y > 0.0 { *d * 0.5 / y } else { 0.0 });
                acc(a, d);
            }
            Op::Exp(a) => acc(a, g * &node.value),
            Op::Ln(a) => acc(a, g / val(a)),
            Op::Softplus(a) => acc(a, g * &val(a).mapv(sigmoid)),
            Op::Sigmoid(_) | Op::Tanh(_) => {
                let a = match node.op {
                    Op::Sigmoid(a) | Op::Tanh(a) => a,
                    _ => unreachable!(),
                };
                let is_sigmoid = matches!(node.op, Op::Sigmoid(_));
                let mut d = g.clone();
                Zip::from(&mut d).and(&node.value).for_each(|d, &y| {
                    *d *= if is_sigmoid { y * (1.0 - y) } else { 1.0 - y * y };
                });
                acc(a, d);
            }
            Op::Relu(a) => {
                let mut d = g.clone();
                Zip::from(&mut d)
                    .and(val(a))
                    .for_each(|d, &x| if x <= 0.0 { *d = 0.0 });
                acc(a, d);
            }
            Op::ReluMean(m, v) | Op::ReluSecond(m, v) => {
                let second = matches!(node.op, Op::ReluSecond(..));
                let mut dm = g.clone();
                let mut dv = g.clone();
                Zip::from(&mut dm)
                    .and(&mut dv)
                    .and(val(m))
                    .and(val(v))
                    .for_each(|dm, dv, &mean, &var| {
                        let (pm, pv) = relu_moment_partials(mean, var.max(0.0), second);
                        *dm *= pm;
                        *dv *= pv;
                    });
                acc(m, dm);
                acc(v, dv);
            }
            Op::Digamma(a) => acc(a, g * &val(a).mapv(trigamma)),
            Op::LnGamma(a) => acc(a, g * &val(a).mapv(digamma)),
            Op::Sum(a) => acc(a, Array2::from_elem(val(a).dim(), g[[0, 0]])),
            Op::SumRows(a) => {
                let n = val(a).nrows();
                let d = g.broadcast((n, g.ncols())).expect("row broadcast").to_owned();
                acc(a, d);
            }
        }
    }
}

/// Partial derivatives of the rectified-Gaussian moments with respect to
/// the pre-activation mean and variance.
///
/// With `r = m / s`: `dE[h]/dm = Φ(r)`, `dE[h]/dv = φ(r) / 2s`,
/// `dE[h²]/dm = 2 E[h]`, `dE[h²]/dv = Φ(r)`.
fn relu_moment_partials(m: f64, v: f64, second: bool) -> (f64, f64) {
    if v <= 0.0 {
        let on = if m > 0.0 { 1.0 } else { 0.0 };
        return if second {
            (2.0 * m.max(0.0), on)
        } else {
            (on, 0.0)
        };
    }
    let s = v.sqrt();
    let r = m / s;
    let cdf = std_normal_cdf(r);
    let pdf = std_normal_pdf(r);
    if second {
        (2.0 * (m * cdf + s * pdf), cdf)
    } else {
        (cdf, pdf / (2.0 * s))
    }
}
