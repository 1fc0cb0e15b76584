//! Reverse-mode automatic differentiation over dense `f64` matrices.
//!
//! Every operation appends a node holding its value; [`Tape::backward`]
//! walks the nodes in reverse and accumulates adjoints. Column vectors are
//! `[N, 1]` and scalars `[1, 1]`. The objective nodes wrap a
//! [`PlanProblem`]: their adjoints are Hessian-vector products of the
//! penalty, so gradients flow through the optimizer's own gradient inputs.

use std::sync::Arc;

use ndarray::{s, Array2, Axis};
use pbs_core::problem::{Evaluation, PlanProblem};

use crate::attention::{attention_backward, attention_forward, rope_apply, HeadLayout};
use crate::error::{L2oError, Result};

pub const RMS_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Objective evaluated at one iterate; shared by the gradient, split and
/// loss nodes of that iterate.
pub struct ObjectiveAt {
    pub problem: Arc<PlanProblem>,
    pub eval: Evaluation,
    pub gradient: Vec<f64>,
}

impl ObjectiveAt {
    pub fn new(problem: Arc<PlanProblem>, x: &[f64]) -> Result<Self> {
        let eval = problem.evaluate(x)?;
        let gradient = problem.gradient_from(&eval);
        Ok(Self { problem, eval, gradient })
    }

    fn hessian_vector(&self, k: usize, u: &[f64]) -> Vec<f64> {
        self.problem.component_hessian_vector(&self.eval, k, u)
    }
}

enum Op {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    DivCol(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    ScaleBy(Var, Var),
    SafeSqrt(Var),
    Square(Var),
    RmsNorm { x: Var, gain: Var, inv_rms: Vec<f64> },
    SwiGlu(Var, Var),
    Rope { x: Var, positions: Arc<Vec<f64>>, head_dim: usize, base: f64 },
    Attention { q: Var, k: Var, v: Var, layout: HeadLayout, block: usize, lse: Array2<f64> },
    ConcatCols(Vec<Var>),
    SumAll(Var),
    StraightThrough(Var),
    ObjGrad(Var, Arc<ObjectiveAt>),
    ObjSplit { x: Var, at: Arc<ObjectiveAt>, slots: Arc<Vec<usize>> },
    ObjLoss(Var, Arc<ObjectiveAt>),
}

struct Node {
    value: Array2<f64>,
    op: Op,
    grad: bool,
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints of the leaves reachable from the root.
pub struct Gradients {
    grads: Vec<Option<Array2<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array2<f64>> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Array2<f64>> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn shape_err(what: &str, a: (usize, usize), b: (usize, usize)) -> L2oError {
    L2oError::Shape(format!("{what}: {a:?} vs {b:?}"))
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

    fn push(&mut self, value: Array2<f64>, op: Op, grad: bool) -> Var {
        self.nodes.push(Node { value, op, grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].grad)
    }

    pub fn value(&self, v: Var) -> &Array2<f64> {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value[[0, 0]]
    }

    /// Input or parameter. Only leaves with `requires_grad` receive adjoints.
    pub fn leaf(&mut self, value: Array2<f64>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Array2<f64>) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if va.ncols() != vb.nrows() {
            return Err(shape_err("matmul", va.dim(), vb.dim()));
        }
        let value = va.dot(vb);
        let g = self.needs(&[a, b]);
        Ok(self.push(value, Op::MatMul(a, b), g))
    }

    /// `a + bias` with `bias` of shape `[1, m]` broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(bias));
        if vb.nrows() != 1 || vb.ncols() != va.ncols() {
            return Err(shape_err("add_row", va.dim(), vb.dim()));
        }
        let value = va + vb;
        let g = self.needs(&[a, bias]);
        Ok(self.push(value, Op::AddRow(a, bias), g))
    }

    fn same_shape(&self, what: &str, a: Var, b: Var) -> Result<()> {
        let (da, db) = (self.value(a).dim(), self.value(b).dim());
        if da != db {
            return Err(shape_err(what, da, db));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let value = self.value(a) + self.value(b);
        let g = self.needs(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), g))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let value = self.value(a) - self.value(b);
        let g = self.needs(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), g))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let value = self.value(a) * self.value(b);
        let g = self.needs(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), g))
    }

    /// Divides every column of `a` by the column vector `b`.
    pub fn div_col(&mut self, a: Var, b: Var) -> Result<Var> {
        let (va, vb) = (self.value(a), self.value(b));
        if vb.ncols() != 1 || vb.nrows() != va.nrows() {
            return Err(shape_err("div_col", va.dim(), vb.dim()));
        }
        let value = va / vb;
        let g = self.needs(&[a, b]);
        Ok(self.push(value, Op::DivCol(a, b), g))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) * c;
        let g = self.needs(&[a]);
        self.push(value, Op::Scale(a, c), g)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a) + c;
        let g = self.needs(&[a]);
        self.push(value, Op::AddScalar(a), g)
    }

    /// `a · s` for a `[1, 1]` node `s`.
    pub fn scale_by(&mut self, a: Var, s: Var) -> Result<Var> {
        if self.value(s).dim() != (1, 1) {
            return Err(shape_err("scale_by", self.value(a).dim(), self.value(s).dim()));
        }
        let value = self.value(a) * self.scalar(s);
        let g = self.needs(&[a, s]);
        Ok(self.push(value, Op::ScaleBy(a, s), g))
    }

    /// Square root whose derivative is taken as 0 at 0.
    pub fn sqrt(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x.max(0.0).sqrt());
        let g = self.needs(&[a]);
        self.push(value, Op::SafeSqrt(a), g)
    }

    pub fn square(&mut self, a: Var) -> Var {
        let value = self.value(a).mapv(|x| x * x);
        let g = self.needs(&[a]);
        self.push(value, Op::Square(a), g)
    }

    /// Row-wise `x / sqrt(mean(x²) + eps) * gain`, gain `[1, m]`.
    pub fn rms_norm(&mut self, x: Var, gain: Var) -> Result<Var> {
        let (vx, vg) = (self.value(x), self.value(gain));
        if vg.nrows() != 1 || vg.ncols() != vx.ncols() {
            return Err(shape_err("rms_norm", vx.dim(), vg.dim()));
        }
        let m = vx.ncols() as f64;
        let inv_rms: Vec<f64> = vx
            .rows()
            .into_iter()
            .map(|r| 1.0 / (r.dot(&r) / m + RMS_EPS).sqrt())
            .collect();
        let mut value = vx.clone();
        for (mut row, &r) in value.rows_mut().into_iter().zip(&inv_rms) {
            row *= r;
            row *= &vg.row(0);
        }
        let g = self.needs(&[x, gain]);
        Ok(self.push(value, Op::RmsNorm { x, gain, inv_rms }, g))
    }

    /// `silu(gate) ⊙ up`.
    pub fn swiglu(&mut self, gate: Var, up: Var) -> Result<Var> {
        self.same_shape("swiglu", gate, up)?;
        let mut value = self.value(gate).mapv(|a| a / (1.0 + (-a).exp()));
        value *= self.value(up);
        let g = self.needs(&[gate, up]);
        Ok(self.push(value, Op::SwiGlu(gate, up), g))
    }

    pub fn rope(&mut self, x: Var, positions: Arc<Vec<f64>>, head_dim: usize, base: f64) -> Result<Var> {
        let value = rope_apply(self.value(x), &positions, head_dim, base, 1.0)?;
        let g = self.needs(&[x]);
        Ok(self.push(value, Op::Rope { x, positions, head_dim, base }, g))
    }

    pub fn attention(&mut self, q: Var, k: Var, v: Var, layout: HeadLayout, block: usize) -> Result<Var> {
        let (value, lse) = attention_forward(self.value(q), self.value(k), self.value(v), layout, block)?;
        let g = self.needs(&[q, k, v]);
        Ok(self.push(value, Op::Attention { q, k, v, layout, block, lse }, g))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let views: Vec<_> = parts.iter().map(|&p| self.value(p).view()).collect();
        let value = ndarray::concatenate(Axis(1), &views).map_err(|e| L2oError::Shape(e.to_string()))?;
        let g = self.needs(parts);
        Ok(self.push(value, Op::ConcatCols(parts.to_vec()), g))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let value = Array2::from_elem((1, 1), self.value(a).sum());
        let g = self.needs(&[a]);
        self.push(value, Op::SumAll(a), g)
    }

    /// Clamps elementwise into `[lo, hi]`; the adjoint passes through
    /// unchanged.
    pub fn clamp_straight_through(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        let value = self.value(a).mapv(|x| x.clamp(lo, hi));
        let g = self.needs(&[a]);
        self.push(value, Op::StraightThrough(a), g)
    }

    /// Gradient of the penalty at the column vector `x` as `[N, 1]`.
    pub fn objective_gradient(&mut self, x: Var, at: Arc<ObjectiveAt>) -> Var {
        let value = Array2::from_shape_vec((at.gradient.len(), 1), at.gradient.clone()).expect("column");
        let g = self.needs(&[x]);
        self.push(value, Op::ObjGrad(x, at), g)
    }

    /// Split gradients placed into `width` columns; objective `k` lands in
    /// column `slots[k]`.
    pub fn objective_split(&mut self, x: Var, at: Arc<ObjectiveAt>, slots: Arc<Vec<usize>>, width: usize) -> Result<Var> {
        let split = at.problem.split_gradients_from(&at.eval);
        if slots.len() != split.ncols() || slots.iter().any(|&s| s >= width) {
            return Err(L2oError::Layout(format!("{} slots for {} objectives in width {width}", slots.len(), split.ncols())));
        }
        let mut value = Array2::zeros((split.nrows(), width));
        for (k, &slot) in slots.iter().enumerate() {
            let mut col = value.column_mut(slot);
            col += &split.column(k);
        }
        let g = self.needs(&[x]);
        Ok(self.push(value, Op::ObjSplit { x, at, slots }, g))
    }

    pub fn objective_loss(&mut self, x: Var, at: Arc<ObjectiveAt>) -> Var {
        let value = Array2::from_elem((1, 1), at.eval.loss);
        let g = self.needs(&[x]);
        self.push(value, Op::ObjLoss(x, at), g)
    }

    /// Adjoints of the scalar `root` with respect to every leaf.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        if self.value(root).dim() != (1, 1) {
            return Err(L2oError::Shape(format!("backward root must be scalar, got {:?}", self.value(root).dim())));
        }
        let mut grads: Vec<Option<Array2<f64>>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Array2::from_elem((1, 1), 1.0));
        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.grad {
                grads[i] = None;
                continue;
            }
            let Some(up) = grads[i].take() else { continue };
            self.propagate(node, &up, &mut grads);
            if matches!(node.op, Op::Leaf) {
                grads[i] = Some(up);
            }
        }
        Ok(Gradients { grads })
    }

    fn propagate(&self, node: &Node, up: &Array2<f64>, grads: &mut [Option<Array2<f64>>]) {
        let mut acc = |v: Var, g: Array2<f64>| {
            if !self.nodes[v.0].grad {
                return;
            }
            match &mut grads[v.0] {
                Some(existing) => *existing += &g,
                slot => *slot = Some(g),
            }
        };
        let val = |v: Var| &self.nodes[v.0].value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.nodes[a.0].grad {
                    acc(*a, up.dot(&val(*b).t()));
                }
                if self.nodes[b.0].grad {
                    acc(*b, val(*a).t().dot(up));
                }
            }
            Op::AddRow(a, bias) => {
                acc(*a, up.clone());
                acc(*bias, up.sum_axis(Axis(0)).insert_axis(Axis(0)));
            }
            Op::Add(a, b) => {
                acc(*a, up.clone());
                acc(*b, up.clone());
            }
            Op::Sub(a, b) => {
                acc(*a, up.clone());
                acc(*b, -up);
            }
            Op::Mul(a, b) => {
                acc(*a, up * val(*b));
                acc(*b, up * val(*a));
            }
            Op::DivCol(a, b) => {
                let vb = val(*b);
                acc(*a, up / vb);
                if self.nodes[b.0].grad {
                    // d(a/b)/db = -a/b² = -out/b
                    let g = (up * &node.value).sum_axis(Axis(1)).insert_axis(Axis(1));
                    acc(*b, -(g / vb));
                }
            }
            Op::Scale(a, c) => acc(*a, up * *c),
            Op::AddScalar(a) => acc(*a, up.clone()),
            Op::ScaleBy(a, s) => {
                let sv = val(*s)[[0, 0]];
                acc(*a, up * sv);
                acc(*s, Array2::from_elem((1, 1), (up * val(*a)).sum()));
            }
            Op::SafeSqrt(a) => {
                let mut g = up.clone();
                g.zip_mut_with(&node.value, |u, &r| *u = if r > 0.0 { *u * 0.5 / r } else { 0.0 });
                acc(*a, g);
            }
            Op::Square(a) => acc(*a, up * val(*a) * 2.0),
            Op::RmsNorm { x, gain, inv_rms } => {
                let vx = val(*x);
                let vg = val(*gain);
                let m = vx.ncols() as f64;
                if self.nodes[gain.0].grad {
                    let mut dg = Array2::zeros((1, vx.ncols()));
                    for ((urow, xrow), &r) in up.rows().into_iter().zip(vx.rows()).zip(inv_rms) {
                        dg.row_mut(0).scaled_add(r, &(&urow * &xrow));
                    }
                    acc(*gain, dg);
                }
                if self.nodes[x.0].grad {
                    let mut dx = Array2::zeros(vx.raw_dim());
                    for (((mut drow, urow), xrow), &r) in
                        dx.rows_mut().into_iter().zip(up.rows()).zip(vx.rows()).zip(inv_rms)
                    {
                        let gu = &urow * &vg.row(0);
                        let proj = gu.dot(&xrow) * r * r * r / m;
                        drow.assign(&(&gu * r));
                        drow.scaled_add(-proj, &xrow);
                    }
                    acc(*x, dx);
                }
            }
            Op::SwiGlu(gate, upv) => {
                let a = val(*gate);
                let b = val(*upv);
                let mut dgate = up.clone();
                ndarray::Zip::from(&mut dgate).and(a).and(b).for_each(|d, &a, &b| {
                    let sig = 1.0 / (1.0 + (-a).exp());
                    *d *= b * sig * (1.0 + a * (1.0 - sig));
                });
                let mut dup = up.clone();
                dup.zip_mut_with(a, |d, &a| *d *= a / (1.0 + (-a).exp()));
                acc(*gate, dgate);
                acc(*upv, dup);
            }
            Op::Rope { x, positions, head_dim, base } => {
                let g = rope_apply(up, positions, *head_dim, *base, -1.0).expect("validated in forward");
                acc(*x, g);
            }
            Op::Attention { q, k, v, layout, block, lse } => {
                let (dq, dk, dv) =
                    attention_backward(val(*q), val(*k), val(*v), &node.value, lse, up, *layout, *block);
                acc(*q, dq);
                acc(*k, dk);
                acc(*v, dv);
            }
            Op::ConcatCols(parts) => {
                let mut c0 = 0;
                for &p in parts {
                    let w = val(p).ncols();
                    acc(p, up.slice(s![.., c0..c0 + w]).to_owned());
                    c0 += w;
                }
            }
            Op::SumAll(a) => {
                let u = up[[0, 0]];
                acc(*a, Array2::from_elem(val(*a).raw_dim(), u));
            }
            Op::StraightThrough(a) => acc(*a, up.clone()),
            Op::ObjGrad(x, at) => {
                let u: Vec<f64> = up.column(0).to_vec();
                let mut hv = vec![0.0; u.len()];
                for k in 0..at.problem.n_objectives() {
                    for (h, c) in hv.iter_mut().zip(at.hessian_vector(k, &u)) {
                        *h += c;
                    }
                }
                acc(*x, column(hv));
            }
            Op::ObjSplit { x, at, slots } => {
                let mut hv = vec![0.0; up.nrows()];
                for (k, &slot) in slots.iter().enumerate() {
                    let u: Vec<f64> = up.column(slot).to_vec();
                    if u.iter().all(|&v| v == 0.0) {
                        continue;
                    }
                    for (h, c) in hv.iter_mut().zip(at.hessian_vector(k, &u)) {
                        *h += c;
                    }
                }
                acc(*x, column(hv));
            }
            Op::ObjLoss(x, at) => {
                let u = up[[0, 0]];
                acc(*x, column(at.gradient.iter().map(|g| g * u).collect()));
            }
        }
    }
}

pub fn column(v: Vec<f64>) -> Array2<f64> {
    let n = v.len();
    Array2::from_shape_vec((n, 1), v).expect("column shape")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Array2<f64> {
        Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
    }

    /// Central-difference check of d(sum(build(x) ⊙ w))/dx for one input.
    fn check<F>(x: Array2<f64>, build: F, tol: f64)
    where
        F: Fn(&mut Tape, Var) -> Var,
    {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let mut tape = Tape::new();
        let xv = tape.leaf(x.clone(), true);
        let out = build(&mut tape, xv);
        let w = random(&mut rng, tape.value(out).nrows(), tape.value(out).ncols());
        let wv = tape.constant(w.clone());
        let prod = tape.mul(out, wv).unwrap();
        let root = tape.sum_all(prod);
        let grads = tape.backward(root).unwrap();
        let analytic = grads.get(xv).unwrap().clone();
        let eval = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone(), false);
            let o = build(&mut t, v);
            (t.value(o) * &w).sum()
        };
        let h = 1e-6;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut p = x.clone();
            p[[r, c]] += h;
            let mut m = x.clone();
            m[[r, c]] -= h;
            let fd = (eval(&p) - eval(&m)) / (2.0 * h);
            let a = analytic[[r, c]];
            assert!((fd - a).abs() <= tol * (1.0 + fd.abs()), "[{r},{c}] fd {fd} vs {a}");
        }
    }

    #[test]
    fn elementwise_and_linear_ops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let w = random(&mut rng, 3, 4);
        let bias = random(&mut rng, 1, 4);
        check(random(&mut rng, 5, 3), move |t, x| {
            let wv = t.constant(w.clone());
            let b = t.leaf(bias.clone(), true);
            let y = t.matmul(x, wv).unwrap();
            let y = t.add_row(y, b).unwrap();
            let sq = t.square(y);
            let z = t.add_scalar(sq, 1.0);
            let r = t.sqrt(z);
            let s = t.scale(r, 0.5);
            t.swiglu(s, y).unwrap()
        }, 1e-6);
    }

    #[test]
    fn rms_norm_and_div_col() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let gain = random(&mut rng, 1, 6);
        check(random(&mut rng, 4, 6), move |t, x| {
            let g = t.leaf(gain.clone(), true);
            let n = t.rms_norm(x, g).unwrap();
            let col = t.constant(Array2::from_elem((4, 1), 2.0));
            let sq = t.square(x);
            let ones = t_ones(t, 6);
            let s = t.matmul(sq, ones).unwrap();
            let d = t.add(s, col).unwrap();
            t.div_col(n, d).unwrap()
        }, 1e-6);
    }

    fn t_ones(t: &mut Tape, n: usize) -> Var {
        t.constant(Array2::ones((n, 1)))
    }

    #[test]
    fn rope_and_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let layout = HeadLayout::new(2, 1, 4).unwrap();
        let wk = random(&mut rng, 8, 4);
        let wv = random(&mut rng, 8, 4);
        let pos = Arc::new(vec![0.0, 1.0, 2.0, 5.0, 9.0]);
        check(random(&mut rng, 5, 8), move |t, x| {
            let q = t.rope(x, pos.clone(), 4, 10.0).unwrap();
            let kw = t.constant(wk.clone());
            let vw = t.constant(wv.clone());
            let k = t.matmul(x, kw).unwrap();
            let k = t.rope(k, pos.clone(), 4, 10.0).unwrap();
            let v = t.matmul(x, vw).unwrap();
            t.attention(q, k, v, layout, 2).unwrap()
        }, 1e-6);
    }

    #[test]
    fn scale_by_and_concat() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        check(random(&mut rng, 3, 2), |t, x| {
            let s = t.sum_all(x);
            let y = t.scale_by(x, s).unwrap();
            let c = t.clamp_straight_through(x, -10.0, 10.0);
            t.concat_cols(&[y, c, x]).unwrap()
        }, 1e-6);
    }

    #[test]
    fn backward_requires_scalar_root() {
        let mut t = Tape::new();
        let x = t.leaf(Array2::zeros((2, 2)), true);
        assert!(t.backward(x).is_err());
    }
}
