//! Differentiation engine.
//!
//! Programs are written once against the [`Backend`] trait and can then be run
//! with plain numerics ([`Eval`]), recorded for reverse accumulation
//! ([`Tape`]), or pushed through forward-mode dual numbers ([`Dual`]).
//! `Dual<Tape>` records the tangent propagation itself on the tape, so the
//! reverse sweep differentiates quantities that depend on input Jacobians.
//!
//! Values are matrices with one row per feature and one column per sample.
//! Arithmetic broadcasts like numpy: a `d×1` operand is reused for every
//! column, a `1×k` operand for every row. A dual tangent carrying `m`
//! directions stores them in `m` adjacent columns per sample, so a `d×k`
//! value has a `d×(k·m)` tangent.

use std::ops::Range;

use ndarray::{concatenate, s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;

use crate::error::{Error, Result};

/// Pointwise functions available to programs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Unary {
    Tanh,
    Relu,
    Identity,
    Sin,
    Cos,
    Sqrt,
    Atanh,
    Acos,
    Acosh,
    Asinh,
    /// 1 for `x > 0`, else 0.
    Step,
    /// 1 for `lo < x < hi`, else 0.
    InRange(f64, f64),
    /// `sin(x)/x`, smooth at 0.
    Sinc,
    SincD,
    /// `tanh(x)/x`, smooth at 0.
    TanhC,
    TanhCD,
    /// `atanh(x)/x`, smooth at 0.
    AtanhC,
    AtanhCD,
    /// `acos(c)/sqrt(1-c²)`, smooth at `c = 1`.
    AcosRatio,
    AcosRatioD,
}

impl Unary {
    pub fn apply(self, x: f64) -> f64 {
        match self {
            Unary::Tanh => x.tanh(),
            Unary::Relu => x.max(0.0),
            Unary::Identity => x,
            Unary::Sin => x.sin(),
            Unary::Cos => x.cos(),
            Unary::Sqrt => x.sqrt(),
            Unary::Atanh => x.atanh(),
            Unary::Acos => x.acos(),
            Unary::Acosh => x.acosh(),
            Unary::Asinh => x.asinh(),
            Unary::Step => {
                if x > 0.0 {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::InRange(lo, hi) => {
                if x > lo && x < hi {
                    1.0
                } else {
                    0.0
                }
            }
            Unary::Sinc => special::sinc(x).0,
            Unary::SincD => special::sinc(x).1,
            Unary::TanhC => special::tanhc(x).0,
            Unary::TanhCD => special::tanhc(x).1,
            Unary::AtanhC => special::atanhc(x).0,
            Unary::AtanhCD => special::atanhc(x).1,
            Unary::AcosRatio => special::acos_ratio(x).0,
            Unary::AcosRatioD => special::acos_ratio(x).1,
        }
    }

    /// Numeric derivative given the input `x` and output `y = f(x)`.
    pub fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            Unary::Tanh => 1.0 - y * y,
            Unary::Relu => Unary::Step.apply(x),
            Unary::Identity => 1.0,
            Unary::Sin => x.cos(),
            Unary::Cos => -x.sin(),
            Unary::Sqrt => 0.5 / y,
            Unary::Atanh => 1.0 / ((1.0 - x) * (1.0 + x)),
            Unary::Acos => -1.0 / ((1.0 - x) * (1.0 + x)).sqrt(),
            Unary::Acosh => 1.0 / ((x - 1.0) * (x + 1.0)).sqrt(),
            Unary::Asinh => 1.0 / (x * x + 1.0).sqrt(),
            Unary::Step | Unary::InRange(..) => 0.0,
            Unary::Sinc => special::sinc(x).1,
            Unary::SincD => special::sinc(x).2,
            Unary::TanhC => special::tanhc(x).1,
            Unary::TanhCD => special::tanhc(x).2,
            Unary::AtanhC => special::atanhc(x).1,
            Unary::AtanhCD => special::atanhc(x).2,
            Unary::AcosRatio => special::acos_ratio(x).1,
            Unary::AcosRatioD => special::acos_ratio(x).2,
        }
    }
}

/// Value, first and second derivative of the removable-singularity functions.
mod special {
    fn series(coeffs: impl Iterator<Item = f64>, x: f64) -> (f64, f64, f64) {
        // f = Σ a_k x^{2k}
        let x2 = x * x;
        let (mut f, mut d1, mut d2) = (0.0, 0.0, 0.0);
        let mut pow = 1.0;
        for (k, a) in coeffs.enumerate() {
            let n = 2.0 * k as f64;
            f += a * pow;
            if k >= 1 {
                d1 += n * a * pow / x;
                d2 += n * (n - 1.0) * a * pow / x2;
            }
            pow *= x2;
        }
        (f, d1, d2)
    }

    fn series_safe(coeffs: &[f64], x: f64) -> (f64, f64, f64) {
        if x == 0.0 {
            let a0 = coeffs[0];
            let a1 = coeffs.get(1).copied().unwrap_or(0.0);
            return (a0, 0.0, 2.0 * a1);
        }
        series(coeffs.iter().copied(), x)
    }

    /// For `f = h(x)/x`: `f' = (h' - f)/x`, `f'' = (h'' - 2f')/x`.
    fn quotient(f: f64, h1: f64, h2: f64, x: f64) -> (f64, f64, f64) {
        let d1 = (h1 - f) / x;
        let d2 = (h2 - 2.0 * d1) / x;
        (f, d1, d2)
    }

    pub fn sinc(x: f64) -> (f64, f64, f64) {
        if x.abs() < 0.5 {
            let mut c = [0.0; 13];
            let mut fact = 1.0;
            for (k, slot) in c.iter_mut().enumerate() {
                if k > 0 {
                    fact *= (2 * k) as f64 * (2 * k + 1) as f64;
                }
                *slot = if k % 2 == 0 { 1.0 } else { -1.0 } / fact;
            }
            return series_safe(&c, x);
        }
        quotient(x.sin() / x, x.cos(), -x.sin(), x)
    }

    pub fn tanhc(x: f64) -> (f64, f64, f64) {
        if x.abs() < 0.2 {
            const C: [f64; 11] = [
                1.0,
                -1.0 / 3.0,
                2.0 / 15.0,
                -17.0 / 315.0,
                62.0 / 2835.0,
                -1382.0 / 155925.0,
                21844.0 / 6081075.0,
                -929569.0 / 638512875.0,
                6404582.0 / 10854718875.0,
                -443861162.0 / 1856156927625.0,
                18888466084.0 / 194896477400625.0,
            ];
            return series_safe(&C, x);
        }
        let t = x.tanh();
        let sech2 = 1.0 - t * t;
        quotient(t / x, sech2, -2.0 * t * sech2, x)
    }

    pub fn atanhc(x: f64) -> (f64, f64, f64) {
        if x.abs() < 0.2 {
            let c: Vec<f64> = (0..16).map(|k| 1.0 / (2 * k + 1) as f64).collect();
            return series_safe(&c, x);
        }
        let r = 1.0 / ((1.0 - x) * (1.0 + x));
        quotient(x.atanh() / x, r, 2.0 * x * r * r, x)
    }

    /// `g(c) = acos(c)/sqrt(1-c²)` and its derivatives in `c`.
    pub fn acos_ratio(c: f64) -> (f64, f64, f64) {
        let e = 1.0 - c;
        if e.abs() < 0.5 {
            // g = Σ a_n eⁿ with a_n = n/(2n+1)·a_{n-1}
            let (mut g, mut ge, mut gee) = (0.0, 0.0, 0.0);
            let mut a = 1.0;
            let mut pow = 1.0; // e^n
            let mut pow1 = 0.0; // e^{n-1}
            let mut pow2 = 0.0; // e^{n-2}
            for n in 0..48 {
                let nf = n as f64;
                if n > 0 {
                    a *= nf / (2.0 * nf + 1.0);
                    pow2 = pow1;
                    pow1 = if n == 1 { 1.0 } else { pow1 * e };
                    pow = pow1 * e;
                }
                g += a * pow;
                ge += nf * a * pow1;
                gee += nf * (nf - 1.0) * a * pow2;
            }
            return (g, -ge, gee);
        }
        let s = (1.0 - c) * (1.0 + c);
        let g = c.acos() / s.sqrt();
        let d1 = (c * g - 1.0) / s;
        let d2 = (g + 3.0 * c * d1) / s;
        (g, d1, d2)
    }
}

/// Evaluation strategy for programs.
pub trait Backend {
    type V: Clone;

    fn constant(&mut self, a: Array2<f64>) -> Self::V;
    fn value(&self, v: &Self::V) -> Array2<f64>;
    fn shape(&self, v: &Self::V) -> (usize, usize);

    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn neg(&mut self, a: &Self::V) -> Self::V;
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V;
    fn unary(&mut self, f: Unary, a: &Self::V) -> Self::V;
    fn clamp(&mut self, a: &Self::V, lo: f64, hi: f64) -> Self::V;
    /// Sum over rows: `d×k → 1×k`.
    fn col_sum(&mut self, a: &Self::V) -> Self::V;
    /// Euclidean norm of every column: `d×k → 1×k`. The derivative at a zero
    /// column is taken as zero.
    fn norm(&mut self, a: &Self::V) -> Self::V;
    /// Repeats every column `m` times in place: `d×k → d×(k·m)`.
    fn expand(&mut self, a: &Self::V, m: usize) -> Self::V;
    fn slice_rows(&mut self, a: &Self::V, r: Range<usize>) -> Self::V;
    fn concat_rows(&mut self, parts: &[Self::V]) -> Self::V;
    fn select_cols(&mut self, a: &Self::V, idx: &[usize]) -> Self::V;

    fn scalar(&mut self, c: f64) -> Self::V {
        self.constant(Array2::from_elem((1, 1), c))
    }

    fn scale(&mut self, a: &Self::V, c: f64) -> Self::V {
        let c = self.scalar(c);
        self.mul(a, &c)
    }

    fn add_scalar(&mut self, a: &Self::V, c: f64) -> Self::V {
        let c = self.scalar(c);
        self.add(a, &c)
    }

    /// Column-wise inner product: `(d×k, d×k) → 1×k`.
    fn dot_cols(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        let p = self.mul(a, b);
        self.col_sum(&p)
    }
}

fn broadcast_shape(a: (usize, usize), b: (usize, usize)) -> (usize, usize) {
    let dim = |x: usize, y: usize| {
        if x == y || y == 1 {
            x
        } else if x == 1 {
            y
        } else {
            panic!("shapes {a:?} and {b:?} do not broadcast")
        }
    };
    (dim(a.0, b.0), dim(a.1, b.1))
}

fn bcast(a: &Array2<f64>, shape: (usize, usize)) -> ndarray::ArrayView2<'_, f64> {
    a.broadcast(shape).expect("broadcast")
}

fn zip_bcast(a: &Array2<f64>, b: &Array2<f64>, f: impl Fn(f64, f64) -> f64) -> Array2<f64> {
    let shape = broadcast_shape(a.dim(), b.dim());
    let mut out = Array2::zeros(shape);
    ndarray::Zip::from(&mut out)
        .and(&bcast(a, shape))
        .and(&bcast(b, shape))
        .for_each(|o, &x, &y| *o = f(x, y));
    out
}

/// Sums a broadcast gradient back down to the operand's shape.
fn reduce_to(g: Array2<f64>, shape: (usize, usize)) -> Array2<f64> {
    let mut g = g;
    if shape.0 == 1 && g.nrows() != 1 {
        g = g.sum_axis(Axis(0)).insert_axis(Axis(0));
    }
    if shape.1 == 1 && g.ncols() != 1 {
        g = g.sum_axis(Axis(1)).insert_axis(Axis(1));
    }
    g
}

fn col_norms(a: &Array2<f64>) -> Array2<f64> {
    let n = a.map_axis(Axis(0), |c| c.dot(&c).sqrt());
    n.insert_axis(Axis(0))
}

fn expand_cols(a: &Array2<f64>, m: usize) -> Array2<f64> {
    let (r, k) = a.dim();
    let mut out = Array2::zeros((r, k * m));
    for j in 0..k {
        for i in 0..m {
            out.column_mut(j * m + i).assign(&a.column(j));
        }
    }
    out
}

fn gather_cols(a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
    a.select(Axis(1), idx)
}

/// Plain numeric evaluation.
#[derive(Debug, Default, Clone, Copy)]
pub struct Eval;

impl Backend for Eval {
    type V = Array2<f64>;

    fn constant(&mut self, a: Array2<f64>) -> Array2<f64> {
        a
    }
    fn value(&self, v: &Array2<f64>) -> Array2<f64> {
        v.clone()
    }
    fn shape(&self, v: &Array2<f64>) -> (usize, usize) {
        v.dim()
    }
    fn add(&mut self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        zip_bcast(a, b, |x, y| x + y)
    }
    fn sub(&mut self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        zip_bcast(a, b, |x, y| x - y)
    }
    fn mul(&mut self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        zip_bcast(a, b, |x, y| x * y)
    }
    fn div(&mut self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        zip_bcast(a, b, |x, y| x / y)
    }
    fn neg(&mut self, a: &Array2<f64>) -> Array2<f64> {
        a.mapv(|x| -x)
    }
    fn matmul(&mut self, a: &Array2<f64>, b: &Array2<f64>) -> Array2<f64> {
        a.dot(b)
    }
    fn unary(&mut self, f: Unary, a: &Array2<f64>) -> Array2<f64> {
        a.mapv(|x| f.apply(x))
    }
    fn clamp(&mut self, a: &Array2<f64>, lo: f64, hi: f64) -> Array2<f64> {
        a.mapv(|x| x.clamp(lo, hi))
    }
    fn col_sum(&mut self, a: &Array2<f64>) -> Array2<f64> {
        a.sum_axis(Axis(0)).insert_axis(Axis(0))
    }
    fn norm(&mut self, a: &Array2<f64>) -> Array2<f64> {
        col_norms(a)
    }
    fn expand(&mut self, a: &Array2<f64>, m: usize) -> Array2<f64> {
        expand_cols(a, m)
    }
    fn slice_rows(&mut self, a: &Array2<f64>, r: Range<usize>) -> Array2<f64> {
        a.slice(s![r, ..]).to_owned()
    }
    fn concat_rows(&mut self, parts: &[Array2<f64>]) -> Array2<f64> {
        let views: Vec<_> = parts.iter().map(|p| p.view()).collect();
        concatenate(Axis(0), &views).expect("concat_rows")
    }
    fn select_cols(&mut self, a: &Array2<f64>, idx: &[usize]) -> Array2<f64> {
        gather_cols(a, idx)
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Div(usize, usize),
    Neg(usize),
    MatMul(usize, usize),
    Unary(Unary, usize),
    Clamp(usize, f64, f64),
    ColSum(usize),
    Norm(usize),
    Expand(usize, usize),
    SliceRows(usize, Range<usize>),
    ConcatRows(Vec<usize>),
    SelectCols(usize, Vec<usize>),
}

#[derive(Debug, Clone)]
struct Node {
    op: Op,
    value: Array2<f64>,
}

/// Records every operation for a reverse sweep.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Handle to a value recorded on a [`Tape`].
pub type NodeId = usize;

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Registers an input whose gradient should be reported.
    pub fn leaf(&mut self, value: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, value)
    }

    pub fn value_ref(&self, id: NodeId) -> &Array2<f64> {
        &self.nodes[id].value
    }

    fn push(&mut self, op: Op, value: Array2<f64>) -> NodeId {
        self.nodes.push(Node { op, value });
        self.nodes.len() - 1
    }

    /// Reverse sweep starting from the linear functional
    /// `Σ ⟨seed_i, value(node_i)⟩`. Returns the gradient of every requested
    /// node (zeros when it does not influence the seeds).
    pub fn backward(&self, seeds: &[(NodeId, Array2<f64>)], wanted: &[NodeId]) -> Vec<Array2<f64>> {
        let n = self.nodes.len();
        let mut grads: Vec<Option<Array2<f64>>> = vec![None; n];
        let mut keep = vec![false; n];
        for &w in wanted {
            keep[w] = true;
        }
        let accumulate = |grads: &mut Vec<Option<Array2<f64>>>, id: usize, g: Array2<f64>| {
            match &mut grads[id] {
                Some(acc) => *acc += &g,
                slot @ None => *slot = Some(g),
            }
        };
        for (id, seed) in seeds {
            assert_eq!(seed.dim(), self.nodes[*id].value.dim(), "seed shape");
            accumulate(&mut grads, *id, seed.clone());
        }
        let mut out_grads: Vec<Option<Array2<f64>>> = vec![None; n];
        for id in (0..n).rev() {
            let g = match grads[id].take() {
                Some(g) => g,
                None => continue,
            };
            let node = &self.nodes[id];
            let val = |i: usize| &self.nodes[i].value;
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    accumulate(&mut grads, *b, reduce_to(g.clone(), val(*b).dim()));
                }
                Op::Sub(a, b) => {
                    accumulate(&mut grads, *a, reduce_to(g.clone(), val(*a).dim()));
                    accumulate(&mut grads, *b, reduce_to(-&g, val(*b).dim()));
                }
                Op::Mul(a, b) => {
                    let ga = zip_bcast(&g, val(*b), |x, y| x * y);
                    let gb = zip_bcast(&g, val(*a), |x, y| x * y);
                    accumulate(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    accumulate(&mut grads, *b, reduce_to(gb, val(*b).dim()));
                }
                Op::Div(a, b) => {
                    let ga = zip_bcast(&g, val(*b), |x, y| x / y);
                    let gy = zip_bcast(&ga, &node.value, |x, y| -x * y);
                    accumulate(&mut grads, *a, reduce_to(ga, val(*a).dim()));
                    accumulate(&mut grads, *b, reduce_to(gy, val(*b).dim()));
                }
                Op::Neg(a) => accumulate(&mut grads, *a, -&g),
                Op::MatMul(a, b) => {
                    accumulate(&mut grads, *a, g.dot(&val(*b).t()));
                    accumulate(&mut grads, *b, val(*a).t().dot(&g));
                }
                Op::Unary(f, a) => {
                    if matches!(f, Unary::Step | Unary::InRange(..)) {
                        continue;
                    }
                    let mut d = val(*a).clone();
                    ndarray::Zip::from(&mut d)
                        .and(&node.value)
                        .and(&g)
                        .for_each(|x, &y, &gg| *x = gg * f.derivative(*x, y));
                    accumulate(&mut grads, *a, d);
                }
                Op::Clamp(a, lo, hi) => {
                    let mut d = val(*a).clone();
                    ndarray::Zip::from(&mut d).and(&g).for_each(|x, &gg| {
                        *x = if *x > *lo && *x < *hi { gg } else { 0.0 };
                    });
                    accumulate(&mut grads, *a, d);
                }
                Op::ColSum(a) => {
                    let shape = val(*a).dim();
                    accumulate(&mut grads, *a, bcast(&g, shape).to_owned());
                }
                Op::Norm(a) => {
                    let x = val(*a);
                    let nrm = &node.value;
                    let mut d = x.clone();
                    for (j, mut col) in d.columns_mut().into_iter().enumerate() {
                        let nj = nrm[[0, j]];
                        let f = if nj > 0.0 { g[[0, j]] / nj } else { 0.0 };
                        col *= f;
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::Expand(a, m) => {
                    let (r, k) = val(*a).dim();
                    let mut d = Array2::zeros((r, k));
                    for j in 0..k {
                        let block = g.slice(s![.., j * m..(j + 1) * m]);
                        d.column_mut(j).assign(&block.sum_axis(Axis(1)));
                    }
                    accumulate(&mut grads, *a, d);
                }
                Op::SliceRows(a, r) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    d.slice_mut(s![r.clone(), ..]).assign(&g);
                    accumulate(&mut grads, *a, d);
                }
                Op::ConcatRows(parts) => {
                    let mut start = 0;
                    for &p in parts {
                        let rows = val(p).nrows();
                        let piece = g.slice(s![start..start + rows, ..]).to_owned();
                        accumulate(&mut grads, p, reduce_to(piece, val(p).dim()));
                        start += rows;
                    }
                }
                Op::SelectCols(a, idx) => {
                    let mut d = Array2::zeros(val(*a).dim());
                    for (pos, &j) in idx.iter().enumerate() {
                        let mut c = d.column_mut(j);
                        c += &g.column(pos);
                    }
                    accumulate(&mut grads, *a, d);
                }
            }
            if keep[id] {
                out_grads[id] = Some(g);
            }
        }
        wanted
            .iter()
            .map(|&w| {
                out_grads[w]
                    .clone()
                    .unwrap_or_else(|| Array2::zeros(self.nodes[w].value.dim()))
            })
            .collect()
    }
}

impl Backend for Tape {
    type V = NodeId;

    fn constant(&mut self, a: Array2<f64>) -> NodeId {
        self.push(Op::Leaf, a)
    }
    fn value(&self, v: &NodeId) -> Array2<f64> {
        self.nodes[*v].value.clone()
    }
    fn shape(&self, v: &NodeId) -> (usize, usize) {
        self.nodes[*v].value.dim()
    }
    fn add(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = zip_bcast(&self.nodes[*a].value, &self.nodes[*b].value, |x, y| x + y);
        self.push(Op::Add(*a, *b), v)
    }
    fn sub(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = zip_bcast(&self.nodes[*a].value, &self.nodes[*b].value, |x, y| x - y);
        self.push(Op::Sub(*a, *b), v)
    }
    fn mul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = zip_bcast(&self.nodes[*a].value, &self.nodes[*b].value, |x, y| x * y);
        self.push(Op::Mul(*a, *b), v)
    }
    fn div(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = zip_bcast(&self.nodes[*a].value, &self.nodes[*b].value, |x, y| x / y);
        self.push(Op::Div(*a, *b), v)
    }
    fn neg(&mut self, a: &NodeId) -> NodeId {
        let v = self.nodes[*a].value.mapv(|x| -x);
        self.push(Op::Neg(*a), v)
    }
    fn matmul(&mut self, a: &NodeId, b: &NodeId) -> NodeId {
        let v = self.nodes[*a].value.dot(&self.nodes[*b].value);
        self.push(Op::MatMul(*a, *b), v)
    }
    fn unary(&mut self, f: Unary, a: &NodeId) -> NodeId {
        if f == Unary::Identity {
            return *a;
        }
        let v = self.nodes[*a].value.mapv(|x| f.apply(x));
        self.push(Op::Unary(f, *a), v)
    }
    fn clamp(&mut self, a: &NodeId, lo: f64, hi: f64) -> NodeId {
        let v = self.nodes[*a].value.mapv(|x| x.clamp(lo, hi));
        self.push(Op::Clamp(*a, lo, hi), v)
    }
    fn col_sum(&mut self, a: &NodeId) -> NodeId {
        let v = self.nodes[*a].value.sum_axis(Axis(0)).insert_axis(Axis(0));
        self.push(Op::ColSum(*a), v)
    }
    fn norm(&mut self, a: &NodeId) -> NodeId {
        let v = col_norms(&self.nodes[*a].value);
        self.push(Op::Norm(*a), v)
    }
    fn expand(&mut self, a: &NodeId, m: usize) -> NodeId {
        if m == 1 {
            return *a;
        }
        let v = expand_cols(&self.nodes[*a].value, m);
        self.push(Op::Expand(*a, m), v)
    }
    fn slice_rows(&mut self, a: &NodeId, r: Range<usize>) -> NodeId {
        let v = self.nodes[*a].value.slice(s![r.clone(), ..]).to_owned();
        self.push(Op::SliceRows(*a, r), v)
    }
    fn concat_rows(&mut self, parts: &[NodeId]) -> NodeId {
        if parts.len() == 1 {
            return parts[0];
        }
        let cols = parts.iter().map(|p| self.nodes[*p].value.ncols()).max().unwrap_or(0);
        let views: Vec<Array2<f64>> = parts
            .iter()
            .map(|p| {
                let v = &self.nodes[*p].value;
                bcast(v, (v.nrows(), cols)).to_owned()
            })
            .collect();
        let vv: Vec<_> = views.iter().map(|v| v.view()).collect();
        let v = concatenate(Axis(0), &vv).expect("concat_rows");
        self.push(Op::ConcatRows(parts.to_vec()), v)
    }
    fn select_cols(&mut self, a: &NodeId, idx: &[usize]) -> NodeId {
        let v = gather_cols(&self.nodes[*a].value, idx);
        self.push(Op::SelectCols(*a, idx.to_vec()), v)
    }
}

/// A dual number: value plus an optional tangent (`None` means zero).
#[derive(Debug, Clone)]
pub struct DualV<V> {
    pub v: V,
    pub t: Option<V>,
}

/// Forward-mode propagation of `dirs` tangent directions per sample over an
/// inner backend.
#[derive(Debug, Clone)]
pub struct Dual<B: Backend> {
    pub inner: B,
    dirs: usize,
    tanh_fault: f64,
}

impl<B: Backend> Dual<B> {
    pub fn new(inner: B, dirs: usize) -> Self {
        assert!(dirs >= 1);
        Dual {
            inner,
            dirs,
            tanh_fault: 1.0,
        }
    }

    /// Scales the tanh derivative rule; used only to demonstrate that the
    /// gradient checker catches a broken derivative.
    #[doc(hidden)]
    pub fn with_tanh_fault(mut self, scale: f64) -> Self {
        self.tanh_fault = scale;
        self
    }

    pub fn dirs(&self) -> usize {
        self.dirs
    }

    /// A value with the given tangent.
    pub fn seeded(&mut self, v: B::V, t: B::V) -> DualV<B::V> {
        DualV { v, t: Some(t) }
    }

    /// A value with zero tangent.
    pub fn lift(&mut self, v: B::V) -> DualV<B::V> {
        DualV { v, t: None }
    }

    /// Expands a value to tangent layout unless it is a broadcast column.
    fn spread(&mut self, a: &B::V, tangent_cols: usize) -> B::V {
        let (_, c) = self.inner.shape(a);
        if c * self.dirs == tangent_cols {
            self.inner.expand(a, self.dirs)
        } else {
            assert_eq!(c, 1, "value columns do not match tangent layout");
            a.clone()
        }
    }

    fn tcols(&self, t: &B::V) -> usize {
        self.inner.shape(t).1
    }

    /// `E(factor) ⊙ t`.
    fn scale_tangent(&mut self, factor: &B::V, t: &B::V) -> B::V {
        let e = self.spread(factor, self.tcols(t));
        self.inner.mul(&e, t)
    }

    fn zeros_like(&mut self, rows: usize, t_other: &B::V) -> B::V {
        let cols = self.tcols(t_other);
        self.inner.constant(Array2::zeros((rows, cols)))
    }

    /// Broadcasts a tangent over rows so it matches the output row count.
    fn fit_rows(&mut self, t: B::V, rows: usize) -> B::V {
        let (r, _) = self.inner.shape(&t);
        if r == rows {
            t
        } else {
            let ones = self.inner.constant(Array2::ones((rows, 1)));
            self.inner.mul(&t, &ones)
        }
    }

    fn add_tangents(&mut self, a: Option<B::V>, b: Option<B::V>, rows: usize, negate_b: bool) -> Option<B::V> {
        let t = match (a, b) {
            (None, None) => return None,
            (Some(a), None) => a,
            (None, Some(b)) => {
                if negate_b {
                    self.inner.neg(&b)
                } else {
                    b
                }
            }
            (Some(a), Some(b)) => {
                if negate_b {
                    self.inner.sub(&a, &b)
                } else {
                    self.inner.add(&a, &b)
                }
            }
        };
        Some(self.fit_rows(t, rows))
    }

    /// `f'(x)` built from inner operations so that it is itself differentiable.
    fn derivative_expr(&mut self, f: Unary, x: &B::V, y: &B::V) -> Option<B::V> {
        let fault = self.tanh_fault;
        let b = &mut self.inner;
        Some(match f {
            Unary::Identity => return None,
            Unary::Step | Unary::InRange(..) => return None,
            Unary::Tanh => {
                let y2 = b.mul(y, y);
                let one = b.scalar(1.0);
                let d = b.sub(&one, &y2);
                if fault != 1.0 {
                    b.scale(&d, fault)
                } else {
                    d
                }
            }
            Unary::Relu => b.unary(Unary::Step, x),
            Unary::Sin => b.unary(Unary::Cos, x),
            Unary::Cos => {
                let s = b.unary(Unary::Sin, x);
                b.neg(&s)
            }
            Unary::Sqrt => {
                let half = b.scalar(0.5);
                b.div(&half, y)
            }
            Unary::Atanh => {
                let x2 = b.mul(x, x);
                let one = b.scalar(1.0);
                let den = b.sub(&one, &x2);
                b.div(&one, &den)
            }
            Unary::Acos => {
                let x2 = b.mul(x, x);
                let one = b.scalar(1.0);
                let den = b.sub(&one, &x2);
                let den = b.unary(Unary::Sqrt, &den);
                let mone = b.scalar(-1.0);
                b.div(&mone, &den)
            }
            Unary::Acosh => {
                let x2 = b.mul(x, x);
                let one = b.scalar(1.0);
                let den = b.sub(&x2, &one);
                let den = b.unary(Unary::Sqrt, &den);
                b.div(&one, &den)
            }
            Unary::Asinh => {
                let x2 = b.mul(x, x);
                let one = b.scalar(1.0);
                let den = b.add(&x2, &one);
                let den = b.unary(Unary::Sqrt, &den);
                b.div(&one, &den)
            }
            Unary::Sinc => b.unary(Unary::SincD, x),
            Unary::TanhC => b.unary(Unary::TanhCD, x),
            Unary::AtanhC => b.unary(Unary::AtanhCD, x),
            Unary::AcosRatio => b.unary(Unary::AcosRatioD, x),
            Unary::SincD | Unary::TanhCD | Unary::AtanhCD | Unary::AcosRatioD => {
                panic!("third derivatives are not supported")
            }
        })
    }
}

impl<B: Backend> Backend for Dual<B> {
    type V = DualV<B::V>;

    fn constant(&mut self, a: Array2<f64>) -> Self::V {
        let v = self.inner.constant(a);
        DualV { v, t: None }
    }
    fn value(&self, v: &Self::V) -> Array2<f64> {
        self.inner.value(&v.v)
    }
    fn shape(&self, v: &Self::V) -> (usize, usize) {
        self.inner.shape(&v.v)
    }
    fn add(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        let v = self.inner.add(&a.v, &b.v);
        let rows = self.inner.shape(&v).0;
        let t = self.add_tangents(a.t.clone(), b.t.clone(), rows, false);
        DualV { v, t }
    }
    fn sub(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        let v = self.inner.sub(&a.v, &b.v);
        let rows = self.inner.shape(&v).0;
        let t = self.add_tangents(a.t.clone(), b.t.clone(), rows, true);
        DualV { v, t }
    }
    fn mul(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        let v = self.inner.mul(&a.v, &b.v);
        let rows = self.inner.shape(&v).0;
        let ta = a.t.as_ref().map(|t| self.scale_tangent(&b.v, t));
        let tb = b.t.as_ref().map(|t| self.scale_tangent(&a.v, t));
        let t = self.add_tangents(ta, tb, rows, false);
        DualV { v, t }
    }
    fn div(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        let v = self.inner.div(&a.v, &b.v);
        let rows = self.inner.shape(&v).0;
        // d(a/b) = (da - y·db) / b
        let tb = b.t.as_ref().map(|t| self.scale_tangent(&v, t));
        let num = self.add_tangents(a.t.clone(), tb, rows, true);
        let t = num.map(|n| {
            let e = self.spread(&b.v, self.tcols(&n));
            self.inner.div(&n, &e)
        });
        DualV { v, t }
    }
    fn neg(&mut self, a: &Self::V) -> Self::V {
        let v = self.inner.neg(&a.v);
        let t = a.t.as_ref().map(|t| self.inner.neg(t));
        DualV { v, t }
    }
    fn matmul(&mut self, a: &Self::V, b: &Self::V) -> Self::V {
        assert!(a.t.is_none(), "left matmul operand must not carry a tangent");
        let v = self.inner.matmul(&a.v, &b.v);
        let t = b.t.as_ref().map(|t| self.inner.matmul(&a.v, t));
        DualV { v, t }
    }
    fn unary(&mut self, f: Unary, a: &Self::V) -> Self::V {
        if f == Unary::Identity {
            return a.clone();
        }
        let v = self.inner.unary(f, &a.v);
        let t = match &a.t {
            None => None,
            Some(t) => self
                .derivative_expr(f, &a.v, &v)
                .map(|d| self.scale_tangent(&d, t)),
        };
        DualV { v, t }
    }
    fn clamp(&mut self, a: &Self::V, lo: f64, hi: f64) -> Self::V {
        let v = self.inner.clamp(&a.v, lo, hi);
        let t = a.t.as_ref().map(|t| {
            let mask = self.inner.unary(Unary::InRange(lo, hi), &a.v);
            self.scale_tangent(&mask, t)
        });
        DualV { v, t }
    }
    fn col_sum(&mut self, a: &Self::V) -> Self::V {
        let v = self.inner.col_sum(&a.v);
        let t = a.t.as_ref().map(|t| self.inner.col_sum(t));
        DualV { v, t }
    }
    fn norm(&mut self, a: &Self::V) -> Self::V {
        let v = self.inner.norm(&a.v);
        let t = a.t.as_ref().map(|t| {
            let xt = self.scale_tangent(&a.v, t);
            let num = self.inner.col_sum(&xt);
            let safe = self.inner.clamp(&v, f64::MIN_POSITIVE, f64::INFINITY);
            let e = self.spread(&safe, self.tcols(&num));
            self.inner.div(&num, &e)
        });
        DualV { v, t }
    }
    fn expand(&mut self, _a: &Self::V, _m: usize) -> Self::V {
        panic!("expand is internal to tangent propagation")
    }
    fn slice_rows(&mut self, a: &Self::V, r: Range<usize>) -> Self::V {
        let v = self.inner.slice_rows(&a.v, r.clone());
        let t = a.t.as_ref().map(|t| self.inner.slice_rows(t, r));
        DualV { v, t }
    }
    fn concat_rows(&mut self, parts: &[Self::V]) -> Self::V {
        let vs: Vec<B::V> = parts.iter().map(|p| p.v.clone()).collect();
        let v = self.inner.concat_rows(&vs);
        let reference = parts.iter().find_map(|p| p.t.clone());
        let t = reference.map(|r| {
            let ts: Vec<B::V> = parts
                .iter()
                .map(|p| match &p.t {
                    Some(t) => t.clone(),
                    None => {
                        let rows = self.inner.shape(&p.v).0;
                        self.zeros_like(rows, &r)
                    }
                })
                .collect();
            self.inner.concat_rows(&ts)
        });
        DualV { v, t }
    }
    fn select_cols(&mut self, a: &Self::V, idx: &[usize]) -> Self::V {
        let v = self.inner.select_cols(&a.v, idx);
        let m = self.dirs;
        let t = a.t.as_ref().map(|t| {
            let tidx: Vec<usize> = idx.iter().flat_map(|&j| j * m..(j + 1) * m).collect();
            self.inner.select_cols(t, &tidx)
        });
        DualV { v, t }
    }
}

/// A parameterized map from `input_dim` reals to `output_dim` reals, written
/// against [`Backend`].
pub trait DifferentiableProgram: Sync {
    fn input_dim(&self) -> usize;
    fn output_dim(&self) -> usize;
    fn param_names(&self) -> Vec<String>;
    fn param_values(&self) -> Vec<Array2<f64>>;
    /// Evaluates on a batch `x` of shape `input_dim × k`.
    fn eval<B: Backend>(&self, b: &mut B, params: &[B::V], x: &B::V) -> B::V;
}

/// Per-sample loss on a program output and its Jacobian, with the partial
/// derivatives needed to seed a reverse sweep.
pub trait JacobianLoss {
    fn evaluate(&self, output: ArrayView1<f64>, jacobian: ArrayView2<f64>) -> LossTerm;
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossTerm {
    pub value: f64,
    pub d_output: Array1<f64>,
    pub d_jacobian: Array2<f64>,
}

/// Gradient table keyed like the program's parameter table.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamGradients {
    pub names: Vec<String>,
    pub grads: Vec<Array2<f64>>,
}

impl ParamGradients {
    pub fn get(&self, name: &str) -> Result<&Array2<f64>> {
        self.names
            .iter()
            .position(|n| n == name)
            .map(|i| &self.grads[i])
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn zeros_like(names: Vec<String>, values: &[Array2<f64>]) -> Self {
        ParamGradients {
            names,
            grads: values.iter().map(|v| Array2::zeros(v.dim())).collect(),
        }
    }

    pub fn add_assign(&mut self, other: &ParamGradients) {
        for (a, b) in self.grads.iter_mut().zip(&other.grads) {
            *a += b;
        }
    }

    pub fn scaled(&self, c: f64) -> ParamGradients {
        ParamGradients {
            names: self.names.clone(),
            grads: self.grads.iter().map(|g| g * c).collect(),
        }
    }

    pub fn norm_of(&self, name: &str) -> Result<f64> {
        Ok(self.get(name)?.iter().map(|v| v * v).sum::<f64>().sqrt())
    }
}

/// Evaluates without derivatives on a batch (`input_dim × k`).
pub fn evaluate<P: DifferentiableProgram>(prog: &P, x: ArrayView2<f64>) -> Array2<f64> {
    let mut b = Eval;
    let params = prog.param_values();
    prog.eval(&mut b, &params, &x.to_owned())
}

/// Output and Jacobian at a single input, one forward pass with every input
/// direction carried at once.
pub fn value_and_jacobian<P: DifferentiableProgram>(prog: &P, x: ArrayView1<f64>) -> (Array1<f64>, Array2<f64>) {
    let n = prog.input_dim();
    let (vals, jacs) = batch_value_and_jacobian(prog, x.insert_axis(Axis(1)), &[Array2::eye(n)], 1.0);
    (vals.column(0).to_owned(), jacs.into_iter().next().unwrap())
}

/// Outputs and directional Jacobians `J(x_j)·S_j` for every column `x_j`,
/// with one seed matrix `S_j` (`input_dim × m`) per sample.
pub fn batch_value_and_jacobian<P: DifferentiableProgram>(
    prog: &P,
    xs: ArrayView2<f64>,
    seeds: &[Array2<f64>],
    tanh_fault: f64,
) -> (Array2<f64>, Vec<Array2<f64>>) {
    let k = xs.ncols();
    assert_eq!(seeds.len(), k);
    let m = seeds.first().map(|s| s.ncols()).unwrap_or(1);
    let mut d = Dual::new(Eval, m).with_tanh_fault(tanh_fault);
    let params: Vec<_> = prog.param_values().into_iter().map(|p| d.constant(p)).collect();
    let seed = concat_seeds(seeds);
    let x = d.seeded(xs.to_owned(), seed);
    let y = prog.eval(&mut d, &params, &x);
    let out_rows = y.v.nrows();
    let t = y.t.unwrap_or_else(|| Array2::zeros((out_rows, k * m)));
    let jacs = (0..k).map(|j| t.slice(s![.., j * m..(j + 1) * m]).to_owned()).collect();
    (y.v, jacs)
}

fn concat_seeds(seeds: &[Array2<f64>]) -> Array2<f64> {
    let views: Vec<_> = seeds.iter().map(|s| s.view()).collect();
    concatenate(Axis(1), &views).expect("seed shapes")
}

/// Result of one forward-over-reverse evaluation on a batch.
pub struct BatchTrace {
    pub outputs: Array2<f64>,
    pub jacobians: Vec<Array2<f64>>,
    tape: Tape,
    params: Vec<NodeId>,
    out_v: NodeId,
    out_t: Option<NodeId>,
}

impl BatchTrace {
    /// Records `prog` on `xs` with tangents seeded by `seeds`.
    pub fn record<P: DifferentiableProgram>(prog: &P, xs: ArrayView2<f64>, seeds: &[Array2<f64>]) -> Self {
        let k = xs.ncols();
        assert_eq!(seeds.len(), k);
        let m = seeds.first().map(|s| s.ncols()).unwrap_or(1);
        let mut d = Dual::new(Tape::new(), m);
        let params: Vec<NodeId> = prog
            .param_values()
            .into_iter()
            .map(|p| d.inner.leaf(p))
            .collect();
        let pv: Vec<DualV<NodeId>> = params.iter().map(|&p| DualV { v: p, t: None }).collect();
        let xv = d.inner.constant(xs.to_owned());
        let xt = d.inner.constant(concat_seeds(seeds));
        let x = d.seeded(xv, xt);
        let y = prog.eval(&mut d, &pv, &x);
        let tape = d.inner;
        let outputs = tape.value_ref(y.v).clone();
        let jacobians = match y.t {
            Some(t) => {
                let tv = tape.value_ref(t);
                (0..k).map(|j| tv.slice(s![.., j * m..(j + 1) * m]).to_owned()).collect()
            }
            None => vec![Array2::zeros((outputs.nrows(), m)); k],
        };
        BatchTrace {
            outputs,
            jacobians,
            tape,
            params,
            out_v: y.v,
            out_t: y.t,
        }
    }

    /// Parameter gradients of `Σ_j ⟨d_out_j, y_j⟩ + ⟨d_jac_j, J_j⟩`.
    pub fn backward(&self, d_outputs: &Array2<f64>, d_jacobians: &[Array2<f64>]) -> Vec<Array2<f64>> {
        let mut seeds = vec![(self.out_v, d_outputs.clone())];
        if let Some(t) = self.out_t {
            seeds.push((t, concat_seeds(d_jacobians)));
        }
        self.tape.backward(&seeds, &self.params)
    }
}

/// Gradient of a Jacobian-dependent loss with respect to every parameter.
pub fn param_gradients<P: DifferentiableProgram, L: JacobianLoss + ?Sized>(
    prog: &P,
    loss: &L,
    x: ArrayView1<f64>,
) -> (f64, ParamGradients) {
    let n = prog.input_dim();
    let trace = BatchTrace::record(prog, x.insert_axis(Axis(1)), &[Array2::eye(n)]);
    let term = loss.evaluate(trace.outputs.column(0), trace.jacobians[0].view());
    let d_out = term.d_output.clone().insert_axis(Axis(1));
    let grads = trace.backward(&d_out, &[term.d_jacobian.clone()]);
    (
        term.value,
        ParamGradients {
            names: prog.param_names(),
            grads,
        },
    )
}

/// Loss value of a program with replaced parameters, used by finite-difference
/// checks.
pub fn loss_with_params<P: DifferentiableProgram, L: JacobianLoss + ?Sized>(
    prog: &P,
    params: &[Array2<f64>],
    loss: &L,
    x: ArrayView1<f64>,
) -> f64 {
    let n = prog.input_dim();
    let mut d = Dual::new(Eval, n);
    let pv: Vec<_> = params.iter().map(|p| d.constant(p.clone())).collect();
    let xv = d.seeded(x.to_owned().insert_axis(Axis(1)), Array2::eye(n));
    let y = prog.eval(&mut d, &pv, &xv);
    let j = y.t.unwrap_or_else(|| Array2::zeros((y.v.nrows(), n)));
    loss.evaluate(y.v.column(0), j.view()).value
}

/// Central-difference Jacobian at `x` with step `h`.
pub fn finite_diff_jacobian<P: DifferentiableProgram>(prog: &P, x: ArrayView1<f64>, h: f64) -> Array2<f64> {
    let n = x.len();
    let mut pts = Array2::zeros((n, 2 * n));
    for i in 0..n {
        let mut plus = x.to_owned();
        plus[i] += h;
        let mut minus = x.to_owned();
        minus[i] -= h;
        pts.column_mut(2 * i).assign(&plus);
        pts.column_mut(2 * i + 1).assign(&minus);
    }
    let ys = evaluate(prog, pts.view());
    let mut j = Array2::zeros((ys.nrows(), n));
    for i in 0..n {
        let d = (&ys.column(2 * i) - &ys.column(2 * i + 1)) / (2.0 * h);
        j.column_mut(i).assign(&d);
    }
    j
}

/// Central-difference gradients of `f` with respect to every entry of
/// `params`.
pub fn finite_diff_gradients(params: &[Array2<f64>], h: f64, f: impl Fn(&[Array2<f64>]) -> f64) -> Vec<Array2<f64>> {
    let mut work = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let mut g = Array2::zeros(params[pi].dim());
        for idx in ndarray::indices(params[pi].dim()) {
            let orig = work[pi][idx];
            work[pi][idx] = orig + h;
            let up = f(&work);
            work[pi][idx] = orig - h;
            let down = f(&work);
            work[pi][idx] = orig;
            g[idx] = (up - down) / (2.0 * h);
        }
        grads.push(g);
    }
    grads
}

/// Central-difference parameter gradients of a Jacobian-dependent loss.
pub fn finite_diff_param_gradients<P: DifferentiableProgram, L: JacobianLoss + ?Sized>(
    prog: &P,
    loss: &L,
    x: ArrayView1<f64>,
    h: f64,
) -> ParamGradients {
    let grads = finite_diff_gradients(&prog.param_values(), h, |params| loss_with_params(prog, params, loss, x));
    ParamGradients {
        names: prog.param_names(),
        grads,
    }
}

/// Largest entrywise error relative to the larger of the reference scale and 1.
pub fn max_relative_error(a: ArrayView2<f64>, reference: ArrayView2<f64>) -> f64 {
    let scale = reference.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(reference.iter())
        .map(|(x, y)| (x - y).abs() / scale)
        .fold(0.0, f64::max)
}

/// Sum of squared Jacobian entries plus squared outputs; a generic loss for
/// gradient checks.
#[derive(Debug, Clone, Copy, Default)]
pub struct SquaredJacobianLoss;

impl JacobianLoss for SquaredJacobianLoss {
    fn evaluate(&self, output: ArrayView1<f64>, jacobian: ArrayView2<f64>) -> LossTerm {
        let value = output.dot(&output) + jacobian.iter().map(|v| v * v).sum::<f64>();
        LossTerm {
            value,
            d_output: output.to_owned() * 2.0,
            d_jacobian: jacobian.to_owned() * 2.0,
        }
    }
}

/// Randomly generated programs over the primitive set, used to exercise the
/// engine.
pub mod random {
    use super::*;

    #[derive(Debug, Clone, Copy, PartialEq)]
    enum Act {
        Tanh,
        Sin,
        Cos,
        Relu,
        Identity,
        /// `sqrt(1 + x²)`
        SqrtSoft,
        /// `atanh(0.5·tanh x)`
        AtanhSquash,
        /// `acos(0.5·tanh x)`
        AcosSquash,
        /// `acosh(1.5 + x²)`
        AcoshShift,
        /// `x · ‖x‖` on the column
        NormScale,
        /// `x / (1.5 + tanh x)`
        Ratio,
        /// `clamp(x, -0.8, 0.8)`
        Clamp,
        Asinh,
    }

    const ACTS: [Act; 13] = [
        Act::Tanh,
        Act::Sin,
        Act::Cos,
        Act::Relu,
        Act::Identity,
        Act::SqrtSoft,
        Act::AtanhSquash,
        Act::AcosSquash,
        Act::AcoshShift,
        Act::NormScale,
        Act::Ratio,
        Act::Clamp,
        Act::Asinh,
    ];

    /// Dense layers `x ← act(W x + b)` with random widths and activations, and
    /// an elementwise product skip connection on the last layer.
    #[derive(Debug, Clone)]
    pub struct RandomProgram {
        dims: Vec<usize>,
        acts: Vec<Act>,
        params: Vec<Array2<f64>>,
    }

    impl RandomProgram {
        pub fn sample<R: Rng + ?Sized>(rng: &mut R) -> Self {
            let depth = rng.random_range(1..=4);
            let mut dims = vec![rng.random_range(1..=8)];
            for _ in 0..depth {
                dims.push(rng.random_range(1..=8));
            }
            let mut acts = Vec::new();
            let mut params = Vec::new();
            for l in 0..depth {
                acts.push(ACTS[rng.random_range(0..ACTS.len())]);
                let scale = 1.0 / (dims[l] as f64).sqrt();
                let w = Array2::from_shape_fn((dims[l + 1], dims[l]), |_| {
                    scale * crate::manifolds::std_normal(rng)
                });
                let b = Array2::from_shape_fn((dims[l + 1], 1), |_| 0.3 * crate::manifolds::std_normal(rng));
                params.push(w);
                params.push(b);
            }
            RandomProgram { dims, acts, params }
        }

        pub fn random_input<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
            Array1::from_shape_fn(self.dims[0], |_| crate::manifolds::std_normal(rng))
        }

        /// True when the pre-activations at `x` sit within `tol` of a kink of
        /// relu or clamp, where finite differences are meaningless.
        pub fn near_kink(&self, x: ArrayView1<f64>, tol: f64) -> bool {
            let mut h = x.to_owned().insert_axis(Axis(1));
            let mut e = Eval;
            for (l, act) in self.acts.iter().enumerate() {
                let z = self.params[2 * l].dot(&h) + &self.params[2 * l + 1];
                let kinks: &[f64] = match act {
                    Act::Relu => &[0.0],
                    Act::Clamp => &[-0.8, 0.8],
                    _ => &[],
                };
                if z.iter().any(|v| kinks.iter().any(|k| (v - k).abs() < tol)) {
                    return true;
                }
                h = apply_act(&mut e, *act, &z);
            }
            false
        }
    }

    fn apply_act<B: Backend>(b: &mut B, act: Act, z: &B::V) -> B::V {
        match act {
            Act::Tanh => b.unary(Unary::Tanh, z),
            Act::Sin => b.unary(Unary::Sin, z),
            Act::Cos => b.unary(Unary::Cos, z),
            Act::Relu => b.unary(Unary::Relu, z),
            Act::Identity => b.unary(Unary::Identity, z),
            Act::SqrtSoft => {
                let z2 = b.mul(z, z);
                let s = b.add_scalar(&z2, 1.0);
                b.unary(Unary::Sqrt, &s)
            }
            Act::AtanhSquash => {
                let t = b.unary(Unary::Tanh, z);
                let t = b.scale(&t, 0.5);
                b.unary(Unary::Atanh, &t)
            }
            Act::AcosSquash => {
                let t = b.unary(Unary::Tanh, z);
                let t = b.scale(&t, 0.5);
                b.unary(Unary::Acos, &t)
            }
            Act::AcoshShift => {
                let z2 = b.mul(z, z);
                let s = b.add_scalar(&z2, 1.5);
                b.unary(Unary::Acosh, &s)
            }
            Act::NormScale => {
                let n = b.norm(z);
                b.mul(z, &n)
            }
            Act::Ratio => {
                let t = b.unary(Unary::Tanh, z);
                let d = b.add_scalar(&t, 1.5);
                b.div(z, &d)
            }
            Act::Clamp => b.clamp(z, -0.8, 0.8),
            Act::Asinh => b.unary(Unary::Asinh, z),
        }
    }

    impl DifferentiableProgram for RandomProgram {
        fn input_dim(&self) -> usize {
            self.dims[0]
        }
        fn output_dim(&self) -> usize {
            *self.dims.last().unwrap()
        }
        fn param_names(&self) -> Vec<String> {
            (0..self.acts.len())
                .flat_map(|l| [format!("layer{l}.weight"), format!("layer{l}.bias")])
                .collect()
        }
        fn param_values(&self) -> Vec<Array2<f64>> {
            self.params.clone()
        }
        fn eval<B: Backend>(&self, b: &mut B, params: &[B::V], x: &B::V) -> B::V {
            let mut h = x.clone();
            let mut first_hidden = None;
            for (l, act) in self.acts.iter().enumerate() {
                let z = b.matmul(&params[2 * l], &h);
                let z = b.add(&z, &params[2 * l + 1]);
                h = apply_act(b, *act, &z);
                if l == 0 {
                    first_hidden = Some(h.clone());
                }
            }
            // multiplicative skip when shapes agree exercises the product rule
            if let Some(f) = first_hidden {
                if b.shape(&f) == b.shape(&h) && self.acts.len() > 1 {
                    let p = b.mul(&f, &h);
                    h = b.add(&h, &p);
                }
            }
            h
        }
    }
}

#[cfg(test)]
mod tests {
    use super::random::RandomProgram;
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// `f(x) = θ ⊙ x` with a diagonal parameter.
    struct Scale(Array2<f64>);

    impl DifferentiableProgram for Scale {
        fn input_dim(&self) -> usize {
            self.0.nrows()
        }
        fn output_dim(&self) -> usize {
            self.0.nrows()
        }
        fn param_names(&self) -> Vec<String> {
            vec!["theta".into()]
        }
        fn param_values(&self) -> Vec<Array2<f64>> {
            vec![self.0.clone()]
        }
        fn eval<B: Backend>(&self, b: &mut B, p: &[B::V], x: &B::V) -> B::V {
            b.mul(&p[0], x)
        }
    }

    struct TanhFirst;

    impl DifferentiableProgram for TanhFirst {
        fn input_dim(&self) -> usize {
            1
        }
        fn output_dim(&self) -> usize {
            1
        }
        fn param_names(&self) -> Vec<String> {
            vec![]
        }
        fn param_values(&self) -> Vec<Array2<f64>> {
            vec![]
        }
        fn eval<B: Backend>(&self, b: &mut B, _p: &[B::V], x: &B::V) -> B::V {
            b.unary(Unary::Tanh, x)
        }
    }

    struct OutputSq;
    impl JacobianLoss for OutputSq {
        fn evaluate(&self, o: ArrayView1<f64>, j: ArrayView2<f64>) -> LossTerm {
            LossTerm {
                value: o.dot(&o),
                d_output: o.to_owned() * 2.0,
                d_jacobian: Array2::zeros(j.dim()),
            }
        }
    }

    struct J11 {
        squared: bool,
    }
    impl JacobianLoss for J11 {
        fn evaluate(&self, o: ArrayView1<f64>, j: ArrayView2<f64>) -> LossTerm {
            let mut d = Array2::zeros(j.dim());
            let v = j[[0, 0]];
            d[[0, 0]] = if self.squared { 2.0 * v } else { 1.0 };
            LossTerm {
                value: if self.squared { v * v } else { v },
                d_output: Array1::zeros(o.len()),
                d_jacobian: d,
            }
        }
    }

    #[test]
    fn jacobian_examples() {
        let id = Scale(array![[1.0], [1.0]]);
        let (_, j) = value_and_jacobian(&id, array![1.0, 2.0].view());
        assert_eq!(j, Array2::eye(2));
        let lin = Scale(array![[2.0], [3.0]]);
        let (y, j) = value_and_jacobian(&lin, array![1.0, 1.0].view());
        assert_eq!(y, array![2.0, 3.0]);
        assert_eq!(j, array![[2.0, 0.0], [0.0, 3.0]]);
        let (_, j) = value_and_jacobian(&TanhFirst, array![0.0].view());
        assert_eq!(j, array![[1.0]]);
        for (prog_j, fd) in [
            (value_and_jacobian(&lin, array![1.0, 1.0].view()).1, finite_diff_jacobian(&lin, array![1.0, 1.0].view(), 1e-5)),
            (value_and_jacobian(&TanhFirst, array![0.0].view()).1, finite_diff_jacobian(&TanhFirst, array![0.0].view(), 1e-5)),
        ] {
            assert!(max_relative_error(fd.view(), prog_j.view()) < 1e-6);
        }
    }

    #[test]
    fn param_gradient_examples() {
        let p = Scale(array![[3.0]]);
        let (v, g) = param_gradients(&p, &OutputSq, array![2.0].view());
        assert_eq!(v, 36.0);
        assert!((g.get("theta").unwrap()[[0, 0]] - 24.0).abs() < 1e-12);
        let (v, g) = param_gradients(&p, &J11 { squared: false }, array![2.0].view());
        assert_eq!(v, 3.0);
        assert!((g.get("theta").unwrap()[[0, 0]] - 1.0).abs() < 1e-12);
        let (_, g) = param_gradients(&p, &J11 { squared: true }, array![2.0].view());
        assert!((g.get("theta").unwrap()[[0, 0]] - 6.0).abs() < 1e-12);
        assert!(matches!(g.get("phi"), Err(Error::UnknownParameter(_))));
    }

    #[test]
    fn special_functions_match_finite_differences() {
        let fs = [
            (Unary::Sinc, Unary::SincD),
            (Unary::TanhC, Unary::TanhCD),
            (Unary::AtanhC, Unary::AtanhCD),
            (Unary::AcosRatio, Unary::AcosRatioD),
        ];
        let xs: [f64; 14] = [-0.9, -0.45, -0.21, -0.19, -0.05, 0.0, 1e-7, 0.03, 0.19, 0.21, 0.49, 0.51, 0.7, 0.95];
        for (f, fd) in fs {
            for &x in &xs {
                let x = if f == Unary::AcosRatio { 1.0 - x.abs() * 1.5 } else { x };
                let h = 1e-5;
                let num1 = (f.apply(x + h) - f.apply(x - h)) / (2.0 * h);
                let num2 = (fd.apply(x + h) - fd.apply(x - h)) / (2.0 * h);
                let close = |a: f64, b: f64| (a - b).abs() < 1e-7 * b.abs().max(1.0);
                assert!(close(f.derivative(x, f.apply(x)), num1), "{f:?} at {x}");
                assert!(close(fd.apply(x), num1), "{f:?} at {x}");
                assert!(close(fd.derivative(x, fd.apply(x)), num2), "{fd:?} at {x}");
            }
        }
        let closed = |x: f64| (x.sin() / x, x.tanh() / x, x.atanh() / x);
        for x in [0.01, 0.1, 0.3] {
            let (s, t, a) = closed(x);
            assert!((Unary::Sinc.apply(x) - s).abs() < 1e-15);
            assert!((Unary::TanhC.apply(x) - t).abs() < 1e-15);
            assert!((Unary::AtanhC.apply(x) - a).abs() < 1e-15);
            let c = 1.0 - x;
            let g = c.acos() / (1.0 - c * c).sqrt();
            assert!((Unary::AcosRatio.apply(c) - g).abs() < 1e-13);
        }
        assert_eq!(Unary::Sinc.apply(0.0), 1.0);
        assert_eq!(Unary::AcosRatio.apply(1.0), 1.0);
    }

    #[test]
    fn broadcasting_and_reduction() {
        let mut t = Tape::new();
        let a = t.leaf(array![[1.0], [2.0]]);
        let b = t.leaf(array![[1.0, 2.0, 3.0]]);
        let c = t.mul(&a, &b);
        assert_eq!(t.value_ref(c), &array![[1.0, 2.0, 3.0], [2.0, 4.0, 6.0]]);
        let g = t.backward(&[(c, Array2::ones((2, 3)))], &[a, b]);
        assert_eq!(g[0], array![[6.0], [6.0]]);
        assert_eq!(g[1], array![[3.0, 3.0, 3.0]]);
    }

    #[test]
    fn random_programs_jacobians_and_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut checked = 0;
        while checked < 30 {
            let p = RandomProgram::sample(&mut rng);
            let x = p.random_input(&mut rng);
            if p.near_kink(x.view(), 1e-3) {
                continue;
            }
            let (_, j) = value_and_jacobian(&p, x.view());
            let fd = finite_diff_jacobian(&p, x.view(), 1e-5);
            assert!(max_relative_error(j.view(), fd.view()) < 1e-5);
            let (_, g) = param_gradients(&p, &SquaredJacobianLoss, x.view());
            let gfd = finite_diff_param_gradients(&p, &SquaredJacobianLoss, x.view(), 1e-5);
            for (a, b) in g.grads.iter().zip(&gfd.grads) {
                assert!(max_relative_error(a.view(), b.view()) < 1e-4);
            }
            checked += 1;
        }
    }

    #[test]
    fn batched_jacobians_match_single() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let p = RandomProgram::sample(&mut rng);
        let n = p.input_dim();
        let xs = Array2::from_shape_fn((n, 4), |_| crate::manifolds::std_normal(&mut rng));
        let seeds = vec![Array2::eye(n); 4];
        let (_, jacs) = batch_value_and_jacobian(&p, xs.view(), &seeds, 1.0);
        for (j, col) in jacs.iter().zip(xs.columns()) {
            let (_, single) = value_and_jacobian(&p, col);
            assert!((j - &single).iter().all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn tanh_fault_is_detected() {
        let (_, j) = batch_value_and_jacobian(&TanhFirst, array![[0.3]].view(), &[array![[1.0]]], 1.5);
        let fd = finite_diff_jacobian(&TanhFirst, array![0.3].view(), 1e-5);
        assert!(max_relative_error(j[0].view(), fd.view()) > 0.1);
    }

    #[test]
    fn sum_program_jacobian_is_sum() {
        let a = Scale(array![[2.0], [-1.0]]);
        let b = Scale(array![[0.5], [4.0]]);
        let x = array![0.3, -0.7];
        let (_, ja) = value_and_jacobian(&a, x.view());
        let (_, jb) = value_and_jacobian(&b, x.view());
        let sum = Scale(array![[2.5], [3.0]]);
        let (_, js) = value_and_jacobian(&sum, x.view());
        assert_eq!(js, ja + jb);
    }
}
