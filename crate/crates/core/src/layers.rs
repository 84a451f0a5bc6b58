//! Riemannian feedforward layers `x ↦ exp_{b_t}(σ(A · log_{b_s}(x)))` and
//! networks built by stacking them.
//!
//! The matrix `A` acts on intrinsic chart coordinates: the tangent vector at
//! `b_s` is read off in the orthonormal basis from
//! [`Manifold::tangent_basis`], and the result is re-embedded with the basis
//! at `b_t`. The nonlinearity is applied to the target chart coordinates.

use std::fmt;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::diff::{self, Backend, DifferentiableProgram, Unary};
use crate::error::{Error, Result};
use crate::manifolds::{std_normal, FactorKind, Manifold, ManifoldPoint, BALL_MAX_RADIUS};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Tanh,
    Relu,
    Identity,
}

impl Activation {
    fn unary(self) -> Unary {
        match self {
            Activation::Tanh => Unary::Tanh,
            Activation::Relu => Unary::Relu,
            Activation::Identity => Unary::Identity,
        }
    }
}

/// One Riemannian feedforward layer.
#[derive(Debug, Clone, PartialEq)]
pub struct RiemannianLayer {
    pub source: Manifold,
    pub target: Manifold,
    /// `target.intrinsic_dim() × source.intrinsic_dim()`
    pub weight: Array2<f64>,
    pub bias_source: Array1<f64>,
    pub bias_target: Array1<f64>,
    pub activation: Activation,
}

impl RiemannianLayer {
    pub fn new(
        source: Manifold,
        target: Manifold,
        weight: Array2<f64>,
        bias_source: Array1<f64>,
        bias_target: Array1<f64>,
        activation: Activation,
    ) -> Result<Self> {
        let layer = RiemannianLayer {
            source,
            target,
            weight,
            bias_source,
            bias_target,
            activation,
        };
        layer.validate()?;
        Ok(layer)
    }

    pub fn validate(&self) -> Result<()> {
        let want = (self.target.intrinsic_dim(), self.source.intrinsic_dim());
        if self.weight.dim() != want {
            return Err(Error::DimMismatch {
                expected: want.0 * want.1,
                actual: self.weight.len(),
            });
        }
        self.source.check_point(self.bias_source.view())?;
        self.target.check_point(self.bias_target.view())?;
        Ok(())
    }

    /// Applies the layer to a batch of source points (`ambient × k`).
    pub fn apply<B: Backend>(
        &self,
        b: &mut B,
        weight: &B::V,
        bias_source: &B::V,
        bias_target: &B::V,
        x: &B::V,
    ) -> B::V {
        let v = log_at(b, &self.source, bias_source, x);
        let c = to_chart(b, &self.source, bias_source, &v);
        let z = b.matmul(weight, &c);
        let z = b.unary(self.activation.unary(), &z);
        let u = from_chart(b, &self.target, bias_target, &z);
        exp_at(b, &self.target, bias_target, &u)
    }

    fn check_input(&self, x: ArrayView1<f64>) -> Result<()> {
        self.source.check_point(x)?;
        for slot in self.source.slots() {
            if slot.kind == FactorKind::Sphere {
                let r = slot.ambient.clone();
                let d = x.slice(s![r.clone()]).dot(&self.bias_source.slice(s![r]));
                if d < -1.0 + 1e-9 {
                    return Err(Error::UndefinedLog(
                        "input is antipodal to the source bias".into(),
                    ));
                }
            }
        }
        Ok(())
    }
}

/// Applies one layer to a point.
pub fn rfl_forward(layer: &RiemannianLayer, x: &ManifoldPoint) -> Result<ManifoldPoint> {
    if x.manifold() != &layer.source {
        return Err(Error::ManifoldMismatch {
            left: x.manifold().to_string(),
            right: layer.source.to_string(),
        });
    }
    layer.check_input(x.coords().view())?;
    let mut e = diff::Eval;
    let col = |a: &Array1<f64>| a.clone().insert_axis(Axis(1));
    let y = layer.apply(
        &mut e,
        &layer.weight,
        &col(&layer.bias_source),
        &col(&layer.bias_target),
        &col(x.coords()),
    );
    ManifoldPoint::new(layer.target.clone(), y.column(0).to_owned())
}

/// Stack of layers with matching interfaces.
#[derive(Debug, Clone, PartialEq)]
pub struct RiemannianNetwork {
    layers: Vec<RiemannianLayer>,
}

impl RiemannianNetwork {
    pub fn new(layers: Vec<RiemannianLayer>) -> Result<Self> {
        if layers.is_empty() {
            return Err(Error::EmptyInput("network without layers".into()));
        }
        for w in layers.windows(2) {
            if w[0].target != w[1].source {
                return Err(Error::ManifoldMismatch {
                    left: w[0].target.to_string(),
                    right: w[1].source.to_string(),
                });
            }
        }
        for l in &layers {
            l.validate()?;
        }
        Ok(RiemannianNetwork { layers })
    }

    pub fn layers(&self) -> &[RiemannianLayer] {
        &self.layers
    }

    pub fn source(&self) -> &Manifold {
        &self.layers[0].source
    }

    pub fn target(&self) -> &Manifold {
        &self.layers.last().unwrap().target
    }

    /// Name of the weight matrix of the last layer.
    pub fn last_weight_name(&self) -> String {
        format!("layer{}.weight", self.layers.len() - 1)
    }

    /// Replaces every parameter from a table ordered like
    /// [`DifferentiableProgram::param_values`].
    pub fn set_params(&mut self, params: &[Array2<f64>]) -> Result<()> {
        if params.len() != 3 * self.layers.len() {
            return Err(Error::DimMismatch {
                expected: 3 * self.layers.len(),
                actual: params.len(),
            });
        }
        for (i, l) in self.layers.iter_mut().enumerate() {
            if params[3 * i].dim() != l.weight.dim() {
                return Err(Error::DimMismatch {
                    expected: l.weight.len(),
                    actual: params[3 * i].len(),
                });
            }
            l.weight = params[3 * i].clone();
            l.bias_source = params[3 * i + 1].column(0).to_owned();
            l.bias_target = params[3 * i + 2].column(0).to_owned();
        }
        Ok(())
    }

    /// Maps a batch of source points (`ambient × k`).
    pub fn forward_batch(&self, xs: ArrayView2<f64>) -> Array2<f64> {
        diff::evaluate(self, xs)
    }

    /// Ambient Jacobians composed with the source tangent basis, one per
    /// column of `xs`: each is `target ambient × source intrinsic`.
    pub fn ambient_jacobians(&self, xs: ArrayView2<f64>) -> (Array2<f64>, Vec<Array2<f64>>) {
        let seeds = source_seeds(self.source(), xs);
        diff::batch_value_and_jacobian(self, xs, &seeds, 1.0)
    }
}

/// Tangent bases at every column of `xs`, used to seed forward-mode passes.
pub fn source_seeds(m: &Manifold, xs: ArrayView2<f64>) -> Vec<Array2<f64>> {
    xs.columns().into_iter().map(|c| m.tangent_basis(c)).collect()
}

pub fn network_forward(net: &RiemannianNetwork, x: &ManifoldPoint) -> Result<ManifoldPoint> {
    let mut p = x.clone();
    for l in &net.layers {
        p = rfl_forward(l, &p)?;
    }
    Ok(p)
}

/// Jacobian between the orthonormal charts at `x` and at `f(x)`
/// (`target intrinsic × source intrinsic`).
pub fn network_jacobian(net: &RiemannianNetwork, x: &ManifoldPoint) -> Result<Array2<f64>> {
    if x.manifold() != net.source() {
        return Err(Error::ManifoldMismatch {
            left: x.manifold().to_string(),
            right: net.source().to_string(),
        });
    }
    net.layers[0].check_input(x.coords().view())?;
    let xs = x.coords().view().insert_axis(Axis(1));
    let (ys, jacs) = net.ambient_jacobians(xs);
    let by = net.target().tangent_basis(ys.column(0));
    Ok(by.t().dot(&jacs[0]))
}

impl DifferentiableProgram for RiemannianNetwork {
    fn input_dim(&self) -> usize {
        self.source().ambient_dim()
    }

    fn output_dim(&self) -> usize {
        self.target().ambient_dim()
    }

    fn param_names(&self) -> Vec<String> {
        (0..self.layers.len())
            .flat_map(|i| {
                [
                    format!("layer{i}.weight"),
                    format!("layer{i}.bias_source"),
                    format!("layer{i}.bias_target"),
                ]
            })
            .collect()
    }

    fn param_values(&self) -> Vec<Array2<f64>> {
        self.layers
            .iter()
            .flat_map(|l| {
                [
                    l.weight.clone(),
                    l.bias_source.clone().insert_axis(Axis(1)),
                    l.bias_target.clone().insert_axis(Axis(1)),
                ]
            })
            .collect()
    }

    fn eval<B: Backend>(&self, b: &mut B, params: &[B::V], x: &B::V) -> B::V {
        let mut h = x.clone();
        for (i, l) in self.layers.iter().enumerate() {
            h = l.apply(b, &params[3 * i], &params[3 * i + 1], &params[3 * i + 2], &h);
        }
        h
    }
}

/// Architecture chain such as `E50 -> E1600 -> E1600 -> S30xH30`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Architecture {
    pub manifolds: Vec<Manifold>,
}

impl Architecture {
    /// Source, `depth` Euclidean hidden layers of `width`, then the target.
    pub fn standard(source: Manifold, width: usize, depth: usize, target: Manifold) -> Self {
        let mut manifolds = vec![source];
        manifolds.extend((0..depth).map(|_| Manifold::Euclidean(width)));
        manifolds.push(target);
        Architecture { manifolds }
    }

    pub fn source(&self) -> &Manifold {
        &self.manifolds[0]
    }

    pub fn target(&self) -> &Manifold {
        self.manifolds.last().unwrap()
    }
}

impl fmt::Display for Architecture {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self.manifolds.iter().map(|m| m.to_string()).collect();
        write!(f, "{}", parts.join(" -> "))
    }
}

impl FromStr for Architecture {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let manifolds = s
            .split("->")
            .map(|p| p.trim().parse::<Manifold>())
            .collect::<Result<Vec<_>>>()?;
        if manifolds.len() < 2 {
            return Err(Error::Config(format!(
                "architecture `{s}` needs at least a source and a target"
            )));
        }
        Ok(Architecture { manifolds })
    }
}

impl Serialize for Architecture {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Architecture {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// Builds a network for `arch` with tanh on hidden layers and identity on the
/// last one. Weights have orthonormal rows or columns; biases start at each
/// manifold's base point.
pub fn init_network<R: Rng + ?Sized>(arch: &Architecture, rng: &mut R) -> Result<RiemannianNetwork> {
    let n = arch.manifolds.len() - 1;
    let layers = (0..n)
        .map(|i| {
            let src = arch.manifolds[i].clone();
            let tgt = arch.manifolds[i + 1].clone();
            let weight = semi_orthogonal(tgt.intrinsic_dim(), src.intrinsic_dim(), rng);
            let activation = if i + 1 == n {
                Activation::Identity
            } else {
                Activation::Tanh
            };
            RiemannianLayer::new(
                src.clone(),
                tgt.clone(),
                weight,
                src.base_point(),
                tgt.base_point(),
                activation,
            )
        })
        .collect::<Result<Vec<_>>>()?;
    if arch.target().intrinsic_dim() < arch.source().intrinsic_dim() {
        log::warn!(
            "target dimension {} is below source dimension {}; pullback metrics will be singular",
            arch.target().intrinsic_dim(),
            arch.source().intrinsic_dim()
        );
    }
    RiemannianNetwork::new(layers)
}

/// Random `rows × cols` matrix with orthonormal rows (wide) or columns (tall).
pub fn semi_orthogonal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    let tall = rows >= cols;
    let (n, k) = if tall { (rows, cols) } else { (cols, rows) };
    // k orthonormal vectors of length n by Gram-Schmidt with reorthogonalization
    let mut q = Array2::<f64>::zeros((n, k));
    let mut j = 0;
    while j < k {
        let mut v = Array1::from_shape_fn(n, |_| std_normal(rng));
        for _ in 0..2 {
            for i in 0..j {
                let qi = q.column(i);
                let d = qi.dot(&v);
                v.scaled_add(-d, &qi);
            }
        }
        let nv = v.dot(&v).sqrt();
        if nv < 1e-8 {
            continue;
        }
        q.column_mut(j).assign(&(v / nv));
        j += 1;
    }
    if tall {
        q
    } else {
        q.reversed_axes()
    }
}

// Factor-wise geometry written against the differentiation backend. `base`
// is an `ambient × 1` column, batches are `ambient × k`.

fn per_slot<B: Backend>(
    b: &mut B,
    m: &Manifold,
    base: &B::V,
    x: &B::V,
    use_intrinsic_input: bool,
    f: impl Fn(&mut B, FactorKind, &B::V, &B::V) -> B::V,
) -> B::V {
    let slots = m.slots();
    if slots.len() == 1 {
        return f(b, slots[0].kind, base, x);
    }
    let parts: Vec<B::V> = slots
        .iter()
        .map(|slot| {
            let bs = b.slice_rows(base, slot.ambient.clone());
            let r = if use_intrinsic_input {
                slot.intrinsic.clone()
            } else {
                slot.ambient.clone()
            };
            let xs = b.slice_rows(x, r);
            f(b, slot.kind, &bs, &xs)
        })
        .collect();
    b.concat_rows(&parts)
}

/// Möbius addition of a base column with every column of `y`.
pub fn mobius_add<B: Backend>(b: &mut B, x: &B::V, y: &B::V) -> B::V {
    let xy = b.dot_cols(x, y);
    let x2 = b.dot_cols(x, x);
    let y2 = b.dot_cols(y, y);
    let two_xy = b.scale(&xy, 2.0);
    let one_two_xy = b.add_scalar(&two_xy, 1.0);
    let cx = b.add(&one_two_xy, &y2);
    let one = b.scalar(1.0);
    let cy = b.sub(&one, &x2);
    let tx = b.mul(x, &cx);
    let ty = b.mul(y, &cy);
    let num = b.add(&tx, &ty);
    let x2y2 = b.mul(&x2, &y2);
    let den = b.add(&one_two_xy, &x2y2);
    b.div(&num, &den)
}

fn conformal_factor<B: Backend>(b: &mut B, p: &B::V) -> B::V {
    let p2 = b.dot_cols(p, p);
    let one = b.scalar(1.0);
    let d = b.sub(&one, &p2);
    let two = b.scalar(2.0);
    b.div(&two, &d)
}

fn clamp_radius<B: Backend>(b: &mut B, y: &B::V) -> B::V {
    let n = b.norm(y);
    let n = b.clamp(&n, BALL_MAX_RADIUS, f64::INFINITY);
    let r = b.scalar(BALL_MAX_RADIUS);
    let f = b.div(&r, &n);
    b.mul(y, &f)
}

/// Logarithmic map at `base` for every column of `x`.
pub fn log_at<B: Backend>(b: &mut B, m: &Manifold, base: &B::V, x: &B::V) -> B::V {
    per_slot(b, m, base, x, false, |b, kind, p, x| match kind {
        FactorKind::Euclidean => b.sub(x, p),
        FactorKind::Sphere => {
            let c = b.dot_cols(p, x);
            let c = b.clamp(&c, -1.0 + 1e-12, f64::INFINITY);
            let g = b.unary(Unary::AcosRatio, &c);
            let pc = b.mul(p, &c);
            let u = b.sub(x, &pc);
            b.mul(&u, &g)
        }
        FactorKind::PoincareBall => {
            let np = b.neg(p);
            let w = mobius_add(b, &np, x);
            let nw = b.norm(&w);
            let nw = b.clamp(&nw, -1.0, 1.0 - 1e-12);
            let a = b.unary(Unary::AtanhC, &nw);
            let lam = conformal_factor(b, p);
            let two = b.scalar(2.0);
            let coef = b.div(&two, &lam);
            let coef = b.mul(&coef, &a);
            b.mul(&w, &coef)
        }
    })
}

/// Exponential map at `base` for every column of the ambient tangent `v`.
pub fn exp_at<B: Backend>(b: &mut B, m: &Manifold, base: &B::V, v: &B::V) -> B::V {
    per_slot(b, m, base, v, false, |b, kind, p, v| match kind {
        FactorKind::Euclidean => b.add(p, v),
        FactorKind::Sphere => {
            let n = b.norm(v);
            let c = b.unary(Unary::Cos, &n);
            let sc = b.unary(Unary::Sinc, &n);
            let a = b.mul(p, &c);
            let bb = b.mul(v, &sc);
            let q = b.add(&a, &bb);
            let nq = b.norm(&q);
            b.div(&q, &nq)
        }
        FactorKind::PoincareBall => {
            let n = b.norm(v);
            let lam = conformal_factor(b, p);
            let half = b.scale(&lam, 0.5);
            let t = b.mul(&half, &n);
            let tc = b.unary(Unary::TanhC, &t);
            let coef = b.mul(&half, &tc);
            let step = b.mul(v, &coef);
            let y = mobius_add(b, p, &step);
            clamp_radius(b, &y)
        }
    })
}

/// Householder vector `w = p + sign(p₀)e₁` as a constant-plus-parameter column.
fn householder_w<B: Backend>(b: &mut B, p: &B::V) -> B::V {
    let pv = b.value(p);
    let n = pv.nrows();
    let sign = if pv[[0, 0]] >= 0.0 { 1.0 } else { -1.0 };
    let mut e = Array2::zeros((n, 1));
    e[[0, 0]] = sign;
    let e = b.constant(e);
    b.add(p, &e)
}

/// `H v` for the Householder reflection at `p`.
fn householder_apply<B: Backend>(b: &mut B, w: &B::V, v: &B::V) -> B::V {
    let ww = b.dot_cols(w, w);
    let wv = b.dot_cols(w, v);
    let r = b.div(&wv, &ww);
    let r = b.scale(&r, 2.0);
    let wr = b.mul(w, &r);
    b.sub(v, &wr)
}

/// Ambient tangent vectors to orthonormal chart coordinates.
pub fn to_chart<B: Backend>(b: &mut B, m: &Manifold, base: &B::V, v: &B::V) -> B::V {
    per_slot(b, m, base, v, false, |b, kind, p, v| match kind {
        FactorKind::Euclidean | FactorKind::PoincareBall => v.clone(),
        FactorKind::Sphere => {
            let w = householder_w(b, p);
            let hv = householder_apply(b, &w, v);
            let rows = b.shape(&hv).0;
            b.slice_rows(&hv, 1..rows)
        }
    })
}

/// Orthonormal chart coordinates to ambient tangent vectors.
pub fn from_chart<B: Backend>(b: &mut B, m: &Manifold, base: &B::V, c: &B::V) -> B::V {
    per_slot(b, m, base, c, true, |b, kind, p, c| match kind {
        FactorKind::Euclidean | FactorKind::PoincareBall => c.clone(),
        FactorKind::Sphere => {
            let k = b.shape(c).1;
            let z = b.constant(Array2::zeros((1, k)));
            let padded = b.concat_rows(&[z, c.clone()]);
            let w = householder_w(b, p);
            householder_apply(b, &w, &padded)
        }
    })
}
