//! Fidelity and preservation objectives.

use std::fmt;

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis};
use serde::{Deserialize, Serialize};

use crate::diff::{Backend, JacobianLoss, LossTerm, Unary};
use crate::error::{Error, Result};
use crate::layers::RiemannianNetwork;
use crate::manifolds::{FactorKind, Manifold, ManifoldPoint};
use crate::spd::{self, SpdMatrix, EIGENVALUE_FLOOR};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Standard,
    Explicit,
    Conformal,
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Variant::Standard => "standard",
            Variant::Explicit => "explicit",
            Variant::Conformal => "conformal",
        };
        f.write_str(s)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DistanceKind {
    Euclidean,
    Cosine,
}

/// Allowed log-scale distortion `C ≥ 0`; infinity permits any conformal factor.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Conformality(f64);

impl Conformality {
    pub const ISOMETRY: Conformality = Conformality(0.0);
    pub const UNBOUNDED: Conformality = Conformality(f64::INFINITY);

    pub fn new(c: f64) -> Result<Self> {
        if c.is_nan() || c < 0.0 {
            return Err(Error::Config(format!("conformality must be >= 0, got {c}")));
        }
        Ok(Conformality(c))
    }

    pub fn value(self) -> f64 {
        self.0
    }
}

impl Serialize for Conformality {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        if self.0.is_infinite() {
            ser.serialize_str("inf")
        } else {
            ser.serialize_f64(self.0)
        }
    }
}

impl<'de> Deserialize<'de> for Conformality {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(f64),
            Text(String),
        }
        let c = match Raw::deserialize(de)? {
            Raw::Num(v) => v,
            Raw::Text(t) if t.eq_ignore_ascii_case("inf") || t.eq_ignore_ascii_case("infinity") => f64::INFINITY,
            Raw::Text(t) => return Err(serde::de::Error::custom(format!("bad conformality `{t}`"))),
        };
        Conformality::new(c).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossConfig {
    pub variant: Variant,
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_margin")]
    pub margin: f64,
    #[serde(default = "default_conformality")]
    pub conformality: Conformality,
    #[serde(default = "default_distance_kind")]
    pub distance_kind: DistanceKind,
    #[serde(default = "default_neighbor_count")]
    pub neighbor_count: usize,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_margin() -> f64 {
    1.0
}
fn default_conformality() -> Conformality {
    Conformality::UNBOUNDED
}
fn default_distance_kind() -> DistanceKind {
    DistanceKind::Euclidean
}
fn default_neighbor_count() -> usize {
    50
}

impl LossConfig {
    pub fn new(variant: Variant) -> Self {
        LossConfig {
            variant,
            lambda: default_lambda(),
            margin: default_margin(),
            conformality: default_conformality(),
            distance_kind: default_distance_kind(),
            neighbor_count: default_neighbor_count(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.margin > 0.0) {
            return Err(Error::Config("margin must be positive".into()));
        }
        if self.neighbor_count == 0 {
            return Err(Error::Config("neighbor_count must be at least 1".into()));
        }
        if !(self.lambda >= 0.0) {
            return Err(Error::Config("lambda must be nonnegative".into()));
        }
        Ok(())
    }
}

/// `‖a − b‖²`.
pub fn proximity_loss(source: ArrayView1<f64>, target: ArrayView1<f64>) -> f64 {
    let d = &source - &target;
    d.dot(&d)
}

/// Squared-distance retrofitting objective over an embedding table
/// (`nodes × d`): `Σ_edges ‖u − v‖² + λ Σ_nodes ‖w − w_source‖²`.
pub fn sr_objective(targets: ArrayView2<f64>, sources: ArrayView2<f64>, edges: &[(usize, usize)], lambda: f64) -> f64 {
    let fid: f64 = edges
        .iter()
        .map(|&(u, v)| proximity_loss(targets.row(u), targets.row(v)))
        .sum();
    let pres: f64 = targets
        .rows()
        .into_iter()
        .zip(sources.rows())
        .map(|(t, s)| proximity_loss(s, t))
        .sum();
    fid + lambda * pres
}

pub fn cosine_distance(a: ArrayView1<f64>, b: ArrayView1<f64>) -> f64 {
    let na = a.dot(&a).sqrt();
    let nb = b.dot(&b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - a.dot(&b) / (na * nb)
}

pub fn embedding_distance(a: ArrayView1<f64>, b: ArrayView1<f64>, kind: DistanceKind) -> f64 {
    match kind {
        DistanceKind::Euclidean => (&a - &b).dot(&(&a - &b)).sqrt(),
        DistanceKind::Cosine => cosine_distance(a, b),
    }
}

/// `(d(u, v) − d_G(u, v))²`.
pub fn er_fidelity(u: ArrayView1<f64>, v: ArrayView1<f64>, graph_dist: f64, kind: DistanceKind) -> f64 {
    (embedding_distance(u, v, kind) - graph_dist).powi(2)
}

/// `max(0, γ + d_pos − d_neg)`.
pub fn hinge(margin: f64, d_pos: f64, d_neg: f64) -> f64 {
    (margin + d_pos - d_neg).max(0.0)
}

/// Max-margin fidelity for one edge with geodesic distances on `m`.
pub fn cr_fidelity(m: &Manifold, u: ArrayView1<f64>, v: ArrayView1<f64>, negatives: &[ArrayView1<f64>], margin: f64) -> f64 {
    let dp = m.distance(u, v);
    negatives.iter().map(|x| hinge(margin, dp, m.distance(u, *x))).sum()
}

/// Column-wise geodesic distances between batches, written against the
/// differentiation backend. Sphere factors use `π − 2·acos(‖x−y‖/2)`, ball
/// factors `2·asinh(‖x−y‖/sqrt((1−‖x‖²)(1−‖y‖²)))`; both stay differentiable
/// at coincident points.
pub fn distance_cols<B: Backend>(b: &mut B, m: &Manifold, x: &B::V, y: &B::V) -> B::V {
    let slots = m.slots();
    let mut parts = Vec::with_capacity(slots.len());
    for slot in &slots {
        let (xs, ys) = if slots.len() == 1 {
            (x.clone(), y.clone())
        } else {
            (b.slice_rows(x, slot.ambient.clone()), b.slice_rows(y, slot.ambient.clone()))
        };
        let diff = b.sub(&xs, &ys);
        let chord = b.norm(&diff);
        let d = match slot.kind {
            FactorKind::Euclidean => chord,
            FactorKind::Sphere => {
                let h = b.scale(&chord, 0.5);
                let h = b.clamp(&h, -1.0, 1.0);
                let a = b.unary(Unary::Acos, &h);
                let a = b.scale(&a, -2.0);
                b.add_scalar(&a, std::f64::consts::PI)
            }
            FactorKind::PoincareBall => {
                let one = b.scalar(1.0);
                let x2 = b.dot_cols(&xs, &xs);
                let y2 = b.dot_cols(&ys, &ys);
                let ax = b.sub(&one, &x2);
                let ay = b.sub(&one, &y2);
                let den = b.mul(&ax, &ay);
                let den = b.unary(Unary::Sqrt, &den);
                let z = b.div(&chord, &den);
                let a = b.unary(Unary::Asinh, &z);
                b.scale(&a, 2.0)
            }
        };
        parts.push(d);
    }
    if parts.len() == 1 {
        return parts.pop().unwrap();
    }
    let stacked = b.concat_rows(&parts);
    b.norm(&stacked)
}

/// Column-wise `1 − cos(x, y)`.
pub fn cosine_distance_cols<B: Backend>(b: &mut B, x: &B::V, y: &B::V) -> B::V {
    let xy = b.dot_cols(x, y);
    let nx = b.norm(x);
    let ny = b.norm(y);
    let den = b.mul(&nx, &ny);
    let den = b.clamp(&den, 1e-12, f64::INFINITY);
    let c = b.div(&xy, &den);
    let one = b.scalar(1.0);
    b.sub(&one, &c)
}

/// Value, gradient with respect to `F` and number of floored eigenvalues of
/// the conformality penalty
/// `min_{|α| ≤ C} ‖log(G^{-1/2} F G^{-1/2}) − α I‖²`.
///
/// With `ℓ = ln det(F G⁻¹)` and `n = dim F` the minimizer is
/// `α = clamp(ℓ/n, −C, C)`, which gives `‖log‖² − ℓ²/n` when `|ℓ|/n ≤ C` and
/// `‖log‖² − 2C|ℓ| + C²n` otherwise.
pub fn conformality_penalty(f: &SpdMatrix, g: &SpdMatrix, c: Conformality) -> Result<(f64, Array2<f64>, usize)> {
    if f.dim() != g.dim() {
        return Err(Error::DimMismatch {
            expected: g.dim(),
            actual: f.dim(),
        });
    }
    // with G = I the symmetrized ratio is F itself, whose eigenpairs are cached
    let w = (!g.is_identity()).then(|| g.inv_sqrt());
    let m = match &w {
        Some(w) => SpdMatrix::new(w.dot(f.entries()).dot(w))?,
        None => f.clone(),
    };
    let lam = m.eigenvalues();
    let n = lam.len() as f64;
    let logs = lam.mapv(f64::ln);
    let ldr: f64 = logs.sum();
    let sq: f64 = logs.iter().map(|l| l * l).sum();
    let cv = c.value();
    let (value, dh) = if ldr.abs() / n <= cv {
        (sq - ldr * ldr / n, 2.0 * ldr / n)
    } else {
        (sq - 2.0 * cv * ldr.abs() + cv * cv * n, 2.0 * cv * ldr.signum())
    };
    let floored = lam.iter().filter(|&&l| l <= EIGENVALUE_FLOOR).count() + f.floored_count();
    let dl: Array1<f64> = lam
        .iter()
        .zip(logs.iter())
        .map(|(&l, &lg)| if l <= EIGENVALUE_FLOOR { 0.0 } else { (2.0 * lg - dh) / l })
        .collect();
    let v = m.eigenvectors();
    let dm = (v * &dl.insert_axis(Axis(0))).dot(&v.t());
    let df = match &w {
        Some(w) => w.dot(&dm).dot(w),
        None => dm,
    };
    Ok((value, spd::symmetrize(df.view()), floored))
}

/// Conformality penalty value only.
pub fn conformality_value(f: &SpdMatrix, g: &SpdMatrix, c: Conformality) -> Result<f64> {
    conformality_penalty(f, g, c).map(|r| r.0)
}

/// Pullback `F = Jᵀ Ĝ J` of the target metric through an ambient Jacobian
/// `J` (`target ambient × source intrinsic`) whose columns are tangent at `y`.
pub fn pullback_from_jacobian(target: &Manifold, y: ArrayView1<f64>, j: ArrayView2<f64>) -> Result<SpdMatrix> {
    let g = target.ambient_metric_diag(y);
    let gj = &j * &g.view().insert_axis(Axis(1));
    SpdMatrix::new(spd::symmetrize(j.t().dot(&gj).view()))
}

/// Pullback metric of `net` at `x`, expressed in the orthonormal source chart.
pub fn pullback_metric(net: &RiemannianNetwork, x: &ManifoldPoint) -> Result<SpdMatrix> {
    check_source(net, x)?;
    let xs = x.coords().view().insert_axis(Axis(1));
    let (ys, jacs) = net.ambient_jacobians(xs);
    pullback_from_jacobian(net.target(), ys.column(0), jacs[0].view())
}

fn check_source(net: &RiemannianNetwork, x: &ManifoldPoint) -> Result<()> {
    if x.manifold() != net.source() {
        return Err(Error::ManifoldMismatch {
            left: x.manifold().to_string(),
            right: net.source().to_string(),
        });
    }
    Ok(())
}

/// `D(F_x, G_x)`: squared affine-invariant distance between pullback and
/// source metrics.
pub fn isometry_loss(net: &RiemannianNetwork, x: &ManifoldPoint) -> Result<f64> {
    let f = pullback_metric(net, x)?;
    let g = x.manifold().metric_tensor(x.coords().view())?;
    spd::spd_geodesic_sq(&f, &g)
}

pub fn conformality_loss(net: &RiemannianNetwork, x: &ManifoldPoint, c: Conformality) -> Result<f64> {
    let f = pullback_metric(net, x)?;
    let g = x.manifold().metric_tensor(x.coords().view())?;
    conformality_value(&f, &g, c)
}

/// Conformality penalty as a function of a network output `y` and its ambient
/// Jacobian `J` (seeded with the source tangent basis).
#[derive(Debug, Clone)]
pub struct PullbackLoss {
    pub target: Manifold,
    pub source_metric: SpdMatrix,
    pub conformality: Conformality,
}

impl PullbackLoss {
    /// Loss term plus the number of floored eigenvalues.
    pub fn evaluate_counted(&self, y: ArrayView1<f64>, j: ArrayView2<f64>) -> Result<(LossTerm, usize)> {
        let f = pullback_from_jacobian(&self.target, y, j)?;
        let (value, s, floored) = conformality_penalty(&f, &self.source_metric, self.conformality)?;
        let g = self.target.ambient_metric_diag(y);
        let js = j.dot(&s);
        let d_jacobian = &js * &g.view().insert_axis(Axis(1)) * 2.0;
        let mut d_output = Array1::zeros(y.len());
        for slot in self.target.slots() {
            if slot.kind != FactorKind::PoincareBall {
                continue;
            }
            let r = slot.ambient.clone();
            let yb = y.slice(s![r.clone()]);
            let jb = j.slice(s![r.clone(), ..]);
            let jsb = js.slice(s![r.clone(), ..]);
            // tr(S J_bᵀ J_b)
            let tr: f64 = (&jsb * &jb).sum();
            let a = 1.0 - yb.dot(&yb);
            let dl2 = &yb * (16.0 / (a * a * a));
            d_output.slice_mut(s![r]).assign(&(dl2 * tr));
        }
        Ok((
            LossTerm {
                value,
                d_output,
                d_jacobian,
            },
            floored,
        ))
    }
}

impl JacobianLoss for PullbackLoss {
    fn evaluate(&self, output: ArrayView1<f64>, jacobian: ArrayView2<f64>) -> LossTerm {
        self.evaluate_counted(output, jacobian)
            .expect("pullback metric dimensions are fixed by the network")
            .0
    }
}

/// Per-term values of the combined objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ObjectiveValue {
    pub total: f64,
    pub fidelity: f64,
    pub preservation: f64,
}

/// `w_f Σ cr_fidelity + w_p λ Σ conformality_loss` on a batch.
///
/// `sources` holds one source point per column; `edges` and `vertices` index
/// its columns and `negatives[i]` lists the negatives for `edges[i]`.
pub fn total_conformal_objective(
    net: &RiemannianNetwork,
    sources: ArrayView2<f64>,
    edges: &[(usize, usize)],
    vertices: &[usize],
    negatives: &[Vec<usize>],
    cfg: &LossConfig,
    weights: (f64, f64),
) -> Result<ObjectiveValue> {
    if negatives.len() != edges.len() {
        return Err(Error::DimMismatch {
            expected: edges.len(),
            actual: negatives.len(),
        });
    }
    let outputs = net.forward_batch(sources);
    let target = net.target();
    let mut fidelity = 0.0;
    for ((u, v), negs) in edges.iter().zip(negatives) {
        let ys: Vec<ArrayView1<f64>> = negs.iter().map(|&x| outputs.column(x)).collect();
        fidelity += cr_fidelity(target, outputs.column(*u), outputs.column(*v), &ys, cfg.margin);
    }
    let mut preservation = 0.0;
    for &w in vertices {
        let x = ManifoldPoint::new(net.source().clone(), sources.column(w).to_owned())?;
        preservation += conformality_loss(net, &x, cfg.conformality)?;
    }
    Ok(ObjectiveValue {
        total: weights.0 * fidelity + weights.1 * cfg.lambda * preservation,
        fidelity,
        preservation,
    })
}
