//! Closed-form geometry for Euclidean space, the unit sphere, the Poincaré ball
//! and their products.
//!
//! Points and tangent vectors are stored in ambient coordinates. A sphere of
//! intrinsic dimension `d` lives in `R^{d+1}`; the other factors use `R^d`.
//! Products concatenate the factor coordinates in order.
//!
//! The raw kernels on [`Manifold`] take ndarray views and do not validate
//! their inputs; [`ManifoldPoint`] and [`TangentVector`] are the checked,
//! descriptor-bound forms used at API boundaries.

use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use ndarray::{s, Array1, Array2, ArrayView1};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spd::SpdMatrix;

/// Largest radius a Poincaré-ball point may have.
pub const BALL_MAX_RADIUS: f64 = 1.0 - 1e-5;
/// Allowed deviation of sphere points from unit norm.
pub const SPHERE_TOL: f64 = 1e-9;

/// A single non-product manifold.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum FactorKind {
    Euclidean,
    Sphere,
    PoincareBall,
}

impl FactorKind {
    fn letter(self) -> char {
        match self {
            FactorKind::Euclidean => 'E',
            FactorKind::Sphere => 'S',
            FactorKind::PoincareBall => 'H',
        }
    }
}

/// Recursive manifold description. Products are always flat and have at least
/// two factors; use [`Manifold::product`] to build them.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum Manifold {
    Euclidean(usize),
    Sphere(usize),
    PoincareBall(usize),
    Product(Vec<Manifold>),
}

/// Location of one factor inside the concatenated ambient and intrinsic
/// coordinates of a (possibly product) manifold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FactorSlot {
    pub kind: FactorKind,
    pub dim: usize,
    pub ambient: Range<usize>,
    pub intrinsic: Range<usize>,
}

impl Manifold {
    /// Builds a product, flattening nested products. A single factor is
    /// returned unchanged.
    pub fn product(factors: Vec<Manifold>) -> Result<Manifold> {
        let mut flat = Vec::new();
        for f in factors {
            match f {
                Manifold::Product(inner) => flat.extend(inner),
                other => flat.push(other),
            }
        }
        for f in &flat {
            if f.intrinsic_dim() == 0 {
                return Err(Error::ParseManifold(format!("zero-dimensional factor {f}")));
            }
        }
        match flat.len() {
            0 => Err(Error::EmptyInput("product with no factors".into())),
            1 => Ok(flat.pop().unwrap()),
            _ => Ok(Manifold::Product(flat)),
        }
    }

    pub fn intrinsic_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(d) | Manifold::Sphere(d) | Manifold::PoincareBall(d) => *d,
            Manifold::Product(fs) => fs.iter().map(Manifold::intrinsic_dim).sum(),
        }
    }

    pub fn ambient_dim(&self) -> usize {
        match self {
            Manifold::Euclidean(d) | Manifold::PoincareBall(d) => *d,
            Manifold::Sphere(d) => d + 1,
            Manifold::Product(fs) => fs.iter().map(Manifold::ambient_dim).sum(),
        }
    }

    pub fn is_euclidean(&self) -> bool {
        self.slots().iter().all(|s| s.kind == FactorKind::Euclidean)
    }

    /// Factor layout in order; a non-product manifold has one slot.
    pub fn slots(&self) -> Vec<FactorSlot> {
        let simple: Vec<(FactorKind, usize)> = match self {
            Manifold::Product(fs) => fs.iter().flat_map(|f| f.simple_factors()).collect(),
            _ => self.simple_factors(),
        };
        let mut a = 0;
        let mut i = 0;
        simple
            .into_iter()
            .map(|(kind, dim)| {
                let amb = if kind == FactorKind::Sphere { dim + 1 } else { dim };
                let slot = FactorSlot {
                    kind,
                    dim,
                    ambient: a..a + amb,
                    intrinsic: i..i + dim,
                };
                a += amb;
                i += dim;
                slot
            })
            .collect()
    }

    fn simple_factors(&self) -> Vec<(FactorKind, usize)> {
        match self {
            Manifold::Euclidean(d) => vec![(FactorKind::Euclidean, *d)],
            Manifold::Sphere(d) => vec![(FactorKind::Sphere, *d)],
            Manifold::PoincareBall(d) => vec![(FactorKind::PoincareBall, *d)],
            Manifold::Product(fs) => fs.iter().flat_map(|f| f.simple_factors()).collect(),
        }
    }

    /// Checks the point invariants for raw ambient coordinates.
    pub fn check_point(&self, p: ArrayView1<f64>) -> Result<()> {
        if p.len() != self.ambient_dim() {
            return Err(Error::DimMismatch {
                expected: self.ambient_dim(),
                actual: p.len(),
            });
        }
        if p.iter().any(|v| !v.is_finite()) {
            return Err(self.invalid("non-finite coordinate"));
        }
        for slot in self.slots() {
            let x = p.slice(s![slot.ambient.clone()]);
            let n = norm(x);
            match slot.kind {
                FactorKind::Euclidean => {}
                FactorKind::Sphere => {
                    if (n - 1.0).abs() > SPHERE_TOL {
                        return Err(self.invalid(&format!("sphere factor has norm {n}")));
                    }
                }
                FactorKind::PoincareBall => {
                    if n > BALL_MAX_RADIUS + 1e-12 {
                        return Err(self.invalid(&format!("ball factor has norm {n}")));
                    }
                }
            }
        }
        Ok(())
    }

    fn invalid(&self, reason: &str) -> Error {
        Error::InvalidPoint {
            manifold: self.to_string(),
            reason: reason.to_string(),
        }
    }

    /// Maps arbitrary ambient coordinates onto the manifold: sphere factors
    /// are normalized, ball factors clamped to [`BALL_MAX_RADIUS`].
    pub fn project_point(&self, p: ArrayView1<f64>) -> Array1<f64> {
        let mut out = p.to_owned();
        for slot in self.slots() {
            let mut x = out.slice_mut(s![slot.ambient.clone()]);
            let n = norm(x.view());
            match slot.kind {
                FactorKind::Euclidean => {}
                FactorKind::Sphere => {
                    if n > 0.0 {
                        x /= n;
                    } else {
                        x.fill(0.0);
                        x[0] = 1.0;
                    }
                }
                FactorKind::PoincareBall => {
                    if n > BALL_MAX_RADIUS {
                        x *= BALL_MAX_RADIUS / n;
                    }
                }
            }
        }
        out
    }

    /// Deterministic base point: the origin for Euclidean and ball factors,
    /// `e₁` for sphere factors.
    pub fn base_point(&self) -> Array1<f64> {
        let mut p = Array1::zeros(self.ambient_dim());
        for slot in self.slots() {
            if slot.kind == FactorKind::Sphere {
                p[slot.ambient.start] = 1.0;
            }
        }
        p
    }

    /// Metric tensor in the orthonormal chart given by [`Self::tangent_basis`].
    pub fn metric_tensor(&self, p: ArrayView1<f64>) -> Result<SpdMatrix> {
        self.check_point(p)?;
        let blocks: Vec<SpdMatrix> = self
            .slots()
            .iter()
            .map(|slot| match slot.kind {
                FactorKind::Euclidean | FactorKind::Sphere => SpdMatrix::identity(slot.dim),
                FactorKind::PoincareBall => {
                    let x = p.slice(s![slot.ambient.clone()]);
                    let lam = conformal_factor(x);
                    SpdMatrix::scaled_identity(slot.dim, lam * lam)
                }
            })
            .collect();
        Ok(if blocks.len() == 1 {
            blocks.into_iter().next().unwrap()
        } else {
            SpdMatrix::block_diag(&blocks)
        })
    }

    /// Diagonal of the ambient metric for tangent vectors: 1 on Euclidean and
    /// sphere coordinates, `λ_p²` on ball coordinates.
    pub fn ambient_metric_diag(&self, p: ArrayView1<f64>) -> Array1<f64> {
        let mut g = Array1::ones(self.ambient_dim());
        for slot in self.slots() {
            if slot.kind == FactorKind::PoincareBall {
                let lam = conformal_factor(p.slice(s![slot.ambient.clone()]));
                g.slice_mut(s![slot.ambient.clone()]).fill(lam * lam);
            }
        }
        g
    }

    /// Geodesic distance.
    pub fn distance(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
        let slots = self.slots();
        if slots.len() == 1 {
            return factor_distance(slots[0].kind, x, y);
        }
        slots
            .iter()
            .map(|slot| {
                let r = slot.ambient.clone();
                factor_distance(slot.kind, x.slice(s![r.clone()]), y.slice(s![r]))
                    .powi(2)
            })
            .sum::<f64>()
            .sqrt()
    }

    /// Per-factor geodesic distances in slot order.
    pub fn factor_distances(&self, x: ArrayView1<f64>, y: ArrayView1<f64>) -> Vec<f64> {
        self.slots()
            .iter()
            .map(|slot| {
                let r = slot.ambient.clone();
                factor_distance(slot.kind, x.slice(s![r.clone()]), y.slice(s![r]))
            })
            .collect()
    }

    /// Exponential map at `p` applied to the ambient tangent vector `v`.
    pub fn exp(&self, p: ArrayView1<f64>, v: ArrayView1<f64>) -> Array1<f64> {
        let mut out = Array1::zeros(self.ambient_dim());
        for slot in self.slots() {
            let r = slot.ambient.clone();
            let q = factor_exp(slot.kind, p.slice(s![r.clone()]), v.slice(s![r.clone()]));
            out.slice_mut(s![r]).assign(&q);
        }
        out
    }

    /// Logarithmic map at `p`; fails for antipodal sphere factors.
    pub fn log(&self, p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<Array1<f64>> {
        let mut out = Array1::zeros(self.ambient_dim());
        for slot in self.slots() {
            let r = slot.ambient.clone();
            let v = factor_log(slot.kind, p.slice(s![r.clone()]), q.slice(s![r.clone()]))?;
            out.slice_mut(s![r]).assign(&v);
        }
        Ok(out)
    }

    /// Orthonormal basis of `T_p M` as columns (ambient × intrinsic).
    ///
    /// Sphere factors use the Householder reflection `H = I - 2wwᵀ/wᵀw` with
    /// `w = p + sign(p₀)e₁` (sign of zero taken as +); `H e₁ = ∓p`, so the
    /// remaining columns of `H` span the orthogonal complement of `p`.
    pub fn tangent_basis(&self, p: ArrayView1<f64>) -> Array2<f64> {
        let mut b = Array2::zeros((self.ambient_dim(), self.intrinsic_dim()));
        for slot in self.slots() {
            let mut block = b.slice_mut(s![slot.ambient.clone(), slot.intrinsic.clone()]);
            match slot.kind {
                FactorKind::Euclidean | FactorKind::PoincareBall => {
                    block.assign(&Array2::eye(slot.dim));
                }
                FactorKind::Sphere => {
                    let x = p.slice(s![slot.ambient.clone()]);
                    block.assign(&householder_complement(x));
                }
            }
        }
        b
    }

    /// Orthogonal projection of an ambient vector onto `T_p M`.
    pub fn project_to_tangent(&self, p: ArrayView1<f64>, w: ArrayView1<f64>) -> Array1<f64> {
        let mut out = w.to_owned();
        for slot in self.slots() {
            if slot.kind == FactorKind::Sphere {
                let r = slot.ambient.clone();
                let x = p.slice(s![r.clone()]);
                let mut seg = out.slice_mut(s![r]);
                let d = x.dot(&seg);
                seg.scaled_add(-d, &x);
            }
        }
        out
    }

    /// Tangent norm under the metric: `sqrt(vᵀ G_p v)` in ambient coordinates.
    pub fn tangent_norm(&self, p: ArrayView1<f64>, v: ArrayView1<f64>) -> f64 {
        let g = self.ambient_metric_diag(p);
        v.iter().zip(g.iter()).map(|(a, w)| w * a * a).sum::<f64>().sqrt()
    }

    /// Samples a point: standard normal on Euclidean factors, uniform on
    /// sphere factors, uniform in the radius-0.5 ball on ball factors.
    pub fn random_point<R: Rng + ?Sized>(&self, rng: &mut R) -> Array1<f64> {
        let mut out = Array1::zeros(self.ambient_dim());
        for slot in self.slots() {
            let n = slot.ambient.len();
            let mut g: Array1<f64> =
                Array1::from_iter((0..n).map(|_| std_normal(rng)));
            match slot.kind {
                FactorKind::Euclidean => {}
                FactorKind::Sphere => {
                    let nn = norm(g.view());
                    g /= nn;
                }
                FactorKind::PoincareBall => {
                    let nn = norm(g.view());
                    let u: f64 = rng.random();
                    g *= 0.5 * u.powf(1.0 / n as f64) / nn;
                }
            }
            out.slice_mut(s![slot.ambient.clone()]).assign(&g);
        }
        out
    }

    /// Samples a tangent vector at `p` with standard normal chart coordinates
    /// scaled by `scale`.
    pub fn random_tangent<R: Rng + ?Sized>(
        &self,
        p: ArrayView1<f64>,
        scale: f64,
        rng: &mut R,
    ) -> Array1<f64> {
        let c: Array1<f64> = Array1::from_iter(
            (0..self.intrinsic_dim()).map(|_| scale * std_normal(rng)),
        );
        self.tangent_basis(p).dot(&c)
    }
}

pub(crate) fn std_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    <StandardNormal as Distribution<f64>>::sample(&StandardNormal, rng)
}

/// `λ_p = 2 / (1 - ‖p‖²)`.
pub fn conformal_factor(p: ArrayView1<f64>) -> f64 {
    2.0 / (1.0 - p.dot(&p))
}

pub(crate) fn norm(x: ArrayView1<f64>) -> f64 {
    x.dot(&x).sqrt()
}

fn factor_distance(kind: FactorKind, x: ArrayView1<f64>, y: ArrayView1<f64>) -> f64 {
    match kind {
        FactorKind::Euclidean => norm((&x - &y).view()),
        FactorKind::Sphere => {
            // 2·atan2(‖x−y‖, ‖x+y‖) equals arccos⟨x,y⟩ on the unit sphere and
            // stays accurate for nearly equal or nearly antipodal points.
            let a = norm((&x - &y).view());
            let b = norm((&x + &y).view());
            2.0 * a.atan2(b)
        }
        FactorKind::PoincareBall => {
            // arcosh(1 + 2δ) written as 2·asinh(sqrt(δ)) to avoid cancellation
            let diff = &x - &y;
            let num = diff.dot(&diff);
            let den = ((1.0 - x.dot(&x)) * (1.0 - y.dot(&y))).max(f64::MIN_POSITIVE);
            2.0 * (num / den).sqrt().asinh()
        }
    }
}

fn factor_exp(kind: FactorKind, p: ArrayView1<f64>, v: ArrayView1<f64>) -> Array1<f64> {
    match kind {
        FactorKind::Euclidean => &p + &v,
        FactorKind::Sphere => {
            let n = norm(v);
            if n == 0.0 {
                return p.to_owned();
            }
            let mut q = &p * n.cos() + &v * (n.sin() / n);
            let qn = norm(q.view());
            q /= qn;
            q
        }
        FactorKind::PoincareBall => {
            let n = norm(v);
            if n == 0.0 {
                return clamp_ball(p.to_owned());
            }
            let lam = conformal_factor(p);
            let step = &v * ((lam * n / 2.0).tanh() / n);
            clamp_ball(mobius_add(p, step.view()))
        }
    }
}

fn factor_log(kind: FactorKind, p: ArrayView1<f64>, q: ArrayView1<f64>) -> Result<Array1<f64>> {
    match kind {
        FactorKind::Euclidean => Ok(&q - &p),
        FactorKind::Sphere => {
            let c = p.dot(&q);
            let u = &q - &p * c;
            let un = norm(u.view());
            let antipodal = norm((&p + &q).view());
            if antipodal < 1e-9 {
                return Err(Error::UndefinedLog("antipodal sphere points".into()));
            }
            if un == 0.0 {
                return Ok(Array1::zeros(p.len()));
            }
            let theta = un.atan2(c);
            Ok(u * (theta / un))
        }
        FactorKind::PoincareBall => {
            let neg = p.mapv(|v| -v);
            let w = mobius_add(neg.view(), q);
            let n = norm(w.view());
            if n == 0.0 {
                return Ok(Array1::zeros(p.len()));
            }
            let lam = conformal_factor(p);
            Ok(w * ((2.0 / lam) * n.min(1.0 - 1e-16).atanh() / n))
        }
    }
}

/// Möbius addition in the unit ball.
pub fn mobius_add(x: ArrayView1<f64>, y: ArrayView1<f64>) -> Array1<f64> {
    let xy = x.dot(&y);
    let x2 = x.dot(&x);
    let y2 = y.dot(&y);
    let num = &x * (1.0 + 2.0 * xy + y2) + &y * (1.0 - x2);
    let den = 1.0 + 2.0 * xy + x2 * y2;
    num / den
}

fn clamp_ball(mut x: Array1<f64>) -> Array1<f64> {
    let n = norm(x.view());
    if n > BALL_MAX_RADIUS {
        x *= BALL_MAX_RADIUS / n;
    }
    x
}

fn householder_complement(p: ArrayView1<f64>) -> Array2<f64> {
    let n = p.len();
    let sign = if p[0] >= 0.0 { 1.0 } else { -1.0 };
    let mut w = p.to_owned();
    w[0] += sign;
    let ww = w.dot(&w);
    let mut h = Array2::<f64>::eye(n);
    for i in 0..n {
        for j in 0..n {
            h[[i, j]] -= 2.0 * w[i] * w[j] / ww;
        }
    }
    h.slice(s![.., 1..]).to_owned()
}

impl fmt::Display for Manifold {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let parts: Vec<String> = self
            .slots()
            .iter()
            .map(|s| format!("{}{}", s.kind.letter(), s.dim))
            .collect();
        write!(f, "{}", parts.join("x"))
    }
}

impl FromStr for Manifold {
    type Err = Error;

    /// Parses `S30xH30`, `E50`, `s50xe5xh5` (letters are case-insensitive).
    fn from_str(s: &str) -> Result<Self> {
        let bad = || Error::ParseManifold(s.to_string());
        let trimmed = s.trim();
        if trimmed.is_empty() {
            return Err(bad());
        }
        let mut factors = Vec::new();
        for part in trimmed.split(['x', 'X', '×']) {
            let part = part.trim();
            let mut chars = part.chars();
            let letter = chars.next().ok_or_else(bad)?;
            let dim: usize = chars.as_str().parse().map_err(|_| bad())?;
            if dim == 0 {
                return Err(bad());
            }
            factors.push(match letter.to_ascii_uppercase() {
                'E' => Manifold::Euclidean(dim),
                'S' => Manifold::Sphere(dim),
                'H' => Manifold::PoincareBall(dim),
                _ => return Err(bad()),
            });
        }
        Manifold::product(factors)
    }
}

impl Serialize for Manifold {
    fn serialize<S: serde::Serializer>(&self, ser: S) -> std::result::Result<S::Ok, S::Error> {
        ser.serialize_str(&self.to_string())
    }
}

impl<'de> Deserialize<'de> for Manifold {
    fn deserialize<D: serde::Deserializer<'de>>(de: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(de)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

/// A validated point bound to its manifold.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifoldPoint {
    manifold: Manifold,
    coords: Array1<f64>,
}

impl ManifoldPoint {
    pub fn new(manifold: Manifold, coords: Array1<f64>) -> Result<Self> {
        manifold.check_point(coords.view())?;
        Ok(ManifoldPoint { manifold, coords })
    }

    pub fn manifold(&self) -> &Manifold {
        &self.manifold
    }

    pub fn coords(&self) -> &Array1<f64> {
        &self.coords
    }

    pub fn into_coords(self) -> Array1<f64> {
        self.coords
    }
}

/// A tangent vector carrying its base point.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentVector {
    base: ManifoldPoint,
    coords: Array1<f64>,
}

impl TangentVector {
    /// Validates tangency (`|⟨p, v⟩| ≤ 1e-9` on sphere factors).
    pub fn new(base: ManifoldPoint, coords: Array1<f64>) -> Result<Self> {
        let m = base.manifold();
        if coords.len() != m.ambient_dim() {
            return Err(Error::DimMismatch {
                expected: m.ambient_dim(),
                actual: coords.len(),
            });
        }
        for slot in m.slots() {
            if slot.kind == FactorKind::Sphere {
                let r = slot.ambient.clone();
                let d = base.coords.slice(s![r.clone()]).dot(&coords.slice(s![r]));
                if d.abs() > 1e-9 {
                    return Err(Error::InvalidPoint {
                        manifold: m.to_string(),
                        reason: format!("vector not tangent (inner product {d:e})"),
                    });
                }
            }
        }
        Ok(TangentVector { base, coords })
    }

    pub fn base(&self) -> &ManifoldPoint {
        &self.base
    }

    pub fn coords(&self) -> &Array1<f64> {
        &self.coords
    }
}

fn same_manifold(a: &Manifold, b: &Manifold) -> Result<()> {
    if a != b {
        return Err(Error::ManifoldMismatch {
            left: a.to_string(),
            right: b.to_string(),
        });
    }
    Ok(())
}

pub fn metric_tensor(p: &ManifoldPoint) -> Result<SpdMatrix> {
    p.manifold.metric_tensor(p.coords.view())
}

pub fn distance(x: &ManifoldPoint, y: &ManifoldPoint) -> Result<f64> {
    same_manifold(&x.manifold, &y.manifold)?;
    Ok(x.manifold.distance(x.coords.view(), y.coords.view()))
}

pub fn exp_map(v: &TangentVector) -> ManifoldPoint {
    let m = v.base.manifold.clone();
    let coords = m.exp(v.base.coords.view(), v.coords.view());
    ManifoldPoint {
        manifold: m,
        coords,
    }
}

pub fn log_map(p: &ManifoldPoint, q: &ManifoldPoint) -> Result<TangentVector> {
    same_manifold(&p.manifold, &q.manifold)?;
    let coords = p.manifold.log(p.coords.view(), q.coords.view())?;
    let base = p.clone();
    let coords = base.manifold.project_to_tangent(base.coords.view(), coords.view());
    Ok(TangentVector { base, coords })
}

pub fn tangent_basis(p: &ManifoldPoint) -> Array2<f64> {
    p.manifold.tangent_basis(p.coords.view())
}

pub fn project_to_tangent(p: &ManifoldPoint, w: ArrayView1<f64>) -> TangentVector {
    TangentVector {
        base: p.clone(),
        coords: p.manifold.project_to_tangent(p.coords.view(), w),
    }
}

pub fn random_point<R: Rng + ?Sized>(m: &Manifold, rng: &mut R) -> ManifoldPoint {
    ManifoldPoint {
        manifold: m.clone(),
        coords: m.random_point(rng),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;
    use std::f64::consts::FRAC_PI_2;

    fn pt(m: &Manifold, c: Array1<f64>) -> ManifoldPoint {
        ManifoldPoint::new(m.clone(), c).unwrap()
    }

    #[test]
    fn parse_and_display() {
        let m: Manifold = "S30xH30".parse().unwrap();
        assert_eq!(m.intrinsic_dim(), 60);
        assert_eq!(m.ambient_dim(), 61);
        assert_eq!(m.to_string(), "S30xH30");
        let m: Manifold = "s50xe5Xh5".parse().unwrap();
        assert_eq!(m.to_string(), "S50xE5xH5");
        assert_eq!("e50".parse::<Manifold>().unwrap(), Manifold::Euclidean(50));
        for bad in ["", "Q3", "S", "S0", "S3x", "3S"] {
            assert!(bad.parse::<Manifold>().is_err(), "{bad}");
        }
    }

    #[test]
    fn products_flatten() {
        let inner = Manifold::product(vec![Manifold::Sphere(2), Manifold::Euclidean(1)]).unwrap();
        let m = Manifold::product(vec![inner, Manifold::PoincareBall(3)]).unwrap();
        match &m {
            Manifold::Product(fs) => assert_eq!(fs.len(), 3),
            _ => panic!("expected product"),
        }
        assert_eq!(m.intrinsic_dim(), 6);
        assert_eq!(m.ambient_dim(), 7);
        assert!(Manifold::product(vec![]).is_err());
    }

    #[test]
    fn metric_tensor_examples() {
        let e = Manifold::Euclidean(2);
        let g = e.metric_tensor(array![0.3, -2.0].view()).unwrap();
        assert_eq!(g.entries(), &Array2::<f64>::eye(2));
        let h = Manifold::PoincareBall(2);
        let g = h.metric_tensor(array![0.0, 0.0].view()).unwrap();
        assert_eq!(g.entries(), &(Array2::<f64>::eye(2) * 4.0));
        let p = Manifold::product(vec![Manifold::Euclidean(1), Manifold::Euclidean(1)]).unwrap();
        let g = p.metric_tensor(array![1.0, 2.0].view()).unwrap();
        assert_eq!(g.entries(), &Array2::<f64>::eye(2));
        assert!(matches!(
            Manifold::Sphere(2).metric_tensor(array![1.0, 1.0, 0.0].view()),
            Err(Error::InvalidPoint { .. })
        ));
    }

    #[test]
    fn ball_distance_matches_numeric_geodesic_length() {
        // integrate the conformal line element along the straight diameter
        let q = 0.5;
        let steps = 200_000;
        let h = q / steps as f64;
        let mut len = 0.0;
        for i in 0..steps {
            let t = (i as f64 + 0.5) * h;
            len += 2.0 / (1.0 - t * t) * h;
        }
        let m = Manifold::PoincareBall(2);
        let d = m.distance(array![0.0, 0.0].view(), array![0.5, 0.0].view());
        assert!((d - 3f64.ln()).abs() < 1e-12);
        assert!((d - len).abs() < 1e-9);
    }

    #[test]
    fn distance_examples() {
        let s = Manifold::Sphere(2);
        let d = s.distance(array![1.0, 0.0, 0.0].view(), array![0.0, 1.0, 0.0].view());
        assert!((d - FRAC_PI_2).abs() < 1e-15);
        let p = Manifold::product(vec![Manifold::Euclidean(1), Manifold::Euclidean(1)]).unwrap();
        assert!((p.distance(array![0.0, 0.0].view(), array![3.0, 4.0].view()) - 5.0).abs() < 1e-15);
        let sp = Manifold::product(vec![Manifold::Sphere(2), Manifold::Euclidean(1)]).unwrap();
        let d = sp.distance(
            array![1.0, 0.0, 0.0, 0.0].view(),
            array![0.0, 1.0, 0.0, 1.0].view(),
        );
        assert!((d - (FRAC_PI_2.powi(2) + 1.0).sqrt()).abs() < 1e-14);
        assert!((d - 1.862096).abs() < 1e-6);
        let x = pt(&s, array![1.0, 0.0, 0.0]);
        let y = pt(&Manifold::Sphere(3), array![1.0, 0.0, 0.0, 0.0]);
        assert!(matches!(distance(&x, &y), Err(Error::ManifoldMismatch { .. })));
    }

    #[test]
    fn exp_examples() {
        let s = Manifold::Sphere(1);
        let q = s.exp(array![1.0, 0.0].view(), array![0.0, FRAC_PI_2].view());
        assert!((q[0]).abs() < 1e-15 && (q[1] - 1.0).abs() < 1e-15);
        let e = Manifold::Euclidean(2);
        assert_eq!(e.exp(array![1.0, 1.0].view(), array![2.0, 3.0].view()), array![3.0, 4.0]);
        let h = Manifold::PoincareBall(2);
        let q = h.exp(array![0.0, 0.0].view(), array![0.5f64.atanh(), 0.0].view());
        assert!((q[0] - 0.5).abs() < 1e-15 && q[1] == 0.0);
    }

    #[test]
    fn log_examples() {
        let s = Manifold::Sphere(2);
        let v = s.log(array![1.0, 0.0, 0.0].view(), array![0.0, 1.0, 0.0].view()).unwrap();
        assert!((v[1] - FRAC_PI_2).abs() < 1e-15 && v[0].abs() < 1e-15);
        let h = Manifold::PoincareBall(2);
        let v = h.log(array![0.0, 0.0].view(), array![0.5, 0.0].view()).unwrap();
        assert!((v[0] - 0.549306).abs() < 1e-6);
        for m in ["E3", "S3", "H3", "S2xH2xE1"] {
            let m: Manifold = m.parse().unwrap();
            let p = m.random_point(&mut ChaCha8Rng::seed_from_u64(1));
            let v = m.log(p.view(), p.view()).unwrap();
            assert!(v.iter().all(|x| x.abs() < 1e-15));
        }
        let err = s.log(array![1.0, 0.0, 0.0].view(), array![-1.0, 0.0, 0.0].view());
        assert!(matches!(err, Err(Error::UndefinedLog(_))));
    }

    #[test]
    fn tangent_basis_examples() {
        assert_eq!(
            Manifold::Euclidean(3).tangent_basis(array![1.0, 2.0, 3.0].view()),
            Array2::<f64>::eye(3)
        );
        let s = Manifold::Sphere(1);
        let b = s.tangent_basis(array![1.0, 0.0].view());
        assert_eq!(b, array![[0.0], [1.0]]);
        let b = s.tangent_basis(array![0.0, 1.0].view());
        assert_eq!(b, array![[-1.0], [0.0]]);
        let m: Manifold = "S4xH2".parse().unwrap();
        let p = m.random_point(&mut ChaCha8Rng::seed_from_u64(7));
        let b = m.tangent_basis(p.view());
        let btb = b.t().dot(&b);
        assert!((btb - Array2::<f64>::eye(6)).iter().all(|v| v.abs() < 1e-14));
        assert!(b.slice(s![0..5, 0..4]).t().dot(&p.slice(s![0..5])).iter().all(|v| v.abs() < 1e-14));
    }

    #[test]
    fn projection_examples() {
        let s = Manifold::Sphere(2);
        let v = s.project_to_tangent(array![1.0, 0.0, 0.0].view(), array![1.0, 1.0, 0.0].view());
        assert_eq!(v, array![0.0, 1.0, 0.0]);
        let e = Manifold::Euclidean(2);
        assert_eq!(e.project_to_tangent(array![0.0, 0.0].view(), array![1.0, 1.0].view()), array![1.0, 1.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let m: Manifold = "S3xE2xH2".parse().unwrap();
        for _ in 0..20 {
            let p = m.random_point(&mut rng);
            let w = Manifold::Euclidean(m.ambient_dim()).random_point(&mut rng);
            let once = m.project_to_tangent(p.view(), w.view());
            let twice = m.project_to_tangent(p.view(), once.view());
            assert!((&once - &twice).iter().all(|v| v.abs() < 1e-14));
        }
    }

    #[test]
    fn random_points_satisfy_invariants() {
        for seed in [0, 1, 2] {
            for m in ["S5", "H5", "S2xH2"] {
                let m: Manifold = m.parse().unwrap();
                let p = random_point(&m, &mut ChaCha8Rng::seed_from_u64(seed));
                assert!(m.check_point(p.coords().view()).is_ok());
                let again = random_point(&m, &mut ChaCha8Rng::seed_from_u64(seed));
                assert_eq!(p, again);
            }
            let h = Manifold::PoincareBall(5);
            let p = h.random_point(&mut ChaCha8Rng::seed_from_u64(seed));
            assert!(norm(p.view()) <= 0.5);
        }
    }

    #[test]
    fn typed_wrappers_round_trip() {
        let m: Manifold = "S2xH2".parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let p = random_point(&m, &mut rng);
        let q = random_point(&m, &mut rng);
        let v = log_map(&p, &q).unwrap();
        let back = exp_map(&v);
        assert!((back.coords() - q.coords()).iter().all(|x| x.abs() < 1e-9));
        let g = metric_tensor(&p).unwrap();
        let b = tangent_basis(&p);
        let c = b.t().dot(v.coords());
        let len = c.dot(&g.entries().dot(&c)).sqrt();
        assert!((len - distance(&p, &q).unwrap()).abs() < 1e-9);
        assert!(TangentVector::new(p.clone(), Array1::ones(5)).is_err());
        let w = project_to_tangent(&p, Array1::ones(5).view());
        assert!(TangentVector::new(p, w.coords().clone()).is_ok());
    }
}
