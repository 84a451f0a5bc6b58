//! Symmetric positive-definite matrices and the matrix functions used by the
//! metric regularizers.
//!
//! Eigendecompositions are computed with cyclic Jacobi rotations, which are
//! accurate to working precision for the small (at most a few hundred on a side)
//! symmetric matrices that appear as metric tensors. Every [`SpdMatrix`] caches
//! its eigendecomposition, and eigenvalues below [`EIGENVALUE_FLOOR`] are raised
//! to the floor at construction. The number of floored eigenvalues is kept so
//! that rank-deficient pullback metrics can be reported instead of failing.

use ndarray::{Array1, Array2, ArrayView2, Axis};

use crate::error::{Error, Result};

/// Smallest eigenvalue an [`SpdMatrix`] may carry.
pub const EIGENVALUE_FLOOR: f64 = 1e-12;

/// Maximum number of full Jacobi sweeps before giving up.
pub const MAX_SWEEPS: usize = 100;

const SYMMETRY_TOL: f64 = 1e-10;

/// A dense symmetric positive-definite matrix with its cached eigendecomposition.
#[derive(Debug, Clone)]
pub struct SpdMatrix {
    entries: Array2<f64>,
    eigenvalues: Array1<f64>,
    eigenvectors: Array2<f64>,
    floored: usize,
}

impl SpdMatrix {
    /// Builds an SPD matrix, symmetrizing and flooring eigenvalues at
    /// [`EIGENVALUE_FLOOR`]. When flooring happens the stored entries are
    /// rebuilt from the floored spectrum.
    pub fn new(entries: Array2<f64>) -> Result<Self> {
        let (r, c) = entries.dim();
        if r != c {
            return Err(Error::DimMismatch {
                expected: r,
                actual: c,
            });
        }
        if r == 0 {
            return Err(Error::EmptyInput("zero-sized SPD matrix".into()));
        }
        let scale = entries.iter().fold(1.0f64, |m, v| m.max(v.abs()));
        let asym = max_asymmetry(entries.view());
        if !(asym <= SYMMETRY_TOL * scale) {
            return Err(Error::NotSymmetric(asym));
        }
        let sym = symmetrize(entries.view());
        let (mut eigenvalues, eigenvectors) = sym_eig(sym.view())?;
        let mut floored = 0;
        for l in eigenvalues.iter_mut() {
            if !(*l >= EIGENVALUE_FLOOR) {
                *l = EIGENVALUE_FLOOR;
                floored += 1;
            }
        }
        let entries = if floored > 0 {
            reconstruct(&eigenvalues, &eigenvectors)
        } else {
            sym
        };
        Ok(SpdMatrix {
            entries,
            eigenvalues,
            eigenvectors,
            floored,
        })
    }

    pub fn identity(dim: usize) -> Self {
        Self::scaled_identity(dim, 1.0)
    }

    /// `scale * I`; `scale` must be positive.
    pub fn scaled_identity(dim: usize, scale: f64) -> Self {
        assert!(scale > 0.0, "scaled identity needs a positive scale");
        SpdMatrix {
            entries: Array2::eye(dim) * scale,
            eigenvalues: Array1::from_elem(dim, scale),
            eigenvectors: Array2::eye(dim),
            floored: 0,
        }
    }

    /// Whether the entries are exactly the identity matrix.
    pub fn is_identity(&self) -> bool {
        self.entries.indexed_iter().all(|((i, j), &v)| v == if i == j { 1.0 } else { 0.0 })
    }

    /// Diagonal matrix with the given positive entries.
    pub fn diagonal(diag: &[f64]) -> Result<Self> {
        Self::new(Array2::from_diag(&Array1::from(diag.to_vec())))
    }

    /// Block-diagonal assembly of SPD blocks.
    pub fn block_diag(blocks: &[SpdMatrix]) -> Self {
        let n: usize = blocks.iter().map(|b| b.dim()).sum();
        let mut entries = Array2::zeros((n, n));
        let mut vecs = Array2::zeros((n, n));
        let mut vals = Vec::with_capacity(n);
        let mut off = 0;
        let mut floored = 0;
        for b in blocks {
            let d = b.dim();
            entries
                .slice_mut(ndarray::s![off..off + d, off..off + d])
                .assign(&b.entries);
            vecs.slice_mut(ndarray::s![off..off + d, off..off + d])
                .assign(&b.eigenvectors);
            vals.extend(b.eigenvalues.iter().copied());
            floored += b.floored;
            off += d;
        }
        // keep the ascending-order contract
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&a, &b| vals[a].total_cmp(&vals[b]).then(a.cmp(&b)));
        let eigenvalues = Array1::from_iter(order.iter().map(|&i| vals[i]));
        let eigenvectors = vecs.select(Axis(1), &order);
        SpdMatrix {
            entries,
            eigenvalues,
            eigenvectors,
            floored,
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn entries(&self) -> &Array2<f64> {
        &self.entries
    }

    /// Eigenvalues in ascending order.
    pub fn eigenvalues(&self) -> &Array1<f64> {
        &self.eigenvalues
    }

    /// Orthonormal eigenvectors as columns, matching [`Self::eigenvalues`].
    pub fn eigenvectors(&self) -> &Array2<f64> {
        &self.eigenvectors
    }

    /// How many eigenvalues were raised to the floor at construction.
    pub fn floored_count(&self) -> usize {
        self.floored
    }

    /// Applies a scalar function to the spectrum: `V diag(f(λ)) Vᵀ`.
    pub fn map_spectrum(&self, f: impl Fn(f64) -> f64) -> Array2<f64> {
        let mapped = self.eigenvalues.mapv(f);
        reconstruct(&mapped, &self.eigenvectors)
    }

    pub fn inverse(&self) -> SpdMatrix {
        self.spectral(|l| 1.0 / l)
    }

    pub fn inv_sqrt(&self) -> Array2<f64> {
        self.map_spectrum(|l| 1.0 / l.sqrt())
    }

    pub fn sqrt(&self) -> Array2<f64> {
        self.map_spectrum(f64::sqrt)
    }

    pub fn scale(&self, c: f64) -> SpdMatrix {
        assert!(c > 0.0);
        SpdMatrix {
            entries: &self.entries * c,
            eigenvalues: &self.eigenvalues * c,
            eigenvectors: self.eigenvectors.clone(),
            floored: self.floored,
        }
    }

    /// `A X Aᵀ` for an arbitrary square `A` of matching size.
    pub fn congruence(&self, a: ArrayView2<f64>) -> Result<SpdMatrix> {
        if a.dim() != (self.dim(), self.dim()) {
            return Err(Error::DimMismatch {
                expected: self.dim(),
                actual: a.nrows(),
            });
        }
        SpdMatrix::new(a.dot(&self.entries).dot(&a.t()))
    }

    fn spectral(&self, f: impl Fn(f64) -> f64) -> SpdMatrix {
        let mut pairs: Vec<(f64, usize)> = self
            .eigenvalues
            .iter()
            .enumerate()
            .map(|(i, &l)| (f(l), i))
            .collect();
        pairs.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let order: Vec<usize> = pairs.iter().map(|p| p.1).collect();
        let eigenvalues = Array1::from_iter(pairs.iter().map(|p| p.0));
        let eigenvectors = self.eigenvectors.select(Axis(1), &order);
        SpdMatrix {
            entries: reconstruct(&eigenvalues, &eigenvectors),
            eigenvalues,
            eigenvectors,
            floored: self.floored,
        }
    }
}

fn max_asymmetry(a: ArrayView2<f64>) -> f64 {
    let n = a.nrows();
    let mut m = 0.0f64;
    for i in 0..n {
        for j in (i + 1)..n {
            let d = (a[[i, j]] - a[[j, i]]).abs();
            if d > m || d.is_nan() {
                m = if d.is_nan() { f64::NAN } else { d };
            }
        }
    }
    m
}

pub(crate) fn symmetrize(a: ArrayView2<f64>) -> Array2<f64> {
    let mut s = a.to_owned();
    s += &a.t();
    s *= 0.5;
    s
}

pub(crate) fn reconstruct(values: &Array1<f64>, vectors: &Array2<f64>) -> Array2<f64> {
    let scaled = vectors * &values.view().insert_axis(Axis(0));
    let out = scaled.dot(&vectors.t());
    symmetrize(out.view())
}

/// Symmetric eigendecomposition by cyclic Jacobi rotations.
///
/// Returns eigenvalues in ascending order and the matching orthonormal
/// eigenvectors as columns. Ties are ordered by the position of the diagonal
/// entry they converged on, which keeps the output deterministic.
pub fn sym_eig(x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let n = x.nrows();
    if x.ncols() != n {
        return Err(Error::DimMismatch {
            expected: n,
            actual: x.ncols(),
        });
    }
    if x.iter().any(|v| !v.is_finite()) {
        return Err(Error::EigFailure { sweeps: 0 });
    }
    // row-major working copy; eigenvectors are kept as rows of `vt`
    let mut a: Vec<f64> = symmetrize(x).iter().copied().collect();
    let mut vt = vec![0.0; n * n];
    for i in 0..n {
        vt[i * n + i] = 1.0;
    }
    let total: f64 = a.iter().map(|e| e * e).sum::<f64>().sqrt();
    let mut converged = n <= 1 || total == 0.0;
    let mut sweep = 0;
    while !converged {
        if sweep == MAX_SWEEPS {
            return Err(Error::EigFailure { sweeps: MAX_SWEEPS });
        }
        sweep += 1;
        // early sweeps only rotate the larger off-diagonal entries
        let threshold = if sweep <= 3 {
            let mut off_abs = 0.0;
            for i in 0..n {
                for j in (i + 1)..n {
                    off_abs += a[i * n + j].abs();
                }
            }
            0.2 * off_abs / (n * n) as f64
        } else {
            0.0
        };
        for p in 0..n - 1 {
            for q in (p + 1)..n {
                let apq = a[p * n + q];
                if apq == 0.0 || apq.abs() < threshold {
                    continue;
                }
                let app = a[p * n + p];
                let aqq = a[q * n + q];
                // skip rotations that cannot change the diagonal in floating point
                if apq.abs() < f64::EPSILON * 1e-3 * (app.abs() + aqq.abs()) {
                    a[p * n + q] = 0.0;
                    a[q * n + p] = 0.0;
                    continue;
                }
                let theta = (aqq - app) / (2.0 * apq);
                let t = if theta == 0.0 {
                    1.0
                } else {
                    theta.signum() / (theta.abs() + (theta * theta + 1.0).sqrt())
                };
                let c = 1.0 / (t * t + 1.0).sqrt();
                let s = t * c;
                for k in 0..n {
                    if k == p || k == q {
                        continue;
                    }
                    let akp = a[p * n + k];
                    let akq = a[q * n + k];
                    let np = c * akp - s * akq;
                    let nq = s * akp + c * akq;
                    a[p * n + k] = np;
                    a[k * n + p] = np;
                    a[q * n + k] = nq;
                    a[k * n + q] = nq;
                }
                a[p * n + p] = app - t * apq;
                a[q * n + q] = aqq + t * apq;
                a[p * n + q] = 0.0;
                a[q * n + p] = 0.0;
                let (head, tail) = vt.split_at_mut(q * n);
                for (vp, vq) in head[p * n..(p + 1) * n].iter_mut().zip(&mut tail[..n]) {
                    let (x, y) = (*vp, *vq);
                    *vp = c * x - s * y;
                    *vq = s * x + c * y;
                }
            }
        }
        let mut off = 0.0;
        for i in 0..n {
            for j in (i + 1)..n {
                off += 2.0 * a[i * n + j] * a[i * n + j];
            }
        }
        converged = off.sqrt() <= 1e-15 * total;
    }
    let diag: Vec<f64> = (0..n).map(|i| a[i * n + i]).collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&i, &j| diag[i].total_cmp(&diag[j]).then(i.cmp(&j)));
    let values = Array1::from_iter(order.iter().map(|&i| diag[i]));
    let vectors = Array2::from_shape_fn((n, n), |(r, c)| vt[order[c] * n + r]);
    Ok((values, vectors))
}

/// Principal matrix logarithm `V diag(ln λ) Vᵀ`.
pub fn spd_log(x: &SpdMatrix) -> Array2<f64> {
    x.map_spectrum(f64::ln)
}

/// Eigenvalues of the symmetrized ratio `Y^{-1/2} X Y^{-1/2}`, whose spectrum
/// equals that of `X Y⁻¹`.
pub fn ratio_eigenvalues(x: &SpdMatrix, y: &SpdMatrix) -> Result<SpdMatrix> {
    check_same_dim(x, y)?;
    if y.is_identity() {
        return Ok(x.clone());
    }
    let w = y.inv_sqrt();
    SpdMatrix::new(w.dot(x.entries()).dot(&w))
}

/// Squared affine-invariant geodesic distance `‖log(Y^{-1/2} X Y^{-1/2})‖_F²`.
pub fn spd_geodesic_sq(x: &SpdMatrix, y: &SpdMatrix) -> Result<f64> {
    let m = ratio_eigenvalues(x, y)?;
    Ok(m.eigenvalues().iter().map(|l| l.ln().powi(2)).sum())
}

/// `ln det(X Y⁻¹)`, the sum of log-eigenvalues of the symmetrized ratio.
pub fn logdet_ratio(x: &SpdMatrix, y: &SpdMatrix) -> Result<f64> {
    let m = ratio_eigenvalues(x, y)?;
    Ok(m.eigenvalues().iter().map(|l| l.ln()).sum())
}

fn check_same_dim(x: &SpdMatrix, y: &SpdMatrix) -> Result<()> {
    if x.dim() != y.dim() {
        return Err(Error::DimMismatch {
            expected: y.dim(),
            actual: x.dim(),
        });
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_spd(n: usize, rng: &mut ChaCha8Rng) -> SpdMatrix {
        let a = Array2::from_shape_fn((n, n), |_| rng.random_range(-1.0..1.0));
        SpdMatrix::new(a.dot(&a.t()) + Array2::<f64>::eye(n)).unwrap()
    }

    fn frob(a: &Array2<f64>) -> f64 {
        a.iter().map(|v| v * v).sum::<f64>().sqrt()
    }

    #[test]
    fn eig_of_diagonal() {
        let e = std::f64::consts::E;
        let (l, v) = sym_eig(array![[e, 0.0], [0.0, 1.0]].view()).unwrap();
        assert_eq!(l.to_vec(), vec![1.0, e]);
        assert!((v[[1, 0]].abs() - 1.0).abs() < 1e-15);
        assert!((v[[0, 1]].abs() - 1.0).abs() < 1e-15);
        let (l, _) = sym_eig(Array2::<f64>::eye(3).view()).unwrap();
        assert_eq!(l.to_vec(), vec![1.0; 3]);
    }

    #[test]
    fn eig_reconstruction() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for n in [2, 5, 17, 40] {
            let x = random_spd(n, &mut rng);
            let (l, v) = sym_eig(x.entries().view()).unwrap();
            let back = reconstruct(&l, &v);
            let err = frob(&(&back - x.entries())) / frob(x.entries());
            assert!(err < 1e-8, "n={n} err={err}");
            let vtv = v.t().dot(&v);
            assert!(frob(&(vtv - Array2::<f64>::eye(n))) < 1e-12);
            assert!(l.windows(2).into_iter().all(|w| w[0] <= w[1]));
        }
    }

    #[test]
    fn log_examples() {
        let e = std::f64::consts::E;
        let x = SpdMatrix::diagonal(&[1.0, e]).unwrap();
        let l = spd_log(&x);
        assert!((l[[0, 0]]).abs() < 1e-15 && (l[[1, 1]] - 1.0).abs() < 1e-15);
        assert!(spd_log(&SpdMatrix::identity(4)).iter().all(|v| *v == 0.0));
        let l = spd_log(&SpdMatrix::scaled_identity(2, 4.0));
        assert!((l[[0, 0]] - 1.386294).abs() < 1e-6);
        assert!((l[[1, 1]] - 1.386294).abs() < 1e-6);
    }

    #[test]
    fn geodesic_examples() {
        let e2 = std::f64::consts::E.powi(2);
        let d = spd_geodesic_sq(
            &SpdMatrix::identity(2),
            &SpdMatrix::scaled_identity(2, e2),
        )
        .unwrap();
        assert!((d - 8.0).abs() < 1e-10);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = random_spd(6, &mut rng);
        assert!(spd_geodesic_sq(&x, &x).unwrap() < 1e-20);
        assert!(matches!(
            spd_geodesic_sq(&x, &SpdMatrix::identity(5)),
            Err(Error::DimMismatch { .. })
        ));
    }

    #[test]
    fn logdet_examples() {
        let v = logdet_ratio(&SpdMatrix::scaled_identity(2, 4.0), &SpdMatrix::identity(2)).unwrap();
        assert!((v - 16f64.ln()).abs() < 1e-12);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..20 {
            let x = random_spd(5, &mut rng);
            let y = random_spd(5, &mut rng);
            assert!(logdet_ratio(&x, &x).unwrap().abs() < 1e-12);
            let a = logdet_ratio(&x, &y).unwrap();
            let b = logdet_ratio(&y, &x).unwrap();
            assert!((a + b).abs() < 1e-10);
        }
    }

    #[test]
    fn log_of_inverse_and_identity_distance() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for _ in 0..10 {
            let x = random_spd(7, &mut rng);
            let a = spd_log(&x.inverse());
            let b = spd_log(&x);
            assert!(frob(&(a + &b)) < 1e-8);
            let d = spd_geodesic_sq(&x, &SpdMatrix::identity(7)).unwrap();
            assert!((d - frob(&b).powi(2)).abs() < 1e-10 * d.max(1.0));
        }
    }

    #[test]
    fn flooring_counts_degenerate_eigenvalues() {
        let x = SpdMatrix::new(array![[1.0, 1.0], [1.0, 1.0]]).unwrap();
        assert_eq!(x.floored_count(), 1);
        assert!(x.eigenvalues()[0] >= EIGENVALUE_FLOOR);
        assert!(SpdMatrix::new(array![[1.0, 0.5], [0.0, 1.0]]).is_err());
    }

    #[test]
    fn block_diag_keeps_order() {
        let a = SpdMatrix::scaled_identity(2, 3.0);
        let b = SpdMatrix::diagonal(&[0.5, 7.0]).unwrap();
        let m = SpdMatrix::block_diag(&[a, b]);
        assert_eq!(m.eigenvalues().to_vec(), vec![0.5, 3.0, 3.0, 7.0]);
        let back = reconstruct(m.eigenvalues(), m.eigenvectors());
        assert!(frob(&(back - m.entries())) < 1e-14);
    }
}
