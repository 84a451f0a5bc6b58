//! Negative sampling through a flat index over tangent-space projections at the
//! Karcher mean of the current embeddings.

use std::collections::HashSet;

use log::warn;
use ndarray::{Array1, Array2, ArrayView2, Axis};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::manifolds::{FactorKind, Manifold};

/// Result of a Karcher mean iteration.
#[derive(Debug, Clone, PartialEq)]
pub struct KarcherMean {
    pub point: Array1<f64>,
    pub iterations: usize,
    pub converged: bool,
    /// Set when a sphere factor had points with negative inner product
    /// against the starting centroid.
    pub hemisphere_warning: bool,
}

/// Fixed-point iteration `c ← exp_c(mean log_c(v))` over the columns of
/// `points`, started at the projected ambient mean.
pub fn karcher_mean(m: &Manifold, points: ArrayView2<f64>, tol: f64, max_iter: usize) -> Result<KarcherMean> {
    let n = points.ncols();
    if n == 0 {
        return Err(Error::EmptyInput("karcher mean of no points".into()));
    }
    let ambient_mean = points.mean_axis(Axis(1)).expect("non-empty");
    let mut c = m.project_point(ambient_mean.view());
    let mut hemisphere_warning = false;
    for slot in m.slots() {
        if slot.kind == FactorKind::Sphere {
            let r = slot.ambient.clone();
            let cs = c.slice(ndarray::s![r.clone()]);
            if points.columns().into_iter().any(|p| p.slice(ndarray::s![r.clone()]).dot(&cs) < 0.0) {
                hemisphere_warning = true;
            }
        }
    }
    if hemisphere_warning {
        warn!("karcher mean: points are not contained in an open hemisphere");
    }
    for it in 0..max_iter {
        let mut step = Array1::zeros(c.len());
        for p in points.columns() {
            step += &m.log(c.view(), p)?;
        }
        step /= n as f64;
        let size = m.tangent_norm(c.view(), step.view());
        c = m.exp(c.view(), step.view());
        if size < tol {
            return Ok(KarcherMean {
                point: c,
                iterations: it + 1,
                converged: true,
                hemisphere_warning,
            });
        }
    }
    warn!("karcher mean did not converge in {max_iter} iterations");
    Ok(KarcherMean {
        point: c,
        iterations: max_iter,
        converged: false,
        hemisphere_warning,
    })
}

/// Immutable snapshot of tangent coordinates at the centroid.
#[derive(Debug, Clone, PartialEq)]
pub struct TangentIndex {
    pub manifold: Manifold,
    pub centroid: Array1<f64>,
    pub ids: Vec<usize>,
    /// One row of intrinsic coordinates per indexed id.
    pub coords: Array2<f64>,
    pub build_step: usize,
    pub refresh_period: usize,
}

pub const KARCHER_TOL: f64 = 1e-6;
pub const KARCHER_MAX_ITER: usize = 100;

impl TangentIndex {
    /// Indexes the columns of `points`, labelled by `ids`.
    pub fn build(
        m: &Manifold,
        ids: &[usize],
        points: ArrayView2<f64>,
        step: usize,
        refresh_period: usize,
    ) -> Result<Self> {
        if ids.len() != points.ncols() {
            return Err(Error::DimMismatch {
                expected: points.ncols(),
                actual: ids.len(),
            });
        }
        let centroid = karcher_mean(m, points, KARCHER_TOL, KARCHER_MAX_ITER)?.point;
        let basis = m.tangent_basis(centroid.view());
        let mut coords = Array2::zeros((ids.len(), m.intrinsic_dim()));
        for (i, p) in points.columns().into_iter().enumerate() {
            let v = m.log(centroid.view(), p)?;
            coords.row_mut(i).assign(&basis.t().dot(&v));
        }
        Ok(TangentIndex {
            manifold: m.clone(),
            centroid,
            ids: ids.to_vec(),
            coords,
            build_step: step,
            refresh_period: refresh_period.max(1),
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    fn row_of(&self, u: usize) -> Option<usize> {
        self.ids.iter().position(|&x| x == u)
    }

    /// Maps tangent coordinates of row `i` back onto the manifold.
    pub fn reconstruct(&self, i: usize) -> Array1<f64> {
        let basis = self.manifold.tangent_basis(self.centroid.view());
        let v = basis.dot(&self.coords.row(i));
        self.manifold.exp(self.centroid.view(), v.view())
    }

    /// The `k` indexed ids closest to `u` in the tangent chart, skipping
    /// `exclusions`. Ties go to the smaller id.
    pub fn query_negatives(&self, u: usize, k: usize, exclusions: &HashSet<usize>) -> Result<Vec<usize>> {
        let row = self
            .row_of(u)
            .ok_or_else(|| Error::EmptyInput(format!("node {u} is not indexed")))?;
        let q = self.coords.row(row);
        let mut cands: Vec<(f64, usize)> = self
            .ids
            .iter()
            .zip(self.coords.rows())
            .filter(|(id, _)| !exclusions.contains(id))
            .map(|(&id, r)| {
                let d: f64 = r.iter().zip(q.iter()).map(|(a, b)| (a - b) * (a - b)).sum();
                (d, id)
            })
            .collect();
        let key = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < cands.len() {
            cands.select_nth_unstable_by(k, key);
            cands.truncate(k);
        }
        cands.sort_by(key);
        let out: Vec<usize> = cands.into_iter().map(|(_, id)| id).collect();
        assert!(out.iter().all(|id| !exclusions.contains(id)));
        Ok(out)
    }

    pub fn needs_refresh(&self, step: usize) -> bool {
        step.saturating_sub(self.build_step) >= self.refresh_period
    }

    /// Rebuilds from `points` when the refresh period has elapsed.
    pub fn maybe_refresh(self, step: usize, points: ArrayView2<f64>) -> Result<Self> {
        if self.needs_refresh(step) {
            let period = self.refresh_period;
            TangentIndex::build(&self.manifold.clone(), &self.ids, points, step, period)
        } else {
            Ok(self)
        }
    }

    /// Mean overlap between the tangent-chart neighbors and exact geodesic
    /// neighbors of each query row (self excluded).
    pub fn recall_at(&self, points: ArrayView2<f64>, queries: &[usize], k: usize) -> Result<f64> {
        if queries.is_empty() {
            return Ok(1.0);
        }
        let total: f64 = queries
            .par_iter()
            .map(|&u| -> Result<f64> {
                let row = self
                    .row_of(u)
                    .ok_or_else(|| Error::EmptyInput(format!("node {u} is not indexed")))?;
                let excl: HashSet<usize> = [u].into_iter().collect();
                let approx: HashSet<usize> = self.query_negatives(u, k, &excl)?.into_iter().collect();
                let exact = brute_force_knn(&self.manifold, &self.ids, points, row, k, &excl);
                let hits = exact.iter().filter(|id| approx.contains(id)).count();
                Ok(hits as f64 / exact.len().max(1) as f64)
            })
            .collect::<Result<Vec<f64>>>()?
            .iter()
            .sum();
        Ok(total / queries.len() as f64)
    }
}

/// Exact geodesic kNN of column `row` among the columns of `points`.
pub fn brute_force_knn(
    m: &Manifold,
    ids: &[usize],
    points: ArrayView2<f64>,
    row: usize,
    k: usize,
    exclusions: &HashSet<usize>,
) -> Vec<usize> {
    let q = points.column(row);
    let mut cands: Vec<(f64, usize)> = ids
        .iter()
        .zip(points.columns())
        .filter(|(id, _)| !exclusions.contains(id))
        .map(|(&id, p)| (m.distance(q, p), id))
        .collect();
    cands.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    cands.into_iter().take(k).map(|(_, id)| id).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn close(a: &Array1<f64>, b: &Array1<f64>, tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn karcher_examples() {
        let e = karcher_mean(&Manifold::Euclidean(2), array![[0.0, 2.0], [0.0, 0.0]].view(), 1e-6, 100).unwrap();
        assert!(close(&e.point, &array![1.0, 0.0], 1e-8));
        let s = karcher_mean(
            &Manifold::Sphere(2),
            array![[1.0, 0.0], [0.0, 1.0], [0.0, 0.0]].view(),
            1e-6,
            100,
        )
        .unwrap();
        let h = 0.5f64.sqrt();
        assert!(close(&s.point, &array![h, h, 0.0], 1e-8));
        let b = karcher_mean(&Manifold::PoincareBall(2), array![[0.4, -0.4], [0.0, 0.0]].view(), 1e-6, 100).unwrap();
        assert!(close(&b.point, &array![0.0, 0.0], 1e-8));
        assert!(karcher_mean(&Manifold::Euclidean(2), Array2::zeros((2, 0)).view(), 1e-6, 100).is_err());
    }

    #[test]
    fn karcher_flags_opposite_hemispheres() {
        let pts = array![[1.0, 1.0, -0.8], [0.0, 0.0, 0.6], [0.0, 0.0, 0.0]];
        let k = karcher_mean(&Manifold::Sphere(2), pts.view(), 1e-6, 100).unwrap();
        assert!(k.hemisphere_warning);
    }

    #[test]
    fn euclidean_index_stores_centered_points() {
        let pts = array![[0.0, 1.0, 5.0], [0.0, 2.0, 1.0]];
        let idx = TangentIndex::build(&Manifold::Euclidean(2), &[0, 1, 2], pts.view(), 0, 10).unwrap();
        let mean = pts.mean_axis(Axis(1)).unwrap();
        for i in 0..3 {
            let want = &pts.column(i) - &mean;
            assert!(close(&idx.coords.row(i).to_owned(), &want, 1e-12));
        }
    }

    #[test]
    fn sphere_index_round_trips() {
        let m = Manifold::Sphere(3);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut pts = Array2::zeros((4, 20));
        for j in 0..20 {
            let mut p = m.random_point(&mut rng);
            p[0] = p[0].abs() + 0.5;
            pts.column_mut(j).assign(&m.project_point(p.view()));
        }
        let ids: Vec<usize> = (0..20).collect();
        let idx = TangentIndex::build(&m, &ids, pts.view(), 0, 1).unwrap();
        for j in 0..20 {
            assert!(close(&idx.reconstruct(j), &pts.column(j).to_owned(), 1e-9));
        }
        let again = TangentIndex::build(&m, &ids, pts.view(), 0, 1).unwrap();
        assert_eq!(idx, again);
        assert!(idx.recall_at(pts.view(), &ids, 5).unwrap() > 0.5);
    }

    #[test]
    fn query_examples() {
        let pts = array![[0.0, 1.0, 2.0, 3.0]];
        let idx = TangentIndex::build(&Manifold::Euclidean(1), &[0, 1, 2, 3], pts.view(), 0, 4).unwrap();
        let ex: HashSet<usize> = [0].into_iter().collect();
        assert_eq!(idx.query_negatives(0, 2, &ex).unwrap(), vec![1, 2]);
        assert_eq!(idx.query_negatives(0, 10, &ex).unwrap(), vec![1, 2, 3]);
        let all: HashSet<usize> = (0..4).collect();
        assert!(idx.query_negatives(0, 2, &all).unwrap().is_empty());
        // equal distances resolve to the smaller id
        let ex1: HashSet<usize> = [1].into_iter().collect();
        assert_eq!(idx.query_negatives(1, 2, &ex1).unwrap(), vec![0, 2]);
    }

    #[test]
    fn refresh_schedule() {
        let pts = array![[0.0, 1.0]];
        let idx = TangentIndex::build(&Manifold::Euclidean(1), &[0, 1], pts.view(), 0, 3).unwrap();
        let moved = array![[5.0, 7.0]];
        let same = idx.clone().maybe_refresh(2, moved.view()).unwrap();
        assert_eq!(same, idx);
        let fresh = idx.maybe_refresh(3, moved.view()).unwrap();
        assert_eq!(fresh.build_step, 3);
        assert_eq!(fresh.centroid, array![6.0]);
        let twice = fresh.clone().maybe_refresh(6, moved.view()).unwrap();
        assert_eq!(twice.coords, fresh.coords);
        assert_eq!(twice.centroid, fresh.centroid);
    }
}
