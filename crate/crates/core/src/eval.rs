//! Link prediction scored by mean average precision.

use std::collections::HashSet;

use ndarray::{Array2, ArrayView2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Adjacency, Split, Splits};
use crate::losses::cosine_distance;
use crate::manifolds::Manifold;

/// How candidates are ranked against a query.
#[derive(Debug, Clone, PartialEq)]
pub enum RankDistance {
    Geodesic(Manifold),
    Cosine,
    /// Precomputed pairwise table indexed by node id.
    Table(Array2<f64>),
}

impl RankDistance {
    fn eval(&self, points: ArrayView2<f64>, a: usize, b: usize) -> f64 {
        match self {
            RankDistance::Geodesic(m) => m.distance(points.column(a), points.column(b)),
            RankDistance::Cosine => cosine_distance(points.column(a), points.column(b)),
            RankDistance::Table(t) => t[[a, b]],
        }
    }
}

/// Mean over relevant items of precision at their rank.
pub fn average_precision(ranked: &[usize], relevant: &HashSet<usize>) -> f64 {
    if relevant.is_empty() {
        return 0.0;
    }
    let mut hits = 0usize;
    let mut sum = 0.0;
    for (i, id) in ranked.iter().enumerate() {
        if relevant.contains(id) {
            hits += 1;
            sum += hits as f64 / (i + 1) as f64;
        }
    }
    sum / relevant.len() as f64
}

/// Expected AP of a uniformly random ranking of `n` candidates holding `r`
/// relevant ones.
pub fn random_ranking_ap(n: usize, r: usize) -> f64 {
    let nf = n as f64;
    let h: f64 = (1..=n).map(|k| 1.0 / k as f64).sum();
    if n == 1 {
        return 1.0;
    }
    (h + (r as f64 - 1.0) / (nf - 1.0) * (nf - h)) / nf
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    pub map: f64,
    pub queries: usize,
    pub skipped: usize,
}

/// One line of the metrics log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricRow {
    pub split: Split,
    pub epoch: usize,
    pub map: f64,
    pub skipped_queries: usize,
}

impl MetricRow {
    pub fn new(split: Split, epoch: usize, report: MapReport) -> Self {
        MetricRow {
            split,
            epoch,
            map: report.map,
            skipped_queries: report.skipped,
        }
    }
}

pub const METRICS_HEADER: &str = "# retrofit-metrics v1\nsplit,epoch,map,skipped_queries\n";

/// Versioned CSV with full-precision mAP values.
pub fn metrics_csv(rows: &[MetricRow]) -> String {
    let mut s = String::from(METRICS_HEADER);
    for r in rows {
        s.push_str(&format!("{},{},{},{}\n", r.split, r.epoch, r.map, r.skipped_queries));
    }
    s
}

/// Ranks `pool` (minus the query) for each query by distance, ties by id, and
/// averages AP against the query's graph neighbors inside the pool. Queries
/// without such neighbors are skipped.
pub fn map_over(
    points: ArrayView2<f64>,
    distance: &RankDistance,
    adjacency: &Adjacency,
    queries: &[usize],
    pool: &[usize],
) -> MapReport {
    let in_pool: HashSet<usize> = pool.iter().copied().collect();
    let aps: Vec<Option<f64>> = queries
        .par_iter()
        .map(|&u| {
            let relevant: HashSet<usize> = adjacency
                .neighbors(u)
                .iter()
                .copied()
                .filter(|v| in_pool.contains(v))
                .collect();
            if relevant.is_empty() {
                return None;
            }
            let mut ranked: Vec<(f64, usize)> = pool
                .iter()
                .filter(|&&v| v != u)
                .map(|&v| (distance.eval(points, u, v), v))
                .collect();
            ranked.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
            let ids: Vec<usize> = ranked.into_iter().map(|(_, v)| v).collect();
            Some(average_precision(&ids, &relevant))
        })
        .collect();
    let scored: Vec<f64> = aps.iter().flatten().copied().collect();
    let map = if scored.is_empty() {
        0.0
    } else {
        scored.iter().sum::<f64>() / scored.len() as f64
    };
    MapReport {
        map,
        queries: scored.len(),
        skipped: aps.len() - scored.len(),
    }
}

/// mAP for the queries of `split`: train ranks against train nodes, val
/// against train and val, test against every node.
pub fn mean_average_precision(
    points: ArrayView2<f64>,
    distance: &RankDistance,
    splits: &Splits,
    all_edges: &[(usize, usize)],
    split: Split,
) -> MapReport {
    let adjacency = Adjacency::new(splits.labels.len(), all_edges);
    map_over(points, distance, &adjacency, &splits.nodes(split), &splits.pool(split))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_splits;
    use crate::data::SplitRatios;
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn set(v: &[usize]) -> HashSet<usize> {
        v.iter().copied().collect()
    }

    #[test]
    fn ap_examples() {
        assert_eq!(average_precision(&[7, 1, 2], &set(&[7])), 1.0);
        assert!((average_precision(&[7, 1, 8], &set(&[7, 8])) - 0.833333).abs() < 1e-6);
        assert!((average_precision(&[1, 2, 3, 4, 9], &set(&[9])) - 0.2).abs() < 1e-15);
    }

    #[test]
    fn path_graph_map_is_perfect() {
        let pts = array![[0.0, 1.0, 2.0, 3.0]];
        let adj = Adjacency::new(4, &[(0, 1), (1, 2), (2, 3)]);
        let all = [0, 1, 2, 3];
        let r = map_over(pts.view(), &RankDistance::Geodesic(Manifold::Euclidean(1)), &adj, &all, &all);
        assert_eq!(r.map, 1.0);
        assert_eq!(r.skipped, 0);
        let single = map_over(pts.view(), &RankDistance::Cosine, &adj, &[0], &[0, 1]);
        assert_eq!(single.map, 1.0);
        let none = map_over(pts.view(), &RankDistance::Cosine, &adj, &[0], &[0, 3]);
        assert_eq!((none.queries, none.skipped), (0, 1));
    }

    #[test]
    fn random_star_matches_expectation() {
        let n = 12;
        let edges: Vec<(usize, usize)> = (1..n).map(|i| (0, i)).collect();
        let adj = Adjacency::new(n, &edges);
        let all: Vec<usize> = (0..n).collect();
        let m = Manifold::Euclidean(5);
        let mut total = 0.0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut pts = Array2::zeros((5, n));
            for j in 0..n {
                pts.column_mut(j).assign(&m.random_point(&mut rng));
            }
            total += map_over(pts.view(), &RankDistance::Geodesic(m.clone()), &adj, &all, &all).map;
        }
        let want = (random_ranking_ap(n - 1, n - 1) + (n - 1) as f64 * random_ranking_ap(n - 1, 1)) / n as f64;
        assert!((total / 100.0 - want).abs() < 0.05, "{} vs {want}", total / 100.0);
    }

    #[test]
    fn pools_follow_split_visibility() {
        let n = 20;
        let edges: Vec<(usize, usize)> = (0..n - 1).map(|i| (i, i + 1)).collect();
        let s = make_splits(n, &edges, SplitRatios::default(), 3).unwrap();
        let pts = Array2::from_shape_fn((1, n), |(_, j)| j as f64);
        let d = RankDistance::Geodesic(Manifold::Euclidean(1));
        for split in [Split::Train, Split::Val, Split::Test] {
            let r = mean_average_precision(pts.view(), &d, &s, &edges, split);
            assert_eq!(r.queries + r.skipped, s.nodes(split).len());
            assert!((0.0..=1.0).contains(&r.map));
        }
    }

    proptest::proptest! {
        #[test]
        fn ap_is_rank_only(xs in proptest::collection::vec(-5.0f64..5.0, 6)) {
            let pts = Array2::from_shape_vec((1, 6), xs.clone()).unwrap();
            let table = Array2::from_shape_fn((6, 6), |(i, j)| (xs[i] - xs[j]).abs());
            let warped = table.mapv(|d| d.powi(3) + 2.0 * d);
            let adj = Adjacency::new(6, &[(0, 1), (0, 4), (2, 3), (3, 5)]);
            let all: Vec<usize> = (0..6).collect();
            let d = RankDistance::Geodesic(Manifold::Euclidean(1));
            let a = map_over(pts.view(), &d, &adj, &all, &all);
            let b = map_over(pts.view(), &RankDistance::Table(warped), &adj, &all, &all);
            proptest::prop_assert_eq!(a, b);
            proptest::prop_assert!((0.0..=1.0).contains(&a.map));
        }
    }
}
