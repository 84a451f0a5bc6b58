//! Standard retrofitting on a free embedding table, and explicit retrofitting
//! through the shared network trainer.

use ndarray::{Array2, ArrayView2};
use serde::{Deserialize, Serialize};

use crate::data::{GraphDataset, Split, Splits};
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, MapReport, RankDistance};
use crate::layers::RiemannianNetwork;
use crate::losses::{sr_objective, LossConfig, Variant};
use crate::train::{FitResult, TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StandardConfig {
    pub lambda: f64,
    pub lr: f64,
    pub iterations: usize,
}

impl Default for StandardConfig {
    fn default() -> Self {
        StandardConfig {
            lambda: 1.0,
            lr: 0.05,
            iterations: 200,
        }
    }
}

/// Gradient descent on `Σ_E ‖t_u − t_v‖² + λ Σ_V ‖t_v − s_v‖²` starting from
/// the sources. `sources` holds one embedding per column; only `edges`
/// contribute, so isolated nodes never move.
pub fn run_standard_retrofit(sources: ArrayView2<f64>, edges: &[(usize, usize)], cfg: StandardConfig) -> Result<Array2<f64>> {
    if !(cfg.lambda >= 0.0 && cfg.lr > 0.0) {
        return Err(Error::Config("standard retrofitting needs lambda >= 0 and lr > 0".into()));
    }
    let mut t = sources.to_owned();
    let mut g = Array2::zeros(t.dim());
    for _ in 0..cfg.iterations {
        g.fill(0.0);
        for &(u, v) in edges {
            let d = &t.column(u) - &t.column(v);
            let mut gu = g.column_mut(u);
            gu.scaled_add(2.0, &d);
            let mut gv = g.column_mut(v);
            gv.scaled_add(-2.0, &d);
        }
        g.scaled_add(2.0 * cfg.lambda, &(&t - &sources));
        t.scaled_add(-cfg.lr, &g);
    }
    Ok(t)
}

/// Objective of [`run_standard_retrofit`] on column-major tables.
pub fn standard_objective(targets: ArrayView2<f64>, sources: ArrayView2<f64>, edges: &[(usize, usize)], lambda: f64) -> f64 {
    sr_objective(targets.t(), sources.t(), edges, lambda)
}

/// Standard retrofitting on the training edges, scored with cosine distance.
pub fn standard_retrofit_map(dataset: &GraphDataset, splits: &Splits, cfg: StandardConfig, split: Split) -> Result<MapReport> {
    let t = run_standard_retrofit(dataset.embeddings.view(), &splits.train_edges, cfg)?;
    Ok(mean_average_precision(t.view(), &RankDistance::Cosine, splits, &dataset.edges, split))
}

/// Max-margin fidelity plus proximity through the shared trainer.
pub fn run_explicit_retrofit(
    dataset: &GraphDataset,
    splits: &Splits,
    loss: LossConfig,
    cfg: TrainConfig,
    net: RiemannianNetwork,
) -> Result<FitResult> {
    if loss.variant != Variant::Explicit {
        return Err(Error::Config(format!("expected the explicit variant, got {}", loss.variant)));
    }
    Trainer::new(dataset, splits, loss, cfg)?.fit(net)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::layers::{init_network, Architecture};
    use crate::manifolds::{std_normal, Manifold};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn standard_examples() {
        let s = array![[0.0, 2.0, 5.0], [1.0, 3.0, -1.0]];
        let strong = StandardConfig {
            lambda: 1e6,
            lr: 1e-7,
            iterations: 50,
        };
        let t = run_standard_retrofit(s.view(), &[(0, 1)], strong).unwrap();
        assert!((&t - &s).iter().all(|d| d.abs() < 1e-3));

        let free = StandardConfig {
            lambda: 0.0,
            lr: 0.1,
            iterations: 200,
        };
        let t = run_standard_retrofit(s.view(), &[(0, 1)], free).unwrap();
        for r in 0..2 {
            let mid = (s[[r, 0]] + s[[r, 1]]) / 2.0;
            assert!((t[[r, 0]] - mid).abs() < 1e-9 && (t[[r, 1]] - mid).abs() < 1e-9);
        }
        assert_eq!(t.column(2), s.column(2));
        let before = standard_objective(s.view(), s.view(), &[(0, 1)], 1.0);
        let t = run_standard_retrofit(s.view(), &[(0, 1)], StandardConfig::default()).unwrap();
        assert!(standard_objective(t.view(), s.view(), &[(0, 1)], 1.0) < before);
    }

    fn toy() -> (GraphDataset, Splits) {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let names = (0..4).map(|i| format!("w{i}")).collect();
        let edges = vec![(0, 1), (2, 3)];
        let emb = Array2::from_shape_fn((4, 4), |_| std_normal(&mut rng));
        let ds = GraphDataset::new(names, edges.clone(), emb).unwrap();
        let sp = Splits::from_labels(vec![Split::Train; 4], &edges);
        (ds, sp)
    }

    #[test]
    fn explicit_reaches_perfect_train_map() {
        let (ds, sp) = toy();
        for seed in 0..3 {
            let mut loss = LossConfig::new(Variant::Explicit);
            loss.neighbor_count = 2;
            loss.lambda = 0.01;
            let cfg = TrainConfig {
                euclidean_lr: 1e-2,
                epochs: 500,
                patience: 1000,
                seed,
                ..Default::default()
            };
            let arch = Architecture::standard(Manifold::Euclidean(4), 16, 1, Manifold::Euclidean(4));
            let net = init_network(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let tr = Trainer::new(&ds, &sp, loss.clone(), cfg.clone()).unwrap();
            let fit = run_explicit_retrofit(&ds, &sp, loss, cfg, net).unwrap();
            assert_eq!(fit.steps, 500);
            assert_eq!(tr.evaluate(&fit.best, Split::Train).map, 1.0, "seed {seed}");
        }
    }

    #[test]
    fn explicit_with_dominant_proximity_stays_close() {
        let (ds, sp) = toy();
        let mut loss = LossConfig::new(Variant::Explicit);
        loss.neighbor_count = 2;
        loss.lambda = 1e4;
        let cfg = TrainConfig {
            euclidean_lr: 1e-2,
            epochs: 300,
            patience: 1000,
            gradnorm: crate::train::GradNormConfig {
                enabled: false,
                beta: 0.9,
            },
            ..Default::default()
        };
        let arch = Architecture::standard(Manifold::Euclidean(4), 16, 1, Manifold::Euclidean(4));
        let net = init_network(&arch, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let tr = Trainer::new(&ds, &sp, loss.clone(), cfg.clone()).unwrap();
        let mut st = crate::train::TrainState::new(net, &cfg);
        for _ in 0..300 {
            tr.step(&mut st, &sp.train_edges).unwrap();
        }
        let out = tr.outputs(&st.net);
        let err = (&out - &ds.embeddings).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(err < 1e-2, "{err}");
        let a = run_explicit_retrofit(&ds, &sp, loss.clone(), TrainConfig { epochs: 5, ..cfg.clone() }, st.net.clone()).unwrap();
        let b = run_explicit_retrofit(&ds, &sp, loss, TrainConfig { epochs: 5, ..cfg }, st.net).unwrap();
        assert_eq!(a.rows, b.rows);
        assert_eq!(a.best, b.best);
    }
}
