use conformal_retrofit::data::{make_splits, GraphDataset, Split, SplitRatios};
use conformal_retrofit::layers::{init_network, Architecture};
use conformal_retrofit::losses::{LossConfig, Variant};
use conformal_retrofit::train::{source_baseline, TrainConfig, Trainer};
use conformal_retrofit::Manifold;
use ndarray::Array2;
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const MANIFOLDS: [&str; 6] = ["E4", "S3", "H3", "S2xH2", "E1xS2xH1", "S5"];

proptest! {
    #[test]
    fn exp_inverts_log(which in 0..MANIFOLDS.len(), seed in any::<u64>()) {
        let m: Manifold = MANIFOLDS[which].parse().unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let p = m.random_point(&mut rng);
        let q = m.random_point(&mut rng);
        prop_assume!(m.distance(p.view(), q.view()) < 3.0);
        let v = m.log(p.view(), q.view()).unwrap();
        let back = m.exp(p.view(), v.view());
        prop_assert!(m.distance(back.view(), q.view()) < 1e-9);
        prop_assert!((m.tangent_norm(p.view(), v.view()) - m.distance(p.view(), q.view())).abs() < 1e-9);
    }

    #[test]
    fn network_outputs_stay_on_target(seed in any::<u64>()) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let arch = Architecture::standard(Manifold::Euclidean(3), 8, 2, "S2xH2".parse().unwrap());
        let net = init_network(&arch, &mut rng).unwrap();
        let xs = Array2::from_shape_fn((3, 16), |(i, j)| ((i * 16 + j) as f64 * 0.37).sin() * 3.0);
        let ys = net.forward_batch(xs.view());
        for y in ys.columns() {
            prop_assert!(net.target().check_point(y).is_ok());
        }
    }
}

/// Binary tree whose embeddings carry no information about the edges.
fn tree_dataset(seed: u64) -> GraphDataset {
    let n = 63;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noise = Manifold::Euclidean(6);
    let mut emb = Array2::<f64>::zeros((6, n));
    for v in 0..n {
        emb.column_mut(v).assign(&noise.random_point(&mut rng));
    }
    let edges = (1..n).map(|v| ((v - 1) / 2, v)).collect();
    GraphDataset::new((0..n).map(|i| format!("n{i}")).collect(), edges, emb).unwrap()
}

#[test]
fn conformal_fit_learns_the_train_graph_deterministically() {
    let ds = tree_dataset(0);
    let splits = make_splits(63, &ds.edges, SplitRatios::default(), 0).unwrap();
    let mut loss = LossConfig::new(Variant::Conformal);
    loss.neighbor_count = 10;
    loss.margin = 0.5;
    loss.lambda = 0.1;
    let cfg = TrainConfig {
        batch_size: 16,
        epochs: 80,
        patience: 100,
        euclidean_lr: 1e-2,
        riemannian_lr: 1e-2,
        seed: 5,
        ..Default::default()
    };
    let arch = Architecture::standard(Manifold::Euclidean(6), 32, 1, "S3xH3".parse().unwrap());
    let trainer = Trainer::new(&ds, &splits, loss, cfg).unwrap();
    let fit = |s| trainer.fit(init_network(&arch, &mut ChaCha8Rng::seed_from_u64(s)).unwrap()).unwrap();
    let a = fit(1);
    let b = fit(1);
    assert_eq!(a.rows, b.rows);
    assert_eq!(a.best, b.best);
    let train: Vec<f64> = a.rows.iter().filter(|r| r.split == Split::Train).map(|r| r.map).collect();
    let source = source_baseline(&ds, &splits, Split::Train).map;
    let last = *train.last().unwrap();
    assert!(last > train[0] + 0.15 && last > source + 0.15, "{train:?} vs source {source}");
}
