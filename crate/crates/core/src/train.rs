//! Minibatch training of retrofitting networks with early stopping on
//! validation mAP.

use std::collections::BTreeSet;

use log::{debug, info};
use ndarray::{Array2, Axis};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{Adjacency, GraphDataset, Split, Splits};
use crate::diff::{BatchTrace, Backend, DifferentiableProgram, Tape, Unary};
use crate::error::{Error, Result};
use crate::eval::{mean_average_precision, MapReport, MetricRow, RankDistance};
use crate::layers::{source_seeds, RiemannianNetwork};
use crate::losses::{cosine_distance_cols, distance_cols, DistanceKind, LossConfig, PullbackLoss, Variant};
use crate::manifolds::Manifold;
use crate::neighbors::TangentIndex;
use crate::optim::{adam_step, gradnorm_weights, rsgd_step, AdamConfig, AdamState, GradNormState};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GradNormConfig {
    #[serde(default = "default_true")]
    pub enabled: bool,
    #[serde(default = "default_beta")]
    pub beta: f64,
}

impl Default for GradNormConfig {
    fn default() -> Self {
        GradNormConfig {
            enabled: true,
            beta: default_beta(),
        }
    }
}

fn default_true() -> bool {
    true
}
fn default_beta() -> f64 {
    0.9
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    #[serde(default = "default_euclidean_lr")]
    pub euclidean_lr: f64,
    #[serde(default = "default_riemannian_lr")]
    pub riemannian_lr: f64,
    #[serde(default = "default_batch_size")]
    pub batch_size: usize,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default)]
    pub gradnorm: GradNormConfig,
    #[serde(default = "default_patience")]
    pub patience: usize,
    #[serde(default)]
    pub seed: u64,
    /// Steps between index rebuilds; `None` means once per epoch.
    #[serde(default)]
    pub refresh_period: Option<usize>,
    /// Cap on the vertices entering the preservation term per step.
    #[serde(default)]
    pub max_preservation_vertices: Option<usize>,
}

fn default_euclidean_lr() -> f64 {
    1e-3
}
fn default_riemannian_lr() -> f64 {
    1e-3
}
fn default_batch_size() -> usize {
    128
}
fn default_epochs() -> usize {
    100
}
fn default_patience() -> usize {
    50
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            euclidean_lr: default_euclidean_lr(),
            riemannian_lr: default_riemannian_lr(),
            batch_size: default_batch_size(),
            epochs: default_epochs(),
            gradnorm: GradNormConfig::default(),
            patience: default_patience(),
            seed: 0,
            refresh_period: None,
            max_preservation_vertices: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.euclidean_lr >= 0.0 && self.riemannian_lr >= 0.0) {
            return Err(Error::Config("learning rates must be nonnegative".into()));
        }
        if self.batch_size == 0 {
            return Err(Error::Config("batch_size must be at least 1".into()));
        }
        if !(0.0..1.0).contains(&self.gradnorm.beta) {
            return Err(Error::Config("gradnorm.beta must lie in [0, 1)".into()));
        }
        if self.refresh_period == Some(0) || self.max_preservation_vertices == Some(0) {
            return Err(Error::Config("refresh_period and max_preservation_vertices must be positive".into()));
        }
        Ok(())
    }
}

/// Losses and weights of one update.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepMetrics {
    pub fidelity: f64,
    pub preservation: f64,
    pub weights: (f64, f64),
    pub total: f64,
    pub skipped: bool,
}

/// Mutable training state owned by a single writer.
#[derive(Debug, Clone)]
pub struct TrainState {
    pub net: RiemannianNetwork,
    adam: Vec<Option<AdamState>>,
    gradnorm: GradNormState,
    index: Option<TangentIndex>,
    pub step: usize,
    pub skipped_updates: usize,
    rng: ChaCha8Rng,
}

impl TrainState {
    pub fn new(net: RiemannianNetwork, cfg: &TrainConfig) -> Self {
        let values = net.param_values();
        let adam = values
            .iter()
            .enumerate()
            .map(|(i, v)| match param_manifold(&net, i) {
                None => Some(AdamState::new(v.dim())),
                Some(_) => None,
            })
            .collect();
        TrainState {
            net,
            adam,
            gradnorm: GradNormState::new(cfg.gradnorm.beta),
            index: None,
            step: 0,
            skipped_updates: 0,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_7a1e),
        }
    }

    pub fn index(&self) -> Option<&TangentIndex> {
        self.index.as_ref()
    }
}

/// Manifold of the `i`-th parameter when it is a non-Euclidean point.
fn param_manifold(net: &RiemannianNetwork, i: usize) -> Option<&Manifold> {
    let layer = &net.layers()[i / 3];
    let m = match i % 3 {
        0 => return None,
        1 => &layer.source,
        _ => &layer.target,
    };
    (!m.is_euclidean()).then_some(m)
}

/// Result of [`Trainer::fit`].
#[derive(Debug, Clone)]
pub struct FitResult {
    pub best: RiemannianNetwork,
    pub best_epoch: usize,
    pub best_val: MapReport,
    pub test: MapReport,
    pub rows: Vec<MetricRow>,
    pub steps: usize,
    pub skipped_updates: usize,
}

/// Network training for the explicit and conformal variants.
pub struct Trainer<'a> {
    pub dataset: &'a GraphDataset,
    pub splits: &'a Splits,
    pub loss: LossConfig,
    pub cfg: TrainConfig,
    train_nodes: Vec<usize>,
    adjacency: Adjacency,
}

const PRESERVATION_CHUNK: usize = 8;

impl<'a> Trainer<'a> {
    pub fn new(dataset: &'a GraphDataset, splits: &'a Splits, loss: LossConfig, cfg: TrainConfig) -> Result<Self> {
        loss.validate()?;
        cfg.validate()?;
        if loss.variant == Variant::Standard {
            return Err(Error::Config("standard retrofitting trains a free table, not a network".into()));
        }
        let train_nodes = splits.nodes(Split::Train);
        if train_nodes.is_empty() || splits.train_edges.is_empty() {
            return Err(Error::SplitTooSmall("no training edges".into()));
        }
        let adjacency = Adjacency::new(dataset.len(), &splits.train_edges);
        Ok(Trainer {
            dataset,
            splits,
            loss,
            cfg,
            train_nodes,
            adjacency,
        })
    }

    pub fn steps_per_epoch(&self) -> usize {
        self.splits.train_edges.len().div_ceil(self.cfg.batch_size)
    }

    fn check_network(&self, net: &RiemannianNetwork) -> Result<()> {
        if net.source().ambient_dim() != self.dataset.embeddings.nrows() {
            return Err(Error::DimMismatch {
                expected: net.source().ambient_dim(),
                actual: self.dataset.embeddings.nrows(),
            });
        }
        if self.loss.variant == Variant::Explicit {
            if !net.target().is_euclidean() {
                return Err(Error::Config("explicit retrofitting needs a Euclidean target".into()));
            }
            if net.target().ambient_dim() != net.source().ambient_dim() {
                return Err(Error::Config("proximity needs matching source and target dimensions".into()));
            }
        }
        Ok(())
    }

    /// Distance used to rank candidates for this variant.
    pub fn rank_distance(&self, net: &RiemannianNetwork) -> RankDistance {
        match (self.loss.variant, self.loss.distance_kind) {
            (Variant::Conformal, _) | (_, DistanceKind::Euclidean) => RankDistance::Geodesic(net.target().clone()),
            (_, DistanceKind::Cosine) => RankDistance::Cosine,
        }
    }

    pub fn outputs(&self, net: &RiemannianNetwork) -> Array2<f64> {
        net.forward_batch(self.dataset.embeddings.view())
    }

    pub fn evaluate(&self, net: &RiemannianNetwork, split: Split) -> MapReport {
        let out = self.outputs(net);
        mean_average_precision(out.view(), &self.rank_distance(net), self.splits, &self.dataset.edges, split)
    }

    fn refresh_index(&self, state: &mut TrainState) -> Result<()> {
        let period = self.cfg.refresh_period.unwrap_or_else(|| self.steps_per_epoch());
        let stale = state.index.as_ref().is_none_or(|i| i.needs_refresh(state.step));
        if stale {
            let xs = self.dataset.embeddings.select(Axis(1), &self.train_nodes);
            let ys = state.net.forward_batch(xs.view());
            let idx = TangentIndex::build(state.net.target(), &self.train_nodes, ys.view(), state.step, period)?;
            debug!("rebuilt tangent index at step {}", state.step);
            state.index = Some(idx);
        }
        Ok(())
    }

    /// One update on the edge minibatch `batch`.
    pub fn step(&self, state: &mut TrainState, batch: &[(usize, usize)]) -> Result<StepMetrics> {
        self.check_network(&state.net)?;
        self.refresh_index(state)?;
        let index = state.index.as_ref().expect("refreshed above");
        let mut oriented = Vec::with_capacity(batch.len());
        let mut negatives = Vec::with_capacity(batch.len());
        for &(a, b) in batch {
            let (u, v) = if state.rng.random_bool(0.5) { (a, b) } else { (b, a) };
            let excl = self.adjacency.closed_neighborhood(u);
            negatives.push(index.query_negatives(u, self.loss.neighbor_count, &excl)?);
            oriented.push((u, v));
        }
        let mut vertices: Vec<usize> = batch
            .iter()
            .flat_map(|&(a, b)| [a, b])
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        if let Some(cap) = self.cfg.max_preservation_vertices {
            if vertices.len() > cap {
                vertices.partial_shuffle(&mut state.rng, cap);
                vertices.truncate(cap);
                vertices.sort_unstable();
            }
        }

        let net = &state.net;
        let (fidelity, g_f) = self.fidelity_gradients(net, &oriented, &negatives);
        let use_preservation = self.loss.lambda > 0.0;
        let (preservation, g_p) = if use_preservation {
            self.preservation_gradients(net, &vertices)?
        } else {
            (0.0, zeros_like(net))
        };

        let weights = if self.cfg.gradnorm.enabled && use_preservation {
            let last = 3 * (net.layers().len() - 1);
            let w = gradnorm_weights(&[frobenius(&g_f[last]), frobenius(&g_p[last])], &mut state.gradnorm);
            (w[0], w[1])
        } else {
            (1.0, 1.0)
        };
        let lambda = self.loss.lambda;
        let grads: Vec<Array2<f64>> = g_f
            .iter()
            .zip(&g_p)
            .map(|(f, p)| f * weights.0 + p * (weights.1 * lambda))
            .collect();
        let total = weights.0 * fidelity + weights.1 * lambda * preservation;

        let skipped = grads.iter().any(|g| g.iter().any(|v| !v.is_finite()));
        if skipped {
            state.skipped_updates += 1;
        } else {
            self.apply_update(state, &grads)?;
        }
        state.step += 1;
        Ok(StepMetrics {
            fidelity,
            preservation,
            weights,
            total,
            skipped,
        })
    }

    fn apply_update(&self, state: &mut TrainState, grads: &[Array2<f64>]) -> Result<()> {
        let mut params = state.net.param_values();
        let adam_cfg = AdamConfig::default();
        for (i, (p, g)) in params.iter_mut().zip(grads).enumerate() {
            match param_manifold(&state.net, i) {
                None => {
                    let st = state.adam[i].as_mut().expect("euclidean parameter");
                    adam_step(st, p, g, self.cfg.euclidean_lr, adam_cfg);
                }
                Some(m) => {
                    let out = rsgd_step(m, p.column(0), g.column(0), self.cfg.riemannian_lr);
                    if out.skipped {
                        state.skipped_updates += 1;
                    }
                    p.column_mut(0).assign(&out.point);
                }
            }
        }
        state.net.set_params(&params)
    }

    /// Sum of hinge terms over edges and their negatives, and its parameter
    /// gradients.
    pub fn fidelity_gradients(
        &self,
        net: &RiemannianNetwork,
        oriented: &[(usize, usize)],
        negatives: &[Vec<usize>],
    ) -> (f64, Vec<Array2<f64>>) {
        let nodes: Vec<usize> = oriented
            .iter()
            .flat_map(|&(u, v)| [u, v])
            .chain(negatives.iter().flatten().copied())
            .collect::<BTreeSet<_>>()
            .into_iter()
            .collect();
        let col = |id: usize| nodes.binary_search(&id).expect("gathered above");
        let mut nu = Vec::new();
        let mut nn = Vec::new();
        let mut ne = Vec::new();
        for (e, ((u, _), negs)) in oriented.iter().zip(negatives).enumerate() {
            for &x in negs {
                nu.push(col(*u));
                nn.push(col(x));
                ne.push(e);
            }
        }
        if nn.is_empty() {
            return (0.0, zeros_like(net));
        }
        let ui: Vec<usize> = oriented.iter().map(|&(u, _)| col(u)).collect();
        let vi: Vec<usize> = oriented.iter().map(|&(_, v)| col(v)).collect();

        let mut t = Tape::new();
        let params: Vec<usize> = net.param_values().into_iter().map(|p| t.leaf(p)).collect();
        let x = t.constant(self.dataset.embeddings.select(Axis(1), &nodes));
        let y = net.eval(&mut t, &params, &x);
        let yu = t.select_cols(&y, &ui);
        let yv = t.select_cols(&y, &vi);
        let d_pos = self.embedding_distance(&mut t, net.target(), &yu, &yv);
        let yq = t.select_cols(&y, &nu);
        let yn = t.select_cols(&y, &nn);
        let d_neg = self.embedding_distance(&mut t, net.target(), &yq, &yn);
        let d_pos = t.select_cols(&d_pos, &ne);
        let h = t.sub(&d_pos, &d_neg);
        let h = t.add_scalar(&h, self.loss.margin);
        let h = t.unary(Unary::Relu, &h);
        let value = t.value_ref(h).sum();
        let ones = Array2::ones(t.shape(&h));
        (value, t.backward(&[(h, ones)], &params))
    }

    fn embedding_distance<B: Backend>(&self, b: &mut B, target: &Manifold, x: &B::V, y: &B::V) -> B::V {
        match (self.loss.variant, self.loss.distance_kind) {
            (Variant::Explicit, DistanceKind::Cosine) => cosine_distance_cols(b, x, y),
            _ => distance_cols(b, target, x, y),
        }
    }

    /// Unweighted preservation term over `vertices` and its gradients.
    pub fn preservation_gradients(&self, net: &RiemannianNetwork, vertices: &[usize]) -> Result<(f64, Vec<Array2<f64>>)> {
        if vertices.is_empty() {
            return Ok((0.0, zeros_like(net)));
        }
        match self.loss.variant {
            Variant::Conformal => self.conformality_gradients(net, vertices),
            _ => Ok(self.proximity_gradients(net, vertices)),
        }
    }

    fn conformality_gradients(&self, net: &RiemannianNetwork, vertices: &[usize]) -> Result<(f64, Vec<Array2<f64>>)> {
        let parts: Vec<Result<(f64, Vec<Array2<f64>>)>> = vertices
            .par_chunks(PRESERVATION_CHUNK)
            .map(|chunk| {
                let xs = self.dataset.embeddings.select(Axis(1), chunk);
                let seeds = source_seeds(net.source(), xs.view());
                let trace = BatchTrace::record(net, xs.view(), &seeds);
                let mut d_out = Array2::zeros(trace.outputs.dim());
                let mut d_jac = Vec::with_capacity(chunk.len());
                let mut value = 0.0;
                for j in 0..chunk.len() {
                    let loss = PullbackLoss {
                        target: net.target().clone(),
                        source_metric: net.source().metric_tensor(xs.column(j))?,
                        conformality: self.loss.conformality,
                    };
                    let (term, _) = loss.evaluate_counted(trace.outputs.column(j), trace.jacobians[j].view())?;
                    value += term.value;
                    d_out.column_mut(j).assign(&term.d_output);
                    d_jac.push(term.d_jacobian);
                }
                Ok((value, trace.backward(&d_out, &d_jac)))
            })
            .collect();
        let mut total = 0.0;
        let mut grads = zeros_like(net);
        for part in parts {
            let (v, g) = part?;
            total += v;
            for (a, b) in grads.iter_mut().zip(&g) {
                *a += b;
            }
        }
        Ok((total, grads))
    }

    fn proximity_gradients(&self, net: &RiemannianNetwork, vertices: &[usize]) -> (f64, Vec<Array2<f64>>) {
        let xs = self.dataset.embeddings.select(Axis(1), vertices);
        let mut t = Tape::new();
        let params: Vec<usize> = net.param_values().into_iter().map(|p| t.leaf(p)).collect();
        let x = t.constant(xs.clone());
        let y = net.eval(&mut t, &params, &x);
        let diff = t.value_ref(y) - &xs;
        let value = diff.iter().map(|d| d * d).sum();
        (value, t.backward(&[(y, diff * 2.0)], &params))
    }

    /// Objective value without gradients, matching [`Trainer::step`] with
    /// GradNorm disabled.
    pub fn objective(
        &self,
        net: &RiemannianNetwork,
        oriented: &[(usize, usize)],
        negatives: &[Vec<usize>],
        vertices: &[usize],
    ) -> Result<f64> {
        let (f, _) = self.fidelity_gradients(net, oriented, negatives);
        let (p, _) = self.preservation_gradients(net, vertices)?;
        Ok(f + self.loss.lambda * p)
    }

    /// Epoch loop with validation-based early stopping; keeps the best
    /// network and returns one metrics row per split and epoch.
    pub fn fit(&self, net: RiemannianNetwork) -> Result<FitResult> {
        self.check_network(&net)?;
        let mut state = TrainState::new(net, &self.cfg);
        let mut order_rng = ChaCha8Rng::seed_from_u64(self.cfg.seed);
        let mut rows = Vec::new();
        let record = |rows: &mut Vec<MetricRow>, net: &RiemannianNetwork, epoch: usize| -> MapReport {
            let out = self.outputs(net);
            let dist = self.rank_distance(net);
            let mut val = None;
            for split in [Split::Train, Split::Val] {
                let r = mean_average_precision(out.view(), &dist, self.splits, &self.dataset.edges, split);
                rows.push(MetricRow::new(split, epoch, r));
                if split == Split::Val {
                    val = Some(r);
                }
            }
            val.expect("val evaluated")
        };
        let mut best_val = record(&mut rows, &state.net, 0);
        let mut best = state.net.clone();
        let mut best_epoch = 0;
        let mut since_best = 0;
        let mut edges = self.splits.train_edges.clone();
        for epoch in 1..=self.cfg.epochs {
            edges.shuffle(&mut order_rng);
            let mut last = None;
            for batch in edges.chunks(self.cfg.batch_size) {
                last = Some(self.step(&mut state, batch)?);
            }
            let val = record(&mut rows, &state.net, epoch);
            if let Some(m) = last {
                debug!(
                    "epoch {epoch}: fidelity {:.4} preservation {:.4} weights ({:.3}, {:.3}) val mAP {:.4}",
                    m.fidelity, m.preservation, m.weights.0, m.weights.1, val.map
                );
            }
            // without validation queries the latest network is kept
            if val.map > best_val.map || val.queries == 0 {
                best_val = val;
                best = state.net.clone();
                best_epoch = epoch;
                since_best = 0;
            } else {
                since_best += 1;
                if since_best >= self.cfg.patience {
                    info!("early stop at epoch {epoch}; best epoch {best_epoch}");
                    break;
                }
            }
        }
        let test = self.evaluate(&best, Split::Test);
        rows.push(MetricRow::new(Split::Test, best_epoch, test));
        Ok(FitResult {
            best,
            best_epoch,
            best_val,
            test,
            rows,
            steps: state.step,
            skipped_updates: state.skipped_updates,
        })
    }
}

fn zeros_like(net: &RiemannianNetwork) -> Vec<Array2<f64>> {
    net.param_values().iter().map(|p| Array2::zeros(p.dim())).collect()
}

fn frobenius(a: &Array2<f64>) -> f64 {
    a.iter().map(|v| v * v).sum::<f64>().sqrt()
}

/// mAP of untransformed source embeddings under cosine distance.
pub fn source_baseline(dataset: &GraphDataset, splits: &Splits, split: Split) -> MapReport {
    mean_average_precision(dataset.embeddings.view(), &RankDistance::Cosine, splits, &dataset.edges, split)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diff::finite_diff_gradients;
    use crate::layers::{init_network, Architecture};
    use crate::losses::Conformality;
    use crate::manifolds::std_normal;

    fn toy(n: usize, seed: u64) -> (GraphDataset, Splits) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let names = (0..n).map(|i| format!("n{i}")).collect();
        let edges: Vec<(usize, usize)> = (1..n).map(|i| ((i - 1) / 2, i)).collect();
        let emb = Array2::from_shape_fn((3, n), |_| std_normal(&mut rng));
        let ds = GraphDataset::new(names, edges.clone(), emb).unwrap();
        let labels = vec![Split::Train; n];
        (ds, Splits::from_labels(labels, &edges))
    }

    fn net_for(target: &str, seed: u64) -> RiemannianNetwork {
        let arch = Architecture::standard(Manifold::Euclidean(3), 6, 1, target.parse().unwrap());
        init_network(&arch, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn step_is_deterministic_and_lr_zero_is_inert() {
        let (ds, sp) = toy(4, 1);
        let mut loss = LossConfig::new(Variant::Conformal);
        loss.neighbor_count = 2;
        let cfg = TrainConfig::default();
        let tr = Trainer::new(&ds, &sp, loss.clone(), cfg.clone()).unwrap();
        let run = || {
            let mut st = TrainState::new(net_for("S2xH2", 3), &cfg);
            let m = tr.step(&mut st, &sp.train_edges).unwrap();
            (format!("{m:?}"), st.net)
        };
        let (a, na) = run();
        let (b, nb) = run();
        assert_eq!(a, b);
        assert_eq!(na, nb);

        let frozen = TrainConfig {
            euclidean_lr: 0.0,
            riemannian_lr: 0.0,
            ..cfg
        };
        let tr = Trainer::new(&ds, &sp, loss, frozen.clone()).unwrap();
        let net = net_for("S2xH2", 3);
        let mut st = TrainState::new(net.clone(), &frozen);
        tr.step(&mut st, &sp.train_edges).unwrap();
        assert_eq!(st.net, net);
    }

    /// The gradient of the summed objective, checked against central
    /// differences over every parameter.
    #[test]
    fn step_gradients_match_finite_differences() {
        let (ds, sp) = toy(6, 2);
        for (target, variant) in [("S2xH2", Variant::Conformal), ("E3", Variant::Explicit)] {
            let mut loss = LossConfig::new(variant);
            loss.neighbor_count = 3;
            loss.lambda = 0.7;
            loss.margin = 5.0;
            loss.conformality = Conformality::new(0.3).unwrap();
            let tr = Trainer::new(&ds, &sp, loss, TrainConfig::default()).unwrap();
            let net = net_for(target, 4);
            let oriented = vec![(0, 1), (2, 0), (4, 1)];
            let negatives = vec![vec![2, 3, 5], vec![4, 5], vec![3]];
            let vertices = vec![0, 1, 2, 4];
            let (_, gf) = tr.fidelity_gradients(&net, &oriented, &negatives);
            let (_, gp) = tr.preservation_gradients(&net, &vertices).unwrap();
            let analytic: Vec<Array2<f64>> = gf.iter().zip(&gp).map(|(f, p)| f + &(p * 0.7)).collect();
            let numeric = finite_diff_gradients(&net.param_values(), 1e-6, |params| {
                let mut n = net.clone();
                n.set_params(params).unwrap();
                tr.objective(&n, &oriented, &negatives, &vertices).unwrap()
            });
            for (a, n) in analytic.iter().zip(&numeric) {
                let err = crate::diff::max_relative_error(a.view(), n.view());
                assert!(err < 1e-4, "{target}: {err}");
            }
        }
    }

    #[test]
    fn loss_decreases_on_a_small_tree() {
        let (ds, sp) = toy(7, 5);
        for seed in 0..3 {
            let mut loss = LossConfig::new(Variant::Conformal);
            loss.neighbor_count = 4;
            let cfg = TrainConfig {
                euclidean_lr: 1e-2,
                riemannian_lr: 1e-2,
                seed,
                ..Default::default()
            };
            let tr = Trainer::new(&ds, &sp, loss, cfg.clone()).unwrap();
            let mut st = TrainState::new(net_for("H3", seed), &cfg);
            let unweighted = |m: StepMetrics| m.fidelity + tr.loss.lambda * m.preservation;
            let first = unweighted(tr.step(&mut st, &sp.train_edges).unwrap());
            let mut last = first;
            for _ in 0..199 {
                last = unweighted(tr.step(&mut st, &sp.train_edges).unwrap());
            }
            assert!(last < first, "seed {seed}: {last} vs {first}");
        }
    }
}
