//! Training, evaluation, transformation and split generation.

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use conformal_retrofit::baselines::run_standard_retrofit;
use conformal_retrofit::data::{load_edges, load_embeddings, make_splits, write_embeddings, GraphDataset, Split, SplitRatios, Splits};
use conformal_retrofit::eval::{mean_average_precision, metrics_csv, MapReport, MetricRow, RankDistance};
use conformal_retrofit::layers::init_network;
use conformal_retrofit::losses::{DistanceKind, Variant};
use conformal_retrofit::train::{source_baseline, Trainer};
use log::{info, warn};
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::checkpoint::{Checkpoint, Ranking};
use crate::config::RunConfig;
use crate::error::{io_err, CliError, CliResult};

pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.csv";
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const SUMMARY_FILE: &str = "summary.json";
pub const TABLE_FILE: &str = "embeddings.txt";

/// Dataset and splits named by a resolved run config.
pub struct Loaded {
    pub dataset: GraphDataset,
    pub splits: Splits,
    pub dropped: usize,
}

pub fn load_dataset(cfg: &RunConfig) -> CliResult<Loaded> {
    let edges = load_edges(&cfg.edges)?;
    let keep: HashSet<String> = edges.names.iter().cloned().collect();
    let dim = cfg.embedding_dim.expect("resolved config");
    let table = load_embeddings(&cfg.embeddings, dim, Some(&keep))?;
    let (dataset, dropped) = GraphDataset::assemble(&edges, &table)?;
    let splits = match &cfg.split_file {
        Some(p) => Splits::read(p, &dataset)?,
        None => make_splits(dataset.len(), &dataset.edges, cfg.split_ratios, cfg.split_seed)?,
    };
    let (a, b, c) = splits.node_counts();
    let (ea, eb, ec) = splits.edge_counts();
    info!("{} nodes ({a}/{b}/{c}), edges {ea}/{eb}/{ec}, {dropped} dropped", dataset.len());
    Ok(Loaded { dataset, splits, dropped })
}

#[derive(Debug, Serialize)]
pub struct TrainSummary {
    pub variant: Variant,
    pub seed: u64,
    pub best_epoch: usize,
    pub val_map: f64,
    pub test_map: f64,
    pub source_test_map: f64,
    pub steps: usize,
    pub skipped_updates: usize,
    pub dropped_nodes: usize,
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

fn ranking_for(variant: Variant, kind: DistanceKind) -> Ranking {
    match (variant, kind) {
        (Variant::Explicit, DistanceKind::Cosine) => Ranking::Cosine,
        _ => Ranking::Geodesic,
    }
}

fn check_finite(what: &str, a: &Array2<f64>) -> CliResult<()> {
    if a.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(CliError::Numerical(format!("{what} contain non-finite values")))
    }
}

/// Trains the configured variant and writes the resolved config, metrics,
/// the best checkpoint (or retrofitted table) and a summary into `out_dir`.
pub fn train(config: &Path, seed: Option<u64>, out: Option<PathBuf>) -> CliResult<TrainSummary> {
    let cfg = RunConfig::load(config)?.resolve(seed, out)?;
    fs::create_dir_all(&cfg.out_dir).map_err(|e| io_err(&cfg.out_dir, e))?;
    write_text(&cfg.out_dir.join(CONFIG_FILE), &cfg.to_json())?;
    let Loaded { dataset, splits, dropped } = load_dataset(&cfg)?;
    let source_test_map = source_baseline(&dataset, &splits, Split::Test).map;

    let summary = if cfg.loss.variant == Variant::Standard {
        let table = run_standard_retrofit(dataset.embeddings.view(), &splits.train_edges, cfg.standard)?;
        check_finite("retrofitted embeddings", &table)?;
        let eval = |pts: &Array2<f64>, split| mean_average_precision(pts.view(), &RankDistance::Cosine, &splits, &dataset.edges, split);
        let last = cfg.standard.iterations;
        let mut rows = Vec::new();
        for split in [Split::Train, Split::Val] {
            rows.push(MetricRow::new(split, 0, eval(&dataset.embeddings, split)));
        }
        let mut val = None;
        let mut test = None;
        for split in [Split::Train, Split::Val, Split::Test] {
            let r = eval(&table, split);
            rows.push(MetricRow::new(split, last, r));
            match split {
                Split::Val => val = Some(r),
                Split::Test => test = Some(r),
                Split::Train => {}
            }
        }
        write_text(&cfg.out_dir.join(METRICS_FILE), &metrics_csv(&rows))?;
        write_embeddings(&cfg.out_dir.join(TABLE_FILE), Some("manifold E"), &dataset.names, &table)?;
        TrainSummary {
            variant: Variant::Standard,
            seed: cfg.seed,
            best_epoch: last,
            val_map: val.expect("evaluated").map,
            test_map: test.expect("evaluated").map,
            source_test_map,
            steps: last,
            skipped_updates: 0,
            dropped_nodes: dropped,
        }
    } else {
        let net = init_network(cfg.architecture(), &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
        let trainer = Trainer::new(&dataset, &splits, cfg.loss.clone(), cfg.train.clone())?;
        let fit = trainer.fit(net)?;
        write_text(&cfg.out_dir.join(METRICS_FILE), &metrics_csv(&fit.rows))?;
        check_finite("network outputs", &trainer.outputs(&fit.best))?;
        let ranking = ranking_for(cfg.loss.variant, cfg.loss.distance_kind);
        let ck = Checkpoint::from_network(&fit.best, cfg.loss.variant, ranking, cfg.seed, fit.best_epoch, fit.best_val.map);
        ck.save(&cfg.out_dir.join(CHECKPOINT_FILE))?;
        if fit.skipped_updates > 0 {
            warn!("{} updates skipped for non-finite gradients", fit.skipped_updates);
        }
        TrainSummary {
            variant: cfg.loss.variant,
            seed: cfg.seed,
            best_epoch: fit.best_epoch,
            val_map: fit.best_val.map,
            test_map: fit.test.map,
            source_test_map,
            steps: fit.steps,
            skipped_updates: fit.skipped_updates,
            dropped_nodes: dropped,
        }
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write_text(&cfg.out_dir.join(SUMMARY_FILE), &json)?;
    Ok(summary)
}

#[derive(Debug, Serialize)]
pub struct EvalReport {
    pub split: Split,
    pub map: f64,
    pub queries: usize,
    pub skipped: usize,
}

impl EvalReport {
    fn new(split: Split, r: MapReport) -> Self {
        EvalReport {
            split,
            map: r.map,
            queries: r.queries,
            skipped: r.skipped,
        }
    }
}

/// mAP of a checkpoint, or of the untransformed embeddings under cosine
/// distance when `checkpoint` is `None`.
pub fn evaluate(config: &Path, checkpoint: Option<&Path>, split: Split) -> CliResult<EvalReport> {
    let cfg = RunConfig::load(config)?.resolve(None, None)?;
    let Loaded { dataset, splits, .. } = load_dataset(&cfg)?;
    let report = match checkpoint {
        None => source_baseline(&dataset, &splits, split),
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let net = ck.network()?;
            if net.source().ambient_dim() != dataset.embeddings.nrows() {
                return Err(CliError::Data(format!(
                    "checkpoint expects {}-dimensional inputs, embeddings have {}",
                    net.source().ambient_dim(),
                    dataset.embeddings.nrows()
                )));
            }
            let out = net.forward_batch(dataset.embeddings.view());
            check_finite("network outputs", &out)?;
            mean_average_precision(out.view(), &ck.rank_distance(), &splits, &dataset.edges, split)
        }
    };
    Ok(EvalReport::new(split, report))
}

#[derive(Debug, Serialize)]
pub struct TransformReport {
    pub rows_in: usize,
    pub rows_out: usize,
    pub dropped: usize,
    pub manifold: String,
}

/// Maps every row of a GloVe-style file through a checkpoint. Rows whose
/// image is not a valid target point are dropped.
pub fn transform(checkpoint: &Path, input: &Path, output: &Path) -> CliResult<TransformReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let net = ck.network()?;
    let table = load_embeddings(input, net.source().ambient_dim(), None)?;
    let mut xs = Array2::zeros((table.dim, table.len()));
    for (j, v) in table.vectors.iter().enumerate() {
        xs.column_mut(j).assign(v);
    }
    let ys = net.forward_batch(xs.view());
    let target = net.target();
    let kept: Vec<usize> = (0..ys.ncols()).filter(|&j| target.check_point(ys.column(j)).is_ok()).collect();
    let dropped = ys.ncols() - kept.len();
    if dropped > 0 {
        warn!("dropped {dropped} rows whose images are not valid points on {target}");
    }
    let tokens: Vec<String> = kept.iter().map(|&j| table.tokens[j].clone()).collect();
    let out = ys.select(ndarray::Axis(1), &kept);
    write_embeddings(output, Some(&format!("manifold {target}")), &tokens, &out)?;
    Ok(TransformReport {
        rows_in: table.len(),
        rows_out: kept.len(),
        dropped,
        manifold: target.to_string(),
    })
}

#[derive(Debug, Serialize)]
pub struct SplitReport {
    pub nodes: (usize, usize, usize),
    pub edges: (usize, usize, usize),
}

/// Parses `train,val,test` fractions.
pub fn parse_ratios(s: &str) -> CliResult<SplitRatios> {
    let parts: Vec<f64> = s
        .split(',')
        .map(|p| p.trim().parse::<f64>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(format!("bad ratios `{s}`: {e}")))?;
    let [train, val, test] = parts[..] else {
        return Err(CliError::Usage(format!("expected three ratios, got `{s}`")));
    };
    let r = SplitRatios { train, val, test };
    r.validate()?;
    Ok(r)
}

/// Writes a `node<TAB>split` file for the nodes of an edge list.
pub fn split(edges: &Path, ratios: SplitRatios, seed: u64, out: &Path) -> CliResult<SplitReport> {
    if !edges.is_file() {
        return Err(CliError::Usage(format!("edges file {} does not exist", edges.display())));
    }
    let el = load_edges(edges)?;
    let s = make_splits(el.names.len(), &el.edges, ratios, seed)?;
    s.write(out, &el.names)?;
    Ok(SplitReport {
        nodes: s.node_counts(),
        edges: s.edge_counts(),
    })
}
