//! Small two-dimensional graphs for comparing retrofitting variants, target
//! manifolds and regularizers.

use std::collections::HashSet;
use std::fmt;
use std::str::FromStr;

use ndarray::{Array2, ArrayView2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::{run_standard_retrofit, StandardConfig};
use crate::data::{Adjacency, GraphDataset, Split, Splits};
use crate::error::{Error, Result};
use crate::layers::{init_network, Architecture, RiemannianNetwork};
use crate::losses::{hinge, Conformality, LossConfig, Variant};
use crate::manifolds::Manifold;
use crate::train::{TrainConfig, Trainer};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FixtureKind {
    Crossed,
    Cycle,
    Tree,
}

impl fmt::Display for FixtureKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            FixtureKind::Crossed => "crossed",
            FixtureKind::Cycle => "cycle",
            FixtureKind::Tree => "tree",
        })
    }
}

impl FromStr for FixtureKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "crossed" => Ok(FixtureKind::Crossed),
            "cycle" => Ok(FixtureKind::Cycle),
            "tree" => Ok(FixtureKind::Tree),
            other => Err(Error::Config(format!("unknown fixture `{other}`"))),
        }
    }
}

/// Named points in the plane, a graph over some of them, and which points the
/// graph observes.
#[derive(Debug, Clone, PartialEq)]
pub struct Fixture {
    pub kind: FixtureKind,
    pub names: Vec<String>,
    pub points: Array2<f64>,
    pub edges: Vec<(usize, usize)>,
    pub observed: Vec<bool>,
}

impl Fixture {
    fn from_table(kind: FixtureKind, table: &[(&str, f64, f64, bool)], edges: &[(&str, &str)]) -> Self {
        let names: Vec<String> = table.iter().map(|t| t.0.to_string()).collect();
        let points = Array2::from_shape_fn((2, table.len()), |(r, j)| if r == 0 { table[j].1 } else { table[j].2 });
        let id = |n: &str| names.iter().position(|x| x == n).expect("fixture node");
        let edges = edges
            .iter()
            .map(|(a, b)| {
                let (a, b) = (id(a), id(b));
                (a.min(b), a.max(b))
            })
            .collect();
        Fixture {
            kind,
            observed: table.iter().map(|t| t.3).collect(),
            names,
            points,
            edges,
        }
    }

    pub fn new(kind: FixtureKind) -> Self {
        match kind {
            FixtureKind::Crossed => crossed(),
            FixtureKind::Cycle => cycle(),
            FixtureKind::Tree => tree(),
        }
    }

    pub fn role(&self, i: usize) -> &'static str {
        if self.observed[i] {
            "observed"
        } else {
            "unobserved"
        }
    }

    pub fn observed_ids(&self) -> Vec<usize> {
        (0..self.names.len()).filter(|&i| self.observed[i]).collect()
    }

    /// Observed points train; the rest are held out with no edges.
    pub fn dataset(&self) -> Result<(GraphDataset, Splits)> {
        let ds = GraphDataset::new(self.names.clone(), self.edges.clone(), self.points.clone())?;
        let labels = self
            .observed
            .iter()
            .map(|&o| if o { Split::Train } else { Split::Test })
            .collect();
        let splits = Splits::from_labels(labels, &self.edges);
        Ok((ds, splits))
    }
}

/// Two groups: the graph pulls P toward Q and R toward S, while A, B and C
/// are unobserved.
pub fn crossed() -> Fixture {
    Fixture::from_table(
        FixtureKind::Crossed,
        &[
            ("A", -1.0, 0.9, false),
            ("B", 0.0, 1.1, false),
            ("C", 1.0, 0.9, false),
            ("P", -1.0, -0.2, true),
            ("Q", 1.0, 0.2, true),
            ("R", -1.0, 0.3, true),
            ("S", 1.0, -0.3, true),
        ],
        &[("P", "Q"), ("R", "S")],
    )
}

/// A four-cycle over nearly collinear P, Q, R, S with unobserved A to D
/// around them.
pub fn cycle() -> Fixture {
    Fixture::from_table(
        FixtureKind::Cycle,
        &[
            ("A", -1.0, 1.0, false),
            ("B", 1.0, 1.0, false),
            ("C", 1.0, -1.0, false),
            ("D", -1.0, -1.0, false),
            ("P", -1.5, 0.0, true),
            ("Q", -0.5, 0.05, true),
            ("R", 0.5, -0.05, true),
            ("S", 1.5, 0.0, true),
        ],
        &[("P", "Q"), ("Q", "R"), ("R", "S"), ("S", "P")],
    )
}

/// A two-level tree over R, A, B, C, A1, B1 and C2; A2, B2 and C1 are
/// unobserved.
pub fn tree() -> Fixture {
    Fixture::from_table(
        FixtureKind::Tree,
        &[
            ("R", 0.0, 0.0, true),
            ("A", -0.6, 0.3, true),
            ("B", 0.0, -0.6, true),
            ("C", 0.6, 0.3, true),
            ("A1", -0.2, 0.6, true),
            ("A2", -0.9, 0.0, false),
            ("B1", -0.45, -0.45, true),
            ("B2", 0.45, -0.45, false),
            ("C1", 0.9, 0.0, false),
            ("C2", 0.2, 0.6, true),
        ],
        &[("R", "A"), ("R", "B"), ("R", "C"), ("A", "A1"), ("B", "B1"), ("C", "C2")],
    )
}

/// Mean over both orientations of every edge of the summed hinge against all
/// observed non-neighbors.
pub fn mean_hinge_fidelity(
    m: &Manifold,
    points: ArrayView2<f64>,
    edges: &[(usize, usize)],
    candidates: &[usize],
    margin: f64,
) -> f64 {
    if edges.is_empty() {
        return 0.0;
    }
    let adj = Adjacency::new(points.ncols(), edges);
    let mut total = 0.0;
    for &(a, b) in edges {
        for (u, v) in [(a, b), (b, a)] {
            let excl = adj.closed_neighborhood(u);
            let dp = m.distance(points.column(u), points.column(v));
            total += candidates
                .iter()
                .filter(|w| !excl.contains(w))
                .map(|&w| hinge(margin, dp, m.distance(points.column(u), points.column(w))))
                .sum::<f64>();
        }
    }
    total / (2 * edges.len()) as f64
}

/// Training settings for a fixture run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FixtureConfig {
    pub width: usize,
    pub depth: usize,
    pub margin: f64,
    pub lambda: f64,
    pub conformality: Conformality,
    pub steps: usize,
    pub lr: f64,
    pub seed: u64,
}

impl Default for FixtureConfig {
    fn default() -> Self {
        FixtureConfig {
            width: 32,
            depth: 2,
            margin: 0.5,
            lambda: 1.0,
            conformality: Conformality::UNBOUNDED,
            steps: 1500,
            lr: 1e-2,
            seed: 0,
        }
    }
}

/// Transformed points plus the network that produced them (absent for
/// standard retrofitting).
#[derive(Debug, Clone)]
pub struct FixtureRun {
    pub target: Manifold,
    pub outputs: Array2<f64>,
    pub net: Option<RiemannianNetwork>,
}

/// Trains `variant` on the fixture graph, one full-batch step per iteration.
pub fn run_fixture(fx: &Fixture, variant: Variant, target: &Manifold, cfg: &FixtureConfig) -> Result<FixtureRun> {
    let (ds, splits) = fx.dataset()?;
    if variant == Variant::Standard {
        let std_cfg = StandardConfig {
            lambda: cfg.lambda,
            lr: cfg.lr,
            iterations: cfg.steps,
        };
        let outputs = run_standard_retrofit(fx.points.view(), &splits.train_edges, std_cfg)?;
        return Ok(FixtureRun {
            target: Manifold::Euclidean(2),
            outputs,
            net: None,
        });
    }
    let mut loss = LossConfig::new(variant);
    loss.margin = cfg.margin;
    loss.lambda = cfg.lambda;
    loss.conformality = cfg.conformality;
    loss.neighbor_count = fx.names.len();
    let train = TrainConfig {
        euclidean_lr: cfg.lr,
        riemannian_lr: cfg.lr,
        batch_size: fx.edges.len().max(1),
        epochs: cfg.steps,
        seed: cfg.seed,
        ..Default::default()
    };
    let arch = Architecture::standard(Manifold::Euclidean(2), cfg.width, cfg.depth, target.clone());
    let net = init_network(&arch, &mut ChaCha8Rng::seed_from_u64(cfg.seed))?;
    let trainer = Trainer::new(&ds, &splits, loss, train)?;
    let mut state = crate::train::TrainState::new(net, &trainer.cfg);
    for _ in 0..cfg.steps {
        trainer.step(&mut state, &splits.train_edges)?;
    }
    Ok(FixtureRun {
        target: target.clone(),
        outputs: trainer.outputs(&state.net),
        net: Some(state.net),
    })
}

/// Hinge fidelity of a finished run on the fixture's graph.
pub fn run_hinge(fx: &Fixture, run: &FixtureRun, margin: f64) -> f64 {
    mean_hinge_fidelity(&run.target, run.outputs.view(), &fx.edges, &fx.observed_ids(), margin)
}

/// Spread (standard deviation) of log area ratios over a `cells × cells`
/// grid covering the source points, for maps into the plane. Uniform scaling
/// scores zero.
pub fn area_distortion(net: &RiemannianNetwork, points: ArrayView2<f64>, cells: usize) -> Result<f64> {
    if net.target().ambient_dim() != 2 || points.nrows() != 2 {
        return Err(Error::Config("area distortion needs planar source and target".into()));
    }
    let lo = |r: usize| points.row(r).iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = |r: usize| points.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let pad = |a: f64, b: f64| 0.1 * (b - a).max(1e-9);
    let (x0, x1) = (lo(0) - pad(lo(0), hi(0)), hi(0) + pad(lo(0), hi(0)));
    let (y0, y1) = (lo(1) - pad(lo(1), hi(1)), hi(1) + pad(lo(1), hi(1)));
    let g = cells + 1;
    let grid = Array2::from_shape_fn((2, g * g), |(r, k)| {
        let (i, j) = (k % g, k / g);
        if r == 0 {
            x0 + (x1 - x0) * i as f64 / cells as f64
        } else {
            y0 + (y1 - y0) * j as f64 / cells as f64
        }
    });
    let img = net.forward_batch(grid.view());
    let cell_area = |p: &Array2<f64>, i: usize, j: usize| {
        let idx = [j * g + i, j * g + i + 1, (j + 1) * g + i + 1, (j + 1) * g + i];
        let mut a = 0.0;
        for k in 0..4 {
            let (p0, p1) = (idx[k], idx[(k + 1) % 4]);
            a += p[[0, p0]] * p[[1, p1]] - p[[0, p1]] * p[[1, p0]];
        }
        0.5 * a
    };
    let mut logs = Vec::with_capacity(cells * cells);
    for j in 0..cells {
        for i in 0..cells {
            let src = cell_area(&grid, i, j);
            let dst = cell_area(&img, i, j).abs().max(1e-300);
            logs.push((dst / src).ln());
        }
    }
    let mean = logs.iter().sum::<f64>() / logs.len() as f64;
    let var = logs.iter().map(|l| (l - mean).powi(2)).sum::<f64>() / logs.len() as f64;
    Ok(var.sqrt())
}

/// Ids reachable through the fixture graph from any observed node.
pub fn graph_nodes(fx: &Fixture) -> HashSet<usize> {
    fx.edges.iter().flat_map(|&(a, b)| [a, b]).collect()
}
