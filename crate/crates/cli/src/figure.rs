//! Plot-ready CSV for the synthetic two-dimensional fixtures.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use conformal_retrofit::fixtures::{area_distortion, run_fixture, run_hinge, Fixture, FixtureConfig, FixtureKind};
use conformal_retrofit::losses::Variant;
use conformal_retrofit::Manifold;
use ndarray::{Array2, ArrayView2};
use serde::Serialize;

use crate::error::{io_err, CliError, CliResult};

pub const GRID_LINES: usize = 21;
pub const DISTORTION_CELLS: usize = 16;

#[derive(Debug, Clone, Serialize)]
pub struct FigureSummary {
    pub which: FixtureKind,
    pub variant: Variant,
    pub target: Manifold,
    pub config: FixtureConfig,
    pub hinge: f64,
    /// Spread of log cell-area ratios, for network runs into a planar target.
    pub area_distortion: Option<f64>,
    /// Conformal over proximity-regularized area distortion on the cycle
    /// fixture, both into E2.
    pub area_distortion_ratio: Option<f64>,
}

fn coord_names(prefix: &str, n: usize) -> Vec<String> {
    (0..n)
        .map(|i| match (n <= 3, i) {
            (true, 0) => format!("{prefix}_x"),
            (true, 1) => format!("{prefix}_y"),
            (true, 2) => format!("{prefix}_z"),
            _ => format!("{prefix}_{i}"),
        })
        .collect()
}

fn push_row(s: &mut String, head: &[String], cols: &[ArrayView2<f64>], j: usize) {
    s.push_str(&head.join(","));
    for c in cols {
        for v in c.column(j) {
            write!(s, ",{v}").unwrap();
        }
    }
    s.push('\n');
}

fn grid_over(points: ArrayView2<f64>) -> Array2<f64> {
    let range = |r: usize| {
        let lo = points.row(r).iter().cloned().fold(f64::INFINITY, f64::min);
        let hi = points.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let pad = 0.1 * (hi - lo).max(1e-9);
        (lo - pad, hi + pad)
    };
    let ((x0, x1), (y0, y1)) = (range(0), range(1));
    let g = GRID_LINES;
    Array2::from_shape_fn((2, g * g), |(r, k)| {
        let t = if r == 0 { (k % g) as f64 } else { (k / g) as f64 } / (g - 1) as f64;
        if r == 0 {
            x0 + (x1 - x0) * t
        } else {
            y0 + (y1 - y0) * t
        }
    })
}

fn write(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text).map_err(|e| io_err(path, e))
}

/// Trains `variant` on the fixture and writes `points.csv`, `edges.csv`,
/// `grid.csv` (network variants only) and `summary.json` into `out`.
pub fn figure_data(which: FixtureKind, variant: Variant, target: Manifold, cfg: FixtureConfig, out: &PathBuf) -> CliResult<FigureSummary> {
    if target.ambient_dim() < 2 {
        return Err(CliError::Usage(format!("target {target} is not two-dimensional")));
    }
    if variant != Variant::Conformal && target != Manifold::Euclidean(2) {
        return Err(CliError::Usage(format!("{variant} retrofitting needs target E2")));
    }
    fs::create_dir_all(out).map_err(|e| io_err(out, e))?;
    let fx = Fixture::new(which);
    let run = run_fixture(&fx, variant, &target, &cfg)?;
    if run.outputs.iter().any(|v| !v.is_finite()) {
        return Err(CliError::Numerical("fixture outputs contain non-finite values".into()));
    }

    let tgt_names = coord_names("tgt", run.outputs.nrows());
    let mut points = format!("id,role,src_x,src_y,{}\n", tgt_names.join(","));
    for j in 0..fx.names.len() {
        let head = [fx.names[j].clone(), fx.role(j).to_string()];
        push_row(&mut points, &head, &[fx.points.view(), run.outputs.view()], j);
    }
    write(&out.join("points.csv"), &points)?;
    let mut edges = String::from("source,target\n");
    for &(a, b) in &fx.edges {
        writeln!(edges, "{},{}", fx.names[a], fx.names[b]).unwrap();
    }
    write(&out.join("edges.csv"), &edges)?;

    let mut distortion = None;
    if let Some(net) = &run.net {
        let grid = grid_over(fx.points.view());
        let img = net.forward_batch(grid.view());
        let mut csv = format!("gx,gy,src_x,src_y,{}\n", tgt_names.join(","));
        for k in 0..grid.ncols() {
            let head = [(k % GRID_LINES).to_string(), (k / GRID_LINES).to_string()];
            push_row(&mut csv, &head, &[grid.view(), img.view()], k);
        }
        write(&out.join("grid.csv"), &csv)?;
        if target.ambient_dim() == 2 {
            distortion = Some(area_distortion(net, fx.points.view(), DISTORTION_CELLS)?);
        }
    }

    let ratio = if which == FixtureKind::Cycle {
        Some(cycle_distortion_ratio(&cfg)?)
    } else {
        None
    };
    let summary = FigureSummary {
        which,
        variant,
        target,
        hinge: run_hinge(&fx, &run, cfg.margin),
        config: cfg,
        area_distortion: distortion,
        area_distortion_ratio: ratio,
    };
    let json = serde_json::to_string_pretty(&summary).expect("summary serializes") + "\n";
    write(&out.join("summary.json"), &json)?;
    Ok(summary)
}

/// Area distortion of the conformal run divided by that of the
/// proximity-regularized run on the cycle fixture.
pub fn cycle_distortion_ratio(cfg: &FixtureConfig) -> CliResult<f64> {
    let fx = Fixture::new(FixtureKind::Cycle);
    let e2 = Manifold::Euclidean(2);
    let mut d = [0.0; 2];
    for (slot, variant) in [Variant::Conformal, Variant::Explicit].into_iter().enumerate() {
        let run = run_fixture(&fx, variant, &e2, cfg)?;
        let net = run.net.expect("network variant");
        d[slot] = area_distortion(&net, fx.points.view(), DISTORTION_CELLS)?;
    }
    Ok(d[0] / d[1])
}
