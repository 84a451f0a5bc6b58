//! Analytic derivatives checked against central differences.

use std::path::Path;

use conformal_retrofit::diff::{
    batch_value_and_jacobian, finite_diff_jacobian, loss_with_params, max_relative_error, param_gradients, DifferentiableProgram,
};
use conformal_retrofit::layers::{init_network, Architecture};
use conformal_retrofit::losses::{Conformality, PullbackLoss};
use ndarray::{Array1, Array2, Axis};
use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::CliResult;

pub const JACOBIAN_TOL: f64 = 1e-5;
pub const PARAM_TOL: f64 = 1e-4;
pub const DEFAULT_ARCHITECTURE: &str = "E3 -> E6 -> S2xH2";

#[derive(Debug, Clone, Serialize)]
pub struct BlockReport {
    pub name: String,
    pub max_rel_err: f64,
    pub tol: f64,
    pub passed: bool,
}

#[derive(Debug, Clone, Serialize)]
pub struct GradCheckReport {
    pub architecture: String,
    pub blocks: Vec<BlockReport>,
    pub passed: bool,
}

/// Options for [`check_grad`].
#[derive(Debug, Clone)]
pub struct GradCheckOptions {
    pub seed: u64,
    pub points: usize,
    /// Entries sampled per parameter block.
    pub entries: usize,
    pub tanh_fault: f64,
}

fn block(name: String, err: f64, tol: f64) -> BlockReport {
    BlockReport {
        name,
        max_rel_err: err,
        tol,
        passed: err <= tol,
    }
}

/// Compares network Jacobians and parameter gradients of the pullback
/// penalty with finite differences, at random source points.
pub fn check_grad(config: Option<&Path>, opts: &GradCheckOptions) -> CliResult<GradCheckReport> {
    let (arch, conformality): (Architecture, Conformality) = match config {
        Some(p) => {
            let cfg = RunConfig::load(p)?.resolve(Some(opts.seed), None)?;
            (cfg.architecture().clone(), cfg.loss.conformality)
        }
        None => (DEFAULT_ARCHITECTURE.parse()?, Conformality::UNBOUNDED),
    };
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let net = init_network(&arch, &mut rng)?;
    let source = net.source().clone();
    let names = net.param_names();
    let values = net.param_values();
    let mut jac_err: f64 = 0.0;
    let mut param_err = vec![0.0f64; names.len()];
    for _ in 0..opts.points.max(1) {
        let x = source.random_point(&mut rng);
        let n = x.len();
        let (_, jacs) = batch_value_and_jacobian(&net, x.view().insert_axis(Axis(1)), &[Array2::eye(n)], opts.tanh_fault);
        let fd = finite_diff_jacobian(&net, x.view(), 1e-6);
        jac_err = jac_err.max(max_relative_error(jacs[0].view(), fd.view()));

        let loss = PullbackLoss {
            target: net.target().clone(),
            source_metric: source.metric_tensor(x.view())?,
            conformality,
        };
        let (_, analytic) = param_gradients(&net, &loss, x.view());
        let h = 1e-5;
        for (pi, v) in values.iter().enumerate() {
            let k = opts.entries.min(v.len());
            let picks = sample(&mut rng, v.len(), k).into_vec();
            let mut got = Array1::zeros(k);
            let mut want = Array1::zeros(k);
            let mut work = values.clone();
            for (slot, flat) in picks.into_iter().enumerate() {
                let idx = (flat / v.ncols(), flat % v.ncols());
                let orig = work[pi][idx];
                work[pi][idx] = orig + h;
                let up = loss_with_params(&net, &work, &loss, x.view());
                work[pi][idx] = orig - h;
                let down = loss_with_params(&net, &work, &loss, x.view());
                work[pi][idx] = orig;
                want[slot] = (up - down) / (2.0 * h);
                got[slot] = analytic.grads[pi][idx];
            }
            let e = max_relative_error(got.view().insert_axis(Axis(0)), want.view().insert_axis(Axis(0)));
            param_err[pi] = param_err[pi].max(e);
        }
    }
    let mut blocks = vec![block("jacobian".into(), jac_err, JACOBIAN_TOL)];
    blocks.extend(names.into_iter().zip(param_err).map(|(n, e)| block(n, e, PARAM_TOL)));
    let passed = blocks.iter().all(|b| b.passed);
    Ok(GradCheckReport {
        architecture: arch.to_string(),
        blocks,
        passed,
    })
}
