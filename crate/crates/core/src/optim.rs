//! Adam for Euclidean parameters, Riemannian SGD for manifold-valued ones, and
//! inverse gradient-norm loss balancing.

use ndarray::{s, Array1, Array2, ArrayView1};
use serde::{Deserialize, Serialize};

use crate::manifolds::{FactorKind, Manifold};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        AdamConfig {
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
        }
    }
}

/// First and second moments for one parameter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    m: Array2<f64>,
    v: Array2<f64>,
    t: u64,
}

impl AdamState {
    pub fn new(shape: (usize, usize)) -> Self {
        AdamState {
            m: Array2::zeros(shape),
            v: Array2::zeros(shape),
            t: 0,
        }
    }

    pub fn steps(&self) -> u64 {
        self.t
    }
}

/// Bias-corrected Adam update in place.
pub fn adam_step(state: &mut AdamState, param: &mut Array2<f64>, grad: &Array2<f64>, lr: f64, cfg: AdamConfig) {
    state.t += 1;
    let t = state.t as i32;
    let c1 = 1.0 - cfg.beta1.powi(t);
    let c2 = 1.0 - cfg.beta2.powi(t);
    ndarray::Zip::from(param)
        .and(&mut state.m)
        .and(&mut state.v)
        .and(grad)
        .for_each(|p, m, v, &g| {
            *m = cfg.beta1 * *m + (1.0 - cfg.beta1) * g;
            *v = cfg.beta2 * *v + (1.0 - cfg.beta2) * g * g;
            let mh = *m / c1;
            let vh = *v / c2;
            *p -= lr * mh / (vh.sqrt() + cfg.eps);
        });
}

/// Outcome of a Riemannian step.
#[derive(Debug, Clone, PartialEq)]
pub struct RsgdOutcome {
    pub point: Array1<f64>,
    pub skipped: bool,
}

/// Converts a Euclidean gradient into the Riemannian gradient at `p`.
pub fn riemannian_gradient(m: &Manifold, p: ArrayView1<f64>, grad: ArrayView1<f64>) -> Array1<f64> {
    let mut g = m.project_to_tangent(p, grad);
    for slot in m.slots() {
        if slot.kind == FactorKind::PoincareBall {
            let r = slot.ambient.clone();
            let pb = p.slice(s![r.clone()]);
            let f = (1.0 - pb.dot(&pb)) / 2.0;
            let mut seg = g.slice_mut(s![r]);
            seg *= f * f;
        }
    }
    g
}

/// `p ← exp_p(−lr · grad_R)`. Non-finite gradients leave `p` unchanged and
/// report `skipped`.
pub fn rsgd_step(m: &Manifold, p: ArrayView1<f64>, grad: ArrayView1<f64>, lr: f64) -> RsgdOutcome {
    if grad.iter().any(|g| !g.is_finite()) {
        return RsgdOutcome {
            point: p.to_owned(),
            skipped: true,
        };
    }
    let rg = riemannian_gradient(m, p, grad);
    if lr == 0.0 || rg.iter().all(|&g| g == 0.0) {
        return RsgdOutcome {
            point: p.to_owned(),
            skipped: false,
        };
    }
    let point = m.exp(p, (rg * -lr).view());
    debug_assert!(m.check_point(point.view()).is_ok());
    RsgdOutcome {
        point,
        skipped: false,
    }
}

/// Exponentially smoothed per-objective gradient norms.
#[derive(Debug, Clone, PartialEq)]
pub struct GradNormState {
    pub beta: f64,
    ema: Option<Vec<f64>>,
}

impl GradNormState {
    pub fn new(beta: f64) -> Self {
        GradNormState { beta, ema: None }
    }

    pub fn smoothed(&self) -> Option<&[f64]> {
        self.ema.as_deref()
    }
}

/// Weights inversely proportional to smoothed gradient norms, scaled by their
/// geometric mean and renormalized to sum to the number of objectives. The
/// first call seeds the averages with the raw norms.
pub fn gradnorm_weights(norms: &[f64], state: &mut GradNormState) -> Vec<f64> {
    let floored: Vec<f64> = norms
        .iter()
        .map(|&n| if n.is_finite() { n.max(1e-12) } else { 1e-12 })
        .collect();
    let ema = match state.ema.take() {
        None => floored,
        Some(prev) => prev
            .iter()
            .zip(&floored)
            .map(|(e, n)| state.beta * e + (1.0 - state.beta) * n)
            .collect(),
    };
    let k = ema.len() as f64;
    let log_mean = ema.iter().map(|e| e.ln()).sum::<f64>() / k;
    let geo = log_mean.exp();
    let raw: Vec<f64> = ema.iter().map(|e| geo / e).collect();
    let total: f64 = raw.iter().sum();
    state.ema = Some(ema);
    raw.iter().map(|w| w * k / total).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;
    use proptest::prelude::*;

    #[test]
    fn rsgd_examples() {
        let s = Manifold::Sphere(1);
        let r = rsgd_step(&s, array![1.0, 0.0].view(), array![0.0, 0.0].view(), 0.1);
        assert_eq!(r.point, array![1.0, 0.0]);
        let r = rsgd_step(&s, array![1.0, 0.0].view(), array![1.0, 0.0].view(), 0.1);
        assert_eq!(r.point, array![1.0, 0.0]);
        let e = Manifold::Euclidean(2);
        let r = rsgd_step(&e, array![0.0, 0.0].view(), array![1.0, 0.0].view(), 0.1);
        assert_eq!(r.point, array![-0.1, 0.0]);
        let r = rsgd_step(&e, array![0.0, 0.0].view(), array![f64::NAN, 0.0].view(), 0.1);
        assert!(r.skipped);
        assert_eq!(r.point, array![0.0, 0.0]);
    }

    #[test]
    fn rsgd_keeps_ball_points_inside() {
        let h = Manifold::PoincareBall(2);
        let mut p = array![0.9, 0.0];
        for _ in 0..50 {
            p = rsgd_step(&h, p.view(), array![-1e6, 0.0].view(), 1.0).point;
            assert!(h.check_point(p.view()).is_ok());
        }
        // the ball step is the gradient scaled by the inverse metric
        let g = riemannian_gradient(&h, array![0.5, 0.0].view(), array![1.0, 0.0].view());
        assert!((g[0] - 0.375f64.powi(2)).abs() < 1e-15);
    }

    #[test]
    fn adam_examples() {
        let cfg = AdamConfig::default();
        let mut st = AdamState::new((1, 1));
        let mut p = array![[1.0]];
        adam_step(&mut st, &mut p, &array![[0.0]], 0.1, cfg);
        assert_eq!(p, array![[1.0]]);
        let mut st = AdamState::new((1, 1));
        let g = 0.37;
        adam_step(&mut st, &mut p, &array![[g]], 0.1, cfg);
        assert!((p[[0, 0]] - (1.0 - 0.1 * g / (g + 1e-8))).abs() < 1e-12);
        let before = p[[0, 0]];
        adam_step(&mut st, &mut p, &array![[g]], 0.1, cfg);
        assert!(p[[0, 0]] < before);
    }

    #[test]
    fn gradnorm_examples() {
        let mut st = GradNormState::new(0.9);
        let w = gradnorm_weights(&[1.0, 4.0], &mut st);
        assert!((w[0] - 1.6).abs() < 1e-12 && (w[1] - 0.4).abs() < 1e-12);
        let mut st = GradNormState::new(0.9);
        let w = gradnorm_weights(&[3.0, 3.0, 3.0], &mut st);
        assert!(w.iter().all(|x| (x - 1.0).abs() < 1e-12));
    }

    proptest! {
        #[test]
        fn gradnorm_is_scale_invariant_and_equivariant(
            a in 1e-3f64..1e3, b in 1e-3f64..1e3, c in 1e-3f64..1e3, k in 1e-3f64..1e3,
        ) {
            let w = gradnorm_weights(&[a, b, c], &mut GradNormState::new(0.9));
            let ws = gradnorm_weights(&[a * k, b * k, c * k], &mut GradNormState::new(0.9));
            let wp = gradnorm_weights(&[c, a, b], &mut GradNormState::new(0.9));
            for i in 0..3 {
                prop_assert!((w[i] - ws[i]).abs() < 1e-9);
            }
            prop_assert!((wp[0] - w[2]).abs() < 1e-12);
            prop_assert!((wp[1] - w[0]).abs() < 1e-12);
            prop_assert!((wp[2] - w[1]).abs() < 1e-12);
            prop_assert!((w.iter().sum::<f64>() - 3.0).abs() < 1e-9);
        }
    }
}
