use std::f64::consts::PI;

use crate::error::{NnError, Result};
use crate::mlp::{Gradients, ParamSet};

/// Adam moments plus step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState {
    pub first: Gradients,
    pub second: Gradients,
    pub step: u64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl AdamState {
    pub fn new<P: ParamSet + ?Sized>(params: &P) -> Self {
        Self::with_constants(params, 0.9, 0.999, 1e-8)
    }

    pub fn with_constants<P: ParamSet + ?Sized>(params: &P, beta1: f64, beta2: f64, eps: f64) -> Self {
        AdamState { first: params.zeros_like(), second: params.zeros_like(), step: 0, beta1, beta2, eps }
    }
}

/// One bias-corrected Adam update, in place. Fails without touching anything
/// if a gradient entry is non-finite.
pub fn adam_step<P: ParamSet + ?Sized>(params: &mut P, grads: &Gradients, state: &mut AdamState, lr: f64) -> Result<()> {
    if !(lr > 0.0) || !lr.is_finite() {
        return Err(NnError::Range(format!("learning rate must be positive, got {lr}")));
    }
    if !params.is_congruent(grads) || !params.is_congruent(&state.first) {
        return Err(NnError::shape("adam_step", "gradients congruent with parameters", "different layout"));
    }
    let mut index = 0;
    for l in grads.linears() {
        for s in l.slices() {
            if let Some(bad) = s.iter().position(|g| !g.is_finite()) {
                return Err(NnError::NonFinite { index: index + bad });
            }
            index += s.len();
        }
    }

    state.step += 1;
    let (b1, b2, eps) = (state.beta1, state.beta2, state.eps);
    let c1 = 1.0 - b1.powi(state.step as i32);
    let c2 = 1.0 - b2.powi(state.step as i32);
    let AdamState { first, second, .. } = state;
    for (((p, g), m), v) in params
        .linears_mut()
        .into_iter()
        .zip(grads.linears())
        .zip(first.linears_mut())
        .zip(second.linears_mut())
    {
        for (((ps, gs), ms), vs) in p.slices_mut().into_iter().zip(g.slices()).zip(m.slices_mut()).zip(v.slices_mut()) {
            for i in 0..ps.len() {
                let gi = gs[i];
                ms[i] = b1 * ms[i] + (1.0 - b1) * gi;
                vs[i] = b2 * vs[i] + (1.0 - b2) * gi * gi;
                let mhat = ms[i] / c1;
                let vhat = vs[i] / c2;
                ps[i] -= lr * mhat / (vhat.sqrt() + eps);
            }
        }
    }
    Ok(())
}

/// `base_lr * (1 + cos(pi * step / total)) / 2`
pub fn cosine_lr(step: u64, total_steps: u64, base_lr: f64) -> Result<f64> {
    if step > total_steps {
        return Err(NnError::Range(format!("step {step} beyond schedule horizon {total_steps}")));
    }
    if total_steps == 0 {
        return Ok(base_lr);
    }
    Ok(base_lr * 0.5 * (1.0 + (PI * step as f64 / total_steps as f64).cos()))
}

/// `target <- (1 - alpha) * target + alpha * online`, element-wise.
pub fn ema_update<P: ParamSet + ?Sized, Q: ParamSet + ?Sized>(target: &mut P, online: &Q, alpha: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(NnError::Range(format!("EMA rate {alpha} outside [0, 1]")));
    }
    if !target.is_congruent(online) {
        return Err(NnError::shape("ema_update", "congruent parameter sets", "different layout"));
    }
    for (t, o) in target.linears_mut().into_iter().zip(online.linears()) {
        for (ts, os) in t.slices_mut().into_iter().zip(o.slices()) {
            for (a, &b) in ts.iter_mut().zip(os) {
                // exact at alpha = 0 and alpha = 1
                *a = if alpha == 1.0 { b } else { (1.0 - alpha) * *a + alpha * b };
            }
        }
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mlp::{Activation, Linear, MlpParams};
    use ndarray::array;

    fn scalar(v: f64) -> MlpParams {
        MlpParams::from_layers(vec![Linear { weight: array![[v]], bias: array![0.0] }], Activation::Identity).unwrap()
    }

    fn grad_of(v: f64) -> Gradients {
        Gradients { layers: vec![Linear { weight: array![[v]], bias: array![0.0] }] }
    }

    #[test]
    fn zero_gradient_leaves_params() {
        let mut p = scalar(1.25);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grad_of(0.0), &mut st, 0.1).unwrap();
        assert_eq!(p.layers[0].weight[[0, 0]], 1.25);
        assert_eq!(st.step, 1);
    }

    #[test]
    fn first_step_moves_by_lr() {
        // m = 0.1, v = 0.001; mhat = 1, vhat = 1 -> update = 0.1 / (1 + 1e-8)
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p);
        adam_step(&mut p, &grad_of(1.0), &mut st, 0.1).unwrap();
        let w = p.layers[0].weight[[0, 0]];
        assert!((w + 0.1 / (1.0 + 1e-8)).abs() < 1e-15);
    }

    #[test]
    fn descends_a_convex_quadratic() {
        // loss = (w - 3)^2
        let mut p = scalar(0.0);
        let mut st = AdamState::new(&p);
        let loss = |w: f64| (w - 3.0) * (w - 3.0);
        let mut prev = loss(0.0);
        for _ in 0..2 {
            let w = p.layers[0].weight[[0, 0]];
            adam_step(&mut p, &grad_of(2.0 * (w - 3.0)), &mut st, 0.1).unwrap();
            let now = loss(p.layers[0].weight[[0, 0]]);
            assert!(now < prev);
            prev = now;
        }
    }

    #[test]
    fn non_finite_gradient_reports_index() {
        let l = Linear { weight: array![[1.0, 2.0]], bias: array![0.0] };
        let mut p = MlpParams::from_layers(vec![l], Activation::Identity).unwrap();
        let mut st = AdamState::new(&p);
        let g = Gradients { layers: vec![Linear { weight: array![[0.0, 0.0]], bias: array![f64::NAN] }] };
        match adam_step(&mut p, &g, &mut st, 0.1) {
            Err(NnError::NonFinite { index }) => assert_eq!(index, 2),
            other => panic!("unexpected {other:?}"),
        }
        assert_eq!(st.step, 0);
    }

    #[test]
    fn cosine_endpoints() {
        assert_eq!(cosine_lr(0, 100, 3e-4).unwrap(), 3e-4);
        assert!(cosine_lr(100, 100, 3e-4).unwrap().abs() < 1e-20);
        assert!((cosine_lr(50, 100, 3e-4).unwrap() - 1.5e-4).abs() < 1e-18);
        assert!(cosine_lr(101, 100, 3e-4).is_err());
    }

    #[test]
    fn ema_endpoints_and_midpoint() {
        let online = scalar(2.0);
        let mut t = scalar(0.0);
        ema_update(&mut t, &online, 0.0).unwrap();
        assert_eq!(t.layers[0].weight[[0, 0]], 0.0);
        ema_update(&mut t, &online, 0.5).unwrap();
        assert_eq!(t.layers[0].weight[[0, 0]], 1.0);
        ema_update(&mut t, &online, 1.0).unwrap();
        assert_eq!(t, online);
        assert!(ema_update(&mut t, &online, 1.5).is_err());
        assert!(ema_update(&mut t, &online, -0.1).is_err());
    }
}
