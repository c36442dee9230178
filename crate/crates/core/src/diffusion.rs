//! Variance-preserving noise schedule, forward noising, ancestral (DDPM)
//! sampling and the noise/score conversion.

use ndarray::{Array2, ArrayView2, Zip};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::data::ActionBounds;
use crate::error::{DacError, Result};

pub const VP_BETA_MIN: f64 = 0.1;
pub const VP_BETA_MAX: f64 = 10.0;

/// Per-step tables for a `T`-step forward chain. All tables are indexed by
/// `t - 1` for `t` in `1..=T`; the accessors take the 1-based step.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    betas: Vec<f64>,
    alphas: Vec<f64>,
    alpha_bars: Vec<f64>,
    noise_scales: Vec<f64>,
}

impl NoiseSchedule {
    /// Builds the tables from an explicit beta sequence.
    pub fn from_betas(betas: Vec<f64>) -> Result<Self> {
        if betas.is_empty() {
            return Err(DacError::Range("schedule needs at least one step".into()));
        }
        if let Some(b) = betas.iter().find(|b| !(**b > 0.0 && **b < 1.0)) {
            return Err(DacError::Range(format!("beta {b} outside (0, 1)")));
        }
        let alphas: Vec<f64> = betas.iter().map(|b| 1.0 - b).collect();
        let mut alpha_bars = Vec::with_capacity(alphas.len());
        let mut acc = 1.0;
        for a in &alphas {
            acc *= a;
            alpha_bars.push(acc);
        }
        let noise_scales = alpha_bars.iter().map(|ab| (1.0 - ab).sqrt()).collect();
        Ok(NoiseSchedule { betas, alphas, alpha_bars, noise_scales })
    }

    pub fn steps(&self) -> usize {
        self.betas.len()
    }

    fn idx(&self, t: usize) -> Result<usize> {
        if t == 0 || t > self.steps() {
            return Err(DacError::Range(format!("diffusion step {t} outside [1, {}]", self.steps())));
        }
        Ok(t - 1)
    }

    pub fn beta(&self, t: usize) -> Result<f64> {
        Ok(self.betas[self.idx(t)?])
    }

    pub fn alpha(&self, t: usize) -> Result<f64> {
        Ok(self.alphas[self.idx(t)?])
    }

    pub fn alpha_bar(&self, t: usize) -> Result<f64> {
        Ok(self.alpha_bars[self.idx(t)?])
    }

    /// `alpha_bar(t - 1)`, with `alpha_bar(0) = 1`.
    pub fn alpha_bar_prev(&self, t: usize) -> Result<f64> {
        let i = self.idx(t)?;
        Ok(if i == 0 { 1.0 } else { self.alpha_bars[i - 1] })
    }

    /// `sqrt(1 - alpha_bar(t))`
    pub fn noise_scale(&self, t: usize) -> Result<f64> {
        Ok(self.noise_scales[self.idx(t)?])
    }

    /// Reverse-step variance `beta_t (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t)`.
    pub fn posterior_variance(&self, t: usize) -> Result<f64> {
        let i = self.idx(t)?;
        Ok(self.betas[i] * (1.0 - self.alpha_bar_prev(t)?) / (1.0 - self.alpha_bars[i]))
    }

    pub fn betas(&self) -> &[f64] {
        &self.betas
    }

    pub fn alpha_bars(&self) -> &[f64] {
        &self.alpha_bars
    }

    pub fn noise_scales(&self) -> &[f64] {
        &self.noise_scales
    }
}

/// Discretized VP SDE with the default `beta_min = 0.1`, `beta_max = 10`.
pub fn make_vp_schedule(steps: usize) -> Result<NoiseSchedule> {
    make_vp_schedule_with(steps, VP_BETA_MIN, VP_BETA_MAX)
}

/// `beta_t = 1 - exp(-beta_min / T - (beta_max - beta_min) (2t - 1) / (2 T^2))`
pub fn make_vp_schedule_with(steps: usize, beta_min: f64, beta_max: f64) -> Result<NoiseSchedule> {
    if steps < 1 {
        return Err(DacError::Range("T must be at least 1".into()));
    }
    let tt = steps as f64;
    let betas = (1..=steps)
        .map(|t| {
            let t = t as f64;
            1.0 - (-beta_min / tt - (beta_max - beta_min) * (2.0 * t - 1.0) / (2.0 * tt * tt)).exp()
        })
        .collect();
    NoiseSchedule::from_betas(betas)
}

/// One forward-noised action together with the draw that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisySample {
    pub x_t: Vec<f64>,
    pub t: usize,
    pub eps: Vec<f64>,
}

/// `x_t = sqrt(alpha_bar_t) a + sqrt(1 - alpha_bar_t) eps`
pub fn forward_noise(a: &[f64], t: usize, eps: &[f64], schedule: &NoiseSchedule) -> Result<NoisySample> {
    if a.len() != eps.len() {
        return Err(DacError::Shape(format!("action has {} dims, noise has {}", a.len(), eps.len())));
    }
    let ab = schedule.alpha_bar(t)?;
    let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
    let x_t = a.iter().zip(eps).map(|(a, e)| sa * a + sn * e).collect();
    Ok(NoisySample { x_t, t, eps: eps.to_vec() })
}

/// Batched forward noising with one step per row.
pub fn forward_noise_batch(
    actions: ArrayView2<f64>,
    eps: ArrayView2<f64>,
    ts: &[usize],
    schedule: &NoiseSchedule,
) -> Result<Array2<f64>> {
    if actions.dim() != eps.dim() || ts.len() != actions.nrows() {
        return Err(DacError::Shape("actions, noise and steps must agree".into()));
    }
    let mut out = Array2::zeros(actions.dim());
    for (r, &t) in ts.iter().enumerate() {
        let ab = schedule.alpha_bar(t)?;
        let (sa, sn) = (ab.sqrt(), (1.0 - ab).sqrt());
        Zip::from(out.row_mut(r))
            .and(actions.row(r))
            .and(eps.row(r))
            .for_each(|o, &a, &e| *o = sa * a + sn * e);
    }
    Ok(out)
}

/// `-eps / sqrt(1 - alpha_bar_t)`: the score of `q_t(x_t | a)` expressed
/// through the noise that produced `x_t`.
pub fn score_from_noise(eps: &[f64], t: usize, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    let s = schedule.noise_scale(t)?;
    Ok(eps.iter().map(|e| -e / s).collect())
}

/// Conditional noise predictor `eps(x_t, s, t)`, evaluated on a batch.
pub trait NoisePredictor {
    fn predict(&self, x: ArrayView2<f64>, states: ArrayView2<f64>, t: usize) -> Result<Array2<f64>>;
}

impl<F> NoisePredictor for F
where
    F: Fn(ArrayView2<f64>, ArrayView2<f64>, usize) -> Array2<f64>,
{
    fn predict(&self, x: ArrayView2<f64>, states: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
        Ok(self(x, states, t))
    }
}

/// Draws one action per state row.
pub trait ActionSampler {
    fn sample_actions<R: Rng + ?Sized>(&self, states: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>>;
}

pub fn standard_normal<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Array2<f64> {
    Array2::from_shape_simple_fn((rows, cols), || rng.sample(StandardNormal))
}

/// Ancestral sampling from `x_T ~ N(0, I)` down to `x_0`, one action per state
/// row. No noise is added on the final step; `bounds`, when given, clips the
/// result.
pub fn denoise_sample<P, R>(
    predictor: &P,
    states: ArrayView2<f64>,
    action_dim: usize,
    schedule: &NoiseSchedule,
    bounds: Option<&ActionBounds>,
    rng: &mut R,
) -> Result<Array2<f64>>
where
    P: NoisePredictor + ?Sized,
    R: Rng + ?Sized,
{
    let n = states.nrows();
    let mut x = standard_normal(n, action_dim, rng);
    for t in (1..=schedule.steps()).rev() {
        let eps = predictor.predict(x.view(), states, t)?;
        if eps.dim() != x.dim() {
            return Err(DacError::Shape(format!("predictor returned {:?}, expected {:?}", eps.dim(), x.dim())));
        }
        if eps.iter().any(|v| !v.is_finite()) {
            return Err(DacError::NonFiniteStep { step: t });
        }
        let coef = schedule.beta(t)? / schedule.noise_scale(t)?;
        let inv_sqrt_alpha = 1.0 / schedule.alpha(t)?.sqrt();
        Zip::from(&mut x).and(&eps).for_each(|xv, &e| *xv = (*xv - coef * e) * inv_sqrt_alpha);
        if t > 1 {
            let sigma = schedule.posterior_variance(t)?.sqrt();
            x.mapv_inplace(|v| v + sigma * rng.sample::<f64, _>(StandardNormal));
        }
    }
    if let Some(b) = bounds {
        b.clip_rows(&mut x);
    }
    Ok(x)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vp_schedule_five_steps() {
        let s = make_vp_schedule(5).unwrap();
        assert_eq!(s.steps(), 5);
        // closed form evaluated independently: prod_t exp(-0.02 - 9.9 (2t-1)/50)
        let expected_last = (-(0.1 + 9.9 * 25.0 / 50.0) as f64).exp();
        assert!((s.alpha_bar(5).unwrap() - expected_last).abs() < 1e-15);
        assert!(s.alpha_bar(5).unwrap() < 0.01);
        for w in s.alpha_bars().windows(2) {
            assert!(w[1] < w[0]);
        }
        for w in s.noise_scales().windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn single_step_schedule() {
        let s = make_vp_schedule(1).unwrap();
        assert_eq!(s.alpha_bar(1).unwrap(), s.alpha(1).unwrap());
        assert_eq!(s.alpha(1).unwrap(), 1.0 - s.beta(1).unwrap());
        assert_eq!(s.alpha_bar_prev(1).unwrap(), 1.0);
        assert_eq!(s.posterior_variance(1).unwrap(), 0.0);
        assert!(make_vp_schedule(0).is_err());
    }

    #[test]
    fn forward_noise_cases() {
        let s = make_vp_schedule(5).unwrap();
        let ab = s.alpha_bar(2).unwrap();
        let x = forward_noise(&[0.3, -0.7], 2, &[0.0, 0.0], &s).unwrap();
        assert_eq!(x.x_t, vec![ab.sqrt() * 0.3, ab.sqrt() * -0.7]);
        let x = forward_noise(&[0.0, 0.0], 2, &[1.5, -2.0], &s).unwrap();
        assert_eq!(x.x_t, vec![(1.0 - ab).sqrt() * 1.5, (1.0 - ab).sqrt() * -2.0]);
        assert!(forward_noise(&[0.0], 6, &[0.0], &s).is_err());
        assert!(forward_noise(&[0.0], 0, &[0.0], &s).is_err());
    }

    #[test]
    fn forward_noise_hand_example() {
        // one-step schedule with alpha_bar = 0.75
        let s = NoiseSchedule::from_betas(vec![0.25]).unwrap();
        let x = forward_noise(&[1.0, 0.0], 1, &[0.0, 1.0], &s).unwrap();
        assert!((x.x_t[0] - 0.75f64.sqrt()).abs() < 1e-15);
        assert!((x.x_t[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn score_from_noise_examples() {
        let s = NoiseSchedule::from_betas(vec![0.25]).unwrap();
        assert_eq!(score_from_noise(&[0.0, 0.0], 1, &s).unwrap(), vec![-0.0, -0.0]);
        assert_eq!(score_from_noise(&[1.0, -2.0], 1, &s).unwrap(), vec![-2.0, 4.0]);
    }

    #[test]
    fn one_step_zero_predictor_rescales_noise() {
        let s = make_vp_schedule(1).unwrap();
        let zero = |x: ArrayView2<f64>, _: ArrayView2<f64>, _: usize| Array2::zeros(x.dim());
        let states = Array2::zeros((3, 1));
        let mut a = ChaCha8Rng::seed_from_u64(9);
        let mut b = a.clone();
        let out = denoise_sample(&zero, states.view(), 2, &s, None, &mut a).unwrap();
        let x1 = standard_normal(3, 2, &mut b);
        let expected = x1 * (1.0 / s.alpha(1).unwrap().sqrt());
        assert_eq!(out, expected);
    }

    #[test]
    fn non_finite_prediction_names_the_step() {
        let s = make_vp_schedule(5).unwrap();
        let bad = |x: ArrayView2<f64>, _: ArrayView2<f64>, t: usize| {
            if t == 3 {
                Array2::from_elem(x.dim(), f64::NAN)
            } else {
                Array2::zeros(x.dim())
            }
        };
        let states = Array2::zeros((2, 1));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        match denoise_sample(&bad, states.view(), 2, &s, None, &mut rng) {
            Err(DacError::NonFiniteStep { step }) => assert_eq!(step, 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn final_sample_is_clipped() {
        let s = make_vp_schedule(1).unwrap();
        let push = |x: ArrayView2<f64>, _: ArrayView2<f64>, _: usize| Array2::from_elem(x.dim(), -100.0);
        let states = Array2::zeros((4, 1));
        let bounds = ActionBounds::symmetric(2, 1.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let out = denoise_sample(&push, states.view(), 2, &s, Some(&bounds), &mut rng).unwrap();
        assert!(out.iter().all(|&v| v == 1.0));
    }
}
