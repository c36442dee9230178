//! Conditional noise network, the diffusion policy with its EMA twin, the
//! guided actor losses and the Lagrange multiplier controller.

use std::f64::consts::PI;

use dac_nn::{bind_params, collect_gradients, ema_update, BoundLinear, Gradients, Linear, MlpParams, ParamSet, Tape, Var};
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::critic::CriticEnsemble;
use crate::data::{ActionBounds, LqOracle};
use crate::diffusion::{denoise_sample, standard_normal, ActionSampler, NoisePredictor, NoiseSchedule};
use crate::error::{DacError, Result};

pub const TIME_EMBED_DIM: usize = 16;

/// Denoised-mode step counts above this log a cost warning.
pub const DENOISED_COST_WARN_STEPS: usize = 20;

/// Sinusoidal features of `t / T`: `sin(w_k u)` for k = 0..8 then `cos(w_k u)`,
/// with `w_k = pi * 2^k`.
pub fn time_embedding(t: usize, steps: usize) -> Result<[f64; TIME_EMBED_DIM]> {
    if t == 0 || t > steps {
        return Err(DacError::Range(format!("diffusion step {t} outside 1..={steps}")));
    }
    let u = t as f64 / steps as f64;
    let half = TIME_EMBED_DIM / 2;
    let mut out = [0.0; TIME_EMBED_DIM];
    for k in 0..half {
        let w = PI * (1u64 << k) as f64;
        out[k] = (w * u).sin();
        out[half + k] = (w * u).cos();
    }
    Ok(out)
}

fn embedding_rows(ts: &[usize], steps: usize) -> Result<Array2<f64>> {
    let mut out = Array2::zeros((ts.len(), TIME_EMBED_DIM));
    for (i, &t) in ts.iter().enumerate() {
        let e = time_embedding(t, steps)?;
        out.row_mut(i).assign(&ndarray::ArrayView1::from(&e[..]));
    }
    Ok(out)
}

/// `eps(x_t, s, t)`: the time features go through one affine + Mish layer and
/// are concatenated with `(x_t, s)` before the body MLP.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseNet {
    pub time: Linear,
    pub body: MlpParams,
    pub steps: usize,
}

impl ParamSet for NoiseNet {
    fn linears(&self) -> Vec<&Linear> {
        std::iter::once(&self.time).chain(self.body.layers.iter()).collect()
    }
    fn linears_mut(&mut self) -> Vec<&mut Linear> {
        std::iter::once(&mut self.time).chain(self.body.layers.iter_mut()).collect()
    }
}

impl NoiseNet {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        depth: usize,
        steps: usize,
        rng: &mut R,
    ) -> Self {
        let time = Linear::init(TIME_EMBED_DIM, TIME_EMBED_DIM, rng);
        let body = MlpParams::new(action_dim + state_dim + TIME_EMBED_DIM, hidden, depth, action_dim, rng);
        NoiseNet { time, body, steps }
    }

    /// Rebuilds a network from its layer list (time layer first).
    pub fn from_layers(mut layers: Vec<Linear>, steps: usize) -> Result<Self> {
        if layers.len() < 2 {
            return Err(DacError::Shape("noise network needs a time layer and a body".into()));
        }
        let time = layers.remove(0);
        if time.input_dim() != TIME_EMBED_DIM || time.output_dim() != TIME_EMBED_DIM {
            return Err(DacError::Shape("time layer must be 16 x 16".into()));
        }
        let body = MlpParams::from_layers(layers, dac_nn::Activation::Mish)?;
        Ok(NoiseNet { time, body, steps })
    }

    pub fn action_dim(&self) -> usize {
        self.body.output_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.body.input_dim() - TIME_EMBED_DIM - self.action_dim()
    }

    fn check(&self, x: ArrayView2<f64>, states: ArrayView2<f64>, rows: usize) -> Result<()> {
        if x.ncols() != self.action_dim() || states.ncols() != self.state_dim() || x.nrows() != states.nrows() || rows != x.nrows() {
            return Err(DacError::Shape(format!(
                "noise network expects {} x ({} action, {} state) rows",
                x.nrows(),
                self.action_dim(),
                self.state_dim()
            )));
        }
        Ok(())
    }

    /// Batched prediction with one step per row, without a tape.
    pub fn predict_rows(&self, x: ArrayView2<f64>, states: ArrayView2<f64>, ts: &[usize]) -> Result<Array2<f64>> {
        self.check(x, states, ts.len())?;
        let mut temb = self.time.forward_batch(embedding_rows(ts, self.steps)?.view());
        temb.mapv_inplace(dac_nn::mish);
        let input = concatenate![Axis(1), x, states, temb];
        Ok(self.body.forward_batch(input.view())?)
    }

    /// Prediction recorded on `tape` with previously bound layers (time layer
    /// first, as in [`ParamSet::linears`]).
    pub fn forward_tape(&self, tape: &mut Tape, bound: &[BoundLinear], x: Var, states: Var, ts: &[usize]) -> Result<Var> {
        let emb = tape.constant(embedding_rows(ts, self.steps)?);
        let h = tape.affine(emb, bound[0].weight, bound[0].bias)?;
        let h = tape.mish(h);
        let input = tape.concat_cols(&[x, states, h])?;
        Ok(self.body.forward_tape(tape, &bound[1..], input)?)
    }
}

impl NoisePredictor for NoiseNet {
    fn predict(&self, x: ArrayView2<f64>, states: ArrayView2<f64>, t: usize) -> Result<Array2<f64>> {
        self.predict_rows(x, states, &vec![t; x.nrows()])
    }
}

/// Noise network, its EMA twin and the sampler configuration.
#[derive(Debug, Clone, PartialEq)]
pub struct DiffusionPolicy {
    pub net: NoiseNet,
    pub ema: NoiseNet,
    pub schedule: NoiseSchedule,
    pub bounds: ActionBounds,
}

impl DiffusionPolicy {
    pub fn new(net: NoiseNet, schedule: NoiseSchedule, bounds: ActionBounds) -> Result<Self> {
        if net.steps != schedule.steps() {
            return Err(DacError::Shape("network step count differs from the schedule".into()));
        }
        if net.action_dim() != bounds.dim() {
            return Err(DacError::Shape("network action dimension differs from the bounds".into()));
        }
        Ok(DiffusionPolicy { ema: net.clone(), net, schedule, bounds })
    }

    pub fn action_dim(&self) -> usize {
        self.net.action_dim()
    }

    pub fn state_dim(&self) -> usize {
        self.net.state_dim()
    }

    pub fn update_ema(&mut self, alpha: f64) -> Result<()> {
        Ok(ema_update(&mut self.ema, &self.net, alpha)?)
    }

    /// Samples from the EMA network, clipped to the action box.
    pub fn sample_ema<R: Rng + ?Sized>(&self, states: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        denoise_sample(&self.ema, states, self.action_dim(), &self.schedule, Some(&self.bounds), rng)
    }

    /// Samples from the online network, clipped to the action box.
    pub fn sample_online<R: Rng + ?Sized>(&self, states: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        denoise_sample(&self.net, states, self.action_dim(), &self.schedule, Some(&self.bounds), rng)
    }
}

impl ActionSampler for DiffusionPolicy {
    fn sample_actions<R: Rng + ?Sized>(&self, states: ArrayView2<f64>, rng: &mut R) -> Result<Array2<f64>> {
        self.sample_ema(states, rng)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum GuidanceMode {
    Soft,
    Hard,
    Denoised,
}

impl GuidanceMode {
    pub fn as_str(&self) -> &'static str {
        match self {
            GuidanceMode::Soft => "soft",
            GuidanceMode::Hard => "hard",
            GuidanceMode::Denoised => "denoised",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum EtaMode {
    Constant,
    Learnable,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EtaController {
    pub eta: f64,
    pub mode: EtaMode,
    pub b: f64,
    pub alpha: f64,
    pub floor: f64,
}

impl EtaController {
    pub fn constant(eta: f64) -> Self {
        EtaController { eta, mode: EtaMode::Constant, b: 1.0, alpha: 0.0, floor: 1e-4 }
    }
}

/// Dual ascent on the multiplier: `max(floor, eta + alpha (bc_loss - b))`.
/// Constant controllers are returned unchanged.
pub fn eta_step(ctrl: EtaController, bc_loss: f64) -> EtaController {
    match ctrl.mode {
        EtaMode::Constant => ctrl,
        EtaMode::Learnable => EtaController { eta: (ctrl.eta + ctrl.alpha * (bc_loss - ctrl.b)).max(ctrl.floor), ..ctrl },
    }
}

/// `eps - (1/eta) sqrt(1 - abar_t) qgrad`.
pub fn target_noise_soft(eps: &[f64], t: usize, qgrad: &[f64], eta: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    if !(eta > 0.0) {
        return Err(DacError::Range(format!("eta must be positive, got {eta}")));
    }
    if eps.len() != qgrad.len() {
        return Err(DacError::Shape("noise and Q-gradient differ in length".into()));
    }
    let s = schedule.noise_scale(t)?;
    Ok(eps.iter().zip(qgrad).map(|(e, g)| e - s * g / eta).collect())
}

/// Closed-form optimal noise prediction on the LQ oracle at step `t`.
pub fn analytic_target_noise(x_t: &[f64], t: usize, oracle: &LqOracle, eta: f64, schedule: &NoiseSchedule) -> Result<Vec<f64>> {
    oracle.target_noise(x_t, schedule.alpha_bar(t)?, eta)
}

/// One forward-noising draw per batch row.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorDraws {
    pub eps: Array2<f64>,
    pub ts: Vec<usize>,
    pub x_t: Array2<f64>,
}

impl ActorDraws {
    /// `t ~ Unif{1..T}`, `eps ~ N(0, I)`, `x_t = sqrt(abar_t) a + sqrt(1 - abar_t) eps`.
    pub fn sample<R: Rng + ?Sized>(actions: ArrayView2<f64>, schedule: &NoiseSchedule, rng: &mut R) -> Result<Self> {
        let (b, d) = actions.dim();
        let ts: Vec<usize> = (0..b).map(|_| rng.gen_range(1..=schedule.steps())).collect();
        let eps = standard_normal(b, d, rng);
        Self::from_parts(actions, eps, ts, schedule)
    }

    pub fn from_parts(actions: ArrayView2<f64>, eps: Array2<f64>, ts: Vec<usize>, schedule: &NoiseSchedule) -> Result<Self> {
        let x_t = crate::diffusion::forward_noise_batch(actions, eps.view(), &ts, schedule)?;
        Ok(ActorDraws { eps, ts, x_t })
    }
}

/// Loss value, its parts and gradients with respect to the online network.
#[derive(Debug, Clone, PartialEq)]
pub struct ActorLossOutput {
    pub loss: f64,
    /// `mean_i |eps_theta - eps|^2`
    pub bc_loss: f64,
    /// Soft/hard: mean weighted inner product with the Q-gradient.
    /// Denoised: mean of `-Q/C` over fresh samples.
    pub guidance_term: f64,
    pub grads: Gradients,
}

/// Inputs of an actor loss evaluation.
pub struct ActorLossInputs<'a> {
    pub states: ArrayView2<'a, f64>,
    pub draws: &'a ActorDraws,
    pub mode: GuidanceMode,
    pub eta: f64,
    /// Rows used for the denoised-mode samples; 0 means every row.
    pub denoised_samples: usize,
}

/// Actor objective for the chosen guidance mode.
///
/// * soft: `mean_i eta |eps_theta - eps|^2 + sqrt(1 - abar_t) <eps_theta, g>`
/// * hard: as soft without the `sqrt(1 - abar_t)` factor
/// * denoised: `eta * BC - mean Q(s, x_0) / C` with `x_0` drawn from the
///   online network and differentiated through every denoising step
///
/// `g` is the ensemble's normalized Q-gradient at `x_t`, held constant.
/// `sampler_rng` is consumed only by the denoised mode.
pub fn actor_loss<R: Rng + ?Sized>(
    policy: &DiffusionPolicy,
    inputs: &ActorLossInputs<'_>,
    critic: &CriticEnsemble,
    sampler_rng: &mut R,
) -> Result<ActorLossOutput> {
    let ActorLossInputs { states, draws, mode, eta, denoised_samples } = *inputs;
    if !(eta > 0.0) || !eta.is_finite() {
        return Err(DacError::Range(format!("eta must be positive and finite, got {eta}")));
    }
    let b = states.nrows();
    if draws.x_t.nrows() != b || draws.ts.len() != b {
        return Err(DacError::Shape("draws and states differ in batch size".into()));
    }
    let net = &policy.net;
    let schedule = &policy.schedule;

    let guidance_weights = match mode {
        GuidanceMode::Soft | GuidanceMode::Hard => {
            let g = critic.q_gradient(states, draws.x_t.view())?;
            let w: Array1<f64> = match mode {
                GuidanceMode::Soft => draws.ts.iter().map(|&t| schedule.noise_scale(t)).collect::<Result<_>>()?,
                _ => Array1::ones(b),
            };
            Some(g * &w.insert_axis(Axis(1)))
        }
        GuidanceMode::Denoised => None,
    };

    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, net, true);
    let sv = tape.constant(states.to_owned());
    let xv = tape.constant(draws.x_t.clone());
    let pred = net.forward_tape(&mut tape, &bound, xv, sv, &draws.ts)?;
    let ev = tape.constant(draws.eps.clone());
    let diff = tape.sub(pred, ev)?;
    let sq = tape.square(diff);
    let per_row = tape.row_sum(sq);
    let bc = tape.mean(per_row);
    let bc_term = tape.scale(bc, eta);

    let guidance = match guidance_weights {
        Some(wg) => {
            let wgv = tape.constant(wg);
            let prod = tape.mul(pred, wgv)?;
            let total = tape.sum(prod);
            tape.scale(total, 1.0 / b as f64)
        }
        None => {
            let n = if denoised_samples == 0 { b } else { denoised_samples.min(b) };
            if schedule.steps() > DENOISED_COST_WARN_STEPS {
                log::warn!(
                    "denoised guidance back-propagates through {} sampler steps per update; expect a large per-step cost",
                    schedule.steps()
                );
            }
            let s_rows = states.slice(ndarray::s![..n, ..]).to_owned();
            let x0 = denoise_on_tape(&mut tape, &bound, policy, s_rows.view(), sampler_rng)?;
            let sv_n = tape.constant(s_rows);
            let q = critic.mean_q_on_tape(&mut tape, sv_n, x0)?;
            let mq = tape.mean(q);
            tape.scale(mq, -1.0 / critic.scale_c)
        }
    };
    let loss = tape.add(bc_term, guidance)?;
    let (loss_v, bc_v, guid_v) = (tape.scalar_value(loss), tape.scalar_value(bc), tape.scalar_value(guidance));
    if !loss_v.is_finite() {
        return Err(DacError::Numeric(format!("actor loss is {loss_v}")));
    }
    let mut g = tape.backward(loss)?;
    let grads = collect_gradients(&mut g, &bound, net);
    Ok(ActorLossOutput { loss: loss_v, bc_loss: bc_v, guidance_term: guid_v, grads })
}

/// Ancestral sampling recorded on the tape from the online network, clipped
/// to the action box at the end. Returns the `n x action_dim` sample node.
fn denoise_on_tape<R: Rng + ?Sized>(
    tape: &mut Tape,
    bound: &[BoundLinear],
    policy: &DiffusionPolicy,
    states: ArrayView2<f64>,
    rng: &mut R,
) -> Result<Var> {
    let n = states.nrows();
    let d = policy.action_dim();
    let schedule = &policy.schedule;
    let sv = tape.constant(states.to_owned());
    let mut x = tape.constant(standard_normal(n, d, rng));
    for t in (1..=schedule.steps()).rev() {
        let eps = policy.net.forward_tape(tape, bound, x, sv, &vec![t; n])?;
        if tape.value(eps).iter().any(|v| !v.is_finite()) {
            return Err(DacError::NonFiniteStep { step: t });
        }
        let coef = schedule.beta(t)? / schedule.noise_scale(t)?;
        let scaled = tape.scale(eps, coef);
        let centered = tape.sub(x, scaled)?;
        x = tape.scale(centered, 1.0 / schedule.alpha(t)?.sqrt());
        if t > 1 {
            let sigma = schedule.posterior_variance(t)?.sqrt();
            let z = standard_normal(n, d, rng) * sigma;
            let zv = tape.constant(z);
            x = tape.add(x, zv)?;
        }
    }
    Ok(tape.clamp(x, &policy.bounds.lo, &policy.bounds.hi)?)
}

/// `mean_i |eps_theta(x_t, s, t) - target|^2` and its gradient, for arbitrary
/// per-row regression targets.
pub fn regression_loss(
    net: &NoiseNet,
    states: ArrayView2<f64>,
    x_t: ArrayView2<f64>,
    ts: &[usize],
    targets: ArrayView2<f64>,
) -> Result<(f64, Gradients)> {
    if targets.dim() != x_t.dim() {
        return Err(DacError::Shape("targets and inputs differ in shape".into()));
    }
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, net, true);
    let sv = tape.constant(states.to_owned());
    let xv = tape.constant(x_t.to_owned());
    let pred = net.forward_tape(&mut tape, &bound, xv, sv, ts)?;
    let yv = tape.constant(targets.to_owned());
    let d = tape.sub(pred, yv)?;
    let sq = tape.square(d);
    let rows = tape.row_sum(sq);
    let loss = tape.mean(rows);
    let mut g = tape.backward(loss)?;
    Ok((tape.scalar_value(loss), collect_gradients(&mut g, &bound, net)))
}
