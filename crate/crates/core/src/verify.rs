//! Self-checks of the diffusion identities, the guidance equivalence on the
//! LQ oracle, the LCB algebra and every gradient used in training.

use std::fmt;
use std::str::FromStr;
use std::time::Instant;

use dac_nn::{Gradients, MlpParams, ParamSet};
use ndarray::{Array1, Array2, Axis};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::actor::{actor_loss, regression_loss, ActorDraws, ActorLossInputs, DiffusionPolicy, GuidanceMode, NoiseNet};
use crate::critic::{lcb, member_loss, q_and_action_grad, CriticEnsemble, CriticSettings};
use crate::data::{generate_lq_dataset, ActionBounds, LqSpec};
use crate::diffusion::{forward_noise, forward_noise_batch, make_vp_schedule, score_from_noise, standard_normal};
use crate::error::{DacError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Check {
    /// Noise-to-score identity; command-line name `lemma1`.
    #[serde(rename = "lemma1")]
    ScoreIdentity,
    /// Direct optimal-noise regression vs soft-guidance regression; command-line name `theorem2`.
    #[serde(rename = "theorem2")]
    GuidanceEquivalence,
    MarginalConsistency,
    LcbAlgebra,
    FiniteDifferences,
}

impl Check {
    pub const ALL: [Check; 5] =
        [Check::ScoreIdentity, Check::GuidanceEquivalence, Check::MarginalConsistency, Check::LcbAlgebra, Check::FiniteDifferences];

    pub fn name(self) -> &'static str {
        match self {
            Check::ScoreIdentity => "lemma1",
            Check::GuidanceEquivalence => "theorem2",
            Check::MarginalConsistency => "marginal-consistency",
            Check::LcbAlgebra => "lcb-algebra",
            Check::FiniteDifferences => "finite-differences",
        }
    }
}

impl fmt::Display for Check {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Check {
    type Err = DacError;

    fn from_str(s: &str) -> Result<Self> {
        Check::ALL
            .into_iter()
            .find(|c| c.name() == s)
            .ok_or_else(|| DacError::Range(format!("unknown check {s:?} (expected one of {})", Check::ALL.map(Check::name).join(", "))))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyOptions {
    pub seed: u64,
    /// Matched draws for the guidance-equivalence check.
    pub equivalence_draws: usize,
    /// Random configurations for the finite-difference check.
    pub fd_configs: usize,
    /// Deliberately drops the noise-scale factor from the guidance target, so
    /// the equivalence check can be seen to fail.
    pub mutate_noise_scale: bool,
}

impl Default for VerifyOptions {
    fn default() -> Self {
        VerifyOptions { seed: 0, equivalence_draws: 1_000_000, fd_configs: 100, mutate_noise_scale: false }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckResult {
    pub name: String,
    pub passed: bool,
    /// Worst observed error in the check's own units.
    pub metric: f64,
    pub tolerance: f64,
    pub detail: String,
    pub seconds: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VerifyReport {
    pub passed: bool,
    pub checks: Vec<CheckResult>,
}

/// Runs `checks` in order (all of them when empty).
pub fn run_checks(checks: &[Check], opts: &VerifyOptions) -> Result<VerifyReport> {
    let list: Vec<Check> = if checks.is_empty() { Check::ALL.to_vec() } else { checks.to_vec() };
    let mut results = Vec::with_capacity(list.len());
    for c in list {
        let start = Instant::now();
        let (metric, tolerance, detail) = match c {
            Check::ScoreIdentity => score_identity(opts.seed)?,
            Check::GuidanceEquivalence => guidance_equivalence(opts)?,
            Check::MarginalConsistency => marginal_consistency(opts.seed)?,
            Check::LcbAlgebra => lcb_algebra(opts.seed)?,
            Check::FiniteDifferences => finite_differences(opts.seed, opts.fd_configs)?,
        };
        log::info!("{c}: metric {metric:.3e} (tolerance {tolerance:.1e})");
        results.push(CheckResult {
            name: c.name().to_string(),
            passed: metric <= tolerance,
            metric,
            tolerance,
            detail,
            seconds: start.elapsed().as_secs_f64(),
        });
    }
    Ok(VerifyReport { passed: results.iter().all(|r| r.passed), checks: results })
}

type Outcome = (f64, f64, String);

/// Noise-to-score conversion against the analytic score of the forward
/// kernel `N(sqrt(abar) a, (1 - abar) I)` at the noised point.
pub fn score_identity(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst = 0.0f64;
    for _ in 0..1000 {
        let steps = rng.gen_range(1..=100);
        let sched = make_vp_schedule(steps)?;
        let t = rng.gen_range(1..=steps);
        let dim = rng.gen_range(1..=4);
        let a: Vec<f64> = (0..dim).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let eps: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
        let x = forward_noise(&a, t, &eps, &sched)?.x_t;
        let ab = sched.alpha_bar(t)?;
        let score = score_from_noise(&eps, t, &sched)?;
        for j in 0..dim {
            let analytic = -(x[j] - ab.sqrt() * a[j]) / (1.0 - ab);
            worst = worst.max((score[j] - analytic).abs());
        }
    }
    Ok((worst, 1e-12, "max absolute score error over 1000 triples".into()))
}

/// Gradients of the direct regression onto the optimal noise and of the
/// soft-guidance regression agree in expectation; compared per parameter
/// block (weights, biases of each layer) as a relative norm.
pub fn guidance_equivalence(opts: &VerifyOptions) -> Result<Outcome> {
    let steps = 5;
    let eta = 1.0;
    let sched = make_vp_schedule(steps)?;
    let (ds, oracle) = generate_lq_dataset(&LqSpec { n: 20_000, seed: opts.seed, ..LqSpec::default() })?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed ^ 0x7e02);
    let net = NoiseNet::new(1, oracle.dim(), 16, 2, steps, &mut rng);
    let chunk = 20_000;
    let mut remaining = opts.equivalence_draws.max(1);
    let (mut direct, mut guided) = (net.zeros_like(), net.zeros_like());
    let mut total = 0usize;
    while remaining > 0 {
        let n = remaining.min(chunk);
        remaining -= n;
        let idx: Vec<usize> = (0..n).map(|_| rng.gen_range(0..ds.len())).collect();
        let actions = ds.actions().select(Axis(0), &idx);
        let ts: Vec<usize> = (0..n).map(|_| rng.gen_range(1..=steps)).collect();
        let eps = standard_normal(n, oracle.dim(), &mut rng);
        let x_t = forward_noise_batch(actions.view(), eps.view(), &ts, &sched)?;
        let abars: Vec<f64> = ts.iter().map(|&t| sched.alpha_bar(t)).collect::<Result<_>>()?;
        let states = Array2::zeros((n, 1));
        let optimal = oracle.target_noise_batch(x_t.view(), &abars, eta)?;
        let ext = oracle.extended_q_grad_batch(x_t.view(), &abars, eta)?;
        let mut soft = eps.clone();
        for (i, mut row) in soft.rows_mut().into_iter().enumerate() {
            let w = if opts.mutate_noise_scale { 1.0 } else { (1.0 - abars[i]).sqrt() } / eta;
            row.scaled_add(-w, &ext.row(i));
        }
        let (_, ga) = regression_loss(&net, states.view(), x_t.view(), &ts, optimal.view())?;
        let (_, gb) = regression_loss(&net, states.view(), x_t.view(), &ts, soft.view())?;
        accumulate(&mut direct, &ga, n as f64)?;
        accumulate(&mut guided, &gb, n as f64)?;
        total += n;
    }
    let mut worst = 0.0f64;
    let mut worst_block = String::new();
    for (k, (a, b)) in direct.layers.iter().zip(&guided.layers).enumerate() {
        for (part, (sa, sb)) in ["weight", "bias"].iter().zip(a.slices().into_iter().zip(b.slices())) {
            let diff = sa.iter().zip(sb).map(|(x, y)| (x - y).powi(2)).sum::<f64>().sqrt();
            let norm = sa.iter().map(|x| x * x).sum::<f64>().sqrt();
            let rel = diff / norm.max(1e-300);
            if rel > worst {
                worst = rel;
                worst_block = format!("layer {k} {part}");
            }
        }
    }
    Ok((worst, 0.02, format!("worst relative block gap over {total} draws at {worst_block}")))
}

fn accumulate(acc: &mut Gradients, g: &Gradients, weight: f64) -> Result<()> {
    for (a, b) in acc.layers.iter_mut().zip(&g.layers) {
        a.weight.scaled_add(weight, &b.weight);
        a.bias.scaled_add(weight, &b.bias);
    }
    Ok(())
}

/// Empirical moments of forward-noised draws against `(sqrt(abar) a, (1 - abar) I)`,
/// measured in standard errors.
pub fn marginal_consistency(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x3a4c);
    let n = 100_000;
    let mut worst = 0.0f64;
    for steps in [5usize, 50] {
        let sched = make_vp_schedule(steps)?;
        for t in [1, steps / 2 + 1, steps] {
            let a = [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
            let ab = sched.alpha_bar(t)?;
            let mut sums = [0.0; 2];
            let mut sq = [0.0; 2];
            for _ in 0..n {
                let eps = [rng.sample(StandardNormal), rng.sample(StandardNormal)];
                let x = forward_noise(&a, t, &eps, &sched)?.x_t;
                for j in 0..2 {
                    sums[j] += x[j];
                    sq[j] += x[j] * x[j];
                }
            }
            let var = 1.0 - ab;
            for j in 0..2 {
                let mean = sums[j] / n as f64;
                let emp_var = sq[j] / n as f64 - mean * mean;
                let z_mean = (mean - ab.sqrt() * a[j]).abs() / (var / n as f64).sqrt();
                let z_var = (emp_var - var).abs() / (var * (2.0 / n as f64).sqrt());
                worst = worst.max(z_mean).max(z_var);
            }
        }
    }
    Ok((worst, 3.0, "largest deviation in standard errors over 12 mean and 12 variance estimates".into()))
}

/// `rho = 0` gives the mean, two members give `min` at `rho = 1`, and the
/// bound never increases with `rho`.
pub fn lcb_algebra(seed: u64) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x1cb);
    let mut worst = 0.0f64;
    let mut monotone_violations = 0usize;
    for _ in 0..10_000 {
        let h = rng.gen_range(1..=12);
        let scale = 10f64.powf(rng.gen_range(-2.0..3.0));
        let v: Vec<f64> = (0..h).map(|_| scale * rng.gen_range(-1.0..1.0)).collect();
        let mean = v.iter().sum::<f64>() / h as f64;
        worst = worst.max((lcb(&v, 0.0)? - mean).abs() / mean.abs().max(1.0));
        let pair = [v[0], scale * rng.gen_range(-1.0..1.0)];
        worst = worst.max((lcb(&pair, 1.0)? - pair[0].min(pair[1])).abs() / scale.max(1.0));
        let mut prev = f64::INFINITY;
        for rho in [0.0, 0.1, 0.5, 1.0, 2.0, 5.0] {
            let b = lcb(&v, rho)?;
            if b > prev {
                monotone_violations += 1;
            }
            prev = b;
        }
    }
    if monotone_violations > 0 {
        return Ok((f64::INFINITY, 1e-12, format!("{monotone_violations} monotonicity violations")));
    }
    Ok((worst, 1e-12, "largest relative identity error over 10000 ensembles; no monotonicity violations".into()))
}

fn central_difference<P: Clone + ParamSet>(p: &P, index: usize, h: f64, f: &dyn Fn(&P) -> Result<f64>) -> Result<f64> {
    let (mut up, mut down) = (p.clone(), p.clone());
    up.add_at(index, h);
    down.add_at(index, -h);
    Ok((f(&up)? - f(&down)?) / (2.0 * h))
}

fn relative_gap(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1e-3)
}

/// Checks `coords` random coordinates of an analytic gradient.
fn compare_params<P: Clone + ParamSet>(
    p: &P,
    grads: &Gradients,
    coords: usize,
    rng: &mut ChaCha8Rng,
    f: &dyn Fn(&P) -> Result<f64>,
) -> Result<f64> {
    let flat = grads.to_flat();
    let mut worst = 0.0f64;
    for _ in 0..coords {
        let i = rng.gen_range(0..flat.len());
        worst = worst.max(relative_gap(flat[i], central_difference(p, i, 1e-6, f)?));
    }
    Ok(worst)
}

/// Central differences of the critic loss, the critic action-gradient and the
/// three actor losses on random small configurations.
pub fn finite_differences(seed: u64, configs: usize) -> Result<Outcome> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xfd);
    let mut worst = 0.0f64;
    let mut worst_at = String::new();
    let mut note = |name: &str, k: usize, v: f64, worst: &mut f64| {
        if v > *worst {
            *worst = v;
            worst_at = format!("{name} (configuration {k})");
        }
    };
    for k in 0..configs {
        let sd = rng.gen_range(1..=3);
        let ad = rng.gen_range(1..=3);
        let hidden = rng.gen_range(3..=8);
        let depth = rng.gen_range(1..=3);
        let batch = rng.gen_range(2..=6);
        let steps = rng.gen_range(2..=6);
        let states = Array2::from_shape_fn((batch, sd), |_| rng.gen_range(-1.0..1.0));
        let actions = Array2::from_shape_fn((batch, ad), |_| rng.gen_range(-0.9..0.9));

        let member = MlpParams::new(sd + ad, hidden, depth, 1, &mut rng);
        let targets = Array1::from_shape_fn(batch, |_| rng.gen_range(-2.0..2.0));
        let base = member_loss(&member, states.view(), actions.view(), &targets)?;
        let f = |m: &MlpParams| Ok(member_loss(m, states.view(), actions.view(), &targets)?.loss);
        note("critic loss", k, compare_params(&member, &base.grads, 12, &mut rng, &f)?, &mut worst);

        let (_, gx) = q_and_action_grad(&member, states.view(), actions.view())?;
        for _ in 0..4 {
            let (i, j) = (rng.gen_range(0..batch), rng.gen_range(0..ad));
            let q_at = |d: f64| -> Result<f64> {
                let mut x = actions.clone();
                x[[i, j]] += d;
                Ok(q_and_action_grad(&member, states.view(), x.view())?.0[i])
            };
            let fd = (q_at(1e-6)? - q_at(-1e-6)?) / 2e-6;
            note("critic action gradient", k, relative_gap(gx[[i, j]], fd), &mut worst);
        }

        let sched = make_vp_schedule(steps)?;
        let net = NoiseNet::new(sd, ad, hidden, depth.max(1), steps, &mut rng);
        let policy = DiffusionPolicy::new(net, sched.clone(), ActionBounds::symmetric(ad, 1.0))?;
        let critic = CriticEnsemble::new(sd, ad, hidden, depth, CriticSettings { ensemble_size: 2, ..CriticSettings::default() }, &mut rng)?;
        let draws = ActorDraws::sample(actions.view(), &sched, &mut rng)?;
        let eta = rng.gen_range(0.1..2.0);
        let sampler_seed: u64 = rng.gen();
        for mode in [GuidanceMode::Soft, GuidanceMode::Hard, GuidanceMode::Denoised] {
            let inputs = ActorLossInputs { states: states.view(), draws: &draws, mode, eta, denoised_samples: 0 };
            let out = actor_loss(&policy, &inputs, &critic, &mut ChaCha8Rng::seed_from_u64(sampler_seed))?;
            let f = |n: &NoiseNet| {
                let p = DiffusionPolicy { net: n.clone(), ..policy.clone() };
                Ok(actor_loss(&p, &inputs, &critic, &mut ChaCha8Rng::seed_from_u64(sampler_seed))?.loss)
            };
            let gap = compare_params(&policy.net, &out.grads, 8, &mut rng, &f)?;
            note(&format!("{} actor loss", mode.as_str()), k, gap, &mut worst);
        }
    }
    Ok((worst, 1e-4, format!("worst relative gap over {configs} configurations at {worst_at}")))
}
