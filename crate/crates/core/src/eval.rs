//! Policy extraction and evaluation on the bandit and LQ environments.

use nalgebra::{DMatrix, DVector};
use ndarray::{Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::actor::DiffusionPolicy;
use crate::critic::{repeat_rows, CriticEnsemble};
use crate::data::{bandit_reward, BanditSpec, LqOracle, OfflineDataset};
use crate::error::{DacError, Result};

/// For each state row, draws `n_a` actions from the EMA policy and keeps the
/// one with the highest ensemble-mean target Q (first index on ties).
pub fn extract_actions<R: Rng + ?Sized>(
    states: ArrayView2<f64>,
    policy: &DiffusionPolicy,
    critic: &CriticEnsemble,
    n_a: usize,
    rng: &mut R,
) -> Result<Array2<f64>> {
    if n_a == 0 {
        return Err(DacError::Range("need at least one candidate action".into()));
    }
    let n = states.nrows();
    let repeated = repeat_rows(states, n_a);
    let candidates = policy.sample_ema(repeated.view(), rng)?;
    if n_a == 1 {
        return Ok(candidates);
    }
    let q = critic.mean_q(repeated.view(), candidates.view())?;
    let picks: Vec<usize> = (0..n)
        .map(|i| {
            let mut best = i * n_a;
            for j in i * n_a + 1..(i + 1) * n_a {
                if q[j] > q[best] {
                    best = j;
                }
            }
            best
        })
        .collect();
    Ok(candidates.select(Axis(0), &picks))
}

/// Single-state form of [`extract_actions`].
pub fn extract_action<R: Rng + ?Sized>(
    state: &[f64],
    policy: &DiffusionPolicy,
    critic: &CriticEnsemble,
    n_a: usize,
    rng: &mut R,
) -> Result<Vec<f64>> {
    let s = ArrayView2::from_shape((1, state.len()), state).map_err(|e| DacError::Shape(e.to_string()))?;
    Ok(extract_actions(s, policy, critic, n_a, rng)?.row(0).to_vec())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub n_rollouts: usize,
    pub mean_reward: f64,
    pub reward_std: f64,
    pub min_reward: f64,
    pub max_reward: f64,
    pub r_support: f64,
    /// Fraction of actions within `r_support` of the nearest behavior action.
    pub in_support_fraction: f64,
    /// Fraction of behavior modes that received at least one in-support action.
    pub mode_coverage: f64,
    /// Fraction of all actions assigned to each mode (nearest anchor).
    pub mode_fractions: Vec<f64>,
    /// One mean reward per evaluation seed.
    pub per_seed_scores: Vec<f64>,
}

/// Distance from `a` to the closest row of `behavior`.
pub fn nearest_distance(a: &[f64], behavior: ArrayView2<f64>) -> f64 {
    behavior
        .rows()
        .into_iter()
        .map(|b| b.iter().zip(a).map(|(x, y)| (x - y).powi(2)).sum::<f64>())
        .fold(f64::INFINITY, f64::min)
        .sqrt()
}

/// Metrics over a set of bandit actions (order-independent). Support is
/// measured against the dataset's behavior actions; modes are the
/// generator's declared anchors.
pub fn bandit_report(actions: ArrayView2<f64>, behavior: ArrayView2<f64>, spec: &BanditSpec, r_support: f64) -> Result<EvalReport> {
    let n = actions.nrows();
    if n == 0 || actions.ncols() != 2 || behavior.nrows() == 0 || behavior.ncols() != 2 {
        return Err(DacError::Shape("bandit evaluation needs non-empty n x 2 action and behavior tables".into()));
    }
    let modes = spec.pattern.num_modes();
    let mut counts = vec![0usize; modes];
    let mut hit = vec![false; modes];
    let mut rewards = Vec::with_capacity(n);
    let mut inside = 0usize;
    for row in actions.rows() {
        let a = [row[0], row[1]];
        rewards.push(bandit_reward(&a, spec.goal));
        let k = spec.pattern.mode_of(&a);
        counts[k] += 1;
        if nearest_distance(&a, behavior) <= r_support {
            inside += 1;
            hit[k] = true;
        }
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    let var = rewards.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / n as f64;
    Ok(EvalReport {
        n_rollouts: n,
        mean_reward: mean,
        reward_std: var.sqrt(),
        min_reward: rewards.iter().cloned().fold(f64::INFINITY, f64::min),
        max_reward: rewards.iter().cloned().fold(f64::NEG_INFINITY, f64::max),
        r_support,
        in_support_fraction: inside as f64 / n as f64,
        mode_coverage: hit.iter().filter(|&&h| h).count() as f64 / modes as f64,
        mode_fractions: counts.iter().map(|&c| c as f64 / n as f64).collect(),
        per_seed_scores: vec![mean],
    })
}

/// `n_rollouts` extractions at the constant zero state, scored with the
/// noiseless reward.
#[allow(clippy::too_many_arguments)]
pub fn evaluate_bandit<R: Rng + ?Sized>(
    policy: &DiffusionPolicy,
    critic: &CriticEnsemble,
    dataset: &OfflineDataset,
    spec: &BanditSpec,
    n_rollouts: usize,
    r_support: f64,
    n_a: usize,
    rng: &mut R,
) -> Result<EvalReport> {
    let states = Array2::zeros((n_rollouts, policy.state_dim()));
    let actions = extract_actions(states.view(), policy, critic, n_a, rng)?;
    bandit_report(actions.view(), dataset.actions().view(), spec, r_support)
}

/// Combines per-seed reports; every count-weighted statistic is pooled.
pub fn merge_reports(reports: &[EvalReport]) -> Result<EvalReport> {
    let first = reports.first().ok_or_else(|| DacError::State("no reports to merge".into()))?;
    let total: usize = reports.iter().map(|r| r.n_rollouts).sum();
    let w = |r: &EvalReport| r.n_rollouts as f64 / total as f64;
    let mean = reports.iter().map(|r| w(r) * r.mean_reward).sum::<f64>();
    let second = reports.iter().map(|r| w(r) * (r.reward_std.powi(2) + r.mean_reward.powi(2))).sum::<f64>();
    Ok(EvalReport {
        n_rollouts: total,
        mean_reward: mean,
        reward_std: (second - mean * mean).max(0.0).sqrt(),
        min_reward: reports.iter().map(|r| r.min_reward).fold(f64::INFINITY, f64::min),
        max_reward: reports.iter().map(|r| r.max_reward).fold(f64::NEG_INFINITY, f64::max),
        r_support: first.r_support,
        in_support_fraction: reports.iter().map(|r| w(r) * r.in_support_fraction).sum(),
        mode_coverage: reports.iter().map(|r| r.mode_coverage).fold(0.0, f64::max),
        mode_fractions: (0..first.mode_fractions.len())
            .map(|k| reports.iter().map(|r| w(r) * r.mode_fractions[k]).sum())
            .collect(),
        per_seed_scores: reports.iter().flat_map(|r| r.per_seed_scores.iter().copied()).collect(),
    })
}

/// Sample moments of policy draws against the closed-form optimum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LqReport {
    pub n_samples: usize,
    pub eta: f64,
    pub sample_mean: Vec<f64>,
    pub sample_cov: Vec<Vec<f64>>,
    pub oracle_mean: Vec<f64>,
    pub oracle_cov: Vec<Vec<f64>>,
    pub behavior_mean: Vec<f64>,
    /// Euclidean distance between the sample mean and the oracle mean.
    pub mean_error: f64,
}

fn rows_of(m: &DMatrix<f64>) -> Vec<Vec<f64>> {
    (0..m.nrows()).map(|i| m.row(i).iter().copied().collect()).collect()
}

/// Moments of `actions` (one per row) against the oracle optimum at `eta`.
pub fn lq_report(actions: ArrayView2<f64>, oracle: &LqOracle, eta: f64) -> Result<LqReport> {
    let (n, d) = actions.dim();
    if n < 2 || d != oracle.dim() {
        return Err(DacError::Shape("LQ evaluation needs at least two samples of the oracle dimension".into()));
    }
    let mean = actions.mean_axis(Axis(0)).expect("non-empty");
    let centered = &actions - &mean.view().insert_axis(Axis(0));
    let cov = centered.t().dot(&centered) / (n as f64 - 1.0);
    let opt = oracle.optimum(eta)?;
    let mean_v = DVector::from_iterator(d, mean.iter().copied());
    Ok(LqReport {
        n_samples: n,
        eta,
        sample_mean: mean.to_vec(),
        sample_cov: cov.rows().into_iter().map(|r| r.to_vec()).collect(),
        oracle_mean: opt.mean.iter().copied().collect(),
        oracle_cov: rows_of(&opt.cov),
        behavior_mean: oracle.behavior().mean.iter().copied().collect(),
        mean_error: (&mean_v - &opt.mean).norm(),
    })
}

/// `n_samples` single-candidate extractions (plain policy samples).
pub fn evaluate_lq<R: Rng + ?Sized>(
    policy: &DiffusionPolicy,
    critic: &CriticEnsemble,
    oracle: &LqOracle,
    eta: f64,
    n_samples: usize,
    rng: &mut R,
) -> Result<LqReport> {
    let states = Array2::zeros((n_samples, policy.state_dim()));
    let actions = extract_actions(states.view(), policy, critic, 1, rng)?;
    lq_report(actions.view(), oracle, eta)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::actor::NoiseNet;
    use crate::critic::CriticSettings;
    use crate::data::{ActionBounds, BanditPattern, LqSpec};
    use crate::diffusion::make_vp_schedule;
    use dac_nn::{Activation, Linear, MlpParams};
    use ndarray::array;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn policy(seed: u64) -> DiffusionPolicy {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let net = NoiseNet::new(1, 2, 16, 2, 5, &mut rng);
        DiffusionPolicy::new(net, make_vp_schedule(5).unwrap(), ActionBounds::symmetric(2, 1.0)).unwrap()
    }

    fn linear_critic(w: [f64; 3], b: f64) -> CriticEnsemble {
        let net = MlpParams::from_layers(
            vec![Linear { weight: Array2::from_shape_vec((1, 3), w.to_vec()).unwrap(), bias: array![b] }],
            Activation::Identity,
        )
        .unwrap();
        CriticEnsemble::from_members(vec![net], CriticSettings { ensemble_size: 1, ..CriticSettings::default() }).unwrap()
    }

    #[test]
    fn single_candidate_is_the_drawn_sample() {
        let p = policy(1);
        let c = linear_critic([0.0, 5.0, -1.0], 0.0);
        let s = Array2::zeros((4, 1));
        let a = extract_actions(s.view(), &p, &c, 1, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let direct = p.sample_ema(s.view(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        assert_eq!(a, direct);
    }

    #[test]
    fn constant_q_picks_first_candidate() {
        let p = policy(2);
        let c = linear_critic([0.0, 0.0, 0.0], 1.0);
        let s = Array2::zeros((3, 1));
        let a = extract_actions(s.view(), &p, &c, 4, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let cands = p.sample_ema(repeat_rows(s.view(), 4).view(), &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        for i in 0..3 {
            assert_eq!(a.row(i), cands.row(4 * i));
        }
    }

    #[test]
    fn extraction_returns_a_candidate_with_maximal_q() {
        let p = policy(3);
        let c = linear_critic([0.0, 1.0, 0.5], 0.0);
        let s = Array2::zeros((5, 1));
        let a = extract_actions(s.view(), &p, &c, 6, &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        let cands = p.sample_ema(repeat_rows(s.view(), 6).view(), &mut ChaCha8Rng::seed_from_u64(8)).unwrap();
        for i in 0..5 {
            let rows: Vec<_> = (6 * i..6 * (i + 1)).map(|j| cands.row(j)).collect();
            assert!(rows.iter().any(|r| *r == a.row(i)));
            let best = rows.iter().map(|r| r[0] + 0.5 * r[1]).fold(f64::NEG_INFINITY, f64::max);
            assert_eq!(a[[i, 0]] + 0.5 * a[[i, 1]], best);
        }
    }

    #[test]
    fn report_statistics() {
        let spec = BanditSpec { pattern: BanditPattern::TwoMode, ..BanditSpec::default() };
        let behavior = array![[0.0, 0.0], [0.8, -0.8]];
        let actions = array![[0.0, 0.0], [0.8, -0.8], [0.05, 0.0], [0.0, 0.6]];
        let r = bandit_report(actions.view(), behavior.view(), &spec, 0.15).unwrap();
        assert_eq!(r.n_rollouts, 4);
        assert_eq!(r.in_support_fraction, 0.75);
        assert_eq!(r.mode_coverage, 1.0);
        assert_eq!(r.mode_fractions, vec![0.75, 0.25]);
        assert!(r.mean_reward >= r.min_reward && r.mean_reward <= r.max_reward);
        // permutation invariance
        let shuffled = array![[0.0, 0.6], [0.05, 0.0], [0.8, -0.8], [0.0, 0.0]];
        let q = bandit_report(shuffled.view(), behavior.view(), &spec, 0.15).unwrap();
        assert!((q.mean_reward - r.mean_reward).abs() < 1e-15);
        assert_eq!(q.in_support_fraction, r.in_support_fraction);
        assert_eq!(q.mode_fractions, r.mode_fractions);
    }

    #[test]
    fn eighty_rollouts_aggregate() {
        let p = policy(4);
        let c = linear_critic([0.0, 0.0, 0.0], 0.0);
        let spec = BanditSpec { n: 50, ..BanditSpec::default() };
        let ds = crate::data::generate_bandit_dataset(&spec).unwrap();
        let r = evaluate_bandit(&p, &c, &ds, &spec, 80, 0.15, 1, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(r.n_rollouts, 80);
    }

    #[test]
    fn nearest_behavior_distance() {
        let beh = array![[0.0, 0.0], [1.0, 0.0]];
        assert_eq!(nearest_distance(&[0.6, 0.0], beh.view()), 0.4);
        assert_eq!(nearest_distance(&[0.0, -0.3], beh.view()), 0.3);
    }

    #[test]
    fn merged_reports_pool_moments() {
        let spec = BanditSpec::default();
        let a = array![[0.8, 0.0], [0.0, 0.8]];
        let b = array![[0.0, -0.8], [0.3, 0.3], [-0.8, 0.0]];
        let all = ndarray::concatenate![Axis(0), a, b];
        let beh = array![[0.8, 0.0], [0.0, -0.8]];
        let rep = |x: &Array2<f64>| bandit_report(x.view(), beh.view(), &spec, 0.15).unwrap();
        let m = merge_reports(&[rep(&a), rep(&b)]).unwrap();
        let whole = rep(&all);
        assert!((m.mean_reward - whole.mean_reward).abs() < 1e-12);
        assert!((m.reward_std - whole.reward_std).abs() < 1e-12);
        assert!((m.in_support_fraction - whole.in_support_fraction).abs() < 1e-12);
        assert_eq!(m.per_seed_scores.len(), 2);
    }

    #[test]
    fn lq_report_against_oracle() {
        let oracle = LqOracle::new(LqSpec::default()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let opt = oracle.optimum(1.0).unwrap();
        let sd = opt.cov[(0, 0)].sqrt();
        let actions = Array2::from_shape_fn((20_000, 2), |(_, j)| opt.mean[j] + sd * rng.sample::<f64, _>(rand_distr::StandardNormal));
        let r = lq_report(actions.view(), &oracle, 1.0).unwrap();
        assert!(r.mean_error < 0.03);
        assert!((r.sample_cov[0][0] - 0.5).abs() < 0.03);
    }
}
