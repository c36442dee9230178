use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use super::{ActionBounds, OfflineDataset, Transition};
use crate::error::{DacError, Result};

/// Layout of the behavior actions before Gaussian noise is added.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BanditPattern {
    /// Eight clusters evenly spaced on a circle of radius 0.8.
    Ring,
    /// Two facing circular arcs.
    Crescent,
    /// Nine clusters on the grid {-0.6, 0, 0.6}^2.
    Grid,
    /// Two clusters at (0, 0) and (0.8, -0.8), equidistant from the default goal.
    TwoMode,
}

const RING_RADIUS: f64 = 0.8;
const ARC_RADIUS: f64 = 0.6;
const ARC_OFFSET: f64 = 0.2;
const GRID_STEP: f64 = 0.6;
const ARC_CHECKPOINTS: usize = 720;

impl BanditPattern {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "ring" => Ok(BanditPattern::Ring),
            "crescent" => Ok(BanditPattern::Crescent),
            "grid" => Ok(BanditPattern::Grid),
            "two-mode" => Ok(BanditPattern::TwoMode),
            other => Err(DacError::Validation(vec![format!("unknown bandit pattern '{other}'")])),
        }
    }

    /// Cluster centers for the clustered patterns; the crescent has none.
    pub fn anchors(&self) -> Vec<[f64; 2]> {
        match self {
            BanditPattern::Ring => (0..8)
                .map(|k| {
                    let th = 2.0 * PI * k as f64 / 8.0;
                    [RING_RADIUS * th.cos(), RING_RADIUS * th.sin()]
                })
                .collect(),
            BanditPattern::Grid => {
                let g = [-GRID_STEP, 0.0, GRID_STEP];
                g.iter().flat_map(|&x| g.iter().map(move |&y| [x, y])).collect()
            }
            BanditPattern::TwoMode => vec![[0.0, 0.0], [0.8, -0.8]],
            BanditPattern::Crescent => Vec::new(),
        }
    }

    /// Point on arc `arc` (0 = upper, 1 = lower) at fraction `u` in [0, 1].
    fn arc_point(arc: usize, u: f64) -> [f64; 2] {
        let (cy, th) = if arc == 0 {
            (-ARC_OFFSET, PI * (0.1 + 0.8 * u))
        } else {
            (ARC_OFFSET, PI * (1.1 + 0.8 * u))
        };
        [ARC_RADIUS * th.cos(), cy + ARC_RADIUS * th.sin()]
    }

    fn draw_center<R: Rng + ?Sized>(&self, rng: &mut R) -> [f64; 2] {
        match self {
            BanditPattern::Crescent => {
                let arc = rng.gen_range(0..2);
                Self::arc_point(arc, rng.gen::<f64>())
            }
            _ => {
                let anchors = self.anchors();
                anchors[rng.gen_range(0..anchors.len())]
            }
        }
    }

    /// Euclidean distance from `a` to the noiseless behavior layout.
    pub fn support_distance(&self, a: &[f64]) -> f64 {
        let d = |p: [f64; 2]| ((a[0] - p[0]).powi(2) + (a[1] - p[1]).powi(2)).sqrt();
        match self {
            BanditPattern::Crescent => (0..2)
                .flat_map(|arc| (0..=ARC_CHECKPOINTS).map(move |k| Self::arc_point(arc, k as f64 / ARC_CHECKPOINTS as f64)))
                .map(d)
                .fold(f64::INFINITY, f64::min),
            _ => self.anchors().into_iter().map(d).fold(f64::INFINITY, f64::min),
        }
    }

    /// Index of the nearest anchor (for the crescent: 0 = upper arc, 1 = lower arc).
    pub fn mode_of(&self, a: &[f64]) -> usize {
        let d = |p: [f64; 2]| (a[0] - p[0]).powi(2) + (a[1] - p[1]).powi(2);
        let candidates: Vec<[f64; 2]> = match self {
            BanditPattern::Crescent => vec![[0.0, -ARC_OFFSET + ARC_RADIUS], [0.0, ARC_OFFSET - ARC_RADIUS]],
            _ => self.anchors(),
        };
        candidates
            .iter()
            .enumerate()
            .min_by(|x, y| d(*x.1).total_cmp(&d(*y.1)))
            .map(|(i, _)| i)
            .unwrap_or(0)
    }

    pub fn num_modes(&self) -> usize {
        match self {
            BanditPattern::Crescent => 2,
            _ => self.anchors().len(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BanditSpec {
    pub n: usize,
    pub pattern: BanditPattern,
    pub noise_std: f64,
    pub goal: [f64; 2],
    pub reward_noise_std: f64,
    pub seed: u64,
}

impl Default for BanditSpec {
    fn default() -> Self {
        BanditSpec { n: 400, pattern: BanditPattern::Ring, noise_std: 0.05, goal: [0.4, -0.4], reward_noise_std: 0.5, seed: 0 }
    }
}

impl BanditSpec {
    pub fn bounds() -> ActionBounds {
        ActionBounds::symmetric(2, 1.0)
    }
}

/// Noiseless bandit reward: negative distance to the goal.
pub fn bandit_reward(a: &[f64], goal: [f64; 2]) -> f64 {
    -((a[0] - goal[0]).powi(2) + (a[1] - goal[1]).powi(2)).sqrt()
}

/// Single-step dataset conditioned on a constant zero scalar state; every
/// transition is terminal and forms its own trajectory.
pub fn generate_bandit_dataset(spec: &BanditSpec) -> Result<OfflineDataset> {
    if spec.n == 0 {
        return Err(DacError::Range("bandit sample count must be at least 1".into()));
    }
    if !(spec.noise_std >= 0.0) || !(spec.reward_noise_std >= 0.0) {
        return Err(DacError::Range("noise standard deviations must be non-negative".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let std = Normal::new(0.0, 1.0).expect("unit normal");
    let bounds = BanditSpec::bounds();
    let transitions: Vec<Transition> = (0..spec.n)
        .map(|_| {
            let c = spec.pattern.draw_center(&mut rng);
            let mut a = vec![c[0] + spec.noise_std * std.sample(&mut rng), c[1] + spec.noise_std * std.sample(&mut rng)];
            bounds.clip(&mut a);
            let r = bandit_reward(&a, spec.goal) + spec.reward_noise_std * std.sample(&mut rng);
            Transition { state: vec![0.0], action: a, reward: r, next_state: vec![0.0], terminal: true }
        })
        .collect();
    OfflineDataset::from_transitions(&transitions, (0..spec.n).collect(), 1, bounds)
}
