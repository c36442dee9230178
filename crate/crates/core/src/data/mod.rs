//! Offline transition datasets, reward tuning, batching and the two synthetic
//! generators (2-D bandit and linear-quadratic oracle).

mod bandit;
mod format;
mod lq;
mod meta;

pub use bandit::{bandit_reward, generate_bandit_dataset, BanditPattern, BanditSpec};
pub use format::{decode_dataset, encode_dataset, load_dataset, save_dataset, DATASET_MAGIC, DATASET_VERSION};
pub use lq::{generate_lq_dataset, Gaussian, LqOracle, LqSpec};
pub use meta::{dataset_hash, load_meta, meta_path, save_meta, DatasetMeta};

use ndarray::{Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{DacError, Result};

/// Per-dimension closed interval for actions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ActionBounds {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
}

impl ActionBounds {
    pub fn new(lo: Vec<f64>, hi: Vec<f64>) -> Result<Self> {
        if lo.len() != hi.len() {
            return Err(DacError::Shape("bounds dimension mismatch".into()));
        }
        if lo.iter().zip(&hi).any(|(l, h)| !(l < h)) {
            return Err(DacError::Range("lower bound must be below upper bound".into()));
        }
        Ok(ActionBounds { lo, hi })
    }

    /// `[-half_width, half_width]^dim`
    pub fn symmetric(dim: usize, half_width: f64) -> Self {
        ActionBounds { lo: vec![-half_width; dim], hi: vec![half_width; dim] }
    }

    pub fn dim(&self) -> usize {
        self.lo.len()
    }

    pub fn contains(&self, a: &[f64]) -> bool {
        a.len() == self.dim() && a.iter().enumerate().all(|(j, v)| *v >= self.lo[j] && *v <= self.hi[j])
    }

    pub fn clip(&self, a: &mut [f64]) {
        for (j, v) in a.iter_mut().enumerate() {
            *v = v.clamp(self.lo[j], self.hi[j]);
        }
    }

    pub fn clip_rows(&self, x: &mut Array2<f64>) {
        for mut row in x.rows_mut() {
            for (j, v) in row.iter_mut().enumerate() {
                *v = v.clamp(self.lo[j], self.hi[j]);
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub state: Vec<f64>,
    pub action: Vec<f64>,
    pub reward: f64,
    pub next_state: Vec<f64>,
    pub terminal: bool,
}

/// Column-major view of the transitions: one matrix row per transition.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineDataset {
    states: Array2<f64>,
    actions: Array2<f64>,
    rewards: Array1<f64>,
    next_states: Array2<f64>,
    terminals: Vec<bool>,
    trajectory_starts: Vec<usize>,
    bounds: ActionBounds,
}

impl OfflineDataset {
    pub fn from_transitions(
        transitions: &[Transition],
        trajectory_starts: Vec<usize>,
        state_dim: usize,
        bounds: ActionBounds,
    ) -> Result<Self> {
        let n = transitions.len();
        let ad = bounds.dim();
        let mut states = Array2::zeros((n, state_dim));
        let mut actions = Array2::zeros((n, ad));
        let mut next_states = Array2::zeros((n, state_dim));
        let mut rewards = Array1::zeros(n);
        let mut terminals = Vec::with_capacity(n);
        for (i, tr) in transitions.iter().enumerate() {
            if tr.state.len() != state_dim || tr.next_state.len() != state_dim || tr.action.len() != ad {
                return Err(DacError::Shape(format!("transition {i} has inconsistent dimensions")));
            }
            states.row_mut(i).assign(&Array1::from(tr.state.clone()));
            actions.row_mut(i).assign(&Array1::from(tr.action.clone()));
            next_states.row_mut(i).assign(&Array1::from(tr.next_state.clone()));
            rewards[i] = tr.reward;
            terminals.push(tr.terminal);
        }
        Self::from_parts(states, actions, rewards, next_states, terminals, trajectory_starts, bounds)
    }

    pub(crate) fn from_parts(
        states: Array2<f64>,
        actions: Array2<f64>,
        rewards: Array1<f64>,
        next_states: Array2<f64>,
        terminals: Vec<bool>,
        trajectory_starts: Vec<usize>,
        bounds: ActionBounds,
    ) -> Result<Self> {
        let n = states.nrows();
        if actions.nrows() != n || rewards.len() != n || next_states.nrows() != n || terminals.len() != n {
            return Err(DacError::Shape("transition columns have different lengths".into()));
        }
        if actions.ncols() != bounds.dim() || next_states.ncols() != states.ncols() {
            return Err(DacError::Shape("dimension mismatch between columns and bounds".into()));
        }
        if n > 0 && trajectory_starts.first() != Some(&0) {
            return Err(DacError::State("trajectory starts must begin at 0".into()));
        }
        if trajectory_starts.windows(2).any(|w| w[0] >= w[1]) || trajectory_starts.iter().any(|&s| s >= n.max(1)) {
            return Err(DacError::State("trajectory starts must be strictly increasing and in range".into()));
        }
        let finite = states.iter().chain(actions.iter()).chain(rewards.iter()).chain(next_states.iter()).all(|v| v.is_finite());
        if !finite {
            return Err(DacError::Numeric("dataset contains non-finite values".into()));
        }
        for (i, row) in actions.rows().into_iter().enumerate() {
            if !bounds.contains(row.as_slice().expect("contiguous rows")) {
                return Err(DacError::Range(format!("action {i} outside the action box")));
            }
        }
        Ok(OfflineDataset { states, actions, rewards, next_states, terminals, trajectory_starts, bounds })
    }

    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn state_dim(&self) -> usize {
        self.states.ncols()
    }

    pub fn action_dim(&self) -> usize {
        self.actions.ncols()
    }

    pub fn bounds(&self) -> &ActionBounds {
        &self.bounds
    }

    pub fn trajectory_starts(&self) -> &[usize] {
        &self.trajectory_starts
    }

    pub fn states(&self) -> &Array2<f64> {
        &self.states
    }

    pub fn actions(&self) -> &Array2<f64> {
        &self.actions
    }

    pub fn rewards(&self) -> &Array1<f64> {
        &self.rewards
    }

    pub fn next_states(&self) -> &Array2<f64> {
        &self.next_states
    }

    pub fn terminals(&self) -> &[bool] {
        &self.terminals
    }

    pub fn transition(&self, i: usize) -> Transition {
        Transition {
            state: self.states.row(i).to_vec(),
            action: self.actions.row(i).to_vec(),
            reward: self.rewards[i],
            next_state: self.next_states.row(i).to_vec(),
            terminal: self.terminals[i],
        }
    }

    /// Undiscounted return of every trajectory, in order.
    pub fn trajectory_returns(&self) -> Vec<f64> {
        let n = self.len();
        self.trajectory_starts
            .iter()
            .enumerate()
            .map(|(k, &start)| {
                let end = self.trajectory_starts.get(k + 1).copied().unwrap_or(n);
                self.rewards.slice(ndarray::s![start..end]).sum()
            })
            .collect()
    }

    pub(crate) fn with_rewards(&self, rewards: Array1<f64>) -> Self {
        OfflineDataset { rewards, ..self.clone() }
    }
}

/// Rows gathered from a dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub states: Array2<f64>,
    pub actions: Array2<f64>,
    pub rewards: Array1<f64>,
    pub next_states: Array2<f64>,
    pub terminals: Vec<bool>,
}

impl Batch {
    pub fn len(&self) -> usize {
        self.states.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn all_terminal(&self) -> bool {
        self.terminals.iter().all(|&t| t)
    }

    pub fn gather(ds: &OfflineDataset, idx: &[usize]) -> Self {
        Batch {
            states: ds.states.select(ndarray::Axis(0), idx),
            actions: ds.actions.select(ndarray::Axis(0), idx),
            rewards: idx.iter().map(|&i| ds.rewards[i]).collect(),
            next_states: ds.next_states.select(ndarray::Axis(0), idx),
            terminals: idx.iter().map(|&i| ds.terminals[i]).collect(),
        }
    }
}

/// Uniform sampling with replacement.
pub fn sample_batch<R: Rng + ?Sized>(ds: &OfflineDataset, size: usize, rng: &mut R) -> Result<Batch> {
    if ds.is_empty() {
        return Err(DacError::State("cannot sample from an empty dataset".into()));
    }
    if size == 0 {
        return Err(DacError::Range("batch size must be at least 1".into()));
    }
    let idx: Vec<usize> = (0..size).map(|_| rng.gen_range(0..ds.len())).collect();
    Ok(Batch::gather(ds, &idx))
}

/// `r <- 1000 r / (max return - min return)` over trajectory returns.
pub fn tune_rewards(ds: &OfflineDataset) -> Result<OfflineDataset> {
    let returns = ds.trajectory_returns();
    if returns.len() < 2 {
        return Err(DacError::DegenerateRange("reward tuning needs at least two trajectories".into()));
    }
    let max = returns.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let min = returns.iter().cloned().fold(f64::INFINITY, f64::min);
    let span = max - min;
    if !(span > 0.0) {
        return Err(DacError::DegenerateRange(format!("all trajectory returns equal {max}")));
    }
    Ok(ds.with_rewards(ds.rewards.mapv(|r| 1000.0 * r / span)))
}
