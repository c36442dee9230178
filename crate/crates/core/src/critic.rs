//! Q-network ensemble with EMA targets, pessimistic (LCB) Bellman targets and
//! the scale-normalized ensemble action gradient used for guidance.

use dac_nn::{bind_params, collect_gradients, ema_update, Gradients, MlpParams, Tape, Var};
use ndarray::{concatenate, Array1, Array2, ArrayView2, Axis};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::data::OfflineDataset;
use crate::error::{DacError, Result};

/// Lower bound on the Q scale so the guidance never divides by ~0.
pub const SCALE_FLOOR: f64 = 1e-6;

/// How member values are reduced into one pessimistic value.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TargetKind {
    /// mean - rho * population std
    Lcb,
    /// minimum over members
    Min,
}

/// Reduction over the M sampled next actions.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ValueTargetMode {
    Mean,
    Max,
}

/// Whether next actions are reduced within each member before the
/// cross-member pessimism, or after it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum AggregationOrder {
    ActionsThenMembers,
    MembersThenActions,
}

/// `mean(values) - rho * sqrt(population variance(values))`.
pub fn lcb(values: &[f64], rho: f64) -> Result<f64> {
    if values.is_empty() {
        return Err(DacError::Shape("lcb needs at least one value".into()));
    }
    if !(rho >= 0.0) {
        return Err(DacError::Range(format!("pessimism factor must be non-negative, got {rho}")));
    }
    let h = values.len() as f64;
    let mean = values.iter().sum::<f64>() / h;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / h;
    Ok(mean - rho * var.sqrt())
}

fn reduce_members(values: &[f64], kind: TargetKind, rho: f64) -> Result<f64> {
    match kind {
        TargetKind::Lcb => lcb(values, rho),
        TargetKind::Min => {
            if values.is_empty() {
                return Err(DacError::Shape("min needs at least one value".into()));
            }
            Ok(values.iter().cloned().fold(f64::INFINITY, f64::min))
        }
    }
}

fn reduce_actions(values: impl Iterator<Item = f64>, mode: ValueTargetMode) -> f64 {
    match mode {
        ValueTargetMode::Mean => {
            let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
            s / n as f64
        }
        ValueTargetMode::Max => values.fold(f64::NEG_INFINITY, f64::max),
    }
}

/// Reduces target values laid out as `[member][row][draw]` (H x B x M) into
/// one value per row.
pub fn aggregate_next_values(
    values: &[Array2<f64>],
    kind: TargetKind,
    rho: f64,
    mode: ValueTargetMode,
    order: AggregationOrder,
) -> Result<Array1<f64>> {
    let first = values.first().ok_or_else(|| DacError::Shape("no ensemble members".into()))?;
    let (b, m) = first.dim();
    if m == 0 {
        return Err(DacError::Range("need at least one next action".into()));
    }
    if values.iter().any(|v| v.dim() != (b, m)) {
        return Err(DacError::Shape("member value tables differ in shape".into()));
    }
    let mut out = Array1::zeros(b);
    for i in 0..b {
        out[i] = match order {
            AggregationOrder::ActionsThenMembers => {
                let per_member: Vec<f64> = values.iter().map(|v| reduce_actions(v.row(i).iter().copied(), mode)).collect();
                reduce_members(&per_member, kind, rho)?
            }
            AggregationOrder::MembersThenActions => {
                let per_draw = (0..m)
                    .map(|j| reduce_members(&values.iter().map(|v| v[[i, j]]).collect::<Vec<_>>(), kind, rho))
                    .collect::<Result<Vec<f64>>>()?;
                reduce_actions(per_draw.into_iter(), mode)
            }
        };
    }
    Ok(out)
}

/// `r + gamma * (1 - terminal) * V(s')`.
pub fn bellman_targets(rewards: &Array1<f64>, terminals: &[bool], gamma: f64, next_values: &Array1<f64>) -> Result<Array1<f64>> {
    if rewards.len() != terminals.len() || rewards.len() != next_values.len() {
        return Err(DacError::Shape("rewards, terminals and next values differ in length".into()));
    }
    Ok(Array1::from_iter(
        (0..rewards.len()).map(|i| rewards[i] + if terminals[i] { 0.0 } else { gamma * next_values[i] }),
    ))
}

fn join(states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array2<f64>> {
    if states.nrows() != actions.nrows() {
        return Err(DacError::Shape(format!("{} states but {} actions", states.nrows(), actions.nrows())));
    }
    Ok(concatenate![Axis(1), states, actions])
}

/// Q values of one network on a batch, as a flat vector.
pub fn q_values(net: &MlpParams, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
    let out = net.forward_batch(join(states, actions)?.view())?;
    Ok(out.column(0).to_owned())
}

/// Squared Bellman error of one member against fixed targets.
#[derive(Debug, Clone, PartialEq)]
pub struct MemberLoss {
    pub loss: f64,
    pub grads: Gradients,
    /// The member's Q predictions on the batch.
    pub q: Array1<f64>,
}

pub fn member_loss(
    member: &MlpParams,
    states: ArrayView2<f64>,
    actions: ArrayView2<f64>,
    targets: &Array1<f64>,
) -> Result<MemberLoss> {
    if targets.len() != states.nrows() {
        return Err(DacError::Shape(format!("{} targets for {} rows", targets.len(), states.nrows())));
    }
    let input = join(states, actions)?;
    let mut tape = Tape::new();
    let bound = bind_params(&mut tape, member, true);
    let x = tape.constant(input);
    let q = member.forward_tape(&mut tape, &bound, x)?;
    let yv = tape.constant(targets.clone().insert_axis(Axis(1)));
    let d = tape.sub(q, yv)?;
    let sq = tape.square(d);
    let loss = tape.mean(sq);
    let mut g = tape.backward(loss)?;
    Ok(MemberLoss {
        loss: tape.scalar_value(loss),
        grads: collect_gradients(&mut g, &bound, member),
        q: tape.value(q).column(0).to_owned(),
    })
}

/// Value and action-gradient of one network at `(states, x)`.
pub fn q_and_action_grad(net: &MlpParams, states: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<(Array1<f64>, Array2<f64>)> {
    let sd = states.ncols();
    let mut tape = Tape::new();
    let bound = net.bind(&mut tape, false);
    let sv = tape.constant(states.to_owned());
    let xv = tape.leaf(x.to_owned());
    let input = tape.concat_cols(&[sv, xv])?;
    let q = net.forward_tape(&mut tape, &bound, input)?;
    let values = tape.value(q).column(0).to_owned();
    let total = tape.sum(q);
    let mut g = tape.backward(total)?;
    let gx = g.take(xv).unwrap_or_else(|| Array2::zeros(x.raw_dim()));
    debug_assert_eq!(gx.ncols() + sd, net.input_dim());
    Ok((values, gx))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CriticSettings {
    pub ensemble_size: usize,
    pub rho: f64,
    pub gamma: f64,
    pub target_kind: TargetKind,
    pub value_mode: ValueTargetMode,
    pub order: AggregationOrder,
}

impl Default for CriticSettings {
    fn default() -> Self {
        CriticSettings {
            ensemble_size: 10,
            rho: 1.0,
            gamma: 0.99,
            target_kind: TargetKind::Lcb,
            value_mode: ValueTargetMode::Mean,
            order: AggregationOrder::ActionsThenMembers,
        }
    }
}

/// H online Q-networks, their EMA twins and the current Q scale.
#[derive(Debug, Clone, PartialEq)]
pub struct CriticEnsemble {
    pub members: Vec<MlpParams>,
    pub targets: Vec<MlpParams>,
    pub settings: CriticSettings,
    pub scale_c: f64,
}

impl CriticEnsemble {
    pub fn new<R: Rng + ?Sized>(
        state_dim: usize,
        action_dim: usize,
        hidden: usize,
        depth: usize,
        settings: CriticSettings,
        rng: &mut R,
    ) -> Result<Self> {
        if settings.ensemble_size == 0 {
            return Err(DacError::Range("ensemble size must be at least 1".into()));
        }
        let members: Vec<MlpParams> =
            (0..settings.ensemble_size).map(|_| MlpParams::new(state_dim + action_dim, hidden, depth, 1, rng)).collect();
        Self::from_members(members, settings)
    }

    /// Targets start as exact copies of the members; the scale starts at 1.
    pub fn from_members(members: Vec<MlpParams>, settings: CriticSettings) -> Result<Self> {
        if members.is_empty() {
            return Err(DacError::Range("ensemble size must be at least 1".into()));
        }
        if !(settings.rho >= 0.0) {
            return Err(DacError::Range("pessimism factor must be non-negative".into()));
        }
        if !(settings.gamma >= 0.0 && settings.gamma < 1.0) {
            return Err(DacError::Range(format!("discount must lie in [0, 1), got {}", settings.gamma)));
        }
        let shape = (members[0].input_dim(), members[0].output_dim());
        if members.iter().any(|m| (m.input_dim(), m.output_dim()) != shape) || shape.1 != 1 {
            return Err(DacError::Shape("ensemble members must share one scalar-output architecture".into()));
        }
        let targets = members.clone();
        let ensemble_size = members.len();
        Ok(CriticEnsemble { members, targets, settings: CriticSettings { ensemble_size, ..settings }, scale_c: 1.0 })
    }

    pub fn size(&self) -> usize {
        self.members.len()
    }

    /// Target-network values, one row per member: H x B.
    pub fn target_values(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Vec<Array1<f64>>> {
        let input = join(states, actions)?;
        self.targets.iter().map(|t| Ok(t.forward_batch(input.view())?.column(0).to_owned())).collect()
    }

    /// Ensemble-mean target Q per row.
    pub fn mean_q(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        let vals = self.target_values(states, actions)?;
        let mut acc = Array1::zeros(states.nrows());
        for v in &vals {
            acc += v;
        }
        Ok(acc / vals.len() as f64)
    }

    /// Per-row LCB of target values (with this ensemble's rho).
    pub fn lcb_q(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<Array1<f64>> {
        let vals = self.target_values(states, actions)?;
        (0..states.nrows())
            .map(|i| lcb(&vals.iter().map(|v| v[i]).collect::<Vec<_>>(), self.settings.rho))
            .collect::<Result<Vec<_>>>()
            .map(Array1::from)
    }

    /// Pessimistic value of each next state, given `m` next actions per row
    /// stacked row-major (row `i` owns actions `i*m .. (i+1)*m`).
    pub fn next_values(&self, next_states: ArrayView2<f64>, next_actions: ArrayView2<f64>, m: usize) -> Result<Array1<f64>> {
        let b = next_states.nrows();
        if m == 0 || next_actions.nrows() != b * m {
            return Err(DacError::Shape(format!("expected {} next actions, got {}", b * m, next_actions.nrows())));
        }
        let repeated = repeat_rows(next_states, m);
        let tables: Vec<Array2<f64>> = self
            .target_values(repeated.view(), next_actions)?
            .into_iter()
            .map(|v| v.into_shape_with_order((b, m)).expect("b*m values"))
            .collect();
        aggregate_next_values(&tables, self.settings.target_kind, self.settings.rho, self.settings.value_mode, self.settings.order)
    }

    /// Bellman targets for a batch from pre-sampled next actions (`m` per row).
    /// When every row is terminal no next actions are needed and `next_actions`
    /// may be `None`.
    pub fn targets_for(
        &self,
        rewards: &Array1<f64>,
        terminals: &[bool],
        next_states: ArrayView2<f64>,
        next_actions: Option<ArrayView2<f64>>,
        m: usize,
    ) -> Result<Array1<f64>> {
        let next = match next_actions {
            Some(a) => self.next_values(next_states, a, m)?,
            None if terminals.iter().all(|&t| t) => Array1::zeros(rewards.len()),
            None => return Err(DacError::State("non-terminal transitions need next actions".into())),
        };
        bellman_targets(rewards, terminals, self.settings.gamma, &next)
    }

    /// Loss and gradients of every member against shared targets.
    pub fn member_losses(
        &self,
        states: ArrayView2<f64>,
        actions: ArrayView2<f64>,
        targets: &Array1<f64>,
    ) -> Result<Vec<MemberLoss>> {
        self.members.iter().map(|m| member_loss(m, states, actions, targets)).collect()
    }

    /// Mean over sampled dataset pairs and members of `|Q_target|`, floored.
    pub fn estimate_scale_c<R: Rng + ?Sized>(&mut self, ds: &OfflineDataset, sample_size: usize, rng: &mut R) -> Result<f64> {
        if sample_size == 0 {
            return Err(DacError::Range("scale sample size must be at least 1".into()));
        }
        if ds.is_empty() {
            return Err(DacError::State("cannot estimate the Q scale on an empty dataset".into()));
        }
        let idx: Vec<usize> = (0..sample_size).map(|_| rng.gen_range(0..ds.len())).collect();
        let states = ds.states().select(Axis(0), &idx);
        let actions = ds.actions().select(Axis(0), &idx);
        self.scale_c = self.scale_on(states.view(), actions.view())?;
        Ok(self.scale_c)
    }

    /// Scale estimate on explicit pairs, without storing it.
    pub fn scale_on(&self, states: ArrayView2<f64>, actions: ArrayView2<f64>) -> Result<f64> {
        let vals = self.target_values(states, actions)?;
        let n = (vals.len() * states.nrows()) as f64;
        let c = vals.iter().map(|v| v.iter().map(|q| q.abs()).sum::<f64>()).sum::<f64>() / n;
        if !c.is_finite() {
            return Err(DacError::Numeric("Q scale is not finite".into()));
        }
        Ok(c.max(SCALE_FLOOR))
    }

    /// `(1 / (H C)) sum_h grad_x Q_target_h(s, x)`, evaluated at arbitrary
    /// (possibly out-of-box) points.
    pub fn q_gradient(&self, states: ArrayView2<f64>, x: ArrayView2<f64>) -> Result<Array2<f64>> {
        let mut acc = Array2::zeros(x.raw_dim());
        for t in &self.targets {
            acc += &q_and_action_grad(t, states, x)?.1;
        }
        acc /= self.size() as f64 * self.scale_c;
        if acc.iter().any(|v| !v.is_finite()) {
            return Err(DacError::Numeric("Q-gradient is not finite".into()));
        }
        Ok(acc)
    }

    /// Ensemble-mean target Q of `(states, actions)` recorded on `tape`, so
    /// gradients can flow into `actions`. Returns a B x 1 node.
    pub fn mean_q_on_tape(&self, tape: &mut Tape, states: Var, actions: Var) -> Result<Var> {
        let input = tape.concat_cols(&[states, actions])?;
        let mut total: Option<Var> = None;
        for t in &self.targets {
            let bound = t.bind(tape, false);
            let q = t.forward_tape(tape, &bound, input)?;
            total = Some(match total {
                None => q,
                Some(acc) => tape.add(acc, q)?,
            });
        }
        let total = total.expect("non-empty ensemble");
        Ok(tape.scale(total, 1.0 / self.size() as f64))
    }

    /// EMA step of every target toward its member.
    pub fn update_targets(&mut self, alpha: f64) -> Result<()> {
        for (t, m) in self.targets.iter_mut().zip(&self.members) {
            ema_update(t, m, alpha)?;
        }
        Ok(())
    }
}

/// Repeats each row `m` times consecutively.
pub fn repeat_rows(x: ArrayView2<f64>, m: usize) -> Array2<f64> {
    let idx: Vec<usize> = (0..x.nrows()).flat_map(|i| std::iter::repeat(i).take(m)).collect();
    x.select(Axis(0), &idx)
}
