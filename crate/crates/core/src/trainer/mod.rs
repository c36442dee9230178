//! The training loop: interleaved critic and actor updates, EMA targets,
//! multiplier ascent, learning-rate decay, metrics and checkpoints.

mod checkpoint;
mod config;

pub use checkpoint::{
    checkpoint_dir_name, latest_checkpoint, load_checkpoint, read_manifest, resolve_checkpoint, save_checkpoint, CheckpointManifest,
    LATEST_FILE, MANIFEST_FILE,
};
pub use config::{EtaConfig, TrainConfig};

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

use dac_nn::{adam_step, cosine_lr, AdamState};
use ndarray::Array1;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actor::{actor_loss, eta_step, ActorDraws, ActorLossInputs, DiffusionPolicy, EtaController, NoiseNet};
use crate::critic::{lcb, repeat_rows, CriticEnsemble};
use crate::data::{sample_batch, tune_rewards, OfflineDataset};
use crate::diffusion::make_vp_schedule;
use crate::error::{DacError, Result};

pub const METRICS_FILE: &str = "metrics.csv";
pub const METRICS_HEADER: &str = "step,actor_loss,bc_loss,guidance_term,critic_loss_mean,q_mean,q_lcb_gap,eta,C,lr";

/// Independent random streams, one per purpose, so that e.g. the critic's
/// trajectory does not depend on how many draws the actor consumed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RngStreams {
    pub batch: ChaCha8Rng,
    pub policy: ChaCha8Rng,
    pub actor: ChaCha8Rng,
    pub denoise: ChaCha8Rng,
    pub scale: ChaCha8Rng,
}

/// Stream `k` of the run seed.
pub fn substream(seed: u64, k: u64) -> ChaCha8Rng {
    let mut r = ChaCha8Rng::seed_from_u64(seed);
    r.set_stream(k);
    r
}

const STREAM_ACTOR_INIT: u64 = 5;
const STREAM_CRITIC_INIT: u64 = 6;

impl RngStreams {
    pub fn new(seed: u64) -> Self {
        RngStreams {
            batch: substream(seed, 0),
            policy: substream(seed, 1),
            actor: substream(seed, 2),
            denoise: substream(seed, 3),
            scale: substream(seed, 4),
        }
    }
}

/// Everything needed to continue training bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub config: TrainConfig,
    pub policy: DiffusionPolicy,
    pub critic: CriticEnsemble,
    pub actor_opt: AdamState,
    pub critic_opts: Vec<AdamState>,
    pub eta: EtaController,
    pub step: u64,
    pub rng: RngStreams,
}

/// Diagnostics of one update.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StepMetrics {
    pub step: u64,
    pub actor_loss: f64,
    pub bc_loss: f64,
    pub guidance_term: f64,
    pub critic_loss_mean: f64,
    pub q_mean: f64,
    pub q_lcb_gap: f64,
    pub eta: f64,
    pub scale_c: f64,
    pub lr: f64,
}

impl StepMetrics {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{},{},{}",
            self.step,
            self.actor_loss,
            self.bc_loss,
            self.guidance_term,
            self.critic_loss_mean,
            self.q_mean,
            self.q_lcb_gap,
            self.eta,
            self.scale_c,
            self.lr
        )
    }
}

/// Applies reward tuning when the config asks for it.
pub fn prepare_dataset(config: &TrainConfig, ds: &OfflineDataset) -> Result<OfflineDataset> {
    if config.tune_rewards {
        tune_rewards(ds)
    } else {
        Ok(ds.clone())
    }
}

/// Fresh networks (EMA twins equal to their online copies), optimizers, the
/// initial multiplier and a first estimate of the Q scale.
pub fn init_state(config: &TrainConfig, ds: &OfflineDataset) -> Result<TrainState> {
    config.validate()?;
    if ds.is_empty() {
        return Err(DacError::State("training needs a non-empty dataset".into()));
    }
    let (sd, ad) = (ds.state_dim(), ds.action_dim());
    let schedule = make_vp_schedule(config.diffusion_steps)?;
    let net = NoiseNet::new(
        sd,
        ad,
        config.actor_hidden,
        config.actor_depth,
        config.diffusion_steps,
        &mut substream(config.seed, STREAM_ACTOR_INIT),
    );
    let policy = DiffusionPolicy::new(net, schedule, ds.bounds().clone())?;
    let members = (0..config.ensemble_size as u64)
        .map(|h| {
            dac_nn::MlpParams::new(
                sd + ad,
                config.critic_hidden,
                config.critic_depth,
                1,
                &mut substream(config.seed, STREAM_CRITIC_INIT + h),
            )
        })
        .collect();
    let mut critic = CriticEnsemble::from_members(members, config.critic_settings())?;
    let mut rng = RngStreams::new(config.seed);
    critic.estimate_scale_c(ds, config.scale_sample, &mut rng.scale)?;
    let actor_opt = AdamState::new(&policy.net);
    let critic_opts = critic.members.iter().map(AdamState::new).collect();
    Ok(TrainState { config: config.clone(), policy, critic, actor_opt, critic_opts, eta: config.eta.controller(), step: 0, rng })
}

fn diverged(state: &TrainState, actor_loss: f64, critic_loss: f64) -> DacError {
    DacError::Diverged { step: state.step + 1, actor_loss, critic_loss, eta: state.eta.eta, scale: state.critic.scale_c }
}

fn critic_diverged(step: u64, eta: f64, scale: f64, critic_loss: f64) -> DacError {
    DacError::Diverged { step: step + 1, actor_loss: f64::NAN, critic_loss, eta, scale }
}

fn is_numeric_failure(e: &DacError) -> bool {
    matches!(e, DacError::Numeric(_) | DacError::NonFiniteStep { .. } | DacError::Nn(dac_nn::NnError::NonFinite { .. }))
}

/// One iteration: batch, next actions from the EMA policy, critic updates,
/// critic target EMA, guided actor update, multiplier ascent, actor target
/// EMA every `actor_target_period` steps.
pub fn train_step(state: &mut TrainState, ds: &OfflineDataset) -> Result<StepMetrics> {
    let cfg = state.config.clone();
    if state.step >= cfg.steps {
        return Err(DacError::State(format!("run already completed {} steps", cfg.steps)));
    }
    let (lr_a, lr_c) = if cfg.lr_decay {
        (cosine_lr(state.step, cfg.steps, cfg.lr_actor)?, cosine_lr(state.step, cfg.steps, cfg.lr_critic)?)
    } else {
        (cfg.lr_actor, cfg.lr_critic)
    };
    if state.step > 0 && state.step % cfg.scale_refresh == 0 {
        state.critic.estimate_scale_c(ds, cfg.scale_sample, &mut state.rng.scale)?;
    }

    let batch = sample_batch(ds, cfg.batch_size, &mut state.rng.batch)?;
    let next_actions = if batch.all_terminal() {
        None
    } else {
        let repeated = repeat_rows(batch.next_states.view(), cfg.next_actions);
        Some(state.policy.sample_ema(repeated.view(), &mut state.rng.policy)?)
    };
    let targets = state.critic.targets_for(
        &batch.rewards,
        &batch.terminals,
        batch.next_states.view(),
        next_actions.as_ref().map(|a| a.view()),
        cfg.next_actions,
    )?;
    let losses = state.critic.member_losses(batch.states.view(), batch.actions.view(), &targets)?;
    let critic_loss_mean = losses.iter().map(|l| l.loss).sum::<f64>() / losses.len() as f64;
    if !critic_loss_mean.is_finite() {
        return Err(diverged(state, f64::NAN, critic_loss_mean));
    }
    let (q_mean, q_lcb_gap) = q_statistics(&losses.iter().map(|l| &l.q).collect::<Vec<_>>(), cfg.rho)?;
    let (step, eta, scale) = (state.step, state.eta.eta, state.critic.scale_c);
    for ((member, opt), l) in state.critic.members.iter_mut().zip(&mut state.critic_opts).zip(&losses) {
        adam_step(member, &l.grads, opt, lr_c).map_err(|_| critic_diverged(step, eta, scale, critic_loss_mean))?;
    }
    state.critic.update_targets(cfg.ema_alpha)?;

    let draws = ActorDraws::sample(batch.actions.view(), &state.policy.schedule, &mut state.rng.actor)?;
    let inputs = ActorLossInputs {
        states: batch.states.view(),
        draws: &draws,
        mode: cfg.guidance,
        eta: state.eta.eta,
        denoised_samples: cfg.denoised_samples,
    };
    let out = match actor_loss(&state.policy, &inputs, &state.critic, &mut state.rng.denoise) {
        Ok(o) => o,
        Err(e) if is_numeric_failure(&e) => return Err(diverged(state, f64::NAN, critic_loss_mean)),
        Err(e) => return Err(e),
    };
    if !out.loss.is_finite() {
        return Err(diverged(state, out.loss, critic_loss_mean));
    }
    if adam_step(&mut state.policy.net, &out.grads, &mut state.actor_opt, lr_a).is_err() {
        return Err(diverged(state, out.loss, critic_loss_mean));
    }
    let eta_used = state.eta.eta;
    state.eta = eta_step(state.eta, out.bc_loss);
    state.step += 1;
    if state.step % cfg.actor_target_period == 0 {
        state.policy.update_ema(cfg.ema_alpha)?;
    }
    Ok(StepMetrics {
        step: state.step,
        actor_loss: out.loss,
        bc_loss: out.bc_loss,
        guidance_term: out.guidance_term,
        critic_loss_mean,
        q_mean,
        q_lcb_gap,
        eta: eta_used,
        scale_c: state.critic.scale_c,
        lr: lr_a,
    })
}

/// Mean online Q over members and rows, and the mean gap `lcb - mean`.
fn q_statistics(per_member: &[&Array1<f64>], rho: f64) -> Result<(f64, f64)> {
    let h = per_member.len();
    let b = per_member[0].len();
    let mut q_sum = 0.0;
    let mut gap_sum = 0.0;
    for i in 0..b {
        let vals: Vec<f64> = per_member.iter().map(|q| q[i]).collect();
        let mean = vals.iter().sum::<f64>() / h as f64;
        q_sum += mean;
        gap_sum += lcb(&vals, rho)? - mean;
    }
    Ok((q_sum / b as f64, gap_sum / b as f64))
}

/// Hooks for [`run`].
#[derive(Debug, Clone, Default)]
pub struct RunOptions {
    /// Continue from the latest checkpoint in the output directory if present.
    pub resume: bool,
    /// Stop (without a final checkpoint) once this many total steps are done;
    /// simulates an interrupted run.
    pub stop_after: Option<u64>,
}

/// Trains for `config.steps` steps, writing `metrics.csv`, periodic
/// checkpoints and a final checkpoint into `out_dir`.
pub fn run(config: &TrainConfig, ds: &OfflineDataset, out_dir: &Path, opts: &RunOptions) -> Result<TrainState> {
    config.validate()?;
    std::fs::create_dir_all(out_dir)?;
    let ds = prepare_dataset(config, ds)?;
    let metrics_path = out_dir.join(METRICS_FILE);
    let resumed = if opts.resume { latest_checkpoint(out_dir)? } else { None };
    let mut state = match resumed {
        Some(dir) => {
            let state = load_checkpoint(&dir, Some(config))?;
            truncate_metrics(&metrics_path, state.step)?;
            log::info!("resuming from {} at step {}", dir.display(), state.step);
            state
        }
        None => {
            let mut f = File::create(&metrics_path)?;
            writeln!(f, "{METRICS_HEADER}")?;
            init_state(config, &ds)?
        }
    };
    let mut metrics = OpenOptions::new().append(true).open(&metrics_path)?;
    let mut pending = String::new();
    let mut last_saved = None;
    while state.step < config.steps {
        if opts.stop_after.is_some_and(|s| state.step >= s) {
            metrics.write_all(pending.as_bytes())?;
            return Ok(state);
        }
        let m = train_step(&mut state, &ds)?;
        if m.step % config.metrics_every == 0 || m.step == config.steps {
            pending.push_str(&m.csv_row());
            pending.push('\n');
        }
        if m.step % config.checkpoint_every == 0 {
            metrics.write_all(pending.as_bytes())?;
            metrics.flush()?;
            pending.clear();
            save_checkpoint(&state, out_dir)?;
            last_saved = Some(m.step);
            log::info!("step {}: actor {:.4} critic {:.4} eta {:.4} C {:.4}", m.step, m.actor_loss, m.critic_loss_mean, m.eta, m.scale_c);
        }
    }
    metrics.write_all(pending.as_bytes())?;
    metrics.flush()?;
    if last_saved != Some(state.step) {
        save_checkpoint(&state, out_dir)?;
    }
    Ok(state)
}

/// Drops metric rows recorded after `step` (they belong to work that was
/// lost when the run stopped).
fn truncate_metrics(path: &Path, step: u64) -> Result<()> {
    let mut keep = String::new();
    if path.exists() {
        for (i, line) in BufReader::new(File::open(path)?).lines().enumerate() {
            let line = line?;
            if i == 0 {
                keep.push_str(&line);
                keep.push('\n');
                continue;
            }
            let row_step: u64 = line.split(',').next().and_then(|s| s.parse().ok()).ok_or_else(|| {
                DacError::Format { offset: i, message: format!("unreadable metrics row: {line}") }
            })?;
            if row_step <= step {
                keep.push_str(&line);
                keep.push('\n');
            }
        }
    } else {
        keep.push_str(METRICS_HEADER);
        keep.push('\n');
    }
    std::fs::write(path, keep)?;
    Ok(())
}
