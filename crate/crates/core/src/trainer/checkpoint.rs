//! Checkpoint directories.
//!
//! ```text
//! <out>/ckpt-<step>/manifest.json          step, config, hashes, rng streams, eta, C
//! <out>/ckpt-<step>/actor.dacp             online noise network
//! <out>/ckpt-<step>/actor_ema.dacp         EMA twin
//! <out>/ckpt-<step>/actor_adam_m.dacp      Adam first moment
//! <out>/ckpt-<step>/actor_adam_v.dacp      Adam second moment
//! <out>/ckpt-<step>/critic_<h>[_target|_adam_m|_adam_v].dacp
//! <out>/latest                             name of the newest complete checkpoint
//! ```
//! A checkpoint is written into a temporary directory and renamed into place,
//! then `latest` is replaced the same way, so an interrupted write never
//! leaves `latest` pointing at a partial checkpoint.

use std::path::{Path, PathBuf};

use dac_nn::{read_params, write_params, AdamState, Gradients, MlpParams, ParamSet};
use serde::{Deserialize, Serialize};

use super::{RngStreams, TrainConfig, TrainState};
use crate::actor::{DiffusionPolicy, EtaController, NoiseNet};
use crate::critic::CriticEnsemble;
use crate::data::ActionBounds;
use crate::diffusion::make_vp_schedule;
use crate::error::{DacError, Result};

pub const LATEST_FILE: &str = "latest";
pub const MANIFEST_FILE: &str = "manifest.json";
const CHECKPOINT_FORMAT: u32 = 1;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub step: u64,
    pub config_hash: String,
    pub config: TrainConfig,
    pub bounds: ActionBounds,
    pub eta: EtaController,
    pub scale_c: f64,
    pub actor_adam_step: u64,
    pub critic_adam_steps: Vec<u64>,
    pub rng: RngStreams,
    pub files: Vec<String>,
}

pub fn checkpoint_dir_name(step: u64) -> String {
    format!("ckpt-{step}")
}

fn write_set<P: ParamSet + ?Sized>(dir: &Path, name: &str, p: &P, files: &mut Vec<String>) -> Result<()> {
    write_params(&dir.join(name), p)?;
    files.push(name.to_string());
    Ok(())
}

/// Writes `<out>/ckpt-<step>` atomically and points `latest` at it.
pub fn save_checkpoint(state: &TrainState, out_dir: &Path) -> Result<PathBuf> {
    let name = checkpoint_dir_name(state.step);
    let tmp = out_dir.join(format!("{name}.tmp"));
    if tmp.exists() {
        std::fs::remove_dir_all(&tmp)?;
    }
    std::fs::create_dir_all(&tmp)?;
    let mut files = Vec::new();
    write_set(&tmp, "actor.dacp", &state.policy.net, &mut files)?;
    write_set(&tmp, "actor_ema.dacp", &state.policy.ema, &mut files)?;
    write_set(&tmp, "actor_adam_m.dacp", &state.actor_opt.first, &mut files)?;
    write_set(&tmp, "actor_adam_v.dacp", &state.actor_opt.second, &mut files)?;
    for (h, (m, t)) in state.critic.members.iter().zip(&state.critic.targets).enumerate() {
        write_set(&tmp, &format!("critic_{h}.dacp"), m, &mut files)?;
        write_set(&tmp, &format!("critic_{h}_target.dacp"), t, &mut files)?;
        write_set(&tmp, &format!("critic_{h}_adam_m.dacp"), &state.critic_opts[h].first, &mut files)?;
        write_set(&tmp, &format!("critic_{h}_adam_v.dacp"), &state.critic_opts[h].second, &mut files)?;
    }
    let manifest = CheckpointManifest {
        format: CHECKPOINT_FORMAT,
        step: state.step,
        config_hash: state.config.hash(),
        config: state.config.clone(),
        bounds: state.policy.bounds.clone(),
        eta: state.eta,
        scale_c: state.critic.scale_c,
        actor_adam_step: state.actor_opt.step,
        critic_adam_steps: state.critic_opts.iter().map(|o| o.step).collect(),
        rng: state.rng.clone(),
        files,
    };
    std::fs::write(tmp.join(MANIFEST_FILE), serde_json::to_string_pretty(&manifest)?)?;
    let dest = out_dir.join(&name);
    if dest.exists() {
        std::fs::remove_dir_all(&dest)?;
    }
    std::fs::rename(&tmp, &dest)?;
    let latest_tmp = out_dir.join(format!("{LATEST_FILE}.tmp"));
    std::fs::write(&latest_tmp, format!("{name}\n"))?;
    std::fs::rename(&latest_tmp, out_dir.join(LATEST_FILE))?;
    Ok(dest)
}

/// Directory named by `<out>/latest`, if any.
pub fn latest_checkpoint(out_dir: &Path) -> Result<Option<PathBuf>> {
    let p = out_dir.join(LATEST_FILE);
    if !p.exists() {
        return Ok(None);
    }
    let name = std::fs::read_to_string(p)?;
    let dir = out_dir.join(name.trim());
    if !dir.join(MANIFEST_FILE).exists() {
        return Err(DacError::State(format!("latest points at {} which has no manifest", dir.display())));
    }
    Ok(Some(dir))
}

/// Accepts a checkpoint directory or a run directory containing `latest`.
pub fn resolve_checkpoint(path: &Path) -> Result<PathBuf> {
    if path.join(MANIFEST_FILE).exists() {
        return Ok(path.to_path_buf());
    }
    latest_checkpoint(path)?.ok_or_else(|| DacError::State(format!("no checkpoint found at {}", path.display())))
}

pub fn read_manifest(dir: &Path) -> Result<CheckpointManifest> {
    let m: CheckpointManifest = serde_json::from_str(&std::fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
    if m.format != CHECKPOINT_FORMAT {
        return Err(DacError::State(format!("unsupported checkpoint format {}", m.format)));
    }
    Ok(m)
}

fn read_mlp(dir: &Path, name: &str) -> Result<MlpParams> {
    Ok(MlpParams::from_layers(read_params(&dir.join(name))?, dac_nn::Activation::Mish)?)
}

fn read_moment<P: ParamSet>(dir: &Path, name: &str, like: &P) -> Result<Gradients> {
    let g = Gradients { layers: read_params(&dir.join(name))? };
    if !g.is_congruent(like) {
        return Err(DacError::Shape(format!("{name} does not match its network")));
    }
    Ok(g)
}

/// Restores a full training state. When `expected` is given, the stored
/// configuration must hash identically.
pub fn load_checkpoint(dir: &Path, expected: Option<&TrainConfig>) -> Result<TrainState> {
    let dir = resolve_checkpoint(dir)?;
    let m = read_manifest(&dir)?;
    if m.config.hash() != m.config_hash {
        return Err(DacError::State("checkpoint manifest config does not match its recorded hash".into()));
    }
    if let Some(cfg) = expected {
        if cfg.hash() != m.config_hash {
            return Err(DacError::Validation(vec![format!(
                "configuration differs from the checkpoint's (hash {} vs {})",
                cfg.hash(),
                m.config_hash
            )]));
        }
    }
    let steps = m.config.diffusion_steps;
    let net = NoiseNet::from_layers(read_params(&dir.join("actor.dacp"))?, steps)?;
    let ema = NoiseNet::from_layers(read_params(&dir.join("actor_ema.dacp"))?, steps)?;
    let mut policy = DiffusionPolicy::new(net, make_vp_schedule(steps)?, m.bounds.clone())?;
    policy.ema = ema;
    let actor_opt = AdamState {
        first: read_moment(&dir, "actor_adam_m.dacp", &policy.net)?,
        second: read_moment(&dir, "actor_adam_v.dacp", &policy.net)?,
        step: m.actor_adam_step,
        ..AdamState::new(&policy.net)
    };
    let h = m.config.ensemble_size;
    let members = (0..h).map(|i| read_mlp(&dir, &format!("critic_{i}.dacp"))).collect::<Result<Vec<_>>>()?;
    let mut critic = CriticEnsemble::from_members(members, m.config.critic_settings())?;
    critic.targets = (0..h).map(|i| read_mlp(&dir, &format!("critic_{i}_target.dacp"))).collect::<Result<Vec<_>>>()?;
    critic.scale_c = m.scale_c;
    if m.critic_adam_steps.len() != h {
        return Err(DacError::State("optimizer count differs from the ensemble size".into()));
    }
    let critic_opts = (0..h)
        .map(|i| {
            Ok(AdamState {
                first: read_moment(&dir, &format!("critic_{i}_adam_m.dacp"), &critic.members[i])?,
                second: read_moment(&dir, &format!("critic_{i}_adam_v.dacp"), &critic.members[i])?,
                step: m.critic_adam_steps[i],
                ..AdamState::new(&critic.members[i])
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(TrainState { config: m.config, policy, critic, actor_opt, critic_opts, eta: m.eta, step: m.step, rng: m.rng })
}
