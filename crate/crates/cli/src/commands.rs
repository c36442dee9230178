use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use anyhow::{Context, Result};
use dac_core::actor::{EtaMode, GuidanceMode};
use dac_core::bench::{bench_steps, format_table};
use dac_core::data::{
    dataset_hash, generate_bandit_dataset, generate_lq_dataset, load_dataset, load_meta, save_dataset, save_meta,
    BanditPattern, BanditSpec, DatasetMeta, LqOracle, LqSpec, OfflineDataset,
};
use dac_core::diffusion::make_vp_schedule_with;
use dac_core::eval::{evaluate_bandit, evaluate_lq, merge_reports};
use dac_core::plot::{build_panel, render_svg, write_csv, PanelSettings};
use dac_core::trainer::{load_checkpoint, read_manifest, resolve_checkpoint, run, substream, RunOptions, TrainConfig, TrainState};
use dac_core::verify::{run_checks, Check, VerifyOptions};
use serde::{Deserialize, Serialize};

use crate::{usage, BenchArgs, Cli, Command, Env, EtaModeArg, EvalArgs, Guidance, MakeDataArgs, PlotArgs, ScheduleArgs, TrainArgs, VerifyArgs};

pub const RUN_MANIFEST_FILE: &str = "run.json";

/// Provenance of a training run, written before the first step.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub dataset_path: PathBuf,
    pub dataset_hash: String,
    pub code_version: String,
    pub seed: u64,
    pub started_unix: u64,
    pub finished_unix: Option<u64>,
    pub out_dir: PathBuf,
    pub metrics: PathBuf,
    pub final_checkpoint: Option<PathBuf>,
}

pub fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::MakeData(a) => make_data(cli, a),
        Command::Train(a) => train(cli, a),
        Command::Eval(a) => eval(cli, a),
        Command::Verify(a) => verify(cli, a),
        Command::Plot(a) => plot(cli, a),
        Command::BenchStep(a) => bench(cli, a),
        Command::Schedule(a) => schedule(a),
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    std::fs::write(path, serde_json::to_string_pretty(value)? + "\n").with_context(|| format!("writing {}", path.display()))
}

fn read_dataset(path: &Path) -> Result<OfflineDataset> {
    if !path.exists() {
        return Err(usage(format!("dataset {} does not exist", path.display())));
    }
    load_dataset(path).with_context(|| format!("reading dataset {}", path.display()))
}

fn read_sidecar(data: &Path) -> Result<DatasetMeta> {
    load_meta(data).with_context(|| format!("reading the metadata sidecar of {}", data.display()))
}

fn make_data(cli: &Cli, a: &MakeDataArgs) -> Result<()> {
    let seed = cli.seed.unwrap_or(0);
    let meta = match a.env {
        Env::Bandit => {
            let pattern = BanditPattern::parse(&a.pattern).map_err(|e| usage(e.to_string()))?;
            let d = BanditSpec::default();
            let spec = BanditSpec {
                n: a.n.unwrap_or(d.n),
                pattern,
                noise_std: a.noise_std.unwrap_or(d.noise_std),
                reward_noise_std: a.reward_noise_std.unwrap_or(d.reward_noise_std),
                seed,
                ..d
            };
            let ds = generate_bandit_dataset(&spec).map_err(|e| usage(e.to_string()))?;
            save_dataset(&ds, &a.out)?;
            log::info!("wrote {} bandit transitions to {}", ds.len(), a.out.display());
            DatasetMeta::Bandit { spec }
        }
        Env::Lq => {
            let d = LqSpec::default();
            let spec = LqSpec { n: a.n.unwrap_or(d.n), seed, ..d };
            let (ds, oracle) = generate_lq_dataset(&spec).map_err(|e| usage(e.to_string()))?;
            save_dataset(&ds, &a.out)?;
            log::info!("wrote {} LQ transitions to {}", ds.len(), a.out.display());
            DatasetMeta::lq(&oracle, a.oracle_eta).map_err(|e| usage(e.to_string()))?
        }
    };
    let side = save_meta(&meta, &a.out)?;
    log::info!("wrote metadata to {}", side.display());
    Ok(())
}

/// Config file (if any), then command-line overrides, then validation.
fn train_config(cli: &Cli, a: &TrainArgs) -> Result<TrainConfig> {
    let mut cfg = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            TrainConfig::from_toml_unchecked(&text)?
        }
        None => TrainConfig::default(),
    };
    if let Some(s) = cli.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    if let Some(g) = a.guidance {
        cfg.guidance = match g {
            Guidance::Soft => GuidanceMode::Soft,
            Guidance::Hard => GuidanceMode::Hard,
            Guidance::Denoised => GuidanceMode::Denoised,
        };
    }
    if let Some(m) = a.eta_mode {
        cfg.eta.mode = match m {
            EtaModeArg::Constant => EtaMode::Constant,
            EtaModeArg::Learnable => EtaMode::Learnable,
        };
    }
    if let Some(e) = a.eta {
        cfg.eta.init = e;
    }
    if a.b.is_some() {
        cfg.eta.b = a.b;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn required_out_dir(cli: &Cli) -> Result<&Path> {
    cli.out_dir.as_deref().ok_or_else(|| usage("--out-dir is required for this command"))
}

fn train(cli: &Cli, a: &TrainArgs) -> Result<()> {
    let cfg = train_config(cli, a)?;
    let out = required_out_dir(cli)?;
    let ds = read_dataset(&a.data)?;
    std::fs::create_dir_all(out)?;
    let mut manifest = RunManifest {
        config_hash: cfg.hash(),
        dataset_path: a.data.clone(),
        dataset_hash: dataset_hash(&ds),
        code_version: env!("CARGO_PKG_VERSION").to_string(),
        seed: cfg.seed,
        started_unix: now_unix(),
        finished_unix: None,
        out_dir: out.to_path_buf(),
        metrics: out.join(dac_core::trainer::METRICS_FILE),
        final_checkpoint: None,
    };
    let manifest_path = out.join(RUN_MANIFEST_FILE);
    if a.resume && manifest_path.exists() {
        let prev: RunManifest = serde_json::from_str(&std::fs::read_to_string(&manifest_path)?)?;
        if prev.dataset_hash != manifest.dataset_hash || prev.config_hash != manifest.config_hash {
            return Err(usage("the dataset or configuration differs from the run being resumed"));
        }
        manifest.started_unix = prev.started_unix;
    }
    write_json(&manifest_path, &manifest)?;
    std::fs::write(out.join("config.toml"), cfg.to_toml())?;
    log::info!("training {} steps ({} guidance) into {}", cfg.steps, cfg.guidance.as_str(), out.display());
    let state = run(&cfg, &ds, out, &RunOptions { resume: a.resume, stop_after: None })?;
    manifest.finished_unix = Some(now_unix());
    manifest.final_checkpoint = Some(resolve_checkpoint(out)?);
    write_json(&manifest_path, &manifest)?;
    log::info!("finished at step {} (eta {:.4}, C {:.4})", state.step, state.eta.eta, state.critic.scale_c);
    Ok(())
}

/// Loads a checkpoint, refusing when its run manifest disagrees with the
/// dataset or the checkpoint's own configuration.
fn load_checked(ckpt: &Path, ds: &OfflineDataset) -> Result<TrainState> {
    if !ckpt.exists() {
        return Err(usage(format!("checkpoint {} does not exist", ckpt.display())));
    }
    let dir = resolve_checkpoint(ckpt).map_err(|e| usage(e.to_string()))?;
    let manifest = read_manifest(&dir)?;
    if let Some(run_dir) = dir.parent() {
        let p = run_dir.join(RUN_MANIFEST_FILE);
        if p.exists() {
            let rm: RunManifest = serde_json::from_str(&std::fs::read_to_string(&p)?)?;
            if rm.dataset_hash != dataset_hash(ds) {
                return Err(usage(format!("dataset differs from the one {} was trained on", run_dir.display())));
            }
            if rm.config_hash != manifest.config_hash {
                return Err(usage(format!("checkpoint configuration differs from the run manifest in {}", run_dir.display())));
            }
        }
    }
    Ok(load_checkpoint(&dir, None)?)
}

#[derive(Debug, Serialize)]
#[serde(tag = "env", rename_all = "lowercase")]
enum EvalOutput {
    Bandit {
        checkpoint_step: u64,
        n_a: usize,
        #[serde(flatten)]
        report: dac_core::eval::EvalReport,
    },
    Lq {
        checkpoint_step: u64,
        #[serde(flatten)]
        report: dac_core::eval::LqReport,
    },
}

fn eval(cli: &Cli, a: &EvalArgs) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    let meta = read_sidecar(&a.data)?;
    if let Some(env) = a.env {
        let want = match env {
            Env::Bandit => "bandit",
            Env::Lq => "lq",
        };
        if want != meta.env_name() {
            return Err(usage(format!("--env {want} but the dataset is a {} dataset", meta.env_name())));
        }
    }
    if a.eval_seeds == 0 || a.rollouts == 0 || a.n_a == 0 {
        return Err(usage("--eval-seeds, --rollouts and --n-a must be at least 1"));
    }
    let state = load_checked(&a.ckpt, &ds)?;
    let seed = cli.seed.unwrap_or(0);
    let out = match meta {
        DatasetMeta::Bandit { spec } => {
            let r_support = a.r_support.unwrap_or(3.0 * spec.noise_std);
            let reports = (0..a.eval_seeds)
                .map(|k| {
                    let mut rng = substream(seed + k, 0);
                    evaluate_bandit(&state.policy, &state.critic, &ds, &spec, a.rollouts, r_support, a.n_a, &mut rng)
                })
                .collect::<dac_core::Result<Vec<_>>>()?;
            let report = merge_reports(&reports)?;
            println!(
                "mean reward {:.4} (std {:.4}), in support {:.3} at r = {:.3}, mode coverage {:.3}",
                report.mean_reward, report.reward_std, report.in_support_fraction, r_support, report.mode_coverage
            );
            EvalOutput::Bandit { checkpoint_step: state.step, n_a: a.n_a, report }
        }
        DatasetMeta::Lq { spec, .. } => {
            let oracle = LqOracle::new(spec)?;
            let mut rng = substream(seed, 0);
            let report = evaluate_lq(&state.policy, &state.critic, &oracle, state.eta.eta, a.samples, &mut rng)?;
            println!(
                "sample mean {:?} vs optimum {:?} (distance {:.4})",
                report.sample_mean, report.oracle_mean, report.mean_error
            );
            EvalOutput::Lq { checkpoint_step: state.step, report }
        }
    };
    if let Some(p) = &a.json {
        write_json(p, &out)?;
    }
    Ok(())
}

fn verify(cli: &Cli, a: &VerifyArgs) -> Result<()> {
    let checks = a
        .only
        .iter()
        .map(|s| s.trim().parse::<Check>().map_err(|e| usage(e.to_string())))
        .collect::<Result<Vec<_>>>()?;
    let d = VerifyOptions::default();
    let opts = VerifyOptions {
        seed: cli.seed.unwrap_or(0),
        equivalence_draws: a.draws.unwrap_or(d.equivalence_draws),
        mutate_noise_scale: a.mutate_noise_scale,
        ..d
    };
    let report = run_checks(&checks, &opts)?;
    for c in &report.checks {
        println!(
            "{} {:<22} {:>10.3e} <= {:<8.1e} {:>7.2}s  {}",
            if c.passed { "PASS" } else { "FAIL" },
            c.name,
            c.metric,
            c.tolerance,
            c.seconds,
            c.detail
        );
    }
    if let Some(p) = &a.json {
        write_json(p, &report)?;
    }
    if !report.passed {
        anyhow::bail!("{} of {} checks failed", report.checks.iter().filter(|c| !c.passed).count(), report.checks.len());
    }
    Ok(())
}

fn plot(cli: &Cli, a: &PlotArgs) -> Result<()> {
    let ds = read_dataset(&a.data)?;
    if !a.title.is_empty() && a.title.len() != a.ckpt.len() {
        return Err(usage("give one --title per --ckpt"));
    }
    let states = a.ckpt.iter().map(|c| load_checked(c, &ds)).collect::<Result<Vec<_>>>()?;
    let out = cli.out_dir.clone().unwrap_or_else(|| PathBuf::from("."));
    std::fs::create_dir_all(&out)?;
    let settings = PanelSettings { grid: a.grid, samples: a.samples, n_a: a.n_a };
    let seed = cli.seed.unwrap_or(0);
    let panels = states
        .iter()
        .enumerate()
        .map(|(k, s)| {
            let title = a.title.get(k).cloned().unwrap_or_else(|| s.config.guidance.as_str().to_string());
            build_panel(&title, &s.policy, &s.critic, &ds, &settings, &mut substream(seed, k as u64))
        })
        .collect::<dac_core::Result<Vec<_>>>()?;
    let csv = out.join(format!("{}.csv", a.name));
    write_csv(&panels, &csv)?;
    log::info!("wrote {}", csv.display());
    if !a.csv_only {
        let svg = out.join(format!("{}.svg", a.name));
        std::fs::write(&svg, render_svg(&panels, a.levels))?;
        log::info!("wrote {}", svg.display());
    }
    Ok(())
}

fn bench(cli: &Cli, a: &BenchArgs) -> Result<()> {
    let base = match &cli.config {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| usage(format!("cannot read config {}: {e}", p.display())))?;
            TrainConfig::from_toml(&text)?
        }
        None => TrainConfig::bandit_reference(),
    };
    let base = TrainConfig { seed: cli.seed.unwrap_or(base.seed), ..base };
    let ds = match &a.data {
        Some(p) => read_dataset(p)?,
        None => generate_bandit_dataset(&BanditSpec { seed: base.seed, ..BanditSpec::default() })?,
    };
    if a.t_list.is_empty() || a.t_list.contains(&0) {
        return Err(usage("--t-list needs positive step counts"));
    }
    let rows = bench_steps(&base, &ds, &a.t_list, a.warmup, a.iters)?;
    print!("{}", format_table(&rows));
    if let Some(p) = &a.json {
        write_json(p, &rows)?;
    }
    Ok(())
}

#[derive(Debug, Serialize)]
struct ScheduleRow {
    t: usize,
    beta: f64,
    alpha: f64,
    alpha_bar: f64,
    noise_scale: f64,
    posterior_variance: f64,
}

fn schedule(a: &ScheduleArgs) -> Result<()> {
    let s = make_vp_schedule_with(a.steps, a.beta_min, a.beta_max).map_err(|e| usage(e.to_string()))?;
    let rows = (1..=a.steps)
        .map(|t| {
            Ok(ScheduleRow {
                t,
                beta: s.beta(t)?,
                alpha: s.alpha(t)?,
                alpha_bar: s.alpha_bar(t)?,
                noise_scale: s.noise_scale(t)?,
                posterior_variance: s.posterior_variance(t)?,
            })
        })
        .collect::<dac_core::Result<Vec<_>>>()?;
    if a.json {
        println!("{}", serde_json::to_string_pretty(&rows)?);
    } else {
        println!("{:>4} {:>12} {:>12} {:>12} {:>12} {:>12}", "t", "beta", "alpha", "alpha_bar", "noise_scale", "post_var");
        for r in rows {
            println!(
                "{:>4} {:>12.6e} {:>12.8} {:>12.8} {:>12.8} {:>12.6e}",
                r.t, r.beta, r.alpha, r.alpha_bar, r.noise_scale, r.posterior_variance
            );
        }
    }
    Ok(())
}
