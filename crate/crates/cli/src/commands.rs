//! Subcommand implementations. Each wraps one library-level operation,
//! writes its output atomically, and drops a manifest next to it.

use crate::config::{seed_role, ExperimentConfig};
use crate::manifest::{now_ms, Manifest};
use anyhow::{bail, Context, Result};
use std::path::Path;
use xted_core::downstream::{bc_train, ComparisonReport, ComparisonRow, COMPARISON_CSV_HEADER};
use xted_core::editing::{edit, generate, s4rl_augment};
use xted_core::envsuite::{collect, evaluate, EnvConfig, ScriptedPolicy};
use xted_core::io::{atomic_write, Checkpoint, CheckpointMeta, Dataset, ProvenanceRecord};
use xted_core::training::{train, window_dataset, Trajectory, Window};

fn env_for_domain<'c>(cfg: &'c ExperimentConfig, domain: &str) -> Result<&'c EnvConfig> {
    match domain {
        "target" => Ok(&cfg.env.target),
        "source" => Ok(&cfg.env.source),
        other => Err(xted_core::Error::Config(format!(
            "unknown domain {other:?}; expected \"source\" or \"target\""
        ))
        .into()),
    }
}

/// Edited/generated/augmented windows leave the pipeline as independent
/// H-step trajectories.
fn windows_to_trajectories(windows: &[Window], domain: &str) -> Vec<Trajectory> {
    windows
        .iter()
        .map(|w| Trajectory {
            states: w.streams.states.clone(),
            actions: w.streams.actions.clone(),
            rewards: w.streams.rewards.clone(),
            domain: domain.to_string(),
        })
        .collect()
}

pub fn cmd_collect(cfg: &ExperimentConfig, domain: &str, out: &Path) -> Result<()> {
    let env = env_for_domain(cfg, domain)?;
    let seed = cfg.seed
        + if domain == "target" {
            seed_role::COLLECT_TARGET
        } else {
            seed_role::COLLECT_SOURCE
        };
    let policy = ScriptedPolicy::tuned(env, cfg.collect.policy_noise_std);
    let trajs = collect(env, &policy, cfg.collect.episodes, seed, domain)?;
    let returns: Vec<f64> = trajs.iter().filter_map(|t| t.episode_return()).collect();
    let (mut lo, mut hi, mut sum) = (f64::INFINITY, f64::NEG_INFINITY, 0.0);
    for r in &returns {
        lo = lo.min(*r);
        hi = hi.max(*r);
        sum += r;
    }
    let ds = Dataset::new(
        trajs,
        vec![ProvenanceRecord {
            command: "collect".into(),
            timestamp_ms: now_ms(),
            details: serde_json::json!({
                "domain": domain,
                "seed": seed,
                "episodes": cfg.collect.episodes,
                "env": env,
            }),
        }],
    )?;
    ds.save(out)?;
    Manifest::new("collect", cfg).write_for(out)?;
    println!(
        "collected {} transitions in {} episodes (domain {domain}); returns mean {:.2}, min {:.2}, max {:.2}",
        ds.transition_count(),
        ds.trajectories.len(),
        sum / returns.len() as f64,
        lo,
        hi
    );
    Ok(())
}

pub fn cmd_train(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::load(data)?;
    let mut model_cfg = cfg.model.clone();
    if model_cfg.dim_s != ds.dim_s || model_cfg.dim_a != ds.dim_a {
        log::info!(
            "model dims ({}, {}) resolved from dataset (config had ({}, {}))",
            ds.dim_s,
            ds.dim_a,
            model_cfg.dim_s,
            model_cfg.dim_a
        );
        model_cfg.dim_s = ds.dim_s;
        model_cfg.dim_a = ds.dim_a;
    }
    if model_cfg.reward_enabled && !ds.has_rewards {
        bail!(xted_core::Error::Config(
            "config enables rewards but the dataset is reward-free".into()
        ));
    }
    let sched = cfg.schedule.build()?;
    let output = train(&ds.trajectories, &model_cfg, &sched, &cfg.train)?;

    let ck = Checkpoint {
        meta: CheckpointMeta {
            model: model_cfg,
            schedule: cfg.schedule,
            normalizer: output.normalizer.clone(),
        },
        params: output.params,
    };
    ck.save(out)?;

    let mut csv = String::from("epoch,step,loss,wall_ms\n");
    for m in &output.metrics {
        csv.push_str(&format!("{},{},{},{}\n", m.epoch, m.step, m.loss, m.wall_ms));
    }
    let metrics_path = out.with_extension("metrics.csv");
    atomic_write(&metrics_path, csv.as_bytes())?;

    Manifest::new("train", cfg)
        .with_input(data)?
        .with_checkpoint_hash(out)?
        .write_for(out)?;
    let last = output.metrics.last().expect("at least one epoch");
    println!(
        "trained {} epochs ({} steps); final epoch loss {:.4}; checkpoint {}",
        output.metrics.len(),
        last.step,
        last.loss,
        out.display()
    );
    Ok(())
}

pub fn cmd_edit(cfg: &ExperimentConfig, data: &Path, ckpt: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::load(data)?;
    let ck = Checkpoint::load(ckpt)?;
    let sched = ck.meta.schedule.build()?;
    let domain = ds.domain().unwrap_or_else(|| "source".into());

    if cfg.edit.k_steps(sched.len()) == 0 {
        // identity edit: pass the input payload through untouched
        let mut out_ds = ds;
        out_ds.provenance.push(edit_provenance(cfg, ckpt)?);
        out_ds.save(out)?;
        Manifest::new("edit", cfg)
            .with_input(data)?
            .with_checkpoint_hash(ckpt)?
            .write_for(out)?;
        println!("kappa 0: dataset passed through unchanged");
        return Ok(());
    }

    let windows = window_dataset(&ds.trajectories, ck.meta.model.horizon)?;
    let outcome = edit(&windows, &ck.params, &ck.meta.normalizer, &cfg.edit, &sched)?;
    let trajs = windows_to_trajectories(&outcome.windows, &format!("{domain}-edited"));
    let mut provenance = ds.provenance.clone();
    provenance.push(edit_provenance(cfg, ckpt)?);
    let out_ds = Dataset::new(trajs, provenance)?;
    out_ds.save(out)?;
    Manifest::new("edit", cfg)
        .with_input(data)?
        .with_checkpoint_hash(ckpt)?
        .write_for(out)?;
    println!(
        "edited {} windows with {} noising + {} denoising steps per iteration ({} iterations)",
        out_ds.trajectories.len(),
        outcome.k_steps,
        outcome.k_steps,
        cfg.edit.iterations
    );
    Ok(())
}

fn edit_provenance(cfg: &ExperimentConfig, ckpt: &Path) -> Result<ProvenanceRecord> {
    Ok(ProvenanceRecord {
        command: "edit".into(),
        timestamp_ms: now_ms(),
        details: serde_json::json!({
            "checkpoint_sha256": xted_core::io::sha256_file(ckpt)?,
            "edit_config": cfg.edit,
        }),
    })
}

pub fn cmd_generate(cfg: &ExperimentConfig, ckpt: &Path, anchors: &Path, out: &Path) -> Result<()> {
    let ck = Checkpoint::load(ckpt)?;
    let sched = ck.meta.schedule.build()?;
    let anchor_ds = Dataset::load(anchors)?;
    let target_windows = window_dataset(&anchor_ds.trajectories, ck.meta.model.horizon)?;
    let seed = cfg.seed + seed_role::GENERATE;
    let windows = generate(
        cfg.generate.windows,
        &ck.params,
        &ck.meta.normalizer,
        &target_windows,
        cfg.generate.guidance,
        &sched,
        seed,
    )?;
    let trajs = windows_to_trajectories(&windows, "generated");
    let out_ds = Dataset::new(
        trajs,
        vec![ProvenanceRecord {
            command: "generate".into(),
            timestamp_ms: now_ms(),
            details: serde_json::json!({
                "checkpoint_sha256": xted_core::io::sha256_file(ckpt)?,
                "windows": cfg.generate.windows,
                "guidance": cfg.generate.guidance,
                "seed": seed,
            }),
        }],
    )?;
    out_ds.save(out)?;
    Manifest::new("generate", cfg)
        .with_input(anchors)?
        .with_checkpoint_hash(ckpt)?
        .write_for(out)?;
    println!("generated {} windows", cfg.generate.windows);
    Ok(())
}

pub fn cmd_s4rl(cfg: &ExperimentConfig, data: &Path, out: &Path) -> Result<()> {
    let ds = Dataset::load(data)?;
    let windows = window_dataset(&ds.trajectories, cfg.model.horizon)?;
    let seed = cfg.seed + seed_role::S4RL;
    let augmented = s4rl_augment(&windows, cfg.s4rl.sigma2, seed)?;
    let domain = ds.domain().unwrap_or_else(|| "target".into());
    let trajs = windows_to_trajectories(&augmented, &format!("{domain}-s4rl"));
    let mut provenance = ds.provenance.clone();
    provenance.push(ProvenanceRecord {
        command: "s4rl".into(),
        timestamp_ms: now_ms(),
        details: serde_json::json!({"sigma2": cfg.s4rl.sigma2, "seed": seed}),
    });
    let out_ds = Dataset::new(trajs, provenance)?;
    out_ds.save(out)?;
    Manifest::new("s4rl", cfg).with_input(data)?.write_for(out)?;
    println!(
        "augmented {} windows with state noise variance {}",
        out_ds.trajectories.len(),
        cfg.s4rl.sigma2
    );
    Ok(())
}

pub fn cmd_bc(cfg: &ExperimentConfig, data: &[std::path::PathBuf], out: &Path) -> Result<()> {
    if data.is_empty() {
        bail!(xted_core::Error::Config("bc needs at least one --data".into()));
    }
    let mut windows = Vec::new();
    for path in data {
        let ds = Dataset::load(path)?;
        windows.extend(window_dataset(&ds.trajectories, cfg.model.horizon)?);
    }
    let policy = bc_train(&windows, cfg.env.target.action_limit, &cfg.bc)?;

    let mut csv = String::from("step,loss\n");
    for (i, l) in policy.step_losses.iter().enumerate() {
        csv.push_str(&format!("{i},{l}\n"));
    }
    atomic_write(&out.with_extension("metrics.csv"), csv.as_bytes())?;

    xted_core::io::save_policy(out, &policy)?;
    let mut m = Manifest::new("bc", cfg);
    for path in data {
        m = m.with_input(path)?;
    }
    m.write_for(out)?;
    println!(
        "behavior cloning done: {} windows, {} steps, final loss {:.5}",
        windows.len(),
        cfg.bc.grad_steps,
        policy.step_losses.last().unwrap()
    );
    Ok(())
}

pub fn cmd_eval(cfg: &ExperimentConfig, policy_path: &Path, arm: &str, out: &Path) -> Result<()> {
    let policy = xted_core::io::load_policy(policy_path)?;
    let mut csv = String::from("arm,seed,mean_return,std_return\n");
    for seed in 0..cfg.eval.seeds {
        let res = evaluate(
            &policy,
            &cfg.env.target,
            cfg.eval.episodes,
            cfg.seed + seed_role::EVAL + seed,
        )?;
        csv.push_str(&format!("{arm},{seed},{},{}\n", res.mean, res.std));
    }
    atomic_write(out, csv.as_bytes())?;
    Manifest::new("eval", cfg)
        .with_input(policy_path)?
        .write_for(out)?;
    println!("evaluated {arm} over {} seeds", cfg.eval.seeds);
    Ok(())
}

/// Join per-arm eval CSVs into the comparison table (wide CSV with deltas
/// against the tgt arm) plus a plot-ready long-format CSV.
pub fn cmd_report(
    cfg: &ExperimentConfig,
    inputs: &[std::path::PathBuf],
    out: &Path,
    force: bool,
) -> Result<()> {
    if inputs.is_empty() {
        bail!(xted_core::Error::Config("report needs at least one input".into()));
    }
    // refuse mixed provenance unless forced
    let mut run_ids = Vec::new();
    for path in inputs {
        match Manifest::load_for(path) {
            Ok(m) => run_ids.push((path.clone(), m.run_id)),
            Err(e) => {
                if !force {
                    bail!(xted_core::Error::Config(format!(
                        "missing/unreadable manifest for {} ({e}); pass --force to override",
                        path.display()
                    )));
                }
            }
        }
    }
    if !force {
        if let Some(((_, first), rest)) = run_ids.split_first() {
            for (path, id) in rest {
                if id != first {
                    bail!(xted_core::Error::Config(format!(
                        "mixed provenance: {} has run id {}, expected {}; pass --force to override",
                        path.display(),
                        &id[..12],
                        &first[..12]
                    )));
                }
            }
        }
    }

    let mut rows = Vec::new();
    for path in inputs {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading {}", path.display()))?;
        for (i, line) in text.lines().enumerate() {
            if i == 0 {
                if line != "arm,seed,mean_return,std_return" {
                    bail!(xted_core::Error::Format(format!(
                        "{}: unexpected header {line:?}",
                        path.display()
                    )));
                }
                continue;
            }
            let f: Vec<&str> = line.split(',').collect();
            if f.len() != 4 {
                bail!(xted_core::Error::Format(format!(
                    "{}: bad row {line:?}",
                    path.display()
                )));
            }
            rows.push(ComparisonRow {
                arm: f[0].to_string(),
                seed: f[1].parse().context("seed column")?,
                mean_return: f[2].parse().context("mean_return column")?,
                std_return: f[3].parse().context("std_return column")?,
            });
        }
    }
    let report = ComparisonReport { rows };
    atomic_write(out, report.to_csv().as_bytes())?;

    // long format for plotting: arm,seed,metric,value
    let mut long = String::from("arm,seed,metric,value\n");
    for line in report.to_csv().lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        long.push_str(&format!("{},{},mean_return,{}\n", f[0], f[1], f[2]));
        long.push_str(&format!("{},{},std_return,{}\n", f[0], f[1], f[3]));
        long.push_str(&format!("{},{},delta_pct,{}\n", f[0], f[1], f[4]));
    }
    let long_path = out.with_extension("long.csv");
    atomic_write(&long_path, long.as_bytes())?;

    let mut m = Manifest::new("report", cfg);
    for path in inputs {
        m = m.with_input(path)?;
    }
    m.write_for(out)?;

    let _ = COMPARISON_CSV_HEADER;
    let arms: std::collections::BTreeSet<String> =
        report.rows.iter().map(|r| r.arm.clone()).collect();
    for arm in arms {
        println!(
            "{arm}: mean return {:.3}, delta {:+.1}%",
            report.arm_mean(&arm),
            report.delta_pct(&arm)
        );
    }
    Ok(())
}
