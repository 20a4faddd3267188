//! The `train` command: one training job per (sequence length, run index),
//! each with its own derived seed and platform, producing a metrics CSV and
//! a checkpoint, all listed in a manifest.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use super::{config::RunConfig, HarnessError, DOMAIN_PLATFORM};
use crate::env::{sample_platform, MazeEnv, Vec2};
use crate::model::save_checkpoint;
use crate::seeding;
use crate::trainer::{DqnTrainer, EpisodeStats, ReplayBuffer};

pub const METRICS_HEADER: &str = "episode,steps,total_reward,epsilon,mean_loss,success,seq_len,run,seed";
pub const MANIFEST_HEADER: &str = "kind,path,seq_len,run,seed,platform_x,platform_y";

#[derive(Debug, Clone)]
pub struct ManifestEntry {
    pub kind: &'static str,
    pub path: PathBuf,
    pub seq_len: usize,
    pub run: usize,
    pub seed: u64,
    pub platform: Vec2,
}

#[derive(Debug)]
pub struct TrainArtifacts {
    pub metrics: Vec<PathBuf>,
    pub checkpoints: Vec<PathBuf>,
    pub manifest: PathBuf,
}

/// Render one metrics row. Floats use the shortest round-trip decimal form;
/// success is 0/1.
fn metrics_row(s: &EpisodeStats, seq_len: usize, run: usize, seed: u64) -> String {
    format!(
        "{},{},{},{},{},{},{},{},{}",
        s.episode,
        s.steps,
        s.total_reward,
        s.epsilon,
        s.mean_loss,
        s.success as u8,
        seq_len,
        run,
        seed
    )
}

/// Train every configured (seq_len, run) pair and write all artifacts under
/// `cfg.out_dir`. Fully seeded: identical config and seed reproduce every
/// byte.
pub fn cmd_train(cfg: &RunConfig) -> Result<TrainArtifacts, HarnessError> {
    cfg.validate()?;
    fs::create_dir_all(&cfg.out_dir)?;
    let env_cfg = cfg.env_config();

    let mut manifest_rows: Vec<ManifestEntry> = Vec::new();
    let mut metrics_paths = Vec::new();
    let mut checkpoint_paths = Vec::new();

    for &seq_len in &cfg.seq_lens {
        for run in 0..cfg.runs {
            let run_seed = seeding::run_seed(cfg.seed, seq_len, run);
            let platform = sample_platform(
                seeding::sub_seed(run_seed, DOMAIN_PLATFORM),
                &env_cfg,
            );
            let mut env = MazeEnv::new(env_cfg.clone(), platform)?;
            let mcfg = cfg.model_config(seq_len);
            let tcfg = cfg.train_config(seq_len, run_seed);
            eprintln!(
                "[train] seq_len {seq_len} run {run}: seed {run_seed}, platform ({:.3}, {:.3}), {} episodes",
                platform.x, platform.y, tcfg.episodes
            );

            let mut trainer = DqnTrainer::new(mcfg.clone(), tcfg.clone())?;
            let mut buffer = ReplayBuffer::new(tcfg.replay_capacity);
            let mut log = Vec::with_capacity(tcfg.episodes);
            for episode in 0..tcfg.episodes {
                let stats = trainer.run_episode(&mut env, &mut buffer, episode)?;
                if episode % 25 == 0 || episode + 1 == tcfg.episodes {
                    eprintln!(
                        "[train]   ep {episode}: steps {}, reward {:.4}, eps {:.3}, loss {:.5}",
                        stats.steps, stats.total_reward, stats.epsilon, stats.mean_loss
                    );
                }
                log.push(stats);
            }

            let metrics_path = cfg.out_dir.join(format!("metrics_seq{seq_len}_run{run}.csv"));
            write_metrics(&metrics_path, &log, seq_len, run, run_seed)?;
            let ckpt_path = cfg.out_dir.join(format!("model_seq{seq_len}_run{run}.ckpt"));
            save_checkpoint(&trainer.online, &mcfg, &ckpt_path)?;

            manifest_rows.push(ManifestEntry {
                kind: "metrics",
                path: metrics_path.clone(),
                seq_len,
                run,
                seed: run_seed,
                platform,
            });
            manifest_rows.push(ManifestEntry {
                kind: "checkpoint",
                path: ckpt_path.clone(),
                seq_len,
                run,
                seed: run_seed,
                platform,
            });
            metrics_paths.push(metrics_path);
            checkpoint_paths.push(ckpt_path);
        }
    }

    let manifest_path = cfg.out_dir.join("manifest.csv");
    write_manifest(&manifest_path, &manifest_rows)?;
    Ok(TrainArtifacts {
        metrics: metrics_paths,
        checkpoints: checkpoint_paths,
        manifest: manifest_path,
    })
}

fn write_metrics(
    path: &Path,
    log: &[EpisodeStats],
    seq_len: usize,
    run: usize,
    seed: u64,
) -> Result<(), HarnessError> {
    let mut out = String::with_capacity(log.len() * 48 + 64);
    out.push_str(METRICS_HEADER);
    out.push('\n');
    for stats in log {
        out.push_str(&metrics_row(stats, seq_len, run, seed));
        out.push('\n');
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

fn write_manifest(path: &Path, rows: &[ManifestEntry]) -> Result<(), HarnessError> {
    let mut out = String::new();
    out.push_str(MANIFEST_HEADER);
    out.push('\n');
    for row in rows {
        out.push_str(&format!(
            "{},{},{},{},{},{},{}\n",
            row.kind,
            row.path.display(),
            row.seq_len,
            row.run,
            row.seed,
            row.platform.x,
            row.platform.y
        ));
    }
    let mut f = fs::File::create(path)?;
    f.write_all(out.as_bytes())?;
    Ok(())
}

/// Parse a manifest written by `cmd_train`.
pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>, HarnessError> {
    let text = fs::read_to_string(path)?;
    let mut rows = Vec::new();
    for (i, line) in text.lines().enumerate() {
        if i == 0 {
            if line != MANIFEST_HEADER {
                return Err(HarnessError::MalformedData(format!(
                    "manifest header `{line}`"
                )));
            }
            continue;
        }
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 7 {
            return Err(HarnessError::MalformedData(format!(
                "manifest line {}: {line}",
                i + 1
            )));
        }
        let kind = match parts[0] {
            "metrics" => "metrics",
            "checkpoint" => "checkpoint",
            other => {
                return Err(HarnessError::MalformedData(format!(
                    "manifest kind `{other}`"
                )))
            }
        };
        let parse_f = |s: &str| {
            s.parse::<f64>()
                .map_err(|_| HarnessError::MalformedData(format!("manifest number `{s}`")))
        };
        let parse_u = |s: &str| {
            s.parse::<u64>()
                .map_err(|_| HarnessError::MalformedData(format!("manifest number `{s}`")))
        };
        rows.push(ManifestEntry {
            kind,
            path: PathBuf::from(parts[1]),
            seq_len: parse_u(parts[2])? as usize,
            run: parse_u(parts[3])? as usize,
            seed: parse_u(parts[4])?,
            platform: Vec2::new(parse_f(parts[5])?, parse_f(parts[6])?),
        });
    }
    Ok(rows)
}
