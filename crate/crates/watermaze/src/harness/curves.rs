//! The `curves` command: exponential moving averages of per-episode reward
//! and step counts, aggregated across runs for each sequence length.
//!
//! Smoothing runs per run first; the across-run mean and standard deviation
//! are taken afterwards (EMA is linear, so the mean-of-smoothed equals the
//! smoothed-mean exactly).

use std::collections::BTreeMap;
use std::fs;
use std::io::Write;
use std::path::Path;

use super::{run::METRICS_HEADER, HarnessError};

/// Exponential moving average with `y[0] = x[0]`,
/// `y[t] = alpha * x[t] + (1 - alpha) * y[t-1]`.
pub fn ema(series: &[f64], alpha: f64) -> Vec<f64> {
    let mut out = Vec::with_capacity(series.len());
    let mut acc = 0.0;
    for (i, &x) in series.iter().enumerate() {
        acc = if i == 0 { x } else { alpha * x + (1.0 - alpha) * acc };
        out.push(acc);
    }
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct CurveRow {
    pub seq_len: usize,
    pub episode: usize,
    pub reward_mean: f64,
    pub reward_sd: f64,
    pub steps_mean: f64,
    pub steps_sd: f64,
}

struct RunSeries {
    rewards: Vec<f64>,
    steps: Vec<f64>,
}

/// Read every `metrics_*.csv` under `dir`, smooth each run, and aggregate
/// across runs per (seq_len, episode). Runs of one sequence length must all
/// have the same episode count.
pub fn export_curves(dir: &Path, alpha: f64, out_path: &Path) -> Result<Vec<CurveRow>, HarnessError> {
    if !(alpha > 0.0 && alpha <= 1.0) {
        return Err(HarnessError::Config {
            key: Some("ema_alpha".into()),
            message: format!("{alpha} outside (0, 1]"),
        });
    }
    let mut by_seq: BTreeMap<usize, Vec<RunSeries>> = BTreeMap::new();
    let mut entries: Vec<_> = fs::read_dir(dir)?
        .collect::<Result<Vec<_>, _>>()?
        .into_iter()
        .map(|e| e.path())
        .filter(|p| {
            p.file_name()
                .and_then(|n| n.to_str())
                .map(|n| n.starts_with("metrics_") && n.ends_with(".csv"))
                .unwrap_or(false)
        })
        .collect();
    entries.sort();
    if entries.is_empty() {
        return Err(HarnessError::MalformedData(format!(
            "no metrics_*.csv files under {}",
            dir.display()
        )));
    }
    for path in entries {
        let (seq_len, series) = read_metrics(&path)?;
        by_seq.entry(seq_len).or_default().push(series);
    }

    let mut rows = Vec::new();
    for (&seq_len, runs) in &by_seq {
        let episodes = runs[0].rewards.len();
        for (i, run) in runs.iter().enumerate() {
            if run.rewards.len() != episodes {
                return Err(HarnessError::MismatchedEpisodeCounts(format!(
                    "seq_len {seq_len}: run 0 has {episodes} episodes, run {i} has {}",
                    run.rewards.len()
                )));
            }
        }
        let smoothed_rewards: Vec<Vec<f64>> =
            runs.iter().map(|r| ema(&r.rewards, alpha)).collect();
        let smoothed_steps: Vec<Vec<f64>> = runs.iter().map(|r| ema(&r.steps, alpha)).collect();
        for episode in 0..episodes {
            let (reward_mean, reward_sd) = mean_sd(smoothed_rewards.iter().map(|r| r[episode]));
            let (steps_mean, steps_sd) = mean_sd(smoothed_steps.iter().map(|r| r[episode]));
            rows.push(CurveRow {
                seq_len,
                episode,
                reward_mean,
                reward_sd,
                steps_mean,
                steps_sd,
            });
        }
    }

    let mut out = String::new();
    out.push_str("# exponential moving average per run (y0 = x0), then mean and\n");
    out.push_str("# population standard deviation across runs per episode\n");
    out.push_str(&format!("# alpha = {alpha}\n"));
    out.push_str("seq_len,episode,reward_ema_mean,reward_ema_sd,steps_ema_mean,steps_ema_sd\n");
    for r in &rows {
        out.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.seq_len, r.episode, r.reward_mean, r.reward_sd, r.steps_mean, r.steps_sd
        ));
    }
    let mut f = fs::File::create(out_path)?;
    f.write_all(out.as_bytes())?;
    Ok(rows)
}

fn mean_sd(values: impl Iterator<Item = f64>) -> (f64, f64) {
    let vals: Vec<f64> = values.collect();
    let n = vals.len() as f64;
    let mean = vals.iter().sum::<f64>() / n;
    let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, var.sqrt())
}

fn read_metrics(path: &Path) -> Result<(usize, RunSeries), HarnessError> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    match lines.next() {
        Some(h) if h == METRICS_HEADER => {}
        other => {
            return Err(HarnessError::MalformedData(format!(
                "{}: unexpected header {other:?}",
                path.display()
            )))
        }
    }
    let mut rewards = Vec::new();
    let mut steps = Vec::new();
    let mut seq_len = None;
    for (i, line) in lines.enumerate() {
        let parts: Vec<&str> = line.split(',').collect();
        if parts.len() != 9 {
            return Err(HarnessError::MalformedData(format!(
                "{} line {}: {line}",
                path.display(),
                i + 2
            )));
        }
        let bad =
            |what: &str| HarnessError::MalformedData(format!("{}: {what}", path.display()));
        steps.push(parts[1].parse::<f64>().map_err(|_| bad("steps"))?);
        rewards.push(parts[2].parse::<f64>().map_err(|_| bad("total_reward"))?);
        let sl = parts[6].parse::<usize>().map_err(|_| bad("seq_len"))?;
        if *seq_len.get_or_insert(sl) != sl {
            return Err(bad("inconsistent seq_len column"));
        }
    }
    let seq_len = seq_len.ok_or_else(|| {
        HarnessError::MalformedData(format!("{} has no data rows", path.display()))
    })?;
    Ok((seq_len, RunSeries { rewards, steps }))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ema_of_constant_series_is_the_constant() {
        let s = vec![2.5; 20];
        assert_eq!(ema(&s, 0.05), s);
    }

    #[test]
    fn ema_with_alpha_one_is_identity() {
        let s = vec![1.0, -3.0, 2.0, 0.5];
        assert_eq!(ema(&s, 1.0), s);
    }

    #[test]
    fn ema_recurrence_by_hand() {
        assert_eq!(ema(&[0.0, 1.0], 0.5), vec![0.0, 0.5]);
        // One more turn of the crank: 0.5*1 + 0.5*0.5 = 0.75.
        assert_eq!(ema(&[0.0, 1.0, 1.0], 0.5), vec![0.0, 0.5, 0.75]);
    }

    fn write_metrics_file(dir: &Path, name: &str, seq_len: usize, rows: &[(f64, f64)]) {
        let mut text = String::from(METRICS_HEADER);
        text.push('\n');
        for (i, (steps, reward)) in rows.iter().enumerate() {
            text.push_str(&format!(
                "{i},{steps},{reward},0.5,0.1,0,{seq_len},0,7\n"
            ));
        }
        fs::write(dir.join(name), text).unwrap();
    }

    #[test]
    fn export_aggregates_across_runs() {
        let dir = tempfile::tempdir().unwrap();
        write_metrics_file(dir.path(), "metrics_seq5_run0.csv", 5, &[(10.0, 1.0), (20.0, 3.0)]);
        write_metrics_file(dir.path(), "metrics_seq5_run1.csv", 5, &[(30.0, 5.0), (40.0, 7.0)]);
        let out = dir.path().join("curves.csv");
        let rows = export_curves(dir.path(), 1.0, &out).unwrap();
        assert_eq!(rows.len(), 2);
        // alpha = 1: raw values. Episode 0: rewards 1 and 5, steps 10 and 30.
        assert_eq!(rows[0].reward_mean, 3.0);
        assert_eq!(rows[0].reward_sd, 2.0);
        assert_eq!(rows[0].steps_mean, 20.0);
        assert_eq!(rows[0].steps_sd, 10.0);
        assert!(out.exists());
    }

    #[test]
    fn mismatched_run_lengths_are_an_error() {
        let dir = tempfile::tempdir().unwrap();
        write_metrics_file(dir.path(), "metrics_seq5_run0.csv", 5, &[(10.0, 1.0), (20.0, 3.0)]);
        write_metrics_file(dir.path(), "metrics_seq5_run1.csv", 5, &[(30.0, 5.0)]);
        let out = dir.path().join("curves.csv");
        assert!(matches!(
            export_curves(dir.path(), 0.5, &out),
            Err(HarnessError::MismatchedEpisodeCounts(_))
        ));
    }

    #[test]
    fn missing_metrics_directory_contents_error() {
        let dir = tempfile::tempdir().unwrap();
        let out = dir.path().join("curves.csv");
        assert!(export_curves(dir.path(), 0.5, &out).is_err());
    }
}
