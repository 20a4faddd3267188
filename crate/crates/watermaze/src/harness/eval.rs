//! The `eval` command: greedy rollouts of a trained checkpoint with
//! per-episode trajectory logging and behavioral analysis.

use std::fs;
use std::io::Write;
use std::path::Path;

use super::HarnessError;
use crate::env::{Action, EnvConfig, MazeEnv, TerminationCause, Vec2};
use crate::model::{load_checkpoint, ModelConfig, ModelParams};
use crate::seeding;
use crate::trainer::greedy_from_context;

/// One trajectory line: the pose after executing `action` (row 0 is the
/// spawn state with a zero action and reward).
#[derive(Debug, Clone, PartialEq)]
pub struct TrajectoryRow {
    pub step: u32,
    pub x: f64,
    pub y: f64,
    pub heading: f64,
    pub action: u8,
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct EvalEpisode {
    pub index: usize,
    pub seed: u64,
    pub steps: u32,
    pub total_reward: f64,
    pub success: bool,
    pub collisions: u64,
    pub oscillated: bool,
    pub trajectory: Vec<TrajectoryRow>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub episodes: usize,
    pub success_rate: f64,
    pub mean_steps: f64,
    pub median_steps: f64,
    pub collision_count: u64,
    pub oscillation_rate: f64,
}

/// True iff some window of `k` consecutive actions consists solely of
/// rotations in strict left/right alternation.
pub fn detect_oscillation(actions: &[Action], k: usize) -> bool {
    if k < 2 || actions.len() < k {
        return false;
    }
    let is_turn = |a: Action| matches!(a, Action::TurnLeft | Action::TurnRight);
    actions.windows(k).any(|w| {
        w.iter().all(|&a| is_turn(a)) && w.windows(2).all(|p| p[0] != p[1])
    })
}

/// Run greedy evaluation episodes (no exploration, no dropout).
pub fn evaluate(
    params: &ModelParams<f32>,
    mcfg: &ModelConfig,
    env_cfg: &EnvConfig,
    platform: Vec2,
    episodes: usize,
    seed: u64,
    oscillation_window: usize,
) -> Result<Vec<EvalEpisode>, HarnessError> {
    if env_cfg.obs_dim() != mcfg.obs_dim {
        return Err(HarnessError::ShapeMismatch(format!(
            "environment emits {}-dim observations, checkpoint expects {}",
            env_cfg.obs_dim(),
            mcfg.obs_dim
        )));
    }
    let mut env = MazeEnv::new(env_cfg.clone(), platform)?;
    let n = mcfg.max_seq_len;
    let mut out = Vec::with_capacity(episodes);
    for index in 0..episodes {
        let ep_seed = seeding::mix(seed, &[index as u64]);
        let (pose, obs) = env.reset(ep_seed);
        let mut context: Vec<Vec<f64>> = vec![obs.values().to_vec()];
        let mut trajectory = vec![TrajectoryRow {
            step: 0,
            x: pose.x,
            y: pose.y,
            heading: pose.heading,
            action: 0,
            reward: 0.0,
            done: false,
        }];
        let mut actions: Vec<Action> = Vec::new();
        let mut total_reward = 0.0;
        let mut collisions = 0u64;
        let success;
        loop {
            let start = context.len().saturating_sub(n);
            let flat: Vec<f64> = context[start..].iter().flatten().copied().collect();
            let action = greedy_from_context(params, mcfg, &flat)?;
            let result = env.step(action)?;
            let pose = env.pose();
            total_reward += result.reward;
            if result.collided {
                collisions += 1;
            }
            actions.push(action);
            trajectory.push(TrajectoryRow {
                step: env.steps_taken(),
                x: pose.x,
                y: pose.y,
                heading: pose.heading,
                action: action.code(),
                reward: result.reward,
                done: result.done,
            });
            if result.done {
                success = result.termination_cause == Some(TerminationCause::PlatformReached);
                break;
            }
            context.push(result.observation.into_values());
        }
        out.push(EvalEpisode {
            index,
            seed: ep_seed,
            steps: env.steps_taken(),
            total_reward,
            success,
            collisions,
            oscillated: detect_oscillation(&actions, oscillation_window),
            trajectory,
        });
    }
    Ok(out)
}

pub fn summarize(episodes: &[EvalEpisode]) -> EvalReport {
    let n = episodes.len();
    let successes = episodes.iter().filter(|e| e.success).count();
    let mut steps: Vec<u32> = episodes.iter().map(|e| e.steps).collect();
    steps.sort_unstable();
    let median = if steps.is_empty() {
        0.0
    } else if steps.len() % 2 == 1 {
        steps[steps.len() / 2] as f64
    } else {
        (steps[steps.len() / 2 - 1] as f64 + steps[steps.len() / 2] as f64) / 2.0
    };
    EvalReport {
        episodes: n,
        success_rate: successes as f64 / n.max(1) as f64,
        mean_steps: steps.iter().map(|&s| s as f64).sum::<f64>() / n.max(1) as f64,
        median_steps: median,
        collision_count: episodes.iter().map(|e| e.collisions).sum(),
        oscillation_rate: episodes.iter().filter(|e| e.oscillated).count() as f64
            / n.max(1) as f64,
    }
}

/// Trajectory file: one `step,x,y,heading,action,reward,done` record per
/// line. Floats use scientific notation with 16 fractional digits, enough
/// to round-trip f64 exactly.
pub fn write_trajectory(path: &Path, rows: &[TrajectoryRow]) -> Result<(), HarnessError> {
    let mut out = String::with_capacity(rows.len() * 80 + 64);
    out.push_str("step,x,y,heading,action,reward,done\n");
    for r in rows {
        out.push_str(&format!(
            "{},{:.16e},{:.16e},{:.16e},{},{:.16e},{}\n",
            r.step,
            r.x,
            r.y,
            r.heading,
            r.action,
            r.reward,
            r.done as u8
        ));
    }
    fs::write(path, out)?;
    Ok(())
}

fn render_report(report: &EvalReport, checkpoint: &Path, platform: Vec2, seed: u64) -> String {
    format!(
        "checkpoint = {}\n\
         seed = {}\n\
         platform_x = {}\n\
         platform_y = {}\n\
         episodes = {}\n\
         success_rate = {}\n\
         mean_steps = {}\n\
         median_steps = {}\n\
         collision_count = {}\n\
         oscillation_rate = {}\n",
        checkpoint.display(),
        seed,
        platform.x,
        platform.y,
        report.episodes,
        report.success_rate,
        report.mean_steps,
        report.median_steps,
        report.collision_count,
        report.oscillation_rate
    )
}

/// Load a checkpoint, run greedy episodes, and write the report plus one
/// trajectory file per episode (when a directory is given). Returns the
/// report.
#[allow(clippy::too_many_arguments)]
pub fn cmd_eval(
    checkpoint: &Path,
    env_cfg: &EnvConfig,
    platform: Vec2,
    episodes: usize,
    seed: u64,
    oscillation_window: usize,
    trajectory_dir: Option<&Path>,
    report_path: Option<&Path>,
) -> Result<EvalReport, HarnessError> {
    let (params, mcfg) = load_checkpoint(checkpoint)?;
    let results = evaluate(
        &params,
        &mcfg,
        env_cfg,
        platform,
        episodes,
        seed,
        oscillation_window,
    )?;
    if let Some(dir) = trajectory_dir {
        fs::create_dir_all(dir)?;
        for ep in &results {
            write_trajectory(&dir.join(format!("traj_ep{:04}.csv", ep.index)), &ep.trajectory)?;
        }
    }
    let report = summarize(&results);
    let text = render_report(&report, checkpoint, platform, seed);
    if let Some(path) = report_path {
        let mut f = fs::File::create(path)?;
        f.write_all(text.as_bytes())?;
    }
    print!("{text}");
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn turns(pattern: &str) -> Vec<Action> {
        pattern
            .chars()
            .map(|c| match c {
                'L' => Action::TurnLeft,
                'R' => Action::TurnRight,
                'F' => Action::Forward,
                _ => Action::NoOp,
            })
            .collect()
    }

    #[test]
    fn alternating_turns_oscillate() {
        let actions = turns(&"LR".repeat(10));
        assert!(detect_oscillation(&actions, 20));
    }

    #[test]
    fn forward_motion_never_oscillates() {
        let actions = turns(&"F".repeat(50));
        assert!(!detect_oscillation(&actions, 20));
    }

    #[test]
    fn nineteen_alternations_then_forward_is_not_oscillation() {
        // 19 alternating turns followed by a forward step: no window of 20
        // consecutive rotations exists.
        let mut actions = turns("LRLRLRLRLRLRLRLRLRL");
        assert_eq!(actions.len(), 19);
        actions.push(Action::Forward);
        assert!(!detect_oscillation(&actions, 20));
    }

    #[test]
    fn same_direction_turns_are_not_oscillation() {
        let actions = turns(&"L".repeat(30));
        assert!(!detect_oscillation(&actions, 20));
    }

    #[test]
    fn oscillation_buried_in_other_actions_is_found() {
        let mut actions = turns(&"F".repeat(7));
        actions.extend(turns(&"RL".repeat(10)));
        actions.extend(turns(&"F".repeat(3)));
        assert!(detect_oscillation(&actions, 20));
    }
}
