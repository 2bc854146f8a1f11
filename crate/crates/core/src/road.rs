//! A vehicle on a straight road: position and speed, two accelerations,
//! walls at both ends. Includes a value-iteration solver, trace generation
//! from the solved policy and a sweep over impurity weightings.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::dataset::{augment, Actions, AugmentedDataset, DataError, Episode, TraceDataset};
use crate::impurity::Theta;
use crate::tree::{grow, Losses, TreeError};

#[derive(Debug, Error)]
pub enum RoadError {
    #[error("invalid road configuration: {0}")]
    Config(String),
    #[error("value iteration did not converge after {iterations} sweeps (residual {residual:e})")]
    NoConvergence { iterations: usize, residual: f64 },
    #[error("unknown preset {0:?}; expected one of oscillate, exit_right, speed_right, slow")]
    UnknownPreset(String),
    #[error(transparent)]
    Data(#[from] DataError),
    #[error(transparent)]
    Tree(#[from] TreeError),
}

/// How a successor state is read off the value grid.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Successor {
    Nearest,
    #[default]
    Bilinear,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RoadConfig {
    pub r_left: f64,
    pub r_right: f64,
    pub r_speed: f64,
    pub gamma: f64,
    pub n_pos: usize,
    pub n_speed: usize,
    pub pos_range: (f64, f64),
    pub speed_range: (f64, f64),
    pub actions: [f64; 2],
    pub successor: Successor,
}

impl Default for RoadConfig {
    fn default() -> Self {
        RoadConfig {
            r_left: -100.0,
            r_right: -100.0,
            r_speed: 10.0,
            gamma: 0.99,
            n_pos: 30,
            n_speed: 30,
            pos_range: (0.0, 3.0),
            speed_range: (-0.1, 0.1),
            actions: [-0.001, 0.001],
            successor: Successor::Bilinear,
        }
    }
}

pub const PRESETS: [&str; 4] = ["oscillate", "exit_right", "speed_right", "slow"];

impl RoadConfig {
    pub fn with_rewards(r_left: f64, r_right: f64, r_speed: f64) -> Self {
        RoadConfig { r_left, r_right, r_speed, ..RoadConfig::default() }
    }

    /// Named reward variants: `oscillate` (-100, -100, 10), `exit_right`
    /// (-100, 100, 0), `speed_right` (-100, 0, 10) and `slow` (-100, -100, -10).
    pub fn preset(name: &str) -> Result<Self, RoadError> {
        let (l, r, s) = match name {
            "oscillate" => (-100.0, -100.0, 10.0),
            "exit_right" => (-100.0, 100.0, 0.0),
            "speed_right" => (-100.0, 0.0, 10.0),
            "slow" => (-100.0, -100.0, -10.0),
            _ => return Err(RoadError::UnknownPreset(name.into())),
        };
        Ok(RoadConfig::with_rewards(l, r, s))
    }

    pub fn validate(&self) -> Result<(), RoadError> {
        let bad = |m: &str| Err(RoadError::Config(m.into()));
        if !(0.0..=1.0).contains(&self.gamma) {
            return bad("gamma must lie in [0, 1]");
        }
        if self.n_pos < 2 || self.n_speed < 2 {
            return bad("grid must be at least 2x2");
        }
        if !(self.pos_range.0 < self.pos_range.1) || !(self.speed_range.0 < self.speed_range.1) {
            return bad("ranges must be non-empty");
        }
        if [self.r_left, self.r_right, self.r_speed].iter().chain(&self.actions).any(|x| !x.is_finite()) {
            return bad("rewards and actions must be finite");
        }
        Ok(())
    }

    pub fn pos_grid(&self) -> Vec<f64> {
        linspace(self.pos_range, self.n_pos)
    }

    pub fn speed_grid(&self) -> Vec<f64> {
        linspace(self.speed_range, self.n_speed)
    }
}

fn linspace((lo, hi): (f64, f64), n: usize) -> Vec<f64> {
    (0..n).map(|i| if i + 1 == n { hi } else { lo + (hi - lo) * i as f64 / (n - 1) as f64 }).collect()
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct StepResult {
    pub state: [f64; 2],
    pub reward: f64,
    pub terminal: bool,
}

/// One time step: speed changes first, then position moves by the new speed.
/// Leaving the road ends the episode with that wall's reward instead of the
/// speed reward.
pub fn step(config: &RoadConfig, [pos, speed]: [f64; 2], acc: f64) -> StepResult {
    let (smin, smax) = config.speed_range;
    let speed = (speed + acc).clamp(smin, smax);
    let pos = pos + speed;
    let (lo, hi) = config.pos_range;
    let (reward, terminal) = if pos < lo {
        (config.r_left, true)
    } else if pos > hi {
        (config.r_right, true)
    } else {
        (config.r_speed * speed.abs(), false)
    };
    StepResult { state: [pos, speed], reward, terminal }
}

/// Optimal values and greedy actions on the (pos, speed) grid.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GridPolicy {
    pub config: RoadConfig,
    pub pos: Vec<f64>,
    pub speed: Vec<f64>,
    /// `values[i][j]` at `(pos[i], speed[j])`.
    pub values: Vec<Vec<f64>>,
    /// Index into `config.actions`.
    pub actions: Vec<Vec<usize>>,
    pub iterations: usize,
    pub residual: f64,
}

fn nearest(grid: &[f64], x: f64) -> usize {
    let (lo, hi) = (grid[0], grid[grid.len() - 1]);
    let t = (x - lo) / (hi - lo) * (grid.len() - 1) as f64;
    (t.round().max(0.0) as usize).min(grid.len() - 1)
}

/// Lower cell index and interpolation weight along one axis, clamped to the grid.
fn bracket(grid: &[f64], x: f64) -> (usize, f64) {
    let n = grid.len();
    let (lo, hi) = (grid[0], grid[n - 1]);
    let t = ((x - lo) / (hi - lo) * (n - 1) as f64).clamp(0.0, (n - 1) as f64);
    let i = (t.floor() as usize).min(n - 2);
    (i, t - i as f64)
}

fn lookup(config: &RoadConfig, pos: &[f64], speed: &[f64], values: &[Vec<f64>], [p, s]: [f64; 2]) -> f64 {
    match config.successor {
        Successor::Nearest => values[nearest(pos, p)][nearest(speed, s)],
        Successor::Bilinear => {
            let (i, u) = bracket(pos, p);
            let (j, v) = bracket(speed, s);
            (1.0 - u) * ((1.0 - v) * values[i][j] + v * values[i][j + 1])
                + u * ((1.0 - v) * values[i + 1][j] + v * values[i + 1][j + 1])
        }
    }
}

fn backup(config: &RoadConfig, pos: &[f64], speed: &[f64], values: &[Vec<f64>], state: [f64; 2]) -> (f64, usize) {
    let mut best = (f64::NEG_INFINITY, 0);
    for (k, &acc) in config.actions.iter().enumerate() {
        let r = step(config, state, acc);
        let q = if r.terminal { r.reward } else { r.reward + config.gamma * lookup(config, pos, speed, values, r.state) };
        // ties keep the earlier action
        if q > best.0 {
            best = (q, k);
        }
    }
    best
}

pub const MAX_SWEEPS: usize = 200_000;

/// Value iteration until the largest change in a sweep drops below `tolerance`.
pub fn dp_solve(config: &RoadConfig, tolerance: f64) -> Result<GridPolicy, RoadError> {
    config.validate()?;
    let (pos, speed) = (config.pos_grid(), config.speed_grid());
    let mut values = vec![vec![0.0; speed.len()]; pos.len()];
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    while residual >= tolerance {
        if iterations == MAX_SWEEPS {
            return Err(RoadError::NoConvergence { iterations, residual });
        }
        let next: Vec<Vec<f64>> = pos
            .iter()
            .map(|&p| speed.iter().map(|&s| backup(config, &pos, &speed, &values, [p, s]).0).collect())
            .collect();
        residual = next.iter().flatten().zip(values.iter().flatten()).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        values = next;
        iterations += 1;
    }
    let actions =
        pos.iter().map(|&p| speed.iter().map(|&s| backup(config, &pos, &speed, &values, [p, s]).1).collect()).collect();
    Ok(GridPolicy { config: config.clone(), pos, speed, values, actions, iterations, residual })
}

impl GridPolicy {
    /// Action index of the grid cell nearest to `state`.
    pub fn action_index(&self, [p, s]: [f64; 2]) -> usize {
        self.actions[nearest(&self.pos, p)][nearest(&self.speed, s)]
    }

    pub fn action(&self, state: [f64; 2]) -> f64 {
        self.config.actions[self.action_index(state)]
    }

    pub fn value(&self, state: [f64; 2]) -> f64 {
        lookup(&self.config, &self.pos, &self.speed, &self.values, state)
    }

    /// Runs the policy from `start` for at most `max_steps` steps; returns the
    /// visited states (including `start`) and whether a wall was hit.
    pub fn rollout(&self, start: [f64; 2], max_steps: usize) -> (Vec<[f64; 2]>, bool) {
        let mut states = vec![start];
        let mut s = start;
        for _ in 0..max_steps {
            let r = step(&self.config, s, self.action(s));
            if r.terminal {
                return (states, true);
            }
            s = r.state;
            states.push(s);
        }
        (states, false)
    }
}

/// Action labels as written to trace files.
pub fn action_label(acc: f64) -> String {
    format!("{acc}")
}

/// Episodes from uniformly random starts under the policy, each cut at
/// `episode_len` steps, concatenated until exactly `n_samples` samples.
pub fn generate_dataset(policy: &GridPolicy, n_samples: usize, episode_len: usize, seed: u64) -> Result<TraceDataset, RoadError> {
    if episode_len == 0 {
        return Err(RoadError::Config("episode length must be positive".into()));
    }
    let config = &policy.config;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (mut states, mut labels, mut rewards, mut episodes) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    while states.len() < n_samples {
        let start = states.len();
        let mut s = [rng.gen_range(config.pos_range.0..=config.pos_range.1), rng.gen_range(config.speed_range.0..=config.speed_range.1)];
        let mut terminal = false;
        while states.len() - start < episode_len && states.len() < n_samples {
            let acc = policy.action(s);
            let r = step(config, s, acc);
            states.push(s.to_vec());
            labels.push(action_label(acc));
            rewards.push(r.reward);
            if r.terminal {
                terminal = true;
                break;
            }
            s = r.state;
        }
        episodes.push(Episode { start, len: states.len() - start, terminal });
    }
    let actions = Actions::discrete_from_labels(&labels);
    Ok(TraceDataset::new(vec!["pos".into(), "speed".into()], states, actions, rewards, episodes)?)
}

/// Weightings `(i, j, k) / steps` with `i + j + k = steps`.
pub fn simplex_grid(steps: usize) -> Vec<Theta> {
    let steps = steps.max(1);
    let mut out = Vec::new();
    for i in 0..=steps {
        for j in 0..=steps - i {
            let k = steps - i - j;
            let w = [i as f64, j as f64, k as f64].map(|x| x / steps as f64);
            out.push(Theta::new(w).expect("simplex weights are valid"));
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub theta: Theta,
    pub action_loss: f64,
    pub value_loss: f64,
    pub deriv_loss: f64,
    /// Largest of the three losses, each divided by the loss of the
    /// single-channel weighting for that channel.
    pub worst_normalised_loss: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub rows: Vec<SweepRow>,
    /// Losses of the three single-channel weightings.
    pub reference: [f64; 3],
    /// Index of the row with the smallest worst normalised loss (earliest on ties).
    pub best: usize,
}

fn fit_losses(data: &AugmentedDataset, theta: Theta, max_leaves: usize, min_leaf: usize) -> Result<Losses, RoadError> {
    Ok(grow(data, theta, max_leaves, min_leaf)?.evaluate_losses(data))
}

/// Grows one tree per weighting in parallel and scores training losses.
pub fn theta_sweep(
    data: &AugmentedDataset,
    thetas: &[Theta],
    max_leaves: usize,
    min_leaf: usize,
) -> Result<SweepResult, RoadError> {
    if thetas.is_empty() {
        return Err(RoadError::Config("empty weighting grid".into()));
    }
    let exclusive = [Theta::action_only(), Theta::value_only(), Theta::derivative_only()];
    let all: Vec<Theta> = thetas.iter().chain(&exclusive).copied().collect();
    let losses: Vec<Losses> = all.par_iter().map(|t| fit_losses(data, *t, max_leaves, min_leaf)).collect::<Result<_, _>>()?;
    let own = |k: usize, l: &Losses| [l.action, l.value, l.derivative][k];
    let reference: [f64; 3] = std::array::from_fn(|k| own(k, &losses[thetas.len() + k]));
    let rows: Vec<SweepRow> = thetas
        .iter()
        .zip(&losses)
        .map(|(t, l)| {
            let worst = (0..3).map(|k| own(k, l) / reference[k].max(1e-12)).fold(0.0, f64::max);
            SweepRow { theta: *t, action_loss: l.action, value_loss: l.value, deriv_loss: l.derivative, worst_normalised_loss: worst }
        })
        .collect();
    let best = (0..rows.len()).fold(0, |b, i| if rows[i].worst_normalised_loss < rows[b].worst_normalised_loss { i } else { b });
    Ok(SweepResult { rows, reference, best })
}

/// Augments a generated road dataset with the configuration's discount.
pub fn augment_road(config: &RoadConfig, data: TraceDataset) -> Result<AugmentedDataset, RoadError> {
    Ok(augment(data, config.gamma)?)
}
