//! Planar point mass that must reach a goal while avoiding a disc obstacle.
//!
//! Dynamics are a single integrator with additive Gaussian system noise:
//! `s' = clip_bounds(s + clip(a, ±action_limit) + η)`, `η ~ N(0, σ_s² I)`.

use std::collections::BTreeMap;
use std::fmt;

use rand::Rng as _;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::dataset::{Dataset, Trajectory};
use crate::error::{Error, Result};
use crate::rng::{self, Rng};
use crate::stats::binomial_std_error;

pub const ENV_ID: &str = "pmobstacle-v1";

pub type Vec2 = [f64; 2];

fn norm(v: Vec2) -> f64 {
    v[0].hypot(v[1])
}

fn sub(a: Vec2, b: Vec2) -> Vec2 {
    [a[0] - b[0], a[1] - b[1]]
}

/// Distance from `p` to the segment `ab`.
fn segment_distance(p: Vec2, a: Vec2, b: Vec2) -> f64 {
    let ab = sub(b, a);
    let len2 = ab[0] * ab[0] + ab[1] * ab[1];
    let t = if len2 == 0.0 {
        0.0
    } else {
        (((p[0] - a[0]) * ab[0] + (p[1] - a[1]) * ab[1]) / len2).clamp(0.0, 1.0)
    };
    norm(sub(p, [a[0] + t * ab[0], a[1] + t * ab[1]]))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Box2 {
    pub lo: Vec2,
    pub hi: Vec2,
}

impl Box2 {
    pub fn contains(&self, p: Vec2) -> bool {
        (0..2).all(|k| p[k] >= self.lo[k] && p[k] <= self.hi[k])
    }

    pub fn clamp(&self, p: Vec2) -> Vec2 {
        [p[0].clamp(self.lo[0], self.hi[0]), p[1].clamp(self.lo[1], self.hi[1])]
    }

    fn distance_to(&self, p: Vec2) -> f64 {
        norm(sub(self.clamp(p), p))
    }

    fn is_valid(&self) -> bool {
        (0..2).all(|k| self.lo[k].is_finite() && self.hi[k].is_finite() && self.lo[k] <= self.hi[k])
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EnvConfig {
    pub bounds: Box2,
    pub obstacle_center: Vec2,
    pub obstacle_radius: f64,
    pub start_region: Box2,
    pub goal: Vec2,
    pub goal_radius: f64,
    pub max_steps: usize,
    pub action_limit: f64,
    pub sigma_s: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            bounds: Box2 {
                lo: [-1.0, -1.0],
                hi: [1.0, 1.0],
            },
            obstacle_center: [0.0, 0.0],
            obstacle_radius: 0.25,
            start_region: Box2 {
                lo: [-0.9, -0.1],
                hi: [-0.7, 0.1],
            },
            goal: [0.8, 0.0],
            goal_radius: 0.05,
            max_steps: 60,
            action_limit: 0.1,
            sigma_s: 0.0,
        }
    }
}

impl EnvConfig {
    pub fn with_sigma_s(&self, sigma_s: f64) -> Self {
        Self {
            sigma_s,
            ..self.clone()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: &str| Err(Error::argument(format!("environment config: {m}")));
        if !self.bounds.is_valid() || !self.start_region.is_valid() {
            return bad("boxes must be finite with lo <= hi");
        }
        if !(self.obstacle_radius > 0.0) || !(self.goal_radius > 0.0) || !(self.action_limit > 0.0) {
            return bad("obstacle_radius, goal_radius and action_limit must be positive");
        }
        if !(self.sigma_s >= 0.0 && self.sigma_s.is_finite()) {
            return bad("sigma_s must be a finite nonnegative number");
        }
        if self.max_steps == 0 {
            return bad("max_steps must be at least 1");
        }
        if !self.bounds.contains(self.obstacle_center) || !self.bounds.contains(self.goal) {
            return bad("obstacle and goal must lie inside the bounds");
        }
        if norm(sub(self.goal, self.obstacle_center)) <= self.obstacle_radius {
            return bad("goal lies inside the obstacle");
        }
        if self.start_region.distance_to(self.obstacle_center) <= self.obstacle_radius {
            return bad("start region overlaps the obstacle");
        }
        if !(self.bounds.contains(self.start_region.lo) && self.bounds.contains(self.start_region.hi)) {
            return bad("start region must lie inside the bounds");
        }
        Ok(())
    }

    pub fn in_collision(&self, s: Vec2) -> bool {
        norm(sub(s, self.obstacle_center)) < self.obstacle_radius
    }

    pub fn at_goal(&self, s: Vec2) -> bool {
        norm(sub(s, self.goal)) <= self.goal_radius
    }

    pub fn sample_start(&self, rng: &mut Rng) -> Vec2 {
        let r = &self.start_region;
        [
            r.lo[0] + (r.hi[0] - r.lo[0]) * rng.random::<f64>(),
            r.lo[1] + (r.hi[1] - r.lo[1]) * rng.random::<f64>(),
        ]
    }

    pub fn clip_action(&self, a: Vec2) -> Vec2 {
        let l = self.action_limit;
        [a[0].clamp(-l, l), a[1].clamp(-l, l)]
    }
}

/// One transition: `clip_bounds(state + clip(action) + η)`.
pub fn step(config: &EnvConfig, state: Vec2, action: Vec2, sigma_s: f64, rng: &mut Rng) -> Vec2 {
    let a = config.clip_action(action);
    let mut next = [state[0] + a[0], state[1] + a[1]];
    if sigma_s > 0.0 {
        next[0] += sigma_s * rng::normal(rng);
        next[1] += sigma_s * rng::normal(rng);
    }
    config.bounds.clamp(next)
}

/// A controller for the environment. `reset` is called at the start of every episode.
pub trait Policy {
    fn reset(&mut self) {}
    fn act(&mut self, state: Vec2, rng: &mut Rng) -> Vec2;
}

impl<F: FnMut(Vec2) -> Vec2> Policy for F {
    fn act(&mut self, state: Vec2, _rng: &mut Rng) -> Vec2 {
        self(state)
    }
}

/// Waypoint-following controller.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ScriptedExpert {
    pub waypoints: Vec<Vec2>,
    pub gain: f64,
    pub sigma_p: f64,
    pub switch_radius: f64,
    pub action_limit: f64,
    #[serde(skip)]
    active: usize,
}

impl Default for ScriptedExpert {
    fn default() -> Self {
        Self {
            waypoints: vec![[-0.3, 0.37], [0.3, 0.37], [0.8, 0.0]],
            gain: 1.0,
            sigma_p: 0.0,
            switch_radius: 0.1,
            action_limit: 0.1,
            active: 0,
        }
    }
}

impl ScriptedExpert {
    pub fn with_sigma_p(&self, sigma_p: f64) -> Self {
        Self {
            sigma_p,
            active: 0,
            ..self.clone()
        }
    }

    pub fn validate(&self, config: &EnvConfig) -> Result<()> {
        let bad = |m: String| Err(Error::argument(format!("scripted expert: {m}")));
        if self.waypoints.is_empty() {
            return bad("needs at least one waypoint".into());
        }
        if !(self.gain > 0.0) || !(self.switch_radius >= 0.0) || !(self.action_limit > 0.0) {
            return bad("gain and action_limit must be positive, switch_radius nonnegative".into());
        }
        if !(self.sigma_p >= 0.0 && self.sigma_p.is_finite()) {
            return bad("sigma_p must be a finite nonnegative number".into());
        }
        if *self.waypoints.last().expect("nonempty") != config.goal {
            return bad("final waypoint must be the goal".into());
        }
        for (i, w) in self.waypoints.windows(2).enumerate() {
            if segment_distance(config.obstacle_center, w[0], w[1]) <= config.obstacle_radius {
                return bad(format!("segment {i} -> {} crosses the obstacle", i + 1));
            }
        }
        Ok(())
    }

    /// Index of the waypoint currently steered towards.
    pub fn active_waypoint(&self) -> usize {
        self.active
    }

    /// Noise-free action, advancing the active waypoint as it is reached.
    pub fn nominal_action(&mut self, state: Vec2) -> Vec2 {
        let last = self.waypoints.len() - 1;
        while self.active < last && norm(sub(self.waypoints[self.active], state)) < self.switch_radius {
            self.active += 1;
        }
        let delta = sub(self.waypoints[self.active], state);
        let a = [self.gain * delta[0], self.gain * delta[1]];
        // Shrink along the same direction until every component is within the limit.
        let m = a[0].abs().max(a[1].abs());
        if m > self.action_limit {
            let k = self.action_limit / m;
            [a[0] * k, a[1] * k]
        } else {
            a
        }
    }
}

impl Policy for ScriptedExpert {
    fn reset(&mut self) {
        self.active = 0;
    }

    fn act(&mut self, state: Vec2, rng: &mut Rng) -> Vec2 {
        let mut a = self.nominal_action(state);
        if self.sigma_p > 0.0 {
            a[0] += self.sigma_p * rng::normal(rng);
            a[1] += self.sigma_p * rng::normal(rng);
        }
        a
    }
}

/// Action of a freshly reset expert at `state`, including policy noise.
pub fn expert_action(state: Vec2, expert: &ScriptedExpert, rng: &mut Rng) -> Vec2 {
    let mut e = expert.clone();
    e.reset();
    e.act(state, rng)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Outcome {
    Success,
    Collision,
    Timeout,
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Outcome::Success => "success",
            Outcome::Collision => "collision",
            Outcome::Timeout => "timeout",
        })
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct RolloutResult {
    pub trajectory: Trajectory,
    pub outcome: Outcome,
}

/// Run one episode. Recorded actions are the clipped actions actually applied,
/// so each transition satisfies `s' = clip_bounds(s + a + η)`.
pub fn rollout<P: Policy + ?Sized>(
    config: &EnvConfig,
    policy: &mut P,
    sigma_s: f64,
    seed: u64,
    metadata: BTreeMap<String, f64>,
) -> RolloutResult {
    let mut rng = rng::seeded(seed);
    policy.reset();
    let mut s = config.sample_start(&mut rng);
    let mut states = vec![s.to_vec()];
    let mut actions = Vec::new();
    let mut outcome = Outcome::Timeout;
    for _ in 0..config.max_steps {
        let a = config.clip_action(policy.act(s, &mut rng));
        s = step(config, s, a, sigma_s, &mut rng);
        actions.push(a.to_vec());
        states.push(s.to_vec());
        if config.in_collision(s) {
            outcome = Outcome::Collision;
            break;
        }
        if config.at_goal(s) {
            outcome = Outcome::Success;
            break;
        }
    }
    let trajectory = Trajectory::from_states_actions(states, actions, outcome == Outcome::Success, seed, metadata)
        .expect("rollout produces chained states");
    RolloutResult { trajectory, outcome }
}

fn episode_seed(seed: u64, i: usize) -> u64 {
    rng::derive_seed(seed, &[i as u64])
}

/// Roll out the expert `n_episodes` times under the config's system noise and
/// the expert's policy noise. Every episode is kept, flagged by outcome.
pub fn collect_dataset(config: &EnvConfig, expert: &ScriptedExpert, n_episodes: usize, seed: u64) -> Result<Dataset> {
    config.validate()?;
    expert.validate(config)?;
    if n_episodes == 0 {
        return Err(Error::argument("n_episodes must be at least 1"));
    }
    let metadata: BTreeMap<String, f64> = [
        ("sigma_s".to_string(), config.sigma_s),
        ("sigma_p".to_string(), expert.sigma_p),
    ]
    .into();
    let trajectories: Vec<Trajectory> = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let mut e = expert.clone();
            rollout(config, &mut e, config.sigma_s, episode_seed(seed, i), metadata.clone()).trajectory
        })
        .collect();
    Dataset::new(trajectories, ENV_ID, 2, 2)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EvalResult {
    /// Percent of episodes ending in success.
    pub success_rate: f64,
    /// Binomial standard error, in percent.
    pub std_error: f64,
    pub collisions: usize,
    pub timeouts: usize,
    pub episodes: usize,
}

/// Roll out clones of `policy` from fresh start states under `sigma_s_eval`.
pub fn evaluate<P>(
    policy: &P,
    config: &EnvConfig,
    sigma_s_eval: f64,
    n_episodes: usize,
    seed: u64,
) -> Result<EvalResult>
where
    P: Policy + Clone + Sync,
{
    config.validate()?;
    if n_episodes == 0 {
        return Err(Error::argument("n_episodes must be at least 1"));
    }
    if !(sigma_s_eval >= 0.0 && sigma_s_eval.is_finite()) {
        return Err(Error::argument(format!(
            "evaluation sigma_s must be >= 0, got {sigma_s_eval}"
        )));
    }
    let outcomes: Vec<Outcome> = (0..n_episodes)
        .into_par_iter()
        .map(|i| {
            let mut p = policy.clone();
            rollout(config, &mut p, sigma_s_eval, episode_seed(seed, i), BTreeMap::new()).outcome
        })
        .collect();
    let count = |o: Outcome| outcomes.iter().filter(|&&x| x == o).count();
    let frac = count(Outcome::Success) as f64 / n_episodes as f64;
    Ok(EvalResult {
        success_rate: 100.0 * frac,
        std_error: 100.0 * binomial_std_error(frac, n_episodes),
        collisions: count(Outcome::Collision),
        timeouts: count(Outcome::Timeout),
        episodes: n_episodes,
    })
}
