//! Toy continuous-control task: a 2-D point mass steered toward a goal.
//!
//! Observations are goal-relative ([pos, goal − pos], dim 4), actions live
//! in [−1, 1]² and move the mass by `action_scale` per step. Reward is the
//! negative distance to the goal, so returns improve monotonically with
//! faster, straighter approaches.

use crate::error::{Error, Result};
use crate::rng::StreamRng;
use rand::Rng;

pub const OBS_DIM: usize = 4;
pub const ACTION_DIM: usize = 2;

/// Environment parameters; the defaults define the task used throughout.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PointMassConfig {
    pub horizon: usize,
    pub action_scale: f64,
    pub arena_bound: f64,
}

impl Default for PointMassConfig {
    fn default() -> Self {
        PointMassConfig { horizon: 40, action_scale: 0.1, arena_bound: 1.5 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PointMassEnv {
    position: [f64; 2],
    goal: [f64; 2],
    step_count: usize,
    config: PointMassConfig,
    done: bool,
}

impl PointMassEnv {
    /// Fresh episode with position and goal drawn uniformly from [−1, 1]².
    pub fn reset(config: PointMassConfig, rng: &mut StreamRng) -> Self {
        let mut draw = || [rng.gen_range(-1.0..1.0), rng.gen_range(-1.0..1.0)];
        let position = draw();
        let goal = draw();
        PointMassEnv { position, goal, step_count: 0, config, done: false }
    }

    pub fn observation(&self) -> Vec<f64> {
        vec![
            self.position[0],
            self.position[1],
            self.goal[0] - self.position[0],
            self.goal[1] - self.position[1],
        ]
    }

    pub fn is_done(&self) -> bool {
        self.done
    }

    /// Applies a (clamped) action, returns (next observation, reward, done).
    pub fn step(&mut self, action: &[f64]) -> Result<(Vec<f64>, f64, bool)> {
        if self.done {
            return Err(Error::Usage("stepping a finished episode".into()));
        }
        if action.len() != ACTION_DIM {
            return Err(Error::Shape(format!(
                "point-mass action has dim {}, expected {ACTION_DIM}",
                action.len()
            )));
        }
        if action.iter().any(|a| !a.is_finite()) {
            return Err(Error::NonFinite("environment action".into()));
        }
        let bound = self.config.arena_bound;
        for i in 0..2 {
            let a = action[i].clamp(-1.0, 1.0);
            self.position[i] = (self.position[i] + self.config.action_scale * a).clamp(-bound, bound);
        }
        self.step_count += 1;
        self.done = self.step_count >= self.config.horizon;
        let reward = -self.distance_to_goal();
        Ok((self.observation(), reward, self.done))
    }

    fn distance_to_goal(&self) -> f64 {
        let dx = self.position[0] - self.goal[0];
        let dy = self.position[1] - self.goal[1];
        (dx * dx + dy * dy).sqrt()
    }

    #[cfg(test)]
    fn place(position: [f64; 2], goal: [f64; 2], config: PointMassConfig) -> Self {
        PointMassEnv { position, goal, step_count: 0, config, done: false }
    }
}

/// The action a proportional controller would take to land on the goal in
/// one step, clamped to the action box.
fn ideal_action(env: &PointMassEnv) -> [f64; 2] {
    let obs = env.observation();
    let scale = env.config.action_scale;
    [(obs[2] / scale).clamp(-1.0, 1.0), (obs[3] / scale).clamp(-1.0, 1.0)]
}

/// Scripted demonstrations from a deliberately weakened controller: 60% of
/// the ideal proportional action plus small noise, leaving clear headroom
/// for fine-tuning to improve on the cloned behavior.
pub fn scripted_demos(
    config: PointMassConfig,
    episodes: usize,
    rng: &mut StreamRng,
) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
    if episodes == 0 {
        return Err(Error::Domain("need at least one demonstration episode".into()));
    }
    let mut observations = Vec::with_capacity(episodes * config.horizon);
    let mut actions = Vec::with_capacity(episodes * config.horizon);
    for _ in 0..episodes {
        let mut env = PointMassEnv::reset(config, rng);
        while !env.is_done() {
            let ideal = ideal_action(&env);
            let action: Vec<f64> = ideal
                .iter()
                .map(|&a| (0.6 * a + 0.05 * crate::rng::standard_normal(rng)).clamp(-1.0, 1.0))
                .collect();
            observations.push(env.observation());
            env.step(&action)?;
            actions.push(action);
        }
    }
    Ok((observations, actions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream_rng;

    #[test]
    fn zero_action_leaves_position_and_reward_is_negative_distance() {
        let mut env = PointMassEnv::place([0.2, -0.1], [0.5, 0.3], PointMassConfig::default());
        let (obs, reward, done) = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(&obs[..2], &[0.2, -0.1]);
        let expect = -((0.3f64 * 0.3 + 0.4 * 0.4).sqrt());
        assert!((reward - expect).abs() < 1e-15);
        assert!(!done);
    }

    #[test]
    fn reward_is_zero_at_the_goal() {
        let mut env = PointMassEnv::place([0.5, 0.3], [0.5, 0.3], PointMassConfig::default());
        let (_, reward, _) = env.step(&[0.0, 0.0]).unwrap();
        assert_eq!(reward, 0.0);
    }

    #[test]
    fn reset_is_deterministic_in_the_stream() {
        let e1 = PointMassEnv::reset(PointMassConfig::default(), &mut stream_rng(4, &[1, 2]));
        let e2 = PointMassEnv::reset(PointMassConfig::default(), &mut stream_rng(4, &[1, 2]));
        assert_eq!(e1, e2);
        let e3 = PointMassEnv::reset(PointMassConfig::default(), &mut stream_rng(4, &[1, 3]));
        assert_ne!(e1, e3);
    }

    #[test]
    fn episode_terminates_exactly_at_horizon() {
        let config = PointMassConfig { horizon: 3, ..PointMassConfig::default() };
        let mut env = PointMassEnv::place([0.0, 0.0], [1.0, 1.0], config);
        for k in 0..3 {
            let (_, _, done) = env.step(&[0.1, 0.1]).unwrap();
            assert_eq!(done, k == 2);
        }
        assert!(matches!(env.step(&[0.0, 0.0]), Err(Error::Usage(_))));
    }

    #[test]
    fn actions_are_clamped_to_the_unit_box_and_arena() {
        let config = PointMassConfig::default();
        let mut env = PointMassEnv::place([1.45, 0.0], [0.0, 0.0], config);
        env.step(&[10.0, 0.0]).unwrap();
        // clamped action 1.0 moves by 0.1 then hits the arena wall
        assert_eq!(env.observation()[0], 1.5);
        env.step(&[10.0, 0.0]).unwrap();
        assert_eq!(env.observation()[0], 1.5);
    }

    #[test]
    fn nonfinite_action_is_rejected() {
        let mut env = PointMassEnv::place([0.0, 0.0], [1.0, 1.0], PointMassConfig::default());
        assert!(env.step(&[f64::NAN, 0.0]).is_err());
    }

    #[test]
    fn demos_cover_full_episodes_and_stay_in_the_box() {
        let config = PointMassConfig::default();
        let (obs, acts) = scripted_demos(config, 3, &mut stream_rng(9, &[7])).unwrap();
        assert_eq!(obs.len(), 3 * config.horizon);
        assert_eq!(acts.len(), obs.len());
        assert!(acts.iter().flatten().all(|a| a.abs() <= 1.0));
        assert!(obs.iter().all(|o| o.len() == OBS_DIM));
    }

    #[test]
    fn weakened_controller_underperforms_the_ideal_one() {
        // the demo policy must leave headroom: compare episode returns of
        // the scripted 0.6-strength controller against the full controller
        let config = PointMassConfig::default();
        let mut rng = stream_rng(2, &[5]);
        let mut weak_total = 0.0;
        let mut ideal_total = 0.0;
        for _ in 0..20 {
            let template = PointMassEnv::reset(config, &mut rng);
            let mut weak = template.clone();
            while !weak.is_done() {
                let a: Vec<f64> = ideal_action(&weak).iter().map(|x| 0.6 * x).collect();
                weak_total += weak.step(&a).unwrap().1;
            }
            let mut ideal = template.clone();
            while !ideal.is_done() {
                let a = ideal_action(&ideal).to_vec();
                ideal_total += ideal.step(&a).unwrap().1;
            }
        }
        assert!(
            ideal_total > weak_total + 1.0,
            "ideal {ideal_total} should clearly beat weak {weak_total}"
        );
    }
}
