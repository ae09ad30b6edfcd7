//! Particle benchmark tasks: Coverage Control and Formation Control.
//!
//! Agents are damped double integrators on the plane:
//!
//! ```text
//! v <- (1 - damping) * v + a * dt   (+ optional Gaussian noise), |v| <= max_speed
//! p <- p + v * dt                   (clamped to the world box)
//! ```
//!
//! Local observations hold only the agent's own state and the landmarks
//! relative to it; other agents' states arrive through the network.

use std::io::Write;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type Vec2 = [f64; 2];

/// Length of the state broadcast by an agent: position and velocity.
pub const PAYLOAD_LEN: usize = 4;
/// Control dimensions per agent (horizontal, vertical).
pub const CONTROL_DIM: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Task {
    Coverage,
    Formation,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EnvConfig {
    pub task: Task,
    pub n_agents: usize,
    pub n_landmarks: usize,
    pub episode_length: usize,
    pub dt: f64,
    pub damping: f64,
    pub max_speed: f64,
    /// Agents live in `[-world_half, world_half]^2`.
    pub world_half: f64,
    /// Landmarks are sampled in `[-landmark_half, landmark_half]^2`.
    pub landmark_half: f64,
    /// Standard deviation of the velocity noise; zero disables it.
    pub noise_std: f64,
    /// Formation: desired distance to the landmark.
    pub target_radius: f64,
    /// Formation: weight of the angular spacing penalty.
    pub angular_weight: f64,
}

impl Default for EnvConfig {
    fn default() -> Self {
        Self {
            task: Task::Coverage,
            n_agents: 3,
            n_landmarks: 3,
            episode_length: 50,
            dt: 0.1,
            damping: 0.25,
            max_speed: 1.0,
            world_half: 1.5,
            landmark_half: 1.0,
            noise_std: 0.0,
            target_radius: 0.5,
            angular_weight: 1.0,
        }
    }
}

impl EnvConfig {
    pub fn coverage(n_agents: usize, n_landmarks: usize) -> Self {
        Self {
            task: Task::Coverage,
            n_agents,
            n_landmarks,
            ..Self::default()
        }
    }

    pub fn formation(n_agents: usize) -> Self {
        Self {
            task: Task::Formation,
            n_agents,
            n_landmarks: 1,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.n_agents < 2 {
            return fail(format!("env.n_agents must be at least 2, got {}", self.n_agents));
        }
        match self.task {
            Task::Coverage if self.n_landmarks < 1 => {
                return fail("env.n_landmarks must be at least 1 for coverage".into())
            }
            Task::Formation if self.n_landmarks != 1 => {
                return fail(format!(
                    "env.n_landmarks must be 1 for formation, got {}",
                    self.n_landmarks
                ))
            }
            _ => {}
        }
        if self.episode_length == 0 {
            return fail("env.episode_length must be positive".into());
        }
        let positive = [
            ("dt", self.dt),
            ("max_speed", self.max_speed),
            ("world_half", self.world_half),
            ("landmark_half", self.landmark_half),
        ];
        for (name, v) in positive {
            if !(v.is_finite() && v > 0.0) {
                return fail(format!("env.{name} must be positive, got {v}"));
            }
        }
        if !(0.0..=1.0).contains(&self.damping) {
            return fail(format!("env.damping must lie in [0, 1], got {}", self.damping));
        }
        if !(self.noise_std.is_finite() && self.noise_std >= 0.0) {
            return fail(format!("env.noise_std must be non-negative, got {}", self.noise_std));
        }
        if self.landmark_half > self.world_half {
            return fail("env.landmark_half must not exceed env.world_half".into());
        }
        if !(self.target_radius.is_finite() && self.target_radius >= 0.0) {
            return fail("env.target_radius must be non-negative".into());
        }
        if !(self.angular_weight.is_finite() && self.angular_weight >= 0.0) {
            return fail("env.angular_weight must be non-negative".into());
        }
        Ok(())
    }

    /// Length of one agent's local observation, `4 + 2M`.
    pub fn obs_dim(&self) -> usize {
        4 + 2 * self.n_landmarks
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub positions: Vec<Vec2>,
    pub velocities: Vec<Vec2>,
    pub landmarks: Vec<Vec2>,
    pub step: usize,
}

impl WorldState {
    /// Agent `i`'s broadcast state `[p.x, p.y, v.x, v.y]`.
    pub fn broadcast_payload(&self, agent: usize) -> [f64; PAYLOAD_LEN] {
        let p = self.positions[agent];
        let v = self.velocities[agent];
        [p[0], p[1], v[0], v[1]]
    }

    pub fn local_observation(&self, agent: usize) -> Vec<f64> {
        let p = self.positions[agent];
        let v = self.velocities[agent];
        let mut obs = Vec::with_capacity(4 + 2 * self.landmarks.len());
        obs.extend_from_slice(&[p[0], p[1], v[0], v[1]]);
        for l in &self.landmarks {
            obs.push(l[0] - p[0]);
            obs.push(l[1] - p[1]);
        }
        obs
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        (0..self.positions.len()).map(|i| self.local_observation(i)).collect()
    }
}

fn dist(a: Vec2, b: Vec2) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// `-(1/M) * sum_j min_i |landmark_j - p_i|`.
pub fn coverage_reward(state: &WorldState) -> f64 {
    let m = state.landmarks.len();
    let total: f64 = state
        .landmarks
        .iter()
        .map(|&l| {
            state
                .positions
                .iter()
                .map(|&p| dist(l, p))
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    -total / m as f64
}

/// Polar angle of `p` around `center` in `[0, 2pi)`; 0 when they coincide.
pub fn polar_angle(p: Vec2, center: Vec2) -> f64 {
    let (dx, dy) = (p[0] - center[0], p[1] - center[1]);
    if dx == 0.0 && dy == 0.0 {
        return 0.0;
    }
    let a = dy.atan2(dx);
    if a < 0.0 {
        a + std::f64::consts::TAU
    } else {
        a
    }
}

/// Radial plus angular-spacing penalty around the (single) landmark.
///
/// `-(1/N) sum_i | |p_i - c| - radius |  -  w (1/N) sum_k |gap_k - 2pi/N|`
/// where `gap_k` are the consecutive differences of the agents' sorted polar
/// angles, including the wrap-around gap.
pub fn formation_reward(state: &WorldState, target_radius: f64, angular_weight: f64) -> f64 {
    let c = state.landmarks[0];
    let n = state.positions.len();
    let radial: f64 = state
        .positions
        .iter()
        .map(|&p| (dist(p, c) - target_radius).abs())
        .sum::<f64>()
        / n as f64;

    let mut angles: Vec<f64> = state.positions.iter().map(|&p| polar_angle(p, c)).collect();
    angles.sort_by(|a, b| a.total_cmp(b));
    let ideal = std::f64::consts::TAU / n as f64;
    let mut angular = 0.0;
    for k in 0..n {
        let gap = if k + 1 < n {
            angles[k + 1] - angles[k]
        } else {
            std::f64::consts::TAU - angles[n - 1] + angles[0]
        };
        angular += (gap - ideal).abs();
    }
    angular /= n as f64;
    -radial - angular_weight * angular
}

/// Result of one environment transition.
#[derive(Debug, Clone, PartialEq)]
pub struct StepOutcome {
    pub observations: Vec<Vec<f64>>,
    /// Shared control reward, identical for every agent.
    pub reward: f64,
    pub done: bool,
}

#[derive(Debug, Clone)]
pub struct Environment {
    config: EnvConfig,
    state: WorldState,
}

fn uniform_point<R: Rng + ?Sized>(rng: &mut R, half: f64) -> Vec2 {
    [rng.gen_range(-half..=half), rng.gen_range(-half..=half)]
}

impl Environment {
    pub fn new(config: EnvConfig) -> Result<Self> {
        config.validate()?;
        let state = WorldState {
            positions: vec![[0.0; 2]; config.n_agents],
            velocities: vec![[0.0; 2]; config.n_agents],
            landmarks: vec![[0.0; 2]; config.n_landmarks],
            step: 0,
        };
        Ok(Self { config, state })
    }

    pub fn config(&self) -> &EnvConfig {
        &self.config
    }

    pub fn state(&self) -> &WorldState {
        &self.state
    }

    /// Replace the world state, e.g. to evaluate hand-built layouts.
    pub fn set_state(&mut self, state: WorldState) -> Result<()> {
        if state.positions.len() != self.config.n_agents
            || state.velocities.len() != self.config.n_agents
            || state.landmarks.len() != self.config.n_landmarks
        {
            return Err(Error::Config(
                "world state does not match the environment config".into(),
            ));
        }
        self.state = state;
        Ok(())
    }

    /// Sample landmarks, then agent positions, from one stream.
    pub fn reset<R: Rng + ?Sized>(&mut self, rng: &mut R) -> Vec<Vec<f64>> {
        let landmarks = (0..self.config.n_landmarks)
            .map(|_| uniform_point(rng, self.config.landmark_half))
            .collect();
        let positions = (0..self.config.n_agents)
            .map(|_| uniform_point(rng, self.config.world_half))
            .collect();
        self.install(landmarks, positions)
    }

    /// Sample landmarks from `landmark_rng` and agent `i`'s spawn point from
    /// `agent_rngs[i]`, so each agent's randomness follows its own stream.
    pub fn reset_per_agent<R: Rng, A: Rng>(&mut self, landmark_rng: &mut R, agent_rngs: &mut [A]) -> Vec<Vec<f64>> {
        assert_eq!(agent_rngs.len(), self.config.n_agents, "one spawn stream per agent");
        let landmarks = (0..self.config.n_landmarks)
            .map(|_| uniform_point(landmark_rng, self.config.landmark_half))
            .collect();
        let positions = agent_rngs
            .iter_mut()
            .map(|r| uniform_point(r, self.config.world_half))
            .collect();
        self.install(landmarks, positions)
    }

    fn install(&mut self, landmarks: Vec<Vec2>, positions: Vec<Vec2>) -> Vec<Vec<f64>> {
        self.state = WorldState {
            velocities: vec![[0.0; 2]; positions.len()],
            positions,
            landmarks,
            step: 0,
        };
        self.state.observations()
    }

    pub fn reward(&self) -> f64 {
        match self.config.task {
            Task::Coverage => coverage_reward(&self.state),
            Task::Formation => formation_reward(&self.state, self.config.target_radius, self.config.angular_weight),
        }
    }

    pub fn observations(&self) -> Vec<Vec<f64>> {
        self.state.observations()
    }

    pub fn broadcast_payload(&self, agent: usize) -> Result<[f64; PAYLOAD_LEN]> {
        if agent >= self.config.n_agents {
            return Err(Error::Input(format!(
                "agent {agent} out of range for {} agents",
                self.config.n_agents
            )));
        }
        Ok(self.state.broadcast_payload(agent))
    }

    /// Advance one step with each agent's control action, clipped to
    /// `[-1, 1]^2`. `rng` is only drawn from when process noise is enabled.
    pub fn step<R: Rng + ?Sized>(&mut self, actions: &[Vec2], rng: &mut R) -> Result<StepOutcome> {
        let cfg = &self.config;
        if actions.len() != cfg.n_agents {
            return Err(Error::Config(format!(
                "expected {} actions, got {}",
                cfg.n_agents,
                actions.len()
            )));
        }
        if self.state.step >= cfg.episode_length {
            return Err(Error::Input("episode already finished; reset first".into()));
        }
        if let Some(i) = actions.iter().position(|a| !(a[0].is_finite() && a[1].is_finite())) {
            return Err(Error::Input(format!("action of agent {i} is not finite")));
        }
        let noise = if cfg.noise_std > 0.0 {
            Some(Normal::new(0.0, cfg.noise_std).map_err(|e| Error::Config(e.to_string()))?)
        } else {
            None
        };
        let keep = 1.0 - cfg.damping;
        for (i, a) in actions.iter().enumerate() {
            let a = [a[0].clamp(-1.0, 1.0), a[1].clamp(-1.0, 1.0)];
            let v = &mut self.state.velocities[i];
            v[0] = keep * v[0] + a[0] * cfg.dt;
            v[1] = keep * v[1] + a[1] * cfg.dt;
            if let Some(noise) = &noise {
                v[0] += noise.sample(rng);
                v[1] += noise.sample(rng);
            }
            let speed = v[0].hypot(v[1]);
            if speed > cfg.max_speed {
                let s = cfg.max_speed / speed;
                v[0] *= s;
                v[1] *= s;
            }
            let p = &mut self.state.positions[i];
            p[0] = (p[0] + v[0] * cfg.dt).clamp(-cfg.world_half, cfg.world_half);
            p[1] = (p[1] + v[1] * cfg.dt).clamp(-cfg.world_half, cfg.world_half);
        }
        self.state.step += 1;
        Ok(StepOutcome {
            observations: self.state.observations(),
            reward: self.reward(),
            done: self.state.step >= self.config.episode_length,
        })
    }
}

/// One row of an exported episode trace.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceRow {
    pub episode: usize,
    pub step: usize,
    pub agent: usize,
    pub position: Vec2,
    pub velocity: Vec2,
    pub action: Vec2,
    pub reward: f64,
}

pub const TRACE_CSV_HEADER: &str = "episode,step,agent,px,py,vx,vy,ax,ay,reward";

pub fn write_trace_csv<W: Write>(mut out: W, rows: &[TraceRow]) -> std::io::Result<()> {
    writeln!(out, "# priocomm episode-trace v1")?;
    writeln!(out, "{TRACE_CSV_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{},{},{}",
            r.episode,
            r.step,
            r.agent,
            r.position[0],
            r.position[1],
            r.velocity[0],
            r.velocity[1],
            r.action[0],
            r.action[1],
            r.reward
        )?;
    }
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn state(positions: Vec<Vec2>, landmarks: Vec<Vec2>) -> WorldState {
        WorldState {
            velocities: vec![[0.0; 2]; positions.len()],
            positions,
            landmarks,
            step: 0,
        }
    }

    #[test]
    fn reset_is_deterministic_and_shaped() {
        let mut env = Environment::new(EnvConfig::coverage(3, 3)).unwrap();
        let obs_a = env.reset(&mut ChaCha8Rng::seed_from_u64(4));
        let state_a = env.state().clone();
        let obs_b = env.reset(&mut ChaCha8Rng::seed_from_u64(4));
        assert_eq!(&state_a, env.state());
        assert_eq!(obs_a, obs_b);
        assert_eq!(obs_a.len(), 3);
        assert!(obs_a.iter().all(|o| o.len() == 10));
        assert!(state_a.velocities.iter().all(|v| *v == [0.0, 0.0]));
        assert_eq!(state_a.step, 0);

        let mut env = Environment::new(EnvConfig::formation(8)).unwrap();
        let obs = env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        assert_eq!(obs.len(), 8);
        assert!(obs.iter().all(|o| o.len() == 6));
    }

    #[test]
    fn config_validation() {
        assert!(EnvConfig::coverage(1, 3).validate().is_err());
        assert!(EnvConfig::coverage(3, 0).validate().is_err());
        let mut f = EnvConfig::formation(4);
        f.n_landmarks = 2;
        assert!(f.validate().is_err());
        assert!(EnvConfig::formation(4).validate().is_ok());
    }

    #[test]
    fn zero_action_keeps_positions() {
        let mut env = Environment::new(EnvConfig::coverage(2, 1)).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(1));
        let before = env.state().clone();
        let out = env
            .step(&[[0.0, 0.0], [0.0, 0.0]], &mut ChaCha8Rng::seed_from_u64(0))
            .unwrap();
        assert_eq!(env.state().positions, before.positions);
        assert_eq!(out.reward, coverage_reward(&before));
    }

    #[test]
    fn full_damping_velocity_is_last_action() {
        let cfg = EnvConfig {
            damping: 1.0,
            ..EnvConfig::coverage(2, 1)
        };
        let mut env = Environment::new(cfg).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(2));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for a in [[1.0, -0.5], [0.2, 0.3], [-0.7, 0.0]] {
            env.step(&[a, [0.0, 0.0]], &mut rng).unwrap();
            let v = env.state().velocities[0];
            assert!((v[0] - a[0] * 0.1).abs() < 1e-15 && (v[1] - a[1] * 0.1).abs() < 1e-15);
        }
    }

    #[test]
    fn constant_push_matches_recurrence() {
        // v_k = 0.75 v_{k-1} + 0.1, p_k = p_{k-1} + 0.1 v_k, evaluated in a scratchpad
        let expected = [
            (0.1, 0.010000000000000002),
            (0.17500000000000002, 0.027500000000000004),
            (0.23125, 0.050625),
            (0.2734375, 0.07796875),
            (0.305078125, 0.1084765625),
        ];
        let mut env = Environment::new(EnvConfig::coverage(2, 1)).unwrap();
        env.set_state(state(vec![[0.0, 0.0], [1.0, 1.0]], vec![[0.5, 0.5]]))
            .unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for (v, p) in expected {
            env.step(&[[1.0, 0.0], [0.0, 0.0]], &mut rng).unwrap();
            let s = env.state();
            assert!((s.velocities[0][0] - v).abs() < 1e-15);
            assert!((s.positions[0][0] - p).abs() < 1e-15);
            assert_eq!(s.positions[0][1], 0.0);
        }
    }

    #[test]
    fn actions_are_clipped_and_speed_bounded() {
        let cfg = EnvConfig {
            damping: 0.0,
            dt: 1.0,
            world_half: 100.0,
            landmark_half: 1.0,
            ..EnvConfig::coverage(2, 1)
        };
        let mut env = Environment::new(cfg).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(3));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        env.step(&[[50.0, 0.0], [0.0, 0.0]], &mut rng).unwrap();
        assert_eq!(env.state().velocities[0], [1.0, 0.0]);
        env.step(&[[1.0, 1.0], [0.0, 0.0]], &mut rng).unwrap();
        let v = env.state().velocities[0];
        assert!((v[0].hypot(v[1]) - 1.0).abs() < 1e-12);
    }

    #[test]
    fn positions_stay_in_box() {
        let mut env = Environment::new(EnvConfig::coverage(2, 1)).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(5));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for _ in 0..50 {
            env.step(&[[1.0, 1.0], [-1.0, -1.0]], &mut rng).unwrap();
        }
        for p in &env.state().positions {
            assert!(p[0].abs() <= 1.5 && p[1].abs() <= 1.5);
        }
    }

    #[test]
    fn done_fires_exactly_at_episode_length() {
        let mut env = Environment::new(EnvConfig::formation(3)).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        for t in 1..=50 {
            let out = env.step(&[[0.1, 0.0]; 3], &mut rng).unwrap();
            assert_eq!(out.done, t == 50);
        }
        assert!(env.step(&[[0.0, 0.0]; 3], &mut rng).is_err());
    }

    #[test]
    fn non_finite_action_is_rejected() {
        let mut env = Environment::new(EnvConfig::coverage(2, 1)).unwrap();
        env.reset(&mut ChaCha8Rng::seed_from_u64(0));
        let err = env.step(&[[f64::NAN, 0.0], [0.0, 0.0]], &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(err, Err(Error::Input(_))));
    }

    #[test]
    fn coverage_reward_cases() {
        let s = state(vec![[0.0, 0.0], [1.0, 1.0]], vec![[0.0, 0.0], [1.0, 1.0]]);
        assert_eq!(coverage_reward(&s), 0.0);
        let s = state(vec![[1.0, 0.0], [-3.0, 0.0]], vec![[0.0, 0.0]]);
        assert_eq!(coverage_reward(&s), -1.0);
    }

    #[test]
    fn formation_reward_cases() {
        // diametrically opposed pair at radius 0.5
        let s = state(vec![[0.5, 0.0], [-0.5, 0.0]], vec![[0.0, 0.0]]);
        assert!(formation_reward(&s, 0.5, 1.0).abs() < 1e-15);
        // square at radius 0.5, landmark off-origin
        let c = [0.2, -0.3];
        let square = (0..4)
            .map(|k| {
                let a = std::f64::consts::FRAC_PI_2 * k as f64 + 0.1;
                [c[0] + 0.5 * a.cos(), c[1] + 0.5 * a.sin()]
            })
            .collect();
        let s = state(square, vec![c]);
        assert!(formation_reward(&s, 0.5, 1.0).abs() < 1e-12);
        // all agents on the landmark: angles 0, gaps 0,0,2pi
        let s = state(vec![[0.0, 0.0]; 3], vec![[0.0, 0.0]]);
        let tau = std::f64::consts::TAU;
        let expected = -0.5 - (2.0 * tau / 3.0 + (tau - tau / 3.0)) / 3.0;
        assert!((formation_reward(&s, 0.5, 1.0) - expected).abs() < 1e-12);
    }

    #[test]
    fn payload_layout() {
        let s = WorldState {
            positions: vec![[0.0, 0.0], [0.3, -0.4]],
            velocities: vec![[0.0, 0.0], [0.1, 0.2]],
            landmarks: vec![[0.0, 0.0]],
            step: 0,
        };
        assert_eq!(s.broadcast_payload(0), [0.0; 4]);
        assert_eq!(s.broadcast_payload(1), [0.3, -0.4, 0.1, 0.2]);
    }

    #[test]
    fn trace_csv_has_header_and_rows() {
        let rows = vec![TraceRow {
            episode: 0,
            step: 1,
            agent: 2,
            position: [0.5, -0.5],
            velocity: [0.0, 0.1],
            action: [1.0, 0.0],
            reward: -0.25,
        }];
        let mut buf = Vec::new();
        write_trace_csv(&mut buf, &rows).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<_> = text.lines().collect();
        assert_eq!(lines[1], TRACE_CSV_HEADER);
        assert_eq!(lines[2], "0,1,2,0.5,-0.5,0,0.1,1,0,-0.25");
    }
}
