//! Decision and update rules: the tabular IPD learner, scripted Cleanup roles
//! and a small clipped-surrogate policy-gradient learner.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::cleanup::{
    beam_cells, CleanupAction, CleanupObservation, CleanupPolicy, GridMap, Orientation, Position, CODE_APPLE,
    CODE_WALL, CODE_WASTE,
};
use crate::error::{Error, Result};
use crate::ipd::Action;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LearnerConfig {
    pub learning_rate: f64,
    /// Only used by learners that bootstrap; the IPD bandit update ignores it.
    pub discount: f64,
    pub epsilon_start: f64,
    pub epsilon_end: f64,
    pub epsilon_decay_episodes: u64,
}

impl LearnerConfig {
    /// Defaults for a run of `episodes` episodes: learning rate 0.05, epsilon
    /// decaying linearly from 1.0 to 0.01 over the first 20% of the run.
    pub fn default_for(episodes: u64) -> Self {
        Self {
            learning_rate: 0.05,
            discount: 0.99,
            epsilon_start: 1.0,
            epsilon_end: 0.01,
            epsilon_decay_episodes: (episodes / 5).max(1),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate <= 1.0) {
            return Err(Error::validation(format!(
                "learning_rate {} outside (0, 1]",
                self.learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.discount) {
            return Err(Error::validation(format!("discount {} outside [0, 1)", self.discount)));
        }
        for e in [self.epsilon_start, self.epsilon_end] {
            if !(0.0..=1.0).contains(&e) {
                return Err(Error::validation(format!("epsilon {e} outside [0, 1]")));
            }
        }
        if self.epsilon_start < self.epsilon_end {
            return Err(Error::validation("epsilon_start must be >= epsilon_end"));
        }
        if self.epsilon_decay_episodes == 0 {
            return Err(Error::validation("epsilon_decay_episodes must be positive"));
        }
        Ok(())
    }

    /// Linear schedule; equals `epsilon_end` from `epsilon_decay_episodes` on.
    pub fn epsilon_at(&self, episode: u64) -> f64 {
        if episode >= self.epsilon_decay_episodes {
            return self.epsilon_end;
        }
        let t = episode as f64 / self.epsilon_decay_episodes as f64;
        self.epsilon_start + (self.epsilon_end - self.epsilon_start) * t
    }
}

/// A learner in the teamed IPD. States are counterpart team indices.
pub trait IpdLearner: Send {
    fn select_action(&mut self, state: usize, epsilon: f64, rng: &mut ChaCha8Rng) -> Action;

    fn update(&mut self, state: usize, action: Action, credo_reward: f64) -> Result<()>;

    /// Q-value snapshot, if the learner has one.
    fn q_values(&self) -> Option<&[[f64; 2]]> {
        None
    }
}

/// Q-table over (team signal, action).
#[derive(Debug, Clone, PartialEq)]
pub struct TabularPolicy {
    q: Vec<[f64; 2]>,
    learning_rate: f64,
}

impl TabularPolicy {
    pub fn new(num_states: usize, config: &LearnerConfig) -> Self {
        Self {
            q: vec![[0.0; 2]; num_states],
            learning_rate: config.learning_rate,
        }
    }

    pub fn with_values(q: Vec<[f64; 2]>, learning_rate: f64) -> Self {
        Self { q, learning_rate }
    }

    pub fn q(&self, state: usize, action: Action) -> f64 {
        self.q[state][action.index()]
    }

    pub fn num_states(&self) -> usize {
        self.q.len()
    }

    pub fn greedy(&self, state: usize) -> Option<Action> {
        let [qc, qd] = self.q[state];
        if qc > qd {
            Some(Action::Cooperate)
        } else if qd > qc {
            Some(Action::Defect)
        } else {
            None
        }
    }
}

impl IpdLearner for TabularPolicy {
    /// Epsilon-greedy; argmax ties are broken uniformly.
    fn select_action(&mut self, state: usize, epsilon: f64, rng: &mut ChaCha8Rng) -> Action {
        assert!(state < self.q.len(), "state {state} out of range");
        if rng.gen_bool(epsilon) {
            return Action::from_index(rng.gen_range(0..2));
        }
        match self.greedy(state) {
            Some(a) => a,
            None => Action::from_index(rng.gen_range(0..2)),
        }
    }

    /// `q[s,a] += lr * (r - q[s,a])`, a contextual-bandit update with no
    /// bootstrapping across pairings.
    fn update(&mut self, state: usize, action: Action, credo_reward: f64) -> Result<()> {
        if !credo_reward.is_finite() {
            return Err(Error::validation(format!("non-finite reward {credo_reward}")));
        }
        let q = &mut self.q[state][action.index()];
        *q += self.learning_rate * (credo_reward - *q);
        Ok(())
    }

    fn q_values(&self) -> Option<&[[f64; 2]]> {
        Some(&self.q)
    }
}

/// Always plays the same action and never learns.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FixedAction(pub Action);

impl IpdLearner for FixedAction {
    fn select_action(&mut self, _state: usize, _epsilon: f64, _rng: &mut ChaCha8Rng) -> Action {
        self.0
    }

    fn update(&mut self, _state: usize, _action: Action, credo_reward: f64) -> Result<()> {
        if !credo_reward.is_finite() {
            return Err(Error::validation(format!("non-finite reward {credo_reward}")));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// Scripted Cleanup roles
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Cleaner,
    Picker,
}

/// Inclusive rectangle in map coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatrolBounds {
    pub min: Position,
    pub max: Position,
}

/// Rule-based Cleanup agent. Cleaners keep the river clear, pickers harvest.
#[derive(Debug, Clone)]
pub struct ScriptedCleanupRole {
    role: Role,
    waypoints: Vec<Position>,
    next_waypoint: usize,
    beam_length: usize,
    beam_width: usize,
}

impl ScriptedCleanupRole {
    pub fn new(
        role: Role,
        bounds: PatrolBounds,
        observation_window: usize,
        beam_length: usize,
        beam_width: usize,
    ) -> Self {
        Self {
            role,
            waypoints: patrol_waypoints(bounds, observation_window),
            next_waypoint: 0,
            beam_length,
            beam_width,
        }
    }

    /// Role patrolling the river (cleaner) or orchard (picker) of `map`.
    pub fn for_map(
        role: Role,
        map: &GridMap,
        observation_window: usize,
        beam_length: usize,
        beam_width: usize,
    ) -> Self {
        let bounds = match role {
            Role::Cleaner => map.river_bounds(),
            Role::Picker => map.orchard_bounds(),
        };
        Self::new(role, bounds, observation_window, beam_length, beam_width)
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn waypoints(&self) -> &[Position] {
        &self.waypoints
    }

    pub fn scripted_step(&mut self, obs: &CleanupObservation) -> CleanupAction {
        match self.role {
            Role::Cleaner => self.cleaner_step(obs),
            Role::Picker => self.picker_step(obs),
        }
    }

    fn waste_in_beam(&self, obs: &CleanupObservation, facing: Orientation) -> usize {
        let c = obs.center();
        beam_cells(c, facing, self.beam_length, self.beam_width, obs.size(), obs.size())
            .filter(|p| obs.code_at(*p) == CODE_WASTE)
            .count()
    }

    fn cleaner_step(&mut self, obs: &CleanupObservation) -> CleanupAction {
        if self.waste_in_beam(obs, obs.orientation) > 0 {
            return CleanupAction::CleanBeam;
        }
        let best = [
            obs.orientation.right(),
            obs.orientation.left(),
            obs.orientation.opposite(),
        ]
        .into_iter()
        .map(|o| (o, self.waste_in_beam(obs, o)))
        .filter(|(_, n)| *n > 0)
        .max_by_key(|(_, n)| *n);
        if let Some((o, _)) = best {
            return if o == obs.orientation.left() {
                CleanupAction::TurnLeft
            } else {
                CleanupAction::TurnRight
            };
        }
        if let Some(target) = obs.nearest(CODE_WASTE) {
            return step_toward(obs, target);
        }
        self.patrol(obs)
    }

    fn picker_step(&mut self, obs: &CleanupObservation) -> CleanupAction {
        if let Some(target) = obs.nearest(CODE_APPLE) {
            return step_toward(obs, target);
        }
        self.patrol(obs)
    }

    fn patrol(&mut self, obs: &CleanupObservation) -> CleanupAction {
        if self.waypoints.is_empty() {
            return CleanupAction::Stay;
        }
        if obs.position == self.waypoints[self.next_waypoint] {
            self.next_waypoint = (self.next_waypoint + 1) % self.waypoints.len();
        }
        let wp = self.waypoints[self.next_waypoint];
        // Translate the map waypoint into window coordinates (may lie outside).
        let c = obs.center();
        let target = (
            c.x as i64 + wp.x as i64 - obs.position.x as i64,
            c.y as i64 + wp.y as i64 - obs.position.y as i64,
        );
        step_toward_signed(obs, target)
    }
}

impl CleanupPolicy for ScriptedCleanupRole {
    fn act(&mut self, obs: &CleanupObservation, _rng: &mut ChaCha8Rng) -> CleanupAction {
        self.scripted_step(obs)
    }
}

/// Centres of a grid of window-sized tiles covering `bounds`, visited in
/// serpentine order.
fn patrol_waypoints(bounds: PatrolBounds, window: usize) -> Vec<Position> {
    let window = window.max(1);
    let span = |lo: usize, hi: usize| -> Vec<usize> {
        let w = hi - lo + 1;
        let tiles = w.div_ceil(window);
        (0..tiles).map(|i| lo + ((2 * i + 1) * w) / (2 * tiles)).collect()
    };
    let xs = span(bounds.min.x, bounds.max.x);
    let ys = span(bounds.min.y, bounds.max.y);
    let mut out = Vec::new();
    for (row, &y) in ys.iter().enumerate() {
        let row_xs: Vec<usize> = if row % 2 == 0 {
            xs.clone()
        } else {
            xs.iter().rev().copied().collect()
        };
        out.extend(row_xs.into_iter().map(|x| Position { x, y }));
    }
    if out.len() == 1 {
        // A single tile: alternate between its top and bottom rows so the bot
        // keeps sweeping instead of parking.
        let p = out[0];
        out = vec![
            Position {
                x: p.x,
                y: bounds.min.y,
            },
            Position {
                x: p.x,
                y: bounds.max.y,
            },
        ];
    }
    out
}

fn step_toward(obs: &CleanupObservation, target: Position) -> CleanupAction {
    step_toward_signed(obs, (target.x as i64, target.y as i64))
}

/// One greedy move toward a window-coordinate target, preferring the longer
/// axis and falling back to the other axis when the preferred cell is blocked.
fn step_toward_signed(obs: &CleanupObservation, target: (i64, i64)) -> CleanupAction {
    let c = obs.center();
    let dx = target.0 - c.x as i64;
    let dy = target.1 - c.y as i64;
    if dx == 0 && dy == 0 {
        return CleanupAction::Stay;
    }
    let horizontal = (dx != 0).then_some(if dx > 0 { Orientation::East } else { Orientation::West });
    let vertical = (dy != 0).then_some(if dy > 0 { Orientation::South } else { Orientation::North });
    let mut options: Vec<Orientation> = Vec::with_capacity(2);
    let prefer_horizontal = match (horizontal, vertical) {
        (Some(h), Some(v)) if dx.abs() == dy.abs() => {
            // Equal distance: keep going the way we face when it helps.
            obs.orientation == h || obs.orientation != v
        }
        _ => dx.abs() > dy.abs(),
    };
    if prefer_horizontal {
        options.extend(horizontal);
        options.extend(vertical);
    } else {
        options.extend(vertical);
        options.extend(horizontal);
    }
    for dir in &options {
        if let Some(next) = dir.offset(c, obs.size(), obs.size()) {
            let code = obs.code_at(next);
            if code != CODE_WALL && !crate::cleanup::is_agent_code(code) {
                return CleanupAction::moving(*dir);
            }
        }
    }
    CleanupAction::Stay
}

// ---------------------------------------------------------------------------
// Clipped-surrogate policy gradient (toy scale)
// ---------------------------------------------------------------------------

/// Linear-softmax policy: `logits = W x`, `W` stored row-major
/// `num_actions x num_features`.
#[derive(Debug, Clone, PartialEq)]
pub struct SoftmaxPolicy {
    pub num_actions: usize,
    pub num_features: usize,
    pub weights: Vec<f64>,
}

impl SoftmaxPolicy {
    pub fn zeros(num_actions: usize, num_features: usize) -> Self {
        Self {
            num_actions,
            num_features,
            weights: vec![0.0; num_actions * num_features],
        }
    }

    pub fn probabilities(&self, features: &[f64]) -> Vec<f64> {
        probabilities_with(&self.weights, self.num_actions, features)
    }

    pub fn sample(&self, features: &[f64], rng: &mut ChaCha8Rng) -> usize {
        let probs = self.probabilities(features);
        let mut u: f64 = rng.gen();
        for (a, p) in probs.iter().enumerate() {
            if u < *p {
                return a;
            }
            u -= p;
        }
        probs.len() - 1
    }
}

fn probabilities_with(weights: &[f64], num_actions: usize, features: &[f64]) -> Vec<f64> {
    let nf = features.len();
    let logits: Vec<f64> = (0..num_actions)
        .map(|a| {
            weights[a * nf..(a + 1) * nf]
                .iter()
                .zip(features)
                .map(|(w, x)| w * x)
                .sum()
        })
        .collect();
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

/// Linear state-value baseline.
#[derive(Debug, Clone, PartialEq)]
pub struct LinearBaseline {
    pub weights: Vec<f64>,
}

impl LinearBaseline {
    pub fn zeros(num_features: usize) -> Self {
        Self {
            weights: vec![0.0; num_features],
        }
    }

    pub fn value(&self, features: &[f64]) -> f64 {
        self.weights.iter().zip(features).map(|(w, x)| w * x).sum()
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Trajectory {
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub rewards: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PolicyGradientConfig {
    pub learning_rate: f64,
    pub baseline_learning_rate: f64,
    pub discount: f64,
    pub clip: f64,
}

impl Default for PolicyGradientConfig {
    fn default() -> Self {
        Self {
            learning_rate: 0.01,
            baseline_learning_rate: 0.01,
            discount: 0.99,
            clip: 0.2,
        }
    }
}

/// Flattened batch of (features, action, behaviour log-prob, advantage).
#[derive(Debug, Clone, PartialEq)]
pub struct SurrogateBatch {
    pub features: Vec<Vec<f64>>,
    pub actions: Vec<usize>,
    pub old_log_probs: Vec<f64>,
    pub advantages: Vec<f64>,
    pub returns: Vec<f64>,
}

impl SurrogateBatch {
    pub fn build(
        policy: &SoftmaxPolicy,
        baseline: &LinearBaseline,
        batch: &[Trajectory],
        discount: f64,
    ) -> Result<Self> {
        let mut out = SurrogateBatch {
            features: Vec::new(),
            actions: Vec::new(),
            old_log_probs: Vec::new(),
            advantages: Vec::new(),
            returns: Vec::new(),
        };
        for t in batch {
            if t.features.len() != t.actions.len() || t.actions.len() != t.rewards.len() {
                return Err(Error::validation("trajectory arrays have mismatched lengths"));
            }
            let mut g = 0.0;
            let mut returns = vec![0.0; t.rewards.len()];
            for i in (0..t.rewards.len()).rev() {
                g = t.rewards[i] + discount * g;
                returns[i] = g;
            }
            for ((x, &action), ret) in t.features.iter().zip(&t.actions).zip(returns) {
                out.old_log_probs.push(policy.probabilities(x)[action].ln());
                out.advantages.push(ret - baseline.value(x));
                out.returns.push(ret);
                out.features.push(x.clone());
                out.actions.push(action);
            }
        }
        Ok(out)
    }
}

/// Mean clipped surrogate `min(r A, clip(r, 1-e, 1+e) A)` at `weights`.
pub fn clipped_surrogate(weights: &[f64], num_actions: usize, batch: &SurrogateBatch, clip: f64) -> f64 {
    let n = batch.actions.len().max(1) as f64;
    (0..batch.actions.len())
        .map(|i| {
            let p = probabilities_with(weights, num_actions, &batch.features[i])[batch.actions[i]];
            let ratio = (p.ln() - batch.old_log_probs[i]).exp();
            let a = batch.advantages[i];
            (ratio * a).min(ratio.clamp(1.0 - clip, 1.0 + clip) * a)
        })
        .sum::<f64>()
        / n
}

/// Analytic gradient of [`clipped_surrogate`] with respect to `weights`.
pub fn clipped_surrogate_gradient(weights: &[f64], num_actions: usize, batch: &SurrogateBatch, clip: f64) -> Vec<f64> {
    let mut grad = vec![0.0; weights.len()];
    let n = batch.actions.len().max(1) as f64;
    for i in 0..batch.actions.len() {
        let x = &batch.features[i];
        let nf = x.len();
        let probs = probabilities_with(weights, num_actions, x);
        let act = batch.actions[i];
        let ratio = (probs[act].ln() - batch.old_log_probs[i]).exp();
        let a = batch.advantages[i];
        // The unclipped branch is active unless the ratio has moved past the
        // clip boundary in the direction the advantage rewards.
        let clipped = (a > 0.0 && ratio > 1.0 + clip) || (a < 0.0 && ratio < 1.0 - clip);
        if clipped || a == 0.0 {
            continue;
        }
        // d ratio / dW[k, f] = ratio * (1[k == act] - p_k) * x_f
        for k in 0..num_actions {
            let coef = ratio * a * ((k == act) as u8 as f64 - probs[k]) / n;
            for f in 0..nf {
                grad[k * nf + f] += coef * x[f];
            }
        }
    }
    grad
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UpdateOutcome {
    Applied,
    SkippedDegenerate,
}

/// One ascent step on the clipped surrogate followed by one regression step
/// of the baseline toward the observed returns.
pub fn policy_gradient_update(
    policy: &mut SoftmaxPolicy,
    baseline: &mut LinearBaseline,
    batch: &[Trajectory],
    config: &PolicyGradientConfig,
) -> Result<UpdateOutcome> {
    let sb = SurrogateBatch::build(policy, baseline, batch, config.discount)?;
    if sb.advantages.iter().all(|a| a.abs() < 1e-12) {
        log::warn!("policy-gradient batch has zero advantages; skipping update");
        return Ok(UpdateOutcome::SkippedDegenerate);
    }
    let grad = clipped_surrogate_gradient(&policy.weights, policy.num_actions, &sb, config.clip);
    for (w, g) in policy.weights.iter_mut().zip(&grad) {
        *w += config.learning_rate * g;
    }
    let n = sb.returns.len() as f64;
    let mut bgrad = vec![0.0; baseline.weights.len()];
    for (x, g) in sb.features.iter().zip(&sb.returns) {
        let err = g - baseline.value(x);
        for (bg, xf) in bgrad.iter_mut().zip(x) {
            *bg += err * xf / n;
        }
    }
    for (w, g) in baseline.weights.iter_mut().zip(&bgrad) {
        *w += config.baseline_learning_rate * g;
    }
    Ok(UpdateOutcome::Applied)
}

/// Compact hand-made features of a Cleanup observation for the toy learner.
pub fn observation_features(obs: &CleanupObservation) -> Vec<f64> {
    let cells = (obs.size() * obs.size()) as f64;
    let count = |code: u8| obs.codes().iter().filter(|&&c| c == code).count() as f64 / cells;
    let c = obs.center();
    let ahead = obs
        .orientation
        .offset(c, obs.size(), obs.size())
        .map(|p| obs.code_at(p))
        .unwrap_or(CODE_WALL);
    vec![
        1.0,
        count(CODE_APPLE),
        count(CODE_WASTE),
        (ahead == CODE_APPLE) as u8 as f64,
        (ahead == CODE_WASTE) as u8 as f64,
    ]
}

/// A Cleanup agent that samples from a [`SoftmaxPolicy`] and records its
/// trajectory for [`policy_gradient_update`].
#[derive(Debug, Clone)]
pub struct PolicyGradientAgent {
    pub policy: SoftmaxPolicy,
    pub baseline: LinearBaseline,
    pub trajectory: Trajectory,
}

impl PolicyGradientAgent {
    pub fn new() -> Self {
        let nf = 5;
        Self {
            policy: SoftmaxPolicy::zeros(CleanupAction::ALL.len(), nf),
            baseline: LinearBaseline::zeros(nf),
            trajectory: Trajectory::default(),
        }
    }

    pub fn record_reward(&mut self, reward: f64) {
        self.trajectory.rewards.push(reward);
    }

    /// Consumes the recorded trajectory and applies one update.
    pub fn finish_episode(&mut self, config: &PolicyGradientConfig) -> Result<UpdateOutcome> {
        let t = std::mem::take(&mut self.trajectory);
        policy_gradient_update(&mut self.policy, &mut self.baseline, &[t], config)
    }
}

impl Default for PolicyGradientAgent {
    fn default() -> Self {
        Self::new()
    }
}

impl CleanupPolicy for PolicyGradientAgent {
    fn act(&mut self, obs: &CleanupObservation, rng: &mut ChaCha8Rng) -> CleanupAction {
        let x = observation_features(obs);
        let a = self.policy.sample(&x, rng);
        self.trajectory.features.push(x);
        self.trajectory.actions.push(a);
        CleanupAction::ALL[a]
    }
}
