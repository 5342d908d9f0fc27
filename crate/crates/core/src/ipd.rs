//! Teamed Iterated Prisoner's Dilemma.
//!
//! Every episode each agent is focal once and is paired with a counterpart:
//! a teammate with probability `nu`, otherwise a uniformly drawn non-teammate.
//! Agents only observe the counterpart's team index. Exogenous payoffs are
//! summed per agent over the episode and then mixed by credo.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::credo::{credo_reward_all, AgentId, CredoVector, RewardVector, TeamStructure};
use crate::error::{Error, Result};
use crate::learners::{IpdLearner, LearnerConfig, TabularPolicy};
use crate::metrics::{equality, final_quarter_start, CoopTally, CooperationWindow};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Action {
    Cooperate,
    Defect,
}

impl Action {
    pub fn index(self) -> usize {
        match self {
            Action::Cooperate => 0,
            Action::Defect => 1,
        }
    }

    pub fn from_index(i: usize) -> Self {
        match i {
            0 => Action::Cooperate,
            _ => Action::Defect,
        }
    }
}

/// Stage-game payoffs `(row, column)`.
pub fn stage_payoff(action_i: Action, action_j: Action, b: f64, c: f64) -> (f64, f64) {
    use Action::*;
    match (action_i, action_j) {
        (Cooperate, Cooperate) => (b - c, b - c),
        (Cooperate, Defect) => (-c, b),
        (Defect, Cooperate) => (b, -c),
        (Defect, Defect) => (0.0, 0.0),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Pairing {
    pub focal: AgentId,
    pub counterpart: AgentId,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct InteractionRecord {
    pub pairing: Pairing,
    pub focal_action: Action,
    pub counterpart_action: Action,
    pub focal_payoff: f64,
    pub counterpart_payoff: f64,
    pub episode: u64,
}

/// Either one credo for everyone or one per agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum CredoAssignment {
    Homogeneous(CredoVector),
    PerAgent(Vec<CredoVector>),
}

impl CredoAssignment {
    pub fn expand(&self, population: usize) -> Result<Vec<CredoVector>> {
        match self {
            CredoAssignment::Homogeneous(c) => Ok(vec![*c; population]),
            CredoAssignment::PerAgent(v) if v.len() == population => Ok(v.clone()),
            CredoAssignment::PerAgent(v) => Err(Error::validation(format!(
                "{} credos given for {population} agents",
                v.len()
            ))),
        }
    }

    /// The shared credo, when there is one.
    pub fn homogeneous(&self) -> Option<CredoVector> {
        match self {
            CredoAssignment::Homogeneous(c) => Some(*c),
            CredoAssignment::PerAgent(v) => {
                let first = *v.first()?;
                v.iter().all(|c| *c == first).then_some(first)
            }
        }
    }
}

fn default_window() -> u64 {
    2000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IpdConfig {
    pub population_size: usize,
    pub num_teams: usize,
    pub nu: f64,
    pub b: f64,
    pub c: f64,
    pub episodes: u64,
    #[serde(default)]
    pub seed: u64,
    pub credos: CredoAssignment,
    /// Episodes per reported cooperation window.
    #[serde(default = "default_window")]
    pub window: u64,
    /// Learner hyperparameters; defaults scale with `episodes` when absent.
    #[serde(default)]
    pub learner: Option<LearnerConfig>,
}

impl IpdConfig {
    /// The scaled-down full-focus setting: 25 agents in 5 teams, b = 5, c = 1,
    /// nu = 0.2, 10^5 episodes.
    pub fn full_focus(credo: CredoVector, seed: u64) -> Self {
        Self {
            population_size: 25,
            num_teams: 5,
            nu: 0.2,
            b: 5.0,
            c: 1.0,
            episodes: 100_000,
            seed,
            credos: CredoAssignment::Homogeneous(credo),
            window: default_window(),
            learner: None,
        }
    }

    pub fn learner_config(&self) -> LearnerConfig {
        self.learner
            .unwrap_or_else(|| LearnerConfig::default_for(self.episodes))
    }

    pub fn validate(&self) -> Result<TeamStructure> {
        if self.population_size < 2 {
            return Err(Error::config("the IPD needs at least two agents"));
        }
        if self.num_teams == 0 || !self.population_size.is_multiple_of(self.num_teams) {
            return Err(Error::config(format!(
                "population {} must divide into {} equal teams",
                self.population_size, self.num_teams
            )));
        }
        if !(self.b.is_finite() && self.c > 0.0 && self.b > self.c) {
            return Err(Error::domain(format!(
                "IPD requires b > c > 0, got b = {}, c = {}",
                self.b, self.c
            )));
        }
        if !(0.0..=1.0).contains(&self.nu) {
            return Err(Error::validation(format!("nu = {} outside [0, 1]", self.nu)));
        }
        if self.window == 0 {
            return Err(Error::validation("window must be positive"));
        }
        self.learner_config().validate()?;
        self.credos.expand(self.population_size)?;
        let structure = TeamStructure::equal_teams(self.population_size, self.num_teams)?;
        check_pairing_feasible(&structure, self.nu)?;
        Ok(structure)
    }
}

fn check_pairing_feasible(structure: &TeamStructure, nu: f64) -> Result<()> {
    if nu > 0.0 && structure.teams().iter().any(|t| t.len() < 2) {
        return Err(Error::config("teammate pairing needs teams of at least two agents"));
    }
    if nu < 1.0 && structure.num_teams() < 2 {
        return Err(Error::config("non-teammate pairing needs at least two teams"));
    }
    Ok(())
}

/// One pairing per agent as focal, in agent order.
pub fn sample_pairings(rng: &mut ChaCha8Rng, structure: &TeamStructure, nu: f64) -> Result<Vec<Pairing>> {
    check_pairing_feasible(structure, nu)?;
    let n = structure.population();
    let mut out = Vec::with_capacity(n);
    for focal in 0..n {
        let team = structure.team_of(focal)?;
        let members = structure.members(team);
        let counterpart = if rng.gen_bool(nu) {
            let pick = rng.gen_range(0..members.len() - 1);
            let pick = members.iter().copied().filter(|&a| a != focal).nth(pick);
            pick.expect("team has another member")
        } else {
            let others = n - members.len();
            let pick = rng.gen_range(0..others);
            (0..n)
                .filter(|&a| !structure.same_team(a, focal))
                .nth(pick)
                .expect("non-teammate exists")
        };
        out.push(Pairing { focal, counterpart });
    }
    Ok(out)
}

/// Outcome of one episode.
#[derive(Debug, Clone, PartialEq)]
pub struct EpisodeOutcome {
    pub records: Vec<InteractionRecord>,
    pub exogenous: RewardVector,
    pub credo_rewards: RewardVector,
}

/// Mutable state of one IPD experiment.
pub struct IpdExperiment {
    pub structure: TeamStructure,
    pub credos: Vec<CredoVector>,
    pub learners: Vec<Box<dyn IpdLearner>>,
    pub learner_config: LearnerConfig,
    pub nu: f64,
    pub b: f64,
    pub c: f64,
    pub episode: u64,
    rng: ChaCha8Rng,
}

impl IpdExperiment {
    /// Experiment with one fresh tabular learner per agent.
    pub fn new(config: &IpdConfig) -> Result<Self> {
        config.validate()?;
        let lc = config.learner_config();
        let learners = (0..config.population_size)
            .map(|_| Box::new(TabularPolicy::new(config.num_teams, &lc)) as Box<dyn IpdLearner>)
            .collect();
        Self::with_learners(config, learners)
    }

    pub fn with_learners(config: &IpdConfig, learners: Vec<Box<dyn IpdLearner>>) -> Result<Self> {
        let structure = config.validate()?;
        if learners.len() != config.population_size {
            return Err(Error::validation(format!(
                "{} learners for {} agents",
                learners.len(),
                config.population_size
            )));
        }
        Ok(Self {
            credos: config.credos.expand(config.population_size)?,
            structure,
            learners,
            learner_config: config.learner_config(),
            nu: config.nu,
            b: config.b,
            c: config.c,
            episode: 0,
            rng: ChaCha8Rng::seed_from_u64(config.seed),
        })
    }

    /// Plays one episode and applies one learning update per participation.
    pub fn run_episode(&mut self) -> Result<EpisodeOutcome> {
        let n = self.structure.population();
        let epsilon = self.learner_config.epsilon_at(self.episode);
        let pairings = sample_pairings(&mut self.rng, &self.structure, self.nu)?;
        let mut exo = vec![0.0; n];
        let mut records = Vec::with_capacity(pairings.len());
        for pairing in pairings {
            let Pairing { focal, counterpart } = pairing;
            let obs_focal = self.structure.team_of(counterpart)?;
            let obs_counterpart = self.structure.team_of(focal)?;
            let a_f = self.learners[focal].select_action(obs_focal, epsilon, &mut self.rng);
            let a_c = self.learners[counterpart].select_action(obs_counterpart, epsilon, &mut self.rng);
            let (p_f, p_c) = stage_payoff(a_f, a_c, self.b, self.c);
            exo[focal] += p_f;
            exo[counterpart] += p_c;
            records.push(InteractionRecord {
                pairing,
                focal_action: a_f,
                counterpart_action: a_c,
                focal_payoff: p_f,
                counterpart_payoff: p_c,
                episode: self.episode,
            });
        }
        let exogenous = RewardVector(exo);
        let credo_rewards = credo_reward_all(&self.credos, &exogenous, &self.structure)?;
        for r in &records {
            let (f, c) = (r.pairing.focal, r.pairing.counterpart);
            self.learners[f].update(self.structure.team_of(c)?, r.focal_action, credo_rewards.0[f])?;
            self.learners[c].update(self.structure.team_of(f)?, r.counterpart_action, credo_rewards.0[c])?;
        }
        self.episode += 1;
        Ok(EpisodeOutcome {
            records,
            exogenous,
            credo_rewards,
        })
    }
}

/// Cooperation and reward over one window of episodes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IpdWindow {
    pub episode_window: usize,
    pub cooperation: CooperationWindow,
    /// Mean per-agent credo reward per episode over the window.
    pub mean_credo_reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IpdSummary {
    pub cooperation: CooperationWindow,
    pub mean_credo_reward: f64,
    /// Inverse Gini over per-agent credo reward totals in the final quarter.
    pub equality: Option<f64>,
    /// Same, over exogenous reward totals.
    pub exogenous_equality: Option<f64>,
    pub episodes: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct IpdRunOutput {
    pub windows: Vec<IpdWindow>,
    /// `None` when the run has no episodes.
    pub summary: Option<IpdSummary>,
    pub q_values: Vec<Vec<[f64; 2]>>,
}

/// Runs a full experiment; deterministic in `config`.
pub fn run_ipd_experiment(config: &IpdConfig) -> Result<IpdRunOutput> {
    let mut exp = IpdExperiment::new(config)?;
    run_with(&mut exp, config)
}

pub fn run_with(exp: &mut IpdExperiment, config: &IpdConfig) -> Result<IpdRunOutput> {
    let n = config.population_size;
    let summary_start = final_quarter_start(config.episodes as usize) as u64;
    let mut windows = Vec::new();
    let mut tally = CoopTally::default();
    let mut window_reward = 0.0;
    let mut window_len = 0u64;
    let mut final_tally = CoopTally::default();
    let mut final_credo = vec![0.0; n];
    let mut final_exo = vec![0.0; n];

    for ep in 0..config.episodes {
        let out = exp.run_episode()?;
        let mut ep_tally = CoopTally::default();
        for r in &out.records {
            ep_tally.add_record(r, &exp.structure);
        }
        tally.merge(&ep_tally);
        window_reward += out.credo_rewards.sum() / n as f64;
        window_len += 1;
        if ep >= summary_start {
            final_tally.merge(&ep_tally);
            for i in 0..n {
                final_credo[i] += out.credo_rewards.0[i];
                final_exo[i] += out.exogenous.0[i];
            }
        }
        if window_len == config.window || ep + 1 == config.episodes {
            windows.push(IpdWindow {
                episode_window: windows.len(),
                cooperation: tally.window(windows.len()),
                mean_credo_reward: window_reward / window_len as f64,
            });
            tally = CoopTally::default();
            window_reward = 0.0;
            window_len = 0;
        }
    }

    let summary = (config.episodes > 0).then(|| {
        let final_episodes = (config.episodes - summary_start) as f64;
        IpdSummary {
            cooperation: final_tally.window(0),
            mean_credo_reward: final_credo.iter().sum::<f64>() / (n as f64 * final_episodes),
            equality: equality(&final_credo),
            exogenous_equality: equality(&final_exo),
            episodes: config.episodes,
        }
    });
    let q_values = exp
        .learners
        .iter()
        .map(|l| l.q_values().map(<[_]>::to_vec).unwrap_or_default())
        .collect();
    Ok(IpdRunOutput {
        windows,
        summary,
        q_values,
    })
}
