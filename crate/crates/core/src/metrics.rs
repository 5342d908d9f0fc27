//! Cooperation rates, reward equality and division-of-labor summaries.

use serde::Serialize;

use crate::cleanup::AgentEpisodeLog;
use crate::credo::TeamStructure;
use crate::error::{Error, Result};
use crate::ipd::{Action, InteractionRecord};

/// Fraction of the final stretch of a run used for summary statistics.
pub const SUMMARY_FRACTION: f64 = 0.25;

/// Index of the first element of the final quarter of `len` items.
pub fn final_quarter_start(len: usize) -> usize {
    len - ((len as f64 * SUMMARY_FRACTION).ceil() as usize).min(len)
}

/// Running cooperation counts split by whether the counterpart is a teammate.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct CoopTally {
    pub in_team_coop: u64,
    pub in_team_total: u64,
    pub out_team_coop: u64,
    pub out_team_total: u64,
}

impl CoopTally {
    pub fn add(&mut self, with_teammate: bool, action: Action) {
        let coop = (action == Action::Cooperate) as u64;
        if with_teammate {
            self.in_team_coop += coop;
            self.in_team_total += 1;
        } else {
            self.out_team_coop += coop;
            self.out_team_total += 1;
        }
    }

    pub fn add_record(&mut self, record: &InteractionRecord, structure: &TeamStructure) {
        let teammates = structure.same_team(record.pairing.focal, record.pairing.counterpart);
        self.add(teammates, record.focal_action);
        self.add(teammates, record.counterpart_action);
    }

    pub fn merge(&mut self, other: &CoopTally) {
        self.in_team_coop += other.in_team_coop;
        self.in_team_total += other.in_team_total;
        self.out_team_coop += other.out_team_coop;
        self.out_team_total += other.out_team_total;
    }

    pub fn window(&self, window_index: usize) -> CooperationWindow {
        let rate = |c: u64, t: u64| (t > 0).then(|| c as f64 / t as f64);
        let total = self.in_team_total + self.out_team_total;
        CooperationWindow {
            window_index,
            total_rate: rate(self.in_team_coop + self.out_team_coop, total),
            in_team_rate: rate(self.in_team_coop, self.in_team_total),
            out_team_rate: rate(self.out_team_coop, self.out_team_total),
            total_count: total,
            in_team_count: self.in_team_total,
            out_team_count: self.out_team_total,
        }
    }
}

/// Cooperation rates over one window. A rate is `None` when its category has
/// no samples.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct CooperationWindow {
    pub window_index: usize,
    pub total_rate: Option<f64>,
    pub in_team_rate: Option<f64>,
    pub out_team_rate: Option<f64>,
    pub total_count: u64,
    pub in_team_count: u64,
    pub out_team_count: u64,
}

/// Classifies both actions of every record in `window` (an episode range) by
/// team relation and computes the three cooperation rates.
pub fn cooperation_rates(
    records: &[InteractionRecord],
    structure: &TeamStructure,
    window: std::ops::Range<u64>,
    window_index: usize,
) -> CooperationWindow {
    let mut tally = CoopTally::default();
    for r in records.iter().filter(|r| window.contains(&r.episode)) {
        tally.add_record(r, structure);
    }
    tally.window(window_index)
}

/// Inverse Gini index `1 - sum|Ri - Rj| / (2 N^2 mean(R))`. `None` when the mean
/// reward is zero (or the vector is empty) and the index is undefined. With
/// negative rewards in the vector the value can leave `[0, 1]`.
pub fn equality(rewards: &[f64]) -> Option<f64> {
    let n = rewards.len();
    if n == 0 {
        return None;
    }
    let mean = rewards.iter().sum::<f64>() / n as f64;
    if mean == 0.0 || !mean.is_finite() {
        return None;
    }
    // Sum of pairwise absolute differences from the sorted vector:
    // sum_{i<j} (x_j - x_i) = sum_k x_k (2k - n + 1).
    let mut sorted = rewards.to_vec();
    sorted.sort_by(f64::total_cmp);
    let half: f64 = sorted
        .iter()
        .enumerate()
        .map(|(k, x)| x * (2.0 * k as f64 - n as f64 + 1.0))
        .sum();
    Some(1.0 - 2.0 * half / (2.0 * (n * n) as f64 * mean))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct EqualityReport {
    pub equality: Option<f64>,
    pub mean_reward: f64,
}

impl EqualityReport {
    pub fn from_rewards(rewards: &[f64]) -> Result<Self> {
        Ok(Self {
            equality: equality(rewards),
            mean_reward: mean_population_reward(rewards)?,
        })
    }
}

pub fn mean_population_reward(rewards: &[f64]) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::validation("mean reward of an empty population"));
    }
    Ok(rewards.iter().sum::<f64>() / rewards.len() as f64)
}

/// Apples:cleans ratio beyond which an agent counts as specialized.
pub const SPECIALIZATION_RATIO: f64 = 10.0;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum LaborRole {
    Picker,
    Cleaner,
    Unclassified,
}

pub fn classify_role(apples: u64, cleans: u64) -> LaborRole {
    let (a, c) = (apples as f64, cleans as f64);
    if a > SPECIALIZATION_RATIO * c {
        LaborRole::Picker
    } else if c > SPECIALIZATION_RATIO * a {
        LaborRole::Cleaner
    } else {
        LaborRole::Unclassified
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LaborRow {
    pub agent_id: usize,
    pub team: usize,
    pub apples: u64,
    pub cleans: u64,
    pub role: LaborRole,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LaborTable {
    pub rows: Vec<LaborRow>,
    /// Fraction of agents classified as picker or cleaner.
    pub specialization_index: f64,
}

pub fn division_of_labor(logs: &[AgentEpisodeLog]) -> LaborTable {
    let rows: Vec<LaborRow> = logs
        .iter()
        .map(|l| LaborRow {
            agent_id: l.agent_id,
            team: l.team,
            apples: l.apples,
            cleans: l.cleans,
            role: classify_role(l.apples, l.cleans),
        })
        .collect();
    let specialized = rows.iter().filter(|r| r.role != LaborRole::Unclassified).count();
    let specialization_index = if rows.is_empty() {
        0.0
    } else {
        specialized as f64 / rows.len() as f64
    };
    LaborTable {
        rows,
        specialization_index,
    }
}
