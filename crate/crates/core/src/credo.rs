//! Team partitions, credo vectors and credo-based reward mixing.
//!
//! An agent's credo `<psi, phi, omega>` weights its individual reward, the
//! mean reward of its team and the mean reward of the whole population. The
//! weights live on the unit simplex.

use std::collections::BTreeSet;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub type AgentId = usize;

/// Absolute tolerance on `psi + phi + omega = 1`.
pub const SIMPLEX_TOLERANCE: f64 = 1e-9;

/// Largest simplex deviation that config loading silently normalizes away.
pub const LOAD_NORMALIZE_TOLERANCE: f64 = 1e-6;

/// Mixing weights over self, team and system reward.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "[f64; 3]", into = "[f64; 3]")]
pub struct CredoVector {
    psi: f64,
    phi: f64,
    omega: f64,
}

impl CredoVector {
    pub const SELF_FOCUSED: CredoVector = CredoVector {
        psi: 1.0,
        phi: 0.0,
        omega: 0.0,
    };
    pub const TEAM_FOCUSED: CredoVector = CredoVector {
        psi: 0.0,
        phi: 1.0,
        omega: 0.0,
    };
    pub const SYSTEM_FOCUSED: CredoVector = CredoVector {
        psi: 0.0,
        phi: 0.0,
        omega: 1.0,
    };

    /// Strict constructor: weights must be non-negative, finite and sum to 1
    /// within [`SIMPLEX_TOLERANCE`].
    pub fn new(psi: f64, phi: f64, omega: f64) -> Result<Self> {
        for (name, w) in [("psi", psi), ("phi", phi), ("omega", omega)] {
            if !w.is_finite() || w < 0.0 {
                return Err(Error::validation(format!(
                    "credo weight {name} = {w} must be finite and non-negative"
                )));
            }
        }
        let sum = psi + phi + omega;
        if (sum - 1.0).abs() > SIMPLEX_TOLERANCE {
            return Err(Error::validation(format!(
                "credo <{psi}, {phi}, {omega}> sums to {sum}, expected 1"
            )));
        }
        Ok(Self { psi, phi, omega })
    }

    /// Lenient constructor used when loading configs: sums within
    /// [`LOAD_NORMALIZE_TOLERANCE`] of 1 are rescaled onto the simplex.
    pub fn normalized(psi: f64, phi: f64, omega: f64) -> Result<Self> {
        let sum = psi + phi + omega;
        if sum.is_finite() && (sum - 1.0).abs() <= LOAD_NORMALIZE_TOLERANCE && sum > 0.0 {
            Self::new(psi / sum, phi / sum, omega / sum)
        } else {
            Self::new(psi, phi, omega)
        }
    }

    pub fn psi(&self) -> f64 {
        self.psi
    }

    pub fn phi(&self) -> f64 {
        self.phi
    }

    pub fn omega(&self) -> f64 {
        self.omega
    }

    pub fn as_array(&self) -> [f64; 3] {
        [self.psi, self.phi, self.omega]
    }
}

impl TryFrom<[f64; 3]> for CredoVector {
    type Error = Error;

    fn try_from(w: [f64; 3]) -> Result<Self> {
        Self::normalized(w[0], w[1], w[2])
    }
}

impl From<CredoVector> for [f64; 3] {
    fn from(c: CredoVector) -> Self {
        c.as_array()
    }
}

impl fmt::Display for CredoVector {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}, {}, {}>", self.psi, self.phi, self.omega)
    }
}

/// Credo in its general form, with one team weight per team of membership.
///
/// The simulator only runs single-membership partitions; this type exists so
/// configs can describe the general model and be reduced to the triple form.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneralCredo {
    pub psi: f64,
    pub team_weights: Vec<f64>,
    pub omega: f64,
}

impl GeneralCredo {
    /// Reduces to a [`CredoVector`]; only valid with exactly one team weight.
    pub fn to_single_team(&self) -> Result<CredoVector> {
        match self.team_weights.as_slice() {
            [phi] => CredoVector::new(self.psi, *phi, self.omega),
            other => Err(Error::validation(format!(
                "general credo has {} team weights; only single-team membership is simulated",
                other.len()
            ))),
        }
    }
}

impl From<CredoVector> for GeneralCredo {
    fn from(c: CredoVector) -> Self {
        GeneralCredo {
            psi: c.psi,
            team_weights: vec![c.phi],
            omega: c.omega,
        }
    }
}

/// Number of steps `k` such that `k * increment == 1`, if the increment divides 1.
pub fn lattice_divisions(increment: f64) -> Result<usize> {
    if !increment.is_finite() || increment <= 0.0 || increment > 1.0 + SIMPLEX_TOLERANCE {
        return Err(Error::validation(format!(
            "simplex increment {increment} must lie in (0, 1]"
        )));
    }
    let k = (1.0 / increment).round();
    if k < 1.0 || (k * increment - 1.0).abs() > SIMPLEX_TOLERANCE {
        return Err(Error::validation(format!(
            "simplex increment {increment} does not evenly divide 1"
        )));
    }
    Ok(k as usize)
}

/// Every lattice point of the unit simplex at the given increment, ordered by
/// psi then phi (ascending). Produces `(k+1)(k+2)/2` vectors for `k = 1/increment`.
pub fn simplex_lattice(increment: f64) -> Result<Vec<CredoVector>> {
    let k = lattice_divisions(increment)?;
    let kf = k as f64;
    let mut out = Vec::with_capacity((k + 1) * (k + 2) / 2);
    for i in 0..=k {
        for j in 0..=(k - i) {
            let l = k - i - j;
            out.push(CredoVector::new(i as f64 / kf, j as f64 / kf, l as f64 / kf)?);
        }
    }
    Ok(out)
}

/// Disjoint partition of agents `0..N` into non-empty teams.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TeamStructure {
    teams: Vec<Vec<AgentId>>,
    agent_team: Vec<usize>,
}

impl TeamStructure {
    pub fn new(teams: Vec<Vec<AgentId>>) -> Result<Self> {
        if teams.is_empty() {
            return Err(Error::config("team structure has no teams"));
        }
        let population: usize = teams.iter().map(Vec::len).sum();
        let mut agent_team = vec![usize::MAX; population];
        for (t, members) in teams.iter().enumerate() {
            if members.is_empty() {
                return Err(Error::config(format!("team {t} is empty")));
            }
            for &a in members {
                if a >= population {
                    return Err(Error::config(format!(
                        "agent id {a} out of range for a population of {population}"
                    )));
                }
                if agent_team[a] != usize::MAX {
                    return Err(Error::config(format!(
                        "agent {a} belongs to teams {} and {t}",
                        agent_team[a]
                    )));
                }
                agent_team[a] = t;
            }
        }
        let sizes: BTreeSet<usize> = teams.iter().map(Vec::len).collect();
        if sizes.len() > 1 {
            log::warn!("team structure has unequal team sizes {sizes:?}");
        }
        Ok(Self { teams, agent_team })
    }

    /// Contiguous equal-size teams: team `t` holds agents `t*s .. (t+1)*s`.
    pub fn equal_teams(population: usize, num_teams: usize) -> Result<Self> {
        if population == 0 || num_teams == 0 {
            return Err(Error::config("population and team count must be positive"));
        }
        if !population.is_multiple_of(num_teams) {
            return Err(Error::config(format!(
                "population {population} is not divisible into {num_teams} equal teams"
            )));
        }
        let size = population / num_teams;
        let teams = (0..num_teams).map(|t| (t * size..(t + 1) * size).collect()).collect();
        Self::new(teams)
    }

    pub fn population(&self) -> usize {
        self.agent_team.len()
    }

    pub fn num_teams(&self) -> usize {
        self.teams.len()
    }

    pub fn teams(&self) -> &[Vec<AgentId>] {
        &self.teams
    }

    pub fn team_of(&self, agent: AgentId) -> Result<usize> {
        self.agent_team
            .get(agent)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown agent id {agent}")))
    }

    pub fn members(&self, team: usize) -> &[AgentId] {
        &self.teams[team]
    }

    pub fn same_team(&self, a: AgentId, b: AgentId) -> bool {
        self.agent_team[a] == self.agent_team[b]
    }

    /// Relabels agents: agent `a` becomes `perm[a]`.
    pub fn permuted(&self, perm: &[AgentId]) -> Result<Self> {
        if perm.len() != self.population() {
            return Err(Error::validation("permutation length differs from population"));
        }
        Self::new(
            self.teams
                .iter()
                .map(|members| members.iter().map(|&a| perm[a]).collect())
                .collect(),
        )
    }
}

/// Per-agent exogenous reward for one accounting period.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(transparent)]
pub struct RewardVector(pub Vec<f64>);

impl RewardVector {
    pub fn zeros(n: usize) -> Self {
        RewardVector(vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn sum(&self) -> f64 {
        self.0.iter().sum()
    }
}

impl From<Vec<f64>> for RewardVector {
    fn from(v: Vec<f64>) -> Self {
        RewardVector(v)
    }
}

fn check_population(rewards: &RewardVector, structure: &TeamStructure) -> Result<()> {
    if rewards.len() != structure.population() {
        return Err(Error::validation(format!(
            "reward vector has {} entries for a population of {}",
            rewards.len(),
            structure.population()
        )));
    }
    Ok(())
}

/// Mean reward over the agent's team.
pub fn team_reward(agent: AgentId, rewards: &RewardVector, structure: &TeamStructure) -> Result<f64> {
    check_population(rewards, structure)?;
    let members = structure.members(structure.team_of(agent)?);
    Ok(members.iter().map(|&j| rewards.0[j]).sum::<f64>() / members.len() as f64)
}

/// Mean reward over the whole population.
pub fn system_reward(rewards: &RewardVector) -> Result<f64> {
    if rewards.is_empty() {
        return Err(Error::config("system reward of an empty population"));
    }
    Ok(rewards.sum() / rewards.len() as f64)
}

/// `psi * IR + phi * TR + omega * SR` for one agent.
pub fn credo_reward(
    agent: AgentId,
    credo: &CredoVector,
    rewards: &RewardVector,
    structure: &TeamStructure,
) -> Result<f64> {
    // Re-validate: a CredoVector can only be built valid, but this keeps the
    // contract explicit for deserialized or hand-built inputs.
    let credo = CredoVector::new(credo.psi, credo.phi, credo.omega)?;
    let ir = rewards
        .0
        .get(agent)
        .copied()
        .ok_or_else(|| Error::config(format!("unknown agent id {agent}")))?;
    let tr = team_reward(agent, rewards, structure)?;
    let sr = system_reward(rewards)?;
    Ok(credo.psi * ir + credo.phi * tr + credo.omega * sr)
}

/// Applies [`credo_reward`] to every agent. Team and system means are computed
/// once per call.
pub fn credo_reward_all(
    credos: &[CredoVector],
    rewards: &RewardVector,
    structure: &TeamStructure,
) -> Result<RewardVector> {
    if credos.len() != rewards.len() {
        return Err(Error::validation(format!(
            "{} credos supplied for {} rewards",
            credos.len(),
            rewards.len()
        )));
    }
    check_population(rewards, structure)?;
    let sr = system_reward(rewards)?;
    let team_means: Vec<f64> = structure
        .teams()
        .iter()
        .map(|m| m.iter().map(|&j| rewards.0[j]).sum::<f64>() / m.len() as f64)
        .collect();
    let out = credos
        .iter()
        .enumerate()
        .map(|(i, c)| {
            let tr = team_means[structure.agent_team[i]];
            c.psi * rewards.0[i] + c.phi * tr + c.omega * sr
        })
        .collect();
    Ok(RewardVector(out))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn two_pairs() -> TeamStructure {
        TeamStructure::new(vec![vec![0, 1], vec![2, 3]]).unwrap()
    }

    #[test]
    fn team_reward_examples() {
        let s = TeamStructure::new(vec![vec![0, 1]]).unwrap();
        let r = RewardVector(vec![3.0, 1.0]);
        assert_eq!(team_reward(0, &r, &s).unwrap(), 2.0);
        assert_eq!(team_reward(1, &r, &s).unwrap(), 2.0);

        let s = TeamStructure::new(vec![vec![0]]).unwrap();
        assert_eq!(team_reward(0, &RewardVector(vec![7.0]), &s).unwrap(), 7.0);

        let s = TeamStructure::new(vec![vec![0, 1, 2]]).unwrap();
        let r = RewardVector(vec![4.0, 0.0, 2.0]);
        assert_eq!(team_reward(1, &r, &s).unwrap(), 2.0);
    }

    #[test]
    fn team_reward_unknown_agent() {
        let r = RewardVector(vec![4.0, 0.0, 2.0, 2.0]);
        assert!(matches!(team_reward(9, &r, &two_pairs()), Err(Error::Config(_))));
    }

    #[test]
    fn system_reward_examples() {
        assert_eq!(system_reward(&RewardVector(vec![4.0, 0.0, 2.0, 2.0])).unwrap(), 2.0);
        assert_eq!(system_reward(&RewardVector::zeros(7)).unwrap(), 0.0);
        assert_eq!(system_reward(&RewardVector(vec![5.0, -1.0])).unwrap(), 2.0);
        assert!(matches!(system_reward(&RewardVector::default()), Err(Error::Config(_))));
    }

    #[test]
    fn credo_reward_examples() {
        let r = RewardVector(vec![4.0, 0.0, 2.0, 2.0]);
        let s = two_pairs();
        assert_eq!(credo_reward(0, &CredoVector::SELF_FOCUSED, &r, &s).unwrap(), 4.0);
        for a in 0..4 {
            assert_eq!(credo_reward(a, &CredoVector::SYSTEM_FOCUSED, &r, &s).unwrap(), 2.0);
        }
        let c = CredoVector::new(0.2, 0.3, 0.5).unwrap();
        assert!((credo_reward(0, &c, &r, &s).unwrap() - 2.4).abs() < 1e-12);
    }

    #[test]
    fn invalid_credo_rejected() {
        assert!(matches!(CredoVector::new(0.5, 0.5, 0.5), Err(Error::Validation(_))));
        assert!(matches!(CredoVector::new(-0.1, 0.6, 0.5), Err(Error::Validation(_))));
        assert!(CredoVector::new(0.2, 0.3, 0.5 + 5e-10).is_ok());
        let c = CredoVector {
            psi: 0.9,
            phi: 0.9,
            omega: 0.0,
        };
        let r = RewardVector(vec![1.0, 1.0, 1.0, 1.0]);
        assert!(matches!(
            credo_reward(0, &c, &r, &two_pairs()),
            Err(Error::Validation(_))
        ));
    }

    #[test]
    fn config_loading_normalizes_small_deviation() {
        let c: CredoVector = serde_json::from_str("[0.2, 0.3, 0.5000005]").unwrap();
        assert!((c.psi() + c.phi() + c.omega() - 1.0).abs() < 1e-12);
        assert!(serde_json::from_str::<CredoVector>("[0.2, 0.3, 0.51]").is_err());
    }

    #[test]
    fn credo_reward_all_examples() {
        let r = RewardVector(vec![4.0, 0.0, 2.0, 2.0]);
        let s = two_pairs();
        let out = credo_reward_all(&[CredoVector::SELF_FOCUSED; 4], &r, &s).unwrap();
        assert_eq!(out, r);
        let out = credo_reward_all(&[CredoVector::SYSTEM_FOCUSED; 4], &r, &s).unwrap();
        assert_eq!(out.0, vec![2.0; 4]);
        let c = CredoVector::new(0.2, 0.3, 0.5).unwrap();
        let out = credo_reward_all(&[c; 4], &r, &s).unwrap();
        for (got, want) in out.0.iter().zip([2.4, 1.6, 2.0, 2.0]) {
            assert!((got - want).abs() < 1e-12, "{got} vs {want}");
        }
        assert!(matches!(credo_reward_all(&[c; 3], &r, &s), Err(Error::Validation(_))));
    }

    #[test]
    fn partition_validation() {
        assert!(TeamStructure::new(vec![vec![0, 1], vec![1, 2]]).is_err());
        assert!(TeamStructure::new(vec![vec![0, 1], vec![]]).is_err());
        assert!(TeamStructure::new(vec![vec![0, 3]]).is_err());
        assert!(TeamStructure::equal_teams(25, 4).is_err());
        let s = TeamStructure::equal_teams(25, 5).unwrap();
        assert_eq!(s.team_of(12).unwrap(), 2);
        assert_eq!(s.members(4), &[20, 21, 22, 23, 24]);
    }

    #[test]
    fn general_credo_reduces() {
        let g = GeneralCredo {
            psi: 0.2,
            team_weights: vec![0.3],
            omega: 0.5,
        };
        assert_eq!(g.to_single_team().unwrap(), CredoVector::new(0.2, 0.3, 0.5).unwrap());
        let g = GeneralCredo {
            psi: 0.2,
            team_weights: vec![0.1, 0.2],
            omega: 0.5,
        };
        assert!(g.to_single_team().is_err());
    }

    #[test]
    fn lattice_sizes() {
        assert_eq!(simplex_lattice(1.0).unwrap().len(), 3);
        assert_eq!(simplex_lattice(0.5).unwrap().len(), 6);
        assert_eq!(simplex_lattice(0.2).unwrap().len(), 21);
        assert_eq!(simplex_lattice(0.02).unwrap().len(), 1326);
        assert!(simplex_lattice(0.3).is_err());
        assert!(simplex_lattice(0.0).is_err());
    }

    fn arb_partition() -> impl Strategy<Value = (Vec<f64>, TeamStructure)> {
        (1usize..12, 1usize..6).prop_flat_map(|(n, k)| {
            let k = k.min(n);
            (
                proptest::collection::vec(-100.0f64..100.0, n),
                Just(k),
                Just((0..n).collect::<Vec<usize>>()).prop_shuffle(),
            )
                .prop_map(|(r, k, ids)| {
                    let mut teams = vec![Vec::new(); k];
                    for (pos, a) in ids.into_iter().enumerate() {
                        teams[pos % k].push(a);
                    }
                    (r, TeamStructure::new(teams).unwrap())
                })
        })
    }

    fn arb_credo() -> impl Strategy<Value = CredoVector> {
        (0.0f64..1.0, 0.0f64..1.0, 0.0f64..1.0).prop_filter_map("degenerate", |(a, b, c)| {
            let s = a + b + c;
            (s > 1e-6).then(|| CredoVector::normalized(a / s, b / s, c / s).unwrap())
        })
    }

    proptest! {
        #[test]
        fn budget_balance((r, s) in arb_partition(), c in arb_credo()) {
            let r = RewardVector(r);
            let out = credo_reward_all(&vec![c; r.len()], &r, &s).unwrap();
            prop_assert!((out.sum() - r.sum()).abs() < 1e-9);
        }

        #[test]
        fn convex_combination((r, s) in arb_partition(), c in arb_credo()) {
            let r = RewardVector(r);
            for a in 0..r.len() {
                let parts = [r.0[a], team_reward(a, &r, &s).unwrap(), system_reward(&r).unwrap()];
                let lo = parts.iter().cloned().fold(f64::INFINITY, f64::min);
                let hi = parts.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                let v = credo_reward(a, &c, &r, &s).unwrap();
                prop_assert!(v >= lo - 1e-9 && v <= hi + 1e-9);
            }
        }

        #[test]
        fn single_team_reduces_to_system(r in proptest::collection::vec(-10.0f64..10.0, 1..20)) {
            let r = RewardVector(r);
            let s = TeamStructure::new(vec![(0..r.len()).collect()]).unwrap();
            let sr = system_reward(&r).unwrap();
            for a in 0..r.len() {
                prop_assert!((team_reward(a, &r, &s).unwrap() - sr).abs() < 1e-12);
            }
        }

        #[test]
        fn permutation_equivariance((r, s) in arb_partition(), c in arb_credo(), seed in any::<u64>()) {
            use rand::{seq::SliceRandom, SeedableRng};
            let n = r.len();
            let mut perm: Vec<usize> = (0..n).collect();
            perm.shuffle(&mut rand_chacha::ChaCha8Rng::seed_from_u64(seed));
            let credos: Vec<CredoVector> = (0..n).map(|i| if i % 2 == 0 { c } else { CredoVector::SELF_FOCUSED }).collect();
            let out = credo_reward_all(&credos, &RewardVector(r.clone()), &s).unwrap();

            let mut pr = vec![0.0; n];
            let mut pc = vec![CredoVector::SELF_FOCUSED; n];
            for (a, &to) in perm.iter().enumerate() {
                pr[to] = r[a];
                pc[to] = credos[a];
            }
            let pout = credo_reward_all(&pc, &RewardVector(pr), &s.permuted(&perm).unwrap()).unwrap();
            for (a, &to) in perm.iter().enumerate() {
                prop_assert!((pout.0[to] - out.0[a]).abs() < 1e-12);
            }
        }
    }
}
