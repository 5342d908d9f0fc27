//! Stage-game cooperation incentive across the credo simplex.
//!
//! The closed form is
//! `phi * (nu - 2c/(b+c)) + omega * (b-c)/2 - psi * c`; positive values mean
//! cooperation is the better stage-game action. [`monte_carlo_incentive`]
//! estimates the same quantity by simulating single pairings under an explicit
//! reward-sharing model and is used as an independent check.

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::credo::{simplex_lattice, CredoVector};
use crate::error::{Error, Result};
use crate::ipd::{stage_payoff, Action};

/// Incentives with magnitude at or below this are reported as indifference.
pub const INDIFFERENCE_TOLERANCE: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StageGameParams {
    pub b: f64,
    pub c: f64,
    pub nu: f64,
    pub num_teams: usize,
}

impl StageGameParams {
    pub fn new(b: f64, c: f64, nu: f64, num_teams: usize) -> Result<Self> {
        let p = Self { b, c, nu, num_teams };
        p.validate()?;
        Ok(p)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.b.is_finite() && self.c.is_finite() && self.c > 0.0 && self.b > self.c) {
            return Err(Error::domain(format!(
                "stage game requires b > c > 0, got b = {}, c = {}",
                self.b, self.c
            )));
        }
        if !(0.0..=1.0).contains(&self.nu) {
            return Err(Error::validation(format!("nu = {} outside [0, 1]", self.nu)));
        }
        if self.num_teams == 0 {
            return Err(Error::validation("num_teams must be positive"));
        }
        Ok(())
    }

    /// Pairing probability at which a fully team-focused agent is indifferent.
    pub fn team_break_even_nu(&self) -> f64 {
        2.0 * self.c / (self.b + self.c)
    }
}

/// Counterpart cooperation probabilities, split by team relation.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StrategyProfile {
    pub sigma_teammate: f64,
    pub sigma_other: f64,
}

impl StrategyProfile {
    pub fn new(sigma_teammate: f64, sigma_other: f64) -> Result<Self> {
        for s in [sigma_teammate, sigma_other] {
            if !(0.0..=1.0).contains(&s) {
                return Err(Error::validation(format!("cooperation probability {s} outside [0, 1]")));
            }
        }
        Ok(Self {
            sigma_teammate,
            sigma_other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum IncentiveBand {
    Cooperate,
    Indifferent,
    Defect,
}

impl IncentiveBand {
    pub fn classify(incentive: f64) -> Self {
        if incentive > INDIFFERENCE_TOLERANCE {
            IncentiveBand::Cooperate
        } else if incentive < -INDIFFERENCE_TOLERANCE {
            IncentiveBand::Defect
        } else {
            IncentiveBand::Indifferent
        }
    }
}

pub fn cooperation_incentive(credo: &CredoVector, params: &StageGameParams) -> Result<f64> {
    params.validate()?;
    let StageGameParams { b, c, nu, .. } = *params;
    Ok(credo.phi() * (nu - 2.0 * c / (b + c)) + credo.omega() * (b - c) / 2.0 - credo.psi() * c)
}

#[derive(Debug, Clone, PartialEq)]
pub struct IncentiveGrid {
    pub params: StageGameParams,
    pub increment: f64,
    pub entries: Vec<(CredoVector, f64)>,
}

impl IncentiveGrid {
    pub fn band_counts(&self) -> [usize; 3] {
        let mut counts = [0; 3];
        for (_, v) in &self.entries {
            counts[match IncentiveBand::classify(*v) {
                IncentiveBand::Cooperate => 0,
                IncentiveBand::Indifferent => 1,
                IncentiveBand::Defect => 2,
            }] += 1;
        }
        counts
    }

    pub fn value_at(&self, credo: &CredoVector) -> Option<f64> {
        self.entries
            .iter()
            .find(|(c, _)| {
                c.as_array()
                    .iter()
                    .zip(credo.as_array())
                    .all(|(a, b)| (a - b).abs() < 1e-9)
            })
            .map(|(_, v)| *v)
    }
}

/// Evaluates the closed-form incentive at every simplex lattice point.
pub fn incentive_grid(params: &StageGameParams, increment: f64) -> Result<IncentiveGrid> {
    params.validate()?;
    let entries = simplex_lattice(increment)?
        .into_iter()
        .map(|credo| Ok((credo, cooperation_incentive(&credo, params)?)))
        .collect::<Result<Vec<_>>>()?;
    Ok(IncentiveGrid {
        params: *params,
        increment,
        entries,
    })
}

/// ASCII sign map of the incentive over the simplex: team focus at the top
/// vertex, self focus bottom left, system focus bottom right. `+` marks
/// cooperation, `-` defection and `0` indifference.
pub fn render_sign_map(params: &StageGameParams, increment: f64) -> Result<String> {
    params.validate()?;
    let k = crate::credo::lattice_divisions(increment)?;
    let mut out = String::new();
    for r in 0..=k {
        out.push_str(&" ".repeat(k - r));
        for j in 0..=r {
            let credo = CredoVector::normalized(
                (r - j) as f64 / k as f64,
                (k - r) as f64 / k as f64,
                j as f64 / k as f64,
            )?;
            let mark = match IncentiveBand::classify(cooperation_incentive(&credo, params)?) {
                IncentiveBand::Cooperate => '+',
                IncentiveBand::Indifferent => '0',
                IncentiveBand::Defect => '-',
            };
            out.push(mark);
            if j < r {
                out.push(' ');
            }
        }
        out.push('\n');
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct McEstimate {
    pub mean: f64,
    pub std_err: f64,
    pub samples: usize,
}

/// Focal utility of one simulated pairing under the stage-game sharing model.
///
/// The pair is the only active interaction. A teammate counterpart forms an
/// effective team of two with the focal agent; otherwise the focal agent's team
/// reward is its own payoff. System reward is the mean over the pair.
fn pairing_utility(credo: &CredoVector, focal: Action, other: Action, teammate: bool, b: f64, c: f64) -> f64 {
    let (mine, theirs) = stage_payoff(focal, other, b, c);
    let pair_mean = (mine + theirs) / 2.0;
    let team = if teammate { pair_mean } else { mine };
    credo.psi() * mine + credo.phi() * team + credo.omega() * pair_mean
}

fn sample_pairing_utility(
    rng: &mut ChaCha8Rng,
    credo: &CredoVector,
    focal: Action,
    params: &StageGameParams,
    profile: &StrategyProfile,
) -> f64 {
    let teammate = rng.gen_bool(params.nu);
    if !teammate && params.num_teams > 1 {
        // The non-teammate's team is drawn uniformly over the other teams. It
        // does not change the two-agent payoff, but keeps the draw faithful to
        // the pairing model.
        let _other_team: usize = rng.gen_range(0..params.num_teams - 1);
    }
    let p_coop = if teammate {
        profile.sigma_teammate
    } else {
        profile.sigma_other
    };
    let other = if rng.gen_bool(p_coop) {
        Action::Cooperate
    } else {
        Action::Defect
    };
    pairing_utility(credo, focal, other, teammate, params.b, params.c)
}

/// Unbiased estimate of `E[U | focal cooperates] - E[U | focal defects]`.
///
/// Each sample draws two independent pairings, one per focal action.
pub fn monte_carlo_incentive(
    credo: &CredoVector,
    params: &StageGameParams,
    profile: &StrategyProfile,
    samples: usize,
    seed: u64,
) -> Result<McEstimate> {
    params.validate()?;
    StrategyProfile::new(profile.sigma_teammate, profile.sigma_other)?;
    if samples == 0 {
        return Err(Error::validation("monte-carlo incentive needs at least one sample"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mean = 0.0;
    let mut m2 = 0.0;
    for n in 1..=samples {
        let coop = sample_pairing_utility(&mut rng, credo, Action::Cooperate, params, profile);
        let defect = sample_pairing_utility(&mut rng, credo, Action::Defect, params, profile);
        let d = coop - defect;
        let delta = d - mean;
        mean += delta / n as f64;
        m2 += delta * (d - mean);
    }
    let var = if samples > 1 { m2 / (samples - 1) as f64 } else { 0.0 };
    Ok(McEstimate {
        mean,
        std_err: (var / samples as f64).sqrt(),
        samples,
    })
}
