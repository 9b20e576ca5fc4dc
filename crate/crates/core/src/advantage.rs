//! Group-relative advantages and the focal exploration weight.

use crate::env::{TaskSpec, Trajectory};
use crate::error::{Error, Result};
use crate::policy::TokenPolicy;

pub const DEFAULT_ADV_EPS: f64 = 1e-8;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Source {
    OnPolicy,
    External,
}

/// One prompt's rollouts: on-policy samples plus injected demonstrations.
#[derive(Debug, Clone, PartialEq)]
pub struct RolloutGroup {
    pub task: TaskSpec,
    pub members: Vec<Trajectory>,
    pub sources: Vec<Source>,
    pub rewards: Vec<f64>,
}

impl RolloutGroup {
    /// Rewards are recomputed by the task's verifier.
    pub fn new(task: TaskSpec, members: Vec<Trajectory>, sources: Vec<Source>, max_external: usize) -> Result<Self> {
        if members.len() < 2 {
            return Err(Error::InvalidDimension(format!("group needs at least 2 members, got {}", members.len())));
        }
        if sources.len() != members.len() {
            return Err(Error::LengthMismatch { expected: members.len(), got: sources.len() });
        }
        let external = sources.iter().filter(|s| **s == Source::External).count();
        if external > max_external {
            return Err(Error::InvalidDimension(format!("{external} external members, at most {max_external} allowed")));
        }
        let rewards = members.iter().map(|m| task.verify(&m.tokens)).collect::<Result<Vec<f64>>>()?;
        let mut members = members;
        for (m, &r) in members.iter_mut().zip(&rewards) {
            m.reward = r;
        }
        Ok(RolloutGroup { task, members, sources, rewards })
    }

    pub fn len(&self) -> usize {
        self.members.len()
    }

    pub fn is_empty(&self) -> bool {
        self.members.is_empty()
    }

    pub fn on_policy(&self) -> impl Iterator<Item = (usize, &Trajectory)> {
        self.indexed(Source::OnPolicy)
    }

    pub fn external(&self) -> impl Iterator<Item = (usize, &Trajectory)> {
        self.indexed(Source::External)
    }

    fn indexed(&self, which: Source) -> impl Iterator<Item = (usize, &Trajectory)> {
        self.members
            .iter()
            .enumerate()
            .filter(move |(i, _)| self.sources[*i] == which)
    }
}

/// `(R_i - mean) / std` with the population std; all zeros when the std is
/// below `eps`.
pub fn group_normalize(rewards: &[f64], eps: f64) -> Vec<f64> {
    let n = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / n;
    let var = rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / n;
    let std = var.sqrt();
    if !(std >= eps) {
        return vec![0.0; rewards.len()];
    }
    rewards.iter().map(|r| (r - mean) / std).collect()
}

/// `(1 - p)^gamma`, used as a constant in every objective.
pub fn focal_weight(p: f64, gamma: f64) -> Result<f64> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Domain(format!("probability {p} outside [0, 1]")));
    }
    if !(gamma >= 0.0) {
        return Err(Error::Domain(format!("gamma must be non-negative, got {gamma}")));
    }
    Ok((1.0 - p).powf(gamma))
}

#[derive(Debug, Clone, PartialEq)]
pub struct AdvantageSeries {
    pub gamma: f64,
    /// Group-normalised scalar per member.
    pub scalar: Vec<f64>,
    /// Per-token focal weights, external members only.
    pub focal: Vec<Option<Vec<f64>>>,
    /// `scalar[i] * focal[i][t]`, external members only.
    pub token: Vec<Option<Vec<f64>>>,
}

pub fn exploration_advantage<P: TokenPolicy + ?Sized>(group: &RolloutGroup, cur: &P, gamma: f64, eps: f64) -> Result<AdvantageSeries> {
    let scalar = group_normalize(&group.rewards, eps);
    let mut focal = vec![None; group.len()];
    let mut token = vec![None; group.len()];
    for (i, traj) in group.external() {
        let c = traj
            .states()
            .iter()
            .zip(&traj.tokens)
            .map(|(s, &a)| focal_weight(cur.token_prob(s, a).clamp(0.0, 1.0), gamma))
            .collect::<Result<Vec<f64>>>()?;
        token[i] = Some(c.iter().map(|w| scalar[i] * w).collect());
        focal[i] = Some(c);
    }
    Ok(AdvantageSeries { gamma, scalar, focal, token })
}
