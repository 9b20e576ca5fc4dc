//! Importance ratios for learning from externally generated trajectories,
//! plus exact and Monte-Carlo diagnostics of their bias and variance.
//!
//! Ratios are per token. For a token with probability `p` under the current
//! policy, `p_old` under the frozen snapshot and `p_b` under the behavior
//! policy (when it is known):
//!
//! | kind            | ratio                                      |
//! |-----------------|--------------------------------------------|
//! | `OnPolicy`      | `p / p_old`                                |
//! | `ProxyIs`       | `p / p_old` applied to external data       |
//! | `StandardIs`    | `p / p_b`                                  |
//! | `MisExact`      | `2p / (p_b + p_old)`                       |
//! | `MisBayes`      | `2p / (q + p_old)`, `q = p_old/2 + 1/(2V)` |
//! | `BayesIs`       | `p / q`                                    |
//! | `UnitBehavior`  | `2p / (1 + p_old)`                         |
//!
//! `q` is the equal-weight mixture of the snapshot and the uniform token
//! distribution, the L2-risk-minimising guess for an unknown behavior
//! policy when both candidates are equally likely. Denominators are floored
//! at `prob_floor`; the policies themselves are never floored.
//!
//! The trajectory-level functions enumerate the whole trajectory space and
//! are the reference values the Monte-Carlo estimates are checked against.

use std::fmt;
use std::str::FromStr;

use crate::env::{enumerate_sums, Token, TaskSpec, Trajectory, DEFAULT_ENUMERATION_CAP};
use crate::error::{Error, Result};
use crate::fmt::JsonObject;
use crate::par;
use crate::policy::{sample_trajectory, token_probs, traj_logprob, StateKey, TokenPolicy, MAX_VOCAB};
use crate::rng::stream;

pub const DEFAULT_PROB_FLOOR: f64 = 1e-12;
const ZERO_MASS: f64 = 1e-300;
const SAMPLE_CHUNK: usize = 4096;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum EstimatorKind {
    OnPolicy,
    StandardIs,
    ProxyIs,
    MisExact,
    MisBayes,
    BayesIs,
    UnitBehavior,
}

impl EstimatorKind {
    pub const ALL: [EstimatorKind; 7] = [
        EstimatorKind::OnPolicy,
        EstimatorKind::StandardIs,
        EstimatorKind::ProxyIs,
        EstimatorKind::MisExact,
        EstimatorKind::MisBayes,
        EstimatorKind::BayesIs,
        EstimatorKind::UnitBehavior,
    ];

    pub fn name(self) -> &'static str {
        match self {
            EstimatorKind::OnPolicy => "on_policy",
            EstimatorKind::StandardIs => "standard_is",
            EstimatorKind::ProxyIs => "proxy_is",
            EstimatorKind::MisExact => "mis_exact",
            EstimatorKind::MisBayes => "mis_bayes",
            EstimatorKind::BayesIs => "bayes_is",
            EstimatorKind::UnitBehavior => "unit_behavior",
        }
    }

    /// Whether the ratio needs the true behavior probability.
    pub fn needs_behavior(self) -> bool {
        matches!(self, EstimatorKind::StandardIs | EstimatorKind::MisExact)
    }
}

impl fmt::Display for EstimatorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for EstimatorKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|k| k.name() == norm || k.name().replace('_', "") == norm)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EstimatorSpec {
    pub kind: EstimatorKind,
    pub prob_floor: f64,
    pub ratio_cap: Option<f64>,
}

impl Default for EstimatorSpec {
    fn default() -> Self {
        EstimatorSpec::new(EstimatorKind::MisBayes)
    }
}

impl EstimatorSpec {
    pub fn new(kind: EstimatorKind) -> Self {
        EstimatorSpec { kind, prob_floor: DEFAULT_PROB_FLOOR, ratio_cap: None }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.prob_floor > 0.0) {
            return Err(Error::Domain(format!("prob_floor must be positive, got {}", self.prob_floor)));
        }
        if let Some(cap) = self.ratio_cap {
            if !(cap >= 1.0) {
                return Err(Error::Domain(format!("ratio_cap must be at least 1, got {cap}")));
            }
        }
        Ok(())
    }

    /// `(numerator factor, raw denominator)` of the per-token ratio.
    fn parts(&self, p_old: f64, p_behavior: Option<f64>, vocab: usize) -> Result<(f64, f64)> {
        let behavior = || {
            p_behavior.ok_or_else(|| Error::Domain(format!("{} needs behavior probabilities", self.kind)))
        };
        Ok(match self.kind {
            EstimatorKind::OnPolicy | EstimatorKind::ProxyIs => (1.0, p_old),
            EstimatorKind::StandardIs => (1.0, behavior()?),
            EstimatorKind::MisExact => (2.0, behavior()? + p_old),
            EstimatorKind::MisBayes => (2.0, bayes_mixture(p_old, vocab) + p_old),
            EstimatorKind::BayesIs => (1.0, bayes_mixture(p_old, vocab)),
            EstimatorKind::UnitBehavior => (2.0, 1.0 + p_old),
        })
    }

    /// Floored denominator divided by the numerator factor, i.e. the value
    /// `d` with `ratio = p_cur / d` before capping. Independent of the
    /// current policy.
    pub fn effective_denominator(&self, p_old: f64, p_behavior: Option<f64>, vocab: usize) -> Result<f64> {
        let (factor, den) = self.parts(p_old, p_behavior, vocab)?;
        Ok(den.max(self.prob_floor) / factor)
    }

    /// Ratio and whether the cap was binding.
    pub fn token_ratio(&self, p_cur: f64, p_old: f64, p_behavior: Option<f64>, vocab: usize) -> Result<(f64, bool)> {
        let r = p_cur / self.effective_denominator(p_old, p_behavior, vocab)?;
        Ok(match self.ratio_cap {
            Some(cap) if r > cap => (cap, true),
            _ => (r, false),
        })
    }
}

fn bayes_mixture(p_old: f64, vocab: usize) -> f64 {
    0.5 * p_old + 0.5 / vocab as f64
}

/// Bayes-optimal behavior estimate `0.5 * old(token | state) + 0.5 / V`.
pub fn bayes_behavior_prob<P: TokenPolicy + ?Sized>(old: &P, vocab: usize, state: &StateKey, token: Token) -> f64 {
    bayes_mixture(old.token_prob(state, token), vocab)
}

/// Per-token weights for one trajectory.
#[derive(Debug, Clone, PartialEq)]
pub struct RatioSeries {
    pub kind: EstimatorKind,
    pub weights: Vec<f64>,
}

impl RatioSeries {
    pub fn max(&self) -> f64 {
        self.weights.iter().copied().fold(f64::NEG_INFINITY, f64::max)
    }

    pub fn product(&self) -> f64 {
        self.weights.iter().product()
    }
}

/// Ratio series from per-token probabilities.
pub fn ratio_series(
    spec: &EstimatorSpec,
    cur: &[f64],
    old: &[f64],
    behavior: Option<&[f64]>,
    vocab: usize,
) -> Result<RatioSeries> {
    let weights = (0..cur.len())
        .map(|t| spec.token_ratio(cur[t], old[t], behavior.map(|b| b[t]), vocab).map(|(r, _)| r))
        .collect::<Result<Vec<f64>>>()?;
    Ok(RatioSeries { kind: spec.kind, weights })
}

pub fn onpolicy_ratio<C, O>(cur: &C, old: &O, traj: &Trajectory) -> RatioSeries
where
    C: TokenPolicy + ?Sized,
    O: TokenPolicy + ?Sized,
{
    let spec = EstimatorSpec::new(EstimatorKind::OnPolicy);
    ratio_series(&spec, &token_probs(cur, traj), &token_probs(old, traj), None, cur.vocab())
        .expect("on-policy ratio needs no behavior probabilities")
}

pub fn mis_ratio_exact<C, O, B>(cur: &C, old: &O, behavior: &B, traj: &Trajectory) -> RatioSeries
where
    C: TokenPolicy + ?Sized,
    O: TokenPolicy + ?Sized,
    B: TokenPolicy + ?Sized,
{
    let spec = EstimatorSpec::new(EstimatorKind::MisExact);
    let b = token_probs(behavior, traj);
    ratio_series(&spec, &token_probs(cur, traj), &token_probs(old, traj), Some(&b), cur.vocab())
        .expect("behavior probabilities supplied")
}

pub fn mis_ratio_bayes<C, O>(cur: &C, old: &O, traj: &Trajectory) -> RatioSeries
where
    C: TokenPolicy + ?Sized,
    O: TokenPolicy + ?Sized,
{
    let spec = EstimatorSpec::new(EstimatorKind::MisBayes);
    ratio_series(&spec, &token_probs(cur, traj), &token_probs(old, traj), None, cur.vocab())
        .expect("Bayes ratio needs no behavior probabilities")
}

/// Standard IS estimate of `J(cur)` from samples drawn from `behavior`.
pub fn standard_is_value<C, B>(cur: &C, behavior: &B, task: &TaskSpec, samples: &[Trajectory]) -> Result<f64>
where
    C: TokenPolicy + ?Sized,
    B: TokenPolicy + ?Sized,
{
    if samples.is_empty() {
        return Err(Error::Empty("sample list"));
    }
    let total: f64 = samples
        .iter()
        .map(|s| {
            let r = if task.is_valid(&s.tokens) { 1.0 } else { 0.0 };
            (traj_logprob(cur, s) - traj_logprob(behavior, s)).exp() * r
        })
        .sum();
    Ok(total / samples.len() as f64)
}

/// `n` trajectories from `policy`, drawn in fixed-size chunks with one
/// stream per chunk so the result is independent of the thread count.
pub fn sample_batch<P>(policy: &P, task: &TaskSpec, n: usize, seed: u64, name: &str) -> Vec<Trajectory>
where
    P: TokenPolicy + ?Sized,
{
    let chunks = n.div_ceil(SAMPLE_CHUNK);
    par::map_range(chunks, |c| {
        let mut rng = stream(seed, name, c as u64);
        let len = SAMPLE_CHUNK.min(n - c * SAMPLE_CHUNK);
        (0..len).map(|_| sample_trajectory(policy, task, &mut rng)).collect::<Vec<_>>()
    })
    .into_iter()
    .flatten()
    .collect()
}

/// Trajectory-level weight of an estimator and the density its samples
/// come from. `uniform` is the uniform trajectory mass `V^-H`.
#[derive(Debug, Clone, Copy)]
struct TrajectoryMasses {
    cur: f64,
    old: f64,
    behavior: f64,
    uniform: f64,
}

impl TrajectoryMasses {
    /// `(sampling density, denominator density)`; weight is `cur / den`.
    fn sampling_and_denominator(&self, kind: EstimatorKind) -> (f64, f64) {
        let bayes = 0.5 * self.old + 0.5 * self.uniform;
        match kind {
            EstimatorKind::OnPolicy => (self.old, self.old),
            EstimatorKind::ProxyIs => (self.behavior, self.old),
            EstimatorKind::StandardIs => (self.behavior, self.behavior),
            EstimatorKind::MisExact => (self.behavior, 0.5 * self.behavior + 0.5 * self.old),
            EstimatorKind::MisBayes => (self.behavior, 0.5 * bayes + 0.5 * self.old),
            EstimatorKind::BayesIs => (self.behavior, bayes),
            EstimatorKind::UnitBehavior => (self.behavior, 0.5 + 0.5 * self.old),
        }
    }
}

/// Exact bias of a trajectory-level estimator by two independent routes.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BiasRoutes {
    /// `sum_{den>0} cur R (samp/den - 1) - sum_{den=0} cur R`
    pub closed_form: f64,
    /// `E_samp[w R] - J(cur)`, each term enumerated separately.
    pub expectation_minus_j: f64,
    pub exact_j: f64,
    pub exact_estimator_mean: f64,
}

fn uniform_mass(task: &TaskSpec) -> f64 {
    (task.vocab() as f64).powi(-(task.horizon() as i32))
}

pub fn estimator_bias_exact<C, O, B>(kind: EstimatorKind, cur: &C, old: &O, behavior: &B, task: &TaskSpec) -> Result<BiasRoutes>
where
    C: TokenPolicy,
    O: TokenPolicy,
    B: TokenPolicy,
{
    let u = uniform_mass(task);
    let sums = enumerate_sums(task, &[cur as &dyn TokenPolicy, old, behavior], 3, DEFAULT_ENUMERATION_CAP, |seq, m, acc| {
        if !task.is_valid(seq) {
            return;
        }
        let tm = TrajectoryMasses { cur: m[0], old: m[1], behavior: m[2], uniform: u };
        let (samp, den) = tm.sampling_and_denominator(kind);
        if den > 0.0 {
            acc[0] += tm.cur * (samp / den - 1.0);
            acc[1] += samp * (tm.cur / den);
        } else {
            acc[0] -= tm.cur;
        }
        acc[2] += tm.cur;
    })?;
    Ok(BiasRoutes {
        closed_form: sums[0],
        expectation_minus_j: sums[1] - sums[2],
        exact_j: sums[2],
        exact_estimator_mean: sums[1],
    })
}

/// Closed-form bias of the proxy estimator (samples from `behavior`,
/// denominator `old`): `sum cur R (behavior/old - 1)`.
pub fn proxy_is_bias_exact<C, O, B>(cur: &C, old: &O, behavior: &B, task: &TaskSpec) -> Result<f64>
where
    C: TokenPolicy,
    O: TokenPolicy,
    B: TokenPolicy,
{
    Ok(estimator_bias_exact(EstimatorKind::ProxyIs, cur, old, behavior, task)?.closed_form)
}

/// Return-weighted target mass on trajectories the behavior policy cannot
/// produce.
pub fn support_gap_mass<C, B>(cur: &C, behavior: &B, task: &TaskSpec) -> Result<f64>
where
    C: TokenPolicy,
    B: TokenPolicy,
{
    let sums = enumerate_sums(task, &[cur as &dyn TokenPolicy, behavior], 1, DEFAULT_ENUMERATION_CAP, |seq, m, acc| {
        if m[1] == 0.0 && task.is_valid(seq) {
            acc[0] += m[0];
        }
    })?;
    Ok(sums[0])
}

/// `chi^2(cur, behavior) = sum (cur - behavior)^2 / behavior`, which equals
/// `sum cur^2 / behavior - 1` and is exactly zero for identical policies.
pub fn chi_squared<C, B>(cur: &C, behavior: &B, task: &TaskSpec) -> Result<f64>
where
    C: TokenPolicy,
    B: TokenPolicy,
{
    let sums = enumerate_sums(task, &[cur as &dyn TokenPolicy, behavior], 2, DEFAULT_ENUMERATION_CAP, |_, m, acc| {
        if m[1] < ZERO_MASS {
            if m[0] > 0.0 {
                acc[1] += 1.0;
            }
        } else {
            let d = m[0] - m[1];
            acc[0] += d * d / m[1];
        }
    })?;
    if sums[1] > 0.0 {
        return Err(Error::ZeroMass);
    }
    Ok(sums[0])
}

/// Exact moments of the trajectory ratio `r = cur / behavior` under the
/// behavior policy.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RatioMoments {
    pub mean: f64,
    pub variance: f64,
    pub fourth_central: f64,
}

pub fn ratio_moments_exact<C, B>(cur: &C, behavior: &B, task: &TaskSpec) -> Result<RatioMoments>
where
    C: TokenPolicy,
    B: TokenPolicy,
{
    let first = enumerate_sums(task, &[cur as &dyn TokenPolicy, behavior], 1, DEFAULT_ENUMERATION_CAP, |_, m, acc| {
        if m[1] > 0.0 {
            acc[0] += m[0];
        }
    })?[0];
    let central = enumerate_sums(task, &[cur as &dyn TokenPolicy, behavior], 2, DEFAULT_ENUMERATION_CAP, |_, m, acc| {
        if m[1] > 0.0 {
            let d = m[0] / m[1] - first;
            acc[0] += m[1] * d * d;
            acc[1] += m[1] * d * d * d * d;
        }
    })?;
    Ok(RatioMoments { mean: first, variance: central[0], fourth_central: central[1] })
}

/// Unbiased sample variance of the trajectory ratio over `n` draws from
/// `behavior`.
pub fn sample_ratio_variance<C, B>(cur: &C, behavior: &B, task: &TaskSpec, n: usize, seed: u64) -> Result<f64>
where
    C: TokenPolicy,
    B: TokenPolicy,
{
    if n < 2 {
        return Err(Error::Domain("need at least two samples".into()));
    }
    let samples = sample_batch(behavior, task, n, seed, "ratio-variance");
    let ratios: Vec<f64> = samples
        .iter()
        .map(|s| (traj_logprob(cur, s) - traj_logprob(behavior, s)).exp())
        .collect();
    Ok(sample_variance(&ratios).1)
}

/// `(mean, unbiased variance)`.
pub fn sample_variance(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    let ss: f64 = xs.iter().map(|x| (x - mean) * (x - mean)).sum();
    (mean, if xs.len() > 1 { ss / (n - 1.0) } else { 0.0 })
}

/// Largest `|(p_b - p_old) / (p_b + p_old)|` over every state and token of
/// the task.
pub fn max_distortion_factor<O, B>(old: &O, behavior: &B, task: &TaskSpec) -> f64
where
    O: TokenPolicy,
    B: TokenPolicy,
{
    let v = task.vocab();
    let (mut po, mut pb) = ([0.0; MAX_VOCAB], [0.0; MAX_VOCAB]);
    let mut worst: f64 = 0.0;
    for state in task.states() {
        old.probs_into(&state, &mut po[..v]);
        behavior.probs_into(&state, &mut pb[..v]);
        for a in 0..v {
            let s = pb[a] + po[a];
            if s > 0.0 {
                worst = worst.max(((pb[a] - po[a]) / s).abs());
            }
        }
    }
    worst
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MisWeightBound {
    pub max_token_weight: f64,
    pub max_trajectory_weight: f64,
}

/// Largest mixture weight `p / (alpha p_old + (1 - alpha) p_b)` over every
/// state and token, and its product along trajectories. Errors when the
/// per-token weight exceeds `1 / alpha` or the trajectory weight exceeds
/// `(1 / alpha)^H` (beyond `1e-9`), which cannot happen when `old == cur`.
pub fn mis_weight_bound_check<C, O, B>(cur: &C, old: &O, behavior: &B, task: &TaskSpec, alpha_star: f64) -> Result<MisWeightBound>
where
    C: TokenPolicy,
    O: TokenPolicy,
    B: TokenPolicy,
{
    if !(alpha_star > 0.0 && alpha_star <= 1.0) {
        return Err(Error::Domain(format!("alpha_star must be in (0, 1], got {alpha_star}")));
    }
    let v = task.vocab();
    let weight = |pc: f64, po: f64, pb: f64| {
        let den = (alpha_star * po + (1.0 - alpha_star) * pb).max(DEFAULT_PROB_FLOOR);
        if pc == 0.0 { 0.0 } else { pc / den }
    };
    let (mut pc, mut po, mut pb) = ([0.0; MAX_VOCAB], [0.0; MAX_VOCAB], [0.0; MAX_VOCAB]);
    let mut max_token: f64 = 0.0;
    for state in task.states() {
        cur.probs_into(&state, &mut pc[..v]);
        old.probs_into(&state, &mut po[..v]);
        behavior.probs_into(&state, &mut pb[..v]);
        for a in 0..v {
            max_token = max_token.max(weight(pc[a], po[a], pb[a]));
        }
    }
    let mut max_traj: f64 = 0.0;
    let mut buf = [[0.0; MAX_VOCAB]; 3];
    for seq in crate::env::TrajectorySpace::of(task)?.iter() {
        let mut w = 1.0;
        let mut state = StateKey::root(task.prompt_id());
        for &t in &seq {
            cur.probs_into(&state, &mut buf[0][..v]);
            old.probs_into(&state, &mut buf[1][..v]);
            behavior.probs_into(&state, &mut buf[2][..v]);
            let a = t as usize;
            w *= weight(buf[0][a], buf[1][a], buf[2][a]);
            state = state.child(t);
        }
        max_traj = max_traj.max(w);
    }
    let token_bound = 1.0 / alpha_star + 1e-9;
    if max_token > token_bound {
        return Err(Error::BoundViolated { weight: max_token, bound: token_bound });
    }
    let traj_bound = (1.0 / alpha_star).powi(task.horizon() as i32) + 1e-9;
    if max_traj > traj_bound {
        return Err(Error::BoundViolated { weight: max_traj, bound: traj_bound });
    }
    Ok(MisWeightBound { max_token_weight: max_token, max_trajectory_weight: max_traj })
}

/// Enumerated Bayes risk of the estimate `lambda * old + (1 - lambda) * U`
/// under an equal prior on `{old, U}` with squared-L2 loss over
/// trajectories.
pub fn bayes_risk<O: TokenPolicy>(old: &O, task: &TaskSpec, lambda: f64) -> Result<f64> {
    let u = uniform_mass(task);
    let sums = enumerate_sums(task, &[old as &dyn TokenPolicy], 1, DEFAULT_ENUMERATION_CAP, |_, m, acc| {
        let est = lambda * m[0] + (1.0 - lambda) * u;
        acc[0] += 0.5 * (est - m[0]).powi(2) + 0.5 * (est - u).powi(2);
    })?;
    Ok(sums[0])
}

/// Exact and Monte-Carlo figures for one estimator on one task.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticsReport {
    pub exact_j: f64,
    pub estimator_mean: f64,
    pub estimator_variance: f64,
    pub closed_form_bias: f64,
    /// `None` when the behavior policy misses part of the target's support.
    pub chi_squared: Option<f64>,
    pub support_gap_mass: f64,
    pub sample_count: usize,
}

impl DiagnosticsReport {
    pub fn to_json(&self) -> String {
        JsonObject::new()
            .float("exact_J", self.exact_j)
            .float("estimator_mean", self.estimator_mean)
            .float("estimator_variance", self.estimator_variance)
            .float("closed_form_bias", self.closed_form_bias)
            .opt_float("chi_squared", self.chi_squared)
            .float("support_gap_mass", self.support_gap_mass)
            .int("sample_count", self.sample_count as i128)
            .finish()
    }
}

/// Fill a [`DiagnosticsReport`] for `kind`. Samples come from `old` for
/// `OnPolicy` and from `behavior` otherwise.
pub fn run_diagnostics<C, O, B>(
    kind: EstimatorKind,
    cur: &C,
    old: &O,
    behavior: &B,
    task: &TaskSpec,
    n_samples: usize,
    seed: u64,
) -> Result<DiagnosticsReport>
where
    C: TokenPolicy,
    O: TokenPolicy,
    B: TokenPolicy,
{
    if n_samples < 1000 {
        return Err(Error::Domain(format!("need at least 1000 samples, got {n_samples}")));
    }
    let bias = estimator_bias_exact(kind, cur, old, behavior, task)?;
    let gap = support_gap_mass(cur, behavior, task)?;
    let chi2 = match chi_squared(cur, behavior, task) {
        Ok(c) => Some(c),
        Err(Error::ZeroMass) => None,
        Err(e) => return Err(e),
    };
    let u = uniform_mass(task);
    let samples = if kind == EstimatorKind::OnPolicy {
        sample_batch(old, task, n_samples, seed, "diagnostics")
    } else {
        sample_batch(behavior, task, n_samples, seed, "diagnostics")
    };
    let values: Vec<f64> = samples
        .iter()
        .map(|s| {
            let tm = TrajectoryMasses {
                cur: traj_logprob(cur, s).exp(),
                old: traj_logprob(old, s).exp(),
                behavior: traj_logprob(behavior, s).exp(),
                uniform: u,
            };
            let (_, den) = tm.sampling_and_denominator(kind);
            let r = if task.is_valid(&s.tokens) { 1.0 } else { 0.0 };
            if den > 0.0 { tm.cur / den * r } else { 0.0 }
        })
        .collect();
    let (mean, var) = sample_variance(&values);
    Ok(DiagnosticsReport {
        exact_j: bias.exact_j,
        estimator_mean: mean,
        estimator_variance: var,
        closed_form_bias: bias.closed_form,
        chi_squared: chi2,
        support_gap_mass: gap,
        sample_count: n_samples,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{TaskKind, TaskSpec};
    use crate::policy::{PathPolicy, PolicyTable, UniformPolicy};
    use crate::rng::stream;

    fn two_outcome(probs: [f64; 2]) -> PolicyTable {
        let mut p = PolicyTable::new(2, 1);
        p.set_logits(StateKey::root(0), vec![probs[0].ln(), probs[1].ln()]);
        p
    }

    fn spec(kind: EstimatorKind) -> EstimatorSpec {
        EstimatorSpec::new(kind)
    }

    #[test]
    fn token_ratio_arithmetic() {
        let r = |k, c, o, b| spec(k).token_ratio(c, o, b, 4).unwrap().0;
        assert_eq!(r(EstimatorKind::OnPolicy, 0.4, 0.2, None), 2.0);
        assert_eq!(r(EstimatorKind::MisExact, 0.4, 0.4, Some(0.4)), 1.0);
        assert!((r(EstimatorKind::MisExact, 0.5, 0.3, Some(0.1)) - 2.5).abs() < 1e-15);
        assert!((r(EstimatorKind::MisExact, 1.0, 0.5, Some(0.0)) - 4.0).abs() < 1e-15);
        assert!((r(EstimatorKind::MisBayes, 0.25, 0.25, None) - 1.0).abs() < 1e-15);
        assert!((r(EstimatorKind::MisBayes, 0.8, 0.2, None) - 1.6 / 0.425).abs() < 1e-12);
        assert!((r(EstimatorKind::BayesIs, 0.25, 0.25, None) - 1.0).abs() < 1e-15);
        assert!((r(EstimatorKind::UnitBehavior, 0.3, 0.9, None) - 0.6 / 1.9).abs() < 1e-15);
        assert!(spec(EstimatorKind::StandardIs).token_ratio(0.1, 0.1, None, 4).is_err());
    }

    #[test]
    fn floor_and_cap() {
        let mut s = spec(EstimatorKind::StandardIs);
        assert_eq!(s.token_ratio(0.5, 0.5, Some(0.0), 4).unwrap().0, 0.5 / DEFAULT_PROB_FLOOR);
        s.ratio_cap = Some(5.0);
        assert_eq!(s.token_ratio(0.5, 0.5, Some(0.01), 4).unwrap(), (5.0, true));
        assert_eq!(s.token_ratio(0.02, 0.5, Some(0.01), 4).unwrap(), (2.0, false));
        s.ratio_cap = Some(0.5);
        assert!(s.validate().is_err());
        s.ratio_cap = None;
        s.prob_floor = 0.0;
        assert!(s.validate().is_err());
    }

    #[test]
    fn kind_names_parse() {
        for k in EstimatorKind::ALL {
            assert_eq!(k.name().parse::<EstimatorKind>().unwrap(), k);
        }
        assert_eq!("MisBayes".parse::<EstimatorKind>().unwrap(), EstimatorKind::MisBayes);
        assert!("nope".parse::<EstimatorKind>().is_err());
    }

    #[test]
    fn bayes_behavior_prob_values() {
        let s = StateKey::root(0);
        assert_eq!(bayes_behavior_prob(&UniformPolicy::new(4), 4, &s, 1), 0.25);
        let sure = PathPolicy::new(4, 0, vec![2]);
        assert_eq!(bayes_behavior_prob(&sure, 4, &s, 2), 0.625);
        assert_eq!(bayes_behavior_prob(&sure, 4, &s, 0), 0.125);
    }

    #[test]
    fn ratio_series_from_policies() {
        let task = TaskSpec::make(TaskKind::MultiPath, 4, 3, 2).unwrap();
        let cur = PolicyTable::seeded(std::slice::from_ref(&task), &mut stream(1, "a", 0), 1.0);
        let traj = crate::policy::sample_trajectory(&cur, &task, &mut stream(1, "b", 0));
        assert!(onpolicy_ratio(&cur, &cur, &traj).weights.iter().all(|&w| w == 1.0));
        let u = UniformPolicy::new(4);
        assert!(mis_ratio_bayes(&u, &u, &traj).weights.iter().all(|&w| (w - 1.0).abs() < 1e-15));
        let old = PolicyTable::seeded(std::slice::from_ref(&task), &mut stream(2, "a", 0), 1.0);
        let direct = onpolicy_ratio(&cur, &old, &traj);
        for (t, s) in traj.states().iter().enumerate() {
            let a = traj.tokens[t];
            assert!((direct.weights[t] - cur.token_prob(s, a) / old.token_prob(s, a)).abs() < 1e-12);
        }
        let m = mis_ratio_exact(&cur, &old, &u, &traj);
        assert_eq!(m.weights.len(), 3);
        assert!(m.weights.iter().all(|w| w.is_finite() && *w > 0.0));
    }

    #[test]
    fn proxy_bias_two_outcome_example() {
        let task = TaskSpec::mod_chain(2, 1, 1, 1).unwrap(); // valid = [0]
        assert_eq!(task.valid_set(), &[vec![0]]);
        let cur = two_outcome([0.5, 0.5]);
        let behavior = two_outcome([0.9, 0.1]);
        let b = estimator_bias_exact(EstimatorKind::ProxyIs, &cur, &cur, &behavior, &task).unwrap();
        assert!((b.closed_form - 0.4).abs() < 1e-12);
        assert!((b.expectation_minus_j - 0.4).abs() < 1e-12);
        assert!(proxy_is_bias_exact(&cur, &behavior, &behavior, &task).unwrap().abs() < 1e-12);
    }

    #[test]
    fn chi_squared_two_outcome_example() {
        let task = TaskSpec::mod_chain(2, 1, 1, 1).unwrap();
        let cur = two_outcome([0.5, 0.5]);
        let behavior = two_outcome([0.9, 0.1]);
        let c = chi_squared(&cur, &behavior, &task).unwrap();
        assert!((c - (0.25 / 0.9 + 0.25 / 0.1 - 1.0)).abs() < 1e-12);
        assert!(chi_squared(&cur, &cur, &task).unwrap().abs() < 1e-12);
        let zero = PathPolicy::new(2, 0, vec![1]);
        assert!(matches!(chi_squared(&cur, &zero, &task), Err(Error::ZeroMass)));
    }

    #[test]
    fn standard_is_with_matching_behavior_is_plain_mean() {
        let task = TaskSpec::mod_chain(3, 2, 0, 1).unwrap();
        let p = PolicyTable::seeded(std::slice::from_ref(&task), &mut stream(3, "a", 0), 1.0);
        let samples = sample_batch(&p, &task, 500, 4, "x");
        let mc = samples.iter().map(|s| s.reward).sum::<f64>() / 500.0;
        assert!((standard_is_value(&p, &p, &task, &samples).unwrap() - mc).abs() < 1e-12);
        assert!(standard_is_value(&p, &p, &task, &[]).is_err());
    }

    #[test]
    fn sample_batch_is_deterministic_and_sized() {
        let task = TaskSpec::mod_chain(3, 2, 0, 1).unwrap();
        let a = sample_batch(&UniformPolicy::new(3), &task, 5000, 1, "x");
        let b = sample_batch(&UniformPolicy::new(3), &task, 5000, 1, "x");
        assert_eq!(a.len(), 5000);
        assert_eq!(a, b);
    }

    #[test]
    fn identical_policies_give_clean_report() {
        let task = TaskSpec::make(TaskKind::MultiPath, 3, 3, 5).unwrap();
        let p = PolicyTable::seeded(std::slice::from_ref(&task), &mut stream(3, "a", 0), 1.0);
        let r = run_diagnostics(EstimatorKind::StandardIs, &p, &p, &p, &task, 2000, 1).unwrap();
        assert!(r.closed_form_bias.abs() < 1e-12);
        assert!(r.chi_squared.unwrap().abs() < 1e-12);
        assert_eq!(r.support_gap_mass, 0.0);
        let r2 = run_diagnostics(EstimatorKind::StandardIs, &p, &p, &p, &task, 2000, 2).unwrap();
        assert_eq!(r.exact_j.to_bits(), r2.exact_j.to_bits());
        assert_eq!(r.closed_form_bias.to_bits(), r2.closed_form_bias.to_bits());
        assert!(run_diagnostics(EstimatorKind::StandardIs, &p, &p, &p, &task, 10, 1).is_err());
    }

    #[test]
    fn report_json_has_exact_field_names() {
        let r = DiagnosticsReport {
            exact_j: 0.5,
            estimator_mean: 0.25,
            estimator_variance: 0.1,
            closed_form_bias: 0.0,
            chi_squared: None,
            support_gap_mass: 0.5,
            sample_count: 1000,
        };
        let v: serde_json::Value = serde_json::from_str(&r.to_json()).unwrap();
        let keys: Vec<&String> = v.as_object().unwrap().keys().collect();
        let mut expected = vec![
            "exact_J",
            "estimator_mean",
            "estimator_variance",
            "closed_form_bias",
            "chi_squared",
            "support_gap_mass",
            "sample_count",
        ];
        expected.sort();
        let mut got: Vec<&str> = keys.iter().map(|s| s.as_str()).collect();
        got.sort();
        assert_eq!(got, expected);
    }

    #[test]
    fn weight_bound_with_old_equal_cur() {
        let task = TaskSpec::make(TaskKind::MultiPath, 4, 2, 3).unwrap();
        let u = UniformPolicy::new(4);
        let point = PathPolicy::new(4, 0, task.valid_set()[0].clone());
        let b = mis_weight_bound_check(&u, &u, &point, &task, 0.5).unwrap();
        assert!((b.max_token_weight - 2.0).abs() < 1e-12);
        let same = mis_weight_bound_check(&u, &u, &u, &task, 0.5).unwrap();
        assert!((same.max_token_weight - 1.0).abs() < 1e-15);
        assert!((same.max_trajectory_weight - 1.0).abs() < 1e-15);
        // cur far from old can break the bound
        let far = PathPolicy::new(4, 0, vec![1, 1]);
        assert!(mis_weight_bound_check(&far, &u, &u, &task, 0.5).is_err());
        assert!(mis_weight_bound_check(&u, &u, &u, &task, 0.0).is_err());
    }
}
