//! Hybrid training loop: group-normalised policy gradient on the model's
//! own samples plus importance-weighted learning from demonstrations.
//!
//! Every step builds `batch_prompts` groups. Each group holds
//! `group_size - demos_per_group` samples from the frozen snapshot and
//! `demos_per_group` demonstrations. The objective per group is
//!
//! ```text
//! (1/G) * [ sum_{own i,t} clip(r_it, A_i) + sum_{demo i,t} w_it * A_i * C_it ]
//! ```
//!
//! where `r` is the snapshot ratio, `w` the configured external ratio and
//! `C = (1 - p)^gamma` the focal weight. Advantages, focal weights and ratio
//! denominators are frozen when the step is prepared; only the numerator
//! `p_cur` carries gradient.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use crate::advantage::{exploration_advantage, RolloutGroup, Source, DEFAULT_ADV_EPS};
use crate::config::KvConfig;
use crate::env::{exact_success, Token, TaskSpec, Trajectory};
use crate::error::{Error, Result};
use crate::estimators::{sample_batch, EstimatorKind, EstimatorSpec};
use crate::fmt::JsonObject;
use crate::par;
use crate::policy::{entropy, mean_token_entropy, sample_trajectory, softmax_into, GradientTable, PolicyTable, StateKey, TokenPolicy, MAX_VOCAB};
use crate::rng::{stream, Stream};

/// Named random streams drawn from the master seed.
pub const STREAM_NAMES: [&str; 3] = ["group", "eval", "demo"];

const EXACT_EVAL_LIMIT: u64 = 1_000_000;
const MC_EVAL_SAMPLES: usize = 4096;
const DEMO_ATTEMPTS: usize = 1000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Optimizer {
    Sgd,
    AdamLike,
}

impl fmt::Display for Optimizer {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Optimizer::Sgd => "sgd",
            Optimizer::AdamLike => "adam",
        })
    }
}

impl FromStr for Optimizer {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "sgd" => Ok(Optimizer::Sgd),
            "adam" | "adamlike" | "adam_like" => Ok(Optimizer::AdamLike),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainerConfig {
    pub group_size: usize,
    pub demos_per_group: usize,
    pub batch_prompts: usize,
    pub lr: f64,
    pub optimizer: Optimizer,
    pub gamma: f64,
    pub estimator: EstimatorSpec,
    /// PPO clip range on the model's own samples.
    pub internal_clip_eps: Option<f64>,
    /// Same gate on demonstrations; off unless reproducing clipped baselines.
    pub external_clip: Option<f64>,
    pub kl_beta: f64,
    pub snapshot_every: usize,
    pub steps: usize,
    pub master_seed: u64,
    pub adv_eps: f64,
}

impl Default for TrainerConfig {
    fn default() -> Self {
        TrainerConfig {
            group_size: 8,
            demos_per_group: 1,
            batch_prompts: 32,
            lr: 0.05,
            optimizer: Optimizer::Sgd,
            gamma: 0.5,
            estimator: EstimatorSpec::new(EstimatorKind::MisBayes),
            internal_clip_eps: Some(0.2),
            external_clip: None,
            kl_beta: 0.0,
            snapshot_every: 1,
            steps: 100,
            master_seed: 0,
            adv_eps: DEFAULT_ADV_EPS,
        }
    }
}

impl TrainerConfig {
    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Domain(m));
        if self.group_size < 2 {
            return bad(format!("group_size must be at least 2, got {}", self.group_size));
        }
        if self.demos_per_group >= self.group_size {
            return bad(format!("demos_per_group {} must be below group_size {}", self.demos_per_group, self.group_size));
        }
        if self.batch_prompts == 0 {
            return bad("batch_prompts must be positive".into());
        }
        if !(self.lr >= 0.0 && self.lr.is_finite()) {
            return bad(format!("lr must be non-negative, got {}", self.lr));
        }
        if !(self.gamma >= 0.0) {
            return bad(format!("gamma must be non-negative, got {}", self.gamma));
        }
        for eps in [self.internal_clip_eps, self.external_clip].into_iter().flatten() {
            if !(eps > 0.0 && eps < 1.0) {
                return bad(format!("clip range must lie in (0, 1), got {eps}"));
            }
        }
        if !(self.kl_beta >= 0.0) {
            return bad(format!("kl_beta must be non-negative, got {}", self.kl_beta));
        }
        if self.snapshot_every == 0 {
            return bad("snapshot_every must be positive".into());
        }
        if !(self.adv_eps > 0.0) {
            return bad("adv_eps must be positive".into());
        }
        self.estimator.validate()
    }

    /// Read keys under `prefix` (for example `trainer.`), starting from the
    /// defaults.
    pub fn from_kv(kv: &mut KvConfig, prefix: &str) -> Result<Self> {
        let d = TrainerConfig::default();
        let k = |name: &str| format!("{prefix}{name}");
        let mut estimator = EstimatorSpec::new(kv.take_or(&k("estimator"), d.estimator.kind)?);
        estimator.prob_floor = kv.take_or(&k("prob_floor"), d.estimator.prob_floor)?;
        estimator.ratio_cap = kv.take_optional(&k("ratio_cap"))?.unwrap_or(d.estimator.ratio_cap);
        let cfg = TrainerConfig {
            group_size: kv.take_or(&k("group_size"), d.group_size)?,
            demos_per_group: kv.take_or(&k("demos_per_group"), d.demos_per_group)?,
            batch_prompts: kv.take_or(&k("batch_prompts"), d.batch_prompts)?,
            lr: kv.take_or(&k("lr"), d.lr)?,
            optimizer: kv.take_or(&k("optimizer"), d.optimizer)?,
            gamma: kv.take_or(&k("gamma"), d.gamma)?,
            estimator,
            internal_clip_eps: kv.take_optional(&k("internal_clip_eps"))?.unwrap_or(d.internal_clip_eps),
            external_clip: kv.take_optional(&k("external_clip"))?.unwrap_or(d.external_clip),
            kl_beta: kv.take_or(&k("kl_beta"), d.kl_beta)?,
            snapshot_every: kv.take_or(&k("snapshot_every"), d.snapshot_every)?,
            steps: kv.take_or(&k("steps"), d.steps)?,
            master_seed: kv.take_or(&k("master_seed"), d.master_seed)?,
            adv_eps: kv.take_or(&k("adv_eps"), d.adv_eps)?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn to_kv(&self, prefix: &str) -> String {
        let opt = |o: Option<f64>| o.map_or("none".to_string(), |v| v.to_string());
        [
            ("group_size", self.group_size.to_string()),
            ("demos_per_group", self.demos_per_group.to_string()),
            ("batch_prompts", self.batch_prompts.to_string()),
            ("lr", self.lr.to_string()),
            ("optimizer", self.optimizer.to_string()),
            ("gamma", self.gamma.to_string()),
            ("estimator", self.estimator.kind.to_string()),
            ("prob_floor", self.estimator.prob_floor.to_string()),
            ("ratio_cap", opt(self.estimator.ratio_cap)),
            ("internal_clip_eps", opt(self.internal_clip_eps)),
            ("external_clip", opt(self.external_clip)),
            ("kl_beta", self.kl_beta.to_string()),
            ("snapshot_every", self.snapshot_every.to_string()),
            ("steps", self.steps.to_string()),
            ("master_seed", self.master_seed.to_string()),
            ("adv_eps", self.adv_eps.to_string()),
        ]
        .iter()
        .map(|(k, v)| format!("{prefix}{k} = {v}\n"))
        .collect()
    }
}

/// Ablation rows. `Full` is the default configuration.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    Full,
    ProxyIs,
    StandardIs,
    PolicyEstimation,
    MinusExplore,
    MinusMis,
    OracleProbOne,
}

impl Variant {
    pub const ALL: [Variant; 7] = [
        Variant::Full,
        Variant::ProxyIs,
        Variant::StandardIs,
        Variant::PolicyEstimation,
        Variant::MinusExplore,
        Variant::MinusMis,
        Variant::OracleProbOne,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::Full => "full",
            Variant::ProxyIs => "proxy_is",
            Variant::StandardIs => "standard_is",
            Variant::PolicyEstimation => "policy_estimation",
            Variant::MinusExplore => "minus_explore",
            Variant::MinusMis => "minus_MIS",
            Variant::OracleProbOne => "oracle_prob_one",
        }
    }

    /// Rewrite the fields this row changes, leaving the rest of `base`.
    pub fn apply(self, base: TrainerConfig) -> TrainerConfig {
        let mut cfg = base;
        let with_kind = |k| EstimatorSpec { kind: k, ..base.estimator };
        match self {
            Variant::Full => cfg.estimator = with_kind(EstimatorKind::MisBayes),
            Variant::ProxyIs => cfg.estimator = with_kind(EstimatorKind::ProxyIs),
            Variant::StandardIs => cfg.estimator = with_kind(EstimatorKind::StandardIs),
            Variant::PolicyEstimation => cfg.estimator = with_kind(EstimatorKind::BayesIs),
            Variant::MinusExplore => cfg.gamma = 0.0,
            Variant::MinusMis => cfg.demos_per_group = 0,
            Variant::OracleProbOne => cfg.estimator = with_kind(EstimatorKind::UnitBehavior),
        }
        cfg
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let norm = s.to_ascii_lowercase().replace('-', "_");
        Self::ALL
            .into_iter()
            .find(|v| v.name().to_ascii_lowercase() == norm)
            .ok_or_else(|| Error::UnknownVariant(s.to_string()))
    }
}

pub fn make_ablation_config(variant: &str) -> Result<TrainerConfig> {
    Ok(variant.parse::<Variant>()?.apply(TrainerConfig::default()))
}

/// Where demonstrations come from.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum DemoSource {
    /// Softmax over valid continuations with logit `1 / temperature`, zero
    /// elsewhere; samples that fail verification are redrawn.
    ExpertPolicy { temperature: f64 },
    /// Uniform over the task's valid sequences.
    FixedCorrectSet,
}

impl Default for DemoSource {
    fn default() -> Self {
        DemoSource::ExpertPolicy { temperature: 0.1 }
    }
}

impl DemoSource {
    pub fn validate(&self) -> Result<()> {
        match *self {
            DemoSource::ExpertPolicy { temperature } if !(temperature > 0.0) => {
                Err(Error::Domain(format!("expert temperature must be positive, got {temperature}")))
            }
            _ => Ok(()),
        }
    }

    /// The behavior policy this source samples from on `task`.
    pub fn policy<'a>(&self, task: &'a TaskSpec) -> DemoPolicy<'a> {
        DemoPolicy { task, source: *self }
    }

    /// One verified demonstration with its behavior probabilities cached.
    pub fn draw(&self, task: &TaskSpec, rng: &mut Stream) -> Result<Trajectory> {
        let policy = self.policy(task);
        for _ in 0..DEMO_ATTEMPTS {
            let t = sample_trajectory(&policy, task, rng);
            if task.verify(&t.tokens)? == 1.0 {
                return Ok(t);
            }
        }
        Err(Error::DemoVerification { attempts: DEMO_ATTEMPTS })
    }
}

/// Next-token distribution of a [`DemoSource`] on one task. Off the valid
/// prefixes it is uniform.
#[derive(Debug, Clone, Copy)]
pub struct DemoPolicy<'a> {
    task: &'a TaskSpec,
    source: DemoSource,
}

impl TokenPolicy for DemoPolicy<'_> {
    fn vocab(&self) -> usize {
        self.task.vocab()
    }

    fn probs_into(&self, state: &StateKey, out: &mut [f64]) {
        let v = self.task.vocab();
        let prefix = state.prefix();
        let valid = if state.prompt() == self.task.prompt_id() {
            self.task.valid_set().iter().filter(|s| s.starts_with(&prefix)).collect::<Vec<_>>()
        } else {
            Vec::new()
        };
        if valid.is_empty() {
            out.fill(1.0 / v as f64);
            return;
        }
        let depth = prefix.len();
        match self.source {
            DemoSource::FixedCorrectSet => {
                out.fill(0.0);
                for s in &valid {
                    out[s[depth] as usize] += 1.0;
                }
                let n = valid.len() as f64;
                out.iter_mut().for_each(|p| *p /= n);
            }
            DemoSource::ExpertPolicy { temperature } => {
                let mut logits = [0.0; MAX_VOCAB];
                for s in &valid {
                    logits[s[depth] as usize] = 1.0 / temperature;
                }
                softmax_into(&logits[..v], out);
            }
        }
    }
}

/// Own samples from `old`, then demonstrations, rewards from the verifier.
pub fn build_group<O: TokenPolicy + ?Sized>(
    old: &O,
    task: &TaskSpec,
    demos: &DemoSource,
    cfg: &TrainerConfig,
    rng: &mut Stream,
) -> Result<RolloutGroup> {
    let own = cfg.group_size - cfg.demos_per_group;
    let mut members = Vec::with_capacity(cfg.group_size);
    let mut sources = Vec::with_capacity(cfg.group_size);
    for _ in 0..own {
        members.push(sample_trajectory(old, task, rng));
        sources.push(Source::OnPolicy);
    }
    for _ in 0..cfg.demos_per_group {
        members.push(demos.draw(task, rng)?);
        sources.push(Source::External);
    }
    RolloutGroup::new(task.clone(), members, sources, cfg.demos_per_group)
}

/// One token's contribution with everything but `p_cur` frozen.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TokenTerm {
    pub state: StateKey,
    pub token: Token,
    /// `ratio = p_cur / denominator`.
    pub denominator: f64,
    pub advantage: f64,
    pub clip_eps: Option<f64>,
    pub ratio_cap: Option<f64>,
}

impl TokenTerm {
    /// Objective value and `d value / d log p_cur`.
    fn eval(&self, p_cur: f64) -> (f64, f64) {
        let mut r = p_cur / self.denominator;
        let mut live = true;
        if let Some(cap) = self.ratio_cap {
            if r > cap {
                r = cap;
                live = false;
            }
        }
        let a = self.advantage;
        if let Some(eps) = self.clip_eps {
            let clipped = r.clamp(1.0 - eps, 1.0 + eps);
            if clipped * a < r * a {
                return (clipped * a, 0.0);
            }
        }
        (r * a, if live { r * a } else { 0.0 })
    }
}

/// Frozen per-token terms of one group.
#[derive(Debug, Clone, PartialEq)]
pub struct GroupSurrogate {
    pub internal: Vec<TokenTerm>,
    pub external: Vec<TokenTerm>,
    /// `1 / G`.
    pub scale: f64,
    pub max_external_ratio: f64,
}

fn sum_terms<P: TokenPolicy + ?Sized>(terms: &[TokenTerm], cur: &P) -> f64 {
    terms.iter().map(|t| t.eval(cur.token_prob(&t.state, t.token)).0).sum()
}

impl GroupSurrogate {
    pub fn build<C, O>(cur: &C, old: &O, group: &RolloutGroup, cfg: &TrainerConfig) -> Result<Self>
    where
        C: TokenPolicy + ?Sized,
        O: TokenPolicy + ?Sized,
    {
        let adv = exploration_advantage(group, cur, cfg.gamma, cfg.adv_eps)?;
        let v = group.task.vocab();
        let own_spec = EstimatorSpec { kind: EstimatorKind::OnPolicy, ..cfg.estimator };
        let mut internal = Vec::new();
        for (i, traj) in group.on_policy() {
            for (s, &a) in traj.states().iter().zip(&traj.tokens) {
                internal.push(TokenTerm {
                    state: *s,
                    token: a,
                    denominator: own_spec.effective_denominator(old.token_prob(s, a), None, v)?,
                    advantage: adv.scalar[i],
                    clip_eps: cfg.internal_clip_eps,
                    ratio_cap: None,
                });
            }
        }
        let mut external = Vec::new();
        let mut max_ratio: f64 = 0.0;
        for (i, traj) in group.external() {
            let token_adv = adv.token[i].as_ref().expect("external members carry token advantages");
            for (t, (s, &a)) in traj.states().iter().zip(&traj.tokens).enumerate() {
                let behavior = traj.sampling_probs.get(t).copied();
                let d = cfg.estimator.effective_denominator(old.token_prob(s, a), behavior, v)?;
                max_ratio = max_ratio.max(cur.token_prob(s, a) / d);
                external.push(TokenTerm {
                    state: *s,
                    token: a,
                    denominator: d,
                    advantage: token_adv[t],
                    clip_eps: cfg.external_clip,
                    ratio_cap: cfg.estimator.ratio_cap,
                });
            }
        }
        Ok(GroupSurrogate { internal, external, scale: 1.0 / group.len() as f64, max_external_ratio: max_ratio })
    }

    /// `(internal, external)` objective values at `cur`.
    pub fn value<P: TokenPolicy + ?Sized>(&self, cur: &P) -> (f64, f64) {
        (self.scale * sum_terms(&self.internal, cur), self.scale * sum_terms(&self.external, cur))
    }

    fn accumulate<P: TokenPolicy + ?Sized>(terms: &[TokenTerm], cur: &P, scale: f64, grad: &mut GradientTable) {
        let v = cur.vocab();
        let mut probs = [0.0; MAX_VOCAB];
        for t in terms {
            cur.probs_into(&t.state, &mut probs[..v]);
            let (_, dlog) = t.eval(probs[t.token as usize]);
            grad.add_score(t.state, t.token, &probs[..v], dlog * scale);
        }
    }

    pub fn internal_grad<P: TokenPolicy + ?Sized>(&self, cur: &P) -> GradientTable {
        let mut g = GradientTable::new(cur.vocab());
        Self::accumulate(&self.internal, cur, self.scale, &mut g);
        g
    }

    pub fn external_grad<P: TokenPolicy + ?Sized>(&self, cur: &P) -> GradientTable {
        let mut g = GradientTable::new(cur.vocab());
        Self::accumulate(&self.external, cur, self.scale, &mut g);
        g
    }

    pub fn gradient<P: TokenPolicy + ?Sized>(&self, cur: &P) -> GradientTable {
        let mut g = GradientTable::new(cur.vocab());
        Self::accumulate(&self.internal, cur, self.scale, &mut g);
        Self::accumulate(&self.external, cur, self.scale, &mut g);
        g
    }
}

/// Gradient and objective of the clipped ratio term on the group's own
/// samples.
pub fn internal_term_grad<C, O>(cur: &C, old: &O, group: &RolloutGroup, cfg: &TrainerConfig) -> Result<(GradientTable, f64)>
where
    C: TokenPolicy + ?Sized,
    O: TokenPolicy + ?Sized,
{
    let s = GroupSurrogate::build(cur, old, group, cfg)?;
    Ok((s.internal_grad(cur), s.value(cur).0))
}

/// Gradient and objective of the weighted demonstration term.
pub fn external_term_grad<C, O>(cur: &C, old: &O, group: &RolloutGroup, cfg: &TrainerConfig) -> Result<(GradientTable, f64)>
where
    C: TokenPolicy + ?Sized,
    O: TokenPolicy + ?Sized,
{
    let s = GroupSurrogate::build(cur, old, group, cfg)?;
    Ok((s.external_grad(cur), s.value(cur).1))
}

/// `sum_s KL(cur(.|s) || reference(.|s))` and its logit gradient, over the
/// given states.
pub fn kl_penalty<C, R>(cur: &C, reference: &R, states: &[StateKey]) -> (f64, GradientTable)
where
    C: TokenPolicy + ?Sized,
    R: TokenPolicy + ?Sized,
{
    let v = cur.vocab();
    let (mut p, mut q) = ([0.0; MAX_VOCAB], [0.0; MAX_VOCAB]);
    let mut total = 0.0;
    let mut grad = GradientTable::new(v);
    for s in states {
        cur.probs_into(s, &mut p[..v]);
        reference.probs_into(s, &mut q[..v]);
        let log_ratio: Vec<f64> = (0..v)
            .map(|a| if p[a] > 0.0 { (p[a] / q[a].max(f64::MIN_POSITIVE)).ln() } else { 0.0 })
            .collect();
        let kl: f64 = (0..v).map(|a| p[a] * log_ratio[a]).sum();
        total += kl;
        let row = grad.row_mut(*s);
        for a in 0..v {
            row[a] += p[a] * (log_ratio[a] - kl);
        }
    }
    (total, grad)
}

/// Everything a step needs once sampling is done; the objective is a pure
/// function of the current logits.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSurrogate {
    pub groups: Vec<GroupSurrogate>,
    /// States the KL penalty is evaluated on, per group, weighted `1 / G`.
    pub kl_states: Vec<Vec<StateKey>>,
    pub kl_beta: f64,
}

impl StepSurrogate {
    /// Mean over groups of the group objective, minus the KL penalty.
    pub fn value<C, R>(&self, cur: &C, reference: &R) -> f64
    where
        C: TokenPolicy + ?Sized,
        R: TokenPolicy + ?Sized,
    {
        let n = self.groups.len() as f64;
        let mut total = 0.0;
        for (g, states) in self.groups.iter().zip(&self.kl_states) {
            let (i, e) = g.value(cur);
            total += (i + e) / n;
            if self.kl_beta > 0.0 {
                total -= self.kl_beta * g.scale * kl_penalty(cur, reference, states).0 / n;
            }
        }
        total
    }

    pub fn gradient<C, R>(&self, cur: &C, reference: &R) -> GradientTable
    where
        C: TokenPolicy + ?Sized,
        R: TokenPolicy + ?Sized,
    {
        let parts = par::map_slice(&self.groups, |g| g.gradient(cur));
        let n = self.groups.len() as f64;
        let mut total = GradientTable::new(cur.vocab());
        for (i, g) in parts.iter().enumerate() {
            total.add_scaled(g, 1.0 / n);
            if self.kl_beta > 0.0 {
                let (_, kg) = kl_penalty(cur, reference, &self.kl_states[i]);
                total.add_scaled(&kg, -self.kl_beta * self.groups[i].scale / n);
            }
        }
        total
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepRecord {
    pub step: usize,
    /// Mean verifier reward of the model's own samples.
    pub mean_reward: f64,
    /// Exact success probability of the updated policy, averaged over the
    /// training prompts.
    pub test_accuracy: f64,
    /// Mean next-token entropy over states visited by the model's own
    /// samples, before the update.
    pub mean_token_entropy: f64,
    pub internal_loss: f64,
    pub external_loss: f64,
    pub max_mis_weight: f64,
    pub grad_norm: f64,
}

impl StepRecord {
    pub fn to_json(&self) -> String {
        JsonObject::new()
            .int("step", self.step as i128)
            .float("mean_reward", self.mean_reward)
            .float("test_accuracy", self.test_accuracy)
            .float("mean_token_entropy", self.mean_token_entropy)
            .float("internal_loss", self.internal_loss)
            .float("external_loss", self.external_loss)
            .float("max_mis_weight", self.max_mis_weight)
            .float("grad_norm", self.grad_norm)
            .finish()
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
struct AdamState {
    m: BTreeMap<StateKey, Vec<f64>>,
    v: BTreeMap<StateKey, Vec<f64>>,
    t: i32,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    fn direction(&mut self, grad: &GradientTable) -> GradientTable {
        self.t += 1;
        let c1 = 1.0 - ADAM_BETA1.powi(self.t);
        let c2 = 1.0 - ADAM_BETA2.powi(self.t);
        let v = grad.vocab();
        let mut out = grad.clone();
        for (s, g) in out.entries_mut() {
            let m = self.m.entry(*s).or_insert_with(|| vec![0.0; v]);
            let sq = self.v.entry(*s).or_insert_with(|| vec![0.0; v]);
            for a in 0..v {
                m[a] = ADAM_BETA1 * m[a] + (1.0 - ADAM_BETA1) * g[a];
                sq[a] = ADAM_BETA2 * sq[a] + (1.0 - ADAM_BETA2) * g[a] * g[a];
                g[a] = (m[a] / c1) / ((sq[a] / c2).sqrt() + ADAM_EPS);
            }
        }
        out
    }
}

/// Mutable training state: current policy, frozen snapshot, reference for
/// the KL penalty, prompts and demonstration source.
#[derive(Debug, Clone)]
pub struct TrainerState {
    pub cur: PolicyTable,
    pub old: PolicyTable,
    pub reference: PolicyTable,
    pub prompts: Vec<TaskSpec>,
    pub demos: DemoSource,
    pub step: usize,
    adam: AdamState,
}

/// What the sampling phase of a step produced.
#[derive(Debug, Clone)]
pub struct PreparedStep {
    pub groups: Vec<RolloutGroup>,
    pub surrogate: StepSurrogate,
}

impl TrainerState {
    pub fn new(initial: PolicyTable, prompts: Vec<TaskSpec>, demos: DemoSource) -> Result<Self> {
        if prompts.is_empty() {
            return Err(Error::Empty("prompt list"));
        }
        demos.validate()?;
        for t in &prompts {
            if t.vocab() != initial.vocab() || t.horizon() != initial.horizon() {
                return Err(Error::InvalidDimension(format!(
                    "task V={} H={} does not match policy V={} H={}",
                    t.vocab(),
                    t.horizon(),
                    initial.vocab(),
                    initial.horizon()
                )));
            }
        }
        Ok(TrainerState {
            old: initial.snapshot(),
            reference: initial.snapshot(),
            cur: initial,
            prompts,
            demos,
            step: 0,
            adam: AdamState::default(),
        })
    }

    /// Prompt used by group `j` of step `step`: cycles through the list.
    pub fn prompt_for(&self, step: usize, j: usize, batch: usize) -> &TaskSpec {
        &self.prompts[(step * batch + j) % self.prompts.len()]
    }

    /// Sample every group of the current step and freeze the surrogate.
    pub fn prepare_step(&self, cfg: &TrainerConfig) -> Result<PreparedStep> {
        let step = self.step;
        let built = par::map_range(cfg.batch_prompts, |j| -> Result<(RolloutGroup, GroupSurrogate)> {
            let task = self.prompt_for(step, j, cfg.batch_prompts);
            let mut rng = stream(cfg.master_seed, "group", ((step as u64) << 32) | j as u64);
            let group = build_group(&self.old, task, &self.demos, cfg, &mut rng)?;
            let surrogate = GroupSurrogate::build(&self.cur, &self.old, &group, cfg)?;
            Ok((group, surrogate))
        });
        let mut groups = Vec::with_capacity(built.len());
        let mut surrogates = Vec::with_capacity(built.len());
        for b in built {
            let (g, s) = b?;
            groups.push(g);
            surrogates.push(s);
        }
        let kl_states = groups
            .iter()
            .map(|g| g.on_policy().flat_map(|(_, t)| t.states()).collect())
            .collect();
        Ok(PreparedStep { groups, surrogate: StepSurrogate { groups: surrogates, kl_states, kl_beta: cfg.kl_beta } })
    }

    /// One optimizer update.
    pub fn train_step(&mut self, cfg: &TrainerConfig) -> Result<StepRecord> {
        let prepared = self.prepare_step(cfg)?;
        let own: Vec<Trajectory> = prepared
            .groups
            .iter()
            .flat_map(|g| g.on_policy().map(|(_, t)| t.clone()))
            .collect();
        let mean_reward = own.iter().map(|t| t.reward).sum::<f64>() / own.len() as f64;
        let entropy_before = mean_token_entropy(&self.cur, &own)?;
        let n = prepared.surrogate.groups.len() as f64;
        let (mut internal_loss, mut external_loss, mut max_w) = (0.0, 0.0, 0.0f64);
        for g in &prepared.surrogate.groups {
            let (i, e) = g.value(&self.cur);
            internal_loss += i / n;
            external_loss += e / n;
            max_w = max_w.max(g.max_external_ratio);
        }
        let grad = prepared.surrogate.gradient(&self.cur, &self.reference);
        if !grad.is_finite() {
            return Err(Error::Domain(format!("non-finite gradient at step {}", self.step)));
        }
        match cfg.optimizer {
            Optimizer::Sgd => self.cur.apply(&grad, cfg.lr),
            Optimizer::AdamLike => {
                let dir = self.adam.direction(&grad);
                self.cur.apply(&dir, cfg.lr);
            }
        }
        self.step += 1;
        if self.step.is_multiple_of(cfg.snapshot_every) {
            self.old = self.cur.snapshot();
        }
        Ok(StepRecord {
            step: self.step - 1,
            mean_reward,
            test_accuracy: self.accuracy(cfg.master_seed)?,
            mean_token_entropy: entropy_before,
            internal_loss,
            external_loss,
            max_mis_weight: max_w,
            grad_norm: grad.norm(),
        })
    }

    /// Success probability of `cur` averaged over the prompts; exact when
    /// the space is small enough to enumerate.
    pub fn accuracy(&self, seed: u64) -> Result<f64> {
        let vals = par::map_slice(&self.prompts, |t| {
            if t.trajectory_count() <= EXACT_EVAL_LIMIT {
                exact_success(t, &self.cur)
            } else {
                let s = sample_batch(&self.cur, t, MC_EVAL_SAMPLES, seed ^ self.step as u64, "eval");
                Ok(s.iter().map(|x| x.reward).sum::<f64>() / s.len() as f64)
            }
        });
        let vals = vals.into_iter().collect::<Result<Vec<f64>>>()?;
        Ok(vals.iter().sum::<f64>() / vals.len() as f64)
    }

    /// Mean next-token entropy of `cur` over every state of every prompt,
    /// weighted by how often `cur` visits it.
    pub fn visited_entropy(&self) -> Result<f64> {
        let mut total = 0.0;
        for task in &self.prompts {
            let v = task.vocab();
            let h = task.horizon() as f64;
            let cur = &self.cur;
            total += crate::env::enumerate_sums(task, &[cur as &dyn TokenPolicy], 1, crate::env::DEFAULT_ENUMERATION_CAP, |seq, m, acc| {
                let mut probs = [0.0; MAX_VOCAB];
                let mut state = StateKey::root(task.prompt_id());
                let mut e = 0.0;
                for &t in seq {
                    cur.probs_into(&state, &mut probs[..v]);
                    e += entropy(&probs[..v]);
                    state = state.child(t);
                }
                acc[0] += m[0] * e / h;
            })?[0];
        }
        Ok(total / self.prompts.len() as f64)
    }
}

/// Run `cfg.steps` updates, handing each record to `on_step`.
pub fn train<F>(state: &mut TrainerState, cfg: &TrainerConfig, mut on_step: F) -> Result<Vec<StepRecord>>
where
    F: FnMut(&StepRecord, &TrainerState) -> Result<()>,
{
    cfg.validate()?;
    let mut out = Vec::with_capacity(cfg.steps);
    for _ in 0..cfg.steps {
        let rec = state.train_step(cfg)?;
        on_step(&rec, state)?;
        out.push(rec);
    }
    Ok(out)
}
