//! Tabular softmax sequence policies.
//!
//! A [`PolicyTable`] holds one logit vector per exact prefix state. States
//! that were never written read as all-zero logits, i.e. the uniform
//! distribution, so a fresh table is the uniform "base model". Because the
//! parameterisation is tabular, trajectory probabilities and score
//! functions are exact, which is what lets the estimator identities be
//! checked to machine precision.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::env::{TaskSpec, Token, Trajectory};
use crate::error::{Error, Result};
use crate::fmt::f17;
use crate::rng::Stream;

pub const MAX_VOCAB: usize = 16;
pub const MAX_HORIZON: usize = 8;

/// A prefix state: prompt id plus the tokens emitted so far.
///
/// Tokens are packed four bits each, so keys are `Copy` and order first by
/// prompt, then by prefix length, then by the packed prefix.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct StateKey {
    prompt: u32,
    len: u8,
    packed: u32,
}

impl StateKey {
    pub fn root(prompt: u32) -> Self {
        StateKey { prompt, len: 0, packed: 0 }
    }

    pub fn from_prefix(prompt: u32, prefix: &[Token]) -> Self {
        prefix.iter().fold(Self::root(prompt), |s, &t| s.child(t))
    }

    pub fn child(self, token: Token) -> Self {
        debug_assert!((token as usize) < MAX_VOCAB);
        debug_assert!((self.len as usize) < MAX_HORIZON);
        StateKey {
            prompt: self.prompt,
            len: self.len + 1,
            packed: self.packed | (u32::from(token) << (4 * u32::from(self.len))),
        }
    }

    pub fn prompt(&self) -> u32 {
        self.prompt
    }

    pub fn depth(&self) -> usize {
        self.len as usize
    }

    pub fn prefix(&self) -> Vec<Token> {
        (0..self.len)
            .map(|i| ((self.packed >> (4 * u32::from(i))) & 0xf) as Token)
            .collect()
    }
}

impl fmt::Display for StateKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:", self.prompt)?;
        for (i, t) in self.prefix().iter().enumerate() {
            if i > 0 {
                f.write_str(".")?;
            }
            write!(f, "{t}")?;
        }
        Ok(())
    }
}

impl FromStr for StateKey {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        let (prompt, rest) = s.split_once(':').ok_or_else(|| format!("missing ':' in state key `{s}`"))?;
        let prompt: u32 = prompt.parse().map_err(|_| format!("bad prompt id in `{s}`"))?;
        let mut key = StateKey::root(prompt);
        if !rest.is_empty() {
            for tok in rest.split('.') {
                let t: usize = tok.parse().map_err(|_| format!("bad token `{tok}` in `{s}`"))?;
                if t >= MAX_VOCAB || key.depth() >= MAX_HORIZON {
                    return Err(format!("state key `{s}` out of range"));
                }
                key = key.child(t as Token);
            }
        }
        Ok(key)
    }
}

/// Anything that assigns a next-token distribution to every prefix state.
pub trait TokenPolicy: Sync {
    fn vocab(&self) -> usize;

    /// Write the next-token distribution at `state` into `out` (length `vocab`).
    fn probs_into(&self, state: &StateKey, out: &mut [f64]);

    fn token_prob(&self, state: &StateKey, token: Token) -> f64 {
        let mut buf = [0.0; MAX_VOCAB];
        let v = self.vocab();
        self.probs_into(state, &mut buf[..v]);
        buf[token as usize]
    }

    fn probs(&self, state: &StateKey) -> Vec<f64> {
        let mut out = vec![0.0; self.vocab()];
        self.probs_into(state, &mut out);
        out
    }
}

/// Max-shifted softmax.
pub fn softmax_into(logits: &[f64], out: &mut [f64]) {
    let max = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for (o, &l) in out.iter_mut().zip(logits) {
        *o = (l - max).exp();
        total += *o;
    }
    for o in out.iter_mut() {
        *o /= total;
    }
}

pub fn entropy(probs: &[f64]) -> f64 {
    -probs
        .iter()
        .filter(|&&p| p > 0.0)
        .map(|&p| p * p.ln())
        .sum::<f64>()
}

/// Uniform next-token distribution at every state.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct UniformPolicy {
    vocab: usize,
}

impl UniformPolicy {
    pub fn new(vocab: usize) -> Self {
        UniformPolicy { vocab }
    }
}

impl TokenPolicy for UniformPolicy {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn probs_into(&self, _state: &StateKey, out: &mut [f64]) {
        out.fill(1.0 / self.vocab as f64);
    }
}

/// Deterministic policy that follows one fixed token sequence for one
/// prompt. It gives exact zero mass to every other trajectory of that
/// prompt, which is how support-mismatch scenarios are built. Off-path
/// states and other prompts read as uniform.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathPolicy {
    vocab: usize,
    prompt: u32,
    path: Vec<Token>,
}

impl PathPolicy {
    pub fn new(vocab: usize, prompt: u32, path: Vec<Token>) -> Self {
        PathPolicy { vocab, prompt, path }
    }
}

impl TokenPolicy for PathPolicy {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn probs_into(&self, state: &StateKey, out: &mut [f64]) {
        let d = state.depth();
        if state.prompt() == self.prompt && d < self.path.len() && state.prefix() == self.path[..d] {
            out.fill(0.0);
            out[self.path[d] as usize] = 1.0;
        } else {
            out.fill(1.0 / self.vocab as f64);
        }
    }
}

/// Softmax policy with one logit vector per materialised prefix state.
#[derive(Debug, Clone, PartialEq)]
pub struct PolicyTable {
    vocab: usize,
    horizon: usize,
    logits: BTreeMap<StateKey, Vec<f64>>,
}

impl PolicyTable {
    pub fn new(vocab: usize, horizon: usize) -> Self {
        assert!((2..=MAX_VOCAB).contains(&vocab), "vocab {vocab} out of range");
        assert!((1..=MAX_HORIZON).contains(&horizon), "horizon {horizon} out of range");
        PolicyTable { vocab, horizon, logits: BTreeMap::new() }
    }

    pub fn uniform_for(task: &TaskSpec) -> Self {
        Self::new(task.vocab(), task.horizon())
    }

    /// Gaussian logits (standard deviation `scale`) at every state of every
    /// given prompt, drawn in sorted state order.
    pub fn seeded(tasks: &[TaskSpec], rng: &mut Stream, scale: f64) -> Self {
        let first = tasks.first().expect("seeded policy needs at least one task");
        let mut table = Self::uniform_for(first);
        for task in tasks {
            for state in task.states() {
                let row: Vec<f64> = (0..table.vocab)
                    .map(|_| scale * Distribution::<f64>::sample(&StandardNormal, rng))
                    .collect::<Vec<f64>>();
                table.logits.insert(state, row);
            }
        }
        table
    }

    /// Lower by `amount` the logit of every token that continues one of the
    /// task's valid sequences. Each (state, token) pair is lowered once.
    pub fn suppress_valid(&mut self, task: &TaskSpec, amount: f64) {
        let mut pairs = std::collections::BTreeSet::new();
        for seq in task.valid_set() {
            let mut state = StateKey::root(task.prompt_id());
            for &t in seq {
                pairs.insert((state, t));
                state = state.child(t);
            }
        }
        for (state, t) in pairs {
            self.logits_mut(state)[t as usize] -= amount;
        }
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn logits(&self, state: &StateKey) -> Option<&[f64]> {
        self.logits.get(state).map(Vec::as_slice)
    }

    /// Mutable logits at `state`, materialising zeros if absent.
    pub fn logits_mut(&mut self, state: StateKey) -> &mut [f64] {
        let v = self.vocab;
        self.logits.entry(state).or_insert_with(|| vec![0.0; v])
    }

    pub fn set_logits(&mut self, state: StateKey, logits: Vec<f64>) {
        assert_eq!(logits.len(), self.vocab);
        self.logits.insert(state, logits);
    }

    pub fn states(&self) -> impl Iterator<Item = (&StateKey, &Vec<f64>)> {
        self.logits.iter()
    }

    pub fn num_states(&self) -> usize {
        self.logits.len()
    }

    /// Deep, independent copy.
    pub fn snapshot(&self) -> PolicyTable {
        self.clone()
    }

    pub fn traj_logprob(&self, traj: &Trajectory) -> f64 {
        traj_logprob(self, traj)
    }

    /// Analytic score function: `onehot(a_t) - softmax(logits[s_t])` at
    /// every visited state.
    pub fn logprob_grad(&self, traj: &Trajectory) -> GradientTable {
        let mut g = GradientTable::new(self.vocab);
        let mut probs = [0.0; MAX_VOCAB];
        for (state, &tok) in traj.states().iter().zip(&traj.tokens) {
            self.probs_into(state, &mut probs[..self.vocab]);
            g.add_score(*state, tok, &probs[..self.vocab], 1.0);
        }
        g
    }

    /// `theta <- theta + scale * grad`, materialising states as needed.
    pub fn apply(&mut self, grad: &GradientTable, scale: f64) {
        for (state, g) in &grad.entries {
            let row = self.logits_mut(*state);
            for (l, d) in row.iter_mut().zip(g) {
                *l += scale * d;
            }
        }
    }

    /// Line-oriented checkpoint: a header comment, then
    /// `state-key logit_0 ... logit_{V-1}` per materialised state.
    pub fn to_text(&self) -> String {
        let mut out = format!("# policy vocab {} horizon {}\n", self.vocab, self.horizon);
        for (state, row) in &self.logits {
            out.push_str(&state.to_string());
            for &l in row {
                out.push(' ');
                out.push_str(&f17(l));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut lines = text.lines().enumerate();
        let (_, header) = lines.next().ok_or_else(|| Error::parse(1, "empty checkpoint"))?;
        let fields: Vec<&str> = header.split_whitespace().collect();
        let (vocab, horizon) = match fields.as_slice() {
            ["#", "policy", "vocab", v, "horizon", h] => (
                v.parse::<usize>().map_err(|_| Error::parse(1, "bad vocab"))?,
                h.parse::<usize>().map_err(|_| Error::parse(1, "bad horizon"))?,
            ),
            _ => return Err(Error::parse(1, "missing `# policy vocab V horizon H` header")),
        };
        if !(2..=MAX_VOCAB).contains(&vocab) || !(1..=MAX_HORIZON).contains(&horizon) {
            return Err(Error::parse(1, "vocab or horizon out of range"));
        }
        let mut table = PolicyTable::new(vocab, horizon);
        for (i, line) in lines {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let mut parts = line.split_whitespace();
            let key: StateKey = parts
                .next()
                .unwrap()
                .parse()
                .map_err(|e: String| Error::parse(i + 1, e))?;
            if key.depth() >= horizon {
                return Err(Error::parse(i + 1, "state deeper than horizon"));
            }
            let row = parts
                .map(|p| p.parse::<f64>().map_err(|_| Error::parse(i + 1, format!("bad logit `{p}`"))))
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != vocab {
                return Err(Error::parse(i + 1, format!("expected {vocab} logits, found {}", row.len())));
            }
            table.logits.insert(key, row);
        }
        Ok(table)
    }
}

impl TokenPolicy for PolicyTable {
    fn vocab(&self) -> usize {
        self.vocab
    }

    fn probs_into(&self, state: &StateKey, out: &mut [f64]) {
        match self.logits.get(state) {
            Some(row) => softmax_into(row, out),
            None => out.fill(1.0 / self.vocab as f64),
        }
    }
}

pub fn traj_logprob<P: TokenPolicy + ?Sized>(policy: &P, traj: &Trajectory) -> f64 {
    traj.states()
        .iter()
        .zip(&traj.tokens)
        .map(|(s, &t)| policy.token_prob(s, t).ln())
        .sum()
}

/// Per-token probabilities of the trajectory's tokens under `policy`.
pub fn token_probs<P: TokenPolicy + ?Sized>(policy: &P, traj: &Trajectory) -> Vec<f64> {
    traj.states()
        .iter()
        .zip(&traj.tokens)
        .map(|(s, &t)| policy.token_prob(s, t))
        .collect()
}

/// Sample `task.horizon()` tokens by inverse CDF, verify the result and cache
/// the sampling probabilities.
pub fn sample_trajectory<P: TokenPolicy + ?Sized>(policy: &P, task: &TaskSpec, rng: &mut Stream) -> Trajectory {
    let v = task.vocab();
    let mut probs = [0.0; MAX_VOCAB];
    let mut state = StateKey::root(task.prompt_id());
    let mut tokens = Vec::with_capacity(task.horizon());
    let mut sampling_probs = Vec::with_capacity(task.horizon());
    for _ in 0..task.horizon() {
        policy.probs_into(&state, &mut probs[..v]);
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let mut chosen = None;
        for (a, &p) in probs[..v].iter().enumerate() {
            acc += p;
            if u < acc {
                chosen = Some(a);
                break;
            }
        }
        // Rounding can leave acc a hair below 1; fall back to the last
        // token with positive mass.
        let a = chosen.unwrap_or_else(|| probs[..v].iter().rposition(|&p| p > 0.0).unwrap_or(v - 1));
        tokens.push(a as Token);
        sampling_probs.push(probs[a]);
        state = state.child(a as Token);
    }
    let reward = if task.is_valid(&tokens) { 1.0 } else { 0.0 };
    Trajectory { prompt: task.prompt_id(), tokens, reward, sampling_probs }
}

/// Mean Shannon entropy (nats) of the next-token distribution over every
/// visited state of every trajectory.
pub fn mean_token_entropy<P: TokenPolicy + ?Sized>(policy: &P, trajs: &[Trajectory]) -> Result<f64> {
    if trajs.is_empty() {
        return Err(Error::Empty("trajectory list"));
    }
    let v = policy.vocab();
    let mut probs = [0.0; MAX_VOCAB];
    let mut total = 0.0;
    let mut count = 0usize;
    for traj in trajs {
        for state in traj.states() {
            policy.probs_into(&state, &mut probs[..v]);
            total += entropy(&probs[..v]);
            count += 1;
        }
    }
    if count == 0 {
        return Err(Error::Empty("visited state list"));
    }
    Ok(total / count as f64)
}

/// Partial derivatives of a scalar objective with respect to the logits,
/// keyed like [`PolicyTable`].
#[derive(Debug, Clone, PartialEq, Default)]
pub struct GradientTable {
    vocab: usize,
    entries: BTreeMap<StateKey, Vec<f64>>,
}

impl GradientTable {
    pub fn new(vocab: usize) -> Self {
        GradientTable { vocab, entries: BTreeMap::new() }
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn get(&self, state: &StateKey) -> Option<&[f64]> {
        self.entries.get(state).map(Vec::as_slice)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&StateKey, &Vec<f64>)> {
        self.entries.iter()
    }

    pub fn entries_mut(&mut self) -> impl Iterator<Item = (&StateKey, &mut Vec<f64>)> {
        self.entries.iter_mut()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn row_mut(&mut self, state: StateKey) -> &mut [f64] {
        let v = self.vocab;
        self.entries.entry(state).or_insert_with(|| vec![0.0; v])
    }

    /// Add `weight * (onehot(token) - probs)` at `state`.
    pub fn add_score(&mut self, state: StateKey, token: Token, probs: &[f64], weight: f64) {
        let row = self.row_mut(state);
        for (a, (g, &p)) in row.iter_mut().zip(probs).enumerate() {
            let onehot = if a == token as usize { 1.0 } else { 0.0 };
            *g += weight * (onehot - p);
        }
    }

    /// `self <- self + c * other`, merged in sorted key order.
    pub fn add_scaled(&mut self, other: &GradientTable, c: f64) {
        for (state, g) in &other.entries {
            let row = self.row_mut(*state);
            for (a, b) in row.iter_mut().zip(g) {
                *a += c * b;
            }
        }
    }

    pub fn scale(&mut self, c: f64) {
        for row in self.entries.values_mut() {
            for g in row.iter_mut() {
                *g *= c;
            }
        }
    }

    pub fn norm(&self) -> f64 {
        self.entries
            .values()
            .flat_map(|r| r.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.values().flat_map(|r| r.iter()).all(|g| g.is_finite())
    }

    /// Maximum absolute difference to `other` over the union of keys.
    pub fn max_abs_diff(&self, other: &GradientTable) -> f64 {
        let zero = vec![0.0; self.vocab.max(other.vocab)];
        let mut keys: Vec<&StateKey> = self.entries.keys().chain(other.entries.keys()).collect();
        keys.sort();
        keys.dedup();
        keys.into_iter()
            .map(|k| {
                let a = self.entries.get(k).unwrap_or(&zero);
                let b = other.entries.get(k).unwrap_or(&zero);
                a.iter().zip(b).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
            })
            .fold(0.0, f64::max)
    }

    /// Euclidean distance to `other` over the union of keys.
    pub fn distance(&self, other: &GradientTable) -> f64 {
        let mut diff = self.clone();
        diff.add_scaled(other, -1.0);
        diff.norm()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::env::{TaskKind, TaskSpec};
    use crate::rng::stream;

    fn traj(prompt: u32, tokens: &[Token]) -> Trajectory {
        Trajectory { prompt, tokens: tokens.to_vec(), reward: 0.0, sampling_probs: vec![] }
    }

    #[test]
    fn state_key_round_trips_through_text() {
        let k = StateKey::from_prefix(3, &[0, 15, 4]);
        assert_eq!(k.to_string(), "3:0.15.4");
        assert_eq!("3:0.15.4".parse::<StateKey>().unwrap(), k);
        assert_eq!("7:".parse::<StateKey>().unwrap(), StateKey::root(7));
        assert_eq!(k.prefix(), vec![0, 15, 4]);
        assert!("x:1".parse::<StateKey>().is_err());
        assert!("1:16".parse::<StateKey>().is_err());
    }

    #[test]
    fn state_keys_order_by_prompt_then_depth() {
        let a = StateKey::from_prefix(0, &[4, 4]);
        let b = StateKey::from_prefix(1, &[]);
        let c = StateKey::from_prefix(0, &[0, 0, 0]);
        assert!(a < b && a < c && c < b);
    }

    #[test]
    fn token_prob_closed_forms() {
        let mut p = PolicyTable::new(4, 2);
        let root = StateKey::root(0);
        assert_eq!(p.token_prob(&root, 2), 0.25);
        p.set_logits(root, vec![3f64.ln(), 0.0, 0.0, 0.0]);
        assert!((p.token_prob(&root, 0) - 0.5).abs() < 1e-15);
    }

    #[test]
    fn softmax_is_stable_for_large_logits() {
        let mut out = [0.0; 3];
        softmax_into(&[1000.0, 1000.0, -1000.0], &mut out);
        assert!((out[0] - 0.5).abs() < 1e-15 && out[2] == 0.0);
    }

    #[test]
    fn uniform_logprob() {
        let p = PolicyTable::new(5, 2);
        assert!((p.traj_logprob(&traj(0, &[1, 3])) - (1.0f64 / 25.0).ln()).abs() < 1e-15);
    }

    #[test]
    fn near_deterministic_logprob_is_small() {
        let mut p = PolicyTable::new(4, 3);
        let path = [2, 0, 1];
        let mut s = StateKey::root(0);
        for &t in &path {
            let mut row = vec![0.0; 4];
            row[t as usize] = 9.0;
            p.set_logits(s, row);
            s = s.child(t);
        }
        let lp = p.traj_logprob(&traj(0, &path));
        let per_token = (9f64.exp() / (9f64.exp() + 3.0)).ln();
        assert!((lp - 3.0 * per_token).abs() < 1e-15);
        assert!(lp <= 0.0 && lp > -2e-3);
    }

    #[test]
    fn score_of_uniform_policy() {
        let p = PolicyTable::new(4, 1);
        let g = p.logprob_grad(&traj(0, &[0]));
        assert_eq!(g.get(&StateKey::root(0)).unwrap(), &[0.75, -0.25, -0.25, -0.25]);
    }

    #[test]
    fn point_mass_sampling_returns_modal_sequence() {
        let task = TaskSpec::mod_chain(5, 3, 2, 1).unwrap();
        let valid = task.valid_set()[0].clone();
        let mut p = PolicyTable::uniform_for(&task);
        let mut s = StateKey::root(0);
        for &t in &valid {
            let mut row = vec![0.0; 5];
            row[t as usize] = 50.0;
            p.set_logits(s, row);
            s = s.child(t);
        }
        let mut rng = stream(1, "t", 0);
        for _ in 0..100 {
            let tr = sample_trajectory(&p, &task, &mut rng);
            assert_eq!(tr.tokens, valid);
            assert_eq!(tr.reward, 1.0);
        }
    }

    #[test]
    fn sampling_is_deterministic_per_stream() {
        let task = TaskSpec::make(TaskKind::MultiPath, 4, 4, 7).unwrap();
        let p = PolicyTable::seeded(std::slice::from_ref(&task), &mut stream(3, "init", 0), 1.0);
        let a = sample_trajectory(&p, &task, &mut stream(9, "s", 1));
        let b = sample_trajectory(&p, &task, &mut stream(9, "s", 1));
        assert_eq!(a, b);
    }

    #[test]
    fn entropy_of_uniform_and_point_mass() {
        let u = PolicyTable::new(4, 2);
        let t = vec![traj(0, &[0, 1]), traj(0, &[3, 3])];
        assert!((mean_token_entropy(&u, &t).unwrap() - 4f64.ln()).abs() < 1e-12);
        let pm = PathPolicy::new(4, 0, vec![0, 1]);
        assert!(mean_token_entropy(&pm, &t[..1]).unwrap() <= 1e-6);
        assert!(mean_token_entropy(&u, &[]).is_err());
    }

    #[test]
    fn entropy_of_mixed_visit_set_is_the_average() {
        // Root is point-mass, depth-1 states uniform: the mean over the two
        // visited states is (0 + ln 4) / 2.
        let mut p = PolicyTable::new(4, 2);
        p.set_logits(StateKey::root(0), vec![800.0, 0.0, 0.0, 0.0]);
        let t = vec![traj(0, &[0, 2])];
        assert!((mean_token_entropy(&p, &t).unwrap() - 0.5 * 4f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn snapshot_is_independent() {
        let task = TaskSpec::mod_chain(4, 2, 1, 1).unwrap();
        let mut p = PolicyTable::seeded(std::slice::from_ref(&task), &mut stream(1, "init", 0), 1.0);
        let snap = p.snapshot();
        let root = StateKey::root(0);
        let before = snap.token_prob(&root, 1);
        p.logits_mut(root)[1] += 3.0;
        assert_eq!(snap.token_prob(&root, 1), before);
        assert_ne!(p.token_prob(&root, 1), before);
        assert_eq!(snap.snapshot(), snap);
    }

    #[test]
    fn checkpoint_text_round_trips_bit_exactly() {
        let task = TaskSpec::make(TaskKind::MultiPath, 5, 3, 11).unwrap();
        let p = PolicyTable::seeded(std::slice::from_ref(&task), &mut stream(5, "init", 0), 2.0);
        let text = p.to_text();
        let q = PolicyTable::from_text(&text).unwrap();
        assert_eq!(p, q);
        assert_eq!(q.to_text(), text);
    }

    #[test]
    fn checkpoint_parse_errors() {
        assert!(PolicyTable::from_text("").is_err());
        assert!(PolicyTable::from_text("0: 1 2\n").is_err());
        assert!(PolicyTable::from_text("# policy vocab 2 horizon 1\n0: 1.0\n").is_err());
        assert!(PolicyTable::from_text("# policy vocab 2 horizon 1\n0:1 1.0 2.0\n").is_err());
    }

    #[test]
    fn gradient_table_accumulates() {
        let mut g = GradientTable::new(2);
        g.row_mut(StateKey::root(0))[0] = 1.0;
        let mut h = GradientTable::new(2);
        h.row_mut(StateKey::root(0))[1] = 2.0;
        h.row_mut(StateKey::root(1))[0] = -1.0;
        g.add_scaled(&h, 0.5);
        assert_eq!(g.get(&StateKey::root(0)).unwrap(), &[1.0, 1.0]);
        assert_eq!(g.get(&StateKey::root(1)).unwrap(), &[-0.5, 0.0]);
        assert!((g.norm() - (2.25f64).sqrt()).abs() < 1e-15);
    }
}
