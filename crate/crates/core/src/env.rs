//! Verifiable-reward sequence tasks and the exact trajectory-space oracle.
//!
//! Two task families stand in for reasoning prompts:
//!
//! - `ModChain`: a running modular sum. Exactly one sequence of length `H`
//!   earns reward, so a single wrong token nullifies the reward.
//! - `MultiPath`: a seeded tree of 2 to 8 valid sequences sharing prefixes,
//!   so several distinct derivations are correct.
//!
//! Every expectation over trajectories can be computed exactly by walking
//! the prefix tree of all `V^H` sequences, which is the oracle the
//! estimator diagnostics and tests are built on.

use std::fmt;
use std::str::FromStr;

use rand::Rng;

use crate::error::{Error, Result};
use crate::par;
use crate::policy::{StateKey, TokenPolicy, MAX_HORIZON, MAX_VOCAB};
use crate::rng::stream;

pub type Token = u8;

pub const DEFAULT_ENUMERATION_CAP: u64 = 10_000_000;
pub const MAX_VALID_PATHS: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum TaskKind {
    ModChain,
    MultiPath,
}

impl fmt::Display for TaskKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TaskKind::ModChain => "ModChain",
            TaskKind::MultiPath => "MultiPath",
        })
    }
}

impl FromStr for TaskKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().replace(['_', '-'], "").as_str() {
            "modchain" => Ok(TaskKind::ModChain),
            "multipath" => Ok(TaskKind::MultiPath),
            _ => Err(Error::UnknownVariant(s.to_string())),
        }
    }
}

/// A prompt plus emitted tokens, its terminal reward and the per-token
/// probabilities under the policy that generated it.
#[derive(Debug, Clone, PartialEq)]
pub struct Trajectory {
    pub prompt: u32,
    pub tokens: Vec<Token>,
    pub reward: f64,
    pub sampling_probs: Vec<f64>,
}

impl Trajectory {
    /// State `s_t` before each token `a_t`.
    pub fn states(&self) -> Vec<StateKey> {
        let mut s = StateKey::root(self.prompt);
        self.tokens
            .iter()
            .map(|&t| {
                let cur = s;
                s = s.child(t);
                cur
            })
            .collect()
    }
}

fn checked_count(vocab: usize, horizon: usize, cap: u64) -> Result<u64> {
    if !(2..=MAX_VOCAB).contains(&vocab) {
        return Err(Error::InvalidDimension(format!("vocab {vocab} not in [2, {MAX_VOCAB}]")));
    }
    if !(1..=MAX_HORIZON).contains(&horizon) {
        return Err(Error::InvalidDimension(format!("horizon {horizon} not in [1, {MAX_HORIZON}]")));
    }
    let count = (vocab as u128).pow(horizon as u32);
    if count > u128::from(cap) {
        return Err(Error::CapExceeded { count, cap });
    }
    Ok(count as u64)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskSpec {
    kind: TaskKind,
    vocab: usize,
    horizon: usize,
    params: Vec<u64>,
    valid: Vec<Vec<Token>>,
    prompt_id: u32,
}

/// Build a task from a seed. `ModChain` draws its operands from the seed;
/// `MultiPath` uses the seed itself as its parameter.
pub fn make_task(kind: TaskKind, vocab: usize, horizon: usize, seed: u64) -> Result<TaskSpec> {
    TaskSpec::make(kind, vocab, horizon, seed)
}

impl TaskSpec {
    pub fn make(kind: TaskKind, vocab: usize, horizon: usize, seed: u64) -> Result<Self> {
        Self::make_with_cap(kind, vocab, horizon, seed, DEFAULT_ENUMERATION_CAP)
    }

    pub fn make_with_cap(kind: TaskKind, vocab: usize, horizon: usize, seed: u64, cap: u64) -> Result<Self> {
        checked_count(vocab, horizon, cap)?;
        match kind {
            TaskKind::ModChain => {
                let mut rng = stream(seed, "task.modchain", 0);
                let a = rng.gen_range(0..vocab as u64);
                let b = rng.gen_range(1..vocab as u64);
                Self::mod_chain(vocab, horizon, a, b)
            }
            TaskKind::MultiPath => Self::multi_path(vocab, horizon, seed),
        }
    }

    /// Running sum: `y_1 = (a + b) mod V`, `y_t = (y_{t-1} + b) mod V`.
    pub fn mod_chain(vocab: usize, horizon: usize, a: u64, b: u64) -> Result<Self> {
        checked_count(vocab, horizon, u64::MAX)?;
        let v = vocab as u64;
        if a >= v || b >= v {
            return Err(Error::InvalidDimension(format!("operands ({a}, {b}) must be below {vocab}")));
        }
        let mut seq = Vec::with_capacity(horizon);
        let mut acc = a;
        for _ in 0..horizon {
            acc = (acc + b) % v;
            seq.push(acc as Token);
        }
        Ok(TaskSpec { kind: TaskKind::ModChain, vocab, horizon, params: vec![a, b], valid: vec![seq], prompt_id: 0 })
    }

    /// Seeded tree of valid sequences. Each new path copies a prefix of an
    /// existing one, diverges at a random position and continues randomly.
    pub fn multi_path(vocab: usize, horizon: usize, seed: u64) -> Result<Self> {
        let total = checked_count(vocab, horizon, u64::MAX)?;
        let mut rng = stream(seed, "task.multipath", 0);
        let k = rng.gen_range(2..=MAX_VALID_PATHS).min(total.min(MAX_VALID_PATHS as u64) as usize);
        let mut valid: Vec<Vec<Token>> =
            vec![(0..horizon).map(|_| rng.gen_range(0..vocab) as Token).collect()];
        while valid.len() < k {
            let parent = valid[rng.gen_range(0..valid.len())].clone();
            let branch = rng.gen_range(0..horizon);
            let mut child = parent[..branch].to_vec();
            let shift = rng.gen_range(1..vocab);
            child.push(((parent[branch] as usize + shift) % vocab) as Token);
            child.extend((branch + 1..horizon).map(|_| rng.gen_range(0..vocab) as Token));
            if !valid.contains(&child) {
                valid.push(child);
            }
        }
        valid.sort();
        Ok(TaskSpec { kind: TaskKind::MultiPath, vocab, horizon, params: vec![seed], valid, prompt_id: 0 })
    }

    pub fn with_prompt_id(mut self, id: u32) -> Self {
        self.prompt_id = id;
        self
    }

    pub fn kind(&self) -> TaskKind {
        self.kind
    }

    pub fn vocab(&self) -> usize {
        self.vocab
    }

    pub fn horizon(&self) -> usize {
        self.horizon
    }

    pub fn params(&self) -> &[u64] {
        &self.params
    }

    pub fn prompt_id(&self) -> u32 {
        self.prompt_id
    }

    /// Valid sequences in lexicographic order.
    pub fn valid_set(&self) -> &[Vec<Token>] {
        &self.valid
    }

    pub fn trajectory_count(&self) -> u64 {
        (self.vocab as u64).pow(self.horizon as u32)
    }

    pub fn is_valid(&self, tokens: &[Token]) -> bool {
        self.valid.binary_search_by(|v| v.as_slice().cmp(tokens)).is_ok()
    }

    /// Binary reward of a full sequence.
    pub fn verify(&self, tokens: &[Token]) -> Result<f64> {
        if tokens.len() != self.horizon {
            return Err(Error::LengthMismatch { expected: self.horizon, got: tokens.len() });
        }
        if let Some(&t) = tokens.iter().find(|&&t| t as usize >= self.vocab) {
            return Err(Error::TokenOutOfRange { token: t as usize, vocab: self.vocab });
        }
        Ok(if self.is_valid(tokens) { 1.0 } else { 0.0 })
    }

    /// Every prefix state of length `< H` for this prompt, in key order.
    pub fn states(&self) -> Vec<StateKey> {
        let mut out = vec![StateKey::root(self.prompt_id)];
        let mut frontier = out.clone();
        for _ in 1..self.horizon {
            let next: Vec<StateKey> = frontier
                .iter()
                .flat_map(|s| (0..self.vocab).map(move |t| s.child(t as Token)))
                .collect();
            out.extend_from_slice(&next);
            frontier = next;
        }
        out.sort();
        out
    }

    /// Tokens that continue at least one valid sequence from `prefix`.
    pub fn valid_continuations(&self, prefix: &[Token]) -> Vec<Token> {
        let mut out: Vec<Token> = self
            .valid
            .iter()
            .filter(|v| v.len() > prefix.len() && v.starts_with(prefix))
            .map(|v| v[prefix.len()])
            .collect();
        out.dedup();
        out
    }

    /// `kind V H params... valid_count`, then one line per valid sequence.
    /// The prompt id is not part of the record.
    pub fn to_record(&self) -> String {
        let mut head = vec![self.kind.to_string(), self.vocab.to_string(), self.horizon.to_string()];
        head.extend(self.params.iter().map(u64::to_string));
        head.push(self.valid.len().to_string());
        let mut out = head.join(" ");
        out.push('\n');
        for seq in &self.valid {
            let toks: Vec<String> = seq.iter().map(u8::to_string).collect();
            out.push_str(&toks.join(" "));
            out.push('\n');
        }
        out
    }

    /// Parse a record and check that the listed valid set matches the one
    /// regenerated from the parameters.
    pub fn from_record(text: &str) -> Result<Self> {
        let mut lines = text.lines().filter(|l| !l.trim().is_empty());
        let head = lines.next().ok_or_else(|| Error::parse(1, "empty task record"))?;
        let fields: Vec<&str> = head.split_whitespace().collect();
        if fields.len() < 4 {
            return Err(Error::parse(1, "task header too short"));
        }
        let kind: TaskKind = fields[0].parse().map_err(|_| Error::parse(1, "unknown task kind"))?;
        let num = |s: &str| s.parse::<u64>().map_err(|_| Error::parse(1, format!("bad integer `{s}`")));
        let vocab = num(fields[1])? as usize;
        let horizon = num(fields[2])? as usize;
        let count = num(fields[fields.len() - 1])? as usize;
        let params = fields[3..fields.len() - 1].iter().map(|s| num(s)).collect::<Result<Vec<u64>>>()?;
        let task = match (kind, params.as_slice()) {
            (TaskKind::ModChain, [a, b]) => Self::mod_chain(vocab, horizon, *a, *b)?,
            (TaskKind::MultiPath, [seed]) => Self::multi_path(vocab, horizon, *seed)?,
            _ => return Err(Error::parse(1, "wrong number of task parameters")),
        };
        let listed = lines
            .enumerate()
            .map(|(i, l)| {
                l.split_whitespace()
                    .map(|t| t.parse::<Token>().map_err(|_| Error::parse(i + 2, format!("bad token `{t}`"))))
                    .collect::<Result<Vec<Token>>>()
            })
            .collect::<Result<Vec<_>>>()?;
        if listed.len() != count || listed != task.valid {
            return Err(Error::parse(2, "listed valid sequences disagree with the task parameters"));
        }
        Ok(task)
    }
}

/// The set of all `V^H` token sequences of one shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TrajectorySpace {
    vocab: usize,
    horizon: usize,
    total_count: u64,
}

impl TrajectorySpace {
    pub fn new(vocab: usize, horizon: usize, cap: u64) -> Result<Self> {
        let total_count = checked_count(vocab, horizon, cap)?;
        Ok(TrajectorySpace { vocab, horizon, total_count })
    }

    pub fn of(task: &TaskSpec) -> Result<Self> {
        Self::new(task.vocab, task.horizon, DEFAULT_ENUMERATION_CAP)
    }

    pub fn total_count(&self) -> u64 {
        self.total_count
    }

    /// Lexicographic iteration over all sequences.
    pub fn iter(&self) -> impl Iterator<Item = Vec<Token>> + '_ {
        let (v, h) = (self.vocab as u64, self.horizon);
        (0..self.total_count).map(move |mut i| {
            let mut seq = vec![0; h];
            for slot in seq.iter_mut().rev() {
                *slot = (i % v) as Token;
                i /= v;
            }
            seq
        })
    }
}

const MAX_POLICIES: usize = 4;

struct Walk<'a, F> {
    policies: &'a [&'a dyn TokenPolicy],
    vocab: usize,
    horizon: usize,
    visit: &'a F,
}

impl<F> Walk<'_, F>
where
    F: Fn(&[Token], &[f64], &mut [f64]),
{
    fn descend(&self, prefix: &mut Vec<Token>, state: StateKey, masses: &[f64], scratch: &mut [Vec<f64>], acc: &mut [f64]) {
        if prefix.len() == self.horizon {
            (self.visit)(prefix, masses, acc);
            return;
        }
        let (buf, rest) = scratch.split_first_mut().expect("scratch depth");
        let (v, n) = (self.vocab, self.policies.len());
        for (i, p) in self.policies.iter().enumerate() {
            p.probs_into(&state, &mut buf[i * v..(i + 1) * v]);
        }
        let mut child = [0.0; MAX_POLICIES];
        for tok in 0..v {
            for i in 0..n {
                child[i] = masses[i] * buf[i * v + tok];
            }
            prefix.push(tok as Token);
            self.descend(prefix, state.child(tok as Token), &child[..n], rest, acc);
            prefix.pop();
        }
    }
}

/// Exhaustive sums over every trajectory of `task`.
///
/// `visit(tokens, masses, acc)` receives each sequence with its probability
/// under each policy and adds into `n_acc` accumulators. The space is split
/// into one chunk per first token; chunks may run in parallel but are
/// summed sequentially in token order, so the result does not depend on the
/// thread count.
pub fn enumerate_sums<F>(
    task: &TaskSpec,
    policies: &[&dyn TokenPolicy],
    n_acc: usize,
    cap: u64,
    visit: F,
) -> Result<Vec<f64>>
where
    F: Fn(&[Token], &[f64], &mut [f64]) + Sync,
{
    checked_count(task.vocab, task.horizon, cap)?;
    assert!(!policies.is_empty() && policies.len() <= MAX_POLICIES, "1 to {MAX_POLICIES} policies");
    let (v, h, n) = (task.vocab, task.horizon, policies.len());
    let root = StateKey::root(task.prompt_id);
    let mut root_probs = vec![0.0; n * v];
    for (i, p) in policies.iter().enumerate() {
        p.probs_into(&root, &mut root_probs[i * v..(i + 1) * v]);
    }
    let walk = Walk { policies, vocab: v, horizon: h, visit: &visit };
    let partials = par::map_range(v, |tok| {
        let mut acc = vec![0.0; n_acc];
        let masses: Vec<f64> = (0..n).map(|i| root_probs[i * v + tok]).collect();
        let mut scratch = vec![vec![0.0; n * v]; h];
        let mut prefix = vec![tok as Token];
        walk.descend(&mut prefix, root.child(tok as Token), &masses, &mut scratch, &mut acc);
        acc
    });
    let mut total = vec![0.0; n_acc];
    for part in partials {
        for (t, p) in total.iter_mut().zip(part) {
            *t += p;
        }
    }
    Ok(total)
}

/// Sequential visit of every trajectory with its masses, in lexicographic
/// order. Used for order-independent scans such as maxima.
pub fn for_each_trajectory<F>(task: &TaskSpec, policies: &[&dyn TokenPolicy], cap: u64, mut visit: F) -> Result<()>
where
    F: FnMut(&[Token], &[f64]),
{
    checked_count(task.vocab, task.horizon, cap)?;
    let n = policies.len();
    assert!(n <= MAX_POLICIES);
    let mut probs = [0.0; MAX_VOCAB];
    let space = TrajectorySpace::new(task.vocab, task.horizon, cap)?;
    for seq in space.iter() {
        let mut masses = [1.0; MAX_POLICIES];
        let mut state = StateKey::root(task.prompt_id);
        for &t in &seq {
            for (i, p) in policies.iter().enumerate() {
                p.probs_into(&state, &mut probs[..task.vocab]);
                masses[i] *= probs[t as usize];
            }
            state = state.child(t);
        }
        visit(&seq, &masses[..n]);
    }
    Ok(())
}

/// Exact `sum_tau policy(tau) * f(tau)`.
pub fn enumerate_expectation<P, F>(task: &TaskSpec, policy: &P, f: F) -> Result<f64>
where
    P: TokenPolicy,
    F: Fn(&[Token]) -> f64 + Sync,
{
    let sums = enumerate_sums(task, &[policy as &dyn TokenPolicy], 1, DEFAULT_ENUMERATION_CAP, |seq, m, acc| {
        acc[0] += m[0] * f(seq);
    })?;
    Ok(sums[0])
}

/// Exact expected reward `J = E_policy[R]`.
pub fn exact_success<P: TokenPolicy>(task: &TaskSpec, policy: &P) -> Result<f64> {
    enumerate_expectation(task, policy, |seq| if task.is_valid(seq) { 1.0 } else { 0.0 })
}

/// A fixed list of prompts generated from one seed, prompt ids `0..count`.
pub fn make_prompt_set(kind: TaskKind, vocab: usize, horizon: usize, count: usize, seed: u64) -> Result<Vec<TaskSpec>> {
    if count == 0 {
        return Err(Error::Empty("prompt set"));
    }
    (0..count)
        .map(|i| {
            let task_seed = rand::RngCore::next_u64(&mut stream(seed, "prompt", i as u64));
            Ok(TaskSpec::make(kind, vocab, horizon, task_seed)?.with_prompt_id(i as u32))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::policy::{PolicyTable, UniformPolicy};
    use crate::rng::stream;

    #[test]
    fn single_step_mod_chain() {
        let t = TaskSpec::mod_chain(5, 1, 2, 1).unwrap();
        assert_eq!(t.valid_set(), &[vec![3]]);
        assert_eq!(t.verify(&[3]).unwrap(), 1.0);
        assert_eq!(t.verify(&[4]).unwrap(), 0.0);
    }

    #[test]
    fn mod_chain_has_one_valid_sequence() {
        for seed in 0..20 {
            let t = make_task(TaskKind::ModChain, 5, 3, seed).unwrap();
            assert_eq!(t.valid_set().len(), 1);
        }
    }

    #[test]
    fn verify_rejects_malformed_sequences() {
        let t = TaskSpec::mod_chain(5, 2, 0, 1).unwrap();
        assert!(matches!(t.verify(&[1]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(t.verify(&[1, 5]), Err(Error::TokenOutOfRange { .. })));
    }

    #[test]
    fn dimension_and_cap_errors() {
        assert!(matches!(make_task(TaskKind::ModChain, 1, 2, 0), Err(Error::InvalidDimension(_))));
        assert!(matches!(make_task(TaskKind::ModChain, 17, 2, 0), Err(Error::InvalidDimension(_))));
        assert!(matches!(make_task(TaskKind::ModChain, 4, 9, 0), Err(Error::InvalidDimension(_))));
        assert!(matches!(make_task(TaskKind::MultiPath, 16, 8, 0), Err(Error::CapExceeded { .. })));
        assert!(matches!(
            TaskSpec::make_with_cap(TaskKind::ModChain, 5, 3, 0, 100),
            Err(Error::CapExceeded { .. })
        ));
    }

    #[test]
    fn multipath_seed_is_deterministic_and_well_formed() {
        for seed in 0..200 {
            let t = make_task(TaskKind::MultiPath, 4, 4, seed).unwrap();
            assert_eq!(t, make_task(TaskKind::MultiPath, 4, 4, seed).unwrap());
            let k = t.valid_set().len();
            assert!((2..=8).contains(&k));
            assert!(t.valid_set().iter().all(|s| s.len() == 4 && s.iter().all(|&x| x < 4)));
        }
        let tiny = make_task(TaskKind::MultiPath, 2, 1, 3).unwrap();
        assert_eq!(tiny.valid_set().len(), 2);
    }

    #[test]
    fn task_record_round_trip() {
        for t in [TaskSpec::mod_chain(5, 3, 2, 1).unwrap(), make_task(TaskKind::MultiPath, 4, 4, 7).unwrap()] {
            let rec = t.to_record();
            assert_eq!(TaskSpec::from_record(&rec).unwrap(), t);
        }
        assert_eq!(TaskSpec::mod_chain(5, 3, 2, 1).unwrap().to_record(), "ModChain 5 3 2 1 1\n3 4 0\n");
        assert!(TaskSpec::from_record("ModChain 5 3 2 1 1\n3 4 1\n").is_err());
        assert!(TaskSpec::from_record("ModChain 5 3 2 1\n").is_err());
    }

    #[test]
    fn space_iterates_each_sequence_once() {
        let s = TrajectorySpace::new(3, 3, 100).unwrap();
        let all: Vec<Vec<Token>> = s.iter().collect();
        assert_eq!(all.len(), 27);
        let mut dedup = all.clone();
        dedup.sort();
        dedup.dedup();
        assert_eq!(dedup.len(), 27);
        assert_eq!(all[5], vec![0, 1, 2]);
    }

    #[test]
    fn uniform_success_is_v_to_minus_h() {
        let t = TaskSpec::mod_chain(5, 2, 1, 2).unwrap();
        let j = exact_success(&t, &UniformPolicy::new(5)).unwrap();
        assert!((j - 0.04).abs() < 1e-15);
        for h in 1..=4 {
            let t = TaskSpec::mod_chain(4, h, 1, 1).unwrap();
            let j = exact_success(&t, &UniformPolicy::new(4)).unwrap();
            assert!((j - 4f64.powi(-(h as i32))).abs() < 1e-18);
        }
    }

    #[test]
    fn normalisation_and_verifier_agreement() {
        let t = make_task(TaskKind::MultiPath, 4, 4, 7).unwrap();
        let p = PolicyTable::seeded(std::slice::from_ref(&t), &mut stream(2, "init", 0), 1.5);
        let one = enumerate_expectation(&t, &p, |_| 1.0).unwrap();
        assert!((one - 1.0).abs() < 1e-12);
        let count = TrajectorySpace::of(&t).unwrap().iter().map(|s| t.verify(&s).unwrap()).sum::<f64>();
        assert_eq!(count as usize, t.valid_set().len());
    }

    #[test]
    fn sequential_walk_agrees_with_tree_walk() {
        let t = make_task(TaskKind::MultiPath, 3, 4, 1).unwrap();
        let p = PolicyTable::seeded(std::slice::from_ref(&t), &mut stream(4, "init", 0), 1.0);
        let mut total = 0.0;
        for_each_trajectory(&t, &[&p], DEFAULT_ENUMERATION_CAP, |s, m| {
            if t.is_valid(s) {
                total += m[0];
            }
        })
        .unwrap();
        assert!((total - exact_success(&t, &p).unwrap()).abs() < 1e-15);
    }

    #[test]
    fn enumeration_is_deterministic() {
        let t = make_task(TaskKind::MultiPath, 5, 4, 9).unwrap();
        let p = PolicyTable::seeded(std::slice::from_ref(&t), &mut stream(1, "init", 0), 1.0);
        let a = exact_success(&t, &p).unwrap();
        let b = exact_success(&t, &p).unwrap();
        assert_eq!(a.to_bits(), b.to_bits());
    }

    #[test]
    fn prompt_sets_are_reproducible() {
        let a = make_prompt_set(TaskKind::ModChain, 5, 3, 4, 11).unwrap();
        assert_eq!(a, make_prompt_set(TaskKind::ModChain, 5, 3, 4, 11).unwrap());
        assert_eq!(a.iter().map(TaskSpec::prompt_id).collect::<Vec<_>>(), vec![0, 1, 2, 3]);
        assert!(make_prompt_set(TaskKind::ModChain, 5, 3, 0, 11).is_err());
    }
}
