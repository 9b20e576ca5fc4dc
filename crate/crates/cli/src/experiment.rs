//! Experiment configuration read from flat `key = value` files.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use rlplus_core::config::KvConfig;
use rlplus_core::env::{make_prompt_set, TaskKind, TaskSpec, Token};
use rlplus_core::metrics::DEFAULT_K_GRID;
use rlplus_core::policy::{PolicyTable, MAX_HORIZON, MAX_VOCAB};
use rlplus_core::rng::stream;
use rlplus_core::trainer::{DemoSource, TrainerConfig, Variant};

/// How the task suite is generated. The first `prompts` tasks are used for
/// training; `heldout` more follow with the next prompt ids.
#[derive(Debug, Clone, PartialEq)]
pub struct TaskSuite {
    pub kind: TaskKind,
    pub vocab: usize,
    pub horizon: usize,
    pub prompts: usize,
    pub heldout: usize,
    pub seed: u64,
}

impl TaskSuite {
    pub fn build(&self) -> Result<(Vec<TaskSpec>, Vec<TaskSpec>)> {
        let mut all = make_prompt_set(self.kind, self.vocab, self.horizon, self.prompts + self.heldout, self.seed)?;
        let heldout = all.split_off(self.prompts);
        Ok((all, heldout))
    }
}

/// Starting policy for `train`.
#[derive(Debug, Clone, PartialEq)]
pub struct InitConfig {
    /// Standard deviation of the random initial logits; 0 is uniform.
    pub scale: f64,
    /// Logit amount removed along every valid sequence, to start from a
    /// policy that rarely succeeds.
    pub suppress: f64,
}

impl InitConfig {
    pub fn build(&self, prompts: &[TaskSpec], seed: u64) -> PolicyTable {
        let mut p = if self.scale > 0.0 {
            PolicyTable::seeded(prompts, &mut stream(seed, "init", 0), self.scale)
        } else {
            PolicyTable::uniform_for(&prompts[0])
        };
        if self.suppress != 0.0 {
            for t in prompts {
                p.suppress_valid(t, self.suppress);
            }
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalConfig {
    pub k_grid: Vec<usize>,
    /// Attempts per prompt for sampled pass@k.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum BehaviorChoice {
    /// Independent random table.
    Seeded,
    /// Same table as the old policy.
    Old,
    Uniform,
    /// Point mass on one token sequence.
    Path(Vec<Token>),
}

#[derive(Debug, Clone, PartialEq)]
pub struct DiagnoseConfig {
    pub cur_scale: f64,
    pub old_scale: f64,
    pub behavior_scale: f64,
    pub behavior: BehaviorChoice,
    pub samples: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub enum PolicyChoice {
    Uniform,
    Seeded(f64),
    Checkpoint(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleConfig {
    pub policy: PolicyChoice,
    /// Second policy for the chi-squared column; `None` compares the
    /// policy with itself.
    pub compare: Option<PolicyChoice>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub trainer: TrainerConfig,
    pub variant: Option<Variant>,
    pub suite: TaskSuite,
    pub init: InitConfig,
    pub demos: DemoSource,
    pub eval: EvalConfig,
    /// Write a policy checkpoint every this many steps; 0 writes only the
    /// initial and final policies.
    pub checkpoint_every: usize,
    pub diagnose: DiagnoseConfig,
    pub oracle: OracleConfig,
}

fn parse_policy_choice(kv: &mut KvConfig, key: &str, scale_key: &str, path_key: &str) -> Result<Option<PolicyChoice>> {
    let scale = kv.take_or(scale_key, 1.0)?;
    let path: Option<String> = kv.take(path_key)?;
    let choice: Option<String> = kv.take(key)?;
    Ok(match choice.as_deref() {
        None => None,
        Some("uniform") => Some(PolicyChoice::Uniform),
        Some("seeded") => Some(PolicyChoice::Seeded(scale)),
        Some("checkpoint") => match path {
            Some(p) => Some(PolicyChoice::Checkpoint(PathBuf::from(p))),
            None => bail!("`{key} = checkpoint` needs `{path_key}`"),
        },
        Some(other) => bail!("`{key}`: expected uniform, seeded or checkpoint, got `{other}`"),
    })
}

impl ExperimentConfig {
    /// Parse a whole file. `seed` replaces `trainer.master_seed` when given.
    pub fn parse(text: &str, seed: Option<u64>) -> Result<Self> {
        let mut kv = KvConfig::parse(text)?;
        let mut trainer = TrainerConfig::from_kv(&mut kv, "trainer.")?;
        let variant: Option<Variant> = kv.take("variant")?;
        if let Some(v) = variant {
            trainer = v.apply(trainer);
        }
        if let Some(s) = seed {
            trainer.master_seed = s;
        }
        trainer.validate()?;

        let suite = TaskSuite {
            kind: kv.take_or("task.kind", TaskKind::ModChain)?,
            vocab: kv.take_or("task.vocab", 5)?,
            horizon: kv.take_or("task.horizon", 3)?,
            prompts: kv.take_or("task.prompts", 4)?,
            heldout: kv.take_or("task.heldout", 0)?,
            seed: kv.take_or("task.seed", 0)?,
        };
        if suite.prompts == 0 {
            bail!("task.prompts must be positive");
        }
        if !(2..=MAX_VOCAB).contains(&suite.vocab) || !(1..=MAX_HORIZON).contains(&suite.horizon) {
            bail!("task.vocab must lie in 2..={MAX_VOCAB} and task.horizon in 1..={MAX_HORIZON}");
        }
        let init = InitConfig { scale: kv.take_or("policy.init_scale", 0.0)?, suppress: kv.take_or("policy.suppress", 0.0)? };
        if init.scale.is_nan() || init.scale < 0.0 || !init.suppress.is_finite() {
            bail!("policy.init_scale must be non-negative and policy.suppress finite");
        }

        let temperature = kv.take_or("demo.temperature", 0.1)?;
        let demos = match kv.take_or("demo.source", "expert".to_string())?.as_str() {
            "expert" => DemoSource::ExpertPolicy { temperature },
            "fixed" => DemoSource::FixedCorrectSet,
            other => bail!("demo.source: expected expert or fixed, got `{other}`"),
        };
        demos.validate()?;

        let eval = EvalConfig {
            k_grid: kv.take_list("eval.k_grid")?.unwrap_or_else(|| DEFAULT_K_GRID.to_vec()),
            n: kv.take_or("eval.n", 256)?,
        };
        if eval.k_grid.is_empty() || eval.k_grid.contains(&0) || eval.k_grid.iter().any(|&k| k > eval.n) {
            bail!("eval.k_grid entries must lie in 1..=eval.n ({})", eval.n);
        }
        let checkpoint_every = kv.take_or("train.checkpoint_every", 0)?;

        let path: Option<Vec<Token>> = kv.take_list("diagnose.path")?;
        let behavior = match kv.take_or("diagnose.behavior", "seeded".to_string())?.as_str() {
            "seeded" => BehaviorChoice::Seeded,
            "old" => BehaviorChoice::Old,
            "uniform" => BehaviorChoice::Uniform,
            "path" => BehaviorChoice::Path(path.unwrap_or_else(|| vec![0; suite.horizon])),
            other => bail!("diagnose.behavior: expected seeded, old, uniform or path, got `{other}`"),
        };
        if let BehaviorChoice::Path(p) = &behavior {
            if p.len() != suite.horizon || p.iter().any(|&t| t as usize >= suite.vocab) {
                bail!("diagnose.path must have {} tokens below {}", suite.horizon, suite.vocab);
            }
        }
        let diagnose = DiagnoseConfig {
            cur_scale: kv.take_or("diagnose.cur_scale", 1.0)?,
            old_scale: kv.take_or("diagnose.old_scale", 1.0)?,
            behavior_scale: kv.take_or("diagnose.behavior_scale", 1.0)?,
            behavior,
            samples: kv.take_or("diagnose.samples", 100_000)?,
        };
        if diagnose.samples < 1000 {
            bail!("diagnose.samples must be at least 1000");
        }

        let policy = parse_policy_choice(&mut kv, "oracle.policy", "oracle.scale", "oracle.checkpoint")?
            .unwrap_or(PolicyChoice::Uniform);
        let compare = parse_policy_choice(&mut kv, "oracle.compare", "oracle.compare_scale", "oracle.compare_checkpoint")?;
        let oracle = OracleConfig { policy, compare };

        kv.finish()?;
        Ok(ExperimentConfig { trainer, variant, suite, init, demos, eval, checkpoint_every, diagnose, oracle })
    }

    pub fn load(path: &std::path::Path, seed: Option<u64>) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text, seed).with_context(|| format!("in {}", path.display()))
    }
}
