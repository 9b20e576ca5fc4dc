//! Plain group-relative policy optimisation on the model's own samples,
//! kept separate from [`crate::trainer`] as a reference implementation.

use crate::env::{TaskSpec, Trajectory};
use crate::error::{Error, Result};
use crate::policy::{sample_trajectory, GradientTable, PolicyTable, TokenPolicy, MAX_VOCAB};
use crate::rng::stream;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GrpoConfig {
    pub group_size: usize,
    pub batch_prompts: usize,
    pub lr: f64,
    pub clip_eps: Option<f64>,
    pub prob_floor: f64,
    pub adv_eps: f64,
    pub snapshot_every: usize,
    pub steps: usize,
    pub master_seed: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GrpoStep {
    pub mean_reward: f64,
    pub policy: PolicyTable,
}

fn advantages(rewards: &[f64], eps: f64) -> Vec<f64> {
    let g = rewards.len() as f64;
    let mean = rewards.iter().sum::<f64>() / g;
    let std = (rewards.iter().map(|r| (r - mean) * (r - mean)).sum::<f64>() / g).sqrt();
    if std >= eps {
        rewards.iter().map(|r| (r - mean) / std).collect()
    } else {
        vec![0.0; rewards.len()]
    }
}

fn group_gradient(cur: &PolicyTable, old: &PolicyTable, samples: &[Trajectory], cfg: &GrpoConfig) -> GradientTable {
    let v = cur.vocab();
    let rewards: Vec<f64> = samples.iter().map(|s| s.reward).collect();
    let adv = advantages(&rewards, cfg.adv_eps);
    let inv_g = 1.0 / samples.len() as f64;
    let mut grad = GradientTable::new(v);
    let mut probs = [0.0; MAX_VOCAB];
    for (s, &a) in samples.iter().zip(&adv) {
        for (state, &tok) in s.states().iter().zip(&s.tokens) {
            cur.probs_into(state, &mut probs[..v]);
            let ratio = probs[tok as usize] / old.token_prob(state, tok).max(cfg.prob_floor);
            let clipped = cfg.clip_eps.map(|e| ratio.clamp(1.0 - e, 1.0 + e)).unwrap_or(ratio);
            let w = if clipped * a < ratio * a { 0.0 } else { ratio * a };
            grad.add_score(*state, tok, &probs[..v], w * inv_g);
        }
    }
    grad
}

/// Run `cfg.steps` updates from `initial`; one entry per step with the
/// policy after that step's update.
pub fn run_grpo(initial: &PolicyTable, prompts: &[TaskSpec], cfg: &GrpoConfig) -> Result<Vec<GrpoStep>> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompt list"));
    }
    if cfg.group_size < 2 || cfg.batch_prompts == 0 || cfg.snapshot_every == 0 {
        return Err(Error::Domain("group_size >= 2, batch_prompts >= 1 and snapshot_every >= 1 required".into()));
    }
    let mut cur = initial.clone();
    let mut old = initial.clone();
    let mut out = Vec::with_capacity(cfg.steps);
    for step in 0..cfg.steps {
        let mut total = GradientTable::new(cur.vocab());
        let (mut reward_sum, mut count) = (0.0, 0usize);
        let n = cfg.batch_prompts as f64;
        for j in 0..cfg.batch_prompts {
            let task = &prompts[(step * cfg.batch_prompts + j) % prompts.len()];
            let mut rng = stream(cfg.master_seed, "group", ((step as u64) << 32) | j as u64);
            let samples: Vec<Trajectory> = (0..cfg.group_size).map(|_| sample_trajectory(&old, task, &mut rng)).collect();
            reward_sum += samples.iter().map(|s| s.reward).sum::<f64>();
            count += samples.len();
            total.add_scaled(&group_gradient(&cur, &old, &samples, cfg), 1.0 / n);
        }
        cur.apply(&total, cfg.lr);
        if (step + 1) % cfg.snapshot_every == 0 {
            old = cur.clone();
        }
        out.push(GrpoStep { mean_reward: reward_sum / count as f64, policy: cur.clone() });
    }
    Ok(out)
}
