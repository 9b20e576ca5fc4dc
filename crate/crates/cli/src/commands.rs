//! The four subcommands. Each returns `Ok(true)` when every check passed.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{anyhow, Context, Result};
use rlplus_core::env::{exact_success, TaskSpec};
use rlplus_core::estimators::{
    bayes_risk, chi_squared, estimator_bias_exact, max_distortion_factor, mis_weight_bound_check,
    ratio_moments_exact, run_diagnostics, support_gap_mass, EstimatorKind,
};
use rlplus_core::fmt::{f17, json_array, json_f64, json_str, JsonObject};
use rlplus_core::metrics::{boundary_curve, exact_boundary_curve, merged_csv, pass_from_success};
use rlplus_core::policy::{PathPolicy, PolicyTable, TokenPolicy, UniformPolicy};
use rlplus_core::rng::stream;
use rlplus_core::trainer::{train, TrainerState, STREAM_NAMES};
use rlplus_core::Error;

use crate::experiment::{BehaviorChoice, ExperimentConfig, PolicyChoice};

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn mean(xs: &[f64]) -> f64 {
    xs.iter().sum::<f64>() / xs.len() as f64
}

pub fn read_checkpoint(path: &Path) -> Result<PolicyTable> {
    let text = fs::read_to_string(path).with_context(|| format!("reading checkpoint {}", path.display()))?;
    PolicyTable::from_text(&text).with_context(|| format!("parsing checkpoint {}", path.display()))
}

fn check_shape(policy: &PolicyTable, prompts: &[TaskSpec], what: &str) -> Result<()> {
    let t = &prompts[0];
    if policy.vocab() != t.vocab() || policy.horizon() != t.horizon() {
        return Err(anyhow!(
            "{what} has V={} H={} but the task suite has V={} H={}",
            policy.vocab(),
            policy.horizon(),
            t.vocab(),
            t.horizon()
        ));
    }
    Ok(())
}

pub fn train_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let (prompts, heldout) = cfg.suite.build()?;
    let tc = &cfg.trainer;
    let initial = cfg.init.build(&prompts, tc.master_seed);
    let ckpt_dir = out.join("checkpoints");
    fs::create_dir_all(&ckpt_dir).with_context(|| format!("creating {}", ckpt_dir.display()))?;
    write(&out.join("policy_init.txt"), &initial.to_text())?;

    let mut state = TrainerState::new(initial, prompts.clone(), cfg.demos)?;
    let mut log = String::new();
    let records = train(&mut state, tc, |rec, st| {
        log.push_str(&rec.to_json());
        log.push('\n');
        if cfg.checkpoint_every > 0 && (rec.step + 1) % cfg.checkpoint_every == 0 {
            let path = ckpt_dir.join(format!("step_{:06}.txt", rec.step + 1));
            fs::write(&path, st.cur.to_text())?;
        }
        Ok(())
    })?;
    write(&out.join("steps.jsonl"), &log)?;
    write(&out.join("policy_final.txt"), &state.cur.to_text())?;

    let heldout_acc = if heldout.is_empty() {
        None
    } else {
        let v = heldout.iter().map(|t| exact_success(t, &state.cur)).collect::<rlplus_core::Result<Vec<f64>>>()?;
        Some(mean(&v))
    };
    let passk = exact_boundary_curve(&state.cur, &prompts, &cfg.eval.k_grid)?;
    let mut streams = vec!["init".to_string()];
    streams.extend(STREAM_NAMES.iter().map(|s| s.to_string()));
    let last = records.last();
    let summary = JsonObject::new()
        .string("variant", cfg.variant.map_or("none", |v| v.name()))
        .int("steps", tc.steps as i128)
        .int("master_seed", tc.master_seed as i128)
        .raw("streams", json_array(streams.iter().map(|s| json_str(s))))
        .opt_float("final_reward", last.map(|r| r.mean_reward))
        .float("final_entropy", state.visited_entropy()?)
        .float("eval_accuracy", state.accuracy(tc.master_seed)?)
        .opt_float("heldout_accuracy", heldout_acc)
        .raw("k_grid", json_array(cfg.eval.k_grid.iter().map(|k| k.to_string())))
        .raw("exact_passk", json_array(passk.iter().map(|&v| json_f64(v))))
        .finish();
    write(&out.join("summary.json"), &(summary + "\n"))?;
    Ok(true)
}

struct Check {
    name: &'static str,
    /// `None` when the check does not apply to this configuration.
    passed: Option<bool>,
    detail: String,
}

fn table(checks: &[Check]) -> String {
    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    let mut out = String::new();
    for c in checks {
        let status = match c.passed {
            Some(true) => "PASS",
            Some(false) => "FAIL",
            None => "SKIP",
        };
        out.push_str(&format!("{status}  {:width$}  {}\n", c.name, c.detail));
    }
    out
}

pub fn diagnose_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let (prompts, _) = cfg.suite.build()?;
    let task = &prompts[0];
    let d = &cfg.diagnose;
    let seed = cfg.trainer.master_seed;
    let table_for = |name: &str, scale: f64| PolicyTable::seeded(std::slice::from_ref(task), &mut stream(seed, name, 0), scale);
    let cur = table_for("diagnose-cur", d.cur_scale);
    let old = table_for("diagnose-old", d.old_scale);
    let behavior: Box<dyn TokenPolicy> = match &d.behavior {
        BehaviorChoice::Seeded => Box::new(table_for("diagnose-behavior", d.behavior_scale)),
        BehaviorChoice::Old => Box::new(old.clone()),
        BehaviorChoice::Uniform => Box::new(UniformPolicy::new(task.vocab())),
        BehaviorChoice::Path(p) => Box::new(PathPolicy::new(task.vocab(), task.prompt_id(), p.clone())),
    };
    let beh = BoxedPolicy(behavior.as_ref());

    let mut reports = JsonObject::new();
    let mut mc_worst: f64 = 0.0;
    for kind in EstimatorKind::ALL {
        let r = run_diagnostics(kind, &cur, &old, &beh, task, d.samples, seed)?;
        let se = (r.estimator_variance / r.sample_count as f64).sqrt();
        let dev = (r.estimator_mean - r.exact_j - r.closed_form_bias).abs();
        if se > 0.0 {
            mc_worst = mc_worst.max(dev / se);
        } else if dev > 1e-12 {
            mc_worst = f64::INFINITY;
        }
        reports = reports.raw(kind.name(), r.to_json());
    }
    write(&out.join("diagnostics.json"), &(reports.finish() + "\n"))?;

    let mut checks = Vec::new();
    let proxy = estimator_bias_exact(EstimatorKind::ProxyIs, &cur, &old, &beh, task)?;
    let err = (proxy.closed_form - proxy.expectation_minus_j).abs();
    checks.push(Check {
        name: "proxy IS bias identity",
        passed: Some(err <= 1e-12),
        detail: format!("closed form {} vs enumerated {} (|diff| {:.2e})", f17(proxy.closed_form), f17(proxy.expectation_minus_j), err),
    });
    let gap = support_gap_mass(&cur, &beh, task)?;
    let std_is = estimator_bias_exact(EstimatorKind::StandardIs, &cur, &old, &beh, task)?;
    let err = (std_is.expectation_minus_j + gap).abs().max((std_is.closed_form + gap).abs());
    checks.push(Check {
        name: "standard IS bias equals -support gap",
        passed: Some(err <= 1e-12),
        detail: format!("support gap mass {}, bias {} (|diff| {:.2e})", f17(gap), f17(std_is.expectation_minus_j), err),
    });
    match chi_squared(&cur, &beh, task) {
        Ok(chi2) => {
            let var = ratio_moments_exact(&cur, &beh, task)?.variance;
            let err = (var - chi2).abs();
            checks.push(Check {
                name: "ratio variance equals chi-squared",
                passed: Some(err <= 1e-9 * chi2.max(1.0)),
                detail: format!("variance {} vs chi-squared {} (|diff| {:.2e})", f17(var), f17(chi2), err),
            });
        }
        Err(Error::ZeroMass) => checks.push(Check {
            name: "ratio variance equals chi-squared",
            passed: None,
            detail: "behavior misses part of the support".into(),
        }),
        Err(e) => return Err(e.into()),
    }
    let bound = mis_weight_bound_check(&cur, &cur, &beh, task, 0.5);
    checks.push(Check {
        name: "MIS weight bound with old = cur",
        passed: Some(bound.is_ok()),
        detail: match bound {
            Ok(b) => format!("max token weight {}, max trajectory weight {}", f17(b.max_token_weight), f17(b.max_trajectory_weight)),
            Err(e) => e.to_string(),
        },
    });
    let distortion = max_distortion_factor(&old, &beh, task);
    let old_gap = support_gap_mass(&old, &beh, task)? + support_gap_mass(&beh, &old, task)?;
    checks.push(Check {
        name: "distortion factor below one",
        passed: (old_gap == 0.0).then_some(distortion < 1.0),
        detail: format!("max distortion {}", f17(distortion)),
    });
    let risks = [0.0, 0.25, 0.5, 0.75, 1.0].map(|l| bayes_risk(&old, task, l));
    let risks = risks.into_iter().collect::<rlplus_core::Result<Vec<f64>>>()?;
    checks.push(Check {
        name: "Bayes mixture minimises risk",
        passed: Some(risks.iter().all(|&r| risks[2] <= r + 1e-15)),
        detail: format!("risk at lambda 0, .25, .5, .75, 1: {}", risks.iter().map(|r| format!("{r:.3e}")).collect::<Vec<_>>().join(", ")),
    });
    checks.push(Check {
        name: "sample means match J + bias",
        passed: Some(mc_worst <= 5.0),
        detail: format!("worst deviation {mc_worst:.2} standard errors over {} estimators", EstimatorKind::ALL.len()),
    });

    let text = table(&checks);
    write(&out.join("diagnostics.txt"), &text)?;
    print!("{text}");
    Ok(checks.iter().all(|c| c.passed != Some(false)))
}

/// Lets a boxed trait object stand in for the generic policy parameters.
struct BoxedPolicy<'a>(&'a dyn TokenPolicy);

impl TokenPolicy for BoxedPolicy<'_> {
    fn vocab(&self) -> usize {
        self.0.vocab()
    }

    fn probs_into(&self, state: &rlplus_core::policy::StateKey, out: &mut [f64]) {
        self.0.probs_into(state, out)
    }
}

fn checkpoint_names(paths: &[PathBuf]) -> Vec<String> {
    let stems: Vec<String> = paths
        .iter()
        .map(|p| p.file_stem().map_or("policy".to_string(), |s| s.to_string_lossy().into_owned()))
        .collect();
    stems
        .iter()
        .enumerate()
        .map(|(i, s)| if stems.iter().filter(|t| *t == s).count() > 1 { format!("{s}_{i}") } else { s.clone() })
        .collect()
}

pub fn passk_cmd(cfg: &ExperimentConfig, out: &Path, checkpoints: &[PathBuf]) -> Result<bool> {
    let (prompts, _) = cfg.suite.build()?;
    let names = checkpoint_names(checkpoints);
    let mut reports = Vec::new();
    for (path, name) in checkpoints.iter().zip(names) {
        let policy = read_checkpoint(path)?;
        check_shape(&policy, &prompts, &path.display().to_string())?;
        let report = boundary_curve(&policy, &prompts, cfg.eval.n, &cfg.eval.k_grid, cfg.trainer.master_seed)?;
        write(&out.join(format!("passk_{name}.csv")), &report.to_csv())?;
        reports.push((name, report));
    }
    write(&out.join("passk_merged.csv"), &merged_csv(&reports)?)?;
    Ok(true)
}

fn resolve(choice: &PolicyChoice, prompts: &[TaskSpec], seed: u64, name: &str) -> Result<PolicyTable> {
    let p = match choice {
        PolicyChoice::Uniform => PolicyTable::uniform_for(&prompts[0]),
        PolicyChoice::Seeded(scale) => PolicyTable::seeded(prompts, &mut stream(seed, name, 0), *scale),
        PolicyChoice::Checkpoint(path) => read_checkpoint(path)?,
    };
    check_shape(&p, prompts, name)?;
    Ok(p)
}

pub fn oracle_cmd(cfg: &ExperimentConfig, out: &Path) -> Result<bool> {
    let (prompts, _) = cfg.suite.build()?;
    let seed = cfg.trainer.master_seed;
    let policy = resolve(&cfg.oracle.policy, &prompts, seed, "oracle-policy")?;
    let other = match &cfg.oracle.compare {
        Some(c) => resolve(c, &prompts, seed, "oracle-compare")?,
        None => policy.clone(),
    };
    let k_grid = &cfg.eval.k_grid;
    let mut rows = Vec::new();
    let mut text = format!("prompt  J  chi2  {}\n", k_grid.iter().map(|k| format!("pass@{k}")).collect::<Vec<_>>().join("  "));
    let mut js = Vec::new();
    for task in &prompts {
        let j = exact_success(task, &policy)?;
        let chi2 = match chi_squared(&policy, &other, task) {
            Ok(c) => Some(c),
            Err(Error::ZeroMass) => None,
            Err(e) => return Err(e.into()),
        };
        let passk: Vec<f64> = k_grid.iter().map(|&k| pass_from_success(j, k)).collect();
        text.push_str(&format!(
            "{}  {}  {}  {}\n",
            task.prompt_id(),
            f17(j),
            chi2.map_or("null".to_string(), f17),
            passk.iter().map(|&v| f17(v)).collect::<Vec<_>>().join("  ")
        ));
        rows.push(
            JsonObject::new()
                .int("prompt_id", task.prompt_id() as i128)
                .float("J", j)
                .opt_float("chi_squared", chi2)
                .raw("passk", json_array(passk.iter().map(|&v| json_f64(v))))
                .finish(),
        );
        js.push(j);
    }
    let doc = JsonObject::new()
        .float("mean_J", mean(&js))
        .raw("k_grid", json_array(k_grid.iter().map(|k| k.to_string())))
        .raw("prompts", json_array(rows))
        .finish();
    write(&out.join("oracle.json"), &(doc + "\n"))?;
    print!("{text}");
    Ok(true)
}
