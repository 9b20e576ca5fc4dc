//! pass@k estimation, capability-boundary curves and simple trend summaries.

use crate::env::{exact_success, TaskSpec};
use crate::error::{Error, Result};
use crate::fmt::f17;
use crate::par;
use crate::policy::{sample_trajectory, TokenPolicy};
use crate::rng::stream;

pub const DEFAULT_K_GRID: [usize; 9] = [1, 2, 4, 8, 16, 32, 64, 128, 256];

/// Unbiased pass@k from `c` successes in `n` attempts,
/// `1 - C(n-c, k) / C(n, k)`, as a product of ratios.
pub fn pass_at_k(n: usize, c: usize, k: usize) -> Result<f64> {
    if c > n {
        return Err(Error::Domain(format!("c = {c} exceeds n = {n}")));
    }
    if k == 0 || k > n {
        return Err(Error::Domain(format!("k = {k} outside 1..={n}")));
    }
    if n - c < k {
        return Ok(1.0);
    }
    // C(n-c, k) / C(n, k) = prod_{i = n-c+1}^{n} (1 - k / i)
    let miss: f64 = ((n - c + 1)..=n).map(|i| 1.0 - k as f64 / i as f64).product();
    Ok(1.0 - miss)
}

/// `1 - (1 - J)^k` with `J` enumerated.
pub fn exact_pass_at_k<P: TokenPolicy>(policy: &P, task: &TaskSpec, k: usize) -> Result<f64> {
    let p = exact_success(task, policy)?;
    Ok(pass_from_success(p, k))
}

pub fn pass_from_success(p_success: f64, k: usize) -> f64 {
    1.0 - (1.0 - p_success.clamp(0.0, 1.0)).powi(k as i32)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PromptCounts {
    pub prompt_id: u32,
    pub n: usize,
    pub c: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PassAtKReport {
    pub k_grid: Vec<usize>,
    pub prompts: Vec<PromptCounts>,
}

impl PassAtKReport {
    pub fn new(k_grid: Vec<usize>, prompts: Vec<PromptCounts>) -> Result<Self> {
        if k_grid.is_empty() {
            return Err(Error::Empty("k grid"));
        }
        if prompts.is_empty() {
            return Err(Error::Empty("prompt list"));
        }
        let max_k = *k_grid.iter().max().unwrap();
        for p in &prompts {
            if p.c > p.n || max_k > p.n || k_grid.contains(&0) {
                return Err(Error::Domain(format!("prompt {} has n = {}, c = {}, max k = {max_k}", p.prompt_id, p.n, p.c)));
            }
        }
        Ok(PassAtKReport { k_grid, prompts })
    }

    /// pass@k for each prompt, rows aligned with `prompts`, columns with `k_grid`.
    pub fn per_prompt(&self) -> Vec<Vec<f64>> {
        self.prompts
            .iter()
            .map(|p| self.k_grid.iter().map(|&k| pass_at_k(p.n, p.c, k).expect("validated")).collect())
            .collect()
    }

    /// Mean over prompts, one entry per k.
    pub fn mean_curve(&self) -> Vec<f64> {
        let rows = self.per_prompt();
        (0..self.k_grid.len())
            .map(|j| rows.iter().map(|r| r[j]).sum::<f64>() / rows.len() as f64)
            .collect()
    }

    pub fn mean_at(&self, k: usize) -> Option<f64> {
        let j = self.k_grid.iter().position(|&x| x == k)?;
        Some(self.mean_curve()[j])
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("prompt_id,n,c,k,passk\n");
        for (p, row) in self.prompts.iter().zip(self.per_prompt()) {
            for (k, v) in self.k_grid.iter().zip(row) {
                out.push_str(&format!("{},{},{},{},{}\n", p.prompt_id, p.n, p.c, k, f17(v)));
            }
        }
        out
    }
}

/// One CSV with a value column per named report, rows keyed by
/// `(prompt_id, k)`. Reports must share prompts and grid.
pub fn merged_csv(reports: &[(String, PassAtKReport)]) -> Result<String> {
    let (_, first) = reports.first().ok_or(Error::Empty("report list"))?;
    let ids: Vec<u32> = first.prompts.iter().map(|p| p.prompt_id).collect();
    for (name, r) in reports {
        let other: Vec<u32> = r.prompts.iter().map(|p| p.prompt_id).collect();
        if other != ids || r.k_grid != first.k_grid {
            return Err(Error::Domain(format!("report {name} is not aligned with the first")));
        }
    }
    let mut out = String::from("prompt_id,k");
    for (name, _) in reports {
        out.push(',');
        out.push_str(name);
    }
    out.push('\n');
    let tables: Vec<Vec<Vec<f64>>> = reports.iter().map(|(_, r)| r.per_prompt()).collect();
    for (i, id) in ids.iter().enumerate() {
        for (j, k) in first.k_grid.iter().enumerate() {
            out.push_str(&format!("{id},{k}"));
            for t in &tables {
                out.push(',');
                out.push_str(&f17(t[i][j]));
            }
            out.push('\n');
        }
    }
    Ok(out)
}

/// Sample `n` attempts per prompt and evaluate pass@k over the grid.
pub fn boundary_curve<P: TokenPolicy>(policy: &P, prompts: &[TaskSpec], n: usize, k_grid: &[usize], seed: u64) -> Result<PassAtKReport> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompt list"));
    }
    let counts = par::map_slice(prompts, |task| {
        let mut rng = stream(seed, "passk", task.prompt_id() as u64);
        let c = (0..n).filter(|_| sample_trajectory(policy, task, &mut rng).reward > 0.0).count();
        PromptCounts { prompt_id: task.prompt_id(), n, c }
    });
    PassAtKReport::new(k_grid.to_vec(), counts)
}

/// Exact mean pass@k over prompts for each k.
pub fn exact_boundary_curve<P: TokenPolicy>(policy: &P, prompts: &[TaskSpec], k_grid: &[usize]) -> Result<Vec<f64>> {
    if prompts.is_empty() {
        return Err(Error::Empty("prompt list"));
    }
    let success = prompts.iter().map(|t| exact_success(t, policy)).collect::<Result<Vec<f64>>>()?;
    Ok(k_grid
        .iter()
        .map(|&k| success.iter().map(|&p| pass_from_success(p, k)).sum::<f64>() / success.len() as f64)
        .collect())
}

/// Summary of a logged series such as per-step entropy or reward.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Trend {
    pub first: f64,
    pub last: f64,
    pub min: f64,
    pub max: f64,
    /// Mean of the final `window` entries.
    pub tail_mean: f64,
    /// Least-squares slope per step.
    pub slope: f64,
}

pub fn trend(values: &[f64], window: usize) -> Result<Trend> {
    if values.is_empty() {
        return Err(Error::Empty("series"));
    }
    let w = window.clamp(1, values.len());
    let tail = &values[values.len() - w..];
    let n = values.len() as f64;
    let mean_x = (n - 1.0) / 2.0;
    let mean_y = values.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx) = (0.0, 0.0);
    for (i, y) in values.iter().enumerate() {
        let dx = i as f64 - mean_x;
        sxy += dx * (y - mean_y);
        sxx += dx * dx;
    }
    Ok(Trend {
        first: values[0],
        last: values[values.len() - 1],
        min: values.iter().copied().fold(f64::INFINITY, f64::min),
        max: values.iter().copied().fold(f64::NEG_INFINITY, f64::max),
        tail_mean: tail.iter().sum::<f64>() / w as f64,
        slope: if sxx > 0.0 { sxy / sxx } else { 0.0 },
    })
}
