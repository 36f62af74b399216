use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::{run_episode, EvalError, Runner};
use crate::runtime::{amortized_cost, COST_WINDOW};
use crate::simenv::{Catalog, EvalSplit};

pub const MIN_TIMING_EPISODES: usize = 30;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingRow {
    pub runner: String,
    pub episodes: usize,
    /// Per-episode means over the cost window, then mean / median across
    /// episodes.
    pub mean_wall_ns: f64,
    pub median_wall_ns: f64,
    pub mean_flops: f64,
    /// Exact mean flops per step as `(numerator, denominator)`.
    pub mean_flops_exact: (u128, u128),
    pub lsys2_runs: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimingTable {
    pub rows: Vec<TimingRow>,
}

impl TimingTable {
    pub fn row(&self, runner: &str) -> Result<&TimingRow, EvalError> {
        self.rows
            .iter()
            .find(|r| r.runner == runner)
            .ok_or_else(|| EvalError::Benchmark(format!("no timing row for {runner}")))
    }

    /// `fast <= mid < slow` on median wall time.
    pub fn check_ordering(&self, fast: &str, mid: &str, slow: &str) -> Result<(), EvalError> {
        let (f, m, s) = (self.row(fast)?, self.row(mid)?, self.row(slow)?);
        if f.median_wall_ns <= m.median_wall_ns && m.median_wall_ns < s.median_wall_ns {
            Ok(())
        } else {
            Err(EvalError::Benchmark(format!(
                "median wall ns {fast} {:.0}, {mid} {:.0}, {slow} {:.0} out of order",
                f.median_wall_ns, m.median_wall_ns, s.median_wall_ns
            )))
        }
    }

    /// `small <= dual <= max_overhead * small` and
    /// `large >= min_speedup * dual`, on median wall time.
    pub fn check_speed_gate(
        &self,
        small: &str,
        dual: &str,
        large: &str,
        max_overhead: f64,
        min_speedup: f64,
    ) -> Result<(), EvalError> {
        let (s, d, l) = (
            self.row(small)?.median_wall_ns,
            self.row(dual)?.median_wall_ns,
            self.row(large)?.median_wall_ns,
        );
        let mut failures = Vec::new();
        if s > d {
            failures.push(format!("{small} ({s:.0} ns) slower than {dual} ({d:.0} ns)"));
        }
        if d > max_overhead * s {
            failures.push(format!("{dual} is {:.2}x {small}, limit {max_overhead}", d / s));
        }
        if l < min_speedup * d {
            failures.push(format!("{large} is only {:.2}x {dual}, need {min_speedup}", l / d));
        }
        if failures.is_empty() {
            Ok(())
        } else {
            Err(EvalError::Benchmark(failures.join("; ")))
        }
    }

    pub fn to_markdown(&self) -> String {
        let mut s = String::from(
            "| runner | episodes | mean s/step | median s/step | mean flops/step | large-model runs |\n|---|---|---|---|---|---|\n",
        );
        for r in &self.rows {
            s += &format!(
                "| {} | {} | {:.6} | {:.6} | {:.0} | {} |\n",
                r.runner,
                r.episodes,
                r.mean_wall_ns / 1e9,
                r.median_wall_ns / 1e9,
                r.mean_flops,
                r.lsys2_runs
            );
        }
        s
    }
}

fn median(mut xs: Vec<f64>) -> f64 {
    xs.sort_by(f64::total_cmp);
    let n = xs.len();
    if n % 2 == 1 {
        xs[n / 2]
    } else {
        (xs[n / 2 - 1] + xs[n / 2]) / 2.0
    }
}

/// Runs every runner on the same episodes, each exactly one cost window
/// long, interleaving runners episode by episode. Single-threaded.
pub fn timing_bench(
    catalog: &Catalog,
    split: &EvalSplit,
    runners: &[(&str, Runner<'_>)],
    episodes: usize,
    seed: u64,
) -> Result<TimingTable, EvalError> {
    if episodes < MIN_TIMING_EPISODES {
        return Err(EvalError::Protocol(format!(
            "timing needs at least {MIN_TIMING_EPISODES} episodes, got {episodes}"
        )));
    }
    let n_tasks = catalog.tasks.len();
    let per_task = episodes.div_ceil(n_tasks);
    let specs = catalog
        .tasks
        .iter()
        .map(|d| split.eval_specs(d, per_task, seed))
        .collect::<Result<Vec<_>, _>>()?;
    let mut walls = vec![Vec::with_capacity(episodes); runners.len()];
    let mut flops = vec![Ratio::from_integer(0u128); runners.len()];
    let mut runs = vec![0u64; runners.len()];
    for e in 0..episodes {
        let spec = &specs[e % n_tasks][e / n_tasks];
        for (i, (_, runner)) in runners.iter().enumerate() {
            let o = run_episode(catalog, *runner, spec, COST_WINDOW, Some(COST_WINDOW), seed ^ e as u64)?;
            let c = amortized_cost(&o.trace)?;
            walls[i].push(c.mean_wall_ns as f64);
            flops[i] += c.mean_flops;
            runs[i] += c.lsys2_runs;
        }
    }
    let rows = runners
        .iter()
        .enumerate()
        .map(|(i, (name, _))| {
            let mean_flops = flops[i] / episodes as u128;
            TimingRow {
                runner: name.to_string(),
                episodes,
                mean_wall_ns: walls[i].iter().sum::<f64>() / episodes as f64,
                median_wall_ns: median(walls[i].clone()),
                mean_flops: *mean_flops.numer() as f64 / *mean_flops.denom() as f64,
                mean_flops_exact: (*mean_flops.numer(), *mean_flops.denom()),
                lsys2_runs: runs[i],
            }
        })
        .collect();
    Ok(TimingTable { rows })
}
