use std::io::{BufRead, Write};

use num_rational::Ratio;
use serde::{Deserialize, Serialize};

use super::RuntimeError;

pub const TRACE_SCHEMA: &str = "dptrace/1";

/// Frames averaged by [`amortized_cost`].
pub const COST_WINDOW: usize = 50;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TraceRow {
    pub step: usize,
    pub ran_lsys2: bool,
    /// Large-model executions charged to this step (0 or 1 in practice).
    pub lsys2_runs: u32,
    pub ran_ssys1: bool,
    pub lsys2_wall_ns: u64,
    pub ssys1_wall_ns: u64,
    pub lsys2_flops: u64,
    pub ssys1_flops: u64,
}

impl TraceRow {
    pub fn flops(&self) -> u64 {
        self.lsys2_flops + self.ssys1_flops
    }

    pub fn wall_ns(&self) -> u64 {
        self.lsys2_wall_ns + self.ssys1_wall_ns
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct ScheduleTrace {
    pub rows: Vec<TraceRow>,
}

#[derive(Serialize, Deserialize)]
struct JsonRow {
    schema: String,
    #[serde(flatten)]
    row: TraceRow,
}

impl ScheduleTrace {
    pub fn lsys2_runs(&self) -> u64 {
        self.rows.iter().map(|r| r.lsys2_runs as u64).sum()
    }

    pub fn ssys1_runs(&self) -> usize {
        self.rows.iter().filter(|r| r.ran_ssys1).count()
    }

    pub fn total_flops(&self) -> u128 {
        self.rows.iter().map(|r| r.flops() as u128).sum()
    }

    pub fn write_jsonl<W: Write>(&self, mut w: W) -> Result<(), RuntimeError> {
        for row in &self.rows {
            let line = serde_json::to_string(&JsonRow {
                schema: TRACE_SCHEMA.into(),
                row: row.clone(),
            })
            .map_err(|e| RuntimeError::Format(e.to_string()))?;
            writeln!(w, "{line}")?;
        }
        Ok(())
    }

    pub fn read_jsonl<R: BufRead>(r: R) -> Result<Self, RuntimeError> {
        let mut rows = Vec::new();
        for line in r.lines() {
            let line = line?;
            if line.trim().is_empty() {
                continue;
            }
            let j: JsonRow = serde_json::from_str(&line).map_err(|e| RuntimeError::Format(e.to_string()))?;
            if j.schema != TRACE_SCHEMA {
                return Err(RuntimeError::Format(format!("unsupported trace schema {}", j.schema)));
            }
            rows.push(j.row);
        }
        Ok(Self { rows })
    }
}

/// Per-step cost averaged over the first `min(50, n)` frames, including the
/// frame that carries any large-model run.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AmortizedCost {
    pub window: usize,
    pub lsys2_runs: u64,
    pub lsys2_flops: u128,
    pub ssys1_flops: u128,
    pub mean_flops: Ratio<u128>,
    pub mean_wall_ns: u64,
}

pub fn amortized_cost(trace: &ScheduleTrace) -> Result<AmortizedCost, RuntimeError> {
    if trace.rows.is_empty() {
        return Err(RuntimeError::State("empty trace".into()));
    }
    let rows = &trace.rows[..trace.rows.len().min(COST_WINDOW)];
    let n = rows.len();
    let lsys2_flops: u128 = rows.iter().map(|r| r.lsys2_flops as u128).sum();
    let ssys1_flops: u128 = rows.iter().map(|r| r.ssys1_flops as u128).sum();
    let wall: u128 = rows.iter().map(|r| r.wall_ns() as u128).sum();
    Ok(AmortizedCost {
        window: n,
        lsys2_runs: rows.iter().map(|r| r.lsys2_runs as u64).sum(),
        lsys2_flops,
        ssys1_flops,
        mean_flops: Ratio::new(lsys2_flops + ssys1_flops, n as u128),
        mean_wall_ns: (wall / n as u128) as u64,
    })
}

/// `flops(f_s) + k * flops(f_l) / min(50, n)`.
pub fn predicted_mean_flops(ssys1_flops: u64, lsys2_flops: u64, runs: u64, steps: usize) -> Ratio<u128> {
    let w = steps.min(COST_WINDOW) as u128;
    Ratio::from_integer(ssys1_flops as u128) + Ratio::new(runs as u128 * lsys2_flops as u128, w)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(n: usize, every: bool) -> ScheduleTrace {
        ScheduleTrace {
            rows: (0..n)
                .map(|t| {
                    let run = every || t == 0;
                    TraceRow {
                        step: t,
                        ran_lsys2: run,
                        lsys2_runs: run as u32,
                        ran_ssys1: true,
                        lsys2_wall_ns: if run { 1000 } else { 0 },
                        ssys1_wall_ns: 10,
                        lsys2_flops: if run { 777 } else { 0 },
                        ssys1_flops: 13,
                    }
                })
                .collect(),
        }
    }

    #[test]
    fn closed_forms() {
        let c = amortized_cost(&trace(50, false)).unwrap();
        assert_eq!(c.mean_flops, Ratio::new(13 * 50 + 777, 50));
        assert_eq!(c.mean_flops, predicted_mean_flops(13, 777, 1, 50));
        let e = amortized_cost(&trace(200, true)).unwrap();
        assert_eq!(e.window, 50);
        assert_eq!(e.mean_flops, Ratio::from_integer(790));
        assert!(c.mean_flops < e.mean_flops);
        assert!(amortized_cost(&ScheduleTrace::default()).is_err());
    }

    #[test]
    fn jsonl_roundtrip() {
        let t = trace(7, false);
        let mut buf = Vec::new();
        t.write_jsonl(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text.lines().count(), 7);
        assert!(text.lines().all(|l| l.contains("\"schema\":\"dptrace/1\"")));
        assert_eq!(ScheduleTrace::read_jsonl(&buf[..]).unwrap(), t);
    }
}
