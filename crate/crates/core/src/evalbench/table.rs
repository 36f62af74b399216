use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{EvalError, VariantSet};
use crate::simenv::Catalog;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TaskRow {
    pub task: String,
    pub category: String,
    pub successes: usize,
    pub trials: usize,
}

impl TaskRow {
    pub fn rate(&self) -> f64 {
        if self.trials == 0 {
            0.0
        } else {
            self.successes as f64 / self.trials as f64
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ResultTable {
    pub runner: String,
    pub variant_set: VariantSet,
    pub protocol_hash: String,
    pub metadata: BTreeMap<String, String>,
    pub rows: Vec<TaskRow>,
}

#[derive(Serialize, Deserialize)]
struct CsvRow {
    runner: String,
    task: String,
    variant_set: String,
    successes: usize,
    trials: usize,
    rate: f64,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let (mut s, mut n) = (0.0, 0usize);
    for x in xs {
        s += x;
        n += 1;
    }
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

impl ResultTable {
    /// Unweighted mean of per-task rates.
    pub fn overall(&self) -> f64 {
        mean(self.rows.iter().map(TaskRow::rate))
    }

    pub fn rate(&self, task: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.task == task).map(TaskRow::rate)
    }

    /// Unweighted mean over the rows whose task satisfies `keep`.
    pub fn mean_where(&self, keep: impl Fn(&str) -> bool) -> f64 {
        mean(self.rows.iter().filter(|r| keep(&r.task)).map(TaskRow::rate))
    }

    /// Per-category unweighted means, in first-appearance order.
    pub fn category_rates(&self) -> Vec<(String, f64)> {
        let mut order: Vec<String> = Vec::new();
        for r in &self.rows {
            if !order.contains(&r.category) {
                order.push(r.category.clone());
            }
        }
        order
            .into_iter()
            .map(|c| {
                let m = mean(self.rows.iter().filter(|r| r.category == c).map(TaskRow::rate));
                (c, m)
            })
            .collect()
    }

    pub fn to_csv(&self) -> Result<String, EvalError> {
        let mut w = csv::Writer::from_writer(Vec::new());
        for r in &self.rows {
            w.serialize(CsvRow {
                runner: self.runner.clone(),
                task: r.task.clone(),
                variant_set: format!("{:?}", self.variant_set),
                successes: r.successes,
                trials: r.trials,
                rate: r.rate(),
            })
            .map_err(|e| EvalError::Report(e.to_string()))?;
        }
        let bytes = w.into_inner().map_err(|e| EvalError::Report(e.to_string()))?;
        String::from_utf8(bytes).map_err(|e| EvalError::Report(e.to_string()))
    }

    /// Parses rows written by [`ResultTable::to_csv`] for one runner.
    /// Categories come from the catalog; metadata is not part of the CSV.
    pub fn from_csv(text: &str, catalog: &Catalog, protocol_hash: &str) -> Result<Self, EvalError> {
        let mut rdr = csv::Reader::from_reader(text.as_bytes());
        let mut table: Option<ResultTable> = None;
        for rec in rdr.deserialize::<CsvRow>() {
            let rec = rec.map_err(|e| EvalError::Report(e.to_string()))?;
            let variant_set = match rec.variant_set.as_str() {
                "Seen" => VariantSet::Seen,
                "Unseen" => VariantSet::Unseen,
                other => return Err(EvalError::Report(format!("unknown variant set {other}"))),
            };
            let t = table.get_or_insert_with(|| ResultTable {
                runner: rec.runner.clone(),
                variant_set,
                protocol_hash: protocol_hash.to_string(),
                metadata: BTreeMap::new(),
                rows: Vec::new(),
            });
            if t.runner != rec.runner || t.variant_set != variant_set {
                return Err(EvalError::Report("CSV mixes runners or variant sets".into()));
            }
            let def = catalog.by_name(&rec.task)?;
            t.rows.push(TaskRow {
                task: rec.task,
                category: def.category.clone(),
                successes: rec.successes,
                trials: rec.trials,
            });
        }
        table.ok_or_else(|| EvalError::Report("empty CSV".into()))
    }

    /// One row per task, one per category, then the overall mean.
    pub fn to_markdown(&self) -> String {
        let mut s = format!(
            "### {} ({:?})\n\n| task | category | success | rate |\n|---|---|---|---|\n",
            self.runner, self.variant_set
        );
        for r in &self.rows {
            s += &format!("| {} | {} | {}/{} | {:.3} |\n", r.task, r.category, r.successes, r.trials, r.rate());
        }
        for (c, m) in self.category_rates() {
            s += &format!("| *{c}* | | | {m:.3} |\n");
        }
        s += &format!("| **overall** | | | {:.3} |\n", self.overall());
        s
    }
}

/// Writes `<name>.csv` (all tables) and `<name>.md` under `dir`.
/// All tables must share one protocol hash.
pub fn write_report(dir: &Path, name: &str, tables: &[&ResultTable]) -> Result<Vec<PathBuf>, EvalError> {
    let first = tables
        .first()
        .ok_or_else(|| EvalError::Report("no tables to report".into()))?;
    if let Some(t) = tables.iter().find(|t| t.protocol_hash != first.protocol_hash) {
        return Err(EvalError::Report(format!(
            "runner {} was evaluated under a different protocol",
            t.runner
        )));
    }
    let mut csv_text = String::new();
    let mut md = format!("## {name}\n\nprotocol `{}`\n\n", first.protocol_hash);
    for (i, t) in tables.iter().enumerate() {
        let c = t.to_csv()?;
        // Keep only the first header.
        csv_text += if i == 0 { &c } else { c.split_once('\n').map_or("", |x| x.1) };
        md += &t.to_markdown();
        md.push('\n');
    }
    std::fs::create_dir_all(dir)?;
    let csv_path = dir.join(format!("{name}.csv"));
    let md_path = dir.join(format!("{name}.md"));
    std::fs::write(&csv_path, csv_text)?;
    std::fs::write(&md_path, md)?;
    Ok(vec![csv_path, md_path])
}

#[cfg(test)]
mod tests {
    use super::*;

    fn table() -> ResultTable {
        let c = Catalog::standard();
        ResultTable {
            runner: "dp".into(),
            variant_set: VariantSet::Unseen,
            protocol_hash: "p".into(),
            metadata: BTreeMap::new(),
            rows: c
                .tasks
                .iter()
                .enumerate()
                .map(|(i, t)| TaskRow {
                    task: t.name.clone(),
                    category: t.category.clone(),
                    successes: i * 3 % 50,
                    trials: 50,
                })
                .collect(),
        }
    }

    #[test]
    fn csv_roundtrip_and_overall() {
        let t = table();
        let csv = t.to_csv().unwrap();
        let back = ResultTable::from_csv(&csv, &Catalog::standard(), "p").unwrap();
        assert_eq!(back, t);
        let mut rdr = csv::Reader::from_reader(csv.as_bytes());
        let rates: Vec<f64> = rdr.deserialize::<CsvRow>().map(|r| r.unwrap().rate).collect();
        let recomputed = rates.iter().sum::<f64>() / rates.len() as f64;
        assert!((recomputed - t.overall()).abs() < 1e-12);
    }

    #[test]
    fn markdown_row_count() {
        let t = table();
        let md = t.to_markdown();
        let rows = md.lines().filter(|l| l.starts_with("| ") && !l.starts_with("| task")).count();
        assert_eq!(rows, 12 + t.category_rates().len() + 1);
    }

    #[test]
    fn mixed_protocols_rejected() {
        let a = table();
        let mut b = table();
        b.protocol_hash = "q".into();
        let dir = tempfile::tempdir().unwrap();
        assert!(matches!(write_report(dir.path(), "r", &[&a, &b]), Err(EvalError::Report(_))));
        let files = write_report(dir.path(), "r", &[&a, &a]).unwrap();
        let csv = std::fs::read_to_string(&files[0]).unwrap();
        assert_eq!(csv.lines().count(), 1 + 24);
    }
}
