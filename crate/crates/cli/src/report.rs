//! Markdown accuracy tables from aggregated CSVs.

use std::collections::BTreeMap;
use std::io::Read;

use serde::Deserialize;

use crate::error::{CliError, Result};

/// Row name every Diff. column is measured against.
pub const REFERENCE_METHOD: &str = "C";

#[derive(Debug, Clone, PartialEq, Deserialize)]
pub struct AggregatedRow {
    pub method: String,
    pub size: usize,
    pub mean: f64,
    pub std: Option<f64>,
}

pub fn read_aggregated<R: Read>(input: R) -> Result<Vec<AggregatedRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .collect::<std::result::Result<_, _>>()
        .map_err(|e| CliError::Report(e.to_string()))
}

/// Per-method accuracies on a shared size grid.
#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub sizes: Vec<usize>,
    /// `(method, mean per size)` in first-seen order.
    pub methods: Vec<(String, Vec<f64>)>,
}

impl AccuracyTable {
    /// Fails on duplicate (method, size) rows or methods covering different sizes.
    pub fn from_rows(rows: &[AggregatedRow]) -> Result<Self> {
        let mut order: Vec<String> = Vec::new();
        let mut cells: BTreeMap<(String, usize), f64> = BTreeMap::new();
        for r in rows {
            if !order.contains(&r.method) {
                order.push(r.method.clone());
            }
            if cells.insert((r.method.clone(), r.size), r.mean).is_some() {
                return Err(CliError::Report(format!(
                    "duplicate entry for {} size {}",
                    r.method, r.size
                )));
            }
        }
        let sizes_of = |m: &str| -> Vec<usize> {
            cells
                .keys()
                .filter(|(k, _)| k == m)
                .map(|(_, n)| *n)
                .collect()
        };
        let first = order
            .first()
            .ok_or_else(|| CliError::Report("no rows".into()))?;
        let sizes = sizes_of(first);
        let mismatched: Vec<String> = order
            .iter()
            .filter(|m| sizes_of(m) != sizes)
            .map(|m| format!("{m} has sizes {:?}", sizes_of(m)))
            .collect();
        if !mismatched.is_empty() {
            return Err(CliError::Report(format!(
                "inconsistent size sets: {first} has sizes {sizes:?}, {}",
                mismatched.join(", ")
            )));
        }
        let methods = order
            .into_iter()
            .map(|m| {
                let vals = sizes.iter().map(|n| cells[&(m.clone(), *n)]).collect();
                (m, vals)
            })
            .collect();
        Ok(Self { sizes, methods })
    }

    pub fn average(values: &[f64]) -> f64 {
        values.iter().sum::<f64>() / values.len() as f64
    }

    /// Average minus the reference method's average, when that method is present.
    pub fn diffs(&self) -> Vec<Option<f64>> {
        let reference = self
            .methods
            .iter()
            .find(|(m, _)| m == REFERENCE_METHOD)
            .map(|(_, v)| Self::average(v));
        self.methods
            .iter()
            .map(|(_, v)| reference.map(|r| Self::average(v) - r))
            .collect()
    }

    pub fn to_markdown(&self) -> String {
        let mut out = String::from("| Method |");
        for n in &self.sizes {
            out.push_str(&format!(" {n} |"));
        }
        out.push_str(" Avg. | Diff. |\n|---|");
        out.push_str(&"---:|".repeat(self.sizes.len() + 2));
        out.push('\n');
        for ((method, vals), diff) in self.methods.iter().zip(self.diffs()) {
            out.push_str(&format!("| {method} |"));
            for v in vals {
                out.push_str(&format!(" {v:.2} |"));
            }
            let diff = diff.map_or("n/a".to_string(), |d| format!("{d:+.2}"));
            out.push_str(&format!(" {:.2} | {diff} |\n", Self::average(vals)));
        }
        out
    }

    /// `method,size,accuracy` series for accuracy-versus-size curves.
    pub fn series_csv(&self) -> Result<Vec<u8>> {
        let mut w = csv::Writer::from_writer(Vec::new());
        let csv_err = |e: csv::Error| CliError::Report(e.to_string());
        w.write_record(["method", "size", "accuracy"])
            .map_err(csv_err)?;
        for (method, vals) in &self.methods {
            for (n, v) in self.sizes.iter().zip(vals) {
                w.write_record([method.clone(), n.to_string(), v.to_string()])
                    .map_err(csv_err)?;
            }
        }
        w.into_inner().map_err(|e| CliError::Report(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn row(method: &str, size: usize, mean: f64) -> AggregatedRow {
        AggregatedRow {
            method: method.into(),
            size,
            mean,
            std: None,
        }
    }

    #[test]
    fn single_method_gives_one_row() {
        let t = AccuracyTable::from_rows(&[row("mdc", 1, 50.0), row("mdc", 2, 60.0)]).unwrap();
        assert_eq!(t.methods.len(), 1);
        let md = t.to_markdown();
        assert_eq!(md.lines().count(), 3);
        assert!(md.contains("| mdc | 50.00 | 60.00 | 55.00 | n/a |"));
    }

    #[test]
    fn reference_row_has_zero_diff_and_avg_is_row_mean() {
        let rows = [
            row("C", 1, 27.5),
            row("C", 2, 60.0),
            row("mdc", 1, 49.66),
            row("mdc", 2, 61.0),
        ];
        let t = AccuracyTable::from_rows(&rows).unwrap();
        let d = t.diffs();
        assert_eq!(d[0], Some(0.0));
        let want = (49.66 + 61.0) / 2.0 - (27.5 + 60.0) / 2.0;
        assert!((d[1].unwrap() - want).abs() < 1e-9);
        for (_, vals) in &t.methods {
            let direct = vals.iter().sum::<f64>() / vals.len() as f64;
            assert!((AccuracyTable::average(vals) - direct).abs() < 1e-9);
        }
        assert!(t
            .to_markdown()
            .contains("| C | 27.50 | 60.00 | 43.75 | +0.00 |"));
    }

    #[test]
    fn mismatched_sizes_are_listed() {
        let rows = [row("C", 1, 1.0), row("C", 2, 2.0), row("A", 1, 3.0)];
        let err = AccuracyTable::from_rows(&rows).unwrap_err().to_string();
        assert!(
            err.contains("C has sizes [1, 2]") && err.contains("A has sizes [1]"),
            "{err}"
        );
        assert!(AccuracyTable::from_rows(&[row("C", 1, 1.0), row("C", 1, 2.0)]).is_err());
    }

    #[test]
    fn aggregated_csv_parses_with_missing_std() {
        let text = "method,size,mean,std\nC,1,27.5,\nC,2,60,1.5\n";
        let rows = read_aggregated(text.as_bytes()).unwrap();
        assert_eq!(rows[0].std, None);
        assert_eq!(rows[1].std, Some(1.5));
    }
}
