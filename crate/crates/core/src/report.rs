//! Cross-run comparison tables and plot-ready series from saved metrics logs.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::path::Path;

use crate::runner::{MetricsLog, HISTOGRAM_BINS};
use crate::Result;

/// One completed run.
#[derive(Debug, Clone)]
pub struct RunRecord {
    pub name: String,
    pub log: MetricsLog,
}

impl RunRecord {
    pub fn load(path: &Path) -> Result<Self> {
        let log: MetricsLog = serde_json::from_str(&std::fs::read_to_string(path)?)?;
        let name = path
            .parent()
            .and_then(|p| p.file_name())
            .map(|n| n.to_string_lossy().into_owned())
            .filter(|n| !n.is_empty())
            .unwrap_or_else(|| path.display().to_string());
        Ok(Self { name, log })
    }

    /// Acquisition mode plus loss weights, e.g. `entropy(1,1,1)`.
    pub fn method(&self) -> String {
        let w = &self.log.weights;
        let mode = serde_json::to_value(self.log.mode)
            .ok()
            .and_then(|v| v.as_str().map(str::to_owned))
            .unwrap_or_default();
        format!("{mode}({},{},{})", w.similarity, w.reliability, w.task)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct AccuracyTable {
    pub budgets: Vec<f64>,
    pub columns: Vec<String>,
    /// `cells[b][c]`: accuracy of column `c` at budget `b`; `None` when that
    /// run did not use the budget or never reached it.
    pub cells: Vec<Vec<Option<f64>>>,
    /// Per-budget `mean(second method) − mean(first method)` when exactly two
    /// methods were compared over the same seeds.
    pub deltas: Option<(String, String, Vec<Option<f64>>)>,
    pub warnings: Vec<String>,
}

fn same_budget(a: f64, b: f64) -> bool {
    (a - b).abs() < 1e-9
}

pub fn accuracy_table(runs: &[RunRecord]) -> AccuracyTable {
    let mut budgets: Vec<f64> = Vec::new();
    for r in runs {
        for &b in &r.log.budgets {
            if !budgets.iter().any(|&x| same_budget(x, b)) {
                budgets.push(b);
            }
        }
    }
    budgets.sort_by(f64::total_cmp);
    let mut warnings = Vec::new();
    for r in runs {
        let missing: Vec<f64> = budgets
            .iter()
            .copied()
            .filter(|&b| !r.log.budgets.iter().any(|&x| same_budget(x, b)))
            .collect();
        if !missing.is_empty() {
            warnings.push(format!(
                "run {} has a different budget grid; cells at {missing:?}% left blank",
                r.name
            ));
        }
    }
    let cells = budgets
        .iter()
        .map(|&b| {
            runs.iter()
                .map(|r| {
                    if r.log.budgets.iter().any(|&x| same_budget(x, b)) {
                        r.log.accuracy_at(b)
                    } else {
                        None
                    }
                })
                .collect()
        })
        .collect::<Vec<Vec<Option<f64>>>>();

    let mut by_method: BTreeMap<String, Vec<usize>> = BTreeMap::new();
    let mut order: Vec<String> = Vec::new();
    for (i, r) in runs.iter().enumerate() {
        let m = r.method();
        if !by_method.contains_key(&m) {
            order.push(m.clone());
        }
        by_method.entry(m).or_default().push(i);
    }
    let deltas = if order.len() == 2 {
        let seeds = |m: &str| {
            let mut s: Vec<u64> = by_method[m].iter().map(|&i| runs[i].log.seed).collect();
            s.sort_unstable();
            s
        };
        if seeds(&order[0]) == seeds(&order[1]) {
            let per_budget = cells
                .iter()
                .map(|row| {
                    let mean = |m: &str| {
                        let vals: Option<Vec<f64>> = by_method[m].iter().map(|&i| row[i]).collect();
                        vals.map(|v| v.iter().sum::<f64>() / v.len() as f64)
                    };
                    Some(mean(&order[1])? - mean(&order[0])?)
                })
                .collect();
            Some((order[0].clone(), order[1].clone(), per_budget))
        } else {
            warnings.push("the two methods were run on different seeds; no paired deltas".into());
            None
        }
    } else {
        None
    };
    AccuracyTable {
        budgets,
        columns: runs.iter().map(|r| format!("{} {} seed={}", r.name, r.method(), r.log.seed)).collect(),
        cells,
        deltas,
        warnings,
    }
}

fn cell(v: Option<f64>) -> String {
    v.map(|x| format!("{x:.4}")).unwrap_or_default()
}

impl AccuracyTable {
    pub fn to_csv(&self) -> String {
        let mut out = String::from("budget_percent");
        for c in &self.columns {
            out.push(',');
            out.push_str(&csv_field(c));
        }
        if let Some((a, b, _)) = &self.deltas {
            out.push(',');
            out.push_str(&csv_field(&format!("delta {b} - {a}")));
        }
        out.push('\n');
        for (i, b) in self.budgets.iter().enumerate() {
            let _ = write!(out, "{b}");
            for v in &self.cells[i] {
                out.push(',');
                out.push_str(&cell(*v));
            }
            if let Some((_, _, d)) = &self.deltas {
                out.push(',');
                out.push_str(&cell(d[i]));
            }
            out.push('\n');
        }
        out
    }
}

fn csv_field(s: &str) -> String {
    if s.contains([',', '"', '\n']) {
        format!("\"{}\"", s.replace('"', "\"\""))
    } else {
        s.to_owned()
    }
}

/// Long-format histogram series: one row per run, iteration and bin.
pub fn histogram_series(runs: &[RunRecord]) -> String {
    let mut out = String::from("run,iteration,labeled_fraction,bin,bin_low,bin_high,count\n");
    for r in runs {
        let width = (r.log.classes as f64).ln() / HISTOGRAM_BINS as f64;
        for e in &r.log.entries {
            let Some(u) = &e.uncertainty else { continue };
            for (bin, count) in u.histogram.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{},{},{},{bin},{},{},{count}",
                    csv_field(&r.name),
                    e.iteration,
                    e.labeled_fraction,
                    bin as f64 * width,
                    (bin + 1) as f64 * width
                );
            }
        }
    }
    out
}

/// Top-5 % mean uncertainty per iteration, with the pool mean and low-entropy share.
pub fn top5_series(runs: &[RunRecord]) -> String {
    let mut out = String::from("run,iteration,labeled_fraction,top5_mean,mean,low_mass\n");
    for r in runs {
        for e in &r.log.entries {
            let Some(u) = &e.uncertainty else { continue };
            let _ = writeln!(
                out,
                "{},{},{},{},{},{}",
                csv_field(&r.name),
                e.iteration,
                e.labeled_fraction,
                u.top5_mean,
                u.mean,
                u.low_mass
            );
        }
    }
    out
}

/// Kendall rank correlation (tau-a) between iteration order and `ys`.
///
/// Counts discordant pairs by merge-sort inversions and tied pairs by
/// grouping, so it runs in `O(n log n)`.
pub fn kendall_tau(ys: &[f64]) -> f64 {
    let n = ys.len();
    if n < 2 {
        return 0.0;
    }
    let total = (n * (n - 1) / 2) as i64;
    let mut sorted = ys.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut ties = 0i64;
    let mut run = 1i64;
    for w in sorted.windows(2) {
        if w[0] == w[1] {
            run += 1;
        } else {
            ties += run * (run - 1) / 2;
            run = 1;
        }
    }
    ties += run * (run - 1) / 2;
    let mut work = ys.to_vec();
    let mut buf = vec![0.0; n];
    let discordant = count_inversions(&mut work, &mut buf) as i64;
    let concordant = total - discordant - ties;
    (concordant - discordant) as f64 / total as f64
}

/// Sorts `v` ascending and returns the number of pairs `i < j` with `v[i] > v[j]`.
fn count_inversions(v: &mut [f64], buf: &mut [f64]) -> u64 {
    let n = v.len();
    if n < 2 {
        return 0;
    }
    let mid = n / 2;
    let mut count = count_inversions(&mut v[..mid], &mut buf[..mid]) + count_inversions(&mut v[mid..], &mut buf[mid..]);
    let (mut i, mut j, mut k) = (0, mid, 0);
    while i < mid && j < n {
        if v[j] < v[i] {
            buf[k] = v[j];
            count += (mid - i) as u64;
            j += 1;
        } else {
            buf[k] = v[i];
            i += 1;
        }
        k += 1;
    }
    buf[k..k + mid - i].copy_from_slice(&v[i..mid]);
    k += mid - i;
    buf[k..k + n - j].copy_from_slice(&v[j..n]);
    v.copy_from_slice(&buf[..n]);
    count
}

/// Per-run trend of the top-5 % series; `decreasing` flags `tau < 0`.
pub fn trend_table(runs: &[RunRecord]) -> String {
    let mut out = String::from("run,points,kendall_tau,decreasing\n");
    for r in runs {
        let ys: Vec<f64> = r
            .log
            .entries
            .iter()
            .filter_map(|e| e.uncertainty.as_ref().map(|u| u.top5_mean))
            .collect();
        let tau = kendall_tau(&ys);
        let _ = writeln!(out, "{},{},{tau},{}", csv_field(&r.name), ys.len(), tau < 0.0);
    }
    out
}

pub const TABLE_CSV: &str = "accuracy_table.csv";
pub const HISTOGRAM_CSV: &str = "uncertainty_histograms.csv";
pub const TOP5_CSV: &str = "top5_uncertainty.csv";
pub const TREND_CSV: &str = "top5_trend.csv";

/// Writes every report file into `dir` and returns the table with its warnings.
pub fn write_report(runs: &[RunRecord], dir: &Path) -> Result<AccuracyTable> {
    std::fs::create_dir_all(dir)?;
    let table = accuracy_table(runs);
    std::fs::write(dir.join(TABLE_CSV), table.to_csv())?;
    std::fs::write(dir.join(HISTOGRAM_CSV), histogram_series(runs))?;
    std::fs::write(dir.join(TOP5_CSV), top5_series(runs))?;
    std::fs::write(dir.join(TREND_CSV), trend_table(runs))?;
    Ok(table)
}
