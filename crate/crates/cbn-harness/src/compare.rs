//! Aggregation of finished runs: groups metrics by method and reports the
//! across-seed mean and standard deviation of evaluation accuracy.

use std::collections::BTreeMap;
use std::path::Path;

use crate::error::{HarnessError, HarnessResult};
use crate::metrics::{read_metrics, Split};
use crate::trainer::{RunMeta, META_FILE, METRICS_FILE};

/// One run directory's evaluation curve.
#[derive(Debug, Clone)]
pub struct RunData {
    pub meta: RunMeta,
    /// `(epoch, top-1, loss)` per evaluation pass, in epoch order.
    pub eval: Vec<(u64, f64, f64)>,
}

pub fn load_run(dir: &Path) -> HarnessResult<RunData> {
    let meta = RunMeta::load(&dir.join(META_FILE))?;
    let rows = read_metrics(&dir.join(METRICS_FILE))?;
    let eval: Vec<(u64, f64, f64)> = rows
        .iter()
        .filter(|r| r.split == Split::Eval)
        .map(|r| (r.epoch, r.top1, r.loss))
        .collect();
    if eval.is_empty() {
        return Err(HarnessError::Argument(format!(
            "{} holds no evaluation rows; did the run finish an epoch?",
            dir.display()
        )));
    }
    Ok(RunData { meta, eval })
}

/// Across-seed statistics for one method.
#[derive(Debug, Clone)]
pub struct MethodSummary {
    pub method: String,
    pub seeds: Vec<u64>,
    pub epochs: Vec<u64>,
    /// Per-epoch mean of evaluation top-1, same length as `epochs`.
    pub mean_top1: Vec<f64>,
    /// Per-epoch standard deviation (n-1 denominator; 0 for a single run).
    pub std_top1: Vec<f64>,
}

impl MethodSummary {
    pub fn final_mean(&self) -> f64 {
        *self.mean_top1.last().expect("summaries hold at least one epoch")
    }

    pub fn final_std(&self) -> f64 {
        *self.std_top1.last().expect("summaries hold at least one epoch")
    }
}

fn mean_and_std(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let std = if values.len() < 2 {
        0.0
    } else {
        let ss = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>();
        (ss / (n - 1.0)).sqrt()
    };
    (mean, std)
}

/// Groups runs by method label and summarizes each group. Every run must
/// cover the same epoch grid; seeds may repeat (a repeated run is treated as
/// another sample).
pub fn compare_runs(dirs: &[std::path::PathBuf]) -> HarnessResult<Vec<MethodSummary>> {
    if dirs.len() < 2 {
        return Err(HarnessError::Argument(format!(
            "comparison needs at least two run directories, got {}",
            dirs.len()
        )));
    }
    let runs: Vec<RunData> = dirs.iter().map(|d| load_run(d)).collect::<Result<_, _>>()?;
    let grid: Vec<u64> = runs[0].eval.iter().map(|&(e, _, _)| e).collect();
    for (dir, run) in dirs.iter().zip(&runs) {
        let this: Vec<u64> = run.eval.iter().map(|&(e, _, _)| e).collect();
        if this != grid {
            return Err(HarnessError::Argument(format!(
                "{} evaluated at epochs {this:?}, other runs at {grid:?}; \
                 curves over different grids cannot be averaged",
                dir.display()
            )));
        }
    }
    let mut groups: BTreeMap<String, Vec<&RunData>> = BTreeMap::new();
    for run in &runs {
        groups.entry(run.meta.method.clone()).or_default().push(run);
    }
    let mut out = Vec::new();
    for (method, members) in groups {
        let mut seeds: Vec<u64> = members.iter().map(|r| r.meta.seed).collect();
        seeds.sort_unstable();
        let mut mean_top1 = Vec::with_capacity(grid.len());
        let mut std_top1 = Vec::with_capacity(grid.len());
        for ei in 0..grid.len() {
            let samples: Vec<f64> = members.iter().map(|r| r.eval[ei].1).collect();
            let (m, s) = mean_and_std(&samples);
            mean_top1.push(m);
            std_top1.push(s);
        }
        out.push(MethodSummary {
            method,
            seeds,
            epochs: grid.clone(),
            mean_top1,
            std_top1,
        });
    }
    Ok(out)
}

/// Final-epoch table, one line per method.
pub fn render_text(summaries: &[MethodSummary]) -> String {
    let width = summaries
        .iter()
        .map(|s| s.method.len())
        .max()
        .unwrap_or(6)
        .max(6);
    let mut out = format!(
        "{:width$}  {:>5}  {:>22}\n",
        "method", "seeds", "final top-1 (mean+/-sd)"
    );
    for s in summaries {
        out.push_str(&format!(
            "{:width$}  {:>5}  {:>9.2}% +/- {:>5.2}\n",
            s.method,
            s.seeds.len(),
            s.final_mean() * 100.0,
            s.final_std() * 100.0,
        ));
    }
    out
}

/// Per-epoch curves in machine-readable form.
pub fn render_csv(summaries: &[MethodSummary]) -> String {
    let mut out = String::from("method,epoch,runs,mean_top1,std_top1\n");
    for s in summaries {
        for (i, &epoch) in s.epochs.iter().enumerate() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                s.method,
                epoch,
                s.seeds.len(),
                crate::metrics::format_f64(s.mean_top1[i]),
                crate::metrics::format_f64(s.std_top1[i]),
            ));
        }
    }
    out
}
