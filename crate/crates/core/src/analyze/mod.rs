//! Fine-tuning forensics: per-group change and gradient reports, rank
//! correlation, freeze-subset ablations, and feature export.

mod ablation;
mod features;

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

pub use ablation::{freeze_ablation, select_groups, AblationRow, AblationSetup, KeepSelector};
pub use features::{export_features, fisher_ratio, pca_2d, FeatureExport, FeatureRow, Pca};

use crate::error::{Error, Result};
use crate::params::GroupChange;
use crate::report::write_csv;
use crate::train::{ChangeCurve, TrainReport};

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ReportMeta {
    pub strategy: String,
    pub dataset_id: String,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RankedRow {
    pub group: String,
    pub value: f64,
    /// 1 for the largest value; ties keep report order.
    pub rank: usize,
}

fn rank_rows(values: Vec<(String, f64)>) -> Vec<RankedRow> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[b].1.total_cmp(&values[a].1).then(a.cmp(&b)));
    let mut ranks = vec![0; values.len()];
    for (r, &i) in order.iter().enumerate() {
        ranks[i] = r + 1;
    }
    values
        .into_iter()
        .zip(ranks)
        .map(|((group, value), rank)| RankedRow { group, value, rank })
        .collect()
}

/// Squared change `‖p_pre − p_post‖²` per trainable group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChangeReport {
    pub rows: Vec<RankedRow>,
    pub meta: ReportMeta,
}

/// Cumulative squared gradient per trainable group.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GradientReport {
    pub rows: Vec<RankedRow>,
    pub meta: ReportMeta,
}

fn groups_by_rank(rows: &[RankedRow]) -> Vec<String> {
    let mut sorted: Vec<&RankedRow> = rows.iter().collect();
    sorted.sort_by_key(|r| r.rank);
    sorted.into_iter().map(|r| r.group.clone()).collect()
}

fn write_ranked(path: &Path, schema: &str, value_col: &str, rows: &[RankedRow]) -> Result<()> {
    write_csv(
        path,
        schema,
        &["group", value_col, "rank"],
        rows.iter()
            .map(|r| vec![r.group.clone(), r.value.to_string(), r.rank.to_string()]),
    )
}

impl ChangeReport {
    pub fn from_train_report(report: &TrainReport, meta: ReportMeta) -> Self {
        let values = report
            .trainable_groups
            .iter()
            .map(|g| {
                let v = report
                    .final_changes
                    .iter()
                    .filter(|c| c.group == *g)
                    .map(|c| c.squared_change)
                    .sum();
                (g.clone(), v)
            })
            .collect();
        Self {
            rows: rank_rows(values),
            meta,
        }
    }

    /// From a [`diff`](crate::params::diff) of two snapshots; every group
    /// is kept, unchanged ones included.
    pub fn from_changes(changes: Vec<GroupChange>, meta: ReportMeta) -> Self {
        Self {
            rows: rank_rows(changes.into_iter().map(|c| (c.group, c.squared_change)).collect()),
            meta,
        }
    }

    /// Group names from most to least changed.
    pub fn by_rank(&self) -> Vec<String> {
        groups_by_rank(&self.rows)
    }

    pub fn value(&self, group: &str) -> Option<f64> {
        self.rows.iter().find(|r| r.group == group).map(|r| r.value)
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_ranked(path, "change_report", "squared_change", &self.rows)
    }
}

impl GradientReport {
    pub fn by_rank(&self) -> Vec<String> {
        groups_by_rank(&self.rows)
    }

    pub fn total(&self) -> f64 {
        self.rows.iter().map(|r| r.value).sum()
    }

    pub fn write_csv(&self, path: &Path) -> Result<()> {
        write_ranked(path, "gradient_report", "squared_gradient_sum", &self.rows)
    }
}

/// Cumulative squared gradients of a finished run. Frozen groups never
/// appear.
pub fn gradient_sums(report: &TrainReport, meta: ReportMeta) -> GradientReport {
    GradientReport {
        rows: rank_rows(report.gradient_sums.iter().map(|g| (g.group.clone(), g.value)).collect()),
        meta,
    }
}

/// Drift curves of the requested groups from a run's log.
pub fn track_changes(report: &TrainReport, groups: &[&str]) -> Result<Vec<ChangeCurve>> {
    groups
        .iter()
        .map(|g| {
            report
                .change_curves
                .iter()
                .find(|c| c.group == *g)
                .cloned()
                .ok_or_else(|| Error::UnknownName(format!("`{g}` was not tracked")))
        })
        .collect()
}

/// Average ranks (1-based), ties sharing the mean of their positions.
fn average_ranks(xs: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut ranks = vec![0.0; xs.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && xs[order[j + 1]] == xs[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Spearman rank correlation: Pearson correlation of average ranks.
pub fn spearman(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() || a.len() < 2 {
        return Err(Error::degenerate("spearman", format!("need two equal-length samples of size >= 2, got {} and {}", a.len(), b.len())));
    }
    let (ra, rb) = (average_ranks(a), average_ranks(b));
    let n = a.len() as f64;
    let (ma, mb) = (ra.iter().sum::<f64>() / n, rb.iter().sum::<f64>() / n);
    let cov: f64 = ra.iter().zip(&rb).map(|(x, y)| (x - ma) * (y - mb)).sum();
    let va: f64 = ra.iter().map(|x| (x - ma).powi(2)).sum();
    let vb: f64 = rb.iter().map(|y| (y - mb).powi(2)).sum();
    if va == 0.0 || vb == 0.0 {
        return Err(Error::degenerate("spearman", "a sample is constant"));
    }
    Ok(cov / (va * vb).sqrt())
}

/// Spearman correlation between gradient sums and final changes over the
/// groups both reports share.
pub fn gradient_change_correlation(grads: &GradientReport, changes: &ChangeReport) -> Result<f64> {
    let mut a = Vec::new();
    let mut b = Vec::new();
    for r in &grads.rows {
        if let Some(v) = changes.value(&r.group) {
            a.push(r.value);
            b.push(v);
        }
    }
    spearman(&a, &b)
}

impl fmt::Display for ChangeReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for r in &self.rows {
            writeln!(f, "{:>3}  {:<32} {:.6e}", r.rank, r.group, r.value)?;
        }
        Ok(())
    }
}
