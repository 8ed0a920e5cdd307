use std::collections::BTreeMap;
use std::path::PathBuf;

use clap::Args;
use serde::Serialize;

use crate::run::ReportFile;
use crate::{usage, write_file};

#[derive(Debug, Clone, Args)]
pub struct ReportArgs {
    /// Run output directories.
    #[arg(required = true)]
    pub runs: Vec<PathBuf>,
    /// Output directory for the merged tables.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct TradeoffRow {
    pub run: String,
    pub policy: String,
    pub seed: u64,
    pub target_rate: Option<f64>,
    pub observed_drop_rate: f64,
    pub qor: Option<f64>,
    pub violations: u64,
    pub completed: u64,
    pub max_e2e_ms: Option<f64>,
}

/// Mean over runs sharing a policy and target rate.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonRow {
    pub policy: String,
    pub target_rate: Option<f64>,
    pub runs: usize,
    pub mean_drop_rate: f64,
    pub mean_qor: Option<f64>,
    pub total_violations: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MergedReport {
    pub runs: Vec<TradeoffRow>,
    pub comparison: Vec<ComparisonRow>,
}

fn policy_name(r: &ReportFile) -> String {
    serde_json::to_value(r.summary.policy)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

fn to_csv<T: Serialize>(rows: &[T]) -> anyhow::Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in rows {
        w.serialize(r)?;
    }
    Ok(String::from_utf8(w.into_inner()?)?)
}

/// Merges runs that share a dataset and comparable configuration into
/// `tradeoff.csv` (one row per run) and `comparison.csv` (per policy and
/// target rate).
pub fn cmd_report(args: &ReportArgs) -> anyhow::Result<MergedReport> {
    let mut loaded = Vec::with_capacity(args.runs.len());
    for dir in &args.runs {
        loaded.push((dir.display().to_string(), ReportFile::load(dir)?));
    }
    let (first_name, first) = &loaded[0];
    let mismatched: Vec<String> = loaded
        .iter()
        .filter(|(_, r)| {
            r.summary.config_fingerprint != first.summary.config_fingerprint
                || r.summary.dataset_fingerprint != first.summary.dataset_fingerprint
        })
        .map(|(n, r)| {
            format!(
                "{n} (config {}, dataset {})",
                &r.summary.config_fingerprint[..12],
                &r.summary.dataset_fingerprint[..12]
            )
        })
        .collect();
    if !mismatched.is_empty() {
        return Err(usage(format!(
            "runs are not comparable with {first_name} (config {}, dataset {}): {}",
            &first.summary.config_fingerprint[..12],
            &first.summary.dataset_fingerprint[..12],
            mismatched.join("; ")
        )));
    }

    let runs: Vec<TradeoffRow> = loaded
        .iter()
        .map(|(name, r)| TradeoffRow {
            run: name.clone(),
            policy: policy_name(r),
            seed: r.summary.seed,
            target_rate: r.summary.fixed_drop_rate,
            observed_drop_rate: r.summary.observed_drop_rate,
            qor: r.summary.overall_qor,
            violations: r.summary.violations,
            completed: r.summary.completed,
            max_e2e_ms: r.summary.max_e2e_ms,
        })
        .collect();

    let mut groups: BTreeMap<(String, Option<u64>), Vec<&TradeoffRow>> = BTreeMap::new();
    for r in &runs {
        groups
            .entry((r.policy.clone(), r.target_rate.map(f64::to_bits)))
            .or_default()
            .push(r);
    }
    let comparison = groups
        .into_iter()
        .map(|((policy, rate), rows)| {
            let n = rows.len();
            let qors: Vec<f64> = rows.iter().filter_map(|r| r.qor).collect();
            ComparisonRow {
                policy,
                target_rate: rate.map(f64::from_bits),
                runs: n,
                mean_drop_rate: rows.iter().map(|r| r.observed_drop_rate).sum::<f64>() / n as f64,
                mean_qor: (!qors.is_empty()).then(|| qors.iter().sum::<f64>() / qors.len() as f64),
                total_violations: rows.iter().map(|r| r.violations).sum(),
            }
        })
        .collect::<Vec<_>>();

    std::fs::create_dir_all(&args.out)?;
    write_file(&args.out.join("tradeoff.csv"), &to_csv(&runs)?)?;
    write_file(&args.out.join("comparison.csv"), &to_csv(&comparison)?)?;
    Ok(MergedReport { runs, comparison })
}
