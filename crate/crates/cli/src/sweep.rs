use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use serde::Serialize;
use vidshed::color::{BinGrid, Palette};
use vidshed::sim::engine::score_frames;
use vidshed::sim::qor::{evaluate_random, evaluate_rate, evaluate_threshold, TradeoffPoint};
use vidshed::sim::{train_utility_model, FrameRecord, ShedPolicy};
use vidshed::threshold::Threshold;
use vidshed::utility::QueryExpr;

use crate::train::palette_and_query;
use crate::{usage, write_file};

#[derive(Debug, Clone, Args)]
pub struct SweepArgs {
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Labeled dataset (JSONL).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Utility thresholds, comma separated.
    #[arg(long, value_delimiter = ',')]
    pub thresholds: Vec<f64>,
    /// Target drop rates, comma separated; each is also run with the random
    /// baseline.
    #[arg(long, value_delimiter = ',')]
    pub rates: Vec<f64>,
    /// Seeds for the random baseline at each rate.
    #[arg(long, default_value_t = 30)]
    pub random_seeds: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Leave-one-camera-out: retrain without each camera and score it.
    #[arg(long)]
    pub cross_validate: bool,
    /// Colors file for cross-validation training.
    #[arg(long)]
    pub colors: Option<PathBuf>,
    /// Query for cross-validation training.
    #[arg(long)]
    pub query: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub sat_bin: u16,
    #[arg(long, default_value_t = 32)]
    pub val_bin: u16,
    /// Output CSV.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SweepRow {
    pub strategy: &'static str,
    pub param: f64,
    pub point: TradeoffPoint,
    /// Standard deviation of QoR across random seeds.
    pub qor_std: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FoldResult {
    pub held_out_camera: u32,
    pub n_pos: usize,
    pub n_neg: usize,
    pub min_pos: f64,
    pub max_neg: f64,
    pub median_pos: f64,
    pub p95_neg: f64,
    /// Held-out `(frame_id, label, utility)`.
    #[serde(skip)]
    pub utilities: Vec<(u64, bool, f64)>,
}

impl FoldResult {
    pub fn fully_separated(&self) -> bool {
        self.min_pos > self.max_neg
    }
    pub fn median_above_p95(&self) -> bool {
        self.median_pos > self.p95_neg
    }
}

fn median(sorted: &[f64]) -> f64 {
    let n = sorted.len();
    if n % 2 == 1 {
        sorted[n / 2]
    } else {
        (sorted[n / 2 - 1] + sorted[n / 2]) / 2.0
    }
}

/// Nearest-rank percentile of sorted data.
fn percentile(sorted: &[f64], p: f64) -> f64 {
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

/// Leave-one-camera-out: for each camera, trains on all other cameras and
/// scores the held-out camera's frames. A frame is positive when it
/// satisfies the query.
pub fn cross_validate(
    frames: &[FrameRecord],
    palette: &Palette,
    grid: &BinGrid,
    query: &QueryExpr,
) -> anyhow::Result<Vec<FoldResult>> {
    let cams: std::collections::BTreeSet<u32> = frames.iter().map(|f| f.camera_id).collect();
    if cams.len() < 2 {
        return Err(usage("cross-validation needs at least two cameras"));
    }
    let mut folds = Vec::with_capacity(cams.len());
    for cam in cams {
        let (test, train): (Vec<FrameRecord>, Vec<FrameRecord>) =
            frames.iter().cloned().partition(|f| f.camera_id == cam);
        let (model, _) = train_utility_model(&train, palette, grid, query.clone())?;
        let us = score_frames(ShedPolicy::Utility, &model, &test, 0)?;
        let utilities: Vec<(u64, bool, f64)> = test
            .iter()
            .zip(&us)
            .map(|(f, &u)| (f.frame_id, f.matches(query), u))
            .collect();
        let mut pos: Vec<f64> = utilities.iter().filter(|x| x.1).map(|x| x.2).collect();
        let mut neg: Vec<f64> = utilities.iter().filter(|x| !x.1).map(|x| x.2).collect();
        if pos.is_empty() || neg.is_empty() {
            return Err(usage(format!("camera {cam} lacks positives or negatives")));
        }
        pos.sort_by(f64::total_cmp);
        neg.sort_by(f64::total_cmp);
        folds.push(FoldResult {
            held_out_camera: cam,
            n_pos: pos.len(),
            n_neg: neg.len(),
            min_pos: pos[0],
            max_neg: *neg.last().expect("non-empty"),
            median_pos: median(&pos),
            p95_neg: percentile(&neg, 95.0),
            utilities,
        });
    }
    Ok(folds)
}

/// Offline tradeoff points: one row per threshold, and per rate one
/// utility row plus one random-baseline row averaged over seeds.
pub fn tradeoff_sweep(
    frames: &[FrameRecord],
    utilities: &[f64],
    query: &QueryExpr,
    thresholds: &[f64],
    rates: &[f64],
    seed: u64,
    random_seeds: u64,
) -> anyhow::Result<Vec<SweepRow>> {
    let mut rows = Vec::new();
    for &t in thresholds {
        rows.push(SweepRow {
            strategy: "utility_threshold",
            param: t,
            point: evaluate_threshold(frames, utilities, query, Threshold::Value(t)),
            qor_std: None,
        });
    }
    for &r in rates {
        if !(0.0..=1.0).contains(&r) {
            return Err(usage(format!("rate {r} outside [0, 1]")));
        }
        rows.push(SweepRow {
            strategy: "utility_rate",
            param: r,
            point: evaluate_rate(frames, utilities, query, r)?,
            qor_std: None,
        });
        let runs: Vec<TradeoffPoint> = (0..random_seeds.max(1))
            .map(|k| evaluate_random(frames, query, r, seed + k))
            .collect();
        let n = runs.len() as f64;
        let qors: Vec<f64> = runs.iter().filter_map(|p| p.qor).collect();
        let mean_qor = (!qors.is_empty()).then(|| qors.iter().sum::<f64>() / qors.len() as f64);
        let std = mean_qor.map(|m| (qors.iter().map(|q| (q - m).powi(2)).sum::<f64>() / qors.len() as f64).sqrt());
        rows.push(SweepRow {
            strategy: "random",
            param: r,
            point: TradeoffPoint {
                threshold: None,
                drop_rate: runs.iter().map(|p| p.drop_rate).sum::<f64>() / n,
                qor: mean_qor,
            },
            qor_std: std,
        });
    }
    Ok(rows)
}

fn opt(x: Option<f64>) -> String {
    x.map_or_else(String::new, |v| v.to_string())
}

pub fn sweep_csv(rows: &[SweepRow]) -> String {
    let mut out = String::from("strategy,param,threshold,drop_rate,qor,qor_std\n");
    for r in rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{}",
            r.strategy,
            r.param,
            opt(r.point.threshold),
            r.point.drop_rate,
            opt(r.point.qor),
            opt(r.qor_std)
        );
    }
    out
}

pub fn folds_csv(folds: &[FoldResult]) -> String {
    let mut out = String::from(
        "held_out_camera,n_pos,n_neg,min_pos,max_neg,median_pos,p95_neg,fully_separated,median_above_p95\n",
    );
    for f in folds {
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            f.held_out_camera,
            f.n_pos,
            f.n_neg,
            f.min_pos,
            f.max_neg,
            f.median_pos,
            f.p95_neg,
            f.fully_separated(),
            f.median_above_p95()
        );
    }
    out
}

fn fold_utilities_csv(folds: &[FoldResult]) -> String {
    let mut out = String::from("camera_id,frame_id,label,utility\n");
    for f in folds {
        for (id, label, u) in &f.utilities {
            let _ = writeln!(out, "{},{id},{},{u}", f.held_out_camera, u8::from(*label));
        }
    }
    out
}

fn utilities_path(out: &Path) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("sweep");
    out.with_file_name(format!("{stem}.utilities.csv"))
}

pub enum SweepOutcome {
    Tradeoff(Vec<SweepRow>),
    CrossValidation(Vec<FoldResult>),
}

/// Writes the sweep CSV; with `--cross-validate`, the per-fold CSV plus
/// `<stem>.utilities.csv` with every held-out frame's utility.
pub fn cmd_sweep(args: &SweepArgs) -> anyhow::Result<SweepOutcome> {
    let frames = crate::load_frames(&args.dataset)?;
    if args.cross_validate {
        let (palette, query) = palette_and_query(args.colors.as_deref(), args.query.as_deref())?;
        let grid = BinGrid::new(args.sat_bin, args.val_bin)?;
        let folds = cross_validate(&frames, &palette, &grid, &query)?;
        write_file(&args.out, &folds_csv(&folds))?;
        write_file(&utilities_path(&args.out), &fold_utilities_csv(&folds))?;
        return Ok(SweepOutcome::CrossValidation(folds));
    }
    let model_path = args
        .model
        .as_deref()
        .ok_or_else(|| usage("--model is required unless --cross-validate"))?;
    let model = crate::load_model(model_path)?;
    let utilities = score_frames(ShedPolicy::Utility, &model, &frames, 0)?;
    let thresholds: Vec<f64> = if args.thresholds.is_empty() && args.rates.is_empty() {
        (0..=20).map(|k| k as f64 / 20.0).collect()
    } else {
        args.thresholds.clone()
    };
    let rows = tradeoff_sweep(
        &frames,
        &utilities,
        model.query(),
        &thresholds,
        &args.rates,
        args.seed,
        args.random_seeds,
    )?;
    write_file(&args.out, &sweep_csv(&rows))?;
    Ok(SweepOutcome::Tradeoff(rows))
}
