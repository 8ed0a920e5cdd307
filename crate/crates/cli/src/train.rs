use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use clap::Args;
use log::info;
use serde::Serialize;
use vidshed::color::{BinGrid, HueRange, Palette};
use vidshed::sim::dataset::parse_palette;
use vidshed::sim::train_utility_model;
use vidshed::utility::{ColorModel, QueryExpr, UtilityModel};

use crate::{read_input, usage, write_file};

#[derive(Debug, Clone, Args)]
pub struct TrainArgs {
    /// Labeled frame-feature dataset (JSONL).
    #[arg(long)]
    pub dataset: PathBuf,
    /// Colors file: JSON map of name to hue intervals, e.g. {"red": [[0,10],[170,180]]}.
    /// Defaults to a single red class.
    #[arg(long)]
    pub colors: Option<PathBuf>,
    /// Query over color names, e.g. "red" or "red | blue & green".
    /// Defaults to the OR of all colors.
    #[arg(long)]
    pub query: Option<String>,
    #[arg(long, default_value_t = 32)]
    pub sat_bin: u16,
    #[arg(long, default_value_t = 32)]
    pub val_bin: u16,
    /// Model file to write.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Serialize)]
struct ColorSummary<'a> {
    name: &'a str,
    norm: f64,
    n_pos: usize,
    n_neg: usize,
}

#[derive(Debug, Serialize)]
struct TrainingSummary<'a> {
    query: String,
    frames: usize,
    content_hash: String,
    colors: Vec<ColorSummary<'a>>,
}

pub(crate) fn palette_and_query(colors: Option<&Path>, query: Option<&str>) -> anyhow::Result<(Palette, QueryExpr)> {
    let palette = match colors {
        Some(p) => parse_palette(&read_input(p)?)?,
        None => Palette::from([("red".to_string(), HueRange::red())]),
    };
    let query = match query {
        Some(q) => q.parse::<QueryExpr>()?,
        None => QueryExpr::any_of(palette.keys()).ok_or_else(|| usage("colors file defines no colors"))?,
    };
    Ok((palette, query))
}

/// `rows = saturation bins, columns = value bins`
pub fn m_pos_csv(model: &ColorModel) -> String {
    let (rows, cols) = model.m_pos.shape();
    let mut out = String::from("sat_bin");
    for j in 0..cols {
        let _ = write!(out, ",v{j}");
    }
    out.push('\n');
    for i in 0..rows {
        let _ = write!(out, "{i}");
        for j in 0..cols {
            let _ = write!(out, ",{}", model.m_pos.get(i, j));
        }
        out.push('\n');
    }
    out
}

fn sibling(out: &Path, suffix: &str) -> PathBuf {
    let stem = out.file_stem().and_then(|s| s.to_str()).unwrap_or("model");
    out.with_file_name(format!("{stem}.{suffix}"))
}

/// Writes the model plus `<stem>.summary.json` and one
/// `<stem>.m_pos.<color>.csv` heatmap per color.
pub fn cmd_train(args: &TrainArgs) -> anyhow::Result<UtilityModel> {
    let frames = crate::load_frames(&args.dataset)?;
    let (palette, query) = palette_and_query(args.colors.as_deref(), args.query.as_deref())?;
    let grid = BinGrid::new(args.sat_bin, args.val_bin)?;
    let (model, _) = train_utility_model(&frames, &palette, &grid, query)?;

    write_file(&args.out, &model.to_json())?;
    let summary = TrainingSummary {
        query: model.query().to_string(),
        frames: frames.len(),
        content_hash: model.content_hash(),
        colors: model
            .colors()
            .values()
            .map(|c| ColorSummary {
                name: &c.name,
                norm: c.norm,
                n_pos: c.n_pos,
                n_neg: c.n_neg,
            })
            .collect(),
    };
    write_file(
        &sibling(&args.out, "summary.json"),
        &(serde_json::to_string_pretty(&summary)? + "\n"),
    )?;
    for c in model.colors().values() {
        write_file(&sibling(&args.out, &format!("m_pos.{}.csv", c.name)), &m_pos_csv(c))?;
        info!(
            "color {}: norm {:.6}, {} positives, {} negatives",
            c.name, c.norm, c.n_pos, c.n_neg
        );
    }
    Ok(model)
}
