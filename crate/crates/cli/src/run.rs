use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::Args;
use log::{info, warn};
use serde::{Deserialize, Serialize};
use vidshed::control::control_log_csv;
use vidshed::sim::engine::score_frames;
use vidshed::sim::{run_simulation, RunReport, RunSummary, ShedPolicy, SimConfig};

use crate::manifest::{Baseline, RunManifest};
use crate::{usage, write_file};

pub const REPORT_FORMAT: &str = "vidshed-run-report";
pub const REPORT_VERSION: u32 = 1;
pub const REPORT_FILE: &str = "report.json";

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// Run manifest (TOML). Flags override its values.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub model: Option<PathBuf>,
    /// Frames to replay (JSONL, ordered by generation time).
    #[arg(long)]
    pub dataset: Option<PathBuf>,
    /// Dataset whose utilities seed the runtime utility history.
    #[arg(long)]
    pub training_dataset: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub baseline: Option<Baseline>,
    /// Pin the target drop rate instead of deriving it from throughput.
    #[arg(long)]
    pub rate: Option<f64>,
    /// End-to-end latency bound in milliseconds.
    #[arg(long)]
    pub lb_ms: Option<f64>,
    /// Replay only the first N cameras (by id).
    #[arg(long)]
    pub cameras: Option<usize>,
}

/// Contents of `report.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportFile {
    pub format: String,
    pub version: u32,
    pub summary: RunSummary,
    pub operators: Vec<String>,
    pub config: SimConfig,
    pub per_object_qor: std::collections::BTreeMap<u64, f64>,
}

impl ReportFile {
    pub fn load(dir: &Path) -> anyhow::Result<Self> {
        let path = dir.join(REPORT_FILE);
        if !path.is_file() {
            return Err(usage(format!("{} has no {REPORT_FILE}", dir.display())));
        }
        let r: ReportFile = serde_json::from_str(&crate::read_input(&path)?)?;
        if r.format != REPORT_FORMAT || r.version != REPORT_VERSION {
            return Err(usage(format!(
                "{} is not a version {REPORT_VERSION} run report",
                path.display()
            )));
        }
        Ok(r)
    }
}

fn resolve(args: &RunArgs) -> anyhow::Result<RunManifest> {
    let mut m = match &args.config {
        Some(p) => RunManifest::load(p)?,
        None => RunManifest::default(),
    };
    macro_rules! over {
        ($($f:ident),*) => { $( if args.$f.is_some() { m.$f = args.$f.clone(); } )* };
    }
    over!(
        model,
        dataset,
        training_dataset,
        seed,
        out,
        baseline,
        rate,
        lb_ms,
        cameras
    );
    Ok(m)
}

fn frames_csv(report: &RunReport) -> String {
    let mut out = String::from("camera_id,frame_id,generation_ms,utility,decision,decided_ms,e2e_ms,ops_reached\n");
    for f in &report.frames {
        let decision = serde_json::to_value(f.decision).expect("decision serializes");
        out.push_str(&format!(
            "{},{},{},{},{},{},{},{}\n",
            f.camera_id,
            f.frame_id,
            f.generation_ms,
            f.utility,
            decision.as_str().unwrap_or_default(),
            f.decided_ms,
            f.e2e_ms.map_or_else(String::new, |e| e.to_string()),
            f.backend.len()
        ));
    }
    out
}

/// Simulates the manifest's run and writes into the output directory:
/// `report.json`, `buckets.csv` (5 s aggregates), `control.csv`,
/// `queue.csv`, `frames.csv` and `decisions.jsonl`.
pub fn cmd_run(args: &RunArgs) -> anyhow::Result<RunReport> {
    let m = resolve(args)?;
    let model_path = m
        .model
        .clone()
        .ok_or_else(|| usage("no model given (--model or manifest)"))?;
    let data_path = m
        .dataset
        .clone()
        .ok_or_else(|| usage("no dataset given (--dataset or manifest)"))?;
    let out = m
        .out
        .clone()
        .ok_or_else(|| usage("no output directory given (--out or manifest)"))?;
    let cfg = m.sim_config();
    cfg.validate()?;

    let model = crate::load_model(&model_path)?;
    let mut frames = crate::load_frames(&data_path)?;
    if let Some(n) = m.cameras {
        if n == 0 {
            return Err(usage("--cameras must be at least 1"));
        }
        let keep: BTreeSet<u32> = frames
            .iter()
            .map(|f| f.camera_id)
            .collect::<BTreeSet<_>>()
            .into_iter()
            .take(n)
            .collect();
        frames.retain(|f| keep.contains(&f.camera_id));
    }
    let history = match (&m.training_dataset, cfg.policy) {
        (Some(p), ShedPolicy::Utility) => score_frames(ShedPolicy::Utility, &model, &crate::load_frames(p)?, 0)?,
        (None, ShedPolicy::Utility) => {
            warn!("no training dataset; utility history starts empty");
            Vec::new()
        }
        (_, ShedPolicy::Random) => Vec::new(),
    };

    let report = run_simulation(&cfg, &model, &frames, &history)?;
    let file = ReportFile {
        format: REPORT_FORMAT.into(),
        version: REPORT_VERSION,
        summary: report.summary.clone(),
        operators: report.operators.clone(),
        config: cfg,
        per_object_qor: report.per_object_qor.clone(),
    };
    std::fs::create_dir_all(&out)?;
    write_file(&out.join(REPORT_FILE), &(serde_json::to_string_pretty(&file)? + "\n"))?;
    write_file(&out.join("buckets.csv"), &report.buckets_csv())?;
    write_file(&out.join("control.csv"), &control_log_csv(&report.control_log))?;
    write_file(&out.join("queue.csv"), &report.queue_csv())?;
    write_file(&out.join("frames.csv"), &frames_csv(&report))?;
    write_file(&out.join("decisions.jsonl"), &report.decisions_jsonl())?;
    let s = &report.summary;
    info!(
        "{} frames, drop rate {:.3}, QoR {:?}, {} violations",
        s.ingress, s.observed_drop_rate, s.overall_qor, s.violations
    );
    Ok(report)
}
