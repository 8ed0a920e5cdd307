use std::path::PathBuf;

use clap::{Args, ValueEnum};
use vidshed::sim::interleave::{interleave_cameras, offset_stream};
use vidshed::sim::{
    generate_labeled_corpus, generate_synthetic_scenario, save_dataset, CorpusSpec, FrameRecord, SegmentLengths,
};

use crate::usage;

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SynthKind {
    /// Three-segment stream: quiet, overloaded with targets, busy without targets.
    Scenario,
    /// Labeled multi-camera training corpus.
    Corpus,
}

#[derive(Debug, Clone, Args)]
pub struct SynthArgs {
    #[arg(value_enum)]
    pub kind: SynthKind,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Number of cameras [default: 1 for a scenario, 6 for a corpus].
    #[arg(long)]
    pub cameras: Option<u32>,
    #[arg(long, default_value_t = 10.0)]
    pub fps: f64,
    /// Frames per scenario segment.
    #[arg(long, default_value_t = 3000)]
    pub segment_frames: usize,
    /// Frames per camera in a corpus.
    #[arg(long, default_value_t = 1500)]
    pub frames_per_camera: usize,
    /// Output dataset (JSONL).
    #[arg(long)]
    pub out: PathBuf,
}

/// Scenario streams of several cameras are staggered evenly within one
/// frame period and interleaved.
pub fn cmd_synth(args: &SynthArgs) -> anyhow::Result<Vec<FrameRecord>> {
    let cameras = args.cameras.unwrap_or(match args.kind {
        SynthKind::Scenario => 1,
        SynthKind::Corpus => CorpusSpec::default().cameras,
    });
    if cameras == 0 || !(args.fps > 0.0) {
        return Err(usage("cameras and fps must be positive"));
    }
    let frames = match args.kind {
        SynthKind::Scenario => {
            if args.segment_frames == 0 {
                return Err(usage("segment frames must be positive"));
            }
            let seg = SegmentLengths {
                low_no_object: args.segment_frames,
                high_with_objects: args.segment_frames,
                high_no_object: args.segment_frames,
            };
            let period = 1000.0 / args.fps;
            let streams = (0..cameras)
                .map(|c| {
                    let mut s = generate_synthetic_scenario(args.seed, seg, c, args.fps);
                    offset_stream(&mut s, c as f64 * period / cameras as f64);
                    s
                })
                .collect();
            interleave_cameras(streams)?
        }
        SynthKind::Corpus => generate_labeled_corpus(
            args.seed,
            &CorpusSpec {
                cameras,
                frames_per_camera: args.frames_per_camera,
                fps: args.fps,
                ..CorpusSpec::default()
            },
        ),
    };
    if let Some(dir) = args.out.parent().filter(|d| !d.as_os_str().is_empty()) {
        std::fs::create_dir_all(dir)?;
    }
    save_dataset(&args.out, &frames)?;
    Ok(frames)
}
