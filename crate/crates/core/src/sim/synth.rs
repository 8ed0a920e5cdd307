//! Synthetic frame-feature streams.
//!
//! Histograms are assembled from pixel "components": a hue range plus a
//! saturation and value box. Vivid target-color pixels land in the top
//! saturation bins; dull pixels of the same hue stay in the lowest bins.
//! Positives carry a vivid share of at least 20% of their target-hue
//! pixels, negatives at most 2%.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::{HsvHistogram, Quantization};
use crate::sim::dataset::{FrameRecord, GroundTruthObject, StageFlags};

/// Pixels are drawn in clumps of this many identical samples.
const CLUMP: u64 = 4;

#[derive(Debug, Clone, Copy)]
struct Component {
    hue: HueBand,
    sat: (u16, u16),
    val: (u16, u16),
    pixels: u64,
}

#[derive(Debug, Clone, Copy)]
enum HueBand {
    Red,
    Other,
}

fn sample_hue(rng: &mut ChaCha8Rng, band: HueBand) -> u16 {
    match band {
        HueBand::Red => {
            if rng.random_bool(0.5) {
                rng.random_range(0..10)
            } else {
                rng.random_range(170..180)
            }
        }
        HueBand::Other => rng.random_range(15..165),
    }
}

fn synth_hist(rng: &mut ChaCha8Rng, quant: Quantization, parts: &[Component]) -> HsvHistogram {
    let mut hist = HsvHistogram::empty(quant);
    for part in parts {
        let mut left = part.pixels;
        while left > 0 {
            let n = left.min(CLUMP);
            left -= n;
            let h = sample_hue(rng, part.hue);
            let s = rng.random_range(part.sat.0..part.sat.1);
            let v = rng.random_range(part.val.0..part.val.1);
            hist.add_pixel((h, s, v), n).expect("components stay in range");
        }
    }
    hist
}

/// Frame content archetypes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Content {
    /// Background with a little dull target color.
    Plain,
    /// Target color with a vivid share of ≥ 20%.
    Vivid,
    /// Target color with a vivid share of ≤ 2%.
    DullTarget,
}

/// Minimum value of vivid pixels; cameras differ in lighting.
fn vivid_val_floor(camera_id: u32) -> u16 {
    [160, 192, 128][camera_id as usize % 3]
}

fn frame_hist(rng: &mut ChaCha8Rng, content: Content, camera_id: u32) -> HsvHistogram {
    let background = Component {
        hue: HueBand::Other,
        sat: (0, 256),
        val: (0, 256),
        pixels: rng.random_range(200..600),
    };
    let red_pixels: u64 = match content {
        Content::Plain => rng.random_range(0..40),
        Content::Vivid | Content::DullTarget => rng.random_range(150..450),
    };
    let vivid_share = match content {
        Content::Vivid => rng.random_range(0.25..0.7),
        Content::Plain | Content::DullTarget => rng.random_range(0.0..0.015),
    };
    let vivid = ((red_pixels as f64 * vivid_share) as u64 / CLUMP) * CLUMP;
    let dull = red_pixels - vivid;
    let parts = [
        background,
        Component {
            hue: HueBand::Red,
            sat: (0, 96),
            val: (0, 256),
            pixels: dull,
        },
        Component {
            hue: HueBand::Red,
            sat: (224, 256),
            val: (vivid_val_floor(camera_id), 256),
            pixels: vivid,
        },
    ];
    synth_hist(rng, Quantization::default(), &parts)
}

/// Object tracks: consecutive runs of 10–30 frames.
fn track_length(rng: &mut ChaCha8Rng) -> usize {
    rng.random_range(10..=30)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SegmentLengths {
    pub low_no_object: usize,
    pub high_with_objects: usize,
    pub high_no_object: usize,
}

impl Default for SegmentLengths {
    /// Five minutes each at 10 fps.
    fn default() -> Self {
        Self {
            low_no_object: 3000,
            high_with_objects: 3000,
            high_no_object: 3000,
        }
    }
}

impl SegmentLengths {
    pub fn total(&self) -> usize {
        self.low_no_object + self.high_with_objects + self.high_no_object
    }
}

/// Three-segment stream for one camera:
///
/// 1. low-utility frames with no target object (dropped by the blob filter);
/// 2. vivid red frames, each carrying at least one red object track;
/// 3. vivid red content with no target object. These frames are scattered
///    color without a large blob, so the blob filter drops them and the
///    backend cost returns to the first segment's profile.
pub fn generate_synthetic_scenario(seed: u64, segments: SegmentLengths, camera_id: u32, fps: f64) -> Vec<FrameRecord> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5ce7_a210 ^ ((camera_id as u64) << 32));
    let period = 1000.0 / fps;
    let mut frames = Vec::with_capacity(segments.total());
    let mut next_object = object_base(camera_id);
    let mut track_left = 0usize;
    let mut current: Vec<GroundTruthObject> = Vec::new();

    for k in 0..segments.total() {
        let seg = if k < segments.low_no_object {
            1
        } else if k < segments.low_no_object + segments.high_with_objects {
            2
        } else {
            3
        };
        let (content, flags, objects) = match seg {
            1 => (
                Content::Plain,
                StageFlags {
                    passes_blob_filter: false,
                    passes_color_filter: false,
                },
                Vec::new(),
            ),
            2 => {
                if track_left == 0 {
                    current = vec![GroundTruthObject {
                        object_id: next_object,
                        color: "red".into(),
                    }];
                    next_object += 1;
                    track_left = track_length(&mut rng);
                }
                track_left -= 1;
                (
                    Content::Vivid,
                    StageFlags {
                        passes_blob_filter: true,
                        passes_color_filter: true,
                    },
                    current.clone(),
                )
            }
            _ => (
                Content::Vivid,
                StageFlags {
                    passes_blob_filter: false,
                    passes_color_filter: true,
                },
                Vec::new(),
            ),
        };
        frames.push(FrameRecord {
            frame_id: k as u64,
            camera_id,
            generation_ms: k as f64 * period,
            objects,
            hist: frame_hist(&mut rng, content, camera_id),
            stage_flags: flags,
        });
    }
    frames
}

fn object_base(camera_id: u32) -> u64 {
    (camera_id as u64 + 1) * 1_000_000
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CorpusSpec {
    pub cameras: u32,
    pub frames_per_camera: usize,
    pub fps: f64,
    /// Probability that a gap between tracks ends on any given frame.
    pub track_start_prob: f64,
    /// Share of negative frames that carry dull target-hue content.
    pub hard_negative_share: f64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            cameras: 6,
            frames_per_camera: 1500,
            fps: 10.0,
            track_start_prob: 0.015,
            hard_negative_share: 0.5,
        }
    }
}

/// Labeled multi-camera corpus of red-object tracks against background
/// traffic. Frames are ordered by camera, then time.
pub fn generate_labeled_corpus(seed: u64, spec: &CorpusSpec) -> Vec<FrameRecord> {
    let mut out = Vec::with_capacity(spec.cameras as usize * spec.frames_per_camera);
    let period = 1000.0 / spec.fps;
    for cam in 0..spec.cameras {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ cam as u64);
        let mut next_object = object_base(cam);
        let mut track: Option<(u64, usize)> = None;
        for k in 0..spec.frames_per_camera {
            if track.is_none() && rng.random_bool(spec.track_start_prob) {
                track = Some((next_object, track_length(&mut rng)));
                next_object += 1;
            }
            let (content, objects) = match track.as_mut() {
                Some((id, left)) => {
                    let objects = vec![GroundTruthObject {
                        object_id: *id,
                        color: "red".into(),
                    }];
                    *left -= 1;
                    if *left == 0 {
                        track = None;
                    }
                    (Content::Vivid, objects)
                }
                None if rng.random_bool(spec.hard_negative_share) => (Content::DullTarget, Vec::new()),
                None => (Content::Plain, Vec::new()),
            };
            let pass = !objects.is_empty();
            out.push(FrameRecord {
                frame_id: k as u64,
                camera_id: cam,
                generation_ms: k as f64 * period,
                objects,
                hist: frame_hist(&mut rng, content, cam),
                stage_flags: StageFlags {
                    passes_blob_filter: pass,
                    passes_color_filter: pass,
                },
            });
        }
    }
    out
}
