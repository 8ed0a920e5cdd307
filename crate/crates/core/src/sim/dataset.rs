//! Frame records and the JSON-lines dataset format.
//!
//! One object per line:
//!
//! ```text
//! {"frame_id":0,"camera_id":0,"ts_ms":0.0,
//!  "objects":[{"object_id":7,"color":"red"}],
//!  "hist":{"quant":[1,32,32],"cells":[[3,7,7,120],...],"total":480},
//!  "stage_flags":{"passes_blob_filter":true,"passes_color_filter":true}}
//! ```
//!
//! `stage_flags` is optional; when absent a frame passes both filters iff
//! it carries at least one object.

use std::collections::BTreeSet;
use std::io::{BufRead, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::color::{extract_features, BinGrid, FrameFeatures, HsvHistogram, Palette, Quantization};
use crate::error::{Error, Result};
use crate::utility::{train_color_model, LabeledFrame, QueryExpr, UtilityModel};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroundTruthObject {
    pub object_id: u64,
    pub color: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct StageFlags {
    pub passes_blob_filter: bool,
    pub passes_color_filter: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "RecordJson", into = "RecordJson")]
pub struct FrameRecord {
    pub frame_id: u64,
    pub camera_id: u32,
    pub generation_ms: f64,
    pub objects: Vec<GroundTruthObject>,
    pub hist: HsvHistogram,
    pub stage_flags: StageFlags,
}

#[derive(Serialize, Deserialize)]
struct HistJson {
    quant: Quantization,
    cells: Vec<[u64; 4]>,
    total: u64,
}

#[derive(Serialize, Deserialize)]
struct RecordJson {
    frame_id: u64,
    camera_id: u32,
    ts_ms: f64,
    #[serde(default)]
    objects: Vec<GroundTruthObject>,
    hist: HistJson,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    stage_flags: Option<StageFlags>,
}

impl TryFrom<RecordJson> for FrameRecord {
    type Error = Error;

    fn try_from(r: RecordJson) -> Result<Self> {
        let cells = r
            .hist
            .cells
            .iter()
            .map(|&[h, s, v, n]| {
                let narrow = |x: u64| u16::try_from(x).map_err(|_| Error::input(format!("cell index {x} too large")));
                Ok(((narrow(h)?, narrow(s)?, narrow(v)?), n))
            })
            .collect::<Result<Vec<_>>>()?;
        let hist = HsvHistogram::from_cells(r.hist.quant, cells, r.hist.total)?;
        let stage_flags = r.stage_flags.unwrap_or(StageFlags {
            passes_blob_filter: !r.objects.is_empty(),
            passes_color_filter: !r.objects.is_empty(),
        });
        Ok(FrameRecord {
            frame_id: r.frame_id,
            camera_id: r.camera_id,
            generation_ms: r.ts_ms,
            objects: r.objects,
            hist,
            stage_flags,
        })
    }
}

impl From<FrameRecord> for RecordJson {
    fn from(f: FrameRecord) -> Self {
        RecordJson {
            frame_id: f.frame_id,
            camera_id: f.camera_id,
            ts_ms: f.generation_ms,
            hist: HistJson {
                quant: f.hist.quant(),
                cells: f
                    .hist
                    .cells()
                    .map(|((h, s, v), n)| [h as u64, s as u64, v as u64, n])
                    .collect(),
                total: f.hist.total_fg_pixels(),
            },
            objects: f.objects,
            stage_flags: Some(f.stage_flags),
        }
    }
}

impl FrameRecord {
    pub fn has_color(&self, color: &str) -> bool {
        self.objects.iter().any(|o| o.color == color)
    }

    /// Whether the frame satisfies the query's boolean semantics.
    pub fn matches(&self, query: &QueryExpr) -> bool {
        query.matches(&|c| self.has_color(c))
    }

    /// Ids of target objects this frame counts toward: objects of a color
    /// the query references, in frames that match the query.
    pub fn target_objects(&self, query: &QueryExpr) -> Vec<u64> {
        if !self.matches(query) {
            return Vec::new();
        }
        let colors = query.colors();
        let ids: BTreeSet<u64> = self
            .objects
            .iter()
            .filter(|o| colors.contains(&o.color.as_str()))
            .map(|o| o.object_id)
            .collect();
        ids.into_iter().collect()
    }

    pub fn features(&self, palette: &Palette, grid: &BinGrid) -> Result<FrameFeatures> {
        extract_features(&self.hist, palette, grid)
    }
}

/// Frames labeled per color: positive iff an object of that color is present.
pub fn label_for_color(frames: &[FrameRecord], features: &[FrameFeatures], color: &str) -> Vec<LabeledFrame> {
    frames
        .iter()
        .zip(features)
        .map(|(r, f)| LabeledFrame {
            features: f.clone(),
            label: r.has_color(color),
            frame_id: r.frame_id,
            camera_id: r.camera_id,
        })
        .collect()
}

/// Trains one color model per query color and returns the model together
/// with the query utilities of the training frames (the default seed of
/// the runtime utility history).
pub fn train_utility_model(
    frames: &[FrameRecord],
    palette: &Palette,
    grid: &BinGrid,
    query: QueryExpr,
) -> Result<(UtilityModel, Vec<f64>)> {
    if frames.is_empty() {
        return Err(Error::input("training set is empty"));
    }
    let mut sub = Palette::new();
    for c in query.colors() {
        let hue = palette
            .get(c)
            .ok_or_else(|| Error::config(format!("query color {c} not in palette")))?;
        sub.insert(c.to_string(), hue.clone());
    }
    let features: Vec<FrameFeatures> = frames.iter().map(|f| f.features(&sub, grid)).collect::<Result<_>>()?;
    let mut colors = std::collections::BTreeMap::new();
    for (name, hue) in &sub {
        let labeled = label_for_color(frames, &features, name);
        colors.insert(name.clone(), train_color_model(&labeled, name, hue, grid)?);
    }
    let model = UtilityModel::new(colors, query)?;
    let utilities = features.iter().map(|f| model.query_utility(f)).collect::<Result<_>>()?;
    Ok((model, utilities))
}

pub fn write_jsonl<W: Write>(mut w: W, frames: &[FrameRecord]) -> Result<()> {
    for f in frames {
        serde_json::to_writer(&mut w, f)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_jsonl<R: BufRead>(r: R) -> Result<Vec<FrameRecord>> {
    let mut out = Vec::new();
    for (n, line) in r.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: FrameRecord =
            serde_json::from_str(&line).map_err(|e| Error::Format(format!("line {}: {e}", n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

pub fn save_dataset(path: &Path, frames: &[FrameRecord]) -> Result<()> {
    let f = std::fs::File::create(path)?;
    write_jsonl(std::io::BufWriter::new(f), frames)
}

pub fn load_dataset(path: &Path) -> Result<Vec<FrameRecord>> {
    let f = std::fs::File::open(path)?;
    read_jsonl(std::io::BufReader::new(f))
}

/// Parses a colors config: JSON map of name to `[[lo, hi], ...]`.
pub fn parse_palette(json: &str) -> Result<Palette> {
    Ok(serde_json::from_str(json)?)
}
