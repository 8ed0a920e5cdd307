use std::cmp::Reverse;
use std::collections::BinaryHeap;

use ordered_float::OrderedFloat;

use crate::error::{Error, Result};
use crate::sim::dataset::FrameRecord;

/// Merges per-camera streams into one stream ordered by generation time,
/// ties broken by camera id.
pub fn interleave_cameras(streams: Vec<Vec<FrameRecord>>) -> Result<Vec<FrameRecord>> {
    for (k, s) in streams.iter().enumerate() {
        if s.windows(2).any(|w| w[1].generation_ms < w[0].generation_ms) {
            return Err(Error::input(format!("stream {k} is not timestamp ordered")));
        }
    }
    let total = streams.iter().map(Vec::len).sum();
    let mut iters: Vec<_> = streams.into_iter().map(|s| s.into_iter().peekable()).collect();
    let mut heap = BinaryHeap::new();
    for (k, it) in iters.iter_mut().enumerate() {
        if let Some(f) = it.peek() {
            heap.push(Reverse((OrderedFloat(f.generation_ms), f.camera_id, k)));
        }
    }
    let mut out = Vec::with_capacity(total);
    while let Some(Reverse((_, _, k))) = heap.pop() {
        let f = iters[k].next().expect("peeked");
        out.push(f);
        if let Some(next) = iters[k].peek() {
            heap.push(Reverse((OrderedFloat(next.generation_ms), next.camera_id, k)));
        }
    }
    Ok(out)
}

/// Splits a mixed stream into per-camera streams, ordered by camera id.
pub fn split_by_camera(frames: Vec<FrameRecord>) -> Vec<Vec<FrameRecord>> {
    let mut by_cam: std::collections::BTreeMap<u32, Vec<FrameRecord>> = Default::default();
    for f in frames {
        by_cam.entry(f.camera_id).or_default().push(f);
    }
    by_cam.into_values().collect()
}

/// Shifts a stream's timestamps by `offset_ms`.
pub fn offset_stream(frames: &mut [FrameRecord], offset_ms: f64) {
    for f in frames {
        f.generation_ms += offset_ms;
    }
}
