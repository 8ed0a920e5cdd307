//! Quality-of-result accounting over a decision trace.

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::dataset::FrameRecord;
use crate::threshold::{threshold_for_drop_rate, Threshold, UtilityCdf};
use crate::utility::QueryExpr;

/// The part of a frame trace QoR needs.
pub trait ForwardTrace {
    fn forwarded(&self) -> bool;
    fn target_objects(&self) -> &[u64];
}

/// Fraction of the frames containing `object_id` that were forwarded.
pub fn per_object_qor<T: ForwardTrace>(trace: &[T], object_id: u64) -> Result<f64> {
    let (mut seen, mut fwd) = (0u64, 0u64);
    for f in trace {
        if f.target_objects().contains(&object_id) {
            seen += 1;
            if f.forwarded() {
                fwd += 1;
            }
        }
    }
    if seen == 0 {
        return Err(Error::input(format!("object {object_id} not in trace")));
    }
    Ok(fwd as f64 / seen as f64)
}

/// Per-object QoR for every target object, in one pass.
pub fn all_object_qor<T: ForwardTrace>(trace: &[T]) -> BTreeMap<u64, f64> {
    let mut counts: BTreeMap<u64, (u64, u64)> = BTreeMap::new();
    for f in trace {
        for &o in f.target_objects() {
            let c = counts.entry(o).or_default();
            c.0 += 1;
            if f.forwarded() {
                c.1 += 1;
            }
        }
    }
    counts
        .into_iter()
        .map(|(o, (seen, fwd))| (o, fwd as f64 / seen as f64))
        .collect()
}

/// Mean per-object QoR over all target objects; `None` when there are none.
pub fn overall_qor<T: ForwardTrace>(trace: &[T]) -> Option<f64> {
    let per = all_object_qor(trace);
    if per.is_empty() {
        None
    } else {
        Some(per.values().sum::<f64>() / per.len() as f64)
    }
}

/// Minimal trace row for offline (non-simulated) shedding.
#[derive(Debug, Clone, PartialEq)]
pub struct OfflineFrame {
    pub objects: Vec<u64>,
    pub forwarded: bool,
}

impl ForwardTrace for OfflineFrame {
    fn forwarded(&self) -> bool {
        self.forwarded
    }
    fn target_objects(&self) -> &[u64] {
        &self.objects
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TradeoffPoint {
    pub threshold: Option<f64>,
    pub drop_rate: f64,
    pub qor: Option<f64>,
}

/// Sheds every frame whose utility does not exceed `threshold`.
pub fn evaluate_threshold(
    frames: &[FrameRecord],
    utilities: &[f64],
    query: &QueryExpr,
    threshold: Threshold,
) -> TradeoffPoint {
    let trace: Vec<OfflineFrame> = frames
        .iter()
        .zip(utilities)
        .map(|(f, &u)| OfflineFrame {
            objects: f.target_objects(query),
            forwarded: !threshold.sheds(u),
        })
        .collect();
    summarize(&trace, threshold.value())
}

/// Picks the threshold for drop rate `r` from the frames' own utility CDF.
pub fn evaluate_rate(frames: &[FrameRecord], utilities: &[f64], query: &QueryExpr, r: f64) -> Result<TradeoffPoint> {
    let cdf = UtilityCdf::from_values(utilities.iter().copied())?;
    let t = threshold_for_drop_rate(&cdf, r)?;
    Ok(evaluate_threshold(frames, utilities, query, t))
}

/// Content-agnostic shedding: each frame dropped independently with
/// probability `r`.
pub fn evaluate_random(frames: &[FrameRecord], query: &QueryExpr, r: f64, seed: u64) -> TradeoffPoint {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let trace: Vec<OfflineFrame> = frames
        .iter()
        .map(|f| OfflineFrame {
            objects: f.target_objects(query),
            forwarded: !rng.random_bool(r.clamp(0.0, 1.0)),
        })
        .collect();
    summarize(&trace, None)
}

fn summarize(trace: &[OfflineFrame], threshold: Option<f64>) -> TradeoffPoint {
    let dropped = trace.iter().filter(|f| !f.forwarded).count();
    TradeoffPoint {
        threshold,
        drop_rate: if trace.is_empty() {
            0.0
        } else {
            dropped as f64 / trace.len() as f64
        },
        qor: overall_qor(trace),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn row(objects: &[u64], forwarded: bool) -> OfflineFrame {
        OfflineFrame {
            objects: objects.to_vec(),
            forwarded,
        }
    }

    #[test]
    fn per_object_examples() {
        let trace: Vec<_> = (0..10).map(|k| row(&[1], k < 7)).collect();
        assert_eq!(per_object_qor(&trace, 1).unwrap(), 0.7);
        let all: Vec<_> = (0..4).map(|_| row(&[2], true)).collect();
        assert_eq!(per_object_qor(&all, 2).unwrap(), 1.0);
        assert!(per_object_qor(&all, 3).is_err());
    }

    #[test]
    fn overall_examples() {
        let trace = vec![row(&[1], true), row(&[1], true), row(&[2], true), row(&[2], false)];
        assert_eq!(overall_qor(&trace), Some(0.75));
        let single = vec![row(&[5], true), row(&[5], false), row(&[], false)];
        assert_eq!(overall_qor(&single), Some(per_object_qor(&single, 5).unwrap()));
        assert_eq!(overall_qor(&[row(&[], true)]), None);
    }

    proptest! {
        #[test]
        fn qor_matches_recount(rows in prop::collection::vec((prop::collection::btree_set(0u64..6, 0..3), any::<bool>()), 1..60)) {
            let trace: Vec<_> = rows
                .iter()
                .map(|(objs, fwd)| row(&objs.iter().copied().collect::<Vec<_>>(), *fwd))
                .collect();
            let mut sum = 0.0;
            let mut n = 0;
            for o in 0..6u64 {
                let with: Vec<_> = rows.iter().filter(|(objs, _)| objs.contains(&o)).collect();
                if with.is_empty() {
                    prop_assert!(per_object_qor(&trace, o).is_err());
                    continue;
                }
                let fwd = with.iter().filter(|(_, f)| *f).count();
                let q = fwd as f64 / with.len() as f64;
                prop_assert_eq!(per_object_qor(&trace, o).unwrap(), q);
                sum += q;
                n += 1;
            }
            match overall_qor(&trace) {
                Some(q) => prop_assert!((q - sum / n as f64).abs() < 1e-12),
                None => prop_assert_eq!(n, 0),
            }
        }
    }
}
