//! Latency-profiled operators of the backend query.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sim::dataset::FrameRecord;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LatencyDist {
    Constant {
        ms: f64,
    },
    Uniform {
        lo: f64,
        hi: f64,
    },
    /// Truncated at zero.
    Normal {
        mean: f64,
        std: f64,
    },
}

impl LatencyDist {
    pub fn sample(&self, rng: &mut ChaCha8Rng) -> f64 {
        match *self {
            LatencyDist::Constant { ms } => ms,
            LatencyDist::Uniform { lo, hi } => {
                if hi > lo {
                    rng.random_range(lo..hi)
                } else {
                    lo
                }
            }
            LatencyDist::Normal { mean, std } => {
                let n = Normal::new(mean, std).expect("validated");
                n.sample(rng).max(0.0)
            }
        }
    }

    pub fn mean(&self) -> f64 {
        match *self {
            LatencyDist::Constant { ms } => ms,
            LatencyDist::Uniform { lo, hi } => (lo + hi) / 2.0,
            LatencyDist::Normal { mean, .. } => mean,
        }
    }

    fn validate(&self) -> Result<()> {
        let ok = match *self {
            LatencyDist::Constant { ms } => ms >= 0.0,
            LatencyDist::Uniform { lo, hi } => lo >= 0.0 && hi >= lo,
            LatencyDist::Normal { mean, std } => mean >= 0.0 && std >= 0.0 && std.is_finite(),
        };
        if ok {
            Ok(())
        } else {
            Err(Error::config(format!("invalid latency distribution {self:?}")))
        }
    }
}

/// Which frames an operator lets through to the next stage.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PassRule {
    Always,
    BlobFilter,
    ColorFilter,
    /// Detector output: continues only if a ground-truth object is present.
    HasObject,
}

impl PassRule {
    pub fn passes(&self, frame: &FrameRecord) -> bool {
        match self {
            PassRule::Always => true,
            PassRule::BlobFilter => frame.stage_flags.passes_blob_filter,
            PassRule::ColorFilter => frame.stage_flags.passes_color_filter,
            PassRule::HasObject => !frame.objects.is_empty(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OperatorProfile {
    pub name: String,
    pub exec: LatencyDist,
    pub pass: PassRule,
}

impl OperatorProfile {
    pub fn new(name: &str, exec: LatencyDist, pass: PassRule) -> Self {
        Self {
            name: name.into(),
            exec,
            pass,
        }
    }
}

/// Blob filter, color filter, detector, sink.
pub fn default_operator_chain(dnn_ms: f64) -> Vec<OperatorProfile> {
    vec![
        OperatorProfile::new("blob_filter", LatencyDist::Constant { ms: 2.0 }, PassRule::BlobFilter),
        OperatorProfile::new("color_filter", LatencyDist::Constant { ms: 3.0 }, PassRule::ColorFilter),
        OperatorProfile::new("dnn", LatencyDist::Constant { ms: dnn_ms }, PassRule::HasObject),
        OperatorProfile::new("sink", LatencyDist::Constant { ms: 1.0 }, PassRule::Always),
    ]
}

pub fn validate_chain(chain: &[OperatorProfile]) -> Result<()> {
    if chain.is_empty() {
        return Err(Error::config("operator chain is empty"));
    }
    chain.iter().try_for_each(|op| op.exec.validate())
}

/// Per-operator latency of one frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OpTrace {
    pub op: usize,
    pub queue_ms: f64,
    pub exec_ms: f64,
}

/// Runs a frame through the chain on a serial executor starting at
/// `start_ms`, having waited `first_queue_ms` for the executor. Stops after
/// the first operator that does not pass the frame.
pub fn execute_chain(
    chain: &[OperatorProfile],
    frame: &FrameRecord,
    first_queue_ms: f64,
    rng: &mut ChaCha8Rng,
) -> Vec<OpTrace> {
    let mut out = Vec::with_capacity(chain.len());
    for (k, op) in chain.iter().enumerate() {
        out.push(OpTrace {
            op: k,
            queue_ms: if k == 0 { first_queue_ms } else { 0.0 },
            exec_ms: op.exec.sample(rng),
        });
        if !op.pass.passes(frame) {
            break;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::color::{HsvHistogram, Quantization};
    use crate::sim::dataset::{GroundTruthObject, StageFlags};
    use rand::SeedableRng;

    fn frame(blob: bool, color: bool, object: bool) -> FrameRecord {
        FrameRecord {
            frame_id: 0,
            camera_id: 0,
            generation_ms: 0.0,
            objects: if object {
                vec![GroundTruthObject {
                    object_id: 1,
                    color: "red".into(),
                }]
            } else {
                vec![]
            },
            hist: HsvHistogram::empty(Quantization::default()),
            stage_flags: StageFlags {
                passes_blob_filter: blob,
                passes_color_filter: color,
            },
        }
    }

    #[test]
    fn chain_stops_at_failing_filter() {
        let chain = default_operator_chain(300.0);
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = execute_chain(&chain, &frame(false, true, false), 4.0, &mut rng);
        assert_eq!(t.len(), 1);
        assert_eq!((t[0].queue_ms, t[0].exec_ms), (4.0, 2.0));
        let t = execute_chain(&chain, &frame(true, false, false), 0.0, &mut rng);
        assert_eq!(t.len(), 2);
        let t = execute_chain(&chain, &frame(true, true, false), 0.0, &mut rng);
        assert_eq!(t.iter().map(|o| o.exec_ms).sum::<f64>(), 305.0);
        let t = execute_chain(&chain, &frame(true, true, true), 0.0, &mut rng);
        assert_eq!(t.iter().map(|o| o.exec_ms).sum::<f64>(), 306.0);
    }

    #[test]
    fn distributions() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let u = LatencyDist::Uniform { lo: 5.0, hi: 7.0 }.sample(&mut rng);
            assert!((5.0..7.0).contains(&u));
            assert!(LatencyDist::Normal { mean: 1.0, std: 5.0 }.sample(&mut rng) >= 0.0);
        }
        assert!(LatencyDist::Constant { ms: -1.0 }.validate().is_err());
        assert!(LatencyDist::Uniform { lo: 3.0, hi: 1.0 }.validate().is_err());
        assert!(validate_chain(&[]).is_err());
    }
}
