//! Replay of camera streams through the shedder and a simulated backend.

pub mod backend;
pub mod dataset;
pub mod engine;
pub mod interleave;
pub mod qor;
pub mod synth;

pub use backend::{default_operator_chain, LatencyDist, OpTrace, OperatorProfile, PassRule};
pub use dataset::{load_dataset, save_dataset, train_utility_model, FrameRecord, GroundTruthObject, StageFlags};
pub use engine::{run_simulation, FrameTrace, RunReport, RunSummary, ShedMode, ShedPolicy, SimConfig};
pub use interleave::interleave_cameras;
pub use qor::{overall_qor, per_object_qor};
pub use synth::{generate_labeled_corpus, generate_synthetic_scenario, CorpusSpec, SegmentLengths};
