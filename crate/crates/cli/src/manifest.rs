//! Run manifests (TOML, `version = 1`).
//!
//! ```toml
//! version = 1
//! model = "model.json"
//! dataset = "scenario.jsonl"
//! training_dataset = "corpus.jsonl"   # seeds the utility history
//! out = "runs/utility"
//! seed = 0
//! baseline = "utility"                # or "random"
//! # rate = 0.5                        # pin the drop rate
//! # lb_ms = 1000
//! # cameras = 2                       # replay only the first N cameras
//!
//! [sim]                               # any SimConfig field
//! deadline_guard = true
//! [sim.control]
//! update_period_ms = 1000
//! ```
//!
//! Relative paths resolve against the manifest's directory. Top-level keys
//! take precedence over the same settings inside `[sim]`.

use std::path::{Path, PathBuf};

use clap::ValueEnum;
use serde::{Deserialize, Serialize};
use vidshed::sim::{ShedPolicy, SimConfig};

use crate::{read_input, usage};

pub const MANIFEST_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, ValueEnum, Default)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    Utility,
    Random,
}

impl From<Baseline> for ShedPolicy {
    fn from(b: Baseline) -> Self {
        match b {
            Baseline::Utility => ShedPolicy::Utility,
            Baseline::Random => ShedPolicy::Random,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunManifest {
    pub version: u32,
    pub model: Option<PathBuf>,
    pub dataset: Option<PathBuf>,
    pub training_dataset: Option<PathBuf>,
    pub out: Option<PathBuf>,
    pub seed: Option<u64>,
    pub baseline: Option<Baseline>,
    pub rate: Option<f64>,
    pub lb_ms: Option<f64>,
    pub cameras: Option<usize>,
    #[serde(default)]
    pub sim: SimConfig,
}

impl Default for RunManifest {
    fn default() -> Self {
        Self {
            version: MANIFEST_VERSION,
            model: None,
            dataset: None,
            training_dataset: None,
            out: None,
            seed: None,
            baseline: None,
            rate: None,
            lb_ms: None,
            cameras: None,
            sim: SimConfig::default(),
        }
    }
}

impl RunManifest {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = read_input(path)?;
        let mut m: RunManifest = toml::from_str(&text)
            .map_err(|e| anyhow::Error::new(e).context(format!("parsing manifest {}", path.display())))?;
        if m.version != MANIFEST_VERSION {
            return Err(usage(format!(
                "manifest version {} unsupported (expected {MANIFEST_VERSION})",
                m.version
            )));
        }
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [&mut m.model, &mut m.dataset, &mut m.training_dataset, &mut m.out]
            .into_iter()
            .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        Ok(m)
    }

    /// The simulation config with top-level settings applied.
    pub fn sim_config(&self) -> SimConfig {
        let mut cfg = self.sim.clone();
        if let Some(s) = self.seed {
            cfg.seed = s;
        }
        if let Some(b) = self.baseline {
            cfg.policy = b.into();
        }
        if let Some(r) = self.rate {
            cfg.control.fixed_drop_rate = Some(r);
        }
        if let Some(lb) = self.lb_ms {
            cfg.control.latency_bound_ms = lb;
        }
        cfg
    }
}
