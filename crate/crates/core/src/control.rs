//! Latency-driven control of the shedder: supported throughput, target drop
//! rate, dynamic queue capacity and the periodic control tick that ties
//! them to the utility threshold.

use std::fmt::Write as _;
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::threshold::{build_cdf, threshold_for_drop_rate, Threshold, UtilityHistory, DEFAULT_HISTORY_WINDOW};

/// Upper bound on the queue capacity returned when the backend is fast
/// enough that the latency bound would admit an unbounded queue.
pub const MAX_QUEUE_CAPACITY: usize = 1 << 16;

/// Fixed per-frame latency terms outside the backend query.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct FixedLatencies {
    pub net_cam_ls_ms: f64,
    pub net_ls_q_ms: f64,
    pub proc_cam_ms: f64,
}

impl FixedLatencies {
    pub fn total(&self) -> f64 {
        self.net_cam_ls_ms + self.net_ls_q_ms + self.proc_cam_ms
    }
}

impl Default for FixedLatencies {
    fn default() -> Self {
        Self {
            net_cam_ls_ms: 10.0,
            net_ls_q_ms: 10.0,
            proc_cam_ms: 20.0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LatencyEstimates {
    pub proc_q_ms: f64,
    pub net_cam_ls_ms: f64,
    pub net_ls_q_ms: f64,
    pub proc_cam_ms: f64,
    pub fps_in: f64,
}

impl LatencyEstimates {
    pub fn new(proc_q_ms: f64, fixed: FixedLatencies, fps_in: f64) -> Self {
        Self {
            proc_q_ms,
            net_cam_ls_ms: fixed.net_cam_ls_ms,
            net_ls_q_ms: fixed.net_ls_q_ms,
            proc_cam_ms: fixed.proc_cam_ms,
            fps_in,
        }
    }

    pub fn fixed(&self) -> FixedLatencies {
        FixedLatencies {
            net_cam_ls_ms: self.net_cam_ls_ms,
            net_ls_q_ms: self.net_ls_q_ms,
            proc_cam_ms: self.proc_cam_ms,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProcEstimator {
    Mean,
    #[default]
    Ewma,
}

/// Which backend latency samples feed `proc_Q`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ProcBasis {
    #[default]
    ExecOnly,
    QueueAndExec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControlConfig {
    pub latency_bound_ms: f64,
    pub update_period_ms: f64,
    pub estimator: ProcEstimator,
    pub ewma_alpha: f64,
    pub proc_basis: ProcBasis,
    pub fixed: FixedLatencies,
    pub history_window: usize,
    /// Pins the target drop rate instead of deriving it from throughput.
    pub fixed_drop_rate: Option<f64>,
}

impl Default for ControlConfig {
    fn default() -> Self {
        Self {
            latency_bound_ms: 1000.0,
            update_period_ms: 1000.0,
            estimator: ProcEstimator::Ewma,
            ewma_alpha: 0.2,
            proc_basis: ProcBasis::ExecOnly,
            fixed: FixedLatencies::default(),
            history_window: DEFAULT_HISTORY_WINDOW,
            fixed_drop_rate: None,
        }
    }
}

impl ControlConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.latency_bound_ms > self.fixed.total()) {
            return Err(Error::config(format!(
                "latency bound {} ms does not exceed fixed latencies {} ms",
                self.latency_bound_ms,
                self.fixed.total()
            )));
        }
        if !(self.update_period_ms > 0.0) {
            return Err(Error::config("update period must be positive"));
        }
        if !(self.ewma_alpha > 0.0 && self.ewma_alpha <= 1.0) {
            return Err(Error::config(format!("ewma alpha {} outside (0, 1]", self.ewma_alpha)));
        }
        if let Some(r) = self.fixed_drop_rate {
            if !(0.0..=1.0).contains(&r) {
                return Err(Error::config(format!("fixed drop rate {r} outside [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Frames per second the backend sustains at the current processing latency.
pub fn supported_throughput(est: &LatencyEstimates) -> Result<f64> {
    if !(est.proc_q_ms > 0.0) {
        return Err(Error::NotMeasured);
    }
    Ok(1000.0 / est.proc_q_ms)
}

/// `max(0, 1 − st/fps_in)`; an idle stream needs no shedding.
pub fn target_drop_rate(st: f64, fps_in: f64) -> f64 {
    if !(fps_in > 0.0) {
        return 0.0;
    }
    (1.0 - st / fps_in).max(0.0)
}

/// Largest queue length whose last frame still meets the latency bound,
/// never less than one.
pub fn queue_capacity(est: &LatencyEstimates, cfg: &ControlConfig) -> usize {
    let slack = cfg.latency_bound_ms - est.fixed().total();
    if !(est.proc_q_ms > 0.0) {
        return MAX_QUEUE_CAPACITY;
    }
    if slack < est.proc_q_ms {
        return 1;
    }
    let mut k = ((slack / est.proc_q_ms).floor() as usize).min(MAX_QUEUE_CAPACITY);
    while k < MAX_QUEUE_CAPACITY && (k + 1) as f64 * est.proc_q_ms <= slack {
        k += 1;
    }
    while k > 1 && k as f64 * est.proc_q_ms > slack {
        k -= 1;
    }
    k.max(1)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlOutput {
    pub threshold: Threshold,
    pub capacity: usize,
    pub drop_rate: f64,
}

/// One line of the control log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ControlRecord {
    pub t_ms: f64,
    pub proc_q_ms: f64,
    pub fps_in: f64,
    pub st: f64,
    pub r: f64,
    pub u_th: Option<f64>,
    pub capacity: usize,
    /// Outputs were carried over because no latency sample arrived.
    pub held: bool,
}

impl ControlRecord {
    pub const CSV_HEADER: &'static str = "t_ms,proc_q_ms,fps_in,st,r,u_th,capacity,held";

    pub fn csv_row(&self) -> String {
        let u_th = self.u_th.map_or_else(|| "none".to_string(), |u| u.to_string());
        format!(
            "{},{},{},{},{},{},{},{}",
            self.t_ms, self.proc_q_ms, self.fps_in, self.st, self.r, u_th, self.capacity, self.held
        )
    }
}

pub fn control_log_csv(records: &[ControlRecord]) -> String {
    let mut out = String::from(ControlRecord::CSV_HEADER);
    out.push('\n');
    for r in records {
        let _ = writeln!(out, "{}", r.csv_row());
    }
    out
}

/// Recomputes `(st, r, capacity)` of a logged tick from its inputs alone.
pub fn replay_record(rec: &ControlRecord, cfg: &ControlConfig) -> Result<(f64, f64, usize)> {
    let est = LatencyEstimates::new(rec.proc_q_ms, cfg.fixed, rec.fps_in);
    let st = supported_throughput(&est)?;
    let r = cfg.fixed_drop_rate.unwrap_or_else(|| target_drop_rate(st, rec.fps_in));
    Ok((st, r, queue_capacity(&est, cfg)))
}

/// The periodic controller. Feed it ingress utilities and backend latency
/// samples; call [`ControlLoop::tick`] once per update period.
#[derive(Debug, Clone)]
pub struct ControlLoop {
    cfg: ControlConfig,
    history: UtilityHistory,
    ewma: Option<f64>,
    window_samples: Vec<f64>,
    window_arrivals: usize,
    last_tick_ms: f64,
    last_sample_ms: Option<f64>,
    mean_estimate: Option<f64>,
    current: Option<ControlOutput>,
    log: Vec<ControlRecord>,
}

impl ControlLoop {
    pub fn new(cfg: ControlConfig, history: UtilityHistory) -> Result<Self> {
        cfg.validate()?;
        Ok(Self {
            cfg,
            history,
            ewma: None,
            window_samples: Vec::new(),
            window_arrivals: 0,
            last_tick_ms: 0.0,
            last_sample_ms: None,
            mean_estimate: None,
            current: None,
            log: Vec::new(),
        })
    }

    pub fn config(&self) -> &ControlConfig {
        &self.cfg
    }

    pub fn history(&self) -> &UtilityHistory {
        &self.history
    }

    pub fn log(&self) -> &[ControlRecord] {
        &self.log
    }

    pub fn into_log(self) -> Vec<ControlRecord> {
        self.log
    }

    pub fn current(&self) -> Option<ControlOutput> {
        self.current
    }

    /// Records an ingress frame's utility.
    pub fn observe_ingress(&mut self, utility: f64) {
        self.history.push(utility);
        self.window_arrivals += 1;
    }

    /// Records a completed frame's backend latency split into queueing and
    /// execution time.
    pub fn observe_completion(&mut self, queue_ms: f64, exec_ms: f64) {
        let sample = match self.cfg.proc_basis {
            ProcBasis::ExecOnly => exec_ms,
            ProcBasis::QueueAndExec => queue_ms + exec_ms,
        };
        let a = self.cfg.ewma_alpha;
        self.ewma = Some(match self.ewma {
            None => sample,
            Some(prev) => (1.0 - a) * prev + a * sample,
        });
        self.window_samples.push(sample);
        self.last_sample_ms = Some(sample);
    }

    /// Current `proc_Q` estimate, if any sample has been seen.
    pub fn proc_estimate(&self) -> Option<f64> {
        match self.cfg.estimator {
            ProcEstimator::Ewma => self.ewma,
            ProcEstimator::Mean => self.mean_estimate,
        }
    }

    pub fn last_sample(&self) -> Option<f64> {
        self.last_sample_ms
    }

    /// Runs one control update at virtual time `now_ms`.
    ///
    /// Returns `None` until the first latency sample arrives (unless the drop
    /// rate is pinned). When a period passes without samples the previous
    /// outputs are held and logged as such.
    pub fn tick(&mut self, now_ms: f64) -> Option<ControlOutput> {
        let elapsed_s = ((now_ms - self.last_tick_ms) / 1000.0).max(1e-9);
        let fps_in = self.window_arrivals as f64 / elapsed_s;
        let had_samples = !self.window_samples.is_empty();
        if had_samples {
            let n = self.window_samples.len() as f64;
            self.mean_estimate = Some(self.window_samples.iter().sum::<f64>() / n);
        }
        self.window_samples.clear();
        self.window_arrivals = 0;
        self.last_tick_ms = now_ms;

        let proc_q = self.proc_estimate();
        let out = match (proc_q, had_samples, self.current) {
            (Some(p), false, Some(prev)) => {
                self.push_record(now_ms, p, fps_in, 1000.0 / p, prev, true);
                return Some(prev);
            }
            (Some(p), _, _) => {
                let est = LatencyEstimates::new(p, self.cfg.fixed, fps_in);
                let st = supported_throughput(&est).unwrap_or(f64::INFINITY);
                let r = self.cfg.fixed_drop_rate.unwrap_or_else(|| target_drop_rate(st, fps_in));
                let out = ControlOutput {
                    threshold: self.threshold_for(r),
                    capacity: queue_capacity(&est, &self.cfg),
                    drop_rate: r,
                };
                self.push_record(now_ms, p, fps_in, st, out, false);
                out
            }
            (None, _, _) => {
                let r = self.cfg.fixed_drop_rate?;
                let out = ControlOutput {
                    threshold: self.threshold_for(r),
                    capacity: self.current.map_or(MAX_QUEUE_CAPACITY, |c| c.capacity),
                    drop_rate: r,
                };
                self.push_record(now_ms, 0.0, fps_in, 0.0, out, false);
                out
            }
        };
        self.current = Some(out);
        Some(out)
    }

    fn threshold_for(&self, r: f64) -> Threshold {
        match build_cdf(&self.history) {
            Ok(cdf) => threshold_for_drop_rate(&cdf, r).unwrap_or(Threshold::ShedNone),
            Err(_) => Threshold::ShedNone,
        }
    }

    fn push_record(&mut self, t_ms: f64, proc_q_ms: f64, fps_in: f64, st: f64, out: ControlOutput, held: bool) {
        self.log.push(ControlRecord {
            t_ms,
            proc_q_ms,
            fps_in,
            st,
            r: out.drop_rate,
            u_th: out.threshold.value(),
            capacity: out.capacity,
            held,
        });
    }
}

/// Lock-free cells through which a control task publishes its outputs to
/// the dataplane.
#[derive(Debug)]
pub struct SharedControl {
    threshold_bits: AtomicU64,
    capacity: AtomicUsize,
}

const SHED_NONE_BITS: u64 = u64::MAX;

impl SharedControl {
    pub fn new(threshold: Threshold, capacity: usize) -> Self {
        let cell = Self {
            threshold_bits: AtomicU64::new(SHED_NONE_BITS),
            capacity: AtomicUsize::new(capacity.max(1)),
        };
        cell.set_threshold(threshold);
        cell
    }

    pub fn set_threshold(&self, t: Threshold) {
        let bits = t.value().map_or(SHED_NONE_BITS, f64::to_bits);
        self.threshold_bits.store(bits, Ordering::Release);
    }

    pub fn threshold(&self) -> Threshold {
        match self.threshold_bits.load(Ordering::Acquire) {
            SHED_NONE_BITS => Threshold::ShedNone,
            bits => Threshold::Value(f64::from_bits(bits)),
        }
    }

    pub fn set_capacity(&self, c: usize) {
        self.capacity.store(c.max(1), Ordering::Release);
    }

    pub fn capacity(&self) -> usize {
        self.capacity.load(Ordering::Acquire)
    }

    pub fn publish(&self, out: &ControlOutput) {
        self.set_threshold(out.threshold);
        self.set_capacity(out.capacity);
    }
}
