//! Virtual-clock discrete-event simulation of cameras → shedder → backend.
//!
//! Timeline of a forwarded frame:
//!
//! ```text
//! generation ─proc_cam─ ─net_cam_ls─▶ shedder ─wait─▶ dispatch ─net_ls_q─▶
//!   backend: queue_0 + exec_0 + exec_1 + … ─▶ completion (token returned)
//! ```
//!
//! Every run is a pure function of its config, model, frames and seed.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BinaryHeap, VecDeque};
use std::fmt::Write as _;

use ordered_float::OrderedFloat;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::color::Palette;
use crate::control::{ControlConfig, ControlLoop, ControlRecord, MAX_QUEUE_CAPACITY};
use crate::error::{Error, Result};
use crate::shedder::{FrameMeta, Settled, ShedDecision, Shedder, ShedderConfig};
use crate::sim::backend::{default_operator_chain, execute_chain, validate_chain, OpTrace, OperatorProfile};
use crate::sim::dataset::FrameRecord;
use crate::sim::qor::{all_object_qor, ForwardTrace};
use crate::threshold::UtilityHistory;
use crate::utility::{hex_digest, UtilityModel};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShedPolicy {
    /// Frames scored by the utility model.
    #[default]
    Utility,
    /// Content-agnostic: each frame gets an independent uniform utility.
    Random,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum ShedMode {
    /// Control loop drives threshold and queue capacity.
    #[default]
    Adaptive,
    /// Pass-through: no threshold, unbounded queue, no deadline drops.
    Disabled,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimConfig {
    pub operators: Vec<OperatorProfile>,
    pub control: ControlConfig,
    pub max_tokens: usize,
    pub seed: u64,
    /// Only frames generated before this time are replayed.
    pub duration_ms: Option<f64>,
    pub policy: ShedPolicy,
    pub mode: ShedMode,
    /// Drop queued frames at dispatch when they cannot finish in time.
    pub deadline_guard: bool,
    pub bucket_ms: f64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            operators: default_operator_chain(300.0),
            control: ControlConfig::default(),
            max_tokens: 1,
            seed: 0,
            duration_ms: None,
            policy: ShedPolicy::Utility,
            mode: ShedMode::Adaptive,
            deadline_guard: true,
            bucket_ms: 5000.0,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        validate_chain(&self.operators)?;
        self.control.validate()?;
        if self.max_tokens == 0 {
            return Err(Error::config("max_tokens must be at least 1"));
        }
        if !(self.bucket_ms > 0.0) {
            return Err(Error::config("bucket_ms must be positive"));
        }
        Ok(())
    }

    /// Hash of the settings that must agree for two runs to be compared:
    /// everything except policy, seed and a pinned drop rate.
    pub fn comparison_fingerprint(&self) -> String {
        let mut c = self.clone();
        c.seed = 0;
        c.policy = ShedPolicy::Utility;
        c.control.fixed_drop_rate = None;
        hex_digest(&serde_json::to_vec(&c).expect("config serializes"))
    }
}

/// Everything recorded about one ingress frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameTrace {
    pub frame_id: u64,
    pub camera_id: u32,
    pub generation_ms: f64,
    pub arrival_ms: f64,
    pub utility: f64,
    pub decision: ShedDecision,
    pub decided_ms: f64,
    pub u_th_at_decision: Option<f64>,
    pub objects: Vec<u64>,
    pub backend: Vec<OpTrace>,
    pub backend_arrival_ms: Option<f64>,
    pub completed_ms: Option<f64>,
    pub e2e_ms: Option<f64>,
}

impl FrameTrace {
    pub fn shedder_wait_ms(&self) -> Option<f64> {
        (self.decision == ShedDecision::Forwarded).then_some(self.decided_ms - self.arrival_ms)
    }
}

impl ForwardTrace for FrameTrace {
    fn forwarded(&self) -> bool {
        self.decision == ShedDecision::Forwarded
    }
    fn target_objects(&self) -> &[u64] {
        &self.objects
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueueSample {
    pub t_ms: f64,
    pub queue_len: usize,
    pub capacity: usize,
    pub backend_queue_len: usize,
}

/// Aggregates over frames generated within one bucket.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub start_ms: f64,
    pub ingress: u64,
    pub forwarded: u64,
    pub shed: u64,
    /// Frames that reached each operator, in chain order.
    pub reached: Vec<u64>,
    pub completed: u64,
    pub violations: u64,
    pub max_e2e_ms: Option<f64>,
    pub mean_e2e_ms: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub policy: ShedPolicy,
    pub mode: ShedMode,
    pub seed: u64,
    pub latency_bound_ms: f64,
    pub fixed_drop_rate: Option<f64>,
    pub ingress: u64,
    pub forwarded: u64,
    pub shed_by_threshold: u64,
    pub shed_by_queue_eviction: u64,
    pub shed_by_resize: u64,
    pub shed_by_deadline: u64,
    pub observed_drop_rate: f64,
    pub completed: u64,
    pub violations: u64,
    pub target_objects: usize,
    pub overall_qor: Option<f64>,
    pub qor_note: Option<String>,
    pub max_e2e_ms: Option<f64>,
    pub mean_e2e_ms: Option<f64>,
    pub max_queue_len: usize,
    pub max_backend_queue_len: usize,
    pub config_fingerprint: String,
    pub dataset_fingerprint: String,
    pub model_hash: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub summary: RunSummary,
    pub operators: Vec<String>,
    pub per_object_qor: BTreeMap<u64, f64>,
    pub frames: Vec<FrameTrace>,
    pub control_log: Vec<ControlRecord>,
    pub queue_samples: Vec<QueueSample>,
    pub buckets: Vec<Bucket>,
}

impl RunReport {
    pub fn buckets_csv(&self) -> String {
        let mut out = String::from("start_ms,ingress,forwarded,shed,completed,violations,max_e2e_ms,mean_e2e_ms");
        for op in &self.operators {
            let _ = write!(out, ",reached_{op}");
        }
        out.push('\n');
        let opt = |x: Option<f64>| x.map_or_else(String::new, |v| v.to_string());
        for b in &self.buckets {
            let _ = write!(
                out,
                "{},{},{},{},{},{},{},{}",
                b.start_ms,
                b.ingress,
                b.forwarded,
                b.shed,
                b.completed,
                b.violations,
                opt(b.max_e2e_ms),
                opt(b.mean_e2e_ms)
            );
            for r in &b.reached {
                let _ = write!(out, ",{r}");
            }
            out.push('\n');
        }
        out
    }

    pub fn queue_csv(&self) -> String {
        let mut out = String::from("t_ms,queue_len,capacity,backend_queue_len\n");
        for q in &self.queue_samples {
            let _ = writeln!(out, "{},{},{},{}", q.t_ms, q.queue_len, q.capacity, q.backend_queue_len);
        }
        out
    }

    /// Decision log, one JSON object per frame in arrival order.
    pub fn decisions_jsonl(&self) -> String {
        let mut out = String::new();
        for f in &self.frames {
            let rec = serde_json::json!({
                "frame_id": f.frame_id,
                "camera_id": f.camera_id,
                "utility": f.utility,
                "decision": f.decision,
                "u_th_at_decision": f.u_th_at_decision,
                "ts": f.decided_ms,
                "e2e_ms": f.e2e_ms,
            });
            out.push_str(&rec.to_string());
            out.push('\n');
        }
        out
    }
}

/// Hash over frame identities, timing and ground truth.
pub fn dataset_fingerprint(frames: &[FrameRecord]) -> String {
    let mut buf = Vec::with_capacity(frames.len() * 24);
    for f in frames {
        buf.extend_from_slice(&f.camera_id.to_le_bytes());
        buf.extend_from_slice(&f.frame_id.to_le_bytes());
        buf.extend_from_slice(&f.generation_ms.to_bits().to_le_bytes());
        for o in &f.objects {
            buf.extend_from_slice(&o.object_id.to_le_bytes());
        }
        buf.extend_from_slice(&f.hist.total_fg_pixels().to_le_bytes());
    }
    hex_digest(&buf)
}

#[derive(Debug, Clone, Copy)]
enum Ev {
    Arrive(usize),
    BackendArrive(usize),
    BackendDone(usize),
    Tick,
}

struct Scheduled {
    t: OrderedFloat<f64>,
    seq: u64,
    ev: Ev,
}

impl PartialEq for Scheduled {
    fn eq(&self, o: &Self) -> bool {
        (self.t, self.seq) == (o.t, o.seq)
    }
}
impl Eq for Scheduled {}
impl PartialOrd for Scheduled {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        Some(self.cmp(o))
    }
}
impl Ord for Scheduled {
    // reversed: BinaryHeap pops the earliest event
    fn cmp(&self, o: &Self) -> Ordering {
        (o.t, o.seq).cmp(&(self.t, self.seq))
    }
}

struct EventQueue {
    heap: BinaryHeap<Scheduled>,
    seq: u64,
    pending_non_tick: usize,
}

impl EventQueue {
    fn push(&mut self, t: f64, ev: Ev) {
        if !matches!(ev, Ev::Tick) {
            self.pending_non_tick += 1;
        }
        self.heap.push(Scheduled {
            t: OrderedFloat(t),
            seq: self.seq,
            ev,
        });
        self.seq += 1;
    }

    fn pop(&mut self) -> Option<(f64, Ev)> {
        let s = self.heap.pop()?;
        if !matches!(s.ev, Ev::Tick) {
            self.pending_non_tick -= 1;
        }
        Some((s.t.0, s.ev))
    }
}

const RANDOM_UTILITY_STREAM: u64 = 0x7a3d_91c4_0be2_55f1;

/// Computes per-frame utilities for a policy.
pub fn score_frames(policy: ShedPolicy, model: &UtilityModel, frames: &[FrameRecord], seed: u64) -> Result<Vec<f64>> {
    match policy {
        ShedPolicy::Utility => {
            let palette: Palette = model.colors().iter().map(|(n, m)| (n.clone(), m.hue.clone())).collect();
            frames
                .iter()
                .map(|f| {
                    let feats = f.features(&palette, model.grid())?;
                    model.query_utility(&feats)
                })
                .collect()
        }
        ShedPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed ^ RANDOM_UTILITY_STREAM);
            Ok(frames.iter().map(|_| rng.random::<f64>()).collect())
        }
    }
}

/// Runs the pipeline over `frames` (ordered by generation time).
///
/// `history_seed` initializes the utility history, normally the training
/// set's utilities. The random policy seeds its history with uniform draws.
pub fn run_simulation(
    cfg: &SimConfig,
    model: &UtilityModel,
    frames: &[FrameRecord],
    history_seed: &[f64],
) -> Result<RunReport> {
    cfg.validate()?;
    if frames.windows(2).any(|w| w[1].generation_ms < w[0].generation_ms) {
        return Err(Error::input("frames are not ordered by generation time"));
    }
    let frames: Vec<&FrameRecord> = frames
        .iter()
        .filter(|f| cfg.duration_ms.is_none_or(|d| f.generation_ms < d))
        .collect();
    let owned: Vec<FrameRecord> = frames.iter().map(|f| (*f).clone()).collect();
    let utilities = score_frames(cfg.policy, model, &owned, cfg.seed)?;
    let query = model.query();

    let fixed = cfg.control.fixed;
    let lb = cfg.control.latency_bound_ms;
    let history = match cfg.policy {
        ShedPolicy::Utility => UtilityHistory::seeded(cfg.control.history_window, history_seed.iter().copied()),
        ShedPolicy::Random => {
            let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ RANDOM_UTILITY_STREAM ^ 1);
            let draws: Vec<f64> = (0..cfg.control.history_window).map(|_| rng.random()).collect();
            UtilityHistory::seeded(cfg.control.history_window, draws)
        }
    };
    let mut control = ControlLoop::new(cfg.control.clone(), history)?;
    let adaptive = cfg.mode == ShedMode::Adaptive;
    let guard = adaptive && cfg.deadline_guard;
    let mut shedder = Shedder::new(ShedderConfig {
        max_tokens: cfg.max_tokens,
        initial_capacity: MAX_QUEUE_CAPACITY,
        latency_bound_ms: if guard { lb } else { f64::INFINITY },
        dispatch_margin_ms: fixed.net_ls_q_ms,
    });

    let mut latency_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut events = EventQueue {
        heap: BinaryHeap::with_capacity(frames.len() + 16),
        seq: 0,
        pending_non_tick: 0,
    };
    for (i, f) in frames.iter().enumerate() {
        events.push(f.generation_ms + fixed.proc_cam_ms + fixed.net_cam_ls_ms, Ev::Arrive(i));
    }
    let start_ms = frames.first().map_or(0.0, |f| f.generation_ms);
    events.push(start_ms, Ev::Tick);

    let mut traces: Vec<Option<FrameTrace>> = vec![None; frames.len()];
    let mut arrival: Vec<f64> = vec![0.0; frames.len()];
    let mut by_seq: Vec<usize> = Vec::with_capacity(frames.len());
    let mut backend_fifo: VecDeque<(usize, f64)> = VecDeque::new();
    let mut busy = false;
    let mut backend_ops: Vec<Vec<OpTrace>> = vec![Vec::new(); frames.len()];
    let mut backend_arrival: Vec<Option<f64>> = vec![None; frames.len()];
    let mut completed: Vec<Option<f64>> = vec![None; frames.len()];
    let mut queue_samples = Vec::new();
    let mut max_queue_len = 0usize;
    let mut max_backend_queue_len = 0usize;

    let settle = |settled: Vec<Settled>,
                  now: f64,
                  by_seq: &[usize],
                  traces: &mut [Option<FrameTrace>],
                  arrival: &[f64],
                  events: &mut EventQueue| {
        for s in settled {
            let i = by_seq[s.frame.seq() as usize];
            let f = frames[i];
            traces[i] = Some(FrameTrace {
                frame_id: f.frame_id,
                camera_id: f.camera_id,
                generation_ms: f.generation_ms,
                arrival_ms: arrival[i],
                utility: s.frame.utility,
                decision: s.decision,
                decided_ms: s.at_ms,
                u_th_at_decision: s.threshold.value(),
                objects: f.target_objects(query),
                backend: Vec::new(),
                backend_arrival_ms: None,
                completed_ms: None,
                e2e_ms: None,
            });
            if s.decision == ShedDecision::Forwarded {
                events.push(now + fixed.net_ls_q_ms, Ev::BackendArrive(i));
            }
        }
    };

    let refresh_guard = |shedder: &mut Shedder, control: &ControlLoop| {
        if guard {
            let est = control.proc_estimate().unwrap_or(0.0);
            let last = control.last_sample().unwrap_or(0.0);
            shedder.set_service_estimate(est.max(last));
        }
    };

    let mut start_backend = |now: f64,
                             fifo: &mut VecDeque<(usize, f64)>,
                             busy: &mut bool,
                             ops: &mut [Vec<OpTrace>],
                             events: &mut EventQueue| {
        if *busy {
            return;
        }
        if let Some((i, arrived)) = fifo.pop_front() {
            let trace = execute_chain(&cfg.operators, frames[i], now - arrived, &mut latency_rng);
            let exec: f64 = trace.iter().map(|o| o.exec_ms).sum();
            ops[i] = trace;
            *busy = true;
            events.push(now + exec, Ev::BackendDone(i));
        }
    };

    while let Some((now, ev)) = events.pop() {
        match ev {
            Ev::Arrive(i) => {
                arrival[i] = now;
                let u = utilities[i];
                control.observe_ingress(u);
                refresh_guard(&mut shedder, &control);
                by_seq.push(i);
                let f = frames[i];
                let meta = FrameMeta {
                    frame_id: f.frame_id,
                    camera_id: f.camera_id,
                    generation_ms: f.generation_ms,
                };
                let out = shedder.admit(meta, u, now);
                settle(out, now, &by_seq, &mut traces, &arrival, &mut events);
                max_queue_len = max_queue_len.max(shedder.queue().len());
            }
            Ev::BackendArrive(i) => {
                backend_arrival[i] = Some(now);
                backend_fifo.push_back((i, now));
                max_backend_queue_len = max_backend_queue_len.max(backend_fifo.len());
                start_backend(now, &mut backend_fifo, &mut busy, &mut backend_ops, &mut events);
            }
            Ev::BackendDone(i) => {
                busy = false;
                completed[i] = Some(now);
                let ops = &backend_ops[i];
                let queue_ms: f64 = ops.iter().map(|o| o.queue_ms).sum();
                let exec_ms: f64 = ops.iter().map(|o| o.exec_ms).sum();
                control.observe_completion(queue_ms, exec_ms);
                refresh_guard(&mut shedder, &control);
                let out = shedder.on_token_freed(now);
                settle(out, now, &by_seq, &mut traces, &arrival, &mut events);
                start_backend(now, &mut backend_fifo, &mut busy, &mut backend_ops, &mut events);
            }
            Ev::Tick => {
                if let Some(out) = control.tick(now) {
                    if adaptive {
                        let evicted = shedder.apply_control(&out, now);
                        settle(evicted, now, &by_seq, &mut traces, &arrival, &mut events);
                    }
                }
                queue_samples.push(QueueSample {
                    t_ms: now,
                    queue_len: shedder.queue().len(),
                    capacity: shedder.queue().capacity(),
                    backend_queue_len: backend_fifo.len(),
                });
                let work_left = events.pending_non_tick > 0 || busy || !shedder.queue().is_empty();
                if work_left {
                    events.push(now + cfg.control.update_period_ms, Ev::Tick);
                }
            }
        }
        debug_assert!(shedder.queue().len() <= shedder.queue().capacity());
    }

    debug_assert!(shedder.conserves() && shedder.queue().is_empty());

    let mut traces: Vec<FrameTrace> = traces
        .into_iter()
        .enumerate()
        .map(|(i, t)| {
            let mut t = t.ok_or_else(|| Error::Format(format!("frame index {i} never settled")))?;
            t.backend = std::mem::take(&mut backend_ops[i]);
            t.backend_arrival_ms = backend_arrival[i];
            t.completed_ms = completed[i];
            t.e2e_ms = completed[i].map(|c| c - t.generation_ms);
            Ok(t)
        })
        .collect::<Result<_>>()?;
    traces.sort_by(|a, b| {
        a.arrival_ms
            .total_cmp(&b.arrival_ms)
            .then(a.camera_id.cmp(&b.camera_id))
            .then(a.frame_id.cmp(&b.frame_id))
    });

    let per_object_qor = all_object_qor(&traces);
    let overall = if per_object_qor.is_empty() {
        None
    } else {
        Some(per_object_qor.values().sum::<f64>() / per_object_qor.len() as f64)
    };
    let counters = *shedder.counters();
    let e2e: Vec<f64> = traces.iter().filter_map(|t| t.e2e_ms).collect();
    let violations = e2e.iter().filter(|&&x| x > lb).count() as u64;
    let ingress = counters.ingress;
    let summary = RunSummary {
        policy: cfg.policy,
        mode: cfg.mode,
        seed: cfg.seed,
        latency_bound_ms: lb,
        fixed_drop_rate: cfg.control.fixed_drop_rate,
        ingress,
        forwarded: counters.forwarded,
        shed_by_threshold: counters.shed_by_threshold,
        shed_by_queue_eviction: counters.shed_by_queue_eviction,
        shed_by_resize: counters.shed_by_resize,
        shed_by_deadline: counters.shed_by_deadline,
        observed_drop_rate: if ingress == 0 {
            0.0
        } else {
            (ingress - counters.forwarded) as f64 / ingress as f64
        },
        completed: e2e.len() as u64,
        violations,
        target_objects: per_object_qor.len(),
        overall_qor: overall,
        qor_note: overall.is_none().then(|| "no target objects in trace".to_string()),
        max_e2e_ms: e2e.iter().copied().reduce(f64::max),
        mean_e2e_ms: (!e2e.is_empty()).then(|| e2e.iter().sum::<f64>() / e2e.len() as f64),
        max_queue_len,
        max_backend_queue_len,
        config_fingerprint: cfg.comparison_fingerprint(),
        dataset_fingerprint: dataset_fingerprint(&owned),
        model_hash: model.content_hash(),
    };

    let buckets = bucketize(&traces, cfg.bucket_ms, cfg.operators.len(), lb);
    Ok(RunReport {
        summary,
        operators: cfg.operators.iter().map(|o| o.name.clone()).collect(),
        per_object_qor,
        frames: traces,
        control_log: control.into_log(),
        queue_samples,
        buckets,
    })
}

fn bucketize(traces: &[FrameTrace], bucket_ms: f64, n_ops: usize, lb: f64) -> Vec<Bucket> {
    let Some(t0) = traces.iter().map(|t| t.generation_ms).reduce(f64::min) else {
        return Vec::new();
    };
    let mut buckets: BTreeMap<u64, (Bucket, f64)> = BTreeMap::new();
    for t in traces {
        let k = ((t.generation_ms - t0) / bucket_ms).floor() as u64;
        let (b, sum) = buckets.entry(k).or_insert_with(|| {
            (
                Bucket {
                    start_ms: t0 + k as f64 * bucket_ms,
                    ingress: 0,
                    forwarded: 0,
                    shed: 0,
                    reached: vec![0; n_ops],
                    completed: 0,
                    violations: 0,
                    max_e2e_ms: None,
                    mean_e2e_ms: None,
                },
                0.0,
            )
        });
        b.ingress += 1;
        if t.decision == ShedDecision::Forwarded {
            b.forwarded += 1;
        } else {
            b.shed += 1;
        }
        for op in &t.backend {
            b.reached[op.op] += 1;
        }
        if let Some(e) = t.e2e_ms {
            b.completed += 1;
            *sum += e;
            if e > lb {
                b.violations += 1;
            }
            b.max_e2e_ms = Some(b.max_e2e_ms.map_or(e, |m| m.max(e)));
        }
    }
    buckets
        .into_values()
        .map(|(mut b, sum)| {
            if b.completed > 0 {
                b.mean_e2e_ms = Some(sum / b.completed as f64);
            }
            b
        })
        .collect()
}
