//! Naive reference shedder and a random-trace driver for differential
//! testing. The reference keeps an unsorted list and re-sorts on every
//! dispatch or eviction.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::shedder::{FrameMeta, Settled, ShedDecision, Shedder, ShedderConfig};
use crate::threshold::Threshold;

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum TraceOp {
    Admit { utility: f64, generation_ms: f64 },
    TokenFreed,
    Resize(usize),
    SetThreshold(Threshold),
    SetServiceEstimate(f64),
    Advance(f64),
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct RefFrame {
    seq: u64,
    utility: f64,
    arrival_ms: f64,
    deadline_ms: f64,
}

/// `(seq, decision, at_ms)`
pub type RefOutcome = (u64, ShedDecision, f64);

#[derive(Debug, Clone)]
pub struct ReferenceShedder {
    queue: Vec<RefFrame>,
    capacity: usize,
    tokens: usize,
    max_tokens: usize,
    threshold: Threshold,
    latency_bound_ms: f64,
    margin_ms: f64,
    service_ms: f64,
    next_seq: u64,
    pub ingress: u64,
    pub settled: u64,
}

impl ReferenceShedder {
    pub fn new(cfg: &ShedderConfig) -> Self {
        Self {
            queue: Vec::new(),
            capacity: cfg.initial_capacity.max(1),
            tokens: cfg.max_tokens.max(1),
            max_tokens: cfg.max_tokens.max(1),
            threshold: Threshold::ShedNone,
            latency_bound_ms: cfg.latency_bound_ms,
            margin_ms: cfg.dispatch_margin_ms,
            service_ms: 0.0,
            next_seq: 0,
            ingress: 0,
            settled: 0,
        }
    }

    pub fn queue_len(&self) -> usize {
        self.queue.len()
    }

    fn take_best(&mut self) -> Option<RefFrame> {
        self.queue.sort_by(|a, b| {
            b.utility
                .total_cmp(&a.utility)
                .then(a.arrival_ms.total_cmp(&b.arrival_ms))
                .then(a.seq.cmp(&b.seq))
        });
        (!self.queue.is_empty()).then(|| self.queue.remove(0))
    }

    fn take_worst(&mut self) -> Option<RefFrame> {
        self.queue.sort_by(|a, b| {
            a.utility
                .total_cmp(&b.utility)
                .then(a.arrival_ms.total_cmp(&b.arrival_ms))
                .then(a.seq.cmp(&b.seq))
        });
        (!self.queue.is_empty()).then(|| self.queue.remove(0))
    }

    fn settle(&mut self, out: &mut Vec<RefOutcome>, f: RefFrame, d: ShedDecision, now: f64) {
        self.settled += 1;
        out.push((f.seq, d, now));
    }

    fn dispatch(&mut self, out: &mut Vec<RefOutcome>, now: f64) {
        while self.tokens > 0 {
            let Some(f) = self.take_best() else { break };
            if now + self.margin_ms + self.service_ms > f.deadline_ms {
                self.settle(out, f, ShedDecision::ShedByDeadline, now);
            } else {
                self.tokens -= 1;
                self.settle(out, f, ShedDecision::Forwarded, now);
            }
        }
    }

    pub fn admit(&mut self, utility: f64, generation_ms: f64, now: f64) -> Vec<RefOutcome> {
        let f = RefFrame {
            seq: self.next_seq,
            utility,
            arrival_ms: now,
            deadline_ms: generation_ms + self.latency_bound_ms,
        };
        self.next_seq += 1;
        self.ingress += 1;
        let mut out = Vec::new();
        if self.threshold.sheds(utility) {
            self.settle(&mut out, f, ShedDecision::ShedByThreshold, now);
            return out;
        }
        self.queue.push(f);
        if self.queue.len() > self.capacity {
            let w = self.take_worst().expect("non-empty");
            self.settle(&mut out, w, ShedDecision::ShedByQueueEviction, now);
        }
        self.dispatch(&mut out, now);
        out
    }

    pub fn token_freed(&mut self, now: f64) -> Vec<RefOutcome> {
        self.tokens = (self.tokens + 1).min(self.max_tokens);
        let mut out = Vec::new();
        self.dispatch(&mut out, now);
        out
    }

    pub fn resize(&mut self, capacity: usize, now: f64) -> Vec<RefOutcome> {
        self.capacity = capacity.max(1);
        let mut out = Vec::new();
        while self.queue.len() > self.capacity {
            let w = self.take_worst().expect("non-empty");
            self.settle(&mut out, w, ShedDecision::ShedByResize, now);
        }
        out
    }
}

/// A random operation sequence of at most `max_len` steps. Utilities come
/// from a small set so that ties are common.
pub fn random_trace(rng: &mut ChaCha8Rng, max_len: usize) -> (ShedderConfig, Vec<TraceOp>) {
    let cfg = ShedderConfig {
        max_tokens: rng.random_range(1..=3),
        initial_capacity: rng.random_range(1..=6),
        latency_bound_ms: rng.random_range(5.0..60.0),
        dispatch_margin_ms: rng.random_range(0.0..3.0),
    };
    let len = rng.random_range(1..=max_len);
    let mut now = 0.0;
    let mut ops = Vec::with_capacity(len);
    for _ in 0..len {
        let op = match rng.random_range(0..100) {
            0..=49 => TraceOp::Admit {
                utility: rng.random_range(0..6) as f64 / 5.0,
                generation_ms: now - rng.random_range(0.0..10.0),
            },
            50..=69 => TraceOp::TokenFreed,
            70..=79 => TraceOp::Resize(rng.random_range(0..=7)),
            80..=87 => TraceOp::SetThreshold(if rng.random_bool(0.3) {
                Threshold::ShedNone
            } else {
                Threshold::Value(rng.random_range(0..6) as f64 / 5.0)
            }),
            88..=92 => TraceOp::SetServiceEstimate(rng.random_range(0.0..20.0)),
            _ => TraceOp::Advance(rng.random_range(0.0..5.0)),
        };
        if let TraceOp::Advance(dt) = op {
            now += dt;
        }
        ops.push(op);
    }
    (cfg, ops)
}

fn key(s: &Settled) -> RefOutcome {
    (s.frame.seq(), s.decision, s.at_ms)
}

/// Replays `ops` on both implementations. A `TokenFreed` with no token
/// outstanding is skipped. Returns a description of the first divergence
/// or invariant violation.
pub fn check_trace(cfg: &ShedderConfig, ops: &[TraceOp]) -> Result<(), String> {
    let mut real = Shedder::new(*cfg);
    let mut reference = ReferenceShedder::new(cfg);
    let mut now = 0.0;
    let mut outstanding = 0usize;
    let mut seen = std::collections::HashSet::new();
    for (step, op) in ops.iter().enumerate() {
        let (got, want): (Vec<RefOutcome>, Vec<RefOutcome>) = match *op {
            TraceOp::Admit { utility, generation_ms } => {
                let meta = FrameMeta {
                    frame_id: step as u64,
                    camera_id: 0,
                    generation_ms,
                };
                (
                    real.admit(meta, utility, now).iter().map(key).collect(),
                    reference.admit(utility, generation_ms, now),
                )
            }
            TraceOp::TokenFreed => {
                if outstanding == 0 {
                    continue;
                }
                outstanding -= 1;
                (
                    real.on_token_freed(now).iter().map(key).collect(),
                    reference.token_freed(now),
                )
            }
            TraceOp::Resize(c) => (
                real.resize_queue(c, now).iter().map(key).collect(),
                reference.resize(c, now),
            ),
            TraceOp::SetThreshold(t) => {
                real.set_threshold(t);
                reference.threshold = t;
                (Vec::new(), Vec::new())
            }
            TraceOp::SetServiceEstimate(ms) => {
                real.set_service_estimate(ms);
                reference.service_ms = ms.max(0.0);
                (Vec::new(), Vec::new())
            }
            TraceOp::Advance(dt) => {
                now += dt;
                (Vec::new(), Vec::new())
            }
        };
        if got != want {
            return Err(format!("step {step} {op:?}: got {got:?}, reference {want:?}"));
        }
        for (seq, d, _) in &got {
            if !seen.insert(*seq) {
                return Err(format!("step {step}: frame {seq} settled twice"));
            }
            if *d == ShedDecision::Forwarded {
                outstanding += 1;
            }
        }
        if !real.conserves() || reference.ingress != reference.settled + reference.queue_len() as u64 {
            return Err(format!("step {step}: conservation violated"));
        }
        if real.queue().len() != reference.queue_len() {
            return Err(format!("step {step}: queue length differs"));
        }
        if real.queue().len() > real.queue().capacity() {
            return Err(format!("step {step}: queue over capacity"));
        }
        if !real.token_safe() || outstanding > cfg.max_tokens {
            return Err(format!("step {step}: token safety violated"));
        }
    }
    Ok(())
}

/// Generates and checks `n` traces from `seed`; returns the first failure.
pub fn check_random_traces(seed: u64, n: usize, max_len: usize) -> Result<(), String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for k in 0..n {
        let (cfg, ops) = random_trace(&mut rng, max_len);
        check_trace(&cfg, &ops).map_err(|e| format!("trace {k}: {e}"))?;
    }
    Ok(())
}
