//! Utility history, its empirical CDF, and inversion of a target drop rate
//! into a utility threshold.

use std::collections::VecDeque;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const DEFAULT_HISTORY_WINDOW: usize = 2000;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HistorySource {
    TrainingSet,
    Runtime,
}

/// Bounded FIFO of recent frame utilities.
#[derive(Debug, Clone)]
pub struct UtilityHistory {
    window: VecDeque<f64>,
    capacity: usize,
    seeded_from: HistorySource,
}

impl UtilityHistory {
    pub fn new(capacity: usize) -> Self {
        let capacity = capacity.max(1);
        Self {
            window: VecDeque::with_capacity(capacity),
            capacity,
            seeded_from: HistorySource::Runtime,
        }
    }

    /// Starts from training-set utilities, keeping the last `capacity` of them.
    pub fn seeded(capacity: usize, training: impl IntoIterator<Item = f64>) -> Self {
        let mut h = Self::new(capacity);
        for u in training {
            h.push(u);
        }
        h.seeded_from = HistorySource::TrainingSet;
        h
    }

    pub fn push(&mut self, u: f64) {
        debug_assert!((0.0..=1.0).contains(&u), "utility {u} outside [0,1]");
        if self.window.len() == self.capacity {
            self.window.pop_front();
        }
        self.window.push_back(u.clamp(0.0, 1.0));
    }

    pub fn len(&self) -> usize {
        self.window.len()
    }

    pub fn is_empty(&self) -> bool {
        self.window.is_empty()
    }

    pub fn capacity(&self) -> usize {
        self.capacity
    }

    pub fn seeded_from(&self) -> HistorySource {
        self.seeded_from
    }

    pub fn iter(&self) -> impl Iterator<Item = f64> + '_ {
        self.window.iter().copied()
    }
}

/// Step-function CDF over distinct utilities.
#[derive(Debug, Clone, PartialEq)]
pub struct UtilityCdf {
    values: Vec<f64>,
    /// `cumulative[k]` = number of history entries `≤ values[k]`.
    cumulative: Vec<usize>,
    n: usize,
}

pub fn build_cdf(history: &UtilityHistory) -> Result<UtilityCdf> {
    UtilityCdf::from_values(history.iter())
}

impl UtilityCdf {
    pub fn from_values(values: impl IntoIterator<Item = f64>) -> Result<Self> {
        let mut sorted: Vec<f64> = values.into_iter().collect();
        if sorted.is_empty() {
            return Err(Error::EmptyHistory);
        }
        if sorted.iter().any(|u| u.is_nan()) {
            return Err(Error::input("NaN utility in history"));
        }
        sorted.sort_unstable_by(f64::total_cmp);
        let n = sorted.len();
        let mut values = Vec::new();
        let mut cumulative = Vec::new();
        for (k, &u) in sorted.iter().enumerate() {
            if values.last() == Some(&u) {
                *cumulative.last_mut().unwrap() = k + 1;
            } else {
                values.push(u);
                cumulative.push(k + 1);
            }
        }
        Ok(Self { values, cumulative, n })
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    /// `(u, CDF(u))` at every step.
    pub fn steps(&self) -> impl Iterator<Item = (f64, f64)> + '_ {
        self.values
            .iter()
            .zip(&self.cumulative)
            .map(move |(&u, &c)| (u, c as f64 / self.n as f64))
    }

    /// Fraction of history with utility `≤ u`.
    pub fn cdf(&self, u: f64) -> f64 {
        let k = self.values.partition_point(|&x| x <= u);
        if k == 0 {
            0.0
        } else {
            self.cumulative[k - 1] as f64 / self.n as f64
        }
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("utility,cdf\n");
        for (u, c) in self.steps() {
            let _ = writeln!(out, "{u},{c}");
        }
        out
    }
}

/// Utility cut applied by the shedder. `ShedNone` orders below every value.
#[derive(Debug, Clone, Copy, PartialEq, PartialOrd, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum Threshold {
    #[default]
    ShedNone,
    Value(f64),
}

impl Threshold {
    /// A frame is shed when its utility does not exceed the threshold.
    #[inline]
    pub fn sheds(&self, utility: f64) -> bool {
        match *self {
            Threshold::ShedNone => false,
            Threshold::Value(t) => utility <= t,
        }
    }

    pub fn value(&self) -> Option<f64> {
        match *self {
            Threshold::ShedNone => None,
            Threshold::Value(t) => Some(t),
        }
    }
}

/// Smallest step utility `u` with `CDF(u) ≥ r`, or `ShedNone` for `r = 0`.
pub fn threshold_for_drop_rate(cdf: &UtilityCdf, r: f64) -> Result<Threshold> {
    if !(0.0..=1.0).contains(&r) {
        return Err(Error::input(format!("drop rate {r} outside [0, 1]")));
    }
    if r == 0.0 {
        return Ok(Threshold::ShedNone);
    }
    let n = cdf.n as f64;
    let k = cdf.cumulative.partition_point(|&c| (c as f64) / n < r);
    // CDF reaches 1 at the last step, so k is always in range for r ≤ 1.
    Ok(Threshold::Value(cdf.values[k.min(cdf.values.len() - 1)]))
}
