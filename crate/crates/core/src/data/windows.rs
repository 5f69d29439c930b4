use std::ops::Range;

use serde::{Deserialize, Serialize};

use super::{UbsSample, SECONDS_PER_DAY};
use crate::error::{Error, Result};

/// Pooling window, prediction window and observation length, in seconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowPlan {
    pub pool_window_seconds: u64,
    pub prediction_window_seconds: u64,
    pub observation_seconds: u64,
}

impl WindowPlan {
    pub fn new(pool: u64, prediction: u64, observation: u64) -> Result<Self> {
        let plan = Self {
            pool_window_seconds: pool,
            prediction_window_seconds: prediction,
            observation_seconds: observation,
        };
        plan.validate()?;
        Ok(plan)
    }

    /// Day pooling, one-day prediction window, `days` of observation.
    pub fn daily(days: u64) -> Self {
        Self {
            pool_window_seconds: SECONDS_PER_DAY,
            prediction_window_seconds: SECONDS_PER_DAY,
            observation_seconds: days * SECONDS_PER_DAY,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.pool_window_seconds == 0
            || self.prediction_window_seconds == 0
            || self.observation_seconds == 0
        {
            return Err(Error::Config(format!("window sizes must be positive: {:?}", self)));
        }
        if self.observation_seconds % self.pool_window_seconds != 0 {
            return Err(Error::Config(format!(
                "observation {}s is not a multiple of the pooling window {}s",
                self.observation_seconds, self.pool_window_seconds
            )));
        }
        Ok(())
    }

    /// Pooled sequence length `T / ΔT1`.
    pub fn num_buckets(&self) -> usize {
        (self.observation_seconds / self.pool_window_seconds) as usize
    }

    /// End of the furthest prediction window.
    pub fn horizon_end(&self) -> u64 {
        self.observation_seconds + self.prediction_window_seconds
    }
}

/// Event index ranges for the `T / ΔT1` observation buckets.
///
/// Bucket `k` covers `[kΔT1, (k+1)ΔT1)`; events at or after `T` are dropped.
/// Empty buckets are kept as empty ranges.
pub fn bucketize(sample: &UbsSample, plan: &WindowPlan) -> Vec<Range<usize>> {
    let n = plan.num_buckets();
    let mut out = Vec::with_capacity(n);
    let mut start = 0;
    for k in 0..n {
        let end_t = (k as u64 + 1) * plan.pool_window_seconds;
        let end = start + sample.events[start..].partition_point(|e| e.timestamp < end_t);
        out.push(start..end);
        start = end;
    }
    out
}

/// Event index range of prediction window `k` (1-based):
/// `[kΔT1, kΔT1 + ΔT2)`.
pub fn prediction_events(sample: &UbsSample, k: usize, plan: &WindowPlan) -> Result<Range<usize>> {
    let n = plan.num_buckets();
    if k == 0 || k > n {
        return Err(Error::Bounds {
            what: "prediction window",
            index: k,
            len: n,
        });
    }
    let lo = k as u64 * plan.pool_window_seconds;
    let hi = lo + plan.prediction_window_seconds;
    Ok(sample.count_before(lo)..sample.count_before(hi))
}

/// Modal category over `[horizon_start, horizon_start + horizon_seconds)`,
/// using each event's first id. Ties go to the smallest category. `None` when
/// the horizon holds no events.
pub fn derive_label<F>(
    sample: &UbsSample,
    horizon_start: u64,
    horizon_seconds: u64,
    category_of: F,
) -> Option<usize>
where
    F: Fn(u32) -> usize,
{
    let lo = sample.count_before(horizon_start);
    let hi = sample.count_before(horizon_start + horizon_seconds);
    if lo == hi {
        return None;
    }
    let mut counts: Vec<usize> = Vec::new();
    for e in &sample.events[lo..hi] {
        let c = category_of(e.ids[0]);
        if c >= counts.len() {
            counts.resize(c + 1, 0);
        }
        counts[c] += 1;
    }
    let mut best = 0;
    for (c, &n) in counts.iter().enumerate() {
        if n > counts[best] {
            best = c;
        }
    }
    Some(best)
}

/// Flattened view of one sample for the encoders: every id of every event
/// before `T + ΔT2`, plus event spans for the observation buckets and the
/// prediction windows.
#[derive(Debug, Clone)]
pub struct SampleWindows {
    /// Ids folded into `[0, max_id]`.
    pub ids: Vec<usize>,
    /// Position of each id within its behavior.
    pub slots: Vec<usize>,
    /// Id-row span of each included event.
    pub event_rows: Vec<(usize, usize)>,
    /// Event span per observation bucket.
    pub buckets: Vec<(usize, usize)>,
    /// Event span per prediction window `k = 1..=K`.
    pub targets: Vec<(usize, usize)>,
}

impl SampleWindows {
    pub fn build(sample: &UbsSample, plan: &WindowPlan, max_id: u32, m_max: usize) -> Result<Self> {
        let included = sample.count_before(plan.horizon_end());
        let mut ids = Vec::new();
        let mut slots = Vec::new();
        let mut event_rows = Vec::with_capacity(included);
        let modulus = max_id as u64 + 1;
        for e in &sample.events[..included] {
            if e.ids.len() > m_max {
                return Err(Error::Validation(format!(
                    "user {}: behavior with {} ids exceeds the maximum of {}",
                    sample.user_id,
                    e.ids.len(),
                    m_max
                )));
            }
            let start = ids.len();
            for (slot, &id) in e.ids.iter().enumerate() {
                ids.push((id as u64 % modulus) as usize);
                slots.push(slot);
            }
            event_rows.push((start, ids.len()));
        }
        let buckets = bucketize(sample, plan)
            .into_iter()
            .map(|r| (r.start, r.end))
            .collect();
        let targets = (1..=plan.num_buckets())
            .map(|k| prediction_events(sample, k, plan).map(|r| (r.start, r.end)))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            ids,
            slots,
            event_rows,
            buckets,
            targets,
        })
    }

    pub fn num_positions(&self) -> usize {
        self.buckets.len()
    }

    pub fn valid_positions(&self) -> Vec<bool> {
        self.buckets.iter().map(|&(a, b)| b > a).collect()
    }

    /// Id-row span covering an event span.
    pub fn id_rows(&self, (a, b): (usize, usize)) -> (usize, usize) {
        if a == b {
            let r = if a < self.event_rows.len() {
                self.event_rows[a].0
            } else {
                self.ids.len()
            };
            (r, r)
        } else {
            (self.event_rows[a].0, self.event_rows[b - 1].1)
        }
    }

    /// Number of events observed before `T`.
    pub fn observed_events(&self) -> usize {
        self.buckets.last().map(|b| b.1).unwrap_or(0)
    }

    pub fn bucket_segments(&self) -> (Vec<(usize, usize)>, Vec<usize>) {
        self.segments(&self.buckets)
    }

    pub fn target_segments(&self) -> (Vec<(usize, usize)>, Vec<usize>) {
        self.segments(&self.targets)
    }

    fn segments(&self, spans: &[(usize, usize)]) -> (Vec<(usize, usize)>, Vec<usize>) {
        let rows = spans.iter().map(|&s| self.id_rows(s)).collect();
        let counts = spans.iter().map(|&(a, b)| b - a).collect();
        (rows, counts)
    }

    /// One segment per observed event, for sequence models without pooling.
    pub fn event_segments(&self) -> (Vec<(usize, usize)>, Vec<usize>) {
        let n = self.observed_events();
        (self.event_rows[..n].to_vec(), vec![1; n])
    }
}
