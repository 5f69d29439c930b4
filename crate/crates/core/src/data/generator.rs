//! Synthetic behavior data with planted structure.
//!
//! Each user has a category preference that drifts linearly from a base
//! profile toward a different target profile and is modulated weekly. Daily
//! event counts are Poisson; within a day, categories are drawn independently
//! so event order carries no signal.

use std::collections::BTreeMap;
use std::f64::consts::PI;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Poisson, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{derive_label, BehaviorEvent, UbsSample, SECONDS_PER_DAY};
use crate::config::KvReader;
use crate::error::{Error, Result};

const PREFERENCE_SCALE: f64 = 2.0;
const WEEKLY_LOGIT_AMPLITUDE: f64 = 3.0;
const WEEKLY_RATE_AMPLITUDE: f64 = 0.5;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub num_users: usize,
    /// Observation length in days.
    pub num_days: usize,
    /// Extra days generated after the observation window for labels and
    /// prediction targets.
    pub horizon_days: usize,
    pub avg_events_per_day: f64,
    /// Largest id `I`; ids range over `0..=I`.
    pub vocab_size: u32,
    pub num_categories: usize,
    pub ids_min: usize,
    pub ids_max: usize,
    pub periodicity_strength: f64,
    pub drift_strength: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            num_users: 1000,
            num_days: 60,
            horizon_days: 10,
            avg_events_per_day: 20.0,
            vocab_size: 999,
            num_categories: 10,
            ids_min: 1,
            ids_max: 3,
            periodicity_strength: 0.5,
            drift_strength: 0.5,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        if self.num_users == 0
            || self.num_days == 0
            || self.horizon_days == 0
            || self.num_categories == 0
            || self.ids_min == 0
        {
            return Err(Error::Config("generator counts must be positive".into()));
        }
        if !(self.avg_events_per_day > 0.0) {
            return Err(Error::Config("avg_events_per_day must be positive".into()));
        }
        if self.ids_max < self.ids_min {
            return Err(Error::Config(format!(
                "ids range [{}, {}] is empty",
                self.ids_min, self.ids_max
            )));
        }
        if (self.vocab_size as u64 + 1) < self.num_categories as u64 {
            return Err(Error::Config(format!(
                "vocabulary of {} ids is smaller than {} categories",
                self.vocab_size as u64 + 1,
                self.num_categories
            )));
        }
        for (name, v) in [
            ("periodicity_strength", self.periodicity_strength),
            ("drift_strength", self.drift_strength),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::Config(format!("{} must be in [0, 1], got {}", name, v)));
            }
        }
        Ok(())
    }

    /// Applies `key = value` overrides.
    pub fn apply_kv(&mut self, kv: &KvReader<'_>) -> Result<()> {
        kv.set("num_users", &mut self.num_users)?;
        kv.set("num_days", &mut self.num_days)?;
        kv.set("horizon_days", &mut self.horizon_days)?;
        kv.set("avg_events_per_day", &mut self.avg_events_per_day)?;
        kv.set("vocab_size", &mut self.vocab_size)?;
        kv.set("num_categories", &mut self.num_categories)?;
        kv.set("ids_min", &mut self.ids_min)?;
        kv.set("ids_max", &mut self.ids_max)?;
        kv.set("periodicity_strength", &mut self.periodicity_strength)?;
        kv.set("drift_strength", &mut self.drift_strength)?;
        kv.set("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn category_map(&self) -> CategoryMap {
        CategoryMap::new(self.vocab_size, self.num_categories)
    }

    /// Label horizons in days: the standard 5/10/15/30 that fit, plus the
    /// full horizon.
    pub fn label_horizons(&self) -> Vec<usize> {
        let mut h: Vec<usize> = [5, 10, 15, 30]
            .into_iter()
            .filter(|&d| d <= self.horizon_days)
            .collect();
        if !h.contains(&self.horizon_days) {
            h.push(self.horizon_days);
        }
        h
    }
}

pub fn task_name(horizon_days: usize) -> String {
    format!("modal_category_{}d", horizon_days)
}

/// Contiguous equal id blocks per category.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CategoryMap {
    pub num_categories: usize,
    pub block: usize,
}

impl CategoryMap {
    pub fn new(max_id: u32, num_categories: usize) -> Self {
        let ids = max_id as usize + 1;
        Self {
            num_categories,
            block: (ids / num_categories).max(1),
        }
    }

    pub fn category_of(&self, id: u32) -> usize {
        (id as usize / self.block).min(self.num_categories - 1)
    }

    pub fn ids_of(&self, category: usize) -> std::ops::Range<u32> {
        let lo = category * self.block;
        lo as u32..(lo + self.block) as u32
    }
}

fn softmax_sample<R: Rng>(logits: &[f64], rng: &mut R) -> usize {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = logits.iter().map(|l| (l - max).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.random::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i;
        }
        u -= w;
    }
    weights.len() - 1
}

fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for i in 1..v.len() {
        if v[i] > v[best] {
            best = i;
        }
    }
    best
}

fn generate_user(cfg: &GeneratorConfig, cats: &CategoryMap, user: usize) -> UbsSample {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(user as u64);
    let c = cfg.num_categories;
    let normal = |rng: &mut ChaCha8Rng| -> f64 { rng.sample(StandardNormal) };

    let base: Vec<f64> = (0..c).map(|_| normal(&mut rng) * PREFERENCE_SCALE).collect();
    let mut target: Vec<f64> = (0..c).map(|_| normal(&mut rng) * PREFERENCE_SCALE).collect();
    if c > 1 {
        // the drift always moves the favourite category somewhere else
        let b = argmax(&base);
        let t = argmax(&target);
        if t == b {
            let other = (b + 1 + rng.random_range(0..c - 1)) % c;
            target.swap(t, other);
        }
    }
    let weekly_category = rng.random_range(0..c);
    let phase = rng.random_range(0..7) as f64;

    let total_days = cfg.num_days + cfg.horizon_days;
    let span = (total_days.max(2) - 1) as f64;
    let mut events = Vec::new();
    let mut logits = vec![0.0; c];
    for day in 0..total_days {
        let f = cfg.drift_strength * day as f64 / span;
        let wave = (2.0 * PI * (day as f64 - phase) / 7.0).cos();
        for i in 0..c {
            logits[i] = (1.0 - f) * base[i] + f * target[i];
        }
        logits[weekly_category] += cfg.periodicity_strength * WEEKLY_LOGIT_AMPLITUDE * wave;
        let rate = cfg.avg_events_per_day * (1.0 + cfg.periodicity_strength * WEEKLY_RATE_AMPLITUDE * wave);
        let count = Poisson::new(rate.max(1e-9))
            .map(|p| p.sample(&mut rng) as usize)
            .unwrap_or(0);
        let mut offsets: Vec<u64> = (0..count)
            .map(|_| rng.random_range(0..SECONDS_PER_DAY))
            .collect();
        offsets.sort_unstable();
        for off in offsets {
            let cat = softmax_sample(&logits, &mut rng);
            let m = rng.random_range(cfg.ids_min..=cfg.ids_max);
            let block = cats.ids_of(cat);
            let ids: Vec<u32> = (0..m).map(|_| rng.random_range(block.clone())).collect();
            events.push(BehaviorEvent::new(day as u64 * SECONDS_PER_DAY + off, &ids));
        }
    }
    if events.is_empty() {
        // keep the non-empty invariant for extremely sparse configs
        let block = cats.ids_of(argmax(&base));
        events.push(BehaviorEvent::new(0, &[block.start]));
    }

    let mut sample = UbsSample {
        user_id: format!("u{:06}", user),
        events,
        labels: BTreeMap::new(),
    };
    let horizon_start = cfg.num_days as u64 * SECONDS_PER_DAY;
    for h in cfg.label_horizons() {
        if let Some(label) = derive_label(
            &sample,
            horizon_start,
            h as u64 * SECONDS_PER_DAY,
            |id| cats.category_of(id),
        ) {
            sample.labels.insert(task_name(h), label);
        }
    }
    sample
}

/// Deterministic per seed; user `i` depends only on the seed and `i`.
pub fn generate_synthetic(cfg: &GeneratorConfig) -> Result<Vec<UbsSample>> {
    cfg.validate()?;
    let cats = cfg.category_map();
    Ok((0..cfg.num_users)
        .map(|u| generate_user(cfg, &cats, u))
        .collect())
}
