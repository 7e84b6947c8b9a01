//! Per-vehicle records, KPI summaries, the CO₂ surrogate, message-count
//! distribution and the capacity sweep.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::layout::Road;
use crate::simulator::{self, Method, ScenarioConfig, SimError, SimResult};

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("density grid is empty")]
    EmptyGrid,
    #[error("density grid must be ascending")]
    UnsortedGrid,
    #[error("no seeds given")]
    NoSeeds,
    #[error("run has no negotiating vehicles")]
    NoNegotiations,
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error("serialization failed: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// Polynomial CO₂ surrogate in g/s:
/// `max(0, c0 + c1·v·a + c2·v·a² + c3·v + c4·v² + c5·v³)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EmissionModel {
    pub c: [f64; 6],
}

impl Default for EmissionModel {
    fn default() -> Self {
        EmissionModel {
            c: [1.0, 0.25, 0.02, 0.05, 0.002, 0.000_08],
        }
    }
}

impl EmissionModel {
    pub fn rate(&self, v: f64, a: f64) -> f64 {
        let c = &self.c;
        (c[0] + c[1] * v * a + c[2] * v * a * a + c[3] * v + c[4] * v * v + c[5] * v * v * v).max(0.0)
    }

    /// Integral over samples `(v, a)` taken every `dt` seconds, in kg.
    pub fn emissions(&self, samples: &[(f64, f64)], dt: f64) -> f64 {
        samples.iter().map(|&(v, a)| self.rate(v, a) * dt).sum::<f64>() / 1000.0
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VehicleRecord {
    pub id: u64,
    pub entry_road: Road,
    pub exit_road: Road,
    /// Time the vehicle wanted to enter the road.
    pub depart: f64,
    /// `None` when the run ended first.
    pub arrive: Option<f64>,
    /// `arrive - depart`, or time spent so far for unfinished vehicles.
    pub travel_time: f64,
    pub co2_kg: f64,
    pub stops: u32,
    pub min_speed: f64,
    /// Messages exchanged in the vehicle's negotiation, 0 if none.
    pub messages: u32,
    pub negotiated: bool,
    /// The negotiation ended with an accepted profile.
    pub agreed: bool,
    /// Negotiation ended in (or was cut by) backup mode.
    pub backup: bool,
}

impl VehicleRecord {
    pub fn completed(&self) -> bool {
        self.arrive.is_some()
    }
}

/// Nearest-rank percentile of an ascending slice; `p` in (0, 100].
pub fn percentile(sorted: &[f64], p: f64) -> Option<f64> {
    if sorted.is_empty() {
        return None;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    Some(sorted[rank.min(sorted.len()) - 1])
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BoxStats {
    pub min: f64,
    pub q1: f64,
    pub median: f64,
    pub q3: f64,
    pub max: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub count: usize,
    pub mean: f64,
    pub p90: f64,
    pub box_stats: BoxStats,
}

impl Summary {
    pub fn of(values: &[f64]) -> Option<Summary> {
        let mut v: Vec<f64> = values.to_vec();
        v.sort_by(f64::total_cmp);
        let q = |p| percentile(&v, p);
        Some(Summary {
            count: v.len(),
            mean: v.iter().sum::<f64>() / v.len().max(1) as f64,
            p90: q(90.0)?,
            box_stats: BoxStats {
                min: *v.first()?,
                q1: q(25.0)?,
                median: q(50.0)?,
                q3: q(75.0)?,
                max: *v.last()?,
            },
        })
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct MessageHistogram {
    /// Message count → number of negotiations.
    pub counts: BTreeMap<u32, usize>,
    pub total: usize,
    /// Largest count among negotiations that ended in agreement. Failed
    /// ones also carry their cancel message.
    pub max_agreed: Option<u32>,
}

impl MessageHistogram {
    pub fn probability(&self, messages: u32) -> f64 {
        *self.counts.get(&messages).unwrap_or(&0) as f64 / self.total.max(1) as f64
    }

    pub fn p_at_most(&self, messages: u32) -> f64 {
        self.counts.range(..=messages).map(|(_, n)| n).sum::<usize>() as f64 / self.total.max(1) as f64
    }

    pub fn max_count(&self) -> Option<u32> {
        self.counts.keys().next_back().copied()
    }
}

/// Distribution of message counts over all vehicles that negotiated.
pub fn message_histogram(records: &[VehicleRecord]) -> Result<MessageHistogram, MetricsError> {
    let mut h = MessageHistogram::default();
    for r in records.iter().filter(|r| r.negotiated) {
        *h.counts.entry(r.messages).or_default() += 1;
        h.total += 1;
        if r.agreed {
            h.max_agreed = h.max_agreed.max(Some(r.messages));
        }
    }
    if h.total == 0 {
        return Err(MetricsError::NoNegotiations);
    }
    Ok(h)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunSummary {
    pub vehicles: usize,
    pub completed: usize,
    /// Over completed vehicles.
    pub travel_time: Option<Summary>,
    pub co2_kg: Option<Summary>,
    pub non_stop_share: f64,
    pub messages: Option<MessageHistogram>,
    pub backup_activations: usize,
    pub co_occupancy_events: usize,
    pub table_overlaps: usize,
}

pub fn summarize(result: &SimResult, v_min: f64) -> RunSummary {
    let done: Vec<&VehicleRecord> = result.records.iter().filter(|r| r.completed()).collect();
    let tt: Vec<f64> = done.iter().map(|r| r.travel_time).collect();
    let co2: Vec<f64> = done.iter().map(|r| r.co2_kg).collect();
    let non_stop = done.iter().filter(|r| r.min_speed >= v_min).count();
    RunSummary {
        vehicles: result.records.len(),
        completed: done.len(),
        travel_time: Summary::of(&tt),
        co2_kg: Summary::of(&co2),
        non_stop_share: non_stop as f64 / done.len().max(1) as f64,
        messages: message_histogram(&result.records).ok(),
        backup_activations: result.backup_activations,
        co_occupancy_events: result.safety.co_occupancy_events,
        table_overlaps: result.safety.table_overlaps,
    }
}

pub fn records_csv(records: &[VehicleRecord]) -> String {
    let mut out = String::from(
        "id,entry_road,exit_road,depart,arrive,travel_time,co2_kg,stops,min_speed,messages,negotiated,agreed,backup\n",
    );
    for r in records {
        let arrive = r.arrive.map_or_else(String::new, |a| format!("{a:.3}"));
        let _ = writeln!(
            out,
            "{},{},{},{:.3},{},{:.3},{:.6},{},{:.3},{},{},{},{}",
            r.id,
            r.entry_road,
            r.exit_road,
            r.depart,
            arrive,
            r.travel_time,
            r.co2_kg,
            r.stops,
            r.min_speed,
            r.messages,
            r.negotiated,
            r.agreed,
            r.backup
        );
    }
    out
}

pub fn summary_json(summary: &RunSummary) -> Result<String, MetricsError> {
    Ok(serde_json::to_string_pretty(summary)?)
}

/// Box-chart rows (`label,min,q1,median,q3,max`).
pub fn box_stats_csv(rows: &[(String, BoxStats)]) -> String {
    let mut out = String::from("label,min,q1,median,q3,max\n");
    for (label, b) in rows {
        let _ = writeln!(
            out,
            "{label},{:.3},{:.3},{:.3},{:.3},{:.3}",
            b.min, b.q1, b.median, b.q3, b.max
        );
    }
    out
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Capacity {
    /// Largest grid density whose 90th-percentile travel time is below the threshold.
    Density(f64),
    BelowGridMinimum,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityPoint {
    pub density: f64,
    pub p90: f64,
    pub mean: f64,
    pub sustainable: bool,
    pub backup_activations: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CapacityResult {
    pub threshold: f64,
    pub capacity: Capacity,
    pub points: Vec<CapacityPoint>,
    /// False when a sustainable density follows an unsustainable one.
    pub monotone: bool,
}

/// Travel times pooled over runs; unfinished vehicles contribute their
/// elapsed time.
pub fn pooled_travel_times(results: &[SimResult]) -> Vec<f64> {
    let mut all: Vec<f64> = results
        .iter()
        .flat_map(|r| r.records.iter().map(|v| v.travel_time))
        .collect();
    all.sort_by(f64::total_cmp);
    all
}

/// Picks the capacity from per-density 90th percentiles.
pub fn sustainable_density(points: &[(f64, f64)], threshold: f64) -> (Capacity, bool) {
    let mut capacity = Capacity::BelowGridMinimum;
    let mut seen_fail = false;
    let mut monotone = true;
    for &(d, p90) in points {
        if p90 < threshold {
            if seen_fail {
                monotone = false;
            } else {
                capacity = Capacity::Density(d);
            }
        } else {
            seen_fail = true;
        }
    }
    (capacity, monotone)
}

fn run_all(configs: Vec<ScenarioConfig>) -> Result<Vec<SimResult>, MetricsError> {
    configs
        .into_par_iter()
        .map(|c| simulator::run(&c).map_err(MetricsError::from))
        .collect()
}

/// Threshold: three times the mean travel time of the priority method at
/// `reference_density` on the template's layout.
pub fn capacity_threshold(
    template: &ScenarioConfig,
    reference_density: f64,
    seeds: &[u64],
) -> Result<f64, MetricsError> {
    if seeds.is_empty() {
        return Err(MetricsError::NoSeeds);
    }
    let configs = seeds
        .iter()
        .map(|&seed| ScenarioConfig {
            method: Method::Priority,
            arrival_rate: reference_density,
            seed,
            ..template.clone()
        })
        .collect();
    let tt = pooled_travel_times(&run_all(configs)?);
    Ok(3.0 * tt.iter().sum::<f64>() / tt.len().max(1) as f64)
}

pub fn capacity_sweep(
    template: &ScenarioConfig,
    grid: &[f64],
    seeds: &[u64],
    threshold: f64,
) -> Result<CapacityResult, MetricsError> {
    if grid.is_empty() {
        return Err(MetricsError::EmptyGrid);
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(MetricsError::UnsortedGrid);
    }
    if seeds.is_empty() {
        return Err(MetricsError::NoSeeds);
    }
    let configs: Vec<ScenarioConfig> = grid
        .iter()
        .flat_map(|&d| {
            seeds.iter().map(move |&seed| ScenarioConfig {
                arrival_rate: d,
                seed,
                ..template.clone()
            })
        })
        .collect();
    let results = run_all(configs)?;
    let mut points = Vec::with_capacity(grid.len());
    for (i, &d) in grid.iter().enumerate() {
        let chunk = &results[i * seeds.len()..(i + 1) * seeds.len()];
        let tt = pooled_travel_times(chunk);
        let p90 = percentile(&tt, 90.0).unwrap_or(0.0);
        points.push(CapacityPoint {
            density: d,
            p90,
            mean: tt.iter().sum::<f64>() / tt.len().max(1) as f64,
            sustainable: p90 < threshold,
            backup_activations: chunk.iter().map(|r| r.backup_activations).sum(),
        });
    }
    let pairs: Vec<(f64, f64)> = points.iter().map(|p| (p.density, p.p90)).collect();
    let (capacity, monotone) = sustainable_density(&pairs, threshold);
    Ok(CapacityResult {
        threshold,
        capacity,
        points,
        monotone,
    })
}
