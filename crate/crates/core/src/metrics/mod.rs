//! Displacement, miss, overlap and precision metrics over the top-k modes.

use std::f64::consts::PI;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::decoder::Modes;
use crate::error::{Error, Result};


pub type Traj = [[f64; 2]];

fn dist(a: [f64; 2], b: [f64; 2]) -> f64 {
    (a[0] - b[0]).hypot(a[1] - b[1])
}

/// Minimum over modes of the mean per-step distance.
pub fn min_ade(preds: &[Vec<[f64; 2]>], gt: &Traj) -> f64 {
    preds
        .iter()
        .map(|p| p.iter().zip(gt).map(|(a, b)| dist(*a, *b)).sum::<f64>() / gt.len() as f64)
        .fold(f64::INFINITY, f64::min)
}

/// Minimum over modes of the distance at step index `t`.
pub fn min_de(preds: &[Vec<[f64; 2]>], gt: &Traj, t: usize) -> f64 {
    preds.iter().map(|p| dist(p[t], gt[t])).fold(f64::INFINITY, f64::min)
}

pub fn min_fde(preds: &[Vec<[f64; 2]>], gt: &Traj) -> f64 {
    min_de(preds, gt, gt.len() - 1)
}

/// Index of the mode with the smallest final displacement, lowest on ties.
pub fn best_endpoint_mode(preds: &[Vec<[f64; 2]>], gt: &Traj) -> usize {
    let t = gt.len() - 1;
    let mut best = (0, f64::INFINITY);
    for (i, p) in preds.iter().enumerate() {
        let d = dist(p[t], gt[t]);
        if d < best.1 {
            best = (i, d);
        }
    }
    best.0
}

/// `minFDE + (1 - p)^2` with `p` the probability of the minFDE mode.
pub fn brier_min_fde(modes: &Modes, gt: &Traj) -> f64 {
    let i = best_endpoint_mode(&modes.trajs, gt);
    min_fde(&modes.trajs, gt) + (1.0 - modes.probs[i]).powi(2)
}

/// Whether every mode is farther than `threshold` from the truth at step index `t`.
pub fn is_miss(preds: &[Vec<[f64; 2]>], gt: &Traj, threshold: f64, t: usize) -> bool {
    preds.iter().all(|p| dist(p[t], gt[t]) > threshold)
}

/// Mean miss indicator over a population of `(preds, gt)` pairs.
pub fn miss_rate(population: &[(&[Vec<[f64; 2]>], &Traj)], threshold: f64, t: usize) -> f64 {
    let misses = population.iter().filter(|(p, g)| is_miss(p, g, threshold, t)).count();
    misses as f64 / population.len() as f64
}

/// Fraction of the first `steps` steps where `pred` comes closer than
/// `2 * radius` to any other agent's true position.
pub fn overlap(pred: &Traj, others: &[Vec<[f64; 2]>], radius: f64, steps: usize) -> f64 {
    if others.is_empty() || steps == 0 {
        return 0.0;
    }
    let hits = (0..steps)
        .filter(|&t| others.iter().any(|o| dist(pred[t], o[t]) < 2.0 * radius))
        .count();
    hits as f64 / steps as f64
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Bucket {
    Stationary,
    Straight,
    LeftTurn,
    RightTurn,
}

impl Bucket {
    pub const ALL: [Bucket; 4] = [Bucket::Stationary, Bucket::Straight, Bucket::LeftTurn, Bucket::RightTurn];

    pub fn name(self) -> &'static str {
        match self {
            Bucket::Stationary => "stationary",
            Bucket::Straight => "straight",
            Bucket::LeftTurn => "left_turn",
            Bucket::RightTurn => "right_turn",
        }
    }
}

/// Behavior classification of a ground-truth future.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BucketRule {
    /// Total displacement below which the agent counts as stationary.
    pub stationary_distance: f64,
    /// Net heading change (radians) beyond which the agent is turning.
    pub turn_angle: f64,
}

impl Default for BucketRule {
    fn default() -> Self {
        Self {
            stationary_distance: 2.0,
            turn_angle: PI / 6.0,
        }
    }
}

fn wrap_angle(a: f64) -> f64 {
    let mut a = (a + PI).rem_euclid(2.0 * PI) - PI;
    if a == -PI {
        a = PI;
    }
    a
}

impl BucketRule {
    /// `origin` and `heading` give the current pose; the final heading is the
    /// direction of the last non-degenerate step of `gt`.
    pub fn classify(&self, origin: [f64; 2], heading: f64, gt: &Traj) -> Bucket {
        let end = gt[gt.len() - 1];
        if dist(origin, end) < self.stationary_distance {
            return Bucket::Stationary;
        }
        let mut prev = origin;
        let mut last = None;
        for &p in gt {
            if dist(p, prev) > 1e-6 {
                last = Some((p[1] - prev[1]).atan2(p[0] - prev[0]));
            }
            prev = p;
        }
        let change = last.map_or(0.0, |h| wrap_angle(h - heading));
        if change > self.turn_angle {
            Bucket::LeftTurn
        } else if change < -self.turn_angle {
            Bucket::RightTurn
        } else {
            Bucket::Straight
        }
    }
}

/// One scored prediction for precision computation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Detection {
    pub confidence: f64,
    pub true_positive: bool,
}

/// Detections of one agent: at most one positive, the mode closest to the
/// truth at the final step if it lies within `threshold`.
pub fn detections(modes: &Modes, gt: &Traj, threshold: f64) -> Vec<Detection> {
    let best = best_endpoint_mode(&modes.trajs, gt);
    let hit = dist(modes.trajs[best][gt.len() - 1], gt[gt.len() - 1]) <= threshold;
    (0..modes.len())
        .map(|i| Detection {
            confidence: modes.probs[i],
            true_positive: hit && i == best,
        })
        .collect()
}

/// Area under the precision-recall step curve. Detections sharing a
/// confidence enter together.
pub fn average_precision(mut dets: Vec<Detection>, positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    let (mut tp, mut fp, mut recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < dets.len() {
        let c = dets[i].confidence;
        while i < dets.len() && dets[i].confidence == c {
            if dets[i].true_positive {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        let r = tp as f64 / positives as f64;
        ap += (r - recall) * tp as f64 / (tp + fp) as f64;
        recall = r;
    }
    ap
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Horizon {
    /// 1-based step count from the current time.
    pub step: usize,
    pub miss_threshold: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetricsConfig {
    pub k: usize,
    /// Horizons reported for minDE, miss rate and overlap. Empty means the final step.
    pub horizons: Vec<Horizon>,
    /// Miss threshold used for the final step when no horizons are given.
    pub miss_threshold: f64,
    pub map_threshold: f64,
    pub overlap_radius: f64,
    pub buckets: BucketRule,
}

impl Default for MetricsConfig {
    fn default() -> Self {
        Self {
            k: 6,
            horizons: Vec::new(),
            miss_threshold: 2.0,
            map_threshold: 2.0,
            overlap_radius: 1.0,
            buckets: BucketRule::default(),
        }
    }
}

impl MetricsConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.miss_threshold, self.map_threshold, self.overlap_radius]
            .into_iter()
            .chain(self.horizons.iter().map(|h| h.miss_threshold))
            .all(|v| v > 0.0);
        if self.k == 0 || !positive || self.horizons.iter().any(|h| h.step == 0) {
            return Err(Error::Config("k, horizon steps and thresholds must be positive".into()));
        }
        Ok(())
    }

    fn horizons_for(&self, steps: usize) -> Result<Vec<Horizon>> {
        if self.horizons.is_empty() {
            return Ok(vec![Horizon {
                step: steps,
                miss_threshold: self.miss_threshold,
            }]);
        }
        if let Some(h) = self.horizons.iter().find(|h| h.step > steps) {
            return Err(Error::Config(format!("horizon {} exceeds the {steps}-step future", h.step)));
        }
        Ok(self.horizons.clone())
    }
}

/// Everything needed to score one agent, in a single frame.
#[derive(Debug, Clone, PartialEq)]
pub struct EvalSample {
    pub scene_id: String,
    pub agent: usize,
    pub modes: Modes,
    pub gt: Vec<[f64; 2]>,
    /// Current position and heading of the agent.
    pub origin: [f64; 2],
    pub heading: f64,
    /// Ground-truth futures of the other modeled agents.
    pub others: Vec<Vec<[f64; 2]>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HorizonMetrics {
    pub step: usize,
    pub min_de: f64,
    pub miss_rate: f64,
    pub overlap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BucketAp {
    pub bucket: Bucket,
    pub agents: usize,
    pub ap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub agents: usize,
    pub k: usize,
    pub min_ade: f64,
    pub min_fde: f64,
    pub brier_min_fde: f64,
    pub map: f64,
    pub horizons: Vec<HorizonMetrics>,
    pub buckets: Vec<BucketAp>,
}

/// Averages every metric over the samples, each restricted to its top-`k` modes.
pub fn evaluate(samples: &[EvalSample], cfg: &MetricsConfig) -> Result<MetricsReport> {
    cfg.validate()?;
    let first = samples.first().ok_or_else(|| Error::Data("nothing to evaluate".into()))?;
    let steps = first.gt.len();
    for s in samples {
        let bad = s.modes.is_empty()
            || s.gt.len() != steps
            || s.modes.trajs.iter().chain(&s.others).any(|t| t.len() != steps);
        if bad {
            return Err(Error::Data(format!(
                "scene {} agent {}: trajectories must all have {steps} steps",
                s.scene_id, s.agent
            )));
        }
    }
    let top: Vec<Modes> = samples.iter().map(|s| s.modes.top(cfg.k)).collect();
    let n = samples.len() as f64;
    let mean = |f: &dyn Fn(usize) -> f64| (0..samples.len()).map(f).sum::<f64>() / n;

    let horizons = cfg
        .horizons_for(steps)?
        .into_iter()
        .map(|h| {
            let t = h.step - 1;
            HorizonMetrics {
                step: h.step,
                min_de: mean(&|i| min_de(&top[i].trajs, &samples[i].gt, t)),
                miss_rate: mean(&|i| is_miss(&top[i].trajs, &samples[i].gt, h.miss_threshold, t) as u8 as f64),
                overlap: mean(&|i| overlap(&top[i].trajs[0], &samples[i].others, cfg.overlap_radius, h.step)),
            }
        })
        .collect();

    let mut buckets = Vec::new();
    for b in Bucket::ALL {
        let members: Vec<usize> = (0..samples.len())
            .filter(|&i| cfg.buckets.classify(samples[i].origin, samples[i].heading, &samples[i].gt) == b)
            .collect();
        if members.is_empty() {
            continue;
        }
        let dets = members
            .iter()
            .flat_map(|&i| detections(&top[i], &samples[i].gt, cfg.map_threshold))
            .collect();
        buckets.push(BucketAp {
            bucket: b,
            agents: members.len(),
            ap: average_precision(dets, members.len()),
        });
    }
    let map = buckets.iter().map(|b| b.ap).sum::<f64>() / buckets.len() as f64;

    let report = MetricsReport {
        agents: samples.len(),
        k: cfg.k,
        min_ade: mean(&|i| min_ade(&top[i].trajs, &samples[i].gt)),
        min_fde: mean(&|i| min_fde(&top[i].trajs, &samples[i].gt)),
        brier_min_fde: mean(&|i| brier_min_fde(&top[i], &samples[i].gt)),
        map,
        horizons,
        buckets,
    };
    if !report.rows().iter().all(|(_, v)| v.is_finite()) {
        return Err(Error::Data("metrics are not finite; check predictions for NaN".into()));
    }
    Ok(report)
}

impl MetricsReport {
    /// `(name, value)` pairs in a fixed order.
    pub fn rows(&self) -> Vec<(String, f64)> {
        let mut rows = vec![
            ("agents".to_string(), self.agents as f64),
            (format!("min_ade_{}", self.k), self.min_ade),
            (format!("min_fde_{}", self.k), self.min_fde),
            (format!("brier_min_fde_{}", self.k), self.brier_min_fde),
            ("map".to_string(), self.map),
        ];
        for h in &self.horizons {
            rows.push((format!("min_de_{}@{}", self.k, h.step), h.min_de));
            rows.push((format!("miss_rate@{}", h.step), h.miss_rate));
            rows.push((format!("overlap@{}", h.step), h.overlap));
        }
        for b in &self.buckets {
            rows.push((format!("ap_{}", b.bucket.name()), b.ap));
            rows.push((format!("agents_{}", b.bucket.name()), b.agents as f64));
        }
        rows
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (name, v) in self.rows() {
            writeln!(out, "{name}: {v}").unwrap();
        }
        out
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("metric,value\n");
        for (name, v) in self.rows() {
            writeln!(out, "{name},{v}").unwrap();
        }
        out
    }
}
