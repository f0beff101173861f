//! Reducing many weighted trajectories to a few representatives: greedy
//! coverage of endpoints followed by weighted-mean refinement.

use serde::{Deserialize, Serialize};

use crate::decoder::{MixtureTrajectory, Modes};
use crate::error::{Error, Result};
use crate::numerics::Array;

#[cfg(test)]
mod tests;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AggregationConfig {
    /// Coverage radius on trajectory endpoints.
    pub distance: f64,
    pub iterations: usize,
    /// Number of trajectories returned.
    pub k_out: usize,
}

impl Default for AggregationConfig {
    fn default() -> Self {
        Self {
            distance: 2.3,
            iterations: 3,
            k_out: 6,
        }
    }
}

impl AggregationConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.distance > 0.0) {
            return Err(Error::Config(format!("aggregation distance must be positive, got {}", self.distance)));
        }
        if self.k_out == 0 {
            return Err(Error::Config("k_out must be at least 1".into()));
        }
        Ok(())
    }
}

/// A representative trajectory and the mass assigned to it.
#[derive(Debug, Clone, PartialEq)]
pub struct Centroid {
    pub traj: Vec<[f64; 2]>,
    pub prob: f64,
    /// Index of the mode it was seeded from.
    pub seed: usize,
}

pub fn endpoint_distance(a: &[[f64; 2]], b: &[[f64; 2]]) -> f64 {
    let (p, q) = (a[a.len() - 1], b[b.len() - 1]);
    (p[0] - q[0]).hypot(p[1] - q[1])
}

/// Modes selected as centroids, in selection order.
///
/// Each round picks, among uncovered modes, the one whose radius-`distance`
/// endpoint ball holds the most uncovered probability (lowest index on ties),
/// until every mode is covered.
pub fn greedy_init(modes: &Modes, cfg: &AggregationConfig) -> Vec<usize> {
    let n = modes.len();
    let mut covered = vec![false; n];
    let mut chosen = Vec::new();
    while covered.iter().any(|c| !c) {
        let mut best: Option<(usize, f64)> = None;
        for c in (0..n).filter(|&c| !covered[c]) {
            let mass: f64 = (0..n)
                .filter(|&j| !covered[j] && endpoint_distance(&modes.trajs[c], &modes.trajs[j]) <= cfg.distance)
                .map(|j| modes.probs[j])
                .sum();
            if best.is_none_or(|(_, m)| mass > m) {
                best = Some((c, mass));
            }
        }
        let (c, _) = best.expect("an uncovered mode exists");
        for j in 0..n {
            if endpoint_distance(&modes.trajs[c], &modes.trajs[j]) <= cfg.distance {
                covered[j] = true;
            }
        }
        chosen.push(c);
    }
    chosen
}

/// Nearest centroid of every mode by endpoint distance, lowest index on ties.
pub fn assign(centroids: &[Centroid], modes: &Modes) -> Vec<usize> {
    modes
        .trajs
        .iter()
        .map(|m| {
            let mut best = (0, f64::INFINITY);
            for (i, c) in centroids.iter().enumerate() {
                let d = endpoint_distance(&c.traj, m);
                if d < best.1 {
                    best = (i, d);
                }
            }
            best.0
        })
        .collect()
}

fn masses(n: usize, assignment: &[usize], modes: &Modes) -> Vec<f64> {
    let mut mass = vec![0.0; n];
    for (j, &c) in assignment.iter().enumerate() {
        mass[c] += modes.probs[j];
    }
    mass
}

/// Centroids seeded at `chosen`, carrying the mass of the modes nearest to them.
pub fn seed_centroids(chosen: &[usize], modes: &Modes) -> Vec<Centroid> {
    let mut centroids: Vec<Centroid> = chosen
        .iter()
        .map(|&i| Centroid {
            traj: modes.trajs[i].clone(),
            prob: 0.0,
            seed: i,
        })
        .collect();
    let mass = masses(centroids.len(), &assign(&centroids, modes), modes);
    for (c, m) in centroids.iter_mut().zip(mass) {
        c.prob = m;
    }
    centroids
}

/// Moves each centroid to the probability-weighted mean of its assigned modes,
/// then reassigns, `cfg.iterations` times. A centroid left without mass keeps
/// its trajectory.
pub fn refine(mut centroids: Vec<Centroid>, modes: &Modes, cfg: &AggregationConfig) -> Vec<Centroid> {
    let mut assignment = assign(&centroids, modes);
    for _ in 0..cfg.iterations {
        let steps = modes.trajs.first().map_or(0, Vec::len);
        let mut sums = vec![vec![[0.0; 2]; steps]; centroids.len()];
        let mut weights = vec![0.0; centroids.len()];
        for (j, &c) in assignment.iter().enumerate() {
            let p = modes.probs[j];
            weights[c] += p;
            for (acc, pt) in sums[c].iter_mut().zip(&modes.trajs[j]) {
                acc[0] += p * pt[0];
                acc[1] += p * pt[1];
            }
        }
        for (i, c) in centroids.iter_mut().enumerate() {
            if weights[i] > 0.0 {
                c.traj = sums[i].iter().map(|s| [s[0] / weights[i], s[1] / weights[i]]).collect();
            }
        }
        assignment = assign(&centroids, modes);
        let mass = masses(centroids.len(), &assignment, modes);
        for (c, m) in centroids.iter_mut().zip(mass) {
            c.prob = m;
        }
    }
    centroids
}

/// Concatenates the members' modes and divides every probability by the
/// member count.
pub fn merge_ensemble(members: &[MixtureTrajectory]) -> Result<MixtureTrajectory> {
    let first = members.first().ok_or_else(|| Error::Data("no ensemble members to merge".into()))?;
    if members.len() == 1 {
        return Ok(first.clone());
    }
    for m in members {
        if m.agents() != first.agents() || m.steps() != first.steps() {
            return Err(Error::Data(format!(
                "ensemble members disagree on agents or horizon: [{}, _, {}] vs [{}, _, {}]",
                m.agents(),
                m.steps(),
                first.agents(),
                first.steps()
            )));
        }
    }
    let shift = (members.len() as f64).ln();
    let log_probs = members
        .iter()
        .map(|m| m.logits.softmax(None).map(|p| p.map(|v| v.ln() - shift)))
        .collect::<std::result::Result<Vec<_>, _>>()?;
    let cat = |arrays: Vec<&Array>| Array::concat(&arrays, 1);
    Ok(MixtureTrajectory {
        logits: cat(log_probs.iter().collect())?,
        means: cat(members.iter().map(|m| &m.means).collect())?,
        logstd: cat(members.iter().map(|m| &m.logstd).collect())?,
    })
}

/// At most `k_out` representatives, most likely first, probabilities summing to 1.
///
/// Surplus centroids are dropped by mass. When there are too few, the most
/// likely original modes that did not seed a centroid are appended with their
/// own probabilities before renormalizing.
pub fn aggregate_to_k(modes: &Modes, cfg: &AggregationConfig) -> Result<Modes> {
    cfg.validate()?;
    if modes.len() < cfg.k_out {
        return Err(Error::Data(format!(
            "cannot aggregate {} modes to {}",
            modes.len(),
            cfg.k_out
        )));
    }
    let chosen = greedy_init(modes, cfg);
    let centroids = refine(seed_centroids(&chosen, modes), modes, cfg);
    let mut out = Modes {
        probs: centroids.iter().map(|c| c.prob).collect(),
        trajs: centroids.iter().map(|c| c.traj.clone()).collect(),
    };
    if out.len() < cfg.k_out {
        for i in modes.ranked() {
            if out.len() == cfg.k_out {
                break;
            }
            if !chosen.contains(&i) {
                out.probs.push(modes.probs[i]);
                out.trajs.push(modes.trajs[i].clone());
            }
        }
    }
    let mut out = out.top(cfg.k_out);
    let total: f64 = out.probs.iter().sum();
    if total > 0.0 {
        out.probs.iter_mut().for_each(|p| *p /= total);
    } else {
        let u = 1.0 / out.len() as f64;
        out.probs.iter_mut().for_each(|p| *p = u);
    }
    Ok(out)
}

/// Aggregates every agent row of a mixture.
pub fn aggregate_mixture(mix: &MixtureTrajectory, cfg: &AggregationConfig) -> Result<Vec<Modes>> {
    (0..mix.agents()).map(|a| aggregate_to_k(&mix.agent_modes(a), cfg)).collect()
}
