//! Naive reference implementations, written without the library's helpers.

use motionfuse::decoder::Modes;

fn d(a: [f64; 2], b: [f64; 2]) -> f64 {
    ((a[0] - b[0]) * (a[0] - b[0]) + (a[1] - b[1]) * (a[1] - b[1])).sqrt()
}

fn end(t: &[[f64; 2]]) -> [f64; 2] {
    t[t.len() - 1]
}

/// Greedy centroid sequence found by enumerating every ordered sequence of
/// distinct modes. A valid sequence only picks modes not yet covered and stops
/// once all are covered; the answer is the sequence whose
/// `(gain_1, -index_1, gain_2, -index_2, ...)` is lexicographically largest.
pub fn greedy_by_enumeration(modes: &Modes, radius: f64) -> Vec<usize> {
    let n = modes.probs.len();
    let covers: Vec<Vec<bool>> = (0..n)
        .map(|i| (0..n).map(|j| d(end(&modes.trajs[i]), end(&modes.trajs[j])) <= radius).collect())
        .collect();
    let mut best: Option<(Vec<(f64, i64)>, Vec<usize>)> = None;
    let mut seq = Vec::new();
    let mut key = Vec::new();
    enumerate(&covers, &modes.probs, &mut vec![false; n], &mut seq, &mut key, &mut best);
    best.map(|b| b.1).unwrap_or_default()
}

fn enumerate(
    covers: &[Vec<bool>],
    probs: &[f64],
    covered: &mut Vec<bool>,
    seq: &mut Vec<usize>,
    key: &mut Vec<(f64, i64)>,
    best: &mut Option<(Vec<(f64, i64)>, Vec<usize>)>,
) {
    let n = probs.len();
    if covered.iter().all(|&c| c) {
        let better = match best {
            None => true,
            Some((k, _)) => lex_greater(key, k),
        };
        if better {
            *best = Some((key.clone(), seq.clone()));
        }
        return;
    }
    for c in 0..n {
        if covered[c] {
            continue;
        }
        let before = covered.clone();
        let mut gain = 0.0;
        for j in 0..n {
            if !covered[j] && covers[c][j] {
                gain += probs[j];
            }
        }
        for j in 0..n {
            if covers[c][j] {
                covered[j] = true;
            }
        }
        seq.push(c);
        key.push((gain, -(c as i64)));
        enumerate(covers, probs, covered, seq, key, best);
        seq.pop();
        key.pop();
        *covered = before;
    }
}

fn lex_greater(a: &[(f64, i64)], b: &[(f64, i64)]) -> bool {
    for (x, y) in a.iter().zip(b) {
        if x.0 != y.0 {
            return x.0 > y.0;
        }
        if x.1 != y.1 {
            return x.1 > y.1;
        }
    }
    a.len() < b.len()
}

/// Indices of the `k` most likely modes, ties to the lower index.
pub fn top_k(probs: &[f64], k: usize) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..probs.len()).collect();
    // insertion sort on (-p, i)
    for i in 1..idx.len() {
        let mut j = i;
        while j > 0 && (probs[idx[j]] > probs[idx[j - 1]] || (probs[idx[j]] == probs[idx[j - 1]] && idx[j] < idx[j - 1])) {
            idx.swap(j, j - 1);
            j -= 1;
        }
    }
    idx.truncate(k);
    idx
}

pub fn ade(p: &[[f64; 2]], g: &[[f64; 2]]) -> f64 {
    let mut s = 0.0;
    for t in 0..g.len() {
        s += d(p[t], g[t]);
    }
    s / g.len() as f64
}

pub fn fde(p: &[[f64; 2]], g: &[[f64; 2]]) -> f64 {
    d(end(p), end(g))
}

/// Per-agent reference values over the given mode subset.
#[derive(Debug, Clone)]
pub struct AgentRef {
    pub min_ade: f64,
    pub min_fde: f64,
    pub brier: f64,
    pub miss: bool,
    pub overlap: f64,
    /// `(confidence, true_positive)` per mode.
    pub dets: Vec<(f64, bool)>,
}

pub fn agent_reference(
    modes: &Modes,
    gt: &[[f64; 2]],
    others: &[Vec<[f64; 2]>],
    k: usize,
    miss: f64,
    map_threshold: f64,
    radius: f64,
) -> AgentRef {
    let keep = top_k(&modes.probs, k);
    let mut min_ade = f64::INFINITY;
    let mut min_fde = f64::INFINITY;
    let mut arg = usize::MAX;
    for &i in &keep {
        min_ade = min_ade.min(ade(&modes.trajs[i], gt));
        let f = fde(&modes.trajs[i], gt);
        // keep the first kept mode reaching the minimum, in ranked order
        if f < min_fde {
            min_fde = f;
            arg = i;
        }
    }
    let brier = min_fde + (1.0 - modes.probs[arg]) * (1.0 - modes.probs[arg]);
    let miss = keep.iter().all(|&i| fde(&modes.trajs[i], gt) > miss);
    let likely = &modes.trajs[keep[0]];
    let overlap = if others.is_empty() {
        0.0
    } else {
        let mut hits = 0;
        for t in 0..gt.len() {
            if others.iter().any(|o| d(likely[t], o[t]) < 2.0 * radius) {
                hits += 1;
            }
        }
        hits as f64 / gt.len() as f64
    };
    let dets = keep
        .iter()
        .map(|&i| (modes.probs[i], i == arg && min_fde <= map_threshold))
        .collect();
    AgentRef {
        min_ade,
        min_fde,
        brier,
        miss,
        overlap,
        dets,
    }
}

/// Average precision by scanning every distinct confidence as a threshold.
pub fn average_precision(dets: &[(f64, bool)], positives: usize) -> f64 {
    if positives == 0 {
        return 0.0;
    }
    let mut thresholds: Vec<f64> = dets.iter().map(|x| x.0).collect();
    thresholds.sort_by(|a, b| b.partial_cmp(a).unwrap());
    thresholds.dedup();
    let mut ap = 0.0;
    let mut prev_recall = 0.0;
    for c in thresholds {
        let kept: Vec<&(f64, bool)> = dets.iter().filter(|x| x.0 >= c).collect();
        let tp = kept.iter().filter(|x| x.1).count() as f64;
        let recall = tp / positives as f64;
        let precision = tp / kept.len() as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
    }
    ap
}

/// Behavior bucket: 0 stationary, 1 straight, 2 left, 3 right.
pub fn bucket(origin: [f64; 2], heading: f64, gt: &[[f64; 2]], stationary: f64, turn: f64) -> usize {
    if d(origin, end(gt)) < stationary {
        return 0;
    }
    let mut pts = vec![origin];
    pts.extend_from_slice(gt);
    let mut change = 0.0;
    for i in (1..pts.len()).rev() {
        let (p, q) = (pts[i - 1], pts[i]);
        if d(p, q) > 1e-6 {
            let h = (q[1] - p[1]).atan2(q[0] - p[0]);
            let diff = h - heading;
            change = diff.sin().atan2(diff.cos());
            break;
        }
    }
    if change > turn {
        2
    } else if change < -turn {
        3
    } else {
        1
    }
}
