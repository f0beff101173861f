use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;

/// Single-step modes on the x axis.
fn line(xs: &[f64], ps: &[f64]) -> Modes {
    Modes {
        probs: ps.to_vec(),
        trajs: xs.iter().map(|&x| vec![[x, 0.0]]).collect(),
    }
}

fn cfg(distance: f64, iterations: usize, k_out: usize) -> AggregationConfig {
    AggregationConfig {
        distance,
        iterations,
        k_out,
    }
}

#[test]
fn greedy_picks_heaviest_cover_first() {
    let m = line(&[0.0, 1.0, 10.0], &[0.5, 0.3, 0.2]);
    assert_eq!(greedy_init(&m, &cfg(2.0, 0, 2)), vec![0, 2]);
    assert_eq!(greedy_init(&m, &cfg(f64::INFINITY, 0, 1)), vec![0]);
    // mode 1 covers 0.8, mode 0 only 0.7; mode 3 is left over
    let chain = line(&[0.0, 1.5, 3.0, -1.5], &[0.1, 0.4, 0.3, 0.2]);
    assert_eq!(greedy_init(&chain, &cfg(2.0, 0, 1)), vec![1, 3]);
    // every candidate covers everything: lowest index wins
    let tight = line(&[0.0, 0.5, -0.5, 0.2], &[0.1, 0.6, 0.2, 0.1]);
    assert_eq!(greedy_init(&tight, &cfg(2.0, 0, 1)), vec![0]);
}

#[test]
fn greedy_coverage_on_random_instances() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    for _ in 0..200 {
        let n = rng.gen_range(1..30);
        let mut probs: Vec<f64> = (0..n).map(|_| rng.gen::<f64>()).collect();
        let s: f64 = probs.iter().sum();
        probs.iter_mut().for_each(|p| *p /= s);
        let modes = Modes {
            probs,
            trajs: (0..n)
                .map(|_| (0..3).map(|_| [rng.gen_range(-10.0..10.0), rng.gen_range(-10.0..10.0)]).collect())
                .collect(),
        };
        let c = cfg(rng.gen_range(0.5..6.0), 2, 1);
        let chosen = greedy_init(&modes, &c);
        for t in &modes.trajs {
            assert!(chosen.iter().any(|&i| endpoint_distance(&modes.trajs[i], t) <= c.distance));
        }
        let refined = refine(seed_centroids(&chosen, &modes), &modes, &c);
        assert_eq!(refined.len(), chosen.len());
        let total: f64 = refined.iter().map(|r| r.prob).sum();
        assert!((total - 1.0).abs() < 1e-9);
    }
}

#[test]
fn refine_moves_to_weighted_mean() {
    let m = line(&[0.0, 1.0, 10.0], &[0.5, 0.3, 0.2]);
    let c = cfg(2.0, 1, 2);
    let seeded = seed_centroids(&greedy_init(&m, &c), &m);
    assert_eq!(seeded[0].prob, 0.8);
    let r = refine(seeded.clone(), &m, &c);
    assert!((r[0].traj[0][0] - 0.375).abs() < 1e-15);
    assert!((r[0].prob - 0.8).abs() < 1e-15);
    assert_eq!(r[1].traj[0][0], 10.0);
    assert_eq!(refine(seeded.clone(), &m, &cfg(2.0, 0, 2)), seeded);
}

#[test]
fn identical_modes_are_a_fixed_point() {
    let traj = vec![[1.0, 2.0], [3.0, -1.0]];
    let m = Modes {
        probs: vec![0.25; 4],
        trajs: vec![traj.clone(); 4],
    };
    let c = cfg(1.0, 5, 1);
    let r = refine(seed_centroids(&greedy_init(&m, &c), &m), &m, &c);
    assert_eq!(r.len(), 1);
    assert_eq!(r[0].traj, traj);
    assert_eq!(r[0].prob, 1.0);
}

#[test]
fn empty_cluster_keeps_its_trajectory() {
    let m = line(&[0.0, 0.1], &[0.5, 0.5]);
    let centroids = vec![
        Centroid {
            traj: vec![[0.05, 0.0]],
            prob: 1.0,
            seed: 0,
        },
        Centroid {
            traj: vec![[50.0, 0.0]],
            prob: 0.0,
            seed: 1,
        },
    ];
    let r = refine(centroids, &m, &cfg(1.0, 3, 2));
    assert_eq!(r[1].traj, vec![[50.0, 0.0]]);
    assert_eq!(r[1].prob, 0.0);
}

fn mix(a: usize, k: usize, t: usize, seed: u64) -> MixtureTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut r = |n: usize| (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect::<Vec<f64>>();
    MixtureTrajectory {
        logits: Array::new(vec![a, k], r(a * k)).unwrap(),
        means: Array::new(vec![a, k, t, 2], r(a * k * t * 2)).unwrap(),
        logstd: Array::new(vec![a, k, t, 2], r(a * k * t * 2)).unwrap(),
    }
}

#[test]
fn merge_concatenates_and_renormalizes() {
    let one = mix(2, 4, 3, 1);
    assert_eq!(merge_ensemble(std::slice::from_ref(&one)).unwrap(), one);

    let two = merge_ensemble(&[one.clone(), one.clone()]).unwrap();
    assert_eq!(two.modes(), 8);
    let (p1, p2) = (one.probabilities(), two.probabilities());
    for a in 0..2 {
        for i in 0..8 {
            assert!((p2.get(&[a, i]) - p1.get(&[a, i % 4]) / 2.0).abs() < 1e-12);
        }
        assert!(((0..8).map(|i| p2.get(&[a, i])).sum::<f64>() - 1.0).abs() < 1e-12);
        assert_eq!(two.mean_of(a, 5), one.mean_of(a, 1));
    }

    let three = merge_ensemble(&[mix(1, 64, 2, 1), mix(1, 64, 2, 2), mix(1, 64, 2, 3)]).unwrap();
    assert_eq!(three.modes(), 192);
    assert!((three.probabilities().sum() - 1.0).abs() < 1e-12);

    assert!(merge_ensemble(&[mix(1, 4, 3, 1), mix(1, 4, 2, 1)]).is_err());
    assert!(merge_ensemble(&[]).is_err());
}

#[test]
fn aggregate_keeps_separated_modes() {
    let m = line(&[0.0, 10.0, 20.0, 30.0, 40.0, 50.0], &[0.1, 0.3, 0.05, 0.25, 0.2, 0.1]);
    let out = aggregate_to_k(&m, &cfg(1.0, 3, 6)).unwrap();
    let mut got: Vec<(f64, f64)> = out.trajs.iter().map(|t| t[0][0]).zip(out.probs.iter().copied()).collect();
    got.sort_by(|a, b| a.0.total_cmp(&b.0));
    let want: Vec<(f64, f64)> = m.trajs.iter().map(|t| t[0][0]).zip(m.probs.iter().copied()).collect();
    for (g, w) in got.iter().zip(&want) {
        assert!((g.0 - w.0).abs() < 1e-12 && (g.1 - w.1).abs() < 1e-12);
    }
    assert_eq!(out.probs[0], 0.3);
}

#[test]
fn aggregate_192_to_6() {
    let merged = merge_ensemble(&[mix(1, 64, 4, 7), mix(1, 64, 4, 8), mix(1, 64, 4, 9)]).unwrap();
    let modes = merged.agent_modes(0);
    assert_eq!(modes.len(), 192);
    let out = aggregate_to_k(&modes, &cfg(0.3, 3, 6)).unwrap();
    assert_eq!(out.len(), 6);
    assert!((out.probs.iter().sum::<f64>() - 1.0).abs() < 1e-9);
    assert!(out.probs.windows(2).all(|w| w[0] >= w[1]));
    assert!(aggregate_to_k(&line(&[0.0], &[1.0]), &cfg(1.0, 1, 2)).is_err());
}

#[test]
fn aggregate_pads_with_likely_unseeded_modes() {
    // everything collapses onto one centroid; pad with the next most likely modes
    let m = line(&[0.0, 0.1, 0.2, 0.3], &[0.1, 0.4, 0.3, 0.2]);
    let out = aggregate_to_k(&m, &cfg(5.0, 0, 3)).unwrap();
    assert_eq!(out.len(), 3);
    let xs: Vec<f64> = out.trajs.iter().map(|t| t[0][0]).collect();
    // the tie seeds x = 0.0 with all mass; pads 0.1 (0.4) and 0.2 (0.3)
    assert_eq!(xs, vec![0.0, 0.1, 0.2]);
    let total = 1.0 + 0.4 + 0.3;
    let want = [1.0 / total, 0.4 / total, 0.3 / total];
    for (p, w) in out.probs.iter().zip(want) {
        assert!((p - w).abs() < 1e-12);
    }
}

#[test]
fn aggregation_is_deterministic() {
    let merged = merge_ensemble(&[mix(2, 16, 3, 4), mix(2, 16, 3, 5)]).unwrap();
    let c = cfg(1.0, 4, 6);
    assert_eq!(aggregate_mixture(&merged, &c).unwrap(), aggregate_mixture(&merged, &c).unwrap());
}
