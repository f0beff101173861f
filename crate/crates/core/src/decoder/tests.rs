use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use std::f64::consts::{LN_2, PI};

use super::*;
use crate::numerics::Tape;

fn cfg(k: usize, zero: bool) -> DecoderConfig {
    DecoderConfig {
        block: BlockConfig::new(8, 2, 16).unwrap(),
        depth: 2,
        modes: k,
        future_steps: 3,
        ensemble: 1,
        zero_init_heads: zero,
    }
}

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn decode(store: &ParamStore, dec: &TrajectoryDecoder, z: &Array, mask: &[bool]) -> MixtureTrajectory {
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let zv = tape.constant(z.clone());
    let enc = SceneEncoding {
        z: zv,
        agents: z.shape()[0],
        len: z.shape()[1],
        mask: mask.to_vec(),
    };
    let mut f = Forward::new(&mut tape, &bound);
    let out = dec.decode(&mut f, &enc).unwrap();
    out.values(&f)
}

fn setup(c: &DecoderConfig, width: usize, seed: u64) -> (ParamStore, TrajectoryDecoder) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut store = ParamStore::new();
    let dec = TrajectoryDecoder::new(&mut store, "decoder", c, width, &mut rng).unwrap();
    (store, dec)
}

#[test]
fn single_mode_has_probability_one() {
    let (store, dec) = setup(&cfg(1, false), 8, 1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mix = decode(&store, &dec, &random(&[2, 5, 8], &mut rng), &[true; 10]);
    assert_eq!(mix.probabilities().data(), &[1.0, 1.0]);
    assert_eq!(mix.means.shape(), &[2, 1, 3, 2]);
}

#[test]
fn zero_heads_give_uniform_unit_mixture() {
    let (store, dec) = setup(&cfg(6, true), 8, 3);
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mix = decode(&store, &dec, &random(&[1, 4, 8], &mut rng), &[true; 4]);
    assert!(mix.logits.data().iter().all(|&v| v == 0.0));
    assert!(mix.means.data().iter().all(|&v| v == 0.0));
    assert!(mix.logstd.data().iter().all(|&v| v == 0.0));
    for p in mix.probabilities().data() {
        assert!((p - 1.0 / 6.0).abs() < 1e-15);
    }
}

#[test]
fn token_permutation_and_masked_tokens_do_not_matter() {
    let (store, dec) = setup(&cfg(4, false), 8, 5);
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let z = random(&[1, 5, 8], &mut rng);
    let mask = [true, false, true, true, false];
    let base = decode(&store, &dec, &z, &mask);
    let perm = [3, 0, 4, 2, 1];
    let zp = z.index_select(1, &perm).unwrap();
    let mp: Vec<bool> = perm.iter().map(|&i| mask[i]).collect();
    let permuted = decode(&store, &dec, &zp, &mp);
    assert!(base.means.max_abs_diff(&permuted.means) < 1e-12);
    assert!(base.logits.max_abs_diff(&permuted.logits) < 1e-12);

    let mut corrupt = z.clone();
    corrupt.data_mut()[8..16].iter_mut().for_each(|v| *v = 50.0);
    let c = decode(&store, &dec, &corrupt, &mask);
    assert_eq!(c, base);
}

#[test]
fn query_permutation_permutes_modes() {
    let (mut store, dec) = setup(&cfg(4, false), 8, 7);
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let z = random(&[2, 3, 8], &mut rng);
    let base = decode(&store, &dec, &z, &[true; 6]);
    let perm = [2, 0, 3, 1];
    let q = store.get(dec.queries).index_select(0, &perm).unwrap();
    *store.get_mut(dec.queries) = q;
    let p = decode(&store, &dec, &z, &[true; 6]);
    assert!(base.logits.index_select(1, &perm).unwrap().max_abs_diff(&p.logits) < 1e-12);
    assert!(base.means.index_select(1, &perm).unwrap().max_abs_diff(&p.means) < 1e-12);
    assert!(base.logstd.index_select(1, &perm).unwrap().max_abs_diff(&p.logstd) < 1e-12);
}

#[test]
fn width_projection_and_clamp() {
    let c = DecoderConfig {
        block: BlockConfig::new(4, 2, 8).unwrap(),
        ..cfg(3, false)
    };
    let (mut store, dec) = setup(&c, 8, 9);
    assert!(store.find("decoder.memory_proj.w").is_some());
    // push the trajectory head far out so the clamp engages
    let id = store.find("decoder.traj.b").unwrap();
    store.get_mut(id).data_mut().iter_mut().for_each(|v| *v = 40.0);
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    let mix = decode(&store, &dec, &random(&[1, 2, 8], &mut rng), &[true, true]);
    assert!(mix.logstd.data().iter().all(|&v| v == LOGSTD_MAX));
}

#[test]
fn empty_encoding_is_an_error() {
    let (store, dec) = setup(&cfg(2, false), 8, 11);
    let mut tape = Tape::new();
    let bound = store.bind(&mut tape);
    let zv = tape.constant(Array::zeros(&[1, 2, 8]));
    let enc = SceneEncoding {
        z: zv,
        agents: 1,
        len: 2,
        mask: vec![false, false],
    };
    assert!(dec.decode(&mut Forward::new(&mut tape, &bound), &enc).is_err());
}

fn mixture(means: Vec<f64>, logstd: Vec<f64>, t: usize) -> MixtureTrajectory {
    MixtureTrajectory {
        logits: Array::zeros(&[1, 1]),
        means: Array::new(vec![1, 1, t, 2], means).unwrap(),
        logstd: Array::new(vec![1, 1, t, 2], logstd).unwrap(),
    }
}

#[test]
fn log_prob_closed_forms() {
    let t = 4;
    let mu: Vec<f64> = (0..8).map(|i| i as f64 * 0.3).collect();
    let gt = Array::new(vec![1, t, 2], mu.clone()).unwrap();
    let lp = mixture_log_prob(&mixture(mu.clone(), vec![0.0; 8], t), &gt, &[0]).unwrap();
    assert!((lp[0] + t as f64 * (2.0 * PI).ln()).abs() < 1e-12);

    let doubled = mixture_log_prob(&mixture(mu, vec![LN_2; 8], t), &gt, &[0]).unwrap();
    assert!((lp[0] - doubled[0] - 2.0 * t as f64 * LN_2).abs() < 1e-12);

    let one = mixture(vec![0.0, 0.0], vec![0.0, 0.0], 1);
    let lp = mixture_log_prob(&one, &Array::new(vec![1, 1, 2], vec![1.0, 0.0]).unwrap(), &[0]).unwrap();
    assert!((lp[0] - (-(2.0 * PI).ln() - 0.5)).abs() < 1e-12);
}

#[test]
fn prediction_records_round_trip() {
    let (store, dec) = setup(&cfg(3, false), 8, 12);
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    let mix = decode(&store, &dec, &random(&[2, 3, 8], &mut rng), &[true; 6]);
    let rec = PredictionRecord::from_mixture("s0", 5, &mix, 1);
    let text = serde_json::to_string(&rec).unwrap();
    let back: PredictionRecord = serde_json::from_str(&text).unwrap();
    assert_eq!(back, rec);
    let modes = back.modes().unwrap();
    assert_eq!(modes.trajs[2], mix.mean_of(1, 2));
    assert!((modes.probs.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    assert_eq!(PredictionRecord::from_modes("s0", 5, &modes).modes().unwrap(), modes);
}

#[test]
fn ranking_breaks_ties_by_index() {
    let m = Modes {
        probs: vec![0.2, 0.4, 0.2, 0.2],
        trajs: vec![vec![[0.0, 0.0]]; 4],
    };
    assert_eq!(m.ranked(), vec![1, 0, 2, 3]);
    assert_eq!(m.top(2).probs, vec![0.4, 0.2]);
}
