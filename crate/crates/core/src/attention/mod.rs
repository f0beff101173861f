//! Encoder blocks: joint self-attention, per-axis factorized attention and
//! latent-query cross-attention.
//!
//! Every block sees its input as a grid `[A, T, S, D]` with mask `[A, T, S]`.
//! A joint block treats the `T * S` cells of an agent as one sequence; a temporal
//! block attends along `T` separately for every slot; a spatial block attends
//! along `S` separately for every step.

pub(crate) mod block;
pub mod counts;

pub use block::{Axis, BlockKind, EncoderBlock, Forward, Grid};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Width settings shared by every block of an encoder or decoder.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub hidden: usize,
    pub heads: usize,
    /// Feed-forward intermediate width, `2 * hidden` or `4 * hidden`.
    pub ffn: usize,
    #[serde(default)]
    pub dropout: f64,
}

impl BlockConfig {
    pub fn new(hidden: usize, heads: usize, ffn: usize) -> Result<Self> {
        let cfg = Self {
            hidden,
            heads,
            ffn,
            dropout: 0.0,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.hidden == 0 || self.heads == 0 || self.hidden % self.heads != 0 {
            return Err(Error::Config(format!(
                "hidden size {} must be a positive multiple of the head count {}",
                self.hidden, self.heads
            )));
        }
        if self.ffn != 2 * self.hidden && self.ffn != 4 * self.hidden {
            return Err(Error::Config(format!(
                "feed-forward width {} must be 2x or 4x the hidden size {}",
                self.ffn, self.hidden
            )));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::Config(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.hidden / self.heads
    }

    /// Scalar parameters of one self-attention block.
    pub fn self_block_params(&self) -> usize {
        let (d, f) = (self.hidden, self.ffn);
        // q, k, v, o projections + two layernorms + feed-forward
        4 * (d * d + d) + 2 * 2 * d + (d * f + f) + (f * d + d)
    }

    /// Scalar parameters of one latent-query block with `latents` queries.
    pub fn latent_block_params(&self, latents: usize) -> usize {
        self.self_block_params() + 2 * self.hidden + latents * self.hidden
    }
}

/// `max(1, round(ratio * len))`, rounding halves away from zero.
pub fn latent_len(ratio: f64, len: usize) -> usize {
    ((ratio * len as f64).round() as usize).max(1)
}


#[cfg(test)]
mod block_tests {
    use super::*;
    use crate::numerics::{Array, ParamStore, Tape};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    const D: usize = 8;

    fn setup(kind: BlockKind, seed: u64) -> (ParamStore, EncoderBlock) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let cfg = BlockConfig::new(D, 2, 2 * D).unwrap();
        let block = EncoderBlock::new(&mut store, "blk", &cfg, kind, &mut rng).unwrap();
        // non-trivial layernorm affine parameters
        for (id, name, _) in store.iter().map(|(i, n, v)| (i, n.to_string(), v.clone())).collect::<Vec<_>>() {
            if name.contains("gain") || name.ends_with(".b") || name.contains("bias") {
                for v in store.get_mut(id).data_mut() {
                    *v += rng.gen_range(-0.3..0.3);
                }
            }
        }
        (store, block)
    }

    fn random(shape: &[usize], seed: u64) -> Array {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
    }

    fn run(store: &ParamStore, block: &EncoderBlock, x: &Array, mask: &[bool]) -> Result<(Array, Grid, Tape)> {
        let mut tape = Tape::new();
        let bound = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let s = x.shape();
        let g = Grid {
            x: xv,
            agents: s[0],
            steps: s[1],
            slots: s[2],
            mask: mask.to_vec(),
        };
        let out = block.forward(&mut Forward::new(&mut tape, &bound), &g)?;
        Ok((tape.value(out.x).clone(), out, tape))
    }

    fn p<'a>(store: &'a ParamStore, name: &str) -> &'a Array {
        store.get(store.find(name).unwrap_or_else(|| panic!("{name}")))
    }

    fn ln(x: &[f64], g: &Array, b: &Array) -> Vec<f64> {
        let n = x.len() as f64;
        let mean = x.iter().sum::<f64>() / n;
        let var = x.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        x.iter()
            .enumerate()
            .map(|(i, v)| (v - mean) / (var + 1e-6).sqrt() * g.data()[i] + b.data()[i])
            .collect()
    }

    fn lin(x: &[f64], w: &Array, b: &Array) -> Vec<f64> {
        let (o, i) = (w.shape()[0], w.shape()[1]);
        (0..o)
            .map(|r| b.data()[r] + (0..i).map(|c| w.get(&[r, c]) * x[c]).sum::<f64>())
            .collect()
    }

    /// Explicit-loop pre-layernorm block over one sequence of tokens.
    fn oracle(store: &ParamStore, tokens: &[Vec<f64>], mask: &[bool], heads: usize) -> Vec<Vec<f64>> {
        let g = |n: &str| p(store, &format!("blk.{n}"));
        let normed: Vec<Vec<f64>> = tokens.iter().map(|t| ln(t, g("ln.gain"), g("ln.bias"))).collect();
        let q: Vec<_> = normed.iter().map(|t| lin(t, g("attn.q.w"), g("attn.q.b"))).collect();
        let k: Vec<_> = normed.iter().map(|t| lin(t, g("attn.k.w"), g("attn.k.b"))).collect();
        let v: Vec<_> = normed.iter().map(|t| lin(t, g("attn.v.w"), g("attn.v.b"))).collect();
        let dh = D / heads;
        let mut out = Vec::new();
        for (i, x) in tokens.iter().enumerate() {
            if !mask[i] {
                out.push(x.clone());
                continue;
            }
            let mut att = vec![0.0; D];
            for h in 0..heads {
                let r = h * dh..(h + 1) * dh;
                let scores: Vec<f64> = (0..tokens.len())
                    .map(|j| q[i][r.clone()].iter().zip(&k[j][r.clone()]).map(|(a, b)| a * b).sum::<f64>() / (dh as f64).sqrt())
                    .collect();
                let m = scores.iter().zip(mask).filter(|(_, &ok)| ok).map(|(s, _)| *s).fold(f64::MIN, f64::max);
                let e: Vec<f64> = scores.iter().zip(mask).map(|(s, &ok)| if ok { (s - m).exp() } else { 0.0 }).collect();
                let z: f64 = e.iter().sum();
                for (j, ej) in e.iter().enumerate() {
                    for c in r.clone() {
                        att[c] += ej / z * v[j][c];
                    }
                }
            }
            let o = lin(&att, g("attn.o.w"), g("attn.o.b"));
            let x1: Vec<f64> = x.iter().zip(&o).map(|(a, b)| a + b).collect();
            let h = ln(&x1, g("ffn.ln.gain"), g("ffn.ln.bias"));
            let h: Vec<f64> = lin(&h, g("ffn.up.w"), g("ffn.up.b")).into_iter().map(|v| v.max(0.0)).collect();
            let h = lin(&h, g("ffn.down.w"), g("ffn.down.b"));
            out.push(x1.iter().zip(&h).map(|(a, b)| a + b).collect());
        }
        out
    }

    fn rows(a: &Array, range: std::ops::Range<usize>) -> Vec<Vec<f64>> {
        range.map(|i| a.data()[i * D..(i + 1) * D].to_vec()).collect()
    }

    #[test]
    fn joint_block_matches_loop_oracle() {
        let (store, block) = setup(BlockKind::joint(), 1);
        let x = random(&[1, 1, 3, D], 2);
        for mask in [vec![true; 3], vec![true, false, true]] {
            let (out, g, _) = run(&store, &block, &x, &mask).unwrap();
            assert_eq!((g.steps, g.slots), (1, 3));
            let want = oracle(&store, &rows(&x, 0..3), &mask, 2);
            for (i, w) in want.iter().enumerate() {
                for c in 0..D {
                    assert!((out.data()[i * D + c] - w[c]).abs() < 1e-10);
                }
            }
        }
    }

    #[test]
    fn masked_rows_pass_through_and_masked_keys_are_inert() {
        let (store, block) = setup(BlockKind::joint(), 3);
        let x = random(&[2, 1, 4, D], 4);
        let mask = vec![true, false, true, true, false, true, true, false];
        let (out, _, _) = run(&store, &block, &x, &mask).unwrap();
        let mut y = x.clone();
        for (cell, &m) in mask.iter().enumerate() {
            if !m {
                assert_eq!(&out.data()[cell * D..][..D], &x.data()[cell * D..][..D]);
                y.data_mut()[cell * D..][..D].iter_mut().for_each(|v| *v = 0.0);
            }
        }
        let (out2, _, _) = run(&store, &block, &y, &mask).unwrap();
        for (cell, &m) in mask.iter().enumerate() {
            if m {
                for c in 0..D {
                    assert!((out.data()[cell * D + c] - out2.data()[cell * D + c]).abs() < 1e-9);
                }
            }
        }
    }

    #[test]
    fn single_token_attends_to_itself() {
        let (store, block) = setup(BlockKind::joint(), 5);
        let x = random(&[1, 1, 1, D], 6);
        let (out, _, _) = run(&store, &block, &x, &[true]).unwrap();
        let want = oracle(&store, &rows(&x, 0..1), &[true], 2);
        for c in 0..D {
            assert!((out.data()[c] - want[0][c]).abs() < 1e-12);
        }
    }

    #[test]
    fn identical_tokens_get_identical_outputs() {
        let (store, block) = setup(BlockKind::joint(), 7);
        let one = random(&[1, 1, 1, D], 8);
        let x = Array::concat(&[&one, &one], 2).unwrap();
        let (out, _, _) = run(&store, &block, &x, &[true, true]).unwrap();
        assert_eq!(&out.data()[..D], &out.data()[D..]);
    }

    #[test]
    fn all_masked_agent_is_an_error() {
        let (store, block) = setup(BlockKind::joint(), 9);
        let x = random(&[2, 1, 2, D], 10);
        assert!(run(&store, &block, &x, &[true, true, false, false]).is_err());
    }

    #[test]
    fn temporal_block_with_one_slot_is_joint() {
        let (store, temporal) = setup(BlockKind::along(Axis::Temporal), 11);
        let (_, joint) = setup(BlockKind::joint(), 11);
        let x = random(&[2, 3, 1, D], 12);
        let mask = vec![true, true, false, true, false, true];
        let (a, _, _) = run(&store, &temporal, &x, &mask).unwrap();
        let (b, _, _) = run(&store, &joint, &x.reshape(&[2, 1, 3, D]).unwrap(), &mask).unwrap();
        assert!(a.reshape(&[2, 1, 3, D]).unwrap().max_abs_diff(&b) < 1e-12);
    }

    #[test]
    fn score_counts_per_axis() {
        let x = random(&[1, 3, 4, D], 13);
        let mask = vec![true; 12];
        for (axis, want) in [(Axis::Temporal, 36), (Axis::Spatial, 48), (Axis::Joint, 144)] {
            let (store, block) = setup(BlockKind::along(axis), 14);
            let (_, _, tape) = run(&store, &block, &x, &mask).unwrap();
            assert_eq!(tape.stats().score_elements, want);
        }
        assert_eq!(counts::temporal(1, 3, 4), 36);
        assert_eq!(counts::spatial(1, 3, 4), 48);
        assert_eq!(counts::joint(1, 12), 144);
    }

    #[test]
    fn slot_permutation_commutes_with_temporal_block() {
        let (store, block) = setup(BlockKind::along(Axis::Temporal), 15);
        let x = random(&[1, 3, 4, D], 16);
        let mask: Vec<bool> = (0..12).map(|i| i % 5 != 1).collect();
        let perm = [2, 0, 3, 1];
        let (out, _, _) = run(&store, &block, &x, &mask).unwrap();
        let xp = x.index_select(2, &perm).unwrap();
        let mp: Vec<bool> = (0..3).flat_map(|t| perm.iter().map(move |&s| (t, s))).map(|(t, s)| mask[t * 4 + s]).collect();
        let (outp, _, _) = run(&store, &block, &xp, &mp).unwrap();
        assert!(out.index_select(2, &perm).unwrap().max_abs_diff(&outp) < 1e-12);
    }

    #[test]
    fn fully_masked_slice_passes_through_factorized_block() {
        let (store, block) = setup(BlockKind::along(Axis::Temporal), 17);
        let x = random(&[1, 2, 2, D], 18);
        // slot 1 never valid
        let (out, _, _) = run(&store, &block, &x, &[true, false, true, false]).unwrap();
        for t in 0..2 {
            assert_eq!(&out.data()[(t * 2 + 1) * D..][..D], &x.data()[(t * 2 + 1) * D..][..D]);
        }
    }

    #[test]
    fn latent_block_shapes_and_counts() {
        let n = latent_len(0.25, 12);
        let (store, block) = setup(BlockKind::latent(Axis::Joint, n), 19);
        let x = random(&[2, 3, 4, D], 20);
        let (_, g, tape) = run(&store, &block, &x, &[true; 24]).unwrap();
        assert_eq!((g.steps, g.slots), (1, 3));
        assert!(g.mask.iter().all(|&m| m));
        assert_eq!(tape.stats().score_elements, counts::latent(2, 3, 12));

        let (store, block) = setup(BlockKind::latent(Axis::Joint, latent_len(1.0, 12)), 19);
        let (_, g, _) = run(&store, &block, &x, &[true; 24]).unwrap();
        assert_eq!(g.len(), 12);
    }

    #[test]
    fn latent_block_ignores_masked_inputs() {
        let (store, block) = setup(BlockKind::latent(Axis::Joint, 2), 21);
        let x = random(&[1, 1, 5, D], 22);
        let mask = [true, false, true, false, true];
        let (a, _, _) = run(&store, &block, &x, &mask).unwrap();
        let mut y = x.clone();
        y.data_mut()[D..2 * D].iter_mut().for_each(|v| *v = 1e3);
        y.data_mut()[3 * D..4 * D].iter_mut().for_each(|v| *v = -7.0);
        let (b, _, _) = run(&store, &block, &y, &mask).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn factorized_latent_blocks() {
        let x = random(&[1, 11, 200, D], 23);
        let mask = vec![true; 11 * 200];
        let (store, t_block) = setup(BlockKind::latent(Axis::Temporal, 4), 24);
        let (_, g, tape) = run(&store, &t_block, &x, &mask).unwrap();
        assert_eq!((g.steps, g.slots), (4, 200));
        assert_eq!(tape.stats().score_elements, counts::latent(200, 4, 11));
        let (store2, s_block) = setup(BlockKind::latent(Axis::Spatial, 192), 25);
        let mut tape = Tape::new();
        let b1 = store.bind(&mut tape);
        let xv = tape.constant(x.clone());
        let grid = Grid {
            x: xv,
            agents: 1,
            steps: 11,
            slots: 200,
            mask,
        };
        let mid = t_block.forward(&mut Forward::new(&mut tape, &b1), &grid).unwrap();
        let b2 = store2.bind(&mut tape);
        let before = tape.stats().score_elements;
        let out = s_block.forward(&mut Forward::new(&mut tape, &b2), &mid).unwrap();
        assert_eq!((out.steps, out.slots), (4, 192));
        assert_eq!(tape.stats().score_elements - before, counts::latent(4, 192, 200));
        assert!(counts::latent(4, 192, 200) < counts::spatial(1, 4, 200));

        // temporal latents equal to T keep the shape
        let (store, block) = setup(BlockKind::latent(Axis::Temporal, 3), 26);
        let (_, g, _) = run(&store, &block, &random(&[1, 3, 2, D], 27), &[true; 6]).unwrap();
        assert_eq!((g.steps, g.slots), (3, 2));
    }

    #[test]
    fn parameter_count_formula() {
        let cfg = BlockConfig::new(D, 2, 4 * D).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut store = ParamStore::new();
        EncoderBlock::new(&mut store, "a", &cfg, BlockKind::joint(), &mut rng).unwrap();
        assert_eq!(store.count(), cfg.self_block_params());
        let mut store = ParamStore::new();
        EncoderBlock::new(&mut store, "a", &cfg, BlockKind::latent(Axis::Joint, 5), &mut rng).unwrap();
        assert_eq!(store.count(), cfg.latent_block_params(5));
    }
}
