//! Central finite-difference checks of every tape operation and of the full
//! training loss.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use motionfuse::attention::Forward;
use motionfuse::fusion::InputShape;
use motionfuse::model::{Model, ModelConfig};
use motionfuse::numerics::gradcheck::{compare_within, numeric_gradients, relative_error, roundoff_floor};
use motionfuse::numerics::{Array, Tape, Var};
use motionfuse::objective::{batch_gradients, loss, Dataset};
use motionfuse::scene::Scene;

use super::fixtures::{random, tiny_scenes};

#[derive(Debug, Clone)]
pub struct CaseResult {
    pub name: String,
    pub checked: usize,
    /// Largest relative error among elements above the absolute floor.
    pub worst: f64,
    pub failures: usize,
}

impl CaseResult {
    pub fn ok(&self) -> bool {
        self.failures == 0 && self.checked > 0
    }
}

fn summarize(name: &str, inputs: &[Array], analytic: &[Array], f: &mut dyn FnMut(&[Array]) -> f64) -> CaseResult {
    let floor = roundoff_floor(f(inputs));
    let numeric = numeric_gradients(inputs, f);
    let mut worst: f64 = 0.0;
    for (a, n) in analytic.iter().zip(&numeric) {
        for (&x, &y) in a.data().iter().zip(n.data()) {
            if (x - y).abs() > floor {
                worst = worst.max(relative_error(x, y));
            }
        }
    }
    // the verdict uses the library's own tolerance rule
    let failures = compare_within(inputs, analytic, f, floor).len();
    CaseResult {
        name: name.to_string(),
        checked: inputs.iter().map(Array::len).sum(),
        worst,
        failures,
    }
}

type Build<'a> = &'a dyn Fn(&mut Tape, &[Var]) -> Var;

/// Checks `build` on `inputs` through the scalar `sum(out * W)` with a random `W`.
pub fn check_op(name: &str, inputs: Vec<Array>, build: Build, rng: &mut ChaCha8Rng) -> CaseResult {
    let mut tape = Tape::new();
    let vars: Vec<Var> = inputs.iter().map(|a| tape.leaf(a.clone())).collect();
    let out = build(&mut tape, &vars);
    let w = random(tape.shape(out), rng, 1.0);
    let weighted = tape.mul_const(out, w.data().to_vec()).unwrap();
    let total = tape.sum(weighted).unwrap();
    let grads = tape.backward(total).unwrap();
    let analytic: Vec<Array> = vars.iter().map(|&v| grads.get(v)).collect();
    let mut f = |xs: &[Array]| {
        let mut t = Tape::new();
        let vs: Vec<Var> = xs.iter().map(|a| t.leaf(a.clone())).collect();
        let o = build(&mut t, &vs);
        t.value(o).data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    summarize(name, &inputs, &analytic, &mut f)
}

/// Values at least `gap` away from every point in `kinks`.
fn away_from(shape: &[usize], rng: &mut ChaCha8Rng, kinks: &[f64], gap: f64) -> Array {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v = rng.gen_range(-1.0..1.0);
            if kinks.iter().all(|k| (v - k).abs() > gap) {
                break v;
            }
        })
        .collect();
    Array::new(shape.to_vec(), data).unwrap()
}

/// Every tape operation on one random instance drawn from `seed`.
pub fn op_suite(seed: u64) -> Vec<CaseResult> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let r = &mut rng;
    let mut out = Vec::new();
    let a = r.gen_range(1..=2);
    let t = r.gen_range(1..=4);
    let s = r.gen_range(1..=4);
    let d = 2 * r.gen_range(1..=2);

    let x = random(&[a, t, d], r, 1.0);
    let y = random(&[a, t, d], r, 1.0);
    out.push(check_op("add", vec![x.clone(), y.clone()], &|tp, v| tp.add(v[0], v[1]).unwrap(), r));
    out.push(check_op("sub", vec![x.clone(), y.clone()], &|tp, v| tp.sub(v[0], v[1]).unwrap(), r));
    out.push(check_op("mul", vec![x.clone(), y.clone()], &|tp, v| tp.mul(v[0], v[1]).unwrap(), r));
    let c = r.gen_range(-2.0..2.0);
    out.push(check_op("scale", vec![x.clone()], &|tp, v| tp.scale(v[0], c).unwrap(), r));
    let consts = random(&[a, t, d], r, 2.0).data().to_vec();
    out.push(check_op("mul_const", vec![x.clone()], &|tp, v| tp.mul_const(v[0], consts.clone()).unwrap(), r));
    let rows = random(&[a * t], r, 2.0).data().to_vec();
    out.push(check_op("scale_rows", vec![x.clone()], &|tp, v| tp.scale_rows(v[0], rows.clone()).unwrap(), r));

    let m1 = random(&[t, d], r, 1.0);
    let m2 = random(&[d, s], r, 1.0);
    out.push(check_op("matmul", vec![m1, m2], &|tp, v| tp.matmul(v[0], v[1]).unwrap(), r));
    let w = random(&[s, d], r, 1.0);
    let b = random(&[s], r, 1.0);
    out.push(check_op("linear", vec![x.clone(), w.clone(), b], &|tp, v| tp.linear(v[0], v[1], Some(v[2])).unwrap(), r));
    out.push(check_op("linear_no_bias", vec![x.clone(), w], &|tp, v| tp.linear(v[0], v[1], None).unwrap(), r));

    out.push(check_op("relu", vec![away_from(&[a, t, d], r, &[0.0], 0.01)], &|tp, v| tp.relu(v[0]).unwrap(), r));
    out.push(check_op(
        "clamp",
        vec![away_from(&[a, t, d], r, &[-0.5, 0.5], 0.01)],
        &|tp, v| tp.clamp(v[0], -0.5, 0.5).unwrap(),
        r,
    ));
    out.push(check_op("sum", vec![x.clone()], &|tp, v| tp.sum(v[0]).unwrap(), r));
    out.push(check_op("mean", vec![x.clone()], &|tp, v| tp.mean(v[0]).unwrap(), r));
    out.push(check_op("softmax", vec![random(&[a, t, d], r, 2.0)], &|tp, v| tp.softmax(v[0]).unwrap(), r));
    out.push(check_op("log_softmax", vec![random(&[a, t, d], r, 2.0)], &|tp, v| tp.log_softmax(v[0]).unwrap(), r));
    out.push(check_op(
        "layernorm",
        vec![random(&[a, t, d + 1], r, 1.5), random(&[d + 1], r, 1.5), random(&[d + 1], r, 1.0)],
        &|tp, v| tp.layernorm(v[0], v[1], v[2]).unwrap(),
        r,
    ));

    // attention: B sequences, Lq queries, Lk keys, some keys masked
    let (lq, lk) = (r.gen_range(1..=4), r.gen_range(1..=4));
    let mut mask: Vec<bool> = (0..a * lk).map(|_| r.gen_bool(0.7)).collect();
    for bi in 0..a {
        mask[bi * lk + r.gen_range(0..lk)] = true;
    }
    let (q, k, vv) = (random(&[a, lq, d], r, 1.0), random(&[a, lk, d], r, 1.0), random(&[a, lk, d], r, 1.0));
    let m = mask.clone();
    out.push(check_op(
        "attention",
        vec![q.clone(), k.clone(), vv.clone()],
        &|tp, v| tp.attention(v[0], v[1], v[2], &m, 2).unwrap(),
        r,
    ));
    let single = mask.clone();
    out.push(check_op(
        "attention_one_head",
        vec![q, k, vv],
        &|tp, v| tp.attention(v[0], v[1], v[2], &single, 1).unwrap(),
        r,
    ));

    out.push(check_op("reshape", vec![x.clone()], &|tp, v| tp.reshape(v[0], &[a * t, d]).unwrap(), r));
    out.push(check_op("permute", vec![x.clone()], &|tp, v| tp.permute(v[0], &[2, 0, 1]).unwrap(), r));
    out.push(check_op(
        "concat",
        vec![x.clone(), random(&[a, s, d], r, 1.0)],
        &|tp, v| tp.concat(&[v[0], v[1]], 1).unwrap(),
        r,
    ));
    let picks: Vec<usize> = (0..t + 2).map(|_| r.gen_range(0..t)).collect();
    out.push(check_op("index_select", vec![x.clone()], &|tp, v| tp.index_select(v[0], 1, &picks).unwrap(), r));
    out.push(check_op("broadcast_leading", vec![random(&[t, d], r, 1.0)], &|tp, v| tp.broadcast_leading(v[0], a + 1).unwrap(), r));
    let wts: Vec<f64> = (0..a * t * s).map(|_| if r.gen_bool(0.2) { 0.0 } else { r.gen_range(-1.0..1.0) }).collect();
    out.push(check_op(
        "weighted_time_sum",
        vec![random(&[a, t, s, d], r, 1.0)],
        &|tp, v| tp.weighted_time_sum(v[0], wts.clone()).unwrap(),
        r,
    ));
    let target = random(&[a * 2, t, 2], r, 2.0);
    out.push(check_op(
        "gaussian_log_prob",
        vec![random(&[a * 2, t, 2], r, 2.0), random(&[a * 2, t, 2], r, 1.0)],
        &|tp, v| tp.gaussian_log_prob(v[0], v[1], &target).unwrap(),
        r,
    ));
    out
}

/// Summed training loss of every ensemble member, forward only.
pub fn forward_loss(model: &Model, batch: &Scene) -> f64 {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut f = Forward::new(&mut tape, &bound);
    let outs = model.forward(&mut f, batch).unwrap();
    let tape = f.tape;
    outs.iter()
        .map(|o| {
            let terms = loss(tape, o, &batch.future).unwrap();
            tape.value(terms.total).item()
        })
        .sum()
}

/// Gradient of the full loss with respect to every model parameter, on a
/// batch of at most two agents with `T, S <= 4`.
pub fn model_case(name: &str, cfg: &ModelConfig, seed: u64) -> CaseResult {
    let scenes = tiny_scenes(seed, 1);
    let data = Dataset::from_scenes(&scenes).unwrap();
    let rows: Vec<usize> = (0..data.len().min(2)).collect();
    let batch = data.batch(&rows).unwrap();
    let model = Model::new(cfg, InputShape::of(&scenes[0]), seed).unwrap();
    let (_, analytic) = batch_gradients(&model, &batch, None).unwrap();
    let inputs: Vec<Array> = model.params.iter().map(|(_, _, a)| a.clone()).collect();
    let mut m = model.clone();
    let mut f = |xs: &[Array]| {
        for (dst, src) in m.params.values_mut().iter_mut().zip(xs) {
            dst.data_mut().copy_from_slice(src.data());
        }
        forward_loss(&m, &batch)
    };
    summarize(name, &inputs, &analytic, &mut f)
}
