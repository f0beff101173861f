//! Winner-take-all mixture loss, AdamW with linear decay, and the training loop.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::Forward;
use crate::decoder::{MixtureTrajectory, MixtureVars};
use crate::error::{Error, Result};
use crate::model::Model;
use crate::numerics::{Array, ParamStore, Tape, Var};
use crate::scene::Scene;


/// Index of the mode whose mean is closest to `gt` on average over steps,
/// one per agent. Ties go to the lowest index.
pub fn closest_mode(mix: &MixtureTrajectory, gt: &Array) -> Result<Vec<usize>> {
    let (a, k, t) = (mix.agents(), mix.modes(), mix.steps());
    if gt.shape() != [a, t, 2] {
        return Err(Error::Data(format!(
            "ground truth {:?} does not match mixture [{a}, {t}, 2]",
            gt.shape()
        )));
    }
    let g = gt.data();
    let m = mix.means.data();
    let mut out = Vec::with_capacity(a);
    for ai in 0..a {
        let mut best = (0, f64::INFINITY);
        for i in 0..k {
            let base = (ai * k + i) * t * 2;
            let mut d = 0.0;
            for s in 0..t {
                let dx = m[base + 2 * s] - g[(ai * t + s) * 2];
                let dy = m[base + 2 * s + 1] - g[(ai * t + s) * 2 + 1];
                d += dx.hypot(dy);
            }
            d /= t as f64;
            if d < best.1 {
                best = (i, d);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}

/// Loss nodes of one mixture. `total = classification + regression`.
#[derive(Debug, Clone)]
pub struct LossTerms {
    pub total: Var,
    pub classification: Var,
    pub regression: Var,
    /// Selected mode per agent.
    pub winners: Vec<usize>,
}

/// Negative log-likelihood of the closest mode plus cross-entropy towards it,
/// averaged over agents. The selection itself is not differentiated.
pub fn loss(tape: &mut Tape, mix: &MixtureVars, gt: &Array) -> Result<LossTerms> {
    let values = MixtureTrajectory {
        logits: tape.value(mix.logits).clone(),
        means: tape.value(mix.means).clone(),
        logstd: tape.value(mix.logstd).clone(),
    };
    let winners = closest_mode(&values, gt)?;
    let (a, k, t) = (values.agents(), values.modes(), values.steps());
    let rows: Vec<usize> = winners.iter().enumerate().map(|(ai, &i)| ai * k + i).collect();

    let logp = tape.log_softmax(mix.logits)?;
    let logp = tape.reshape(logp, &[a * k])?;
    let picked = tape.index_select(logp, 0, &rows)?;
    let cls = tape.mean(picked)?;
    let classification = tape.scale(cls, -1.0)?;

    let means = tape.reshape(mix.means, &[a * k, t, 2])?;
    let logstd = tape.reshape(mix.logstd, &[a * k, t, 2])?;
    let means = tape.index_select(means, 0, &rows)?;
    let logstd = tape.index_select(logstd, 0, &rows)?;
    let lp = tape.gaussian_log_prob(means, logstd, gt)?;
    let reg = tape.mean(lp)?;
    let regression = tape.scale(reg, -1.0)?;

    let total = tape.add(classification, regression)?;
    Ok(LossTerms {
        total,
        classification,
        regression,
        winners,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Decay {
    LinearToZero,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub weight_decay: f64,
    pub decay: Decay,
    pub beta1: f64,
    pub beta2: f64,
    pub epsilon: f64,
    pub seed: u64,
    /// Record the loss every this many steps (and at the last step).
    pub log_every: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            steps: 2000,
            batch_size: 16,
            learning_rate: 2e-4,
            weight_decay: 0.01,
            decay: Decay::LinearToZero,
            beta1: 0.9,
            beta2: 0.999,
            epsilon: 1e-8,
            seed: 0,
            log_every: 50,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.steps == 0 || self.batch_size == 0 || self.log_every == 0 {
            return Err(Error::Config("steps, batch size and log interval must be positive".into()));
        }
        if !(self.learning_rate >= 0.0) || !(self.weight_decay >= 0.0) {
            return Err(Error::Config("learning rate and weight decay must be non-negative".into()));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.epsilon > 0.0) {
            return Err(Error::Config("betas must lie in [0, 1) and epsilon must be positive".into()));
        }
        Ok(())
    }

    /// Learning rate used for the update at step `t` (0-based).
    pub fn lr(&self, t: usize) -> f64 {
        match self.decay {
            Decay::LinearToZero => self.learning_rate * (1.0 - t as f64 / self.steps as f64).max(0.0),
        }
    }
}

/// Adaptive moments with decoupled weight decay.
#[derive(Debug, Clone)]
pub struct AdamW {
    beta1: f64,
    beta2: f64,
    epsilon: f64,
    weight_decay: f64,
    m: Vec<Vec<f64>>,
    v: Vec<Vec<f64>>,
    t: i32,
}

impl AdamW {
    pub fn new(params: &ParamStore, cfg: &TrainConfig) -> Self {
        let zeros: Vec<Vec<f64>> = params.iter().map(|(_, _, a)| vec![0.0; a.len()]).collect();
        Self {
            beta1: cfg.beta1,
            beta2: cfg.beta2,
            epsilon: cfg.epsilon,
            weight_decay: cfg.weight_decay,
            m: zeros.clone(),
            v: zeros,
            t: 0,
        }
    }

    /// One update with learning rate `lr`; `grads[i]` belongs to parameter `i`.
    pub fn step(&mut self, params: &mut ParamStore, grads: &[Array], lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        for (i, p) in params.values_mut().iter_mut().enumerate() {
            let g = grads[i].data();
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            for (j, w) in p.data_mut().iter_mut().enumerate() {
                m[j] = self.beta1 * m[j] + (1.0 - self.beta1) * g[j];
                v[j] = self.beta2 * v[j] + (1.0 - self.beta2) * g[j] * g[j];
                let update = (m[j] / c1) / ((v[j] / c2).sqrt() + self.epsilon);
                *w -= lr * (update + self.weight_decay * *w);
            }
        }
    }
}

/// Training rows: each modeled agent of each scene in its own frame.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub rows: Vec<Scene>,
}

impl Dataset {
    pub fn from_scenes(scenes: &[Scene]) -> Result<Self> {
        let mut rows = Vec::new();
        for s in scenes {
            for a in s.modeled_agents() {
                rows.push(s.agent_view(a)?);
            }
        }
        if rows.is_empty() {
            return Err(Error::Data("dataset has no modeled agents".into()));
        }
        Ok(Self { rows })
    }

    pub fn len(&self) -> usize {
        self.rows.len()
    }

    pub fn is_empty(&self) -> bool {
        self.rows.is_empty()
    }

    pub fn batch(&self, indices: &[usize]) -> Result<Scene> {
        Scene::stack(&indices.iter().map(|&i| self.rows[i].clone()).collect::<Vec<_>>())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LossPoint {
    pub step: usize,
    pub lr: f64,
    pub total: f64,
    pub classification: f64,
    pub regression: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub curve: Vec<LossPoint>,
}

/// Loss and gradients of one batch; ensemble members' losses are summed.
pub fn batch_gradients(model: &Model, batch: &Scene, rng: Option<&mut ChaCha8Rng>) -> Result<(LossPoint, Vec<Array>)> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut f = Forward::new(&mut tape, &bound);
    f.rng = rng;
    let outs = model.forward(&mut f, batch)?;
    let tape = f.tape;
    let mut terms = Vec::with_capacity(outs.len());
    for out in &outs {
        terms.push(loss(tape, out, &batch.future)?);
    }
    let mut total = terms[0].total;
    for t in &terms[1..] {
        total = tape.add(total, t.total)?;
    }
    let scalar = |tape: &Tape, vars: &mut dyn Iterator<Item = Var>| vars.map(|v| tape.value(v).item()).sum::<f64>();
    let point = LossPoint {
        step: 0,
        lr: 0.0,
        total: tape.value(total).item(),
        classification: scalar(tape, &mut terms.iter().map(|t| t.classification)),
        regression: scalar(tape, &mut terms.iter().map(|t| t.regression)),
    };
    let grads = tape.backward(total)?;
    let g = model.params.iter().map(|(id, _, _)| grads.get(bound.var(id))).collect();
    Ok((point, g))
}

/// Deterministic minibatch training. Batches are drawn from a per-epoch
/// shuffle seeded by `cfg.seed`.
pub fn train(model: &mut Model, data: &Dataset, cfg: &TrainConfig) -> Result<TrainReport> {
    train_with(model, data, cfg, &mut |_| {})
}

/// As [`train`], calling `on_log` with every recorded loss point.
pub fn train_with(
    model: &mut Model,
    data: &Dataset,
    cfg: &TrainConfig,
    on_log: &mut dyn FnMut(&LossPoint),
) -> Result<TrainReport> {
    cfg.validate()?;
    if data.is_empty() {
        return Err(Error::Data("cannot train on an empty dataset".into()));
    }
    let mut order_rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut dropout_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x9e37_79b9_7f4a_7c15);
    let mut opt = AdamW::new(&model.params, cfg);
    let mut order: Vec<usize> = Vec::new();
    let mut cursor = 0;
    let mut curve = Vec::new();
    for step in 0..cfg.steps {
        let size = cfg.batch_size.min(data.len());
        if cursor + size > order.len() {
            order = (0..data.len()).collect();
            order.shuffle(&mut order_rng);
            cursor = 0;
        }
        let batch = data.batch(&order[cursor..cursor + size])?;
        cursor += size;
        let diverged = |reason: String| Error::Diverged { step, reason };
        let (mut point, grads) = match batch_gradients(model, &batch, Some(&mut dropout_rng)) {
            Ok(r) => r,
            Err(Error::Numeric(e)) => return Err(diverged(e.to_string())),
            Err(e) => return Err(e),
        };
        if !point.total.is_finite() {
            return Err(diverged(format!("loss is {}", point.total)));
        }
        if grads.iter().any(|g| !g.is_finite()) {
            return Err(diverged("non-finite gradient".into()));
        }
        let lr = cfg.lr(step);
        opt.step(&mut model.params, &grads, lr);
        if step % cfg.log_every == 0 || step + 1 == cfg.steps {
            point.step = step;
            point.lr = lr;
            on_log(&point);
            curve.push(point);
        }
    }
    Ok(TrainReport { curve })
}
