//! Gaussian-mixture trajectory decoder: learned mode queries cross-attend the
//! scene encoding and two heads emit a logit and a per-step diagonal Gaussian.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::block::{register_layernorm, FeedForward, Mha};
use crate::attention::{BlockConfig, Forward};
use crate::error::{Error, Result};
use crate::fusion::SceneEncoding;
use crate::numerics::{Array, ParamId, ParamStore, Var};

/// Bounds applied to predicted log standard deviations.
pub const LOGSTD_MIN: f64 = -5.0;
pub const LOGSTD_MAX: f64 = 5.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecoderConfig {
    pub block: BlockConfig,
    pub depth: usize,
    /// Number of mixture components `k`.
    pub modes: usize,
    pub future_steps: usize,
    /// Decoders sharing one encoder.
    #[serde(default = "one")]
    pub ensemble: usize,
    /// Start both heads at zero: uniform mixture, zero means, unit deviations.
    #[serde(default)]
    pub zero_init_heads: bool,
}

fn one() -> usize {
    1
}

impl DecoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.depth == 0 {
            return Err(Error::Config("decoder depth must be at least 1".into()));
        }
        if self.modes == 0 || self.future_steps == 0 || self.ensemble == 0 {
            return Err(Error::Config("modes, future steps and ensemble size must be positive".into()));
        }
        Ok(())
    }
}

/// Mixture parameters as plain arrays.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MixtureTrajectory {
    /// `[A, k]`
    pub logits: Array,
    /// `[A, k, T_f, 2]`
    pub means: Array,
    /// `[A, k, T_f, 2]`
    pub logstd: Array,
}

impl MixtureTrajectory {
    pub fn agents(&self) -> usize {
        self.logits.shape()[0]
    }

    pub fn modes(&self) -> usize {
        self.logits.shape()[1]
    }

    pub fn steps(&self) -> usize {
        self.means.shape()[2]
    }

    /// Mixture probabilities `[A, k]`.
    pub fn probabilities(&self) -> Array {
        self.logits.softmax(None).expect("logits are finite")
    }

    /// Mode `i` of agent `a` as `T_f` points.
    pub fn mean_of(&self, a: usize, i: usize) -> Vec<[f64; 2]> {
        let t = self.steps();
        let start = (a * self.modes() + i) * t * 2;
        self.means.data()[start..start + t * 2].chunks(2).map(|p| [p[0], p[1]]).collect()
    }

    /// Probabilities and mean trajectories of agent `a`.
    pub fn agent_modes(&self, a: usize) -> Modes {
        let k = self.modes();
        let p = self.probabilities();
        Modes {
            probs: p.data()[a * k..(a + 1) * k].to_vec(),
            trajs: (0..k).map(|i| self.mean_of(a, i)).collect(),
        }
    }
}

/// Weighted candidate trajectories of one agent.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Modes {
    pub probs: Vec<f64>,
    pub trajs: Vec<Vec<[f64; 2]>>,
}

impl Modes {
    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }

    /// Mode indices by descending probability, ties by index.
    pub fn ranked(&self) -> Vec<usize> {
        let mut order: Vec<usize> = (0..self.len()).collect();
        order.sort_by(|&a, &b| self.probs[b].total_cmp(&self.probs[a]).then(a.cmp(&b)));
        order
    }

    /// The `k` most likely modes, most likely first.
    pub fn top(&self, k: usize) -> Modes {
        let order = self.ranked();
        let keep = &order[..k.min(order.len())];
        Modes {
            probs: keep.iter().map(|&i| self.probs[i]).collect(),
            trajs: keep.iter().map(|&i| self.trajs[i].clone()).collect(),
        }
    }
}

/// Sum over steps of the diagonal Gaussian log density of `gt` under the given
/// mode, one value per agent.
pub fn mixture_log_prob(mix: &MixtureTrajectory, gt: &Array, modes: &[usize]) -> Result<Vec<f64>> {
    let (a, k, t) = (mix.agents(), mix.modes(), mix.steps());
    if gt.shape() != [a, t, 2] || modes.len() != a {
        return Err(Error::Data(format!(
            "ground truth {:?} does not match mixture [{a}, {t}, 2]",
            gt.shape()
        )));
    }
    let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
    let mut out = Vec::with_capacity(a);
    for (ai, &i) in modes.iter().enumerate() {
        if i >= k {
            return Err(Error::Data(format!("mode {i} out of range for k = {k}")));
        }
        let base = (ai * k + i) * t * 2;
        let mut lp = 0.0;
        for j in 0..t * 2 {
            let mu = mix.means.data()[base + j];
            let ls = mix.logstd.data()[base + j];
            let z = (gt.data()[ai * t * 2 + j] - mu) * (-ls).exp();
            lp += -0.5 * z * z - ls - half_log_2pi;
        }
        out.push(lp);
    }
    Ok(out)
}

/// Decoder outputs on a tape.
#[derive(Debug, Clone, Copy)]
pub struct MixtureVars {
    /// `[A, k]`
    pub logits: Var,
    /// `[A, k, T_f, 2]`
    pub means: Var,
    /// `[A, k, T_f, 2]`, clamped
    pub logstd: Var,
}

impl MixtureVars {
    pub fn values(&self, f: &Forward) -> MixtureTrajectory {
        MixtureTrajectory {
            logits: f.tape.value(self.logits).clone(),
            means: f.tape.value(self.means).clone(),
            logstd: f.tape.value(self.logstd).clone(),
        }
    }
}

#[derive(Debug, Clone)]
struct DecoderBlock {
    ln_self: (ParamId, ParamId),
    self_attn: Mha,
    ln_cross: (ParamId, ParamId),
    ln_memory: (ParamId, ParamId),
    cross: Mha,
    ffn: FeedForward,
}

impl DecoderBlock {
    fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, rng: &mut ChaCha8Rng) -> Self {
        let d = cfg.hidden;
        Self {
            ln_self: register_layernorm(store, &format!("{name}.ln_self"), d),
            self_attn: Mha::new(store, &format!("{name}.self_attn"), d, cfg.heads, rng),
            ln_cross: register_layernorm(store, &format!("{name}.ln_cross"), d),
            ln_memory: register_layernorm(store, &format!("{name}.ln_memory"), d),
            cross: Mha::new(store, &format!("{name}.cross_attn"), d, cfg.heads, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn, rng),
        }
    }

    fn forward(&self, f: &mut Forward, x: Var, memory: Var, memory_mask: &[bool], dropout: f64) -> Result<Var> {
        let (a, k) = (f.tape.shape(x)[0], f.tape.shape(x)[1]);
        let h = f.layernorm(x, self.ln_self)?;
        let h = self.self_attn.forward(f, h, h, &vec![true; a * k])?;
        let h = f.dropout(h, dropout)?;
        let x = f.tape.add(x, h)?;
        let h = f.layernorm(x, self.ln_cross)?;
        let m = f.layernorm(memory, self.ln_memory)?;
        let h = self.cross.forward(f, h, m, memory_mask)?;
        let h = f.dropout(h, dropout)?;
        let x = f.tape.add(x, h)?;
        self.ffn.residual(f, x, None, dropout)
    }
}

/// One mixture decoder with its query bank and heads.
#[derive(Debug, Clone)]
pub struct TrajectoryDecoder {
    cfg: DecoderConfig,
    /// Learned mode queries `[k, D]`.
    pub queries: ParamId,
    memory_proj: Option<(ParamId, ParamId)>,
    blocks: Vec<DecoderBlock>,
    logit_head: (ParamId, ParamId),
    traj_head: (ParamId, ParamId),
}

impl TrajectoryDecoder {
    /// `memory_width` is the encoder width; a projection is added when it differs.
    pub fn new(store: &mut ParamStore, name: &str, cfg: &DecoderConfig, memory_width: usize, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.block.hidden;
        let queries = store.uniform(format!("{name}.queries"), &[cfg.modes, d], 1.0, rng);
        let memory_proj = (memory_width != d).then(|| {
            (
                store.glorot(format!("{name}.memory_proj.w"), d, memory_width, rng),
                store.zeros(format!("{name}.memory_proj.b"), &[d]),
            )
        });
        let blocks = (0..cfg.depth)
            .map(|i| DecoderBlock::new(store, &format!("{name}.block.{i}"), &cfg.block, rng))
            .collect();
        let out = 4 * cfg.future_steps;
        let (logit_head, traj_head) = if cfg.zero_init_heads {
            (
                (store.zeros(format!("{name}.logit.w"), &[1, d]), store.zeros(format!("{name}.logit.b"), &[1])),
                (store.zeros(format!("{name}.traj.w"), &[out, d]), store.zeros(format!("{name}.traj.b"), &[out])),
            )
        } else {
            (
                (store.glorot(format!("{name}.logit.w"), 1, d, rng), store.zeros(format!("{name}.logit.b"), &[1])),
                (store.glorot(format!("{name}.traj.w"), out, d, rng), store.zeros(format!("{name}.traj.b"), &[out])),
            )
        };
        Ok(Self {
            cfg: cfg.clone(),
            queries,
            memory_proj,
            blocks,
            logit_head,
            traj_head,
        })
    }

    pub fn config(&self) -> &DecoderConfig {
        &self.cfg
    }

    pub fn decode(&self, f: &mut Forward, enc: &SceneEncoding) -> Result<MixtureVars> {
        let a = enc.agents;
        if enc.len == 0 {
            return Err(Error::Data("cannot decode an empty scene encoding".into()));
        }
        for ai in 0..a {
            if !enc.mask[ai * enc.len..(ai + 1) * enc.len].iter().any(|&m| m) {
                return Err(Error::Data(format!("agent {ai} has an empty scene encoding")));
            }
        }
        let memory = match self.memory_proj {
            Some(p) => f.linear(enc.z, p)?,
            None => enc.z,
        };
        let (k, t) = (self.cfg.modes, self.cfg.future_steps);
        let bank = f.p(self.queries);
        let mut x = f.tape.broadcast_leading(bank, a)?;
        for b in &self.blocks {
            x = b.forward(f, x, memory, &enc.mask, self.cfg.block.dropout)?;
        }
        let logits = f.linear(x, self.logit_head)?;
        let logits = f.tape.reshape(logits, &[a, k])?;
        let traj = f.linear(x, self.traj_head)?;
        let traj = f.tape.reshape(traj, &[a, k, t, 4])?;
        let means = f.tape.index_select(traj, 3, &[0, 1])?;
        let logstd = f.tape.index_select(traj, 3, &[2, 3])?;
        let logstd = f.tape.clamp(logstd, LOGSTD_MIN, LOGSTD_MAX)?;
        Ok(MixtureVars { logits, means, logstd })
    }
}

/// One line of a prediction file: the mixture of one agent in one scene.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictionRecord {
    pub scene_id: String,
    /// Agent row in the scene file.
    pub agent: usize,
    pub k: usize,
    pub probabilities: Vec<f64>,
    /// `[k, T_f, 2]`
    pub means: Array,
    /// `[k, T_f, 2]`, absent after aggregation.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub logstd: Option<Array>,
    /// File name of the run manifest that produced the record.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub manifest: Option<String>,
}

impl PredictionRecord {
    pub fn from_mixture(scene_id: &str, agent: usize, mix: &MixtureTrajectory, row: usize) -> Self {
        let (k, t) = (mix.modes(), mix.steps());
        let per = k * t * 2;
        let slice = |a: &Array| Array::new(vec![k, t, 2], a.data()[row * per..(row + 1) * per].to_vec()).expect("mode block");
        Self {
            scene_id: scene_id.to_string(),
            agent,
            k,
            probabilities: mix.agent_modes(row).probs,
            means: slice(&mix.means),
            logstd: Some(slice(&mix.logstd)),
            manifest: None,
        }
    }

    pub fn from_modes(scene_id: &str, agent: usize, modes: &Modes) -> Self {
        let k = modes.len();
        let t = modes.trajs.first().map_or(0, Vec::len);
        let data = modes.trajs.iter().flatten().flat_map(|p| [p[0], p[1]]).collect();
        Self {
            scene_id: scene_id.to_string(),
            agent,
            k,
            probabilities: modes.probs.clone(),
            means: Array::new(vec![k, t, 2], data).expect("mode block"),
            logstd: None,
            manifest: None,
        }
    }

    pub fn modes(&self) -> Result<Modes> {
        let s = self.means.shape();
        if s.len() != 3 || s[0] != self.k || s[2] != 2 || self.probabilities.len() != self.k {
            return Err(Error::Data(format!(
                "prediction for {} agent {} has inconsistent shapes",
                self.scene_id, self.agent
            )));
        }
        let t = s[1];
        Ok(Modes {
            probs: self.probabilities.clone(),
            trajs: (0..self.k)
                .map(|i| self.means.data()[i * t * 2..(i + 1) * t * 2].chunks(2).map(|p| [p[0], p[1]]).collect())
                .collect(),
        })
    }
}

#[cfg(test)]
mod tests;
