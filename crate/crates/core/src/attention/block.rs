use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::BlockConfig;
use crate::error::{Error, Result};
use crate::numerics::{Bound, ParamId, ParamStore, Tape, Var};

/// Which cells attend to each other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Axis {
    Joint,
    Temporal,
    Spatial,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BlockKind {
    pub axis: Axis,
    /// Number of learned queries replacing the attended axis, if any.
    pub latents: Option<usize>,
}

impl BlockKind {
    pub fn joint() -> Self {
        Self {
            axis: Axis::Joint,
            latents: None,
        }
    }

    pub fn along(axis: Axis) -> Self {
        Self { axis, latents: None }
    }

    pub fn latent(axis: Axis, latents: usize) -> Self {
        Self {
            axis,
            latents: Some(latents),
        }
    }
}

/// Tape state threaded through a forward pass.
pub struct Forward<'a> {
    pub tape: &'a mut Tape,
    pub params: &'a Bound,
    /// Present only while training with dropout.
    pub rng: Option<&'a mut ChaCha8Rng>,
}

impl<'a> Forward<'a> {
    pub fn new(tape: &'a mut Tape, params: &'a Bound) -> Self {
        Self { tape, params, rng: None }
    }

    pub fn p(&self, id: ParamId) -> Var {
        self.params[id]
    }

    pub fn dropout(&mut self, x: Var, rate: f64) -> Result<Var> {
        let Some(rng) = self.rng.as_deref_mut() else {
            return Ok(x);
        };
        if rate <= 0.0 {
            return Ok(x);
        }
        let n = self.tape.value(x).len();
        let keep = 1.0 / (1.0 - rate);
        let m = (0..n).map(|_| if rng.gen::<f64>() < rate { 0.0 } else { keep }).collect();
        Ok(self.tape.mul_const(x, m)?)
    }

    pub fn layernorm(&mut self, x: Var, ln: (ParamId, ParamId)) -> Result<Var> {
        let (g, b) = (self.p(ln.0), self.p(ln.1));
        Ok(self.tape.layernorm(x, g, b)?)
    }

    pub fn linear(&mut self, x: Var, lin: (ParamId, ParamId)) -> Result<Var> {
        let (w, b) = (self.p(lin.0), self.p(lin.1));
        Ok(self.tape.linear(x, w, Some(b))?)
    }
}

/// Tokens laid out as `[A, T, S, D]` with a `[A, T, S]` mask.
#[derive(Debug, Clone)]
pub struct Grid {
    pub x: Var,
    pub agents: usize,
    pub steps: usize,
    pub slots: usize,
    pub mask: Vec<bool>,
}

impl Grid {
    pub fn width(&self, tape: &Tape) -> usize {
        tape.shape(self.x)[3]
    }

    pub fn len(&self) -> usize {
        self.steps * self.slots
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Fails when some agent has no valid cell at all.
    pub fn check_agents(&self) -> Result<()> {
        let per = self.len();
        if per == 0 {
            return Err(Error::Data("empty token sequence".into()));
        }
        for a in 0..self.agents {
            if !self.mask[a * per..(a + 1) * per].iter().any(|&m| m) {
                return Err(Error::Data(format!("agent {a} has no valid tokens")));
            }
        }
        Ok(())
    }
}

fn register_linear(store: &mut ParamStore, name: &str, out: usize, inp: usize, rng: &mut ChaCha8Rng) -> (ParamId, ParamId) {
    (store.glorot(format!("{name}.w"), out, inp, rng), store.zeros(format!("{name}.b"), &[out]))
}

pub(crate) fn register_layernorm(store: &mut ParamStore, name: &str, d: usize) -> (ParamId, ParamId) {
    (store.ones(format!("{name}.gain"), &[d]), store.zeros(format!("{name}.bias"), &[d]))
}

/// Multi-head attention projections.
#[derive(Debug, Clone)]
pub(crate) struct Mha {
    pub q: (ParamId, ParamId),
    pub k: (ParamId, ParamId),
    pub v: (ParamId, ParamId),
    pub o: (ParamId, ParamId),
    pub heads: usize,
}

impl Mha {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, heads: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            q: register_linear(store, &format!("{name}.q"), d, d, rng),
            k: register_linear(store, &format!("{name}.k"), d, d, rng),
            v: register_linear(store, &format!("{name}.v"), d, d, rng),
            o: register_linear(store, &format!("{name}.o"), d, d, rng),
            heads,
        }
    }

    /// `queries: [P, Lq, D]`, `memory: [P, Lk, D]`, `key_mask: [P * Lk]`.
    pub fn forward(&self, f: &mut Forward, queries: Var, memory: Var, key_mask: &[bool]) -> Result<Var> {
        let q = f.linear(queries, self.q)?;
        let k = f.linear(memory, self.k)?;
        let v = f.linear(memory, self.v)?;
        let a = f.tape.attention(q, k, v, key_mask, self.heads)?;
        f.linear(a, self.o)
    }
}

/// Position-wise feed-forward sublayer with its own pre-layernorm.
#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    pub ln: (ParamId, ParamId),
    pub up: (ParamId, ParamId),
    pub down: (ParamId, ParamId),
}

impl FeedForward {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, f: usize, rng: &mut ChaCha8Rng) -> Self {
        Self {
            ln: register_layernorm(store, &format!("{name}.ln"), d),
            up: register_linear(store, &format!("{name}.up"), f, d, rng),
            down: register_linear(store, &format!("{name}.down"), d, f, rng),
        }
    }

    /// `x + FFN(LN(x))`, with the update suppressed on rows whose weight is 0.
    pub fn residual(&self, f: &mut Forward, x: Var, rows: Option<&[f64]>, dropout: f64) -> Result<Var> {
        let h = f.layernorm(x, self.ln)?;
        let h = f.linear(h, self.up)?;
        let h = f.tape.relu(h)?;
        let h = f.linear(h, self.down)?;
        let h = f.dropout(h, dropout)?;
        let h = match rows {
            Some(w) => f.tape.scale_rows(h, w.to_vec())?,
            None => h,
        };
        Ok(f.tape.add(x, h)?)
    }
}

/// One encoder block with its parameters.
#[derive(Debug, Clone)]
pub struct EncoderBlock {
    pub kind: BlockKind,
    cfg: BlockConfig,
    ln: (ParamId, ParamId),
    /// Layernorm over the attended memory; latent blocks only.
    ln_memory: Option<(ParamId, ParamId)>,
    queries: Option<ParamId>,
    mha: Mha,
    ffn: FeedForward,
}

impl EncoderBlock {
    pub fn new(store: &mut ParamStore, name: &str, cfg: &BlockConfig, kind: BlockKind, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.hidden;
        let (ln_memory, queries) = match kind.latents {
            Some(0) => return Err(Error::Config(format!("{name}: latent query count must be at least 1"))),
            Some(n) => (
                Some(register_layernorm(store, &format!("{name}.ln_memory"), d)),
                Some(store.uniform(format!("{name}.latents"), &[n, d], 1.0, rng)),
            ),
            None => (None, None),
        };
        Ok(Self {
            kind,
            cfg: *cfg,
            ln: register_layernorm(store, &format!("{name}.ln"), d),
            ln_memory,
            queries,
            mha: Mha::new(store, &format!("{name}.attn"), d, cfg.heads, rng),
            ffn: FeedForward::new(store, &format!("{name}.ffn"), d, cfg.ffn, rng),
        })
    }

    /// Applies the block to a grid. Joint and latent blocks fail on an agent
    /// without valid tokens; factorized blocks pass empty slices through.
    pub fn forward(&self, f: &mut Forward, g: &Grid) -> Result<Grid> {
        if self.kind.axis == Axis::Joint || self.queries.is_some() {
            g.check_agents()?;
        }
        self.apply(f, g)
    }

    /// Like [`EncoderBlock::forward`] but lets agents without valid tokens pass
    /// through unchanged (their cells stay masked).
    pub fn apply(&self, f: &mut Forward, g: &Grid) -> Result<Grid> {
        let d = g.width(f.tape);
        if d != self.cfg.hidden {
            return Err(Error::Config(format!("block width {} applied to tokens of width {d}", self.cfg.hidden)));
        }
        let (a, t, s) = (g.agents, g.steps, g.slots);
        // fold the non-attended axis into the batch: seqs [P, L, D]
        let (seqs, mask, p, l) = match self.kind.axis {
            Axis::Joint => (f.tape.reshape(g.x, &[a, t * s, d])?, g.mask.clone(), a, t * s),
            Axis::Spatial => (f.tape.reshape(g.x, &[a * t, s, d])?, g.mask.clone(), a * t, s),
            Axis::Temporal => {
                let x = f.tape.permute(g.x, &[0, 2, 1, 3])?;
                let x = f.tape.reshape(x, &[a * s, t, d])?;
                (x, transpose_mask(&g.mask, a, t, s), a * s, t)
            }
        };
        let (out, out_mask, l_out) = match self.queries {
            None => (self.self_attend(f, seqs, &mask)?, mask, l),
            Some(q) => {
                let n = f.tape.shape(f.p(q))[0];
                let (out, m) = self.latent_attend(f, seqs, &mask, p, l)?;
                (out, m, n)
            }
        };
        let (steps, slots) = match self.kind.axis {
            Axis::Joint if self.queries.is_none() => (t, s),
            Axis::Joint => (1, l_out),
            Axis::Spatial => (t, l_out),
            Axis::Temporal => (l_out, s),
        };
        let x = match self.kind.axis {
            Axis::Joint | Axis::Spatial => f.tape.reshape(out, &[a, steps, slots, d])?,
            Axis::Temporal => {
                let x = f.tape.reshape(out, &[a, s, l_out, d])?;
                f.tape.permute(x, &[0, 2, 1, 3])?
            }
        };
        let mask = match self.kind.axis {
            Axis::Temporal => transpose_mask(&out_mask, a, s, l_out),
            _ => out_mask,
        };
        Ok(Grid {
            x,
            agents: a,
            steps,
            slots,
            mask,
        })
    }

    fn self_attend(&self, f: &mut Forward, x: Var, mask: &[bool]) -> Result<Var> {
        let rows: Option<Vec<f64>> = if mask.iter().all(|&m| m) {
            None
        } else {
            Some(mask.iter().map(|&m| if m { 1.0 } else { 0.0 }).collect())
        };
        let h = f.layernorm(x, self.ln)?;
        let h = self.mha.forward(f, h, h, mask)?;
        let h = f.dropout(h, self.cfg.dropout)?;
        let h = match &rows {
            Some(w) => f.tape.scale_rows(h, w.clone())?,
            None => h,
        };
        let x = f.tape.add(x, h)?;
        self.ffn.residual(f, x, rows.as_deref(), self.cfg.dropout)
    }

    fn latent_attend(&self, f: &mut Forward, x: Var, mask: &[bool], p: usize, l: usize) -> Result<(Var, Vec<bool>)> {
        if l == 0 {
            return Err(Error::Data("latent query block applied to an empty input".into()));
        }
        let bank = f.p(self.queries.expect("latent block"));
        let n = f.tape.shape(bank)[0];
        let z = f.tape.broadcast_leading(bank, p)?;
        let zn = f.layernorm(z, self.ln)?;
        let mem = f.layernorm(x, self.ln_memory.expect("latent block"))?;
        let h = self.mha.forward(f, zn, mem, mask)?;
        let h = f.dropout(h, self.cfg.dropout)?;
        let z = f.tape.add(z, h)?;
        let z = self.ffn.residual(f, z, None, self.cfg.dropout)?;
        let out_mask = (0..p)
            .flat_map(|i| {
                let any = mask[i * l..(i + 1) * l].iter().any(|&m| m);
                std::iter::repeat(any).take(n)
            })
            .collect();
        Ok((z, out_mask))
    }
}

/// `[A, T, S]` mask to `[A, S, T]`.
fn transpose_mask(mask: &[bool], a: usize, t: usize, s: usize) -> Vec<bool> {
    let mut out = Vec::with_capacity(mask.len());
    for ai in 0..a {
        for si in 0..s {
            for ti in 0..t {
                out.push(mask[(ai * t + ti) * s + si]);
            }
        }
    }
    out
}
