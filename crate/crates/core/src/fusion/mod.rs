//! Scene encoders: late, early and hierarchical fusion over multi-axis or
//! factorized attention stacks.

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::attention::{counts, latent_len, Axis, BlockConfig, BlockKind, EncoderBlock, Forward, Grid};
use crate::error::{Error, Result};
use crate::numerics::{ParamId, ParamStore, Var};
use crate::scene::{add_positional, concat_modalities, project, Layout, ModalityKind, ModalityTokens, Scene};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Fusion {
    Late,
    Early,
    Hierarchical,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Regime {
    MultiAxis,
    FactorizedSequential,
    FactorizedInterleaved,
}

impl Regime {
    pub fn is_factorized(self) -> bool {
        self != Regime::MultiAxis
    }

    /// Attention axis of each of the `depth` blocks.
    pub fn schedule(self, depth: usize) -> Vec<Axis> {
        match self {
            Regime::MultiAxis => vec![Axis::Joint; depth],
            Regime::FactorizedSequential => (0..depth)
                .map(|i| if i < depth / 2 { Axis::Temporal } else { Axis::Spatial })
                .collect(),
            Regime::FactorizedInterleaved => (0..depth)
                .map(|i| if i % 2 == 0 { Axis::Temporal } else { Axis::Spatial })
                .collect(),
        }
    }
}

/// Latent queries used by the first block of each attention axis.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Latent {
    /// `max(1, round(ratio * L_in))` queries along the attended axis.
    Ratio(f64),
    /// A fixed number of queries for a multi-axis encoder.
    Queries(usize),
    /// Fixed counts for the first temporal and first spatial block.
    PerAxis { time: usize, space: usize },
}

/// Steps and slots of every modality as fed to the encoder.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub history_steps: usize,
    pub interaction_slots: usize,
    pub roadgraph_slots: usize,
    pub light_slots: usize,
}

impl InputShape {
    pub fn of(scene: &Scene) -> Self {
        Self {
            history_steps: scene.history_steps(),
            interaction_slots: scene.interactions.slots(),
            roadgraph_slots: scene.roadgraph.slots(),
            light_slots: scene.traffic_lights.slots(),
        }
    }

    /// `(T_m, S_m)` of a modality.
    pub fn cells(&self, kind: ModalityKind) -> (usize, usize) {
        match kind {
            ModalityKind::History => (self.history_steps, 1),
            ModalityKind::Interactions => (self.history_steps, self.interaction_slots),
            ModalityKind::Roadgraph => (1, self.roadgraph_slots),
            ModalityKind::TrafficLights => (self.history_steps, self.light_slots),
        }
    }
}

fn all_modalities() -> Vec<ModalityKind> {
    ModalityKind::ALL.to_vec()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    pub fusion: Fusion,
    pub regime: Regime,
    pub depth: usize,
    pub block: BlockConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latent: Option<Latent>,
    /// Modalities fed to the encoder, in concatenation order.
    #[serde(default = "all_modalities")]
    pub modalities: Vec<ModalityKind>,
}

impl EncoderConfig {
    pub fn validate(&self) -> Result<()> {
        self.block.validate()?;
        if self.modalities.is_empty() {
            return Err(Error::Config("encoder needs at least one modality".into()));
        }
        let mut seen = self.modalities.clone();
        seen.sort();
        seen.dedup();
        if seen.len() != self.modalities.len() {
            return Err(Error::Config("modalities listed twice".into()));
        }
        if self.regime.is_factorized() && self.depth % 2 != 0 {
            return Err(Error::Config(format!(
                "factorized attention needs an even depth, got {}",
                self.depth
            )));
        }
        if self.fusion == Fusion::Hierarchical && self.depth < 2 {
            return Err(Error::Config("hierarchical fusion needs depth of at least 2".into()));
        }
        match self.latent {
            Some(Latent::Ratio(r)) if !(r > 0.0 && r <= 1.0) => {
                Err(Error::Config(format!("latent ratio {r} outside (0, 1]")))
            }
            Some(Latent::Queries(n)) if n == 0 || self.regime.is_factorized() => Err(Error::Config(
                "a fixed latent query count needs a multi-axis encoder and at least one query".into(),
            )),
            Some(Latent::PerAxis { time, space }) if time == 0 || space == 0 || !self.regime.is_factorized() => {
                Err(Error::Config(
                    "per-axis latent counts need a factorized encoder and at least one query per axis".into(),
                ))
            }
            _ => Ok(()),
        }
    }

    fn layout(&self) -> Layout {
        if self.regime.is_factorized() {
            Layout::Grid
        } else {
            Layout::Flat
        }
    }

    /// Depth of the per-modality and cross-modal stages.
    pub fn stage_depths(&self) -> (usize, usize) {
        match self.fusion {
            Fusion::Late => (self.depth, 0),
            Fusion::Early => (0, self.depth),
            Fusion::Hierarchical => (self.depth / 2, self.depth - self.depth / 2),
        }
    }

    fn latents(&self, axis: Axis, shape: Cells) -> Option<usize> {
        Some(match (self.latent?, axis) {
            (Latent::Ratio(r), Axis::Joint) => latent_len(r, shape.0 * shape.1),
            (Latent::Ratio(r), Axis::Temporal) => latent_len(r, shape.0),
            (Latent::Ratio(r), Axis::Spatial) => latent_len(r, shape.1),
            (Latent::Queries(n), _) => n,
            (Latent::PerAxis { time, .. }, Axis::Temporal) => time,
            (Latent::PerAxis { space, .. }, _) => space,
        })
    }

    /// Block kinds of a stack running `schedule[range]`, starting at `shape`.
    /// The first block of each axis in the full schedule carries the latent queries.
    fn plan_stack(&self, range: std::ops::Range<usize>, mut shape: Cells) -> (Vec<BlockKind>, Cells) {
        let schedule = self.regime.schedule(self.depth);
        let mut kinds = Vec::new();
        for i in range {
            let axis = schedule[i];
            let first = !schedule[..i].contains(&axis);
            let latents = if first { self.latents(axis, shape) } else { None };
            let kind = BlockKind { axis, latents };
            shape = block_out(kind, shape);
            kinds.push(kind);
        }
        (kinds, shape)
    }

    /// Length `L_z` of the encoding for inputs of the given shape.
    pub fn encoded_len(&self, input: &InputShape) -> Result<usize> {
        self.validate()?;
        Ok(self.plan(input).z_len)
    }

    fn plan(&self, input: &InputShape) -> Plan {
        let (d1, d2) = self.stage_depths();
        let layout = self.layout();
        let mut modality_stacks = Vec::new();
        let mut stage1_out = Vec::new();
        if self.fusion != Fusion::Early {
            for &m in &self.modalities {
                let start = arrange(layout, &[input.cells(m)]);
                let (kinds, out) = self.plan_stack(0..d1, start);
                modality_stacks.push(kinds);
                stage1_out.push(out);
            }
        } else {
            stage1_out = self.modalities.iter().map(|&m| input.cells(m)).collect();
        }
        let (cross, z_len) = if self.fusion == Fusion::Late {
            let len = stage1_out.iter().map(|&c| finalized_len(layout, c)).sum();
            (Vec::new(), len)
        } else {
            let start = arrange(layout, &stage1_out);
            let (kinds, out) = self.plan_stack(d1..d1 + d2, start);
            (kinds, finalized_len(layout, out))
        };
        Plan {
            modality_stacks,
            cross,
            z_len,
        }
    }

    /// Scalar parameters of the encoder built for `input`.
    pub fn param_count(&self, input: &InputShape) -> Result<usize> {
        self.validate()?;
        let plan = self.plan(input);
        let d = self.block.hidden;
        let mut n = 0;
        for &m in &self.modalities {
            let (t, s) = input.cells(m);
            n += d * m.features() + d + t * s * d;
        }
        for kind in plan.modality_stacks.iter().flatten().chain(&plan.cross) {
            n += match kind.latents {
                Some(l) => self.block.latent_block_params(l),
                None => self.block.self_block_params(),
            };
        }
        Ok(n)
    }

    /// Query-key pairs scored by one encoder pass over `agents` rows.
    pub fn attention_scores(&self, input: &InputShape, agents: usize) -> Result<u64> {
        self.validate()?;
        let (d1, d2) = self.stage_depths();
        let layout = self.layout();
        let mut total = 0;
        let mut stage1_out = Vec::new();
        if self.fusion != Fusion::Early {
            for &m in &self.modalities {
                let (n, out) = self.stack_scores(0..d1, arrange(layout, &[input.cells(m)]), agents);
                total += n;
                stage1_out.push(out);
            }
        } else {
            stage1_out = self.modalities.iter().map(|&m| input.cells(m)).collect();
        }
        if self.fusion != Fusion::Late {
            total += self.stack_scores(d1..d1 + d2, arrange(layout, &stage1_out), agents).0;
        }
        Ok(total)
    }

    fn stack_scores(&self, range: std::ops::Range<usize>, start: Cells, agents: usize) -> (u64, Cells) {
        let (kinds, out) = self.plan_stack(range, start);
        let mut shape = start;
        let mut n = 0;
        for kind in kinds {
            let (t, s) = shape;
            n += match (kind.axis, kind.latents) {
                (Axis::Joint, None) => counts::joint(agents, t * s),
                (Axis::Temporal, None) => counts::temporal(agents, t, s),
                (Axis::Spatial, None) => counts::spatial(agents, t, s),
                (Axis::Joint, Some(l)) => counts::latent(agents, l, t * s),
                (Axis::Temporal, Some(l)) => counts::latent(agents * s, l, t),
                (Axis::Spatial, Some(l)) => counts::latent(agents * t, l, s),
            };
            shape = block_out(kind, shape);
        }
        (n, out)
    }
}

type Cells = (usize, usize);

fn block_out(kind: BlockKind, (t, s): Cells) -> Cells {
    match (kind.axis, kind.latents) {
        (_, None) => (t, s),
        (Axis::Joint, Some(n)) => (1, n),
        (Axis::Temporal, Some(n)) => (n, s),
        (Axis::Spatial, Some(n)) => (t, n),
    }
}

/// Shape after concatenating parts under a layout.
fn arrange(layout: Layout, parts: &[Cells]) -> Cells {
    match layout {
        Layout::Flat => (1, parts.iter().map(|&(t, s)| t * s).sum()),
        Layout::Grid => (
            parts.iter().map(|p| p.0).max().unwrap_or(0),
            parts.iter().map(|p| p.1).sum(),
        ),
    }
}

fn finalized_len(layout: Layout, (t, s): Cells) -> usize {
    match layout {
        Layout::Flat => t * s,
        Layout::Grid => s,
    }
}

struct Plan {
    modality_stacks: Vec<Vec<BlockKind>>,
    cross: Vec<BlockKind>,
    z_len: usize,
}

/// Encoder output `z: [A, L_z, D]` with its mask.
#[derive(Debug, Clone)]
pub struct SceneEncoding {
    pub z: Var,
    pub agents: usize,
    pub len: usize,
    pub mask: Vec<bool>,
}

#[derive(Debug, Clone)]
struct ModalityInput {
    kind: ModalityKind,
    proj: (ParamId, ParamId),
    positional: ParamId,
}

/// Parameters of a scene encoder.
#[derive(Debug, Clone)]
pub struct SceneEncoder {
    pub cfg: EncoderConfig,
    pub input: InputShape,
    inputs: Vec<ModalityInput>,
    modality_stacks: Vec<Vec<EncoderBlock>>,
    cross: Vec<EncoderBlock>,
}

impl SceneEncoder {
    pub fn new(store: &mut ParamStore, cfg: &EncoderConfig, input: InputShape, rng: &mut ChaCha8Rng) -> Result<Self> {
        cfg.validate()?;
        let d = cfg.block.hidden;
        let plan = cfg.plan(&input);
        let mut inputs = Vec::new();
        for &m in &cfg.modalities {
            let (t, s) = input.cells(m);
            inputs.push(ModalityInput {
                kind: m,
                proj: (
                    store.glorot(format!("encoder.{}.proj.w", m.name()), d, m.features(), rng),
                    store.zeros(format!("encoder.{}.proj.b", m.name()), &[d]),
                ),
                positional: store.zeros(format!("encoder.{}.positional", m.name()), &[t * s, d]),
            });
        }
        let mut build = |name: String, kinds: &[BlockKind]| -> Result<Vec<EncoderBlock>> {
            kinds
                .iter()
                .enumerate()
                .map(|(i, &k)| EncoderBlock::new(store, &format!("{name}.{i}"), &cfg.block, k, rng))
                .collect()
        };
        let mut modality_stacks = Vec::new();
        for (m, kinds) in cfg.modalities.iter().zip(&plan.modality_stacks) {
            modality_stacks.push(build(format!("encoder.{}.block", m.name()), kinds)?);
        }
        let cross = build("encoder.cross.block".into(), &plan.cross)?;
        Ok(Self {
            cfg: cfg.clone(),
            input,
            inputs,
            modality_stacks,
            cross,
        })
    }

    /// Projected, position-embedded tokens of each configured modality.
    pub fn embed(&self, f: &mut Forward, scene: &Scene) -> Result<Vec<ModalityTokens>> {
        if InputShape::of(scene) != self.input {
            return Err(Error::Data(format!(
                "scene shape {:?} does not match the encoder's {:?}",
                InputShape::of(scene),
                self.input
            )));
        }
        self.inputs
            .iter()
            .map(|mi| {
                let (w, b) = (f.p(mi.proj.0), f.p(mi.proj.1));
                let tokens = project(f.tape, mi.kind, scene.modality(mi.kind), w, b)?;
                add_positional(f.tape, tokens, f.p(mi.positional))
            })
            .collect()
    }

    pub fn encode(&self, f: &mut Forward, scene: &Scene) -> Result<SceneEncoding> {
        let tokens = self.embed(f, scene)?;
        self.encode_tokens(f, tokens)
    }

    /// Runs the fusion stages on already embedded modalities.
    pub fn encode_tokens(&self, f: &mut Forward, tokens: Vec<ModalityTokens>) -> Result<SceneEncoding> {
        let layout = self.cfg.layout();
        let z = match self.cfg.fusion {
            Fusion::Early => {
                let g = arrange_grid(f, &tokens, layout)?;
                let g = run_stack(f, &self.cross, g)?;
                finalize(f, g, layout)
            }
            Fusion::Late => {
                let mut parts = Vec::new();
                for (t, stack) in tokens.into_iter().zip(&self.modality_stacks) {
                    let g = arrange_grid(f, std::slice::from_ref(&t), layout)?;
                    let g = run_stack(f, stack, g)?;
                    parts.push(finalize(f, g, layout)?);
                }
                concat_encodings(f, &parts)
            }
            Fusion::Hierarchical => {
                let mut stage1 = Vec::new();
                for (t, stack) in tokens.into_iter().zip(&self.modality_stacks) {
                    let kind = t.kind;
                    let g = arrange_grid(f, std::slice::from_ref(&t), layout)?;
                    let g = run_stack(f, stack, g)?;
                    stage1.push(ModalityTokens {
                        kind,
                        values: g.x,
                        agents: g.agents,
                        steps: g.steps,
                        slots: g.slots,
                        mask: g.mask,
                    });
                }
                let g = arrange_grid(f, &stage1, layout)?;
                let g = run_stack(f, &self.cross, g)?;
                finalize(f, g, layout)
            }
        }?;
        check_encoding(z)
    }
}

fn arrange_grid(f: &mut Forward, parts: &[ModalityTokens], layout: Layout) -> Result<Grid> {
    let seq = concat_modalities(f.tape, parts, layout)?;
    Ok(Grid {
        x: seq.tokens,
        agents: seq.agents,
        steps: seq.steps,
        slots: seq.slots,
        mask: seq.mask,
    })
}

/// Per-modality stacks tolerate agents that lack the modality entirely; the
/// fused encoding is checked once at the end.
fn run_stack(f: &mut Forward, stack: &[EncoderBlock], mut g: Grid) -> Result<Grid> {
    for block in stack {
        g = block.apply(f, &g)?;
    }
    Ok(g)
}

fn check_encoding(e: SceneEncoding) -> Result<SceneEncoding> {
    for a in 0..e.agents {
        if !e.mask[a * e.len..(a + 1) * e.len].iter().any(|&m| m) {
            return Err(Error::Data(format!("agent {a} has no valid tokens to encode")));
        }
    }
    Ok(e)
}

fn finalize(f: &mut Forward, g: Grid, layout: Layout) -> Result<SceneEncoding> {
    match layout {
        Layout::Grid => pool_time(f, &g),
        Layout::Flat => {
            let d = g.width(f.tape);
            let len = g.len();
            Ok(SceneEncoding {
                z: f.tape.reshape(g.x, &[g.agents, len, d])?,
                agents: g.agents,
                len,
                mask: g.mask,
            })
        }
    }
}

/// Masked mean over the time axis: `[A, T, S, D] -> [A, S, D]`. A slot with no
/// valid step pools to zero and stays masked.
pub fn finalize_factorized(f: &mut Forward, g: &Grid) -> Result<SceneEncoding> {
    check_encoding(pool_time(f, g)?)
}

fn pool_time(f: &mut Forward, g: &Grid) -> Result<SceneEncoding> {
    let (a, t, s) = (g.agents, g.steps, g.slots);
    let mut weights = vec![0.0; a * t * s];
    let mut mask = vec![false; a * s];
    for ai in 0..a {
        for si in 0..s {
            let n = (0..t).filter(|&ti| g.mask[(ai * t + ti) * s + si]).count();
            if n == 0 {
                continue;
            }
            mask[ai * s + si] = true;
            for ti in 0..t {
                if g.mask[(ai * t + ti) * s + si] {
                    weights[(ai * t + ti) * s + si] = 1.0 / n as f64;
                }
            }
        }
    }
    let z = f.tape.weighted_time_sum(g.x, weights)?;
    Ok(SceneEncoding {
        z,
        agents: a,
        len: s,
        mask,
    })
}

fn concat_encodings(f: &mut Forward, parts: &[SceneEncoding]) -> Result<SceneEncoding> {
    let a = parts[0].agents;
    let vars: Vec<Var> = parts.iter().map(|p| p.z).collect();
    let z = f.tape.concat(&vars, 1)?;
    let len = parts.iter().map(|p| p.len).sum();
    let mut mask = Vec::with_capacity(a * len);
    for ai in 0..a {
        for p in parts {
            mask.extend_from_slice(&p.mask[ai * p.len..(ai + 1) * p.len]);
        }
    }
    Ok(SceneEncoding { z, agents: a, len, mask })
}
