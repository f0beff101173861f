//! Scene inputs: the four modality tensors, ego-frame transforms and the JSON Lines
//! scene format.
//!
//! Every modality is a `[A, T, S, D]` array with a `[A, T, S]` validity mask. Row
//! `a` holds the context of modeled agent `a`. Padding cells are zero with mask
//! `false`.

pub mod features;
mod frame;
mod io;
pub mod tokens;

pub use frame::{Pose, Scene2dTransform};
pub use io::{read_scenes, write_scenes};
pub use tokens::{add_positional, concat_modalities, project, Layout, ModalityTokens, Provenance, TokenSequence};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;

/// Which input source a tensor came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ModalityKind {
    History,
    Interactions,
    Roadgraph,
    TrafficLights,
}

impl ModalityKind {
    pub const ALL: [ModalityKind; 4] = [
        ModalityKind::History,
        ModalityKind::Interactions,
        ModalityKind::Roadgraph,
        ModalityKind::TrafficLights,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Self::History => "history",
            Self::Interactions => "interactions",
            Self::Roadgraph => "roadgraph",
            Self::TrafficLights => "traffic_lights",
        }
    }

    /// Feature width `D_m` of this modality.
    pub fn features(self) -> usize {
        match self {
            Self::History | Self::Interactions => features::agent::WIDTH,
            Self::Roadgraph => features::road::WIDTH,
            Self::TrafficLights => features::light::WIDTH,
        }
    }
}

/// One modality: values `[A, T, S, D]` and mask `[A, T, S]`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModalityTensor {
    pub values: Array,
    pub mask: Vec<bool>,
}

impl ModalityTensor {
    pub fn new(values: Array, mask: Vec<bool>) -> Result<Self> {
        let t = Self { values, mask };
        t.check_layout()?;
        Ok(t)
    }

    pub fn zeros(agents: usize, steps: usize, slots: usize, features: usize) -> Self {
        Self {
            values: Array::zeros(&[agents, steps, slots, features]),
            mask: vec![false; agents * steps * slots],
        }
    }

    fn check_layout(&self) -> Result<()> {
        if self.values.ndim() != 4 {
            return Err(Error::Data(format!(
                "modality must be 4-axis [A, T, S, D], got {:?}",
                self.values.shape()
            )));
        }
        if self.mask.len() * self.features() != self.values.len() {
            return Err(Error::Data(format!(
                "mask of length {} does not match values {:?}",
                self.mask.len(),
                self.values.shape()
            )));
        }
        Ok(())
    }

    pub fn agents(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn steps(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn slots(&self) -> usize {
        self.values.shape()[2]
    }

    pub fn features(&self) -> usize {
        self.values.shape()[3]
    }

    fn cell(&self, a: usize, t: usize, s: usize) -> usize {
        (a * self.steps() + t) * self.slots() + s
    }

    pub fn valid(&self, a: usize, t: usize, s: usize) -> bool {
        self.mask[self.cell(a, t, s)]
    }

    pub fn set_valid(&mut self, a: usize, t: usize, s: usize, v: bool) {
        let c = self.cell(a, t, s);
        self.mask[c] = v;
    }

    pub fn features_at(&self, a: usize, t: usize, s: usize) -> &[f64] {
        let d = self.features();
        &self.values.data()[self.cell(a, t, s) * d..][..d]
    }

    pub fn features_at_mut(&mut self, a: usize, t: usize, s: usize) -> &mut [f64] {
        let d = self.features();
        let c = self.cell(a, t, s);
        &mut self.values.data_mut()[c * d..][..d]
    }

    /// Keeps agent rows `rows` in order.
    pub fn select_agents(&self, rows: &[usize]) -> Self {
        let per_agent = self.steps() * self.slots();
        let values = self.values.index_select(0, rows).expect("agent rows in range");
        let mask = rows
            .iter()
            .flat_map(|&a| self.mask[a * per_agent..(a + 1) * per_agent].iter().copied())
            .collect();
        Self { values, mask }
    }

    /// Reorders the slot axis: output slot `i` is input slot `order[i]`.
    pub fn permute_slots(&self, order: &[usize]) -> Self {
        let values = self.values.index_select(2, order).expect("slot order in range");
        let (a_n, t_n, s_n) = (self.agents(), self.steps(), self.slots());
        let mut mask = Vec::with_capacity(a_n * t_n * order.len());
        for a in 0..a_n {
            for t in 0..t_n {
                for &s in order {
                    mask.push(self.mask[(a * t_n + t) * s_n + s]);
                }
            }
        }
        Self { values, mask }
    }

    pub fn stack(parts: &[&Self]) -> Result<Self> {
        let arrays: Vec<&Array> = parts.iter().map(|p| &p.values).collect();
        let values = Array::concat(&arrays, 0)?;
        let mask = parts.iter().flat_map(|p| p.mask.iter().copied()).collect();
        Ok(Self { values, mask })
    }
}

/// Behaviour class used by the synthetic generator.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scenario {
    Straight,
    LeftTurn,
    RightTurn,
    Stop,
    Yield,
    Bimodal,
}

/// One scene: modality tensors for `A` modeled agents plus their futures.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub id: String,
    pub ego_index: usize,
    /// Seconds between consecutive timesteps.
    pub dt: f64,
    pub history: ModalityTensor,
    pub interactions: ModalityTensor,
    pub roadgraph: ModalityTensor,
    pub traffic_lights: ModalityTensor,
    /// Ground-truth future positions `[A, T_f, 2]`.
    pub future: Array,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scenarios: Option<Vec<Scenario>>,
    /// Branch taken by each agent in a two-branch scene.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branches: Option<Vec<u8>>,
    /// Final position of both candidate branches, `[A, 2, 2]`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub branch_endpoints: Option<Array>,
}

impl Scene {
    pub fn agents(&self) -> usize {
        self.history.agents()
    }

    pub fn history_steps(&self) -> usize {
        self.history.steps()
    }

    pub fn future_steps(&self) -> usize {
        self.future.shape()[1]
    }

    pub fn modality(&self, kind: ModalityKind) -> &ModalityTensor {
        match kind {
            ModalityKind::History => &self.history,
            ModalityKind::Interactions => &self.interactions,
            ModalityKind::Roadgraph => &self.roadgraph,
            ModalityKind::TrafficLights => &self.traffic_lights,
        }
    }

    pub fn modality_mut(&mut self, kind: ModalityKind) -> &mut ModalityTensor {
        match kind {
            ModalityKind::History => &mut self.history,
            ModalityKind::Interactions => &mut self.interactions,
            ModalityKind::Roadgraph => &mut self.roadgraph,
            ModalityKind::TrafficLights => &mut self.traffic_lights,
        }
    }

    /// Future of agent `a` as `[T_f][2]` points.
    pub fn future_of(&self, a: usize) -> Vec<[f64; 2]> {
        let t = self.future_steps();
        self.future.data()[a * t * 2..(a + 1) * t * 2]
            .chunks(2)
            .map(|p| [p[0], p[1]])
            .collect()
    }

    /// Current pose of agent `a` (last history step).
    pub fn current_pose(&self, a: usize) -> Result<Pose> {
        let t = self.history_steps().checked_sub(1).ok_or_else(|| Error::Data("empty history".into()))?;
        if a >= self.agents() || !self.history.valid(a, t, 0) {
            return Err(Error::Data(format!(
                "agent {a} has no valid current state in scene {}",
                self.id
            )));
        }
        let f = self.history.features_at(a, t, 0);
        use features::agent::*;
        Ok(Pose {
            x: f[X],
            y: f[Y],
            heading: f[SIN].atan2(f[COS]),
        })
    }

    /// Transforms every spatial feature into the frame of agent `ego`.
    pub fn to_ego_frame(&self, ego: usize) -> Result<Scene> {
        let pose = self.current_pose(ego)?;
        Ok(frame::transform_scene(self, &Scene2dTransform::into_frame(pose)))
    }

    /// Keeps only agent rows `rows`.
    pub fn select_agents(&self, rows: &[usize]) -> Scene {
        Scene {
            id: self.id.clone(),
            ego_index: rows.iter().position(|&r| r == self.ego_index).unwrap_or(0),
            dt: self.dt,
            history: self.history.select_agents(rows),
            interactions: self.interactions.select_agents(rows),
            roadgraph: self.roadgraph.select_agents(rows),
            traffic_lights: self.traffic_lights.select_agents(rows),
            future: self.future.index_select(0, rows).expect("rows in range"),
            scenarios: self.scenarios.as_ref().map(|s| rows.iter().map(|&r| s[r]).collect()),
            branches: self.branches.as_ref().map(|b| rows.iter().map(|&r| b[r]).collect()),
            branch_endpoints: self
                .branch_endpoints
                .as_ref()
                .map(|e| e.index_select(0, rows).expect("rows in range")),
        }
    }

    /// Row `a` of the scene expressed in agent `a`'s own frame.
    pub fn agent_view(&self, a: usize) -> Result<Scene> {
        Ok(self.to_ego_frame(a)?.select_agents(&[a]))
    }

    /// Agents whose current state is valid, i.e. the rows that can be modeled.
    pub fn modeled_agents(&self) -> Vec<usize> {
        let t = self.history_steps() - 1;
        (0..self.agents()).filter(|&a| self.history.valid(a, t, 0)).collect()
    }

    /// Every modeled row re-expressed in its own agent's frame.
    pub fn agent_centric(&self) -> Result<Scene> {
        let views = self
            .modeled_agents()
            .into_iter()
            .map(|a| self.agent_view(a))
            .collect::<Result<Vec<_>>>()?;
        Scene::stack(&views)
    }

    /// Concatenates scenes along the agent axis. Scene-level fields come from the first.
    pub fn stack(parts: &[Scene]) -> Result<Scene> {
        let first = parts.first().ok_or_else(|| Error::Data("cannot stack zero scenes".into()))?;
        let m = |f: fn(&Scene) -> &ModalityTensor| -> Result<ModalityTensor> {
            ModalityTensor::stack(&parts.iter().map(f).collect::<Vec<_>>())
        };
        let futures: Vec<&Array> = parts.iter().map(|p| &p.future).collect();
        let endpoints: Option<Vec<&Array>> = parts.iter().map(|p| p.branch_endpoints.as_ref()).collect();
        Ok(Scene {
            id: first.id.clone(),
            ego_index: 0,
            dt: first.dt,
            history: m(|s| &s.history)?,
            interactions: m(|s| &s.interactions)?,
            roadgraph: m(|s| &s.roadgraph)?,
            traffic_lights: m(|s| &s.traffic_lights)?,
            future: Array::concat(&futures, 0)?,
            scenarios: concat_labels(parts.iter().map(|p| p.scenarios.as_deref())),
            branches: concat_labels(parts.iter().map(|p| p.branches.as_deref())),
            branch_endpoints: endpoints.map(|e| Array::concat(&e, 0)).transpose()?,
        })
    }

    /// Checks shapes and the per-modality invariants.
    pub fn validate(&self) -> Result<()> {
        for kind in ModalityKind::ALL {
            let m = self.modality(kind);
            m.check_layout()?;
            if m.agents() != self.agents() {
                return Err(Error::Data(format!(
                    "{} has {} agents, history has {}",
                    kind.name(),
                    m.agents(),
                    self.agents()
                )));
            }
            if m.features() != kind.features() {
                return Err(Error::Data(format!(
                    "{} has {} features, expected {}",
                    kind.name(),
                    m.features(),
                    kind.features()
                )));
            }
            if !m.values.is_finite() {
                return Err(Error::Data(format!("{} contains non-finite values", kind.name())));
            }
        }
        let t = self.history_steps();
        if self.history.slots() != 1 {
            return Err(Error::Data("history must have exactly one context slot".into()));
        }
        if self.roadgraph.steps() != 1 {
            return Err(Error::Data("roadgraph must have a time axis of length 1".into()));
        }
        for kind in [ModalityKind::Interactions, ModalityKind::TrafficLights] {
            if self.modality(kind).steps() != t {
                return Err(Error::Data(format!("{} time axis differs from history", kind.name())));
            }
        }
        if self.ego_index >= self.agents() {
            return Err(Error::Data(format!("ego index {} out of range", self.ego_index)));
        }
        let fs = self.future.shape();
        if fs.len() != 3 || fs[0] != self.agents() || fs[2] != 2 || !self.future.is_finite() {
            return Err(Error::Data(format!("future must be finite [A, T_f, 2], got {fs:?}")));
        }
        self.check_headings()?;
        self.check_lights()?;
        self.check_interaction_order()?;
        Ok(())
    }

    fn check_headings(&self) -> Result<()> {
        use features::agent::{COS, SIN};
        for m in [&self.history, &self.interactions] {
            for (cell, &ok) in m.mask.iter().enumerate() {
                if !ok {
                    continue;
                }
                let f = &m.values.data()[cell * m.features()..][..m.features()];
                let norm = f[SIN] * f[SIN] + f[COS] * f[COS];
                if (norm - 1.0).abs() > 1e-6 {
                    return Err(Error::Data(format!("heading encoding not unit length (|h|^2 = {norm})")));
                }
            }
        }
        Ok(())
    }

    fn check_lights(&self) -> Result<()> {
        let m = &self.traffic_lights;
        for (cell, &ok) in m.mask.iter().enumerate() {
            let c = m.values.data()[cell * m.features() + features::light::CONFIDENCE];
            if ok && !(0.0..=1.0).contains(&c) {
                return Err(Error::Data(format!("traffic light confidence {c} outside [0, 1]")));
            }
        }
        Ok(())
    }

    fn check_interaction_order(&self) -> Result<()> {
        let t = self.history_steps() - 1;
        for a in 0..self.agents() {
            if !self.history.valid(a, t, 0) {
                continue;
            }
            let me = self.history.features_at(a, t, 0);
            let mut last = 0.0;
            for s in 0..self.interactions.slots() {
                let d = if self.interactions.valid(a, t, s) {
                    let f = self.interactions.features_at(a, t, s);
                    (f[0] - me[0]).hypot(f[1] - me[1])
                } else {
                    f64::INFINITY
                };
                if d + 1e-9 < last {
                    return Err(Error::Data(format!(
                        "interaction slots of agent {a} are not sorted by current distance"
                    )));
                }
                last = d;
            }
        }
        Ok(())
    }
}

fn concat_labels<'a, T: Clone + 'a>(parts: impl Iterator<Item = Option<&'a [T]>>) -> Option<Vec<T>> {
    parts.collect::<Option<Vec<_>>>().map(|v| v.concat())
}
