//! Synthetic driving scenes. Agents follow unicycle kinematics along lanes
//! that appear in their roadgraph; lights gate stopping and yielding.

use std::f64::consts::FRAC_PI_2;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Array;
use crate::scene::features::{agent, light, road};
use crate::scene::{ModalityTensor, Scenario, Scene};


/// Relative frequency of each scenario; must sum to 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioMix {
    pub straight: f64,
    pub left_turn: f64,
    pub right_turn: f64,
    pub stop: f64,
    #[serde(rename = "yield")]
    pub yield_: f64,
}

impl Default for ScenarioMix {
    fn default() -> Self {
        Self {
            straight: 0.4,
            left_turn: 0.2,
            right_turn: 0.2,
            stop: 0.1,
            yield_: 0.1,
        }
    }
}

impl ScenarioMix {
    fn weights(&self) -> [(Scenario, f64); 5] {
        [
            (Scenario::Straight, self.straight),
            (Scenario::LeftTurn, self.left_turn),
            (Scenario::RightTurn, self.right_turn),
            (Scenario::Stop, self.stop),
            (Scenario::Yield, self.yield_),
        ]
    }

    pub fn only(s: Scenario) -> Self {
        let mut m = Self {
            straight: 0.0,
            left_turn: 0.0,
            right_turn: 0.0,
            stop: 0.0,
            yield_: 0.0,
        };
        match s {
            Scenario::Straight | Scenario::Bimodal => m.straight = 1.0,
            Scenario::LeftTurn => m.left_turn = 1.0,
            Scenario::RightTurn => m.right_turn = 1.0,
            Scenario::Stop => m.stop = 1.0,
            Scenario::Yield => m.yield_ = 1.0,
        }
        m
    }

    fn sample(&self, u: f64) -> Scenario {
        let mut acc = 0.0;
        let mut last = Scenario::Straight;
        for (s, w) in self.weights() {
            if w > 0.0 {
                acc += w;
                last = s;
                if u < acc {
                    return s;
                }
            }
        }
        last
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Noise {
    /// Standard deviation of observed history positions.
    pub position: f64,
}

impl Default for Noise {
    fn default() -> Self {
        Self { position: 0.02 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GeneratorConfig {
    pub seed: u64,
    pub agents: usize,
    pub history_steps: usize,
    pub future_steps: usize,
    pub interaction_slots: usize,
    pub roadgraph_slots: usize,
    pub light_slots: usize,
    pub dt: f64,
    /// Initial speed range, units per second.
    pub speed: [f64; 2],
    pub mix: ScenarioMix,
    pub noise: Noise,
    /// Branch count of two-way scenes: 2, or 1 for a plain straight lane.
    pub branches: usize,
    /// Heading change of the turning branch.
    pub branch_angle: f64,
    /// Half-width of the square in which agents start.
    pub extent: f64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            agents: 3,
            history_steps: 5,
            future_steps: 8,
            interaction_slots: 2,
            roadgraph_slots: 8,
            light_slots: 1,
            dt: 0.25,
            speed: [2.0, 8.0],
            mix: ScenarioMix::default(),
            noise: Noise::default(),
            branches: 2,
            branch_angle: FRAC_PI_2,
            extent: 30.0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let fail = |m: String| Err(Error::Config(m));
        if self.history_steps < 2 {
            return fail(format!("history_steps must be at least 2, got {}", self.history_steps));
        }
        if self.agents == 0 || self.future_steps == 0 || self.interaction_slots == 0 {
            return fail("agents, future_steps and interaction_slots must be positive".into());
        }
        if !(self.dt > 0.0) || !(self.speed[0] > 0.0) || self.speed[1] < self.speed[0] {
            return fail("dt must be positive and speed a non-empty positive range".into());
        }
        let w = self.mix.weights();
        if w.iter().any(|(_, v)| !(*v >= 0.0)) || (w.iter().map(|(_, v)| v).sum::<f64>() - 1.0).abs() > 1e-9 {
            return fail("scenario weights must be non-negative and sum to 1".into());
        }
        if self.roadgraph_slots < 2 {
            return fail(format!(
                "roadgraph_slots = {} leaves no room for the lanes agents track",
                self.roadgraph_slots
            ));
        }
        if self.light_slots == 0 {
            return fail("light_slots must be at least 1 for lights to gate stops and yields".into());
        }
        if !(1..=2).contains(&self.branches) {
            return fail(format!("branches must be 1 or 2, got {}", self.branches));
        }
        if !(self.noise.position >= 0.0) {
            return fail("noise scales must be non-negative".into());
        }
        Ok(())
    }
}

/// Lane geometry in a local frame starting at the agent's current pose:
/// an arc of `turn` radians over the first `arc` units, then straight.
#[derive(Debug, Clone, Copy)]
struct Lane {
    turn: f64,
    arc: f64,
}

impl Lane {
    const STRAIGHT: Lane = Lane { turn: 0.0, arc: 0.0 };

    /// Local position and heading after `s` units of travel.
    fn at(self, s: f64) -> ([f64; 2], f64) {
        if self.turn == 0.0 || self.arc == 0.0 {
            return ([s, 0.0], 0.0);
        }
        let r = self.arc / self.turn;
        let along = s.min(self.arc);
        let h = along / r;
        let p = [r * h.sin(), r * (1.0 - h.cos())];
        let extra = s - along;
        ([p[0] + extra * h.cos(), p[1] + extra * h.sin()], h)
    }
}

struct Agent {
    pos: [f64; 2],
    heading: f64,
    speed: f64,
    size: [f64; 2],
    stop_fraction: f64,
    noise: Vec<[f64; 2]>,
    scenario: Scenario,
    branch: u8,
}

fn rotate(p: [f64; 2], h: f64) -> [f64; 2] {
    let (s, c) = h.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1]]
}

impl Agent {
    fn world(&self, local: [f64; 2]) -> [f64; 2] {
        let r = rotate(local, self.heading);
        [self.pos[0] + r[0], self.pos[1] + r[1]]
    }

    fn horizon(&self, cfg: &GeneratorConfig) -> f64 {
        cfg.future_steps as f64 * cfg.dt
    }

    /// Lanes present in the roadgraph and the index of the one followed.
    fn lanes(&self, cfg: &GeneratorConfig) -> (Vec<Lane>, usize) {
        let span = self.speed * self.horizon(cfg);
        let turn = |angle: f64| Lane { turn: angle, arc: span };
        match self.scenario {
            Scenario::LeftTurn => (vec![turn(FRAC_PI_2)], 0),
            Scenario::RightTurn => (vec![turn(-FRAC_PI_2)], 0),
            Scenario::Bimodal if cfg.branches == 2 => (vec![Lane::STRAIGHT, turn(cfg.branch_angle)], self.branch as usize),
            _ => (vec![Lane::STRAIGHT], 0),
        }
    }

    /// Distance travelled along the lane after `t` seconds of the future.
    fn travelled(&self, cfg: &GeneratorConfig, t: f64) -> f64 {
        let v = self.speed;
        match self.scenario {
            Scenario::Stop => {
                let d = self.stop_distance(cfg);
                let a = v * v / (2.0 * d);
                let t = t.min(v / a);
                v * t - 0.5 * a * t * t
            }
            Scenario::Yield => {
                let a = v / (2.0 * self.horizon(cfg));
                v * t - 0.5 * a * t * t
            }
            _ => v * t,
        }
    }

    fn stop_distance(&self, cfg: &GeneratorConfig) -> f64 {
        0.5 * self.speed * self.horizon(cfg) * self.stop_fraction
    }

    fn future(&self, cfg: &GeneratorConfig, lane: Lane) -> Vec<[f64; 2]> {
        (1..=cfg.future_steps)
            .map(|k| self.world(lane.at(self.travelled(cfg, k as f64 * cfg.dt)).0))
            .collect()
    }

    /// Observed state at history step `j`; the last step is the current time.
    fn state(&self, cfg: &GeneratorConfig, j: usize) -> [f64; agent::WIDTH] {
        let back = (cfg.history_steps - 1 - j) as f64 * cfg.dt * self.speed;
        let p = self.world([-back, 0.0]);
        let n = self.noise[j];
        let (s, c) = self.heading.sin_cos();
        let mut f = [0.0; agent::WIDTH];
        f[agent::X] = p[0] + n[0];
        f[agent::Y] = p[1] + n[1];
        f[agent::VX] = self.speed * c;
        f[agent::VY] = self.speed * s;
        f[agent::BOX_LENGTH] = self.size[0];
        f[agent::BOX_WIDTH] = self.size[1];
        f[agent::SIN] = s;
        f[agent::COS] = c;
        f
    }
}

/// Generator for scene `index`; independent of every other scene.
fn scene_rng(seed: u64, index: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(index);
    rng
}

fn draw_agent(rng: &mut ChaCha8Rng, cfg: &GeneratorConfig) -> Agent {
    let u: f64 = rng.gen();
    let x = rng.gen_range(-cfg.extent..=cfg.extent);
    let y = rng.gen_range(-cfg.extent..=cfg.extent);
    let heading = rng.gen_range(-std::f64::consts::PI..std::f64::consts::PI);
    let speed = rng.gen_range(cfg.speed[0]..=cfg.speed[1]);
    let size = [rng.gen_range(4.0..5.0), rng.gen_range(1.8..2.2)];
    let stop_fraction = rng.gen_range(0.5..1.0);
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    let noise = (0..cfg.history_steps)
        .map(|_| {
            let (a, b): (f64, f64) = (normal.sample(rng), normal.sample(rng));
            [a * cfg.noise.position, b * cfg.noise.position]
        })
        .collect();
    Agent {
        pos: [x, y],
        heading,
        speed,
        size,
        stop_fraction,
        noise,
        scenario: cfg.mix.sample(u),
        branch: 0,
    }
}

fn build_scene(cfg: &GeneratorConfig, index: usize, two_way: bool) -> Scene {
    let mut rng = scene_rng(cfg.seed, index as u64);
    let mut agents: Vec<Agent> = (0..cfg.agents).map(|_| draw_agent(&mut rng, cfg)).collect();
    if two_way {
        let mut coin = scene_rng(cfg.seed ^ 0x5bd1_e995, index as u64);
        for a in &mut agents {
            a.scenario = Scenario::Bimodal;
            let flip: bool = coin.gen();
            a.branch = if cfg.branches == 2 { flip as u8 } else { 0 };
        }
    }

    let (n, th, tf) = (cfg.agents, cfg.history_steps, cfg.future_steps);
    let mut history = ModalityTensor::zeros(n, th, 1, agent::WIDTH);
    let mut interactions = ModalityTensor::zeros(n, th, cfg.interaction_slots, agent::WIDTH);
    let mut roadgraph = ModalityTensor::zeros(n, 1, cfg.roadgraph_slots, road::WIDTH);
    let mut lights = ModalityTensor::zeros(n, th, cfg.light_slots, light::WIDTH);
    let mut future = Vec::with_capacity(n * tf * 2);
    let mut endpoints = Vec::with_capacity(n * 4);
    let states: Vec<Vec<[f64; agent::WIDTH]>> =
        agents.iter().map(|ag| (0..th).map(|j| ag.state(cfg, j)).collect()).collect();

    for (a, ag) in agents.iter().enumerate() {
        for j in 0..th {
            history.features_at_mut(a, j, 0).copy_from_slice(&states[a][j]);
            history.set_valid(a, j, 0, true);
        }

        // other agents, nearest first at the current step
        let now = states[a][th - 1];
        let mut others: Vec<(f64, usize)> = (0..n)
            .filter(|&b| b != a)
            .map(|b| {
                let o = states[b][th - 1];
                ((o[agent::X] - now[agent::X]).hypot(o[agent::Y] - now[agent::Y]), b)
            })
            .collect();
        others.sort_by(|p, q| p.0.total_cmp(&q.0).then(p.1.cmp(&q.1)));
        for (slot, &(_, b)) in others.iter().take(cfg.interaction_slots).enumerate() {
            for j in 0..th {
                interactions.features_at_mut(a, j, slot).copy_from_slice(&states[b][j]);
                interactions.set_valid(a, j, slot, true);
            }
        }

        let (lanes, followed) = ag.lanes(cfg);
        let line = matches!(ag.scenario, Scenario::Stop | Scenario::Yield);
        let lane_slots = cfg.roadgraph_slots - line as usize;
        let span = 1.25 * ag.speed * ag.horizon(cfg) + 2.0;
        let mut slot = 0;
        for (li, lane) in lanes.iter().enumerate() {
            let count = lane_slots / lanes.len() + usize::from(li < lane_slots % lanes.len());
            for i in 0..count {
                let p0 = ag.world(lane.at(span * i as f64 / count as f64).0);
                let p1 = ag.world(lane.at(span * (i + 1) as f64 / count as f64).0);
                put_segment(&mut roadgraph, a, slot, p0, p1, road::LANE);
                slot += 1;
            }
        }
        let line_at = match ag.scenario {
            Scenario::Stop => ag.stop_distance(cfg),
            _ => ag.travelled(cfg, ag.horizon(cfg)),
        };
        if line {
            let c = ag.world([line_at, 0.0]);
            let half = rotate([0.0, 1.5], ag.heading);
            put_segment(
                &mut roadgraph,
                a,
                slot,
                [c[0] - half[0], c[1] - half[1]],
                [c[0] + half[0], c[1] + half[1]],
                road::STOP_LINE,
            );
        }

        let state = match ag.scenario {
            Scenario::Stop => light::RED,
            Scenario::Yield => light::YELLOW,
            _ => light::GREEN,
        };
        let at = ag.world([line_at, 0.0]);
        for j in 0..th {
            let f = lights.features_at_mut(a, j, 0);
            f[light::X] = at[0];
            f[light::Y] = at[1];
            f[light::STATE + state] = 1.0;
            f[light::CONFIDENCE] = 1.0;
            lights.set_valid(a, j, 0, true);
        }

        for p in ag.future(cfg, lanes[followed]) {
            future.extend_from_slice(&p);
        }
        if two_way {
            for b in 0..2 {
                let lane = lanes[b.min(lanes.len() - 1)];
                endpoints.extend_from_slice(&ag.world(lane.at(ag.travelled(cfg, ag.horizon(cfg))).0));
            }
        }
    }

    Scene {
        id: format!("scene-{index:06}"),
        ego_index: 0,
        dt: cfg.dt,
        history,
        interactions,
        roadgraph,
        traffic_lights: lights,
        future: Array::new(vec![n, tf, 2], future).expect("future shape"),
        scenarios: Some(agents.iter().map(|a| a.scenario).collect()),
        branches: two_way.then(|| agents.iter().map(|a| a.branch).collect()),
        branch_endpoints: two_way.then(|| Array::new(vec![n, 2, 2], endpoints).expect("endpoint shape")),
    }
}

fn put_segment(m: &mut ModalityTensor, a: usize, slot: usize, p0: [f64; 2], p1: [f64; 2], kind: usize) {
    let f = m.features_at_mut(a, 0, slot);
    let len = (p1[0] - p0[0]).hypot(p1[1] - p0[1]).max(1e-12);
    f[road::X0] = p0[0];
    f[road::Y0] = p0[1];
    f[road::X1] = p1[0];
    f[road::Y1] = p1[1];
    f[road::DX] = (p1[0] - p0[0]) / len;
    f[road::DY] = (p1[1] - p0[1]) / len;
    f[road::TYPE + kind] = 1.0;
    m.set_valid(a, 0, slot, true);
}

/// `n_scenes` scenes drawn from the scenario mix. Scene `i` depends only on
/// `(cfg, i)`.
pub fn generate(cfg: &GeneratorConfig, n_scenes: usize) -> Result<Vec<Scene>> {
    generate_range(cfg, 0, n_scenes, false)
}

/// Scenes in which every agent reaches a fork and takes either branch with
/// equal probability. The branch taken and both endpoints are recorded.
pub fn bimodal_split(cfg: &GeneratorConfig, n_scenes: usize) -> Result<Vec<Scene>> {
    generate_range(cfg, 0, n_scenes, true)
}

/// Scenes `start..start + n_scenes`; disjoint ranges give disjoint splits.
pub fn generate_range(cfg: &GeneratorConfig, start: usize, n_scenes: usize, two_way: bool) -> Result<Vec<Scene>> {
    cfg.validate()?;
    if n_scenes == 0 {
        return Err(Error::Config("n_scenes must be at least 1".into()));
    }
    let scenes: Vec<Scene> = (start..start + n_scenes).map(|i| build_scene(cfg, i, two_way)).collect();
    for s in &scenes {
        s.validate()?;
    }
    Ok(scenes)
}
