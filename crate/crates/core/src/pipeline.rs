//! End-to-end steps shared by the command line and the tests: generate,
//! train, predict, aggregate, evaluate and benchmark.

use std::collections::{BTreeMap, HashMap};
use std::path::Path;
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::aggregate::{aggregate_to_k, AggregationConfig};
use crate::config::RunConfig;
use crate::decoder::PredictionRecord;
use crate::error::{Error, Result};
use crate::fusion::{InputShape, Latent};
use crate::metrics::{evaluate, EvalSample, MetricsConfig, MetricsReport};
use crate::model::Model;
use crate::numerics::Tape;
use crate::objective::{train_with, Dataset, LossPoint, TrainReport};
use crate::scene::Scene;
use crate::synthdata::generate_range;

/// Agent rows per forward pass during prediction.
const PREDICT_BATCH: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Split {
    Train,
    Eval,
}

/// Scenes of one split. The evaluation split uses scene indices after the
/// training ones, so the two never overlap.
pub fn generate_split(cfg: &RunConfig, split: Split) -> Result<Vec<Scene>> {
    let d = &cfg.data;
    let (start, n) = match split {
        Split::Train => (0, d.train_scenes),
        Split::Eval => (d.train_scenes, d.eval_scenes),
    };
    generate_range(&d.generator, start, n, d.bimodal)
}

pub fn train_model(cfg: &RunConfig, scenes: &[Scene]) -> Result<(Model, TrainReport)> {
    train_model_with(cfg, scenes, &mut |_| {})
}

pub fn train_model_with(
    cfg: &RunConfig,
    scenes: &[Scene],
    on_log: &mut dyn FnMut(&LossPoint),
) -> Result<(Model, TrainReport)> {
    let first = scenes.first().ok_or_else(|| Error::Data("no training scenes".into()))?;
    let mut model = Model::new(&cfg.model, InputShape::of(first), cfg.seed)?;
    let data = Dataset::from_scenes(scenes)?;
    let report = train_with(&mut model, &data, &cfg.train, on_log)?;
    Ok((model, report))
}

/// Every modeled agent of every scene in its own frame, with its origin.
fn agent_rows(scenes: &[Scene]) -> Result<Vec<(String, usize, Scene)>> {
    let mut rows = Vec::new();
    for s in scenes {
        for a in s.modeled_agents() {
            rows.push((s.id.clone(), a, s.agent_view(a)?));
        }
    }
    Ok(rows)
}

fn check_input(model: &Model, scenes: &[Scene]) -> Result<()> {
    for s in scenes {
        if InputShape::of(s) != model.input || s.future_steps() != model.config.decoder.future_steps {
            return Err(Error::Data(format!(
                "scene {} does not match the shapes the model was built for",
                s.id
            )));
        }
    }
    Ok(())
}

/// Ensemble-merged mixtures for every modeled agent, in scene order.
pub fn predict(model: &Model, scenes: &[Scene]) -> Result<Vec<PredictionRecord>> {
    check_input(model, scenes)?;
    let rows = agent_rows(scenes)?;
    let mut out = Vec::with_capacity(rows.len());
    for chunk in rows.chunks(PREDICT_BATCH) {
        let batch = Scene::stack(&chunk.iter().map(|r| r.2.clone()).collect::<Vec<_>>())?;
        let mix = model.predict(&batch)?;
        for (i, (id, agent, _)) in chunk.iter().enumerate() {
            out.push(PredictionRecord::from_mixture(id, *agent, &mix, i));
        }
    }
    Ok(out)
}

/// Reduces each record to `cfg.k_out` trajectories.
pub fn aggregate_predictions(records: &[PredictionRecord], cfg: &AggregationConfig) -> Result<Vec<PredictionRecord>> {
    records
        .iter()
        .map(|r| {
            let modes = aggregate_to_k(&r.modes()?, cfg)?;
            let mut rec = PredictionRecord::from_modes(&r.scene_id, r.agent, &modes);
            rec.manifest = r.manifest.clone();
            Ok(rec)
        })
        .collect()
}

/// Pairs each record with its ground truth, expressed in the agent's frame.
pub fn eval_samples(records: &[PredictionRecord], scenes: &[Scene]) -> Result<Vec<EvalSample>> {
    let by_id: HashMap<&str, &Scene> = scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut frames: HashMap<(String, usize), Scene> = HashMap::new();
    let mut out = Vec::with_capacity(records.len());
    for r in records {
        let scene = by_id
            .get(r.scene_id.as_str())
            .ok_or_else(|| Error::Data(format!("prediction refers to unknown scene {}", r.scene_id)))?;
        if r.agent >= scene.agents() {
            return Err(Error::Data(format!("scene {} has no agent {}", r.scene_id, r.agent)));
        }
        let key = (r.scene_id.clone(), r.agent);
        if !frames.contains_key(&key) {
            frames.insert(key.clone(), scene.to_ego_frame(r.agent)?);
        }
        let frame = &frames[&key];
        let pose = frame.current_pose(r.agent)?;
        out.push(EvalSample {
            scene_id: r.scene_id.clone(),
            agent: r.agent,
            modes: r.modes()?,
            gt: frame.future_of(r.agent),
            origin: [pose.x, pose.y],
            heading: pose.heading,
            others: frame
                .modeled_agents()
                .into_iter()
                .filter(|&b| b != r.agent)
                .map(|b| frame.future_of(b))
                .collect(),
        });
    }
    Ok(out)
}

pub fn evaluate_predictions(records: &[PredictionRecord], scenes: &[Scene], cfg: &MetricsConfig) -> Result<MetricsReport> {
    evaluate(&eval_samples(records, scenes)?, cfg)
}

/// Provenance of an output file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub command: String,
    pub config_hash: String,
    pub seed: u64,
    pub git_describe: String,
    pub inputs: Vec<String>,
    pub outputs: Vec<String>,
    /// Seconds per phase.
    pub timings: BTreeMap<String, f64>,
}

impl RunManifest {
    pub fn new(command: &str, cfg: &RunConfig) -> Self {
        Self::with_hash(command, &cfg.hash(), cfg.seed)
    }

    /// For commands driven by a checkpoint rather than a run configuration.
    pub fn with_hash(command: &str, config_hash: &str, seed: u64) -> Self {
        Self {
            command: command.to_string(),
            config_hash: config_hash.to_string(),
            seed,
            git_describe: git_describe(),
            inputs: Vec::new(),
            outputs: Vec::new(),
            timings: BTreeMap::new(),
        }
    }

    /// Path of the manifest written next to `output`.
    pub fn path_for(output: &Path) -> std::path::PathBuf {
        let mut name = output.file_name().map(|n| n.to_os_string()).unwrap_or_default();
        name.push(".manifest.json");
        output.with_file_name(name)
    }

    pub fn time<T>(&mut self, phase: &str, f: impl FnOnce() -> T) -> T {
        let start = Instant::now();
        let out = f();
        self.timings.insert(phase.to_string(), start.elapsed().as_secs_f64());
        out
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }
}

fn git_describe() -> String {
    std::process::Command::new("git")
        .args(["describe", "--always", "--dirty", "--tags"])
        .output()
        .ok()
        .filter(|o| o.status.success())
        .and_then(|o| String::from_utf8(o.stdout).ok())
        .map(|s| s.trim().to_string())
        .unwrap_or_else(|| "unknown".into())
}

/// One benchmark configuration and its measurements.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    pub fusion: String,
    pub regime: String,
    pub ratio: f64,
    pub params: usize,
    /// Encoder query-key dot products per agent row.
    pub attention_scores: u64,
    pub attention_flops: u64,
    pub median_forward_ms: f64,
    pub min_ade: f64,
}

pub const BENCH_HEADER: &str = "fusion,regime,ratio,params,attention_scores,attention_flops,median_forward_ms,min_ade";

impl BenchRow {
    pub fn csv(&self) -> String {
        format!(
            "{},{},{},{},{},{},{},{}",
            self.fusion,
            self.regime,
            self.ratio,
            self.params,
            self.attention_scores,
            self.attention_flops,
            self.median_forward_ms,
            self.min_ade
        )
    }
}

fn snake<T: Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

/// Median wall-clock milliseconds of `passes` forward passes over `batch`.
pub fn time_forward(model: &Model, batch: &Scene, passes: usize) -> Result<f64> {
    let mut times = Vec::with_capacity(passes);
    for _ in 0..passes {
        let start = Instant::now();
        model.predict_members(batch)?;
        times.push(start.elapsed().as_secs_f64() * 1e3);
    }
    times.sort_by(f64::total_cmp);
    let n = times.len();
    Ok(if n % 2 == 1 {
        times[n / 2]
    } else {
        0.5 * (times[n / 2 - 1] + times[n / 2])
    })
}

/// Encoder attention work of one forward pass as recorded on the tape.
pub fn counted_scores(model: &Model, batch: &Scene) -> Result<u64> {
    let mut tape = Tape::new();
    let bound = model.params.bind(&mut tape);
    let mut f = crate::attention::Forward::new(&mut tape, &bound);
    model.encoder().encode(&mut f, batch)?;
    Ok(tape.stats().score_elements)
}

/// Trains and measures every (fusion, regime, ratio) combination of `cfg.bench`.
pub fn bench(cfg: &RunConfig, train_scenes: &[Scene], eval_scenes: &[Scene]) -> Result<Vec<BenchRow>> {
    let b = &cfg.bench;
    let rows = agent_rows(eval_scenes)?;
    let timed: Vec<Scene> = rows.iter().take(b.batch).map(|r| r.2.clone()).collect();
    let batch = Scene::stack(&timed)?;
    let input = InputShape::of(batch_first(train_scenes)?);
    let mut out = Vec::new();
    for &fusion in &b.fusions {
        for &regime in &b.regimes {
            for &ratio in &b.ratios {
                let mut run = cfg.clone();
                run.model.encoder.fusion = fusion;
                run.model.encoder.regime = regime;
                run.model.encoder.latent = Some(Latent::Ratio(ratio));
                run.train.steps = b.train_steps.max(1);
                run.validate()?;
                let enc = &run.model.encoder;
                let scores = enc.attention_scores(&input, 1)?;
                let (model, _) = train_model(&run, train_scenes)?;
                let median = time_forward(&model, &batch, b.forward_passes)?;
                let report = evaluate_predictions(&predict(&model, eval_scenes)?, eval_scenes, &run.metrics)?;
                out.push(BenchRow {
                    fusion: snake(&fusion),
                    regime: snake(&regime),
                    ratio,
                    params: model.params.count(),
                    attention_scores: scores,
                    attention_flops: crate::attention::counts::flops(scores, enc.block.hidden),
                    median_forward_ms: median,
                    min_ade: report.min_ade,
                });
            }
        }
    }
    Ok(out)
}

fn batch_first(scenes: &[Scene]) -> Result<&Scene> {
    scenes.first().ok_or_else(|| Error::Data("no scenes".into()))
}
