use rand::Rng;
use rand_chacha::ChaCha8Rng;

use motionfuse::attention::BlockConfig;
use motionfuse::config::{BenchConfig, DataConfig, RunConfig};
use motionfuse::decoder::{DecoderConfig, Modes};
use motionfuse::fusion::{EncoderConfig, Fusion, Latent, Regime};
use motionfuse::model::ModelConfig;
use motionfuse::numerics::Array;
use motionfuse::objective::TrainConfig;
use motionfuse::scene::{ModalityKind, Scene};
use motionfuse::synthdata::{generate, GeneratorConfig};

pub fn random(shape: &[usize], rng: &mut ChaCha8Rng, scale: f64) -> Array {
    let n = shape.iter().product();
    Array::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-scale..scale)).collect()).unwrap()
}

pub fn encoder(fusion: Fusion, regime: Regime, depth: usize, hidden: usize, latent: Option<Latent>) -> EncoderConfig {
    EncoderConfig {
        fusion,
        regime,
        depth,
        block: BlockConfig::new(hidden, 2, 2 * hidden).unwrap(),
        latent,
        modalities: ModalityKind::ALL.to_vec(),
    }
}

pub fn model(encoder: EncoderConfig, modes: usize, future_steps: usize) -> ModelConfig {
    let block = encoder.block.clone();
    ModelConfig {
        encoder,
        decoder: DecoderConfig {
            block,
            depth: 1,
            modes,
            future_steps,
            ensemble: 1,
            zero_init_heads: false,
        },
    }
}

/// Scenes no larger than two agents, four steps and four slots.
pub fn tiny_generator(seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        agents: 2,
        history_steps: 4,
        future_steps: 4,
        interaction_slots: 1,
        roadgraph_slots: 4,
        light_slots: 1,
        ..GeneratorConfig::default()
    }
}

pub fn tiny_scenes(seed: u64, n: usize) -> Vec<Scene> {
    generate(&tiny_generator(seed), n).unwrap()
}

/// Desk-scale end-to-end run: early fusion, multi-axis, D = 64, two
/// encoder blocks, six modes, 2k steps on 5k scenes.
pub fn e2e_config(seed: u64, bimodal: bool) -> RunConfig {
    let block = BlockConfig::new(64, 4, 256).unwrap();
    let cfg = RunConfig {
        seed,
        data: DataConfig {
            train_scenes: 5000,
            eval_scenes: 200,
            bimodal,
            generator: GeneratorConfig::default(),
        },
        model: ModelConfig {
            encoder: EncoderConfig {
                fusion: Fusion::Early,
                regime: Regime::MultiAxis,
                depth: 2,
                block: block.clone(),
                latent: None,
                modalities: ModalityKind::ALL.to_vec(),
            },
            decoder: DecoderConfig {
                block,
                depth: 1,
                modes: 6,
                future_steps: 8,
                ensemble: 1,
                zero_init_heads: false,
            },
        },
        train: TrainConfig {
            steps: 2000,
            batch_size: 16,
            learning_rate: 1e-3,
            log_every: 250,
            ..TrainConfig::default()
        },
        aggregate: Default::default(),
        metrics: Default::default(),
        bench: BenchConfig::default(),
    };
    let cfg = cfg.with_seed(seed);
    cfg.validate().unwrap();
    cfg
}

/// A small but complete run for determinism and CLI-style checks.
pub fn small_run_config(seed: u64) -> RunConfig {
    let mut cfg = e2e_config(seed, false);
    cfg.data.train_scenes = 300;
    cfg.data.eval_scenes = 40;
    let block = BlockConfig::new(16, 2, 32).unwrap();
    cfg.model.encoder.block = block.clone();
    cfg.model.decoder.block = block;
    cfg.train.steps = 60;
    cfg.train.log_every = 20;
    cfg.validate().unwrap();
    cfg
}

/// Random modes around a random-walk truth; `tie` quantizes probabilities so
/// that equal confidences are common.
pub fn random_modes(rng: &mut ChaCha8Rng, n: usize, steps: usize, spread: f64, tie: bool) -> (Modes, Vec<[f64; 2]>) {
    let gt = random_walk(rng, steps);
    let trajs = (0..n)
        .map(|_| {
            let s = rng.gen_range(0.0..spread);
            gt.iter()
                .map(|p| [p[0] + rng.gen_range(-s..=s), p[1] + rng.gen_range(-s..=s)])
                .collect()
        })
        .collect();
    let mut probs: Vec<f64> = (0..n)
        .map(|_| if tie { rng.gen_range(1..4) as f64 } else { rng.gen_range(0.01..1.0) })
        .collect();
    let total: f64 = probs.iter().sum();
    probs.iter_mut().for_each(|p| *p /= total);
    (Modes { probs, trajs }, gt)
}

pub fn random_walk(rng: &mut ChaCha8Rng, steps: usize) -> Vec<[f64; 2]> {
    let mut p = [rng.gen_range(-5.0..5.0), rng.gen_range(-5.0..5.0)];
    let v = [rng.gen_range(-2.0..2.0), rng.gen_range(-2.0..2.0)];
    (0..steps)
        .map(|_| {
            p = [p[0] + v[0] + rng.gen_range(-0.5..0.5), p[1] + v[1] + rng.gen_range(-0.5..0.5)];
            p
        })
        .collect()
}
