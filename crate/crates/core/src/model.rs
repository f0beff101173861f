//! Encoder plus one or more mixture decoders sharing it.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::aggregate::merge_ensemble;
use crate::attention::Forward;
use crate::decoder::{DecoderConfig, MixtureTrajectory, MixtureVars, TrajectoryDecoder};
use crate::error::{Error, Result};
use crate::fusion::{EncoderConfig, InputShape, SceneEncoder};
use crate::numerics::{Array, ParamStore, Tape};
use crate::scene::Scene;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()?;
        self.decoder.validate()
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        hash_json(self)
    }
}

pub(crate) fn hash_json<T: Serialize>(value: &T) -> String {
    let json = serde_json::to_vec(value).expect("config serializes");
    hex::encode(Sha256::digest(&json))
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub input: InputShape,
    pub params: ParamStore,
    encoder: SceneEncoder,
    decoders: Vec<TrajectoryDecoder>,
}

impl Model {
    /// Fresh parameters drawn from `seed`.
    pub fn new(config: &ModelConfig, input: InputShape, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut params = ParamStore::new();
        let encoder = SceneEncoder::new(&mut params, &config.encoder, input, &mut rng)?;
        let width = config.encoder.block.hidden;
        let decoders = (0..config.decoder.ensemble)
            .map(|i| TrajectoryDecoder::new(&mut params, &format!("decoder.{i}"), &config.decoder, width, &mut rng))
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            config: config.clone(),
            input,
            params,
            encoder,
            decoders,
        })
    }

    pub fn encoder(&self) -> &SceneEncoder {
        &self.encoder
    }

    pub fn decoders(&self) -> &[TrajectoryDecoder] {
        &self.decoders
    }

    /// One mixture per ensemble member.
    pub fn forward(&self, f: &mut Forward, scene: &Scene) -> Result<Vec<MixtureVars>> {
        let enc = self.encoder.encode(f, scene)?;
        self.decoders.iter().map(|d| d.decode(f, &enc)).collect()
    }

    /// Mixtures of every ensemble member for every agent row of `scene`.
    pub fn predict_members(&self, scene: &Scene) -> Result<Vec<MixtureTrajectory>> {
        let mut tape = Tape::new();
        let bound = self.params.bind(&mut tape);
        let mut f = Forward::new(&mut tape, &bound);
        let outs = self.forward(&mut f, scene)?;
        Ok(outs.iter().map(|o| o.values(&f)).collect())
    }

    /// Ensemble members merged into one mixture.
    pub fn predict(&self, scene: &Scene) -> Result<MixtureTrajectory> {
        merge_ensemble(&self.predict_members(scene)?)
    }

    pub fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            config_hash: self.config.hash(),
            config: self.config.clone(),
            input: self.input,
            params: self
                .params
                .iter()
                .map(|(_, name, v)| NamedArray {
                    name: name.to_string(),
                    value: v.clone(),
                })
                .collect(),
        }
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        if ck.config.hash() != ck.config_hash {
            return Err(Error::Data("checkpoint config hash does not match its config".into()));
        }
        let mut model = Self::new(&ck.config, ck.input, 0)?;
        if ck.params.len() != model.params.len() {
            return Err(Error::Data(format!(
                "checkpoint has {} parameters, model has {}",
                ck.params.len(),
                model.params.len()
            )));
        }
        for p in &ck.params {
            let id = model
                .params
                .find(&p.name)
                .ok_or_else(|| Error::Data(format!("unknown parameter {}", p.name)))?;
            let slot = model.params.get_mut(id);
            if slot.shape() != p.value.shape() {
                return Err(Error::Data(format!(
                    "parameter {} has shape {:?}, expected {:?}",
                    p.name,
                    p.value.shape(),
                    slot.shape()
                )));
            }
            *slot = p.value.clone();
        }
        Ok(model)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NamedArray {
    pub name: String,
    #[serde(flatten)]
    pub value: Array,
}

/// Serialized model: configuration, input shape and every parameter.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub config_hash: String,
    pub config: ModelConfig,
    pub input: InputShape,
    pub params: Vec<NamedArray>,
}

impl Checkpoint {
    pub fn save(&self, path: impl AsRef<std::path::Path>) -> Result<()> {
        let path = path.as_ref();
        let text = serde_json::to_string(self).map_err(|e| Error::Data(e.to_string()))?;
        std::fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<std::path::Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))
    }
}
