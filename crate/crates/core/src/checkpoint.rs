//! JSON checkpoints. Floats are written in shortest round-trip form, so a
//! saved model reloads bit for bit and identical models serialize to
//! identical bytes.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::baselines::{init_baseline, train_baseline_with, BaselineKind, BaselineModel};
use crate::error::{Error, Result};
use crate::eval::Predictor;
use crate::nn::{MlpConfig, MlpParams};
use crate::training::{LossBreakdown, TrainingHistory, Vae2Config};
use crate::vae2::{self, Vae2Model, NETWORKS};
use crate::worldmodel::{Dataset, SequenceSample};

pub const FORMAT_VERSION: u32 = 1;
pub const CHECKPOINT_FILE: &str = "checkpoint.json";
pub const HISTORY_FILE: &str = "history.csv";

#[derive(Clone, Debug, PartialEq)]
pub enum TrainedModel {
    Vae2(Vae2Model),
    Baseline(BaselineModel),
}

impl TrainedModel {
    /// Command-line spelling of the model family.
    pub fn name(&self) -> &'static str {
        match self {
            TrainedModel::Vae2(_) => "vae2",
            TrainedModel::Baseline(b) => b.kind.cli_name(),
        }
    }

    pub fn part_len(&self) -> usize {
        match self {
            TrainedModel::Vae2(m) => m.part_len,
            TrainedModel::Baseline(m) => m.part_len,
        }
    }

    /// Length of the vector `sample` conditions on.
    pub fn input_len(&self) -> usize {
        match self {
            TrainedModel::Vae2(m) => m.part_len,
            TrainedModel::Baseline(m) => 2 * m.part_len,
        }
    }

    /// Futures conditioned on the model's own input slice.
    pub fn sample(&self, input: &[f64], n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Vec<f64>>> {
        match self {
            TrainedModel::Vae2(m) => m.sample_predictions(input, n, rng),
            TrainedModel::Baseline(m) => m.sample(input, n, rng),
        }
    }

    fn networks(&self) -> Vec<(&'static str, &MlpParams)> {
        match self {
            TrainedModel::Vae2(m) => m.networks().to_vec(),
            TrainedModel::Baseline(m) => m.networks(),
        }
    }
}

impl Predictor for TrainedModel {
    fn future_len(&self) -> usize {
        self.part_len()
    }

    fn predict(&self, sample: &SequenceSample, n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Vec<f64>>> {
        match self {
            TrainedModel::Vae2(m) => m.predict(sample, n, rng),
            TrainedModel::Baseline(m) => m.predict(sample, n, rng),
        }
    }
}

/// Which model family to train.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ModelKind {
    Vae2,
    Baseline(BaselineKind),
}

impl fmt::Display for ModelKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ModelKind::Vae2 => f.write_str("vae2"),
            ModelKind::Baseline(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for ModelKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "vae2" => Ok(ModelKind::Vae2),
            other => Ok(ModelKind::Baseline(other.parse()?)),
        }
    }
}

/// Initializes and trains one model on `dataset` with `config`.
pub fn train_model<F>(
    kind: ModelKind,
    dataset: &Dataset,
    config: &Vae2Config,
    on_epoch: F,
) -> Result<(TrainedModel, TrainingHistory)>
where
    F: FnMut(usize, &LossBreakdown),
{
    let part_len = dataset.config.part_len();
    Ok(match kind {
        ModelKind::Vae2 => {
            let (m, h) = vae2::train_with(vae2::init_model(config, part_len)?, dataset, config, on_epoch)?;
            (TrainedModel::Vae2(m), h)
        }
        ModelKind::Baseline(k) => {
            let (m, h) = train_baseline_with(init_baseline(k, config, part_len)?, dataset, config, on_epoch)?;
            (TrainedModel::Baseline(m), h)
        }
    })
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub model: TrainedModel,
    pub config: Vae2Config,
}

/// `kind` is `vae2` or a baseline tag; `beta` accompanies `beta_vae`.
#[derive(Serialize, Deserialize)]
struct ModelTag {
    kind: String,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    beta: Option<f64>,
}

impl ModelTag {
    fn of(model: &TrainedModel) -> Self {
        let (kind, beta) = match model {
            TrainedModel::Vae2(_) => ("vae2", None),
            TrainedModel::Baseline(m) => match m.kind {
                BaselineKind::Deterministic => ("deterministic", None),
                BaselineKind::Cvae => ("cvae", None),
                BaselineKind::VaeGan => ("vae_gan", None),
                BaselineKind::BetaVae { beta } => ("beta_vae", Some(beta)),
                BaselineKind::AnnealVae => ("anneal_vae", None),
            },
        };
        Self {
            kind: kind.to_string(),
            beta,
        }
    }

    /// `None` for the nested model.
    fn baseline(&self) -> Result<Option<BaselineKind>> {
        let kind = match (self.kind.as_str(), self.beta) {
            ("vae2", None) => return Ok(None),
            ("beta_vae", Some(beta)) => BaselineKind::BetaVae { beta },
            (k, None) if k != "beta_vae" => k.parse()?,
            (k, b) => return Err(Error::Format(format!("bad model tag {k:?} with beta {b:?}"))),
        };
        kind.validate()?;
        Ok(Some(kind))
    }
}

#[derive(Serialize, Deserialize)]
struct StoredTensor {
    name: String,
    shape: Vec<usize>,
    values: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct StoredNetwork {
    name: String,
    config: MlpConfig,
    params: Vec<StoredTensor>,
}

#[derive(Serialize, Deserialize)]
struct StoredCheckpoint {
    format_version: u32,
    model: ModelTag,
    part_len: usize,
    z_dim: usize,
    config: Vae2Config,
    networks: Vec<StoredNetwork>,
}

fn store(name: &str, p: &MlpParams) -> StoredNetwork {
    StoredNetwork {
        name: name.to_string(),
        config: p.config.clone(),
        params: p
            .names()
            .into_iter()
            .zip(p.tensors())
            .map(|(name, t)| StoredTensor {
                name,
                shape: t.shape().to_vec(),
                values: t.data().to_vec(),
            })
            .collect(),
    }
}

fn restore(stored: StoredNetwork) -> Result<MlpParams> {
    let mut p = MlpParams::zeros(stored.config)?;
    let names = p.names();
    if stored.params.len() != names.len() {
        return Err(Error::Format(format!(
            "network {} has {} tensors, expected {}",
            stored.name,
            stored.params.len(),
            names.len()
        )));
    }
    for ((t, s), name) in p.tensors_mut().zip(stored.params).zip(names) {
        if s.name != name || s.shape != t.shape() {
            return Err(Error::Format(format!(
                "network {}: tensor {} {:?} does not match {} {:?}",
                stored.name,
                s.name,
                s.shape,
                name,
                t.shape()
            )));
        }
        *t = Tensor::new(s.shape, s.values)?;
    }
    Ok(p)
}

impl Checkpoint {
    pub fn to_json(&self) -> Result<String> {
        let (part_len, z_dim) = match &self.model {
            TrainedModel::Vae2(m) => (m.part_len, m.z_dim),
            TrainedModel::Baseline(m) => (m.part_len, m.z_dim),
        };
        let model = ModelTag::of(&self.model);
        let stored = StoredCheckpoint {
            format_version: FORMAT_VERSION,
            model,
            part_len,
            z_dim,
            config: self.config.clone(),
            networks: self.model.networks().into_iter().map(|(n, p)| store(n, p)).collect(),
        };
        let mut s = serde_json::to_string(&stored)?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let stored: StoredCheckpoint = serde_json::from_str(text)?;
        if stored.format_version != FORMAT_VERSION {
            return Err(Error::Format(format!(
                "checkpoint format {} is not supported (expected {FORMAT_VERSION})",
                stored.format_version
            )));
        }
        let mut nets: Vec<(String, MlpParams)> = Vec::new();
        for n in stored.networks {
            let name = n.name.clone();
            nets.push((name, restore(n)?));
        }
        let mut take = |name: &str| -> Option<MlpParams> {
            let i = nets.iter().position(|(n, _)| n == name)?;
            Some(nets.remove(i).1)
        };
        let missing = |name: &str| Error::Format(format!("checkpoint lacks network {name}"));
        let model = match stored.model.baseline()? {
            None => {
                let mut get = |i: usize| take(NETWORKS[i]).ok_or_else(|| missing(NETWORKS[i]));
                TrainedModel::Vae2(Vae2Model {
                    phi: get(0)?,
                    psi: get(1)?,
                    theta: get(2)?,
                    theta_prime: get(3)?,
                    omega: get(4)?,
                    z_dim: stored.z_dim,
                    part_len: stored.part_len,
                })
            }
            Some(kind) => {
                let encoder = take("encoder");
                let decoder = take("decoder").ok_or_else(|| missing("decoder"))?;
                let discriminator = take("discriminator");
                if encoder.is_some() != kind.is_variational()
                    || discriminator.is_some() != (kind == BaselineKind::VaeGan)
                {
                    return Err(Error::Format(format!("network set does not match model {kind}")));
                }
                TrainedModel::Baseline(BaselineModel {
                    kind,
                    encoder,
                    decoder,
                    discriminator,
                    z_dim: stored.z_dim,
                    part_len: stored.part_len,
                })
            }
        };
        if let Some((name, _)) = nets.first() {
            return Err(Error::Format(format!("unexpected network {name}")));
        }
        Ok(Self {
            model,
            config: stored.config,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_json()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn vae2_round_trip_is_exact() {
        let m = Vae2Model::new(10, 8, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let ck = Checkpoint {
            model: TrainedModel::Vae2(m),
            config: Vae2Config::desk(3),
        };
        let text = ck.to_json().unwrap();
        let back = Checkpoint::from_json(&text).unwrap();
        assert_eq!(back, ck);
        assert_eq!(back.to_json().unwrap(), text);
    }

    #[test]
    fn every_baseline_round_trips() {
        for kind in [
            BaselineKind::Deterministic,
            BaselineKind::Cvae,
            BaselineKind::VaeGan,
            BaselineKind::BETA_VAE,
            BaselineKind::AnnealVae,
        ] {
            let m = BaselineModel::new(kind, 10, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
            let ck = Checkpoint {
                model: TrainedModel::Baseline(m),
                config: Vae2Config::default(),
            };
            let back = Checkpoint::from_json(&ck.to_json().unwrap()).unwrap();
            assert_eq!(back, ck, "{kind}");
            assert_eq!(back.model.name(), kind.cli_name());
        }
    }

    #[test]
    fn rejects_unknown_version_and_tampering() {
        let m = BaselineModel::new(BaselineKind::Cvae, 10, 8, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let ck = Checkpoint {
            model: TrainedModel::Baseline(m),
            config: Vae2Config::default(),
        };
        let text = ck.to_json().unwrap();
        let v2 = text.replacen("\"format_version\":1", "\"format_version\":2", 1);
        assert!(matches!(Checkpoint::from_json(&v2), Err(Error::Format(_))));
        let renamed = text.replacen("\"encoder\"", "\"phi\"", 1);
        assert!(Checkpoint::from_json(&renamed).is_err());
        assert!(Checkpoint::from_json("{").is_err());
    }
}
