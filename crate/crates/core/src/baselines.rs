//! Single-level comparison models. They observe the first two thirds of a
//! sequence and predict the last third.

use std::f64::consts::FRAC_PI_2;
use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::nn::{
    gaussian_kl, l1_loss, reparameterize, standard_normal, GaussianCode, MlpConfig, MlpParams, OutputActivation,
};
use crate::optim::AdamState;
use crate::training::{epoch_batches, Batch, EpochAccumulator, LossBreakdown, TrainingHistory, Vae2Config};
use crate::vae2::logistic_discriminator;
use crate::worldmodel::Dataset;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "tag", rename_all = "snake_case")]
pub enum BaselineKind {
    Deterministic,
    Cvae,
    VaeGan,
    BetaVae { beta: f64 },
    /// KL weight `sin(progress * pi / 2)`.
    AnnealVae,
}

impl BaselineKind {
    pub const BETA_VAE: BaselineKind = BaselineKind::BetaVae { beta: 2.0 };

    pub fn validate(&self) -> Result<()> {
        match self {
            BaselineKind::BetaVae { beta } if !(*beta > 0.0) => {
                Err(Error::Contract(format!("beta must be positive, got {beta}")))
            }
            _ => Ok(()),
        }
    }

    pub fn is_variational(&self) -> bool {
        !matches!(self, BaselineKind::Deterministic)
    }

    /// Multiplier on the KL term at a point of training.
    pub fn kl_weight(&self, progress: f64) -> f64 {
        match self {
            BaselineKind::Deterministic => 0.0,
            BaselineKind::Cvae | BaselineKind::VaeGan => 1.0,
            BaselineKind::BetaVae { beta } => *beta,
            BaselineKind::AnnealVae => anneal_weight(progress),
        }
    }

    /// Command-line spelling.
    pub fn cli_name(&self) -> &'static str {
        match self {
            BaselineKind::Deterministic => "det",
            BaselineKind::Cvae => "cvae",
            BaselineKind::VaeGan => "vae-gan",
            BaselineKind::BetaVae { .. } => "beta-vae",
            BaselineKind::AnnealVae => "anneal-vae",
        }
    }
}

impl fmt::Display for BaselineKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.cli_name())
    }
}

impl FromStr for BaselineKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "det" | "deterministic" => BaselineKind::Deterministic,
            "cvae" => BaselineKind::Cvae,
            "vae-gan" | "vae_gan" => BaselineKind::VaeGan,
            "beta-vae" | "beta_vae" => BaselineKind::BETA_VAE,
            "anneal-vae" | "anneal_vae" => BaselineKind::AnnealVae,
            _ => return Err(Error::Contract(format!("unknown baseline {s:?}"))),
        })
    }
}

/// `sin(progress * pi / 2)` with progress clamped to `[0, 1]`.
pub fn anneal_weight(progress: f64) -> f64 {
    (progress.clamp(0.0, 1.0) * FRAC_PI_2).sin()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BaselineModel {
    pub kind: BaselineKind,
    pub encoder: Option<MlpParams>,
    pub decoder: MlpParams,
    pub discriminator: Option<MlpParams>,
    pub z_dim: usize,
    pub part_len: usize,
}

impl BaselineModel {
    pub fn new<R: Rng + ?Sized>(kind: BaselineKind, part_len: usize, z_dim: usize, rng: &mut R) -> Result<Self> {
        kind.validate()?;
        if z_dim == 0 {
            return Err(Error::Contract("z_dim must be positive".into()));
        }
        let obs = 2 * part_len;
        let encoder = if kind.is_variational() {
            Some(MlpParams::init(
                MlpConfig::backbone(obs + part_len, 2 * z_dim, OutputActivation::Identity),
                rng,
            )?)
        } else {
            None
        };
        let dec_in = if kind.is_variational() { obs + z_dim } else { obs };
        let decoder = MlpParams::init(MlpConfig::backbone(dec_in, part_len, OutputActivation::Sigmoid), rng)?;
        let discriminator = if kind == BaselineKind::VaeGan {
            Some(MlpParams::init(
                MlpConfig::backbone(part_len, 1, OutputActivation::Identity),
                rng,
            )?)
        } else {
            None
        };
        Ok(Self {
            kind,
            encoder,
            decoder,
            discriminator,
            z_dim,
            part_len,
        })
    }

    /// Named networks in storage order.
    pub fn networks(&self) -> Vec<(&'static str, &MlpParams)> {
        let mut out = Vec::with_capacity(3);
        if let Some(e) = &self.encoder {
            out.push(("encoder", e));
        }
        out.push(("decoder", &self.decoder));
        if let Some(d) = &self.discriminator {
            out.push(("discriminator", d));
        }
        out
    }

    /// Parameters of encoder and decoder, flattened in order.
    pub fn flatten_generator(&self) -> Vec<f64> {
        let mut v = self.encoder.as_ref().map(MlpParams::flatten).unwrap_or_default();
        v.extend(self.decoder.flatten());
        v
    }

    pub fn load_generator(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        if let Some(e) = self.encoder.as_mut() {
            offset += e.load_flat(flat)?;
        }
        offset += self.decoder.load_flat(&flat[offset..])?;
        if offset != flat.len() {
            return Err(Error::Dimension {
                op: "load_generator",
                shapes: vec![vec![offset], vec![flat.len()]],
            });
        }
        Ok(())
    }

    /// `n` futures for one observation `I` (length `2 * part_len`).
    pub fn sample<R: Rng + ?Sized>(&self, observation: &[f64], n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if observation.len() != 2 * self.part_len {
            return Err(Error::Dimension {
                op: "sample_baseline",
                shapes: vec![vec![observation.len()], vec![2 * self.part_len]],
            });
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        if !self.kind.is_variational() {
            let v = self.decoder.eval(&Tensor::from_rows(&[observation])?)?.into_data();
            return Ok(vec![v; n]);
        }
        let z = standard_normal(rng, &[n, self.z_dim]);
        let rows: Vec<Vec<f64>> = z.rows().map(|z| [observation, z].concat()).collect();
        let v = self.decoder.eval(&Tensor::from_rows(&rows)?)?;
        Ok(v.rows().map(<[f64]>::to_vec).collect())
    }
}

pub fn sample_baseline<R: Rng + ?Sized>(
    model: &BaselineModel,
    observation: &[f64],
    n: usize,
    rng: &mut R,
) -> Result<Vec<Vec<f64>>> {
    model.sample(observation, n, rng)
}

pub struct BaselineStep {
    pub loss: LossBreakdown,
    /// Encoder gradients (empty for the deterministic model).
    pub encoder: Vec<Vec<f64>>,
    pub decoder: Vec<Vec<f64>>,
    /// Predicted futures, detached.
    pub prediction: Tensor,
}

/// Loss and encoder/decoder gradients on one batch. `progress` in `[0, 1]`
/// drives the annealing schedule. The discriminator is frozen here.
pub fn baseline_loss<R: Rng + ?Sized>(
    model: &BaselineModel,
    batch: &Batch,
    progress: f64,
    adv_weight: f64,
    rng: &mut R,
) -> Result<BaselineStep> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    let mut tape = Tape::new();
    let obs = tape.constant(batch.joint_observation()?);
    let future = tape.constant(batch.future.clone());
    let dec = model.decoder.bind(&mut tape, true);
    let enc = model.encoder.as_ref().map(|e| e.bind(&mut tape, true));
    let disc = model.discriminator.as_ref().map(|d| d.bind(&mut tape, false));

    let (pred, kl) = match &enc {
        None => (dec.forward(&mut tape, obs)?, None),
        Some(enc) => {
            let x = tape.concat(&[obs, future])?;
            let out = enc.forward(&mut tape, x)?;
            let code = GaussianCode::from_encoder_output(&mut tape, out)?;
            let kl = gaussian_kl(&mut tape, &code)?;
            let z = reparameterize(&mut tape, &code, rng)?;
            let x = tape.concat(&[obs, z])?;
            (dec.forward(&mut tape, x)?, Some(kl))
        }
    };
    let recon = l1_loss(&mut tape, pred, future)?;
    let mut total = recon;
    if let Some(kl) = kl {
        let w = tape.scale(kl, model.kind.kl_weight(progress))?;
        total = tape.add(total, w)?;
    }
    let mut adv_gen = 0.0;
    if let Some(disc) = &disc {
        let logit = disc.forward(&mut tape, pred)?;
        let ls = tape.log_sigmoid(logit)?;
        let m = tape.mean(ls)?;
        let adv = tape.neg(m)?;
        adv_gen = tape.value(adv).item();
        let w = tape.scale(adv, adv_weight)?;
        total = tape.add(total, w)?;
    }

    let loss = LossBreakdown {
        recon_v: tape.value(recon).item(),
        kl_z: kl.map_or(0.0, |k| tape.value(k).item()),
        recon_ie: 0.0,
        adv_gen,
        adv_disc: 0.0,
        total: tape.value(total).item(),
    };
    let prediction = tape.value(pred).clone();
    let mut g = tape.backward(total)?;
    Ok(BaselineStep {
        loss,
        encoder: enc.map(|e| e.grads(&tape, &mut g)).unwrap_or_default(),
        decoder: dec.grads(&tape, &mut g),
        prediction,
    })
}

pub fn init_baseline(kind: BaselineKind, config: &Vae2Config, part_len: usize) -> Result<BaselineModel> {
    BaselineModel::new(kind, part_len, config.z_dim, &mut config.init_rng())
}

/// Same loop, optimizer, and seed protocol as the nested model. The
/// discriminator of the adversarial variant separates dataset futures from
/// predicted ones.
pub fn train_baseline(
    model: BaselineModel,
    dataset: &Dataset,
    config: &Vae2Config,
) -> Result<(BaselineModel, TrainingHistory)> {
    train_baseline_with(model, dataset, config, |_, _| {})
}

pub fn train_baseline_with<F>(
    mut model: BaselineModel,
    dataset: &Dataset,
    config: &Vae2Config,
    mut on_epoch: F,
) -> Result<(BaselineModel, TrainingHistory)>
where
    F: FnMut(usize, &LossBreakdown),
{
    config.validate()?;
    model.kind.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut rng = config.train_rng();
    let adam = config.adam();
    let mut enc_state = model.encoder.as_ref().map(|e| AdamState::new("encoder", e, adam));
    let mut dec_state = AdamState::new("decoder", &model.decoder, adam);
    let mut disc_state = model
        .discriminator
        .as_ref()
        .map(|d| AdamState::new("discriminator", d, adam));
    let mut history = TrainingHistory::default();

    for epoch in 0..config.epochs {
        let progress = epoch as f64 / config.epochs as f64;
        let mut acc = EpochAccumulator::default();
        for (b, idx) in epoch_batches(dataset.train.len(), config.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let batch = Batch::gather(&dataset.train, &idx)?;
            let step = baseline_loss(&model, &batch, progress, config.adv_weight, &mut rng)?;
            let mut loss = step.loss;
            loss.check(epoch, b)?;
            if let (Some(st), Some(enc)) = (enc_state.as_mut(), model.encoder.as_mut()) {
                st.step(enc, &step.encoder)?;
            }
            dec_state.step(&mut model.decoder, &step.decoder)?;
            if let (Some(st), Some(disc)) = (disc_state.as_mut(), model.discriminator.as_mut()) {
                let (d, g) = logistic_discriminator(disc, &batch.future, &step.prediction)?;
                loss.adv_disc = d;
                loss.check(epoch, b)?;
                st.step(disc, &g)?;
            }
            acc.push(&loss);
        }
        let mean = acc.mean();
        on_epoch(epoch, &mean);
        history.epochs.push(mean);
    }
    Ok((model, history))
}
