//! Hyperparameters, mini-batching, and loss bookkeeping shared by every model.

use std::fmt::Write as _;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};
use crate::worldmodel::{format_real, SequenceSample};

/// Training hyperparameters. Every model, baselines included, trains with the
/// same values so comparisons stay apples to apples.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vae2Config {
    /// Weight of the second-level objective.
    pub lambda: f64,
    /// Transition draws per posterior sample.
    pub l_samples: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub batch_size: usize,
    /// Weight of the adversarial term inside the second-level objective.
    pub adv_weight: f64,
    pub z_dim: usize,
    pub seed: u64,
    /// L1 supervision of generated transitions against the ground truth.
    pub aux_weight: f64,
    /// Number of leading epochs during which `aux_weight` applies.
    pub aux_epochs: usize,
}

impl Default for Vae2Config {
    fn default() -> Self {
        Self {
            lambda: 0.02,
            l_samples: 1,
            lr: 1e-3,
            weight_decay: 1e-4,
            epochs: 1000,
            batch_size: 64,
            adv_weight: 0.1,
            z_dim: 8,
            seed: 0,
            aux_weight: 0.0,
            aux_epochs: 0,
        }
    }
}

impl Vae2Config {
    /// Reduced preset: 300 epochs (pair with 2000 sequences).
    pub fn desk(seed: u64) -> Self {
        Self {
            epochs: 300,
            seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0)
            || self.l_samples == 0
            || !(self.lr > 0.0)
            || !(self.weight_decay >= 0.0)
            || self.batch_size == 0
            || self.z_dim == 0
            || !(self.adv_weight >= 0.0)
            || !(self.aux_weight >= 0.0)
        {
            return Err(Error::Contract(format!("invalid training config {self:?}")));
        }
        Ok(())
    }

    pub fn adam(&self) -> crate::optim::AdamConfig {
        crate::optim::AdamConfig {
            lr: self.lr,
            weight_decay: self.weight_decay,
            ..Default::default()
        }
    }

    /// Stream for parameter initialization.
    pub fn init_rng(&self) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(self.seed)
    }

    /// Stream for shuffling, latent noise, and prior draws during training.
    pub fn train_rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(1);
        rng
    }
}

/// Loss terms for one step or one epoch average.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossBreakdown {
    pub recon_v: f64,
    pub kl_z: f64,
    pub recon_ie: f64,
    pub adv_gen: f64,
    pub adv_disc: f64,
    pub total: f64,
}

impl LossBreakdown {
    const TERMS: [&'static str; 6] = ["recon_v", "kl_z", "recon_Ie", "adv_gen", "adv_disc", "total"];

    fn values(&self) -> [f64; 6] {
        [
            self.recon_v,
            self.kl_z,
            self.recon_ie,
            self.adv_gen,
            self.adv_disc,
            self.total,
        ]
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        Self::TERMS
            .into_iter()
            .zip(self.values())
            .find(|(_, v)| !v.is_finite())
    }

    pub fn check(&self, epoch: usize, batch: usize) -> Result<()> {
        match self.non_finite() {
            Some((term, value)) => Err(Error::Training {
                epoch,
                batch,
                term,
                value,
            }),
            None => Ok(()),
        }
    }

    fn add_assign(&mut self, o: &LossBreakdown) {
        self.recon_v += o.recon_v;
        self.kl_z += o.kl_z;
        self.recon_ie += o.recon_ie;
        self.adv_gen += o.adv_gen;
        self.adv_disc += o.adv_disc;
        self.total += o.total;
    }

    fn scaled(&self, c: f64) -> LossBreakdown {
        LossBreakdown {
            recon_v: self.recon_v * c,
            kl_z: self.kl_z * c,
            recon_ie: self.recon_ie * c,
            adv_gen: self.adv_gen * c,
            adv_disc: self.adv_disc * c,
            total: self.total * c,
        }
    }
}

/// Running mean of per-batch losses within an epoch.
#[derive(Default)]
pub(crate) struct EpochAccumulator {
    sum: LossBreakdown,
    n: usize,
}

impl EpochAccumulator {
    pub(crate) fn push(&mut self, b: &LossBreakdown) {
        self.sum.add_assign(b);
        self.n += 1;
    }

    pub(crate) fn mean(&self) -> LossBreakdown {
        if self.n == 0 {
            LossBreakdown::default()
        } else {
            self.sum.scaled(1.0 / self.n as f64)
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub epochs: Vec<LossBreakdown>,
}

impl TrainingHistory {
    pub fn is_empty(&self) -> bool {
        self.epochs.is_empty()
    }

    /// KL term of the final epoch, the collapse diagnostic.
    pub fn final_kl(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.kl_z)
    }

    pub fn kl_trace(&self) -> Vec<f64> {
        self.epochs.iter().map(|e| e.kl_z).collect()
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::from("epoch,recon_v,kl_z,recon_Ie,adv_gen,adv_disc,total\n");
        for (i, e) in self.epochs.iter().enumerate() {
            let _ = write!(out, "{i}");
            for v in e.values() {
                let _ = write!(out, ",{}", format_real(v));
            }
            out.push('\n');
        }
        out
    }

    pub fn from_csv(text: &str) -> Result<Self> {
        let mut lines = text.lines();
        match lines.next() {
            Some("epoch,recon_v,kl_z,recon_Ie,adv_gen,adv_disc,total") => {}
            other => return Err(Error::Format(format!("unexpected history header {other:?}"))),
        }
        let mut epochs = Vec::new();
        for line in lines.filter(|l| !l.is_empty()) {
            let f: Vec<f64> = line
                .split(',')
                .skip(1)
                .map(|s| s.parse::<f64>().map_err(|e| Error::Format(format!("{s:?}: {e}"))))
                .collect::<Result<_>>()?;
            if f.len() != 6 {
                return Err(Error::Format(format!("history row has {} values", f.len())));
            }
            epochs.push(LossBreakdown {
                recon_v: f[0],
                kl_z: f[1],
                recon_ie: f[2],
                adv_gen: f[3],
                adv_disc: f[4],
                total: f[5],
            });
        }
        Ok(Self { epochs })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_csv(&std::fs::read_to_string(path)?)
    }
}

/// Three aligned `(batch, part_len)` matrices.
#[derive(Clone, Debug)]
pub struct Batch {
    pub observed: Tensor,
    pub transition: Tensor,
    pub future: Tensor,
}

impl Batch {
    pub fn gather(samples: &[SequenceSample], indices: &[usize]) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::Contract("empty batch".into()));
        }
        let mut obs = Vec::with_capacity(indices.len());
        let mut tr = Vec::with_capacity(indices.len());
        let mut fut = Vec::with_capacity(indices.len());
        for &i in indices {
            let sp = samples[i].split()?;
            obs.push(sp.observed);
            tr.push(sp.transition);
            fut.push(sp.future);
        }
        Ok(Self {
            observed: Tensor::from_rows(&obs)?,
            transition: Tensor::from_rows(&tr)?,
            future: Tensor::from_rows(&fut)?,
        })
    }

    pub fn len(&self) -> usize {
        self.observed.outer_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Observation of single-level models: observed then transition.
    pub fn joint_observation(&self) -> Result<Tensor> {
        let rows: Vec<Vec<f64>> = self
            .observed
            .rows()
            .zip(self.transition.rows())
            .map(|(a, b)| [a, b].concat())
            .collect();
        Tensor::from_rows(&rows)
    }
}

/// Shuffled mini-batch index lists for one epoch; the last batch may be short.
pub fn epoch_batches<R: Rng + ?Sized>(n: usize, batch_size: usize, rng: &mut R) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(rng);
    order.chunks(batch_size).map(<[usize]>::to_vec).collect()
}

/// `count` rows drawn uniformly (with replacement) from the training set's
/// transition segments.
pub fn sample_transitions<R: Rng + ?Sized>(samples: &[SequenceSample], count: usize, rng: &mut R) -> Result<Tensor> {
    let rows = (0..count)
        .map(|_| {
            let i = rng.gen_range(0..samples.len());
            samples[i].split().map(|s| s.transition.to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    Tensor::from_rows(&rows)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn history_csv_round_trip() {
        let h = TrainingHistory {
            epochs: vec![
                LossBreakdown {
                    recon_v: 0.1,
                    kl_z: 1e-9,
                    recon_ie: 0.3,
                    adv_gen: 0.7,
                    adv_disc: 1.3,
                    total: 0.123_456_789_012_345_67,
                },
                LossBreakdown::default(),
            ],
        };
        let csv = h.to_csv();
        assert!(csv.starts_with("epoch,recon_v,kl_z,recon_Ie,adv_gen,adv_disc,total\n0,"));
        assert_eq!(TrainingHistory::from_csv(&csv).unwrap(), h);
    }

    #[test]
    fn non_finite_term_is_named() {
        let b = LossBreakdown {
            kl_z: f64::NAN,
            ..Default::default()
        };
        match b.check(3, 7) {
            Err(Error::Training { epoch: 3, batch: 7, term: "kl_z", .. }) => {}
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn batches_cover_every_row_once() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let b = epoch_batches(10, 4, &mut rng);
        assert_eq!(b.iter().map(Vec::len).collect::<Vec<_>>(), vec![4, 4, 2]);
        let mut all: Vec<usize> = b.concat();
        all.sort();
        assert_eq!(all, (0..10).collect::<Vec<_>>());
    }
}
