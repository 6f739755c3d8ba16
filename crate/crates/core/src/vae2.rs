//! The nested variational predictor.
//!
//! Five networks share the two-hidden-layer backbone:
//!
//! * `phi`: `observed ‖ future → (mean ‖ logvar)` of the latent code,
//! * `psi`: `observed ‖ z ‖ noise → transition` (sigmoid output),
//! * `theta`: `transition ‖ z → future` (sigmoid output),
//! * `theta_prime`: `transition ‖ z → observed` (sigmoid output),
//! * `omega`: `transition → logit`, the discriminator on transitions.
//!
//! One training step minimizes
//! `recon_v + kl_z + lambda * (recon_Ie + adv_weight * adv_gen)` over the first
//! four networks and then takes one logistic discriminator step on `omega`.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::nn::{
    gaussian_kl, l1_loss, l1_per_row, reparameterize, standard_normal, BoundMlp, GaussianCode, MlpConfig,
    MlpParams, OutputActivation,
};
use crate::optim::AdamState;
use crate::training::{
    epoch_batches, sample_transitions, Batch, EpochAccumulator, LossBreakdown, TrainingHistory, Vae2Config,
};
use crate::worldmodel::Dataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Vae2Model {
    pub phi: MlpParams,
    pub psi: MlpParams,
    pub theta: MlpParams,
    pub theta_prime: MlpParams,
    pub omega: MlpParams,
    pub z_dim: usize,
    /// Length of each sequence segment.
    pub part_len: usize,
}

/// Network names in storage order.
pub const NETWORKS: [&str; 5] = ["phi", "psi", "theta", "theta_prime", "omega"];

fn configs(part_len: usize, z_dim: usize) -> [MlpConfig; 5] {
    use OutputActivation::*;
    [
        MlpConfig::backbone(2 * part_len, 2 * z_dim, Identity),
        MlpConfig::backbone(part_len + 2 * z_dim, part_len, Sigmoid),
        MlpConfig::backbone(part_len + z_dim, part_len, Sigmoid),
        MlpConfig::backbone(part_len + z_dim, part_len, Sigmoid),
        MlpConfig::backbone(part_len, 1, Identity),
    ]
}

impl Vae2Model {
    pub fn new<R: Rng + ?Sized>(part_len: usize, z_dim: usize, rng: &mut R) -> Result<Self> {
        let [a, b, c, d, e] = configs(part_len, z_dim);
        Ok(Self {
            phi: MlpParams::init(a, rng)?,
            psi: MlpParams::init(b, rng)?,
            theta: MlpParams::init(c, rng)?,
            theta_prime: MlpParams::init(d, rng)?,
            omega: MlpParams::init(e, rng)?,
            z_dim,
            part_len,
        })
    }

    /// All-zero weights: every output is constant in its inputs.
    pub fn zeros(part_len: usize, z_dim: usize) -> Result<Self> {
        let [a, b, c, d, e] = configs(part_len, z_dim);
        Ok(Self {
            phi: MlpParams::zeros(a)?,
            psi: MlpParams::zeros(b)?,
            theta: MlpParams::zeros(c)?,
            theta_prime: MlpParams::zeros(d)?,
            omega: MlpParams::zeros(e)?,
            z_dim,
            part_len,
        })
    }

    pub fn networks(&self) -> [(&'static str, &MlpParams); 5] {
        [
            (NETWORKS[0], &self.phi),
            (NETWORKS[1], &self.psi),
            (NETWORKS[2], &self.theta),
            (NETWORKS[3], &self.theta_prime),
            (NETWORKS[4], &self.omega),
        ]
    }

    pub fn networks_mut(&mut self) -> [&mut MlpParams; 5] {
        [
            &mut self.phi,
            &mut self.psi,
            &mut self.theta,
            &mut self.theta_prime,
            &mut self.omega,
        ]
    }

    /// Parameters of `phi, psi, theta, theta_prime`, flattened in order.
    pub fn flatten_generator(&self) -> Vec<f64> {
        self.networks()[..4].iter().flat_map(|(_, p)| p.flatten()).collect()
    }

    pub fn load_generator(&mut self, flat: &[f64]) -> Result<()> {
        let mut offset = 0;
        for net in self.networks_mut().into_iter().take(4) {
            offset += net.load_flat(&flat[offset..])?;
        }
        if offset != flat.len() {
            return Err(Error::Dimension {
                op: "load_generator",
                shapes: vec![vec![offset], vec![flat.len()]],
            });
        }
        Ok(())
    }

    fn bind(&self, tape: &mut Tape, train_generator: bool, train_discriminator: bool) -> BoundVae2 {
        BoundVae2 {
            phi: self.phi.bind(tape, train_generator),
            psi: self.psi.bind(tape, train_generator),
            theta: self.theta.bind(tape, train_generator),
            theta_prime: self.theta_prime.bind(tape, train_generator),
            omega: self.omega.bind(tape, train_discriminator),
            z_dim: self.z_dim,
        }
    }

    fn check_rows(&self, what: &'static str, t: &Tensor, width: usize) -> Result<()> {
        if t.shape().len() != 2 || t.last_dim() != width {
            return Err(Error::Dimension {
                op: what,
                shapes: vec![t.shape().to_vec(), vec![width]],
            });
        }
        Ok(())
    }

    /// Posterior mean and (clamped) log-variance, one row per input row.
    pub fn encode_posterior(&self, observed: &Tensor, future: &Tensor) -> Result<(Tensor, Tensor)> {
        self.check_rows("encode_posterior", observed, self.part_len)?;
        self.check_rows("encode_posterior", future, self.part_len)?;
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false, false);
        let o = tape.constant(observed.clone());
        let f = tape.constant(future.clone());
        let code = net.encode(&mut tape, o, f)?;
        Ok((tape.value(code.mean).clone(), tape.value(code.logvar).clone()))
    }

    /// Draws fresh transition noise and runs `psi`.
    pub fn generate_transition<R: Rng + ?Sized>(&self, observed: &Tensor, z: &Tensor, rng: &mut R) -> Result<Tensor> {
        self.check_rows("generate_transition", observed, self.part_len)?;
        self.check_rows("generate_transition", z, self.z_dim)?;
        let mut tape = Tape::new();
        let net = self.bind(&mut tape, false, false);
        let o = tape.constant(observed.clone());
        let z = tape.constant(z.clone());
        let s = net.transition(&mut tape, o, z, rng)?;
        Ok(tape.value(s).clone())
    }

    pub fn decode_future(&self, transition: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.decode_with(&self.theta, "decode_future", transition, z)
    }

    pub fn reconstruct_observation(&self, transition: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.decode_with(&self.theta_prime, "reconstruct_observation", transition, z)
    }

    fn decode_with(&self, net: &MlpParams, what: &'static str, transition: &Tensor, z: &Tensor) -> Result<Tensor> {
        self.check_rows(what, transition, self.part_len)?;
        self.check_rows(what, z, self.z_dim)?;
        let rows: Vec<Vec<f64>> = transition.rows().zip(z.rows()).map(|(a, b)| [a, b].concat()).collect();
        net.eval(&Tensor::from_rows(&rows)?)
    }

    /// `n` futures for one observation: `z` from the prior, then `psi`, then `theta`.
    pub fn sample_predictions<R: Rng + ?Sized>(&self, observed: &[f64], n: usize, rng: &mut R) -> Result<Vec<Vec<f64>>> {
        if observed.len() != self.part_len {
            return Err(Error::Dimension {
                op: "sample_predictions",
                shapes: vec![vec![observed.len()], vec![self.part_len]],
            });
        }
        if n == 0 {
            return Ok(Vec::new());
        }
        let obs = Tensor::from_rows(&vec![observed; n])?;
        let z = standard_normal(rng, &[n, self.z_dim]);
        let s = self.generate_transition(&obs, &z, rng)?;
        let v = self.decode_future(&s, &z)?;
        Ok(v.rows().map(<[f64]>::to_vec).collect())
    }
}

/// Networks registered on one tape.
struct BoundVae2 {
    phi: BoundMlp,
    psi: BoundMlp,
    theta: BoundMlp,
    theta_prime: BoundMlp,
    omega: BoundMlp,
    z_dim: usize,
}

impl BoundVae2 {
    fn encode(&self, tape: &mut Tape, observed: Var, future: Var) -> Result<GaussianCode> {
        let x = tape.concat(&[observed, future])?;
        let out = self.phi.forward(tape, x)?;
        GaussianCode::from_encoder_output(tape, out)
    }

    fn transition<R: Rng + ?Sized>(&self, tape: &mut Tape, observed: Var, z: Var, rng: &mut R) -> Result<Var> {
        let rows = tape.value(observed).outer_len();
        let noise = tape.constant(standard_normal(rng, &[rows, self.z_dim]));
        let x = tape.concat(&[observed, z, noise])?;
        self.psi.forward(tape, x)
    }

    fn decode(&self, tape: &mut Tape, net: &BoundMlp, transition: Var, z: Var) -> Result<Var> {
        let x = tape.concat(&[transition, z])?;
        net.forward(tape, x)
    }
}

/// Per-network gradients in [`NETWORKS`] order.
#[derive(Clone, Debug)]
pub struct Vae2Grads {
    pub nets: [Vec<Vec<f64>>; 5],
}

impl Vae2Grads {
    pub fn flatten_generator(&self) -> Vec<f64> {
        self.nets[..4].iter().flatten().flatten().copied().collect()
    }

    pub fn is_zero(&self, net: usize) -> bool {
        self.nets[net].iter().flatten().all(|&g| g == 0.0)
    }
}

pub struct GeneratorStep {
    pub loss: LossBreakdown,
    pub grads: Vae2Grads,
    /// First transition draw per item, detached.
    pub generated: Tensor,
}

pub struct DiscriminatorStep {
    pub loss: f64,
    pub grads: Vae2Grads,
}

/// Merged objective on one batch, with gradients for the four generator-side
/// networks. `omega` is frozen here and its gradient is zero.
pub fn vae2_loss<R: Rng + ?Sized>(model: &Vae2Model, batch: &Batch, config: &Vae2Config, rng: &mut R) -> Result<GeneratorStep> {
    let (tape, net, total, loss, transition) = build_objective(model, batch, config, true, rng)?;
    let generated = tape.value(transition).clone();
    let mut g = tape.backward(total)?;
    let grads = Vae2Grads {
        nets: [
            net.phi.grads(&tape, &mut g),
            net.psi.grads(&tape, &mut g),
            net.theta.grads(&tape, &mut g),
            net.theta_prime.grads(&tape, &mut g),
            net.omega.grads(&tape, &mut g),
        ],
    };
    Ok(GeneratorStep {
        loss,
        grads,
        generated,
    })
}

/// Loss terms only, with no gradient pass.
pub fn vae2_loss_value<R: Rng + ?Sized>(
    model: &Vae2Model,
    batch: &Batch,
    config: &Vae2Config,
    rng: &mut R,
) -> Result<LossBreakdown> {
    Ok(build_objective(model, batch, config, false, rng)?.3)
}

fn build_objective<R: Rng + ?Sized>(
    model: &Vae2Model,
    batch: &Batch,
    config: &Vae2Config,
    trainable: bool,
    rng: &mut R,
) -> Result<(Tape, BoundVae2, Var, LossBreakdown, Var)> {
    if batch.is_empty() {
        return Err(Error::Contract("empty batch".into()));
    }
    config.validate()?;
    let mut tape = Tape::new();
    let net = model.bind(&mut tape, trainable, false);
    let observed = tape.constant(batch.observed.clone());
    let transition_gt = tape.constant(batch.transition.clone());
    let future = tape.constant(batch.future.clone());

    let code = net.encode(&mut tape, observed, future)?;
    let kl = gaussian_kl(&mut tape, &code)?;
    let z = reparameterize(&mut tape, &code, rng)?;

    let l = config.l_samples;
    let mut row_l1 = Vec::with_capacity(l);
    let mut recon_ie_terms = Vec::with_capacity(l);
    let mut adv_terms = Vec::with_capacity(l);
    let mut first_transition = None;
    for _ in 0..l {
        let s = net.transition(&mut tape, observed, z, rng)?;
        first_transition.get_or_insert(s);
        let v_hat = net.decode(&mut tape, &net.theta, s, z)?;
        let ie_hat = net.decode(&mut tape, &net.theta_prime, s, z)?;
        row_l1.push(l1_per_row(&mut tape, v_hat, future)?);
        recon_ie_terms.push(l1_loss(&mut tape, ie_hat, observed)?);
        let logit = net.omega.forward(&mut tape, s)?;
        let ls = tape.log_sigmoid(logit)?;
        let m = tape.mean(ls)?;
        adv_terms.push(tape.neg(m)?);
    }

    let recon_v = if l == 1 {
        tape.mean(row_l1[0])?
    } else {
        // -log((1/L) sum_i exp(-L1_i)) per item: Laplace likelihoods averaged over draws.
        let mut acc = None;
        for r in &row_l1 {
            let n = tape.neg(*r)?;
            let e = tape.exp(n)?;
            acc = Some(match acc {
                None => e,
                Some(a) => tape.add(a, e)?,
            });
        }
        let avg = tape.scale(acc.unwrap(), 1.0 / l as f64)?;
        let lg = tape.log(avg)?;
        let m = tape.mean(lg)?;
        tape.neg(m)?
    };
    let recon_ie = mean_of(&mut tape, &recon_ie_terms)?;
    let adv_gen = mean_of(&mut tape, &adv_terms)?;

    let second = tape.scale(adv_gen, config.adv_weight)?;
    let second = tape.add(recon_ie, second)?;
    let second = tape.scale(second, config.lambda)?;
    let first = tape.add(recon_v, kl)?;
    let mut total = tape.add(first, second)?;
    let transition = first_transition.expect("l_samples >= 1");
    if config.aux_weight > 0.0 {
        let aux = l1_loss(&mut tape, transition, transition_gt)?;
        let aux = tape.scale(aux, config.aux_weight)?;
        total = tape.add(total, aux)?;
    }

    let loss = LossBreakdown {
        recon_v: tape.value(recon_v).item(),
        kl_z: tape.value(kl).item(),
        recon_ie: tape.value(recon_ie).item(),
        adv_gen: tape.value(adv_gen).item(),
        adv_disc: 0.0,
        total: tape.value(total).item(),
    };
    Ok((tape, net, total, loss, transition))
}

fn mean_of(tape: &mut Tape, terms: &[Var]) -> Result<Var> {
    let mut acc = terms[0];
    for t in &terms[1..] {
        acc = tape.add(acc, *t)?;
    }
    tape.scale(acc, 1.0 / terms.len() as f64)
}

/// Logistic discriminator loss on dataset transitions versus generated ones.
/// Only `omega` receives gradient; `fake` enters as a constant.
pub fn discriminator_loss(model: &Vae2Model, real: &Tensor, fake: &Tensor) -> Result<DiscriminatorStep> {
    let (loss, omega) = logistic_discriminator(&model.omega, real, fake)?;
    let zeros = |p: &MlpParams| p.tensors().map(|t| vec![0.0; t.len()]).collect::<Vec<_>>();
    Ok(DiscriminatorStep {
        loss,
        grads: Vae2Grads {
            nets: [
                zeros(&model.phi),
                zeros(&model.psi),
                zeros(&model.theta),
                zeros(&model.theta_prime),
                omega,
            ],
        },
    })
}

/// `-mean log σ(D(real)) - mean log(1 - σ(D(fake)))` and its gradient on `disc`.
pub fn logistic_discriminator(disc: &MlpParams, real: &Tensor, fake: &Tensor) -> Result<(f64, Vec<Vec<f64>>)> {
    if real.is_empty() || fake.is_empty() {
        return Err(Error::Contract("discriminator batches must be nonempty".into()));
    }
    let mut tape = Tape::new();
    let d = disc.bind(&mut tape, true);
    let r = tape.constant(real.clone());
    let f = tape.constant(fake.clone());
    let lr = d.forward(&mut tape, r)?;
    let lr = tape.log_sigmoid(lr)?;
    let lr = tape.mean(lr)?;
    let lf = d.forward(&mut tape, f)?;
    let lf = tape.neg(lf)?;
    let lf = tape.log_sigmoid(lf)?;
    let lf = tape.mean(lf)?;
    let s = tape.add(lr, lf)?;
    let loss = tape.neg(s)?;
    let value = tape.value(loss).item();
    let mut g = tape.backward(loss)?;
    Ok((value, d.grads(&tape, &mut g)))
}

/// Fresh model initialized from `config.seed`.
pub fn init_model(config: &Vae2Config, part_len: usize) -> Result<Vae2Model> {
    Vae2Model::new(part_len, config.z_dim, &mut config.init_rng())
}

/// Alternating optimization: one generator step then one discriminator step
/// per mini-batch. Records the per-epoch mean of every loss term.
pub fn train(model: Vae2Model, dataset: &Dataset, config: &Vae2Config) -> Result<(Vae2Model, TrainingHistory)> {
    train_with(model, dataset, config, |_, _| {})
}

pub fn train_with<F>(
    mut model: Vae2Model,
    dataset: &Dataset,
    config: &Vae2Config,
    mut on_epoch: F,
) -> Result<(Vae2Model, TrainingHistory)>
where
    F: FnMut(usize, &LossBreakdown),
{
    config.validate()?;
    if dataset.train.is_empty() {
        return Err(Error::Contract("training set is empty".into()));
    }
    let mut rng = config.train_rng();
    let adam = config.adam();
    let mut states: Vec<AdamState> = model
        .networks()
        .iter()
        .map(|(name, p)| AdamState::new(*name, p, adam))
        .collect();
    let mut history = TrainingHistory::default();
    let mut step_config = config.clone();

    for epoch in 0..config.epochs {
        step_config.aux_weight = if epoch < config.aux_epochs { config.aux_weight } else { 0.0 };
        let mut acc = EpochAccumulator::default();
        for (b, idx) in epoch_batches(dataset.train.len(), config.batch_size, &mut rng)
            .into_iter()
            .enumerate()
        {
            let batch = Batch::gather(&dataset.train, &idx)?;
            let step = vae2_loss(&model, &batch, &step_config, &mut rng)?;
            step.loss.check(epoch, b)?;
            for (i, net) in model.networks_mut().into_iter().take(4).enumerate() {
                states[i].step(net, &step.grads.nets[i])?;
            }

            let real = sample_transitions(&dataset.train, batch.len(), &mut rng)?;
            let (disc_loss, omega_grads) = logistic_discriminator(&model.omega, &real, &step.generated)?;
            let mut loss = step.loss;
            loss.adv_disc = disc_loss;
            loss.check(epoch, b)?;
            states[4].step(&mut model.omega, &omega_grads)?;
            acc.push(&loss);
        }
        let mean = acc.mean();
        on_epoch(epoch, &mean);
        history.epochs.push(mean);
    }
    Ok((model, history))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::worldmodel::{build_dataset, WorldConfig};
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn tiny_batch(n: usize, seed: u64) -> Batch {
        let ds = build_dataset(&WorldConfig::with_count(40), seed).unwrap();
        Batch::gather(&ds.train, &(0..n).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn zero_phi_gives_standard_code() {
        let mut m = Vae2Model::new(10, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        m.phi = MlpParams::zeros(m.phi.config.clone()).unwrap();
        let b = tiny_batch(3, 1);
        let (mean, logvar) = m.encode_posterior(&b.observed, &b.future).unwrap();
        assert_eq!(mean.shape(), &[3, 8]);
        assert!(mean.data().iter().chain(logvar.data()).all(|&v| v == 0.0));
    }

    #[test]
    fn encoder_rows_are_independent() {
        let m = Vae2Model::new(10, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = tiny_batch(4, 2);
        let (mean, _) = m.encode_posterior(&b.observed, &b.future).unwrap();
        let single_o = Tensor::from_rows(&[b.observed.row(2)]).unwrap();
        let single_f = Tensor::from_rows(&[b.future.row(2)]).unwrap();
        let (m1, _) = m.encode_posterior(&single_o, &single_f).unwrap();
        assert_eq!(m1.data(), mean.row(2));
        let bad = Tensor::zeros(&[4, 9]);
        assert!(m.encode_posterior(&bad, &b.future).is_err());
    }

    #[test]
    fn transition_is_seeded_and_bounded() {
        let m = Vae2Model::new(10, 8, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        let b = tiny_batch(2, 3);
        let z = standard_normal(&mut ChaCha8Rng::seed_from_u64(1), &[2, 8]);
        let a = m.generate_transition(&b.observed, &z, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let c = m.generate_transition(&b.observed, &z, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        assert_eq!(a, c);
        assert!(a.data().iter().all(|&v| v > 0.0 && v < 1.0));
        assert_eq!(a.shape(), &[2, 10]);
    }

    #[test]
    fn zero_decoders_output_half() {
        let m = Vae2Model::zeros(10, 8).unwrap();
        let s = Tensor::full(&[3, 10], 0.3);
        let z = Tensor::full(&[3, 8], -1.0);
        let v = m.decode_future(&s, &z).unwrap();
        let e = m.reconstruct_observation(&s, &z).unwrap();
        assert_eq!(v.shape(), &[3, 10]);
        assert!(v.data().iter().chain(e.data()).all(|&x| x == 0.5));
    }

    #[test]
    fn lambda_zero_reduces_to_first_level() {
        let m = Vae2Model::new(10, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = tiny_batch(5, 4);
        let cfg = Vae2Config {
            lambda: 0.0,
            ..Vae2Config::default()
        };
        let s = vae2_loss(&m, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(s.loss.total, s.loss.recon_v + s.loss.kl_z);
        assert!(s.grads.is_zero(4));
        assert!(!s.grads.is_zero(0));
    }

    #[test]
    fn discriminator_touches_only_omega() {
        let m = Vae2Model::new(10, 8, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = tiny_batch(5, 4);
        let d = discriminator_loss(&m, &b.transition, &b.future).unwrap();
        for i in 0..4 {
            assert!(d.grads.is_zero(i));
        }
        assert!(!d.grads.is_zero(4));
    }

    #[test]
    fn zero_logit_discriminator_loss_is_two_log_two() {
        let m = Vae2Model::zeros(10, 8).unwrap();
        let b = tiny_batch(4, 6);
        let d = discriminator_loss(&m, &b.transition, &b.future).unwrap();
        assert!((d.loss - 2.0 * std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn zero_model_samples_are_constant() {
        let m = Vae2Model::zeros(10, 8).unwrap();
        let s = m.sample_predictions(&[0.2; 10], 5, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        assert_eq!(s.len(), 5);
        assert!(s.iter().flatten().all(|&v| v == 0.5));
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let ds = build_dataset(&WorldConfig::with_count(30), 0).unwrap();
        let cfg = Vae2Config {
            epochs: 0,
            ..Vae2Config::default()
        };
        let m = init_model(&cfg, 10).unwrap();
        let (trained, h) = train(m.clone(), &ds, &cfg).unwrap();
        assert_eq!(trained, m);
        assert!(h.is_empty());
    }

    #[test]
    fn multi_draw_estimator_runs() {
        let m = Vae2Model::new(10, 4, &mut ChaCha8Rng::seed_from_u64(4)).unwrap();
        let b = tiny_batch(3, 4);
        let cfg = Vae2Config {
            l_samples: 3,
            z_dim: 4,
            ..Vae2Config::default()
        };
        let s = vae2_loss(&m, &b, &cfg, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert!(s.loss.recon_v > 0.0 && s.loss.total.is_finite());
    }
}
