//! Finite-difference checks of the gradients the trainers rely on.
//!
//! Central differences are first taken in f64 on the library's own forward
//! pass. With tens of thousands of coordinates some gradients sit near 1e-8,
//! where f64 rounding in the loss alone exceeds the tolerance, so every
//! coordinate over tolerance is differenced again through the independent
//! double-double forward pass in [`crate::reference`]. A wrong analytic
//! gradient still fails there.

use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{compare_with_central_differences, grad_check, relative_error, GradCheckReport, Tape, Tensor};
use crate::baselines::{baseline_loss, BaselineKind, BaselineModel};
use crate::error::{Error, Result};
use crate::nn::{gaussian_kl, l1_loss, standard_normal, GaussianCode, MlpConfig, MlpParams, OutputActivation};
use crate::reference::{self, central_difference_dd, Dd};
use crate::training::{Batch, Vae2Config};
use crate::vae2::{vae2_loss, vae2_loss_value, Vae2Model};
use crate::worldmodel::{build_dataset, WorldConfig};

pub const STEP: f64 = 1e-6;
pub const TOLERANCE: f64 = 1e-5;
/// Items per batch in the model-level checks.
pub const BATCH: usize = 4;
/// Agreement required between the library loss and the reference pass.
const ORACLE_AGREEMENT: f64 = 1e-10;

/// Re-differences every coordinate over tolerance with `precise`.
pub fn refine<F>(report: &mut GradCheckReport, point: &[f64], step: f64, mut precise: F) -> Result<()>
where
    F: FnMut(&[Dd]) -> Result<Dd>,
{
    let mut worst = (0.0, 0);
    for i in 0..point.len() {
        let mut err = relative_error(report.analytic[i], report.numeric[i]);
        if err > TOLERANCE || err.is_nan() {
            report.numeric[i] = central_difference_dd(point, i, step, &mut precise)?;
            report.refined += 1;
            err = relative_error(report.analytic[i], report.numeric[i]);
        }
        if err > worst.0 || err.is_nan() {
            worst = (err, i);
        }
    }
    report.max_relative_error = worst.0;
    report.worst_index = worst.1;
    Ok(())
}

/// The reference pass must reproduce the library loss before it is trusted.
fn agree(library: f64, oracle: f64) -> Result<()> {
    if (library - oracle).abs() > ORACLE_AGREEMENT * library.abs().max(1.0) {
        return Err(Error::Evaluation(format!(
            "reference loss {oracle} disagrees with library loss {library}"
        )));
    }
    Ok(())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum CheckTarget {
    /// Backbone MLP with identity output under an L1 loss.
    Mlp,
    /// Closed-form Gaussian KL with respect to mean and log-variance.
    Kl,
    Vae2,
    Baseline(BaselineKind),
}

impl fmt::Display for CheckTarget {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CheckTarget::Mlp => f.write_str("mlp"),
            CheckTarget::Kl => f.write_str("kl"),
            CheckTarget::Vae2 => f.write_str("vae2"),
            CheckTarget::Baseline(k) => write!(f, "{k}"),
        }
    }
}

impl FromStr for CheckTarget {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Ok(match s {
            "mlp" => CheckTarget::Mlp,
            "kl" => CheckTarget::Kl,
            "vae2" => CheckTarget::Vae2,
            other => CheckTarget::Baseline(other.parse()?),
        })
    }
}

pub fn run(target: CheckTarget, seed: u64) -> Result<GradCheckReport> {
    match target {
        CheckTarget::Mlp => mlp_l1(seed),
        CheckTarget::Kl => kl(seed),
        CheckTarget::Vae2 => vae2(seed),
        CheckTarget::Baseline(kind) => baseline(kind, seed),
    }
}

/// L1 loss of a random backbone MLP (20 inputs, 10 outputs, batch 8) with
/// respect to all of its parameters.
pub fn mlp_l1(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = MlpParams::init(MlpConfig::backbone(20, 10, OutputActivation::Identity), &mut rng)?;
    let x = standard_normal(&mut rng, &[8, 20]);
    let target = Tensor::new(vec![8, 10], (0..80).map(|_| rng.gen_range(-1.0..1.0)).collect())?;
    let value = |p: &MlpParams, trainable: bool| -> Result<(Tape, crate::nn::BoundMlp, crate::autodiff::Var)> {
        let mut tape = Tape::new();
        let net = p.bind(&mut tape, trainable);
        let xi = tape.constant(x.clone());
        let t = tape.constant(target.clone());
        let y = net.forward(&mut tape, xi)?;
        let loss = l1_loss(&mut tape, y, t)?;
        Ok((tape, net, loss))
    };
    let (tape, net, loss) = value(&params, true)?;
    let mut g = tape.backward(loss)?;
    let analytic: Vec<f64> = net.grads(&tape, &mut g).concat();
    let point = params.flatten();
    let config = &params.config;
    agree(
        tape.value(loss).item(),
        reference::mlp_l1_total(config, &point, &x, &target)?,
    )?;
    let mut probe = params.clone();
    let mut report = compare_with_central_differences(
        |flat| {
            probe.load_flat(flat)?;
            let (tape, _, loss) = value(&probe, false)?;
            Ok(tape.value(loss).item())
        },
        &point,
        &analytic,
        STEP,
    )?;
    refine(&mut report, &point, STEP, |p| reference::mlp_l1_total(config, p, &x, &target))?;
    Ok(report)
}

/// Gaussian KL of an 8 x 8 code; the point packs mean then log-variance.
pub fn kl(seed: u64) -> Result<GradCheckReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let point = standard_normal(&mut rng, &[8, 16]);
    grad_check(
        |tape, x| {
            let code = GaussianCode::from_encoder_output(tape, x)?;
            gaussian_kl(tape, &code)
        },
        &point,
        STEP,
    )
}

fn check_batch(seed: u64) -> Result<Batch> {
    let ds = build_dataset(&WorldConfig::with_count(40), seed)?;
    Batch::gather(&ds.train, &(0..BATCH).collect::<Vec<_>>())
}

/// Full merged objective on one batch at random init, with respect to every
/// generator-side parameter. Each evaluation replays the same noise draws.
pub fn vae2(seed: u64) -> Result<GradCheckReport> {
    let config = Vae2Config {
        seed,
        ..Vae2Config::default()
    };
    let model = Vae2Model::new(10, config.z_dim, &mut config.init_rng())?;
    let batch = check_batch(seed)?;
    let noise = || ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let step = vae2_loss(&model, &batch, &config, &mut noise())?;
    // Same draw order as the objective: reparameterization, then one
    // transition noise per draw.
    let mut rng = noise();
    let rows = batch.observed.outer_len();
    let eps = standard_normal(&mut rng, &[rows, config.z_dim]);
    let draws: Vec<Tensor> = (0..config.l_samples)
        .map(|_| standard_normal(&mut rng, &[rows, config.z_dim]))
        .collect();
    let point = model.flatten_generator();
    let oracle = |p: &[f64]| reference::vae2_total(&model, p, &batch, &config, &eps, &draws);
    agree(step.loss.total, oracle(&point)?)?;
    let mut probe = model.clone();
    let mut report = compare_with_central_differences(
        |flat| {
            probe.load_generator(flat)?;
            Ok(vae2_loss_value(&probe, &batch, &config, &mut noise())?.total)
        },
        &point,
        &step.grads.flatten_generator(),
        STEP,
    )?;
    refine(&mut report, &point, STEP, |p| {
        reference::vae2_total(&model, p, &batch, &config, &eps, &draws)
    })?;
    Ok(report)
}

/// Baseline objective on one batch at random init, midway through annealing.
pub fn baseline(kind: BaselineKind, seed: u64) -> Result<GradCheckReport> {
    let config = Vae2Config {
        seed,
        ..Vae2Config::default()
    };
    let model = BaselineModel::new(kind, 10, config.z_dim, &mut config.init_rng())?;
    let batch = check_batch(seed)?;
    let noise = || ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let step = baseline_loss(&model, &batch, 0.5, config.adv_weight, &mut noise())?;
    let analytic: Vec<f64> = step.encoder.iter().chain(&step.decoder).flatten().copied().collect();
    let eps = kind
        .is_variational()
        .then(|| standard_normal(&mut noise(), &[batch.observed.outer_len(), config.z_dim]));
    let point = model.flatten_generator();
    let adv = config.adv_weight;
    agree(
        step.loss.total,
        reference::baseline_total(&model, &point, &batch, 0.5, adv, eps.as_ref())?,
    )?;
    let mut probe = model.clone();
    let mut report = compare_with_central_differences(
        |flat| {
            probe.load_generator(flat)?;
            Ok(baseline_loss(&probe, &batch, 0.5, adv, &mut noise())?.loss.total)
        },
        &point,
        &analytic,
        STEP,
    )?;
    refine(&mut report, &point, STEP, |p| {
        reference::baseline_total(&model, p, &batch, 0.5, adv, eps.as_ref())
    })?;
    Ok(report)
}
