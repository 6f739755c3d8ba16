//! Multi-layer perceptrons and the probabilistic loss atoms shared by every model.

use rand::Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Width of both hidden layers in every network.
pub const HIDDEN: [usize; 2] = [128, 128];

/// `logvar` is clamped to this range before exponentiation.
pub const LOGVAR_MIN: f64 = -30.0;
pub const LOGVAR_MAX: f64 = 30.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputActivation {
    Identity,
    Sigmoid,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MlpConfig {
    pub in_dim: usize,
    pub hidden_dims: Vec<usize>,
    pub out_dim: usize,
    pub output_activation: OutputActivation,
}

impl MlpConfig {
    /// Two hidden layers of 128 units, ReLU after each.
    pub fn backbone(in_dim: usize, out_dim: usize, output_activation: OutputActivation) -> Self {
        Self {
            in_dim,
            hidden_dims: HIDDEN.to_vec(),
            out_dim,
            output_activation,
        }
    }

    pub fn layer_dims(&self) -> Vec<usize> {
        let mut dims = Vec::with_capacity(self.hidden_dims.len() + 2);
        dims.push(self.in_dim);
        dims.extend_from_slice(&self.hidden_dims);
        dims.push(self.out_dim);
        dims
    }

    pub fn validate(&self) -> Result<()> {
        if self.in_dim == 0 || self.out_dim == 0 || self.hidden_dims.contains(&0) {
            return Err(Error::Contract(format!("invalid MLP config {self:?}")));
        }
        Ok(())
    }
}

/// Weights of layer `l` are `(dim_l, dim_{l+1})`, biases `(dim_{l+1})`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MlpParams {
    pub config: MlpConfig,
    pub weights: Vec<Tensor>,
    pub biases: Vec<Tensor>,
}

impl MlpParams {
    /// He-normal weights (`std = sqrt(2 / fan_in)`) and zero biases.
    pub fn init<R: Rng + ?Sized>(config: MlpConfig, rng: &mut R) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let mut weights = Vec::new();
        let mut biases = Vec::new();
        for pair in dims.windows(2) {
            let (fan_in, fan_out) = (pair[0], pair[1]);
            let normal = Normal::new(0.0, (2.0 / fan_in as f64).sqrt()).expect("positive std");
            let data = (0..fan_in * fan_out).map(|_| normal.sample(rng)).collect();
            weights.push(Tensor::matrix(fan_in, fan_out, data)?);
            biases.push(Tensor::zeros(&[fan_out]));
        }
        Ok(Self {
            config,
            weights,
            biases,
        })
    }

    pub fn zeros(config: MlpConfig) -> Result<Self> {
        config.validate()?;
        let dims = config.layer_dims();
        let weights = dims.windows(2).map(|p| Tensor::zeros(&[p[0], p[1]])).collect();
        let biases = dims.windows(2).map(|p| Tensor::zeros(&[p[1]])).collect();
        Ok(Self {
            config,
            weights,
            biases,
        })
    }

    pub fn param_count(&self) -> usize {
        self.tensors().map(Tensor::len).sum()
    }

    /// Parameters in storage order: `w0, b0, w1, b1, ...`.
    pub fn tensors(&self) -> impl Iterator<Item = &Tensor> {
        self.weights.iter().zip(&self.biases).flat_map(|(w, b)| [w, b])
    }

    pub fn tensors_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.weights
            .iter_mut()
            .zip(self.biases.iter_mut())
            .flat_map(|(w, b)| [w, b])
    }

    /// Names matching [`tensors`](Self::tensors).
    pub fn names(&self) -> Vec<String> {
        (0..self.weights.len())
            .flat_map(|l| [format!("w{l}"), format!("b{l}")])
            .collect()
    }

    /// All parameters flattened in storage order.
    pub fn flatten(&self) -> Vec<f64> {
        self.tensors().flat_map(|t| t.data().iter().copied()).collect()
    }

    /// Overwrites parameters from a flat slice; returns the number consumed.
    pub fn load_flat(&mut self, flat: &[f64]) -> Result<usize> {
        let total = self.param_count();
        if flat.len() < total {
            return Err(Error::Dimension {
                op: "load_flat",
                shapes: vec![vec![total], vec![flat.len()]],
            });
        }
        let mut offset = 0;
        for t in self.tensors_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(offset)
    }

    /// Registers the parameters on `tape`, trainable or frozen.
    pub fn bind(&self, tape: &mut Tape, trainable: bool) -> BoundMlp {
        let vars = self
            .tensors()
            .map(|t| {
                if trainable {
                    tape.leaf(t.clone())
                } else {
                    tape.constant(t.clone())
                }
            })
            .collect();
        BoundMlp {
            vars,
            activation: self.config.output_activation,
            in_dim: self.config.in_dim,
        }
    }

    /// Forward pass without keeping a graph around for the caller.
    pub fn eval(&self, input: &Tensor) -> Result<Tensor> {
        let mut tape = Tape::new();
        let bound = self.bind(&mut tape, false);
        let x = tape.constant(input.clone());
        let y = bound.forward(&mut tape, x)?;
        Ok(tape.value(y).clone())
    }
}

/// An MLP whose parameters live on a tape.
#[derive(Clone, Debug)]
pub struct BoundMlp {
    vars: Vec<Var>,
    activation: OutputActivation,
    in_dim: usize,
}

impl BoundMlp {
    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Affine + ReLU per hidden layer, then the final affine and output activation.
    pub fn forward(&self, tape: &mut Tape, input: Var) -> Result<Var> {
        if tape.value(input).last_dim() != self.in_dim || tape.shape(input).len() != 2 {
            return Err(Error::Dimension {
                op: "mlp_forward",
                shapes: vec![tape.shape(input).to_vec(), vec![self.in_dim]],
            });
        }
        let layers = self.vars.len() / 2;
        let mut h = input;
        for l in 0..layers {
            h = tape.matmul(h, self.vars[2 * l])?;
            h = tape.add_bias(h, self.vars[2 * l + 1])?;
            if l + 1 < layers {
                h = tape.relu(h)?;
            }
        }
        match self.activation {
            OutputActivation::Identity => Ok(h),
            OutputActivation::Sigmoid => tape.sigmoid(h),
        }
    }

    /// Gradients in storage order; zeros when the network was bound frozen.
    pub fn grads(&self, tape: &Tape, grads: &mut Gradients) -> Vec<Vec<f64>> {
        self.vars
            .iter()
            .map(|&v| match grads.take(v) {
                Some(g) => g.into_data(),
                None => vec![0.0; tape.value(v).len()],
            })
            .collect()
    }
}

pub fn mlp_forward(tape: &mut Tape, mlp: &BoundMlp, input: Var) -> Result<Var> {
    mlp.forward(tape, input)
}

/// Diagonal Gaussian over the latent code, one row per batch item.
#[derive(Clone, Copy, Debug)]
pub struct GaussianCode {
    pub mean: Var,
    /// Already clamped to `[LOGVAR_MIN, LOGVAR_MAX]`.
    pub logvar: Var,
}

impl GaussianCode {
    /// Clamps `logvar` and pairs it with `mean`.
    pub fn new(tape: &mut Tape, mean: Var, logvar: Var) -> Result<Self> {
        if tape.shape(mean) != tape.shape(logvar) {
            return Err(Error::Dimension {
                op: "gaussian_code",
                shapes: vec![tape.shape(mean).to_vec(), tape.shape(logvar).to_vec()],
            });
        }
        let logvar = tape.clamp(logvar, LOGVAR_MIN, LOGVAR_MAX)?;
        Ok(Self { mean, logvar })
    }

    /// Splits a `(batch, 2 * z_dim)` encoder output into mean and log-variance.
    pub fn from_encoder_output(tape: &mut Tape, out: Var) -> Result<Self> {
        let width = tape.value(out).last_dim();
        if width % 2 != 0 {
            return Err(Error::Dimension {
                op: "gaussian_code",
                shapes: vec![tape.shape(out).to_vec()],
            });
        }
        let z = width / 2;
        let mean = tape.slice_last(out, 0, z)?;
        let logvar = tape.slice_last(out, z, z)?;
        Self::new(tape, mean, logvar)
    }

    pub fn batch(&self, tape: &Tape) -> usize {
        tape.value(self.mean).outer_len()
    }

    pub fn z_dim(&self, tape: &Tape) -> usize {
        tape.value(self.mean).last_dim()
    }
}

/// `KL(N(mean, exp(logvar)) || N(0, I))`, summed over latent dimensions and
/// averaged over the batch.
pub fn gaussian_kl(tape: &mut Tape, code: &GaussianCode) -> Result<Var> {
    let batch = code.batch(tape);
    let shape = tape.shape(code.mean).to_vec();
    let var = tape.exp(code.logvar)?;
    let mean_sq = tape.mul(code.mean, code.mean)?;
    let t = tape.add(var, mean_sq)?;
    let t = tape.sub(t, code.logvar)?;
    let ones = tape.constant(Tensor::full(&shape, 1.0));
    let t = tape.sub(t, ones)?;
    let s = tape.sum(t)?;
    tape.scale(s, 0.5 / batch as f64)
}

/// Closed-form KL for plain vectors, used where no tape is involved.
pub fn gaussian_kl_value(mean: &[f64], logvar: &[f64]) -> f64 {
    0.5 * mean
        .iter()
        .zip(logvar)
        .map(|(m, lv)| {
            let lv = lv.clamp(LOGVAR_MIN, LOGVAR_MAX);
            lv.exp() + m * m - 1.0 - lv
        })
        .sum::<f64>()
}

pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| StandardNormal.sample(rng)).collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches draw count")
}

/// `z = mean + exp(logvar / 2) * eps` with `eps ~ N(0, I)` held constant.
pub fn reparameterize<R: Rng + ?Sized>(tape: &mut Tape, code: &GaussianCode, rng: &mut R) -> Result<Var> {
    let shape = tape.shape(code.mean).to_vec();
    let eps = tape.constant(standard_normal(rng, &shape));
    let half = tape.scale(code.logvar, 0.5)?;
    let std = tape.exp(half)?;
    let noise = tape.mul(std, eps)?;
    tape.add(code.mean, noise)
}

/// Mean absolute error over all elements.
pub fn l1_loss(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Dimension {
            op: "l1_loss",
            shapes: vec![tape.shape(pred).to_vec(), tape.shape(target).to_vec()],
        });
    }
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.mean(a)
}

/// Mean absolute error per row, shape `(batch, 1)`.
pub fn l1_per_row(tape: &mut Tape, pred: Var, target: Var) -> Result<Var> {
    if tape.shape(pred) != tape.shape(target) {
        return Err(Error::Dimension {
            op: "l1_loss",
            shapes: vec![tape.shape(pred).to_vec(), tape.shape(target).to_vec()],
        });
    }
    let d = tape.sub(pred, target)?;
    let a = tape.abs(d)?;
    tape.mean_last_axis(a)
}

/// Plain L1 between two vectors.
pub fn l1_value(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum::<f64>() / a.len() as f64
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::grad_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn init_is_seeded() {
        let cfg = MlpConfig::backbone(20, 16, OutputActivation::Identity);
        let a = MlpParams::init(cfg.clone(), &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        let b = MlpParams::init(cfg, &mut ChaCha8Rng::seed_from_u64(7)).unwrap();
        assert_eq!(a, b);
        assert!(a.biases.iter().all(|b| b.data().iter().all(|&v| v == 0.0)));
    }

    #[test]
    fn parameter_count() {
        let cfg = MlpConfig::backbone(10, 10, OutputActivation::Identity);
        let p = MlpParams::zeros(cfg).unwrap();
        // (10*128 + 128) + (128*128 + 128) + (128*10 + 10)
        assert_eq!(p.param_count(), 19_210);
        assert_eq!(p.weights[0].shape(), &[10, 128]);
        assert_eq!(p.biases[2].shape(), &[10]);
    }

    #[test]
    fn zero_network_outputs() {
        let x = Tensor::from_rows(&[vec![0.3; 5], vec![-2.0; 5]]).unwrap();
        let sig = MlpParams::zeros(MlpConfig::backbone(5, 3, OutputActivation::Sigmoid)).unwrap();
        assert!(sig.eval(&x).unwrap().data().iter().all(|&v| v == 0.5));
        let id = MlpParams::zeros(MlpConfig::backbone(5, 3, OutputActivation::Identity)).unwrap();
        assert!(id.eval(&x).unwrap().data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn batched_output_shape() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let p = MlpParams::init(MlpConfig::backbone(6, 4, OutputActivation::Identity), &mut rng).unwrap();
        let x = standard_normal(&mut rng, &[4, 6]);
        assert_eq!(p.eval(&x).unwrap().shape(), &[4, 4]);
        let bad = standard_normal(&mut rng, &[4, 5]);
        assert!(matches!(p.eval(&bad), Err(Error::Dimension { .. })));
    }

    #[test]
    fn kl_closed_form_values() {
        for (m, lv, want) in [(0.0, 0.0, 0.0), (1.0, 0.0, 0.5)] {
            let mut tape = Tape::new();
            let mean = tape.constant(Tensor::matrix(1, 1, vec![m]).unwrap());
            let logvar = tape.constant(Tensor::matrix(1, 1, vec![lv]).unwrap());
            let code = GaussianCode::new(&mut tape, mean, logvar).unwrap();
            let kl = gaussian_kl(&mut tape, &code).unwrap();
            assert_eq!(tape.value(kl).item(), want);
            assert_eq!(gaussian_kl_value(&[m], &[lv]), want);
        }
    }

    #[test]
    fn kl_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let point = standard_normal(&mut rng, &[3, 8]);
        let report = grad_check(
            |t, x| {
                let code = GaussianCode::from_encoder_output(t, x)?;
                gaussian_kl(t, &code)
            },
            &point,
            1e-6,
        )
        .unwrap();
        assert!(report.max_relative_error < 1e-6, "{}", report.max_relative_error);
    }

    #[test]
    fn reparameterize_collapses_at_min_logvar() {
        let mut tape = Tape::new();
        let mean = tape.constant(Tensor::matrix(1, 3, vec![0.5, -1.0, 2.0]).unwrap());
        let logvar = tape.constant(Tensor::matrix(1, 3, vec![-1e6; 3]).unwrap());
        let code = GaussianCode::new(&mut tape, mean, logvar).unwrap();
        let z = reparameterize(&mut tape, &code, &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        for (a, b) in tape.value(z).data().iter().zip([0.5, -1.0, 2.0]) {
            assert!((a - b).abs() < 1e-5);
        }
    }

    #[test]
    fn reparameterize_gradient_reaches_code_only() {
        let mut tape = Tape::new();
        let mean = tape.leaf(Tensor::matrix(1, 2, vec![0.1, 0.2]).unwrap());
        let logvar = tape.leaf(Tensor::matrix(1, 2, vec![0.0, 0.4]).unwrap());
        let code = GaussianCode::new(&mut tape, mean, logvar).unwrap();
        let z = reparameterize(&mut tape, &code, &mut ChaCha8Rng::seed_from_u64(9)).unwrap();
        let s = tape.sum(z).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(mean).unwrap().data(), &[1.0, 1.0]);
        assert!(g.get(logvar).unwrap().data().iter().all(|v| *v != 0.0));
    }

    #[test]
    fn l1_examples() {
        let cases: [(&[f64], &[f64], f64); 3] = [
            (&[0.2, 0.4], &[0.2, 0.4], 0.0),
            (&[0.0, 1.0], &[1.0, 0.0], 1.0),
            (&[1.3, 0.8], &[1.0, 0.5], 0.3),
        ];
        for (p, t, want) in cases {
            let mut tape = Tape::new();
            let p = tape.constant(Tensor::vector(p.to_vec()));
            let t = tape.constant(Tensor::vector(t.to_vec()));
            let l = l1_loss(&mut tape, p, t).unwrap();
            assert!((tape.value(l).item() - want).abs() < 1e-15);
        }
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![1.0; 2]));
        let t = tape.constant(Tensor::vector(vec![1.0; 3]));
        assert!(matches!(l1_loss(&mut tape, p, t), Err(Error::Dimension { .. })));
    }
}
