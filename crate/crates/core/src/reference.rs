//! Forward-only reimplementation of the training objectives over a generic
//! scalar type.
//!
//! It shares no code with the tape. Gradient checks evaluate it in
//! double-double arithmetic to obtain central differences whose rounding
//! error sits far below the tolerance, even for coordinates whose gradient is
//! close to zero.

use std::cmp::Ordering;
use std::ops::{Add, Div, Mul, Neg, Sub};

use crate::autodiff::Tensor;
use crate::baselines::{BaselineKind, BaselineModel};
use crate::error::{Error, Result};
use crate::nn::{MlpConfig, MlpParams, OutputActivation, LOGVAR_MAX, LOGVAR_MIN};
use crate::training::{Batch, Vae2Config};
use crate::vae2::Vae2Model;

pub trait Real:
    Copy + PartialOrd + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn from_f64(x: f64) -> Self;
    fn to_f64(self) -> f64;
    fn exp(self) -> Self;
    fn ln(self) -> Self;

    fn zero() -> Self {
        Self::from_f64(0.0)
    }

    fn abs(self) -> Self {
        if self < Self::zero() {
            -self
        } else {
            self
        }
    }

    fn max(self, o: Self) -> Self {
        if self > o {
            self
        } else {
            o
        }
    }

    fn min(self, o: Self) -> Self {
        if self < o {
            self
        } else {
            o
        }
    }
}

impl Real for f64 {
    fn from_f64(x: f64) -> Self {
        x
    }

    fn to_f64(self) -> f64 {
        self
    }

    fn exp(self) -> Self {
        f64::exp(self)
    }

    fn ln(self) -> Self {
        f64::ln(self)
    }
}

/// Unevaluated sum `hi + lo` carrying about 32 significant digits.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Dd {
    pub hi: f64,
    pub lo: f64,
}

fn two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    let bb = s - a;
    (s, (a - (s - bb)) + (b - bb))
}

fn quick_two_sum(a: f64, b: f64) -> (f64, f64) {
    let s = a + b;
    (s, b - (s - a))
}

#[cfg(target_feature = "fma")]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    let p = a * b;
    (p, a.mul_add(b, -p))
}

// Without hardware fma, `mul_add` is a slow libm call; Dekker's split is exact too.
#[cfg(not(target_feature = "fma"))]
fn two_prod(a: f64, b: f64) -> (f64, f64) {
    fn split(x: f64) -> (f64, f64) {
        let t = 134_217_729.0 * x;
        let hi = t - (t - x);
        (hi, x - hi)
    }
    let p = a * b;
    let (ah, al) = split(a);
    let (bh, bl) = split(b);
    (p, ((ah * bh - p) + ah * bl + al * bh) + al * bl)
}

impl Dd {
    pub const LN_2: Dd = Dd {
        hi: std::f64::consts::LN_2,
        lo: 2.319_046_813_846_299_6e-17,
    };

    pub fn new(hi: f64, lo: f64) -> Self {
        let (hi, lo) = quick_two_sum(hi, lo);
        Self { hi, lo }
    }

    fn scale(self, c: f64) -> Self {
        Self {
            hi: self.hi * c,
            lo: self.lo * c,
        }
    }
}

impl PartialOrd for Dd {
    fn partial_cmp(&self, o: &Self) -> Option<Ordering> {
        match self.hi.partial_cmp(&o.hi)? {
            Ordering::Equal => self.lo.partial_cmp(&o.lo),
            ord => Some(ord),
        }
    }
}

impl Add for Dd {
    type Output = Dd;

    fn add(self, o: Dd) -> Dd {
        let (s, e) = two_sum(self.hi, o.hi);
        let (t, f) = two_sum(self.lo, o.lo);
        let (s, e) = quick_two_sum(s, e + t);
        let (hi, lo) = quick_two_sum(s, e + f);
        Dd { hi, lo }
    }
}

impl Neg for Dd {
    type Output = Dd;

    fn neg(self) -> Dd {
        Dd {
            hi: -self.hi,
            lo: -self.lo,
        }
    }
}

impl Sub for Dd {
    type Output = Dd;

    fn sub(self, o: Dd) -> Dd {
        self + (-o)
    }
}

impl Mul for Dd {
    type Output = Dd;

    fn mul(self, o: Dd) -> Dd {
        let (p, e) = two_prod(self.hi, o.hi);
        let e = e + (self.hi * o.lo + self.lo * o.hi);
        let (hi, lo) = quick_two_sum(p, e);
        Dd { hi, lo }
    }
}

impl Div for Dd {
    type Output = Dd;

    fn div(self, o: Dd) -> Dd {
        let q1 = self.hi / o.hi;
        let r = self - o * Dd::from_f64(q1);
        let q2 = r.hi / o.hi;
        let r = r - o * Dd::from_f64(q2);
        let q3 = r.hi / o.hi;
        let (hi, lo) = quick_two_sum(q1, q2);
        Dd { hi, lo } + Dd::from_f64(q3)
    }
}

impl Real for Dd {
    fn from_f64(x: f64) -> Self {
        Dd { hi: x, lo: 0.0 }
    }

    fn to_f64(self) -> f64 {
        self.hi + self.lo
    }

    fn exp(self) -> Self {
        if self.hi > 709.0 {
            return Dd::from_f64(f64::INFINITY);
        }
        if self.hi < -745.0 {
            return Dd::zero();
        }
        // x = k ln 2 + r, then exp(r) = exp(r / 1024)^1024.
        let k = (self.hi / std::f64::consts::LN_2).round();
        let r = (self - Dd::LN_2 * Dd::from_f64(k)).scale(1.0 / 1024.0);
        let mut term = Dd::from_f64(1.0);
        let mut sum = term;
        for n in 1..=14 {
            term = term * r / Dd::from_f64(n as f64);
            sum = sum + term;
        }
        for _ in 0..10 {
            sum = sum * sum;
        }
        sum.scale(2f64.powi(k as i32))
    }

    fn ln(self) -> Self {
        if !(self.hi > 0.0) {
            return Dd::from_f64(f64::NAN);
        }
        // One Newton step on exp(y) = x from the f64 logarithm.
        let y = Dd::from_f64(self.hi.ln());
        y + self * (-y).exp() - Dd::from_f64(1.0)
    }
}

/// Row-major `(rows, cols)` matrix of reals.
#[derive(Clone, Debug)]
pub struct Mat<T> {
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<T>,
}

impl<T: Real> Mat<T> {
    pub fn from_tensor(t: &Tensor) -> Self {
        Self {
            rows: t.outer_len(),
            cols: t.last_dim(),
            data: t.data().iter().map(|&x| T::from_f64(x)).collect(),
        }
    }

    fn row(&self, r: usize) -> &[T] {
        &self.data[r * self.cols..(r + 1) * self.cols]
    }

    fn concat(parts: &[&Mat<T>]) -> Self {
        let rows = parts[0].rows;
        let cols = parts.iter().map(|p| p.cols).sum();
        let mut data = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            for p in parts {
                data.extend_from_slice(p.row(r));
            }
        }
        Self { rows, cols, data }
    }

    fn columns(&self, start: usize, len: usize) -> Self {
        let data = (0..self.rows)
            .flat_map(|r| self.row(r)[start..start + len].to_vec())
            .collect();
        Self {
            rows: self.rows,
            cols: len,
            data,
        }
    }

    fn map(&self, f: impl Fn(T) -> T) -> Self {
        Self {
            rows: self.rows,
            cols: self.cols,
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    let one = T::from_f64(1.0);
    one / (one + (-x).exp())
}

fn log_sigmoid<T: Real>(x: T) -> T {
    x.min(T::zero()) - (T::from_f64(1.0) + (-x.abs()).exp()).ln()
}

fn mean<T: Real>(xs: &[T]) -> T {
    let mut acc = T::zero();
    for &x in xs {
        acc = acc + x;
    }
    acc / T::from_f64(xs.len() as f64)
}

fn mean_abs_diff<T: Real>(a: &[T], b: &[T]) -> T {
    let d: Vec<T> = a.iter().zip(b).map(|(&x, &y)| (x - y).abs()).collect();
    mean(&d)
}

/// An MLP forward pass over parameters laid out as `MlpParams::flatten`.
pub fn mlp_forward<T: Real>(config: &MlpConfig, params: &[T], input: &Mat<T>) -> Result<Mat<T>> {
    if input.cols != config.in_dim {
        return Err(Error::Dimension {
            op: "reference_mlp",
            shapes: vec![vec![input.rows, input.cols], vec![config.in_dim]],
        });
    }
    let dims = config.layer_dims();
    let mut x = input.clone();
    let mut offset = 0;
    let layers = dims.len() - 1;
    for (l, pair) in dims.windows(2).enumerate() {
        let (fan_in, fan_out) = (pair[0], pair[1]);
        let w = &params[offset..offset + fan_in * fan_out];
        let b = &params[offset + fan_in * fan_out..offset + fan_in * fan_out + fan_out];
        offset += fan_in * fan_out + fan_out;
        let mut out = Vec::with_capacity(x.rows * fan_out);
        for r in 0..x.rows {
            let row = x.row(r);
            for j in 0..fan_out {
                let mut acc = b[j];
                for i in 0..fan_in {
                    acc = acc + row[i] * w[i * fan_out + j];
                }
                let last = l + 1 == layers;
                out.push(match (last, config.output_activation) {
                    (false, _) => acc.max(T::zero()),
                    (true, OutputActivation::Identity) => acc,
                    (true, OutputActivation::Sigmoid) => sigmoid(acc),
                });
            }
        }
        x = Mat {
            rows: x.rows,
            cols: fan_out,
            data: out,
        };
    }
    Ok(x)
}

fn param_count(config: &MlpConfig) -> usize {
    config.layer_dims().windows(2).map(|p| p[0] * p[1] + p[1]).sum()
}

/// Splits a flat generator vector into per-network slices.
fn split<'a, T>(flat: &'a [T], configs: &[&MlpConfig]) -> Result<Vec<&'a [T]>> {
    let total: usize = configs.iter().map(|c| param_count(c)).sum();
    if flat.len() != total {
        return Err(Error::Dimension {
            op: "reference_split",
            shapes: vec![vec![flat.len()], vec![total]],
        });
    }
    let mut out = Vec::with_capacity(configs.len());
    let mut offset = 0;
    for c in configs {
        let n = param_count(c);
        out.push(&flat[offset..offset + n]);
        offset += n;
    }
    Ok(out)
}

fn lift<T: Real>(p: &MlpParams) -> Vec<T> {
    p.flatten().into_iter().map(T::from_f64).collect()
}

/// Mean and clamped log-variance, KL, and the reparameterized code.
fn latent<T: Real>(out: &Mat<T>, eps: &Mat<T>) -> (T, Mat<T>) {
    let z = out.cols / 2;
    let m = out.columns(0, z);
    let lv = out
        .columns(z, z)
        .map(|x| x.max(T::from_f64(LOGVAR_MIN)).min(T::from_f64(LOGVAR_MAX)));
    let one = T::from_f64(1.0);
    let mut kl = T::zero();
    for (&mi, &li) in m.data.iter().zip(&lv.data) {
        kl = kl + (li.exp() + mi * mi - li - one);
    }
    let kl = kl * T::from_f64(0.5) / T::from_f64(out.rows as f64);
    let code = Mat {
        rows: m.rows,
        cols: z,
        data: m
            .data
            .iter()
            .zip(&lv.data)
            .zip(&eps.data)
            .map(|((&mi, &li), &e)| mi + (li * T::from_f64(0.5)).exp() * e)
            .collect(),
    };
    (kl, code)
}

/// Merged objective of the nested model. `generator` packs `phi, psi, theta,
/// theta_prime`; `omega` is taken from `model`. `eps` is the reparameterization
/// draw and `noise[l]` the transition noise of draw `l`.
pub fn vae2_total<T: Real>(
    model: &Vae2Model,
    generator: &[T],
    batch: &Batch,
    config: &Vae2Config,
    eps: &Tensor,
    noise: &[Tensor],
) -> Result<T> {
    let nets = split(
        generator,
        &[&model.phi.config, &model.psi.config, &model.theta.config, &model.theta_prime.config],
    )?;
    let omega: Vec<T> = lift(&model.omega);
    let obs = Mat::<T>::from_tensor(&batch.observed);
    let fut = Mat::<T>::from_tensor(&batch.future);
    let out = mlp_forward(&model.phi.config, nets[0], &Mat::concat(&[&obs, &fut]))?;
    let (kl, z) = latent(&out, &Mat::from_tensor(eps));

    let rows = obs.rows;
    let mut row_l1: Vec<Vec<T>> = Vec::new();
    let mut recon_ie = Vec::new();
    let mut adv = Vec::new();
    let mut first = None;
    for n in noise {
        let s = mlp_forward(&model.psi.config, nets[1], &Mat::concat(&[&obs, &z, &Mat::from_tensor(n)]))?;
        let sz = Mat::concat(&[&s, &z]);
        let v_hat = mlp_forward(&model.theta.config, nets[2], &sz)?;
        let e_hat = mlp_forward(&model.theta_prime.config, nets[3], &sz)?;
        row_l1.push((0..rows).map(|r| mean_abs_diff(v_hat.row(r), fut.row(r))).collect());
        recon_ie.push(mean_abs_diff(&e_hat.data, &obs.data));
        let logits = mlp_forward(&model.omega.config, &omega, &s)?;
        let ls: Vec<T> = logits.data.iter().map(|&x| log_sigmoid(x)).collect();
        adv.push(-mean(&ls));
        first.get_or_insert(s);
    }
    let recon_v = if noise.len() == 1 {
        mean(&row_l1[0])
    } else {
        let l = T::from_f64(noise.len() as f64);
        let per_row: Vec<T> = (0..rows)
            .map(|r| {
                let mut acc = T::zero();
                for d in &row_l1 {
                    acc = acc + (-d[r]).exp();
                }
                (acc / l).ln()
            })
            .collect();
        -mean(&per_row)
    };
    let second = mean(&recon_ie) + T::from_f64(config.adv_weight) * mean(&adv);
    let mut total = recon_v + kl + T::from_f64(config.lambda) * second;
    if config.aux_weight > 0.0 {
        let s = first.expect("at least one draw");
        let gt = Mat::<T>::from_tensor(&batch.transition);
        total = total + T::from_f64(config.aux_weight) * mean_abs_diff(&s.data, &gt.data);
    }
    Ok(total)
}

/// Objective of a single-level model. `generator` packs encoder (if any) then
/// decoder; the discriminator is taken from `model`.
pub fn baseline_total<T: Real>(
    model: &BaselineModel,
    generator: &[T],
    batch: &Batch,
    progress: f64,
    adv_weight: f64,
    eps: Option<&Tensor>,
) -> Result<T> {
    let obs = Mat::<T>::from_tensor(&batch.joint_observation()?);
    let fut = Mat::<T>::from_tensor(&batch.future);
    let (pred, kl) = match &model.encoder {
        None => (mlp_forward(&model.decoder.config, generator, &obs)?, None),
        Some(enc) => {
            let nets = split(generator, &[&enc.config, &model.decoder.config])?;
            let out = mlp_forward(&enc.config, nets[0], &Mat::concat(&[&obs, &fut]))?;
            let eps = eps.ok_or_else(|| Error::Contract("variational baseline needs a noise draw".into()))?;
            let (kl, z) = latent(&out, &Mat::from_tensor(eps));
            (mlp_forward(&model.decoder.config, nets[1], &Mat::concat(&[&obs, &z]))?, Some(kl))
        }
    };
    let mut total = mean_abs_diff(&pred.data, &fut.data);
    if let Some(kl) = kl {
        total = total + T::from_f64(model.kind.kl_weight(progress)) * kl;
    }
    if let (BaselineKind::VaeGan, Some(d)) = (model.kind, &model.discriminator) {
        let logits = mlp_forward(&d.config, &lift::<T>(d), &pred)?;
        let ls: Vec<T> = logits.data.iter().map(|&x| log_sigmoid(x)).collect();
        total = total + T::from_f64(adv_weight) * (-mean(&ls));
    }
    Ok(total)
}

/// L1 loss of an MLP with flat parameters against a fixed target.
pub fn mlp_l1_total<T: Real>(config: &MlpConfig, params: &[T], input: &Tensor, target: &Tensor) -> Result<T> {
    let y = mlp_forward(config, params, &Mat::from_tensor(input))?;
    Ok(mean_abs_diff(&y.data, &Mat::<T>::from_tensor(target).data))
}

/// Central difference of `f` in coordinate `i`, with the perturbed point
/// formed exactly in double-double.
pub fn central_difference_dd<F>(point: &[f64], i: usize, step: f64, mut f: F) -> Result<f64>
where
    F: FnMut(&[Dd]) -> Result<Dd>,
{
    let mut x: Vec<Dd> = point.iter().map(|&v| Dd::from_f64(v)).collect();
    x[i] = Dd::from_f64(point[i]) + Dd::from_f64(step);
    let plus = f(&x)?;
    x[i] = Dd::from_f64(point[i]) - Dd::from_f64(step);
    let minus = f(&x)?;
    Ok(((plus - minus) / Dd::from_f64(2.0 * step)).to_f64())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dd_arithmetic_beats_f64() {
        let third = Dd::from_f64(1.0) / Dd::from_f64(3.0);
        let back = third * Dd::from_f64(3.0) - Dd::from_f64(1.0);
        assert!(back.to_f64().abs() < 1e-31);
        let tiny = Dd::from_f64(1.0) + Dd::from_f64(1e-20) - Dd::from_f64(1.0);
        assert!((tiny.to_f64() - 1e-20).abs() < 1e-35);
    }

    #[test]
    fn dd_exp_and_ln() {
        for x in [-20.0, -1.0, -1e-3, 0.0, 0.5, 1.0, 3.7, 40.0] {
            let e = Dd::from_f64(x).exp();
            assert!((e.to_f64() / x.exp() - 1.0).abs() < 1e-15, "exp({x})");
            let back = e.ln() - Dd::from_f64(x);
            assert!(back.to_f64().abs() < 1e-28 * x.abs().max(1.0), "ln(exp({x})) off by {back:?}");
        }
        // e to 28 digits; the squarings after range reduction cost about ten bits.
        let e = Dd::from_f64(1.0).exp();
        let want = Dd::new(std::f64::consts::E, 1.445_646_891_729_250_2e-16);
        assert!((e - want).to_f64().abs() < 1e-28, "{e:?} vs {want:?}");
    }

    #[test]
    fn dd_ordering() {
        let a = Dd::new(1.0, 1e-20);
        assert!(a > Dd::from_f64(1.0));
        assert_eq!(Dd::from_f64(-2.0).abs(), Dd::from_f64(2.0));
        assert_eq!(log_sigmoid(Dd::from_f64(0.0)).to_f64(), -std::f64::consts::LN_2);
    }
}
