//! Exact checks of the likelihood bounds on small discrete models.
//!
//! An instance is a prior `p(z)` and a conditional table `p(e, s, v | z)`,
//! where `e` is the observation, `s` the transition state and `v` the future.
//! Every other marginal or conditional is derived from those two tables.

use std::io::Write;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Conditioning events at or below this mass are treated as impossible.
pub const MIN_EVENT: f64 = 1e-12;
pub const IDENTITY_TOL: f64 = 1e-9;
/// Smallest and largest size of any variable in a random instance.
pub const MIN_SIZE: usize = 2;
pub const MAX_SIZE: usize = 6;

/// `log(sum(exp(xs)))` with the maximum shifted out.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// `log(sum(ps))` accumulated in log space.
pub fn log_sum(ps: &[f64]) -> f64 {
    log_sum_exp(&ps.iter().map(|p| p.ln()).collect::<Vec<_>>())
}

/// `KL(q || p)` over one finite support. Cells with `q = 0` contribute 0.
pub fn kl_divergence(q: &[f64], p: &[f64]) -> f64 {
    q.iter()
        .zip(p)
        .filter(|(q, _)| **q > 0.0)
        .map(|(q, p)| q * (q.ln() - p.ln()))
        .sum()
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Sizes {
    pub e: usize,
    pub s: usize,
    pub v: usize,
    pub z: usize,
}

impl Sizes {
    pub fn uniform(n: usize) -> Self {
        Self { e: n, s: n, v: n, z: n }
    }

    fn cells(&self) -> usize {
        self.e * self.s * self.v
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Constraints {
    /// `p(v | s, e) = p(v | s)`.
    pub markov: bool,
    /// `p(s | z) = p(s)`.
    pub s_independent_of_z: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiscreteInstance {
    pub sizes: Sizes,
    pub prior_z: Vec<f64>,
    /// `p(e, s, v | z)`, indexed `[z][e][s][v]`, each `z` slice summing to 1.
    pub likelihood_z: Vec<f64>,
}

fn check_distribution(what: &str, p: &[f64]) -> Result<()> {
    if p.iter().any(|x| !(*x >= 0.0) || !x.is_finite()) {
        return Err(Error::Contract(format!("{what} has a negative or non-finite entry")));
    }
    let total: f64 = p.iter().sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::Contract(format!("{what} sums to {total}")));
    }
    Ok(())
}

fn normalized(mut p: Vec<f64>) -> Vec<f64> {
    let total: f64 = p.iter().sum();
    p.iter_mut().for_each(|x| *x /= total);
    p
}

/// Strictly positive random distribution over `n` outcomes.
fn random_distribution<R: Rng + ?Sized>(n: usize, rng: &mut R) -> Vec<f64> {
    normalized((0..n).map(|_| rng.gen_range(0.1..1.0)).collect())
}

impl DiscreteInstance {
    pub fn new(sizes: Sizes, prior_z: Vec<f64>, likelihood_z: Vec<f64>) -> Result<Self> {
        if [sizes.e, sizes.s, sizes.v, sizes.z].contains(&0) {
            return Err(Error::Contract(format!("empty variable in {sizes:?}")));
        }
        if prior_z.len() != sizes.z || likelihood_z.len() != sizes.z * sizes.cells() {
            return Err(Error::Dimension {
                op: "discrete_instance",
                shapes: vec![vec![prior_z.len(), likelihood_z.len()], vec![sizes.z, sizes.z * sizes.cells()]],
            });
        }
        check_distribution("p(z)", &prior_z)?;
        for (z, slice) in likelihood_z.chunks(sizes.cells()).enumerate() {
            check_distribution(&format!("p(e, s, v | z = {z})"), slice)?;
        }
        Ok(Self {
            sizes,
            prior_z,
            likelihood_z,
        })
    }

    /// Instance without latent structure: a single `z` carrying `joint`.
    pub fn from_joint(e: usize, s: usize, v: usize, joint: Vec<f64>) -> Result<Self> {
        Self::new(Sizes { e, s, v, z: 1 }, vec![1.0], joint)
    }

    fn idx(&self, e: usize, s: usize, v: usize) -> usize {
        (e * self.sizes.s + s) * self.sizes.v + v
    }

    /// `p(e, s, v | z)`.
    pub fn lik(&self, z: usize, e: usize, s: usize, v: usize) -> f64 {
        self.likelihood_z[z * self.sizes.cells() + self.idx(e, s, v)]
    }

    /// `p(e, s, v)`, indexed `[e][s][v]`.
    pub fn joint(&self) -> Vec<f64> {
        let cells = self.sizes.cells();
        let mut out = vec![0.0; cells];
        for (pz, slice) in self.prior_z.iter().zip(self.likelihood_z.chunks(cells)) {
            for (o, l) in out.iter_mut().zip(slice) {
                *o += pz * l;
            }
        }
        out
    }

    pub fn p(&self, e: usize, s: usize, v: usize) -> f64 {
        self.prior_z
            .iter()
            .enumerate()
            .map(|(z, pz)| pz * self.lik(z, e, s, v))
            .sum()
    }

    pub fn p_e(&self, e: usize) -> f64 {
        (0..self.sizes.s)
            .flat_map(|s| (0..self.sizes.v).map(move |v| (s, v)))
            .map(|(s, v)| self.p(e, s, v))
            .sum()
    }

    pub fn p_s(&self, s: usize) -> f64 {
        (0..self.sizes.e)
            .flat_map(|e| (0..self.sizes.v).map(move |v| (e, v)))
            .map(|(e, v)| self.p(e, s, v))
            .sum()
    }

    pub fn p_ev(&self, e: usize, v: usize) -> f64 {
        (0..self.sizes.s).map(|s| self.p(e, s, v)).sum()
    }

    pub fn p_es(&self, e: usize, s: usize) -> f64 {
        (0..self.sizes.v).map(|v| self.p(e, s, v)).sum()
    }

    pub fn p_sv(&self, s: usize, v: usize) -> f64 {
        (0..self.sizes.e).map(|e| self.p(e, s, v)).sum()
    }

    /// `p(e | z)`.
    pub fn p_e_given_z(&self, e: usize, z: usize) -> f64 {
        (0..self.sizes.s)
            .flat_map(|s| (0..self.sizes.v).map(move |v| (s, v)))
            .map(|(s, v)| self.lik(z, e, s, v))
            .sum()
    }

    /// `p(s | z)`.
    pub fn p_s_given_z(&self, s: usize, z: usize) -> f64 {
        (0..self.sizes.e)
            .flat_map(|e| (0..self.sizes.v).map(move |v| (e, v)))
            .map(|(e, v)| self.lik(z, e, s, v))
            .sum()
    }

    /// `p(e, s | z)`.
    pub fn p_es_given_z(&self, e: usize, s: usize, z: usize) -> f64 {
        (0..self.sizes.v).map(|v| self.lik(z, e, s, v)).sum()
    }

    /// Largest `|p(v | s, e) - p(v | s)|` over positive conditioning events.
    pub fn markov_violation(&self) -> f64 {
        let mut worst: f64 = 0.0;
        for s in 0..self.sizes.s {
            let ps = self.p_s(s);
            if ps <= MIN_EVENT {
                continue;
            }
            for e in 0..self.sizes.e {
                let pes = self.p_es(e, s);
                if pes <= MIN_EVENT {
                    continue;
                }
                for v in 0..self.sizes.v {
                    worst = worst.max((self.p(e, s, v) / pes - self.p_sv(s, v) / ps).abs());
                }
            }
        }
        worst
    }

    /// Largest `|p(s | z) - p(s)|`.
    pub fn s_dependence_on_z(&self) -> f64 {
        self.dependence_on_z(self.sizes.s, |i, z| self.p_s_given_z(i, z), |i| self.p_s(i))
    }

    /// Largest `|p(e | z) - p(e)|`.
    pub fn e_dependence_on_z(&self) -> f64 {
        self.dependence_on_z(self.sizes.e, |i, z| self.p_e_given_z(i, z), |i| self.p_e(i))
    }

    fn dependence_on_z(&self, n: usize, cond: impl Fn(usize, usize) -> f64, marg: impl Fn(usize) -> f64) -> f64 {
        let mut worst: f64 = 0.0;
        for i in 0..n {
            let m = marg(i);
            for z in 0..self.sizes.z {
                worst = worst.max((cond(i, z) - m).abs());
            }
        }
        worst
    }

    /// Smallest mass among the events the checks divide by.
    fn min_event(&self) -> f64 {
        let n = self.sizes;
        let mut m = f64::INFINITY;
        for e in 0..n.e {
            m = m.min(self.p_e(e));
            for v in 0..n.v {
                m = m.min(self.p_ev(e, v));
            }
            for s in 0..n.s {
                m = m.min(self.p_es(e, s));
            }
        }
        for s in 0..n.s {
            m = m.min(self.p_s(s));
        }
        for z in 0..n.z {
            for e in 0..n.e {
                m = m.min(self.p_e_given_z(e, z));
                for s in 0..n.s {
                    m = m.min(self.p_es_given_z(e, s, z));
                }
            }
            for s in 0..n.s {
                m = m.min(self.p_s_given_z(s, z));
            }
        }
        m
    }
}

/// Draws an instance with the requested constraints. The observation is
/// always independent of `z`, which the evidence decomposition presupposes.
pub fn random_instance<R: Rng + ?Sized>(sizes: Sizes, rng: &mut R, constraints: Constraints) -> Result<DiscreteInstance> {
    for n in [sizes.e, sizes.s, sizes.v, sizes.z] {
        if !(MIN_SIZE..=MAX_SIZE).contains(&n) {
            return Err(Error::Contract(format!("sizes {sizes:?} outside [{MIN_SIZE}, {MAX_SIZE}]")));
        }
    }
    let Sizes { e: ne, s: ns, v: nv, z: nz } = sizes;
    let prior_z = random_distribution(nz, rng);
    let p_e = random_distribution(ne, rng);

    // p(e, s | z) as [z][e][s].
    let mut es = vec![0.0; nz * ne * ns];
    if constraints.s_independent_of_z {
        let p_s = random_distribution(ns, rng);
        let floor = (0..ne)
            .flat_map(|e| p_s.iter().map(|s| s * p_e[e]).collect::<Vec<_>>())
            .fold(f64::INFINITY, f64::min);
        for z in 0..nz {
            // Double-centering keeps both marginals of the slice fixed.
            let raw: Vec<f64> = (0..ne * ns).map(|_| rng.gen_range(-1.0..1.0)).collect();
            let row_mean: Vec<f64> = (0..ne).map(|e| raw[e * ns..(e + 1) * ns].iter().sum::<f64>() / ns as f64).collect();
            let col_mean: Vec<f64> = (0..ns).map(|s| (0..ne).map(|e| raw[e * ns + s]).sum::<f64>() / ne as f64).collect();
            let grand = row_mean.iter().sum::<f64>() / ne as f64;
            let centered: Vec<f64> = (0..ne * ns)
                .map(|i| raw[i] - row_mean[i / ns] - col_mean[i % ns] + grand)
                .collect();
            let peak = centered.iter().fold(0.0_f64, |m, x| m.max(x.abs()));
            let scale = if peak > 0.0 { 0.9 * floor / peak } else { 0.0 };
            for e in 0..ne {
                for s in 0..ns {
                    es[(z * ne + e) * ns + s] = p_e[e] * p_s[s] + scale * centered[e * ns + s];
                }
            }
        }
    } else {
        for z in 0..nz {
            for e in 0..ne {
                let cond = random_distribution(ns, rng);
                for s in 0..ns {
                    es[(z * ne + e) * ns + s] = p_e[e] * cond[s];
                }
            }
        }
    }

    let markov_v: Vec<Vec<f64>> = if constraints.markov {
        (0..ns).map(|_| random_distribution(nv, rng)).collect()
    } else {
        Vec::new()
    };
    let mut lik = Vec::with_capacity(nz * ne * ns * nv);
    for z in 0..nz {
        for e in 0..ne {
            for s in 0..ns {
                let w = es[(z * ne + e) * ns + s];
                let pv = if constraints.markov {
                    markov_v[s].clone()
                } else {
                    random_distribution(nv, rng)
                };
                lik.extend(pv.iter().map(|p| w * p));
            }
        }
    }
    // Renormalize each slice against rounding drift.
    let cells = ne * ns * nv;
    for slice in lik.chunks_mut(cells) {
        let total: f64 = slice.iter().sum();
        slice.iter_mut().for_each(|x| *x /= total);
    }
    let inst = DiscreteInstance::new(sizes, prior_z, lik)?;
    if inst.min_event() <= MIN_EVENT {
        return Err(Error::Degenerate("generated instance has a vanishing conditioning event".into()));
    }
    Ok(inst)
}

/// Conditional table `q(col | row)`, each row a distribution.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct VariationalTable {
    pub rows: usize,
    pub cols: usize,
    pub q: Vec<f64>,
}

impl VariationalTable {
    pub fn new(rows: usize, cols: usize, q: Vec<f64>) -> Result<Self> {
        if q.len() != rows * cols || cols == 0 {
            return Err(Error::Dimension {
                op: "variational_table",
                shapes: vec![vec![q.len()], vec![rows, cols]],
            });
        }
        for (r, row) in q.chunks(cols).enumerate() {
            if row.iter().any(|x| !(*x > 0.0)) {
                return Err(Error::Contract(format!("row {r} of q is not strictly positive")));
            }
            check_distribution(&format!("row {r} of q"), row)?;
        }
        Ok(Self { rows, cols, q })
    }

    pub fn random<R: Rng + ?Sized>(rows: usize, cols: usize, rng: &mut R) -> Self {
        let q = (0..rows).flat_map(|_| random_distribution(cols, rng)).collect();
        Self { rows, cols, q }
    }

    /// Every row equal to `dist`.
    pub fn repeated(rows: usize, dist: &[f64]) -> Result<Self> {
        Self::new(rows, dist.len(), dist.repeat(rows))
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.q[r * self.cols..(r + 1) * self.cols]
    }
}

fn require(what: &str, p: f64) -> Result<()> {
    if p > MIN_EVENT {
        Ok(())
    } else {
        Err(Error::Degenerate(format!("{what} = {p:e}")))
    }
}

fn check_index(inst: &DiscreteInstance, e: usize, v: usize) -> Result<()> {
    if e >= inst.sizes.e || v >= inst.sizes.v {
        return Err(Error::Contract(format!("(e, v) = ({e}, {v}) outside {:?}", inst.sizes)));
    }
    Ok(())
}

/// `p(v, s | e)` over `s`.
fn future_transition_given_obs(inst: &DiscreteInstance, e: usize, v: usize) -> Result<Vec<f64>> {
    check_index(inst, e, v)?;
    let pe = inst.p_e(e);
    require("p(e)", pe)?;
    require("p(v, e)", inst.p_ev(e, v))?;
    Ok((0..inst.sizes.s).map(|s| inst.p(e, s, v) / pe).collect())
}

/// `log sum_s p(v, s | e)^2 / p(v | e)`.
pub fn markov_objective(inst: &DiscreteInstance, e: usize, v: usize) -> Result<f64> {
    let p = future_transition_given_obs(inst, e, v)?;
    let sq: Vec<f64> = p.iter().map(|x| x * x).collect();
    Ok(log_sum(&sq) - log_sum(&p))
}

/// `log E_{p(s | v, e)}[p(v | s) p(s | e)]`, summed directly from the joint.
pub fn markov_objective_direct(inst: &DiscreteInstance, e: usize, v: usize) -> Result<f64> {
    check_index(inst, e, v)?;
    let pe = inst.p_e(e);
    let pev = inst.p_ev(e, v);
    require("p(e)", pe)?;
    require("p(v, e)", pev)?;
    let mut acc = 0.0;
    for s in 0..inst.sizes.s {
        let ps = inst.p_s(s);
        if ps <= MIN_EVENT {
            continue;
        }
        let s_given_ve = inst.p(e, s, v) / pev;
        let v_given_s = inst.p_sv(s, v) / ps;
        let s_given_e = inst.p_es(e, s) / pe;
        acc += s_given_ve * v_given_s * s_given_e;
    }
    Ok(acc.ln())
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CauchySchwarz {
    pub objective: f64,
    pub bound: f64,
    pub slack: f64,
}

/// Objective against `log p(v | e) - log C` with `C = |s|`.
pub fn cauchy_schwarz_check(inst: &DiscreteInstance, e: usize, v: usize) -> Result<CauchySchwarz> {
    let objective = markov_objective(inst, e, v)?;
    let log_evidence = log_sum(&future_transition_given_obs(inst, e, v)?);
    let bound = log_evidence - (inst.sizes.s as f64).ln();
    let slack = objective - bound;
    if slack < -IDENTITY_TOL {
        return Err(Error::Evaluation(format!("negative bound slack {slack:e} at (e, v) = ({e}, {v})")));
    }
    Ok(CauchySchwarz {
        objective,
        bound,
        slack,
    })
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ElboTerms {
    pub log_evidence: f64,
    pub elbo: f64,
    /// `KL(q || p(z | e, v))`.
    pub gap: f64,
}

impl ElboTerms {
    pub fn residual(&self) -> f64 {
        self.log_evidence - (self.elbo + self.gap)
    }
}

/// `p(z | e, v)` over `z`.
pub fn latent_posterior(inst: &DiscreteInstance, e: usize, v: usize) -> Result<Vec<f64>> {
    check_index(inst, e, v)?;
    let pev = inst.p_ev(e, v);
    require("p(v, e)", pev)?;
    Ok((0..inst.sizes.z)
        .map(|z| inst.prior_z[z] * (0..inst.sizes.s).map(|s| inst.lik(z, e, s, v)).sum::<f64>() / pev)
        .collect())
}

/// Evidence, bound, and gap without checking that `e` is independent of `z`.
/// `q_phi` rows are indexed by `e * |v| + v`.
pub fn elbo_terms(inst: &DiscreteInstance, q_phi: &VariationalTable, e: usize, v: usize) -> Result<ElboTerms> {
    check_index(inst, e, v)?;
    let n = inst.sizes;
    if q_phi.rows != n.e * n.v || q_phi.cols != n.z {
        return Err(Error::Dimension {
            op: "elbo_terms",
            shapes: vec![vec![q_phi.rows, q_phi.cols], vec![n.e * n.v, n.z]],
        });
    }
    let q = q_phi.row(e * n.v + v);
    let log_evidence = log_sum(&future_transition_given_obs(inst, e, v)?);
    let mut expected = 0.0;
    for z in 0..n.z {
        let pez = inst.p_e_given_z(e, z);
        require("p(e | z)", pez)?;
        let joint: Vec<f64> = (0..n.s).map(|s| inst.lik(z, e, s, v) / pez).collect();
        expected += q[z] * log_sum(&joint);
    }
    let elbo = expected - kl_divergence(q, &inst.prior_z);
    let gap = kl_divergence(q, &latent_posterior(inst, e, v)?);
    Ok(ElboTerms {
        log_evidence,
        elbo,
        gap,
    })
}

/// As [`elbo_terms`], requiring `p(e | z) = p(e)` and asserting the identity.
pub fn elbo_decomposition(inst: &DiscreteInstance, q_phi: &VariationalTable, e: usize, v: usize) -> Result<ElboTerms> {
    let dep = inst.e_dependence_on_z();
    if dep > IDENTITY_TOL {
        return Err(Error::Precondition(format!("observation depends on z by {dep:e}")));
    }
    let t = elbo_terms(inst, q_phi, e, v)?;
    if t.residual().abs() > IDENTITY_TOL || t.gap < -1e-12 {
        return Err(Error::Evaluation(format!("evidence identity fails: {t:?}")));
    }
    Ok(t)
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct KlRewrite {
    pub lhs: f64,
    pub rhs: f64,
}

impl KlRewrite {
    pub fn residual(&self) -> f64 {
        self.lhs - self.rhs
    }
}

/// `p(s | e, z)` over `s`.
pub fn transition_posterior(inst: &DiscreteInstance, e: usize, z: usize) -> Result<Vec<f64>> {
    let pez = inst.p_e_given_z(e, z);
    require("p(e | z)", pez)?;
    Ok((0..inst.sizes.s).map(|s| inst.p_es_given_z(e, s, z) / pez).collect())
}

/// `lhs = KL(q || p(s | e, z))` and
/// `rhs = log p(e | z) - (E_q[log p(e | s, z)] - KL(q || p(s)))`, unchecked.
/// `q_psi` rows are indexed by `e * |z| + z`.
pub fn kl_rewrite_terms(inst: &DiscreteInstance, q_psi: &VariationalTable, e: usize, z: usize) -> Result<KlRewrite> {
    let n = inst.sizes;
    if e >= n.e || z >= n.z {
        return Err(Error::Contract(format!("(e, z) = ({e}, {z}) outside {n:?}")));
    }
    if q_psi.rows != n.e * n.z || q_psi.cols != n.s {
        return Err(Error::Dimension {
            op: "kl_rewrite_terms",
            shapes: vec![vec![q_psi.rows, q_psi.cols], vec![n.e * n.z, n.s]],
        });
    }
    let q = q_psi.row(e * n.z + z);
    let lhs = kl_divergence(q, &transition_posterior(inst, e, z)?);
    let p_s: Vec<f64> = (0..n.s).map(|s| inst.p_s(s)).collect();
    let mut expected = 0.0;
    for s in 0..n.s {
        let psz = inst.p_s_given_z(s, z);
        require("p(s | z)", psz)?;
        expected += q[s] * (inst.p_es_given_z(e, s, z) / psz).ln();
    }
    let rhs = inst.p_e_given_z(e, z).ln() - (expected - kl_divergence(q, &p_s));
    Ok(KlRewrite { lhs, rhs })
}

/// As [`kl_rewrite_terms`], requiring `p(s | z) = p(s)` and asserting the identity.
pub fn kl_rewrite_check(inst: &DiscreteInstance, q_psi: &VariationalTable, e: usize, z: usize) -> Result<KlRewrite> {
    let dep = inst.s_dependence_on_z();
    if dep > IDENTITY_TOL {
        return Err(Error::Precondition(format!("transition depends on z by {dep:e}")));
    }
    let t = kl_rewrite_terms(inst, q_psi, e, z)?;
    if t.residual().abs() > IDENTITY_TOL {
        return Err(Error::Evaluation(format!("rewrite identity fails: {t:?}")));
    }
    Ok(t)
}

/// `(epsilon, log C)` with `epsilon = log(C * sum p^2 / (sum p)^2)` over
/// `p = p(v, s | e)`.
pub fn tightness_epsilon(inst: &DiscreteInstance, e: usize, v: usize) -> Result<(f64, f64)> {
    let p = future_transition_given_obs(inst, e, v)?;
    let log_c = (inst.sizes.s as f64).ln();
    let sq: Vec<f64> = p.iter().map(|x| x * x).collect();
    let eps = log_c + log_sum(&sq) - 2.0 * log_sum(&p);
    if eps < -1e-12 || eps > log_c + IDENTITY_TOL {
        return Err(Error::Evaluation(format!("epsilon {eps:e} outside [0, {log_c}]")));
    }
    Ok((eps, log_c))
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub seed: u64,
    pub size_e: usize,
    pub size_s: usize,
    pub size_v: usize,
    pub size_z: usize,
    pub s_independent: bool,
    pub slack: f64,
    pub elbo_residual: f64,
    pub kl_rewrite_residual: f64,
    pub epsilon: f64,
    pub log_c: f64,
    pub pass: bool,
}

/// Agreement of the two objective code paths is folded into `pass`.
fn sweep_one(seed: u64, max_size: usize) -> Result<SweepRow> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut size = || rng.gen_range(MIN_SIZE..=max_size);
    let sizes = Sizes {
        e: size(),
        s: size(),
        v: size(),
        z: size(),
    };
    let s_independent = seed % 2 == 0;
    let constraints = Constraints {
        markov: true,
        s_independent_of_z: s_independent,
    };
    let inst = random_instance(sizes, &mut rng, constraints)?;
    let e = rng.gen_range(0..sizes.e);
    let v = rng.gen_range(0..sizes.v);
    let z = rng.gen_range(0..sizes.z);
    let q_phi = VariationalTable::random(sizes.e * sizes.v, sizes.z, &mut rng);
    let q_psi = VariationalTable::random(sizes.e * sizes.z, sizes.s, &mut rng);

    let objective = markov_objective(&inst, e, v)?;
    let direct = markov_objective_direct(&inst, e, v)?;
    let log_evidence = log_sum(&future_transition_given_obs(&inst, e, v)?);
    let log_c = (sizes.s as f64).ln();
    let slack = objective - (log_evidence - log_c);
    let elbo = elbo_terms(&inst, &q_phi, e, v)?;
    let rewrite = kl_rewrite_terms(&inst, &q_psi, e, z)?;
    let p = future_transition_given_obs(&inst, e, v)?;
    let sq: Vec<f64> = p.iter().map(|x| x * x).collect();
    let epsilon = log_c + log_sum(&sq) - 2.0 * log_sum(&p);

    let pass = slack >= -IDENTITY_TOL
        && (objective - direct).abs() < 1e-12
        && elbo.residual().abs() < IDENTITY_TOL
        && elbo.gap >= -1e-12
        && (!s_independent || rewrite.residual().abs() < IDENTITY_TOL)
        && epsilon >= -1e-12
        && epsilon <= log_c + IDENTITY_TOL;
    Ok(SweepRow {
        seed,
        size_e: sizes.e,
        size_s: sizes.s,
        size_v: sizes.v,
        size_z: sizes.z,
        s_independent,
        slack,
        elbo_residual: elbo.residual(),
        kl_rewrite_residual: rewrite.residual(),
        epsilon,
        log_c,
        pass,
    })
}

/// `instances` random instances with seeds `seed, seed + 1, ...`. Every
/// instance is Markov; even seeds also make the transition independent of `z`.
pub fn sweep(instances: usize, max_size: usize, seed: u64) -> Result<Vec<SweepRow>> {
    if !(MIN_SIZE..=MAX_SIZE).contains(&max_size) {
        return Err(Error::Contract(format!("max size {max_size} outside [{MIN_SIZE}, {MAX_SIZE}]")));
    }
    (0..instances as u64).map(|i| sweep_one(seed.wrapping_add(i), max_size)).collect()
}

pub const SWEEP_HEADER: &str =
    "seed,size_e,size_s,size_v,size_z,s_independent,slack,elbo_residual,kl_rewrite_residual,epsilon,log_c,pass";

pub fn write_sweep_csv<W: Write>(rows: &[SweepRow], mut out: W) -> Result<()> {
    writeln!(out, "{SWEEP_HEADER}")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{:e},{:e},{:e},{:e},{:e},{}",
            r.seed,
            r.size_e,
            r.size_s,
            r.size_v,
            r.size_z,
            r.s_independent,
            r.slack,
            r.elbo_residual,
            r.kl_rewrite_residual,
            r.epsilon,
            r.log_c,
            if r.pass { "pass" } else { "fail" }
        )?;
    }
    Ok(())
}

pub fn save_sweep(rows: &[SweepRow], path: &Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_sweep_csv(rows, &mut f)?;
    f.flush()?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn point_mass_instance(n: usize) -> DiscreteInstance {
        let mut joint = vec![0.0; n * n * n];
        joint[0] = 1.0;
        DiscreteInstance::from_joint(n, n, n, joint).unwrap()
    }

    #[test]
    fn log_sum_matches_plain_sum() {
        let p = [0.1, 0.2, 0.3];
        assert!((log_sum(&p) - 0.6_f64.ln()).abs() < 1e-15);
        assert_eq!(log_sum_exp(&[f64::NEG_INFINITY]), f64::NEG_INFINITY);
        assert_eq!(kl_divergence(&[0.5, 0.5], &[0.5, 0.5]), 0.0);
    }

    #[test]
    fn all_sizes_two() {
        let inst = random_instance(Sizes::uniform(2), &mut ChaCha8Rng::seed_from_u64(1), Constraints::default()).unwrap();
        let j = inst.joint();
        assert_eq!(j.len(), 8);
        assert!((j.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn seeded_instances_repeat() {
        let c = Constraints {
            markov: true,
            s_independent_of_z: true,
        };
        let a = random_instance(Sizes::uniform(4), &mut ChaCha8Rng::seed_from_u64(3), c).unwrap();
        let b = random_instance(Sizes::uniform(4), &mut ChaCha8Rng::seed_from_u64(3), c).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn constraints_hold_by_construction() {
        let c = Constraints {
            markov: true,
            s_independent_of_z: true,
        };
        let inst = random_instance(
            Sizes { e: 3, s: 5, v: 4, z: 6 },
            &mut ChaCha8Rng::seed_from_u64(9),
            c,
        )
        .unwrap();
        assert!(inst.markov_violation() < 1e-12);
        assert!(inst.s_dependence_on_z() < 1e-12);
        assert!(inst.e_dependence_on_z() < 1e-12);
    }

    #[test]
    fn rejects_out_of_range_sizes() {
        assert!(random_instance(Sizes::uniform(7), &mut ChaCha8Rng::seed_from_u64(0), Constraints::default()).is_err());
        assert!(sweep(1, 1, 0).is_err());
    }

    #[test]
    fn point_mass_objective_is_zero() {
        let inst = point_mass_instance(3);
        assert!(markov_objective(&inst, 0, 0).unwrap().abs() < 1e-15);
        let (eps, log_c) = tightness_epsilon(&inst, 0, 0).unwrap();
        assert!((eps - log_c).abs() < 1e-12);
        let cs = cauchy_schwarz_check(&inst, 0, 0).unwrap();
        assert!((cs.slack - 3f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn zero_probability_is_degenerate() {
        let inst = point_mass_instance(2);
        assert!(matches!(markov_objective(&inst, 1, 0), Err(Error::Degenerate(_))));
        assert!(matches!(markov_objective(&inst, 0, 1), Err(Error::Degenerate(_))));
    }

    #[test]
    fn uniform_transition_is_tight() {
        let inst = DiscreteInstance::from_joint(2, 2, 2, vec![0.125; 8]).unwrap();
        let cs = cauchy_schwarz_check(&inst, 1, 0).unwrap();
        assert!(cs.slack.abs() < 1e-12);
        let (eps, _) = tightness_epsilon(&inst, 1, 0).unwrap();
        assert!(eps.abs() < 1e-12);
    }

    #[test]
    fn exact_posterior_closes_the_gap() {
        let inst = random_instance(Sizes::uniform(3), &mut ChaCha8Rng::seed_from_u64(2), Constraints::default()).unwrap();
        let post: Vec<f64> = (0..3)
            .flat_map(|e| (0..3).map(move |v| (e, v)))
            .flat_map(|(e, v)| latent_posterior(&inst, e, v).unwrap())
            .collect();
        let q = VariationalTable::new(9, 3, post).unwrap();
        let t = elbo_decomposition(&inst, &q, 2, 1).unwrap();
        assert!(t.gap.abs() < 1e-15);
        assert!((t.elbo - t.log_evidence).abs() < 1e-12);
    }

    #[test]
    fn true_conditional_rewrite_is_zero() {
        let c = Constraints {
            markov: false,
            s_independent_of_z: true,
        };
        let inst = random_instance(Sizes::uniform(3), &mut ChaCha8Rng::seed_from_u64(4), c).unwrap();
        let rows: Vec<f64> = (0..3)
            .flat_map(|e| (0..3).map(move |z| (e, z)))
            .flat_map(|(e, z)| transition_posterior(&inst, e, z).unwrap())
            .collect();
        let q = VariationalTable::new(9, 3, rows).unwrap();
        let t = kl_rewrite_check(&inst, &q, 1, 2).unwrap();
        assert!(t.lhs.abs() < 1e-12 && t.rhs.abs() < 1e-12);
    }

    #[test]
    fn rewrite_refuses_dependent_transition() {
        let inst = random_instance(Sizes::uniform(3), &mut ChaCha8Rng::seed_from_u64(4), Constraints::default()).unwrap();
        let q = VariationalTable::random(9, 3, &mut ChaCha8Rng::seed_from_u64(0));
        assert!(matches!(kl_rewrite_check(&inst, &q, 0, 0), Err(Error::Precondition(_))));
        assert!(kl_rewrite_terms(&inst, &q, 0, 0).is_ok());
    }

    #[test]
    fn variational_table_validation() {
        assert!(VariationalTable::new(1, 2, vec![1.0, 0.0]).is_err());
        assert!(VariationalTable::new(1, 2, vec![0.6, 0.6]).is_err());
        assert!(VariationalTable::new(1, 3, vec![0.5, 0.5]).is_err());
    }

    #[test]
    fn sweep_csv_shape() {
        let rows = sweep(4, 3, 10).unwrap();
        let mut buf = Vec::new();
        write_sweep_csv(&rows, &mut buf).unwrap();
        let text = String::from_utf8(buf).unwrap();
        assert_eq!(text.lines().count(), 5);
        assert!(text.starts_with(SWEEP_HEADER));
        assert!(rows.iter().all(|r| r.pass));
    }
}
