//! Library results against values computed independently: closed forms,
//! Monte-Carlo estimates, brute-force sums, and finite differences.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use vae2_core::autodiff::grad_check;
use vae2_core::bounds::{
    cauchy_schwarz_check, elbo_decomposition, kl_rewrite_check, markov_objective, tightness_epsilon, DiscreteInstance,
    Sizes, VariationalTable,
};
use vae2_core::nn::gaussian_kl_value;
use vae2_core::worldmodel::{generate_sequence, render};
use vae2_core::{Tensor, WorldConfig};

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

/// Mean and standard error of `xs`.
fn mean_se(xs: &[f64]) -> (f64, f64) {
    let n = xs.len() as f64;
    let m = xs.iter().sum::<f64>() / n;
    let var = xs.iter().map(|x| (x - m) * (x - m)).sum::<f64>() / (n - 1.0);
    (m, (var / n).sqrt())
}

#[test]
fn gaussian_kl_agrees_with_monte_carlo() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..5 {
        let mean: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.5..1.5)).collect();
        let logvar: Vec<f64> = (0..4).map(|_| rng.gen_range(-1.0..1.0)).collect();
        // log q(z) - log p(z) at z ~ q; the 2 pi terms cancel.
        let draws: Vec<f64> = (0..40_000)
            .map(|_| {
                mean.iter()
                    .zip(&logvar)
                    .map(|(&m, &lv)| {
                        let eps: f64 = rng.sample(StandardNormal);
                        let z = m + (0.5 * lv).exp() * eps;
                        -0.5 * (lv + eps * eps) + 0.5 * z * z
                    })
                    .sum()
            })
            .collect();
        let (mc, se) = mean_se(&draws);
        let analytic = gaussian_kl_value(&mean, &logvar);
        assert!((analytic - mc).abs() < 4.0 * se, "analytic {analytic}, mc {mc} +- {se}");
    }
}

#[test]
fn world_means_match_quadrature() {
    // E over eps ~ U[0, S) of sigmoid(a (c + eps)) = (softplus(a (c + S)) - softplus(a c)) / (a S).
    let config = WorldConfig::default();
    let alpha = 2.5;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let draws: Vec<Vec<f64>> = (0..20_000)
        .map(|_| generate_sequence(alpha, &config, &mut rng).values)
        .collect();
    for i in [0, 9, 17, 29] {
        let c = config.offset + i as f64 * config.step;
        let exact = (softplus(alpha * (c + config.step)) - softplus(alpha * c)) / (alpha * config.step);
        let col: Vec<f64> = draws.iter().map(|d| d[i]).collect();
        let (m, se) = mean_se(&col);
        assert!((m - exact).abs() < 4.0 * se, "index {i}: {m} +- {se} vs {exact}");
    }
}

#[test]
fn ramp_endpoints_without_perturbation() {
    let v = render(1.0, &WorldConfig::default(), &[0.0; 30]);
    assert!((v[0] - sigmoid(-1.5)).abs() < 1e-15);
    assert!((v[29] - sigmoid(1.4)).abs() < 1e-15);
    assert!((v[0] - 0.182426).abs() < 1e-6);
    assert!((v[29] - 0.802184).abs() < 1e-6);
    assert!(v.windows(2).all(|w| w[0] < w[1]));
}

/// `p(z) p(e|z) p(s|e) p(v|s)` with a hand-written table for each factor.
/// The transition depends on `z` only through `e`.
fn chain_instance(e_depends_on_z: bool) -> (DiscreteInstance, impl Fn(usize, usize, usize, usize) -> f64) {
    let pz = [0.3, 0.7];
    let pe_z = if e_depends_on_z {
        [[0.2, 0.8], [0.6, 0.4]]
    } else {
        [[0.35, 0.65], [0.35, 0.65]]
    };
    let ps_e = [[0.1, 0.5, 0.4], [0.6, 0.3, 0.1]];
    let pv_s = [[0.7, 0.3], [0.25, 0.75], [0.5, 0.5]];
    let joint = move |z: usize, e: usize, s: usize, v: usize| pz[z] * pe_z[z][e] * ps_e[e][s] * pv_s[s][v];
    let mut lik = Vec::new();
    for z in 0..2 {
        for e in 0..2 {
            for s in 0..3 {
                for v in 0..2 {
                    lik.push(joint(z, e, s, v) / pz[z]);
                }
            }
        }
    }
    let sizes = Sizes { e: 2, s: 3, v: 2, z: 2 };
    (DiscreteInstance::new(sizes, pz.to_vec(), lik).unwrap(), joint)
}

#[test]
fn bound_terms_match_brute_force_sums() {
    let (inst, joint) = chain_instance(true);
    let (e, v) = (1, 0);
    let sum = |f: &dyn Fn(usize, usize, usize, usize) -> bool| -> f64 {
        let mut acc = 0.0;
        for z in 0..2 {
            for ee in 0..2 {
                for s in 0..3 {
                    for vv in 0..2 {
                        if f(z, ee, s, vv) {
                            acc += joint(z, ee, s, vv);
                        }
                    }
                }
            }
        }
        acc
    };
    let p_e = sum(&|_, ee, _, _| ee == e);
    let p_ve = sum(&|_, ee, _, vv| ee == e && vv == v);
    let p_vs_e: Vec<f64> = (0..3).map(|s| sum(&|_, ee, ss, vv| ee == e && ss == s && vv == v) / p_e).collect();
    let sq: f64 = p_vs_e.iter().map(|p| p * p).sum();

    let want = (sq / (p_ve / p_e)).ln();
    assert!((markov_objective(&inst, e, v).unwrap() - want).abs() < 1e-14);
    let cs = cauchy_schwarz_check(&inst, e, v).unwrap();
    assert!((cs.bound - ((p_ve / p_e).ln() - 3f64.ln())).abs() < 1e-14);
    assert!(cs.slack >= 0.0);
    let (eps, log_c) = tightness_epsilon(&inst, e, v).unwrap();
    let total: f64 = p_vs_e.iter().sum();
    assert!((eps - (3.0 * sq / (total * total)).ln()).abs() < 1e-14);
    assert!(eps >= 0.0 && eps <= log_c);
}

#[test]
fn identities_hold_on_a_chain_with_independent_observation() {
    let (inst, _) = chain_instance(false);
    let q_phi = VariationalTable::new(4, 2, vec![0.5, 0.5, 0.9, 0.1, 0.2, 0.8, 0.6, 0.4]).unwrap();
    let q_psi = VariationalTable::new(4, 3, vec![0.2, 0.3, 0.5, 0.6, 0.2, 0.2, 0.1, 0.1, 0.8, 1. / 3., 1. / 3., 1. / 3.]).unwrap();
    for e in 0..2 {
        for v in 0..2 {
            let t = elbo_decomposition(&inst, &q_phi, e, v).unwrap();
            assert!(t.residual().abs() < 1e-12);
            assert!(t.elbo <= t.log_evidence);
        }
    }
    // Independent of z here as the transition only sees e, and e ignores z.
    for e in 0..2 {
        for z in 0..2 {
            assert!(kl_rewrite_check(&inst, &q_psi, e, z).unwrap().residual().abs() < 1e-12);
        }
    }
}

#[test]
fn tape_primitives_against_central_differences() {
    let point = Tensor::new(vec![3, 4], (0..12).map(|i| 0.15 * i as f64 - 0.9).collect()).unwrap();
    let w = Tensor::new(vec![4, 2], vec![0.3, -0.7, 1.1, 0.2, -0.4, 0.9, 0.5, -1.3]).unwrap();
    let r = grad_check(
        |tape, x| {
            let wv = tape.constant(w.clone());
            let h = tape.matmul(x, wv)?;
            let a = tape.log_sigmoid(h)?;
            let b = tape.slice_last(x, 1, 2)?;
            let b = tape.exp(b)?;
            let c = tape.concat(&[a, b])?;
            let c = tape.mul(c, c)?;
            let d = tape.mean_last_axis(c)?;
            let d = tape.add(d, d)?;
            let l = tape.sigmoid(d)?;
            let l = tape.log(l)?;
            tape.sum(l)
        },
        &point,
        1e-6,
    )
    .unwrap();
    assert!(r.max_relative_error < 1e-7, "{}", r.max_relative_error);
    assert!(r.analytic.iter().all(|g| g.abs() > 1e-4));
}
