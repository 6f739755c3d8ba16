//! Sample-based evaluation: prediction error, diversity, and best-of-N.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::baselines::BaselineModel;
use crate::error::{Error, Result};
use crate::nn::l1_value;
use crate::vae2::Vae2Model;
use crate::worldmodel::SequenceSample;

/// Anything that draws futures for a full sequence's observable prefix.
pub trait Predictor {
    /// Length of a predicted future.
    fn future_len(&self) -> usize;

    fn predict(&self, sample: &SequenceSample, n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Vec<f64>>>;
}

impl Predictor for Vae2Model {
    fn future_len(&self) -> usize {
        self.part_len
    }

    fn predict(&self, sample: &SequenceSample, n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Vec<f64>>> {
        self.sample_predictions(sample.split()?.observed, n, rng)
    }
}

impl Predictor for BaselineModel {
    fn future_len(&self) -> usize {
        self.part_len
    }

    fn predict(&self, sample: &SequenceSample, n: usize, rng: &mut dyn rand::RngCore) -> Result<Vec<Vec<f64>>> {
        self.sample(&sample.split()?.baseline_observation(), n, rng)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DiversityStats {
    pub n_samples: usize,
    pub n_items: usize,
    /// L1 to the ground-truth future, averaged over samples and items.
    pub mean_l1: f64,
    /// Standard deviation of the per-sample L1 within an item, averaged over items.
    pub diversity: f64,
    /// Sample standard deviation at each future index, averaged over items.
    pub per_index_std: Vec<f64>,
    /// Final-epoch KL term, when a training history is available.
    pub final_kl: Option<f64>,
}

/// Population standard deviation. Identical values give exactly 0, which a
/// rounded mean would not guarantee.
pub fn std_dev(xs: &[f64]) -> f64 {
    if xs.iter().all(|&x| x == xs[0]) {
        return 0.0;
    }
    let n = xs.len() as f64;
    let mean = xs.iter().sum::<f64>() / n;
    (xs.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n).sqrt()
}

/// Draws `n_samples` futures per test item, in item order, from one stream.
pub fn evaluate_diversity<P, R>(model: &P, test: &[SequenceSample], n_samples: usize, rng: &mut R) -> Result<DiversityStats>
where
    P: Predictor + ?Sized,
    R: Rng,
{
    if n_samples < 2 {
        return Err(Error::Contract(format!("n_samples must be at least 2, got {n_samples}")));
    }
    if test.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    let len = model.future_len();
    let mut l1_sum = 0.0;
    let mut div_sum = 0.0;
    let mut index_std = vec![0.0; len];
    for item in test {
        let truth = item.split()?.future;
        let samples = model.predict(item, n_samples, rng)?;
        let l1: Vec<f64> = samples.iter().map(|s| l1_value(s, truth)).collect();
        l1_sum += l1.iter().sum::<f64>() / n_samples as f64;
        div_sum += std_dev(&l1);
        for (j, acc) in index_std.iter_mut().enumerate() {
            let col: Vec<f64> = samples.iter().map(|s| s[j]).collect();
            *acc += std_dev(&col);
        }
    }
    let items = test.len() as f64;
    index_std.iter_mut().for_each(|v| *v /= items);
    Ok(DiversityStats {
        n_samples,
        n_items: test.len(),
        mean_l1: l1_sum / items,
        diversity: div_sum / items,
        per_index_std: index_std,
        final_kl: None,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BestOfNCurve {
    /// `(N, median over items of the minimum L1 among the first N samples)`.
    pub points: Vec<(usize, f64)>,
    /// Per-item minima, one row per item aligned with `points`.
    pub per_item: Vec<Vec<f64>>,
}

pub fn median(xs: &[f64]) -> f64 {
    if xs.is_empty() {
        return f64::NAN;
    }
    let mut v = xs.to_vec();
    v.sort_by(f64::total_cmp);
    let m = v.len() / 2;
    if v.len() % 2 == 1 {
        v[m]
    } else {
        0.5 * (v[m - 1] + v[m])
    }
}

/// Each item draws one pool of `max(ns)` samples; the value at `N` uses the
/// first `N` of that pool, so per-item minima never increase with `N`.
pub fn best_of_n<P, R>(model: &P, test: &[SequenceSample], ns: &[usize], rng: &mut R) -> Result<BestOfNCurve>
where
    P: Predictor + ?Sized,
    R: Rng,
{
    if ns.is_empty() || ns[0] == 0 || ns.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Contract(format!("Ns must be positive and strictly ascending, got {ns:?}")));
    }
    if test.is_empty() {
        return Err(Error::Contract("empty test set".into()));
    }
    let pool = *ns.last().unwrap();
    let mut per_item = Vec::with_capacity(test.len());
    for item in test {
        let truth = item.split()?.future;
        let l1: Vec<f64> = model
            .predict(item, pool, rng)?
            .iter()
            .map(|s| l1_value(s, truth))
            .collect();
        let mut row = Vec::with_capacity(ns.len());
        let mut best = f64::INFINITY;
        let mut taken = 0;
        for &n in ns {
            best = l1[taken..n].iter().copied().fold(best, f64::min);
            taken = n;
            row.push(best);
        }
        per_item.push(row);
    }
    let points = ns
        .iter()
        .enumerate()
        .map(|(j, &n)| (n, median(&per_item.iter().map(|r| r[j]).collect::<Vec<_>>())))
        .collect();
    Ok(BestOfNCurve { points, per_item })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn std_and_median() {
        assert_eq!(std_dev(&[2.0, 4.0, 4.0, 4.0, 5.0, 5.0, 7.0, 9.0]), 2.0);
        assert_eq!(std_dev(&[3.0; 4]), 0.0);
        assert_eq!(std_dev(&[0.1; 3]), 0.0);
        assert_eq!(median(&[3.0, 1.0, 2.0]), 2.0);
        assert_eq!(median(&[4.0, 1.0, 2.0, 3.0]), 2.5);
        assert!(median(&[]).is_nan());
    }
}
