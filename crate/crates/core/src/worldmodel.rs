//! Stochastic number-sequence generator and the determinate dataset built from it.
//!
//! A sequence for parameter `alpha` is `sigmoid(alpha * (C + i*S + eps_i))` with
//! `eps_i ~ Uniform[0, S)`. The dataset draws exactly one sequence per `alpha`,
//! so every observation has a single recorded future.

use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::sigmoid;
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WorldConfig {
    /// Ramp offset `C`.
    pub offset: f64,
    /// Ramp step `S`; also the width of the uniform perturbation.
    pub step: f64,
    /// Sequence length `N`.
    pub len: usize,
    /// Number of world parameters `K`.
    pub count: usize,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            offset: -1.5,
            step: 0.1,
            len: 30,
            count: 10_000,
        }
    }
}

impl WorldConfig {
    pub fn with_count(count: usize) -> Self {
        Self {
            count,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step > 0.0) || self.len == 0 || self.len % 3 != 0 || self.count == 0 {
            return Err(Error::Contract(format!("invalid world config {self:?}")));
        }
        Ok(())
    }

    /// Length of each of the three segments.
    pub fn part_len(&self) -> usize {
        self.len / 3
    }
}

/// `alpha_k = 0.1 + 0.0005 * (k - 1)` for `k` in `1..=count`.
pub fn alpha_schedule(k: usize, count: usize) -> Result<f64> {
    if k == 0 || k > count {
        return Err(Error::Contract(format!("k = {k} outside [1, {count}]")));
    }
    Ok(0.1 + 0.0005 * (k - 1) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SequenceSample {
    pub alpha: f64,
    pub values: Vec<f64>,
    /// Perturbations that produced `values`; empty when loaded from CSV.
    pub epsilons: Vec<f64>,
}

/// The three even parts of a sequence.
#[derive(Clone, Debug, PartialEq)]
pub struct Split<'a> {
    pub observed: &'a [f64],
    pub transition: &'a [f64],
    pub future: &'a [f64],
}

impl Split<'_> {
    /// Observation seen by single-level baselines: observed then transition.
    pub fn baseline_observation(&self) -> Vec<f64> {
        let mut v = self.observed.to_vec();
        v.extend_from_slice(self.transition);
        v
    }
}

impl SequenceSample {
    pub fn split(&self) -> Result<Split<'_>> {
        split_sequence(&self.values)
    }
}

pub fn split_sequence(values: &[f64]) -> Result<Split<'_>> {
    if values.is_empty() || values.len() % 3 != 0 {
        return Err(Error::Contract(format!(
            "sequence length {} is not a positive multiple of 3",
            values.len()
        )));
    }
    let p = values.len() / 3;
    Ok(Split {
        observed: &values[..p],
        transition: &values[p..2 * p],
        future: &values[2 * p..],
    })
}

/// Deterministic part of the generator: values for given perturbations.
pub fn render(alpha: f64, config: &WorldConfig, epsilons: &[f64]) -> Vec<f64> {
    epsilons
        .iter()
        .enumerate()
        .map(|(i, &eps)| sigmoid(alpha * (config.offset + i as f64 * config.step + eps)))
        .collect()
}

pub fn generate_sequence<R: Rng + ?Sized>(alpha: f64, config: &WorldConfig, rng: &mut R) -> SequenceSample {
    let epsilons: Vec<f64> = (0..config.len).map(|_| rng.gen_range(0.0..config.step)).collect();
    SequenceSample {
        alpha,
        values: render(alpha, config, &epsilons),
        epsilons,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    pub config: WorldConfig,
    pub seed: u64,
    pub train: Vec<SequenceSample>,
    pub test: Vec<SequenceSample>,
}

/// Number of training rows for `count` sequences (90%).
pub fn train_count(count: usize) -> usize {
    count * 9 / 10
}

/// Per-`k` stream so generation does not depend on iteration order.
fn stream_rng(seed: u64, k: usize) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ k as u64)
}

pub fn build_dataset(config: &WorldConfig, seed: u64) -> Result<Dataset> {
    config.validate()?;
    let mut samples = Vec::with_capacity(config.count);
    for k in 1..=config.count {
        let alpha = alpha_schedule(k, config.count)?;
        samples.push(generate_sequence(alpha, config, &mut stream_rng(seed, k)));
    }
    let mut order: Vec<usize> = (0..config.count).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_train = train_count(config.count);
    let pick = |idx: &[usize]| idx.iter().map(|&i| samples[i].clone()).collect::<Vec<_>>();
    Ok(Dataset {
        config: *config,
        seed,
        train: pick(&order[..n_train]),
        test: pick(&order[n_train..]),
    })
}

/// Written next to the CSV files.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub seed: u64,
    pub config: WorldConfig,
    pub train_rows: usize,
    pub test_rows: usize,
}

pub const TRAIN_FILE: &str = "train.csv";
pub const TEST_FILE: &str = "test.csv";
pub const MANIFEST_FILE: &str = "manifest.json";

/// 17 significant digits, enough to round-trip any `f64`.
pub fn format_real(x: f64) -> String {
    format!("{x:.16e}")
}

fn write_rows(path: &Path, len: usize, rows: &[SequenceSample]) -> Result<()> {
    let mut w = csv::Writer::from_path(path)?;
    let mut header = vec!["alpha".to_string()];
    header.extend((0..len).map(|i| format!("v{i}")));
    w.write_record(&header)?;
    for s in rows {
        let mut rec = vec![format_real(s.alpha)];
        rec.extend(s.values.iter().map(|&v| format_real(v)));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

fn read_rows(path: &Path, len: usize) -> Result<Vec<SequenceSample>> {
    let mut r = csv::Reader::from_path(path)?;
    let header = r.headers()?.clone();
    if header.len() != len + 1 || &header[0] != "alpha" {
        return Err(Error::Format(format!(
            "{}: expected header alpha,v0..v{}",
            path.display(),
            len - 1
        )));
    }
    let mut out = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        let parse = |s: &str| {
            s.parse::<f64>()
                .map_err(|e| Error::Format(format!("{}: bad number {s:?}: {e}", path.display())))
        };
        let alpha = parse(&rec[0])?;
        let values = rec.iter().skip(1).map(parse).collect::<Result<Vec<_>>>()?;
        out.push(SequenceSample {
            alpha,
            values,
            epsilons: Vec::new(),
        });
    }
    Ok(out)
}

impl Dataset {
    pub fn manifest(&self) -> Manifest {
        Manifest {
            seed: self.seed,
            config: self.config,
            train_rows: self.train.len(),
            test_rows: self.test.len(),
        }
    }

    pub fn save(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        write_rows(&dir.join(TRAIN_FILE), self.config.len, &self.train)?;
        write_rows(&dir.join(TEST_FILE), self.config.len, &self.test)?;
        let manifest = serde_json::to_string_pretty(&self.manifest())?;
        fs::write(dir.join(MANIFEST_FILE), manifest + "\n")?;
        Ok(())
    }

    /// Loads a dataset directory; epsilons are not stored and come back empty.
    pub fn load(dir: &Path) -> Result<Self> {
        let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join(MANIFEST_FILE))?)?;
        let train = read_rows(&dir.join(TRAIN_FILE), manifest.config.len)?;
        let test = read_rows(&dir.join(TEST_FILE), manifest.config.len)?;
        if train.len() != manifest.train_rows || test.len() != manifest.test_rows {
            return Err(Error::Format(format!(
                "row counts {}/{} disagree with manifest {}/{}",
                train.len(),
                test.len(),
                manifest.train_rows,
                manifest.test_rows
            )));
        }
        Ok(Self {
            config: manifest.config,
            seed: manifest.seed,
            train,
            test,
        })
    }
}
