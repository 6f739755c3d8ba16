//! Metric tables and static SVG plots built from evaluation records.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::checkpoint::TrainedModel;
use crate::error::Result;
use crate::eval::{best_of_n, evaluate_diversity, BestOfNCurve, DiversityStats, Predictor};
use crate::training::TrainingHistory;
use crate::worldmodel::{format_real, SequenceSample};

pub const METRICS_FILE: &str = "metrics.csv";
pub const BEST_OF_N_FILE: &str = "best_of_n.csv";
pub const KL_HISTORY_FILE: &str = "kl_history.csv";
pub const KL_PLOT_FILE: &str = "kl.svg";

/// Ground truth and sampled futures for one test item.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScatterItem {
    pub truth: Vec<f64>,
    pub samples: Vec<Vec<f64>>,
}

/// Everything reported about one trained model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalRecord {
    pub model: String,
    /// Label distinguishing runs of the same model, e.g. the checkpoint path.
    pub label: String,
    pub seed: u64,
    pub stats: DiversityStats,
    pub best_of_n: Option<BestOfNCurve>,
    pub kl_trace: Vec<f64>,
    pub scatter: Vec<ScatterItem>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvalSettings {
    pub n_samples: usize,
    /// Best-of-N sample counts, strictly ascending. Empty skips the curve.
    pub best_of: Vec<usize>,
    /// Leading test items drawn into the scatter plot.
    pub scatter_items: usize,
    pub scatter_samples: usize,
    pub seed: u64,
}

impl Default for EvalSettings {
    fn default() -> Self {
        Self {
            n_samples: 100,
            best_of: vec![1, 10, 100],
            scatter_items: 3,
            scatter_samples: 20,
            seed: 0,
        }
    }
}

fn stream(seed: u64, n: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(n);
    rng
}

/// Diversity, best-of-N, and scatter samples for one model. Each part draws
/// from its own stream of `settings.seed`, so dropping one leaves the others
/// unchanged.
pub fn evaluate_record(
    label: &str,
    model: &TrainedModel,
    history: Option<&TrainingHistory>,
    test: &[SequenceSample],
    settings: &EvalSettings,
) -> Result<EvalRecord> {
    let mut stats = evaluate_diversity(model, test, settings.n_samples, &mut stream(settings.seed, 0))?;
    stats.final_kl = history.and_then(TrainingHistory::final_kl);
    let best_of_n = if settings.best_of.is_empty() {
        None
    } else {
        Some(best_of_n(model, test, &settings.best_of, &mut stream(settings.seed, 1))?)
    };
    let mut rng = stream(settings.seed, 2);
    let scatter = test
        .iter()
        .take(settings.scatter_items)
        .map(|item| {
            Ok(ScatterItem {
                truth: item.split()?.future.to_vec(),
                samples: model.predict(item, settings.scatter_samples, &mut rng)?,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(EvalRecord {
        model: model.name().to_string(),
        label: label.to_string(),
        seed: settings.seed,
        stats,
        best_of_n,
        kl_trace: history.map(TrainingHistory::kl_trace).unwrap_or_default(),
        scatter,
    })
}

pub fn metrics_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("label,model,seed,n_samples,n_items,mean_l1,diversity,mean_index_std,final_kl\n");
    for r in records {
        let s = &r.stats;
        let idx = if s.per_index_std.is_empty() {
            0.0
        } else {
            s.per_index_std.iter().sum::<f64>() / s.per_index_std.len() as f64
        };
        let _ = writeln!(
            out,
            "{},{},{},{},{},{},{},{},{}",
            r.label,
            r.model,
            r.seed,
            s.n_samples,
            s.n_items,
            format_real(s.mean_l1),
            format_real(s.diversity),
            format_real(idx),
            s.final_kl.map(format_real).unwrap_or_default()
        );
    }
    out
}

pub fn best_of_n_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("label,model,n,median_min_l1\n");
    for r in records {
        for (n, m) in r.best_of_n.iter().flat_map(|c| &c.points) {
            let _ = writeln!(out, "{},{},{n},{}", r.label, r.model, format_real(*m));
        }
    }
    out
}

pub fn kl_history_csv(records: &[EvalRecord]) -> String {
    let mut out = String::from("label,model,epoch,kl_z\n");
    for r in records {
        for (e, kl) in r.kl_trace.iter().enumerate() {
            let _ = writeln!(out, "{},{},{e},{}", r.label, r.model, format_real(*kl));
        }
    }
    out
}

const W: f64 = 720.0;
const H: f64 = 360.0;
const PAD: f64 = 40.0;

fn svg_open(out: &mut String, title: &str) {
    let _ = writeln!(
        out,
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{W}\" height=\"{H}\" viewBox=\"0 0 {W} {H}\">"
    );
    let _ = writeln!(out, "<rect width=\"{W}\" height=\"{H}\" fill=\"white\"/>");
    let _ = writeln!(
        out,
        "<text x=\"{PAD}\" y=\"24\" font-family=\"sans-serif\" font-size=\"14\">{}</text>",
        escape(title)
    );
    let _ = writeln!(
        out,
        "<rect x=\"{PAD}\" y=\"{PAD}\" width=\"{}\" height=\"{}\" fill=\"none\" stroke=\"#888\"/>",
        W - 2.0 * PAD,
        H - 2.0 * PAD
    );
}

fn escape(s: &str) -> String {
    s.replace('&', "&amp;").replace('<', "&lt;").replace('>', "&gt;")
}

fn index_color(i: usize, n: usize) -> String {
    format!("hsl({},70%,40%)", (i * 300) / n.max(1))
}

/// Ground truth (red, open) and predictions (filled, colored by index) for
/// each item, items side by side.
pub fn scatter_svg(record: &EvalRecord) -> String {
    let mut out = String::new();
    svg_open(&mut out, &format!("{} predictions vs ground truth", record.label));
    let len = record.scatter.first().map_or(0, |s| s.truth.len());
    let slots = (record.scatter.len() * (len + 1)).max(1) as f64;
    let x = |item: usize, j: usize| PAD + (W - 2.0 * PAD) * ((item * (len + 1) + j) as f64 + 0.5) / slots;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * v.clamp(0.0, 1.0);
    for (item, s) in record.scatter.iter().enumerate() {
        for sample in &s.samples {
            for (j, v) in sample.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "<circle class=\"pred\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"2\" fill=\"{}\" fill-opacity=\"0.4\"/>",
                    x(item, j),
                    y(*v),
                    index_color(j, len)
                );
            }
        }
        for (j, v) in s.truth.iter().enumerate() {
            let _ = writeln!(
                out,
                "<circle class=\"truth\" cx=\"{:.2}\" cy=\"{:.2}\" r=\"4\" fill=\"none\" stroke=\"#d62728\" stroke-width=\"1.5\"/>",
                x(item, j),
                y(*v)
            );
        }
    }
    out.push_str("</svg>\n");
    out
}

/// `log10(kl_z)` per epoch, one polyline per record.
pub fn kl_svg(records: &[EvalRecord]) -> String {
    const FLOOR: f64 = 1e-8;
    let mut out = String::new();
    svg_open(&mut out, "kl_z per epoch (log10)");
    let traces: Vec<&EvalRecord> = records.iter().filter(|r| !r.kl_trace.is_empty()).collect();
    let epochs = traces.iter().map(|r| r.kl_trace.len()).max().unwrap_or(1).max(2);
    let logs = |r: &EvalRecord| r.kl_trace.iter().map(|k| k.max(FLOOR).log10()).collect::<Vec<_>>();
    let (lo, hi) = traces
        .iter()
        .flat_map(|r| logs(r))
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), v| (a.min(v), b.max(v)));
    let (lo, hi) = if lo < hi { (lo.floor(), hi.ceil()) } else { (lo - 1.0, lo + 1.0) };
    let x = |e: usize| PAD + (W - 2.0 * PAD) * e as f64 / (epochs - 1) as f64;
    let y = |v: f64| H - PAD - (H - 2.0 * PAD) * (v - lo) / (hi - lo);
    let _ = writeln!(
        out,
        "<text x=\"4\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">{hi}</text>",
        PAD + 4.0
    );
    let _ = writeln!(
        out,
        "<text x=\"4\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"10\">{lo}</text>",
        H - PAD
    );
    for (i, r) in traces.iter().enumerate() {
        let color = index_color(i, traces.len());
        let points: Vec<String> = logs(r)
            .iter()
            .enumerate()
            .map(|(e, v)| format!("{:.2},{:.2}", x(e), y(*v)))
            .collect();
        let _ = writeln!(
            out,
            "<polyline class=\"kl\" fill=\"none\" stroke=\"{color}\" stroke-width=\"1.5\" points=\"{}\"/>",
            points.join(" ")
        );
        let _ = writeln!(
            out,
            "<text x=\"{:.2}\" y=\"{:.2}\" font-family=\"sans-serif\" font-size=\"11\" fill=\"{color}\">{}</text>",
            W - PAD - 150.0,
            PAD + 16.0 + 14.0 * i as f64,
            escape(&r.label)
        );
    }
    out.push_str("</svg>\n");
    out
}

fn file_stem(label: &str) -> String {
    label
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' { c } else { '_' })
        .collect()
}

/// Writes the CSV tables, one scatter plot per record with samples, and a KL
/// chart when any record has a trace. Returns the written paths in order.
pub fn emit_report(records: &[EvalRecord], out_dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(out_dir)?;
    let mut written = Vec::new();
    let mut put = |name: String, body: String| -> Result<()> {
        let p = out_dir.join(name);
        std::fs::write(&p, body)?;
        written.push(p);
        Ok(())
    };
    put(METRICS_FILE.into(), metrics_csv(records))?;
    put(BEST_OF_N_FILE.into(), best_of_n_csv(records))?;
    put(KL_HISTORY_FILE.into(), kl_history_csv(records))?;
    for r in records.iter().filter(|r| !r.scatter.is_empty()) {
        put(format!("scatter_{}.svg", file_stem(&r.label)), scatter_svg(r))?;
    }
    if records.iter().any(|r| !r.kl_trace.is_empty()) {
        put(KL_PLOT_FILE.into(), kl_svg(records))?;
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn record(samples: usize) -> EvalRecord {
        EvalRecord {
            model: "cvae".into(),
            label: "run/a".into(),
            seed: 1,
            stats: DiversityStats {
                n_samples: samples,
                n_items: 1,
                mean_l1: 0.1,
                diversity: 0.01,
                per_index_std: vec![0.0; 10],
                final_kl: Some(1e-4),
            },
            best_of_n: Some(BestOfNCurve {
                points: vec![(1, 0.2), (3, 0.1)],
                per_item: vec![vec![0.2, 0.1]],
            }),
            kl_trace: vec![0.5, 0.1, 0.01],
            scatter: vec![ScatterItem {
                truth: (0..10).map(|i| i as f64 / 10.0).collect(),
                samples: vec![vec![0.5; 10]; samples],
            }],
        }
    }

    #[test]
    fn scatter_mark_counts() {
        let svg = scatter_svg(&record(3));
        assert_eq!(svg.matches("class=\"truth\"").count(), 10);
        assert_eq!(svg.matches("class=\"pred\"").count(), 30);
    }

    #[test]
    fn tables_have_one_row_per_entry() {
        let r = [record(3)];
        assert_eq!(metrics_csv(&r).lines().count(), 2);
        assert_eq!(best_of_n_csv(&r).lines().count(), 3);
        assert_eq!(kl_history_csv(&r).lines().count(), 4);
        assert_eq!(kl_svg(&r).matches("<polyline").count(), 1);
    }

    #[test]
    fn labels_become_safe_file_names() {
        assert_eq!(file_stem("out/vae2 seed=1"), "out_vae2_seed_1");
    }
}
