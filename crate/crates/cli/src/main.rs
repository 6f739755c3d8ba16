use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, ensure, Context, Result};
use clap::{Parser, Subcommand};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use vae2_core::bounds;
use vae2_core::checkpoint::{CHECKPOINT_FILE, HISTORY_FILE};
use vae2_core::gradcheck::{self, CheckTarget};
use vae2_core::report::emit_report;
use vae2_core::worldmodel::{build_dataset, format_real};
use vae2_core::{
    evaluate_record, train_model, Checkpoint, Dataset, EvalRecord, EvalSettings, ModelKind, TrainingHistory,
    Vae2Config, WorldConfig,
};

/// Records written by `eval` and read back by `report`.
const EVAL_FILE: &str = "eval.json";

#[derive(Parser)]
#[command(name = "vae2", version, about = "Nested VAE sequence prediction lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate the toy sequence dataset and its 90/10 split.
    GenData {
        #[arg(long, default_value_t = 2000)]
        k: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Train one model and write a checkpoint plus per-epoch history.
    Train(TrainArgs),
    /// Draw futures from a checkpoint for one input row.
    Sample {
        #[arg(long)]
        ckpt: PathBuf,
        /// Comma-separated values: the model's input, or a whole sequence.
        #[arg(long, allow_hyphen_values = true)]
        input_row: String,
        #[arg(long, default_value_t = 10)]
        n: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Diversity, best-of-N, and plots for one or more checkpoints.
    Eval {
        #[arg(long, num_args = 1.., required = true)]
        ckpt: Vec<PathBuf>,
        #[arg(long)]
        data: PathBuf,
        #[arg(long, default_value_t = 100)]
        n_samples: usize,
        /// Best-of-N sample counts.
        #[arg(long, value_delimiter = ',', default_value = "1,10,100")]
        best_of: Vec<usize>,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Check the likelihood bounds on random discrete instances.
    VerifyBounds {
        #[arg(long, default_value_t = 1000)]
        instances: usize,
        #[arg(long, default_value_t = bounds::MAX_SIZE)]
        max_size: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
    /// Compare analytic gradients with central differences.
    GradCheck {
        /// mlp, kl, vae2, or a baseline name.
        #[arg(long, default_value = "vae2")]
        model: String,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Rebuild tables and plots from a previous eval directory.
    Report {
        #[arg(long = "in")]
        input: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(clap::Args)]
struct TrainArgs {
    /// vae2, cvae, vae-gan, beta-vae, anneal-vae, or det.
    #[arg(long)]
    model: String,
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value_t = 300)]
    epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    lr: f64,
    #[arg(long, default_value_t = 1e-4)]
    weight_decay: f64,
    #[arg(long, default_value_t = 0.02)]
    lambda: f64,
    #[arg(long, default_value_t = 8)]
    z_dim: usize,
    #[arg(long, default_value_t = 0.1)]
    adv_weight: f64,
    #[arg(long, default_value_t = 1)]
    l_samples: usize,
    #[arg(long, default_value_t = 64)]
    batch: usize,
    #[arg(long, default_value_t = 0.0)]
    aux_weight: f64,
    #[arg(long, default_value_t = 0)]
    aux_epochs: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    out: PathBuf,
    /// Print the loss breakdown every this many epochs (0 = never).
    #[arg(long, default_value_t = 0)]
    log_every: usize,
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData { .. } => "gen-data",
            Command::Train(_) => "train",
            Command::Sample { .. } => "sample",
            Command::Eval { .. } => "eval",
            Command::VerifyBounds { .. } => "verify-bounds",
            Command::GradCheck { .. } => "grad-check",
            Command::Report { .. } => "report",
        }
    }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let name = cli.command.name();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            println!("FAIL {name}: {}", format!("{e:#}").replace('\n', " "));
            ExitCode::FAILURE
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData { k, seed, out } => gen_data(k, seed, &out),
        Command::Train(args) => train(args),
        Command::Sample { ckpt, input_row, n, seed } => sample(&ckpt, &input_row, n, seed),
        Command::Eval {
            ckpt,
            data,
            n_samples,
            best_of,
            seed,
            out,
        } => {
            let settings = EvalSettings {
                n_samples,
                best_of,
                seed,
                ..EvalSettings::default()
            };
            eval(&ckpt, &data, &settings, &out)
        }
        Command::VerifyBounds {
            instances,
            max_size,
            seed,
            out,
        } => verify_bounds(instances, max_size, seed, &out),
        Command::GradCheck { model, seed } => grad_check(&model, seed),
        Command::Report { input, out } => report(&input, &out),
    }
}

fn gen_data(k: usize, seed: u64, out: &Path) -> Result<()> {
    let ds = build_dataset(&WorldConfig::with_count(k), seed)?;
    ds.save(out).with_context(|| format!("writing dataset to {}", out.display()))?;
    println!("gen-data k={k} seed={seed} train={} test={}", ds.train.len(), ds.test.len());
    Ok(())
}

fn train(a: TrainArgs) -> Result<()> {
    let kind: ModelKind = a.model.parse()?;
    let dataset = Dataset::load(&a.data).with_context(|| format!("loading dataset {}", a.data.display()))?;
    let config = Vae2Config {
        lambda: a.lambda,
        l_samples: a.l_samples,
        lr: a.lr,
        weight_decay: a.weight_decay,
        epochs: a.epochs,
        batch_size: a.batch,
        adv_weight: a.adv_weight,
        z_dim: a.z_dim,
        seed: a.seed,
        aux_weight: a.aux_weight,
        aux_epochs: a.aux_epochs,
    };
    let log_every = a.log_every;
    let (model, history) = train_model(kind, &dataset, &config, |epoch, loss| {
        if log_every > 0 && (epoch % log_every == 0 || epoch + 1 == config.epochs) {
            eprintln!(
                "epoch {epoch}: total {:.6} recon_v {:.6} kl_z {:.3e} recon_ie {:.6} adv {:.4}/{:.4}",
                loss.total, loss.recon_v, loss.kl_z, loss.recon_ie, loss.adv_gen, loss.adv_disc
            );
        }
    })?;
    fs::create_dir_all(&a.out)?;
    Checkpoint { model, config }.save(&a.out.join(CHECKPOINT_FILE))?;
    history.save(&a.out.join(HISTORY_FILE))?;
    let kl = history.final_kl().map(format_real).unwrap_or_else(|| "none".into());
    println!("train model={kind} epochs={} final_kl_z={kl} out={}", a.epochs, a.out.display());
    Ok(())
}

fn parse_row(text: &str) -> Result<Vec<f64>> {
    text.split(',')
        .map(|s| s.trim().parse::<f64>().with_context(|| format!("bad number {s:?} in --input-row")))
        .collect()
}

fn sample(ckpt: &Path, input_row: &str, n: usize, seed: u64) -> Result<()> {
    let model = Checkpoint::load(&resolve_checkpoint(ckpt))?.model;
    let row = parse_row(input_row)?;
    let part = model.part_len();
    // A whole sequence is cut down to what the model conditions on.
    let input = if row.len() == 3 * part {
        &row[..model.input_len()]
    } else if row.len() == model.input_len() {
        &row[..]
    } else {
        bail!(
            "--input-row has {} values; expected {} or a full sequence of {}",
            row.len(),
            model.input_len(),
            3 * part
        );
    };
    let draws = model.sample(input, n, &mut ChaCha8Rng::seed_from_u64(seed))?;
    for d in draws {
        println!("{}", d.iter().map(|&v| format_real(v)).collect::<Vec<_>>().join(","));
    }
    Ok(())
}

/// A checkpoint argument may name the file or the directory holding it.
fn resolve_checkpoint(path: &Path) -> PathBuf {
    if path.is_dir() {
        path.join(CHECKPOINT_FILE)
    } else {
        path.to_path_buf()
    }
}

fn eval(ckpts: &[PathBuf], data: &Path, settings: &EvalSettings, out: &Path) -> Result<()> {
    let dataset = Dataset::load(data).with_context(|| format!("loading dataset {}", data.display()))?;
    let records: Vec<EvalRecord> = std::thread::scope(|scope| {
        let handles: Vec<_> = ckpts
            .iter()
            .map(|arg| {
                let test = &dataset.test;
                scope.spawn(move || -> Result<EvalRecord> {
                    let path = resolve_checkpoint(arg);
                    let ck = Checkpoint::load(&path).with_context(|| format!("loading {}", path.display()))?;
                    let history_path = path.with_file_name(HISTORY_FILE);
                    let history = if history_path.exists() {
                        Some(TrainingHistory::load(&history_path)?)
                    } else {
                        None
                    };
                    let label = arg.display().to_string();
                    Ok(evaluate_record(&label, &ck.model, history.as_ref(), test, settings)?)
                })
            })
            .collect();
        handles
            .into_iter()
            .map(|h| h.join().expect("evaluation thread panicked"))
            .collect::<Result<Vec<_>>>()
    })?;
    fs::create_dir_all(out)?;
    fs::write(out.join(EVAL_FILE), serde_json::to_string_pretty(&records)? + "\n")?;
    emit_report(&records, out)?;
    for r in &records {
        println!(
            "eval label={} model={} mean_l1={} diversity={} final_kl_z={}",
            r.label,
            r.model,
            format_real(r.stats.mean_l1),
            format_real(r.stats.diversity),
            r.stats.final_kl.map(format_real).unwrap_or_else(|| "none".into())
        );
    }
    Ok(())
}

fn verify_bounds(instances: usize, max_size: usize, seed: u64, out: &Path) -> Result<()> {
    let rows = bounds::sweep(instances, max_size, seed)?;
    if let Some(dir) = out.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir)?;
    }
    bounds::save_sweep(&rows, out)?;
    let failed: Vec<u64> = rows.iter().filter(|r| !r.pass).map(|r| r.seed).collect();
    ensure!(
        failed.is_empty(),
        "{} of {instances} instances failed, seeds {:?}",
        failed.len(),
        &failed[..failed.len().min(10)]
    );
    println!("verify-bounds instances={instances} max_size={max_size} seed={seed} failures=0");
    Ok(())
}

fn grad_check(model: &str, seed: u64) -> Result<()> {
    let target: CheckTarget = model.parse()?;
    let r = gradcheck::run(target, seed)?;
    let i = r.worst_index;
    ensure!(
        r.max_relative_error < gradcheck::TOLERANCE,
        "{target} max relative error {:e} at coordinate {i} (analytic {:e}, numeric {:e})",
        r.max_relative_error,
        r.analytic[i],
        r.numeric[i]
    );
    println!(
        "grad-check model={target} params={} max_rel_error={:e} refined={}",
        r.analytic.len(),
        r.max_relative_error,
        r.refined
    );
    Ok(())
}

fn report(input: &Path, out: &Path) -> Result<()> {
    let path = if input.is_dir() { input.join(EVAL_FILE) } else { input.to_path_buf() };
    let text = fs::read_to_string(&path).with_context(|| format!("reading {}", path.display()))?;
    let records: Vec<EvalRecord> = serde_json::from_str(&text)?;
    let written = emit_report(&records, out)?;
    println!("report records={} files={}", records.len(), written.len());
    Ok(())
}
