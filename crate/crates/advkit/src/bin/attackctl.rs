//! Command-line front end: train a desk-scale oracle, serve it over HTTP,
//! run an experiment config end to end, or summarize an emitted report.

use std::path::PathBuf;

use anyhow::{bail, Context, Result};
use clap::{Parser, Subcommand};

use advkit::harness::{
    emit_report, generate_synthetic_dataset, run_attack_experiment, ExperimentConfig,
    ExperimentReport, HarnessError,
};
use advkit::models::{accuracy, load, save, train, ArchId, ConvNet, TrainHyper};
use advkit::oracle::service::serve_mock_service;

#[derive(Parser)]
#[command(
    name = "attackctl",
    version,
    about = "Black-box transfer attack toolkit: substitute training, FGSM/PGD/FFL-PGD sweeps, defenses, and reports"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Train an oracle model on synthetic data and save it with its labels.
    TrainOracle {
        /// Model architecture: cnn-a, cnn-b, or mini-resnet.
        #[arg(long, default_value = "mini-resnet")]
        arch: String,
        /// Number of synthetic classes.
        #[arg(long, default_value_t = 4)]
        classes: usize,
        /// Images per class.
        #[arg(long, default_value_t = 32)]
        per_class: usize,
        /// Square image size in pixels (even, at least 8).
        #[arg(long, default_value_t = 32)]
        size: usize,
        /// Seed for data generation, weight init, and training order.
        #[arg(long, default_value_t = 7)]
        seed: u64,
        #[arg(long, default_value_t = 10)]
        epochs: usize,
        #[arg(long, default_value_t = 32)]
        batch_size: usize,
        #[arg(long, default_value_t = 3e-3)]
        lr: f64,
        /// Output path for the model checkpoint.
        #[arg(long, default_value = "oracle.akm")]
        out: PathBuf,
        /// Output path for the JSON class-name list; defaults to the
        /// checkpoint path with a .labels.json extension.
        #[arg(long)]
        labels_out: Option<PathBuf>,
    },
    /// Serve a saved model as the HTTP classification service.
    ServeOracle {
        #[arg(long)]
        model: PathBuf,
        /// JSON array of class names, one per model output.
        #[arg(long)]
        labels: PathBuf,
        #[arg(long, default_value = "127.0.0.1:8080")]
        bind: String,
        /// Include per-class scores in responses.
        #[arg(long, default_value_t = false)]
        scores: bool,
    },
    /// Run the experiment described by a JSON config and emit its report.
    Run {
        #[arg(long)]
        config: PathBuf,
    },
    /// Verify and summarize a previously emitted report directory.
    Report {
        #[arg(long = "in")]
        in_dir: PathBuf,
    },
}

fn main() -> Result<()> {
    match Cli::parse().command {
        Command::TrainOracle {
            arch,
            classes,
            per_class,
            size,
            seed,
            epochs,
            batch_size,
            lr,
            out,
            labels_out,
        } => train_oracle(
            &arch, classes, per_class, size, seed, epochs, batch_size, lr, out, labels_out,
        ),
        Command::ServeOracle {
            model,
            labels,
            bind,
            scores,
        } => serve_oracle(&model, &labels, &bind, scores),
        Command::Run { config } => run(&config),
        Command::Report { in_dir } => report(&in_dir),
    }
}

#[allow(clippy::too_many_arguments)]
fn train_oracle(
    arch: &str,
    classes: usize,
    per_class: usize,
    size: usize,
    seed: u64,
    epochs: usize,
    batch_size: usize,
    lr: f64,
    out: PathBuf,
    labels_out: Option<PathBuf>,
) -> Result<()> {
    let arch: ArchId = arch.parse().context("unknown architecture")?;
    let data = generate_synthetic_dataset(classes, per_class, size, seed)
        .context("generating training data")?;
    let mut net = ConvNet::new(arch, (size, size), 3, classes, seed)
        .context("building the model")?;
    let hyper = TrainHyper {
        epochs,
        batch_size,
        lr,
        seed,
        ..TrainHyper::default()
    };
    let trained = train(&mut net, &data, &hyper, None).context("training")?;
    let acc = accuracy(&net, &data).context("scoring")?;
    save(&net, &out).context("saving the checkpoint")?;
    let labels_path = labels_out.unwrap_or_else(|| out.with_extension("labels.json"));
    let mut body = serde_json::to_vec_pretty(data.class_names())?;
    body.push(b'\n');
    std::fs::write(&labels_path, body)
        .with_context(|| format!("writing {}", labels_path.display()))?;
    println!(
        "trained {} on {} images ({} classes, {}x{}): accuracy {:.1}%, final loss {:.4}",
        arch,
        data.len(),
        classes,
        size,
        size,
        acc * 100.0,
        trained.epoch_losses.last().copied().unwrap_or(f64::NAN)
    );
    println!("model:  {}", out.display());
    println!("labels: {}", labels_path.display());
    Ok(())
}

fn serve_oracle(model: &PathBuf, labels: &PathBuf, bind: &str, scores: bool) -> Result<()> {
    let net = load(model).with_context(|| format!("loading {}", model.display()))?;
    let raw = std::fs::read(labels).with_context(|| format!("reading {}", labels.display()))?;
    let names: Vec<String> = serde_json::from_slice(&raw).context("parsing the labels file")?;
    let (h, w, c) = net.input_shape();
    let handle = serve_mock_service(net, names, bind, scores).context("starting the service")?;
    println!(
        "serving {} ({h}x{w}x{c} input) at {}/classify",
        model.display(),
        handle.base_url()
    );
    println!("POST {{\"image_b64\": \"<base64 PNG>\"}}; ctrl-c to stop");
    loop {
        std::thread::park();
    }
}

fn run(config_path: &PathBuf) -> Result<()> {
    let config = ExperimentConfig::from_json_file(config_path)
        .with_context(|| format!("loading {}", config_path.display()))?;
    match run_attack_experiment(&config) {
        Ok(report) => {
            let files = emit_report(&report, &config.output_dir)?;
            print_summary(&report);
            println!("report: {}", files.report_json.display());
            println!("rows:   {}", files.results_csv.display());
            for plot in &files.plots {
                println!("plot:   {}", plot.display());
            }
            Ok(())
        }
        Err(HarnessError::OracleUnreachable { reason, partial }) => {
            let files = emit_report(&partial, &config.output_dir)?;
            print_summary(&partial);
            eprintln!("partial report: {}", files.report_json.display());
            bail!("oracle unreachable: {reason}");
        }
        Err(other) => Err(other.into()),
    }
}

fn report(in_dir: &PathBuf) -> Result<()> {
    let path = in_dir.join("report.json");
    let raw = std::fs::read(&path).with_context(|| format!("reading {}", path.display()))?;
    let report: ExperimentReport = serde_json::from_slice(&raw).context("parsing the report")?;
    report
        .verify_consistency()
        .context("report failed its consistency check")?;
    print_summary(&report);
    println!("consistency: ok");
    Ok(())
}

fn print_summary(report: &ExperimentReport) {
    println!(
        "{} images ({} labeled), {} oracle queries, substitute agreement {}",
        report.images_total,
        report.images_labeled,
        report.total_queries,
        report
            .substitute_agreement
            .map(|a| format!("{:.1}%", a * 100.0))
            .unwrap_or_else(|| "n/a".to_string())
    );
    if !report.failures.is_empty() {
        println!("{} failed queries (see report.json)", report.failures.len());
    }
    if report.aggregates.is_empty() {
        println!("no completed attack rows");
        return;
    }
    println!(
        "{:<10} {:>7} {:>6} {:>8} {:>9} {:>7}",
        "attack", "epsilon", "rows", "escape", "psnr(db)", "ssim"
    );
    for agg in &report.aggregates {
        println!(
            "{:<10} {:>7} {:>6} {:>7.1}% {:>9.2} {:>7}",
            agg.attack.to_string(),
            agg.epsilon,
            agg.rows,
            agg.escape_rate * 100.0,
            agg.mean_psnr_db,
            agg.mean_ssim
                .map(|s| format!("{s:.3}"))
                .unwrap_or_else(|| "n/a".to_string()),
        );
    }
}
