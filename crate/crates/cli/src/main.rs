//! `umamba2` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or validation error,
//! 3 numerical divergence.

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context};
use clap::{Parser, Subcommand, ValueEnum};
use serde_json::json;

use umamba2::checkpoint::{load_checkpoint, save_checkpoint, TASK_SPECIFIC_PREFIXES};
use umamba2::config::{Precision, RunConfig};
use umamba2::dataset::{dataset_schema, read_dataset, read_images, write_dataset};
use umamba2::inference::{tta_predict, TtaConfig};
use umamba2::metrics::evaluate;
use umamba2::network::Model;
use umamba2::phantom::{class_volumes, generate_dataset, mirror_consistency_check};
use umamba2::postprocess::{compute_class_thresholds, filter_small_components, Connectivity, ThresholdTable};
use umamba2::prompts::load_clicks;
use umamba2::schema::{load_schema, LabelSchema};
use umamba2::selftest::run_selftest;
use umamba2::ssd::{benchmark_ssd, BenchSpec, SsdForm};
use umamba2::tensor::Element;
use umamba2::training::{dae_arch, pretrain_dae, train, EpochMetrics, Task};
use umamba2::volume::{read_image, read_labels, write_volume};

/// Version of the metrics-log header line.
const METRICS_FORMAT_VERSION: u32 = 1;

#[derive(Parser, Debug)]
#[command(name = "umamba2", version, about = "Volumetric segmentation with a Mamba2 bottleneck U-Net")]
struct Cli {
    /// Worker threads for sliding-window inference (0 = all cores).
    #[arg(long, global = true, default_value_t = 1)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum TaskArg {
    Segmentation,
    Interactive,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic labelled dataset.
    GenPhantoms {
        #[arg(long, visible_alias = "out-dir")]
        out: PathBuf,
        #[arg(long, default_value_t = 8)]
        count: usize,
        #[arg(long)]
        seed: Option<u64>,
        /// Volume extents `SI,AP,LR`; each at least 32.
        #[arg(long, value_delimiter = ',')]
        extents: Option<Vec<usize>>,
        #[arg(long)]
        config: Option<PathBuf>,
    },
    /// Denoising pretraining on the images of a dataset.
    Pretrain {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Supervised training.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, value_enum)]
        task: Option<TaskArg>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        seed: Option<u64>,
        /// Pretrained checkpoint whose trunk initializes the network.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        metrics: Option<PathBuf>,
    },
    /// Predict a label map for one image.
    Infer {
        #[arg(long)]
        model: PathBuf,
        #[arg(long)]
        image: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        clicks: Option<PathBuf>,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        no_tta: bool,
        /// Write a timing report here.
        #[arg(long)]
        report: Option<PathBuf>,
    },
    /// Remove components smaller than the per-class thresholds.
    Postprocess {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        thresholds: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Derive per-class size thresholds from ground-truth labels.
    ComputeThresholds {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 26)]
        connectivity: u8,
    },
    /// Dice and HD95 of a prediction against ground truth.
    Evaluate {
        #[arg(long)]
        pred: PathBuf,
        #[arg(long)]
        gt: PathBuf,
        #[arg(long)]
        schema: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Time the three SSD evaluation forms.
    BenchmarkSsd {
        #[arg(long, value_delimiter = ',', default_values_t = [64usize, 128, 256, 512])]
        lengths: Vec<usize>,
        #[arg(long, value_delimiter = ',', default_values_t = ["recurrent".to_string(), "quadratic".to_string(), "chunked".to_string()])]
        forms: Vec<String>,
        #[arg(long, default_value_t = 16)]
        state_dim: usize,
        #[arg(long, default_value_t = 16)]
        head_dim: usize,
        #[arg(long, default_value_t = 64)]
        chunk: usize,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Run internal consistency checks.
    Selftest,
}

/// Misuse of the command line that clap cannot detect; exits with 1.
#[derive(Debug)]
struct UsageError(String);

impl std::fmt::Display for UsageError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for UsageError {}

fn usage(msg: impl Into<String>) -> anyhow::Error {
    UsageError(msg.into()).into()
}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<UsageError>().is_some() {
        return 1;
    }
    match err.downcast_ref::<umamba2::Error>() {
        Some(e) if e.is_numerical() => 3,
        _ => 2,
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

fn load_config(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    Ok(match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    })
}

fn write_json(path: &Path, value: &impl serde::Serialize) -> anyhow::Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    std::fs::write(path, text).map_err(|e| umamba2::Error::io(path, e))?;
    Ok(())
}

/// JSONL metrics log: a header line echoing the configuration, then one
/// line per epoch.
struct MetricsLog {
    out: Option<BufWriter<File>>,
}

impl MetricsLog {
    fn create(path: Option<&Path>, kind: &str, config: &serde_json::Value) -> anyhow::Result<Self> {
        let Some(path) = path else { return Ok(Self { out: None }) };
        let f = File::create(path).map_err(|e| umamba2::Error::io(path, e))?;
        let mut out = BufWriter::new(f);
        let header = json!({ "format_version": METRICS_FORMAT_VERSION, "kind": kind, "config": config });
        writeln!(out, "{header}")?;
        out.flush()?;
        Ok(Self { out: Some(out) })
    }

    fn record(&mut self, m: &EpochMetrics) -> umamba2::Result<()> {
        let line = json!({ "epoch": m.epoch, "loss": m.loss, "mean_dice": m.mean_dice, "lr": m.lr });
        eprintln!(
            "epoch {:>4}  loss {:.5}  dice {}",
            m.epoch,
            m.loss,
            m.mean_dice.map_or("-".into(), |d| format!("{d:.4}"))
        );
        if let Some(out) = &mut self.out {
            writeln!(out, "{line}")
                .and_then(|_| out.flush())
                .map_err(|e| umamba2::Error::io(Path::new("metrics log"), e))?;
        }
        Ok(())
    }
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::GenPhantoms { out, count, seed, extents, config } => {
            if count == 0 {
                return Err(usage("--count must be at least 1"));
            }
            let mut cfg = load_config(config.as_deref())?;
            if let Some(s) = seed {
                cfg.phantom.seed = s;
            }
            if let Some(e) = extents {
                if e.len() != 3 {
                    return Err(usage("--extents takes three comma-separated values"));
                }
                cfg.phantom.extents = [e[0], e[1], e[2]];
            }
            let schema = LabelSchema::dental();
            let cases = generate_dataset(&cfg.phantom, &schema, count)?;
            let names = write_dataset(&out, &cases, &schema)?;
            let summary: Vec<_> = names
                .iter()
                .zip(&cases)
                .map(|(n, (_, l))| {
                    json!({
                        "case": n,
                        "class_volumes": class_volumes(l, schema.num_classes()),
                        "mirror_dice": mirror_consistency_check(l, &schema).dice,
                    })
                })
                .collect();
            println!("{}", serde_json::to_string_pretty(&summary)?);
            Ok(())
        }
        Command::Pretrain { data, out, config, epochs, metrics } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(e) = epochs {
                cfg.pretrain.epochs = e;
            }
            let images = read_images(&data)?;
            let echo = json!({ "run": cfg });
            let mut log = MetricsLog::create(metrics.as_deref(), "pretrain", &echo)?;
            match cfg.precision {
                Precision::F32 => pretrain_with::<f32>(&cfg, &images, &out, echo, &mut log),
                Precision::F64 => pretrain_with::<f64>(&cfg, &images, &out, echo, &mut log),
            }
        }
        Command::Train { data, out, config, task, epochs, seed, init, metrics } => {
            let mut cfg = load_config(config.as_deref())?;
            if let Some(t) = task {
                cfg.train.task = match t {
                    TaskArg::Segmentation => Task::Segmentation,
                    TaskArg::Interactive => Task::Interactive,
                };
            }
            if cfg.train.task == Task::Interactive {
                cfg.arch.click_branch = true;
            }
            if let Some(e) = epochs {
                cfg.train.epochs = e;
            }
            if let Some(s) = seed {
                cfg.train.seed = s;
                cfg.arch.seed = s;
            }
            cfg.validate()?;
            let schema = dataset_schema(&data)?;
            let cases = read_dataset(&data)?;
            let echo = json!({ "run": cfg, "schema": schema });
            let mut log = MetricsLog::create(metrics.as_deref(), "train", &echo)?;
            match cfg.precision {
                Precision::F32 => train_with::<f32>(&cfg, &schema, &cases, init.as_deref(), &out, echo, &mut log),
                Precision::F64 => train_with::<f64>(&cfg, &schema, &cases, init.as_deref(), &out, echo, &mut log),
            }
        }
        Command::Infer { model, image, out, clicks, schema, config, no_tta, report } => {
            let ckpt = load_checkpoint(&model)?;
            let mut cfg = load_config(config.as_deref())?;
            cfg.sliding_window.threads = cli.threads;
            let tta = if no_tta { TtaConfig { enabled: false, ..cfg.tta.clone() } } else { cfg.tta.clone() };
            let schema = match schema {
                Some(p) => load_schema(&p)?,
                None => match ckpt.manifest.config.get("schema") {
                    Some(v) => serde_json::from_value(v.clone()).context("schema stored in checkpoint")?,
                    None => LabelSchema::dental(),
                },
            };
            let img = read_image(&image)?;
            let clicks = match clicks {
                Some(p) => load_clicks(&p)?,
                None => Vec::new(),
            };
            if !clicks.is_empty() && !ckpt.manifest.arch.click_branch {
                return Err(usage("--clicks given but the model was trained without prompts"));
            }
            let (probs, rep) = match ckpt.manifest.dtype.as_str() {
                "f64" => {
                    let m: Model<f64> = ckpt.into_model()?;
                    tta_predict(&m, &img, &clicks, &schema, &cfg.sliding_window, &tta)?
                }
                _ => {
                    let m: Model<f32> = ckpt.into_model()?;
                    tta_predict(&m, &img, &clicks, &schema, &cfg.sliding_window, &tta)?
                }
            };
            write_volume(&out, &probs.argmax())?;
            eprintln!("{} passes x {} windows in {:.2}s", rep.passes, rep.windows_per_pass, rep.seconds);
            if let Some(r) = report {
                write_json(&r, &rep)?;
            }
            Ok(())
        }
        Command::Postprocess { pred, thresholds, out } => {
            let text = std::fs::read_to_string(&thresholds).map_err(|e| umamba2::Error::io(&thresholds, e))?;
            let table: ThresholdTable = serde_json::from_str(&text).map_err(umamba2::Error::from)?;
            let p = read_labels(&pred)?;
            write_volume(&out, &filter_small_components(&p, &table)?)?;
            Ok(())
        }
        Command::ComputeThresholds { data, out, connectivity } => {
            let conn = Connectivity::try_from(connectivity).map_err(|e| usage(e.to_string()))?;
            let schema = dataset_schema(&data)?;
            let gts: Vec<_> = read_dataset(&data)?.into_iter().map(|(_, l)| l).collect();
            let table = compute_class_thresholds(&gts, &schema, conn);
            write_json(&out, &table)?;
            println!("{}", serde_json::to_string(&table.thresholds)?);
            Ok(())
        }
        Command::Evaluate { pred, gt, schema, out } => {
            let k = match schema {
                Some(p) => load_schema(&p)?.num_classes(),
                None => LabelSchema::dental().num_classes(),
            };
            let report = evaluate(&read_labels(&pred)?, &read_labels(&gt)?, k)?;
            let text = serde_json::to_string_pretty(&report)?;
            match out {
                Some(p) => write_json(&p, &report)?,
                None => println!("{text}"),
            }
            Ok(())
        }
        Command::BenchmarkSsd { lengths, forms, state_dim, head_dim, chunk, repeats, out } => {
            let forms = forms
                .iter()
                .map(|f| f.parse::<SsdForm>().map_err(|e| usage(e.to_string())))
                .collect::<anyhow::Result<Vec<_>>>()?;
            if lengths.is_empty() || lengths.contains(&0) {
                return Err(usage("--lengths must be positive"));
            }
            let spec = BenchSpec { lengths, forms, state_dim, head_dim, chunk_len: chunk, repeats, seed: 0 };
            let records = benchmark_ssd(&spec)?;
            match out {
                Some(p) => write_json(&p, &records)?,
                None => println!("{}", serde_json::to_string_pretty(&records)?),
            }
            Ok(())
        }
        Command::Selftest => {
            let report = run_selftest();
            for c in &report.checks {
                println!("{} {:<24} {}", if c.passed { "ok  " } else { "FAIL" }, c.name, c.detail);
            }
            if !report.passed() {
                bail!(umamba2::Error::Validation("selftest failed".into()));
            }
            Ok(())
        }
    }
}

fn pretrain_with<F: Element>(
    cfg: &RunConfig,
    images: &[umamba2::volume::Image],
    out: &Path,
    echo: serde_json::Value,
    log: &mut MetricsLog,
) -> anyhow::Result<()> {
    let mut model = Model::<F>::build(&dae_arch(&cfg.arch))?;
    pretrain_dae(&mut model, images, &cfg.pretrain, |m| log.record(m))?;
    save_checkpoint(out, &model, echo)?;
    Ok(())
}

fn train_with<F: Element>(
    cfg: &RunConfig,
    schema: &LabelSchema,
    cases: &[(umamba2::volume::Image, umamba2::volume::LabelVolume)],
    init: Option<&Path>,
    out: &Path,
    echo: serde_json::Value,
    log: &mut MetricsLog,
) -> anyhow::Result<()> {
    let mut model = Model::<F>::build(&cfg.arch)?;
    if let Some(p) = init {
        let ckpt = load_checkpoint(p)?;
        let rep = ckpt.transfer_into(&mut model.params, &TASK_SPECIFIC_PREFIXES)?;
        eprintln!("initialized {} arrays from {}", rep.copied.len(), p.display());
    }
    train(&mut model, cases, schema, &cfg.train, |m| log.record(m))?;
    save_checkpoint(out, &model, echo)?;
    Ok(())
}
