use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::parser::ValueSource;
use clap::{ArgMatches, Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use serde::Serialize;

use mvdistill::checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, Stage};
use mvdistill::dataset::{load_dataset, matrix_to_csv, synth_generate, write_dataset, MultiViewDataset, SyntheticSpec};
use mvdistill::metrics::{evaluate, MetricsReport};
use mvdistill::network::ModelParams;
use mvdistill::trainer::{finetune, infer_clusters, prepare_dataset, pretrain, TrainConfig, TrainLog};
use mvdistill::{Error, Result};

#[derive(Parser)]
#[command(name = "mvdistill", version, about = "Multi-view clustering with contrastive pretraining and self-distillation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write a synthetic multi-view dataset directory
    Synth(SynthArgs),
    /// Pretrain a model and write a pretrained checkpoint
    Pretrain(PretrainArgs),
    /// Fine-tune a pretrained checkpoint by self-distillation
    Finetune(FinetuneArgs),
    /// Score a checkpoint against the dataset's labels
    Evaluate(EvaluateArgs),
    /// Write cluster labels and probabilities for a dataset
    Infer(InferArgs),
    /// Synthesize or load data, pretrain, fine-tune and evaluate
    RunAll(RunAllArgs),
}

#[derive(Args)]
struct SynthFlags {
    /// Number of clusters
    #[arg(long, default_value_t = 3, value_parser = clap::value_parser!(u64).range(2..))]
    k: u64,
    #[arg(long, default_value_t = 200)]
    n_per_cluster: usize,
    /// Comma-separated feature width of each view
    #[arg(long, value_delimiter = ',', default_value = "10,12")]
    view_dims: Vec<usize>,
    /// Distance between cluster means in within-cluster standard deviations
    #[arg(long, default_value_t = 6.0)]
    separation: f64,
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
}

impl SynthFlags {
    fn spec(&self, seed: u64) -> SyntheticSpec {
        SyntheticSpec {
            n_per_cluster: self.n_per_cluster,
            k: self.k as usize,
            view_dims: self.view_dims.clone(),
            cluster_separation: self.separation,
            noise_scale: self.noise,
            seed,
        }
    }
}

#[derive(Args)]
struct SynthArgs {
    #[command(flatten)]
    synth: SynthFlags,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output dataset directory
    #[arg(long)]
    out: PathBuf,
}

/// Training flags. Each default mirrors `TrainConfig::default()`.
#[derive(Args)]
struct TrainFlags {
    /// key=value file using the flag names; flags given on the command line win
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, default_value_t = TrainConfig::default().seed)]
    seed: u64,
    #[arg(long, default_value_t = TrainConfig::default().batch_size)]
    batch_size: usize,
    #[arg(long, default_value_t = TrainConfig::default().pretrain_epochs)]
    pretrain_epochs: usize,
    #[arg(long, default_value_t = TrainConfig::default().finetune_epochs)]
    finetune_epochs: usize,
    /// Adam learning rate
    #[arg(long, default_value_t = TrainConfig::default().learning_rate)]
    lr: f64,
    /// Student contrastive temperature
    #[arg(long, default_value_t = TrainConfig::default().tau_s)]
    tau_s: f64,
    /// Teacher contrastive temperature
    #[arg(long, default_value_t = TrainConfig::default().tau_t)]
    tau_t: f64,
    /// Weight of the smoothing distribution in the distillation targets
    #[arg(long, default_value_t = TrainConfig::default().tau_d)]
    tau_d: f64,
    /// EMA momentum of the teacher head
    #[arg(long, default_value_t = TrainConfig::default().momentum_mu)]
    mu: f64,
    #[arg(long, default_value_t = TrainConfig::default().latent_dim)]
    latent_dim: usize,
    #[arg(long, default_value_t = TrainConfig::default().head_dim)]
    head_dim: usize,
    #[arg(long, default_value = "uniform", value_parser = ["uniform", "gaussian"])]
    u_mode: String,
    #[arg(long, default_value = "soft", value_parser = ["soft", "onehot"])]
    dark_mode: String,
}

/// Flag ids whose command-line values override the config file, paired with
/// their config keys.
const TRAIN_FLAG_IDS: [(&str, &str); 13] = [
    ("seed", "seed"),
    ("batch_size", "batch-size"),
    ("pretrain_epochs", "pretrain-epochs"),
    ("finetune_epochs", "finetune-epochs"),
    ("lr", "lr"),
    ("tau_s", "tau-s"),
    ("tau_t", "tau-t"),
    ("tau_d", "tau-d"),
    ("mu", "mu"),
    ("latent_dim", "latent-dim"),
    ("head_dim", "head-dim"),
    ("u_mode", "u-mode"),
    ("dark_mode", "dark-mode"),
];

#[derive(Args)]
struct PretrainArgs {
    /// Dataset directory
    #[arg(long)]
    data: PathBuf,
    /// Output directory
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct FinetuneArgs {
    #[arg(long)]
    data: PathBuf,
    /// Pretrained checkpoint
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Args)]
struct EvaluateArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    /// Also write metrics.json into this directory
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct InferArgs {
    #[arg(long)]
    data: PathBuf,
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct RunAllArgs {
    /// Dataset directory; a synthetic dataset is generated when omitted
    #[arg(long)]
    data: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    #[command(flatten)]
    synth: SynthFlags,
    #[command(flatten)]
    train: TrainFlags,
}

#[derive(Serialize)]
#[serde(rename_all = "kebab-case")]
enum CommandName {
    Pretrain,
    Finetune,
    Evaluate,
    Infer,
    RunAll,
}

#[derive(Serialize)]
struct RunManifest<'a> {
    command: CommandName,
    config: &'a TrainConfig,
    dataset_path: &'a Path,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_in: Option<&'a Path>,
    #[serde(skip_serializing_if = "Option::is_none")]
    checkpoint_out: Option<&'a Path>,
}

fn set_key(config: &mut TrainConfig, key: &str, value: &str) -> Result<()> {
    fn num<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
        value
            .parse()
            .map_err(|_| Error::Config(format!("{key}: cannot parse {value:?}")))
    }
    fn word<T: serde::de::DeserializeOwned>(key: &str, value: &str) -> Result<T> {
        serde_json::from_value(serde_json::Value::String(value.to_lowercase()))
            .map_err(|_| Error::Config(format!("{key}: unknown value {value:?}")))
    }
    let c = config;
    match key.replace('_', "-").as_str() {
        "seed" => c.seed = num(key, value)?,
        "batch-size" => c.batch_size = num(key, value)?,
        "pretrain-epochs" => c.pretrain_epochs = num(key, value)?,
        "finetune-epochs" => c.finetune_epochs = num(key, value)?,
        "lr" | "learning-rate" => c.learning_rate = num(key, value)?,
        "tau-s" => c.tau_s = num(key, value)?,
        "tau-t" => c.tau_t = num(key, value)?,
        "tau-d" => c.tau_d = num(key, value)?,
        "mu" | "momentum-mu" => c.momentum_mu = num(key, value)?,
        "latent-dim" => c.latent_dim = num(key, value)?,
        "head-dim" => c.head_dim = num(key, value)?,
        "head-hidden" => c.head_hidden = num(key, value)?,
        "encoder-hidden" => {
            c.encoder_hidden = value
                .split(',')
                .map(|w| num(key, w.trim()))
                .collect::<Result<_>>()?
        }
        "u-mode" => c.u_mode = word(key, value)?,
        "dark-mode" => c.dark_mode = word(key, value)?,
        "dark-temp" => c.dark_temp = Some(num(key, value)?),
        "kmeans-refresh-epochs" => c.kmeans_refresh_epochs = num(key, value)?,
        "kmeans-max-iter" => c.kmeans_max_iter = num(key, value)?,
        "kmeans-tol" => c.kmeans_tol = num(key, value)?,
        "include-self-negatives" => c.include_self_negatives = num(key, value)?,
        "kl-sign" => c.kl_sign = word(key, value)?,
        "iic-source" => c.iic_source = word(key, value)?,
        "finetune-encoders" => c.finetune_encoders = num(key, value)?,
        "normalize" => c.normalize = num(key, value)?,
        "drop-last" => c.drop_last = num(key, value)?,
        "eval-interval" => c.eval_interval = num(key, value)?,
        _ => return Err(Error::Config(format!("unknown config key {key:?}"))),
    }
    Ok(())
}

fn apply_config_file(config: &mut TrainConfig, path: &Path) -> Result<()> {
    let text = fs::read_to_string(path).map_err(|e| Error::Load {
        file: path.display().to_string(),
        source: e,
    })?;
    for (i, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (key, value) = line
            .split_once('=')
            .ok_or_else(|| Error::Config(format!("{}:{}: expected key=value", path.display(), i + 1)))?;
        set_key(config, key.trim(), value.trim())?;
    }
    Ok(())
}

/// `base`, then the config file, then flags given on the command line.
fn effective_config(base: TrainConfig, flags: &TrainFlags, matches: &ArgMatches) -> Result<TrainConfig> {
    let mut config = base;
    if let Some(path) = &flags.config {
        apply_config_file(&mut config, path)?;
    }
    for (id, key) in TRAIN_FLAG_IDS {
        if matches.value_source(id) == Some(ValueSource::CommandLine) {
            let raw = matches
                .get_raw(id)
                .and_then(|mut v| v.next())
                .map(|v| v.to_string_lossy().into_owned())
                .unwrap_or_default();
            set_key(&mut config, key, &raw)?;
        }
    }
    config.validate()?;
    Ok(config)
}

fn create_dir(path: &Path) -> Result<()> {
    fs::create_dir_all(path).map_err(|e| Error::io(path, e))
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn write_manifest(out: &Path, manifest: &RunManifest) -> Result<()> {
    write_text(&out.join("manifest.json"), &(serde_json::to_string_pretty(manifest)? + "\n"))
}

fn open_log(path: &Path) -> Result<TrainLog> {
    let file = fs::File::create(path).map_err(|e| Error::io(path, e))?;
    Ok(TrainLog::with_sink(Box::new(std::io::BufWriter::new(file))))
}

fn write_metrics(out: &Path, report: &MetricsReport) -> Result<()> {
    write_text(&out.join("metrics.json"), &(serde_json::to_string_pretty(report)? + "\n"))
}

fn write_predictions(out: &Path, dataset: &MultiViewDataset, config: &TrainConfig, params: &ModelParams) -> Result<Vec<usize>> {
    let (labels, probs) = infer_clusters(&prepare_dataset(dataset, config), params)?;
    let text: String = labels.iter().map(|l| format!("{l}\n")).collect();
    write_text(&out.join("labels.csv"), &text)?;
    write_text(&out.join("probs.csv"), &matrix_to_csv(&probs))?;
    Ok(labels)
}

fn require_labels(dataset: &MultiViewDataset) -> Result<&[usize]> {
    dataset.labels().ok_or_else(|| {
        Error::Usage("evaluate needs ground-truth labels, but the dataset has no labels.csv".into())
    })
}

fn run_pretrain(dataset: &MultiViewDataset, config: &TrainConfig, out: &Path) -> Result<(ModelParams, PathBuf)> {
    let mut log = open_log(&out.join("pretrain_log.jsonl"))?;
    let params = pretrain(&prepare_dataset(dataset, config), config, &mut log)?;
    let path = out.join("pretrained.ckpt");
    save_checkpoint(&Checkpoint::new(config.clone(), params.clone(), Stage::Pretrained), &path)?;
    Ok((params, path))
}

fn run_finetune(
    dataset: &MultiViewDataset,
    params: ModelParams,
    config: &TrainConfig,
    out: &Path,
) -> Result<(ModelParams, PathBuf)> {
    let mut log = open_log(&out.join("finetune_log.jsonl"))?;
    let params = finetune(&prepare_dataset(dataset, config), params, config, &mut log)?;
    let path = out.join("finetuned.ckpt");
    save_checkpoint(&Checkpoint::new(config.clone(), params.clone(), Stage::Finetuned), &path)?;
    Ok((params, path))
}

fn run(cli: Cli, matches: &ArgMatches) -> Result<()> {
    let sub = matches.subcommand().map(|(_, m)| m).expect("subcommand is required");
    match cli.command {
        Command::Synth(args) => {
            let ds = synth_generate(&args.synth.spec(args.seed))?;
            write_dataset(&ds, &args.out)?;
            println!("wrote {} samples, {} views to {}", ds.n_samples(), ds.n_views(), args.out.display());
        }
        Command::Pretrain(args) => {
            let config = effective_config(TrainConfig::default(), &args.train, sub)?;
            let ds = load_dataset(&args.data)?;
            create_dir(&args.out)?;
            let (_, ckpt) = run_pretrain(&ds, &config, &args.out)?;
            write_manifest(
                &args.out,
                &RunManifest {
                    command: CommandName::Pretrain,
                    config: &config,
                    dataset_path: &args.data,
                    checkpoint_in: None,
                    checkpoint_out: Some(&ckpt),
                },
            )?;
            println!("wrote {}", ckpt.display());
        }
        Command::Finetune(args) => {
            let ckpt = load_checkpoint(&args.checkpoint)?;
            if ckpt.stage != Stage::Pretrained {
                return Err(Error::Stage(format!(
                    "{} is already fine-tuned; finetune needs a pretrained checkpoint",
                    args.checkpoint.display()
                )));
            }
            let config = effective_config(ckpt.config.clone(), &args.train, sub)?;
            let ds = load_dataset(&args.data)?;
            create_dir(&args.out)?;
            let (_, out_ckpt) = run_finetune(&ds, ckpt.params, &config, &args.out)?;
            write_manifest(
                &args.out,
                &RunManifest {
                    command: CommandName::Finetune,
                    config: &config,
                    dataset_path: &args.data,
                    checkpoint_in: Some(&args.checkpoint),
                    checkpoint_out: Some(&out_ckpt),
                },
            )?;
            println!("wrote {}", out_ckpt.display());
        }
        Command::Evaluate(args) => {
            let ds = load_dataset(&args.data)?;
            let truth = require_labels(&ds)?.to_vec();
            let ckpt = load_checkpoint(&args.checkpoint)?;
            let (pred, _) = infer_clusters(&prepare_dataset(&ds, &ckpt.config), &ckpt.params)?;
            let report = evaluate(&pred, &truth, ds.k())?;
            if let Some(out) = &args.out {
                create_dir(out)?;
                write_metrics(out, &report)?;
                write_manifest(
                    out,
                    &RunManifest {
                        command: CommandName::Evaluate,
                        config: &ckpt.config,
                        dataset_path: &args.data,
                        checkpoint_in: Some(&args.checkpoint),
                        checkpoint_out: None,
                    },
                )?;
            }
            println!("{}", report.to_json());
        }
        Command::Infer(args) => {
            let ds = load_dataset(&args.data)?;
            let ckpt = load_checkpoint(&args.checkpoint)?;
            create_dir(&args.out)?;
            write_predictions(&args.out, &ds, &ckpt.config, &ckpt.params)?;
            write_manifest(
                &args.out,
                &RunManifest {
                    command: CommandName::Infer,
                    config: &ckpt.config,
                    dataset_path: &args.data,
                    checkpoint_in: Some(&args.checkpoint),
                    checkpoint_out: None,
                },
            )?;
            println!("wrote labels.csv and probs.csv to {}", args.out.display());
        }
        Command::RunAll(args) => {
            let config = effective_config(TrainConfig::default(), &args.train, sub)?;
            create_dir(&args.out)?;
            let data_path = match &args.data {
                Some(p) => p.clone(),
                None => {
                    let p = args.out.join("data");
                    write_dataset(&synth_generate(&args.synth.spec(config.seed))?, &p)?;
                    p
                }
            };
            let ds = load_dataset(&data_path)?;
            let (params, _) = run_pretrain(&ds, &config, &args.out)?;
            let (params, ckpt) = run_finetune(&ds, params, &config, &args.out)?;
            let pred = write_predictions(&args.out, &ds, &config, &params)?;
            write_manifest(
                &args.out,
                &RunManifest {
                    command: CommandName::RunAll,
                    config: &config,
                    dataset_path: &data_path,
                    checkpoint_in: None,
                    checkpoint_out: Some(&ckpt),
                },
            )?;
            match ds.labels() {
                Some(truth) => {
                    let report = evaluate(&pred, truth, ds.k())?;
                    write_metrics(&args.out, &report)?;
                    println!("{}", report.to_json());
                }
                None => println!("dataset has no labels; wrote predictions only"),
            }
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let matches = Cli::command().get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    match run(cli, &matches) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::FAILURE
        }
    }
}
