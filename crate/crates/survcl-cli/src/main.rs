//! Command-line front end: data generation, pretraining, finetuning,
//! evaluation, the ablation sweep, and embedding export.
//!
//! Exit codes: 0 on success, 1 on usage errors, 2 on runtime failures.

use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};

use survcl::config::{ConfigError, ExperimentConfig, CONFIG_KEYS};
use survcl::data::{generate_synthetic, load_csv, save_csv, Dataset, Split};
use survcl::pipeline::{
    ablation_sweep, evaluate_split, export_embeddings, finetune, load_checkpoint, pretrain,
    save_checkpoint, write_embeddings_csv, Checkpoint, CheckpointMeta, EmbeddingProjection,
    MetricsReport, DEFAULT_SWEEP_GRID,
};

#[derive(Parser)]
#[command(
    name = "survcl",
    version,
    about = "Time- and event-aware contrastive pretraining for survival prediction"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic right-censored cohort CSV.
    GenerateData(GenerateDataArgs),
    /// Contrastive pretraining of the encoder on the training split.
    Pretrain(PretrainArgs),
    /// Train the survival head (and encoder) from a checkpoint or scratch.
    Finetune(FinetuneArgs),
    /// Compute C-td and IBS for a finetuned checkpoint on one split.
    Evaluate(EvaluateArgs),
    /// Run the full protocol for each (alpha, beta) ablation cell.
    Sweep(SweepArgs),
    /// Export encoder representations, raw or as 2 principal components.
    ExportEmbeddings(ExportArgs),
}

#[derive(Args)]
struct ConfigArgs {
    /// Flat `key = value` config file; defaults are used when omitted.
    #[arg(long, value_name = "FILE")]
    config: Option<PathBuf>,
    /// Override one config key (repeatable); applied after the file.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set mode=<MODE>.
    #[arg(long, value_name = "MODE")]
    mode: Option<String>,
    /// Shorthand for --set data=<FILE>.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
}

#[derive(Args)]
struct GenerateDataArgs {
    /// Number of subjects.
    #[arg(long)]
    n: usize,
    /// Feature dimension.
    #[arg(long)]
    d: usize,
    /// Number of latent stages driving hazards.
    #[arg(long, default_value_t = 4)]
    stages: usize,
    /// Fraction of subjects censored in expectation.
    #[arg(long, default_value_t = 0.25)]
    censor_rate: f64,
    /// Generator seed.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output CSV path.
    #[arg(long, value_name = "FILE")]
    out: PathBuf,
    /// Overwrite existing files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct PretrainArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Seed for this run; defaults to the first config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the checkpoint, loss log, and resolved config.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Overwrite existing files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct FinetuneArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Pretrained checkpoint to start from; omit to train from scratch.
    #[arg(long, value_name = "FILE")]
    checkpoint: Option<PathBuf>,
    /// Seed for this run; defaults to the first config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Directory for the checkpoint, metrics, and resolved config.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Overwrite existing files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Finetuned checkpoint to evaluate.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Split to evaluate: val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Override one config key of the checkpoint's config (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set data=<FILE>.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Directory for the metrics report and resolved config.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Overwrite existing files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    config: ConfigArgs,
    /// Comma-separated alpha values; crossed with --betas when given.
    #[arg(long, value_name = "LIST")]
    alphas: Option<String>,
    /// Comma-separated beta values; crossed with --alphas when given.
    #[arg(long, value_name = "LIST")]
    betas: Option<String>,
    /// Split to evaluate each cell on: val or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Directory for the sweep table and resolved config.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Overwrite existing files.
    #[arg(long)]
    force: bool,
}

#[derive(Args)]
struct ExportArgs {
    /// Checkpoint whose encoder produces the representations.
    #[arg(long, value_name = "FILE")]
    checkpoint: PathBuf,
    /// Split to export: train, val, or test.
    #[arg(long, default_value = "test")]
    split: String,
    /// Coordinates to write: raw or pca2.
    #[arg(long, default_value = "raw")]
    projection: String,
    /// Override one config key of the checkpoint's config (repeatable).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
    /// Shorthand for --set data=<FILE>.
    #[arg(long, value_name = "FILE")]
    data: Option<PathBuf>,
    /// Directory for the table and resolved config.
    #[arg(long, value_name = "DIR")]
    out_dir: PathBuf,
    /// Overwrite existing files.
    #[arg(long)]
    force: bool,
}

enum CliError {
    Usage(String),
    Runtime(String),
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Usage(e.to_string())
    }
}

impl From<survcl::pipeline::PipelineError> for CliError {
    fn from(e: survcl::pipeline::PipelineError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

impl From<survcl::data::DataError> for CliError {
    fn from(e: survcl::data::DataError) -> Self {
        CliError::Runtime(e.to_string())
    }
}

fn keys_help() -> String {
    let mut s = String::from("Config keys (file lines or --set KEY=VALUE):\n");
    for key in CONFIG_KEYS {
        s.push_str(&format!("  {:<16} {} [default: {}]\n", key.name, key.help, key.default));
    }
    s
}

fn main() {
    std::process::exit(real_main());
}

fn real_main() -> i32 {
    let help = keys_help();
    let mut command = Cli::command();
    let names: Vec<String> =
        command.get_subcommands().map(|c| c.get_name().to_string()).collect();
    for name in names {
        command = command.mut_subcommand(name, |c| c.after_help(help.clone()));
    }
    let matches = match command.try_get_matches() {
        Ok(m) => m,
        Err(e) => {
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            e.print().expect("write to terminal");
            return code;
        }
    };
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => {
            e.print().expect("write to terminal");
            return 1;
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(CliError::Usage(msg)) => {
            eprintln!("error: {msg}");
            1
        }
        Err(CliError::Runtime(msg)) => {
            eprintln!("error: {msg}");
            2
        }
    }
}

fn run(cli: Cli) -> Result<(), CliError> {
    match cli.command {
        Command::GenerateData(args) => run_generate(args),
        Command::Pretrain(args) => run_pretrain(args),
        Command::Finetune(args) => run_finetune(args),
        Command::Evaluate(args) => run_evaluate(args),
        Command::Sweep(args) => run_sweep(args),
        Command::ExportEmbeddings(args) => run_export(args),
    }
}

impl ConfigArgs {
    fn resolve(&self) -> Result<ExperimentConfig, CliError> {
        let mut config = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).map_err(|e| {
                    CliError::Runtime(format!("cannot read {}: {e}", path.display()))
                })?;
                ExperimentConfig::parse_str(&text)?
            }
            None => ExperimentConfig::default(),
        };
        for spec in &self.set {
            config.apply_override(spec)?;
        }
        if let Some(mode) = &self.mode {
            config.apply("mode", mode)?;
        }
        if let Some(data) = &self.data {
            config.apply("data", &data.display().to_string())?;
        }
        config.validate()?;
        Ok(config)
    }
}

fn apply_overrides(
    mut config: ExperimentConfig,
    set: &[String],
    data: &Option<PathBuf>,
) -> Result<ExperimentConfig, CliError> {
    for spec in set {
        config.apply_override(spec)?;
    }
    if let Some(data) = data {
        config.apply("data", &data.display().to_string())?;
    }
    config.validate()?;
    Ok(config)
}

fn guard_overwrite(path: &Path, force: bool) -> Result<(), CliError> {
    if path.exists() && !force {
        return Err(CliError::Runtime(format!(
            "refusing to overwrite {}; pass --force",
            path.display()
        )));
    }
    Ok(())
}

fn prepare_out_dir(dir: &Path, config: &ExperimentConfig) -> Result<(), CliError> {
    std::fs::create_dir_all(dir)
        .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", dir.display())))?;
    // The resolved config is informational and refreshed on every run.
    std::fs::write(dir.join("resolved_config.txt"), config.to_config_string())
        .map_err(|e| CliError::Runtime(format!("cannot write resolved config: {e}")))?;
    Ok(())
}

fn load_dataset(config: &ExperimentConfig) -> Result<Dataset, CliError> {
    if config.data.is_empty() {
        return Err(CliError::Usage(
            "no dataset: set the `data` config key or pass --data".to_string(),
        ));
    }
    load_csv(Path::new(&config.data))
        .map_err(|e| CliError::Runtime(format!("cannot load {}: {e}", config.data)))
}

fn parse_split(name: &str) -> Result<Split, CliError> {
    match name {
        "train" => Ok(Split::Train),
        "val" => Ok(Split::Val),
        "test" => Ok(Split::Test),
        other => Err(CliError::Usage(format!("unknown split `{other}`, expected val or test"))),
    }
}

fn pick_seed(requested: Option<u64>, config: &ExperimentConfig) -> u64 {
    requested.unwrap_or(config.seeds[0])
}

fn write_loss_csv(path: &Path, header: &str, losses: &[f64]) -> Result<(), CliError> {
    let mut text = format!("{header}\n");
    for (i, loss) in losses.iter().enumerate() {
        text.push_str(&format!("{i},{loss:.17e}\n"));
    }
    std::fs::write(path, text)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", path.display())))
}

fn run_generate(args: GenerateDataArgs) -> Result<(), CliError> {
    guard_overwrite(&args.out, args.force)?;
    let dataset = generate_synthetic(args.n, args.d, args.stages, args.censor_rate, args.seed)
        .map_err(|e| CliError::Usage(e.to_string()))?;
    if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)
            .map_err(|e| CliError::Runtime(format!("cannot create {}: {e}", parent.display())))?;
    }
    save_csv(&dataset, &args.out)?;
    println!(
        "wrote {} subjects ({} train / {} val / {} test) to {}",
        dataset.len(),
        dataset.indices(Split::Train).len(),
        dataset.indices(Split::Val).len(),
        dataset.indices(Split::Test).len(),
        args.out.display()
    );
    Ok(())
}

fn run_pretrain(args: PretrainArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let dataset = load_dataset(&config)?;
    let seed = pick_seed(args.seed, &config);
    let ckpt_path = args.out_dir.join(format!("pretrain-seed{seed}.ckpt"));
    let loss_path = args.out_dir.join(format!("pretrain-loss-seed{seed}.csv"));
    guard_overwrite(&ckpt_path, args.force)?;
    guard_overwrite(&loss_path, args.force)?;
    prepare_out_dir(&args.out_dir, &config)?;

    let output = pretrain(&config, &dataset, seed)?;
    let meta = CheckpointMeta {
        config: config.to_config_string(),
        head_kind: "projection".to_string(),
        step: output.steps,
        seed,
        train_ids: dataset.ids(Split::Train),
    };
    save_checkpoint(&Checkpoint::from_model(&output.model, None, meta), &ckpt_path)?;
    write_loss_csv(&loss_path, "step,loss", &output.step_losses)?;
    println!(
        "pretrained mode={} for {} steps (loss {:.6} -> {:.6}); checkpoint at {}",
        config.mode,
        output.steps,
        output.step_losses.first().copied().unwrap_or(f64::NAN),
        output.step_losses.last().copied().unwrap_or(f64::NAN),
        ckpt_path.display()
    );
    Ok(())
}

fn run_finetune(args: FinetuneArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let dataset = load_dataset(&config)?;
    let seed = pick_seed(args.seed, &config);
    let ckpt_path = args.out_dir.join(format!("finetune-seed{seed}.ckpt"));
    let loss_path = args.out_dir.join(format!("finetune-loss-seed{seed}.csv"));
    let report_path = args.out_dir.join(format!("val-metrics-seed{seed}.json"));
    for path in [&ckpt_path, &loss_path, &report_path] {
        guard_overwrite(path, args.force)?;
    }
    prepare_out_dir(&args.out_dir, &config)?;

    let source = match &args.checkpoint {
        Some(path) => {
            let loaded = load_checkpoint(path)?;
            let source_config = loaded.config()?;
            Some(loaded.to_model(&source_config)?)
        }
        None => None,
    };
    let output = finetune(&config, &dataset, source.as_ref(), seed)?;
    let meta = CheckpointMeta {
        config: config.to_config_string(),
        head_kind: "hazard".to_string(),
        step: output.steps,
        seed,
        train_ids: dataset.ids(Split::Train),
    };
    save_checkpoint(
        &Checkpoint::from_model(&output.model, Some(&output.grid), meta),
        &ckpt_path,
    )?;
    write_loss_csv(&loss_path, "epoch,loss", &output.epoch_losses)?;

    let metrics =
        evaluate_split(&output.model, &output.grid, &dataset, Split::Val, &dataset.ids(Split::Train))?;
    let report = MetricsReport::new(config.hash(), vec![seed], &[metrics], 0.0);
    std::fs::write(&report_path, report.to_json())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", report_path.display())))?;
    println!(
        "finetuned {} epochs; validation C-td {:.4}, IBS {:.4}; checkpoint at {}",
        config.finetune_epochs,
        metrics.c_td,
        metrics.ibs,
        ckpt_path.display()
    );
    Ok(())
}

fn run_evaluate(args: EvaluateArgs) -> Result<(), CliError> {
    let split = parse_split(&args.split)?;
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let config = apply_overrides(checkpoint.config()?, &args.set, &args.data)?;
    let report_path = args.out_dir.join(format!("metrics-{}.json", args.split));
    guard_overwrite(&report_path, args.force)?;
    prepare_out_dir(&args.out_dir, &config)?;

    let model = checkpoint.to_model(&config)?;
    let grid = checkpoint.grid()?.ok_or_else(|| {
        CliError::Runtime("checkpoint has no time grid: finetune it first".to_string())
    })?;
    let dataset = load_dataset(&config)?;
    let started = std::time::Instant::now();
    let metrics = evaluate_split(&model, &grid, &dataset, split, &checkpoint.meta.train_ids)?;
    let report = MetricsReport::new(
        config.hash(),
        vec![checkpoint.meta.seed],
        &[metrics],
        started.elapsed().as_secs_f64(),
    );
    std::fs::write(&report_path, report.to_json())
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", report_path.display())))?;
    println!(
        "{} split: C-td {:.4}, IBS {:.4}; report at {}",
        args.split,
        metrics.c_td,
        metrics.ibs,
        report_path.display()
    );
    Ok(())
}

fn parse_float_list(key: &str, text: &str) -> Result<Vec<f64>, CliError> {
    text.split(',')
        .map(|s| {
            s.trim()
                .parse::<f64>()
                .map_err(|_| CliError::Usage(format!("--{key} expects comma-separated numbers")))
        })
        .collect()
}

fn run_sweep(args: SweepArgs) -> Result<(), CliError> {
    let config = args.config.resolve()?;
    let split = parse_split(&args.split)?;
    let cells: Vec<(f64, f64)> = match (&args.alphas, &args.betas) {
        (None, None) => DEFAULT_SWEEP_GRID.to_vec(),
        (a, b) => {
            let alphas = match a {
                Some(text) => parse_float_list("alphas", text)?,
                None => vec![config.alpha],
            };
            let betas = match b {
                Some(text) => parse_float_list("betas", text)?,
                None => vec![config.beta],
            };
            alphas.iter().flat_map(|&x| betas.iter().map(move |&y| (x, y))).collect()
        }
    };
    let json_path = args.out_dir.join("sweep.json");
    let csv_path = args.out_dir.join("sweep.csv");
    guard_overwrite(&json_path, args.force)?;
    guard_overwrite(&csv_path, args.force)?;
    prepare_out_dir(&args.out_dir, &config)?;

    let dataset = load_dataset(&config)?;
    let rows = ablation_sweep(&config, &dataset, &cells, split)?;

    let json_rows: Vec<serde_json::Value> = rows
        .iter()
        .map(|row| {
            serde_json::json!({
                "alpha": row.alpha,
                "beta": row.beta,
                "report": serde_json::from_str::<serde_json::Value>(&row.report.to_json())
                    .expect("report is valid JSON"),
            })
        })
        .collect();
    std::fs::write(&json_path, serde_json::to_string_pretty(&json_rows).expect("serializes"))
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", json_path.display())))?;

    let mut table = String::from("alpha,beta,c_td_mean,ibs_mean\n");
    for row in &rows {
        table.push_str(&format!(
            "{},{},{:.6},{:.6}\n",
            row.alpha, row.beta, row.report.c_td.mean, row.report.ibs.mean
        ));
    }
    std::fs::write(&csv_path, table)
        .map_err(|e| CliError::Runtime(format!("cannot write {}: {e}", csv_path.display())))?;

    println!("swept {} cells on the {} split; table at {}", rows.len(), args.split, csv_path.display());
    for row in &rows {
        println!(
            "  alpha={:<4} beta={:<4} C-td {:.4} IBS {:.4}",
            row.alpha, row.beta, row.report.c_td.mean, row.report.ibs.mean
        );
    }
    Ok(())
}

fn run_export(args: ExportArgs) -> Result<(), CliError> {
    let split = match args.split.as_str() {
        "train" => Split::Train,
        "val" => Split::Val,
        "test" => Split::Test,
        other => {
            return Err(CliError::Usage(format!(
                "unknown split `{other}`, expected train, val, or test"
            )))
        }
    };
    let projection = match args.projection.as_str() {
        "raw" => EmbeddingProjection::Raw,
        "pca2" => EmbeddingProjection::Pca2,
        other => {
            return Err(CliError::Usage(format!(
                "unknown projection `{other}`, expected raw or pca2"
            )))
        }
    };
    let checkpoint = load_checkpoint(&args.checkpoint)?;
    let config = apply_overrides(checkpoint.config()?, &args.set, &args.data)?;
    let out_path = args.out_dir.join(format!("embeddings-{}-{}.csv", args.split, args.projection));
    guard_overwrite(&out_path, args.force)?;
    prepare_out_dir(&args.out_dir, &config)?;

    let model = checkpoint.to_model(&config)?;
    let dataset = load_dataset(&config)?;
    let export = export_embeddings(&model, &dataset, split, projection)?;
    write_embeddings_csv(&export, &out_path)?;
    println!(
        "wrote {} rows x {} coordinates to {}",
        export.rows.len(),
        export.columns.len(),
        out_path.display()
    );
    Ok(())
}
