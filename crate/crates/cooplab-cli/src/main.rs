//! Batch CLI tying the pipeline together.
//!
//! Exit codes: 0 success, 1 usage error, 2 validation error,
//! 3 numerical abort.

use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, Parser, Subcommand};

use cooplab::config::RunConfig;
use cooplab::eval::harness::{
    content_hash, data_efficiency_harness, robustness_harness, write_rows_csv, write_summary_json,
    HarnessRow, PipelineSetup,
};
use cooplab::eval::{evaluate_model, finetune, FinetuneConfig, InitMode};
use cooplab::nn::{load_checkpoint, save_checkpoint, CheckpointRole};
use cooplab::pretrain::{pretrain, write_curve_csv, SensorFrame};
use cooplab::sim::dataset::{
    scenario_dir_name, split_counts, Dataset, DatasetManifest, ScenarioEntry, Split, WriteStats,
    DATASET_VERSION,
};
use cooplab::sim::generate_scenario;

/// Environment variable naming the default output root; relative output
/// paths resolve under it.
const OUT_ROOT_ENV: &str = "COOPLAB_OUT";

#[derive(Parser)]
#[command(name = "cooplab", version, about = "Cooperative LiDAR perception laboratory")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Worker threads for parallel sections (default: all cores).
    #[arg(long, global = true)]
    jobs: Option<usize>,
}

#[derive(Args)]
struct ConfigArgs {
    /// TOML run configuration; omitted fields take defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Override the root seed from the config file.
    #[arg(long)]
    seed: Option<u64>,
}

impl ConfigArgs {
    fn load(&self) -> anyhow::Result<RunConfig> {
        let mut cfg = match &self.config {
            Some(path) => RunConfig::from_path(path)
                .with_context(|| format!("loading config {}", path.display()))?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.seed = seed;
        }
        Ok(cfg)
    }
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset with train/val/test splits.
    Simulate {
        #[command(flatten)]
        config: ConfigArgs,
        /// Dataset output directory.
        #[arg(long)]
        out: PathBuf,
    },
    /// Pretrain the encoder by masked multi-agent reconstruction.
    Pretrain {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Output checkpoint path.
        #[arg(long)]
        out: PathBuf,
        /// Training-curve CSV (default: <out>.curve.csv).
        #[arg(long)]
        curve: Option<PathBuf>,
        /// Reconstruct only ego points (ablation mode).
        #[arg(long)]
        ego_only: bool,
    },
    /// Finetune the detector, then evaluate on the test split.
    Finetune {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Pretrained-encoder checkpoint; omit for the train-from-scratch baseline.
        #[arg(long)]
        init: Option<PathBuf>,
        #[arg(long)]
        out: PathBuf,
        /// Override the labeled fraction of the training split.
        #[arg(long)]
        label_fraction: Option<f64>,
        /// Metrics file prefix (default: <out>.metrics).
        #[arg(long)]
        metrics_prefix: Option<PathBuf>,
    },
    /// Evaluate a finetuned checkpoint on the test split.
    Eval {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        #[arg(long)]
        checkpoint: PathBuf,
        /// Metrics file prefix (writes <prefix>.csv and <prefix>.json).
        #[arg(long)]
        out_prefix: PathBuf,
    },
    /// Run a multi-cell experiment and emit CSV tables.
    Experiment {
        #[command(subcommand)]
        which: Experiment,
    },
    /// Summarize a checkpoint.
    Inspect {
        #[arg(long)]
        checkpoint: PathBuf,
    },
}

#[derive(Subcommand)]
enum Experiment {
    /// Scratch vs pretrained across label fractions and seeds.
    DataEfficiency {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Pretrained-encoder checkpoint.
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.2, 0.5, 0.8, 1.0])]
        fractions: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0, 1, 2])]
        seeds: Vec<u64>,
    },
    /// Localization-noise and time-delay sweeps over trained models.
    Robustness {
        #[command(flatten)]
        config: ConfigArgs,
        #[arg(long)]
        dataset: PathBuf,
        /// Finetuned scratch-baseline checkpoint.
        #[arg(long)]
        scratch: PathBuf,
        /// Finetuned checkpoint initialized from pretraining.
        #[arg(long)]
        pretrained: PathBuf,
        #[arg(long)]
        out_dir: PathBuf,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.2, 0.5])]
        sigmas_xy: Vec<f64>,
        #[arg(long, value_delimiter = ',')]
        sigmas_yaw: Vec<f64>,
        #[arg(long, value_delimiter = ',', default_values_t = vec![0.0, 0.1, 0.2])]
        delays: Vec<f64>,
    },
}

fn resolve_out(path: &Path) -> PathBuf {
    if path.is_relative() {
        if let Ok(root) = std::env::var(OUT_ROOT_ENV) {
            return PathBuf::from(root).join(path);
        }
    }
    path.to_path_buf()
}

fn setup_from(cfg: &RunConfig) -> anyhow::Result<PipelineSetup> {
    Ok(PipelineSetup {
        enc: cfg.encoder,
        spec: cfg.bev_spec().map_err(cooplab::Error::from)?,
        crop: cfg.crop.bounds(),
        z_center: cfg.pretrain.z_center,
        z_scale: cfg.pretrain.z_scale,
    })
}

fn cmd_simulate(cfg: &RunConfig, out: &Path) -> anyhow::Result<()> {
    let out = resolve_out(out);
    let vehicle = cfg.sensors.vehicle.build();
    let infra = cfg.sensors.infrastructure.build();
    let n = cfg.dataset.n_scenarios;
    let (train, val, _test) = split_counts(n, cfg.dataset.split);
    let mut entries = Vec::with_capacity(n);
    let mut totals = WriteStats::default();
    for i in 0..n {
        let scenario_cfg = cfg.scenario_config(i);
        let scenario = generate_scenario(&scenario_cfg, &vehicle, &infra)?;
        let dir_name = scenario_dir_name(i);
        let stats = cooplab::sim::dataset::write_scenario(&out.join(&dir_name), &scenario)?;
        totals.frames += stats.frames;
        totals.points += stats.points;
        let split = if i < train {
            Split::Train
        } else if i < train + val {
            Split::Val
        } else {
            Split::Test
        };
        entries.push(ScenarioEntry { dir: dir_name, split, n_frames: stats.frames });
    }
    let manifest = DatasetManifest {
        format_version: DATASET_VERSION,
        seed: cfg.seed,
        config_echo: cfg.echo(),
        scenarios: entries,
    };
    std::fs::create_dir_all(&out)?;
    std::fs::write(out.join("dataset.json"), serde_json::to_vec_pretty(&manifest)?)?;
    println!(
        "wrote {} scenarios ({} frames, {} points) to {}",
        n,
        totals.frames,
        totals.points,
        out.display()
    );
    Ok(())
}

fn cmd_pretrain(
    cfg: &RunConfig,
    dataset: &Path,
    out: &Path,
    curve_path: Option<&Path>,
    ego_only: bool,
) -> anyhow::Result<()> {
    let out = resolve_out(out);
    let dataset = Dataset::open(dataset).map_err(cooplab::Error::from)?;
    let frames = dataset.load_split(Split::Train).map_err(cooplab::Error::from)?;
    let corpus: Vec<SensorFrame> = frames.iter().map(SensorFrame::from).collect();
    let mut pre_cfg = cfg.pretrain_config();
    if ego_only {
        pre_cfg.ego_only = true;
    }
    let spec = cfg.bev_spec().map_err(cooplab::Error::from)?;
    let output = pretrain(&corpus, &spec, &cfg.crop.bounds(), &cfg.encoder, &pre_cfg, &cfg.augment, cfg.echo())?;
    save_checkpoint(&out, &output.checkpoint).map_err(cooplab::Error::from)?;
    let curve_file = curve_path
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("curve.csv"));
    write_curve_csv(&curve_file, &output.curve)?;
    println!(
        "pretrained {} steps on {} frames; final loss {:.6}; checkpoint {} ({} values)",
        output.checkpoint.meta.steps,
        corpus.len(),
        output.final_loss,
        out.display(),
        output.checkpoint.parameter_count()
    );
    Ok(())
}

fn finetune_config(cfg: &RunConfig, init: Option<&Path>, label_fraction: Option<f64>) -> FinetuneConfig {
    FinetuneConfig {
        init: if init.is_some() { InitMode::FromCheckpoint } else { InitMode::Scratch },
        label_fraction: label_fraction.unwrap_or(cfg.finetune.label_fraction),
        seed: cooplab::seed::child_seed(cfg.seed, "finetune"),
        ..cfg.finetune
    }
}

fn cmd_finetune(
    cfg: &RunConfig,
    dataset_path: &Path,
    init: Option<&Path>,
    out: &Path,
    label_fraction: Option<f64>,
    metrics_prefix: Option<&Path>,
) -> anyhow::Result<()> {
    let out = resolve_out(out);
    let dataset = Dataset::open(dataset_path).map_err(cooplab::Error::from)?;
    let train = dataset.load_split(Split::Train).map_err(cooplab::Error::from)?;
    let test = dataset.load_split(Split::Test).map_err(cooplab::Error::from)?;
    let init_ckpt = init
        .map(|p| load_checkpoint(p).map_err(cooplab::Error::from))
        .transpose()?;
    let ft = finetune_config(cfg, init, label_fraction);
    let setup = setup_from(cfg)?;
    let output = finetune(
        &train,
        &test,
        &setup.enc,
        setup.spec,
        setup.crop,
        setup.z_center,
        setup.z_scale,
        &ft,
        &cfg.detect,
        &cfg.augment,
        init_ckpt.as_ref(),
        cfg.echo(),
    )?;
    save_checkpoint(&out, &output.checkpoint).map_err(cooplab::Error::from)?;
    let prefix = metrics_prefix
        .map(Path::to_path_buf)
        .unwrap_or_else(|| out.with_extension("metrics"));
    let row = HarnessRow {
        experiment: "finetune".into(),
        model: if init.is_some() { "pretrained".into() } else { "scratch".into() },
        seed: ft.seed,
        level: ft.label_fraction,
        metrics: output.metrics.clone(),
    };
    let mut hash_inputs: Vec<PathBuf> = vec![dataset_path.join("dataset.json")];
    if let Some(p) = init {
        hash_inputs.push(p.to_path_buf());
    }
    let hash_refs: Vec<&Path> = hash_inputs.iter().map(PathBuf::as_path).collect();
    let hash = content_hash(&hash_refs)?;
    write_rows_csv(&prefix.with_extension("csv"), &cfg.detect, &[row.clone()])?;
    write_summary_json(&prefix.with_extension("json"), "finetune", &cfg.echo(), &hash, &[row], &[])?;
    println!(
        "finetuned {} steps ({} labeled frames); AP@{:?} = {:?}; checkpoint {}",
        output.checkpoint.meta.steps,
        output.labeled_indices.len(),
        output.metrics.iou_thresholds,
        output.metrics.overall,
        out.display()
    );
    Ok(())
}

fn cmd_eval(cfg: &RunConfig, dataset_path: &Path, checkpoint: &Path, out_prefix: &Path) -> anyhow::Result<()> {
    let out_prefix = resolve_out(out_prefix);
    let dataset = Dataset::open(dataset_path).map_err(cooplab::Error::from)?;
    let test = dataset.load_split(Split::Test).map_err(cooplab::Error::from)?;
    let ckpt = load_checkpoint(checkpoint).map_err(cooplab::Error::from)?;
    let setup = setup_from(cfg)?;
    let model = cooplab::eval::model_from_checkpoint(
        &ckpt,
        &setup.enc,
        setup.spec,
        setup.crop,
        setup.z_center,
        setup.z_scale,
    )?;
    let (metrics, _) = evaluate_model(&model, &test, &cfg.detect)?;
    let row = HarnessRow {
        experiment: "eval".into(),
        model: "checkpoint".into(),
        seed: cfg.seed,
        level: 0.0,
        metrics: metrics.clone(),
    };
    let hash = content_hash(&[&dataset_path.join("dataset.json"), checkpoint])?;
    write_rows_csv(&out_prefix.with_extension("csv"), &cfg.detect, &[row.clone()])?;
    write_summary_json(&out_prefix.with_extension("json"), "eval", &cfg.echo(), &hash, &[row], &[])?;
    println!("evaluated {} frames; AP@{:?} = {:?}", metrics.n_frames, metrics.iou_thresholds, metrics.overall);
    Ok(())
}

fn cmd_data_efficiency(
    cfg: &RunConfig,
    dataset_path: &Path,
    pretrained: &Path,
    out_dir: &Path,
    fractions: &[f64],
    seeds: &[u64],
) -> anyhow::Result<()> {
    let out_dir = resolve_out(out_dir);
    let dataset = Dataset::open(dataset_path).map_err(cooplab::Error::from)?;
    let train = dataset.load_split(Split::Train).map_err(cooplab::Error::from)?;
    let test = dataset.load_split(Split::Test).map_err(cooplab::Error::from)?;
    let ckpt = load_checkpoint(pretrained).map_err(cooplab::Error::from)?;
    let setup = setup_from(cfg)?;
    let result = data_efficiency_harness(
        &train,
        &test,
        &setup,
        &ckpt,
        fractions,
        seeds,
        &cfg.finetune,
        &cfg.detect,
        &cfg.augment,
    )?;
    let hash = content_hash(&[&dataset_path.join("dataset.json"), pretrained])?;
    write_rows_csv(&out_dir.join("data_efficiency.csv"), &cfg.detect, &result.rows)?;
    write_summary_json(
        &out_dir.join("data_efficiency.json"),
        "data_efficiency",
        &cfg.echo(),
        &hash,
        &result.rows,
        &result.flags,
    )?;
    for flag in &result.flags {
        println!("flag: {flag}");
    }
    println!("wrote {} rows to {}", result.rows.len(), out_dir.join("data_efficiency.csv").display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn cmd_robustness(
    cfg: &RunConfig,
    dataset_path: &Path,
    scratch: &Path,
    pretrained: &Path,
    out_dir: &Path,
    sigmas_xy: &[f64],
    sigmas_yaw: &[f64],
    delays: &[f64],
) -> anyhow::Result<()> {
    let out_dir = resolve_out(out_dir);
    let dataset = Dataset::open(dataset_path).map_err(cooplab::Error::from)?;
    let scenarios = dataset.load_split_scenarios(Split::Test).map_err(cooplab::Error::from)?;
    let scratch_ckpt = load_checkpoint(scratch).map_err(cooplab::Error::from)?;
    let pre_ckpt = load_checkpoint(pretrained).map_err(cooplab::Error::from)?;
    let setup = setup_from(cfg)?;
    let rows = robustness_harness(
        &scenarios,
        &setup,
        &[("scratch".to_string(), scratch_ckpt), ("pretrained".to_string(), pre_ckpt)],
        sigmas_xy,
        sigmas_yaw,
        delays,
        &cfg.detect,
        cooplab::seed::child_seed(cfg.seed, "robustness"),
    )?;
    let hash = content_hash(&[&dataset_path.join("dataset.json"), scratch, pretrained])?;
    write_rows_csv(&out_dir.join("robustness.csv"), &cfg.detect, &rows)?;
    write_summary_json(&out_dir.join("robustness.json"), "robustness", &cfg.echo(), &hash, &rows, &[])?;
    println!("wrote {} rows to {}", rows.len(), out_dir.join("robustness.csv").display());
    Ok(())
}

fn cmd_inspect(checkpoint: &Path) -> anyhow::Result<()> {
    let ckpt = load_checkpoint(checkpoint).map_err(cooplab::Error::from)?;
    let role = match ckpt.meta.role {
        CheckpointRole::PretrainedEncoder => "pretrained-encoder",
        CheckpointRole::FinetunedModel => "finetuned-model",
    };
    println!("checkpoint: {}", checkpoint.display());
    println!("role: {role}");
    println!("training steps: {}", ckpt.meta.steps);
    println!("final loss: {:.6}", ckpt.meta.final_loss);
    println!("parameters: {} tensors, {} values", ckpt.params.len(), ckpt.parameter_count());
    for (name, shape, _) in &ckpt.params {
        println!("  {name}: {shape:?}");
    }
    Ok(())
}

fn run(cli: Cli) -> anyhow::Result<()> {
    if let Some(jobs) = cli.jobs {
        // Ignore failure when a pool already exists (e.g. in tests).
        let _ = rayon::ThreadPoolBuilder::new().num_threads(jobs.max(1)).build_global();
    }
    match cli.command {
        Command::Simulate { config, out } => cmd_simulate(&config.load()?, &out),
        Command::Pretrain { config, dataset, out, curve, ego_only } => {
            cmd_pretrain(&config.load()?, &dataset, &out, curve.as_deref(), ego_only)
        }
        Command::Finetune { config, dataset, init, out, label_fraction, metrics_prefix } => cmd_finetune(
            &config.load()?,
            &dataset,
            init.as_deref(),
            &out,
            label_fraction,
            metrics_prefix.as_deref(),
        ),
        Command::Eval { config, dataset, checkpoint, out_prefix } => {
            cmd_eval(&config.load()?, &dataset, &checkpoint, &out_prefix)
        }
        Command::Experiment { which } => match which {
            Experiment::DataEfficiency { config, dataset, pretrained, out_dir, fractions, seeds } => {
                cmd_data_efficiency(&config.load()?, &dataset, &pretrained, &out_dir, &fractions, &seeds)
            }
            Experiment::Robustness {
                config,
                dataset,
                scratch,
                pretrained,
                out_dir,
                sigmas_xy,
                sigmas_yaw,
                delays,
            } => cmd_robustness(
                &config.load()?,
                &dataset,
                &scratch,
                &pretrained,
                &out_dir,
                &sigmas_xy,
                &sigmas_yaw,
                &delays,
            ),
        },
        Command::Inspect { checkpoint } => cmd_inspect(&checkpoint),
    }
}

fn exit_code_for(err: &anyhow::Error) -> i32 {
    for cause in err.chain() {
        if let Some(e) = cause.downcast_ref::<cooplab::Error>() {
            return if e.is_numerical() { 3 } else { 2 };
        }
        if cause.downcast_ref::<cooplab::config::ConfigError>().is_some() {
            return 2;
        }
    }
    2
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            use clap::error::ErrorKind;
            let code = match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => 0,
                _ => 1,
            };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    if let Err(err) = run(cli) {
        eprintln!("error: {err:#}");
        std::process::exit(exit_code_for(&err));
    }
}
