//! The `mofme` command line: `gen-data`, `train`, `eval`, `bench` and
//! `inspect-router`.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use mofme::bench::{self, SweepConfig};
use mofme::config::{self, RunConfig, SEED_ENV};
use mofme::data::{DataConfig, Dataset, Mix, MANIFEST_FILE};
use mofme::experts::ExpertMode;
use mofme::train::{self, EvalReport, RouterReport};
use mofme::{Error, Result};

#[derive(Debug, Parser)]
#[command(name = "mofme", version, about = "Feature-modulated mixture-of-experts restoration toolkit")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic multi-weather dataset.
    GenData(GenDataArgs),
    /// Train a model and write checkpoint, config and metrics.
    Train(TrainArgs),
    /// Evaluate a checkpoint per weather kind.
    Eval(CheckpointArgs),
    /// Parameter, MAC and latency sweep over expert counts.
    Bench(BenchArgs),
    /// Expert-usage histograms of a routed checkpoint.
    InspectRouter(CheckpointArgs),
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 300)]
    pub n_train: usize,
    #[arg(long, default_value_t = 90)]
    pub n_test: usize,
    #[arg(long, default_value_t = 32)]
    pub height: usize,
    #[arg(long, default_value_t = 32)]
    pub width: usize,
    /// Rain,haze,snow proportions.
    #[arg(long, value_delimiter = ',', num_args = 3, default_values_t = [1.0 / 3.0, 1.0 / 3.0, 1.0 / 3.0])]
    pub mix: Vec<f64>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Overwrite an existing dataset.
    #[arg(long)]
    pub force: bool,
}

#[derive(Debug, Args, Default, Clone)]
pub struct ConfigArgs {
    /// One of baseline, moe, moe+uar, fme, mofme, baseline-matched.
    #[arg(long)]
    pub preset: Option<String>,
    /// TOML file applied on top of the preset.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// `key=value` override; repeatable.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    /// Dataset directory (overrides `data.path`).
    #[arg(long)]
    pub data: Option<PathBuf>,
}

impl ConfigArgs {
    fn is_empty(&self) -> bool {
        self.preset.is_none() && self.config.is_none() && self.sets.is_empty()
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory (overrides `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckpointArgs {
    #[arg(long)]
    pub checkpoint: PathBuf,
    /// Without preset/config/set, the `config.toml` beside the checkpoint is used.
    #[command(flatten)]
    pub cfg: ConfigArgs,
    /// Output directory for CSV and JSON (defaults to the checkpoint's directory).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct BenchArgs {
    #[arg(long, value_delimiter = ',', default_values_t = [8usize, 16, 64, 128])]
    pub experts: Vec<usize>,
    #[arg(long, value_delimiter = ',', default_values_t = [String::from("moe"), String::from("fme")])]
    pub modes: Vec<String>,
    #[arg(long, default_value_t = 16)]
    pub batch: usize,
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
    #[arg(long, default_value_t = 5)]
    pub warmup: usize,
    /// Skip wall-clock timing.
    #[arg(long)]
    pub no_latency: bool,
    /// `key=value` override of the base model (`model.*` keys).
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub sets: Vec<String>,
    #[arg(long, default_value = "bench")]
    pub out: PathBuf,
}

/// Preset (default `mofme`), then file, overrides and the seed variable.
pub fn resolve_config(args: &ConfigArgs) -> Result<RunConfig> {
    let base = match (&args.preset, &args.config) {
        (Some(p), _) => RunConfig::preset(p)?,
        (None, Some(_)) => RunConfig::default(),
        (None, None) => RunConfig::preset("mofme")?,
    };
    let merged = match &args.config {
        Some(path) => base.merge_toml(&read_text(path)?)?,
        None => base,
    };
    let mut cfg = merged.with_overrides(&args.sets)?.with_env_seed()?;
    if let Some(d) = &args.data {
        cfg.data.path = d.display().to_string();
    }
    cfg.validate()?;
    Ok(cfg)
}

fn read_text(path: &Path) -> Result<String> {
    fs::read_to_string(path).map_err(|e| Error::Io(std::io::Error::new(e.kind(), format!("{}: {e}", path.display()))))
}

fn checkpoint_config(args: &CheckpointArgs) -> Result<RunConfig> {
    if !args.cfg.is_empty() {
        return resolve_config(&args.cfg);
    }
    let dir = args.checkpoint.parent().unwrap_or(Path::new("."));
    let cfg = ConfigArgs {
        config: Some(dir.join(train::CONFIG_FILE)),
        data: args.cfg.data.clone(),
        ..ConfigArgs::default()
    };
    resolve_config(&cfg)
}

fn out_dir_for(args: &CheckpointArgs) -> PathBuf {
    args.out
        .clone()
        .unwrap_or_else(|| args.checkpoint.parent().unwrap_or(Path::new(".")).to_path_buf())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut s = serde_json::to_string_pretty(value)?;
    s.push('\n');
    fs::write(path, s)?;
    Ok(())
}

pub fn cmd_gen_data(a: &GenDataArgs) -> Result<Dataset> {
    let mut seed = a.seed;
    if std::env::var_os(SEED_ENV).is_some() {
        seed = RunConfig::default().with_env_seed()?.seed;
    }
    let cfg = DataConfig {
        n_train: a.n_train,
        n_test: a.n_test,
        height: a.height,
        width: a.width,
        mix: Mix {
            rain: a.mix[0],
            haze: a.mix[1],
            snow: a.mix[2],
        },
        seed,
    };
    if a.out.join(MANIFEST_FILE).exists() && !a.force {
        return Err(Error::Config(format!(
            "{} already holds a dataset (use --force to overwrite)",
            a.out.display()
        )));
    }
    let ds = mofme::data::make_split(&cfg)?;
    ds.save(&a.out)?;
    Ok(ds)
}

/// Trains and saves the run; returns the resolved config with the outcome.
pub fn cmd_train(a: &TrainArgs) -> Result<(RunConfig, train::TrainOutcome)> {
    let mut run = resolve_config(&a.cfg)?;
    if let Some(o) = &a.out {
        run.out_dir = o.display().to_string();
    }
    let data = Dataset::load(Path::new(&run.data.path))?;
    let outcome = train::train(&run, &data)?;
    outcome.save(&run, Path::new(&run.out_dir))?;
    Ok((run, outcome))
}

#[derive(Debug, Serialize)]
pub struct EvalOutput {
    pub model_digest: String,
    pub checkpoint: String,
    pub model: EvalReport,
    pub corrupted_input: EvalReport,
}

pub fn eval_csv(report: &EvalReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["kind", "count", "psnr", "ssim"])?;
    for k in mofme::data::WeatherKind::ALL {
        let q = report.per_kind.get(k);
        w.write_record([
            k.to_string(),
            report.counts.get(k).to_string(),
            format!("{:?}", q.psnr),
            format!("{:?}", q.ssim),
        ])?;
    }
    let n = report.counts.rain + report.counts.haze + report.counts.snow;
    w.write_record([
        "average".to_string(),
        n.to_string(),
        format!("{:?}", report.average.psnr),
        format!("{:?}", report.average.ssim),
    ])?;
    String::from_utf8(w.into_inner().map_err(|e| Error::Io(e.into_error()))?).map_err(|e| Error::Format(e.to_string()))
}

pub fn cmd_eval(a: &CheckpointArgs) -> Result<EvalOutput> {
    let run = checkpoint_config(a)?;
    let (model, store) = train::load_checkpoint(&a.checkpoint, &run.model)?;
    let data = Dataset::load(Path::new(&run.data.path))?;
    let report = train::evaluate(&model, &store, &data.test, run.train.batch_size, run.seed)?;
    let out = EvalOutput {
        model_digest: run.model_digest_hex(),
        checkpoint: a.checkpoint.display().to_string(),
        model: report,
        corrupted_input: train::corrupted_baseline(&data.test)?,
    };
    let dir = out_dir_for(a);
    fs::create_dir_all(&dir)?;
    let csv = eval_csv(&out.model)?;
    fs::write(dir.join("eval.csv"), &csv)?;
    write_json(&dir.join("eval.json"), &out)?;
    Ok(out)
}

pub fn cmd_inspect_router(a: &CheckpointArgs) -> Result<RouterReport> {
    let run = checkpoint_config(a)?;
    if run.model.expert_mode == ExpertMode::Dense {
        return Err(Error::Config("no routed layers: the checkpoint is a dense model".into()));
    }
    let (model, store) = train::load_checkpoint(&a.checkpoint, &run.model)?;
    let data = Dataset::load(Path::new(&run.data.path))?;
    let report = train::inspect_router(&model, &store, &data.test, run.train.batch_size, run.seed)?;
    let dir = out_dir_for(a);
    fs::create_dir_all(&dir)?;
    let mut buf = Vec::new();
    report.write_csv(&mut buf)?;
    fs::write(dir.join("router.csv"), buf)?;
    write_json(&dir.join("router.json"), &report)?;
    Ok(report)
}

pub fn cmd_bench(a: &BenchArgs) -> Result<Vec<bench::EfficiencyReport>> {
    let base = RunConfig::default().with_overrides(&a.sets)?;
    let modes = a
        .modes
        .iter()
        .map(|m| m.parse::<ExpertMode>())
        .collect::<Result<Vec<_>>>()?;
    let sweep = SweepConfig {
        base: base.model,
        expert_counts: a.experts.clone(),
        modes,
        batch: a.batch,
        trials: a.trials,
        warmup: a.warmup,
        measure_latency: !a.no_latency,
        seed: base.seed,
    };
    let rows = bench::scaling_sweep(&sweep, |m| {
        config::model_digest(m).map(|d| config::digest_hex(&d)).unwrap_or_default()
    })?;
    fs::create_dir_all(&a.out)?;
    let mut buf = Vec::new();
    bench::write_csv(&rows, &mut buf)?;
    fs::write(a.out.join("bench.csv"), buf)?;
    let text = bench::summary(&rows);
    fs::write(a.out.join("summary.txt"), &text)?;
    Ok(rows)
}

/// Runs one subcommand and prints its human-readable summary.
pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::GenData(a) => {
            let ds = cmd_gen_data(&a)?;
            let c = ds.train.counts();
            println!(
                "wrote {} train ({} rain, {} haze, {} snow) and {} test samples to {}",
                ds.train.len(),
                c[0],
                c[1],
                c[2],
                ds.test.len(),
                a.out.display()
            );
        }
        Command::Train(a) => {
            let (run, outcome) = cmd_train(&a)?;
            let best = outcome.log.best().expect("trained at least one epoch");
            println!(
                "best epoch {} of {}: test PSNR {:.3} dB, SSIM {:.4} (corrupted input {:.3} dB); outputs in {}",
                best.epoch,
                run.train.epochs,
                best.eval.average.psnr,
                best.eval.average.ssim,
                outcome.log.baseline.average.psnr,
                run.out_dir
            );
        }
        Command::Eval(a) => print!("{}", eval_csv(&cmd_eval(&a)?.model)?),
        Command::Bench(a) => print!("{}", bench::summary(&cmd_bench(&a)?)),
        Command::InspectRouter(a) => {
            for l in &cmd_inspect_router(&a)?.layers {
                println!(
                    "layer {}: usage entropy {:.4} bits (max {:.4}), rain {:.4}, haze {:.4}, snow {:.4}; mean variance {:.3e}",
                    l.layer,
                    l.entropy_bits_all,
                    (l.num_experts as f64).log2(),
                    l.entropy_bits.rain,
                    l.entropy_bits.haze,
                    l.entropy_bits.snow,
                    l.mean_variance
                );
            }
        }
    }
    Ok(())
}

/// The single line printed for a failed command.
pub fn error_line(e: &Error) -> String {
    let msg = e.to_string().replace('\n', " ");
    format!("error: {}: {msg}", e.kind())
}

/// Parses `args` (program name first) and runs the command. Returns the process exit code and
/// the line destined for stderr, if any: 2 for usage errors, 1 for runtime errors.
pub fn dispatch<I, T>(args: I) -> (u8, Option<String>)
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            // --help and --version
            let _ = e.print();
            return (0, None);
        }
        Err(e) => {
            let first = e.to_string().lines().next().unwrap_or("invalid arguments").to_string();
            return (2, Some(format!("error: usage: {}", first.trim_start_matches("error: "))));
        }
    };
    match run(cli) {
        Ok(()) => (0, None),
        Err(e) => (1, Some(error_line(&e))),
    }
}
