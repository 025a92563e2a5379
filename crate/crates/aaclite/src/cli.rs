//! The `aaclite` command line: `gen-data`, `train`, `eval`, `profile` and
//! `gradcheck`.
//!
//! Every command first prints an effective-config block of `key=value`
//! lines. Each key is the long flag of the same name (underscores for
//! dashes), so the block is enough to repeat a run exactly.

use std::ffi::OsString;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use aaclite_core::analysis::{profile, MetricsReport};
use aaclite_core::checks::{
    check_end_to_end, check_op, CheckResult, Scale, SuiteReport, END_TO_END, OP_NAMES,
};
use aaclite_core::data::{AugmentConfig, Layout, Risk, ScoreDistribution};
use aaclite_core::model::{AacLiteNet, ModelConfig, ModelOutput};
use aaclite_core::train::{load_batch, AdamConfig, RegWeighting, TrainConfig};
use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};

use crate::dataset::{load_dataset, write_synthetic_dataset, MANIFEST_FILE};
use crate::error::{exit, Error, IoContext, Result};
use crate::formats::load_checkpoint;
use crate::par::par_map;
use crate::report::{metrics_table, profile_table};
use crate::run::{cross_validate, write_outputs, ClassWeighting, RunConfig};

#[derive(Debug, Parser)]
#[command(
    name = "aaclite",
    version,
    about = "AACLiteNet: synthetic data, k-fold training, evaluation, profiling"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Render a synthetic lateral-scan dataset with a manifest.
    GenData(GenDataArgs),
    /// Stratified k-fold training with per-fold reports and checkpoints.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset.
    Eval(EvalArgs),
    /// Per-layer parameter and FLOP counts.
    Profile(ProfileArgs),
    /// Finite-difference gradient checks over every op and the model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Worker threads; 1 runs everything on the main thread.
    #[arg(long, default_value_t = 1, value_parser = clap::value_parser!(u64).range(1..))]
    pub threads: u64,
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[arg(long, value_parser = clap::value_parser!(u64).range(1..))]
    pub n: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
    /// Native scan height in pixels.
    #[arg(long, default_value_t = 1600, value_parser = clap::value_parser!(u64).range(2..))]
    pub scan_height: u64,
    #[arg(long, default_value_t = 300, value_parser = clap::value_parser!(u64).range(2..))]
    pub scan_width: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for reports and checkpoints.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 10, value_parser = clap::value_parser!(u64).range(2..))]
    pub folds: u64,
    #[arg(long, default_value_t = 50, value_parser = clap::value_parser!(u64).range(1..))]
    pub epochs: u64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[arg(long, default_value_t = 5e-4)]
    pub lr: f64,
    /// Model preset (`default`, `shrunken`, `desk`, `desk:SIZE`) or a
    /// `key=value` config file.
    #[arg(long, default_value = "default")]
    pub model: String,
    /// Affine augmentation of training images.
    #[arg(long, default_value = "on", value_parser = ["on", "off"])]
    pub augment: String,
    #[arg(long, default_value = "inverse", value_parser = ["inverse", "uniform"])]
    pub class_weights: String,
    #[arg(long, default_value = "constant", value_parser = ["constant", "per-risk"])]
    pub reg_weighting: String,
    /// Also train one model on every sample and save it as `final.aacl`.
    #[arg(long, default_value_t = false)]
    pub final_fit: bool,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long, default_value_t = 20, value_parser = clap::value_parser!(u64).range(1..))]
    pub batch_size: u64,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct ProfileArgs {
    /// Model preset or `key=value` config file, as for `train --model`.
    #[arg(long, default_value = "default")]
    pub config: String,
    #[command(flatten)]
    pub common: Common,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value = "quick", value_parser = ["quick", "full"])]
    pub scale: String,
    #[arg(long, default_value_t = 5, value_parser = clap::value_parser!(u64).range(1..))]
    pub seeds: u64,
    /// Corrupt the backward pass of this op (negative control).
    #[arg(long, hide = true)]
    pub sabotage: Option<String>,
    #[command(flatten)]
    pub common: Common,
}

/// Model config from a preset name or a `key=value` file.
pub fn resolve_model(spec: &str) -> Result<ModelConfig> {
    let cfg = match spec {
        "default" => ModelConfig::default(),
        "shrunken" => ModelConfig::shrunken(),
        "desk" => ModelConfig::desk(64),
        _ => match spec.strip_prefix("desk:") {
            Some(size) => {
                let size: usize = size.parse().map_err(|_| {
                    Error::Usage(format!("desk size must be an integer, got {size:?}"))
                })?;
                ModelConfig::desk(size)
            }
            None => {
                let path = Path::new(spec);
                if !path.exists() {
                    return Err(Error::Usage(format!(
                        "unknown model {spec:?}: not a preset (default, shrunken, desk, desk:SIZE) or a file"
                    )));
                }
                ModelConfig::from_text(&fs::read_to_string(path).at(path)?)?
            }
        },
    };
    cfg.validate()?;
    Ok(cfg)
}

struct ConfigBlock(Vec<(&'static str, String)>);

impl ConfigBlock {
    fn new(command: &str) -> Self {
        Self(vec![("command", command.to_string())])
    }

    fn set(&mut self, key: &'static str, value: impl ToString) -> &mut Self {
        self.0.push((key, value.to_string()));
        self
    }

    fn text(&self) -> String {
        let mut s = String::from("[effective config]\n");
        for (k, v) in &self.0 {
            let _ = writeln!(s, "{k}={v}");
        }
        s
    }
}

fn histogram_text(h: [usize; 3]) -> String {
    let total: usize = h.iter().sum();
    let mut s = String::from("category histogram\n");
    for (r, c) in Risk::ALL.iter().zip(h) {
        let pct = 100.0 * c as f64 / total.max(1) as f64;
        let _ = writeln!(s, "  {:<9} {:>6}  ({pct:.1}%)", r.name(), c);
    }
    let _ = writeln!(s, "  {:<9} {:>6}", "total", total);
    s
}

fn gen_data(a: &GenDataArgs) -> Result<i32> {
    let layout = Layout {
        native_h: a.scan_height as usize,
        native_w: a.scan_width as usize,
        ..Layout::default()
    };
    let mut block = ConfigBlock::new("gen-data");
    block
        .set("n", a.n)
        .set("seed", a.seed)
        .set("out", a.out.display())
        .set("scan_height", a.scan_height)
        .set("scan_width", a.scan_width)
        .set("threads", a.common.threads);
    print!("{}", block.text());
    let manifest = write_synthetic_dataset(
        &a.out,
        a.n as usize,
        a.seed,
        &ScoreDistribution::default(),
        &layout,
        a.common.threads as usize,
    )?;
    println!(
        "wrote {} scans and {}",
        manifest.entries.len(),
        a.out.join(MANIFEST_FILE).display()
    );
    print!("{}", histogram_text(manifest.histogram()));
    Ok(exit::SUCCESS)
}

fn train(a: &TrainArgs) -> Result<i32> {
    if !(a.lr.is_finite() && a.lr > 0.0) {
        return Err(Error::Usage(format!("--lr must be positive, got {}", a.lr)));
    }
    let mut model = resolve_model(&a.model)?;
    model.seed = a.seed;
    if model.input_h != model.input_w {
        return Err(Error::Usage("training needs a square model input".into()));
    }
    let train = TrainConfig {
        batch_size: a.batch_size as usize,
        adam: AdamConfig {
            lr: a.lr,
            ..AdamConfig::default()
        },
        epochs: a.epochs as usize,
        folds: a.folds as usize,
        seed: a.seed,
        augment: (a.augment == "on").then(AugmentConfig::default),
        reg_weighting: RegWeighting::parse(&a.reg_weighting).expect("clap restricts values"),
    };
    let cfg = RunConfig {
        model,
        train,
        class_weighting: ClassWeighting::parse(&a.class_weights).expect("clap restricts values"),
        threads: a.common.threads as usize,
        final_fit: a.final_fit,
    };
    let mut block = ConfigBlock::new("train");
    block
        .set("manifest", a.manifest.display())
        .set("out", a.out.display())
        .set("folds", a.folds)
        .set("epochs", a.epochs)
        .set("seed", a.seed)
        .set("batch_size", a.batch_size)
        .set("lr", format!("{:e}", a.lr))
        .set("model", &a.model)
        .set("augment", &a.augment)
        .set("class_weights", &a.class_weights)
        .set("reg_weighting", &a.reg_weighting)
        .set("final_fit", a.final_fit)
        .set("threads", a.common.threads);
    let text = block.text();
    print!("{text}");
    let size = cfg.model.input_h;
    let data = load_dataset(&a.manifest, size, cfg.threads)?;
    println!("loaded {} samples at {size}x{size}", data.len());
    print!("{}", histogram_text(data.manifest.histogram()));
    fs::create_dir_all(&a.out).at(&a.out)?;
    let cfg_path = a.out.join("config.txt");
    fs::write(&cfg_path, &text).at(&cfg_path)?;
    let model_path = a.out.join("model.txt");
    fs::write(&model_path, cfg.model.to_text()).at(&model_path)?;
    let started = Instant::now();
    let run = cross_validate(&data.samples, &cfg, &|r| {
        println!(
            "fold {} epoch {} mean_loss {:.6} wall_ms {}",
            r.fold, r.epoch, r.mean_loss, r.wall_ms
        );
    })?;
    write_outputs(&a.out, &run)?;
    for f in &run.folds {
        let acc = f.metrics.rates.mean.accuracy.unwrap_or(f64::NAN);
        println!(
            "fold {} final loss {:.6}  test n={}  mean accuracy {:.4}",
            f.fold,
            f.final_loss().unwrap_or(f64::NAN),
            f.labels.len(),
            acc
        );
    }
    let losses: Vec<f64> = run.folds.iter().filter_map(|f| f.final_loss()).collect();
    let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    println!("final loss {mean:.6} (mean over folds)");
    if let Some((_, e)) = &run.final_model {
        if let Some(last) = e.last() {
            println!("final fit loss {:.6}", last.mean_loss);
        }
    }
    println!("out-of-fold metrics");
    print!("{}", metrics_table(&run.pooled));
    println!("elapsed {:.1} s", started.elapsed().as_secs_f64());
    Ok(exit::SUCCESS)
}

fn eval(a: &EvalArgs) -> Result<i32> {
    let mut block = ConfigBlock::new("eval");
    block
        .set("manifest", a.manifest.display())
        .set("checkpoint", a.checkpoint.display())
        .set("batch_size", a.batch_size)
        .set("threads", a.common.threads);
    print!("{}", block.text());
    let net = load_checkpoint(&a.checkpoint)?;
    let c = net.config();
    if c.input_h != c.input_w {
        return Err(aaclite_core::Error::Config("checkpoint input is not square".into()).into());
    }
    let data = load_dataset(&a.manifest, c.input_h, a.common.threads as usize)?;
    let idx: Vec<usize> = (0..data.len()).collect();
    let chunks: Vec<&[usize]> = idx.chunks(a.batch_size as usize).collect();
    let outs = par_map(
        &chunks,
        a.common.threads as usize,
        |_, chunk| -> Result<Vec<ModelOutput>> {
            let (x, _) = load_batch(&data.samples, chunk, None, 0, 0, 0)?;
            Ok(net.forward_batch(&x, false)?)
        },
    );
    let mut outputs = Vec::with_capacity(data.len());
    for o in outs {
        outputs.extend(o?);
    }
    let report = MetricsReport::from_predictions(&outputs, &data.labels())?;
    print!("{}", metrics_table(&report));
    Ok(exit::SUCCESS)
}

fn profile_cmd(a: &ProfileArgs) -> Result<i32> {
    let cfg = resolve_model(&a.config)?;
    let mut block = ConfigBlock::new("profile");
    block
        .set("config", &a.config)
        .set("threads", a.common.threads);
    print!("{}", block.text());
    let report = profile(&cfg)?;
    let built = AacLiteNet::build(&cfg)?.num_params() as u64;
    if built != report.total_params {
        return Err(aaclite_core::Error::Config(format!(
            "profiler counts {} params, built model has {}",
            report.total_params, built
        ))
        .into());
    }
    print!("{}", profile_table(&report));
    Ok(exit::SUCCESS)
}

fn result_line(r: &CheckResult) -> String {
    format!(
        "{}  {:<20} cases={:<4} max_rel_err={:.3e}  tol={:e}  worst: {}",
        if r.passed { "PASS" } else { "FAIL" },
        r.name,
        r.cases,
        r.max_rel_error,
        r.tol,
        r.worst_case
    )
}

/// Gradient suite with ops spread over threads; the end-to-end check runs
/// last.
pub fn gradcheck_suite(
    scale: Scale,
    seeds: &[u64],
    sabotage: Option<&str>,
    threads: usize,
) -> Result<SuiteReport> {
    if let Some(s) = sabotage {
        if s != END_TO_END && !OP_NAMES.contains(&s) {
            return Err(Error::Usage(format!("--sabotage: unknown op {s:?}")));
        }
    }
    let results = par_map(&OP_NAMES, threads, |_, op| {
        check_op(op, seeds, sabotage == Some(*op))
    });
    let mut results = results
        .into_iter()
        .collect::<aaclite_core::Result<Vec<_>>>()?;
    results.push(check_end_to_end(
        scale,
        seeds,
        sabotage == Some(END_TO_END),
    )?);
    Ok(SuiteReport { results })
}

fn gradcheck(a: &GradcheckArgs) -> Result<i32> {
    let scale = Scale::parse(&a.scale).expect("clap restricts values");
    let mut block = ConfigBlock::new("gradcheck");
    block
        .set("scale", scale.name())
        .set("seeds", a.seeds)
        .set("threads", a.common.threads);
    if let Some(s) = &a.sabotage {
        block.set("sabotage", s);
    }
    print!("{}", block.text());
    let seeds: Vec<u64> = (0..a.seeds).collect();
    let started = Instant::now();
    let report = gradcheck_suite(
        scale,
        &seeds,
        a.sabotage.as_deref(),
        a.common.threads as usize,
    )?;
    for r in &report.results {
        println!("{}", result_line(r));
    }
    let secs = started.elapsed().as_secs_f64();
    if report.passed() {
        println!("all {} checks passed in {secs:.1} s", report.results.len());
        return Ok(exit::SUCCESS);
    }
    println!("gradient check FAILED in {secs:.1} s:");
    for r in report.failures() {
        println!(
            "  {}: max relative error {:.3e} (tol {:e})",
            r.name, r.max_rel_error, r.tol
        );
    }
    Ok(exit::CHECK_FAILED)
}

pub fn dispatch(cli: &Cli) -> Result<i32> {
    match &cli.command {
        Command::GenData(a) => gen_data(a),
        Command::Train(a) => train(a),
        Command::Eval(a) => eval(a),
        Command::Profile(a) => profile_cmd(a),
        Command::Gradcheck(a) => gradcheck(a),
    }
}

/// Parses `args` (program name first), runs the command and returns the
/// process exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => exit::SUCCESS,
                _ => exit::USAGE,
            };
        }
    };
    match dispatch(&cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
