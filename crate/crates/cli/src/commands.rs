use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::Context;
use clap::{Args, ValueEnum};

use pointaugment::dataio::{generate_synthetic, load_dataset, save_dataset};
use pointaugment::eval::{
    ablation_runner, ablation_tsv, classification_accuracy, lambda_sweep, retrieval_map,
    robustness_suite, robustness_tsv,
};
use pointaugment::trainer::{load_checkpoint, metrics_tsv, run_training, save_checkpoint};
use pointaugment::{
    AblationToggles, Baseline, CorruptionSetting, Dataset, LoadOptions, Primitive, SynthConfig,
    TrainMode, TrainingState,
};

use crate::config::RunConfig;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const METRICS_FILE: &str = "metrics.tsv";
pub const CONFIG_ECHO_FILE: &str = "config.txt";

/// Failure classes mapped onto exit codes.
#[derive(Debug)]
pub enum CliError {
    /// Bad flags or configuration: exit 2.
    Usage(String),
    /// Anything that went wrong while running: exit 1.
    Runtime(anyhow::Error),
}

impl From<anyhow::Error> for CliError {
    fn from(e: anyhow::Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<pointaugment::Error> for CliError {
    fn from(e: pointaugment::Error) -> Self {
        CliError::Runtime(e.into())
    }
}

pub type CmdResult = Result<(), CliError>;

#[derive(Clone, Copy, Debug, ValueEnum)]
pub enum BaselineArg {
    None,
    Conventional,
}

#[derive(Debug, Args)]
pub struct ConfigArgs {
    /// `key = value` configuration file
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Points per cloud; overrides `n_points` from the config
    #[arg(long)]
    pub n_points: Option<usize>,
}

impl ConfigArgs {
    fn load(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p).map_err(|e| CliError::Usage(e.to_string()))?,
            None => RunConfig::default(),
        };
        if let Some(n) = self.n_points {
            if n == 0 {
                return Err(CliError::Usage("--n-points must be positive".into()));
            }
            cfg.n_points = n;
        }
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// Dataset directory
    #[arg(long)]
    pub data: PathBuf,
    /// Output directory
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Disable the augmentor and train on the named augmentation
    #[arg(long, value_enum)]
    pub baseline: Option<BaselineArg>,
    /// Continue from the checkpoint in the output directory
    #[arg(long)]
    pub resume: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub checkpoint: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
}

#[derive(Debug, Args)]
pub struct RobustnessArgs {
    #[command(flatten)]
    pub common: EvalArgs,
    /// Comma-separated corruption settings; overrides the config
    #[arg(long)]
    pub settings: Option<String>,
    #[arg(long)]
    pub seed: Option<u64>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long)]
    pub out: PathBuf,
    #[command(flatten)]
    pub config: ConfigArgs,
    #[arg(long)]
    pub seed: Option<u64>,
    /// `label=components` pairs separated by `;`, e.g. `A=none;B=D+M`.
    /// Defaults to the six-step ladder.
    #[arg(long)]
    pub variants: Option<String>,
    /// Comma-separated penalty weights; runs a lambda sweep instead
    #[arg(long)]
    pub lambdas: Option<String>,
}

#[derive(Debug, Args)]
pub struct GensynthArgs {
    #[arg(long)]
    pub out: PathBuf,
    /// Comma-separated primitives (sphere, cube, cylinder, cone)
    #[arg(long, default_value = "sphere,cube,cylinder,cone")]
    pub classes: String,
    #[arg(long, default_value_t = 200)]
    pub train_per_class: usize,
    #[arg(long, default_value_t = 50)]
    pub test_per_class: usize,
    #[arg(long, default_value_t = 256)]
    pub n_points: usize,
    #[arg(long, default_value_t = 0.3)]
    pub deformation: f64,
    #[arg(long, default_value_t = 0.02)]
    pub jitter: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
}

fn load_data(dir: &Path, cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let opts = LoadOptions {
        n_points: cfg.n_points,
        seed: cfg.setup.train.seed,
    };
    load_dataset(dir, &opts).with_context(|| format!("loading dataset from {}", dir.display()))
}

fn write_file(path: &Path, text: &str) -> anyhow::Result<()> {
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn create_dir(path: &Path) -> anyhow::Result<()> {
    fs::create_dir_all(path).with_context(|| format!("creating {}", path.display()))
}

fn load_state(path: &Path) -> anyhow::Result<TrainingState> {
    load_checkpoint(path).with_context(|| format!("loading checkpoint {}", path.display()))
}

pub fn train(args: &TrainArgs) -> CmdResult {
    let mut cfg = args.config.load()?;
    if let Some(seed) = args.seed {
        cfg.setup.train.seed = seed;
    }
    if let Some(b) = args.baseline {
        cfg.setup.train.mode = TrainMode::Baseline(match b {
            BaselineArg::None => Baseline::None,
            BaselineArg::Conventional => Baseline::Conventional,
        });
    }
    cfg.setup
        .train
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    cfg.setup
        .augmentor
        .validate()
        .map_err(|e| CliError::Usage(e.to_string()))?;

    let dataset = load_data(&args.data, &cfg)?;
    cfg.setup.classifier.num_classes = dataset.num_classes();
    create_dir(&args.out)?;
    let ckpt = args.out.join(CHECKPOINT_FILE);
    let metrics = args.out.join(METRICS_FILE);

    let mut state = if args.resume {
        let mut state = load_state(&ckpt)?;
        let mut expected = cfg.setup.train.clone();
        expected.epochs = state.config.epochs;
        if state.config != expected || state.augmentor.config != cfg.setup.augmentor {
            return Err(CliError::Runtime(anyhow::anyhow!(
                "checkpoint {} was trained with a different configuration; only `epochs` may change on resume",
                ckpt.display()
            )));
        }
        state.config.epochs = cfg.setup.train.epochs;
        log::info!("resuming at epoch {}", state.epoch);
        state
    } else {
        TrainingState::initialize(&cfg.setup, dataset.len())?
    };
    write_file(&args.out.join(CONFIG_ECHO_FILE), &cfg.to_text())?;

    run_training(&mut state, &dataset, |s| {
        save_checkpoint(s, &ckpt)?;
        fs::write(&metrics, metrics_tsv(&s.metrics))
            .map_err(|e| pointaugment::Error::io(&metrics, e))?;
        Ok(())
    })
    .context("training aborted")?;
    // covers zero-epoch runs, where the hook never fires
    save_checkpoint(&state, &ckpt)?;
    write_file(&metrics, &metrics_tsv(&state.metrics))?;

    if let Some(last) = state.metrics.last() {
        println!(
            "epoch {}\ttrain_acc {}\ttest_acc {}",
            last.epoch, last.train_accuracy, last.test_accuracy
        );
    }
    Ok(())
}

pub fn eval(args: &EvalArgs) -> CmdResult {
    let cfg = args.config.load()?;
    let state = load_state(&args.checkpoint)?;
    let dataset = load_data(&args.data, &cfg)?;
    create_dir(&args.out)?;
    let mut out = String::from("split\tsamples\taccuracy\n");
    for (name, samples) in [("train", dataset.train()), ("test", dataset.test())] {
        if samples.is_empty() {
            continue;
        }
        let acc = classification_accuracy(&state.classifier, &samples)?;
        writeln!(out, "{name}\t{}\t{acc}", samples.len()).expect("write to string");
    }
    write_file(&args.out.join("eval.tsv"), &out)?;
    print!("{out}");
    Ok(())
}

pub fn retrieve(args: &EvalArgs) -> CmdResult {
    let cfg = args.config.load()?;
    let state = load_state(&args.checkpoint)?;
    let dataset = load_data(&args.data, &cfg)?;
    create_dir(&args.out)?;
    let test = dataset.test();
    if test.is_empty() {
        return Err(CliError::Runtime(anyhow::anyhow!(
            "dataset has no test split"
        )));
    }
    let result = retrieval_map(&state.classifier, &test)?;
    let mut out = String::from("metric\tvalue\n");
    writeln!(out, "mean_ap\t{}", result.mean_ap).expect("write to string");
    writeln!(out, "queries\t{}", result.per_query.len()).expect("write to string");
    writeln!(out, "skipped\t{}", result.skipped.len()).expect("write to string");
    writeln!(out, "degenerate\t{}", result.degenerate.len()).expect("write to string");
    write_file(&args.out.join("retrieval.tsv"), &out)?;

    let mut per_query = String::from("sample_id\tap\n");
    for (q, ap) in &result.per_query {
        writeln!(per_query, "{}\t{ap}", test[*q].id).expect("write to string");
    }
    write_file(&args.out.join("retrieval_queries.tsv"), &per_query)?;
    print!("{out}");
    Ok(())
}

pub fn robustness(args: &RobustnessArgs) -> CmdResult {
    let mut cfg = args.common.config.load()?;
    if let Some(list) = &args.settings {
        cfg.robustness_settings = list
            .split(',')
            .map(|s| s.trim().parse::<CorruptionSetting>())
            .collect::<Result<_, _>>()
            .map_err(|e| CliError::Usage(e.to_string()))?;
    }
    if let Some(seed) = args.seed {
        cfg.eval_seed = seed;
    }
    let state = load_state(&args.common.checkpoint)?;
    let dataset = load_data(&args.common.data, &cfg)?;
    create_dir(&args.common.out)?;
    let rows = robustness_suite(
        &state.classifier,
        &dataset.test(),
        &cfg.robustness_settings,
        cfg.eval_seed,
    )?;
    let out = robustness_tsv(&rows);
    write_file(&args.common.out.join("robustness.tsv"), &out)?;
    print!("{out}");
    Ok(())
}

fn parse_variants(spec: &str) -> Result<Vec<(String, AblationToggles)>, CliError> {
    spec.split(';')
        .filter(|s| !s.trim().is_empty())
        .map(|item| {
            let (label, comps) = item.split_once('=').ok_or_else(|| {
                CliError::Usage(format!(
                    "ablation variant `{item}` is not `label=components`"
                ))
            })?;
            let toggles = comps
                .trim()
                .parse::<AblationToggles>()
                .map_err(|e| CliError::Usage(e.to_string()))?;
            Ok((label.trim().to_string(), toggles))
        })
        .collect()
}

pub fn ablate(args: &AblateArgs) -> CmdResult {
    let mut cfg = args.config.load()?;
    if let Some(seed) = args.seed {
        cfg.setup.train.seed = seed;
    }
    let dataset = load_data(&args.data, &cfg)?;
    cfg.setup.classifier.num_classes = dataset.num_classes();
    create_dir(&args.out)?;

    if let Some(list) = &args.lambdas {
        let lambdas: Vec<f64> = list
            .split(',')
            .map(|s| s.trim().parse::<f64>())
            .collect::<Result<_, _>>()
            .map_err(|_| CliError::Usage(format!("--lambdas expects numbers, got `{list}`")))?;
        if lambdas.iter().any(|l| !(l.is_finite() && *l >= 0.0)) {
            return Err(CliError::Usage("--lambdas must be non-negative".into()));
        }
        let rows = lambda_sweep(&dataset, &cfg.setup, &lambdas)?;
        let mut out = String::from("lambda\ttest_acc\n");
        for (l, acc) in rows {
            writeln!(out, "{l}\t{acc}").expect("write to string");
        }
        write_file(&args.out.join("lambda.tsv"), &out)?;
        print!("{out}");
        return Ok(());
    }

    let variants = match &args.variants {
        Some(spec) => parse_variants(spec)?,
        None => AblationToggles::ladder()
            .into_iter()
            .map(|(c, t)| (c.to_string(), t))
            .collect(),
    };
    if variants.is_empty() {
        return Err(CliError::Usage("no ablation variants given".into()));
    }
    let rows = ablation_runner(&dataset, &cfg.setup, &variants)?;
    let out = ablation_tsv(&rows);
    write_file(&args.out.join("ablation.tsv"), &out)?;
    print!("{out}");
    Ok(())
}

pub fn gensynth(args: &GensynthArgs) -> CmdResult {
    let classes: Vec<Primitive> = args
        .classes
        .split(',')
        .map(|s| s.trim().parse::<Primitive>())
        .collect::<Result<_, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut synth = SynthConfig::balanced(
        &classes,
        args.train_per_class,
        args.test_per_class,
        args.n_points,
    );
    synth.deformation = args.deformation;
    synth.jitter_sigma = args.jitter;
    let dataset = generate_synthetic(&synth, args.seed).map_err(|e| match e {
        pointaugment::Error::Config(m) => CliError::Usage(m),
        other => other.into(),
    })?;
    if dataset.is_empty() {
        bail_usage("synthetic dataset would be empty")?;
    }
    save_dataset(&dataset, &args.out)
        .with_context(|| format!("writing dataset to {}", args.out.display()))?;
    println!(
        "wrote {} samples ({} classes) to {}",
        dataset.len(),
        dataset.num_classes(),
        args.out.display()
    );
    Ok(())
}

fn bail_usage(msg: &str) -> CmdResult {
    Err(CliError::Usage(msg.into()))
}
