//! Command-line entry point: simulation, synthetic data, training, scoring,
//! evaluation and invariant checks.

use std::fs::{self, File};
use std::io::{self, BufReader, Write};
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::checks::{self, CheckOptions, Suite};
use crate::error::{Error, Result};
use crate::geometry::{self, SceneSpec};
use crate::losses::CdlKernels;
use crate::metrics::{compute_metrics, read_scores, sweep_thresholds, write_reports, write_scores};
use crate::stpm::Stpm;
use crate::synth::{load_dataset, make_dataset, save_dataset, verify_separable, SpoofMode, SynthConfig};
use crate::trainer::{
    self, frame_samples, load_backbone, load_stpm, save_backbone, save_stpm, train_stage1, train_stage2, ModelPreset,
    TrainConfig,
};
use crate::backbone::Backbone;

/// Seed used when none is given.
pub const DEFAULT_SEED: u64 = 0;

#[derive(Debug, Parser)]
#[command(name = "depthpad", version, about = "Depth-supervised presentation attack detection toolkit")]
pub struct Cli {
    /// Print progress details to stderr.
    #[arg(short, long, global = true)]
    pub verbose: bool,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Sweep a camera scene and classify it from three-point motion.
    Simulate(SimulateArgs),
    /// Generate a synthetic clip dataset.
    Synth(SynthArgs),
    /// Run one training stage.
    Train(TrainArgs),
    /// Score clips with trained checkpoints.
    Score(ScoreArgs),
    /// Compute error rates from a score file.
    Eval(EvalArgs),
    /// Run the invariant suites.
    Check(CheckArgs),
}

#[derive(Debug, Args)]
pub struct SimulateArgs {
    /// Scene description (TOML).
    #[arg(long)]
    pub scene: PathBuf,
    /// Write the per-step CSV here instead of stdout.
    #[arg(long)]
    pub csv: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PaiArg {
    Print,
    Replay,
}

impl From<PaiArg> for SpoofMode {
    fn from(p: PaiArg) -> Self {
        match p {
            PaiArg::Print => SpoofMode::Print,
            PaiArg::Replay => SpoofMode::Replay,
        }
    }
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Output directory; one subdirectory per clip.
    #[arg(long)]
    pub out: PathBuf,
    #[arg(long, default_value_t = 64)]
    pub clips: usize,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Spoof instruments to cycle through.
    #[arg(long, value_enum, value_delimiter = ',', default_value = "print")]
    pub pai: Vec<PaiArg>,
    /// Generator settings (TOML); defaults to the built-in desk settings.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Fail unless the motion statistic separates live from spoof by this margin.
    #[arg(long)]
    pub verify_margin: Option<f64>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
pub enum PresetArg {
    Tiny,
    Desk,
    Full,
}

impl From<PresetArg> for ModelPreset {
    fn from(p: PresetArg) -> Self {
        match p {
            PresetArg::Tiny => ModelPreset::Tiny,
            PresetArg::Desk => ModelPreset::Desk,
            PresetArg::Full => ModelPreset::Full,
        }
    }
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[arg(long, value_parser = clap::value_parser!(u8).range(1..=2))]
    pub stage: u8,
    /// Training settings (TOML); defaults to the desk settings of the stage.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Overrides the seed of the settings.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Overrides the step budget of the settings.
    #[arg(long)]
    pub steps: Option<usize>,
    /// Network sizes for a fresh stage-1 model.
    #[arg(long, value_enum, default_value = "desk")]
    pub model: PresetArg,
    /// Dataset directory written by `synth`.
    #[arg(long)]
    pub data: PathBuf,
    /// Stage-1 checkpoint stem; required for stage 2.
    #[arg(long)]
    pub backbone: Option<PathBuf>,
    /// Output directory for checkpoints and the loss curve.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct ScoreArgs {
    #[arg(long)]
    pub backbone: PathBuf,
    #[arg(long)]
    pub stpm: PathBuf,
    #[arg(long)]
    pub data: PathBuf,
    /// Score CSV to write.
    #[arg(long)]
    pub out: PathBuf,
    /// Weight of the live probability in the fused score.
    #[arg(long, default_value_t = 0.8)]
    pub beta: f64,
    #[arg(long, default_value_t = 5)]
    pub frames: usize,
}

#[derive(Debug, Args)]
#[command(group = clap::ArgGroup::new("mode").required(true).args(["threshold", "sweep"]))]
pub struct EvalArgs {
    /// Score CSV with header `sample_id,label,pai,score`.
    #[arg(long)]
    pub scores: PathBuf,
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Evaluate every distinct threshold and report the equal-error point.
    #[arg(long)]
    pub sweep: bool,
    /// Write the report rows as CSV.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CheckArgs {
    /// Suite name or `all`.
    #[arg(long, default_value = "all")]
    pub suite: String,
    #[arg(long, default_value_t = DEFAULT_SEED)]
    pub seed: u64,
    /// Write the JSON summary here instead of stdout.
    #[arg(long)]
    pub json: Option<PathBuf>,
    /// Add one to the centre tap of the given contrastive kernel before checking.
    #[arg(long, hide = true)]
    pub corrupt_cdl_kernel: Option<usize>,
}

/// Runs a parsed command line and returns the process exit code.
pub fn run(cli: Cli) -> i32 {
    let verbose = cli.verbose;
    let outcome = match cli.command {
        Command::Simulate(a) => simulate(a).map(|_| 0),
        Command::Synth(a) => synth(a, verbose).map(|_| 0),
        Command::Train(a) => train(a, verbose).map(|_| 0),
        Command::Score(a) => score(a).map(|_| 0),
        Command::Eval(a) => eval(a).map(|_| 0),
        Command::Check(a) => check(a, verbose),
    };
    match outcome {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {e}");
            2
        }
    }
}

fn simulate(a: SimulateArgs) -> Result<()> {
    let scene = SceneSpec::load(&a.scene)?;
    let (rows, verdict) = geometry::sweep(&scene)?;
    let write = |w: &mut dyn Write| -> Result<()> {
        let mut csv = csv::Writer::from_writer(w);
        for r in &rows {
            csv.serialize(r)?;
        }
        csv.flush()?;
        Ok(())
    };
    match &a.csv {
        Some(p) => {
            write(&mut File::create(p)?)?;
            println!("verdict: {verdict}");
        }
        None => {
            write(&mut io::stdout().lock())?;
            eprintln!("verdict: {verdict}");
        }
    }
    Ok(())
}

fn read_toml<T: serde::de::DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path)?;
    toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
}

fn synth(a: SynthArgs, verbose: bool) -> Result<()> {
    let cfg: SynthConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None => SynthConfig::default(),
    };
    cfg.validate()?;
    let pais: Vec<SpoofMode> = a.pai.iter().map(|&p| p.into()).collect();
    let clips = make_dataset(&cfg, a.clips, a.seed, &pais)?;
    if let Some(margin) = a.verify_margin {
        let (live, spoof) = verify_separable(&clips, margin)?;
        if verbose {
            eprintln!("motion statistic: live minimum {live:.4}, spoof maximum {spoof:.4}");
        }
    }
    fs::create_dir_all(&a.out)?;
    save_dataset(&clips, &a.out)?;
    println!("wrote {} clips to {}", clips.len(), a.out.display());
    Ok(())
}

fn train(a: TrainArgs, verbose: bool) -> Result<()> {
    let mut cfg: TrainConfig = match &a.config {
        Some(p) => read_toml(p)?,
        None if a.stage == 1 => TrainConfig::desk_stage1(),
        None => TrainConfig::desk_stage2(),
    };
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    if let Some(s) = a.steps {
        cfg.steps = s;
    }
    cfg.validate(a.stage)?;
    let clips = load_dataset(&a.data)?;
    fs::create_dir_all(&a.out)?;
    let (curve, hash, name) = if a.stage == 1 {
        let mut backbone = Backbone::new(ModelPreset::from(a.model).backbone(), cfg.seed)?;
        let curve = train_stage1(&cfg, &mut backbone, &frame_samples(&clips))?;
        (curve, save_backbone(&backbone, a.out.join("backbone"))?, "backbone")
    } else {
        let stem = a
            .backbone
            .as_ref()
            .ok_or_else(|| Error::Config("stage 2 needs --backbone <stage-1 checkpoint>".into()))?;
        let backbone = load_backbone(stem)?;
        let mut stpm = Stpm::new(
            ModelPreset::from(a.model).stpm(),
            &backbone.level_channels(),
            backbone.config().depth_size,
            cfg.seed,
        )?;
        let curve = train_stage2(&cfg, &backbone, &mut stpm, &clips)?;
        (curve, save_stpm(&stpm, backbone.config(), a.out.join("stpm"))?, "stpm")
    };
    let csv_path = a.out.join(format!("loss_stage{}.csv", a.stage));
    curve.write_csv(File::create(&csv_path)?)?;
    if verbose {
        if let (Some(first), Some(last)) = (curve.records.first(), curve.records.last()) {
            eprintln!("loss {:.6} -> {:.6} over {} steps", first.l_overall, last.l_overall, curve.records.len());
        }
    }
    println!("{name} sha256 {hash}");
    Ok(())
}

fn score(a: ScoreArgs) -> Result<()> {
    let backbone = load_backbone(&a.backbone)?;
    let (stpm, expected) = load_stpm(&a.stpm)?;
    if &expected != backbone.config() {
        return Err(Error::Config("temporal module was trained on a different backbone layout".into()));
    }
    let clips = load_dataset(&a.data)?;
    let records = trainer::score_clips(&backbone, &stpm, &clips, a.frames, a.beta)?;
    write_scores(File::create(&a.out)?, &records)?;
    println!("scored {} clips", records.len());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let records = read_scores(BufReader::new(File::open(&a.scores)?))?;
    let reports = if let Some(t) = a.threshold {
        let r = compute_metrics(&records, t)?;
        println!("{r}");
        vec![r]
    } else {
        let sweep = sweep_thresholds(&records)?;
        println!("equal error point of {} thresholds", sweep.points.len());
        println!("{}", sweep.eer());
        sweep.points
    };
    if let Some(p) = &a.out {
        write_reports(File::create(p)?, &reports)?;
    }
    Ok(())
}

fn check(a: CheckArgs, verbose: bool) -> Result<i32> {
    let mut opts = CheckOptions {
        seed: a.seed,
        ..CheckOptions::default()
    };
    if let Some(k) = a.corrupt_cdl_kernel {
        let mut masks = *opts.kernels.masks();
        let mask = masks
            .get_mut(k)
            .ok_or_else(|| Error::Config(format!("kernel index {k} is out of range 0..8")))?;
        mask[4] += 1.0;
        opts.kernels = CdlKernels::from_masks_unchecked(masks);
    }
    let reports = if a.suite == "all" {
        checks::run_all(&opts)?
    } else {
        vec![checks::run_suite(a.suite.parse::<Suite>()?, &opts)?]
    };
    for r in &reports {
        for c in &r.checks {
            if verbose || !c.passed {
                let tag = if c.passed { "PASS" } else { "FAIL" };
                eprintln!("{tag} {}/{} {}", r.suite, c.name, c.detail);
            }
        }
    }
    let json = serde_json::to_string_pretty(&reports)?;
    match &a.json {
        Some(p) => fs::write(p, json + "\n")?,
        None => println!("{json}"),
    }
    Ok(if reports.iter().all(|r| r.passed) { 0 } else { 1 })
}
