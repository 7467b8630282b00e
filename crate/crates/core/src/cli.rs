//! Command-line entry point: `train`, `infer`, `eval`, `rcp`, `synth` and
//! `info`.
//!
//! Exit codes: 0 success, 1 internal error, 2 bad arguments or files,
//! 3 data errors. Outputs are assembled in memory and only written once
//! every input has been processed.

use std::collections::BTreeMap;
use std::ops::ControlFlow;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::data::{desk_dataset, list_images, load_image, load_pairs, save_image, stream_rng, synth_rain, RainPair, SynthRainParams};
use crate::error::{Error, Result};
use crate::metrics::{score, ColorSpace, MetricReport};
use crate::model::ModelConfig;
use crate::rcp::{residue_channel, RgbImage};
use crate::trainer::{derain, evaluate, RunConfig, Trainer};

#[derive(Debug, Parser)]
#[command(name = "spdnet", version, about = "Residue-channel-guided multi-stage image deraining")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Train on a `rainy/` + `gt/` dataset directory.
    Train(TrainArgs),
    /// Derain an image or a directory of images.
    Infer(InferArgs),
    /// Score predictions against ground truth.
    Eval(EvalArgs),
    /// Write the residue channel of an image as 8-bit grayscale.
    Rcp(RcpArgs),
    /// Render synthetic rain over clean images or procedural scenes.
    Synth(SynthArgs),
    /// Print parameter counts for a config or checkpoint.
    Info(InfoArgs),
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    /// TOML file with `[model]` and `[train]` tables; defaults when omitted.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Dataset root containing `rainy/` and `gt/`.
    #[arg(long)]
    pub input: PathBuf,
    /// Run directory for `train.log` and checkpoints.
    #[arg(long)]
    pub output: PathBuf,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Resume from this checkpoint.
    #[arg(long)]
    pub weights: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InferArgs {
    #[arg(long)]
    pub weights: PathBuf,
    /// Image file or directory of images.
    #[arg(long)]
    pub input: PathBuf,
    /// Output directory.
    #[arg(long)]
    pub output: PathBuf,
    /// Write every stage as `<stem>_stage<k>.png` instead of only the final one.
    #[arg(long)]
    pub save_stages: bool,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    /// Directory of predictions matched to `--gt-dir` by stem.
    #[arg(long, required_unless_present = "weights", conflicts_with = "weights")]
    pub pred_dir: Option<PathBuf>,
    #[arg(long, requires = "pred_dir")]
    pub gt_dir: Option<PathBuf>,
    /// Evaluate a checkpoint on the dataset root given by `--input` instead.
    #[arg(long, requires = "input")]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub input: Option<PathBuf>,
    /// Also write the report as JSON.
    #[arg(long)]
    pub report: Option<PathBuf>,
    /// Score all three RGB channels instead of luminance.
    #[arg(long)]
    pub rgb: bool,
}

#[derive(Debug, Args)]
pub struct RcpArgs {
    #[arg(long)]
    pub input: PathBuf,
    #[arg(long)]
    pub output: PathBuf,
}

#[derive(Debug, Args)]
pub struct SynthArgs {
    /// Clean images to rain on; procedural scenes when omitted.
    #[arg(long)]
    pub clean_dir: Option<PathBuf>,
    /// Receives `rainy/` and `gt/`.
    #[arg(long)]
    pub out_dir: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub count: usize,
    /// TOML file of rain parameters.
    #[arg(long)]
    pub params: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct InfoArgs {
    #[arg(long, conflicts_with = "config")]
    pub weights: Option<PathBuf>,
    #[arg(long)]
    pub config: Option<PathBuf>,
}

pub fn exit_code(err: &Error) -> u8 {
    match err {
        Error::Decode { .. } | Error::Undecodable { .. } | Error::DatasetIntegrity { .. } => 3,
        Error::InvalidInput(_) | Error::Config(_) | Error::CheckpointIncompatible(_) | Error::Io(_) => 2,
        Error::InvalidShape(_) | Error::NonFiniteLoss { .. } => 1,
    }
}

/// Parses `std::env::args` and runs the selected subcommand.
pub fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

pub fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Train(a) => train(a),
        Command::Infer(a) => infer(a),
        Command::Eval(a) => eval(a),
        Command::Rcp(a) => rcp(a),
        Command::Synth(a) => synth(a),
        Command::Info(a) => info(a),
    }
}

fn require_file(path: &Path, what: &str) -> Result<()> {
    if path.is_file() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} {} does not exist", path.display())))
    }
}

fn require_dir(path: &Path, what: &str) -> Result<()> {
    if path.is_dir() {
        Ok(())
    } else {
        Err(Error::InvalidInput(format!("{what} {} is not a directory", path.display())))
    }
}

fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    require_file(path, "weights")?;
    Checkpoint::load(path)
}

fn train(a: TrainArgs) -> Result<()> {
    let mut cfg = match &a.config {
        Some(p) => {
            require_file(p, "config")?;
            RunConfig::load(p)?
        }
        None => RunConfig::default(),
    };
    if let Some(seed) = a.seed {
        cfg.train.seed = seed;
    }
    require_dir(&a.input, "dataset")?;
    let data = load_pairs(&a.input)?;
    let mut trainer = match &a.weights {
        Some(p) => {
            let ck = load_checkpoint(p)?;
            ck.ensure_matches(&cfg.effective_model())?;
            Trainer::resume(ck, cfg.train.clone())?
        }
        None => Trainer::new(&cfg.model, cfg.train.clone())?,
    };
    let patch = cfg.train.patch_size;
    if let Some(p) = data.iter().find(|p| p.rainy.height() < patch || p.rainy.width() < patch) {
        return Err(Error::DatasetIntegrity { key: p.key.clone(), reason: format!("smaller than patch size {patch}") });
    }
    let log = trainer.run(&data, Some(&a.output), |_, e| {
        println!("{}", e.csv_line());
        ControlFlow::Continue(())
    })?;
    println!("trained {} steps; final checkpoint {}", log.len(), a.output.join("final.safetensors").display());
    Ok(())
}

fn collect_inputs(input: &Path) -> Result<Vec<(String, PathBuf)>> {
    if input.is_dir() {
        let found = list_images(input)?;
        if found.is_empty() {
            return Err(Error::InvalidInput(format!("no images in {}", input.display())));
        }
        Ok(found.into_iter().collect())
    } else if input.is_file() {
        let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("image").to_string();
        Ok(vec![(stem, input.to_path_buf())])
    } else {
        Err(Error::InvalidInput(format!("input {} does not exist", input.display())))
    }
}

/// Decodes every file, reporting all failures at once.
fn decode_all(inputs: &[(String, PathBuf)]) -> Result<Vec<(String, RgbImage)>> {
    let mut images = Vec::new();
    let mut failed = Vec::new();
    for (stem, path) in inputs {
        match load_image(path) {
            Ok(img) => images.push((stem.clone(), img)),
            Err(Error::Decode { path, reason }) => failed.push(format!("  {} ({reason})", path.display())),
            Err(e) => return Err(e),
        }
    }
    if failed.is_empty() {
        Ok(images)
    } else {
        Err(Error::Undecodable { count: failed.len(), files: failed.join("\n") })
    }
}

fn write_all(outputs: &[(PathBuf, ndarray::Array4<f32>)]) -> Result<()> {
    for (path, data) in outputs {
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        save_image(path, data)?;
    }
    Ok(())
}

fn infer(a: InferArgs) -> Result<()> {
    let ck = load_checkpoint(&a.weights)?;
    let net = ck.network()?;
    let images = decode_all(&collect_inputs(&a.input)?)?;
    let mut outputs = Vec::new();
    for (stem, img) in &images {
        let stages = derain(&net, &ck.params, img)?;
        if a.save_stages {
            for (k, s) in stages.into_iter().enumerate() {
                outputs.push((a.output.join(format!("{stem}_stage{}.png", k + 1)), s.into_inner()));
            }
        } else {
            let last = stages.into_iter().last().expect("at least one stage");
            outputs.push((a.output.join(format!("{stem}.png")), last.into_inner()));
        }
    }
    write_all(&outputs)?;
    println!("wrote {} file(s) to {}", outputs.len(), a.output.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let space = if a.rgb { ColorSpace::Rgb } else { ColorSpace::Y };
    let report = match (&a.weights, &a.input, &a.pred_dir, &a.gt_dir) {
        (Some(w), Some(input), _, _) => {
            let ck = load_checkpoint(w)?;
            require_dir(input, "dataset")?;
            evaluate(&ck.network()?, &ck.params, &load_pairs(input)?, space)?
        }
        (None, _, Some(pred), Some(gt)) => {
            require_dir(pred, "pred-dir")?;
            require_dir(gt, "gt-dir")?;
            eval_dirs(pred, gt, space)?
        }
        _ => return Err(Error::InvalidInput("eval needs --pred-dir and --gt-dir, or --weights and --input".into())),
    };
    let json = serde_json::to_string_pretty(&report).map_err(|e| Error::InvalidInput(e.to_string()))?;
    if let Some(path) = &a.report {
        std::fs::write(path, json + "\n")?;
    }
    print!("{}", report.to_table());
    Ok(())
}

/// Scores every prediction whose stem has a ground-truth partner.
pub fn eval_dirs(pred_dir: &Path, gt_dir: &Path, space: ColorSpace) -> Result<MetricReport> {
    let preds = list_images(pred_dir)?;
    let gts = list_images(gt_dir)?;
    let mut scores = BTreeMap::new();
    for (stem, pred_path) in &preds {
        let Some(gt_path) = gts.get(stem) else {
            return Err(Error::DatasetIntegrity { key: stem.clone(), reason: "no ground truth with this stem".into() });
        };
        let pred = load_image(pred_path)?;
        let gt = load_image(gt_path)?;
        let pair = RainPair::new(pred, gt, stem.clone())?;
        scores.insert(stem.clone(), score(&pair.rainy, &pair.clean, space)?);
    }
    if scores.is_empty() {
        return Err(Error::InvalidInput(format!("no predictions in {}", pred_dir.display())));
    }
    Ok(MetricReport::new(space, scores))
}

fn rcp(a: RcpArgs) -> Result<()> {
    require_file(&a.input, "input")?;
    let img = load_image(&a.input)?;
    write_all(&[(a.output.clone(), residue_channel(&img).into_inner())])
}

fn synth(a: SynthArgs) -> Result<()> {
    let params = match &a.params {
        Some(p) => {
            require_file(p, "params")?;
            let text = std::fs::read_to_string(p)?;
            let params: SynthRainParams =
                toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?;
            params.validate()?;
            params
        }
        None => SynthRainParams::default(),
    };
    if a.count == 0 {
        return Err(Error::InvalidInput("--count must be >= 1".into()));
    }
    let pairs = match &a.clean_dir {
        Some(dir) => {
            require_dir(dir, "clean-dir")?;
            let clean = decode_all(&list_images(dir)?.into_iter().collect::<Vec<_>>())?;
            if clean.is_empty() {
                return Err(Error::InvalidInput(format!("no images in {}", dir.display())));
            }
            (0..a.count)
                .map(|i| {
                    let (stem, img) = &clean[i % clean.len()];
                    let round = i / clean.len();
                    let key = if round == 0 { stem.clone() } else { format!("{stem}_r{round}") };
                    synth_rain(img, &key, &params, &mut stream_rng(a.seed, i as u64))
                })
                .collect::<Result<Vec<_>>>()?
        }
        None => desk_dataset(a.count, params.scene_size, &params, a.seed)?,
    };
    let mut outputs = Vec::new();
    for p in pairs {
        outputs.push((a.out_dir.join("rainy").join(format!("{}.png", p.key)), p.rainy.into_inner()));
        outputs.push((a.out_dir.join("gt").join(format!("{}.png", p.key)), p.clean.into_inner()));
    }
    write_all(&outputs)?;
    println!("wrote {} pair(s) to {}", a.count, a.out_dir.display());
    Ok(())
}

/// Human-readable parameter summary.
pub fn describe(config: &ModelConfig) -> String {
    let mut out = format!(
        "param_count: {}\nstages: {}\nchannels: {}\nlevels_per_wmlm: {}\nuse_ifm: {}\nuse_ensemble: {}\nrcp_update: {}\nbreakdown:\n",
        config.param_count(),
        config.num_wmlm,
        config.base_channels,
        config.levels_per_wmlm,
        config.use_ifm,
        config.use_ensemble,
        config.rcp_update,
    );
    for (name, n) in config.breakdown() {
        out.push_str(&format!("  {name}: {n}\n"));
    }
    out
}

fn info(a: InfoArgs) -> Result<()> {
    let config = match (&a.weights, &a.config) {
        (Some(w), _) => load_checkpoint(w)?.model,
        (None, Some(c)) => {
            require_file(c, "config")?;
            RunConfig::load(c)?.effective_model()
        }
        (None, None) => ModelConfig::default(),
    };
    print!("{}", describe(&config));
    Ok(())
}
