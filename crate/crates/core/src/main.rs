use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use serde::de::DeserializeOwned;

use dekr::decoder::{read_predictions, write_predictions, DecodeConfig, DecodeError, ScoringNet};
use dekr::eval::{evaluate, evaluate_with_errors, run_bench as bench_rows, write_bench_csv, EvalConfig, EvalError};
use dekr::network::{NetworkError, Variant};
use dekr::pose::PoseError;
use dekr::synth::{generate_dataset, SceneSpec, SynthDataset, SynthError};
use dekr::trainer::{
    self, desk_datasets, fit_scoring_net, load_checkpoint, predict_dataset, run_ablation, scoring_pairs, AblationConfig,
    ScoringFitConfig, TrainConfig, TrainData, TrainError, CHECKPOINT_DIR, DESK_TRAIN_IMAGES, DESK_VAL_IMAGES,
};

#[derive(Parser)]
#[command(name = "dekr", version, about = "Bottom-up multi-person pose estimation with adaptive per-keypoint regression")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Common {
    /// JSON config; flags override its fields.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset.
    Synth {
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2000)]
        n: usize,
        #[arg(long)]
        size: Option<usize>,
        #[arg(long)]
        skeleton: Option<String>,
        /// Persons per image as `min,max`.
        #[arg(long)]
        persons: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Train a network on a dataset directory.
    Train {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        variant: Option<Variant>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        batch_size: Option<usize>,
        #[arg(long)]
        lr: Option<f64>,
        #[arg(long)]
        max_steps: Option<usize>,
        #[arg(long)]
        no_augment: bool,
        /// Continue from `<out>/checkpoint`.
        #[arg(long)]
        resume: bool,
        /// Also fit the scoring net into `<out>/scoring`.
        #[arg(long)]
        fit_scoring: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Decode poses for every image of a dataset.
    Decode {
        /// Checkpoint directory, or a training output directory.
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        out: PathBuf,
        /// Scoring-net directory; without it poses keep their center heat.
        #[arg(long)]
        scoring: Option<PathBuf>,
        #[arg(long)]
        flip: bool,
        /// Comma-separated test scales, e.g. `0.5,1,2`.
        #[arg(long)]
        scales: Option<String>,
        #[arg(long)]
        absorb: bool,
        #[command(flatten)]
        common: Common,
    },
    /// Score predictions against a dataset's annotations.
    Eval {
        #[arg(long)]
        predictions: PathBuf,
        /// Dataset directory or annotations file.
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        error_analysis: bool,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
    /// Train and compare all regression-head variants.
    Ablate {
        #[arg(long)]
        out: PathBuf,
        /// Training set; the desk protocol is generated when omitted.
        #[arg(long, requires = "val")]
        train: Option<PathBuf>,
        #[arg(long, requires = "train")]
        val: Option<PathBuf>,
        /// Number of seeds, counted from `--seed`.
        #[arg(long)]
        seeds: Option<usize>,
        #[arg(long)]
        epochs: Option<usize>,
        /// Comma-separated subset of baseline,aa,sr,dekr.
        #[arg(long)]
        variants: Option<String>,
        #[command(flatten)]
        common: Common,
    },
    /// Finite-difference check of every differentiable operation.
    Gradcheck {
        #[arg(long, default_value_t = 20)]
        seeds: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Draw predicted poses onto dataset images.
    Viz {
        #[arg(long)]
        data: PathBuf,
        #[arg(long)]
        predictions: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 16)]
        limit: usize,
        #[command(flatten)]
        common: Common,
    },
    /// Time adaptive convolution against plain convolution and report head sizes.
    Bench {
        #[arg(long, default_value_t = 5)]
        reps: usize,
        #[arg(long)]
        out: Option<PathBuf>,
        #[command(flatten)]
        common: Common,
    },
}

/// Exit 1 for bad input, 2 for failures while running.
enum Failure {
    Validation(String),
    Runtime(String),
}

impl Failure {
    fn code(&self) -> u8 {
        match self {
            Failure::Validation(_) => 1,
            Failure::Runtime(_) => 2,
        }
    }
}

impl From<std::io::Error> for Failure {
    fn from(e: std::io::Error) -> Self {
        Failure::Runtime(e.to_string())
    }
}

impl From<NetworkError> for Failure {
    fn from(e: NetworkError) -> Self {
        match e {
            NetworkError::Config(_) | NetworkError::Param { .. } => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<SynthError> for Failure {
    fn from(e: SynthError) -> Self {
        match e {
            SynthError::Pose(p) => p.into(),
            SynthError::Spec(_) => Failure::Validation(e.to_string()),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<PoseError> for Failure {
    fn from(e: PoseError) -> Self {
        match e {
            PoseError::Io(_) => Failure::Runtime(e.to_string()),
            _ => Failure::Validation(e.to_string()),
        }
    }
}

impl From<DecodeError> for Failure {
    fn from(e: DecodeError) -> Self {
        match e {
            DecodeError::Config(_) | DecodeError::Format { .. } => Failure::Validation(e.to_string()),
            DecodeError::Network(n) => n.into(),
            DecodeError::Io(_) => Failure::Runtime(e.to_string()),
        }
    }
}

impl From<EvalError> for Failure {
    fn from(e: EvalError) -> Self {
        Failure::Validation(e.to_string())
    }
}

impl From<TrainError> for Failure {
    fn from(e: TrainError) -> Self {
        match e {
            TrainError::Config(_) | TrainError::TooFewPairs { .. } => Failure::Validation(e.to_string()),
            TrainError::Network(n) => n.into(),
            TrainError::Decode(d) => d.into(),
            TrainError::Eval(v) => v.into(),
            _ => Failure::Runtime(e.to_string()),
        }
    }
}

type Result<T> = std::result::Result<T, Failure>;

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> Result<T> {
    let Some(p) = path else { return Ok(T::default()) };
    let text = std::fs::read_to_string(p).map_err(|e| Failure::Validation(format!("config {}: {e}", p.display())))?;
    serde_json::from_str(&text).map_err(|e| Failure::Validation(format!("config {}: {e}", p.display())))
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>> {
    s.split(',')
        .map(|v| v.trim().parse().map_err(|_| Failure::Validation(format!("bad {what} value {v:?}"))))
        .collect()
}

fn parse_variant(s: &str) -> Result<Variant> {
    s.trim().parse().map_err(Failure::Validation)
}

fn load_dataset(dir: &Path) -> Result<SynthDataset> {
    if !dir.join("annotations.json").exists() {
        return Err(Failure::Runtime(format!("{} has no annotations.json", dir.display())));
    }
    Ok(SynthDataset::load(dir)?)
}

fn print_json(v: &impl serde::Serialize) {
    println!("{}", serde_json::to_string_pretty(v).expect("serializable"));
}

fn write_json(path: &Path, v: &impl serde::Serialize) -> Result<()> {
    if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    std::fs::write(path, serde_json::to_string_pretty(v).expect("serializable") + "\n")?;
    Ok(())
}

fn synth(out: &Path, n: usize, size: Option<usize>, skeleton: Option<String>, persons: Option<String>, c: &Common) -> Result<()> {
    let mut spec: SceneSpec = load_config(c.config.as_deref())?;
    if let Some(s) = size {
        spec.image_size = s;
    }
    if let Some(s) = skeleton {
        spec.skeleton = s;
    }
    if let Some(p) = persons {
        match parse_list::<usize>(&p, "persons")?[..] {
            [lo, hi] => spec.persons_per_image = (lo, hi),
            _ => return Err(Failure::Validation("--persons takes min,max".into())),
        }
    }
    if let Some(s) = c.seed {
        spec.seed = s;
    }
    let ds = generate_dataset(&spec, n)?;
    ds.save(out)?;
    eprintln!("wrote {} images, {} instances to {}", ds.len(), ds.annotations.instances.len(), out.display());
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn train(
    data: &Path,
    out: &Path,
    variant: Option<Variant>,
    epochs: Option<usize>,
    batch_size: Option<usize>,
    lr: Option<f64>,
    max_steps: Option<usize>,
    no_augment: bool,
    resume: bool,
    fit_scoring: bool,
    c: &Common,
) -> Result<()> {
    let mut cfg: TrainConfig = load_config(c.config.as_deref())?;
    if let Some(v) = variant {
        cfg.network.variant = v;
    }
    if let Some(e) = epochs {
        cfg.total_epochs = e;
    }
    if let Some(b) = batch_size {
        cfg.batch_size = b;
    }
    if let Some(l) = lr {
        cfg.base_lr = l;
    }
    if max_steps.is_some() {
        cfg.max_steps = max_steps;
    }
    if no_augment {
        cfg.augment = false;
    }
    if let Some(s) = c.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let ds = load_dataset(data)?;
    let td = TrainData::from_dataset(&ds);
    let run = trainer::train(&td, &cfg, Some(out), resume)?;
    let last = run.log.last();
    eprintln!("trained {} steps; last total loss {:.5}", run.steps, last.map_or(f64::NAN, |e| e.total));
    if fit_scoring {
        let pairs = scoring_pairs(&cfg.network, &run.params, &td, &DecodeConfig::default())?;
        let scfg = ScoringFitConfig { seed: cfg.seed, ..ScoringFitConfig::default() };
        let (net, report) = fit_scoring_net(&pairs, &td.skeleton, &scfg)?;
        net.save(out.join("scoring"))?;
        print_json(&report);
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn decode(
    checkpoint: &Path,
    data: &Path,
    out: &Path,
    scoring: Option<PathBuf>,
    flip: bool,
    scales: Option<String>,
    absorb: bool,
    c: &Common,
) -> Result<()> {
    let mut cfg: DecodeConfig = load_config(c.config.as_deref())?;
    cfg.flip |= flip;
    cfg.absorb |= absorb;
    if let Some(s) = scales {
        cfg.scales = parse_list(&s, "scale")?;
    }
    cfg.validate()?;
    let ckpt = if checkpoint.join(CHECKPOINT_DIR).is_dir() { checkpoint.join(CHECKPOINT_DIR) } else { checkpoint.to_path_buf() };
    if !ckpt.join("manifest.json").exists() {
        return Err(Failure::Validation(format!("{} is not a checkpoint", checkpoint.display())));
    }
    let (net, params) = load_checkpoint(&ckpt)?;
    let scoring = scoring.map(ScoringNet::load).transpose()?;
    let ds = load_dataset(data)?;
    let preds = predict_dataset(&net, &params, &ds, &cfg, scoring.as_ref())?;
    if let Some(parent) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
        std::fs::create_dir_all(parent)?;
    }
    write_predictions(out, &preds)?;
    let poses: usize = preds.iter().map(|p| p.poses.len()).sum();
    eprintln!("wrote {poses} poses for {} images to {}", preds.len(), out.display());
    Ok(())
}

fn eval(predictions: &Path, data: &Path, error_analysis: bool, out: Option<PathBuf>) -> Result<()> {
    let ann_path = if data.is_dir() { data.join("annotations.json") } else { data.to_path_buf() };
    let ann = dekr::pose::AnnotationSet::load(&ann_path)?;
    let preds = read_predictions(predictions)?;
    let size = ann.images.first().map_or(640, |i| i.width.max(i.height) as usize);
    let cfg = EvalConfig::for_image_size(size);
    let report = if error_analysis { evaluate_with_errors(&preds, &ann, &cfg)? } else { evaluate(&preds, &ann, &cfg)? };
    print_json(&report);
    if let Some(o) = out {
        write_json(&o, &report)?;
    }
    Ok(())
}

#[allow(clippy::too_many_arguments)]
fn ablate(
    out: &Path,
    train: Option<PathBuf>,
    val: Option<PathBuf>,
    seeds: Option<usize>,
    epochs: Option<usize>,
    variants: Option<String>,
    c: &Common,
) -> Result<()> {
    let mut cfg: AblationConfig = load_config(c.config.as_deref())?;
    let base = c.seed.unwrap_or(0);
    if let Some(n) = seeds {
        cfg.seeds = (0..n as u64).map(|s| base + s).collect();
    } else if c.seed.is_some() {
        cfg.seeds = vec![base];
    }
    if let Some(e) = epochs {
        cfg.train.total_epochs = e;
    }
    if let Some(v) = variants {
        cfg.variants = v.split(',').map(parse_variant).collect::<Result<_>>()?;
    }
    cfg.train.validate()?;
    cfg.decode.validate()?;
    let (train_ds, val_ds) = match (train, val) {
        (Some(t), Some(v)) => (load_dataset(&t)?, load_dataset(&v)?),
        _ => desk_datasets(DESK_TRAIN_IMAGES, DESK_VAL_IMAGES, 0)?,
    };
    let td = TrainData::from_dataset(&train_ds);
    let report = run_ablation(&td, &val_ds, &cfg, Some(out))?;
    write_json(&out.join("report.json"), &report)?;
    println!("{:<9} {:>6} {:>7} {:>7} {:>7} {:>9} {:>7} {:>8}", "variant", "AP", "AP50", "jitter", "miss", "inversion", "swap", "l_p");
    for r in &report.rows {
        println!(
            "{:<9} {:>6.2} {:>7.2} {:>7.2} {:>7.2} {:>9.2} {:>7.2} {:>8.4}",
            r.variant.name(),
            r.ap,
            r.ap50,
            r.jitter,
            r.miss,
            r.inversion,
            r.swap,
            r.final_l_p
        );
    }
    Ok(())
}

fn gradcheck(seeds: usize, c: &Common) -> Result<()> {
    let rows = dekr::gradsuite::run_suite(seeds, c.seed.unwrap_or(0)).map_err(|e| Failure::Runtime(e.to_string()))?;
    for r in &rows {
        println!("{:<16} seeds {:>3}  max rel err {:.3e}  {}", r.op, r.seeds, r.max_rel_error, if r.passed { "ok" } else { "FAIL" });
    }
    match rows.iter().find(|r| !r.passed) {
        Some(r) => Err(Failure::Runtime(format!("gradient check failed for {}", r.op))),
        None => Ok(()),
    }
}

fn visualize(data: &Path, predictions: &Path, out: &Path, limit: usize) -> Result<()> {
    let ds = load_dataset(data)?;
    let preds = read_predictions(predictions)?;
    std::fs::create_dir_all(out)?;
    let index: std::collections::HashMap<u64, usize> =
        ds.annotations.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
    let mut written = 0;
    for rec in preds.iter().take(limit) {
        let i = *index.get(&rec.image_id).ok_or(EvalError::UnknownImage { id: rec.image_id })?;
        let poses: Vec<Vec<[f64; 2]>> = rec.poses.iter().map(|p| p.points()).collect();
        dekr::eval::visualize(&ds.images[i], &poses, &ds.annotations.skeleton, out.join(format!("pred_{:06}.ppm", rec.image_id)))?;
        written += 1;
    }
    eprintln!("wrote {written} images to {}", out.display());
    Ok(())
}

fn run_bench(reps: usize, out: Option<PathBuf>, c: &Common) -> Result<()> {
    let rows = bench_rows(reps, c.seed.unwrap_or(0))?;
    let mut buf = Vec::new();
    write_bench_csv(&mut buf, &rows)?;
    match out {
        Some(p) => std::fs::write(p, &buf)?,
        None => print!("{}", String::from_utf8_lossy(&buf)),
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { out, n, size, skeleton, persons, common } => synth(&out, n, size, skeleton, persons, &common),
        Command::Train { data, out, variant, epochs, batch_size, lr, max_steps, no_augment, resume, fit_scoring, common } => {
            train(&data, &out, variant, epochs, batch_size, lr, max_steps, no_augment, resume, fit_scoring, &common)
        }
        Command::Decode { checkpoint, data, out, scoring, flip, scales, absorb, common } => {
            decode(&checkpoint, &data, &out, scoring, flip, scales, absorb, &common)
        }
        Command::Eval { predictions, data, error_analysis, out, common: _ } => eval(&predictions, &data, error_analysis, out),
        Command::Ablate { out, train, val, seeds, epochs, variants, common } => {
            ablate(&out, train, val, seeds, epochs, variants, &common)
        }
        Command::Gradcheck { seeds, common } => gradcheck(seeds, &common),
        Command::Viz { data, predictions, out, limit, common: _ } => visualize(&data, &predictions, &out, limit),
        Command::Bench { reps, out, common } => run_bench(reps, out, &common),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
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
        Err(f) => {
            let (Failure::Validation(m) | Failure::Runtime(m)) = &f;
            eprintln!("error: {m}");
            ExitCode::from(f.code())
        }
    }
}
