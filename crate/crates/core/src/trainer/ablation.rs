//! Train, score and evaluate every regression-head variant over a seed set.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::scoring::{fit_scoring_net, scoring_pairs, ScoringFitConfig, ScoringFitReport};
use super::{final_l_p, read_log, steps_per_epoch, train, TrainConfig, TrainData, TrainError, LOG_FILE};
use crate::decoder::{decode_batch, DecodeConfig, ImagePredictions, PosePrediction, ScoringNet};
use crate::eval::{evaluate, evaluate_with_errors, EvalConfig, EvalReport};
use crate::network::{NetworkConfig, Params, Variant};
use crate::synth::SynthDataset;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblationConfig {
    pub variants: Vec<Variant>,
    pub seeds: Vec<u64>,
    pub train: TrainConfig,
    pub decode: DecodeConfig,
    pub scoring: ScoringFitConfig,
}

impl Default for AblationConfig {
    fn default() -> Self {
        Self {
            variants: Variant::ALL.to_vec(),
            seeds: vec![0, 1, 2],
            train: TrainConfig::default(),
            decode: DecodeConfig::default(),
            scoring: ScoringFitConfig::default(),
        }
    }
}

/// Outcome of one trained variant and seed.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunResult {
    pub variant: Variant,
    pub seed: u64,
    pub steps: usize,
    /// Wall-clock training time.
    pub train_seconds: f64,
    /// Mean regression loss over the last epoch.
    pub final_l_p: f64,
    pub scoring: ScoringFitReport,
    pub eval: EvalReport,
}

/// Seed means of one variant.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub variant: Variant,
    pub seeds: usize,
    #[serde(rename = "AP")]
    pub ap: f64,
    #[serde(rename = "AP50")]
    pub ap50: f64,
    pub jitter: f64,
    pub miss: f64,
    pub inversion: f64,
    pub swap: f64,
    pub final_l_p: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AblationReport {
    pub rows: Vec<AblationRow>,
    pub runs: Vec<RunResult>,
}

impl AblationReport {
    pub fn row(&self, variant: Variant) -> Option<&AblationRow> {
        self.rows.iter().find(|r| r.variant == variant)
    }
}

/// Decode every image of `data` and collect predictions per image id.
pub fn predict_dataset(
    net: &NetworkConfig,
    params: &Params<f32>,
    data: &SynthDataset,
    cfg: &DecodeConfig,
    scoring: Option<&ScoringNet>,
) -> Result<Vec<ImagePredictions>, TrainError> {
    let poses = decode_batch(net, params, &data.images, &data.annotations.skeleton, cfg, scoring)?;
    Ok(data
        .annotations
        .images
        .iter()
        .zip(poses)
        .map(|(info, ps)| ImagePredictions { image_id: info.id, poses: ps.iter().map(PosePrediction::from).collect() })
        .collect())
}

/// Metrics of a model on a dataset, with the error taxonomy on request.
pub fn evaluate_model(
    net: &NetworkConfig,
    params: &Params<f32>,
    data: &SynthDataset,
    cfg: &DecodeConfig,
    scoring: Option<&ScoringNet>,
    errors: bool,
) -> Result<EvalReport, TrainError> {
    let preds = predict_dataset(net, params, data, cfg, scoring)?;
    let size = data.images.first().map_or(0, |t| t.shape()[2]);
    let ecfg = EvalConfig::for_image_size(size);
    Ok(if errors { evaluate_with_errors(&preds, &data.annotations, &ecfg)? } else { evaluate(&preds, &data.annotations, &ecfg)? })
}

fn run_dir(root: &Path, variant: Variant, seed: u64) -> PathBuf {
    root.join(format!("{}_s{seed}", variant.name()))
}

pub const RESULT_FILE: &str = "result.json";
pub const CONFIG_FILE: &str = "run_config.json";
pub const SCORING_DIR: &str = "scoring";

/// Train one variant and seed, fit its scoring net and evaluate on `val`.
/// With `dir`, finished results are reused and interrupted training resumes.
pub fn run_single(
    train_data: &TrainData,
    val: &SynthDataset,
    cfg: &AblationConfig,
    variant: Variant,
    seed: u64,
    dir: Option<&Path>,
) -> Result<RunResult, TrainError> {
    let mut tcfg = cfg.train.clone();
    tcfg.network.variant = variant;
    tcfg.seed = seed;
    let run_cfg = AblationConfig { variants: vec![variant], seeds: vec![seed], train: tcfg.clone(), ..cfg.clone() };
    let run_cfg_json = serde_json::to_string_pretty(&run_cfg).expect("config");
    if let Some(d) = dir {
        let same = std::fs::read_to_string(d.join(CONFIG_FILE)).is_ok_and(|c| c == run_cfg_json);
        if let (true, Ok(text)) = (same, std::fs::read_to_string(d.join(RESULT_FILE))) {
            if let Ok(r) = serde_json::from_str::<RunResult>(&text) {
                log::info!("reusing {}", d.display());
                return Ok(r);
            }
        }
    }
    let run = train(train_data, &tcfg, dir, true)?;
    let log = match dir {
        Some(d) => read_log(d.join(LOG_FILE))?,
        None => run.log.clone(),
    };
    let l_p = final_l_p(&log, steps_per_epoch(train_data.len(), tcfg.batch_size));
    let pairs = scoring_pairs(&tcfg.network, &run.params, train_data, &cfg.decode)?;
    let scfg = ScoringFitConfig { seed, ..cfg.scoring.clone() };
    let (scoring, fit) = fit_scoring_net(&pairs, &train_data.skeleton, &scfg)?;
    let eval = evaluate_model(&tcfg.network, &run.params, val, &cfg.decode, Some(&scoring), true)?;
    let result = RunResult { variant, seed, steps: run.steps, train_seconds: run.seconds, final_l_p: l_p, scoring: fit, eval };
    if let Some(d) = dir {
        scoring.save(d.join(SCORING_DIR))?;
        std::fs::write(d.join(CONFIG_FILE), &run_cfg_json)?;
        std::fs::write(d.join(RESULT_FILE), serde_json::to_string_pretty(&result).expect("result"))?;
    }
    log::info!(
        "{} seed {seed}: AP {:.2} AP50 {:.2} final l_p {:.4}",
        variant.name(),
        result.eval.ap,
        result.eval.ap50,
        l_p
    );
    Ok(result)
}

fn mean(v: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = v.fold((0.0, 0usize), |(s, n), x| (s + x, n + 1));
    s / n.max(1) as f64
}

pub fn summarize(runs: Vec<RunResult>, variants: &[Variant]) -> AblationReport {
    let rows = variants
        .iter()
        .map(|&v| {
            let rs: Vec<&RunResult> = runs.iter().filter(|r| r.variant == v).collect();
            let rate = |f: fn(&crate::eval::ErrorRates) -> f64| mean(rs.iter().filter_map(|r| r.eval.error_rates.as_ref()).map(f));
            AblationRow {
                variant: v,
                seeds: rs.len(),
                ap: mean(rs.iter().map(|r| r.eval.ap)),
                ap50: mean(rs.iter().map(|r| r.eval.ap50)),
                jitter: rate(|e| e.jitter),
                miss: rate(|e| e.miss),
                inversion: rate(|e| e.inversion),
                swap: rate(|e| e.swap),
                final_l_p: mean(rs.iter().map(|r| r.final_l_p)),
            }
        })
        .collect();
    AblationReport { rows, runs }
}

/// Every variant under every seed. With `out_dir`, each run lives in
/// `<variant>_s<seed>/` and is resumable.
pub fn run_ablation(
    train_data: &TrainData,
    val: &SynthDataset,
    cfg: &AblationConfig,
    out_dir: Option<&Path>,
) -> Result<AblationReport, TrainError> {
    if cfg.variants.is_empty() || cfg.seeds.is_empty() {
        return Err(TrainError::Config("ablation needs at least one variant and one seed".into()));
    }
    let mut runs = Vec::new();
    for &seed in &cfg.seeds {
        for &variant in &cfg.variants {
            let dir = out_dir.map(|d| run_dir(d, variant, seed));
            runs.push(run_single(train_data, val, cfg, variant, seed, dir.as_deref())?);
        }
    }
    Ok(summarize(runs, &cfg.variants))
}
