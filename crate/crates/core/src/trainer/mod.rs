//! Adam with a step schedule, seeded data pipeline, checkpoints, scoring-net
//! fitting and the four-variant ablation.

use std::collections::BTreeMap;
use std::io::{BufRead, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::losses::{total_loss, DEFAULT_LAMBDA};
use crate::network::{forward, init_params, NetworkConfig, NetworkError, Params, Variant};
use crate::pose::{Instance, Skeleton};
use crate::synth::{augment, generate_dataset, AugmentParams, SceneSpec, SynthDataset};
use crate::targets::{build_targets, DenseTargets, TargetConfig};
use crate::tensor::{Graph, Tensor, TensorError};

mod ablation;
mod scoring;

pub use ablation::{
    evaluate_model, predict_dataset, run_ablation, run_single, summarize, AblationConfig, AblationReport, AblationRow,
    RunResult,
};
pub use scoring::{
    candidate_target, fit_scoring_net, scoring_pairs, ScoringFitConfig, ScoringFitReport, ScoringPair, MIN_SCORING_PAIRS,
};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("non-finite loss at step {step}; last good checkpoint kept")]
    NonFinite { step: usize },
    #[error("only {got} scoring pairs (need at least {need}); dataset too small")]
    TooFewPairs { got: usize, need: usize },
    #[error("checkpoint: {0}")]
    Checkpoint(String),
    #[error(transparent)]
    Network(#[from] NetworkError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Decode(#[from] crate::decoder::DecodeError),
    #[error(transparent)]
    Eval(#[from] crate::eval::EvalError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub network: NetworkConfig,
    pub targets: TargetConfig,
    pub lambda: f64,
    pub base_lr: f64,
    /// Fractions of `total_epochs` at which the rate drops.
    pub milestones: Vec<f64>,
    pub lr_drop: f64,
    pub total_epochs: usize,
    pub batch_size: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    /// Global gradient-norm bound; 0 disables clipping.
    pub clip_norm: f64,
    pub weight_decay: f64,
    pub augment: bool,
    pub seed: u64,
    /// Stop early after this many steps.
    pub max_steps: Option<usize>,
}

/// Small widths for 64x64 mini7 scenes: seven branches of 8 channels
/// against a 57-channel baseline trunk.
pub fn desk_network(variant: Variant) -> NetworkConfig {
    NetworkConfig {
        variant,
        num_keypoints: 7,
        branch_width: 8,
        baseline_width: 57,
        heat_width: 32,
        backbone: vec![16, 32, 32, 32],
        output_stride: 4,
        groups: None,
    }
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            network: desk_network(Variant::Dekr),
            targets: TargetConfig::default(),
            lambda: DEFAULT_LAMBDA,
            base_lr: 1e-3,
            milestones: vec![9.0 / 14.0, 12.0 / 14.0],
            lr_drop: 0.1,
            total_epochs: 40,
            batch_size: 16,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            clip_norm: 5.0,
            weight_decay: 0.0,
            augment: true,
            seed: 0,
            max_steps: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        self.network.validate()?;
        let bad = |m: String| Err(TrainError::Config(m));
        if self.batch_size == 0 || self.total_epochs == 0 {
            return bad("batch_size and total_epochs must be positive".into());
        }
        if !(self.base_lr >= 0.0) || !(self.lr_drop > 0.0) {
            return bad("base_lr must be non-negative and lr_drop positive".into());
        }
        if self.milestones.iter().any(|m| !(*m > 0.0 && *m <= 1.0)) {
            return bad(format!("milestones {:?} must lie in (0, 1]", self.milestones));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.eps > 0.0) {
            return bad("adam betas must lie in [0, 1) and eps be positive".into());
        }
        Ok(())
    }

    /// First epoch of each phase after the first; never epoch 0.
    pub fn milestone_epochs(&self) -> Vec<usize> {
        // small slack so 9/14 * 140 lands on 90
        self.milestones.iter().map(|m| ((m * self.total_epochs as f64 + 1e-9).floor() as usize).max(1)).collect()
    }

    pub fn lr_at_epoch(&self, epoch: usize) -> f64 {
        let drops = self.milestone_epochs().iter().filter(|&&e| epoch >= e).count();
        // repeated products keep 1e-3 -> 1e-4 -> 1e-5 exact
        (0..drops).fold(self.base_lr, |lr, _| lr * self.lr_drop)
    }
}

/// Images with their instances, one entry per image.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub images: Vec<Tensor<f32>>,
    pub instances: Vec<Vec<Instance>>,
    pub skeleton: Skeleton,
    pub image_size: usize,
}

impl TrainData {
    pub fn from_dataset(ds: &SynthDataset) -> Self {
        Self {
            images: ds.images.clone(),
            instances: ds.annotations.per_image(),
            skeleton: ds.annotations.skeleton.clone(),
            image_size: ds.images.first().map(|t| t.shape()[1]).unwrap_or(0),
        }
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn subset(&self, range: std::ops::Range<usize>) -> Self {
        Self {
            images: self.images[range.clone()].to_vec(),
            instances: self.instances[range].to_vec(),
            skeleton: self.skeleton.clone(),
            image_size: self.image_size,
        }
    }
}

pub const DESK_TRAIN_IMAGES: usize = 2000;
pub const DESK_VAL_IMAGES: usize = 500;

/// Train and validation sets of the desk protocol; validation scenes come
/// from a disjoint generator seed.
pub fn desk_datasets(n_train: usize, n_val: usize, seed: u64) -> Result<(SynthDataset, SynthDataset), crate::synth::SynthError> {
    let spec = SceneSpec { seed, ..SceneSpec::default() };
    let train = generate_dataset(&spec, n_train)?;
    let val = generate_dataset(&SceneSpec { seed: seed.wrapping_add(VAL_SEED_OFFSET), ..spec }, n_val)?;
    Ok((train, val))
}

const VAL_SEED_OFFSET: u64 = 1_000_003;

/// Adam moments per parameter.
#[derive(Clone, Debug, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub t: u64,
    pub m: Params<f32>,
    pub v: Params<f32>,
}

impl Adam {
    pub fn new(params: &Params<f32>, beta1: f64, beta2: f64, eps: f64) -> Self {
        let zeros = Params {
            tensors: params.tensors.iter().map(|(k, t)| (k.clone(), Tensor::zeros(t.shape()))).collect(),
        };
        Self { beta1, beta2, eps, weight_decay: 0.0, t: 0, m: zeros.clone(), v: zeros }
    }

    /// One bias-corrected update.
    pub fn step(&mut self, params: &mut Params<f32>, grads: &BTreeMap<String, Tensor<f32>>, lr: f64) {
        self.t += 1;
        let c1 = 1.0 - self.beta1.powi(self.t as i32);
        let c2 = 1.0 - self.beta2.powi(self.t as i32);
        for (name, p) in params.tensors.iter_mut() {
            let Some(g) = grads.get(name) else { continue };
            let m = self.m.tensors.get_mut(name).expect("moment").data_mut();
            let v = self.v.tensors.get_mut(name).expect("moment").data_mut();
            for (((p, &g), m), v) in p.data_mut().iter_mut().zip(g.data()).zip(m.iter_mut()).zip(v.iter_mut()) {
                let g = g as f64 + self.weight_decay * *p as f64;
                let mn = self.beta1 * *m as f64 + (1.0 - self.beta1) * g;
                let vn = self.beta2 * *v as f64 + (1.0 - self.beta2) * g * g;
                *m = mn as f32;
                *v = vn as f32;
                let update = lr * (mn / c1) / ((vn / c2).sqrt() + self.eps);
                *p = (*p as f64 - update) as f32;
            }
        }
    }
}

/// Scale gradients in place so their global L2 norm is at most `max_norm`.
/// Returns the norm before clipping.
pub fn clip_grad_norm(grads: &mut BTreeMap<String, Tensor<f32>>, max_norm: f64) -> f64 {
    let norm = grads.values().flat_map(|t| t.data()).map(|&g| (g as f64).powi(2)).sum::<f64>().sqrt();
    if max_norm > 0.0 && norm > max_norm {
        let s = (max_norm / (norm + 1e-6)) as f32;
        for t in grads.values_mut() {
            for g in t.data_mut() {
                *g *= s;
            }
        }
    }
    norm
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    pub epoch: usize,
    pub lr: f64,
    pub l_p: f64,
    pub l_h: f64,
    pub total: f64,
}

/// Assemble one batch: shuffled image indices for the epoch, augmentation
/// drawn from a per-step stream.
pub fn make_batch(data: &TrainData, cfg: &TrainConfig, step: usize) -> (Tensor<f32>, DenseTargets) {
    let spe = steps_per_epoch(data.len(), cfg.batch_size);
    let (epoch, pos) = (step / spe, step % spe);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    rng.set_stream(1 + epoch as u64);
    order.shuffle(&mut rng);
    let mut aug_rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5eed_a0a0_5eed_a0a0);
    aug_rng.set_stream(step as u64);
    let size = data.image_size;
    let k = data.skeleton.num_keypoints();
    let mut pixels = Vec::with_capacity(cfg.batch_size * 3 * size * size);
    let mut targets = Vec::with_capacity(cfg.batch_size);
    for &i in &order[pos * cfg.batch_size..(pos + 1) * cfg.batch_size] {
        let (img, insts) = if cfg.augment {
            let p = AugmentParams::sample(&mut aug_rng, size);
            augment(&data.images[i], &data.instances[i], &data.skeleton, &p)
        } else {
            (data.images[i].clone(), data.instances[i].clone())
        };
        pixels.extend_from_slice(img.data());
        targets.push(build_targets(&insts, k, size, &cfg.targets));
    }
    let batch = Tensor::new(&[cfg.batch_size, 3, size, size], pixels).expect("batch shape");
    (batch, DenseTargets::stack(&targets))
}

pub fn steps_per_epoch(n_images: usize, batch_size: usize) -> usize {
    (n_images / batch_size).max(1)
}

/// Parameters, optimizer state and position in the schedule.
#[derive(Clone, Debug, PartialEq)]
pub struct Trainer {
    pub cfg: TrainConfig,
    pub params: Params<f32>,
    pub adam: Adam,
    pub step: usize,
}

#[derive(Serialize, Deserialize)]
struct Manifest {
    config: TrainConfig,
    step: usize,
    epoch: usize,
    optimizer: OptimizerMeta,
    params: String,
}

#[derive(Serialize, Deserialize)]
struct OptimizerMeta {
    kind: String,
    t: u64,
    beta1: f64,
    beta2: f64,
    eps: f64,
    first_moment: String,
    second_moment: String,
}

impl Trainer {
    pub fn new(cfg: &TrainConfig) -> Result<Self, TrainError> {
        cfg.validate()?;
        let params = init_params(&cfg.network, cfg.seed)?;
        let mut adam = Adam::new(&params, cfg.beta1, cfg.beta2, cfg.eps);
        adam.weight_decay = cfg.weight_decay;
        Ok(Self { cfg: cfg.clone(), params, adam, step: 0 })
    }

    /// Forward, backward and one Adam update on the batch for the current
    /// step.
    pub fn train_step(&mut self, data: &TrainData) -> Result<LogEntry, TrainError> {
        if data.len() < self.cfg.batch_size {
            return Err(TrainError::Config(format!(
                "{} images cannot fill a batch of {}",
                data.len(),
                self.cfg.batch_size
            )));
        }
        let spe = steps_per_epoch(data.len(), self.cfg.batch_size);
        let epoch = self.step / spe;
        let lr = self.cfg.lr_at_epoch(epoch);
        let (batch, targets) = make_batch(data, &self.cfg, self.step);

        let step = self.step;
        let non_finite = |e: TensorError| match e {
            TensorError::NonFinite { .. } => TrainError::NonFinite { step },
            e => TrainError::Tensor(e),
        };
        let mut g = Graph::new();
        let vars = self.params.bind(&mut g, true);
        let x = g.constant(batch);
        let out = forward(&mut g, &self.cfg.network, &vars, x).map_err(|e| match e {
            NetworkError::Tensor(t) => non_finite(t),
            e => TrainError::Network(e),
        })?;
        let (loss, report) = total_loss(&mut g, &out, &targets, self.cfg.lambda).map_err(non_finite)?;
        if !report.total.is_finite() {
            return Err(TrainError::NonFinite { step });
        }
        g.backward(loss.total).map_err(non_finite)?;
        let mut grads: BTreeMap<String, Tensor<f32>> = BTreeMap::new();
        for (name, &v) in &vars {
            let gr = g.grad(v).unwrap_or_else(|| Tensor::zeros(self.params.get(name).shape()));
            grads.insert(name.clone(), gr);
        }
        let norm = clip_grad_norm(&mut grads, self.cfg.clip_norm);
        if !norm.is_finite() {
            return Err(TrainError::NonFinite { step: self.step });
        }
        self.adam.step(&mut self.params, &grads, lr);
        let entry = LogEntry { step: self.step, epoch, lr, l_p: report.l_p, l_h: report.l_h, total: report.total };
        self.step += 1;
        Ok(entry)
    }

    /// Manifest plus parameter and moment dumps, replacing `dir` atomically
    /// enough that an interrupted write leaves the previous checkpoint.
    pub fn save(&self, dir: impl AsRef<Path>, epoch: usize) -> Result<(), TrainError> {
        let dir = dir.as_ref();
        let tmp = dir.with_extension("tmp");
        if tmp.exists() {
            std::fs::remove_dir_all(&tmp)?;
        }
        std::fs::create_dir_all(&tmp)?;
        self.params.save(tmp.join("params"))?;
        self.adam.m.save(tmp.join("adam_m"))?;
        self.adam.v.save(tmp.join("adam_v"))?;
        let manifest = Manifest {
            config: self.cfg.clone(),
            step: self.step,
            epoch,
            optimizer: OptimizerMeta {
                kind: "adam".into(),
                t: self.adam.t,
                beta1: self.adam.beta1,
                beta2: self.adam.beta2,
                eps: self.adam.eps,
                first_moment: "adam_m".into(),
                second_moment: "adam_v".into(),
            },
            params: "params".into(),
        };
        std::fs::write(tmp.join("manifest.json"), serde_json::to_string_pretty(&manifest).expect("manifest"))?;
        if dir.exists() {
            std::fs::remove_dir_all(dir)?;
        }
        std::fs::rename(&tmp, dir)?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, TrainError> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("manifest.json"))?;
        let m: Manifest = serde_json::from_str(&text).map_err(|e| TrainError::Checkpoint(e.to_string()))?;
        let params = Params::<f32>::load(dir.join(&m.params))?;
        params.check(&m.config.network)?;
        let adam = Adam {
            beta1: m.optimizer.beta1,
            beta2: m.optimizer.beta2,
            eps: m.optimizer.eps,
            weight_decay: m.config.weight_decay,
            t: m.optimizer.t,
            m: Params::load(dir.join(&m.optimizer.first_moment))?,
            v: Params::load(dir.join(&m.optimizer.second_moment))?,
        };
        Ok(Self { cfg: m.config, params, adam, step: m.step })
    }
}

/// Network config and parameters of a checkpoint directory.
pub fn load_checkpoint(dir: impl AsRef<Path>) -> Result<(NetworkConfig, Params<f32>), TrainError> {
    let t = Trainer::load(dir)?;
    Ok((t.cfg.network, t.params))
}

#[derive(Clone, Debug)]
pub struct TrainRun {
    pub params: Params<f32>,
    /// Entries of this invocation (resumed runs start mid-way).
    pub log: Vec<LogEntry>,
    pub steps: usize,
    /// Wall-clock training time, summed over resumed invocations.
    pub seconds: f64,
}

pub const TIMING_FILE: &str = "timing.json";

pub const CHECKPOINT_DIR: &str = "checkpoint";
pub const LOG_FILE: &str = "log.jsonl";

pub fn total_steps(cfg: &TrainConfig, n_images: usize) -> usize {
    let full = cfg.total_epochs * steps_per_epoch(n_images, cfg.batch_size);
    cfg.max_steps.map_or(full, |m| m.min(full))
}

/// Train to completion. With `out_dir`, a JSON-lines log and a checkpoint
/// per epoch are written there; `resume` continues from that checkpoint.
pub fn train(data: &TrainData, cfg: &TrainConfig, out_dir: Option<&Path>, resume: bool) -> Result<TrainRun, TrainError> {
    cfg.validate()?;
    if data.skeleton.num_keypoints() != cfg.network.num_keypoints {
        return Err(TrainError::Config(format!(
            "dataset has {} keypoints, network {}",
            data.skeleton.num_keypoints(),
            cfg.network.num_keypoints
        )));
    }
    let ckpt: Option<PathBuf> = out_dir.map(|d| d.join(CHECKPOINT_DIR));
    let mut trainer = match &ckpt {
        Some(c) if resume && c.join("manifest.json").exists() => {
            let t = Trainer::load(c)?;
            if t.cfg.network != cfg.network || t.cfg.seed != cfg.seed {
                return Err(TrainError::Checkpoint("checkpoint was trained with a different network or seed".into()));
            }
            Trainer { cfg: cfg.clone(), ..t }
        }
        _ => Trainer::new(cfg)?,
    };
    let mut log_file = match out_dir {
        Some(d) => {
            std::fs::create_dir_all(d)?;
            let f = std::fs::OpenOptions::new()
                .create(true)
                .write(true)
                .append(trainer.step > 0)
                .truncate(trainer.step == 0)
                .open(d.join(LOG_FILE))?;
            Some(std::io::BufWriter::new(f))
        }
        None => None,
    };
    let spe = steps_per_epoch(data.len(), cfg.batch_size);
    let total = total_steps(cfg, data.len());
    let earlier = match out_dir {
        Some(d) if trainer.step > 0 => std::fs::read_to_string(d.join(TIMING_FILE))
            .ok()
            .and_then(|t| serde_json::from_str::<serde_json::Value>(&t).ok())
            .and_then(|v| v["seconds"].as_f64())
            .unwrap_or(0.0),
        _ => 0.0,
    };
    let started = std::time::Instant::now();
    let mut log = Vec::new();
    while trainer.step < total {
        let entry = trainer.train_step(data)?;
        if let Some(f) = log_file.as_mut() {
            serde_json::to_writer(&mut *f, &entry).expect("log entry");
            f.write_all(b"\n")?;
        }
        log.push(entry);
        if trainer.step % spe == 0 || trainer.step == total {
            if let (Some(c), Some(f)) = (&ckpt, log_file.as_mut()) {
                f.flush()?;
                trainer.save(c, trainer.step / spe)?;
                let seconds = earlier + started.elapsed().as_secs_f64();
                std::fs::write(out_dir.expect("checkpoint implies out_dir").join(TIMING_FILE), serde_json::json!({ "seconds": seconds }).to_string())?;
            }
            log::info!(
                "epoch {} step {} lr {:.0e} total {:.5} l_p {:.4} l_h {:.6}",
                entry.epoch,
                trainer.step,
                entry.lr,
                entry.total,
                entry.l_p,
                entry.l_h
            );
        }
    }
    if let Some(f) = log_file.as_mut() {
        f.flush()?;
    }
    Ok(TrainRun { params: trainer.params, log, steps: trainer.step, seconds: earlier + started.elapsed().as_secs_f64() })
}

pub fn read_log(path: impl AsRef<Path>) -> Result<Vec<LogEntry>, TrainError> {
    let f = std::io::BufReader::new(std::fs::File::open(path)?);
    let mut out = Vec::new();
    for line in f.lines() {
        let line = line?;
        if !line.trim().is_empty() {
            out.push(serde_json::from_str(&line).map_err(|e| TrainError::Checkpoint(e.to_string()))?);
        }
    }
    Ok(out)
}

/// Mean regression loss over the last `n` entries.
pub fn final_l_p(log: &[LogEntry], n: usize) -> f64 {
    let tail = &log[log.len().saturating_sub(n)..];
    tail.iter().map(|e| e.l_p).sum::<f64>() / tail.len().max(1) as f64
}
