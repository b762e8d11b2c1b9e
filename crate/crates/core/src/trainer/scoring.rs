//! Fit the pose-scoring net on decoded training candidates.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{Adam, TrainData, TrainError};
use crate::decoder::{decode_candidates, feature_dim, features, infer_maps, DecodeConfig, ScoringNet};
use crate::eval::oks;
use crate::network::{NetworkConfig, Params};
use crate::pose::{CandidatePose, Instance, Skeleton};
use crate::tensor::{Graph, Tensor};

pub const MIN_SCORING_PAIRS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringPair {
    pub features: Vec<f64>,
    /// Best OKS against any labelled instance of the image, 0 without one.
    pub target: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScoringFitConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    /// Every n-th pair is held out for validation.
    pub holdout_every: usize,
    pub seed: u64,
}

impl Default for ScoringFitConfig {
    fn default() -> Self {
        Self { epochs: 60, batch_size: 64, lr: 1e-3, holdout_every: 5, seed: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoringFitReport {
    pub train_pairs: usize,
    pub heldout_pairs: usize,
    pub heldout_mse: f64,
    /// Held-out error of predicting the training-set mean everywhere.
    pub constant_mse: f64,
}

/// Training target of one candidate.
pub fn candidate_target(pose: &CandidatePose, gts: &[Instance], skeleton: &Skeleton) -> f64 {
    gts.iter()
        .filter(|g| g.num_labelled() > 0)
        .filter_map(|g| oks(&pose.keypoints, g, &skeleton.oks_k).ok())
        .fold(0.0, f64::max)
}

/// Candidates of the pre-scoring pipeline on every training image, paired
/// with their best OKS.
pub fn scoring_pairs(
    net: &NetworkConfig,
    params: &Params<f32>,
    data: &TrainData,
    cfg: &DecodeConfig,
) -> Result<Vec<ScoringPair>, TrainError> {
    let stride = net.output_stride;
    let mut pairs = Vec::new();
    for (chunk, insts) in data.images.chunks(64).zip(data.instances.chunks(64)) {
        let maps = infer_maps(net, params, chunk, &data.skeleton, cfg)?;
        for ((im, per_scale), gts) in chunk.iter().zip(&maps).zip(insts) {
            let (h, w) = (im.shape()[1] / stride, im.shape()[2] / stride);
            let (_, cands) = decode_candidates(per_scale, h, w, stride, &data.skeleton, cfg);
            pairs.extend(cands.iter().map(|c| ScoringPair {
                features: features(c, &data.skeleton),
                target: candidate_target(c, gts, &data.skeleton),
            }));
        }
    }
    Ok(pairs)
}

fn mse(net: &ScoringNet, pairs: &[&ScoringPair]) -> f64 {
    pairs.iter().map(|p| (net.predict(&p.features) - p.target).powi(2)).sum::<f64>() / pairs.len().max(1) as f64
}

/// Regress `sigmoid(net(features))` onto the targets with squared error.
pub fn fit_scoring_net(
    pairs: &[ScoringPair],
    skeleton: &Skeleton,
    cfg: &ScoringFitConfig,
) -> Result<(ScoringNet, ScoringFitReport), TrainError> {
    if pairs.len() < MIN_SCORING_PAIRS {
        return Err(TrainError::TooFewPairs { got: pairs.len(), need: MIN_SCORING_PAIRS });
    }
    if cfg.batch_size == 0 || cfg.holdout_every < 2 {
        return Err(TrainError::Config("scoring fit needs batch_size > 0 and holdout_every >= 2".into()));
    }
    let dim = feature_dim(skeleton);
    if let Some(p) = pairs.iter().find(|p| p.features.len() != dim) {
        return Err(TrainError::Config(format!("pair has {} features, skeleton needs {dim}", p.features.len())));
    }
    let (mut train, mut held) = (Vec::new(), Vec::new());
    for (i, p) in pairs.iter().enumerate() {
        if i % cfg.holdout_every == cfg.holdout_every - 1 {
            held.push(p);
        } else {
            train.push(p);
        }
    }
    let mut net = ScoringNet::new(dim, cfg.seed);
    let mut adam = Adam::new(&net.params, 0.9, 0.999, 1e-8);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train.len()).collect();
    for _ in 0..cfg.epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x: Vec<f32> = batch.iter().flat_map(|&i| train[i].features.iter().map(|&v| v as f32)).collect();
            let t: Vec<f32> = batch.iter().map(|&i| train[i].target as f32).collect();
            let mut g = Graph::<f32>::new();
            let vars = net.params.bind(&mut g, true);
            let xv = g.constant(Tensor::new(&[batch.len(), dim], x)?);
            let tv = g.constant(Tensor::new(&[batch.len(), 1], t)?);
            let logits = ScoringNet::forward(&mut g, &vars, xv)?;
            let p = g.sigmoid(logits)?;
            let d = g.sub(p, tv)?;
            let sq = g.mul(d, d)?;
            let loss = g.mean(sq)?;
            g.backward(loss)?;
            let grads = vars
                .iter()
                .map(|(n, &v)| (n.clone(), g.grad(v).unwrap_or_else(|| Tensor::zeros(net.params.get(n).shape()))))
                .collect();
            adam.step(&mut net.params, &grads, cfg.lr);
        }
    }
    let mean = train.iter().map(|p| p.target).sum::<f64>() / train.len() as f64;
    let constant_mse = held.iter().map(|p| (p.target - mean).powi(2)).sum::<f64>() / held.len() as f64;
    let report = ScoringFitReport {
        train_pairs: train.len(),
        heldout_pairs: held.len(),
        heldout_mse: mse(&net, &held),
        constant_mse,
    };
    Ok((net, report))
}
