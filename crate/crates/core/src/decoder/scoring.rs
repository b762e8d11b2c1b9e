//! Small fully connected net that predicts a pose's OKS from its shape.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::network::{NetworkError, Params};
use crate::pose::{CandidatePose, Skeleton};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

pub const SCORING_HIDDEN: usize = 128;

const LAYERS: [&str; 3] = ["scoring.fc1", "scoring.fc2", "scoring.fc3"];

/// `3E + K -> 128 -> 128 -> 1`, ReLU between layers, linear output.
#[derive(Clone, Debug, PartialEq)]
pub struct ScoringNet {
    pub params: Params<f32>,
}

pub fn feature_dim(skeleton: &Skeleton) -> usize {
    3 * skeleton.num_sticks() + skeleton.num_keypoints()
}

/// Stick lengths, then `p_i - p_j` per stick, then keypoint heats, with no
/// normalisation.
pub fn raw_features(keypoints: &[[f64; 2]], heats: &[f64], skeleton: &Skeleton) -> Vec<f64> {
    let mut f = Vec::with_capacity(feature_dim(skeleton));
    for &(i, j) in &skeleton.sticks {
        let (dx, dy) = (keypoints[i][0] - keypoints[j][0], keypoints[i][1] - keypoints[j][1]);
        f.push((dx * dx + dy * dy).sqrt());
    }
    for &(i, j) in &skeleton.sticks {
        f.push(keypoints[i][0] - keypoints[j][0]);
        f.push(keypoints[i][1] - keypoints[j][1]);
    }
    f.extend_from_slice(heats);
    f
}

/// [`raw_features`] with lengths and offsets divided by the square root of
/// the keypoint-extent area.
pub fn features(pose: &CandidatePose, skeleton: &Skeleton) -> Vec<f64> {
    let mut f = raw_features(&pose.keypoints, &pose.keypoint_heats, skeleton);
    let norm = pose.extent_area().max(1.0).sqrt();
    for v in &mut f[..3 * skeleton.num_sticks()] {
        *v /= norm;
    }
    f
}

pub fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

impl ScoringNet {
    pub fn shapes(input_dim: usize) -> Vec<(String, Vec<usize>)> {
        let dims = [(SCORING_HIDDEN, input_dim), (SCORING_HIDDEN, SCORING_HIDDEN), (1, SCORING_HIDDEN)];
        LAYERS
            .iter()
            .zip(dims)
            .flat_map(|(l, (o, i))| [(format!("{l}.weight"), vec![o, i]), (format!("{l}.bias"), vec![o])])
            .collect()
    }

    /// Kaiming-normal hidden layers, small output layer, zero biases.
    pub fn new(input_dim: usize, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut tensors = BTreeMap::new();
        for (name, shape) in Self::shapes(input_dim) {
            let t = if name.ends_with(".bias") {
                Tensor::zeros(&shape)
            } else {
                let std = if name.starts_with("scoring.fc3") { 0.01 } else { (2.0 / shape[1] as f64).sqrt() };
                let normal = Normal::new(0.0, std).unwrap();
                Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
            };
            tensors.insert(name, t);
        }
        Self { params: Params { tensors } }
    }

    pub fn zeros(input_dim: usize) -> Self {
        let tensors = Self::shapes(input_dim).into_iter().map(|(n, s)| (n, Tensor::zeros(&s))).collect();
        Self { params: Params { tensors } }
    }

    pub fn input_dim(&self) -> usize {
        self.params.get("scoring.fc1.weight").shape()[1]
    }

    /// Logits `[N, 1]` for features `x [N, D]`; `vars` from [`Params::bind`].
    pub fn forward<T: Scalar>(g: &mut Graph<T>, vars: &BTreeMap<String, Var>, x: Var) -> Result<Var, TensorError> {
        let mut h = x;
        for (i, layer) in LAYERS.iter().enumerate() {
            let w = vars[&format!("{layer}.weight")];
            let b = vars[&format!("{layer}.bias")];
            h = g.linear(h, w, b)?;
            if i + 1 < LAYERS.len() {
                h = g.relu(h)?;
            }
        }
        Ok(h)
    }

    /// Raw linear output for one feature vector.
    pub fn logit(&self, features: &[f64]) -> f64 {
        let mut h: Vec<f64> = features.to_vec();
        for (i, layer) in LAYERS.iter().enumerate() {
            let w = self.params.get(&format!("{layer}.weight"));
            let b = self.params.get(&format!("{layer}.bias")).data();
            let (o, n) = (w.shape()[0], w.shape()[1]);
            let mut out = vec![0.0f64; o];
            for r in 0..o {
                let row = &w.data()[r * n..(r + 1) * n];
                let mut acc = b[r] as f64;
                for (a, &x) in row.iter().zip(&h) {
                    acc += *a as f64 * x;
                }
                out[r] = if i + 1 < LAYERS.len() { acc.max(0.0) } else { acc };
            }
            h = out;
        }
        h[0]
    }

    /// Predicted OKS in `(0, 1)`.
    pub fn predict(&self, features: &[f64]) -> f64 {
        sigmoid(self.logit(features))
    }

    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), NetworkError> {
        self.params.save(dir)
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let params = Params::<f32>::load(dir)?;
        let w = params.tensors.get("scoring.fc1.weight").ok_or_else(|| NetworkError::Param {
            name: "scoring.fc1.weight".into(),
            detail: "missing".into(),
        })?;
        let expected = Self::shapes(w.shape().get(1).copied().unwrap_or(0));
        for (name, shape) in &expected {
            match params.tensors.get(name) {
                Some(t) if t.shape() == shape.as_slice() => {}
                _ => return Err(NetworkError::Param { name: name.clone(), detail: format!("expected shape {shape:?}") }),
            }
        }
        Ok(Self { params })
    }
}
