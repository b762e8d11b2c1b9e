//! Backbone, heatmap head and the four regression-head variants.

use std::collections::BTreeMap;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::adaptive::{adaptive_conv, affine_predictor_init, predict_affine};
use crate::tensor::{Graph, Scalar, Tensor, TensorError, Var};

mod complexity;
pub use complexity::{conv_flops, count_params_flops, sampling_flops, Complexity};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Variant {
    Baseline,
    Aa,
    Sr,
    Dekr,
}

impl Variant {
    pub const ALL: [Variant; 4] = [Variant::Baseline, Variant::Aa, Variant::Sr, Variant::Dekr];

    pub fn adaptive(self) -> bool {
        matches!(self, Variant::Aa | Variant::Dekr)
    }

    pub fn separate(self) -> bool {
        matches!(self, Variant::Sr | Variant::Dekr)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::Aa => "aa",
            Variant::Sr => "sr",
            Variant::Dekr => "dekr",
        }
    }
}

impl std::str::FromStr for Variant {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == s)
            .ok_or_else(|| format!("unknown variant {s:?} (expected baseline, aa, sr or dekr)"))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct NetworkConfig {
    pub variant: Variant,
    pub num_keypoints: usize,
    /// Channels per regression branch (sr/dekr).
    pub branch_width: usize,
    /// Regression trunk width of the single-branch variants.
    pub baseline_width: usize,
    pub heat_width: usize,
    /// Stage widths: two stride-2 stems, then one residual block per entry.
    pub backbone: Vec<usize>,
    pub output_stride: usize,
    /// Keypoints handled by each branch; `None` means one branch per keypoint.
    pub groups: Option<Vec<Vec<usize>>>,
}

impl Default for NetworkConfig {
    fn default() -> Self {
        Self {
            variant: Variant::Dekr,
            num_keypoints: 17,
            branch_width: 15,
            baseline_width: 256,
            heat_width: 32,
            backbone: vec![32, 64, 64, 64],
            output_stride: 4,
            groups: None,
        }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum NetworkError {
    #[error("invalid network config: {0}")]
    Config(String),
    #[error("parameter {name}: {detail}")]
    Param { name: String, detail: String },
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error("i/o: {0}")]
    Io(#[from] std::io::Error),
}

impl NetworkConfig {
    pub fn validate(&self) -> Result<(), NetworkError> {
        let bad = |m: &str| Err(NetworkError::Config(m.to_string()));
        if self.num_keypoints == 0 {
            return bad("num_keypoints must be positive");
        }
        if self.output_stride != 4 {
            return bad("output_stride must be 4 (two stride-2 stems)");
        }
        if self.backbone.len() < 2 || self.backbone.contains(&0) {
            return bad("backbone needs at least two positive stage widths");
        }
        if self.branch_width == 0 || self.baseline_width == 0 || self.heat_width == 0 {
            return bad("widths must be positive");
        }
        if let Some(groups) = &self.groups {
            let mut seen = vec![false; self.num_keypoints];
            for g in groups {
                if g.is_empty() {
                    return bad("groups must be non-empty");
                }
                for &k in g {
                    if k >= self.num_keypoints || seen[k] {
                        return bad("groups must partition the keypoints");
                    }
                    seen[k] = true;
                }
            }
            if seen.contains(&false) {
                return bad("groups must cover every keypoint");
            }
        }
        Ok(())
    }

    /// Keypoint partition used by the separate-regression variants.
    pub fn branch_groups(&self) -> Vec<Vec<usize>> {
        self.groups.clone().unwrap_or_else(|| (0..self.num_keypoints).map(|k| vec![k]).collect())
    }

    /// Width of the 1x1 regression trunk.
    pub fn trunk_width(&self) -> usize {
        if self.variant.separate() {
            self.branch_groups().len() * self.branch_width
        } else {
            self.baseline_width
        }
    }

    pub fn feature_width(&self) -> usize {
        *self.backbone.last().unwrap()
    }
}

/// Shape of every named parameter, in a stable order.
pub fn param_shapes(cfg: &NetworkConfig) -> Vec<(String, Vec<usize>)> {
    let mut out = Vec::new();
    let mut conv = |name: String, o: usize, c: usize, k: usize| {
        out.push((format!("{name}.weight"), vec![o, c, k, k]));
        out.push((format!("{name}.bias"), vec![o]));
    };
    let b = &cfg.backbone;
    conv("backbone.stem1".into(), b[0], 3, 3);
    conv("backbone.stem2".into(), b[1], b[0], 3);
    for i in 2..b.len() {
        if b[i] != b[i - 1] {
            conv(format!("backbone.stage{i}.proj"), b[i], b[i - 1], 1);
        }
        conv(format!("backbone.stage{i}.conv1"), b[i], b[i], 3);
        conv(format!("backbone.stage{i}.conv2"), b[i], b[i], 3);
    }
    let x = cfg.feature_width();
    let (k, hw) = (cfg.num_keypoints, cfg.heat_width);
    conv("heat.conv1".into(), hw, x, 3);
    conv("heat.conv2".into(), hw, hw, 3);
    conv("heat.out".into(), k + 1, hw, 1);
    let trunk = cfg.trunk_width();
    conv("reg.trunk".into(), trunk, x, 1);
    let adaptive = cfg.variant.adaptive();
    let mut branch = |prefix: String, width: usize, outputs: usize| {
        for c in ["conv1", "conv2"] {
            if adaptive {
                conv(format!("{prefix}.{c}.affine"), 6, width, 3);
            }
            conv(format!("{prefix}.{c}"), width, width, 3);
        }
        conv(format!("{prefix}.out"), outputs, width, 1);
    };
    if cfg.variant.separate() {
        for (i, g) in cfg.branch_groups().iter().enumerate() {
            branch(format!("reg.branch{i:02}"), cfg.branch_width, 2 * g.len());
        }
    } else {
        branch("reg.single".into(), trunk, 2 * k);
    }
    out
}

/// Named parameters.
#[derive(Clone, Debug, PartialEq)]
pub struct Params<T: Scalar> {
    pub tensors: BTreeMap<String, Tensor<T>>,
}

/// Deterministic per-name stream so parameters shared between variants get
/// identical initial values.
fn name_stream(name: &str) -> u64 {
    // FNV-1a
    let mut h: u64 = 0xcbf29ce484222325;
    for b in name.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x100000001b3);
    }
    h
}

/// Kaiming-normal convolutions with zero bias; small output layers; affine
/// predictors at the identity.
pub fn init_params(cfg: &NetworkConfig, seed: u64) -> Result<Params<f32>, NetworkError> {
    cfg.validate()?;
    let mut tensors = BTreeMap::new();
    for (name, shape) in param_shapes(cfg) {
        let base = name.rsplit_once('.').map(|(b, _)| b).unwrap_or(&name);
        let t = if base.ends_with(".affine") {
            let (w, b) = affine_predictor_init::<f32>(shape.get(1).copied().unwrap_or(0));
            if name.ends_with(".weight") { w } else { b }
        } else if name.ends_with(".bias") {
            let fill = if base == "heat.out" { -2.0 } else { 0.0 };
            Tensor::full(&shape, fill)
        } else {
            let fan_in: usize = shape[1..].iter().product();
            let std = if base.ends_with(".out") {
                0.01
            } else {
                (2.0 / fan_in as f64).sqrt()
            };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            rng.set_stream(name_stream(&name));
            let normal = Normal::new(0.0, std).unwrap();
            Tensor::from_fn(&shape, |_| normal.sample(&mut rng) as f32)
        };
        tensors.insert(name, t);
    }
    Ok(Params { tensors })
}

impl<T: Scalar> Params<T> {
    pub fn get(&self, name: &str) -> &Tensor<T> {
        &self.tensors[name]
    }

    pub fn num_params(&self) -> usize {
        self.tensors.values().map(|t| t.len()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> Params<U> {
        Params {
            tensors: self.tensors.iter().map(|(k, v)| (k.clone(), v.cast())).collect(),
        }
    }

    /// Check names and shapes against `cfg`.
    pub fn check(&self, cfg: &NetworkConfig) -> Result<(), NetworkError> {
        let shapes = param_shapes(cfg);
        for (name, shape) in &shapes {
            match self.tensors.get(name) {
                None => return Err(NetworkError::Param { name: name.clone(), detail: "missing".into() }),
                Some(t) if t.shape() != shape.as_slice() => {
                    return Err(NetworkError::Param {
                        name: name.clone(),
                        detail: format!("shape {:?}, expected {shape:?}", t.shape()),
                    })
                }
                _ => {}
            }
        }
        if self.tensors.len() != shapes.len() {
            let extra = self.tensors.keys().find(|k| !shapes.iter().any(|(n, _)| n == *k)).unwrap();
            return Err(NetworkError::Param { name: extra.clone(), detail: "not used by this config".into() });
        }
        Ok(())
    }

    /// Record every parameter in `g`, as leaves when `trainable`.
    pub fn bind(&self, g: &mut Graph<T>, trainable: bool) -> BTreeMap<String, Var> {
        self.tensors
            .iter()
            .map(|(k, t)| (k.clone(), if trainable { g.leaf(t.clone()) } else { g.constant(t.clone()) }))
            .collect()
    }

    /// One DKTN file per parameter plus `params.json` listing them.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<(), NetworkError> {
        let dir = dir.as_ref();
        std::fs::create_dir_all(dir)?;
        let mut files = BTreeMap::new();
        for (name, t) in &self.tensors {
            let file = format!("{name}.dktn");
            t.save(dir.join(&file))?;
            files.insert(name.clone(), file);
        }
        std::fs::write(dir.join("params.json"), serde_json::to_string_pretty(&files).unwrap())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self, NetworkError> {
        let dir = dir.as_ref();
        let text = std::fs::read_to_string(dir.join("params.json"))?;
        let files: BTreeMap<String, String> = serde_json::from_str(&text)
            .map_err(|e| NetworkError::Tensor(TensorError::Format(e.to_string())))?;
        let mut tensors = BTreeMap::new();
        for (name, file) in files {
            tensors.insert(name, Tensor::load(dir.join(file))?);
        }
        Ok(Self { tensors })
    }
}

/// Graph handles of a forward pass.
#[derive(Clone, Copy, Debug)]
pub struct NetworkOutput {
    /// `[N, K, Ho, Wo]`, sigmoid.
    pub heatmaps: Var,
    /// `[N, 1, Ho, Wo]`, sigmoid.
    pub center: Var,
    /// `[N, 2K, Ho, Wo]`, `(dx, dy)` per keypoint.
    pub offsets: Var,
}

/// Concrete forward results.
#[derive(Clone, Debug, PartialEq)]
pub struct Prediction<T: Scalar> {
    pub heatmaps: Tensor<T>,
    pub center: Tensor<T>,
    pub offsets: Tensor<T>,
}

struct Ctx<'a, T: Scalar> {
    g: &'a mut Graph<T>,
    p: &'a BTreeMap<String, Var>,
}

impl<T: Scalar> Ctx<'_, T> {
    fn conv(&mut self, name: &str, x: Var, stride: usize) -> Result<Var, NetworkError> {
        let (w, b) = self.wb(name)?;
        let pad = self.g.shape(w)[2] / 2;
        Ok(self.g.conv2d(x, w, b, stride, pad)?)
    }

    fn wb(&self, name: &str) -> Result<(Var, Var), NetworkError> {
        let get = |s: &str| {
            let key = format!("{name}.{s}");
            self.p.get(&key).copied().ok_or(NetworkError::Param { name: key, detail: "missing".into() })
        };
        Ok((get("weight")?, get("bias")?))
    }

    fn conv_relu(&mut self, name: &str, x: Var, stride: usize) -> Result<Var, NetworkError> {
        let y = self.conv(name, x, stride)?;
        Ok(self.g.relu(y)?)
    }

    /// 3x3 conv, adaptive when requested, followed by ReLU.
    fn branch_conv(&mut self, name: &str, x: Var, adaptive: bool) -> Result<Var, NetworkError> {
        let y = if adaptive {
            let (aw, ab) = self.wb(&format!("{name}.affine"))?;
            let field = predict_affine(self.g, x, aw, ab)?;
            let (w, b) = self.wb(name)?;
            adaptive_conv(self.g, x, w, b, field)?
        } else {
            self.conv(name, x, 1)?
        };
        Ok(self.g.relu(y)?)
    }

    fn branch(&mut self, prefix: &str, x: Var, adaptive: bool) -> Result<Var, NetworkError> {
        let h = self.branch_conv(&format!("{prefix}.conv1"), x, adaptive)?;
        let h = self.branch_conv(&format!("{prefix}.conv2"), h, adaptive)?;
        self.conv(&format!("{prefix}.out"), h, 1)
    }
}

/// Forward pass over `image [N, 3, H, W]` with parameters bound by
/// [`Params::bind`].
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    cfg: &NetworkConfig,
    params: &BTreeMap<String, Var>,
    image: Var,
) -> Result<NetworkOutput, NetworkError> {
    let s = g.shape(image).to_vec();
    if s.len() != 4 || s[1] != 3 {
        return Err(NetworkError::Config(format!("image must be [N,3,H,W], got {s:?}")));
    }
    if s[2] % cfg.output_stride != 0 || s[3] % cfg.output_stride != 0 {
        return Err(NetworkError::Config(format!(
            "image size {}x{} not divisible by output stride {}",
            s[2], s[3], cfg.output_stride
        )));
    }
    let mut c = Ctx { g, p: params };
    let b = &cfg.backbone;
    let mut x = c.conv_relu("backbone.stem1", image, 2)?;
    x = c.conv_relu("backbone.stem2", x, 2)?;
    for i in 2..b.len() {
        let skip = if b[i] != b[i - 1] { c.conv(&format!("backbone.stage{i}.proj"), x, 1)? } else { x };
        let h = c.conv_relu(&format!("backbone.stage{i}.conv1"), x, 1)?;
        let h = c.conv(&format!("backbone.stage{i}.conv2"), h, 1)?;
        let sum = c.g.add(h, skip)?;
        x = c.g.relu(sum)?;
    }

    let h = c.conv_relu("heat.conv1", x, 1)?;
    let h = c.conv_relu("heat.conv2", h, 1)?;
    let h = c.conv("heat.out", h, 1)?;
    let h = c.g.sigmoid(h)?;
    let k = cfg.num_keypoints;
    let heat = c.g.split_channels(h, &[k, 1])?;

    let trunk = c.conv_relu("reg.trunk", x, 1)?;
    let adaptive = cfg.variant.adaptive();
    let offsets = if cfg.variant.separate() {
        let groups = cfg.branch_groups();
        let parts = c.g.split_channels(trunk, &vec![cfg.branch_width; groups.len()])?;
        let mut outs = Vec::with_capacity(groups.len());
        for (i, &part) in parts.iter().enumerate() {
            outs.push(c.branch(&format!("reg.branch{i:02}"), part, adaptive)?);
        }
        if cfg.groups.is_none() {
            c.g.concat_channels(&outs)?
        } else {
            // Reorder branch outputs into keypoint order.
            let mut per_kpt = vec![None; k];
            for (g, &out) in groups.iter().zip(&outs) {
                for (j, &kp) in g.iter().enumerate() {
                    per_kpt[kp] = Some(c.g.narrow_channels(out, 2 * j, 2)?);
                }
            }
            let per_kpt: Vec<Var> = per_kpt.into_iter().map(Option::unwrap).collect();
            c.g.concat_channels(&per_kpt)?
        }
    } else {
        c.branch("reg.single", trunk, adaptive)?
    };
    Ok(NetworkOutput { heatmaps: heat[0], center: heat[1], offsets })
}

/// Inference without gradients.
pub fn predict<T: Scalar>(cfg: &NetworkConfig, params: &Params<T>, image: &Tensor<T>) -> Result<Prediction<T>, NetworkError> {
    let mut g = Graph::new();
    let vars = params.bind(&mut g, false);
    let x = g.constant(image.clone());
    let out = forward(&mut g, cfg, &vars, x)?;
    Ok(Prediction {
        heatmaps: g.value(out.heatmaps).clone(),
        center: g.value(out.center).clone(),
        offsets: g.value(out.offsets).clone(),
    })
}
