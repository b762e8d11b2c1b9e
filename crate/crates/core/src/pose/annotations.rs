use std::collections::HashMap;
use std::path::Path;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{BBox, Instance, Keypoint, PoseError, Skeleton};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ImageInfo {
    pub id: u64,
    pub file: String,
    pub width: u32,
    pub height: u32,
}

/// Parsed and validated annotation file.
#[derive(Clone, Debug, PartialEq)]
pub struct AnnotationSet {
    pub skeleton: Skeleton,
    pub images: Vec<ImageInfo>,
    pub instances: Vec<Instance>,
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum RawSkeleton {
    Builtin(String),
    Custom(Skeleton),
}

#[derive(Serialize, Deserialize)]
struct RawAnnotation {
    id: u64,
    image_id: u64,
    keypoints: Vec<Value>,
    bbox: [f64; 4],
    area: f64,
}

#[derive(Serialize, Deserialize)]
struct RawFile {
    skeleton: RawSkeleton,
    images: Vec<ImageInfo>,
    annotations: Vec<RawAnnotation>,
}

fn invalid(path: String, detail: impl Into<String>) -> PoseError {
    PoseError::Invalid {
        path,
        detail: detail.into(),
    }
}

pub fn load_annotations(path: impl AsRef<Path>) -> Result<AnnotationSet, PoseError> {
    AnnotationSet::load(path)
}

impl AnnotationSet {
    pub fn load(path: impl AsRef<Path>) -> Result<Self, PoseError> {
        Self::from_json(&std::fs::read_to_string(path)?)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), PoseError> {
        std::fs::write(path, self.to_json())?;
        Ok(())
    }

    pub fn from_json(text: &str) -> Result<Self, PoseError> {
        let raw: RawFile = serde_json::from_str(text).map_err(|e| PoseError::Json {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        let skeleton = match raw.skeleton {
            RawSkeleton::Builtin(name) => {
                Skeleton::builtin(&name).ok_or(PoseError::UnknownSkeleton { name })?
            }
            RawSkeleton::Custom(sk) => sk,
        };
        skeleton.validate()?;
        let k = skeleton.num_keypoints();

        let mut dims = HashMap::new();
        for (i, img) in raw.images.iter().enumerate() {
            if img.width == 0 || img.height == 0 {
                return Err(invalid(format!("images[{i}]"), "zero image extent"));
            }
            if dims.insert(img.id, (img.width, img.height)).is_some() {
                return Err(invalid(format!("images[{i}].id"), format!("duplicate image id {}", img.id)));
            }
        }

        let mut instances = Vec::with_capacity(raw.annotations.len());
        for (i, a) in raw.annotations.into_iter().enumerate() {
            let at = |field: &str| format!("annotations[{i}].{field}");
            let &(w, h) = dims
                .get(&a.image_id)
                .ok_or_else(|| invalid(at("image_id"), format!("no image with id {}", a.image_id)))?;
            if a.keypoints.len() != 3 * k {
                return Err(invalid(
                    at("keypoints"),
                    format!("{} values, expected {} for {k} keypoints", a.keypoints.len(), 3 * k),
                ));
            }
            let mut keypoints = Vec::with_capacity(k);
            for j in 0..k {
                let num = |o: usize| {
                    a.keypoints[3 * j + o]
                        .as_f64()
                        .filter(|v| v.is_finite())
                        .ok_or_else(|| invalid(format!("annotations[{i}].keypoints[{}]", 3 * j + o), "not a finite number"))
                };
                let (x, y, v) = (num(0)?, num(1)?, num(2)?);
                if !(v == 0.0 || v == 1.0 || v == 2.0) {
                    return Err(invalid(
                        format!("annotations[{i}].keypoints[{}]", 3 * j + 2),
                        format!("visibility {v} not in {{0, 1, 2}}"),
                    ));
                }
                if v > 0.0 && !(0.0..=(w - 1) as f64).contains(&x) || v > 0.0 && !(0.0..=(h - 1) as f64).contains(&y) {
                    return Err(invalid(
                        format!("annotations[{i}].keypoints[{}]", 3 * j),
                        format!("labelled keypoint ({x}, {y}) outside the {w}x{h} image"),
                    ));
                }
                keypoints.push(Keypoint::new(x, y, v as u8));
            }
            let [bx, by, bw, bh] = a.bbox;
            if !(bw > 0.0 && bh > 0.0) || ![bx, by, bw, bh].iter().all(|v| v.is_finite()) {
                return Err(invalid(at("bbox"), format!("box {:?} must have positive extent", a.bbox)));
            }
            if !(a.area.is_finite() && a.area >= 0.0) {
                return Err(invalid(at("area"), format!("area {} must be non-negative", a.area)));
            }
            instances.push(Instance {
                id: a.id,
                image_id: a.image_id,
                keypoints,
                bbox: BBox { x: bx, y: by, w: bw, h: bh },
                area: a.area,
            });
        }
        Ok(Self {
            skeleton,
            images: raw.images,
            instances,
        })
    }

    /// Compact JSON; deterministic for a given set.
    pub fn to_json(&self) -> String {
        let skeleton = match Skeleton::builtin(&self.skeleton.name) {
            Some(b) if b == self.skeleton => RawSkeleton::Builtin(self.skeleton.name.clone()),
            _ => RawSkeleton::Custom(self.skeleton.clone()),
        };
        let annotations = self
            .instances
            .iter()
            .map(|inst| RawAnnotation {
                id: inst.id,
                image_id: inst.image_id,
                keypoints: inst
                    .keypoints
                    .iter()
                    .flat_map(|k| [Value::from(k.x), Value::from(k.y), Value::from(k.v)])
                    .collect(),
                bbox: [inst.bbox.x, inst.bbox.y, inst.bbox.w, inst.bbox.h],
                area: inst.area,
            })
            .collect();
        let raw = RawFile {
            skeleton,
            images: self.images.clone(),
            annotations,
        };
        let mut s = serde_json::to_string(&raw).expect("annotation serialization");
        s.push('\n');
        s
    }

    /// Instances grouped by image, in image order.
    pub fn per_image(&self) -> Vec<Vec<Instance>> {
        let index: HashMap<u64, usize> = self.images.iter().enumerate().map(|(i, im)| (im.id, i)).collect();
        let mut out = vec![Vec::new(); self.images.len()];
        for inst in &self.instances {
            out[index[&inst.image_id]].push(inst.clone());
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"{"skeleton":"mini7","images":[{"id":1,"file":"a.ppm","width":64,"height":64}],
      "annotations":[{"id":5,"image_id":1,"keypoints":[30,10,2, 25,20,2, 35,20,2, 26,35,2, 34,35,1, 25,50,2, 35,50,0],
      "bbox":[24,9,12,42],"area":300}]}"#;

    #[test]
    fn parses_minimal_file() {
        let set = AnnotationSet::from_json(MINIMAL).unwrap();
        assert_eq!(set.skeleton.num_keypoints(), 7);
        assert_eq!(set.instances.len(), 1);
        let inst = &set.instances[0];
        assert_eq!(inst.keypoints.len(), 7);
        assert_eq!(inst.keypoints[4], Keypoint::new(34.0, 35.0, 1));
        assert_eq!(inst.keypoints[6].v, 0);
        assert_eq!(set.per_image()[0].len(), 1);
    }

    #[test]
    fn malformed_json_reports_position() {
        let err = AnnotationSet::from_json("{\"skeleton\": \"mini7\",\n \"images\": [}").unwrap_err();
        match err {
            PoseError::Json { line, .. } => assert_eq!(line, 2),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn unknown_skeleton() {
        let text = MINIMAL.replace("\"mini7\"", "\"horse\"");
        assert!(matches!(
            AnnotationSet::from_json(&text),
            Err(PoseError::UnknownSkeleton { .. })
        ));
    }

    #[test]
    fn stick_out_of_range_names_the_stick() {
        let mut sk = Skeleton::mini7();
        sk.name = "custom".into();
        sk.sticks[2] = (1, 7);
        let sk_json = serde_json::to_string(&sk).unwrap();
        let text = MINIMAL.replace("\"mini7\"", &sk_json);
        let err = AnnotationSet::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("skeleton.sticks[2]"), "{err}");
    }

    #[test]
    fn keypoint_errors_carry_paths() {
        let text = MINIMAL.replace("34,35,1", "34,35,3");
        let err = AnnotationSet::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("annotations[0].keypoints[14]"), "{err}");
        let text = MINIMAL.replace("\"image_id\":1", "\"image_id\":9");
        let err = AnnotationSet::from_json(&text).unwrap_err().to_string();
        assert!(err.contains("annotations[0].image_id"), "{err}");
        let text = MINIMAL.replace("30,10,2", "70,10,2");
        assert!(AnnotationSet::from_json(&text).is_err());
    }

    #[test]
    fn custom_skeleton_round_trips() {
        let mut set = AnnotationSet::from_json(MINIMAL).unwrap();
        set.skeleton.name = "mine".into();
        set.skeleton.oks_k[0] = 0.1;
        let text = set.to_json();
        let back = AnnotationSet::from_json(&text).unwrap();
        assert_eq!(back, set);
        assert_eq!(back.to_json(), text);
    }
}
