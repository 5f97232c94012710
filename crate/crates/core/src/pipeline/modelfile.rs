use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::edge::{EdgeArch, EdgeDetector};
use crate::losses::LossConfig;
use crate::model::{RegArch, RegistrationModel, Variant};
use crate::tensor::Tensor;
use crate::{Error, Result};

pub const MODEL_MAGIC: &[u8; 4] = b"AIMD";
pub const MODEL_VERSION: u32 = 1;

/// Architecture descriptor stored as JSON in the file header.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
enum Descriptor {
    Registration {
        arch: RegArch,
        variant: Option<Variant>,
        loss: Option<LossConfig>,
    },
    Edge {
        arch: EdgeArch,
    },
}

/// Anything the model file can hold.
#[derive(Clone, Debug, PartialEq)]
pub enum SavedModel {
    Registration {
        model: RegistrationModel<f32>,
        variant: Option<Variant>,
        loss: Option<LossConfig>,
    },
    Edge(EdgeDetector<f32>),
}

impl SavedModel {
    fn parts(&self) -> (Descriptor, &[Tensor<f32>]) {
        match self {
            SavedModel::Registration { model, variant, loss } => (
                Descriptor::Registration {
                    arch: model.arch.clone(),
                    variant: *variant,
                    loss: *loss,
                },
                &model.params,
            ),
            SavedModel::Edge(d) => (Descriptor::Edge { arch: d.arch.clone() }, &d.params),
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            SavedModel::Registration { .. } => "registration",
            SavedModel::Edge(_) => "edge",
        }
    }
}

fn param_shapes(d: &Descriptor) -> Vec<Vec<usize>> {
    let layers: Vec<_> = match d {
        Descriptor::Registration { arch, .. } => arch.layers().cloned().collect(),
        Descriptor::Edge { arch } => arch.layers.clone(),
    };
    layers
        .iter()
        .flat_map(|l| [l.weight_shape().to_vec(), vec![l.out_ch]])
        .collect()
}

pub fn encode_model(m: &SavedModel) -> Result<Vec<u8>> {
    let (desc, params) = m.parts();
    let json = serde_json::to_vec(&desc).map_err(|e| Error::Format(e.to_string()))?;
    let shapes = param_shapes(&desc);
    if shapes.len() != params.len() || shapes.iter().zip(params).any(|(s, p)| s.as_slice() != p.shape()) {
        return Err(Error::Format("parameters do not match the architecture".into()));
    }
    let mut out = Vec::new();
    out.extend_from_slice(MODEL_MAGIC);
    out.extend_from_slice(&MODEL_VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u32).to_le_bytes());
    out.extend_from_slice(&json);
    for p in params {
        for v in p.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    let crc = crc32fast::hash(&out);
    out.extend_from_slice(&crc.to_le_bytes());
    Ok(out)
}

fn u32_at(b: &[u8], at: usize) -> u32 {
    u32::from_le_bytes([b[at], b[at + 1], b[at + 2], b[at + 3]])
}

pub fn decode_model(bytes: &[u8]) -> Result<SavedModel> {
    let head = &bytes[..bytes.len().min(4)];
    if head != &MODEL_MAGIC[..head.len()] {
        return Err(Error::Format("not a model file (bad magic)".into()));
    }
    // magic + version + json length + crc
    if bytes.len() < 16 {
        return Err(Error::Checksum { stored: 0, computed: 0 });
    }
    let body = &bytes[..bytes.len() - 4];
    let stored = u32_at(bytes, bytes.len() - 4);
    let computed = crc32fast::hash(body);
    if stored != computed {
        return Err(Error::Checksum { stored, computed });
    }
    let version = u32_at(body, 4);
    if version != MODEL_VERSION {
        return Err(Error::Format(format!("unsupported model version {version}")));
    }
    let jlen = u32_at(body, 8) as usize;
    let json = body
        .get(12..12 + jlen)
        .ok_or_else(|| Error::Format("descriptor length exceeds file".into()))?;
    let desc: Descriptor = serde_json::from_slice(json).map_err(|e| Error::Format(e.to_string()))?;
    let mut blob = body[12 + jlen..].chunks_exact(4);
    let shapes = param_shapes(&desc);
    let expected: usize = shapes.iter().map(|s| s.iter().product::<usize>()).sum();
    if blob.len() != expected || !blob.remainder().is_empty() {
        return Err(Error::Format(format!(
            "parameter blob holds {} values, architecture needs {expected}",
            body.len() - 12 - jlen
        )));
    }
    let params = shapes
        .iter()
        .map(|s| {
            let n = s.iter().product();
            let data = (&mut blob)
                .take(n)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
                .collect();
            Tensor::new(s, data)
        })
        .collect::<Result<Vec<_>, _>>()?;
    Ok(match desc {
        Descriptor::Registration { arch, variant, loss } => SavedModel::Registration {
            model: RegistrationModel { arch, params },
            variant,
            loss,
        },
        Descriptor::Edge { arch } => SavedModel::Edge(EdgeDetector { arch, params }),
    })
}

pub fn save_model(path: &Path, m: &SavedModel) -> Result<()> {
    let bytes = encode_model(m)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn load_model(path: &Path) -> Result<SavedModel> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_model(&bytes)
}

pub fn save_registration(
    path: &Path,
    model: &RegistrationModel<f32>,
    variant: Option<Variant>,
    loss: Option<LossConfig>,
) -> Result<()> {
    save_model(
        path,
        &SavedModel::Registration {
            model: model.clone(),
            variant,
            loss,
        },
    )
}

pub fn load_registration(path: &Path) -> Result<(RegistrationModel<f32>, Option<Variant>)> {
    match load_model(path)? {
        SavedModel::Registration { model, variant, .. } => Ok((model, variant)),
        other => Err(Error::Format(format!(
            "{}: expected a registration model, found {}",
            path.display(),
            other.kind()
        ))),
    }
}

pub fn save_detector(path: &Path, det: &EdgeDetector<f32>) -> Result<()> {
    save_model(path, &SavedModel::Edge(det.clone()))
}

pub fn load_detector(path: &Path) -> Result<EdgeDetector<f32>> {
    match load_model(path)? {
        SavedModel::Edge(d) => Ok(d),
        other => Err(Error::Format(format!(
            "{}: expected an edge detector, found {}",
            path.display(),
            other.kind()
        ))),
    }
}
