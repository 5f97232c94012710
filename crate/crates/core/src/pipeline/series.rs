use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::phantom::{generate, GeneratedSeries, PhantomSpec};
use crate::tensor::Tensor;
use crate::warp::{warp_image, DisplacementField};
use crate::{Error, Result};

pub const MANIFEST_VERSION: u32 = 1;
const MANIFEST: &str = "manifest.json";
const REFERENCE: &str = "reference.raw";
const HEART_MASK: &str = "heart_mask.raw";

/// `manifest.json` of a series directory.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Manifest {
    pub version: u32,
    pub size: [usize; 2],
    pub frames: usize,
    pub snr_db: Option<f64>,
    pub has_reference: bool,
    pub has_gt_fields: bool,
    pub frame_files: Vec<String>,
    pub byte_order: String,
    pub dtype: String,
}

fn field_file(j: usize) -> String {
    format!("field_{j:03}.raw")
}

/// One image series held in memory in 64-bit precision (values on disk are
/// 32-bit, so a round trip rounds to f32).
#[derive(Clone, Debug, PartialEq)]
pub struct Series {
    /// Acquired (possibly noisy) frames, each `[1,H,W]`.
    pub frames: Vec<Tensor<f64>>,
    pub snr_db: Option<f64>,
    /// Clean static anatomy; frame `j` is this warped by `gt_fields[j]`.
    pub reference: Option<Tensor<f64>>,
    pub gt_fields: Option<Vec<DisplacementField<f64>>>,
    pub heart_mask: Option<Tensor<f64>>,
}

impl Series {
    pub fn from_generated(g: &GeneratedSeries, snr_db: Option<f64>) -> Self {
        Self {
            frames: g.noisy_frames.clone(),
            snr_db,
            reference: Some(g.clean_reference.clone()),
            gt_fields: Some(g.gt_fields.clone()),
            heart_mask: Some(g.heart_mask.clone()),
        }
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dims(&self) -> Result<(usize, usize)> {
        let f = self
            .frames
            .first()
            .ok_or_else(|| Error::Data("series has no frames".into()))?;
        crate::warp::image_dims(f)
    }

    /// Clean version of every frame, or `None` without a reference. A
    /// reference without fields means a static scene.
    pub fn clean_frames(&self) -> Result<Option<Vec<Tensor<f64>>>> {
        let Some(r) = &self.reference else { return Ok(None) };
        Ok(Some(match &self.gt_fields {
            Some(fields) => fields.iter().map(|f| warp_image(r, f)).collect::<Result<_>>()?,
            None => vec![r.clone(); self.len()],
        }))
    }

    /// Same series with replacement frames (e.g. a fresh noise draw).
    pub fn with_frames(&self, frames: Vec<Tensor<f64>>, snr_db: Option<f64>) -> Self {
        Self {
            frames,
            snr_db,
            ..self.clone()
        }
    }
}

/// `count` phantom series sharing `spec` except for the anatomy and noise
/// seeds, which advance by one per series.
pub fn phantom_series(spec: &PhantomSpec, count: usize) -> Result<Vec<Series>> {
    (0..count as u64)
        .map(|i| {
            let s = PhantomSpec {
                anatomy_seed: spec.anatomy_seed.wrapping_add(i),
                noise_seed: spec.noise_seed.wrapping_add(i),
                ..spec.clone()
            };
            Ok(Series::from_generated(&generate(&s)?, s.noise_snr_db))
        })
        .collect()
}

/// Write values as headerless little-endian f32.
pub fn write_raw(path: &Path, values: &[f64]) -> Result<()> {
    let mut bytes = Vec::with_capacity(values.len() * 4);
    for &v in values {
        bytes.extend_from_slice(&(v as f32).to_le_bytes());
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

/// Read a headerless little-endian f32 raster of exactly `len` values.
pub fn read_raw(path: &Path, len: usize) -> Result<Vec<f64>> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    if bytes.len() != len * 4 {
        return Err(Error::Data(format!(
            "{}: expected {} bytes ({len} f32 values), found {}",
            path.display(),
            len * 4,
            bytes.len()
        )));
    }
    Ok(bytes
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
        .collect())
}

pub fn write_series(dir: &Path, s: &Series) -> Result<()> {
    let (h, w) = s.dims()?;
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let frame_files: Vec<String> = (0..s.len()).map(|j| format!("frame_{j:03}.raw")).collect();
    for (f, name) in s.frames.iter().zip(&frame_files) {
        write_raw(&dir.join(name), f.data())?;
    }
    if let Some(r) = &s.reference {
        write_raw(&dir.join(REFERENCE), r.data())?;
    }
    if let Some(fields) = &s.gt_fields {
        if fields.len() != s.len() {
            return Err(Error::Data(format!("{} fields for {} frames", fields.len(), s.len())));
        }
        for (j, f) in fields.iter().enumerate() {
            write_raw(&dir.join(field_file(j)), f.tensor().data())?;
        }
    }
    if let Some(m) = &s.heart_mask {
        write_raw(&dir.join(HEART_MASK), m.data())?;
    }
    let manifest = Manifest {
        version: MANIFEST_VERSION,
        size: [h, w],
        frames: s.len(),
        snr_db: s.snr_db,
        has_reference: s.reference.is_some(),
        has_gt_fields: s.gt_fields.is_some(),
        frame_files,
        byte_order: "little".into(),
        dtype: "f32".into(),
    };
    let json = serde_json::to_string_pretty(&manifest).map_err(|e| Error::Format(e.to_string()))?;
    let path = dir.join(MANIFEST);
    fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))
}

pub fn read_manifest(dir: &Path) -> Result<Manifest> {
    let path = dir.join(MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let m: Manifest =
        serde_json::from_str(&text).map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    if m.version != MANIFEST_VERSION {
        return Err(Error::Data(format!("unsupported manifest version {}", m.version)));
    }
    if m.byte_order != "little" || m.dtype != "f32" {
        return Err(Error::Data(format!(
            "unsupported raster encoding {} {}",
            m.byte_order, m.dtype
        )));
    }
    if m.frames != m.frame_files.len() || m.frames == 0 {
        return Err(Error::Data(format!(
            "manifest lists {} frame files but declares {} frames",
            m.frame_files.len(),
            m.frames
        )));
    }
    if m.size[0] == 0 || m.size[1] == 0 {
        return Err(Error::Data("manifest size must be nonzero".into()));
    }
    Ok(m)
}

pub fn read_series(dir: &Path) -> Result<Series> {
    let m = read_manifest(dir)?;
    let [h, w] = m.size;
    let image = |p: PathBuf| -> Result<Tensor<f64>> { Ok(Tensor::new(&[1, h, w], read_raw(&p, h * w)?)?) };
    let frames = m
        .frame_files
        .iter()
        .map(|f| image(dir.join(f)))
        .collect::<Result<Vec<_>>>()?;
    let reference = if m.has_reference { Some(image(dir.join(REFERENCE))?) } else { None };
    let gt_fields = if m.has_gt_fields {
        Some(
            (0..m.frames)
                .map(|j| {
                    let data = read_raw(&dir.join(field_file(j)), 2 * h * w)?;
                    DisplacementField::new(Tensor::new(&[2, h, w], data)?)
                })
                .collect::<Result<Vec<_>>>()?,
        )
    } else {
        None
    };
    let mask_path = dir.join(HEART_MASK);
    let heart_mask = if mask_path.exists() { Some(image(mask_path)?) } else { None };
    Ok(Series {
        frames,
        snr_db: m.snr_db,
        reference,
        gt_fields,
        heart_mask,
    })
}

/// Indices of series per fold.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Split {
    pub train: Vec<usize>,
    pub val: Vec<usize>,
    pub test: Vec<usize>,
}

impl Split {
    /// Contiguous split: the last quarter tests, the quarter before it
    /// validates (each at least one series when there are three or more).
    pub fn by_fraction(n: usize) -> Self {
        if n < 3 {
            return Self {
                train: (0..n).collect(),
                val: Vec::new(),
                test: Vec::new(),
            };
        }
        let test = (n / 4).max(1);
        let val = (n / 4).max(1);
        let train = n - test - val;
        Self {
            train: (0..train).collect(),
            val: (train..train + val).collect(),
            test: (train + val..n).collect(),
        }
    }
}

/// A dataset: either one series directory or a directory of them, ordered
/// by name.
#[derive(Clone, Debug, PartialEq)]
pub struct SeriesStore {
    pub root: PathBuf,
    pub dirs: Vec<PathBuf>,
}

impl SeriesStore {
    pub fn open(root: &Path) -> Result<Self> {
        if root.join(MANIFEST).is_file() {
            return Ok(Self {
                root: root.to_path_buf(),
                dirs: vec![root.to_path_buf()],
            });
        }
        let entries = fs::read_dir(root).map_err(|e| Error::io(root, e))?;
        let mut dirs = Vec::new();
        for e in entries {
            let p = e.map_err(|e| Error::io(root, e))?.path();
            if p.join(MANIFEST).is_file() {
                dirs.push(p);
            }
        }
        dirs.sort();
        if dirs.is_empty() {
            return Err(Error::Data(format!("{}: no series directories found", root.display())));
        }
        Ok(Self {
            root: root.to_path_buf(),
            dirs,
        })
    }

    /// Write `series` as `series_000`, `series_001`, ... under `root`.
    pub fn create(root: &Path, series: &[Series]) -> Result<Self> {
        let dirs: Vec<PathBuf> = (0..series.len()).map(|i| root.join(format!("series_{i:03}"))).collect();
        for (d, s) in dirs.iter().zip(series) {
            write_series(d, s)?;
        }
        Ok(Self {
            root: root.to_path_buf(),
            dirs,
        })
    }

    pub fn len(&self) -> usize {
        self.dirs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.dirs.is_empty()
    }

    pub fn load(&self, i: usize) -> Result<Series> {
        let d = self
            .dirs
            .get(i)
            .ok_or_else(|| Error::Data(format!("series index {i} out of range ({})", self.len())))?;
        read_series(d)
    }

    pub fn load_all(&self, idx: &[usize]) -> Result<Vec<Series>> {
        idx.iter().map(|&i| self.load(i)).collect()
    }
}
