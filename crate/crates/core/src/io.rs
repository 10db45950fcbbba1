//! Image loading, checkpoints, flat key-value configuration files and CSV
//! export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::degrade::{FaceImage, FACE_SIZE};
use crate::error::{Error, Result};
use crate::training::nn::{FeatureExtractor, ToyBackbone};

/// Resolves image references to decoded face crops.
pub trait ImageSource: Send + Sync {
    fn load(&self, reference: &str) -> Result<FaceImage>;
}

/// Images stored as files below a root directory; references are relative paths.
#[derive(Debug, Clone)]
pub struct DirectorySource {
    root: PathBuf,
}

impl DirectorySource {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    pub fn root(&self) -> &Path {
        &self.root
    }
}

impl ImageSource for DirectorySource {
    fn load(&self, reference: &str) -> Result<FaceImage> {
        load_image(&self.root.join(reference))
    }
}

/// Decodes a 112 x 112 PNG or JPEG crop.
pub fn load_image(path: &Path) -> Result<FaceImage> {
    let img = image::open(path).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })?;
    if img.width() as usize != FACE_SIZE || img.height() as usize != FACE_SIZE {
        return Err(Error::Image {
            path: path.to_path_buf(),
            message: format!("expected a 112x112 crop, found {}x{}", img.width(), img.height()),
        });
    }
    FaceImage::from_rgb8(img.to_rgb8().as_raw())
}

/// Writes a lossless PNG.
pub fn save_png(path: &Path, img: &FaceImage) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let buf = image::RgbImage::from_raw(FACE_SIZE as u32, FACE_SIZE as u32, img.to_rgb8())
        .expect("buffer length matches");
    buf.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image {
        path: path.to_path_buf(),
        message: e.to_string(),
    })
}

/// Images held in memory as 8-bit RGB.
#[derive(Debug, Clone, Default)]
pub struct MemorySource {
    images: BTreeMap<String, Vec<u8>>,
}

impl MemorySource {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, reference: impl Into<String>, img: &FaceImage) {
        self.images.insert(reference.into(), img.to_rgb8());
    }

    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }

    pub fn references(&self) -> impl Iterator<Item = &str> {
        self.images.keys().map(String::as_str)
    }

    /// Writes every image as `root/<reference>`.
    pub fn write_to(&self, root: &Path) -> Result<()> {
        for reference in self.images.keys() {
            save_png(&root.join(reference), &self.load(reference)?)?;
        }
        Ok(())
    }
}

impl ImageSource for MemorySource {
    fn load(&self, reference: &str) -> Result<FaceImage> {
        let raw = self.images.get(reference).ok_or_else(|| Error::Image {
            path: PathBuf::from(reference),
            message: "unknown image reference".into(),
        })?;
        FaceImage::from_rgb8(raw)
    }
}

pub const CHECKPOINT_VERSION: u32 = 1;

/// Parameters plus everything needed to resume or audit a run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub schema_version: u32,
    pub backbone: ToyBackbone,
    pub config: serde_json::Value,
    pub seeds: BTreeMap<String, u64>,
    pub epoch: usize,
    pub step: usize,
}

impl Checkpoint {
    pub fn new(backbone: ToyBackbone, config: serde_json::Value, seeds: BTreeMap<String, u64>) -> Self {
        Self {
            schema_version: CHECKPOINT_VERSION,
            backbone,
            config,
            seeds,
            epoch: 0,
            step: 0,
        }
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let ck: Checkpoint = serde_json::from_str(&text)
            .map_err(|e| Error::Parse(format!("checkpoint {}: {e}", path.display())))?;
        if ck.schema_version != CHECKPOINT_VERSION {
            return Err(Error::Parse(format!(
                "checkpoint {} has schema version {}, expected {CHECKPOINT_VERSION}",
                path.display(),
                ck.schema_version
            )));
        }
        // re-validate parameter count and finiteness
        let backbone = ToyBackbone::from_parts(ck.backbone.config().clone(), ck.backbone.params().to_vec())?;
        Ok(Checkpoint { backbone, ..ck })
    }
}

/// Pretty-printed JSON with a trailing newline.
pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value).map_err(|e| Error::Parse(e.to_string()))?;
    text.push('\n');
    write_text(path, &text)
}

pub fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent() {
        if !dir.as_os_str().is_empty() {
            fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        }
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a flat `key = value` file (TOML syntax, no tables) into strings.
/// Arrays become comma-separated lists.
pub fn read_kv_file(path: &Path) -> Result<BTreeMap<String, String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_kv(&text).map_err(|e| match e {
        Error::Config(m) => Error::Config(format!("{}: {m}", path.display())),
        other => other,
    })
}

pub fn parse_kv(text: &str) -> Result<BTreeMap<String, String>> {
    let table: toml::Table = text.parse().map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (key, value) in table {
        out.insert(key.clone(), scalar_string(&key, &value)?);
    }
    Ok(out)
}

fn scalar_string(key: &str, value: &toml::Value) -> Result<String> {
    Ok(match value {
        toml::Value::String(s) => s.clone(),
        toml::Value::Integer(i) => i.to_string(),
        toml::Value::Float(f) => f.to_string(),
        toml::Value::Boolean(b) => b.to_string(),
        toml::Value::Array(items) => items
            .iter()
            .map(|v| scalar_string(key, v))
            .collect::<Result<Vec<_>>>()?
            .join(","),
        _ => return Err(Error::Config(format!("key '{key}' must be a scalar or a list"))),
    })
}
