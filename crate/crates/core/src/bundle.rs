//! Versioned model bundle shared by training, evaluation and serving.
//!
//! A bundle is a directory:
//!
//! | file                | content                                                       |
//! |---------------------|---------------------------------------------------------------|
//! | `VERSION`           | format version string, e.g. `re-tagger-bundle/1`              |
//! | `weights.bin`       | every weight in safetensors layout (see below)                |
//! | `weights.sha256`    | `sha256sum`-style line: hex digest of `weights.bin`           |
//! | `architecture.json` | [`ArchitectureConfig`] plus the weight dtype                  |
//! | `labels.json`       | label names in canonical order                                |
//! | `preprocess.json`   | [`PreprocessConfig`]                                          |
//! | `metadata.json`     | seed, RNG name, config hash and the training config, if any   |
//!
//! `weights.bin` follows the safetensors layout: an 8-byte little-endian
//! header length `N`, `N` bytes of UTF-8 JSON mapping tensor names to dtype,
//! shape and byte offsets, then the raw tensor data, little-endian, row-major.
//! Tensor names are the model's parameter names (`backbone.*`, `head.*`).

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use candle_core::{DType, Device, Tensor};
use safetensors::tensor::{Dtype as StDtype, TensorView};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::RNG_NAME;
use crate::error::{Error, Result};
use crate::infer::{PredictionScores, PreprocessConfig};
use crate::label::{ClassLabel, NUM_CLASSES};
use crate::model::{ArchitectureConfig, ModelHandle};
use crate::train::TrainingConfig;

pub const BUNDLE_VERSION: &str = "re-tagger-bundle/1";

const VERSION_FILE: &str = "VERSION";
const WEIGHTS_FILE: &str = "weights.bin";
const CHECKSUM_FILE: &str = "weights.sha256";
const ARCHITECTURE_FILE: &str = "architecture.json";
const LABELS_FILE: &str = "labels.json";
const PREPROCESS_FILE: &str = "preprocess.json";
const METADATA_FILE: &str = "metadata.json";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
struct ArchitectureFile {
    #[serde(flatten)]
    architecture: ArchitectureConfig,
    dtype: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BundleMetadata {
    pub seed: u64,
    pub rng: String,
    /// SHA-256 over the architecture and training configuration JSON.
    pub config_hash: String,
    pub training: Option<TrainingConfig>,
}

/// A model ready for inference together with its preprocessing contract.
/// Immutable once built; safe to share across threads.
#[derive(Debug)]
pub struct ModelBundle {
    model: ModelHandle,
    preprocess: PreprocessConfig,
    labels: Vec<ClassLabel>,
    version: String,
    metadata: BundleMetadata,
    checksum: String,
    path: Option<PathBuf>,
}

fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

fn config_hash(architecture: &ArchitectureConfig, training: Option<&TrainingConfig>) -> Result<String> {
    let mut hasher = Sha256::new();
    hasher.update(serde_json::to_vec(architecture)?);
    hasher.update(serde_json::to_vec(&training)?);
    Ok(hex::encode(hasher.finalize()))
}

fn dtype_name(dtype: DType) -> &'static str {
    match dtype {
        DType::F64 => "f64",
        _ => "f32",
    }
}

fn serialize_weights(model: &ModelHandle) -> Result<Vec<u8>> {
    let tensors = model.named_tensors();
    let mut buffers: Vec<(String, Vec<usize>, StDtype, Vec<u8>)> = Vec::with_capacity(tensors.len());
    for (name, t) in tensors {
        let flat = t.flatten_all()?;
        let (dtype, data) = match t.dtype() {
            DType::F64 => (
                StDtype::F64,
                flat.to_vec1::<f64>()?.iter().flat_map(|v| v.to_le_bytes()).collect(),
            ),
            _ => (
                StDtype::F32,
                flat.to_dtype(DType::F32)?
                    .to_vec1::<f32>()?
                    .iter()
                    .flat_map(|v| v.to_le_bytes())
                    .collect(),
            ),
        };
        buffers.push((name, t.dims().to_vec(), dtype, data));
    }
    let views = buffers
        .iter()
        .map(|(name, shape, dtype, data)| {
            TensorView::new(*dtype, shape.clone(), data)
                .map(|v| (name.as_str(), v))
                .map_err(|e| Error::CorruptBundle(e.to_string()))
        })
        .collect::<Result<Vec<_>>>()?;
    safetensors::serialize(views, None).map_err(|e| Error::CorruptBundle(e.to_string()))
}

fn deserialize_weights(bytes: &[u8]) -> Result<BTreeMap<String, Tensor>> {
    let st = safetensors::SafeTensors::deserialize(bytes).map_err(|e| Error::CorruptBundle(e.to_string()))?;
    let mut out = BTreeMap::new();
    for (name, view) in st.tensors() {
        let data = view.data();
        let shape = view.shape().to_vec();
        let tensor = match view.dtype() {
            StDtype::F32 => {
                let v: Vec<f32> = data
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap_or_default()))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            StDtype::F64 => {
                let v: Vec<f64> = data
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap_or_default()))
                    .collect();
                Tensor::from_vec(v, shape, &Device::Cpu)?
            }
            other => return Err(Error::CorruptBundle(format!("tensor `{name}` has unsupported dtype {other:?}"))),
        };
        out.insert(name, tensor);
    }
    Ok(out)
}

fn read(dir: &Path, file: &str) -> Result<Vec<u8>> {
    let p = dir.join(file);
    fs::read(&p).map_err(|e| Error::io(p, e))
}

fn write(dir: &Path, file: &str, bytes: &[u8]) -> Result<()> {
    let p = dir.join(file);
    fs::write(&p, bytes).map_err(|e| Error::io(p, e))
}

fn check_input_shape(arch: &ArchitectureConfig, p: &PreprocessConfig) -> Result<()> {
    let s = arch.input_shape;
    if (s.height, s.width, s.channels) != (p.target_height, p.target_width, p.channels) {
        return Err(Error::InvalidConfig(format!(
            "preprocessing produces {}x{}x{} but the model expects {}x{}x{}",
            p.target_height, p.target_width, p.channels, s.height, s.width, s.channels
        )));
    }
    Ok(())
}

fn to_json_bytes<T: Serialize>(value: &T) -> Result<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value)?;
    v.push(b'\n');
    Ok(v)
}

impl ModelBundle {
    /// Wraps a model for inference. `training` is recorded in the metadata.
    pub fn new(model: ModelHandle, preprocess: PreprocessConfig, training: Option<TrainingConfig>) -> Result<Self> {
        let weights = serialize_weights(&model)?;
        Self::assemble(model, preprocess, training, &weights)
    }

    fn assemble(
        model: ModelHandle,
        preprocess: PreprocessConfig,
        training: Option<TrainingConfig>,
        weights: &[u8],
    ) -> Result<Self> {
        let architecture = Self::stored_architecture(model.config());
        check_input_shape(&architecture, &preprocess)?;
        let metadata = BundleMetadata {
            seed: training.as_ref().map_or(architecture.seed, |t| t.seed),
            rng: RNG_NAME.to_string(),
            config_hash: config_hash(&architecture, training.as_ref())?,
            training,
        };
        Ok(ModelBundle {
            model,
            preprocess,
            labels: ClassLabel::ALL.to_vec(),
            version: BUNDLE_VERSION.to_string(),
            metadata,
            checksum: sha256_hex(weights),
            path: None,
        })
    }

    /// Architecture as stored: weights live in the bundle, so nothing is
    /// reloaded from a pretrained file.
    fn stored_architecture(config: &ArchitectureConfig) -> ArchitectureConfig {
        ArchitectureConfig {
            pretrained: false,
            pretrained_weights: None,
            ..config.clone()
        }
    }

    /// Writes the bundle directory, creating it if needed. Output depends
    /// only on the weights and configuration, so equal models give
    /// byte-identical bundles.
    pub fn save(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        let weights = serialize_weights(&self.model)?;
        let checksum = sha256_hex(&weights);
        write(dir, WEIGHTS_FILE, &weights)?;
        write(dir, CHECKSUM_FILE, format!("{checksum}  {WEIGHTS_FILE}\n").as_bytes())?;
        let arch = ArchitectureFile {
            architecture: Self::stored_architecture(self.model.config()),
            dtype: dtype_name(self.model.dtype()).to_string(),
        };
        write(dir, ARCHITECTURE_FILE, &to_json_bytes(&arch)?)?;
        write(dir, LABELS_FILE, &to_json_bytes(&self.labels)?)?;
        write(dir, PREPROCESS_FILE, &to_json_bytes(&self.preprocess)?)?;
        write(dir, METADATA_FILE, &to_json_bytes(&self.metadata)?)?;
        write(dir, VERSION_FILE, format!("{}\n", self.version).as_bytes())?;
        Ok(())
    }

    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let version = String::from_utf8_lossy(&read(dir, VERSION_FILE)?).trim().to_string();
        if version != BUNDLE_VERSION {
            return Err(Error::VersionMismatch {
                expected: BUNDLE_VERSION.to_string(),
                found: version,
            });
        }

        let weights = read(dir, WEIGHTS_FILE)?;
        let expected = String::from_utf8_lossy(&read(dir, CHECKSUM_FILE)?)
            .split_whitespace()
            .next()
            .unwrap_or_default()
            .to_string();
        let computed = sha256_hex(&weights);
        if expected != computed {
            return Err(Error::Checksum { expected, computed });
        }

        let labels: Vec<ClassLabel> = serde_json::from_slice(&read(dir, LABELS_FILE)?)?;
        if labels != ClassLabel::ALL {
            return Err(Error::CorruptBundle(format!(
                "label order {labels:?} differs from canonical {:?}",
                ClassLabel::names()
            )));
        }
        let arch: ArchitectureFile = serde_json::from_slice(&read(dir, ARCHITECTURE_FILE)?)?;
        let preprocess: PreprocessConfig = serde_json::from_slice(&read(dir, PREPROCESS_FILE)?)?;
        let metadata: BundleMetadata = serde_json::from_slice(&read(dir, METADATA_FILE)?)?;

        let dtype = match arch.dtype.as_str() {
            "f32" => DType::F32,
            "f64" => DType::F64,
            other => return Err(Error::CorruptBundle(format!("unsupported dtype `{other}`"))),
        };
        check_input_shape(&arch.architecture, &preprocess)?;
        let model = ModelHandle::build(&arch.architecture, dtype)?;
        model.load_named_tensors(&deserialize_weights(&weights)?)?;

        Ok(ModelBundle {
            model,
            preprocess,
            labels,
            version,
            metadata,
            checksum: computed,
            path: Some(dir.to_path_buf()),
        })
    }

    pub fn model(&self) -> &ModelHandle {
        &self.model
    }

    pub fn into_model(self) -> ModelHandle {
        self.model
    }

    pub fn preprocess(&self) -> &PreprocessConfig {
        &self.preprocess
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn metadata(&self) -> &BundleMetadata {
        &self.metadata
    }

    /// SHA-256 of the serialized weights.
    pub fn checksum(&self) -> &str {
        &self.checksum
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    /// `version@<first 12 hex digits of the weight checksum>`.
    pub fn identifier(&self) -> String {
        format!("{}@{}", self.version, &self.checksum[..12])
    }

    /// Scores for one encoded image.
    pub fn predict(&self, image_bytes: &[u8]) -> Result<PredictionScores> {
        let px = self.preprocess.pixels_from_bytes(image_bytes)?;
        let mut scores = self.predict_pixels(vec![px])?;
        Ok(scores.remove(0))
    }

    /// Scores for already preprocessed images, one HWC buffer each.
    pub fn predict_pixels(&self, images: Vec<Vec<f32>>) -> Result<Vec<PredictionScores>> {
        if self.model.num_classes() != NUM_CLASSES {
            return Err(Error::ShapeMismatch(format!(
                "model has {} outputs, label set has {NUM_CLASSES}",
                self.model.num_classes()
            )));
        }
        let p = &self.preprocess;
        let n = images.len();
        let batch = Tensor::from_vec(images.concat(), (n, p.target_height, p.target_width, p.channels), &Device::Cpu)?;
        let probs: Vec<Vec<f32>> = self.model.forward(&batch, false)?.to_dtype(DType::F32)?.to_vec2()?;
        probs.iter().map(|row| PredictionScores::from_slice(row)).collect()
    }
}

/// Writes `model` as a bundle directory and returns the in-memory bundle.
pub fn export_bundle(
    model: ModelHandle,
    preprocess: PreprocessConfig,
    training: Option<TrainingConfig>,
    dir: impl AsRef<Path>,
) -> Result<ModelBundle> {
    let dir = dir.as_ref();
    let mut bundle = ModelBundle::new(model, preprocess, training)?;
    bundle.save(dir)?;
    bundle.path = Some(dir.to_path_buf());
    Ok(bundle)
}

pub fn load_bundle(dir: impl AsRef<Path>) -> Result<ModelBundle> {
    ModelBundle::load(dir)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::build_classifier;

    fn tiny_bundle(dir: &Path) -> ModelBundle {
        let model = build_classifier(&ArchitectureConfig::tiny_test()).unwrap();
        export_bundle(model, PreprocessConfig::default(), Some(TrainingConfig::default()), dir).unwrap()
    }

    #[test]
    fn layout_on_disk() {
        let dir = tempfile::tempdir().unwrap();
        tiny_bundle(dir.path());
        for f in [VERSION_FILE, WEIGHTS_FILE, CHECKSUM_FILE, ARCHITECTURE_FILE, LABELS_FILE, PREPROCESS_FILE, METADATA_FILE] {
            assert!(dir.path().join(f).is_file(), "{f}");
        }
        assert_eq!(fs::read_to_string(dir.path().join(VERSION_FILE)).unwrap(), "re-tagger-bundle/1\n");
        let labels: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(LABELS_FILE)).unwrap()).unwrap();
        assert_eq!(labels, serde_json::json!(["balcony", "bathroom", "bedroom", "hall", "kitchen", "others"]));
        let arch: serde_json::Value = serde_json::from_slice(&fs::read(dir.path().join(ARCHITECTURE_FILE)).unwrap()).unwrap();
        assert_eq!(arch["backbone"], "tiny_test");
        assert_eq!(arch["head_activation"], "relu");
        assert_eq!(arch["dtype"], "f32");
    }

    #[test]
    fn wrong_version_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_bundle(dir.path());
        fs::write(dir.path().join(VERSION_FILE), "re-tagger-bundle/0\n").unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::VersionMismatch { .. })));
    }

    #[test]
    fn truncated_weights_fail_checksum() {
        let dir = tempfile::tempdir().unwrap();
        tiny_bundle(dir.path());
        let p = dir.path().join(WEIGHTS_FILE);
        let bytes = fs::read(&p).unwrap();
        fs::write(&p, &bytes[..bytes.len() / 2]).unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::Checksum { .. })));
    }

    #[test]
    fn reordered_labels_are_rejected() {
        let dir = tempfile::tempdir().unwrap();
        tiny_bundle(dir.path());
        fs::write(
            dir.path().join(LABELS_FILE),
            r#"["bedroom","bathroom","balcony","kitchen","hall","others"]"#,
        )
        .unwrap();
        assert!(matches!(load_bundle(dir.path()), Err(Error::CorruptBundle(_))));
    }

    #[test]
    fn missing_bundle_directory() {
        assert!(matches!(load_bundle("/nonexistent/bundle"), Err(Error::Io { .. })));
    }

    #[test]
    fn identical_models_write_identical_bytes() {
        let a = tempfile::tempdir().unwrap();
        let b = tempfile::tempdir().unwrap();
        tiny_bundle(a.path());
        tiny_bundle(b.path());
        for f in [WEIGHTS_FILE, CHECKSUM_FILE, ARCHITECTURE_FILE, METADATA_FILE] {
            assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
        }
    }
}
