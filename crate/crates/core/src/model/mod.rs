//! The room classifier: a convolutional backbone whose classification block
//! is replaced by global average pooling, a fully-connected layer, dropout
//! and softmax.

mod backbones;
pub(crate) mod layers;

use std::collections::BTreeMap;
use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;
use std::sync::Mutex;

use candle_core::{DType, Device, Tensor, Var};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::seeded_rng;
use crate::error::{Error, Result};
use crate::label::NUM_CLASSES;
use backbones::Backbone;
use layers::{global_avg_pool, softmax_rows, Linear, ParamBuilder};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BackboneKind {
    #[default]
    InceptionV3,
    Resnet,
    Vgg,
    Xception,
    TinyTest,
}

impl BackboneKind {
    pub const ALL: [BackboneKind; 5] = [
        BackboneKind::InceptionV3,
        BackboneKind::Resnet,
        BackboneKind::Vgg,
        BackboneKind::Xception,
        BackboneKind::TinyTest,
    ];

    pub fn name(self) -> &'static str {
        match self {
            BackboneKind::InceptionV3 => "inception_v3",
            BackboneKind::Resnet => "resnet",
            BackboneKind::Vgg => "vgg",
            BackboneKind::Xception => "xception",
            BackboneKind::TinyTest => "tiny_test",
        }
    }
}

impl fmt::Display for BackboneKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for BackboneKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == s.trim())
            .ok_or_else(|| Error::InvalidConfig(format!("unsupported backbone `{s}`")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct InputShape {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
}

impl Default for InputShape {
    fn default() -> Self {
        InputShape {
            height: 299,
            width: 299,
            channels: 3,
        }
    }
}

/// Activation after the head's fully-connected layer.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum HeadActivation {
    #[default]
    Relu,
    Linear,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArchitectureConfig {
    pub backbone: BackboneKind,
    pub input_shape: InputShape,
    pub num_classes: usize,
    pub dropout_rate: f64,
    pub head_width: usize,
    pub head_activation: HeadActivation,
    /// Initialise the backbone from pretrained weights.
    pub pretrained: bool,
    /// Safetensors file with pretrained backbone weights, keyed by the
    /// backbone's parameter names (without the `backbone.` prefix).
    pub pretrained_weights: Option<PathBuf>,
    /// Seed for weight initialisation and the dropout mask stream.
    pub seed: u64,
}

impl Default for ArchitectureConfig {
    fn default() -> Self {
        ArchitectureConfig {
            backbone: BackboneKind::InceptionV3,
            input_shape: InputShape::default(),
            num_classes: NUM_CLASSES,
            dropout_rate: 0.5,
            head_width: 1024,
            head_activation: HeadActivation::Relu,
            pretrained: false,
            pretrained_weights: None,
            seed: 0,
        }
    }
}

impl ArchitectureConfig {
    pub fn tiny_test() -> Self {
        ArchitectureConfig {
            backbone: BackboneKind::TinyTest,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return bad(format!("dropout_rate {} not in [0, 1)", self.dropout_rate));
        }
        if self.num_classes < 2 {
            return bad(format!("num_classes {} < 2", self.num_classes));
        }
        let s = self.input_shape;
        if s.height == 0 || s.width == 0 || s.channels == 0 {
            return bad(format!("input shape {}x{}x{} has a zero dimension", s.height, s.width, s.channels));
        }
        if self.head_width == 0 {
            return bad("head_width must be positive".into());
        }
        Ok(())
    }
}

/// Weight partition: the feature extractor or the newly added head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Partition {
    Backbone,
    Head,
}

impl Partition {
    fn of(name: &str) -> Partition {
        if name.starts_with("head.") {
            Partition::Head
        } else {
            Partition::Backbone
        }
    }
}

/// Which partitions a training stage updates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Stage {
    /// Backbone frozen; only the head is trained.
    HeadOnly,
    /// The whole network is trained end to end.
    Full,
}

impl fmt::Display for Stage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Stage::HeadOnly => "head_only",
            Stage::Full => "full",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Trainability {
    pub backbone: bool,
    pub head: bool,
}

impl Trainability {
    pub fn is_trainable(&self, p: Partition) -> bool {
        match p {
            Partition::Backbone => self.backbone,
            Partition::Head => self.head,
        }
    }
}

#[derive(Debug, Clone)]
struct Head {
    fc: Linear,
    logits: Linear,
    activation: HeadActivation,
    dropout_rate: f64,
}

/// A built classifier: backbone, head, the named weight collection and the
/// per-partition trainability flags.
///
/// Inference-mode forward passes only read weights and may run concurrently.
#[derive(Debug)]
pub struct ModelHandle {
    config: ArchitectureConfig,
    device: Device,
    dtype: DType,
    backbone: Backbone,
    head: Head,
    params: BTreeMap<String, Var>,
    buffers: BTreeMap<String, Var>,
    trainability: Trainability,
    dropout_rng: Mutex<ChaCha8Rng>,
}

/// Builds a classifier in single precision on the CPU.
pub fn build_classifier(config: &ArchitectureConfig) -> Result<ModelHandle> {
    ModelHandle::build(config, DType::F32)
}

impl ModelHandle {
    /// Builds a classifier with the given floating-point type (F32 or F64).
    pub fn build(config: &ArchitectureConfig, dtype: DType) -> Result<ModelHandle> {
        config.validate()?;
        if !matches!(dtype, DType::F32 | DType::F64) {
            return Err(Error::InvalidConfig(format!("unsupported dtype {dtype:?}")));
        }
        let device = Device::Cpu;
        let mut params = BTreeMap::new();
        let mut buffers = BTreeMap::new();
        let mut rng = seeded_rng(config.seed);

        let backbone = {
            let mut pb = ParamBuilder::new("backbone", &mut params, &mut buffers, &mut rng, dtype, &device);
            Backbone::build(config.backbone, &mut pb, config.input_shape.channels)?
        };
        let features = backbone.out_channels();
        let head = {
            let mut pb = ParamBuilder::new("head", &mut params, &mut buffers, &mut rng, dtype, &device);
            Head {
                fc: Linear::new(&mut pb.sub("fc"), features, config.head_width)?,
                logits: Linear::new(&mut pb.sub("logits"), config.head_width, config.num_classes)?,
                activation: config.head_activation,
                dropout_rate: config.dropout_rate,
            }
        };
        let dropout_rng = Mutex::new(seeded_rng(config.seed ^ 0x5eed_d20b));

        let model = ModelHandle {
            config: config.clone(),
            device,
            dtype,
            backbone,
            head,
            params,
            buffers,
            trainability: Trainability {
                backbone: true,
                head: true,
            },
            dropout_rng,
        };
        if config.pretrained {
            model.load_pretrained()?;
        }
        Ok(model)
    }

    fn load_pretrained(&self) -> Result<()> {
        let path = self.config.pretrained_weights.as_ref().ok_or_else(|| {
            Error::PretrainedUnavailable(format!(
                "no local weights file configured for the {} backbone",
                self.config.backbone
            ))
        })?;
        if !path.exists() {
            return Err(Error::PretrainedUnavailable(format!("{} does not exist", path.display())));
        }
        let tensors = candle_core::safetensors::load(path, &self.device)
            .map_err(|e| Error::PretrainedUnavailable(format!("{}: {e}", path.display())))?;
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let Some(key) = name.strip_prefix("backbone.") else { continue };
            let t = tensors.get(key).ok_or_else(|| {
                Error::PretrainedUnavailable(format!("{} lacks tensor `{key}`", path.display()))
            })?;
            if t.dims() != var.dims() {
                return Err(Error::PretrainedUnavailable(format!(
                    "tensor `{key}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    pub fn config(&self) -> &ArchitectureConfig {
        &self.config
    }

    pub fn dtype(&self) -> DType {
        self.dtype
    }

    pub fn device(&self) -> &Device {
        &self.device
    }

    /// Width of the globally pooled feature vector feeding the head.
    pub fn feature_width(&self) -> usize {
        self.head.fc.in_features()
    }

    pub fn backbone_out_channels(&self) -> usize {
        self.backbone.out_channels()
    }

    pub fn num_classes(&self) -> usize {
        self.head.logits.out_features()
    }

    pub fn trainability(&self) -> Trainability {
        self.trainability
    }

    /// Marks partitions trainable for a stage: `HeadOnly` freezes the
    /// backbone, `Full` unfreezes everything.
    pub fn set_stage_trainability(&mut self, stage: Stage) {
        self.trainability = match stage {
            Stage::HeadOnly => Trainability {
                backbone: false,
                head: true,
            },
            Stage::Full => Trainability {
                backbone: true,
                head: true,
            },
        };
    }

    /// Learnable parameters by name, in name order.
    pub fn parameters(&self) -> impl Iterator<Item = (&str, &Var)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Names of the learnable parameters in one partition.
    pub fn partition_names(&self, partition: Partition) -> Vec<String> {
        self.params
            .keys()
            .filter(|k| Partition::of(k) == partition)
            .cloned()
            .collect()
    }

    pub fn trainable_parameters(&self) -> Vec<(String, Var)> {
        self.params
            .iter()
            .filter(|(k, _)| self.trainability.is_trainable(Partition::of(k)))
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect()
    }

    pub fn trainable_names(&self) -> Vec<String> {
        self.trainable_parameters().into_iter().map(|(k, _)| k).collect()
    }

    pub fn parameter_count(&self) -> usize {
        self.params.values().map(|v| v.elem_count()).sum()
    }

    pub fn parameter(&self, name: &str) -> Option<&Var> {
        self.params.get(name)
    }

    /// Every stored tensor (parameters and normalisation buffers) by name.
    pub fn named_tensors(&self) -> BTreeMap<String, Tensor> {
        self.params
            .iter()
            .chain(&self.buffers)
            .map(|(k, v)| (k.clone(), v.as_tensor().clone()))
            .collect()
    }

    /// Overwrites every stored tensor from `tensors`, which must contain
    /// exactly the model's names with matching shapes.
    pub fn load_named_tensors(&self, tensors: &BTreeMap<String, Tensor>) -> Result<()> {
        let expected = self.params.len() + self.buffers.len();
        if tensors.len() != expected {
            return Err(Error::CorruptBundle(format!(
                "weight file holds {} tensors, model expects {expected}",
                tensors.len()
            )));
        }
        for (name, var) in self.params.iter().chain(&self.buffers) {
            let t = tensors
                .get(name)
                .ok_or_else(|| Error::CorruptBundle(format!("missing tensor `{name}`")))?;
            if t.dims() != var.dims() {
                return Err(Error::CorruptBundle(format!(
                    "tensor `{name}` has shape {:?}, expected {:?}",
                    t.dims(),
                    var.dims()
                )));
            }
            var.set(&t.to_dtype(self.dtype)?)?;
        }
        Ok(())
    }

    /// Raw little-endian bytes of every tensor in a partition (buffers count
    /// as backbone), in name order. Used for bitwise weight comparisons.
    pub fn partition_bytes(&self, partition: Partition) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        for (name, var) in self.params.iter().chain(&self.buffers) {
            if Partition::of(name) != partition {
                continue;
            }
            out.extend_from_slice(name.as_bytes());
            let flat = var.as_tensor().flatten_all()?;
            match self.dtype {
                DType::F64 => {
                    for v in flat.to_vec1::<f64>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                _ => {
                    for v in flat.to_dtype(DType::F32)?.to_vec1::<f32>()? {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        Ok(out)
    }

    /// Restarts the dropout mask stream.
    pub fn reseed_dropout(&self, seed: u64) {
        *self.dropout_rng.lock().unwrap_or_else(|e| e.into_inner()) = seeded_rng(seed);
    }

    fn check_batch(&self, batch: &Tensor) -> Result<()> {
        let s = self.config.input_shape;
        match batch.dims() {
            [n, h, w, c] if *n > 0 && *h == s.height && *w == s.width && *c == s.channels => Ok(()),
            dims => Err(Error::ShapeMismatch(format!(
                "expected (n, {}, {}, {}) with n >= 1, got {dims:?}",
                s.height, s.width, s.channels
            ))),
        }
    }

    /// Pooled backbone features `(n, feature_width)` for an NHWC batch.
    pub fn features(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_batch(batch)?;
        let x = batch.to_dtype(self.dtype)?.permute((0, 3, 1, 2))?.contiguous()?;
        global_avg_pool(&self.backbone.forward(&x)?)
    }

    /// Head applied to pooled features; returns class probabilities.
    pub fn head_forward(&self, features: &Tensor, training: bool) -> Result<Tensor> {
        let mut h = self.head.fc.forward(features)?;
        if self.head.activation == HeadActivation::Relu {
            h = h.relu()?;
        }
        if training && self.head.dropout_rate > 0.0 {
            h = h.broadcast_mul(&self.dropout_mask(h.dims())?)?;
        }
        softmax_rows(&self.head.logits.forward(&h)?)
    }

    /// Maps an NHWC batch `(n, h, w, c)` to `(n, num_classes)` probabilities.
    /// Dropout is applied only when `training` is set. Gradients do not flow
    /// into a frozen backbone.
    pub fn forward(&self, batch: &Tensor, training: bool) -> Result<Tensor> {
        let mut features = self.features(batch)?;
        if !self.trainability.backbone {
            features = features.detach();
        }
        self.head_forward(&features, training)
    }

    fn dropout_mask(&self, dims: &[usize]) -> Result<Tensor> {
        let keep = 1.0 - self.head.dropout_rate;
        let n: usize = dims.iter().product();
        let mut rng = self.dropout_rng.lock().unwrap_or_else(|e| e.into_inner());
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        Ok(Tensor::from_vec(mask, dims, &self.device)?.to_dtype(self.dtype)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn random_batch(n: usize, seed: u64) -> Tensor {
        let mut rng = seeded_rng(seed);
        let len = n * 299 * 299 * 3;
        let v: Vec<f32> = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, (n, 299, 299, 3), &Device::Cpu).unwrap()
    }

    fn row_sums(p: &Tensor) -> Vec<Vec<f32>> {
        p.to_vec2().unwrap()
    }

    #[test]
    fn config_defaults() {
        let c = ArchitectureConfig::default();
        assert_eq!(c.backbone, BackboneKind::InceptionV3);
        assert_eq!((c.input_shape.height, c.input_shape.width, c.input_shape.channels), (299, 299, 3));
        assert_eq!(c.num_classes, 6);
        assert_eq!(c.dropout_rate, 0.5);
        assert_eq!(c.head_width, 1024);
        c.validate().unwrap();
    }

    #[test]
    fn config_validation() {
        for bad in [
            ArchitectureConfig { dropout_rate: 1.0, ..Default::default() },
            ArchitectureConfig { dropout_rate: -0.1, ..Default::default() },
            ArchitectureConfig { num_classes: 1, ..Default::default() },
            ArchitectureConfig { head_width: 0, ..Default::default() },
            ArchitectureConfig {
                input_shape: InputShape { height: 0, width: 299, channels: 3 },
                ..Default::default()
            },
        ] {
            assert!(matches!(build_classifier(&bad), Err(Error::InvalidConfig(_))));
        }
        assert!("lenet".parse::<BackboneKind>().is_err());
        assert_eq!("tiny_test".parse::<BackboneKind>().unwrap(), BackboneKind::TinyTest);
    }

    #[test]
    fn tiny_forward_shape_and_simplex() {
        let m = build_classifier(&ArchitectureConfig::tiny_test()).unwrap();
        let p = m.forward(&random_batch(4, 1), false).unwrap();
        assert_eq!(p.dims(), &[4, 6]);
        for row in row_sums(&p) {
            assert!((row.iter().sum::<f32>() - 1.0).abs() < 1e-5);
            assert!(row.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        let one = m.forward(&random_batch(1, 2), false).unwrap();
        assert_eq!(one.dims(), &[1, 6]);
    }

    #[test]
    fn inference_is_deterministic_training_uses_dropout() {
        let m = build_classifier(&ArchitectureConfig::tiny_test()).unwrap();
        let x = random_batch(2, 3);
        let a = row_sums(&m.forward(&x, false).unwrap());
        let b = row_sums(&m.forward(&x, false).unwrap());
        assert_eq!(a, b);
        let t1 = row_sums(&m.forward(&x, true).unwrap());
        let t2 = row_sums(&m.forward(&x, true).unwrap());
        assert_ne!(t1, t2);
    }

    #[test]
    fn rejects_wrong_shape() {
        let m = build_classifier(&ArchitectureConfig::tiny_test()).unwrap();
        let x = Tensor::zeros((1, 224, 224, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.forward(&x, false), Err(Error::ShapeMismatch(_))));
        let x = Tensor::zeros((299, 299, 3), DType::F32, &Device::Cpu).unwrap();
        assert!(matches!(m.forward(&x, false), Err(Error::ShapeMismatch(_))));
    }

    #[test]
    fn partitions_cover_all_parameters() {
        let m = build_classifier(&ArchitectureConfig::tiny_test()).unwrap();
        let backbone = m.partition_names(Partition::Backbone);
        let head = m.partition_names(Partition::Head);
        assert_eq!(
            head,
            vec!["head.fc.bias", "head.fc.weight", "head.logits.bias", "head.logits.weight"]
        );
        assert!(!backbone.is_empty());
        assert!(backbone.iter().all(|n| !head.contains(n)));
        assert_eq!(backbone.len() + head.len(), m.parameters().count());
        // Roughly 1e5 parameters for the CI backbone plus head.
        let count = m.parameter_count();
        assert!((50_000..400_000).contains(&count), "{count}");
    }

    #[test]
    fn stage_trainability() {
        let mut m = build_classifier(&ArchitectureConfig::tiny_test()).unwrap();
        let head = m.partition_names(Partition::Head);
        let all: Vec<String> = m.parameters().map(|(k, _)| k.to_string()).collect();
        m.set_stage_trainability(Stage::HeadOnly);
        let first = m.trainable_names();
        assert_eq!(first, head);
        m.set_stage_trainability(Stage::Full);
        assert_eq!(m.trainable_names(), all);
        m.set_stage_trainability(Stage::HeadOnly);
        assert_eq!(m.trainable_names(), first);
    }

    #[test]
    fn num_classes_only_changes_final_layer() {
        let six = build_classifier(&ArchitectureConfig::tiny_test()).unwrap();
        let four = build_classifier(&ArchitectureConfig {
            num_classes: 4,
            ..ArchitectureConfig::tiny_test()
        })
        .unwrap();
        assert_eq!(four.num_classes(), 4);
        assert_eq!(
            six.partition_bytes(Partition::Backbone).unwrap(),
            four.partition_bytes(Partition::Backbone).unwrap()
        );
        let a = six.named_tensors();
        let b = four.named_tensors();
        for (name, t) in &a {
            if name.starts_with("head.logits") {
                assert_ne!(t.dims(), b[name].dims());
            } else {
                assert_eq!(t.dims(), b[name].dims(), "{name}");
            }
        }
    }

    #[test]
    fn pretrained_requires_weights() {
        let cfg = ArchitectureConfig {
            pretrained: true,
            ..ArchitectureConfig::tiny_test()
        };
        assert!(matches!(build_classifier(&cfg), Err(Error::PretrainedUnavailable(_))));
        let cfg = ArchitectureConfig {
            pretrained: true,
            pretrained_weights: Some("/nonexistent/imagenet.safetensors".into()),
            ..ArchitectureConfig::tiny_test()
        };
        assert!(matches!(build_classifier(&cfg), Err(Error::PretrainedUnavailable(_))));
    }

    #[test]
    fn pretrained_weights_load_into_backbone_only() {
        let source = build_classifier(&ArchitectureConfig { seed: 11, ..ArchitectureConfig::tiny_test() }).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("backbone.safetensors");
        let backbone: std::collections::HashMap<String, Tensor> = source
            .named_tensors()
            .into_iter()
            .filter_map(|(k, v)| k.strip_prefix("backbone.").map(|s| (s.to_string(), v)))
            .collect();
        candle_core::safetensors::save(&backbone, &path).unwrap();

        let fresh = build_classifier(&ArchitectureConfig::tiny_test()).unwrap();
        let loaded = build_classifier(&ArchitectureConfig {
            pretrained: true,
            pretrained_weights: Some(path),
            ..ArchitectureConfig::tiny_test()
        })
        .unwrap();
        assert_eq!(
            loaded.partition_bytes(Partition::Backbone).unwrap(),
            source.partition_bytes(Partition::Backbone).unwrap()
        );
        assert_eq!(
            loaded.partition_bytes(Partition::Head).unwrap(),
            fresh.partition_bytes(Partition::Head).unwrap()
        );
    }

    #[test]
    fn same_seed_same_weights() {
        let a = build_classifier(&ArchitectureConfig::tiny_test()).unwrap();
        let b = build_classifier(&ArchitectureConfig::tiny_test()).unwrap();
        let c = build_classifier(&ArchitectureConfig { seed: 1, ..ArchitectureConfig::tiny_test() }).unwrap();
        assert_eq!(a.partition_bytes(Partition::Head).unwrap(), b.partition_bytes(Partition::Head).unwrap());
        assert_ne!(a.partition_bytes(Partition::Head).unwrap(), c.partition_bytes(Partition::Head).unwrap());
    }
}
