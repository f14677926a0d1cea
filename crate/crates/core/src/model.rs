//! Branch models, the stacking meta-model, their training loop and checkpoints.
//!
//! A branch is `backbone → global average pooling → dense(ReLU) → dropout →
//! dense(4, sigmoid)`. The two branch outputs are concatenated into an
//! 8-vector and fed to the meta-model: two dense-ReLU, dropout, two
//! dense-ReLU, dropout, three dense-ReLU and a 4-unit sigmoid output.

use std::fmt::Write as _;
use std::fs;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::labels::{self, decode, encode, Grade, OrdinalVector, DEFAULT_DECODE_THRESHOLD, ORDINAL_BITS};
use crate::metrics::{self, Averaging, MetricsReport};
use crate::nn::{self, Adam, Layer, LayerKind, Network, Tensor};
use crate::preprocess::{augment, AugmentConfig, ImageGrid};
use crate::shapecalc::{self, ChainShape, ConvSpec, LayerGeom, PoolSpec, VolumeShape};

pub const BCE_EPSILON: f64 = 1e-7;

/// Mean binary cross-entropy over the four ordinal positions, with
/// predictions clipped to `[ε, 1 − ε]`.
pub fn bce_loss(pred: &OrdinalVector, target: &OrdinalVector) -> f64 {
    pred.0
        .iter()
        .zip(&target.0)
        .map(|(&p, &t)| {
            let p = p.clamp(BCE_EPSILON, 1.0 - BCE_EPSILON);
            -(t * p.ln() + (1.0 - t) * (1.0 - p).ln())
        })
        .sum::<f64>()
        / ORDINAL_BITS as f64
}

/// Derivative of [`bce_loss`] with respect to each prediction (zero where clipping is active).
pub fn bce_grad(pred: &OrdinalVector, target: &OrdinalVector) -> [f64; ORDINAL_BITS] {
    let mut g = [0.0; ORDINAL_BITS];
    for (i, (&p, &t)) in pred.0.iter().zip(&target.0).enumerate() {
        if p <= BCE_EPSILON || p >= 1.0 - BCE_EPSILON {
            continue;
        }
        g[i] = ((1.0 - t) / (1.0 - p) - t / p) / ORDINAL_BITS as f64;
    }
    g
}

// ---------------------------------------------------------------------------
// Specs

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    pub name: String,
    pub pretrained: bool,
    /// Fraction of the backbone's convolution layers (from the input side) kept frozen.
    pub frozen_fraction: f64,
    pub input_size: usize,
    pub output_shape: VolumeShape,
}

impl BackboneSpec {
    /// Looks `name` up in the registry and fills in its output shape for `input_size`.
    pub fn from_registry(name: &str, frozen_fraction: f64, input_size: usize) -> Result<Self> {
        let entry = registry_entry(name)?;
        Ok(Self {
            name: entry.name.to_string(),
            pretrained: entry.pretrained,
            frozen_fraction,
            input_size,
            output_shape: entry.output_shape(input_size)?,
        })
    }
}

/// A known backbone. Desk-scale entries carry their own layer plan; pretrained
/// ones only record the published output volume for a 224×224 input.
#[derive(Debug, Clone, Copy)]
pub struct RegistryEntry {
    pub name: &'static str,
    pub pretrained: bool,
    blocks: Option<&'static [(usize, usize)]>,
    fixed_output: Option<VolumeShape>,
}

impl RegistryEntry {
    /// `(filter, width)` per conv block; each block is conv(same) → ReLU → 2×2 max pool.
    pub fn blocks(&self) -> Option<&'static [(usize, usize)]> {
        self.blocks
    }

    pub fn geometry(&self) -> Option<Vec<LayerGeom>> {
        self.blocks.map(|blocks| {
            blocks
                .iter()
                .flat_map(|&(f, k)| {
                    [
                        LayerGeom::Conv(ConvSpec::same(f, k)),
                        LayerGeom::Elementwise,
                        LayerGeom::Pool(PoolSpec::new(2, 2)),
                    ]
                })
                .collect()
        })
    }

    pub fn output_shape(&self, input_size: usize) -> Result<VolumeShape> {
        if let Some(shape) = self.fixed_output {
            if input_size != 224 {
                return Err(Error::ShapeMismatch(format!(
                    "backbone `{}` is registered for 224x224 input, not {input_size}",
                    self.name
                )));
            }
            return Ok(shape);
        }
        let geoms = self.geometry().expect("desk-scale entries have a layer plan");
        match shapecalc::validate_chain(VolumeShape::new(input_size, input_size, 3), &geoms)?.last() {
            Some(ChainShape::Volume(v)) => Ok(*v),
            _ => Err(Error::ShapeMismatch("backbone must end in a spatial volume".into())),
        }
    }
}

const TINY_CNN: &[(usize, usize)] = &[(3, 8), (3, 16), (3, 32)];
const TINY_CNN_WIDE: &[(usize, usize)] = &[(5, 12), (3, 24), (3, 48)];

pub const REGISTRY: &[RegistryEntry] = &[
    RegistryEntry {
        name: "tiny-cnn",
        pretrained: false,
        blocks: Some(TINY_CNN),
        fixed_output: None,
    },
    RegistryEntry {
        name: "tiny-cnn-wide",
        pretrained: false,
        blocks: Some(TINY_CNN_WIDE),
        fixed_output: None,
    },
    RegistryEntry {
        name: "densenet121",
        pretrained: true,
        blocks: None,
        fixed_output: Some(VolumeShape::new(7, 7, 1024)),
    },
    RegistryEntry {
        name: "inceptionv3",
        pretrained: true,
        blocks: None,
        fixed_output: Some(VolumeShape::new(5, 5, 2048)),
    },
];

pub fn registry_entry(name: &str) -> Result<&'static RegistryEntry> {
    REGISTRY
        .iter()
        .find(|e| e.name == name)
        .ok_or_else(|| Error::UnknownBackbone(name.to_string()))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BranchHeadSpec {
    pub dense_width: usize,
    pub dropout_rate: f64,
    pub output_units: usize,
}

impl Default for BranchHeadSpec {
    fn default() -> Self {
        Self {
            dense_width: 256,
            dropout_rate: 0.5,
            output_units: ORDINAL_BITS,
        }
    }
}

impl BranchHeadSpec {
    pub fn validate(&self) -> Result<()> {
        if self.output_units != ORDINAL_BITS {
            return Err(Error::InvalidConfig(format!(
                "branch head must emit {ORDINAL_BITS} units, got {}",
                self.output_units
            )));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        if self.dense_width == 0 {
            return Err(Error::InvalidConfig("branch dense width must be >= 1".into()));
        }
        Ok(())
    }

    pub fn geometry(&self) -> Vec<LayerGeom> {
        vec![
            LayerGeom::GlobalAvgPool,
            LayerGeom::Dense(self.dense_width),
            LayerGeom::Elementwise,
            LayerGeom::Elementwise,
            LayerGeom::Dense(self.output_units),
            LayerGeom::Elementwise,
        ]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum MetaStep {
    DenseRelu,
    Dropout,
    Sigmoid,
}

/// Required meta-model step order.
pub const META_LAYER_PLAN: [MetaStep; 10] = [
    MetaStep::DenseRelu,
    MetaStep::DenseRelu,
    MetaStep::Dropout,
    MetaStep::DenseRelu,
    MetaStep::DenseRelu,
    MetaStep::Dropout,
    MetaStep::DenseRelu,
    MetaStep::DenseRelu,
    MetaStep::DenseRelu,
    MetaStep::Sigmoid,
];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MetaModelSpec {
    pub layer_plan: Vec<MetaStep>,
    /// Widths of the seven dense-ReLU layers.
    pub widths: Vec<usize>,
    pub dropout_rate: f64,
}

impl Default for MetaModelSpec {
    fn default() -> Self {
        Self {
            layer_plan: META_LAYER_PLAN.to_vec(),
            widths: vec![64, 64, 32, 32, 16, 8, 4],
            dropout_rate: 0.5,
        }
    }
}

impl MetaModelSpec {
    pub fn validate(&self) -> Result<()> {
        if self.layer_plan != META_LAYER_PLAN {
            return Err(Error::SpecOrderViolation(format!("{:?}", self.layer_plan)));
        }
        let dense = META_LAYER_PLAN.iter().filter(|s| **s == MetaStep::DenseRelu).count();
        if self.widths.len() != dense {
            return Err(Error::SpecOrderViolation(format!(
                "{} widths for {dense} dense layers",
                self.widths.len()
            )));
        }
        if self.widths.last() != Some(&ORDINAL_BITS) {
            return Err(Error::SpecOrderViolation(format!(
                "final dense width must be {ORDINAL_BITS}, got {:?}",
                self.widths.last()
            )));
        }
        if self.widths.contains(&0) {
            return Err(Error::InvalidConfig("meta widths must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.dropout_rate) {
            return Err(Error::InvalidConfig(format!("dropout rate {} outside [0, 1)", self.dropout_rate)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum LossKind {
    BinaryCrossEntropy,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OptimizerKind {
    Adam,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub loss: LossKind,
    pub optimizer: OptimizerKind,
    pub learning_rate: f64,
    pub batch_size: usize,
    pub l2_on_dense: f64,
    pub dropout: f64,
    pub epochs: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self::base()
    }
}

impl TrainConfig {
    /// Branch-model hyperparameters.
    pub fn base() -> Self {
        Self {
            loss: LossKind::BinaryCrossEntropy,
            optimizer: OptimizerKind::Adam,
            learning_rate: 5e-5,
            batch_size: 32,
            l2_on_dense: 1e-3,
            dropout: 0.5,
            epochs: 15,
            seed: 0,
        }
    }

    /// Meta-model hyperparameters.
    pub fn meta() -> Self {
        Self {
            batch_size: 64,
            epochs: 200,
            ..Self::base()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.learning_rate > 0.0 && self.learning_rate.is_finite()) {
            return Err(Error::InvalidConfig(format!("learning rate {} must be positive", self.learning_rate)));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch size must be >= 1".into()));
        }
        if self.l2_on_dense < 0.0 {
            return Err(Error::InvalidConfig("l2 coefficient must be >= 0".into()));
        }
        if !(0.0..1.0).contains(&self.dropout) {
            return Err(Error::InvalidConfig(format!("dropout {} outside [0, 1)", self.dropout)));
        }
        Ok(())
    }
}

fn fingerprint_of<T: Serialize>(value: &T) -> String {
    let bytes = serde_json::to_vec(value).expect("specs serialize");
    Sha256::digest(&bytes).iter().map(|b| format!("{b:02x}")).collect()
}

// ---------------------------------------------------------------------------
// Models

#[derive(Debug, Clone, PartialEq)]
pub struct BranchModel {
    pub backbone: BackboneSpec,
    pub head: BranchHeadSpec,
    pub l2: f64,
    pub net: Network,
    /// Number of leading network layers that belong to the backbone.
    pub backbone_layers: usize,
}

/// Builds `backbone → GAP → dense-ReLU → dropout → dense-sigmoid(4)` with
/// Glorot-initialized weights drawn from `seed`.
pub fn build_branch(backbone: &BackboneSpec, head: &BranchHeadSpec, l2: f64, seed: u64) -> Result<BranchModel> {
    head.validate()?;
    let entry = registry_entry(&backbone.name)?;
    let Some(blocks) = entry.blocks() else {
        return Err(Error::PretrainedUnavailable(backbone.name.clone()));
    };
    if !(0.0..=1.0).contains(&backbone.frozen_fraction) {
        return Err(Error::InvalidConfig(format!(
            "frozen_fraction {} outside [0, 1]",
            backbone.frozen_fraction
        )));
    }
    let expected = entry.output_shape(backbone.input_size)?;
    if expected != backbone.output_shape {
        return Err(Error::ShapeMismatch(format!(
            "backbone `{}` produces {:?} for {}px input, spec says {:?}",
            backbone.name, expected, backbone.input_size, backbone.output_shape
        )));
    }
    let head_shapes = shapecalc::validate_chain(backbone.output_shape, &head.geometry())?;
    if head_shapes.last() != Some(&ChainShape::Vector(ORDINAL_BITS)) {
        return Err(Error::ShapeMismatch(format!("head ends in {:?}", head_shapes.last())));
    }

    let mut rng = nn::seeded_rng(seed);
    let frozen_convs = (backbone.frozen_fraction * blocks.len() as f64).round() as usize;
    let mut layers = Vec::new();
    let mut channels = 3;
    for (i, &(f, k)) in blocks.iter().enumerate() {
        let mut conv = nn::conv_layer(ConvSpec::same(f, k), channels, &mut rng);
        conv.set_trainable(i >= frozen_convs);
        layers.push(conv);
        layers.push(Layer::Relu);
        layers.push(Layer::MaxPool(PoolSpec::new(2, 2)));
        channels = k;
    }
    let backbone_layers = layers.len();
    let features = backbone.output_shape.depth;
    layers.push(Layer::GlobalAvgPool);
    layers.push(nn::dense_layer(features, head.dense_width, l2, &mut rng));
    layers.push(Layer::Relu);
    layers.push(Layer::Dropout(head.dropout_rate));
    layers.push(nn::dense_layer(head.dense_width, head.output_units, l2, &mut rng));
    layers.push(Layer::Sigmoid);

    let net = Network::new(VolumeShape::new(backbone.input_size, backbone.input_size, 3), layers)?;
    Ok(BranchModel {
        backbone: backbone.clone(),
        head: head.clone(),
        l2,
        net,
        backbone_layers,
    })
}

impl BranchModel {
    pub fn input_size(&self) -> usize {
        self.backbone.input_size
    }

    /// Layer kinds after the backbone, in order.
    pub fn head_kinds(&self) -> Vec<LayerKind> {
        self.net.kinds()[self.backbone_layers..].to_vec()
    }

    pub fn backbone_params(&self) -> Vec<f64> {
        self.net.layers[..self.backbone_layers]
            .iter()
            .filter_map(Layer::params)
            .flatten()
            .copied()
            .collect()
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(&("branch", &self.backbone, &self.head, self.l2))
    }

    fn to_tensor(&self, img: &ImageGrid) -> Result<Tensor> {
        let s = self.input_size();
        if img.shape() != (s, s, 3) {
            let (height, width, channels) = img.shape();
            return Err(Error::UnpreprocessedInput {
                expected: s,
                height,
                width,
                channels,
            });
        }
        Ok(image_tensor(img))
    }

    /// Inference on one preprocessed image.
    pub fn predict(&self, img: &ImageGrid) -> Result<OrdinalVector> {
        let out = self.net.forward(&self.to_tensor(img)?)?;
        OrdinalVector::from_slice(&out.data)
    }

    pub fn predict_batch(&self, images: &[Arc<ImageGrid>]) -> Result<Vec<OrdinalVector>> {
        images.par_iter().map(|img| self.predict(img)).collect()
    }
}

fn image_tensor(img: &ImageGrid) -> Tensor {
    let (h, w, c) = img.shape();
    Tensor::new(h, w, c, img.pixels().to_vec())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetaModel {
    pub spec: MetaModelSpec,
    pub l2: f64,
    pub input_width: usize,
    pub net: Network,
}

pub const STACKED_WIDTH: usize = 2 * ORDINAL_BITS;

pub fn build_meta(spec: &MetaModelSpec, l2: f64, seed: u64) -> Result<MetaModel> {
    spec.validate()?;
    let mut rng = nn::seeded_rng(seed);
    let mut widths = spec.widths.iter();
    let mut layers = Vec::new();
    let mut prev = STACKED_WIDTH;
    for step in &spec.layer_plan {
        match step {
            MetaStep::DenseRelu => {
                let w = *widths.next().expect("validated width count");
                layers.push(nn::dense_layer(prev, w, l2, &mut rng));
                layers.push(Layer::Relu);
                prev = w;
            }
            MetaStep::Dropout => layers.push(Layer::Dropout(spec.dropout_rate)),
            MetaStep::Sigmoid => {
                layers.push(nn::dense_layer(prev, ORDINAL_BITS, l2, &mut rng));
                layers.push(Layer::Sigmoid);
            }
        }
    }
    let net = Network::new(VolumeShape::new(1, 1, STACKED_WIDTH), layers)?;
    Ok(MetaModel {
        spec: spec.clone(),
        l2,
        input_width: STACKED_WIDTH,
        net,
    })
}

impl MetaModel {
    /// Recovers the step sequence from the built network.
    pub fn structural_plan(&self) -> Vec<MetaStep> {
        let kinds = self.net.kinds();
        let mut plan = Vec::new();
        let mut i = 0;
        while i < kinds.len() {
            match (kinds[i], kinds.get(i + 1)) {
                (LayerKind::Dense, Some(LayerKind::Relu)) => {
                    plan.push(MetaStep::DenseRelu);
                    i += 2;
                }
                (LayerKind::Dense, Some(LayerKind::Sigmoid)) => {
                    plan.push(MetaStep::Sigmoid);
                    i += 2;
                }
                (LayerKind::Dropout, _) => {
                    plan.push(MetaStep::Dropout);
                    i += 1;
                }
                _ => break,
            }
        }
        plan
    }

    pub fn fingerprint(&self) -> String {
        fingerprint_of(&("meta", &self.spec, self.l2, self.input_width))
    }

    pub fn predict(&self, features: &StackedFeatures) -> Result<OrdinalVector> {
        let out = self.net.forward(&Tensor::vector(features.0.to_vec()))?;
        OrdinalVector::from_slice(&out.data)
    }

    pub fn predict_batch(&self, features: &[StackedFeatures]) -> Result<Vec<OrdinalVector>> {
        features.par_iter().map(|f| self.predict(f)).collect()
    }
}

/// Concatenated branch outputs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StackedFeatures(pub [f64; STACKED_WIDTH]);

pub fn stack_features(p1: &OrdinalVector, p2: &OrdinalVector) -> StackedFeatures {
    let mut out = [0.0; STACKED_WIDTH];
    out[..ORDINAL_BITS].copy_from_slice(&p1.0);
    out[ORDINAL_BITS..].copy_from_slice(&p2.0);
    StackedFeatures(out)
}

// ---------------------------------------------------------------------------
// Data

/// Preprocessed images with their grades. Images are shared so resampled
/// duplicates cost no extra memory.
#[derive(Debug, Clone, Default)]
pub struct LabeledImages {
    pub images: Vec<Arc<ImageGrid>>,
    pub grades: Vec<Grade>,
}

impl LabeledImages {
    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }
}

#[derive(Debug, Clone, Default)]
pub struct StackedSet {
    pub features: Vec<StackedFeatures>,
    pub grades: Vec<Grade>,
}

impl StackedSet {
    pub fn len(&self) -> usize {
        self.grades.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grades.is_empty()
    }
}

/// Runs both branches over `data` (no augmentation) and stacks their outputs.
pub fn extract_stacked(branches: &[BranchModel], data: &LabeledImages) -> Result<StackedSet> {
    if branches.len() != 2 {
        return Err(Error::ShapeMismatch(format!("stacking needs 2 branches, got {}", branches.len())));
    }
    let p1 = branches[0].predict_batch(&data.images)?;
    let p2 = branches[1].predict_batch(&data.images)?;
    Ok(StackedSet {
        features: p1.iter().zip(&p2).map(|(a, b)| stack_features(a, b)).collect(),
        grades: data.grades.clone(),
    })
}

// ---------------------------------------------------------------------------
// Training

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub train_acc: f64,
    pub val_loss: f64,
    pub val_acc: f64,
    pub val_qwk: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainingHistory {
    pub records: Vec<EpochRecord>,
    /// 1-based epoch whose weights were kept.
    pub best_epoch: Option<usize>,
}

impl TrainingHistory {
    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn best(&self) -> Option<&EpochRecord> {
        self.best_epoch.and_then(|e| self.records.get(e - 1))
    }

    pub fn max_val_qwk(&self) -> Option<f64> {
        self.records.iter().map(|r| r.val_qwk).reduce(f64::max)
    }

    /// `epoch,train_loss,val_loss,val_acc,val_qwk`
    pub fn to_history_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,val_acc,val_qwk\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.val_acc, r.val_qwk);
        }
        s
    }

    /// `epoch,train_loss,val_loss,train_acc,val_acc`
    pub fn to_curves_csv(&self) -> String {
        let mut s = String::from("epoch,train_loss,val_loss,train_acc,val_acc\n");
        for r in &self.records {
            let _ = writeln!(s, "{},{},{},{},{}", r.epoch, r.train_loss, r.val_loss, r.train_acc, r.val_acc);
        }
        s
    }

    pub fn from_history_csv(text: &str) -> Result<Self> {
        let mut records = Vec::new();
        for line in text.lines().skip(1).filter(|l| !l.trim().is_empty()) {
            let cols: Vec<&str> = line.split(',').collect();
            let bad = || Error::Checkpoint(format!("bad history line `{line}`"));
            if cols.len() != 5 {
                return Err(bad());
            }
            let num = |i: usize| cols[i].trim().parse::<f64>().map_err(|_| bad());
            records.push(EpochRecord {
                epoch: cols[0].trim().parse().map_err(|_| bad())?,
                train_loss: num(1)?,
                train_acc: f64::NAN,
                val_loss: num(2)?,
                val_acc: num(3)?,
                val_qwk: num(4)?,
            });
        }
        Ok(Self { records, best_epoch: None })
    }
}

struct SampleOutcome {
    loss: f64,
    grade: Grade,
    grads: Vec<Vec<f64>>,
}

/// Minibatch BCE training with Adam; keeps the weights from the epoch with the
/// highest validation QWK (earliest on ties).
///
/// `train_input(i, rng)` produces the i-th training input; the rng is private
/// to that sample so batches can be evaluated in parallel deterministically.
fn fit<F>(
    net: &mut Network,
    train_input: F,
    train_grades: &[Grade],
    val_inputs: &[Tensor],
    val_grades: &[Grade],
    cfg: &TrainConfig,
) -> Result<TrainingHistory>
where
    F: Fn(usize, &mut ChaCha8Rng) -> Tensor + Sync,
{
    cfg.validate()?;
    if train_grades.is_empty() || val_grades.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let mut history = TrainingHistory::default();
    if cfg.epochs == 0 {
        return Ok(history);
    }
    let targets: Vec<OrdinalVector> = train_grades.iter().map(|&g| encode(g)).collect();
    let mut adam = Adam::new(net, cfg.learning_rate);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut order: Vec<usize> = (0..train_grades.len()).collect();
    let mut best: Option<(f64, usize, Vec<f64>)> = None;

    for epoch in 1..=cfg.epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut correct = 0usize;
        for (batch_idx, batch) in order.chunks(cfg.batch_size).enumerate() {
            let seeds: Vec<u64> = batch.iter().map(|_| rng.gen()).collect();
            let frozen = &*net;
            let outcomes: Vec<Result<SampleOutcome>> = batch
                .par_iter()
                .zip(seeds.par_iter())
                .map(|(&i, &seed)| {
                    let mut srng = ChaCha8Rng::seed_from_u64(seed);
                    let x = train_input(i, &mut srng);
                    let trace = frozen.forward_train(&x, &mut srng)?;
                    let pred = OrdinalVector::from_slice(&trace.output.data)?;
                    let target = &targets[i];
                    // sigmoid and BCE fused: d loss / d logit = (p - t) / 4
                    let upstream: Vec<f64> = pred
                        .0
                        .iter()
                        .zip(&target.0)
                        .map(|(p, t)| (p - t) / ORDINAL_BITS as f64)
                        .collect();
                    let mut grads = frozen.zero_grads();
                    frozen.backward_from_logits(&trace, Tensor::vector(upstream), &mut grads);
                    Ok(SampleOutcome {
                        loss: bce_loss(&pred, target),
                        grade: decode(&pred, DEFAULT_DECODE_THRESHOLD),
                        grads,
                    })
                })
                .collect();

            let mut total = net.zero_grads();
            let mut batch_loss = 0.0;
            for (outcome, &i) in outcomes.into_iter().zip(batch) {
                let o = outcome?;
                batch_loss += o.loss;
                correct += usize::from(o.grade == train_grades[i]);
                for (t, g) in total.iter_mut().zip(&o.grads) {
                    for (a, b) in t.iter_mut().zip(g) {
                        *a += b;
                    }
                }
            }
            let n = batch.len() as f64;
            total.iter_mut().flatten().for_each(|g| *g /= n);
            let penalty = net.add_l2(&mut total);
            if !(batch_loss.is_finite() && penalty.is_finite()) || total.iter().flatten().any(|g| !g.is_finite()) {
                return Err(Error::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    detail: format!("batch loss {batch_loss}, l2 penalty {penalty}"),
                });
            }
            loss_sum += batch_loss;
            adam.step(net, &total);
        }

        let (val_loss, val_acc, val_qwk) = evaluate_inputs(net, val_inputs, val_grades)?;
        if !val_loss.is_finite() {
            return Err(Error::NonFiniteLoss {
                epoch,
                batch: usize::MAX,
                detail: format!("validation loss {val_loss}"),
            });
        }
        let n = train_grades.len() as f64;
        history.records.push(EpochRecord {
            epoch,
            train_loss: loss_sum / n,
            train_acc: correct as f64 / n,
            val_loss,
            val_acc,
            val_qwk,
        });
        log::debug!(
            "epoch {epoch}: train_loss {:.4} val_loss {val_loss:.4} val_acc {val_acc:.3} val_qwk {val_qwk:.3}",
            loss_sum / n
        );
        if best.as_ref().map_or(true, |(q, _, _)| val_qwk > *q) {
            best = Some((val_qwk, epoch, net.flat_params()));
        }
    }

    if let Some((_, epoch, params)) = best {
        net.load_flat_params(&params)?;
        history.best_epoch = Some(epoch);
    }
    Ok(history)
}

fn evaluate_inputs(net: &Network, inputs: &[Tensor], grades: &[Grade]) -> Result<(f64, f64, f64)> {
    let preds: Vec<OrdinalVector> = inputs
        .par_iter()
        .map(|x| OrdinalVector::from_slice(&net.forward(x)?.data))
        .collect::<Result<_>>()?;
    let n = grades.len() as f64;
    let loss = preds.iter().zip(grades).map(|(p, &g)| bce_loss(p, &encode(g))).sum::<f64>() / n;
    let decoded: Vec<Grade> = preds.iter().map(|p| decode(p, DEFAULT_DECODE_THRESHOLD)).collect();
    let acc = decoded.iter().zip(grades).filter(|(a, b)| a == b).count() as f64 / n;
    let cm = metrics::confusion(grades, &decoded)?;
    let qwk = metrics::quadratic_weighted_kappa(&cm)?;
    Ok((loss, acc, qwk))
}

/// Trains the branch on augmented training images, validating on `val` after each epoch.
pub fn train_branch(
    model: &mut BranchModel,
    train: &LabeledImages,
    val: &LabeledImages,
    cfg: &TrainConfig,
    augmentation: Option<&AugmentConfig>,
) -> Result<TrainingHistory> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    for img in train.images.iter().chain(&val.images) {
        model.to_tensor(img)?;
    }
    if let Some(aug) = augmentation {
        aug.validate()?;
    }
    let val_inputs: Vec<Tensor> = val.images.iter().map(|img| image_tensor(img)).collect();
    let input = |i: usize, rng: &mut ChaCha8Rng| match augmentation {
        Some(aug) => image_tensor(&augment(&train.images[i], aug, rng)),
        None => image_tensor(&train.images[i]),
    };
    fit(&mut model.net, input, &train.grades, &val_inputs, &val.grades, cfg)
}

pub fn train_meta(meta: &mut MetaModel, train: &StackedSet, val: &StackedSet, cfg: &TrainConfig) -> Result<TrainingHistory> {
    if train.is_empty() || val.is_empty() {
        return Err(Error::EmptyDataset);
    }
    let val_inputs: Vec<Tensor> = val.features.iter().map(|f| Tensor::vector(f.0.to_vec())).collect();
    let input = |i: usize, _: &mut ChaCha8Rng| Tensor::vector(train.features[i].0.to_vec());
    fit(&mut meta.net, input, &train.grades, &val_inputs, &val.grades, cfg)
}

/// Branches → stack → meta → decode at 0.5.
pub fn predict(branches: &[BranchModel], meta: &MetaModel, img: &ImageGrid) -> Result<(Grade, OrdinalVector)> {
    if branches.len() * ORDINAL_BITS != meta.input_width {
        return Err(Error::ShapeMismatch(format!(
            "meta-model takes {} inputs but {} branches give {}",
            meta.input_width,
            branches.len(),
            branches.len() * ORDINAL_BITS
        )));
    }
    let p1 = branches[0].predict(img)?;
    let p2 = branches[1].predict(img)?;
    let probs = meta.predict(&stack_features(&p1, &p2))?;
    Ok((decode(&probs, DEFAULT_DECODE_THRESHOLD), probs))
}

pub fn predict_batch(
    branches: &[BranchModel],
    meta: &MetaModel,
    images: &[Arc<ImageGrid>],
) -> Result<Vec<(Grade, OrdinalVector)>> {
    images.par_iter().map(|img| predict(branches, meta, img)).collect()
}

/// Scores decoded predictions against `grades`.
pub fn score(grades: &[Grade], probs: &[OrdinalVector], averaging: Averaging) -> Result<MetricsReport> {
    let decoded: Vec<Grade> = probs.iter().map(|p| labels::decode(p, DEFAULT_DECODE_THRESHOLD)).collect();
    metrics::evaluate(grades, &decoded, averaging)
}

// ---------------------------------------------------------------------------
// Checkpoints

const WEIGHTS_MAGIC: &[u8; 8] = b"DRGW0001";

/// Serialized weights plus a plain-text sidecar with the producing spec's
/// fingerprint, the kept epoch, a metrics snapshot and the training history.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub weights: Vec<f64>,
    pub spec_fingerprint: String,
    pub epoch: usize,
    pub metrics_snapshot: Option<MetricsReport>,
    pub history: TrainingHistory,
}

impl Checkpoint {
    pub fn weights_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.weights"))
    }

    pub fn sidecar_path(dir: &Path, name: &str) -> PathBuf {
        dir.join(format!("{name}.meta.txt"))
    }

    pub fn save(&self, dir: &Path, name: &str) -> Result<()> {
        fs::create_dir_all(dir)?;
        let mut blob = Vec::with_capacity(16 + 8 * self.weights.len());
        blob.extend_from_slice(WEIGHTS_MAGIC);
        blob.extend_from_slice(&(self.weights.len() as u64).to_le_bytes());
        for w in &self.weights {
            blob.extend_from_slice(&w.to_le_bytes());
        }
        fs::write(Self::weights_path(dir, name), blob)?;

        let mut side = fs::File::create(Self::sidecar_path(dir, name))?;
        writeln!(side, "fingerprint: {}", self.spec_fingerprint)?;
        writeln!(side, "epoch: {}", self.epoch)?;
        writeln!(side, "parameters: {}", self.weights.len())?;
        if let Some(m) = &self.metrics_snapshot {
            writeln!(side, "metrics: {}", m.to_json())?;
        }
        writeln!(side, "history:")?;
        side.write_all(self.history.to_history_csv().as_bytes())?;
        Ok(())
    }

    /// Loads and checks the fingerprint against `expected_fingerprint`.
    pub fn load(dir: &Path, name: &str, expected_fingerprint: &str) -> Result<Self> {
        let side = fs::read_to_string(Self::sidecar_path(dir, name))?;
        let mut fingerprint = None;
        let mut epoch = None;
        let mut metrics_snapshot = None;
        let mut history = TrainingHistory::default();
        let mut lines = side.lines();
        while let Some(line) = lines.next() {
            if let Some(v) = line.strip_prefix("fingerprint: ") {
                fingerprint = Some(v.trim().to_string());
            } else if let Some(v) = line.strip_prefix("epoch: ") {
                epoch = v.trim().parse().ok();
            } else if let Some(v) = line.strip_prefix("metrics: ") {
                metrics_snapshot = Some(MetricsReport::from_json(&serde_json::from_str(v)?)?);
            } else if line == "history:" {
                let rest: Vec<&str> = lines.by_ref().collect();
                history = TrainingHistory::from_history_csv(&rest.join("\n"))?;
                break;
            }
        }
        let fingerprint = fingerprint.ok_or_else(|| Error::Checkpoint("sidecar lacks a fingerprint".into()))?;
        if fingerprint != expected_fingerprint {
            return Err(Error::FingerprintMismatch {
                expected: expected_fingerprint.to_string(),
                found: fingerprint,
            });
        }
        let epoch = epoch.ok_or_else(|| Error::Checkpoint("sidecar lacks an epoch".into()))?;
        if epoch > 0 {
            history.best_epoch = Some(epoch);
        }

        let blob = fs::read(Self::weights_path(dir, name))?;
        if blob.len() < 16 || &blob[..8] != WEIGHTS_MAGIC {
            return Err(Error::Checkpoint("weights file has a bad header".into()));
        }
        let count = u64::from_le_bytes(blob[8..16].try_into().expect("8 bytes")) as usize;
        if blob.len() != 16 + 8 * count {
            return Err(Error::Checkpoint(format!(
                "weights file holds {} bytes, header claims {count} values",
                blob.len()
            )));
        }
        let weights = blob[16..]
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        Ok(Self {
            weights,
            spec_fingerprint: fingerprint,
            epoch,
            metrics_snapshot,
            history,
        })
    }
}

impl BranchModel {
    pub fn checkpoint(&self, history: &TrainingHistory, metrics: Option<MetricsReport>) -> Checkpoint {
        Checkpoint {
            weights: self.net.flat_params(),
            spec_fingerprint: self.fingerprint(),
            epoch: history.best_epoch.unwrap_or(0),
            metrics_snapshot: metrics,
            history: history.clone(),
        }
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.spec_fingerprint != self.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint(),
                found: ckpt.spec_fingerprint.clone(),
            });
        }
        self.net.load_flat_params(&ckpt.weights)
    }
}

impl MetaModel {
    pub fn checkpoint(&self, history: &TrainingHistory, metrics: Option<MetricsReport>) -> Checkpoint {
        Checkpoint {
            weights: self.net.flat_params(),
            spec_fingerprint: self.fingerprint(),
            epoch: history.best_epoch.unwrap_or(0),
            metrics_snapshot: metrics,
            history: history.clone(),
        }
    }

    pub fn restore(&mut self, ckpt: &Checkpoint) -> Result<()> {
        if ckpt.spec_fingerprint != self.fingerprint() {
            return Err(Error::FingerprintMismatch {
                expected: self.fingerprint(),
                found: ckpt.spec_fingerprint.clone(),
            });
        }
        self.net.load_flat_params(&ckpt.weights)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn tiny(input: usize, frozen: f64) -> BranchModel {
        let backbone = BackboneSpec::from_registry("tiny-cnn", frozen, input).unwrap();
        build_branch(&backbone, &BranchHeadSpec::default(), 1e-3, 1).unwrap()
    }

    fn random_images(n: usize, size: usize, seed: u64) -> Vec<Arc<ImageGrid>> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        (0..n)
            .map(|_| Arc::new(ImageGrid::new(size, size, 3, (0..size * size * 3).map(|_| rng.gen()).collect()).unwrap()))
            .collect()
    }

    #[test]
    fn bce_examples() {
        let t = OrdinalVector([1.0, 1.0, 0.0, 0.0]);
        assert!(bce_loss(&t, &t) < 1e-6);
        let half = OrdinalVector([0.5; 4]);
        assert!((bce_loss(&half, &t) - std::f64::consts::LN_2).abs() < 1e-12);
        let p = OrdinalVector([0.9, 0.8, 0.2, 0.1]);
        let expected = (-(0.9f64.ln()) - 0.8f64.ln() - 0.8f64.ln() - 0.9f64.ln()) / 4.0;
        assert!((bce_loss(&p, &t) - expected).abs() < 1e-12);
        assert!((bce_loss(&p, &t) - 0.1643).abs() < 1e-4);
        let one = OrdinalVector([1.0, 0.0, 0.0, 0.0]);
        assert!(bce_loss(&one, &one) < 1e-6);
    }

    #[test]
    fn bce_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        for _ in 0..20 {
            let p = OrdinalVector(std::array::from_fn(|_| rng.gen_range(0.02..0.98)));
            let t = OrdinalVector(std::array::from_fn(|_| f64::from(rng.gen_bool(0.5) as u8)));
            let g = bce_grad(&p, &t);
            let h = 1e-6;
            for i in 0..4 {
                let mut up = p;
                up.0[i] += h;
                let mut down = p;
                down.0[i] -= h;
                let fd = (bce_loss(&up, &t) - bce_loss(&down, &t)) / (2.0 * h);
                assert!((fd - g[i]).abs() <= 1e-4 * fd.abs().max(1e-12));
            }
        }
    }

    #[test]
    fn registry_shapes() {
        assert_eq!(registry_entry("tiny-cnn").unwrap().output_shape(224).unwrap(), VolumeShape::new(28, 28, 32));
        assert_eq!(registry_entry("tiny-cnn-wide").unwrap().output_shape(64).unwrap(), VolumeShape::new(8, 8, 48));
        assert_eq!(registry_entry("densenet121").unwrap().output_shape(224).unwrap(), VolumeShape::new(7, 7, 1024));
        assert!(matches!(registry_entry("vgg16"), Err(Error::UnknownBackbone(_))));
    }

    #[test]
    fn pretrained_backbones_are_not_buildable() {
        let spec = BackboneSpec::from_registry("densenet121", 1.0, 224).unwrap();
        assert!(spec.pretrained);
        assert!(matches!(
            build_branch(&spec, &BranchHeadSpec::default(), 1e-3, 0),
            Err(Error::PretrainedUnavailable(_))
        ));
    }

    #[test]
    fn wrong_output_shape_is_rejected() {
        let mut spec = BackboneSpec::from_registry("tiny-cnn", 1.0, 32).unwrap();
        spec.output_shape.depth = 7;
        assert!(matches!(
            build_branch(&spec, &BranchHeadSpec::default(), 1e-3, 0),
            Err(Error::ShapeMismatch(_))
        ));
    }

    #[test]
    fn branch_output_shape_and_range() {
        let model = tiny(32, 1.0);
        let imgs = random_images(2, 32, 1);
        let out = model.predict_batch(&imgs).unwrap();
        assert_eq!(out.len(), 2);
        for p in out {
            assert!(p.0.iter().all(|&v| v > 0.0 && v < 1.0));
        }
        assert_eq!(
            model.head_kinds(),
            vec![
                LayerKind::GlobalAvgPool,
                LayerKind::Dense,
                LayerKind::Relu,
                LayerKind::Dropout,
                LayerKind::Dense,
                LayerKind::Sigmoid
            ]
        );
        let shapes = model.net.output_shapes().unwrap();
        let head = shapecalc::validate_chain(model.backbone.output_shape, &model.head.geometry()).unwrap();
        assert_eq!(&shapes[model.backbone_layers..], &head[..]);
        let bad = ImageGrid::filled(16, 16, 3, 0.0).unwrap();
        assert!(matches!(model.predict(&bad), Err(Error::UnpreprocessedInput { .. })));
    }

    #[test]
    fn freezing_keeps_backbone_fixed() {
        let mut model = tiny(16, 1.0);
        let before = model.backbone_params();
        let images = random_images(4, 16, 2);
        let train = LabeledImages {
            images: images.clone(),
            grades: Grade::ALL[..4].to_vec(),
        };
        let cfg = TrainConfig {
            epochs: 1,
            batch_size: 4,
            learning_rate: 1e-2,
            ..TrainConfig::base()
        };
        let head_before = model.net.flat_params();
        train_branch(&mut model, &train, &train, &cfg, None).unwrap();
        assert_eq!(model.backbone_params(), before);
        assert_ne!(model.net.flat_params(), head_before);

        let mut partial = tiny(16, 1.0 / 3.0);
        let before = partial.backbone_params();
        train_branch(&mut partial, &train, &train, &cfg, None).unwrap();
        let after = partial.backbone_params();
        let first_conv = 3 * 3 * 3 * 8 + 8;
        assert_eq!(&after[..first_conv], &before[..first_conv]);
        assert_ne!(&after[first_conv..], &before[first_conv..]);
    }

    #[test]
    fn meta_structure_and_parameter_count() {
        let meta = build_meta(&MetaModelSpec::default(), 1e-3, 0).unwrap();
        assert_eq!(meta.structural_plan(), META_LAYER_PLAN.to_vec());
        let widths = [8usize, 64, 64, 32, 32, 16, 8, 4, 4];
        let hand: usize = widths.windows(2).map(|w| w[0] * w[1] + w[1]).sum();
        assert_eq!(hand, 8592);
        assert_eq!(meta.net.param_count(), hand);
        let dropouts: Vec<f64> = meta
            .net
            .layers
            .iter()
            .filter_map(|l| if let Layer::Dropout(r) = l { Some(*r) } else { None })
            .collect();
        assert_eq!(dropouts, vec![0.5, 0.5]);
    }

    #[test]
    fn meta_rejects_bad_plans() {
        let mut spec = MetaModelSpec::default();
        spec.layer_plan.swap(2, 3);
        assert!(matches!(build_meta(&spec, 0.0, 0), Err(Error::SpecOrderViolation(_))));
        let spec = MetaModelSpec {
            widths: vec![64, 64, 32, 32, 16, 8, 3],
            ..MetaModelSpec::default()
        };
        assert!(matches!(build_meta(&spec, 0.0, 0), Err(Error::SpecOrderViolation(_))));
    }

    #[test]
    fn meta_inference_is_deterministic() {
        let meta = build_meta(&MetaModelSpec::default(), 1e-3, 3).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let feats: Vec<StackedFeatures> = (0..3).map(|_| StackedFeatures(std::array::from_fn(|_| rng.gen()))).collect();
        let a = meta.predict_batch(&feats).unwrap();
        let b = meta.predict_batch(&feats).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().flat_map(|p| p.0).all(|v| v > 0.0 && v < 1.0));
    }

    #[test]
    fn stack_is_concatenation() {
        let s = stack_features(&OrdinalVector([1.0, 1.0, 0.0, 0.0]), &OrdinalVector([1.0, 0.0, 0.0, 0.0]));
        assert_eq!(s.0, [1.0, 1.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0]);
        assert_eq!(stack_features(&OrdinalVector::default(), &OrdinalVector::default()).0, [0.0; 8]);
    }

    #[test]
    fn zero_epochs_leave_model_unchanged() {
        let mut meta = build_meta(&MetaModelSpec::default(), 1e-3, 0).unwrap();
        let before = meta.clone();
        let set = StackedSet {
            features: vec![StackedFeatures([0.5; 8])],
            grades: vec![Grade::new(1).unwrap()],
        };
        let cfg = TrainConfig { epochs: 0, ..TrainConfig::meta() };
        let history = train_meta(&mut meta, &set, &set, &cfg).unwrap();
        assert!(history.is_empty());
        assert_eq!(meta, before);
        assert!(matches!(train_meta(&mut meta, &StackedSet::default(), &set, &cfg), Err(Error::EmptyDataset)));
    }

    #[test]
    fn meta_learns_perfect_features() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let make = |n: usize, rng: &mut ChaCha8Rng| {
            let grades: Vec<Grade> = (0..n).map(|i| Grade::ALL[i % 5]).collect();
            let features = grades
                .iter()
                .map(|&g| {
                    let e = encode(g);
                    let _ = rng.gen::<u8>();
                    stack_features(&e, &e)
                })
                .collect();
            StackedSet { features, grades }
        };
        let train = make(200, &mut rng);
        let val = make(50, &mut rng);
        let mut meta = build_meta(&MetaModelSpec::default(), 1e-3, 7).unwrap();
        let cfg = TrainConfig {
            learning_rate: 1e-3,
            seed: 3,
            ..TrainConfig::meta()
        };
        let history = train_meta(&mut meta, &train, &val, &cfg).unwrap();
        assert_eq!(history.len(), 200);
        assert!(history.records.iter().all(|r| r.train_loss.is_finite() && r.val_loss.is_finite()));
        let best = history.best().unwrap();
        assert_eq!(best.val_acc, 1.0);
        assert_eq!(Some(best.val_qwk), history.max_val_qwk());
        let (_, acc, qwk) = evaluate_inputs(
            &meta.net,
            &val.features.iter().map(|f| Tensor::vector(f.0.to_vec())).collect::<Vec<_>>(),
            &val.grades,
        )
        .unwrap();
        assert_eq!(acc, 1.0);
        assert_eq!(qwk, best.val_qwk);
    }

    #[test]
    fn branch_loss_decreases_on_separable_data() {
        // grade 0 dark, grade 4 bright
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut images = Vec::new();
        let mut grades = Vec::new();
        for i in 0..40 {
            let g = if i % 2 == 0 { Grade::new(0).unwrap() } else { Grade::new(4).unwrap() };
            let base = if g.value() == 0 { 0.1 } else { 0.8 };
            let px = (0..16 * 16 * 3).map(|_| base + rng.gen_range(0.0..0.1)).collect();
            images.push(Arc::new(ImageGrid::new(16, 16, 3, px).unwrap()));
            grades.push(g);
        }
        let data = LabeledImages { images, grades };
        let mut model = tiny(16, 0.0);
        let cfg = TrainConfig {
            learning_rate: 3e-3,
            batch_size: 8,
            epochs: 15,
            seed: 1,
            ..TrainConfig::base()
        };
        let history = train_branch(&mut model, &data, &data, &cfg, Some(&AugmentConfig::default())).unwrap();
        assert_eq!(history.len(), 15);
        assert!(history.records.iter().all(|r| r.train_loss.is_finite()));
        assert!(history.records.last().unwrap().train_loss < history.records[0].train_loss);
    }

    #[test]
    fn predict_composes_branches_and_meta() {
        let branch = tiny(16, 1.0);
        // meta that copies its first four inputs: identity through every dense layer
        let mut meta = build_meta(&MetaModelSpec::default(), 0.0, 0).unwrap();
        let big = 40.0;
        let mut first = true;
        let mut prev = STACKED_WIDTH;
        for layer in meta.net.layers.iter_mut() {
            if let Layer::Dense(d) = layer {
                d.params.fill(0.0);
                for k in 0..ORDINAL_BITS.min(d.outputs) {
                    d.params[k * d.inputs + k] = 1.0;
                }
                if d.outputs == ORDINAL_BITS && d.inputs == ORDINAL_BITS && !first && prev == ORDINAL_BITS {
                    // final sigmoid layer maps p in {0,1} to a confident logit
                    for k in 0..4 {
                        d.params[k * 4 + k] = 2.0 * big;
                        d.params[16 + k] = -big;
                    }
                }
                prev = d.outputs;
                first = false;
            }
        }
        let img = ImageGrid::filled(16, 16, 3, 0.3).unwrap();
        let probe = stack_features(&encode(Grade::new(3).unwrap()), &OrdinalVector([0.9; 4]));
        let probs = meta.predict(&probe).unwrap();
        assert_eq!(decode(&probs, 0.5).value(), 3);

        let (grade, probs) = predict(&[branch.clone(), branch.clone()], &meta, &img).unwrap();
        assert!(grade.value() <= 4);
        assert!(probs.0.iter().all(|&p| p > 0.0 && p < 1.0));
        let imgs = random_images(3, 16, 5);
        let batch = predict_batch(&[branch.clone(), branch.clone()], &meta, &imgs).unwrap();
        for (img, b) in imgs.iter().zip(&batch) {
            assert_eq!(&predict(&[branch.clone(), branch.clone()], &meta, img).unwrap(), b);
        }
    }

    #[test]
    fn checkpoint_round_trip_and_fingerprint() {
        let dir = tempfile::tempdir().unwrap();
        let model = tiny(16, 1.0);
        let history = TrainingHistory {
            records: vec![EpochRecord {
                epoch: 1,
                train_loss: 0.5,
                train_acc: 0.5,
                val_loss: 0.6,
                val_acc: 0.4,
                val_qwk: 0.3,
            }],
            best_epoch: Some(1),
        };
        let ckpt = model.checkpoint(&history, None);
        ckpt.save(dir.path(), "branch_0").unwrap();
        let loaded = Checkpoint::load(dir.path(), "branch_0", &model.fingerprint()).unwrap();
        assert_eq!(loaded.weights, ckpt.weights);
        assert_eq!(loaded.epoch, 1);
        assert_eq!(loaded.history.records[0].val_qwk, 0.3);
        let mut fresh = tiny(16, 1.0);
        fresh.net.load_flat_params(&vec![0.0; fresh.net.param_count()]).unwrap();
        fresh.restore(&loaded).unwrap();
        assert_eq!(fresh.net, model.net);

        let other = tiny(32, 1.0);
        assert!(matches!(
            Checkpoint::load(dir.path(), "branch_0", &other.fingerprint()),
            Err(Error::FingerprintMismatch { .. })
        ));
    }
}
