//! Ingestion, synthetic data, splitting, configuration and the end-to-end
//! flow: split → resample (train only) → preprocess → train both branches →
//! stack → train meta → evaluate on validation.

use std::collections::{BTreeMap, HashMap, HashSet};
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::dataset::{DatasetManifest, SampleRecord, SplitTag};
use crate::error::{Error, Result};
use crate::labels::{self, Grade, OrdinalVector};
use crate::metrics::{Averaging, MetricsReport};
use crate::model::{
    self, BackboneSpec, BranchHeadSpec, BranchModel, Checkpoint, LabeledImages, MetaModel, MetaModelSpec,
    StackedSet, TrainConfig, TrainingHistory,
};
use crate::preprocess::{self, AugmentConfig, GaussianKernelSpec, ImageGrid, PreprocessConfig};

/// Where the raw images come from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct DataConfig {
    /// APTOS-layout CSV (`id_code,diagnosis`). When absent a synthetic set is generated.
    pub csv: Option<PathBuf>,
    pub image_dir: Option<PathBuf>,
    pub synthetic_per_class: usize,
    pub synthetic_size: usize,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            csv: None,
            image_dir: None,
            synthetic_per_class: 20,
            synthetic_size: 224,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub seed: u64,
    pub output_dir: PathBuf,
    /// Preprocessed-image cache; defaults to `<output_dir>/cache`.
    pub cache_dir: Option<PathBuf>,
    pub split_fraction: f64,
    pub resample_target: usize,
    pub augment_enabled: bool,
    /// Names from the backbone registry; exactly two.
    pub backbones: Vec<String>,
    pub backbone_frozen_fraction: f64,
    pub averaging: Averaging,
    pub data: DataConfig,
    pub preprocess: PreprocessConfig,
    pub augment: AugmentConfig,
    pub head: BranchHeadSpec,
    pub meta: MetaModelSpec,
    pub train_base: TrainConfig,
    pub train_meta: TrainConfig,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            output_dir: PathBuf::from("out"),
            cache_dir: None,
            split_fraction: 0.85,
            resample_target: 700,
            augment_enabled: true,
            backbones: vec!["densenet121".into(), "inceptionv3".into()],
            backbone_frozen_fraction: 1.0,
            averaging: Averaging::Weighted,
            data: DataConfig::default(),
            preprocess: PreprocessConfig::default(),
            augment: AugmentConfig::default(),
            head: BranchHeadSpec::default(),
            meta: MetaModelSpec::default(),
            train_base: TrainConfig::base(),
            train_meta: TrainConfig::meta(),
        }
    }
}

impl PipelineConfig {
    /// Desk-scale settings: 64 px synthetic images, the two tiny CNNs trained
    /// from scratch, short schedules and learning rates scaled up to match.
    pub fn smoke(output_dir: impl Into<PathBuf>) -> Self {
        let size = 64;
        Self {
            output_dir: output_dir.into(),
            resample_target: 200,
            backbones: vec!["tiny-cnn".into(), "tiny-cnn-wide".into()],
            backbone_frozen_fraction: 0.0,
            data: DataConfig {
                synthetic_per_class: 20,
                synthetic_size: size,
                ..DataConfig::default()
            },
            preprocess: PreprocessConfig {
                target_size: size,
                kernel: GaussianKernelSpec::for_sigma(10.0 * size as f64 / 224.0, size),
                ..PreprocessConfig::default()
            },
            head: BranchHeadSpec {
                dense_width: 64,
                ..BranchHeadSpec::default()
            },
            train_base: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 16,
                epochs: 5,
                ..TrainConfig::base()
            },
            train_meta: TrainConfig {
                learning_rate: 3e-3,
                batch_size: 32,
                epochs: 50,
                ..TrainConfig::meta()
            },
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.backbones.len() != 2 {
            return Err(Error::InvalidConfig(format!(
                "exactly two backbones required, got {}",
                self.backbones.len()
            )));
        }
        if !(self.split_fraction > 0.0 && self.split_fraction < 1.0) {
            return Err(Error::InvalidConfig(format!(
                "split_fraction {} outside (0, 1)",
                self.split_fraction
            )));
        }
        if self.resample_target == 0 {
            return Err(Error::InvalidConfig("resample_target must be >= 1".into()));
        }
        if self.data.csv.is_some() != self.data.image_dir.is_some() {
            return Err(Error::InvalidConfig("data.csv and data.image_dir go together".into()));
        }
        if self.data.csv.is_none() && (self.data.synthetic_per_class == 0 || self.data.synthetic_size < 8) {
            return Err(Error::InvalidConfig("synthetic data needs >= 1 image per class and >= 8 px".into()));
        }
        self.preprocess.validate()?;
        self.augment.validate()?;
        self.head.validate()?;
        self.meta.validate()?;
        self.train_base.validate()?;
        self.train_meta.validate()?;
        self.backbone_specs()?;
        Ok(())
    }

    pub fn backbone_specs(&self) -> Result<Vec<BackboneSpec>> {
        self.backbones
            .iter()
            .map(|name| BackboneSpec::from_registry(name, self.backbone_frozen_fraction, self.preprocess.target_size))
            .collect()
    }

    /// Head spec with the base training dropout applied.
    pub fn head_spec(&self) -> BranchHeadSpec {
        BranchHeadSpec {
            dropout_rate: self.train_base.dropout,
            ..self.head.clone()
        }
    }

    pub fn meta_spec(&self) -> MetaModelSpec {
        MetaModelSpec {
            dropout_rate: self.train_meta.dropout,
            ..self.meta.clone()
        }
    }

    pub fn cache_dir(&self) -> PathBuf {
        self.cache_dir.clone().unwrap_or_else(|| self.output_dir.join("cache"))
    }

    pub fn checkpoint_dir(&self) -> PathBuf {
        self.output_dir.join("checkpoints")
    }

    pub fn from_toml_str(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Self::from_toml_str(&fs::read_to_string(path)?)
    }

    /// Flat `section.key = value` lines, one per setting.
    pub fn to_flat_toml(&self) -> Result<String> {
        let value = toml::Value::try_from(self).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        let mut out = String::new();
        flatten_toml("", &value, &mut out);
        Ok(out)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, self.to_flat_toml()?)?;
        Ok(())
    }

    /// Per-purpose seed derived from the master seed.
    pub fn derived_seed(&self, purpose: &str, salt: u64) -> u64 {
        derive_seed(self.seed, purpose, salt)
    }
}

fn flatten_toml(prefix: &str, value: &toml::Value, out: &mut String) {
    match value {
        toml::Value::Table(table) => {
            for (k, v) in table {
                let key = if prefix.is_empty() { k.clone() } else { format!("{prefix}.{k}") };
                flatten_toml(&key, v, out);
            }
        }
        leaf => {
            let _ = writeln!(out, "{prefix} = {leaf}");
        }
    }
}

pub fn derive_seed(master: u64, purpose: &str, salt: u64) -> u64 {
    let mut h = Sha256::new();
    h.update(master.to_le_bytes());
    h.update(purpose.as_bytes());
    h.update(salt.to_le_bytes());
    u64::from_le_bytes(h.finalize()[..8].try_into().expect("8 bytes"))
}

// ---------------------------------------------------------------------------
// Ingestion

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Reject {
    /// 1-based data row.
    pub row: usize,
    pub id: String,
    pub reason: String,
}

#[derive(Debug, Clone)]
pub struct Ingested {
    pub manifest: DatasetManifest,
    pub rejects: Vec<Reject>,
}

fn find_image(image_dir: &Path, id: &str) -> Option<PathBuf> {
    ["png", "jpg", "jpeg"]
        .iter()
        .map(|ext| image_dir.join(format!("{id}.{ext}")))
        .find(|p| p.is_file())
}

/// Reads an APTOS-layout CSV. Rows with bad grades, duplicate ids or missing
/// or undecodable images are skipped and listed in `rejects`.
pub fn ingest_aptos(csv_path: impl AsRef<Path>, image_dir: impl AsRef<Path>) -> Result<Ingested> {
    let csv_path = csv_path.as_ref();
    let image_dir = image_dir.as_ref();
    let malformed = |detail: String| Error::MalformedCsv {
        path: csv_path.to_path_buf(),
        detail,
    };
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_path(csv_path)
        .map_err(|e| malformed(e.to_string()))?;
    let headers = rdr.headers().map_err(|e| malformed(e.to_string()))?.clone();
    let col = |name: &str| {
        headers
            .iter()
            .position(|h| h.trim_start_matches('\u{feff}') == name)
            .ok_or_else(|| malformed(format!("missing `{name}` column")))
    };
    let (id_col, grade_col) = (col("id_code")?, col("diagnosis")?);

    let mut records = Vec::new();
    let mut rejects = Vec::new();
    let mut seen = HashSet::new();
    for (i, row) in rdr.records().enumerate() {
        let row = row.map_err(|e| malformed(e.to_string()))?;
        let id = row.get(id_col).unwrap_or("").to_string();
        let mut reject = |reason: String| {
            rejects.push(Reject {
                row: i + 1,
                id: id.clone(),
                reason,
            })
        };
        if id.is_empty() {
            reject("empty id_code".into());
            continue;
        }
        let raw = row.get(grade_col).unwrap_or("");
        let grade = match raw.parse::<i64>().map_err(|_| ()).and_then(|g| Grade::new(g).map_err(|_| ())) {
            Ok(g) => g,
            Err(()) => {
                reject(format!("diagnosis `{raw}` is not a grade in 0..4"));
                continue;
            }
        };
        if !seen.insert(id.clone()) {
            reject("duplicate id_code".into());
            continue;
        }
        let Some(path) = find_image(image_dir, &id) else {
            reject("image not found".into());
            continue;
        };
        if let Err(e) = image::image_dimensions(&path) {
            reject(format!("image does not decode: {e}"));
            continue;
        }
        records.push(SampleRecord::new(id, path, grade));
    }
    if !rejects.is_empty() {
        log::warn!("{} of {} rows rejected from {}", rejects.len(), rejects.len() + records.len(), csv_path.display());
    }
    if records.is_empty() {
        return Err(Error::NoValidRecords(csv_path.to_path_buf()));
    }
    let manifest = DatasetManifest::new(records, SplitTag::Full, format!("aptos:{}", csv_path.display()))?;
    Ok(Ingested { manifest, rejects })
}

// ---------------------------------------------------------------------------
// Synthetic data

/// A fundus-like image: dark background, an orange disc, and `4 × grade`
/// bright lesion blobs scattered inside the disc.
pub fn synthetic_fundus<R: Rng + ?Sized>(grade: Grade, size: usize, rng: &mut R) -> ImageGrid {
    let s = size as f64;
    let center = s / 2.0;
    let disc_r = 0.45 * s;
    let jitter = 1.0 + rng.gen_range(-0.1..0.1);
    let base = [0.45 * jitter, 0.22 * jitter, 0.10 * jitter];
    let blob_r = (s / 20.0).max(1.5);
    let blobs: Vec<(f64, f64)> = (0..4 * grade.index())
        .map(|_| {
            let angle = rng.gen_range(0.0..std::f64::consts::TAU);
            let r = 0.75 * disc_r * rng.gen::<f64>().sqrt();
            (center + r * angle.cos(), center + r * angle.sin())
        })
        .collect();
    let mut px = Vec::with_capacity(size * size * 3);
    for y in 0..size {
        for x in 0..size {
            let (fx, fy) = (x as f64 + 0.5, y as f64 + 0.5);
            let inside = (fx - center).hypot(fy - center) <= disc_r;
            let lesion = inside && blobs.iter().any(|&(bx, by)| (fx - bx).hypot(fy - by) <= blob_r);
            let noise: f64 = rng.gen_range(-0.02..0.02);
            let rgb: [f64; 3] = if lesion {
                [0.95, 0.85, 0.45]
            } else if inside {
                base
            } else {
                [0.0; 3]
            };
            px.extend(rgb.iter().map(|v| if inside { (v + noise).clamp(0.0, 1.0) } else { 0.0 }));
        }
    }
    ImageGrid::new(size, size, 3, px).expect("valid synthetic image")
}

/// Writes `n_per_class` images per grade to `out_dir/images/` plus an APTOS
/// style `out_dir/labels.csv`, and returns the manifest.
pub fn generate_synthetic(n_per_class: usize, size: usize, seed: u64, out_dir: impl AsRef<Path>) -> Result<DatasetManifest> {
    if n_per_class == 0 {
        return Err(Error::InvalidConfig("n_per_class must be >= 1".into()));
    }
    let out_dir = out_dir.as_ref();
    let image_dir = out_dir.join("images");
    fs::create_dir_all(&image_dir)?;
    let items: Vec<(String, Grade)> = Grade::ALL
        .iter()
        .flat_map(|&g| (0..n_per_class).map(move |i| (format!("syn_g{}_{i:04}", g.value()), g)))
        .collect();
    let records: Vec<SampleRecord> = items
        .par_iter()
        .enumerate()
        .map(|(k, (id, grade))| {
            let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(seed, "synthetic", k as u64));
            let path = image_dir.join(format!("{id}.png"));
            synthetic_fundus(*grade, size, &mut rng).save(&path)?;
            Ok(SampleRecord::new(id.clone(), path, *grade))
        })
        .collect::<Result<_>>()?;
    let mut w = csv::Writer::from_path(out_dir.join("labels.csv"))?;
    w.write_record(["id_code", "diagnosis"])?;
    for r in &records {
        w.write_record([r.id.as_str(), &r.grade.value().to_string()])?;
    }
    w.flush()?;
    DatasetManifest::new(records, SplitTag::Full, format!("synthetic:n={n_per_class},size={size},seed={seed}"))
}

// ---------------------------------------------------------------------------
// Splitting

/// Stratified split: each grade contributes `round(n × fraction)` records
/// (at least one, at most `n − 1`) to training. Record order is preserved.
pub fn split(manifest: &DatasetManifest, split_fraction: f64, seed: u64) -> Result<(DatasetManifest, DatasetManifest)> {
    if !(split_fraction > 0.0 && split_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!("split_fraction {split_fraction} outside (0, 1)")));
    }
    if manifest.len() < 2 {
        return Err(Error::EmptyDataset);
    }
    let mut by_grade: BTreeMap<Grade, Vec<usize>> = BTreeMap::new();
    for (i, r) in manifest.records.iter().enumerate() {
        by_grade.entry(r.grade).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut in_train = vec![false; manifest.len()];
    for (&grade, idx) in &mut by_grade {
        let n = idx.len();
        if n < 2 {
            return Err(Error::ClassTooSmall { grade: grade.value(), count: n });
        }
        let n_train = ((n as f64 * split_fraction).round() as usize).clamp(1, n - 1);
        idx.shuffle(&mut rng);
        for &i in &idx[..n_train] {
            in_train[i] = true;
        }
    }
    let pick = |want: bool| -> Vec<SampleRecord> {
        manifest
            .records
            .iter()
            .zip(&in_train)
            .filter(|(_, &t)| t == want)
            .map(|(r, _)| r.clone())
            .collect()
    };
    let provenance = format!("{} | split fraction={split_fraction} seed={seed}", manifest.provenance);
    Ok((
        DatasetManifest::new(pick(true), SplitTag::Train, provenance.clone())?,
        DatasetManifest::new(pick(false), SplitTag::Val, provenance)?,
    ))
}

/// Every validation id appears once and no validation sample reaches training.
pub fn check_leakage(train: &DatasetManifest, val: &DatasetManifest) -> Result<()> {
    let train_sources: HashSet<&str> = train.records.iter().map(|r| r.source_id.as_str()).collect();
    let mut seen = HashSet::new();
    for r in &val.records {
        if !seen.insert(r.id.as_str()) || r.id != r.source_id {
            return Err(Error::IndexOutOfRange(format!("validation id `{}` is duplicated", r.id)));
        }
        if train_sources.contains(r.source_id.as_str()) {
            return Err(Error::IndexOutOfRange(format!("validation id `{}` also appears in training", r.id)));
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Preprocessing with a disk cache

fn to_rgb(img: ImageGrid) -> Result<ImageGrid> {
    match img.channels() {
        3 => Ok(img),
        1 => {
            let (h, w, _) = img.shape();
            let px = img.pixels().iter().flat_map(|&v| [v, v, v]).collect();
            ImageGrid::new(h, w, 3, px)
        }
        c => Err(Error::InvalidImage(format!("{c}-channel image"))),
    }
}

/// Loads an image from disk and runs the preprocessing chain on it.
pub fn load_preprocessed(path: &Path, cfg: &PreprocessConfig) -> Result<ImageGrid> {
    preprocess::preprocess_image(&to_rgb(ImageGrid::load(path)?)?, cfg)
}

fn config_hash(cfg: &PreprocessConfig) -> String {
    let bytes = serde_json::to_vec(cfg).expect("config serializes");
    Sha256::digest(&bytes)[..8].iter().map(|b| format!("{b:02x}")).collect()
}

fn read_cached(path: &Path) -> Option<ImageGrid> {
    let blob = fs::read(path).ok()?;
    let dims: Vec<usize> = blob
        .get(..24)?
        .chunks_exact(8)
        .map(|c| u64::from_le_bytes(c.try_into().expect("8 bytes")) as usize)
        .collect();
    let px: Vec<f64> = blob[24..]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    ImageGrid::new(dims[0], dims[1], dims[2], px).ok()
}

fn write_cached(path: &Path, img: &ImageGrid) -> Result<()> {
    let (h, w, c) = img.shape();
    let mut blob = Vec::with_capacity(24 + 8 * img.pixels().len());
    for d in [h, w, c] {
        blob.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for v in img.pixels() {
        blob.extend_from_slice(&v.to_le_bytes());
    }
    let tmp = path.with_extension("tmp");
    fs::write(&tmp, blob)?;
    fs::rename(tmp, path)?;
    Ok(())
}

/// Preprocesses every distinct source image of `manifest` (in parallel),
/// reusing cached results keyed by source id and config hash.
pub fn load_images(manifest: &DatasetManifest, cfg: &PreprocessConfig, cache_dir: Option<&Path>) -> Result<LabeledImages> {
    let cache = match cache_dir {
        Some(dir) => {
            let d = dir.join(config_hash(cfg));
            fs::create_dir_all(&d)?;
            Some(d)
        }
        None => None,
    };
    let mut unique: Vec<&SampleRecord> = Vec::new();
    let mut seen = HashSet::new();
    for r in &manifest.records {
        if seen.insert(r.source_id.as_str()) {
            unique.push(r);
        }
    }
    let loaded: Vec<(String, Arc<ImageGrid>)> = unique
        .par_iter()
        .map(|r| {
            let cached = cache.as_ref().map(|d| d.join(format!("{}.f64", r.source_id)));
            if let Some(img) = cached.as_deref().and_then(read_cached) {
                return Ok((r.source_id.clone(), Arc::new(img)));
            }
            let img = load_preprocessed(&r.image_path, cfg)
                .map_err(|e| Error::InvalidImage(format!("{}: {e}", r.image_path.display())))?;
            if let Some(p) = cached {
                write_cached(&p, &img)?;
            }
            Ok((r.source_id.clone(), Arc::new(img)))
        })
        .collect::<Result<_>>()?;
    let map: HashMap<String, Arc<ImageGrid>> = loaded.into_iter().collect();
    Ok(LabeledImages {
        images: manifest.records.iter().map(|r| Arc::clone(&map[&r.source_id])).collect(),
        grades: manifest.grades(),
    })
}

// ---------------------------------------------------------------------------
// Stages

/// Manifests and preprocessed images for one run.
#[derive(Debug, Clone)]
pub struct PreparedData {
    pub full: DatasetManifest,
    pub train: DatasetManifest,
    pub val: DatasetManifest,
    pub train_resampled: DatasetManifest,
    pub train_images: LabeledImages,
    pub val_images: LabeledImages,
    pub rejects: Vec<Reject>,
}

fn stage<T>(name: &'static str, r: Result<T>) -> Result<T> {
    r.map_err(|e| e.in_stage(name))
}

/// Ingests (or synthesizes) the data, then splits.
pub fn ingest_and_split(cfg: &PipelineConfig) -> Result<(DatasetManifest, DatasetManifest, DatasetManifest, Vec<Reject>)> {
    let (full, rejects) = stage("ingest", {
        match (&cfg.data.csv, &cfg.data.image_dir) {
            (Some(csv), Some(dir)) => ingest_aptos(csv, dir).map(|i| (i.manifest, i.rejects)),
            _ => generate_synthetic(
                cfg.data.synthetic_per_class,
                cfg.data.synthetic_size,
                cfg.derived_seed("synthetic", 0),
                cfg.output_dir.join("synthetic"),
            )
            .map(|m| (m, Vec::new())),
        }
    })?;
    let (train, val) = stage("split", split(&full, cfg.split_fraction, cfg.derived_seed("split", 0)))?;
    Ok((full, train, val, rejects))
}

pub fn prepare_data(cfg: &PipelineConfig) -> Result<PreparedData> {
    stage("config", cfg.validate())?;
    fs::create_dir_all(&cfg.output_dir)?;
    let (full, train, val, rejects) = ingest_and_split(cfg)?;
    let train_resampled = stage("resample", {
        labels::build_resample_plan(&train.class_counts(), cfg.resample_target, cfg.derived_seed("resample", 0))
            .and_then(|plan| labels::apply_resample_plan(&plan, &train))
    })?;
    stage("resample", check_leakage(&train_resampled, &val))?;

    let manifests = cfg.output_dir.join("manifests");
    stage("manifests", (|| {
        fs::create_dir_all(&manifests)?;
        full.write_csv(manifests.join("full.csv"))?;
        train.write_csv(manifests.join("train.csv"))?;
        val.write_csv(manifests.join("val.csv"))?;
        train_resampled.write_csv(manifests.join("train_resampled.csv"))
    })())?;

    let cache = cfg.cache_dir();
    let train_images = stage("preprocess", load_images(&train_resampled, &cfg.preprocess, Some(&cache)))?;
    let val_images = stage("preprocess", load_images(&val, &cfg.preprocess, Some(&cache)))?;
    log::info!(
        "data: {} records, {} train ({} after resampling), {} val",
        full.len(),
        train.len(),
        train_resampled.len(),
        val.len()
    );
    Ok(PreparedData {
        full,
        train,
        val,
        train_resampled,
        train_images,
        val_images,
        rejects,
    })
}

/// Everything needed to rebuild the trained ensemble, saved next to the checkpoints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelBundle {
    pub preprocess: PreprocessConfig,
    pub backbones: Vec<BackboneSpec>,
    pub head: BranchHeadSpec,
    pub branch_l2: f64,
    pub meta: MetaModelSpec,
    pub meta_l2: f64,
}

impl ModelBundle {
    pub fn from_config(cfg: &PipelineConfig) -> Result<Self> {
        Ok(Self {
            preprocess: cfg.preprocess.clone(),
            backbones: cfg.backbone_specs()?,
            head: cfg.head_spec(),
            branch_l2: cfg.train_base.l2_on_dense,
            meta: cfg.meta_spec(),
            meta_l2: cfg.train_meta.l2_on_dense,
        })
    }

    pub const FILE: &'static str = "model.json";

    pub fn save(&self, checkpoint_dir: &Path) -> Result<()> {
        fs::create_dir_all(checkpoint_dir)?;
        fs::write(checkpoint_dir.join(Self::FILE), serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(checkpoint_dir: &Path) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(checkpoint_dir.join(Self::FILE))?)?)
    }

    pub fn load_branches(&self, checkpoint_dir: &Path) -> Result<Vec<BranchModel>> {
        self.backbones
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let mut m = model::build_branch(spec, &self.head, self.branch_l2, 0)?;
                let ckpt = Checkpoint::load(checkpoint_dir, &branch_name(i), &m.fingerprint())?;
                m.restore(&ckpt)?;
                Ok(m)
            })
            .collect()
    }

    pub fn load_meta(&self, checkpoint_dir: &Path) -> Result<MetaModel> {
        let mut m = model::build_meta(&self.meta, self.meta_l2, 0)?;
        let ckpt = Checkpoint::load(checkpoint_dir, META_NAME, &m.fingerprint())?;
        m.restore(&ckpt)?;
        Ok(m)
    }
}

pub const META_NAME: &str = "meta";

pub fn branch_name(i: usize) -> String {
    format!("branch{i}")
}

fn write_history(cfg: &PipelineConfig, name: &str, history: &TrainingHistory) -> Result<()> {
    fs::write(cfg.output_dir.join(format!("history_{name}.csv")), history.to_history_csv())?;
    fs::write(cfg.output_dir.join(format!("curves_{name}.csv")), history.to_curves_csv())?;
    Ok(())
}

#[derive(Debug, Clone)]
pub struct TrainedBranch {
    pub model: BranchModel,
    pub history: TrainingHistory,
    pub val_metrics: MetricsReport,
}

/// Trains both branches on the resampled, augmented training images and
/// saves their checkpoints and histories.
pub fn train_base_stage(cfg: &PipelineConfig, data: &PreparedData) -> Result<Vec<TrainedBranch>> {
    let bundle = ModelBundle::from_config(cfg)?;
    let ckpt_dir = cfg.checkpoint_dir();
    stage("train-base", bundle.save(&ckpt_dir))?;
    let augmentation = cfg.augment_enabled.then(|| cfg.augment.clone());
    bundle
        .backbones
        .iter()
        .enumerate()
        .map(|(i, spec)| {
            stage("train-base", {
                let name = branch_name(i);
                let mut branch = model::build_branch(spec, &bundle.head, bundle.branch_l2, cfg.derived_seed("init", i as u64))?;
                let train_cfg = TrainConfig {
                    seed: derive_seed(cfg.seed, "train-branch", cfg.train_base.seed ^ i as u64),
                    ..cfg.train_base.clone()
                };
                let aug = augmentation.as_ref().map(|a| AugmentConfig {
                    seed: derive_seed(cfg.seed, "augment", a.seed ^ i as u64),
                    ..a.clone()
                });
                log::info!("training {name} ({})", spec.name);
                let history = model::train_branch(&mut branch, &data.train_images, &data.val_images, &train_cfg, aug.as_ref())?;
                let probs = branch.predict_batch(&data.val_images.images)?;
                let val_metrics = model::score(&data.val_images.grades, &probs, cfg.averaging)?;
                branch.checkpoint(&history, Some(val_metrics.clone())).save(&ckpt_dir, &name)?;
                write_history(cfg, &name, &history)?;
                Ok(TrainedBranch {
                    model: branch,
                    history,
                    val_metrics,
                })
            })
        })
        .collect()
}

/// Stacked branch outputs for training and validation (no augmentation).
pub fn stacked_sets(branches: &[BranchModel], data: &PreparedData) -> Result<(StackedSet, StackedSet)> {
    Ok((
        model::extract_stacked(branches, &data.train_images)?,
        model::extract_stacked(branches, &data.val_images)?,
    ))
}

pub fn train_meta_stage(cfg: &PipelineConfig, data: &PreparedData, branches: &[BranchModel]) -> Result<(MetaModel, TrainingHistory)> {
    stage("train-meta", {
        let bundle = ModelBundle::from_config(cfg)?;
        let (train, val) = stacked_sets(branches, data)?;
        let mut meta = model::build_meta(&bundle.meta, bundle.meta_l2, cfg.derived_seed("init", 100))?;
        let train_cfg = TrainConfig {
            seed: derive_seed(cfg.seed, "train-meta", cfg.train_meta.seed),
            ..cfg.train_meta.clone()
        };
        log::info!("training meta-model");
        let history = model::train_meta(&mut meta, &train, &val, &train_cfg)?;
        let probs = meta.predict_batch(&val.features)?;
        let metrics = model::score(&val.grades, &probs, cfg.averaging)?;
        meta.checkpoint(&history, Some(metrics)).save(&cfg.checkpoint_dir(), META_NAME)?;
        write_history(cfg, META_NAME, &history)?;
        Ok((meta, history))
    })
}

#[derive(Debug, Clone)]
pub struct ModelSummary {
    pub name: String,
    pub description: String,
    pub metrics: MetricsReport,
    pub history: Option<TrainingHistory>,
}

#[derive(Debug, Clone)]
pub struct RunReport {
    pub output_dir: PathBuf,
    /// Stacked-ensemble metrics on the validation split.
    pub metrics: MetricsReport,
    pub branches: Vec<ModelSummary>,
    pub meta_history: Option<TrainingHistory>,
    pub train_size: usize,
    pub train_resampled_size: usize,
    pub val_size: usize,
    pub rejects: usize,
    pub artifacts: Vec<PathBuf>,
}

impl RunReport {
    pub fn branch_qwks(&self) -> Vec<f64> {
        self.branches.iter().map(|b| b.metrics.qwk.unwrap_or(f64::NAN)).collect()
    }

    /// Flat metrics document: ensemble keys at top level, branch keys prefixed.
    pub fn metrics_json(&self) -> serde_json::Value {
        let mut doc = serde_json::Map::new();
        if let serde_json::Value::Object(m) = self.metrics.to_json() {
            doc.extend(m);
        }
        for b in &self.branches {
            if let serde_json::Value::Object(m) = b.metrics.to_json() {
                for (k, v) in m {
                    doc.insert(format!("{}.{k}", b.name), v);
                }
            }
            doc.insert(format!("{}.backbone", b.name), b.description.clone().into());
        }
        doc.insert("train_size".into(), self.train_size.into());
        doc.insert("train_resampled_size".into(), self.train_resampled_size.into());
        doc.insert("val_size".into(), self.val_size.into());
        serde_json::Value::Object(doc)
    }

    /// Side-by-side table of the branches and the stacked ensemble.
    pub fn comparison_table(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(
            s,
            "{:<28} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "model", "precision", "recall", "accuracy", "kappa", "f1"
        );
        let row = |s: &mut String, name: &str, m: &MetricsReport| {
            let _ = writeln!(
                s,
                "{:<28} {:>9.4} {:>9.4} {:>9.4} {:>9.4} {:>9.4}",
                name,
                m.precision,
                m.recall,
                m.accuracy,
                m.qwk.unwrap_or(f64::NAN),
                m.f1
            );
        };
        for b in &self.branches {
            row(&mut s, &format!("{} ({})", b.name, b.description), &b.metrics);
        }
        row(&mut s, "stacked ensemble", &self.metrics);
        s
    }
}

/// Scores the ensemble on validation and writes the report artifacts.
pub fn evaluate_stage(
    cfg: &PipelineConfig,
    data: &PreparedData,
    branches: &[BranchModel],
    meta: &MetaModel,
    branch_histories: Vec<Option<TrainingHistory>>,
    meta_history: Option<TrainingHistory>,
) -> Result<RunReport> {
    stage("evaluate", {
        let val = model::extract_stacked(branches, &data.val_images)?;
        let probs = meta.predict_batch(&val.features)?;
        let metrics = model::score(&val.grades, &probs, cfg.averaging)?;
        let mut summaries = Vec::new();
        for ((i, b), history) in branches.iter().enumerate().zip(branch_histories) {
            let p = b.predict_batch(&data.val_images.images)?;
            summaries.push(ModelSummary {
                name: branch_name(i),
                description: b.backbone.name.clone(),
                metrics: model::score(&val.grades, &p, cfg.averaging)?,
                history,
            });
        }
        let mut report = RunReport {
            output_dir: cfg.output_dir.clone(),
            metrics,
            branches: summaries,
            meta_history,
            train_size: data.train.len(),
            train_resampled_size: data.train_resampled.len(),
            val_size: data.val.len(),
            rejects: data.rejects.len(),
            artifacts: Vec::new(),
        };
        write_report(cfg, &mut report)?;
        Ok(report)
    })
}

fn write_report(cfg: &PipelineConfig, report: &mut RunReport) -> Result<()> {
    let out = &cfg.output_dir;
    let metrics_path = out.join("metrics.json");
    fs::write(&metrics_path, serde_json::to_string_pretty(&report.metrics_json())?)?;
    let confusion_path = out.join("confusion.txt");
    fs::write(&confusion_path, report.metrics.confusion.to_grid_text())?;
    let report_path = out.join("report.txt");
    let mut text = report.comparison_table();
    let _ = writeln!(text, "\nstacked ensemble on validation ({} images):", report.val_size);
    text.push_str(&report.metrics.to_text());
    fs::write(&report_path, text)?;
    let config_path = out.join("config.toml");
    cfg.save(&config_path)?;

    let mut artifacts = vec![metrics_path, confusion_path, report_path, config_path];
    for name in ["full", "train", "val", "train_resampled"] {
        artifacts.push(out.join("manifests").join(format!("{name}.csv")));
    }
    let ckpt = cfg.checkpoint_dir();
    artifacts.push(ckpt.join(ModelBundle::FILE));
    let names: Vec<String> = (0..report.branches.len()).map(branch_name).chain([META_NAME.to_string()]).collect();
    for name in &names {
        artifacts.push(Checkpoint::weights_path(&ckpt, name));
        artifacts.push(Checkpoint::sidecar_path(&ckpt, name));
        for kind in ["history", "curves"] {
            let p = out.join(format!("{kind}_{name}.csv"));
            if p.exists() {
                artifacts.push(p);
            }
        }
    }
    report.artifacts = artifacts;
    Ok(())
}

/// The whole flow.
pub fn run_pipeline(cfg: &PipelineConfig) -> Result<RunReport> {
    let data = prepare_data(cfg)?;
    let trained = train_base_stage(cfg, &data)?;
    let branches: Vec<BranchModel> = trained.iter().map(|t| t.model.clone()).collect();
    let (meta, meta_history) = train_meta_stage(cfg, &data, &branches)?;
    let histories = trained.into_iter().map(|t| Some(t.history)).collect();
    evaluate_stage(cfg, &data, &branches, &meta, histories, Some(meta_history))
}

/// Loaded ensemble for inference.
#[derive(Debug, Clone)]
pub struct Ensemble {
    pub bundle: ModelBundle,
    pub branches: Vec<BranchModel>,
    pub meta: MetaModel,
}

impl Ensemble {
    pub fn load(checkpoint_dir: &Path) -> Result<Self> {
        let bundle = ModelBundle::load(checkpoint_dir)?;
        let branches = bundle.load_branches(checkpoint_dir)?;
        let meta = bundle.load_meta(checkpoint_dir)?;
        Ok(Self { bundle, branches, meta })
    }

    /// Accepts either the checkpoint directory or a run's output directory.
    pub fn load_from_model_dir(dir: &Path) -> Result<Self> {
        if dir.join(ModelBundle::FILE).is_file() {
            Self::load(dir)
        } else {
            Self::load(&dir.join("checkpoints"))
        }
    }

    /// Preprocesses a raw image file and grades it.
    pub fn predict_path(&self, path: &Path) -> Result<(Grade, OrdinalVector)> {
        let img = load_preprocessed(path, &self.bundle.preprocess)?;
        model::predict(&self.branches, &self.meta, &img)
    }
}

/// `grade=<g> probs=<p1>,<p2>,<p3>,<p4>`
pub fn format_prediction(grade: Grade, probs: &OrdinalVector) -> String {
    let p: Vec<String> = probs.0.iter().map(|v| format!("{v:.6}")).collect();
    format!("grade={} probs={}", grade.value(), p.join(","))
}
