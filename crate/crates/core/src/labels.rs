//! Cumulative ordinal label encoding and class-balancing resampling.
//!
//! Grade `g` is encoded as `g` leading ones in a length-4 vector, so bit `i`
//! answers "is the severity above grade `i`?". Grade 4 becomes `[1, 1, 1, 1]`.

use std::collections::{BTreeMap, HashMap};
use std::fmt;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{DatasetManifest, SampleRecord};
use crate::error::{Error, Result};

pub const NUM_GRADES: usize = 5;
pub const ORDINAL_BITS: usize = NUM_GRADES - 1;

/// Diabetic retinopathy severity: 0 no DR, 1 mild, 2 moderate, 3 severe, 4 proliferative.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "i64", into = "i64")]
pub struct Grade(u8);

impl Grade {
    pub const ALL: [Grade; NUM_GRADES] = [Grade(0), Grade(1), Grade(2), Grade(3), Grade(4)];

    pub fn new(value: i64) -> Result<Self> {
        if (0..NUM_GRADES as i64).contains(&value) {
            Ok(Grade(value as u8))
        } else {
            Err(Error::InvalidGrade(value))
        }
    }

    pub fn value(self) -> u8 {
        self.0
    }

    pub fn index(self) -> usize {
        self.0 as usize
    }
}

impl TryFrom<i64> for Grade {
    type Error = Error;

    fn try_from(value: i64) -> Result<Self> {
        Grade::new(value)
    }
}

impl From<Grade> for i64 {
    fn from(g: Grade) -> i64 {
        g.0 as i64
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.0)
    }
}

/// Four per-threshold values: binary targets or predicted probabilities.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct OrdinalVector(pub [f64; ORDINAL_BITS]);

impl OrdinalVector {
    pub fn as_slice(&self) -> &[f64] {
        &self.0
    }

    pub fn from_slice(values: &[f64]) -> Result<Self> {
        let arr: [f64; ORDINAL_BITS] = values
            .try_into()
            .map_err(|_| Error::ShapeMismatch(format!("ordinal vector needs 4 values, got {}", values.len())))?;
        Ok(Self(arr))
    }

    /// True for a prefix of ones followed by zeros.
    pub fn is_monotone_target(&self) -> bool {
        self.0.iter().all(|&b| b == 0.0 || b == 1.0) && self.0.windows(2).all(|w| w[0] >= w[1])
    }
}

pub fn encode(grade: Grade) -> OrdinalVector {
    let mut bits = [0.0; ORDINAL_BITS];
    for (i, b) in bits.iter_mut().enumerate() {
        if i < grade.index() {
            *b = 1.0;
        }
    }
    OrdinalVector(bits)
}

/// Length of the longest prefix whose entries all exceed `threshold`.
pub fn decode(probs: &OrdinalVector, threshold: f64) -> Grade {
    let n = probs.0.iter().take_while(|&&p| p > threshold).count();
    Grade(n as u8)
}

pub const DEFAULT_DECODE_THRESHOLD: f64 = 0.5;

/// Per-class index replication table. Indices are positions within the
/// class's own records, in manifest order.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResamplePlan {
    pub per_class_target: usize,
    pub mapping: BTreeMap<Grade, Vec<usize>>,
    pub seed: u64,
}

impl ResamplePlan {
    pub fn total(&self) -> usize {
        self.mapping.values().map(Vec::len).sum()
    }

    /// How many times each class-local index is used.
    pub fn multiplicities(&self, grade: Grade, source_count: usize) -> Vec<usize> {
        let mut counts = vec![0; source_count];
        if let Some(indices) = self.mapping.get(&grade) {
            for &i in indices {
                if i < source_count {
                    counts[i] += 1;
                }
            }
        }
        counts
    }
}

/// Each class's `n_c` indices are repeated `⌊target / n_c⌋` times and the
/// remaining `target mod n_c` slots are filled by a uniform draw without
/// replacement. Classes larger than the target therefore get subsampled.
pub fn build_resample_plan(
    class_counts: &BTreeMap<Grade, usize>,
    per_class_target: usize,
    seed: u64,
) -> Result<ResamplePlan> {
    if per_class_target == 0 {
        return Err(Error::InvalidConfig("per-class resample target must be >= 1".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut mapping = BTreeMap::new();
    for (&grade, &n) in class_counts {
        if n == 0 {
            return Err(Error::EmptyClass(grade.value()));
        }
        let reps = per_class_target / n;
        let remainder = per_class_target % n;
        let mut indices = Vec::with_capacity(per_class_target);
        for _ in 0..reps {
            indices.extend(0..n);
        }
        let mut extra = rand::seq::index::sample(&mut rng, n, remainder).into_vec();
        extra.sort_unstable();
        indices.extend(extra);
        mapping.insert(grade, indices);
    }
    Ok(ResamplePlan {
        per_class_target,
        mapping,
        seed,
    })
}

/// Materializes a plan against `dataset`. Repeated copies of a record get ids
/// suffixed `#k`; the output order is shuffled with the plan's seed.
pub fn apply_resample_plan(plan: &ResamplePlan, dataset: &DatasetManifest) -> Result<DatasetManifest> {
    let mut by_class: BTreeMap<Grade, Vec<&SampleRecord>> = BTreeMap::new();
    for r in &dataset.records {
        by_class.entry(r.grade).or_default().push(r);
    }
    if let Some(missing) = by_class.keys().find(|g| !plan.mapping.contains_key(g)) {
        return Err(Error::IndexOutOfRange(format!("grade {missing} is not covered by the plan")));
    }

    let mut copies: HashMap<&str, usize> = HashMap::new();
    let mut records = Vec::with_capacity(plan.total());
    for (grade, indices) in &plan.mapping {
        let sources = by_class.get(grade).map(Vec::as_slice).unwrap_or(&[]);
        for &i in indices {
            let src = sources.get(i).ok_or_else(|| {
                Error::IndexOutOfRange(format!(
                    "index {i} for grade {grade}, which has {} record(s)",
                    sources.len()
                ))
            })?;
            let n = copies.entry(src.id.as_str()).or_insert(0);
            let id = if *n == 0 {
                src.id.clone()
            } else {
                format!("{}#{}", src.id, n)
            };
            *n += 1;
            records.push(SampleRecord {
                id,
                source_id: src.source_id.clone(),
                image_path: src.image_path.clone(),
                grade: src.grade,
            });
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
    rng.set_stream(1);
    records.shuffle(&mut rng);
    DatasetManifest::new(
        records,
        dataset.split_tag,
        format!(
            "{}; resampled to {} per class (seed {})",
            dataset.provenance, plan.per_class_target, plan.seed
        ),
    )
}
