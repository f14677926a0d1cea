//! Confusion matrix, precision/recall/F1/accuracy and quadratic weighted kappa
//! over the five DR grades.

use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::labels::{Grade, NUM_GRADES};

/// Rows are actual grades, columns are predicted grades.
#[derive(Debug, Clone, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; NUM_GRADES]; NUM_GRADES],
}

impl ConfusionMatrix {
    pub fn from_counts(counts: [[u64; NUM_GRADES]; NUM_GRADES]) -> Self {
        Self { counts }
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..NUM_GRADES).map(|i| self.counts[i][i]).sum()
    }

    /// Histogram of actual grades.
    pub fn row_sums(&self) -> [u64; NUM_GRADES] {
        let mut out = [0; NUM_GRADES];
        for (i, row) in self.counts.iter().enumerate() {
            out[i] = row.iter().sum();
        }
        out
    }

    /// Histogram of predicted grades.
    pub fn col_sums(&self) -> [u64; NUM_GRADES] {
        let mut out = [0; NUM_GRADES];
        for row in &self.counts {
            for (j, v) in row.iter().enumerate() {
                out[j] += v;
            }
        }
        out
    }

    pub fn transpose(&self) -> Self {
        let mut counts = [[0; NUM_GRADES]; NUM_GRADES];
        for (i, row) in self.counts.iter().enumerate() {
            for (j, &v) in row.iter().enumerate() {
                counts[j][i] = v;
            }
        }
        Self { counts }
    }

    pub fn scaled(&self, factor: u64) -> Self {
        let mut out = self.clone();
        out.counts.iter_mut().flatten().for_each(|v| *v *= factor);
        out
    }

    pub fn row_major(&self) -> Vec<u64> {
        self.counts.iter().flatten().copied().collect()
    }

    /// Five whitespace-separated integers per line.
    pub fn to_grid_text(&self) -> String {
        let mut s = String::new();
        for row in &self.counts {
            let line: Vec<String> = row.iter().map(u64::to_string).collect();
            s.push_str(&line.join(" "));
            s.push('\n');
        }
        s
    }
}

pub fn confusion(actual: &[Grade], predicted: &[Grade]) -> Result<ConfusionMatrix> {
    if actual.len() != predicted.len() {
        return Err(Error::LengthMismatch {
            actual: actual.len(),
            predicted: predicted.len(),
        });
    }
    if actual.is_empty() {
        return Err(Error::EmptyInput);
    }
    let mut cm = ConfusionMatrix::default();
    for (a, p) in actual.iter().zip(predicted) {
        cm.counts[a.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Averaging {
    Macro,
    #[default]
    Weighted,
}

impl std::str::FromStr for Averaging {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "macro" => Ok(Averaging::Macro),
            "weighted" => Ok(Averaging::Weighted),
            other => Err(Error::InvalidConfig(format!("unknown averaging `{other}`"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub grade: u8,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
    /// No predictions of this grade, so precision was set to 0.
    pub precision_undefined: bool,
    /// No actual samples of this grade, so recall was set to 0.
    pub recall_undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub accuracy: f64,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub qwk: Option<f64>,
    pub averaging: Averaging,
    pub per_class: Vec<ClassMetrics>,
    pub confusion: ConfusionMatrix,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Per-class and averaged metrics. Averages run over grades that occur in
/// either the actual or the predicted labels; the aggregate F1 is the harmonic
/// mean of the aggregate precision and recall.
pub fn classification_metrics(cm: &ConfusionMatrix, averaging: Averaging) -> MetricsReport {
    let total = cm.total();
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let mut per_class = Vec::new();
    for g in 0..NUM_GRADES {
        if rows[g] == 0 && cols[g] == 0 {
            continue;
        }
        let tp = cm.counts[g][g] as f64;
        let precision_undefined = cols[g] == 0;
        let recall_undefined = rows[g] == 0;
        let precision = if precision_undefined { 0.0 } else { tp / cols[g] as f64 };
        let recall = if recall_undefined { 0.0 } else { tp / rows[g] as f64 };
        per_class.push(ClassMetrics {
            grade: g as u8,
            precision,
            recall,
            f1: harmonic(precision, recall),
            support: rows[g],
            precision_undefined,
            recall_undefined,
        });
    }

    let (precision, recall) = if total == 0 || per_class.is_empty() {
        (0.0, 0.0)
    } else {
        match averaging {
            Averaging::Macro => {
                let n = per_class.len() as f64;
                (
                    per_class.iter().map(|c| c.precision).sum::<f64>() / n,
                    per_class.iter().map(|c| c.recall).sum::<f64>() / n,
                )
            }
            Averaging::Weighted => {
                let t = total as f64;
                (
                    per_class.iter().map(|c| c.precision * c.support as f64).sum::<f64>() / t,
                    per_class.iter().map(|c| c.recall * c.support as f64).sum::<f64>() / t,
                )
            }
        }
    };

    MetricsReport {
        accuracy: if total == 0 { 0.0 } else { cm.trace() as f64 / total as f64 },
        precision,
        recall,
        f1: harmonic(precision, recall),
        qwk: None,
        averaging,
        per_class,
        confusion: cm.clone(),
    }
}

/// Disagreement weight `(i − j)² / (N − 1)²`.
pub fn quadratic_weight(i: usize, j: usize) -> f64 {
    let d = i as f64 - j as f64;
    d * d / ((NUM_GRADES - 1) * (NUM_GRADES - 1)) as f64
}

/// `κ = 1 − Σ w·O / Σ w·E` with `E` the outer product of the marginals scaled to `O`'s total.
pub fn quadratic_weighted_kappa(cm: &ConfusionMatrix) -> Result<f64> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::EmptyInput);
    }
    let n = total as f64;
    let rows = cm.row_sums();
    let cols = cm.col_sums();
    let mut observed = 0.0;
    let mut expected = 0.0;
    for i in 0..NUM_GRADES {
        for j in 0..NUM_GRADES {
            let w = quadratic_weight(i, j);
            observed += w * cm.counts[i][j] as f64;
            expected += w * rows[i] as f64 * cols[j] as f64 / n;
        }
    }
    if expected == 0.0 {
        return if observed == 0.0 {
            Ok(1.0)
        } else {
            Err(Error::DegenerateMarginals)
        };
    }
    Ok(1.0 - observed / expected)
}

/// Full report including kappa.
pub fn evaluate(actual: &[Grade], predicted: &[Grade], averaging: Averaging) -> Result<MetricsReport> {
    let cm = confusion(actual, predicted)?;
    let mut report = classification_metrics(&cm, averaging);
    report.qwk = Some(quadratic_weighted_kappa(&cm)?);
    Ok(report)
}

impl MetricsReport {
    /// `key: value` lines.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "averaging: {}", match self.averaging {
            Averaging::Macro => "macro",
            Averaging::Weighted => "weighted",
        });
        let _ = writeln!(s, "accuracy: {:.6}", self.accuracy);
        let _ = writeln!(s, "precision: {:.6}", self.precision);
        let _ = writeln!(s, "recall: {:.6}", self.recall);
        let _ = writeln!(s, "f1: {:.6}", self.f1);
        match self.qwk {
            Some(k) => {
                let _ = writeln!(s, "qwk: {k:.6}");
            }
            None => {
                let _ = writeln!(s, "qwk: n/a");
            }
        }
        for c in &self.per_class {
            let mut flags = Vec::new();
            if c.precision_undefined {
                flags.push("precision-undefined");
            }
            if c.recall_undefined {
                flags.push("recall-undefined");
            }
            let _ = writeln!(
                s,
                "grade_{}: precision={:.6} recall={:.6} f1={:.6} support={}{}",
                c.grade,
                c.precision,
                c.recall,
                c.f1,
                c.support,
                if flags.is_empty() { String::new() } else { format!(" [{}]", flags.join(",")) }
            );
        }
        let cells: Vec<String> = self.confusion.row_major().iter().map(u64::to_string).collect();
        let _ = writeln!(s, "confusion: {}", cells.join(","));
        s
    }

    /// Flat machine-readable document; `confusion` is 25 integers, row-major.
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "accuracy": self.accuracy,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "qwk": self.qwk,
            "averaging": self.averaging,
            "confusion": self.confusion.row_major(),
        })
    }

    pub fn from_json(value: &serde_json::Value) -> Result<Self> {
        let num = |key: &str| {
            value[key]
                .as_f64()
                .ok_or_else(|| Error::InvalidConfig(format!("metrics document lacks `{key}`")))
        };
        let cells: Vec<u64> = serde_json::from_value(value["confusion"].clone())?;
        if cells.len() != NUM_GRADES * NUM_GRADES {
            return Err(Error::InvalidConfig(format!("confusion needs 25 cells, got {}", cells.len())));
        }
        let mut counts = [[0; NUM_GRADES]; NUM_GRADES];
        for (k, v) in cells.into_iter().enumerate() {
            counts[k / NUM_GRADES][k % NUM_GRADES] = v;
        }
        let averaging: Averaging = serde_json::from_value(value["averaging"].clone())?;
        let cm = ConfusionMatrix::from_counts(counts);
        let mut report = classification_metrics(&cm, averaging);
        report.accuracy = num("accuracy")?;
        report.precision = num("precision")?;
        report.recall = num("recall")?;
        report.f1 = num("f1")?;
        report.qwk = value["qwk"].as_f64();
        Ok(report)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn grades(v: &[i64]) -> Vec<Grade> {
        v.iter().map(|&g| Grade::new(g).unwrap()).collect()
    }

    /// Kappa straight from label lists: observed disagreement per sample versus
    /// disagreement under independent marginals.
    fn kappa_from_labels(actual: &[usize], predicted: &[usize]) -> f64 {
        let n = actual.len() as f64;
        let mut hist_a = [0.0; 5];
        let mut hist_p = [0.0; 5];
        let mut num = 0.0;
        for (&a, &p) in actual.iter().zip(predicted) {
            hist_a[a] += 1.0;
            hist_p[p] += 1.0;
            num += ((a as f64 - p as f64).powi(2)) / 16.0;
        }
        let mut den = 0.0;
        for i in 0..5 {
            for j in 0..5 {
                den += hist_a[i] * hist_p[j] * ((i as f64 - j as f64).powi(2)) / 16.0 / n;
            }
        }
        1.0 - num / den
    }

    #[test]
    fn confusion_examples() {
        let all = grades(&[0, 1, 2, 3, 4]);
        let cm = confusion(&all, &all).unwrap();
        assert_eq!(cm.trace(), 5);
        assert_eq!(cm.total(), 5);
        let cm = confusion(&grades(&[0, 0]), &grades(&[4, 4])).unwrap();
        assert_eq!(cm.counts[0][4], 2);
        assert_eq!(cm.total(), 2);
        assert!(matches!(confusion(&all, &all[..3]), Err(Error::LengthMismatch { .. })));
        assert!(matches!(confusion(&[], &[]), Err(Error::EmptyInput)));
    }

    #[test]
    fn confusion_row_sums_are_histogram() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let a: Vec<Grade> = (0..100).map(|_| Grade::new(rng.gen_range(0..5)).unwrap()).collect();
        let p: Vec<Grade> = (0..100).map(|_| Grade::new(rng.gen_range(0..5)).unwrap()).collect();
        let cm = confusion(&a, &p).unwrap();
        let mut hist = [0u64; 5];
        a.iter().for_each(|g| hist[g.index()] += 1);
        assert_eq!(cm.row_sums(), hist);
    }

    #[test]
    fn perfect_predictions() {
        let all = grades(&[0, 1, 1, 2, 3, 4, 4]);
        let r = evaluate(&all, &all, Averaging::Weighted).unwrap();
        assert_eq!((r.accuracy, r.precision, r.recall, r.f1), (1.0, 1.0, 1.0, 1.0));
        assert_eq!(r.qwk, Some(1.0));
        let r = evaluate(&all, &all, Averaging::Macro).unwrap();
        assert_eq!((r.precision, r.recall, r.f1), (1.0, 1.0, 1.0));
    }

    #[test]
    fn harmonic_mean_example() {
        assert!((harmonic(0.5, 1.0) - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(harmonic(0.0, 0.0), 0.0);
    }

    #[test]
    fn three_class_matrix_matches_tally() {
        let small = [[2u64, 1, 0], [0, 3, 0], [1, 0, 3]];
        let mut counts = [[0; 5]; 5];
        for i in 0..3 {
            for j in 0..3 {
                counts[i][j] = small[i][j];
            }
        }
        let cm = ConfusionMatrix::from_counts(counts);
        // expand into label pairs and tally TP/FP/FN directly
        let mut pairs = Vec::new();
        for i in 0..3 {
            for j in 0..3 {
                for _ in 0..small[i][j] {
                    pairs.push((i, j));
                }
            }
        }
        let mut expect = Vec::new();
        for c in 0..3 {
            let tp = pairs.iter().filter(|&&(a, p)| a == c && p == c).count() as f64;
            let fp = pairs.iter().filter(|&&(a, p)| a != c && p == c).count() as f64;
            let fn_ = pairs.iter().filter(|&&(a, p)| a == c && p != c).count() as f64;
            let support = pairs.iter().filter(|&&(a, _)| a == c).count() as f64;
            expect.push((tp / (tp + fp), tp / (tp + fn_), support));
        }
        let r = classification_metrics(&cm, Averaging::Macro);
        assert_eq!(r.per_class.len(), 3);
        for (c, (p, rc, _)) in r.per_class.iter().zip(&expect) {
            assert!((c.precision - p).abs() < 1e-12);
            assert!((c.recall - rc).abs() < 1e-12);
        }
        let macro_p = expect.iter().map(|e| e.0).sum::<f64>() / 3.0;
        let macro_r = expect.iter().map(|e| e.1).sum::<f64>() / 3.0;
        assert!((r.precision - macro_p).abs() < 1e-12);
        assert!((r.recall - macro_r).abs() < 1e-12);
        assert!((r.accuracy - 8.0 / 10.0).abs() < 1e-12);

        let w = classification_metrics(&cm, Averaging::Weighted);
        let weighted_p = expect.iter().map(|e| e.0 * e.2).sum::<f64>() / 10.0;
        assert!((w.precision - weighted_p).abs() < 1e-12);
        assert!((w.recall - w.accuracy).abs() < 1e-12);
    }

    #[test]
    fn zero_denominators_are_flagged() {
        let r = evaluate(&grades(&[0, 0, 1]), &grades(&[0, 0, 2]), Averaging::Macro).unwrap();
        let g1 = r.per_class.iter().find(|c| c.grade == 1).unwrap();
        assert!(g1.precision_undefined && g1.precision == 0.0);
        let g2 = r.per_class.iter().find(|c| c.grade == 2).unwrap();
        assert!(g2.recall_undefined && g2.recall == 0.0 && g2.f1 == 0.0);
    }

    #[test]
    fn kappa_reversed_pair_is_minus_one() {
        let r = evaluate(&grades(&[0, 4]), &grades(&[4, 0]), Averaging::Weighted).unwrap();
        assert!((r.qwk.unwrap() + 1.0).abs() < 1e-12);
    }

    #[test]
    fn kappa_matches_label_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        for _ in 0..20 {
            let a: Vec<usize> = (0..50).map(|_| rng.gen_range(0..5)).collect();
            let p: Vec<usize> = (0..50).map(|_| rng.gen_range(0..5)).collect();
            let cm = confusion(&grades(&a.iter().map(|&x| x as i64).collect::<Vec<_>>()), &grades(&p.iter().map(|&x| x as i64).collect::<Vec<_>>())).unwrap();
            let k = quadratic_weighted_kappa(&cm).unwrap();
            assert!((k - kappa_from_labels(&a, &p)).abs() < 1e-9);
        }
    }

    #[test]
    fn kappa_degenerate_single_grade() {
        let g = grades(&[2, 2, 2]);
        assert_eq!(quadratic_weighted_kappa(&confusion(&g, &g).unwrap()).unwrap(), 1.0);
        assert!(matches!(quadratic_weighted_kappa(&ConfusionMatrix::default()), Err(Error::EmptyInput)));
    }

    #[test]
    fn json_round_trip() {
        let r = evaluate(&grades(&[0, 1, 2, 3, 4, 4]), &grades(&[0, 2, 2, 3, 4, 3]), Averaging::Weighted).unwrap();
        let doc = r.to_json();
        assert_eq!(doc["confusion"].as_array().unwrap().len(), 25);
        assert_eq!(MetricsReport::from_json(&doc).unwrap(), r);
        assert!(r.to_text().contains("qwk: "));
    }

    mod props {
        use super::*;
        use proptest::prelude::*;

        fn matrix() -> impl Strategy<Value = ConfusionMatrix> {
            proptest::array::uniform5(proptest::array::uniform5(0u64..20))
                .prop_filter("non-empty", |m| m.iter().flatten().sum::<u64>() > 0)
                .prop_map(ConfusionMatrix::from_counts)
        }

        proptest! {
            #![proptest_config(ProptestConfig::with_cases(1000))]

            #[test]
            fn metrics_in_range(cm in matrix()) {
                for avg in [Averaging::Macro, Averaging::Weighted] {
                    let r = classification_metrics(&cm, avg);
                    for v in [r.accuracy, r.precision, r.recall, r.f1] {
                        prop_assert!((0.0..=1.0).contains(&v));
                    }
                    if r.precision + r.recall > 0.0 {
                        prop_assert!((r.f1 - 2.0 * r.precision * r.recall / (r.precision + r.recall)).abs() < 1e-12);
                    } else {
                        prop_assert_eq!(r.f1, 0.0);
                    }
                }
                let w = classification_metrics(&cm, Averaging::Weighted);
                prop_assert!((w.accuracy - w.recall).abs() < 1e-12);
                if let Ok(k) = quadratic_weighted_kappa(&cm) {
                    prop_assert!((-1.0 - 1e-12..=1.0 + 1e-12).contains(&k));
                }
            }

            #[test]
            fn kappa_symmetries(cm in matrix(), c in 1u64..50) {
                if let Ok(k) = quadratic_weighted_kappa(&cm) {
                    prop_assert!((quadratic_weighted_kappa(&cm.scaled(c)).unwrap() - k).abs() < 1e-12);
                    prop_assert!((quadratic_weighted_kappa(&cm.transpose()).unwrap() - k).abs() < 1e-12);
                }
            }

            #[test]
            fn kappa_is_one_iff_diagonal(cm in matrix()) {
                let off: u64 = (0..5).flat_map(|i| (0..5).map(move |j| (i, j))).filter(|(i, j)| i != j).map(|(i, j)| cm.counts[i][j]).sum();
                let k = quadratic_weighted_kappa(&cm).unwrap();
                if off == 0 {
                    prop_assert_eq!(k, 1.0);
                } else {
                    prop_assert!(k < 1.0);
                }
            }
        }
    }
}
