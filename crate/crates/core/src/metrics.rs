//! Confusion matrices and the five classification metrics.
//!
//! Every metric is a ratio of confusion counts and is undefined when its
//! denominator is zero. Undefined values are carried as `None` and
//! serialised as JSON `null`; they never collapse to 0 or 1.

use std::io;

use serde::ser::{SerializeMap, SerializeStruct};
use serde::{Serialize, Serializer};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("label {label} out of range for a {k}-class matrix")]
    LabelOutOfRange { label: usize, k: usize },
    #[error("cannot merge a {a}-class matrix with a {b}-class matrix")]
    ShapeMismatch { a: usize, b: usize },
    #[error("confusion matrix is empty")]
    Empty,
    #[error("bad confusion CSV: {0}")]
    BadCsv(String),
    #[error(transparent)]
    Csv(#[from] csv::Error),
}

/// K×K count table; rows are actual classes, columns predicted.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ConfusionMatrix {
    labels: Vec<String>,
    counts: Vec<u64>,
}

impl ConfusionMatrix {
    pub fn new(labels: Vec<String>) -> Self {
        let k = labels.len();
        Self {
            labels,
            counts: vec![0; k * k],
        }
    }

    /// Empty matrix over the five cell classes.
    pub fn for_cell_classes() -> Self {
        Self::new(crate::dataset::ClassLabel::names())
    }

    pub fn from_counts(labels: Vec<String>, counts: Vec<u64>) -> Result<Self, MetricsError> {
        let k = labels.len();
        if counts.len() != k * k {
            return Err(MetricsError::BadCsv(format!(
                "{} counts for {k} labels",
                counts.len()
            )));
        }
        Ok(Self { labels, counts })
    }

    pub fn k(&self) -> usize {
        self.labels.len()
    }

    pub fn labels(&self) -> &[String] {
        &self.labels
    }

    pub fn get(&self, actual: usize, predicted: usize) -> u64 {
        self.counts[actual * self.k() + predicted]
    }

    pub fn accumulate(&mut self, actual: usize, predicted: usize) -> Result<(), MetricsError> {
        let k = self.k();
        for label in [actual, predicted] {
            if label >= k {
                return Err(MetricsError::LabelOutOfRange { label, k });
            }
        }
        self.counts[actual * k + predicted] += 1;
        Ok(())
    }

    /// Elementwise sum.
    pub fn merge(&mut self, other: &ConfusionMatrix) -> Result<(), MetricsError> {
        if self.k() != other.k() {
            return Err(MetricsError::ShapeMismatch {
                a: self.k(),
                b: other.k(),
            });
        }
        for (a, b) in self.counts.iter_mut().zip(&other.counts) {
            *a += b;
        }
        Ok(())
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn trace(&self) -> u64 {
        (0..self.k()).map(|i| self.get(i, i)).sum()
    }

    pub fn row_sum(&self, c: usize) -> u64 {
        (0..self.k()).map(|j| self.get(c, j)).sum()
    }

    pub fn col_sum(&self, c: usize) -> u64 {
        (0..self.k()).map(|i| self.get(i, c)).sum()
    }

    /// CSV with a header row and a leading label column:
    /// `actual\predicted,<labels...>` then one row per actual class.
    pub fn write_csv<W: io::Write>(&self, w: W) -> Result<(), MetricsError> {
        let mut wtr = csv::WriterBuilder::new()
            .terminator(csv::Terminator::Any(b'\n'))
            .from_writer(w);
        let mut header = vec!["actual\\predicted".to_string()];
        header.extend(self.labels.iter().cloned());
        wtr.write_record(&header)?;
        for i in 0..self.k() {
            let mut row = vec![self.labels[i].clone()];
            row.extend((0..self.k()).map(|j| self.get(i, j).to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush().map_err(|e| MetricsError::Csv(e.into()))?;
        Ok(())
    }

    pub fn read_csv<R: io::Read>(r: R) -> Result<Self, MetricsError> {
        let mut rdr = csv::ReaderBuilder::new().has_headers(false).from_reader(r);
        let mut rows = rdr.records();
        let header = rows
            .next()
            .ok_or_else(|| MetricsError::BadCsv("missing header".into()))??;
        let labels: Vec<String> = header.iter().skip(1).map(str::to_string).collect();
        let k = labels.len();
        let mut counts = Vec::with_capacity(k * k);
        for (i, row) in rows.enumerate() {
            let row = row?;
            if i >= k || row.len() != k + 1 || row.get(0) != Some(labels[i].as_str()) {
                return Err(MetricsError::BadCsv(format!("unexpected row {}", i + 1)));
            }
            for cell in row.iter().skip(1) {
                counts.push(
                    cell.trim()
                        .parse::<u64>()
                        .map_err(|e| MetricsError::BadCsv(format!("`{cell}`: {e}")))?,
                );
            }
        }
        Self::from_counts(labels, counts)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct BinaryCounts {
    pub tp: u64,
    pub fp: u64,
    pub tn: u64,
    #[serde(rename = "fn")]
    pub fn_: u64,
}

impl BinaryCounts {
    pub fn total(&self) -> u64 {
        self.tp + self.fp + self.tn + self.fn_
    }
}

/// Reduces the matrix to class `c` against all others.
pub fn one_vs_rest(cm: &ConfusionMatrix, c: usize) -> BinaryCounts {
    let tp = cm.get(c, c);
    let fn_ = cm.row_sum(c) - tp;
    let fp = cm.col_sum(c) - tp;
    let tn = cm.total() - tp - fp - fn_;
    BinaryCounts { tp, fp, tn, fn_ }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BinaryMetrics {
    pub accuracy: Option<f64>,
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

pub fn binary_metrics(b: &BinaryCounts) -> BinaryMetrics {
    let accuracy = ratio(b.tp + b.tn, b.total());
    let sensitivity = ratio(b.tp, b.tp + b.fn_);
    let specificity = ratio(b.tn, b.tn + b.fp);
    let precision = ratio(b.tp, b.tp + b.fp);
    let f1 = match (precision, sensitivity) {
        (Some(p), Some(r)) if p + r > 0.0 => Some(2.0 * p * r / (p + r)),
        _ => None,
    };
    BinaryMetrics {
        accuracy,
        sensitivity,
        specificity,
        precision,
        f1,
    }
}

/// Per-class metrics, also used for the macro average.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClassMetrics {
    pub sensitivity: Option<f64>,
    pub specificity: Option<f64>,
    pub precision: Option<f64>,
    pub f1: Option<f64>,
}

impl ClassMetrics {
    fn values(&self) -> [Option<f64>; 4] {
        [self.sensitivity, self.specificity, self.precision, self.f1]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub overall_accuracy: f64,
    pub per_class: Vec<(String, ClassMetrics)>,
    /// Unweighted mean over the classes where each metric is defined.
    pub macro_avg: ClassMetrics,
    /// Number of undefined per-class entries.
    pub undefined_count: usize,
    pub total: u64,
}

pub fn report(cm: &ConfusionMatrix) -> Result<MetricsReport, MetricsError> {
    let total = cm.total();
    if total == 0 {
        return Err(MetricsError::Empty);
    }
    let per_class: Vec<(String, ClassMetrics)> = (0..cm.k())
        .map(|c| {
            let m = binary_metrics(&one_vs_rest(cm, c));
            (
                cm.labels()[c].clone(),
                ClassMetrics {
                    sensitivity: m.sensitivity,
                    specificity: m.specificity,
                    precision: m.precision,
                    f1: m.f1,
                },
            )
        })
        .collect();
    let undefined_count = per_class
        .iter()
        .map(|(_, m)| m.values().iter().filter(|v| v.is_none()).count())
        .sum();
    let mean_of = |idx: usize| -> Option<f64> {
        let vals: Vec<f64> = per_class.iter().filter_map(|(_, m)| m.values()[idx]).collect();
        (!vals.is_empty()).then(|| vals.iter().sum::<f64>() / vals.len() as f64)
    };
    Ok(MetricsReport {
        overall_accuracy: cm.trace() as f64 / total as f64,
        macro_avg: ClassMetrics {
            sensitivity: mean_of(0),
            specificity: mean_of(1),
            precision: mean_of(2),
            f1: mean_of(3),
        },
        per_class,
        undefined_count,
        total,
    })
}

/// Rounds to 6 decimal places for serialisation.
pub fn round6(x: f64) -> f64 {
    (x * 1e6).round() / 1e6
}

impl Serialize for ClassMetrics {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("ClassMetrics", 4)?;
        st.serialize_field("sensitivity", &self.sensitivity.map(round6))?;
        st.serialize_field("specificity", &self.specificity.map(round6))?;
        st.serialize_field("precision", &self.precision.map(round6))?;
        st.serialize_field("f1", &self.f1.map(round6))?;
        st.end()
    }
}

struct PerClass<'a>(&'a [(String, ClassMetrics)]);

impl Serialize for PerClass<'_> {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut map = s.serialize_map(Some(self.0.len()))?;
        for (label, m) in self.0 {
            map.serialize_entry(label, m)?;
        }
        map.end()
    }
}

/// `{overall_accuracy, per_class: {<label>: {...}}, macro, undefined_count, total}`
impl Serialize for MetricsReport {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        let mut st = s.serialize_struct("MetricsReport", 5)?;
        st.serialize_field("overall_accuracy", &round6(self.overall_accuracy))?;
        st.serialize_field("per_class", &PerClass(&self.per_class))?;
        st.serialize_field("macro", &self.macro_avg)?;
        st.serialize_field("undefined_count", &self.undefined_count)?;
        st.serialize_field("total", &self.total)?;
        st.end()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::SplitMix64;
    use proptest::prelude::*;

    fn labels(k: usize) -> Vec<String> {
        (0..k).map(|i| format!("c{i}")).collect()
    }

    fn close(a: Option<f64>, b: f64) -> bool {
        a.is_some_and(|a| (a - b).abs() < 1e-12)
    }

    #[test]
    fn accumulate_basics() {
        let mut cm = ConfusionMatrix::for_cell_classes();
        cm.accumulate(3, 3).unwrap();
        assert_eq!(cm.get(3, 3), 1);
        assert_eq!(cm.total(), 1);
        assert!(matches!(cm.accumulate(5, 0), Err(MetricsError::LabelOutOfRange { label: 5, k: 5 })));
        let mut rng = SplitMix64::new(1);
        let mut big = ConfusionMatrix::for_cell_classes();
        for _ in 0..750 {
            big.accumulate(rng.below(5) as usize, rng.below(5) as usize).unwrap();
        }
        assert_eq!(big.total(), 750);
    }

    #[test]
    fn merge_equals_concatenated_stream() {
        let mut rng = SplitMix64::new(2);
        let pairs: Vec<(usize, usize)> = (0..200).map(|_| (rng.below(5) as usize, rng.below(5) as usize)).collect();
        let mut whole = ConfusionMatrix::new(labels(5));
        let mut a = ConfusionMatrix::new(labels(5));
        let mut b = ConfusionMatrix::new(labels(5));
        for (i, &(x, y)) in pairs.iter().enumerate() {
            whole.accumulate(x, y).unwrap();
            if i < 77 { a.accumulate(x, y) } else { b.accumulate(x, y) }.unwrap();
        }
        a.merge(&b).unwrap();
        assert_eq!(a, whole);
        assert!(a.merge(&ConfusionMatrix::new(labels(3))).is_err());
    }

    #[test]
    fn one_vs_rest_two_class() {
        let cm = ConfusionMatrix::from_counts(labels(2), vec![40, 10, 5, 95]).unwrap();
        assert_eq!(one_vs_rest(&cm, 0), BinaryCounts { tp: 40, fn_: 10, fp: 5, tn: 95 });
        assert_eq!(one_vs_rest(&cm, 1), BinaryCounts { tp: 95, fn_: 5, fp: 10, tn: 40 });
    }

    #[test]
    fn one_vs_rest_diagonal() {
        let mut c = vec![0u64; 25];
        for i in 0..5 {
            c[i * 6] = 10 + i as u64;
        }
        let cm = ConfusionMatrix::from_counts(labels(5), c).unwrap();
        for k in 0..5 {
            let b = one_vs_rest(&cm, k);
            assert_eq!((b.fp, b.fn_), (0, 0));
        }
    }

    #[test]
    fn worked_binary_example() {
        let m = binary_metrics(&BinaryCounts { tp: 40, fn_: 10, fp: 5, tn: 95 });
        assert!(close(m.accuracy, 0.9));
        assert!(close(m.sensitivity, 0.8));
        assert!(close(m.specificity, 0.95));
        assert!(close(m.precision, 8.0 / 9.0));
        assert!((m.f1.unwrap() - 0.842105).abs() < 1e-6);
    }

    #[test]
    fn undefined_metrics() {
        let m = binary_metrics(&BinaryCounts { tp: 0, fn_: 0, fp: 0, tn: 12 });
        assert_eq!(m.sensitivity, None);
        assert_eq!(m.precision, None);
        assert_eq!(m.f1, None);
        assert!(close(m.specificity, 1.0));
        // tp = 0 with errors on both sides: P = R = 0, F1 has a zero denominator.
        let m = binary_metrics(&BinaryCounts { tp: 0, fn_: 3, fp: 2, tn: 5 });
        assert!(close(m.sensitivity, 0.0) && close(m.precision, 0.0));
        assert_eq!(m.f1, None);
        let perfect = binary_metrics(&BinaryCounts { tp: 9, ..Default::default() });
        assert!(close(perfect.accuracy, 1.0) && close(perfect.sensitivity, 1.0) && close(perfect.precision, 1.0) && close(perfect.f1, 1.0));
    }

    #[test]
    fn report_perfect_and_near_perfect() {
        let mut c = vec![0u64; 25];
        for i in 0..5 {
            c[i * 6] = 150;
        }
        let cm = ConfusionMatrix::from_counts(labels(5), c.clone()).unwrap();
        let r = report(&cm).unwrap();
        assert_eq!(r.overall_accuracy, 1.0);
        assert_eq!(r.undefined_count, 0);
        for v in r.macro_avg.values() {
            assert_eq!(v, Some(1.0));
        }
        c[0] -= 2;
        c[1] += 2;
        c[18] -= 3;
        c[15] += 3;
        let r = report(&ConfusionMatrix::from_counts(labels(5), c).unwrap()).unwrap();
        assert!((r.overall_accuracy - 745.0 / 750.0).abs() < 1e-15);
        assert_eq!(round6(r.overall_accuracy), 0.993333);
        assert!(report(&ConfusionMatrix::new(labels(5))).is_err());
    }

    #[test]
    fn report_json_schema() {
        let cm = ConfusionMatrix::from_counts(labels(2), vec![40, 10, 5, 95]).unwrap();
        let v = serde_json::to_value(report(&cm).unwrap()).unwrap();
        assert_eq!(v["overall_accuracy"], 0.9);
        assert_eq!(v["per_class"]["c0"]["precision"], 0.888889);
        assert_eq!(v["per_class"]["c0"]["f1"], 0.842105);
        assert_eq!(v["total"], 150);
        assert_eq!(v["undefined_count"], 0);
        assert!(v["macro"]["sensitivity"].is_number());
        let text = serde_json::to_string(&report(&cm).unwrap()).unwrap();
        assert!(text.find("\"c0\"").unwrap() < text.find("\"c1\"").unwrap());

        let cm = ConfusionMatrix::from_counts(labels(2), vec![5, 0, 5, 0]).unwrap();
        let v = serde_json::to_value(report(&cm).unwrap()).unwrap();
        assert!(v["per_class"]["c1"]["precision"].is_null());
    }

    #[test]
    fn confusion_csv_round_trip() {
        let cm = ConfusionMatrix::from_counts(labels(2), vec![40, 10, 5, 95]).unwrap();
        let mut buf = Vec::new();
        cm.write_csv(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert_eq!(text, "actual\\predicted,c0,c1\nc0,40,10\nc1,5,95\n");
        assert_eq!(ConfusionMatrix::read_csv(&buf[..]).unwrap(), cm);
        assert!(ConfusionMatrix::read_csv(&b"x,a,b\na,1,2\n"[..]).is_err());
    }

    fn arb_cm(k: usize) -> impl Strategy<Value = ConfusionMatrix> {
        proptest::collection::vec(0u64..50, k * k)
            .prop_filter("non-empty", |c| c.iter().sum::<u64>() > 0)
            .prop_map(move |c| ConfusionMatrix::from_counts(labels(k), c).unwrap())
    }

    proptest! {
        #[test]
        fn conservation_laws(cm in arb_cm(5)) {
            let per: Vec<BinaryCounts> = (0..5).map(|c| one_vs_rest(&cm, c)).collect();
            prop_assert_eq!(per.iter().map(|b| b.tp).sum::<u64>(), cm.trace());
            prop_assert_eq!(per.iter().map(|b| b.tp + b.fn_).sum::<u64>(), cm.total());
            for b in &per {
                prop_assert_eq!(b.total(), cm.total());
                let m = binary_metrics(b);
                for v in [m.accuracy, m.sensitivity, m.specificity, m.precision, m.f1].into_iter().flatten() {
                    prop_assert!((0.0..=1.0).contains(&v));
                }
            }
        }

        #[test]
        fn accuracy_is_support_weighted_recall(cm in arb_cm(5)) {
            let r = report(&cm).unwrap();
            let weighted: f64 = (0..5)
                .filter_map(|c| r.per_class[c].1.sensitivity.map(|s| s * cm.row_sum(c) as f64))
                .sum::<f64>() / cm.total() as f64;
            prop_assert!((weighted - r.overall_accuracy).abs() < 1e-12);
        }

        #[test]
        fn two_class_mirror(cm in arb_cm(2)) {
            let a = one_vs_rest(&cm, 0);
            let b = one_vs_rest(&cm, 1);
            prop_assert_eq!((a.tp, a.tn, a.fp, a.fn_), (b.tn, b.tp, b.fn_, b.fp));
        }

        #[test]
        fn permuting_classes_permutes_metrics(cm in arb_cm(4), rot in 0usize..4) {
            let k = 4;
            let perm: Vec<usize> = (0..k).map(|i| (i + rot) % k).collect();
            let mut counts = vec![0u64; k * k];
            let mut new_labels = vec![String::new(); k];
            for i in 0..k {
                new_labels[perm[i]] = cm.labels()[i].clone();
                for j in 0..k {
                    counts[perm[i] * k + perm[j]] = cm.get(i, j);
                }
            }
            let pcm = ConfusionMatrix::from_counts(new_labels, counts).unwrap();
            let (r, pr) = (report(&cm).unwrap(), report(&pcm).unwrap());
            prop_assert_eq!(r.overall_accuracy, pr.overall_accuracy);
            for (i, &pi) in perm.iter().enumerate() {
                prop_assert_eq!(&r.per_class[i], &pr.per_class[pi]);
            }
        }
    }
}
