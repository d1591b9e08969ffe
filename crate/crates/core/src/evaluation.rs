//! Binary classification metrics over {HEM, ALL}.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::Label;

pub const METRICS_SCHEMA_VERSION: u32 = 1;

/// Counts indexed `[true label][predicted label]`, HEM first.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    /// Rows are true labels: `hem = [HEM→HEM, HEM→ALL]`, `all = [ALL→HEM, ALL→ALL]`.
    pub fn from_rows(hem: [u64; 2], all: [u64; 2]) -> Self {
        ConfusionMatrix { counts: [hem, all] }
    }

    pub fn get(&self, truth: Label, predicted: Label) -> u64 {
        self.counts[truth.index()][predicted.index()]
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }

    pub fn correct(&self) -> u64 {
        self.counts[0][0] + self.counts[1][1]
    }

    /// Number of samples whose true label is `label`.
    pub fn support(&self, label: Label) -> u64 {
        self.counts[label.index()].iter().sum()
    }

    pub fn predicted(&self, label: Label) -> u64 {
        self.counts[0][label.index()] + self.counts[1][label.index()]
    }
}

pub fn confusion(predictions: &[Label], labels: &[Label]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} predictions for {} labels",
            predictions.len(),
            labels.len()
        )));
    }
    if labels.is_empty() {
        return Err(Error::InvalidInput("no samples to evaluate".into()));
    }
    let mut cm = ConfusionMatrix::default();
    for (p, t) in predictions.iter().zip(labels) {
        cm.counts[t.index()][p.index()] += 1;
    }
    Ok(cm)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: u64,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Averaged {
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub n_samples: u64,
    pub accuracy: f64,
    pub weighted: Averaged,
    #[serde(rename = "macro")]
    pub macro_avg: Averaged,
    pub hem: ClassMetrics,
    pub all: ClassMetrics,
    /// Recall of ALL.
    pub sensitivity: f64,
    /// Recall of HEM.
    pub specificity: f64,
    pub auc: Option<f64>,
    pub confusion: ConfusionMatrix,
    /// Zero-division and similar conditions; never empty when a metric was
    /// defined by convention rather than computed.
    pub warnings: Vec<String>,
}

impl MetricsReport {
    pub fn class(&self, label: Label) -> &ClassMetrics {
        match label {
            Label::Hem => &self.hem,
            Label::All => &self.all,
        }
    }

    pub fn write_json(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn read_json(path: &Path) -> Result<MetricsReport> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

fn ratio(num: u64, den: u64) -> Option<f64> {
    (den > 0).then(|| num as f64 / den as f64)
}

fn f1(p: f64, r: f64) -> f64 {
    if p + r > 0.0 {
        2.0 * p * r / (p + r)
    } else {
        0.0
    }
}

fn class_metrics(cm: &ConfusionMatrix, label: Label, warnings: &mut Vec<String>) -> ClassMetrics {
    let tp = cm.get(label, label);
    let precision = ratio(tp, cm.predicted(label)).unwrap_or_else(|| {
        warnings.push(format!("no samples predicted as {label}; its precision is set to 0"));
        0.0
    });
    let recall = ratio(tp, cm.support(label)).unwrap_or_else(|| {
        warnings.push(format!("no true {label} samples; its recall is set to 0"));
        0.0
    });
    ClassMetrics {
        precision,
        recall,
        f1: f1(precision, recall),
        support: cm.support(label),
    }
}

/// All metrics from a confusion matrix. `scores` (probability of ALL, with
/// the true labels) is needed only for the AUC.
pub fn derive_metrics(cm: &ConfusionMatrix, scores: Option<(&[f64], &[Label])>) -> Result<MetricsReport> {
    let n = cm.total();
    if n == 0 {
        return Err(Error::InvalidInput("empty confusion matrix".into()));
    }
    let mut warnings = Vec::new();
    let hem = class_metrics(cm, Label::Hem, &mut warnings);
    let all = class_metrics(cm, Label::All, &mut warnings);
    let (wh, wa) = (hem.support as f64 / n as f64, all.support as f64 / n as f64);
    let weighted = Averaged {
        precision: wh * hem.precision + wa * all.precision,
        recall: wh * hem.recall + wa * all.recall,
        f1: wh * hem.f1 + wa * all.f1,
    };
    let macro_avg = Averaged {
        precision: (hem.precision + all.precision) / 2.0,
        recall: (hem.recall + all.recall) / 2.0,
        f1: (hem.f1 + all.f1) / 2.0,
    };
    let auc = match scores {
        Some((s, l)) => Some(auc(s, l)?),
        None => None,
    };
    Ok(MetricsReport {
        schema_version: METRICS_SCHEMA_VERSION,
        n_samples: n,
        accuracy: cm.correct() as f64 / n as f64,
        weighted,
        macro_avg,
        sensitivity: all.recall,
        specificity: hem.recall,
        hem,
        all,
        auc,
        confusion: *cm,
        warnings,
    })
}

/// Area under the ROC curve as the Mann–Whitney statistic: the probability
/// that a random ALL sample scores above a random HEM sample, ties counting ½.
pub fn auc(scores: &[f64], labels: &[Label]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::InvalidInput(format!(
            "{} scores for {} labels",
            scores.len(),
            labels.len()
        )));
    }
    if let Some(s) = scores.iter().find(|s| !s.is_finite()) {
        return Err(Error::InvalidInput(format!("non-finite score {s}")));
    }
    let n_pos = labels.iter().filter(|l| **l == Label::All).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::InvalidInput(
            "AUC needs at least one sample of each class".into(),
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // ranks i+1 ..= j+1 share their mean
        let avg = (i + j + 2) as f64 / 2.0;
        for &k in &order[i..=j] {
            if labels[k] == Label::All {
                rank_sum_pos += avg;
            }
        }
        i = j + 1;
    }
    let (p, q) = (n_pos as f64, n_neg as f64);
    Ok((rank_sum_pos - p * (p + 1.0) / 2.0) / (p * q))
}

/// Confusion matrix, metrics and AUC in one call.
pub fn evaluate(predictions: &[Label], labels: &[Label], scores: Option<&[f64]>) -> Result<MetricsReport> {
    let cm = confusion(predictions, labels)?;
    derive_metrics(&cm, scores.map(|s| (s, labels)))
}

/// One row of a predictions table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PredictionRow {
    pub image_id: String,
    pub label: Label,
    pub prediction: Label,
    /// Probability of ALL.
    pub score_all: Option<f64>,
}

pub fn write_predictions(rows: &[PredictionRow], path: &Path) -> Result<()> {
    let mut w = csv::WriterBuilder::new().delimiter(b'\t').from_path(path)?;
    for row in rows {
        w.serialize(row)?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a tab-separated table with columns `image_id`, `label`,
/// `prediction` and optionally `score_all`.
pub fn read_predictions(path: &Path) -> Result<Vec<PredictionRow>> {
    let mut r = csv::ReaderBuilder::new().delimiter(b'\t').from_path(path)?;
    let mut rows = Vec::new();
    for (i, row) in r.deserialize::<PredictionRow>().enumerate() {
        rows.push(row.map_err(|e| Error::Parse {
            file: path.display().to_string(),
            line: i + 2,
            message: e.to_string(),
        })?);
    }
    Ok(rows)
}

/// Metrics for a predictions table; AUC is computed when every row has a
/// score.
pub fn evaluate_rows(rows: &[PredictionRow]) -> Result<MetricsReport> {
    let preds: Vec<Label> = rows.iter().map(|r| r.prediction).collect();
    let labels: Vec<Label> = rows.iter().map(|r| r.label).collect();
    let scores: Option<Vec<f64>> = rows.iter().map(|r| r.score_all).collect();
    let cm = confusion(&preds, &labels)?;
    let both = cm.support(Label::All) > 0 && cm.support(Label::Hem) > 0;
    derive_metrics(&cm, scores.as_deref().filter(|_| both).map(|s| (s, labels.as_slice())))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn table2() -> ConfusionMatrix {
        ConfusionMatrix::from_rows([964, 18], [26, 1076])
    }

    fn brute_auc(s: &[f64], l: &[Label]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..s.len() {
            for j in 0..s.len() {
                if l[i] == Label::All && l[j] == Label::Hem {
                    den += 1.0;
                    if s[i] > s[j] {
                        num += 1.0
                    } else if s[i] == s[j] {
                        num += 0.5
                    }
                }
            }
        }
        num / den
    }

    #[test]
    fn hand_tally() {
        use Label::*;
        let preds = [All, All, Hem, Hem, All, Hem];
        let truth = [All, Hem, Hem, All, All, Hem];
        let cm = confusion(&preds, &truth).unwrap();
        assert_eq!(cm, ConfusionMatrix::from_rows([2, 1], [1, 2]));
        assert_eq!(cm.total(), 6);
    }

    #[test]
    fn table2_quadruple() {
        let r = derive_metrics(&table2(), None).unwrap();
        let acc = 2040.0 / 2084.0;
        assert!((r.accuracy - acc).abs() < 1e-15);
        // weighted precision by hand: supports 982 and 1102
        let p_hem = 964.0 / 990.0;
        let p_all = 1076.0 / 1094.0;
        let wp = (982.0 * p_hem + 1102.0 * p_all) / 2084.0;
        assert!((r.weighted.precision - wp).abs() < 1e-15);
        for v in [r.accuracy, r.weighted.precision, r.weighted.recall, r.weighted.f1] {
            assert!((v - 0.9789).abs() < 1e-4, "{v}");
        }
        assert!((r.sensitivity - 1076.0 / 1102.0).abs() < 1e-15);
        assert!((r.specificity - 964.0 / 982.0).abs() < 1e-15);
        assert!(r.warnings.is_empty());
    }

    #[test]
    fn perfect_predictions() {
        let r = evaluate(&[Label::All, Label::Hem], &[Label::All, Label::Hem], Some(&[0.9, 0.1])).unwrap();
        for v in [
            r.accuracy,
            r.weighted.f1,
            r.macro_avg.f1,
            r.sensitivity,
            r.specificity,
            r.auc.unwrap(),
        ] {
            assert_eq!(v, 1.0);
        }
    }

    #[test]
    fn zero_predicted_positives_is_flagged() {
        let r = evaluate(&[Label::Hem, Label::Hem], &[Label::All, Label::Hem], None).unwrap();
        assert_eq!(r.all.precision, 0.0);
        assert_eq!(r.warnings.len(), 1);
    }

    #[test]
    fn empty_and_unequal_inputs_fail() {
        assert!(confusion(&[], &[]).is_err());
        assert!(confusion(&[Label::All], &[]).is_err());
    }

    #[test]
    fn auc_edge_cases() {
        use Label::*;
        assert_eq!(auc(&[0.1, 0.2, 0.8, 0.9], &[Hem, Hem, All, All]).unwrap(), 1.0);
        assert_eq!(auc(&[0.5; 4], &[Hem, All, Hem, All]).unwrap(), 0.5);
        assert!(auc(&[0.1, 0.2], &[All, All]).is_err());
        assert!(auc(&[f64::NAN, 0.2], &[All, Hem]).is_err());
    }

    #[test]
    fn auc_matches_pairwise_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        for trial in 0..50 {
            let n = rng.random_range(2..=200);
            let levels = if trial % 2 == 0 { 5 } else { 1_000_000 };
            let s: Vec<f64> = (0..n)
                .map(|_| rng.random_range(0..levels) as f64 / levels as f64)
                .collect();
            let mut l: Vec<Label> = (0..n)
                .map(|_| if rng.random_bool(0.5) { Label::All } else { Label::Hem })
                .collect();
            l[0] = Label::All;
            l[1] = Label::Hem;
            assert!((auc(&s, &l).unwrap() - brute_auc(&s, &l)).abs() < 1e-12);
        }
    }

    #[test]
    fn predictions_table_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.tsv");
        let rows = vec![
            PredictionRow {
                image_id: "a".into(),
                label: Label::All,
                prediction: Label::All,
                score_all: Some(0.9),
            },
            PredictionRow {
                image_id: "b".into(),
                label: Label::Hem,
                prediction: Label::All,
                score_all: Some(0.6),
            },
        ];
        write_predictions(&rows, &path).unwrap();
        assert_eq!(read_predictions(&path).unwrap(), rows);
        std::fs::write(&path, "image_id\tlabel\tprediction\nx\tALL\tHEM\n").unwrap();
        let back = read_predictions(&path).unwrap();
        assert_eq!(back[0].score_all, None);
    }

    fn cm_strategy() -> impl Strategy<Value = ConfusionMatrix> {
        (0u64..500, 0u64..500, 0u64..500, 0u64..500)
            .prop_filter("non-empty", |(a, b, c, d)| a + b + c + d > 0)
            .prop_map(|(a, b, c, d)| ConfusionMatrix::from_rows([a, b], [c, d]))
    }

    proptest! {
        #[test]
        fn weighted_recall_equals_accuracy(cm in cm_strategy()) {
            let r = derive_metrics(&cm, None).unwrap();
            prop_assert!((r.weighted.recall - r.accuracy).abs() < 1e-12);
            for v in [r.accuracy, r.weighted.precision, r.weighted.f1, r.macro_avg.precision, r.macro_avg.recall, r.macro_avg.f1] {
                prop_assert!((0.0..=1.0).contains(&v));
            }
        }

        #[test]
        fn macro_equals_weighted_for_equal_support(a in 0u64..300, c in 0u64..300, n in 300u64..600) {
            let cm = ConfusionMatrix::from_rows([n - a, a], [c, n - c]);
            let r = derive_metrics(&cm, None).unwrap();
            prop_assert!((r.macro_avg.f1 - r.weighted.f1).abs() < 1e-12);
            prop_assert!((r.macro_avg.precision - r.weighted.precision).abs() < 1e-12);
        }

        #[test]
        fn permutation_invariance(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 40;
            let labels: Vec<Label> = (0..n).map(|i| if i % 3 == 0 { Label::All } else { Label::Hem }).collect();
            let preds: Vec<Label> = (0..n).map(|_| if rng.random_bool(0.5) { Label::All } else { Label::Hem }).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.random::<f64>()).collect();
            let a = evaluate(&preds, &labels, Some(&scores)).unwrap();
            let mut idx: Vec<usize> = (0..n).collect();
            idx.reverse();
            idx.rotate_left((seed % 7) as usize);
            let p2: Vec<Label> = idx.iter().map(|&i| preds[i]).collect();
            let l2: Vec<Label> = idx.iter().map(|&i| labels[i]).collect();
            let s2: Vec<f64> = idx.iter().map(|&i| scores[i]).collect();
            prop_assert_eq!(a, evaluate(&p2, &l2, Some(&s2)).unwrap());
        }

        #[test]
        fn auc_invariant_under_monotone_transform(seed in 0u64..1000) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let n = 60;
            let labels: Vec<Label> = (0..n).map(|i| if i % 2 == 0 { Label::All } else { Label::Hem }).collect();
            let scores: Vec<f64> = (0..n).map(|_| rng.random_range(0..20) as f64 / 20.0).collect();
            let transformed: Vec<f64> = scores.iter().map(|s| (3.0 * s).exp() - 7.0).collect();
            prop_assert_eq!(auc(&scores, &labels).unwrap(), auc(&transformed, &labels).unwrap());
        }
    }
}
