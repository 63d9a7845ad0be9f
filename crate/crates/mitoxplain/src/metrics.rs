//! Classification metrics and multi-seed model rankings.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::stack::ClassLabel;

/// 2x2 counts indexed (true class, predicted class) over {control, patient}.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConfusionMatrix {
    pub counts: [[u64; 2]; 2],
}

impl ConfusionMatrix {
    pub fn total(&self) -> u64 {
        self.counts.iter().flatten().sum()
    }
}

/// Exact confusion counts.
pub fn confusion(predictions: &[ClassLabel], labels: &[ClassLabel]) -> Result<ConfusionMatrix> {
    if predictions.len() != labels.len() {
        return Err(Error::LengthMismatch { left: predictions.len(), right: labels.len() });
    }
    if predictions.is_empty() {
        return Err(Error::InvalidParameter("empty prediction list".to_string()));
    }
    let mut counts = [[0u64; 2]; 2];
    for (p, l) in predictions.iter().zip(labels) {
        counts[l.index()][p.index()] += 1;
    }
    Ok(ConfusionMatrix { counts })
}

/// Per-run metrics. Zero-denominator precision/recall are reported as 0
/// with `zero_denominator_warning` set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub test_accuracy: f64,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub patient_precision: f64,
    pub patient_recall: f64,
    pub patient_f1: f64,
    pub seed: u64,
    pub zero_denominator_warning: bool,
}

fn f1(precision: f64, recall: f64) -> f64 {
    if precision + recall == 0.0 {
        0.0
    } else {
        2.0 * precision * recall / (precision + recall)
    }
}

/// Accuracy, macro and patient-class precision/recall/F1 from a confusion
/// matrix. Macro values are unweighted means over the two classes.
pub fn classification_report(cm: &ConfusionMatrix, seed: u64) -> Result<MetricsReport> {
    let total = cm.total();
    if total == 0 {
        return Err(Error::InvalidParameter("empty confusion matrix".to_string()));
    }
    let mut warned = false;
    let mut rate = |num: u64, denom: u64| -> f64 {
        if denom == 0 {
            warned = true;
            0.0
        } else {
            num as f64 / denom as f64
        }
    };
    let mut precision = [0.0; 2];
    let mut recall = [0.0; 2];
    for class in 0..2 {
        let tp = cm.counts[class][class];
        let predicted = cm.counts[0][class] + cm.counts[1][class];
        let actual = cm.counts[class][0] + cm.counts[class][1];
        precision[class] = rate(tp, predicted);
        recall[class] = rate(tp, actual);
    }
    let accuracy = (cm.counts[0][0] + cm.counts[1][1]) as f64 / total as f64;
    let patient = ClassLabel::Patient.index();
    Ok(MetricsReport {
        test_accuracy: accuracy,
        macro_precision: (precision[0] + precision[1]) / 2.0,
        macro_recall: (recall[0] + recall[1]) / 2.0,
        macro_f1: (f1(precision[0], recall[0]) + f1(precision[1], recall[1])) / 2.0,
        patient_precision: precision[patient],
        patient_recall: recall[patient],
        patient_f1: f1(precision[patient], recall[patient]),
        seed,
        zero_denominator_warning: warned,
    })
}

/// Arithmetic mean, sample standard deviation and sample variance
/// (n - 1 denominator) of per-seed accuracies.
pub fn aggregate_seeds(accuracies: &[f64]) -> Result<(f64, f64, f64)> {
    if accuracies.len() < 2 {
        return Err(Error::TooFewSeeds(accuracies.len()));
    }
    let n = accuracies.len() as f64;
    let mean = accuracies.iter().sum::<f64>() / n;
    let var = accuracies.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / (n - 1.0);
    Ok((mean, var.sqrt(), var))
}

/// Truncate toward zero at two decimals. Reported tables use truncation
/// rather than rounding (e.g. a mean of 95.5375 prints as 95.53), so
/// rendered values follow the same convention.
pub fn trunc2(value: f64) -> f64 {
    (value * 100.0).trunc() / 100.0
}

/// One model's per-seed test accuracies (percent).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankingRow {
    pub model: String,
    pub dataset: String,
    pub channel: String,
    pub seed_accuracies: Vec<f64>,
    pub mean: f64,
    pub sd: f64,
    pub var: f64,
}

/// Rows sorted by mean test accuracy, descending.
#[derive(Debug, Clone, PartialEq)]
pub struct RankingTable {
    pub rows: Vec<RankingRow>,
}

/// Build the ranking: mean descending, ties broken by lower SD, then by
/// channel name. Single-seed rows get SD = Var = 0.
pub fn rank_models(
    rows: &[(String, String, String, Vec<f64>)],
) -> Result<RankingTable> {
    let Some(first) = rows.first() else {
        return Ok(RankingTable { rows: Vec::new() });
    };
    let seed_count = first.3.len();
    if rows.iter().any(|r| r.3.len() != seed_count) {
        return Err(Error::RaggedRows);
    }
    if seed_count == 0 {
        return Err(Error::InvalidParameter("rows carry no seed accuracies".to_string()));
    }
    let mut table: Vec<RankingRow> = rows
        .iter()
        .map(|(model, dataset, channel, accs)| {
            let (mean, sd, var) = if accs.len() >= 2 {
                aggregate_seeds(accs).expect("len checked")
            } else {
                (accs[0], 0.0, 0.0)
            };
            Ok(RankingRow {
                model: model.clone(),
                dataset: dataset.clone(),
                channel: channel.clone(),
                seed_accuracies: accs.clone(),
                mean,
                sd,
                var,
            })
        })
        .collect::<Result<_>>()?;
    table.sort_by(|a, b| {
        b.mean
            .partial_cmp(&a.mean)
            .expect("finite means")
            .then(a.sd.partial_cmp(&b.sd).expect("finite sd"))
            .then(a.channel.cmp(&b.channel))
    });
    Ok(RankingTable { rows: table })
}

impl RankingTable {
    /// CSV with one row per model, truncated display values alongside the
    /// raw per-seed accuracies.
    pub fn to_csv(&self) -> String {
        let seed_count = self.rows.first().map(|r| r.seed_accuracies.len()).unwrap_or(0);
        let mut out = String::from("model,dataset,channel");
        for i in 0..seed_count {
            out.push_str(&format!(",ta_seed_{}", (b'a' + i as u8) as char));
        }
        out.push_str(",mean_ta,sd_ta,var_ta\n");
        for row in &self.rows {
            out.push_str(&format!("{},{},{}", row.model, row.dataset, row.channel));
            for acc in &row.seed_accuracies {
                out.push_str(&format!(",{}", trunc2(*acc)));
            }
            out.push_str(&format!(
                ",{:.2},{:.2},{:.2}\n",
                trunc2(row.mean),
                trunc2(row.sd),
                trunc2(row.var)
            ));
        }
        out
    }

    /// Markdown table with the same column layout.
    pub fn to_markdown(&self) -> String {
        let seed_count = self.rows.first().map(|r| r.seed_accuracies.len()).unwrap_or(0);
        let mut out = String::from("| Model | Dataset | Channel |");
        for i in 0..seed_count {
            out.push_str(&format!(" TA {} (%) |", (b'A' + i as u8) as char));
        }
        out.push_str(" Mean TA (%) | SD TA | Var TA |\n|");
        for _ in 0..(seed_count + 6) {
            out.push_str("---|");
        }
        out.push('\n');
        for row in &self.rows {
            out.push_str(&format!("| {} | {} | {} |", row.model, row.dataset, row.channel));
            for acc in &row.seed_accuracies {
                out.push_str(&format!(" {} |", trunc2(*acc)));
            }
            out.push_str(&format!(
                " {:.2} | {:.2} | {:.2} |\n",
                trunc2(row.mean),
                trunc2(row.sd),
                trunc2(row.var)
            ));
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(control: usize, patient: usize) -> Vec<ClassLabel> {
        let mut v = vec![ClassLabel::Control; control];
        v.extend(std::iter::repeat_n(ClassLabel::Patient, patient));
        v
    }

    #[test]
    fn perfect_predictions_have_zero_off_diagonal() {
        // a perfect 28-item test set scores 100% on every metric
        let l = labels(14, 14);
        let cm = confusion(&l, &l).unwrap();
        assert_eq!(cm.counts[0][1], 0);
        assert_eq!(cm.counts[1][0], 0);
        assert_eq!(cm.counts[0][0], 14);
        assert_eq!(cm.counts[1][1], 14);
        let report = classification_report(&cm, 0).unwrap();
        assert_eq!(report.test_accuracy, 1.0);
        assert_eq!(trunc2(report.test_accuracy * 100.0), 100.0);
        assert_eq!(report.macro_f1, 1.0);
        assert_eq!(report.patient_f1, 1.0);
        assert!(!report.zero_denominator_warning);
    }

    #[test]
    fn all_predicted_patient_on_balanced_labels() {
        let l = labels(2, 2);
        let p = vec![ClassLabel::Patient; 4];
        let cm = confusion(&p, &l).unwrap();
        assert_eq!(cm.counts, [[0, 2], [0, 2]]);
    }

    #[test]
    fn random_fixture_matches_independent_tally() {
        use rand::prelude::*;
        use rand_chacha::ChaCha20Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(28);
        let flip = |rng: &mut ChaCha20Rng| {
            if rng.random::<bool>() {
                ClassLabel::Patient
            } else {
                ClassLabel::Control
            }
        };
        let labels: Vec<ClassLabel> = (0..28).map(|_| flip(&mut rng)).collect();
        let preds: Vec<ClassLabel> = (0..28).map(|_| flip(&mut rng)).collect();
        let cm = confusion(&preds, &labels).unwrap();
        // brute-force tally
        let mut expected = [[0u64; 2]; 2];
        for i in 0..28 {
            expected[labels[i].index()][preds[i].index()] += 1;
        }
        assert_eq!(cm.counts, expected);
        assert_eq!(cm.total(), 28);
    }

    #[test]
    fn degenerate_all_control_predictions() {
        // cm [[2,0],[2,0]]: patient precision/recall/f1 all 0, warned
        let cm = ConfusionMatrix { counts: [[2, 0], [2, 0]] };
        let report = classification_report(&cm, 0).unwrap();
        assert_eq!(report.patient_recall, 0.0);
        assert_eq!(report.patient_precision, 0.0);
        assert_eq!(report.patient_f1, 0.0);
        assert!(report.zero_denominator_warning);
    }

    #[test]
    fn hand_checked_balanced_matrix() {
        let cm = ConfusionMatrix { counts: [[3, 1], [1, 3]] };
        let report = classification_report(&cm, 0).unwrap();
        assert!((report.test_accuracy - 0.75).abs() < 1e-12);
        assert!((report.macro_f1 - 0.75).abs() < 1e-12);
        assert!((report.patient_precision - 0.75).abs() < 1e-12);
    }

    #[test]
    fn aggregate_matches_reported_two_decimal_values() {
        // published per-seed accuracies and their reported aggregates
        let (mean, sd, var) = aggregate_seeds(&[100.0, 92.86, 100.0, 96.43]).unwrap();
        assert_eq!(trunc2(mean), 97.32);
        assert_eq!(trunc2(sd), 3.41);
        assert_eq!(trunc2(var), 11.68);

        let (mean, sd, var) = aggregate_seeds(&[100.0, 92.86, 92.86, 96.43]).unwrap();
        assert_eq!(trunc2(mean), 95.53);
        assert_eq!(trunc2(sd), 3.41);
        assert_eq!(trunc2(var), 11.68);

        let (mean, sd, var) = aggregate_seeds(&[5.0, 5.0, 5.0, 5.0]).unwrap();
        assert_eq!(mean, 5.0);
        assert_eq!(sd, 0.0);
        assert_eq!(var, 0.0);

        assert!(matches!(aggregate_seeds(&[1.0]), Err(Error::TooFewSeeds(1))));
    }

    #[test]
    fn single_row_ranks_as_itself_and_ties_break_on_sd() {
        let single = rank_models(&[(
            "m".to_string(),
            "d".to_string(),
            "c".to_string(),
            vec![90.0, 92.0],
        )])
        .unwrap();
        assert_eq!(single.rows.len(), 1);

        let tied = rank_models(&[
            ("m".into(), "d".into(), "noisy".into(), vec![88.0, 92.0]),
            ("m".into(), "d".into(), "steady".into(), vec![89.0, 91.0]),
        ])
        .unwrap();
        assert_eq!(tied.rows[0].channel, "steady");
        assert_eq!(tied.rows[1].channel, "noisy");
    }

    #[test]
    fn ragged_rows_are_rejected() {
        let err = rank_models(&[
            ("m".into(), "d".into(), "a".into(), vec![1.0, 2.0]),
            ("m".into(), "d".into(), "b".into(), vec![1.0]),
        ])
        .unwrap_err();
        assert!(matches!(err, Error::RaggedRows));
    }

    #[test]
    fn sd_squared_equals_var_for_all_rows() {
        use rand::prelude::*;
        use rand_chacha::ChaCha20Rng;
        let mut rng = ChaCha20Rng::seed_from_u64(7);
        let rows: Vec<(String, String, String, Vec<f64>)> = (0..10)
            .map(|i| {
                (
                    "m".to_string(),
                    "d".to_string(),
                    format!("c{i}"),
                    (0..4).map(|_| rng.random::<f64>() * 100.0).collect(),
                )
            })
            .collect();
        let table = rank_models(&rows).unwrap();
        for row in &table.rows {
            assert!((row.sd * row.sd - row.var).abs() < 1e-6);
            let mean = row.seed_accuracies.iter().sum::<f64>() / 4.0;
            assert!((row.mean - mean).abs() < 1e-6);
        }
        // sorted descending
        for pair in table.rows.windows(2) {
            assert!(pair[0].mean >= pair[1].mean);
        }
    }
}
