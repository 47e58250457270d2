use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::text::{canonical, tokenize};

pub const LABEL_COUNT: usize = 18;

/// The abnormality set, in canonical table order.
pub const LABEL_NAMES: [&str; LABEL_COUNT] = [
    "Medical material",
    "Arterial wall calcification",
    "Cardiomegaly",
    "Pericardial effusion",
    "Coronary artery wall calcification",
    "Hiatal hernia",
    "Lymphadenopathy",
    "Emphysema",
    "Atelectasis",
    "Lung nodule",
    "Lung opacity",
    "Pulmonary fibrotic sequela",
    "Pleural effusion",
    "Mosaic attenuation pattern",
    "Peribronchial thickening",
    "Consolidation",
    "Bronchiectasis",
    "Interlobular septal thickening",
];

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("labeler rules malformed: {message}")]
    BadRules { message: String },
    #[error("prediction/truth lists differ in length: {preds} vs {truths}")]
    LengthMismatch { preds: usize, truths: usize },
}

/// One boolean per abnormality, in [`LABEL_NAMES`] order.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct LabelVector(pub [bool; LABEL_COUNT]);

impl LabelVector {
    pub fn none() -> Self {
        LabelVector([false; LABEL_COUNT])
    }

    pub fn count(&self) -> usize {
        self.0.iter().filter(|&&b| b).count()
    }
}

#[derive(Clone, Debug, Deserialize)]
struct LabelRule {
    name: String,
    include: Vec<String>,
}

/// Keyword rules for the 18-abnormality labeler. Shipped as an editable JSON
/// file; the default is compiled in.
#[derive(Clone, Debug, Deserialize)]
pub struct LabelerRules {
    negation_tokens: Vec<String>,
    labels: Vec<LabelRule>,
}

pub(crate) const DEFAULT_RULES_JSON: &str = include_str!("../../data/labeler_rules.json");

impl LabelerRules {
    pub fn default_rules() -> Self {
        Self::from_json(DEFAULT_RULES_JSON).expect("bundled rules are valid")
    }

    pub fn from_json(json: &str) -> Result<Self, MetricsError> {
        let rules: LabelerRules = serde_json::from_str(json).map_err(|e| MetricsError::BadRules {
            message: e.to_string(),
        })?;
        if rules.labels.len() != LABEL_COUNT {
            return Err(MetricsError::BadRules {
                message: format!("expected {LABEL_COUNT} labels, found {}", rules.labels.len()),
            });
        }
        for (rule, expected) in rules.labels.iter().zip(LABEL_NAMES) {
            if rule.name != expected {
                return Err(MetricsError::BadRules {
                    message: format!("label {:?} out of order, expected {expected:?}", rule.name),
                });
            }
            if rule.include.is_empty() {
                return Err(MetricsError::BadRules {
                    message: format!("label {:?} has no include phrases", rule.name),
                });
            }
        }
        Ok(rules)
    }

    /// Include phrases for one label, canonical form.
    pub fn phrases(&self, label: usize) -> &[String] {
        &self.labels[label].include
    }
}

/// Keyword extraction over sentences with a word-level negation guard: a
/// label phrase found in a sentence counts as positive unless a negation
/// token occurs in the same sentence.
pub fn extract_labels_with(report: &str, rules: &LabelerRules) -> LabelVector {
    let mut out = [false; LABEL_COUNT];
    for sentence in report.split(['.', ';']) {
        let canon = canonical(sentence);
        if canon.is_empty() {
            continue;
        }
        let padded = format!(" {canon} ");
        let tokens = tokenize(sentence);
        let negated = tokens
            .iter()
            .any(|t| rules.negation_tokens.iter().any(|n| n == t));
        if negated {
            continue;
        }
        for (idx, rule) in rules.labels.iter().enumerate() {
            if out[idx] {
                continue;
            }
            if rule
                .include
                .iter()
                .any(|phrase| padded.contains(&format!(" {phrase}")))
            {
                out[idx] = true;
            }
        }
    }
    LabelVector(out)
}

/// [`extract_labels_with`] under the bundled default rules.
pub fn extract_labels(report: &str) -> LabelVector {
    extract_labels_with(report, &LabelerRules::default_rules())
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct LabelScore {
    pub label: String,
    pub tp: usize,
    pub fp: usize,
    pub fn_: usize,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
}

/// Per-label precision/recall/F1 plus the label-mean row and an
/// example-averaged row.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CeReport {
    pub per_label: Vec<LabelScore>,
    pub mean_precision: f64,
    pub mean_recall: f64,
    pub mean_f1: f64,
    pub example_precision: f64,
    pub example_recall: f64,
    pub example_f1: f64,
}

fn prf(tp: usize, fp: usize, fn_: usize) -> (f64, f64, f64) {
    let p = if tp + fp == 0 {
        0.0
    } else {
        tp as f64 / (tp + fp) as f64
    };
    let r = if tp + fn_ == 0 {
        0.0
    } else {
        tp as f64 / (tp + fn_) as f64
    };
    let f1 = if p + r == 0.0 { 0.0 } else { 2.0 * p * r / (p + r) };
    (p, r, f1)
}

/// Label both report lists and score agreement per abnormality.
pub fn clinical_efficacy(
    pred_reports: &[String],
    truth_reports: &[String],
    rules: &LabelerRules,
) -> Result<CeReport, MetricsError> {
    if pred_reports.len() != truth_reports.len() {
        return Err(MetricsError::LengthMismatch {
            preds: pred_reports.len(),
            truths: truth_reports.len(),
        });
    }
    let preds: Vec<LabelVector> = pred_reports
        .iter()
        .map(|r| extract_labels_with(r, rules))
        .collect();
    let truths: Vec<LabelVector> = truth_reports
        .iter()
        .map(|r| extract_labels_with(r, rules))
        .collect();

    let mut per_label = Vec::with_capacity(LABEL_COUNT);
    let (mut sp, mut sr, mut sf) = (0.0, 0.0, 0.0);
    for l in 0..LABEL_COUNT {
        let mut tp = 0;
        let mut fp = 0;
        let mut fn_ = 0;
        for (p, t) in preds.iter().zip(&truths) {
            match (p.0[l], t.0[l]) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                (false, false) => {}
            }
        }
        let (p, r, f1) = prf(tp, fp, fn_);
        sp += p;
        sr += r;
        sf += f1;
        per_label.push(LabelScore {
            label: LABEL_NAMES[l].to_string(),
            tp,
            fp,
            fn_,
            precision: p,
            recall: r,
            f1,
        });
    }

    let n = preds.len().max(1) as f64;
    let (mut ep, mut er, mut ef) = (0.0, 0.0, 0.0);
    for (p, t) in preds.iter().zip(&truths) {
        let tp = (0..LABEL_COUNT).filter(|&l| p.0[l] && t.0[l]).count();
        let fp = (0..LABEL_COUNT).filter(|&l| p.0[l] && !t.0[l]).count();
        let fn_ = (0..LABEL_COUNT).filter(|&l| !p.0[l] && t.0[l]).count();
        let (pp, rr, ff) = prf(tp, fp, fn_);
        ep += pp;
        er += rr;
        ef += ff;
    }

    Ok(CeReport {
        per_label,
        mean_precision: sp / LABEL_COUNT as f64,
        mean_recall: sr / LABEL_COUNT as f64,
        mean_f1: sf / LABEL_COUNT as f64,
        example_precision: ep / n,
        example_recall: er / n,
        example_f1: ef / n,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn idx(name: &str) -> usize {
        LABEL_NAMES.iter().position(|&n| n == name).unwrap()
    }

    #[test]
    fn normal_heart_sentence_is_all_zero() {
        let v = extract_labels("Heart size is normal.");
        assert_eq!(v, LabelVector::none());
    }

    #[test]
    fn unnegated_mention_sets_label() {
        let v = extract_labels("There is cardiomegaly.");
        assert!(v.0[idx("Cardiomegaly")]);
        assert_eq!(v.count(), 1);
    }

    #[test]
    fn case_study_plaque_phrase() {
        let v = extract_labels("Calcified atherosclerotic plaques are seen in the aorta.");
        assert!(v.0[idx("Arterial wall calcification")]);
    }

    #[test]
    fn negation_guard_within_sentence() {
        let v = extract_labels("No pleural effusion. Pericardial effusion is present.");
        assert!(!v.0[idx("Pleural effusion")]);
        assert!(v.0[idx("Pericardial effusion")]);
        let v2 = extract_labels("Pleural effusion was not observed.");
        assert!(!v2.0[idx("Pleural effusion")]);
    }

    #[test]
    fn case_insensitive_and_pure() {
        let a = extract_labels("CONSOLIDATION in the right lower lobe.");
        let b = extract_labels("consolidation in the right lower lobe.");
        assert_eq!(a, b);
        assert!(a.0[idx("Consolidation")]);
    }

    #[test]
    fn coronary_does_not_trigger_generic_arterial() {
        let v = extract_labels("Coronary artery wall calcification is noted.");
        assert!(v.0[idx("Coronary artery wall calcification")]);
        assert!(!v.0[idx("Arterial wall calcification")]);
    }

    #[test]
    fn interlobular_implies_only_septal_label() {
        let v = extract_labels("Interlobular septal thickening is seen.");
        assert!(v.0[idx("Interlobular septal thickening")]);
        assert!(!v.0[idx("Peribronchial thickening")]);
    }

    #[test]
    fn rules_file_shape_is_validated() {
        assert!(LabelerRules::from_json("{}").is_err());
        assert!(LabelerRules::from_json("{\"negation_tokens\":[],\"labels\":[]}").is_err());
        assert!(!LabelerRules::default_rules().phrases(0).is_empty());
    }

    #[test]
    fn ce_perfect_agreement() {
        let reports = vec![
            "There is cardiomegaly. No pleural effusion.".to_string(),
            "Emphysema is present.".to_string(),
        ];
        let ce = clinical_efficacy(&reports, &reports, &LabelerRules::default_rules()).unwrap();
        for row in &ce.per_label {
            if row.tp > 0 {
                assert_eq!(row.precision, 1.0);
                assert_eq!(row.recall, 1.0);
                assert_eq!(row.f1, 1.0);
            }
        }
        assert_eq!(ce.example_f1, 1.0);
    }

    #[test]
    fn ce_all_negative_predictions_have_zero_recall() {
        let preds = vec!["Lungs are clear.".to_string(); 2];
        let truths = vec![
            "There is cardiomegaly.".to_string(),
            "Emphysema is present.".to_string(),
        ];
        let ce = clinical_efficacy(&preds, &truths, &LabelerRules::default_rules()).unwrap();
        assert_eq!(ce.per_label[idx("Cardiomegaly")].recall, 0.0);
        assert_eq!(ce.per_label[idx("Emphysema")].recall, 0.0);
    }

    #[test]
    fn ce_hand_confusion_matrix() {
        // 4 reports, cardiomegaly truth = [1,1,0,0], pred = [1,0,1,0]
        // -> tp=1 fp=1 fn=1, P=R=F1=0.5.
        let truths = vec![
            "There is cardiomegaly.".to_string(),
            "There is cardiomegaly.".to_string(),
            "Lungs are clear.".to_string(),
            "Lungs are clear.".to_string(),
        ];
        let preds = vec![
            "There is cardiomegaly.".to_string(),
            "Lungs are clear.".to_string(),
            "There is cardiomegaly.".to_string(),
            "Lungs are clear.".to_string(),
        ];
        let ce = clinical_efficacy(&preds, &truths, &LabelerRules::default_rules()).unwrap();
        let row = &ce.per_label[idx("Cardiomegaly")];
        assert_eq!((row.tp, row.fp, row.fn_), (1, 1, 1));
        assert_eq!((row.precision, row.recall, row.f1), (0.5, 0.5, 0.5));
    }

    #[test]
    fn ce_length_mismatch_is_error() {
        let a = vec!["x.".to_string()];
        assert!(matches!(
            clinical_efficacy(&a, &[], &LabelerRules::default_rules()),
            Err(MetricsError::LengthMismatch { .. })
        ));
    }
}
