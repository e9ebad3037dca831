//! Docking evaluation: classification metrics, per-complex top-k success
//! rates and CAPRI quality tallies. All metrics are reported as percentages.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// CAPRI quality tier, ordered from worst to best.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CapriCategory {
    Incorrect,
    Acceptable,
    Medium,
    High,
}

impl CapriCategory {
    pub const TALLIED: [CapriCategory; 3] = [
        CapriCategory::Acceptable,
        CapriCategory::Medium,
        CapriCategory::High,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            CapriCategory::Incorrect => "incorrect",
            CapriCategory::Acceptable => "acceptable",
            CapriCategory::Medium => "medium",
            CapriCategory::High => "high",
        }
    }
}

impl FromStr for CapriCategory {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "incorrect" => Ok(CapriCategory::Incorrect),
            "acceptable" => Ok(CapriCategory::Acceptable),
            "medium" => Ok(CapriCategory::Medium),
            "high" => Ok(CapriCategory::High),
            other => Err(Error::Manifest(format!("unknown CAPRI category `{other}`"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RankedModel {
    pub model_id: String,
    pub score: f64,
    pub native: bool,
    pub capri: CapriCategory,
}

/// Scored docking models of one complex.
#[derive(Clone, Debug, PartialEq)]
pub struct RankedModelSet {
    pub complex_id: String,
    pub models: Vec<RankedModel>,
}

/// Descending score, ties broken by ascending model id.
fn rank_order(a: &RankedModel, b: &RankedModel) -> Ordering {
    b.score
        .partial_cmp(&a.score)
        .unwrap_or(Ordering::Equal)
        .then_with(|| a.model_id.cmp(&b.model_id))
}

impl RankedModelSet {
    /// Models in ranking order.
    pub fn ranked(&self) -> Vec<&RankedModel> {
        let mut v: Vec<_> = self.models.iter().collect();
        v.sort_by(|a, b| rank_order(a, b));
        v
    }

    /// Best CAPRI category among the top `k` models.
    pub fn best_in_top(&self, k: usize) -> Option<CapriCategory> {
        self.ranked().into_iter().take(k).map(|m| m.capri).max()
    }

    fn validate(&self) -> Result<()> {
        if self.models.is_empty() {
            return Err(Error::UndefinedMetric(format!(
                "complex `{}` has no models",
                self.complex_id
            )));
        }
        if let Some(m) = self.models.iter().find(|m| !m.score.is_finite()) {
            return Err(Error::Contract(format!(
                "model `{}` of complex `{}` has non-finite score",
                m.model_id, self.complex_id
            )));
        }
        Ok(())
    }
}

/// Groups models by complex id, complexes in lexical order.
pub fn group_by_complex(
    rows: impl IntoIterator<Item = (String, RankedModel)>,
) -> Vec<RankedModelSet> {
    let mut map: BTreeMap<String, Vec<RankedModel>> = BTreeMap::new();
    for (complex, model) in rows {
        map.entry(complex).or_default().push(model);
    }
    map.into_iter()
        .map(|(complex_id, models)| RankedModelSet { complex_id, models })
        .collect()
}

fn class_counts(labels: &[bool]) -> (usize, usize) {
    let pos = labels.iter().filter(|&&l| l).count();
    (pos, labels.len() - pos)
}

fn check_inputs(scores: &[f64], labels: &[bool]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::dim("metric", &[scores.len()], &[labels.len()]));
    }
    if scores.iter().any(|s| !s.is_finite()) {
        return Err(Error::Contract("scores must be finite".into()));
    }
    Ok(())
}

/// Area under the ROC curve: `P(s_pos > s_neg) + ½ P(s_pos = s_neg)`, ×100.
///
/// Computed from average ranks of the positives.
pub fn auc_roc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels);
    if pos == 0 || neg == 0 {
        return Err(Error::UndefinedMetric(
            "AUC ROC needs both classes".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        // 1-based average rank of the tie run i..=j
        let avg = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += avg * idx[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let (p, n) = (pos as f64, neg as f64);
    Ok(100.0 * (rank_sum - p * (p + 1.0) / 2.0) / (p * n))
}

/// Non-interpolated average precision `Σ (R_k − R_{k−1})·P_k`, ×100.
///
/// Tied scores form a single threshold, so the result does not depend on
/// input order.
pub fn average_precision(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_inputs(scores, labels)?;
    let (pos, _) = class_counts(labels);
    if pos == 0 {
        return Err(Error::UndefinedMetric(
            "average precision needs at least one positive".into(),
        ));
    }
    let mut idx: Vec<usize> = (0..scores.len()).collect();
    idx.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut seen, mut prev_recall, mut ap) = (0usize, 0usize, 0.0, 0.0);
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        while j + 1 < idx.len() && scores[idx[j + 1]] == scores[idx[i]] {
            j += 1;
        }
        tp += idx[i..=j].iter().filter(|&&k| labels[k]).count();
        seen += j - i + 1;
        let recall = tp as f64 / pos as f64;
        let precision = tp as f64 / seen as f64;
        ap += (recall - prev_recall) * precision;
        prev_recall = recall;
        i = j + 1;
    }
    Ok(100.0 * ap)
}

/// Confusion-matrix metrics at a fixed threshold (`score ≥ threshold` is
/// predicted native).
#[derive(Clone, Debug, PartialEq)]
pub struct ThresholdMetrics {
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    /// Names of metrics whose denominator was zero; those read 0.
    pub undefined: Vec<&'static str>,
}

pub fn thresholded_metrics(scores: &[f64], labels: &[bool], threshold: f64) -> Result<ThresholdMetrics> {
    check_inputs(scores, labels)?;
    let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
    for (&s, &l) in scores.iter().zip(labels) {
        match (s >= threshold, l) {
            (true, true) => tp += 1,
            (true, false) => fp += 1,
            (false, false) => tn += 1,
            (false, true) => fn_ += 1,
        }
    }
    let mut undefined = Vec::new();
    let mut ratio = |num: usize, den: usize, name: &'static str| {
        if den == 0 {
            undefined.push(name);
            0.0
        } else {
            num as f64 / den as f64
        }
    };
    let recall = ratio(tp, tp + fn_, "recall");
    let precision = ratio(tp, tp + fp, "precision");
    let tnr = ratio(tn, tn + fp, "specificity");
    let f1 = if precision + recall > 0.0 {
        2.0 * precision * recall / (precision + recall)
    } else {
        undefined.push("f1");
        0.0
    };
    if undefined.contains(&"recall") || undefined.contains(&"specificity") {
        undefined.push("balanced_accuracy");
    }
    Ok(ThresholdMetrics {
        balanced_accuracy: 100.0 * (recall + tnr) / 2.0,
        f1: 100.0 * f1,
        precision: 100.0 * precision,
        recall: 100.0 * recall,
        undefined,
    })
}

pub const DEFAULT_SUCCESS_KS: [usize; 5] = [1, 10, 25, 100, 200];
pub const DEFAULT_CAPRI_KS: [usize; 3] = [1, 10, 100];

/// Percentage of complexes with an acceptable-or-better model in the top `k`,
/// for each `k`.
pub fn success_rate(sets: &[RankedModelSet], ks: &[usize]) -> Result<Vec<(usize, f64)>> {
    if sets.is_empty() {
        return Err(Error::UndefinedMetric("success rate of zero complexes".into()));
    }
    for s in sets {
        s.validate()?;
    }
    let ranked: Vec<Vec<&RankedModel>> = sets.iter().map(RankedModelSet::ranked).collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let hits = ranked
                .iter()
                .filter(|r| {
                    r.iter()
                        .take(k)
                        .any(|m| m.capri >= CapriCategory::Acceptable)
                })
                .count();
            (k, 100.0 * hits as f64 / sets.len() as f64)
        })
        .collect())
}

/// For each `k`, the number of complexes whose top `k` holds at least one
/// model of category ≥ acceptable, ≥ medium and ≥ high (cumulative).
pub fn capri_quality_counts(sets: &[RankedModelSet], ks: &[usize]) -> Result<Vec<(usize, [usize; 3])>> {
    for s in sets {
        s.validate()?;
    }
    let ranked: Vec<Vec<&RankedModel>> = sets.iter().map(RankedModelSet::ranked).collect();
    Ok(ks
        .iter()
        .map(|&k| {
            let mut counts = [0usize; 3];
            for r in &ranked {
                if let Some(best) = r.iter().take(k).map(|m| m.capri).max() {
                    for (slot, cat) in counts.iter_mut().zip(CapriCategory::TALLIED) {
                        if best >= cat {
                            *slot += 1;
                        }
                    }
                }
            }
            (k, counts)
        })
        .collect())
}

/// Every evaluation number for one scored dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct MetricsReport {
    pub auc_roc: f64,
    pub ap: f64,
    pub balanced_accuracy: f64,
    pub f1: f64,
    pub precision: f64,
    pub recall: f64,
    pub threshold: f64,
    pub success: Vec<(usize, f64)>,
    pub capri: Vec<(usize, [usize; 3])>,
    pub undefined: Vec<&'static str>,
}

impl MetricsReport {
    pub fn compute(
        sets: &[RankedModelSet],
        success_ks: &[usize],
        capri_ks: &[usize],
        threshold: f64,
    ) -> Result<Self> {
        let (scores, labels): (Vec<f64>, Vec<bool>) = sets
            .iter()
            .flat_map(|s| s.models.iter().map(|m| (m.score, m.native)))
            .unzip();
        let tm = thresholded_metrics(&scores, &labels, threshold)?;
        Ok(Self {
            auc_roc: auc_roc(&scores, &labels)?,
            ap: average_precision(&scores, &labels)?,
            balanced_accuracy: tm.balanced_accuracy,
            f1: tm.f1,
            precision: tm.precision,
            recall: tm.recall,
            threshold,
            success: success_rate(sets, success_ks)?,
            capri: capri_quality_counts(sets, capri_ks)?,
            undefined: tm.undefined,
        })
    }

    /// Aligned plain-text rendering of the three tables.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "Classification (threshold {})", self.threshold);
        let _ = writeln!(
            s,
            "{:>8} {:>8} {:>8} {:>8} {:>9} {:>8}",
            "AUC_ROC", "AP", "BA", "F1", "Precision", "Recall"
        );
        let _ = writeln!(
            s,
            "{:>8.2} {:>8.2} {:>8.2} {:>8.2} {:>9.2} {:>8.2}",
            self.auc_roc, self.ap, self.balanced_accuracy, self.f1, self.precision, self.recall
        );
        if !self.undefined.is_empty() {
            let _ = writeln!(s, "undefined (reported as 0): {}", self.undefined.join(", "));
        }
        let _ = writeln!(s, "\nSuccess rate (%)");
        let header: Vec<String> = self.success.iter().map(|(k, _)| format!("Top{k}")).collect();
        let values: Vec<String> = self.success.iter().map(|(_, v)| format!("{v:.0}")).collect();
        let _ = writeln!(s, "{}", header.iter().map(|h| format!("{h:>7}")).collect::<String>());
        let _ = writeln!(s, "{}", values.iter().map(|v| format!("{v:>7}")).collect::<String>());
        let _ = writeln!(s, "\nCAPRI quality (complexes with >= category in top k)");
        let _ = writeln!(s, "{:>6} {:>11} {:>7} {:>5}", "k", "acceptable", "medium", "high");
        for (k, c) in &self.capri {
            let _ = writeln!(s, "{:>6} {:>11} {:>7} {:>5}", k, c[0], c[1], c[2]);
        }
        s
    }

    /// `(file stem, csv)` for the classification, success-rate and CAPRI
    /// tables.
    pub fn to_csv_tables(&self) -> Vec<(&'static str, String)> {
        let mut metrics = String::from("auc_roc,ap,ba,f1,precision,recall\n");
        let _ = writeln!(
            metrics,
            "{},{},{},{},{},{}",
            self.auc_roc, self.ap, self.balanced_accuracy, self.f1, self.precision, self.recall
        );
        let mut success = self
            .success
            .iter()
            .map(|(k, _)| format!("top{k}"))
            .collect::<Vec<_>>()
            .join(",");
        success.push('\n');
        let _ = writeln!(
            success,
            "{}",
            self.success
                .iter()
                .map(|(_, v)| format!("{v:.0}"))
                .collect::<Vec<_>>()
                .join(",")
        );
        let mut capri = String::from("k,acceptable,medium,high\n");
        for (k, c) in &self.capri {
            let _ = writeln!(capri, "{k},{},{},{}", c[0], c[1], c[2]);
        }
        vec![
            ("metrics", metrics),
            ("success_rate", success),
            ("capri_quality", capri),
        ]
    }
}
