//! Evaluation: hierarchical F1, path consistency, exact match, and
//! equalized-odds gaps between sensitive groups.
//!
//! All metrics consume predicted and gold class paths (one class per level,
//! as produced by prediction). Hierarchical F1 is micro-averaged over the
//! per-instance sets of path nodes; because every path holds exactly one
//! class per level, precision and recall coincide. The equalized-odds gap
//! of a class is the largest absolute difference in true-positive or
//! false-positive rate between any two sensitive groups (one-vs-rest);
//! classes for which some present group has no positives or no negatives
//! have undefined rates and are excluded from the average but counted, and
//! a level with no measurable class at all reports an explicitly undefined
//! value rather than a number.

use std::collections::BTreeMap;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::fairness::{GroupId, GroupVocab};
use crate::taxonomy::{ClassId, Taxonomy};

/// How per-level equalized-odds values combine into the summary number.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum EoAggregate {
    /// Mean over levels with a defined value.
    #[default]
    Mean,
    /// Worst (largest) defined level value.
    Max,
}

impl std::str::FromStr for EoAggregate {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "mean" => Ok(EoAggregate::Mean),
            "max" => Ok(EoAggregate::Max),
            other => Err(Error::Config(format!(
                "unknown aggregation '{other}' (expected mean or max)"
            ))),
        }
    }
}

#[derive(Clone, Copy, Debug, Default)]
pub struct ReportOptions {
    pub eo_aggregate: EoAggregate,
}

/// Equalized-odds result for one level.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LevelEqualizedOdds {
    /// Macro-mean gap over measurable classes; `None` when fewer than two
    /// sensitive groups are present or no class is measurable.
    pub value: Option<f64>,
    /// Classes excluded because some present group had no positive or no
    /// negative instances.
    pub skipped_classes: usize,
}

fn check_paths(paths: &[Vec<ClassId>], tax: &Taxonomy, what: &str) -> Result<()> {
    for (j, path) in paths.iter().enumerate() {
        if path.len() != tax.n_levels() {
            return Err(Error::Shape(format!(
                "{what} path {j} has {} levels, taxonomy has {}",
                path.len(),
                tax.n_levels()
            )));
        }
        for (level, &id) in path.iter().enumerate() {
            if id.index() >= tax.total_classes() || tax.level_of(id) != level {
                return Err(Error::Shape(format!(
                    "{what} path {j}: class {} is not on level {}",
                    id.0,
                    level + 1
                )));
            }
        }
    }
    Ok(())
}

fn check_pair(pred: &[Vec<ClassId>], truth: &[Vec<ClassId>], tax: &Taxonomy) -> Result<()> {
    if pred.is_empty() {
        return Err(Error::Data("no instances to evaluate".into()));
    }
    if pred.len() != truth.len() {
        return Err(Error::Shape(format!(
            "{} predictions for {} gold paths",
            pred.len(),
            truth.len()
        )));
    }
    check_paths(pred, tax, "predicted")?;
    check_paths(truth, tax, "gold")
}

/// Micro-averaged hierarchical F1 over per-instance path-node sets.
///
/// Each path contributes its classes as a set; with one class per level the
/// intersection size is the number of levels predicted correctly.
pub fn hierarchical_f1(
    pred: &[Vec<ClassId>],
    truth: &[Vec<ClassId>],
    tax: &Taxonomy,
) -> Result<f64> {
    check_pair(pred, truth, tax)?;
    let mut intersection = 0usize;
    let mut predicted_total = 0usize;
    let mut gold_total = 0usize;
    for (p, t) in pred.iter().zip(truth) {
        intersection += p.iter().zip(t).filter(|(a, b)| a == b).count();
        predicted_total += p.len();
        gold_total += t.len();
    }
    if intersection == 0 {
        return Ok(0.0);
    }
    let precision = intersection as f64 / predicted_total as f64;
    let recall = intersection as f64 / gold_total as f64;
    Ok(2.0 * precision * recall / (precision + recall))
}

/// Fraction of instances whose predicted path respects the parent relation
/// between every adjacent level pair.
pub fn consistency_rate(pred: &[Vec<ClassId>], tax: &Taxonomy) -> Result<f64> {
    if pred.is_empty() {
        return Err(Error::Data("no instances to evaluate".into()));
    }
    check_paths(pred, tax, "predicted")?;
    let consistent = pred
        .iter()
        .filter(|path| {
            path.windows(2)
                .all(|pair| tax.parent(pair[1]) == Some(pair[0]))
        })
        .count();
    Ok(consistent as f64 / pred.len() as f64)
}

/// Fraction of instances whose whole predicted path equals the gold path.
pub fn exact_match_rate(
    pred: &[Vec<ClassId>],
    truth: &[Vec<ClassId>],
    tax: &Taxonomy,
) -> Result<f64> {
    check_pair(pred, truth, tax)?;
    let hits = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(hits as f64 / pred.len() as f64)
}

/// Equalized-odds gap on one level (0-based), macro-averaged one-vs-rest
/// over the level's classes.
pub fn equalized_odds(
    pred: &[Vec<ClassId>],
    truth: &[Vec<ClassId>],
    groups: &[GroupId],
    vocab: &GroupVocab,
    tax: &Taxonomy,
    level: usize,
) -> Result<LevelEqualizedOdds> {
    check_pair(pred, truth, tax)?;
    if groups.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} group tags for {} instances",
            groups.len(),
            pred.len()
        )));
    }
    if level >= tax.n_levels() {
        return Err(Error::Shape(format!(
            "level {} out of range for {} levels",
            level + 1,
            tax.n_levels()
        )));
    }
    let present: Vec<GroupId> = vocab
        .sensitive_ids()
        .filter(|g| groups.contains(g))
        .collect();
    if present.len() < 2 {
        return Ok(LevelEqualizedOdds {
            value: None,
            skipped_classes: 0,
        });
    }

    let mut gap_sum = 0.0;
    let mut measurable = 0usize;
    let mut skipped = 0usize;
    for class in tax.level_class_ids(level) {
        // (TPR, FPR) of this class per present sensitive group.
        let mut rates: Vec<(f64, f64)> = Vec::with_capacity(present.len());
        let mut defined = true;
        for &g in &present {
            let (mut pos, mut neg, mut tp, mut fp) = (0usize, 0usize, 0usize, 0usize);
            for j in 0..pred.len() {
                if groups[j] != g {
                    continue;
                }
                let hit = pred[j][level] == class;
                if truth[j][level] == class {
                    pos += 1;
                    tp += hit as usize;
                } else {
                    neg += 1;
                    fp += hit as usize;
                }
            }
            if pos == 0 || neg == 0 {
                defined = false;
                break;
            }
            rates.push((tp as f64 / pos as f64, fp as f64 / neg as f64));
        }
        if !defined {
            skipped += 1;
            continue;
        }
        let mut worst = 0.0f64;
        for a in 0..rates.len() {
            for b in a + 1..rates.len() {
                let tpr_gap = (rates[a].0 - rates[b].0).abs();
                let fpr_gap = (rates[a].1 - rates[b].1).abs();
                worst = worst.max(tpr_gap.max(fpr_gap));
            }
        }
        gap_sum += worst;
        measurable += 1;
    }
    Ok(LevelEqualizedOdds {
        value: (measurable > 0).then(|| gap_sum / measurable as f64),
        skipped_classes: skipped,
    })
}

/// All evaluation results for one (model, dataset) pair.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub instances: usize,
    pub hf1: f64,
    pub consistency: f64,
    pub exact_match: f64,
    /// Equalized-odds gap per level; `null` in JSON when undefined.
    pub eo_per_level: Vec<Option<f64>>,
    /// Aggregated equalized odds (mean or max over defined levels).
    pub eo_avg: Option<f64>,
    /// Per level, how many classes were excluded from the gap average.
    pub eo_skipped_classes: Vec<usize>,
    /// Plain accuracy per level, all instances.
    pub per_level_accuracy: Vec<f64>,
    /// Per-group accuracy per level (`null` for groups without instances).
    pub group_level_accuracy: BTreeMap<String, Vec<Option<f64>>>,
}

/// Compute the full report.
pub fn report(
    pred: &[Vec<ClassId>],
    truth: &[Vec<ClassId>],
    groups: &[GroupId],
    vocab: &GroupVocab,
    tax: &Taxonomy,
    opts: ReportOptions,
) -> Result<MetricsReport> {
    check_pair(pred, truth, tax)?;
    if groups.len() != pred.len() {
        return Err(Error::Shape(format!(
            "{} group tags for {} instances",
            groups.len(),
            pred.len()
        )));
    }
    let n = tax.n_levels();
    let m = pred.len();

    let mut eo_per_level = Vec::with_capacity(n);
    let mut eo_skipped = Vec::with_capacity(n);
    for level in 0..n {
        let eo = equalized_odds(pred, truth, groups, vocab, tax, level)?;
        eo_per_level.push(eo.value);
        eo_skipped.push(eo.skipped_classes);
    }
    let defined: Vec<f64> = eo_per_level.iter().flatten().copied().collect();
    let eo_avg = if defined.is_empty() {
        None
    } else {
        Some(match opts.eo_aggregate {
            EoAggregate::Mean => defined.iter().sum::<f64>() / defined.len() as f64,
            EoAggregate::Max => defined.iter().cloned().fold(f64::MIN, f64::max),
        })
    };

    let mut per_level_accuracy = Vec::with_capacity(n);
    for level in 0..n {
        let hits = pred
            .iter()
            .zip(truth)
            .filter(|(p, t)| p[level] == t[level])
            .count();
        per_level_accuracy.push(hits as f64 / m as f64);
    }

    let mut group_level_accuracy = BTreeMap::new();
    for g in vocab.ids() {
        let members: Vec<usize> = (0..m).filter(|&j| groups[j] == g).collect();
        let accs: Vec<Option<f64>> = (0..n)
            .map(|level| {
                if members.is_empty() {
                    return None;
                }
                let hits = members
                    .iter()
                    .filter(|&&j| pred[j][level] == truth[j][level])
                    .count();
                Some(hits as f64 / members.len() as f64)
            })
            .collect();
        group_level_accuracy.insert(vocab.tag(g).to_string(), accs);
    }

    Ok(MetricsReport {
        instances: m,
        hf1: hierarchical_f1(pred, truth, tax)?,
        consistency: consistency_rate(pred, tax)?,
        exact_match: exact_match_rate(pred, truth, tax)?,
        eo_per_level,
        eo_avg,
        eo_skipped_classes: eo_skipped,
        per_level_accuracy,
        group_level_accuracy,
    })
}

/// Render a float the same way everywhere (shortest round-trip form).
pub fn fmt_f64(x: f64) -> String {
    format!("{x}")
}

impl MetricsReport {
    /// Pretty JSON, stable key order.
    pub fn to_json(&self) -> String {
        let mut s = serde_json::to_string_pretty(self).expect("report serializes");
        s.push('\n');
        s
    }

    /// Single-row CSV: `hf1,consistency,exact_match,eo_l1..eo_ln,eo_avg`.
    /// Undefined equalized-odds cells are left empty.
    pub fn to_csv(&self) -> String {
        let mut header = String::from("hf1,consistency,exact_match");
        for level in 1..=self.eo_per_level.len() {
            let _ = write!(header, ",eo_l{level}");
        }
        header.push_str(",eo_avg\n");

        let mut row = format!(
            "{},{},{}",
            fmt_f64(self.hf1),
            fmt_f64(self.consistency),
            fmt_f64(self.exact_match)
        );
        for eo in &self.eo_per_level {
            row.push(',');
            if let Some(v) = eo {
                row.push_str(&fmt_f64(*v));
            }
        }
        row.push(',');
        if let Some(v) = self.eo_avg {
            row.push_str(&fmt_f64(v));
        }
        row.push('\n');
        header + &row
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fairness::FairnessConfig;
    use crate::taxonomy::tests::beauty;

    fn vocab() -> GroupVocab {
        FairnessConfig::default().vocab().unwrap()
    }

    /// Path helper over the Beauty taxonomy by class names.
    fn path(tax: &Taxonomy, names: [&str; 3]) -> Vec<ClassId> {
        names
            .iter()
            .enumerate()
            .map(|(level, name)| tax.find(level, name).expect("known class"))
            .collect()
    }

    #[test]
    fn hand_worked_micro_metrics() {
        let tax = beauty();
        let truth = vec![
            path(&tax, ["Beauty", "Hair Care", "Shampoo"]),
            path(&tax, ["Beauty", "Cosmetics", "Lipsticks"]),
        ];
        // Second prediction is wrong at level 2 and inconsistent: Lipsticks
        // is not a child of Hair Care.
        let pred = vec![
            path(&tax, ["Beauty", "Hair Care", "Shampoo"]),
            vec![
                tax.find(0, "Beauty").unwrap(),
                tax.find(1, "Hair Care").unwrap(),
                tax.find(2, "Lipsticks").unwrap(),
            ],
        ];

        // 5 of 6 path nodes overlap, so precision = recall = 5/6.
        let hf1 = hierarchical_f1(&pred, &truth, &tax).unwrap();
        assert!((hf1 - 5.0 / 6.0).abs() < 1e-15);
        assert_eq!(consistency_rate(&pred, &tax).unwrap(), 0.5);
        assert_eq!(exact_match_rate(&pred, &truth, &tax).unwrap(), 0.5);

        // Fully correct predictions score 1 everywhere.
        assert_eq!(hierarchical_f1(&truth, &truth, &tax).unwrap(), 1.0);
        assert_eq!(consistency_rate(&truth, &tax).unwrap(), 1.0);

        // Fully disjoint predictions score 0.
        let wrong = vec![
            path(&tax, ["Beauty", "Cosmetics", "Skin Care"]),
            path(&tax, ["Beauty", "Hair Care", "Shampoo"]),
        ];
        let hf1 = hierarchical_f1(&wrong, &truth, &tax).unwrap();
        // Level 1 always matches (single root), so 2 of 6 nodes overlap.
        assert!((hf1 - 2.0 / 6.0).abs() < 1e-15);
    }

    /// Two-class single-level setup with hand-computed rates.
    #[test]
    fn equalized_odds_matches_hand_computation() {
        let tax = Taxonomy::parse("a\t-\nb\t-\n").unwrap();
        let v = vocab();
        let f = v.find("Female").unwrap();
        let m = v.find("Male").unwrap();
        let a = tax.find(0, "a").unwrap();
        let b = tax.find(0, "b").unwrap();

        // Female: truth (a, a, b) predicted (a, b, b)
        // Male:   truth (a, b)    predicted (a, b)
        let truth = vec![vec![a], vec![a], vec![b], vec![a], vec![b]];
        let pred = vec![vec![a], vec![b], vec![b], vec![a], vec![b]];
        let groups = vec![f, f, f, m, m];

        // Class a: Female TPR 1/2, FPR 0/1; Male TPR 1/1, FPR 0/1
        //   -> gap max(0.5, 0) = 0.5
        // Class b: Female TPR 1/1, FPR 1/2; Male TPR 1/1, FPR 0/1
        //   -> gap max(0, 0.5) = 0.5
        // Level value: mean = 0.5.
        let eo = equalized_odds(&pred, &truth, &groups, &v, &tax, 0).unwrap();
        assert_eq!(eo.value, Some(0.5));
        assert_eq!(eo.skipped_classes, 0);

        // Identical behavior across groups has zero gap.
        let eo = equalized_odds(&truth, &truth, &groups, &v, &tax, 0).unwrap();
        assert_eq!(eo.value, Some(0.0));
    }

    #[test]
    fn equalized_odds_reports_undefined_cases_explicitly() {
        let tax = Taxonomy::parse("a\t-\nb\t-\n").unwrap();
        let v = vocab();
        let f = v.find("Female").unwrap();
        let a = tax.find(0, "a").unwrap();
        let b = tax.find(0, "b").unwrap();

        // Only one sensitive group present: undefined, nothing skipped.
        let truth = vec![vec![a], vec![b]];
        let groups = vec![f, v.neutral()];
        let eo = equalized_odds(&truth, &truth, &groups, &v, &tax, 0).unwrap();
        assert_eq!(eo.value, None);
        assert_eq!(eo.skipped_classes, 0);

        // Both groups present but every Female instance is class a: class a
        // has no Female negatives and class b no Female positives, so both
        // classes are skipped and the level is undefined.
        let m = v.find("Male").unwrap();
        let truth = vec![vec![a], vec![a], vec![b]];
        let groups = vec![f, f, m];
        let eo = equalized_odds(&truth, &truth, &groups, &v, &tax, 0).unwrap();
        assert_eq!(eo.value, None);
        assert_eq!(eo.skipped_classes, 2);

        // A partially measurable level averages only the measurable class.
        let tax3 = Taxonomy::parse("a\t-\nb\t-\nc\t-\n").unwrap();
        let a3 = tax3.find(0, "a").unwrap();
        let b3 = tax3.find(0, "b").unwrap();
        let truth = vec![vec![a3], vec![b3], vec![a3], vec![b3], vec![a3]];
        let pred = vec![vec![a3], vec![b3], vec![b3], vec![b3], vec![a3]];
        let groups = vec![f, f, f, m, m];
        // Class c never occurs: no positives for either group -> skipped.
        let eo = equalized_odds(&pred, &truth, &groups, &v, &tax3, 0).unwrap();
        assert!(eo.value.is_some());
        assert_eq!(eo.skipped_classes, 1);
    }

    #[test]
    fn report_collects_everything() {
        let tax = beauty();
        let v = vocab();
        let f = v.find("Female").unwrap();
        let m = v.find("Male").unwrap();
        let truth = vec![
            path(&tax, ["Beauty", "Hair Care", "Shampoo"]),
            path(&tax, ["Beauty", "Cosmetics", "Lipsticks"]),
            path(&tax, ["Beauty", "Hair Care", "Hair Color"]),
            path(&tax, ["Beauty", "Cosmetics", "Skin Care"]),
        ];
        let pred = vec![
            truth[0].clone(),
            truth[1].clone(),
            path(&tax, ["Beauty", "Hair Care", "Shampoo"]),
            truth[3].clone(),
        ];
        let groups = vec![f, m, f, m];
        let rep = report(&pred, &truth, &groups, &v, &tax, ReportOptions::default()).unwrap();

        assert_eq!(rep.instances, 4);
        assert_eq!(rep.exact_match, 0.75);
        assert_eq!(rep.consistency, 1.0);
        assert!((rep.hf1 - 11.0 / 12.0).abs() < 1e-15);
        assert_eq!(rep.per_level_accuracy, vec![1.0, 1.0, 0.75]);
        assert_eq!(
            rep.group_level_accuracy["Female"],
            vec![Some(1.0), Some(1.0), Some(0.5)]
        );
        assert_eq!(
            rep.group_level_accuracy["Male"],
            vec![Some(1.0), Some(1.0), Some(1.0)]
        );
        assert_eq!(
            rep.group_level_accuracy["Background"],
            vec![None, None, None]
        );
        // Level 1 has a single class: no negatives anywhere, so undefined.
        assert_eq!(rep.eo_per_level[0], None);
        assert_eq!(rep.eo_skipped_classes[0], 1);

        let round: MetricsReport = serde_json::from_str(&rep.to_json()).unwrap();
        assert_eq!(round, rep);
    }

    #[test]
    fn aggregation_modes_and_csv_shape() {
        let tax = Taxonomy::from_branching(&[2, 2]).unwrap();
        let v = vocab();
        let f = v.find("Female").unwrap();
        let m = v.find("Male").unwrap();
        let leaf = |i: usize| tax.path_of(tax.class_id(1, i)).unwrap();
        let truth = vec![leaf(0), leaf(1), leaf(2), leaf(3), leaf(0), leaf(2)];
        let pred = vec![leaf(0), leaf(0), leaf(2), leaf(2), leaf(1), leaf(2)];
        let groups = vec![f, f, f, m, m, m];

        let mean_rep = report(&pred, &truth, &groups, &v, &tax, ReportOptions::default()).unwrap();
        let max_rep = report(
            &pred,
            &truth,
            &groups,
            &v,
            &tax,
            ReportOptions {
                eo_aggregate: EoAggregate::Max,
            },
        )
        .unwrap();
        let defined: Vec<f64> = mean_rep.eo_per_level.iter().flatten().copied().collect();
        assert!(!defined.is_empty());
        let mean = defined.iter().sum::<f64>() / defined.len() as f64;
        let max = defined.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(mean_rep.eo_avg, Some(mean));
        assert_eq!(max_rep.eo_avg, Some(max));

        let csv = mean_rep.to_csv();
        let mut lines = csv.lines();
        assert_eq!(
            lines.next().unwrap(),
            "hf1,consistency,exact_match,eo_l1,eo_l2,eo_avg"
        );
        let row = lines.next().unwrap();
        assert_eq!(row.split(',').count(), 6);
        assert_eq!(lines.next(), None);

        // Undefined aggregate leaves CSV cells empty.
        let single = vec![leaf(0)];
        let rep = report(&single, &single, &[f], &v, &tax, ReportOptions::default()).unwrap();
        assert_eq!(rep.eo_avg, None);
        let row = rep.to_csv().lines().nth(1).unwrap().to_string();
        assert!(row.ends_with(",,,"), "empty eo cells: {row:?}");
    }

    #[test]
    fn metrics_reject_bad_inputs() {
        let tax = beauty();
        let v = vocab();
        let good = vec![path(&tax, ["Beauty", "Hair Care", "Shampoo"])];
        assert!(hierarchical_f1(&[], &[], &tax).is_err());
        assert!(hierarchical_f1(&good, &[], &tax).is_err());

        let short = vec![vec![tax.find(0, "Beauty").unwrap()]];
        assert!(hierarchical_f1(&short, &good, &tax).is_err());
        assert!(consistency_rate(&short, &tax).is_err());

        let f = v.find("Female").unwrap();
        assert!(equalized_odds(&good, &good, &[f, f], &v, &tax, 0).is_err());
        assert!(equalized_odds(&good, &good, &[f], &v, &tax, 9).is_err());
    }
}
