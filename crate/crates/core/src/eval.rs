//! Scoring models under inference-time margin schemes: overall, per-class
//! and per-frequency-group top-1 accuracy plus head weight-norm summaries.

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::dataset::{Group, GroupSplit, LabeledSample};
use crate::error::{Error, Result};
use crate::margins::MarginScheme;
use crate::model::{forward, weight_norms, ClassifierModel};
use crate::stats::{argmax, mean, std_dev};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WeightNormStats {
    pub mean: f64,
    pub std: f64,
    pub per_class: Vec<f64>,
}

/// Macro-averaged accuracy of each frequency group; `None` when the
/// group has no scoreable class.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupTop1 {
    pub few: Option<f64>,
    pub medium: Option<f64>,
    pub many: Option<f64>,
}

impl GroupTop1 {
    pub fn get(&self, group: Group) -> Option<f64> {
        match group {
            Group::Few => self.few,
            Group::Medium => self.medium,
            Group::Many => self.many,
        }
    }
}

/// Evaluation result. Group accuracies are macro-averaged over member
/// classes, so they agree with the per-class vector by construction;
/// classes absent from the test set are reported as `None` and excluded
/// from their group mean.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub scheme: String,
    pub overall_top1: f64,
    pub group_top1: GroupTop1,
    pub per_class_top1: Vec<Option<f64>>,
    pub per_class_support: Vec<usize>,
    pub weight_norm_stats: WeightNormStats,
    /// Whether every class appeared in the test set with equal counts.
    pub balanced_test: bool,
}

impl EvalReport {
    pub fn save_json<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_json<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        Ok(serde_json::from_reader(file)?)
    }
}

/// Macro-averaged per-class accuracy under an optional adjustment — the
/// quantity tracked per epoch during training.
pub fn balanced_accuracy(
    model: &ClassifierModel,
    test: &[LabeledSample],
    scheme: Option<&MarginScheme>,
) -> Result<f64> {
    let c = model.num_classes();
    let mut correct = vec![0usize; c];
    let mut support = vec![0usize; c];
    for s in test {
        if s.label >= c {
            return Err(Error::InvalidArgument(format!(
                "test label {} out of range for {c} classes",
                s.label
            )));
        }
        let logits = forward(model, &s.features)?;
        let adjusted = match scheme {
            Some(sch) => sch.apply(&logits)?,
            None => logits,
        };
        support[s.label] += 1;
        if argmax(&adjusted) == s.label {
            correct[s.label] += 1;
        }
    }
    let accs: Vec<f64> = (0..c)
        .filter(|&y| support[y] > 0)
        .map(|y| correct[y] as f64 / support[y] as f64)
        .collect();
    if accs.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    Ok(mean(&accs))
}

/// Score a model on a test set. `scheme = None` evaluates raw logits.
pub fn evaluate(
    model: &ClassifierModel,
    test: &[LabeledSample],
    scheme: Option<&MarginScheme>,
    split: &GroupSplit,
) -> Result<EvalReport> {
    if test.is_empty() {
        return Err(Error::InvalidArgument("test set is empty".into()));
    }
    let c = model.num_classes();
    if split.num_classes() != c {
        return Err(Error::DimensionMismatch { expected: c, actual: split.num_classes() });
    }
    if let Some(sch) = scheme {
        if sch.num_classes() != c {
            return Err(Error::DimensionMismatch { expected: c, actual: sch.num_classes() });
        }
    }

    let mut correct = vec![0usize; c];
    let mut support = vec![0usize; c];
    let mut total_correct = 0usize;
    for s in test {
        if s.label >= c {
            return Err(Error::InvalidArgument(format!(
                "test label {} out of range for {c} classes",
                s.label
            )));
        }
        let logits = forward(model, &s.features)?;
        let adjusted = match scheme {
            Some(sch) => sch.apply(&logits)?,
            None => logits,
        };
        support[s.label] += 1;
        if argmax(&adjusted) == s.label {
            correct[s.label] += 1;
            total_correct += 1;
        }
    }

    let per_class_top1: Vec<Option<f64>> = (0..c)
        .map(|y| {
            if support[y] == 0 {
                None
            } else {
                Some(correct[y] as f64 / support[y] as f64)
            }
        })
        .collect();

    let group_mean = |group: Group| -> Option<f64> {
        let accs: Vec<f64> = split
            .classes_in(group)
            .into_iter()
            .filter_map(|y| per_class_top1[y])
            .collect();
        if accs.is_empty() {
            None
        } else {
            Some(mean(&accs))
        }
    };

    let norms = weight_norms(model);
    let balanced = support.iter().all(|&n| n > 0 && n == support[0]);

    Ok(EvalReport {
        scheme: scheme.map(|s| s.describe()).unwrap_or_else(|| "none".to_string()),
        overall_top1: total_correct as f64 / test.len() as f64,
        group_top1: GroupTop1 {
            few: group_mean(Group::Few),
            medium: group_mean(Group::Medium),
            many: group_mean(Group::Many),
        },
        per_class_top1,
        per_class_support: support,
        weight_norm_stats: WeightNormStats {
            mean: mean(&norms),
            std: std_dev(&norms),
            per_class: norms,
        },
        balanced_test: balanced,
    })
}

/// One row of a scheme comparison: the report plus deltas against the
/// first (baseline) scheme.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ComparisonRow {
    pub scheme: String,
    pub overall_top1: f64,
    pub few: Option<f64>,
    pub medium: Option<f64>,
    pub many: Option<f64>,
    pub delta_overall: f64,
    pub report: EvalReport,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SchemeComparison {
    pub rows: Vec<ComparisonRow>,
}

/// Evaluate a list of schemes (entries may be `None` for raw logits) and
/// tabulate deltas against the first entry.
pub fn compare_schemes(
    model: &ClassifierModel,
    test: &[LabeledSample],
    schemes: &[Option<MarginScheme>],
    split: &GroupSplit,
) -> Result<SchemeComparison> {
    if schemes.is_empty() {
        return Err(Error::InvalidArgument("scheme list is empty".into()));
    }
    let mut rows = Vec::with_capacity(schemes.len());
    let mut baseline = None;
    for scheme in schemes {
        let report = evaluate(model, test, scheme.as_ref(), split)?;
        let base = *baseline.get_or_insert(report.overall_top1);
        rows.push(ComparisonRow {
            scheme: report.scheme.clone(),
            overall_top1: report.overall_top1,
            few: report.group_top1.few,
            medium: report.group_top1.medium,
            many: report.group_top1.many,
            delta_overall: report.overall_top1 - base,
            report,
        });
    }
    Ok(SchemeComparison { rows })
}

impl SchemeComparison {
    /// RFC-4180 style CSV: scheme, overall, few, medium, many,
    /// delta_overall.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record(["scheme", "overall", "few", "medium", "many", "delta_overall"])?;
        let fmt = |v: Option<f64>| v.map(|x| x.to_string()).unwrap_or_default();
        for row in &self.rows {
            w.write_record([
                row.scheme.clone(),
                row.overall_top1.to_string(),
                fmt(row.few),
                fmt(row.medium),
                fmt(row.many),
                row.delta_overall.to_string(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}
