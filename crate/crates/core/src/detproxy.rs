//! Desk-scale surrogate for the detection false-positive argument.
//!
//! Scored proposals carry a background slot at index 0 whose logit is
//! fixed to 0, so "foreground logit is positive" and "foreground beats
//! background" coincide. Multiplicative adjustment with positive
//! foreground weights and background weight 1 can never pull a negative
//! foreground logit above the background; additive shifts can, and that
//! is exactly where its false positives come from.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::ClassFrequencyTable;
use crate::error::{Error, Result};
use crate::margins::MarginScheme;
use crate::stats::softmax;

/// A scored region proposal: logits over C+1 classes, index 0 =
/// background; `truth` uses the same indexing (0 = background).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Proposal {
    pub logits: Vec<f64>,
    pub truth: usize,
}

/// Recipe for a simulated proposal set. Foreground truths are
/// apportioned deterministically from `fg_class_weights` (largest
/// remainder), so the per-class composition is stable across seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProposalSpec {
    pub num_fg: usize,
    pub num_bg: usize,
    /// Relative frequency of each foreground class (length C).
    pub fg_class_weights: Vec<f64>,
    /// Mean of a foreground proposal's true-class logit.
    pub fg_logit_mean: f64,
    /// Mean of every other foreground logit (negative: below background).
    pub bg_logit_mean: f64,
    pub logit_noise: f64,
    pub seed: u64,
}

impl ProposalSpec {
    fn validate(&self) -> Result<()> {
        if self.fg_class_weights.is_empty() {
            return Err(Error::InvalidArgument("fg_class_weights is empty".into()));
        }
        if self.fg_class_weights.iter().any(|&w| !w.is_finite() || w < 0.0)
            || self.fg_class_weights.iter().sum::<f64>() <= 0.0
        {
            return Err(Error::InvalidArgument(
                "fg_class_weights must be nonnegative with a positive sum".into(),
            ));
        }
        if !(self.logit_noise >= 0.0) {
            return Err(Error::InvalidArgument("logit_noise must be >= 0".into()));
        }
        Ok(())
    }

    /// Number of foreground classes C (logits have C+1 slots).
    pub fn num_fg_classes(&self) -> usize {
        self.fg_class_weights.len()
    }

    /// Deterministic per-class foreground counts (largest remainder).
    pub fn fg_counts(&self) -> Result<Vec<usize>> {
        self.validate()?;
        let total: f64 = self.fg_class_weights.iter().sum();
        let quotas: Vec<f64> = self
            .fg_class_weights
            .iter()
            .map(|w| w / total * self.num_fg as f64)
            .collect();
        let mut counts: Vec<usize> = quotas.iter().map(|q| q.floor() as usize).collect();
        let mut remainder = self.num_fg - counts.iter().sum::<usize>();
        let mut order: Vec<usize> = (0..quotas.len()).collect();
        order.sort_by(|&a, &b| {
            let fa = quotas[a] - quotas[a].floor();
            let fb = quotas[b] - quotas[b].floor();
            fb.partial_cmp(&fa).unwrap().then(a.cmp(&b))
        });
        for &i in &order {
            if remainder == 0 {
                break;
            }
            counts[i] += 1;
            remainder -= 1;
        }
        Ok(counts)
    }
}

/// Simulate proposals: the background logit is exactly 0, foreground
/// logits are Gaussian around the configured means. Deterministic under
/// the seed.
pub fn simulate_proposals(spec: &ProposalSpec) -> Result<Vec<Proposal>> {
    let counts = spec.fg_counts()?;
    let c = spec.num_fg_classes();
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let draw = |mean: f64, rng: &mut ChaCha8Rng| -> f64 {
        let n: f64 = rng.sample(StandardNormal);
        mean + spec.logit_noise * n
    };
    let mut proposals = Vec::with_capacity(spec.num_fg + spec.num_bg);
    for (class_idx, &n) in counts.iter().enumerate() {
        let truth = class_idx + 1;
        for _ in 0..n {
            let mut logits = vec![0.0; c + 1];
            for (j, slot) in logits.iter_mut().enumerate().skip(1) {
                let mean = if j == truth { spec.fg_logit_mean } else { spec.bg_logit_mean };
                *slot = draw(mean, &mut rng);
            }
            proposals.push(Proposal { logits, truth });
        }
    }
    for _ in 0..spec.num_bg {
        let mut logits = vec![0.0; c + 1];
        for slot in logits.iter_mut().skip(1) {
            *slot = draw(spec.bg_logit_mean, &mut rng);
        }
        proposals.push(Proposal { logits, truth: 0 });
    }
    Ok(proposals)
}

/// Per-proposal verdict.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub truth: usize,
    /// Detected foreground class, `None` when nothing crossed the
    /// threshold.
    pub predicted: Option<usize>,
    /// Adjusted softmax score of the best foreground class.
    pub score: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct OutcomeCounts {
    pub true_positives: usize,
    /// Background proposals detected as some foreground class.
    pub false_positives: usize,
    /// Foreground proposals detected as the wrong foreground class.
    pub misclassified: usize,
    /// Foreground proposals with no detection at all.
    pub missed_foreground: usize,
    pub true_negatives: usize,
}

impl OutcomeCounts {
    pub fn total(&self) -> usize {
        self.true_positives
            + self.false_positives
            + self.misclassified
            + self.missed_foreground
            + self.true_negatives
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DetectionOutcome {
    pub detections: Vec<Detection>,
    pub counts: OutcomeCounts,
    pub threshold: f64,
    pub num_fg_classes: usize,
}

impl DetectionOutcome {
    /// Recall of one foreground class: detected-as-itself over truths.
    pub fn class_recall(&self, class: usize) -> Option<f64> {
        let truths = self.detections.iter().filter(|d| d.truth == class).count();
        if truths == 0 {
            return None;
        }
        let hits = self
            .detections
            .iter()
            .filter(|d| d.truth == class && d.predicted == Some(class))
            .count();
        Some(hits as f64 / truths as f64)
    }
}

fn scheme_has_background_slot(scheme: &MarginScheme) -> bool {
    match scheme {
        MarginScheme::MultiplicativeIif { weights }
        | MarginScheme::AdditivePosthoc { weights, .. }
        | MarginScheme::AdditiveLoss { weights } => weights.background_index == Some(0),
        _ => false,
    }
}

/// Run detection over proposals. A proposal is a detection of class
/// y > 0 when its adjusted softmax score for the best foreground class
/// exceeds the threshold; the background rule (weight 1 multiplicative,
/// zero additive shift at slot 0) must be baked into the scheme.
pub fn detect(
    proposals: &[Proposal],
    scheme: &MarginScheme,
    threshold: f64,
) -> Result<DetectionOutcome> {
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::InvalidArgument(format!(
            "threshold must lie strictly inside (0, 1), got {threshold}"
        )));
    }
    if !scheme_has_background_slot(scheme) {
        return Err(Error::InvalidArgument(
            "detection schemes must carry class weights with a background slot at index 0".into(),
        ));
    }
    let num_slots = scheme.num_classes();
    let c = num_slots - 1;
    let mut detections = Vec::with_capacity(proposals.len());
    let mut counts = OutcomeCounts::default();
    for p in proposals {
        if p.logits.len() != num_slots {
            return Err(Error::DimensionMismatch { expected: num_slots, actual: p.logits.len() });
        }
        if p.truth > c {
            return Err(Error::InvalidArgument(format!(
                "proposal truth {} out of range for {c} foreground classes",
                p.truth
            )));
        }
        let adjusted = scheme.apply(&p.logits)?;
        let scores = softmax(&adjusted);
        // best foreground class, ties to the lowest index
        let mut best = 1usize;
        for j in 2..num_slots {
            if scores[j] > scores[best] {
                best = j;
            }
        }
        let score = scores[best];
        let predicted = if score > threshold { Some(best) } else { None };
        match (p.truth, predicted) {
            (0, Some(_)) => counts.false_positives += 1,
            (0, None) => counts.true_negatives += 1,
            (t, Some(pr)) if pr == t => counts.true_positives += 1,
            (_, Some(_)) => counts.misclassified += 1,
            (_, None) => counts.missed_foreground += 1,
        }
        detections.push(Detection { truth: p.truth, predicted, score });
    }
    Ok(DetectionOutcome { detections, counts, threshold, num_fg_classes: c })
}

/// One line of the side-by-side false-positive report.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpReportRow {
    pub scheme: String,
    pub threshold: f64,
    pub false_positives: usize,
    pub true_positives: usize,
    pub missed_foreground: usize,
    pub tail_class: usize,
    pub tail_recall: Option<f64>,
    pub per_class_recall: Vec<Option<f64>>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FpReport {
    pub rows: Vec<FpReportRow>,
}

/// Tabulate named outcomes over the same proposal set. The tail class
/// is the foreground class with the fewest truths (largest index on
/// ties).
pub fn fp_report(entries: &[(String, DetectionOutcome)]) -> Result<FpReport> {
    let Some((_, first)) = entries.first() else {
        return Err(Error::InvalidArgument("no outcomes to report".into()));
    };
    for (name, outcome) in entries {
        if outcome.detections.len() != first.detections.len()
            || outcome
                .detections
                .iter()
                .zip(&first.detections)
                .any(|(a, b)| a.truth != b.truth)
        {
            return Err(Error::InvalidArgument(format!(
                "outcome '{name}' was computed on a different proposal set"
            )));
        }
    }
    let c = first.num_fg_classes;
    let mut truths = vec![0usize; c + 1];
    for d in &first.detections {
        truths[d.truth] += 1;
    }
    let tail_class = (1..=c)
        .min_by_key(|&y| (truths[y], std::cmp::Reverse(y)))
        .unwrap_or(1);
    let rows = entries
        .iter()
        .map(|(name, outcome)| FpReportRow {
            scheme: name.clone(),
            threshold: outcome.threshold,
            false_positives: outcome.counts.false_positives,
            true_positives: outcome.counts.true_positives,
            missed_foreground: outcome.counts.missed_foreground,
            tail_class,
            tail_recall: outcome.class_recall(tail_class),
            per_class_recall: (1..=c).map(|y| outcome.class_recall(y)).collect(),
        })
        .collect();
    Ok(FpReport { rows })
}

impl FpReport {
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut w = csv::Writer::from_writer(writer);
        w.write_record([
            "scheme",
            "threshold",
            "false_positives",
            "true_positives",
            "missed_foreground",
            "tail_class",
            "tail_recall",
        ])?;
        for row in &self.rows {
            w.write_record([
                row.scheme.clone(),
                row.threshold.to_string(),
                row.false_positives.to_string(),
                row.true_positives.to_string(),
                row.missed_foreground.to_string(),
                row.tail_class.to_string(),
                row.tail_recall.map(|r| r.to_string()).unwrap_or_default(),
            ])?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Threshold at which `scheme` detects as close as possible to `target`
/// tail-class proposals (detection = predicted as the tail class with
/// score above threshold). Returns `None` when no threshold in (0, 1)
/// comes within one detection of the target.
pub fn threshold_matching_tail_detections(
    proposals: &[Proposal],
    scheme: &MarginScheme,
    tail_class: usize,
    target: usize,
) -> Result<Option<f64>> {
    // Predicted classes do not depend on the threshold, only on scores;
    // collect the scores of tail-truth proposals predicted as tail and
    // place the cut between order statistics.
    let mut tail_scores = Vec::new();
    for p in proposals.iter().filter(|p| p.truth == tail_class) {
        let scores = softmax(&scheme.apply(&p.logits)?);
        let mut best = 1usize;
        for j in 2..scores.len() {
            if scores[j] > scores[best] {
                best = j;
            }
        }
        if best == tail_class {
            tail_scores.push(scores[best]);
        }
    }
    tail_scores.sort_by(|a, b| b.partial_cmp(a).unwrap());

    let candidate = |k: usize| -> Option<f64> {
        // a threshold detecting exactly k of the sorted scores
        let t = if k == 0 {
            tail_scores.first().map(|&s| (s + 1.0) / 2.0).unwrap_or(0.5)
        } else if k >= tail_scores.len() {
            tail_scores.last().map(|&s| s / 2.0)?
        } else {
            (tail_scores[k - 1] + tail_scores[k]) / 2.0
        };
        (t > 0.0 && t < 1.0).then_some(t)
    };
    for k in [target, target.saturating_sub(1), target + 1] {
        if let Some(t) = candidate(k) {
            let got = detect(proposals, scheme, t)?;
            let detected = got
                .detections
                .iter()
                .filter(|d| d.truth == tail_class && d.predicted == Some(tail_class))
                .count();
            if detected.abs_diff(target) <= 1 {
                return Ok(Some(t));
            }
        }
    }
    Ok(None)
}

/// The shipped comparison scenario: 500 background and 100 foreground
/// proposals over 3 foreground classes whose training frequencies have a
/// 50x head-to-tail ratio.
pub fn shipped_scenario() -> (ProposalSpec, ClassFrequencyTable) {
    let counts = vec![500u64, 71, 10]; // 500 / 10 = 50
    let spec = ProposalSpec {
        num_fg: 100,
        num_bg: 500,
        fg_class_weights: counts.iter().map(|&n| n as f64).collect(),
        fg_logit_mean: 1.5,
        bg_logit_mean: -1.0,
        logit_noise: 0.5,
        seed: 20,
    };
    let table = ClassFrequencyTable::from_counts(counts, None).unwrap();
    (spec, table)
}

// CSV layout: truth,z_0,...,z_C

pub fn save_proposals_csv<P: AsRef<Path>>(proposals: &[Proposal], path: P) -> Result<()> {
    let slots = proposals.first().map(|p| p.logits.len()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec!["truth".to_string()];
    header.extend((0..slots).map(|j| format!("z_{j}")));
    w.write_record(&header)?;
    for p in proposals {
        if p.logits.len() != slots {
            return Err(Error::DimensionMismatch { expected: slots, actual: p.logits.len() });
        }
        let mut rec = vec![p.truth.to_string()];
        rec.extend(p.logits.iter().map(|z| z.to_string()));
        w.write_record(&rec)?;
    }
    w.flush()?;
    Ok(())
}

pub fn load_proposals_csv<P: AsRef<Path>>(path: P) -> Result<Vec<Proposal>> {
    let mut contents = String::new();
    File::open(path)?.read_to_string(&mut contents)?;
    if contents.trim().is_empty() {
        return Ok(Vec::new());
    }
    let mut reader = csv::Reader::from_reader(BufReader::new(contents.as_bytes()));
    let slots = reader.headers()?.len().saturating_sub(1);
    let mut out = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        if record.len() != slots + 1 {
            return Err(Error::Parse {
                row,
                reason: format!("expected {} columns, got {}", slots + 1, record.len()),
            });
        }
        let truth: usize = record[0]
            .parse()
            .map_err(|_| Error::Parse { row, reason: format!("bad truth '{}'", &record[0]) })?;
        let mut logits = Vec::with_capacity(slots);
        for j in 0..slots {
            let z: f64 = record[j + 1].parse().map_err(|_| Error::Parse {
                row,
                reason: format!("bad logit z_{j} '{}'", &record[j + 1]),
            })?;
            logits.push(z);
        }
        out.push(Proposal { logits, truth });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CountMode;
    use crate::margins::{compute_weights, VariantKind};

    fn schemes() -> (MarginScheme, MarginScheme) {
        let (_, table) = shipped_scenario();
        let mult = compute_weights(&table, VariantKind::Raw, CountMode::Image)
            .unwrap()
            .with_background(0)
            .unwrap();
        let add = compute_weights(&table, VariantKind::Raw, CountMode::Image)
            .unwrap()
            .with_background(0)
            .unwrap();
        (MarginScheme::multiplicative(mult), MarginScheme::additive_posthoc(add))
    }

    #[test]
    fn zero_foreground_means_all_background() {
        let (mut spec, _) = shipped_scenario();
        spec.num_fg = 0;
        let props = simulate_proposals(&spec).unwrap();
        assert_eq!(props.len(), 500);
        assert!(props.iter().all(|p| p.truth == 0));
    }

    #[test]
    fn zero_noise_pins_logits_to_their_means() {
        let (mut spec, _) = shipped_scenario();
        spec.logit_noise = 0.0;
        let props = simulate_proposals(&spec).unwrap();
        for p in props {
            assert_eq!(p.logits[0], 0.0);
            for (j, &z) in p.logits.iter().enumerate().skip(1) {
                let want = if j == p.truth { 1.5 } else { -1.0 };
                assert_eq!(z, want);
            }
        }
    }

    #[test]
    fn simulation_is_deterministic() {
        let (spec, _) = shipped_scenario();
        assert_eq!(simulate_proposals(&spec).unwrap(), simulate_proposals(&spec).unwrap());
    }

    #[test]
    fn foreground_apportionment_is_exact_and_stable() {
        let (spec, _) = shipped_scenario();
        let counts = spec.fg_counts().unwrap();
        assert_eq!(counts.iter().sum::<usize>(), 100);
        assert_eq!(counts, vec![86, 12, 2]);
    }

    #[test]
    fn multiplicative_keeps_sure_negatives_undetected() {
        // all foreground logits below background, positive weights,
        // threshold 0.5: nothing can cross
        let proposal = Proposal { logits: vec![0.0, -0.8, -1.2, -0.3], truth: 0 };
        let (mult, _) = schemes();
        let out = detect(&[proposal], &mult, 0.5).unwrap();
        assert_eq!(out.counts.false_positives, 0);
        assert_eq!(out.counts.true_negatives, 1);
    }

    #[test]
    fn additive_shift_can_cross_the_background() {
        // z = -0.5 with a +2.3026 shift lands at +1.8: the tail class
        // outruns the zero background logit
        let proposal = Proposal { logits: vec![0.0, -0.5, -0.5, -0.5], truth: 0 };
        let (_, add) = schemes();
        let adjusted = add.apply(&proposal.logits).unwrap();
        assert!(adjusted[3] > 0.0, "tail logit should flip positive, got {}", adjusted[3]);
        let out = detect(&[proposal], &add, 0.5).unwrap();
        assert_eq!(out.counts.false_positives, 1);
    }

    #[test]
    fn near_one_threshold_with_flat_scores_detects_nothing() {
        let (mult, _) = schemes();
        let proposal = Proposal { logits: vec![0.0, 0.0, 0.0, 0.0], truth: 1 };
        let out = detect(&[proposal], &mult, 0.999).unwrap();
        assert_eq!(out.counts.missed_foreground, 1);
    }

    #[test]
    fn detect_validates_inputs() {
        let (mult, _) = schemes();
        let p = Proposal { logits: vec![0.0, 1.0, 1.0, 1.0], truth: 1 };
        assert!(detect(&[p.clone()], &mult, 0.0).is_err());
        assert!(detect(&[p.clone()], &mult, 1.0).is_err());
        // scheme without a background slot is rejected
        let (_, table) = shipped_scenario();
        let no_bg = MarginScheme::multiplicative(
            compute_weights(&table, VariantKind::Raw, CountMode::Image).unwrap(),
        );
        assert!(detect(&[p], &no_bg, 0.5).is_err());
    }

    #[test]
    fn raising_the_threshold_never_adds_false_positives() {
        let (spec, _) = shipped_scenario();
        let props = simulate_proposals(&spec).unwrap();
        let (_, add) = schemes();
        let mut prev = usize::MAX;
        for t in [0.3, 0.5, 0.7, 0.9, 0.97] {
            let fp = detect(&props, &add, t).unwrap().counts.false_positives;
            assert!(fp <= prev, "fp went up from {prev} to {fp} at threshold {t}");
            prev = fp;
        }
    }

    #[test]
    fn counts_partition_the_proposal_set() {
        let (spec, _) = shipped_scenario();
        let props = simulate_proposals(&spec).unwrap();
        let (mult, add) = schemes();
        for scheme in [mult, add] {
            let out = detect(&props, &scheme, 0.5).unwrap();
            assert_eq!(out.counts.total(), props.len());
        }
    }

    #[test]
    fn report_rows_match_for_identical_schemes() {
        let (spec, _) = shipped_scenario();
        let props = simulate_proposals(&spec).unwrap();
        let (mult, _) = schemes();
        let a = detect(&props, &mult, 0.5).unwrap();
        let b = detect(&props, &mult, 0.5).unwrap();
        let report = fp_report(&[("a".into(), a), ("b".into(), b)]).unwrap();
        assert_eq!(report.rows[0].false_positives, report.rows[1].false_positives);
        assert_eq!(report.rows[0].tail_recall, report.rows[1].tail_recall);
        assert_eq!(report.rows[0].tail_class, 3);
    }

    #[test]
    fn report_rejects_mismatched_proposal_sets() {
        let (spec, _) = shipped_scenario();
        let props = simulate_proposals(&spec).unwrap();
        let (mult, _) = schemes();
        let a = detect(&props, &mult, 0.5).unwrap();
        let mut spec2 = spec.clone();
        spec2.num_bg = 10;
        let b = detect(&simulate_proposals(&spec2).unwrap(), &mult, 0.5).unwrap();
        assert!(fp_report(&[("a".into(), a), ("b".into(), b)]).is_err());
    }

    #[test]
    fn report_handles_zero_proposals() {
        let (mult, _) = schemes();
        let out = detect(&[], &mult, 0.5).unwrap();
        let report = fp_report(&[("empty".into(), out)]).unwrap();
        assert_eq!(report.rows[0].false_positives, 0);
        assert_eq!(report.rows[0].tail_recall, None);
    }

    #[test]
    fn sign_preservation_over_randomized_proposals() {
        let (mut spec, _) = shipped_scenario();
        spec.num_bg = 2_000;
        spec.seed = 77;
        let props = simulate_proposals(&spec).unwrap();
        let (mult, _) = schemes();
        let mut flips = 0;
        for p in &props {
            let adjusted = mult.apply(&p.logits).unwrap();
            for j in 1..p.logits.len() {
                if p.logits[j] < 0.0 && adjusted[j] > 0.0 {
                    flips += 1;
                }
            }
        }
        assert_eq!(flips, 0);
    }

    #[test]
    fn proposals_csv_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("props.csv");
        let (mut spec, _) = shipped_scenario();
        spec.num_bg = 20;
        spec.num_fg = 10;
        let props = simulate_proposals(&spec).unwrap();
        save_proposals_csv(&props, &path).unwrap();
        let loaded = load_proposals_csv(&path).unwrap();
        assert_eq!(props, loaded);
    }
}
