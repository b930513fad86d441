//! Synthetic long-tailed datasets, CSV persistence and the class-frequency
//! statistics every margin adjustment consumes.
//!
//! Training splits follow a configurable imbalance profile while test
//! splits are balanced, mirroring the usual long-tailed benchmark layout.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One labelled feature vector. `instance_count` is the number of object
/// instances the sample carries; plain classification data uses 1.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LabeledSample {
    pub features: Vec<f64>,
    pub label: usize,
    pub instance_count: u64,
}

impl LabeledSample {
    pub fn new(features: Vec<f64>, label: usize) -> Self {
        Self { features, label, instance_count: 1 }
    }

    pub fn with_instances(features: Vec<f64>, label: usize, instance_count: u64) -> Self {
        Self { features, label, instance_count }
    }
}

/// Whether statistics are taken over images (samples) or object instances.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CountMode {
    Image,
    Object,
}

impl CountMode {
    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "image" => Ok(CountMode::Image),
            "object" => Ok(CountMode::Object),
            other => Err(Error::InvalidArgument(format!(
                "unknown count source '{other}' (expected image|object)"
            ))),
        }
    }
}

impl std::fmt::Display for CountMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CountMode::Image => write!(f, "image"),
            CountMode::Object => write!(f, "object"),
        }
    }
}

/// Per-class frequency statistics of a training set.
///
/// `image_freq[y]` counts the samples in which class `y` appears,
/// `object_freq[y]` sums instance counts, and `K` is the image-count
/// total. Class probabilities are `count / total` under the chosen
/// [`CountMode`].
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassFrequencyTable {
    pub image_freq: Vec<u64>,
    pub object_freq: Vec<u64>,
    #[serde(rename = "K")]
    pub total_k: u64,
}

impl ClassFrequencyTable {
    /// Build a table directly from per-class counts. `object_freq`
    /// defaults to `image_freq` when not provided (the classification
    /// case, where images and objects are one-to-one).
    pub fn from_counts(image_freq: Vec<u64>, object_freq: Option<Vec<u64>>) -> Result<Self> {
        let object_freq = object_freq.unwrap_or_else(|| image_freq.clone());
        if object_freq.len() != image_freq.len() {
            return Err(Error::DimensionMismatch {
                expected: image_freq.len(),
                actual: object_freq.len(),
            });
        }
        let total_k = image_freq.iter().sum();
        if total_k == 0 {
            return Err(Error::InvalidArgument("frequency table has no counts".into()));
        }
        Ok(Self { image_freq, object_freq, total_k })
    }

    pub fn num_classes(&self) -> usize {
        self.image_freq.len()
    }

    pub fn counts(&self, mode: CountMode) -> &[u64] {
        match mode {
            CountMode::Image => &self.image_freq,
            CountMode::Object => &self.object_freq,
        }
    }

    /// Count total under the chosen mode; for image mode this is `K`.
    pub fn total(&self, mode: CountMode) -> u64 {
        match mode {
            CountMode::Image => self.total_k,
            CountMode::Object => self.object_freq.iter().sum(),
        }
    }

    /// p(y) = count(y) / total. Zero-count classes get probability 0.
    pub fn probabilities(&self, mode: CountMode) -> Vec<f64> {
        let total = self.total(mode) as f64;
        self.counts(mode).iter().map(|&c| c as f64 / total).collect()
    }

    /// Ratio of largest to smallest class frequency; `None` when a class
    /// has zero count.
    pub fn imbalance_factor(&self, mode: CountMode) -> Option<f64> {
        let counts = self.counts(mode);
        let max = *counts.iter().max()?;
        let min = *counts.iter().min()?;
        if min == 0 {
            None
        } else {
            Some(max as f64 / min as f64)
        }
    }

    pub fn save_json<P: AsRef<Path>>(&self, path: P) -> Result<()> {
        let file = BufWriter::new(File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_json<P: AsRef<Path>>(path: P) -> Result<Self> {
        let file = BufReader::new(File::open(path)?);
        let table: Self = serde_json::from_reader(file)?;
        if table.total_k != table.image_freq.iter().sum::<u64>() {
            return Err(Error::InvalidArgument(
                "frequency table K does not match the sum of image counts".into(),
            ));
        }
        Ok(table)
    }
}

/// Count class frequencies over a sample list. Each sample contributes 1
/// to its class's image count and `instance_count` to its object count.
/// The number of classes is inferred as `max label + 1`.
pub fn count_frequencies(samples: &[LabeledSample]) -> Result<ClassFrequencyTable> {
    let num_classes = samples.iter().map(|s| s.label + 1).max().ok_or_else(|| {
        Error::InvalidArgument("cannot count frequencies of an empty sample list".into())
    })?;
    count_frequencies_with_classes(samples, num_classes)
}

/// Like [`count_frequencies`] but with an explicit class count, so that
/// trailing zero-frequency classes are representable.
pub fn count_frequencies_with_classes(
    samples: &[LabeledSample],
    num_classes: usize,
) -> Result<ClassFrequencyTable> {
    if samples.is_empty() {
        return Err(Error::InvalidArgument(
            "cannot count frequencies of an empty sample list".into(),
        ));
    }
    let mut image_freq = vec![0u64; num_classes];
    let mut object_freq = vec![0u64; num_classes];
    for (i, s) in samples.iter().enumerate() {
        if s.label >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has label {} but only {num_classes} classes were declared",
                s.label
            )));
        }
        if s.instance_count == 0 {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has instance_count 0 (must be >= 1)"
            )));
        }
        image_freq[s.label] += 1;
        object_freq[s.label] += s.instance_count;
    }
    let total_k = image_freq.iter().sum();
    Ok(ClassFrequencyTable { image_freq, object_freq, total_k })
}

/// Shape of the training-set class counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum Profile {
    /// n_y = n_max * beta^(-y / (C-1)), the usual exponential decay.
    Exponential { n_max: u64 },
    /// n_y = n_max * (y+1)^(-a) with the exponent solved so that
    /// n_max / n_min = beta.
    Pareto { n_max: u64 },
    /// Counts given verbatim, one per class.
    Explicit { counts: Vec<u64> },
}

/// Recipe for a synthetic long-tailed dataset: Gaussian blobs with unit
/// variance whose means sit on the scaled standard simplex (class `y` at
/// `class_separation * e_y`), a long-tailed train split and a balanced
/// test split.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    pub num_classes: usize,
    pub dim: usize,
    pub imbalance_factor: f64,
    pub profile: Profile,
    pub class_separation: f64,
    pub test_per_class: usize,
    pub seed: u64,
}

impl DatasetSpec {
    pub fn validate(&self) -> Result<()> {
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "num_classes must be >= 2, got {}",
                self.num_classes
            )));
        }
        if !self.imbalance_factor.is_finite() || self.imbalance_factor < 1.0 {
            return Err(Error::InvalidArgument(format!(
                "imbalance_factor must be >= 1, got {}",
                self.imbalance_factor
            )));
        }
        if self.dim < self.num_classes {
            return Err(Error::InvalidArgument(format!(
                "dim must be >= num_classes (simplex means need one axis per class), got dim {} for {} classes",
                self.dim, self.num_classes
            )));
        }
        if !self.class_separation.is_finite() || self.class_separation < 0.0 {
            return Err(Error::InvalidArgument(format!(
                "class_separation must be finite and >= 0, got {}",
                self.class_separation
            )));
        }
        let counts = self.train_counts()?;
        if let Some(&min) = counts.iter().min() {
            if min == 0 {
                return Err(Error::InvalidArgument(
                    "profile produces a zero train count; raise n_max or lower the imbalance factor".into(),
                ));
            }
        }
        if let Profile::Explicit { counts } = &self.profile {
            if counts.len() != self.num_classes {
                return Err(Error::DimensionMismatch {
                    expected: self.num_classes,
                    actual: counts.len(),
                });
            }
            let max = *counts.iter().max().unwrap() as f64;
            let min = *counts.iter().min().unwrap() as f64;
            let ratio = max / min;
            let tol = (1.0 / min + 1e-9) * self.imbalance_factor;
            if (ratio - self.imbalance_factor).abs() > tol {
                return Err(Error::InvalidArgument(format!(
                    "explicit counts have max/min ratio {ratio:.4}, inconsistent with imbalance_factor {}",
                    self.imbalance_factor
                )));
            }
        }
        Ok(())
    }

    /// Per-class train counts implied by the profile.
    pub fn train_counts(&self) -> Result<Vec<u64>> {
        let c = self.num_classes;
        let beta = self.imbalance_factor;
        match &self.profile {
            Profile::Exponential { n_max } => {
                if *n_max == 0 {
                    return Err(Error::InvalidArgument("n_max must be positive".into()));
                }
                Ok((0..c)
                    .map(|y| {
                        let frac = y as f64 / (c - 1) as f64;
                        (*n_max as f64 * beta.powf(-frac)).round() as u64
                    })
                    .collect())
            }
            Profile::Pareto { n_max } => {
                if *n_max == 0 {
                    return Err(Error::InvalidArgument("n_max must be positive".into()));
                }
                // n_0 / n_{C-1} = C^a = beta
                let a = beta.ln() / (c as f64).ln();
                Ok((0..c)
                    .map(|y| (*n_max as f64 * ((y + 1) as f64).powf(-a)).round() as u64)
                    .collect())
            }
            Profile::Explicit { counts } => {
                if counts.is_empty() || counts.iter().any(|&n| n == 0) {
                    return Err(Error::InvalidArgument(
                        "explicit counts must be nonempty and positive".into(),
                    ));
                }
                Ok(counts.clone())
            }
        }
    }
}

/// A generated train/test pair plus the train-set frequency table.
#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticDataset {
    pub train: Vec<LabeledSample>,
    pub test: Vec<LabeledSample>,
    pub table: ClassFrequencyTable,
}

/// Generate a synthetic dataset per the spec: long-tailed train counts,
/// balanced test counts, per-class unit-variance Gaussian features, all
/// reproducible from the seed.
pub fn generate_synthetic(spec: &DatasetSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let counts = spec.train_counts()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);

    let draw = |label: usize, rng: &mut ChaCha8Rng| -> LabeledSample {
        let features = (0..spec.dim)
            .map(|j| {
                let noise: f64 = rng.sample(StandardNormal);
                if j == label {
                    spec.class_separation + noise
                } else {
                    noise
                }
            })
            .collect();
        LabeledSample::new(features, label)
    };

    let mut train = Vec::with_capacity(counts.iter().sum::<u64>() as usize);
    for (label, &n) in counts.iter().enumerate() {
        for _ in 0..n {
            train.push(draw(label, &mut rng));
        }
    }
    let mut test = Vec::with_capacity(spec.num_classes * spec.test_per_class);
    for label in 0..spec.num_classes {
        for _ in 0..spec.test_per_class {
            test.push(draw(label, &mut rng));
        }
    }
    let table = count_frequencies_with_classes(&train, spec.num_classes)?;
    Ok(SyntheticDataset { train, test, table })
}

/// Frequency group of a class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Group {
    Few,
    Medium,
    Many,
}

/// An exhaustive, disjoint partition of classes into few / medium / many
/// by image frequency.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct GroupSplit {
    groups: Vec<Group>,
}

impl GroupSplit {
    /// Rank classes by image frequency (ties broken by class index) and
    /// take the bottom third as `Few` and the top third as `Many`.
    pub fn from_terciles(table: &ClassFrequencyTable) -> Self {
        let c = table.num_classes();
        let mut order: Vec<usize> = (0..c).collect();
        order.sort_by_key(|&y| (table.image_freq[y], y));
        let third = c / 3;
        let mut groups = vec![Group::Medium; c];
        for &y in &order[..third] {
            groups[y] = Group::Few;
        }
        for &y in &order[c - third..] {
            groups[y] = Group::Many;
        }
        Self { groups }
    }

    /// Absolute thresholds on image frequency: counts `<= few_max` are
    /// `Few`, counts `>= many_min` are `Many`, the rest `Medium`.
    pub fn from_thresholds(table: &ClassFrequencyTable, few_max: u64, many_min: u64) -> Result<Self> {
        if few_max >= many_min {
            return Err(Error::InvalidArgument(format!(
                "few_max ({few_max}) must be below many_min ({many_min})"
            )));
        }
        let groups = table
            .image_freq
            .iter()
            .map(|&n| {
                if n <= few_max {
                    Group::Few
                } else if n >= many_min {
                    Group::Many
                } else {
                    Group::Medium
                }
            })
            .collect();
        Ok(Self { groups })
    }

    pub fn num_classes(&self) -> usize {
        self.groups.len()
    }

    pub fn group(&self, class: usize) -> Group {
        self.groups[class]
    }

    pub fn classes_in(&self, group: Group) -> Vec<usize> {
        (0..self.groups.len()).filter(|&y| self.groups[y] == group).collect()
    }
}

// ---------------------------------------------------------------------------
// CSV persistence
//
// Layout: `label:<num_classes>,instance_count,f_0,...,f_{d-1}` as the
// header, one sample per row. The class count rides in the label column
// so a file is self-describing.
// ---------------------------------------------------------------------------

pub fn save_csv<P: AsRef<Path>>(
    samples: &[LabeledSample],
    num_classes: usize,
    path: P,
) -> Result<()> {
    let dim = samples.first().map(|s| s.features.len()).unwrap_or(0);
    let mut w = csv::Writer::from_writer(BufWriter::new(File::create(path)?));
    let mut header = vec![format!("label:{num_classes}"), "instance_count".to_string()];
    header.extend((0..dim).map(|j| format!("f_{j}")));
    w.write_record(&header)?;
    for (i, s) in samples.iter().enumerate() {
        if s.label >= num_classes {
            return Err(Error::InvalidArgument(format!(
                "sample {i} has label {} but only {num_classes} classes were declared",
                s.label
            )));
        }
        if s.features.len() != dim {
            return Err(Error::DimensionMismatch { expected: dim, actual: s.features.len() });
        }
        if s.features.iter().any(|f| !f.is_finite()) {
            return Err(Error::InvalidArgument(format!("sample {i} has non-finite features")));
        }
        if s.instance_count == 0 {
            return Err(Error::InvalidArgument(format!("sample {i} has instance_count 0")));
        }
        let mut record = vec![s.label.to_string(), s.instance_count.to_string()];
        record.extend(s.features.iter().map(|f| f.to_string()));
        w.write_record(&record)?;
    }
    w.flush()?;
    Ok(())
}

/// Load samples from CSV. Empty files load as an empty list.
pub fn load_csv<P: AsRef<Path>>(path: P) -> Result<Vec<LabeledSample>> {
    Ok(load_csv_with_classes(path)?.0)
}

/// Load samples plus the class count declared in the header (0 for an
/// empty file).
pub fn load_csv_with_classes<P: AsRef<Path>>(path: P) -> Result<(Vec<LabeledSample>, usize)> {
    let mut contents = String::new();
    File::open(path)?.read_to_string(&mut contents)?;
    if contents.trim().is_empty() {
        return Ok((Vec::new(), 0));
    }
    let mut reader = csv::ReaderBuilder::new().flexible(true).from_reader(contents.as_bytes());
    let headers = reader.headers()?.clone();
    if headers.len() < 2 {
        return Err(Error::Parse {
            row: 0,
            reason: format!("header has {} columns, expected at least label and instance_count", headers.len()),
        });
    }
    let label_col = &headers[0];
    let num_classes = match label_col.strip_prefix("label:") {
        Some(n) => n.parse::<usize>().map_err(|_| Error::Parse {
            row: 0,
            reason: format!("cannot parse class count from header column '{label_col}'"),
        })?,
        None if label_col == "label" => 0, // undeclared; labels unchecked
        None => {
            return Err(Error::Parse {
                row: 0,
                reason: format!("first header column must be 'label:<C>' or 'label', got '{label_col}'"),
            })
        }
    };
    if &headers[1] != "instance_count" {
        return Err(Error::Parse {
            row: 0,
            reason: format!("second header column must be 'instance_count', got '{}'", &headers[1]),
        });
    }
    let dim = headers.len() - 2;

    let mut samples = Vec::new();
    for (idx, record) in reader.records().enumerate() {
        let row = idx + 1;
        let record = record?;
        if record.len() != dim + 2 {
            return Err(Error::Parse {
                row,
                reason: format!("dimension mismatch: expected {dim} feature columns, got {}", record.len().saturating_sub(2)),
            });
        }
        let label: usize = record[0].parse().map_err(|_| Error::Parse {
            row,
            reason: format!("cannot parse label '{}'", &record[0]),
        })?;
        if num_classes > 0 && label >= num_classes {
            return Err(Error::Parse {
                row,
                reason: format!("label {label} out of range for the {num_classes} classes declared in the header"),
            });
        }
        let instance_count: u64 = record[1].parse().map_err(|_| Error::Parse {
            row,
            reason: format!("cannot parse instance_count '{}'", &record[1]),
        })?;
        if instance_count == 0 {
            return Err(Error::Parse { row, reason: "instance_count must be >= 1".into() });
        }
        let mut features = Vec::with_capacity(dim);
        for j in 0..dim {
            let v: f64 = record[j + 2].parse().map_err(|_| Error::Parse {
                row,
                reason: format!("cannot parse feature f_{j} '{}'", &record[j + 2]),
            })?;
            if !v.is_finite() {
                return Err(Error::Parse { row, reason: format!("feature f_{j} is not finite") });
            }
            features.push(v);
        }
        samples.push(LabeledSample::with_instances(features, label, instance_count));
    }
    Ok((samples, num_classes))
}
