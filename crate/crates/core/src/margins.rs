//! Inverse-frequency class weights and the margin-adjustment family.
//!
//! Weights turn class probabilities into per-class multipliers through a
//! link function; schemes apply those weights (or learnable parameters)
//! to logit vectors either multiplicatively or additively. The
//! multiplicative form never changes the sign of a logit when its weights
//! are positive, which is what keeps background proposals out of the
//! detection regime (see the `detproxy` module).

use serde::{Deserialize, Serialize};

use crate::dataset::{ClassFrequencyTable, CountMode};
use crate::error::{Error, Result};
use crate::stats;

/// Link-function family for turning class probabilities into weights.
///
/// With counts `n` out of `K`:
///
/// | variant  | weight                      | defined for        |
/// |----------|-----------------------------|--------------------|
/// | raw      | ln(K/n)                     | n > 0              |
/// | smooth   | ln((K+1)/(n+1)) + 1         | n >= 0             |
/// | relative | ln((K-n)/n)                 | 0 < n < K          |
/// | base2    | log2(K/n)                   | n > 0              |
/// | base10   | log10(K/n)                  | n > 0              |
/// | gombit   | -ln(-ln(1 - n/K))           | 0 < n < K          |
/// | normit   | probit(1 - n/K)             | 0 < n < K          |
///
/// Normit is the inverse normal CDF of the complementary probability;
/// applying the quantile function to `K/n` directly would put the
/// argument outside its (0,1) domain, so the complementary reading is
/// the one implemented.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VariantKind {
    Raw,
    Smooth,
    Relative,
    Base2,
    Base10,
    Gombit,
    Normit,
}

impl VariantKind {
    pub const ALL: [VariantKind; 7] = [
        VariantKind::Raw,
        VariantKind::Smooth,
        VariantKind::Relative,
        VariantKind::Base2,
        VariantKind::Base10,
        VariantKind::Gombit,
        VariantKind::Normit,
    ];

    pub fn parse(s: &str) -> Result<Self> {
        match s {
            "raw" => Ok(VariantKind::Raw),
            "smooth" => Ok(VariantKind::Smooth),
            "relative" => Ok(VariantKind::Relative),
            "base2" => Ok(VariantKind::Base2),
            "base10" => Ok(VariantKind::Base10),
            "gombit" => Ok(VariantKind::Gombit),
            "normit" => Ok(VariantKind::Normit),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}' (expected raw|smooth|relative|base2|base10|gombit|normit)"
            ))),
        }
    }
}

impl std::fmt::Display for VariantKind {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            VariantKind::Raw => "raw",
            VariantKind::Smooth => "smooth",
            VariantKind::Relative => "relative",
            VariantKind::Base2 => "base2",
            VariantKind::Base10 => "base10",
            VariantKind::Gombit => "gombit",
            VariantKind::Normit => "normit",
        };
        write!(f, "{s}")
    }
}

/// Weight of the pure link functions at probability `p`. `Smooth` is
/// count-based (its formula reads K and n separately) and is rejected
/// here; use [`compute_weights`] for it.
pub fn link_weight(variant: VariantKind, p: f64) -> Result<f64> {
    if !p.is_finite() || !(0.0..=1.0).contains(&p) {
        return Err(Error::InvalidArgument(format!("probability {p} outside [0, 1]")));
    }
    match variant {
        VariantKind::Raw => Ok(-p.ln()),
        VariantKind::Base2 => Ok(-p.log2()),
        VariantKind::Base10 => Ok(-p.log10()),
        VariantKind::Relative => Ok(((1.0 - p) / p).ln()),
        VariantKind::Gombit => Ok(-(-(1.0 - p).ln()).ln()),
        VariantKind::Normit => stats::inverse_normal_cdf(1.0 - p),
        VariantKind::Smooth => Err(Error::InvalidArgument(
            "smooth weights are count-based; use compute_weights".into(),
        )),
    }
}

/// Per-class weights derived from a frequency table.
///
/// A background slot, when present, always holds exactly 1 so that a
/// multiplicative adjustment leaves the background logit untouched;
/// additive forms skip the slot entirely (zero shift).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassWeights {
    pub variant: VariantKind,
    pub source: CountMode,
    pub weights: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub background_index: Option<usize>,
}

impl ClassWeights {
    pub fn num_classes(&self) -> usize {
        self.weights.len()
    }

    /// Insert a background slot with weight exactly 1 at `index`.
    pub fn with_background(mut self, index: usize) -> Result<Self> {
        if self.background_index.is_some() {
            return Err(Error::InvalidArgument("weights already carry a background slot".into()));
        }
        if index > self.weights.len() {
            return Err(Error::InvalidArgument(format!(
                "background index {index} out of range for {} classes",
                self.weights.len()
            )));
        }
        self.weights.insert(index, 1.0);
        self.background_index = Some(index);
        Ok(self)
    }

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

/// Compute per-class weights for `variant` from the table's counts under
/// the chosen source.
pub fn compute_weights(
    table: &ClassFrequencyTable,
    variant: VariantKind,
    source: CountMode,
) -> Result<ClassWeights> {
    let counts = table.counts(source);
    let k = table.total(source);
    if k == 0 {
        return Err(Error::InvalidArgument("frequency table has no counts".into()));
    }
    if variant != VariantKind::Smooth {
        if let Some(class) = counts.iter().position(|&n| n == 0) {
            return Err(Error::Domain {
                class,
                reason: format!("zero {source} frequency is outside the {variant} domain"),
            });
        }
    }
    let mut weights = Vec::with_capacity(counts.len());
    for (class, &n) in counts.iter().enumerate() {
        let w = match variant {
            VariantKind::Smooth => (((k + 1) as f64) / ((n + 1) as f64)).ln() + 1.0,
            _ => {
                if n == k && matches!(variant, VariantKind::Relative | VariantKind::Gombit) {
                    return Err(Error::Domain {
                        class,
                        reason: format!("{variant} weight is infinite when the class holds every count"),
                    });
                }
                let p = n as f64 / k as f64;
                link_weight(variant, p).map_err(|e| Error::Domain {
                    class,
                    reason: format!("{variant} weight undefined at p = {p}: {e}"),
                })?
            }
        };
        weights.push(w);
    }
    Ok(ClassWeights { variant, source, weights, background_index: None })
}

/// A test-time class prior p_t(y).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetDistribution {
    probs: Vec<f64>,
}

impl TargetDistribution {
    pub fn new(probs: Vec<f64>) -> Result<Self> {
        if probs.iter().any(|&p| !p.is_finite() || p < 0.0) {
            return Err(Error::InvalidArgument("target probabilities must be finite and >= 0".into()));
        }
        let sum: f64 = probs.iter().sum();
        if (sum - 1.0).abs() > 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "target probabilities sum to {sum}, expected 1"
            )));
        }
        Ok(Self { probs })
    }

    /// The balanced-test prior, 1/C per class.
    pub fn uniform(num_classes: usize) -> Self {
        Self { probs: vec![1.0 / num_classes as f64; num_classes] }
    }

    pub fn probs(&self) -> &[f64] {
        &self.probs
    }

    pub fn len(&self) -> usize {
        self.probs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.probs.is_empty()
    }
}

fn check_len(expected: usize, actual: usize) -> Result<()> {
    if expected != actual {
        return Err(Error::DimensionMismatch { expected, actual });
    }
    Ok(())
}

/// Multiplicative adjustment: out_i = w_i * z_i. With positive weights the
/// sign of every logit is preserved; a background slot (weight 1) passes
/// through unchanged.
pub fn adjust_multiplicative(logits: &[f64], weights: &ClassWeights) -> Result<Vec<f64>> {
    check_len(weights.num_classes(), logits.len())?;
    Ok(logits.iter().zip(&weights.weights).map(|(z, w)| w * z).collect())
}

/// Prior-shift compensation: out_y = z_y + ln p_t(y) - ln p_s(y), with
/// p_s read from the table's image counts. With a uniform target this is
/// the usual post-hoc correction z - ln p_s up to an argmax-irrelevant
/// constant.
pub fn adjust_additive_posthoc(
    logits: &[f64],
    table: &ClassFrequencyTable,
    target: &TargetDistribution,
) -> Result<Vec<f64>> {
    let c = table.num_classes();
    check_len(c, logits.len())?;
    check_len(c, target.len())?;
    let p_s = table.probabilities(CountMode::Image);
    for (class, &p) in p_s.iter().enumerate() {
        if p <= 0.0 {
            return Err(Error::Domain {
                class,
                reason: "zero source probability; prior shift undefined".into(),
            });
        }
    }
    Ok(logits
        .iter()
        .enumerate()
        .map(|(y, z)| z + target.probs()[y].ln() - p_s[y].ln())
        .collect())
}

/// A named rule mapping raw logits to adjusted logits.
///
/// Dataset-dependent forms carry [`ClassWeights`] or raw counts;
/// learnable forms carry their current parameter values (initialised to
/// scale 1 / offset 0). Reads take a shared borrow, parameter updates an
/// exclusive one.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "form", rename_all = "snake_case")]
pub enum MarginScheme {
    /// out_i = w_i * z_i
    MultiplicativeIif { weights: ClassWeights },
    /// out_i = z_i + w_i (+ ln p_t(i) when a target prior is given).
    /// With raw weights this is z - ln p_s, the inference-time shift.
    AdditivePosthoc {
        weights: ClassWeights,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        target: Option<TargetDistribution>,
    },
    /// out_i = z_i - w_i, the train-time orientation of the additive
    /// adjustment.
    AdditiveLoss { weights: ClassWeights },
    /// out_i = z_i - c / IF(i)^(1/4), applied to every class.
    LdamStyle { c: f64, counts: Vec<u64> },
    /// out_i = z_i + ln IF(i)
    BalancedSoftmax { counts: Vec<u64> },
    /// out_i = alpha_i * z_i
    LearnableScale { alpha: Vec<f64> },
    /// out_i = alpha_i * z_i + beta_i
    LearnableAffine { alpha: Vec<f64>, beta: Vec<f64> },
    /// Identity on logits; the per-class costs act on the loss, not the
    /// scores, so inference is unchanged.
    CslWeight { alpha: Vec<f64> },
}

impl MarginScheme {
    pub fn multiplicative(weights: ClassWeights) -> Self {
        MarginScheme::MultiplicativeIif { weights }
    }

    pub fn additive_posthoc(weights: ClassWeights) -> Self {
        MarginScheme::AdditivePosthoc { weights, target: None }
    }

    pub fn additive_posthoc_with_target(weights: ClassWeights, target: TargetDistribution) -> Self {
        MarginScheme::AdditivePosthoc { weights, target: Some(target) }
    }

    pub fn additive_loss(weights: ClassWeights) -> Self {
        MarginScheme::AdditiveLoss { weights }
    }

    pub fn ldam(c: f64, table: &ClassFrequencyTable, source: CountMode) -> Result<Self> {
        if !(c > 0.0) {
            return Err(Error::InvalidArgument(format!("ldam margin scale must be > 0, got {c}")));
        }
        Ok(MarginScheme::LdamStyle { c, counts: table.counts(source).to_vec() })
    }

    pub fn balanced_softmax(table: &ClassFrequencyTable, source: CountMode) -> Self {
        MarginScheme::BalancedSoftmax { counts: table.counts(source).to_vec() }
    }

    /// Fresh learnable scaling, alpha_i = 1.
    pub fn learnable_scale(num_classes: usize) -> Self {
        MarginScheme::LearnableScale { alpha: vec![1.0; num_classes] }
    }

    /// Fresh learnable affine transform, alpha_i = 1, beta_i = 0.
    pub fn learnable_affine(num_classes: usize) -> Self {
        MarginScheme::LearnableAffine { alpha: vec![1.0; num_classes], beta: vec![0.0; num_classes] }
    }

    pub fn csl(alpha: Vec<f64>) -> Self {
        MarginScheme::CslWeight { alpha }
    }

    pub fn num_classes(&self) -> usize {
        match self {
            MarginScheme::MultiplicativeIif { weights }
            | MarginScheme::AdditivePosthoc { weights, .. }
            | MarginScheme::AdditiveLoss { weights } => weights.num_classes(),
            MarginScheme::LdamStyle { counts, .. } | MarginScheme::BalancedSoftmax { counts } => counts.len(),
            MarginScheme::LearnableScale { alpha }
            | MarginScheme::CslWeight { alpha }
            | MarginScheme::LearnableAffine { alpha, .. } => alpha.len(),
        }
    }

    /// Apply the scheme to a logit vector.
    pub fn apply(&self, logits: &[f64]) -> Result<Vec<f64>> {
        check_len(self.num_classes(), logits.len())?;
        match self {
            MarginScheme::MultiplicativeIif { weights } => adjust_multiplicative(logits, weights),
            MarginScheme::AdditivePosthoc { weights, target } => {
                if let Some(t) = target {
                    check_len(weights.num_classes(), t.len())?;
                }
                Ok(logits
                    .iter()
                    .enumerate()
                    .map(|(i, z)| {
                        if weights.background_index == Some(i) {
                            *z
                        } else {
                            let shift = target.as_ref().map(|t| t.probs()[i].ln()).unwrap_or(0.0);
                            z + weights.weights[i] + shift
                        }
                    })
                    .collect())
            }
            MarginScheme::AdditiveLoss { weights } => Ok(logits
                .iter()
                .enumerate()
                .map(|(i, z)| {
                    if weights.background_index == Some(i) {
                        *z
                    } else {
                        z - weights.weights[i]
                    }
                })
                .collect()),
            MarginScheme::LdamStyle { c, counts } => {
                let mut out = Vec::with_capacity(logits.len());
                for (i, (&z, &n)) in logits.iter().zip(counts).enumerate() {
                    if n == 0 {
                        return Err(Error::Domain {
                            class: i,
                            reason: "ldam margin undefined for zero frequency".into(),
                        });
                    }
                    out.push(z - c / (n as f64).powf(0.25));
                }
                Ok(out)
            }
            MarginScheme::BalancedSoftmax { counts } => {
                let mut out = Vec::with_capacity(logits.len());
                for (i, (&z, &n)) in logits.iter().zip(counts).enumerate() {
                    if n == 0 {
                        return Err(Error::Domain {
                            class: i,
                            reason: "balanced softmax shift undefined for zero frequency".into(),
                        });
                    }
                    out.push(z + (n as f64).ln());
                }
                Ok(out)
            }
            MarginScheme::LearnableScale { alpha } => {
                Ok(logits.iter().zip(alpha).map(|(z, a)| a * z).collect())
            }
            MarginScheme::LearnableAffine { alpha, beta } => {
                check_len(alpha.len(), beta.len())?;
                Ok(logits.iter().zip(alpha.iter().zip(beta)).map(|(z, (a, b))| a * z + b).collect())
            }
            MarginScheme::CslWeight { .. } => Ok(logits.to_vec()),
        }
    }

    /// Human-readable description carried into evaluation reports.
    pub fn describe(&self) -> String {
        match self {
            MarginScheme::MultiplicativeIif { weights } => {
                format!("multiplicative({},{})", weights.variant, weights.source)
            }
            MarginScheme::AdditivePosthoc { weights, target } => format!(
                "additive_posthoc({},{}{})",
                weights.variant,
                weights.source,
                if target.is_some() { ",target" } else { "" }
            ),
            MarginScheme::AdditiveLoss { weights } => {
                format!("additive_loss({},{})", weights.variant, weights.source)
            }
            MarginScheme::LdamStyle { c, .. } => format!("ldam(c={c})"),
            MarginScheme::BalancedSoftmax { .. } => "balanced_softmax".to_string(),
            MarginScheme::LearnableScale { .. } => "learnable_scale".to_string(),
            MarginScheme::LearnableAffine { .. } => "learnable_affine".to_string(),
            MarginScheme::CslWeight { .. } => "csl".to_string(),
        }
    }
}

/// Apply any scheme from the adjustment zoo to a logit vector.
pub fn adjust_table4(logits: &[f64], scheme: &MarginScheme) -> Result<Vec<f64>> {
    scheme.apply(logits)
}

/// Weighted softmax: q_i = exp(w_i z_i) / sum_j exp(w_j z_j), equivalent
/// to replacing the base of each class's activation by 1/p(i). Computed
/// with max-subtraction; the output always sums to 1.
pub fn iif_softmax(logits: &[f64], weights: &ClassWeights) -> Result<Vec<f64>> {
    check_len(weights.num_classes(), logits.len())?;
    if logits.iter().any(|z| !z.is_finite()) || weights.weights.iter().any(|w| !w.is_finite()) {
        return Err(Error::InvalidArgument("iif_softmax requires finite logits and weights".into()));
    }
    let t: Vec<f64> = logits.iter().zip(&weights.weights).map(|(z, w)| w * z).collect();
    Ok(stats::softmax(&t))
}
