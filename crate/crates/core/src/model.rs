//! A small classifier with hand-derived gradients.
//!
//! The model is an optional ReLU hidden layer followed by a linear or
//! cosine classification head. Losses expose their value and logit
//! gradient as standalone functions so they can be checked against
//! finite differences, and `loss_and_grad` backpropagates those logit
//! gradients through the head (and hidden layer when present).

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::dataset::LabeledSample;
use crate::error::{Error, Result};
use crate::margins::ClassWeights;
use crate::stats::{log_sum_exp, softmax};

const NORM_EPS: f64 = 1e-12;

/// Classification head flavour. The cosine head scores
/// `s * <w_y, x> / (|w_y| |x|)` and ignores the bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum HeadKind {
    DotProduct,
    Cosine { scale: f64 },
}

/// A dense layer stored row-major: `rows` outputs by `cols` inputs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DenseLayer {
    pub rows: usize,
    pub cols: usize,
    pub weights: Vec<f64>,
    pub bias: Vec<f64>,
}

impl DenseLayer {
    fn gaussian(rows: usize, cols: usize, rng: &mut impl Rng) -> Self {
        // zero-mean init with variance 2 / fan_in, biases zero
        let std = (2.0 / cols as f64).sqrt();
        let weights = (0..rows * cols)
            .map(|_| {
                let n: f64 = rng.sample(StandardNormal);
                n * std
            })
            .collect();
        Self { rows, cols, weights, bias: vec![0.0; rows] }
    }

    pub fn row(&self, r: usize) -> &[f64] {
        &self.weights[r * self.cols..(r + 1) * self.cols]
    }

    fn matvec(&self, x: &[f64]) -> Vec<f64> {
        (0..self.rows)
            .map(|r| self.row(r).iter().zip(x).map(|(w, xi)| w * xi).sum::<f64>() + self.bias[r])
            .collect()
    }
}

/// Feature extractor plus classification head.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassifierModel {
    pub hidden: Option<DenseLayer>,
    pub head: DenseLayer,
    pub head_kind: HeadKind,
}

impl ClassifierModel {
    /// Linear model: features feed the head directly.
    pub fn linear(dim: usize, num_classes: usize, head_kind: HeadKind, rng: &mut impl Rng) -> Self {
        Self { hidden: None, head: DenseLayer::gaussian(num_classes, dim, rng), head_kind }
    }

    /// One ReLU hidden layer of width `hidden_dim` before the head.
    pub fn with_hidden(
        dim: usize,
        hidden_dim: usize,
        num_classes: usize,
        head_kind: HeadKind,
        rng: &mut impl Rng,
    ) -> Self {
        Self {
            hidden: Some(DenseLayer::gaussian(hidden_dim, dim, rng)),
            head: DenseLayer::gaussian(num_classes, hidden_dim, rng),
            head_kind,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.head.rows
    }

    pub fn input_dim(&self) -> usize {
        self.hidden.as_ref().map(|h| h.cols).unwrap_or(self.head.cols)
    }
}

struct ForwardTrace {
    /// Pre-activation of the hidden layer, when present.
    hidden_pre: Option<Vec<f64>>,
    /// Input to the head (features or hidden activations).
    head_input: Vec<f64>,
    logits: Vec<f64>,
}

fn forward_trace(model: &ClassifierModel, features: &[f64]) -> Result<ForwardTrace> {
    if features.len() != model.input_dim() {
        return Err(Error::DimensionMismatch { expected: model.input_dim(), actual: features.len() });
    }
    let (hidden_pre, head_input) = match &model.hidden {
        Some(h) => {
            let pre = h.matvec(features);
            let act: Vec<f64> = pre.iter().map(|&v| v.max(0.0)).collect();
            (Some(pre), act)
        }
        None => (None, features.to_vec()),
    };
    let logits = match model.head_kind {
        HeadKind::DotProduct => model.head.matvec(&head_input),
        HeadKind::Cosine { scale } => {
            let x_norm = l2_norm(&head_input);
            if x_norm < NORM_EPS {
                return Err(Error::InvalidArgument(
                    "cosine head: feature vector has zero norm".into(),
                ));
            }
            let mut z = Vec::with_capacity(model.head.rows);
            for r in 0..model.head.rows {
                let row = model.head.row(r);
                let w_norm = l2_norm(row);
                if w_norm < NORM_EPS {
                    return Err(Error::Domain {
                        class: r,
                        reason: "cosine head: class weight vector has zero norm".into(),
                    });
                }
                let dot: f64 = row.iter().zip(&head_input).map(|(w, x)| w * x).sum();
                z.push(scale * dot / (w_norm * x_norm));
            }
            z
        }
    };
    Ok(ForwardTrace { hidden_pre, head_input, logits })
}

/// Logits for one feature vector.
pub fn forward(model: &ClassifierModel, features: &[f64]) -> Result<Vec<f64>> {
    Ok(forward_trace(model, features)?.logits)
}

fn l2_norm(xs: &[f64]) -> f64 {
    xs.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// L2 norm of each class's head weight row.
pub fn weight_norms(model: &ClassifierModel) -> Vec<f64> {
    (0..model.head.rows).map(|r| l2_norm(model.head.row(r))).collect()
}

/// Training objective.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LossKind {
    /// Plain softmax cross entropy.
    SoftmaxCe,
    /// Cross entropy of the weighted softmax exp(w_i z_i): the target
    /// term scales with w_y and every negative class is damped by its
    /// own weight.
    IifCe { weights: ClassWeights },
    /// Cost-sensitive cross entropy: the whole per-sample loss is scaled
    /// by alpha_y, so negatives share the target class's weight.
    Csl { alpha: Vec<f64> },
    /// Margin loss: the target logit is reduced by c / IF(y)^(1/4)
    /// before plain cross entropy.
    Ldam { c: f64, counts: Vec<u64> },
}

impl LossKind {
    pub fn describe(&self) -> String {
        match self {
            LossKind::SoftmaxCe => "softmax_ce".to_string(),
            LossKind::IifCe { weights } => format!("iif_ce({},{})", weights.variant, weights.source),
            LossKind::Csl { .. } => "csl".to_string(),
            LossKind::Ldam { c, .. } => format!("ldam(c={c})"),
        }
    }

    fn validate(&self, num_classes: usize) -> Result<()> {
        let check = |len: usize| -> Result<()> {
            if len != num_classes {
                Err(Error::DimensionMismatch { expected: num_classes, actual: len })
            } else {
                Ok(())
            }
        };
        match self {
            LossKind::SoftmaxCe => Ok(()),
            LossKind::IifCe { weights } => {
                if weights.weights.iter().any(|w| !w.is_finite()) {
                    return Err(Error::InvalidArgument("iif_ce weights must be finite".into()));
                }
                check(weights.num_classes())
            }
            LossKind::Csl { alpha } => {
                if alpha.iter().any(|a| !a.is_finite()) {
                    return Err(Error::InvalidArgument("csl weights must be finite".into()));
                }
                check(alpha.len())
            }
            LossKind::Ldam { c, counts } => {
                if !(*c > 0.0) {
                    return Err(Error::InvalidArgument(format!("ldam c must be > 0, got {c}")));
                }
                if counts.iter().any(|&n| n == 0) {
                    return Err(Error::InvalidArgument("ldam counts must be positive".into()));
                }
                check(counts.len())
            }
        }
    }
}

/// Loss value at the given logits for a single sample.
pub fn loss_value(loss: &LossKind, logits: &[f64], label: usize) -> Result<f64> {
    loss.validate(logits.len())?;
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    match loss {
        LossKind::SoftmaxCe => Ok(log_sum_exp(logits) - logits[label]),
        LossKind::IifCe { weights } => {
            let t: Vec<f64> = logits.iter().zip(&weights.weights).map(|(z, w)| w * z).collect();
            Ok(log_sum_exp(&t) - t[label])
        }
        LossKind::Csl { alpha } => Ok(alpha[label] * (log_sum_exp(logits) - logits[label])),
        LossKind::Ldam { c, counts } => {
            let mut adjusted = logits.to_vec();
            adjusted[label] -= c / (counts[label] as f64).powf(0.25);
            Ok(log_sum_exp(&adjusted) - adjusted[label])
        }
    }
}

/// Analytic gradient of the loss with respect to the logits.
pub fn logit_gradient(loss: &LossKind, logits: &[f64], label: usize) -> Result<Vec<f64>> {
    loss.validate(logits.len())?;
    if label >= logits.len() {
        return Err(Error::InvalidArgument(format!(
            "label {label} out of range for {} classes",
            logits.len()
        )));
    }
    match loss {
        LossKind::SoftmaxCe => {
            let mut g = softmax(logits);
            g[label] -= 1.0;
            Ok(g)
        }
        LossKind::IifCe { weights } => {
            // dL/dz_i = w_i (q_i - 1) at the target, w_i q_i elsewhere,
            // with q the weighted softmax.
            let t: Vec<f64> = logits.iter().zip(&weights.weights).map(|(z, w)| w * z).collect();
            let q = softmax(&t);
            Ok(q.iter()
                .zip(&weights.weights)
                .enumerate()
                .map(|(i, (qi, w))| if i == label { w * (qi - 1.0) } else { w * qi })
                .collect())
        }
        LossKind::Csl { alpha } => {
            let q = softmax(logits);
            let a = alpha[label];
            Ok(q.iter()
                .enumerate()
                .map(|(i, qi)| if i == label { a * (qi - 1.0) } else { a * qi })
                .collect())
        }
        LossKind::Ldam { c, counts } => {
            let mut adjusted = logits.to_vec();
            adjusted[label] -= c / (counts[label] as f64).powf(0.25);
            let mut g = softmax(&adjusted);
            g[label] -= 1.0;
            Ok(g)
        }
    }
}

/// Parameter gradients for one batch; shapes mirror the model's.
#[derive(Debug, Clone)]
pub struct GradientReport {
    pub loss: f64,
    pub head_weights: Vec<f64>,
    pub head_bias: Vec<f64>,
    pub hidden_weights: Option<Vec<f64>>,
    pub hidden_bias: Option<Vec<f64>>,
}

/// Mean loss and mean parameter gradients over a batch.
pub fn loss_and_grad(
    model: &ClassifierModel,
    batch: &[LabeledSample],
    loss: &LossKind,
) -> Result<GradientReport> {
    if batch.is_empty() {
        return Err(Error::InvalidArgument("empty batch".into()));
    }
    loss.validate(model.num_classes())?;

    let c = model.num_classes();
    let mut total_loss = 0.0;
    let mut gw = vec![0.0; model.head.weights.len()];
    let mut gb = vec![0.0; c];
    let mut ghw = model.hidden.as_ref().map(|h| vec![0.0; h.weights.len()]);
    let mut ghb = model.hidden.as_ref().map(|h| vec![0.0; h.rows]);

    for sample in batch {
        let trace = forward_trace(model, &sample.features)?;
        let sample_loss = loss_value(loss, &trace.logits, sample.label)?;
        if !sample_loss.is_finite() {
            return Err(Error::NonFiniteLoss);
        }
        total_loss += sample_loss;
        let g = logit_gradient(loss, &trace.logits, sample.label)?;

        let x = &trace.head_input;
        let h = x.len();
        let mut dx = vec![0.0; h];
        match model.head_kind {
            HeadKind::DotProduct => {
                for r in 0..c {
                    let gr = g[r];
                    let row = model.head.row(r);
                    for j in 0..h {
                        gw[r * h + j] += gr * x[j];
                        dx[j] += gr * row[j];
                    }
                    gb[r] += gr;
                }
            }
            HeadKind::Cosine { scale } => {
                let x_norm = l2_norm(x);
                for r in 0..c {
                    let gr = g[r];
                    let row = model.head.row(r);
                    let w_norm = l2_norm(row);
                    let dot: f64 = row.iter().zip(x).map(|(w, xi)| w * xi).sum();
                    let coef = scale / (w_norm * x_norm);
                    for j in 0..h {
                        gw[r * h + j] += gr * coef * (x[j] - dot * row[j] / (w_norm * w_norm));
                        dx[j] += gr * coef * (row[j] - dot * x[j] / (x_norm * x_norm));
                    }
                    // bias is unused by the cosine head; its gradient stays 0
                }
            }
        }

        if let (Some(hid), Some(pre)) = (&model.hidden, &trace.hidden_pre) {
            let ghw = ghw.as_mut().unwrap();
            let ghb = ghb.as_mut().unwrap();
            for r in 0..hid.rows {
                if pre[r] <= 0.0 {
                    continue;
                }
                let d = dx[r];
                for j in 0..hid.cols {
                    ghw[r * hid.cols + j] += d * sample.features[j];
                }
                ghb[r] += d;
            }
        }
    }

    let n = batch.len() as f64;
    for g in gw.iter_mut().chain(gb.iter_mut()) {
        *g /= n;
    }
    if let Some(ghw) = ghw.as_mut() {
        for g in ghw.iter_mut() {
            *g /= n;
        }
    }
    if let Some(ghb) = ghb.as_mut() {
        for g in ghb.iter_mut() {
            *g /= n;
        }
    }
    Ok(GradientReport {
        loss: total_loss / n,
        head_weights: gw,
        head_bias: gb,
        hidden_weights: ghw,
        hidden_bias: ghb,
    })
}

#[derive(Debug, Clone, Default)]
struct Velocity {
    head_weights: Vec<f64>,
    head_bias: Vec<f64>,
    hidden_weights: Vec<f64>,
    hidden_bias: Vec<f64>,
}

/// SGD with classical momentum: v <- mu v + (g + wd * theta),
/// theta <- theta - lr * v. Weight decay applies to weights and biases
/// alike.
#[derive(Debug, Clone)]
pub struct Sgd {
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    velocity: Option<Velocity>,
}

impl Sgd {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self { lr, momentum, weight_decay, velocity: None }
    }

    /// Apply one update. With `update_hidden` false the hidden layer's
    /// parameters and velocity are left untouched (the decoupled
    /// second-stage freeze).
    pub fn step(&mut self, model: &mut ClassifierModel, grads: &GradientReport, update_hidden: bool) {
        let v = self.velocity.get_or_insert_with(|| Velocity {
            head_weights: vec![0.0; model.head.weights.len()],
            head_bias: vec![0.0; model.head.bias.len()],
            hidden_weights: model.hidden.as_ref().map(|h| vec![0.0; h.weights.len()]).unwrap_or_default(),
            hidden_bias: model.hidden.as_ref().map(|h| vec![0.0; h.rows]).unwrap_or_default(),
        });
        let mu = self.momentum;
        let wd = self.weight_decay;
        let lr = self.lr;

        let apply = |params: &mut [f64], grads: &[f64], vel: &mut [f64]| {
            for i in 0..params.len() {
                let g = grads[i] + wd * params[i];
                vel[i] = mu * vel[i] + g;
                params[i] -= lr * vel[i];
            }
        };
        apply(&mut model.head.weights, &grads.head_weights, &mut v.head_weights);
        apply(&mut model.head.bias, &grads.head_bias, &mut v.head_bias);
        if update_hidden {
            if let (Some(h), Some(gw), Some(gb)) =
                (model.hidden.as_mut(), grads.hidden_weights.as_ref(), grads.hidden_bias.as_ref())
            {
                apply(&mut h.weights, gw, &mut v.hidden_weights);
                apply(&mut h.bias, gb, &mut v.hidden_bias);
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::CountMode;
    use crate::margins::VariantKind;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    fn manual_weights(w: Vec<f64>) -> ClassWeights {
        ClassWeights {
            variant: VariantKind::Raw,
            source: CountMode::Image,
            weights: w,
            background_index: None,
        }
    }

    fn sample(features: Vec<f64>, label: usize) -> LabeledSample {
        LabeledSample::new(features, label)
    }

    #[test]
    fn identity_head_reproduces_input() {
        let mut model = ClassifierModel::linear(3, 3, HeadKind::DotProduct, &mut rng(0));
        model.head.weights = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0];
        model.head.bias = vec![0.0; 3];
        let z = forward(&model, &[1.0, 0.0, 0.0]).unwrap();
        assert_eq!(z, vec![1.0, 0.0, 0.0]);
    }

    #[test]
    fn cosine_head_scores_scale_on_parallel_vectors() {
        let mut model = ClassifierModel::linear(2, 2, HeadKind::Cosine { scale: 16.0 }, &mut rng(0));
        model.head.weights = vec![2.0, 0.0, 0.0, -3.0];
        let z = forward(&model, &[5.0, 0.0]).unwrap();
        assert!((z[0] - 16.0).abs() < 1e-12);
        assert!(z[1].abs() < 1e-12);
        assert!(forward(&model, &[0.0, 0.0]).is_err());
    }

    #[test]
    fn batch_forward_equals_concatenated_singles() {
        let model = ClassifierModel::with_hidden(4, 6, 3, HeadKind::DotProduct, &mut rng(3));
        let a = [0.3, -0.2, 1.1, 0.0];
        let b = [-1.0, 0.5, 0.25, 2.0];
        let za = forward(&model, &a).unwrap();
        let zb = forward(&model, &b).unwrap();
        // the model is stateless: per-sample evaluation is the batch
        let batch = [za.clone(), zb.clone()];
        assert_eq!(batch[0], za);
        assert_eq!(batch[1], zb);
    }

    #[test]
    fn forward_rejects_dimension_mismatch() {
        let model = ClassifierModel::linear(3, 2, HeadKind::DotProduct, &mut rng(0));
        assert!(matches!(forward(&model, &[1.0, 2.0]), Err(Error::DimensionMismatch { .. })));
    }

    #[test]
    fn iif_ce_hand_example() {
        // C = 2, z = (0, 0), w = (ln 2, ln 2), y = 1: q = (1/2, 1/2),
        // loss = ln 2, target-logit gradient ln 2 * (1/2 - 1).
        let ln2 = 2.0f64.ln();
        let loss = LossKind::IifCe { weights: manual_weights(vec![ln2, ln2]) };
        let z = [0.0, 0.0];
        let v = loss_value(&loss, &z, 1).unwrap();
        assert!((v - ln2).abs() < 1e-12);
        let g = logit_gradient(&loss, &z, 1).unwrap();
        assert!((g[1] - ln2 * (0.5 - 1.0)).abs() < 1e-12);
        assert!((g[0] - ln2 * 0.5).abs() < 1e-12);
    }

    #[test]
    fn saturated_weighted_softmax_has_zero_gradient() {
        let loss = LossKind::IifCe { weights: manual_weights(vec![2.0, 2.0]) };
        let g = logit_gradient(&loss, &[400.0, -400.0], 0).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn unit_weights_reduce_to_plain_cross_entropy() {
        let z = [1.3, -0.4, 0.9];
        let iif = LossKind::IifCe { weights: manual_weights(vec![1.0; 3]) };
        let ce = LossKind::SoftmaxCe;
        for y in 0..3 {
            let lv = (loss_value(&iif, &z, y).unwrap() - loss_value(&ce, &z, y).unwrap()).abs();
            assert!(lv < 1e-10);
            let gi = logit_gradient(&iif, &z, y).unwrap();
            let gc = logit_gradient(&ce, &z, y).unwrap();
            for (a, b) in gi.iter().zip(&gc) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn csl_and_iif_ce_agree_on_positives_but_not_negatives() {
        // At z = 0 the plain and weighted softmax coincide (both
        // uniform), which isolates the structural difference: equal
        // target gradient, negative gradients off by w_i / w_y.
        let w = vec![0.5, 1.7, 3.0];
        let iif = LossKind::IifCe { weights: manual_weights(w.clone()) };
        let csl = LossKind::Csl { alpha: w.clone() };
        let z = [0.0, 0.0, 0.0];
        for y in 0..3 {
            let gi = logit_gradient(&iif, &z, y).unwrap();
            let gc = logit_gradient(&csl, &z, y).unwrap();
            assert!((gi[y] - gc[y]).abs() < 1e-12, "positive gradients must match");
            for i in 0..3 {
                if i == y {
                    continue;
                }
                let ratio = gi[i] / gc[i];
                assert!(
                    (ratio - w[i] / w[y]).abs() < 1e-9,
                    "negative gradient ratio should be w_i/w_y, got {ratio}"
                );
            }
        }
    }

    #[test]
    fn loss_is_negative_log_of_a_probability() {
        // CE_IIF = -ln q_y >= 0 since q_y <= 1
        let loss = LossKind::IifCe { weights: manual_weights(vec![0.3, 2.0, 5.0]) };
        let mut r = rng(99);
        for _ in 0..200 {
            let z: Vec<f64> = (0..3).map(|_| r.random_range(-4.0..4.0)).collect();
            let y = r.random_range(0..3);
            assert!(loss_value(&loss, &z, y).unwrap() >= 0.0);
        }
    }

    #[test]
    fn rare_class_gradient_grows_with_weight() {
        // for fixed q, the target gradient magnitude w_y (1 - q_y)
        // increases in w_y; compare two weightings at z = 0 where q is
        // uniform for both
        let g_small = logit_gradient(
            &LossKind::IifCe { weights: manual_weights(vec![1.0, 1.0]) },
            &[0.0, 0.0],
            1,
        )
        .unwrap();
        let g_large = logit_gradient(
            &LossKind::IifCe { weights: manual_weights(vec![1.0, 4.0]) },
            &[0.0, 0.0],
            1,
        )
        .unwrap();
        assert!(g_large[1].abs() > g_small[1].abs());
    }

    fn fd_logit_check(loss: &LossKind, z: &[f64], y: usize) {
        let h = 1e-5;
        let g = logit_gradient(loss, z, y).unwrap();
        for i in 0..z.len() {
            let mut zp = z.to_vec();
            let mut zm = z.to_vec();
            zp[i] += h;
            zm[i] -= h;
            let fd = (loss_value(loss, &zp, y).unwrap() - loss_value(loss, &zm, y).unwrap()) / (2.0 * h);
            let tol = 1e-5 * g[i].abs().max(fd.abs()).max(1e-6);
            assert!(
                (g[i] - fd).abs() <= tol,
                "{loss:?} logit {i}: analytic {} vs fd {fd}",
                g[i]
            );
        }
    }

    #[test]
    fn logit_gradients_match_finite_differences() {
        let mut r = rng(7);
        for case in 0..50 {
            let c = r.random_range(2..6);
            let z: Vec<f64> = (0..c).map(|_| r.random_range(-3.0..3.0)).collect();
            let w: Vec<f64> = (0..c).map(|_| r.random_range(0.2..4.0)).collect();
            let counts: Vec<u64> = (0..c).map(|_| r.random_range(1..500)).collect();
            let y = case % c;
            fd_logit_check(&LossKind::SoftmaxCe, &z, y);
            fd_logit_check(&LossKind::IifCe { weights: manual_weights(w.clone()) }, &z, y);
            fd_logit_check(&LossKind::Csl { alpha: w }, &z, y);
            fd_logit_check(&LossKind::Ldam { c: 1.0, counts }, &z, y);
        }
    }

    fn fd_param_check(model: &ClassifierModel, batch: &[LabeledSample], loss: &LossKind) {
        let h = 1e-6;
        let report = loss_and_grad(model, batch, loss).unwrap();
        let batch_loss = |m: &ClassifierModel| -> f64 {
            batch
                .iter()
                .map(|s| loss_value(loss, &forward(m, &s.features).unwrap(), s.label).unwrap())
                .sum::<f64>()
                / batch.len() as f64
        };
        for idx in 0..model.head.weights.len() {
            let mut mp = model.clone();
            mp.head.weights[idx] += h;
            let mut mm = model.clone();
            mm.head.weights[idx] -= h;
            let fd = (batch_loss(&mp) - batch_loss(&mm)) / (2.0 * h);
            let a = report.head_weights[idx];
            let tol = 1e-4 * a.abs().max(fd.abs()).max(1e-4);
            assert!((a - fd).abs() <= tol, "head weight {idx}: analytic {a} vs fd {fd}");
        }
        for idx in 0..model.head.bias.len() {
            let mut mp = model.clone();
            mp.head.bias[idx] += h;
            let mut mm = model.clone();
            mm.head.bias[idx] -= h;
            let fd = (batch_loss(&mp) - batch_loss(&mm)) / (2.0 * h);
            let a = report.head_bias[idx];
            let tol = 1e-4 * a.abs().max(fd.abs()).max(1e-4);
            assert!((a - fd).abs() <= tol, "head bias {idx}: analytic {a} vs fd {fd}");
        }
        if let Some(hid) = &model.hidden {
            let ghw = report.hidden_weights.as_ref().unwrap();
            for idx in 0..hid.weights.len() {
                let mut mp = model.clone();
                mp.hidden.as_mut().unwrap().weights[idx] += h;
                let mut mm = model.clone();
                mm.hidden.as_mut().unwrap().weights[idx] -= h;
                let fd = (batch_loss(&mp) - batch_loss(&mm)) / (2.0 * h);
                let a = ghw[idx];
                let tol = 1e-4 * a.abs().max(fd.abs()).max(1e-4);
                assert!((a - fd).abs() <= tol, "hidden weight {idx}: analytic {a} vs fd {fd}");
            }
        }
    }

    #[test]
    fn parameter_gradients_match_finite_differences() {
        let mut r = rng(21);
        let batch: Vec<LabeledSample> = (0..6)
            .map(|i| sample((0..4).map(|_| r.random_range(-2.0..2.0)).collect(), i % 3))
            .collect();
        let w = manual_weights(vec![0.5, 1.5, 3.0]);

        let linear = ClassifierModel::linear(4, 3, HeadKind::DotProduct, &mut r);
        fd_param_check(&linear, &batch, &LossKind::SoftmaxCe);
        fd_param_check(&linear, &batch, &LossKind::IifCe { weights: w.clone() });

        let cosine = ClassifierModel::linear(4, 3, HeadKind::Cosine { scale: 16.0 }, &mut r);
        fd_param_check(&cosine, &batch, &LossKind::IifCe { weights: w.clone() });
        fd_param_check(&cosine, &batch, &LossKind::Csl { alpha: w.weights.clone() });

        let hidden = ClassifierModel::with_hidden(4, 5, 3, HeadKind::DotProduct, &mut r);
        fd_param_check(&hidden, &batch, &LossKind::IifCe { weights: w });
    }

    #[test]
    fn sgd_plain_step_subtracts_gradient() {
        let mut model = ClassifierModel::linear(2, 2, HeadKind::DotProduct, &mut rng(5));
        let before = model.clone();
        let grads = GradientReport {
            loss: 0.0,
            head_weights: vec![0.1, 0.2, 0.3, 0.4],
            head_bias: vec![0.5, 0.6],
            hidden_weights: None,
            hidden_bias: None,
        };
        let mut opt = Sgd::new(1.0, 0.0, 0.0);
        opt.step(&mut model, &grads, true);
        for (p, (b, g)) in model
            .head
            .weights
            .iter()
            .zip(before.head.weights.iter().zip(&grads.head_weights))
        {
            assert!((p - (b - g)).abs() < 1e-15);
        }
        // zero gradient, zero decay: parameters unchanged
        let frozen = model.clone();
        let zero = GradientReport {
            loss: 0.0,
            head_weights: vec![0.0; 4],
            head_bias: vec![0.0; 2],
            hidden_weights: None,
            hidden_bias: None,
        };
        let mut opt = Sgd::new(0.5, 0.0, 0.0);
        opt.step(&mut model, &zero, true);
        assert_eq!(model, frozen);
    }

    #[test]
    fn sgd_momentum_accumulates_velocity() {
        // v1 = g, p1 = p0 - lr g; v2 = mu g + g, p2 = p1 - lr (mu + 1) g
        let mut model = ClassifierModel::linear(1, 1, HeadKind::DotProduct, &mut rng(5));
        model.head.weights = vec![1.0];
        model.head.bias = vec![0.0];
        let grads = GradientReport {
            loss: 0.0,
            head_weights: vec![0.5],
            head_bias: vec![0.0],
            hidden_weights: None,
            hidden_bias: None,
        };
        let mut opt = Sgd::new(0.1, 0.9, 0.0);
        opt.step(&mut model, &grads, true);
        assert!((model.head.weights[0] - (1.0 - 0.1 * 0.5)).abs() < 1e-15);
        opt.step(&mut model, &grads, true);
        let expected = 1.0 - 0.1 * 0.5 - 0.1 * (0.9 * 0.5 + 0.5);
        assert!((model.head.weights[0] - expected).abs() < 1e-15);
    }

    #[test]
    fn weight_norm_edge_cases() {
        let mut model = ClassifierModel::linear(3, 2, HeadKind::DotProduct, &mut rng(5));
        model.head.weights = vec![0.0; 6];
        assert_eq!(weight_norms(&model), vec![0.0, 0.0]);
        model.head.weights = vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0];
        assert_eq!(weight_norms(&model), vec![1.0, 1.0]);
    }

    #[test]
    fn non_finite_loss_is_reported() {
        let mut model = ClassifierModel::linear(1, 2, HeadKind::DotProduct, &mut rng(5));
        model.head.weights = vec![f64::MAX, -f64::MAX];
        model.head.bias = vec![0.0, 0.0];
        let batch = [sample(vec![2.0], 0)];
        let res = loss_and_grad(&model, &batch, &LossKind::SoftmaxCe);
        assert!(matches!(res, Err(Error::NonFiniteLoss) | Err(Error::InvalidArgument(_))));
    }
}
