//! Training strategies: end-to-end, decoupled two-stage, and post-hoc
//! injection, with pluggable epoch samplers.
//!
//! A model trained with the weighted cross entropy keeps its weighted
//! softmax at inference (the adjustment is part of the classifier), so
//! `run_plan` records the matching inference scheme in its outcome; the
//! post-hoc strategy records whatever scheme the plan configured.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dataset::{count_frequencies_with_classes, ClassFrequencyTable, LabeledSample};
use crate::error::{Error, Result};
use crate::eval;
use crate::margins::MarginScheme;
use crate::model::{loss_and_grad, ClassifierModel, HeadKind, LossKind, Sgd};

/// How each epoch's batches draw from the training set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SamplerKind {
    /// Uniform shuffle of the whole epoch.
    Random,
    /// Each draw picks a class uniformly, then a sample of that class,
    /// with replacement.
    ClassBalancedOversample,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LrSchedule {
    Constant,
    /// Multiply the rate by `gamma` at each milestone epoch.
    Step { milestones: Vec<usize>, gamma: f64 },
    /// Cosine decay from 1 down to `min_factor` over the stage.
    Cosine { min_factor: f64 },
}

impl LrSchedule {
    /// Multiplier applied to the base rate at `epoch` of a
    /// `total`-epoch stage.
    pub fn factor(&self, epoch: usize, total: usize) -> f64 {
        match self {
            LrSchedule::Constant => 1.0,
            LrSchedule::Step { milestones, gamma } => {
                let passed = milestones.iter().filter(|&&m| epoch >= m).count();
                gamma.powi(passed as i32)
            }
            LrSchedule::Cosine { min_factor } => {
                if total <= 1 {
                    return 1.0;
                }
                let t = epoch as f64 / (total - 1) as f64;
                min_factor + 0.5 * (1.0 - min_factor) * (1.0 + (std::f64::consts::PI * t).cos())
            }
        }
    }
}

/// The three ways of applying an adjusted loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Strategy {
    /// Train every parameter with the given loss for `plan.epochs`.
    EndToEnd { loss: LossKind },
    /// Stage 1 trains everything (conventionally with plain cross
    /// entropy), stage 2 freezes the feature layers and retrains only
    /// the head with the adjusted loss at `stage2_lr_factor` times the
    /// base rate.
    Decoupled {
        stage1_loss: LossKind,
        stage2_loss: LossKind,
        stage2_epochs: usize,
        stage2_lr_factor: f64,
    },
    /// Train conventionally; the adjustment is injected only at
    /// inference.
    PostHoc { train_loss: LossKind, inference: MarginScheme },
}

/// Full recipe for a training run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainPlan {
    pub strategy: Strategy,
    pub sampler: SamplerKind,
    /// Epochs of the main stage (stage 1 for the decoupled strategy).
    pub epochs: usize,
    pub batch_size: usize,
    pub learning_rate: f64,
    pub schedule: LrSchedule,
    pub weight_decay: f64,
    pub momentum: f64,
    /// Width of the optional ReLU hidden layer; `None` for a linear model.
    pub hidden_dim: Option<usize>,
    pub head: HeadKind,
    pub seed: u64,
}

impl TrainPlan {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::InvalidArgument("epochs must be >= 1".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if self.batch_size == 0 {
            return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::InvalidArgument(format!(
                "momentum must be in [0, 1), got {}",
                self.momentum
            )));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(Error::InvalidArgument(format!(
                "weight_decay must be >= 0, got {}",
                self.weight_decay
            )));
        }
        if let Strategy::Decoupled { stage2_lr_factor, .. } = &self.strategy {
            if !(*stage2_lr_factor > 0.0) {
                return Err(Error::InvalidArgument(
                    "stage2_lr_factor must be > 0".into(),
                ));
            }
        }
        Ok(())
    }

    pub fn save_json<P: AsRef<std::path::Path>>(&self, path: P) -> Result<()> {
        let file = std::io::BufWriter::new(std::fs::File::create(path)?);
        serde_json::to_writer_pretty(file, self)?;
        Ok(())
    }

    pub fn load_json<P: AsRef<std::path::Path>>(path: P) -> Result<Self> {
        let file = std::io::BufReader::new(std::fs::File::open(path)?);
        let plan: Self = serde_json::from_reader(file)?;
        plan.validate()?;
        Ok(plan)
    }
}

/// Per-epoch training curve. The balanced accuracy is measured on the
/// held-out set under the predictive rule of the stage being trained
/// (raw logits for plain losses, weighted softmax for the weighted one).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub epoch_loss: Vec<f64>,
    pub epoch_balanced_accuracy: Vec<f64>,
    /// Epoch indices at which a later stage began.
    pub stage_boundaries: Vec<usize>,
}

/// A finished run: the model, its training curve, and the adjustment (if
/// any) that belongs with the model at inference time.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainOutcome {
    pub model: ClassifierModel,
    pub log: TrainLog,
    pub inference_scheme: Option<MarginScheme>,
}

/// Serializable bundle written by the CLI after training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Checkpoint {
    pub model: ClassifierModel,
    pub loss: LossKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub inference_scheme: Option<MarginScheme>,
}

impl Checkpoint {
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

fn stream(seed: u64, tag: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15))
}

/// Index batches for one epoch under the chosen sampler.
pub fn sample_epoch(
    sampler: SamplerKind,
    train: &[LabeledSample],
    table: &ClassFrequencyTable,
    batch_size: usize,
    rng: &mut impl Rng,
) -> Result<Vec<Vec<usize>>> {
    if batch_size == 0 {
        return Err(Error::InvalidArgument("batch_size must be >= 1".into()));
    }
    let c = table.num_classes();
    if let Some(bad) = train.iter().find(|s| s.label >= c) {
        return Err(Error::InvalidArgument(format!(
            "sample label {} not covered by the {c}-class table",
            bad.label
        )));
    }
    match sampler {
        SamplerKind::Random => {
            let mut idx: Vec<usize> = (0..train.len()).collect();
            // Fisher-Yates
            for i in (1..idx.len()).rev() {
                let j = rng.random_range(0..=i);
                idx.swap(i, j);
            }
            Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
        }
        SamplerKind::ClassBalancedOversample => {
            let mut per_class: Vec<Vec<usize>> = vec![Vec::new(); c];
            for (i, s) in train.iter().enumerate() {
                per_class[s.label].push(i);
            }
            let present: Vec<usize> =
                (0..c).filter(|&y| !per_class[y].is_empty()).collect();
            if present.is_empty() {
                return Err(Error::InvalidArgument("no samples to draw from".into()));
            }
            let total = train.len();
            let mut idx = Vec::with_capacity(total);
            for _ in 0..total {
                let y = present[rng.random_range(0..present.len())];
                let members = &per_class[y];
                idx.push(members[rng.random_range(0..members.len())]);
            }
            Ok(idx.chunks(batch_size).map(|c| c.to_vec()).collect())
        }
    }
}

/// Inference rule that belongs with a model trained under `loss`: the
/// weighted cross entropy's softmax keeps its weights at test time,
/// every other loss predicts from raw logits.
pub fn inference_scheme_for(loss: &LossKind) -> Option<MarginScheme> {
    match loss {
        LossKind::IifCe { weights } => Some(MarginScheme::MultiplicativeIif { weights: weights.clone() }),
        _ => None,
    }
}

struct StageConfig<'a> {
    loss: &'a LossKind,
    epochs: usize,
    base_lr: f64,
    update_hidden: bool,
    epoch_offset: usize,
}

fn run_stage(
    model: &mut ClassifierModel,
    train: &[LabeledSample],
    test: &[LabeledSample],
    table: &ClassFrequencyTable,
    plan: &TrainPlan,
    cfg: StageConfig<'_>,
    sampler_rng: &mut ChaCha8Rng,
    log: &mut TrainLog,
) -> Result<()> {
    let mut opt = Sgd::new(cfg.base_lr, plan.momentum, plan.weight_decay);
    let scheme = inference_scheme_for(cfg.loss);
    for epoch in 0..cfg.epochs {
        opt.lr = cfg.base_lr * plan.schedule.factor(epoch, cfg.epochs);
        let batches = sample_epoch(plan.sampler, train, table, plan.batch_size, sampler_rng)?;
        let mut loss_sum = 0.0;
        let mut n = 0usize;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let samples: Vec<LabeledSample> = batch.iter().map(|&i| train[i].clone()).collect();
            let grads = loss_and_grad(model, &samples, cfg.loss).map_err(|e| match e {
                Error::NonFiniteLoss => Error::Diverged {
                    epoch: cfg.epoch_offset + epoch,
                    batch: batch_idx,
                },
                other => other,
            })?;
            if !grads.loss.is_finite() {
                return Err(Error::Diverged { epoch: cfg.epoch_offset + epoch, batch: batch_idx });
            }
            loss_sum += grads.loss * samples.len() as f64;
            n += samples.len();
            opt.step(model, &grads, cfg.update_hidden);
        }
        log.epoch_loss.push(loss_sum / n as f64);
        let acc = if test.is_empty() {
            0.0
        } else {
            eval::balanced_accuracy(model, test, scheme.as_ref())?
        };
        log.epoch_balanced_accuracy.push(acc);
    }
    Ok(())
}

/// Execute a full plan. Deterministic for a fixed plan and seed.
pub fn run_plan(
    plan: &TrainPlan,
    train: &[LabeledSample],
    test: &[LabeledSample],
    table: &ClassFrequencyTable,
) -> Result<TrainOutcome> {
    plan.validate()?;
    if train.is_empty() {
        return Err(Error::InvalidArgument("training set is empty".into()));
    }
    let dim = train[0].features.len();
    if let Some(bad) = train.iter().chain(test.iter()).find(|s| s.features.len() != dim) {
        return Err(Error::DimensionMismatch { expected: dim, actual: bad.features.len() });
    }
    let c = table.num_classes();
    let recount = count_frequencies_with_classes(train, c)?;
    if recount.image_freq != table.image_freq {
        return Err(Error::InvalidArgument(
            "frequency table is inconsistent with the training data".into(),
        ));
    }

    let mut init_rng = stream(plan.seed, 1);
    let mut model = match plan.hidden_dim {
        Some(h) => ClassifierModel::with_hidden(dim, h, c, plan.head, &mut init_rng),
        None => ClassifierModel::linear(dim, c, plan.head, &mut init_rng),
    };
    let mut sampler_rng = stream(plan.seed, 2);
    let mut log = TrainLog {
        epoch_loss: Vec::new(),
        epoch_balanced_accuracy: Vec::new(),
        stage_boundaries: Vec::new(),
    };

    let inference_scheme = match &plan.strategy {
        Strategy::EndToEnd { loss } => {
            run_stage(
                &mut model,
                train,
                test,
                table,
                plan,
                StageConfig {
                    loss,
                    epochs: plan.epochs,
                    base_lr: plan.learning_rate,
                    update_hidden: true,
                    epoch_offset: 0,
                },
                &mut sampler_rng,
                &mut log,
            )?;
            inference_scheme_for(loss)
        }
        Strategy::PostHoc { train_loss, inference } => {
            run_stage(
                &mut model,
                train,
                test,
                table,
                plan,
                StageConfig {
                    loss: train_loss,
                    epochs: plan.epochs,
                    base_lr: plan.learning_rate,
                    update_hidden: true,
                    epoch_offset: 0,
                },
                &mut sampler_rng,
                &mut log,
            )?;
            Some(inference.clone())
        }
        Strategy::Decoupled { stage1_loss, stage2_loss, stage2_epochs, stage2_lr_factor } => {
            run_stage(
                &mut model,
                train,
                test,
                table,
                plan,
                StageConfig {
                    loss: stage1_loss,
                    epochs: plan.epochs,
                    base_lr: plan.learning_rate,
                    update_hidden: true,
                    epoch_offset: 0,
                },
                &mut sampler_rng,
                &mut log,
            )?;
            if *stage2_epochs > 0 {
                log.stage_boundaries.push(plan.epochs);
                run_stage(
                    &mut model,
                    train,
                    test,
                    table,
                    plan,
                    StageConfig {
                        loss: stage2_loss,
                        epochs: *stage2_epochs,
                        base_lr: plan.learning_rate * stage2_lr_factor,
                        update_hidden: false,
                        epoch_offset: plan.epochs,
                    },
                    &mut sampler_rng,
                    &mut log,
                )?;
                inference_scheme_for(stage2_loss)
            } else {
                inference_scheme_for(stage1_loss)
            }
        }
    };

    Ok(TrainOutcome { model, log, inference_scheme })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dataset::{count_frequencies, generate_synthetic, CountMode, DatasetSpec, Profile};
    use crate::margins::{compute_weights, VariantKind};

    fn tiny_data() -> (Vec<LabeledSample>, Vec<LabeledSample>, ClassFrequencyTable) {
        let spec = DatasetSpec {
            num_classes: 3,
            dim: 3,
            imbalance_factor: 4.0,
            profile: Profile::Explicit { counts: vec![40, 20, 10] },
            class_separation: 3.0,
            test_per_class: 20,
            seed: 42,
        };
        let ds = generate_synthetic(&spec).unwrap();
        (ds.train, ds.test, ds.table)
    }

    fn base_plan(strategy: Strategy, seed: u64) -> TrainPlan {
        TrainPlan {
            strategy,
            sampler: SamplerKind::Random,
            epochs: 30,
            batch_size: 16,
            learning_rate: 0.1,
            schedule: LrSchedule::Constant,
            weight_decay: 1e-3,
            momentum: 0.9,
            hidden_dim: None,
            head: HeadKind::DotProduct,
            seed,
        }
    }

    #[test]
    fn posthoc_parameters_match_end_to_end_softmax() {
        let (train, test, table) = tiny_data();
        let w = compute_weights(&table, VariantKind::Smooth, CountMode::Image).unwrap();
        let posthoc = base_plan(
            Strategy::PostHoc {
                train_loss: LossKind::SoftmaxCe,
                inference: MarginScheme::multiplicative(w),
            },
            9,
        );
        let e2e = base_plan(Strategy::EndToEnd { loss: LossKind::SoftmaxCe }, 9);
        let a = run_plan(&posthoc, &train, &test, &table).unwrap();
        let b = run_plan(&e2e, &train, &test, &table).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.inference_scheme.is_some());
        assert!(b.inference_scheme.is_none());
    }

    #[test]
    fn decoupled_with_zero_stage2_collapses_to_stage1() {
        let (train, test, table) = tiny_data();
        let w = compute_weights(&table, VariantKind::Smooth, CountMode::Image).unwrap();
        let dec = base_plan(
            Strategy::Decoupled {
                stage1_loss: LossKind::SoftmaxCe,
                stage2_loss: LossKind::IifCe { weights: w },
                stage2_epochs: 0,
                stage2_lr_factor: 1e-3,
            },
            4,
        );
        let e2e = base_plan(Strategy::EndToEnd { loss: LossKind::SoftmaxCe }, 4);
        let a = run_plan(&dec, &train, &test, &table).unwrap();
        let b = run_plan(&e2e, &train, &test, &table).unwrap();
        assert_eq!(a.model, b.model);
        assert!(a.log.stage_boundaries.is_empty());
    }

    #[test]
    fn decoupled_stage2_freezes_feature_layers() {
        let (train, test, table) = tiny_data();
        let w = compute_weights(&table, VariantKind::Smooth, CountMode::Image).unwrap();
        let mut stage1_only = base_plan(Strategy::EndToEnd { loss: LossKind::SoftmaxCe }, 11);
        stage1_only.hidden_dim = Some(8);
        let mut dec = base_plan(
            Strategy::Decoupled {
                stage1_loss: LossKind::SoftmaxCe,
                stage2_loss: LossKind::IifCe { weights: w },
                stage2_epochs: 10,
                stage2_lr_factor: 1e-2,
            },
            11,
        );
        dec.hidden_dim = Some(8);
        let s1 = run_plan(&stage1_only, &train, &test, &table).unwrap();
        let d = run_plan(&dec, &train, &test, &table).unwrap();
        assert_eq!(s1.model.hidden, d.model.hidden, "hidden layer must be bit-identical");
        assert_ne!(s1.model.head, d.model.head, "head should have been retrained");
        assert_eq!(d.log.stage_boundaries, vec![30]);
        assert_eq!(d.log.epoch_loss.len(), 40);
    }

    #[test]
    fn runs_are_reproducible_under_seed() {
        let (train, test, table) = tiny_data();
        let plan = base_plan(Strategy::EndToEnd { loss: LossKind::SoftmaxCe }, 3);
        let a = run_plan(&plan, &train, &test, &table).unwrap();
        let b = run_plan(&plan, &train, &test, &table).unwrap();
        assert_eq!(a.model, b.model);
        assert_eq!(a.log, b.log);
        let mut other = plan.clone();
        other.seed = 5;
        let c = run_plan(&other, &train, &test, &table).unwrap();
        assert_ne!(a.model, c.model);
    }

    #[test]
    fn training_loss_trends_down() {
        let (train, test, table) = tiny_data();
        let plan = base_plan(Strategy::EndToEnd { loss: LossKind::SoftmaxCe }, 8);
        let out = run_plan(&plan, &train, &test, &table).unwrap();
        let k = out.log.epoch_loss.len() / 10;
        let head: Vec<f64> = out.log.epoch_loss[..k.max(1)].to_vec();
        let tail: Vec<f64> = out.log.epoch_loss[out.log.epoch_loss.len() - k.max(1)..].to_vec();
        let median = |mut v: Vec<f64>| {
            v.sort_by(|a, b| a.partial_cmp(b).unwrap());
            v[v.len() / 2]
        };
        assert!(median(tail) < median(head));
    }

    #[test]
    fn sampler_streams_are_deterministic() {
        let (train, _, table) = tiny_data();
        let mut r1 = stream(7, 2);
        let mut r2 = stream(7, 2);
        let a = sample_epoch(SamplerKind::Random, &train, &table, 8, &mut r1).unwrap();
        let b = sample_epoch(SamplerKind::Random, &train, &table, 8, &mut r2).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn oversampler_is_roughly_uniform_over_classes() {
        let (train, _, table) = tiny_data();
        let mut rng = stream(123, 2);
        let mut counts = vec![0usize; 3];
        let draws = 10_000usize;
        let mut seen = 0usize;
        while seen < draws {
            for batch in
                sample_epoch(SamplerKind::ClassBalancedOversample, &train, &table, 64, &mut rng).unwrap()
            {
                for i in batch {
                    counts[train[i].label] += 1;
                    seen += 1;
                    if seen == draws {
                        break;
                    }
                }
                if seen == draws {
                    break;
                }
            }
        }
        // binomial(10k, 1/3): sigma ~ 47, so a 3-sigma window is ~141
        let expected = draws as f64 / 3.0;
        let sigma = (draws as f64 * (1.0 / 3.0) * (2.0 / 3.0)).sqrt();
        for y in 0..3 {
            assert!(
                (counts[y] as f64 - expected).abs() < 3.0 * sigma,
                "class {y} drawn {} times, expected ~{expected}",
                counts[y]
            );
        }
    }

    #[test]
    fn samplers_coincide_in_expectation_on_balanced_data() {
        let samples: Vec<LabeledSample> =
            (0..300).map(|i| LabeledSample::new(vec![0.0], i % 3)).collect();
        let table = count_frequencies(&samples).unwrap();
        let mut rng = stream(5, 2);
        let batches =
            sample_epoch(SamplerKind::ClassBalancedOversample, &samples, &table, 50, &mut rng).unwrap();
        let mut counts = vec![0usize; 3];
        for b in batches {
            for i in b {
                counts[samples[i].label] += 1;
            }
        }
        let total: usize = counts.iter().sum();
        assert_eq!(total, 300);
        for &c in &counts {
            assert!((c as f64 - 100.0).abs() < 45.0, "counts {counts:?}");
        }
    }

    #[test]
    fn posthoc_with_unit_weights_evaluates_like_plain_softmax() {
        use crate::margins::ClassWeights;
        let (train, test, table) = tiny_data();
        let ones = ClassWeights {
            variant: VariantKind::Raw,
            source: CountMode::Image,
            weights: vec![1.0; 3],
            background_index: None,
        };
        let plan = base_plan(
            Strategy::PostHoc {
                train_loss: LossKind::SoftmaxCe,
                inference: MarginScheme::multiplicative(ones),
            },
            2,
        );
        let out = run_plan(&plan, &train, &test, &table).unwrap();
        let raw = eval::balanced_accuracy(&out.model, &test, None).unwrap();
        let adj = eval::balanced_accuracy(&out.model, &test, out.inference_scheme.as_ref()).unwrap();
        assert_eq!(raw, adj);
    }

    #[test]
    fn lr_schedules_behave() {
        let step = LrSchedule::Step { milestones: vec![10, 20], gamma: 0.1 };
        assert_eq!(step.factor(0, 30), 1.0);
        assert!((step.factor(10, 30) - 0.1).abs() < 1e-12);
        assert!((step.factor(25, 30) - 0.01).abs() < 1e-12);
        let cos = LrSchedule::Cosine { min_factor: 0.0 };
        assert!((cos.factor(0, 100) - 1.0).abs() < 1e-12);
        assert!(cos.factor(99, 100).abs() < 1e-12);
    }

    #[test]
    fn inconsistent_table_is_rejected() {
        let (train, test, _) = tiny_data();
        let wrong = ClassFrequencyTable::from_counts(vec![1, 1, 1], None).unwrap();
        let plan = base_plan(Strategy::EndToEnd { loss: LossKind::SoftmaxCe }, 0);
        assert!(run_plan(&plan, &train, &test, &wrong).is_err());
    }

    #[test]
    fn divergence_reports_the_epoch() {
        let (train, test, table) = tiny_data();
        let mut plan = base_plan(Strategy::EndToEnd { loss: LossKind::SoftmaxCe }, 0);
        plan.learning_rate = 1e200; // overflows the logits within a few steps
        plan.epochs = 8;
        match run_plan(&plan, &train, &test, &table) {
            Err(Error::Diverged { .. }) => {}
            other => panic!("expected divergence, got {other:?}"),
        }
    }
}
