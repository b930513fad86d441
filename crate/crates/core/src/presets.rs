//! Shipped default configurations: the 10-class debiasing experiment and
//! the training plans used for its baseline and adjusted runs.

use crate::dataset::{CountMode, DatasetSpec, Profile};
use crate::error::Result;
use crate::margins::{compute_weights, ClassWeights, MarginScheme, VariantKind};
use crate::model::{HeadKind, LossKind};
use crate::training::{LrSchedule, SamplerKind, Strategy, TrainPlan};

/// 10 classes, exponential head-to-tail ratio 100, 500 samples for the
/// largest class and a 200-per-class balanced test split.
pub fn debias_dataset_spec(seed: u64) -> DatasetSpec {
    DatasetSpec {
        num_classes: 10,
        dim: 10,
        imbalance_factor: 100.0,
        profile: Profile::Exponential { n_max: 500 },
        class_separation: 3.0,
        test_per_class: 200,
        seed,
    }
}

fn plan_with(strategy: Strategy, seed: u64) -> TrainPlan {
    TrainPlan {
        strategy,
        sampler: SamplerKind::Random,
        epochs: 200,
        batch_size: 64,
        learning_rate: 0.1,
        schedule: LrSchedule::Constant,
        weight_decay: 1e-3,
        momentum: 0.9,
        hidden_dim: None,
        head: HeadKind::DotProduct,
        seed,
    }
}

/// 200-epoch end-to-end plain cross entropy with a linear head.
pub fn baseline_plan(seed: u64) -> TrainPlan {
    plan_with(Strategy::EndToEnd { loss: LossKind::SoftmaxCe }, seed)
}

/// Baseline training with weighted-softmax injection at inference.
pub fn posthoc_plan(seed: u64, weights: ClassWeights) -> TrainPlan {
    plan_with(
        Strategy::PostHoc {
            train_loss: LossKind::SoftmaxCe,
            inference: MarginScheme::multiplicative(weights),
        },
        seed,
    )
}

/// End-to-end training with the weighted cross entropy.
pub fn weighted_end_to_end_plan(seed: u64, weights: ClassWeights) -> TrainPlan {
    plan_with(Strategy::EndToEnd { loss: LossKind::IifCe { weights } }, seed)
}

/// Two-stage plan: plain cross entropy, then head-only retraining with
/// the weighted loss for 20% of the epochs at 1e-3 of the base rate.
pub fn decoupled_plan(seed: u64, weights: ClassWeights) -> TrainPlan {
    let plan = plan_with(
        Strategy::Decoupled {
            stage1_loss: LossKind::SoftmaxCe,
            stage2_loss: LossKind::IifCe { weights },
            stage2_epochs: 40,
            stage2_lr_factor: 1e-3,
        },
        seed,
    );
    debug_assert_eq!(plan.epochs / 5, 40);
    plan
}

/// Smooth image-frequency weights for a table, the default variant.
pub fn default_weights(table: &crate::dataset::ClassFrequencyTable) -> Result<ClassWeights> {
    compute_weights(table, VariantKind::Smooth, CountMode::Image)
}
