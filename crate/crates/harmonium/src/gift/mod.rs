//! Desk-scale globally guided feature transformation.
//!
//! A two-branch UNet-like toy network: the harmonization branch carries
//! GIFT modules whose convolution weights are modulated by channel scales
//! predicted from the global bottleneck feature, applied to foreground
//! features only. A frozen reconstruction branch supplies the relation
//! targets for foreground-background relation distillation on the encoder
//! feature maps.
//!
//! Forward passes build an operation graph with eagerly computed values;
//! backward accumulates exact reverse-mode gradients, which the self-test
//! verifies against central finite differences.

mod graph;
mod kernels;
pub mod network;
pub mod ops;
pub mod selftest;
pub mod train;

pub use network::{forward, GiftConfig, GiftNetwork, ParamSet, Site};
pub use ops::{
    demodulate, distill_loss, downsample_mask, gift_apply, global_pool, modulate,
    predict_scales, relation_map, total_loss, ConvWeights, FeatureMap, LinearLayer, MlpParams,
    RelationMap,
};
pub use selftest::{gradient_check, run_selftest, Check, GradCheckReport};
pub use train::{
    pretrain_reconstruction, synthetic_pairs, toy_train, TrainResult, TrainingPair,
};
