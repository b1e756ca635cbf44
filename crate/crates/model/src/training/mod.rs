//! Contrastive pretraining and supervised Siamese finetuning.

pub mod augment;
pub mod config;
pub mod finetune;
pub mod optim;
pub mod pretrain;

pub use config::{AugmentConfig, FinetuneConfig, PretrainConfig};
pub use finetune::{batch_loss, finetune_supervised, train_step, freeze_fraction, multi_dataset_finetune, DatasetSplit, PairData, TrailEntry, TrainingRun};
pub use optim::{bce_with_logits, Sgd};
pub use pretrain::{info_nce, pretrain_contrastive, KeyQueue, Moco, PretrainRun};
