//! Transformer encoder-decoder with AR and CMLM decoders, losses, search and training.

mod config;
mod loss;
mod network;
mod search;
mod train;

pub use config::{DecodeConfig, InputMode, LossBreakdown, TrainConfig, TransformerConfig};
pub use loss::{ar_cross_entropy, ar_joint_loss, nar_joint_loss, Example, NarWeights, StepCtx};
pub use network::{average_checkpoints, downsampled_len, DecoderKind, Dropout, Encoded, Seq2SeqModel, Source, Transfer, INIT_STD};
pub use search::{
    beam_search, greedy, remask_count, top_lengths, ArScorer, DecodeRecord, Hypothesis, MaskPredictTrace, SearchSpace, StepScorer,
};
pub use train::{
    dev_bleu, mt_samples, pretrain_asr, st_loss, token_accuracy, train, train_mt, MtDirection, EpochLog, Objective, Sample, TrainOptions, TrainReport, ValidationMetric};
