//! Vocabulary, a small conditional language model, SFT training, beam
//! decoding and checkpoints.

mod beam;
pub mod checkpoint;
mod net;
mod train;
mod vocab;

pub use beam::{beam_search, beam_search_ids, beam_search_with, BeamCandidate};
pub(crate) use net::reduce_in_order;
pub use net::{
    encode_example, log_distributions, log_prob, logp_and_grad, sft_loss, sft_loss_grad,
    EncodedExample, ModelConfig, ModelParams, PromptState, SftReduction,
};
pub(crate) use train::run_training;
pub use train::{train_sft, AdamW, OptimConfig, SftConfig, TracePoint};
pub use vocab::{build_vocab, Vocabulary, BOS, EOS, PAD, UNK};
