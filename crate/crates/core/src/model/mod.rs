//! The autoencoder-coupled transformer network and its joint loss.
//!
//! One composed app matrix `W^a` (`app[m] + category[cat(m)]`) is the
//! input layer of the retention autoencoder, the app embedding of the
//! encoder, and (transposed) the output weight of the autoencoder, the
//! masked-app head, the retention head and the decoder head. The encoder
//! and decoder use an attention variant with one extra key/value: the
//! retention representation in the encoder, the bottleneck reconstruction
//! in the decoder.

mod checkpoint;
mod config;
mod loss;
mod network;

pub use checkpoint::{feature_id_of, Checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use config::ModelConfig;
pub use loss::{
    batch_loss, loss_components, BatchItem, BatchOutput, LossOptions, LossTerms, RecordSums, LAMBDA_REG,
};
pub use network::{
    app_class, AeOutputs, Aetn, AetnParams, AttentionOutput, BlockParams, Bound, EncoderInputs,
    MaskedPositions, Mode, OutputHead, Predictions,
};
