//! ECG encoder, text encoder and projection heads.

mod ecg;
mod head;
mod model;
mod text;

pub use ecg::{BatchNorm, EcgEncoder, EcgEncoderConfig, BN_EPS, BN_MOMENTUM, MIN_SIGNAL_LEN};
pub use head::{Affine, ProjectionHead};
pub use model::{EtpModel, ModelConfig, TextBackbone, TextInput};
pub use text::{encode_text_external, tokenize, TextEncoder, TextEncoderConfig, TokenBatch, Vocabulary, BOS_ID, EOS_ID, PAD_ID, UNK_ID};
