//! LDCformer network: patch embedding, LDCformer encoders, standard
//! transformer encoders and the liveness classifier.

mod ldcformer;
pub mod nn;

pub use ldcformer::{encode, EncoderBlock, ForwardOut, Ldcformer, LdcformerConfig};
