//! Tiny video transformer with analytic gradients.

pub mod grad;
pub mod heads;
pub mod layers;
pub mod optim;
pub mod params;
pub mod vit;

pub use grad::{gradients, Objective};
pub use heads::{Classifier, MaskedAutoencoder, ProjectionHead, Student};
pub use layers::{cross_entropy, softmax, Linear};
pub use optim::{AdamW, LrSchedule, OptimConfig};
pub use params::Parameters;
pub use vit::{patchify, pooled_grad_to_tokens, Decoder, Encoded, Encoder, EncoderConfig};
