//! Domain types, shape contracts and the token concatenation primitive.

mod config;
mod media;
mod shapes;
mod tokens;

pub use config::ScaleConfig;
pub use media::{FaceGeometry, Image, MelSpectrogram, Sample, VideoLatentGrid, Waveform, MEL_FLOOR};
pub use shapes::{Constituent, ShapePlan, Span, SpanLayout};
pub use stfm_tensor::container;
pub use tokens::{concat_tokens, pad_to, Modality, TokenSequence};
