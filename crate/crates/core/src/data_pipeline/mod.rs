//! Media preprocessing, spectrogram extraction and synthetic data.

pub mod dsp;
pub mod io;
pub mod synthetic;
mod transcribe;

pub use transcribe::{PassThroughTranscriber, Transcriber, SILENCE_RMS};
mod manifest;
mod preprocess;

pub use manifest::{generate_synthetic_dataset, write_sample, DatasetManifest, ManifestEntry, MANIFEST_FILE};
pub use preprocess::{
    demux_with_ffmpeg, ffmpeg_args, frame_file_name, frame_plan, preprocess_sample, resample_linear, FrameDirSource,
    GeneratedSource, InMemorySource, MediaSource,
};
