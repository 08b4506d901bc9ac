use crate::data_model::Waveform;
use crate::error::Result;

/// Speech-to-text plug point.
pub trait Transcriber {
    fn transcribe(&self, audio: &Waveform) -> Result<String>;
}

/// Returns text supplied up front, typically from a manifest; empty when
/// none was given or the audio is silent.
#[derive(Clone, Debug, Default)]
pub struct PassThroughTranscriber {
    pub text: Option<String>,
}

/// RMS below which audio counts as silent.
pub const SILENCE_RMS: f64 = 1e-4;

impl PassThroughTranscriber {
    pub fn new(text: impl Into<String>) -> Self {
        Self { text: Some(text.into()) }
    }
}

impl Transcriber for PassThroughTranscriber {
    fn transcribe(&self, audio: &Waveform) -> Result<String> {
        if audio.is_empty() || audio.rms() < SILENCE_RMS {
            return Ok(String::new());
        }
        Ok(self.text.clone().unwrap_or_default())
    }
}
