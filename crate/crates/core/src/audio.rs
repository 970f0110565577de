//! Waveform container and audio file IO.

use std::path::Path;

use thiserror::Error;

pub const DEFAULT_SAMPLE_RATE: u32 = 16_000;

#[derive(Debug, Error)]
pub enum AudioError {
    #[error("waveform holds a non-finite sample at index {0}")]
    InvalidAudio(usize),
    #[error("waveform is empty")]
    Empty,
    #[error("sample rate must be positive")]
    BadSampleRate,
    #[error("wav read: {0}")]
    Wav(#[from] hound::Error),
    #[error("io: {0}")]
    Io(#[from] std::io::Error),
    #[error("unsupported wav layout: {0}")]
    Unsupported(String),
}

/// Mono audio samples in [-1, 1] at a fixed sample rate.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f32>,
    pub sample_rate: u32,
}

impl Waveform {
    pub fn new(samples: Vec<f32>, sample_rate: u32) -> Result<Self, AudioError> {
        if sample_rate == 0 {
            return Err(AudioError::BadSampleRate);
        }
        if samples.is_empty() {
            return Err(AudioError::Empty);
        }
        if let Some(idx) = samples.iter().position(|s| !s.is_finite()) {
            return Err(AudioError::InvalidAudio(idx));
        }
        Ok(Self {
            samples,
            sample_rate,
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / self.sample_rate as f64
    }

    /// Read a 16-bit PCM mono WAV file.
    pub fn read_wav(path: &Path) -> Result<Self, AudioError> {
        let mut reader = hound::WavReader::open(path)?;
        let spec = reader.spec();
        if spec.channels != 1 {
            return Err(AudioError::Unsupported(format!(
                "{} channels, expected mono",
                spec.channels
            )));
        }
        let samples: Vec<f32> = match spec.sample_format {
            hound::SampleFormat::Int => {
                if spec.bits_per_sample != 16 {
                    return Err(AudioError::Unsupported(format!(
                        "{}-bit PCM, expected 16",
                        spec.bits_per_sample
                    )));
                }
                reader
                    .samples::<i16>()
                    .map(|s| s.map(|v| v as f32 / 32768.0))
                    .collect::<Result<_, _>>()?
            }
            hound::SampleFormat::Float => reader.samples::<f32>().collect::<Result<_, _>>()?,
        };
        Waveform::new(samples, spec.sample_rate)
    }

    /// Write as 16-bit PCM mono WAV.
    pub fn write_wav(&self, path: &Path) -> Result<(), AudioError> {
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: self.sample_rate,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut writer = hound::WavWriter::create(path, spec)?;
        for &s in &self.samples {
            let clamped = s.clamp(-1.0, 1.0);
            writer.write_sample((clamped * 32767.0).round() as i16)?;
        }
        writer.finalize()?;
        Ok(())
    }

    /// Read raw little-endian float32 samples; the sample rate comes from a
    /// manifest sidecar field.
    pub fn read_raw_f32(path: &Path, sample_rate: u32) -> Result<Self, AudioError> {
        let bytes = std::fs::read(path)?;
        if bytes.len() % 4 != 0 {
            return Err(AudioError::Unsupported(
                "raw f32 file length is not a multiple of 4".into(),
            ));
        }
        let samples: Vec<f32> = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]))
            .collect();
        Waveform::new(samples, sample_rate)
    }
}
