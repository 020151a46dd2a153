//! Mono WAV input/output, 16-bit PCM or 32-bit float. No resampling.

use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum WavFormat {
    Pcm16,
    Float32,
}

fn wav_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Wav(format!("{}: {e}", path.display()))
}

/// Samples scaled to `[-1, 1)` and the file's sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = WavReader::open(path).map_err(|e| wav_err(path, e))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(wav_err(
            path,
            format!("{} channels, only mono is supported", spec.channels),
        ));
    }
    let samples = match (spec.sample_format, spec.bits_per_sample) {
        (SampleFormat::Int, 16) => reader
            .into_samples::<i16>()
            .map(|s| s.map(|v| f64::from(v) / 32768.0))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (SampleFormat::Float, 32) => reader
            .into_samples::<f32>()
            .map(|s| s.map(f64::from))
            .collect::<std::result::Result<Vec<_>, _>>(),
        (fmt, bits) => {
            return Err(wav_err(path, format!("unsupported {bits}-bit {fmt:?} samples")));
        }
    }
    .map_err(|e| wav_err(path, e))?;
    Ok((samples, spec.sample_rate))
}

/// Reads and insists on `expected_rate`.
pub fn read_wav_at(path: &Path, expected_rate: u32) -> Result<Vec<f64>> {
    let (samples, rate) = read_wav(path)?;
    if rate != expected_rate {
        return Err(wav_err(
            path,
            format!("sample rate {rate} Hz does not match the model's {expected_rate} Hz"),
        ));
    }
    Ok(samples)
}

/// PCM16 output is clipped to the representable range.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32, format: WavFormat) -> Result<()> {
    let (bits, sample_format) = match format {
        WavFormat::Pcm16 => (16, SampleFormat::Int),
        WavFormat::Float32 => (32, SampleFormat::Float),
    };
    let spec = WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: bits,
        sample_format,
    };
    let mut w = WavWriter::create(path, spec).map_err(|e| wav_err(path, e))?;
    for &s in samples {
        match format {
            WavFormat::Pcm16 => {
                let v = (s * 32768.0).round().clamp(-32768.0, 32767.0) as i16;
                w.write_sample(v)
            }
            WavFormat::Float32 => w.write_sample(s as f32),
        }
        .map_err(|e| wav_err(path, e))?;
    }
    w.finalize().map_err(|e| wav_err(path, e))
}
