use std::path::Path;

use hound::{SampleFormat, WavSpec, WavWriter};

use super::{Waveform, SAMPLE_RATE_HZ};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

/// Reads a 16-bit PCM mono WAV at 16 kHz.
pub fn read_wav<T: Scalar>(path: &Path) -> Result<Waveform<T>> {
    if !path.exists() {
        return Err(Error::MissingFile(path.to_path_buf()));
    }
    let mut reader = hound::WavReader::open(path)?;
    let spec = reader.spec();
    if spec.sample_rate != SAMPLE_RATE_HZ {
        return Err(Error::SampleRate {
            expected: SAMPLE_RATE_HZ,
            got: spec.sample_rate,
        });
    }
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::InvalidArgument(format!(
            "{}: expected 16-bit PCM mono, got {} channel(s) {}-bit {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let scale = T::of(1.0 / 32768.0);
    let samples = reader
        .samples::<i16>()
        .map(|s| s.map(|v| T::of(f64::from(v)) * scale))
        .collect::<std::result::Result<Vec<T>, _>>()?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono; samples are clamped to [-1, 1].
pub fn write_wav<T: Scalar>(path: &Path, wav: &Waveform<T>) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: wav.sample_rate_hz(),
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    let mut writer = WavWriter::create(path, spec)?;
    for &s in wav.samples() {
        let v = (s.f64().clamp(-1.0, 1.0) * 32767.0).round() as i16;
        writer.write_sample(v)?;
    }
    writer.finalize()?;
    Ok(())
}
