use std::path::Path;

use hound::{SampleFormat, WavReader, WavSpec, WavWriter};

use super::{Waveform, SAMPLE_RATE};
use crate::error::{Error, Result};

fn wav_err(e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::Io(io),
        other => Error::Format(format!("wav: {other}")),
    }
}

/// Reads 16-bit PCM mono at 16 kHz, scaling samples to [-1, 1).
pub fn read_wav(path: impl AsRef<Path>) -> Result<Waveform> {
    let path = path.as_ref();
    let reader = WavReader::open(path).map_err(wav_err)?;
    let spec = reader.spec();
    if spec.channels != 1 || spec.bits_per_sample != 16 || spec.sample_format != SampleFormat::Int {
        return Err(Error::Format(format!(
            "{}: need 16-bit PCM mono, got {} channel(s) of {}-bit {:?}",
            path.display(),
            spec.channels,
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples = reader
        .into_samples::<i16>()
        .map(|s| s.map(|v| v as f64 / 32768.0))
        .collect::<std::result::Result<Vec<_>, _>>()
        .map_err(wav_err)?;
    Waveform::new(samples, spec.sample_rate)
}

/// Writes 16-bit PCM mono; samples outside [-1, 1] are clipped.
pub fn write_wav(path: impl AsRef<Path>, w: &Waveform) -> Result<()> {
    let spec = WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    };
    let mut writer = WavWriter::create(path, spec).map_err(wav_err)?;
    for &s in w.samples() {
        let v = (s * 32768.0)
            .round()
            .clamp(i16::MIN as f64, i16::MAX as f64) as i16;
        writer.write_sample(v).map_err(wav_err)?;
    }
    writer.finalize().map_err(wav_err)
}
