//! PCM-16 mono WAV reading and writing.

use std::path::Path;

use crate::error::{Error, Result};

/// Writes unit-amplitude samples as 16-bit PCM mono.
pub fn write_wav_pcm16(path: &Path, samples: &[f32], sample_rate: u32) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    for &s in samples {
        let q = (s * 32767.0).round().clamp(-32768.0, 32767.0) as i16;
        writer
            .write_sample(q)
            .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    }
    writer
        .finalize()
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok(())
}

/// Reads a 16-bit PCM WAV file; returns the raw integer samples, the sample
/// rate, and the channel count.
pub fn read_wav_pcm16(path: &Path) -> Result<(Vec<i16>, u32, u16)> {
    let reader = hound::WavReader::open(path)
        .map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.bits_per_sample != 16 || spec.sample_format != hound::SampleFormat::Int {
        return Err(Error::Data(format!(
            "{}: expected 16-bit integer PCM, got {}-bit {:?}",
            path.display(),
            spec.bits_per_sample,
            spec.sample_format
        )));
    }
    let samples: std::result::Result<Vec<i16>, _> = reader.into_samples::<i16>().collect();
    let samples = samples.map_err(|e| Error::Data(format!("{}: {e}", path.display())))?;
    Ok((samples, spec.sample_rate, spec.channels))
}
