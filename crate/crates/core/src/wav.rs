//! WAV I/O for decoded toy waveforms: 16 kHz mono, 16-bit or float PCM.
//! Resampling is out of scope; other rates and channel counts are rejected.

use std::path::Path;

use crate::error::{CoreError, Result};

pub const WAV_SAMPLE_RATE: u32 = 16_000;

/// Write samples as 16-bit PCM, clipping to [-1, 1].
pub fn write_wav(path: &Path, samples: &[f64]) -> Result<()> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate: WAV_SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: hound::SampleFormat::Int,
    };
    let mut writer = hound::WavWriter::create(path, spec)
        .map_err(|e| CoreError::Wav(format!("create {}: {e}", path.display())))?;
    for &s in samples {
        let v = (s.clamp(-1.0, 1.0) * i16::MAX as f64).round() as i16;
        writer
            .write_sample(v)
            .map_err(|e| CoreError::Wav(format!("write sample: {e}")))?;
    }
    writer
        .finalize()
        .map_err(|e| CoreError::Wav(format!("finalize: {e}")))?;
    Ok(())
}

/// Read a 16 kHz mono WAV (16-bit int or 32-bit float PCM) to f64 samples.
pub fn read_wav(path: &Path) -> Result<Vec<f64>> {
    let mut reader = hound::WavReader::open(path)
        .map_err(|e| CoreError::Wav(format!("open {}: {e}", path.display())))?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(CoreError::Wav(format!(
            "expected mono, got {} channels",
            spec.channels
        )));
    }
    if spec.sample_rate != WAV_SAMPLE_RATE {
        return Err(CoreError::Wav(format!(
            "expected {WAV_SAMPLE_RATE} Hz, got {} Hz (resampling unsupported)",
            spec.sample_rate
        )));
    }
    match (spec.sample_format, spec.bits_per_sample) {
        (hound::SampleFormat::Int, 16) => reader
            .samples::<i16>()
            .map(|s| {
                s.map(|v| v as f64 / i16::MAX as f64)
                    .map_err(|e| CoreError::Wav(format!("read sample: {e}")))
            })
            .collect(),
        (hound::SampleFormat::Float, 32) => reader
            .samples::<f32>()
            .map(|s| {
                s.map(|v| v as f64)
                    .map_err(|e| CoreError::Wav(format!("read sample: {e}")))
            })
            .collect(),
        (fmt, bits) => Err(CoreError::Wav(format!(
            "unsupported format: {bits}-bit {fmt:?}"
        ))),
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn int16_roundtrip_within_quantization() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("a.wav");
        let samples: Vec<f64> = (0..1000)
            .map(|i| 0.8 * (2.0 * std::f64::consts::PI * 440.0 * i as f64 / 16000.0).sin())
            .collect();
        write_wav(&path, &samples).unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), samples.len());
        let max_err = samples
            .iter()
            .zip(&back)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0f64, f64::max);
        assert!(max_err < 1.0 / i16::MAX as f64, "max err {max_err}");
    }

    #[test]
    fn rejects_wrong_sample_rate() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("rate.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 44_100,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(CoreError::Wav(_))));
    }

    #[test]
    fn rejects_stereo() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("stereo.wav");
        let spec = hound::WavSpec {
            channels: 2,
            sample_rate: 16_000,
            bits_per_sample: 16,
            sample_format: hound::SampleFormat::Int,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        w.write_sample(0i16).unwrap();
        w.write_sample(0i16).unwrap();
        w.finalize().unwrap();
        assert!(matches!(read_wav(&path), Err(CoreError::Wav(_))));
    }

    #[test]
    fn accepts_float_pcm() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("float.wav");
        let spec = hound::WavSpec {
            channels: 1,
            sample_rate: 16_000,
            bits_per_sample: 32,
            sample_format: hound::SampleFormat::Float,
        };
        let mut w = hound::WavWriter::create(&path, spec).unwrap();
        for i in 0..100 {
            w.write_sample(0.01 * i as f32).unwrap();
        }
        w.finalize().unwrap();
        let back = read_wav(&path).unwrap();
        assert_eq!(back.len(), 100);
        assert!((back[50] - 0.5).abs() < 1e-6);
    }

    #[test]
    fn clipping_is_applied() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("clip.wav");
        write_wav(&path, &[2.0, -2.0]).unwrap();
        let back = read_wav(&path).unwrap();
        assert!((back[0] - 1.0).abs() < 1e-4);
        assert!((back[1] + 1.0).abs() < 1e-4);
    }
}
