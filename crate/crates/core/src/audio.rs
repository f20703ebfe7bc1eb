//! Mono 32-bit float WAV IO and atomic file writes.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use crate::dsp::SAMPLE_RATE;
use crate::error::{DssError, Result};

fn temp_path(path: &Path) -> PathBuf {
    let mut name = path.file_name().map(|n| n.to_os_string()).unwrap_or_default();
    name.push(format!(".tmp{}", std::process::id()));
    path.with_file_name(name)
}

/// Writes `bytes` to a sibling temp file and renames it over `path`, so a
/// reader never observes a partially written file.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let tmp = temp_path(path);
    let mut f = fs::File::create(&tmp).map_err(|e| DssError::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| DssError::io(&tmp, e))?;
    f.sync_all().map_err(|e| DssError::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| DssError::io(path, e))
}

pub fn wav_bytes(samples: &[f64], sample_rate: u32) -> Result<Vec<u8>> {
    let spec = hound::WavSpec {
        channels: 1,
        sample_rate,
        bits_per_sample: 32,
        sample_format: hound::SampleFormat::Float,
    };
    let mut cursor = std::io::Cursor::new(Vec::new());
    {
        let mut w = hound::WavWriter::new(&mut cursor, spec).map_err(|e| DssError::InvalidArgument(e.to_string()))?;
        for &s in samples {
            w.write_sample(s as f32).map_err(|e| DssError::InvalidArgument(e.to_string()))?;
        }
        w.finalize().map_err(|e| DssError::InvalidArgument(e.to_string()))?;
    }
    Ok(cursor.into_inner())
}

/// Writes a mono 32-bit float WAV atomically.
pub fn write_wav(path: &Path, samples: &[f64], sample_rate: u32) -> Result<()> {
    write_atomic(path, &wav_bytes(samples, sample_rate)?)
}

/// Reads a mono WAV (float or integer PCM) as samples in [-1, 1] plus its
/// sample rate.
pub fn read_wav(path: &Path) -> Result<(Vec<f64>, u32)> {
    let reader = hound::WavReader::open(path).map_err(|e| match e {
        hound::Error::IoError(io) => DssError::io(path, io),
        other => DssError::format(path, other.to_string()),
    })?;
    let spec = reader.spec();
    if spec.channels != 1 {
        return Err(DssError::format(path, format!("expected mono audio, found {} channels", spec.channels)));
    }
    let samples: std::result::Result<Vec<f64>, hound::Error> = match spec.sample_format {
        hound::SampleFormat::Float => reader.into_samples::<f32>().map(|s| s.map(f64::from)).collect(),
        hound::SampleFormat::Int => {
            let scale = 1.0 / (1u64 << (spec.bits_per_sample - 1)) as f64;
            reader.into_samples::<i32>().map(|s| s.map(|v| v as f64 * scale)).collect()
        }
    };
    let samples = samples.map_err(|e| DssError::format(path, e.to_string()))?;
    Ok((samples, spec.sample_rate))
}

/// Reads a WAV and rejects anything not sampled at 16 kHz.
pub fn read_wav_16k(path: &Path) -> Result<Vec<f64>> {
    let (samples, sr) = read_wav(path)?;
    if sr != SAMPLE_RATE {
        return Err(DssError::format(
            path,
            format!("sample rate {sr} Hz unsupported, expected {SAMPLE_RATE} Hz (resample first)"),
        ));
    }
    Ok(samples)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn round_trip_is_f32_exact() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("a.wav");
        let x: Vec<f64> = (0..1000).map(|i| ((i as f64) * 0.01).sin() * 0.5).collect();
        write_wav(&p, &x, 16_000).unwrap();
        let y = read_wav_16k(&p).unwrap();
        assert_eq!(y.len(), x.len());
        for (a, b) in x.iter().zip(&y) {
            assert_eq!(*a as f32 as f64, *b);
        }
        assert!(!temp_path(&p).exists());
    }

    #[test]
    fn rejects_wrong_rate_and_missing_file() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("b.wav");
        write_wav(&p, &[0.0; 10], 8_000).unwrap();
        let err = read_wav_16k(&p).unwrap_err().to_string();
        assert!(err.contains("8000"), "{err}");
        let missing = dir.path().join("missing.wav");
        let err = read_wav(&missing).unwrap_err().to_string();
        assert!(err.contains("missing.wav"), "{err}");
    }
}
