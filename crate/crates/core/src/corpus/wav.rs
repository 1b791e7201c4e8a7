//! 16-bit PCM mono 16 kHz WAV files.

use std::path::Path;

use hound::{SampleFormat, WavSpec};

use crate::error::{Error, Result};

pub const SAMPLE_RATE: u32 = 16_000;

const SCALE: f64 = 32768.0;

fn spec() -> WavSpec {
    WavSpec {
        channels: 1,
        sample_rate: SAMPLE_RATE,
        bits_per_sample: 16,
        sample_format: SampleFormat::Int,
    }
}

fn format_err(path: &Path, field: &'static str, detail: impl Into<String>) -> Error {
    Error::WavFormat {
        path: path.to_path_buf(),
        field,
        detail: detail.into(),
    }
}

fn hound_err(path: &Path, e: hound::Error) -> Error {
    match e {
        hound::Error::IoError(io) => Error::io(path, io),
        hound::Error::Unsupported => format_err(path, "codec", "unsupported by reader"),
        other => format_err(path, "container", other.to_string()),
    }
}

/// Read samples scaled to `[-1, 1)`.
pub fn read_samples(path: &Path) -> Result<Vec<f64>> {
    let reader = hound::WavReader::open(path).map_err(|e| hound_err(path, e))?;
    let s = reader.spec();
    if s.sample_rate != SAMPLE_RATE {
        return Err(format_err(
            path,
            "sample_rate",
            format!("{} Hz, expected {SAMPLE_RATE}", s.sample_rate),
        ));
    }
    if s.channels != 1 {
        return Err(format_err(path, "channels", format!("{}, expected 1", s.channels)));
    }
    if s.sample_format != SampleFormat::Int || s.bits_per_sample != 16 {
        return Err(format_err(
            path,
            "codec",
            format!("{:?} {}-bit, expected 16-bit PCM", s.sample_format, s.bits_per_sample),
        ));
    }
    reader
        .into_samples::<i16>()
        .map(|r| r.map(|v| f64::from(v) / SCALE).map_err(|e| hound_err(path, e)))
        .collect()
}

/// Write samples, clamping to the int16 range.
pub fn write_samples(path: &Path, samples: &[f64]) -> Result<()> {
    let mut w = hound::WavWriter::create(path, spec()).map_err(|e| hound_err(path, e))?;
    for &x in samples {
        let q = (x * SCALE).round().clamp(-32768.0, 32767.0) as i16;
        w.write_sample(q).map_err(|e| hound_err(path, e))?;
    }
    w.finalize().map_err(|e| hound_err(path, e))
}

/// Number of samples the int16 clamp would alter.
pub fn clipped_count(samples: &[f64]) -> usize {
    samples
        .iter()
        .filter(|&&x| x * SCALE > 32767.0 || x * SCALE < -32768.0)
        .count()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ramp_round_trip_within_one_lsb() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("ramp.wav");
        let ramp: Vec<f64> = (0..2000).map(|i| -1.0 + i as f64 / 1000.0).collect();
        write_samples(&p, &ramp).unwrap();
        let back = read_samples(&p).unwrap();
        assert_eq!(back.len(), ramp.len());
        let worst = ramp.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
        assert!(worst <= 1.0 / 32768.0, "{worst}");
    }

    #[test]
    fn quantized_values_are_lossless() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("q.wav");
        let x: Vec<f64> = [-32768i32, -1, 0, 1, 12345, 32767]
            .iter()
            .map(|&v| v as f64 / 32768.0)
            .collect();
        write_samples(&p, &x).unwrap();
        assert_eq!(read_samples(&p).unwrap(), x);
    }

    fn write_raw(path: &Path, spec: WavSpec) {
        let mut w = hound::WavWriter::create(path, spec).unwrap();
        for _ in 0..16 {
            w.write_sample(0i16).unwrap();
        }
        w.finalize().unwrap();
    }

    fn field_of(e: Error) -> &'static str {
        match e {
            Error::WavFormat { field, .. } => field,
            other => panic!("unexpected {other}"),
        }
    }

    #[test]
    fn stereo_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.wav");
        write_raw(&p, WavSpec { channels: 2, ..spec() });
        assert_eq!(field_of(read_samples(&p).unwrap_err()), "channels");
    }

    #[test]
    fn eight_khz_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("r.wav");
        write_raw(
            &p,
            WavSpec {
                sample_rate: 8000,
                ..spec()
            },
        );
        assert_eq!(field_of(read_samples(&p).unwrap_err()), "sample_rate");
    }

    #[test]
    fn float_codec_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("f.wav");
        let mut w = hound::WavWriter::create(
            &p,
            WavSpec {
                bits_per_sample: 32,
                sample_format: SampleFormat::Float,
                ..spec()
            },
        )
        .unwrap();
        w.write_sample(0.5f32).unwrap();
        w.finalize().unwrap();
        assert_eq!(field_of(read_samples(&p).unwrap_err()), "codec");
    }

    #[test]
    fn garbage_is_a_container_error() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("g.wav");
        std::fs::write(&p, b"not a wav file at all").unwrap();
        assert_eq!(field_of(read_samples(&p).unwrap_err()), "container");
    }

    #[test]
    fn clipping_is_counted() {
        assert_eq!(clipped_count(&[0.0, 0.99, 1.0, -1.0, -1.2]), 2);
    }
}
