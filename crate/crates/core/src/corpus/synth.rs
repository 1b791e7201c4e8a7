//! Formant-synthesis speakers.
//!
//! A speaker is a glottal pulse train at a slowly wandering pitch, shaped by
//! three resonators and mixed with a speaker-specific noise floor.

use std::f64::consts::PI;
use std::path::Path;

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use super::wav::{write_samples, SAMPLE_RATE};
use super::{split_test_count, CorpusIndex, UtteranceRecord};
use crate::error::{Error, Result};
use crate::rng::substream;

const PEAK: f64 = 0.9;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VoiceParams {
    pub f0_low: f64,
    pub f0_high: f64,
    pub formants: [f64; 3],
    pub bandwidths: [f64; 3],
    /// relative per-period pitch jitter
    pub jitter: f64,
    /// noise RMS relative to the voiced RMS
    pub noise_floor: f64,
}

impl VoiceParams {
    fn as_vec(&self) -> Vec<f64> {
        let mut v = vec![self.f0_low, self.f0_high];
        v.extend(self.formants);
        v.extend(self.bandwidths);
        v.extend([self.jitter, self.noise_floor]);
        v
    }

    fn random(rng: &mut impl Rng) -> Self {
        let f0 = rng.random_range(90.0..260.0);
        Self {
            f0_low: 0.88 * f0,
            f0_high: 1.12 * f0,
            formants: [
                rng.random_range(300.0..850.0),
                rng.random_range(1000.0..2300.0),
                rng.random_range(2400.0..3600.0),
            ],
            bandwidths: [
                rng.random_range(60.0..120.0),
                rng.random_range(80.0..160.0),
                rng.random_range(100.0..200.0),
            ],
            jitter: rng.random_range(0.005..0.03),
            noise_floor: rng.random_range(0.002..0.02),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynthSpec {
    pub num_speakers: usize,
    pub utterances_per_speaker: usize,
    /// seconds
    pub min_duration: f64,
    pub max_duration: f64,
    pub voices: Vec<VoiceParams>,
}

impl SynthSpec {
    /// Draw pairwise-distinct voices from `seed`.
    pub fn random(num_speakers: usize, utterances_per_speaker: usize, duration: (f64, f64), seed: u64) -> Self {
        let mut rng = substream(seed, "synth/voices");
        let mut voices: Vec<VoiceParams> = Vec::with_capacity(num_speakers);
        while voices.len() < num_speakers {
            let v = VoiceParams::random(&mut rng);
            if voices.iter().all(|u| u.as_vec() != v.as_vec()) {
                voices.push(v);
            }
        }
        Self {
            num_speakers,
            utterances_per_speaker,
            min_duration: duration.0,
            max_duration: duration.1,
            voices,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.num_speakers < 2 {
            return Err(Error::config("synthetic corpus needs at least 2 speakers"));
        }
        if self.voices.len() != self.num_speakers {
            return Err(Error::config(format!(
                "{} voices for {} speakers",
                self.voices.len(),
                self.num_speakers
            )));
        }
        if self.utterances_per_speaker == 0 {
            return Err(Error::config("utterances_per_speaker must be positive"));
        }
        if !(self.min_duration > 0.0 && self.min_duration <= self.max_duration) {
            return Err(Error::config("duration range must satisfy 0 < min <= max"));
        }
        let nyquist = f64::from(SAMPLE_RATE) / 2.0;
        for (i, v) in self.voices.iter().enumerate() {
            let freqs = [v.f0_low, v.f0_high, v.formants[0], v.formants[1], v.formants[2]];
            if freqs.iter().any(|&f| !(f > 0.0 && f < nyquist)) || v.f0_low > v.f0_high {
                return Err(Error::config(format!(
                    "voice {i}: frequencies must lie in (0, {nyquist}) Hz"
                )));
            }
            if v.bandwidths.iter().any(|&b| !(b > 0.0)) || v.jitter < 0.0 || v.noise_floor < 0.0 {
                return Err(Error::config(format!("voice {i}: negative bandwidth, jitter or noise")));
            }
        }
        Ok(())
    }
}

/// Two-pole resonator with unit gain at DC.
fn resonate(x: &mut [f64], freq: f64, bandwidth: f64) {
    let fs = f64::from(SAMPLE_RATE);
    let r = (-PI * bandwidth / fs).exp();
    let a1 = 2.0 * r * (2.0 * PI * freq / fs).cos();
    let a2 = -r * r;
    let gain = 1.0 - a1 - a2;
    let (mut y1, mut y2) = (0.0, 0.0);
    for v in x.iter_mut() {
        let y = gain * *v + a1 * y1 + a2 * y2;
        y2 = y1;
        y1 = y;
        *v = y;
    }
}

fn rms(x: &[f64]) -> f64 {
    (x.iter().map(|v| v * v).sum::<f64>() / x.len() as f64).sqrt()
}

/// One utterance of `voice`, peak-normalized.
pub fn synthesize(voice: &VoiceParams, len: usize, rng: &mut impl Rng) -> Vec<f64> {
    let fs = f64::from(SAMPLE_RATE);
    let mid = 0.5 * (voice.f0_low + voice.f0_high);
    let half = 0.5 * (voice.f0_high - voice.f0_low);
    let (rate, phi) = (rng.random_range(0.5..2.0), rng.random_range(0.0..2.0 * PI));
    let (env_rate, env_phi) = (rng.random_range(2.0..5.0), rng.random_range(0.0..2.0 * PI));

    let mut x = vec![0.0; len];
    let mut phase = rng.random_range(0.0..1.0);
    let mut period_scale = 1.0;
    for (n, v) in x.iter_mut().enumerate() {
        let t = n as f64 / fs;
        let f0 = mid + half * (2.0 * PI * rate * t + phi).sin();
        phase += f0 * period_scale / fs;
        if phase >= 1.0 {
            phase -= 1.0;
            let j: f64 = rng.sample(StandardNormal);
            period_scale = 1.0 + voice.jitter * j;
            *v = 0.7 + 0.3 * (2.0 * PI * env_rate * t + env_phi).sin();
        }
    }
    for (f, b) in voice.formants.iter().zip(&voice.bandwidths) {
        let wobble: f64 = rng.sample(StandardNormal);
        resonate(&mut x, f * (1.0 + 0.02 * wobble), *b);
    }
    let level = rms(&x).max(1e-12);
    for v in x.iter_mut() {
        let e: f64 = rng.sample(StandardNormal);
        *v = *v / level + voice.noise_floor * e;
    }
    let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
    x.iter_mut().for_each(|v| *v *= PEAK / peak);
    x
}

/// Generate every utterance of `spec` under `root` and write `index.json`.
pub fn synth_corpus(spec: &SynthSpec, seed: u64, root: &Path) -> Result<CorpusIndex> {
    spec.validate()?;
    let fs = f64::from(SAMPLE_RATE);
    let speakers: Vec<String> = (0..spec.num_speakers).map(|s| format!("spk{s:03}")).collect();
    let n_test = split_test_count(spec.utterances_per_speaker);
    let mut train = Vec::new();
    let mut test = Vec::new();
    for (s, name) in speakers.iter().enumerate() {
        let dir = root.join(name);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for u in 0..spec.utterances_per_speaker {
            let mut rng = substream(seed, &format!("synth/{s}/{u}"));
            let secs = if spec.max_duration > spec.min_duration {
                rng.random_range(spec.min_duration..=spec.max_duration)
            } else {
                spec.min_duration
            };
            let len = ((secs * fs).round() as usize).max(1);
            let samples = synthesize(&spec.voices[s], len, &mut rng);
            let rel = format!("{name}/utt{u:03}.wav");
            write_samples(&root.join(&rel), &samples)?;
            let rec = UtteranceRecord {
                id: format!("{name}/utt{u:03}"),
                path: rel.into(),
                speaker: s,
                len,
            };
            if u >= spec.utterances_per_speaker - n_test {
                test.push(rec);
            } else {
                train.push(rec);
            }
        }
    }
    let index = CorpusIndex {
        root: root.to_path_buf(),
        speakers,
        train,
        test,
        seed: Some(seed),
        synth: Some(spec.clone()),
    };
    index.validate()?;
    index.save()?;
    Ok(index)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn random_voices_are_distinct_and_below_nyquist() {
        let spec = SynthSpec::random(40, 2, (0.5, 1.0), 9);
        spec.validate().unwrap();
        for i in 0..40 {
            for j in i + 1..40 {
                assert_ne!(spec.voices[i], spec.voices[j]);
            }
        }
    }

    #[test]
    fn single_speaker_is_rejected() {
        let spec = SynthSpec::random(1, 2, (0.5, 1.0), 0);
        assert!(matches!(spec.validate(), Err(Error::InvalidConfig(_))));
    }

    #[test]
    fn split_counts_match() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::random(3, 10, (0.2, 0.3), 1);
        let idx = synth_corpus(&spec, 1, dir.path()).unwrap();
        assert_eq!(idx.train.len(), 24);
        assert_eq!(idx.test.len(), 6);
        for r in idx.train.iter().chain(&idx.test) {
            assert!((3200..=4800).contains(&r.len));
        }
    }

    #[test]
    fn same_seed_gives_identical_files() {
        let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
        let spec = SynthSpec::random(2, 3, (0.2, 0.4), 5);
        let ia = synth_corpus(&spec, 5, a.path()).unwrap();
        synth_corpus(&spec, 5, b.path()).unwrap();
        for r in ia.train.iter().chain(&ia.test) {
            let fa = std::fs::read(a.path().join(&r.path)).unwrap();
            let fb = std::fs::read(b.path().join(&r.path)).unwrap();
            assert_eq!(fa, fb);
        }
        assert_eq!(
            std::fs::read(a.path().join("index.json")).unwrap(),
            std::fs::read(b.path().join("index.json")).unwrap()
        );
    }

    #[test]
    fn peak_is_normalized() {
        let v = SynthSpec::random(2, 1, (1.0, 1.0), 2).voices[0].clone();
        let x = synthesize(&v, 8000, &mut substream(0, "t"));
        let peak = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        assert!((peak - 0.9).abs() < 1e-12);
    }
}
