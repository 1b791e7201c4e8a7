//! Audio I/O, the synthetic speaker corpus, dataset indexing and slicing.
//!
//! A [`CorpusIndex`] looks the same whether it was synthesized or scanned
//! from a `<root>/<speaker>/<utt>.wav` tree, so nothing downstream cares
//! where the audio came from.

pub mod synth;
pub mod wav;

use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use synth::{synth_corpus, SynthSpec, VoiceParams};
pub use wav::SAMPLE_RATE;

pub const INDEX_FILE: &str = "index.json";

/// Mono 16 kHz audio with its speaker label.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub speaker: usize,
    pub utterance_id: String,
}

impl Waveform {
    pub fn new(samples: Vec<f64>, speaker: usize, utterance_id: impl Into<String>) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::shape("waveform has no samples"));
        }
        if samples.iter().any(|v| !v.is_finite()) {
            return Err(Error::shape("waveform contains non-finite samples"));
        }
        Ok(Self {
            samples,
            speaker,
            utterance_id: utterance_id.into(),
        })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn read(path: &Path, speaker: usize, utterance_id: impl Into<String>) -> Result<Self> {
        Self::new(wav::read_samples(path)?, speaker, utterance_id)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        wav::write_samples(path, &self.samples)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceRecord {
    pub id: String,
    /// relative to the corpus root
    pub path: PathBuf,
    pub speaker: usize,
    /// samples
    pub len: usize,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusIndex {
    #[serde(skip)]
    pub root: PathBuf,
    pub speakers: Vec<String>,
    pub train: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
    pub seed: Option<u64>,
    pub synth: Option<SynthSpec>,
}

/// Test utterances held out from `n` per speaker: 20%, rounded.
pub fn split_test_count(n: usize) -> usize {
    let k = (n as f64 * 0.2).round() as usize;
    if n >= 2 {
        k.clamp(1, n - 1)
    } else {
        0
    }
}

impl CorpusIndex {
    pub fn split(&self, split: Split) -> &[UtteranceRecord] {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    pub fn num_speakers(&self) -> usize {
        self.speakers.len()
    }

    pub fn validate(&self) -> Result<()> {
        let mut ids: Vec<&str> = self.train.iter().map(|r| r.id.as_str()).collect();
        ids.sort_unstable();
        for r in &self.test {
            if ids.binary_search(&r.id.as_str()).is_ok() {
                return Err(Error::config(format!("utterance {} is in both train and test", r.id)));
            }
        }
        for r in self.train.iter().chain(&self.test) {
            if r.speaker >= self.speakers.len() {
                return Err(Error::LabelOutOfRange {
                    label: r.speaker,
                    classes: self.speakers.len(),
                });
            }
        }
        Ok(())
    }

    pub fn save(&self) -> Result<()> {
        let path = self.root.join(INDEX_FILE);
        let text = serde_json::to_string_pretty(self)?;
        std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
    }

    /// Read `<root>/index.json`.
    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join(INDEX_FILE);
        let text = std::fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let mut idx: CorpusIndex = serde_json::from_str(&text)?;
        idx.root = root.to_path_buf();
        idx.validate()?;
        Ok(idx)
    }

    /// `index.json` when present, otherwise a directory scan.
    pub fn open(root: &Path) -> Result<Self> {
        if root.join(INDEX_FILE).exists() {
            Self::load(root)
        } else {
            Self::from_directory(root)
        }
    }

    /// Index a `<root>/<speaker>/<utt>.wav` tree. Speakers and utterances
    /// are ordered by name; the last 20% of each speaker's files are test.
    pub fn from_directory(root: &Path) -> Result<Self> {
        let read_dir = |p: &Path| -> Result<Vec<PathBuf>> {
            let mut v: Vec<PathBuf> = std::fs::read_dir(p)
                .map_err(|e| Error::io(p, e))?
                .map(|e| e.map(|e| e.path()).map_err(|e| Error::io(p, e)))
                .collect::<Result<_>>()?;
            v.sort();
            Ok(v)
        };
        let mut speakers = Vec::new();
        let mut train = Vec::new();
        let mut test = Vec::new();
        for dir in read_dir(root)?.into_iter().filter(|p| p.is_dir()) {
            let name = dir.file_name().unwrap().to_string_lossy().into_owned();
            let files: Vec<PathBuf> = read_dir(&dir)?
                .into_iter()
                .filter(|p| p.extension().is_some_and(|e| e.eq_ignore_ascii_case("wav")))
                .collect();
            if files.is_empty() {
                continue;
            }
            let label = speakers.len();
            let n_test = split_test_count(files.len());
            for (i, f) in files.iter().enumerate() {
                let len = wav::read_samples(f)?.len();
                let rel = f.strip_prefix(root).unwrap().to_path_buf();
                let stem = f.file_stem().unwrap().to_string_lossy();
                let rec = UtteranceRecord {
                    id: format!("{name}/{stem}"),
                    path: rel,
                    speaker: label,
                    len,
                };
                if i >= files.len() - n_test {
                    test.push(rec);
                } else {
                    train.push(rec);
                }
            }
            speakers.push(name);
        }
        if speakers.len() < 2 {
            return Err(Error::config(format!(
                "{} holds {} speaker directories with WAV files, need at least 2",
                root.display(),
                speakers.len()
            )));
        }
        let idx = Self {
            root: root.to_path_buf(),
            speakers,
            train,
            test,
            seed: None,
            synth: None,
        };
        idx.validate()?;
        Ok(idx)
    }

    pub fn load_wave(&self, rec: &UtteranceRecord) -> Result<Waveform> {
        Waveform::read(&self.root.join(&rec.path), rec.speaker, rec.id.clone())
    }

    pub fn load_split(&self, split: Split) -> Result<Vec<Waveform>> {
        self.split(split).iter().map(|r| self.load_wave(r)).collect()
    }
}

/// `len` consecutive samples of the periodic extension of `x`, from `start`.
pub fn cyclic_window(x: &[f64], start: usize, len: usize) -> Vec<f64> {
    let n = x.len();
    if start + len <= n {
        return x[start..start + len].to_vec();
    }
    (0..len).map(|i| x[(start + i) % n]).collect()
}

/// Uniformly placed window of exactly `len` samples; short inputs are
/// cyclically extended.
pub fn random_slice(x: &[f64], len: usize, rng: &mut impl Rng) -> Vec<f64> {
    assert!(len >= 1 && !x.is_empty());
    if x.len() >= len {
        let start = rng.random_range(0..=x.len() - len);
        x[start..start + len].to_vec()
    } else {
        let start = rng.random_range(0..x.len());
        cyclic_window(x, start, len)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::substream;

    #[test]
    fn full_length_slice_is_whole_utterance() {
        let x: Vec<f64> = (0..100).map(f64::from).collect();
        assert_eq!(random_slice(&x, 100, &mut substream(0, "s")), x);
    }

    #[test]
    fn slice_start_covers_bounds() {
        let x: Vec<f64> = (0..16000).map(f64::from).collect();
        let mut rng = substream(1, "s");
        let (mut lo, mut hi) = (usize::MAX, 0);
        for _ in 0..20_000 {
            let s = random_slice(&x, 3200, &mut rng);
            assert_eq!(s.len(), 3200);
            let start = s[0] as usize;
            assert_eq!(s[3199] as usize, start + 3199);
            lo = lo.min(start);
            hi = hi.max(start);
        }
        assert!(lo < 50 && hi > 12750 && hi <= 12800, "{lo} {hi}");
    }

    #[test]
    fn short_utterance_is_cyclically_extended() {
        let x: Vec<f64> = (0..2000).map(f64::from).collect();
        let mut rng = substream(2, "s");
        for _ in 0..100 {
            let s = random_slice(&x, 3200, &mut rng);
            assert_eq!(s.len(), 3200);
            for w in s.windows(2) {
                assert!(w[1] == w[0] + 1.0 || (w[0] == 1999.0 && w[1] == 0.0));
            }
        }
    }

    #[test]
    fn directory_scan_matches_synthetic_shape() {
        let dir = tempfile::tempdir().unwrap();
        let spec = SynthSpec::random(3, 5, (0.1, 0.2), 4);
        let synth = synth_corpus(&spec, 4, dir.path()).unwrap();
        let scanned = CorpusIndex::from_directory(dir.path()).unwrap();
        assert_eq!(scanned.speakers, synth.speakers);
        assert_eq!(scanned.train, synth.train);
        assert_eq!(scanned.test, synth.test);
        assert_eq!(CorpusIndex::load(dir.path()).unwrap(), synth);
    }

    #[test]
    fn split_is_disjoint_and_labels_valid() {
        let mut idx = CorpusIndex {
            root: PathBuf::new(),
            speakers: vec!["a".into(), "b".into()],
            train: vec![UtteranceRecord {
                id: "a/1".into(),
                path: "a/1.wav".into(),
                speaker: 0,
                len: 1,
            }],
            test: vec![],
            seed: None,
            synth: None,
        };
        idx.validate().unwrap();
        idx.test.push(idx.train[0].clone());
        assert!(idx.validate().is_err());
        idx.test[0].id = "b/1".into();
        idx.test[0].speaker = 2;
        assert!(matches!(idx.validate(), Err(Error::LabelOutOfRange { .. })));
    }
}
