//! Audio containers, manifests and the synthetic toy-speaker corpus.

mod toy;
mod trials;
mod wav;

use std::collections::HashSet;
use std::fs;
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::scalar::Scalar;

pub use toy::{
    generate_toy_corpus, generate_toy_noises, generate_toy_rirs, synthesize_utterances,
    toy_aug_corpora, toy_speakers, write_clips, ToyCorpus, ToySpeakerSpec,
};
pub use trials::{build_trial_list, LabelMap, Trial, TrialList};
pub use wav::{read_wav, write_wav};

/// The only sample rate the pipeline accepts.
pub const SAMPLE_RATE_HZ: u32 = 16_000;

/// Length of each positive-pair segment in seconds.
pub const SEGMENT_SECONDS: f64 = 1.95;

/// Segment length in samples at the given rate.
pub fn segment_samples(segment_s: f64, sample_rate_hz: u32) -> usize {
    (segment_s * f64::from(sample_rate_hz)).round() as usize
}

/// Mono audio.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform<T> {
    samples: Vec<T>,
    sample_rate_hz: u32,
}

impl<T: Scalar> Waveform<T> {
    pub fn new(samples: Vec<T>, sample_rate_hz: u32) -> Result<Self> {
        if sample_rate_hz == 0 {
            return Err(Error::InvalidArgument("sample rate must be positive".into()));
        }
        if samples.is_empty() {
            return Err(Error::InvalidArgument("waveform must contain at least one sample".into()));
        }
        if let Some(i) = samples.iter().position(|s| !s.is_finite()) {
            return Err(Error::InvalidArgument(format!("non-finite sample at index {i}")));
        }
        Ok(Waveform {
            samples,
            sample_rate_hz,
        })
    }

    /// Builds a waveform from samples the caller guarantees are finite and non-empty.
    pub(crate) fn from_parts(samples: Vec<T>, sample_rate_hz: u32) -> Self {
        debug_assert!(!samples.is_empty());
        Waveform {
            samples,
            sample_rate_hz,
        }
    }

    pub fn samples(&self) -> &[T] {
        &self.samples
    }

    pub fn into_samples(self) -> Vec<T> {
        self.samples
    }

    pub fn sample_rate_hz(&self) -> u32 {
        self.sample_rate_hz
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn duration_s(&self) -> f64 {
        self.samples.len() as f64 / f64::from(self.sample_rate_hz)
    }

    pub fn peak(&self) -> T {
        self.samples
            .iter()
            .fold(T::zero(), |m, &s| if s.abs() > m { s.abs() } else { m })
    }

    /// Mean-square power.
    pub fn power(&self) -> T {
        mean_square(&self.samples)
    }

    pub fn slice(&self, range: std::ops::Range<usize>) -> Self {
        Waveform::from_parts(self.samples[range].to_vec(), self.sample_rate_hz)
    }

    pub fn cast<U: Scalar>(&self) -> Waveform<U> {
        Waveform::from_parts(
            self.samples.iter().map(|s| U::of(s.f64())).collect(),
            self.sample_rate_hz,
        )
    }
}

pub(crate) fn mean_square<T: Scalar>(x: &[T]) -> T {
    if x.is_empty() {
        return T::zero();
    }
    x.iter().map(|&v| v * v).sum::<T>() / crate::scalar::count(x.len())
}

/// One training utterance. There is deliberately no speaker field.
#[derive(Debug, Clone, PartialEq)]
pub struct ManifestEntry {
    pub utterance_id: String,
    pub path: PathBuf,
    pub duration_s: f64,
}

/// What to do when a manifest entry points to a file that does not exist.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum MissingFilePolicy {
    Ignore,
    #[default]
    Warn,
    Error,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct UtteranceManifest {
    pub entries: Vec<ManifestEntry>,
}

impl UtteranceManifest {
    pub fn new(entries: Vec<ManifestEntry>) -> Result<Self> {
        let mut seen = HashSet::new();
        for e in &entries {
            validate_id(&e.utterance_id)?;
            if !seen.insert(e.utterance_id.as_str()) {
                return Err(Error::DuplicateId(e.utterance_id.clone()));
            }
            if !(e.duration_s > 0.0 && e.duration_s.is_finite()) {
                return Err(Error::InvalidArgument(format!(
                    "utterance `{}` has non-positive duration {}",
                    e.utterance_id, e.duration_s
                )));
            }
        }
        Ok(UtteranceManifest { entries })
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Serializes as `<utterance_id>\t<path>\t<duration_s>` lines.
    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!(
                "{}\t{}\t{}\n",
                e.utterance_id,
                e.path.display(),
                e.duration_s
            ));
        }
        out
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_tsv())?;
        Ok(())
    }
}

fn validate_id(id: &str) -> Result<()> {
    if id.is_empty() || id.chars().any(char::is_whitespace) {
        return Err(Error::InvalidArgument(format!(
            "utterance id `{id}` must be non-empty and contain no whitespace"
        )));
    }
    Ok(())
}

fn resolve(base: Option<&Path>, p: &str) -> PathBuf {
    let p = PathBuf::from(p);
    match base {
        Some(b) if p.is_relative() => b.join(p),
        _ => p,
    }
}

/// Parses manifest text. Relative paths are resolved against `base`.
pub fn parse_manifest(text: &str, origin: &str, base: Option<&Path>) -> Result<UtteranceManifest> {
    let mut entries = Vec::new();
    let mut seen = HashSet::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| Error::Parse {
            path: origin.to_string(),
            line: line_no,
            msg,
        };
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() != 3 {
            return Err(err(format!(
                "expected 3 tab-separated fields, found {}",
                fields.len()
            )));
        }
        let id = fields[0].trim();
        validate_id(id).map_err(|e| err(e.to_string()))?;
        let duration_s: f64 = fields[2]
            .trim()
            .parse()
            .map_err(|_| err(format!("bad duration `{}`", fields[2])))?;
        if !(duration_s > 0.0 && duration_s.is_finite()) {
            return Err(err(format!("duration must be positive, got {duration_s}")));
        }
        if !seen.insert(id.to_string()) {
            return Err(Error::DuplicateId(id.to_string()));
        }
        entries.push(ManifestEntry {
            utterance_id: id.to_string(),
            path: resolve(base, fields[1].trim()),
            duration_s,
        });
    }
    Ok(UtteranceManifest { entries })
}

/// Loads an utterance manifest, applying `policy` to entries whose audio is missing.
pub fn load_manifest(path: &Path, policy: MissingFilePolicy) -> Result<UtteranceManifest> {
    let text = fs::read_to_string(path)?;
    let mut manifest = parse_manifest(&text, &path.display().to_string(), path.parent())?;
    if policy != MissingFilePolicy::Ignore {
        let mut kept = Vec::with_capacity(manifest.entries.len());
        for e in manifest.entries {
            if e.path.exists() {
                kept.push(e);
            } else if policy == MissingFilePolicy::Error {
                return Err(Error::MissingFile(e.path));
            } else {
                log::warn!("skipping `{}`: {} not found", e.utterance_id, e.path.display());
            }
        }
        manifest.entries = kept;
    }
    Ok(manifest)
}

/// Entry of a noise or room-impulse-response corpus.
#[derive(Debug, Clone, PartialEq)]
pub struct ClipEntry {
    pub id: String,
    pub path: PathBuf,
    pub category: Option<String>,
}

/// Noise or RIR list: `<id>\t<path>[\t<category>]` per line.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ClipManifest {
    pub entries: Vec<ClipEntry>,
}

impl ClipManifest {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let origin = path.display().to_string();
        let mut entries = Vec::new();
        let mut seen = HashSet::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if !(2..=3).contains(&fields.len()) {
                return Err(Error::Parse {
                    path: origin.clone(),
                    line: i + 1,
                    msg: format!("expected 2 or 3 tab-separated fields, found {}", fields.len()),
                });
            }
            let id = fields[0].trim().to_string();
            if !seen.insert(id.clone()) {
                return Err(Error::DuplicateId(id));
            }
            entries.push(ClipEntry {
                id,
                path: resolve(path.parent(), fields[1].trim()),
                category: fields.get(2).map(|c| c.trim().to_string()),
            });
        }
        Ok(ClipManifest { entries })
    }

    pub fn to_tsv(&self) -> String {
        let mut out = String::new();
        for e in &self.entries {
            out.push_str(&format!("{}\t{}", e.id, e.path.display()));
            if let Some(c) = &e.category {
                out.push('\t');
                out.push_str(c);
            }
            out.push('\n');
        }
        out
    }

    /// Reads every clip into memory.
    pub fn load_audio<T: Scalar>(&self) -> Result<Vec<(String, Waveform<T>)>> {
        self.entries
            .iter()
            .map(|e| Ok((e.id.clone(), read_wav(&e.path)?)))
            .collect()
    }
}

/// Random access to training audio by manifest index.
pub trait AudioStore<T: Scalar>: Sync {
    fn len(&self) -> usize;
    fn id(&self, index: usize) -> &str;
    fn load(&self, index: usize) -> Result<std::borrow::Cow<'_, Waveform<T>>>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Audio held in memory.
#[derive(Debug, Clone, Default)]
pub struct MemoryStore<T> {
    pub items: Vec<(String, Waveform<T>)>,
}

impl<T: Scalar> AudioStore<T> for MemoryStore<T> {
    fn len(&self) -> usize {
        self.items.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.items[index].0
    }

    fn load(&self, index: usize) -> Result<std::borrow::Cow<'_, Waveform<T>>> {
        Ok(std::borrow::Cow::Borrowed(&self.items[index].1))
    }
}

impl<T: Scalar> MemoryStore<T> {
    /// Reads every manifest entry into memory.
    pub fn from_manifest(manifest: &UtteranceManifest) -> Result<Self> {
        let items = manifest
            .entries
            .iter()
            .map(|e| Ok((e.utterance_id.clone(), read_wav(&e.path)?)))
            .collect::<Result<Vec<_>>>()?;
        Ok(MemoryStore { items })
    }

    pub fn get(&self, id: &str) -> Option<&Waveform<T>> {
        self.items.iter().find(|(i, _)| i == id).map(|(_, w)| w)
    }
}

/// Audio read from disk on every access.
#[derive(Debug, Clone)]
pub struct DiskStore {
    pub manifest: UtteranceManifest,
}

impl<T: Scalar> AudioStore<T> for DiskStore {
    fn len(&self) -> usize {
        self.manifest.len()
    }

    fn id(&self, index: usize) -> &str {
        &self.manifest.entries[index].utterance_id
    }

    fn load(&self, index: usize) -> Result<std::borrow::Cow<'_, Waveform<T>>> {
        Ok(std::borrow::Cow::Owned(read_wav(&self.manifest.entries[index].path)?))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_valid_manifest() {
        let text = "a\twav/a.wav\t3.5\nb\twav/b.wav\t4\nc\t/abs/c.wav\t5.25\n";
        let m = parse_manifest(text, "m.tsv", Some(Path::new("/data"))).unwrap();
        assert_eq!(m.len(), 3);
        assert_eq!(m.entries[0].path, PathBuf::from("/data/wav/a.wav"));
        assert_eq!(m.entries[2].path, PathBuf::from("/abs/c.wav"));
        assert_eq!(m.entries[2].duration_s, 5.25);
    }

    #[test]
    fn empty_manifest_is_valid() {
        let m = parse_manifest("", "m.tsv", None).unwrap();
        assert!(m.is_empty());
    }

    #[test]
    fn duplicate_id_is_named() {
        let text = "a\tx.wav\t3\nb\ty.wav\t3\na\tz.wav\t3\n";
        let err = parse_manifest(text, "m.tsv", None).unwrap_err();
        assert!(matches!(&err, Error::DuplicateId(id) if id == "a"));
        assert!(err.to_string().contains("`a`"));
    }

    #[test]
    fn parse_errors_carry_line_numbers() {
        let err = parse_manifest("a\tx.wav\t3\nb\ty.wav\n", "m.tsv", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        let err = parse_manifest("a\tx.wav\t-1\n", "m.tsv", None).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 1, .. }), "{err}");
    }

    #[test]
    fn missing_file_policy() {
        let dir = tempfile::tempdir().unwrap();
        let wav = dir.path().join("a.wav");
        write_wav(&wav, &Waveform::<f32>::new(vec![0.1; 16], SAMPLE_RATE_HZ).unwrap()).unwrap();
        let path = dir.path().join("m.tsv");
        fs::write(&path, "a\ta.wav\t0.001\nb\tb.wav\t1\n").unwrap();
        assert_eq!(load_manifest(&path, MissingFilePolicy::Ignore).unwrap().len(), 2);
        assert_eq!(load_manifest(&path, MissingFilePolicy::Warn).unwrap().len(), 1);
        assert!(matches!(
            load_manifest(&path, MissingFilePolicy::Error),
            Err(Error::MissingFile(_))
        ));
    }

    #[test]
    fn waveform_rejects_invalid_samples() {
        assert!(Waveform::<f64>::new(vec![], 16000).is_err());
        assert!(Waveform::<f64>::new(vec![f64::NAN], 16000).is_err());
        assert!(Waveform::<f64>::new(vec![0.0], 0).is_err());
    }

    #[test]
    fn segment_length_at_16k() {
        assert_eq!(segment_samples(SEGMENT_SECONDS, SAMPLE_RATE_HZ), 31_200);
    }
}
