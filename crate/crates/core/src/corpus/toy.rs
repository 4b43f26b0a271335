//! Synthetic speakers for desk-scale experiments.
//!
//! Each speaker is a source-filter voice: a glottal pulse train at the
//! speaker's fundamental, shaped by three formant resonators. Utterances are
//! sequences of syllables with random intonation and formant jitter, passed
//! through a random per-utterance channel (tilt, gain, background noise). The
//! speaker identity therefore lives in the spectral envelope while the
//! channel varies from utterance to utterance.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{
    segment_samples, write_wav, ClipEntry, ClipManifest, LabelMap, ManifestEntry,
    UtteranceManifest, Waveform, SAMPLE_RATE_HZ, SEGMENT_SECONDS,
};
use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::seed::SeedMix;

#[derive(Debug, Clone, PartialEq)]
pub struct ToySpeakerSpec {
    pub speaker_id: u32,
    pub fundamental_hz: f64,
    pub formant_centers_hz: Vec<f64>,
    pub envelope_seed: u64,
}

/// Per-speaker voice quality derived from `envelope_seed`.
struct Voice {
    bandwidths_hz: [f64; 3],
    glottal_lowpass: f64,
    breathiness: f64,
}

impl ToySpeakerSpec {
    fn voice(&self) -> Voice {
        let mut rng = SeedMix::new(self.envelope_seed).str("voice").rng();
        Voice {
            bandwidths_hz: [
                rng.gen_range(60.0..110.0),
                rng.gen_range(80.0..150.0),
                rng.gen_range(120.0..220.0),
            ],
            glottal_lowpass: rng.gen_range(0.55..0.9),
            breathiness: rng.gen_range(0.005..0.03),
        }
    }
}

/// Draws `n` speakers with distinct (fundamental, formant) tuples.
pub fn toy_speakers(n: usize, seed: u64) -> Vec<ToySpeakerSpec> {
    let mut rng = SeedMix::new(seed).str("toy-speakers").rng();
    let mut out: Vec<ToySpeakerSpec> = Vec::with_capacity(n);
    while out.len() < n {
        let fundamental_hz = (rng.gen_range(85f64.ln()..255f64.ln())).exp();
        let formant_centers_hz = vec![
            rng.gen_range(300.0..850.0),
            rng.gen_range(950.0..2300.0),
            rng.gen_range(2400.0..3600.0),
        ];
        let envelope_seed = rng.gen();
        let clash = out.iter().any(|s| {
            s.fundamental_hz == fundamental_hz && s.formant_centers_hz == formant_centers_hz
        });
        if !clash {
            out.push(ToySpeakerSpec {
                speaker_id: out.len() as u32,
                fundamental_hz,
                formant_centers_hz,
                envelope_seed,
            });
        }
    }
    out
}

/// Two-pole resonator with unity gain at DC.
struct Resonator {
    a: f64,
    b: f64,
    c: f64,
    y1: f64,
    y2: f64,
}

impl Resonator {
    fn new() -> Self {
        Resonator {
            a: 1.0,
            b: 0.0,
            c: 0.0,
            y1: 0.0,
            y2: 0.0,
        }
    }

    fn tune(&mut self, freq_hz: f64, bandwidth_hz: f64, fs: f64) {
        let r = (-PI * bandwidth_hz / fs).exp();
        self.c = -r * r;
        self.b = 2.0 * r * (2.0 * PI * freq_hz / fs).cos();
        self.a = 1.0 - self.b - self.c;
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.a * x + self.b * self.y1 + self.c * self.y2;
        self.y2 = self.y1;
        self.y1 = y;
        y
    }
}

/// Vowel targets as multipliers of a speaker's neutral formants. Shared by
/// all speakers, so vowel identity carries no speaker information.
const VOWELS: [[f64; 3]; 6] = [
    [1.0, 1.0, 1.0],
    [1.35, 0.75, 0.95],
    [0.65, 1.3, 1.05],
    [0.7, 0.7, 0.95],
    [1.2, 1.15, 1.0],
    [0.8, 0.95, 1.08],
];

const CHANNEL_EQ_BANDS: usize = 4;
const CHANNEL_EQ_DB: f64 = 15.0;
const CHANNEL_ROOM_PROB: f64 = 0.7;
const CHANNEL_SNR_DB: (f64, f64) = (5.0, 25.0);

/// Peaking equalizer section (direct form I).
struct Biquad {
    b: [f64; 3],
    a: [f64; 2],
    x: [f64; 2],
    y: [f64; 2],
}

impl Biquad {
    fn peaking(center_hz: f64, gain_db: f64, q: f64, fs: f64) -> Self {
        let amp = 10f64.powf(gain_db / 40.0);
        let w = 2.0 * PI * center_hz / fs;
        let alpha = w.sin() / (2.0 * q);
        let a0 = 1.0 + alpha / amp;
        Biquad {
            b: [
                (1.0 + alpha * amp) / a0,
                -2.0 * w.cos() / a0,
                (1.0 - alpha * amp) / a0,
            ],
            a: [-2.0 * w.cos() / a0, (1.0 - alpha / amp) / a0],
            x: [0.0; 2],
            y: [0.0; 2],
        }
    }

    fn step(&mut self, x: f64) -> f64 {
        let y = self.b[0] * x + self.b[1] * self.x[0] + self.b[2] * self.x[1]
            - self.a[0] * self.y[0]
            - self.a[1] * self.y[1];
        self.x = [x, self.x[0]];
        self.y = [y, self.y[0]];
        y
    }
}

fn gauss(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

/// Synthesizes one utterance of `num_samples` samples.
fn synthesize(spk: &ToySpeakerSpec, num_samples: usize, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = f64::from(SAMPLE_RATE_HZ);
    let voice = spk.voice();
    let mut out = vec![0.0; num_samples];
    let mut res: Vec<Resonator> = (0..3).map(|_| Resonator::new()).collect();
    let mut phase = rng.gen_range(0.0..1.0);
    let mut glottal = 0.0;

    let mut pos = rng.gen_range(0..(0.05 * fs) as usize);
    while pos < num_samples {
        let syl_len = ((rng.gen_range(0.12..0.30)) * fs) as usize;
        let pause = ((rng.gen_range(0.02..0.08)) * fs) as usize;
        let f0_start = spk.fundamental_hz * rng.gen_range(0.88..1.12);
        let f0_end = f0_start * rng.gen_range(0.9..1.1);
        let amp = rng.gen_range(0.5..1.0);
        let vowel = VOWELS[rng.gen_range(0..VOWELS.len())];
        for (k, r) in res.iter_mut().enumerate() {
            let f = spk.formant_centers_hz[k] * vowel[k] * rng.gen_range(0.95..1.05);
            r.tune(f, voice.bandwidths_hz[k], fs);
        }
        let end = (pos + syl_len).min(num_samples);
        for (n, slot) in out[pos..end].iter_mut().enumerate() {
            let frac = n as f64 / syl_len as f64;
            let f0 = f0_start + (f0_end - f0_start) * frac;
            phase += f0 / fs;
            let mut src = 0.0;
            if phase >= 1.0 {
                phase -= 1.0;
                src = 1.0;
            }
            // Pulse spectrum tilt.
            glottal = (1.0 - voice.glottal_lowpass) * src + voice.glottal_lowpass * glottal;
            let excitation = glottal + voice.breathiness * gauss(rng);
            let mut y = excitation;
            for r in res.iter_mut() {
                y = r.step(y);
            }
            let env = 0.5 - 0.5 * (2.0 * PI * frac).cos();
            *slot = amp * env * y;
        }
        pos = end + pause;
    }

    // Channel: first-order tilt, a few peaking EQ bands, background noise, gain.
    let tilt = rng.gen_range(-0.6..0.6);
    let mut prev = 0.0;
    for s in out.iter_mut() {
        let x = *s;
        *s = x - tilt * prev;
        prev = x;
    }
    for _ in 0..CHANNEL_EQ_BANDS {
        let center = rng.gen_range(200f64.ln()..6000f64.ln()).exp();
        let gain_db = rng.gen_range(-CHANNEL_EQ_DB..CHANNEL_EQ_DB);
        let q = rng.gen_range(0.7..2.0);
        let mut eq = Biquad::peaking(center, gain_db, q, fs);
        for s in out.iter_mut() {
            *s = eq.step(*s);
        }
    }
    if rng.gen_bool(CHANNEL_ROOM_PROB) {
        let rt60 = rng.gen_range(0.2..0.8);
        let h = room_response(rt60, rng);
        out = crate::dsp::convolve_full(&out, &h);
        out.truncate(num_samples);
    }
    // Colored background noise: white through a random one-pole lowpass.
    let power = out.iter().map(|v| v * v).sum::<f64>() / num_samples as f64;
    let snr_db = rng.gen_range(CHANNEL_SNR_DB.0..CHANNEL_SNR_DB.1);
    let pole = rng.gen_range(0.0..0.95);
    let mut state = 0.0;
    let noise: Vec<f64> = (0..num_samples)
        .map(|_| {
            state = pole * state + gauss(rng);
            state
        })
        .collect();
    let noise_power = noise.iter().map(|v| v * v).sum::<f64>() / num_samples as f64;
    let g = (power / (noise_power * 10f64.powf(snr_db / 10.0))).sqrt();
    for (s, n) in out.iter_mut().zip(&noise) {
        *s += g * n;
    }
    let peak = out.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let gain = rng.gen_range(0.3..0.9) / peak.max(1e-12);
    for s in out.iter_mut() {
        *s *= gain;
    }
    out
}

/// In-memory toy corpus plus the hidden speaker labels.
#[derive(Debug, Clone)]
pub struct ToyCorpus<T> {
    pub speakers: Vec<ToySpeakerSpec>,
    pub utterances: Vec<(String, Waveform<T>)>,
    pub manifest: UtteranceManifest,
    labels: LabelMap,
}

impl<T: Scalar> ToyCorpus<T> {
    /// Speaker labels, for building evaluation trials only.
    pub fn hidden_labels(&self) -> &LabelMap {
        &self.labels
    }

    pub fn store(&self) -> super::MemoryStore<T> {
        super::MemoryStore {
            items: self.utterances.clone(),
        }
    }

    /// Writes `wav/<id>.wav`, `manifest.tsv` and `labels.tsv` under `dir`.
    pub fn write(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir.join("wav"))?;
        for (id, wav) in &self.utterances {
            write_wav(&dir.join("wav").join(format!("{id}.wav")), wav)?;
        }
        self.manifest.write(&dir.join("manifest.tsv"))?;
        self.labels.write(&dir.join("labels.tsv"))?;
        Ok(())
    }
}

/// Synthesizes `utts_per_speaker` utterances for each of `speakers`.
///
/// Utterance ids are opaque (`utt_00000`, ...) and assigned in a shuffled
/// order so they carry no speaker information.
pub fn synthesize_utterances<T: Scalar>(
    speakers: &[ToySpeakerSpec],
    utts_per_speaker: usize,
    utt_duration_s: f64,
    seed: u64,
) -> Result<ToyCorpus<T>> {
    if speakers.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "toy corpus needs at least 2 speakers, got {}",
            speakers.len()
        )));
    }
    if utts_per_speaker == 0 {
        return Err(Error::InvalidArgument("utts_per_speaker must be positive".into()));
    }
    let num_samples = (utt_duration_s * f64::from(SAMPLE_RATE_HZ)).round() as usize;
    let need = 2 * segment_samples(SEGMENT_SECONDS, SAMPLE_RATE_HZ);
    if !(utt_duration_s.is_finite()) || num_samples < need {
        return Err(Error::TooShort {
            have: num_samples,
            need,
        });
    }

    let mut slots: Vec<(usize, usize)> = (0..speakers.len())
        .flat_map(|s| (0..utts_per_speaker).map(move |u| (s, u)))
        .collect();
    slots.shuffle(&mut SeedMix::new(seed).str("toy-ids").rng());

    let mut utterances = Vec::with_capacity(slots.len());
    let mut entries = Vec::with_capacity(slots.len());
    let mut labels = BTreeMap::new();
    for (n, &(s, u)) in slots.iter().enumerate() {
        let spk = &speakers[s];
        let id = format!("utt_{n:05}");
        let mut rng = SeedMix::new(seed)
            .str("toy-utt")
            .int(u64::from(spk.speaker_id))
            .int(spk.envelope_seed)
            .int(u as u64)
            .rng();
        let samples: Vec<T> = synthesize(spk, num_samples, &mut rng)
            .into_iter()
            .map(T::of)
            .collect();
        entries.push(ManifestEntry {
            utterance_id: id.clone(),
            path: format!("wav/{id}.wav").into(),
            duration_s: num_samples as f64 / f64::from(SAMPLE_RATE_HZ),
        });
        labels.insert(id.clone(), spk.speaker_id);
        utterances.push((id, Waveform::from_parts(samples, SAMPLE_RATE_HZ)));
    }
    Ok(ToyCorpus {
        speakers: speakers.to_vec(),
        utterances,
        manifest: UtteranceManifest::new(entries)?,
        labels: LabelMap(labels),
    })
}

/// Generates a fresh toy corpus of `num_speakers × utts_per_speaker` utterances.
pub fn generate_toy_corpus<T: Scalar>(
    num_speakers: usize,
    utts_per_speaker: usize,
    utt_duration_s: f64,
    seed: u64,
) -> Result<ToyCorpus<T>> {
    if num_speakers < 2 {
        return Err(Error::InvalidArgument(format!(
            "toy corpus needs at least 2 speakers, got {num_speakers}"
        )));
    }
    let speakers = toy_speakers(num_speakers, seed);
    synthesize_utterances(&speakers, utts_per_speaker, utt_duration_s, seed)
}

fn normalize_peak(x: &mut [f64], peak: f64) {
    let m = x.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    if m > 0.0 {
        for v in x.iter_mut() {
            *v *= peak / m;
        }
    }
}

/// Synthetic additive-noise clips: white, pink, brown, babble, hum and band noise.
pub fn generate_toy_noises<T: Scalar>(
    count: usize,
    duration_s: f64,
    seed: u64,
) -> Vec<(String, Waveform<T>, String)> {
    let n = (duration_s * f64::from(SAMPLE_RATE_HZ)).round().max(1.0) as usize;
    let fs = f64::from(SAMPLE_RATE_HZ);
    (0..count)
        .map(|k| {
            let mut rng = SeedMix::new(seed).str("toy-noise").int(k as u64).rng();
            let (kind, mut x) = match k % 6 {
                0 => ("noise", (0..n).map(|_| gauss(&mut rng)).collect::<Vec<_>>()),
                1 => {
                    // Paul Kellet's economy pink filter.
                    let (mut b0, mut b1, mut b2) = (0.0, 0.0, 0.0);
                    let x = (0..n)
                        .map(|_| {
                            let w = gauss(&mut rng);
                            b0 = 0.99765 * b0 + w * 0.0990460;
                            b1 = 0.96300 * b1 + w * 0.2965164;
                            b2 = 0.57000 * b2 + w * 1.0526913;
                            b0 + b1 + b2 + w * 0.1848
                        })
                        .collect();
                    ("noise", x)
                }
                2 => {
                    let mut acc = 0.0;
                    let x = (0..n)
                        .map(|_| {
                            acc = 0.995 * acc + 0.1 * gauss(&mut rng);
                            acc
                        })
                        .collect();
                    ("noise", x)
                }
                3 => {
                    let talkers = toy_speakers(rng.gen_range(3..6), rng.gen());
                    let mut x = vec![0.0; n];
                    for t in &talkers {
                        for (a, b) in x.iter_mut().zip(synthesize(t, n, &mut rng)) {
                            *a += b;
                        }
                    }
                    ("babble", x)
                }
                4 => {
                    let base = if rng.gen_bool(0.5) { 50.0 } else { 60.0 };
                    let x = (0..n)
                        .map(|i| {
                            let t = i as f64 / fs;
                            (1..6)
                                .map(|h| (2.0 * PI * base * h as f64 * t).sin() / h as f64)
                                .sum::<f64>()
                                + 0.05 * gauss(&mut rng)
                        })
                        .collect();
                    ("music", x)
                }
                _ => {
                    let mut r = Resonator::new();
                    r.tune(rng.gen_range(500.0..5000.0), rng.gen_range(200.0..800.0), fs);
                    let x = (0..n).map(|_| r.step(gauss(&mut rng))).collect();
                    ("noise", x)
                }
            };
            normalize_peak(&mut x, 0.5);
            let samples = x.into_iter().map(T::of).collect();
            (
                format!("noise_{k:03}"),
                Waveform::from_parts(samples, SAMPLE_RATE_HZ),
                kind.to_string(),
            )
        })
        .collect()
}

/// Synthetic room impulse responses: direct path, a few early reflections and
/// an exponentially decaying diffuse tail.
pub fn generate_toy_rirs<T: Scalar>(count: usize, seed: u64) -> Vec<(String, Waveform<T>)> {
    (0..count)
        .map(|k| {
            let mut rng = SeedMix::new(seed).str("toy-rir").int(k as u64).rng();
            let rt60 = rng.gen_range(0.15..0.6);
            let samples = room_response(rt60, &mut rng).into_iter().map(T::of).collect();
            (format!("rir_{k:03}"), Waveform::from_parts(samples, SAMPLE_RATE_HZ))
        })
        .collect()
}

/// Unit-energy impulse response with the given reverberation time.
fn room_response(rt60: f64, rng: &mut ChaCha8Rng) -> Vec<f64> {
    let fs = f64::from(SAMPLE_RATE_HZ);
    let len = ((rt60 * fs) as usize).min(9600);
    let decay = 6.9 / (rt60 * fs);
    let mut h: Vec<f64> = (0..len)
        .map(|i| 0.3 * gauss(rng) * (-decay * i as f64).exp())
        .collect();
    h[0] = 1.0;
    for _ in 0..4 {
        let d = rng.gen_range(40..(len / 4).max(41));
        if d < len {
            h[d] += rng.gen_range(-0.7..0.7);
        }
    }
    let energy = h.iter().map(|v| v * v).sum::<f64>().sqrt();
    h.iter_mut().for_each(|v| *v /= energy);
    h
}

/// Synthetic noise (5 s clips) and RIR banks ready for augmentation.
pub fn toy_aug_corpora<T: Scalar>(num_noises: usize, num_rirs: usize, seed: u64) -> crate::augment::AugCorpora<T> {
    crate::augment::AugCorpora {
        noises: generate_toy_noises(num_noises, 5.0, seed)
            .into_iter()
            .map(|(id, w, _)| (id, w))
            .collect(),
        rirs: generate_toy_rirs(num_rirs, seed),
    }
}

/// Writes clips as `<subdir>/<id>.wav` and returns the corresponding list.
pub fn write_clips<T: Scalar>(
    dir: &Path,
    subdir: &str,
    clips: &[(String, Waveform<T>, Option<String>)],
) -> Result<ClipManifest> {
    let mut entries = Vec::new();
    for (id, wav, cat) in clips {
        let rel = format!("{subdir}/{id}.wav");
        write_wav(&dir.join(&rel), wav)?;
        entries.push(ClipEntry {
            id: id.clone(),
            path: rel.into(),
            category: cat.clone(),
        });
    }
    Ok(ClipManifest { entries })
}
