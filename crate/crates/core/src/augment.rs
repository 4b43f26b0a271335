//! Online waveform augmentation and positive-pair cropping.

use std::f64::consts::PI;
use std::fmt;
use std::ops::Range;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::corpus::{segment_samples, Waveform};
use crate::dsp::convolve_full;
use crate::error::{Error, Result};
use crate::features::SpecAugPolicy;
use crate::scalar::Scalar;

/// One augmentation decision, recorded for audit.
#[derive(Debug, Clone, PartialEq)]
pub enum AugOp {
    Speed { factor: f64 },
    Reverb { rir_id: String },
    Noise { noise_id: String, snr_db: f64, offset: usize },
    /// Applied to features; each mask is `(start, width)`.
    SpecAug { freq: Vec<(usize, usize)>, time: Vec<(usize, usize)> },
}

impl fmt::Display for AugOp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AugOp::Speed { factor } => write!(f, "speed={factor}"),
            AugOp::Reverb { rir_id } => write!(f, "reverb={rir_id}"),
            AugOp::Noise {
                noise_id,
                snr_db,
                offset,
            } => write!(f, "noise={noise_id},snr={snr_db},offset={offset}"),
            AugOp::SpecAug { freq, time } => {
                let masks: Vec<String> = freq
                    .iter()
                    .map(|(s, w)| format!("f:{s}+{w}"))
                    .chain(time.iter().map(|(s, w)| format!("t:{s}+{w}")))
                    .collect();
                write!(f, "specaug={}", masks.join(","))
            }
        }
    }
}

fn bad(token: &str) -> Error {
    Error::InvalidArgument(format!("malformed augmentation record `{token}`"))
}

impl FromStr for AugOp {
    type Err = Error;

    fn from_str(token: &str) -> Result<Self> {
        let (op, params) = token.split_once('=').ok_or_else(|| bad(token))?;
        match op {
            "speed" => Ok(AugOp::Speed {
                factor: params.parse().map_err(|_| bad(token))?,
            }),
            "reverb" if !params.is_empty() => Ok(AugOp::Reverb {
                rir_id: params.to_string(),
            }),
            "noise" => {
                let mut parts = params.split(',');
                let id = parts.next().filter(|s| !s.is_empty()).ok_or_else(|| bad(token))?;
                let mut field = |name: &str| {
                    parts
                        .next()
                        .and_then(|p| p.strip_prefix(name))
                        .ok_or_else(|| bad(token))
                        .map(str::to_string)
                };
                let snr_db = field("snr=")?.parse().map_err(|_| bad(token))?;
                let offset = field("offset=")?.parse().map_err(|_| bad(token))?;
                Ok(AugOp::Noise {
                    noise_id: id.to_string(),
                    snr_db,
                    offset,
                })
            }
            "specaug" => {
                let (mut freq, mut time) = (Vec::new(), Vec::new());
                for m in params.split(',').filter(|m| !m.is_empty()) {
                    let (axis, rest) = m.split_once(':').ok_or_else(|| bad(token))?;
                    let (s, w) = rest.split_once('+').ok_or_else(|| bad(token))?;
                    let mask = (
                        s.parse().map_err(|_| bad(token))?,
                        w.parse().map_err(|_| bad(token))?,
                    );
                    match axis {
                        "f" => freq.push(mask),
                        "t" => time.push(mask),
                        _ => return Err(bad(token)),
                    }
                }
                Ok(AugOp::SpecAug { freq, time })
            }
            _ => Err(bad(token)),
        }
    }
}

/// Which segment of a pair an op log belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Side {
    A,
    B,
}

/// Line-oriented audit record: `<utt_id> <a|b> <op>=<params>...`.
#[derive(Debug, Clone, PartialEq)]
pub struct OpLogLine {
    pub utterance_id: String,
    pub side: Side,
    pub ops: Vec<AugOp>,
}

impl fmt::Display for OpLogLine {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let side = match self.side {
            Side::A => "a",
            Side::B => "b",
        };
        write!(f, "{} {side}", self.utterance_id)?;
        for op in &self.ops {
            write!(f, " {op}")?;
        }
        Ok(())
    }
}

impl FromStr for OpLogLine {
    type Err = Error;

    fn from_str(line: &str) -> Result<Self> {
        let mut tokens = line.split_whitespace();
        let utterance_id = tokens.next().ok_or_else(|| bad(line))?.to_string();
        let side = match tokens.next() {
            Some("a") => Side::A,
            Some("b") => Side::B,
            _ => return Err(bad(line)),
        };
        let ops = tokens.map(str::parse).collect::<Result<Vec<_>>>()?;
        Ok(OpLogLine {
            utterance_id,
            side,
            ops,
        })
    }
}

/// Two non-overlapping segments of one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentPair<T> {
    pub seg_a: Waveform<T>,
    pub seg_b: Waveform<T>,
    pub source_utterance_id: String,
    /// Sample ranges in the source utterance.
    pub range_a: Range<usize>,
    pub range_b: Range<usize>,
    pub ops_a: Vec<AugOp>,
    pub ops_b: Vec<AugOp>,
}

impl<T> SegmentPair<T> {
    pub fn log_lines(&self) -> [OpLogLine; 2] {
        [
            OpLogLine {
                utterance_id: self.source_utterance_id.clone(),
                side: Side::A,
                ops: self.ops_a.clone(),
            },
            OpLogLine {
                utterance_id: self.source_utterance_id.clone(),
                side: Side::B,
                ops: self.ops_b.clone(),
            },
        ]
    }
}

/// Crops two disjoint segments of `segment_s` seconds, uniformly placed.
pub fn crop_pair<T: Scalar, R: Rng + ?Sized>(
    utt: &Waveform<T>,
    utterance_id: &str,
    segment_s: f64,
    rng: &mut R,
) -> Result<SegmentPair<T>> {
    let len = segment_samples(segment_s, utt.sample_rate_hz());
    if len == 0 {
        return Err(Error::InvalidArgument("segment length must be positive".into()));
    }
    if utt.len() < 2 * len {
        return Err(Error::TooShort {
            have: utt.len(),
            need: 2 * len,
        });
    }
    let slack = utt.len() - 2 * len;
    let x = rng.gen_range(0..=slack);
    let y = rng.gen_range(0..=slack);
    let (lo, hi) = (x.min(y), x.max(y));
    let mut first = lo..lo + len;
    let mut second = hi + len..hi + 2 * len;
    if rng.gen_bool(0.5) {
        std::mem::swap(&mut first, &mut second);
    }
    Ok(SegmentPair {
        seg_a: utt.slice(first.clone()),
        seg_b: utt.slice(second.clone()),
        source_utterance_id: utterance_id.to_string(),
        range_a: first,
        range_b: second,
        ops_a: Vec::new(),
        ops_b: Vec::new(),
    })
}

fn check_rate<T: Scalar>(a: &Waveform<T>, b: &Waveform<T>) -> Result<()> {
    if a.sample_rate_hz() != b.sample_rate_hz() {
        return Err(Error::SampleRate {
            expected: a.sample_rate_hz(),
            got: b.sample_rate_hz(),
        });
    }
    Ok(())
}

/// Convolves with a room impulse response, truncates to the input length and
/// rescales to the input's peak.
pub fn reverberate<T: Scalar>(wav: &Waveform<T>, rir: &Waveform<T>) -> Result<Waveform<T>> {
    check_rate(wav, rir)?;
    let mut out = convolve_full(wav.samples(), rir.samples());
    out.truncate(wav.len());
    let out = Waveform::from_parts(out, wav.sample_rate_hz());
    let (peak_in, peak_out) = (wav.peak(), out.peak());
    if peak_out > T::zero() {
        let g = peak_in / peak_out;
        return Ok(Waveform::from_parts(
            out.samples().iter().map(|&s| s * g).collect(),
            out.sample_rate_hz(),
        ));
    }
    Ok(out)
}

/// Adds `noise` (tiled from `offset`) scaled so the clean-to-noise power ratio
/// over the mixed region equals `snr_db`.
pub fn mix_noise_at<T: Scalar>(
    clean: &Waveform<T>,
    noise: &Waveform<T>,
    snr_db: f64,
    offset: usize,
) -> Result<Waveform<T>> {
    check_rate(clean, noise)?;
    if !snr_db.is_finite() {
        return Err(Error::InvalidArgument(format!("snr must be finite, got {snr_db}")));
    }
    let p_clean = clean.power();
    if p_clean <= T::zero() {
        return Err(Error::Silent);
    }
    let ns = noise.samples();
    let tiled: Vec<T> = (0..clean.len()).map(|i| ns[(offset + i) % ns.len()]).collect();
    let p_noise = crate::corpus::mean_square(&tiled);
    if p_noise <= T::zero() {
        return Err(Error::Silent);
    }
    let gain = (p_clean / (p_noise * T::of(10f64.powf(snr_db / 10.0)))).sqrt();
    let mixed = clean
        .samples()
        .iter()
        .zip(&tiled)
        .map(|(&c, &n)| c + gain * n)
        .collect();
    Ok(Waveform::from_parts(mixed, clean.sample_rate_hz()))
}

/// [`mix_noise_at`] with a random start offset into the noise clip.
pub fn mix_noise<T: Scalar, R: Rng + ?Sized>(
    clean: &Waveform<T>,
    noise: &Waveform<T>,
    snr_db: f64,
    rng: &mut R,
) -> Result<Waveform<T>> {
    let offset = rng.gen_range(0..noise.len());
    mix_noise_at(clean, noise, snr_db, offset)
}

const SINC_HALF_WIDTH: f64 = 16.0;

/// Resampling-based speed change: tempo and pitch scale together. The output
/// has `round(len / factor)` samples.
pub fn speed_perturb<T: Scalar>(wav: &Waveform<T>, factor: f64) -> Result<Waveform<T>> {
    if !(factor > 0.0 && factor.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "speed factor must be positive, got {factor}"
        )));
    }
    if factor == 1.0 {
        return Ok(wav.clone());
    }
    let x = wav.samples();
    let out_len = ((x.len() as f64 / factor).round() as usize).max(1);
    // Low-pass at the new Nyquist when compressing.
    let cutoff = (1.0 / factor).min(1.0);
    let half = SINC_HALF_WIDTH / cutoff;
    let out = (0..out_len)
        .map(|i| {
            let t = i as f64 * factor;
            let lo = (t - half).ceil().max(0.0) as usize;
            let hi = ((t + half).floor() as usize).min(x.len() - 1);
            let mut acc = 0.0;
            for (k, xk) in x.iter().enumerate().take(hi + 1).skip(lo) {
                let d = t - k as f64;
                let arg = cutoff * d;
                let sinc = if arg.abs() < 1e-12 {
                    1.0
                } else {
                    (PI * arg).sin() / (PI * arg)
                };
                let window = 0.5 + 0.5 * (PI * d / half).cos();
                acc += xk.f64() * cutoff * sinc * window;
            }
            T::of(acc)
        })
        .collect();
    Ok(Waveform::from_parts(out, wav.sample_rate_hz()))
}

/// The six augmentation recipes compared in the ablation table.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(try_from = "u8", into = "u8")]
pub enum Strategy {
    NoAug = 1,
    Reverb = 2,
    Noise = 3,
    ReverbNoise = 4,
    ReverbNoiseSpecAug = 5,
    ReverbNoiseSpeedSpecAug = 6,
}

impl TryFrom<u8> for Strategy {
    type Error = Error;

    fn try_from(v: u8) -> Result<Self> {
        Ok(match v {
            1 => Strategy::NoAug,
            2 => Strategy::Reverb,
            3 => Strategy::Noise,
            4 => Strategy::ReverbNoise,
            5 => Strategy::ReverbNoiseSpecAug,
            6 => Strategy::ReverbNoiseSpeedSpecAug,
            _ => {
                return Err(Error::InvalidArgument(format!(
                    "augmentation strategy must be 1-6, got {v}"
                )))
            }
        })
    }
}

impl From<Strategy> for u8 {
    fn from(s: Strategy) -> u8 {
        s as u8
    }
}

impl Strategy {
    pub fn label(self) -> &'static str {
        match self {
            Strategy::NoAug => "No Aug",
            Strategy::Reverb => "R",
            Strategy::Noise => "N",
            Strategy::ReverbNoise => "R + N",
            Strategy::ReverbNoiseSpecAug => "R + N + SpecAug",
            Strategy::ReverbNoiseSpeedSpecAug => "R + N + SpecAug + Speed",
        }
    }

    pub fn policy(self) -> AugmentationPolicy {
        let (reverb, noise, speed, specaug) = match self {
            Strategy::NoAug => (false, false, false, false),
            Strategy::Reverb => (true, false, false, false),
            Strategy::Noise => (false, true, false, false),
            Strategy::ReverbNoise => (true, true, false, false),
            Strategy::ReverbNoiseSpecAug => (true, true, false, true),
            Strategy::ReverbNoiseSpeedSpecAug => (true, true, true, true),
        };
        AugmentationPolicy {
            reverb_enabled: reverb,
            noise_enabled: noise,
            speed_enabled: speed,
            specaug: specaug.then(SpecAugPolicy::default),
            ..AugmentationPolicy::none()
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AugmentationPolicy {
    pub reverb_enabled: bool,
    pub noise_enabled: bool,
    pub speed_enabled: bool,
    pub specaug: Option<SpecAugPolicy>,
    pub snr_db_range: (f64, f64),
    pub speed_factors: Vec<f64>,
    pub p_reverb: f64,
    pub p_noise: f64,
    pub p_speed: f64,
    pub p_specaug: f64,
}

impl Default for AugmentationPolicy {
    fn default() -> Self {
        Strategy::ReverbNoise.policy()
    }
}

impl AugmentationPolicy {
    pub fn none() -> Self {
        AugmentationPolicy {
            reverb_enabled: false,
            noise_enabled: false,
            speed_enabled: false,
            specaug: None,
            snr_db_range: (3.0, 15.0),
            speed_factors: vec![0.9, 1.0, 1.1],
            p_reverb: 1.0,
            p_noise: 1.0,
            p_speed: 0.5,
            p_specaug: 0.5,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.snr_db_range;
        if !(lo.is_finite() && hi.is_finite() && lo <= hi) {
            return Err(Error::InvalidArgument(format!(
                "snr range ({lo}, {hi}) must be finite with low <= high"
            )));
        }
        if self.speed_enabled && self.speed_factors.is_empty() {
            return Err(Error::InvalidArgument("speed factors must not be empty".into()));
        }
        if self.speed_factors.iter().any(|&f| !(f > 0.0 && f.is_finite())) {
            return Err(Error::InvalidArgument("speed factors must be positive".into()));
        }
        for (name, p) in [
            ("p_reverb", self.p_reverb),
            ("p_noise", self.p_noise),
            ("p_speed", self.p_speed),
            ("p_specaug", self.p_specaug),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("{name} = {p} is not in [0, 1]")));
            }
        }
        Ok(())
    }
}

/// Noise and RIR clips available to the augmenter.
#[derive(Debug, Clone, Default)]
pub struct AugCorpora<T> {
    pub noises: Vec<(String, Waveform<T>)>,
    pub rirs: Vec<(String, Waveform<T>)>,
}

impl<T: Scalar> AugCorpora<T> {
    pub fn check(&self, policy: &AugmentationPolicy) -> Result<()> {
        if policy.reverb_enabled && policy.p_reverb > 0.0 && self.rirs.is_empty() {
            return Err(Error::InvalidArgument("reverberation enabled but RIR corpus is empty".into()));
        }
        if policy.noise_enabled && policy.p_noise > 0.0 && self.noises.is_empty() {
            return Err(Error::InvalidArgument("additive noise enabled but noise corpus is empty".into()));
        }
        Ok(())
    }
}

/// Fits a waveform back to `len` samples: random crop when longer, cyclic
/// extension when shorter.
fn refit<T: Scalar, R: Rng + ?Sized>(wav: Waveform<T>, len: usize, rng: &mut R) -> Waveform<T> {
    use std::cmp::Ordering;
    match wav.len().cmp(&len) {
        Ordering::Equal => wav,
        Ordering::Greater => {
            let start = rng.gen_range(0..=wav.len() - len);
            wav.slice(start..start + len)
        }
        Ordering::Less => {
            let s = wav.samples();
            let out = (0..len).map(|i| s[i % s.len()]).collect();
            Waveform::from_parts(out, wav.sample_rate_hz())
        }
    }
}

fn augment_one<T: Scalar, R: Rng + ?Sized>(
    seg: &Waveform<T>,
    policy: &AugmentationPolicy,
    corpora: &AugCorpora<T>,
    rng: &mut R,
) -> Result<(Waveform<T>, Vec<AugOp>)> {
    let mut ops = Vec::new();
    let mut wav = seg.clone();
    let target_len = seg.len();

    if policy.speed_enabled && rng.gen_bool(policy.p_speed) {
        let factor = *policy
            .speed_factors
            .choose(rng)
            .expect("validated non-empty");
        wav = refit(speed_perturb(&wav, factor)?, target_len, rng);
        ops.push(AugOp::Speed { factor });
    }
    if policy.reverb_enabled && rng.gen_bool(policy.p_reverb) {
        let (id, rir) = corpora.rirs.choose(rng).expect("checked non-empty");
        wav = reverberate(&wav, rir)?;
        ops.push(AugOp::Reverb { rir_id: id.clone() });
    }
    if policy.noise_enabled && rng.gen_bool(policy.p_noise) {
        let (id, noise) = corpora.noises.choose(rng).expect("checked non-empty");
        let (lo, hi) = policy.snr_db_range;
        let snr_db = if lo == hi { lo } else { rng.gen_range(lo..=hi) };
        let offset = rng.gen_range(0..noise.len());
        wav = mix_noise_at(&wav, noise, snr_db, offset)?;
        ops.push(AugOp::Noise {
            noise_id: id.clone(),
            snr_db,
            offset,
        });
    }
    let peak = wav.peak();
    if peak > T::one() {
        let g = T::one() / peak;
        wav = Waveform::from_parts(wav.samples().iter().map(|&s| s * g).collect(), wav.sample_rate_hz());
    }
    Ok((wav, ops))
}

/// Independently augments both segments of a pair and records every choice.
///
/// SpecAugment is not applied here; it acts on features (see
/// [`crate::features::specaug`]).
pub fn apply_policy<T: Scalar, R: Rng + ?Sized>(
    pair: &SegmentPair<T>,
    policy: &AugmentationPolicy,
    corpora: &AugCorpora<T>,
    rng: &mut R,
) -> Result<SegmentPair<T>> {
    policy.validate()?;
    corpora.check(policy)?;
    let (seg_a, mut ops_a) = augment_one(&pair.seg_a, policy, corpora, rng)?;
    let (seg_b, mut ops_b) = augment_one(&pair.seg_b, policy, corpora, rng)?;
    let mut out_a = pair.ops_a.clone();
    out_a.append(&mut ops_a);
    let mut out_b = pair.ops_b.clone();
    out_b.append(&mut ops_b);
    Ok(SegmentPair {
        seg_a,
        seg_b,
        source_utterance_id: pair.source_utterance_id.clone(),
        range_a: pair.range_a.clone(),
        range_b: pair.range_b.clone(),
        ops_a: out_a,
        ops_b: out_b,
    })
}
