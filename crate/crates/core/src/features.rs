//! Log-mel filterbanks, per-segment mean/variance normalization and
//! SpecAugment masking. Pipeline order is logmel → mvn → specaug, so a masked
//! cell holds the post-normalization mean (zero).

use std::io::{Read, Write};
use std::sync::OnceLock;

use rand::Rng;
use rustfft::num_complex::Complex;
use serde::{Deserialize, Serialize};

use crate::augment::AugOp;
use crate::corpus::{Waveform, SAMPLE_RATE_HZ};
use crate::dsp::fft_plan;
use crate::error::{Error, Result};
use crate::scalar::{count, Scalar};

pub const NUM_MEL_BINS: usize = 40;
pub const FRAME_LENGTH: usize = 400;
pub const FRAME_SHIFT: usize = 160;
pub const FFT_SIZE: usize = 512;
pub const MEL_LOW_HZ: f64 = 20.0;
pub const MEL_HIGH_HZ: f64 = 7600.0;
pub const LOG_FLOOR: f64 = 1e-6;
pub const VARIANCE_FLOOR: f64 = 1e-8;

const DUMP_MAGIC: &[u8; 4] = b"FBNK";

/// `num_frames × num_bins`, row-major (one row per frame).
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMatrix<T> {
    data: Vec<T>,
    num_frames: usize,
    num_bins: usize,
}

impl<T: Scalar> FeatureMatrix<T> {
    pub fn new(data: Vec<T>, num_frames: usize, num_bins: usize) -> Result<Self> {
        if data.len() != num_frames * num_bins {
            return Err(Error::Dimension {
                expected: num_frames * num_bins,
                got: data.len(),
            });
        }
        Ok(FeatureMatrix {
            data,
            num_frames,
            num_bins,
        })
    }

    pub fn num_frames(&self) -> usize {
        self.num_frames
    }

    pub fn num_bins(&self) -> usize {
        self.num_bins
    }

    pub fn data(&self) -> &[T] {
        &self.data
    }

    pub fn row(&self, t: usize) -> &[T] {
        &self.data[t * self.num_bins..(t + 1) * self.num_bins]
    }

    pub fn get(&self, t: usize, bin: usize) -> T {
        self.data[t * self.num_bins + bin]
    }

    /// Writes the debug dump: 16-byte header (magic, frames, bins, dtype code),
    /// then row-major little-endian values.
    pub fn write_dump<W: Write>(&self, mut w: W) -> Result<()> {
        w.write_all(DUMP_MAGIC)?;
        w.write_all(&(self.num_frames as u32).to_le_bytes())?;
        w.write_all(&(self.num_bins as u32).to_le_bytes())?;
        w.write_all(&T::DTYPE_CODE.to_le_bytes())?;
        for &v in &self.data {
            match T::DTYPE_CODE {
                1 => w.write_all(&(v.f64() as f32).to_le_bytes())?,
                _ => w.write_all(&v.f64().to_le_bytes())?,
            }
        }
        Ok(())
    }

    pub fn read_dump<R: Read>(mut r: R) -> Result<Self> {
        let mut header = [0u8; 16];
        r.read_exact(&mut header)?;
        if &header[..4] != DUMP_MAGIC {
            return Err(Error::InvalidArgument("not a feature dump (bad magic)".into()));
        }
        let word = |i: usize| u32::from_le_bytes(header[i..i + 4].try_into().expect("4 bytes"));
        let (frames, bins, dtype) = (word(4) as usize, word(8) as usize, word(12));
        let mut data = Vec::with_capacity(frames * bins);
        for _ in 0..frames * bins {
            let v = match dtype {
                1 => {
                    let mut b = [0u8; 4];
                    r.read_exact(&mut b)?;
                    f64::from(f32::from_le_bytes(b))
                }
                2 => {
                    let mut b = [0u8; 8];
                    r.read_exact(&mut b)?;
                    f64::from_le_bytes(b)
                }
                other => {
                    return Err(Error::InvalidArgument(format!("unknown dtype code {other}")))
                }
            };
            data.push(T::of(v));
        }
        FeatureMatrix::new(data, frames, bins)
    }
}

pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

pub fn mel_to_hz(mel: f64) -> f64 {
    700.0 * (10f64.powf(mel / 2595.0) - 1.0)
}

/// Center frequency of each triangular filter.
pub fn mel_center_hz(bin: usize) -> f64 {
    let lo = hz_to_mel(MEL_LOW_HZ);
    let hi = hz_to_mel(MEL_HIGH_HZ);
    mel_to_hz(lo + (hi - lo) * (bin + 1) as f64 / (NUM_MEL_BINS + 1) as f64)
}

/// Triangular filter weights, `NUM_MEL_BINS × (FFT_SIZE / 2 + 1)`.
fn mel_weights() -> &'static [f64] {
    static WEIGHTS: OnceLock<Vec<f64>> = OnceLock::new();
    WEIGHTS.get_or_init(|| {
        let n_freq = FFT_SIZE / 2 + 1;
        let lo = hz_to_mel(MEL_LOW_HZ);
        let hi = hz_to_mel(MEL_HIGH_HZ);
        let edges: Vec<f64> = (0..NUM_MEL_BINS + 2)
            .map(|i| lo + (hi - lo) * i as f64 / (NUM_MEL_BINS + 1) as f64)
            .collect();
        let mut w = vec![0.0; NUM_MEL_BINS * n_freq];
        for m in 0..NUM_MEL_BINS {
            let (left, center, right) = (edges[m], edges[m + 1], edges[m + 2]);
            for k in 0..n_freq {
                let mel = hz_to_mel(k as f64 * f64::from(SAMPLE_RATE_HZ) / FFT_SIZE as f64);
                let v = if mel > left && mel <= center {
                    (mel - left) / (center - left)
                } else if mel > center && mel < right {
                    (right - mel) / (right - center)
                } else {
                    0.0
                };
                w[m * n_freq + k] = v;
            }
        }
        w
    })
}

fn hamming() -> &'static [f64] {
    static WINDOW: OnceLock<Vec<f64>> = OnceLock::new();
    WINDOW.get_or_init(|| {
        (0..FRAME_LENGTH)
            .map(|n| {
                0.54 - 0.46 * (2.0 * std::f64::consts::PI * n as f64 / (FRAME_LENGTH - 1) as f64).cos()
            })
            .collect()
    })
}

pub fn num_frames(num_samples: usize) -> Option<usize> {
    (num_samples >= FRAME_LENGTH).then(|| 1 + (num_samples - FRAME_LENGTH) / FRAME_SHIFT)
}

/// 40-bin log-mel energies with 25 ms Hamming frames every 10 ms.
pub fn logmel<T: Scalar>(wav: &Waveform<T>) -> Result<FeatureMatrix<T>> {
    if wav.sample_rate_hz() != SAMPLE_RATE_HZ {
        return Err(Error::SampleRate {
            expected: SAMPLE_RATE_HZ,
            got: wav.sample_rate_hz(),
        });
    }
    let frames = num_frames(wav.len()).ok_or(Error::TooShort {
        have: wav.len(),
        need: FRAME_LENGTH,
    })?;
    let x = wav.samples();
    let window: Vec<T> = hamming().iter().map(|&v| T::of(v)).collect();
    let n_freq = FFT_SIZE / 2 + 1;
    // Each triangle covers a short band; keep only its nonzero span.
    let bands: Vec<(usize, Vec<T>)> = mel_weights()
        .chunks(n_freq)
        .map(|row| {
            let lo = row.iter().position(|&w| w != 0.0).unwrap_or(0);
            let hi = row.iter().rposition(|&w| w != 0.0).map_or(0, |i| i + 1);
            (lo, row[lo..hi.max(lo)].iter().map(|&w| T::of(w)).collect())
        })
        .collect();
    let fft = fft_plan::<T>(FFT_SIZE, false);
    let mut scratch = vec![Complex::new(T::zero(), T::zero()); fft.get_inplace_scratch_len()];
    let floor = T::of(LOG_FLOOR);
    let zero = Complex::new(T::zero(), T::zero());

    let mut buf = vec![zero; FFT_SIZE];
    let mut power = vec![T::zero(); n_freq];
    let mut data = Vec::with_capacity(frames * NUM_MEL_BINS);
    for t in 0..frames {
        let start = t * FRAME_SHIFT;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = if i < FRAME_LENGTH {
                Complex::new(x[start + i] * window[i], T::zero())
            } else {
                zero
            };
        }
        fft.process_with_scratch(&mut buf, &mut scratch);
        for (p, c) in power.iter_mut().zip(&buf) {
            *p = c.norm_sqr();
        }
        for (lo, w) in &bands {
            let e: T = w.iter().zip(&power[*lo..]).map(|(&w, &p)| w * p).sum();
            data.push((e + floor).ln());
        }
    }
    FeatureMatrix::new(data, frames, NUM_MEL_BINS)
}

/// Per-bin mean and variance normalization over time. Bins whose variance is
/// below the floor are only mean-centered.
pub fn mvn<T: Scalar>(feat: &FeatureMatrix<T>) -> FeatureMatrix<T> {
    let (t, b) = (feat.num_frames, feat.num_bins);
    let n = count::<T>(t);
    let mut out = feat.data.clone();
    for bin in 0..b {
        let mean = (0..t).map(|i| feat.data[i * b + bin]).sum::<T>() / n;
        let var = (0..t)
            .map(|i| {
                let d = feat.data[i * b + bin] - mean;
                d * d
            })
            .sum::<T>()
            / n;
        let scale = if var < T::of(VARIANCE_FLOOR) {
            T::one()
        } else {
            T::one() / var.sqrt()
        };
        for i in 0..t {
            out[i * b + bin] = (feat.data[i * b + bin] - mean) * scale;
        }
    }
    FeatureMatrix {
        data: out,
        num_frames: t,
        num_bins: b,
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SpecAugPolicy {
    pub max_freq_mask_bins: usize,
    pub max_time_mask_frames: usize,
    pub num_freq_masks: usize,
    pub num_time_masks: usize,
}

impl Default for SpecAugPolicy {
    fn default() -> Self {
        SpecAugPolicy {
            max_freq_mask_bins: 8,
            max_time_mask_frames: 20,
            num_freq_masks: 1,
            num_time_masks: 1,
        }
    }
}

/// Zeroes `width` mel bins starting at `start`.
pub fn mask_bins<T: Scalar>(feat: &mut FeatureMatrix<T>, start: usize, width: usize) {
    let b = feat.num_bins;
    for t in 0..feat.num_frames {
        for v in &mut feat.data[t * b + start.min(b)..t * b + (start + width).min(b)] {
            *v = T::zero();
        }
    }
}

/// Zeroes `width` frames starting at `start`.
pub fn mask_frames<T: Scalar>(feat: &mut FeatureMatrix<T>, start: usize, width: usize) {
    let b = feat.num_bins;
    let end = (start + width).min(feat.num_frames);
    for v in &mut feat.data[start.min(end) * b..end * b] {
        *v = T::zero();
    }
}

/// Random frequency and time masks. Widths are uniform in `0..=max` (capped
/// at the matrix size) and positions uniform over the valid starts.
pub fn specaug<T: Scalar, R: Rng + ?Sized>(
    feat: &FeatureMatrix<T>,
    policy: &SpecAugPolicy,
    rng: &mut R,
) -> (FeatureMatrix<T>, AugOp) {
    let mut out = feat.clone();
    let mut draw = |max: usize, dim: usize| {
        let w = rng.gen_range(0..=max.min(dim));
        let s = rng.gen_range(0..=dim - w);
        (s, w)
    };
    let freq: Vec<_> = (0..policy.num_freq_masks)
        .map(|_| draw(policy.max_freq_mask_bins, feat.num_bins))
        .collect();
    let time: Vec<_> = (0..policy.num_time_masks)
        .map(|_| draw(policy.max_time_mask_frames, feat.num_frames))
        .collect();
    for &(s, w) in &freq {
        mask_bins(&mut out, s, w);
    }
    for &(s, w) in &time {
        mask_frames(&mut out, s, w);
    }
    (out, AugOp::SpecAug { freq, time })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::seed::SeedMix;
    use rand_distr::StandardNormal;

    fn tone(freq: f64, n: usize) -> Waveform<f64> {
        let s = (0..n)
            .map(|i| (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0).sin())
            .collect();
        Waveform::new(s, SAMPLE_RATE_HZ).unwrap()
    }

    fn random_matrix(t: usize, b: usize, seed: u64) -> FeatureMatrix<f64> {
        let mut rng = SeedMix::new(seed).rng();
        let data = (0..t * b)
            .map(|i| 3.0 * rng.sample::<f64, _>(StandardNormal) + (i % b) as f64)
            .collect();
        FeatureMatrix::new(data, t, b).unwrap()
    }

    #[test]
    fn frame_count_for_segment() {
        let f = logmel(&tone(440.0, 31_200)).unwrap();
        assert_eq!(f.num_frames(), 193);
        assert_eq!(f.num_bins(), 40);
        assert!(logmel(&tone(440.0, 399)).is_err());
        assert_eq!(logmel(&tone(440.0, 400)).unwrap().num_frames(), 1);
    }

    #[test]
    fn silence_hits_log_floor() {
        let f = logmel(&Waveform::new(vec![0.0f64; 1600], SAMPLE_RATE_HZ).unwrap()).unwrap();
        assert!(f.data().iter().all(|&v| v == LOG_FLOOR.ln()));
    }

    #[test]
    fn tone_at_filter_center_selects_that_filter() {
        for bin in [3, 10, 20, 30, 38] {
            let f = logmel(&tone(mel_center_hz(bin), 4000)).unwrap();
            for t in 0..f.num_frames() {
                let row = f.row(t);
                let arg = (0..row.len())
                    .max_by(|&a, &b| row[a].partial_cmp(&row[b]).unwrap())
                    .unwrap();
                assert_eq!(arg, bin, "frame {t}");
            }
        }
    }

    #[test]
    fn one_hop_shift_moves_one_frame() {
        let x: Vec<f64> = (0..8000).map(|i| ((i * 7919) % 997) as f64 / 997.0 - 0.5).collect();
        let a = logmel(&Waveform::new(x[160..].to_vec(), SAMPLE_RATE_HZ).unwrap()).unwrap();
        let b = logmel(&Waveform::new(x, SAMPLE_RATE_HZ).unwrap()).unwrap();
        for t in 0..a.num_frames() {
            for (u, v) in a.row(t).iter().zip(b.row(t + 1)) {
                assert!((u - v).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn mvn_statistics() {
        let f = mvn(&random_matrix(193, 40, 5));
        for bin in 0..40 {
            let col: Vec<f64> = (0..193).map(|t| f.get(t, bin)).collect();
            let m = col.iter().sum::<f64>() / 193.0;
            let v = col.iter().map(|x| (x - m).powi(2)).sum::<f64>() / 193.0;
            assert!(m.abs() < 1e-6);
            assert!((v - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn mvn_idempotent_and_constant() {
        let once = mvn(&random_matrix(50, 8, 2));
        let twice = mvn(&once);
        for (a, b) in once.data().iter().zip(twice.data()) {
            assert!((a - b).abs() < 1e-6);
        }
        let c = FeatureMatrix::new(vec![4.2f64; 30], 10, 3).unwrap();
        assert!(mvn(&c).data().iter().all(|&v| v.abs() < 1e-12));
    }

    #[test]
    fn zero_masks_are_identity() {
        let f = random_matrix(30, 10, 1);
        let policy = SpecAugPolicy {
            max_freq_mask_bins: 0,
            max_time_mask_frames: 0,
            ..SpecAugPolicy::default()
        };
        let (g, _) = specaug(&f, &policy, &mut SeedMix::new(0).rng());
        assert_eq!(f, g);
    }

    #[test]
    fn freq_mask_zeroes_whole_columns() {
        let f = random_matrix(30, 10, 1);
        let mut g = f.clone();
        mask_bins(&mut g, 2, 3);
        for t in 0..30 {
            for bin in 0..10 {
                let want = if (2..5).contains(&bin) { 0.0 } else { f.get(t, bin) };
                assert_eq!(g.get(t, bin), want);
            }
        }
    }

    #[test]
    fn masked_fraction_matches_expectation() {
        let (t, b) = (193usize, 40usize);
        let f = FeatureMatrix::new(vec![1.0f64; t * b], t, b).unwrap();
        let policy = SpecAugPolicy::default();
        let mut rng = SeedMix::new(99).rng();
        let trials = 1000;
        let mut masked = 0usize;
        for _ in 0..trials {
            let (g, _) = specaug(&f, &policy, &mut rng);
            masked += g.data().iter().filter(|&&v| v == 0.0).count();
        }
        let frac = masked as f64 / (trials * t * b) as f64;
        let ef = policy.max_freq_mask_bins as f64 / 2.0 / b as f64;
        let et = policy.max_time_mask_frames as f64 / 2.0 / t as f64;
        let expected = ef + et - ef * et;
        assert!((frac - expected).abs() < 0.02, "{frac} vs {expected}");
    }

    #[test]
    fn dump_roundtrip() {
        let f = random_matrix(7, 40, 3);
        let mut buf = Vec::new();
        f.write_dump(&mut buf).unwrap();
        assert_eq!(buf.len(), 16 + 7 * 40 * 8);
        assert_eq!(&buf[..4], b"FBNK");
        let g = FeatureMatrix::<f64>::read_dump(buf.as_slice()).unwrap();
        assert_eq!(f, g);
    }
}
