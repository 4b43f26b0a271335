use rand::seq::index;
use rand::Rng;
use rayon::prelude::*;

use crate::augment::{apply_policy, crop_pair, AugCorpora, AugmentationPolicy, SegmentPair};
use crate::corpus::{segment_samples, AudioStore};
use crate::error::{Error, Result};
use crate::features::{logmel, mvn, specaug, FeatureMatrix};
use crate::scalar::Scalar;
use crate::seed::SeedMix;

/// What a batch needs besides the audio.
#[derive(Debug, Clone)]
pub struct BatchSpec<'a> {
    pub batch_utterances: usize,
    pub segment_s: f64,
    pub seed: u64,
    pub policy: &'a AugmentationPolicy,
}

/// `M` augmented positive pairs and their normalized features.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub step: usize,
    pub pairs: Vec<SegmentPair<T>>,
    pub feats_a: Vec<FeatureMatrix<T>>,
    pub feats_b: Vec<FeatureMatrix<T>>,
    /// Utterances drawn but too short to crop.
    pub skipped: Vec<String>,
}

impl<T> Batch<T> {
    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// One op-log line per segment.
    pub fn op_log(&self) -> String {
        self.pairs
            .iter()
            .flat_map(|p| p.log_lines())
            .map(|l| format!("{l}\n"))
            .collect()
    }
}

/// Randomness for one utterance at one step. Deriving it from the context
/// instead of threading a shared generator keeps batches reproducible under
/// parallel assembly and across checkpoint/resume.
pub fn utterance_rng(seed: u64, utterance_id: &str, step: usize) -> rand_chacha::ChaCha8Rng {
    SeedMix::new(seed)
        .str("augment")
        .str(utterance_id)
        .int(step as u64)
        .rng()
}

/// Crops, augments and featurizes one pair. SpecAug, when enabled, is
/// drawn independently for each segment.
pub fn make_pair<T: Scalar, R: Rng + ?Sized>(
    utt: &crate::corpus::Waveform<T>,
    utterance_id: &str,
    spec: &BatchSpec<'_>,
    corpora: &AugCorpora<T>,
    rng: &mut R,
) -> Result<(SegmentPair<T>, FeatureMatrix<T>, FeatureMatrix<T>)> {
    let pair = crop_pair(utt, utterance_id, spec.segment_s, rng)?;
    let mut pair = apply_policy(&pair, spec.policy, corpora, rng)?;
    let mut fa = mvn(&logmel(&pair.seg_a)?);
    let mut fb = mvn(&logmel(&pair.seg_b)?);
    if let Some(sa) = &spec.policy.specaug {
        for (feat, ops) in [(&mut fa, &mut pair.ops_a), (&mut fb, &mut pair.ops_b)] {
            if rng.gen_bool(spec.policy.p_specaug) {
                let (masked, op) = specaug(feat, sa, rng);
                *feat = masked;
                ops.push(op);
            }
        }
    }
    Ok((pair, fa, fb))
}

/// Draws `M` distinct utterances without labels and turns each into a
/// featurized positive pair. Utterances too short for two segments are
/// skipped (with a warning) and replaced by the next draw.
pub fn build_batch<T: Scalar>(
    store: &dyn AudioStore<T>,
    corpora: &AugCorpora<T>,
    spec: &BatchSpec<'_>,
    step: usize,
) -> Result<Batch<T>> {
    let m = spec.batch_utterances;
    if m == 0 {
        return Err(Error::InvalidArgument("batch size must be positive".into()));
    }
    let n = store.len();
    let mut rng = SeedMix::new(spec.seed).str("batch").int(step as u64).rng();
    let order = index::sample(&mut rng, n, n);
    let sr = crate::corpus::SAMPLE_RATE_HZ;
    let need = 2 * segment_samples(spec.segment_s, sr);
    let mut chosen = Vec::with_capacity(m);
    let mut skipped = Vec::new();
    for i in order.iter() {
        if chosen.len() == m {
            break;
        }
        let len = store.load(i)?.len();
        if len < need {
            log::warn!("skipping {} ({len} samples, need {need})", store.id(i));
            skipped.push(store.id(i).to_string());
            continue;
        }
        chosen.push(i);
    }
    if chosen.len() < m {
        return Err(Error::Insufficient(format!(
            "corpus exhausted: {} croppable utterances, batch needs {m}",
            chosen.len()
        )));
    }
    let built: Vec<_> = chosen
        .par_iter()
        .map(|&i| {
            let id = store.id(i);
            let wav = store.load(i)?;
            make_pair(&wav, id, spec, corpora, &mut utterance_rng(spec.seed, id, step))
        })
        .collect::<Result<_>>()?;
    let mut batch = Batch {
        step,
        pairs: Vec::with_capacity(m),
        feats_a: Vec::with_capacity(m),
        feats_b: Vec::with_capacity(m),
        skipped,
    };
    for (p, a, b) in built {
        batch.pairs.push(p);
        batch.feats_a.push(a);
        batch.feats_b.push(b);
    }
    Ok(batch)
}
