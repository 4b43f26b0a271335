//! Embedding extraction, cosine trial scoring, EER and minDCF.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::{AudioStore, Trial, TrialList, Waveform};
use crate::error::{Error, Result};
use crate::features::{logmel, mvn};
use crate::losses::cosine;
use crate::model::SiameseModel;
use crate::scalar::Scalar;

/// Full-utterance embedding in eval mode, without augmentation or cropping.
pub fn extract_embedding<T: Scalar>(model: &SiameseModel<T>, utt: &Waveform<T>) -> Result<Vec<T>> {
    model.embed(&mvn(&logmel(utt)?))
}

/// Embeddings for the store entries whose ids are in `wanted`.
pub fn extract_embeddings<T: Scalar>(
    model: &SiameseModel<T>,
    store: &dyn AudioStore<T>,
    wanted: &BTreeSet<String>,
) -> Result<BTreeMap<String, Vec<T>>> {
    let idx: Vec<usize> = (0..store.len()).filter(|&i| wanted.contains(store.id(i))).collect();
    idx.par_iter()
        .map(|&i| {
            let wav = store.load(i)?;
            Ok((store.id(i).to_string(), extract_embedding(model, &wav)?))
        })
        .collect()
}

pub fn cosine_score<T: Scalar>(e1: &[T], e2: &[T]) -> Result<f64> {
    Ok(cosine(e1, e2)?.f64().clamp(-1.0, 1.0))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScoredTrial {
    pub trial: Trial,
    pub score: f64,
}

/// `<0|1> <utt_a> <utt_b> <score>`
impl fmt::Display for ScoredTrial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {:.8}", self.trial, self.score)
    }
}

pub fn score_trials<T: Scalar>(trials: &TrialList, embeddings: &BTreeMap<String, Vec<T>>) -> Result<Vec<ScoredTrial>> {
    let get = |id: &str| {
        embeddings
            .get(id)
            .ok_or_else(|| Error::InvalidArgument(format!("trial utterance `{id}` has no embedding")))
    };
    trials
        .trials
        .iter()
        .map(|t| {
            Ok(ScoredTrial {
                trial: t.clone(),
                score: cosine_score(get(&t.a)?, get(&t.b)?)?,
            })
        })
        .collect()
}

pub fn write_scores(path: &Path, scored: &[ScoredTrial]) -> Result<()> {
    let text: String = scored.iter().map(|s| format!("{s}\n")).collect();
    std::fs::write(path, text)?;
    Ok(())
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrialScoreSet {
    pub entries: Vec<(bool, f64)>,
}

impl TrialScoreSet {
    pub fn new(entries: Vec<(bool, f64)>) -> Self {
        TrialScoreSet { entries }
    }

    pub fn from_scored(scored: &[ScoredTrial]) -> Self {
        TrialScoreSet {
            entries: scored.iter().map(|s| (s.trial.target, s.score)).collect(),
        }
    }

    pub fn num_targets(&self) -> usize {
        self.entries.iter().filter(|e| e.0).count()
    }

    pub fn num_nontargets(&self) -> usize {
        self.entries.len() - self.num_targets()
    }

    fn check(&self) -> Result<()> {
        if self.entries.iter().any(|e| !e.1.is_finite()) {
            return Err(Error::InvalidArgument("scores must be finite".into()));
        }
        if self.num_targets() == 0 || self.num_nontargets() == 0 {
            return Err(Error::SingleClass);
        }
        Ok(())
    }
}

/// Detection point for "accept when score ≥ threshold".
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OperatingPoint {
    pub threshold: f64,
    pub p_miss: f64,
    pub p_fa: f64,
}

/// One point per distinct score plus the reject-all point at `+∞`, in
/// increasing threshold order.
pub fn operating_points(scores: &TrialScoreSet) -> Result<Vec<OperatingPoint>> {
    scores.check()?;
    let mut sorted = scores.entries.clone();
    sorted.sort_by(|a, b| a.1.total_cmp(&b.1));
    let (nt, nn) = (scores.num_targets() as f64, scores.num_nontargets() as f64);
    let mut points = Vec::new();
    let (mut miss, mut rejected_nontargets) = (0usize, 0usize);
    let mut i = 0;
    while i < sorted.len() {
        let threshold = sorted[i].1;
        points.push(OperatingPoint {
            threshold,
            p_miss: miss as f64 / nt,
            p_fa: (nn - rejected_nontargets as f64) / nn,
        });
        while i < sorted.len() && sorted[i].1 == threshold {
            if sorted[i].0 {
                miss += 1;
            } else {
                rejected_nontargets += 1;
            }
            i += 1;
        }
    }
    points.push(OperatingPoint {
        threshold: f64::INFINITY,
        p_miss: 1.0,
        p_fa: 0.0,
    });
    Ok(points)
}

/// Equal error rate on the ROC polyline, interpolating linearly between the
/// two operating points that bracket `P_miss = P_fa`.
pub fn eer(scores: &TrialScoreSet) -> Result<f64> {
    let pts = operating_points(scores)?;
    let k = pts
        .iter()
        .position(|p| p.p_miss >= p.p_fa)
        .expect("reject-all point has p_miss >= p_fa");
    let p1 = pts[k];
    if p1.p_miss == p1.p_fa || k == 0 {
        return Ok(p1.p_miss);
    }
    let p0 = pts[k - 1];
    let gap0 = p0.p_fa - p0.p_miss;
    let gap1 = p1.p_miss - p1.p_fa;
    let t = gap0 / (gap0 + gap1);
    Ok(p0.p_miss + t * (p1.p_miss - p0.p_miss))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DcfParams {
    pub p_target: f64,
    pub c_miss: f64,
    pub c_fa: f64,
    pub normalized: bool,
}

impl Default for DcfParams {
    fn default() -> Self {
        DcfParams {
            p_target: 0.05,
            c_miss: 1.0,
            c_fa: 1.0,
            normalized: true,
        }
    }
}

impl DcfParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.p_target > 0.0 && self.p_target < 1.0) {
            return Err(Error::InvalidArgument(format!("p_target {} not in (0, 1)", self.p_target)));
        }
        if !(self.c_miss > 0.0 && self.c_fa > 0.0) {
            return Err(Error::InvalidArgument("detection costs must be positive".into()));
        }
        Ok(())
    }

    pub fn cost(&self, p: &OperatingPoint) -> f64 {
        self.c_miss * self.p_target * p.p_miss + self.c_fa * (1.0 - self.p_target) * p.p_fa
    }

    /// Cost of the better of accept-all and reject-all.
    pub fn default_cost(&self) -> f64 {
        (self.c_miss * self.p_target).min(self.c_fa * (1.0 - self.p_target))
    }
}

pub fn min_dcf(scores: &TrialScoreSet, params: &DcfParams) -> Result<f64> {
    params.validate()?;
    let best = operating_points(scores)?
        .iter()
        .map(|p| params.cost(p))
        .fold(f64::INFINITY, f64::min);
    Ok(if params.normalized { best / params.default_cost() } else { best })
}

#[derive(Debug, Clone, PartialEq)]
pub struct EvalReport {
    pub eer: f64,
    pub min_dcf: f64,
    pub dcf: DcfParams,
    pub num_trials: usize,
    pub num_targets: usize,
    pub num_nontargets: usize,
}

impl fmt::Display for EvalReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "EER: {:.2}%", 100.0 * self.eer)?;
        writeln!(f, "minDCF (p_target={}): {:.4}", self.dcf.p_target, self.min_dcf)?;
        write!(
            f,
            "trials: {} ({} target, {} non-target)",
            self.num_trials, self.num_targets, self.num_nontargets
        )
    }
}

pub fn report(scores: &TrialScoreSet, dcf: &DcfParams) -> Result<EvalReport> {
    Ok(EvalReport {
        eer: eer(scores)?,
        min_dcf: min_dcf(scores, dcf)?,
        dcf: *dcf,
        num_trials: scores.entries.len(),
        num_targets: scores.num_targets(),
        num_nontargets: scores.num_nontargets(),
    })
}

/// DET points as CSV: `threshold,p_miss,p_fa`.
pub fn det_csv(points: &[OperatingPoint]) -> String {
    let mut out = String::from("threshold,p_miss,p_fa\n");
    for p in points {
        out.push_str(&format!("{},{},{}\n", p.threshold, p.p_miss, p.p_fa));
    }
    out
}

/// Extracts embeddings for every trial utterance, scores the trials and
/// summarizes them.
pub fn evaluate<T: Scalar>(
    model: &SiameseModel<T>,
    store: &dyn AudioStore<T>,
    trials: &TrialList,
    dcf: &DcfParams,
) -> Result<(EvalReport, Vec<ScoredTrial>)> {
    let wanted: BTreeSet<String> = trials
        .trials
        .iter()
        .flat_map(|t| [t.a.clone(), t.b.clone()])
        .collect();
    let emb = extract_embeddings(model, store, &wanted)?;
    let scored = score_trials(trials, &emb)?;
    let rep = report(&TrialScoreSet::from_scored(&scored), dcf)?;
    Ok((rep, scored))
}
