use std::collections::{BTreeMap, HashSet};
use std::fmt;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;

use crate::error::{Error, Result};
use crate::seed::SeedMix;

/// Utterance id → speaker id. Used only to construct evaluation trials.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct LabelMap(pub BTreeMap<String, u32>);

impl LabelMap {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for (utt, spk) in &self.0 {
            out.push_str(&format!("{utt}\t{spk}\n"));
        }
        fs::write(path, out)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path)?;
        let mut map = BTreeMap::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let mut parts = line.split('\t');
            let (Some(utt), Some(spk), None) = (parts.next(), parts.next(), parts.next()) else {
                return Err(Error::Parse {
                    path: path.display().to_string(),
                    line: i + 1,
                    msg: "expected `<utterance_id>\\t<speaker_id>`".into(),
                });
            };
            let spk = spk.trim().parse().map_err(|_| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg: format!("bad speaker id `{spk}`"),
            })?;
            if map.insert(utt.trim().to_string(), spk).is_some() {
                return Err(Error::DuplicateId(utt.trim().to_string()));
            }
        }
        Ok(LabelMap(map))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Trial {
    pub target: bool,
    pub a: String,
    pub b: String,
}

impl fmt::Display for Trial {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} {} {}", u8::from(self.target), self.a, self.b)
    }
}

/// Verification trials in `<0|1> <utt_a> <utt_b>` form.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TrialList {
    pub trials: Vec<Trial>,
}

impl TrialList {
    pub fn parse(text: &str, origin: &str) -> Result<Self> {
        let mut trials = Vec::new();
        for (i, line) in text.lines().enumerate() {
            if line.trim().is_empty() {
                continue;
            }
            let err = |msg: &str| Error::Parse {
                path: origin.to_string(),
                line: i + 1,
                msg: msg.to_string(),
            };
            let fields: Vec<&str> = line.split_whitespace().collect();
            if fields.len() != 3 {
                return Err(err("expected `<0|1> <utt_a> <utt_b>`"));
            }
            let target = match fields[0] {
                "1" => true,
                "0" => false,
                _ => return Err(err("label must be 0 or 1")),
            };
            trials.push(Trial {
                target,
                a: fields[1].to_string(),
                b: fields[2].to_string(),
            });
        }
        Ok(TrialList { trials })
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?, &path.display().to_string())
    }

    pub fn to_text(&self) -> String {
        self.trials.iter().map(|t| format!("{t}\n")).collect()
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, self.to_text())?;
        Ok(())
    }

    pub fn num_targets(&self) -> usize {
        self.trials.iter().filter(|t| t.target).count()
    }

    pub fn len(&self) -> usize {
        self.trials.len()
    }

    pub fn is_empty(&self) -> bool {
        self.trials.is_empty()
    }
}

fn key(a: usize, b: usize) -> (usize, usize) {
    (a.min(b), a.max(b))
}

/// Builds `num_trials` distinct trials, half target and half non-target
/// (targets get the extra one when odd). No trial pairs an utterance with itself.
pub fn build_trial_list(labels: &LabelMap, num_trials: usize, seed: u64) -> Result<TrialList> {
    let utts: Vec<(&String, u32)> = labels.0.iter().map(|(u, &s)| (u, s)).collect();
    let mut by_speaker: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, (_, s)) in utts.iter().enumerate() {
        by_speaker.entry(*s).or_default().push(i);
    }
    if by_speaker.len() < 2 {
        return Err(Error::Insufficient(format!(
            "trial construction needs at least 2 speakers, found {}",
            by_speaker.len()
        )));
    }
    let n_target = num_trials.div_ceil(2);
    let n_non = num_trials / 2;

    let target_pool: Vec<(usize, usize)> = by_speaker
        .values()
        .flat_map(|v| {
            v.iter()
                .enumerate()
                .flat_map(move |(i, &a)| v[i + 1..].iter().map(move |&b| (a, b)))
        })
        .collect();
    let total_pairs = utts.len() * (utts.len() - 1) / 2;
    let non_available = total_pairs - target_pool.len();
    if target_pool.len() < n_target {
        return Err(Error::Insufficient(format!(
            "requested {n_target} target trials but only {} same-speaker pairs exist",
            target_pool.len()
        )));
    }
    if non_available < n_non {
        return Err(Error::Insufficient(format!(
            "requested {n_non} non-target trials but only {non_available} cross-speaker pairs exist"
        )));
    }

    let mut rng = SeedMix::new(seed).str("trials").rng();
    let mut pairs: Vec<(bool, usize, usize)> = target_pool
        .choose_multiple(&mut rng, n_target)
        .map(|&(a, b)| (true, a, b))
        .collect();

    if n_non * 2 > non_available {
        let mut pool = Vec::with_capacity(non_available);
        for a in 0..utts.len() {
            for b in a + 1..utts.len() {
                if utts[a].1 != utts[b].1 {
                    pool.push((a, b));
                }
            }
        }
        pairs.extend(
            pool.choose_multiple(&mut rng, n_non)
                .map(|&(a, b)| (false, a, b)),
        );
    } else {
        let mut seen = HashSet::new();
        while seen.len() < n_non {
            let a = rng.gen_range(0..utts.len());
            let b = rng.gen_range(0..utts.len());
            if utts[a].1 != utts[b].1 && seen.insert(key(a, b)) {
                pairs.push((false, a, b));
            }
        }
    }

    pairs.shuffle(&mut rng);
    let trials = pairs
        .into_iter()
        .map(|(target, a, b)| {
            let (a, b) = if rng.gen_bool(0.5) { (a, b) } else { (b, a) };
            Trial {
                target,
                a: utts[a].0.clone(),
                b: utts[b].0.clone(),
            }
        })
        .collect();
    Ok(TrialList { trials })
}
