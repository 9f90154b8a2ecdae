//! Corpus handling: manifests, lexicons, parallel dictionaries,
//! speaker-disjoint splitting and the synthetic two-dialect generator.

mod lexicon;
mod parallel;
pub mod synth;
pub mod wav;

use std::collections::{BTreeMap, BTreeSet, HashSet};
use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub use lexicon::{merge_lexicons, Lexicon, LexiconTag, PhoneInventory, Pronunciation};
pub use parallel::{
    build_parallel_dictionary, load_override_table, load_rule_table, ParallelDictionary,
    ParallelSource, RewriteRule,
};

/// One of the two dialect classes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum DialectLabel {
    #[serde(rename = "LT")]
    Lt,
    #[serde(rename = "CT")]
    Ct,
}

impl DialectLabel {
    pub const ALL: [DialectLabel; 2] = [DialectLabel::Lt, DialectLabel::Ct];

    pub fn as_str(self) -> &'static str {
        match self {
            DialectLabel::Lt => "LT",
            DialectLabel::Ct => "CT",
        }
    }

    pub fn other(self) -> DialectLabel {
        match self {
            DialectLabel::Lt => DialectLabel::Ct,
            DialectLabel::Ct => DialectLabel::Lt,
        }
    }

    pub fn index(self) -> usize {
        match self {
            DialectLabel::Lt => 0,
            DialectLabel::Ct => 1,
        }
    }
}

impl fmt::Display for DialectLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for DialectLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim().to_ascii_uppercase().as_str() {
            "LT" => Ok(DialectLabel::Lt),
            "CT" => Ok(DialectLabel::Ct),
            _ => Err(Error::UnknownDialect(s.to_string())),
        }
    }
}

/// Which dialect(s) a word or phone belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Membership {
    #[serde(rename = "LT")]
    Lt,
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "BOTH")]
    Both,
}

impl Membership {
    pub fn includes(self, dialect: DialectLabel) -> bool {
        matches!(
            (self, dialect),
            (Membership::Both, _)
                | (Membership::Lt, DialectLabel::Lt)
                | (Membership::Ct, DialectLabel::Ct)
        )
    }

    pub fn union(self, other: Membership) -> Membership {
        if self == other {
            self
        } else {
            Membership::Both
        }
    }

    pub fn single(self) -> Option<DialectLabel> {
        match self {
            Membership::Lt => Some(DialectLabel::Lt),
            Membership::Ct => Some(DialectLabel::Ct),
            Membership::Both => None,
        }
    }
}

impl From<DialectLabel> for Membership {
    fn from(d: DialectLabel) -> Self {
        match d {
            DialectLabel::Lt => Membership::Lt,
            DialectLabel::Ct => Membership::Ct,
        }
    }
}

impl fmt::Display for Membership {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Membership::Lt => "LT",
            Membership::Ct => "CT",
            Membership::Both => "BOTH",
        })
    }
}

/// A value per dialect.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DialectPair<T> {
    pub lt: T,
    pub ct: T,
}

impl<T> DialectPair<T> {
    pub fn new(lt: T, ct: T) -> Self {
        DialectPair { lt, ct }
    }

    pub fn get(&self, dialect: DialectLabel) -> &T {
        match dialect {
            DialectLabel::Lt => &self.lt,
            DialectLabel::Ct => &self.ct,
        }
    }

    pub fn get_mut(&mut self, dialect: DialectLabel) -> &mut T {
        match dialect {
            DialectLabel::Lt => &mut self.lt,
            DialectLabel::Ct => &mut self.ct,
        }
    }

    pub fn map<U>(&self, mut f: impl FnMut(DialectLabel, &T) -> U) -> DialectPair<U> {
        DialectPair {
            lt: f(DialectLabel::Lt, &self.lt),
            ct: f(DialectLabel::Ct, &self.ct),
        }
    }

    pub fn try_map<U, E>(
        &self,
        mut f: impl FnMut(DialectLabel, &T) -> std::result::Result<U, E>,
    ) -> std::result::Result<DialectPair<U>, E> {
        Ok(DialectPair {
            lt: f(DialectLabel::Lt, &self.lt)?,
            ct: f(DialectLabel::Ct, &self.ct)?,
        })
    }
}

/// One line of a corpus manifest.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct UtteranceRecord {
    pub utt_id: String,
    pub audio_path: PathBuf,
    pub dialect: DialectLabel,
    pub speaker_id: String,
    pub transcript: Vec<String>,
}

impl UtteranceRecord {
    /// Audio path, resolved against `base` when it is relative.
    pub fn resolve_audio(&self, base: &Path) -> PathBuf {
        if self.audio_path.is_absolute() {
            self.audio_path.clone()
        } else {
            base.join(&self.audio_path)
        }
    }
}

/// Parses manifest text. `origin` is only used for error messages.
pub fn parse_manifest(text: &str, origin: &Path) -> Result<Vec<UtteranceRecord>> {
    let mut records = Vec::new();
    let mut seen = HashSet::new();
    for (idx, raw) in text.lines().enumerate() {
        let line_no = idx + 1;
        let line = raw.trim_end_matches(['\r', ' ']);
        if line.trim().is_empty() || line.trim_start().starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if !(4..=5).contains(&fields.len()) {
            return Err(Error::parse(
                origin,
                line_no,
                format!("expected 5 tab-separated fields, found {}", fields.len()),
            ));
        }
        let utt_id = fields[0].trim();
        let speaker = fields[3].trim();
        if utt_id.is_empty() || fields[1].trim().is_empty() || speaker.is_empty() {
            return Err(Error::parse(origin, line_no, "empty utt_id, path or speaker"));
        }
        let dialect: DialectLabel = fields[2].parse().map_err(|_| {
            Error::parse(origin, line_no, format!("unknown dialect tag `{}`", fields[2]))
        })?;
        if !seen.insert(utt_id.to_string()) {
            return Err(Error::DuplicateUtterance(utt_id.to_string()));
        }
        let transcript = fields
            .get(4)
            .map(|t| t.split_whitespace().map(str::to_string).collect())
            .unwrap_or_default();
        records.push(UtteranceRecord {
            utt_id: utt_id.to_string(),
            audio_path: PathBuf::from(fields[1].trim()),
            dialect,
            speaker_id: speaker.to_string(),
            transcript,
        });
    }
    Ok(records)
}

pub fn load_manifest(path: impl AsRef<Path>) -> Result<Vec<UtteranceRecord>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_manifest(&text, path)
}

pub fn format_manifest(records: &[UtteranceRecord]) -> String {
    let mut out = String::new();
    for r in records {
        out.push_str(&format!(
            "{}\t{}\t{}\t{}\t{}\n",
            r.utt_id,
            r.audio_path.display(),
            r.dialect,
            r.speaker_id,
            r.transcript.join(" ")
        ));
    }
    out
}

pub fn write_manifest(path: impl AsRef<Path>, records: &[UtteranceRecord]) -> Result<()> {
    let path = path.as_ref();
    std::fs::write(path, format_manifest(records)).map_err(|e| Error::io(path, e))
}

/// Train/test partition of a manifest.
#[derive(Debug, Clone, PartialEq)]
pub struct Split {
    pub train: Vec<UtteranceRecord>,
    pub test: Vec<UtteranceRecord>,
}

/// Speaker-disjoint split with durations read from the WAV headers.
pub fn split_speaker_disjoint(
    records: &[UtteranceRecord],
    base_dir: &Path,
    train_fraction: f64,
    seed: u64,
) -> Result<Split> {
    let mut durations = BTreeMap::new();
    for r in records {
        let d = wav::duration_seconds(r.resolve_audio(base_dir))?;
        durations.insert(r.utt_id.clone(), d);
    }
    split_speaker_disjoint_by(records, train_fraction, seed, |r| durations[&r.utt_id])
}

/// Speaker-disjoint split within each dialect. Speakers are ordered by total
/// duration (longest first, seeded order among equal durations) and each is
/// assigned to whichever side is furthest below its duration target.
pub fn split_speaker_disjoint_by(
    records: &[UtteranceRecord],
    train_fraction: f64,
    seed: u64,
    duration: impl Fn(&UtteranceRecord) -> f64,
) -> Result<Split> {
    if !(train_fraction > 0.0 && train_fraction < 1.0) {
        return Err(Error::InvalidConfig(format!(
            "train fraction must lie in (0, 1), got {train_fraction}"
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut train_speakers = BTreeSet::new();
    for dialect in DialectLabel::ALL {
        let mut per_speaker: BTreeMap<&str, f64> = BTreeMap::new();
        for r in records.iter().filter(|r| r.dialect == dialect) {
            *per_speaker.entry(r.speaker_id.as_str()).or_default() += duration(r);
        }
        if per_speaker.len() < 2 {
            return Err(Error::InsufficientSpeakers {
                dialect: dialect.to_string(),
                found: per_speaker.len(),
            });
        }
        let mut speakers: Vec<(&str, f64)> = per_speaker.into_iter().collect();
        speakers.shuffle(&mut rng);
        speakers.sort_by(|a, b| b.1.total_cmp(&a.1));

        let total: f64 = speakers.iter().map(|s| s.1).sum();
        let (target_train, target_test) = (train_fraction * total, (1.0 - train_fraction) * total);
        let (mut got_train, mut got_test) = (0.0, 0.0);
        let mut train = Vec::new();
        let mut test = Vec::new();
        for (spk, dur) in speakers {
            if target_train - got_train >= target_test - got_test {
                got_train += dur;
                train.push((spk, dur));
            } else {
                got_test += dur;
                test.push((spk, dur));
            }
        }
        // Both sides must be populated; move the shortest speaker across.
        if test.is_empty() {
            test.push(train.pop().expect("at least two speakers"));
        } else if train.is_empty() {
            train.push(test.pop().expect("at least two speakers"));
        }
        train_speakers.extend(train.into_iter().map(|(s, _)| (dialect, s.to_string())));
    }
    let (train, test) = records
        .iter()
        .cloned()
        .partition(|r| train_speakers.contains(&(r.dialect, r.speaker_id.clone())));
    Ok(Split { train, test })
}
