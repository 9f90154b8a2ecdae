//! The identification systems: GMM, CNN, parallel phone recognition
//! (three variants), parallel word recognition, and unified recognition
//! with word-count bias (with and without per-word reconfirmation), plus
//! evaluation and reports.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::atomic::{AtomicUsize, Ordering};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cnn::{cnn_identify, CnnModel};
use crate::corpus::{DialectLabel, DialectPair, Lexicon, Membership, ParallelDictionary, PhoneInventory};
use crate::decode::{
    build_phone_loop, build_word_graph, pronunciation_units, viterbi_decode, DecodeResult, DecodingGraph, PhoneLM,
};
use crate::error::{Error, Result};
use crate::featext::{fix_length, FeatureMatrix, FrameView};
use crate::gmm::{argmax_lt_ties, classify_gmm, GmmModel};
use crate::hmm::{forced_align, HmmSet};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum SystemKind {
    #[serde(rename = "gmm")]
    Gmm,
    #[serde(rename = "cnn")]
    Cnn,
    #[serde(rename = "ppr-v1")]
    PprV1,
    #[serde(rename = "ppr-v2")]
    PprV2,
    #[serde(rename = "ppr-v3")]
    PprV3,
    #[serde(rename = "plvcsr")]
    Plvcsr,
    #[serde(rename = "upr1")]
    Upr1,
    #[serde(rename = "upr2")]
    Upr2,
}

impl SystemKind {
    pub const ALL: [SystemKind; 8] = [
        SystemKind::Gmm,
        SystemKind::Cnn,
        SystemKind::PprV1,
        SystemKind::PprV2,
        SystemKind::PprV3,
        SystemKind::Plvcsr,
        SystemKind::Upr1,
        SystemKind::Upr2,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            SystemKind::Gmm => "gmm",
            SystemKind::Cnn => "cnn",
            SystemKind::PprV1 => "ppr-v1",
            SystemKind::PprV2 => "ppr-v2",
            SystemKind::PprV3 => "ppr-v3",
            SystemKind::Plvcsr => "plvcsr",
            SystemKind::Upr1 => "upr1",
            SystemKind::Upr2 => "upr2",
        }
    }
}

impl fmt::Display for SystemKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for SystemKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        SystemKind::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| Error::InvalidConfig(format!("unknown system `{s}`")))
    }
}

/// Outcome of one identification. `scores` holds log-likelihoods,
/// probabilities (CNN) or word counts (decisive UPR), whichever the method's
/// decision rule compared.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Decision {
    pub label: DialectLabel,
    pub method: SystemKind,
    pub scores: DialectPair<f64>,
    pub fallback_used: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bias: Option<BiasResult>,
    /// The bias was tied and no fallback ran; `label` is then only the
    /// tie-break and evaluation scores the utterance as wrong.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub equiprobable: bool,
}

impl Decision {
    fn from_scores(method: SystemKind, scores: DialectPair<f64>) -> Self {
        Decision {
            label: argmax_lt_ties(&scores),
            method,
            scores,
            fallback_used: false,
            bias: None,
            equiprobable: false,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum RelabelScope {
    #[default]
    WordFinal,
    Anywhere,
}

/// Replaces a vowel followed by a nasal consonant with the inventory's
/// single nasalized-vowel symbol. The sequence is one word: `WordFinal` only
/// rewrites a pair in the last two positions.
pub fn apply_nasalization_relabel(phones: &[String], inventory: &PhoneInventory, scope: RelabelScope) -> Vec<String> {
    let Some(symbol) = inventory.nasalized_symbol() else {
        return phones.to_vec();
    };
    let is_pair = |i: usize| {
        i + 1 < phones.len() && inventory.is_vowel(&phones[i]) && inventory.is_nasal_consonant(&phones[i + 1])
    };
    match scope {
        RelabelScope::WordFinal => {
            let n = phones.len();
            if n >= 2 && is_pair(n - 2) {
                let mut out = phones[..n - 2].to_vec();
                out.push(symbol.to_string());
                out
            } else {
                phones.to_vec()
            }
        }
        RelabelScope::Anywhere => {
            let mut out = Vec::with_capacity(phones.len());
            let mut i = 0;
            while i < phones.len() {
                if is_pair(i) {
                    out.push(symbol.to_string());
                    i += 2;
                } else {
                    out.push(phones[i].clone());
                    i += 1;
                }
            }
            out
        }
    }
}

/// Applies the relabel to every pronunciation, keeping tag and membership.
pub fn relabel_lexicon(lexicon: &Lexicon, inventory: &PhoneInventory, scope: RelabelScope) -> Result<Lexicon> {
    let mut out = Lexicon::new(lexicon.tag());
    for (word, prons) in lexicon.entries() {
        for p in prons {
            out.insert(word, apply_nasalization_relabel(p, inventory, scope))?;
        }
        if let Some(m) = lexicon.membership(word) {
            out.set_membership(word, m);
        }
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct DecodeOptions {
    /// Beam width in log-likelihood; `None` searches exactly.
    pub beam: Option<f64>,
    /// Divide path scores by the frame count before comparing. Both
    /// branches see the same frames, so this changes scores, never labels.
    pub duration_normalize: bool,
}

impl DecodeOptions {
    fn score(&self, r: &DecodeResult, frames: usize) -> f64 {
        if self.duration_normalize {
            r.total_loglik / frames as f64
        } else {
            r.total_loglik
        }
    }
}

/// Phone HMMs with their phone-loop graph.
#[derive(Debug, Clone)]
pub struct PhoneRecognizer {
    set: HmmSet,
    lm: Option<PhoneLM>,
    graph: DecodingGraph,
}

impl PhoneRecognizer {
    pub fn new(set: HmmSet, lm: Option<PhoneLM>) -> Result<Self> {
        let graph = build_phone_loop(&set, lm.as_ref())?;
        Ok(PhoneRecognizer { set, lm, graph })
    }

    pub fn set(&self) -> &HmmSet {
        &self.set
    }

    pub fn lm(&self) -> Option<&PhoneLM> {
        self.lm.as_ref()
    }

    pub fn decode(&self, feat: FrameView<'_>, beam: Option<f64>) -> Result<DecodeResult> {
        viterbi_decode(&self.graph, &self.set, feat, beam)
    }
}

/// Phone HMMs with a lexicon and its word-loop graph.
#[derive(Debug, Clone)]
pub struct WordRecognizer {
    set: HmmSet,
    lexicon: Lexicon,
    graph: DecodingGraph,
}

impl WordRecognizer {
    pub fn new(set: HmmSet, lexicon: Lexicon) -> Result<Self> {
        let graph = build_word_graph(&set, &lexicon)?;
        Ok(WordRecognizer { set, lexicon, graph })
    }

    pub fn set(&self) -> &HmmSet {
        &self.set
    }

    pub fn lexicon(&self) -> &Lexicon {
        &self.lexicon
    }

    pub fn decode(&self, feat: FrameView<'_>, beam: Option<f64>) -> Result<DecodeResult> {
        viterbi_decode(&self.graph, &self.set, feat, beam)
    }
}

pub fn gmm_identify(models: &DialectPair<GmmModel>, feat: FrameView<'_>) -> Result<Decision> {
    let (_, scores) = classify_gmm(models, feat)?;
    Ok(Decision::from_scores(SystemKind::Gmm, scores))
}

/// Pads or crops to the network's input length, then classifies.
pub fn cnn_decision(model: &CnnModel, feat: &FeatureMatrix) -> Result<Decision> {
    let fixed = fix_length(feat, model.input_shape().0)?;
    let (_, scores) = cnn_identify(model, &fixed)?;
    Ok(Decision::from_scores(SystemKind::Cnn, scores))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PprVersion {
    V1,
    V2,
    V3,
}

impl PprVersion {
    pub fn kind(self) -> SystemKind {
        match self {
            PprVersion::V1 => SystemKind::PprV1,
            PprVersion::V2 => SystemKind::PprV2,
            PprVersion::V3 => SystemKind::PprV3,
        }
    }
}

/// One phone recognizer per dialect.
#[derive(Debug, Clone)]
pub struct PprSystem {
    version: PprVersion,
    recognizers: DialectPair<PhoneRecognizer>,
}

impl PprSystem {
    /// V1 and V2 need a phone LM for both dialects; V3 drops any LM given.
    /// V2 needs a CT model set that covers the nasalized-vowel class.
    pub fn new(version: PprVersion, lt: (HmmSet, Option<PhoneLM>), ct: (HmmSet, Option<PhoneLM>)) -> Result<Self> {
        let mut parts = [lt, ct];
        match version {
            PprVersion::V3 => parts.iter_mut().for_each(|p| p.1 = None),
            _ => {
                if parts.iter().any(|p| p.1.is_none()) {
                    return Err(Error::InvalidConfig(format!(
                        "{} needs phone language models for both dialects",
                        version.kind()
                    )));
                }
            }
        }
        if version == PprVersion::V2 {
            let ct_set = &parts[1].0;
            let symbol = ct_set
                .inventory()
                .nasalized_symbol()
                .ok_or_else(|| Error::InvalidConfig("ppr-v2 needs a nasalized-vowel class".into()))?;
            if !ct_set.models().iter().any(|m| m.name() == symbol) {
                return Err(Error::InvalidConfig(format!(
                    "ppr-v2 CT models have no `{symbol}`; train them on relabeled transcripts"
                )));
            }
        }
        let [lt, ct] = parts;
        Ok(PprSystem {
            version,
            recognizers: DialectPair::new(PhoneRecognizer::new(lt.0, lt.1)?, PhoneRecognizer::new(ct.0, ct.1)?),
        })
    }

    pub fn version(&self) -> PprVersion {
        self.version
    }

    pub fn recognizer(&self, d: DialectLabel) -> &PhoneRecognizer {
        self.recognizers.get(d)
    }
}

/// Decodes through both phone loops and picks the higher path score.
pub fn ppr_identify(system: &PprSystem, feat: FrameView<'_>, opts: &DecodeOptions) -> Result<Decision> {
    let scores = system
        .recognizers
        .try_map(|_, r| r.decode(feat, opts.beam).map(|res| opts.score(&res, feat.rows())))?;
    Ok(Decision::from_scores(system.version.kind(), scores))
}

/// One word recognizer per dialect. Counts its identifications so callers
/// can observe whether a fallback actually ran.
#[derive(Debug)]
pub struct PlvcsrSystem {
    recognizers: DialectPair<WordRecognizer>,
    invocations: AtomicUsize,
}

impl PlvcsrSystem {
    pub fn new(lt: WordRecognizer, ct: WordRecognizer) -> Self {
        PlvcsrSystem {
            recognizers: DialectPair::new(lt, ct),
            invocations: AtomicUsize::new(0),
        }
    }

    pub fn recognizer(&self, d: DialectLabel) -> &WordRecognizer {
        self.recognizers.get(d)
    }

    pub fn invocations(&self) -> usize {
        self.invocations.load(Ordering::Relaxed)
    }
}

/// Decodes through both word loops and picks the higher word-sequence score.
pub fn plvcsr_identify(system: &PlvcsrSystem, feat: FrameView<'_>, opts: &DecodeOptions) -> Result<Decision> {
    system.invocations.fetch_add(1, Ordering::Relaxed);
    let scores = system
        .recognizers
        .try_map(|_, r| r.decode(feat, opts.beam).map(|res| opts.score(&res, feat.rows())))?;
    Ok(Decision::from_scores(SystemKind::Plvcsr, scores))
}

/// A recognized word with its frame span.
#[derive(Debug, Clone, PartialEq)]
pub struct WordSegment {
    pub word: String,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    pub loglik: f64,
}

impl WordSegment {
    pub fn features<'a>(&self, feat: FrameView<'a>) -> FrameView<'a> {
        feat.slice(self.start..self.end)
    }
}

/// Word-to-dialect membership. Explicit dialect lexicons take precedence;
/// words they do not cover fall back to unified-lexicon metadata.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct WordMemberships {
    map: BTreeMap<String, Membership>,
}

impl WordMemberships {
    pub fn new(lt: Option<&Lexicon>, ct: Option<&Lexicon>, unified: Option<&Lexicon>) -> Self {
        let mut map: BTreeMap<String, Membership> = BTreeMap::new();
        for (lex, m) in [(lt, Membership::Lt), (ct, Membership::Ct)] {
            for w in lex.into_iter().flat_map(|l| l.words()) {
                map.entry(w.to_string()).and_modify(|e| *e = e.union(m)).or_insert(m);
            }
        }
        if let Some(u) = unified {
            for w in u.words() {
                if let (false, Some(m)) = (map.contains_key(w), u.membership(w)) {
                    map.insert(w.to_string(), m);
                }
            }
        }
        WordMemberships { map }
    }

    pub fn get(&self, word: &str) -> Result<Membership> {
        self.map.get(word).copied().ok_or_else(|| Error::UnknownWord(word.to_string()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "UPPERCASE")]
pub enum BiasVerdict {
    Lt,
    Ct,
    Equiprobable,
}

/// Word counts per dialect. `excluded` holds words that counted for
/// neither side; with common words excluded, `lt + ct + excluded` is the
/// number of words.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BiasResult {
    pub lt_count: usize,
    pub ct_count: usize,
    pub excluded: usize,
    pub verdict: BiasVerdict,
}

/// Tallies per-word memberships; `None` marks a word dropped by
/// reconfirmation. A `BOTH` word counts for neither side when
/// `exclude_common` is set and for both sides otherwise.
pub fn bias_from_memberships(items: impl IntoIterator<Item = Option<Membership>>, exclude_common: bool) -> BiasResult {
    let (mut lt, mut ct, mut excluded) = (0, 0, 0);
    for m in items {
        match m {
            Some(Membership::Lt) => lt += 1,
            Some(Membership::Ct) => ct += 1,
            Some(Membership::Both) if !exclude_common => {
                lt += 1;
                ct += 1;
            }
            _ => excluded += 1,
        }
    }
    let verdict = match lt.cmp(&ct) {
        std::cmp::Ordering::Greater => BiasVerdict::Lt,
        std::cmp::Ordering::Less => BiasVerdict::Ct,
        std::cmp::Ordering::Equal => BiasVerdict::Equiprobable,
    };
    BiasResult {
        lt_count: lt,
        ct_count: ct,
        excluded,
        verdict,
    }
}

pub fn compute_bias(words: &[WordSegment], memberships: &WordMemberships, exclude_common: bool) -> Result<BiasResult> {
    let ms = words.iter().map(|w| memberships.get(&w.word)).collect::<Result<Vec<_>>>()?;
    Ok(bias_from_memberships(ms.into_iter().map(Some), exclude_common))
}

/// The single recognizer over the pooled inventory and merged lexicon.
#[derive(Debug, Clone)]
pub struct UprSystem {
    recognizer: WordRecognizer,
    memberships: WordMemberships,
}

impl UprSystem {
    pub fn new(recognizer: WordRecognizer, memberships: WordMemberships) -> Self {
        UprSystem { recognizer, memberships }
    }

    pub fn recognizer(&self) -> &WordRecognizer {
        &self.recognizer
    }

    pub fn memberships(&self) -> &WordMemberships {
        &self.memberships
    }
}

/// One decoding pass over the unified word loop.
pub fn upr_recognize(system: &UprSystem, feat: FrameView<'_>, beam: Option<f64>) -> Result<Vec<WordSegment>> {
    let res = system.recognizer.decode(feat, beam)?;
    Ok(res
        .words
        .into_iter()
        .map(|w| WordSegment {
            word: w.symbol,
            start: w.start,
            end: w.end,
            loglik: w.loglik,
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ReconfirmReason {
    /// The parallel word is the recognized word itself.
    SameWord,
    NoParallel,
    /// The segment is too short for the parallel pronunciation.
    Infeasible,
    Aligned { recognized: f64, parallel: f64 },
}

/// A word's membership after reconfirmation; `None` drops it from the bias.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reconfirmation {
    pub membership: Option<Membership>,
    pub reason: ReconfirmReason,
}

/// Best forced-alignment score over the word's pronunciations, or `None`
/// when none fits in the segment.
fn best_alignment(set: &HmmSet, lexicon: &Lexicon, word: &str, feat: FrameView<'_>) -> Result<Option<f64>> {
    let prons = lexicon.pronunciations(word).ok_or_else(|| Error::UnknownWord(word.to_string()))?;
    let mut best: Option<f64> = None;
    for p in prons {
        let units = pronunciation_units(set, p);
        match forced_align(set, feat, &units) {
            Ok(a) => best = Some(best.map_or(a.total_loglik, |b| b.max(a.total_loglik))),
            Err(Error::AlignmentInfeasible { .. }) => {}
            Err(e) => return Err(e),
        }
    }
    Ok(best)
}

/// Checks a recognized word against its counterpart in the other dialect by
/// aligning the segment's frames to both pronunciations.
pub fn reconfirm_word(
    seg: &WordSegment,
    recognized: Membership,
    pdict: &ParallelDictionary,
    set: &HmmSet,
    lexicon: &Lexicon,
    feat: FrameView<'_>,
) -> Result<Reconfirmation> {
    if seg.end <= seg.start {
        return Err(Error::EmptyInput("word segment"));
    }
    let directions: &[DialectLabel] = match recognized {
        Membership::Lt => &[DialectLabel::Lt],
        Membership::Ct => &[DialectLabel::Ct],
        Membership::Both => &DialectLabel::ALL,
    };
    let found = directions
        .iter()
        .find_map(|&d| pdict.lookup(&seg.word, d).map(|p| (d, p)));
    let keep = |reason| Reconfirmation {
        membership: Some(recognized),
        reason,
    };
    let Some((from, parallel)) = found else {
        log::debug!("no parallel entry for `{}`; keeping {recognized}", seg.word);
        return Ok(keep(ReconfirmReason::NoParallel));
    };
    if parallel == seg.word {
        return Ok(Reconfirmation {
            membership: None,
            reason: ReconfirmReason::SameWord,
        });
    }
    let frames = seg.features(feat);
    let Some(par) = best_alignment(set, lexicon, parallel, frames)? else {
        return Ok(keep(ReconfirmReason::Infeasible));
    };
    let rec = best_alignment(set, lexicon, &seg.word, frames)?.unwrap_or(f64::NEG_INFINITY);
    let reason = ReconfirmReason::Aligned {
        recognized: rec,
        parallel: par,
    };
    if par > rec {
        Ok(Reconfirmation {
            membership: Some(from.other().into()),
            reason,
        })
    } else {
        Ok(keep(reason))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EquiprobablePolicy {
    /// Tied bias defers to the parallel word recognizers.
    #[default]
    Fallback,
    /// Tied bias stands as an undecided, and so wrong, result.
    Negative,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UprOptions {
    pub exclude_common: bool,
    pub equiprobable: EquiprobablePolicy,
    pub decode: DecodeOptions,
}

impl Default for UprOptions {
    fn default() -> Self {
        UprOptions {
            exclude_common: true,
            equiprobable: EquiprobablePolicy::Fallback,
            decode: DecodeOptions::default(),
        }
    }
}

fn finish_upr(kind: SystemKind, bias: BiasResult, plvcsr: &PlvcsrSystem, feat: FrameView<'_>, opts: &UprOptions) -> Result<Decision> {
    let counts = DialectPair::new(bias.lt_count as f64, bias.ct_count as f64);
    let decided = |label| Decision {
        label,
        method: kind,
        scores: counts.clone(),
        fallback_used: false,
        bias: Some(bias),
        equiprobable: false,
    };
    match (bias.verdict, opts.equiprobable) {
        (BiasVerdict::Lt, _) => Ok(decided(DialectLabel::Lt)),
        (BiasVerdict::Ct, _) => Ok(decided(DialectLabel::Ct)),
        (BiasVerdict::Equiprobable, EquiprobablePolicy::Negative) => Ok(Decision {
            equiprobable: true,
            ..decided(DialectLabel::Lt)
        }),
        (BiasVerdict::Equiprobable, EquiprobablePolicy::Fallback) => {
            let fb = plvcsr_identify(plvcsr, feat, &opts.decode)?;
            Ok(Decision {
                label: fb.label,
                method: kind,
                scores: fb.scores,
                fallback_used: true,
                bias: Some(bias),
                equiprobable: false,
            })
        }
    }
}

/// Word-count bias over the unified recognizer's output.
pub fn upr1_identify(upr: &UprSystem, plvcsr: &PlvcsrSystem, feat: FrameView<'_>, opts: &UprOptions) -> Result<Decision> {
    let words = upr_recognize(upr, feat, opts.decode.beam)?;
    let bias = compute_bias(&words, &upr.memberships, opts.exclude_common)?;
    finish_upr(SystemKind::Upr1, bias, plvcsr, feat, opts)
}

/// Like [`upr1_identify`], with each word reconfirmed before counting.
pub fn upr2_identify(
    upr: &UprSystem,
    pdict: &ParallelDictionary,
    plvcsr: &PlvcsrSystem,
    feat: FrameView<'_>,
    opts: &UprOptions,
) -> Result<Decision> {
    let words = upr_recognize(upr, feat, opts.decode.beam)?;
    let set = upr.recognizer.set();
    let lexicon = upr.recognizer.lexicon();
    let mut memberships = Vec::with_capacity(words.len());
    for w in &words {
        let m = upr.memberships.get(&w.word)?;
        memberships.push(reconfirm_word(w, m, pdict, set, lexicon, feat)?.membership);
    }
    let bias = bias_from_memberships(memberships, opts.exclude_common);
    finish_upr(SystemKind::Upr2, bias, plvcsr, feat, opts)
}

/// One evaluation input.
#[derive(Debug, Clone)]
pub struct EvalItem {
    pub utt_id: String,
    pub truth: DialectLabel,
    pub features: FeatureMatrix,
}

/// One line of a decisions file: a decision or the error that prevented it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub utt_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub decision: Option<Decision>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
}

impl DecisionRecord {
    pub fn from_result(utt_id: &str, r: Result<Decision>) -> Self {
        match r {
            Ok(d) => DecisionRecord {
                utt_id: utt_id.to_string(),
                decision: Some(d),
                error: None,
            },
            Err(e) => DecisionRecord {
                utt_id: utt_id.to_string(),
                decision: None,
                error: Some(e.to_string()),
            },
        }
    }

    /// The label evaluation assigns: errors and undecided ties are counted
    /// as the wrong class.
    pub fn scored_label(&self, truth: DialectLabel) -> DialectLabel {
        match &self.decision {
            Some(d) if !d.equiprobable => d.label,
            _ => truth.other(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UtteranceOutcome {
    pub truth: DialectLabel,
    pub predicted: DialectLabel,
    pub correct: bool,
    #[serde(flatten)]
    pub record: DecisionRecord,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub accuracy: f64,
    /// Row = truth, column = scored label, LT first; rows normalized. A
    /// class with no utterances keeps a zero row.
    pub confusion: [[f64; 2]; 2],
    pub counts: [[usize; 2]; 2],
    pub total: usize,
    pub errors: usize,
    pub equiprobable: usize,
    pub fallbacks: usize,
    pub per_utterance: Vec<UtteranceOutcome>,
}

/// Scores decision records against ground truth. Records are reported in
/// `utt_id` order.
pub fn metrics_from_records(records: Vec<(DecisionRecord, DialectLabel)>) -> Result<Metrics> {
    if records.is_empty() {
        return Err(Error::EmptyInput("evaluation set"));
    }
    let mut per_utterance: Vec<UtteranceOutcome> = records
        .into_iter()
        .map(|(record, truth)| {
            let predicted = record.scored_label(truth);
            UtteranceOutcome {
                truth,
                predicted,
                correct: predicted == truth,
                record,
            }
        })
        .collect();
    per_utterance.sort_by(|a, b| a.record.utt_id.cmp(&b.record.utt_id));
    let mut counts = [[0usize; 2]; 2];
    for o in &per_utterance {
        counts[o.truth.index()][o.predicted.index()] += 1;
    }
    let mut confusion = [[0.0; 2]; 2];
    for (row, c) in confusion.iter_mut().zip(&counts) {
        let n = c[0] + c[1];
        if n > 0 {
            *row = [c[0] as f64 / n as f64, c[1] as f64 / n as f64];
        }
    }
    let total = per_utterance.len();
    let correct = counts[0][0] + counts[1][1];
    let decisions = || per_utterance.iter().filter_map(|o| o.record.decision.as_ref());
    Ok(Metrics {
        accuracy: correct as f64 / total as f64,
        confusion,
        counts,
        total,
        errors: per_utterance.iter().filter(|o| o.record.error.is_some()).count(),
        equiprobable: decisions().filter(|d| d.equiprobable).count(),
        fallbacks: decisions().filter(|d| d.fallback_used).count(),
        per_utterance,
    })
}

/// Runs `identify` over every item in parallel. Failures are recorded and
/// scored as misclassifications.
pub fn evaluate<F>(items: &[EvalItem], identify: F) -> Result<Metrics>
where
    F: Fn(&EvalItem) -> Result<Decision> + Sync,
{
    let records: Vec<(DecisionRecord, DialectLabel)> = items
        .par_iter()
        .map(|item| (DecisionRecord::from_result(&item.utt_id, identify(item)), item.truth))
        .collect();
    metrics_from_records(records)
}

/// Plain-text accuracy and confusion table, one row per system.
pub fn summary_table(rows: &[(String, &Metrics)]) -> String {
    let width = rows.iter().map(|(n, _)| n.len()).max().unwrap_or(0).max(6);
    let mut out = format!(
        "{:<width$}  {:>8}  {:>7}  {:>7}  {:>7}  {:>7}  {:>5}\n",
        "system", "accuracy", "LT->LT", "LT->CT", "CT->LT", "CT->CT", "n"
    );
    for (name, m) in rows {
        out.push_str(&format!(
            "{:<width$}  {:>7.2}%  {:>7.4}  {:>7.4}  {:>7.4}  {:>7.4}  {:>5}\n",
            name,
            100.0 * m.accuracy,
            m.confusion[0][0],
            m.confusion[0][1],
            m.confusion[1][0],
            m.confusion[1][1],
            m.total
        ));
    }
    out
}
