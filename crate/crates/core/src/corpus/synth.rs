//! Synthetic two-dialect corpus.
//!
//! Every phone is a three-state generative model whose states carry a
//! spectral envelope (formant resonances plus a noise band) and a voicing
//! mix. An utterance is rendered by walking its phone states at a 10 ms
//! rate and overlap-adding Hann-windowed excitation frames (glottal pulse
//! train and/or white noise) filtered by the state envelope in the
//! frequency domain.
//!
//! The CT side differs from LT in vocabulary (rule-derived and irregular
//! parallel words, a few CT-only loanwords with `f`), in shorter vowels, in
//! vowel quality, and in realizing a word-final vowel + nasal consonant as
//! the grouped nasalized vowel. Lexicons keep the canonical spelling; the
//! nasalization shows up only in the audio.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::sync::Arc;

use rand::seq::IndexedRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, StandardNormal};
use rayon::prelude::*;
use rustfft::num_complex::Complex;
use rustfft::{Fft, FftPlanner};
use serde::{Deserialize, Serialize};

use super::parallel::apply_rules;
use super::{
    build_parallel_dictionary, format_manifest, wav, DialectLabel, DialectPair, Lexicon, LexiconTag,
    ParallelDictionary, PhoneInventory, RewriteRule, UtteranceRecord,
};
use crate::did::{apply_nasalization_relabel, RelabelScope};
use crate::error::{Error, Result};
use crate::featext::AudioBuffer;

const HOP: usize = 160;
const WINDOW: usize = 2 * HOP;
const FFT_SIZE: usize = 512;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SynthSpec {
    pub sample_rate: u32,
    pub speakers_per_dialect: usize,
    pub utterances_per_speaker: usize,
    /// Inclusive word-count range per utterance.
    pub words_per_utterance: DialectPair<[usize; 2]>,
    /// Parallel LT/CT word pairs related by the rewrite rules.
    pub rule_pairs: usize,
    /// Words shared verbatim by both dialects ("enna" is always one).
    pub common_words: usize,
    /// Parallel pairs the rules cannot derive; listed as manual overrides.
    pub irregular_pairs: usize,
    pub ct_only_words: usize,
    /// Probability that an utterance word is drawn from the common words.
    pub common_word_rate: f64,
    /// Fraction of generated words ending in vowel + nasal consonant.
    pub nasal_final_rate: f64,
    pub ct_vowel_duration_scale: f64,
    /// CT scaling of the first and second vowel formants.
    pub ct_vowel_formant_scale: [f64; 2],
    /// Render CT word-final vowel + nasal as the nasalized vowel.
    pub nasalize_ct: bool,
    /// Background noise level relative to the speech amplitude.
    pub noise_db: f64,
    /// Phone inventory; the built-in one when absent.
    pub inventory: Option<PhoneInventory>,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            sample_rate: 16_000,
            speakers_per_dialect: 10,
            utterances_per_speaker: 20,
            words_per_utterance: DialectPair::new([7, 11], [3, 6]),
            rule_pairs: 40,
            common_words: 10,
            irregular_pairs: 6,
            ct_only_words: 4,
            common_word_rate: 0.3,
            nasal_final_rate: 0.4,
            ct_vowel_duration_scale: 0.7,
            ct_vowel_formant_scale: [1.08, 0.95],
            nasalize_ct: true,
            noise_db: -45.0,
            inventory: None,
        }
    }
}

impl SynthSpec {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("synthesis spec: {e}")))
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("synthesis spec serializes")
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidConfig(m));
        if self.sample_rate < 8000 {
            return bad(format!("sample_rate {} is below 8000", self.sample_rate));
        }
        if self.speakers_per_dialect < 2 || self.utterances_per_speaker == 0 {
            return bad("need at least 2 speakers per dialect and 1 utterance per speaker".into());
        }
        for d in DialectLabel::ALL {
            let [lo, hi] = *self.words_per_utterance.get(d);
            if lo == 0 || lo > hi {
                return bad(format!("words_per_utterance for {d} must be a range [lo, hi] with lo >= 1"));
            }
        }
        if self.rule_pairs == 0 || self.common_words == 0 {
            return bad("rule_pairs and common_words must be positive".into());
        }
        for (name, v) in [("common_word_rate", self.common_word_rate), ("nasal_final_rate", self.nasal_final_rate)] {
            if !(0.0..=1.0).contains(&v) {
                return bad(format!("{name} must lie in [0, 1]"));
            }
        }
        if !(self.ct_vowel_duration_scale > 0.0) || self.ct_vowel_formant_scale.iter().any(|s| !(*s > 0.0)) {
            return bad("CT scale factors must be positive".into());
        }
        let inv = self.inventory();
        if self.nasalize_ct && inv.nasalized_symbol().is_none() {
            return bad("nasalize_ct needs an inventory with a nasalized-vowel class".into());
        }
        for p in inv.phones() {
            if template(p).is_none() {
                return bad(format!("no acoustic template for phone `{p}`"));
            }
        }
        for p in ["e", "nn", "a"] {
            if !inv.contains(p) {
                return bad(format!("inventory lacks `{p}`"));
            }
        }
        Ok(())
    }

    pub fn inventory(&self) -> PhoneInventory {
        self.inventory.clone().unwrap_or_else(PhoneInventory::default_tamil_like)
    }
}

/// One resonance: centre frequency, bandwidth, relative gain.
type Formant = (f64, f64, f64);

#[derive(Debug, Clone, PartialEq)]
struct StateTemplate {
    formants: Vec<Formant>,
    /// 1 = pulse excitation only, 0 = noise only.
    voicing: f64,
    gain: f64,
}

#[derive(Debug, Clone, PartialEq)]
struct PhoneTemplate {
    states: [StateTemplate; 3],
    /// Nominal duration in seconds.
    duration: f64,
    vowel: bool,
}

fn steady(formants: &[Formant], voicing: f64, gain: f64, duration: f64, vowel: bool) -> PhoneTemplate {
    let s = StateTemplate {
        formants: formants.to_vec(),
        voicing,
        gain,
    };
    PhoneTemplate {
        states: [s.clone(), s.clone(), s],
        duration,
        vowel,
    }
}

fn vowel(f1: f64, f2: f64, f3: f64, duration: f64) -> PhoneTemplate {
    let at = |k: f64| StateTemplate {
        formants: vec![(f1 * k, 90.0, 1.0), (f2 * k, 120.0, 0.6), (f3, 180.0, 0.3)],
        voicing: 1.0,
        gain: 1.0,
    };
    PhoneTemplate {
        states: [at(0.97), at(1.0), at(1.02)],
        duration,
        vowel: true,
    }
}

fn diphthong(from: [f64; 2], to: [f64; 2], duration: f64) -> PhoneTemplate {
    let at = |f: [f64; 2]| StateTemplate {
        formants: vec![(f[0], 90.0, 1.0), (f[1], 120.0, 0.6), (2600.0, 180.0, 0.3)],
        voicing: 1.0,
        gain: 1.0,
    };
    let mid = [(from[0] + to[0]) / 2.0, (from[1] + to[1]) / 2.0];
    PhoneTemplate {
        states: [at(from), at(mid), at(to)],
        duration,
        vowel: true,
    }
}

fn nasal(place: f64) -> PhoneTemplate {
    steady(&[(250.0, 80.0, 1.0), (place, 150.0, 0.3), (2700.0, 250.0, 0.1)], 1.0, 0.45, 0.07, false)
}

fn approximant(f1: f64, f2: f64, f3: f64) -> PhoneTemplate {
    steady(&[(f1, 100.0, 1.0), (f2, 140.0, 0.5), (f3, 200.0, 0.3)], 1.0, 0.65, 0.065, false)
}

fn fricative(centre: f64, width: f64, gain: f64) -> PhoneTemplate {
    steady(&[(centre, width, 1.0)], 0.0, gain, 0.09, false)
}

fn stop(burst: f64, voiced: bool) -> PhoneTemplate {
    let closure = StateTemplate {
        formants: vec![(150.0, 100.0, 1.0)],
        voicing: 1.0,
        gain: if voiced { 0.12 } else { 0.01 },
    };
    let release = StateTemplate {
        formants: vec![(burst, burst * 0.5, 1.0)],
        voicing: 0.0,
        gain: 0.6,
    };
    let transition = StateTemplate {
        formants: vec![(500.0, 150.0, 1.0), (1500.0, 200.0, 0.5), (burst, burst * 0.6, 0.4)],
        voicing: if voiced { 0.8 } else { 0.3 },
        gain: 0.35,
    };
    PhoneTemplate {
        states: [closure, release, transition],
        duration: 0.08,
        vowel: false,
    }
}

/// Acoustic template of a built-in phone symbol.
fn template(phone: &str) -> Option<PhoneTemplate> {
    let (short, long) = (0.085, 0.14);
    Some(match phone {
        "a" => vowel(700.0, 1300.0, 2600.0, short),
        "aa" => vowel(780.0, 1200.0, 2600.0, long),
        "i" => vowel(320.0, 2150.0, 2950.0, short),
        "ii" => vowel(280.0, 2350.0, 3050.0, long),
        "u" => vowel(350.0, 950.0, 2300.0, short),
        "uu" => vowel(300.0, 800.0, 2250.0, long),
        "e" => vowel(470.0, 1850.0, 2600.0, short),
        "ee" => vowel(420.0, 2050.0, 2700.0, long),
        "o" => vowel(500.0, 1000.0, 2500.0, short),
        "oo" => vowel(440.0, 850.0, 2450.0, long),
        "ai" => diphthong([680.0, 1400.0], [380.0, 2100.0], long),
        "au" => diphthong([680.0, 1150.0], [360.0, 850.0], long),
        "A~" => PhoneTemplate {
            states: std::array::from_fn(|_| StateTemplate {
                formants: vec![
                    (260.0, 90.0, 1.0),
                    (620.0, 220.0, 0.45),
                    (1250.0, 160.0, 0.45),
                    (2500.0, 250.0, 0.2),
                ],
                voicing: 1.0,
                gain: 0.85,
            }),
            duration: long,
            vowel: true,
        },
        "m" => nasal(1100.0),
        "n" => nasal(1600.0),
        "nn" => nasal(1900.0),
        "nx" => nasal(1750.0),
        "nj" => nasal(2200.0),
        "ng" => nasal(2500.0),
        "y" => approximant(300.0, 2100.0, 2900.0),
        "r" => approximant(450.0, 1400.0, 1700.0),
        "l" => approximant(380.0, 1100.0, 2700.0),
        "ll" => approximant(400.0, 1300.0, 2200.0),
        "zh" => approximant(420.0, 1300.0, 1550.0),
        "rx" => approximant(520.0, 1350.0, 1850.0),
        "v" => approximant(350.0, 1000.0, 2300.0),
        "w" => approximant(320.0, 750.0, 2300.0),
        "s" => fricative(5500.0, 2500.0, 0.5),
        "sh" => fricative(3000.0, 1500.0, 0.55),
        "f" => fricative(4200.0, 6000.0, 0.25),
        "h" => steady(&[(500.0, 300.0, 1.0), (1500.0, 400.0, 0.6), (2500.0, 500.0, 0.4)], 0.0, 0.3, 0.07, false),
        "p" => stop(900.0, false),
        "b" => stop(900.0, true),
        "t" => stop(4000.0, false),
        "d" => stop(4000.0, true),
        "tt" => stop(2800.0, false),
        "dd" => stop(2800.0, true),
        "k" => stop(1800.0, false),
        "g" => stop(1800.0, true),
        "c" => stop(3300.0, false),
        "j" => stop(3300.0, true),
        _ => return None,
    })
}

/// Speaker-level rendering parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpeakerVoice {
    pub pitch_hz: f64,
    pub formant_scale: f64,
    pub rate: f64,
    pub amplitude: f64,
}

impl SpeakerVoice {
    fn sample(rng: &mut ChaCha8Rng) -> Self {
        SpeakerVoice {
            pitch_hz: rng.random_range(95.0..230.0),
            formant_scale: rng.random_range(0.95..1.05),
            rate: rng.random_range(0.9..1.1),
            amplitude: rng.random_range(0.25..0.5),
        }
    }
}

/// Everything needed to render one utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct UtterancePlan {
    pub dialect: DialectLabel,
    pub voice: SpeakerVoice,
    /// Phones as realized in the audio (after CT nasalization).
    pub phones: Vec<String>,
    pub seed: u64,
}

/// A generated corpus. Audio is rendered on demand from the plans.
#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub spec: SynthSpec,
    pub seed: u64,
    pub inventory: PhoneInventory,
    pub records: Vec<UtteranceRecord>,
    pub plans: Vec<UtterancePlan>,
    pub lt_lexicon: Lexicon,
    pub ct_lexicon: Lexicon,
    pub rules: Vec<RewriteRule>,
    pub overrides: Vec<(String, String)>,
    pub parallel: ParallelDictionary,
    pub warnings: Vec<String>,
}

fn standard_rules() -> Vec<RewriteRule> {
    [("zh", "ll"), ("ai $", "e"), ("^ v i", "v e"), ("i r u", "i")]
        .iter()
        .map(|(p, r)| RewriteRule::parse(p, r).expect("built-in rule"))
        .collect()
}

struct WordFactory<'a> {
    rng: ChaCha8Rng,
    onsets: Vec<&'a str>,
    vowels: Vec<&'a str>,
    nasal_codas: Vec<&'a str>,
    rules: &'a [RewriteRule],
    names: BTreeSet<String>,
    nasal_final_rate: f64,
}

impl WordFactory<'_> {
    fn syllables(&mut self, n: usize) -> Vec<String> {
        let mut out = Vec::new();
        for _ in 0..n {
            out.push(self.onsets.choose(&mut self.rng).expect("onsets").to_string());
            out.push(self.vowels.choose(&mut self.rng).expect("vowels").to_string());
        }
        out
    }

    fn maybe_nasal_final(&mut self, mut w: Vec<String>) -> Vec<String> {
        if self.rng.random_bool(self.nasal_final_rate) {
            w.push(self.nasal_codas.choose(&mut self.rng).expect("nasals").to_string());
        }
        w
    }

    fn claim(&mut self, pron: &[String]) -> Option<String> {
        let name = pron.join("").replace('~', "");
        self.names.insert(name.clone()).then_some(name)
    }

    /// A word no rule rewrites.
    fn plain(&mut self, syllables: std::ops::RangeInclusive<usize>) -> (String, Vec<String>) {
        loop {
            let n = self.rng.random_range(syllables.clone());
            let w = self.syllables(n);
            let w = self.maybe_nasal_final(w);
            if apply_rules(self.rules, &w) != w {
                continue;
            }
            if let Some(name) = self.claim(&w) {
                return (name, w);
            }
        }
    }

    /// An LT word with one embedded rule trigger.
    fn triggered(&mut self) -> Vec<String> {
        let n = self.rng.random_range(2..=3);
        let mut w = self.syllables(n);
        match self.rng.random_range(0..4) {
            0 => {
                let k = self.rng.random_range(0..n);
                w[2 * k] = "zh".into();
                w = self.maybe_nasal_final(w);
            }
            1 => {
                w[2 * n - 1] = "ai".into();
            }
            2 => {
                w[0] = "v".into();
                w[1] = "i".into();
                w = self.maybe_nasal_final(w);
            }
            _ => {
                w[1] = "i".into();
                w[2] = "r".into();
                w[3] = "u".into();
                w = self.maybe_nasal_final(w);
            }
        }
        w
    }
}

struct Vocabulary {
    lt: Lexicon,
    ct: Lexicon,
    common: Vec<String>,
    lt_specific: Vec<String>,
    ct_specific: Vec<String>,
    overrides: Vec<(String, String)>,
}

fn build_vocabulary(spec: &SynthSpec, inventory: &PhoneInventory, rules: &[RewriteRule], seed: u64) -> Result<Vocabulary> {
    let lt_phones = inventory.subset(Some(DialectLabel::Lt), false);
    let onsets: Vec<&str> = lt_phones
        .phones()
        .iter()
        .map(String::as_str)
        .filter(|p| !inventory.is_vowel(p) && !["zh", "v"].contains(p))
        .collect();
    let vowels: Vec<&str> = lt_phones
        .phones()
        .iter()
        .map(String::as_str)
        .filter(|p| inventory.is_vowel(p) && *p != "ai")
        .collect();
    let nasal_codas: Vec<&str> = ["m", "n", "nn"].into_iter().filter(|p| inventory.contains(p)).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(1);
    let mut f = WordFactory {
        rng,
        onsets,
        vowels,
        nasal_codas,
        rules,
        names: BTreeSet::new(),
        nasal_final_rate: spec.nasal_final_rate,
    };
    let mut lt = Lexicon::new(LexiconTag::Lt);
    let mut ct = Lexicon::new(LexiconTag::Ct);
    let (mut common, mut lt_specific, mut ct_specific) = (Vec::new(), Vec::new(), Vec::new());

    let enna: Vec<String> = ["e", "nn", "a"].iter().map(|s| s.to_string()).collect();
    f.names.insert("enna".into());
    lt.insert("enna", enna.clone())?;
    ct.insert("enna", enna)?;
    common.push("enna".to_string());
    while common.len() < spec.common_words {
        let (name, pron) = f.plain(1..=3);
        lt.insert(&name, pron.clone())?;
        ct.insert(&name, pron)?;
        common.push(name);
    }

    while lt_specific.len() < spec.rule_pairs {
        let lt_pron = f.triggered();
        let ct_pron = apply_rules(rules, &lt_pron);
        if ct_pron == lt_pron || ct_pron.len() < 2 {
            continue;
        }
        let Some(lt_name) = f.claim(&lt_pron) else { continue };
        let Some(ct_name) = f.claim(&ct_pron) else {
            f.names.remove(&lt_name);
            continue;
        };
        lt.insert(&lt_name, lt_pron)?;
        ct.insert(&ct_name, ct_pron)?;
        lt_specific.push(lt_name);
        ct_specific.push(ct_name);
    }

    let mut overrides = Vec::new();
    for i in 0..spec.irregular_pairs {
        let (ct_name, ct_pron) = f.plain(2..=2);
        let lt_name = if i == 0 {
            // The rules map this word to a CT "false friend"; the override
            // must win over it.
            loop {
                let lt_pron = f.triggered();
                let friend = apply_rules(rules, &lt_pron);
                if friend == lt_pron {
                    continue;
                }
                let Some(lt_name) = f.claim(&lt_pron) else { continue };
                let Some(friend_name) = f.claim(&friend) else {
                    f.names.remove(&lt_name);
                    continue;
                };
                lt.insert(&lt_name, lt_pron)?;
                ct.insert(&friend_name, friend)?;
                ct_specific.push(friend_name);
                break lt_name;
            }
        } else {
            let (lt_name, lt_pron) = f.plain(3..=4);
            lt.insert(&lt_name, lt_pron)?;
            lt_name
        };
        ct.insert(&ct_name, ct_pron)?;
        lt_specific.push(lt_name.clone());
        ct_specific.push(ct_name.clone());
        overrides.push((lt_name, ct_name));
    }

    if spec.ct_only_words > 0 && !inventory.contains("f") {
        return Err(Error::InvalidConfig("ct_only_words needs the phone `f`".into()));
    }
    let mut made = 0;
    while made < spec.ct_only_words {
        let (_, mut pron) = f.plain(2..=3);
        let k = 2 * f.rng.random_range(0..pron.len() / 2);
        pron[k] = "f".into();
        if let Some(name) = f.claim(&pron) {
            ct.insert(&name, pron)?;
            ct_specific.push(name);
            made += 1;
        }
    }
    Ok(Vocabulary {
        lt,
        ct,
        common,
        lt_specific,
        ct_specific,
        overrides,
    })
}

/// Generates a corpus description deterministically from `spec` and `seed`.
pub fn generate_synthetic_corpus(spec: &SynthSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let inventory = spec.inventory();
    let rules = standard_rules();
    let vocab = build_vocabulary(spec, &inventory, &rules, seed)?;
    let (parallel, warnings) = build_parallel_dictionary(&rules, &vocab.overrides, &vocab.lt, &vocab.ct);

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2);
    let mut records = Vec::new();
    let mut plans = Vec::new();
    for dialect in DialectLabel::ALL {
        let (lexicon, specific) = match dialect {
            DialectLabel::Lt => (&vocab.lt, &vocab.lt_specific),
            DialectLabel::Ct => (&vocab.ct, &vocab.ct_specific),
        };
        let tag = dialect.as_str().to_lowercase();
        for s in 0..spec.speakers_per_dialect {
            let speaker = format!("{tag}_spk{:02}", s + 1);
            let voice = SpeakerVoice::sample(&mut rng);
            for u in 0..spec.utterances_per_speaker {
                let utt_id = format!("{speaker}_u{:03}", u + 1);
                let [lo, hi] = *spec.words_per_utterance.get(dialect);
                let n = rng.random_range(lo..=hi);
                let words: Vec<String> = (0..n)
                    .map(|_| {
                        let pool = if rng.random_bool(spec.common_word_rate) { &vocab.common } else { specific };
                        pool.choose(&mut rng).expect("non-empty pool").clone()
                    })
                    .collect();
                let mut phones = Vec::new();
                for w in &words {
                    let pron = &lexicon.pronunciations(w).expect("word from lexicon")[0];
                    if dialect == DialectLabel::Ct && spec.nasalize_ct {
                        phones.extend(apply_nasalization_relabel(pron, &inventory, RelabelScope::WordFinal));
                    } else {
                        phones.extend(pron.iter().cloned());
                    }
                }
                records.push(UtteranceRecord {
                    utt_id: utt_id.clone(),
                    audio_path: PathBuf::from("audio").join(format!("{utt_id}.wav")),
                    dialect,
                    speaker_id: speaker.clone(),
                    transcript: words,
                });
                plans.push(UtterancePlan {
                    dialect,
                    voice,
                    phones,
                    seed: rng.random(),
                });
            }
        }
    }
    Ok(SyntheticCorpus {
        spec: spec.clone(),
        seed,
        inventory,
        records,
        plans,
        lt_lexicon: vocab.lt,
        ct_lexicon: vocab.ct,
        rules,
        overrides: vocab.overrides,
        parallel,
        warnings,
    })
}

/// Frequency-domain renderer shared across utterances.
pub struct Renderer {
    sample_rate: u32,
    fft: Arc<dyn Fft<f64>>,
    ifft: Arc<dyn Fft<f64>>,
    hann: Vec<f64>,
}

impl Renderer {
    pub fn new(sample_rate: u32) -> Self {
        let mut planner = FftPlanner::new();
        let hann = (0..WINDOW)
            .map(|n| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * n as f64 / WINDOW as f64).cos())
            .collect();
        Renderer {
            sample_rate,
            fft: planner.plan_fft_forward(FFT_SIZE),
            ifft: planner.plan_fft_inverse(FFT_SIZE),
            hann,
        }
    }

    fn envelope(&self, state: &StateTemplate, scale: [f64; 3]) -> Vec<f64> {
        let bin_hz = self.sample_rate as f64 / FFT_SIZE as f64;
        (0..=FFT_SIZE / 2)
            .map(|k| {
                let f = k as f64 * bin_hz;
                let mut mag = 0.004;
                for (i, &(centre, bw, g)) in state.formants.iter().enumerate() {
                    let c = centre * scale[i.min(2)];
                    let x = (f - c) / (0.5 * bw);
                    mag += g / (1.0 + x * x);
                }
                if state.voicing > 0.5 {
                    mag /= (1.0 + (f / 900.0).powi(2)).sqrt();
                }
                mag * state.gain
            })
            .collect()
    }

    /// Renders a plan. Output is fully determined by the plan.
    pub fn render(&self, plan: &UtterancePlan, spec: &SynthSpec) -> Result<AudioBuffer> {
        let mut rng = ChaCha8Rng::seed_from_u64(plan.seed);
        let sr = self.sample_rate as f64;
        let voice = plan.voice;
        let ct = plan.dialect == DialectLabel::Ct;

        // One entry per 10 ms hop: (envelope, voicing). Silence is `None`.
        let mut frames: Vec<Option<(Vec<f64>, f64)>> = Vec::new();
        let lead = rng.random_range(20..40);
        frames.extend(std::iter::repeat_n(None, lead));
        for phone in &plan.phones {
            let t = template(phone).ok_or_else(|| Error::UnknownUnit(phone.clone()))?;
            let mut dur = t.duration * rng.random_range(0.8..1.25) / voice.rate;
            if t.vowel && ct {
                dur *= spec.ct_vowel_duration_scale;
            }
            let per_state = ((dur * sr / HOP as f64 / 3.0).round() as usize).max(2);
            let jitter: f64 = Normal::new(1.0, 0.02).expect("valid").sample(&mut rng);
            let mut scale = [voice.formant_scale * jitter; 3];
            if t.vowel && ct && phone != "A~" {
                scale[0] *= spec.ct_vowel_formant_scale[0];
                scale[1] *= spec.ct_vowel_formant_scale[1];
            }
            for s in &t.states {
                let env = self.envelope(s, scale);
                frames.extend(std::iter::repeat_n(Some((env, s.voicing)), per_state));
            }
        }
        let trail = rng.random_range(20..40);
        frames.extend(std::iter::repeat_n(None, trail));

        let pad = (FFT_SIZE - WINDOW) / 2;
        let total = frames.len() * HOP + WINDOW;
        let mut out = vec![0.0; total + 2 * pad];
        let mut next_pulse = 0.0;
        let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
        for (i, frame) in frames.iter().enumerate() {
            let Some((env, voicing)) = frame else { continue };
            let start = i * HOP;
            // Slow pitch declination over the utterance plus small jitter.
            let f0 = voice.pitch_hz * (1.0 - 0.15 * i as f64 / frames.len() as f64);
            let period = sr / f0;
            buf.iter_mut().for_each(|c| *c = Complex::new(0.0, 0.0));
            let noise_w = (1.0 - voicing).sqrt();
            for n in 0..WINDOW {
                let z: f64 = rng.sample(StandardNormal);
                buf[pad + n].re = noise_w * z * self.hann[n];
            }
            if *voicing > 0.0 {
                while next_pulse < start as f64 {
                    next_pulse += period;
                }
                let mut p = next_pulse;
                let amp = voicing.sqrt() * period.sqrt();
                while p < (start + WINDOW) as f64 {
                    let n = (p - start as f64) as usize;
                    buf[pad + n].re += amp * self.hann[n];
                    p += period * (1.0 + 0.01 * rng.sample::<f64, _>(StandardNormal));
                }
            }
            self.fft.process(&mut buf);
            for (k, c) in buf.iter_mut().enumerate() {
                let bin = if k <= FFT_SIZE / 2 { k } else { FFT_SIZE - k };
                *c *= env[bin];
            }
            self.ifft.process(&mut buf);
            for (k, c) in buf.iter().enumerate() {
                out[start + k] += c.re / FFT_SIZE as f64;
            }
        }
        let samples = &out[pad..pad + total];
        let peak = samples.iter().fold(0.0f64, |m, v| m.max(v.abs())).max(1e-12);
        let noise_std = voice.amplitude * 10f64.powf(spec.noise_db / 20.0);
        let samples: Vec<f64> = samples
            .iter()
            .map(|v| v / peak * voice.amplitude + noise_std * rng.sample::<f64, _>(StandardNormal))
            .collect();
        AudioBuffer::new(samples, self.sample_rate)
    }
}

impl SyntheticCorpus {
    pub fn render(&self, index: usize) -> Result<AudioBuffer> {
        Renderer::new(self.spec.sample_rate).render(&self.plans[index], &self.spec)
    }

    /// Renders every utterance in parallel.
    pub fn render_all(&self) -> Result<Vec<AudioBuffer>> {
        let renderer = Renderer::new(self.spec.sample_rate);
        self.plans.par_iter().map(|p| renderer.render(p, &self.spec)).collect()
    }

    /// Number of canonical word-final vowel + nasal pairs realized as the
    /// nasalized vowel, per dialect utterance.
    pub fn nasalized_per_utterance(&self, dialect: DialectLabel) -> f64 {
        let Some(sym) = self.inventory.nasalized_symbol() else { return 0.0 };
        let plans: Vec<&UtterancePlan> = self.plans.iter().filter(|p| p.dialect == dialect).collect();
        let n: usize = plans.iter().map(|p| p.phones.iter().filter(|q| *q == sym).count()).sum();
        n as f64 / plans.len().max(1) as f64
    }

    /// Writes `manifest.tsv`, `audio/*.wav`, `lt.lex`, `ct.lex`,
    /// `rules.tsv`, `overrides.tsv`, `parallel.tsv`, `inventory.toml` and
    /// `synth.toml` under `dir`, creating it as needed.
    pub fn write(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        let audio_dir = dir.join("audio");
        std::fs::create_dir_all(&audio_dir).map_err(|e| Error::io(&audio_dir, e))?;
        let renderer = Renderer::new(self.spec.sample_rate);
        self.records
            .par_iter()
            .zip(&self.plans)
            .try_for_each(|(r, p)| wav::write_wav(dir.join(&r.audio_path), &renderer.render(p, &self.spec)?))?;
        let write = |name: &str, text: String| {
            let path = dir.join(name);
            std::fs::write(&path, text).map_err(|e| Error::io(&path, e))
        };
        write("manifest.tsv", format_manifest(&self.records))?;
        write("lt.lex", self.lt_lexicon.to_text())?;
        write("ct.lex", self.ct_lexicon.to_text())?;
        write("rules.tsv", self.rules.iter().map(|r| format!("{r}\n")).collect())?;
        write("overrides.tsv", self.overrides.iter().map(|(a, b)| format!("{a}\t{b}\n")).collect())?;
        write("parallel.tsv", self.parallel.to_text())?;
        write("inventory.toml", self.inventory.to_toml())?;
        write("synth.toml", format!("# seed = {}\n{}", self.seed, self.spec.to_toml()))?;
        Ok(())
    }

    /// Total transcript words per dialect.
    pub fn word_counts(&self) -> BTreeMap<DialectLabel, usize> {
        let mut m = BTreeMap::new();
        for r in &self.records {
            *m.entry(r.dialect).or_default() += r.transcript.len();
        }
        m
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_spec() -> SynthSpec {
        SynthSpec {
            speakers_per_dialect: 2,
            utterances_per_speaker: 3,
            rule_pairs: 10,
            common_words: 4,
            irregular_pairs: 2,
            ct_only_words: 1,
            ..SynthSpec::default()
        }
    }

    #[test]
    fn every_default_phone_has_a_template() {
        for p in PhoneInventory::default_tamil_like().phones() {
            assert!(template(p).is_some(), "{p}");
        }
    }

    #[test]
    fn counts_and_vocabulary() {
        let c = generate_synthetic_corpus(&small_spec(), 3).unwrap();
        assert_eq!(c.records.len(), 12);
        assert!(c.warnings.is_empty(), "{:?}", c.warnings);
        assert!(c.lt_lexicon.contains("enna") && c.ct_lexicon.contains("enna"));
        c.lt_lexicon.validate(&c.inventory.subset(Some(DialectLabel::Lt), false)).unwrap();
        c.ct_lexicon.validate(&c.inventory).unwrap();
        assert_eq!(c.parallel.lookup("enna", DialectLabel::Lt), Some("enna"));
        for (src, dst) in c.parallel.entries(DialectLabel::Lt) {
            assert!(c.lt_lexicon.contains(src) && c.ct_lexicon.contains(dst));
        }
        // The first irregular word has a rule-derived false friend in the
        // CT lexicon, but the override wins.
        let (lt_word, ct_word) = &c.overrides[0];
        let pron = &c.lt_lexicon.pronunciations(lt_word).unwrap()[0];
        let friend = apply_rules(&c.rules, pron);
        assert_eq!(c.ct_lexicon.words_with_pronunciation(&friend).len(), 1);
        assert_eq!(c.parallel.lookup(lt_word, DialectLabel::Lt), Some(ct_word.as_str()));
        for r in &c.records {
            let lex = if r.dialect == DialectLabel::Lt { &c.lt_lexicon } else { &c.ct_lexicon };
            assert!(r.transcript.iter().all(|w| lex.contains(w)));
        }
    }

    #[test]
    fn deterministic_under_seed() {
        let a = generate_synthetic_corpus(&small_spec(), 9).unwrap();
        let b = generate_synthetic_corpus(&small_spec(), 9).unwrap();
        assert_eq!(a.records, b.records);
        assert_eq!(a.plans, b.plans);
        assert_eq!(a.render(0).unwrap().samples(), b.render(0).unwrap().samples());
        let c = generate_synthetic_corpus(&small_spec(), 10).unwrap();
        assert_ne!(a.records, c.records);
    }

    #[test]
    fn ct_is_shorter_and_nasalized() {
        let spec = SynthSpec {
            speakers_per_dialect: 3,
            utterances_per_speaker: 6,
            ..SynthSpec::default()
        };
        let c = generate_synthetic_corpus(&spec, 1).unwrap();
        assert!(c.nasalized_per_utterance(DialectLabel::Ct) >= 1.0);
        assert_eq!(c.nasalized_per_utterance(DialectLabel::Lt), 0.0);
        let audio = c.render_all().unwrap();
        let mean = |d: DialectLabel| {
            let v: Vec<f64> = c
                .records
                .iter()
                .zip(&audio)
                .filter(|(r, _)| r.dialect == d)
                .map(|(_, a)| a.duration())
                .collect();
            v.iter().sum::<f64>() / v.len() as f64
        };
        let (lt, ct) = (mean(DialectLabel::Lt), mean(DialectLabel::Ct));
        assert!(lt > 1.5 * ct, "LT {lt:.2}s vs CT {ct:.2}s");
        assert!(audio.iter().all(|a| a.samples().iter().all(|s| s.abs() <= 1.0)));
    }

    #[test]
    fn spec_validation() {
        let mut s = SynthSpec::default();
        s.words_per_utterance.lt = [3, 2];
        assert!(s.validate().is_err());
        let no_nasal = PhoneInventory::new(
            vec!["a".into(), "e".into(), "nn".into()],
            ["a".to_string(), "e".to_string()].into(),
            ["nn".to_string()].into(),
            vec![],
            Default::default(),
        )
        .unwrap();
        let s = SynthSpec {
            inventory: Some(no_nasal),
            ..SynthSpec::default()
        };
        assert!(matches!(s.validate(), Err(Error::InvalidConfig(_))));
        let text = SynthSpec::default().to_toml();
        assert_eq!(SynthSpec::from_toml(&text).unwrap(), SynthSpec::default());
    }
}
