//! Batch orchestration: corpus resources, feature extraction, training of
//! every system into a model directory, and loading trained systems back
//! for identification.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::cnn::{self, CnnModel, CnnTrainConfig};
use crate::corpus::synth::SyntheticCorpus;
use crate::corpus::{
    build_parallel_dictionary, load_override_table, load_rule_table, merge_lexicons, wav, DialectLabel, DialectPair,
    Lexicon, LexiconTag, ParallelDictionary, PhoneInventory, UtteranceRecord,
};
use crate::decode::{estimate_bigram, pronunciation_units, PhoneLM};
use crate::did::{
    self, relabel_lexicon, Decision, DecodeOptions, EquiprobablePolicy, PlvcsrSystem, PprSystem, PprVersion,
    DecisionRecord, Metrics, RelabelScope, SystemKind, UprOptions, UprSystem, WordMemberships, WordRecognizer,
};
use crate::error::{Error, Result};
use crate::featext::{extract_features, fix_length, FeatureMatrix, FrontEndConfig, MfccExtractor};
use crate::gmm::{self, GmmModel, GmmTrainConfig};
use crate::hmm::{self, EmbeddedTrainConfig, HmmSet};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PathsConfig {
    /// Directory holding `manifest.tsv`, `lt.lex`, `ct.lex` and optionally
    /// `inventory.toml`, `rules.tsv`, `overrides.tsv`.
    pub corpus_dir: PathBuf,
    /// Manifest to split; `corpus_dir/manifest.tsv` when absent.
    pub manifest: Option<PathBuf>,
    pub models_dir: PathBuf,
    pub output_dir: PathBuf,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            corpus_dir: "data".into(),
            manifest: None,
            models_dir: "models".into(),
            output_dir: "out".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SplitConfig {
    pub train_fraction: f64,
    pub seed: u64,
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig {
            train_fraction: 0.7,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HmmConfig {
    #[serde(flatten)]
    pub embedded: EmbeddedTrainConfig,
    /// Word-internal triphones for the word recognizers.
    pub triphones: bool,
    pub triphone_min_count: usize,
    /// Add-k constant of the phone bigrams.
    pub lm_k: f64,
    /// Train CT (and unified) systems on nasalization-relabeled transcripts.
    pub nasalization: bool,
    pub relabel_scope: RelabelScope,
}

impl Default for HmmConfig {
    fn default() -> Self {
        HmmConfig {
            embedded: EmbeddedTrainConfig::default(),
            triphones: false,
            triphone_min_count: 3,
            lm_k: 1.0,
            nasalization: true,
            relabel_scope: RelabelScope::WordFinal,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CnnConfig {
    #[serde(flatten)]
    pub train: CnnTrainConfig,
    pub input_frames: usize,
    pub init_seed: u64,
}

impl Default for CnnConfig {
    fn default() -> Self {
        CnnConfig {
            train: CnnTrainConfig::default(),
            input_frames: cnn::INPUT_FRAMES,
            init_seed: 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DecodeConfig {
    pub beam: Option<f64>,
    pub duration_normalize: bool,
    pub exclude_common: bool,
    pub equiprobable: EquiprobablePolicy,
}

impl Default for DecodeConfig {
    fn default() -> Self {
        DecodeConfig {
            beam: None,
            duration_normalize: false,
            exclude_common: true,
            equiprobable: EquiprobablePolicy::Fallback,
        }
    }
}

impl DecodeConfig {
    pub fn decode_options(&self) -> DecodeOptions {
        DecodeOptions {
            beam: self.beam,
            duration_normalize: self.duration_normalize,
        }
    }

    pub fn upr_options(&self) -> UprOptions {
        UprOptions {
            exclude_common: self.exclude_common,
            equiprobable: self.equiprobable,
            decode: self.decode_options(),
        }
    }
}

/// Everything a batch run needs; read from TOML.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub systems: Vec<SystemKind>,
    /// Worker threads; 0 uses every core.
    pub workers: usize,
    pub paths: PathsConfig,
    pub split: SplitConfig,
    pub frontend: FrontEndConfig,
    pub gmm: GmmTrainConfig,
    pub hmm: HmmConfig,
    pub cnn: CnnConfig,
    pub decode: DecodeConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            systems: SystemKind::ALL.to_vec(),
            workers: 0,
            paths: PathsConfig::default(),
            split: SplitConfig::default(),
            frontend: FrontEndConfig::default(),
            gmm: GmmTrainConfig::default(),
            hmm: HmmConfig::default(),
            cnn: CnnConfig::default(),
            decode: DecodeConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let cfg: RunConfig = toml::from_str(text).map_err(|e| Error::InvalidConfig(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Loads a config file; relative paths are resolved against its directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text)?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.paths.corpus_dir);
        fix(&mut cfg.paths.models_dir);
        fix(&mut cfg.paths.output_dir);
        if let Some(m) = cfg.paths.manifest.as_mut() {
            fix(m);
        }
        Ok(cfg)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        if self.systems.is_empty() {
            return Err(Error::InvalidConfig("no systems selected".into()));
        }
        self.frontend.mfcc.validate()?;
        if self.hmm.embedded.schedule.is_empty() || self.hmm.embedded.schedule.contains(&0) {
            return Err(Error::InvalidConfig("hmm schedule must be non-empty and positive".into()));
        }
        if !(self.hmm.lm_k > 0.0) {
            return Err(Error::InvalidConfig("lm_k must be positive".into()));
        }
        if self.cnn.input_frames < 4 {
            return Err(Error::InvalidConfig("cnn input_frames must be at least 4".into()));
        }
        Ok(())
    }

    /// Hex SHA-256 of the canonical TOML form.
    pub fn digest(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn manifest_path(&self) -> PathBuf {
        self.paths
            .manifest
            .clone()
            .unwrap_or_else(|| self.paths.corpus_dir.join("manifest.tsv"))
    }
}

/// Lexicons, inventory and parallel dictionary of a corpus directory.
#[derive(Debug, Clone)]
pub struct CorpusResources {
    pub inventory: PhoneInventory,
    pub lt_lexicon: Lexicon,
    pub ct_lexicon: Lexicon,
    pub parallel: ParallelDictionary,
}

impl CorpusResources {
    pub fn from_synthetic(corpus: &SyntheticCorpus) -> Self {
        CorpusResources {
            inventory: corpus.inventory.clone(),
            lt_lexicon: corpus.lt_lexicon.clone(),
            ct_lexicon: corpus.ct_lexicon.clone(),
            parallel: corpus.parallel.clone(),
        }
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let inv_path = dir.join("inventory.toml");
        let inventory = if inv_path.exists() {
            PhoneInventory::load(&inv_path)?
        } else {
            PhoneInventory::default_tamil_like()
        };
        let lt = Lexicon::load(dir.join("lt.lex"), LexiconTag::Lt)?;
        let ct = Lexicon::load(dir.join("ct.lex"), LexiconTag::Ct)?;
        lt.validate(&inventory)?;
        ct.validate(&inventory)?;
        let optional = |name: &str| {
            let p = dir.join(name);
            p.exists().then_some(p)
        };
        let rules = optional("rules.tsv").map(load_rule_table).transpose()?.unwrap_or_default();
        let overrides = optional("overrides.tsv")
            .map(load_override_table)
            .transpose()?
            .unwrap_or_default();
        let (parallel, warnings) = build_parallel_dictionary(&rules, &overrides, &lt, &ct);
        for w in warnings {
            log::warn!("{w}");
        }
        Ok(CorpusResources {
            inventory,
            lt_lexicon: lt,
            ct_lexicon: ct,
            parallel,
        })
    }
}

/// Reads and featurizes every record in parallel; order is preserved.
pub fn extract_corpus(records: &[UtteranceRecord], base: &Path, cfg: &FrontEndConfig) -> Result<Vec<FeatureMatrix>> {
    let extractors: std::sync::Mutex<BTreeMap<u32, MfccExtractor>> = Default::default();
    records
        .par_iter()
        .map(|r| {
            let audio = wav::read_wav(r.resolve_audio(base))?;
            let sr = audio.sample_rate();
            let ex = {
                let mut map = extractors.lock().expect("extractor cache");
                match map.entry(sr) {
                    std::collections::btree_map::Entry::Occupied(e) => e.get().clone(),
                    std::collections::btree_map::Entry::Vacant(e) => e.insert(MfccExtractor::new(&cfg.mfcc, sr)?).clone(),
                }
            };
            extract_features(&ex, &audio, cfg, &r.utt_id)
        })
        .collect()
}

/// Per-word phone sequences of a transcript, from each word's first
/// pronunciation.
pub fn transcript_prons(words: &[String], lexicon: &Lexicon) -> Result<Vec<Vec<String>>> {
    words
        .iter()
        .map(|w| {
            lexicon
                .pronunciations(w)
                .map(|p| p[0].clone())
                .ok_or_else(|| Error::UnknownWord(w.clone()))
        })
        .collect()
}

/// Per-stage best-path log-likelihoods of one trained model set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HmmTrainSummary {
    pub models: usize,
    pub skipped: usize,
    pub stages: Vec<(usize, Vec<f64>)>,
}

/// Flat start, uniform segmentation, then embedded Viterbi training; with
/// triphones the monophones get the first stage only before expansion.
pub fn train_hmm_set(
    inventory: &PhoneInventory,
    data: &[(&FeatureMatrix, Vec<Vec<String>>)],
    cfg: &HmmConfig,
) -> Result<(HmmSet, HmmTrainSummary)> {
    let feats: Vec<&FeatureMatrix> = data.iter().map(|(f, _)| *f).collect();
    let pooled = FeatureMatrix::concat(&feats, "pooled")?;
    let floor = cfg.embedded.floor_scale;
    let flat = hmm::flat_start(inventory, pooled.view(), floor)?;
    let units_for = |set: &HmmSet| -> Vec<(crate::FrameView<'_>, Vec<String>)> {
        data.iter()
            .map(|(f, prons)| (f.view(), prons.iter().flat_map(|p| pronunciation_units(set, p)).collect()))
            .collect()
    };
    let corpus = units_for(&flat);
    let init = hmm::init_uniform(&flat, &corpus, floor)?;
    let mut stages = Vec::new();
    let skipped;
    let set = if cfg.triphones {
        let mono_cfg = EmbeddedTrainConfig {
            schedule: cfg.embedded.schedule[..1].to_vec(),
            ..cfg.embedded.clone()
        };
        let mono = hmm::train_embedded(&init, &corpus, &mono_cfg)?;
        stages.extend(mono.stages.iter().map(|s| (s.mixtures, s.path_logliks.clone())));
        let word_prons: Vec<Vec<String>> = data.iter().flat_map(|(_, p)| p.iter().cloned()).collect();
        let tri = hmm::expand_triphones(&mono.set, &word_prons, cfg.triphone_min_count)?;
        let tri_corpus = units_for(&tri);
        let out = hmm::train_embedded(&tri, &tri_corpus, &cfg.embedded)?;
        skipped = out.skipped;
        stages.extend(out.stages.iter().map(|s| (s.mixtures, s.path_logliks.clone())));
        out.set
    } else {
        let out = hmm::train_embedded(&init, &corpus, &cfg.embedded)?;
        skipped = out.skipped;
        stages.extend(out.stages.iter().map(|s| (s.mixtures, s.path_logliks.clone())));
        out.set
    };
    let summary = HmmTrainSummary {
        models: set.len(),
        skipped,
        stages,
    };
    Ok((set, summary))
}

/// Which artifacts a set of systems needs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
struct Needs {
    gmm: bool,
    cnn: bool,
    lt_hmm: bool,
    ct_canonical: bool,
    ct_relabeled: bool,
    unified: bool,
    lms: bool,
}

impl Needs {
    fn of(systems: &[SystemKind]) -> Self {
        let mut n = Needs::default();
        for s in systems {
            match s {
                SystemKind::Gmm => n.gmm = true,
                SystemKind::Cnn => n.cnn = true,
                SystemKind::PprV1 => {
                    n.lt_hmm = true;
                    n.ct_canonical = true;
                    n.lms = true;
                }
                SystemKind::PprV2 => {
                    n.lt_hmm = true;
                    n.ct_relabeled = true;
                    n.lms = true;
                }
                SystemKind::PprV3 | SystemKind::Plvcsr => {
                    n.lt_hmm = true;
                    n.ct_relabeled = true;
                }
                SystemKind::Upr1 | SystemKind::Upr2 => {
                    n.lt_hmm = true;
                    n.ct_relabeled = true;
                    n.unified = true;
                }
            }
        }
        n
    }
}

/// Model directory file names.
pub mod files {
    pub const GMM_LT: &str = "gmm_lt.json";
    pub const GMM_CT: &str = "gmm_ct.json";
    pub const CNN: &str = "cnn.json";
    pub const HMM_LT: &str = "hmm_lt.json";
    pub const HMM_CT: &str = "hmm_ct.json";
    pub const HMM_CT_CANONICAL: &str = "hmm_ct_canonical.json";
    pub const HMM_UNIFIED: &str = "hmm_unified.json";
    pub const LM_LT: &str = "lm_lt.json";
    pub const LM_CT: &str = "lm_ct.json";
    pub const LM_CT_CANONICAL: &str = "lm_ct_canonical.json";
    pub const LEX_LT: &str = "lt.lex";
    pub const LEX_CT: &str = "ct.lex";
    pub const LEX_UNIFIED: &str = "unified.lex";
    pub const PARALLEL: &str = "parallel.tsv";
    pub const TRAIN_MANIFEST: &str = "train.tsv";
    pub const TEST_MANIFEST: &str = "test.tsv";
    pub const TRAIN_REPORT: &str = "train_report.json";
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainReport {
    pub systems: Vec<SystemKind>,
    pub train_utterances: usize,
    pub gmm_components: Option<usize>,
    pub hmm: BTreeMap<String, HmmTrainSummary>,
    pub cnn_epoch_losses: Vec<f64>,
}

/// Atomic write: temp file in the same directory, then rename.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let dir = path.parent().filter(|p| !p.as_os_str().is_empty()).unwrap_or(Path::new("."));
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = path.file_name().and_then(|n| n.to_str()).unwrap_or("out");
    let tmp = dir.join(format!(".{name}.tmp{}", std::process::id()));
    std::fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    std::fs::rename(&tmp, path).map_err(|e| {
        let _ = std::fs::remove_file(&tmp);
        Error::io(path, e)
    })
}

fn lexicon_text_for_save(lex: &Lexicon) -> String {
    lex.to_text()
}

/// Trains every artifact the configured systems need from the given
/// training utterances and writes them under `models_dir`. The returned
/// report is not written.
pub fn train_systems(
    cfg: &RunConfig,
    res: &CorpusResources,
    records: &[UtteranceRecord],
    feats: &[FeatureMatrix],
    models_dir: &Path,
) -> Result<TrainReport> {
    if records.is_empty() {
        return Err(Error::EmptyInput("training utterances"));
    }
    std::fs::create_dir_all(models_dir).map_err(|e| Error::io(models_dir, e))?;
    let needs = Needs::of(&cfg.systems);
    let mut report = TrainReport {
        systems: cfg.systems.clone(),
        train_utterances: records.len(),
        ..Default::default()
    };
    let by_dialect = |d: DialectLabel| -> Vec<usize> { (0..records.len()).filter(|&i| records[i].dialect == d).collect() };
    let save = |name: &str, text: String| write_atomic(&models_dir.join(name), text.as_bytes());

    if needs.gmm {
        let t = Instant::now();
        for (d, file) in [(DialectLabel::Lt, files::GMM_LT), (DialectLabel::Ct, files::GMM_CT)] {
            let parts: Vec<&FeatureMatrix> = by_dialect(d).into_iter().map(|i| &feats[i]).collect();
            if parts.is_empty() {
                return Err(Error::EmptyInput("training utterances for a dialect"));
            }
            let pooled = FeatureMatrix::concat(&parts, d.as_str())?;
            let model = gmm::train_gmm(pooled.view(), &cfg.gmm, d.as_str())?;
            report.gmm_components = Some(model.num_components());
            save(file, model.to_json())?;
        }
        info!("gmm trained in {:.1}s", t.elapsed().as_secs_f64());
    }

    if needs.cnn {
        let t = Instant::now();
        let data: Vec<(FeatureMatrix, DialectLabel)> = records
            .iter()
            .zip(feats)
            .map(|(r, f)| Ok((fix_length(f, cfg.cnn.input_frames)?, r.dialect)))
            .collect::<Result<_>>()?;
        let dim = feats[0].dim();
        let model = cnn::build_reference_cnn_for(cfg.cnn.input_frames, dim, cfg.cnn.init_seed)?;
        let out = cnn::train(&model, &data, &cfg.cnn.train)?;
        report.cnn_epoch_losses = out.epoch_losses;
        save(files::CNN, out.model.to_json())?;
        info!("cnn trained in {:.1}s", t.elapsed().as_secs_f64());
    }

    let ct_relabeled = if cfg.hmm.nasalization {
        relabel_lexicon(&res.ct_lexicon, &res.inventory, cfg.hmm.relabel_scope)?
    } else {
        res.ct_lexicon.clone()
    };
    let include_nasalized = cfg.hmm.nasalization;
    let mut hmm_job = |name: &str,
                       inventory: PhoneInventory,
                       idx: Vec<usize>,
                       lexes: DialectPair<&Lexicon>,
                       lm_file: Option<&str>|
     -> Result<()> {
        let t = Instant::now();
        let data: Vec<(&FeatureMatrix, Vec<Vec<String>>)> = idx
            .iter()
            .map(|&i| Ok((&feats[i], transcript_prons(&records[i].transcript, lexes.get(records[i].dialect))?)))
            .collect::<Result<_>>()?;
        if data.is_empty() {
            return Err(Error::EmptyInput("training utterances for a model set"));
        }
        if let Some(lm_file) = lm_file {
            let phones: Vec<Vec<String>> = data.iter().map(|(_, p)| p.concat()).collect();
            let lm = estimate_bigram(&phones, &inventory, cfg.hmm.lm_k)?;
            save(lm_file, lm.to_json())?;
        }
        let (set, summary) = train_hmm_set(&inventory, &data, &cfg.hmm)?;
        save(name, set.to_json())?;
        info!("{name}: {} models in {:.1}s", set.len(), t.elapsed().as_secs_f64());
        report.hmm.insert(name.to_string(), summary);
        Ok(())
    };

    if needs.lt_hmm {
        let inv = res.inventory.subset(Some(DialectLabel::Lt), false);
        hmm_job(
            files::HMM_LT,
            inv,
            by_dialect(DialectLabel::Lt),
            DialectPair::new(&res.lt_lexicon, &res.lt_lexicon),
            needs.lms.then_some(files::LM_LT),
        )?;
    }
    if needs.ct_canonical {
        let inv = res.inventory.subset(Some(DialectLabel::Ct), false);
        hmm_job(
            files::HMM_CT_CANONICAL,
            inv,
            by_dialect(DialectLabel::Ct),
            DialectPair::new(&res.ct_lexicon, &res.ct_lexicon),
            Some(files::LM_CT_CANONICAL),
        )?;
    }
    if needs.ct_relabeled {
        let inv = res.inventory.subset(Some(DialectLabel::Ct), include_nasalized);
        hmm_job(
            files::HMM_CT,
            inv,
            by_dialect(DialectLabel::Ct),
            DialectPair::new(&ct_relabeled, &ct_relabeled),
            needs.lms.then_some(files::LM_CT),
        )?;
    }
    if needs.unified {
        let inv = res.inventory.subset(None, include_nasalized);
        hmm_job(
            files::HMM_UNIFIED,
            inv,
            (0..records.len()).collect(),
            DialectPair::new(&res.lt_lexicon, &ct_relabeled),
            None,
        )?;
    }
    save(files::LEX_LT, lexicon_text_for_save(&res.lt_lexicon))?;
    save(files::LEX_CT, lexicon_text_for_save(&ct_relabeled))?;
    let unified = merge_lexicons(&res.lt_lexicon, &ct_relabeled, &res.inventory)?;
    save(files::LEX_UNIFIED, unified.to_text())?;
    save(files::PARALLEL, res.parallel.to_text())?;
    Ok(report)
}

/// Trained systems loaded for identification.
#[derive(Debug, Default)]
pub struct LoadedSystems {
    pub gmm: Option<DialectPair<GmmModel>>,
    pub cnn: Option<CnnModel>,
    pub ppr: BTreeMap<SystemKind, PprSystem>,
    pub plvcsr: Option<PlvcsrSystem>,
    pub upr: Option<UprSystem>,
    pub parallel: Option<ParallelDictionary>,
}

impl LoadedSystems {
    /// Loads what `systems` need from `dir`. Any missing file is an error.
    pub fn load(dir: &Path, systems: &[SystemKind]) -> Result<Self> {
        let needs = Needs::of(systems);
        let p = |name: &str| dir.join(name);
        let mut out = LoadedSystems::default();
        if needs.gmm {
            out.gmm = Some(DialectPair::new(
                GmmModel::load(p(files::GMM_LT))?,
                GmmModel::load(p(files::GMM_CT))?,
            ));
        }
        if needs.cnn {
            out.cnn = Some(CnnModel::load(p(files::CNN))?);
        }
        let systems: BTreeSet<SystemKind> = systems.iter().copied().collect();
        let lm = |name: &str| PhoneLM::load(p(name));
        let needs_words = systems
            .iter()
            .any(|s| matches!(s, SystemKind::Plvcsr | SystemKind::Upr1 | SystemKind::Upr2));
        let lt_set = if needs.lt_hmm { Some(HmmSet::load(p(files::HMM_LT))?) } else { None };
        let ct_set = if needs.ct_relabeled { Some(HmmSet::load(p(files::HMM_CT))?) } else { None };
        for (kind, version) in [
            (SystemKind::PprV1, PprVersion::V1),
            (SystemKind::PprV2, PprVersion::V2),
            (SystemKind::PprV3, PprVersion::V3),
        ] {
            if !systems.contains(&kind) {
                continue;
            }
            let lt = lt_set.clone().expect("lt set loaded");
            let sys = match version {
                PprVersion::V1 => PprSystem::new(
                    version,
                    (lt, Some(lm(files::LM_LT)?)),
                    (HmmSet::load(p(files::HMM_CT_CANONICAL))?, Some(lm(files::LM_CT_CANONICAL)?)),
                )?,
                PprVersion::V2 => PprSystem::new(
                    version,
                    (lt, Some(lm(files::LM_LT)?)),
                    (ct_set.clone().expect("ct set loaded"), Some(lm(files::LM_CT)?)),
                )?,
                PprVersion::V3 => PprSystem::new(version, (lt, None), (ct_set.clone().expect("ct set loaded"), None))?,
            };
            out.ppr.insert(kind, sys);
        }
        if needs_words {
            let lt_lex = Lexicon::load(p(files::LEX_LT), LexiconTag::Lt)?;
            let ct_lex = Lexicon::load(p(files::LEX_CT), LexiconTag::Ct)?;
            out.plvcsr = Some(PlvcsrSystem::new(
                WordRecognizer::new(lt_set.clone().expect("lt set loaded"), lt_lex.clone())?,
                WordRecognizer::new(ct_set.clone().expect("ct set loaded"), ct_lex.clone())?,
            ));
            if needs.unified {
                let unified = Lexicon::load(p(files::LEX_UNIFIED), LexiconTag::Unified)?;
                let memberships = WordMemberships::new(Some(&lt_lex), Some(&ct_lex), Some(&unified));
                let set = HmmSet::load(p(files::HMM_UNIFIED))?;
                out.upr = Some(UprSystem::new(WordRecognizer::new(set, unified)?, memberships));
                if systems.contains(&SystemKind::Upr2) {
                    let (pdict, warnings) = ParallelDictionary::load(p(files::PARALLEL), &lt_lex, &ct_lex)?;
                    for w in warnings {
                        log::warn!("{w}");
                    }
                    out.parallel = Some(pdict);
                }
            }
        }
        Ok(out)
    }

    fn missing(kind: SystemKind) -> Error {
        Error::InvalidModel(format!("system {kind} was not loaded"))
    }

    pub fn identify(&self, kind: SystemKind, feat: &FeatureMatrix, cfg: &DecodeConfig) -> Result<Decision> {
        let view = feat.view();
        match kind {
            SystemKind::Gmm => did::gmm_identify(self.gmm.as_ref().ok_or_else(|| Self::missing(kind))?, view),
            SystemKind::Cnn => did::cnn_decision(self.cnn.as_ref().ok_or_else(|| Self::missing(kind))?, feat),
            SystemKind::PprV1 | SystemKind::PprV2 | SystemKind::PprV3 => did::ppr_identify(
                self.ppr.get(&kind).ok_or_else(|| Self::missing(kind))?,
                view,
                &cfg.decode_options(),
            ),
            SystemKind::Plvcsr => did::plvcsr_identify(
                self.plvcsr.as_ref().ok_or_else(|| Self::missing(kind))?,
                view,
                &cfg.decode_options(),
            ),
            SystemKind::Upr1 => did::upr1_identify(
                self.upr.as_ref().ok_or_else(|| Self::missing(kind))?,
                self.plvcsr.as_ref().ok_or_else(|| Self::missing(kind))?,
                view,
                &cfg.upr_options(),
            ),
            SystemKind::Upr2 => did::upr2_identify(
                self.upr.as_ref().ok_or_else(|| Self::missing(kind))?,
                self.parallel.as_ref().ok_or_else(|| Self::missing(kind))?,
                self.plvcsr.as_ref().ok_or_else(|| Self::missing(kind))?,
                view,
                &cfg.upr_options(),
            ),
        }
    }
}

/// Seeds, digests and version stamped into every output.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reproducibility {
    pub toolkit_version: String,
    pub command: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub config_sha256: Option<String>,
    #[serde(default)]
    pub inputs_sha256: BTreeMap<String, String>,
    #[serde(default)]
    pub seeds: BTreeMap<String, u64>,
}

impl Reproducibility {
    pub fn new(command: &str) -> Self {
        Reproducibility {
            toolkit_version: crate::VERSION.to_string(),
            command: command.to_string(),
            config_sha256: None,
            inputs_sha256: BTreeMap::new(),
            seeds: BTreeMap::new(),
        }
    }

    pub fn with_config(command: &str, cfg: &RunConfig) -> Self {
        let mut r = Self::new(command);
        r.config_sha256 = Some(cfg.digest());
        r.seeds = [
            ("split".to_string(), cfg.split.seed),
            ("cnn_init".to_string(), cfg.cnn.init_seed),
            ("cnn_train".to_string(), cfg.cnn.train.seed),
        ]
        .into_iter()
        .collect();
        r
    }

    /// Records the digest of an input file under its file name.
    pub fn add_input(&mut self, path: &Path) -> Result<()> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        let name = path
            .file_name()
            .map(|n| n.to_string_lossy().into_owned())
            .unwrap_or_else(|| path.display().to_string());
        self.inputs_sha256.insert(name, hex::encode(Sha256::digest(&bytes)));
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainReportFile {
    pub reproducibility: Reproducibility,
    #[serde(flatten)]
    pub report: TrainReport,
}

/// Output of `identify`: one record per utterance, sorted by `utt_id`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecisionsFile {
    pub reproducibility: Reproducibility,
    pub system: SystemKind,
    pub decisions: Vec<DecisionRecord>,
}

impl DecisionsFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("decisions serialize") + "\n"
    }
}

/// Output of `evaluate`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvaluationReport {
    pub reproducibility: Reproducibility,
    pub system: SystemKind,
    pub metrics: Metrics,
}

impl EvaluationReport {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::Format(format!("{}: {e}", path.display())))
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes") + "\n"
    }
}

/// Identifies every utterance in parallel; records come back sorted by
/// `utt_id`. Per-utterance failures are recorded, not propagated.
pub fn identify_all(
    systems: &LoadedSystems,
    kind: SystemKind,
    utt_ids: &[String],
    feats: &[FeatureMatrix],
    cfg: &DecodeConfig,
) -> Vec<DecisionRecord> {
    let mut out: Vec<DecisionRecord> = utt_ids
        .par_iter()
        .zip(feats.par_iter())
        .map(|(id, f)| DecisionRecord::from_result(id, systems.identify(kind, f, cfg)))
        .collect();
    out.sort_by(|a, b| a.utt_id.cmp(&b.utt_id));
    out
}

/// Pairs decisions with manifest truth. Every manifest utterance needs
/// exactly one decision and every decision a manifest entry.
pub fn score_decisions(decisions: &[DecisionRecord], truth: &[UtteranceRecord]) -> Result<Metrics> {
    let labels: BTreeMap<&str, DialectLabel> = truth.iter().map(|r| (r.utt_id.as_str(), r.dialect)).collect();
    let mut seen = BTreeSet::new();
    let mut pairs = Vec::with_capacity(decisions.len());
    for d in decisions {
        let label = labels
            .get(d.utt_id.as_str())
            .ok_or_else(|| Error::Format(format!("decision for `{}` has no manifest entry", d.utt_id)))?;
        if !seen.insert(d.utt_id.as_str()) {
            return Err(Error::DuplicateUtterance(d.utt_id.clone()));
        }
        pairs.push((d.clone(), *label));
    }
    if let Some(missing) = labels.keys().find(|id| !seen.contains(*id)) {
        return Err(Error::Format(format!("no decision for utterance `{missing}`")));
    }
    did::metrics_from_records(pairs)
}

/// Split manifests point at absolute audio paths so they stay valid from
/// the model directory.
fn absolutize(records: &[UtteranceRecord], base: &Path) -> Result<Vec<UtteranceRecord>> {
    records
        .iter()
        .map(|r| {
            let p = r.resolve_audio(base);
            let abs = std::fs::canonicalize(&p).map_err(|e| Error::io(&p, e))?;
            Ok(UtteranceRecord {
                audio_path: abs,
                ..r.clone()
            })
        })
        .collect()
}

fn manifest_base(manifest: &Path) -> &Path {
    manifest.parent().unwrap_or(Path::new("."))
}

/// The `train` command: speaker-disjoint split of the configured manifest,
/// feature extraction, training, then split manifests and the train report
/// written to the model directory.
pub fn train_from_config(cfg: &RunConfig) -> Result<TrainReportFile> {
    cfg.validate()?;
    let manifest = cfg.manifest_path();
    for p in [&cfg.paths.corpus_dir, &manifest] {
        if !p.exists() {
            return Err(Error::InvalidConfig(format!("path {} does not exist", p.display())));
        }
    }
    let records = crate::corpus::load_manifest(&manifest)?;
    let base = manifest_base(&manifest);
    let split = crate::corpus::split_speaker_disjoint(&records, base, cfg.split.train_fraction, cfg.split.seed)?;
    let train = absolutize(&split.train, base)?;
    let test = absolutize(&split.test, base)?;
    let res = CorpusResources::load(&cfg.paths.corpus_dir)?;

    let models = &cfg.paths.models_dir;
    info!("extracting features for {} training utterances", train.len());
    let feats = extract_corpus(&train, base, &cfg.frontend)?;
    let report = train_systems(cfg, &res, &train, &feats, models)?;
    write_atomic(&models.join(files::TRAIN_MANIFEST), crate::corpus::format_manifest(&train).as_bytes())?;
    write_atomic(&models.join(files::TEST_MANIFEST), crate::corpus::format_manifest(&test).as_bytes())?;

    let mut repro = Reproducibility::with_config("train", cfg);
    repro.add_input(&manifest)?;
    let file = TrainReportFile {
        reproducibility: repro,
        report,
    };
    write_atomic(
        &models.join(files::TRAIN_REPORT),
        (serde_json::to_string_pretty(&file).expect("report serializes") + "\n").as_bytes(),
    )?;
    Ok(file)
}

/// The `identify` command without the final write. Models are loaded before
/// anything else so that a missing file fails early.
pub fn identify_manifest(cfg: &RunConfig, system: SystemKind, manifest: &Path) -> Result<DecisionsFile> {
    let models = &cfg.paths.models_dir;
    let systems = LoadedSystems::load(models, &[system])?;
    let records = crate::corpus::load_manifest(manifest)?;
    let feats = extract_corpus(&records, manifest_base(manifest), &cfg.frontend)?;
    let ids: Vec<String> = records.iter().map(|r| r.utt_id.clone()).collect();
    let decisions = identify_all(&systems, system, &ids, &feats, &cfg.decode);

    let mut repro = Reproducibility::with_config("identify", cfg);
    repro.add_input(manifest)?;
    let report = models.join(files::TRAIN_REPORT);
    if report.exists() {
        repro.add_input(&report)?;
    }
    Ok(DecisionsFile {
        reproducibility: repro,
        system,
        decisions,
    })
}
