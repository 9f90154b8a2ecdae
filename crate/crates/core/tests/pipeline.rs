use dialect_id::corpus::synth::{generate_synthetic_corpus, SynthSpec};
use dialect_id::corpus::split_speaker_disjoint_by;
use dialect_id::did::{DecisionRecord, SystemKind};
use dialect_id::featext::{extract_features, FeatureMatrix, MfccExtractor};
use dialect_id::pipeline::{
    files, identify_all, score_decisions, train_systems, CorpusResources, LoadedSystems, RunConfig,
};
use dialect_id::Error;

fn small_config(systems: Vec<SystemKind>) -> RunConfig {
    let mut cfg = RunConfig::default();
    cfg.systems = systems;
    cfg.gmm.num_components = 4;
    cfg.hmm.embedded.schedule = vec![1, 2];
    cfg.hmm.embedded.iters_per_stage = 2;
    cfg.cnn.input_frames = 64;
    cfg.cnn.train.epochs = 2;
    cfg
}

struct Fixture {
    corpus: dialect_id::corpus::synth::SyntheticCorpus,
    feats: Vec<FeatureMatrix>,
}

fn fixture() -> Fixture {
    let spec = SynthSpec {
        speakers_per_dialect: 2,
        utterances_per_speaker: 5,
        ..SynthSpec::default()
    };
    let corpus = generate_synthetic_corpus(&spec, 11).unwrap();
    let cfg = RunConfig::default();
    let ex = MfccExtractor::new(&cfg.frontend.mfcc, spec.sample_rate).unwrap();
    let feats = corpus
        .render_all()
        .unwrap()
        .iter()
        .zip(&corpus.records)
        .map(|(a, r)| extract_features(&ex, a, &cfg.frontend, &r.utt_id).unwrap())
        .collect();
    Fixture { corpus, feats }
}

#[test]
fn every_system_trains_loads_and_identifies() {
    let fx = fixture();
    let cfg = small_config(SystemKind::ALL.to_vec());
    let split = split_speaker_disjoint_by(&fx.corpus.records, 0.5, 0, |_| 1.0).unwrap();
    let pick = |recs: &[dialect_id::corpus::UtteranceRecord]| -> Vec<FeatureMatrix> {
        recs.iter()
            .map(|r| fx.feats[fx.corpus.records.iter().position(|x| x.utt_id == r.utt_id).unwrap()].clone())
            .collect()
    };
    let dir = tempfile::tempdir().unwrap();
    let res = CorpusResources::from_synthetic(&fx.corpus);
    let report = train_systems(&cfg, &res, &split.train, &pick(&split.train), dir.path()).unwrap();
    assert_eq!(report.train_utterances, split.train.len());
    assert_eq!(report.cnn_epoch_losses.len(), 2);
    assert_eq!(report.hmm.len(), 4);
    for summary in report.hmm.values() {
        assert_eq!(summary.stages.len(), 2);
    }

    let loaded = LoadedSystems::load(dir.path(), &SystemKind::ALL).unwrap();
    let test_feats = pick(&split.test);
    let mut ids: Vec<String> = split.test.iter().map(|r| r.utt_id.clone()).collect();
    ids.reverse();
    let mut reversed = test_feats.clone();
    reversed.reverse();
    for kind in SystemKind::ALL {
        let records = identify_all(&loaded, kind, &ids, &reversed, &cfg.decode);
        assert_eq!(records.len(), split.test.len());
        assert!(records.windows(2).all(|w| w[0].utt_id < w[1].utt_id));
        assert!(records.iter().all(|r| r.decision.as_ref().is_some_and(|d| d.method == kind)));
        let m = score_decisions(&records, &split.test).unwrap();
        assert_eq!(m.total, split.test.len());
    }
}

#[test]
fn loading_only_needs_the_selected_system() {
    let fx = fixture();
    let cfg = small_config(vec![SystemKind::Gmm]);
    let dir = tempfile::tempdir().unwrap();
    let res = CorpusResources::from_synthetic(&fx.corpus);
    train_systems(&cfg, &res, &fx.corpus.records, &fx.feats, dir.path()).unwrap();
    assert!(dir.path().join(files::GMM_LT).exists());
    assert!(!dir.path().join(files::HMM_LT).exists());
    assert!(LoadedSystems::load(dir.path(), &[SystemKind::Gmm]).is_ok());
    assert!(matches!(
        LoadedSystems::load(dir.path(), &[SystemKind::Plvcsr]),
        Err(Error::Io { .. })
    ));
    let loaded = LoadedSystems::load(dir.path(), &[SystemKind::Gmm]).unwrap();
    assert!(loaded.identify(SystemKind::Upr1, &fx.feats[0], &cfg.decode).is_err());
}

#[test]
fn scoring_requires_exact_coverage() {
    let fx = fixture();
    let records = &fx.corpus.records;
    let decisions: Vec<DecisionRecord> = records
        .iter()
        .map(|r| DecisionRecord::from_result(&r.utt_id, Err(Error::SearchFailure)))
        .collect();
    let m = score_decisions(&decisions, records).unwrap();
    assert_eq!((m.total, m.errors, m.accuracy), (records.len(), records.len(), 0.0));
    assert!(score_decisions(&decisions[1..], records).is_err());
    let mut dup = decisions.clone();
    dup.push(decisions[0].clone());
    assert!(matches!(score_decisions(&dup, records), Err(Error::DuplicateUtterance(_))));
    assert!(score_decisions(&decisions, &records[1..]).is_err());
}

#[test]
fn config_paths_resolve_against_the_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("sub").join("run.toml");
    std::fs::create_dir_all(path.parent().unwrap()).unwrap();
    std::fs::write(&path, "[paths]\ncorpus_dir = \"../data\"\nmodels_dir = \"/abs/models\"\n").unwrap();
    let cfg = RunConfig::load(&path).unwrap();
    assert_eq!(cfg.paths.corpus_dir, dir.path().join("sub").join("../data"));
    assert_eq!(cfg.paths.models_dir, std::path::PathBuf::from("/abs/models"));
    assert_eq!(cfg.manifest_path(), cfg.paths.corpus_dir.join("manifest.tsv"));
}
