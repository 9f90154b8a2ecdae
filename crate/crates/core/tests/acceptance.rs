//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Run with
//! `cargo test -p dialect-id --test acceptance`.

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use sha2::{Digest, Sha256};

use dialect_id::cnn::{self, LayerSpec};
use dialect_id::corpus::synth::{generate_synthetic_corpus, SynthSpec};
use dialect_id::corpus::{
    build_parallel_dictionary, split_speaker_disjoint_by, DialectLabel, Lexicon, LexiconTag, Membership,
    ParallelDictionary, ParallelSource, PhoneInventory, RewriteRule,
};
use dialect_id::decode::{build_phone_loop, estimate_bigram, viterbi_decode, DecodeResult, PhoneLM};
use dialect_id::did::{
    bias_from_memberships, reconfirm_word, BiasVerdict, DecisionRecord, EquiprobablePolicy, Metrics, ReconfirmReason,
    SystemKind, WordSegment,
};
use dialect_id::featext::{append_deltas, extract_features, FeatureMatrix, MfccExtractor};
use dialect_id::gmm::{em_fit, variance_floor, GmmModel};
use dialect_id::hmm::{forced_align, train_embedded, EmbeddedTrainConfig, HmmSet, PhoneHmm};
use dialect_id::pipeline::{
    identify_all, score_decisions, train_systems, CorpusResources, DecodeConfig, HmmTrainSummary, LoadedSystems,
    RunConfig,
};

mod tol {
    pub const GMM_DENSITY: f64 = 1e-10;
    pub const SEARCH_SCORE: f64 = 1e-9;
    pub const DELTA: f64 = 1e-12;
    pub const EM_SLACK: f64 = 1e-8;
    pub const EMBEDDED_SLACK: f64 = 1e-6;
    pub const GRAD_EPSILON: f64 = 1e-4;
    pub const GRAD_REL_ERROR: f64 = 1e-4;
    pub const GRAD_PARAMS: usize = 240;
    pub const GMM_ACCURACY: f64 = 0.90;
    pub const PLVCSR_ACCURACY: f64 = 0.95;
    pub const BENCHMARK_TEST_UTTERANCES: usize = 200;
}

/// Benchmark settings, frozen after calibration.
mod bench {
    pub const SPEC: &str = include_str!("../../../configs/benchmark_synth.toml");
    pub const CORPUS_SEED: u64 = 7;
    pub const SPLIT_SEED: u64 = 0;
    pub const TRAIN_FRACTION: f64 = 0.5;
    pub const GMM_COMPONENTS: usize = 32;
    pub const HMM_SCHEDULE: [usize; 3] = [1, 2, 4];
    pub const HMM_ITERS: usize = 4;
}

struct Outcome {
    checks: Vec<(String, bool)>,
    summary: String,
}

impl Outcome {
    fn new() -> Self {
        Outcome {
            checks: Vec::new(),
            summary: String::new(),
        }
    }

    fn check(&mut self, what: impl Into<String>, ok: bool) {
        self.checks.push((what.into(), ok));
    }

    fn passed(&self) -> bool {
        !self.checks.is_empty() && self.checks.iter().all(|c| c.1)
    }
}

fn strings(s: &str) -> Vec<String> {
    s.split_whitespace().map(str::to_string).collect()
}

fn toy_inventory(phones: &[&str]) -> PhoneInventory {
    PhoneInventory::new(
        phones.iter().map(|s| s.to_string()).collect(),
        Default::default(),
        Default::default(),
        vec![],
        Default::default(),
    )
    .unwrap()
}

fn random_set(phones: &[&str], dim: usize, rng: &mut ChaCha8Rng) -> HmmSet {
    let models = phones
        .iter()
        .map(|p| {
            let states = (0..3)
                .map(|_| {
                    let m = rng.random_range(1..=2);
                    let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.2..1.0)).collect();
                    let s: f64 = w.iter().sum();
                    let means = (0..m * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                    let vars = (0..m * dim).map(|_| rng.random_range(0.5..1.5)).collect();
                    GmmModel::new(w.iter().map(|x| x / s).collect(), means, vars, dim, "s").unwrap()
                })
                .collect();
            PhoneHmm::left_to_right(*p, states, rng.random_range(0.2..0.8)).unwrap()
        })
        .collect();
    HmmSet::new(models, toy_inventory(phones), BTreeMap::new()).unwrap()
}

fn random_feat(t: usize, dim: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
    let data = (0..t * dim).map(|_| rng.random_range(-2.5..2.5)).collect();
    FeatureMatrix::new(data, dim, 0.01, "f").unwrap()
}

/// Linear-domain mixture density, product over dimensions.
fn linear_density(weights: &[f64], means: &[Vec<f64>], vars: &[Vec<f64>], x: &[f64]) -> f64 {
    let mut p = 0.0;
    for k in 0..weights.len() {
        let mut g = weights[k];
        for d in 0..x.len() {
            let v = vars[k][d];
            g *= (-(x[d] - means[k][d]).powi(2) / (2.0 * v)).exp() / (2.0 * std::f64::consts::PI * v).sqrt();
        }
        p += g;
    }
    p
}

/// Best score and frame-level (model, state) path over every monotone
/// left-to-right path through `models` in sequence.
fn best_chain_path(set: &HmmSet, models: &[usize], feat: &FeatureMatrix) -> Option<(f64, Vec<(usize, usize)>)> {
    let chain: Vec<(usize, usize)> = models.iter().flat_map(|&m| (0..3).map(move |s| (m, s))).collect();
    let t_len = feat.rows();
    if chain.len() > t_len {
        return None;
    }
    let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
    for mask in 0u32..(1 << (t_len - 1)) {
        if mask.count_ones() as usize != chain.len() - 1 {
            continue;
        }
        let mut idx = 0;
        let mut path = Vec::with_capacity(t_len);
        let mut score = 0.0;
        for t in 0..t_len {
            if t > 0 {
                let (m, s) = chain[idx];
                if mask & (1 << (t - 1)) != 0 {
                    score += set.model(m).forward(s);
                    idx += 1;
                } else {
                    score += set.model(m).self_loop(s);
                }
            }
            let (m, s) = chain[idx];
            path.push((m, s));
            score += set.model(m).state(s).log_density(feat.row(t)).unwrap();
        }
        let (m, s) = chain[idx];
        score += set.model(m).forward(s);
        if best.as_ref().is_none_or(|b| score > b.0) {
            best = Some((score, path));
        }
    }
    best
}

fn decoded_frame_models(d: &DecodeResult, set: &HmmSet) -> Vec<usize> {
    d.units
        .iter()
        .flat_map(|u| std::iter::repeat_n(set.resolve(&u.symbol).unwrap(), u.end - u.start))
        .collect()
}

fn criterion_oracles() -> Outcome {
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(101);

    let mut gmm_err: f64 = 0.0;
    for _ in 0..200 {
        let dim = rng.random_range(1..=6);
        let m = rng.random_range(1..=8);
        let w: Vec<f64> = (0..m).map(|_| rng.random_range(0.05..1.0)).collect();
        let total: f64 = w.iter().sum();
        let w: Vec<f64> = w.iter().map(|x| x / total).collect();
        let means: Vec<Vec<f64>> = (0..m).map(|_| (0..dim).map(|_| rng.random_range(-2.0..2.0)).collect()).collect();
        let vars: Vec<Vec<f64>> = (0..m).map(|_| (0..dim).map(|_| rng.random_range(0.3..3.0)).collect()).collect();
        let model = GmmModel::new(w.clone(), means.concat(), vars.concat(), dim, "g").unwrap();
        for _ in 0..10 {
            let x: Vec<f64> = (0..dim).map(|_| rng.random_range(-3.0..3.0)).collect();
            let direct = linear_density(&w, &means, &vars, &x).ln();
            gmm_err = gmm_err.max((model.log_density(&x).unwrap() - direct).abs());
        }
    }
    out.check(format!("gmm log density error {gmm_err:.1e}"), gmm_err <= tol::GMM_DENSITY);

    let (mut decode_err, mut align_err): (f64, f64) = (0.0, 0.0);
    let (mut decode_paths, mut align_paths) = (true, true);
    let mut lm_trials = 0;
    for trial in 0..40 {
        let set = random_set(&["a", "b"], 2, &mut rng);
        let t_len = rng.random_range(3..=8);
        let f = random_feat(t_len, 2, &mut rng);
        let lm: Option<PhoneLM> = (trial % 2 == 0).then(|| {
            estimate_bigram(&[strings("a b b"), strings("a")], set.inventory(), 1.0).unwrap()
        });
        lm_trials += usize::from(lm.is_some());
        let g = build_phone_loop(&set, lm.as_ref()).unwrap();
        let d = viterbi_decode(&g, &set, f.view(), None).unwrap();
        // With T <= 8 and three states per phone, at most two phones fit.
        let mut best: Option<(f64, Vec<(usize, usize)>)> = None;
        let seqs: Vec<Vec<usize>> = vec![vec![0], vec![1], vec![0, 0], vec![0, 1], vec![1, 0], vec![1, 1]];
        for seq in seqs {
            let lm_score = match &lm {
                Some(lm) => {
                    let names: Vec<String> = seq.iter().map(|&i| set.model(i).name().to_string()).collect();
                    lm.sequence_log_prob(&names).unwrap()
                }
                None => 0.0,
            };
            if let Some((s, p)) = best_chain_path(&set, &seq, &f) {
                if best.as_ref().is_none_or(|b| s + lm_score > b.0) {
                    best = Some((s + lm_score, p));
                }
            }
        }
        let (score, path) = best.unwrap();
        decode_err = decode_err.max((d.total_loglik - score).abs());
        let oracle_models: Vec<usize> = path.iter().map(|p| p.0).collect();
        decode_paths &= decoded_frame_models(&d, &set) == oracle_models;

        let units = if trial % 3 == 0 { strings("a") } else { strings("b a") };
        if 3 * units.len() <= t_len {
            let models = set.resolve_all(&units).unwrap();
            let a = forced_align(&set, f.view(), &units).unwrap();
            let (score, path) = best_chain_path(&set, &models, &f).unwrap();
            align_err = align_err.max((a.total_loglik - score).abs());
            align_paths &= a.frame_states(&models) == path;
        }
    }
    out.check(
        format!("phone-loop decode vs enumeration error {decode_err:.1e} ({lm_trials} with bigram)"),
        decode_err <= tol::SEARCH_SCORE,
    );
    out.check("phone-loop decode path identical", decode_paths);
    out.check(format!("forced alignment vs enumeration error {align_err:.1e}"), align_err <= tol::SEARCH_SCORE);
    out.check("forced alignment path identical", align_paths);

    let mut delta_err: f64 = 0.0;
    for window in [1usize, 2, 3] {
        let t_len = rng.random_range(4..30);
        let x: Vec<Vec<f64>> = (0..t_len).map(|_| (0..13).map(|_| rng.random_range(-10.0..10.0)).collect()).collect();
        let m = FeatureMatrix::from_rows(&x, 0.01, "d").unwrap();
        let d = append_deltas(&m, window).unwrap();
        let reg = |rows: &Vec<Vec<f64>>, t: usize, k: usize| -> f64 {
            let last = rows.len() as i64 - 1;
            let at = |i: i64| rows[i.clamp(0, last) as usize][k];
            let num: f64 = (1..=window as i64).map(|n| n as f64 * (at(t as i64 + n) - at(t as i64 - n))).sum();
            num / (2.0 * (1..=window).map(|n| (n * n) as f64).sum::<f64>())
        };
        let dx: Vec<Vec<f64>> = (0..t_len).map(|t| (0..13).map(|k| reg(&x, t, k)).collect()).collect();
        for t in 0..t_len {
            for k in 0..13 {
                delta_err = delta_err.max((d.row(t)[13 + k] - dx[t][k]).abs());
                delta_err = delta_err.max((d.row(t)[26 + k] - reg(&dx, t, k)).abs());
            }
        }
    }
    out.check(format!("delta regression error {delta_err:.1e}"), delta_err <= tol::DELTA);
    out.summary = format!(
        "gmm {gmm_err:.1e}, decode {decode_err:.1e}, align {align_err:.1e}, delta {delta_err:.1e}"
    );
    out
}

fn worst_drop(trace: &[f64]) -> f64 {
    trace.windows(2).map(|w| w[0] - w[1]).fold(0.0, f64::max)
}

fn criterion_monotonicity(benchmark_hmm: &BTreeMap<String, HmmTrainSummary>) -> Outcome {
    let mut out = Outcome::new();
    let mut rng = ChaCha8Rng::seed_from_u64(202);
    let mut em_drop: f64 = 0.0;
    let datasets = 24;
    for _ in 0..datasets {
        let dim = rng.random_range(1..=4);
        let true_k = rng.random_range(1..=4);
        let centers: Vec<Vec<f64>> = (0..true_k).map(|_| (0..dim).map(|_| rng.random_range(-5.0..5.0)).collect()).collect();
        let n = rng.random_range(80..300);
        let data: Vec<f64> = (0..n)
            .flat_map(|_| {
                let c = &centers[rng.random_range(0..true_k)];
                c.iter()
                    .map(|m| m + { let z: f64 = StandardNormal.sample(&mut rng); z } * 0.8)
                    .collect::<Vec<f64>>()
            })
            .collect();
        let feat = FeatureMatrix::new(data, dim, 0.01, "em").unwrap();
        let k = rng.random_range(1..=6);
        let means: Vec<f64> = (0..k * dim).map(|_| rng.random_range(-5.0..5.0)).collect();
        let vars = vec![1.0; k * dim];
        let init = GmmModel::new(vec![1.0 / k as f64; k], means, vars, dim, "init").unwrap();
        let floor = variance_floor(feat.view(), 1e-3).unwrap();
        let fit = em_fit(&init, feat.view(), 30, 0.0, &floor).unwrap();
        em_drop = em_drop.max(worst_drop(&fit.trace));
    }
    out.check(format!("EM worst per-iteration drop {em_drop:.1e} over {datasets} datasets"), em_drop <= tol::EM_SLACK);

    // Toy corpus drawn from a random model set, trained from a perturbed copy.
    let truth = random_set(&["a", "b", "c"], 3, &mut rng);
    let mut feats = Vec::new();
    let mut transcripts = Vec::new();
    for _ in 0..30 {
        let units: Vec<String> = (0..rng.random_range(2..5)).map(|_| ["a", "b", "c"][rng.random_range(0..3)].to_string()).collect();
        let mut data = Vec::new();
        for u in &units {
            let m = truth.model(truth.resolve(u).unwrap());
            for s in 0..3 {
                for _ in 0..rng.random_range(2..6) {
                    for d in 0..3 {
                        data.push(m.state(s).mean(0)[d] + { let z: f64 = StandardNormal.sample(&mut rng); z });
                    }
                }
            }
        }
        feats.push(FeatureMatrix::new(data, 3, 0.01, "u").unwrap());
        transcripts.push(units);
    }
    let start = random_set(&["a", "b", "c"], 3, &mut rng);
    let corpus: Vec<_> = feats.iter().zip(&transcripts).map(|(f, t)| (f.view(), t.clone())).collect();
    let cfg = EmbeddedTrainConfig {
        schedule: vec![1, 2, 4],
        iters_per_stage: 6,
        ..EmbeddedTrainConfig::default()
    };
    let trained = train_embedded(&start, &corpus, &cfg).unwrap();
    let mut emb_drop: f64 = 0.0;
    let mut stages = 0;
    for s in &trained.stages {
        emb_drop = emb_drop.max(worst_drop(&s.path_logliks));
        stages += 1;
    }
    for summary in benchmark_hmm.values() {
        for (_, trace) in &summary.stages {
            emb_drop = emb_drop.max(worst_drop(trace));
            stages += 1;
        }
    }
    out.check(
        format!("embedded training worst within-stage drop {emb_drop:.1e} over {stages} stages"),
        emb_drop <= tol::EMBEDDED_SLACK,
    );
    out.summary = format!("EM drop {em_drop:.1e} ({datasets} datasets), embedded drop {emb_drop:.1e} ({stages} stages)");
    out
}

fn criterion_gradient() -> Outcome {
    let mut out = Outcome::new();
    let model = cnn::build_reference_cnn();
    let mut rng = ChaCha8Rng::seed_from_u64(303);
    let data: Vec<f64> = (0..cnn::INPUT_FRAMES * cnn::INPUT_CHANNELS)
        .map(|_| StandardNormal.sample(&mut rng))
        .collect();
    let input = FeatureMatrix::new(data, cnn::INPUT_CHANNELS, 0.01, "grad").unwrap();
    let report = cnn::gradient_check(&model, &input, DialectLabel::Ct, tol::GRAD_EPSILON, tol::GRAD_PARAMS, 7).unwrap();
    let param_layers = model.layers().iter().filter(|l| l.num_params() > 0).count();
    let covered = report
        .checked_per_layer
        .iter()
        .zip(model.layers())
        .filter(|(n, l)| l.num_params() > 0 && **n > 0)
        .count();
    out.check(format!("{} parameters checked", report.checked()), report.checked() >= 200);
    out.check(format!("{covered}/{param_layers} parameterized layers covered"), covered == param_layers);
    out.check(
        format!("max relative error {:.2e}", report.max_relative_error),
        report.max_relative_error < tol::GRAD_REL_ERROR,
    );
    out.summary = format!(
        "{} params over {covered} layers, max rel error {:.2e} at eps {:.0e} ({} kink draws rejected)",
        report.checked(),
        report.max_relative_error,
        tol::GRAD_EPSILON,
        report.kinks_skipped
    );
    out
}

fn criterion_shapes() -> Outcome {
    let mut out = Outcome::new();
    let model = cnn::build_reference_cnn();
    let kinds: Vec<String> = model
        .layers()
        .iter()
        .map(|l| match &l.spec {
            LayerSpec::Conv1d { filters, kernel, .. } => format!("conv{filters}k{kernel}"),
            LayerSpec::MaxPool1d { size } => format!("pool{size}"),
            LayerSpec::Dropout { rate } => format!("drop{rate}"),
            LayerSpec::Flatten => "flatten".into(),
            LayerSpec::Dense { units, .. } => format!("dense{units}"),
        })
        .collect();
    let expected_layers = [
        "conv32k10", "conv32k10", "pool2", "drop0.25", "conv64k5", "conv64k5", "pool2", "drop0.25", "flatten",
        "dense1024", "dense2",
    ];
    out.check("layer list", kinds == expected_layers);
    let expected_chain = [
        (440, 39),
        (440, 32),
        (440, 32),
        (220, 32),
        (220, 32),
        (220, 64),
        (220, 64),
        (110, 64),
        (110, 64),
        (1, 7040),
        (1, 1024),
        (1, 2),
    ];
    out.check("shape chain", model.shape_chain() == expected_chain);
    let acts_ok = model.layers().iter().all(|l| match &l.spec {
        LayerSpec::Conv1d { activation, .. } => *activation == cnn::Activation::Relu,
        LayerSpec::Dense { units: 1024, activation } => *activation == cnn::Activation::Relu,
        LayerSpec::Dense { units: 2, activation } => *activation == cnn::Activation::Softmax,
        _ => true,
    });
    out.check("activations relu / softmax output", acts_ok);
    // k * c_in * c_out + c_out per conv; in * out + out per dense.
    let expected_params = (10 * 39 * 32 + 32) + (10 * 32 * 32 + 32) + (5 * 32 * 64 + 64) + (5 * 64 * 64 + 64)
        + (7040 * 1024 + 1024)
        + (1024 * 2 + 2);
    out.check(format!("{} parameters", model.num_params()), model.num_params() == expected_params);
    out.summary = "440x39 -> 440x32 -> 440x32 -> 220x32 -> 220x64 -> 220x64 -> 110x64 -> 7040 -> 1024 -> 2".into();
    out
}

fn criterion_upr_layer() -> Outcome {
    let mut out = Outcome::new();
    let m = |s: &str| match s {
        "LT" => Some(Membership::Lt),
        "CT" => Some(Membership::Ct),
        _ => Some(Membership::Both),
    };
    let verdict = |seq: &[&str]| bias_from_memberships(seq.iter().map(|s| m(s)), true).verdict;
    out.check("case 1 -> LT", verdict(&["LT", "LT", "LT", "CT", "LT"]) == BiasVerdict::Lt);
    out.check("case 2 -> CT", verdict(&["CT", "LT", "CT", "CT", "LT"]) == BiasVerdict::Ct);
    out.check("case 3 -> EQUIPROBABLE", verdict(&["LT", "CT", "CT", "LT"]) == BiasVerdict::Equiprobable);

    // Two phones with separated one-dimensional emissions.
    let inv = toy_inventory(&["e", "nn", "a", "p"]);
    let phone = |name: &str, mean: f64| {
        let s = GmmModel::new(vec![1.0], vec![mean], vec![1.0], 1, name).unwrap();
        PhoneHmm::left_to_right(name, vec![s.clone(), s.clone(), s], 0.5).unwrap()
    };
    let set = HmmSet::new(
        vec![phone("e", -3.0), phone("nn", 0.0), phone("a", 3.0), phone("p", 6.0)],
        inv,
        BTreeMap::new(),
    )
    .unwrap();
    let mut lt = Lexicon::new(LexiconTag::Lt);
    let mut ct = Lexicon::new(LexiconTag::Ct);
    lt.insert("enna", strings("e nn a")).unwrap();
    ct.insert("enna", strings("e nn a")).unwrap();
    lt.insert("pa", strings("p a")).unwrap();
    ct.insert("paepaepa", strings("p a e p a e p a")).unwrap();
    let mut unified = Lexicon::new(LexiconTag::Unified);
    for (w, pr, mem) in [
        ("enna", "e nn a", Membership::Both),
        ("pa", "p a", Membership::Lt),
        ("paepaepa", "p a e p a e p a", Membership::Ct),
    ] {
        unified.insert(w, strings(pr)).unwrap();
        unified.set_membership(w, mem);
    }
    let mut pdict = ParallelDictionary::new();
    pdict.insert(DialectLabel::Lt, "enna", "enna", ParallelSource::Rule);
    pdict.insert(DialectLabel::Lt, "pa", "paepaepa", ParallelSource::Manual);
    let feat = FeatureMatrix::new([vec![-3.0; 3], vec![0.0; 3], vec![3.0; 3]].concat(), 1, 0.01, "u").unwrap();
    let seg = |w: &str, start: usize, end: usize| WordSegment {
        word: w.into(),
        start,
        end,
        loglik: 0.0,
    };
    let r = reconfirm_word(&seg("enna", 0, 9), Membership::Both, &pdict, &set, &unified, feat.view()).unwrap();
    out.check("enna -> EXCLUDED", r.membership.is_none() && r.reason == ReconfirmReason::SameWord);
    let excluded = bias_from_memberships([r.membership, Some(Membership::Lt)], true);
    out.check("excluded word is not counted", excluded.lt_count == 1 && excluded.ct_count == 0);

    // A 6-frame "pa" cannot hold the 8-phone parallel.
    let short = FeatureMatrix::new([vec![6.0; 3], vec![3.0; 3]].concat(), 1, 0.01, "s").unwrap();
    let r = reconfirm_word(&seg("pa", 0, 6), Membership::Lt, &pdict, &set, &unified, short.view()).unwrap();
    out.check(
        "infeasible parallel alignment -> retain",
        r.membership == Some(Membership::Lt) && r.reason == ReconfirmReason::Infeasible,
    );

    let lt = {
        let mut l = Lexicon::new(LexiconTag::Lt);
        l.insert("wiyanddanar", strings("w i y a nn dd a n a r")).unwrap();
        l
    };
    let ct = {
        let mut l = Lexicon::new(LexiconTag::Ct);
        l.insert("weyanddanar", strings("w e y a nn dd a n a r")).unwrap();
        l.insert("wiyandhaanga", strings("w i y a nn d aa ng a")).unwrap();
        l
    };
    let rules = vec![RewriteRule::parse("^ w i", "w e").unwrap()];
    let (rule_only, _) = build_parallel_dictionary(&rules, &[], &lt, &ct);
    let (with_override, _) =
        build_parallel_dictionary(&rules, &[("wiyanddanar".into(), "wiyandhaanga".into())], &lt, &ct);
    out.check(
        "rule output without override",
        rule_only.lookup("wiyanddanar", DialectLabel::Lt) == Some("weyanddanar"),
    );
    out.check(
        "override takes precedence",
        with_override.lookup("wiyanddanar", DialectLabel::Lt) == Some("wiyandhaanga"),
    );
    out.summary = "bias table cases, enna exclusion, infeasible retention, override precedence".into();
    out
}

struct Benchmark {
    test_utterances: usize,
    speaker_overlap: usize,
    metrics: BTreeMap<String, Metrics>,
    upr1: Vec<DecisionRecord>,
    upr2_empty_dict: Vec<DecisionRecord>,
    hmm: BTreeMap<String, HmmTrainSummary>,
    seconds: f64,
}

fn run_benchmark() -> Benchmark {
    let start = Instant::now();
    let spec = SynthSpec::from_toml(bench::SPEC).unwrap();
    let corpus = generate_synthetic_corpus(&spec, bench::CORPUS_SEED).unwrap();
    let split = split_speaker_disjoint_by(&corpus.records, bench::TRAIN_FRACTION, bench::SPLIT_SEED, |_| 1.0).unwrap();
    let train_speakers: std::collections::BTreeSet<&str> = split.train.iter().map(|r| r.speaker_id.as_str()).collect();
    let speaker_overlap = split.test.iter().filter(|r| train_speakers.contains(r.speaker_id.as_str())).count();

    let mut cfg = RunConfig::default();
    cfg.systems = vec![
        SystemKind::Gmm,
        SystemKind::PprV1,
        SystemKind::PprV2,
        SystemKind::PprV3,
        SystemKind::Plvcsr,
        SystemKind::Upr1,
        SystemKind::Upr2,
    ];
    cfg.gmm.num_components = bench::GMM_COMPONENTS;
    cfg.hmm.embedded.schedule = bench::HMM_SCHEDULE.to_vec();
    cfg.hmm.embedded.iters_per_stage = bench::HMM_ITERS;

    let index: BTreeMap<&str, usize> = corpus.records.iter().enumerate().map(|(i, r)| (r.utt_id.as_str(), i)).collect();
    let ex = MfccExtractor::new(&cfg.frontend.mfcc, spec.sample_rate).unwrap();
    let featurize = |recs: &[dialect_id::corpus::UtteranceRecord]| -> Vec<FeatureMatrix> {
        recs.par_iter()
            .map(|r| {
                let audio = corpus.render(index[r.utt_id.as_str()]).unwrap();
                extract_features(&ex, &audio, &cfg.frontend, &r.utt_id).unwrap()
            })
            .collect()
    };
    let train_feats = featurize(&split.train);
    let test_feats = featurize(&split.test);

    let dir = tempfile::tempdir().unwrap();
    let res = CorpusResources::from_synthetic(&corpus);
    let report = train_systems(&cfg, &res, &split.train, &train_feats, dir.path()).unwrap();
    let mut loaded = LoadedSystems::load(dir.path(), &cfg.systems).unwrap();

    let ids: Vec<String> = split.test.iter().map(|r| r.utt_id.clone()).collect();
    let mut metrics = BTreeMap::new();
    let mut keep = BTreeMap::new();
    for &kind in &cfg.systems {
        let records = identify_all(&loaded, kind, &ids, &test_feats, &cfg.decode);
        metrics.insert(kind.to_string(), score_decisions(&records, &split.test).unwrap());
        keep.insert(kind, records);
    }
    let standalone = DecodeConfig {
        equiprobable: EquiprobablePolicy::Negative,
        ..cfg.decode.clone()
    };
    let records = identify_all(&loaded, SystemKind::Upr2, &ids, &test_feats, &standalone);
    metrics.insert("upr2-standalone".into(), score_decisions(&records, &split.test).unwrap());

    loaded.parallel = Some(ParallelDictionary::new());
    let upr2_empty_dict = identify_all(&loaded, SystemKind::Upr2, &ids, &test_feats, &cfg.decode);

    Benchmark {
        test_utterances: split.test.len(),
        speaker_overlap,
        metrics,
        upr1: keep.remove(&SystemKind::Upr1).unwrap(),
        upr2_empty_dict,
        hmm: report.hmm,
        seconds: start.elapsed().as_secs_f64(),
    }
}

fn criterion_benchmark(b: &Benchmark) -> Outcome {
    let mut out = Outcome::new();
    let acc = |k: &str| b.metrics[k].accuracy;
    out.check(
        format!("{} test utterances", b.test_utterances),
        b.test_utterances == tol::BENCHMARK_TEST_UTTERANCES,
    );
    out.check("speaker-disjoint split", b.speaker_overlap == 0);
    out.check(format!("GMM {:.2}%", 100.0 * acc("gmm")), acc("gmm") >= tol::GMM_ACCURACY);
    out.check(format!("P-LVCSR {:.2}%", 100.0 * acc("plvcsr")), acc("plvcsr") >= tol::PLVCSR_ACCURACY);
    out.check(
        format!("UPR-2 {:.2}% >= UPR-1 {:.2}%", 100.0 * acc("upr2"), 100.0 * acc("upr1")),
        acc("upr2") >= acc("upr1"),
    );
    out.check(
        format!(
            "UPR-2 with fallback {:.2}% >= standalone {:.2}%",
            100.0 * acc("upr2"),
            100.0 * acc("upr2-standalone")
        ),
        acc("upr2") >= acc("upr2-standalone"),
    );
    out.check(format!("runtime {:.0}s", b.seconds), b.seconds < 600.0);
    out.summary = format!(
        "n={}, gmm {:.2}%, plvcsr {:.2}%, upr1 {:.2}%, upr2 {:.2}% (standalone {:.2}%, {} fallbacks), {:.0}s",
        b.test_utterances,
        100.0 * acc("gmm"),
        100.0 * acc("plvcsr"),
        100.0 * acc("upr1"),
        100.0 * acc("upr2"),
        100.0 * acc("upr2-standalone"),
        b.metrics["upr2"].fallbacks,
        b.seconds
    );
    out
}

fn digest_tree(root: &Path) -> BTreeMap<String, String> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, hex::encode(Sha256::digest(std::fs::read(&p).unwrap())));
            }
        }
    }
    out
}

fn criterion_determinism() -> Outcome {
    let mut out = Outcome::new();
    let tmp = tempfile::tempdir().unwrap();
    let root = tmp.path();
    let spec = root.join("spec.toml");
    std::fs::write(&spec, "speakers_per_dialect = 3\nutterances_per_speaker = 6\n").unwrap();
    let config = root.join("run.toml");
    std::fs::write(
        &config,
        r#"systems = ["gmm", "cnn", "ppr-v1", "ppr-v2", "ppr-v3", "plvcsr", "upr1", "upr2"]
[paths]
corpus_dir = "data"
models_dir = "models"
output_dir = "out"
[split]
train_fraction = 0.5
[gmm]
num_components = 8
[hmm]
schedule = [1, 2]
iters_per_stage = 3
[cnn]
epochs = 2
batch_size = 4
"#,
    )
    .unwrap();
    let run = |args: &[&str]| {
        let mut full = vec!["dialect-id".to_string()];
        full.extend(args.iter().map(|s| s.to_string()));
        dialect_id::cli::run(full)
    };
    let r = |p: &str| root.join(p).display().to_string();
    let mut digests = Vec::new();
    for _ in 0..2 {
        for d in ["data", "models", "out"] {
            let _ = std::fs::remove_dir_all(root.join(d));
        }
        let mut codes = vec![run(&["synth", "--spec", &r("spec.toml"), "--out", &r("data"), "--seed", "5"])];
        codes.push(run(&["train", "--config", &r("run.toml")]));
        for s in SystemKind::ALL {
            let s = s.as_str();
            let dec = r(&format!("out/decisions_{s}.json"));
            codes.push(run(&["identify", "--config", &r("run.toml"), "--system", s]));
            codes.push(run(&[
                "evaluate",
                "--decisions",
                &dec,
                "--manifest",
                &r("models/test.tsv"),
                "--out",
                &r(&format!("out/eval_{s}.json")),
            ]));
        }
        out.check("all commands exit 0", codes.iter().all(|&c| c == 0));
        let mut all = BTreeMap::new();
        for d in ["data", "models", "out"] {
            for (k, v) in digest_tree(&root.join(d)) {
                all.insert(format!("{d}/{k}"), v);
            }
        }
        digests.push(all);
    }
    let files = digests[0].len();
    let differing: Vec<&String> = digests[0].keys().filter(|k| digests[1].get(*k) != digests[0].get(*k)).collect();
    out.check(
        format!("{files} output files byte-identical across runs ({} differ)", differing.len()),
        differing.is_empty() && digests[0].len() == digests[1].len(),
    );
    out.summary = format!("{files} files from synth/train/identify/evaluate over 8 systems identical across two runs");
    out
}

fn criterion_degradation(b: &Benchmark) -> Outcome {
    let mut out = Outcome::new();
    let same = |a: &DecisionRecord, c: &DecisionRecord| match (&a.decision, &c.decision) {
        (Some(x), Some(y)) => {
            a.utt_id == c.utt_id
                && x.label == y.label
                && x.scores == y.scores
                && x.fallback_used == y.fallback_used
                && x.bias == y.bias
                && x.equiprobable == y.equiprobable
        }
        (None, None) => a.error == c.error,
        _ => false,
    };
    let n = b.upr1.len();
    let matching = b.upr1.iter().zip(&b.upr2_empty_dict).filter(|(a, c)| same(a, c)).count();
    out.check(format!("{matching}/{n} decisions identical"), n > 0 && matching == n && b.upr2_empty_dict.len() == n);
    out.summary = format!("UPR-2 with empty parallel dictionary equals UPR-1 on {matching}/{n} utterances");
    out
}

fn main() {
    let names = [
        "numerical oracles",
        "optimization monotonicity",
        "CNN gradient check",
        "CNN shape fidelity",
        "UPR decision layer",
        "synthetic end-to-end benchmark",
        "determinism",
        "degradation identity",
    ];
    let timed = |f: &dyn Fn() -> Outcome| {
        let t = Instant::now();
        let o = f();
        (o, t.elapsed().as_secs_f64())
    };
    let (bench_result, bench_secs) = {
        let t = Instant::now();
        let b = run_benchmark();
        (b, t.elapsed().as_secs_f64())
    };
    let results: Vec<(Outcome, f64)> = vec![
        timed(&criterion_oracles),
        timed(&|| criterion_monotonicity(&bench_result.hmm)),
        timed(&criterion_gradient),
        timed(&criterion_shapes),
        timed(&criterion_upr_layer),
        (criterion_benchmark(&bench_result), bench_secs),
        timed(&criterion_determinism),
        timed(&|| criterion_degradation(&bench_result)),
    ];

    let mut failed = 0;
    for (i, ((o, secs), name)) in results.iter().zip(names).enumerate() {
        let status = if o.passed() { "PASS" } else { "FAIL" };
        println!("{status} [{}] {name}: {} ({secs:.1}s)", i + 1, o.summary);
        if !o.passed() {
            failed += 1;
            for (what, ok) in &o.checks {
                if !ok {
                    println!("       failed: {what}");
                }
            }
        }
    }
    let m = &bench_result.metrics;
    println!(
        "info: ppr-v1 {:.2}%, ppr-v2 {:.2}%, ppr-v3 {:.2}% on the benchmark test set",
        100.0 * m["ppr-v1"].accuracy,
        100.0 * m["ppr-v2"].accuracy,
        100.0 * m["ppr-v3"].accuracy
    );
    println!("{} of {} criteria passed", results.len() - failed, results.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
