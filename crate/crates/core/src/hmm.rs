//! Three-state left-to-right phone HMMs with GMM emissions, Viterbi
//! (hard-assignment) embedded training, word-internal triphone expansion and
//! forced alignment.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use log::{debug, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::corpus::PhoneInventory;
use crate::error::{Error, Result};
use crate::featext::FrameView;
use crate::gmm::{self, GmmAccumulator, GmmModel, SPLIT_EPSILON};

const FORMAT_TAG: &str = "dialect-id/hmm-set";
const FORMAT_VERSION: u32 = 1;
const ROW_TOLERANCE: f64 = 1e-10;
/// Context symbol used at word boundaries when naming triphones.
pub const BOUNDARY: &str = "sil";
pub const DEFAULT_NUM_STATES: usize = 3;

/// Phone model. States `1..=n` emit; state `0` is the entry and `n + 1` the
/// exit. Only self-loops and single forward steps are allowed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "PhoneHmmFile", into = "PhoneHmmFile")]
pub struct PhoneHmm {
    name: String,
    /// `(n+2) x (n+2)` log probabilities, row-major.
    transitions: Vec<f64>,
    states: Vec<GmmModel>,
}

#[derive(Serialize, Deserialize)]
struct PhoneHmmFile {
    name: String,
    num_states: usize,
    /// Linear-domain probabilities; JSON has no representation for -inf.
    transitions: Vec<Vec<f64>>,
    states: Vec<GmmModel>,
}

impl From<PhoneHmm> for PhoneHmmFile {
    fn from(h: PhoneHmm) -> Self {
        let n = h.states.len() + 2;
        PhoneHmmFile {
            num_states: h.states.len(),
            transitions: h.transitions.chunks(n).map(|r| r.iter().map(|l| l.exp()).collect()).collect(),
            name: h.name,
            states: h.states,
        }
    }
}

impl TryFrom<PhoneHmmFile> for PhoneHmm {
    type Error = Error;

    fn try_from(f: PhoneHmmFile) -> Result<Self> {
        if f.states.len() != f.num_states || f.transitions.len() != f.num_states + 2 {
            return Err(Error::InvalidModel(format!("HMM `{}` has inconsistent state count", f.name)));
        }
        let logs = f.transitions.concat().iter().map(|p| p.ln()).collect();
        PhoneHmm::new(f.name, logs, f.states)
    }
}

impl PhoneHmm {
    pub fn new(name: impl Into<String>, transitions: Vec<f64>, states: Vec<GmmModel>) -> Result<Self> {
        let hmm = PhoneHmm {
            name: name.into(),
            transitions,
            states,
        };
        hmm.validate()?;
        Ok(hmm)
    }

    /// Left-to-right model with the given self-loop probability everywhere.
    pub fn left_to_right(name: impl Into<String>, states: Vec<GmmModel>, self_loop: f64) -> Result<Self> {
        let n = states.len();
        let w = n + 2;
        let mut t = vec![f64::NEG_INFINITY; w * w];
        t[1] = 0.0;
        for i in 1..=n {
            t[i * w + i] = self_loop.ln();
            t[i * w + i + 1] = (1.0 - self_loop).ln();
        }
        PhoneHmm::new(name, t, states)
    }

    fn validate(&self) -> Result<()> {
        let n = self.states.len();
        let w = n + 2;
        let bad = |m: String| Err(Error::InvalidModel(format!("HMM `{}`: {m}", self.name)));
        if n == 0 {
            return bad("no emitting states".into());
        }
        if self.transitions.len() != w * w {
            return bad(format!("transition matrix must be {w}x{w}"));
        }
        let dim = self.states[0].dim();
        if self.states.iter().any(|s| s.dim() != dim) {
            return bad("state dimensions differ".into());
        }
        for i in 0..=n {
            let row = &self.transitions[i * w..(i + 1) * w];
            for (j, &lp) in row.iter().enumerate() {
                if lp.is_nan() || lp > 1e-12 {
                    return bad(format!("invalid log probability at ({i},{j})"));
                }
                let allowed = if i == 0 { j == 1 } else { j == i || j == i + 1 };
                if !allowed && lp != f64::NEG_INFINITY {
                    return bad(format!("transition ({i},{j}) is not left-to-right"));
                }
            }
            let total: f64 = row.iter().map(|l| l.exp()).sum();
            if (total - 1.0).abs() > ROW_TOLERANCE {
                return bad(format!("row {i} sums to {total}"));
            }
        }
        if self.transitions[(n + 1) * w..].iter().any(|&l| l != f64::NEG_INFINITY) {
            return bad("exit state has outgoing transitions".into());
        }
        Ok(())
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_states(&self) -> usize {
        self.states.len()
    }

    pub fn dim(&self) -> usize {
        self.states[0].dim()
    }

    /// Log probability from matrix state `from` to `to` (0 = entry, n+1 = exit).
    pub fn log_transition(&self, from: usize, to: usize) -> f64 {
        self.transitions[from * (self.states.len() + 2) + to]
    }

    /// Self-loop log probability of emitting state `s` (0-based).
    pub fn self_loop(&self, s: usize) -> f64 {
        self.log_transition(s + 1, s + 1)
    }

    /// Log probability of leaving emitting state `s` (0-based) forwards.
    pub fn forward(&self, s: usize) -> f64 {
        self.log_transition(s + 1, s + 2)
    }

    pub fn state(&self, s: usize) -> &GmmModel {
        &self.states[s]
    }

    pub fn states(&self) -> &[GmmModel] {
        &self.states
    }

    pub fn transitions(&self) -> &[f64] {
        &self.transitions
    }

    fn renamed(&self, name: &str) -> PhoneHmm {
        let mut h = self.clone();
        h.name = name.to_string();
        for (i, s) in h.states.iter_mut().enumerate() {
            s.set_label(format!("{name}[{}]", i + 1));
        }
        h
    }
}

/// Named phone models plus the triphone tying map.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "HmmSetFile", into = "HmmSetFile")]
pub struct HmmSet {
    models: Vec<PhoneHmm>,
    index: BTreeMap<String, usize>,
    inventory: PhoneInventory,
    tying: BTreeMap<String, String>,
}

#[derive(Serialize, Deserialize)]
struct HmmSetFile {
    format: String,
    version: u32,
    inventory: PhoneInventory,
    tying: BTreeMap<String, String>,
    models: Vec<PhoneHmm>,
}

impl From<HmmSet> for HmmSetFile {
    fn from(s: HmmSet) -> Self {
        HmmSetFile {
            format: FORMAT_TAG.into(),
            version: FORMAT_VERSION,
            inventory: s.inventory,
            tying: s.tying,
            models: s.models,
        }
    }
}

impl TryFrom<HmmSetFile> for HmmSet {
    type Error = Error;

    fn try_from(f: HmmSetFile) -> Result<Self> {
        if f.format != FORMAT_TAG || f.version != FORMAT_VERSION {
            return Err(Error::InvalidModel(format!(
                "expected {FORMAT_TAG} version {FORMAT_VERSION}, found {} version {}",
                f.format, f.version
            )));
        }
        HmmSet::new(f.models, f.inventory, f.tying)
    }
}

impl HmmSet {
    pub fn new(mut models: Vec<PhoneHmm>, inventory: PhoneInventory, tying: BTreeMap<String, String>) -> Result<Self> {
        models.sort_by(|a, b| a.name.cmp(&b.name));
        let mut index = BTreeMap::new();
        for (i, m) in models.iter().enumerate() {
            if index.insert(m.name.clone(), i).is_some() {
                return Err(Error::InvalidModel(format!("duplicate model `{}`", m.name)));
            }
        }
        if let Some(dim) = models.first().map(PhoneHmm::dim) {
            if let Some(m) = models.iter().find(|m| m.dim() != dim) {
                return Err(Error::DimensionMismatch {
                    expected: dim,
                    found: m.dim(),
                });
            }
        } else {
            return Err(Error::EmptyInput("phone models"));
        }
        if let Some(p) = inventory.phones().iter().find(|p| !index.contains_key(*p)) {
            return Err(Error::InvalidModel(format!("inventory phone `{p}` has no model")));
        }
        if let Some((t, target)) = tying.iter().find(|(_, target)| !index.contains_key(*target)) {
            return Err(Error::InvalidModel(format!("`{t}` is tied to missing model `{target}`")));
        }
        Ok(HmmSet {
            models,
            index,
            inventory,
            tying,
        })
    }

    pub fn len(&self) -> usize {
        self.models.len()
    }

    pub fn is_empty(&self) -> bool {
        self.models.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.models[0].dim()
    }

    pub fn models(&self) -> &[PhoneHmm] {
        &self.models
    }

    pub fn model(&self, id: usize) -> &PhoneHmm {
        &self.models[id]
    }

    pub fn inventory(&self) -> &PhoneInventory {
        &self.inventory
    }

    pub fn tying(&self) -> &BTreeMap<String, String> {
        &self.tying
    }

    /// Largest mixture count over all states.
    pub fn max_mixtures(&self) -> usize {
        self.models
            .iter()
            .flat_map(|m| m.states.iter().map(GmmModel::num_components))
            .max()
            .unwrap_or(0)
    }

    /// Physical model for a unit symbol: the model itself, else its tying
    /// target, else (for an unseen triphone) its center monophone.
    pub fn resolve(&self, symbol: &str) -> Result<usize> {
        if let Some(&i) = self.index.get(symbol) {
            return Ok(i);
        }
        if let Some(target) = self.tying.get(symbol) {
            return Ok(self.index[target]);
        }
        if let Some(center) = triphone_center(symbol) {
            if let Some(&i) = self.index.get(center) {
                return Ok(i);
            }
        }
        Err(Error::UnknownUnit(symbol.to_string()))
    }

    pub fn resolve_all(&self, symbols: &[String]) -> Result<Vec<usize>> {
        symbols.iter().map(|s| self.resolve(s)).collect()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string(self).expect("HMM set serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        serde_json::from_str(text).map_err(|e| Error::InvalidModel(e.to_string()))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text).map_err(|e| Error::InvalidModel(format!("{}: {e}", path.display())))
    }
}

/// `l-c+r` naming for triphones.
pub fn triphone_name(left: &str, center: &str, right: &str) -> String {
    format!("{left}-{center}+{right}")
}

/// Center phone of an `l-c+r` symbol, or `None` for monophones.
pub fn triphone_center(symbol: &str) -> Option<&str> {
    let start = symbol.find('-')? + 1;
    let end = symbol.rfind('+')?;
    (start < end).then(|| &symbol[start..end])
}

/// Word-internal triphones of one pronunciation, with `sil` at the edges.
pub fn word_triphones(pron: &[String]) -> Vec<String> {
    (0..pron.len())
        .map(|i| {
            let left = if i == 0 { BOUNDARY } else { &pron[i - 1] };
            let right = pron.get(i + 1).map_or(BOUNDARY, String::as_str);
            triphone_name(left, &pron[i], right)
        })
        .collect()
}

/// Identical single-Gaussian models for every inventory phone, using the
/// global mean and floored global variance, self-loop probability 0.5.
pub fn flat_start(inventory: &PhoneInventory, frames: FrameView<'_>, floor_scale: f64) -> Result<HmmSet> {
    if frames.is_empty() {
        return Err(Error::EmptyInput("pooled frames"));
    }
    if inventory.is_empty() {
        return Err(Error::EmptyInput("phone inventory"));
    }
    let floor = gmm::variance_floor(frames, floor_scale)?;
    let proto = GmmModel::single_gaussian(frames, &floor, "")?;
    let models = inventory
        .phones()
        .iter()
        .map(|p| {
            let states = (1..=DEFAULT_NUM_STATES)
                .map(|s| {
                    let mut g = proto.clone();
                    g.set_label(format!("{p}[{s}]"));
                    g
                })
                .collect();
            PhoneHmm::left_to_right(p.clone(), states, 0.5)
        })
        .collect::<Result<Vec<_>>>()?;
    HmmSet::new(models, inventory.clone(), BTreeMap::new())
}

/// Per-frame log emission densities for the states of selected models.
#[derive(Debug, Clone)]
pub struct EmissionTable {
    frames: usize,
    width: usize,
    base: Vec<usize>,
    values: Vec<f64>,
}

impl EmissionTable {
    /// Evaluates every state of the listed physical models on every frame.
    pub fn new(set: &HmmSet, feat: FrameView<'_>, models: impl IntoIterator<Item = usize>) -> Result<Self> {
        if feat.dim() != set.dim() {
            return Err(Error::DimensionMismatch {
                expected: set.dim(),
                found: feat.dim(),
            });
        }
        let mut base = vec![usize::MAX; set.len()];
        let mut chosen = Vec::new();
        let mut width = 0;
        for m in models {
            if base[m] == usize::MAX {
                base[m] = width;
                width += set.model(m).num_states();
                chosen.push(m);
            }
        }
        let t = feat.rows();
        let mut values = vec![0.0; t * width];
        for (row, x) in values.chunks_mut(width.max(1)).zip(feat.iter_rows()) {
            for &m in &chosen {
                let b = base[m];
                for (s, g) in set.model(m).states().iter().enumerate() {
                    row[b + s] = g.log_density_unchecked(x);
                }
            }
        }
        Ok(EmissionTable {
            frames: t,
            width,
            base,
            values,
        })
    }

    pub fn all(set: &HmmSet, feat: FrameView<'_>) -> Result<Self> {
        Self::new(set, feat, 0..set.len())
    }

    pub fn frames(&self) -> usize {
        self.frames
    }

    pub fn covers(&self, model: usize) -> bool {
        self.base.get(model).is_some_and(|&b| b != usize::MAX)
    }

    #[inline]
    pub fn get(&self, t: usize, model: usize, state: usize) -> f64 {
        self.values[t * self.width + self.base[model] + state]
    }

    /// Table restricted to frames `start..end` (for word-level rescoring).
    pub fn slice_frames(&self, start: usize, end: usize) -> EmissionTable {
        EmissionTable {
            frames: end - start,
            width: self.width,
            base: self.base.clone(),
            values: self.values[start * self.width..end * self.width].to_vec(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AlignedSegment {
    pub unit: String,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    /// Emissions plus the transitions taken inside the unit, including its exit.
    pub loglik: f64,
    /// First frame of each emitting state.
    pub state_starts: Vec<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Alignment {
    pub segments: Vec<AlignedSegment>,
    pub total_loglik: f64,
}

impl Alignment {
    /// Physical (model, state) for every frame.
    pub fn frame_states(&self, models: &[usize]) -> Vec<(usize, usize)> {
        let mut out = Vec::new();
        for (seg, &m) in self.segments.iter().zip(models) {
            for (s, &start) in seg.state_starts.iter().enumerate() {
                let end = seg.state_starts.get(s + 1).copied().unwrap_or(seg.end);
                out.extend(std::iter::repeat_n((m, s), end - start));
            }
        }
        out
    }
}

struct ChainState {
    model: usize,
    state: usize,
    self_lp: f64,
    next_lp: f64,
}

fn chain_for(set: &HmmSet, models: &[usize]) -> Vec<ChainState> {
    let mut chain = Vec::new();
    for &m in models {
        let h = set.model(m);
        for s in 0..h.num_states() {
            chain.push(ChainState {
                model: m,
                state: s,
                self_lp: h.self_loop(s),
                next_lp: h.forward(s),
            });
        }
    }
    chain
}

/// Forced alignment against a fixed unit sequence.
pub fn forced_align(set: &HmmSet, feat: FrameView<'_>, units: &[String]) -> Result<Alignment> {
    if units.is_empty() {
        return Err(Error::EmptyInput("unit sequence"));
    }
    let models = set.resolve_all(units)?;
    check_feasible(set, &models, feat.rows())?;
    let table = EmissionTable::new(set, feat, models.iter().copied())?;
    forced_align_with(set, &table, units, &models)
}

fn check_feasible(set: &HmmSet, models: &[usize], frames: usize) -> Result<()> {
    let required: usize = models.iter().map(|&m| set.model(m).num_states()).sum();
    if frames < required {
        return Err(Error::AlignmentInfeasible {
            required,
            available: frames,
        });
    }
    Ok(())
}

/// Forced alignment using precomputed emissions; `models` are the resolved
/// physical ids of `units`.
pub fn forced_align_with(set: &HmmSet, table: &EmissionTable, units: &[String], models: &[usize]) -> Result<Alignment> {
    if units.is_empty() {
        return Err(Error::EmptyInput("unit sequence"));
    }
    let t_len = table.frames();
    check_feasible(set, models, t_len)?;
    let chain = chain_for(set, models);
    let s_len = chain.len();
    let neg = f64::NEG_INFINITY;
    let mut prev = vec![neg; s_len];
    let mut cur = vec![neg; s_len];
    // true when the best predecessor is the previous chain state
    let mut moved = vec![false; t_len * s_len];
    prev[0] = table.get(0, chain[0].model, chain[0].state);
    for t in 1..t_len {
        // State j needs at least j earlier frames and S-1-j later ones.
        let lo = (s_len + t).saturating_sub(t_len);
        let hi = t.min(s_len - 1);
        cur.iter_mut().for_each(|v| *v = neg);
        for j in lo..=hi {
            let stay = prev[j] + chain[j].self_lp;
            let advance = if j > 0 { prev[j - 1] + chain[j - 1].next_lp } else { neg };
            let (best, from_prev) = if advance > stay { (advance, true) } else { (stay, false) };
            if best == neg {
                continue;
            }
            moved[t * s_len + j] = from_prev;
            cur[j] = best + table.get(t, chain[j].model, chain[j].state);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    let total = prev[s_len - 1] + chain[s_len - 1].next_lp;
    if !total.is_finite() {
        return Err(Error::SearchFailure);
    }
    // Traceback: entry frame of every chain state.
    let mut starts = vec![0usize; s_len];
    let mut j = s_len - 1;
    for t in (1..t_len).rev() {
        if moved[t * s_len + j] {
            starts[j] = t;
            j -= 1;
        }
    }
    debug_assert_eq!(j, 0);
    let mut segments = Vec::with_capacity(units.len());
    let mut k = 0;
    for (unit, &m) in units.iter().zip(models) {
        let n = set.model(m).num_states();
        let state_starts = starts[k..k + n].to_vec();
        let end = if k + n < s_len { starts[k + n] } else { t_len };
        let mut ll = 0.0;
        for s in 0..n {
            let a = state_starts[s];
            let b = if s + 1 < n { state_starts[s + 1] } else { end };
            let c = &chain[k + s];
            for t in a..b {
                ll += table.get(t, c.model, c.state);
            }
            ll += (b - a - 1) as f64 * c.self_lp + c.next_lp;
        }
        segments.push(AlignedSegment {
            unit: unit.clone(),
            start: state_starts[0],
            end,
            loglik: ll,
            state_starts,
        });
        k += n;
    }
    Ok(Alignment {
        segments,
        total_loglik: total,
    })
}

/// Per-model sufficient statistics gathered from hard alignments.
struct ModelStats {
    states: Vec<GmmAccumulator>,
    /// (frames in state, visits) per state
    counts: Vec<(f64, f64)>,
}

fn empty_stats(set: &HmmSet) -> Vec<ModelStats> {
    set.models
        .iter()
        .map(|m| ModelStats {
            states: m.states.iter().map(GmmAccumulator::new).collect(),
            counts: vec![(0.0, 0.0); m.num_states()],
        })
        .collect()
}

fn accumulate_alignment(set: &HmmSet, stats: &mut [ModelStats], feat: FrameView<'_>, frame_states: &[(usize, usize)]) {
    for (t, &(m, s)) in frame_states.iter().enumerate() {
        let st = &mut stats[m];
        st.states[s].add_frame(set.model(m).state(s), feat.row(t));
        st.counts[s].0 += 1.0;
        if t + 1 == frame_states.len() || frame_states[t + 1] != (m, s) {
            st.counts[s].1 += 1.0;
        }
    }
}

/// Re-estimates emissions (one EM step per state mixture on its aligned
/// frames) and transitions (relative frequencies); unvisited states keep
/// their parameters.
fn reestimate(set: &HmmSet, stats: &[ModelStats], floor: &[f64]) -> Result<HmmSet> {
    let mut models = Vec::with_capacity(set.len());
    for (h, st) in set.models.iter().zip(stats) {
        let n = h.num_states();
        let w = n + 2;
        let mut trans = h.transitions.clone();
        let mut states = Vec::with_capacity(n);
        for s in 0..n {
            let (frames, visits) = st.counts[s];
            if frames > 0.0 {
                trans[(s + 1) * w + s + 1] = ((frames - visits) / frames).ln();
                trans[(s + 1) * w + s + 2] = (visits / frames).ln();
            }
            states.push(st.states[s].finalize(h.state(s), floor)?);
        }
        models.push(PhoneHmm::new(h.name.clone(), trans, states)?);
    }
    HmmSet::new(models, set.inventory.clone(), set.tying.clone())
}

fn pooled_floor<'a>(corpus: &[(FrameView<'a>, Vec<String>)], floor_scale: f64) -> Result<Vec<f64>> {
    let dim = corpus.first().ok_or(Error::EmptyInput("training corpus"))?.0.dim();
    let mut pooled = Vec::new();
    for (f, _) in corpus {
        if f.dim() != dim {
            return Err(Error::DimensionMismatch {
                expected: dim,
                found: f.dim(),
            });
        }
        pooled.extend(f.iter_rows().flatten());
    }
    gmm::variance_floor(FrameView::new(&pooled, dim)?, floor_scale)
}

/// One re-estimation pass from a uniform segmentation of every utterance
/// (each unit state gets an equal share of the frames). Used after
/// [`flat_start`], where all paths score alike.
pub fn init_uniform(set: &HmmSet, corpus: &[(FrameView<'_>, Vec<String>)], floor_scale: f64) -> Result<HmmSet> {
    let floor = pooled_floor(corpus, floor_scale)?;
    let mut stats = empty_stats(set);
    for (feat, units) in corpus {
        let models = set.resolve_all(units)?;
        let chain = chain_for(set, &models);
        let t = feat.rows();
        if t < chain.len() {
            continue;
        }
        let frame_states: Vec<(usize, usize)> = (0..t)
            .map(|i| {
                let c = &chain[i * chain.len() / t];
                (c.model, c.state)
            })
            .collect();
        accumulate_alignment(set, &mut stats, *feat, &frame_states);
    }
    reestimate(set, &stats, &floor)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EmbeddedTrainConfig {
    /// Mixture counts per stage; each stage grows the state mixtures to the
    /// given size and then re-estimates.
    pub schedule: Vec<usize>,
    pub iters_per_stage: usize,
    /// Variance floor as a fraction of the pooled per-dimension variance.
    pub floor_scale: f64,
}

impl Default for EmbeddedTrainConfig {
    fn default() -> Self {
        EmbeddedTrainConfig {
            schedule: vec![1, 2, 4, 8, 12, 16],
            iters_per_stage: 5,
            floor_scale: 1e-2,
        }
    }
}

#[derive(Debug, Clone)]
pub struct StageTrace {
    pub mixtures: usize,
    /// Total best-path log-likelihood entering each iteration.
    pub path_logliks: Vec<f64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub set: HmmSet,
    pub stages: Vec<StageTrace>,
    /// Utterances too short for their transcript.
    pub skipped: usize,
}

/// Viterbi embedded re-estimation over a mixture schedule.
pub fn train_embedded(set: &HmmSet, corpus: &[(FrameView<'_>, Vec<String>)], cfg: &EmbeddedTrainConfig) -> Result<TrainOutcome> {
    let floor = pooled_floor(corpus, cfg.floor_scale)?;
    let resolved: Vec<Vec<usize>> = corpus.iter().map(|(_, u)| set.resolve_all(u)).collect::<Result<_>>()?;
    let feasible: Vec<bool> = corpus
        .iter()
        .zip(&resolved)
        .map(|((f, units), m)| {
            let ok = check_feasible(set, m, f.rows()).is_ok() && !units.is_empty();
            if !ok {
                warn!("skipping utterance with {} frames for {} units", f.rows(), units.len());
            }
            ok
        })
        .collect();
    let skipped = feasible.iter().filter(|&&ok| !ok).count();
    if skipped == corpus.len() {
        return Err(Error::EmptyInput("feasible training utterances"));
    }
    let mut current = set.clone();
    let mut stages = Vec::new();
    for &mixtures in &cfg.schedule {
        if mixtures > current.max_mixtures() {
            current = grow_all(&current, mixtures)?;
        }
        let mut trace = Vec::with_capacity(cfg.iters_per_stage);
        for _ in 0..cfg.iters_per_stage {
            let aligned: Vec<Option<Alignment>> = corpus
                .par_iter()
                .zip(&resolved)
                .zip(&feasible)
                .map(|(((feat, units), models), &ok)| {
                    if !ok {
                        return Ok(None);
                    }
                    let table = EmissionTable::new(&current, *feat, models.iter().copied())?;
                    forced_align_with(&current, &table, units, models).map(Some)
                })
                .collect::<Result<_>>()?;
            let mut stats = empty_stats(&current);
            let mut total = 0.0;
            for (((feat, _), models), a) in corpus.iter().zip(&resolved).zip(&aligned) {
                if let Some(a) = a {
                    total += a.total_loglik;
                    accumulate_alignment(&current, &mut stats, *feat, &a.frame_states(models));
                }
            }
            if !total.is_finite() {
                return Err(Error::NonFinite("embedded training path likelihood".into()));
            }
            trace.push(total);
            current = reestimate(&current, &stats, &floor)?;
        }
        debug!("stage {mixtures} mixtures: {trace:?}");
        stages.push(StageTrace {
            mixtures,
            path_logliks: trace,
        });
    }
    Ok(TrainOutcome {
        set: current,
        stages,
        skipped,
    })
}

fn grow_all(set: &HmmSet, mixtures: usize) -> Result<HmmSet> {
    let models = set
        .models
        .iter()
        .map(|h| {
            let states = h.states.iter().map(|g| gmm::grow_mixtures(g, mixtures, SPLIT_EPSILON)).collect();
            PhoneHmm::new(h.name.clone(), h.transitions.clone(), states)
        })
        .collect::<Result<Vec<_>>>()?;
    HmmSet::new(models, set.inventory.clone(), set.tying.clone())
}

/// Counts word-internal triphones over pronunciations (one entry per word
/// token) and instantiates those seen at least `min_count` times as clones of
/// their center monophone; rarer ones are tied to the monophone.
pub fn expand_triphones(set: &HmmSet, word_prons: &[Vec<String>], min_count: usize) -> Result<HmmSet> {
    let mut counts: BTreeMap<String, usize> = BTreeMap::new();
    for pron in word_prons {
        for tri in word_triphones(pron) {
            *counts.entry(tri).or_default() += 1;
        }
    }
    let mut models: Vec<PhoneHmm> = set.models.clone();
    let mut tying = set.tying.clone();
    let existing: BTreeSet<&str> = set.models.iter().map(|m| m.name.as_str()).collect();
    for (tri, n) in &counts {
        if existing.contains(tri.as_str()) {
            continue;
        }
        let center = triphone_center(tri).expect("generated triphone name");
        let id = set.resolve(center)?;
        if *n >= min_count {
            models.push(set.model(id).renamed(tri));
        } else {
            tying.insert(tri.clone(), set.model(id).name.clone());
        }
    }
    HmmSet::new(models, set.inventory.clone(), tying)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::featext::FeatureMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn inventory(phones: &[&str]) -> PhoneInventory {
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
                        let means = (0..2 * dim).map(|_| rng.random_range(-2.0..2.0)).collect();
                        let vars = (0..2 * dim).map(|_| rng.random_range(0.5..1.5)).collect();
                        GmmModel::new(vec![0.3, 0.7], means, vars, dim, "s").unwrap()
                    })
                    .collect();
                let w = 5;
                let mut t = vec![f64::NEG_INFINITY; 25];
                t[1] = 0.0;
                for i in 1..=3 {
                    let p: f64 = rng.random_range(0.2..0.8);
                    t[i * w + i] = p.ln();
                    t[i * w + i + 1] = (1.0 - p).ln();
                }
                PhoneHmm::new(*p, t, states).unwrap()
            })
            .collect();
        HmmSet::new(models, inventory(phones), BTreeMap::new()).unwrap()
    }

    fn random_feat(t: usize, dim: usize, rng: &mut ChaCha8Rng) -> FeatureMatrix {
        let data = (0..t * dim).map(|_| rng.random_range(-2.5..2.5)).collect();
        FeatureMatrix::new(data, dim, 0.01, "f").unwrap()
    }

    /// Scores every monotone path through the chain and keeps the best.
    fn brute_force(set: &HmmSet, feat: &FeatureMatrix, units: &[&str]) -> (f64, Vec<usize>) {
        let mut chain = Vec::new();
        for u in units {
            let m = set.resolve(u).unwrap();
            for s in 0..3 {
                chain.push((m, s));
            }
        }
        let t_len = feat.rows();
        let s_len = chain.len();
        let mut best = (f64::NEG_INFINITY, vec![]);
        // Choose which frames advance: exactly s_len - 1 of the t_len - 1 steps.
        for mask in 0u32..(1 << (t_len - 1)) {
            if mask.count_ones() as usize != s_len - 1 {
                continue;
            }
            let mut path = vec![0usize];
            for t in 1..t_len {
                let last = *path.last().unwrap();
                path.push(if mask & (1 << (t - 1)) != 0 { last + 1 } else { last });
            }
            let mut score = 0.0;
            for t in 0..t_len {
                let (m, s) = chain[path[t]];
                score += set.model(m).state(s).log_density(feat.row(t)).unwrap();
                if t > 0 {
                    let (pm, ps) = chain[path[t - 1]];
                    score += if path[t] == path[t - 1] {
                        set.model(pm).self_loop(ps)
                    } else {
                        set.model(pm).forward(ps)
                    };
                }
            }
            let (m, s) = chain[s_len - 1];
            score += set.model(m).forward(s);
            if score > best.0 {
                best = (score, path);
            }
        }
        best
    }

    fn path_of(al: &Alignment, t_len: usize) -> Vec<usize> {
        let starts: Vec<usize> = al.segments.iter().flat_map(|s| s.state_starts.clone()).collect();
        (0..t_len).map(|t| starts.iter().rposition(|&s| s <= t).unwrap()).collect()
    }

    #[test]
    fn single_phone_three_frames_is_forced() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let set = random_set(&["a"], 2, &mut rng);
        let f = random_feat(3, 2, &mut rng);
        let al = forced_align(&set, f.view(), &["a".to_string()]).unwrap();
        assert_eq!(al.segments[0].state_starts, vec![0, 1, 2]);
        let h = set.model(0);
        let hand = (0..3).map(|s| h.state(s).log_density(f.row(s)).unwrap()).sum::<f64>()
            + h.forward(0)
            + h.forward(1)
            + h.forward(2);
        assert!((al.total_loglik - hand).abs() < 1e-12);
    }

    #[test]
    fn matches_exhaustive_enumeration() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for trial in 0..30 {
            let set = random_set(&["a", "b"], 2, &mut rng);
            let units: Vec<&str> = if trial % 2 == 0 { vec!["a"] } else { vec!["a", "b"] };
            let t = rng.random_range(3 * units.len()..=8);
            let f = random_feat(t, 2, &mut rng);
            let owned: Vec<String> = units.iter().map(|s| s.to_string()).collect();
            let al = forced_align(&set, f.view(), &owned).unwrap();
            let (score, path) = brute_force(&set, &f, &units);
            assert!((al.total_loglik - score).abs() < 1e-9);
            assert_eq!(path_of(&al, t), path);
            let seg_sum: f64 = al.segments.iter().map(|s| s.loglik).sum();
            assert!((seg_sum - al.total_loglik).abs() < 1e-9);
            assert_eq!(al.segments.last().unwrap().end, t);
        }
    }

    #[test]
    fn infeasible_alignment_reports_sizes() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let set = random_set(&["a", "b"], 2, &mut rng);
        let f = random_feat(5, 2, &mut rng);
        let err = forced_align(&set, f.view(), &["a".into(), "b".into()]).unwrap_err();
        assert!(matches!(err, Error::AlignmentInfeasible { required: 6, available: 5 }));
        assert!(matches!(
            forced_align(&set, f.view(), &["zz".into()]),
            Err(Error::UnknownUnit(_))
        ));
    }

    #[test]
    fn flat_start_is_uniform() {
        let phones: Vec<String> = (0..40).map(|i| format!("p{i}")).collect();
        let refs: Vec<&str> = phones.iter().map(String::as_str).collect();
        let inv = inventory(&refs);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let f = random_feat(100, 3, &mut rng);
        let set = flat_start(&inv, f.view(), 1e-2).unwrap();
        assert_eq!(set.len(), 40);
        let (mean, _) = mean_var(&f);
        for m in set.models() {
            assert_eq!(m.transitions(), set.model(0).transitions());
            for s in m.states() {
                for k in 0..3 {
                    assert!((s.mean(0)[k] - mean[k]).abs() < 1e-12);
                }
            }
            for i in 0..=3 {
                let row: f64 = (0..5).map(|j| m.log_transition(i, j).exp()).sum();
                assert!((row - 1.0).abs() < 1e-10);
            }
        }
    }

    fn mean_var(f: &FeatureMatrix) -> (Vec<f64>, Vec<f64>) {
        let n = f.rows() as f64;
        let d = f.dim();
        let mean: Vec<f64> = (0..d).map(|k| f.iter_rows().map(|r| r[k]).sum::<f64>() / n).collect();
        let var = (0..d)
            .map(|k| f.iter_rows().map(|r| (r[k] - mean[k]).powi(2)).sum::<f64>() / n)
            .collect();
        (mean, var)
    }

    #[test]
    fn transitions_reject_backward_arcs() {
        let g = GmmModel::new(vec![1.0], vec![0.0], vec![1.0], 1, "g").unwrap();
        let mut t = vec![f64::NEG_INFINITY; 16];
        t[1] = 0.0;
        t[4 + 1] = 0.5f64.ln();
        t[4 + 2] = 0.5f64.ln();
        t[2 * 4 + 1] = 0.5f64.ln();
        t[2 * 4 + 3] = 0.5f64.ln();
        assert!(PhoneHmm::new("x", t, vec![g.clone(), g]).is_err());
    }

    /// Frames from three well separated regions, as a single phone would
    /// produce with distinct states.
    fn three_block_utterance(rng: &mut ChaCha8Rng) -> FeatureMatrix {
        let mut data = Vec::new();
        for (len, c) in [(8, -3.0), (12, 0.0), (10, 3.0)] {
            for _ in 0..len {
                data.push(c + rng.random_range(-0.5..0.5));
                data.push(-c + rng.random_range(-0.5..0.5));
            }
        }
        FeatureMatrix::new(data, 2, 0.01, "blocks").unwrap()
    }

    #[test]
    fn single_phone_training_partitions_frames() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f = three_block_utterance(&mut rng);
        let inv = inventory(&["a"]);
        let corpus = vec![(f.view(), vec!["a".to_string()])];
        let set = init_uniform(&flat_start(&inv, f.view(), 1e-2).unwrap(), &corpus, 1e-2).unwrap();
        let cfg = EmbeddedTrainConfig {
            schedule: vec![1],
            iters_per_stage: 10,
            floor_scale: 1e-2,
        };
        let out = train_embedded(&set, &corpus, &cfg).unwrap();
        let al = forced_align(&out.set, f.view(), &corpus[0].1).unwrap();
        assert_eq!(al.segments[0].state_starts, vec![0, 8, 20]);
        // Segmental k-means fixed point: each state mean is its segment mean.
        let bounds = [0, 8, 20, 30];
        for s in 0..3 {
            for k in 0..2 {
                let seg_mean = (bounds[s]..bounds[s + 1]).map(|t| f.row(t)[k]).sum::<f64>()
                    / (bounds[s + 1] - bounds[s]) as f64;
                assert!((out.set.model(0).state(s).mean(0)[k] - seg_mean).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn embedded_training_trace_is_monotone_and_reaches_schedule() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let truth = random_set(&["a", "b", "c"], 2, &mut rng);
        let mut feats = Vec::new();
        let mut labels = Vec::new();
        for _ in 0..12 {
            let units: Vec<String> = (0..3).map(|_| ["a", "b", "c"][rng.random_range(0..3)].to_string()).collect();
            let mut data = Vec::new();
            for u in &units {
                let m = truth.model(truth.resolve(u).unwrap());
                for s in 0..3 {
                    let g = m.state(s);
                    for _ in 0..rng.random_range(2..6) {
                        let c = if rng.random_bool(g.weights()[0]) { 0 } else { 1 };
                        for k in 0..2 {
                            data.push(g.mean(c)[k] + rng.random_range(-1.0..1.0) * g.variance(c)[k].sqrt());
                        }
                    }
                }
            }
            feats.push(FeatureMatrix::new(data, 2, 0.01, "u").unwrap());
            labels.push(units);
        }
        feats.push(random_feat(4, 2, &mut rng));
        labels.push(vec!["a".into(), "b".into()]);
        let corpus: Vec<(FrameView, Vec<String>)> = feats.iter().map(|f| f.view()).zip(labels).collect();
        let pooled: Vec<f64> = feats.iter().flat_map(|f| f.as_slice().to_vec()).collect();
        let flat = flat_start(truth.inventory(), FrameView::new(&pooled, 2).unwrap(), 1e-2).unwrap();
        let init = init_uniform(&flat, &corpus, 1e-2).unwrap();
        let cfg = EmbeddedTrainConfig {
            schedule: vec![1, 2, 4],
            iters_per_stage: 4,
            floor_scale: 1e-2,
        };
        let out = train_embedded(&init, &corpus, &cfg).unwrap();
        assert_eq!(out.skipped, 1);
        assert_eq!(out.set.max_mixtures(), 4);
        for stage in &out.stages {
            for w in stage.path_logliks.windows(2) {
                assert!(w[1] >= w[0] - 1e-6, "{:?}", stage.path_logliks);
            }
        }
        for m in out.set.models() {
            for i in 1..=3 {
                let row: f64 = (0..5).map(|j| m.log_transition(i, j).exp()).sum();
                assert!((row - 1.0).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn triphone_enumeration() {
        let pron: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        assert_eq!(word_triphones(&pron), vec!["sil-a+b", "a-b+a", "b-a+sil"]);
        assert_eq!(triphone_center("sil-a+b"), Some("a"));
        assert_eq!(triphone_center("A~"), None);
    }

    #[test]
    fn triphone_expansion_and_tying() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let set = random_set(&["a", "b"], 2, &mut rng);
        let pron: Vec<String> = ["a", "b", "a"].iter().map(|s| s.to_string()).collect();
        let expanded = expand_triphones(&set, &[pron.clone(), pron.clone()], 2).unwrap();
        assert_eq!(expanded.len(), 5);
        assert!(expanded.tying().is_empty());
        let tied = expand_triphones(&set, std::slice::from_ref(&pron), usize::MAX).unwrap();
        assert_eq!(tied.len(), 2);
        assert_eq!(tied.tying().len(), 3);
        let f = random_feat(20, 2, &mut rng);
        let tri = word_triphones(&pron);
        let a = forced_align(&tied, f.view(), &tri).unwrap();
        let b = forced_align(&set, f.view(), &pron).unwrap();
        assert_eq!(a.total_loglik, b.total_loglik);
        // Unseen triphones fall back to the center phone.
        assert_eq!(tied.resolve("b-b+b").unwrap(), tied.resolve("b").unwrap());
    }

    #[test]
    fn json_round_trip() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let set = random_set(&["a", "b"], 2, &mut rng);
        let back = HmmSet::from_json(&set.to_json()).unwrap();
        assert_eq!(back.len(), 2);
        for (x, y) in back.models().iter().zip(set.models()) {
            for (p, q) in x.transitions().iter().zip(y.transitions()) {
                assert!(p == q || (p - q).abs() < 1e-12);
            }
            assert_eq!(x.states(), y.states());
        }
    }
}
