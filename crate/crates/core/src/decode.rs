//! Phone bigram language models, decoding graphs and token-passing Viterbi
//! search.
//!
//! A graph has emitting nodes (one phone HMM instance each) and null hub
//! nodes. Null nodes may only connect emitting nodes to emitting nodes, so
//! they are resolved within a frame without any ordering concerns.

use std::collections::VecDeque;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::corpus::{Lexicon, PhoneInventory};
use crate::error::{Error, Result};
use crate::featext::FrameView;
use crate::hmm::{word_triphones, EmissionTable, HmmSet};

/// Sentence boundary in the phone LM (start history and end event).
pub const SENTENCE_BOUNDARY: &str = "<s>";
const LM_FORMAT_TAG: &str = "dialect-id/phone-lm";
const LM_FORMAT_VERSION: u32 = 1;

/// Add-k smoothed phone bigram and unigram model.
#[derive(Debug, Clone, PartialEq)]
pub struct PhoneLM {
    /// Inventory phones followed by the boundary symbol.
    symbols: Vec<String>,
    k: f64,
    /// `(history, next)` counts, `V x V`.
    counts: Vec<u64>,
    unigram: Vec<f64>,
    bigram: Vec<f64>,
}

#[derive(Serialize, Deserialize)]
struct PhoneLmFile {
    format: String,
    version: u32,
    k: f64,
    symbols: Vec<String>,
    /// Sparse `(history, next, count)` triples.
    counts: Vec<(String, String, u64)>,
}

impl PhoneLM {
    fn from_counts(symbols: Vec<String>, counts: Vec<u64>, k: f64) -> Result<Self> {
        if !(k >= 0.0 && k.is_finite()) {
            return Err(Error::InvalidConfig("add-k constant must be non-negative".into()));
        }
        let v = symbols.len();
        let vf = v as f64;
        let mut bigram = vec![0.0; v * v];
        for h in 0..v {
            let row = &counts[h * v..(h + 1) * v];
            let total: u64 = row.iter().sum();
            let denom = total as f64 + k * vf;
            for (p, &c) in row.iter().enumerate() {
                bigram[h * v + p] = if denom > 0.0 {
                    ((c as f64 + k) / denom).ln()
                } else {
                    -vf.ln()
                };
            }
        }
        // Unigram over predicted events: every non-start position.
        let mut col = vec![0u64; v];
        for h in 0..v {
            for p in 0..v {
                col[p] += counts[h * v + p];
            }
        }
        let n: u64 = col.iter().sum();
        let denom = n as f64 + k * vf;
        let unigram = col
            .iter()
            .map(|&c| if denom > 0.0 { ((c as f64 + k) / denom).ln() } else { -vf.ln() })
            .collect();
        Ok(PhoneLM {
            symbols,
            k,
            counts,
            unigram,
            bigram,
        })
    }

    pub fn symbols(&self) -> &[String] {
        &self.symbols
    }

    pub fn k(&self) -> f64 {
        self.k
    }

    fn index(&self, symbol: &str) -> Option<usize> {
        self.symbols.iter().position(|s| s == symbol)
    }

    /// `log P(next | history)`; either side may be [`SENTENCE_BOUNDARY`].
    pub fn log_prob(&self, next: &str, history: &str) -> Result<f64> {
        let h = self.index(history).ok_or_else(|| Error::UnknownUnit(history.to_string()))?;
        let p = self.index(next).ok_or_else(|| Error::UnknownUnit(next.to_string()))?;
        Ok(self.bigram[h * self.symbols.len() + p])
    }

    pub fn unigram_log_prob(&self, symbol: &str) -> Result<f64> {
        let p = self.index(symbol).ok_or_else(|| Error::UnknownUnit(symbol.to_string()))?;
        Ok(self.unigram[p])
    }

    /// Log probability of a whole phone sequence including both boundaries.
    pub fn sequence_log_prob(&self, phones: &[String]) -> Result<f64> {
        let mut h = SENTENCE_BOUNDARY;
        let mut total = 0.0;
        for p in phones {
            total += self.log_prob(p, h)?;
            h = p;
        }
        Ok(total + self.log_prob(SENTENCE_BOUNDARY, h)?)
    }

    pub fn to_json(&self) -> String {
        let v = self.symbols.len();
        let mut counts = Vec::new();
        for h in 0..v {
            for p in 0..v {
                let c = self.counts[h * v + p];
                if c > 0 {
                    counts.push((self.symbols[h].clone(), self.symbols[p].clone(), c));
                }
            }
        }
        serde_json::to_string_pretty(&PhoneLmFile {
            format: LM_FORMAT_TAG.into(),
            version: LM_FORMAT_VERSION,
            k: self.k,
            symbols: self.symbols.clone(),
            counts,
        })
        .expect("LM serializes")
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let f: PhoneLmFile = serde_json::from_str(text).map_err(|e| Error::InvalidModel(e.to_string()))?;
        if f.format != LM_FORMAT_TAG || f.version != LM_FORMAT_VERSION {
            return Err(Error::InvalidModel(format!("not a {LM_FORMAT_TAG} v{LM_FORMAT_VERSION} file")));
        }
        let v = f.symbols.len();
        let pos = |s: &str| {
            f.symbols
                .iter()
                .position(|x| x == s)
                .ok_or_else(|| Error::InvalidModel(format!("LM count for unknown symbol `{s}`")))
        };
        let mut counts = vec![0u64; v * v];
        for (h, p, c) in &f.counts {
            counts[pos(h)? * v + pos(p)?] = *c;
        }
        PhoneLM::from_counts(f.symbols, counts, f.k)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_json()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json(&text)
    }
}

/// Bigram counts over the inventory plus a boundary symbol, smoothed with
/// add-`k`.
pub fn estimate_bigram(transcripts: &[Vec<String>], inventory: &PhoneInventory, k: f64) -> Result<PhoneLM> {
    if transcripts.is_empty() {
        return Err(Error::EmptyInput("transcripts"));
    }
    let mut symbols: Vec<String> = inventory.phones().to_vec();
    symbols.push(SENTENCE_BOUNDARY.to_string());
    let v = symbols.len();
    let boundary = v - 1;
    let mut counts = vec![0u64; v * v];
    for (i, tr) in transcripts.iter().enumerate() {
        let mut h = boundary;
        for p in tr {
            let idx = inventory.phones().iter().position(|x| x == p).ok_or_else(|| {
                Error::PhoneNotInInventory {
                    phone: p.clone(),
                    word: format!("<transcript {i}>"),
                }
            })?;
            counts[h * v + idx] += 1;
            h = idx;
        }
        counts[h * v + boundary] += 1;
    }
    PhoneLM::from_counts(symbols, counts, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum GraphKind {
    PhoneLoop,
    WordLoop,
    Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct GraphNode {
    /// Physical model id, `None` for null nodes.
    pub model: Option<usize>,
    /// Unit symbol as written in the transcript or lexicon (may be a triphone).
    pub unit: String,
    /// Index into [`DecodingGraph::words`] for word-graph nodes.
    pub word: Option<usize>,
    /// First phone of a word pronunciation.
    pub word_start: bool,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphArc {
    pub from: usize,
    pub weight: f64,
}

#[derive(Debug, Clone)]
pub struct DecodingGraph {
    kind: GraphKind,
    nodes: Vec<GraphNode>,
    arcs_in: Vec<Vec<GraphArc>>,
    start: Vec<f64>,
    finals: Vec<f64>,
    words: Vec<String>,
}

impl DecodingGraph {
    /// Assembles a graph from nodes, `(from, to, weight)` arcs and start and
    /// final weights (`-inf` for non-start / non-final nodes).
    pub fn new(
        kind: GraphKind,
        nodes: Vec<GraphNode>,
        arcs: &[(usize, usize, f64)],
        start: Vec<f64>,
        finals: Vec<f64>,
        words: Vec<String>,
    ) -> Result<Self> {
        let n = nodes.len();
        if n == 0 {
            return Err(Error::EmptyInput("graph nodes"));
        }
        if start.len() != n || finals.len() != n {
            return Err(Error::InvalidModel("start/final weights do not match node count".into()));
        }
        let mut arcs_in = vec![Vec::new(); n];
        for &(from, to, weight) in arcs {
            if from >= n || to >= n || weight.is_nan() {
                return Err(Error::InvalidModel(format!("bad arc {from}->{to}")));
            }
            if nodes[from].model.is_none() && nodes[to].model.is_none() {
                return Err(Error::InvalidModel("null nodes may not be adjacent".into()));
            }
            arcs_in[to].push(GraphArc { from, weight });
        }
        for (i, node) in nodes.iter().enumerate() {
            if node.model.is_none() && (start[i] > f64::NEG_INFINITY || finals[i] > f64::NEG_INFINITY) {
                return Err(Error::InvalidModel("null nodes cannot start or end a path".into()));
            }
        }
        let g = DecodingGraph {
            kind,
            nodes,
            arcs_in,
            start,
            finals,
            words,
        };
        g.check_connectivity()?;
        Ok(g)
    }

    fn check_connectivity(&self) -> Result<()> {
        let n = self.nodes.len();
        let mut arcs_out = vec![Vec::new(); n];
        for (to, ins) in self.arcs_in.iter().enumerate() {
            for a in ins {
                arcs_out[a.from].push(to);
            }
        }
        let sweep = |seeds: Vec<usize>, next: &dyn Fn(usize) -> Vec<usize>| {
            let mut seen = vec![false; n];
            let mut queue: VecDeque<usize> = seeds.into();
            while let Some(i) = queue.pop_front() {
                if !std::mem::replace(&mut seen[i], true) {
                    queue.extend(next(i));
                }
            }
            seen
        };
        let fwd = sweep(
            (0..n).filter(|&i| self.start[i] > f64::NEG_INFINITY).collect(),
            &|i| arcs_out[i].clone(),
        );
        let bwd = sweep(
            (0..n).filter(|&i| self.finals[i] > f64::NEG_INFINITY).collect(),
            &|i| self.arcs_in[i].iter().map(|a| a.from).collect(),
        );
        if let Some(i) = (0..n).find(|&i| !fwd[i] || !bwd[i]) {
            return Err(Error::InvalidModel(format!(
                "graph node {i} (`{}`) is not on any start-to-end path",
                self.nodes[i].unit
            )));
        }
        Ok(())
    }

    pub fn kind(&self) -> GraphKind {
        self.kind
    }

    pub fn nodes(&self) -> &[GraphNode] {
        &self.nodes
    }

    pub fn arcs_into(&self, node: usize) -> &[GraphArc] {
        &self.arcs_in[node]
    }

    pub fn start_weight(&self, node: usize) -> f64 {
        self.start[node]
    }

    pub fn final_weight(&self, node: usize) -> f64 {
        self.finals[node]
    }

    pub fn words(&self) -> &[String] {
        &self.words
    }

    pub fn num_arcs(&self) -> usize {
        self.arcs_in.iter().map(Vec::len).sum()
    }

    /// Physical models referenced by emitting nodes, deduplicated in order.
    pub fn models(&self) -> Vec<usize> {
        let mut seen = std::collections::BTreeSet::new();
        self.nodes.iter().filter_map(|n| n.model).filter(|m| seen.insert(*m)).collect()
    }
}

fn emitting(model: usize, unit: &str) -> GraphNode {
    GraphNode {
        model: Some(model),
        unit: unit.to_string(),
        word: None,
        word_start: false,
    }
}

/// Free loop over every inventory phone. With an LM, phone-to-phone arcs
/// carry `log P(b|a)` and start/final weights carry the boundary terms;
/// without one all weights are zero.
pub fn build_phone_loop(set: &HmmSet, lm: Option<&PhoneLM>) -> Result<DecodingGraph> {
    let phones = set.inventory().phones();
    let mut nodes = Vec::with_capacity(phones.len());
    for p in phones {
        nodes.push(emitting(set.resolve(p)?, p));
    }
    let weight = |next: &str, hist: &str| -> Result<f64> { lm.map_or(Ok(0.0), |lm| lm.log_prob(next, hist)) };
    let mut arcs = Vec::with_capacity(phones.len() * phones.len());
    let mut start = Vec::with_capacity(phones.len());
    let mut finals = Vec::with_capacity(phones.len());
    for (j, b) in phones.iter().enumerate() {
        start.push(weight(b, SENTENCE_BOUNDARY)?);
        finals.push(weight(SENTENCE_BOUNDARY, b)?);
        for (i, a) in phones.iter().enumerate() {
            arcs.push((i, j, weight(b, a)?));
        }
    }
    DecodingGraph::new(GraphKind::PhoneLoop, nodes, &arcs, start, finals, Vec::new())
}

/// True when the set carries context-dependent models, in which case word
/// pronunciations are expanded to word-internal triphones.
pub fn uses_triphones(set: &HmmSet) -> bool {
    !set.tying().is_empty() || set.models().iter().any(|m| crate::hmm::triphone_center(m.name()).is_some())
}

/// Unit sequence used for a pronunciation in `set`.
pub fn pronunciation_units(set: &HmmSet, pron: &[String]) -> Vec<String> {
    if uses_triphones(set) {
        word_triphones(pron)
    } else {
        pron.to_vec()
    }
}

/// Word loop: every pronunciation is a linear chain; chain ends feed a null
/// hub that re-enters every chain. All arc weights are zero.
pub fn build_word_graph(set: &HmmSet, lexicon: &Lexicon) -> Result<DecodingGraph> {
    if lexicon.is_empty() {
        return Err(Error::EmptyInput("lexicon"));
    }
    let mut nodes = Vec::new();
    let mut arcs = Vec::new();
    let mut words = Vec::new();
    let mut chains = Vec::new();
    for (w, (word, prons)) in lexicon.entries().enumerate() {
        words.push(word.to_string());
        for pron in prons {
            let units = pronunciation_units(set, pron);
            let first = nodes.len();
            for (i, u) in units.iter().enumerate() {
                let model = set.resolve(u)?;
                if i > 0 {
                    arcs.push((nodes.len() - 1, nodes.len(), 0.0));
                }
                nodes.push(GraphNode {
                    model: Some(model),
                    unit: u.clone(),
                    word: Some(w),
                    word_start: i == 0,
                });
            }
            chains.push((first, nodes.len() - 1));
        }
    }
    let hub = nodes.len();
    nodes.push(GraphNode {
        model: None,
        unit: "<hub>".into(),
        word: None,
        word_start: false,
    });
    let mut start = vec![f64::NEG_INFINITY; nodes.len()];
    let mut finals = vec![f64::NEG_INFINITY; nodes.len()];
    for &(first, last) in &chains {
        arcs.push((last, hub, 0.0));
        arcs.push((hub, first, 0.0));
        start[first] = 0.0;
        finals[last] = 0.0;
    }
    DecodingGraph::new(GraphKind::WordLoop, nodes, &arcs, start, finals, words)
}

/// A single chain through `units`, equivalent to forced alignment.
pub fn build_linear_graph(set: &HmmSet, units: &[String]) -> Result<DecodingGraph> {
    if units.is_empty() {
        return Err(Error::EmptyInput("unit sequence"));
    }
    let nodes: Vec<GraphNode> = units
        .iter()
        .map(|u| Ok(emitting(set.resolve(u)?, u)))
        .collect::<Result<_>>()?;
    let n = nodes.len();
    let arcs: Vec<(usize, usize, f64)> = (1..n).map(|i| (i - 1, i, 0.0)).collect();
    let mut start = vec![f64::NEG_INFINITY; n];
    let mut finals = vec![f64::NEG_INFINITY; n];
    start[0] = 0.0;
    finals[n - 1] = 0.0;
    DecodingGraph::new(GraphKind::Linear, nodes, &arcs, start, finals, Vec::new())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct UnitSegment {
    pub symbol: String,
    pub start: usize,
    /// Exclusive.
    pub end: usize,
    /// Acoustic log-likelihood: emissions plus within-model transitions.
    pub loglik: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ResultKind {
    Phone,
    Word,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DecodeResult {
    pub kind: ResultKind,
    /// Model-level segments.
    pub units: Vec<UnitSegment>,
    /// Word-level segments (word graphs only).
    pub words: Vec<UnitSegment>,
    pub total_loglik: f64,
    /// Sum of start, arc and final weights along the path.
    pub arc_loglik: f64,
}

impl DecodeResult {
    /// Word segments for word graphs, unit segments otherwise.
    pub fn top_level(&self) -> &[UnitSegment] {
        match self.kind {
            ResultKind::Word => &self.words,
            ResultKind::Phone => &self.units,
        }
    }

    pub fn acoustic_loglik(&self) -> f64 {
        self.units.iter().map(|u| u.loglik).sum()
    }
}

const BP_STAY: u32 = 0;
const BP_ADVANCE: u32 = 1;
const BP_ARC: u32 = 2;
const BP_START: u32 = u32::MAX;

/// Viterbi search; `beam` is a log-likelihood width below the best token of
/// each frame (`None` = exact search).
pub fn viterbi_decode(graph: &DecodingGraph, set: &HmmSet, feat: FrameView<'_>, beam: Option<f64>) -> Result<DecodeResult> {
    let table = EmissionTable::new(set, feat, graph.models())?;
    viterbi_decode_with(graph, set, &table, beam)
}

/// As [`viterbi_decode`] with emissions already computed for every model in
/// the graph.
pub fn viterbi_decode_with(graph: &DecodingGraph, set: &HmmSet, table: &EmissionTable, beam: Option<f64>) -> Result<DecodeResult> {
    let t_len = table.frames();
    if t_len == 0 {
        return Err(Error::EmptyInput("feature frames"));
    }
    if let Some(b) = beam {
        if !(b >= 0.0) {
            return Err(Error::InvalidConfig("beam must be non-negative".into()));
        }
    }
    let neg = f64::NEG_INFINITY;
    let n = graph.nodes.len();
    // State offsets for emitting nodes; null nodes get their own slots.
    let mut offset = vec![usize::MAX; n];
    let mut null_slot = vec![usize::MAX; n];
    let mut total_states = 0;
    let mut nulls = Vec::new();
    for (i, node) in graph.nodes.iter().enumerate() {
        match node.model {
            Some(m) => {
                if !table.covers(m) {
                    return Err(Error::InvalidModel(format!("no emissions for model of `{}`", node.unit)));
                }
                offset[i] = total_states;
                total_states += set.model(m).num_states();
            }
            None => {
                null_slot[i] = nulls.len();
                nulls.push(i);
            }
        }
    }
    let emitting: Vec<usize> = (0..n).filter(|&i| offset[i] != usize::MAX).collect();
    let ns = |i: usize| set.model(graph.nodes[i].model.expect("emitting")).num_states();
    let last_state = |i: usize| offset[i] + ns(i) - 1;
    let exit_lp = |i: usize| {
        let m = set.model(graph.nodes[i].model.expect("emitting"));
        m.forward(m.num_states() - 1)
    };

    let mut prev = vec![neg; total_states];
    let mut cur = vec![neg; total_states];
    let mut null_score = vec![neg; nulls.len()];
    let mut bp = vec![0u32; t_len * total_states];
    let mut null_bp = vec![0u32; t_len * nulls.len().max(1)];

    let resolve_nulls = |scores: &[f64], null_score: &mut [f64], null_bp: &mut [u32], t: usize| {
        for (z, &node) in nulls.iter().enumerate() {
            let mut best = neg;
            let mut arg = 0u32;
            for (k, a) in graph.arcs_in[node].iter().enumerate() {
                let s = scores[last_state(a.from)] + exit_lp(a.from) + a.weight;
                if s > best {
                    best = s;
                    arg = k as u32;
                }
            }
            null_score[z] = best;
            null_bp[t * nulls.len() + z] = arg;
        }
    };

    for &i in &emitting {
        let m = graph.nodes[i].model.expect("emitting");
        let w = graph.start[i];
        if w > neg {
            prev[offset[i]] = w + table.get(0, m, 0);
            bp[offset[i]] = BP_START;
        }
    }
    prune(&mut prev, beam);
    resolve_nulls(&prev, &mut null_score, &mut null_bp, 0);

    for t in 1..t_len {
        let row = t * total_states;
        for &i in &emitting {
            let m_id = graph.nodes[i].model.expect("emitting");
            let model = set.model(m_id);
            let o = offset[i];
            let mut entry = neg;
            let mut entry_arc = 0u32;
            for (k, a) in graph.arcs_in[i].iter().enumerate() {
                let src = if offset[a.from] != usize::MAX {
                    prev[last_state(a.from)] + exit_lp(a.from)
                } else {
                    null_score[null_slot[a.from]]
                };
                let s = src + a.weight;
                if s > entry {
                    entry = s;
                    entry_arc = k as u32;
                }
            }
            for s in 0..model.num_states() {
                let stay = prev[o + s] + model.self_loop(s);
                let (other, code) = if s == 0 {
                    (entry, BP_ARC + entry_arc)
                } else {
                    (prev[o + s - 1] + model.forward(s - 1), BP_ADVANCE)
                };
                let (best, c) = if other > stay { (other, code) } else { (stay, BP_STAY) };
                cur[o + s] = if best > neg { best + table.get(t, m_id, s) } else { neg };
                bp[row + o + s] = c;
            }
        }
        prune(&mut cur, beam);
        std::mem::swap(&mut prev, &mut cur);
        resolve_nulls(&prev, &mut null_score, &mut null_bp, t);
    }

    let mut best = neg;
    let mut best_node = usize::MAX;
    for &i in &emitting {
        let w = graph.finals[i];
        if w == neg {
            continue;
        }
        let s = prev[last_state(i)] + exit_lp(i) + w;
        if s > best {
            best = s;
            best_node = i;
        }
    }
    if best_node == usize::MAX || !best.is_finite() {
        return Err(Error::SearchFailure);
    }

    // Traceback into node visits with per-state start frames.
    let mut visits: Vec<(usize, Vec<usize>)> = Vec::new();
    let mut arc_loglik = graph.finals[best_node];
    let mut node = best_node;
    let mut s = ns(node) - 1;
    let mut starts = vec![0usize; ns(node)];
    let mut t = t_len - 1;
    loop {
        let code = bp[t * total_states + offset[node] + s];
        match code {
            BP_STAY => t -= 1,
            BP_ADVANCE => {
                starts[s] = t;
                s -= 1;
                t -= 1;
            }
            BP_START => {
                debug_assert!(t == 0 && s == 0);
                starts[0] = 0;
                arc_loglik += graph.start[node];
                visits.push((node, starts));
                break;
            }
            _ => {
                starts[0] = t;
                visits.push((node, std::mem::take(&mut starts)));
                let arc = graph.arcs_in[node][(code - BP_ARC) as usize];
                arc_loglik += arc.weight;
                let mut from = arc.from;
                if offset[from] == usize::MAX {
                    let z = null_slot[from];
                    let inner = graph.arcs_in[from][null_bp[(t - 1) * nulls.len() + z] as usize];
                    arc_loglik += inner.weight;
                    from = inner.from;
                }
                node = from;
                s = ns(node) - 1;
                starts = vec![0usize; ns(node)];
                t -= 1;
            }
        }
    }
    visits.reverse();

    let mut units = Vec::with_capacity(visits.len());
    let mut words: Vec<UnitSegment> = Vec::new();
    for (v, (node, starts)) in visits.iter().enumerate() {
        let end = visits.get(v + 1).map_or(t_len, |(_, s)| s[0]);
        let m_id = graph.nodes[*node].model.expect("emitting");
        let model = set.model(m_id);
        let mut ll = 0.0;
        for s in 0..model.num_states() {
            let a = starts[s];
            let b = if s + 1 < model.num_states() { starts[s + 1] } else { end };
            for t in a..b {
                ll += table.get(t, m_id, s);
            }
            ll += (b - a - 1) as f64 * model.self_loop(s) + model.forward(s);
        }
        let gn = &graph.nodes[*node];
        units.push(UnitSegment {
            symbol: gn.unit.clone(),
            start: starts[0],
            end,
            loglik: ll,
        });
        if let Some(w) = gn.word {
            match words.last_mut() {
                Some(last) if !gn.word_start => {
                    last.end = end;
                    last.loglik += ll;
                }
                _ => words.push(UnitSegment {
                    symbol: graph.words[w].clone(),
                    start: starts[0],
                    end,
                    loglik: ll,
                }),
            }
        }
    }
    Ok(DecodeResult {
        kind: if graph.kind == GraphKind::WordLoop {
            ResultKind::Word
        } else {
            ResultKind::Phone
        },
        units,
        words,
        total_loglik: best,
        arc_loglik,
    })
}

fn prune(scores: &mut [f64], beam: Option<f64>) {
    let Some(beam) = beam else { return };
    let best = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let floor = best - beam;
    for s in scores.iter_mut() {
        if *s < floor {
            *s = f64::NEG_INFINITY;
        }
    }
}

/// `utt_id<TAB>total<TAB>sym:start:end ...`
pub fn format_decode_line(utt_id: &str, result: &DecodeResult) -> String {
    let mut line = format!("{utt_id}\t{}\t", result.total_loglik);
    for (i, u) in result.top_level().iter().enumerate() {
        if i > 0 {
            line.push(' ');
        }
        let _ = write!(line, "{}:{}:{}", u.symbol, u.start, u.end);
    }
    line
}

/// Parsed decode line: utterance id, total log-likelihood and
/// `(symbol, start, end)` triples.
pub type DecodeLine = (String, f64, Vec<(String, usize, usize)>);

pub fn parse_decode_line(line: &str) -> Result<DecodeLine> {
    let bad = || Error::Format(format!("malformed decode line `{line}`"));
    let mut cols = line.split('\t');
    let id = cols.next().filter(|s| !s.is_empty()).ok_or_else(bad)?;
    let total: f64 = cols.next().ok_or_else(bad)?.parse().map_err(|_| bad())?;
    let segs = cols
        .next()
        .unwrap_or("")
        .split_whitespace()
        .map(|tok| {
            let mut it = tok.rsplitn(3, ':');
            let end = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let start = it.next().and_then(|s| s.parse().ok()).ok_or_else(bad)?;
            let sym = it.next().ok_or_else(bad)?;
            Ok((sym.to_string(), start, end))
        })
        .collect::<Result<_>>()?;
    Ok((id.to_string(), total, segs))
}
