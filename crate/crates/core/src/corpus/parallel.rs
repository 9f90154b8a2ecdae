use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;

use super::{DialectLabel, Lexicon};
use crate::error::{Error, Result};

/// A phone-level rewrite. `anchor_start`/`anchor_end` restrict matches to
/// the beginning/end of the word (written `^`/`$` in rule files).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RewriteRule {
    pub pattern: Vec<String>,
    pub replacement: Vec<String>,
    pub anchor_start: bool,
    pub anchor_end: bool,
}

impl RewriteRule {
    pub fn parse(pattern: &str, replacement: &str) -> Result<Self> {
        let mut pattern: Vec<String> = pattern.split_whitespace().map(str::to_string).collect();
        let anchor_start = pattern.first().is_some_and(|p| p == "^");
        if anchor_start {
            pattern.remove(0);
        }
        let anchor_end = pattern.last().is_some_and(|p| p == "$");
        if anchor_end {
            pattern.pop();
        }
        if pattern.is_empty() {
            return Err(Error::Format("rewrite rule with empty pattern".into()));
        }
        Ok(RewriteRule {
            pattern,
            replacement: replacement.split_whitespace().map(str::to_string).collect(),
            anchor_start,
            anchor_end,
        })
    }

    /// Rewrites every non-overlapping match, scanning left to right.
    pub fn apply(&self, phones: &[String]) -> Vec<String> {
        let n = self.pattern.len();
        let mut out = Vec::with_capacity(phones.len());
        let mut i = 0;
        while i < phones.len() {
            let fits = i + n <= phones.len()
                && (!self.anchor_start || i == 0)
                && (!self.anchor_end || i + n == phones.len())
                && phones[i..i + n] == self.pattern[..];
            if fits {
                out.extend(self.replacement.iter().cloned());
                i += n;
            } else {
                out.push(phones[i].clone());
                i += 1;
            }
        }
        out
    }
}

impl fmt::Display for RewriteRule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.anchor_start {
            f.write_str("^ ")?;
        }
        f.write_str(&self.pattern.join(" "))?;
        if self.anchor_end {
            f.write_str(" $")?;
        }
        write!(f, "\t{}", self.replacement.join(" "))
    }
}

/// Applies a rule table in order.
pub fn apply_rules(rules: &[RewriteRule], phones: &[String]) -> Vec<String> {
    rules
        .iter()
        .fold(phones.to_vec(), |acc, rule| rule.apply(&acc))
}

/// Reads `pattern<TAB>replacement` lines.
pub fn load_rule_table(path: impl AsRef<Path>) -> Result<Vec<RewriteRule>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut rules = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let (pat, rep) = line.split_once('\t').unwrap_or((line, ""));
        rules.push(RewriteRule::parse(pat, rep).map_err(|e| Error::parse(path, idx + 1, e.to_string()))?);
    }
    Ok(rules)
}

/// Reads `src<TAB>dst` lines (a third column, if present, is ignored).
pub fn load_override_table(path: impl AsRef<Path>) -> Result<Vec<(String, String)>> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = Vec::new();
    for (idx, line) in text.lines().enumerate() {
        if line.trim().is_empty() || line.starts_with('#') {
            continue;
        }
        let fields: Vec<&str> = line.split('\t').collect();
        if fields.len() < 2 {
            return Err(Error::parse(path, idx + 1, "expected `src<TAB>dst`"));
        }
        out.push((fields[0].trim().to_string(), fields[1].trim().to_string()));
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParallelSource {
    Rule,
    Manual,
}

impl ParallelSource {
    fn as_str(self) -> &'static str {
        match self {
            ParallelSource::Rule => "rule",
            ParallelSource::Manual => "manual",
        }
    }
}

/// Word-to-word mapping between the two dialects.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParallelDictionary {
    lt_to_ct: BTreeMap<String, (String, ParallelSource)>,
    ct_to_lt: BTreeMap<String, (String, ParallelSource)>,
    overrides: BTreeMap<String, String>,
}

impl ParallelDictionary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn is_empty(&self) -> bool {
        self.lt_to_ct.is_empty() && self.ct_to_lt.is_empty()
    }

    pub fn len(&self) -> usize {
        self.lt_to_ct.len() + self.ct_to_lt.len()
    }

    /// The parallel word of `word`, read as a word of dialect `from`.
    pub fn lookup(&self, word: &str, from: DialectLabel) -> Option<&str> {
        let table = match from {
            DialectLabel::Lt => &self.lt_to_ct,
            DialectLabel::Ct => &self.ct_to_lt,
        };
        table.get(word).map(|(w, _)| w.as_str())
    }

    pub fn source(&self, word: &str, from: DialectLabel) -> Option<ParallelSource> {
        let table = match from {
            DialectLabel::Lt => &self.lt_to_ct,
            DialectLabel::Ct => &self.ct_to_lt,
        };
        table.get(word).map(|(_, s)| *s)
    }

    pub fn overrides(&self) -> &BTreeMap<String, String> {
        &self.overrides
    }

    pub fn entries(&self, from: DialectLabel) -> impl Iterator<Item = (&str, &str)> {
        let table = match from {
            DialectLabel::Lt => &self.lt_to_ct,
            DialectLabel::Ct => &self.ct_to_lt,
        };
        table.iter().map(|(s, (d, _))| (s.as_str(), d.as_str()))
    }

    pub fn insert(&mut self, from: DialectLabel, src: &str, dst: &str, source: ParallelSource) {
        let table = match from {
            DialectLabel::Lt => &mut self.lt_to_ct,
            DialectLabel::Ct => &mut self.ct_to_lt,
        };
        table.insert(src.to_string(), (dst.to_string(), source));
        if source == ParallelSource::Manual {
            self.overrides.insert(src.to_string(), dst.to_string());
        }
    }

    /// Applies a manual pair in every direction the lexicons allow. Returns
    /// false when neither direction is possible.
    fn insert_manual(&mut self, src: &str, dst: &str, lt: &Lexicon, ct: &Lexicon) -> bool {
        let mut placed = false;
        if lt.contains(src) && ct.contains(dst) {
            self.insert(DialectLabel::Lt, src, dst, ParallelSource::Manual);
            placed = true;
        }
        if ct.contains(src) && lt.contains(dst) {
            self.insert(DialectLabel::Ct, src, dst, ParallelSource::Manual);
            placed = true;
        }
        placed
    }

    /// `src<TAB>dst<TAB>{rule|manual}` lines, LT-to-CT entries first.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for table in [&self.lt_to_ct, &self.ct_to_lt] {
            for (src, (dst, source)) in table {
                out.push_str(&format!("{src}\t{dst}\t{}\n", source.as_str()));
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }

    /// Loads a dictionary file. Entry direction is recovered from lexicon
    /// membership; rows that fit neither direction are reported as warnings.
    pub fn load(path: impl AsRef<Path>, lt: &Lexicon, ct: &Lexicon) -> Result<(Self, Vec<String>)> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut dict = ParallelDictionary::new();
        let mut warnings = Vec::new();
        for (idx, line) in text.lines().enumerate() {
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() != 3 {
                return Err(Error::parse(path, idx + 1, "expected `src<TAB>dst<TAB>rule|manual`"));
            }
            let (src, dst) = (fields[0].trim(), fields[1].trim());
            match fields[2].trim() {
                "rule" => {
                    if lt.contains(src) && ct.contains(dst) {
                        dict.insert(DialectLabel::Lt, src, dst, ParallelSource::Rule);
                    } else {
                        warnings.push(format!("line {}: rule entry {src} -> {dst} not in lexicons", idx + 1));
                    }
                }
                "manual" => {
                    if !dict.insert_manual(src, dst, lt, ct) {
                        warnings.push(format!("line {}: manual entry {src} -> {dst} not in lexicons", idx + 1));
                    }
                }
                other => return Err(Error::parse(path, idx + 1, format!("unknown source `{other}`"))),
            }
        }
        Ok((dict, warnings))
    }
}

/// Builds the LT-to-CT direction by rewriting each LT pronunciation with the
/// rule table and looking the result up in the CT lexicon; manual pairs then
/// override rule output. The CT-to-LT direction comes from the manual table
/// only. Overrides that reference words missing from the lexicons produce a
/// warning rather than an error.
pub fn build_parallel_dictionary(
    rules: &[RewriteRule],
    manual: &[(String, String)],
    lt: &Lexicon,
    ct: &Lexicon,
) -> (ParallelDictionary, Vec<String>) {
    let mut dict = ParallelDictionary::new();
    let mut warnings = Vec::new();
    if !rules.is_empty() {
        for (word, prons) in lt.entries() {
            let target = prons.iter().find_map(|p| {
                let rewritten = apply_rules(rules, p);
                ct.words_with_pronunciation(&rewritten).first().map(|w| w.to_string())
            });
            if let Some(t) = target {
                dict.insert(DialectLabel::Lt, word, &t, ParallelSource::Rule);
            }
        }
    }
    for (src, dst) in manual {
        if !dict.insert_manual(src, dst, lt, ct) {
            warnings.push(format!("override {src} -> {dst} does not match the lexicons; ignored"));
        }
    }
    (dict, warnings)
}
