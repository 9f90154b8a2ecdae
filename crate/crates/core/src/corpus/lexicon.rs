use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DialectLabel, Membership};
use crate::error::{Error, Result};

pub type Pronunciation = Vec<String>;

/// Ordered phone set with the vowel, nasal-consonant and nasalized-vowel
/// classes needed by the nasalization relabeling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PhoneInventory {
    phones: Vec<String>,
    vowels: BTreeSet<String>,
    nasal_consonants: BTreeSet<String>,
    nasalized_class: Vec<String>,
    /// Phones absent from this map belong to both dialects.
    #[serde(default)]
    membership: BTreeMap<String, Membership>,
}

impl PhoneInventory {
    pub fn new(
        phones: Vec<String>,
        vowels: BTreeSet<String>,
        nasal_consonants: BTreeSet<String>,
        nasalized_class: Vec<String>,
        membership: BTreeMap<String, Membership>,
    ) -> Result<Self> {
        let inv = PhoneInventory {
            phones,
            vowels,
            nasal_consonants,
            nasalized_class,
            membership,
        };
        inv.validate()?;
        Ok(inv)
    }

    fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for p in &self.phones {
            if p.is_empty() || p.contains(char::is_whitespace) {
                return Err(Error::InvalidConfig(format!("invalid phone symbol `{p}`")));
            }
            if !seen.insert(p.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate phone `{p}`")));
            }
        }
        let classes = self
            .vowels
            .iter()
            .chain(&self.nasal_consonants)
            .chain(&self.nasalized_class)
            .chain(self.membership.keys());
        for p in classes {
            if !seen.contains(p.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "class member `{p}` is not in the phone list"
                )));
            }
        }
        for p in &self.nasalized_class {
            if !self.membership(p).includes(DialectLabel::Ct) {
                return Err(Error::InvalidConfig(format!(
                    "nasalized phone `{p}` must belong to CT"
                )));
            }
        }
        Ok(())
    }

    /// A plausible 39 + 1 phone set with one grouped nasalized-vowel symbol.
    /// It is a working default for synthetic experiments, not a phonological
    /// claim about any particular language.
    pub fn default_tamil_like() -> Self {
        let vowels = ["a", "aa", "i", "ii", "u", "uu", "e", "ee", "ai", "o", "oo", "au"];
        let consonants = [
            "k", "ng", "c", "nj", "tt", "nn", "t", "n", "p", "m", "y", "r", "l", "v", "zh", "ll",
            "rx", "nx", "j", "s", "sh", "h", "w", "d", "b", "g", "dd",
        ];
        let nasals = ["ng", "nj", "nn", "n", "m", "nx"];
        let mut phones: Vec<String> = vowels.iter().chain(&consonants).map(|s| s.to_string()).collect();
        phones.push("f".into());
        phones.push("A~".into());
        let membership = [("f", Membership::Ct), ("A~", Membership::Ct)]
            .into_iter()
            .map(|(p, m)| (p.to_string(), m))
            .collect();
        PhoneInventory::new(
            phones,
            vowels.iter().map(|s| s.to_string()).collect(),
            nasals.iter().map(|s| s.to_string()).collect(),
            vec!["A~".into()],
            membership,
        )
        .expect("default inventory is valid")
    }

    pub fn phones(&self) -> &[String] {
        &self.phones
    }

    pub fn len(&self) -> usize {
        self.phones.len()
    }

    pub fn is_empty(&self) -> bool {
        self.phones.is_empty()
    }

    pub fn contains(&self, phone: &str) -> bool {
        self.phones.iter().any(|p| p == phone)
    }

    pub fn is_vowel(&self, phone: &str) -> bool {
        self.vowels.contains(phone)
    }

    pub fn is_nasal_consonant(&self, phone: &str) -> bool {
        self.nasal_consonants.contains(phone)
    }

    pub fn is_nasalized(&self, phone: &str) -> bool {
        self.nasalized_class.iter().any(|p| p == phone)
    }

    /// The grouped nasalized-vowel symbol, if the inventory defines exactly one.
    pub fn nasalized_symbol(&self) -> Option<&str> {
        match self.nasalized_class.as_slice() {
            [one] => Some(one),
            _ => None,
        }
    }

    pub fn nasalized_class(&self) -> &[String] {
        &self.nasalized_class
    }

    pub fn vowels(&self) -> impl Iterator<Item = &str> {
        self.vowels.iter().map(String::as_str)
    }

    pub fn nasal_consonants(&self) -> impl Iterator<Item = &str> {
        self.nasal_consonants.iter().map(String::as_str)
    }

    pub fn membership(&self, phone: &str) -> Membership {
        self.membership.get(phone).copied().unwrap_or(Membership::Both)
    }

    /// The phones a recognizer for `dialect` models. The nasalized class is
    /// only included on request, since it only exists after relabeling.
    pub fn subset(&self, dialect: Option<DialectLabel>, include_nasalized: bool) -> PhoneInventory {
        let keep = |p: &String| {
            (include_nasalized || !self.is_nasalized(p))
                && dialect.is_none_or(|d| self.membership(p).includes(d))
        };
        let phones: Vec<String> = self.phones.iter().filter(|p| keep(p)).cloned().collect();
        let set: BTreeSet<&String> = phones.iter().collect();
        PhoneInventory {
            vowels: self.vowels.iter().filter(|p| set.contains(p)).cloned().collect(),
            nasal_consonants: self
                .nasal_consonants
                .iter()
                .filter(|p| set.contains(p))
                .cloned()
                .collect(),
            nasalized_class: self
                .nasalized_class
                .iter()
                .filter(|p| set.contains(p))
                .cloned()
                .collect(),
            membership: self
                .membership
                .iter()
                .filter(|(p, _)| set.contains(p))
                .map(|(p, m)| (p.clone(), *m))
                .collect(),
            phones,
        }
    }

    pub fn from_toml(text: &str) -> Result<Self> {
        let inv: PhoneInventory =
            toml::from_str(text).map_err(|e| Error::InvalidConfig(format!("inventory: {e}")))?;
        inv.validate()?;
        Ok(inv)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("inventory serializes")
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum LexiconTag {
    #[serde(rename = "LT")]
    Lt,
    #[serde(rename = "CT")]
    Ct,
    #[serde(rename = "UNIFIED")]
    Unified,
}

impl From<DialectLabel> for LexiconTag {
    fn from(d: DialectLabel) -> Self {
        match d {
            DialectLabel::Lt => LexiconTag::Lt,
            DialectLabel::Ct => LexiconTag::Ct,
        }
    }
}

/// Word to pronunciation(s) mapping. Unified lexicons also record which
/// dialect lexicon(s) each word came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Lexicon {
    tag: LexiconTag,
    entries: BTreeMap<String, Vec<Pronunciation>>,
    membership: BTreeMap<String, Membership>,
}

impl Lexicon {
    pub fn new(tag: LexiconTag) -> Self {
        Lexicon {
            tag,
            entries: BTreeMap::new(),
            membership: BTreeMap::new(),
        }
    }

    pub fn tag(&self) -> LexiconTag {
        self.tag
    }

    /// Adds a pronunciation; duplicates of an existing pronunciation are ignored.
    pub fn insert(&mut self, word: &str, pron: Pronunciation) -> Result<()> {
        if pron.is_empty() {
            return Err(Error::Format(format!("empty pronunciation for `{word}`")));
        }
        let prons = self.entries.entry(word.to_string()).or_default();
        if !prons.contains(&pron) {
            prons.push(pron);
        }
        Ok(())
    }

    pub fn set_membership(&mut self, word: &str, membership: Membership) {
        self.membership.insert(word.to_string(), membership);
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn contains(&self, word: &str) -> bool {
        self.entries.contains_key(word)
    }

    pub fn words(&self) -> impl Iterator<Item = &str> {
        self.entries.keys().map(String::as_str)
    }

    pub fn entries(&self) -> impl Iterator<Item = (&str, &[Pronunciation])> {
        self.entries.iter().map(|(w, p)| (w.as_str(), p.as_slice()))
    }

    pub fn pronunciations(&self, word: &str) -> Option<&[Pronunciation]> {
        self.entries.get(word).map(Vec::as_slice)
    }

    /// Dialect membership of a word in this lexicon.
    pub fn membership(&self, word: &str) -> Option<Membership> {
        if !self.contains(word) {
            return None;
        }
        match self.tag {
            LexiconTag::Lt => Some(Membership::Lt),
            LexiconTag::Ct => Some(Membership::Ct),
            LexiconTag::Unified => self.membership.get(word).copied(),
        }
    }

    /// Words having exactly this pronunciation, in lexicographic order.
    pub fn words_with_pronunciation(&self, pron: &[String]) -> Vec<&str> {
        self.entries
            .iter()
            .filter(|(_, ps)| ps.iter().any(|p| p.as_slice() == pron))
            .map(|(w, _)| w.as_str())
            .collect()
    }

    pub fn validate(&self, inventory: &PhoneInventory) -> Result<()> {
        for (word, prons) in &self.entries {
            for pron in prons {
                if pron.is_empty() {
                    return Err(Error::Format(format!("empty pronunciation for `{word}`")));
                }
                if let Some(bad) = pron.iter().find(|p| !inventory.contains(p)) {
                    return Err(Error::PhoneNotInInventory {
                        phone: bad.clone(),
                        word: word.clone(),
                    });
                }
            }
        }
        Ok(())
    }

    /// Parses `word<TAB>phone phone ...` lines; a repeated word adds an
    /// alternative pronunciation. Unified lexicons may carry a third
    /// `LT|CT|BOTH` column.
    pub fn parse(text: &str, tag: LexiconTag, origin: &Path) -> Result<Self> {
        let mut lex = Lexicon::new(tag);
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim_end();
            if line.trim().is_empty() || line.starts_with('#') {
                continue;
            }
            let fields: Vec<&str> = line.split('\t').collect();
            if fields.len() < 2 || fields.len() > 3 || fields[0].trim().is_empty() {
                return Err(Error::parse(origin, idx + 1, "expected `word<TAB>phones`"));
            }
            let word = fields[0].trim();
            let pron: Pronunciation = fields[1].split_whitespace().map(str::to_string).collect();
            if pron.is_empty() {
                return Err(Error::parse(origin, idx + 1, format!("empty pronunciation for `{word}`")));
            }
            lex.insert(word, pron)?;
            if let Some(m) = fields.get(2) {
                let m = match m.trim() {
                    "LT" => Membership::Lt,
                    "CT" => Membership::Ct,
                    "BOTH" => Membership::Both,
                    other => {
                        return Err(Error::parse(origin, idx + 1, format!("bad membership `{other}`")))
                    }
                };
                lex.set_membership(word, m);
            }
        }
        Ok(lex)
    }

    pub fn load(path: impl AsRef<Path>, tag: LexiconTag) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, tag, path)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        for (word, prons) in &self.entries {
            for pron in prons {
                out.push_str(word);
                out.push('\t');
                out.push_str(&pron.join(" "));
                if self.tag == LexiconTag::Unified {
                    if let Some(m) = self.membership.get(word) {
                        out.push('\t');
                        out.push_str(&m.to_string());
                    }
                }
                out.push('\n');
            }
        }
        out
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, self.to_text()).map_err(|e| Error::io(path, e))
    }
}

/// Union of the LT and CT lexicons. Words present in both keep membership
/// `BOTH`; their pronunciation lists are concatenated without duplicates.
pub fn merge_lexicons(lt: &Lexicon, ct: &Lexicon, inventory: &PhoneInventory) -> Result<Lexicon> {
    lt.validate(inventory)?;
    ct.validate(inventory)?;
    let mut unified = Lexicon::new(LexiconTag::Unified);
    for (source, membership) in [(lt, Membership::Lt), (ct, Membership::Ct)] {
        for (word, prons) in source.entries() {
            for p in prons {
                unified.insert(word, p.clone())?;
            }
            let m = unified
                .membership
                .get(word)
                .map_or(membership, |m| m.union(membership));
            unified.set_membership(word, m);
        }
    }
    Ok(unified)
}
