//! Risk-factor lexicon: loading, normalization and exact-match annotation.

use std::collections::{BTreeMap, BTreeSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use unicode_normalization::UnicodeNormalization;

/// Stand-in English lexicon shipped with the crate.
pub const BUNDLED_LEXICON: &str = include_str!("../data/lexicon.json");

#[derive(Debug, thiserror::Error)]
pub enum LexiconError {
    #[error("reading lexicon {path}: {source}")]
    Io {
        path: String,
        source: std::io::Error,
    },
    #[error("parsing lexicon: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("duplicate category id {0}")]
    DuplicateCategory(String),
    #[error("category {0} has no phrases")]
    EmptyCategory(String),
    #[error("category {0} contains an empty phrase")]
    EmptyPhrase(String),
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LexiconCategory {
    pub id: String,
    pub name: String,
    pub source_framework: String,
    pub phrases: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
struct LexiconFile {
    version: String,
    categories: Vec<LexiconCategory>,
}

/// One exact phrase occurrence. `start..end` are character offsets into the
/// normalized text (see [`normalize`]).
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct LexiconMatch {
    pub start: usize,
    pub end: usize,
    pub category_id: String,
    pub matched_phrase: String,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Lexicon {
    version: String,
    categories: Vec<LexiconCategory>,
    warnings: Vec<String>,
}

/// NFC plus whitespace collapsing. No case folding.
pub fn normalize(text: &str) -> String {
    let nfc: String = text.nfc().collect();
    nfc.split_whitespace().collect::<Vec<_>>().join(" ")
}

impl Lexicon {
    pub fn load(path: &Path) -> Result<Self, LexiconError> {
        let raw = std::fs::read_to_string(path).map_err(|source| LexiconError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::from_json(&raw)
    }

    pub fn bundled() -> Self {
        Self::from_json(BUNDLED_LEXICON).expect("bundled lexicon is valid")
    }

    pub fn from_json(raw: &str) -> Result<Self, LexiconError> {
        let file: LexiconFile = serde_json::from_str(raw)?;
        Self::new(file.version, file.categories)
    }

    pub fn new(version: String, categories: Vec<LexiconCategory>) -> Result<Self, LexiconError> {
        let mut ids = BTreeSet::new();
        let mut owner: BTreeMap<String, String> = BTreeMap::new();
        let mut warnings = Vec::new();
        let mut cleaned = Vec::with_capacity(categories.len());
        for mut cat in categories {
            if !ids.insert(cat.id.clone()) {
                return Err(LexiconError::DuplicateCategory(cat.id));
            }
            if cat.phrases.is_empty() {
                return Err(LexiconError::EmptyCategory(cat.id));
            }
            let mut seen = BTreeSet::new();
            let mut phrases = Vec::with_capacity(cat.phrases.len());
            for p in &cat.phrases {
                let p = normalize(p);
                if p.is_empty() {
                    return Err(LexiconError::EmptyPhrase(cat.id));
                }
                if seen.insert(p.clone()) {
                    phrases.push(p);
                }
            }
            for p in &phrases {
                if let Some(other) = owner.get(p) {
                    warnings.push(format!(
                        "phrase \"{p}\" appears in both {other} and {}",
                        cat.id
                    ));
                } else {
                    owner.insert(p.clone(), cat.id.clone());
                }
            }
            cat.phrases = phrases;
            cleaned.push(cat);
        }
        Ok(Self {
            version,
            categories: cleaned,
            warnings,
        })
    }

    pub fn version(&self) -> &str {
        &self.version
    }

    pub fn categories(&self) -> &[LexiconCategory] {
        &self.categories
    }

    pub fn len(&self) -> usize {
        self.categories.len()
    }

    pub fn is_empty(&self) -> bool {
        self.categories.is_empty()
    }

    /// Duplicate-phrase warnings collected at load time.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub fn index_of(&self, id: &str) -> Option<usize> {
        self.categories.iter().position(|c| c.id == id)
    }

    pub fn category(&self, id: &str) -> Option<&LexiconCategory> {
        self.categories.iter().find(|c| c.id == id)
    }

    pub fn to_json(&self) -> String {
        let file = LexiconFile {
            version: self.version.clone(),
            categories: self.categories.clone(),
        };
        serde_json::to_string_pretty(&file).expect("lexicon serializes")
    }

    /// Every occurrence of every phrase in the normalized text, overlapping
    /// ones included, ordered by `(start, category_id, end)`.
    pub fn annotate(&self, text: &str) -> Vec<LexiconMatch> {
        let norm = normalize(text);
        if norm.is_empty() {
            return Vec::new();
        }
        // byte offset -> char offset
        let mut char_at = vec![0usize; norm.len() + 1];
        let mut count = 0;
        for (b, _) in norm.char_indices() {
            char_at[b] = count;
            count += 1;
        }
        char_at[norm.len()] = count;

        let mut out = Vec::new();
        for cat in &self.categories {
            for phrase in &cat.phrases {
                let mut from = 0;
                while let Some(pos) = norm[from..].find(phrase.as_str()) {
                    let b = from + pos;
                    out.push(LexiconMatch {
                        start: char_at[b],
                        end: char_at[b + phrase.len()],
                        category_id: cat.id.clone(),
                        matched_phrase: phrase.clone(),
                    });
                    // advance one character to allow overlapping matches
                    from = b + norm[b..].chars().next().map_or(1, char::len_utf8);
                }
            }
        }
        out.sort_by(|a, b| {
            (a.start, &a.category_id, a.end, &a.matched_phrase).cmp(&(
                b.start,
                &b.category_id,
                b.end,
                &b.matched_phrase,
            ))
        });
        out
    }

    /// Distinct category ids matched in `text`, in lexicon order.
    pub fn matched_categories(&self, text: &str) -> Vec<usize> {
        let matches = self.annotate(text);
        let mut ids: Vec<usize> = matches
            .iter()
            .filter_map(|m| self.index_of(&m.category_id))
            .collect();
        ids.sort_unstable();
        ids.dedup();
        ids
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cat(id: &str, phrases: &[&str]) -> LexiconCategory {
        LexiconCategory {
            id: id.into(),
            name: id.into(),
            source_framework: "test".into(),
            phrases: phrases.iter().map(|s| s.to_string()).collect(),
        }
    }

    #[test]
    fn bundled_lexicon_has_twenty_categories() {
        let lex = Lexicon::bundled();
        assert_eq!(lex.len(), 20);
        assert!(lex.categories().iter().all(|c| c.phrases.len() >= 5));
        assert!(lex.warnings().is_empty());
    }

    #[test]
    fn hopelessness_phrase_matches_once() {
        let lex = Lexicon::bundled();
        let m = lex.annotate("there is no future for me");
        assert_eq!(m.len(), 1);
        assert_eq!(m[0].category_id, "hopelessness");
        assert_eq!((m[0].start, m[0].end), (0, 25));
    }

    #[test]
    fn empty_text_has_no_matches() {
        assert!(Lexicon::bundled().annotate("").is_empty());
    }

    #[test]
    fn duplicate_id_is_an_error_naming_it() {
        let err = Lexicon::new("1".into(), vec![cat("a", &["x"]), cat("a", &["y"])]).unwrap_err();
        assert!(err.to_string().contains('a'));
        assert!(matches!(err, LexiconError::DuplicateCategory(id) if id == "a"));
    }

    #[test]
    fn empty_category_and_phrase_are_errors() {
        assert!(matches!(
            Lexicon::new("1".into(), vec![cat("a", &[])]),
            Err(LexiconError::EmptyCategory(_))
        ));
        assert!(matches!(
            Lexicon::new("1".into(), vec![cat("a", &["  "])]),
            Err(LexiconError::EmptyPhrase(_))
        ));
    }

    #[test]
    fn shared_phrase_is_a_warning() {
        let lex = Lexicon::new("1".into(), vec![cat("a", &["same"]), cat("b", &["same"])]).unwrap();
        assert_eq!(lex.warnings().len(), 1);
    }

    #[test]
    fn overlapping_phrases_from_different_categories_are_both_reported() {
        let lex = Lexicon::new(
            "1".into(),
            vec![cat("alone", &["so alone"]), cat("feel", &["i feel so"])],
        )
        .unwrap();
        let m = lex.annotate("i feel so alone");
        assert_eq!(m.len(), 2);
        assert_eq!(m[0].category_id, "feel");
        assert_eq!(m[1].category_id, "alone");
    }

    #[test]
    fn matching_is_case_sensitive_but_whitespace_insensitive() {
        let lex = Lexicon::bundled();
        assert!(lex.annotate("I Feel So Alone").is_empty());
        let m = lex.annotate("  i   feel\tso alone ");
        assert_eq!(m.len(), 1);
        assert_eq!((m[0].start, m[0].end), (0, 15));
    }

    #[test]
    fn spans_are_character_offsets() {
        let lex = Lexicon::new("1".into(), vec![cat("c", &["ñandú"])]).unwrap();
        let text = "el ñandú corre";
        let m = lex.annotate(text);
        let chars: Vec<char> = normalize(text).chars().collect();
        let s: String = chars[m[0].start..m[0].end].iter().collect();
        assert_eq!(s, "ñandú");
    }
}
