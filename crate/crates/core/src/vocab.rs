//! Language-tagged vocabulary.

use std::collections::{BTreeSet, HashMap};
use std::fmt;
use std::path::Path;

pub const PAD: usize = 0;
pub const SOS: usize = 1;
pub const EOS: usize = 2;
pub const UNK: usize = 3;
pub const NUM_RESERVED: usize = 4;

const RESERVED: [&str; NUM_RESERVED] = ["<pad>", "<sos>", "<eos>", "<unk>"];

/// Language membership of a modeling unit.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum LanguageTag {
    /// Character-like units, scored per unit.
    LangA,
    /// Word-piece-like units, scored per word.
    LangB,
    /// pad, sos, eos, unk.
    Special,
}

impl fmt::Display for LanguageTag {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            LanguageTag::LangA => "A",
            LanguageTag::LangB => "B",
            LanguageTag::Special => "S",
        })
    }
}

#[derive(Debug, thiserror::Error)]
pub enum VocabError {
    #[error("surface {0:?} occurs in both languages")]
    Ambiguous(String),
    #[error("corpus {0} is empty")]
    EmptyCorpus(&'static str),
    #[error("unknown token id {0}")]
    UnknownId(usize),
    #[error("vocabulary file line {line}: {msg}")]
    Format { line: usize, msg: String },
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocab {
    surfaces: Vec<String>,
    tags: Vec<LanguageTag>,
    index: HashMap<String, usize>,
}

impl Vocab {
    /// Builds a vocabulary from pre-segmented lines of the two languages.
    ///
    /// Keeps every token seen at least `min_count` times. Ids follow the reserved
    /// ids, LangA tokens first, each language sorted by surface.
    pub fn build<A, B>(corpus_a: &[A], corpus_b: &[B], min_count: usize) -> Result<Self, VocabError>
    where
        A: AsRef<str>,
        B: AsRef<str>,
    {
        fn count<'a>(lines: impl Iterator<Item = &'a str>) -> HashMap<&'a str, usize> {
            let mut counts: HashMap<&str, usize> = HashMap::new();
            for tok in lines.flat_map(str::split_whitespace) {
                *counts.entry(tok).or_default() += 1;
            }
            counts
        }
        let ca = count(corpus_a.iter().map(AsRef::as_ref));
        let cb = count(corpus_b.iter().map(AsRef::as_ref));
        if ca.is_empty() {
            return Err(VocabError::EmptyCorpus("A"));
        }
        if cb.is_empty() {
            return Err(VocabError::EmptyCorpus("B"));
        }
        if let Some(s) = ca.keys().filter(|s| cb.contains_key(*s)).min() {
            return Err(VocabError::Ambiguous(s.to_string()));
        }
        let keep = |c: &HashMap<&str, usize>| -> BTreeSet<String> {
            c.iter().filter(|(_, &n)| n >= min_count).map(|(s, _)| s.to_string()).collect()
        };
        let entries = keep(&ca)
            .into_iter()
            .map(|s| (s, LanguageTag::LangA))
            .chain(keep(&cb).into_iter().map(|s| (s, LanguageTag::LangB)));
        Self::from_entries(entries)
    }

    /// Rule for "strictly more than `n` occurrences".
    pub fn more_than(n: usize) -> usize {
        n + 1
    }

    fn from_entries(entries: impl IntoIterator<Item = (String, LanguageTag)>) -> Result<Self, VocabError> {
        let mut v = Vocab {
            surfaces: RESERVED.iter().map(|s| s.to_string()).collect(),
            tags: vec![LanguageTag::Special; NUM_RESERVED],
            index: RESERVED.iter().enumerate().map(|(i, s)| (s.to_string(), i)).collect(),
        };
        for (surface, tag) in entries {
            if v.index.contains_key(&surface) {
                return Err(VocabError::Ambiguous(surface));
            }
            v.index.insert(surface.clone(), v.surfaces.len());
            v.surfaces.push(surface);
            v.tags.push(tag);
        }
        Ok(v)
    }

    pub fn len(&self) -> usize {
        self.surfaces.len()
    }

    pub fn is_empty(&self) -> bool {
        self.surfaces.is_empty()
    }

    pub fn id(&self, surface: &str) -> Option<usize> {
        self.index.get(surface).copied()
    }

    pub fn surface(&self, id: usize) -> Result<&str, VocabError> {
        self.surfaces.get(id).map(String::as_str).ok_or(VocabError::UnknownId(id))
    }

    pub fn token_language(&self, id: usize) -> Result<LanguageTag, VocabError> {
        self.tags.get(id).copied().ok_or(VocabError::UnknownId(id))
    }

    pub fn languages(&self, ids: &[usize]) -> Result<Vec<LanguageTag>, VocabError> {
        ids.iter().map(|&id| self.token_language(id)).collect()
    }

    /// Ids of all tokens of a language.
    pub fn ids_of(&self, tag: LanguageTag) -> Vec<usize> {
        (0..self.len()).filter(|&i| self.tags[i] == tag).collect()
    }

    /// `sos`, the tokens of `line` (unknown surfaces as `unk`), `eos`.
    pub fn encode(&self, line: &str) -> Vec<usize> {
        let mut ids = vec![SOS];
        ids.extend(line.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)));
        ids.push(EOS);
        ids
    }

    /// Tokens of `line` without boundary markers.
    pub fn encode_tokens(&self, line: &str) -> Vec<usize> {
        line.split_whitespace().map(|t| self.id(t).unwrap_or(UNK)).collect()
    }

    /// Space-joined surfaces, dropping pad/sos/eos.
    pub fn decode(&self, ids: &[usize]) -> Result<String, VocabError> {
        let mut out = Vec::with_capacity(ids.len());
        for &id in ids {
            if matches!(id, PAD | SOS | EOS) {
                continue;
            }
            out.push(self.surface(id)?);
        }
        Ok(out.join(" "))
    }

    /// `surface<TAB>A|B`, one line per non-reserved id in id order.
    pub fn to_file_string(&self) -> String {
        let mut s = String::new();
        for (surface, tag) in self.surfaces.iter().zip(&self.tags).skip(NUM_RESERVED) {
            s.push_str(surface);
            s.push('\t');
            s.push_str(&tag.to_string());
            s.push('\n');
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, VocabError> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let (surface, tag) = line.split_once('\t').ok_or_else(|| VocabError::Format {
                line: n + 1,
                msg: "expected surface<TAB>tag".into(),
            })?;
            let tag = match tag {
                "A" => LanguageTag::LangA,
                "B" => LanguageTag::LangB,
                other => {
                    return Err(VocabError::Format {
                        line: n + 1,
                        msg: format!("unknown tag {other:?}"),
                    })
                }
            };
            if surface.is_empty() || surface.contains(char::is_whitespace) {
                return Err(VocabError::Format {
                    line: n + 1,
                    msg: format!("bad surface {surface:?}"),
                });
            }
            entries.push((surface.to_string(), tag));
        }
        Self::from_entries(entries)
    }

    pub fn save(&self, path: &Path) -> Result<(), VocabError> {
        std::fs::write(path, self.to_file_string()).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: &Path) -> Result<Self, VocabError> {
        let text = std::fs::read_to_string(path).map_err(|source| VocabError::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn tiny() -> Vocab {
        Vocab::build(&["a1 a2"], &["bb_x"], 1).unwrap()
    }

    #[test]
    fn build_assigns_ids_after_reserved() {
        let v = tiny();
        assert_eq!(v.len(), 7);
        assert_eq!(v.id("a1"), Some(4));
        assert_eq!(v.id("a2"), Some(5));
        assert_eq!(v.id("bb_x"), Some(6));
    }

    #[test]
    fn count_threshold_excludes_exactly_ten() {
        let mut lines = vec!["a1"; 10];
        lines.extend(vec!["a2"; 11]);
        let v = Vocab::build(&lines, &vec!["bb"; 11], Vocab::more_than(10)).unwrap();
        assert_eq!(v.id("a1"), None);
        assert!(v.id("a2").is_some());
        assert!(v.id("bb").is_some());
    }

    #[test]
    fn empty_corpus_is_an_error() {
        assert!(matches!(Vocab::build(&["a"], &[""; 0], 1), Err(VocabError::EmptyCorpus("B"))));
        assert!(matches!(Vocab::build(&["a"], &["  "], 1), Err(VocabError::EmptyCorpus("B"))));
    }

    #[test]
    fn overlapping_surface_is_ambiguous() {
        assert!(matches!(Vocab::build(&["x y"], &["y z"], 1), Err(VocabError::Ambiguous(s)) if s == "y"));
    }

    #[test]
    fn token_language_examples() {
        let v = tiny();
        assert_eq!(v.token_language(PAD).unwrap(), LanguageTag::Special);
        assert_eq!(v.token_language(4).unwrap(), LanguageTag::LangA);
        assert_eq!(v.token_language(6).unwrap(), LanguageTag::LangB);
        assert!(matches!(v.token_language(7), Err(VocabError::UnknownId(7))));
    }

    #[test]
    fn encode_examples() {
        let v = tiny();
        assert_eq!(v.encode(""), vec![SOS, EOS]);
        assert_eq!(v.encode("a1 bb_x"), vec![SOS, 4, 6, EOS]);
        assert_eq!(v.encode("zzz"), vec![SOS, UNK, EOS]);
    }

    #[test]
    fn file_round_trip() {
        let v = Vocab::build(&["k a", "a q"], &["tor ma"], 1).unwrap();
        let text = v.to_file_string();
        assert_eq!(text, "a\tA\nk\tA\nq\tA\nma\tB\ntor\tB\n");
        assert_eq!(Vocab::parse(&text).unwrap(), v);
        assert!(Vocab::parse("a\tC\n").is_err());
        assert!(Vocab::parse("a\n").is_err());
    }

    #[test]
    fn languages_partition_non_reserved_ids() {
        let v = Vocab::build(&["a1 a2 a3"], &["b1 b2"], 1).unwrap();
        let mut all = v.ids_of(LanguageTag::LangA);
        all.extend(v.ids_of(LanguageTag::LangB));
        all.sort();
        assert_eq!(all, (NUM_RESERVED..v.len()).collect::<Vec<_>>());
        assert_eq!(v.ids_of(LanguageTag::Special), vec![0, 1, 2, 3]);
    }

    proptest! {
        #[test]
        fn encode_decode_round_trip(idx in proptest::collection::vec(0usize..6, 0..12)) {
            let v = Vocab::build(&["a1 a2 a3"], &["bx by bz"], 1).unwrap();
            let names = ["a1", "a2", "a3", "bx", "by", "bz"];
            let line = idx.iter().map(|&i| names[i]).collect::<Vec<_>>().join(" ");
            prop_assert_eq!(v.decode(&v.encode(&line)).unwrap(), line);
        }
    }
}
