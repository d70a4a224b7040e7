//! Mixed error rate: edit distance over LangA units (character-like) and LangB
//! units (word-like) in one alignment, with per-language breakdowns.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt::Write as _;

use crate::vocab::{LanguageTag, Vocab, VocabError, EOS, PAD, SOS, UNK};

#[derive(Debug, thiserror::Error)]
pub enum MetricsError {
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error("hypotheses missing for {0:?}")]
    Missing(Vec<String>),
    #[error("hypotheses without reference: {0:?}")]
    Extra(Vec<String>),
    #[error("duplicate utterance id {0:?}")]
    Duplicate(String),
}

/// Scoring bucket of a unit. `Other` holds `unk`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum UnitLang {
    A,
    B,
    Other,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Unit {
    pub id: usize,
    pub lang: UnitLang,
}

impl Unit {
    /// `unk` never matches anything, itself included.
    pub fn matches(&self, other: &Unit) -> bool {
        self.id == other.id && self.id != UNK
    }
}

/// Scoring units of a decoded token sequence; pad/sos/eos are dropped.
pub fn to_units(tokens: &[usize], vocab: &Vocab) -> Result<Vec<Unit>, MetricsError> {
    let mut out = Vec::with_capacity(tokens.len());
    for &id in tokens {
        if matches!(id, PAD | SOS | EOS) {
            continue;
        }
        let lang = match vocab.token_language(id)? {
            LanguageTag::LangA => UnitLang::A,
            LanguageTag::LangB => UnitLang::B,
            LanguageTag::Special => UnitLang::Other,
        };
        out.push(Unit { id, lang });
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum AlignOp {
    Match { r: usize, h: usize },
    Sub { r: usize, h: usize },
    Ins { h: usize },
    Del { r: usize },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub ops: Vec<AlignOp>,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl Alignment {
    pub fn distance(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }
}

/// Minimum-cost alignment with unit costs. Among optimal alignments the
/// backtrace prefers substitution, then insertion, then deletion.
pub fn edit_align(r: &[Unit], h: &[Unit]) -> Alignment {
    let (n, m) = (r.len(), h.len());
    let w = m + 1;
    let mut d = vec![0usize; (n + 1) * w];
    for j in 0..=m {
        d[j] = j;
    }
    for i in 1..=n {
        d[i * w] = i;
        for j in 1..=m {
            let diag = d[(i - 1) * w + j - 1] + usize::from(!r[i - 1].matches(&h[j - 1]));
            d[i * w + j] = diag.min(d[i * w + j - 1] + 1).min(d[(i - 1) * w + j] + 1);
        }
    }
    let mut ops = Vec::with_capacity(n.max(m));
    let (mut i, mut j) = (n, m);
    let mut a = Alignment {
        ops: Vec::new(),
        substitutions: 0,
        insertions: 0,
        deletions: 0,
    };
    while i > 0 || j > 0 {
        let cur = d[i * w + j];
        if i > 0 && j > 0 {
            let same = r[i - 1].matches(&h[j - 1]);
            if d[(i - 1) * w + j - 1] + usize::from(!same) == cur {
                if same {
                    ops.push(AlignOp::Match { r: i - 1, h: j - 1 });
                } else {
                    ops.push(AlignOp::Sub { r: i - 1, h: j - 1 });
                    a.substitutions += 1;
                }
                i -= 1;
                j -= 1;
                continue;
            }
        }
        if j > 0 && d[i * w + j - 1] + 1 == cur {
            ops.push(AlignOp::Ins { h: j - 1 });
            a.insertions += 1;
            j -= 1;
        } else {
            ops.push(AlignOp::Del { r: i - 1 });
            a.deletions += 1;
            i -= 1;
        }
    }
    ops.reverse();
    a.ops = ops;
    a
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct Counts {
    pub reference: usize,
    pub substitutions: usize,
    pub insertions: usize,
    pub deletions: usize,
}

impl Counts {
    pub fn errors(&self) -> usize {
        self.substitutions + self.insertions + self.deletions
    }

    fn add(&mut self, o: &Counts) {
        self.reference += o.reference;
        self.substitutions += o.substitutions;
        self.insertions += o.insertions;
        self.deletions += o.deletions;
    }

    /// `errors / reference`, absent with an empty reference.
    pub fn rate(&self) -> Option<f64> {
        (self.reference > 0).then(|| self.errors() as f64 / self.reference as f64)
    }
}

/// Pooled counts of a scored corpus.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ScoreReport {
    pub total: Counts,
    pub lang_a: Counts,
    pub lang_b: Counts,
    pub other: Counts,
    pub utterances: usize,
}

impl ScoreReport {
    pub fn mer(&self) -> Option<f64> {
        self.total.rate()
    }

    pub fn cer_a(&self) -> Option<f64> {
        self.lang_a.rate()
    }

    pub fn wer_b(&self) -> Option<f64> {
        self.lang_b.rate()
    }

    /// Adds one aligned utterance. Substitutions and deletions count against the
    /// reference unit's language, insertions against the inserted unit's.
    pub fn add_utterance(&mut self, r: &[Unit], h: &[Unit]) {
        let a = edit_align(r, h);
        let mut u = ScoreReport::default();
        for unit in r {
            u.bucket(unit.lang).reference += 1;
        }
        for op in &a.ops {
            match *op {
                AlignOp::Match { .. } => {}
                AlignOp::Sub { r: i, .. } => u.bucket(r[i].lang).substitutions += 1,
                AlignOp::Del { r: i } => u.bucket(r[i].lang).deletions += 1,
                AlignOp::Ins { h: j } => u.bucket(h[j].lang).insertions += 1,
            }
        }
        u.total = Counts {
            reference: r.len(),
            substitutions: a.substitutions,
            insertions: a.insertions,
            deletions: a.deletions,
        };
        self.total.add(&u.total);
        self.lang_a.add(&u.lang_a);
        self.lang_b.add(&u.lang_b);
        self.other.add(&u.other);
        self.utterances += 1;
    }

    fn bucket(&mut self, l: UnitLang) -> &mut Counts {
        match l {
            UnitLang::A => &mut self.lang_a,
            UnitLang::B => &mut self.lang_b,
            UnitLang::Other => &mut self.other,
        }
    }

    /// Per-language errors sum to the mixed numerator.
    pub fn accounting_holds(&self) -> bool {
        let parts = [self.lang_a, self.lang_b, self.other];
        parts.iter().map(Counts::errors).sum::<usize>() == self.total.errors()
            && parts.iter().map(|c| c.reference).sum::<usize>() == self.total.reference
    }

    /// `MER=…` style lines; rates are fractions, `absent` on an empty reference.
    pub fn to_kv_lines(&self) -> String {
        let f = |r: Option<f64>| r.map_or("absent".to_string(), |v| format!("{v:.6}"));
        format!(
            "MER={}\nCER_A={}\nWER_B={}\nS={}\nI={}\nD={}\nN={}\nutterances={}\n",
            f(self.mer()),
            f(self.cer_a()),
            f(self.wer_b()),
            self.total.substitutions,
            self.total.insertions,
            self.total.deletions,
            self.total.reference,
            self.utterances
        )
    }

    /// Fixed-width table, rates in percent.
    pub fn to_table(&self) -> String {
        let mut s = format!("{:<8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>10}\n", "units", "ref", "sub", "ins", "del", "err", "rate%");
        for (name, c) in [("A", &self.lang_a), ("B", &self.lang_b), ("other", &self.other), ("mixed", &self.total)] {
            let rate = c.rate().map_or("absent".to_string(), |r| format!("{:.2}", 100.0 * r));
            let _ = writeln!(s, "{:<8}{:>8}{:>8}{:>8}{:>8}{:>8}{:>10}", name, c.reference, c.substitutions, c.insertions, c.deletions, c.errors(), rate);
        }
        s
    }
}

/// Pools every utterance of `refs` against the hypothesis with the same id.
/// Token lists are surfaces; surfaces outside the vocabulary score as `unk`.
pub fn score_corpus(refs: &[(String, String)], hyps: &[(String, String)], vocab: &Vocab) -> Result<ScoreReport, MetricsError> {
    let mut hyp_map = BTreeMap::new();
    for (id, line) in hyps {
        if hyp_map.insert(id.as_str(), line.as_str()).is_some() {
            return Err(MetricsError::Duplicate(id.clone()));
        }
    }
    let mut ref_ids = BTreeSet::new();
    for (id, _) in refs {
        if !ref_ids.insert(id.as_str()) {
            return Err(MetricsError::Duplicate(id.clone()));
        }
    }
    let missing: Vec<String> = ref_ids.iter().filter(|id| !hyp_map.contains_key(*id)).map(|s| s.to_string()).collect();
    if !missing.is_empty() {
        return Err(MetricsError::Missing(missing));
    }
    let extra: Vec<String> = hyp_map.keys().filter(|id| !ref_ids.contains(*id)).map(|s| s.to_string()).collect();
    if !extra.is_empty() {
        return Err(MetricsError::Extra(extra));
    }
    let mut report = ScoreReport::default();
    for (id, line) in refs {
        let r = to_units(&vocab.encode_tokens(line), vocab)?;
        let h = to_units(&vocab.encode_tokens(hyp_map[id.as_str()]), vocab)?;
        report.add_utterance(&r, &h);
    }
    Ok(report)
}
