//! On-disk data sets: corpora, manifests, decode output, and featurized examples.

use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::autodiff::Tensor;
use crate::synth::{featurize, Sentence, SynthConfig, SynthData, SynthError};
use crate::vocab::{Vocab, VocabError};

#[derive(Debug, thiserror::Error)]
pub enum DataError {
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("{file} line {line}: {msg}")]
    Format { file: String, line: usize, msg: String },
    #[error(transparent)]
    Vocab(#[from] VocabError),
    #[error(transparent)]
    Synth(#[from] SynthError),
}

pub fn read_to_string(path: &Path) -> Result<String, DataError> {
    std::fs::read_to_string(path).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

pub fn write(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), DataError> {
    std::fs::write(path, contents).map_err(|source| DataError::Io {
        path: path.display().to_string(),
        source,
    })
}

/// Training data mixture.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Condition {
    Cs,
    CsA,
    CsB,
    All,
}

impl Condition {
    pub const ALL: [Condition; 4] = [Condition::Cs, Condition::CsA, Condition::CsB, Condition::All];

    /// Training manifests (file stems) used by this condition.
    pub fn manifests(self) -> &'static [&'static str] {
        match self {
            Condition::Cs => &["train_cs"],
            Condition::CsA => &["train_cs", "mono_a"],
            Condition::CsB => &["train_cs", "mono_b"],
            Condition::All => &["train_cs", "mono_a", "mono_b"],
        }
    }
}

impl fmt::Display for Condition {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Condition::Cs => "cs",
            Condition::CsA => "cs+a",
            Condition::CsB => "cs+b",
            Condition::All => "all",
        })
    }
}

impl FromStr for Condition {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s.to_ascii_lowercase().as_str() {
            "cs" => Condition::Cs,
            "cs+a" => Condition::CsA,
            "cs+b" => Condition::CsB,
            "all" => Condition::All,
            other => return Err(format!("unknown condition {other:?} (expected cs, cs+a, cs+b, all)")),
        })
    }
}

/// `utt_id<TAB>token line` records.
pub fn parse_manifest(text: &str, file: &str) -> Result<Vec<(String, String)>, DataError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let (id, toks) = line.split_once('\t').ok_or_else(|| DataError::Format {
            file: file.to_string(),
            line: n + 1,
            msg: "expected utt_id<TAB>tokens".into(),
        })?;
        if id.is_empty() || id.contains(char::is_whitespace) {
            return Err(DataError::Format {
                file: file.to_string(),
                line: n + 1,
                msg: format!("bad utterance id {id:?}"),
            });
        }
        out.push((id.to_string(), toks.split_whitespace().collect::<Vec<_>>().join(" ")));
    }
    Ok(out)
}

pub fn load_manifest(path: &Path) -> Result<Vec<(String, String)>, DataError> {
    parse_manifest(&read_to_string(path)?, &path.display().to_string())
}

pub fn format_manifest(sentences: &[Sentence]) -> String {
    sentences.iter().map(|s| format!("{}\t{}\n", s.id, s.text())).collect()
}

/// One decoded utterance.
#[derive(Debug, Clone, PartialEq)]
pub struct DecodeLine {
    pub id: String,
    pub text: String,
    pub logprob: f64,
}

impl DecodeLine {
    pub fn format(&self) -> String {
        format!("{}\t{}\t{:.6}\n", self.id, self.text, self.logprob)
    }
}

/// `utt_id<TAB>hyp tokens<TAB>logprob` records.
pub fn parse_decode_output(text: &str, file: &str) -> Result<Vec<DecodeLine>, DataError> {
    let mut out = Vec::new();
    for (n, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let err = |msg: String| DataError::Format {
            file: file.to_string(),
            line: n + 1,
            msg,
        };
        let parts: Vec<&str> = line.split('\t').collect();
        if parts.len() != 3 {
            return Err(err("expected utt_id<TAB>tokens<TAB>logprob".into()));
        }
        let logprob = parts[2].trim().parse::<f64>().map_err(|e| err(format!("logprob: {e}")))?;
        out.push(DecodeLine {
            id: parts[0].to_string(),
            text: parts[1].split_whitespace().collect::<Vec<_>>().join(" "),
            logprob,
        });
    }
    Ok(out)
}

/// A featurized utterance: `sos .. eos` ids and its frames.
#[derive(Debug, Clone)]
pub struct Example {
    pub id: String,
    pub tokens: Vec<usize>,
    pub features: Tensor,
}

/// Regenerates the frames of every manifest entry.
pub fn featurize_entries(entries: &[(String, String)], vocab: &Vocab, synth: &SynthConfig) -> Result<Vec<Example>, DataError> {
    entries
        .iter()
        .map(|(id, line)| {
            let tokens = vocab.encode(line);
            let f = featurize(&tokens[1..tokens.len() - 1], id, synth.seed, &synth.features)?;
            Ok(Example {
                id: id.clone(),
                tokens,
                features: f.frames,
            })
        })
        .collect()
}

pub const VOCAB_FILE: &str = "vocab.txt";
pub const SYNTH_CONF_FILE: &str = "synth.conf";
pub const MANIFESTS: [&str; 5] = ["train_cs", "mono_a", "mono_b", "dev", "test"];

pub fn manifest_path(dir: &Path, stem: &str) -> PathBuf {
    dir.join(format!("{stem}.tsv"))
}

/// Writes corpora, vocabulary, manifests and the synthesis config; returns the
/// written paths in order.
pub fn write_dataset(dir: &Path, cfg: &SynthConfig, data: &SynthData) -> Result<Vec<PathBuf>, DataError> {
    std::fs::create_dir_all(dir).map_err(|source| DataError::Io {
        path: dir.display().to_string(),
        source,
    })?;
    let lines = |sets: &[&[Sentence]]| -> String { sets.iter().flat_map(|s| s.iter()).map(|s| s.text() + "\n").collect() };
    let corpora: [(&str, String); 8] = [
        ("cs", lines(&[&data.cs])),
        ("cs+a", lines(&[&data.cs, &data.mono_a])),
        ("cs+b", lines(&[&data.cs, &data.mono_b])),
        ("all", lines(&[&data.cs, &data.mono_a, &data.mono_b])),
        ("mono_a", lines(&[&data.mono_a])),
        ("mono_b", lines(&[&data.mono_b])),
        ("dev", lines(&[&data.dev])),
        ("test", lines(&[&data.test])),
    ];
    let mut written = Vec::new();
    for (name, text) in corpora {
        let p = dir.join(format!("corpus.{name}.txt"));
        write(&p, text)?;
        written.push(p);
    }
    let p = dir.join(VOCAB_FILE);
    write(&p, data.vocab.to_file_string())?;
    written.push(p);
    for (stem, set) in MANIFESTS.iter().zip([&data.cs, &data.mono_a, &data.mono_b, &data.dev, &data.test]) {
        let p = manifest_path(dir, stem);
        write(&p, format_manifest(set))?;
        written.push(p);
    }
    let p = dir.join(SYNTH_CONF_FILE);
    write(&p, cfg.to_kv().to_text())?;
    written.push(p);
    Ok(written)
}

/// Vocabulary and synthesis config stored in a data directory.
pub fn load_dataset_meta(dir: &Path) -> Result<(Vocab, SynthConfig), DataError> {
    let vocab = Vocab::load(&dir.join(VOCAB_FILE))?;
    let synth = SynthConfig::from_kv_text(&read_to_string(&dir.join(SYNTH_CONF_FILE))?)?;
    Ok((vocab, synth))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn manifest_parsing() {
        let m = parse_manifest("u1\ta1 a2\n\nu2\t\n", "m").unwrap();
        assert_eq!(m, vec![("u1".into(), "a1 a2".into()), ("u2".into(), "".into())]);
        assert!(parse_manifest("no tab here\n", "m").is_err());
    }

    #[test]
    fn decode_output_round_trip() {
        let l = DecodeLine {
            id: "u".into(),
            text: "a1 ka".into(),
            logprob: -1.25,
        };
        assert_eq!(parse_decode_output(&l.format(), "d").unwrap(), vec![l]);
        assert!(parse_decode_output("u\tx\n", "d").is_err());
    }

    #[test]
    fn conditions_parse() {
        for c in Condition::ALL {
            assert_eq!(c.to_string().parse::<Condition>().unwrap(), c);
        }
        assert_eq!("CS+A".parse::<Condition>().unwrap(), Condition::CsA);
        assert!("mono".parse::<Condition>().is_err());
        assert_eq!(Condition::All.manifests().len(), 3);
    }
}
