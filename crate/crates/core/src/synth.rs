//! Synthetic bilingual corpora and pseudo-acoustic features.
//!
//! Each language has a phrase inventory over its own alphabet. Monolingual
//! sentences concatenate phrases of one language; code-switched sentences are
//! built phrase by phrase and may change language only between phrases, so every
//! maximal monolingual fragment is itself a valid monolingual phrase sequence.
//! Every random draw is keyed by the global seed and the utterance id, so any
//! utterance can be regenerated alone and in any order.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Normal;
use sha2::{Digest, Sha256};

use crate::autodiff::Tensor;
use crate::kv::{KvError, KvMap};
use crate::vocab::{LanguageTag, Vocab, NUM_RESERVED};

#[derive(Debug, thiserror::Error)]
pub enum SynthError {
    #[error("empty phrase inventory")]
    EmptyInventory,
    #[error("invalid synthesis setting: {0}")]
    Invalid(String),
    #[error(transparent)]
    Kv(#[from] KvError),
}

/// RNG keyed by the global seed, a domain label and an item key.
pub fn keyed_rng(seed: u64, domain: &str, key: &str) -> ChaCha8Rng {
    let mut h = Sha256::new();
    h.update(seed.to_le_bytes());
    h.update(domain.as_bytes());
    h.update([0]);
    h.update(key.as_bytes());
    ChaCha8Rng::from_seed(h.finalize().into())
}

#[derive(Debug, Clone, PartialEq)]
pub struct ToyGrammar {
    pub lang: LanguageTag,
    pub alphabet: Vec<String>,
    pub phrases: Vec<Vec<String>>,
    /// Sampling weight per phrase (not necessarily normalized).
    pub weights: Vec<f64>,
    pub min_phrases: usize,
    pub max_phrases: usize,
}

impl ToyGrammar {
    pub fn new(lang: LanguageTag, phrases: Vec<Vec<String>>, weights: Vec<f64>, min_phrases: usize, max_phrases: usize) -> Result<Self, SynthError> {
        if phrases.is_empty() {
            return Err(SynthError::EmptyInventory);
        }
        if phrases.iter().any(Vec::is_empty) {
            return Err(SynthError::Invalid("empty phrase".into()));
        }
        if weights.len() != phrases.len() || weights.iter().any(|w| !(w.is_finite() && *w > 0.0)) {
            return Err(SynthError::Invalid("one positive weight per phrase required".into()));
        }
        if min_phrases == 0 || min_phrases > max_phrases {
            return Err(SynthError::Invalid(format!("sentence length range {min_phrases}..={max_phrases}")));
        }
        let mut alphabet: Vec<String> = phrases.iter().flatten().cloned().collect();
        alphabet.sort();
        alphabet.dedup();
        Ok(Self {
            lang,
            alphabet,
            phrases,
            weights,
            min_phrases,
            max_phrases,
        })
    }

    /// Random inventory of `n_phrases` distinct phrases over `alphabet`. A quarter
    /// are single symbols, the rest have 2..=`max_len` symbols; every symbol occurs
    /// in some phrase. Weights follow a Zipf law over a random phrase ranking.
    pub fn generate(
        lang: LanguageTag,
        alphabet: &[String],
        n_phrases: usize,
        max_len: usize,
        zipf: f64,
        min_phrases: usize,
        max_phrases: usize,
        rng: &mut impl Rng,
    ) -> Result<Self, SynthError> {
        if alphabet.is_empty() || n_phrases == 0 {
            return Err(SynthError::EmptyInventory);
        }
        if max_len < 2 || n_phrases < 2 {
            return Err(SynthError::Invalid("need at least two phrases of up to two or more symbols".into()));
        }
        let n_uni = (n_phrases / 4).clamp(1, alphabet.len());
        let mut order: Vec<&String> = alphabet.iter().collect();
        order.shuffle(rng);
        let mut phrases: Vec<Vec<String>> = order[..n_uni].iter().map(|s| vec![(*s).clone()]).collect();
        // Walk the shuffled alphabet cyclically so every symbol is used.
        let mut cursor = 0;
        let mut attempts = 0;
        while phrases.len() < n_phrases {
            attempts += 1;
            if attempts > 100 * n_phrases {
                return Err(SynthError::Invalid("alphabet too small for the requested inventory".into()));
            }
            let len = rng.random_range(2..=max_len);
            let mut p = Vec::with_capacity(len);
            p.push(order[cursor % order.len()].clone());
            for _ in 1..len {
                p.push(alphabet[rng.random_range(0..alphabet.len())].clone());
            }
            if !phrases.contains(&p) {
                phrases.push(p);
                cursor += 1;
            }
        }
        if cursor < order.len() {
            return Err(SynthError::Invalid("inventory too small to use every symbol".into()));
        }
        let mut rank: Vec<usize> = (0..phrases.len()).collect();
        rank.shuffle(rng);
        let weights = rank.iter().map(|&r| 1.0 / ((r + 1) as f64).powf(zipf)).collect();
        Self::new(lang, phrases, weights, min_phrases, max_phrases)
    }

    fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(&self.weights).expect("weights validated")
    }
}

/// A generated sentence with its phrase segmentation.
#[derive(Debug, Clone, PartialEq)]
pub struct Sentence {
    pub id: String,
    pub tokens: Vec<String>,
    pub langs: Vec<LanguageTag>,
    /// Start index of every phrase in `tokens`.
    pub phrase_starts: Vec<usize>,
}

impl Sentence {
    pub fn text(&self) -> String {
        self.tokens.join(" ")
    }

    /// Number of language changes between adjacent tokens.
    pub fn switches(&self) -> usize {
        self.langs.windows(2).filter(|w| w[0] != w[1]).count()
    }

    /// Maximal same-language token runs.
    pub fn fragments(&self) -> Vec<(LanguageTag, &[String])> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.tokens.len() {
            if i == self.tokens.len() || self.langs[i] != self.langs[start] {
                out.push((self.langs[start], &self.tokens[start..i]));
                start = i;
            }
        }
        out
    }
}

fn push_phrase(s: &mut Sentence, g: &ToyGrammar, rng: &mut impl Rng, sampler: &WeightedIndex<f64>) {
    let p = &g.phrases[sampler.sample(rng)];
    s.phrase_starts.push(s.tokens.len());
    s.tokens.extend(p.iter().cloned());
    s.langs.extend(std::iter::repeat_n(g.lang, p.len()));
}

pub fn utt_id(prefix: &str, index: usize) -> String {
    format!("{prefix}-{index:06}")
}

/// `count` sentences of one language with ids `prefix-000000`, ...
pub fn gen_monolingual(grammar: &ToyGrammar, count: usize, seed: u64, prefix: &str) -> Result<Vec<Sentence>, SynthError> {
    if count == 0 {
        return Err(SynthError::Invalid("count must be at least 1".into()));
    }
    let sampler = grammar.sampler();
    Ok((0..count)
        .map(|i| {
            let id = utt_id(prefix, i);
            let mut rng = keyed_rng(seed, "text", &id);
            let n = rng.random_range(grammar.min_phrases..=grammar.max_phrases);
            let mut s = Sentence {
                id,
                tokens: Vec::new(),
                langs: Vec::new(),
                phrase_starts: Vec::new(),
            };
            for _ in 0..n {
                push_phrase(&mut s, grammar, &mut rng, &sampler);
            }
            s
        })
        .collect())
}

/// Code-switched sentences: the first phrase's language is a fair coin, and after
/// every phrase but the last the language flips with probability `switch_prob`.
/// The phrase count range is grammar A's.
pub fn gen_codeswitch(a: &ToyGrammar, b: &ToyGrammar, count: usize, switch_prob: f64, seed: u64, prefix: &str) -> Result<Vec<Sentence>, SynthError> {
    if !(switch_prob > 0.0 && switch_prob < 1.0) {
        return Err(SynthError::Invalid(format!("switch_prob {switch_prob} outside (0, 1)")));
    }
    if count == 0 {
        return Err(SynthError::Invalid("count must be at least 1".into()));
    }
    let samplers = [a.sampler(), b.sampler()];
    let grammars = [a, b];
    Ok((0..count)
        .map(|i| {
            let id = utt_id(prefix, i);
            let mut rng = keyed_rng(seed, "text", &id);
            let n = rng.random_range(a.min_phrases..=a.max_phrases);
            let mut cur = usize::from(rng.random_bool(0.5));
            let mut s = Sentence {
                id,
                tokens: Vec::new(),
                langs: Vec::new(),
                phrase_starts: Vec::new(),
            };
            for k in 0..n {
                if k > 0 && rng.random_bool(switch_prob) {
                    cur = 1 - cur;
                }
                push_phrase(&mut s, grammars[cur], &mut rng, &samplers[cur]);
            }
            s
        })
        .collect())
}

/// Frames of one utterance: `frames_per_token[k]` rows belong to token `k`.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub frames: Tensor,
    pub frames_per_token: Vec<usize>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FeatureSpec {
    pub dim: usize,
    pub noise: f64,
    pub min_frames: usize,
    pub max_frames: usize,
}

impl Default for FeatureSpec {
    fn default() -> Self {
        Self {
            dim: 16,
            noise: 0.1,
            min_frames: 2,
            max_frames: 4,
        }
    }
}

/// Unit-norm pseudo-random prototype of a token id.
pub fn prototype(token: usize, dim: usize, seed: u64) -> Vec<f64> {
    let mut rng = keyed_rng(seed, "prototype", &token.to_string());
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    loop {
        let v: Vec<f64> = (0..dim).map(|_| normal.sample(&mut rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-6 {
            return v.into_iter().map(|x| x / n).collect();
        }
    }
}

/// Frames for `tokens` (no boundary markers): every token emits
/// `min_frames..=max_frames` copies of its prototype plus Gaussian noise.
pub fn featurize(tokens: &[usize], utt_id: &str, seed: u64, spec: &FeatureSpec) -> Result<Features, SynthError> {
    if tokens.is_empty() {
        return Err(SynthError::Invalid(format!("utterance {utt_id} has no tokens")));
    }
    if spec.dim == 0 || spec.min_frames == 0 || spec.min_frames > spec.max_frames || !(spec.noise >= 0.0 && spec.noise.is_finite()) {
        return Err(SynthError::Invalid(format!("feature spec {spec:?}")));
    }
    let mut rng = keyed_rng(seed, "frames", utt_id);
    let normal = Normal::new(0.0, spec.noise.max(f64::MIN_POSITIVE)).expect("finite noise");
    let mut data = Vec::new();
    let mut fpt = Vec::with_capacity(tokens.len());
    for &t in tokens {
        let proto = prototype(t, spec.dim, seed);
        let r = rng.random_range(spec.min_frames..=spec.max_frames);
        for _ in 0..r {
            for &p in &proto {
                data.push(if spec.noise == 0.0 { p } else { p + normal.sample(&mut rng) });
            }
        }
        fpt.push(r);
    }
    let rows = fpt.iter().sum();
    Ok(Features {
        frames: Tensor::matrix(rows, spec.dim, data).map_err(|e| SynthError::Invalid(e.to_string()))?,
        frames_per_token: fpt,
    })
}

/// Settings of a synthetic data set.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub seed: u64,
    pub n_cs: usize,
    pub n_mono_a: usize,
    pub n_mono_b: usize,
    pub n_dev: usize,
    pub n_test: usize,
    pub switch_prob: f64,
    pub a_symbols: usize,
    pub a_phrases: usize,
    pub a_max_phrase_len: usize,
    pub b_phrases: usize,
    pub b_max_phrase_len: usize,
    pub min_phrases: usize,
    pub max_phrases: usize,
    pub zipf: f64,
    pub features: FeatureSpec,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            seed: 1,
            n_cs: 2000,
            n_mono_a: 5000,
            n_mono_b: 5000,
            n_dev: 500,
            n_test: 500,
            switch_prob: 0.4,
            a_symbols: 30,
            a_phrases: 60,
            a_max_phrase_len: 2,
            b_phrases: 60,
            b_max_phrase_len: 3,
            min_phrases: 2,
            max_phrases: 6,
            zipf: 1.0,
            features: FeatureSpec::default(),
        }
    }
}

const B_ONSETS: [&str; 8] = ["k", "t", "m", "n", "s", "r", "l", "p"];
const B_VOWELS: [&str; 5] = ["a", "e", "i", "o", "u"];

impl SynthConfig {
    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        m.set("seed", self.seed);
        m.set("n_cs", self.n_cs);
        m.set("n_mono_a", self.n_mono_a);
        m.set("n_mono_b", self.n_mono_b);
        m.set("n_dev", self.n_dev);
        m.set("n_test", self.n_test);
        m.set("switch_prob", self.switch_prob);
        m.set("a_symbols", self.a_symbols);
        m.set("a_phrases", self.a_phrases);
        m.set("a_max_phrase_len", self.a_max_phrase_len);
        m.set("b_phrases", self.b_phrases);
        m.set("b_max_phrase_len", self.b_max_phrase_len);
        m.set("min_phrases", self.min_phrases);
        m.set("max_phrases", self.max_phrases);
        m.set("zipf", self.zipf);
        m.set("feat_dim", self.features.dim);
        m.set("noise", self.features.noise);
        m.set("min_frames", self.features.min_frames);
        m.set("max_frames", self.features.max_frames);
        m
    }

    pub fn apply_kv(&mut self, m: &mut KvMap) -> Result<(), SynthError> {
        m.take_into("seed", &mut self.seed)?;
        m.take_into("n_cs", &mut self.n_cs)?;
        m.take_into("n_mono_a", &mut self.n_mono_a)?;
        m.take_into("n_mono_b", &mut self.n_mono_b)?;
        m.take_into("n_dev", &mut self.n_dev)?;
        m.take_into("n_test", &mut self.n_test)?;
        m.take_into("switch_prob", &mut self.switch_prob)?;
        m.take_into("a_symbols", &mut self.a_symbols)?;
        m.take_into("a_phrases", &mut self.a_phrases)?;
        m.take_into("a_max_phrase_len", &mut self.a_max_phrase_len)?;
        m.take_into("b_phrases", &mut self.b_phrases)?;
        m.take_into("b_max_phrase_len", &mut self.b_max_phrase_len)?;
        m.take_into("min_phrases", &mut self.min_phrases)?;
        m.take_into("max_phrases", &mut self.max_phrases)?;
        m.take_into("zipf", &mut self.zipf)?;
        m.take_into("feat_dim", &mut self.features.dim)?;
        m.take_into("noise", &mut self.features.noise)?;
        m.take_into("min_frames", &mut self.features.min_frames)?;
        m.take_into("max_frames", &mut self.features.max_frames)?;
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self, SynthError> {
        let mut m = KvMap::parse(text)?;
        let mut c = Self::default();
        c.apply_kv(&mut m)?;
        m.finish()?;
        Ok(c)
    }

    /// The two grammars; deterministic in `seed`.
    pub fn grammars(&self) -> Result<(ToyGrammar, ToyGrammar), SynthError> {
        let a_alpha: Vec<String> = (0..self.a_symbols).map(|i| format!("a{i}")).collect();
        let b_alpha: Vec<String> = B_ONSETS.iter().flat_map(|c| B_VOWELS.iter().map(move |v| format!("{c}{v}"))).collect();
        let a = ToyGrammar::generate(
            LanguageTag::LangA,
            &a_alpha,
            self.a_phrases,
            self.a_max_phrase_len,
            self.zipf,
            self.min_phrases,
            self.max_phrases,
            &mut keyed_rng(self.seed, "grammar", "A"),
        )?;
        let b = ToyGrammar::generate(
            LanguageTag::LangB,
            &b_alpha,
            self.b_phrases,
            self.b_max_phrase_len,
            self.zipf,
            self.min_phrases,
            self.max_phrases,
            &mut keyed_rng(self.seed, "grammar", "B"),
        )?;
        Ok((a, b))
    }

    pub fn generate(&self) -> Result<SynthData, SynthError> {
        let (a, b) = self.grammars()?;
        let cs = gen_codeswitch(&a, &b, self.n_cs, self.switch_prob, self.seed, "cs")?;
        let mono_a = gen_monolingual(&a, self.n_mono_a, self.seed, "mono_a")?;
        let mono_b = gen_monolingual(&b, self.n_mono_b, self.seed, "mono_b")?;
        let dev = gen_codeswitch(&a, &b, self.n_dev, self.switch_prob, self.seed, "dev")?;
        let test = gen_codeswitch(&a, &b, self.n_test, self.switch_prob, self.seed, "test")?;
        // Every symbol of both grammars enters the vocabulary, in use or not.
        let vocab = Vocab::build(&[a.alphabet.join(" ")], &[b.alphabet.join(" ")], 1).map_err(|e| SynthError::Invalid(e.to_string()))?;
        debug_assert_eq!(vocab.len(), NUM_RESERVED + a.alphabet.len() + b.alphabet.len());
        Ok(SynthData {
            grammar_a: a,
            grammar_b: b,
            cs,
            mono_a,
            mono_b,
            dev,
            test,
            vocab,
        })
    }
}

#[derive(Debug, Clone)]
pub struct SynthData {
    pub grammar_a: ToyGrammar,
    pub grammar_b: ToyGrammar,
    pub cs: Vec<Sentence>,
    pub mono_a: Vec<Sentence>,
    pub mono_b: Vec<Sentence>,
    pub dev: Vec<Sentence>,
    pub test: Vec<Sentence>,
    pub vocab: Vocab,
}
