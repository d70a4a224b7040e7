//! Independent reference implementations shared by the integration tests.
#![allow(dead_code)]

use std::collections::HashSet;

use csattn::attention::Variant;
use csattn::autodiff::{Graph, Tensor};
use csattn::decode::allowed_log_softmax;
use csattn::model::{Model, ModelConfig, Utterance};
use csattn::vocab::{LanguageTag, EOS, SOS};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// True when `tokens` splits into a sequence of inventory phrases.
pub fn phrase_cover(tokens: &[String], phrases: &[Vec<String>]) -> bool {
    let set: HashSet<&[String]> = phrases.iter().map(Vec::as_slice).collect();
    let longest = phrases.iter().map(Vec::len).max().unwrap_or(0);
    let mut ok = vec![false; tokens.len() + 1];
    ok[0] = true;
    for end in 1..=tokens.len() {
        ok[end] = (1..=longest.min(end)).any(|l| ok[end - l] && set.contains(&tokens[end - l..end]));
    }
    ok[tokens.len()]
}

/// Maximal same-language runs, recomputed from per-token tags.
pub fn runs<'a>(tokens: &'a [String], langs: &[LanguageTag]) -> Vec<(LanguageTag, &'a [String])> {
    let mut out = Vec::new();
    let mut i = 0;
    while i < tokens.len() {
        let mut j = i + 1;
        while j < tokens.len() && langs[j] == langs[i] {
            j += 1;
        }
        out.push((langs[i], &tokens[i..j]));
        i = j;
    }
    out
}

/// Plain quadratic Levenshtein distance.
pub fn levenshtein<T: PartialEq>(a: &[T], b: &[T]) -> usize {
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    for i in 1..=a.len() {
        let mut cur = vec![i; b.len() + 1];
        for j in 1..=b.len() {
            let sub = prev[j - 1] + usize::from(a[i - 1] != b[j - 1]);
            cur[j] = sub.min(prev[j] + 1).min(cur[j - 1] + 1);
        }
        prev = cur;
    }
    prev[b.len()]
}

/// 4 reserved ids, then `n_a` LangA and `n_b` LangB ids.
pub fn tags(n_a: usize, n_b: usize) -> Vec<LanguageTag> {
    let mut l = vec![LanguageTag::Special; 4];
    l.extend(std::iter::repeat_n(LanguageTag::LangA, n_a));
    l.extend(std::iter::repeat_n(LanguageTag::LangB, n_b));
    l
}

pub fn random_features(rows: usize, dim: usize, rng: &mut impl Rng) -> Tensor {
    Tensor::matrix(rows, dim, (0..rows * dim).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// Tiny model with every parameter nudged off its initial value and the
/// output layer scaled by `sharpen`, so next-token distributions are peaked.
pub fn random_tiny_model(vocab: usize, variant: Variant, seed: u64, sharpen: f64) -> Model {
    let mut c = ModelConfig::tiny(vocab, variant);
    c.seed = seed;
    let mut m = Model::new(c).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xabcd);
    let ids: Vec<_> = m.store.ids().collect();
    for id in ids {
        let name = m.store.get(id).name.clone();
        for v in m.store.get_mut(id).value.data_mut() {
            *v += rng.random_range(-0.2..0.2);
            if name.starts_with("out.") {
                *v *= sharpen;
            }
        }
    }
    m
}

/// Allowed-token log-probabilities of the next token after `prefix`
/// (emitted tokens, no sos), from a full teacher-forced pass.
pub fn next_log_probs(model: &Model, features: &Tensor, prefix: &[usize], langs: &[LanguageTag]) -> Vec<f64> {
    let mut tokens = vec![SOS];
    tokens.extend_from_slice(prefix);
    tokens.push(EOS);
    let mut g = Graph::no_grad();
    let logits = model.forward(&mut g, &[Utterance { features, tokens: &tokens }], langs, None).unwrap();
    allowed_log_softmax(g.value(logits).row(prefix.len()))
}

/// Highest-scoring eos-terminated output of at most `max_len` emitted tokens
/// (eos included), by scoring every such sequence. Ties go to the smaller
/// token sequence.
pub fn brute_force_best(model: &Model, features: &Tensor, langs: &[LanguageTag], max_len: usize) -> (Vec<usize>, f64) {
    fn walk(model: &Model, f: &Tensor, langs: &[LanguageTag], prefix: &mut Vec<usize>, score: f64, max_len: usize, best: &mut Option<(Vec<usize>, f64)>) {
        let lp = next_log_probs(model, f, prefix, langs);
        for (tok, &l) in lp.iter().enumerate() {
            if !l.is_finite() {
                continue;
            }
            let s = score + l;
            if tok == EOS {
                let better = match best {
                    None => true,
                    Some((bt, bs)) => s > *bs || (s == *bs && prefix.as_slice() < bt.as_slice()),
                };
                if better {
                    *best = Some((prefix.clone(), s));
                }
            } else if prefix.len() + 2 <= max_len {
                prefix.push(tok);
                walk(model, f, langs, prefix, s, max_len, best);
                prefix.pop();
            }
        }
    }
    let mut best = None;
    walk(model, features, langs, &mut Vec::new(), 0.0, max_len, &mut best);
    best.expect("eos is always allowed")
}

/// Repeated argmax until eos or `max_len` emitted tokens.
pub fn greedy(model: &Model, features: &Tensor, langs: &[LanguageTag], max_len: usize) -> Vec<usize> {
    let mut out = Vec::new();
    while out.len() < max_len {
        let lp = next_log_probs(model, features, &out, langs);
        let tok = (0..lp.len()).fold(0, |b, i| if lp[i] > lp[b] { i } else { b });
        if tok == EOS {
            break;
        }
        out.push(tok);
    }
    out
}

/// Featurized copies of generated sentences.
pub fn examples(sentences: &[csattn::synth::Sentence], vocab: &csattn::vocab::Vocab, cfg: &csattn::synth::SynthConfig) -> Vec<csattn::data::Example> {
    let entries: Vec<(String, String)> = sentences.iter().map(|s| (s.id.clone(), s.text())).collect();
    csattn::data::featurize_entries(&entries, vocab, cfg).unwrap()
}

/// Pooled MER of beam decoding `examples`.
pub fn decode_mer(model: &Model, examples: &[csattn::data::Example], vocab: &csattn::vocab::Vocab, beam: usize) -> f64 {
    use csattn::metrics::{to_units, ScoreReport};
    let langs = vocab.languages(&(0..vocab.len()).collect::<Vec<_>>()).unwrap();
    let mut rep = ScoreReport::default();
    for e in examples {
        let r = csattn::decode::beam_search(model, &e.features, &langs, csattn::decode::BeamConfig { beam, max_len: 40 }, None, None).unwrap();
        rep.add_utterance(&to_units(&e.tokens, vocab).unwrap(), &to_units(r.best.output(), vocab).unwrap());
    }
    rep.mer().unwrap()
}
