//! Per-utterance language masks for decoder self-attention.
//!
//! Everything here is a pure function of the language-tag sequence. The same
//! state is either built in one shot from a gold target (training) or grown one
//! token at a time from the decoded prefix (beam search); both routes produce
//! bit-identical values.

use std::sync::Arc;

use crate::vocab::LanguageTag;

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MaskError {
    #[error("language sequence is empty")]
    Empty,
    #[error("re-weighting factors need w_same >= 1 >= w_diff > 0, got w_same={w_same}, w_diff={w_diff}")]
    Weights { w_same: f64, w_diff: f64 },
    #[error("stream scale alpha must lie in (0, 1), got {0}")]
    Alpha(f64),
    #[error("dimension mismatch: {0} vs {1}")]
    Dimension(usize, usize),
}

/// Re-weighting and stream-separation constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MaskParams {
    pub w_same: f64,
    pub w_diff: f64,
    pub alpha: f64,
}

impl Default for MaskParams {
    fn default() -> Self {
        Self {
            w_same: 1.0,
            w_diff: 0.1,
            alpha: 0.1,
        }
    }
}

impl MaskParams {
    pub fn validate(&self) -> Result<(), MaskError> {
        check_weights(self.w_same, self.w_diff)?;
        check_alpha(self.alpha)
    }
}

fn check_weights(w_same: f64, w_diff: f64) -> Result<(), MaskError> {
    if w_same >= 1.0 && w_diff <= 1.0 && w_diff > 0.0 && w_same.is_finite() {
        Ok(())
    } else {
        Err(MaskError::Weights { w_same, w_diff })
    }
}

fn check_alpha(alpha: f64) -> Result<(), MaskError> {
    if alpha > 0.0 && alpha < 1.0 {
        Ok(())
    } else {
        Err(MaskError::Alpha(alpha))
    }
}

fn pair_weight(a: LanguageTag, b: LanguageTag, w_same: f64, w_diff: f64) -> f64 {
    use LanguageTag::Special;
    match (a, b) {
        (Special, _) | (_, Special) => 1.0,
        (x, y) if x == y => w_same,
        _ => w_diff,
    }
}

/// `L x L` multiplicative weights on pre-softmax self-attention scores.
#[derive(Debug, Clone, PartialEq)]
pub struct ReweightMatrix {
    len: usize,
    values: Vec<f64>,
}

impl ReweightMatrix {
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[i * self.len + j]
    }

    /// Row-major values.
    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn is_all_ones(&self) -> bool {
        self.values.iter().all(|&v| v == 1.0)
    }
}

pub fn build_reweight(langs: &[LanguageTag], w_same: f64, w_diff: f64) -> Result<ReweightMatrix, MaskError> {
    if langs.is_empty() {
        return Err(MaskError::Empty);
    }
    check_weights(w_same, w_diff)?;
    let len = langs.len();
    let mut values = Vec::with_capacity(len * len);
    for &a in langs {
        for &b in langs {
            values.push(pair_weight(a, b, w_same, w_diff));
        }
    }
    Ok(ReweightMatrix { len, values })
}

/// Per-position row scales for the two language streams.
#[derive(Debug, Clone, PartialEq)]
pub struct StreamScalers {
    pub scale_a: Vec<f64>,
    pub scale_b: Vec<f64>,
}

impl StreamScalers {
    pub fn len(&self) -> usize {
        self.scale_a.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scale_a.is_empty()
    }
}

fn scaler_pair(lang: LanguageTag, alpha: f64) -> (f64, f64) {
    match lang {
        LanguageTag::LangA => (1.0, alpha),
        LanguageTag::LangB => (alpha, 1.0),
        LanguageTag::Special => (1.0, 1.0),
    }
}

pub fn build_scalers(langs: &[LanguageTag], alpha: f64) -> Result<StreamScalers, MaskError> {
    check_alpha(alpha)?;
    let (scale_a, scale_b) = langs.iter().map(|&l| scaler_pair(l, alpha)).unzip();
    Ok(StreamScalers { scale_a, scale_b })
}

/// Admissible key set for causal self-attention: query `i` sees keys `j <= i`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CausalMask {
    pub len: usize,
}

impl CausalMask {
    pub fn new(len: usize) -> Self {
        Self { len }
    }

    pub fn admissible(&self, i: usize, j: usize) -> bool {
        j <= i
    }
}

/// Score transform combining the multiplicative re-weighting with the additive
/// causal penalty. The two never touch the same entry.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreTransform {
    pub len: usize,
    pub weights: Arc<Vec<f64>>,
    pub admissible: Arc<Vec<bool>>,
}

impl ScoreTransform {
    /// `s * W` on admissible entries, `s + MASK_NEG` elsewhere.
    pub fn apply(&self, scores: &[f64]) -> Result<Vec<f64>, MaskError> {
        if scores.len() != self.len * self.len {
            return Err(MaskError::Dimension(scores.len(), self.len * self.len));
        }
        Ok(scores
            .iter()
            .enumerate()
            .map(|(e, &s)| if self.admissible[e] { s * self.weights[e] } else { s + crate::autodiff::MASK_NEG })
            .collect())
    }
}

pub fn combine_causal(w: &ReweightMatrix, c: &CausalMask) -> Result<ScoreTransform, MaskError> {
    if w.len() != c.len {
        return Err(MaskError::Dimension(w.len(), c.len));
    }
    let len = c.len;
    let admissible = (0..len * len).map(|e| c.admissible(e / len, e % len)).collect();
    Ok(ScoreTransform {
        len,
        weights: Arc::new(w.values.clone()),
        admissible: Arc::new(admissible),
    })
}

/// Everything the decoder self-attention needs for one sequence.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskState {
    params: MaskParams,
    langs: Vec<LanguageTag>,
    reweight: ReweightMatrix,
    scalers: StreamScalers,
}

impl MaskState {
    pub fn empty(params: MaskParams) -> Result<Self, MaskError> {
        params.validate()?;
        Ok(Self {
            params,
            langs: Vec::new(),
            reweight: ReweightMatrix { len: 0, values: Vec::new() },
            scalers: StreamScalers {
                scale_a: Vec::new(),
                scale_b: Vec::new(),
            },
        })
    }

    /// One-shot construction from a complete tag sequence.
    pub fn from_langs(langs: &[LanguageTag], params: MaskParams) -> Result<Self, MaskError> {
        params.validate()?;
        if langs.is_empty() {
            return Self::empty(params);
        }
        Ok(Self {
            params,
            langs: langs.to_vec(),
            reweight: build_reweight(langs, params.w_same, params.w_diff)?,
            scalers: build_scalers(langs, params.alpha)?,
        })
    }

    /// Grows the state by one position. The leading block is copied unchanged;
    /// only the new row, column and scaler entries are computed.
    pub fn extend_incremental(&self, new_lang: LanguageTag) -> Self {
        let (old, p) = (self.langs.len(), self.params);
        let len = old + 1;
        let mut values = Vec::with_capacity(len * len);
        for i in 0..old {
            values.extend_from_slice(&self.reweight.values[i * old..(i + 1) * old]);
            values.push(pair_weight(self.langs[i], new_lang, p.w_same, p.w_diff));
        }
        for j in 0..old {
            values.push(pair_weight(new_lang, self.langs[j], p.w_same, p.w_diff));
        }
        values.push(pair_weight(new_lang, new_lang, p.w_same, p.w_diff));
        let (sa, sb) = scaler_pair(new_lang, p.alpha);
        let mut scalers = self.scalers.clone();
        scalers.scale_a.push(sa);
        scalers.scale_b.push(sb);
        let mut langs = self.langs.clone();
        langs.push(new_lang);
        Self {
            params: p,
            langs,
            reweight: ReweightMatrix { len, values },
            scalers,
        }
    }

    pub fn len(&self) -> usize {
        self.langs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.langs.is_empty()
    }

    pub fn params(&self) -> MaskParams {
        self.params
    }

    pub fn langs(&self) -> &[LanguageTag] {
        &self.langs
    }

    pub fn reweight(&self) -> &ReweightMatrix {
        &self.reweight
    }

    pub fn scalers(&self) -> &StreamScalers {
        &self.scalers
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use LanguageTag::{LangA as A, LangB as B, Special as S};

    #[test]
    fn reweight_examples() {
        let w = build_reweight(&[A, A, B], 1.0, 0.1).unwrap();
        assert_eq!(w.values(), &[1.0, 1.0, 0.1, 1.0, 1.0, 0.1, 0.1, 0.1, 1.0]);
        let w = build_reweight(&[A, A, A], 1.5, 0.3).unwrap();
        assert!(w.values().iter().all(|&v| v == 1.5));
        let w = build_reweight(&[S, A, B], 2.0, 0.5).unwrap();
        for k in 0..3 {
            assert_eq!(w.get(0, k), 1.0);
            assert_eq!(w.get(k, 0), 1.0);
        }
        assert_eq!(w.get(1, 2), 0.5);
        assert_eq!(build_reweight(&[], 1.0, 0.1), Err(MaskError::Empty));
        assert!(build_reweight(&[A], 0.9, 0.1).is_err());
        assert!(build_reweight(&[A], 1.0, 0.0).is_err());
        assert!(build_reweight(&[A], 1.0, 1.1).is_err());
    }

    #[test]
    fn scaler_examples() {
        let s = build_scalers(&[A, B, A], 0.1).unwrap();
        assert_eq!(s.scale_a, vec![1.0, 0.1, 1.0]);
        assert_eq!(s.scale_b, vec![0.1, 1.0, 0.1]);
        let s = build_scalers(&[S, S], 0.1).unwrap();
        assert_eq!((s.scale_a, s.scale_b), (vec![1.0; 2], vec![1.0; 2]));
        let s = build_scalers(&[A, A, A], 0.25).unwrap();
        assert_eq!((s.scale_a, s.scale_b), (vec![1.0; 3], vec![0.25; 3]));
        assert!(build_scalers(&[A], 1.0).is_err());
        assert!(build_scalers(&[A], 0.0).is_err());
    }

    #[test]
    fn extend_examples() {
        let p = MaskParams { w_same: 1.5, w_diff: 0.2, alpha: 0.1 };
        let st = MaskState::from_langs(&[A], p).unwrap().extend_incremental(B);
        assert_eq!(st.reweight().values(), &[1.5, 0.2, 0.2, 1.5]);
        let st = MaskState::empty(p).unwrap().extend_incremental(S);
        assert_eq!(st.reweight().values(), &[1.0]);
        assert_eq!(st.scalers().scale_a, vec![1.0]);
    }

    #[test]
    fn combine_causal_examples() {
        let c = CausalMask::new(1);
        let t = combine_causal(&build_reweight(&[A], 1.0, 0.1).unwrap(), &c).unwrap();
        assert_eq!(t.apply(&[3.0]).unwrap(), vec![3.0]);

        let t = combine_causal(&build_reweight(&[A, B], 1.0, 0.1).unwrap(), &CausalMask::new(2)).unwrap();
        let out = t.apply(&[2.0, 5.0, -4.0, 1.0]).unwrap();
        // s'_10 = s_10 * w_diff; s'_01 is causally masked
        assert_eq!(out[2], -4.0 * 0.1);
        assert_eq!(out[1], 5.0 + crate::autodiff::MASK_NEG);
        assert_eq!((out[0], out[3]), (2.0, 1.0));
        assert!(combine_causal(&build_reweight(&[A, B], 1.0, 0.1).unwrap(), &CausalMask::new(3)).is_err());
    }

    fn tag() -> impl Strategy<Value = LanguageTag> {
        prop_oneof![Just(A), Just(B), Just(S)]
    }

    proptest! {
        #[test]
        fn incremental_equals_batch_on_every_prefix(langs in proptest::collection::vec(tag(), 1..24)) {
            let p = MaskParams { w_same: 1.3, w_diff: 0.1, alpha: 0.1 };
            let mut st = MaskState::empty(p).unwrap();
            for (k, &l) in langs.iter().enumerate() {
                st = st.extend_incremental(l);
                prop_assert_eq!(&st, &MaskState::from_langs(&langs[..=k], p).unwrap());
            }
        }

        #[test]
        fn upper_triangle_is_always_masked(langs in proptest::collection::vec(tag(), 1..10), scores in proptest::collection::vec(-5.0f64..5.0, 100)) {
            let n = langs.len();
            let t = combine_causal(&build_reweight(&langs, 2.0, 0.1).unwrap(), &CausalMask::new(n)).unwrap();
            let out = t.apply(&scores[..n * n]).unwrap();
            for i in 0..n {
                for j in i + 1..n {
                    prop_assert!(out[i * n + j] < -1e8);
                }
            }
        }

        #[test]
        fn reweight_is_symmetric_off_special(langs in proptest::collection::vec(tag(), 1..12)) {
            let w = build_reweight(&langs, 1.7, 0.3).unwrap();
            for i in 0..langs.len() {
                for j in 0..langs.len() {
                    prop_assert!([1.7, 0.3, 1.0].contains(&w.get(i, j)));
                    prop_assert_eq!(w.get(i, j), w.get(j, i));
                }
            }
        }

        #[test]
        fn unit_weights_give_all_ones(langs in proptest::collection::vec(tag(), 1..12)) {
            prop_assert!(build_reweight(&langs, 1.0, 1.0).unwrap().is_all_ones());
        }
    }
}
