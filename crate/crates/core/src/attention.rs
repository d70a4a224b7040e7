//! Decoder self-attention variants.
//!
//! * `Baseline`: multi-head scaled dot-product attention with a causal mask.
//! * `ScoreReweighted`: the scaled scores are multiplied elementwise by the
//!   per-utterance re-weighting matrix before the softmax.
//! * `SplitShared` / `SplitIndependent`: the input is copied into a LangA stream
//!   and a LangB stream, each scaling the other language's rows by `alpha`; each
//!   stream runs full causal attention (one parameter bank for both streams, or
//!   one bank per stream) and the outputs are merged row by row according to the
//!   language of the query position.
//!
//! All functions operate on packed batches: the rows of several sequences
//! stacked into one matrix, with [`SeqSpan`]s marking where each sequence lives.

use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use rand::Rng;

use crate::autodiff::{AttnSegment, Graph, NodeId, ParamId, ParamStore, Tensor, TensorError};
use crate::lang_mask::{MaskParams, MaskState};
use crate::vocab::LanguageTag;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Variant {
    Baseline,
    ScoreReweighted,
    SplitShared,
    SplitIndependent,
}

impl Variant {
    pub const ALL: [Variant; 4] = [
        Variant::Baseline,
        Variant::ScoreReweighted,
        Variant::SplitShared,
        Variant::SplitIndependent,
    ];

    /// Command-line spelling.
    pub fn cli_name(self) -> &'static str {
        match self {
            Variant::Baseline => "baseline",
            Variant::ScoreReweighted => "score-reweight",
            Variant::SplitShared => "shared",
            Variant::SplitIndependent => "independent",
        }
    }

    pub fn is_split(self) -> bool {
        matches!(self, Variant::SplitShared | Variant::SplitIndependent)
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Variant::Baseline => "baseline",
            Variant::ScoreReweighted => "score_reweighted",
            Variant::SplitShared => "split_shared",
            Variant::SplitIndependent => "split_independent",
        })
    }
}

impl FromStr for Variant {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Ok(match s {
            "baseline" => Variant::Baseline,
            "score-reweight" | "score_reweighted" | "score-reweighted" => Variant::ScoreReweighted,
            "shared" | "split_shared" | "split-shared" => Variant::SplitShared,
            "independent" | "split_independent" | "split-independent" => Variant::SplitIndependent,
            other => return Err(format!("unknown variant {other:?} (expected baseline, score-reweight, shared, independent)")),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VariantConfig {
    pub variant: Variant,
    pub mask: MaskParams,
}

impl VariantConfig {
    pub fn new(variant: Variant) -> Self {
        Self {
            variant,
            mask: MaskParams::default(),
        }
    }
}

/// Rows `start..start + len` of a packed matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SeqSpan {
    pub start: usize,
    pub len: usize,
}

impl SeqSpan {
    /// Consecutive spans for the given lengths.
    pub fn pack(lens: &[usize]) -> Vec<SeqSpan> {
        let mut start = 0;
        lens.iter()
            .map(|&len| {
                let s = SeqSpan { start, len };
                start += len;
                s
            })
            .collect()
    }

    pub fn rows(self) -> std::ops::Range<usize> {
        self.start..self.start + self.len
    }
}

/// One bank of attention parameters: query/key/value/output projections, each
/// `d x d` (heads concatenated). Keys carry no bias.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct AttentionParams {
    pub wq: ParamId,
    pub bq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub bv: ParamId,
    pub wo: ParamId,
    pub bo: ParamId,
    pub heads: usize,
    pub d_model: usize,
}

impl AttentionParams {
    pub fn new(store: &mut ParamStore, prefix: &str, d_model: usize, heads: usize, rng: &mut impl Rng) -> Result<Self, TensorError> {
        if heads == 0 || d_model % heads != 0 {
            return Err(TensorError::Invalid(format!("{heads} heads do not divide width {d_model}")));
        }
        let mut w = |name: &str, store: &mut ParamStore| store.add(format!("{prefix}.{name}"), xavier(rng, d_model, d_model));
        let wq = w("wq", store)?;
        let wk = w("wk", store)?;
        let wv = w("wv", store)?;
        let wo = w("wo", store)?;
        let b = |name: &str, store: &mut ParamStore| store.add(format!("{prefix}.{name}"), Tensor::zeros(vec![d_model]));
        Ok(Self {
            wq,
            bq: b("bq", store)?,
            wk,
            wv,
            bv: b("bv", store)?,
            wo,
            bo: b("bo", store)?,
            heads,
            d_model,
        })
    }

    /// Scalar parameter count of one bank.
    pub fn numel(d_model: usize) -> usize {
        4 * d_model * d_model + 3 * d_model
    }

    pub fn ids(&self) -> [ParamId; 7] {
        [self.wq, self.bq, self.wk, self.wv, self.bv, self.wo, self.bo]
    }
}

/// Uniform Glorot initialization for a `fan_in x fan_out` matrix.
pub fn xavier(rng: &mut impl Rng, fan_in: usize, fan_out: usize) -> Tensor {
    let a = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..fan_in * fan_out).map(|_| rng.random_range(-a..a)).collect();
    Tensor::matrix(fan_in, fan_out, data).expect("xavier: positive dims")
}

fn linear(g: &mut Graph, x: NodeId, w: NodeId, b: Option<NodeId>) -> Result<NodeId, TensorError> {
    let y = g.matmul(x, w)?;
    match b {
        Some(b) => g.add_row(y, b),
        None => Ok(y),
    }
}

/// Projects queries from `q_in` and keys/values from `kv_in`, attends over
/// `segments`, and applies the output projection.
pub fn multi_head(
    g: &mut Graph,
    store: &ParamStore,
    q_in: NodeId,
    kv_in: NodeId,
    p: &AttentionParams,
    segments: Arc<Vec<AttnSegment>>,
) -> Result<NodeId, TensorError> {
    let [wq, bq, wk, wv, bv, wo, bo] = p.ids().map(|id| g.param(store, id));
    let q = linear(g, q_in, wq, Some(bq))?;
    let k = linear(g, kv_in, wk, None)?;
    let v = linear(g, kv_in, wv, Some(bv))?;
    let ctx = g.attention(q, k, v, p.heads, segments)?;
    linear(g, ctx, wo, Some(bo))
}

fn causal_segments(seqs: &[SeqSpan], weights: impl Fn(usize) -> Option<Arc<Vec<f64>>>) -> Arc<Vec<AttnSegment>> {
    Arc::new(
        seqs.iter()
            .enumerate()
            .map(|(n, s)| AttnSegment {
                q_start: s.start,
                q_len: s.len,
                k_start: s.start,
                k_len: s.len,
                causal: true,
                weights: weights(n),
            })
            .collect(),
    )
}

/// Parameter banks of one decoder self-attention sublayer.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelfAttnBanks {
    pub a: AttentionParams,
    /// Present only for `SplitIndependent`.
    pub b: Option<AttentionParams>,
}

impl SelfAttnBanks {
    pub fn bank_b(&self) -> &AttentionParams {
        self.b.as_ref().unwrap_or(&self.a)
    }
}

/// Rows evaluated with each parameter bank, for auditing stream isolation.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct BankAccess {
    pub bank_a_rows: usize,
    pub bank_b_rows: usize,
    /// Bank-B rows belonging to sequences that contain no LangB token.
    pub bank_b_rows_without_langb: usize,
}

/// Decoder self-attention for a packed batch under the configured variant.
///
/// `masks[n]` describes sequence `seqs[n]` and must have the same length.
pub fn decoder_self_attention(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    banks: &SelfAttnBanks,
    variant: Variant,
    seqs: &[SeqSpan],
    masks: &[&MaskState],
    mut access: Option<&mut BankAccess>,
) -> Result<NodeId, TensorError> {
    if seqs.len() != masks.len() || seqs.iter().zip(masks).any(|(s, m)| s.len != m.len()) {
        return Err(TensorError::Invalid("mask states do not match sequence lengths".into()));
    }
    if seqs.iter().any(|s| s.len == 0) {
        return Err(TensorError::Invalid("empty sequence in attention batch".into()));
    }
    match variant {
        Variant::Baseline => {
            if let Some(a) = access.as_deref_mut() {
                a.bank_a_rows += seqs.iter().map(|s| s.len).sum::<usize>();
            }
            multi_head(g, store, x, x, &banks.a, causal_segments(seqs, |_| None))
        }
        Variant::ScoreReweighted => {
            if let Some(a) = access.as_deref_mut() {
                a.bank_a_rows += seqs.iter().map(|s| s.len).sum::<usize>();
            }
            let segs = causal_segments(seqs, |n| Some(Arc::new(masks[n].reweight().values().to_vec())));
            multi_head(g, store, x, x, &banks.a, segs)
        }
        Variant::SplitShared | Variant::SplitIndependent => {
            let bank_b = if variant == Variant::SplitShared { &banks.a } else { banks.bank_b() };
            split_streams(g, store, x, &banks.a, bank_b, seqs, masks, access)
        }
    }
}

#[derive(Clone, Copy, PartialEq, Eq)]
enum Stream {
    A,
    B,
}

/// Stream serving a query position: LangB rows read stream B, everything else
/// (LangA and Special rows) reads stream A.
fn stream_of(lang: LanguageTag) -> Stream {
    match lang {
        LanguageTag::LangB => Stream::B,
        LanguageTag::LangA | LanguageTag::Special => Stream::A,
    }
}

#[allow(clippy::too_many_arguments)]
fn split_streams(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    bank_a: &AttentionParams,
    bank_b: &AttentionParams,
    seqs: &[SeqSpan],
    masks: &[&MaskState],
    mut access: Option<&mut BankAccess>,
) -> Result<NodeId, TensorError> {
    let total = g.value(x).rows();
    let mut sources = Vec::new();
    // (source index, row in that source) for every packed row
    let mut location: Vec<Option<(u32, u32)>> = vec![None; total];
    for (stream, bank) in [(Stream::A, bank_a), (Stream::B, bank_b)] {
        let needed: Vec<usize> = (0..seqs.len())
            .filter(|&n| masks[n].langs().iter().any(|&l| stream_of(l) == stream))
            .collect();
        if needed.is_empty() {
            continue;
        }
        let lens: Vec<usize> = needed.iter().map(|&n| seqs[n].len).collect();
        let sub = SeqSpan::pack(&lens);
        let input = if needed.len() == seqs.len() && seqs == sub.as_slice() {
            x
        } else {
            let rows: Vec<usize> = needed.iter().flat_map(|&n| seqs[n].rows()).collect();
            g.gather_rows(x, &rows)?
        };
        let scales: Vec<f64> = needed
            .iter()
            .flat_map(|&n| {
                let s = masks[n].scalers();
                match stream {
                    Stream::A => s.scale_a.clone(),
                    Stream::B => s.scale_b.clone(),
                }
            })
            .collect();
        let scaled = g.scale_rows(input, Arc::new(scales))?;
        let out = multi_head(g, store, scaled, scaled, bank, causal_segments(&sub, |_| None))?;
        let src = sources.len() as u32;
        sources.push(out);
        for (&n, span) in needed.iter().zip(&sub) {
            for (i, &lang) in masks[n].langs().iter().enumerate() {
                if stream_of(lang) == stream {
                    location[seqs[n].start + i] = Some((src, (span.start + i) as u32));
                }
            }
            if let Some(a) = access.as_deref_mut() {
                match stream {
                    Stream::A => a.bank_a_rows += span.len,
                    Stream::B => {
                        a.bank_b_rows += span.len;
                        if !masks[n].langs().contains(&LanguageTag::LangB) {
                            a.bank_b_rows_without_langb += span.len;
                        }
                    }
                }
            }
        }
    }
    let picks = location
        .into_iter()
        .enumerate()
        .map(|(r, l)| l.ok_or_else(|| TensorError::Invalid(format!("row {r} is outside every sequence"))))
        .collect::<Result<Vec<_>, _>>()?;
    g.gather(&sources, picks)
}

/// Causal multi-head attention of one sequence `x` (`L x d`).
pub fn attend_baseline(g: &mut Graph, store: &ParamStore, x: NodeId, params: &AttentionParams) -> Result<NodeId, TensorError> {
    let seqs = SeqSpan::pack(&[g.value(x).rows()]);
    multi_head(g, store, x, x, params, causal_segments(&seqs, |_| None))
}

/// Causal attention with scaled scores multiplied by the re-weighting matrix `w`.
pub fn attend_reweighted(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    params: &AttentionParams,
    w: &crate::lang_mask::ReweightMatrix,
) -> Result<NodeId, TensorError> {
    let len = g.value(x).rows();
    if w.len() != len {
        return Err(TensorError::Shape {
            op: "attend_reweighted",
            lhs: vec![len],
            rhs: vec![w.len()],
        });
    }
    let seqs = SeqSpan::pack(&[len]);
    let weights = Arc::new(w.values().to_vec());
    multi_head(g, store, x, x, params, causal_segments(&seqs, |_| Some(weights.clone())))
}

/// Two-stream attention of one sequence. With `shared`, `params_b` is ignored and
/// both streams use `params_a`.
pub fn attend_split(
    g: &mut Graph,
    store: &ParamStore,
    x: NodeId,
    params_a: &AttentionParams,
    params_b: &AttentionParams,
    mask: &MaskState,
    shared: bool,
) -> Result<NodeId, TensorError> {
    let seqs = SeqSpan::pack(&[g.value(x).rows()]);
    let bank_b = if shared { params_a } else { params_b };
    split_streams(g, store, x, params_a, bank_b, &seqs, &[mask], None)
}

/// Row `i` from `out_a` for LangA and Special positions, from `out_b` for LangB.
pub fn merge_streams(g: &mut Graph, out_a: NodeId, out_b: NodeId, langs: &[LanguageTag]) -> Result<NodeId, TensorError> {
    let (ra, rb) = (g.value(out_a).rows(), g.value(out_b).rows());
    if ra != langs.len() || rb != langs.len() {
        return Err(TensorError::Shape {
            op: "merge_streams",
            lhs: vec![ra, rb],
            rhs: vec![langs.len()],
        });
    }
    let picks = langs
        .iter()
        .enumerate()
        .map(|(i, &l)| match stream_of(l) {
            Stream::A => (0, i as u32),
            Stream::B => (1, i as u32),
        })
        .collect();
    g.gather(&[out_a, out_b], picks)
}
