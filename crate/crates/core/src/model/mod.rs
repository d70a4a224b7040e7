//! Encoder-decoder transformer over pseudo-acoustic frames.
//!
//! The encoder stacks pairs of frames (halving the frame rate), projects them to
//! the model width, adds sinusoidal positions and runs post-norm self-attention
//! blocks. The decoder embeds target tokens and runs post-norm blocks of variant
//! self-attention, cross-attention and a ReLU feed-forward layer.

mod checkpoint;
mod config;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, Checkpoint, CheckpointError, CHECKPOINT_VERSION};
pub use config::{noam_rate, ConfigError, ModelConfig};
pub use optim::Adam;

use std::sync::Arc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::attention::{self, AttentionParams, BankAccess, SelfAttnBanks, SeqSpan, Variant};
use crate::autodiff::{AttnSegment, Graph, NodeId, ParamId, ParamStore, Tensor, TensorError};
use crate::lang_mask::MaskState;
use crate::vocab::LanguageTag;

#[derive(Debug, Clone, Copy)]
struct Norm {
    gain: ParamId,
    bias: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct FeedForward {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

#[derive(Debug, Clone, Copy)]
struct EncoderLayer {
    attn: AttentionParams,
    ln1: Norm,
    ff: FeedForward,
    ln2: Norm,
}

#[derive(Debug, Clone, Copy)]
pub struct DecoderLayer {
    pub self_attn: SelfAttnBanks,
    pub cross: AttentionParams,
    ln1: Norm,
    ln2: Norm,
    ff: FeedForward,
    ln3: Norm,
}

/// One training or decoding example: frames and `sos .. eos` token ids.
#[derive(Debug, Clone, Copy)]
pub struct Utterance<'a> {
    pub features: &'a Tensor,
    pub tokens: &'a [usize],
}

/// Encoder output for a packed batch, with the cross-attention keys and values
/// of every decoder layer.
#[derive(Debug, Clone)]
pub struct Encoded {
    pub memory: NodeId,
    pub spans: Vec<SeqSpan>,
    cross_kv: Vec<(NodeId, NodeId)>,
}

#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    pub store: ParamStore,
    enc_in: (ParamId, ParamId),
    enc: Vec<EncoderLayer>,
    emb: ParamId,
    dec: Vec<DecoderLayer>,
    out: (ParamId, ParamId),
}

/// Random source for dropout; `None` runs the deterministic evaluation forward.
pub type DropoutRng<'a> = Option<&'a mut ChaCha8Rng>;

impl Model {
    /// Freshly initialized model, deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self, ConfigError> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut store = ParamStore::new();
        let invalid = |e: TensorError| ConfigError::Invalid(e.to_string());
        let (d, h) = (config.d_model, config.heads);

        let mut linear = |store: &mut ParamStore, name: &str, fan_in: usize, fan_out: usize| -> Result<(ParamId, ParamId), TensorError> {
            let w = store.add(format!("{name}.w"), attention::xavier(&mut rng, fan_in, fan_out))?;
            let b = store.add(format!("{name}.b"), Tensor::zeros(vec![fan_out]))?;
            Ok((w, b))
        };
        let norm = |store: &mut ParamStore, name: &str| -> Result<Norm, TensorError> {
            let gain = store.add(format!("{name}.g"), Tensor::new(vec![d], vec![1.0; d])?)?;
            let bias = store.add(format!("{name}.b"), Tensor::zeros(vec![d]))?;
            Ok(Norm { gain, bias })
        };

        let enc_in = linear(&mut store, "enc.in", 2 * config.feat_dim, d).map_err(invalid)?;
        let mut enc = Vec::new();
        let mut build = || -> Result<(), TensorError> {
            for i in 0..config.enc_layers {
                let p = format!("enc.{i}");
                let attn = AttentionParams::new(&mut store, &format!("{p}.attn"), d, h, &mut rng_for(&config, &p, "attn"))?;
                let ln1 = norm(&mut store, &format!("{p}.ln1"))?;
                let (w1, b1) = linear(&mut store, &format!("{p}.ff1"), d, config.d_ff)?;
                let (w2, b2) = linear(&mut store, &format!("{p}.ff2"), config.d_ff, d)?;
                let ln2 = norm(&mut store, &format!("{p}.ln2"))?;
                enc.push(EncoderLayer {
                    attn,
                    ln1,
                    ff: FeedForward { w1, b1, w2, b2 },
                    ln2,
                });
            }
            Ok(())
        };
        build().map_err(invalid)?;

        let scale = (3.0 / d as f64).sqrt();
        let mut erng = rng_for(&config, "dec", "emb");
        let emb_data = (0..config.vocab_size * d).map(|_| erng.random_range(-scale..scale)).collect();
        let emb = store
            .add("dec.emb", Tensor::matrix(config.vocab_size, d, emb_data).map_err(invalid)?)
            .map_err(invalid)?;

        let mut dec = Vec::new();
        let mut build = || -> Result<(), TensorError> {
            for i in 0..config.dec_layers {
                let p = format!("dec.{i}");
                let a = AttentionParams::new(&mut store, &format!("{p}.self_attn.a"), d, h, &mut rng_for(&config, &p, "self_a"))?;
                let b = match config.variant.variant {
                    Variant::SplitIndependent => Some(AttentionParams::new(
                        &mut store,
                        &format!("{p}.self_attn.b"),
                        d,
                        h,
                        &mut rng_for(&config, &p, "self_b"),
                    )?),
                    _ => None,
                };
                let ln1 = norm(&mut store, &format!("{p}.ln1"))?;
                let cross = AttentionParams::new(&mut store, &format!("{p}.cross"), d, h, &mut rng_for(&config, &p, "cross"))?;
                let ln2 = norm(&mut store, &format!("{p}.ln2"))?;
                let (w1, b1) = linear(&mut store, &format!("{p}.ff1"), d, config.d_ff)?;
                let (w2, b2) = linear(&mut store, &format!("{p}.ff2"), config.d_ff, d)?;
                let ln3 = norm(&mut store, &format!("{p}.ln3"))?;
                dec.push(DecoderLayer {
                    self_attn: SelfAttnBanks { a, b },
                    cross,
                    ln1,
                    ln2,
                    ff: FeedForward { w1, b1, w2, b2 },
                    ln3,
                });
            }
            Ok(())
        };
        build().map_err(invalid)?;
        let out = linear(&mut store, "out", d, config.vocab_size).map_err(invalid)?;

        Ok(Self {
            config,
            store,
            enc_in,
            enc,
            emb,
            dec,
            out,
        })
    }

    /// The same architecture with other parameter values (e.g. a perturbed copy).
    pub fn with_store(&self, store: ParamStore) -> Model {
        Model { store, ..self.clone() }
    }

    pub fn decoder_layers(&self) -> &[DecoderLayer] {
        &self.dec
    }

    /// Parameters of every LangB self-attention bank (empty unless the variant
    /// keeps independent banks).
    pub fn bank_b_params(&self) -> Vec<ParamId> {
        self.dec.iter().filter_map(|l| l.self_attn.b).flat_map(|b| b.ids()).collect()
    }

    /// Scalar parameter count implied by a configuration.
    pub fn expected_numel(c: &ModelConfig) -> usize {
        let (d, f, v) = (c.d_model, c.d_ff, c.vocab_size);
        let bank = AttentionParams::numel(d);
        let norm = 2 * d;
        let ff = d * f + f + f * d + d;
        let enc = c.enc_layers * (bank + 2 * norm + ff);
        let banks = if c.variant.variant == Variant::SplitIndependent { 2 } else { 1 };
        let dec = c.dec_layers * (banks * bank + bank + 3 * norm + ff);
        (2 * c.feat_dim * d + d) + enc + v * d + dec + (d * v + v)
    }

    /// Runs the encoder over a batch of feature matrices.
    pub fn encode(&self, g: &mut Graph, feats: &[&Tensor], mut rng: DropoutRng) -> Result<Encoded, TensorError> {
        let f = self.config.feat_dim;
        let mut data = Vec::new();
        let mut lens = Vec::new();
        for t in feats {
            if t.shape().len() != 2 || t.cols() != f || t.rows() == 0 {
                return Err(TensorError::Shape {
                    op: "encode",
                    lhs: t.shape().to_vec(),
                    rhs: vec![f],
                });
            }
            data.extend_from_slice(t.data());
            if t.rows() % 2 == 1 {
                data.extend(std::iter::repeat_n(0.0, f));
            }
            lens.push(t.rows().div_ceil(2));
        }
        if lens.is_empty() {
            return Err(TensorError::Invalid("empty encoder batch".into()));
        }
        let rows: usize = lens.iter().sum();
        let x = g.constant(Tensor::matrix(rows, 2 * f, data)?);
        let (w, b) = (g.param(&self.store, self.enc_in.0), g.param(&self.store, self.enc_in.1));
        let x = g.matmul(x, w)?;
        let x = g.add_row(x, b)?;
        let spans = SeqSpan::pack(&lens);
        let pe = g.constant(positions(&spans, self.config.d_model));
        let x = g.add(x, pe)?;
        let mut x = self.dropout(g, x, &mut rng)?;

        let segs: Arc<Vec<AttnSegment>> = Arc::new(
            spans
                .iter()
                .map(|s| AttnSegment {
                    q_start: s.start,
                    q_len: s.len,
                    k_start: s.start,
                    k_len: s.len,
                    causal: false,
                    weights: None,
                })
                .collect(),
        );
        for layer in &self.enc {
            let a = attention::multi_head(g, &self.store, x, x, &layer.attn, segs.clone())?;
            x = self.residual_norm(g, x, a, layer.ln1, &mut rng)?;
            let ff = self.feed_forward(g, x, layer.ff)?;
            x = self.residual_norm(g, x, ff, layer.ln2, &mut rng)?;
        }
        let mut cross_kv = Vec::with_capacity(self.dec.len());
        for layer in &self.dec {
            let (wk, wv, bv) = (g.param(&self.store, layer.cross.wk), g.param(&self.store, layer.cross.wv), g.param(&self.store, layer.cross.bv));
            let k = g.matmul(x, wk)?;
            let v = g.matmul(x, wv)?;
            let v = g.add_row(v, bv)?;
            cross_kv.push((k, v));
        }
        Ok(Encoded { memory: x, spans, cross_kv })
    }

    /// Decoder logits for a packed batch of token prefixes.
    ///
    /// Sequence `n` reads input ids `inputs[n]`, attends to encoder utterance
    /// `mem_of[n]` and uses `masks[n]` for its self-attention. With `last_only`
    /// only the final row of each sequence is projected to the vocabulary.
    #[allow(clippy::too_many_arguments)]
    pub fn decode_logits(
        &self,
        g: &mut Graph,
        enc: &Encoded,
        mem_of: &[usize],
        inputs: &[&[usize]],
        masks: &[&MaskState],
        last_only: bool,
        mut rng: DropoutRng,
        mut access: Option<&mut BankAccess>,
    ) -> Result<NodeId, TensorError> {
        if mem_of.len() != inputs.len() || masks.len() != inputs.len() {
            return Err(TensorError::Invalid("decoder batch fields differ in length".into()));
        }
        let d = self.config.d_model;
        let lens: Vec<usize> = inputs.iter().map(|s| s.len()).collect();
        let spans = SeqSpan::pack(&lens);
        let ids: Vec<usize> = inputs.iter().flat_map(|s| s.iter().copied()).collect();
        if let Some(&bad) = ids.iter().find(|&&i| i >= self.config.vocab_size) {
            return Err(TensorError::Vocab {
                id: bad,
                vocab: self.config.vocab_size,
            });
        }
        let emb = g.param(&self.store, self.emb);
        let x = g.gather_rows(emb, &ids)?;
        let x = g.scale(x, (d as f64).sqrt())?;
        let pe = g.constant(positions(&spans, d));
        let x = g.add(x, pe)?;
        let mut x = self.dropout(g, x, &mut rng)?;

        let mut cross_segs = Vec::with_capacity(spans.len());
        for (s, &m) in spans.iter().zip(mem_of) {
            let mem = enc
                .spans
                .get(m)
                .ok_or_else(|| TensorError::Invalid(format!("no encoder utterance {m}")))?;
            cross_segs.push(AttnSegment {
                q_start: s.start,
                q_len: s.len,
                k_start: mem.start,
                k_len: mem.len,
                causal: false,
                weights: None,
            });
        }
        let cross_segs = Arc::new(cross_segs);
        let variant = self.config.variant.variant;
        for (layer, &(k, v)) in self.dec.iter().zip(&enc.cross_kv) {
            let a = attention::decoder_self_attention(g, &self.store, x, &layer.self_attn, variant, &spans, masks, access.as_deref_mut())?;
            x = self.residual_norm(g, x, a, layer.ln1, &mut rng)?;

            let c = &layer.cross;
            let (wq, bq, wo, bo) = (g.param(&self.store, c.wq), g.param(&self.store, c.bq), g.param(&self.store, c.wo), g.param(&self.store, c.bo));
            let q = g.matmul(x, wq)?;
            let q = g.add_row(q, bq)?;
            let ctx = g.attention(q, k, v, c.heads, cross_segs.clone())?;
            let o = g.matmul(ctx, wo)?;
            let o = g.add_row(o, bo)?;
            x = self.residual_norm(g, x, o, layer.ln2, &mut rng)?;

            let ff = self.feed_forward(g, x, layer.ff)?;
            x = self.residual_norm(g, x, ff, layer.ln3, &mut rng)?;
        }
        if last_only {
            let last: Vec<usize> = spans.iter().map(|s| s.start + s.len - 1).collect();
            x = g.gather_rows(x, &last)?;
        }
        let (w, b) = (g.param(&self.store, self.out.0), g.param(&self.store, self.out.1));
        let y = g.matmul(x, w)?;
        g.add_row(y, b)
    }

    /// Teacher-forced logits: row `r` of sequence `n` predicts `tokens[r + 1]`.
    /// Self-attention masks come from the gold token languages.
    pub fn forward(&self, g: &mut Graph, batch: &[Utterance], token_langs: &[LanguageTag], rng: DropoutRng) -> Result<NodeId, TensorError> {
        self.forward_with_access(g, batch, token_langs, rng, None)
    }

    pub fn forward_with_access(
        &self,
        g: &mut Graph,
        batch: &[Utterance],
        token_langs: &[LanguageTag],
        mut rng: DropoutRng,
        access: Option<&mut BankAccess>,
    ) -> Result<NodeId, TensorError> {
        if token_langs.len() != self.config.vocab_size {
            return Err(TensorError::Shape {
                op: "forward",
                lhs: vec![token_langs.len()],
                rhs: vec![self.config.vocab_size],
            });
        }
        for u in batch {
            if u.tokens.len() < 2 {
                return Err(TensorError::Invalid("target needs at least sos and eos".into()));
            }
            if let Some(&bad) = u.tokens.iter().find(|&&t| t >= token_langs.len()) {
                return Err(TensorError::Vocab {
                    id: bad,
                    vocab: token_langs.len(),
                });
            }
        }
        let feats: Vec<&Tensor> = batch.iter().map(|u| u.features).collect();
        let enc = self.encode(g, &feats, rng.as_deref_mut())?;
        let inputs: Vec<&[usize]> = batch.iter().map(|u| &u.tokens[..u.tokens.len() - 1]).collect();
        let masks = inputs
            .iter()
            .map(|ids| {
                let langs: Vec<LanguageTag> = ids.iter().map(|&t| token_langs[t]).collect();
                MaskState::from_langs(&langs, self.config.variant.mask).map_err(|e| TensorError::Invalid(e.to_string()))
            })
            .collect::<Result<Vec<_>, _>>()?;
        let refs: Vec<&MaskState> = masks.iter().collect();
        let mem_of: Vec<usize> = (0..batch.len()).collect();
        self.decode_logits(g, &enc, &mem_of, &inputs, &refs, false, rng, access)
    }

    /// Mean label-smoothed cross-entropy of a teacher-forced batch.
    pub fn loss(&self, g: &mut Graph, batch: &[Utterance], token_langs: &[LanguageTag], rng: DropoutRng) -> Result<NodeId, TensorError> {
        self.loss_with_access(g, batch, token_langs, rng, None)
    }

    pub fn loss_with_access(
        &self,
        g: &mut Graph,
        batch: &[Utterance],
        token_langs: &[LanguageTag],
        rng: DropoutRng,
        access: Option<&mut BankAccess>,
    ) -> Result<NodeId, TensorError> {
        let logits = self.forward_with_access(g, batch, token_langs, rng, access)?;
        let targets: Vec<usize> = batch.iter().flat_map(|u| u.tokens[1..].iter().copied()).collect();
        let valid = vec![true; targets.len()];
        g.cross_entropy_smoothed(logits, &targets, &valid, self.config.label_smoothing)
    }

    fn dropout(&self, g: &mut Graph, x: NodeId, rng: &mut DropoutRng) -> Result<NodeId, TensorError> {
        let p = self.config.dropout;
        match rng {
            Some(rng) if p > 0.0 => {
                let keep = 1.0 / (1.0 - p);
                let mask = (0..g.value(x).len()).map(|_| if rng.random::<f64>() < p { 0.0 } else { keep }).collect();
                g.mul_const(x, mask)
            }
            _ => Ok(x),
        }
    }

    fn residual_norm(&self, g: &mut Graph, x: NodeId, sub: NodeId, n: Norm, rng: &mut DropoutRng) -> Result<NodeId, TensorError> {
        let sub = self.dropout(g, sub, rng)?;
        let y = g.add(x, sub)?;
        let (gain, bias) = (g.param(&self.store, n.gain), g.param(&self.store, n.bias));
        g.layer_norm(y, gain, bias)
    }

    fn feed_forward(&self, g: &mut Graph, x: NodeId, ff: FeedForward) -> Result<NodeId, TensorError> {
        let [w1, b1, w2, b2] = [ff.w1, ff.b1, ff.w2, ff.b2].map(|id| g.param(&self.store, id));
        let h = g.matmul(x, w1)?;
        let h = g.add_row(h, b1)?;
        let h = g.relu(h)?;
        let y = g.matmul(h, w2)?;
        g.add_row(y, b2)
    }
}

/// Independent initialization stream per sub-module, so adding a second
/// self-attention bank leaves every other initial value unchanged.
fn rng_for(config: &ModelConfig, prefix: &str, part: &str) -> ChaCha8Rng {
    use sha2::{Digest, Sha256};
    let mut h = Sha256::new();
    h.update(config.seed.to_le_bytes());
    h.update(prefix.as_bytes());
    h.update([0]);
    h.update(part.as_bytes());
    let digest = h.finalize();
    let mut seed = [0u8; 32];
    seed.copy_from_slice(&digest);
    ChaCha8Rng::from_seed(seed)
}

/// Sinusoidal position table; positions restart at 0 for every span.
fn positions(spans: &[SeqSpan], d: usize) -> Tensor {
    let rows: usize = spans.iter().map(|s| s.len).sum();
    let mut data = vec![0.0; rows * d];
    for s in spans {
        for pos in 0..s.len {
            let row = &mut data[(s.start + pos) * d..(s.start + pos + 1) * d];
            for i in 0..d {
                let freq = 10000f64.powf(-((i / 2 * 2) as f64) / d as f64);
                let a = pos as f64 * freq;
                row[i] = if i % 2 == 0 { a.sin() } else { a.cos() };
            }
        }
    }
    Tensor::matrix(rows, d, data).expect("positions: non-empty batch")
}

#[cfg(test)]
mod tests;
