use crate::attention::{Variant, VariantConfig};
use crate::kv::{KvError, KvMap};

#[derive(Debug, thiserror::Error)]
pub enum ConfigError {
    #[error(transparent)]
    Kv(#[from] KvError),
    #[error("invalid model config: {0}")]
    Invalid(String),
}

/// Architecture, loss and optimizer settings of one model.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    pub d_model: usize,
    pub heads: usize,
    pub d_ff: usize,
    pub enc_layers: usize,
    pub dec_layers: usize,
    pub dropout: f64,
    pub label_smoothing: f64,
    pub variant: VariantConfig,
    pub vocab_size: usize,
    pub feat_dim: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub warmup: usize,
    /// Multiplier on the warm-up schedule (1 gives the plain schedule).
    pub lr_factor: f64,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            d_model: 64,
            heads: 4,
            d_ff: 128,
            enc_layers: 2,
            dec_layers: 2,
            dropout: 0.1,
            label_smoothing: 0.1,
            variant: VariantConfig::new(Variant::Baseline),
            vocab_size: 0,
            feat_dim: 16,
            beta1: 0.9,
            beta2: 0.998,
            adam_eps: 1e-8,
            warmup: 400,
            lr_factor: 1.0,
            seed: 1,
        }
    }
}

impl ModelConfig {
    /// Small configuration used by tests.
    pub fn tiny(vocab_size: usize, variant: Variant) -> Self {
        Self {
            d_model: 8,
            heads: 2,
            d_ff: 16,
            enc_layers: 1,
            dec_layers: 1,
            dropout: 0.0,
            vocab_size,
            feat_dim: 4,
            variant: VariantConfig::new(variant),
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.d_model == 0 || self.heads == 0 || self.d_model % self.heads != 0 {
            return bad(format!("d_model {} not divisible by heads {}", self.d_model, self.heads));
        }
        if self.d_ff == 0 || self.feat_dim == 0 || self.dec_layers == 0 {
            return bad("d_ff, feat_dim and dec_layers must be positive".into());
        }
        if self.vocab_size < 5 {
            return bad(format!("vocab_size {} leaves no real tokens", self.vocab_size));
        }
        for (name, r) in [("dropout", self.dropout), ("label_smoothing", self.label_smoothing), ("beta1", self.beta1), ("beta2", self.beta2)] {
            if !(0.0..1.0).contains(&r) {
                return bad(format!("{name} = {r} outside [0, 1)"));
            }
        }
        if !(self.adam_eps > 0.0 && self.lr_factor > 0.0 && self.lr_factor.is_finite()) {
            return bad("adam_eps and lr_factor must be positive".into());
        }
        if self.warmup == 0 {
            return bad("warmup must be at least 1".into());
        }
        self.variant.mask.validate().map_err(|e| ConfigError::Invalid(e.to_string()))
    }

    pub fn to_kv(&self) -> KvMap {
        let mut m = KvMap::default();
        m.set("d_model", self.d_model);
        m.set("heads", self.heads);
        m.set("d_ff", self.d_ff);
        m.set("enc_layers", self.enc_layers);
        m.set("dec_layers", self.dec_layers);
        m.set("dropout", self.dropout);
        m.set("label_smoothing", self.label_smoothing);
        m.set("variant", self.variant.variant);
        m.set("w_same", self.variant.mask.w_same);
        m.set("w_diff", self.variant.mask.w_diff);
        m.set("alpha", self.variant.mask.alpha);
        m.set("vocab_size", self.vocab_size);
        m.set("feat_dim", self.feat_dim);
        m.set("beta1", self.beta1);
        m.set("beta2", self.beta2);
        m.set("adam_eps", self.adam_eps);
        m.set("warmup", self.warmup);
        m.set("lr_factor", self.lr_factor);
        m.set("seed", self.seed);
        m
    }

    /// Overwrites the fields named in `m`, consuming those keys.
    pub fn apply_kv(&mut self, m: &mut KvMap) -> Result<(), ConfigError> {
        m.take_into("d_model", &mut self.d_model)?;
        m.take_into("heads", &mut self.heads)?;
        m.take_into("d_ff", &mut self.d_ff)?;
        m.take_into("enc_layers", &mut self.enc_layers)?;
        m.take_into("dec_layers", &mut self.dec_layers)?;
        m.take_into("dropout", &mut self.dropout)?;
        m.take_into("label_smoothing", &mut self.label_smoothing)?;
        m.take_into("variant", &mut self.variant.variant)?;
        m.take_into("w_same", &mut self.variant.mask.w_same)?;
        m.take_into("w_diff", &mut self.variant.mask.w_diff)?;
        m.take_into("alpha", &mut self.variant.mask.alpha)?;
        m.take_into("vocab_size", &mut self.vocab_size)?;
        m.take_into("feat_dim", &mut self.feat_dim)?;
        m.take_into("beta1", &mut self.beta1)?;
        m.take_into("beta2", &mut self.beta2)?;
        m.take_into("adam_eps", &mut self.adam_eps)?;
        m.take_into("warmup", &mut self.warmup)?;
        m.take_into("lr_factor", &mut self.lr_factor)?;
        m.take_into("seed", &mut self.seed)?;
        Ok(())
    }

    pub fn from_kv_text(text: &str) -> Result<Self, ConfigError> {
        let mut m = KvMap::parse(text)?;
        let mut c = Self::default();
        c.apply_kv(&mut m)?;
        m.finish()?;
        c.validate()?;
        Ok(c)
    }

    /// Learning rate at `step` (1-based).
    pub fn learning_rate(&self, step: usize) -> f64 {
        noam_rate(self.d_model, self.warmup, step) * self.lr_factor
    }
}

/// `d^-0.5 * min(step^-0.5, step * warmup^-1.5)`.
pub fn noam_rate(d_model: usize, warmup: usize, step: usize) -> f64 {
    let s = step.max(1) as f64;
    (d_model as f64).powf(-0.5) * s.powf(-0.5).min(s * (warmup as f64).powf(-1.5))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kv_round_trip() {
        let mut c = ModelConfig::tiny(12, Variant::SplitIndependent);
        c.variant.mask.alpha = 0.25;
        c.seed = 99;
        let back = ModelConfig::from_kv_text(&c.to_kv().to_text()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn rejects_bad_values() {
        let mut c = ModelConfig::tiny(12, Variant::Baseline);
        c.heads = 3;
        assert!(c.validate().is_err());
        let mut c = ModelConfig::tiny(12, Variant::Baseline);
        c.dropout = 1.0;
        assert!(c.validate().is_err());
        assert!(ModelConfig::from_kv_text("vocab_size = 12\nbogus = 1\n").is_err());
    }

    #[test]
    fn warmup_schedule() {
        let d: f64 = 64.0;
        assert_eq!(noam_rate(64, 4000, 1), d.powf(-0.5) * 4000f64.powf(-1.5));
        // Peak at the end of warm-up, then inverse square-root decay.
        let peak = noam_rate(64, 100, 100);
        assert!(noam_rate(64, 100, 99) < peak && noam_rate(64, 100, 101) < peak);
        assert!((noam_rate(64, 100, 400) * 2.0 - peak).abs() < 1e-15);
    }
}
