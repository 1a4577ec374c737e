use crate::error::{Error, Result};

/// Network dimensions and regularisation rates.
#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// `M`, modeled apps.
    pub num_apps: usize,
    /// `K`, app categories.
    pub num_categories: usize,
    pub d_model: usize,
    pub d_ffn: usize,
    pub n_heads: usize,
    pub n_encoder_layers: usize,
    pub n_decoder_layers: usize,
    /// Width of the user embedding.
    pub d_emb: usize,
    /// `I`, length of each operation sequence.
    pub seq_len: usize,
    /// `T`, number of date buckets.
    pub num_dates: usize,
    pub dropout_input: f64,
    pub dropout_attn_ffn: f64,
    pub leaky_slope: f64,
    /// Middle width of the retention autoencoder.
    pub ae_mid_dim: usize,
    pub layer_norm_eps: f64,
    /// Std of the normal init for embedding tables.
    pub init_std: f64,
}

impl ModelConfig {
    /// Sizes used for the production model.
    pub fn production(num_apps: usize, num_categories: usize) -> Self {
        ModelConfig {
            num_apps,
            num_categories,
            d_model: 512,
            d_ffn: 1024,
            n_heads: 8,
            n_encoder_layers: 2,
            n_decoder_layers: 1,
            d_emb: 128,
            seq_len: 25,
            num_dates: 180,
            dropout_input: 0.05,
            dropout_attn_ffn: 0.1,
            leaky_slope: 0.01,
            ae_mid_dim: 128,
            layer_norm_eps: 1e-6,
            init_std: 0.02,
        }
    }

    /// Production ratios scaled down to run on a laptop core.
    pub fn desk(num_apps: usize, num_categories: usize) -> Self {
        ModelConfig {
            d_model: 64,
            d_ffn: 128,
            n_heads: 4,
            d_emb: 16,
            ae_mid_dim: 16,
            ..Self::production(num_apps, num_categories)
        }
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    /// Encoder sequence length, `2I + 1`.
    pub fn encoder_len(&self) -> usize {
        2 * self.seq_len + 1
    }

    pub fn validate(&self) -> Result<()> {
        let dims = [
            ("num_apps", self.num_apps),
            ("num_categories", self.num_categories),
            ("d_model", self.d_model),
            ("d_ffn", self.d_ffn),
            ("n_heads", self.n_heads),
            ("n_encoder_layers", self.n_encoder_layers),
            ("n_decoder_layers", self.n_decoder_layers),
            ("d_emb", self.d_emb),
            ("seq_len", self.seq_len),
            ("num_dates", self.num_dates),
            ("ae_mid_dim", self.ae_mid_dim),
        ];
        if let Some((name, _)) = dims.iter().find(|(_, v)| *v == 0) {
            return Err(Error::Invalid(format!("{name} must be >= 1")));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Invalid(format!(
                "d_model {} not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if self.d_emb >= self.d_model {
            return Err(Error::Invalid(format!(
                "d_emb {} must be below d_model {}",
                self.d_emb, self.d_model
            )));
        }
        for (name, p) in [
            ("dropout_input", self.dropout_input),
            ("dropout_attn_ffn", self.dropout_attn_ffn),
        ] {
            if !(0.0..1.0).contains(&p) {
                return Err(Error::Invalid(format!("{name} {p} outside [0, 1)")));
            }
        }
        if !(self.leaky_slope.is_finite() && self.layer_norm_eps > 0.0 && self.init_std > 0.0) {
            return Err(Error::Invalid(
                "leaky_slope, layer_norm_eps and init_std must be finite and positive".into(),
            ));
        }
        Ok(())
    }
}
