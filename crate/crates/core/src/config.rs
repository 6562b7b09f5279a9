//! Model and objective hyperparameters.

use crate::error::{Error, Result};

/// Additive stabilizer used in every normalization and log-bias.
pub const EPS_NUM: f64 = 1e-6;

/// Epsilon inside layer normalization.
pub const LAYER_NORM_EPS: f64 = 1e-5;

#[derive(Clone, Debug, PartialEq)]
pub struct EncoderConfig {
    pub d_model: usize,
    pub d_x: usize,
    pub layers: usize,
    pub heads: usize,
    pub conv_kernel: usize,
    pub dropout: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            d_model: 256,
            d_x: 32,
            layers: 2,
            heads: 4,
            conv_kernel: 3,
            dropout: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SegmentationConfig {
    /// Number of segment tokens `M`.
    pub segments: usize,
    /// Boundary softness.
    pub gamma: f64,
    /// Hidden width of the boundary MLP; 0 means `d_model`.
    pub mlp_hidden: usize,
    pub eps_num: f64,
}

impl Default for SegmentationConfig {
    fn default() -> Self {
        Self {
            segments: 16,
            gamma: 1.0,
            mlp_hidden: 0,
            eps_num: EPS_NUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct RoutingConfig {
    pub sinkhorn_iters: usize,
    /// Strength of the optional coarse-to-fine similarity penalty (0 = off).
    pub monotonic_bias_eta: f64,
    pub eps_num: f64,
}

impl Default for RoutingConfig {
    fn default() -> Self {
        Self {
            sinkhorn_iters: 10,
            monotonic_bias_eta: 0.0,
            eps_num: EPS_NUM,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ThinkConfig {
    /// Number of thought slots `K`.
    pub thoughts: usize,
    /// Number of thinking layers `L`.
    pub layers: usize,
    pub heads: usize,
    pub lambda_p: f64,
    pub use_content_bias: bool,
    pub use_log_prior_bias: bool,
}

impl Default for ThinkConfig {
    fn default() -> Self {
        Self {
            thoughts: 8,
            layers: 2,
            heads: 4,
            lambda_p: 1.0,
            use_content_bias: true,
            use_log_prior_bias: true,
        }
    }
}

/// Which thinking layer's routing feeds the decoder prior.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PriorLayer {
    First,
    Final,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DecoderConfig {
    pub layers: usize,
    pub heads: usize,
    pub lambda_w: f64,
    pub use_prior: bool,
    pub prior_layer: PriorLayer,
    pub vocab_size: usize,
}

impl Default for DecoderConfig {
    fn default() -> Self {
        Self {
            layers: 2,
            heads: 4,
            lambda_w: 1.0,
            use_prior: true,
            prior_layer: PriorLayer::Final,
            vocab_size: 24,
        }
    }
}

/// Everything needed to build parameters and run a forward pass.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub segmentation: SegmentationConfig,
    pub routing: RoutingConfig,
    pub think: ThinkConfig,
    pub decoder: DecoderConfig,
}

impl ModelConfig {
    pub fn d_model(&self) -> usize {
        self.encoder.d_model
    }

    pub fn dropout(&self) -> f64 {
        self.encoder.dropout
    }

    pub fn seg_hidden(&self) -> usize {
        match self.segmentation.mlp_hidden {
            0 => self.encoder.d_model,
            h => h,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let check = |ok: bool, msg: &str| if ok { Ok(()) } else { Err(Error::config(msg)) };
        check(e.d_model >= 1 && e.d_x >= 1, "d_model and d_x must be >= 1")?;
        for (h, what) in [
            (e.heads, "encoder"),
            (self.think.heads, "thinking"),
            (self.decoder.heads, "decoder"),
        ] {
            check(h >= 1 && e.d_model % h == 0, &format!("{what} heads must divide d_model"))?;
        }
        check(e.conv_kernel % 2 == 1, "conv_kernel must be odd")?;
        check((0.0..1.0).contains(&e.dropout), "dropout must be in [0, 1)")?;
        check(self.segmentation.segments >= 1, "segments must be >= 1")?;
        check(self.segmentation.gamma > 0.0, "gamma must be > 0")?;
        check(self.segmentation.eps_num > 0.0, "eps_num must be > 0")?;
        check(self.routing.sinkhorn_iters >= 1, "sinkhorn_iters must be >= 1")?;
        check(self.routing.monotonic_bias_eta >= 0.0, "monotonic bias must be >= 0")?;
        check(self.think.thoughts >= 1, "thoughts must be >= 1")?;
        check(self.think.layers >= 1, "think layers must be >= 1")?;
        check(self.think.lambda_p >= 0.0, "lambda_p must be >= 0")?;
        check(self.decoder.layers >= 1, "decoder layers must be >= 1")?;
        check(self.decoder.lambda_w >= 0.0, "lambda_w must be >= 0")?;
        check(self.decoder.vocab_size > 4, "vocabulary must extend past the special tokens")?;
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct LossConfig {
    pub label_smoothing: f64,
    /// Margin in the ordering penalty.
    pub delta: f64,
    pub lambda_mono: f64,
    pub lambda_cont: f64,
    /// Apply the structural penalties to every thinking layer, not just the last.
    pub regularize_all_layers: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            label_smoothing: 0.1,
            delta: 1.0,
            lambda_mono: 0.1,
            lambda_cont: 0.2,
            regularize_all_layers: false,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.label_smoothing) {
            return Err(Error::config("label_smoothing must be in [0, 1)"));
        }
        if self.delta < 0.0 || self.lambda_mono < 0.0 || self.lambda_cont < 0.0 {
            return Err(Error::config("loss weights must be >= 0"));
        }
        Ok(())
    }
}
