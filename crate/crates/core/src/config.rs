//! Model and training hyperparameters.

use serde::{Deserialize, Serialize};

use crate::autodiff::AttnNorm;
use crate::error::{DreamError, Result};
use crate::tensor::Precision;

/// Which fusion components are active. The five rows of
/// [`Components::ablation_grid`] add keywords, the abstractor, the adaptor
/// and the alignment loss one at a time.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Components {
    pub keywords: bool,
    pub abstractor: bool,
    pub adaptor: bool,
    pub alignment: bool,
}

impl Default for Components {
    fn default() -> Self {
        Components::full()
    }
}

impl Components {
    pub fn full() -> Self {
        Components {
            keywords: true,
            abstractor: true,
            adaptor: true,
            alignment: true,
        }
    }

    pub fn ablation_grid() -> [Components; 5] {
        let row = |keywords, abstractor, adaptor, alignment| Components {
            keywords,
            abstractor,
            adaptor,
            alignment,
        };
        [
            row(false, false, false, false),
            row(true, false, false, false),
            row(true, true, false, false),
            row(true, true, true, false),
            row(true, true, true, true),
        ]
    }

    /// Neither fusion module is active: features are projected and stacked.
    pub fn static_fusion(&self) -> bool {
        !self.abstractor && !self.adaptor
    }

    pub fn label(&self) -> String {
        let mark = |b: bool| if b { "+" } else { "-" };
        format!(
            "KW{} Abs{} Adp{} CA{}",
            mark(self.keywords),
            mark(self.abstractor),
            mark(self.adaptor),
            mark(self.alignment)
        )
    }

    fn validate(&self) -> Result<()> {
        if (self.abstractor || self.adaptor) && !self.keywords {
            return Err(DreamError::config(
                "components",
                "the abstractor and adaptor fuse keywords and need `keywords = true`",
            ));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    /// Square input side, divisible by 8.
    pub image_side: usize,
    pub image_channels: usize,
    /// Channels of the first two stride-2 conv blocks; the third emits `visual_dim`.
    pub conv_channels: [usize; 2],
    /// E_V.
    pub visual_dim: usize,
    /// E_L.
    pub keyword_dim: usize,
    pub keyword_heads: usize,
    pub keyword_layers: usize,
    pub keyword_ffn_dim: usize,
    /// Longest keyword sequence, `[SEP]` tokens included.
    pub max_keywords: usize,
    pub positional_encoding: bool,
    /// H_V; `None` means `visual_dim`.
    pub visual_hidden: Option<usize>,
    /// H_L; `None` means `keyword_dim`.
    pub keyword_hidden: Option<usize>,
    /// P, the shared fusion width.
    pub shared_dim: usize,
    pub align_dim: usize,
    pub tau_init: f64,
    pub symmetric_infonce: bool,
    pub visual_gate_init: f64,
    pub language_gate_init: f64,
    pub adaptor_depth: usize,
    /// Decoder width d.
    pub model_dim: usize,
    pub decoder_layers: usize,
    pub query_heads: usize,
    pub kv_heads: usize,
    /// SwiGLU hidden width; `None` means 4d/3 rounded up to a multiple of 8.
    pub ffn_dim: Option<usize>,
    /// Longest decoder input (start token plus report tokens).
    pub max_report_len: usize,
    pub rope_base: f64,
    pub rms_eps: f64,
    pub ln_eps: f64,
    pub attn_norm: AttnNorm,
    pub components: Components,
    pub precision: Precision,
    pub vocab_size: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    /// Desk-scale defaults.
    fn default() -> Self {
        ModelConfig {
            image_side: 32,
            image_channels: 1,
            conv_channels: [16, 32],
            visual_dim: 64,
            keyword_dim: 64,
            keyword_heads: 4,
            keyword_layers: 2,
            keyword_ffn_dim: 128,
            max_keywords: 8,
            positional_encoding: true,
            visual_hidden: None,
            keyword_hidden: None,
            shared_dim: 64,
            align_dim: 64,
            tau_init: 0.07,
            symmetric_infonce: false,
            visual_gate_init: 0.1,
            language_gate_init: 0.9,
            adaptor_depth: 1,
            model_dim: 128,
            decoder_layers: 2,
            query_heads: 4,
            kv_heads: 2,
            ffn_dim: None,
            max_report_len: 16,
            rope_base: 10_000.0,
            rms_eps: 1e-5,
            ln_eps: 1e-5,
            attn_norm: AttnNorm::Softmax,
            components: Components::full(),
            precision: Precision::F64,
            vocab_size: 0,
            seed: 0,
        }
    }
}

impl ModelConfig {
    /// Small configuration (well under 50k parameters for the synthetic
    /// vocabulary) used for gradient checks and fast training runs.
    pub fn toy() -> Self {
        ModelConfig {
            image_side: 16,
            image_channels: 1,
            conv_channels: [8, 16],
            visual_dim: 16,
            keyword_dim: 16,
            keyword_heads: 4,
            keyword_layers: 2,
            keyword_ffn_dim: 32,
            shared_dim: 16,
            align_dim: 16,
            model_dim: 32,
            ..ModelConfig::default()
        }
    }

    pub fn visual_hidden_dim(&self) -> usize {
        self.visual_hidden.unwrap_or(self.visual_dim)
    }

    pub fn keyword_hidden_dim(&self) -> usize {
        self.keyword_hidden.unwrap_or(self.keyword_dim)
    }

    pub fn head_dim(&self) -> usize {
        self.model_dim / self.query_heads
    }

    pub fn swiglu_dim(&self) -> usize {
        self.ffn_dim
            .unwrap_or_else(|| (4 * self.model_dim).div_ceil(3).div_ceil(8) * 8)
    }

    /// Spatial extent of the visual grid (side / 8).
    pub fn grid_side(&self) -> usize {
        self.image_side / 8
    }

    /// S_V.
    pub fn visual_tokens(&self) -> usize {
        self.grid_side() * self.grid_side()
    }

    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("image_side", self.image_side),
            ("image_channels", self.image_channels),
            ("conv_channels[0]", self.conv_channels[0]),
            ("conv_channels[1]", self.conv_channels[1]),
            ("visual_dim", self.visual_dim),
            ("keyword_dim", self.keyword_dim),
            ("keyword_heads", self.keyword_heads),
            ("keyword_ffn_dim", self.keyword_ffn_dim),
            ("max_keywords", self.max_keywords),
            ("shared_dim", self.shared_dim),
            ("align_dim", self.align_dim),
            ("model_dim", self.model_dim),
            ("query_heads", self.query_heads),
            ("kv_heads", self.kv_heads),
            ("max_report_len", self.max_report_len),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(DreamError::config(field, "must be positive"));
            }
        }
        if self.image_side % 8 != 0 {
            return Err(DreamError::config(
                "image_side",
                format!("{} is not divisible by 8", self.image_side),
            ));
        }
        if self.keyword_dim % self.keyword_heads != 0 {
            return Err(DreamError::config("keyword_heads", "must divide keyword_dim"));
        }
        if self.model_dim % self.query_heads != 0 {
            return Err(DreamError::config("query_heads", "must divide model_dim"));
        }
        if self.query_heads % self.kv_heads != 0 {
            return Err(DreamError::config("kv_heads", "must divide query_heads"));
        }
        if self.head_dim() % 2 != 0 {
            return Err(DreamError::config("model_dim", "head dim must be even for RoPE"));
        }
        if self.visual_hidden == Some(0) || self.keyword_hidden == Some(0) || self.ffn_dim == Some(0) {
            return Err(DreamError::config("hidden dims", "must be positive"));
        }
        if self.adaptor_depth != 1 {
            return Err(DreamError::config("adaptor_depth", "only a single adaptor layer is supported"));
        }
        if !(self.tau_init > 1e-3) {
            return Err(DreamError::config("tau_init", "must exceed the 1e-3 temperature floor"));
        }
        for (field, g) in [
            ("visual_gate_init", self.visual_gate_init),
            ("language_gate_init", self.language_gate_init),
        ] {
            if !(g > 0.0 && g < 1.0) {
                return Err(DreamError::config(field, "gate must lie in (0, 1)"));
            }
        }
        if !(self.rms_eps >= 0.0 && self.ln_eps > 0.0 && self.rope_base > 0.0) {
            return Err(DreamError::config("eps", "norm epsilons must be non-negative and ln_eps positive"));
        }
        if self.vocab_size < 6 {
            return Err(DreamError::config("vocab_size", "vocabulary not set"));
        }
        self.components.validate()
    }
}

/// Learning-rate schedule shape.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ScheduleConfig {
    /// Fraction of total steps spent in linear warmup.
    pub warmup_fraction: f64,
    /// Final learning rate as a fraction of the peak.
    pub floor_fraction: f64,
}

impl Default for ScheduleConfig {
    fn default() -> Self {
        ScheduleConfig {
            warmup_fraction: 0.05,
            floor_fraction: 0.1,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub lr: f64,
    pub batch_size: usize,
    pub epochs: usize,
    /// Hard cap on optimizer steps; the schedule spans `min(max_steps, epochs × batches)`.
    pub max_steps: Option<usize>,
    /// Weight of the alignment term in the composite loss.
    pub lambda: f64,
    pub schedule: ScheduleConfig,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub grad_clip: f64,
    /// Weight of the quadratic pull of modality gates toward 0 (visual) / 1 (language).
    pub indicator_reg: f64,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            lr: 1e-4,
            batch_size: 32,
            epochs: 25,
            max_steps: None,
            lambda: 0.5,
            schedule: ScheduleConfig::default(),
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            grad_clip: 1.0,
            indicator_reg: 0.0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.lr > 0.0) {
            return Err(DreamError::config("lr", "must be positive"));
        }
        if !(self.lambda >= 0.0) {
            return Err(DreamError::config("lambda", "must be non-negative"));
        }
        if self.batch_size == 0 {
            return Err(DreamError::config("batch_size", "must be positive"));
        }
        if self.epochs == 0 {
            return Err(DreamError::config("epochs", "must be positive"));
        }
        if self.max_steps == Some(0) {
            return Err(DreamError::config("max_steps", "must be positive"));
        }
        let s = &self.schedule;
        if !(0.0..1.0).contains(&s.warmup_fraction) || !(0.0..=1.0).contains(&s.floor_fraction) {
            return Err(DreamError::config("schedule", "fractions must lie in [0, 1)"));
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return Err(DreamError::config("adam", "betas must lie in [0, 1) and eps be positive"));
        }
        if !(self.grad_clip > 0.0) {
            return Err(DreamError::config("grad_clip", "must be positive"));
        }
        if !(self.indicator_reg >= 0.0) {
            return Err(DreamError::config("indicator_reg", "must be non-negative"));
        }
        Ok(())
    }
}
