//! Run configuration: TOML file, then command-line overrides.

use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use dream_core::autodiff::AttnNorm;
use dream_core::data::vocab::RESERVED;
use dream_core::data::SynthConfig;
use dream_core::{ModelConfig, Precision, TrainConfig};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    /// Line-delimited training records; synthetic data when unset.
    pub train: Option<PathBuf>,
    pub eval: Option<PathBuf>,
    pub train_samples: usize,
    pub eval_samples: usize,
    pub train_seed: u64,
    pub eval_seed: u64,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            train: None,
            eval: None,
            train_samples: 200,
            eval_samples: 50,
            train_seed: 1,
            eval_seed: 2,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PathsConfig {
    pub out: PathBuf,
    /// Defaults to `<out>/checkpoint.bin`.
    pub checkpoint: Option<PathBuf>,
}

impl Default for PathsConfig {
    fn default() -> Self {
        PathsConfig {
            out: PathBuf::from("runs/default"),
            checkpoint: None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    #[default]
    Eval,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct EvalConfig {
    pub split: Split,
    pub max_len: usize,
    /// Probability of dropping each keyword before decoding.
    pub keyword_dropout: f64,
    pub dropout_seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            split: Split::Eval,
            max_len: 16,
            keyword_dropout: 0.0,
            dropout_seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GradCheckConfig {
    pub h: f64,
    /// Fraction of coordinates probed in the end-to-end check.
    pub fraction: f64,
    pub batch: usize,
    pub seed: u64,
}

impl Default for GradCheckConfig {
    fn default() -> Self {
        GradCheckConfig {
            h: 1e-3,
            fraction: 0.05,
            batch: 2,
            seed: 0,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub synth: SynthConfig,
    pub data: DataConfig,
    pub paths: PathsConfig,
    pub eval: EvalConfig,
    pub grad_check: GradCheckConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            model: ModelConfig::toy(),
            train: TrainConfig::default(),
            synth: SynthConfig::default(),
            data: DataConfig::default(),
            paths: PathsConfig::default(),
            eval: EvalConfig::default(),
            grad_check: GradCheckConfig::default(),
        }
    }
}

/// Component switched off by `--ablate`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, clap::ValueEnum)]
pub enum Ablate {
    Kw,
    Abs,
    Adp,
    Ca,
}

/// Command-line values that take precedence over the config file.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub epochs: Option<usize>,
    pub max_steps: Option<usize>,
    pub batch_size: Option<usize>,
    pub lr: Option<f64>,
    pub lambda: Option<f64>,
    pub attn: Option<AttnNorm>,
    pub precision: Option<Precision>,
    pub ablate: Vec<Ablate>,
    pub keyword_dropout: Option<f64>,
    pub max_len: Option<usize>,
    pub samples: Option<usize>,
    pub split: Option<Split>,
    pub out: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        RunConfig::from_toml(&text).with_context(|| format!("in config {}", path.display()))
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string(self)?)
    }

    /// Applies command-line values. Returns notes about implied changes.
    pub fn apply(&mut self, o: &Overrides) -> Vec<String> {
        let mut notes = Vec::new();
        if let Some(s) = o.seed {
            self.model.seed = s;
            self.train.seed = s;
        }
        if let Some(e) = o.epochs {
            self.train.epochs = e;
        }
        if let Some(m) = o.max_steps {
            self.train.max_steps = Some(m);
        }
        if let Some(b) = o.batch_size {
            self.train.batch_size = b;
        }
        if let Some(lr) = o.lr {
            self.train.lr = lr;
        }
        if let Some(l) = o.lambda {
            self.train.lambda = l;
        }
        if let Some(a) = o.attn {
            self.model.attn_norm = a;
        }
        if let Some(p) = o.precision {
            self.model.precision = p;
        }
        for a in &o.ablate {
            let c = &mut self.model.components;
            match a {
                Ablate::Kw => {
                    if c.abstractor || c.adaptor {
                        notes.push("--ablate kw also disables the abstractor and adaptor, which fuse keywords".into());
                    }
                    c.keywords = false;
                    c.abstractor = false;
                    c.adaptor = false;
                }
                Ablate::Abs => c.abstractor = false,
                Ablate::Adp => c.adaptor = false,
                Ablate::Ca => c.alignment = false,
            }
        }
        if let Some(p) = o.keyword_dropout {
            self.eval.keyword_dropout = p;
        }
        if let Some(m) = o.max_len {
            self.eval.max_len = m;
        }
        if let Some(n) = o.samples {
            self.data.train_samples = n;
        }
        if let Some(s) = o.split {
            self.eval.split = s;
        }
        if let Some(out) = &o.out {
            self.paths.out = out.clone();
        }
        if let Some(c) = &o.checkpoint {
            self.paths.checkpoint = Some(c.clone());
        }
        notes
    }

    pub fn checkpoint_path(&self) -> PathBuf {
        self.paths.checkpoint.clone().unwrap_or_else(|| self.paths.out.join("checkpoint.bin"))
    }

    /// Field-level checks run before any compute. `vocab_size = 0` means
    /// "derive from the training data".
    pub fn validate(&self) -> Result<()> {
        let mut model = self.model.clone();
        if model.vocab_size == 0 {
            model.vocab_size = RESERVED.len() + 1;
        }
        model.validate().context("[model]")?;
        self.train.validate().context("[train]")?;
        if self.synth.side != self.model.image_side {
            bail!(
                "[synth] side = {} but [model] image_side = {}; they must match",
                self.synth.side,
                self.model.image_side
            );
        }
        if self.synth.channels != self.model.image_channels {
            bail!(
                "[synth] channels = {} but [model] image_channels = {}; they must match",
                self.synth.channels,
                self.model.image_channels
            );
        }
        if !(0.0..=1.0).contains(&self.synth.two_blob_prob) {
            bail!("[synth] two_blob_prob must lie in [0, 1]");
        }
        if self.data.train.is_none() && self.data.train_samples == 0 {
            bail!("[data] train_samples must be positive when no training file is given");
        }
        if !(0.0..=1.0).contains(&self.eval.keyword_dropout) {
            bail!("[eval] keyword_dropout = {} is outside [0, 1]", self.eval.keyword_dropout);
        }
        if self.eval.max_len == 0 || self.eval.max_len > self.model.max_report_len {
            bail!(
                "[eval] max_len = {} must lie in 1..={} (model max_report_len)",
                self.eval.max_len,
                self.model.max_report_len
            );
        }
        let g = &self.grad_check;
        if !(1e-7..=1e-3).contains(&g.h) {
            bail!("[grad_check] h = {} is outside [1e-7, 1e-3]", g.h);
        }
        if !(g.fraction > 0.0 && g.fraction <= 1.0) {
            bail!("[grad_check] fraction must lie in (0, 1]");
        }
        if g.batch == 0 {
            bail!("[grad_check] batch must be positive");
        }
        Ok(())
    }
}
