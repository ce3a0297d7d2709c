//! Plain-Rust side of the demo, usable and testable without a browser.

use dream_core::config::ScheduleConfig;
use dream_core::data::{keyword_ids, synth, Sample, SynthConfig, Vocab};
use dream_core::decoder::DecodeMode;
use dream_core::metrics;
use dream_core::train::Trainer;
use dream_core::{Dream, ModelConfig, TrainConfig};

pub const MAX_TOKENS: usize = 16;
/// Length of the demo's learning-rate schedule; training stops there.
pub const MAX_STEPS: usize = 5000;

/// Greyscale bytes plus the paired keyword and report text.
#[derive(Clone, Debug, PartialEq)]
pub struct Rendered {
    pub side: usize,
    pub pixels: Vec<u8>,
    pub keywords: String,
    pub report: String,
}

pub fn render(seed: u64) -> Rendered {
    let cfg = SynthConfig::default();
    let s = synth::render(seed, &cfg);
    let c = cfg.channels;
    let pixels = s
        .image
        .data()
        .chunks(c)
        .map(|px| (px[0].clamp(0.0, 1.0) * 255.0).round() as u8)
        .collect();
    Rendered {
        side: cfg.side,
        pixels,
        keywords: s.keywords,
        report: s.report,
    }
}

/// A toy model training on a small synthetic set, one step at a time.
pub struct Demo {
    trainer: Trainer,
    vocab: Vocab,
    data: Vec<Sample>,
    synth: SynthConfig,
}

impl Demo {
    pub fn new(seed: u64, samples: usize) -> Result<Demo, String> {
        if samples == 0 {
            return Err("need at least one training sample".into());
        }
        let synth = SynthConfig::default();
        let vocab = Vocab::build(synth::lexicon(), 5000).map_err(|e| e.to_string())?;
        let data = synth::synth_generate(samples, seed, &synth)
            .iter()
            .map(|s| Sample::from_text(s.image.clone(), &s.keywords, &s.report, &vocab))
            .collect::<dream_core::Result<Vec<_>>>()
            .map_err(|e| e.to_string())?;
        let model = Dream::new(ModelConfig {
            vocab_size: vocab.len(),
            seed,
            ..ModelConfig::toy()
        })
        .map_err(|e| e.to_string())?;
        let config = TrainConfig {
            lr: 2e-3,
            batch_size: samples.min(16),
            epochs: 1_000_000,
            max_steps: Some(MAX_STEPS),
            schedule: ScheduleConfig {
                warmup_fraction: 0.0,
                floor_fraction: 0.1,
            },
            seed,
            ..TrainConfig::default()
        };
        let trainer = Trainer::new(model, config).map_err(|e| e.to_string())?;
        Ok(Demo {
            trainer,
            vocab,
            data,
            synth,
        })
    }

    pub fn params(&self) -> usize {
        self.trainer.model.param_count()
    }

    pub fn steps(&self) -> usize {
        self.trainer.step
    }

    /// Runs `n` optimizer steps and returns the last per-token cross-entropy.
    pub fn train(&mut self, n: usize) -> Result<f64, String> {
        let mut last = f64::NAN;
        for _ in 0..n {
            if self.trainer.done(self.data.len()) {
                break;
            }
            last = self.trainer.step_next(&self.data).map_err(|e| e.to_string())?.ce_per_token;
        }
        Ok(last)
    }

    pub fn generate(&self, image_seed: u64, keywords: &str) -> Result<String, String> {
        let image = synth::render(image_seed, &self.synth).image;
        let (ids, _) = keyword_ids(&self.vocab, keywords);
        let out = self
            .trainer
            .model
            .generate(&image, &ids, MAX_TOKENS, DecodeMode::Greedy)
            .map_err(|e| e.to_string())?;
        Ok(self.vocab.decode(&out))
    }
}

/// Scores line-paired hypotheses against references; returns JSON.
pub fn score(hypotheses: &str, references: &str) -> Result<String, String> {
    let split = |s: &str| -> Vec<Vec<String>> { s.lines().map(metrics::words).collect() };
    let (h, r) = (split(hypotheses), split(references));
    if h.len() != r.len() {
        return Err(format!("{} hypothesis lines but {} reference lines", h.len(), r.len()));
    }
    let report = metrics::score(&h, &r).map_err(|e| e.to_string())?;
    serde_json::to_string(&report).map_err(|e| e.to_string())
}
