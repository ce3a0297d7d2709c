//! Procedural stand-in for annotated retinal images.
//!
//! Each image is a noisy mid-grey field with one or two Gaussian blobs in
//! distinct quadrants. Three lesion types have distinctive contrast; three
//! more share one faint rendering, so only the keywords can tell them apart.
//! Blob positions are only available from the image.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Lesion {
    Hemorrhage,
    Exudate,
    Drusen,
    Edema,
    Atrophy,
    Ischemia,
}

impl Lesion {
    pub const ALL: [Lesion; 6] = [
        Lesion::Hemorrhage,
        Lesion::Exudate,
        Lesion::Drusen,
        Lesion::Edema,
        Lesion::Atrophy,
        Lesion::Ischemia,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Lesion::Hemorrhage => "hemorrhage",
            Lesion::Exudate => "exudate",
            Lesion::Drusen => "drusen",
            Lesion::Edema => "edema",
            Lesion::Atrophy => "atrophy",
            Lesion::Ischemia => "ischemia",
        }
    }

    /// Peak intensity offset from the background.
    pub fn contrast(self) -> f64 {
        match self {
            Lesion::Hemorrhage => -0.4,
            Lesion::Exudate => 0.4,
            Lesion::Drusen => 0.22,
            Lesion::Edema | Lesion::Atrophy | Lesion::Ischemia => 0.1,
        }
    }

    /// True when the rendering alone identifies the type.
    pub fn visible(self) -> bool {
        matches!(self, Lesion::Hemorrhage | Lesion::Exudate | Lesion::Drusen)
    }
}

/// Quadrants in reading order: upper left, upper right, lower left, lower right.
pub fn quadrant_words(q: usize) -> (&'static str, &'static str) {
    let v = if q < 2 { "upper" } else { "lower" };
    let h = if q % 2 == 0 { "left" } else { "right" };
    (v, h)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    pub lesion: Lesion,
    pub quadrant: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SynthConfig {
    pub side: usize,
    pub channels: usize,
    /// Amplitude of uniform background noise.
    pub noise: f64,
    /// Probability of a second blob.
    pub two_blob_prob: f64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            side: 16,
            channels: 1,
            noise: 0.03,
            two_blob_prob: 0.6,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSample {
    pub seed: u64,
    pub image: Tensor,
    pub findings: Vec<Finding>,
    pub keywords: String,
    pub report: String,
}

pub fn keywords_text(findings: &[Finding]) -> String {
    findings
        .iter()
        .map(|f| f.lesion.name())
        .collect::<Vec<_>>()
        .join(" [SEP] ")
}

pub fn report_text(findings: &[Finding]) -> String {
    match findings {
        [f] => {
            let (v, h) = quadrant_words(f.quadrant);
            format!("findings show {} in {v} {h} quadrant", f.lesion.name())
        }
        _ => findings
            .iter()
            .map(|f| {
                let (v, h) = quadrant_words(f.quadrant);
                format!("{} in {v} {h}", f.lesion.name())
            })
            .collect::<Vec<_>>()
            .join(" and "),
    }
}

/// Draws the findings for one sample seed.
pub fn draw_findings(seed: u64, cfg: &SynthConfig) -> Vec<Finding> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let k = if rng.random::<f64>() < cfg.two_blob_prob { 2 } else { 1 };
    let mut quadrants: Vec<usize> = Vec::new();
    while quadrants.len() < k {
        let q = rng.random_range(0..4);
        if !quadrants.contains(&q) {
            quadrants.push(q);
        }
    }
    quadrants.sort_unstable();
    quadrants
        .into_iter()
        .map(|quadrant| Finding {
            lesion: Lesion::ALL[rng.random_range(0..Lesion::ALL.len())],
            quadrant,
        })
        .collect()
}

/// Renders the sample with the given per-sample seed.
pub fn render(seed: u64, cfg: &SynthConfig) -> SyntheticSample {
    let findings = draw_findings(seed, cfg);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_1a7e_0000_0001);
    let side = cfg.side;
    let half = side as f64 / 2.0;
    let radius = (side as f64 / 8.0).max(1.0);
    let centers: Vec<(f64, f64, f64)> = findings
        .iter()
        .map(|f| {
            let (qy, qx) = ((f.quadrant / 2) as f64, (f.quadrant % 2) as f64);
            let jitter = half * 0.25;
            let cy = qy * half + half / 2.0 + rng.random_range(-jitter..=jitter);
            let cx = qx * half + half / 2.0 + rng.random_range(-jitter..=jitter);
            (cy, cx, f.lesion.contrast())
        })
        .collect();
    let mut data = Vec::with_capacity(side * side * cfg.channels);
    for y in 0..side {
        for x in 0..side {
            let mut v = 0.5 + rng.random_range(-cfg.noise..=cfg.noise);
            for &(cy, cx, a) in &centers {
                let d2 = (y as f64 + 0.5 - cy).powi(2) + (x as f64 + 0.5 - cx).powi(2);
                v += a * (-d2 / (2.0 * radius * radius)).exp();
            }
            for c in 0..cfg.channels {
                data.push(v * (1.0 - 0.1 * c as f64));
            }
        }
    }
    SyntheticSample {
        seed,
        image: Tensor::new(vec![side, side, cfg.channels], data).expect("consistent image shape"),
        keywords: keywords_text(&findings),
        report: report_text(&findings),
        findings,
    }
}

/// Per-sample seeds derived from a corpus seed.
pub fn sample_seeds(n: usize, seed: u64) -> Vec<u64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.next_u64()).collect()
}

pub fn synth_generate(n: usize, seed: u64, cfg: &SynthConfig) -> Vec<SyntheticSample> {
    sample_seeds(n, seed).into_iter().map(|s| render(s, cfg)).collect()
}

/// Every word the generator can emit, for building a vocabulary.
pub fn lexicon() -> Vec<&'static str> {
    let mut words = vec!["findings", "show", "in", "quadrant", "and", "upper", "lower", "left", "right"];
    words.extend(Lesion::ALL.iter().map(|l| l.name()));
    words
}
