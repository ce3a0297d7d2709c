//! Vocabulary, synthetic corpus and dataset files.

pub mod dataset;
pub mod synth;
pub mod vocab;

use std::path::Path;

use crate::error::{DreamError, Result};
use crate::tensor::Tensor;

pub use dataset::{drop_keywords, epoch_batches, read_records, write_records, Record};
pub use synth::{synth_generate, SynthConfig, SyntheticSample};
pub use vocab::{Vocab, END, PAD, SEP, START, UNK};

/// One training or evaluation example in token-id form. `report` holds the
/// content tokens only; start and end markers are added by the model.
#[derive(Clone, Debug, PartialEq)]
pub struct Sample {
    pub image: Tensor,
    pub keywords: Vec<usize>,
    pub report: Vec<usize>,
}

/// Keyword ids, or a lone `[SEP]` when the text holds no keywords.
pub fn keyword_ids(vocab: &Vocab, text: &str) -> (Vec<usize>, Vec<String>) {
    let (ids, unknown) = vocab.encode_reporting(text);
    if ids.is_empty() {
        (vec![SEP], unknown)
    } else {
        (ids, unknown)
    }
}

impl Sample {
    pub fn from_text(image: Tensor, keywords: &str, report: &str, vocab: &Vocab) -> Result<Sample> {
        let report = vocab.encode(report);
        if report.is_empty() {
            return Err(DreamError::Dataset("empty report".into()));
        }
        Ok(Sample {
            image,
            keywords: keyword_ids(vocab, keywords).0,
            report,
        })
    }

    pub fn from_record(rec: &Record, base: &Path, cfg: &SynthConfig, vocab: &Vocab) -> Result<Sample> {
        Sample::from_text(rec.image(base, cfg)?, &rec.keywords, &rec.report, vocab)
    }

    /// Decoder input: start token followed by the report.
    pub fn decoder_input(&self) -> Vec<usize> {
        std::iter::once(START).chain(self.report.iter().copied()).collect()
    }

    /// Next-token targets: the report followed by the end token.
    pub fn decoder_target(&self) -> Vec<usize> {
        self.report.iter().copied().chain(std::iter::once(END)).collect()
    }
}

/// Vocabulary over a record set's keywords and reports.
pub fn build_vocab(records: &[Record], max_size: usize) -> Result<Vocab> {
    Vocab::build(
        records.iter().flat_map(|r| [r.keywords.as_str(), r.report.as_str()]),
        max_size,
    )
}
