//! Line-delimited dataset records and image loading.

use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::synth::{self, SynthConfig};
use crate::error::{DreamError, Result};
use crate::tensor::Tensor;

/// One dataset line. Exactly one of `seed` and `image_ref` is set.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Record {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub image_ref: Option<String>,
    pub keywords: String,
    pub report: String,
}

impl Record {
    pub fn from_synth(s: &synth::SyntheticSample) -> Self {
        Record {
            seed: Some(s.seed),
            image_ref: None,
            keywords: s.keywords.clone(),
            report: s.report.clone(),
        }
    }

    /// Renders (seed) or reads (image reference, relative to `base`) the image.
    pub fn image(&self, base: &Path, cfg: &SynthConfig) -> Result<Tensor> {
        match (&self.seed, &self.image_ref) {
            (Some(seed), None) => Ok(synth::render(*seed, cfg).image),
            (None, Some(r)) => {
                let path = base.join(r);
                let img = read_pgm(&path)?;
                if img.shape()[0] != cfg.side || img.shape()[1] != cfg.side {
                    return Err(DreamError::Dataset(format!(
                        "{}: image is {}x{}, expected {}x{}",
                        path.display(),
                        img.shape()[0],
                        img.shape()[1],
                        cfg.side,
                        cfg.side
                    )));
                }
                let data: Vec<f64> = img
                    .data()
                    .iter()
                    .flat_map(|&v| (0..cfg.channels).map(move |c| v * (1.0 - 0.1 * c as f64)))
                    .collect();
                Tensor::new(vec![cfg.side, cfg.side, cfg.channels], data)
            }
            _ => Err(DreamError::Dataset("record needs exactly one of `seed` or `image_ref`".into())),
        }
    }
}

pub fn write_records(path: &Path, records: &[Record]) -> Result<()> {
    let mut w = BufWriter::new(fs::File::create(path)?);
    for r in records {
        serde_json::to_writer(&mut w, r)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_records(path: &Path) -> Result<Vec<Record>> {
    let reader = BufReader::new(fs::File::open(path)?);
    let mut out = Vec::new();
    for (n, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(&line)
            .map_err(|e| DreamError::Dataset(format!("{}:{}: {e}", path.display(), n + 1)))?;
        out.push(rec);
    }
    Ok(out)
}

/// Directory that relative image references resolve against.
pub fn base_dir(path: &Path) -> PathBuf {
    path.parent().map(Path::to_path_buf).unwrap_or_default()
}

/// Reads a binary (P5) or ASCII (P2) greymap, scaled to `[0, 1]`, as `h × w × 1`.
pub fn read_pgm(path: &Path) -> Result<Tensor> {
    let bytes = fs::read(path)?;
    let bad = |why: &str| DreamError::Dataset(format!("{}: {why}", path.display()));
    let mut pos = 0;
    let mut header = Vec::new();
    while header.len() < 4 {
        while pos < bytes.len() && (bytes[pos].is_ascii_whitespace() || bytes[pos] == b'#') {
            if bytes[pos] == b'#' {
                while pos < bytes.len() && bytes[pos] != b'\n' {
                    pos += 1;
                }
            } else {
                pos += 1;
            }
        }
        let start = pos;
        while pos < bytes.len() && !bytes[pos].is_ascii_whitespace() {
            pos += 1;
        }
        if start == pos {
            return Err(bad("truncated header"));
        }
        header.push(String::from_utf8_lossy(&bytes[start..pos]).into_owned());
    }
    let num = |s: &str| s.parse::<usize>().map_err(|_| bad("bad header number"));
    let (w, h, max) = (num(&header[1])?, num(&header[2])?, num(&header[3])?);
    if w == 0 || h == 0 || max == 0 || max > 255 {
        return Err(bad("unsupported dimensions or depth"));
    }
    let values: Vec<f64> = match header[0].as_str() {
        "P5" => {
            let body = bytes.get(pos + 1..pos + 1 + w * h).ok_or_else(|| bad("truncated pixel data"))?;
            body.iter().map(|&b| b as f64 / max as f64).collect()
        }
        "P2" => {
            let text = String::from_utf8_lossy(&bytes[pos..]);
            let vals: std::result::Result<Vec<f64>, _> =
                text.split_whitespace().take(w * h).map(|t| t.parse::<f64>()).collect();
            let vals = vals.map_err(|_| bad("bad pixel value"))?;
            if vals.len() != w * h {
                return Err(bad("truncated pixel data"));
            }
            vals.into_iter().map(|v| v / max as f64).collect()
        }
        _ => return Err(bad("not a P2/P5 greymap")),
    };
    Tensor::new(vec![h, w, 1], values)
}

/// Writes an `h × w × C` tensor's first channel as a binary greymap.
pub fn write_pgm(path: &Path, image: &Tensor) -> Result<()> {
    let s = image.shape();
    if s.len() != 3 {
        return Err(DreamError::shape("write_pgm", s, &[0, 0, 1]));
    }
    let (h, w, c) = (s[0], s[1], s[2]);
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend((0..h * w).map(|i| (image.data()[i * c].clamp(0.0, 1.0) * 255.0).round() as u8));
    fs::write(path, out)?;
    Ok(())
}

/// Batch index lists for one epoch. The order depends only on
/// `(seed, epoch)`, so any epoch can be reproduced independently.
pub fn epoch_batches(n: usize, batch_size: usize, seed: u64, epoch: usize) -> Vec<Vec<usize>> {
    let mut order: Vec<usize> = (0..n).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ (epoch as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15));
    order.shuffle(&mut rng);
    order.chunks(batch_size.max(1)).map(<[usize]>::to_vec).collect()
}

/// Drops each `[SEP]`-separated keyword independently with probability `p`.
pub fn drop_keywords(keywords: &str, p: f64, rng: &mut ChaCha8Rng) -> String {
    if p <= 0.0 {
        return keywords.to_string();
    }
    keywords
        .split("[SEP]")
        .map(str::trim)
        .filter(|k| !k.is_empty())
        .filter(|_| rng.random::<f64>() >= p)
        .collect::<Vec<_>>()
        .join(" [SEP] ")
}
