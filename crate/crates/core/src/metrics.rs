//! Corpus BLEU, ROUGE-L and CIDEr over tokenized sentences.
//!
//! Each hypothesis has exactly one reference. Conventions:
//! * BLEU: corpus-level clipped n-gram precision, brevity penalty
//!   `min(1, e^{1 − r/c})`, zero precisions replaced by `1e-9`.
//! * ROUGE-L: mean per-pair LCS F-measure with `β² = 1.2`.
//! * CIDEr: raw n-gram counts weighted by `ln N − ln df` over the
//!   references, cosine per order `n = 1..4`, averaged over orders and
//!   pairs, times 10. No length penalty or count clipping. A hypothesis
//!   n-gram absent from every reference takes the largest weight of its
//!   order, which keeps the score unchanged when the corpus is repeated.

use std::collections::HashMap;
use std::fmt;
use std::hash::Hash;

use serde::{Deserialize, Serialize};

use crate::error::{DreamError, Result};

pub const BLEU_EPSILON: f64 = 1e-9;
pub const ROUGE_BETA2: f64 = 1.2;
pub const CIDER_SCALE: f64 = 10.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScoreReport {
    pub bleu1: f64,
    pub bleu2: f64,
    pub bleu3: f64,
    pub bleu4: f64,
    pub rouge_l: f64,
    pub cider: f64,
    pub pairs: usize,
    pub empty_hypotheses: usize,
    /// All references identical, so every IDF weight is zero.
    pub degenerate_idf: bool,
}

impl fmt::Display for ScoreReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "pairs     {}", self.pairs)?;
        writeln!(f, "BLEU-1    {:.4}", self.bleu1)?;
        writeln!(f, "BLEU-2    {:.4}", self.bleu2)?;
        writeln!(f, "BLEU-3    {:.4}", self.bleu3)?;
        writeln!(f, "BLEU-4    {:.4}", self.bleu4)?;
        writeln!(f, "ROUGE-L   {:.4}", self.rouge_l)?;
        write!(f, "CIDEr     {:.4}", self.cider)?;
        if self.empty_hypotheses > 0 {
            write!(f, "\nwarning: {} empty hypotheses", self.empty_hypotheses)?;
        }
        if self.degenerate_idf {
            write!(f, "\nwarning: references are not distinct, CIDEr IDF is degenerate")?;
        }
        Ok(())
    }
}

fn ngrams<T: Eq + Hash + Clone>(tokens: &[T], n: usize) -> HashMap<Vec<T>, usize> {
    let mut out = HashMap::new();
    if n == 0 || tokens.len() < n {
        return out;
    }
    for w in tokens.windows(n) {
        *out.entry(w.to_vec()).or_insert(0) += 1;
    }
    out
}

fn check_pairs<T>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<()> {
    if hyps.len() != refs.len() {
        return Err(DreamError::Contract(format!(
            "{} hypotheses but {} references",
            hyps.len(),
            refs.len()
        )));
    }
    if hyps.is_empty() {
        return Err(DreamError::Contract("nothing to score".into()));
    }
    Ok(())
}

/// BLEU-1..=max_n.
pub fn bleu<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>], max_n: usize) -> Result<Vec<f64>> {
    check_pairs(hyps, refs)?;
    let c: usize = hyps.iter().map(Vec::len).sum();
    let r: usize = refs.iter().map(Vec::len).sum();
    let bp = if c == 0 { 0.0 } else { (1.0 - r as f64 / c as f64).exp().min(1.0) };
    let mut log_sum = 0.0;
    let mut out = Vec::with_capacity(max_n);
    for n in 1..=max_n {
        let (mut matched, mut total) = (0usize, 0usize);
        for (h, rf) in hyps.iter().zip(refs) {
            let hg = ngrams(h, n);
            let rg = ngrams(rf, n);
            for (g, &cnt) in &hg {
                matched += cnt.min(rg.get(g).copied().unwrap_or(0));
                total += cnt;
            }
        }
        let p = if matched == 0 { BLEU_EPSILON } else { matched as f64 / total as f64 };
        log_sum += p.ln();
        out.push(bp * (log_sum / n as f64).exp());
    }
    Ok(out)
}

pub fn lcs_len<T: Eq>(a: &[T], b: &[T]) -> usize {
    let mut prev = vec![0usize; b.len() + 1];
    let mut cur = vec![0usize; b.len() + 1];
    for x in a {
        for (j, y) in b.iter().enumerate() {
            cur[j + 1] = if x == y { prev[j] + 1 } else { cur[j].max(prev[j + 1]) };
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

pub fn rouge_l_pair<T: Eq>(hyp: &[T], reference: &[T]) -> f64 {
    let l = lcs_len(hyp, reference);
    if l == 0 {
        return 0.0;
    }
    let p = l as f64 / hyp.len() as f64;
    let r = l as f64 / reference.len() as f64;
    (1.0 + ROUGE_BETA2) * p * r / (r + ROUGE_BETA2 * p)
}

pub fn rouge_l<T: Eq>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<f64> {
    check_pairs(hyps, refs)?;
    Ok(hyps.iter().zip(refs).map(|(h, r)| rouge_l_pair(h, r)).sum::<f64>() / hyps.len() as f64)
}

/// Returns the score and whether the IDF was degenerate.
pub fn cider<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<(f64, bool)> {
    check_pairs(hyps, refs)?;
    let big_n = refs.len() as f64;
    let degenerate = refs.iter().all(|r| r == &refs[0]);
    let mut per_pair = vec![0.0; hyps.len()];
    for n in 1..=4 {
        let ref_grams: Vec<HashMap<Vec<T>, usize>> = refs.iter().map(|r| ngrams(r, n)).collect();
        let mut df: HashMap<&Vec<T>, usize> = HashMap::new();
        for g in &ref_grams {
            for k in g.keys() {
                *df.entry(k).or_insert(0) += 1;
            }
        }
        let rarest = df.values().min().map_or(0.0, |&d| big_n.ln() - (d as f64).ln());
        let idf = |g: &Vec<T>| df.get(g).map_or(rarest, |&d| big_n.ln() - (d as f64).ln());
        for (i, h) in hyps.iter().enumerate() {
            let hg = ngrams(h, n);
            let rg = &ref_grams[i];
            let weigh = |m: &HashMap<Vec<T>, usize>| -> HashMap<Vec<T>, f64> {
                m.iter().map(|(g, &c)| (g.clone(), c as f64 * idf(g))).collect()
            };
            let (hv, rv) = (weigh(&hg), weigh(rg));
            let norm = |v: &HashMap<Vec<T>, f64>| v.values().map(|x| x * x).sum::<f64>().sqrt();
            let (nh, nr) = (norm(&hv), norm(&rv));
            if nh == 0.0 || nr == 0.0 {
                continue;
            }
            let dot: f64 = hv.iter().map(|(g, x)| x * rv.get(g).copied().unwrap_or(0.0)).sum();
            per_pair[i] += dot / (nh * nr) / 4.0;
        }
    }
    let score = CIDER_SCALE * per_pair.iter().sum::<f64>() / hyps.len() as f64;
    Ok((score, degenerate))
}

pub fn score<T: Eq + Hash + Clone>(hyps: &[Vec<T>], refs: &[Vec<T>]) -> Result<ScoreReport> {
    let b = bleu(hyps, refs, 4)?;
    let (cider, degenerate_idf) = cider(hyps, refs)?;
    Ok(ScoreReport {
        bleu1: b[0],
        bleu2: b[1],
        bleu3: b[2],
        bleu4: b[3],
        rouge_l: rouge_l(hyps, refs)?,
        cider,
        pairs: hyps.len(),
        empty_hypotheses: hyps.iter().filter(|h| h.is_empty()).count(),
        degenerate_idf,
    })
}

/// Whitespace tokenization for scoring plain text.
pub fn words(text: &str) -> Vec<String> {
    text.split_whitespace().map(str::to_string).collect()
}
