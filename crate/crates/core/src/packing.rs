//! Row packing of variable-length per-sample sequences.
//!
//! A batch is processed as one tall matrix whose rows are the concatenated
//! per-sample sequences; a segment list records `(start, len)` per sample.

use crate::autodiff::Var;
use crate::error::{DreamError, Result};

pub type Segments = Vec<(usize, usize)>;

/// Consecutive segments for the given lengths.
pub fn segments(lens: &[usize]) -> Segments {
    let mut start = 0;
    lens.iter()
        .map(|&len| {
            let s = (start, len);
            start += len;
            s
        })
        .collect()
}

pub fn total_rows(segs: &[(usize, usize)]) -> usize {
    segs.last().map_or(0, |&(s, l)| s + l)
}

/// Per sample, stacks the sample's rows from each part in order.
/// Returns the interleaved matrix and its segments.
pub fn interleave<'t>(parts: &[(Var<'t>, &[(usize, usize)])]) -> Result<(Var<'t>, Segments)> {
    let n = parts
        .first()
        .map(|(_, s)| s.len())
        .ok_or_else(|| DreamError::Contract("interleave of nothing".into()))?;
    if parts.iter().any(|(_, s)| s.len() != n) {
        return Err(DreamError::Contract("interleave parts disagree on sample count".into()));
    }
    if parts.len() == 1 {
        return Ok((parts[0].0, parts[0].1.to_vec()));
    }
    let mut offsets = Vec::with_capacity(parts.len());
    let mut off = 0;
    for (v, _) in parts {
        offsets.push(off);
        off += v.rows();
    }
    let stacked = Var::concat_rows(&parts.iter().map(|(v, _)| *v).collect::<Vec<_>>())?;
    let mut rows = Vec::new();
    let mut lens = Vec::with_capacity(n);
    for i in 0..n {
        let mut len = 0;
        for ((_, segs), &o) in parts.iter().zip(&offsets) {
            let (s, l) = segs[i];
            rows.extend((o + s)..(o + s + l));
            len += l;
        }
        lens.push(len);
    }
    Ok((stacked.gather_rows(&rows)?, segments(&lens)))
}

/// Index of the sample owning each packed row.
pub fn row_owner(segs: &[(usize, usize)]) -> Vec<usize> {
    segs.iter()
        .enumerate()
        .flat_map(|(i, &(_, l))| std::iter::repeat_n(i, l))
        .collect()
}
