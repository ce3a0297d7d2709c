//! Fused blocked attention, shared by every attention site in the model.
//!
//! Rows of `q`, `k` and `v` are packed across samples. An [`AttnLayout`]
//! lists the query/key row ranges that attend to each other, so a whole
//! batch runs as one op. Query heads are grouped onto key/value heads
//! (`q_heads / kv_heads` queries per shared head), which covers standard
//! multi-head (`kv_heads == q_heads`), grouped-query and multi-query
//! attention with the same kernel.

use std::rc::Rc;

use serde::{Deserialize, Serialize};

use crate::autodiff::tape::{sigmoid_scalar, softmax_into};
use crate::error::{DreamError, Result};
use crate::tensor::Tensor;

/// How attention logits are turned into weights.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum AttnNorm {
    /// Row-wise softmax over allowed keys.
    #[default]
    Softmax,
    /// Independent elementwise sigmoid; masked keys get weight 0.
    Sigmoid,
}

impl std::str::FromStr for AttnNorm {
    type Err = String;

    fn from_str(s: &str) -> std::result::Result<Self, Self::Err> {
        match s {
            "softmax" => Ok(AttnNorm::Softmax),
            "sigmoid" => Ok(AttnNorm::Sigmoid),
            other => Err(format!("unknown attention normalization `{other}`")),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct AttnSpec {
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub value_dim: usize,
    pub scale: f64,
    pub norm: AttnNorm,
}

impl AttnSpec {
    /// Single-head attention with `1/sqrt(dim)` scaling.
    pub fn single(dim: usize, value_dim: usize, norm: AttnNorm) -> Self {
        AttnSpec {
            q_heads: 1,
            kv_heads: 1,
            head_dim: dim,
            value_dim,
            scale: 1.0 / (dim as f64).sqrt(),
            norm,
        }
    }

    /// Multi-head or grouped attention with `1/sqrt(head_dim)` scaling.
    pub fn grouped(q_heads: usize, kv_heads: usize, head_dim: usize, norm: AttnNorm) -> Self {
        AttnSpec {
            q_heads,
            kv_heads,
            head_dim,
            value_dim: head_dim,
            scale: 1.0 / (head_dim as f64).sqrt(),
            norm,
        }
    }

    fn group(&self) -> usize {
        self.q_heads / self.kv_heads
    }
}

/// One query range attending over one key range.
#[derive(Clone, Debug)]
pub struct AttnBlock {
    pub q_start: usize,
    pub q_len: usize,
    pub k_start: usize,
    pub k_len: usize,
    /// Row-major `q_len × k_len`; `None` means every key is visible.
    pub allowed: Option<Rc<Vec<bool>>>,
}

impl AttnBlock {
    pub fn full(q_start: usize, q_len: usize, k_start: usize, k_len: usize) -> Self {
        AttnBlock {
            q_start,
            q_len,
            k_start,
            k_len,
            allowed: None,
        }
    }

    /// Query `i` sees key `j` iff `j <= i + offset`.
    pub fn causal(q_start: usize, q_len: usize, k_start: usize, k_len: usize, offset: usize) -> Self {
        let allowed = (0..q_len)
            .flat_map(|i| (0..k_len).map(move |j| j <= i + offset))
            .collect();
        AttnBlock {
            q_start,
            q_len,
            k_start,
            k_len,
            allowed: Some(Rc::new(allowed)),
        }
    }

    /// Every query sees the same subset of keys.
    pub fn key_mask(q_start: usize, q_len: usize, k_start: usize, keys: &[bool]) -> Self {
        let allowed = (0..q_len).flat_map(|_| keys.iter().copied()).collect();
        AttnBlock {
            q_start,
            q_len,
            k_start,
            k_len: keys.len(),
            allowed: Some(Rc::new(allowed)),
        }
    }

    #[inline]
    fn visible(&self, i: usize, j: usize) -> bool {
        self.allowed.as_ref().is_none_or(|m| m[i * self.k_len + j])
    }
}

#[derive(Clone, Debug, Default)]
pub struct AttnLayout {
    pub blocks: Vec<AttnBlock>,
}

impl AttnLayout {
    pub fn new(blocks: Vec<AttnBlock>) -> Rc<Self> {
        Rc::new(AttnLayout { blocks })
    }
}

fn validate(spec: &AttnSpec, layout: &AttnLayout, q: &Tensor, k: &Tensor, v: &Tensor) -> Result<()> {
    if spec.kv_heads == 0 || spec.q_heads % spec.kv_heads != 0 {
        return Err(DreamError::config(
            "kv_heads",
            format!("{} query heads cannot be grouped onto {} kv heads", spec.q_heads, spec.kv_heads),
        ));
    }
    if q.cols() != spec.q_heads * spec.head_dim || k.cols() != spec.kv_heads * spec.head_dim {
        return Err(DreamError::shape("attention q/k", q.shape(), k.shape()));
    }
    if v.cols() != spec.kv_heads * spec.value_dim || v.rows() != k.rows() {
        return Err(DreamError::shape("attention k/v", k.shape(), v.shape()));
    }
    for b in &layout.blocks {
        if b.q_start + b.q_len > q.rows() || b.k_start + b.k_len > k.rows() {
            return Err(DreamError::shape(
                "attention block",
                &[b.q_start, b.q_len, b.k_start, b.k_len],
                &[q.rows(), k.rows()],
            ));
        }
        if let Some(m) = &b.allowed {
            if m.len() != b.q_len * b.k_len {
                return Err(DreamError::shape("attention mask", &[b.q_len, b.k_len], &[m.len()]));
            }
        }
    }
    Ok(())
}

/// Attention weights per block and head, each a `q_len × k_len` matrix.
fn weights(spec: &AttnSpec, layout: &AttnLayout, q: &Tensor, k: &Tensor) -> Vec<f64> {
    let (dk, qc, kc) = (spec.head_dim, q.cols(), k.cols());
    let mut probs = Vec::new();
    let mut logits = Vec::new();
    for b in &layout.blocks {
        for h in 0..spec.q_heads {
            let g = h / spec.group();
            for i in 0..b.q_len {
                let qrow = &q.data()[(b.q_start + i) * qc + h * dk..][..dk];
                logits.clear();
                for j in 0..b.k_len {
                    let krow = &k.data()[(b.k_start + j) * kc + g * dk..][..dk];
                    logits.push(spec.scale * qrow.iter().zip(krow).map(|(x, y)| x * y).sum::<f64>());
                }
                let start = probs.len();
                probs.resize(start + b.k_len, 0.0);
                let out = &mut probs[start..];
                match spec.norm {
                    AttnNorm::Softmax => softmax_into(&logits, out, |j| b.visible(i, j)),
                    AttnNorm::Sigmoid => {
                        for j in 0..b.k_len {
                            out[j] = if b.visible(i, j) { sigmoid_scalar(logits[j]) } else { 0.0 };
                        }
                    }
                }
            }
        }
    }
    probs
}

pub(crate) fn forward(
    spec: &AttnSpec,
    layout: &AttnLayout,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> Result<(Tensor, Vec<f64>)> {
    validate(spec, layout, q, k, v)?;
    let probs = weights(spec, layout, q, k);
    let (dv, vc) = (spec.value_dim, v.cols());
    let oc = spec.q_heads * dv;
    let mut out = vec![0.0; q.rows() * oc];
    let mut off = 0;
    for b in &layout.blocks {
        for h in 0..spec.q_heads {
            let g = h / spec.group();
            for i in 0..b.q_len {
                let orow = &mut out[(b.q_start + i) * oc + h * dv..][..dv];
                for j in 0..b.k_len {
                    let w = probs[off + i * b.k_len + j];
                    if w == 0.0 {
                        continue;
                    }
                    let vrow = &v.data()[(b.k_start + j) * vc + g * dv..][..dv];
                    for (o, x) in orow.iter_mut().zip(vrow) {
                        *o += w * x;
                    }
                }
            }
            off += b.q_len * b.k_len;
        }
    }
    Ok((Tensor::from_parts(vec![q.rows(), oc], out), probs))
}

pub(crate) fn backward(
    spec: &AttnSpec,
    layout: &AttnLayout,
    q: &[f64],
    k: &[f64],
    v: &[f64],
    probs: &[f64],
    g: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let (dk, dv) = (spec.head_dim, spec.value_dim);
    let (qc, kc, vc, oc) = (
        spec.q_heads * dk,
        spec.kv_heads * dk,
        spec.kv_heads * dv,
        spec.q_heads * dv,
    );
    let mut gq = vec![0.0; q.len()];
    let mut gk = vec![0.0; k.len()];
    let mut gv = vec![0.0; v.len()];
    let mut dw = Vec::new();
    let mut off = 0;
    for b in &layout.blocks {
        for h in 0..spec.q_heads {
            let grp = h / spec.group();
            for i in 0..b.q_len {
                let go = &g[(b.q_start + i) * oc + h * dv..][..dv];
                let w = &probs[off + i * b.k_len..][..b.k_len];
                dw.clear();
                for j in 0..b.k_len {
                    let vr = (b.k_start + j) * vc + grp * dv;
                    dw.push(go.iter().zip(&v[vr..vr + dv]).map(|(x, y)| x * y).sum::<f64>());
                    if w[j] != 0.0 {
                        for (t, gvx) in gv[vr..vr + dv].iter_mut().enumerate() {
                            *gvx += w[j] * go[t];
                        }
                    }
                }
                match spec.norm {
                    AttnNorm::Softmax => {
                        let dot: f64 = dw.iter().zip(w).map(|(x, y)| x * y).sum();
                        for j in 0..b.k_len {
                            dw[j] = w[j] * (dw[j] - dot);
                        }
                    }
                    AttnNorm::Sigmoid => {
                        for j in 0..b.k_len {
                            dw[j] *= w[j] * (1.0 - w[j]);
                        }
                    }
                }
                let qr = (b.q_start + i) * qc + h * dk;
                for j in 0..b.k_len {
                    let dl = spec.scale * dw[j];
                    if dl == 0.0 {
                        continue;
                    }
                    let kr = (b.k_start + j) * kc + grp * dk;
                    for t in 0..dk {
                        gq[qr + t] += dl * k[kr + t];
                        gk[kr + t] += dl * q[qr + t];
                    }
                }
            }
            off += b.q_len * b.k_len;
        }
    }
    (gq, gk, gv)
}

/// Attention weights for inspection: one `q_len × k_len` tensor per
/// `(block, head)`, ordered block-major.
pub fn attention_weights(spec: &AttnSpec, layout: &AttnLayout, q: &Tensor, k: &Tensor) -> Result<Vec<Tensor>> {
    let v = Tensor::zeros(&[k.rows(), spec.kv_heads * spec.value_dim]);
    validate(spec, layout, q, k, &v)?;
    let probs = weights(spec, layout, q, k);
    let mut out = Vec::new();
    let mut off = 0;
    for b in &layout.blocks {
        for _ in 0..spec.q_heads {
            let n = b.q_len * b.k_len;
            out.push(Tensor::from_parts(vec![b.q_len, b.k_len], probs[off..off + n].to_vec()));
            off += n;
        }
    }
    Ok(out)
}
