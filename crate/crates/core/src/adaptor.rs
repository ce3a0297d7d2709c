//! Unified visual-language sequence, learnable modality gate and
//! decoupled cross-modal attention.

use crate::autodiff::{AttnBlock, AttnLayout, AttnNorm, AttnSpec, Var};
use crate::config::ModelConfig;
use crate::error::{DreamError, Result};
use crate::packing::{self, Segments};
use crate::params::{Bound, Init, ParamId};
use crate::tensor::Tensor;

fn logit(p: f64) -> f64 {
    (p / (1.0 - p)).ln()
}

#[derive(Clone, Debug)]
pub struct Adaptor {
    pub proj_w: ParamId,
    pub proj_b: ParamId,
    /// Raw indicator logits: `S_V` visual slots then `max_keywords` language slots.
    pub indicator: ParamId,
    pub ln_v: (ParamId, ParamId),
    pub ln_l: (ParamId, ParamId),
    pub w_q: ParamId,
    pub w_kv: ParamId,
    pub w_kl: ParamId,
    pub w_vv: ParamId,
    pub w_vl: ParamId,
    s_v: usize,
    max_keywords: usize,
    eps: f64,
    norm: AttnNorm,
}

/// Packed adaptor intermediates.
#[derive(Clone)]
pub struct AdaptorOutput<'t> {
    /// Unified input, per sample `S_V` projected visual rows then `S_L` keyword rows.
    pub x: Var<'t>,
    pub x_segments: Segments,
    pub x_v: Var<'t>,
    pub x_l: Var<'t>,
    pub f2: Var<'t>,
    pub f2_segments: Segments,
}

impl Adaptor {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        let (ev, el, p) = (cfg.visual_dim, cfg.keyword_dim, cfg.shared_dim);
        let s_v = cfg.visual_tokens();
        init.scoped("adaptor", |init| {
            let raw: Vec<f64> = (0..s_v + cfg.max_keywords)
                .map(|i| {
                    if i < s_v {
                        logit(cfg.visual_gate_init)
                    } else {
                        logit(cfg.language_gate_init)
                    }
                })
                .collect();
            Ok(Adaptor {
                proj_w: init.linear("proj.w", ev, el)?,
                proj_b: init.zeros("proj.b", &[el])?,
                indicator: init.tensor("indicator", Tensor::new(vec![raw.len()], raw)?)?,
                ln_v: (init.full("ln_v.g", &[el], 1.0)?, init.zeros("ln_v.b", &[el])?),
                ln_l: (init.full("ln_l.g", &[el], 1.0)?, init.zeros("ln_l.b", &[el])?),
                w_q: init.linear("w_q", el, p)?,
                w_kv: init.linear("w_kv", el, p)?,
                w_kl: init.linear("w_kl", el, p)?,
                w_vv: init.linear("w_vv", el, p)?,
                w_vl: init.linear("w_vl", el, p)?,
                s_v,
                max_keywords: cfg.max_keywords,
                eps: cfg.ln_eps,
                norm: cfg.attn_norm,
            })
        })
    }

    /// `sigmoid(raw)`, one gate per sequence slot.
    pub fn gates<'t>(&self, p: &Bound<'t>) -> Var<'t> {
        p.var(self.indicator).sigmoid()
    }

    /// Visual rows projected to `E_L`.
    pub fn project_visual<'t>(&self, p: &Bound<'t>, v_e: Var<'t>) -> Result<Var<'t>> {
        v_e.matmul(p.var(self.proj_w))?.add_row(p.var(self.proj_b))
    }

    /// Per-sample `[proj(V_e); L_e]`.
    pub fn build_unified_input<'t>(
        &self,
        p: &Bound<'t>,
        v_e: Var<'t>,
        v_segs: &[(usize, usize)],
        l_e: Var<'t>,
        l_segs: &[(usize, usize)],
    ) -> Result<(Var<'t>, Segments)> {
        let xv = self.project_visual(p, v_e)?;
        packing::interleave(&[(xv, v_segs), (l_e, l_segs)])
    }

    fn slot_index(&self, v_segs: &[(usize, usize)], l_segs: &[(usize, usize)]) -> Result<(Vec<usize>, Vec<usize>)> {
        let mut vis = Vec::new();
        for &(_, len) in v_segs {
            if len != self.s_v {
                return Err(DreamError::shape("adaptor visual segment", &[len], &[self.s_v]));
            }
            vis.extend(0..len);
        }
        let mut lang = Vec::new();
        for &(_, len) in l_segs {
            if len == 0 || len > self.max_keywords {
                return Err(DreamError::shape("adaptor language segment", &[len], &[self.max_keywords]));
            }
            lang.extend((0..len).map(|j| self.s_v + j));
        }
        Ok((vis, lang))
    }

    /// Full forward. `gate_override` replaces `sigmoid(raw)` (same length)
    /// when given.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        v_e: Var<'t>,
        v_segs: &[(usize, usize)],
        l_e: Var<'t>,
        l_segs: &[(usize, usize)],
        gate_override: Option<Var<'t>>,
    ) -> Result<AdaptorOutput<'t>> {
        let gates = match gate_override {
            Some(g) if g.value().numel() != self.s_v + self.max_keywords => {
                return Err(DreamError::shape("gate override", &g.shape(), &[self.s_v + self.max_keywords]))
            }
            Some(g) => g,
            None => self.gates(p),
        };
        let (vis_slots, lang_slots) = self.slot_index(v_segs, l_segs)?;
        let xv = self.project_visual(p, v_e)?;
        let (x, x_segments) = packing::interleave(&[(xv, v_segs), (l_e, l_segs)])?;
        let gates = gates.reshape(&[self.s_v + self.max_keywords, 1])?;
        let x_v = xv.mul_col(gates.gather_rows(&vis_slots)?)?;
        let x_l = l_e.mul_col(gates.gather_rows(&lang_slots)?)?;
        let (f2, f2_segments) = decoupled_attention(p, self, x_v, v_segs, x_l, l_segs)?;
        Ok(AdaptorOutput {
            x,
            x_segments,
            x_v,
            x_l,
            f2,
            f2_segments,
        })
    }

    /// `w · (Σ_visual g² + Σ_language (1 − g)²)` over all indicator slots.
    pub fn indicator_penalty<'t>(&self, p: &Bound<'t>, weight: f64) -> Result<Var<'t>> {
        let g = self.gates(p);
        let n = self.s_v + self.max_keywords;
        let target: Vec<f64> = (0..n).map(|i| if i < self.s_v { 0.0 } else { 1.0 }).collect();
        let t = p.tape().constant(Tensor::new(vec![n], target)?);
        Ok(g.sub(t)?.square().sum().scale(weight))
    }
}

/// `(X′_V, X′_L)` from a gate vector over slots; rows scaled one by one.
pub fn apply_modality_indicator<'t>(
    x: Var<'t>,
    s_v: usize,
    gates: Var<'t>,
) -> Result<(Var<'t>, Var<'t>)> {
    let n = x.rows();
    if gates.value().numel() != n || s_v == 0 || s_v >= n {
        return Err(DreamError::shape("modality indicator", &x.shape(), &gates.shape()));
    }
    let scaled = x.mul_col(gates.reshape(&[n, 1])?)?;
    Ok((scaled.slice_rows(0, s_v)?, scaled.slice_rows(s_v, n - s_v)?))
}

/// Shared query over the slot-wise normalized sequence; keys and values
/// use modality-specific projections.
pub fn decoupled_attention<'t>(
    p: &Bound<'t>,
    a: &Adaptor,
    x_v: Var<'t>,
    v_segs: &[(usize, usize)],
    x_l: Var<'t>,
    l_segs: &[(usize, usize)],
) -> Result<(Var<'t>, Segments)> {
    let nv = x_v.layer_norm(p.var(a.ln_v.0), p.var(a.ln_v.1), a.eps)?;
    let nl = x_l.layer_norm(p.var(a.ln_l.0), p.var(a.ln_l.1), a.eps)?;
    let (n_tilde, segs) = packing::interleave(&[(nv, v_segs), (nl, l_segs)])?;
    let q = n_tilde.matmul(p.var(a.w_q))?;
    let (k, _) = packing::interleave(&[(x_v.matmul(p.var(a.w_kv))?, v_segs), (x_l.matmul(p.var(a.w_kl))?, l_segs)])?;
    let (v, _) = packing::interleave(&[(x_v.matmul(p.var(a.w_vv))?, v_segs), (x_l.matmul(p.var(a.w_vl))?, l_segs)])?;
    let width = q.cols();
    let layout = AttnLayout::new(segs.iter().map(|&(s, l)| AttnBlock::full(s, l, s, l)).collect());
    let f2 = q.attention(k, v, AttnSpec::single(width, width, a.norm), layout)?;
    Ok((f2, segs))
}
