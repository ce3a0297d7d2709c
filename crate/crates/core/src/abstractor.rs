//! Projection of both modalities into a shared space followed by
//! bidirectional cross-attention.

use crate::autodiff::{AttnBlock, AttnLayout, AttnNorm, AttnSpec, Var};
use crate::config::ModelConfig;
use crate::error::{DreamError, Result};
use crate::packing::{self, Segments};
use crate::params::{Bound, Init, ParamId};

#[derive(Clone, Copy, Debug)]
pub struct TwoLayer {
    pub w0: ParamId,
    pub b0: ParamId,
    pub w1: ParamId,
    pub b1: ParamId,
}

impl TwoLayer {
    fn new(init: &mut Init, input: usize, hidden: usize, out: usize) -> Result<Self> {
        Ok(TwoLayer {
            w0: init.linear("w0", input, hidden)?,
            b0: init.zeros("b0", &[hidden])?,
            w1: init.linear("w1", hidden, out)?,
            b1: init.zeros("b1", &[out])?,
        })
    }

    /// `Γ(Γ(x W0 + b0) W1 + b1)` row-wise.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>) -> Result<Var<'t>> {
        let h = x.matmul(p.var(self.w0))?.add_row(p.var(self.b0))?.gelu();
        Ok(h.matmul(p.var(self.w1))?.add_row(p.var(self.b1))?.gelu())
    }
}

#[derive(Clone, Debug)]
pub struct Abstractor {
    pub visual: TwoLayer,
    pub language: TwoLayer,
    pub shared_dim: usize,
    norm: AttnNorm,
}

/// Packed outputs; `f1` stacks each sample's V2L rows above its L2V rows.
#[derive(Clone)]
pub struct AbstractorOutput<'t> {
    pub v_prime: Var<'t>,
    pub l_prime: Var<'t>,
    pub v2l: Var<'t>,
    pub l2v: Var<'t>,
    pub f1: Var<'t>,
    pub f1_segments: Segments,
}

impl Abstractor {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        init.scoped("abstractor", |init| {
            Ok(Abstractor {
                visual: init.scoped("visual", |i| {
                    TwoLayer::new(i, cfg.visual_dim, cfg.visual_hidden_dim(), cfg.shared_dim)
                })?,
                language: init.scoped("language", |i| {
                    TwoLayer::new(i, cfg.keyword_dim, cfg.keyword_hidden_dim(), cfg.shared_dim)
                })?,
                shared_dim: cfg.shared_dim,
                norm: cfg.attn_norm,
            })
        })
    }

    pub fn project_modalities<'t>(&self, p: &Bound<'t>, v_e: Var<'t>, l_e: Var<'t>) -> Result<(Var<'t>, Var<'t>)> {
        Ok((self.visual.forward(p, v_e)?, self.language.forward(p, l_e)?))
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        v_e: Var<'t>,
        v_segs: &[(usize, usize)],
        l_e: Var<'t>,
        l_segs: &[(usize, usize)],
    ) -> Result<AbstractorOutput<'t>> {
        let (v_prime, l_prime) = self.project_modalities(p, v_e, l_e)?;
        let (v2l, l2v) = bidirectional_cross_attention(v_prime, v_segs, l_prime, l_segs, self.norm)?;
        let (f1, f1_segments) = aggregate(v2l, v_segs, l2v, l_segs)?;
        Ok(AbstractorOutput {
            v_prime,
            l_prime,
            v2l,
            l2v,
            f1,
            f1_segments,
        })
    }
}

/// `V2L = norm(V′L′ᵀ/√P) L′` and `L2V = norm(L′V′ᵀ/√P) V′`, per sample.
pub fn bidirectional_cross_attention<'t>(
    v_prime: Var<'t>,
    v_segs: &[(usize, usize)],
    l_prime: Var<'t>,
    l_segs: &[(usize, usize)],
    norm: AttnNorm,
) -> Result<(Var<'t>, Var<'t>)> {
    let p = v_prime.cols();
    if l_prime.cols() != p {
        return Err(DreamError::shape("cross-attention width", &v_prime.shape(), &l_prime.shape()));
    }
    if v_segs.len() != l_segs.len() {
        return Err(DreamError::Contract("visual and language batches differ in size".into()));
    }
    let spec = AttnSpec::single(p, p, norm);
    let v2l_layout = AttnLayout::new(
        v_segs
            .iter()
            .zip(l_segs)
            .map(|(&(vs, vl), &(ls, ll))| AttnBlock::full(vs, vl, ls, ll))
            .collect(),
    );
    let l2v_layout = AttnLayout::new(
        v_segs
            .iter()
            .zip(l_segs)
            .map(|(&(vs, vl), &(ls, ll))| AttnBlock::full(ls, ll, vs, vl))
            .collect(),
    );
    let v2l = v_prime.attention(l_prime, l_prime, spec, v2l_layout)?;
    let l2v = l_prime.attention(v_prime, v_prime, spec, l2v_layout)?;
    Ok((v2l, l2v))
}

/// Per-sample row concatenation `[V2L; L2V]`.
pub fn aggregate<'t>(
    v2l: Var<'t>,
    v_segs: &[(usize, usize)],
    l2v: Var<'t>,
    l_segs: &[(usize, usize)],
) -> Result<(Var<'t>, Segments)> {
    if v2l.cols() != l2v.cols() {
        return Err(DreamError::shape("aggregate", &v2l.shape(), &l2v.shape()));
    }
    if l_segs.iter().any(|&(_, l)| l == 0) {
        return Err(DreamError::Contract("every sample needs at least one keyword row".into()));
    }
    packing::interleave(&[(v2l, v_segs), (l2v, l_segs)])
}
