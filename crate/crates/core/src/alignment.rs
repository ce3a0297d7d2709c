//! Contrastive alignment between pooled fused features and report text.

use std::rc::Rc;

use crate::autodiff::Var;
use crate::config::ModelConfig;
use crate::error::{DreamError, Result};
use crate::packing;
use crate::params::{Bound, Init, ParamId};
use crate::tensor::Tensor;

/// Lower bound added to `softplus(raw)` so the temperature stays positive.
pub const TAU_FLOOR: f64 = 1e-3;

fn softplus_inverse(y: f64) -> f64 {
    y + (-(-y).exp_m1()).ln()
}

#[derive(Clone, Debug)]
pub struct Alignment {
    pub pool_w: ParamId,
    pub pool_b: ParamId,
    pub report_embedding: ParamId,
    pub report_w: ParamId,
    pub report_b: ParamId,
    pub tau_raw: ParamId,
    pub symmetric: bool,
    vocab: usize,
}

/// Row-normalized embeddings of a batch; row `i` of each belongs to sample `i`.
#[derive(Clone)]
pub struct AlignedPair<'t> {
    pub f_emb: Var<'t>,
    pub r_emb: Var<'t>,
}

impl Alignment {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        let (p, d) = (cfg.shared_dim, cfg.align_dim);
        init.scoped("alignment", |init| {
            Ok(Alignment {
                pool_w: init.linear("pool.w", p, d)?,
                pool_b: init.zeros("pool.b", &[d])?,
                report_embedding: init.normal("report.embedding", &[cfg.vocab_size, p], 1.0)?,
                report_w: init.linear("report.w", p, d)?,
                report_b: init.zeros("report.b", &[d])?,
                tau_raw: init.tensor("tau_raw", Tensor::scalar(softplus_inverse(cfg.tau_init - TAU_FLOOR)))?,
                symmetric: cfg.symmetric_infonce,
                vocab: cfg.vocab_size,
            })
        })
    }

    /// `τ = softplus(raw) + 1e-3`.
    pub fn tau<'t>(&self, p: &Bound<'t>) -> Var<'t> {
        p.var(self.tau_raw).softplus().add_const(TAU_FLOOR)
    }

    /// Mean over each sample's fused rows, projection, unit normalization.
    pub fn pool_fusion<'t>(&self, p: &Bound<'t>, f: Var<'t>, segs: &[(usize, usize)]) -> Result<Var<'t>> {
        let pooled = f.segment_mean(Rc::new(segs.to_vec()))?;
        Ok(pooled
            .matmul(p.var(self.pool_w))?
            .add_row(p.var(self.pool_b))?
            .l2_normalize_rows())
    }

    /// Mean token embedding per report, projection, unit normalization.
    pub fn embed_reports<'t>(&self, p: &Bound<'t>, reports: &[Vec<usize>]) -> Result<Var<'t>> {
        let mut ids = Vec::new();
        for r in reports {
            if r.is_empty() {
                return Err(DreamError::Contract("cannot embed an empty report".into()));
            }
            for &t in r {
                if t >= self.vocab {
                    return Err(DreamError::TokenOutOfRange { id: t, vocab: self.vocab });
                }
            }
            ids.extend_from_slice(r);
        }
        let segs = packing::segments(&reports.iter().map(Vec::len).collect::<Vec<_>>());
        let rows = p.var(self.report_embedding).gather_rows(&ids)?;
        Ok(rows
            .segment_mean(Rc::new(segs))?
            .matmul(p.var(self.report_w))?
            .add_row(p.var(self.report_b))?
            .l2_normalize_rows())
    }

    pub fn loss<'t>(&self, p: &Bound<'t>, pair: &AlignedPair<'t>) -> Result<Var<'t>> {
        let tau = self.tau(p);
        if self.symmetric {
            let a = info_nce(pair.f_emb, pair.r_emb, tau)?;
            let b = info_nce(pair.r_emb, pair.f_emb, tau)?;
            Ok(a.add(b)?.scale(0.5))
        } else {
            info_nce(pair.f_emb, pair.r_emb, tau)
        }
    }
}

/// `−(1/N) Σ_i log softmax_j(sim(F_i, R_j)/τ)[i]` with negatives drawn from
/// the rows of `r`. Rows are assumed unit-norm, so `sim` is a dot product.
pub fn info_nce<'t>(f: Var<'t>, r: Var<'t>, tau: Var<'t>) -> Result<Var<'t>> {
    let n = f.rows();
    if n == 0 || r.rows() != n || f.cols() != r.cols() {
        return Err(DreamError::shape("info_nce", &f.shape(), &r.shape()));
    }
    let logits = f.matmul(r.transpose()?)?.div_scalar(tau)?;
    let targets: Vec<Option<usize>> = (0..n).map(Some).collect();
    Ok(logits.cross_entropy(Rc::new(targets))?.scale(1.0 / n as f64))
}
