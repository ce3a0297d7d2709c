//! The full pipeline: encoders, fusion, alignment and decoder.

use std::rc::Rc;

use crate::abstractor::{Abstractor, AbstractorOutput};
use crate::adaptor::{Adaptor, AdaptorOutput};
use crate::alignment::{AlignedPair, Alignment};
use crate::autodiff::{Tape, Var};
use crate::config::ModelConfig;
use crate::data::{self, Sample};
use crate::decoder::{DecodeMode, Decoder, DecoderOutput};
use crate::encoders::{pack_images, KeywordEncoder, VisualEncoder};
use crate::error::{DreamError, Result};
use crate::packing::{self, Segments};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::Tensor;

/// Projection used when neither fusion module is enabled: each modality is
/// mapped to the shared width and the rows are stacked.
#[derive(Clone, Debug)]
pub struct StaticFusion {
    pub visual: (ParamId, ParamId),
    pub language: Option<(ParamId, ParamId)>,
}

#[derive(Clone, Debug)]
pub struct Dream {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub visual: VisualEncoder,
    pub keywords: Option<KeywordEncoder>,
    pub abstractor: Option<Abstractor>,
    pub adaptor: Option<Adaptor>,
    pub static_fusion: Option<StaticFusion>,
    pub alignment: Option<Alignment>,
    pub decoder: Decoder,
}

/// Intermediate products of one forward pass, packed over the batch.
#[derive(Clone)]
pub struct FusionState<'t> {
    pub v_e: Var<'t>,
    pub v_segments: Segments,
    pub l_e: Option<Var<'t>>,
    pub l_segments: Segments,
    pub abstractor: Option<AbstractorOutput<'t>>,
    pub adaptor: Option<AdaptorOutput<'t>>,
    pub f: Var<'t>,
    pub f_segments: Segments,
}

impl<'t> FusionState<'t> {
    /// Named tensors in pipeline order.
    pub fn named(&self) -> Vec<(&'static str, Var<'t>)> {
        let mut out = vec![("V_e", self.v_e)];
        if let Some(l) = self.l_e {
            out.push(("L_e", l));
        }
        if let Some(a) = &self.abstractor {
            out.extend([("V'", a.v_prime), ("L'", a.l_prime), ("V2L", a.v2l), ("L2V", a.l2v), ("F1", a.f1)]);
        }
        if let Some(a) = &self.adaptor {
            out.extend([("X", a.x), ("F2", a.f2)]);
        }
        out.push(("F", self.f));
        out
    }
}

/// Loss terms of one forward pass.
#[derive(Clone)]
pub struct ForwardPass<'t> {
    pub fusion: FusionState<'t>,
    pub decoder: DecoderOutput<'t>,
    pub ce: Var<'t>,
    pub align: Option<Var<'t>>,
    pub penalty: Option<Var<'t>>,
    pub total: Var<'t>,
    pub tokens: usize,
}

impl<'t> ForwardPass<'t> {
    /// First tensor holding a NaN or infinity, in pipeline order.
    pub fn first_non_finite(&self) -> Option<(String, usize)> {
        let mut named = self.fusion.named();
        named.push(("logits", self.decoder.logits));
        named.push(("L_CE", self.ce));
        if let Some(a) = self.align {
            named.push(("L_align", a));
        }
        named.push(("L_total", self.total));
        named
            .into_iter()
            .find_map(|(n, v)| v.value().first_non_finite().map(|i| (n.to_string(), i)))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub lambda: f64,
    pub indicator_reg: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights {
            lambda: 0.5,
            indicator_reg: 0.0,
        }
    }
}

impl Dream {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let c = &config;
        let comp = c.components;
        let mut init = Init::new(&mut store, c.seed);
        let visual = VisualEncoder::new(c, &mut init)?;
        let keywords = comp.keywords.then(|| KeywordEncoder::new(c, &mut init)).transpose()?;
        let abstractor = comp.abstractor.then(|| Abstractor::new(c, &mut init)).transpose()?;
        let adaptor = comp.adaptor.then(|| Adaptor::new(c, &mut init)).transpose()?;
        let static_fusion = comp
            .static_fusion()
            .then(|| {
                init.scoped("static_fusion", |i| {
                    Ok(StaticFusion {
                        visual: (i.linear("visual.w", c.visual_dim, c.shared_dim)?, i.zeros("visual.b", &[c.shared_dim])?),
                        language: comp
                            .keywords
                            .then(|| -> Result<_> {
                                Ok((i.linear("language.w", c.keyword_dim, c.shared_dim)?, i.zeros("language.b", &[c.shared_dim])?))
                            })
                            .transpose()?,
                    })
                })
            })
            .transpose()?;
        let alignment = comp.alignment.then(|| Alignment::new(c, &mut init)).transpose()?;
        let decoder = Decoder::new(c, &mut init)?;
        for t in store.tensors_mut() {
            c.precision.round_slice(t.data_mut());
        }
        Ok(Dream {
            config,
            store,
            visual,
            keywords,
            abstractor,
            adaptor,
            static_fusion,
            alignment,
            decoder,
        })
    }

    pub fn param_count(&self) -> usize {
        self.store.numel()
    }

    pub fn pack_images(&self, samples: &[Sample]) -> Result<Tensor> {
        let images: Vec<Tensor> = samples.iter().map(|s| s.image.clone()).collect();
        pack_images(&images, self.config.image_side, self.config.image_channels)
    }

    /// Runs encoders and fusion. `images` is the packed image matrix.
    pub fn fuse<'t>(
        &self,
        p: &Bound<'t>,
        images: Var<'t>,
        keywords: &[Vec<usize>],
        gate_override: Option<Var<'t>>,
    ) -> Result<FusionState<'t>> {
        let n = keywords.len();
        if n == 0 {
            return Err(DreamError::Contract("empty batch".into()));
        }
        let v_e = self.visual.forward(p, images, n)?;
        let s_v = self.config.visual_tokens();
        let v_segments = packing::segments(&vec![s_v; n]);
        let (l_e, l_segments) = match &self.keywords {
            Some(enc) => {
                let (l, s) = enc.forward(p, keywords, None)?;
                (Some(l), s)
            }
            None => (None, Segments::new()),
        };
        let abstractor = match (&self.abstractor, l_e) {
            (Some(a), Some(l)) => Some(a.forward(p, v_e, &v_segments, l, &l_segments)?),
            _ => None,
        };
        let adaptor = match (&self.adaptor, l_e) {
            (Some(a), Some(l)) => Some(a.forward(p, v_e, &v_segments, l, &l_segments, gate_override)?),
            _ => None,
        };
        let (f, f_segments) = match (&abstractor, &adaptor, &self.static_fusion) {
            (Some(a), Some(d), _) => packing::interleave(&[(a.f1, &a.f1_segments), (d.f2, &d.f2_segments)])?,
            (Some(a), None, _) => (a.f1, a.f1_segments.clone()),
            (None, Some(d), _) => (d.f2, d.f2_segments.clone()),
            (None, None, Some(sf)) => {
                let fv = v_e.matmul(p.var(sf.visual.0))?.add_row(p.var(sf.visual.1))?;
                match (sf.language, l_e) {
                    (Some((w, b)), Some(l)) => {
                        let fl = l.matmul(p.var(w))?.add_row(p.var(b))?;
                        packing::interleave(&[(fv, &v_segments), (fl, &l_segments)])?
                    }
                    _ => (fv, v_segments.clone()),
                }
            }
            (None, None, None) => return Err(DreamError::Contract("no fusion path configured".into())),
        };
        Ok(FusionState {
            v_e,
            v_segments,
            l_e,
            l_segments,
            abstractor,
            adaptor,
            f,
            f_segments,
        })
    }

    /// Training objective `L_CE + λ L_align` (plus the optional indicator
    /// penalty) over a batch, with `images` supplied as a tape variable.
    pub fn forward_with_images<'t>(
        &self,
        p: &Bound<'t>,
        images: Var<'t>,
        batch: &[Sample],
        weights: LossWeights,
        gate_override: Option<Var<'t>>,
    ) -> Result<ForwardPass<'t>> {
        let keywords: Vec<Vec<usize>> = batch.iter().map(|s| s.keywords.clone()).collect();
        let fusion = self.fuse(p, images, &keywords, gate_override)?;
        for (what, v) in fusion.named() {
            if let Some(index) = v.value().first_non_finite() {
                return Err(DreamError::NonFinite {
                    what: what.into(),
                    index,
                });
            }
        }
        let align = match &self.alignment {
            Some(al) => {
                let reports: Vec<Vec<usize>> = batch.iter().map(|s| s.report.clone()).collect();
                let pair = AlignedPair {
                    f_emb: al.pool_fusion(p, fusion.f, &fusion.f_segments)?,
                    r_emb: al.embed_reports(p, &reports)?,
                };
                Some(al.loss(p, &pair)?)
            }
            None => None,
        };
        let inputs: Vec<Vec<usize>> = batch.iter().map(Sample::decoder_input).collect();
        let decoder = self.decoder.forward(p, &inputs, fusion.f, &fusion.f_segments)?;
        let targets: Vec<Option<usize>> = batch.iter().flat_map(|s| s.decoder_target()).map(Some).collect();
        let tokens = targets.len();
        let ce = decoder.logits.cross_entropy(Rc::new(targets))?;
        let mut total = ce;
        if let Some(a) = align {
            total = total.add(a.scale(weights.lambda))?;
        }
        let penalty = match &self.adaptor {
            Some(ad) if weights.indicator_reg > 0.0 => Some(ad.indicator_penalty(p, weights.indicator_reg)?),
            _ => None,
        };
        if let Some(pen) = penalty {
            total = total.add(pen)?;
        }
        Ok(ForwardPass {
            fusion,
            decoder,
            ce,
            align,
            penalty,
            total,
            tokens,
        })
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, batch: &[Sample], weights: LossWeights) -> Result<ForwardPass<'t>> {
        let images = p.tape().constant(self.pack_images(batch)?);
        self.forward_with_images(p, images, batch, weights, None)
    }

    /// Fused memory `F` for one sample, computed without gradients.
    pub fn fused_memory(&self, image: &Tensor, keywords: &[usize]) -> Result<Tensor> {
        let tape = Tape::new(self.config.precision);
        let p = self.store.bind(&tape, false);
        let images = tape.constant(pack_images(std::slice::from_ref(image), self.config.image_side, self.config.image_channels)?);
        let kw = if self.keywords.is_some() { keywords.to_vec() } else { vec![data::SEP] };
        Ok(self.fuse(&p, images, &[kw], None)?.f.value())
    }

    /// Encodes once, then decodes token by token with the KV cache.
    pub fn generate(&self, image: &Tensor, keywords: &[usize], max_len: usize, mode: DecodeMode) -> Result<Vec<usize>> {
        self.generate_with(image, keywords, max_len, mode, true)
    }

    pub fn generate_with(
        &self,
        image: &Tensor,
        keywords: &[usize],
        max_len: usize,
        mode: DecodeMode,
        use_cache: bool,
    ) -> Result<Vec<usize>> {
        let memory = self.fused_memory(image, keywords)?;
        self.decoder.generate(
            &self.store,
            &memory,
            data::START,
            data::END,
            max_len,
            mode,
            use_cache,
            self.config.precision,
        )
    }
}
