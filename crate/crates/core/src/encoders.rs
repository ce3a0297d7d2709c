//! Visual stand-in backbone and the keyword Transformer encoder.

use std::rc::Rc;

use crate::autodiff::{AttnBlock, AttnLayout, AttnNorm, AttnSpec, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{DreamError, Result};
use crate::packing::{self, Segments};
use crate::params::{Bound, Init, ParamId};
use crate::tensor::Tensor;

/// Visual grid `W × H × E_V`.
#[derive(Clone, Debug, PartialEq)]
pub struct VisualFeatures {
    pub tensor: Tensor,
}

impl VisualFeatures {
    pub fn width(&self) -> usize {
        self.tensor.shape()[0]
    }

    pub fn height(&self) -> usize {
        self.tensor.shape()[1]
    }

    pub fn channels(&self) -> usize {
        self.tensor.shape()[2]
    }
}

/// Keyword embeddings `S_L × E_L` with the mask used to produce them.
#[derive(Clone, Debug, PartialEq)]
pub struct KeywordEmbeddings {
    pub tensor: Tensor,
    /// `true` for real tokens, `false` for padding.
    pub mask: Vec<bool>,
}

/// Stacks `side × side × C` images into a `(N·side²) × C` matrix.
pub fn pack_images(images: &[Tensor], side: usize, channels: usize) -> Result<Tensor> {
    if side == 0 || side % 8 != 0 {
        return Err(DreamError::config("image_side", format!("{side} is not divisible by 8")));
    }
    let mut data = Vec::with_capacity(images.len() * side * side * channels);
    for img in images {
        if img.shape() != [side, side, channels] {
            return Err(DreamError::shape("image", img.shape(), &[side, side, channels]));
        }
        data.extend_from_slice(img.data());
    }
    Tensor::new(vec![images.len() * side * side, channels], data)
}

/// im2col indices for a 3×3, stride-2, pad-1 convolution over `n` packed
/// `side × side × c` maps.
fn conv_indices(n: usize, side: usize, c: usize) -> Rc<Vec<Option<usize>>> {
    let out = side / 2;
    let mut ix = Vec::with_capacity(n * out * out * 9 * c);
    for img in 0..n {
        for oy in 0..out {
            for ox in 0..out {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let iy = (2 * oy + ky) as isize - 1;
                        let ix_ = (2 * ox + kx) as isize - 1;
                        let inside = iy >= 0 && ix_ >= 0 && (iy as usize) < side && (ix_ as usize) < side;
                        for ch in 0..c {
                            ix.push(inside.then(|| ((img * side + iy as usize) * side + ix_ as usize) * c + ch));
                        }
                    }
                }
            }
        }
    }
    Rc::new(ix)
}

#[derive(Clone, Debug)]
pub struct VisualEncoder {
    convs: Vec<(ParamId, ParamId)>,
    channels: Vec<usize>,
    pos: ParamId,
    ctx_score: ParamId,
    ctx_w: ParamId,
    ctx_b: ParamId,
    side: usize,
}

impl VisualEncoder {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        let channels = vec![cfg.image_channels, cfg.conv_channels[0], cfg.conv_channels[1], cfg.visual_dim];
        init.scoped("visual", |init| {
            let mut convs = Vec::new();
            for (l, w) in channels.windows(2).enumerate() {
                let weight = init.linear(&format!("conv{l}.w"), 9 * w[0], w[1])?;
                let bias = init.zeros(&format!("conv{l}.b"), &[w[1]])?;
                convs.push((weight, bias));
            }
            let first = cfg.image_side / 2;
            Ok(VisualEncoder {
                convs,
                pos: init.normal("pos", &[first * first, cfg.conv_channels[0]], 0.5)?,
                ctx_score: init.linear("ctx.score", cfg.visual_dim, 1)?,
                ctx_w: init.zeros("ctx.w", &[cfg.visual_dim, cfg.visual_dim])?,
                ctx_b: init.zeros("ctx.b", &[cfg.visual_dim])?,
                channels: channels.clone(),
                side: cfg.image_side,
            })
        })
    }

    /// Final conv block weight and bias, exposed for tests that zero them.
    pub fn last_conv(&self) -> (ParamId, ParamId) {
        self.convs[self.convs.len() - 1]
    }

    /// `images` is the packed `(N·side²) × C` matrix; returns `(N·S_V) × E_V`
    /// with rows grouped by image, row-major over the grid. A learned
    /// position table is added after the first block.
    pub fn forward<'t>(&self, p: &Bound<'t>, images: Var<'t>, n: usize) -> Result<Var<'t>> {
        if images.rows() != n * self.side * self.side || images.cols() != self.channels[0] {
            return Err(DreamError::shape("visual input", &images.shape(), &[n * self.side * self.side, self.channels[0]]));
        }
        let mut x = images;
        let mut side = self.side;
        for (l, &(w, b)) in self.convs.iter().enumerate() {
            let c = self.channels[l];
            let out = side / 2;
            let cols = x.gather(conv_indices(n, side, c), &[n * out * out, 9 * c])?;
            x = cols.matmul(p.var(w))?.add_row(p.var(b))?.gelu();
            if l == 0 {
                let rows: Vec<usize> = (0..n * out * out).map(|r| r % (out * out)).collect();
                x = x.add(p.var(self.pos).gather_rows(&rows)?)?;
            }
            side = out;
        }
        let s_v = side * side;
        let e = self.channels[3];
        let scores = x.matmul(p.var(self.ctx_score))?;
        let ones = x.tape().constant(Tensor::full(&[n, 1], 1.0));
        let layout = AttnLayout::new((0..n).map(|i| AttnBlock::full(i, 1, i * s_v, s_v)).collect());
        let spec = AttnSpec {
            scale: 1.0,
            ..AttnSpec::single(1, e, AttnNorm::Softmax)
        };
        let pooled = ones.attention(scores, x, spec, layout)?;
        let ctx = pooled.matmul(p.var(self.ctx_w))?.add_row(p.var(self.ctx_b))?;
        let owner: Vec<usize> = (0..n).flat_map(|i| std::iter::repeat_n(i, s_v)).collect();
        x.add(ctx.gather_rows(&owner)?)
    }

    pub fn grid_side(&self) -> usize {
        self.side / 8
    }
}

/// Sinusoidal positional table, `len × dim`.
pub fn sinusoidal_positions(len: usize, dim: usize) -> Tensor {
    let mut data = vec![0.0; len * dim];
    for pos in 0..len {
        for i in 0..dim {
            let k = (i / 2) as f64;
            let angle = pos as f64 / 10_000f64.powf(2.0 * k / dim as f64);
            data[pos * dim + i] = if i % 2 == 0 { angle.sin() } else { angle.cos() };
        }
    }
    Tensor::from_parts(vec![len, dim], data)
}

/// Multi-head self-attention weights; heads are column blocks of each
/// projection.
#[derive(Clone, Copy, Debug)]
pub struct MhaParams {
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub heads: usize,
}

impl MhaParams {
    pub fn new(init: &mut Init, dim: usize, heads: usize) -> Result<Self> {
        Ok(MhaParams {
            wq: init.linear("wq", dim, dim)?,
            wk: init.linear("wk", dim, dim)?,
            wv: init.linear("wv", dim, dim)?,
            wo: init.linear("wo", dim, dim)?,
            heads,
        })
    }

    /// `Concat(H_1..H_h) W_o` over packed rows.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: Var<'t>, layout: Rc<AttnLayout>, norm: AttnNorm) -> Result<Var<'t>> {
        let d = x.cols();
        if self.heads == 0 || d % self.heads != 0 {
            return Err(DreamError::config("heads", format!("{} heads do not divide width {d}", self.heads)));
        }
        let q = x.matmul(p.var(self.wq))?;
        let k = x.matmul(p.var(self.wk))?;
        let v = x.matmul(p.var(self.wv))?;
        let spec = AttnSpec::grouped(self.heads, self.heads, d / self.heads, norm);
        q.attention(k, v, spec, layout)?.matmul(p.var(self.wo))
    }
}

/// Self-attention over one sequence; `mask[j] == false` hides key `j`.
pub fn mha<'t>(
    params: &MhaParams,
    p: &Bound<'t>,
    x: Var<'t>,
    mask: Option<&[bool]>,
    norm: AttnNorm,
) -> Result<Var<'t>> {
    let s = x.rows();
    let block = match mask {
        None => AttnBlock::full(0, s, 0, s),
        Some(m) if m.len() != s => return Err(DreamError::shape("mha mask", &[m.len()], &[s])),
        Some(m) => {
            if !m.iter().any(|&b| b) {
                return Err(DreamError::Contract("mask hides every position".into()));
            }
            AttnBlock::key_mask(0, s, 0, m)
        }
    };
    params.forward(p, x, AttnLayout::new(vec![block]), norm)
}

#[derive(Clone, Debug)]
struct EncoderLayer {
    attn: MhaParams,
    ln1: (ParamId, ParamId),
    ff1: (ParamId, ParamId),
    ff2: (ParamId, ParamId),
    ln2: (ParamId, ParamId),
}

/// Post-norm Transformer encoder over keyword tokens.
#[derive(Clone, Debug)]
pub struct KeywordEncoder {
    embedding: ParamId,
    layers: Vec<EncoderLayer>,
    positions: Option<Tensor>,
    vocab: usize,
    max_len: usize,
    eps: f64,
    norm: AttnNorm,
}

impl KeywordEncoder {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        let e = cfg.keyword_dim;
        if cfg.keyword_heads == 0 || e % cfg.keyword_heads != 0 {
            return Err(DreamError::config("keyword_heads", "must divide keyword_dim"));
        }
        init.scoped("keywords", |init| {
            let embedding = init.normal("embedding", &[cfg.vocab_size, e], 1.0)?;
            let mut layers = Vec::new();
            for l in 0..cfg.keyword_layers {
                layers.push(init.scoped(&format!("layer{l}"), |init| {
                    Ok(EncoderLayer {
                        attn: init.scoped("attn", |i| MhaParams::new(i, e, cfg.keyword_heads))?,
                        ln1: (init.full("ln1.g", &[e], 1.0)?, init.zeros("ln1.b", &[e])?),
                        ff1: (init.linear("ff1.w", e, cfg.keyword_ffn_dim)?, init.zeros("ff1.b", &[cfg.keyword_ffn_dim])?),
                        ff2: (init.linear("ff2.w", cfg.keyword_ffn_dim, e)?, init.zeros("ff2.b", &[e])?),
                        ln2: (init.full("ln2.g", &[e], 1.0)?, init.zeros("ln2.b", &[e])?),
                    })
                })?);
            }
            Ok(KeywordEncoder {
                embedding,
                layers,
                positions: cfg.positional_encoding.then(|| sinusoidal_positions(cfg.max_keywords, e)),
                vocab: cfg.vocab_size,
                max_len: cfg.max_keywords,
                eps: cfg.ln_eps,
                norm: cfg.attn_norm,
            })
        })
    }

    pub fn embedding(&self) -> ParamId {
        self.embedding
    }

    pub fn mha_params(&self, layer: usize) -> Option<&MhaParams> {
        self.layers.get(layer).map(|l| &l.attn)
    }

    /// Encodes packed keyword sequences. `masks`, when given, holds one
    /// entry per token (`false` = padding). Returns the packed `ΣS_L × E_L`
    /// matrix and its per-sample segments.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        seqs: &[Vec<usize>],
        masks: Option<&[Vec<bool>]>,
    ) -> Result<(Var<'t>, Segments)> {
        let tape = p.tape();
        let mut ids = Vec::new();
        let mut pos_rows = Vec::new();
        for s in seqs {
            if s.is_empty() || s.len() > self.max_len {
                return Err(DreamError::Contract(format!(
                    "keyword sequence length {} outside 1..={}",
                    s.len(),
                    self.max_len
                )));
            }
            for (i, &t) in s.iter().enumerate() {
                if t >= self.vocab {
                    return Err(DreamError::TokenOutOfRange { id: t, vocab: self.vocab });
                }
                ids.push(t);
                pos_rows.push(i);
            }
        }
        let segs = packing::segments(&seqs.iter().map(Vec::len).collect::<Vec<_>>());
        let mut blocks = Vec::with_capacity(seqs.len());
        for (i, &(start, len)) in segs.iter().enumerate() {
            match masks {
                None => blocks.push(AttnBlock::full(start, len, start, len)),
                Some(ms) => {
                    let m = ms.get(i).ok_or_else(|| DreamError::Contract("missing keyword mask".into()))?;
                    if m.len() != len {
                        return Err(DreamError::shape("keyword mask", &[m.len()], &[len]));
                    }
                    if !m.iter().any(|&b| b) {
                        return Err(DreamError::Contract("keyword mask hides every token".into()));
                    }
                    blocks.push(AttnBlock::key_mask(start, len, start, m));
                }
            }
        }
        let layout = AttnLayout::new(blocks);
        let mut x = p.var(self.embedding).gather_rows(&ids)?;
        if let Some(pe) = &self.positions {
            let e = pe.cols();
            let data: Vec<f64> = pos_rows.iter().flat_map(|&r| pe.row(r).to_vec()).collect();
            x = x.add(tape.constant(Tensor::new(vec![ids.len(), e], data)?))?;
        }
        for l in &self.layers {
            let a = l.attn.forward(p, x, layout.clone(), self.norm)?;
            x = x.add(a)?.layer_norm(p.var(l.ln1.0), p.var(l.ln1.1), self.eps)?;
            let h = x.matmul(p.var(l.ff1.0))?.add_row(p.var(l.ff1.1))?.gelu();
            let f = h.matmul(p.var(l.ff2.0))?.add_row(p.var(l.ff2.1))?;
            x = x.add(f)?.layer_norm(p.var(l.ln2.0), p.var(l.ln2.1), self.eps)?;
        }
        Ok((x, segs))
    }
}

/// Encodes one image with parameters taken as constants.
pub fn encode_image(enc: &VisualEncoder, store: &crate::params::ParamStore, image: &Tensor) -> Result<VisualFeatures> {
    let side = enc.side;
    let packed = pack_images(std::slice::from_ref(image), side, enc.channels[0])?;
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let v = enc.forward(&p, tape.constant(packed), 1)?.value();
    let g = enc.grid_side();
    Ok(VisualFeatures {
        tensor: v.reshape(&[g, g, enc.channels[3]])?,
    })
}

/// Encodes one keyword sequence with parameters taken as constants.
pub fn encode_keywords(
    enc: &KeywordEncoder,
    store: &crate::params::ParamStore,
    ids: &[usize],
    mask: Option<&[bool]>,
) -> Result<KeywordEmbeddings> {
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let masks = mask.map(|m| vec![m.to_vec()]);
    let (l, _) = enc.forward(&p, &[ids.to_vec()], masks.as_deref())?;
    Ok(KeywordEmbeddings {
        tensor: l.value(),
        mask: mask.map_or_else(|| vec![true; ids.len()], <[bool]>::to_vec),
    })
}
