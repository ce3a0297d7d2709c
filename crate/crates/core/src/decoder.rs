//! Compact autoregressive report decoder: RMS pre-norm, rotary causal
//! grouped-query self-attention, cross-attention over fused memory and
//! report embeddings, SwiGLU feed-forward.

use std::rc::Rc;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{AttnBlock, AttnLayout, AttnNorm, AttnSpec, Tape, Var};
use crate::config::ModelConfig;
use crate::error::{DreamError, Result};
use crate::packing::{self, Segments};
use crate::params::{Bound, Init, ParamId, ParamStore};
use crate::tensor::{Precision, Tensor};

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_self: ParamId,
    pub wq: ParamId,
    pub wk: ParamId,
    pub wv: ParamId,
    pub wo: ParamId,
    pub norm_cross: ParamId,
    pub cq: ParamId,
    pub ck: ParamId,
    pub cv: ParamId,
    pub co: ParamId,
    pub norm_ffn: ParamId,
    pub w1: ParamId,
    pub w2: ParamId,
    pub w3: ParamId,
}

#[derive(Clone, Debug)]
pub struct Decoder {
    pub embedding: ParamId,
    pub memory_proj: ParamId,
    pub layers: Vec<DecoderLayer>,
    pub final_norm: ParamId,
    pub head: ParamId,
    pub q_heads: usize,
    pub kv_heads: usize,
    pub head_dim: usize,
    pub max_len: usize,
    pub rope_base: f64,
    pub eps: f64,
    pub norm: AttnNorm,
    pub vocab: usize,
}

/// Cached keys and values of one layer, stored row-major as
/// `t × (n_kv · head_dim)`.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct LayerCache {
    pub self_k: Vec<f64>,
    pub self_v: Vec<f64>,
    /// Memory rows first, then one row per decoded token's embedding.
    pub cross_k: Vec<f64>,
    pub cross_v: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct KvCache {
    pub layers: Vec<LayerCache>,
    memory_rows: usize,
    len: usize,
    width: usize,
}

impl KvCache {
    /// Tokens processed so far.
    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn memory_rows(&self) -> usize {
        self.memory_rows
    }

    fn rows(data: &[f64], width: usize) -> usize {
        data.len() / width
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum DecodeMode {
    Greedy,
    Temperature { temperature: f64, seed: u64 },
}

/// Packed decoder outputs.
#[derive(Clone)]
pub struct DecoderOutput<'t> {
    pub logits: Var<'t>,
    /// Token embeddings of the decoder inputs.
    pub report_embeddings: Var<'t>,
    pub token_segments: Segments,
}

impl Decoder {
    pub fn new(cfg: &ModelConfig, init: &mut Init) -> Result<Self> {
        let d = cfg.model_dim;
        let hd = cfg.head_dim();
        if hd % 2 != 0 {
            return Err(DreamError::config("head_dim", "RoPE needs an even head dim"));
        }
        let (qw, kw) = (cfg.query_heads * hd, cfg.kv_heads * hd);
        let ff = cfg.swiglu_dim();
        init.scoped("decoder", |init| {
            let embedding = init.normal("embedding", &[cfg.vocab_size, d], 1.0)?;
            let memory_proj = init.linear("memory_proj", cfg.shared_dim, d)?;
            let mut layers = Vec::new();
            for l in 0..cfg.decoder_layers {
                layers.push(init.scoped(&format!("layer{l}"), |i| {
                    Ok(DecoderLayer {
                        norm_self: i.full("norm_self", &[d], 1.0)?,
                        wq: i.linear("self.wq", d, qw)?,
                        wk: i.linear("self.wk", d, kw)?,
                        wv: i.linear("self.wv", d, kw)?,
                        wo: i.linear("self.wo", qw, d)?,
                        norm_cross: i.full("norm_cross", &[d], 1.0)?,
                        cq: i.linear("cross.wq", d, qw)?,
                        ck: i.linear("cross.wk", d, kw)?,
                        cv: i.linear("cross.wv", d, kw)?,
                        co: i.linear("cross.wo", qw, d)?,
                        norm_ffn: i.full("norm_ffn", &[d], 1.0)?,
                        w1: i.linear("ffn.w1", d, ff)?,
                        w2: i.linear("ffn.w2", d, ff)?,
                        w3: i.linear("ffn.w3", ff, d)?,
                    })
                })?);
            }
            Ok(Decoder {
                embedding,
                memory_proj,
                layers,
                final_norm: init.full("final_norm", &[d], 1.0)?,
                head: init.linear("head", d, cfg.vocab_size)?,
                q_heads: cfg.query_heads,
                kv_heads: cfg.kv_heads,
                head_dim: hd,
                max_len: cfg.max_report_len,
                rope_base: cfg.rope_base,
                eps: cfg.rms_eps,
                norm: cfg.attn_norm,
                vocab: cfg.vocab_size,
            })
        })
    }

    fn spec(&self) -> AttnSpec {
        AttnSpec::grouped(self.q_heads, self.kv_heads, self.head_dim, self.norm)
    }

    fn kv_width(&self) -> usize {
        self.kv_heads * self.head_dim
    }

    fn check_tokens(&self, seq: &[usize]) -> Result<()> {
        if seq.is_empty() || seq.len() > self.max_len {
            return Err(DreamError::Contract(format!(
                "decoder input length {} outside 1..={}",
                seq.len(),
                self.max_len
            )));
        }
        match seq.iter().find(|&&t| t >= self.vocab) {
            Some(&t) => Err(DreamError::TokenOutOfRange { id: t, vocab: self.vocab }),
            None => Ok(()),
        }
    }

    /// Teacher-forced forward over packed input sequences. `memory` holds
    /// each sample's fused rows (width P) laid out by `mem_segs`.
    ///
    /// Cross-attention memory per sample is `[F W_mem; E_r]`, where `E_r`
    /// are the input token embeddings; query `t` sees all of `F` and
    /// `E_r[0..=t]`.
    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        inputs: &[Vec<usize>],
        memory: Var<'t>,
        mem_segs: &[(usize, usize)],
    ) -> Result<DecoderOutput<'t>> {
        if inputs.len() != mem_segs.len() {
            return Err(DreamError::Contract("decoder inputs and memory differ in batch size".into()));
        }
        let mut ids = Vec::new();
        let mut positions = Vec::new();
        for s in inputs {
            self.check_tokens(s)?;
            ids.extend_from_slice(s);
            positions.extend(0..s.len());
        }
        if mem_segs.iter().any(|&(_, l)| l == 0) {
            return Err(DreamError::Contract("decoder memory must be nonempty".into()));
        }
        let tok_segs = packing::segments(&inputs.iter().map(Vec::len).collect::<Vec<_>>());
        let x0 = p.var(self.embedding).gather_rows(&ids)?;
        let mem_f = memory.matmul(p.var(self.memory_proj))?;
        let (mem, mem_all_segs) = packing::interleave(&[(mem_f, mem_segs), (x0, &tok_segs)])?;

        let self_layout = AttnLayout::new(
            tok_segs
                .iter()
                .map(|&(s, l)| AttnBlock::causal(s, l, s, l, 0))
                .collect(),
        );
        let cross_layout = AttnLayout::new(
            tok_segs
                .iter()
                .zip(mem_segs.iter().zip(&mem_all_segs))
                .map(|(&(ts, tl), (&(_, m), &(ms, ml)))| AttnBlock::causal(ts, tl, ms, ml, m))
                .collect(),
        );

        let mut x = x0;
        for layer in &self.layers {
            let h = x.rms_norm(p.var(layer.norm_self), self.eps)?;
            let q = h.matmul(p.var(layer.wq))?.rope(&positions, self.head_dim, self.rope_base)?;
            let k = h.matmul(p.var(layer.wk))?.rope(&positions, self.head_dim, self.rope_base)?;
            let v = h.matmul(p.var(layer.wv))?;
            let a = q.attention(k, v, self.spec(), self_layout.clone())?;
            x = x.add(a.matmul(p.var(layer.wo))?)?;

            let h = x.rms_norm(p.var(layer.norm_cross), self.eps)?;
            let q = h.matmul(p.var(layer.cq))?;
            let k = mem.matmul(p.var(layer.ck))?;
            let v = mem.matmul(p.var(layer.cv))?;
            let a = q.attention(k, v, self.spec(), cross_layout.clone())?;
            x = x.add(a.matmul(p.var(layer.co))?)?;

            let h = x.rms_norm(p.var(layer.norm_ffn), self.eps)?;
            x = x.add(swiglu_ffn(h, p.var(layer.w1), p.var(layer.w2), p.var(layer.w3))?)?;
        }
        let logits = x
            .rms_norm(p.var(self.final_norm), self.eps)?
            .matmul(p.var(self.head))?;
        Ok(DecoderOutput {
            logits,
            report_embeddings: x0,
            token_segments: tok_segs,
        })
    }

    /// Projects one sample's fused memory (`m × P`) and caches its
    /// cross-attention keys and values.
    pub fn start_cache(&self, store: &ParamStore, memory: &Tensor) -> Result<KvCache> {
        let tape = Tape::default();
        let p = store.bind(&tape, false);
        let mem = tape.constant(memory.clone()).matmul(p.var(self.memory_proj))?;
        let layers = self
            .layers
            .iter()
            .map(|l| {
                Ok(LayerCache {
                    cross_k: mem.matmul(p.var(l.ck))?.value().into_data(),
                    cross_v: mem.matmul(p.var(l.cv))?.value().into_data(),
                    ..LayerCache::default()
                })
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(KvCache {
            layers,
            memory_rows: memory.rows(),
            len: 0,
            width: self.kv_width(),
        })
    }

    /// Feeds one token at position `cache.len()` and returns its `1 × V`
    /// logits; every layer's cache grows by one row.
    pub fn step(&self, store: &ParamStore, cache: &mut KvCache, token: usize, precision: Precision) -> Result<Tensor> {
        let pos = cache.len;
        if pos >= self.max_len {
            return Err(DreamError::Contract(format!("decode position {pos} exceeds max length {}", self.max_len)));
        }
        if cache.layers.len() != self.layers.len() || cache.width != self.kv_width() {
            return Err(DreamError::Contract("cache does not match decoder layout".into()));
        }
        for l in &cache.layers {
            if KvCache::rows(&l.self_k, cache.width) != pos || KvCache::rows(&l.cross_k, cache.width) != cache.memory_rows + pos {
                return Err(DreamError::Contract("cache position mismatch".into()));
            }
        }
        self.check_tokens(&[token])?;
        let tape = Tape::new(precision);
        let p = store.bind(&tape, false);
        let w = cache.width;
        let er = p.var(self.embedding).gather_rows(&[token])?;
        let mut x = er;
        for (layer, lc) in self.layers.iter().zip(cache.layers.iter_mut()) {
            let h = x.rms_norm(p.var(layer.norm_self), self.eps)?;
            let q = h.matmul(p.var(layer.wq))?.rope(&[pos], self.head_dim, self.rope_base)?;
            let k_new = h.matmul(p.var(layer.wk))?.rope(&[pos], self.head_dim, self.rope_base)?;
            let v_new = h.matmul(p.var(layer.wv))?;
            lc.self_k.extend_from_slice(k_new.value().data());
            lc.self_v.extend_from_slice(v_new.value().data());
            let k = tape.constant(Tensor::new(vec![pos + 1, w], lc.self_k.clone())?);
            let v = tape.constant(Tensor::new(vec![pos + 1, w], lc.self_v.clone())?);
            let layout = AttnLayout::new(vec![AttnBlock::full(0, 1, 0, pos + 1)]);
            let a = q.attention(k, v, self.spec(), layout)?;
            x = x.add(a.matmul(p.var(layer.wo))?)?;

            let h = x.rms_norm(p.var(layer.norm_cross), self.eps)?;
            let q = h.matmul(p.var(layer.cq))?;
            lc.cross_k.extend_from_slice(er.matmul(p.var(layer.ck))?.value().data());
            lc.cross_v.extend_from_slice(er.matmul(p.var(layer.cv))?.value().data());
            let rows = cache.memory_rows + pos + 1;
            let k = tape.constant(Tensor::new(vec![rows, w], lc.cross_k.clone())?);
            let v = tape.constant(Tensor::new(vec![rows, w], lc.cross_v.clone())?);
            let layout = AttnLayout::new(vec![AttnBlock::full(0, 1, 0, rows)]);
            let a = q.attention(k, v, self.spec(), layout)?;
            x = x.add(a.matmul(p.var(layer.co))?)?;

            let h = x.rms_norm(p.var(layer.norm_ffn), self.eps)?;
            x = x.add(swiglu_ffn(h, p.var(layer.w1), p.var(layer.w2), p.var(layer.w3))?)?;
        }
        cache.len += 1;
        Ok(x.rms_norm(p.var(self.final_norm), self.eps)?
            .matmul(p.var(self.head))?
            .value())
    }

    /// Full-sequence logits for one sample without any cache.
    pub fn logits(&self, store: &ParamStore, inputs: &[usize], memory: &Tensor, precision: Precision) -> Result<Tensor> {
        let tape = Tape::new(precision);
        let p = store.bind(&tape, false);
        let mem = tape.constant(memory.clone());
        let out = self.forward(&p, &[inputs.to_vec()], mem, &[(0, memory.rows())])?;
        Ok(out.logits.value())
    }

    /// Autoregressive decoding from `start` until `end` or `max_len`
    /// tokens; the returned list includes `end` when it was produced.
    pub fn generate(
        &self,
        store: &ParamStore,
        memory: &Tensor,
        start: usize,
        end: usize,
        max_len: usize,
        mode: DecodeMode,
        use_cache: bool,
        precision: Precision,
    ) -> Result<Vec<usize>> {
        if max_len < 1 {
            return Err(DreamError::config("max_len", "must be at least 1"));
        }
        if max_len > self.max_len {
            return Err(DreamError::config(
                "max_len",
                format!("{max_len} exceeds the decoder limit {}", self.max_len),
            ));
        }
        let mut rng = match mode {
            DecodeMode::Temperature { temperature, seed } => {
                if !(temperature > 0.0) {
                    return Err(DreamError::config("temperature", "must be positive"));
                }
                Some(ChaCha8Rng::seed_from_u64(seed))
            }
            DecodeMode::Greedy => None,
        };
        let mut cache = if use_cache { Some(self.start_cache(store, memory)?) } else { None };
        let mut inputs = vec![start];
        let mut out = Vec::new();
        while out.len() < max_len {
            let last = *inputs.last().expect("nonempty");
            let row = match cache.as_mut() {
                Some(c) => self.step(store, c, last, precision)?.into_data(),
                None => {
                    let l = self.logits(store, &inputs, memory, precision)?;
                    l.row(l.rows() - 1).to_vec()
                }
            };
            let next = match (&mode, rng.as_mut()) {
                (DecodeMode::Temperature { temperature, .. }, Some(r)) => sample(&row, *temperature, r),
                _ => argmax(&row),
            };
            out.push(next);
            if next == end {
                break;
            }
            inputs.push(next);
        }
        Ok(out)
    }
}

/// `((x W1) ⊙ SiLU(x W2)) W3`.
pub fn swiglu_ffn<'t>(x: Var<'t>, w1: Var<'t>, w2: Var<'t>, w3: Var<'t>) -> Result<Var<'t>> {
    x.matmul(w1)?.mul(x.matmul(w2)?.silu())?.matmul(w3)
}

/// Applies rotary embedding to `heads × s × head_dim` rows starting at
/// absolute position `start_pos`.
pub fn rope_apply(x: &Tensor, start_pos: usize, base: f64) -> Result<Tensor> {
    let shape = x.shape();
    if shape.len() != 3 {
        return Err(DreamError::shape("rope_apply", shape, &[0, 0, 0]));
    }
    let (heads, s, hd) = (shape[0], shape[1], shape[2]);
    let tape = Tape::default();
    let rows = tape.constant(x.clone().reshape(&[heads * s, hd])?);
    let positions: Vec<usize> = (0..heads).flat_map(|_| start_pos..start_pos + s).collect();
    rows.rope(&positions, hd, base)?.value().reshape(&[heads, s, hd])
}

fn argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

fn sample(row: &[f64], temperature: f64, rng: &mut ChaCha8Rng) -> usize {
    let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let w: Vec<f64> = row.iter().map(|&v| ((v - m) / temperature).exp()).collect();
    let z: f64 = w.iter().sum();
    let mut u = rng.random::<f64>() * z;
    for (i, &wi) in w.iter().enumerate() {
        if u < wi {
            return i;
        }
        u -= wi;
    }
    row.len() - 1
}

/// Summed next-token cross-entropy over rows with a target.
pub fn cross_entropy<'t>(logits: Var<'t>, targets: &[Option<usize>]) -> Result<Var<'t>> {
    logits.cross_entropy(Rc::new(targets.to_vec()))
}
