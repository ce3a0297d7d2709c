//! Gradient-check suite behind `dream grad-check`.

use std::fmt;

use anyhow::{bail, Result};
use dream_core::abstractor::Abstractor;
use dream_core::adaptor::Adaptor;
use dream_core::alignment::{AlignedPair, Alignment};
use dream_core::autodiff::{
    grad_check_inputs, grad_check_params, GradCheckOptions, GradCheckReport, Stencil, Var,
};
use dream_core::data::{synth, synth_generate, Sample, Vocab};
use dream_core::decoder::{cross_entropy, swiglu_ffn, Decoder};
use dream_core::encoders::{mha, KeywordEncoder, MhaParams, VisualEncoder};
use dream_core::model::LossWeights;
use dream_core::packing::segments;
use dream_core::params::{Bound, Init, ParamStore};
use dream_core::{Dream, ModelConfig, Precision, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::config::RunConfig;

pub const TOY_LIMIT: usize = 50_000;

#[derive(Clone, Debug, Serialize)]
pub struct CheckRow {
    pub name: &'static str,
    pub checked: usize,
    pub max_rel_error: f64,
    pub threshold: f64,
    pub passed: bool,
    pub analytic: f64,
    pub numeric: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckTable {
    pub precision: Precision,
    pub params: usize,
    pub rows: Vec<CheckRow>,
}

impl GradCheckTable {
    pub fn all_passed(&self) -> bool {
        self.rows.iter().all(|r| r.passed)
    }

    pub fn row(&self, name: &str) -> Option<&CheckRow> {
        self.rows.iter().find(|r| r.name == name)
    }
}

impl fmt::Display for GradCheckTable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let label = match self.precision {
            Precision::F64 => "64-bit",
            Precision::F32 => "32-bit, loosened threshold",
        };
        writeln!(f, "gradient check ({label}), toy model with {} parameters", self.params)?;
        writeln!(f, "{:<18} {:>8} {:>12} {:>10}  result", "check", "coords", "max rel err", "threshold")?;
        for r in &self.rows {
            writeln!(
                f,
                "{:<18} {:>8} {:>12.3e} {:>10.0e}  {}",
                r.name,
                r.checked,
                r.max_rel_error,
                r.threshold,
                if r.passed { "pass" } else { "FAIL" }
            )?;
        }
        write!(f, "{}", if self.all_passed() { "all checks passed" } else { "gradient check FAILED" })
    }
}

fn randn(rng: &mut ChaCha8Rng, shape: &[usize], scale: f64) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-1.0..1.0) * scale).collect()).expect("shape")
}

/// `Σ y ⊙ w` for a fixed random `w`, turning a tensor output into a scalar
/// whose gradient exercises every output entry differently.
fn probe<'t>(y: Var<'t>, seed: u64) -> dream_core::Result<Var<'t>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let w = randn(&mut rng, &y.shape(), 1.0);
    y.mul(y.tape().constant(w)).map(|v| v.sum())
}

fn module<T>(cfg: &ModelConfig, seed: u64, build: impl FnOnce(&ModelConfig, &mut Init) -> dream_core::Result<T>) -> Result<(ParamStore, T)> {
    let mut store = ParamStore::new();
    let m = build(cfg, &mut Init::new(&mut store, seed))?;
    if cfg.precision == Precision::F32 {
        for t in store.tensors_mut() {
            Precision::F32.round_slice(t.data_mut());
        }
    }
    Ok((store, m))
}

/// Resolves the vocabulary size the toy checks run with.
pub fn check_model_config(cfg: &RunConfig) -> ModelConfig {
    let mut m = cfg.model.clone();
    if m.vocab_size == 0 {
        m.vocab_size = Vocab::build(synth::lexicon(), 5000).expect("lexicon").len();
    }
    m
}

pub fn cmd_grad_check(cfg: &RunConfig, corrupt: bool) -> Result<GradCheckTable> {
    cfg.validate()?;
    let mc = check_model_config(cfg);
    let model = Dream::new(mc.clone())?;
    if model.param_count() >= TOY_LIMIT {
        bail!(
            "grad-check needs a toy model under {TOY_LIMIT} parameters; this config has {}",
            model.param_count()
        );
    }
    let g = &cfg.grad_check;
    let (module_threshold, total_threshold) = match mc.precision {
        Precision::F64 => (1e-5, 1e-4),
        Precision::F32 => (1e-2, 1e-2),
    };
    let opts = GradCheckOptions {
        h: g.h,
        stencil: Stencil::FivePoint,
        fraction: 1.0,
        seed: g.seed,
        precision: mc.precision,
        corrupt_analytic: corrupt,
    };
    let mut rng = ChaCha8Rng::seed_from_u64(g.seed);
    let mut rows = Vec::new();
    let mut push = |name: &'static str, threshold: f64, rep: GradCheckReport| {
        rows.push(CheckRow {
            name,
            checked: rep.checked,
            max_rel_error: rep.max_rel_error,
            threshold,
            passed: rep.passes(threshold),
            analytic: rep.analytic,
            numeric: rep.numeric,
        });
    };
    let n = g.batch;
    let s_v = mc.visual_tokens();
    let kw_lens: Vec<usize> = (0..n).map(|i| 2 + i % 3).collect();
    let v_segs = segments(&vec![s_v; n]);
    let l_segs = segments(&kw_lens);
    let l_rows: usize = kw_lens.iter().sum();

    let (store, enc) = module(&mc, 1, VisualEncoder::new)?;
    let side = mc.image_side;
    let images = Tensor::new(
        vec![n * side * side, mc.image_channels],
        (0..n * side * side * mc.image_channels).map(|_| rng.random_range(0.0..1.0)).collect(),
    )?;
    let rep = grad_check_params(&store, &[images], |p, x| probe(enc.forward(p, x[0], n)?, 11), &opts)?;
    push("visual encoder", module_threshold, rep);

    let mut store = ParamStore::new();
    let attn = MhaParams::new(&mut Init::new(&mut store, 2), mc.keyword_dim, mc.keyword_heads)?;
    let x = randn(&mut rng, &[5, mc.keyword_dim], 1.0);
    let norm = mc.attn_norm;
    let rep = grad_check_params(&store, &[x], |p, x| probe(mha(&attn, p, x[0], None, norm)?, 12), &opts)?;
    push("multi-head attn", module_threshold, rep);

    let (store, kw) = module(&mc, 3, KeywordEncoder::new)?;
    let seqs: Vec<Vec<usize>> = kw_lens.iter().map(|&l| (0..l).map(|_| rng.random_range(5..mc.vocab_size)).collect()).collect();
    let rep = grad_check_params(&store, &[], |p, _| probe(kw.forward(p, &seqs, None)?.0, 13), &opts)?;
    push("keyword encoder", module_threshold, rep);

    let v_e = randn(&mut rng, &[n * s_v, mc.visual_dim], 1.0);
    let l_e = randn(&mut rng, &[l_rows, mc.keyword_dim], 1.0);
    let (store, abs) = module(&mc, 4, Abstractor::new)?;
    let rep = grad_check_params(
        &store,
        &[v_e.clone(), l_e.clone()],
        |p, x| probe(abs.forward(p, x[0], &v_segs, x[1], &l_segs)?.f1, 14),
        &opts,
    )?;
    push("abstractor", module_threshold, rep);

    let (store, adp) = module(&mc, 5, Adaptor::new)?;
    let rep = grad_check_params(
        &store,
        &[v_e, l_e],
        |p, x| probe(adp.forward(p, x[0], &v_segs, x[1], &l_segs, None)?.f2, 15),
        &opts,
    )?;
    push("adaptor", module_threshold, rep);

    let (store, al) = module(&mc, 6, Alignment::new)?;
    let f_segs = segments(&(0..n).map(|i| 3 + i).collect::<Vec<_>>());
    let f_rows: usize = f_segs.iter().map(|s| s.1).sum();
    let f = randn(&mut rng, &[f_rows, mc.shared_dim], 1.0);
    let reports: Vec<Vec<usize>> = (0..n).map(|i| (0..4 + i).map(|_| rng.random_range(5..mc.vocab_size)).collect()).collect();
    let rep = grad_check_params(
        &store,
        &[f],
        |p: &Bound<'_>, x| {
            let pair = AlignedPair {
                f_emb: al.pool_fusion(p, x[0], &f_segs)?,
                r_emb: al.embed_reports(p, &reports)?,
            };
            al.loss(p, &pair)
        },
        &opts,
    )?;
    push("InfoNCE", module_threshold, rep);

    let d = mc.model_dim;
    let h = mc.swiglu_dim();
    let ffn_inputs = [
        randn(&mut rng, &[4, d], 1.0),
        randn(&mut rng, &[d, h], 0.3),
        randn(&mut rng, &[d, h], 0.3),
        randn(&mut rng, &[h, d], 0.3),
    ];
    let rep = grad_check_inputs(|_, x| probe(swiglu_ffn(x[0], x[1], x[2], x[3])?, 16), &ffn_inputs, &opts)?;
    push("SwiGLU", module_threshold, rep);

    let eps = mc.rms_eps;
    let rms_inputs = [randn(&mut rng, &[4, d], 1.0), randn(&mut rng, &[d], 1.0)];
    let rep = grad_check_inputs(|_, x| probe(x[0].rms_norm(x[1], eps)?, 17), &rms_inputs, &opts)?;
    push("RMS norm", module_threshold, rep);

    let targets: Vec<Option<usize>> = vec![Some(1), Some(0), None, Some(mc.vocab_size - 1), Some(3)];
    let logits = randn(&mut rng, &[5, mc.vocab_size], 2.0);
    let rep = grad_check_inputs(|_, x| cross_entropy(x[0], &targets), &[logits], &opts)?;
    push("cross-entropy", module_threshold, rep);

    let (store, dec) = module(&mc, 7, Decoder::new)?;
    let inputs: Vec<Vec<usize>> = (0..n).map(|i| (0..3 + i).map(|_| rng.random_range(1..mc.vocab_size)).collect()).collect();
    let dec_targets: Vec<Option<usize>> = inputs
        .iter()
        .flat_map(|s| s.iter().skip(1).copied().chain([2]).map(Some).collect::<Vec<_>>())
        .collect();
    let mem_segs = segments(&vec![s_v; n]);
    let memory = randn(&mut rng, &[n * s_v, mc.shared_dim], 1.0);
    let rep = grad_check_params(
        &store,
        &[memory],
        |p, x| {
            let out = dec.forward(p, &inputs, x[0], &mem_segs)?;
            cross_entropy(out.logits, &dec_targets)
        },
        &opts,
    )?;
    push("decoder", module_threshold, rep);

    let vocab = Vocab::build(synth::lexicon(), 5000)?;
    let batch: Vec<Sample> = synth_generate(n, g.seed, &cfg.synth)
        .iter()
        .map(|s| Sample::from_text(s.image.clone(), &s.keywords, &s.report, &vocab))
        .collect::<dream_core::Result<_>>()?;
    let weights = LossWeights {
        lambda: cfg.train.lambda,
        indicator_reg: cfg.train.indicator_reg,
    };
    let total_opts = GradCheckOptions {
        fraction: g.fraction,
        ..opts.clone()
    };
    let rep = grad_check_params(
        &model.store,
        &[],
        |p, _| Ok(model.forward(p, &batch, weights)?.total),
        &total_opts,
    )?;
    push("L_total", total_threshold, rep);

    Ok(GradCheckTable {
        precision: mc.precision,
        params: model.param_count(),
        rows,
    })
}
