mod common;

use common::{attend, layer_norm, randn, rng, uniform, M};
use dream_core::adaptor::{apply_modality_indicator, decoupled_attention, Adaptor};
use dream_core::autodiff::{grad_check_params, GradCheckOptions, Tape};
use dream_core::data::{synth, Sample, SynthConfig, Vocab};
use dream_core::model::LossWeights;
use dream_core::packing::segments;
use dream_core::params::{Init, ParamStore};
use dream_core::{Dream, ModelConfig, Tensor};
use proptest::prelude::*;

const S_V: usize = 4;

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 20,
        visual_dim: 6,
        keyword_dim: 5,
        shared_dim: 4,
        max_keywords: 4,
        ..ModelConfig::toy()
    }
}

fn build(cfg: &ModelConfig, seed: u64) -> (ParamStore, Adaptor) {
    let mut store = ParamStore::new();
    let a = Adaptor::new(cfg, &mut Init::new(&mut store, seed)).unwrap();
    (store, a)
}

/// Straight-line decoupled attention for one sample.
fn oracle(store: &ParamStore, a: &Adaptor, xv: &M, xl: &M, eps: f64) -> M {
    let g = |id| M::of(store.get(id));
    let nv = layer_norm(xv, store.get(a.ln_v.0).data(), store.get(a.ln_v.1).data(), eps);
    let nl = layer_norm(xl, store.get(a.ln_l.0).data(), store.get(a.ln_l.1).data(), eps);
    let q = M::vstack(&[nv, nl]).dot(&g(a.w_q));
    let k = M::vstack(&[xv.dot(&g(a.w_kv)), xl.dot(&g(a.w_kl))]);
    let v = M::vstack(&[xv.dot(&g(a.w_vv)), xl.dot(&g(a.w_vl))]);
    attend(&q, &k, &v, 1.0 / (q.c as f64).sqrt(), |_, _| true)
}

#[test]
fn identity_projection_keeps_visual_rows() {
    let c = ModelConfig {
        visual_dim: 5,
        ..cfg()
    };
    let (mut store, a) = build(&c, 1);
    *store.get_mut(a.proj_w) = Tensor::eye(5);
    let mut r = rng(1);
    let v = randn(&mut r, &[S_V, 5], 1.0);
    let l = randn(&mut r, &[3, 5], 1.0);
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let (x, segs) = a
        .build_unified_input(&p, tape.constant(v.clone()), &[(0, S_V)], tape.constant(l.clone()), &[(0, 3)])
        .unwrap();
    let x = x.value();
    assert_eq!(x.rows(), 7);
    assert_eq!(segs, vec![(0, 7)]);
    assert_eq!(&x.data()[..S_V * 5], v.data());
    assert_eq!(&x.data()[S_V * 5..], l.data());
}

#[test]
fn projection_gradient_matches_finite_differences() {
    let c = cfg();
    let (store, a) = build(&c, 2);
    let mut r = rng(2);
    let v = randn(&mut r, &[S_V, 6], 1.0);
    let l = randn(&mut r, &[3, 5], 1.0);
    let rep = grad_check_params(
        &store,
        &[v, l],
        |p, x| {
            let (u, _) = a.build_unified_input(p, x[0], &[(0, S_V)], x[1], &[(0, 3)])?;
            Ok(u.square().sum())
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passes(1e-5), "{rep:?}");
}

#[test]
fn unit_gates_leave_rows_unchanged() {
    let x = randn(&mut rng(3), &[7, 5], 1.0);
    let tape = Tape::default();
    let xv = tape.constant(x.clone());
    let gates = tape.constant(Tensor::full(&[7], 1.0));
    let (a, b) = apply_modality_indicator(xv, S_V, gates).unwrap();
    assert_eq!(&a.value().data()[..], &x.data()[..S_V * 5]);
    assert_eq!(&b.value().data()[..], &x.data()[S_V * 5..]);
}

#[test]
fn random_gates_scale_rows() {
    let mut r = rng(4);
    let x = randn(&mut r, &[7, 5], 1.0);
    let g = uniform(&mut r, &[7], 0.0, 1.0);
    let tape = Tape::default();
    let (a, b) = apply_modality_indicator(tape.constant(x.clone()), S_V, tape.constant(g.clone())).unwrap();
    let joined: Vec<f64> = a.value().data().iter().chain(b.value().data()).copied().collect();
    for i in 0..7 {
        for j in 0..5 {
            assert!((joined[i * 5 + j] - g.data()[i] * x.at(i, j)).abs() < 1e-15);
        }
    }
    assert!(apply_modality_indicator(tape.constant(x), S_V, tape.constant(Tensor::zeros(&[6]))).is_err());
}

#[test]
fn zero_inputs_give_zero_output() {
    let c = cfg();
    let (store, a) = build(&c, 5);
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let xv = tape.constant(Tensor::zeros(&[S_V, 5]));
    let xl = tape.constant(Tensor::zeros(&[3, 5]));
    let (f2, _) = decoupled_attention(&p, &a, xv, &[(0, S_V)], xl, &[(0, 3)]).unwrap();
    assert!(f2.value().data().iter().all(|&x| x == 0.0));
}

#[test]
fn decoupled_attention_matches_oracle() {
    let c = cfg();
    let (store, a) = build(&c, 6);
    let mut r = rng(6);
    let xv = randn(&mut r, &[2 * S_V, 5], 1.0);
    let xl = randn(&mut r, &[5, 5], 1.0);
    let vs = segments(&[S_V, S_V]);
    let ls = segments(&[2, 3]);
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let (f2, segs) = decoupled_attention(&p, &a, tape.constant(xv.clone()), &vs, tape.constant(xl.clone()), &ls).unwrap();
    assert_eq!(segs, vec![(0, 6), (6, 7)]);
    let (xv, xl) = (M::of(&xv), M::of(&xl));
    let expected = M::vstack(&[
        oracle(&store, &a, &xv.rows(0, S_V), &xl.rows(0, 2), c.ln_eps),
        oracle(&store, &a, &xv.rows(S_V, S_V), &xl.rows(2, 3), c.ln_eps),
    ]);
    assert!(expected.max_diff(&f2.value()) < 1e-12);
}

#[test]
fn shared_projections_reduce_to_plain_attention() {
    let c = cfg();
    let (mut store, a) = build(&c, 7);
    *store.get_mut(a.w_kl) = store.get(a.w_kv).clone();
    *store.get_mut(a.w_vl) = store.get(a.w_vv).clone();
    let mut r = rng(7);
    let xv = randn(&mut r, &[S_V, 5], 1.0);
    let xl = randn(&mut r, &[3, 5], 1.0);
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let (f2, _) =
        decoupled_attention(&p, &a, tape.constant(xv.clone()), &[(0, S_V)], tape.constant(xl.clone()), &[(0, 3)]).unwrap();
    let (xv, xl) = (M::of(&xv), M::of(&xl));
    let x = M::vstack(&[xv.clone(), xl.clone()]);
    let nv = layer_norm(&xv, store.get(a.ln_v.0).data(), store.get(a.ln_v.1).data(), c.ln_eps);
    let nl = layer_norm(&xl, store.get(a.ln_l.0).data(), store.get(a.ln_l.1).data(), c.ln_eps);
    let q = M::vstack(&[nv, nl]).dot(&M::of(store.get(a.w_q)));
    let k = x.dot(&M::of(store.get(a.w_kv)));
    let v = x.dot(&M::of(store.get(a.w_vv)));
    assert!(attend(&q, &k, &v, 0.5, |_, _| true).max_diff(&f2.value()) < 1e-12);
}

#[test]
fn initial_gates_follow_configured_priors() {
    let c = cfg();
    let (store, a) = build(&c, 8);
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let g = a.gates(&p).value();
    assert_eq!(g.numel(), S_V + c.max_keywords);
    for (i, &x) in g.data().iter().enumerate() {
        let want = if i < S_V { 0.1 } else { 0.9 };
        assert!((x - want).abs() < 1e-12);
    }
}

#[test]
fn gate_and_weight_gradients_match_finite_differences() {
    let c = cfg();
    let (store, a) = build(&c, 9);
    let mut r = rng(9);
    let v = randn(&mut r, &[2 * S_V, 6], 1.0);
    let l = randn(&mut r, &[5, 5], 1.0);
    let vs = segments(&[S_V, S_V]);
    let ls = segments(&[2, 3]);
    let rep = grad_check_params(
        &store,
        &[v, l],
        |p, x| Ok(a.forward(p, x[0], &vs, x[1], &ls, None)?.f2.square().sum()),
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passes(1e-5), "{rep:?}");
    let tape = Tape::default();
    let p = store.bind(&tape, true);
    let vv = tape.constant(randn(&mut r, &[2 * S_V, 6], 1.0));
    let lv = tape.constant(randn(&mut r, &[5, 5], 1.0));
    let loss = a.forward(&p, vv, &vs, lv, &ls, None).unwrap().f2.square().sum();
    let grads = tape.backward(loss).unwrap();
    let gi = grads.get(p.var(a.indicator)).unwrap();
    for slot in 0..S_V + 3 {
        assert!(gi.data()[slot] != 0.0, "slot {slot} has zero gradient");
    }
    assert_eq!(gi.data()[S_V + 3], 0.0, "unused language slot");
}

fn toy_model() -> (Dream, Vec<Sample>) {
    let scfg = SynthConfig::default();
    let vocab = Vocab::build(synth::lexicon(), 5000).unwrap();
    let data = synth::synth_generate(3, 11, &scfg)
        .iter()
        .map(|s| Sample::from_text(s.image.clone(), &s.keywords, &s.report, &vocab).unwrap())
        .collect();
    let cfg = ModelConfig {
        vocab_size: vocab.len(),
        seed: 11,
        ..ModelConfig::toy()
    };
    (Dream::new(cfg).unwrap(), data)
}

#[test]
fn zero_visual_gate_makes_adaptor_output_image_independent() {
    let (model, batch) = toy_model();
    let s_v = model.config.visual_tokens();
    let slots = s_v + model.config.max_keywords;
    let gate: Vec<f64> = (0..slots).map(|i| if i < s_v { 0.0 } else { 0.8 }).collect();
    let images = model.pack_images(&batch).unwrap();
    let mut perturbed = images.clone();
    let mut r = rng(12);
    for x in perturbed.data_mut() {
        *x += common::randn(&mut r, &[1], 0.3).item();
    }
    let f2_of = |img: &Tensor| {
        let tape = Tape::default();
        let p = model.store.bind(&tape, false);
        let gv = tape.constant(Tensor::new(vec![slots], gate.clone()).unwrap());
        let kws: Vec<Vec<usize>> = batch.iter().map(|s| s.keywords.clone()).collect();
        let fs = model.fuse(&p, tape.constant(img.clone()), &kws, Some(gv)).unwrap();
        (fs.adaptor.unwrap().f2.value(), fs.v_e.value())
    };
    let (a, va) = f2_of(&images);
    let (b, vb) = f2_of(&perturbed);
    assert!(a.max_abs_diff(&b) < 1e-12);
    assert!(va.max_abs_diff(&vb) > 1e-3, "the perturbation must reach V_e");

    let tape = Tape::default();
    let p = model.store.bind(&tape, true);
    let img = tape.param(images);
    let gv = tape.constant(Tensor::new(vec![slots], gate).unwrap());
    let kws: Vec<Vec<usize>> = batch.iter().map(|s| s.keywords.clone()).collect();
    let fs = model.fuse(&p, img, &kws, Some(gv)).unwrap();
    let grads = tape.backward(fs.adaptor.unwrap().f2.sum()).unwrap();
    match grads.get(img) {
        None => {}
        Some(g) => assert!(g.data().iter().all(|&x| x == 0.0)),
    }

    let tape = Tape::default();
    let p = model.store.bind(&tape, true);
    let img = tape.param(model.pack_images(&batch).unwrap());
    let fs = model.fuse(&p, img, &kws, None).unwrap();
    let grads = tape.backward(fs.adaptor.unwrap().f2.sum()).unwrap();
    assert!(grads.get(img).unwrap().data().iter().any(|&x| x != 0.0), "control: learned gates pass image gradients");
}

#[test]
fn indicator_penalty_pulls_gates_toward_targets() {
    use dream_core::train::Trainer;
    use dream_core::TrainConfig;
    let (model, batch) = toy_model();
    let s_v = model.config.visual_tokens();
    let distance = |reg: f64| {
        let cfg = TrainConfig {
            lr: 1e-2,
            batch_size: 3,
            epochs: 40,
            indicator_reg: reg,
            ..TrainConfig::default()
        };
        let mut t = Trainer::new(model.clone(), cfg).unwrap();
        t.run(&batch, |_| {}).unwrap();
        let ad = t.model.adaptor.as_ref().unwrap();
        let raw = t.model.store.get(ad.indicator);
        raw.data()
            .iter()
            .enumerate()
            .map(|(i, &x)| {
                let g = common::sigmoid(x);
                if i < s_v { g * g } else { (1.0 - g).powi(2) }
            })
            .sum::<f64>()
    };
    let (d0, d1, d2) = (distance(0.0), distance(1.0), distance(100.0));
    assert!(d1 < d0 && d2 < d1, "distances {d0} {d1} {d2}");
    let _ = LossWeights::default();
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    #[test]
    fn f2_height_matches_sequence(s_l in 1usize..5, n in 1usize..4, seed in 0u64..200) {
        let c = cfg();
        let (store, a) = build(&c, seed);
        let mut r = rng(seed);
        let tape = Tape::default();
        let p = store.bind(&tape, false);
        let vs = segments(&vec![S_V; n]);
        let ls = segments(&vec![s_l; n]);
        let v = tape.constant(randn(&mut r, &[n * S_V, 6], 1.0));
        let l = tape.constant(randn(&mut r, &[n * s_l, 5], 1.0));
        let out = a.forward(&p, v, &vs, l, &ls, None).unwrap();
        prop_assert_eq!(out.f2.rows(), n * (S_V + s_l));
        prop_assert!(out.f2.value().is_finite());
    }
}
