use dream_core::autodiff::{grad_check_params, GradCheckOptions, Stencil, Tape};
use dream_core::data::{synth, SynthConfig, Sample, Vocab};
use dream_core::model::LossWeights;
use dream_core::train::{adam_update, clip_global_norm, loss_and_grads, lr_schedule, train_step, AdamHyper, AdamState, Trainer};
use dream_core::{Components, Dream, DreamError, ModelConfig, Tensor, TrainConfig};
use proptest::prelude::*;

fn vocab() -> Vocab {
    Vocab::build(synth::lexicon(), 5000).unwrap()
}

fn samples(n: usize, seed: u64) -> Vec<Sample> {
    let v = vocab();
    synth::synth_generate(n, seed, &SynthConfig::default())
        .iter()
        .map(|s| Sample::from_text(s.image.clone(), &s.keywords, &s.report, &v).unwrap())
        .collect()
}

fn toy(seed: u64, components: Components) -> Dream {
    Dream::new(ModelConfig {
        vocab_size: vocab().len(),
        seed,
        components,
        ..ModelConfig::toy()
    })
    .unwrap()
}

fn weights(lambda: f64) -> LossWeights {
    LossWeights {
        lambda,
        indicator_reg: 0.0,
    }
}

fn total(model: &Dream, batch: &[Sample], w: LossWeights) -> (f64, f64, f64) {
    let tape = Tape::default();
    let p = model.store.bind(&tape, false);
    let f = model.forward(&p, batch, w).unwrap();
    (f.total.item(), f.ce.item(), f.align.map_or(f64::NAN, |a| a.item()))
}

#[test]
fn toy_model_is_small() {
    assert!(toy(0, Components::full()).param_count() < 50_000);
}

#[test]
fn zero_lambda_total_is_cross_entropy() {
    let model = toy(1, Components::full());
    let batch = samples(3, 1);
    let (t, ce, align) = total(&model, &batch, weights(0.0));
    assert_eq!(t.to_bits(), ce.to_bits());
    assert!(align > 0.0);
}

#[test]
fn total_is_linear_in_lambda() {
    let model = toy(2, Components::full());
    let batch = samples(4, 2);
    let h = 1e-3;
    let (up, _, _) = total(&model, &batch, weights(0.5 + h));
    let (down, _, align) = total(&model, &batch, weights(0.5 - h));
    assert!(((up - down) / (2.0 * h) - align).abs() < 1e-8);
}

#[test]
fn fixed_batch_loss_drops_over_200_steps() {
    for seed in 0..3 {
        let mut model = toy(seed, Components::full());
        let batch = samples(4, 100 + seed);
        let cfg = TrainConfig::default();
        let mut state = AdamState::new(model.store.tensors());
        let first = train_step(&mut model, &batch, &mut state, &cfg, cfg.lr).unwrap();
        let mut last = first.clone();
        for _ in 1..200 {
            last = train_step(&mut model, &batch, &mut state, &cfg, cfg.lr).unwrap();
        }
        assert!(last.total < first.total, "seed {seed}: {} -> {}", first.total, last.total);
        assert_eq!(state.step, 200);
    }
}

#[test]
fn sampled_parameter_gradients_match_finite_differences() {
    let model = toy(3, Components::full());
    let batch = samples(2, 3);
    let opts = GradCheckOptions {
        h: 1e-3,
        stencil: Stencil::FivePoint,
        fraction: 0.01,
        seed: 3,
        ..GradCheckOptions::default()
    };
    let rep = grad_check_params(&model.store, &[], |p, _| Ok(model.forward(p, &batch, weights(0.5))?.total), &opts).unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
    assert!(rep.checked > 100);
}

#[test]
fn loss_report_fields_are_consistent() {
    let model = toy(4, Components::full());
    let batch = samples(3, 4);
    let (r, grads) = loss_and_grads(&model, &batch, weights(0.5)).unwrap();
    let tokens: usize = batch.iter().map(|s| s.report.len() + 1).sum();
    assert_eq!(r.tokens, tokens);
    assert!((r.ce_per_token - r.ce / tokens as f64).abs() < 1e-15);
    assert!((r.total - (r.ce + 0.5 * r.align)).abs() < 1e-12);
    assert_eq!(grads.len(), model.store.len());
    assert!(loss_and_grads(&model, &[], weights(0.5)).is_err());
}

#[test]
fn non_finite_parameters_are_named() {
    let mut model = toy(5, Components::full());
    let id = model.store.ids().next().unwrap();
    model.store.get_mut(id).data_mut()[0] = f64::NAN;
    let err = loss_and_grads(&model, &samples(2, 5), weights(0.5)).unwrap_err();
    match err {
        DreamError::NonFinite { what, .. } => assert_eq!(what, "V_e"),
        other => panic!("unexpected {other}"),
    }
}

#[test]
fn zero_gradient_leaves_parameters_alone() {
    let mut params = vec![Tensor::new(vec![3], vec![1.0, -2.0, 0.5]).unwrap()];
    let before = params.clone();
    let mut st = AdamState::new(&params);
    let h = AdamHyper {
        lr: 1e-3,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    for _ in 0..5 {
        adam_update(&mut params, &[Tensor::zeros(&[3])], &mut st, h).unwrap();
    }
    assert_eq!(params, before);
}

#[test]
fn adam_matches_straight_line_updates() {
    let (b1, b2, eps, lr) = (0.9f64, 0.999f64, 1e-8, 1e-3);
    let mut params = vec![Tensor::new(vec![4], vec![0.3, -1.0, 2.0, 0.0]).unwrap()];
    let grads = [
        vec![0.5, -0.25, 1e-3, 3.0],
        vec![-0.1, -0.2, 0.4, 0.3],
        vec![0.0, 1.0, -2.0, 0.7],
    ];
    let mut st = AdamState::new(&params);
    let h = AdamHyper { lr, beta1: b1, beta2: b2, eps };
    let mut p = params[0].data().to_vec();
    let (mut m, mut v) = (vec![0.0; 4], vec![0.0; 4]);
    for (t, g) in grads.iter().enumerate() {
        adam_update(&mut params, &[Tensor::new(vec![4], g.clone()).unwrap()], &mut st, h).unwrap();
        let t = t as i32 + 1;
        for i in 0..4 {
            m[i] = b1 * m[i] + (1.0 - b1) * g[i];
            v[i] = b2 * v[i] + (1.0 - b2) * g[i] * g[i];
            let mh = m[i] / (1.0 - b1.powi(t));
            let vh = v[i] / (1.0 - b2.powi(t));
            p[i] -= lr * mh / (vh.sqrt() + eps);
        }
        for (a, b) in params[0].data().iter().zip(&p) {
            assert!((a - b).abs() < 1e-12);
        }
    }
    // First step moves every coordinate with a nonzero gradient by about lr.
    let mut q = vec![Tensor::zeros(&[2])];
    let mut s = AdamState::new(&q);
    adam_update(&mut q, &[Tensor::new(vec![2], vec![4.0, -0.01]).unwrap()], &mut s, h).unwrap();
    assert!((q[0].data()[0] + lr).abs() < 1e-9 && (q[0].data()[1] - lr).abs() < 1e-6);
}

#[test]
fn identical_tensors_evolve_identically() {
    let t = Tensor::new(vec![2, 2], vec![0.1, 0.2, -0.3, 0.4]).unwrap();
    let mut params = vec![t.clone(), t];
    let mut st = AdamState::new(&params);
    let h = AdamHyper {
        lr: 1e-2,
        beta1: 0.9,
        beta2: 0.999,
        eps: 1e-8,
    };
    for k in 0..10 {
        let g = Tensor::new(vec![2, 2], vec![k as f64, -1.0, 0.5, 0.25 * k as f64]).unwrap();
        adam_update(&mut params, &[g.clone(), g], &mut st, h).unwrap();
    }
    assert_eq!(params[0], params[1]);
    assert!(adam_update(&mut params, &[Tensor::zeros(&[2, 2])], &mut st, h).is_err());
    assert!(adam_update(&mut params, &[Tensor::zeros(&[4]), Tensor::zeros(&[4])], &mut st, h).is_err());
}

#[test]
fn schedule_landmarks() {
    let cfg = TrainConfig::default();
    let total = 2000;
    assert_eq!(lr_schedule(0, total, &cfg), 0.0);
    assert!(lr_schedule(1, total, &cfg) < 2e-6);
    assert!((lr_schedule(100, total, &cfg) - 1e-4).abs() < 1e-18);
    assert!((lr_schedule(total, total, &cfg) - 1e-5).abs() < 1e-18);
    assert!((lr_schedule(total + 50, total, &cfg) - 1e-5).abs() < 1e-18);
}

#[test]
fn clipping_caps_the_global_norm() {
    let mut g = vec![Tensor::new(vec![2], vec![3.0, 0.0]).unwrap(), Tensor::new(vec![1], vec![4.0]).unwrap()];
    assert_eq!(clip_global_norm(&mut g, 1.0), 5.0);
    let n: f64 = g.iter().flat_map(|t| t.data().iter()).map(|x| x * x).sum::<f64>().sqrt();
    assert!((n - 1.0).abs() < 1e-15);
    let mut small = vec![Tensor::new(vec![1], vec![0.5]).unwrap()];
    assert_eq!(clip_global_norm(&mut small, 1.0), 0.5);
    assert_eq!(small[0].data(), &[0.5]);
}

#[test]
fn ablation_rows_are_structurally_distinct() {
    let grid = Components::ablation_grid();
    let batch = samples(2, 6);
    let mut counts = Vec::new();
    for c in grid {
        let model = toy(6, c);
        let names: Vec<String> = model.store.iter().map(|(n, _)| n.to_string()).collect();
        let has = |prefix: &str| names.iter().any(|n| n.starts_with(prefix));
        assert_eq!(has("keywords"), c.keywords, "{}", c.label());
        assert_eq!(has("abstractor"), c.abstractor, "{}", c.label());
        assert_eq!(has("adaptor"), c.adaptor, "{}", c.label());
        assert_eq!(has("alignment"), c.alignment, "{}", c.label());
        assert_eq!(has("static_fusion"), c.static_fusion(), "{}", c.label());
        let (r, grads) = loss_and_grads(&model, &batch, weights(0.5)).unwrap();
        assert_eq!(grads.len(), model.store.len());
        assert!(r.total.is_finite());
        if !c.alignment {
            assert_eq!(r.align, 0.0);
            assert_eq!(r.total.to_bits(), r.ce.to_bits());
        }
        counts.push(model.param_count());
    }
    for i in 0..counts.len() {
        for j in i + 1..counts.len() {
            assert_ne!(counts[i], counts[j]);
        }
    }
    let bad = Components {
        keywords: false,
        ..Components::full()
    };
    assert!(Dream::new(ModelConfig {
        vocab_size: vocab().len(),
        components: bad,
        ..ModelConfig::toy()
    })
    .is_err());
}

fn short_config() -> TrainConfig {
    TrainConfig {
        batch_size: 3,
        epochs: 2,
        lr: 1e-3,
        seed: 9,
        ..TrainConfig::default()
    }
}

#[test]
fn training_is_bit_reproducible() {
    let data = samples(7, 7);
    let run = || {
        let mut t = Trainer::new(toy(7, Components::full()), short_config()).unwrap();
        t.run(&data, |_| {}).unwrap()
    };
    let (a, b) = (run(), run());
    assert_eq!(a.len(), 6);
    for (x, y) in a.iter().zip(&b) {
        assert_eq!(x.total.to_bits(), y.total.to_bits());
        assert_eq!(x.grad_norm.to_bits(), y.grad_norm.to_bits());
    }
    assert_eq!(a.iter().map(|r| r.epoch).collect::<Vec<_>>(), vec![0, 0, 0, 1, 1, 1]);
}

#[test]
fn step_cap_limits_the_schedule() {
    let cfg = TrainConfig {
        max_steps: Some(4),
        ..short_config()
    };
    let mut t = Trainer::new(toy(8, Components::full()), cfg).unwrap();
    assert_eq!(t.total_steps(7), 4);
    let log = t.run(&samples(7, 8), |_| {}).unwrap();
    assert_eq!(log.len(), 4);
    assert!(t.done(7));
    assert!(Trainer::new(toy(8, Components::full()), TrainConfig { lr: 0.0, ..short_config() }).is_err());
    assert!(Trainer::new(toy(8, Components::full()), TrainConfig { lambda: -1.0, ..short_config() }).is_err());
}

#[test]
fn indicator_penalty_enters_the_total() {
    let model = toy(9, Components::full());
    let batch = samples(2, 9);
    let w = LossWeights {
        lambda: 0.5,
        indicator_reg: 2.0,
    };
    let (r, _) = loss_and_grads(&model, &batch, w).unwrap();
    assert!(r.penalty > 0.0);
    assert!((r.total - (r.ce + 0.5 * r.align + r.penalty)).abs() < 1e-12);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_is_bounded_and_decays_after_warmup(total in 20usize..5000, a in 0.0f64..1.0, b in 0.0f64..1.0) {
        let cfg = TrainConfig::default();
        let warm = (0.05 * total as f64).round() as usize;
        let (s, t) = {
            let x = warm + ((total - warm) as f64 * a.min(b)) as usize;
            let y = warm + ((total - warm) as f64 * a.max(b)) as usize;
            (x, y)
        };
        let (ls, lt) = (lr_schedule(s, total, &cfg), lr_schedule(t, total, &cfg));
        prop_assert!(ls >= lt);
        prop_assert!((1e-5 - 1e-18..=1e-4 + 1e-18).contains(&ls));
        let w = ((warm as f64) * a) as usize;
        prop_assert!(lr_schedule(w, total, &cfg) <= 1e-4);
    }
}
