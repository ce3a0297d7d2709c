mod common;

use common::{randn, rng, M};
use dream_core::alignment::{info_nce, Alignment, TAU_FLOOR};
use dream_core::autodiff::{grad_check_inputs, grad_check_params, GradCheckOptions, Tape};
use dream_core::packing::segments;
use dream_core::params::{Init, ParamStore};
use dream_core::{ModelConfig, Tensor};
use proptest::prelude::*;

fn cfg() -> ModelConfig {
    ModelConfig {
        vocab_size: 12,
        shared_dim: 5,
        align_dim: 4,
        ..ModelConfig::toy()
    }
}

fn build(seed: u64) -> (ParamStore, Alignment) {
    let mut store = ParamStore::new();
    let a = Alignment::new(&cfg(), &mut Init::new(&mut store, seed)).unwrap();
    (store, a)
}

fn unit_rows(t: &Tensor) -> Tensor {
    let c = t.cols();
    let mut out = t.clone();
    for row in out.data_mut().chunks_mut(c) {
        let n = row.iter().map(|x| x * x).sum::<f64>().sqrt();
        row.iter_mut().for_each(|x| *x /= n);
    }
    out
}

/// Straight-line InfoNCE with negatives over the rows of `r`.
fn nce_oracle(f: &Tensor, r: &Tensor, tau: f64) -> f64 {
    let (f, r) = (M::of(f), M::of(r));
    let sims = f.dot(&r.t());
    (0..f.r)
        .map(|i| -common::log_softmax_at(&sims.row(i).iter().map(|s| s / tau).collect::<Vec<_>>(), i))
        .sum::<f64>()
        / f.r as f64
}

fn nce(f: &Tensor, r: &Tensor, tau: f64) -> f64 {
    let tape = Tape::default();
    info_nce(tape.constant(f.clone()), tape.constant(r.clone()), tape.constant(Tensor::scalar(tau)))
        .unwrap()
        .item()
}

#[test]
fn single_pair_has_zero_loss() {
    let f = unit_rows(&randn(&mut rng(1), &[1, 4], 1.0));
    let r = unit_rows(&randn(&mut rng(2), &[1, 4], 1.0));
    assert_eq!(nce(&f, &r, 0.07), 0.0);
}

#[test]
fn identical_report_rows_give_log_n() {
    let mut g = rng(3);
    let f = unit_rows(&randn(&mut g, &[5, 4], 1.0));
    let one = unit_rows(&randn(&mut g, &[1, 4], 1.0));
    let r = Tensor::new(vec![5, 4], one.data().repeat(5)).unwrap();
    assert!((nce(&f, &r, 0.3) - 5f64.ln()).abs() < 1e-9);
}

#[test]
fn orthonormal_rows_at_unit_temperature() {
    let e = Tensor::eye(3);
    let e1 = std::f64::consts::E;
    let want = -(e1 / (e1 + 2.0)).ln();
    assert!((nce(&e, &e, 1.0) - want).abs() < 1e-12);
    assert!((want - 0.5514).abs() < 1e-4);
}

#[test]
fn info_nce_matches_oracle_and_is_asymmetric() {
    let mut g = rng(4);
    let f = unit_rows(&randn(&mut g, &[6, 4], 1.0));
    let r = unit_rows(&randn(&mut g, &[6, 4], 1.0));
    assert!((nce(&f, &r, 0.2) - nce_oracle(&f, &r, 0.2)).abs() < 1e-12);
    assert!((nce(&f, &r, 0.2) - nce(&r, &f, 0.2)).abs() > 1e-6);
}

#[test]
fn mismatched_batches_are_rejected() {
    let tape = Tape::default();
    let tau = tape.constant(Tensor::scalar(1.0));
    let f = tape.constant(Tensor::zeros(&[3, 4]));
    let r = tape.constant(Tensor::zeros(&[2, 4]));
    assert!(info_nce(f, r, tau).is_err());
    let w = tape.constant(Tensor::zeros(&[3, 5]));
    assert!(info_nce(f, w, tau).is_err());
}

#[test]
fn zero_fusion_pools_to_flagged_zero_vector() {
    let (store, a) = build(5);
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let f = tape.constant(Tensor::zeros(&[7, 5]));
    let out = a.pool_fusion(&p, f, &[(0, 7)]).unwrap().value();
    assert!(out.data().iter().all(|&x| x == 0.0));
    assert_eq!(tape.degenerate_rows(), 1);
}

#[test]
fn repeated_block_pools_to_its_own_mean() {
    let (store, a) = build(6);
    let f1 = randn(&mut rng(6), &[3, 5], 1.0);
    let both = Tensor::new(vec![6, 5], [f1.data(), f1.data()].concat()).unwrap();
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let x = a.pool_fusion(&p, tape.constant(both), &[(0, 6)]).unwrap().value();
    let y = a.pool_fusion(&p, tape.constant(f1.clone()), &[(0, 3)]).unwrap().value();
    assert!(x.max_abs_diff(&y) < 1e-15);
    let fm = M::of(&f1);
    let mean: Vec<f64> = (0..5).map(|j| (0..3).map(|i| fm.at(i, j)).sum::<f64>() / 3.0).collect();
    let proj = M { r: 1, c: 5, d: mean }
        .dot(&M::of(store.get(a.pool_w)))
        .add_bias(store.get(a.pool_b).data());
    assert!(M::of(&unit_rows(&Tensor::new(vec![1, 4], proj.d).unwrap())).max_diff(&y) < 1e-12);
}

#[test]
fn pooled_gradient_matches_finite_differences() {
    let (store, a) = build(7);
    let f = randn(&mut rng(7), &[9, 5], 1.0);
    let segs = segments(&[4, 5]);
    let rep = grad_check_params(
        &store,
        &[f],
        |p, x| {
            let e = a.pool_fusion(p, x[0], &segs)?;
            let w = p.tape().constant(Tensor::new(vec![2, 4], (0..8).map(|i| i as f64 - 3.5).collect())?);
            Ok(e.mul(w)?.sum())
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passes(1e-5), "{rep:?}");
}

#[test]
fn single_token_report_is_its_normalized_projected_embedding() {
    let (store, a) = build(8);
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let r = a.embed_reports(&p, &[vec![7]]).unwrap().value();
    let emb = M::of(store.get(a.report_embedding)).rows(7, 1);
    let proj = emb.dot(&M::of(store.get(a.report_w))).add_bias(store.get(a.report_b).data());
    let want = unit_rows(&Tensor::new(vec![1, 4], proj.d).unwrap());
    assert!(r.max_abs_diff(&want) < 1e-12);
    let norm: f64 = r.data().iter().map(|x| x * x).sum::<f64>().sqrt();
    assert!((norm - 1.0).abs() < 1e-12);
}

#[test]
fn report_errors() {
    let (store, a) = build(9);
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    assert!(a.embed_reports(&p, &[vec![5], vec![]]).is_err());
    assert!(a.embed_reports(&p, &[vec![12]]).is_err());
}

#[test]
fn disjoint_reports_are_not_parallel() {
    let (store, a) = build(10);
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let r = a.embed_reports(&p, &[vec![5, 6, 7], vec![8, 9]]).unwrap().value();
    let cos: f64 = r.row(0).iter().zip(r.row(1)).map(|(x, y)| x * y).sum();
    assert!(cos < 1.0 - 1e-9, "cosine {cos}");
}

#[test]
fn temperature_respects_floor() {
    let (mut store, a) = build(11);
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    assert!((a.tau(&p).item() - cfg().tau_init).abs() < 1e-12);
    *store.get_mut(a.tau_raw) = Tensor::scalar(-800.0);
    let tape = Tape::default();
    let p = store.bind(&tape, false);
    let tau = a.tau(&p).item();
    assert!(tau > 0.0 && (tau - TAU_FLOOR).abs() < 1e-12);
}

#[test]
fn loss_gradients_match_finite_differences() {
    let (store, a) = build(12);
    let mut g = rng(12);
    let f = randn(&mut g, &[4, 5], 1.0);
    let segs = segments(&[1, 1, 1, 1]);
    let reports = vec![vec![5, 6], vec![7], vec![8, 9, 10], vec![11, 5]];
    let rep = grad_check_params(
        &store,
        &[f],
        |p, x| {
            let pair = dream_core::alignment::AlignedPair {
                f_emb: a.pool_fusion(p, x[0], &segs)?,
                r_emb: a.embed_reports(p, &reports)?,
            };
            a.loss(p, &pair)
        },
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passes(1e-5), "{rep:?}");

    let fe = unit_rows(&randn(&mut g, &[4, 3], 1.0));
    let re = unit_rows(&randn(&mut g, &[4, 3], 1.0));
    let rep = grad_check_inputs(
        |_, x| info_nce(x[0], x[1], x[2].softplus().add_const(TAU_FLOOR)),
        &[fe, re, Tensor::scalar(-1.5)],
        &GradCheckOptions::default(),
    )
    .unwrap();
    assert!(rep.passes(1e-5), "{rep:?}");
}

#[test]
fn loss_vanishes_as_diagonal_dominates() {
    let tau = 0.1;
    let mut prev = f64::INFINITY;
    for c in [0.0f64, 0.5, 0.9, 0.99, 0.999999] {
        // Two antipodal-ish pairs: diagonal similarity c, off-diagonal -c.
        let s = (1.0 - c * c).sqrt();
        let f = Tensor::new(vec![2, 2], vec![1.0, 0.0, -1.0, 0.0]).unwrap();
        let r = Tensor::new(vec![2, 2], vec![c, s, -c, s]).unwrap();
        let l = nce(&f, &r, tau);
        assert!(l < prev);
        prev = l;
    }
    assert!(prev < 1e-8);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn joint_permutation_leaves_loss_unchanged(seed in 0u64..10_000, n in 2usize..7, shift in 1usize..6) {
        let mut g = rng(seed);
        let f = unit_rows(&randn(&mut g, &[n, 4], 1.0));
        let r = unit_rows(&randn(&mut g, &[n, 4], 1.0));
        let perm: Vec<usize> = (0..n).map(|i| (i * (2 * shift + 1) + shift) % n).collect();
        let mut seen = perm.clone();
        seen.sort();
        prop_assume!(seen == (0..n).collect::<Vec<_>>());
        let pick = |t: &Tensor| Tensor::new(vec![n, 4], perm.iter().flat_map(|&i| t.row(i).to_vec()).collect()).unwrap();
        prop_assert!((nce(&f, &r, 0.5) - nce(&pick(&f), &pick(&r), 0.5)).abs() < 1e-12);
    }

    #[test]
    fn loss_is_bounded_when_diagonal_is_row_max(seed in 0u64..10_000, n in 1usize..6, tau in 0.05f64..2.0) {
        let mut g = rng(seed);
        let f = unit_rows(&randn(&mut g, &[n, 4], 1.0));
        let l = nce(&f, &f, tau);
        prop_assert!(l >= 0.0);
        prop_assert!(l <= (n as f64).ln() + 1e-12);
    }

    #[test]
    fn report_embedding_ignores_token_order(seed in 0u64..1000, len in 1usize..6) {
        let (store, a) = build(seed);
        let mut g = rng(seed);
        use rand::Rng;
        let ids: Vec<usize> = (0..len).map(|_| g.random_range(5..12)).collect();
        let mut rev = ids.clone();
        rev.reverse();
        let tape = Tape::default();
        let p = store.bind(&tape, false);
        let x = a.embed_reports(&p, &[ids]).unwrap().value();
        let y = a.embed_reports(&p, &[rev]).unwrap().value();
        prop_assert!(x.max_abs_diff(&y) < 1e-14);
    }
}
