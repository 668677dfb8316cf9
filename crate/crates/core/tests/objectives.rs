use proptest::prelude::*;

use thinkdex_core::objectives::{
    acc_r, estimate_z0, examples_from_records, kto_loss, kto_loss_with_z0, label, partition_scores, sft_nll,
    train_toy_policy, KtoConfig, KtoExample, KtoRecord, Label, MismatchPolicy, ObjectiveError, ToyConfig,
    ToyFixture, ValueFn,
};

fn ex(lp: f64, lr: f64, desirable: bool) -> KtoExample {
    KtoExample::from_graded("q", lp, lr, if desirable { 1.0 } else { 0.0 }, 0.5).unwrap()
}

/// Loss computed directly from the definition, independent of the library.
fn reference_loss(batch: &[KtoExample], cfg: &KtoConfig, z0: f64) -> f64 {
    let g = |x: f64| match cfg.value_fn {
        ValueFn::Linear => x,
        ValueFn::Logistic => 1.0 / (1.0 + (-x).exp()),
    };
    let d: Vec<&KtoExample> = batch.iter().filter(|e| e.label() == Label::Desirable).collect();
    let u: Vec<&KtoExample> = batch.iter().filter(|e| e.label() == Label::Undesirable).collect();
    let (ld, lu) = if cfg.lambda_auto && !d.is_empty() && !u.is_empty() {
        (1.0, d.len() as f64 / u.len() as f64)
    } else {
        (cfg.lambda_d, cfg.lambda_u)
    };
    let mut loss = 0.0;
    if !d.is_empty() {
        let r = |e: &KtoExample| e.logp_policy - e.logp_ref;
        loss += d.iter().map(|e| ld - ld * g(cfg.beta * (r(e) - z0))).sum::<f64>() / d.len() as f64;
    }
    if !u.is_empty() {
        let r = |e: &KtoExample| e.logp_policy - e.logp_ref;
        loss += u.iter().map(|e| lu - lu * g(cfg.beta * (z0 - r(e)))).sum::<f64>() / u.len() as f64;
    }
    loss
}

fn batch_strategy() -> impl Strategy<Value = Vec<KtoExample>> {
    proptest::collection::vec((-20.0f64..0.0, -20.0f64..0.0, any::<bool>()), 2..16)
        .prop_map(|v| v.into_iter().map(|(a, b, d)| ex(a, b, d)).collect())
}

#[test]
fn closed_forms() {
    let cfg = KtoConfig::default();
    // r = 0 everywhere, z0 = 0: each term is lambda - 0
    let batch = vec![ex(-1.0, -1.0, true), ex(-2.0, -2.0, false)];
    let res = kto_loss(&batch, &cfg).unwrap();
    assert_eq!(res.z0, 0.0);
    assert!((res.loss - 2.0).abs() < 1e-12);
    // single desirable example, r = 1, z0 = 0: 1 - 0.1
    let one = vec![ex(0.0, -1.0, true)];
    let res = kto_loss_with_z0(&one, &cfg, 0.0).unwrap();
    assert!((res.loss - 0.9).abs() < 1e-12);
    assert!((res.gradients[0] + 0.1).abs() < 1e-12);
    let u = vec![ex(0.0, -1.0, false)];
    let res = kto_loss_with_z0(&u, &cfg, 0.0).unwrap();
    assert!((res.loss - 1.1).abs() < 1e-12);
    assert!((res.gradients[0] - 0.1).abs() < 1e-12);
}

#[test]
fn single_example_has_no_reference_point() {
    assert_eq!(kto_loss(&[ex(0.0, 0.0, true)], &KtoConfig::default()).unwrap_err(), ObjectiveError::BatchTooSmall(1));
    assert_eq!(kto_loss(&[], &KtoConfig::default()).unwrap_err(), ObjectiveError::NoLabeledExamples);
}

#[test]
fn z0_uses_mismatched_pairs_and_clamps() {
    let planted = [0.2, 0.4, -0.1, 0.3];
    let batch: Vec<KtoExample> = planted
        .iter()
        .map(|&z| ex(-1.0, -3.0, true).with_mismatched(z - 2.0, -2.0))
        .collect();
    assert!((estimate_z0(&batch, MismatchPolicy::Rotation).unwrap() - 0.2).abs() < 1e-12);
    assert!((estimate_z0(&batch, MismatchPolicy::BatchMean).unwrap() - 2.0).abs() < 1e-12);
    let negative: Vec<KtoExample> = (0..3).map(|_| ex(-5.0, -1.0, false)).collect();
    assert_eq!(estimate_z0(&negative, MismatchPolicy::Rotation).unwrap(), 0.0);
}

#[test]
fn invalid_configs() {
    let batch = vec![ex(-1.0, -1.0, true), ex(-1.0, -1.0, false)];
    for cfg in [
        KtoConfig { beta: 0.0, ..Default::default() },
        KtoConfig { tau: 0.0, ..Default::default() },
        KtoConfig { tau: 1.5, ..Default::default() },
        KtoConfig { lambda_u: -1.0, ..Default::default() },
    ] {
        assert!(matches!(kto_loss(&batch, &cfg), Err(ObjectiveError::InvalidConfig(_))));
    }
}

#[test]
fn labels_and_partition() {
    assert_eq!(label(1.0, 0.5), Some(Label::Desirable));
    assert_eq!(label(0.5, 0.5), None);
    assert_eq!(label(0.49, 0.5), Some(Label::Undesirable));
    assert_eq!(label(0.0, 0.5), Some(Label::Undesirable));
    let p = partition_scores(&[1.0, 0.5, 0.0, 0.75, 0.25], 0.5);
    assert_eq!(p.desirable, vec![0]);
    assert_eq!(p.undesirable, vec![2, 4]);
    assert_eq!(p.discarded, vec![1, 3]);
}

#[test]
fn accuracy_is_set_based() {
    assert_eq!(acc_r(&["a", "b", "a"], &["a", "c"]).unwrap(), 0.5);
    assert_eq!(acc_r(&["a"], &["a", "a"]).unwrap(), 1.0);
    assert_eq!(acc_r::<&str, &str>(&[], &["a"]).unwrap(), 0.0);
    assert_eq!(acc_r::<&str, &str>(&["a"], &[]).unwrap_err(), ObjectiveError::EmptyGold);
}

#[test]
fn sft_validation() {
    assert!((sft_nll(&[vec![-1.0, -2.0], vec![-0.5]]).unwrap() - 1.75).abs() < 1e-12);
    assert_eq!(sft_nll(&[]).unwrap_err(), ObjectiveError::EmptyBatch);
    assert_eq!(sft_nll(&[vec![-1.0], vec![]]).unwrap_err(), ObjectiveError::EmptyExample(1));
    assert!(matches!(sft_nll(&[vec![0.1]]), Err(ObjectiveError::PositiveLogProb { example: 0, .. })));
}

#[test]
fn records_round_trip_and_discard() {
    let json = r#"[
        {"query_id":"a","logp_policy":-1.0,"logp_ref":-1.5,"acc_r":1.0},
        {"query_id":"b","logp_policy":-2.0,"logp_ref":-1.0,"acc_r":0.5},
        {"query_id":"c","logp_policy":-3.0,"logp_ref":-1.0,"acc_r":0.0,"kl_logp_policy":-1.0,"kl_logp_ref":-1.2}
    ]"#;
    let records: Vec<KtoRecord> = serde_json::from_str(json).unwrap();
    let (examples, discarded) = examples_from_records(&records, 0.5);
    assert_eq!(discarded, 1);
    assert_eq!(examples.len(), 2);
    assert_eq!(examples[1].kl_logp_policy, Some(-1.0));
    assert_eq!(examples[0].label(), Label::Desirable);
}

#[test]
fn toy_zero_steps_and_zero_rate() {
    let fx = ToyFixture::standard();
    let r = train_toy_policy(&fx, 0, &ToyConfig::default()).unwrap();
    assert_eq!(r.param_norm, 0.0);
    assert!(r.losses.is_empty());
    assert_eq!(r.initial_greedy_acc_r, r.final_greedy_acc_r);

    let frozen = ToyConfig { lr: 0.0, ..Default::default() };
    let r = train_toy_policy(&fx, 20, &frozen).unwrap();
    assert_eq!(r.param_norm, 0.0);
    assert_eq!(r.initial_greedy_acc_r, r.final_greedy_acc_r);
}

#[test]
fn toy_training_solves_and_is_deterministic() {
    let fx = ToyFixture::standard();
    let cfg = ToyConfig::default();
    let a = train_toy_policy(&fx, 100, &cfg).unwrap();
    let b = train_toy_policy(&fx, 100, &cfg).unwrap();
    assert_eq!(a, b);
    assert!(a.initial_greedy_acc_r < 1.0);
    assert_eq!(a.final_greedy_acc_r, 1.0);
    assert!(a.solved_at.is_some());
    assert!(a.losses.iter().all(|l| l.is_finite()));
}

proptest! {
    #[test]
    fn gradients_match_finite_differences(
        batch in batch_strategy(),
        z0 in 0.0f64..2.0,
        beta in 0.05f64..2.0,
        logistic in any::<bool>(),
    ) {
        let cfg = KtoConfig {
            beta,
            value_fn: if logistic { ValueFn::Logistic } else { ValueFn::Linear },
            ..Default::default()
        };
        let res = kto_loss_with_z0(&batch, &cfg, z0).unwrap();
        prop_assert!((res.loss - reference_loss(&batch, &cfg, z0)).abs() < 1e-10);
        let h = 1e-5;
        for i in 0..batch.len() {
            let mut plus = batch.clone();
            plus[i].logp_policy += h;
            let mut minus = batch.clone();
            minus[i].logp_policy -= h;
            let fd = (kto_loss_with_z0(&plus, &cfg, z0).unwrap().loss
                - kto_loss_with_z0(&minus, &cfg, z0).unwrap().loss)
                / (2.0 * h);
            let g = res.gradients[i];
            // floor keeps saturated logistic terms out of round-off noise
            let scale = g.abs().max(fd.abs()).max(1e-6);
            prop_assert!((g - fd).abs() / scale < 1e-4, "i={} g={} fd={}", i, g, fd);
        }
    }

    #[test]
    fn linear_loss_is_translation_invariant(batch in batch_strategy(), c in -5.0f64..5.0) {
        // shifting policy and reference together leaves rewards unchanged
        let cfg = KtoConfig::default();
        let shifted: Vec<KtoExample> = batch
            .iter()
            .map(|e| {
                let mut e = e.clone();
                e.logp_policy += c;
                e.logp_ref += c;
                e
            })
            .collect();
        let a = kto_loss(&batch, &cfg).unwrap();
        let b = kto_loss(&shifted, &cfg).unwrap();
        prop_assert!((a.loss - b.loss).abs() < 1e-9);
    }

    #[test]
    fn loss_is_homogeneous_in_lambdas(batch in batch_strategy(), k in 0.1f64..10.0, z0 in 0.0f64..1.0) {
        let cfg = KtoConfig::default();
        let scaled = KtoConfig { lambda_d: k, lambda_u: k, ..cfg };
        let a = kto_loss_with_z0(&batch, &cfg, z0).unwrap();
        let b = kto_loss_with_z0(&batch, &scaled, z0).unwrap();
        prop_assert!((b.loss - k * a.loss).abs() < 1e-9 * (1.0 + b.loss.abs()));
    }

    #[test]
    fn auto_lambdas_follow_class_ratio(batch in batch_strategy()) {
        let cfg = KtoConfig { lambda_auto: true, ..Default::default() };
        let res = kto_loss_with_z0(&batch, &cfg, 0.0).unwrap();
        if res.n_desirable > 0 && res.n_undesirable > 0 {
            prop_assert_eq!(res.lambda_d, 1.0);
            prop_assert!((res.lambda_u - res.n_desirable as f64 / res.n_undesirable as f64).abs() < 1e-12);
        } else {
            prop_assert_eq!((res.lambda_d, res.lambda_u), (1.0, 1.0));
        }
        prop_assert!((res.loss - reference_loss(&batch, &cfg, 0.0)).abs() < 1e-10);
    }

    #[test]
    fn partition_is_a_disjoint_cover(acc in proptest::collection::vec(prop_oneof![Just(1.0f64), Just(0.5), 0.0f64..1.0], 0..50), tau in 0.01f64..1.0) {
        let p = partition_scores(&acc, tau);
        let mut all: Vec<usize> = p.desirable.iter().chain(&p.undesirable).chain(&p.discarded).copied().collect();
        all.sort_unstable();
        prop_assert_eq!(all, (0..acc.len()).collect::<Vec<_>>());
        for &i in &p.desirable { prop_assert_eq!(acc[i], 1.0); }
        for &i in &p.undesirable { prop_assert!(acc[i] < tau); }
        for &i in &p.discarded { prop_assert!(acc[i] >= tau && acc[i] < 1.0); }
    }

    #[test]
    fn sft_equals_mean_of_sums(batch in proptest::collection::vec(proptest::collection::vec(-10.0f64..0.0, 1..8), 1..10)) {
        let want = batch.iter().map(|e| -e.iter().sum::<f64>()).sum::<f64>() / batch.len() as f64;
        prop_assert!((sft_nll(&batch).unwrap() - want).abs() < 1e-9);
    }
}
