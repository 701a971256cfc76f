use std::f64::consts::{E, LN_2};

use biaslab::objectives::*;
use biaslab::rng::rng_stream;
use biaslab::types::{Component, Mode, ModelTag, SequenceLogProb};
use proptest::prelude::*;
use rand::Rng;

fn trace(per_token: Vec<f64>, mode: Mode, tag: ModelTag) -> SequenceLogProb {
    SequenceLogProb::new(per_token, mode, tag).unwrap()
}

/// A trace of `n` tokens whose total is `total`.
fn spread(total: f64, n: usize, mode: Mode, tag: ModelTag) -> SequenceLogProb {
    let mut v = vec![total / n as f64; n];
    let head: f64 = v[..n - 1].iter().sum();
    v[n - 1] = total - head;
    trace(v, mode, tag)
}

use Mode::{Multimodal as MM, TextOnly as TX};
use ModelTag::{Policy as P, Reference as R};

/// Naive transcription of `-log σ(z)`; only valid for moderate `z`.
fn naive_nls(z: f64) -> f64 {
    -(1.0 / (1.0 + (-z).exp())).ln()
}

#[test]
fn vit_loss_values() {
    let uniform = trace(vec![-(64f64.ln()); 4], MM, P);
    assert!((vit_loss(&uniform).unwrap() - 16.6355).abs() < 1e-4);
    assert_eq!(vit_loss(&trace(vec![-1.0, -2.0], MM, P)).unwrap(), 3.0);
    let mut r = rng_stream(1, "vit-oracle");
    for _ in 0..100 {
        let n = r.gen_range(1..30);
        let v: Vec<f64> = (0..n).map(|_| -r.gen_range(0.0..8.0)).collect();
        let oracle = -v.iter().sum::<f64>();
        assert!((vit_loss(&trace(v, MM, P)).unwrap() - oracle).abs() < 1e-12);
    }
}

#[test]
fn bias_and_reward_values() {
    assert_eq!(
        language_bias(&spread(-10.0, 3, TX, P), &spread(-10.0, 3, TX, R)).unwrap(),
        0.0
    );
    assert_eq!(
        language_bias(&spread(-8.0, 2, TX, P), &spread(-10.0, 2, TX, R)).unwrap(),
        2.0
    );
    assert_eq!(
        reward(&spread(-20.0, 4, MM, P), &spread(-20.0, 4, MM, R)).unwrap(),
        0.0
    );
    assert_eq!(
        reward(&spread(-20.0, 4, MM, P), &spread(-25.0, 4, MM, R)).unwrap(),
        5.0
    );
}

#[test]
fn lbr_l1_values() {
    assert_eq!(lbr_l1(2.0), 2.0);
    assert_eq!(lbr_l1(-3.0), 3.0);
    assert_eq!(lbr_l1(0.0), 0.0);
    assert_eq!(lbr_l1_mean(-3.0, 3).unwrap(), 1.0);
    assert_eq!(lbr_l1_mean(0.0, 7).unwrap(), 0.0);
}

fn kl_for(d: f64) -> f64 {
    // d = log π_ref − log π_θ
    lbr_kl_approx(&spread(-5.0 - d, 2, TX, P), &spread(-5.0, 2, TX, R)).unwrap()
}

#[test]
fn lbr_kl_values() {
    assert_eq!(kl_for(0.0), 0.0);
    assert!((kl_for(1.0) - (E - 2.0)).abs() < 1e-12);
    assert!((kl_for(-1.0) - E.recip()).abs() < 1e-12);
    assert!(
        (kernels::kl_approx(60.0f64) - (50f64.exp() * 11.0 - 61.0)).abs()
            / kernels::kl_approx(60.0f64)
            < 1e-15
    );
}

fn contrastive_for(r_minus_b: f64) -> f64 {
    lbr_contrastive(
        &spread(-10.0 + r_minus_b, 3, MM, P),
        &spread(-10.0, 3, MM, R),
        &spread(-7.0, 3, TX, P),
        &spread(-7.0, 3, TX, R),
    )
    .unwrap()
}

#[test]
fn lbr_contrastive_values() {
    assert!((contrastive_for(0.0) - LN_2).abs() < 1e-12);
    assert!((contrastive_for(1.0) - 0.313262).abs() < 1e-6);
    assert!((contrastive_for(-1.0) - 1.313262).abs() < 1e-6);
    assert!(contrastive_for(0.5) < contrastive_for(0.4));
}

fn vit_traces(r: &mut impl Rng, n: usize) -> [SequenceLogProb; 4] {
    let g = |r: &mut dyn rand::RngCore| -> Vec<f64> {
        (0..n).map(|_| -r.gen_range(0.0..5.0)).collect()
    };
    [
        trace(g(r), MM, P),
        trace(g(r), MM, R),
        trace(g(r), TX, P),
        trace(g(r), TX, R),
    ]
}

fn vt(t: &[SequenceLogProb; 4]) -> VitTraces<'_> {
    VitTraces {
        policy_mm: &t[0],
        ref_mm: &t[1],
        policy_text: &t[2],
        ref_text: &t[3],
    }
}

#[test]
fn vit_total_values() {
    let mut r = rng_stream(2, "vit-total");
    let t = vit_traces(&mut r, 5);
    let off = ObjectiveConfig {
        alpha: 0.0,
        ..Default::default()
    };
    let e = vit_total(vt(&t), &off).unwrap();
    assert_eq!(e.loss.total, e.loss.component(Component::Vit).unwrap());
    assert_eq!(e.loss.weight(Component::Lbr), Some(0.0));

    // vit = 3, B = 2, L1, α = 1e-5 → 3.00002
    let ts = [
        spread(-3.0, 2, MM, P),
        spread(-3.0, 2, MM, R),
        spread(-4.0, 2, TX, P),
        spread(-6.0, 2, TX, R),
    ];
    let cfg = ObjectiveConfig {
        alpha: 1e-5,
        ..Default::default()
    };
    assert!((vit_total(vt(&ts), &cfg).unwrap().loss.total - 3.00002).abs() < 1e-12);

    for _ in 0..50 {
        let n = r.gen_range(1..20);
        let t = vit_traces(&mut r, n);
        let alpha = r.gen_range(0.0..2.0);
        for variant in LbrVariant::ALL {
            let cfg = ObjectiveConfig {
                alpha,
                lbr_variant: variant,
                ..Default::default()
            };
            let e = vit_total(vt(&t), &cfg).unwrap();
            let b = t[2].total() - t[3].total();
            let rw = t[0].total() - t[1].total();
            let lbr = match variant {
                LbrVariant::L1 => b.abs(),
                LbrVariant::L1Mean => b.abs() / n as f64,
                LbrVariant::KlApprox => (-b).exp() + b - 1.0,
                LbrVariant::Contrastive => naive_nls(rw - b),
            };
            let oracle = -t[0].total() + alpha * lbr;
            assert!(
                (e.loss.total - oracle).abs() < 1e-12 * oracle.abs().max(1.0),
                "{variant:?}"
            );
            assert!((e.loss.recomposed() - e.loss.total).abs() < 1e-12);
        }
    }
}

/// Central differences of a scalar function of the policy totals, used to check seeds.
fn seed_fd(f: impl Fn(f64) -> f64) -> f64 {
    let h = 1e-6;
    (f(h) - f(-h)) / (2.0 * h)
}

#[test]
fn vit_seeds_are_derivatives() {
    let mut r = rng_stream(3, "vit-seeds");
    for _ in 0..30 {
        let n = r.gen_range(2..10);
        let t = vit_traces(&mut r, n);
        for variant in LbrVariant::ALL {
            let cfg = ObjectiveConfig {
                alpha: 0.3,
                lbr_variant: variant,
                ..Default::default()
            };
            let seeds = vit_total(vt(&t), &cfg).unwrap().seeds;
            let shifted = |which: usize, h: f64| {
                let mut t2 = t.clone();
                let mut v = t2[which].per_token().to_vec();
                let k = v
                    .iter()
                    .enumerate()
                    .min_by(|a, b| a.1.total_cmp(b.1))
                    .unwrap()
                    .0;
                v[k] += h;
                t2[which] = trace(v, t[which].mode(), t[which].model_tag());
                vit_total(vt(&t2), &cfg).unwrap().loss.total
            };
            let fd_mm = seed_fd(|h| shifted(0, h));
            let fd_tx = seed_fd(|h| shifted(2, h));
            assert!((fd_mm - seeds.policy_mm).abs() < 1e-6, "{variant:?}");
            assert!((fd_tx - seeds.policy_text).abs() < 1e-6, "{variant:?}");
        }
    }
}

fn pair(rw: f64, rl: f64, bw: f64, bl: f64, n: usize) -> [SequenceLogProb; 8] {
    [
        spread(-20.0 + rw, n, MM, P),
        spread(-20.0, n, MM, R),
        spread(-22.0 + rl, n, MM, P),
        spread(-22.0, n, MM, R),
        spread(-30.0 + bw, n, TX, P),
        spread(-30.0, n, TX, R),
        spread(-31.0 + bl, n, TX, P),
        spread(-31.0, n, TX, R),
    ]
}

fn dt(t: &[SequenceLogProb; 8]) -> DpoTraces<'_> {
    DpoTraces {
        policy_w_mm: &t[0],
        ref_w_mm: &t[1],
        policy_l_mm: &t[2],
        ref_l_mm: &t[3],
        policy_w_text: &t[4],
        ref_w_text: &t[5],
        policy_l_text: &t[6],
        ref_l_text: &t[7],
    }
}

#[test]
fn dpo_family_values() {
    let z = pair(0.0, 0.0, 0.0, 0.0, 3);
    assert!((dpo_loss(&z[0], &z[1], &z[2], &z[3], 0.1).unwrap() - LN_2).abs() < 1e-12);
    assert!((margin_loss(&z[0], &z[1], 0.1).unwrap() - LN_2).abs() < 1e-12);
    let m = dpo_m(dt(&z), 0.1).unwrap();
    assert!((m.loss.total - 2.0 * LN_2).abs() < 1e-12);
    assert_eq!(
        m.loss.total - m.loss.component(Component::Dpo).unwrap(),
        m.loss.component(Component::Margin).unwrap()
    );

    let t = pair(6.0, -4.0, 0.0, 0.0, 3);
    assert!((dpo_loss(&t[0], &t[1], &t[2], &t[3], 0.1).unwrap() - 0.313262).abs() < 1e-6);

    assert!((lbp_penalty(&z[4], &z[5], 0.1).unwrap() - LN_2).abs() < 1e-12);
    let neg = pair(0.0, 0.0, -10.0, 0.0, 3);
    let pos = pair(0.0, 0.0, 10.0, 0.0, 3);
    assert!(
        (lbp_penalty(&neg[4], &neg[5], 0.1).unwrap() - (1.0 + (-1f64).exp()).ln()).abs() < 1e-12
    );
    assert!((lbp_penalty(&pos[4], &pos[5], 0.1).unwrap() - (1.0 + E).ln()).abs() < 1e-12);
}

#[test]
fn dpo_total_values() {
    let z = pair(0.0, 0.0, 0.0, 0.0, 2);
    let off = ObjectiveConfig {
        gamma: 0.0,
        ..Default::default()
    };
    assert_eq!(
        dpo_total(dt(&z), &off).unwrap().loss.total,
        dpo_m(dt(&z), 0.1).unwrap().loss.total
    );
    let on = ObjectiveConfig {
        gamma: 1.0,
        ..Default::default()
    };
    assert!((dpo_total(dt(&z), &on).unwrap().loss.total - 3.0 * LN_2).abs() < 1e-12);

    let mut r = rng_stream(4, "dpo-total");
    for _ in 0..100 {
        let t = pair(
            r.gen_range(-15.0..15.0),
            r.gen_range(-15.0..15.0),
            r.gen_range(-15.0..15.0),
            r.gen_range(-15.0..15.0),
            r.gen_range(1..8),
        );
        let beta = r.gen_range(0.01..1.0);
        let gamma = r.gen_range(0.0..3.0);
        let cfg = |target| ObjectiveConfig {
            beta,
            gamma,
            lbp_target: target,
            ..Default::default()
        };
        let both = dpo_total(dt(&t), &cfg(LbpTarget::Both)).unwrap().loss.total;
        let chosen = dpo_total(dt(&t), &cfg(LbpTarget::ChosenOnly))
            .unwrap()
            .loss
            .total;
        let lbp_l = lbp_penalty(&t[6], &t[7], beta).unwrap();
        assert!((both - (chosen + gamma * lbp_l)).abs() < 1e-12);

        // Direct transcription of the preference loss.
        let lw = (t[0].total() - t[1].total()) - (t[2].total() - t[3].total());
        let oracle = naive_nls(beta * lw);
        assert!((dpo_loss(&t[0], &t[1], &t[2], &t[3], beta).unwrap() - oracle).abs() < 1e-12);
        let e = dpo_total(dt(&t), &cfg(LbpTarget::RejectedOnly)).unwrap();
        assert!((e.loss.recomposed() - e.loss.total).abs() < 1e-12);
    }
}

#[test]
fn dpo_seeds_are_derivatives() {
    let mut r = rng_stream(5, "dpo-seeds");
    for _ in 0..30 {
        let (a, b, c, d) = (
            r.gen_range(-8.0..8.0),
            r.gen_range(-8.0..8.0),
            r.gen_range(-8.0..8.0),
            r.gen_range(-8.0..8.0),
        );
        for target in [
            LbpTarget::ChosenOnly,
            LbpTarget::RejectedOnly,
            LbpTarget::Both,
        ] {
            for margin in [true, false] {
                let cfg = ObjectiveConfig {
                    beta: 0.3,
                    gamma: 0.7,
                    lbp_target: target,
                    margin,
                    ..Default::default()
                };
                let s = dpo_total(dt(&pair(a, b, c, d, 2)), &cfg).unwrap().seeds;
                let f = |da, db, dc, dd| {
                    dpo_total(dt(&pair(a + da, b + db, c + dc, d + dd, 2)), &cfg)
                        .unwrap()
                        .loss
                        .total
                };
                assert!((seed_fd(|h| f(h, 0.0, 0.0, 0.0)) - s.chosen_mm).abs() < 1e-6);
                assert!((seed_fd(|h| f(0.0, h, 0.0, 0.0)) - s.rejected_mm).abs() < 1e-6);
                assert!((seed_fd(|h| f(0.0, 0.0, h, 0.0)) - s.chosen_text).abs() < 1e-6);
                assert!((seed_fd(|h| f(0.0, 0.0, 0.0, h)) - s.rejected_text).abs() < 1e-6);
            }
        }
    }
}

#[test]
fn disabling_margin_reduces_to_plain_preference_loss() {
    let t = pair(1.0, -2.0, 0.5, 0.0, 2);
    let cfg = ObjectiveConfig {
        margin: false,
        gamma: 0.0,
        ..Default::default()
    };
    let e = dpo_total(dt(&t), &cfg).unwrap();
    assert_eq!(e.loss.weight(Component::Margin), Some(0.0));
    assert_eq!(
        e.loss.total,
        dpo_loss(&t[0], &t[1], &t[2], &t[3], 0.1).unwrap()
    );
}

#[test]
fn bias_and_reward_are_antisymmetric() {
    let mut r = rng_stream(6, "antisym");
    for _ in 0..100 {
        let a: Vec<f64> = (0..4).map(|_| -r.gen_range(0.0..3.0)).collect();
        let b: Vec<f64> = (0..4).map(|_| -r.gen_range(0.0..3.0)).collect();
        let fwd = language_bias(&trace(a.clone(), TX, P), &trace(b.clone(), TX, R)).unwrap();
        let rev = language_bias(&trace(b.clone(), TX, P), &trace(a.clone(), TX, R)).unwrap();
        assert_eq!(fwd, -rev);
        let fwd = reward(&trace(a.clone(), MM, P), &trace(b.clone(), MM, R)).unwrap();
        let rev = reward(&trace(b, MM, P), &trace(a, MM, R)).unwrap();
        assert_eq!(fwd, -rev);
    }
}

proptest! {
    #[test]
    fn kl_nonnegative(d in -5.0f64..5.0) {
        let v = kernels::kl_approx(d);
        prop_assert!(v >= 0.0);
        if d.abs() >= 1e-12 {
            prop_assert!(v > 0.0);
        }
    }

    #[test]
    fn sigmoid_losses_positive_and_monotone(z in -700.0f64..700.0, dz in 1e-3f64..1.0) {
        for (lo, hi) in [
            (kernels::dpo(1.0, z, 0.0), kernels::dpo(1.0, z + dz, 0.0)),
            (kernels::margin(1.0, z), kernels::margin(1.0, z + dz)),
            (kernels::contrastive(z, 0.0), kernels::contrastive(z + dz, 0.0)),
        ] {
            prop_assert!(lo.is_finite() && lo > 0.0);
            prop_assert!(hi <= lo);
        }
        let (a, b) = (kernels::lbp(1.0, z), kernels::lbp(1.0, z + dz));
        prop_assert!(a.is_finite() && a > 0.0);
        prop_assert!(b >= a);
    }

    #[test]
    fn l1_mean_times_length_is_l1(bias in -1e3f64..1e3, n in 1usize..64) {
        let m = lbr_l1_mean(bias, n).unwrap();
        prop_assert!((m - lbr_l1(bias) / n as f64).abs() <= 1e-15 * lbr_l1(bias).max(1.0));
    }
}
