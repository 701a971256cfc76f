use std::f64::consts::LN_2;

use biaslab::data::{generate_preference_corpus, generate_vit_corpus, WorldConfig};
use biaslab::model::{Model, ModelConfig, ParamSnapshot};
use biaslab::objectives::{LbpTarget, LbrVariant, ObjectiveConfig};
use biaslab::record::to_line;
use biaslab::refcache::{CacheFile, LiveReference};
use biaslab::train::{
    alpha_at, dpo_variants, grad_check_dpo, grad_check_vit, train_dpo, train_vit, vit_batch,
    vit_variants, warmup_steps, AdamConfig, AdamW, GradCheckSpec, ScheduleSpec, TrainConfig,
};
use biaslab::types::{Component, Mode, Phase};
use biaslab::Error;

fn init(seed: u64) -> ParamSnapshot {
    ParamSnapshot::capture(&Model::<f32>::init(ModelConfig::default(), seed).unwrap())
}

fn short_vit(steps: u64) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs: 1,
        max_steps: Some(steps),
        ..TrainConfig::desk_vit()
    }
}

#[test]
fn cosine_alpha_endpoints() {
    let s = ScheduleSpec::cosine(1e-4, 1e-6);
    assert_eq!(alpha_at(&s, 0, 1000).unwrap(), 1e-4);
    assert_eq!(alpha_at(&s, 1000, 1000).unwrap(), 1e-6);
    assert!((alpha_at(&s, 500, 1000).unwrap() - 5.05e-5).abs() <= 1e-15);
    assert!(ScheduleSpec::cosine(1e-6, 1e-4).validate().is_err());
}

#[test]
fn adam_zero_gradient_is_a_no_op() {
    let mut p = vec![0.3f64, -1.2, 4.0];
    let before = p.clone();
    let mut opt = AdamW::new(AdamConfig::default(), 3);
    for _ in 0..3 {
        opt.step(&mut p, &[0.0; 3], 0.1).unwrap();
    }
    assert_eq!(p, before);
}

#[test]
fn adam_two_steps_by_hand() {
    let (lr, b1, b2, eps) = (0.1f64, 0.9f64, 0.999f64, 1e-8f64);
    let mut p = vec![1.0f64];
    let mut opt = AdamW::new(AdamConfig::default(), 1);
    opt.step(&mut p, &[0.5], lr).unwrap();
    // m1 = 0.05, v1 = 2.5e-4, m̂ = 0.5, v̂ = 0.25.
    let p1 = 1.0 - lr * 0.5 / (0.5 + eps);
    assert!((p[0] - p1).abs() <= 1e-12);
    opt.step(&mut p, &[-0.25], lr).unwrap();
    let m2 = b1 * 0.05 + (1.0 - b1) * -0.25;
    let v2 = b2 * 2.5e-4 + (1.0 - b2) * 0.0625;
    let p2 = p1 - lr * (m2 / (1.0 - b1 * b1)) / ((v2 / (1.0 - b2 * b2)).sqrt() + eps);
    assert!((p[0] - p2).abs() <= 1e-12);
}

#[test]
fn decoupled_decay_alone() {
    let cfg = AdamConfig {
        weight_decay: 0.01,
        ..AdamConfig::default()
    };
    let mut p = vec![2.0f64];
    let mut opt = AdamW::new(cfg, 1);
    for k in 1..=5 {
        opt.step(&mut p, &[0.0], 0.1).unwrap();
        assert!((p[0] - 2.0 * (1.0 - 0.001f64).powi(k)).abs() <= 1e-15);
    }
}

#[test]
fn non_finite_gradient_aborts() {
    let mut p = vec![1.0f32, 2.0];
    let mut opt = AdamW::new(AdamConfig::default(), 2);
    assert!(matches!(
        opt.step(&mut p, &[0.0, f32::NAN], 0.1),
        Err(Error::NonFinite { .. })
    ));
    assert!(matches!(
        opt.step(&mut p, &[0.0], 0.1),
        Err(Error::Shape(_))
    ));
}

#[test]
fn vit_starts_at_zero_reward_and_bias() {
    let ex = generate_vit_corpus(&WorldConfig::default(), 24, 0).unwrap();
    let snap = init(0);
    let live = LiveReference::<f32>::new(&snap).unwrap();
    let cfg = short_vit(3);
    let out = train_vit(&cfg, &ex, &snap, &live).unwrap();
    assert_eq!(out.log.len(), 3);
    let first = &out.log[0];
    assert!(first.reward.abs() <= 1e-9 && first.bias.abs() <= 1e-9);
    let loss = first.loss.as_ref().unwrap();
    assert_eq!(loss.weight(Component::Lbr), Some(0.0));
    assert_eq!(loss.total, loss.component(Component::Vit).unwrap());
    assert!(out.log[1].reward != 0.0);
    for r in &out.log {
        r.validate().unwrap();
        assert_eq!(r.phase, Phase::Vit);
    }
}

#[test]
fn warmup_reaches_configured_rate() {
    let ex = generate_vit_corpus(&WorldConfig::default(), 80, 0).unwrap();
    let snap = init(0);
    let live = LiveReference::<f32>::new(&snap).unwrap();
    let cfg = TrainConfig {
        batch_size: 4,
        epochs: 1,
        warmup_ratio: 0.2,
        learning_rate: 1e-3,
        max_steps: Some(6),
        ..TrainConfig::desk_vit()
    };
    let w = warmup_steps(0.2, cfg.total_steps(80));
    assert_eq!(w, 4);
    let out = train_vit(&cfg, &ex, &snap, &live).unwrap();
    assert_eq!(out.log[0].lr, Some(0.0));
    assert_eq!(out.log[4].lr, Some(1e-3));
}

#[test]
fn runs_are_reproducible_and_cache_matches_live() {
    let w = WorldConfig::default();
    let ex = generate_vit_corpus(&w, 32, 0).unwrap();
    let snap = init(1);
    let live = LiveReference::<f32>::new(&snap).unwrap();
    let corpus = biaslab::data::Corpus::vit(
        biaslab::data::CorpusHeader::new(biaslab::data::CorpusKind::Vit, 32, 0, &w),
        ex.clone(),
    );
    let cache = CacheFile::build(
        &corpus,
        &"00".repeat(32),
        &snap,
        &[Mode::Multimodal, Mode::TextOnly],
    )
    .unwrap();
    let mut cfg = short_vit(5);
    cfg.alpha_schedule = ScheduleSpec::cosine(0.5, 0.01);
    let a = train_vit(&cfg, &ex, &snap, &live).unwrap();
    let b = train_vit(&cfg, &ex, &snap, &live).unwrap();
    let c = train_vit(&cfg, &ex, &snap, &cache).unwrap();
    let lines = |o: &biaslab::train::TrainOutcome| o.log.iter().map(to_line).collect::<Vec<_>>();
    assert_eq!(lines(&a), lines(&b));
    assert_eq!(lines(&a), lines(&c));
    assert_eq!(a.snapshot.hash(), b.snapshot.hash());
    assert_eq!(a.snapshot.hash(), c.snapshot.hash());
}

#[test]
fn reference_must_match_initial_snapshot() {
    let ex = generate_vit_corpus(&WorldConfig::default(), 8, 0).unwrap();
    let live = LiveReference::<f32>::new(&init(2)).unwrap();
    let err = train_vit(&short_vit(1), &ex, &init(3), &live)
        .err()
        .unwrap();
    assert!(matches!(err, Error::HashMismatch { .. }));
}

#[test]
fn non_finite_loss_aborts_with_step() {
    let ex = generate_vit_corpus(&WorldConfig::default(), 8, 0).unwrap();
    let mut m = Model::<f32>::init(ModelConfig::default(), 0).unwrap();
    m.params_mut()[0..64 * 64]
        .iter_mut()
        .for_each(|p| *p = f32::NAN);
    let snap = ParamSnapshot::capture(&m);
    let live = LiveReference::<f32>::new(&snap).unwrap();
    match train_vit(&short_vit(2), &ex, &snap, &live) {
        Err(Error::NonFinite { step, .. }) => assert_eq!(step, 0),
        other => panic!("expected a non-finite abort, got {:?}", other.err()),
    }
}

#[test]
fn dpo_initial_losses() {
    let pairs = generate_preference_corpus(&WorldConfig::default(), 16, 0).unwrap();
    let snap = init(0);
    let live = LiveReference::<f32>::new(&snap).unwrap();
    let run = |objective: ObjectiveConfig| {
        let cfg = TrainConfig {
            objective,
            batch_size: 8,
            max_steps: Some(1),
            ..TrainConfig::desk_dpo()
        };
        train_dpo(&cfg, &pairs, &snap, &live).unwrap().log.remove(0)
    };
    let base = ObjectiveConfig::default();
    let dpo_m = run(base.clone());
    assert!((dpo_m.loss.as_ref().unwrap().total - 2.0 * LN_2).abs() <= 1e-9);
    let lbp = run(ObjectiveConfig {
        gamma: 1.0,
        lbp_target: LbpTarget::ChosenOnly,
        ..base.clone()
    });
    assert!((lbp.loss.as_ref().unwrap().total - 3.0 * LN_2).abs() <= 1e-9);
    let dpo = run(ObjectiveConfig {
        margin: false,
        ..base
    });
    let l = dpo.loss.unwrap();
    assert!((l.total - LN_2).abs() <= 1e-9);
    assert_eq!(l.weight(Component::Margin), Some(0.0));
    assert_eq!(l.weight(Component::Lbp), Some(0.0));
    for r in [&dpo_m, &lbp] {
        r.validate().unwrap();
        for v in [
            r.reward,
            r.bias,
            r.reward_rejected.unwrap(),
            r.bias_rejected.unwrap(),
        ] {
            assert!(v.abs() <= 1e-9);
        }
    }
}

#[test]
fn alpha_enters_linearly() {
    let ex = generate_vit_corpus(&WorldConfig::default(), 3, 0).unwrap();
    let batch: Vec<_> = ex.iter().collect();
    let reference = LiveReference::<f64>::new(&init(0)).unwrap();
    let policy: Model<f64> = init(1).restore(None).unwrap();
    let obj = |alpha| ObjectiveConfig {
        alpha,
        lbr_variant: LbrVariant::L1,
        ..ObjectiveConfig::default()
    };
    let g0 = vit_batch(&policy, &batch, &reference, &obj(0.0), true)
        .unwrap()
        .1
        .unwrap();
    let (stats, g1) = vit_batch(&policy, &batch, &reference, &obj(1e-5), true).unwrap();
    let g1 = g1.unwrap();
    // Oracle: ∂|B|/∂θ = sign(B) ∂P_text/∂θ, averaged over the batch.
    let mut lbr = vec![0.0; policy.n_params()];
    for e in &ex {
        let (p, g) = policy
            .score_gradient(None, &e.instruction, &e.response)
            .unwrap();
        let r = reference
            .model()
            .score_sequence(None, &e.instruction, &e.response)
            .unwrap();
        let s = (p.total() - r.total()).signum() / ex.len() as f64;
        lbr.iter_mut().zip(&g).for_each(|(a, b)| *a += s * b);
    }
    assert!(stats.bias != 0.0);
    for i in 0..lbr.len() {
        assert!((g1[i] - g0[i] - 1e-5 * lbr[i]).abs() <= 1e-9);
    }
}

#[test]
fn gradient_check_smoke() {
    let w = WorldConfig::default();
    let ex = generate_vit_corpus(&w, 2, 0).unwrap();
    let pairs = generate_preference_corpus(&w, 2, 0).unwrap();
    let reference = LiveReference::<f64>::new(&init(0)).unwrap();
    let policy: Model<f64> = init(1).restore(None).unwrap();
    let spec = GradCheckSpec {
        coords: 5,
        ..GradCheckSpec::default()
    };
    let v = grad_check_vit(
        &policy,
        &reference,
        &ex.iter().collect::<Vec<_>>(),
        &vit_variants(1e-5),
        &spec,
    )
    .unwrap();
    assert_eq!(v.entries.len(), 5);
    assert!(v.passed(), "{:?}", v.entries);
    let d = grad_check_dpo(
        &policy,
        &reference,
        &pairs.iter().collect::<Vec<_>>(),
        &dpo_variants(0.1, 1.0),
        &spec,
    )
    .unwrap();
    assert_eq!(d.entries.len(), 5);
    assert!(d.passed(), "{:?}", d.entries);
}

#[test]
fn presets() {
    let p = TrainConfig::preset("paper-lbp-7b").unwrap();
    assert_eq!((p.epochs, p.batch_size, p.learning_rate), (3, 8, 5e-7));
    assert_eq!(
        (p.weight_decay, p.warmup_ratio, p.objective.beta),
        (0.01, 0.05, 0.1)
    );
    let d = TrainConfig::preset("desk-dpo").unwrap();
    assert_eq!((d.learning_rate, d.batch_size, d.epochs), (3e-4, 16, 5));
    assert!(TrainConfig::preset("huge").is_err());
    let bad = TrainConfig {
        warmup_ratio: 1.0,
        ..TrainConfig::desk_vit()
    };
    assert!(bad.validate().is_err());
}
