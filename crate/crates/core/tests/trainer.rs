use lfd_core::corpus::{Example, EOS};
use lfd_core::model::{Arch, Model, ModelConfig};
use lfd_core::objectives::{ObjectiveConfig, ObjectiveKind};
use lfd_core::trainer::{
    mean_nll, train_degenerative, train_lfd_main, train_standard, LfdConfig, Phase, StepCount,
};
use lfd_core::Error;

fn model(seed: u64) -> Model {
    Model::new(ModelConfig {
        arch: Arch::DecoderOnly,
        layers: 1,
        model_dim: 8,
        heads: 2,
        ffn_dim: 16,
        vocab_size: 10,
        max_positions: 16,
        seed,
        ..ModelConfig::default()
    })
    .unwrap()
}

/// Toy LM corpus: short token runs over ids 4..10, ending in EOS.
fn corpus() -> Vec<Example> {
    (0..12)
        .map(|i| {
            let y: Vec<usize> = (0..5)
                .map(|t| 4 + (i + t * (i % 3 + 1)) % 6)
                .chain([EOS])
                .collect();
            Example::new(format!("doc{i}"), vec![], y).unwrap()
        })
        .collect()
}

fn cfg() -> LfdConfig {
    LfdConfig {
        learning_rate: 1e-2,
        epochs: 2,
        batch_size: 4,
        seed: 11,
        k: StepCount::Steps(3),
        h: StepCount::Steps(3),
        ..LfdConfig::default()
    }
}

#[test]
fn standard_training_reduces_loss_and_checkpoints_every_epoch() {
    let m = model(1);
    let data = corpus();
    let dir = tempfile::tempdir().unwrap();
    let init = m.init_parameters();
    let before = mean_nll(&m, &init, &data).unwrap();
    let c = LfdConfig { epochs: 4, ..cfg() };
    let out = train_standard(
        &m,
        &c,
        Some(init),
        &data,
        &data,
        &ObjectiveConfig::default(),
        Some(dir.path()),
    )
    .unwrap();
    assert!(mean_nll(&m, &out.best, &data).unwrap() < before);
    assert_eq!(out.log.epochs.len(), 4);
    assert_eq!(out.log.steps.len(), 12);
    for e in 1..=4 {
        assert!(dir.path().join(format!("epoch_{e:03}.ckpt")).exists());
    }
    let best = out.log.best_epoch.unwrap();
    let min = out
        .log
        .epochs
        .iter()
        .map(|e| e.validation_loss)
        .fold(f64::INFINITY, f64::min);
    assert_eq!(out.log.epochs[best].validation_loss, min);
}

#[test]
fn runs_are_deterministic() {
    let m = model(2);
    let data = corpus();
    let a = train_standard(
        &m,
        &cfg(),
        None,
        &data,
        &[],
        &ObjectiveConfig::default(),
        None,
    )
    .unwrap();
    let b = train_standard(
        &m,
        &cfg(),
        None,
        &data,
        &[],
        &ObjectiveConfig::default(),
        None,
    )
    .unwrap();
    assert_eq!(a.last.checksum(), b.last.checksum());
    assert_eq!(a.log.digest(), b.log.digest());
}

#[test]
fn other_standard_objectives_train() {
    let m = model(3);
    let data = corpus();
    for kind in [
        ObjectiveKind::Focal,
        ObjectiveKind::Cp,
        ObjectiveKind::UlRepeat,
    ] {
        let oc = ObjectiveConfig {
            kind,
            ..ObjectiveConfig::default()
        };
        let out = train_standard(&m, &cfg(), None, &data, &[], &oc, None).unwrap();
        assert!(out.log.steps.iter().all(|s| s.loss.is_finite()));
    }
    let face = ObjectiveConfig {
        kind: ObjectiveKind::Face,
        ..ObjectiveConfig::default()
    };
    assert!(matches!(
        train_standard(&m, &cfg(), None, &data, &[], &face, None),
        Err(Error::Unimplemented(_))
    ));
}

#[test]
fn degenerative_schedule_has_k_then_h_steps_and_freezes() {
    let m = model(4);
    let data = corpus();
    let (params, log) = train_degenerative(&m, &cfg(), None, &data).unwrap();
    assert!(params.is_frozen());
    let phases: Vec<Phase> = log.steps.iter().map(|s| s.phase).collect();
    assert_eq!(
        phases,
        [[Phase::Standard; 3], [Phase::Truncated; 3]].concat()
    );
    for s in &log.steps[3..] {
        let expect = ((0.7 * s.valid_token_count as f64 + 1e-9).floor() as usize).max(1);
        assert_eq!(s.selected_token_count, expect);
    }
}

#[test]
fn ratio_one_truncation_matches_standard_training() {
    let m = model(5);
    let data = corpus();
    let c = LfdConfig {
        r: 1.0,
        k: StepCount::Steps(2),
        h: StepCount::Steps(4),
        ..cfg()
    };
    let (trunc, _) = train_degenerative(&m, &c, None, &data).unwrap();
    // Same six-step total, so the learning-rate schedule matches too.
    let c_std = LfdConfig {
        k: StepCount::Steps(5),
        h: StepCount::Steps(1),
        ..c
    };
    let (std_params, _) = train_degenerative(&m, &c_std, None, &data).unwrap();
    assert_eq!(trunc.checksum(), std_params.checksum());
}

#[test]
fn lambda_zero_is_bit_identical_to_mle() {
    let m = model(6);
    let data = corpus();
    let (expert, _) = train_degenerative(&model(7), &cfg(), None, &data).unwrap();
    let c = LfdConfig {
        lambda: 0.0,
        ..cfg()
    };
    let lfd = train_lfd_main(&m, &c, &model(7), &expert, None, &data, &data, None).unwrap();
    let mle = train_standard(
        &m,
        &c,
        None,
        &data,
        &data,
        &ObjectiveConfig::default(),
        None,
    )
    .unwrap();
    assert_eq!(lfd.last.checksum(), mle.last.checksum());
    let losses = |o: &lfd_core::trainer::TrainOutcome| {
        o.log
            .steps
            .iter()
            .map(|s| s.loss.to_bits())
            .collect::<Vec<_>>()
    };
    assert_eq!(losses(&lfd), losses(&mle));
}

#[test]
fn lfd_leaves_the_expert_untouched() {
    let data = corpus();
    let em = model(8);
    let (expert, _) = train_degenerative(&em, &cfg(), None, &data).unwrap();
    let sum = expert.checksum();
    let out = train_lfd_main(&model(9), &cfg(), &em, &expert, None, &data, &data, None).unwrap();
    assert_eq!(expert.checksum(), sum);
    assert!(out.log.steps.iter().all(|s| s.phase == Phase::Lfd));

    let unfrozen = em.init_parameters();
    assert!(matches!(
        train_lfd_main(&model(9), &cfg(), &em, &unfrozen, None, &data, &data, None),
        Err(Error::ContractViolation(_))
    ));
}

#[test]
fn divergence_is_reported() {
    let m = model(10);
    let data = corpus();
    let c = LfdConfig {
        learning_rate: 1e6,
        epochs: 3,
        divergence_factor: 1.01,
        ..cfg()
    };
    let r = train_standard(&m, &c, None, &data, &[], &ObjectiveConfig::default(), None);
    assert!(matches!(r, Err(Error::DivergenceDetected { .. })), "{r:?}");
}
