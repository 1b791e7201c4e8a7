use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::attacker::{Generator, NOISE_DIM};
use crate::corpus::Waveform;
use crate::numerics::{grad_check_inputs, grad_check_module, Tensor};
use crate::victim::{VictimConfig, VictimModel};

fn small_victim(seed: u64) -> VictimModel {
    let cfg = VictimConfig {
        num_speakers: 3,
        frame_len: 400,
        eval_hop: 200,
        num_filters: 4,
        kernel_len: 21,
        pool: 2,
        conv_channels: 4,
        conv_kernel: 3,
        conv_blocks: 1,
        hidden: 8,
        ..VictimConfig::default()
    };
    VictimModel::new(cfg, seed).unwrap()
}

fn small_generator() -> GeneratorConfig {
    GeneratorConfig {
        uap_len: 256,
        channels: vec![4, 4, 3, 3, 2, 2, 2, 2],
        kernel: 5,
        scale: 1.0,
    }
}

fn randomize(g: &mut Generator, seed: u64, amp: f64) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for p in g.head.params_mut() {
        p.update(|d| d.iter_mut().for_each(|v| *v = rng.random_range(-amp..amp)));
    }
}

#[test]
fn nontargeted_reward_examples() {
    assert_eq!(reward_nontargeted(&[2.0, 5.0, 1.0], 1, 10.0).unwrap(), -3.0);
    assert_eq!(reward_nontargeted(&[20.0, 5.0, 1.0], 1, 10.0).unwrap(), 10.0);
    assert_eq!(reward_nontargeted(&[5.0, 5.0], 0, 10.0).unwrap(), 0.0);
    assert_eq!(reward_nontargeted(&[8.0, 5.0, 1.0], 1, 10.0).unwrap(), 3.0);
}

#[test]
fn targeted_reward_examples() {
    assert_eq!(reward_targeted(&[2.0, 5.0, 1.0], 0, 0.0).unwrap(), -3.0);
    assert_eq!(reward_targeted(&[9.0, 5.0, 1.0], 0, 0.0).unwrap(), 0.0);
    assert_eq!(reward_targeted(&[9.0, 5.0, 1.0], 0, 10.0).unwrap(), 4.0);
}

#[test]
fn reward_rejects_bad_labels() {
    assert!(matches!(
        reward_nontargeted(&[1.0, 2.0], 2, 10.0),
        Err(Error::LabelOutOfRange { label: 2, classes: 2 })
    ));
    assert!(reward_targeted(&[1.0], 0, 0.0).is_err());
}

#[test]
fn distortion_and_objective() {
    assert_eq!(distortion(&[3.0, 4.0]), 5.0);
    assert_eq!(distortion(&[0.0; 7]), 0.0);
    assert_eq!(attack_objective(2.0, 0.5, 4.0), 0.0);
    assert_eq!(attack_objective(-1.0, 0.25, 1500.0), -376.0);
}

#[test]
fn tape_rewards_match_scalar_rewards() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let logits: Vec<f64> = (0..20).map(|_| rng.random_range(-15.0..15.0)).collect();
    let labels = [0, 3, 1, 2, 2];
    let mut tape = Tape::new();
    let l = tape.constant(Tensor::new(vec![5, 4], logits.clone()).unwrap());
    let r = reward_nontargeted_var(&mut tape, l, &labels, 10.0).unwrap();
    let rt = reward_targeted_var(&mut tape, l, 2, 0.0).unwrap();
    for (i, row) in logits.chunks(4).enumerate() {
        assert_eq!(
            tape.value(r).unwrap().data()[i],
            reward_nontargeted(row, labels[i], 10.0).unwrap()
        );
        assert_eq!(tape.value(rt).unwrap().data()[i], reward_targeted(row, 2, 0.0).unwrap());
    }
}

#[test]
fn hinge_has_zero_gradient_past_threshold() {
    // row 0 sits above the clamp, row 1 below it
    let logits = Tensor::new(vec![2, 3], vec![20.0, 5.0, 1.0, 2.0, 5.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let l = tape.leaf(logits.clone());
    let r = reward_nontargeted_var(&mut tape, l, &[1, 1], 10.0).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap().of(l, &tape).unwrap();
    assert_eq!(g, vec![0.0, 0.0, 0.0, 1.0, -1.0, 0.0]);

    let err = grad_check_inputs(&[logits], 1e-6, |t, v| {
        let r = reward_nontargeted_var(t, v[0], &[1, 1], 10.0)?;
        t.sum(r)
    })
    .unwrap();
    assert!(err < 1e-8, "{err}");
}

#[test]
fn targeted_hinge_gradient() {
    let logits = Tensor::new(vec![2, 3], vec![9.0, 5.0, 1.0, 2.0, 5.0, 1.0]).unwrap();
    let mut tape = Tape::new();
    let l = tape.leaf(logits);
    let r = reward_targeted_var(&mut tape, l, 0, 0.0).unwrap();
    let s = tape.sum(r).unwrap();
    let g = tape.backward(s).unwrap().of(l, &tape).unwrap();
    assert_eq!(g, vec![0.0, 0.0, 0.0, 1.0, -1.0, 0.0]);
}

#[test]
fn config_validation() {
    let ok = AttackConfig::default();
    ok.validate(10).unwrap();
    assert_eq!(ok.threshold(), 10.0);
    let t = AttackConfig {
        mode: AttackMode::Targeted,
        target: Some(3),
        ..Default::default()
    };
    t.validate(10).unwrap();
    assert_eq!(t.threshold(), 0.0);
    assert!(matches!(
        AttackConfig {
            target: Some(10),
            ..t.clone()
        }
        .validate(10),
        Err(Error::LabelOutOfRange { label: 10, classes: 10 })
    ));
    assert!(AttackConfig { target: None, ..t }.validate(10).is_err());
    assert!(AttackConfig {
        lambda: 0.0,
        ..ok.clone()
    }
    .validate(10)
    .is_err());
    assert!(AttackConfig { target: Some(1), ..ok }.validate(10).is_err());
}

#[test]
fn config_rejects_unknown_keys() {
    let err = serde_json::from_str::<AttackConfig>(r#"{"lamda": 3}"#).unwrap_err();
    assert!(err.to_string().contains("lamda"));
    let c: AttackConfig = serde_json::from_str(r#"{"mode": "targeted", "target": 2}"#).unwrap();
    assert_eq!(c.mode, AttackMode::Targeted);
}

/// The full attack objective through generator, tiling and frozen victim.
#[test]
fn end_to_end_gradient_matches_finite_differences() {
    let victim = small_victim(4);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for (case, mode) in [AttackMode::NonTargeted, AttackMode::Targeted].into_iter().enumerate() {
        let mut g = Generator::new(small_generator(), case as u64).unwrap();
        randomize(&mut g, 50 + case as u64, 0.05);
        let z: Vec<f64> = (0..3 * NOISE_DIM).map(|_| rng.random_range(-1.0..1.0)).collect();
        let x: Vec<f64> = (0..3 * 400).map(|_| rng.random_range(-0.5..0.5)).collect();
        let labels = [0, 1, 2];
        let err = grad_check_module(&mut g, 1e-6, Some(6), case as u64, |m, t| {
            let zv = t.constant(Tensor::new(vec![3, NOISE_DIM], z.clone())?);
            let d = m.forward_train(t, zv, false)?;
            let tiled = t.repeat_clip(d, 400)?;
            let xv = t.constant(Tensor::new(vec![3, 400], x.clone())?);
            let adv = t.add(xv, tiled)?;
            let adv = t.reshape(adv, &[3, 1, 400])?;
            let logits = victim.forward(t, adv, true)?;
            let r = match mode {
                AttackMode::NonTargeted => reward_nontargeted_var(t, logits, &labels, 10.0)?,
                AttackMode::Targeted => reward_targeted_var(t, logits, 1, 0.5)?,
            };
            let dn = t.row_norm(d)?;
            let ld = t.scale(dn, 3.0)?;
            let obj = t.sub(r, ld)?;
            t.mean(obj)
        })
        .unwrap();
        assert!(err < 1e-5, "{mode:?}: {err}");
    }
}

#[test]
fn training_leaves_victim_untouched_and_logs() {
    let victim = small_victim(1);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let train: Vec<Waveform> = (0..6)
        .map(|i| {
            Waveform::new(
                (0..600).map(|_| rng.random_range(-0.3..0.3)).collect(),
                i % 3,
                format!("u{i}"),
            )
            .unwrap()
        })
        .collect();
    let config = AttackConfig {
        lambda: 1.0,
        batch_size: 4,
        steps: 6,
        log_every: 4,
        generator: small_generator(),
        ..Default::default()
    };
    let mut g = Generator::new(small_generator(), 0).unwrap();
    let log = train_uap(&mut g, &victim, &train, &config, 7).unwrap();
    assert_eq!(log.entries.iter().map(|e| e.step).collect::<Vec<_>>(), vec![4, 6]);
    assert_eq!(log.victim_checksum_before, log.victim_checksum_after);
    assert_eq!(log.victim_checksum_before, victim.checksum());
    assert!(g
        .head
        .params()
        .iter()
        .any(|p| p.value().data().iter().any(|&v| v != 0.0)));

    let mut g2 = Generator::new(small_generator(), 0).unwrap();
    let log2 = train_uap(&mut g2, &victim, &train, &config, 7).unwrap();
    let strip = |l: &TrainLog| {
        l.entries
            .iter()
            .map(|e| TrainLogEntry {
                seconds: 0.0,
                ..e.clone()
            })
            .collect::<Vec<_>>()
    };
    assert_eq!(strip(&log), strip(&log2));
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a.csv"), dir.path().join("b.csv"));
    log.write_csv(&a).unwrap();
    log2.write_csv(&b).unwrap();
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    assert!(std::fs::read_to_string(&a)
        .unwrap()
        .starts_with("step,reward,distortion,objective,ser\n"));
}

#[test]
fn training_rejects_mismatched_generator() {
    let victim = small_victim(1);
    let train = vec![Waveform::new(vec![0.1; 500], 0, "a").unwrap()];
    let config = AttackConfig {
        generator: small_generator(),
        ..Default::default()
    };
    let mut g = Generator::new(GeneratorConfig::default(), 0).unwrap();
    assert!(matches!(
        train_uap(&mut g, &victim, &train, &config, 0),
        Err(Error::InvalidConfig(_))
    ));
}
