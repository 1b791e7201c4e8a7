use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::*;
use crate::corpus::Waveform;
use crate::numerics::grad_check_module;

fn small_config() -> VictimConfig {
    VictimConfig {
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
    }
}

fn noise(n: usize, seed: u64) -> Vec<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n).map(|_| rng.random_range(-0.5..0.5)).collect()
}

fn tone(freq: f64, n: usize, phase: f64) -> Vec<f64> {
    (0..n)
        .map(|i| 0.3 * (2.0 * std::f64::consts::PI * freq * i as f64 / 16000.0 + phase).sin())
        .collect()
}

#[test]
fn frame_offsets_examples() {
    assert_eq!(frame_offsets(300, 400, 200), vec![0]);
    assert_eq!(frame_offsets(400, 400, 200), vec![0]);
    assert_eq!(frame_offsets(401, 400, 200), vec![0, 200]);
    assert_eq!(frame_offsets(1000, 400, 200), vec![0, 200, 400, 600]);
    assert_eq!(frame_offsets(1001, 400, 200), vec![0, 200, 400, 600, 800]);
}

#[test]
fn short_inputs_wrap_into_one_frame() {
    let m = VictimModel::new(small_config(), 0).unwrap();
    let x = noise(150, 1);
    let frames = m.frames(&x);
    assert_eq!(frames.len(), 1);
    assert_eq!(&frames[0][..150], &x[..]);
    assert_eq!(&frames[0][150..300], &x[..]);
    assert!(m.predict_sentence(&x).unwrap() < 3);
    assert!(m.predict_sentence(&[]).is_err());
}

#[test]
fn forward_rejects_wrong_frame_shape() {
    let m = VictimModel::new(small_config(), 0).unwrap();
    let mut tape = Tape::new();
    let x = tape.constant(Tensor::new(vec![2, 1, 399], vec![0.0; 798]).unwrap());
    assert!(matches!(m.forward(&mut tape, x, true), Err(Error::InvalidShape(_))));
    assert!(m.logits(&[vec![0.0; 401]]).is_err());
}

#[test]
fn checkpoint_round_trip_preserves_outputs() {
    let m = VictimModel::new(small_config(), 7).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("v.uapf");
    m.save(&p, 7, serde_json::json!({"epoch": 1})).unwrap();
    let back = VictimModel::load(&p).unwrap();
    assert_eq!(back.checksum(), m.checksum());
    let x = noise(1234, 3);
    assert_eq!(back.sentence_scores(&x).unwrap(), m.sentence_scores(&x).unwrap());
}

#[test]
fn zeroed_head_gives_uniform_scores() {
    let mut m = VictimModel::new(small_config(), 2).unwrap();
    for p in m.fc2.params_mut() {
        p.update(|d| d.iter_mut().for_each(|v| *v = 0.0));
    }
    let s = m.sentence_scores(&noise(900, 4)).unwrap();
    for v in &s {
        assert!((v + 3f64.ln()).abs() < 1e-12);
    }
    // ties go to the lowest index
    assert_eq!(m.predict_sentence(&noise(900, 5)).unwrap(), 0);
}

#[test]
fn parameter_gradients_match_finite_differences() {
    let mut m = VictimModel::new(small_config(), 11).unwrap();
    let x = noise(3 * 400, 12);
    let labels = [0usize, 2, 1];
    let err = grad_check_module(&mut m, 1e-6, Some(5), 13, |m, t| {
        let xv = t.constant(Tensor::new(vec![3, 1, 400], x.clone())?);
        let y = m.forward(t, xv, false)?;
        let ls = t.log_softmax(y)?;
        let picked = t.pick(ls, &labels)?;
        let mean = t.mean(picked)?;
        t.scale(mean, -1.0)
    })
    .unwrap();
    assert!(err < 1e-6, "{err}");
}

#[test]
fn learns_separable_speakers_deterministically() {
    let mk = |n: usize, offset: u64| -> Vec<Waveform> {
        (0..3)
            .flat_map(|s| {
                (0..n).map(move |u| {
                    let freq = [300.0, 1100.0, 2500.0][s];
                    let phase = (u as u64 + offset) as f64 * 0.7;
                    Waveform::new(tone(freq, 1600, phase), s, format!("s{s}u{u}")).unwrap()
                })
            })
            .collect()
    };
    let (train, test) = (mk(4, 0), mk(2, 10));
    let tc = VictimTrainConfig {
        max_epochs: 15,
        batch_size: 8,
        patience: 15,
        adam: crate::numerics::AdamConfig {
            lr: 0.01,
            ..Default::default()
        },
        ..Default::default()
    };
    let a = train_victim_on(&train, &test, small_config(), &tc, 3, None).unwrap();
    let b = train_victim_on(&train, &test, small_config(), &tc, 3, None).unwrap();
    assert_eq!(a.best_accuracy, 1.0, "{:?}", a.log);
    assert_eq!(a.model.checksum(), b.model.checksum());
    assert_eq!(a.log, b.log);
    assert_eq!(accuracy(&a.model, &test).unwrap(), a.best_accuracy);
}

#[test]
fn identical_voices_are_at_chance() {
    let x = noise(1600, 21);
    let set: Vec<Waveform> = (0..3)
        .flat_map(|s| (0..2).map(move |u| (s, u)))
        .map(|(s, u)| Waveform::new(x.clone(), s, format!("s{s}u{u}")).unwrap())
        .collect();
    let tc = VictimTrainConfig {
        max_epochs: 3,
        batch_size: 6,
        ..Default::default()
    };
    let t = train_victim_on(&set, &set, small_config(), &tc, 0, None).unwrap();
    assert!((accuracy(&t.model, &set).unwrap() - 1.0 / 3.0).abs() < 1e-12);
}

#[test]
fn training_rejects_bad_labels() {
    let w = vec![Waveform::new(noise(800, 1), 5, "x").unwrap()];
    let err = train_victim_on(&w, &w, small_config(), &VictimTrainConfig::default(), 0, None).unwrap_err();
    assert!(matches!(err, Error::LabelOutOfRange { label: 5, classes: 3 }));
}
