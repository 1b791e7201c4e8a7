use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::pesq::parse_score;
use super::*;
use crate::attacker::{Generator, GeneratorConfig, NoiseVector};
use crate::objectives::AttackConfig;
use crate::victim::VictimConfig;

fn small_victim() -> VictimModel {
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
    VictimModel::new(cfg, 5).unwrap()
}

fn split(n: usize, seed: u64) -> Vec<Waveform> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..n)
        .map(|i| {
            let len = rng.random_range(300..900);
            let x = (0..len).map(|_| rng.random_range(-0.4..0.4)).collect();
            Waveform::new(x, i % 3, format!("utt{i:02}")).unwrap()
        })
        .collect()
}

#[test]
fn repeat_clip_examples() {
    let d = [1.0, 2.0, 3.0, 4.0];
    assert_eq!(
        repeat_clip(&d, 10).unwrap(),
        vec![1.0, 2.0, 3.0, 4.0, 1.0, 2.0, 3.0, 4.0, 1.0, 2.0]
    );
    assert_eq!(repeat_clip(&d, 4).unwrap(), d.to_vec());
    assert_eq!(repeat_clip(&d, 3).unwrap(), vec![1.0, 2.0, 3.0]);
    assert!(repeat_clip(&[], 3).is_err());
    assert!(repeat_clip(&d, 0).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn repeat_clip_indexing_law(delta in prop::collection::vec(-1.0f64..1.0, 1..64), len in 1usize..500) {
        let out = repeat_clip(&delta, len).unwrap();
        prop_assert_eq!(out.len(), len);
        for (i, v) in out.iter().enumerate() {
            prop_assert_eq!(*v, delta[i % delta.len()]);
        }
    }
}

proptest! {
    #[test]
    fn snr_scaling_law(
        x in prop::collection::vec(-1.0f64..1.0, 32),
        d in prop::collection::vec(-0.1f64..0.1, 32),
        c in 0.01f64..100.0,
    ) {
        prop_assume!(x.iter().any(|v| v.abs() > 1e-3) && d.iter().any(|v| v.abs() > 1e-3));
        let adv = |s: f64| -> Vec<f64> { x.iter().zip(&d).map(|(a, b)| a + s * b).collect() };
        let s1 = snr(&x, &adv(1.0)).unwrap();
        let sc = snr(&x, &adv(c)).unwrap();
        prop_assert!((sc - s1 + 10.0 * c.log10()).abs() < 1e-9, "{} {} {}", s1, sc, c);
    }
}

#[test]
fn snr_examples() {
    // ‖x‖ = 1, ‖δ‖ = 0.1
    let x = [0.6, 0.8, 0.0];
    let adv = [0.6, 0.8, 0.1];
    assert!((snr(&x, &adv).unwrap() - 10.0).abs() < 1e-9);
    let adv = [0.6, 0.8, 1.0];
    assert!(snr(&x, &adv).unwrap().abs() < 1e-9);
    assert_eq!(snr(&x, &x).unwrap(), f64::INFINITY);
    assert!(matches!(snr(&x, &[0.0; 2]), Err(Error::InvalidShape(_))));
    assert!(snr(&[0.0; 3], &[1.0; 3]).is_err());
}

#[test]
fn zero_perturbation_reproduces_clean_predictions() {
    let v = small_victim();
    let s = split(12, 1);
    let r = evaluate_ser(&v, &Perturbation::zeros(256), &s).unwrap();
    let clean = v
        .predict_many(&s.iter().map(|w| w.samples.clone()).collect::<Vec<_>>())
        .unwrap();
    assert_eq!(r.outcomes.iter().map(|o| o.predicted).collect::<Vec<_>>(), clean);
    let wrong = clean.iter().zip(&s).filter(|(p, w)| **p != w.speaker).count();
    assert_eq!(r.rate, wrong as f64 / 12.0);
    assert_eq!(r.mean_snr_db, None);
    assert_eq!(r.infinite_snr, 12);
    assert_eq!(r.pesq_status, "unavailable");
    r.check_consistency().unwrap();
}

#[test]
fn zero_init_generator_matches_clean_error() {
    let v = small_victim();
    let s = split(9, 2);
    let g = Generator::new(
        GeneratorConfig {
            uap_len: 256,
            channels: vec![4, 4, 3, 3, 2, 2, 2, 2],
            ..Default::default()
        },
        0,
    )
    .unwrap();
    let delta = g.generate(&NoiseVector::from_seed(1)).unwrap();
    let r = evaluate_ser(&v, &delta, &s).unwrap();
    let z = evaluate_ser(&v, &Perturbation::zeros(256), &s).unwrap();
    assert_eq!(r.rate, z.rate);
    assert_eq!(r.outcomes, z.outcomes);
    assert_eq!(r.generator_hash, Some(g.checksum()));
}

#[test]
fn ptr_excludes_target_class() {
    let v = small_victim();
    let s = split(12, 3);
    let delta = gaussian_perturbation(256, 0.05, 0).unwrap();
    let r = evaluate_ptr(&v, &delta, &s, 1).unwrap();
    assert_eq!(r.counted, 8);
    assert!(r.outcomes.iter().all(|o| o.counted == (o.true_label != 1)));
    let hits = r.outcomes.iter().filter(|o| o.counted && o.predicted == 1).count();
    assert_eq!(r.rate, hits as f64 / 8.0);
    assert!(r.ptr_rule.is_some());
    assert!(matches!(
        evaluate_ptr(&v, &delta, &s, 3),
        Err(Error::LabelOutOfRange { label: 3, classes: 3 })
    ));
}

#[test]
fn report_round_trip_and_tamper_detection() {
    let v = small_victim();
    let s = split(6, 4);
    let delta = gaussian_perturbation(256, 0.01, 9).unwrap();
    let r = evaluate_ser(&v, &delta, &s)
        .unwrap()
        .with_attack(&AttackConfig::default(), 3);
    assert!(r.mean_snr_db.unwrap().is_finite());
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("r.json");
    r.save_json(&p).unwrap();
    assert_eq!(AttackReport::load_json(&p).unwrap(), r);
    assert_eq!(r.lambda, Some(1500.0));
    assert_eq!(r.threshold, Some(10.0));

    let mut bad = r.clone();
    bad.outcomes[0].predicted = (bad.outcomes[0].predicted + 1) % 3;
    let flipped = bad.check_consistency().is_err() || bad.rate == r.rate;
    assert!(flipped);
    bad.rate += 0.5;
    assert!(bad.check_consistency().is_err());
    let text = std::fs::read_to_string(&p)
        .unwrap()
        .replacen("\"successes\": ", "\"successes\": 1", 1);
    std::fs::write(&p, text).unwrap();
    assert!(AttackReport::load_json(&p).is_err());
    assert!(r.to_csv().starts_with("utterance_id,true,pred,snr_db,pesq\nutt00,0,"));
}

#[test]
fn parse_reference_tool_output() {
    let wb = "Reading reference file ref.wav...\nP.862.2 Prediction (MOS-LQO):  = 4.644\n";
    assert_eq!(parse_score(wb), Some(4.644));
    let nb = "P.862 Prediction (Raw MOS, MOS-LQO):  = 4.500   4.549\n";
    assert_eq!(parse_score(nb), Some(4.549));
    assert_eq!(parse_score("no score here"), None);
    assert_eq!(parse_score("Prediction = abc"), None);
}

#[cfg(unix)]
fn fake_tool(dir: &std::path::Path, name: &str, body: &str) -> std::path::PathBuf {
    use std::os::unix::fs::PermissionsExt;
    let p = dir.join(name);
    std::fs::write(&p, format!("#!/bin/sh\n{body}\n")).unwrap();
    std::fs::set_permissions(&p, std::fs::Permissions::from_mode(0o755)).unwrap();
    p
}

#[cfg(unix)]
#[test]
fn pesq_failures_are_distinct_and_non_fatal() {
    let dir = tempfile::tempdir().unwrap();
    let good = PesqTool::new(fake_tool(
        dir.path(),
        "good",
        "echo 'P.862.2 Prediction (MOS-LQO):  = 3.25'",
    ))
    .unwrap();
    let failing = PesqTool::new(fake_tool(dir.path(), "fail", "echo boom >&2; exit 3")).unwrap();
    let garbled = PesqTool::new(fake_tool(dir.path(), "garbled", "echo hello")).unwrap();
    let wild = PesqTool::new(fake_tool(dir.path(), "wild", "echo 'Prediction = 9.0'")).unwrap();
    assert!(matches!(
        PesqTool::new(dir.path().join("absent")),
        Err(PesqError::Missing(_))
    ));

    let x = vec![0.1; 400];
    assert_eq!(good.score_samples(&x, &x).unwrap(), 3.25);
    assert!(matches!(failing.score_samples(&x, &x), Err(PesqError::Failed { ref stderr, .. }) if stderr == "boom"));
    assert!(matches!(garbled.score_samples(&x, &x), Err(PesqError::Unparseable(_))));
    assert!(matches!(wild.score_samples(&x, &x), Err(PesqError::OutOfRange(_))));

    let v = small_victim();
    let s = split(3, 5);
    let delta = gaussian_perturbation(256, 0.01, 0).unwrap();
    let ok = evaluate(&v, &delta, &s, Goal::Untargeted, Some(&good)).unwrap();
    assert_eq!(ok.mean_pesq, Some(3.25));
    assert_eq!(ok.pesq_status, "ok");
    let degraded = evaluate(&v, &delta, &s, Goal::Untargeted, Some(&failing)).unwrap();
    assert_eq!(degraded.mean_pesq, None);
    assert!(degraded.pesq_status.starts_with("3 of 3 failed"));
    assert_eq!(degraded.rate, ok.rate);
}

#[test]
fn baseline_is_seeded_and_scales_one_direction() {
    let a = gaussian_perturbation(64, 1.0, 4).unwrap();
    let b = gaussian_perturbation(64, 2.0, 4).unwrap();
    assert!(a.samples.iter().zip(&b.samples).all(|(x, y)| 2.0 * x == *y));
    assert_ne!(a.samples, gaussian_perturbation(64, 1.0, 5).unwrap().samples);
    assert!(gaussian_perturbation(64, 0.0, 4).is_err());
}

#[test]
fn sigma_bisection_hits_target() {
    let s = split(8, 6);
    let m = match_sigma(&s, 30.0, 0.01, 256, 2).unwrap();
    assert!((m.mean_snr_db - 30.0).abs() <= 0.01);
    let d = gaussian_perturbation(256, m.sigma, 2).unwrap();
    let v = small_victim();
    let r = evaluate_ser(&v, &d, &s).unwrap();
    assert!((r.mean_snr_db.unwrap() - m.mean_snr_db).abs() < 1e-9);
    assert!(match_sigma(&s, 500.0, 0.01, 256, 2).is_err());
}

#[test]
fn baseline_error_grows_with_sigma() {
    let v = small_victim();
    let s = split(12, 7);
    let rows = random_baseline(&v, &s, &[1e-6, 1e-3, 10.0], Goal::Untargeted, 256, 0, None).unwrap();
    let clean = evaluate_ser(&v, &Perturbation::zeros(8), &s).unwrap();
    assert_eq!(rows[0].rate, clean.rate);
    let snrs: Vec<f64> = rows.iter().map(|r| r.mean_snr_db.unwrap()).collect();
    assert!(snrs[0] > snrs[1] && snrs[1] > snrs[2]);
}

#[test]
fn sweep_spec_validation() {
    let spec = |variable, grid: Vec<f64>| SweepSpec {
        variable,
        grid,
        template: AttackConfig::default(),
        repetitions: 1,
    };
    spec(SweepVar::Lambda, vec![500.0, 1000.0]).validate().unwrap();
    assert!(spec(SweepVar::Lambda, vec![]).validate().is_err());
    assert!(spec(SweepVar::Lambda, vec![1.0, 1.0]).validate().is_err());
    assert!(spec(SweepVar::Lambda, vec![-1.0]).validate().is_err());
    assert!(spec(SweepVar::UapLen, vec![3200.5]).validate().is_err());
    assert_eq!("beta".parse::<SweepVar>().unwrap(), SweepVar::Beta);
    assert!("gamma".parse::<SweepVar>().is_err());
}

#[test]
fn single_point_sigma_sweep_equals_direct_evaluation() {
    let v = small_victim();
    let s = split(6, 8);
    let mut template = AttackConfig::default();
    template.generator.uap_len = 256;
    let spec = SweepSpec {
        variable: SweepVar::Sigma,
        grid: vec![0.02],
        template,
        repetitions: 1,
    };
    let ctx = SweepContext {
        victim: &v,
        train: &s,
        test: &s,
        seed: 3,
        eval_noise: 0,
        generator: None,
        beta_noise: (0, 1),
        out_dir: None,
        pesq: None,
    };
    let out = run_sweep(&spec, &ctx).unwrap();
    let direct = evaluate_ser(&v, &gaussian_perturbation(256, 0.02, 3).unwrap(), &s).unwrap();
    assert_eq!(out.reports, vec![direct.clone()]);
    assert_eq!(out.rows[0].rate_pct, 100.0 * direct.rate);
    assert!(out.to_csv().starts_with("sigma,ser_pct,snr_db,pesq,repetition\n0.02,"));

    let beta = SweepSpec {
        variable: SweepVar::Beta,
        ..spec
    };
    assert!(matches!(run_sweep(&beta, &ctx), Err(Error::MissingPrerequisite(_))));
}

#[test]
fn beta_sweep_uses_interpolated_noise() {
    let v = small_victim();
    let s = split(6, 9);
    let cfg = GeneratorConfig {
        uap_len: 256,
        channels: vec![4, 4, 3, 3, 2, 2, 2, 2],
        ..Default::default()
    };
    let mut g = Generator::new(cfg.clone(), 1).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    for p in g.head.params_mut() {
        p.update(|d| d.iter_mut().for_each(|x| *x = rng.random_range(-0.1..0.1)));
    }
    let mut template = AttackConfig::default();
    template.generator = cfg;
    let spec = SweepSpec {
        variable: SweepVar::Beta,
        grid: vec![0.0, 0.2, 0.4, 0.6, 0.8, 1.0],
        template,
        repetitions: 1,
    };
    let ctx = SweepContext {
        victim: &v,
        train: &s,
        test: &s,
        seed: 0,
        eval_noise: 0,
        generator: Some(&g),
        beta_noise: (10, 20),
        out_dir: None,
        pesq: None,
    };
    let out = run_sweep(&spec, &ctx).unwrap();
    assert_eq!(out.rows.len(), 6);
    let end = evaluate_ser(&v, &g.generate(&NoiseVector::from_seed(10)).unwrap(), &s).unwrap();
    assert_eq!(out.reports[5].outcomes, end.outcomes);
}

#[test]
fn lambda_selection() {
    let row = |value, rate_pct, snr: Option<f64>| SweepRow {
        value,
        repetition: 0,
        rate_pct,
        mean_snr_db: snr,
        mean_pesq: None,
    };
    let rows = vec![
        row(100.0, 95.0, Some(25.0)),
        row(300.0, 85.0, Some(31.0)),
        row(1000.0, 85.0, Some(33.0)),
        row(3000.0, 40.0, Some(40.0)),
        row(1e4, 0.0, None),
    ];
    assert_eq!(select_lambda(&rows, 30.0).unwrap().value, 1000.0);
    assert!(select_lambda(&rows, 50.0).is_none());
}
