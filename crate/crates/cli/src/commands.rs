use std::path::{Path, PathBuf};

use uapforge::attacker::{Generator, NoiseVector, Perturbation};
use uapforge::config::{CorpusSource, RunConfig};
use uapforge::corpus::{synth_corpus, wav, CorpusIndex, Split, SynthSpec, Waveform};
use uapforge::evaluation::{
    apply_uap, evaluate, match_sigma, random_baseline, run_sweep, select_lambda, snr, Goal, PesqTool, SweepContext,
    SweepSpec, SweepVar,
};
use uapforge::objectives::{train_uap, AttackMode};
use uapforge::victim::{train_victim, VictimModel};
use uapforge::{Error, Result};

use crate::{ApplyArgs, BaselineArgs, Command, InterpArgs, SweepArgs, UapArgs};

const CORPUS_DIR: &str = "corpus";
const VICTIM: &str = "victim.uapf";
const GENERATOR: &str = "generator.uapf";

pub fn run(cmd: &Command, cfg: &RunConfig) -> Result<()> {
    cfg.persist(&cfg.out_dir)?;
    match cmd {
        Command::SynthCorpus => synth(cfg),
        Command::TrainVictim => victim(cfg),
        Command::TrainUap => attack(cfg),
        Command::Apply(a) => apply(cfg, a),
        Command::Evaluate(a) => evaluate_cmd(cfg, a),
        Command::Sweep(a) => sweep(cfg, a),
        Command::Baseline(a) => baseline(cfg, a),
        Command::Interp(a) => interp(cfg, a),
    }
}

fn out(cfg: &RunConfig, name: &str) -> PathBuf {
    cfg.out_dir.join(name)
}

fn require(path: &Path, what: &str, producer: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingPrerequisite(format!(
            "{what} not found at {}; run `uapforge {producer}` first",
            path.display()
        )))
    }
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::Io {
        path: path.to_path_buf(),
        source: e,
    })
}

fn corpus(cfg: &RunConfig) -> Result<CorpusIndex> {
    match &cfg.corpus.source {
        CorpusSource::Synthetic { .. } => {
            let root = out(cfg, CORPUS_DIR);
            require(&root.join("index.json"), "corpus", "synth-corpus")?;
            CorpusIndex::load(&root)
        }
        CorpusSource::Directory(p) => CorpusIndex::open(p),
    }
}

fn load_victim(cfg: &RunConfig) -> Result<VictimModel> {
    let p = out(cfg, VICTIM);
    require(&p, "victim checkpoint", "train-victim")?;
    VictimModel::load(&p)
}

fn eval_split(cfg: &RunConfig, corpus: &CorpusIndex) -> Result<Vec<Waveform>> {
    corpus.load_split(match cfg.evaluation.split.as_str() {
        "train" => Split::Train,
        _ => Split::Test,
    })
}

fn goal(cfg: &RunConfig) -> Goal {
    match (cfg.attack.mode, cfg.attack.target) {
        (AttackMode::Targeted, Some(t)) => Goal::Targeted(t),
        _ => Goal::Untargeted,
    }
}

fn pesq(cfg: &RunConfig) -> Option<PesqTool> {
    PesqTool::resolve(cfg.evaluation.pesq.as_deref())
}

fn synth(cfg: &RunConfig) -> Result<()> {
    match &cfg.corpus.source {
        &CorpusSource::Synthetic {
            num_speakers,
            utterances_per_speaker,
            min_duration,
            max_duration,
        } => {
            let seed = cfg.stage_seed("corpus");
            let spec = SynthSpec::random(num_speakers, utterances_per_speaker, (min_duration, max_duration), seed);
            let idx = synth_corpus(&spec, seed, &out(cfg, CORPUS_DIR))?;
            println!(
                "synthesized {} speakers: {} train / {} test utterances in {}",
                idx.num_speakers(),
                idx.train.len(),
                idx.test.len(),
                idx.root.display()
            );
        }
        CorpusSource::Directory(p) => {
            let idx = CorpusIndex::open(p)?;
            println!(
                "indexed {} speakers: {} train / {} test utterances",
                idx.num_speakers(),
                idx.train.len(),
                idx.test.len()
            );
        }
    }
    Ok(())
}

fn victim(cfg: &RunConfig) -> Result<()> {
    let corpus = corpus(cfg)?;
    let path = out(cfg, VICTIM);
    let t = train_victim(
        &corpus,
        cfg.victim.model.clone(),
        &cfg.victim.train,
        cfg.stage_seed("victim"),
        Some(&path),
    )?;
    let mut csv = String::from("epoch,train_loss,test_accuracy\n");
    for e in &t.log {
        csv.push_str(&format!("{},{},{}\n", e.epoch, e.train_loss, e.test_accuracy));
    }
    write(&out(cfg, "victim_log.csv"), &csv)?;
    println!(
        "victim: best test sentence accuracy {:.3} at epoch {} -> {}",
        t.best_accuracy,
        t.best_epoch,
        path.display()
    );
    Ok(())
}

fn attack(cfg: &RunConfig) -> Result<()> {
    let victim = load_victim(cfg)?;
    let train = corpus(cfg)?.load_split(Split::Train)?;
    let seed = cfg.stage_seed("attacker");
    let mut g = Generator::new(cfg.attack.generator.clone(), seed)?;
    let log = train_uap(&mut g, &victim, &train, &cfg.attack, seed)?;
    g.save(&out(cfg, GENERATOR), seed, serde_json::to_value(&cfg.attack)?)?;
    log.write_csv(&out(cfg, "train_log.csv"))?;
    log.write_json(&out(cfg, "train_log.json"))?;
    log.write_timing_csv(&out(cfg, "train_timing.csv"))?;
    if let Some(e) = log.last() {
        println!(
            "generator trained: step {} R {:.4} D {:.5} g {:.4} batch rate {:.3}",
            e.step, e.reward, e.distortion, e.objective, e.rate
        );
    }
    Ok(())
}

/// The perturbation selected by `--uap`.
fn perturbation(cfg: &RunConfig, a: &UapArgs) -> Result<Perturbation> {
    let noise_seed = a.noise_seed.unwrap_or_else(|| cfg.stage_seed("evaluation"));
    match a.uap.as_str() {
        "zero" => Ok(Perturbation::zeros(cfg.attack.generator.uap_len)),
        "generator" => {
            let p = out(cfg, GENERATOR);
            require(&p, "generator checkpoint", "train-uap")?;
            Generator::load(&p)?.generate(&NoiseVector::from_seed(noise_seed))
        }
        path if path.ends_with(".wav") => Ok(Perturbation {
            samples: wav::read_samples(Path::new(path))?,
            noise_seed: None,
            generator_hash: None,
        }),
        path => Generator::load(Path::new(path))?.generate(&NoiseVector::from_seed(noise_seed)),
    }
}

fn apply(cfg: &RunConfig, a: &ApplyArgs) -> Result<()> {
    let delta = perturbation(cfg, &a.uap)?;
    let x = wav::read_samples(&a.input)?;
    let adv = apply_uap(&x, &delta.samples)?;
    let clipped = wav::clipped_count(&adv);
    if clipped > 0 {
        log::warn!("{clipped} samples clipped on WAV export");
    }
    wav::write_samples(&a.output, &adv)?;
    let s = snr(&x, &adv)?;
    println!(
        "wrote {} (SNR {s:.2} dB, {clipped} clipped samples)",
        a.output.display()
    );
    Ok(())
}

fn evaluate_cmd(cfg: &RunConfig, a: &UapArgs) -> Result<()> {
    let victim = load_victim(cfg)?;
    let split = eval_split(cfg, &corpus(cfg)?)?;
    let delta = perturbation(cfg, a)?;
    log::info!("evaluating with noise seed {:?}", delta.noise_seed);
    let mut report = evaluate(&victim, &delta, &split, goal(cfg), pesq(cfg).as_ref())?;
    if a.uap != "zero" {
        report = report.with_attack(&cfg.attack, cfg.stage_seed("attacker"));
    }
    report.save_json(&out(cfg, &format!("{}.json", a.name)))?;
    report.write_csv(&out(cfg, &format!("{}.csv", a.name)))?;
    println!("{}", report.summary());
    Ok(())
}

fn sweep_spec(cfg: &RunConfig, var: SweepVar, grid: Option<&Vec<f64>>) -> SweepSpec {
    let e = &cfg.evaluation;
    let default = match var {
        SweepVar::Lambda => &e.lambda_grid,
        SweepVar::UapLen => &e.uap_len_grid,
        SweepVar::Beta => &e.beta_grid,
        SweepVar::Sigma => &e.sigma_grid,
    };
    SweepSpec {
        variable: var,
        grid: grid.unwrap_or(default).clone(),
        template: cfg.attack.clone(),
        repetitions: e.repetitions,
    }
}

fn run_and_save(cfg: &RunConfig, spec: &SweepSpec, generator: Option<&Generator>, z: (u64, u64)) -> Result<()> {
    let victim = load_victim(cfg)?;
    let corpus = corpus(cfg)?;
    let train = corpus.load_split(Split::Train)?;
    let test = eval_split(cfg, &corpus)?;
    let name = spec.variable.name();
    let ctx = SweepContext {
        victim: &victim,
        train: &train,
        test: &test,
        seed: cfg.stage_seed("attacker"),
        eval_noise: cfg.stage_seed("evaluation"),
        generator,
        beta_noise: z,
        out_dir: Some(out(cfg, &format!("sweep_{name}"))),
        pesq: pesq(cfg),
    };
    let result = run_sweep(spec, &ctx)?;
    result.save(
        &out(cfg, &format!("sweep_{name}.csv")),
        &out(cfg, &format!("sweep_{name}.json")),
    )?;
    print!("{}", result.to_csv());
    if spec.variable == SweepVar::Lambda {
        let min = cfg.evaluation.min_snr_db;
        let text = match select_lambda(&result.rows, min) {
            Some(r) => {
                println!(
                    "selected lambda {} (rate {:.1}%, SNR {:.2} dB)",
                    r.value,
                    r.rate_pct,
                    r.mean_snr_db.unwrap()
                );
                serde_json::to_string_pretty(&serde_json::json!({"min_snr_db": min, "selected": r}))?
            }
            None => {
                println!("no lambda reaches a mean SNR of {min} dB");
                serde_json::to_string_pretty(&serde_json::json!({"min_snr_db": min, "selected": null}))?
            }
        };
        write(&out(cfg, "lambda_selection.json"), &text)?;
    }
    Ok(())
}

fn interp_noise(cfg: &RunConfig, z1: Option<u64>, z2: Option<u64>) -> (u64, u64) {
    (
        z1.unwrap_or_else(|| cfg.stage_seed("evaluation/z1")),
        z2.unwrap_or_else(|| cfg.stage_seed("evaluation/z2")),
    )
}

fn sweep(cfg: &RunConfig, a: &SweepArgs) -> Result<()> {
    let var: SweepVar = a.var.parse()?;
    let spec = sweep_spec(cfg, var, a.grid.as_ref());
    let generator = match var {
        SweepVar::Beta => {
            let p = out(cfg, GENERATOR);
            require(&p, "generator checkpoint", "train-uap")?;
            Some(Generator::load(&p)?)
        }
        _ => None,
    };
    run_and_save(cfg, &spec, generator.as_ref(), interp_noise(cfg, None, None))
}

fn interp(cfg: &RunConfig, a: &InterpArgs) -> Result<()> {
    let spec = sweep_spec(cfg, SweepVar::Beta, a.grid.as_ref());
    let p = out(cfg, GENERATOR);
    require(&p, "generator checkpoint", "train-uap")?;
    let g = Generator::load(&p)?;
    run_and_save(cfg, &spec, Some(&g), interp_noise(cfg, a.z1, a.z2))
}

fn baseline(cfg: &RunConfig, a: &BaselineArgs) -> Result<()> {
    let victim = load_victim(cfg)?;
    let split = eval_split(cfg, &corpus(cfg)?)?;
    let seed = cfg.stage_seed("evaluation");
    let uap_len = cfg.attack.generator.uap_len;
    let sigmas = match a.match_snr {
        Some(target) => {
            let m = match_sigma(&split, target, 0.1, uap_len, seed)?;
            println!("sigma {:.6e} gives mean SNR {:.3} dB", m.sigma, m.mean_snr_db);
            vec![m.sigma]
        }
        None => a.sigmas.clone().unwrap_or_else(|| cfg.evaluation.sigma_grid.clone()),
    };
    let rows = random_baseline(&victim, &split, &sigmas, goal(cfg), uap_len, seed, pesq(cfg).as_ref())?;
    let rate = if cfg.attack.mode == AttackMode::Targeted {
        "ptr_pct"
    } else {
        "ser_pct"
    };
    let mut csv = format!("sigma,{rate},snr_db,pesq\n");
    for r in &rows {
        let snr = r.mean_snr_db.map_or("inf".into(), |v| v.to_string());
        let pesq = r.mean_pesq.map_or("unavailable".into(), |v| v.to_string());
        csv.push_str(&format!("{},{},{snr},{pesq}\n", r.sigma, 100.0 * r.rate));
    }
    write(&out(cfg, "baseline.csv"), &csv)?;
    write(&out(cfg, "baseline.json"), &serde_json::to_string_pretty(&rows)?)?;
    print!("{csv}");
    Ok(())
}
