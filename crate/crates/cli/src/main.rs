//! `uapforge`: corpus synthesis, victim training, UAP training, evaluation
//! and ablation sweeps from one resolved JSON config.
//!
//! Exit codes: 0 success, 1 usage error, 2 runtime error.

mod commands;

use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

#[derive(Debug, Parser)]
#[command(
    name = "uapforge",
    version,
    about = "Generative universal adversarial perturbations for speaker recognition"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,

    /// JSON run config; defaults fill everything else
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// output directory for every artifact
    #[arg(long, global = true)]
    out: Option<PathBuf>,

    /// global seed
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// attack mode: non-targeted or targeted
    #[arg(long, global = true)]
    mode: Option<String>,

    /// target label for targeted attacks
    #[arg(long, global = true)]
    target: Option<usize>,

    /// distortion weight
    #[arg(long, global = true)]
    lambda: Option<f64>,

    /// attack training steps
    #[arg(long, global = true)]
    steps: Option<usize>,

    /// any config field as a dotted path, e.g. `--set attack.batch_size=16`;
    /// `--attack.batch_size 16` is accepted too
    #[arg(long = "set", value_name = "KEY=VALUE", global = true)]
    set: Vec<String>,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate the synthetic corpus (or index a directory corpus)
    SynthCorpus,
    /// Train the victim speaker recognizer
    TrainVictim,
    /// Train the perturbation generator against the victim
    TrainUap,
    /// Add the UAP to one WAV file
    Apply(ApplyArgs),
    /// Score a UAP on the evaluation split
    Evaluate(UapArgs),
    /// Sweep λ, UAP length, β or σ
    Sweep(SweepArgs),
    /// Random Gaussian perturbation baseline
    Baseline(BaselineArgs),
    /// Noise interpolation (β sweep) on the trained generator
    Interp(InterpArgs),
}

#[derive(Debug, Args)]
struct UapArgs {
    /// `generator` (trained checkpoint in --out), `zero`, or a path to a
    /// generator checkpoint or a perturbation WAV
    #[arg(long, default_value = "generator")]
    uap: String,

    /// noise seed fed to the generator; defaults to the evaluation stream
    #[arg(long)]
    noise_seed: Option<u64>,

    /// base name of the report files
    #[arg(long, default_value = "report")]
    name: String,
}

#[derive(Debug, Args)]
struct ApplyArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    output: PathBuf,
    #[command(flatten)]
    uap: UapArgs,
}

#[derive(Debug, Args)]
struct SweepArgs {
    /// lambda, uap_len, beta or sigma
    #[arg(long)]
    var: String,
    /// comma-separated grid; defaults to the evaluation section
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
}

#[derive(Debug, Args)]
struct BaselineArgs {
    /// comma-separated noise standard deviations
    #[arg(long, value_delimiter = ',')]
    sigmas: Option<Vec<f64>>,
    /// instead of a grid, bisect σ to this mean SNR (dB)
    #[arg(long)]
    match_snr: Option<f64>,
}

#[derive(Debug, Args)]
struct InterpArgs {
    #[arg(long, value_delimiter = ',')]
    grid: Option<Vec<f64>>,
    /// noise seeds of the two endpoints
    #[arg(long)]
    z1: Option<u64>,
    #[arg(long)]
    z2: Option<u64>,
}

/// Pull `--a.b value` / `--a.b=value` pairs out of argv.
fn split_dotted(args: Vec<String>) -> (Vec<String>, Vec<(String, String)>) {
    let mut rest = Vec::new();
    let mut dotted = Vec::new();
    let mut it = args.into_iter();
    while let Some(a) = it.next() {
        match a.strip_prefix("--") {
            Some(key) if key.contains('.') && !key.starts_with('.') => {
                if let Some((k, v)) = key.split_once('=') {
                    dotted.push((k.to_string(), v.to_string()));
                } else if let Some(v) = it.next() {
                    dotted.push((key.to_string(), v));
                } else {
                    // left for clap to reject
                    rest.push(a);
                }
            }
            _ => rest.push(a),
        }
    }
    (rest, dotted)
}

fn overrides(cli: &Cli, dotted: Vec<(String, String)>) -> Result<Vec<(String, String)>, String> {
    let mut o = Vec::new();
    if let Some(p) = &cli.out {
        o.push(("out_dir".into(), serde_json::to_string(p).unwrap()));
    }
    let mut put = |k: &str, v: Option<String>| {
        if let Some(v) = v {
            o.push((k.to_string(), v));
        }
    };
    put("seed", cli.seed.map(|v| v.to_string()));
    put(
        "attack.mode",
        cli.mode.clone().map(|m| serde_json::to_string(&m).unwrap()),
    );
    put("attack.target", cli.target.map(|v| v.to_string()));
    put("attack.lambda", cli.lambda.map(|v| v.to_string()));
    put("attack.steps", cli.steps.map(|v| v.to_string()));
    for s in &cli.set {
        let (k, v) = s
            .split_once('=')
            .ok_or_else(|| format!("--set expects KEY=VALUE, got `{s}`"))?;
        o.push((k.to_string(), v.to_string()));
    }
    o.extend(dotted);
    Ok(o)
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let (argv, dotted) = split_dotted(std::env::args().collect());
    let cli = match Cli::try_parse_from(argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() {
                ExitCode::from(1)
            } else {
                ExitCode::SUCCESS
            };
        }
    };
    let config = match overrides(&cli, dotted)
        .and_then(|o| uapforge::config::RunConfig::resolve(cli.config.as_deref(), &o).map_err(|e| e.to_string()))
    {
        Ok(c) => c,
        Err(e) => {
            eprintln!("error: {e}");
            eprintln!("run `uapforge --help` for usage");
            return ExitCode::from(1);
        }
    };
    match commands::run(&cli.command, &config) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(2)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn dotted_flags_are_extracted() {
        let args = [
            "uapforge",
            "train-uap",
            "--attack.lambda",
            "3",
            "--victim.train.patience=2",
            "--seed",
            "4",
        ]
        .map(String::from)
        .to_vec();
        let (rest, dotted) = split_dotted(args);
        assert_eq!(rest, ["uapforge", "train-uap", "--seed", "4"]);
        assert_eq!(
            dotted,
            vec![
                ("attack.lambda".to_string(), "3".to_string()),
                ("victim.train.patience".to_string(), "2".to_string())
            ]
        );
    }
}
