use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use anyhow::{Context, Result};
use clap::{Parser, Subcommand};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};

use dss_core::audio::{read_wav_16k, write_atomic, write_wav};
use dss_core::bench::{run_bench, BenchConfig};
use dss_core::dsp::SAMPLE_RATE;
use dss_core::eval::evaluate_checkpoint;
use dss_core::model::{Checkpoint, DssModel, ModelConfig, Variant};
use dss_core::scene::{generate_corpus, CorpusConfig, EnvMode, FarBand, Split, MANIFEST_NAME};
use dss_core::smoke::{run_smoke, SmokeConfig};
use dss_core::training::{train, Start, TrainConfig};
use dss_core::DssError;

/// Log verbosity comes from this variable (`error`..`trace`, default `info`).
const LOG_ENV: &str = "DSS_LOG";

#[derive(Parser)]
#[command(name = "dss", version, about = "Distance-based single-channel source separation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Render a corpus of simulated scenes and its manifest.
    Simulate {
        /// Full corpus description as JSON; flags below override it.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        out: Option<PathBuf>,
        #[arg(long)]
        count: Option<usize>,
        #[arg(long, value_parser = parse_split)]
        split: Option<Split>,
        #[arg(long)]
        seed: Option<u64>,
        /// indoor, outdoor or mixed
        #[arg(long, value_parser = parse_env)]
        env: Option<EnvMode>,
        /// Indoor:outdoor percentages, e.g. 60:40
        #[arg(long, value_parser = parse_pair::<u32>)]
        ratio: Option<(u32, u32)>,
        #[arg(long)]
        band: Option<FarBand>,
        /// Fixed near:far source counts, e.g. 1:1
        #[arg(long, value_parser = parse_pair::<usize>)]
        counts: Option<(usize, usize)>,
        #[arg(long)]
        speech_dir: Option<PathBuf>,
        #[arg(long)]
        noise_dir: Option<PathBuf>,
    },
    /// Train a separator on a manifest.
    Train {
        /// JSON with optional `model`, `train` and `init_seed` keys.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long)]
        seed: Option<u64>,
        /// Continue from this checkpoint instead of a fresh model.
        #[arg(long)]
        resume: Option<PathBuf>,
    },
    /// Split a 16 kHz mono WAV into near and far estimates.
    Separate {
        input: PathBuf,
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        out_near: PathBuf,
        #[arg(long)]
        out_far: PathBuf,
    },
    /// Score a checkpoint on a manifest, per scenario cell.
    Evaluate {
        #[arg(long)]
        ckpt: PathBuf,
        #[arg(long)]
        manifest: PathBuf,
        /// Comma-separated far bands.
        #[arg(long, value_delimiter = ',', default_value = "SR")]
        bands: Vec<FarBand>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Parameter, MAC, RTF and attention-scaling report.
    Bench {
        #[arg(long)]
        config: Option<PathBuf>,
        /// baseline, proposed, encdec or roformer
        #[arg(long)]
        variant: Option<String>,
        /// Use the small test configuration instead of the full one.
        #[arg(long)]
        tiny: bool,
        #[arg(long)]
        runs: Option<usize>,
        #[arg(long)]
        seconds: Option<f64>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
    /// Simulate, train, evaluate and bench at desk scale.
    Smoke {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        seed: Option<u64>,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Debug, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
struct TrainFile {
    model: ModelConfig,
    train: TrainConfig,
    init_seed: u64,
}

fn parse_split(s: &str) -> std::result::Result<Split, String> {
    match s {
        "train" => Ok(Split::Train),
        "eval" => Ok(Split::Eval),
        _ => Err(format!("expected train or eval, got '{s}'")),
    }
}

fn parse_env(s: &str) -> std::result::Result<EnvMode, String> {
    match s {
        "indoor" => Ok(EnvMode::Indoor),
        "outdoor" => Ok(EnvMode::Outdoor),
        "mixed" => Ok(EnvMode::Mixed),
        _ => Err(format!("expected indoor, outdoor or mixed, got '{s}'")),
    }
}

fn parse_pair<T: std::str::FromStr>(s: &str) -> std::result::Result<(T, T), String> {
    let (a, b) = s.split_once(':').ok_or_else(|| format!("expected A:B, got '{s}'"))?;
    match (a.trim().parse(), b.trim().parse()) {
        (Ok(a), Ok(b)) => Ok((a, b)),
        _ => Err(format!("expected two numbers as A:B, got '{s}'")),
    }
}

fn read_config<T: DeserializeOwned>(path: &Path) -> Result<T> {
    let text = fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    serde_json::from_str(&text).map_err(|e| DssError::Config(format!("{}: {e}", path.display())).into())
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let text = serde_json::to_string_pretty(value)?;
    write_atomic(path, text.as_bytes())?;
    Ok(())
}

fn simulate(cmd: Command) -> Result<()> {
    let Command::Simulate { config, out, count, split, seed, env, ratio, band, counts, speech_dir, noise_dir } = cmd else {
        unreachable!()
    };
    let mut cfg = match &config {
        Some(p) => read_config::<CorpusConfig>(p)?,
        None => {
            let out = out.clone().ok_or_else(|| DssError::Config("--out is required without --config".into()))?;
            let count = count.ok_or_else(|| DssError::Config("--count is required without --config".into()))?;
            CorpusConfig::new(count, split.unwrap_or(Split::Train), out, seed.unwrap_or(0))
        }
    };
    if let Some(v) = out {
        cfg.out_dir = v;
    }
    if let Some(v) = count {
        cfg.count = v;
    }
    if let Some(v) = split {
        cfg.split = v;
    }
    if let Some(v) = seed {
        cfg.seed = v;
    }
    if let Some(v) = env {
        cfg.env = v;
    }
    if let Some(v) = ratio {
        cfg.ratio = v;
    }
    if let Some(v) = band {
        cfg.far_band = v;
    }
    if counts.is_some() {
        cfg.counts = counts;
    }
    if speech_dir.is_some() {
        cfg.speech_dir = speech_dir;
    }
    if noise_dir.is_some() {
        cfg.noise_dir = noise_dir;
    }
    let recs = generate_corpus(&cfg)?;
    println!("wrote {} scenes to {}", recs.len(), cfg.out_dir.join(MANIFEST_NAME).display());
    Ok(())
}

fn run(cmd: Command) -> Result<()> {
    match cmd {
        c @ Command::Simulate { .. } => simulate(c),
        Command::Train { config, manifest, out, seed, resume } => {
            let mut file: TrainFile = match &config {
                Some(p) => read_config(p)?,
                None => TrainFile::default(),
            };
            if let Some(s) = seed {
                file.train.seed = s;
                file.init_seed = s;
            }
            let start = match resume {
                Some(p) => Start::Resume(p),
                None => Start::Fresh {
                    model: file.model,
                    init_seed: file.init_seed,
                },
            };
            let report = train(&manifest, start, &file.train, &out)?;
            let last = report.losses().last().copied().unwrap_or(f64::NAN);
            println!("final loss {last:.5}; checkpoint {}", report.checkpoint.display());
            Ok(())
        }
        Command::Separate { input, ckpt, out_near, out_far } => {
            let x = read_wav_16k(&input)?;
            let model: DssModel<f32> = Checkpoint::load(&ckpt)?.to_model()?;
            let t0 = Instant::now();
            let (near, far) = model.separate(&x)?;
            let secs = t0.elapsed().as_secs_f64();
            write_wav(&out_near, &near, SAMPLE_RATE)?;
            write_wav(&out_far, &far, SAMPLE_RATE)?;
            let dur = x.len() as f64 / SAMPLE_RATE as f64;
            println!("{}: {dur:.2} s audio, RTF {:.3}", input.display(), secs / dur);
            Ok(())
        }
        Command::Evaluate { ckpt, manifest, bands, out } => {
            let report = evaluate_checkpoint(&ckpt, &manifest, &bands)?;
            fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
            write_json(&out.join("eval.json"), &report)?;
            let table = report.to_table();
            write_atomic(&out.join("eval.txt"), table.as_bytes())?;
            print!("{table}");
            Ok(())
        }
        Command::Bench { config, variant, tiny, runs, seconds, seed, out } => {
            let mut cfg: BenchConfig = match &config {
                Some(p) => read_config(p)?,
                None => BenchConfig::default(),
            };
            if let Some(v) = variant {
                let v = Variant::from_short_name(&v)?;
                cfg.model = if tiny { ModelConfig::tiny(v) } else { ModelConfig::full(v) };
            } else if tiny {
                cfg.model = ModelConfig::tiny(cfg.model.variant);
            }
            if let Some(r) = runs {
                cfg.runs = r;
                cfg.scaling_runs = r;
            }
            if let Some(s) = seconds {
                cfg.audio_seconds = s;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let report = run_bench(&cfg)?;
            if let Some(dir) = out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
            }
            write_json(&out, &report)?;
            println!(
                "{}: {:.3} M params, {:.2} G MAC/s, RTF {:.3}",
                report.model.variant.short_name(),
                report.params as f64 / 1e6,
                report.macs_per_second_audio / 1e9,
                report.rtf.rtf
            );
            for c in &report.scaling {
                println!("{:?} latency ratio 2048/256: {:.2}", c.kind, c.ratio(2048, 256).unwrap_or(f64::NAN));
            }
            Ok(())
        }
        Command::Smoke { config, seed, out } => {
            let mut cfg: SmokeConfig = match &config {
                Some(p) => read_config(p)?,
                None => SmokeConfig::default(),
            };
            if let Some(s) = seed {
                cfg.seed = s;
            }
            let (report, timing) = run_smoke(&cfg, &out)?;
            let mut ok = true;
            for g in report.gates.iter().chain(&timing.gates) {
                println!("[{}] {} {}", if g.passed { "pass" } else { "FAIL" }, g.name, g.detail);
                ok &= g.passed;
            }
            println!("total {:.0} s", timing.total_seconds());
            anyhow::ensure!(ok, "smoke gates failed");
            Ok(())
        }
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or(LOG_ENV, "info")).init();
    let cli = Cli::parse();
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            // DssError messages already embed their sources.
            match e.downcast_ref::<DssError>() {
                Some(d) => eprintln!("error: {d}"),
                None => eprintln!("error: {e:#}"),
            }
            let code = e.downcast_ref::<DssError>().map_or(1, DssError::exit_code);
            ExitCode::from(code as u8)
        }
    }
}
