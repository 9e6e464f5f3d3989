use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use diloco::config::{Config, Transport};
use diloco::data::{load_corpus, synth, Corpus};
use diloco::engine::{self, run_diloco, RunResult};
use diloco::metrics;
use diloco::numerics::ParamVector;
use diloco::transport::tcp;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::{Duration, Instant};

#[derive(Parser)]
#[command(name = "diloco", version, about = "Low-communication distributed training on byte-level text")]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a full training run in-process; write CSV, config sidecar and parameters.
    Train(TrainArgs),
    /// Run one training run per value of one config axis, plus a summary CSV.
    Sweep(SweepArgs),
    /// Coordinate a distributed run over TCP.
    Coordinator(CoordinatorArgs),
    /// Join a TCP coordinator as one worker.
    Worker(WorkerArgs),
    /// Score a saved parameter file on a corpus' validation split.
    Eval(EvalArgs),
    /// Write a synthetic topic-mixture corpus file.
    GenCorpus(GenCorpusArgs),
}

/// Config resolution shared by every run-producing subcommand: preset or
/// defaults, then the config file, then key=value overrides, then --seed.
#[derive(Args, Debug, Clone)]
struct ConfigArgs {
    /// TOML config file applied over the preset/defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Starting preset: baseline | 8x-batch | 8x-updates | diloco-default.
    #[arg(long)]
    preset: Option<String>,
    /// Override the master seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Output directory ($DILOCO_OUT_DIR, then ./runs, when omitted).
    #[arg(long)]
    out_dir: Option<PathBuf>,
    /// Additional key=value config overrides.
    #[arg(value_name = "KEY=VALUE")]
    overrides: Vec<String>,
}

impl ConfigArgs {
    fn resolve(&self) -> Result<Config> {
        let base = match &self.preset {
            Some(name) => Config::preset(name)?,
            None => Config::default(),
        };
        let cfg = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path)
                    .with_context(|| format!("reading {}", path.display()))?;
                // A run's JSON sidecar is itself a complete config, so a
                // finished run can be reproduced with `--config <run>.json`.
                if path.extension().is_some_and(|e| e == "json") {
                    serde_json::from_str(&text)
                        .with_context(|| format!("parsing {}", path.display()))?
                } else {
                    Config::from_toml(&base, &text)?
                }
            }
            None => base,
        };
        let mut cfg = cfg.with_overrides(&self.overrides)?;
        if let Some(seed) = self.seed {
            cfg.master_seed = seed;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self) -> PathBuf {
        self.out_dir
            .clone()
            .or_else(|| std::env::var_os("DILOCO_OUT_DIR").map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from("runs"))
    }
}

#[derive(Args)]
struct TrainArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
}

#[derive(Args)]
struct SweepArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Axis to vary: H | k | drop_prob | prune_frac | pretrain_steps | outer_opt | data_regime.
    #[arg(long)]
    axis: String,
    /// Comma-separated axis values, e.g. "10,50,100" or "sgd,nesterov".
    #[arg(long)]
    values: String,
}

#[derive(Args)]
struct CoordinatorArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Listen address, e.g. 0.0.0.0:9000.
    #[arg(long)]
    bind: String,
}

#[derive(Args)]
struct WorkerArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Coordinator address, e.g. 127.0.0.1:9000.
    #[arg(long)]
    connect: String,
    /// This worker's id in 0..k.
    #[arg(long)]
    worker_id: u32,
}

#[derive(Args)]
struct EvalArgs {
    #[command(flatten)]
    cfg: ConfigArgs,
    /// Parameter file written by train/coordinator.
    #[arg(long)]
    params: PathBuf,
}

#[derive(Args)]
struct GenCorpusArgs {
    /// Output corpus path (blank-line-delimited documents).
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value_t = 2000)]
    docs: usize,
    #[arg(long, default_value_t = 8)]
    topics: usize,
    /// Approximate bytes per document.
    #[arg(long, default_value_t = 1500)]
    doc_bytes: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

fn main() -> ExitCode {
    // Restore default SIGPIPE so `diloco ... | head` ends quietly instead of
    // panicking when the consumer closes the pipe mid-print.
    #[cfg(unix)]
    unsafe {
        libc::signal(libc::SIGPIPE, libc::SIG_DFL);
    }
    let cli = Cli::parse();
    let result = match &cli.cmd {
        Cmd::Train(a) => cmd_train(a),
        Cmd::Sweep(a) => cmd_sweep(a),
        Cmd::Coordinator(a) => cmd_coordinator(a),
        Cmd::Worker(a) => cmd_worker(a),
        Cmd::Eval(a) => cmd_eval(a),
        Cmd::GenCorpus(a) => cmd_gen_corpus(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}

fn load_run_corpus(cfg: &Config) -> Result<Corpus> {
    if cfg.corpus_path.is_empty() {
        bail!("corpus_path is not set; generate a corpus with `diloco gen-corpus` and point corpus_path at it");
    }
    Ok(load_corpus(Path::new(&cfg.corpus_path))?)
}

fn report(result: &RunResult, elapsed: Duration) {
    let bytes = result.records.last().map(|r| r.bytes_communicated).unwrap_or(0);
    println!(
        "run {} finished in {:.1?}: final val ppl {:.4}, {} per-worker inner steps total, {} bytes communicated",
        result.run_id, elapsed, result.final_val_ppl, result.total_inner_steps, bytes
    );
}

fn write_outputs(out_dir: &Path, cfg: &Config, result: &RunResult) -> Result<()> {
    std::fs::create_dir_all(out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let csv_path = out_dir.join(format!("{}.csv", result.run_id));
    metrics::write_csv(&csv_path, &result.records)?;
    let json_path = out_dir.join(format!("{}.json", result.run_id));
    std::fs::write(&json_path, cfg.canonical_json())?;
    let params_path = out_dir.join(format!("{}.params.bin", result.run_id));
    save_params(&params_path, &result.final_params)?;
    for p in [&csv_path, &json_path, &params_path] {
        println!("wrote {}", p.display());
    }
    Ok(())
}

const PARAMS_MAGIC: &[u8; 4] = b"DLP1";

fn save_params(path: &Path, params: &ParamVector) -> Result<()> {
    let mut buf = Vec::with_capacity(12 + params.len() * 8 + 4);
    buf.extend_from_slice(PARAMS_MAGIC);
    buf.extend_from_slice(&(params.len() as u64).to_le_bytes());
    for &x in &params.0 {
        buf.extend_from_slice(&x.to_le_bytes());
    }
    let crc = crc32fast::hash(&buf);
    buf.extend_from_slice(&crc.to_le_bytes());
    std::fs::write(path, buf).with_context(|| format!("writing {}", path.display()))?;
    Ok(())
}

fn load_params(path: &Path) -> Result<ParamVector> {
    let buf = std::fs::read(path).with_context(|| format!("reading {}", path.display()))?;
    if buf.len() < 16 || &buf[0..4] != PARAMS_MAGIC {
        bail!("{} is not a parameter file", path.display());
    }
    let stored = u32::from_le_bytes(buf[buf.len() - 4..].try_into().unwrap());
    if crc32fast::hash(&buf[..buf.len() - 4]) != stored {
        bail!("{} failed its checksum", path.display());
    }
    let count = u64::from_le_bytes(buf[4..12].try_into().unwrap()) as usize;
    if buf.len() != 12 + count * 8 + 4 {
        bail!("{} has a truncated parameter payload", path.display());
    }
    let values = buf[12..buf.len() - 4]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Ok(ParamVector(values))
}

fn cmd_train(args: &TrainArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let corpus = load_run_corpus(&cfg)?;
    let started = Instant::now();
    let result = run_diloco(&cfg, &corpus)?;
    report(&result, started.elapsed());
    write_outputs(&args.cfg.out_dir(), &cfg, &result)
}

/// Map a sweep axis name onto its config key.
fn axis_key(axis: &str) -> Result<&'static str> {
    Ok(match axis.to_ascii_lowercase().as_str() {
        "h" => "h",
        "k" => "k",
        "drop_prob" => "drop_prob",
        "prune_frac" => "prune_frac",
        "pretrain_steps" => "pretrain_steps",
        "outer_opt" => "outer_kind",
        "data_regime" => "data_regime",
        other => bail!(
            "unknown sweep axis '{other}' (expected H|k|drop_prob|prune_frac|pretrain_steps|outer_opt|data_regime)"
        ),
    })
}

fn cmd_sweep(args: &SweepArgs) -> Result<()> {
    let base = args.cfg.resolve()?;
    let corpus = load_run_corpus(&base)?;
    let key = axis_key(&args.axis)?;
    let values: Vec<&str> = args.values.split(',').map(str::trim).filter(|v| !v.is_empty()).collect();
    if values.is_empty() {
        bail!("--values must list at least one value");
    }
    let out_dir = args.cfg.out_dir();
    std::fs::create_dir_all(&out_dir)
        .with_context(|| format!("creating {}", out_dir.display()))?;
    let summary_path = out_dir.join("sweep-summary.csv");
    let mut summary = csv::Writer::from_path(&summary_path)?;
    summary.write_record(["axis", "value", "run_id", "final_val_ppl"])?;
    for value in values {
        let cfg = base
            .with_overrides(&[format!("{key}={value}")])
            .with_context(|| format!("axis value '{value}'"))?;
        cfg.validate()?;
        let started = Instant::now();
        let result = run_diloco(&cfg, &corpus)?;
        report(&result, started.elapsed());
        write_outputs(&out_dir, &cfg, &result)?;
        summary.serialize((&args.axis, value, &result.run_id, result.final_val_ppl))?;
    }
    summary.flush()?;
    println!("wrote {}", summary_path.display());
    Ok(())
}

fn cmd_coordinator(args: &CoordinatorArgs) -> Result<()> {
    let mut cfg = args.cfg.resolve()?;
    cfg.transport = Transport::Tcp;
    cfg.validate()?;
    let corpus = load_run_corpus(&cfg)?;
    println!("coordinating k={} workers on {}", cfg.k, args.bind);
    let started = Instant::now();
    let result = tcp::coordinator_serve(&args.bind, &cfg, &corpus)?;
    report(&result, started.elapsed());
    write_outputs(&args.cfg.out_dir(), &cfg, &result)
}

fn cmd_worker(args: &WorkerArgs) -> Result<()> {
    let mut cfg = args.cfg.resolve()?;
    cfg.transport = Transport::Tcp;
    cfg.validate()?;
    let corpus = load_run_corpus(&cfg)?;
    println!("worker {} joining {}", args.worker_id, args.connect);
    tcp::worker_run(&args.connect, args.worker_id, &cfg, &corpus)?;
    println!("worker {} finished", args.worker_id);
    Ok(())
}

fn cmd_eval(args: &EvalArgs) -> Result<()> {
    let cfg = args.cfg.resolve()?;
    let corpus = load_run_corpus(&cfg)?;
    let params = load_params(&args.params)?;
    let setup = engine::prepare(&cfg, &corpus)?;
    if params.len() != setup.model.param_count() {
        bail!(
            "{} holds {} parameters but the configured model has {}",
            args.params.display(),
            params.len(),
            setup.model.param_count()
        );
    }
    let ppl = metrics::evaluate_perplexity(&params, &setup.model, &setup.eval)?;
    println!("val ppl {ppl:.6} over {} positions", setup.eval.positions());
    Ok(())
}

fn cmd_gen_corpus(args: &GenCorpusArgs) -> Result<()> {
    let corpus = synth::generate(args.docs, args.topics, args.doc_bytes, args.seed);
    let mut buf = Vec::with_capacity(corpus.total_tokens + 2 * corpus.len());
    for (i, doc) in corpus.documents.iter().enumerate() {
        if i > 0 {
            buf.extend_from_slice(b"\n\n");
        }
        buf.extend_from_slice(doc);
    }
    buf.push(b'\n');
    std::fs::write(&args.out, &buf).with_context(|| format!("writing {}", args.out.display()))?;
    println!("wrote {} ({} documents, {} bytes of text)", args.out.display(), corpus.len(), corpus.total_tokens);
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn params_file_round_trips() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.params.bin");
        let v = ParamVector(vec![0.1, -2.5, f64::MIN_POSITIVE, 1e300]);
        save_params(&path, &v).unwrap();
        let back = load_params(&path).unwrap();
        assert_eq!(back, v);
    }

    #[test]
    fn corrupted_params_file_is_rejected() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("p.params.bin");
        save_params(&path, &ParamVector(vec![1.0, 2.0])).unwrap();
        let mut bytes = std::fs::read(&path).unwrap();
        bytes[13] ^= 0x40;
        std::fs::write(&path, &bytes).unwrap();
        assert!(load_params(&path).unwrap_err().to_string().contains("checksum"));
        std::fs::write(&path, b"junk").unwrap();
        assert!(load_params(&path).is_err());
    }

    #[test]
    fn json_sidecar_parses_back_to_the_resolved_config() {
        let mut cfg = Config::preset("diloco-default").unwrap();
        cfg.corpus_path = "corpus.txt".into();
        let cfg = cfg.resolved();
        let parsed: Config = serde_json::from_str(&cfg.canonical_json()).unwrap();
        assert_eq!(parsed, cfg);
    }

    #[test]
    fn axis_names_map_to_config_keys() {
        assert_eq!(axis_key("H").unwrap(), "h");
        assert_eq!(axis_key("outer_opt").unwrap(), "outer_kind");
        assert_eq!(axis_key("data_regime").unwrap(), "data_regime");
        assert!(axis_key("learning_rate").is_err());
    }
}
