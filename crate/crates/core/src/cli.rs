//! Command-line front end: `split`, `train`, `compare`, `trace-info` and
//! `config`.
//!
//! Exit codes: 0 success, 1 usage error or empty input, 2 invalid input,
//! 3 numeric failure during training.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::{parse_override, ConfigError, RunConfig};
use crate::metrics::RateAccuracyTable;
use crate::playback::run_episode;
use crate::policies::PolicySpec;
use crate::report::{summarize, ReportError};
use crate::rl::{self, RlError, TrainOptions};
use crate::trace::{load_trace, parse_manifest, split_corpus, TraceCorpus, TraceError};

#[derive(Debug, Error)]
pub enum CliError {
    #[error("{0}")]
    Usage(String),
    #[error("{0}")]
    Empty(String),
    #[error("{0}")]
    Invalid(String),
    #[error("{0}")]
    Numeric(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) | CliError::Empty(_) => 1,
            CliError::Invalid(_) => 2,
            CliError::Numeric(_) => 3,
        }
    }
}

impl From<TraceError> for CliError {
    fn from(e: TraceError) -> Self {
        match e {
            TraceError::EmptyCorpus => CliError::Empty(e.to_string()),
            _ => CliError::Invalid(e.to_string()),
        }
    }
}

impl From<ConfigError> for CliError {
    fn from(e: ConfigError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

impl From<ReportError> for CliError {
    fn from(e: ReportError) -> Self {
        CliError::Invalid(e.to_string())
    }
}

fn invalid(e: impl std::fmt::Display) -> CliError {
    CliError::Invalid(e.to_string())
}

#[derive(Debug, Parser)]
#[command(name = "semabr", version, about = "Adaptive-bitrate semantic video streaming simulator")]
pub struct Cli {
    /// TOML run configuration.
    #[arg(long, global = true, value_name = "PATH")]
    pub config: Option<PathBuf>,
    /// Root seed.
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true, value_name = "DIR")]
    pub out: Option<PathBuf>,
    /// Dotted config override, e.g. `--set train.epochs=500`. Repeatable.
    #[arg(long = "set", global = true, value_name = "KEY=VALUE")]
    pub set: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Shuffle a trace directory into train/test manifests.
    Split {
        #[arg(long, value_name = "DIR")]
        traces: Option<PathBuf>,
        #[arg(long)]
        fraction: Option<f64>,
    },
    /// Train the actor-critic controller on the train manifest.
    Train {
        #[arg(long, value_name = "DIR")]
        traces: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        table: Option<PathBuf>,
        #[arg(long)]
        epochs: Option<usize>,
        #[arg(long)]
        workers: Option<usize>,
    },
    /// Evaluate schemes on the test manifest and write report files.
    Compare {
        #[arg(long, value_name = "DIR")]
        traces: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        manifest: Option<PathBuf>,
        #[arg(long, value_name = "PATH")]
        table: Option<PathBuf>,
        /// Comma-separated scheme list, e.g. `fixed:0,bb:5,10,mpc,rl:out/final.ckpt`.
        #[arg(long)]
        schemes: Option<String>,
    },
    /// Print duration, sample count and bandwidth statistics of a trace.
    TraceInfo { file: PathBuf },
    /// Print the fully merged configuration.
    Config,
}

/// Splits a comma-separated scheme list. A comma starts a new scheme only
/// when the next piece begins with a scheme keyword, so `bb:5,10,mpc` is two
/// schemes.
pub fn parse_scheme_list(list: &str) -> Result<Vec<String>, CliError> {
    let starts_scheme = |piece: &str| {
        let kind = piece.trim().split(':').next().unwrap_or("");
        matches!(kind, "fixed" | "bb" | "mpc" | "rl")
    };
    let mut out: Vec<String> = Vec::new();
    for piece in list.split(',') {
        if starts_scheme(piece) || out.is_empty() {
            out.push(piece.trim().to_string());
        } else {
            let last = out.last_mut().unwrap();
            last.push(',');
            last.push_str(piece.trim());
        }
    }
    for s in &out {
        s.parse::<PolicySpec>().map_err(invalid)?;
    }
    Ok(out)
}

fn toml_string(p: &Path) -> String {
    toml::Value::String(p.display().to_string()).to_string()
}

/// Merges config layers with this invocation's flags on top.
pub fn resolve_config(cli: &Cli, env: &[(String, String)]) -> Result<RunConfig, CliError> {
    let mut overrides = cli
        .set
        .iter()
        .map(|s| parse_override(s))
        .collect::<Result<Vec<_>, _>>()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let mut flag = |k: &str, v: String| overrides.push((k.to_string(), v));
    if let Some(seed) = cli.seed {
        flag("seed", seed.to_string());
    }
    if let Some(out) = &cli.out {
        flag("paths.out", toml_string(out));
    }
    match &cli.command {
        Command::Split { traces, fraction } => {
            if let Some(t) = traces {
                flag("paths.traces", toml_string(t));
            }
            if let Some(f) = fraction {
                flag("split.fraction", format!("{f:?}"));
            }
        }
        Command::Train {
            traces,
            manifest,
            table,
            epochs,
            workers,
        } => {
            if let Some(t) = traces {
                flag("paths.traces", toml_string(t));
            }
            if let Some(m) = manifest {
                flag("paths.train_manifest", toml_string(m));
            }
            if let Some(t) = table {
                flag("paths.table", toml_string(t));
            }
            if let Some(e) = epochs {
                flag("train.epochs", e.to_string());
            }
            if let Some(w) = workers {
                flag("train.workers", w.to_string());
            }
        }
        Command::Compare {
            traces,
            manifest,
            table,
            schemes,
        } => {
            if let Some(t) = traces {
                flag("paths.traces", toml_string(t));
            }
            if let Some(m) = manifest {
                flag("paths.test_manifest", toml_string(m));
            }
            if let Some(t) = table {
                flag("paths.table", toml_string(t));
            }
            if let Some(s) = schemes {
                let list = parse_scheme_list(s)?;
                flag("schemes", toml::Value::try_from(list).unwrap().to_string());
            }
        }
        Command::TraceInfo { .. } | Command::Config => {}
    }
    let cfg = RunConfig::resolve(cli.config.as_deref(), env, &overrides)?;
    cfg.validate()?;
    Ok(cfg)
}

/// Parses `args` (program name first), runs the command and returns the
/// exit code. Messages go to `out`, errors to `err`.
pub fn run<I, T>(args: I, env: &[(String, String)], out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let sink: &mut dyn Write = if code == 0 { out } else { err };
            let _ = write!(sink, "{}", e.render());
            return code;
        }
    };
    match dispatch(&cli, env, out) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(err, "error: {e}");
            e.exit_code()
        }
    }
}

fn dispatch(cli: &Cli, env: &[(String, String)], out: &mut dyn Write) -> Result<(), CliError> {
    if let Command::TraceInfo { file } = &cli.command {
        return cmd_trace_info(file, out);
    }
    let cfg = resolve_config(cli, env)?;
    match &cli.command {
        Command::Split { .. } => cmd_split(
            &cfg.paths.traces,
            cfg.split.fraction,
            cfg.seed,
            &cfg.paths.out,
            out,
        ),
        Command::Train { .. } => cmd_train(&cfg, out),
        Command::Compare { .. } => cmd_compare(&cfg, out),
        Command::Config => {
            let _ = write!(out, "{}", cfg.to_toml());
            Ok(())
        }
        Command::TraceInfo { .. } => unreachable!(),
    }
}

fn write_file(path: &Path, contents: impl AsRef<[u8]>) -> Result<(), CliError> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| invalid(format!("{}: {e}", dir.display())))?;
    }
    fs::write(path, contents).map_err(|e| invalid(format!("{}: {e}", path.display())))
}

fn load_dir(dir: &Path) -> Result<TraceCorpus, CliError> {
    if !dir.is_dir() {
        return Err(invalid(format!("{}: not a directory", dir.display())));
    }
    let corpus = TraceCorpus::load_dir(dir)?;
    if corpus.is_empty() {
        return Err(CliError::Empty(format!("{}: no traces found", dir.display())));
    }
    Ok(corpus)
}

fn load_table(cfg: &RunConfig) -> Result<RateAccuracyTable, CliError> {
    let table = if cfg.paths.table.as_os_str().is_empty() {
        RateAccuracyTable::bundled()
    } else {
        RateAccuracyTable::load(&cfg.paths.table).map_err(invalid)?
    };
    table
        .covers(&cfg.session.codec, &cfg.session.ladder)
        .map_err(invalid)?;
    Ok(table)
}

fn load_manifest(corpus: &TraceCorpus, path: &Path) -> Result<TraceCorpus, CliError> {
    let text = fs::read_to_string(path)
        .map_err(|e| invalid(format!("{}: {e} (run `split` first?)", path.display())))?;
    let selected = corpus.select(&parse_manifest(&text))?;
    if selected.is_empty() {
        return Err(CliError::Empty(format!("{}: manifest is empty", path.display())));
    }
    Ok(selected)
}

fn sha256_hex(bytes: &[u8]) -> String {
    Sha256::digest(bytes).iter().map(|b| format!("{b:02x}")).collect()
}

/// Writes `train.txt` and `test.txt` into `out_dir`.
pub fn cmd_split(
    traces: &Path,
    fraction: f64,
    seed: u64,
    out_dir: &Path,
    out: &mut dyn Write,
) -> Result<(), CliError> {
    let corpus = load_dir(traces)?;
    let (train, test) = split_corpus(&corpus, fraction, seed)?;
    write_file(&out_dir.join("train.txt"), train.manifest())?;
    write_file(&out_dir.join("test.txt"), test.manifest())?;
    let _ = writeln!(
        out,
        "split {} traces: {} train, {} test -> {}",
        corpus.len(),
        train.len(),
        test.len(),
        out_dir.display()
    );
    Ok(())
}

/// Trains on the train manifest. Writes `final.ckpt`, periodic checkpoints
/// under `checkpoints/`, `reward_curve.csv` and `training_log.csv`.
pub fn cmd_train(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let table = load_table(cfg)?;
    let corpus = load_dir(&cfg.paths.traces)?;
    let train_set = load_manifest(&corpus, &cfg.paths.train_manifest())?;
    let train_cfg = cfg.train_config();
    let out_dir = &cfg.paths.out;
    let opts = TrainOptions {
        checkpoint_dir: Some(out_dir.join("checkpoints")),
    };
    let report = match rl::train(&train_cfg, &cfg.session, &table, &train_set, &opts) {
        Ok(r) => r,
        Err(RlError::NonFiniteUpdate { epoch, snapshot }) => {
            let path = out_dir.join("diagnostic.ckpt");
            write_file(&path, snapshot.to_bytes())?;
            return Err(CliError::Numeric(format!(
                "non-finite update at epoch {epoch}; last finite parameters saved to {}",
                path.display()
            )));
        }
        Err(RlError::EmptyCorpus) => return Err(CliError::Empty("training set is empty".into())),
        Err(e) => return Err(invalid(e)),
    };
    let ckpt = rl::Checkpoint {
        epoch: report.epochs(),
        train: train_cfg,
        actor: report.actor.clone(),
        critic: report.critic.clone(),
    };
    let bytes = ckpt.to_bytes();
    write_file(&out_dir.join("final.ckpt"), &bytes)?;
    write_file(&out_dir.join("reward_curve.csv"), report.reward_curve_csv())?;
    write_file(&out_dir.join("training_log.csv"), report.training_log_csv())?;
    let tail = report.epochs().div_ceil(10);
    let final_mean =
        report.reward_curve[report.epochs() - tail..].iter().sum::<f64>() / tail as f64;
    let _ = writeln!(
        out,
        "trained {} epochs on {} traces in {:.1} s; final-10% mean reward {:.4}\ncheckpoint {} sha256 {}",
        report.epochs(),
        train_set.len(),
        report.wall_time,
        final_mean,
        out_dir.join("final.ckpt").display(),
        sha256_hex(&bytes)
    );
    Ok(())
}

fn config_lines(cfg: &RunConfig, specs: &[PolicySpec]) -> Vec<String> {
    let s = &cfg.session;
    let mut lines = vec![
        format!("seed {}", cfg.seed),
        format!(
            "ladder {:?} kbps, chunk {} s, buffer cap {} s, rtt {} s, {} chunks",
            s.ladder.levels(),
            s.chunk_duration,
            s.buffer_capacity,
            s.rtt,
            s.total_chunks
        ),
        format!("alpha {}, beta {}, codec {}, history {}", s.alpha, s.beta, s.codec, s.history_len),
        format!(
            "table {}",
            if cfg.paths.table.as_os_str().is_empty() {
                "bundled".to_string()
            } else {
                cfg.paths.table.display().to_string()
            }
        ),
    ];
    for spec in specs {
        match spec {
            PolicySpec::BufferBased { reservoir, cushion } => {
                lines.push(format!("bb reservoir {reservoir} s, cushion {cushion} s"))
            }
            PolicySpec::Mpc(m) => {
                lines.push(format!("mpc horizon {}, window {}", m.horizon, m.window))
            }
            _ => {}
        }
    }
    lines.dedup();
    lines
}

/// Evaluates every configured scheme on the test manifest and writes the
/// report files into the output directory.
pub fn cmd_compare(cfg: &RunConfig, out: &mut dyn Write) -> Result<(), CliError> {
    let specs = cfg.scheme_specs()?;
    if specs.is_empty() {
        return Err(CliError::Usage("no schemes to compare".into()));
    }
    let table = load_table(cfg)?;
    let corpus = load_dir(&cfg.paths.traces)?;
    let manifest = cfg.paths.test_manifest();
    let test_set = load_manifest(&corpus, &manifest)?;
    let mut results = Vec::with_capacity(specs.len());
    for (name, spec) in cfg.schemes.iter().zip(&specs) {
        let policy = spec.build(&cfg.session, &table).map_err(invalid)?;
        let logs = test_set
            .traces()
            .iter()
            .map(|t| run_episode(policy.as_ref(), t, &cfg.session, &table, cfg.seed))
            .collect::<Result<Vec<_>, _>>()
            .map_err(invalid)?;
        results.push((name.trim().to_string(), logs));
    }
    let report = summarize(&results, &manifest.display().to_string(), &config_lines(cfg, &specs))?;
    report.emit(&cfg.paths.out)?;
    let _ = write!(out, "{}", report.summary_text());
    Ok(())
}

pub fn cmd_trace_info(file: &Path, out: &mut dyn Write) -> Result<(), CliError> {
    let trace = load_trace(file)?;
    let (lo, hi) = trace.bandwidth_range();
    let _ = writeln!(
        out,
        "trace {}\nduration_s {}\nsamples {}\nmean_mbps {}\nmin_mbps {}\nmax_mbps {}",
        trace.name(),
        trace.duration(),
        trace.samples().len(),
        trace.mean_bandwidth(),
        lo,
        hi
    );
    Ok(())
}
