//! Command-line front end: argument parsing, run manifests, exit codes.

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::analysis::{
    assumption1_score, attention_stats, induction_head_audit, normerror_bruteforce, precision_sweep, write_sweep_csv, Precision,
    SweepConfig, SLICE_ROW,
};
use crate::constructions::{
    build, kappa_ladder, recommended_kappa, verify, Construction, ConstructionReport, EvalMode, VerifyConfig,
};
use crate::error::{Error, Result};
use crate::markov::{generate_dataset, sample_pair, write_dataset};
use crate::model::{init_weights, load_checkpoint, loss_and_grads, save_checkpoint, TransformerSpec, WeightSet};
use crate::rng::{derive, tag};
use crate::tensor::{grad_check_with, DEFAULT_EPS};
use crate::train::{train_with, TrainConfig};

pub const EXIT_PASS: i32 = 0;
pub const EXIT_FAIL: i32 = 1;
pub const EXIT_INCONCLUSIVE: i32 = 2;
pub const EXIT_USAGE: i32 = 64;

#[derive(Debug, Parser, Serialize)]
#[command(
    name = "kgram",
    version,
    about = "In-context k-gram transformers: constructions, training, analysis"
)]
pub struct Cli {
    /// Worker threads for per-sequence parallelism.
    #[arg(long, default_value_t = 1, global = true)]
    pub threads: usize,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand, Serialize)]
pub enum Command {
    /// Sample sequences from fresh random Markov kernels.
    GenData(GenDataArgs),
    /// Check a weight construction against the k-gram oracle.
    Verify(VerifyArgs),
    /// Train a pre-norm transformer on Markov data.
    Train(TrainArgs),
    /// Attention statistics, sweeps, audits and checks.
    Analyze(AnalyzeArgs),
    /// Re-run the invocation recorded in a run manifest.
    Replay { manifest: PathBuf },
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[arg(long = "S")]
    pub s: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long = "T")]
    pub t: usize,
    #[arg(long)]
    pub n: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args, Serialize)]
pub struct VerifyArgs {
    #[arg(long, value_parser = parse_construction)]
    pub construction: Construction,
    #[arg(long = "S")]
    pub s: usize,
    #[arg(long)]
    pub k: usize,
    #[arg(long = "T", default_value_t = 64)]
    pub t: usize,
    #[arg(long = "n-seqs", default_value_t = 100)]
    pub n_seqs: usize,
    /// A number, or `auto` for the recommended schedule.
    #[arg(long, default_value = "auto")]
    pub kappa: String,
    /// Target attention leakage used by `--kappa auto`.
    #[arg(long = "kappa-eps", default_value_t = 1e-3)]
    pub kappa_eps: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub tol: f64,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Re-run every prefix instead of reading all rows from one pass.
    #[arg(long)]
    pub sliding: bool,
    /// Write the JSON report here.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[arg(long)]
    pub config: PathBuf,
    /// Overrides the seed list in the config.
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long = "out-dir")]
    pub out_dir: PathBuf,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum Mode {
    AttnStats,
    Sweep,
    Normerror,
    IhAudit,
    Gradcheck,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
pub enum PrecisionArg {
    F64,
    F32,
    Both,
}

#[derive(Debug, Args, Serialize)]
pub struct AnalyzeArgs {
    #[arg(long, value_enum)]
    pub mode: Mode,
    /// Model to analyze; otherwise `--construction` builds one.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long, value_parser = parse_construction)]
    pub construction: Option<Construction>,
    #[arg(long, default_value = "auto")]
    pub kappa: String,
    #[arg(long = "S", default_value_t = 2)]
    pub s: usize,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
    #[arg(long = "T", default_value_t = 64)]
    pub t: usize,
    #[arg(long = "n-seqs", default_value_t = 100)]
    pub n_seqs: usize,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Attention layer (0-based); defaults to the last one.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Row exported as the attention slice.
    #[arg(long = "slice-row", default_value_t = SLICE_ROW)]
    pub slice_row: usize,
    /// Comma-separated temperatures for the sweep; defaults to a doubling ladder.
    #[arg(long)]
    pub kappas: Option<String>,
    #[arg(long, value_enum, default_value_t = PrecisionArg::Both)]
    pub precision: PrecisionArg,
    /// Width of the random model used by the gradient check.
    #[arg(long, default_value_t = 16)]
    pub d: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub tol: f64,
    /// Output file (sweep) or directory (attention statistics).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

fn parse_construction(s: &str) -> std::result::Result<Construction, String> {
    s.parse().map_err(|e: Error| e.to_string())
}

/// Record of one invocation, written next to its outputs before the results
/// and rewritten with the elapsed time when the run ends.
#[derive(Debug, Serialize)]
pub struct RunManifest<'a> {
    pub subcommand: &'static str,
    pub argv: Vec<String>,
    pub config: &'a Cli,
    pub seed: Option<u64>,
    pub version: &'static str,
    pub outputs: Vec<PathBuf>,
    pub wall_clock_secs: Option<f64>,
}

impl RunManifest<'_> {
    fn write(&self, path: &Path) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }
}

fn manifest_path(out: &Path) -> PathBuf {
    if out.is_dir() {
        out.join("manifest.json")
    } else {
        let mut name = out.file_name().map(OsString::from).unwrap_or_default();
        name.push(".manifest.json");
        out.with_file_name(name)
    }
}

/// Map an error to the documented exit status.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Inconclusive(_) => EXIT_INCONCLUSIVE,
        Error::Config(_) | Error::Input(_) | Error::Capacity(_) | Error::Parse(_) => EXIT_USAGE,
        _ => EXIT_FAIL,
    }
}

/// Parse `args`, run, and return the process exit status.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let argv: Vec<OsString> = args.into_iter().map(Into::into).collect();
    let cli = match Cli::try_parse_from(&argv) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { EXIT_USAGE } else { EXIT_PASS };
        }
    };
    let argv: Vec<String> = argv.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    if let Command::Replay { manifest } = &cli.command {
        return match replay_argv(manifest) {
            Ok(recorded) => main_with_args(recorded),
            Err(e) => {
                eprintln!("error: {e}");
                exit_code(&e)
            }
        };
    }
    match run(&cli, argv) {
        Ok(pass) => {
            if pass {
                EXIT_PASS
            } else {
                EXIT_FAIL
            }
        }
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn replay_argv(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
    let v: serde_json::Value = serde_json::from_str(&text)?;
    let argv: Vec<String> =
        serde_json::from_value(v["argv"].clone()).map_err(|e| Error::Config(format!("{}: no argv: {e}", path.display())))?;
    if argv.get(1).map(String::as_str) == Some("replay") {
        return Err(Error::Config("manifest records a replay".into()));
    }
    Ok(argv)
}

/// Execute a parsed command. `Ok(false)` means the run completed but its
/// check failed.
pub fn run(cli: &Cli, argv: Vec<String>) -> Result<bool> {
    if cli.threads == 0 {
        return Err(Error::Input("--threads must be at least 1".into()));
    }
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(cli.threads)
        .build()
        .map_err(|e| Error::Input(format!("thread pool: {e}")))?;
    pool.install(|| dispatch(cli, argv))
}

fn dispatch(cli: &Cli, argv: Vec<String>) -> Result<bool> {
    let start = Instant::now();
    let (name, seed, out) = match &cli.command {
        Command::GenData(a) => ("gen-data", Some(a.seed), Some(a.out.clone())),
        Command::Verify(a) => ("verify", Some(a.seed), a.out.clone()),
        Command::Train(a) => ("train", a.seed, Some(a.out_dir.clone())),
        Command::Analyze(a) => ("analyze", Some(a.seed), a.out.clone()),
        Command::Replay { .. } => return Err(Error::Input("replay is handled before dispatch".into())),
    };
    if let Command::Train(a) = &cli.command {
        fs::create_dir_all(&a.out_dir)?;
    }
    if let Command::Analyze(a) = &cli.command {
        if let (Mode::AttnStats, Some(dir)) = (a.mode, &a.out) {
            fs::create_dir_all(dir)?;
        }
    }
    let mut manifest = RunManifest {
        subcommand: name,
        argv,
        config: cli,
        seed,
        version: env!("CARGO_PKG_VERSION"),
        outputs: out.iter().cloned().collect(),
        wall_clock_secs: None,
    };
    let mpath = out.as_deref().map(manifest_path);
    if let Some(p) = &mpath {
        manifest.write(p)?;
    }
    let (pass, outputs) = match &cli.command {
        Command::GenData(a) => cmd_gen_data(a)?,
        Command::Verify(a) => cmd_verify(a)?,
        Command::Train(a) => cmd_train(a)?,
        Command::Analyze(a) => cmd_analyze(a)?,
        Command::Replay { .. } => unreachable!(),
    };
    if let Some(p) = &mpath {
        manifest.outputs = outputs;
        manifest.wall_clock_secs = Some(start.elapsed().as_secs_f64());
        manifest.write(p)?;
    }
    Ok(pass)
}

type Outcome = (bool, Vec<PathBuf>);

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn cmd_gen_data(a: &GenDataArgs) -> Result<Outcome> {
    if a.k == 0 || a.s < 2 || a.t < a.k {
        return Err(Error::Input(format!(
            "need S >= 2, k >= 1 and T >= k, got S={}, k={}, T={}",
            a.s, a.k, a.t
        )));
    }
    let (seqs, checksum) = generate_dataset(a.s, a.k, a.t, a.n, a.seed)?;
    let mut f = create(&a.out)?;
    write_dataset(&mut f, a.s, a.k, a.t, a.seed, &seqs)?;
    f.flush()?;
    println!("kernel checksum {checksum:016x}");
    Ok((true, vec![a.out.clone()]))
}

fn resolve_kappa(text: &str, k: usize, t: usize, eps: f64) -> Result<f64> {
    if text == "auto" {
        recommended_kappa(k, t, eps)
    } else {
        text.parse()
            .map_err(|_| Error::Input(format!("--kappa must be a number or auto, got {text:?}")))
    }
}

fn cmd_verify(a: &VerifyArgs) -> Result<Outcome> {
    if !a.construction.supports(a.k) {
        return Err(Error::Input(format!(
            "construction {} does not support k={}",
            a.construction, a.k
        )));
    }
    let cfg = VerifyConfig {
        construction: a.construction,
        s: a.s,
        k: a.k,
        t: a.t,
        n_seqs: a.n_seqs,
        kappa: resolve_kappa(&a.kappa, a.k, a.t, a.kappa_eps)?,
        tol: a.tol,
        seed: a.seed,
        mode: if a.sliding { EvalMode::Sliding } else { EvalMode::FullRows },
    };
    let report = verify(&cfg)?;
    println!("{}", ConstructionReport::CSV_HEADER);
    println!("{}", report.csv_row());
    let mut outputs = Vec::new();
    if let Some(p) = &a.out {
        fs::write(p, serde_json::to_string_pretty(&report)?)?;
        outputs.push(p.clone());
    }
    Ok((report.pass, outputs))
}

fn cmd_train(a: &TrainArgs) -> Result<Outcome> {
    let cfg = TrainConfig::load(&a.config)?;
    let seeds = match a.seed {
        Some(s) => vec![s],
        None if cfg.seeds.is_empty() => vec![0],
        None => cfg.seeds.clone(),
    };
    let spec = cfg.spec();
    fs::write(a.out_dir.join("config.toml"), cfg.to_toml()?)?;
    let mut outputs = vec![a.out_dir.join("config.toml")];
    for seed in seeds {
        let dir = a.out_dir.join(format!("seed{seed}"));
        fs::create_dir_all(&dir)?;
        let (w, log) = train_with(&cfg, seed, |it, w| {
            save_checkpoint(&dir.join(format!("checkpoint_{it}.json")), &spec, w)
        })?;
        let ck = dir.join("checkpoint.json");
        save_checkpoint(&ck, &spec, &w)?;
        let csv = dir.join("log.csv");
        let mut f = create(&csv)?;
        log.write_csv(&mut f)?;
        f.flush()?;
        if let Some(r) = log.last() {
            println!(
                "seed {seed}: iteration {} test loss {:.5} bayes {:.5} gap {:.5} nats",
                r.iteration, r.test_loss, r.bayes_loss, r.gap
            );
        }
        outputs.extend([ck, csv]);
    }
    Ok((true, outputs))
}

fn model_for(a: &AnalyzeArgs) -> Result<(TransformerSpec, WeightSet)> {
    match (&a.checkpoint, a.construction) {
        (Some(p), _) => load_checkpoint(p),
        (None, Some(c)) => build(c, a.s, a.k, resolve_kappa(&a.kappa, a.k, a.t, 1e-3)?, a.t),
        (None, None) => Err(Error::Input("give --checkpoint or --construction".into())),
    }
}

fn print_json(v: &impl Serialize) -> Result<()> {
    println!("{}", serde_json::to_string_pretty(v)?);
    Ok(())
}

fn cmd_analyze(a: &AnalyzeArgs) -> Result<Outcome> {
    match a.mode {
        Mode::AttnStats => {
            let (spec, w) = model_for(a)?;
            let stats = attention_stats(&spec, &w, a.s, a.k, a.n_seqs, a.t, a.seed)?;
            let scores: Vec<f64> = (0..spec.layers())
                .map(|l| assumption1_score(&stats, l))
                .collect::<Result<_>>()?;
            let mut outputs = Vec::new();
            if let Some(dir) = &a.out {
                let full = dir.join("attention_stats.csv");
                let slice = dir.join("attention_slice.csv");
                let mut f = create(&full)?;
                stats.write_csv(&mut f)?;
                f.flush()?;
                let mut f = create(&slice)?;
                stats.write_slice_csv(a.slice_row, &mut f)?;
                f.flush()?;
                outputs.extend([full, slice]);
            }
            print_json(&serde_json::json!({
                "n_seqs": stats.n_seqs,
                "T": stats.t,
                "spec_hash": format!("{:016x}", stats.spec_hash),
                "assumption1_score": scores,
            }))?;
            Ok((true, outputs))
        }
        Mode::Sweep => {
            let c = a
                .construction
                .ok_or_else(|| Error::Input("--mode sweep needs --construction".into()))?;
            let kappas: Vec<f64> = match &a.kappas {
                Some(list) => list
                    .split(',')
                    .map(|x| x.trim().parse().map_err(|_| Error::Input(format!("bad temperature {x:?}"))))
                    .collect::<Result<_>>()?,
                None => kappa_ladder(c, a.k, a.t, 6),
            };
            let cfg = SweepConfig {
                construction: c,
                s: a.s,
                k: a.k,
                t: a.t,
                n_seqs: a.n_seqs,
                seed: a.seed,
            };
            let precisions: &[Precision] = match a.precision {
                PrecisionArg::F64 => &[Precision::F64],
                PrecisionArg::F32 => &[Precision::F32],
                PrecisionArg::Both => &[Precision::F64, Precision::F32],
            };
            let mut points = Vec::new();
            for &p in precisions {
                points.extend(precision_sweep(&cfg, &kappas, p)?);
            }
            let mut buf = Vec::new();
            write_sweep_csv(&points, &mut buf)?;
            match &a.out {
                Some(p) => {
                    fs::write(p, &buf)?;
                    Ok((true, vec![p.clone()]))
                }
                None => {
                    std::io::stdout().write_all(&buf)?;
                    Ok((true, Vec::new()))
                }
            }
        }
        Mode::Normerror => {
            let r = normerror_bruteforce(a.s, a.k)?;
            print_json(&r)?;
            Ok((r.holds_exactly && r.min_distance >= r.bound, Vec::new()))
        }
        Mode::IhAudit => {
            let (spec, w) = model_for(a)?;
            let layer = a.layer.unwrap_or(spec.layers() - 1);
            let r = induction_head_audit(&spec, &w, a.s, a.k, a.n_seqs, a.t, a.seed, layer)?;
            print_json(&r)?;
            if r.evaluated == 0 {
                return Err(Error::Inconclusive("no sequence has a nonempty match set".into()));
            }
            Ok((r.pass_rate == 1.0, Vec::new()))
        }
        Mode::Gradcheck => {
            let (spec, w) = match &a.checkpoint {
                Some(p) => load_checkpoint(p)?,
                None => {
                    let spec = TransformerSpec::standard(2, 1, a.d, a.s, a.t);
                    let w = init_weights(&spec, a.seed)?;
                    (spec, w)
                }
            };
            let (_, seq) = sample_pair(spec.s, a.k, a.t.min(spec.t_max), a.seed, 0)?;
            let f = |w: &WeightSet| loss_and_grads(&spec, w, &seq, a.k);
            let r = grad_check_with(f, &w, DEFAULT_EPS, a.tol, 100, derive(a.seed, tag::GRADCHECK, 1))?;
            print_json(&r)?;
            Ok((r.pass, Vec::new()))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn code(args: &[&str]) -> i32 {
        main_with_args(std::iter::once("kgram").chain(args.iter().copied()))
    }

    #[test]
    fn usage_errors_exit_64() {
        assert_eq!(code(&["gen-data", "--S", "2"]), EXIT_USAGE);
        assert_eq!(code(&["verify", "--construction", "t9", "--S", "2", "--k", "1"]), EXIT_USAGE);
        assert_eq!(code(&["verify", "--construction", "t1", "--S", "2", "--k", "2"]), EXIT_USAGE);
        assert_eq!(code(&["nonsense"]), EXIT_USAGE);
    }

    #[test]
    fn manifest_sits_next_to_the_output() {
        assert_eq!(
            manifest_path(Path::new("/tmp/x/report.json")),
            PathBuf::from("/tmp/x/report.json.manifest.json")
        );
    }

    #[test]
    fn exit_codes_by_error_kind() {
        assert_eq!(exit_code(&Error::Inconclusive("x".into())), EXIT_INCONCLUSIVE);
        assert_eq!(exit_code(&Error::Config("x".into())), EXIT_USAGE);
        assert_eq!(
            exit_code(&Error::Diverged {
                iteration: 1,
                loss: f64::NAN
            }),
            EXIT_FAIL
        );
    }

    #[test]
    fn kappa_flag() {
        assert_eq!(resolve_kappa("12.5", 1, 64, 1e-3).unwrap(), 12.5);
        assert_eq!(
            resolve_kappa("auto", 1, 64, 1e-3).unwrap(),
            recommended_kappa(1, 64, 1e-3).unwrap()
        );
        assert!(resolve_kappa("warm", 1, 64, 1e-3).is_err());
    }
}
