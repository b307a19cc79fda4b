//! Command-line front end. Data goes to stdout, diagnostics to stderr.
//!
//! Exit codes: `0` success, `1` malformed input or I/O failure, `2` invalid
//! configuration or usage.

use std::ffi::OsString;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use crate::accounting::{self, projection_csv, projection_curve};
use crate::error::{Error, Result};
use crate::lqz::{encode_lqz, read_lqz, LqzFile};
use crate::pipeline::{
    comparison_csv, compare_methods, error_report, quantize_container, reconstruct_adapter, ErrorReport,
    QuantConfig, Strategy,
};
use crate::synth::{synthesize_container, SynthSpec};
use crate::tensor_store::{encode_tensors, read_container, write_container, AdapterContainer, Dtype, A_SUFFIX, B_SUFFIX};
use crate::Matrix;

#[derive(Debug, Parser)]
#[command(name = "lora-mpq", version, about = "Mixed-precision quantization of LoRA adapters")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Quantize every adapter of a container into a `.lqz` file.
    Quantize(QuantizeArgs),
    /// Dequantize a `.lqz` file back into a `.qla` container.
    Reconstruct(ReconstructArgs),
    /// Bit accounting of a `.lqz` file, optionally with errors against its source.
    Report(ReportArgs),
    /// Sweep ratios, static ranks, native splits and baselines over one container.
    Compare(CompareArgs),
    /// Memory needed to serve many adapters next to one base model.
    Project(ProjectArgs),
    /// Write a seeded synthetic `.qla` container.
    Synthesize(SynthesizeArgs),
}

#[derive(Debug, Args)]
struct SourceArgs {
    /// Input `.qla` container.
    #[arg(long, conflicts_with = "synthesize", required_unless_present = "synthesize")]
    input: Option<PathBuf>,
    /// Synthetic source as `m,n,r,layers,seed`.
    #[arg(long, value_name = "M,N,R,LAYERS,SEED")]
    synthesize: Option<String>,
    /// Singular-value decay of synthetic adapters; `none` for i.i.d. factors.
    #[arg(long, default_value = "0.8")]
    decay: String,
    /// Mixing of singular directions across native components.
    #[arg(long, default_value_t = 0.5)]
    mixing: f64,
}

#[derive(Debug, Args)]
struct ConfigArgs {
    /// Variance ratio selecting the high sub-LoRA rank.
    #[arg(long, default_value_t = 0.9)]
    ratio: f64,
    /// Bits of the high sub-LoRA (2, 3, 4; 16 stores it unquantized).
    #[arg(long, default_value_t = 2)]
    bits_high: u32,
    #[arg(long, default_value_t = crate::pipeline::DEFAULT_GROUP_SIZE)]
    group_size: usize,
    #[arg(long, default_value_t = crate::ste::DEFAULT_STEPS)]
    opt_steps: usize,
    #[arg(long, default_value_t = crate::ste::DEFAULT_LEARNING_RATE)]
    lr: f64,
    /// svd_ratio, svd_static, random_split, norm_split, prune, low_rtn1, rtn<bits>, bin.
    #[arg(long, default_value = "svd_ratio")]
    strategy: String,
    /// Fixed high rank for svd_static, random_split and norm_split.
    #[arg(long)]
    h: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

impl ConfigArgs {
    fn to_config(&self) -> Result<QuantConfig> {
        let cfg = QuantConfig {
            rho: self.ratio,
            bits_high: self.bits_high,
            group_size: self.group_size,
            opt_steps: self.opt_steps,
            learning_rate: self.lr,
            strategy: Strategy::parse(&self.strategy, self.h)?,
            seed: self.seed,
            ..QuantConfig::default()
        };
        cfg.validate()?;
        Ok(cfg)
    }
}

#[derive(Debug, Args)]
struct QuantizeArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[command(flatten)]
    config: ConfigArgs,
    /// Output `.lqz` file.
    #[arg(long)]
    output: PathBuf,
    /// Also write the JSON report to this path.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReconstructArgs {
    /// Input `.lqz` file.
    #[arg(long)]
    input: PathBuf,
    /// Output `.qla` container.
    #[arg(long)]
    output: PathBuf,
    /// Write dense `<layer>.delta` tensors instead of factors.
    #[arg(long)]
    dense: bool,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DtypeArg {
    F16,
    F32,
}

impl From<DtypeArg> for Dtype {
    fn from(d: DtypeArg) -> Self {
        match d {
            DtypeArg::F16 => Dtype::F16,
            DtypeArg::F32 => Dtype::F32,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Format {
    Csv,
    Json,
}

#[derive(Debug, Args)]
struct ReportArgs {
    /// Input `.lqz` file.
    #[arg(long)]
    input: PathBuf,
    /// Source `.qla` container for reconstruction errors.
    #[arg(long)]
    source: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t = Format::Csv)]
    format: Format,
}

#[derive(Debug, Args)]
struct CompareArgs {
    #[command(flatten)]
    source: SourceArgs,
    #[arg(long, default_value_t = 2)]
    bits_high: u32,
    #[arg(long, default_value_t = crate::pipeline::DEFAULT_GROUP_SIZE)]
    group_size: usize,
    #[arg(long, default_value_t = crate::ste::DEFAULT_STEPS)]
    opt_steps: usize,
    #[arg(long, default_value_t = crate::ste::DEFAULT_LEARNING_RATE)]
    lr: f64,
    /// Comma-separated ratios; default 0.10, 0.15, …, 0.95.
    #[arg(long, value_delimiter = ',')]
    ratios: Option<Vec<f64>>,
    /// Comma-separated static ranks; default 1..=12 (capped at the smallest rank).
    #[arg(long, value_delimiter = ',')]
    static_h: Option<Vec<usize>>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CSV output path; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ProjectArgs {
    /// Quantized adapter whose size is projected.
    #[arg(long)]
    input: PathBuf,
    /// Resident bytes of the base model.
    #[arg(long, default_value_t = 0)]
    base_bytes: u64,
    /// Fixed per-adapter overhead in bytes.
    #[arg(long, default_value_t = 0)]
    header_bytes: u64,
    #[arg(long, default_value_t = 1000)]
    max_adapters: u64,
    #[arg(long, default_value_t = 100)]
    step: u64,
    /// CSV output path; stdout when absent.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct SynthesizeArgs {
    /// Shape as `m,n,r,layers,seed`.
    #[arg(long, value_name = "M,N,R,LAYERS,SEED")]
    shape: String,
    #[arg(long, default_value = "0.8")]
    decay: String,
    #[arg(long, default_value_t = 0.5)]
    mixing: f64,
    #[arg(long, value_enum, default_value_t = DtypeArg::F32)]
    dtype: DtypeArg,
    #[arg(long)]
    output: PathBuf,
}

/// Parses `m,n,r,layers,seed`.
pub fn parse_synth_spec(shape: &str, decay: &str, mixing: f64) -> Result<SynthSpec> {
    let parts: Vec<&str> = shape.split(',').map(str::trim).collect();
    let bad = || Error::InvalidConfig(format!("synthetic shape {shape:?} is not m,n,r,layers,seed"));
    if parts.len() != 5 {
        return Err(bad());
    }
    let dims = parts[..4]
        .iter()
        .map(|p| p.parse::<usize>().map_err(|_| bad()))
        .collect::<Result<Vec<_>>>()?;
    let seed = parts[4].parse::<u64>().map_err(|_| bad())?;
    let decay = match decay {
        "none" => None,
        d => Some(
            d.parse::<f64>()
                .map_err(|_| Error::InvalidConfig(format!("decay {d:?} is not a number")))?,
        ),
    };
    let spec = SynthSpec::new(dims[0], dims[1], dims[2], dims[3], seed)
        .with_decay(decay)
        .with_mixing(mixing);
    spec.validate()?;
    Ok(spec)
}

fn load_source(s: &SourceArgs) -> Result<AdapterContainer> {
    match (&s.input, &s.synthesize) {
        (Some(path), _) => read_container(path),
        (None, Some(shape)) => synthesize_container(&parse_synth_spec(shape, &s.decay, s.mixing)?),
        (None, None) => Err(Error::InvalidConfig("one of --input or --synthesize is required".into())),
    }
}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => std::fs::write(p, text).map_err(|e| Error::io(p, e)),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())
                .and_then(|_| out.flush())
                .map_err(|e| Error::io("<stdout>", e))
        }
    }
}

fn to_json<T: Serialize>(v: &T) -> String {
    let mut s = serde_json::to_string_pretty(v).expect("report serializes");
    s.push('\n');
    s
}

/// Echo of one run, printed on stdout next to every written file.
#[derive(Serialize)]
struct RunManifest<'a> {
    command: &'static str,
    tool_version: &'static str,
    format_version: u32,
    input: Option<&'a Path>,
    synthesize: Option<&'a str>,
    output: &'a Path,
    output_bytes: usize,
    config: &'a str,
    seed: u64,
    duration_seconds: f64,
    report: &'a ErrorReport,
}

fn quantize(args: &QuantizeArgs) -> Result<()> {
    let started = Instant::now();
    let cfg = args.config.to_config()?;
    let container = load_source(&args.source)?;
    log::info!("quantizing {} layers with {}", container.len(), cfg.label());
    let adapters = quantize_container(&container, &cfg)?;
    let report = error_report(&container, &cfg, &adapters)?;
    let mut file = LqzFile::new(cfg, adapters);
    file.metadata = container.metadata.clone();
    let bytes = encode_lqz(&file)?;
    std::fs::write(&args.output, &bytes).map_err(|e| Error::io(&args.output, e))?;
    let manifest = to_json(&RunManifest {
        command: "quantize",
        tool_version: env!("CARGO_PKG_VERSION"),
        format_version: crate::lqz::FORMAT_VERSION,
        input: args.source.input.as_deref(),
        synthesize: args.source.synthesize.as_deref(),
        output: &args.output,
        output_bytes: bytes.len(),
        config: &report.label,
        seed: cfg.seed,
        duration_seconds: started.elapsed().as_secs_f64(),
        report: &report,
    });
    if let Some(p) = &args.report {
        write_output(Some(p), &to_json(&report))?;
    }
    write_output(None, &manifest)
}

fn reconstruct(args: &ReconstructArgs) -> Result<()> {
    let file = read_lqz(&args.input)?;
    let mut owned: Vec<(String, Matrix)> = Vec::new();
    for q in &file.adapters {
        let rec = reconstruct_adapter(q)?;
        if args.dense {
            owned.push((format!("{}.delta", q.layer_name), rec.dense()));
        } else {
            let (b, a) = match rec.concatenated()? {
                Some(ba) => ba,
                None => {
                    log::warn!("layer {:?} stores no components; writing a zero rank-1 pair", q.layer_name);
                    (Matrix::zeros(q.m, 1), Matrix::zeros(1, q.n))
                }
            };
            owned.push((format!("{}{B_SUFFIX}", q.layer_name), b));
            owned.push((format!("{}{A_SUFFIX}", q.layer_name), a));
        }
    }
    let tensors = owned.iter().map(|(k, v)| (k.clone(), v)).collect();
    let bytes = encode_tensors(&tensors, &file.metadata, args.dtype.into())?;
    std::fs::write(&args.output, bytes).map_err(|e| Error::io(&args.output, e))
}

#[derive(Serialize)]
struct FullReport<'a> {
    config: &'a QuantConfig,
    bits: &'a accounting::BitReport,
    avg_bits: f64,
    errors: Option<ErrorReport>,
}

fn report(args: &ReportArgs) -> Result<()> {
    let file = read_lqz(&args.input)?;
    let bits = accounting::avg_bits(&file.adapters);
    let errors = match &args.source {
        Some(path) => Some(error_report(&read_container(path)?, &file.config, &file.adapters)?),
        None => None,
    };
    let text = match args.format {
        Format::Csv => {
            let mut s = bits.to_csv()?;
            if let Some(e) = &errors {
                s.push('\n');
                s.push_str(&layer_error_csv(e)?);
            }
            s
        }
        Format::Json => to_json(&FullReport {
            config: &file.config,
            bits: &bits,
            avg_bits: bits.avg_bits(),
            errors,
        }),
    };
    write_output(None, &text)
}

fn layer_error_csv(report: &ErrorReport) -> Result<String> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["layer", "h", "rank", "abs_error", "rel_error", "avg_bits"])
        .map_err(crate::pipeline::csv_err)?;
    for l in &report.layers {
        w.write_record([
            l.layer.clone(),
            l.h.to_string(),
            l.rank.to_string(),
            l.abs_error.to_string(),
            l.rel_error.map(|v| v.to_string()).unwrap_or_default(),
            l.avg_bits.to_string(),
        ])
        .map_err(crate::pipeline::csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| Error::MalformedHeader(e.to_string()))?;
    Ok(String::from_utf8(bytes).expect("csv is UTF-8"))
}

/// Ratios `0.10, 0.15, …, 0.95`.
pub fn default_ratio_grid() -> Vec<f64> {
    (2..=19).map(|k| k as f64 * 0.05).map(|r| (r * 100.0).round() / 100.0).collect()
}

fn compare(args: &CompareArgs) -> Result<()> {
    let container = load_source(&args.source)?;
    let base = QuantConfig {
        bits_high: args.bits_high,
        group_size: args.group_size,
        opt_steps: args.opt_steps,
        learning_rate: args.lr,
        seed: args.seed,
        ..QuantConfig::default()
    };
    base.validate()?;
    let min_rank = container.adapters().iter().map(|a| a.rank()).min().unwrap_or(0);
    let ratios = args.ratios.clone().unwrap_or_else(default_ratio_grid);
    let statics = args
        .static_h
        .clone()
        .unwrap_or_else(|| (1..=12).filter(|&h| h <= min_rank).collect());
    let mut configs: Vec<QuantConfig> = ratios.iter().map(|&rho| QuantConfig { rho, ..base }).collect();
    for &h in &statics {
        configs.extend(
            [Strategy::SvdStatic { h }, Strategy::NormSplit { h }, Strategy::RandomSplit { h }].map(|s| base.with_strategy(s)),
        );
    }
    configs.extend(
        [
            Strategy::BaselineRtn { bits: 1 },
            Strategy::BaselineRtn { bits: 2 },
            Strategy::BaselineBin,
        ]
        .map(|s| base.with_strategy(s)),
    );
    for c in &configs {
        c.validate()?;
    }
    log::info!("comparing {} configurations over {} layers", configs.len(), container.len());
    let reports = compare_methods(&container, &configs)?;
    write_output(args.output.as_deref(), &comparison_csv(&reports)?)
}

fn project(args: &ProjectArgs) -> Result<()> {
    if args.step == 0 {
        return Err(Error::InvalidConfig("--step must be at least 1".into()));
    }
    let file = read_lqz(&args.input)?;
    let bits = accounting::avg_bits(&file.adapters);
    let fp16_bits = bits.weights() * 16;
    let mut counts: Vec<u64> = (0..=args.max_adapters).step_by(args.step as usize).collect();
    if counts.last() != Some(&args.max_adapters) {
        counts.push(args.max_adapters);
    }
    let rows = projection_curve(args.base_bytes, fp16_bits, bits.total_bits(), args.header_bytes, counts);
    write_output(args.output.as_deref(), &projection_csv(&rows)?)
}

fn synthesize(args: &SynthesizeArgs) -> Result<()> {
    let spec = parse_synth_spec(&args.shape, &args.decay, args.mixing)?;
    write_container(&synthesize_container(&spec)?, &args.output, args.dtype.into())
}

fn dispatch(cli: &Cli) -> Result<()> {
    match &cli.command {
        Command::Quantize(a) => quantize(a),
        Command::Reconstruct(a) => reconstruct(a),
        Command::Report(a) => report(a),
        Command::Compare(a) => compare(a),
        Command::Project(a) => project(a),
        Command::Synthesize(a) => synthesize(a),
    }
}

/// Exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    if e.is_config_error() {
        2
    } else {
        1
    }
}

/// Environment variable overriding the worker thread count.
pub const THREADS_ENV: &str = "LORA_MPQ_THREADS";

fn configure_threads() {
    let Ok(value) = std::env::var(THREADS_ENV) else {
        return;
    };
    match value.parse::<usize>() {
        Ok(n) if n > 0 => {
            if rayon::ThreadPoolBuilder::new().num_threads(n).build_global().is_err() {
                log::debug!("thread pool already initialized");
            }
        }
        _ => log::warn!("ignoring {THREADS_ENV}={value:?}"),
    }
}

/// Runs the CLI on `args` (program name first) and returns the exit code.
pub fn run<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let _ = env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn"))
        .target(env_logger::Target::Stderr)
        .try_init();
    configure_threads();
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return e.exit_code();
        }
    };
    match dispatch(&cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ratio_grid() {
        let g = default_ratio_grid();
        assert_eq!(g.len(), 18);
        assert_eq!(g[0], 0.1);
        assert_eq!(g[17], 0.95);
    }

    #[test]
    fn synth_spec_parsing() {
        let s = parse_synth_spec("64, 32, 4, 2, 7", "none", 0.0).unwrap();
        assert_eq!((s.m, s.n, s.rank, s.layers, s.seed, s.decay), (64, 32, 4, 2, 7, None));
        assert!(parse_synth_spec("64,32,4", "0.8", 0.5).is_err());
        assert!(parse_synth_spec("4,4,8,1,0", "0.8", 0.5).is_err());
    }

    #[test]
    fn usage_errors_exit_2() {
        assert_eq!(run(["lora-mpq", "quantize"]), 2);
        assert_eq!(run(["lora-mpq", "frobnicate"]), 2);
    }
}
