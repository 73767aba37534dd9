//! `tokpool` command-line front end.
//!
//! Exit codes: 0 success, 1 usage error, 2 data or format error,
//! 3 verification failure. Results go to standard output or `--out`, errors
//! to standard error.

use std::ffi::OsString;
use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use clap::error::ErrorKind;
use clap::{Args, Parser, Subcommand};
use tokpool::costmodel::{breakdown_fractions, model_flops, ClusteringCost, ClusteringOverhead};
use tokpool::filterlab::verify_equivalence;
use tokpool::io::{read_attention, read_block_weights, read_config, read_matrix, write_matrix};
use tokpool::pipeline::{run_forward, ForwardOptions};
use tokpool::pooling::{token_pool, InitPolicy, PoolMethod, PoolSpec, DEFAULT_MAX_ITERS};
use tokpool::scoring::significance;
use tokpool::transformer::synth_weights;
use tokpool::{AttentionMode, Error, Matrix, Result, TokenSet};

mod report;

pub use report::Format;

pub const EXIT_OK: i32 = 0;
pub const EXIT_USAGE: i32 = 1;
pub const EXIT_DATA: i32 = 2;
pub const EXIT_VERIFY: i32 = 3;

/// Environment variable capping internal parallelism.
pub const THREADS_ENV: &str = "TOKPOOL_THREADS";

#[derive(Debug, Parser)]
#[command(name = "tokpool", version, about = "Token pooling, flop accounting and attention/filter checks")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Flop breakdown of a model config, with optional clustering overhead.
    Cost(CostArgs),
    /// Pool a token matrix down to K tokens.
    Pool(PoolArgs),
    /// Significance scores from stacked attention maps.
    Score(ScoreArgs),
    /// Synthetic forward pass with pooling after every block.
    Forward(ForwardArgs),
    /// Check that unit-norm softmax attention equals Gaussian filtering.
    VerifyFilter(VerifyArgs),
}

#[derive(Debug, Args)]
struct CostArgs {
    #[arg(long)]
    config: PathBuf,
    /// Add pooling overhead for this clustering method.
    #[arg(long, value_parser = parse_from_str::<ClusteringCost>)]
    clustering: Option<ClusteringCost>,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS as u64)]
    iters: u64,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Debug, Args)]
struct PoolArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    k: usize,
    #[arg(long, value_parser = parse_from_str::<PoolMethod>)]
    method: PoolMethod,
    /// Per-token weights, an N x 1 or 1 x N matrix.
    #[arg(long, conflicts_with = "scores_from")]
    weights: Option<PathBuf>,
    /// Stacked (H*N) x N attention maps; their significance scores become the weights.
    #[arg(long, requires = "heads")]
    scores_from: Option<PathBuf>,
    #[arg(long, requires = "scores_from")]
    heads: Option<usize>,
    #[arg(long, value_parser = parse_from_str::<InitPolicy>, default_value = "topk")]
    init: InitPolicy,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    iters: usize,
    #[arg(long)]
    no_protect_first: bool,
    /// Patch grid `HxW` for grid pooling.
    #[arg(long, value_parser = parse_grid)]
    grid: Option<(usize, usize)>,
    #[arg(long)]
    out: PathBuf,
    /// Write the clustering result as JSON.
    #[arg(long)]
    assignments: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Debug, Args)]
struct ScoreArgs {
    #[arg(long)]
    attention: PathBuf,
    #[arg(long)]
    heads: usize,
    #[arg(long)]
    out: PathBuf,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Debug, Args)]
struct ForwardArgs {
    #[arg(long)]
    config: PathBuf,
    /// Seed for synthetic weights and for pooling.
    #[arg(long, conflicts_with = "weights_dir")]
    seed: Option<u64>,
    /// Directory of `block{l}_{wq,wk,wv,wo,mlp1,mlp2}.tpm` files.
    #[arg(long)]
    weights_dir: Option<PathBuf>,
    #[arg(long)]
    input: PathBuf,
    #[arg(long, value_parser = parse_from_str::<PoolMethod>, default_value = "kmedoids")]
    pool_method: PoolMethod,
    #[arg(long, value_parser = parse_from_str::<InitPolicy>, default_value = "topk")]
    init: InitPolicy,
    #[arg(long, default_value_t = DEFAULT_MAX_ITERS)]
    iters: usize,
    /// Overrides the attention mode of the config.
    #[arg(long, value_parser = parse_from_str::<AttentionMode>)]
    mode: Option<AttentionMode>,
    #[arg(long)]
    out: PathBuf,
    /// Per-layer trace; CSV when the path ends in `.csv`, JSON otherwise.
    #[arg(long)]
    trace: Option<PathBuf>,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

#[derive(Debug, Args)]
struct VerifyArgs {
    #[arg(long)]
    n: usize,
    #[arg(long)]
    m: usize,
    #[arg(long)]
    alpha: f64,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 1e-9)]
    tol: f64,
    #[arg(long, value_enum, default_value_t)]
    format: Format,
}

fn parse_from_str<T: std::str::FromStr<Err = Error>>(s: &str) -> std::result::Result<T, String> {
    s.parse().map_err(|e: Error| match e {
        Error::Usage(m) | Error::Data(m) => m,
    })
}

fn parse_grid(s: &str) -> std::result::Result<(usize, usize), String> {
    let bad = || format!("expected HxW, got `{s}`");
    let (h, w) = s.split_once(['x', 'X']).ok_or_else(bad)?;
    let h: usize = h.trim().parse().map_err(|_| bad())?;
    let w: usize = w.trim().parse().map_err(|_| bad())?;
    if h == 0 || w == 0 {
        return Err(bad());
    }
    Ok((h, w))
}

/// Validates the thread cap. The reference path is single-threaded, so any
/// positive value is accepted and honoured trivially.
pub fn thread_cap(value: Option<&str>) -> Result<Option<usize>> {
    match value {
        None => Ok(None),
        Some(v) => match v.trim().parse::<usize>() {
            Ok(n) if n > 0 => Ok(Some(n)),
            _ => Err(Error::usage(format!("{THREADS_ENV} must be a positive integer, got `{v}`"))),
        },
    }
}

enum Failure {
    Lib(Error),
    /// Report for standard output, then the reason.
    Verification(String, String),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

type CmdResult = std::result::Result<String, Failure>;

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::data(format!("{}: {e}", path.display())))
}

fn weight_vector(m: &Matrix, n: usize) -> Result<Vec<f64>> {
    let ok = (m.rows() == n && m.cols() == 1) || (m.rows() == 1 && m.cols() == n);
    if !ok {
        return Err(Error::data(format!(
            "weights are {}x{}, expected {n}x1 or 1x{n}",
            m.rows(),
            m.cols()
        )));
    }
    m.check_finite()?;
    Ok(m.data().to_vec())
}

fn cost(a: &CostArgs) -> CmdResult {
    let config = read_config(&a.config)?;
    if a.clustering.is_some() && a.iters == 0 {
        return Err(Error::usage("--iters must be at least 1").into());
    }
    let overhead = a.clustering.map(|method| ClusteringOverhead {
        method,
        max_iters: a.iters,
    });
    let report = model_flops(&config, overhead)?;
    let fractions = breakdown_fractions(&report)?;
    Ok(report::cost(&report, &fractions, a.format))
}

fn pool(a: &PoolArgs) -> CmdResult {
    let features = read_matrix(&a.input)?;
    let n = features.rows();
    let mut tokens = TokenSet::new(features)?;
    if let Some(path) = &a.weights {
        tokens = tokens.with_weights(weight_vector(&read_matrix(path)?, n)?)?;
    }
    if let (Some(path), Some(heads)) = (&a.scores_from, a.heads) {
        let maps = read_attention(path, heads)?;
        if maps.tokens() != n {
            return Err(Error::data(format!(
                "attention maps cover {} tokens, input has {n}",
                maps.tokens()
            ))
            .into());
        }
        tokens = tokens.with_weights(significance(&maps)?.values)?;
    }
    if let Some((h, w)) = a.grid {
        tokens = tokens.with_grid(h, w)?;
    }
    let spec = PoolSpec {
        method: a.method,
        k: a.k,
        max_iters: a.iters,
        init: a.init,
        seed: a.seed,
        protect_first: !a.no_protect_first,
        emit_counts: false,
    };
    let (pooled, result) = token_pool(&tokens, &spec)?;
    write_matrix(&a.out, &pooled.features)?;
    if let Some(path) = &a.assignments {
        let mut text = serde_json::to_string_pretty(&result)
            .map_err(|e| Error::data(format!("cannot serialize clustering result: {e}")))?;
        text.push('\n');
        write_text(path, &text)?;
    }
    Ok(report::summary(
        &[
            ("method", a.method.name().to_string()),
            ("tokens_in", n.to_string()),
            ("tokens_out", pooled.len().to_string()),
            ("iterations", result.iterations.to_string()),
            ("loss", result.loss.to_string()),
        ],
        a.format,
    ))
}

fn score(a: &ScoreArgs) -> CmdResult {
    let maps = read_attention(&a.attention, a.heads)?;
    let s = significance(&maps)?;
    let column = Matrix::new(s.len(), 1, s.values.clone())?;
    write_matrix(&a.out, &column)?;
    Ok(report::summary(
        &[
            ("tokens", s.len().to_string()),
            ("heads", a.heads.to_string()),
            ("total", s.total().to_string()),
        ],
        a.format,
    ))
}

fn forward(a: &ForwardArgs) -> CmdResult {
    let config = read_config(&a.config)?;
    let features = read_matrix(&a.input)?;
    if features.shape() != (config.tokens, config.dim) {
        return Err(Error::data(format!(
            "input is {}x{}, config expects {}x{}",
            features.rows(),
            features.cols(),
            config.tokens,
            config.dim
        ))
        .into());
    }
    let seed = a.seed.unwrap_or(0);
    let weights = match &a.weights_dir {
        Some(dir) => read_block_weights(dir, &config)?,
        None => synth_weights(&config, seed)?,
    };
    let opts = ForwardOptions {
        mode: a.mode.or(config.mode).unwrap_or(AttentionMode::Standard),
        method: a.pool_method,
        init: a.init,
        max_iters: a.iters,
        seed,
        ..ForwardOptions::default()
    };
    let out = run_forward(&config, &weights, TokenSet::new(features)?, &opts)?;
    write_matrix(&a.out, &out.tokens.features)?;
    if let Some(path) = &a.trace {
        let is_csv = path.extension().is_some_and(|e| e.eq_ignore_ascii_case("csv"));
        let format = if is_csv { Format::Csv } else { Format::Json };
        write_text(path, &report::trace(&out.trace, format))?;
    }
    Ok(report::trace(&out.trace, a.format))
}

fn verify_filter(a: &VerifyArgs) -> CmdResult {
    if !(a.alpha.is_finite() && a.alpha > 0.0) {
        return Err(Error::usage(format!("--alpha must be positive, got {}", a.alpha)).into());
    }
    let r = verify_equivalence(a.n, a.m, a.alpha, a.seed, a.tol)?;
    let text = report::verify(&r, a.format);
    if r.pass {
        Ok(text)
    } else {
        Err(Failure::Verification(
            text,
            format!("max deviation {:e} exceeds tolerance {:e}", r.max_abs_dev, r.tol),
        ))
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run<I, T>(args: I, out: &mut dyn Write, err: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let text = e.render().to_string();
            return match e.kind() {
                ErrorKind::DisplayHelp | ErrorKind::DisplayVersion => {
                    let _ = out.write_all(text.as_bytes());
                    EXIT_OK
                }
                _ => {
                    let _ = err.write_all(text.as_bytes());
                    EXIT_USAGE
                }
            };
        }
    };
    if let Err(e) = thread_cap(std::env::var(THREADS_ENV).ok().as_deref()) {
        let _ = writeln!(err, "tokpool: {e}");
        return EXIT_USAGE;
    }
    let result = match &cli.command {
        Command::Cost(a) => cost(a),
        Command::Pool(a) => pool(a),
        Command::Score(a) => score(a),
        Command::Forward(a) => forward(a),
        Command::VerifyFilter(a) => verify_filter(a),
    };
    match result {
        Ok(text) => {
            if out.write_all(text.as_bytes()).and_then(|_| out.flush()).is_err() {
                return EXIT_DATA;
            }
            EXIT_OK
        }
        Err(Failure::Lib(e)) => {
            let _ = writeln!(err, "tokpool: {e}");
            if e.is_usage() {
                EXIT_USAGE
            } else {
                EXIT_DATA
            }
        }
        Err(Failure::Verification(text, msg)) => {
            let _ = out.write_all(text.as_bytes());
            let _ = writeln!(err, "tokpool: verification failed: {msg}");
            EXIT_VERIFY
        }
    }
}
