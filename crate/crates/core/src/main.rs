use std::io::{self, BufRead, BufReader, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use beta_core::blackbox::{accuracy, serve_stream, train_source_model, BlackBoxHandle, Server, SourceConfig};
use beta_core::config::BetaConfig;
use beta_core::data::{gen_gaussian_shift, load_csv, two_moons_task, write_csv, DomainTag, LabeledVectorSet};
use beta_core::diagnostics::{check_bound, export_metrics, ideal_probe_predictions, write_bound_report, DEFAULT_ALPHAS};
use beta_core::division::{divide, fit_gmm2, per_sample_losses, NetRole};
use beta_core::nn::MlpClassifier;
use beta_core::trainer::{run_method, Method};
use beta_core::{Error, Result};

/// Stdout writes that tolerate a closed pipe.
macro_rules! say {
    ($($t:tt)*) => {{
        let _ = writeln!(io::stdout().lock(), $($t)*);
    }};
}

const API_ENV: &str = "BETA_API_ADDR";

#[derive(Debug, Parser)]
#[command(name = "beta", version, about = "Black-box domain adaptation on vector data")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Generate a source/target pair as CSV files.
    GenData(GenDataArgs),
    /// Train the source model and write its checkpoint.
    TrainSource(TrainSourceArgs),
    /// Serve a checkpoint as a hard-label black box.
    Serve(ServeArgs),
    /// Adapt to an unlabeled target through a black box.
    Adapt(AdaptArgs),
    /// Print the accuracy of a checkpoint on a labeled CSV.
    Eval(EvalArgs),
    /// Evaluate the subdomain error bound for a trained checkpoint.
    CheckBound(CheckBoundArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum DataKind {
    TwoMoons,
    Blobs,
}

#[derive(Debug, Args)]
struct GenDataArgs {
    #[arg(long, value_enum)]
    kind: DataKind,
    /// Output directory; receives source.csv and target.csv.
    #[arg(long)]
    out: PathBuf,
    /// Samples per domain.
    #[arg(long, default_value_t = 400)]
    n: usize,
    /// Two-moons noise sigma.
    #[arg(long, default_value_t = 0.1)]
    noise: f64,
    /// Two-moons target rotation in degrees.
    #[arg(long, default_value_t = 30.0)]
    rotation: f64,
    /// Blobs feature dimension.
    #[arg(long, default_value_t = 4)]
    dim: usize,
    /// Blobs class count.
    #[arg(long, default_value_t = 4)]
    classes: usize,
    /// Blobs target mean shift.
    #[arg(long, default_value_t = 3.5)]
    shift: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct TrainSourceArgs {
    /// Labeled source CSV.
    #[arg(long)]
    data: PathBuf,
    /// Checkpoint to write.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "label")]
    label_column: String,
    /// Class count; defaults to the largest label + 1.
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long, value_delimiter = ',', default_value = "64,64")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 60)]
    epochs: usize,
    #[arg(long, default_value_t = 0.05)]
    lr: f64,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Debug, Args)]
struct ServeArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    /// TCP address to listen on, e.g. 127.0.0.1:9000.
    #[arg(long, conflicts_with = "stdio", required_unless_present = "stdio")]
    listen: Option<String>,
    /// Answer requests on stdin/stdout instead of a socket.
    #[arg(long)]
    stdio: bool,
}

#[derive(Debug, Args)]
struct AdaptArgs {
    /// JSON configuration; missing keys take defaults.
    #[arg(long)]
    config: PathBuf,
    /// Target CSV. A `label` column, if present, is used for diagnostics only.
    #[arg(long)]
    target: PathBuf,
    /// Black box: a host:port address or a checkpoint path. Falls back to BETA_API_ADDR.
    #[arg(long)]
    api: Option<String>,
    /// Output directory for metrics.csv, summary.json and checkpoints.
    #[arg(long, default_value = "beta_out")]
    out: PathBuf,
    /// Overrides the config seed.
    #[arg(long)]
    seed: Option<u64>,
    /// Run the distillation-only baseline instead of the full procedure.
    #[arg(long)]
    kd_only: bool,
}

#[derive(Debug, Args)]
struct EvalArgs {
    #[arg(long)]
    model: PathBuf,
    /// Labeled CSV.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, default_value = "label")]
    label_column: String,
}

#[derive(Debug, Args)]
struct CheckBoundArgs {
    /// Adapted checkpoint taking raw features.
    #[arg(long)]
    model: PathBuf,
    /// Target CSV with a ground-truth label column.
    #[arg(long)]
    target: PathBuf,
    /// Black box: a host:port address or a checkpoint path. Falls back to BETA_API_ADDR.
    #[arg(long)]
    api: Option<String>,
    #[arg(long, default_value = "label")]
    label_column: String,
    #[arg(long, default_value_t = 0.8)]
    tau: f64,
    #[arg(long, value_delimiter = ',')]
    alphas: Option<Vec<f64>>,
    /// Where to write the per-alpha report.
    #[arg(long, default_value = "bound_report.json")]
    out: PathBuf,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            let usage = e.use_stderr();
            let _ = e.print();
            return if usage { ExitCode::from(1) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli.command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(Error::Usage(msg)) => {
            eprintln!("error: {msg}");
            eprintln!("run `beta help` for usage");
            ExitCode::from(1)
        }
        Err(e) => {
            let msg = e.to_string();
            eprintln!("error: {msg}");
            let mut source = std::error::Error::source(&e);
            while let Some(s) = source {
                let cause = s.to_string();
                if !msg.contains(&cause) {
                    eprintln!("  caused by: {cause}");
                }
                source = s.source();
            }
            ExitCode::from(2)
        }
    }
}

fn run(command: Command) -> Result<()> {
    match command {
        Command::GenData(a) => gen_data(a),
        Command::TrainSource(a) => train_source(a),
        Command::Serve(a) => serve(a),
        Command::Adapt(a) => adapt(a),
        Command::Eval(a) => eval(a),
        Command::CheckBound(a) => bound(a),
    }
}

fn gen_data(a: GenDataArgs) -> Result<()> {
    let (source, target) = match a.kind {
        DataKind::TwoMoons => two_moons_task(a.n, a.noise, a.rotation, a.seed)?,
        DataKind::Blobs => gen_gaussian_shift(a.n, a.dim, a.classes, a.shift, a.seed)?,
    };
    std::fs::create_dir_all(&a.out).map_err(|e| io_err(&a.out, e))?;
    write_csv(&source, a.out.join("source.csv"))?;
    write_csv(&target, a.out.join("target.csv"))?;
    say!("wrote {} source and {} target rows to {}", source.len(), target.len(), a.out.display());
    Ok(())
}

fn train_source(a: TrainSourceArgs) -> Result<()> {
    let source = load_csv(&a.data, Some(&a.label_column), DomainTag::Source)?;
    let k = match a.classes {
        Some(k) => k,
        None => source.label_classes().ok_or_else(|| Error::Usage("source CSV has no labels".into()))?,
    };
    let cfg = SourceConfig {
        hidden: a.hidden,
        epochs: a.epochs,
        lr: a.lr,
        seed: a.seed,
        ..SourceConfig::default()
    };
    let model = train_source_model(&source, k, &cfg)?;
    let acc = accuracy(&model.predict(source.features())?, source.source_labels().unwrap_or_default());
    model.save(&a.out)?;
    say!("source_acc={acc}");
    Ok(())
}

fn serve(a: ServeArgs) -> Result<()> {
    let model = MlpClassifier::load(&a.checkpoint)?;
    if a.stdio {
        let stdin = io::stdin();
        return serve_stream(&model, stdin.lock(), io::stdout().lock()).map_err(|e| io_err("<stdio>", e));
    }
    let addr = a.listen.expect("clap enforces --listen without --stdio");
    let server = Server::bind(model, addr.as_str())?;
    say!("listening on {}", server.local_addr());
    let _ = io::stdout().flush();
    server.wait();
    Ok(())
}

/// `api` is a checkpoint path when such a file exists, otherwise an address.
fn open_black_box(api: Option<String>) -> Result<BlackBoxHandle> {
    let api = match api.or_else(|| std::env::var(API_ENV).ok()) {
        Some(s) if !s.trim().is_empty() => s,
        _ => return Err(Error::Usage(format!("no black box given: pass --api or set {API_ENV}"))),
    };
    if Path::new(&api).is_file() {
        Ok(BlackBoxHandle::in_process(MlpClassifier::load(&api)?))
    } else {
        BlackBoxHandle::connect(api.as_str())
    }
}

fn csv_has_column(path: &Path, column: &str) -> Result<bool> {
    let file = std::fs::File::open(path).map_err(|e| io_err(path, e))?;
    let mut header = String::new();
    BufReader::new(file).read_line(&mut header).map_err(|e| io_err(path, e))?;
    Ok(header.trim().split(',').any(|h| h.trim() == column))
}

fn load_target(path: &Path, label_column: &str) -> Result<LabeledVectorSet> {
    let label = csv_has_column(path, label_column)?.then_some(label_column);
    load_csv(path, label, DomainTag::Target)
}

fn adapt(a: AdaptArgs) -> Result<()> {
    let mut cfg = BetaConfig::load(&a.config)?;
    if let Some(seed) = a.seed {
        cfg.seed = seed;
    }
    let target = load_target(&a.target, "label")?;
    let mut black_box = open_black_box(a.api)?;
    let method = if a.kd_only { Method::KdOnly } else { Method::Beta };
    let (net_a, net_b, report) = run_method(method, &cfg, &mut black_box, &target)?;
    export_metrics(&report, &a.out)?;
    net_a.save(a.out.join("net_a.ckpt"))?;
    net_b.save(a.out.join("net_b.ckpt"))?;
    match report.headline_accuracy() {
        Some(acc) => say!("acc={acc}"),
        None => say!("adapted; no target labels for accuracy"),
    }
    say!("wrote {}", a.out.display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let model = MlpClassifier::load(&a.model)?;
    let data = load_csv(&a.data, Some(&a.label_column), DomainTag::Target)?;
    let truth = data
        .ground_truth_for_diagnostics()
        .ok_or_else(|| Error::Usage(format!("{} has no labels", a.data.display())))?;
    say!("acc={}", accuracy(&model.predict(data.features())?, truth));
    Ok(())
}

fn bound(a: CheckBoundArgs) -> Result<()> {
    let model = MlpClassifier::load(&a.model)?;
    let target = load_csv(&a.target, Some(&a.label_column), DomainTag::Target)?;
    let truth = target
        .ground_truth_for_diagnostics()
        .ok_or_else(|| Error::Usage("check-bound needs ground-truth labels".into()))?;
    let mut black_box = open_black_box(a.api)?;
    let x = target.features();
    let labels = black_box.predict_hard(x)?;
    let k = black_box.num_classes();
    let losses = per_sample_losses(&model, x, &labels)?;
    let gmm = fit_gmm2(&losses, 100, 1e-8)?;
    let split = divide(&gmm.posteriors(&losses), &labels, k, a.tau, NetRole::A)?;
    let h_star = ideal_probe_predictions(x, truth, k, &[16], a.seed)?;
    let alphas = a.alphas.unwrap_or_else(|| DEFAULT_ALPHAS.to_vec());
    let estimates = check_bound(&model.predict(x)?, h_star.as_deref(), x, &split, truth, &alphas, a.seed)?;
    write_bound_report(&a.out, &estimates)?;
    for e in &estimates {
        say!(
            "alpha={} lhs={:.6} rhs={:.6} holds={} corollary_holds={} valid={}",
            e.alpha, e.lhs, e.rhs, e.holds, e.corollary_holds, e.valid
        );
    }
    Ok(())
}

fn io_err(path: impl AsRef<Path>, source: io::Error) -> Error {
    Error::Io {
        path: path.as_ref().to_path_buf(),
        source,
    }
}
