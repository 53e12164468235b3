//! Command-line harness: config assembly, report emission, ablation and sweep grids.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use thiserror::Error;

use trip_core::config::{Ablation, DataSource, ExperimentConfig, Preset};
use trip_core::data::{generate, write_fixture, DomainSpec, GeneratorConfig};
use trip_core::federation::{load_dataset, run_on};
use trip_core::report::RunReport;
use trip_core::tensor::KeyStrategy;

#[derive(Debug, Error)]
pub enum CliError {
    #[error(transparent)]
    Core(#[from] trip_core::Error),
    #[error("{0}")]
    Usage(String),
    #[error("I/O error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl CliError {
    /// 2 for configuration and usage problems, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if is_config_error(e) => 2,
            _ => 1,
        }
    }
}

fn is_config_error(e: &trip_core::Error) -> bool {
    use trip_core::Error as E;
    matches!(e, E::Config { .. } | E::ConfigList(_) | E::Format { .. })
        || matches!(e, E::Io { source, .. } if source.kind() == std::io::ErrorKind::NotFound)
}

pub type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |source| CliError::Io {
        path: path.to_path_buf(),
        source,
    }
}

#[derive(Debug, Parser)]
#[command(name = "trip-sim", version, about = "Federated domain-generalization simulator with a parameter-free prompt-expert router")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a dataset and export it as a JSON-lines fixture.
    Gen(GenArgs),
    /// Run one federated experiment.
    Run(RunArgs),
    /// Run the five-row ablation lattice.
    Ablate(GridArgs),
    /// Sweep one hyperparameter over a grid.
    Sweep(SweepArgs),
    /// Print the per-round communication cost.
    Comm(CommArgs),
}

/// Options shared by every command that builds an experiment.
#[derive(Debug, Clone, Default, Args)]
pub struct ExperimentArgs {
    /// JSON experiment config; flags below override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_parser = parse_preset)]
    pub preset: Option<Preset>,
    /// Embedding dimension D.
    #[arg(long)]
    pub dims: Option<usize>,
    /// Number of experts M.
    #[arg(long)]
    pub experts: Option<usize>,
    /// Prompt tokens per expert L.
    #[arg(long)]
    pub prompt_len: Option<usize>,
    #[arg(long)]
    pub rounds: Option<usize>,
    #[arg(long)]
    pub local_epochs: Option<usize>,
    #[arg(long)]
    pub beta: Option<f64>,
    #[arg(long)]
    pub train_alpha: Option<f64>,
    #[arg(long)]
    pub inference_alpha: Option<f64>,
    #[arg(long)]
    pub lr: Option<f64>,
    #[arg(long, value_parser = parse_key_strategy)]
    pub key_strategy: Option<KeyStrategy>,
    /// Held-out target domain id.
    #[arg(long)]
    pub target: Option<usize>,
    /// Sets the data, model and clustering seeds (and the generator seed) at once.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Read the dataset from a fixture instead of generating it.
    #[arg(long)]
    pub fixture: Option<PathBuf>,
    #[arg(long)]
    pub no_capacity: bool,
    #[arg(long)]
    pub no_static_keys: bool,
    #[arg(long)]
    pub random_assignment: bool,
    #[arg(long)]
    pub no_kl: bool,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Output fixture path.
    #[arg(long)]
    pub out: PathBuf,
}

#[derive(Debug, Args)]
pub struct RunArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    /// Directory for report.json, metrics.csv and comm.csv.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Print the per-client uplink parameter count and exit.
    #[arg(long)]
    pub comm_only: bool,
}

#[derive(Debug, Args)]
pub struct GridArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum SweepParam {
    TrainAlpha,
    InferenceAlpha,
    Beta,
    Experts,
    PromptLen,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
    #[arg(long, value_enum)]
    pub param: SweepParam,
    /// Comma-separated grid values.
    #[arg(long, value_delimiter = ',', required = true)]
    pub values: Vec<f64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct CommArgs {
    #[command(flatten)]
    pub exp: ExperimentArgs,
}

fn parse_preset(s: &str) -> Result<Preset, String> {
    s.parse().map_err(|e: trip_core::Error| e.to_string())
}

fn parse_key_strategy(s: &str) -> Result<KeyStrategy, String> {
    s.parse().map_err(|e: trip_core::Error| e.to_string())
}

/// Builds and validates the experiment config: file (or defaults), then preset, then flags.
pub fn build_config(args: &ExperimentArgs) -> CliResult<ExperimentConfig> {
    let mut cfg = match &args.config {
        Some(path) => {
            let text = fs::read_to_string(path)
                .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
            ExperimentConfig::from_json(&text).map_err(|e| match e {
                trip_core::Error::Format { message, .. } => trip_core::Error::Format {
                    context: path.display().to_string(),
                    message,
                },
                other => other,
            })?
        }
        None => ExperimentConfig::default(),
    };
    if let Some(p) = args.preset {
        cfg.apply_preset(p);
    }
    macro_rules! set {
        ($($field:ident <- $arg:ident),*) => {
            $(if let Some(v) = args.$arg.clone() { cfg.$field = v; })*
        };
    }
    set!(experts <- experts, prompt_len <- prompt_len, rounds <- rounds, local_epochs <- local_epochs,
         beta <- beta, train_alpha <- train_alpha, inference_alpha <- inference_alpha, lr <- lr,
         key_strategy <- key_strategy, target_domain <- target);
    if let Some(seed) = args.seed {
        cfg.seeds.data = seed;
        cfg.seeds.model = seed;
        cfg.seeds.clustering = seed;
        if let DataSource::Generate(gen) = &mut cfg.data {
            *gen = reseeded(gen, gen.dim, seed);
        }
    }
    if let Some(d) = args.dims {
        cfg.dim = d;
        if let DataSource::Generate(gen) = &mut cfg.data {
            if gen.dim != d {
                *gen = reseeded(gen, d, gen.seed);
            }
        }
    }
    if let Some(path) = &args.fixture {
        cfg.data = DataSource::Fixture(path.clone());
    }
    cfg.ablation = Ablation {
        no_capacity: cfg.ablation.no_capacity || args.no_capacity,
        no_static_keys: cfg.ablation.no_static_keys || args.no_static_keys,
        random_assignment: cfg.ablation.random_assignment || args.random_assignment,
        no_kl: cfg.ablation.no_kl || args.no_kl,
    };
    Ok(cfg)
}

/// Same generator with domains redrawn for a new dimension or seed, keeping their
/// shift norms, rotation angles and noise levels.
fn reseeded(gen: &GeneratorConfig, dim: usize, seed: u64) -> GeneratorConfig {
    let domains = gen
        .domains
        .iter()
        .map(|d| DomainSpec::random(d.id, dim, d.shift_norm(), d.rotation_angle, d.noise, seed))
        .collect();
    GeneratorConfig {
        dim,
        seed,
        domains,
        ..gen.clone()
    }
}

/// Writes `report.json`, `metrics.csv` and `comm.csv` into `out_dir`.
pub fn emit_report(report: &RunReport, out_dir: &Path) -> CliResult<()> {
    fs::create_dir_all(out_dir).map_err(io_err(out_dir))?;
    let write = |name: &str, body: String| -> CliResult<()> {
        let path = out_dir.join(name);
        fs::write(&path, body).map_err(io_err(&path))
    };
    let mut json = report.to_json();
    json.push('\n');
    write("report.json", json)?;
    write("metrics.csv", metrics_csv(report))?;
    write("comm.csv", comm_csv(report))
}

pub fn metrics_csv(report: &RunReport) -> String {
    let mut out = String::from("round,domain,accuracy,ce,kl,dropped_rate\n");
    for r in &report.rounds {
        for m in &r.evals {
            let _ = writeln!(out, "{},{},{},{},{},{}", r.round, m.domain, m.accuracy, m.ce, m.kl, m.dropped_rate);
        }
    }
    out
}

pub fn comm_csv(report: &RunReport) -> String {
    let mut out = String::from("round,uplink_params,downlink_params\n");
    for c in &report.comm.records {
        let _ = writeln!(out, "{},{},{}", c.round, c.uplink_params, c.downlink_params);
    }
    out
}

fn summary_line(label: &str, r: &RunReport) -> String {
    format!(
        "{label:<12} zero-shot {:>6.2}%  final {:>6.2}%  uplink/client {}",
        100.0 * r.zero_shot_target_accuracy(),
        100.0 * r.final_target_accuracy,
        r.comm.per_client_uplink
    )
}

pub fn comm_report(cfg: &ExperimentConfig) -> String {
    format!(
        "experts {} x prompt_len {} x dim {}\nuplink parameters per client per round: {}\nkey parameters (first round only): {}\n",
        cfg.experts,
        cfg.prompt_len,
        cfg.dim,
        cfg.uplink_params_per_client(),
        cfg.experts * cfg.dim
    )
}

fn run_one(cfg: &ExperimentConfig) -> CliResult<RunReport> {
    cfg.validate()?;
    let ds = load_dataset(cfg)?;
    Ok(run_on(cfg, &ds)?)
}

/// Executes a parsed command, returning what should be printed on stdout.
pub fn execute(cli: Cli) -> CliResult<String> {
    match cli.command {
        Command::Gen(args) => {
            let cfg = build_config(&args.exp)?;
            let gen = match &cfg.data {
                DataSource::Generate(g) => g.clone(),
                DataSource::Fixture(_) => return Err(CliError::Usage("gen needs a generator config, not a fixture".into())),
            };
            let ds = generate(&gen)?;
            if let Some(parent) = args.out.parent().filter(|p| !p.as_os_str().is_empty()) {
                fs::create_dir_all(parent).map_err(io_err(parent))?;
            }
            write_fixture(&ds, &args.out)?;
            Ok(format!("wrote {} samples to {}\n", ds.len(), args.out.display()))
        }
        Command::Run(args) => {
            let cfg = build_config(&args.exp)?;
            if args.comm_only {
                cfg.validate()?;
                return Ok(comm_report(&cfg));
            }
            let report = run_one(&cfg)?;
            if let Some(out) = &args.out {
                emit_report(&report, out)?;
            }
            Ok(summary_line("run", &report) + "\n")
        }
        Command::Ablate(args) => {
            let base = build_config(&args.exp)?;
            base.validate()?;
            let ds = load_dataset(&base)?;
            let mut table = String::from("row,capacity,keys,cluster,kl,zero_shot,final_target\n");
            let mut text = String::new();
            for (name, ablation) in Ablation::lattice() {
                let cfg = ExperimentConfig { ablation, ..base.clone() };
                let report = run_on(&cfg, &ds)?;
                let mark = |removed: bool| if removed { "x" } else { "v" };
                let _ = writeln!(
                    table,
                    "{name},{},{},{},{},{},{}",
                    mark(ablation.no_capacity),
                    mark(ablation.no_static_keys),
                    mark(ablation.random_assignment),
                    mark(ablation.no_kl),
                    report.zero_shot_target_accuracy(),
                    report.final_target_accuracy
                );
                text.push_str(&summary_line(name, &report));
                text.push('\n');
                if let Some(out) = &args.out {
                    emit_report(&report, &out.join(name.trim_start_matches('-')))?;
                }
            }
            if let Some(out) = &args.out {
                let path = out.join("ablation.csv");
                fs::write(&path, &table).map_err(io_err(&path))?;
            }
            Ok(text)
        }
        Command::Sweep(args) => {
            let base = build_config(&args.exp)?;
            let mut table = String::from("value,zero_shot,final_target\n");
            let mut text = String::new();
            for &v in &args.values {
                let mut cfg = base.clone();
                let count = || -> CliResult<usize> {
                    if v >= 1.0 && v.fract() == 0.0 {
                        Ok(v as usize)
                    } else {
                        Err(CliError::Usage(format!("{v} is not a positive integer")))
                    }
                };
                match args.param {
                    SweepParam::TrainAlpha => cfg.train_alpha = v,
                    SweepParam::InferenceAlpha => cfg.inference_alpha = v,
                    SweepParam::Beta => cfg.beta = v,
                    SweepParam::Experts => cfg.experts = count()?,
                    SweepParam::PromptLen => cfg.prompt_len = count()?,
                }
                let report = run_one(&cfg)?;
                let _ = writeln!(table, "{v},{},{}", report.zero_shot_target_accuracy(), report.final_target_accuracy);
                text.push_str(&summary_line(&format!("{v}"), &report));
                text.push('\n');
                if let Some(out) = &args.out {
                    emit_report(&report, &out.join(format!("value-{v}")))?;
                }
            }
            if let Some(out) = &args.out {
                fs::create_dir_all(out).map_err(io_err(out))?;
                let path = out.join("sweep.csv");
                fs::write(&path, &table).map_err(io_err(&path))?;
            }
            Ok(text)
        }
        Command::Comm(args) => {
            let cfg = build_config(&args.exp)?;
            cfg.validate()?;
            Ok(comm_report(&cfg))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn parse(args: &[&str]) -> Cli {
        Cli::try_parse_from(std::iter::once("trip-sim").chain(args.iter().copied())).unwrap()
    }

    #[test]
    fn comm_only_lite_at_512() {
        let out = execute(parse(&["run", "--preset", "trip-lite", "--dims", "512", "--comm-only"])).unwrap();
        assert!(out.contains("per round: 1024\n"), "{out}");
        let out = execute(parse(&["comm", "--preset", "trip", "--dims", "512"])).unwrap();
        assert!(out.contains("per round: 65536\n"), "{out}");
    }

    #[test]
    fn dims_flag_resizes_generated_domains() {
        let Command::Run(args) = parse(&["run", "--dims", "32"]).command else { panic!() };
        let cfg = build_config(&args.exp).unwrap();
        cfg.validate().unwrap();
        let DataSource::Generate(gen) = &cfg.data else { panic!() };
        assert_eq!(gen.dim, 32);
        assert!(gen.domains.iter().all(|d| d.shift.len() == 32));
    }

    #[test]
    fn flags_override_config() {
        let Command::Run(args) = parse(&["run", "--preset", "trip-lite", "--experts", "3", "--no-kl", "--seed", "5"]).command else {
            panic!()
        };
        let cfg = build_config(&args.exp).unwrap();
        assert_eq!((cfg.experts, cfg.prompt_len), (3, 1));
        assert!(cfg.ablation.no_kl);
        assert_eq!(cfg.seeds.model, 5);
    }

    #[test]
    fn unknown_flag_is_a_usage_error() {
        let err = Cli::try_parse_from(["trip-sim", "run", "--bogus"]).unwrap_err();
        assert_eq!(err.exit_code(), 2);
    }
}
