//! `face`: run one site's step, pool the target broadcast, aggregate a run
//! directory, or run a simulation study.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use face_core::data::{load_site_csv, Role};
use face_core::federation::{
    collect_summaries, publish_broadcast, summary_file_name, write_result, DirTransport, Envelope,
    Payload, Transport, BROADCAST_FILE,
};
use face_core::pipeline::{make_broadcast, source_phase, target_phase, Broadcast, LambdaChoice};
use face_core::simulate::{run_study, Setting, SimConfig};
use face_core::site::{stream_seed, StepOptions, VarianceMethod, DEFAULT_BOOTSTRAP_REPLICATES};
use face_core::source::SourceMode;
use face_core::{AggregationResult, FaceError, SiteData};

#[derive(Parser)]
#[command(name = "face", version, about = "Federated adaptive causal estimation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Summarise one site's data into the run directory.
    Site(SiteArgs),
    /// Pool the target summaries in a run directory into broadcast.json.
    Broadcast {
        #[arg(long)]
        run_dir: PathBuf,
    },
    /// Combine every summary in a run directory.
    Aggregate(AggregateArgs),
    /// Run a simulation study.
    Simulate(SimulateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum RoleArg {
    Target,
    Source,
}

#[derive(Clone, Copy, ValueEnum)]
enum VarianceArg {
    Influence,
    Bootstrap,
}

#[derive(Args)]
struct SiteArgs {
    /// CSV with header `y,a,x1,...,xp`.
    #[arg(long)]
    data: PathBuf,
    #[arg(long, value_enum)]
    role: RoleArg,
    /// Defaults to the file stem of `--data`.
    #[arg(long)]
    site_id: Option<String>,
    /// Broadcast envelope, or a single target summary envelope. Required for
    /// source sites.
    #[arg(long)]
    broadcast: Option<PathBuf>,
    /// Run directory the summary is written to.
    #[arg(long)]
    out: PathBuf,
    #[arg(long, default_value = "transported")]
    mode: SourceMode,
    #[arg(long, value_enum, default_value = "influence")]
    variance: VarianceArg,
    #[arg(long, default_value_t = DEFAULT_BOOTSTRAP_REPLICATES)]
    bootstrap_reps: usize,
    /// Seeds the sample split and the bootstrap.
    #[arg(long, env = "FACE_SEED", default_value_t = 0)]
    seed: u64,
    /// Skip the split summaries used for choosing λ by cross-validation.
    #[arg(long)]
    no_split: bool,
}

#[derive(Args)]
struct AggregateArgs {
    #[arg(long)]
    run_dir: PathBuf,
    /// A number, `cv`, or `default` (N^{1/3}).
    #[arg(long, default_value = "cv")]
    lambda: String,
    /// File of λ values (whitespace or comma separated) for `--lambda cv`.
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, default_value_t = 0.05)]
    alpha: f64,
    /// Defaults to `<run-dir>/result.json`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SimulateArgs {
    /// TOML or JSON file with simulation settings; flags override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    setting: Option<Setting>,
    /// Total number of sites, the target included.
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, env = "FACE_SEED")]
    seed: Option<u64>,
    #[arg(long)]
    out: PathBuf,
    /// Worker threads; 0 uses every core.
    #[arg(long, default_value_t = 0)]
    jobs: usize,
}

#[derive(Debug)]
enum CliError {
    Face(FaceError),
    Usage(String),
}

impl From<FaceError> for CliError {
    fn from(e: FaceError) -> Self {
        CliError::Face(e)
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Usage(format!("{}: {e}", path.display()))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    // Per-site warnings repeat in every replication; RUST_LOG still overrides.
    let level = match cli.command {
        Command::Simulate(_) => "error",
        _ => "warn",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    let out = match cli.command {
        Command::Site(a) => site(a),
        Command::Broadcast { run_dir } => broadcast(&run_dir),
        Command::Aggregate(a) => aggregate(a),
        Command::Simulate(a) => simulate(a),
    };
    match out {
        Ok(()) => ExitCode::SUCCESS,
        Err(CliError::Usage(m)) => {
            eprintln!("error: {m}");
            ExitCode::from(2)
        }
        Err(CliError::Face(e)) => {
            eprintln!("error: {e}");
            ExitCode::from(if e.is_numerical() { 3 } else { 2 })
        }
    }
}

fn read_broadcast_file(path: &Path) -> CliResult<Broadcast<f64>> {
    let bytes = fs::read(path).map_err(io_err(path))?;
    match Envelope::from_bytes(&bytes)?.payload {
        Payload::Broadcast(b) => Ok(b),
        Payload::Target(t) => Ok(make_broadcast(&[t])?),
        Payload::Source(_) => Err(CliError::Usage(format!(
            "{} holds a source summary, not a broadcast",
            path.display()
        ))),
    }
}

fn site(a: SiteArgs) -> CliResult<()> {
    let role = match a.role {
        RoleArg::Target => Role::Target,
        RoleArg::Source => Role::Source,
    };
    let mut data: SiteData = load_site_csv(&a.data, role)?;
    if let Some(id) = a.site_id {
        data = SiteData::new(
            id,
            data.y().to_vec(),
            data.treated().to_vec(),
            data.x().clone(),
            role,
        )?;
    }
    let opts = StepOptions {
        variance: match a.variance {
            VarianceArg::Influence => VarianceMethod::Influence,
            VarianceArg::Bootstrap => VarianceMethod::Bootstrap {
                replicates: a.bootstrap_reps,
                seed: stream_seed(a.seed, "bootstrap", 0),
            },
        },
        ..StepOptions::default()
    };
    let payload = match a.role {
        RoleArg::Target => {
            if a.broadcast.is_some() {
                return Err(CliError::Usage(
                    "--broadcast is only for source sites".into(),
                ));
            }
            Payload::Target(target_phase(&data, &opts, !a.no_split, a.seed)?)
        }
        RoleArg::Source => {
            let path = a
                .broadcast
                .ok_or_else(|| CliError::Usage("a source site needs --broadcast".into()))?;
            let b = read_broadcast_file(&path)?;
            Payload::Source(source_phase(&data, &b, a.mode, &opts, a.seed)?)
        }
    };
    let env = Envelope::seal(data.site_id(), payload)?;
    let name = summary_file_name(data.site_id());
    DirTransport::new(&a.out)?.publish(&name, &env)?;
    println!("{}", a.out.join(name).display());
    Ok(())
}

fn broadcast(run_dir: &Path) -> CliResult<()> {
    let t = DirTransport::open(run_dir)?;
    let (targets, _) = collect_summaries(&t)?;
    let b = publish_broadcast(&t, &targets)?;
    println!(
        "{}: {} target site(s), n_target = {}",
        run_dir.join(BROADCAST_FILE).display(),
        targets.len(),
        b.n_target
    );
    Ok(())
}

fn parse_grid(text: &str) -> CliResult<Vec<f64>> {
    let grid: Vec<f64> = text
        .split(|c: char| c.is_whitespace() || c == ',')
        .filter(|s| !s.is_empty())
        .map(|s| {
            s.parse::<f64>()
                .map_err(|_| CliError::Usage(format!("bad λ value {s:?} in grid")))
        })
        .collect::<CliResult<_>>()?;
    if grid.is_empty() {
        return Err(CliError::Usage("λ grid is empty".into()));
    }
    Ok(grid)
}

fn lambda_choice(lambda: &str, grid: Option<&Path>) -> CliResult<LambdaChoice<f64>> {
    match lambda {
        "cv" => match grid {
            Some(p) => Ok(LambdaChoice::CrossValidated(parse_grid(
                &fs::read_to_string(p).map_err(io_err(p))?,
            )?)),
            None => Ok(LambdaChoice::cv_default_grid()),
        },
        _ if grid.is_some() => Err(CliError::Usage("--grid needs --lambda cv".into())),
        "default" => Ok(LambdaChoice::Default),
        v => v
            .parse::<f64>()
            .ok()
            .filter(|l| l.is_finite() && *l >= 0.0)
            .map(LambdaChoice::Fixed)
            .ok_or_else(|| {
                CliError::Usage(format!(
                    "--lambda must be cv, default or a number ≥ 0, got {v:?}"
                ))
            }),
    }
}

fn print_result(r: &AggregationResult) {
    println!("delta_face  {:.6}", r.delta_face);
    println!("v_hat       {:.6e}", r.v_hat);
    println!(
        "ci_{:<7} [{:.6}, {:.6}]",
        format!("{}", 1.0 - r.alpha),
        r.ci.0,
        r.ci.1
    );
    println!("lambda      {}", r.lambda_used);
    println!("target      {:.6}", r.target_estimate);
    for (id, eta) in r.site_ids.iter().zip(&r.eta) {
        println!("eta[{id}] {eta:.6}");
    }
    for id in &r.excluded {
        println!("excluded    {id}");
    }
}

fn aggregate(a: AggregateArgs) -> CliResult<()> {
    let lambda = lambda_choice(&a.lambda, a.grid.as_deref())?;
    let t = DirTransport::open(&a.run_dir)?;
    let (targets, sources) = collect_summaries(&t)?;
    let r = face_core::pipeline::leading_phase(&targets, &sources, &lambda, a.alpha)?;
    let out = a
        .out
        .unwrap_or_else(|| a.run_dir.join(face_core::federation::RESULT_FILE));
    write_result(&out, &r)?;
    print_result(&r);
    Ok(())
}

fn load_sim_config(path: &Path) -> CliResult<SimConfig> {
    let text = fs::read_to_string(path).map_err(io_err(path))?;
    let bad = |e: String| CliError::Usage(format!("{}: {e}", path.display()));
    if path.extension().is_some_and(|e| e == "json") {
        serde_json::from_str(&text).map_err(|e| bad(e.to_string()))
    } else {
        toml::from_str(&text).map_err(|e| bad(e.to_string()))
    }
}

fn simulate(a: SimulateArgs) -> CliResult<()> {
    let mut cfg = match &a.config {
        Some(p) => load_sim_config(p)?,
        None => SimConfig::default(),
    };
    if let Some(s) = a.setting {
        cfg.setting = s;
    }
    if let Some(k) = a.k {
        cfg.k = k;
    }
    if let Some(r) = a.reps {
        cfg.replications = r;
    }
    if let Some(s) = a.seed {
        cfg.seed = s;
    }
    cfg.validate()?;
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(a.jobs)
        .build()
        .map_err(|e| CliError::Usage(e.to_string()))?;
    let report = pool.install(|| run_study(&cfg))?;
    fs::create_dir_all(&a.out).map_err(io_err(&a.out))?;
    let json = serde_json::to_string_pretty(&report).map_err(FaceError::from)?;
    let report_path = a.out.join("report.json");
    fs::write(&report_path, json + "\n").map_err(io_err(&report_path))?;
    let table = report.table();
    let table_path = a.out.join("table.txt");
    fs::write(&table_path, &table).map_err(io_err(&table_path))?;
    print!("{table}");
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_parsing() {
        assert_eq!(
            parse_grid("0, 1\n2.5  10").unwrap(),
            vec![0.0, 1.0, 2.5, 10.0]
        );
        assert!(parse_grid(" \n").is_err());
        assert!(parse_grid("1 x").is_err());
    }

    #[test]
    fn lambda_argument() {
        assert_eq!(lambda_choice("3", None).unwrap(), LambdaChoice::Fixed(3.0));
        assert_eq!(
            lambda_choice("default", None).unwrap(),
            LambdaChoice::Default
        );
        assert_eq!(
            lambda_choice("cv", None).unwrap(),
            LambdaChoice::cv_default_grid()
        );
        assert!(lambda_choice("-1", None).is_err());
        assert!(lambda_choice("nan", None).is_err());
        assert!(lambda_choice("2", Some(Path::new("g"))).is_err());
    }
}
