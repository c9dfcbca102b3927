use std::fmt::Display;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Args, Parser, Subcommand};
use log::info;

use shaperd::bench::{self, BenchOptions, TunnelSetup};
use shaperd::constraint::{ComparisonMode, Constraint, ConstraintFunction, PacketTarget};
use shaperd::detector::{inspect_flow, load_flow, parse_rules};
use shaperd::proxy::{run_endpoint, ProxyConfig, Role};
use shaperd::timer::parse_timing_document;
use shaperd::{ConstraintSet, ShaperConfig, TimingPolicy};

#[derive(Parser)]
#[command(
    name = "shaperd",
    version,
    about = "Constraint-driven traffic shaping tunnel"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Accept local connections and shape them toward a server endpoint.
    Client {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        peer: String,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Accept tunnel connections and forward the recovered stream.
    Server {
        #[arg(long)]
        listen: String,
        #[arg(long)]
        forward: String,
        #[command(flatten)]
        endpoint: EndpointArgs,
    },
    /// Measure shaping overhead on a seeded random stream.
    Bench {
        /// Constraint set whose prefixes of size 0..=k are measured.
        #[arg(long)]
        constraints: Option<PathBuf>,
        /// Timing document; only its shaper keys apply in-process.
        #[arg(long)]
        timing: Option<PathBuf>,
        #[arg(long, default_value_t = 16 * 1024 * 1024)]
        size: usize,
        #[arg(long, default_value_t = 42)]
        seed: u64,
        #[arg(long, default_value_t = 3)]
        repeats: usize,
        #[arg(long)]
        max_frame_len: Option<usize>,
        /// Split time into buffer, search, encode and decode phases.
        #[arg(long)]
        profile: bool,
        /// Also push the stream through a loopback tunnel.
        #[arg(long)]
        with_network: bool,
    },
    /// Run detector rules over a captured flow.
    Detect {
        #[arg(long)]
        rules: PathBuf,
        /// Frames file from --capture-frames, or a directory of frame files.
        #[arg(long)]
        frames: PathBuf,
    },
    /// Parse configuration files and report the first error.
    CheckConfig {
        #[arg(long)]
        constraints: Vec<PathBuf>,
        #[arg(long)]
        timing: Option<PathBuf>,
        #[arg(long)]
        rules: Option<PathBuf>,
    },
}

#[derive(Args)]
struct EndpointArgs {
    /// Constraint set for both directions.
    #[arg(long, conflicts_with_all = ["constraints_in", "constraints_out"])]
    constraints: Option<PathBuf>,
    /// Constraints the peer shapes its frames with.
    #[arg(long)]
    constraints_in: Option<PathBuf>,
    /// Constraints this endpoint shapes its frames with.
    #[arg(long)]
    constraints_out: Option<PathBuf>,
    #[arg(long)]
    timing: Option<PathBuf>,
    /// Log counters every N seconds.
    #[arg(long, value_name = "SECONDS")]
    stats: Option<u64>,
    #[arg(long)]
    capture_frames: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
}

/// Any failure after argument parsing; exits with status 1.
struct Failure {
    message: String,
}

impl Failure {
    fn config(path: &Path, e: impl Display) -> Self {
        Self {
            message: format!("{}: {e}", path.display()),
        }
    }

    fn runtime(e: impl Display) -> Self {
        Self {
            message: e.to_string(),
        }
    }
}

fn read(path: &Path) -> Result<String, Failure> {
    std::fs::read_to_string(path).map_err(|e| Failure::config(path, e))
}

fn load_constraints(path: &Path) -> Result<ConstraintSet, Failure> {
    ConstraintSet::parse(&read(path)?).map_err(|e| Failure::config(path, e))
}

fn load_timing(path: Option<&Path>) -> Result<(TimingPolicy, ShaperConfig), Failure> {
    match path {
        Some(path) => parse_timing_document(&read(path)?).map_err(|e| Failure::config(path, e)),
        None => Ok(Default::default()),
    }
}

fn endpoint_config(
    role: Role,
    listen: String,
    remote: String,
    args: EndpointArgs,
) -> Result<ProxyConfig, Failure> {
    let mut config = ProxyConfig::new(role, listen, remote);
    let load = |p: &Option<PathBuf>| p.as_deref().map(load_constraints).transpose();
    if let Some(both) = load(&args.constraints)? {
        config.inbound_constraints = both.clone();
        config.outbound_constraints = both;
    }
    if let Some(set) = load(&args.constraints_in)? {
        config.inbound_constraints = set;
    }
    if let Some(set) = load(&args.constraints_out)? {
        config.outbound_constraints = set;
    }
    (config.timing, config.shaper) = load_timing(args.timing.as_deref())?;
    config.stats_interval = args.stats.filter(|&s| s > 0).map(Duration::from_secs);
    config.capture_frames = args.capture_frames;
    config.seed = args.seed;
    config.validate().map_err(Failure::runtime)?;
    Ok(config)
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(Failure::runtime)
}

fn run_proxy(config: ProxyConfig) -> Result<(), Failure> {
    runtime()?.block_on(async {
        let shutdown = async {
            let _ = tokio::signal::ctrl_c().await;
            info!("interrupt received, shutting down");
        };
        run_endpoint(config, shutdown)
            .await
            .map_err(Failure::runtime)
    })
}

fn default_bench_set() -> ConstraintSet {
    ConstraintSet::new(vec![
        Constraint::new(
            ConstraintFunction::EntropyBitsPerByte,
            ComparisonMode::Ge,
            7.5,
            PacketTarget::All,
        ),
        Constraint::new(
            ConstraintFunction::PrintableAsciiFraction,
            ComparisonMode::Le,
            0.5,
            PacketTarget::All,
        ),
    ])
}

#[allow(clippy::too_many_arguments)]
fn run_bench(
    constraints: Option<PathBuf>,
    timing: Option<PathBuf>,
    size: usize,
    seed: u64,
    repeats: usize,
    max_frame_len: Option<usize>,
    profile: bool,
    with_network: bool,
) -> Result<(), Failure> {
    let set = match constraints {
        Some(path) => load_constraints(&path)?,
        None => default_bench_set(),
    };
    let (timing, mut config) = load_timing(timing.as_deref())?;
    if let Some(len) = max_frame_len {
        config.max_frame_len = len;
    }
    let opts = BenchOptions {
        stream_size: size,
        seed,
        repeats,
        profile,
    };
    let sets = bench::prefix_sets(&set);
    let report = bench::run_bench(&sets, &config, &opts).map_err(Failure::runtime)?;
    println!("{report}");

    if with_network {
        let data = bench::generate_stream(size, seed);
        let rt = runtime()?;
        for shaped in &sets {
            let setup = TunnelSetup {
                upstream: shaped.clone(),
                downstream: shaped.clone(),
                timing: timing.clone(),
                shaper: config.clone(),
                seed: Some(seed),
                ..TunnelSetup::default()
            };
            match rt.block_on(bench::loopback_echo(&data, &setup)) {
                Ok(run) if run.echoed == data => println!(
                    "network k={}: {:.1} MiB/s round trip in {:.2?}",
                    shaped.len(),
                    size as f64 / run.elapsed.as_secs_f64() / (1024.0 * 1024.0),
                    run.elapsed
                ),
                Ok(run) => println!(
                    "network k={}: FAILED, echoed {} of {} bytes (shaping failures: {})",
                    shaped.len(),
                    run.echoed.len(),
                    size,
                    run.client.shaping_failures + run.server.shaping_failures
                ),
                Err(e) => println!("network k={}: FAILED: {e}", shaped.len()),
            }
        }
    }
    Ok(())
}

fn run_detect(rules: &Path, frames: &Path) -> Result<(), Failure> {
    let rules = parse_rules(&read(rules)?).map_err(|e| Failure::config(rules, e))?;
    let flow = load_flow(frames).map_err(|e| Failure::config(frames, e))?;
    let verdict = inspect_flow(&flow, &rules);
    println!("{}", verdict.summary());
    Ok(())
}

fn run_check(
    constraints: &[PathBuf],
    timing: Option<&Path>,
    rules: Option<&Path>,
) -> Result<(), Failure> {
    for path in constraints {
        let set = load_constraints(path)?;
        println!("{}: {} constraints", path.display(), set.len());
    }
    if let Some(path) = timing {
        let (policy, shaper) = load_timing(Some(path))?;
        shaper.validate().map_err(|e| Failure::config(path, e))?;
        policy
            .validate(shaper.max_frame_len)
            .map_err(|e| Failure::config(path, e))?;
        println!("{}: ok", path.display());
    }
    if let Some(path) = rules {
        let rules = parse_rules(&read(path)?).map_err(|e| Failure::config(path, e))?;
        println!("{}: {} rules", path.display(), rules.len());
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("SHAPERD_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Client {
            listen,
            peer,
            endpoint,
        } => endpoint_config(Role::Client, listen, peer, endpoint).and_then(run_proxy),
        Command::Server {
            listen,
            forward,
            endpoint,
        } => endpoint_config(Role::Server, listen, forward, endpoint).and_then(run_proxy),
        Command::Bench {
            constraints,
            timing,
            size,
            seed,
            repeats,
            max_frame_len,
            profile,
            with_network,
        } => run_bench(
            constraints,
            timing,
            size,
            seed,
            repeats,
            max_frame_len,
            profile,
            with_network,
        ),
        Command::Detect { rules, frames } => run_detect(&rules, &frames),
        Command::CheckConfig {
            constraints,
            timing,
            rules,
        } => run_check(&constraints, timing.as_deref(), rules.as_deref()),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("shaperd: {}", f.message);
            ExitCode::FAILURE
        }
    }
}
