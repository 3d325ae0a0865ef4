//! `waal`: run experiments, audit gradients, study divergences, host the
//! label server and report metrics.
//!
//! Exit codes: 0 success, 1 runtime failure or failed gradient check,
//! 2 configuration or input error, 3 oracle timeout, 4 divergence ordering
//! regression, 5 port in use.

use std::io::Write;
use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use clap::{Parser, Subcommand, ValueEnum};
use waal_core::divergence::divergence_report;
use waal_core::gradcheck::{run_gradcheck, LossKind, GRADCHECK_TOLERANCE};
use waal_core::metrics::{read_metrics, report_table, svg_chart, MetricsWriter};
use waal_core::oracle::{OracleError, SimulatedOracle};
use waal_core::{Error, Experiment, ExperimentConfig};
use waal_server::{CreateError, LabServer, ServerOptions};

#[derive(Parser)]
#[command(name = "waal", version, about = "Wasserstein adversarial active-learning lab")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run an experiment config, one replicate per seed.
    Run {
        #[arg(long)]
        config: PathBuf,
        #[arg(long, value_enum, default_value_t = OracleKind::Simulated)]
        oracle: OracleKind,
        /// Metrics log; defaults to the config's `out_path`, then `metrics.jsonl`.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run seeds on parallel threads, one `<out>.seed<N>.jsonl` per seed.
        #[arg(long)]
        parallel: bool,
        /// Label-server port for `--oracle interactive`.
        #[arg(long, default_value_t = 8787)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Compare W1 and the threshold risk of the two query families.
    Divergence {
        #[arg(long)]
        a: f64,
        #[arg(long)]
        b: f64,
        #[arg(long, default_value_t = 101)]
        grid: usize,
    },
    /// Finite-difference audit of every training loss.
    Gradcheck {
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value_t = waal_core::gradcheck::DEFAULT_CONFIGS)]
        configs: usize,
        /// Judge a single loss.
        #[arg(long, value_enum)]
        loss: Option<LossArg>,
        #[arg(long, hide = true)]
        corrupt: bool,
    },
    /// Host the label server for one interactive session.
    Serve {
        /// Start a session from this config right away.
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long, default_value_t = 8787)]
        port: u16,
        #[arg(long, default_value = "127.0.0.1")]
        host: String,
    },
    /// Accuracy table and SVG chart from a metrics log.
    Report {
        #[arg(long)]
        metrics: PathBuf,
        /// Chart path; defaults to the log path with an `.svg` extension.
        #[arg(long)]
        svg: Option<PathBuf>,
    },
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum OracleKind {
    Simulated,
    Interactive,
}

#[derive(Clone, Copy, ValueEnum)]
enum LossArg {
    Prediction,
    Adversarial,
    HdivAdversarial,
    LipschitzPenalty,
    AdversarialWithPenalty,
}

impl From<LossArg> for LossKind {
    fn from(l: LossArg) -> Self {
        match l {
            LossArg::Prediction => LossKind::Prediction,
            LossArg::Adversarial => LossKind::Adversarial,
            LossArg::HdivAdversarial => LossKind::HdivAdversarial,
            LossArg::LipschitzPenalty => LossKind::LipschitzPenalty,
            LossArg::AdversarialWithPenalty => LossKind::AdversarialWithPenalty,
        }
    }
}

struct Failure {
    code: u8,
    message: String,
}

impl Failure {
    fn new(code: u8, message: impl ToString) -> Self {
        Self {
            code,
            message: message.to_string(),
        }
    }

    fn input(e: impl ToString) -> Self {
        Self::new(2, e)
    }

    /// Errors raised while an experiment runs.
    fn runtime(e: Error) -> Self {
        match e {
            Error::Oracle(OracleError::Timeout { .. }) => Self::new(3, e),
            other => Self::new(1, other),
        }
    }
}

type Outcome = Result<(), Failure>;

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::new().filter_or("WAAL_LOG", "info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run {
            config,
            oracle,
            out,
            parallel,
            port,
            host,
        } => run(&config, oracle, out, parallel, &host, port),
        Command::Divergence { a, b, grid } => divergence(a, b, grid),
        Command::Gradcheck {
            seed,
            configs,
            loss,
            corrupt,
        } => gradcheck(seed, configs, loss.map(LossKind::from), corrupt),
        Command::Serve { config, port, host } => serve(config.as_deref(), &host, port),
        Command::Report { metrics, svg } => report(&metrics, svg),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn config_dir(path: &Path) -> PathBuf {
    path.parent()
        .filter(|d| !d.as_os_str().is_empty())
        .map_or_else(|| PathBuf::from("."), Path::to_path_buf)
}

fn run(path: &Path, oracle: OracleKind, out: Option<PathBuf>, parallel: bool, host: &str, port: u16) -> Outcome {
    let config = ExperimentConfig::from_path(path).map_err(Failure::input)?;
    let base = config_dir(path);
    let out = out
        .or_else(|| config.out_path.as_ref().map(|p| base.join(p)))
        .unwrap_or_else(|| PathBuf::from("metrics.jsonl"));
    match oracle {
        OracleKind::Simulated if parallel => {
            let results: Vec<Outcome> = std::thread::scope(|s| {
                let handles: Vec<_> = config
                    .seeds
                    .iter()
                    .map(|&seed| {
                        let (config, base) = (&config, &base);
                        let out = seed_path(&out, seed);
                        s.spawn(move || run_simulated(config, &[seed], base, &out))
                    })
                    .collect();
                handles.into_iter().map(|h| h.join().expect("seed thread panicked")).collect()
            });
            results.into_iter().collect()
        }
        OracleKind::Simulated => run_simulated(&config, &config.seeds, &base, &out),
        OracleKind::Interactive => run_interactive(config, base, out, host, port),
    }
}

fn seed_path(out: &Path, seed: u64) -> PathBuf {
    let stem = out.file_stem().map_or_else(|| "metrics".into(), |s| s.to_string_lossy().into_owned());
    let ext = out.extension().map_or_else(|| "jsonl".into(), |e| e.to_string_lossy().into_owned());
    out.with_file_name(format!("{stem}.seed{seed}.{ext}"))
}

fn run_simulated(config: &ExperimentConfig, seeds: &[u64], base: &Path, out: &Path) -> Outcome {
    let mut experiments = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        experiments.push(Experiment::new(config, seed, Some(base)).map_err(Failure::input)?);
    }
    let mut writer = MetricsWriter::create(out).map_err(|e| Failure::new(1, e))?;
    for mut exp in experiments {
        let mut oracle = SimulatedOracle::from_pool(exp.pool());
        exp.pool_mut().hide_unlabeled();
        while let Some(record) = exp.run_round(&mut oracle, &mut |_| {}).map_err(Failure::runtime)? {
            log::info!(
                "seed {} round {}: {} labels, test accuracy {:.4}",
                record.seed,
                record.round,
                record.labeled_count,
                record.test_accuracy
            );
            writer.write(&record).map_err(|e| Failure::new(1, e))?;
        }
    }
    log::info!("metrics written to {}", out.display());
    Ok(())
}

fn bind(host: &str, port: u16) -> Result<TcpListener, Failure> {
    let addr: SocketAddr = format!("{host}:{port}")
        .parse()
        .map_err(|e| Failure::input(format!("address {host}:{port}: {e}")))?;
    let listener = TcpListener::bind(addr).map_err(|e| match e.kind() {
        std::io::ErrorKind::AddrInUse => Failure::new(5, format!("port {port} is in use")),
        _ => Failure::new(1, format!("cannot bind {addr}: {e}")),
    })?;
    listener.set_nonblocking(true).map_err(|e| Failure::new(1, e))?;
    Ok(listener)
}

fn runtime() -> Result<tokio::runtime::Runtime, Failure> {
    tokio::runtime::Builder::new_multi_thread()
        .enable_all()
        .build()
        .map_err(|e| Failure::new(1, e))
}

fn create_error(e: CreateError) -> Failure {
    match e {
        CreateError::Busy => Failure::new(1, e),
        CreateError::Invalid { .. } => Failure::input(e),
    }
}

const SHUTDOWN_GRACE: Duration = Duration::from_secs(2);

fn run_interactive(config: ExperimentConfig, base: PathBuf, out: PathBuf, host: &str, port: u16) -> Outcome {
    let listener = bind(host, port)?;
    let server = LabServer::new(ServerOptions {
        base_dir: Some(base),
        metrics_path: Some(out),
        retry_on_timeout: false,
    });
    let id = server.create_session(config).map_err(create_error)?;
    println!("session {id} at http://{host}:{port}");
    let rt = runtime()?;
    let (stop, stopped) = tokio::sync::oneshot::channel::<()>();
    let serving = {
        let server = server.clone();
        rt.spawn(async move {
            let listener = tokio::net::TcpListener::from_std(listener)?;
            waal_server::serve(listener, server, async {
                let _ = stopped.await;
            })
            .await
        })
    };
    let result = server.join().expect("session was just created");
    let _ = stop.send(());
    // keep-alive clients would hold a graceful shutdown open indefinitely
    let _ = rt.block_on(async { tokio::time::timeout(SHUTDOWN_GRACE, serving).await });
    rt.shutdown_background();
    result.map(|_| ()).map_err(Failure::runtime)
}

fn serve(config: Option<&Path>, host: &str, port: u16) -> Outcome {
    let config = config
        .map(|p| ExperimentConfig::from_path(p).map(|c| (c, config_dir(p))))
        .transpose()
        .map_err(Failure::input)?;
    let listener = bind(host, port)?;
    let base = config.as_ref().map(|(_, b)| b.clone()).or_else(|| std::env::current_dir().ok());
    let server = LabServer::new(ServerOptions {
        base_dir: base,
        metrics_path: None,
        retry_on_timeout: true,
    });
    if let Some((config, _)) = config {
        let id = server.create_session(config).map_err(create_error)?;
        println!("session {id}");
    }
    println!("listening on http://{host}:{port}");
    let rt = runtime()?;
    rt.block_on(async move {
        let listener = tokio::net::TcpListener::from_std(listener)?;
        waal_server::serve(listener, server, async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
    })
    .map_err(|e| Failure::new(1, e))
}

fn divergence(a: f64, b: f64, grid: usize) -> Outcome {
    if !(a.is_finite() && b.is_finite() && a > b && b > 0.0) {
        return Err(Failure::input(format!("need a > b > 0, got a = {a}, b = {b}")));
    }
    let report = divergence_report(a, b, grid).map_err(Failure::input)?;
    println!("{}", serde_json::to_string_pretty(&report).map_err(|e| Failure::new(1, e))?);
    if !report.ordering_holds {
        return Err(Failure::new(4, "diversity ordering does not hold"));
    }
    Ok(())
}

fn gradcheck(seed: u64, configs: usize, only: Option<LossKind>, corrupt: bool) -> Outcome {
    let report = run_gradcheck(seed, configs, corrupt).map_err(|e| Failure::new(1, e))?;
    let losses: Vec<LossKind> = match only {
        Some(l) => vec![l],
        None => LossKind::ALL.to_vec(),
    };
    println!("seed {seed}, {configs} configurations");
    for &loss in &losses {
        println!("{:<26} {:.3e}", loss.name(), report.worst_for(loss));
    }
    let worst = losses.iter().map(|&l| report.worst_for(l)).fold(0.0, f64::max);
    println!("worst relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:e})");
    if worst > GRADCHECK_TOLERANCE {
        return Err(Failure::new(1, "gradient check failed"));
    }
    Ok(())
}

fn report(metrics: &Path, svg: Option<PathBuf>) -> Outcome {
    let records = read_metrics(metrics).map_err(Failure::input)?;
    let svg = svg.unwrap_or_else(|| metrics.with_extension("svg"));
    std::fs::write(&svg, svg_chart(&records)).map_err(|e| Failure::new(1, format!("{}: {e}", svg.display())))?;
    let text = format!("{}chart written to {}\n", report_table(&records), svg.display());
    // a closed pipe (e.g. `| head`) is not an error
    match std::io::stdout().lock().write_all(text.as_bytes()) {
        Err(e) if e.kind() != std::io::ErrorKind::BrokenPipe => Err(Failure::new(1, e)),
        _ => Ok(()),
    }
}
