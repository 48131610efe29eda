//! `safehumanoid` command line.
//!
//! Exit codes: 0 success; 1 command failed (or `validate-db` found problems);
//! 2 usage error or unreadable input to `validate-db`.

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::net::{SocketAddr, TcpListener, ToSocketAddrs};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::Arc;
use std::time::Duration;

use anyhow::{anyhow, bail, Context, Result};
use clap::{Args, Parser, Subcommand};

use safehumanoid::comms::{server_loop, LatencyHandle, Pipeline, SceneQuery, SceneSource};
use safehumanoid::config::{Assets, RunConfig};
use safehumanoid::impedance::ImpedancePayload;
use safehumanoid::perception::{parse_descriptor, Frame, VlmClient};
use safehumanoid::scenario_db::audit_database;
use safehumanoid::sim::{analyze, run_scenario, Link, RunLog};

#[derive(Parser)]
#[command(
    name = "safehumanoid",
    version,
    about = "Scene-aware impedance scheduling for a dual-arm robot"
)]
struct Cli {
    #[command(flatten)]
    global: Global,
    #[command(subcommand)]
    command: Command,
}

#[derive(Args)]
struct Global {
    /// TOML run configuration.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Random seed (measurement noise).
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Scenario database CSV, overriding the configured one.
    #[arg(long, global = true)]
    db: Option<PathBuf>,
    /// Scene query rate, Hz.
    #[arg(long, global = true)]
    stream_rate: Option<f64>,
    /// Payload age after which the fallback profile is used, s.
    #[arg(long, global = true)]
    staleness_timeout: Option<f64>,
}

#[derive(Subcommand)]
enum Command {
    /// Check a scenario database; lists every problem found.
    ValidateDb {
        /// CSV file; the bundled seed database when omitted.
        path: Option<PathBuf>,
    },
    /// Describe, embed and retrieve for one scene, printing the payload.
    Query {
        #[command(flatten)]
        scene: SceneArg,
        /// Also print the three nearest scenarios.
        #[arg(long)]
        explain: bool,
        /// Measured human separation, mm.
        #[arg(long)]
        separation: Option<f64>,
    },
    /// Print the descriptor the mock perception model gives for a stub.
    Describe {
        /// Mock scene name.
        #[arg(long)]
        stub: String,
    },
    /// Answer scene queries over TCP until interrupted.
    Serve {
        /// Bind address; overrides `[comms] host`.
        #[arg(long)]
        host: Option<String>,
        /// 0 picks a free port.
        #[arg(long)]
        port: Option<u16>,
        /// Artificial per-query delay, s.
        #[arg(long)]
        latency: Option<f64>,
    },
    /// Run a scenario script and write the tick log.
    Simulate {
        /// Script file or bundled script name.
        script: String,
        /// Log path; `<script name>.csv` by default.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Use a running server instead of the in-process pipeline.
        #[arg(long)]
        remote: Option<String>,
        /// Wall-clock seconds per simulated second in remote mode.
        #[arg(long)]
        time_scale: Option<f64>,
    },
    /// Summarize a tick log.
    Report {
        /// Tick log written by `simulate`.
        log: PathBuf,
        /// Write the per-phase table here as CSV.
        #[arg(long)]
        out: Option<PathBuf>,
    },
}

#[derive(Args)]
#[group(required = true, multiple = false)]
struct SceneArg {
    /// Mock scene name.
    #[arg(long)]
    stub: Option<String>,
    /// JSON scene descriptor file.
    #[arg(long)]
    descriptor: Option<PathBuf>,
}

fn load_config(g: &Global) -> Result<RunConfig> {
    let mut cfg = match &g.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    cfg.apply_env()?;
    if let Some(seed) = g.seed {
        cfg.seed = seed;
    }
    if let Some(db) = &g.db {
        cfg.paths.db = Some(db.clone());
    }
    if let Some(r) = g.stream_rate {
        cfg.comms.policy.stream_rate = r;
    }
    if let Some(t) = g.staleness_timeout {
        cfg.comms.policy.staleness_timeout = t;
    }
    cfg.validate()?;
    Ok(cfg)
}

fn validate_db(path: Option<&Path>) -> ExitCode {
    let result = match path {
        Some(p) => File::open(p).and_then(|f| audit_database(io::BufReader::new(f))),
        None => audit_database(safehumanoid::data::SEED_CSV.as_bytes()),
    };
    let name = path.map_or("seed database".to_string(), |p| p.display().to_string());
    match result {
        Ok(found) if found.is_empty() => {
            println!("{name}: ok");
            ExitCode::SUCCESS
        }
        Ok(found) => {
            for f in &found {
                println!("{f}");
            }
            println!("{name}: {} problem(s)", found.len());
            ExitCode::from(1)
        }
        Err(e) => {
            eprintln!("error: cannot read {name}: {e}");
            ExitCode::from(2)
        }
    }
}

fn format_gains(v: &[f64]) -> String {
    v.iter()
        .map(|x| format!("{x}"))
        .collect::<Vec<_>>()
        .join(" ")
}

fn print_payload(out: &mut impl Write, p: &ImpedancePayload) -> io::Result<()> {
    writeln!(out, "scenario: {}", p.scenario_id)?;
    writeln!(out, "reason: {}", p.reason)?;
    writeln!(out, "speed: {}", p.nominal_v)?;
    writeln!(out, "kp: {}", format_gains(&p.kp))?;
    writeln!(out, "kd: {}", format_gains(&p.kd))
}

fn query(
    pipeline: &Pipeline,
    scene: &SceneArg,
    explain: bool,
    separation: Option<f64>,
) -> Result<()> {
    let source = match (&scene.stub, &scene.descriptor) {
        (Some(name), _) => SceneSource::Stub { name: name.clone() },
        (None, Some(path)) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading {}", path.display()))?;
            let descriptor = serde_json::from_str(&text)
                .with_context(|| format!("parsing {}", path.display()))?;
            SceneSource::Descriptor { descriptor }
        }
        (None, None) => bail!("either --stub or --descriptor is required"),
    };
    let processed = pipeline.process(&SceneQuery {
        source,
        separation_mm: separation,
    })?;
    let mut out = io::stdout().lock();
    writeln!(out, "query: {}", processed.query_text)?;
    print_payload(&mut out, &processed.payload)?;
    writeln!(out, "distance: {:.6}", processed.distance)?;
    if explain {
        let vector = pipeline.embedder.embed(&processed.query_text)?;
        let db = pipeline.index.db();
        for (rank, (i, d)) in pipeline.index.nearest(&vector, 3)?.into_iter().enumerate() {
            writeln!(
                out,
                "candidate {}: {} distance={d:.6}",
                rank + 1,
                db.records()[i].scenario_id
            )?;
        }
    }
    Ok(())
}

fn serve(
    cfg: &RunConfig,
    pipeline: Pipeline,
    host: Option<String>,
    port: Option<u16>,
    latency: Option<f64>,
) -> Result<()> {
    let host = host.unwrap_or_else(|| cfg.comms.host.clone());
    let port = port.unwrap_or(cfg.comms.port);
    let latency = latency.unwrap_or(cfg.comms.server_latency);
    if !(latency >= 0.0 && latency.is_finite()) {
        bail!("latency must be a non-negative number of seconds");
    }
    let listener = TcpListener::bind((host.as_str(), port))
        .with_context(|| format!("binding {host}:{port}"))?;
    let shutdown = Arc::new(AtomicBool::new(false));
    let flag = Arc::clone(&shutdown);
    ctrlc::set_handler(move || flag.store(true, Ordering::Relaxed))?;
    println!("listening on {}", listener.local_addr()?);
    io::stdout().flush()?;
    server_loop(
        listener,
        Arc::new(pipeline),
        LatencyHandle::new(Duration::from_secs_f64(latency)),
        shutdown,
    )?;
    log::info!("server stopped");
    Ok(())
}

fn resolve_addr(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .with_context(|| format!("resolving {addr}"))?
        .next()
        .ok_or_else(|| anyhow!("{addr} resolves to no address"))
}

fn simulate(
    cfg: &mut RunConfig,
    assets: Assets,
    script: &str,
    out: Option<PathBuf>,
    remote: Option<String>,
    time_scale: Option<f64>,
) -> Result<()> {
    let script = cfg.resolve_script(script)?;
    if let Some(ts) = time_scale {
        if !(ts > 0.0 && ts.is_finite()) {
            bail!("--time-scale must be positive");
        }
        cfg.sim.time_scale = ts;
    }
    let link = match &remote {
        Some(addr) => Link::Tcp(resolve_addr(addr)?),
        None => Link::InProcess(Arc::new(assets.pipeline(cfg)?)),
    };
    let ctx = cfg.sim_context(assets.model);
    let log = run_scenario(&script, &ctx, link)?;
    let path = out.unwrap_or_else(|| PathBuf::from(format!("{}.csv", script.name)));
    log.save(&path)
        .with_context(|| format!("writing {}", path.display()))?;
    print!("{}", analyze(&log)?.to_text());
    println!("log written to {}", path.display());
    Ok(())
}

fn report(log: &Path, out: Option<PathBuf>) -> Result<()> {
    let log = RunLog::load(log).with_context(|| format!("reading {}", log.display()))?;
    let report = analyze(&log)?;
    print!("{}", report.to_text());
    if let Some(path) = out {
        let file = File::create(&path).with_context(|| format!("creating {}", path.display()))?;
        report.write_phases_csv(BufWriter::new(file))?;
    }
    Ok(())
}

fn run(cli: Cli) -> Result<()> {
    let mut cfg = load_config(&cli.global)?;
    match cli.command {
        Command::ValidateDb { .. } => unreachable!("handled before configuration"),
        Command::Query {
            scene,
            explain,
            separation,
        } => {
            let assets = Assets::load(&cfg)?;
            query(&assets.pipeline(&cfg)?, &scene, explain, separation)
        }
        Command::Describe { stub } => {
            let assets = Assets::load(&cfg)?;
            let d = assets.vlm.describe(&Frame::Stub(stub))?;
            // round-trip so the printed text is exactly what a server would accept
            println!("{}", parse_descriptor(&d.to_json())?.to_json());
            Ok(())
        }
        Command::Serve {
            host,
            port,
            latency,
        } => {
            let assets = Assets::load(&cfg)?;
            let pipeline = assets.pipeline(&cfg)?;
            serve(&cfg, pipeline, host, port, latency)
        }
        Command::Simulate {
            script,
            out,
            remote,
            time_scale,
        } => {
            let assets = Assets::load(&cfg)?;
            simulate(&mut cfg, assets, &script, out, remote, time_scale)
        }
        Command::Report { log, out } => report(&log, out),
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let cli = Cli::parse();
    if let Command::ValidateDb { path } = &cli.command {
        return validate_db(path.as_deref());
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(1)
        }
    }
}
