use std::collections::BTreeMap;
use std::path::PathBuf;
use std::sync::mpsc;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand, ValueEnum};

use polserve::agent::{builtin_factory, EchoAgent, BUILTIN_AGENTS};
use polserve::bench::{emit_report, run_rtt_bench, BenchConfig, BenchMode, Fixture, ReportFormat};
use polserve::envloop::{run_eval, CountdownEnv, EpisodeOptions, IdentityWrapper, NullEnv};
use polserve::image::{CompressionPolicy, DEFAULT_JPEG_QUALITY};
use polserve::server::{serve, AgentSource, ServerConfig};
use polserve::transport::shm::DEFAULT_CAPACITY;
use polserve::{ConnectOptions, PolicyClient, Value};

#[derive(Parser)]
#[command(name = "polserve", version, about = "Serve robot policies over shared memory or TCP")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Host an agent until interrupted.
    Serve(ServeArgs),
    /// Talk to a running server.
    #[command(subcommand)]
    Client(ClientCommand),
    /// Run episodes of a built-in environment against a server.
    Evalloop(EvalArgs),
    /// Latency benchmarks.
    #[command(subcommand)]
    Bench(BenchCommand),
}

#[derive(Args)]
struct ServeArgs {
    #[arg(long, default_value = "127.0.0.1:5555")]
    bind: String,
    /// Built-in agent to host.
    #[arg(long, default_value = "echo", value_parser = clap::builder::PossibleValuesParser::new(BUILTIN_AGENTS))]
    agent: String,
    /// Agent argument as KEY=VALUE; repeatable.
    #[arg(long = "agent-arg", value_name = "KEY=VALUE")]
    agent_args: Vec<String>,
    /// Delegate every session to the server at this address instead.
    #[arg(long, conflicts_with_all = ["agent", "agent_args"])]
    backend: Option<String>,
    /// JPEG quality advertised to stream clients.
    #[arg(long, default_value_t = DEFAULT_JPEG_QUALITY, value_parser = clap::value_parser!(u8).range(1..=100))]
    jpeg_quality: u8,
    /// Advertise raw images to stream clients.
    #[arg(long, conflicts_with = "jpeg_quality")]
    no_compress: bool,
    /// Shared-memory segment size in octets.
    #[arg(long, default_value_t = DEFAULT_CAPACITY)]
    shm_capacity: usize,
}

#[derive(Subcommand)]
enum ClientCommand {
    /// Measure PING round trips.
    Ping {
        #[arg(long)]
        addr: String,
        #[arg(short = 'n', default_value_t = 100)]
        count: usize,
        /// Payload octets per PING.
        #[arg(long, default_value_t = 0)]
        size: usize,
        #[arg(long)]
        force_stream: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum EnvKind {
    Countdown,
    Null,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long, value_enum, default_value = "countdown")]
    env: EnvKind,
    /// Number of episodes.
    #[arg(long, default_value_t = 10)]
    n: usize,
    #[arg(long, default_value_t = 100)]
    max_steps: usize,
    /// Steps until the environment terminates.
    #[arg(long, default_value_t = 5)]
    env_steps: usize,
    #[arg(long)]
    policy_addr: String,
    #[arg(long, default_value = "")]
    instruction: String,
    /// Episode i is seeded with SEED + i.
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    force_stream: bool,
    /// Write the JSON report here instead of stdout.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Subcommand)]
enum BenchCommand {
    /// Round-trip time of ACT requests against an echo agent.
    Rtt(RttArgs),
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum RttMode {
    Shm,
    Stream,
}

#[derive(Args)]
struct RttArgs {
    #[arg(long, value_enum, default_value = "shm")]
    mode: RttMode,
    /// Benchmark an existing server; otherwise an echo server is started
    /// in-process.
    #[arg(long)]
    remote: Option<String>,
    #[arg(long, default_value_t = 2)]
    cameras: usize,
    #[arg(long, default_value_t = 224)]
    size: usize,
    #[arg(long, default_value_t = 1000)]
    iters: usize,
    #[arg(long, default_value_t = 100)]
    warmup: usize,
    #[arg(long, default_value_t = DEFAULT_JPEG_QUALITY, value_parser = clap::value_parser!(u8).range(1..=100))]
    jpeg_quality: u8,
    #[arg(long, conflicts_with = "jpeg_quality")]
    no_compress: bool,
    #[arg(long, default_value = "noise", value_parser = ["noise", "gradient"])]
    fixture: String,
    #[arg(long, default_value_t = 1)]
    batch: usize,
    #[arg(long, default_value_t = 7)]
    action_dim: usize,
    #[arg(long)]
    out: Option<PathBuf>,
    /// Defaults to the extension of --out, or a table on stdout.
    #[arg(long, value_parser = ["csv", "json", "table"])]
    format: Option<String>,
}

fn parse_agent_args(raw: &[String]) -> Result<BTreeMap<String, String>> {
    raw.iter()
        .map(|kv| {
            let (k, v) = kv
                .split_once('=')
                .with_context(|| format!("agent argument {kv:?} is not KEY=VALUE"))?;
            Ok((k.to_owned(), v.to_owned()))
        })
        .collect()
}

fn cmd_serve(a: ServeArgs) -> Result<()> {
    let source = match &a.backend {
        Some(addr) => AgentSource::Backend(addr.clone()),
        None => AgentSource::Local(builtin_factory(&a.agent, &parse_agent_args(&a.agent_args)?)?),
    };
    let mut cfg = ServerConfig::new(a.bind.clone(), source);
    cfg.compression = if a.no_compress {
        CompressionPolicy::disabled()
    } else {
        CompressionPolicy::jpeg(a.jpeg_quality)?
    };
    cfg.shm_capacity = a.shm_capacity;

    let (tx, rx) = mpsc::channel();
    ctrlc::set_handler(move || {
        let _ = tx.send(());
    })
    .context("installing the interrupt handler")?;
    let mut server = serve(cfg)?;
    match &a.backend {
        Some(b) => eprintln!("serving on {} (delegating to {b})", server.local_addr()),
        None => eprintln!("serving {} on {}", a.agent, server.local_addr()),
    }
    let _ = rx.recv();
    eprintln!("shutting down");
    server.shutdown();
    Ok(())
}

fn cmd_ping(addr: &str, count: usize, size: usize, force_stream: bool) -> Result<()> {
    if count == 0 {
        bail!("-n must be at least 1");
    }
    let opts = ConnectOptions {
        force_stream,
        ..Default::default()
    };
    let mut c = PolicyClient::connect(addr, opts)?;
    let payload = vec![0xA5u8; size];
    let mut rtts = Vec::with_capacity(count);
    for _ in 0..count {
        rtts.push(c.ping(&payload)?.as_secs_f64());
    }
    c.close()?;
    let mut sorted = rtts.clone();
    sorted.sort_by(f64::total_cmp);
    let mean = rtts.iter().sum::<f64>() / count as f64;
    let pct = |p| polserve::bench::percentile(&sorted, p) * 1e6;
    println!(
        "{count} pings to {addr} over {}: mean {:.1} us, p50 {:.1} us, p99 {:.1} us, min {:.1} us, max {:.1} us",
        c.mode().label(),
        mean * 1e6,
        pct(50.0),
        pct(99.0),
        sorted[0] * 1e6,
        sorted[count - 1] * 1e6
    );
    Ok(())
}

fn cmd_evalloop(a: EvalArgs) -> Result<()> {
    let opts = ConnectOptions {
        force_stream: a.force_stream,
        ..Default::default()
    };
    let client = PolicyClient::connect(&a.policy_addr, opts)?;
    log::info!("connected via {}", client.mode().label());
    let seeds: Option<Vec<u64>> = a.seed.map(|s| (0..a.n as u64).map(|i| s.wrapping_add(i)).collect());
    let ep = EpisodeOptions {
        max_steps: a.max_steps,
        instruction: Value::Str(a.instruction.clone()),
        ..Default::default()
    };
    let report = match a.env {
        EnvKind::Countdown => {
            let steps = a.env_steps;
            run_eval(|_| CountdownEnv::new(steps), client, &IdentityWrapper, a.n, seeds.as_deref(), &ep)?
        }
        EnvKind::Null => {
            let steps = a.env_steps;
            run_eval(|_| NullEnv::new(steps), client, &IdentityWrapper, a.n, seeds.as_deref(), &ep)?
        }
    };
    let json = serde_json::to_string_pretty(&report)?;
    match &a.out {
        Some(p) => std::fs::write(p, json + "\n").with_context(|| format!("writing {}", p.display()))?,
        None => println!("{json}"),
    }
    let g = &report.aggregate;
    eprintln!(
        "{} episodes: mean steps {:.2}, mean reward {:.2}, success rate {:.2}, errors {}",
        g.episodes, g.mean_steps, g.mean_reward, g.success_rate, g.errors
    );
    Ok(())
}

fn cmd_rtt(a: RttArgs) -> Result<()> {
    let mode = match (a.mode, &a.remote) {
        (RttMode::Shm, _) => BenchMode::Shm,
        (RttMode::Stream, None) => BenchMode::StreamLocal,
        (RttMode::Stream, Some(_)) => BenchMode::StreamRemote,
    };
    let cfg = BenchConfig {
        mode,
        n_cameras: a.cameras,
        image_size: a.size,
        iterations: a.iters,
        warmup: a.warmup,
        jpeg_quality: (!a.no_compress).then_some(a.jpeg_quality),
        action_dim: a.action_dim,
        batch: a.batch,
        fixture: a.fixture.parse::<Fixture>()?,
        seed: 0,
    };
    let local;
    let addr = match &a.remote {
        Some(r) => r.clone(),
        None => {
            let dim = a.action_dim;
            let mut sc = ServerConfig::local("127.0.0.1:0", polserve::agent::factory(move || EchoAgent { dim }));
            let needed = cfg.fixture_obs()?.raw_camera_bytes() * 2 + (1 << 20);
            sc.shm_capacity = sc.shm_capacity.max(needed);
            local = serve(sc)?;
            local.local_addr().to_string()
        }
    };
    let report = run_rtt_bench(&cfg, &addr)?;
    let format = match (&a.format, &a.out) {
        (Some(f), _) => f.parse()?,
        (None, Some(p)) => ReportFormat::from_path(p),
        (None, None) => ReportFormat::Table,
    };
    emit_report(&report, format, a.out.as_deref())?;
    if a.out.is_some() {
        emit_report(&report, ReportFormat::Table, None)?;
    }
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    match Cli::parse().command {
        Command::Serve(a) => cmd_serve(a),
        Command::Client(ClientCommand::Ping {
            addr,
            count,
            size,
            force_stream,
        }) => cmd_ping(&addr, count, size, force_stream),
        Command::Evalloop(a) => cmd_evalloop(a),
        Command::Bench(BenchCommand::Rtt(a)) => cmd_rtt(a),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use clap::CommandFactory;

    #[test]
    fn cli_is_well_formed() {
        Cli::command().debug_assert();
    }

    #[test]
    fn agent_args() {
        let m = parse_agent_args(&["dim=3".into(), "script=1,2;3,4".into()]).unwrap();
        assert_eq!(m["script"], "1,2;3,4");
        assert!(parse_agent_args(&["nope".into()]).is_err());
    }

    #[test]
    fn flag_conflicts() {
        assert!(Cli::try_parse_from(["polserve", "bench", "rtt", "--no-compress", "--jpeg-quality", "50"]).is_err());
        assert!(Cli::try_parse_from(["polserve", "serve", "--agent", "nope"]).is_err());
    }
}
