//! Command-line runner: benchmark sweeps, verification suites, and the
//! lockstep contention drill.

use std::collections::HashMap;
use std::path::PathBuf;
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};

use crate::bench::{self, MixKind, RunOpts, WorkloadSpec};
use crate::casync::SyncParams;
use crate::kvstore::{Mode, ModeKind};
use crate::mcslock::{FaultInjection, LockConfig};
use crate::runtime::{SchedPolicy, Schedule, SimMode};
use crate::verify;

#[derive(Parser)]
#[command(
    name = "dmsync",
    version,
    about = "Synchronization-protocol simulator for disaggregated memory KV stores"
)]
struct Cli {
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Run a workload and print/export a metrics row
    Bench(BenchArgs),
    /// Run a deterministic verification suite
    Verify(VerifyArgs),
    /// Lockstep single-key drill comparing optimistic and contention-aware
    /// modes
    Microtest(MicrotestArgs),
}

#[derive(Args, Default, Clone)]
struct BenchArgs {
    /// Flat key=value config file; flags override file entries
    #[arg(long)]
    config: Option<PathBuf>,
    /// osync | cas_backoff | mcs | cider
    #[arg(long)]
    mode: Option<String>,
    #[arg(long)]
    clients: Option<u16>,
    /// Compute nodes; defaults to one per 4 clients
    #[arg(long)]
    nodes: Option<u16>,
    #[arg(long)]
    keys: Option<u64>,
    /// Zipfian skew in [0, 1); 0 = uniform
    #[arg(long)]
    theta: Option<f64>,
    /// write_intensive | read_intensive | write_only
    #[arg(long)]
    mix: Option<String>,
    /// Operations per client
    #[arg(long)]
    ops: Option<u64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Deterministic scheduler (default) vs free-running threads
    #[arg(long)]
    deterministic: Option<bool>,
    /// round_robin | random
    #[arg(long)]
    policy: Option<String>,
    /// Local write combining; defaults per mode (on for baselines)
    #[arg(long)]
    local_wc: Option<bool>,
    #[arg(long)]
    aimd_factor: Option<u32>,
    #[arg(long)]
    initial_credit: Option<u32>,
    #[arg(long)]
    hotness_threshold: Option<u32>,
    /// Fraction of keys populated before the run
    #[arg(long)]
    prefill: Option<f64>,
    /// Re-write the KV block on every swap retry (sensitivity runs)
    #[arg(long)]
    rewrite_on_retry: Option<bool>,
    /// CSV output path
    #[arg(long)]
    out: Option<PathBuf>,
    /// Append to the CSV instead of truncating
    #[arg(long, default_value_t = false)]
    append: bool,
    /// Record the op history and dump it as line-delimited JSON
    #[arg(long)]
    history_out: Option<PathBuf>,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum SuiteName {
    Linearizability,
    Fencing,
    Gwc,
    Epoch,
}

#[derive(Clone, Copy, PartialEq, Eq, ValueEnum)]
enum InjectName {
    /// Deletes no longer advance the lock-entry version
    SkipDeleteVersionBump,
}

#[derive(Args)]
struct VerifyArgs {
    #[arg(value_enum)]
    suite: SuiteName,
    /// Replay a single seed (linearizability suite)
    #[arg(long)]
    seed: Option<u64>,
    /// Seeded runs per sweep
    #[arg(long, default_value_t = 500)]
    seeds: u64,
    /// Protocol fault to inject
    #[arg(long, value_enum)]
    inject: Option<InjectName>,
}

#[derive(Args)]
struct MicrotestArgs {
    /// Lockstep clients (>= 2)
    #[arg(long, default_value_t = 4)]
    clients: u16,
    /// Rounds per mode; the contention-aware mode needs one warm round
    #[arg(long, default_value_t = 4)]
    rounds: u32,
}

/// Fully resolved benchmark configuration: file < flags < defaults.
#[derive(Clone, Debug)]
pub struct RunConfig {
    pub mode: Mode,
    pub clients: u16,
    pub nodes: u16,
    pub spec: WorkloadSpec,
    pub sync: SyncParams,
    pub schedule: Schedule,
    pub prefill: f64,
    pub rewrite_on_retry: bool,
    pub out: Option<PathBuf>,
    pub append: bool,
    pub history_out: Option<PathBuf>,
}

fn parse_config_file(path: &PathBuf) -> Result<HashMap<String, String>, String> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| format!("cannot read config {}: {e}", path.display()))?;
    let mut map = HashMap::new();
    for (lineno, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let Some((k, v)) = line.split_once('=') else {
            return Err(format!(
                "{}:{}: expected key=value, got {line:?}",
                path.display(),
                lineno + 1
            ));
        };
        map.insert(k.trim().to_string(), v.trim().to_string());
    }
    Ok(map)
}

fn pick<T: std::str::FromStr>(
    flag: Option<T>,
    file: &HashMap<String, String>,
    key: &str,
) -> Result<Option<T>, String> {
    if flag.is_some() {
        return Ok(flag);
    }
    match file.get(key) {
        Some(raw) => raw
            .parse::<T>()
            .map(Some)
            .map_err(|_| format!("config key {key}: cannot parse {raw:?}")),
        None => Ok(None),
    }
}

impl RunConfig {
    fn resolve(args: &BenchArgs) -> Result<RunConfig, String> {
        let file = match &args.config {
            Some(p) => parse_config_file(p)?,
            None => HashMap::new(),
        };
        let mode_name =
            pick(args.mode.clone(), &file, "mode")?.unwrap_or_else(|| "cider".to_string());
        let kind = ModeKind::parse(&mode_name)
            .ok_or_else(|| format!("unknown mode {mode_name:?} (osync|cas_backoff|mcs|cider)"))?;
        let clients = pick(args.clients, &file, "clients")?.unwrap_or(64);
        let nodes = pick(args.nodes, &file, "nodes")?.unwrap_or_else(|| clients.div_ceil(4).max(1));
        let keys = pick(args.keys, &file, "keys")?.unwrap_or(1_000_000);
        let theta = pick(args.theta, &file, "theta")?.unwrap_or(0.99);
        let mix_name =
            pick(args.mix.clone(), &file, "mix")?.unwrap_or_else(|| "write_intensive".to_string());
        let mix = MixKind::parse(&mix_name).ok_or_else(|| {
            format!("unknown mix {mix_name:?} (write_intensive|read_intensive|write_only)")
        })?;
        let ops = pick(args.ops, &file, "ops")?.unwrap_or(100_000);
        let seed = pick(args.seed, &file, "seed")?.unwrap_or(1);
        let deterministic = pick(args.deterministic, &file, "deterministic")?.unwrap_or(true);
        let policy_name =
            pick(args.policy.clone(), &file, "policy")?.unwrap_or_else(|| "random".to_string());
        let policy = match policy_name.as_str() {
            "round_robin" => SchedPolicy::RoundRobin,
            "random" => SchedPolicy::Random,
            other => return Err(format!("unknown policy {other:?} (round_robin|random)")),
        };
        let local_wc = pick(args.local_wc, &file, "local_wc")?.unwrap_or(kind.default_local_wc());
        let sync = SyncParams {
            aimd_factor: pick(args.aimd_factor, &file, "aimd_factor")?.unwrap_or(2),
            initial_credit: pick(args.initial_credit, &file, "initial_credit")?.unwrap_or(36),
            hotness_threshold: pick(args.hotness_threshold, &file, "hotness_threshold")?
                .unwrap_or(2),
        };
        sync.validate()?;
        let prefill = pick(args.prefill, &file, "prefill")?.unwrap_or(1.0);
        let rewrite = pick(args.rewrite_on_retry, &file, "rewrite_on_retry")?.unwrap_or(false);
        if clients == 0 || nodes == 0 {
            return Err("clients and nodes must be at least 1".into());
        }
        if clients % nodes != 0 {
            return Err(format!(
                "clients ({clients}) must divide evenly into nodes ({nodes})"
            ));
        }
        if !(0.0..1.0).contains(&theta) {
            return Err(format!("theta must be in [0, 1), got {theta}"));
        }
        if keys == 0 || ops == 0 {
            return Err("keys and ops must be at least 1".into());
        }
        if !(0.0..=1.0).contains(&prefill) {
            return Err(format!("prefill must be in [0, 1], got {prefill}"));
        }
        Ok(RunConfig {
            mode: Mode::with_local_wc(kind, local_wc),
            clients,
            nodes,
            spec: WorkloadSpec {
                mix,
                theta,
                key_count: keys,
                ops_per_client: ops,
                seed,
            },
            sync,
            schedule: Schedule {
                seed,
                mode: if deterministic {
                    SimMode::Deterministic
                } else {
                    SimMode::FreeRunning
                },
                policy,
            },
            prefill,
            rewrite_on_retry: rewrite,
            out: args.out.clone(),
            append: args.append,
            history_out: args.history_out.clone(),
        })
    }
}

fn cmd_bench(args: &BenchArgs) -> ExitCode {
    let cfg = match RunConfig::resolve(args) {
        Ok(c) => c,
        Err(e) => {
            eprintln!("config error: {e}");
            return ExitCode::from(2);
        }
    };
    let opts = RunOpts {
        prefill: cfg.prefill,
        record_history: cfg.history_out.is_some(),
        sync: cfg.sync,
        lock: LockConfig::default(),
        rewrite_on_retry: cfg.rewrite_on_retry,
        ..Default::default()
    };
    let out = bench::run(
        &cfg.spec,
        cfg.mode,
        cfg.clients,
        cfg.nodes,
        &cfg.schedule,
        &opts,
    );
    let r = &out.report;
    println!(
        "mode={} local_wc={} clients={} nodes={} keys={} theta={} mix={} ops/client={} seed={}",
        r.mode, r.local_wc, r.clients, r.nodes, r.keys, r.theta, r.mix, r.ops_per_client, r.seed
    );
    println!(
        "committed={} invalid={} fenced={} verbs={} msgs={} verbs/committed={:.4}",
        r.committed,
        r.invalid,
        r.fenced,
        r.verbs.total_verbs(),
        r.msgs.total(),
        r.verbs_per_committed
    );
    println!(
        "wc_rate={:.4} wc_rate_pessimistic={:.4} avg_batch={:.3} max_batch={} pessimistic_ratio={:.4} ideal={:.4}",
        r.wc_rate,
        r.wc_rate_pessimistic,
        r.avg_wc_batch,
        r.max_wc_batch,
        r.pessimistic_ratio,
        r.ideal_pessimistic_ratio
    );
    println!(
        "retries={} p50={} p99={} steps={} repairs={}",
        r.ptr_cas_failures, r.latency_p50, r.latency_p99, r.steps, r.repairs
    );
    if let Some(path) = &cfg.out {
        if let Err(e) = bench::export_csv(std::slice::from_ref(r), path, cfg.append) {
            eprintln!("csv export failed: {e}");
            return ExitCode::from(2);
        }
        println!("csv: {}", path.display());
    }
    if let Some(path) = &cfg.history_out {
        if let Err(e) = bench::export_history(&out.history, path) {
            eprintln!("history export failed: {e}");
            return ExitCode::from(2);
        }
        println!("history: {} records -> {}", out.history.len(), path.display());
    }
    ExitCode::SUCCESS
}

fn suite_outcome(name: &str, result: Result<String, String>) -> ExitCode {
    match result {
        Ok(msg) => {
            println!("PASS {name}: {msg}");
            ExitCode::SUCCESS
        }
        Err(witness) => {
            println!("FAIL {name}:");
            println!("{witness}");
            ExitCode::from(1)
        }
    }
}

fn cmd_verify(args: &VerifyArgs) -> ExitCode {
    let inject = match args.inject {
        Some(InjectName::SkipDeleteVersionBump) => FaultInjection::SkipDeleteVersionBump,
        None => FaultInjection::None,
    };
    match args.suite {
        SuiteName::Linearizability => {
            let modes = [
                ModeKind::Osync,
                ModeKind::CasBackoff,
                ModeKind::Mcs,
                ModeKind::Cider,
            ];
            for kind in modes {
                let result = match args.seed {
                    Some(seed) => {
                        let (_, _, outcome) = verify::small_run(seed, Mode::new(kind));
                        match outcome {
                            crate::lincheck::Outcome::Pass => Ok(1),
                            crate::lincheck::Outcome::Fail(w) => {
                                Err(format!("seed {seed}: witness {w:#?}"))
                            }
                            crate::lincheck::Outcome::TooLarge(n) => {
                                Err(format!("history too large ({n})"))
                            }
                        }
                    }
                    None => verify::linearizability_suite(Mode::new(kind), args.seeds),
                };
                match result {
                    Ok(n) => println!("PASS linearizability[{}]: {} runs", kind.name(), n),
                    Err(witness) => {
                        println!("FAIL linearizability[{}]:", kind.name());
                        println!("{witness}");
                        return ExitCode::from(1);
                    }
                }
            }
            ExitCode::SUCCESS
        }
        SuiteName::Fencing => suite_outcome("fencing", verify::fencing_suite(inject)),
        SuiteName::Gwc => suite_outcome("gwc", verify::gwc_suite(args.seeds.min(200))),
        SuiteName::Epoch => suite_outcome("epoch", verify::epoch_suite()),
    }
}

fn cmd_microtest(args: &MicrotestArgs) -> ExitCode {
    if args.clients < 2 {
        eprintln!("microtest needs at least 2 clients");
        return ExitCode::from(2);
    }
    let r = verify::microtest(args.clients, args.rounds);
    println!(
        "lockstep drill: {} clients, single key, worst-case retries n(n-1)/2 = {}",
        r.n, r.expected_worst_case
    );
    println!("round  osync-failures  cider-failures  cider-pessimistic  cider-combined");
    for i in 0..r.osync_rounds.len() {
        let o = &r.osync_rounds[i];
        let c = &r.cider_rounds[i];
        println!(
            "{:>5}  {:>14}  {:>14}  {:>17}  {:>14}",
            i, o.ptr_cas_failures, c.ptr_cas_failures, c.pessimistic_decisions, c.combined
        );
    }
    println!(
        "verbs/committed: osync={:.4} cider={:.4}",
        r.osync_verbs_per_committed, r.cider_verbs_per_committed
    );
    ExitCode::SUCCESS
}

pub fn main() -> ExitCode {
    let cli = Cli::parse();
    match &cli.cmd {
        Cmd::Bench(args) => cmd_bench(args),
        Cmd::Verify(args) => cmd_verify(args),
        Cmd::Microtest(args) => cmd_microtest(args),
    }
}
