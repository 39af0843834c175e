//! Workload generation, run orchestration, metrics, and export.

use std::io::Write as _;
use std::sync::{Arc, Mutex};

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::fabric::MsgCounters;
use crate::kvstore::{ClientMetrics, KvSession, Mode, OpResult, PointerArray};
use crate::lincheck::{OpKind, OpRecord, RecResult};
use crate::mcslock::LockConfig;
use crate::mempool::VerbCounters;
use crate::runtime::{block_on, Ctx, FreeRunner, RunEnd, Schedule, Sim, SimMode};
use crate::world::{Event, World, WorldConfig};

/// Standard operation mixes; a write updates the key if present and
/// inserts it otherwise.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MixKind {
    WriteIntensive,
    ReadIntensive,
    WriteOnly,
}

impl MixKind {
    pub fn write_permille(&self) -> u64 {
        match self {
            MixKind::WriteIntensive => 500,
            MixKind::ReadIntensive => 50,
            MixKind::WriteOnly => 1000,
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            MixKind::WriteIntensive => "write_intensive",
            MixKind::ReadIntensive => "read_intensive",
            MixKind::WriteOnly => "write_only",
        }
    }

    pub fn parse(s: &str) -> Option<MixKind> {
        match s {
            "write_intensive" => Some(MixKind::WriteIntensive),
            "read_intensive" => Some(MixKind::ReadIntensive),
            "write_only" => Some(MixKind::WriteOnly),
            _ => None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct WorkloadSpec {
    pub mix: MixKind,
    pub theta: f64,
    pub key_count: u64,
    pub ops_per_client: u64,
    pub seed: u64,
}

/// Zipfian rank sampler (rejection-free zeta-normalized inversion, the
/// YCSB-style generator). Rank 1 is drawn with probability exactly
/// `1 / zeta(n, theta)`; `theta = 0` degenerates to uniform.
pub struct Zipfian {
    n: u64,
    theta: f64,
    zeta_n: f64,
    alpha: f64,
    eta: f64,
    two_threshold: f64,
}

impl Zipfian {
    pub fn new(n: u64, theta: f64) -> Self {
        assert!(n >= 1);
        assert!((0.0..1.0).contains(&theta), "theta must be in [0, 1)");
        if theta == 0.0 {
            return Self {
                n,
                theta,
                zeta_n: n as f64,
                alpha: 1.0,
                eta: 1.0,
                two_threshold: 2.0,
            };
        }
        let zeta_n: f64 = (1..=n).map(|i| 1.0 / (i as f64).powf(theta)).sum();
        let zeta_2 = 1.0 + 0.5f64.powf(theta);
        let alpha = 1.0 / (1.0 - theta);
        let eta = (1.0 - (2.0 / n as f64).powf(1.0 - theta)) / (1.0 - zeta_2 / zeta_n);
        Self {
            n,
            theta,
            zeta_n,
            alpha,
            eta,
            two_threshold: 1.0 + 0.5f64.powf(theta),
        }
    }

    /// Draws a rank in `1..=n`; the caller maps ranks to keys (identity
    /// `key = rank - 1` in this crate's benchmarks).
    pub fn draw<R: Rng>(&self, rng: &mut R) -> u64 {
        if self.theta == 0.0 {
            return rng.gen_range(1..=self.n);
        }
        let u: f64 = rng.gen();
        let uz = u * self.zeta_n;
        if uz < 1.0 {
            return 1;
        }
        if self.n >= 2 && uz < self.two_threshold {
            return 2;
        }
        let rank = 1 + ((self.n as f64) * (self.eta * u - self.eta + 1.0).powf(self.alpha)) as u64;
        rank.clamp(1, self.n)
    }
}

#[derive(Clone, Debug)]
pub struct RunOpts {
    pub prefill: f64,
    pub record_history: bool,
    pub record_events: bool,
    pub sync: crate::casync::SyncParams,
    pub lock: LockConfig,
    pub pool_capacity: u64,
    pub rewrite_on_retry: bool,
    pub max_steps: u64,
}

impl Default for RunOpts {
    fn default() -> Self {
        Self {
            prefill: 1.0,
            record_history: false,
            record_events: false,
            sync: crate::casync::SyncParams::default(),
            lock: LockConfig::default(),
            pool_capacity: crate::mempool::DEFAULT_POOL_CAPACITY,
            rewrite_on_retry: false,
            max_steps: 1 << 42,
        }
    }
}

/// Merged results of one run.
#[derive(Clone, Debug, Serialize)]
pub struct MetricsReport {
    pub mode: String,
    pub local_wc: bool,
    pub clients: u16,
    pub nodes: u16,
    pub keys: u64,
    pub theta: f64,
    pub mix: String,
    pub ops_per_client: u64,
    pub seed: u64,
    pub deterministic: bool,

    pub issued: u64,
    pub committed: u64,
    pub invalid: u64,
    pub fenced: u64,
    pub searches: u64,
    pub inserts: u64,
    pub updates: u64,
    pub deletes: u64,

    pub verbs: VerbCounters,
    pub msgs: MsgCounters,
    pub ptr_cas_attempts: u64,
    pub ptr_cas_failures: u64,

    pub optimistic_decisions: u64,
    pub pessimistic_decisions: u64,
    pub solo_batches: u64,
    pub executor_batches: u64,
    pub combined_global: u64,
    pub combined_local: u64,
    pub upd_committed_optimistic: u64,
    pub upd_committed_pessimistic: u64,

    pub wc_rate: f64,
    pub wc_rate_pessimistic: f64,
    pub avg_wc_batch: f64,
    pub max_wc_batch: u16,
    pub pessimistic_ratio: f64,
    pub ideal_pessimistic_ratio: f64,
    pub verbs_per_committed: f64,
    pub latency_p50: u64,
    pub latency_p99: u64,
    pub steps: u64,
    pub repairs: u64,

    #[serde(skip)]
    pub retry_histogram: std::collections::BTreeMap<u32, u64>,
    #[serde(skip)]
    pub batch_sizes: std::collections::BTreeMap<u16, u64>,
    #[serde(skip)]
    pub per_key_pessimistic: std::collections::BTreeMap<u64, u64>,
}

pub struct RunOutput {
    pub report: MetricsReport,
    pub history: Vec<OpRecord>,
    pub events: Vec<Event>,
}

fn percentile(sorted: &[u64], q: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let idx = ((sorted.len() as f64 * q).ceil() as usize).clamp(1, sorted.len()) - 1;
    sorted[idx]
}

fn client_seed(seed: u64, client: u16) -> u64 {
    seed.wrapping_mul(0x9E37_79B9_7F4A_7C15)
        .wrapping_add(client as u64 + 1)
}

struct ClientArgs {
    array: Arc<PointerArray>,
    mode: Mode,
    zipf: Arc<Zipfian>,
    spec: WorkloadSpec,
    rewrite_on_retry: bool,
    metrics: Arc<Mutex<Vec<(u16, ClientMetrics)>>>,
    history: Option<Arc<Mutex<Vec<OpRecord>>>>,
}

async fn client_main(ctx: Ctx, args: ClientArgs) {
    let mut rng = ChaCha8Rng::seed_from_u64(client_seed(args.spec.seed, ctx.id.0));
    let mut session = KvSession::new(&ctx, args.array.clone(), args.mode);
    session.set_rewrite_on_retry(args.rewrite_on_retry);
    let write_permille = args.spec.mix.write_permille();
    let det = ctx.is_deterministic();
    for i in 0..args.spec.ops_per_client {
        let key = args.zipf.draw(&mut rng) - 1;
        let is_write = rng.gen_range(0..1000) < write_permille;
        let t_inv = ctx.now();
        let wall = (!det).then(std::time::Instant::now);
        let (kind, value, res) = if is_write {
            let value = ((ctx.id.0 as u64) << 40) | i;
            let (kind, res) = session.write_upsert_kinded(key, value).await;
            (kind, Some(value), res)
        } else {
            (OpKind::Search, None, session.search(key).await)
        };
        let t_res = ctx.now();
        let latency = match wall {
            Some(w) => w.elapsed().as_nanos() as u64,
            None => t_res - t_inv,
        };
        session.metrics.latencies.push(latency);
        if let Some(h) = &args.history {
            let result = match res {
                OpResult::Ok(Some(v)) => RecResult::OkValue(v),
                OpResult::Ok(None) => RecResult::Ok,
                OpResult::Invalid | OpResult::Fenced => RecResult::Invalid,
            };
            h.lock().unwrap().push(OpRecord {
                client: ctx.id.0,
                kind,
                key,
                value,
                invoke: t_inv,
                response: t_res,
                result,
            });
        }
    }
    let mut m = session.metrics.clone();
    m.verb_classes = ctx.verb_class_counts();
    args.metrics.lock().unwrap().push((ctx.id.0, m));
}

/// Executes a workload and returns the merged report, plus history and
/// protocol events when recording was requested.
pub fn run(
    spec: &WorkloadSpec,
    mode: Mode,
    clients: u16,
    nodes: u16,
    schedule: &Schedule,
    opts: &RunOpts,
) -> RunOutput {
    assert!(clients >= 1 && nodes >= 1);
    assert!(
        clients % nodes == 0,
        "clients ({clients}) must divide evenly into nodes ({nodes})"
    );
    let world = World::new(WorldConfig {
        pool_capacity: opts.pool_capacity,
        nodes,
        sync: opts.sync,
        lock: opts.lock,
        record_events: opts.record_events,
    });
    let array = Arc::new(
        PointerArray::build(&world.pool, spec.key_count, opts.prefill)
            .expect("pointer array build"),
    );
    let base_verbs = world.pool.stats();
    let base_msgs = world.fabric.msg_stats();
    let zipf = Arc::new(Zipfian::new(spec.key_count, spec.theta));
    let metrics: Arc<Mutex<Vec<(u16, ClientMetrics)>>> = Arc::new(Mutex::new(Vec::new()));
    let history = opts
        .record_history
        .then(|| Arc::new(Mutex::new(Vec::new())));
    let per_node = clients / nodes;

    let steps = match schedule.mode {
        SimMode::Deterministic => {
            let mut sim = Sim::new(world.clone(), schedule);
            for c in 0..clients {
                let ctx = sim.register(c / per_node, c % per_node);
                let id = ctx.id;
                let args = ClientArgs {
                    array: array.clone(),
                    mode,
                    zipf: zipf.clone(),
                    spec: spec.clone(),
                    rewrite_on_retry: opts.rewrite_on_retry,
                    metrics: metrics.clone(),
                    history: history.clone(),
                };
                sim.spawn(id, client_main(ctx, args));
            }
            let end = sim.run(opts.max_steps);
            assert_eq!(end, RunEnd::AllDone, "deterministic run stalled");
            sim.now()
        }
        SimMode::FreeRunning => {
            let runner = FreeRunner::new(world.clone());
            let mut handles = Vec::new();
            for c in 0..clients {
                let ctx = runner.register(c / per_node, c % per_node);
                let args = ClientArgs {
                    array: array.clone(),
                    mode,
                    zipf: zipf.clone(),
                    spec: spec.clone(),
                    rewrite_on_retry: opts.rewrite_on_retry,
                    metrics: metrics.clone(),
                    history: history.clone(),
                };
                handles.push(std::thread::spawn(move || block_on(client_main(ctx, args))));
            }
            for h in handles {
                h.join().expect("client thread panicked");
            }
            0
        }
    };

    // merge per-client metrics in client order for determinism
    let mut per_client = metrics.lock().unwrap().clone();
    per_client.sort_by_key(|(id, _)| *id);
    let mut total = ClientMetrics::default();
    for (_, m) in &per_client {
        total.merge(m);
    }
    let verbs = world.pool.stats().since(&base_verbs);
    let msgs = world.fabric.msg_stats().since(&base_msgs);

    let mut latencies = std::mem::take(&mut total.latencies);
    latencies.sort_unstable();

    let pess_done = total.solo_batches + total.executor_batches + total.combined_global;
    let combined_any = total.combined_global + total.combined_local;
    let batch_count: u64 = total.batch_sizes.values().sum();
    let batch_sum: u64 = total
        .batch_sizes
        .iter()
        .map(|(size, count)| *size as u64 * count)
        .sum();
    let hot_retries: u64 = total
        .retry_histogram
        .iter()
        .filter(|(r, _)| **r >= opts.sync.hotness_threshold)
        .map(|(_, c)| *c)
        .sum();

    let report = MetricsReport {
        mode: mode.kind.name().to_string(),
        local_wc: mode.local_wc,
        clients,
        nodes,
        keys: spec.key_count,
        theta: spec.theta,
        mix: spec.mix.name().to_string(),
        ops_per_client: spec.ops_per_client,
        seed: spec.seed,
        deterministic: schedule.mode == SimMode::Deterministic,
        issued: total.issued,
        committed: total.committed,
        invalid: total.invalid,
        fenced: total.fenced,
        searches: total.searches,
        inserts: total.inserts,
        updates: total.updates,
        deletes: total.deletes,
        verbs,
        msgs,
        ptr_cas_attempts: total.ptr_cas_attempts,
        ptr_cas_failures: total.ptr_cas_failures,
        optimistic_decisions: total.optimistic_decisions,
        pessimistic_decisions: total.pessimistic_decisions,
        solo_batches: total.solo_batches,
        executor_batches: total.executor_batches,
        combined_global: total.combined_global,
        combined_local: total.combined_local,
        upd_committed_optimistic: total.upd_committed_optimistic,
        upd_committed_pessimistic: total.upd_committed_pessimistic,
        wc_rate: ratio(combined_any, total.updates),
        wc_rate_pessimistic: ratio(total.combined_global, pess_done),
        avg_wc_batch: if batch_count == 0 {
            1.0
        } else {
            batch_sum as f64 / batch_count as f64
        },
        max_wc_batch: total.batch_sizes.keys().max().copied().unwrap_or(1),
        pessimistic_ratio: ratio(total.pessimistic_decisions, total.updates),
        ideal_pessimistic_ratio: ratio(hot_retries, total.updates),
        verbs_per_committed: if total.committed == 0 {
            0.0
        } else {
            verbs.total_verbs() as f64 / total.committed as f64
        },
        latency_p50: percentile(&latencies, 0.50),
        latency_p99: percentile(&latencies, 0.99),
        steps,
        repairs: world.pool.repairs(),
        retry_histogram: total.retry_histogram,
        batch_sizes: total.batch_sizes,
        per_key_pessimistic: total.per_key_pessimistic,
    };

    let mut history_out = history
        .map(|h| std::mem::take(&mut *h.lock().unwrap()))
        .unwrap_or_default();
    history_out.sort_by_key(|r| (r.invoke, r.client));
    RunOutput {
        report,
        history: history_out,
        events: world.events_snapshot(),
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

pub const CSV_HEADER: &str = "mode,local_wc,clients,nodes,keys,theta,mix,ops_per_client,seed,\
deterministic,issued,committed,invalid,fenced,searches,inserts,updates,deletes,\
reads,writes,cas,masked_cas,faa,total_verbs,bytes_read,bytes_written,\
msg_enqueue_link,msg_handover,msg_wc_notify,msg_wc_handback,msg_wc_wave,msgs_total,\
ptr_cas_attempts,ptr_cas_failures,retry_total,optimistic_decisions,pessimistic_decisions,\
solo_batches,executor_batches,combined_global,combined_local,\
upd_committed_optimistic,upd_committed_pessimistic,wc_rate,wc_rate_pessimistic,\
avg_wc_batch,max_wc_batch,pessimistic_ratio,ideal_pessimistic_ratio,\
verbs_per_committed,latency_p50,latency_p99,steps,repairs";

impl MetricsReport {
    pub fn csv_row(&self) -> String {
        format!(
            "{},{},{},{},{},{:.6},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{},{:.6},{:.6},{:.6},{},{:.6},{:.6},{:.6},{},{},{},{}",
            self.mode,
            self.local_wc,
            self.clients,
            self.nodes,
            self.keys,
            self.theta,
            self.mix,
            self.ops_per_client,
            self.seed,
            self.deterministic,
            self.issued,
            self.committed,
            self.invalid,
            self.fenced,
            self.searches,
            self.inserts,
            self.updates,
            self.deletes,
            self.verbs.reads,
            self.verbs.writes,
            self.verbs.cas,
            self.verbs.masked_cas,
            self.verbs.faa,
            self.verbs.total_verbs(),
            self.verbs.bytes_read,
            self.verbs.bytes_written,
            self.msgs.enqueue_link,
            self.msgs.handover,
            self.msgs.wc_notify,
            self.msgs.wc_handback,
            self.msgs.wc_wave,
            self.msgs.total(),
            self.ptr_cas_attempts,
            self.ptr_cas_failures,
            self.ptr_cas_failures,
            self.optimistic_decisions,
            self.pessimistic_decisions,
            self.solo_batches,
            self.executor_batches,
            self.combined_global,
            self.combined_local,
            self.upd_committed_optimistic,
            self.upd_committed_pessimistic,
            self.wc_rate,
            self.wc_rate_pessimistic,
            self.avg_wc_batch,
            self.max_wc_batch,
            self.pessimistic_ratio,
            self.ideal_pessimistic_ratio,
            self.verbs_per_committed,
            self.latency_p50,
            self.latency_p99,
            self.steps,
            self.repairs,
        )
    }
}

/// Writes reports as CSV: header plus one row per run. Appending to an
/// existing non-empty file skips the header so sweeps accumulate.
pub fn export_csv(
    reports: &[MetricsReport],
    path: &std::path::Path,
    append: bool,
) -> std::io::Result<()> {
    let need_header = !append
        || std::fs::metadata(path)
            .map(|m| m.len() == 0)
            .unwrap_or(true);
    let mut file = std::fs::OpenOptions::new()
        .create(true)
        .write(true)
        .append(append)
        .truncate(!append)
        .open(path)?;
    if need_header {
        writeln!(file, "{CSV_HEADER}")?;
    }
    for r in reports {
        writeln!(file, "{}", r.csv_row())?;
    }
    Ok(())
}

/// Serializes a history as line-delimited JSON records.
pub fn export_history(history: &[OpRecord], path: &std::path::Path) -> std::io::Result<()> {
    let mut file = std::fs::File::create(path)?;
    for rec in history {
        let line = serde_json::json!({
            "client": rec.client,
            "op": rec.kind.name(),
            "key": rec.key,
            "value": rec.value,
            "t_inv": rec.invoke,
            "t_res": rec.response,
            "result": match rec.result {
                RecResult::Ok => "ok".to_string(),
                RecResult::OkValue(v) => format!("ok:{v}"),
                RecResult::Invalid => "invalid".to_string(),
            },
        });
        writeln!(file, "{line}")?;
    }
    Ok(())
}
