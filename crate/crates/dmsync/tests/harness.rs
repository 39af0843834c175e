//! Workload generator and metrics-harness contracts.

use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;

use dmsync::bench::{export_csv, export_history, run, MixKind, RunOpts, WorkloadSpec, Zipfian, CSV_HEADER};
use dmsync::kvstore::{Mode, ModeKind};
use dmsync::runtime::{SchedPolicy, Schedule};

#[test]
fn zipf_uniform_limit_chi_squared() {
    let z = Zipfian::new(100, 0.0);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let n_draws = 100_000usize;
    let mut counts = [0u64; 100];
    for _ in 0..n_draws {
        counts[(z.draw(&mut rng) - 1) as usize] += 1;
    }
    let expected = n_draws as f64 / 100.0;
    let chi2: f64 = counts
        .iter()
        .map(|c| {
            let d = *c as f64 - expected;
            d * d / expected
        })
        .sum();
    // df = 99; the 0.001 critical value is ~148.2
    assert!(chi2 < 148.2, "chi-squared {chi2} too large for uniform");
}

#[test]
fn zipf_rank_one_matches_normalization_sum() {
    // independent oracle: compute the normalization sum directly
    let n = 10u64;
    let theta = 0.99f64;
    let norm: f64 = (1..=n).map(|i| 1.0 / (i as f64).powf(theta)).sum();
    let analytic = 1.0 / norm;
    let z = Zipfian::new(n, theta);
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    let draws = 1_000_000u64;
    let mut rank1 = 0u64;
    for _ in 0..draws {
        if z.draw(&mut rng) == 1 {
            rank1 += 1;
        }
    }
    let empirical = rank1 as f64 / draws as f64;
    assert!(
        (empirical - analytic).abs() < 0.01,
        "rank-1 frequency {empirical} vs analytic {analytic}"
    );
}

#[test]
fn zipf_same_seed_same_sequence() {
    let z = Zipfian::new(1000, 0.9);
    let mut a = ChaCha8Rng::seed_from_u64(3);
    let mut b = ChaCha8Rng::seed_from_u64(3);
    for _ in 0..100 {
        assert_eq!(z.draw(&mut a), z.draw(&mut b));
    }
}

#[test]
fn zipf_ranks_stay_in_range() {
    for theta in [0.0, 0.5, 0.9, 0.99] {
        let z = Zipfian::new(37, theta);
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..10_000 {
            let r = z.draw(&mut rng);
            assert!((1..=37).contains(&r));
        }
    }
}

fn small_spec(seed: u64) -> WorkloadSpec {
    WorkloadSpec {
        mix: MixKind::WriteIntensive,
        theta: 0.9,
        key_count: 128,
        ops_per_client: 250,
        seed,
    }
}

#[test]
fn single_client_write_only_commits_every_op() {
    let spec = WorkloadSpec {
        mix: MixKind::WriteOnly,
        theta: 0.0,
        key_count: 64,
        ops_per_client: 500,
        seed: 2,
    };
    let out = run(
        &spec,
        Mode::new(ModeKind::Osync),
        1,
        1,
        &Schedule::deterministic(2, SchedPolicy::RoundRobin),
        &RunOpts::default(),
    );
    assert_eq!(out.report.committed, 500);
    assert_eq!(out.report.issued, 500);
}

#[test]
fn accounting_closes_and_latency_is_monotone() {
    for kind in [ModeKind::Osync, ModeKind::CasBackoff, ModeKind::Mcs, ModeKind::Cider] {
        let out = run(
            &small_spec(6),
            Mode::new(kind),
            8,
            2,
            &Schedule::deterministic(6, SchedPolicy::Random),
            &RunOpts::default(),
        );
        let r = &out.report;
        assert_eq!(r.committed + r.invalid + r.fenced, r.issued, "{kind:?}");
        assert!(r.latency_p99 >= r.latency_p50, "{kind:?}");
        assert!(r.max_wc_batch >= 1);
        if kind == ModeKind::Cider {
            let pess_done = r.solo_batches + r.executor_batches + r.combined_global;
            assert_eq!(
                pess_done + r.upd_committed_optimistic,
                r.upd_committed_pessimistic + r.upd_committed_optimistic,
                "pessimistic episodes account for pessimistic commits"
            );
        } else {
            assert_eq!(r.pessimistic_decisions, 0);
        }
    }
}

#[test]
fn csv_export_is_deterministic_and_appendable() {
    let dir = std::env::temp_dir().join(format!("dmsync-csv-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("out.csv");
    let mk = || {
        run(
            &small_spec(8),
            Mode::new(ModeKind::Cider),
            4,
            1,
            &Schedule::deterministic(8, SchedPolicy::Random),
            &RunOpts::default(),
        )
        .report
    };
    let a = mk();
    let b = mk();
    assert_eq!(a.csv_row(), b.csv_row(), "same seed+config, same bytes");

    export_csv(std::slice::from_ref(&a), &path, false).unwrap();
    let first = std::fs::read(&path).unwrap();
    export_csv(std::slice::from_ref(&a), &path, false).unwrap();
    assert_eq!(first, std::fs::read(&path).unwrap(), "re-export identical");
    export_csv(std::slice::from_ref(&b), &path, true).unwrap();
    let appended = std::fs::read_to_string(&path).unwrap();
    assert_eq!(appended.lines().count(), 3, "header plus two rows");
    assert_eq!(appended.lines().next().unwrap(), CSV_HEADER);
    let cols = CSV_HEADER.split(',').count();
    for line in appended.lines().skip(1) {
        assert_eq!(line.split(',').count(), cols);
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn history_dump_is_line_delimited_json() {
    let dir = std::env::temp_dir().join(format!("dmsync-hist-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("history.jsonl");
    let out = run(
        &WorkloadSpec {
            mix: MixKind::WriteIntensive,
            theta: 0.0,
            key_count: 8,
            ops_per_client: 10,
            seed: 1,
        },
        Mode::new(ModeKind::Osync),
        2,
        1,
        &Schedule::deterministic(1, SchedPolicy::RoundRobin),
        &RunOpts {
            record_history: true,
            ..Default::default()
        },
    );
    export_history(&out.history, &path).unwrap();
    let text = std::fs::read_to_string(&path).unwrap();
    assert_eq!(text.lines().count(), 20);
    for line in text.lines() {
        let v: serde_json::Value = serde_json::from_str(line).unwrap();
        for field in ["client", "op", "key", "t_inv", "t_res", "result"] {
            assert!(v.get(field).is_some(), "missing {field} in {line}");
        }
        assert!(v["t_inv"].as_u64().unwrap() < v["t_res"].as_u64().unwrap());
    }
    std::fs::remove_dir_all(&dir).ok();
}

#[test]
fn free_running_mode_completes_with_closed_accounting() {
    let spec = WorkloadSpec {
        mix: MixKind::WriteIntensive,
        theta: 0.9,
        key_count: 64,
        ops_per_client: 300,
        seed: 13,
    };
    let schedule = Schedule {
        seed: 13,
        mode: dmsync::SimMode::FreeRunning,
        policy: SchedPolicy::Random,
    };
    for kind in [ModeKind::Osync, ModeKind::Mcs, ModeKind::Cider] {
        let out = run(&spec, Mode::new(kind), 4, 2, &schedule, &RunOpts::default());
        let r = &out.report;
        assert_eq!(r.committed + r.invalid + r.fenced, r.issued, "{kind:?}");
        assert_eq!(r.issued, 1200, "{kind:?}");
    }
}
