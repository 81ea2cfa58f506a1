use std::time::Duration;

use ftrk_core::bench::*;
use ftrk_core::gcm::Backend;
use ftrk_core::pipeline::Flow;

const MIB: usize = 1 << 20;

fn backend() -> Backend {
    if Backend::hardware_available() {
        Backend::Hardware
    } else {
        Backend::Portable
    }
}

// Both timing checks live in one test so they never share the CPU.
#[test]
fn measured_multichain_throughput() {
    let spec = CryptoBenchSpec {
        sizes: vec![MIB],
        chains: vec![1, 16],
        lanes: 8,
        backend: backend(),
        min_time: Duration::from_millis(300),
    };
    let r = bench_crypto(&spec).unwrap();
    let one = r.throughput_of("multichain_verify", MIB, 1).unwrap();
    let sixteen = r.throughput_of("multichain_verify", MIB, 16).unwrap();
    assert!(sixteen >= 2.0 * one, "n=16 {sixteen:.3e} B/s vs n=1 {one:.3e} B/s");

    // A single chain on a single lane is plain GCM plus bookkeeping.
    let spec = CryptoBenchSpec { chains: vec![1], lanes: 1, ..spec };
    let r = bench_crypto(&spec).unwrap();
    let plain = r.throughput_of("open", MIB, 1).unwrap();
    let chained = r.throughput_of("multichain_open", MIB, 1).unwrap();
    assert!(chained >= 0.9 * plain, "multichain {chained:.3e} B/s vs open {plain:.3e} B/s");
}

#[test]
fn empty_payloads_report_zero_throughput() {
    let spec = CryptoBenchSpec {
        sizes: vec![0],
        chains: vec![1, 4],
        lanes: 2,
        backend: Backend::Portable,
        min_time: Duration::from_millis(1),
    };
    let r = bench_crypto(&spec).unwrap();
    assert!(!r.throughput.is_empty());
    assert!(r.throughput.iter().all(|row| row.bytes_per_sec == 0.0 && row.iterations > 0));
}

#[test]
fn simulated_report_round_trips_through_json_and_csv() {
    let r = simulate("graphsage", Flow::Training, &default_modes(), 32).unwrap();
    assert_eq!(r.rows.len(), default_modes().len());
    assert_eq!(BenchReport::from_json(&r.to_json().unwrap()).unwrap(), r);
    let csv = r.decomposition_csv().unwrap();
    assert_eq!(csv.lines().next().unwrap().split(',').count(), DECOMPOSITION_COLUMNS.len());
    assert_eq!(BenchReport::decomposition_from_csv(&csv).unwrap(), r.rows);
    let all = r.row("all").unwrap();
    assert!(all.reduction_pct > 60.0);
    assert_eq!(r.row("baseline").unwrap().reduction_pct, 0.0);
}
