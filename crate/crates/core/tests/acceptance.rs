//! Acceptance suite: one PASS/FAIL line per criterion. Runs without the
//! libtest harness so the lines are always printed, and so the throughput
//! measurement is not disturbed by concurrently running checks.

use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use ftrk_core::bench::{bench_crypto, CryptoBenchSpec};
use ftrk_core::cavp::replay_file;
use ftrk_core::chain::{overhead, ChainCodec, ChainPolicy, ChainedEnvelope, Lanes};
use ftrk_core::channel::frame::{HEADER_LEN, RECORD_OVERHEAD};
use ftrk_core::channel::{
    inject_adversary, run_direct_flow, AdversaryAction, AdversaryKind, FlowMode, FlowOptions, FlowOutcome, Hop,
    Session, Transport,
};
use ftrk_core::gcm::{keystream, xor_finalize, Aes256Gcm, Backend, Key256, Nonce96};
use ftrk_core::handshake::{establish_three_party, ChannelMode, DhGroup, Participant, Role};
use ftrk_core::pipeline::*;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(ok: bool, detail: String) -> Verdict {
    if ok {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn backends() -> Vec<Backend> {
    let mut b = vec![Backend::Portable];
    if Backend::hardware_available() {
        b.push(Backend::Hardware);
    }
    b
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/data").join(name)
}

fn aead_ground_truth() -> Verdict {
    let start = Instant::now();
    let (mut total, mut skipped) = (0, 0);
    let mut problems = Vec::new();
    for backend in backends() {
        for file in ["gcmEncryptExtIV256.rsp", "gcmDecrypt256.rsp"] {
            let s = replay_file(&data(file), backend).map_err(|e| e.to_string())?;
            // Records outside the AES-256 / 96-bit IV / 128-bit tag profile
            // are not ingested.
            total += s.total - s.skipped;
            skipped += s.skipped;
            if !s.ok() || s.passed + s.skipped != s.total {
                problems.push(format!("{file} [{}]: {:?}", backend.name(), s.failures));
            }
        }
    }
    let secs = start.elapsed().as_secs_f64();
    check(
        problems.is_empty() && total > 0 && secs < 10.0,
        format!(
            "{total} vector replays bit-exact across {} backend(s) in {secs:.2}s \
             ({skipped} out-of-profile records skipped) {problems:?}",
            backends().len()
        ),
    )
}

fn split_phase_equivalence() -> Verdict {
    let mut rng = ChaCha20Rng::seed_from_u64(0x5917);
    let mut mismatches = 0;
    for i in 0..10_000 {
        let backend = backends()[i % backends().len()];
        let mut key = [0u8; 32];
        rng.fill_bytes(&mut key);
        let key = Key256::from_bytes(key);
        let mut nb = [0u8; 12];
        rng.fill_bytes(&mut nb);
        let nonce = Nonce96::from_bytes(nb);
        let mut aad = vec![0u8; rng.gen_range(0..=64)];
        rng.fill_bytes(&mut aad);
        let mut pt = vec![0u8; rng.gen_range(0..=4096)];
        rng.fill_bytes(&mut pt);

        let cipher = Aes256Gcm::with_backend(&key, backend);
        let (ct, tag) = cipher.seal(nonce, &aad, &pt);
        let opened = cipher.open(nonce, &aad, &ct, &tag).map_err(|e| format!("case {i}: {e}"))?;
        let blocks = ct.len().div_ceil(16);
        let split = xor_finalize(&cipher.keystream(nonce, blocks), &ct).map_err(|e| format!("case {i}: {e}"))?;
        let free = xor_finalize(&keystream(cipher.round_keys(), nonce, blocks), &ct).map_err(|e| e.to_string())?;
        if split != opened || free != opened || opened != pt {
            mismatches += 1;
        }
    }
    check(mismatches == 0, format!("10000 randomized cases, {mismatches} mismatches"))
}

fn codec(key: &Key256, n: usize) -> ChainCodec {
    ChainCodec::new(Aes256Gcm::new(key), ChainPolicy::new(n).unwrap(), Lanes::new(4))
}

fn flip(env: &ChainedEnvelope, bit: usize) -> Option<ChainedEnvelope> {
    let mut e = env.clone();
    let mut b = bit;
    let mut nonce = e.base_nonce.to_bytes();
    if b < 96 {
        nonce[b / 8] ^= 1 << (b % 8);
        e.base_nonce = Nonce96::from_bytes(nonce);
        return Some(e);
    }
    b -= 96;
    if b < 64 {
        e.total_len ^= 1 << b;
        return Some(e);
    }
    b -= 64;
    for r in &mut e.records {
        if b < 8 {
            r.serial ^= 1 << b;
            return Some(e);
        }
        b -= 8;
        if b < r.ct.len() * 8 {
            r.ct[b / 8] ^= 1 << (b % 8);
            return Some(e);
        }
        b -= r.ct.len() * 8;
        if b < 128 {
            r.tag.0[b / 8] ^= 1 << (b % 8);
            return Some(e);
        }
        b -= 128;
    }
    None
}

fn permutations(n: usize) -> Vec<Vec<usize>> {
    if n == 0 {
        return vec![Vec::new()];
    }
    let mut out = Vec::new();
    for p in permutations(n - 1) {
        for pos in 0..=p.len() {
            let mut q = p.clone();
            q.insert(pos, n - 1);
            out.push(q);
        }
    }
    out
}

fn permuted(env: &ChainedEnvelope, order: &[usize]) -> ChainedEnvelope {
    ChainedEnvelope { records: order.iter().map(|&i| env.records[i].clone()).collect(), ..env.clone() }
}

fn multichain_soundness() -> Verdict {
    let mut rng = ChaCha20Rng::seed_from_u64(0xc4a1);
    let key = Key256::from_bytes(rng.gen());
    let (mut round_trips, mut false_rejects, mut tampers, mut false_accepts, mut perms) = (0, 0, 0, 0, 0);
    for n in [1, 2, 3, 8, 16, 255] {
        let c = codec(&key, n);
        for len in [0, 1, 15, 16, 17, 64, n * 16 + 5, 4096, rng.gen_range(0..20_000)] {
            let mut pt = vec![0u8; len];
            rng.fill_bytes(&mut pt);
            let env = c.seal(Nonce96::new(rng.gen(), rng.gen_range(0..1 << 40)), &pt);
            round_trips += 1;
            if c.open(&env).as_deref() != Ok(&pt[..]) {
                false_rejects += 1;
            }
        }
    }
    for n in [1, 2, 3, 4, 8, 16] {
        let c = codec(&key, n);
        let mut pt = [0u8; 64];
        rng.fill_bytes(&mut pt);
        let env = c.seal(Nonce96::new(rng.gen(), 7), &pt);
        let mut bit = 0;
        while let Some(t) = flip(&env, bit) {
            tampers += 1;
            if c.open(&t).is_ok() || c.verify(&t).is_ok() {
                false_accepts += 1;
            }
            bit += 1;
        }
        if n <= 4 {
            for order in permutations(n).into_iter().filter(|o| o.iter().enumerate().any(|(i, &j)| i != j)) {
                perms += 1;
                if c.open(&permuted(&env, &order)).is_ok() {
                    false_accepts += 1;
                }
            }
        }
    }
    let c = codec(&key, 16);
    let mut pt = vec![0u8; 4096];
    rng.fill_bytes(&mut pt);
    let env = c.seal(Nonce96::new(rng.gen(), 9), &pt);
    let identity: Vec<usize> = (0..16).collect();
    let mut random_perms = 0;
    while random_perms < 1000 {
        let mut order = identity.clone();
        order.shuffle(&mut rng);
        if order == identity {
            continue;
        }
        random_perms += 1;
        if c.open(&permuted(&env, &order)).is_ok() {
            false_accepts += 1;
        }
    }
    perms += random_perms;
    check(
        false_accepts == 0 && false_rejects == 0,
        format!(
            "{round_trips} round trips, {tampers} single-bit tampers, {perms} permutations: \
             {false_accepts} false accepts, {false_rejects} false rejects"
        ),
    )
}

fn overhead_arithmetic() -> Verdict {
    let item = 112 * 1024;
    let a = overhead(ChainPolicy::new(16).unwrap(), item).map_err(|e| e.to_string())?;
    let key = Key256::from_bytes([3; 32]);
    let one = codec(&key, 1).seal(Nonce96::new([0; 4], 1), &vec![0u8; item as usize]);
    let many = codec(&key, 16).seal(Nonce96::new([0; 4], 1), &vec![0u8; item as usize]);
    // A single-chain message is plain GCM: ciphertext and one tag. Chained
    // records each add a serial byte of AAD and their own tag.
    let plain: usize = one.records.iter().map(|r| r.ct.len() + 16).sum();
    let chained: usize = many.records.iter().map(|r| r.ct.len() + 1 + 16).sum();
    let measured = chained - plain;
    check(
        a.extra_bytes() == 256 && measured == 256 && a.fraction < 0.005,
        format!(
            "n=16 adds {} bytes ({} tag + {} AAD; {measured} on the wire), {:.4}% of a {item}-byte item",
            a.extra_bytes(),
            a.extra_tag_bytes,
            a.extra_aad_bytes,
            a.fraction * 100.0
        ),
    )
}

fn preset(name: &str, flow: Flow) -> StageTiming {
    derive_timings(&WorkloadProfile::preset(name, flow).unwrap()).unwrap()
}

fn baseline_reconstruction() -> Verdict {
    let c = PipelineConfig::new(100, Mode::Baseline);
    let mut ok = true;
    let mut parts = Vec::new();
    let t = preset("resnet50", Flow::Training);
    let r = schedule(&c, &t).map_err(|e| e.to_string())?;
    let ratio = r.per_batch_transfer_us / t.transfer;
    ok &= (r.per_batch_transfer_us / 3960.0 - 1.0).abs() < 0.01;
    ok &= (ratio / 12.7 - 1.0).abs() < 0.02;
    parts.push(format!("resnet50 {:.1} us/batch, penalty {ratio:.2}x", r.per_batch_transfer_us));
    for (name, quoted) in [("graphsage", 32_600.0), ("ttnn", 51_430.0)] {
        let r = schedule(&c, &preset(name, Flow::Training)).map_err(|e| e.to_string())?;
        ok &= (r.per_batch_transfer_us / quoted - 1.0).abs() < 0.02;
        parts.push(format!("{name} {:.1} us/batch", r.per_batch_transfer_us));
    }
    check(ok, parts.join(", "))
}

fn optimization_reproduction() -> Verdict {
    let targets = [
        ("graphsage", Flow::Inference, 84.6),
        ("graphsage", Flow::Training, 72.5),
        ("ttnn", Flow::Inference, 81.7),
        ("ttnn", Flow::Training, 55.7),
        ("resnet50", Flow::Inference, 31.4),
        ("resnet50", Flow::Training, 8.8),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, flow, target) in targets {
        let got = schedule(&PipelineConfig::new(64, Mode::All), &preset(name, flow)).map_err(|e| e.to_string())?;
        let hit = (got.reduction_pct - target).abs() <= 3.0;
        ok &= hit;
        parts.push(format!("{name} {flow} {:.1}% vs {target}%{}", got.reduction_pct, if hit { "" } else { " (MISS)" }));
    }
    check(ok, parts.join(", "))
}

fn random_timing(rng: &mut ChaCha20Rng) -> StageTiming {
    let d = |rng: &mut ChaCha20Rng| if rng.gen_bool(0.15) { 0.0 } else { rng.gen_range(1..=40) as f64 };
    let proxy = rng.gen_bool(0.5);
    StageTiming {
        cpu_enc: if proxy { d(rng) } else { 0.0 },
        cpu_mac: 0.0,
        cpu_dec: if proxy { d(rng) } else { 0.0 },
        cpu_auth: 0.0,
        transfer: d(rng),
        keystream: d(rng),
        xor_dec: d(rng),
        gpu_auth: d(rng),
        compute: d(rng),
    }
}

const MODES: [Mode; 6] =
    [Mode::Baseline, Mode::DirectComm, Mode::MultiChain { n: 4 }, Mode::ParallelAES, Mode::EagerAuth, Mode::All];

fn scheduler_oracle() -> Verdict {
    let mut rng = ChaCha20Rng::seed_from_u64(0x0ac1e);
    let (mut instances, mut unequal) = (0, 0);
    for round in 0..600 {
        let t = random_timing(&mut rng);
        let proxy = t.cpu_enc > 0.0 || t.cpu_dec > 0.0;
        let n = 1 + round % if proxy { 4 } else { ORACLE_MAX_BATCHES };
        let c = PipelineConfig { lane_budget: 4, ..PipelineConfig::new(n, MODES[round % MODES.len()]) };
        let v = schedule_vs_bruteforce(&c, &t).map_err(|e| e.to_string())?;
        instances += 1;
        unequal += !v.equal as usize;
    }

    let stack =
        |direct, chains, parallel_aes, eager| Mode::Stack(Optimizations { direct, chains, parallel_aes, eager });
    let pairs = [
        (Mode::Baseline, Mode::DirectComm),
        (Mode::Baseline, Mode::MultiChain { n: 4 }),
        (Mode::Baseline, Mode::ParallelAES),
        (Mode::Baseline, Mode::EagerAuth),
        (Mode::ParallelAES, stack(false, 1, true, true)),
        (stack(false, 1, true, true), stack(false, 4, true, true)),
        (Mode::DirectComm, Mode::All),
        (stack(false, 4, true, true), Mode::All),
    ];
    let mut dominance_violations = 0;
    let mut monotone_violations = 0;
    for _ in 0..1000 {
        let t = random_timing(&mut rng);
        let c = PipelineConfig { lane_budget: 4, ..PipelineConfig::new(8, Mode::Baseline) };
        for (less, more) in pairs {
            if makespan(&c.with_mode(more), &t).unwrap() > makespan(&c.with_mode(less), &t).unwrap() {
                dominance_violations += 1;
            }
        }
    }
    for _ in 0..1000 {
        let t = random_timing(&mut rng);
        let c = PipelineConfig { lane_budget: 4, ..PipelineConfig::new(6, MODES[rng.gen_range(0..MODES.len())]) };
        let mut bumped = t;
        let bump = rng.gen_range(1..=20) as f64;
        match rng.gen_range(0..7) {
            0 => bumped.cpu_enc += bump,
            1 => bumped.cpu_dec += bump,
            2 => bumped.transfer += bump,
            3 => bumped.keystream += bump,
            4 => bumped.xor_dec += bump,
            5 => bumped.gpu_auth += bump,
            _ => bumped.compute += bump,
        }
        if makespan(&c, &bumped).unwrap() < makespan(&c, &t).unwrap() {
            monotone_violations += 1;
        }
    }
    check(
        instances >= 500 && unequal == 0 && dominance_violations == 0 && monotone_violations == 0,
        format!(
            "{instances} instances ({unequal} differ from exhaustive optimum); 1000 dominance vectors \
             ({dominance_violations} violations); 1000 monotonicity vectors ({monotone_violations} violations)"
        ),
    )
}

fn session(rng: &mut ChaCha20Rng, mode: ChannelMode) -> Session {
    let keys = establish_three_party(
        DhGroup::modp2048(),
        mode,
        &Participant::new(Role::User),
        &Participant::new(Role::Proxy),
        &Participant::new(Role::Accelerator),
        rng,
    )
    .unwrap();
    Session::new(rng.next_u64(), keys, &Transport::InProcess, FlowOptions::default()).unwrap()
}

fn flow_witnesses() -> Verdict {
    let mut rng = ChaCha20Rng::seed_from_u64(0xf10e);
    let policy = ChainPolicy::new(16).unwrap();
    let mut s = session(&mut rng, ChannelMode::Direct);
    let (mut exposed, mut undelivered) = (0, 0);
    for _ in 0..100 {
        let mut pt = vec![0u8; rng.gen_range(0..8192)];
        rng.fill_bytes(&mut pt);
        let t = run_direct_flow(&mut s, &pt, policy).map_err(|e| e.to_string())?;
        exposed += t.exposed(Role::Proxy) as usize;
        undelivered += (t.delivered.as_deref() != Some(&pt[..])) as usize;
    }

    let mut attacks = 0;
    let mut silent = 0;
    for round in 0..40 {
        for (mode, cmode) in [(FlowMode::Direct, ChannelMode::Direct), (FlowMode::Baseline, ChannelMode::Baseline)] {
            let policy = if mode == FlowMode::Direct { policy } else { ChainPolicy::single() };
            let mut s = session(&mut rng, cmode);
            let mut pt = vec![0u8; 64 * 48];
            rng.fill_bytes(&mut pt);
            let frame_bits = ((HEADER_LEN + policy.n_chains() * RECORD_OVERHEAD + pt.len()) * 8) as u64;
            let hop = if rng.gen() { Hop::UserToProxy } else { Hop::ProxyToAccel };
            let mut kinds = vec![
                (AdversaryKind::FlipBit { bit: rng.gen_range(0..frame_bits) }, 0),
                (AdversaryKind::Replay { batch_id: 0 }, 1),
                (AdversaryKind::Drop, 0),
            ];
            if mode == FlowMode::Direct {
                let i = rng.gen_range(0..16u8);
                let j = (i + rng.gen_range(1..16u8)) % 16;
                kinds.push((AdversaryKind::SwapChains { i, j }, 0));
            }
            let (kind, seq) = kinds[round % kinds.len()];
            if seq == 1 {
                inject_adversary(&mut s, mode, &pt, policy, Vec::new()).map_err(|e| e.to_string())?;
            }
            let t = inject_adversary(&mut s, mode, &pt, policy, vec![AdversaryAction::on(kind, hop, seq)])
                .map_err(|e| e.to_string())?;
            attacks += 1;
            if !matches!(t.outcome, FlowOutcome::Aborted { .. }) || t.delivered.is_some() {
                silent += 1;
            }
        }
    }
    check(
        exposed == 0 && undelivered == 0 && silent == 0,
        format!(
            "100 direct batches: proxy exposure in {exposed}, {undelivered} not delivered; \
             {attacks} injected attacks: {silent} silent corruptions"
        ),
    )
}

fn measured_speedup() -> Verdict {
    let backend = if Backend::hardware_available() { Backend::Hardware } else { Backend::Portable };
    let lanes = 4;
    let chains = vec![1, 2, 4, 8, 16];
    let spec = CryptoBenchSpec {
        sizes: vec![1 << 20],
        chains: chains.clone(),
        lanes,
        backend,
        min_time: Duration::from_millis(300),
    };
    let r = bench_crypto(&spec).map_err(|e| e.to_string())?;
    let rate = |n| r.throughput_of("multichain_verify", 1 << 20, n).unwrap();
    let rates: Vec<f64> = chains.iter().map(|&n| rate(n)).collect();
    let speedup = rate(16) / rate(1);
    let monotone =
        chains.windows(2).zip(rates.windows(2)).filter(|(n, _)| n[1] <= lanes).all(|(_, r)| r[1] >= 0.9 * r[0]);
    check(
        speedup >= 2.0 && monotone,
        format!(
            "{} backend, {lanes} lanes, 1 MiB: verify MB/s by n {:?}; n=16 is {speedup:.2}x n=1",
            backend.name(),
            chains.iter().zip(&rates).map(|(n, r)| format!("{n}:{:.0}", r / 1e6)).collect::<Vec<_>>()
        ),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("AEAD ground truth", aead_ground_truth),
        ("split-phase equivalence", split_phase_equivalence),
        ("multichain soundness", multichain_soundness),
        ("overhead arithmetic", overhead_arithmetic),
        ("baseline reconstruction", baseline_reconstruction),
        ("optimization reproduction (modeled)", optimization_reproduction),
        ("scheduler oracle", scheduler_oracle),
        ("flow security witnesses", flow_witnesses),
        ("measured multichain speedup", measured_speedup),
    ];
    // Keep panics from individual criteria to a single report line.
    std::panic::set_hook(Box::new(|_| {}));
    let mut failed = 0;
    for (name, run) in criteria {
        let start = Instant::now();
        let verdict = catch_unwind(AssertUnwindSafe(run)).unwrap_or_else(|p| {
            Err(p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_default())
        });
        let secs = start.elapsed().as_secs_f64();
        match verdict {
            Ok(detail) => println!("PASS  {name} [{secs:.1}s]: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL  {name} [{secs:.1}s]: {detail}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", 9 - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
