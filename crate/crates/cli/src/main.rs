//! `ftrk`: vector replay, crypto micro-benchmarks, pipeline simulation and
//! secure-channel demos with an injectable adversary.
//!
//! Exit codes: 0 success (for attack demos: the attack was rejected),
//! 1 verification failure or undetected tampering, 2 usage or input error,
//! 3 transport failure.

use std::net::SocketAddr;
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::Context;
use clap::{Parser, Subcommand, ValueEnum};
use ftrk_core::bench::{self, CryptoBenchSpec, Source};
use ftrk_core::cavp::{parse_vectors, replay, VectorError};
use ftrk_core::chain::ChainPolicy;
use ftrk_core::channel::frame::{HEADER_LEN, RECORD_OVERHEAD};
use ftrk_core::channel::{
    inject_adversary, AdversaryAction, AdversaryKind, FlowError, FlowMode, FlowOptions, FlowOutcome, FlowTranscript,
    Hop, Session, Transport,
};
use ftrk_core::gcm::Backend;
use ftrk_core::handshake::{establish_three_party, ChannelMode, DhGroup, Participant, Role};
use ftrk_core::pipeline::{Flow, Mode, WorkloadProfile};
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

const EXIT_FAILURE: u8 = 1;
const EXIT_USAGE: u8 = 2;
const EXIT_TRANSPORT: u8 = 3;

#[derive(Parser)]
#[command(name = "ftrk", version, about = "Secure accelerator IO: vectors, benchmarks, simulation and flow demos")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Replay a CAVP-format AES-256-GCM vector file.
    Vectors {
        file: PathBuf,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
    },
    /// Measure seal/open and multi-chain verification throughput on this host.
    BenchCrypto {
        /// Payload sizes in bytes (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "1048576")]
        size: Vec<usize>,
        /// Chain counts (comma separated).
        #[arg(long, value_delimiter = ',', default_value = "1,2,4,8,16")]
        chains: Vec<usize>,
        #[arg(long, default_value_t = 8)]
        lanes: usize,
        #[arg(long, value_enum)]
        backend: Option<BackendArg>,
        /// Minimum measuring time per operation, in milliseconds.
        #[arg(long, default_value_t = 200)]
        min_ms: u64,
        #[arg(long)]
        json: bool,
        #[arg(long, conflicts_with = "json")]
        csv: bool,
    },
    /// Schedule an epoch of a workload preset under each optimization.
    Simulate {
        #[arg(long)]
        preset: String,
        #[arg(long, default_value = "training")]
        flow: String,
        /// Modes to run (comma separated): baseline, dc, multichain,
        /// multichain-N, parallel-aes, eager, all. Defaults to every mode.
        #[arg(long, value_delimiter = ',')]
        mode: Vec<String>,
        #[arg(long, default_value_t = 256)]
        batches: usize,
        /// Replace the crypto stages with this host's measured throughput.
        #[arg(long)]
        measured: bool,
        #[arg(long)]
        json: bool,
        #[arg(long, conflicts_with = "json")]
        csv: bool,
    },
    /// Run one batch through the baseline or direct channel, optionally
    /// under attack. Attack runs succeed only if the attack is rejected.
    FlowDemo {
        #[arg(long, value_enum)]
        mode: DemoMode,
        #[arg(long, value_enum)]
        adversary: Option<AttackArg>,
        /// Carry frames over loopback TCP: `user->proxy,proxy->accel`
        /// listen addresses (port 0 picks a free port).
        #[arg(long, num_args = 0..=1, default_missing_value = "127.0.0.1:0,127.0.0.1:0")]
        tcp: Option<String>,
        #[arg(long)]
        json: bool,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Portable,
    Hardware,
}

impl From<BackendArg> for Backend {
    fn from(b: BackendArg) -> Self {
        match b {
            BackendArg::Portable => Backend::Portable,
            BackendArg::Hardware => Backend::Hardware,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum DemoMode {
    Baseline,
    Direct,
}

#[derive(Clone, Copy, ValueEnum)]
enum AttackArg {
    Flip,
    Swap,
    Replay,
    Drop,
}

/// An error carrying its exit code.
struct Failure {
    code: u8,
    error: anyhow::Error,
}

impl<E: Into<anyhow::Error>> From<E> for Failure {
    fn from(e: E) -> Self {
        Failure { code: EXIT_USAGE, error: e.into() }
    }
}

fn fail(code: u8, error: anyhow::Error) -> Failure {
    Failure { code, error }
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Vectors { file, backend } => cmd_vectors(&file, backend.map_or_else(Backend::configured, Into::into)),
        Command::BenchCrypto { size, chains, lanes, backend, min_ms, json, csv } => {
            let spec = CryptoBenchSpec {
                sizes: size,
                chains,
                lanes,
                backend: backend.map_or_else(Backend::configured, Into::into),
                min_time: Duration::from_millis(min_ms),
            };
            cmd_bench_crypto(&spec, json, csv)
        }
        Command::Simulate { preset, flow, mode, batches, measured, json, csv } => {
            cmd_simulate(&preset, &flow, &mode, batches, measured, json, csv)
        }
        Command::FlowDemo { mode, adversary, tcp, json } => cmd_flow_demo(mode, adversary, tcp.as_deref(), json),
    };
    match result {
        Ok(code) => ExitCode::from(code),
        Err(f) => {
            eprintln!("error: {:#}", f.error);
            ExitCode::from(f.code)
        }
    }
}

fn cmd_vectors(path: &std::path::Path, backend: Backend) -> Result<u8, Failure> {
    let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
    let records = match parse_vectors(&text) {
        Ok(r) => r,
        Err(VectorError::Parse { line, msg }) => return Err(anyhow::anyhow!("{}:{line}: {msg}", path.display()).into()),
        Err(e) => return Err(e.into()),
    };
    if records.is_empty() {
        eprintln!("warning: {} contains no vectors", path.display());
    }
    let s = replay(&records, backend);
    for (line, what) in &s.failures {
        println!("FAIL {}:{line}: {what}", path.display());
    }
    println!(
        "{}: {} vectors, {} passed ({} encrypt, {} decrypt, {} expected failures rejected), {} skipped, {} failed [{}]",
        path.display(),
        s.total,
        s.passed,
        s.encrypt,
        s.decrypt,
        s.expected_failures_rejected,
        s.skipped,
        s.failures.len(),
        backend.name()
    );
    Ok(if s.ok() { 0 } else { EXIT_FAILURE })
}

fn cmd_bench_crypto(spec: &CryptoBenchSpec, json: bool, csv: bool) -> Result<u8, Failure> {
    if spec.chains.is_empty() || spec.sizes.is_empty() {
        return Err(anyhow::anyhow!("need at least one size and one chain count").into());
    }
    let report = bench::bench_crypto(spec)?;
    if json {
        println!("{}", report.to_json()?);
    } else if csv {
        print!("{}", report.throughput_csv()?);
    } else {
        print!("{}", report.render_table());
        for &size in &spec.sizes {
            let one = report.throughput_of("multichain_verify", size, 1);
            for &n in spec.chains.iter().filter(|&&n| n > 1) {
                if let (Some(one), Some(many)) = (one, report.throughput_of("multichain_verify", size, n)) {
                    if one > 0.0 {
                        println!("verify speedup n={n} vs n=1 at {size} bytes: {:.2}x", many / one);
                    }
                }
            }
        }
    }
    Ok(0)
}

fn cmd_simulate(
    preset: &str,
    flow: &str,
    modes: &[String],
    batches: usize,
    measured: bool,
    json: bool,
    csv: bool,
) -> Result<u8, Failure> {
    let flow: Flow = flow.parse()?;
    let profile = WorkloadProfile::preset(preset, flow)?;
    let modes: Vec<Mode> = if modes.is_empty() {
        bench::default_modes()
    } else {
        modes.iter().map(|m| m.parse()).collect::<Result<_, _>>()?
    };
    let report = if measured {
        let spec = CryptoBenchSpec { chains: vec![1], lanes: 1, ..CryptoBenchSpec::default() };
        let host = bench::bench_crypto(&spec)?;
        let timing = bench::measured_timing(&profile, &host)?;
        let mut r = bench::simulate_timing(Source::Measured, preset, flow, &timing, &modes, batches)?;
        r.throughput = host.throughput;
        r
    } else {
        bench::simulate(preset, flow, &modes, batches)?
    };
    if json {
        println!("{}", report.to_json()?);
    } else if csv {
        print!("{}", report.decomposition_csv()?);
    } else {
        print!("{}", report.render_table());
    }
    Ok(0)
}

fn seed() -> Result<u64, Failure> {
    match std::env::var("FTRK_SEED") {
        Ok(s) => Ok(s.trim().parse().with_context(|| format!("FTRK_SEED={s:?} is not an unsigned integer"))?),
        Err(_) => {
            let s = rand::thread_rng().gen();
            eprintln!("FTRK_SEED={s}");
            Ok(s)
        }
    }
}

fn parse_tcp(spec: &str) -> Result<Transport, Failure> {
    let addrs: Vec<SocketAddr> = spec
        .split(',')
        .map(|a| a.trim().parse().with_context(|| format!("bad socket address {a:?}")))
        .collect::<Result<_, _>>()?;
    let [user_to_proxy, proxy_to_accel] = addrs[..] else {
        return Err(anyhow::anyhow!("--tcp takes two addresses, got {}", addrs.len()).into());
    };
    Ok(Transport::Tcp { user_to_proxy, proxy_to_accel, timeout: Duration::from_millis(500) })
}

fn flow_failure(e: FlowError) -> Failure {
    match e {
        FlowError::Transport(t) => fail(EXIT_TRANSPORT, anyhow::Error::new(t).context("transport failure")),
        other => fail(EXIT_FAILURE, other.into()),
    }
}

fn cmd_flow_demo(mode: DemoMode, attack: Option<AttackArg>, tcp: Option<&str>, json: bool) -> Result<u8, Failure> {
    let mut rng = ChaCha20Rng::seed_from_u64(seed()?);
    let transport = match tcp {
        Some(spec) => parse_tcp(spec)?,
        None => Transport::InProcess,
    };
    let (flow_mode, channel_mode, policy) = match mode {
        DemoMode::Baseline => (FlowMode::Baseline, ChannelMode::Baseline, ChainPolicy::single()),
        DemoMode::Direct => (FlowMode::Direct, ChannelMode::Direct, ChainPolicy::new(16).expect("16 chains")),
    };
    let keys = establish_three_party(
        DhGroup::modp2048(),
        channel_mode,
        &Participant::new(Role::User),
        &Participant::new(Role::Proxy),
        &Participant::new(Role::Accelerator),
        &mut rng,
    )?;
    let mut session = Session::new(rng.next_u64(), keys, &transport, FlowOptions::default()).map_err(flow_failure)?;

    let mut batch = vec![0u8; 64 * 48];
    rng.fill_bytes(&mut batch);
    let frame_len = (HEADER_LEN + policy.n_chains() * RECORD_OVERHEAD + batch.len()) as u64;

    let mut transcripts: Vec<FlowTranscript> = Vec::new();
    let actions = match attack {
        None => Vec::new(),
        Some(AttackArg::Flip) => {
            let bit = rng.gen_range(0..frame_len * 8);
            let hop = if rng.gen() { Hop::UserToProxy } else { Hop::ProxyToAccel };
            vec![AdversaryAction::on(AdversaryKind::FlipBit { bit }, hop, 0)]
        }
        Some(AttackArg::Swap) => {
            if policy.n_chains() < 2 {
                return Err(fail(EXIT_USAGE, anyhow::anyhow!("swap needs a multi-chain batch; use --mode direct")));
            }
            let i = rng.gen_range(0..policy.n_chains() as u8);
            let j = (i + rng.gen_range(1..policy.n_chains() as u8)) % policy.n_chains() as u8;
            vec![AdversaryAction::on(AdversaryKind::SwapChains { i, j }, Hop::UserToProxy, 0)]
        }
        Some(AttackArg::Replay) => {
            // A clean first batch gives the adversary something to replay.
            transcripts
                .push(inject_adversary(&mut session, flow_mode, &batch, policy, Vec::new()).map_err(flow_failure)?);
            rng.fill_bytes(&mut batch);
            vec![AdversaryAction::on(AdversaryKind::Replay { batch_id: 0 }, Hop::ProxyToAccel, 1)]
        }
        Some(AttackArg::Drop) => vec![AdversaryAction::on(AdversaryKind::Drop, Hop::UserToProxy, 0)],
    };
    let last = inject_adversary(&mut session, flow_mode, &batch, policy, actions).map_err(flow_failure)?;
    let outcome = last.outcome.clone();
    let delivered_intact = last.delivered.as_deref() == Some(&batch[..]);
    transcripts.push(last);

    if json {
        println!("{}", serde_json::to_string_pretty(&transcripts)?);
    } else {
        println!("transport: {}", session.transport_kind());
        for t in &transcripts {
            print!("{}", t.render());
        }
    }
    let code = match (attack, outcome) {
        (None, FlowOutcome::Delivered) if delivered_intact => 0,
        (None, _) => {
            eprintln!("clean run did not deliver the batch");
            EXIT_FAILURE
        }
        (Some(_), FlowOutcome::Aborted { .. }) => {
            eprintln!("attack rejected");
            0
        }
        (Some(_), FlowOutcome::Delivered) => {
            eprintln!("attack NOT detected: tampered batch was delivered");
            EXIT_FAILURE
        }
    };
    Ok(code)
}
