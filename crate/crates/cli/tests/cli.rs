use std::path::PathBuf;
use std::process::{Command, Output};

fn ftrk(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ftrk")).args(args).env("FTRK_SEED", "42").output().expect("spawn ftrk")
}

fn data(name: &str) -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../core/tests/data").join(name)
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

#[test]
fn vectors_pass_on_reference_files() {
    for f in ["gcmDecrypt256.rsp", "gcmEncryptExtIV256.rsp"] {
        let o = ftrk(&["vectors", data(f).to_str().unwrap()]);
        assert_eq!(o.status.code(), Some(0), "{f}: {}", stdout(&o));
        assert!(stdout(&o).contains(" 0 failed"));
    }
}

#[test]
fn corrupted_tag_is_reported_by_line() {
    let text = std::fs::read_to_string(data("gcmEncryptExtIV256.rsp")).unwrap();
    let (idx, line) = text.lines().enumerate().find(|(_, l)| l.starts_with("Tag = ")).unwrap();
    let hex = line.strip_prefix("Tag = ").unwrap();
    let first = if hex.starts_with('0') { '1' } else { '0' };
    let flipped = format!("{first}{}", &hex[1..]);
    let corrupted: Vec<String> = text
        .lines()
        .enumerate()
        .map(|(i, l)| if i == idx { format!("Tag = {flipped}") } else { l.to_string() })
        .collect();
    let dir = std::env::temp_dir().join(format!("ftrk-cli-{}", std::process::id()));
    std::fs::create_dir_all(&dir).unwrap();
    let path = dir.join("corrupt.rsp");
    std::fs::write(&path, corrupted.join("\n")).unwrap();
    let o = ftrk(&["vectors", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("FAIL"), "{}", stdout(&o));
    assert!(stdout(&o).contains(" 1 failed"), "{}", stdout(&o));
}

#[test]
fn empty_vector_file_passes_with_warning() {
    let path = std::env::temp_dir().join(format!("ftrk-empty-{}.rsp", std::process::id()));
    std::fs::write(&path, "").unwrap();
    let o = ftrk(&["vectors", path.to_str().unwrap()]);
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn missing_or_malformed_vector_file_is_a_usage_error() {
    assert_eq!(ftrk(&["vectors", "/definitely/not/here.rsp"]).status.code(), Some(2));
    let path = std::env::temp_dir().join(format!("ftrk-bad-{}.rsp", std::process::id()));
    std::fs::write(&path, "[Keylen = 256]\nCount = 0\nKey = zz\n").unwrap();
    assert_eq!(ftrk(&["vectors", path.to_str().unwrap()]).status.code(), Some(2));
}

#[test]
fn simulate_emits_json_and_csv() {
    let o = ftrk(&["simulate", "--preset", "resnet50", "--flow", "training", "--batches", "32", "--json"]);
    assert_eq!(o.status.code(), Some(0));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    let rows = v["rows"].as_array().unwrap();
    assert_eq!(rows.len(), 6);
    assert_eq!(rows[0]["mode"], "baseline");
    assert_eq!(rows[0]["reduction_pct"].as_f64(), Some(0.0));

    let o = ftrk(&["simulate", "--preset", "graphsage", "--flow", "inference", "--mode", "all,dc", "--csv"]);
    assert_eq!(o.status.code(), Some(0));
    let out = stdout(&o);
    let mut lines = out.lines();
    assert!(lines.next().unwrap().starts_with("source,preset,flow,mode,n_batches"));
    assert_eq!(lines.count(), 2);
}

#[test]
fn simulate_is_deterministic() {
    let args = ["simulate", "--preset", "ttnn", "--flow", "training", "--batches", "16", "--json"];
    assert_eq!(ftrk(&args).stdout, ftrk(&args).stdout);
}

#[test]
fn simulate_rejects_unknown_inputs() {
    assert_eq!(ftrk(&["simulate", "--preset", "vgg"]).status.code(), Some(2));
    assert_eq!(ftrk(&["simulate", "--preset", "resnet50", "--flow", "serving"]).status.code(), Some(2));
    assert_eq!(ftrk(&["simulate", "--preset", "resnet50", "--mode", "turbo"]).status.code(), Some(2));
}

#[test]
fn bench_handles_empty_payloads() {
    let o = ftrk(&["bench-crypto", "--size", "0", "--chains", "1,2", "--lanes", "2", "--min-ms", "1", "--csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let out = stdout(&o);
    assert!(out.lines().count() > 1);
    for line in out.lines().skip(1) {
        let rate: f64 = line.rsplit(',').next().unwrap().parse().unwrap();
        assert_eq!(rate, 0.0, "{line}");
    }
}

#[test]
fn flow_demo_clean_runs_deliver() {
    for mode in ["baseline", "direct"] {
        let o = ftrk(&["flow-demo", "--mode", mode]);
        assert_eq!(o.status.code(), Some(0), "{mode}: {}", stderr(&o));
    }
}

#[test]
fn flow_demo_attacks_are_rejected() {
    for attack in ["flip", "swap", "replay", "drop"] {
        let o = ftrk(&["flow-demo", "--mode", "direct", "--adversary", attack]);
        assert_eq!(o.status.code(), Some(0), "{attack}: {}{}", stdout(&o), stderr(&o));
        assert!(stderr(&o).contains("attack rejected"), "{attack}");
    }
    for attack in ["flip", "replay", "drop"] {
        let o = ftrk(&["flow-demo", "--mode", "baseline", "--adversary", attack]);
        assert_eq!(o.status.code(), Some(0), "baseline {attack}: {}", stderr(&o));
    }
}

#[test]
fn flow_demo_swap_needs_direct_mode() {
    assert_eq!(ftrk(&["flow-demo", "--mode", "baseline", "--adversary", "swap"]).status.code(), Some(2));
}

#[test]
fn flow_demo_over_tcp_with_json() {
    let o = ftrk(&["flow-demo", "--mode", "direct", "--tcp", "--json"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let v: serde_json::Value = serde_json::from_slice(&o.stdout).unwrap();
    assert_eq!(v.as_array().unwrap().len(), 1);
}

#[test]
fn flow_demo_bad_tcp_address_is_a_usage_error() {
    assert_eq!(ftrk(&["flow-demo", "--mode", "direct", "--tcp", "nonsense"]).status.code(), Some(2));
}

#[test]
fn seed_is_printed_when_unset() {
    let o = Command::new(env!("CARGO_BIN_EXE_ftrk"))
        .args(["flow-demo", "--mode", "direct"])
        .env_remove("FTRK_SEED")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    assert!(stderr(&o).contains("FTRK_SEED="));
}
