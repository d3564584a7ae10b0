use std::io::{BufRead, BufReader};
use std::net::TcpListener;
use std::path::Path;
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

fn wotgw() -> Command {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_wotgw"));
    cmd.env("RUST_LOG", "info");
    cmd
}

fn run(args: &[&str]) -> Output {
    wotgw().args(args).output().expect("binary runs")
}

fn write(dir: &Path, name: &str, body: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, body).unwrap();
    path.to_string_lossy().into_owned()
}

struct Killed(Child);

impl Drop for Killed {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

/// Reads stderr until a line contains `needle`, failing after 10 s.
fn wait_for_line(child: &mut Child, needle: &str) -> String {
    let stderr = child.stderr.take().unwrap();
    let (tx, rx) = std::sync::mpsc::channel();
    std::thread::spawn(move || {
        for line in BufReader::new(stderr).lines().map_while(Result::ok) {
            if tx.send(line).is_err() {
                break;
            }
        }
    });
    let deadline = Instant::now() + Duration::from_secs(10);
    let mut seen = Vec::new();
    while let Some(left) = deadline.checked_duration_since(Instant::now()) {
        match rx.recv_timeout(left) {
            Ok(line) if line.contains(needle) => return line,
            Ok(line) => seen.push(line),
            Err(_) => break,
        }
    }
    panic!("no line containing {needle:?}; saw {seen:#?}");
}

fn field<'a>(line: &'a str, key: &str) -> &'a str {
    let start = line
        .find(&format!("{key}="))
        .unwrap_or_else(|| panic!("{key} missing in {line}"))
        + key.len()
        + 1;
    line[start..].split_whitespace().next().unwrap()
}

#[test]
fn gateway_logs_both_listeners_when_ready() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "gw.toml",
        r#"
        [gateway]
        listen_v4 = "127.0.0.1:0"
        listen_v6 = "[::1]:0"
        probe_interval_seconds = 0
        [[devices]]
        id = "power"
        endpoint = "127.0.0.1:9"
        mapping = { NoOfDevices = "ND" }
        "#,
    );
    let mut child = Killed(
        wotgw()
            .args(["gateway", "--config", &config])
            .stderr(Stdio::piped())
            .stdout(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let line = wait_for_line(&mut child.0, "gateway ready");
    let v4: std::net::SocketAddr = field(&line, "v4").parse().unwrap();
    let v6: std::net::SocketAddr = field(&line, "v6").parse().unwrap();
    assert!(v4.is_ipv4() && v4.port() != 0);
    assert!(v6.is_ipv6() && v6.port() != 0);

    // The stats endpoint is live on the reported listener.
    let mut stream = std::net::TcpStream::connect(v4).unwrap();
    use std::io::{Read, Write};
    stream
        .write_all(b"GET /admin/stats HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        .unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).unwrap();
    assert!(reply.starts_with("HTTP/1.1 200"), "{reply}");
    assert!(reply.contains("\"cache_hit_ratio\""));
    assert!(child.0.try_wait().unwrap().is_none(), "gateway exited");
}

#[test]
fn port_in_use_exits_2_naming_the_address() {
    let taken = TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = taken.local_addr().unwrap();
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "gw.toml",
        &format!("[gateway]\nlisten_v4 = \"{addr}\"\nlisten_v6 = \"[::1]:0\"\n"),
    );
    let out = run(&["gateway", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains(&addr.to_string()));
}

#[test]
fn missing_mapping_file_exits_2_at_startup() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(
        dir.path(),
        "gw.toml",
        r#"
        [gateway]
        listen_v4 = "127.0.0.1:0"
        listen_v6 = "[::1]:0"
        [[devices]]
        id = "power"
        endpoint = "127.0.0.1:9"
        mapping = "absent.map"
        "#,
    );
    let started = Instant::now();
    let out = run(&["gateway", "--config", &config]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("absent.map"));
    assert!(started.elapsed() < Duration::from_secs(5));
}

#[test]
fn unparsable_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    let config = write(dir.path(), "gw.toml", "[gateway]\nlisten_vfour = 1\n");
    assert_eq!(run(&["gateway", "--config", &config]).status.code(), Some(2));
    let missing = dir.path().join("nope.toml");
    assert_eq!(
        run(&["gateway", "--config", missing.to_str().unwrap()]).status.code(),
        Some(2)
    );
}

#[test]
fn simulator_reports_its_address() {
    let mut child = Killed(
        wotgw()
            .args(["sim", "--bind", "127.0.0.1:0", "--latency-ms", "1", "--seed", "3"])
            .stderr(Stdio::piped())
            .stdout(Stdio::null())
            .spawn()
            .unwrap(),
    );
    let line = wait_for_line(&mut child.0, "simulator ready");
    let addr: std::net::SocketAddr = field(&line, "addr").parse().unwrap();
    use std::io::{Read, Write};
    let mut stream = std::net::TcpStream::connect(addr).unwrap();
    stream
        .write_all(b"GET /status HTTP/1.1\r\nHost: x\r\nConnection: close\r\n\r\n")
        .unwrap();
    let mut reply = String::new();
    stream.read_to_string(&mut reply).unwrap();
    assert!(reply.ends_with(r#"{"status":"ok"}"#), "{reply}");
}

#[test]
fn simulator_rejects_bad_flags() {
    assert_eq!(run(&["sim", "--failure-rate", "1.5"]).status.code(), Some(2));
    assert_eq!(run(&["sim", "--mapping", "/no/such/file.map"]).status.code(), Some(2));
}

const REPORT: &str = r#"{"scenario":"power@a","mean_response_ms":12.5,"p50_response_ms":11.0,
"p95_response_ms":20.0,"p99_response_ms":25.0,"device_requests_observed":3,"cache_hit_ratio":0.5,
"bytes_on_device_leg":900,"bytes_on_client_leg":1200,"errors":0}"#;

#[test]
fn compare_identity_has_zero_deltas() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.json", REPORT);
    let out = run(&["compare", &a, &a]);
    assert_eq!(out.status.code(), Some(0));
    let table = String::from_utf8(out.stdout).unwrap();
    let rows: Vec<&str> = table.lines().skip(3).collect();
    assert_eq!(rows.len(), 9);
    for row in rows {
        let cols: Vec<&str> = row.split_whitespace().collect();
        assert_eq!(&cols[3..], ["+0.000", "+0.0%"], "{row}");
    }
}

#[test]
fn compare_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let a = write(dir.path(), "a.json", REPORT);
    let other = write(dir.path(), "b.json", &REPORT.replace("power@a", "other"));
    assert_eq!(run(&["compare", &a, &other]).status.code(), Some(1));
    let broken = write(dir.path(), "c.json", "{\"scenario\":");
    assert_eq!(run(&["compare", &a, &broken]).status.code(), Some(2));
    let extra = write(
        dir.path(),
        "d.json",
        &REPORT.replace("\"errors\":0", "\"errors\":0,\"x\":1"),
    );
    assert_eq!(run(&["compare", &a, &extra]).status.code(), Some(2));
}

#[test]
fn bench_writes_report_and_plot() {
    let dir = tempfile::tempdir().unwrap();
    let scenario = write(
        dir.path(),
        "s.json",
        r#"{"name":"tiny","clients":2,"requests_per_client":5,
            "request_body":{"values":[{"NoOfDevices":[2]}]},"codec_enabled":true,
            "cache_enabled":true,"device_latency":2,"warmup_requests":1,"seed":4}"#,
    );
    let report = dir.path().join("r.json");
    let plot = dir.path().join("r.svg");
    let out = run(&[
        "bench",
        "--scenario",
        &scenario,
        "--out",
        report.to_str().unwrap(),
        "--plot",
        plot.to_str().unwrap(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stderr));
    let parsed: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(parsed["scenario"], "tiny");
    assert_eq!(parsed["errors"], 0);
    // The warmup request filled the cache.
    assert_eq!(parsed["device_requests_observed"], 0);
    assert_eq!(parsed["cache_hit_ratio"], 1.0);
    assert!(std::fs::read_to_string(&plot).unwrap().contains("n=10"));
}

#[test]
fn bench_scenario_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "s.json", r#"{"name":"x","clients":0}"#);
    let out = dir.path().join("r.json");
    assert_eq!(
        run(&["bench", "--scenario", &bad, "--out", out.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    let zero = write(
        dir.path(),
        "z.json",
        r#"{"name":"z","clients":0,"requests_per_client":1,"request_body":{},
            "codec_enabled":false,"cache_enabled":false,"device_latency":0,
            "warmup_requests":0,"seed":1}"#,
    );
    assert_eq!(
        run(&["bench", "--scenario", &zero, "--out", out.to_str().unwrap()])
            .status
            .code(),
        Some(2)
    );
    assert!(!out.exists());
}

#[test]
fn shipped_configs_load() {
    let root = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs");
    let gw = wotgw_core::gateway::ResolvedConfig::load(root.join("gateway.toml")).unwrap();
    assert_eq!(gw.devices.len(), 1);
    assert_eq!(gw.devices[0].mapping.len(), 4);
    assert_eq!(gw.devices[0].mapping.short_code("NoOfDevices"), Some("ND"));
    for name in ["cache-on", "cache-off", "codec-on", "codec-off"] {
        let s = wotgw_cli::BenchScenario::load(root.join(format!("scenarios/{name}.json"))).unwrap();
        assert!(s.total_requests() > 0, "{name}");
    }
}
