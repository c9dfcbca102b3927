use std::io::{Read, Write};
use std::net::{TcpListener, TcpStream};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::thread;
use std::time::{Duration, Instant};

use shaperd::detector::write_frame_record;

fn shaperd(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_shaperd"))
        .args(args)
        .env("SHAPERD_LOG", "error")
        .output()
        .unwrap()
}

fn docs(name: &str) -> String {
    Path::new(env!("CARGO_MANIFEST_DIR"))
        .join("../../docs/config")
        .join(name)
        .to_string_lossy()
        .into_owned()
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let path = dir.join(name);
    std::fs::write(&path, text).unwrap();
    path.to_string_lossy().into_owned()
}

fn stderr(out: &Output) -> String {
    String::from_utf8_lossy(&out.stderr).into_owned()
}

#[test]
fn shipped_configs_are_valid() {
    let out = shaperd(&[
        "check-config",
        "--constraints",
        &docs("constraints.conf"),
        "--timing",
        &docs("timing.conf"),
        "--rules",
        &docs("rules.conf"),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
}

#[test]
fn unknown_subcommand_is_a_usage_error() {
    let out = shaperd(&["bogus"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(stderr(&out).contains("Usage"));
}

#[test]
fn missing_required_flag_is_a_usage_error() {
    assert_eq!(
        shaperd(&["client", "--listen", "127.0.0.1:1"])
            .status
            .code(),
        Some(2)
    );
}

#[test]
fn config_errors_exit_one_with_line() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(
        dir.path(),
        "bad.conf",
        "constraints:\n  - function: entropy_bits_per_byte\n    mode: approx\n    value: 7\n    target: all\n",
    );
    let out = shaperd(&["check-config", "--constraints", &bad]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 3"), "{}", stderr(&out));

    let timing = write(dir.path(), "t.conf", "min_gap_ms: 5\nmax_gap_ms: -1\n");
    let out = shaperd(&["check-config", "--timing", &timing]);
    assert_eq!(out.status.code(), Some(1));
    assert!(stderr(&out).contains("line 2"), "{}", stderr(&out));

    let out = shaperd(&["check-config", "--constraints", "/nonexistent/c.conf"]);
    assert_eq!(out.status.code(), Some(1));
}

#[test]
fn detect_prints_verdict_regardless_of_outcome() {
    let dir = tempfile::tempdir().unwrap();
    let mut capture = Vec::new();
    write_frame_record(&mut capture, &shaperd::bench::generate_stream(1400, 1));
    write_frame_record(&mut capture, b"GET / HTTP/1.1");
    let frames = dir.path().join("capture.bin");
    std::fs::write(&frames, capture).unwrap();

    let out = shaperd(&[
        "detect",
        "--rules",
        &docs("rules.conf"),
        "--frames",
        &frames.to_string_lossy(),
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(stdout.contains("flagged=true"), "{stdout}");
    assert!(stdout.contains("first_flagged_ordinal=0"), "{stdout}");

    // A directory of per-frame files is read in name order.
    let flow = dir.path().join("flow");
    std::fs::create_dir(&flow).unwrap();
    std::fs::write(flow.join("000"), b"plain text frame").unwrap();
    let out = shaperd(&[
        "detect",
        "--rules",
        &docs("rules.conf"),
        "--frames",
        &flow.to_string_lossy(),
    ]);
    assert_eq!(out.status.code(), Some(0));
    assert!(String::from_utf8_lossy(&out.stdout).contains("flagged=false"));
}

#[test]
fn bench_reports_each_constraint_count() {
    let out = shaperd(&[
        "bench",
        "--size",
        "262144",
        "--seed",
        "7",
        "--repeats",
        "1",
        "--max-frame-len",
        "1028",
    ]);
    assert_eq!(out.status.code(), Some(0), "{}", stderr(&out));
    let stdout = String::from_utf8_lossy(&out.stdout);
    let rows: Vec<&str> = stdout
        .lines()
        .filter(|l| l.trim_start().starts_with(|c: char| c.is_ascii_digit()))
        .collect();
    assert_eq!(rows.len(), 3, "{stdout}");
    assert!(stdout.contains("shaping failures: 0"), "{stdout}");
}

fn free_addr() -> String {
    TcpListener::bind("127.0.0.1:0")
        .unwrap()
        .local_addr()
        .unwrap()
        .to_string()
}

struct Endpoint(Child);

impl Drop for Endpoint {
    fn drop(&mut self) {
        let _ = self.0.kill();
        let _ = self.0.wait();
    }
}

fn spawn(args: &[&str]) -> Endpoint {
    Endpoint(
        Command::new(env!("CARGO_BIN_EXE_shaperd"))
            .args(args)
            .env("SHAPERD_LOG", "error")
            .stdout(Stdio::null())
            .spawn()
            .unwrap(),
    )
}

fn connect_retry(addr: &str) -> TcpStream {
    let deadline = Instant::now() + Duration::from_secs(10);
    loop {
        match TcpStream::connect(addr) {
            Ok(s) => return s,
            Err(e) if Instant::now() > deadline => panic!("{addr}: {e}"),
            Err(_) => thread::sleep(Duration::from_millis(20)),
        }
    }
}

#[test]
fn client_and_server_processes_tunnel_an_echo() {
    let echo = TcpListener::bind("127.0.0.1:0").unwrap();
    let echo_addr = echo.local_addr().unwrap().to_string();
    thread::spawn(move || {
        for mut s in echo.incoming().flatten() {
            thread::spawn(move || {
                let mut r = s.try_clone().unwrap();
                let _ = std::io::copy(&mut r, &mut s);
                let _ = s.shutdown(std::net::Shutdown::Write);
            });
        }
    });

    let dir = tempfile::tempdir().unwrap();
    let constraints = write(
        dir.path(),
        "c.conf",
        "constraints:\n  - function: frame_length_bytes\n    mode: le\n    value: 300\n    target: all\n",
    );
    let capture: PathBuf = dir.path().join("wire");
    let (server_addr, client_addr) = (free_addr(), free_addr());
    let _server = spawn(&[
        "server",
        "--listen",
        &server_addr,
        "--forward",
        &echo_addr,
        "--constraints",
        &constraints,
    ]);
    let _client = spawn(&[
        "client",
        "--listen",
        &client_addr,
        "--peer",
        &server_addr,
        "--constraints",
        &constraints,
        "--capture-frames",
        &capture.to_string_lossy(),
    ]);
    connect_retry(&server_addr);

    let data = shaperd::bench::generate_stream(100_000, 9);
    let mut conn = connect_retry(&client_addr);
    let mut reader = conn.try_clone().unwrap();
    let expected = data.clone();
    let writer = thread::spawn(move || {
        conn.write_all(&data).unwrap();
        conn.shutdown(std::net::Shutdown::Write).unwrap();
    });
    let mut echoed = Vec::new();
    reader.read_to_end(&mut echoed).unwrap();
    writer.join().unwrap();
    assert!(echoed == expected);

    let frames = shaperd::detector::load_flow(&capture.with_extension("0")).unwrap();
    assert!(frames.len() >= 100_000 / 296);
    assert!(frames.iter().all(|f| f.len() <= 300));
}
