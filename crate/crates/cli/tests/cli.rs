use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;
use tempfile::TempDir;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_pulsekit"));
    c.env_remove("PULSEKIT_LOG");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("spawn pulsekit")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(dir: &TempDir, name: &str) -> PathBuf {
    dir.path().join(name)
}

fn s(path: &Path) -> &str {
    path.to_str().unwrap()
}

const FIG1: &str = r#"{"kind":"double_exp","a":0.06,"b":0.15}"#;

fn fig1_sim(dir: &TempDir, sigma: f64, taus: &[f64]) -> PathBuf {
    let events: Vec<String> = taus
        .iter()
        .zip([1.0, 0.6, 0.8])
        .map(|(t, a)| format!(r#"{{"tau":{t},"alpha":{a}}}"#))
        .collect();
    let cfg = format!(
        r#"{{"rate":0,"duration":200,"dt":1,"sigma":{sigma},"shape":{FIG1},
            "spectrum":{{"components":[{{"kind":"line","center":1.0,"weight":1.0}}]}},
            "seed":5,"fixed_events":[{}]}}"#,
        events.join(",")
    );
    let path = p(dir, "sim.json");
    fs::write(&path, cfg).unwrap();
    path
}

fn read_json(path: &Path) -> Value {
    serde_json::from_str(&fs::read_to_string(path).unwrap()).unwrap()
}

#[test]
fn help_exits_zero_and_lists_flags() {
    let cases: [(&str, &[&str]); 7] = [
        ("simulate", &["--config", "--events", "--signal", "--seed", "--sigma"]),
        ("shape", &["--input", "--output", "--filter", "--rise-k", "--noise-power"]),
        ("detect", &["--mode", "--threshold", "--min-separation", "--max-duration"]),
        ("fit", &["--n", "--n-max", "--sigma", "--init"]),
        ("sparse", &["--c", "--tol", "--max-iter", "--merge-window"]),
        ("spectrum", &["--pileup-correct", "--decompound", "--interval-len"]),
        ("bench", &["--sweep", "--jobs", "--timings", "--seed", "--summary"]),
    ];
    for (cmd, flags) in cases {
        let out = run(&[cmd, "--help"]);
        assert_eq!(out.status.code(), Some(0), "{cmd}");
        let text = String::from_utf8_lossy(&out.stdout);
        for f in flags {
            assert!(text.contains(f), "{cmd} help lacks {f}");
        }
    }
    assert_eq!(run(&["--help"]).status.code(), Some(0));
}

#[test]
fn usage_errors_exit_one() {
    let out = run(&["detect", "--bogus-flag"]);
    assert_eq!(out.status.code(), Some(1));
    assert!(!out.stderr.is_empty());
    assert_eq!(run(&["frobnicate"]).status.code(), Some(1));
    assert_eq!(run(&[]).status.code(), Some(1));
}

#[test]
fn unreadable_input_exits_two_with_path() {
    let dir = TempDir::new().unwrap();
    let missing = p(&dir, "no_such_signal.csv");
    let out = run(&["detect", "--input", s(&missing), "--output", s(&p(&dir, "o.csv")), "--threshold", "0.3"]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("no_such_signal.csv"));

    let bad = p(&dir, "bad.csv");
    fs::write(&bad, "t,value\n0,1\n1,oops\n").unwrap();
    let out = run(&["sparse", "--input", s(&bad), "--activations", s(&p(&dir, "a.csv"))]);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("bad.csv"));
}

#[test]
fn zero_rate_gives_header_only_events() {
    let dir = TempDir::new().unwrap();
    let ev = p(&dir, "ev.csv");
    ok(&[
        "simulate", "--rate", "0", "--duration", "100", "--events", s(&ev), "--signal", s(&p(&dir, "sig.csv")),
    ]);
    assert_eq!(fs::read_to_string(&ev).unwrap(), "tau,alpha\n");
    let echo = read_json(&dir.path().join("ev.csv.config.json"));
    assert_eq!(echo["config"]["rate"], 0.0);
}

#[test]
fn simulate_detect_score_separated_pair() {
    let dir = TempDir::new().unwrap();
    let cfg = fig1_sim(&dir, 0.01, &[10.0, 60.0]);
    let (ev, sig, det, score) = (p(&dir, "ev.csv"), p(&dir, "sig.bin"), p(&dir, "det.csv"), p(&dir, "score.json"));
    ok(&["simulate", "--config", s(&cfg), "--events", s(&ev), "--signal", s(&sig)]);
    ok(&["detect", "--input", s(&sig), "--output", s(&det), "--threshold", "0.3"]);
    ok(&["bench", "--truth", s(&ev), "--estimated", s(&det), "--output", s(&score)]);
    let v = read_json(&score);
    assert_eq!(v["f1"], 1.0, "{v}");
}

#[test]
fn bench_sweep_matches_and_is_reproducible() {
    let dir = TempDir::new().unwrap();
    let sweep = format!(
        r#"{{"trials":4,"seed":11,"points":[{{
            "sim":{{"rate":0,"duration":200,"dt":1,"sigma":0.01,"shape":{FIG1},
                   "spectrum":{{"components":[{{"kind":"line","center":1.0,"weight":1.0}}]}},"seed":0,
                   "fixed_events":[{{"tau":10,"alpha":1.0}},{{"tau":60,"alpha":0.6}}]}},
            "method":{{"method":"peaks","filter":"matched","threshold":0.3}}}}]}}"#
    );
    let sp = p(&dir, "sweep.json");
    fs::write(&sp, sweep).unwrap();
    let (a, b, sum) = (p(&dir, "a.jsonl"), p(&dir, "b.jsonl"), p(&dir, "sum.csv"));
    ok(&["bench", "--sweep", s(&sp), "--output", s(&a), "--summary", s(&sum), "--jobs", "2"]);
    ok(&["bench", "--sweep", s(&sp), "--output", s(&b), "--jobs", "1"]);
    let ta = fs::read_to_string(&a).unwrap();
    assert_eq!(ta, fs::read_to_string(&b).unwrap());
    let lines: Vec<Value> = ta.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 4);
    assert!(lines.iter().all(|r| r["f1"] == 1.0 && r["method"] == "matched_peaks"));
    let summary = fs::read_to_string(&sum).unwrap();
    assert!(summary.starts_with("grid_index,method,trials,failures,precision_mean"));
    assert_eq!(summary.lines().count(), 2);
    assert!(dir.path().join("sum.csv.config.json").exists());
}

#[test]
fn outputs_are_bit_identical_across_runs() {
    let dir = TempDir::new().unwrap();
    let cfg = fig1_sim(&dir, 0.02, &[10.0, 16.0, 90.0]);
    let pipeline = |tag: &str| -> Vec<u8> {
        let f = |n: &str| p(&dir, &format!("{tag}_{n}"));
        ok(&["simulate", "--config", s(&cfg), "--seed", "4", "--events", s(&f("ev.csv")), "--signal", s(&f("sig.csv"))]);
        ok(&["shape", "--input", s(&f("sig.csv")), "--output", s(&f("tr.csv")), "--filter", "trapezoid"]);
        ok(&["detect", "--input", s(&f("sig.csv")), "--output", s(&f("peel.csv")), "--mode", "peel", "--threshold", "0.05"]);
        ok(&["fit", "--input", s(&f("sig.csv")), "--output", s(&f("fit.json")), "--sigma", "0.02"]);
        ok(&["sparse", "--input", s(&f("sig.csv")), "--activations", s(&f("act.csv")), "--events", s(&f("sev.csv")), "--sigma", "0.02"]);
        ok(&["spectrum", "--input", s(&f("peel.csv")), "--output", s(&f("h.csv")), "--hi", "2", "--bins", "8"]);
        let mut all = Vec::new();
        for n in ["ev.csv", "sig.csv", "tr.csv", "peel.csv", "act.csv", "sev.csv", "h.csv"] {
            all.extend(fs::read(f(n)).unwrap());
        }
        let mut fit = read_json(&f("fit.json"));
        fit["config"]["input"] = Value::Null;
        all.extend(fit.to_string().into_bytes());
        all
    };
    assert_eq!(pipeline("x"), pipeline("y"));
}

#[test]
fn fit_selects_two_for_clean_pile_up() {
    let dir = TempDir::new().unwrap();
    let cfg = fig1_sim(&dir, 1e-6, &[10.0, 16.0]);
    let (sig, out) = (p(&dir, "sig.csv"), p(&dir, "fit.json"));
    ok(&["simulate", "--config", s(&cfg), "--events", s(&p(&dir, "ev.csv")), "--signal", s(&sig)]);
    ok(&["fit", "--input", s(&sig), "--output", s(&out), "--sigma", "1e-6"]);
    assert_eq!(read_json(&out)["result"]["order"], 2);
    ok(&["fit", "--input", s(&sig), "--output", s(&out), "--n", "2", "--init", "9,17"]);
    let ev = &read_json(&out)["result"]["events"];
    assert!((ev[0]["tau"].as_f64().unwrap() - 10.0).abs() < 1e-3);
    assert_eq!(run(&["fit", "--input", s(&sig), "--output", s(&out), "--n", "two"]).status.code(), Some(1));
}

#[test]
fn decompound_recovers_line_mean() {
    let dir = TempDir::new().unwrap();
    let cfg = r#"{"rate":0.005,"duration":3000000,"dt":1,"sigma":0,"shape":{"kind":"double_exp","a":0.5,"b":1.5},
        "spectrum":{"components":[{"kind":"line","center":5.0,"weight":1.0}]},"seed":21,"warmup":true}"#;
    let cp = p(&dir, "sim.json");
    fs::write(&cp, cfg).unwrap();
    let (sig, h) = (p(&dir, "sig.bin"), p(&dir, "h.csv"));
    ok(&["simulate", "--config", s(&cp), "--events", s(&p(&dir, "ev.csv")), "--signal", s(&sig)]);
    ok(&[
        "spectrum", "--decompound", "--input", s(&sig), "--output", s(&h), "--rate", "0.005", "--interval-len", "100",
        "--a", "0.5", "--b", "1.5", "--lo", "-0.0625", "--hi", "15.9375", "--bins", "128",
    ]);
    let echo = read_json(&dir.path().join("h.csv.config.json"));
    let mean = echo["mean"].as_f64().unwrap();
    assert!((mean - 5.0).abs() <= 0.25, "mean {mean}");
    assert!(echo["intervals"].as_u64().unwrap() > 20_000);
}

#[test]
fn pileup_round_trip_through_files() {
    let dir = TempDir::new().unwrap();
    let h = p(&dir, "h.csv");
    fs::write(&h, "lo,hi,mass\n-0.5,0.5,0\n0.5,1.5,0.25\n1.5,2.5,0.5\n2.5,3.5,0.25\n3.5,4.5,0\n4.5,5.5,0\n5.5,6.5,0\n6.5,7.5,0\n").unwrap();
    let (f, c) = (p(&dir, "f.csv"), p(&dir, "c.csv"));
    ok(&["spectrum", "--pileup-forward", "--input", s(&h), "--output", s(&f), "--rate", "0.1", "--window", "1"]);
    ok(&["spectrum", "--pileup-correct", "--input", s(&f), "--output", s(&c), "--rate", "0.1", "--window", "1"]);
    let mass = |path: &Path| -> Vec<f64> {
        fs::read_to_string(path)
            .unwrap()
            .lines()
            .skip(1)
            .map(|l| l.split(',').nth(2).unwrap().parse().unwrap())
            .collect()
    };
    let tv: f64 = mass(&h).iter().zip(mass(&c)).map(|(a, b)| (a - b).abs()).sum::<f64>() / 2.0;
    assert!(tv <= 1e-3, "{tv}");
    let out = run(&["spectrum", "--pileup-correct", "--input", s(&h), "--output", s(&c), "--rate", "100", "--window", "1"]);
    assert_eq!(out.status.code(), Some(2));
}

#[test]
fn log_level_comes_from_environment() {
    let dir = TempDir::new().unwrap();
    let (e, sig) = (p(&dir, "e.csv"), p(&dir, "s.csv"));
    let args = ["simulate", "--events", s(&e), "--signal", s(&sig)];
    let quiet = bin().args(args).output().unwrap();
    assert!(quiet.stderr.is_empty());
    let loud = bin().env("PULSEKIT_LOG", "info").args(args).output().unwrap();
    assert!(String::from_utf8_lossy(&loud.stderr).contains("events"));
}
