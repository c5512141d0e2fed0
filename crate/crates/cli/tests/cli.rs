use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use markov_machines_cli::format::{self, TraceLine, TraceResult};

fn corpus(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus").join(name)
}

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_markov-machines"));
    c.env_remove("MARKOV_MACHINES_MAX_BELIEFS");
    c
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

fn stderr(o: &Output) -> String {
    String::from_utf8(o.stderr.clone()).unwrap()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn write_temp(dir: &tempfile::TempDir, name: &str, text: &str) -> PathBuf {
    let p = dir.path().join(name);
    std::fs::write(&p, text).unwrap();
    p
}

fn last_line(s: &str) -> serde_json::Value {
    serde_json::from_str(s.lines().last().unwrap()).unwrap()
}

#[test]
fn persist_posterior_after_two_zeros() {
    let m = corpus("persist.json");
    let o = run(&["filter", "--machine", path(&m), "--prior", "1/2,1/2", "--outputs", "0,0"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let last = last_line(&stdout(&o));
    assert_eq!(last["result"], "posterior");
    assert_eq!(last["dense"], "9/10,1/10");
    assert_eq!(last["posterior"]["a"], "9/10");
    let text = stdout(&o);
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines.len(), 4);
    let step1: serde_json::Value = serde_json::from_str(lines[1]).unwrap();
    assert_eq!(step1["predicted"]["0"], "1/2");
    assert_eq!(step1["posterior"]["a"], "3/4");
}

#[test]
fn empty_observation_list_echoes_prior() {
    let m = corpus("persist.json");
    let o = run(&["filter", "--machine", path(&m), "--prior", "1/3,2/3", "--outputs", ""]);
    assert_eq!(o.status.code(), Some(0));
    let last = last_line(&stdout(&o));
    assert_eq!(last["dense"], "1/3,2/3");
}

#[test]
fn impossible_trace_reports_step() {
    let m = corpus("cycle.json");
    let o = run(&["filter", "--machine", path(&m), "--prior", "1,0,0", "--outputs", "c0,c1,c1"]);
    assert_eq!(o.status.code(), Some(4));
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 4, "header, two steps, result");
    let last = last_line(&out);
    assert_eq!(last["result"], "impossible_observation");
    assert_eq!(last["step"], 3);
}

#[test]
fn multi_input_machine_needs_inputs() {
    let m = corpus("switch.json");
    let o = run(&["filter", "--machine", path(&m), "--outputs", "lit"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["filter", "--machine", path(&m), "--inputs", "flip,stay", "--outputs", "lit"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(&["filter", "--machine", path(&m), "--inputs", "flip", "--outputs", "lit", "--prior", "1,0"]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(last_line(&stdout(&o))["dense"], "0/1,1/1");
}

#[test]
fn parse_errors_name_the_field() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(corpus("persist.json")).unwrap();
    let bad = write_temp(&dir, "bad_prob.json", &text.replacen("\"3/4\"", "\"3/x\"", 1));
    let o = run(&["check", "--machine", path(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("transition[0].prob"), "{}", stderr(&o));

    let bad = write_temp(&dir, "unnormalised.json", &text.replacen("\"3/4\"", "\"1/2\"", 1));
    let o = run(&["check", "--machine", path(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("input tick, state a"), "{}", stderr(&o));

    let bad = write_temp(&dir, "unknown.json", &text.replacen("\"version\"", "\"colour\": 1, \"version\"", 1));
    let o = run(&["check", "--machine", path(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("unknown field"), "{}", stderr(&o));
    assert!(stderr(&o).contains(":2"), "line number: {}", stderr(&o));

    let bad = write_temp(&dir, "version.json", &text.replacen("\"v1\"", "\"v0\"", 1));
    let o = run(&["check", "--machine", path(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("version"));

    let bad = write_temp(&dir, "label.json", &text.replacen("\"next_state\": \"a\"", "\"next_state\": \"z\"", 1));
    let o = run(&["check", "--machine", path(&bad)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("transition[0].next_state"), "{}", stderr(&o));
}

#[test]
fn declared_kind_is_validated_on_load() {
    let dir = tempfile::tempdir().unwrap();
    let text = std::fs::read_to_string(corpus("negative/echo_mealy.json")).unwrap();
    let bad = write_temp(&dir, "echo_comb.json", &text.replace("\"mealy\"", "\"comb\""));
    let o = run(&["check", "--machine", path(&bad), "--suite", "comb"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("kind"), "{}", stderr(&o));

    let text = std::fs::read_to_string(corpus("reset_hmm.json")).unwrap();
    let bad = write_temp(&dir, "reset_unifilar.json", &text.replace("\"comb\"", "\"unifilar\""));
    let o = run(&["check", "--machine", path(&bad)]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn readout_must_match_transition() {
    let dir = tempfile::tempdir().unwrap();
    let m = format::parse_machine(&std::fs::read_to_string(corpus("persist.json")).unwrap(), "persist").unwrap();
    let good = format::write_machine(&m);
    assert!(good.contains("\"readout\""));
    let p = write_temp(&dir, "with_readout.json", &good);
    assert_eq!(run(&["check", "--machine", path(&p)]).status.code(), Some(0));
    let mut spec = format::machine_spec(&m);
    spec.readout.as_mut().unwrap()[0].prob = "2/3".into();
    spec.readout.as_mut().unwrap()[1].prob = "1/3".into();
    let p = write_temp(&dir, "bad_readout.json", &serde_json::to_string_pretty(&spec).unwrap());
    let o = run(&["check", "--machine", path(&p)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("readout (state a)"), "{}", stderr(&o));
}

#[test]
fn mealy_file_fails_comb_check_with_witness() {
    let m = corpus("negative/echo_mealy.json");
    let o = run(&["check", "--machine", path(&m), "--suite", "comb"]);
    assert_eq!(o.status.code(), Some(3));
    let out = stdout(&o);
    let line: serde_json::Value = serde_json::from_str(out.lines().nth(1).unwrap()).unwrap();
    assert_eq!(line["status"], "fail");
    assert!(line["detail"].as_str().unwrap().contains("under input"));
    // declared mealy: `all` has nothing it may run
    let o = run(&["check", "--machine", path(&m)]);
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(last_line(&stdout(&o))["skipped"], 4);
}

#[test]
fn generators_pass_exchangeability() {
    for name in ["generator_coins.json", "persist.json", "constant_emitter.json"] {
        let o = run(&["check", "--machine", path(&corpus(name)), "--suite", "exchangeability"]);
        assert_eq!(o.status.code(), Some(0), "{name}");
    }
    let o = run(&["check", "--machine", path(&corpus("negative/alternating.json")), "--suite", "exchangeability"]);
    assert_eq!(o.status.code(), Some(3));
    let o = run(&["check", "--machine", path(&corpus("switch.json")), "--suite", "exchangeability"]);
    assert_eq!(o.status.code(), Some(3), "two inputs: not a generator");
}

#[test]
fn check_all_passes_on_corpus() {
    for name in [
        "persist.json",
        "generator_coins.json",
        "constant_emitter.json",
        "cycle.json",
        "switch.json",
        "reset_hmm.json",
    ] {
        let o = run(&["check", "--machine", path(&corpus(name)), "--suite", "all"]);
        assert_eq!(o.status.code(), Some(0), "{name}: {}", stdout(&o));
        let summary = last_line(&stdout(&o));
        assert_eq!(summary["failed"], 0);
        assert!(summary["passed"].as_u64().unwrap() >= 2, "{name}");
    }
}

#[test]
fn finite_reachable_sets_pass_interpretation() {
    for name in ["reset_hmm.json", "cycle.json", "constant_emitter.json"] {
        let o = run(&["check", "--machine", path(&corpus(name)), "--suite", "interpretation"]);
        assert_eq!(o.status.code(), Some(0));
        let line: serde_json::Value = serde_json::from_str(stdout(&o).lines().nth(1).unwrap()).unwrap();
        assert_eq!(line["status"], "pass", "{name}");
    }
    // point beliefs of a persisting state are fixed
    let o = run(&["check", "--machine", path(&corpus("persist.json")), "--suite", "interpretation", "--prior", "1,0"]);
    let line: serde_json::Value = serde_json::from_str(stdout(&o).lines().nth(1).unwrap()).unwrap();
    assert_eq!(line["status"], "pass");
}

#[test]
fn belief_cap_env_var_truncates() {
    let m = corpus("persist.json");
    let o = bin()
        .args(["check", "--machine", path(&m), "--suite", "interpretation", "--horizon", "1000"])
        .env("MARKOV_MACHINES_MAX_BELIEFS", "20")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(0));
    let line: serde_json::Value = serde_json::from_str(stdout(&o).lines().nth(1).unwrap()).unwrap();
    assert_eq!(line["status"], "skip");
    assert!(line["detail"].as_str().unwrap().contains("more than 20"));
}

#[test]
fn oracle_is_deterministic_and_agrees() {
    for name in ["reset_hmm.json", "persist.json", "cycle.json", "switch.json"] {
        let m = corpus(name);
        let args = ["oracle", "--machine", path(&m), "--seed", "17", "--trials", "200", "--horizon", "5"];
        let a = run(&args);
        let b = run(&args);
        let mut par = args.to_vec();
        par.push("--parallel");
        let c = run(&par);
        assert_eq!(a.status.code(), Some(0), "{name}: {}", stdout(&a));
        assert_eq!(a.stdout, b.stdout);
        assert_eq!(a.stdout, c.stdout);
        let summary: serde_json::Value = serde_json::from_str(stdout(&a).lines().nth(1).unwrap()).unwrap();
        assert_eq!(summary["mismatches"], 0);
        let total = summary["agree"].as_u64().unwrap() + summary["impossible_agree"].as_u64().unwrap();
        assert_eq!(total, 200);
    }
    let m = corpus("cycle.json");
    let o = run(&["oracle", "--machine", path(&m), "--seed", "3"]);
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).lines().nth(1).unwrap()).unwrap();
    assert!(summary["impossible_agree"].as_u64().unwrap() > 0, "uniform outputs hit impossible traces");
    let other = run(&["oracle", "--machine", path(&m), "--seed", "4"]);
    assert_ne!(o.stdout, other.stdout, "the seed matters");
}

#[test]
fn oracle_horizon_zero_and_bounds() {
    let m = corpus("switch.json");
    let o = run(&["oracle", "--machine", path(&m), "--seed", "1", "--horizon", "0", "--trials", "10"]);
    assert_eq!(o.status.code(), Some(0));
    let summary: serde_json::Value = serde_json::from_str(stdout(&o).lines().nth(1).unwrap()).unwrap();
    assert_eq!(summary["agree"], 10);
    assert_eq!(run(&["oracle", "--machine", path(&m)]).status.code(), Some(2), "seed is required");
    assert_eq!(
        run(&["oracle", "--machine", path(&m), "--seed", "1", "--horizon", "13"]).status.code(),
        Some(2)
    );
    assert_eq!(
        run(&["oracle", "--machine", path(&m), "--seed", "1", "--trials", "100001"]).status.code(),
        Some(2)
    );
}

#[test]
fn constant_emitter_unrolls_to_product_family() {
    let m = corpus("constant_emitter.json");
    let o = run(&["unroll", "--machine", path(&m), "--horizon", "3"]);
    assert_eq!(o.status.code(), Some(0));
    let p = format::parse_process(&stdout(&o), "unroll").unwrap();
    let q = |o: usize| if o == 0 { (1, 3) } else { (2, 3) };
    for n in 1..=3 {
        for d in p.level(n).values() {
            for code in 0..(1usize << n) {
                let outs: Vec<usize> = (0..n).map(|k| (code >> (n - 1 - k)) & 1).collect();
                let (mut num, mut den) = (1i64, 1i64);
                for &o in &outs {
                    num *= q(o).0;
                    den *= q(o).1;
                }
                assert_eq!(d.prob(code), markov_machines::r(num, den));
            }
        }
    }
}

#[test]
fn condition_after_unroll_matches_unroll_of_posterior() {
    let dir = tempfile::tempdir().unwrap();
    for (name, input, output, prior) in [
        ("persist.json", "tick", "1", "1/3,2/3"),
        ("switch.json", "flip", "dark", "1/2,1/2"),
        ("reset_hmm.json", "wait", "g", "1/5,4/5"),
    ] {
        let m = corpus(name);
        let process = dir.path().join(format!("{name}.process"));
        let o = run(&["unroll", "--machine", path(&m), "--prior", prior, "--horizon", "4", "--out", path(&process)]);
        assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
        assert!(o.stdout.is_empty());
        let conditioned = run(&["condition", "--process", path(&process), "--input", input, "--output", output]);
        assert_eq!(conditioned.status.code(), Some(0), "{}", stderr(&conditioned));
        let f = run(&["filter", "--machine", path(&m), "--prior", prior, "--inputs", input, "--outputs", output]);
        let post = last_line(&stdout(&f))["dense"].as_str().unwrap().to_string();
        let direct = run(&["unroll", "--machine", path(&m), "--prior", &post, "--horizon", "3"]);
        assert_eq!(stdout(&conditioned), stdout(&direct), "{name}");
    }
}

#[test]
fn condition_on_impossible_output_exits_four() {
    let dir = tempfile::tempdir().unwrap();
    let m = corpus("cycle.json");
    let process = dir.path().join("cycle.process");
    run(&["unroll", "--machine", path(&m), "--prior", "1,0,0", "--horizon", "3", "--out", path(&process)]);
    let o = run(&["condition", "--process", path(&process), "--input", "step", "--output", "c2"]);
    assert_eq!(o.status.code(), Some(4));
    let o = run(&["unroll", "--machine", path(&m), "--horizon", "0"]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn scalar_kalman_step() {
    let o = run(&[
        "kalman",
        "--system",
        path(&corpus("kalman/scalar.json")),
        "--observations",
        path(&corpus("kalman/scalar_obs.json")),
    ]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let last = last_line(&stdout(&o));
    assert_eq!(last["step"], 1);
    assert!((last["hbar"][0].as_f64().unwrap() - 0.5).abs() < 1e-12);
    assert!((last["sigma_p"][0][0].as_f64().unwrap() - 0.5).abs() < 1e-12);
}

#[test]
fn kalman_shape_errors() {
    let dir = tempfile::tempdir().unwrap();
    let obs = write_temp(&dir, "obs.json", r#"{"version":"v1","observations":[[1.0, 2.0]]}"#);
    let o = run(&["kalman", "--system", path(&corpus("kalman/scalar.json")), "--observations", path(&obs)]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("observations[0]"));
    let neg = write_temp(
        &dir,
        "neg.json",
        r#"{"version":"v1","hidden_dim":1,"output_dim":1,"a":[[1.0],[1.0]],"c":[0.0,0.0],"noise":[[0.0,0.0],[0.0,-1.0]],"prior_mean":[0.0],"prior_cov":[[1.0]]}"#,
    );
    let o = run(&["kalman", "--system", path(&neg), "--observations", path(&corpus("kalman/scalar_obs.json"))]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("noise"), "{}", stderr(&o));
}

#[test]
fn out_flag_writes_file() {
    let dir = tempfile::tempdir().unwrap();
    let target = dir.path().join("trace.jsonl");
    let m = corpus("persist.json");
    let o = run(&["filter", "--machine", path(&m), "--outputs", "1", "--out", path(&target)]);
    assert_eq!(o.status.code(), Some(0));
    assert!(o.stdout.is_empty());
    let direct = run(&["filter", "--machine", path(&m), "--outputs", "1"]);
    assert_eq!(std::fs::read(&target).unwrap(), direct.stdout);
}

#[test]
fn unknown_command_is_usage_error() {
    assert_eq!(run(&["frobnicate"]).status.code(), Some(2));
    assert_eq!(run(&["check"]).status.code(), Some(2));
    assert_eq!(run(&["check", "--machine", "/nonexistent/file.json"]).status.code(), Some(2));
}

#[test]
fn traces_round_trip() {
    let m = corpus("persist.json");
    let o = run(&["filter", "--machine", path(&m), "--outputs", "0,1,1"]);
    let text = stdout(&o);
    // the header is not a trace line; the rest parse back
    let body: String = text.lines().skip(1).map(|l| format!("{l}\n")).collect();
    let lines = format::parse_trace(&body, "trace").unwrap();
    assert_eq!(lines.len(), 4);
    assert!(matches!(lines.last(), Some(TraceLine::Result(TraceResult::Posterior { .. }))));
    let again: String = lines.iter().map(|l| serde_json::to_string(l).unwrap() + "\n").collect();
    assert_eq!(again, body);
}

#[test]
fn corpus_round_trips() {
    let dir = Path::new(env!("CARGO_MANIFEST_DIR")).join("corpus");
    let mut files = Vec::new();
    for sub in ["", "negative"] {
        for e in std::fs::read_dir(dir.join(sub)).unwrap() {
            let p = e.unwrap().path();
            if p.extension().is_some_and(|x| x == "json") {
                files.push(p);
            }
        }
    }
    assert!(files.len() >= 8);
    for p in files {
        let text = std::fs::read_to_string(&p).unwrap();
        let m = format::parse_machine(&text, "corpus").unwrap();
        let written = format::write_machine(&m);
        let back = format::parse_machine(&written, "written").unwrap();
        assert_eq!(back, m, "{}", p.display());
        assert_eq!(format::write_machine(&back), written);
    }
    for name in ["kalman/scalar.json", "kalman/tracking.json"] {
        let text = std::fs::read_to_string(corpus(name)).unwrap();
        let sys = format::parse_kalman_system(&text, name).unwrap();
        let back = format::parse_kalman_system(&format::write_kalman_system(&sys), name).unwrap();
        assert_eq!(back, sys);
    }
}
