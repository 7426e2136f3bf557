use std::fs;
use std::process::{Command, Output};

fn neurovm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_neurovm"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8(o.stdout.clone()).unwrap()
}

#[test]
fn energy_defaults_cover_twenty_accelerators() {
    let o = neurovm(&["bench-energy"]);
    assert!(o.status.success());
    let out = stdout(&o);
    let lines: Vec<&str> = out.lines().collect();
    assert_eq!(lines[0], "accelerators,energy_mj,dynamic_mj,static_mj,makespan_ns");
    assert_eq!(lines.len(), 21);
    assert!(lines[1].starts_with("1,25,"));
    let last: f64 = lines[20].split(',').nth(1).unwrap().parse().unwrap();
    assert!((last - 45.0).abs() < 1e-6);
}

#[test]
fn throughput_flags_select_cells() {
    let o = neurovm(&["bench-throughput", "--vm-counts", "1,4", "--sizes", "4096,1048576"]);
    assert!(o.status.success());
    assert_eq!(stdout(&o).lines().count(), 1 + 4);
}

#[test]
fn reconfig_single_count_is_one_row() {
    let o = neurovm(&["bench-reconfig", "--vm-counts", "1"]);
    assert!(o.status.success());
    let out = stdout(&o);
    assert_eq!(out.lines().count(), 2);
    assert_eq!(out.lines().nth(1).unwrap(), "1,4,300000000,7431250,300000000,7431250");
}

#[test]
fn out_and_trace_files_are_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let path = |n: &str| dir.path().join(n).to_string_lossy().into_owned();
    for run in ["a", "b"] {
        let o = neurovm(&[
            "--seed",
            "7",
            "--out",
            &path(&format!("{run}.csv")),
            "--trace",
            &path(&format!("{run}.trace")),
            "run",
        ]);
        assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
        assert!(o.stdout.is_empty());
    }
    let read = |n: &str| fs::read(dir.path().join(n)).unwrap();
    assert_eq!(read("a.csv"), read("b.csv"));
    assert_eq!(read("a.trace"), read("b.trace"));
    let trace = String::from_utf8(read("a.trace")).unwrap();
    assert!(trace.starts_with("tick,seq,kind,detail\n"));
}

#[test]
fn scenario_file_runs() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("s.toml");
    fs::write(
        &file,
        "schema_version = 1\nseed = 3\nduration_ms = 10\nsample_period_us = 2000\n\n[[vms]]\nname = \"a\"\nfraction = 0.125\npreload = [\"lif\"]\n\n[[tasks]]\nsteps = 10\ninput_rate = 4\nfan_in = 64\n",
    )
    .unwrap();
    let o = neurovm(&["--scenario", file.to_str().unwrap(), "run"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let out = stdout(&o);
    assert!(out.starts_with("tick,lut_pct,mem_pct,io_pct,dsp_pct,"));
    assert_eq!(out.lines().count(), 1 + 5);
}

#[test]
fn invalid_scenario_fails_with_line_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("bad.toml");
    fs::write(&file, "schema_version = 1\nseed = 3\n\n[[vms]]\nname = \"a\"\nfraction = 0.1\npriority = \"urgent\"\n").unwrap();
    let o = neurovm(&["--scenario", file.to_str().unwrap(), "run"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("bad.toml:4:"), "{err}");
    assert!(err.contains("vms[0].priority"), "{err}");
}

#[test]
fn syntax_error_fails_with_line_anchor() {
    let dir = tempfile::tempdir().unwrap();
    let file = dir.path().join("broken.toml");
    fs::write(&file, "schema_version = 1\nseed = \n").unwrap();
    let o = neurovm(&["--scenario", file.to_str().unwrap(), "run"]);
    assert!(!o.status.success());
    let err = String::from_utf8_lossy(&o.stderr);
    assert!(err.contains("broken.toml:2:"), "{err}");
}

#[test]
fn out_of_domain_benchmark_config_fails() {
    let o = neurovm(&["bench-throughput", "--vm-counts", "0"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("vm count 0"));
}

#[test]
fn missing_scenario_file_fails() {
    let o = neurovm(&["--scenario", "/nonexistent/x.toml", "run"]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("reading scenario"));
}
