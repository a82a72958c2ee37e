use std::fs;
use std::path::PathBuf;
use std::process::{Command, Output};

fn ufork(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ufork"))
        .args(args)
        .output()
        .unwrap()
}

fn scratch(name: &str, text: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("ufork-cli-{}", std::process::id()));
    fs::create_dir_all(&dir).unwrap();
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

#[test]
fn gen_then_run_reports_the_child() {
    let g = ufork(&["gen", "--pages", "16", "--seed", "3"]);
    assert!(g.status.success());
    let path = scratch("redis.uf", &stdout(&g));
    let r = ufork(&["run", path.to_str().unwrap(), "--strategy", "copa"]);
    assert_eq!(
        r.status.code(),
        Some(0),
        "{}",
        String::from_utf8_lossy(&r.stderr)
    );
    let out = stdout(&r);
    assert!(out.contains("strategy=copa"));
    assert!(out.contains("pid=2 parent=1"));
    assert!(String::from_utf8_lossy(&r.stderr).starts_with("trace_hash="));
}

#[test]
fn csv_goes_to_the_out_file() {
    let path = scratch("small.uf", "alloc a 64\nfork c {\n  store_int a+0 1\n}\n");
    let csv = path.with_extension("csv");
    let r = ufork(&[
        "run",
        path.to_str().unwrap(),
        "--format",
        "csv",
        "--out",
        csv.to_str().unwrap(),
    ]);
    assert!(r.status.success());
    let text = fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("strategy,isolation,pid,"));
    assert_eq!(text.lines().count(), 3);
}

#[test]
fn compare_prints_verdicts() {
    let g = ufork(&["gen", "--pages", "24"]);
    let path = scratch("cmp.uf", &stdout(&g));
    let r = ufork(&[
        "compare",
        path.to_str().unwrap(),
        "--strategies",
        "full,coa,copa",
    ]);
    assert_eq!(r.status.code(), Some(0));
    let out = stdout(&r);
    assert!(out.contains("pages_copied: copa <= coa ok"));
    assert!(out.contains("pages_copied: coa <= full ok"));
}

#[test]
fn audit_flags_unsafe_copies_without_failing() {
    let src = "alloc a 64\nalloc b 64\nstore_ref a+0 b+0\nfork c {\n  load_ref a+0\n}\n";
    let path = scratch("stale.uf", src);
    let p = path.to_str().unwrap();
    let unsafe_run = ufork(&["audit", p, "--strategy", "unsafe-cow"]);
    assert_eq!(unsafe_run.status.code(), Some(0));
    assert!(!stdout(&unsafe_run).contains("violations=0"));
    let safe = ufork(&["audit", p, "--strategy", "copa"]);
    assert_eq!(safe.status.code(), Some(0));
    assert!(stdout(&safe).contains("violations=0"));
}

#[test]
fn failed_expectation_exits_one() {
    let path = scratch(
        "expect.uf",
        "alloc a 16\nstore_int a+0 4\nload_int a+0\nexpect 5\n",
    );
    let r = ufork(&["run", path.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(1));
}

#[test]
fn usage_errors_exit_two() {
    assert_eq!(
        ufork(&["run", "/definitely/not/here.uf"]).status.code(),
        Some(2)
    );
    assert_eq!(
        ufork(&["run", "x.uf", "--strategy", "bogus"]).status.code(),
        Some(2)
    );
    let bad = scratch("bad.uf", "alloc a 16\nstore_int zz+0 1\n");
    let r = ufork(&["run", bad.to_str().unwrap()]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("zz"));
}

#[test]
fn fuzz_scripts_agree_across_strategies() {
    let g = ufork(&["gen", "--fuzz", "11"]);
    let path = scratch("fuzz.uf", &stdout(&g));
    let r = ufork(&["compare", path.to_str().unwrap()]);
    assert_eq!(
        r.status.code(),
        Some(0),
        "{}{}",
        stdout(&r),
        String::from_utf8_lossy(&r.stderr)
    );
}
