use std::fs;
use std::process::Command;

fn bench() -> Command {
    Command::new(env!("CARGO_BIN_EXE_nam-bench"))
}

#[test]
fn oltp_writes_report_and_history() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("report.csv");
    let hist = dir.path().join("history.log");
    let status = bench()
        .args(["oltp", "--clients", "2", "--txns", "20", "--products", "50"])
        .arg("--out")
        .arg(&out)
        .arg("--history-out")
        .arg(&hist)
        .status()
        .unwrap();
    assert!(status.success());
    let csv = fs::read_to_string(&out).unwrap();
    assert!(csv.starts_with("kind,name,value\n"));
    assert!(csv.contains("txn,attempted,40"));
    assert!(csv.contains("verdict,si_history,pass"));
    assert!(!fs::read_to_string(&hist).unwrap().is_empty());
}

#[test]
fn config_file_then_flags() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("join.conf");
    fs::write(&cfg, "r_tuples = 2000\ns_tuples = 3000\nnodes = 2\nselectivity = 0.5\n").unwrap();
    let o = bench().args(["olap-join", "--nodes", "3"]).arg("--config").arg(&cfg).output().unwrap();
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let csv = String::from_utf8(o.stdout).unwrap();
    assert!(csv.contains("(3 nodes)"), "{csv}");
    assert!(csv.contains("verdict,nested_loop_oracle,pass"));
    assert!(csv.contains("ghj.result_rows,1500"));
}

#[test]
fn costmodel_splits_curves_and_bounds() {
    let dir = tempfile::tempdir().unwrap();
    let bounds = dir.path().join("bounds.csv");
    let o = bench().args(["costmodel"]).arg("--bounds-out").arg(&bounds).output().unwrap();
    assert!(o.status.success());
    assert!(!o.stdout.is_empty());
    assert!(fs::read_to_string(&bounds).unwrap().contains("trx_upper_bound_n3"));
}

#[test]
fn bad_input_is_rejected() {
    let o = bench().args(["oltp", "--set", "bogus=1"]).output().unwrap();
    assert!(!o.status.success());
    let o = bench().args(["oltp", "--protocol", "rsi", "--transport", "ipoeth"]).output().unwrap();
    assert!(!o.status.success());
    let o = bench().args(["olap-agg", "--set", "selectivity"]).output().unwrap();
    assert!(!o.status.success());
}
