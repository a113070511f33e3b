use std::fs;
use std::path::PathBuf;
use std::process::Command;

use natforge::archgraph::{cost_of, parse_many};
use natforge::opspace::CostConfig;
use natforge_cli::*;

fn bin() -> Command {
    let mut c = Command::new(env!("CARGO_BIN_EXE_natforge"));
    c.env_remove("NATFORGE_SEED");
    c
}

fn scratch(name: &str) -> PathBuf {
    let dir = std::env::temp_dir().join(format!("natforge-cli-{name}-{}", std::process::id()));
    let _ = fs::remove_dir_all(&dir);
    fs::create_dir_all(&dir).unwrap();
    dir
}

fn run_ok(args: &[&str]) -> String {
    let out = bin().args(args).output().unwrap();
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

#[test]
fn audit_passes_and_lists_all_pairs() {
    let dir = scratch("audit");
    let csv = dir.join("audit.csv");
    run_ok(&["audit", "--out", csv.to_str().unwrap()]);
    let text = fs::read_to_string(&csv).unwrap();
    assert_eq!(text.lines().count(), 1 + 169);
    assert!(text.contains("null,skip,1,0,131072,1"));
    let manifest: Manifest = serde_json::from_str(&fs::read_to_string(dir.join("audit.csv.manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest.command, "audit");
    assert_eq!(manifest.files, vec!["audit.csv"]);
    assert_eq!(manifest.config_hash.len(), 64);
}

#[test]
fn audit_to_stdout() {
    let out = run_ok(&["audit", "--channels", "16", "--hw", "8"]);
    assert!(out.starts_with("from,to,valid,params_delta,madds_delta,whitelisted\n"));
    assert!(out.contains("0 violations"));
}

#[test]
fn sample_round_trips_and_costs_match() {
    let dir = scratch("sample");
    let cells = dir.join("cells.txt");
    let cost = dir.join("cost.csv");
    run_ok(&["sample", "--nodes", "6", "--count", "5", "--seed", "3", "--out", cells.to_str().unwrap()]);
    let graphs = parse_many(&fs::read_to_string(&cells).unwrap()).unwrap();
    assert_eq!(graphs.len(), 5);
    assert!(graphs.iter().all(|g| g.num_nodes() == 6));

    run_ok(&["cost", "--in", cells.to_str().unwrap(), "--channels", "64", "--hw", "16", "--out", cost.to_str().unwrap()]);
    let cfg = CostConfig::new(64, 64, 16, 16).unwrap();
    let text = fs::read_to_string(&cost).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next(), Some(COST_CSV_HEADER));
    for (i, (line, g)) in lines.zip(&graphs).enumerate() {
        let c = cost_of(g, &cfg);
        assert_eq!(line, format!("{i},6,{},{}", c.total_params, c.total_madds));
    }
    // no temp files left behind
    let names: Vec<String> = fs::read_dir(&dir)
        .unwrap()
        .map(|e| e.unwrap().file_name().to_string_lossy().into_owned())
        .collect();
    assert!(names.iter().all(|n| !n.starts_with('.')), "{names:?}");
}

#[test]
fn seed_falls_back_to_environment() {
    let explicit = run_ok(&["sample", "--count", "3", "--seed", "41"]);
    let from_env = bin().args(["sample", "--count", "3"]).env("NATFORGE_SEED", "41").output().unwrap();
    assert_eq!(explicit, String::from_utf8(from_env.stdout).unwrap());
    let default = run_ok(&["sample", "--count", "3"]);
    assert_eq!(default, run_ok(&["sample", "--count", "3", "--seed", "0"]));
    assert_ne!(default, explicit);
}

#[test]
fn too_few_nodes_is_rejected() {
    let out = bin().args(["sample", "--nodes", "3"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("--nodes must be at least 4"));
}

#[test]
fn parse_errors_name_the_file_and_line() {
    let dir = scratch("parse");
    let bad = dir.join("bad.txt");
    fs::write(&bad, "cell v=4\nedge t=0 s=0 f=-1 op=conv_9x9\nedge t=0 s=1 f=-2 op=skip\n").unwrap();
    let out = bin().args(["cost", "--in", bad.to_str().unwrap()]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("bad.txt") && err.contains("line 2"), "{err}");
}

#[test]
fn train_optimize_report_pipeline() {
    let dir = scratch("pipeline");
    let run = dir.join("run");
    let cells = dir.join("cells.txt");
    let optimized = dir.join("opt.txt");
    let report = dir.join("report.csv");
    run_ok(&["train", "--epochs", "6", "--checkpoint-every", "2", "--eval-every", "3", "--out", run.to_str().unwrap()]);
    for f in [POLICY_FILE, SUPERNET_FILE, ORACLE_FILE, LOG_FILE, MANIFEST_FILE] {
        assert!(run.join(f).is_file(), "{f}");
    }
    assert!(run.join("checkpoints/epoch-0002/policy.json").is_file());
    assert!(run.join("checkpoints/epoch-0004/supernet.json").is_file());
    assert!(!run.join("checkpoints/epoch-0006").exists());
    let log = fs::read_to_string(run.join(LOG_FILE)).unwrap();
    assert_eq!(log.lines().count(), 60 + 2);

    let loaded = TrainedRun::load(&run).unwrap();
    assert_eq!(loaded.config.epochs, 6);

    run_ok(&["sample", "--count", "8", "--out", cells.to_str().unwrap()]);
    run_ok(&["optimize", "--policy", run.to_str().unwrap(), "--in", cells.to_str().unwrap(), "--out", optimized.to_str().unwrap()]);
    let summary = run_ok(&[
        "report",
        "--in",
        cells.to_str().unwrap(),
        "--optimized",
        optimized.to_str().unwrap(),
        "--policy",
        run.to_str().unwrap(),
        "--out",
        report.to_str().unwrap(),
    ]);
    assert!(summary.starts_with("report:"));
    let text = fs::read_to_string(&report).unwrap();
    let lines: Vec<&str> = text.lines().collect();
    assert_eq!(lines[0], REPORT_CSV_HEADER);
    assert!(lines[1].starts_with("original,8,"));
    assert!(lines[2].starts_with("optimized,8,"));
}

#[test]
fn optimize_rejects_wrong_cell_size() {
    let dir = scratch("size");
    let run = dir.join("run");
    let cells = dir.join("cells.txt");
    run_ok(&["train", "--epochs", "1", "--out", run.to_str().unwrap()]);
    run_ok(&["sample", "--nodes", "5", "--count", "2", "--out", cells.to_str().unwrap()]);
    let out = bin()
        .args(["optimize", "--policy", run.to_str().unwrap(), "--in", cells.to_str().unwrap()])
        .output()
        .unwrap();
    assert_eq!(out.status.code(), Some(2));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("cells.txt: graph 0"), "{err}");
}

#[test]
fn report_rejects_budget_violations() {
    let dir = scratch("budget");
    let run = dir.join("run");
    let cells = dir.join("cells.txt");
    let grown = dir.join("grown.txt");
    run_ok(&["train", "--epochs", "1", "--out", run.to_str().unwrap()]);
    let cell = |first: &str| {
        format!(
            "cell v=7\nedge t=0 s=0 f=-1 op={first}\nedge t=0 s=1 f=-2 op=null\n{}",
            (1..4)
                .map(|t| format!("edge t={t} s=0 f=-1 op=skip\nedge t={t} s=1 f=-2 op=null\n"))
                .collect::<String>()
        )
    };
    fs::write(&cells, cell("conv_1x1")).unwrap();
    fs::write(&grown, cell("conv_5x5")).unwrap();
    let args = ReportArgs {
        input: cells.clone(),
        optimized: grown,
        policy: run.clone(),
        cost: CostFlags { channels: 128, hw: 32 },
        out: None,
    };
    match cmd_report(&args) {
        Err(CliError::Graph { index, message, .. }) => {
            assert_eq!(index, 0);
            assert!(message.contains("budget"), "{message}");
        }
        other => panic!("expected a budget error, got {other:?}"),
    }
    let ok = ReportArgs { optimized: cells, ..args };
    let r = cmd_report(&ok).unwrap();
    assert!(r.summary.contains("mean reward 0.0000"), "{}", r.summary);
}

#[test]
fn stat_uses_sample_deviation() {
    let s = stat(&[1.0, 2.0, 3.0, 4.0]);
    assert_eq!(s.mean, 2.5);
    assert!((s.std - (5.0f64 / 3.0).sqrt()).abs() < 1e-15);
    assert_eq!(stat(&[7.0]).std, 0.0);
}

#[test]
fn audit_exit_code_reflects_result() {
    let r = cmd_audit(&AuditArgs {
        cost: CostFlags { channels: 8, hw: 4 },
        out: None,
    })
    .unwrap();
    assert_eq!(r.exit_code, 0);
    assert!(r.artifacts.is_empty());
}
