use std::path::Path;
use std::process::{Command, Output};

use edge_offload::env::Env;
use edge_offload::harness::{self, Checkpoint, ExperimentConfig, MetricsRow, PolicyKind};

fn bin(args: &[&str], vars: &[(&str, &str)]) -> Output {
    let mut c = Command::new(env!("CARGO_BIN_EXE_edge-offload"));
    c.args(args);
    for (k, v) in vars {
        c.env(k, v);
    }
    c.output().expect("binary runs")
}

fn text(o: &Output) -> String {
    format!("{}{}", String::from_utf8_lossy(&o.stdout), String::from_utf8_lossy(&o.stderr))
}

const SHORT: [(&str, &str); 2] = [("EDGE_OFFLOAD_ENV__HORIZON", "20"), ("EDGE_OFFLOAD_EVAL_EPISODES", "1")];

#[test]
fn config_layers_file_then_environment() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("c.json");
    std::fs::write(&path, r#"{"env": {"nodes": 7, "horizon": 30}, "iterations": 11}"#).unwrap();
    let vars = vec![("EDGE_OFFLOAD_ENV__HORIZON".to_string(), "12".to_string()), ("UNRELATED".into(), "x".into())];
    let cfg = ExperimentConfig::load(Some(&path), vars).unwrap();
    assert_eq!(cfg.env.nodes, 7);
    assert_eq!(cfg.env.horizon, 12);
    assert_eq!(cfg.iterations, 11);
    assert_eq!(cfg.seeds, ExperimentConfig::default().seeds);

    let bad = vec![("EDGE_OFFLOAD_ENV__NODS".to_string(), "3".to_string())];
    let e = ExperimentConfig::load(None, bad).unwrap_err();
    assert!(format!("{e:#}").contains("unknown config key"), "{e:#}");
    let bad_type = vec![("EDGE_OFFLOAD_ITERATIONS".to_string(), "many".to_string())];
    assert!(ExperimentConfig::load(None, bad_type).is_err());
}

#[test]
fn metrics_csv_roundtrip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.csv");
    let rows = vec![
        MetricsRow { schema_version: harness::SCHEMA_VERSION, run_id: "r".into(), kind: "evaluate".into(), policy: "random".into(), seed: 3, success: 5, success_rate: 0.5, ..Default::default() },
        MetricsRow { schema_version: harness::SCHEMA_VERSION, policy: "ledrl".into(), lambda: Some(0.25), eval_success_rate: Some(0.75), ..Default::default() },
    ];
    harness::write_csv(&path, &rows).unwrap();
    assert_eq!(harness::read_csv(&path).unwrap(), rows);
    let stale = vec![MetricsRow::default()];
    harness::write_csv(&path, &stale).unwrap();
    assert!(harness::read_csv(&path).is_err());
}

#[test]
fn checkpoints_restore_identical_policies() {
    let mut cfg = ExperimentConfig { iterations: 2, ..ExperimentConfig::default() };
    cfg.env.horizon = 20;
    let dir = tempfile::tempdir().unwrap();
    for kind in [PolicyKind::Mappo, PolicyKind::Ledrl] {
        let run = harness::train(&cfg, &cfg.env, kind, 4, "t").unwrap();
        let d = dir.path().join(kind.name());
        run.checkpoint.save(&d).unwrap();
        let back = Checkpoint::load(&d).unwrap();
        assert_eq!(back.policy, kind);
        let env = Env::new(cfg.env.clone(), 4).unwrap();
        let mut a = run.checkpoint.controller(&cfg, &env, 4, true).unwrap();
        let mut b = back.controller(&cfg, &env, 4, true).unwrap();
        let seeds = harness::eval_seeds(4, 2);
        let ra = harness::run_episodes(&mut Env::new(cfg.env.clone(), 4).unwrap(), a.as_mut(), &seeds).unwrap();
        let rb = harness::run_episodes(&mut Env::new(cfg.env.clone(), 4).unwrap(), b.as_mut(), &seeds).unwrap();
        assert_eq!((ra.success, ra.generated, ra.return_sum), (rb.success, rb.generated, rb.return_sum));
    }
}

#[test]
fn oracle_subcommand_solves_bin_packing() {
    let dir = tempfile::tempdir().unwrap();
    let p = dir.path().join("bp.json");
    std::fs::write(&p, r#"{"items": [3, 3, 2, 2], "bins": 2, "capacity": 5}"#).unwrap();
    let o = bin(&["oracle", p.to_str().unwrap()], &[]);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("feasible: success rate 1.0000"), "{}", text(&o));
    std::fs::write(&p, r#"{"items": [3, 3, 3], "bins": 2, "capacity": 5}"#).unwrap();
    let o = bin(&["oracle", p.to_str().unwrap()], &[]);
    assert!(o.status.success());
    assert!(text(&o).starts_with("infeasible"), "{}", text(&o));
}

#[test]
fn simulate_train_evaluate_and_latency_write_outputs() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = bin(&["simulate", "--policy", "random,greedy", "--seed", "1", "--out", out], &SHORT);
    assert!(o.status.success(), "{}", text(&o));
    assert!(text(&o).contains("greedy: success"));
    let rows = harness::read_csv(&dir.path().join("simulate.csv")).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(dir.path().join("config.json").exists());

    let o = bin(&["train", "--policy", "mappo", "--seed", "2", "--iterations", "2", "--out", out], &SHORT);
    assert!(o.status.success(), "{}", text(&o));
    let ck = dir.path().join("checkpoints/mappo/seed-2");
    assert!(ck.join("meta.json").exists());
    assert!(!harness::read_csv(&dir.path().join("train.csv")).unwrap().is_empty());

    let o = bin(&["evaluate", "--policy", "mappo", "--seed", "2", "--checkpoint", ck.to_str().unwrap(), "--out", out], &SHORT);
    assert!(o.status.success(), "{}", text(&o));

    let o = bin(&["latency", "--policy", "greedy,mappo", "--steps", "20", "--seed", "2", "--out", out], &SHORT);
    assert!(o.status.success(), "{}", text(&o));
    let lat: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(dir.path().join("latency.json")).unwrap()).unwrap();
    assert_eq!(lat.as_array().unwrap().len(), 2);
}

#[test]
fn bad_invocations_exit_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = bin(&["evaluate", "--policy", "ledrl", "--provider", "http", "--out", out], &SHORT);
    assert_eq!(o.status.code(), Some(1));
    assert!(text(&o).contains("endpoint"), "{}", text(&o));
    let o = bin(&["simulate", "--policy", "mappo", "--out", out], &SHORT);
    assert_eq!(o.status.code(), Some(1));
    let o = bin(&["simulate", "--policy", "teleport", "--out", out], &SHORT);
    assert_eq!(o.status.code(), Some(1));
    assert!(!Path::new(out).join("simulate.csv").exists());
}
