use std::time::{Duration, Instant};

use edge_offload::config::EnvConfig;
use edge_offload::env::Env;
use edge_offload::guidance::{
    decide, FailingProvider, Guide, GuidanceConfig, HttpProvider, PromptBundle, Provider, ScriptedProvider, StubBehavior, StubServer, Watchdog,
};

/// A prompt for the first deciding agent of a fresh environment.
fn prompt() -> (Env, usize, PromptBundle) {
    let mut env = Env::new(EnvConfig::default(), 2).unwrap();
    env.set_drain(false);
    env.reset(2).unwrap();
    let guide = Guide::for_env(GuidanceConfig::default(), Box::new(FailingProvider), &env);
    loop {
        if let Some(i) = (0..env.nodes()).find(|&i| !env.masks()[i].idle()) {
            let (b, _) = guide.prompt(&env, i).expect("deciding agent has a prompt");
            return (env, i, b);
        }
        let idle = vec![edge_offload::env::Action::Idle; env.nodes()];
        env.step(&idle).unwrap();
    }
}

#[test]
fn scripted_stub_matches_in_process_provider() {
    let stub = StubServer::start(StubBehavior::Scripted).unwrap();
    let (env, i, b) = prompt();
    let t = Duration::from_secs(2);
    let remote = decide(&b, &env.masks()[i], &mut HttpProvider::new(&stub.url), t);
    let local = decide(&b, &env.masks()[i], &mut ScriptedProvider::new(0), t);
    assert!(remote.valid, "{:?}", remote.failure);
    assert_eq!(remote.action, local.action);
    assert_eq!(remote.choice, local.choice);
}

#[test]
fn http_errors_fall_back_to_a_valid_action() {
    for behavior in [StubBehavior::Status(500), StubBehavior::Garbage] {
        let stub = StubServer::start(behavior.clone()).unwrap();
        let (env, i, b) = prompt();
        let d = decide(&b, &env.masks()[i], &mut HttpProvider::new(&stub.url), Duration::from_secs(2));
        assert!(!d.valid, "{behavior:?} should not validate");
        assert!(env.masks()[i].allows(d.action));
        assert!(d.failure.is_some());
    }
}

#[test]
fn unreachable_endpoint_falls_back() {
    let (env, i, b) = prompt();
    let d = decide(&b, &env.masks()[i], &mut HttpProvider::new("http://127.0.0.1:9/decide"), Duration::from_millis(300));
    assert!(!d.valid);
    assert!(env.masks()[i].allows(d.action));
}

#[test]
fn stalled_endpoint_respects_timeout() {
    let stub = StubServer::start(StubBehavior::Delay(Duration::from_secs(3))).unwrap();
    let (env, i, b) = prompt();
    let mut p = Watchdog::new(HttpProvider::new(&stub.url));
    for _ in 0..3 {
        let t0 = Instant::now();
        let d = decide(&b, &env.masks()[i], &mut p, Duration::from_millis(100));
        let dt = t0.elapsed();
        assert!(!d.valid);
        assert!(dt <= Duration::from_millis(150), "took {dt:?}");
    }
}

#[test]
fn replay_log_records_each_exchange() {
    let stub = StubServer::start(StubBehavior::Local).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("replay.jsonl");
    let (env, i, b) = prompt();
    let mut p = HttpProvider::new(&stub.url).with_replay(path.clone()).unwrap();
    for _ in 0..3 {
        let d = decide(&b, &env.masks()[i], &mut p, Duration::from_secs(2));
        assert!(d.valid);
    }
    let text = std::fs::read_to_string(&path).unwrap();
    let lines: Vec<serde_json::Value> = text.lines().map(|l| serde_json::from_str(l).unwrap()).collect();
    assert_eq!(lines.len(), 3);
    assert!(lines.iter().all(|l| l["status"] == 200 && l["prompt"].as_str().is_some_and(|s| s.contains("[T]"))));
    assert!(p.name().starts_with("http("));
}
