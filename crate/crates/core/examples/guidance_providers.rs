//! Renders one decision prompt and answers it three ways: the in-process
//! rule, the same rule behind a local HTTP stub, and a stalled endpoint
//! that the watchdog cuts off.

use std::time::Duration;

use edge_offload::env::Env;
use edge_offload::guidance::{
    decide, Guide, GuidanceConfig, HttpProvider, Provider, ScriptedProvider, StubBehavior, StubServer, Watchdog,
};

fn main() -> anyhow::Result<()> {
    let mut env = Env::new(Default::default(), 3)?;
    env.reset(3)?;
    let guide = Guide::for_env(GuidanceConfig::default(), Box::new(ScriptedProvider::new(0)), &env);
    let agent = (0..env.nodes()).find(|&i| !env.masks()[i].idle()).expect("some node holds a task at slot 0");
    let (bundle, _) = guide.prompt(&env, agent).expect("agent has a task");
    println!("--- prompt for node {agent}\n{}\n---", bundle.render());

    let mask = &env.masks()[agent];
    let timeout = Duration::from_millis(200);
    let show = |name: &str, p: &mut dyn Provider| {
        let d = decide(&bundle, mask, p, timeout);
        println!(
            "{name:>9}: {:<12} valid {:<5} {:>7.2} ms {}",
            d.choice.label(),
            d.valid,
            d.latency.as_secs_f64() * 1e3,
            d.failure.unwrap_or_default()
        );
    };

    show("scripted", &mut ScriptedProvider::new(0));
    let stub = StubServer::start(StubBehavior::Scripted)?;
    show("http", &mut HttpProvider::new(&stub.url));
    let slow = StubServer::start(StubBehavior::Delay(Duration::from_secs(2)))?;
    show("stalled", &mut Watchdog::new(HttpProvider::new(&slow.url)));
    let broken = StubServer::start(StubBehavior::Garbage)?;
    show("garbage", &mut HttpProvider::new(&broken.url));
    Ok(())
}
