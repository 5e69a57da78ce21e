use std::net::Ipv4Addr;
use std::time::Duration;

use qfabric::config::bundled;
use qfabric::control::{read_message, Backoff, SwitchAgent};
use qfabric::node::{self, NodeConfig};
use qfabric_core::codec::{CodecKind, Direction, EntrancePoint};
use qfabric_core::flow::wire::{decode_control, encode_control};
use qfabric_core::flow::{ControlMessage, FlowAction, FlowMatch, FlowMod, MessageBody, PacketMeta, RuleSpec};
use qfabric_core::net::{ChannelId, NodeId};
use tokio::io::AsyncWriteExt;
use tokio::net::TcpListener;

async fn until(what: &str, mut cond: impl FnMut() -> bool) {
    for _ in 0..250 {
        if cond() {
            return;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    panic!("timed out waiting for {what}");
}

#[tokio::test(flavor = "multi_thread")]
async fn agents_get_rules_and_report_traffic() {
    let sc = bundled("two-node").unwrap();
    let cfg = NodeConfig {
        http: (Ipv4Addr::LOCALHOST, 0).into(),
        control_base_port: 0,
        stats_period: Duration::from_millis(50),
        evaluate_period: Duration::from_secs(3600),
        ..NodeConfig::default()
    };
    let node = node::start(&sc, cfg).await.unwrap();
    let agents: Vec<_> = node
        .control
        .iter()
        .map(|(id, addr)| SwitchAgent { node: *id, controller: *addr, backoff: Backoff::default() }.spawn())
        .collect();
    for (h, _) in &agents {
        until("initial rules", || h.rule_count() > 0).await;
    }
    assert_eq!(node.hub.queued(NodeId(1)), 0);

    let (enc, _) = &agents[0];
    {
        let mut sw = enc.switch.lock().unwrap();
        let rule = *sw.table().rules().next().unwrap();
        let meta = PacketMeta {
            dst_address: rule.matcher.dst_address.unwrap_or(Ipv4Addr::LOCALHOST),
            dst_port: rule.matcher.dst_port.unwrap_or(5000),
            channel: rule.matcher.channel.unwrap_or(ChannelId(1)),
        };
        for _ in 0..100 {
            assert_ne!(sw.forward(&meta, 1250), FlowAction::Drop);
        }
    }
    let mut seen = false;
    for _ in 0..100 {
        let map = node.service.map().await.unwrap();
        let line = map.lines().find(|l| l.starts_with("channel 1 ")).unwrap().to_owned();
        let bps: f64 = line.split("traffic_bps ").nth(1).unwrap().split_whitespace().next().unwrap().parse().unwrap();
        if bps > 0.0 {
            seen = true;
            break;
        }
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    assert!(seen, "counters never reached the controller");
    assert_eq!(node.hub.errors(), 0);
    node.shutdown();
    for (_, t) in agents {
        t.abort();
    }
}

fn add(cookie: u64) -> Vec<u8> {
    let spec = RuleSpec {
        cookie,
        priority: 10,
        matcher: FlowMatch { dst_address: None, dst_port: Some(5000), channel: Some(ChannelId(1)) },
        action: FlowAction::ForwardTo(EntrancePoint {
            address: Ipv4Addr::LOCALHOST,
            port: 7000,
            kind: CodecKind::Classical,
            direction: Direction::Encoder,
        }),
    };
    encode_control(&ControlMessage::new(cookie as u32, MessageBody::FlowMod(FlowMod::Add(spec)))).unwrap()
}

#[tokio::test(flavor = "multi_thread")]
async fn agent_is_fail_static_and_reconnects() {
    let listener = TcpListener::bind((Ipv4Addr::LOCALHOST, 0)).await.unwrap();
    let addr = listener.local_addr().unwrap();
    let backoff = Backoff { initial: Duration::from_millis(10), max: Duration::from_millis(80) };
    let (h, task) = SwitchAgent { node: NodeId(1), controller: addr, backoff }.spawn();

    let (mut s, _) = listener.accept().await.unwrap();
    let hello = read_message(&mut s).await.unwrap().unwrap();
    assert_eq!(decode_control(&hello).unwrap().body, MessageBody::Hello);
    s.write_all(&add(1)).await.unwrap();
    until("rule install", || h.rule_count() == 1).await;
    drop(s);

    // the controller is gone: the table stays as it was
    tokio::time::sleep(Duration::from_millis(50)).await;
    assert_eq!(h.rule_count(), 1);

    let (mut s, _) = tokio::time::timeout(Duration::from_secs(5), listener.accept()).await.unwrap().unwrap();
    read_message(&mut s).await.unwrap().unwrap();
    assert_eq!(h.sessions(), 2);
    s.write_all(&add(2)).await.unwrap();
    until("second rule", || h.rule_count() == 2).await;
    task.abort();
}

#[tokio::test(flavor = "multi_thread")]
async fn flow_mods_wait_for_the_switch() {
    let sc = bundled("two-node").unwrap();
    let cfg = NodeConfig { http: (Ipv4Addr::LOCALHOST, 0).into(), control_base_port: 0, ..NodeConfig::default() };
    let node = node::start(&sc, cfg).await.unwrap();
    let before = node.hub.queued(NodeId(2));
    assert!(before > 0, "start() should queue rules for node 2");
    node.hub.send_flow_mod(NodeId(2), FlowMod::Delete { cookie: 0xdead });
    assert_eq!(node.hub.queued(NodeId(2)), before + 1);

    let addr = node.control[&NodeId(2)];
    let (h, task) = SwitchAgent { node: NodeId(2), controller: addr, backoff: Backoff::default() }.spawn();
    until("queue drained", || node.hub.queued(NodeId(2)) == 0).await;
    until("rules installed", || h.rule_count() == before).await;
    // deleting an unknown cookie comes back as an error
    let hub = node.hub.clone();
    until("error reply", || hub.errors() == 1).await;
    task.abort();
    node.shutdown();
}
