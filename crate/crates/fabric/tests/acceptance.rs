//! Acceptance gate: one PASS/FAIL line per criterion, non-zero exit if any
//! fails.

use std::net::Ipv4Addr;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::process::ExitCode;
use std::time::{Duration, Instant};

use proptest::prelude::*;
use proptest::test_runner::{Config, RngAlgorithm, TestRng, TestRunner};
use qfabric::config::{bundled, BUNDLED};
use qfabric::node::{self, NodeConfig};
use qfabric_core::codec::{otp_decode, otp_encode, CodecError, CodecKind, Direction, EntrancePoint};
use qfabric_core::controller::{
    compute_route, select_mode, ChannelConfig, ChannelPolicy, Command, Controller, ControllerConfig, EncryptionMode,
    ModeInputs, Qos, RouteDecision, RouteReason,
};
use qfabric_core::flow::wire::{decode_control, encode_control, ErrorCode};
use qfabric_core::flow::{
    ControlMessage, FlowAction, FlowMatch, FlowMod, FlowRule, FlowStats, FlowTable, MessageBody, PacketMeta, RuleSpec,
};
use qfabric_core::keystore::{KeyError, KeyPool, MirroredPools, Purpose};
use qfabric_core::net::{
    ChannelId, Fault, LinkId, LinkSpec, LinkStatus, LossReading, LossReport, NodeId, NodeRole, NodeSpec, Topology,
    TopologySpec,
};
use qfabric_core::qkd::KeyBlock;
use qfabric_core::scenario::{run_scenario, ReportFormat, RunReport};
use qfabric_core::SimTime;
use rand_chacha::rand_core::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;
type Criterion = (&'static str, fn() -> Outcome);

macro_rules! ensure {
    ($cond:expr, $($fmt:tt)+) => {
        if $cond {
        } else {
            return Err(format!($($fmt)+));
        }
    };
}

const CH: ChannelId = ChannelId(1);
const RATE_CAL: f64 = 1.06e6;
const SCRIPT_KEY: &str = "BCC6C0B92F8F0F0D33D38CDA55AB6A94";

fn passed_checks(r: &RunReport) -> Result<(), String> {
    match r.checks.iter().find(|c| !c.passed) {
        Some(c) => Err(format!("check {} failed: {}", c.name, c.detail)),
        None => Ok(()),
    }
}

// ---- 1 ----

fn calibration() -> Outcome {
    let sc = bundled("two-node").map_err(|e| e.to_string())?;
    ensure!(sc.duration_s == 10.0, "two-node runs {} s, want 10", sc.duration_s);
    let link = &sc.topology.links[0];
    ensure!(
        link.length_km == 1.63 && link.attenuation_db_per_km == 0.2,
        "link is {} km at {} dB/km",
        link.length_km,
        link.attenuation_db_per_km
    );
    let start = Instant::now();
    let r = run_scenario(&sc).map_err(|e| e.to_string())?;
    let wall = start.elapsed();
    passed_checks(&r)?;
    let ch = r.channel(CH).ok_or("no channel 1")?;
    let rate_err = (ch.sifted_rate_bps - RATE_CAL).abs() / RATE_CAL;
    ensure!(rate_err <= 0.01, "sifted rate {} bit/s is {:.3}% off", ch.sifted_rate_bps, rate_err * 100.0);
    ensure!((ch.mean_qber - 0.010).abs() <= 0.002, "mean QBER {:.5}", ch.mean_qber);
    ensure!(wall < Duration::from_secs(5), "took {wall:?}");
    Ok(format!(
        "rate {:.1} bit/s ({:+.3}%), QBER {:.4}%, wall {:.2} s",
        ch.sifted_rate_bps,
        (ch.sifted_rate_bps / RATE_CAL - 1.0) * 100.0,
        ch.mean_qber * 100.0,
        wall.as_secs_f64()
    ))
}

// ---- 2 ----

fn discard_rule() -> Outcome {
    // attacker present from the first pulse
    let mut sc = bundled("two-node").map_err(|e| e.to_string())?;
    sc.pairs[0].eavesdropper = true;
    sc.expect.clear();
    let r = run_scenario(&sc).map_err(|e| e.to_string())?;
    let ch = r.channel(CH).ok_or("no channel 1")?;
    ensure!(ch.discards > 0, "no discards");
    ensure!(ch.blocks == 0 && ch.pushed_bits == 0, "{} blocks / {} bits reached the pool", ch.blocks, ch.pushed_bits);
    ensure!(ch.discarded_bits == ch.produced_bits, "only {} of {} bits discarded", ch.discarded_bits, ch.produced_bits);
    ensure!((ch.mean_qber - 0.25).abs() < 0.01, "attacked QBER {:.4}", ch.mean_qber);
    let (discarded, attacked_qber) = (ch.discards, ch.mean_qber);

    // attacker arriving mid-run: status 0 in the round that saw the first discard
    let sc = bundled("eavesdrop").map_err(|e| e.to_string())?;
    let tick = SimTime::from_secs_f64(sc.tick_s);
    let onset = sc.timeline[0].at_s;
    let r = run_scenario(&sc).map_err(|e| e.to_string())?;
    passed_checks(&r)?;
    let ch = r.channel(CH).ok_or("no channel 1")?;
    ensure!(ch.blocks_pooled_under_attack == 0, "{} blocks pooled under attack", ch.blocks_pooled_under_attack);
    let first = ch.first_discard.ok_or("no discard after the attack began")?;
    let down = ch.status_dispatches.iter().find(|(_, up)| !up).map(|(t, _)| *t).ok_or("no status-0 dispatch")?;
    ensure!(down >= first && down.saturating_sub(first) < tick, "first discard {first}, status 0 at {down}");
    let tr = r
        .transitions
        .iter()
        .find(|t| t.from == EncryptionMode::DirectOtp && t.to == EncryptionMode::ClassicalOnly)
        .ok_or("no DirectOtp -> ClassicalOnly transition")?;
    ensure!(tr.time == down, "transition at {}, status 0 at {down}", tr.time);
    ensure!(
        down >= SimTime::from_secs_f64(onset) && down <= SimTime::from_secs_f64(onset) + tick,
        "status 0 at {down}"
    );
    Ok(format!(
        "{discarded} of {discarded} blocks discarded at QBER {:.2}%; mid-run attack: status 0 at {down} with the first discard",
        attacked_qber * 100.0
    ))
}

// ---- 3 ----

fn qkey_script() -> Outcome {
    let sc = bundled("two-node").map_err(|e| e.to_string())?;
    let rt = tokio::runtime::Builder::new_multi_thread().enable_all().build().map_err(|e| e.to_string())?;
    rt.block_on(async move {
        let cfg = NodeConfig { http: (Ipv4Addr::LOCALHOST, 0).into(), control_base_port: 0, ..NodeConfig::default() };
        let node = node::start(&sc, cfg).await.map_err(|e| e.to_string())?;
        let base = format!("http://{}", node.http);
        let client = reqwest::Client::new();
        let status = |c: &reqwest::Client| {
            let url = format!("{base}/status/1");
            let c = c.clone();
            async move {
                let text = c.get(url).send().await.map_err(|e| e.to_string())?.text().await.map_err(|e| e.to_string())?;
                let field = |k: &str| {
                    text.lines().find_map(|l| l.strip_prefix(k).map(|v| v.trim().to_owned())).unwrap_or_default()
                };
                Ok::<_, String>((field("mode "), field("eligible "), field("pool_bits ").parse::<u64>().unwrap_or(u64::MAX)))
            }
        };
        let mut codes = Vec::new();
        let mut trajectory = Vec::new();
        let (_, _, pool_before) = status(&client).await?;

        let r = client.get(format!("{base}/qchannel/1/0")).send().await.map_err(|e| e.to_string())?;
        codes.push(r.status().as_u16());
        trajectory.push(status(&client).await?);
        let r = client.get(format!("{base}/qchannel/1/1")).send().await.map_err(|e| e.to_string())?;
        codes.push(r.status().as_u16());
        trajectory.push(status(&client).await?);
        let r = client.post(format!("{base}/qkey/1")).body(SCRIPT_KEY).send().await.map_err(|e| e.to_string())?;
        codes.push(r.status().as_u16());
        trajectory.push(status(&client).await?);
        node.shutdown();

        ensure!(codes == [200, 200, 200], "responses {codes:?}");
        let expect = [("ClassicalOnly", "0"), ("ClassicalOnly", "1"), ("DirectOtp", "1")];
        for (i, ((mode, eligible, _), (want_mode, want_el))) in trajectory.iter().zip(expect).enumerate() {
            ensure!(mode == want_mode && eligible == want_el, "step {}: mode {mode}, eligible {eligible}", i + 1);
        }
        let growth = trajectory[2].2 - pool_before;
        ensure!(growth == 128, "pool grew by {growth} bits");
        Ok(format!(
            "200/200/200, ClassicalOnly -> eligible -> {}, pool +{growth} bits",
            trajectory[2].0
        ))
    })
}

// ---- 4 ----

fn four_link(ch2: f64, ch3: f64, ch4: f64) -> Topology {
    let spec = TopologySpec {
        nodes: vec![
            NodeSpec { id: NodeId(1), role: NodeRole::Endpoint },
            NodeSpec { id: NodeId(2), role: NodeRole::Endpoint },
            NodeSpec { id: NodeId(3), role: NodeRole::TrustedRelay },
        ],
        links: vec![
            LinkSpec::with_loss(1, 1, 2, 0.5),
            LinkSpec::with_loss(2, 1, 2, ch2),
            LinkSpec::with_loss(3, 1, 3, ch3),
            LinkSpec::with_loss(4, 3, 2, ch4),
        ],
    };
    Topology::build(&spec).expect("valid topology")
}

/// All simple paths over up links whose inner nodes are trusted relays.
fn enumerate(t: &Topology, at: NodeId, dst: NodeId, seen: &mut Vec<NodeId>, links: &mut Vec<LinkId>, out: &mut Vec<(Vec<LinkId>, f64)>) {
    for l in t.links().filter(|l| l.status == LinkStatus::Up) {
        let Some(next) = l.other_end(at) else { continue };
        if seen.contains(&next) {
            continue;
        }
        links.push(l.id);
        if next == dst {
            let loss = links.iter().map(|id| t.link(*id).unwrap().total_loss_db()).sum();
            out.push((links.clone(), loss));
        } else if t.role(next) == Some(NodeRole::TrustedRelay) {
            seen.push(next);
            enumerate(t, next, dst, seen, links, out);
            seen.pop();
        }
        links.pop();
    }
}

/// Primary if up, else the least lossy single fiber; a relayed path wins
/// only if it saves more than the margin.
fn route_oracle(t: &Topology, primary: LinkId, margin: f64) -> (Vec<LinkId>, RouteReason) {
    let mut paths = Vec::new();
    enumerate(t, NodeId(1), NodeId(2), &mut vec![NodeId(1)], &mut Vec::new(), &mut paths);
    let key = |p: &(Vec<LinkId>, f64)| (p.1, p.0.len(), p.0.clone());
    let best = |v: Vec<&(Vec<LinkId>, f64)>| v.into_iter().min_by(|a, b| key(a).partial_cmp(&key(b)).unwrap()).cloned();
    let direct = paths.iter().find(|p| p.0 == [primary]).cloned().map(|p| (p, RouteReason::Direct)).or_else(|| {
        best(paths.iter().filter(|p| p.0.len() == 1).collect()).map(|p| (p, RouteReason::FailoverReserve))
    });
    let relayed = best(paths.iter().filter(|p| p.0.len() > 1).collect());
    match (direct, relayed) {
        (Some((d, _)), Some(r)) if d.1 - r.1 > margin => (r.0, RouteReason::LossOptimal),
        (Some((d, why)), _) => (d.0, why),
        (None, Some(r)) => (r.0, RouteReason::FailoverReserve),
        (None, None) => (Vec::new(), RouteReason::NoQuantumPath),
    }
}

fn route(t: &Topology, margin: f64) -> RouteDecision {
    compute_route(t, CH, NodeId(1), NodeId(2), Some(LinkId(1)), margin).expect("route")
}

fn reroute_policy() -> Outcome {
    let delta = 3.0;
    let cut = |mut t: Topology| {
        t.inject_fault(LinkId(1), Fault::Cut).unwrap();
        t
    };
    // advantage 8 dB > delta: through node 3
    let t = cut(four_link(12.0, 2.0, 2.0));
    let got = route(&t, delta);
    ensure!(got.path == [LinkId(3), LinkId(4)] && got.via_trusted == [NodeId(3)], "large margin chose {got}");
    ensure!((got.path.clone(), got.reason) == route_oracle(&t, LinkId(1), delta), "oracle disagrees on {got}");
    // advantage 1 dB < delta: reserve fiber
    let t = cut(four_link(5.0, 2.0, 2.0));
    let got = route(&t, delta);
    ensure!(got.path == [LinkId(2)], "small margin chose {got}");
    ensure!((got.path.clone(), got.reason) == route_oracle(&t, LinkId(1), delta), "oracle disagrees on {got}");

    // sweep on the same graph, exact comparison, including ties at delta
    let mut n = 0;
    for ch2 in (0..=80).map(|q| q as f64 * 0.25) {
        for ch3 in (0..=24).map(|q| q as f64 * 0.5) {
            for primary_cut in [false, true] {
                let mut t = four_link(ch2, ch3, 2.0);
                if primary_cut {
                    t = cut(t);
                }
                let got = route(&t, delta);
                let want = route_oracle(&t, LinkId(1), delta);
                ensure!((got.path.clone(), got.reason) == want, "ch2={ch2} ch3={ch3} cut={primary_cut}: {got} vs {want:?}");
                n += 1;
            }
        }
    }
    Ok(format!("via node 3 at +8 dB, Ch2 at +1 dB, {n} swept cases equal the enumeration"))
}

// ---- 5 ----

fn full_fallback() -> Outcome {
    let mut cfg = ChannelConfig::new(1, 1, 2, Qos::SecurityFirst);
    cfg.primary_link = Some(LinkId(1));
    let config = ControllerConfig { channels: vec![cfg], ..ControllerConfig::default() };
    let mut c = Controller::new(config, four_link(12.0, 2.0, 2.0), SimTime::ZERO).map_err(|e| e.to_string())?;
    c.start(SimTime::ZERO);
    c.on_qkey(CH, &SCRIPT_KEY.repeat(8), SimTime::from_millis(10)).map_err(|e| e.to_string())?;
    let before = c.channel(CH).unwrap().mode;
    ensure!(before.is_quantum(), "not in a quantum mode before the cut ({before})");
    let now = SimTime::from_millis(20);
    let reports: Vec<LossReport> =
        [1, 2, 3].into_iter().map(|l| LossReport { link: LinkId(l), reading: LossReading::Unreachable, timestamp: now }).collect();
    let batch = c.on_loss_reports(&reports, now);
    let st = c.channel(CH).unwrap();
    ensure!(st.mode == EncryptionMode::ClassicalOnly, "mode {}", st.mode);
    ensure!(!st.route.has_quantum_path(), "route {}", st.route);
    let set_mode = batch
        .commands
        .iter()
        .any(|cmd| matches!(cmd, Command::SetMode { channel, mode: EncryptionMode::ClassicalOnly } if *channel == CH));
    ensure!(set_mode, "no SetMode in the batch");
    let classical_adds: Vec<NodeId> = batch
        .commands
        .iter()
        .filter_map(|cmd| match cmd {
            Command::FlowMod { node, flow_mod: FlowMod::Add(r) } => match r.action {
                FlowAction::ForwardTo(ep) if ep.kind == CodecKind::Classical => Some(*node),
                _ => None,
            },
            _ => None,
        })
        .collect();
    ensure!(classical_adds.contains(&NodeId(1)) && classical_adds.contains(&NodeId(2)), "classical rules for {classical_adds:?}");
    let deletes = batch.commands.iter().filter(|c| matches!(c, Command::FlowMod { flow_mod: FlowMod::Delete { .. }, .. })).count();
    ensure!(deletes == 2, "{deletes} stale rules removed");
    Ok(format!(
        "{before} -> ClassicalOnly in one batch of {} commands: classical rules on nodes 1 and 2, 2 old rules removed",
        batch.commands.len()
    ))
}

// ---- 6 ----

fn trusted_repeater() -> Outcome {
    let sc = bundled("three-node").map_err(|e| e.to_string())?;
    let mut detail = String::new();
    for live in [false, true] {
        let r = qfabric::run(&sc, live).map_err(|e| e.to_string())?;
        passed_checks(&r)?;
        let s = r.stream("bulk").ok_or("no stream")?;
        ensure!(s.frames_delivered >= 1000, "{} frames", s.frames_delivered);
        ensure!(s.frames_delivered == s.frames_sent, "{} of {} delivered", s.frames_delivered, s.frames_sent);
        ensure!(s.integrity_failures == 0, "{} integrity failures", s.integrity_failures);
        let (a, b) = (r.channel(ChannelId(1)).unwrap(), r.channel(ChannelId(2)).unwrap());
        // each frame costs payload + checksum on both segments
        let per_segment = s.bytes_sent * 8 + s.frames_sent * 32;
        ensure!(a.consumed_bits == per_segment && b.consumed_bits == per_segment, "segment pools spent {} and {} bits", a.consumed_bits, b.consumed_bits);
        let e = r.exposures.iter().find(|e| e.node == NodeId(2)).ok_or("no exposure record for node 2")?;
        ensure!(e.frames == s.frames_delivered && e.bytes == s.bytes_sent, "exposure {e:?}");
        if !live {
            detail = format!(
                "{} frames intact, pools 1 and 2 each spent {} bits, node 2 exposed {} bytes (also over TCP)",
                s.frames_delivered, a.consumed_bits, e.bytes
            );
        }
    }
    Ok(detail)
}

// ---- 7 ----

fn runner(cases: u32) -> TestRunner {
    let config = Config { cases, failure_persistence: None, ..Config::default() };
    TestRunner::new_with_rng(config, TestRng::deterministic_rng(RngAlgorithm::ChaCha))
}

fn otp_identities() -> Result<usize, String> {
    let strat = (proptest::collection::vec(any::<u8>(), 0..512), 0usize..64, any::<u64>());
    runner(1000)
        .run(&strat, |(plain, spare, seed)| {
            let mut key = vec![0u8; plain.len() + spare];
            ChaCha8Rng::seed_from_u64(seed).fill_bytes(&mut key);
            let mut pools = MirroredPools::new(CH);
            if !key.is_empty() {
                pools.push_block(KeyBlock { channel: CH, bits: key.clone(), qber: 0.0, produced_at: SimTime::ZERO });
            }
            let cipher = otp_encode(&plain, &mut pools.near, SimTime::ZERO).unwrap();
            let xor: Vec<u8> = plain.iter().zip(&key).map(|(p, k)| p ^ k).collect();
            prop_assert_eq!(&cipher, &xor);
            prop_assert_eq!(otp_decode(&cipher, &mut pools.far, SimTime::ZERO).unwrap(), plain.clone());
            for side in [&pools.near, &pools.far] {
                prop_assert_eq!(side.consumed_bits_total(), plain.len() as u64 * 8);
                prop_assert_eq!(side.pushed_bits_total(), side.pool_level() + side.consumed_bits_total());
            }
            if spare < plain.len() {
                let starved = matches!(otp_encode(&plain, &mut pools.near, SimTime::ZERO), Err(CodecError::KeyStarvation { .. }));
                prop_assert!(starved);
            }
            Ok(())
        })
        .map_err(|e| format!("otp: {e}"))?;
    Ok(1000)
}

#[derive(Debug, Clone)]
enum Op {
    Push(Vec<u8>),
    Hex(String),
    Take(usize),
}

fn keystore_conservation() -> Result<usize, String> {
    let op = prop_oneof![
        proptest::collection::vec(any::<u8>(), 0..48).prop_map(Op::Push),
        "[0-9a-f]{0,32}|[0-9a-z]{1,7}".prop_map(Op::Hex),
        (0usize..80).prop_map(Op::Take),
    ];
    let (seqs, len) = (200, 50);
    runner(seqs)
        .run(&proptest::collection::vec(op, len), |ops| {
            let mut pool = KeyPool::new(CH);
            let mut stream = Vec::new();
            let mut cursor = 0;
            for (i, op) in ops.into_iter().enumerate() {
                let now = SimTime::from_millis(i as u64);
                match op {
                    Op::Push(b) => {
                        pool.push_block(KeyBlock { channel: CH, bits: b.clone(), qber: 0.0, produced_at: now });
                        stream.extend(b);
                    }
                    Op::Hex(h) => {
                        if pool.push_key_hex(&h, now).is_ok() {
                            let mut bytes = Vec::new();
                            for pair in h.as_bytes().chunks(2) {
                                bytes.push(u8::from_str_radix(std::str::from_utf8(pair).unwrap(), 16).unwrap());
                            }
                            stream.extend(bytes);
                        }
                    }
                    Op::Take(n) => match pool.take_material(n, Purpose::OtpData, now) {
                        Ok(got) => {
                            prop_assert_eq!(&got[..], &stream[cursor..cursor + n]);
                            cursor += n;
                        }
                        Err(KeyError::ZeroLength) => prop_assert_eq!(n, 0),
                        Err(KeyError::Insufficient { .. }) => prop_assert!(stream.len() - cursor < n),
                        Err(e) => prop_assert!(false, "{}", e),
                    },
                }
                prop_assert_eq!(pool.pool_level(), (stream.len() - cursor) as u64 * 8);
                prop_assert_eq!(pool.pushed_bits_total(), pool.pool_level() + pool.consumed_bits_total());
                let ledger: u64 = pool.ledger().iter().map(|r| r.bytes as u64 * 8).sum();
                prop_assert_eq!(ledger, pool.consumed_bits_total());
            }
            Ok(())
        })
        .map_err(|e| format!("keystore: {e}"))?;
    Ok(seqs as usize * len)
}

fn small_addr() -> impl Strategy<Value = Ipv4Addr> {
    (0u8..3).prop_map(|b| Ipv4Addr::new(10, 0, 0, b))
}

fn entrance<S: Strategy<Value = Ipv4Addr>>(a: S) -> impl Strategy<Value = EntrancePoint> {
    (a, any::<u16>(), 0u8..3, any::<bool>()).prop_map(|(address, port, k, dec)| EntrancePoint {
        address,
        port,
        kind: CodecKind::from_byte(k).unwrap(),
        direction: if dec { Direction::Decoder } else { Direction::Encoder },
    })
}

fn action<S: Strategy<Value = Ipv4Addr>>(a: S) -> impl Strategy<Value = FlowAction> {
    prop_oneof![Just(FlowAction::Drop), entrance(a).prop_map(FlowAction::ForwardTo)]
}

fn flow_match<A, P, C>(a: A, p: P, c: C) -> impl Strategy<Value = FlowMatch>
where
    A: Strategy<Value = Ipv4Addr>,
    P: Strategy<Value = u16>,
    C: Strategy<Value = u16>,
{
    (proptest::option::of(a), proptest::option::of(p), proptest::option::of(c))
        .prop_map(|(a, p, c)| FlowMatch { dst_address: a, dst_port: p, channel: c.map(ChannelId) })
}

fn flow_table_oracle() -> Result<usize, String> {
    let tables = 10_000;
    let strat = (
        proptest::collection::vec((0u16..4, flow_match(small_addr(), 0u16..3, 0u16..3), action(small_addr()), 0u64..4), 0..12),
        proptest::collection::vec((small_addr(), 0u16..3, 0u16..3), 1..8),
    );
    runner(tables)
        .run(&strat, |(specs, packets)| {
            let mut table = FlowTable::new();
            let mut rules = Vec::new();
            for (i, (priority, matcher, action, t)) in specs.into_iter().enumerate() {
                let rule = FlowRule { cookie: i as u64, priority, matcher, action, installed_at: SimTime(t) };
                table.install_rule(rule).unwrap();
                rules.push(rule);
            }
            for (a, p, c) in packets {
                let meta = PacketMeta { dst_address: a, dst_port: p, channel: ChannelId(c) };
                // highest priority, then earliest install, then install order
                let want = rules
                    .iter()
                    .enumerate()
                    .filter(|(_, r)| {
                        r.matcher.dst_address.is_none_or(|x| x == a)
                            && r.matcher.dst_port.is_none_or(|x| x == p)
                            && r.matcher.channel.is_none_or(|x| x == meta.channel)
                    })
                    .min_by_key(|(i, r)| (std::cmp::Reverse(r.priority), r.installed_at, *i))
                    .map_or(FlowAction::Drop, |(_, r)| r.action);
                prop_assert_eq!(table.match_packet(&meta), want);
            }
            Ok(())
        })
        .map_err(|e| format!("flow table: {e}"))?;
    Ok(tables as usize)
}

fn any_message() -> impl Strategy<Value = ControlMessage> {
    let any_addr = || any::<u32>().prop_map(Ipv4Addr::from);
    let rule = (any::<u64>(), any::<u16>(), flow_match(any_addr(), any::<u16>(), any::<u16>()), action(any_addr()))
        .prop_map(|(cookie, priority, matcher, action)| RuleSpec { cookie, priority, matcher, action });
    let stats = (any::<u64>(), any::<u16>(), any::<u64>(), any::<u64>())
        .prop_map(|(cookie, priority, packets, bytes)| FlowStats { cookie, priority, packets, bytes });
    let body = prop_oneof![
        Just(MessageBody::Hello),
        proptest::collection::vec(any::<u8>(), 0..64).prop_map(MessageBody::Echo),
        rule.prop_map(|r| MessageBody::FlowMod(FlowMod::Add(r))),
        any::<u64>().prop_map(|cookie| MessageBody::FlowMod(FlowMod::Delete { cookie })),
        (any::<u16>(), any::<bool>()).prop_map(|(port, up)| MessageBody::PortStatus { port, up }),
        Just(MessageBody::FlowStatsRequest),
        proptest::collection::vec(stats, 0..12).prop_map(MessageBody::FlowStatsReply),
        (any::<u16>(), proptest::collection::vec(any::<u8>(), 0..32))
            .prop_map(|(c, data)| MessageBody::Error { code: ErrorCode(c), data }),
    ];
    (any::<u32>(), body).prop_map(|(xid, body)| ControlMessage::new(xid, body))
}

fn control_codec() -> Result<(usize, usize), String> {
    let messages = 10_000;
    runner(messages)
        .run(&any_message(), |msg| {
            let wire = encode_control(&msg).unwrap();
            prop_assert_eq!(decode_control(&wire).unwrap(), msg);
            Ok(())
        })
        .map_err(|e| format!("control round trip: {e}"))?;
    let buffers = 100_000;
    let buf = prop_oneof![
        proptest::collection::vec(any::<u8>(), 0..80),
        (0u8..8, any::<u32>(), proptest::collection::vec(any::<u8>(), 0..70)).prop_map(|(ty, xid, body)| {
            let mut v = vec![0x4F, 0x46, 0x04, ty];
            v.extend_from_slice(&xid.to_be_bytes());
            v.extend_from_slice(&((body.len() + 10) as u16).to_be_bytes());
            v.extend(body);
            v
        }),
    ];
    runner(buffers)
        .run(&buf, |buf| {
            if let Ok(msg) = decode_control(&buf) {
                prop_assert_eq!(encode_control(&msg).unwrap(), buf);
            }
            Ok(())
        })
        .map_err(|e| format!("decoder totality: {e}"))?;
    Ok((messages as usize, buffers as usize))
}

fn mode_table() -> Result<usize, String> {
    use EncryptionMode::*;
    let qos = [
        Qos::SecurityFirst,
        Qos::BandwidthFirst,
        Qos::ExplicitCodec(CodecKind::Transparent),
        Qos::ExplicitCodec(CodecKind::Quantum),
        Qos::ExplicitCodec(CodecKind::Classical),
    ];
    let threshold = 1_000u64;
    let mut n = 0;
    for q in qos {
        for critical in [false, true] {
            let mut policy = ChannelPolicy::new(CH, q);
            policy.critical = critical;
            policy.traffic_threshold_bps = threshold;
            for pool_bits in [0, 1, 127, 128, 256, 1 << 20] {
                for traffic_bps in [0.0, 999.0, 1_000.0, 1_001.0, 1e9] {
                    for refill_bps in [0.0, 999.0, 1_000.0, 1_001.0, 1e9] {
                        for alive in [false, true] {
                            let inputs = ModeInputs { pool_bits, traffic_bps, refill_bps, quantum_path_alive: alive };
                            let got = select_mode(&policy, &inputs);
                            let usable = alive && pool_bits > 0;
                            let sustainable = refill_bps >= traffic_bps && traffic_bps <= threshold as f64;
                            let want = match (q, usable) {
                                (Qos::ExplicitCodec(CodecKind::Transparent), true) if critical => QuantumWrappedClassical,
                                (Qos::ExplicitCodec(CodecKind::Transparent), _) => Transparent,
                                (_, false) => ClassicalOnly,
                                (Qos::ExplicitCodec(CodecKind::Quantum), _) => DirectOtp,
                                (Qos::ExplicitCodec(CodecKind::Classical), _) => QuantumWrappedClassical,
                                _ if sustainable => DirectOtp,
                                (Qos::SecurityFirst, _) => QuantumWrappedClassical,
                                _ if critical => QuantumWrappedClassical,
                                _ => ClassicalOnly,
                            };
                            ensure!(got == want, "{policy:?} {inputs:?}: {got} want {want}");
                            ensure!(usable || !got.is_quantum(), "quantum mode without keys: {policy:?} {inputs:?}");
                            ensure!(!(critical && usable) || got >= QuantumWrappedClassical, "critical floor: {policy:?} {inputs:?}");
                            n += 1;
                        }
                    }
                }
            }
        }
    }
    Ok(n)
}

fn replay() -> Result<usize, String> {
    for name in BUNDLED {
        let sc = bundled(name).map_err(|e| e.to_string())?;
        let a = run_scenario(&sc).map_err(|e| e.to_string())?;
        let b = run_scenario(&sc).map_err(|e| e.to_string())?;
        ensure!(a == b, "{name}: reports differ");
        for f in [ReportFormat::Lines, ReportFormat::Table] {
            ensure!(a.render(f) == b.render(f), "{name}: renders differ");
            ensure!(a.render(f) == a.render(f), "{name}: render not deterministic");
        }
    }
    Ok(BUNDLED.len())
}

fn property_suites() -> Outcome {
    let otp = otp_identities()?;
    let ops = keystore_conservation()?;
    let tables = flow_table_oracle()?;
    let (msgs, bufs) = control_codec()?;
    let rows = mode_table()?;
    let scenarios = replay()?;
    Ok(format!(
        "otp {otp} strings, keystore {ops} ops, {tables} tables, {msgs} round trips, {bufs} fuzz buffers, {rows} mode cases, {scenarios} scenarios replayed"
    ))
}

fn main() -> ExitCode {
    let criteria: [Criterion; 7] = [
        ("calibration reproduction", calibration),
        ("discard rule", discard_rule),
        ("qchannel/qkey script over HTTP", qkey_script),
        ("reroute policy", reroute_policy),
        ("full fallback", full_fallback),
        ("trusted repeater", trusted_repeater),
        ("property suites", property_suites),
    ];
    let mut failed = 0;
    for (i, (name, check)) in criteria.into_iter().enumerate() {
        let outcome = catch_unwind(AssertUnwindSafe(check)).unwrap_or_else(|p| {
            Err(p.downcast_ref::<String>().cloned().or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string())).unwrap_or_default())
        });
        match outcome {
            Ok(detail) => println!("criterion {}: PASS {name}: {detail}", i + 1),
            Err(why) => {
                failed += 1;
                println!("criterion {}: FAIL {name}: {why}", i + 1);
            }
        }
    }
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
