use std::net::Ipv4Addr;

use proptest::prelude::*;
use qfabric_core::codec::{CodecKind, Direction, EntrancePoint};
use qfabric_core::flow::wire::{decode_control, encode_control, ErrorCode};
use qfabric_core::flow::{
    ControlMessage, FlowAction, FlowMatch, FlowMod, FlowRule, FlowStats, FlowTable, MessageBody, PacketMeta, RuleSpec,
};
use qfabric_core::net::ChannelId;
use qfabric_core::SimTime;

// Small domains so that random rules and packets actually collide.
fn addr() -> impl Strategy<Value = Ipv4Addr> {
    (0u8..3).prop_map(|b| Ipv4Addr::new(10, 0, 0, b))
}

fn any_addr() -> impl Strategy<Value = Ipv4Addr> {
    any::<u32>().prop_map(Ipv4Addr::from)
}

fn entrance(a: impl Strategy<Value = Ipv4Addr>) -> impl Strategy<Value = EntrancePoint> {
    (a, any::<u16>(), 0u8..3, any::<bool>()).prop_map(|(address, port, k, dec)| EntrancePoint {
        address,
        port,
        kind: CodecKind::from_byte(k).unwrap(),
        direction: if dec { Direction::Decoder } else { Direction::Encoder },
    })
}

fn matcher(a: impl Strategy<Value = Ipv4Addr>, port: impl Strategy<Value = u16>, ch: impl Strategy<Value = u16>) -> impl Strategy<Value = FlowMatch> {
    (proptest::option::of(a), proptest::option::of(port), proptest::option::of(ch)).prop_map(|(a, p, c)| FlowMatch {
        dst_address: a,
        dst_port: p,
        channel: c.map(ChannelId),
    })
}

fn action(a: impl Strategy<Value = Ipv4Addr>) -> impl Strategy<Value = FlowAction> {
    prop_oneof![Just(FlowAction::Drop), entrance(a).prop_map(FlowAction::ForwardTo)]
}

fn any_rule() -> impl Strategy<Value = RuleSpec> {
    (any::<u64>(), any::<u16>(), matcher(any_addr(), any::<u16>(), any::<u16>()), action(any_addr()))
        .prop_map(|(cookie, priority, matcher, action)| RuleSpec { cookie, priority, matcher, action })
}

fn any_message() -> impl Strategy<Value = ControlMessage> {
    let stats = (any::<u64>(), any::<u16>(), any::<u64>(), any::<u64>())
        .prop_map(|(cookie, priority, packets, bytes)| FlowStats { cookie, priority, packets, bytes });
    let body = prop_oneof![
        Just(MessageBody::Hello),
        proptest::collection::vec(any::<u8>(), 0..64).prop_map(MessageBody::Echo),
        any_rule().prop_map(|r| MessageBody::FlowMod(FlowMod::Add(r))),
        any::<u64>().prop_map(|cookie| MessageBody::FlowMod(FlowMod::Delete { cookie })),
        (any::<u16>(), any::<bool>()).prop_map(|(port, up)| MessageBody::PortStatus { port, up }),
        Just(MessageBody::FlowStatsRequest),
        proptest::collection::vec(stats, 0..12).prop_map(MessageBody::FlowStatsReply),
        (any::<u16>(), proptest::collection::vec(any::<u8>(), 0..32))
            .prop_map(|(c, data)| MessageBody::Error { code: ErrorCode(c), data }),
    ];
    (any::<u32>(), body).prop_map(|(xid, body)| ControlMessage::new(xid, body))
}

/// Naive reference: sort everything by (priority desc, installed_at asc,
/// insertion index asc) and take the first match.
fn naive(rules: &[FlowRule], meta: &PacketMeta) -> FlowAction {
    let mut idx: Vec<usize> = (0..rules.len()).collect();
    idx.sort_by(|&a, &b| {
        rules[b]
            .priority
            .cmp(&rules[a].priority)
            .then(rules[a].installed_at.cmp(&rules[b].installed_at))
            .then(a.cmp(&b))
    });
    for i in idx {
        let m = &rules[i].matcher;
        let hit = m.dst_address.is_none_or(|x| x == meta.dst_address)
            && m.dst_port.is_none_or(|x| x == meta.dst_port)
            && m.channel.is_none_or(|x| x == meta.channel);
        if hit {
            return rules[i].action;
        }
    }
    FlowAction::Drop
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn table_matches_linear_scan(
        specs in proptest::collection::vec(
            (0u16..4, matcher(addr(), 0u16..3, 0u16..3), action(addr()), 0u64..4),
            0..12,
        ),
        packets in proptest::collection::vec((addr(), 0u16..3, 0u16..3), 1..8),
    ) {
        let mut table = FlowTable::new();
        let mut installed = Vec::new();
        for (i, (priority, matcher, action, t)) in specs.into_iter().enumerate() {
            let rule = FlowRule { cookie: i as u64, priority, matcher, action, installed_at: SimTime(t) };
            table.install_rule(rule).unwrap();
            installed.push(rule);
        }
        for (a, p, c) in packets {
            let meta = PacketMeta { dst_address: a, dst_port: p, channel: ChannelId(c) };
            let got = table.match_packet(&meta);
            prop_assert_eq!(got, naive(&installed, &meta));
            prop_assert_eq!(got, table.match_packet(&meta));
        }
    }

    #[test]
    fn control_round_trip(msg in any_message()) {
        let wire = encode_control(&msg).unwrap();
        prop_assert_eq!(u16::from_be_bytes([wire[8], wire[9]]) as usize, wire.len());
        prop_assert_eq!(decode_control(&wire).unwrap(), msg);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100_000))]

    /// Arbitrary bytes never panic the decoder, and anything it accepts
    /// re-encodes to the same bytes.
    #[test]
    fn decoder_total_and_canonical(
        buf in prop_oneof![
            proptest::collection::vec(any::<u8>(), 0..80),
            // valid header prefix so the body parsers get exercised
            (0u8..8, any::<u32>(), proptest::collection::vec(any::<u8>(), 0..70)).prop_map(|(ty, xid, body)| {
                let mut v = vec![0x4F, 0x46, 0x04, ty];
                v.extend_from_slice(&xid.to_be_bytes());
                v.extend_from_slice(&((body.len() + 10) as u16).to_be_bytes());
                v.extend(body);
                v
            }),
        ]
    ) {
        if let Ok(msg) = decode_control(&buf) {
            prop_assert_eq!(encode_control(&msg).unwrap(), buf);
        }
    }
}
