use proptest::prelude::*;
use qfabric_core::codec::{
    deframe, otp_decode, otp_encode, BootstrapSecret, ChannelDecoder, ChannelEncoder, ClassicalSession, CodecError,
    Protection, DEFAULT_REKEY_AFTER_BYTES,
};
use qfabric_core::keystore::{KeyError, KeyPool, MirroredPools, Purpose};
use qfabric_core::net::ChannelId;
use qfabric_core::qkd::KeyBlock;
use qfabric_core::SimTime;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

const CH: ChannelId = ChannelId(1);

#[derive(Debug, Clone)]
enum Op {
    Push(Vec<u8>),
    PushHex(String),
    Take(usize, bool),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        proptest::collection::vec(any::<u8>(), 0..40).prop_map(Op::Push),
        // mostly valid hex, sometimes odd length or bad digits
        "[0-9a-fA-F]{0,24}|[0-9a-gG]{1,9}".prop_map(Op::PushHex),
        (0usize..64, any::<bool>()).prop_map(|(n, wrap)| Op::Take(n, wrap)),
    ]
}

fn check_conservation(pool: &KeyPool) -> Result<(), TestCaseError> {
    prop_assert_eq!(pool.pushed_bits_total(), pool.pool_level() + pool.consumed_bits_total());
    let ledger: u64 = pool.ledger().iter().map(|r| r.bytes as u64 * 8).sum();
    prop_assert_eq!(ledger, pool.consumed_bits_total());
    Ok(())
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(200))]

    /// 200 sequences of 50 operations: 10^4 operations, checked after each.
    #[test]
    fn conservation_and_one_time_use(ops in proptest::collection::vec(op(), 50)) {
        let mut pool = KeyPool::new(CH);
        let mut stream: Vec<u8> = Vec::new();
        let mut cursor = 0usize;
        for (i, op) in ops.into_iter().enumerate() {
            let now = SimTime::from_millis(i as u64);
            match op {
                Op::Push(bytes) => {
                    let added = pool.push_block(KeyBlock { channel: CH, bits: bytes.clone(), qber: 0.0, produced_at: now });
                    prop_assert_eq!(added, bytes.len() as u64 * 8);
                    stream.extend(bytes);
                }
                Op::PushHex(h) => {
                    let before = pool.clone();
                    match pool.push_key_hex(&h, now) {
                        Ok(bits) => {
                            prop_assert_eq!(bits, 4 * h.len() as u64);
                            stream.extend(hex::decode(&h).unwrap());
                        }
                        Err(_) => {
                            prop_assert!(h.is_empty() || h.len() % 2 == 1 || hex::decode(&h).is_err());
                            prop_assert_eq!(&pool, &before);
                        }
                    }
                }
                Op::Take(n, wrap) => {
                    let purpose = if wrap { Purpose::SessionKeyWrap } else { Purpose::OtpData };
                    let before = pool.clone();
                    match pool.take_material(n, purpose, now) {
                        Ok(got) => {
                            prop_assert_eq!(&got[..], &stream[cursor..cursor + n]);
                            cursor += n;
                        }
                        Err(KeyError::ZeroLength) => {
                            prop_assert_eq!(n, 0);
                            prop_assert_eq!(&pool, &before);
                        }
                        Err(KeyError::Insufficient { available }) => {
                            prop_assert_eq!(available, (stream.len() - cursor) as u64 * 8);
                            prop_assert!(available < n as u64 * 8);
                            prop_assert_eq!(&pool, &before);
                        }
                        Err(e) => prop_assert!(false, "unexpected {e}"),
                    }
                }
            }
            check_conservation(&pool)?;
            prop_assert_eq!(pool.pool_level(), (stream.len() - cursor) as u64 * 8);
        }
    }
}

fn mirrored(n: usize, seed: u64) -> MirroredPools {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut bits = vec![0u8; n];
    rand::RngCore::fill_bytes(&mut rng, &mut bits);
    let mut p = MirroredPools::new(CH);
    if n > 0 {
        p.push_block(KeyBlock { channel: CH, bits, qber: 0.0, produced_at: SimTime::ZERO });
    }
    p
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(1000))]

    #[test]
    fn otp_involution_and_accounting(plain in proptest::collection::vec(any::<u8>(), 0..300), spare in 0usize..64, seed: u64) {
        let mut p = mirrored(plain.len() + spare, seed);
        let cipher = otp_encode(&plain, &mut p.near, SimTime::ZERO).unwrap();
        prop_assert_eq!(cipher.len(), plain.len());
        if plain.len() >= 8 {
            prop_assert_ne!(&cipher, &plain);
        }
        let back = otp_decode(&cipher, &mut p.far, SimTime::ZERO).unwrap();
        prop_assert_eq!(&back, &plain);
        for side in [&p.near, &p.far] {
            prop_assert_eq!(side.consumed_bits_total(), plain.len() as u64 * 8);
            prop_assert_eq!(side.pool_level(), spare as u64 * 8);
            check_conservation(side)?;
        }
        // not enough left for another copy unless spare covers it
        let again = otp_encode(&plain, &mut p.near, SimTime::ZERO);
        if spare < plain.len() {
            let short = matches!(again, Err(CodecError::KeyStarvation { .. }));
            prop_assert!(short);
        }
    }

    #[test]
    fn framed_round_trip_every_codec(plains in proptest::collection::vec(proptest::collection::vec(any::<u8>(), 0..200), 1..6), seed: u64) {
        let total: usize = plains.iter().map(|p| p.len() + 4).sum::<usize>() + 64;
        let mut pools = mirrored(total * 2, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let boot = BootstrapSecret([7; 32]);
        let (mut tx_s, offer) =
            ClassicalSession::establish(CH, &mut pools.near, &boot, &mut rng, SimTime::ZERO, DEFAULT_REKEY_AFTER_BYTES);
        let mut rx_s = ClassicalSession::accept(&offer, &mut pools.far, &boot, SimTime::ZERO, DEFAULT_REKEY_AFTER_BYTES).unwrap();
        prop_assert_eq!(tx_s.key(), rx_s.key());
        let mut enc = ChannelEncoder::new(CH);
        let mut dec = ChannelDecoder::new(CH);
        for (i, plain) in plains.iter().enumerate() {
            let wire = match i % 3 {
                0 => enc.encode(plain, Protection::Quantum(&mut pools.near), SimTime::ZERO),
                1 => enc.encode(plain, Protection::Classical(&mut tx_s), SimTime::ZERO),
                _ => enc.encode(plain, Protection::Transparent, SimTime::ZERO),
            }
            .unwrap();
            let f = deframe(&wire).unwrap();
            if i % 3 == 2 {
                prop_assert_eq!(&f.payload, plain);
            }
            let got = match i % 3 {
                0 => dec.decode(&f, Protection::Quantum(&mut pools.far), SimTime::ZERO),
                1 => dec.decode(&f, Protection::Classical(&mut rx_s), SimTime::ZERO),
                _ => dec.decode(&f, Protection::Transparent, SimTime::ZERO),
            }
            .unwrap();
            prop_assert_eq!(&got, plain);
        }
        prop_assert_eq!(pools.near.pool_level(), pools.far.pool_level());
        prop_assert_eq!(pools.near.ledger(), pools.far.ledger());
    }
}

#[test]
fn desynchronised_pool_is_detected() {
    let mut p = mirrored(256, 3);
    p.far.take_material(1, Purpose::OtpData, SimTime::ZERO).unwrap();
    let mut enc = ChannelEncoder::new(CH);
    let mut dec = ChannelDecoder::new(CH);
    let wire = enc.encode(b"frame body", Protection::Quantum(&mut p.near), SimTime::ZERO).unwrap();
    let f = deframe(&wire).unwrap();
    assert_eq!(dec.decode(&f, Protection::Quantum(&mut p.far), SimTime::ZERO), Err(CodecError::IntegrityFailure));
}
