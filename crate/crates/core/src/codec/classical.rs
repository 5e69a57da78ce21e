//! Classical codec: a symmetric stream cipher whose session keys are
//! refreshed from quantum key material when it is available.
//!
//! The keystream for one frame is ChaCha20 keyed by the 32-byte session key
//! with the frame's nonce as the 64-bit stream id. Encoder and decoder keep
//! their nonce counters in lockstep; the transport is in-order.

use alloc::vec;
use alloc::vec::Vec;

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;

use super::CodecError;
use crate::keystore::{KeyPool, Purpose};
use crate::net::ChannelId;
use crate::SimTime;

pub const SESSION_KEY_BYTES: usize = 32;

/// Default rekey interval: 1 MiB of payload per session key.
pub const DEFAULT_REKEY_AFTER_BYTES: u64 = 1 << 20;

/// ChaCha20 keystream for `(key, nonce)`.
pub fn keystream(key: &[u8; 32], nonce: u64, len: usize) -> Vec<u8> {
    let mut rng = ChaCha20Rng::from_seed(*key);
    rng.set_stream(nonce);
    let mut out = vec![0u8; len];
    rng.fill_bytes(&mut out);
    out
}

fn xor_in_place(data: &mut [u8], pad: &[u8]) {
    for (d, p) in data.iter_mut().zip(pad) {
        *d ^= p;
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SessionMode {
    /// Session key carried to the peer under one-time-pad with pool material.
    QuantumWrapped,
    /// No quantum key available; session key carried under the pre-shared
    /// bootstrap secret.
    Bootstrap,
}

/// Pre-shared per-link secret standing in for a certificate PKI.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BootstrapSecret(pub [u8; 32]);

/// What the initiator sends to the peer to share a new session key.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SessionOffer {
    pub channel: ChannelId,
    pub mode: SessionMode,
    pub wrap_nonce: u64,
    pub wrapped_key: [u8; SESSION_KEY_BYTES],
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ClassicalSession {
    pub channel: ChannelId,
    session_key: [u8; SESSION_KEY_BYTES],
    pub nonce_counter: u64,
    pub established_at: SimTime,
    pub rekey_after_bytes: u64,
    pub bytes_processed: u64,
    pub mode: SessionMode,
}

impl ClassicalSession {
    /// Starts a session with a fresh random key. Uses 32 bytes of pool
    /// material to wrap the key when the pool can spare them, otherwise falls
    /// back to the bootstrap secret.
    pub fn establish<R: RngCore + ?Sized>(
        channel: ChannelId,
        pool: &mut KeyPool,
        bootstrap: &BootstrapSecret,
        rng: &mut R,
        now: SimTime,
        rekey_after_bytes: u64,
    ) -> (ClassicalSession, SessionOffer) {
        let mut session_key = [0u8; SESSION_KEY_BYTES];
        rng.fill_bytes(&mut session_key);
        let wrap_nonce = rng.next_u64();
        let mut wrapped_key = session_key;
        let mode = match pool.take_material(SESSION_KEY_BYTES, Purpose::SessionKeyWrap, now) {
            Ok(pad) => {
                xor_in_place(&mut wrapped_key, &pad);
                SessionMode::QuantumWrapped
            }
            Err(_) => {
                xor_in_place(&mut wrapped_key, &keystream(&bootstrap.0, wrap_nonce, SESSION_KEY_BYTES));
                SessionMode::Bootstrap
            }
        };
        let session = ClassicalSession {
            channel,
            session_key,
            nonce_counter: 0,
            established_at: now,
            rekey_after_bytes,
            bytes_processed: 0,
            mode,
        };
        (session, SessionOffer { channel, mode, wrap_nonce, wrapped_key })
    }

    /// Peer side of [`ClassicalSession::establish`]: unwraps the offered key
    /// with the mirrored pool or the bootstrap secret.
    pub fn accept(
        offer: &SessionOffer,
        pool: &mut KeyPool,
        bootstrap: &BootstrapSecret,
        now: SimTime,
        rekey_after_bytes: u64,
    ) -> Result<ClassicalSession, CodecError> {
        let mut session_key = offer.wrapped_key;
        match offer.mode {
            SessionMode::QuantumWrapped => {
                let pad = pool
                    .take_material(SESSION_KEY_BYTES, Purpose::SessionKeyWrap, now)
                    .map_err(CodecError::from)?;
                xor_in_place(&mut session_key, &pad);
            }
            SessionMode::Bootstrap => {
                xor_in_place(&mut session_key, &keystream(&bootstrap.0, offer.wrap_nonce, SESSION_KEY_BYTES));
            }
        }
        Ok(ClassicalSession {
            channel: offer.channel,
            session_key,
            nonce_counter: 0,
            established_at: now,
            rekey_after_bytes,
            bytes_processed: 0,
            mode: offer.mode,
        })
    }

    #[cfg(test)]
    pub(crate) fn from_key(channel: ChannelId, key: [u8; 32], rekey_after_bytes: u64) -> ClassicalSession {
        ClassicalSession {
            channel,
            session_key: key,
            nonce_counter: 0,
            established_at: SimTime::ZERO,
            rekey_after_bytes,
            bytes_processed: 0,
            mode: SessionMode::Bootstrap,
        }
    }

    pub fn key(&self) -> &[u8; SESSION_KEY_BYTES] {
        &self.session_key
    }

    pub fn needs_rekey(&self, next_len: usize) -> bool {
        self.bytes_processed + next_len as u64 > self.rekey_after_bytes
    }

    fn apply(&mut self, data: &[u8]) -> Result<Vec<u8>, CodecError> {
        if self.needs_rekey(data.len()) {
            return Err(CodecError::RekeyRequired);
        }
        let mut out = data.to_vec();
        xor_in_place(&mut out, &keystream(&self.session_key, self.nonce_counter, data.len()));
        self.nonce_counter += 1;
        self.bytes_processed += data.len() as u64;
        Ok(out)
    }

    pub fn classical_encode(&mut self, plain: &[u8]) -> Result<Vec<u8>, CodecError> {
        self.apply(plain)
    }

    pub fn classical_decode(&mut self, cipher: &[u8]) -> Result<Vec<u8>, CodecError> {
        self.apply(cipher)
    }
}
