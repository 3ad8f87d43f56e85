//! Pluggable weight-file encryption seam.
//!
//! The protocol only needs `decrypt(key, encrypt(key, b)) == b`; the concrete
//! scheme is deployment policy. The reference cipher is a keyed stream:
//! keystream block `i` is SHA-256(key || i), XORed over the payload. The
//! identity cipher exists for deterministic tests and log inspection.

use sha2::{Digest, Sha256};

pub trait Cipher: Send + Sync {
    fn encrypt(&self, key: &[u8], bytes: &[u8]) -> Vec<u8>;
    fn decrypt(&self, key: &[u8], bytes: &[u8]) -> Vec<u8>;
    fn name(&self) -> &'static str;
}

/// No-op cipher.
#[derive(Debug, Default, Clone, Copy)]
pub struct IdentityCipher;

impl Cipher for IdentityCipher {
    fn encrypt(&self, _key: &[u8], bytes: &[u8]) -> Vec<u8> {
        bytes.to_vec()
    }

    fn decrypt(&self, _key: &[u8], bytes: &[u8]) -> Vec<u8> {
        bytes.to_vec()
    }

    fn name(&self) -> &'static str {
        "identity"
    }
}

/// SHA-256 keystream XOR cipher (symmetric: decrypt == encrypt).
#[derive(Debug, Default, Clone, Copy)]
pub struct XorShaStreamCipher;

fn keystream_apply(key: &[u8], bytes: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(bytes.len());
    let mut counter: u64 = 0;
    let mut offset = 0;
    while offset < bytes.len() {
        let mut hasher = Sha256::new();
        hasher.update(key);
        hasher.update(counter.to_be_bytes());
        let block = hasher.finalize();
        let take = block.len().min(bytes.len() - offset);
        for i in 0..take {
            out.push(bytes[offset + i] ^ block[i]);
        }
        offset += take;
        counter += 1;
    }
    out
}

impl Cipher for XorShaStreamCipher {
    fn encrypt(&self, key: &[u8], bytes: &[u8]) -> Vec<u8> {
        keystream_apply(key, bytes)
    }

    fn decrypt(&self, key: &[u8], bytes: &[u8]) -> Vec<u8> {
        keystream_apply(key, bytes)
    }

    fn name(&self) -> &'static str {
        "xor-sha256-stream"
    }
}
