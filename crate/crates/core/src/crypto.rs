//! Node identities and content digests.
//!
//! Entries and beacons are signed by their author. The scheme is
//! pluggable behind [`KeyPair`]/[`PublicKey`]: the default is Ed25519,
//! and a fast deterministic test double exists for property tests that
//! would otherwise spend most of their time in signature math. Keys are
//! derived from seeds so whole simulation runs stay reproducible.

use std::fmt;

use ring::signature::{Ed25519KeyPair, KeyPair as _, UnparsedPublicKey, ED25519};
use sha2::{Digest as _, Sha256};

const SCHEME_ED25519: u8 = 1;
const SCHEME_MOCK: u8 = 2;

/// A 32-byte SHA-256 digest. The all-zero digest marks "no predecessor".
#[derive(Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Digest(pub [u8; 32]);

impl Digest {
    pub const ZERO: Digest = Digest([0u8; 32]);

    pub fn compute(bytes: &[u8]) -> Digest {
        let mut h = Sha256::new();
        h.update(bytes);
        Digest(h.finalize().into())
    }

    pub fn is_zero(&self) -> bool {
        *self == Digest::ZERO
    }

    pub fn to_hex(&self) -> String {
        let mut s = String::with_capacity(64);
        for b in self.0 {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

impl fmt::Debug for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Digest({}..)", &self.to_hex()[..8])
    }
}

impl fmt::Display for Digest {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.to_hex())
    }
}

/// Scheme tag byte followed by the raw public key. Ordering is plain
/// byte-lexicographic; this is the tie-break order for concurrent log
/// entries with equal timestamps.
#[derive(Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct PublicKey(Vec<u8>);

impl PublicKey {
    pub fn as_bytes(&self) -> &[u8] {
        &self.0
    }

    pub fn from_bytes(bytes: Vec<u8>) -> PublicKey {
        PublicKey(bytes)
    }

    pub fn verify(&self, message: &[u8], signature: &Signature) -> bool {
        match self.0.first() {
            Some(&SCHEME_ED25519) => {
                UnparsedPublicKey::new(&ED25519, &self.0[1..])
                    .verify(message, &signature.0)
                    .is_ok()
            }
            Some(&SCHEME_MOCK) => mock_sign(&self.0, message).0 == signature.0,
            _ => false,
        }
    }

    pub fn short_hex(&self) -> String {
        let mut s = String::new();
        for b in self.0.iter().skip(1).take(4) {
            s.push_str(&format!("{b:02x}"));
        }
        s
    }
}

impl fmt::Debug for PublicKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "PublicKey({}..)", self.short_hex())
    }
}

#[derive(Clone, PartialEq, Eq, Hash)]
pub struct Signature(pub Vec<u8>);

impl fmt::Debug for Signature {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "Signature({} bytes)", self.0.len())
    }
}

/// A signing identity. Construction is seed-based only; there is no
/// ambient randomness anywhere in the crate.
pub struct KeyPair {
    inner: Inner,
    public: PublicKey,
}

enum Inner {
    Ed25519(Ed25519KeyPair),
    Mock,
}

impl KeyPair {
    pub fn ed25519_from_seed(seed: &[u8; 32]) -> KeyPair {
        let kp = Ed25519KeyPair::from_seed_unchecked(seed)
            .expect("32-byte seed is always a valid Ed25519 seed");
        let mut public = vec![SCHEME_ED25519];
        public.extend_from_slice(kp.public_key().as_ref());
        KeyPair {
            inner: Inner::Ed25519(kp),
            public: PublicKey(public),
        }
    }

    /// Deterministic test double: NOT a real signature scheme (anyone
    /// holding the public key can forge). It keeps the tamper-evidence
    /// contract — any change to the message or key invalidates the
    /// signature — which is all the property tests need.
    pub fn mock_from_seed(seed: &[u8; 32]) -> KeyPair {
        let mut h = Sha256::new();
        h.update(b"mock-public-key");
        h.update(seed);
        let mut public = vec![SCHEME_MOCK];
        public.extend_from_slice(&h.finalize());
        KeyPair {
            inner: Inner::Mock,
            public: PublicKey(public),
        }
    }

    pub fn public(&self) -> &PublicKey {
        &self.public
    }

    pub fn sign(&self, message: &[u8]) -> Signature {
        match &self.inner {
            Inner::Ed25519(kp) => Signature(kp.sign(message).as_ref().to_vec()),
            Inner::Mock => mock_sign(&self.public.0, message),
        }
    }
}

impl fmt::Debug for KeyPair {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "KeyPair({}..)", self.public.short_hex())
    }
}

fn mock_sign(public: &[u8], message: &[u8]) -> Signature {
    let mut h = Sha256::new();
    h.update(b"mock-signature");
    h.update(public);
    h.update(message);
    Signature(h.finalize().to_vec())
}

/// Derive a 32-byte seed from a master seed and a context label, e.g. one
/// stream per node plus separate streams for links and movement.
pub fn derive_seed(master: u64, context: &str) -> [u8; 32] {
    let mut h = Sha256::new();
    h.update(master.to_be_bytes());
    h.update(context.as_bytes());
    h.finalize().into()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ed25519_sign_verify() {
        let kp = KeyPair::ed25519_from_seed(&derive_seed(1, "a"));
        let sig = kp.sign(b"hello");
        assert!(kp.public().verify(b"hello", &sig));
        assert!(!kp.public().verify(b"hellp", &sig));
        let other = KeyPair::ed25519_from_seed(&derive_seed(1, "b"));
        assert!(!other.public().verify(b"hello", &sig));
    }

    #[test]
    fn mock_sign_verify() {
        let kp = KeyPair::mock_from_seed(&derive_seed(2, "a"));
        let sig = kp.sign(b"hello");
        assert!(kp.public().verify(b"hello", &sig));
        assert!(!kp.public().verify(b"hellp", &sig));
        let other = KeyPair::mock_from_seed(&derive_seed(2, "b"));
        assert!(!other.public().verify(b"hello", &sig));
    }

    #[test]
    fn seed_derivation_is_stable_and_context_separated() {
        assert_eq!(derive_seed(7, "x"), derive_seed(7, "x"));
        assert_ne!(derive_seed(7, "x"), derive_seed(7, "y"));
        assert_ne!(derive_seed(7, "x"), derive_seed(8, "x"));
    }

    #[test]
    fn digest_hex_roundtrip_shape() {
        let d = Digest::compute(b"abc");
        assert_eq!(d.to_hex().len(), 64);
        assert!(Digest::ZERO.is_zero());
        assert!(!d.is_zero());
    }
}
