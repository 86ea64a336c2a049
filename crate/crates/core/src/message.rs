//! Wire messages exchanged between nodes.
//!
//! Everything a node ever emits is one of five frames: discovery beacons,
//! beacon replies, log updates, and tail-digest queries/responses. The
//! encoding follows the same canonical rules as log entries (fixed field
//! order, big-endian integers, length-prefixed byte strings) so traces
//! replay bit-exactly; the exact layouts are written down in
//! `docs/protocol.md`.

use std::collections::BTreeMap;

use crate::crypto::{Digest, KeyPair, PublicKey, Signature};
use crate::log::{LogEntry, LogRole, WireDecodeError};
use crate::naming::Name;

const TAG_BEACON: u8 = 0;
const TAG_BEACON_REPLY: u8 = 1;
const TAG_LOG_UPDATE: u8 = 2;
const TAG_TAIL_QUERY: u8 = 3;
const TAG_TAIL_RESPONSE: u8 = 4;

/// Periodic discovery frame: who I am and which logs I hold.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Beacon {
    pub sender: PublicKey,
    pub total_logs: u64,
    /// Set when `names` lists only the first N of `total_logs`.
    pub truncated: bool,
    pub names: Vec<Name>,
    pub signature: Signature,
}

impl Beacon {
    pub fn build(sender: &KeyPair, total_logs: u64, truncated: bool, names: Vec<Name>) -> Beacon {
        let mut b = Beacon {
            sender: sender.public().clone(),
            total_logs,
            truncated,
            names,
            signature: Signature(Vec::new()),
        };
        b.signature = sender.sign(&b.body_bytes());
        b
    }

    fn body_bytes(&self) -> Vec<u8> {
        let mut w = WireWriter::new();
        w.short_bytes(self.sender.as_bytes());
        w.u64(self.total_logs);
        w.u8(self.truncated as u8);
        w.u16(self.names.len() as u16);
        for n in &self.names {
            w.name(n);
        }
        w.out
    }

    pub fn verify(&self) -> bool {
        self.sender.verify(&self.body_bytes(), &self.signature)
    }
}

/// Tail digests a peer already has for one log pair; zero means nothing.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct KnownTails {
    pub request: Digest,
    pub result: Digest,
}

impl KnownTails {
    pub const NONE: KnownTails = KnownTails {
        request: Digest::ZERO,
        result: Digest::ZERO,
    };
}

/// Answer to a beacon: the names the replier wants to replicate, with
/// what it already has so the sender can push deltas only.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BeaconReply {
    pub sender: PublicKey,
    /// Ask the beacon sender for its complete name list (the beacon was
    /// truncated); answered with an untruncated unicast beacon.
    pub request_full_list: bool,
    pub requests: BTreeMap<Name, KnownTails>,
}

/// Entries for one half of a log pair.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogUpdate {
    pub sender: PublicKey,
    pub name: Name,
    pub role: LogRole,
    pub entries: Vec<LogEntry>,
}

/// Ask a peer for the digest of its result-log tail (cross-node result
/// verification).
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TailQuery {
    pub sender: PublicKey,
    pub name: Name,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TailResponse {
    pub sender: PublicKey,
    pub name: Name,
    /// Zero when the peer does not hold the pair.
    pub result_tail: Digest,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Message {
    Beacon(Beacon),
    BeaconReply(BeaconReply),
    LogUpdate(LogUpdate),
    TailQuery(TailQuery),
    TailResponse(TailResponse),
}

impl Message {
    pub fn sender(&self) -> &PublicKey {
        match self {
            Message::Beacon(m) => &m.sender,
            Message::BeaconReply(m) => &m.sender,
            Message::LogUpdate(m) => &m.sender,
            Message::TailQuery(m) => &m.sender,
            Message::TailResponse(m) => &m.sender,
        }
    }

    pub fn type_label(&self) -> &'static str {
        match self {
            Message::Beacon(_) => "beacon",
            Message::BeaconReply(_) => "beacon-reply",
            Message::LogUpdate(_) => "log-update",
            Message::TailQuery(_) => "tail-query",
            Message::TailResponse(_) => "tail-response",
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut w = WireWriter::new();
        match self {
            Message::Beacon(b) => {
                w.u8(TAG_BEACON);
                w.out.extend_from_slice(&b.body_bytes());
                w.short_bytes(&b.signature.0);
            }
            Message::BeaconReply(r) => {
                w.u8(TAG_BEACON_REPLY);
                w.short_bytes(r.sender.as_bytes());
                w.u8(r.request_full_list as u8);
                w.u16(r.requests.len() as u16);
                for (name, tails) in &r.requests {
                    w.name(name);
                    w.digest(&tails.request);
                    w.digest(&tails.result);
                }
            }
            Message::LogUpdate(u) => {
                w.u8(TAG_LOG_UPDATE);
                w.short_bytes(u.sender.as_bytes());
                w.name(&u.name);
                w.u8(match u.role {
                    LogRole::Request => 0,
                    LogRole::Result => 1,
                });
                w.u32(u.entries.len() as u32);
                for e in &u.entries {
                    let bytes = e.wire_bytes();
                    w.u32(bytes.len() as u32);
                    w.out.extend_from_slice(&bytes);
                }
            }
            Message::TailQuery(q) => {
                w.u8(TAG_TAIL_QUERY);
                w.short_bytes(q.sender.as_bytes());
                w.name(&q.name);
            }
            Message::TailResponse(r) => {
                w.u8(TAG_TAIL_RESPONSE);
                w.short_bytes(r.sender.as_bytes());
                w.name(&r.name);
                w.digest(&r.result_tail);
            }
        }
        w.out
    }

    pub fn decode(bytes: &[u8]) -> Result<Message, WireDecodeError> {
        let mut r = crate::log::WireReader::new(bytes);
        let tag = r.u8()?;
        let msg = match tag {
            TAG_BEACON => {
                let sender = PublicKey::from_bytes(r.short_bytes()?);
                let total_logs = r.u64()?;
                let truncated = r.u8()? != 0;
                let count = r.u16()?;
                let mut names = Vec::with_capacity(count as usize);
                for _ in 0..count {
                    names.push(read_name(&mut r)?);
                }
                let signature = Signature(r.short_bytes()?);
                Message::Beacon(Beacon {
                    sender,
                    total_logs,
                    truncated,
                    names,
                    signature,
                })
            }
            TAG_BEACON_REPLY => {
                let sender = PublicKey::from_bytes(r.short_bytes()?);
                let request_full_list = r.u8()? != 0;
                let count = r.u16()?;
                let mut requests = BTreeMap::new();
                for _ in 0..count {
                    let name = read_name(&mut r)?;
                    let request = r.digest()?;
                    let result = r.digest()?;
                    requests.insert(name, KnownTails { request, result });
                }
                Message::BeaconReply(BeaconReply {
                    sender,
                    request_full_list,
                    requests,
                })
            }
            TAG_LOG_UPDATE => {
                let sender = PublicKey::from_bytes(r.short_bytes()?);
                let name = read_name(&mut r)?;
                let role = match r.u8()? {
                    0 => LogRole::Request,
                    1 => LogRole::Result,
                    t => return Err(WireDecodeError::BadKindTag(t)),
                };
                let count = r.u32()?;
                let mut entries = Vec::with_capacity(count.min(4096) as usize);
                for _ in 0..count {
                    let bytes = r.long_bytes()?;
                    entries.push(LogEntry::from_wire(&bytes)?);
                }
                Message::LogUpdate(LogUpdate {
                    sender,
                    name,
                    role,
                    entries,
                })
            }
            TAG_TAIL_QUERY => {
                let sender = PublicKey::from_bytes(r.short_bytes()?);
                let name = read_name(&mut r)?;
                Message::TailQuery(TailQuery { sender, name })
            }
            TAG_TAIL_RESPONSE => {
                let sender = PublicKey::from_bytes(r.short_bytes()?);
                let name = read_name(&mut r)?;
                let result_tail = r.digest()?;
                Message::TailResponse(TailResponse {
                    sender,
                    name,
                    result_tail,
                })
            }
            t => return Err(WireDecodeError::BadKindTag(t)),
        };
        if !r.at_end() {
            return Err(WireDecodeError::TrailingBytes);
        }
        Ok(msg)
    }
}

fn read_name(r: &mut crate::log::WireReader<'_>) -> Result<Name, WireDecodeError> {
    let bytes = r.short_bytes()?;
    let text = std::str::from_utf8(&bytes).map_err(|_| WireDecodeError::Truncated)?;
    Name::parse(text).map_err(|_| WireDecodeError::Truncated)
}

struct WireWriter {
    out: Vec<u8>,
}

impl WireWriter {
    fn new() -> WireWriter {
        WireWriter { out: Vec::new() }
    }
    fn u8(&mut self, v: u8) {
        self.out.push(v);
    }
    fn u16(&mut self, v: u16) {
        self.out.extend_from_slice(&v.to_be_bytes());
    }
    fn u32(&mut self, v: u32) {
        self.out.extend_from_slice(&v.to_be_bytes());
    }
    fn u64(&mut self, v: u64) {
        self.out.extend_from_slice(&v.to_be_bytes());
    }
    fn short_bytes(&mut self, bytes: &[u8]) {
        self.u16(bytes.len() as u16);
        self.out.extend_from_slice(bytes);
    }
    fn digest(&mut self, d: &Digest) {
        self.out.extend_from_slice(&d.0);
    }
    fn name(&mut self, n: &Name) {
        self.short_bytes(n.text().as_bytes());
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::derive_seed;
    use crate::log::{EntryKind, Log};
    use proptest::prelude::*;

    fn key(i: u64) -> KeyPair {
        KeyPair::mock_from_seed(&derive_seed(i, "msg-test"))
    }

    fn name(t: &str) -> Name {
        Name::parse(t).unwrap()
    }

    #[test]
    fn beacon_signature_covers_body() {
        let k = key(1);
        let mut b = Beacon::build(&k, 2, false, vec![name("/a"), name("/b")]);
        assert!(b.verify());
        b.total_logs = 3;
        assert!(!b.verify());
    }

    #[test]
    fn decode_rejects_unknown_tag() {
        assert!(matches!(
            Message::decode(&[99]),
            Err(WireDecodeError::BadKindTag(99))
        ));
        assert!(matches!(
            Message::decode(&[]),
            Err(WireDecodeError::Truncated)
        ));
    }

    fn sample_messages() -> Vec<Message> {
        let k = key(1);
        let mut log = Log::create(name("/s/req"), LogRole::Request, &k, b"x".to_vec(), 0);
        log.append(EntryKind::Request, b"y".to_vec(), &k, 1).unwrap();
        vec![
            Message::Beacon(Beacon::build(&k, 12, true, vec![name("/a"), name("/b/c")])),
            Message::BeaconReply(BeaconReply {
                sender: k.public().clone(),
                request_full_list: true,
                requests: BTreeMap::from([
                    (name("/a"), KnownTails::NONE),
                    (
                        name("/b/c"),
                        KnownTails {
                            request: log.tail_digest(),
                            result: Digest::ZERO,
                        },
                    ),
                ]),
            }),
            Message::LogUpdate(LogUpdate {
                sender: k.public().clone(),
                name: name("/s"),
                role: LogRole::Request,
                entries: log.entries().to_vec(),
            }),
            Message::TailQuery(TailQuery {
                sender: k.public().clone(),
                name: name("/s"),
            }),
            Message::TailResponse(TailResponse {
                sender: k.public().clone(),
                name: name("/s"),
                result_tail: log.tail_digest(),
            }),
        ]
    }

    #[test]
    fn all_message_types_roundtrip() {
        for msg in sample_messages() {
            let bytes = msg.encode();
            let back = Message::decode(&bytes).unwrap();
            assert_eq!(back, msg);
        }
    }

    proptest! {
        #[test]
        fn beacon_roundtrip(
            total in 0u64..100,
            truncated in any::<bool>(),
            names in proptest::collection::vec("[a-z]{1,6}", 0..8),
        ) {
            let k = key(7);
            let names: Vec<Name> = names
                .iter()
                .map(|c| Name::new([c.clone()]).unwrap())
                .collect();
            let msg = Message::Beacon(Beacon::build(&k, total, truncated, names));
            prop_assert_eq!(Message::decode(&msg.encode()).unwrap(), msg);
        }
    }
}
