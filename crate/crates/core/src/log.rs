//! Signed, back-pointer-chained append-only logs.
//!
//! Every entry is signed by its author and carries the digest of its
//! predecessor, so replicas can verify that nobody rewrote history.
//! Concurrent appends on different replicas are merged into a canonical
//! order (timestamp, then author key, then author sequence); entries
//! whose back-pointer no longer matches their new predecessor must be
//! re-signed by their own producer (`rechain`) before the chain verifies
//! again.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{self, Read, Write};

use thiserror::Error;

use crate::crypto::{Digest, KeyPair, PublicKey, Signature};
use crate::naming::Name;

/// Entry payload categories. Only `Data` may appear in a result log; the
/// request log holds everything else alongside input data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum EntryKind {
    Request,
    Data,
    TakeOverNote,
    KeepAliveBeacon,
}

impl EntryKind {
    pub fn tag(self) -> u8 {
        match self {
            EntryKind::Request => 0,
            EntryKind::Data => 1,
            EntryKind::TakeOverNote => 2,
            EntryKind::KeepAliveBeacon => 3,
        }
    }

    pub fn from_tag(tag: u8) -> Option<EntryKind> {
        Some(match tag {
            0 => EntryKind::Request,
            1 => EntryKind::Data,
            2 => EntryKind::TakeOverNote,
            3 => EntryKind::KeepAliveBeacon,
            _ => return None,
        })
    }

    pub fn label(self) -> &'static str {
        match self {
            EntryKind::Request => "request",
            EntryKind::Data => "data",
            EntryKind::TakeOverNote => "takeover",
            EntryKind::KeepAliveBeacon => "keepalive",
        }
    }
}

/// Whether a log is the request or the result half of a pair.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum LogRole {
    Request,
    Result,
}

impl LogRole {
    pub fn anchor_kind(self) -> EntryKind {
        match self {
            LogRole::Request => EntryKind::Request,
            LogRole::Result => EntryKind::Data,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            LogRole::Request => "request",
            LogRole::Result => "result",
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum LogError {
    #[error("{kind:?} entries are not allowed in a {role:?} log")]
    KindNotAllowed { kind: EntryKind, role: LogRole },
    #[error("timestamp {timestamp} is older than the tail timestamp {tail}")]
    StaleTimestamp { timestamp: u64, tail: u64 },
    #[error("remote anchor does not match the local anchor")]
    AnchorMismatch,
}

/// Why a remote entry was dropped during a merge.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RejectReason {
    BadSignature,
    KindNotAllowed,
}

/// One signed log entry. The signature covers every other field, the
/// back-pointer included, so reordering forces the producer to re-sign.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogEntry {
    author: PublicKey,
    author_seq: u64,
    timestamp: u64,
    kind: EntryKind,
    payload: Vec<u8>,
    back_pointer: Digest,
    signature: Signature,
}

impl LogEntry {
    pub fn sign(
        author: &KeyPair,
        author_seq: u64,
        timestamp: u64,
        kind: EntryKind,
        payload: Vec<u8>,
        back_pointer: Digest,
    ) -> LogEntry {
        let mut entry = LogEntry {
            author: author.public().clone(),
            author_seq,
            timestamp,
            kind,
            payload,
            back_pointer,
            signature: Signature(Vec::new()),
        };
        entry.signature = author.sign(&entry.signing_bytes());
        entry
    }

    pub fn author(&self) -> &PublicKey {
        &self.author
    }
    pub fn author_seq(&self) -> u64 {
        self.author_seq
    }
    pub fn timestamp(&self) -> u64 {
        self.timestamp
    }
    pub fn kind(&self) -> EntryKind {
        self.kind
    }
    pub fn payload(&self) -> &[u8] {
        &self.payload
    }
    pub fn back_pointer(&self) -> Digest {
        self.back_pointer
    }
    pub fn signature(&self) -> &Signature {
        &self.signature
    }

    /// Dedup identity: an author never reuses a sequence number within a
    /// log, so (author, seq) names one logical entry across re-chaining.
    pub fn identity(&self) -> (PublicKey, u64) {
        (self.author.clone(), self.author_seq)
    }

    /// Canonical merge order: timestamp, then author key bytes, then the
    /// author's own sequence number.
    pub fn sort_key(&self) -> (u64, PublicKey, u64) {
        (self.timestamp, self.author.clone(), self.author_seq)
    }

    /// Canonical serialization of all signed fields, fixed order,
    /// fixed-width big-endian integers.
    pub fn signing_bytes(&self) -> Vec<u8> {
        let mut out = Vec::with_capacity(64 + self.payload.len());
        let key = self.author.as_bytes();
        out.extend_from_slice(&(key.len() as u16).to_be_bytes());
        out.extend_from_slice(key);
        out.extend_from_slice(&self.author_seq.to_be_bytes());
        out.extend_from_slice(&self.timestamp.to_be_bytes());
        out.push(self.kind.tag());
        out.extend_from_slice(&(self.payload.len() as u32).to_be_bytes());
        out.extend_from_slice(&self.payload);
        out.extend_from_slice(&self.back_pointer.0);
        out
    }

    /// Full wire form: the signed fields followed by the signature.
    pub fn wire_bytes(&self) -> Vec<u8> {
        let mut out = self.signing_bytes();
        out.extend_from_slice(&(self.signature.0.len() as u16).to_be_bytes());
        out.extend_from_slice(&self.signature.0);
        out
    }

    pub fn from_wire(bytes: &[u8]) -> Result<LogEntry, WireDecodeError> {
        let mut r = WireReader::new(bytes);
        let entry = r.entry()?;
        if !r.at_end() {
            return Err(WireDecodeError::TrailingBytes);
        }
        Ok(entry)
    }

    /// Digest over the full wire form, signature included: re-signing an
    /// entry changes its digest and therefore its successors' pointers.
    pub fn digest(&self) -> Digest {
        Digest::compute(&self.wire_bytes())
    }

    pub fn verify_signature(&self) -> bool {
        self.author.verify(&self.signing_bytes(), &self.signature)
    }

    fn resign_with_back_pointer(&self, author: &KeyPair, back_pointer: Digest) -> LogEntry {
        LogEntry::sign(
            author,
            self.author_seq,
            self.timestamp,
            self.kind,
            self.payload.clone(),
            back_pointer,
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Validity {
    Valid,
    ProvisionallyValid,
    Invalid,
}

/// Outcome of a chain verification pass.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ValidityReport {
    pub signatures_ok: bool,
    /// Indices whose back-pointer does not match the digest of their
    /// predecessor (the anchor's expected predecessor digest is zero).
    pub chain_breaks: Vec<usize>,
    pub verdict: Validity,
}

impl ValidityReport {
    fn new(signatures_ok: bool, chain_breaks: Vec<usize>) -> ValidityReport {
        let verdict = if !signatures_ok {
            Validity::Invalid
        } else if chain_breaks.is_empty() {
            Validity::Valid
        } else {
            Validity::ProvisionallyValid
        };
        ValidityReport {
            signatures_ok,
            chain_breaks,
            verdict,
        }
    }
}

/// Result of merging remote entries into a local log.
#[derive(Debug)]
pub struct MergeOutcome {
    pub log: Log,
    /// Indices (into the merged log) whose back-pointer no longer matches
    /// their predecessor and await re-signing by their producer.
    pub rechain_needed: BTreeSet<usize>,
    /// Remote entries that were incorporated (new identities or variants
    /// replacing a stale local copy); these are the delta to re-broadcast.
    pub accepted: Vec<LogEntry>,
    pub rejected: Vec<(LogEntry, RejectReason)>,
}

/// Result of a producer re-chaining pass.
#[derive(Debug)]
pub struct RechainOutcome {
    pub log: Log,
    /// The entries that were re-signed, for pushing to subscribers.
    pub changed: Vec<LogEntry>,
}

/// An append-only log: the anchor entry plus everything appended or
/// merged since, in canonical order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Log {
    name: Name,
    role: LogRole,
    entries: Vec<LogEntry>,
}

impl Log {
    /// Create a log containing exactly the anchor entry, authored by the
    /// swarm initiator. The anchor's back-pointer is the zero digest and
    /// its kind is fixed by the log role.
    pub fn create(
        name: Name,
        role: LogRole,
        initiator: &KeyPair,
        anchor_payload: Vec<u8>,
        timestamp: u64,
    ) -> Log {
        let anchor = LogEntry::sign(
            initiator,
            1,
            timestamp,
            role.anchor_kind(),
            anchor_payload,
            Digest::ZERO,
        );
        Log {
            name,
            role,
            entries: vec![anchor],
        }
    }

    /// Rebuild a log from already-signed entries (merge results, network
    /// updates, dump files). No validation happens here; run
    /// `verify_chain` for that.
    pub fn from_entries(name: Name, role: LogRole, entries: Vec<LogEntry>) -> Log {
        Log {
            name,
            role,
            entries,
        }
    }

    pub fn name(&self) -> &Name {
        &self.name
    }
    pub fn role(&self) -> LogRole {
        self.role
    }
    pub fn entries(&self) -> &[LogEntry] {
        &self.entries
    }
    pub fn len(&self) -> usize {
        self.entries.len()
    }
    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
    pub fn anchor(&self) -> &LogEntry {
        &self.entries[0]
    }
    pub fn tail(&self) -> &LogEntry {
        self.entries.last().expect("a log always has its anchor")
    }

    pub fn tail_digest(&self) -> Digest {
        self.tail().digest()
    }

    /// Append a new entry signed by `author`. The timestamp must not
    /// precede the current tail's, and result logs accept only `Data`.
    pub fn append(
        &mut self,
        kind: EntryKind,
        payload: Vec<u8>,
        author: &KeyPair,
        timestamp: u64,
    ) -> Result<&LogEntry, LogError> {
        if self.role == LogRole::Result && kind != EntryKind::Data {
            return Err(LogError::KindNotAllowed {
                kind,
                role: self.role,
            });
        }
        let tail_ts = self.tail().timestamp;
        if timestamp < tail_ts {
            return Err(LogError::StaleTimestamp {
                timestamp,
                tail: tail_ts,
            });
        }
        let author_seq = self.next_seq(author.public());
        let back_pointer = self.tail_digest();
        let entry = LogEntry::sign(author, author_seq, timestamp, kind, payload, back_pointer);
        self.entries.push(entry);
        Ok(self.tail())
    }

    /// 1 + the author's highest sequence number in this log.
    pub fn next_seq(&self, author: &PublicKey) -> u64 {
        self.entries
            .iter()
            .filter(|e| &e.author == author)
            .map(|e| e.author_seq)
            .max()
            .unwrap_or(0)
            + 1
    }

    /// Verify every signature and every back-pointer. Pure; the verdict
    /// is `ProvisionallyValid` when signatures hold but some entries
    /// still need re-chaining after a merge.
    pub fn verify_chain(&self) -> ValidityReport {
        let mut signatures_ok = true;
        let mut chain_breaks = Vec::new();
        let mut prev_digest = Digest::ZERO;
        for (i, entry) in self.entries.iter().enumerate() {
            if !entry.verify_signature() {
                signatures_ok = false;
            }
            if entry.back_pointer != prev_digest {
                chain_breaks.push(i);
            }
            prev_digest = entry.digest();
        }
        ValidityReport::new(signatures_ok, chain_breaks)
    }

    /// Merge remote entries into this log: deduplicated union by
    /// (author, seq), sorted canonically, anchor pinned first. Remote
    /// entries with bad signatures (or kinds the log role forbids) are
    /// rejected individually; a conflicting anchor rejects the merge.
    ///
    /// Where the same identity exists in several byte-forms (an original
    /// and a re-chained replacement), the variant whose back-pointer
    /// matches its canonical predecessor wins, falling back to the
    /// smallest digest so replicas make identical choices.
    pub fn merge(&self, remote: &[LogEntry]) -> Result<MergeOutcome, LogError> {
        let anchor_id = self.anchor().identity();
        let anchor_digest = self.anchor().digest();

        let mut rejected = Vec::new();
        let mut variants: BTreeMap<(PublicKey, u64), Vec<LogEntry>> = BTreeMap::new();
        for e in &self.entries {
            variants.entry(e.identity()).or_default().push(e.clone());
        }
        let mut remote_ok = Vec::new();
        for e in remote {
            if e.back_pointer.is_zero() && e.digest() != anchor_digest {
                return Err(LogError::AnchorMismatch);
            }
            if !e.verify_signature() {
                rejected.push((e.clone(), RejectReason::BadSignature));
                continue;
            }
            if self.role == LogRole::Result && e.kind != EntryKind::Data {
                rejected.push((e.clone(), RejectReason::KindNotAllowed));
                continue;
            }
            variants.entry(e.identity()).or_default().push(e.clone());
            remote_ok.push(e.clone());
        }

        // Sort identities by a representative chosen deterministically
        // from each variant set; honest variants only ever differ in
        // back-pointer and signature, so the sort key is stable.
        let mut order: Vec<(PublicKey, u64)> = variants.keys().cloned().collect();
        let rep = |id: &(PublicKey, u64), variants: &BTreeMap<_, Vec<LogEntry>>| -> (u64, Digest) {
            variants[id]
                .iter()
                .map(|e| (e.timestamp, e.digest()))
                .min()
                .expect("identity has at least one variant")
        };
        order.sort_by_key(|id| {
            let (ts, digest) = rep(id, &variants);
            (ts, id.0.clone(), id.1, digest)
        });
        order.retain(|id| *id != anchor_id);
        order.insert(0, anchor_id);

        let mut merged: Vec<LogEntry> = Vec::with_capacity(order.len());
        let mut rechain_needed = BTreeSet::new();
        let mut prev_digest = Digest::ZERO;
        for (i, id) in order.iter().enumerate() {
            let vs = &variants[id];
            let chosen = vs
                .iter()
                .filter(|v| v.back_pointer == prev_digest)
                .min_by_key(|v| v.digest())
                .or_else(|| vs.iter().min_by_key(|v| v.digest()))
                .expect("identity has at least one variant")
                .clone();
            if chosen.back_pointer != prev_digest {
                rechain_needed.insert(i);
            }
            prev_digest = chosen.digest();
            merged.push(chosen);
        }

        let accepted = remote_ok
            .into_iter()
            .filter(|e| {
                let in_merged = merged.iter().any(|m| m == e);
                let was_local = self.entries.iter().any(|l| l == e);
                in_merged && !was_local
            })
            .collect();

        Ok(MergeOutcome {
            log: Log {
                name: self.name.clone(),
                role: self.role,
                entries: merged,
            },
            rechain_needed,
            accepted,
            rejected,
        })
    }

    /// Re-sign this author's entries whose back-pointer no longer matches
    /// their predecessor; everybody else's entries stay untouched. Only
    /// the back-pointer and signature change.
    pub fn rechain(&self, author: &KeyPair) -> RechainOutcome {
        let own = author.public();
        let mut entries = Vec::with_capacity(self.entries.len());
        let mut changed = Vec::new();
        let mut prev_digest = Digest::ZERO;
        for entry in &self.entries {
            let entry = if entry.back_pointer != prev_digest && &entry.author == own {
                let fixed = entry.resign_with_back_pointer(author, prev_digest);
                changed.push(fixed.clone());
                fixed
            } else {
                entry.clone()
            };
            prev_digest = entry.digest();
            entries.push(entry);
        }
        RechainOutcome {
            log: Log {
                name: self.name.clone(),
                role: self.role,
                entries,
            },
            changed,
        }
    }

    /// Entries strictly after the one whose digest equals
    /// `known_tail_digest`; the whole log when the digest is unknown
    /// (which also covers the zero digest — "I have nothing").
    pub fn entries_after(&self, known_tail_digest: Digest) -> Vec<LogEntry> {
        for (i, entry) in self.entries.iter().enumerate() {
            if entry.digest() == known_tail_digest {
                return self.entries[i + 1..].to_vec();
            }
        }
        self.entries.clone()
    }

    /// Dump format: name length (u16 BE) + canonical name text, then each
    /// entry as length (u32 BE) + wire bytes, in log order.
    pub fn write_dump<W: Write>(&self, w: &mut W) -> io::Result<()> {
        let name = self.name.text();
        w.write_all(&(name.len() as u16).to_be_bytes())?;
        w.write_all(name.as_bytes())?;
        for e in &self.entries {
            let bytes = e.wire_bytes();
            w.write_all(&(bytes.len() as u32).to_be_bytes())?;
            w.write_all(&bytes)?;
        }
        Ok(())
    }

    /// Read a dump produced by `write_dump`. The role is inferred from
    /// the anchor kind (a `Data` anchor means a result log).
    pub fn read_dump<R: Read>(r: &mut R) -> Result<Log, DumpError> {
        let mut buf = Vec::new();
        r.read_to_end(&mut buf).map_err(DumpError::Io)?;
        let mut reader = WireReader::new(&buf);
        let name_bytes = reader.short_bytes()?;
        let name_text =
            std::str::from_utf8(&name_bytes).map_err(|_| DumpError::MalformedName)?;
        let name = Name::parse(name_text).map_err(|_| DumpError::MalformedName)?;
        let mut entries = Vec::new();
        while !reader.at_end() {
            let bytes = reader.long_bytes()?;
            entries.push(LogEntry::from_wire(&bytes)?);
        }
        if entries.is_empty() {
            return Err(DumpError::EmptyLog);
        }
        let role = if entries[0].kind == EntryKind::Data {
            LogRole::Result
        } else {
            LogRole::Request
        };
        Ok(Log::from_entries(name, role, entries))
    }
}

#[derive(Debug, Error)]
pub enum DumpError {
    #[error("i/o error: {0}")]
    Io(io::Error),
    #[error("malformed log name")]
    MalformedName,
    #[error("dump contains no entries")]
    EmptyLog,
    #[error(transparent)]
    Entry(#[from] WireDecodeError),
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum WireDecodeError {
    #[error("truncated input")]
    Truncated,
    #[error("unknown entry kind tag {0}")]
    BadKindTag(u8),
    #[error("unexpected trailing bytes")]
    TrailingBytes,
}

/// Cursor over canonical wire bytes; shared by entry decoding and the
/// message codec.
pub(crate) struct WireReader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> WireReader<'a> {
    pub fn new(bytes: &'a [u8]) -> WireReader<'a> {
        WireReader { bytes, pos: 0 }
    }

    pub fn at_end(&self) -> bool {
        self.pos >= self.bytes.len()
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], WireDecodeError> {
        if self.pos + n > self.bytes.len() {
            return Err(WireDecodeError::Truncated);
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8, WireDecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16, WireDecodeError> {
        Ok(u16::from_be_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32, WireDecodeError> {
        Ok(u32::from_be_bytes(self.take(4)?.try_into().unwrap()))
    }

    pub fn u64(&mut self) -> Result<u64, WireDecodeError> {
        Ok(u64::from_be_bytes(self.take(8)?.try_into().unwrap()))
    }

    /// u16-length-prefixed bytes (keys, signatures, names).
    pub fn short_bytes(&mut self) -> Result<Vec<u8>, WireDecodeError> {
        let len = self.u16()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    /// u32-length-prefixed bytes (payloads, nested records).
    pub fn long_bytes(&mut self) -> Result<Vec<u8>, WireDecodeError> {
        let len = self.u32()? as usize;
        Ok(self.take(len)?.to_vec())
    }

    pub fn digest(&mut self) -> Result<Digest, WireDecodeError> {
        Ok(Digest(self.take(32)?.try_into().unwrap()))
    }

    pub fn entry(&mut self) -> Result<LogEntry, WireDecodeError> {
        let author = PublicKey::from_bytes(self.short_bytes()?);
        let author_seq = self.u64()?;
        let timestamp = self.u64()?;
        let tag = self.u8()?;
        let kind = EntryKind::from_tag(tag).ok_or(WireDecodeError::BadKindTag(tag))?;
        let payload = self.long_bytes()?;
        let back_pointer = self.digest()?;
        let signature = Signature(self.short_bytes()?);
        Ok(LogEntry {
            author,
            author_seq,
            timestamp,
            kind,
            payload,
            back_pointer,
            signature,
        })
    }
}

/// Encode a (key text, value bytes) pair: key length (u32 BE) + key +
/// value. Data entries store (name or expression text, object bytes)
/// this way; economy-mode requests store (expression text, price u64 BE).
pub fn encode_keyed(key: &str, value: &[u8]) -> Vec<u8> {
    let mut out = Vec::with_capacity(4 + key.len() + value.len());
    out.extend_from_slice(&(key.len() as u32).to_be_bytes());
    out.extend_from_slice(key.as_bytes());
    out.extend_from_slice(value);
    out
}

/// Decode a pair produced by `encode_keyed`. Returns `None` for payloads
/// that are not keyed (e.g. a result-log anchor's empty payload).
pub fn decode_keyed(payload: &[u8]) -> Option<(&str, &[u8])> {
    if payload.len() < 4 {
        return None;
    }
    let len = u32::from_be_bytes(payload[..4].try_into().unwrap()) as usize;
    if payload.len() < 4 + len {
        return None;
    }
    let key = std::str::from_utf8(&payload[4..4 + len]).ok()?;
    Some((key, &payload[4 + len..]))
}
