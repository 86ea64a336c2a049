//! Per-node store of log pairs, with TTL-based result caching.
//!
//! Each swarm the node participates in is one pair: a request log and a
//! result log under a shared hierarchical name. Once every request has a
//! result the pair is complete and its request log can be purged; the
//! result log stays cached under a TTL that is reset and doubled every
//! time another node replicates it, so popular results live longer.

use std::collections::BTreeMap;
use std::collections::BTreeSet;

use thiserror::Error;

use crate::log::{decode_keyed, EntryKind, Log};
use crate::naming::Name;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum StoreError {
    #[error("a pair named {0} already exists")]
    DuplicateName(Name),
    #[error("no pair named {0}")]
    NotFound(Name),
    #[error("pair {0} still has unresolved requests")]
    NotCompleted(Name),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PairStatus {
    /// Tasks still open; exempt from TTL purging.
    Active,
    /// Every request has at least one result.
    Completed,
    /// Request log purged; only the cached result log remains.
    CachedOnly,
}

/// TTL parameters, simulated milliseconds.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TtlConfig {
    pub initial: u64,
    pub max: u64,
}

impl Default for TtlConfig {
    fn default() -> TtlConfig {
        TtlConfig {
            initial: 60_000,
            max: 3_600_000,
        }
    }
}

/// A request/result log pair plus its cache state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct LogPair {
    name: Name,
    request_log: Option<Log>,
    result_log: Log,
    ttl_current: u64,
    ttl_expiry: u64,
    status: PairStatus,
}

impl LogPair {
    pub fn new(name: Name, request_log: Log, result_log: Log, now: u64, ttl: u64) -> LogPair {
        let mut pair = LogPair {
            name,
            request_log: Some(request_log),
            result_log,
            ttl_current: ttl,
            ttl_expiry: now + ttl,
            status: PairStatus::Active,
        };
        pair.recompute_status();
        pair
    }

    /// A pair replicated from another swarm's cached result log; there
    /// never was a request log on this node.
    pub fn cached(name: Name, result_log: Log, now: u64, ttl: u64) -> LogPair {
        LogPair {
            name,
            request_log: None,
            result_log,
            ttl_current: ttl,
            ttl_expiry: now + ttl,
            status: PairStatus::CachedOnly,
        }
    }

    pub fn name(&self) -> &Name {
        &self.name
    }
    pub fn request_log(&self) -> Option<&Log> {
        self.request_log.as_ref()
    }
    pub fn request_log_mut(&mut self) -> Option<&mut Log> {
        self.request_log.as_mut()
    }
    pub fn result_log(&self) -> &Log {
        &self.result_log
    }
    pub fn result_log_mut(&mut self) -> &mut Log {
        &mut self.result_log
    }
    pub fn status(&self) -> PairStatus {
        self.status
    }
    pub fn ttl_current(&self) -> u64 {
        self.ttl_current
    }
    pub fn ttl_expiry(&self) -> u64 {
        self.ttl_expiry
    }

    pub fn set_request_log(&mut self, log: Log) {
        self.request_log = Some(log);
        self.recompute_status();
    }

    pub fn set_result_log(&mut self, log: Log) {
        self.result_log = log;
        self.recompute_status();
    }

    /// Texts of every request entry (the task universe of this pair).
    pub fn request_texts(&self) -> BTreeSet<String> {
        let mut texts = BTreeSet::new();
        if let Some(req) = &self.request_log {
            for e in req.entries() {
                if e.kind() == EntryKind::Request {
                    if let Some((text, _)) = decode_keyed(e.payload()) {
                        texts.insert(text.to_string());
                    }
                }
            }
        }
        texts
    }

    /// Texts for which the result log holds at least one data object.
    pub fn result_texts(&self) -> BTreeSet<String> {
        self.result_log
            .entries()
            .iter()
            .filter(|e| e.kind() == EntryKind::Data)
            .filter_map(|e| decode_keyed(e.payload()))
            .map(|(text, _)| text.to_string())
            .collect()
    }

    /// A pair is complete when every request text has a matching result.
    /// Call after any log change; `CachedOnly` is terminal.
    pub fn recompute_status(&mut self) {
        if self.request_log.is_none() {
            self.status = PairStatus::CachedOnly;
            return;
        }
        let requests = self.request_texts();
        let results = self.result_texts();
        self.status = if !requests.is_empty() && requests.is_subset(&results) {
            PairStatus::Completed
        } else {
            PairStatus::Active
        };
    }
}

/// Name-keyed map of log pairs; the node's view of every swarm it is in.
#[derive(Debug, Default)]
pub struct LogStore {
    pairs: BTreeMap<Name, LogPair>,
    ttl: TtlConfig,
}

/// `list_names` output: the first `max_n` names plus whether more exist.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct NameListing {
    pub names: Vec<Name>,
    pub truncated: bool,
    pub total: usize,
}

impl LogStore {
    pub fn new(ttl: TtlConfig) -> LogStore {
        LogStore {
            pairs: BTreeMap::new(),
            ttl,
        }
    }

    pub fn ttl_config(&self) -> TtlConfig {
        self.ttl
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    pub fn insert_pair(&mut self, pair: LogPair) -> Result<(), StoreError> {
        if self.pairs.contains_key(&pair.name) {
            return Err(StoreError::DuplicateName(pair.name.clone()));
        }
        self.pairs.insert(pair.name.clone(), pair);
        Ok(())
    }

    pub fn get_pair(&self, name: &Name) -> Result<&LogPair, StoreError> {
        self.pairs
            .get(name)
            .ok_or_else(|| StoreError::NotFound(name.clone()))
    }

    pub fn get_pair_mut(&mut self, name: &Name) -> Result<&mut LogPair, StoreError> {
        self.pairs
            .get_mut(name)
            .ok_or_else(|| StoreError::NotFound(name.clone()))
    }

    pub fn contains(&self, name: &Name) -> bool {
        self.pairs.contains_key(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&Name, &LogPair)> {
        self.pairs.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &Name> {
        self.pairs.keys()
    }

    /// The first `max_n` names in canonical order, for beacon frames.
    pub fn list_names(&self, max_n: usize) -> NameListing {
        let total = self.pairs.len();
        let names: Vec<Name> = self.pairs.keys().take(max_n).cloned().collect();
        NameListing {
            truncated: total > names.len(),
            names,
            total,
        }
    }

    /// Another node replicated this pair: reset the expiry and double the
    /// TTL, up to the configured maximum.
    pub fn mark_replicated(&mut self, name: &Name, now: u64) -> Result<(), StoreError> {
        let max = self.ttl.max;
        let pair = self.get_pair_mut(name)?;
        pair.ttl_current = (pair.ttl_current * 2).min(max);
        pair.ttl_expiry = now + pair.ttl_current;
        Ok(())
    }

    /// Drop pairs whose TTL ran out. Pairs with open tasks are never
    /// purged; the TTL only governs finished results.
    pub fn purge_expired(&mut self, now: u64) -> Vec<Name> {
        let doomed: Vec<Name> = self
            .pairs
            .iter()
            .filter(|(_, p)| {
                p.ttl_expiry < now
                    && matches!(p.status, PairStatus::Completed | PairStatus::CachedOnly)
            })
            .map(|(n, _)| n.clone())
            .collect();
        for name in &doomed {
            self.pairs.remove(name);
        }
        doomed
    }

    /// Drop the request log of a completed pair, keeping the result log
    /// cached. The pair keeps being advertised for result sharing.
    pub fn purge_request_log(&mut self, name: &Name) -> Result<(), StoreError> {
        let pair = self.get_pair_mut(name)?;
        if pair.status != PairStatus::Completed {
            return Err(StoreError::NotCompleted(name.clone()));
        }
        pair.request_log = None;
        pair.status = PairStatus::CachedOnly;
        Ok(())
    }

    /// Remove a pair outright (price-based cache pruning).
    pub fn remove_pair(&mut self, name: &Name) -> Option<LogPair> {
        self.pairs.remove(name)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{derive_seed, KeyPair};
    use crate::log::{encode_keyed, LogRole};

    fn key() -> KeyPair {
        KeyPair::mock_from_seed(&derive_seed(1, "store-test"))
    }

    fn name(t: &str) -> Name {
        Name::parse(t).unwrap()
    }

    fn pair(n: &str, now: u64, ttl: u64) -> LogPair {
        let k = key();
        let nm = name(n);
        let req = Log::create(
            nm.child("req").unwrap(),
            LogRole::Request,
            &k,
            encode_keyed("/data/x", &[]),
            now,
        );
        let res = Log::create(nm.child("res").unwrap(), LogRole::Result, &k, Vec::new(), now);
        LogPair::new(nm, req, res, now, ttl)
    }

    fn store() -> LogStore {
        LogStore::new(TtlConfig::default())
    }

    #[test]
    fn insert_then_get() {
        let mut s = store();
        s.insert_pair(pair("/a", 0, 60_000)).unwrap();
        assert_eq!(s.get_pair(&name("/a")).unwrap().name(), &name("/a"));
        assert_eq!(
            s.insert_pair(pair("/a", 0, 60_000)),
            Err(StoreError::DuplicateName(name("/a")))
        );
    }

    #[test]
    fn get_missing_is_not_found() {
        let s = store();
        assert_eq!(
            s.get_pair(&name("/a")).unwrap_err(),
            StoreError::NotFound(name("/a"))
        );
    }

    #[test]
    fn exact_keys_no_prefix_aliasing() {
        let mut s = store();
        s.insert_pair(pair("/a", 0, 60_000)).unwrap();
        s.insert_pair(pair("/a/b", 0, 60_000)).unwrap();
        assert_eq!(s.len(), 2);
        assert!(s.get_pair(&name("/a")).is_ok());
        assert!(s.get_pair(&name("/a/b")).is_ok());
    }

    #[test]
    fn list_names_truncation() {
        let mut s = store();
        for i in 0..3 {
            s.insert_pair(pair(&format!("/s/{i}"), 0, 60_000)).unwrap();
        }
        let l = s.list_names(8);
        assert_eq!((l.names.len(), l.truncated, l.total), (3, false, 3));

        for i in 3..10 {
            s.insert_pair(pair(&format!("/s/{i}"), 0, 60_000)).unwrap();
        }
        let l = s.list_names(8);
        assert_eq!((l.names.len(), l.truncated, l.total), (8, true, 10));

        let empty = store().list_names(8);
        assert_eq!((empty.names.len(), empty.truncated, empty.total), (0, false, 0));
    }

    #[test]
    fn mark_replicated_doubles_and_resets() {
        let mut s = store();
        s.insert_pair(pair("/a", 0, 60_000)).unwrap();
        s.mark_replicated(&name("/a"), 100_000).unwrap();
        let p = s.get_pair(&name("/a")).unwrap();
        assert_eq!(p.ttl_current(), 120_000);
        assert_eq!(p.ttl_expiry(), 220_000);

        // Back-to-back replications quadruple the TTL.
        s.mark_replicated(&name("/a"), 100_000).unwrap();
        assert_eq!(s.get_pair(&name("/a")).unwrap().ttl_current(), 240_000);
    }

    #[test]
    fn mark_replicated_caps_at_max() {
        let mut s = LogStore::new(TtlConfig {
            initial: 60_000,
            max: 3_600_000,
        });
        s.insert_pair(pair("/a", 0, 3_600_000)).unwrap();
        s.mark_replicated(&name("/a"), 50).unwrap();
        let p = s.get_pair(&name("/a")).unwrap();
        assert_eq!(p.ttl_current(), 3_600_000);
        assert_eq!(p.ttl_expiry(), 3_600_050);
    }

    #[test]
    fn ttl_doubling_sequence() {
        let cfg = TtlConfig::default();
        let mut s = LogStore::new(cfg);
        s.insert_pair(pair("/a", 0, cfg.initial)).unwrap();
        for k in 1..=8u32 {
            s.mark_replicated(&name("/a"), 0).unwrap();
            let expect = (cfg.initial * 2u64.pow(k)).min(cfg.max);
            assert_eq!(s.get_pair(&name("/a")).unwrap().ttl_current(), expect);
        }
    }

    fn completed_pair(n: &str, now: u64, ttl: u64) -> LogPair {
        let mut p = pair(n, now, ttl);
        let k = key();
        p.result_log_mut()
            .append(
                EntryKind::Data,
                encode_keyed("/data/x", b"value"),
                &k,
                now + 1,
            )
            .unwrap();
        p.recompute_status();
        assert_eq!(p.status(), PairStatus::Completed);
        p
    }

    #[test]
    fn purge_expired_spares_active_pairs() {
        let mut s = store();
        s.insert_pair(pair("/active", 0, 10)).unwrap();
        s.insert_pair(completed_pair("/done", 0, 10)).unwrap();
        assert!(s.purge_expired(5).is_empty());
        let purged = s.purge_expired(100);
        assert_eq!(purged, vec![name("/done")]);
        assert!(s.contains(&name("/active")));
        assert_eq!(s.len(), 1);
    }

    #[test]
    fn purge_request_log_flow() {
        let mut s = store();
        s.insert_pair(completed_pair("/done", 0, 60_000)).unwrap();
        s.insert_pair(pair("/open", 0, 60_000)).unwrap();

        assert_eq!(
            s.purge_request_log(&name("/open")),
            Err(StoreError::NotCompleted(name("/open")))
        );

        s.purge_request_log(&name("/done")).unwrap();
        let p = s.get_pair(&name("/done")).unwrap();
        assert_eq!(p.status(), PairStatus::CachedOnly);
        assert!(p.request_log().is_none());
        assert_eq!(p.result_log().len(), 2);

        // Still advertised after the purge.
        assert!(s.list_names(8).names.contains(&name("/done")));
    }

    #[test]
    fn store_size_tracks_inserts_minus_purges() {
        let mut s = store();
        s.insert_pair(completed_pair("/a", 0, 10)).unwrap();
        s.insert_pair(completed_pair("/b", 0, 10)).unwrap();
        s.insert_pair(pair("/c", 0, 10)).unwrap();
        assert_eq!(s.len(), 3);
        let purged = s.purge_expired(1_000);
        assert_eq!(s.len(), 3 - purged.len());
        s.remove_pair(&name("/c"));
        assert_eq!(s.len(), 0);
    }
}
