//! The per-node protocol state machine.
//!
//! A node periodically beacons the names it stores, replies to beacons by
//! requesting logs it wants, serves deltas to subscribers, picks open
//! tasks at random (writing a take-over note first), proves liveness with
//! keep-alive entries, and takes over for workers whose keep-alives went
//! silent — after a random delay, so the whole swarm does not pile onto
//! the same task.
//!
//! Handlers are synchronous and return an [`Output`]: messages to send
//! plus domain events for the driving harness. All randomness comes from
//! the node's own seeded generator, so runs replay exactly.

use std::collections::{BTreeMap, BTreeSet};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::crypto::{derive_seed, Digest, KeyPair, PublicKey};
use crate::economy::{
    adjust_offer, initial_cache_price, reprice_cache, settle, CacheOutcome, CachePrice,
    CoinLedger, EconomyParams, Offer, OfferOutcome,
};
use crate::executor::{computable, cost_of, evaluate, FunctionTable};
use crate::log::{encode_keyed, EntryKind, Log, LogEntry, LogRole, Validity};
use crate::logstore::{LogPair, LogStore, PairStatus, StoreError, TtlConfig};
use crate::message::{Beacon, BeaconReply, KnownTails, LogUpdate, Message, TailQuery, TailResponse};
use crate::naming::{Expression, Name};

/// Protocol timing and replication parameters. Periods are simulated
/// milliseconds.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ProtocolConfig {
    pub beacon_period: u64,
    /// How many log names fit into one beacon frame.
    pub max_names: usize,
    /// R: how many nodes should independently solve each task.
    pub replication_target: u32,
    pub keepalive_period: u64,
    /// M: missed keep-alive periods before a taker counts as failed.
    pub keepalive_miss_threshold: u32,
    /// D: upper bound of the random take-over delay.
    pub takeover_delay_max: u64,
    pub seed: u64,
}

impl Default for ProtocolConfig {
    fn default() -> ProtocolConfig {
        ProtocolConfig {
            beacon_period: 1_000,
            max_names: 8,
            replication_target: 2,
            keepalive_period: 5_000,
            keepalive_miss_threshold: 3,
            takeover_delay_max: 10_000,
            seed: 0,
        }
    }
}

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ConfigError {
    #[error("{0} must be positive")]
    ZeroPeriod(&'static str),
    #[error("replication target must be at least 1")]
    ReplicationTarget,
    #[error("keep-alive miss threshold must be at least 2")]
    MissThreshold,
}

impl ProtocolConfig {
    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.beacon_period == 0 {
            return Err(ConfigError::ZeroPeriod("beacon_period"));
        }
        if self.keepalive_period == 0 {
            return Err(ConfigError::ZeroPeriod("keepalive_period"));
        }
        if self.takeover_delay_max == 0 {
            return Err(ConfigError::ZeroPeriod("takeover_delay_max"));
        }
        if self.replication_target < 1 {
            return Err(ConfigError::ReplicationTarget);
        }
        if self.keepalive_miss_threshold < 2 {
            return Err(ConfigError::MissThreshold);
        }
        Ok(())
    }

    fn failure_window(&self) -> u64 {
        self.keepalive_miss_threshold as u64 * self.keepalive_period
    }
}

/// Whether finished results are kept under a TTL or under a price tag.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StoreMode {
    Ttl,
    Economy,
}

/// One task as derived from a log pair. Takers, keep-alive times and
/// result counts are recomputed from the logs on every change — the logs
/// are the only state.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TaskView {
    /// Digest of the first request entry carrying this expression.
    pub id: Digest,
    pub expr: Expression,
    pub expr_text: String,
    pub issuer: PublicKey,
    /// Latest offered price (economy mode); requests re-post the task
    /// with a new price to adjust it.
    pub offered_price: Option<u64>,
    pub first_request_time: u64,
    /// Taker -> time of their newest take-over note or keep-alive.
    pub takers: BTreeMap<PublicKey, u64>,
    /// Authors of matching result entries, in result-log order.
    pub results: Vec<PublicKey>,
}

impl TaskView {
    pub fn live_takers(&self, now: u64, failure_window: u64) -> usize {
        self.takers
            .values()
            .filter(|&&last| now.saturating_sub(last) <= failure_window)
            .count()
    }
}

/// Derive the task table of a pair from its logs.
pub fn task_views(pair: &LogPair) -> Vec<TaskView> {
    let Some(req) = pair.request_log() else {
        return Vec::new();
    };
    let mut order: Vec<TaskView> = Vec::new();
    let mut by_text: BTreeMap<String, usize> = BTreeMap::new();
    let mut by_id: BTreeMap<Digest, usize> = BTreeMap::new();
    for e in req.entries() {
        match e.kind() {
            EntryKind::Request => {
                let Some((text, value)) = crate::log::decode_keyed(e.payload()) else {
                    continue;
                };
                let Ok(expr) = Expression::parse(text) else {
                    continue;
                };
                let price =
                    (value.len() == 8).then(|| u64::from_be_bytes(value.try_into().unwrap()));
                if let Some(&i) = by_text.get(text) {
                    // A re-post of the same task carries a price update.
                    if price.is_some() {
                        order[i].offered_price = price;
                    }
                } else {
                    let i = order.len();
                    by_text.insert(text.to_string(), i);
                    by_id.insert(e.digest(), i);
                    order.push(TaskView {
                        id: e.digest(),
                        expr,
                        expr_text: text.to_string(),
                        issuer: e.author().clone(),
                        offered_price: price,
                        first_request_time: e.timestamp(),
                        takers: BTreeMap::new(),
                        results: Vec::new(),
                    });
                }
            }
            EntryKind::TakeOverNote | EntryKind::KeepAliveBeacon => {
                let Ok(bytes) = <[u8; 32]>::try_from(e.payload()) else {
                    continue;
                };
                let Some(&i) = by_id.get(&Digest(bytes)) else {
                    continue;
                };
                let task = &mut order[i];
                if e.kind() == EntryKind::TakeOverNote {
                    let last = task.takers.entry(e.author().clone()).or_insert(0);
                    *last = (*last).max(e.timestamp());
                } else if let Some(last) = task.takers.get_mut(e.author()) {
                    *last = (*last).max(e.timestamp());
                }
            }
            EntryKind::Data => {}
        }
    }
    for e in pair.result_log().entries() {
        if e.kind() != EntryKind::Data {
            continue;
        }
        let Some((text, _)) = crate::log::decode_keyed(e.payload()) else {
            continue;
        };
        if let Some(&i) = by_text.get(text) {
            order[i].results.push(e.author().clone());
        }
    }
    order
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum VerificationVerdict {
    Confirmed,
    Suspect,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PurgeWhat {
    Pair,
    RequestLog,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PaymentReason {
    Task,
    Cache,
}

/// Domain events for the harness: trace records, metrics and timers are
/// derived from these.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum NodeEvent {
    LogAppend {
        name: Name,
        role: LogRole,
        kind: EntryKind,
    },
    TaskInjected {
        name: Name,
        task: Digest,
        expr: String,
    },
    TaskTaken {
        name: Name,
        task: Digest,
        takers_now: u32,
    },
    TaskCompleted {
        name: Name,
        task: Digest,
    },
    TaskAbandoned {
        name: Name,
        task: Digest,
    },
    ExecutionStarted {
        name: Name,
        task: Digest,
        done_at: u64,
    },
    ExecutionFailed {
        name: Name,
        task: Digest,
    },
    TakeoverScheduled {
        name: Name,
        task: Digest,
        fire_at: u64,
    },
    PairCompleted {
        name: Name,
    },
    Purge {
        name: Name,
        what: PurgeWhat,
    },
    Payment {
        from: PublicKey,
        to: PublicKey,
        amount: u64,
        reason: PaymentReason,
    },
    PaymentDeferred {
        to: PublicKey,
        amount: u64,
    },
    ComputeLocally {
        name: Name,
        task: Digest,
        local_cost: u64,
        network_price: u64,
    },
    OfferAdjusted {
        name: Name,
        task: Digest,
        price: u64,
        cap: Option<u64>,
    },
    InvalidBeacon,
    UpdateRejected {
        name: Name,
    },
    UnknownNameRequested {
        name: Name,
    },
    CacheSaleRefused {
        name: Name,
        buyer: PublicKey,
    },
    VerificationStarted {
        name: Name,
        deadline: u64,
    },
    Verdict {
        name: Name,
        verdict: VerificationVerdict,
    },
    NoPeers {
        name: Name,
    },
}

/// Messages to send (None destination = broadcast to current neighbors)
/// plus events for the harness.
#[derive(Debug, Default)]
pub struct Output {
    pub messages: Vec<(Option<PublicKey>, Message)>,
    pub events: Vec<NodeEvent>,
}

impl Output {
    fn merge(&mut self, other: Output) {
        self.messages.extend(other.messages);
        self.events.extend(other.events);
    }

    fn event(&mut self, e: NodeEvent) {
        self.events.push(e);
    }
}

/// Everything configurable about a node besides its identity.
#[derive(Debug)]
pub struct NodeOptions {
    pub config: ProtocolConfig,
    pub mode: StoreMode,
    pub ttl: TtlConfig,
    pub economy: EconomyParams,
    pub table: FunctionTable,
    /// Replicate only names under these prefixes; `None` replicates
    /// everything advertised.
    pub interest_prefixes: Option<Vec<Name>>,
    /// Names to request regardless of the interest prefixes.
    pub seeks: BTreeSet<Name>,
    /// Economy mode: ignore offers below this price.
    pub min_accept_price: u64,
    /// Milliseconds of execution time per cost unit.
    pub cost_time_ms: u64,
    /// How long to wait for tail responses during verification.
    pub verify_timeout: u64,
    /// Take extra copies of fully replicated tasks as trust verification.
    pub redundant_verification: bool,
}

impl Default for NodeOptions {
    fn default() -> NodeOptions {
        NodeOptions {
            config: ProtocolConfig::default(),
            mode: StoreMode::Ttl,
            ttl: TtlConfig::default(),
            economy: EconomyParams::default(),
            table: FunctionTable::demo(),
            interest_prefixes: None,
            seeks: BTreeSet::new(),
            min_accept_price: 1,
            cost_time_ms: 100,
            verify_timeout: 1_000,
            redundant_verification: false,
        }
    }
}

#[derive(Debug)]
struct PendingVerification {
    queried: BTreeSet<PublicKey>,
    received: BTreeMap<PublicKey, Digest>,
}

#[derive(Debug, Default)]
struct EconomyState {
    /// Offers on tasks this node issued, by task id.
    offers: BTreeMap<Digest, (Name, Offer)>,
    /// Taker count per offer at the last window evaluation.
    seen_takers: BTreeMap<Digest, usize>,
    /// (task, taker) pairs already settled.
    paid: BTreeSet<(Digest, PublicKey)>,
    /// Coins this node paid per pair, for the initial cache price.
    paid_for_pair: BTreeMap<Name, u64>,
    /// Offers whose task this node started computing locally.
    locally_started: BTreeSet<Digest>,
    cache_prices: BTreeMap<Name, CachePrice>,
    sold_in_window: BTreeSet<Name>,
}

/// A swarm participant: identity, log store, subscriptions and the task
/// execution bookkeeping. Driven entirely by timer and message handlers.
pub struct Node {
    identity: KeyPair,
    opts: NodeOptions,
    store: LogStore,
    rng: ChaCha8Rng,
    /// Per name: peers known to hold it (they get our deltas).
    fanout: BTreeMap<Name, BTreeSet<PublicKey>>,
    /// Names each neighbor advertised in its beacons.
    advertised: BTreeMap<PublicKey, BTreeSet<Name>>,
    /// Tasks this node took and is still working on, with their pair.
    in_progress: BTreeMap<Digest, Name>,
    /// Tasks with a take-over timer pending, to avoid double scheduling.
    scheduled_takeovers: BTreeSet<Digest>,
    /// Request logs waiting for their result log to arrive.
    partial_request_logs: BTreeMap<Name, Log>,
    /// Names this node purged on purpose; not replicated again unless
    /// explicitly sought.
    purged_names: BTreeSet<Name>,
    pending_verifications: BTreeMap<Name, PendingVerification>,
    economy: EconomyState,
}

impl Node {
    pub fn new(identity: KeyPair, opts: NodeOptions) -> Node {
        let rng = ChaCha8Rng::from_seed(derive_seed(opts.config.seed, "node-rng"));
        let store = LogStore::new(opts.ttl);
        Node {
            identity,
            opts,
            store,
            rng,
            fanout: BTreeMap::new(),
            advertised: BTreeMap::new(),
            in_progress: BTreeMap::new(),
            scheduled_takeovers: BTreeSet::new(),
            partial_request_logs: BTreeMap::new(),
            purged_names: BTreeSet::new(),
            pending_verifications: BTreeMap::new(),
            economy: EconomyState::default(),
        }
    }

    pub fn public(&self) -> &PublicKey {
        self.identity.public()
    }

    pub fn store(&self) -> &LogStore {
        &self.store
    }

    pub fn config(&self) -> &ProtocolConfig {
        &self.opts.config
    }

    pub fn options(&self) -> &NodeOptions {
        &self.opts
    }

    pub fn in_progress(&self) -> &BTreeMap<Digest, Name> {
        &self.in_progress
    }

    pub fn task_views_for(&self, name: &Name) -> Vec<TaskView> {
        self.store
            .get_pair(name)
            .map(|p| task_views(p))
            .unwrap_or_default()
    }

    /// Timestamp for a local append: strictly after the tail so the local
    /// chain is always in canonical order on its own.
    fn stamp(log: &Log, now: u64) -> u64 {
        now.max(log.tail().timestamp() + 1)
    }

    fn wants(&self, name: &Name) -> bool {
        if self.opts.seeks.contains(name) {
            return true;
        }
        if self.purged_names.contains(name) {
            return false;
        }
        match &self.opts.interest_prefixes {
            None => true,
            Some(prefixes) => prefixes.iter().any(|p| name.starts_with(p)),
        }
    }

    fn is_holder(&self, name: &Name, peer: &PublicKey) -> bool {
        self.fanout.get(name).is_some_and(|s| s.contains(peer))
    }

    /// Record that `peer` holds `name`. The first evidence of a new
    /// replica resets and doubles the pair's TTL.
    fn note_holder(&mut self, name: &Name, peer: &PublicKey, now: u64) {
        let added = self
            .fanout
            .entry(name.clone())
            .or_default()
            .insert(peer.clone());
        if added && self.opts.mode == StoreMode::Ttl && self.store.contains(name) {
            let _ = self.store.mark_replicated(name, now);
        }
    }

    fn push_delta(
        &self,
        name: &Name,
        role: LogRole,
        entries: Vec<LogEntry>,
        exclude: Option<&PublicKey>,
    ) -> Vec<(Option<PublicKey>, Message)> {
        if entries.is_empty() {
            return Vec::new();
        }
        let Some(peers) = self.fanout.get(name) else {
            return Vec::new();
        };
        peers
            .iter()
            .filter(|p| Some(*p) != exclude && *p != self.public())
            .map(|p| {
                (
                    Some(p.clone()),
                    Message::LogUpdate(LogUpdate {
                        sender: self.public().clone(),
                        name: name.clone(),
                        role,
                        entries: entries.clone(),
                    }),
                )
            })
            .collect()
    }

    // ------------------------------------------------------------------
    // Beaconing and synchronization
    // ------------------------------------------------------------------

    /// The periodic discovery frame: the first N stored names, with a
    /// truncation flag when more exist. Sent even with an empty store —
    /// it announces presence.
    pub fn make_beacon(&self) -> Beacon {
        let listing = self.store.list_names(self.opts.config.max_names);
        Beacon::build(
            &self.identity,
            listing.total as u64,
            listing.truncated,
            listing.names,
        )
    }

    /// Beacon tick: purge what expired, completed pairs drop their
    /// request logs, then broadcast the beacon.
    pub fn on_beacon_tick(&mut self, now: u64) -> Output {
        let mut out = Output::default();
        if self.opts.mode == StoreMode::Ttl {
            for name in self.store.purge_expired(now) {
                self.fanout.remove(&name);
                self.purged_names.insert(name.clone());
                out.event(NodeEvent::Purge {
                    name,
                    what: PurgeWhat::Pair,
                });
            }
        }
        let completed: Vec<Name> = self
            .store
            .iter()
            .filter(|(_, p)| p.status() == PairStatus::Completed)
            .map(|(n, _)| n.clone())
            .collect();
        for name in completed {
            if self.store.purge_request_log(&name).is_ok() {
                out.event(NodeEvent::Purge {
                    name: name.clone(),
                    what: PurgeWhat::RequestLog,
                });
                if self.opts.mode == StoreMode::Economy {
                    let paid = self.economy.paid_for_pair.get(&name).copied().unwrap_or(0);
                    let price = initial_cache_price(paid, self.opts.economy.cache_fraction);
                    self.economy.cache_prices.insert(
                        name.clone(),
                        CachePrice {
                            name,
                            price,
                            prune_threshold: self.opts.economy.prune_threshold,
                        },
                    );
                }
            }
        }
        out.messages
            .push((None, Message::Beacon(self.make_beacon())));
        out
    }

    /// Decide what to replicate from an advertised name list. Replies
    /// only when something is wanted; a truncated beacon additionally
    /// asks for the complete name list.
    pub fn handle_beacon(&mut self, beacon: &Beacon, _now: u64) -> Output {
        let mut out = Output::default();
        if !beacon.verify() {
            out.event(NodeEvent::InvalidBeacon);
            return out;
        }
        self.advertised
            .entry(beacon.sender.clone())
            .or_default()
            .extend(beacon.names.iter().cloned());

        let mut requests = BTreeMap::new();
        for name in &beacon.names {
            if !self.wants(name) {
                continue;
            }
            match self.store.get_pair(name) {
                Err(_) => {
                    requests.insert(name.clone(), KnownTails::NONE);
                }
                Ok(pair) => {
                    if !self.is_holder(name, &beacon.sender) {
                        requests.insert(
                            name.clone(),
                            KnownTails {
                                request: pair
                                    .request_log()
                                    .map(Log::tail_digest)
                                    .unwrap_or(Digest::ZERO),
                                result: pair.result_log().tail_digest(),
                            },
                        );
                    }
                }
            }
        }
        let request_full_list = beacon.truncated;
        if requests.is_empty() && !request_full_list {
            return out;
        }
        out.messages.push((
            Some(beacon.sender.clone()),
            Message::BeaconReply(BeaconReply {
                sender: self.public().clone(),
                request_full_list,
                requests,
            }),
        ));
        out
    }

    /// Serve a beacon reply: push the entries the peer is missing, the
    /// request log strictly before the result log, and register the peer
    /// for future deltas. Cached-only pairs are sold, not given, in
    /// economy mode.
    pub fn handle_beacon_reply(
        &mut self,
        reply: &BeaconReply,
        now: u64,
        ledger: &mut CoinLedger,
    ) -> Output {
        let mut out = Output::default();
        for (name, tails) in &reply.requests {
            if !self.store.contains(name) {
                out.event(NodeEvent::UnknownNameRequested { name: name.clone() });
                continue;
            }
            if self.opts.mode == StoreMode::Economy && tails.result.is_zero() {
                if let Some(cp) = self.economy.cache_prices.get(name) {
                    let price = cp.price;
                    match ledger.transfer(&reply.sender, self.public(), price) {
                        Ok(()) => {
                            self.economy.sold_in_window.insert(name.clone());
                            out.event(NodeEvent::Payment {
                                from: reply.sender.clone(),
                                to: self.public().clone(),
                                amount: price,
                                reason: PaymentReason::Cache,
                            });
                        }
                        Err(_) => {
                            out.event(NodeEvent::CacheSaleRefused {
                                name: name.clone(),
                                buyer: reply.sender.clone(),
                            });
                            continue;
                        }
                    }
                }
            }
            self.note_holder(name, &reply.sender, now);
            let pair = self.store.get_pair(name).expect("checked above");
            let mut updates = Vec::new();
            if let Some(req) = pair.request_log() {
                let delta = req.entries_after(tails.request);
                if !delta.is_empty() {
                    updates.push((LogRole::Request, delta));
                }
            }
            let delta = pair.result_log().entries_after(tails.result);
            if !delta.is_empty() {
                updates.push((LogRole::Result, delta));
            }
            for (role, entries) in updates {
                out.messages.push((
                    Some(reply.sender.clone()),
                    Message::LogUpdate(LogUpdate {
                        sender: self.public().clone(),
                        name: name.clone(),
                        role,
                        entries,
                    }),
                ));
            }
        }
        if reply.request_full_list {
            let listing = self.store.list_names(usize::MAX);
            out.messages.push((
                Some(reply.sender.clone()),
                Message::Beacon(Beacon::build(
                    &self.identity,
                    listing.total as u64,
                    false,
                    listing.names,
                )),
            ));
        }
        out
    }

    /// Merge incoming entries, re-chain our own entries if the canonical
    /// order displaced them, forward the delta to other subscribers, and
    /// refresh every view derived from the logs.
    pub fn handle_log_update(
        &mut self,
        update: &LogUpdate,
        now: u64,
        ledger: &mut CoinLedger,
    ) -> Output {
        let mut out = Output::default();
        let name = &update.name;

        if !self.store.contains(name) {
            if !self.admit_new_pair(update, now, &mut out) {
                return out;
            }
            self.note_holder(name, &update.sender, now);
            self.after_log_change(name, now, ledger, &mut out);
            return out;
        }

        // Attach a request log to a pair we only knew results for.
        if update.role == LogRole::Request
            && self
                .store
                .get_pair(name)
                .is_ok_and(|p| p.request_log().is_none())
        {
            if !self.admit_request_log(update, &mut out) {
                return out;
            }
            self.note_holder(name, &update.sender, now);
            self.after_log_change(name, now, ledger, &mut out);
            return out;
        }

        let pair = self.store.get_pair_mut(name).expect("checked above");
        let log = match update.role {
            LogRole::Request => pair.request_log().expect("attach handled above"),
            LogRole::Result => pair.result_log(),
        };
        let merged = match log.merge(&update.entries) {
            Ok(m) => m,
            Err(_) => {
                out.event(NodeEvent::UpdateRejected { name: name.clone() });
                return out;
            }
        };
        let accepted = merged.accepted;
        let mut log = merged.log;
        let mut rechained_entries = Vec::new();
        if !merged.rechain_needed.is_empty() {
            let rechained = log.rechain(&self.identity);
            log = rechained.log;
            rechained_entries = rechained.changed;
        }
        match update.role {
            LogRole::Request => pair.set_request_log(log),
            LogRole::Result => pair.set_result_log(log),
        }
        // Forward fresh entries to the other subscribers; re-signed
        // entries must reach everyone, the sender included, or it would
        // keep the stale variant forever.
        out.messages
            .extend(self.push_delta(name, update.role, accepted, Some(&update.sender)));
        out.messages
            .extend(self.push_delta(name, update.role, rechained_entries, None));
        self.note_holder(name, &update.sender, now);
        self.after_log_change(name, now, ledger, &mut out);
        out
    }

    /// First contact with a pair: updates must start at an anchor. A
    /// result-only log is how cached results travel between swarms.
    fn admit_new_pair(&mut self, update: &LogUpdate, now: u64, out: &mut Output) -> bool {
        let name = &update.name;
        let Some(first) = update.entries.first() else {
            out.event(NodeEvent::UpdateRejected { name: name.clone() });
            return false;
        };
        if !first.back_pointer().is_zero() || !first.verify_signature() {
            out.event(NodeEvent::UpdateRejected { name: name.clone() });
            return false;
        }
        let suffix = match update.role {
            LogRole::Request => "req",
            LogRole::Result => "res",
        };
        let Ok(log_name) = name.child(suffix) else {
            out.event(NodeEvent::UpdateRejected { name: name.clone() });
            return false;
        };
        let base = Log::from_entries(log_name, update.role, vec![first.clone()]);
        let log = match base.merge(&update.entries[1..]) {
            Ok(m) => m.log,
            Err(_) => {
                out.event(NodeEvent::UpdateRejected { name: name.clone() });
                return false;
            }
        };
        match update.role {
            LogRole::Request => {
                self.partial_request_logs.insert(name.clone(), log);
            }
            LogRole::Result => {
                let pair = match self.partial_request_logs.remove(name) {
                    Some(req) => LogPair::new(name.clone(), req, log, now, self.opts.ttl.initial),
                    None => LogPair::cached(name.clone(), log, now, self.opts.ttl.initial),
                };
                self.store.insert_pair(pair).expect("absence checked");
            }
        }
        true
    }

    fn admit_request_log(&mut self, update: &LogUpdate, out: &mut Output) -> bool {
        let name = &update.name;
        let Some(first) = update.entries.first() else {
            out.event(NodeEvent::UpdateRejected { name: name.clone() });
            return false;
        };
        if !first.back_pointer().is_zero() || !first.verify_signature() {
            out.event(NodeEvent::UpdateRejected { name: name.clone() });
            return false;
        }
        let Ok(log_name) = name.child("req") else {
            out.event(NodeEvent::UpdateRejected { name: name.clone() });
            return false;
        };
        let base = Log::from_entries(log_name, LogRole::Request, vec![first.clone()]);
        match base.merge(&update.entries[1..]) {
            Ok(m) => {
                let pair = self.store.get_pair_mut(name).expect("caller checked");
                pair.set_request_log(m.log);
                true
            }
            Err(_) => {
                out.event(NodeEvent::UpdateRejected { name: name.clone() });
                false
            }
        }
    }

    /// Everything that must be refreshed after a log changed: completion
    /// status, abandoned tasks, and payments for newly delivered results.
    fn after_log_change(
        &mut self,
        name: &Name,
        _now: u64,
        ledger: &mut CoinLedger,
        out: &mut Output,
    ) {
        let Ok(pair) = self.store.get_pair(name) else {
            return;
        };
        let views = task_views(pair);

        // Someone else already delivered: stop working on it ourselves.
        let abandoned: Vec<Digest> = views
            .iter()
            .filter(|t| !t.results.is_empty())
            .filter(|t| self.in_progress.contains_key(&t.id))
            .filter(|t| !t.results.contains(self.public()))
            .map(|t| t.id)
            .collect();
        for id in abandoned {
            self.in_progress.remove(&id);
            out.event(NodeEvent::TaskAbandoned {
                name: name.clone(),
                task: id,
            });
        }

        // Pay each taker that delivered a result for one of our offers.
        if self.opts.mode == StoreMode::Economy {
            for t in &views {
                let Some((_, offer)) = self.economy.offers.get(&t.id) else {
                    continue;
                };
                let price = offer.price;
                let deliverers: Vec<PublicKey> = t
                    .results
                    .iter()
                    .filter(|a| t.takers.contains_key(*a))
                    .filter(|a| *a != self.public())
                    .filter(|a| !self.economy.paid.contains(&(t.id, (*a).clone())))
                    .cloned()
                    .collect();
                for taker in deliverers {
                    let offer = Offer::new(t.id, self.public().clone(), price);
                    let outcome = settle(ledger, &offer, std::slice::from_ref(&taker));
                    match &outcome[0].1 {
                        Ok(()) => {
                            self.economy.paid.insert((t.id, taker.clone()));
                            *self
                                .economy
                                .paid_for_pair
                                .entry(name.clone())
                                .or_insert(0) += price;
                            out.event(NodeEvent::Payment {
                                from: self.public().clone(),
                                to: taker,
                                amount: price,
                                reason: PaymentReason::Task,
                            });
                        }
                        Err(_) => {
                            out.event(NodeEvent::PaymentDeferred {
                                to: taker,
                                amount: price,
                            });
                        }
                    }
                }
            }
        }

        if pair.status() == PairStatus::Completed {
            out.event(NodeEvent::PairCompleted { name: name.clone() });
        }
    }

    // ------------------------------------------------------------------
    // Task lifecycle
    // ------------------------------------------------------------------

    /// Scan every pair for work.
    pub fn on_task_scan(&mut self, now: u64) -> Output {
        let mut out = Output::default();
        let names: Vec<Name> = self.store.names().cloned().collect();
        for name in names {
            out.merge(self.select_task(&name, now));
        }
        out
    }

    /// Pick one open task of this pair uniformly at random and claim it
    /// with a take-over note. Tasks are open while they have fewer takers
    /// than the replication target and no result yet; tasks this node
    /// cannot execute (unknown function, unresolved inputs) or whose
    /// offer is too low are skipped.
    pub fn select_task(&mut self, name: &Name, now: u64) -> Output {
        let mut out = Output::default();
        let Ok(pair) = self.store.get_pair(name) else {
            return out;
        };
        let r = self.opts.config.replication_target as usize;
        let views = task_views(pair);
        let eligible = |t: &TaskView| {
            t.results.is_empty()
                && !t.takers.contains_key(self.public())
                && !self.in_progress.contains_key(&t.id)
                && self.offer_acceptable(t)
                // Tasks we offered to the swarm ourselves are done
                // locally only when the offer hits the cost cap.
                && !self.economy.offers.contains_key(&t.id)
                && computable(&self.opts.table, pair, &t.expr)
        };
        let mut candidates: Vec<&TaskView> = views
            .iter()
            .filter(|t| t.takers.len() < r && eligible(t))
            .collect();
        if candidates.is_empty() && self.opts.redundant_verification {
            candidates = views
                .iter()
                .filter(|t| t.takers.len() >= r && eligible(t))
                .collect();
        }
        if candidates.is_empty() {
            return out;
        }
        let pick = candidates[self.rng.random_range(0..candidates.len())];
        let (task, expr, takers_now) = (pick.id, pick.expr.clone(), pick.takers.len() as u32 + 1);
        self.take_task(name, task, &expr, takers_now, now, &mut out);
        out
    }

    fn offer_acceptable(&self, t: &TaskView) -> bool {
        match (self.opts.mode, t.offered_price) {
            (StoreMode::Economy, Some(price)) => price >= self.opts.min_accept_price,
            _ => true,
        }
    }

    /// Append the take-over note and start executing.
    fn take_task(
        &mut self,
        name: &Name,
        task: Digest,
        expr: &Expression,
        takers_now: u32,
        now: u64,
        out: &mut Output,
    ) {
        let cost = cost_of(&self.opts.table, expr).unwrap_or(0);
        let done_at = now + cost * self.opts.cost_time_ms;
        let Ok(pair) = self.store.get_pair_mut(name) else {
            return;
        };
        let Some(req) = pair.request_log_mut() else {
            return;
        };
        let ts = Self::stamp(req, now);
        let entry = req
            .append(EntryKind::TakeOverNote, task.0.to_vec(), &self.identity, ts)
            .expect("note append onto own tail")
            .clone();
        self.in_progress.insert(task, name.clone());
        out.event(NodeEvent::LogAppend {
            name: name.clone(),
            role: LogRole::Request,
            kind: EntryKind::TakeOverNote,
        });
        out.event(NodeEvent::TaskTaken {
            name: name.clone(),
            task,
            takers_now,
        });
        out.event(NodeEvent::ExecutionStarted {
            name: name.clone(),
            task,
            done_at,
        });
        out.messages
            .extend(self.push_delta(name, LogRole::Request, vec![entry], None));
    }

    /// One keep-alive entry per in-progress task, proving we still work.
    pub fn on_keepalive_tick(&mut self, now: u64) -> Output {
        let mut out = Output::default();
        let work: Vec<(Digest, Name)> = self
            .in_progress
            .iter()
            .map(|(d, n)| (*d, n.clone()))
            .collect();
        for (task, name) in work {
            let Ok(pair) = self.store.get_pair_mut(&name) else {
                continue;
            };
            let Some(req) = pair.request_log_mut() else {
                continue;
            };
            let ts = Self::stamp(req, now);
            let entry = req
                .append(
                    EntryKind::KeepAliveBeacon,
                    task.0.to_vec(),
                    &self.identity,
                    ts,
                )
                .expect("keep-alive append onto own tail")
                .clone();
            out.event(NodeEvent::LogAppend {
                name: name.clone(),
                role: LogRole::Request,
                kind: EntryKind::KeepAliveBeacon,
            });
            out.messages
                .extend(self.push_delta(&name, LogRole::Request, vec![entry], None));
        }
        out
    }

    /// Look for takers whose keep-alives went silent. When a task that
    /// was fully replicated drops below the target, schedule a take-over
    /// attempt after a random delay — the condition is re-checked when
    /// the timer fires, so replicas that synchronized a fresh note first
    /// back off.
    pub fn on_failure_scan(&mut self, now: u64) -> Output {
        let mut out = Output::default();
        let r = self.opts.config.replication_target as usize;
        let window = self.opts.config.failure_window();
        let d = self.opts.config.takeover_delay_max;
        let names: Vec<Name> = self.store.names().cloned().collect();
        for name in names {
            let Ok(pair) = self.store.get_pair(&name) else {
                continue;
            };
            if pair.request_log().is_none() {
                continue;
            }
            let views = task_views(pair);
            let mut to_schedule = Vec::new();
            for t in &views {
                if !t.results.is_empty()
                    || t.takers.len() < r
                    || t.live_takers(now, window) >= r
                    || t.takers.contains_key(self.public())
                    || self.in_progress.contains_key(&t.id)
                    || self.scheduled_takeovers.contains(&t.id)
                    || !computable(&self.opts.table, pair, &t.expr)
                {
                    continue;
                }
                to_schedule.push(t.id);
            }
            for task in to_schedule {
                let fire_at = now + self.rng.random_range(0..d);
                self.scheduled_takeovers.insert(task);
                out.event(NodeEvent::TakeoverScheduled {
                    name: name.clone(),
                    task,
                    fire_at,
                });
            }
        }
        out
    }

    /// The delayed take-over fires: act only if the task still needs us.
    pub fn on_takeover_fire(&mut self, name: &Name, task: Digest, now: u64) -> Output {
        let mut out = Output::default();
        self.scheduled_takeovers.remove(&task);
        let r = self.opts.config.replication_target as usize;
        let window = self.opts.config.failure_window();
        let Ok(pair) = self.store.get_pair(name) else {
            return out;
        };
        let views = task_views(pair);
        let Some(t) = views.iter().find(|t| t.id == task) else {
            return out;
        };
        if !t.results.is_empty()
            || t.live_takers(now, window) >= r
            || t.takers.contains_key(self.public())
            || self.in_progress.contains_key(&task)
            || !computable(&self.opts.table, pair, &t.expr)
        {
            return out;
        }
        let (expr, takers_now) = (t.expr.clone(), t.takers.len() as u32 + 1);
        self.take_task(name, task, &expr, takers_now, now, &mut out);
        out
    }

    /// Execution finished: publish the result, unless the task was
    /// abandoned because someone else's result arrived first.
    pub fn on_exec_done(
        &mut self,
        name: &Name,
        task: Digest,
        now: u64,
        ledger: &mut CoinLedger,
    ) -> Output {
        let mut out = Output::default();
        if self.in_progress.remove(&task).is_none() {
            return out;
        }
        let Ok(pair) = self.store.get_pair(name) else {
            return out;
        };
        let Some(view) = task_views(pair).into_iter().find(|t| t.id == task) else {
            return out;
        };
        let result = evaluate(&self.opts.table, pair, &view.expr);
        let pair = self.store.get_pair_mut(name).expect("checked above");
        match result {
            Ok(bytes) => {
                let payload = encode_keyed(&view.expr_text, &bytes);
                let ts = Self::stamp(pair.result_log(), now);
                let entry = pair
                    .result_log_mut()
                    .append(EntryKind::Data, payload, &self.identity, ts)
                    .expect("data append onto own tail")
                    .clone();
                pair.recompute_status();
                out.event(NodeEvent::LogAppend {
                    name: name.clone(),
                    role: LogRole::Result,
                    kind: EntryKind::Data,
                });
                out.event(NodeEvent::TaskCompleted {
                    name: name.clone(),
                    task,
                });
                out.messages
                    .extend(self.push_delta(name, LogRole::Result, vec![entry], None));
                self.after_log_change(name, now, ledger, &mut out);
            }
            Err(_) => {
                out.event(NodeEvent::ExecutionFailed {
                    name: name.clone(),
                    task,
                });
            }
        }
        out
    }

    // ------------------------------------------------------------------
    // Task injection (the node issuing a request)
    // ------------------------------------------------------------------

    /// Start a new swarm: create the log pair, publish the input data,
    /// one request per sub-computation, and (economy mode) attach offers.
    pub fn inject_task(
        &mut self,
        name: &Name,
        root: &Expression,
        inputs: &BTreeMap<String, Vec<u8>>,
        offer_price: Option<u64>,
        now: u64,
    ) -> Result<Output, StoreError> {
        let mut out = Output::default();
        if self.store.contains(name) {
            return Err(StoreError::DuplicateName(name.clone()));
        }
        self.purged_names.remove(name);
        let price_bytes = |p: Option<u64>| p.map(|v| v.to_be_bytes().to_vec()).unwrap_or_default();

        let root_price = self.plan_offer(root, inputs, offer_price);
        let req_name = name.child("req").expect("suffix is a valid component");
        let res_name = name.child("res").expect("suffix is a valid component");
        let mut req = Log::create(
            req_name,
            LogRole::Request,
            &self.identity,
            encode_keyed(&root.text(), &price_bytes(root_price)),
            now,
        );
        out.event(NodeEvent::LogAppend {
            name: name.clone(),
            role: LogRole::Request,
            kind: EntryKind::Request,
        });
        for (key, bytes) in inputs {
            let ts = Self::stamp(&req, now);
            req.append(EntryKind::Data, encode_keyed(key, bytes), &self.identity, ts)
                .expect("input append onto own tail");
            out.event(NodeEvent::LogAppend {
                name: name.clone(),
                role: LogRole::Request,
                kind: EntryKind::Data,
            });
        }
        let tree = root.decompose();
        // The root call is already requested by the anchor.
        let sub_count = tree.subtasks.len().saturating_sub(1);
        for sub in tree.subtasks.into_iter().take(sub_count) {
            let price = self.plan_offer(&sub, inputs, offer_price);
            let ts = Self::stamp(&req, now);
            req.append(
                EntryKind::Request,
                encode_keyed(&sub.text(), &price_bytes(price)),
                &self.identity,
                ts,
            )
            .expect("request append onto own tail");
            out.event(NodeEvent::LogAppend {
                name: name.clone(),
                role: LogRole::Request,
                kind: EntryKind::Request,
            });
        }
        let res = Log::create(res_name, LogRole::Result, &self.identity, Vec::new(), now);
        out.event(NodeEvent::LogAppend {
            name: name.clone(),
            role: LogRole::Result,
            kind: EntryKind::Data,
        });

        let pair = LogPair::new(name.clone(), req, res, now, self.opts.ttl.initial);
        self.store.insert_pair(pair).expect("absence checked");

        let pair = self.store.get_pair(name).expect("just inserted");
        let views = task_views(pair);
        let caps: Vec<Option<u64>> = views
            .iter()
            .map(|t| self.local_cost_cap(&t.expr, pair))
            .collect();
        for (t, cap) in views.iter().zip(caps) {
            out.event(NodeEvent::TaskInjected {
                name: name.clone(),
                task: t.id,
                expr: t.expr_text.clone(),
            });
            if let Some(price) = t.offered_price {
                self.economy.offers.insert(
                    t.id,
                    (name.clone(), Offer::new(t.id, self.public().clone(), price)),
                );
                self.economy.seen_takers.insert(t.id, 0);
                out.event(NodeEvent::OfferAdjusted {
                    name: name.clone(),
                    task: t.id,
                    price,
                    cap,
                });
            }
        }
        Ok(out)
    }

    /// Price an offer at injection: clamped one below our own cost when
    /// we could compute the task locally. Tasks cheaper locally than the
    /// minimum price are not offered at all — we just do them.
    fn plan_offer(
        &self,
        expr: &Expression,
        inputs: &BTreeMap<String, Vec<u8>>,
        asked: Option<u64>,
    ) -> Option<u64> {
        if self.opts.mode != StoreMode::Economy {
            return None;
        }
        let asked = asked?;
        match self.local_cost_with(expr, inputs) {
            None => Some(asked.max(1)),
            Some(cost) if cost >= 2 => Some(asked.clamp(1, cost - 1)),
            Some(_) => None,
        }
    }

    fn local_cost_with(
        &self,
        expr: &Expression,
        inputs: &BTreeMap<String, Vec<u8>>,
    ) -> Option<u64> {
        if !computable(&self.opts.table, inputs, expr) {
            return None;
        }
        cost_of(&self.opts.table, expr).ok()
    }

    fn local_cost_cap(&self, expr: &Expression, pair: &LogPair) -> Option<u64> {
        if !computable(&self.opts.table, pair, expr) {
            return None;
        }
        cost_of(&self.opts.table, expr)
            .ok()
            .map(|c| c.saturating_sub(1))
    }

    // ------------------------------------------------------------------
    // Economy windows
    // ------------------------------------------------------------------

    /// Evaluate every open offer: raise while untaken (up to the local
    /// cost cap, after which we compute the result ourselves), lower once
    /// takers were found within the window. Price changes are re-posted
    /// into the request log so the whole swarm sees them.
    pub fn on_offer_window(&mut self, now: u64) -> Output {
        let mut out = Output::default();
        if self.opts.mode != StoreMode::Economy {
            return out;
        }
        let task_ids: Vec<Digest> = self.economy.offers.keys().copied().collect();
        for task in task_ids {
            let (name, mut offer) = self.economy.offers.get(&task).expect("key listed").clone();
            if self.economy.locally_started.contains(&task) {
                continue;
            }
            let Ok(pair) = self.store.get_pair(&name) else {
                continue;
            };
            let Some(view) = task_views(pair).into_iter().find(|t| t.id == task) else {
                continue;
            };
            if !view.results.is_empty() {
                continue; // solved; settlement happens on delivery
            }
            let seen = self.economy.seen_takers.get(&task).copied().unwrap_or(0);
            let outcome = if view.takers.len() > seen {
                OfferOutcome::TakenWithinWindow
            } else {
                OfferOutcome::NotTaken
            };
            self.economy.seen_takers.insert(task, view.takers.len());
            let cap = self.local_cost_cap(&view.expr, pair);

            if outcome == OfferOutcome::NotTaken {
                if let Some(cap) = cap {
                    if cap >= 1 && offer.price >= cap {
                        // The network wants more than doing it ourselves.
                        let local_cost = cap + 1;
                        self.economy.locally_started.insert(task);
                        self.economy.offers.insert(task, (name.clone(), offer));
                        out.event(NodeEvent::ComputeLocally {
                            name: name.clone(),
                            task,
                            local_cost,
                            network_price: local_cost,
                        });
                        let takers_now = view.takers.len() as u32 + 1;
                        let expr = view.expr.clone();
                        self.take_task(&name, task, &expr, takers_now, now, &mut out);
                        continue;
                    }
                }
            }

            let old_price = offer.price;
            let local_cost = cap.map(|c| c + 1);
            let new_price = adjust_offer(&mut offer, outcome, local_cost, &self.opts.economy);
            self.economy.offers.insert(task, (name.clone(), offer));
            if new_price != old_price {
                out.event(NodeEvent::OfferAdjusted {
                    name: name.clone(),
                    task,
                    price: new_price,
                    cap,
                });
                let expr_text = view.expr_text.clone();
                let Ok(pair) = self.store.get_pair_mut(&name) else {
                    continue;
                };
                let Some(req) = pair.request_log_mut() else {
                    continue;
                };
                let ts = Self::stamp(req, now);
                let entry = req
                    .append(
                        EntryKind::Request,
                        encode_keyed(&expr_text, &new_price.to_be_bytes()),
                        &self.identity,
                        ts,
                    )
                    .expect("re-post append onto own tail")
                    .clone();
                out.event(NodeEvent::LogAppend {
                    name: name.clone(),
                    role: LogRole::Request,
                    kind: EntryKind::Request,
                });
                out.messages
                    .extend(self.push_delta(&name, LogRole::Request, vec![entry], None));
            }
        }
        out
    }

    /// Re-price cached results; prune the ones nobody pays for anymore.
    pub fn on_cache_window(&mut self, _now: u64) -> Output {
        let mut out = Output::default();
        if self.opts.mode != StoreMode::Economy {
            return out;
        }
        let names: Vec<Name> = self.economy.cache_prices.keys().cloned().collect();
        for name in names {
            let sold = self.economy.sold_in_window.remove(&name);
            let cp = self
                .economy
                .cache_prices
                .get_mut(&name)
                .expect("key listed");
            let outcome = if sold {
                CacheOutcome::Sold
            } else {
                CacheOutcome::NoBuyerWindow
            };
            let (_, prune) = reprice_cache(cp, outcome, &self.opts.economy);
            if prune {
                self.economy.cache_prices.remove(&name);
                self.store.remove_pair(&name);
                self.fanout.remove(&name);
                self.purged_names.insert(name.clone());
                out.event(NodeEvent::Purge {
                    name,
                    what: PurgeWhat::Pair,
                });
            }
        }
        out
    }

    pub fn cache_price(&self, name: &Name) -> Option<u64> {
        self.economy.cache_prices.get(name).map(|c| c.price)
    }

    // ------------------------------------------------------------------
    // Cross-node result verification
    // ------------------------------------------------------------------

    /// Ask up to `min(3, candidates)` neighbors that advertised the pair
    /// for their result-log tail digest.
    pub fn start_verification(
        &mut self,
        name: &Name,
        neighbors: &[PublicKey],
        now: u64,
    ) -> Output {
        let mut out = Output::default();
        let holders: Vec<PublicKey> = neighbors
            .iter()
            .filter(|p| {
                self.advertised
                    .get(*p)
                    .is_some_and(|names| names.contains(name))
                    || self.is_holder(name, p)
            })
            .cloned()
            .collect();
        if holders.is_empty() {
            out.event(NodeEvent::NoPeers { name: name.clone() });
            return out;
        }
        let queried: BTreeSet<PublicKey> = holders.into_iter().take(3).collect();
        for peer in &queried {
            out.messages.push((
                Some(peer.clone()),
                Message::TailQuery(TailQuery {
                    sender: self.public().clone(),
                    name: name.clone(),
                }),
            ));
        }
        let deadline = now + self.opts.verify_timeout;
        self.pending_verifications.insert(
            name.clone(),
            PendingVerification {
                queried,
                received: BTreeMap::new(),
            },
        );
        out.event(NodeEvent::VerificationStarted {
            name: name.clone(),
            deadline,
        });
        out
    }

    pub fn handle_tail_query(&self, query: &TailQuery) -> Output {
        let mut out = Output::default();
        let result_tail = self
            .store
            .get_pair(&query.name)
            .map(|p| p.result_log().tail_digest())
            .unwrap_or(Digest::ZERO);
        out.messages.push((
            Some(query.sender.clone()),
            Message::TailResponse(TailResponse {
                sender: self.public().clone(),
                name: query.name.clone(),
                result_tail,
            }),
        ));
        out
    }

    pub fn handle_tail_response(&mut self, resp: &TailResponse, now: u64) -> Output {
        let Some(pending) = self.pending_verifications.get_mut(&resp.name) else {
            return Output::default();
        };
        if !pending.queried.contains(&resp.sender) {
            return Output::default();
        }
        pending
            .received
            .insert(resp.sender.clone(), resp.result_tail);
        if pending.received.len() == pending.queried.len() {
            let name = resp.name.clone();
            return self.finish_verification(&name, now);
        }
        Output::default()
    }

    /// Conclude a verification round (all responses in, or the timeout
    /// fired): confirmed only when our own chain verifies and every
    /// queried peer reported exactly our tail.
    pub fn finish_verification(&mut self, name: &Name, _now: u64) -> Output {
        let mut out = Output::default();
        let Some(pending) = self.pending_verifications.remove(name) else {
            return out;
        };
        let verdict = self.verification_verdict(name, &pending);
        out.event(NodeEvent::Verdict {
            name: name.clone(),
            verdict,
        });
        out
    }

    fn verification_verdict(
        &self,
        name: &Name,
        pending: &PendingVerification,
    ) -> VerificationVerdict {
        let Ok(pair) = self.store.get_pair(name) else {
            return VerificationVerdict::Suspect;
        };
        if pair.result_log().verify_chain().verdict != Validity::Valid {
            return VerificationVerdict::Suspect;
        }
        let local_tail = pair.result_log().tail_digest();
        let all_answered = pending.received.len() == pending.queried.len();
        let all_match = pending.received.values().all(|d| *d == local_tail);
        if all_answered && all_match && !pending.queried.is_empty() {
            VerificationVerdict::Confirmed
        } else {
            VerificationVerdict::Suspect
        }
    }

    // ------------------------------------------------------------------
    // Harness hooks
    // ------------------------------------------------------------------

    /// Append an arbitrary entry to a held log (scripted workloads).
    pub fn raw_append(
        &mut self,
        name: &Name,
        role: LogRole,
        kind: EntryKind,
        payload: Vec<u8>,
        now: u64,
    ) -> Result<Output, StoreError> {
        let mut out = Output::default();
        let pair = self.store.get_pair_mut(name)?;
        let log = match role {
            LogRole::Request => pair
                .request_log_mut()
                .ok_or_else(|| StoreError::NotFound(name.clone()))?,
            LogRole::Result => pair.result_log_mut(),
        };
        let ts = Self::stamp(log, now);
        let entry = log
            .append(kind, payload, &self.identity, ts)
            .map_err(|_| StoreError::NotFound(name.clone()))?
            .clone();
        pair.recompute_status();
        out.event(NodeEvent::LogAppend {
            name: name.clone(),
            role,
            kind,
        });
        out.messages
            .extend(self.push_delta(name, role, vec![entry], None));
        Ok(out)
    }

    /// Corrupt the stored result-log tail in place (fault injection for
    /// the integrity checks): the payload changes but the entry is not
    /// re-signed by its author, exactly what a forging node would try.
    pub fn forge_result_tail(&mut self, name: &Name) -> Result<(), StoreError> {
        let pair = self.store.get_pair_mut(name)?;
        let log = pair.result_log();
        let mut entries = log.entries().to_vec();
        let last = entries.len() - 1;
        let e = &entries[last];
        let mut payload = e.payload().to_vec();
        payload.push(0xff);
        entries[last] = LogEntry::sign(
            &KeyPair::mock_from_seed(&derive_seed(0xf0f0, "forged-signer")),
            e.author_seq(),
            e.timestamp(),
            e.kind(),
            payload,
            e.back_pointer(),
        );
        let forged = Log::from_entries(log.name().clone(), log.role(), entries);
        pair.set_result_log(forged);
        Ok(())
    }

    /// A graceful departure flushes full copies of everything to every
    /// subscriber; a crash just stops.
    pub fn on_graceful_leave(&mut self, _now: u64) -> Output {
        let mut out = Output::default();
        let names: Vec<Name> = self.store.names().cloned().collect();
        for name in names {
            let Ok(pair) = self.store.get_pair(&name) else {
                continue;
            };
            let mut updates = Vec::new();
            if let Some(req) = pair.request_log() {
                updates.push((LogRole::Request, req.entries().to_vec()));
            }
            updates.push((LogRole::Result, pair.result_log().entries().to_vec()));
            for (role, entries) in updates {
                out.messages
                    .extend(self.push_delta(&name, role, entries, None));
            }
        }
        out
    }

    /// Dispatch one incoming frame.
    pub fn handle_message(&mut self, msg: &Message, now: u64, ledger: &mut CoinLedger) -> Output {
        match msg {
            Message::Beacon(b) => self.handle_beacon(b, now),
            Message::BeaconReply(r) => self.handle_beacon_reply(r, now, ledger),
            Message::LogUpdate(u) => self.handle_log_update(u, now, ledger),
            Message::TailQuery(q) => self.handle_tail_query(q),
            Message::TailResponse(r) => self.handle_tail_response(r, now),
        }
    }
}

impl std::fmt::Debug for Node {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Node")
            .field("public", &self.public().short_hex())
            .field("pairs", &self.store.len())
            .field("in_progress", &self.in_progress.len())
            .finish()
    }
}
