//! Deterministic discrete event simulator.
//!
//! One binary heap of (time, sequence) ordered events drives every node
//! through the swarm protocol: timers, message deliveries, churn and the
//! scripted scenario events. Identical (scenario, seed) pairs produce
//! byte-identical traces: every random draw comes from a stream derived
//! from the master seed, ties are broken by insertion sequence, and all
//! iteration happens over ordered maps.

use std::cmp::Ordering;
use std::collections::{BTreeMap, BTreeSet, BinaryHeap};

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::crypto::{derive_seed, Digest, KeyPair, PublicKey};
use crate::economy::CoinLedger;
use crate::executor::FunctionTable;
use crate::log::{EntryKind, LogRole};
use crate::message::Message;
use crate::naming::{Expression, Name};
use crate::scenario::{
    ChurnAction, Connectivity, CryptoScheme, EntrySpec, LogHalf, Mode, Scenario, ScenarioError,
};
use crate::swarm::{Node, NodeEvent, NodeOptions, Output, PaymentReason, PurgeWhat, VerificationVerdict};
use crate::trace::{LocalDecision, Metrics, NodeMetrics, TaskMetrics, TraceRecord};

/// Everything a run produces. The trace is in emission order; times are
/// nondecreasing.
#[derive(Debug)]
pub struct RunOutput {
    pub metrics: Metrics,
    pub trace: Vec<TraceRecord>,
    /// Every node's store at the end of the run, for inspection by tests
    /// and tooling. Not part of the serialized trace.
    pub final_state: Vec<NodeSnapshot>,
}

/// A node's log pairs at the end of a run.
#[derive(Debug)]
pub struct NodeSnapshot {
    pub id: String,
    pub alive: bool,
    pub pairs: Vec<crate::logstore::LogPair>,
    pub balance: u64,
}

impl RunOutput {
    /// The whole run as JSON lines: records, then the metrics object.
    pub fn to_jsonl(&self) -> String {
        let mut out = String::new();
        for r in &self.trace {
            out.push_str(&r.to_json());
            out.push('\n');
        }
        out.push_str(&self.metrics.to_json());
        out.push('\n');
        out
    }
}

/// Run a scenario to completion.
pub fn run(scenario: &Scenario) -> Result<RunOutput, ScenarioError> {
    scenario.validate()?;
    Simulation::new(scenario)?.run()
}

/// The adjacency of the connectivity model at one instant, by node id.
/// Churn is not applied here; the simulator filters dead nodes itself.
pub fn connectivity_at(
    scenario: &Scenario,
    time: u64,
) -> Result<BTreeMap<String, BTreeSet<String>>, ScenarioError> {
    scenario.validate()?;
    let ids: Vec<String> = scenario.nodes.iter().map(|n| n.id.clone()).collect();
    let topology = Topology::build(scenario)?;
    let mut out: BTreeMap<String, BTreeSet<String>> = ids
        .iter()
        .map(|id| (id.clone(), BTreeSet::new()))
        .collect();
    for a in 0..ids.len() {
        for b in a + 1..ids.len() {
            if topology.linked(a, b, time) {
                out.get_mut(&ids[a]).unwrap().insert(ids[b].clone());
                out.get_mut(&ids[b]).unwrap().insert(ids[a].clone());
            }
        }
    }
    Ok(out)
}

// ----------------------------------------------------------------------
// Topology
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy)]
struct Segment {
    from_t: u64,
    to_t: u64,
    x0: f64,
    y0: f64,
    x1: f64,
    y1: f64,
}

enum Topology {
    Static {
        edges: BTreeSet<(usize, usize)>,
        full_mesh: bool,
    },
    Scripted {
        initial: BTreeSet<(usize, usize)>,
        /// (time, add?, a, b) sorted by time then scenario order.
        events: Vec<(u64, bool, usize, usize)>,
    },
    Waypoint {
        tracks: Vec<Vec<Segment>>,
        range: f64,
    },
}

impl Topology {
    fn build(scenario: &Scenario) -> Result<Topology, ScenarioError> {
        let index: BTreeMap<&str, usize> = scenario
            .nodes
            .iter()
            .enumerate()
            .map(|(i, n)| (n.id.as_str(), i))
            .collect();
        let pair = |a: &str, b: &str| {
            let (x, y) = (index[a], index[b]);
            (x.min(y), x.max(y))
        };
        Ok(match &scenario.connectivity {
            Connectivity::FullMesh => Topology::Static {
                edges: BTreeSet::new(),
                full_mesh: true,
            },
            Connectivity::Static { edges } => Topology::Static {
                edges: edges.iter().map(|[a, b]| pair(a, b)).collect(),
                full_mesh: false,
            },
            Connectivity::Scripted { initial, events } => Topology::Scripted {
                initial: initial.iter().map(|[a, b]| pair(a, b)).collect(),
                events: events
                    .iter()
                    .map(|e| {
                        let (a, b) = pair(&e.a, &e.b);
                        (
                            e.time,
                            e.action == crate::scenario::ContactAction::Add,
                            a,
                            b,
                        )
                    })
                    .collect(),
            },
            Connectivity::Waypoint {
                width,
                height,
                range,
                speed_min,
                speed_max,
            } => {
                let mut rng = ChaCha8Rng::from_seed(derive_seed(scenario.seed, "waypoint"));
                let mut tracks = Vec::with_capacity(scenario.nodes.len());
                for _ in &scenario.nodes {
                    let mut segments = Vec::new();
                    let mut t = 0u64;
                    let mut x = rng.random_range(0.0..*width);
                    let mut y = rng.random_range(0.0..*height);
                    while t <= scenario.duration {
                        let dest_x = rng.random_range(0.0..*width);
                        let dest_y = rng.random_range(0.0..*height);
                        let speed = rng.random_range(*speed_min..=*speed_max); // units/second
                        let dist = ((dest_x - x).powi(2) + (dest_y - y).powi(2)).sqrt();
                        let travel_ms = ((dist / speed) * 1000.0).ceil().max(1.0) as u64;
                        segments.push(Segment {
                            from_t: t,
                            to_t: t + travel_ms,
                            x0: x,
                            y0: y,
                            x1: dest_x,
                            y1: dest_y,
                        });
                        t += travel_ms;
                        x = dest_x;
                        y = dest_y;
                    }
                    tracks.push(segments);
                }
                Topology::Waypoint {
                    tracks,
                    range: *range,
                }
            }
        })
    }

    fn position(track: &[Segment], t: u64) -> (f64, f64) {
        for s in track {
            if t <= s.to_t {
                let span = (s.to_t - s.from_t) as f64;
                let frac = if span == 0.0 {
                    1.0
                } else {
                    (t.saturating_sub(s.from_t)) as f64 / span
                };
                return (s.x0 + (s.x1 - s.x0) * frac, s.y0 + (s.y1 - s.y0) * frac);
            }
        }
        let last = track.last().expect("tracks cover the whole run");
        (last.x1, last.y1)
    }

    fn linked(&self, a: usize, b: usize, t: u64) -> bool {
        if a == b {
            return false;
        }
        let key = (a.min(b), a.max(b));
        match self {
            Topology::Static { edges, full_mesh } => *full_mesh || edges.contains(&key),
            Topology::Scripted { initial, events } => {
                let mut present = initial.contains(&key);
                for (time, add, x, y) in events {
                    if *time > t {
                        break;
                    }
                    if (*x, *y) == key {
                        present = *add;
                    }
                }
                present
            }
            Topology::Waypoint { tracks, range } => {
                let (ax, ay) = Self::position(&tracks[a], t);
                let (bx, by) = Self::position(&tracks[b], t);
                let d2 = (ax - bx).powi(2) + (ay - by).powi(2);
                d2 <= range * range
            }
        }
    }
}

// ----------------------------------------------------------------------
// Event queue
// ----------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum TimerKind {
    Beacon,
    TaskScan,
    KeepAlive,
    FailureScan,
    OfferWindow,
    CacheWindow,
}

#[derive(Debug)]
enum Event {
    Timer { node: usize, kind: TimerKind },
    Deliver { from: usize, to: usize, msg: Message },
    ExecDone { node: usize, name: Name, task: Digest },
    TakeoverFire { node: usize, name: Name, task: Digest },
    VerifyTimeout { node: usize, name: Name },
    Churn { index: usize },
    Inject { index: usize },
    RawAppend { index: usize },
    Verify { index: usize },
    Forge { index: usize },
    Credit { index: usize },
    Sample,
}

struct Queued {
    time: u64,
    seq: u64,
    event: Event,
}

impl PartialEq for Queued {
    fn eq(&self, other: &Self) -> bool {
        (self.time, self.seq) == (other.time, other.seq)
    }
}
impl Eq for Queued {}
impl PartialOrd for Queued {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for Queued {
    fn cmp(&self, other: &Self) -> Ordering {
        // Reversed: BinaryHeap is a max-heap, we want earliest first.
        (other.time, other.seq).cmp(&(self.time, self.seq))
    }
}

// ----------------------------------------------------------------------
// The simulation proper
// ----------------------------------------------------------------------

struct SimNode {
    id: String,
    node: Node,
    alive: bool,
}

struct Simulation<'s> {
    scenario: &'s Scenario,
    nodes: Vec<SimNode>,
    key_to_index: BTreeMap<PublicKey, usize>,
    topology: Topology,
    queue: BinaryHeap<Queued>,
    next_seq: u64,
    link_rng: ChaCha8Rng,
    /// Per directed link: the latest scheduled delivery, so links are
    /// FIFO (a reply never overtakes the update it answers).
    link_fifo: BTreeMap<(usize, usize), u64>,
    ledger: CoinLedger,
    trace: Vec<TraceRecord>,
    metrics: Metrics,
    /// Convergence candidate: set when all replicas matched at a sample.
    converged_candidate: Option<u64>,
}

impl<'s> Simulation<'s> {
    fn new(scenario: &'s Scenario) -> Result<Simulation<'s>, ScenarioError> {
        let econ = scenario.economy.resolve();
        let mut ledger = CoinLedger::new();
        let mut nodes = Vec::with_capacity(scenario.nodes.len());
        let mut key_to_index = BTreeMap::new();
        let joins: BTreeSet<&str> = scenario
            .churn
            .iter()
            .filter(|c| c.action == ChurnAction::Join)
            .map(|c| c.node.as_str())
            .collect();

        for (i, spec) in scenario.nodes.iter().enumerate() {
            let key_seed = derive_seed(scenario.seed, &format!("key:{}", spec.id));
            let identity = match scenario.crypto {
                CryptoScheme::Ed25519 => KeyPair::ed25519_from_seed(&key_seed),
                CryptoScheme::Mock => KeyPair::mock_from_seed(&key_seed),
            };
            let mut config = scenario.protocol_for(spec);
            config.seed = spec.seed.unwrap_or_else(|| {
                u64::from_be_bytes(
                    derive_seed(scenario.seed, &format!("rng:{}", spec.id))[..8]
                        .try_into()
                        .unwrap(),
                )
            });
            let mut table = FunctionTable::demo();
            for (short, cost) in &scenario.cost_overrides {
                let name = Name::parse(&format!("/fn/{short}")).map_err(|e| {
                    ScenarioError::Invalid {
                        location: "cost_overrides".into(),
                        message: e.to_string(),
                    }
                })?;
                table.set_cost(&name, *cost);
            }
            if let Some(functions) = &spec.functions {
                let keep: Vec<Name> = functions
                    .iter()
                    .map(|short| Name::parse(&format!("/fn/{short}")))
                    .collect::<Result<_, _>>()
                    .map_err(|e| ScenarioError::Invalid {
                        location: format!("nodes[{i}].functions"),
                        message: e.to_string(),
                    })?;
                table.retain_named(&keep);
            }
            let interest_prefixes = spec
                .interest_prefixes
                .as_ref()
                .map(|ps| ps.iter().map(|p| Name::parse(p).unwrap()).collect());
            let seeks = spec.seeks.iter().map(|s| Name::parse(s).unwrap()).collect();
            let opts = NodeOptions {
                config,
                mode: scenario.mode.store_mode(),
                ttl: scenario.ttl.resolve(),
                economy: econ,
                table,
                interest_prefixes,
                seeks,
                min_accept_price: spec.min_accept_price,
                cost_time_ms: scenario.cost_time_ms,
                verify_timeout: 2 * scenario.latency.max + 10,
                redundant_verification: spec.redundant_verification,
            };
            let node = Node::new(identity, opts);
            ledger.register(node.public().clone(), spec.coins.unwrap_or(econ.initial_balance));
            key_to_index.insert(node.public().clone(), i);
            nodes.push(SimNode {
                id: spec.id.clone(),
                node,
                alive: !joins.contains(spec.id.as_str()),
            });
        }

        let topology = Topology::build(scenario)?;
        let mut sim = Simulation {
            scenario,
            nodes,
            key_to_index,
            topology,
            queue: BinaryHeap::new(),
            next_seq: 0,
            link_rng: ChaCha8Rng::from_seed(derive_seed(scenario.seed, "link")),
            link_fifo: BTreeMap::new(),
            ledger,
            trace: Vec::new(),
            metrics: Metrics::default(),
            converged_candidate: None,
        };
        sim.metrics.duration = scenario.duration;
        for n in &sim.nodes {
            sim.metrics
                .nodes
                .insert(n.id.clone(), NodeMetrics::default());
        }
        sim.seed_events();
        Ok(sim)
    }

    fn push(&mut self, time: u64, event: Event) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Queued { time, seq, event });
    }

    /// Deterministic phase offset per node and timer, spreading periodic
    /// work so ticks do not all collide at the same instant.
    fn phase(&self, node: usize, label: &str, period: u64) -> u64 {
        let bytes = derive_seed(
            self.scenario.seed,
            &format!("phase:{}:{}", self.nodes[node].id, label),
        );
        u64::from_be_bytes(bytes[..8].try_into().unwrap()) % period
    }

    fn schedule_timers_from(&mut self, node: usize, start: u64) {
        let cfg = self.nodes[node].node.config().clone();
        let econ = self.nodes[node].node.options().economy;
        let timers = [
            (TimerKind::Beacon, cfg.beacon_period),
            (TimerKind::TaskScan, cfg.beacon_period),
            (TimerKind::KeepAlive, cfg.keepalive_period),
            (TimerKind::FailureScan, cfg.beacon_period),
            (TimerKind::OfferWindow, econ.offer_window),
            (TimerKind::CacheWindow, econ.cache_window),
        ];
        for (kind, period) in timers {
            if matches!(kind, TimerKind::OfferWindow | TimerKind::CacheWindow)
                && self.scenario.mode != Mode::Economy
            {
                continue;
            }
            let phase = self.phase(node, timer_label(kind), period);
            self.push(start + phase, Event::Timer { node, kind });
        }
    }

    fn seed_events(&mut self) {
        for i in 0..self.nodes.len() {
            if self.nodes[i].alive {
                self.schedule_timers_from(i, 0);
            }
        }
        for (index, c) in self.scenario.churn.iter().enumerate() {
            self.push(c.time, Event::Churn { index });
        }
        for (index, t) in self.scenario.tasks.iter().enumerate() {
            self.push(t.time, Event::Inject { index });
        }
        for (index, r) in self.scenario.raw_appends.iter().enumerate() {
            self.push(r.time, Event::RawAppend { index });
        }
        for (index, v) in self.scenario.verifications.iter().enumerate() {
            self.push(v.time, Event::Verify { index });
        }
        for (index, f) in self.scenario.forgeries.iter().enumerate() {
            self.push(f.time, Event::Forge { index });
        }
        for (index, c) in self.scenario.credits.iter().enumerate() {
            self.push(c.time, Event::Credit { index });
        }
        let mut t = 0;
        while t <= self.scenario.duration {
            self.push(t, Event::Sample);
            t += self.scenario.sample_interval;
        }
    }

    fn run(mut self) -> Result<RunOutput, ScenarioError> {
        while let Some(q) = self.queue.pop() {
            if q.time > self.scenario.duration {
                break;
            }
            self.dispatch(q.time, q.event)?;
        }
        self.metrics.global.converged_at = self.converged_candidate;
        let final_state = self
            .nodes
            .iter()
            .map(|n| NodeSnapshot {
                id: n.id.clone(),
                alive: n.alive,
                pairs: n.node.store().iter().map(|(_, p)| p.clone()).collect(),
                balance: self.ledger.balance(n.node.public()),
            })
            .collect();
        Ok(RunOutput {
            metrics: self.metrics,
            trace: self.trace,
            final_state,
        })
    }

    fn index_of(&self, id: &str) -> usize {
        self.nodes
            .iter()
            .position(|n| n.id == id)
            .expect("scenario validation checked ids")
    }

    fn neighbors(&self, of: usize, now: u64) -> Vec<usize> {
        (0..self.nodes.len())
            .filter(|&j| j != of && self.nodes[j].alive && self.topology.linked(of, j, now))
            .collect()
    }

    fn dispatch(&mut self, now: u64, event: Event) -> Result<(), ScenarioError> {
        match event {
            Event::Timer { node, kind } => {
                if !self.nodes[node].alive {
                    return Ok(());
                }
                let out = match kind {
                    TimerKind::Beacon => self.nodes[node].node.on_beacon_tick(now),
                    TimerKind::TaskScan => self.nodes[node].node.on_task_scan(now),
                    TimerKind::KeepAlive => self.nodes[node].node.on_keepalive_tick(now),
                    TimerKind::FailureScan => self.nodes[node].node.on_failure_scan(now),
                    TimerKind::OfferWindow => self.nodes[node].node.on_offer_window(now),
                    TimerKind::CacheWindow => self.nodes[node].node.on_cache_window(now),
                };
                self.process_output(node, out, now);
                let period = {
                    let cfg = self.nodes[node].node.config();
                    let econ = self.nodes[node].node.options().economy;
                    match kind {
                        TimerKind::Beacon | TimerKind::TaskScan | TimerKind::FailureScan => {
                            cfg.beacon_period
                        }
                        TimerKind::KeepAlive => cfg.keepalive_period,
                        TimerKind::OfferWindow => econ.offer_window,
                        TimerKind::CacheWindow => econ.cache_window,
                    }
                };
                self.push(now + period, Event::Timer { node, kind });
            }
            Event::Deliver { from, to, msg } => {
                if !self.nodes[to].alive {
                    self.metrics.global.lost_messages += 1;
                    return Ok(());
                }
                let bytes = msg.encode().len() as u64;
                let label = msg.type_label().to_string();
                self.record(TraceRecord::MessageRecv {
                    t: now,
                    node: self.nodes[to].id.clone(),
                    from: self.nodes[from].id.clone(),
                    msg: label.clone(),
                    bytes,
                });
                let m = self.metrics.nodes.get_mut(&self.nodes[to].id).unwrap();
                *m.received.entry(label).or_insert(0) += 1;
                m.bytes_received += bytes;
                let out = {
                    let ledger = &mut self.ledger;
                    self.nodes[to].node.handle_message(&msg, now, ledger)
                };
                self.process_output(to, out, now);
            }
            Event::ExecDone { node, name, task } => {
                if !self.nodes[node].alive {
                    return Ok(());
                }
                let out = {
                    let ledger = &mut self.ledger;
                    self.nodes[node].node.on_exec_done(&name, task, now, ledger)
                };
                self.process_output(node, out, now);
            }
            Event::TakeoverFire { node, name, task } => {
                if !self.nodes[node].alive {
                    return Ok(());
                }
                let out = self.nodes[node].node.on_takeover_fire(&name, task, now);
                self.process_output(node, out, now);
            }
            Event::VerifyTimeout { node, name } => {
                if !self.nodes[node].alive {
                    return Ok(());
                }
                let out = self.nodes[node].node.finish_verification(&name, now);
                self.process_output(node, out, now);
            }
            Event::Churn { index } => {
                let c = self.scenario.churn[index].clone();
                let node = self.index_of(&c.node);
                match c.action {
                    ChurnAction::Join => {
                        if !self.nodes[node].alive {
                            self.nodes[node].alive = true;
                            self.schedule_timers_from(node, now);
                        }
                    }
                    ChurnAction::Leave => {
                        if self.nodes[node].alive {
                            let out = self.nodes[node].node.on_graceful_leave(now);
                            self.process_output(node, out, now);
                            self.nodes[node].alive = false;
                        }
                    }
                    ChurnAction::Crash => {
                        self.nodes[node].alive = false;
                    }
                }
            }
            Event::Inject { index } => {
                let t = self.scenario.tasks[index].clone();
                let node = self.index_of(&t.issuer);
                if !self.nodes[node].alive {
                    return Err(ScenarioError::Runtime {
                        time: now,
                        location: format!("tasks[{index}]"),
                        message: format!("issuer {:?} is offline", t.issuer),
                    });
                }
                let name = Name::parse(&t.name).expect("validated");
                let expr = Expression::parse(&t.expr).expect("validated");
                let inputs: BTreeMap<String, Vec<u8>> = t
                    .inputs
                    .iter()
                    .map(|(k, v)| (k.clone(), v.as_bytes().to_vec()))
                    .collect();
                let out = self.nodes[node]
                    .node
                    .inject_task(&name, &expr, &inputs, t.offer, now)
                    .map_err(|e| ScenarioError::Runtime {
                        time: now,
                        location: format!("tasks[{index}]"),
                        message: e.to_string(),
                    })?;
                self.process_output(node, out, now);
            }
            Event::RawAppend { index } => {
                let r = self.scenario.raw_appends[index].clone();
                let node = self.index_of(&r.node);
                if !self.nodes[node].alive {
                    return Ok(());
                }
                let name = Name::parse(&r.name).expect("validated");
                let role = match r.log {
                    LogHalf::Request => LogRole::Request,
                    LogHalf::Result => LogRole::Result,
                };
                let kind = match r.entry {
                    EntrySpec::Request => EntryKind::Request,
                    EntrySpec::Data => EntryKind::Data,
                    EntrySpec::Takeover => EntryKind::TakeOverNote,
                    EntrySpec::Keepalive => EntryKind::KeepAliveBeacon,
                };
                let out = self.nodes[node]
                    .node
                    .raw_append(&name, role, kind, r.payload.clone().into_bytes(), now)
                    .map_err(|e| ScenarioError::Runtime {
                        time: now,
                        location: format!("raw_appends[{index}]"),
                        message: e.to_string(),
                    })?;
                self.process_output(node, out, now);
            }
            Event::Verify { index } => {
                let v = self.scenario.verifications[index].clone();
                let node = self.index_of(&v.node);
                if !self.nodes[node].alive {
                    return Ok(());
                }
                let name = Name::parse(&v.name).expect("validated");
                let peers: Vec<PublicKey> = self
                    .neighbors(node, now)
                    .into_iter()
                    .map(|j| self.nodes[j].node.public().clone())
                    .collect();
                let out = self.nodes[node].node.start_verification(&name, &peers, now);
                self.process_output(node, out, now);
            }
            Event::Forge { index } => {
                let f = self.scenario.forgeries[index].clone();
                let node = self.index_of(&f.node);
                let name = Name::parse(&f.name).expect("validated");
                self.nodes[node]
                    .node
                    .forge_result_tail(&name)
                    .map_err(|e| ScenarioError::Runtime {
                        time: now,
                        location: format!("forgeries[{index}]"),
                        message: e.to_string(),
                    })?;
            }
            Event::Credit { index } => {
                let c = self.scenario.credits[index].clone();
                let node = self.index_of(&c.node);
                let key = self.nodes[node].node.public().clone();
                self.ledger
                    .credit(&key, c.amount)
                    .map_err(|e| ScenarioError::Runtime {
                        time: now,
                        location: format!("credits[{index}]"),
                        message: e.to_string(),
                    })?;
            }
            Event::Sample => self.sample(now),
        }
        Ok(())
    }

    /// Route a handler's messages and fold its events into trace/metrics.
    fn process_output(&mut self, from: usize, out: Output, now: u64) {
        for event in out.events {
            self.absorb_event(from, event, now);
        }
        for (dest, msg) in out.messages {
            match dest {
                None => {
                    for j in self.neighbors(from, now) {
                        self.send(from, j, msg.clone(), now);
                    }
                }
                Some(key) => match self.key_to_index.get(&key).copied() {
                    Some(j) if self.topology.linked(from, j, now) && self.nodes[j].alive => {
                        self.send(from, j, msg.clone(), now);
                    }
                    _ => {
                        self.metrics.global.no_link_drops += 1;
                    }
                },
            }
        }
    }

    /// One hop: trace the send, sample loss and latency, keep the link
    /// FIFO so later messages never overtake earlier ones.
    fn send(&mut self, from: usize, to: usize, msg: Message, now: u64) {
        let bytes = msg.encode().len() as u64;
        let label = msg.type_label().to_string();
        self.record(TraceRecord::MessageSent {
            t: now,
            node: self.nodes[from].id.clone(),
            to: self.nodes[to].id.clone(),
            msg: label.clone(),
            bytes,
        });
        let m = self.metrics.nodes.get_mut(&self.nodes[from].id).unwrap();
        *m.sent.entry(label).or_insert(0) += 1;
        m.bytes_sent += bytes;

        let lost = self.link_rng.random::<f64>() < self.scenario.loss;
        if lost {
            self.metrics.global.lost_messages += 1;
            return;
        }
        let latency = self
            .link_rng
            .random_range(self.scenario.latency.min..=self.scenario.latency.max);
        let fifo = self.link_fifo.entry((from, to)).or_insert(0);
        let at = (now + latency).max(*fifo);
        *fifo = at;
        self.push(at, Event::Deliver { from, to, msg });
    }

    fn record(&mut self, r: TraceRecord) {
        self.trace.push(r);
    }

    fn absorb_event(&mut self, from: usize, event: NodeEvent, now: u64) {
        let node_id = self.nodes[from].id.clone();
        match event {
            NodeEvent::LogAppend { name, role, kind } => {
                self.metrics.global.last_append_at = now;
                self.record(TraceRecord::LogAppend {
                    t: now,
                    node: node_id,
                    name: name.text(),
                    log: role.label().to_string(),
                    entry_kind: kind.label().to_string(),
                });
            }
            NodeEvent::TaskInjected { name, task, expr } => {
                self.metrics.tasks.insert(
                    task.to_hex(),
                    TaskMetrics {
                        name: name.text(),
                        expr,
                        injected_at: now,
                        first_taken_at: None,
                        completed_at: None,
                        replication_timeline: Vec::new(),
                    },
                );
            }
            NodeEvent::TaskTaken {
                name,
                task,
                takers_now,
            } => {
                self.record(TraceRecord::TaskTaken {
                    t: now,
                    node: node_id,
                    name: name.text(),
                    task: task.to_hex(),
                });
                if let Some(tm) = self.metrics.tasks.get_mut(&task.to_hex()) {
                    tm.first_taken_at.get_or_insert(now);
                    tm.replication_timeline.push((now, takers_now));
                }
            }
            NodeEvent::TaskCompleted { name, task } => {
                self.record(TraceRecord::TaskCompleted {
                    t: now,
                    node: node_id,
                    name: name.text(),
                    task: task.to_hex(),
                });
                if let Some(tm) = self.metrics.tasks.get_mut(&task.to_hex()) {
                    tm.completed_at.get_or_insert(now);
                }
            }
            NodeEvent::TaskAbandoned { .. } => {}
            NodeEvent::ExecutionStarted { name, task, done_at } => {
                self.push(
                    done_at,
                    Event::ExecDone {
                        node: from,
                        name,
                        task,
                    },
                );
            }
            NodeEvent::ExecutionFailed { .. } => {}
            NodeEvent::TakeoverScheduled { name, task, fire_at } => {
                self.push(
                    fire_at,
                    Event::TakeoverFire {
                        node: from,
                        name,
                        task,
                    },
                );
            }
            NodeEvent::PairCompleted { .. } => {}
            NodeEvent::Purge { name, what } => {
                match what {
                    PurgeWhat::Pair => self.metrics.global.purged_pairs += 1,
                    PurgeWhat::RequestLog => self.metrics.global.purged_request_logs += 1,
                }
                self.record(TraceRecord::Purge {
                    t: now,
                    node: node_id,
                    name: name.text(),
                    what: match what {
                        PurgeWhat::Pair => "pair".to_string(),
                        PurgeWhat::RequestLog => "request-log".to_string(),
                    },
                });
            }
            NodeEvent::Payment {
                from: payer,
                to,
                amount,
                reason,
            } => {
                let payer_id = self
                    .key_to_index
                    .get(&payer)
                    .map(|i| self.nodes[*i].id.clone())
                    .unwrap_or_default();
                let to_id = self
                    .key_to_index
                    .get(&to)
                    .map(|i| self.nodes[*i].id.clone())
                    .unwrap_or_default();
                self.record(TraceRecord::Payment {
                    t: now,
                    node: payer_id,
                    to: to_id,
                    amount,
                    reason: match reason {
                        PaymentReason::Task => "task".to_string(),
                        PaymentReason::Cache => "cache".to_string(),
                    },
                });
            }
            NodeEvent::PaymentDeferred { .. } => {
                self.metrics.global.payments_deferred += 1;
            }
            NodeEvent::ComputeLocally {
                local_cost,
                network_price,
                ..
            } => {
                self.metrics.global.local_computations += 1;
                self.metrics.global.local_decisions.push(LocalDecision {
                    t: now,
                    node: node_id,
                    network_price,
                    local_cost,
                });
            }
            NodeEvent::OfferAdjusted { price, cap, .. } => {
                if let Some(cap) = cap {
                    if price > cap {
                        self.metrics.global.offers_over_cap += 1;
                    }
                }
            }
            NodeEvent::InvalidBeacon => {
                self.metrics.global.invalid_beacons += 1;
            }
            NodeEvent::UpdateRejected { .. } | NodeEvent::UnknownNameRequested { .. } => {
                self.metrics.global.rejected_updates += 1;
            }
            NodeEvent::CacheSaleRefused { .. } => {}
            NodeEvent::VerificationStarted { name, deadline } => {
                self.push(deadline, Event::VerifyTimeout { node: from, name });
            }
            NodeEvent::Verdict { name, verdict } => {
                match verdict {
                    VerificationVerdict::Confirmed => self.metrics.global.confirmed_verdicts += 1,
                    VerificationVerdict::Suspect => self.metrics.global.suspect_verdicts += 1,
                }
                self.record(TraceRecord::Verdict {
                    t: now,
                    node: node_id,
                    name: name.text(),
                    verdict: match verdict {
                        VerificationVerdict::Confirmed => "confirmed".to_string(),
                        VerificationVerdict::Suspect => "suspect".to_string(),
                    },
                });
            }
            NodeEvent::NoPeers { .. } => {}
        }
    }

    /// Periodic sampling: balances, coin totals, and the convergence
    /// check (all live replicas of every pair entry-identical).
    fn sample(&mut self, now: u64) {
        let mut total = 0u64;
        for n in &self.nodes {
            let balance = self.ledger.balance(n.node.public());
            total += balance;
            self.metrics
                .nodes
                .get_mut(&n.id)
                .unwrap()
                .balance_timeline
                .push((now, balance));
        }
        self.metrics.global.total_coins_samples.push((now, total));

        let converged = self.replicas_identical();
        if converged && now >= self.metrics.global.last_append_at {
            // A candidate stays valid only while no append postdates it.
            match self.converged_candidate {
                Some(c) if c >= self.metrics.global.last_append_at => {}
                _ => self.converged_candidate = Some(now),
            }
        } else {
            self.converged_candidate = None;
        }
    }

    /// Result logs must match on every holder; request logs on every
    /// holder that still has one (purging is a local decision).
    fn replicas_identical(&self) -> bool {
        let mut names: BTreeSet<Name> = BTreeSet::new();
        for n in &self.nodes {
            if n.alive {
                names.extend(n.node.store().names().cloned());
            }
        }
        for name in names {
            let mut result_shape: Option<(Digest, usize)> = None;
            let mut request_shape: Option<(Digest, usize)> = None;
            for n in &self.nodes {
                if !n.alive {
                    continue;
                }
                let Ok(pair) = n.node.store().get_pair(&name) else {
                    continue;
                };
                let r = (pair.result_log().tail_digest(), pair.result_log().len());
                match &result_shape {
                    None => result_shape = Some(r),
                    Some(prev) if *prev != r => return false,
                    Some(_) => {}
                }
                if let Some(req) = pair.request_log() {
                    let q = (req.tail_digest(), req.len());
                    match &request_shape {
                        None => request_shape = Some(q),
                        Some(prev) if *prev != q => return false,
                        Some(_) => {}
                    }
                }
            }
        }
        true
    }
}

fn timer_label(kind: TimerKind) -> &'static str {
    match kind {
        TimerKind::Beacon => "beacon",
        TimerKind::TaskScan => "scan",
        TimerKind::KeepAlive => "keepalive",
        TimerKind::FailureScan => "failure",
        TimerKind::OfferWindow => "offer",
        TimerKind::CacheWindow => "cache",
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scenario(text: &str) -> Scenario {
        Scenario::from_json(text).unwrap()
    }

    #[test]
    fn single_node_fetch_completes_without_messages() {
        let s = scenario(
            r#"{
                "duration": 5000,
                "crypto": "mock",
                "nodes": [{"id": "a"}],
                "connectivity": {"model": "full_mesh"},
                "tasks": [{
                    "time": 0, "issuer": "a", "name": "/s/fetch",
                    "expr": "/data/x", "inputs": {"/data/x": "value"}
                }]
            }"#,
        );
        let out = run(&s).unwrap();
        let task = out.metrics.tasks.values().next().unwrap();
        // Completed at the first task scan tick (within one beacon
        // period of injection).
        let completed = task.completed_at.expect("fetch task completes");
        assert!(completed < 1_000, "completed at {completed}");
        assert!(!out
            .trace
            .iter()
            .any(|r| matches!(r, TraceRecord::MessageSent { .. })));
    }

    #[test]
    fn triangle_compute_takes_exactly_replication_target_notes() {
        let s = scenario(
            r#"{
                "duration": 20000,
                "seed": 42,
                "crypto": "mock",
                "cost_overrides": {"sleep_k": 40},
                "nodes": [{"id": "a"}, {"id": "b"}, {"id": "c"}],
                "connectivity": {"model": "full_mesh"},
                "tasks": [{
                    "time": 100, "issuer": "a", "name": "/s/job",
                    "expr": "/fn/sleep_k(/data/word)",
                    "inputs": {"/data/word": "swarm"}
                }]
            }"#,
        );
        let out = run(&s).unwrap();
        let notes = out
            .trace
            .iter()
            .filter(|r| matches!(r, TraceRecord::LogAppend { entry_kind, .. } if entry_kind == "takeover"))
            .count();
        assert_eq!(notes, 2);
        let task = out.metrics.tasks.values().next().unwrap();
        assert!(task.completed_at.is_some());
    }

    #[test]
    fn identical_seeds_give_identical_traces() {
        let text = r#"{
            "duration": 15000,
            "seed": 7,
            "crypto": "mock",
            "nodes": [{"id": "a"}, {"id": "b"}, {"id": "c"}],
            "connectivity": {"model": "full_mesh"},
            "loss": 0.1,
            "tasks": [{
                "time": 100, "issuer": "a", "name": "/s/job",
                "expr": "/fn/sum(/data/x,/data/y)",
                "inputs": {"/data/x": "20", "/data/y": "22"}
            }]
        }"#;
        let s = scenario(text);
        let a = run(&s).unwrap().to_jsonl();
        let b = run(&s).unwrap().to_jsonl();
        assert_eq!(a, b);

        let mut s2 = scenario(text);
        s2.seed = 8;
        let c = run(&s2).unwrap().to_jsonl();
        assert_ne!(a, c);
    }

    #[test]
    fn connectivity_models() {
        // Static triangle: constant.
        let s = scenario(
            r#"{
                "duration": 1000,
                "nodes": [{"id": "a"}, {"id": "b"}, {"id": "c"}],
                "connectivity": {"model": "static", "edges": [["a","b"],["b","c"],["a","c"]]}
            }"#,
        );
        for t in [0, 500, 1000] {
            let adj = connectivity_at(&s, t).unwrap();
            assert_eq!(adj["a"].len(), 2);
        }

        // Scripted cut: present just before, absent at the event time.
        let s = scenario(
            r#"{
                "duration": 1000,
                "nodes": [{"id": "a"}, {"id": "b"}],
                "connectivity": {
                    "model": "scripted",
                    "initial": [["a","b"]],
                    "events": [{"time": 50, "action": "remove", "a": "a", "b": "b"}]
                }
            }"#,
        );
        assert!(connectivity_at(&s, 49).unwrap()["a"].contains("b"));
        assert!(!connectivity_at(&s, 50).unwrap()["a"].contains("b"));

        // Waypoint: far apart means no link.
        let s = scenario(
            r#"{
                "duration": 60000,
                "nodes": [{"id": "a"}, {"id": "b"}],
                "connectivity": {
                    "model": "waypoint",
                    "width": 10000.0, "height": 10000.0, "range": 0.001,
                    "speed_min": 1.0, "speed_max": 2.0
                }
            }"#,
        );
        let adj = connectivity_at(&s, 0).unwrap();
        assert!(adj["a"].is_empty());
    }

    #[test]
    fn total_loss_blocks_replication() {
        let s = scenario(
            r#"{
                "duration": 10000,
                "crypto": "mock",
                "nodes": [{"id": "a"}, {"id": "b"}],
                "connectivity": {"model": "full_mesh"},
                "loss": 1.0,
                "tasks": [{
                    "time": 0, "issuer": "a", "name": "/s/job",
                    "expr": "/fn/upper(/data/w)", "inputs": {"/data/w": "x"}
                }]
            }"#,
        );
        let out = run(&s).unwrap();
        assert!(out.metrics.global.lost_messages > 0);
        // Nothing ever reached node b.
        assert_eq!(out.metrics.nodes["b"].bytes_received, 0);
    }

    #[test]
    fn loss_drops_are_reproducible() {
        let text = r#"{
            "duration": 10000,
            "seed": 3,
            "crypto": "mock",
            "nodes": [{"id": "a"}, {"id": "b"}, {"id": "c"}],
            "connectivity": {"model": "full_mesh"},
            "loss": 0.2,
            "tasks": [{
                "time": 0, "issuer": "a", "name": "/s/job",
                "expr": "/fn/upper(/data/w)", "inputs": {"/data/w": "x"}
            }]
        }"#;
        let s = scenario(text);
        let a = run(&s).unwrap();
        let b = run(&s).unwrap();
        assert_eq!(
            a.metrics.global.lost_messages,
            b.metrics.global.lost_messages
        );
        assert!(a.metrics.global.lost_messages > 0);
    }
}
