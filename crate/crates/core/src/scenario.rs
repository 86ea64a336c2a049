//! Scenario files: the declarative description of a simulation run.
//!
//! Scenarios are JSON (the same notation the trace uses). Only
//! `duration`, `nodes` and `connectivity` are required; everything else
//! has defaults, all of which are listed in `docs/scenario.md`.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::economy::EconomyParams;
use crate::logstore::TtlConfig;
use crate::naming::{Expression, Name};
use crate::swarm::{ProtocolConfig, StoreMode};

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("scenario parse error: {0}")]
    Parse(#[from] serde_json::Error),
    #[error("invalid scenario ({location}): {message}")]
    Invalid { location: String, message: String },
    #[error("runtime scenario error at t={time} ({location}): {message}")]
    Runtime {
        time: u64,
        location: String,
        message: String,
    },
}

fn invalid(location: impl Into<String>, message: impl Into<String>) -> ScenarioError {
    ScenarioError::Invalid {
        location: location.into(),
        message: message.into(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Mode {
    #[default]
    Ttl,
    Economy,
}

impl Mode {
    pub fn store_mode(self) -> StoreMode {
        match self {
            Mode::Ttl => StoreMode::Ttl,
            Mode::Economy => StoreMode::Economy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CryptoScheme {
    #[default]
    Ed25519,
    Mock,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Latency {
    pub min: u64,
    pub max: u64,
}

impl Default for Latency {
    fn default() -> Latency {
        Latency { min: 5, max: 20 }
    }
}

/// Optional overrides on top of [`ProtocolConfig`] defaults.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProtocolOverrides {
    pub beacon_period: Option<u64>,
    pub max_names: Option<usize>,
    pub replication_target: Option<u32>,
    pub keepalive_period: Option<u64>,
    pub keepalive_miss_threshold: Option<u32>,
    pub takeover_delay_max: Option<u64>,
}

impl ProtocolOverrides {
    pub fn apply(&self, base: &mut ProtocolConfig) {
        if let Some(v) = self.beacon_period {
            base.beacon_period = v;
        }
        if let Some(v) = self.max_names {
            base.max_names = v;
        }
        if let Some(v) = self.replication_target {
            base.replication_target = v;
        }
        if let Some(v) = self.keepalive_period {
            base.keepalive_period = v;
        }
        if let Some(v) = self.keepalive_miss_threshold {
            base.keepalive_miss_threshold = v;
        }
        if let Some(v) = self.takeover_delay_max {
            base.takeover_delay_max = v;
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TtlOverrides {
    pub initial: Option<u64>,
    pub max: Option<u64>,
}

impl TtlOverrides {
    pub fn resolve(&self) -> TtlConfig {
        let mut ttl = TtlConfig::default();
        if let Some(v) = self.initial {
            ttl.initial = v;
        }
        if let Some(v) = self.max {
            ttl.max = v;
        }
        ttl
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EconomyOverrides {
    pub initial_balance: Option<u64>,
    pub up_factor: Option<f64>,
    pub down_factor: Option<f64>,
    pub cache_down_factor: Option<f64>,
    pub cache_fraction: Option<f64>,
    pub prune_threshold: Option<u64>,
    pub offer_window: Option<u64>,
    pub cache_window: Option<u64>,
}

impl EconomyOverrides {
    pub fn resolve(&self) -> EconomyParams {
        let mut p = EconomyParams::default();
        if let Some(v) = self.initial_balance {
            p.initial_balance = v;
        }
        if let Some(v) = self.up_factor {
            p.up_factor = v;
        }
        if let Some(v) = self.down_factor {
            p.down_factor = v;
        }
        if let Some(v) = self.cache_down_factor {
            p.cache_down_factor = v;
        }
        if let Some(v) = self.cache_fraction {
            p.cache_fraction = v;
        }
        if let Some(v) = self.prune_threshold {
            p.prune_threshold = v;
        }
        if let Some(v) = self.offer_window {
            p.offer_window = v;
        }
        if let Some(v) = self.cache_window {
            p.cache_window = v;
        }
        p
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeSpec {
    pub id: String,
    /// Starting balance; defaults to the economy initial balance.
    pub coins: Option<u64>,
    /// Subset of the demo function table (short names like "concat");
    /// absent means the full table.
    pub functions: Option<Vec<String>>,
    pub protocol: Option<ProtocolOverrides>,
    pub interest_prefixes: Option<Vec<String>>,
    #[serde(default)]
    pub seeks: Vec<String>,
    #[serde(default = "default_min_accept")]
    pub min_accept_price: u64,
    /// Per-node RNG seed; derived from the master seed when absent.
    pub seed: Option<u64>,
    #[serde(default)]
    pub redundant_verification: bool,
}

fn default_min_accept() -> u64 {
    1
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ContactAction {
    Add,
    Remove,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ContactEvent {
    pub time: u64,
    pub action: ContactAction,
    pub a: String,
    pub b: String,
}

/// Who can talk to whom, over time.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "model", rename_all = "snake_case", deny_unknown_fields)]
pub enum Connectivity {
    /// Every pair of live nodes is linked.
    FullMesh,
    /// A fixed undirected edge list.
    Static { edges: Vec<[String; 2]> },
    /// A fixed starting edge list plus timed add/remove events.
    Scripted {
        #[serde(default)]
        initial: Vec<[String; 2]>,
        events: Vec<ContactEvent>,
    },
    /// Random-waypoint movement on a rectangle; nodes within `range`
    /// units of each other are linked. Speeds are units per second.
    Waypoint {
        width: f64,
        height: f64,
        range: f64,
        speed_min: f64,
        speed_max: f64,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ChurnAction {
    Join,
    Leave,
    Crash,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChurnEvent {
    pub time: u64,
    pub node: String,
    pub action: ChurnAction,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaskInjection {
    pub time: u64,
    pub issuer: String,
    /// The log-pair name the new swarm forms under.
    pub name: String,
    /// Expression text, e.g. `/fn/sum(/data/a,/data/b)`.
    pub expr: String,
    /// Input data objects written into the request log (UTF-8 values).
    #[serde(default)]
    pub inputs: BTreeMap<String, String>,
    /// Coins offered per task (economy mode).
    pub offer: Option<u64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogHalf {
    #[default]
    Request,
    Result,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EntrySpec {
    #[default]
    Request,
    Data,
    Takeover,
    Keepalive,
}

/// A scripted raw append (sync workloads without the task machinery).
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RawAppend {
    pub time: u64,
    pub node: String,
    pub name: String,
    #[serde(default)]
    pub log: LogHalf,
    #[serde(default)]
    pub entry: EntrySpec,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VerificationEvent {
    pub time: u64,
    pub node: String,
    pub name: String,
}

/// Corrupt the node's stored result-log tail without re-signing.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForgeryEvent {
    pub time: u64,
    pub node: String,
    pub name: String,
}

/// External coin market purchase: credit a balance out of thin air.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreditEvent {
    pub time: u64,
    pub node: String,
    pub amount: u64,
}

fn default_cost_time() -> u64 {
    100
}

fn default_sample_interval() -> u64 {
    1_000
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub seed: u64,
    /// Simulated run length, milliseconds.
    pub duration: u64,
    #[serde(default)]
    pub mode: Mode,
    pub nodes: Vec<NodeSpec>,
    pub connectivity: Connectivity,
    #[serde(default)]
    pub latency: Latency,
    #[serde(default)]
    pub loss: f64,
    #[serde(default)]
    pub crypto: CryptoScheme,
    #[serde(default)]
    pub protocol: ProtocolOverrides,
    #[serde(default)]
    pub ttl: TtlOverrides,
    #[serde(default)]
    pub economy: EconomyOverrides,
    /// Milliseconds of execution time per cost unit.
    #[serde(default = "default_cost_time")]
    pub cost_time_ms: u64,
    /// Per-function cost overrides, by short name.
    #[serde(default)]
    pub cost_overrides: BTreeMap<String, u64>,
    #[serde(default = "default_sample_interval")]
    pub sample_interval: u64,
    #[serde(default)]
    pub tasks: Vec<TaskInjection>,
    #[serde(default)]
    pub churn: Vec<ChurnEvent>,
    #[serde(default)]
    pub raw_appends: Vec<RawAppend>,
    #[serde(default)]
    pub verifications: Vec<VerificationEvent>,
    #[serde(default)]
    pub forgeries: Vec<ForgeryEvent>,
    #[serde(default)]
    pub credits: Vec<CreditEvent>,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, ScenarioError> {
        let s: Scenario = serde_json::from_str(text)?;
        s.validate()?;
        Ok(s)
    }

    /// The protocol configuration for one node: global defaults, then
    /// scenario overrides, then per-node overrides.
    pub fn protocol_for(&self, spec: &NodeSpec) -> ProtocolConfig {
        let mut cfg = ProtocolConfig::default();
        self.protocol.apply(&mut cfg);
        if let Some(overrides) = &spec.protocol {
            overrides.apply(&mut cfg);
        }
        cfg
    }

    pub fn validate(&self) -> Result<(), ScenarioError> {
        if self.duration == 0 {
            return Err(invalid("duration", "must be positive"));
        }
        if self.nodes.is_empty() {
            return Err(invalid("nodes", "at least one node is required"));
        }
        let mut ids = BTreeSet::new();
        for n in &self.nodes {
            if !ids.insert(n.id.clone()) {
                return Err(invalid("nodes", format!("duplicate node id {:?}", n.id)));
            }
        }
        let known = |id: &str| ids.contains(id);
        let check_id = |location: &str, id: &str| -> Result<(), ScenarioError> {
            if known(id) {
                Ok(())
            } else {
                Err(invalid(location, format!("unknown node id {id:?}")))
            }
        };

        if !(0.0..=1.0).contains(&self.loss) {
            return Err(invalid("loss", "must be within [0, 1]"));
        }
        if self.latency.min > self.latency.max {
            return Err(invalid("latency", "min must not exceed max"));
        }

        match &self.connectivity {
            Connectivity::FullMesh => {}
            Connectivity::Static { edges } => {
                for [a, b] in edges {
                    check_id("connectivity.edges", a)?;
                    check_id("connectivity.edges", b)?;
                }
            }
            Connectivity::Scripted { initial, events } => {
                for [a, b] in initial {
                    check_id("connectivity.initial", a)?;
                    check_id("connectivity.initial", b)?;
                }
                for e in events {
                    check_id("connectivity.events", &e.a)?;
                    check_id("connectivity.events", &e.b)?;
                }
            }
            Connectivity::Waypoint {
                width,
                height,
                range,
                speed_min,
                speed_max,
            } => {
                if *width <= 0.0 || *height <= 0.0 || *range <= 0.0 {
                    return Err(invalid("connectivity", "dimensions must be positive"));
                }
                if *speed_min <= 0.0 || speed_min > speed_max {
                    return Err(invalid("connectivity", "need 0 < speed_min <= speed_max"));
                }
            }
        }

        for (i, spec) in self.nodes.iter().enumerate() {
            let loc = format!("nodes[{i}]");
            let cfg = self.protocol_for(spec);
            cfg.validate()
                .map_err(|e| invalid(&loc, e.to_string()))?;
            if let Some(prefixes) = &spec.interest_prefixes {
                for p in prefixes {
                    Name::parse(p).map_err(|e| invalid(&loc, format!("prefix {p:?}: {e}")))?;
                }
            }
            for s in &spec.seeks {
                Name::parse(s).map_err(|e| invalid(&loc, format!("seek {s:?}: {e}")))?;
            }
        }

        for (i, t) in self.tasks.iter().enumerate() {
            let loc = format!("tasks[{i}]");
            check_id(&loc, &t.issuer)?;
            Name::parse(&t.name).map_err(|e| invalid(&loc, format!("name: {e}")))?;
            Expression::parse(&t.expr).map_err(|e| invalid(&loc, format!("expr: {e}")))?;
            for key in t.inputs.keys() {
                Name::parse(key).map_err(|e| invalid(&loc, format!("input {key:?}: {e}")))?;
            }
        }
        for (i, c) in self.churn.iter().enumerate() {
            check_id(&format!("churn[{i}]"), &c.node)?;
        }
        for (i, r) in self.raw_appends.iter().enumerate() {
            let loc = format!("raw_appends[{i}]");
            check_id(&loc, &r.node)?;
            Name::parse(&r.name).map_err(|e| invalid(&loc, format!("name: {e}")))?;
        }
        for (i, v) in self.verifications.iter().enumerate() {
            let loc = format!("verifications[{i}]");
            check_id(&loc, &v.node)?;
            Name::parse(&v.name).map_err(|e| invalid(&loc, format!("name: {e}")))?;
        }
        for (i, f) in self.forgeries.iter().enumerate() {
            let loc = format!("forgeries[{i}]");
            check_id(&loc, &f.node)?;
            Name::parse(&f.name).map_err(|e| invalid(&loc, format!("name: {e}")))?;
        }
        for (i, c) in self.credits.iter().enumerate() {
            check_id(&format!("credits[{i}]"), &c.node)?;
        }

        let econ = self.economy.resolve();
        if econ.up_factor <= 1.0 {
            return Err(invalid("economy.up_factor", "must exceed 1"));
        }
        if !(0.0..=1.0).contains(&econ.down_factor) || econ.down_factor == 0.0 {
            return Err(invalid("economy.down_factor", "must be within (0, 1]"));
        }
        if !(0.0..1.0).contains(&econ.cache_down_factor) || econ.cache_down_factor == 0.0 {
            return Err(invalid("economy.cache_down_factor", "must be within (0, 1)"));
        }
        if !(0.0..=1.0).contains(&econ.cache_fraction) || econ.cache_fraction == 0.0 {
            return Err(invalid("economy.cache_fraction", "must be within (0, 1]"));
        }
        if econ.offer_window == 0 || econ.cache_window == 0 {
            return Err(invalid("economy", "windows must be positive"));
        }
        if self.sample_interval == 0 {
            return Err(invalid("sample_interval", "must be positive"));
        }

        let ttl = self.ttl.resolve();
        if ttl.initial == 0 || ttl.max < ttl.initial {
            return Err(invalid("ttl", "need 0 < initial <= max"));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn minimal() -> String {
        r#"{
            "duration": 10000,
            "nodes": [{"id": "a"}, {"id": "b"}],
            "connectivity": {"model": "full_mesh"}
        }"#
        .to_string()
    }

    #[test]
    fn minimal_scenario_parses_with_defaults() {
        let s = Scenario::from_json(&minimal()).unwrap();
        assert_eq!(s.seed, 0);
        assert_eq!(s.mode, Mode::Ttl);
        assert_eq!(s.latency, Latency { min: 5, max: 20 });
        assert_eq!(s.loss, 0.0);
        assert_eq!(s.cost_time_ms, 100);
        let cfg = s.protocol_for(&s.nodes[0]);
        assert_eq!(cfg, ProtocolConfig::default());
    }

    #[test]
    fn unknown_fields_rejected() {
        let text = minimal().replace("\"duration\"", "\"duratoin\"");
        assert!(Scenario::from_json(&text).is_err());
    }

    #[test]
    fn unknown_node_reference_rejected() {
        let text = r#"{
            "duration": 1000,
            "nodes": [{"id": "a"}],
            "connectivity": {"model": "static", "edges": [["a", "ghost"]]}
        }"#;
        let err = Scenario::from_json(text).unwrap_err();
        assert!(err.to_string().contains("ghost"));
    }

    #[test]
    fn bad_expression_rejected() {
        let text = r#"{
            "duration": 1000,
            "nodes": [{"id": "a"}],
            "connectivity": {"model": "full_mesh"},
            "tasks": [{"time": 1, "issuer": "a", "name": "/s/x", "expr": "/fn/f(/a,"}]
        }"#;
        let err = Scenario::from_json(text).unwrap_err();
        assert!(err.to_string().contains("expr"));
    }

    #[test]
    fn per_node_protocol_overrides_win() {
        let text = r#"{
            "duration": 1000,
            "nodes": [{"id": "a", "protocol": {"beacon_period": 250}}, {"id": "b"}],
            "connectivity": {"model": "full_mesh"},
            "protocol": {"beacon_period": 500, "replication_target": 3}
        }"#;
        let s = Scenario::from_json(text).unwrap();
        let a = s.protocol_for(&s.nodes[0]);
        let b = s.protocol_for(&s.nodes[1]);
        assert_eq!(a.beacon_period, 250);
        assert_eq!(b.beacon_period, 500);
        assert_eq!(a.replication_target, 3);
    }
}
