//! Swarm computation over replicated, signed append-only logs.
//!
//! Nodes discover each other with periodic beacons, replicate per-swarm
//! log pairs (a request log and a result log), pick tasks at random with
//! take-over notes, detect failed workers through keep-alive entries, and
//! optionally trade results in a coin economy. A deterministic discrete
//! event simulator drives the whole protocol at desk scale.

pub mod crypto;
pub mod economy;
pub mod executor;
pub mod log;
pub mod logstore;
pub mod message;
pub mod naming;
pub mod scenario;
pub mod sim;
pub mod swarm;
pub mod trace;

pub use crypto::{Digest, KeyPair, PublicKey, Signature};
pub use economy::{BuyDecision, CoinLedger, EconomyParams, Offer};
pub use executor::{DataObject, FunctionTable, Resolver};
pub use log::{EntryKind, Log, LogEntry, LogRole, Validity, ValidityReport};
pub use logstore::{LogPair, LogStore, PairStatus, TtlConfig};
pub use naming::{Expression, Name, TaskTree};
pub use scenario::Scenario;
pub use sim::{run, NodeSnapshot, RunOutput};
pub use swarm::{Node, ProtocolConfig};
pub use trace::{Metrics, TraceRecord};
