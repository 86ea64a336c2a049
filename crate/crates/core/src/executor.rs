//! Expression evaluation against data resolved from the swarm's logs.
//!
//! Functions are identified by name in a local table; inputs come from
//! `Data` entries in the request log and sub-results from the result
//! log. Evaluation is post-order and reuses sub-results that other nodes
//! already published instead of recomputing them.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::log::{decode_keyed, EntryKind};
use crate::logstore::LogPair;
use crate::naming::{Expression, Name};

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum ExecError {
    #[error("no data object for {0}")]
    UnresolvedInput(String),
    #[error("unknown function {0}")]
    UnknownFunction(Name),
    #[error("bad input for {function}: {message}")]
    BadInput { function: Name, message: String },
}

/// A named piece of data: an input object or a (sub-)result.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataObject {
    /// Canonical text of the name or expression this object answers.
    pub key: String,
    pub bytes: Vec<u8>,
}

type NamedFn = fn(&[DataObject]) -> Result<Vec<u8>, String>;

#[derive(Clone, Copy)]
struct FunctionEntry {
    func: NamedFn,
    cost: u64,
}

/// Mapping from function names to deterministic implementations plus
/// abstract cost units (mapped 1:1 to coins by the economy).
#[derive(Default, Clone)]
pub struct FunctionTable {
    entries: BTreeMap<Name, FunctionEntry>,
}

impl FunctionTable {
    pub fn new() -> FunctionTable {
        FunctionTable::default()
    }

    pub fn register(&mut self, name: Name, cost: u64, func: NamedFn) {
        self.entries.insert(name, FunctionEntry { func, cost });
    }

    pub fn contains(&self, name: &Name) -> bool {
        self.entries.contains_key(name)
    }

    pub fn cost(&self, name: &Name) -> Option<u64> {
        self.entries.get(name).map(|e| e.cost)
    }

    pub fn set_cost(&mut self, name: &Name, cost: u64) {
        if let Some(e) = self.entries.get_mut(name) {
            e.cost = cost;
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &Name> {
        self.entries.keys()
    }

    /// Keep only the listed functions (a node that can do less).
    pub fn retain_named(&mut self, keep: &[Name]) {
        self.entries.retain(|n, _| keep.contains(n));
    }

    /// The table used by tests and scenarios: string helpers and decimal
    /// arithmetic over UTF-8 payloads, plus a deliberately expensive
    /// no-op for exercising the cost model.
    pub fn demo() -> FunctionTable {
        let mut t = FunctionTable::new();
        let n = |s: &str| Name::parse(s).unwrap();
        t.register(n("/fn/concat"), 1, fn_concat);
        t.register(n("/fn/sum"), 2, fn_sum);
        t.register(n("/fn/upper"), 1, fn_upper);
        t.register(n("/fn/wordcount"), 2, fn_wordcount);
        t.register(n("/fn/sleep_k"), 10, fn_sleep_k);
        t
    }
}

impl std::fmt::Debug for FunctionTable {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("FunctionTable")
            .field("functions", &self.entries.keys().collect::<Vec<_>>())
            .finish()
    }
}

fn fn_concat(args: &[DataObject]) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    for a in args {
        out.extend_from_slice(&a.bytes);
    }
    Ok(out)
}

fn fn_sum(args: &[DataObject]) -> Result<Vec<u8>, String> {
    let mut total: i64 = 0;
    for a in args {
        let text = std::str::from_utf8(&a.bytes).map_err(|_| "not utf-8".to_string())?;
        let value: i64 = text
            .trim()
            .parse()
            .map_err(|_| format!("{:?} is not a decimal integer", text))?;
        total += value;
    }
    Ok(total.to_string().into_bytes())
}

fn fn_upper(args: &[DataObject]) -> Result<Vec<u8>, String> {
    let mut out = Vec::new();
    for a in args {
        out.extend(a.bytes.iter().map(u8::to_ascii_uppercase));
    }
    Ok(out)
}

fn fn_wordcount(args: &[DataObject]) -> Result<Vec<u8>, String> {
    let mut count = 0usize;
    for a in args {
        let text = std::str::from_utf8(&a.bytes).map_err(|_| "not utf-8".to_string())?;
        count += text.split_whitespace().count();
    }
    Ok(count.to_string().into_bytes())
}

/// Identity on its first argument; exists to model a slow computation.
fn fn_sleep_k(args: &[DataObject]) -> Result<Vec<u8>, String> {
    Ok(args.first().map(|a| a.bytes.clone()).unwrap_or_default())
}

/// Anything data objects can be looked up in by canonical text.
pub trait Resolver {
    fn resolve(&self, key: &str) -> Option<DataObject>;
}

/// Resolution order over a log pair: result-log data first (sub-results
/// and cached results), then request-log data (inputs). The first match
/// in canonical log order wins, so replicas resolve identically.
impl Resolver for LogPair {
    fn resolve(&self, key: &str) -> Option<DataObject> {
        let find = |log: &crate::log::Log| {
            log.entries()
                .iter()
                .filter(|e| e.kind() == EntryKind::Data)
                .filter_map(|e| decode_keyed(e.payload()))
                .find(|(k, _)| *k == key)
                .map(|(k, v)| DataObject {
                    key: k.to_string(),
                    bytes: v.to_vec(),
                })
        };
        find(self.result_log()).or_else(|| self.request_log().and_then(find))
    }
}

impl Resolver for BTreeMap<String, Vec<u8>> {
    fn resolve(&self, key: &str) -> Option<DataObject> {
        self.get(key).map(|bytes| DataObject {
            key: key.to_string(),
            bytes: bytes.clone(),
        })
    }
}

/// Evaluate an expression: resolve data references, reuse published
/// sub-results, and apply table functions post-order.
pub fn evaluate<R: Resolver>(
    table: &FunctionTable,
    resolver: &R,
    expr: &Expression,
) -> Result<Vec<u8>, ExecError> {
    if let Some(found) = resolver.resolve(&expr.text()) {
        return Ok(found.bytes);
    }
    match expr {
        Expression::DataRef(name) => Err(ExecError::UnresolvedInput(name.text())),
        Expression::Call {
            function,
            arguments,
        } => {
            let entry = table
                .entries
                .get(function)
                .ok_or_else(|| ExecError::UnknownFunction(function.clone()))?;
            let mut inputs = Vec::with_capacity(arguments.len());
            for arg in arguments {
                inputs.push(DataObject {
                    key: arg.text(),
                    bytes: evaluate(table, resolver, arg)?,
                });
            }
            (entry.func)(&inputs).map_err(|message| ExecError::BadInput {
                function: function.clone(),
                message,
            })
        }
    }
}

/// Sum of the per-function cost units over every call node; a bare data
/// reference costs nothing.
pub fn cost_of(table: &FunctionTable, expr: &Expression) -> Result<u64, ExecError> {
    match expr {
        Expression::DataRef(_) => Ok(0),
        Expression::Call {
            function,
            arguments,
        } => {
            let own = table
                .cost(function)
                .ok_or_else(|| ExecError::UnknownFunction(function.clone()))?;
            let mut total = own;
            for a in arguments {
                total += cost_of(table, a)?;
            }
            Ok(total)
        }
    }
}

/// Whether `evaluate` would succeed right now: every function known and
/// every leaf either resolvable or coverable by an already-published
/// sub-result.
pub fn computable<R: Resolver>(table: &FunctionTable, resolver: &R, expr: &Expression) -> bool {
    if resolver.resolve(&expr.text()).is_some() {
        return true;
    }
    match expr {
        Expression::DataRef(_) => false,
        Expression::Call {
            function,
            arguments,
        } => {
            table.contains(function) && arguments.iter().all(|a| computable(table, resolver, a))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{derive_seed, KeyPair};
    use crate::log::{encode_keyed, Log, LogRole};
    use proptest::prelude::*;

    fn key() -> KeyPair {
        KeyPair::mock_from_seed(&derive_seed(1, "exec-test"))
    }

    fn name(t: &str) -> Name {
        Name::parse(t).unwrap()
    }

    fn expr(t: &str) -> Expression {
        Expression::parse(t).unwrap()
    }

    fn pair_with(inputs: &[(&str, &[u8])], results: &[(&str, &[u8])]) -> LogPair {
        let k = key();
        let nm = name("/swarm/test");
        let mut req = Log::create(
            nm.child("req").unwrap(),
            LogRole::Request,
            &k,
            encode_keyed("/fn/none()", &[]),
            0,
        );
        let mut res = Log::create(nm.child("res").unwrap(), LogRole::Result, &k, Vec::new(), 0);
        let mut t = 1;
        for (key_text, bytes) in inputs {
            req.append(EntryKind::Data, encode_keyed(key_text, bytes), &k, t)
                .unwrap();
            t += 1;
        }
        for (key_text, bytes) in results {
            res.append(EntryKind::Data, encode_keyed(key_text, bytes), &k, t)
                .unwrap();
            t += 1;
        }
        LogPair::new(nm, req, res, 0, 60_000)
    }

    #[test]
    fn resolve_input_from_request_log() {
        let pair = pair_with(&[("/data/a", b"hello")], &[]);
        let obj = pair.resolve("/data/a").unwrap();
        assert_eq!(obj.bytes, b"hello");
    }

    #[test]
    fn resolve_prefers_result_log() {
        let pair = pair_with(
            &[("/fn/g(/data/x)", b"from-req")],
            &[("/fn/g(/data/x)", b"from-res")],
        );
        assert_eq!(pair.resolve("/fn/g(/data/x)").unwrap().bytes, b"from-res");
    }

    #[test]
    fn resolve_absent_is_none() {
        let pair = pair_with(&[], &[]);
        assert!(pair.resolve("/data/missing").is_none());
    }

    #[test]
    fn evaluate_fetch_task() {
        let pair = pair_with(&[("/data/a", b"hello")], &[]);
        let out = evaluate(&FunctionTable::demo(), &pair, &expr("/data/a")).unwrap();
        assert_eq!(out, b"hello");
    }

    #[test]
    fn evaluate_concat() {
        let pair = pair_with(&[("/data/a", b"sw"), ("/data/b", b"arm")], &[]);
        let out = evaluate(
            &FunctionTable::demo(),
            &pair,
            &expr("/fn/concat(/data/a,/data/b)"),
        )
        .unwrap();
        assert_eq!(out, b"swarm");
    }

    #[test]
    fn evaluate_nested_sum() {
        let pair = pair_with(
            &[("/data/x", b"1"), ("/data/y", b"2"), ("/data/z", b"3")],
            &[],
        );
        let out = evaluate(
            &FunctionTable::demo(),
            &pair,
            &expr("/fn/sum(/fn/sum(/data/x,/data/y),/data/z)"),
        )
        .unwrap();
        assert_eq!(out, b"6");
    }

    #[test]
    fn evaluate_errors() {
        let pair = pair_with(&[], &[]);
        let t = FunctionTable::demo();
        assert_eq!(
            evaluate(&t, &pair, &expr("/data/a")),
            Err(ExecError::UnresolvedInput("/data/a".into()))
        );
        assert_eq!(
            evaluate(&t, &pair, &expr("/fn/nope(/data/a)")),
            Err(ExecError::UnknownFunction(name("/fn/nope")))
        );
    }

    #[test]
    fn evaluate_reuses_published_sub_result() {
        // The sub-result is present but its input is not; evaluation must
        // reuse instead of recomputing.
        let pair = pair_with(&[("/data/y", b"4")], &[("/fn/sum(/data/x)", b"38")]);
        let out = evaluate(
            &FunctionTable::demo(),
            &pair,
            &expr("/fn/sum(/fn/sum(/data/x),/data/y)"),
        )
        .unwrap();
        assert_eq!(out, b"42");
    }

    #[test]
    fn cost_of_cases() {
        let t = FunctionTable::demo();
        assert_eq!(cost_of(&t, &expr("/data/a")).unwrap(), 0);
        assert_eq!(cost_of(&t, &expr("/fn/concat(/data/a)")).unwrap(), 1);
        // Nested: sum (2) + concat (1) + wordcount (2).
        assert_eq!(
            cost_of(&t, &expr("/fn/sum(/fn/concat(/data/a),/fn/wordcount(/data/b))")).unwrap(),
            5
        );
        assert_eq!(
            cost_of(&t, &expr("/fn/nope(/data/a)")),
            Err(ExecError::UnknownFunction(name("/fn/nope")))
        );
    }

    #[test]
    fn computable_tracks_resolvability() {
        let t = FunctionTable::demo();
        let pair = pair_with(&[("/data/a", b"1")], &[]);
        assert!(computable(&t, &pair, &expr("/fn/sum(/data/a)")));
        assert!(!computable(&t, &pair, &expr("/fn/sum(/data/missing)")));
        assert!(!computable(&t, &pair, &expr("/fn/nope(/data/a)")));
        // A published sub-result substitutes for missing inputs.
        let seeded = pair_with(&[], &[("/fn/sum(/data/missing)", b"5")]);
        assert!(computable(&t, &seeded, &expr("/fn/sum(/fn/sum(/data/missing))")));
    }

    /// Random digit-string expression trees: every demo function maps
    /// digit strings to digit strings, so arbitrary nesting stays valid.
    fn arb_digit_expr() -> impl Strategy<Value = Expression> {
        let leaf = proptest::sample::select(vec!["/data/d1", "/data/d2", "/data/d3"])
            .prop_map(|n| Expression::DataRef(Name::parse(n).unwrap()));
        leaf.prop_recursive(4, 32, 3, |inner| {
            (
                proptest::sample::select(vec![
                    "/fn/concat",
                    "/fn/sum",
                    "/fn/upper",
                    "/fn/wordcount",
                ]),
                proptest::collection::vec(inner, 1..=3),
            )
                .prop_map(|(f, arguments)| Expression::Call {
                    function: Name::parse(f).unwrap(),
                    arguments,
                })
        })
    }

    /// Direct recursive evaluation with no resolver and no reuse; the
    /// independent oracle for the executor.
    fn oracle_eval(env: &BTreeMap<String, Vec<u8>>, e: &Expression) -> Vec<u8> {
        match e {
            Expression::DataRef(n) => env[&n.text()].clone(),
            Expression::Call {
                function,
                arguments,
            } => {
                let args: Vec<DataObject> = arguments
                    .iter()
                    .map(|a| DataObject {
                        key: a.text(),
                        bytes: oracle_eval(env, a),
                    })
                    .collect();
                match function.text().as_str() {
                    "/fn/concat" => fn_concat(&args).unwrap(),
                    "/fn/sum" => fn_sum(&args).unwrap(),
                    "/fn/upper" => fn_upper(&args).unwrap(),
                    "/fn/wordcount" => fn_wordcount(&args).unwrap(),
                    other => panic!("oracle has no function {other}"),
                }
            }
        }
    }

    proptest! {
        #[test]
        fn evaluation_is_deterministic_and_matches_oracle(e in arb_digit_expr()) {
            let pair = pair_with(
                &[("/data/d1", b"3"), ("/data/d2", b"7"), ("/data/d3", b"11")],
                &[],
            );
            let t = FunctionTable::demo();
            let once = evaluate(&t, &pair, &e).unwrap();
            let twice = evaluate(&t, &pair, &e).unwrap();
            prop_assert_eq!(&once, &twice);

            let mut env = BTreeMap::new();
            env.insert("/data/d1".to_string(), b"3".to_vec());
            env.insert("/data/d2".to_string(), b"7".to_vec());
            env.insert("/data/d3".to_string(), b"11".to_vec());
            prop_assert_eq!(once, oracle_eval(&env, &e));
        }

        #[test]
        fn seeding_correct_sub_results_never_changes_the_answer(e in arb_digit_expr()) {
            let mut env = BTreeMap::new();
            env.insert("/data/d1".to_string(), b"3".to_vec());
            env.insert("/data/d2".to_string(), b"7".to_vec());
            env.insert("/data/d3".to_string(), b"11".to_vec());
            let expected = oracle_eval(&env, &e);

            // Publish a correct result for every other sub-call.
            let tree = e.decompose();
            let seeded: Vec<(String, Vec<u8>)> = tree
                .subtasks
                .iter()
                .enumerate()
                .filter(|(i, _)| i % 2 == 0)
                .map(|(_, sub)| (sub.text(), oracle_eval(&env, sub)))
                .collect();
            let seeded_refs: Vec<(&str, &[u8])> = seeded
                .iter()
                .map(|(k, v)| (k.as_str(), v.as_slice()))
                .collect();
            let pair = pair_with(
                &[("/data/d1", b"3"), ("/data/d2", b"7"), ("/data/d3", b"11")],
                &seeded_refs,
            );
            let got = evaluate(&FunctionTable::demo(), &pair, &e).unwrap();
            prop_assert_eq!(got, expected);
        }
    }
}
