//! Coin ledger and pricing dynamics.
//!
//! Nodes pay per delivered task result and earn by solving tasks for
//! others. Offers move with supply and demand — up while nobody takes
//! the task, down when takers are easy to find — and are capped just
//! below the cost of computing the result locally, so nobody ever pays
//! more than doing the work themselves. Cached results carry a price
//! instead of a TTL: it decays without buyers and the result log is
//! pruned when it falls to the threshold.

use std::collections::BTreeMap;

use thiserror::Error;

use crate::crypto::{Digest, PublicKey};
use crate::naming::Name;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum EconomyError {
    #[error("insufficient funds: balance {balance}, needed {needed}")]
    InsufficientFunds { balance: u64, needed: u64 },
    #[error("unknown account")]
    UnknownAccount,
}

/// All balances live in one simulated ledger; transfers conserve the
/// total and never drive a balance negative.
#[derive(Debug, Clone, Default)]
pub struct CoinLedger {
    balances: BTreeMap<PublicKey, u64>,
}

impl CoinLedger {
    pub fn new() -> CoinLedger {
        CoinLedger::default()
    }

    /// Open an account with its starting endowment.
    pub fn register(&mut self, key: PublicKey, initial_balance: u64) {
        self.balances.entry(key).or_insert(initial_balance);
    }

    pub fn balance(&self, key: &PublicKey) -> u64 {
        self.balances.get(key).copied().unwrap_or(0)
    }

    pub fn total(&self) -> u64 {
        self.balances.values().sum()
    }

    pub fn balances(&self) -> &BTreeMap<PublicKey, u64> {
        &self.balances
    }

    /// External coin market: credit an account out of thin air. Only
    /// scenario events call this; settle/transfer conserve the total.
    pub fn credit(&mut self, key: &PublicKey, amount: u64) -> Result<(), EconomyError> {
        let b = self
            .balances
            .get_mut(key)
            .ok_or(EconomyError::UnknownAccount)?;
        *b += amount;
        Ok(())
    }

    /// Atomic debit/credit; a transfer to oneself or of zero is a no-op.
    pub fn transfer(
        &mut self,
        from: &PublicKey,
        to: &PublicKey,
        amount: u64,
    ) -> Result<(), EconomyError> {
        if amount == 0 || from == to {
            return Ok(());
        }
        let from_balance = self.balance(from);
        if from_balance < amount {
            return Err(EconomyError::InsufficientFunds {
                balance: from_balance,
                needed: amount,
            });
        }
        if !self.balances.contains_key(to) {
            return Err(EconomyError::UnknownAccount);
        }
        *self.balances.get_mut(from).unwrap() -= amount;
        *self.balances.get_mut(to).unwrap() += amount;
        Ok(())
    }
}

/// What happened to an offer during one adjustment window.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OfferOutcome {
    TakenWithinWindow,
    NotTaken,
}

/// A price a node attaches to one of its open tasks.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Offer {
    pub task: Digest,
    pub offerer: PublicKey,
    pub price: u64,
    pub history: Vec<OfferOutcome>,
}

impl Offer {
    pub fn new(task: Digest, offerer: PublicKey, price: u64) -> Offer {
        Offer {
            task,
            offerer,
            price,
            history: Vec::new(),
        }
    }
}

/// Multiplicative pricing parameters. The defaults quantify the
/// "slightly more / slightly less" adjustments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EconomyParams {
    pub initial_balance: u64,
    pub up_factor: f64,
    pub down_factor: f64,
    pub cache_down_factor: f64,
    /// Fraction of the paid price a freshly cached result starts at.
    pub cache_fraction: f64,
    pub prune_threshold: u64,
    /// How long an offer may sit before it counts as NotTaken.
    pub offer_window: u64,
    /// How often cached-result prices are re-evaluated.
    pub cache_window: u64,
}

impl Default for EconomyParams {
    fn default() -> EconomyParams {
        EconomyParams {
            initial_balance: 1000,
            up_factor: 1.25,
            down_factor: 0.9,
            cache_down_factor: 0.5,
            cache_fraction: 0.5,
            prune_threshold: 1,
            offer_window: 2000,
            cache_window: 2000,
        }
    }
}

/// Adjust an offer after a window: raise while untaken (capped one coin
/// below the local cost when that is known), lower after a taker was
/// found. An open offer never drops below one coin.
pub fn adjust_offer(
    offer: &mut Offer,
    outcome: OfferOutcome,
    local_cost: Option<u64>,
    params: &EconomyParams,
) -> u64 {
    offer.history.push(outcome);
    let mut price = match outcome {
        OfferOutcome::NotTaken => (offer.price as f64 * params.up_factor).ceil() as u64,
        OfferOutcome::TakenWithinWindow => (offer.price as f64 * params.down_factor).floor() as u64,
    };
    if let Some(cost) = local_cost {
        price = price.min(cost.saturating_sub(1));
    }
    offer.price = price.max(1);
    offer.price
}

/// Pay each taker that delivered a result. Transfers are independent: a
/// failed one is reported and the rest still settle.
pub fn settle(
    ledger: &mut CoinLedger,
    offer: &Offer,
    delivered: &[PublicKey],
) -> Vec<(PublicKey, Result<(), EconomyError>)> {
    delivered
        .iter()
        .map(|taker| {
            (
                taker.clone(),
                ledger.transfer(&offer.offerer, taker, offer.price),
            )
        })
        .collect()
}

/// Price tag on a cached result log.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CachePrice {
    pub name: Name,
    pub price: u64,
    pub prune_threshold: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CacheOutcome {
    Sold,
    NoBuyerWindow,
}

/// First price of a cached result: a configured fraction of what the
/// node paid for it.
pub fn initial_cache_price(paid: u64, fraction: f64) -> u64 {
    debug_assert!(fraction > 0.0 && fraction <= 1.0);
    (paid as f64 * fraction).floor() as u64
}

/// Re-price a cached result after a window: up when it sold, down when
/// nobody bought. Returns the new price and whether the result log
/// should be pruned.
pub fn reprice_cache(
    cp: &mut CachePrice,
    outcome: CacheOutcome,
    params: &EconomyParams,
) -> (u64, bool) {
    cp.price = match outcome {
        CacheOutcome::Sold => (cp.price as f64 * params.up_factor).ceil() as u64,
        CacheOutcome::NoBuyerWindow => (cp.price as f64 * params.cache_down_factor).floor() as u64,
    };
    (cp.price, cp.price <= cp.prune_threshold)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BuyDecision {
    Buy,
    ComputeLocally,
}

/// Buy only strictly below the cost of computing the result yourself.
pub fn buy_decision(buyer_local_cost: u64, network_price: u64) -> BuyDecision {
    if network_price < buyer_local_cost {
        BuyDecision::Buy
    } else {
        BuyDecision::ComputeLocally
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crypto::{derive_seed, KeyPair};
    use proptest::prelude::*;

    fn keys(n: u64) -> Vec<PublicKey> {
        (0..n)
            .map(|i| {
                KeyPair::mock_from_seed(&derive_seed(i, "economy-test"))
                    .public()
                    .clone()
            })
            .collect()
    }

    fn ledger_with(keys: &[PublicKey], initial: u64) -> CoinLedger {
        let mut l = CoinLedger::new();
        for k in keys {
            l.register(k.clone(), initial);
        }
        l
    }

    #[test]
    fn transfer_moves_coins() {
        let ks = keys(2);
        let mut l = ledger_with(&ks, 100);
        l.transfer(&ks[0], &ks[1], 5).unwrap();
        assert_eq!(l.balance(&ks[0]), 95);
        assert_eq!(l.balance(&ks[1]), 105);
        assert_eq!(l.total(), 200);
    }

    #[test]
    fn transfer_zero_is_noop() {
        let ks = keys(2);
        let mut l = ledger_with(&ks, 100);
        l.transfer(&ks[0], &ks[1], 0).unwrap();
        assert_eq!(l.balance(&ks[0]), 100);
    }

    #[test]
    fn overdraft_rejected_without_side_effects() {
        let ks = keys(2);
        let mut l = ledger_with(&ks, 100);
        let err = l.transfer(&ks[0], &ks[1], 101).unwrap_err();
        assert_eq!(
            err,
            EconomyError::InsufficientFunds {
                balance: 100,
                needed: 101
            }
        );
        assert_eq!(l.balance(&ks[0]), 100);
        assert_eq!(l.balance(&ks[1]), 100);
    }

    #[test]
    fn settle_pays_each_delivering_taker() {
        let ks = keys(3);
        let mut l = ledger_with(&ks, 100);
        let offer = Offer::new(Digest::ZERO, ks[0].clone(), 10);
        let results = settle(&mut l, &offer, &[ks[1].clone(), ks[2].clone()]);
        assert!(results.iter().all(|(_, r)| r.is_ok()));
        assert_eq!(l.balance(&ks[0]), 80);
        assert_eq!(l.balance(&ks[1]), 110);
        assert_eq!(l.balance(&ks[2]), 110);
    }

    #[test]
    fn settle_with_no_takers_is_noop() {
        let ks = keys(1);
        let mut l = ledger_with(&ks, 100);
        let offer = Offer::new(Digest::ZERO, ks[0].clone(), 10);
        assert!(settle(&mut l, &offer, &[]).is_empty());
        assert_eq!(l.total(), 100);
    }

    #[test]
    fn settle_pays_only_deliverers() {
        let ks = keys(3);
        let mut l = ledger_with(&ks, 100);
        let offer = Offer::new(Digest::ZERO, ks[0].clone(), 10);
        // Two takers existed; only one delivered.
        settle(&mut l, &offer, std::slice::from_ref(&ks[1]));
        assert_eq!(l.balance(&ks[0]), 90);
        assert_eq!(l.balance(&ks[1]), 110);
        assert_eq!(l.balance(&ks[2]), 100);
    }

    #[test]
    fn adjust_offer_raises_when_not_taken() {
        let p = EconomyParams::default();
        let mut o = Offer::new(Digest::ZERO, keys(1)[0].clone(), 10);
        assert_eq!(adjust_offer(&mut o, OfferOutcome::NotTaken, Some(50), &p), 13);
    }

    #[test]
    fn adjust_offer_lowers_when_taken() {
        let p = EconomyParams::default();
        let mut o = Offer::new(Digest::ZERO, keys(1)[0].clone(), 10);
        assert_eq!(
            adjust_offer(&mut o, OfferOutcome::TakenWithinWindow, Some(50), &p),
            9
        );
    }

    #[test]
    fn adjust_offer_caps_below_local_cost() {
        let p = EconomyParams::default();
        let mut o = Offer::new(Digest::ZERO, keys(1)[0].clone(), 48);
        assert_eq!(adjust_offer(&mut o, OfferOutcome::NotTaken, Some(50), &p), 49);
        // Already at the cap: stays there (local execution is the
        // caller's move at this point).
        assert_eq!(adjust_offer(&mut o, OfferOutcome::NotTaken, Some(50), &p), 49);
        assert_eq!(o.history.len(), 2);
    }

    #[test]
    fn adjust_offer_never_below_one() {
        let p = EconomyParams::default();
        let mut o = Offer::new(Digest::ZERO, keys(1)[0].clone(), 1);
        assert_eq!(
            adjust_offer(&mut o, OfferOutcome::TakenWithinWindow, None, &p),
            1
        );
    }

    #[test]
    fn reprice_cache_decay_and_prune() {
        let p = EconomyParams::default();
        let mut cp = CachePrice {
            name: Name::parse("/s/x").unwrap(),
            price: 8,
            prune_threshold: 1,
        };
        assert_eq!(reprice_cache(&mut cp, CacheOutcome::NoBuyerWindow, &p), (4, false));
        cp.price = 2;
        assert_eq!(reprice_cache(&mut cp, CacheOutcome::NoBuyerWindow, &p), (1, true));
        cp.price = 8;
        assert_eq!(reprice_cache(&mut cp, CacheOutcome::Sold, &p), (10, false));
    }

    #[test]
    fn initial_cache_price_fractions() {
        assert_eq!(initial_cache_price(40, 0.5), 20);
        assert_eq!(initial_cache_price(40, 0.25), 10);
        assert_eq!(initial_cache_price(0, 0.5), 0);
    }

    #[test]
    fn buy_decision_strict_inequality() {
        assert_eq!(buy_decision(50, 30), BuyDecision::Buy);
        assert_eq!(buy_decision(50, 50), BuyDecision::ComputeLocally);
        assert_eq!(buy_decision(50, 60), BuyDecision::ComputeLocally);
    }

    proptest! {
        /// No sequence of settlements and transfers mints or burns coins.
        #[test]
        fn conservation(
            ops in proptest::collection::vec((0usize..4, 0usize..4, 0u64..60), 0..40),
        ) {
            let ks = keys(4);
            let mut l = ledger_with(&ks, 100);
            for (from, to, amount) in ops {
                let offer = Offer::new(Digest::ZERO, ks[from].clone(), amount);
                let _ = settle(&mut l, &offer, std::slice::from_ref(&ks[to]));
            }
            prop_assert_eq!(l.total(), 400);
        }

        /// After the first adjustment the price never exceeds the cap.
        #[test]
        fn price_respects_cap(
            start in 1u64..200,
            cost in 2u64..100,
            outcomes in proptest::collection::vec(proptest::prelude::any::<bool>(), 1..30),
        ) {
            let p = EconomyParams::default();
            let mut o = Offer::new(Digest::ZERO, keys(1)[0].clone(), start);
            for taken in outcomes {
                let outcome = if taken {
                    OfferOutcome::TakenWithinWindow
                } else {
                    OfferOutcome::NotTaken
                };
                let price = adjust_offer(&mut o, outcome, Some(cost), &p);
                prop_assert!(price <= cost - 1 || cost == 1);
                prop_assert!(price >= 1);
            }
        }

        /// Decaying cache prices hit the prune threshold within the
        /// logarithmic bound.
        #[test]
        fn cache_decay_reaches_prune(p0 in 2u64..10_000) {
            let params = EconomyParams::default();
            let mut cp = CachePrice {
                name: Name::parse("/s/x").unwrap(),
                price: p0,
                prune_threshold: 1,
            };
            let bound = ((p0 as f64).log2() / (1.0 / params.cache_down_factor).log2()).ceil() as u32 + 1;
            let mut windows = 0;
            loop {
                windows += 1;
                let (_, prune) = reprice_cache(&mut cp, CacheOutcome::NoBuyerWindow, &params);
                if prune {
                    break;
                }
                prop_assert!(windows <= bound, "no prune after {} windows", windows);
            }
            prop_assert!(windows <= bound);
        }
    }
}
