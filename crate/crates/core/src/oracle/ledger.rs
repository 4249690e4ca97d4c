use std::collections::BTreeMap;
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

/// Client identifier; index into the shard list.
pub type ClientId = usize;

/// Monotone counters of oracle evaluations.
///
/// All three views are updated under one lock, so `total`, the per-client
/// sum and the per-round sum always agree.
#[derive(Debug, Default)]
pub struct QueryLedger {
    state: Mutex<LedgerSnapshot>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LedgerSnapshot {
    pub total: u64,
    pub per_client: BTreeMap<ClientId, u64>,
    pub per_round: Vec<u64>,
    pub current_round: usize,
}

impl LedgerSnapshot {
    pub fn reconciles(&self) -> bool {
        self.per_client.values().sum::<u64>() == self.total
            && self.per_round.iter().sum::<u64>() == self.total
    }
}

impl QueryLedger {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn record(&self, client: ClientId) {
        self.record_many(client, 1);
    }

    pub fn record_many(&self, client: ClientId, count: u64) {
        let mut s = self.lock();
        s.total += count;
        *s.per_client.entry(client).or_insert(0) += count;
        let round = s.current_round;
        if s.per_round.len() <= round {
            s.per_round.resize(round + 1, 0);
        }
        s.per_round[round] += count;
    }

    /// Routes subsequent queries to `round`.
    pub fn set_round(&self, round: usize) {
        let mut s = self.lock();
        s.current_round = round;
        if s.per_round.len() <= round {
            s.per_round.resize(round + 1, 0);
        }
    }

    pub fn total(&self) -> u64 {
        self.lock().total
    }

    pub fn client_total(&self, client: ClientId) -> u64 {
        self.lock().per_client.get(&client).copied().unwrap_or(0)
    }

    pub fn round_total(&self, round: usize) -> u64 {
        self.lock().per_round.get(round).copied().unwrap_or(0)
    }

    pub fn snapshot(&self) -> LedgerSnapshot {
        self.lock().clone()
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, LedgerSnapshot> {
        // a poisoned ledger still holds consistent counters
        self.state.lock().unwrap_or_else(|e| e.into_inner())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::sync::Arc;

    #[test]
    fn cross_sums_reconcile() {
        let l = QueryLedger::new();
        l.record(0);
        l.record(3);
        l.set_round(2);
        l.record_many(3, 4);
        let s = l.snapshot();
        assert_eq!(s.total, 6);
        assert_eq!(s.per_round, vec![2, 0, 4]);
        assert_eq!(s.per_client[&3], 5);
        assert!(s.reconciles());
    }

    #[test]
    fn concurrent_increments_are_not_lost() {
        let l = Arc::new(QueryLedger::new());
        let handles: Vec<_> = (0..8)
            .map(|c| {
                let l = Arc::clone(&l);
                std::thread::spawn(move || {
                    for _ in 0..1000 {
                        l.record(c);
                    }
                })
            })
            .collect();
        for h in handles {
            h.join().unwrap();
        }
        assert_eq!(l.total(), 8000);
        assert!(l.snapshot().reconciles());
    }
}
