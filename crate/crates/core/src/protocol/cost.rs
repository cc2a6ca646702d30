//! Per-client computation and communication counters, and the closed-form
//! per-epoch cost model they are checked against.

use std::collections::BTreeMap;
use std::ops::AddAssign;

use serde::{Deserialize, Serialize};

use super::Scheme;

/// Counters for one client. All values only grow.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClientCost {
    /// Samples pushed through forward + backward of the client part (multiplier of C^P).
    pub items: u64,
    /// Times the client overwrote its weights with received ones (count of C^U).
    pub weight_updates: u64,
    pub smashed_up: u64,
    pub gradients_down: u64,
    pub weights_up: u64,
    pub weights_down: u64,
    /// One-off distribution of the final round-robin model, kept outside the per-epoch model.
    pub broadcast_down: u64,
    pub broadcast_up: u64,
}

impl ClientCost {
    /// Scalars sent or received per the per-epoch model (broadcast excluded).
    pub fn communication(&self) -> u64 {
        self.smashed_up + self.gradients_down + self.weights_up + self.weights_down
    }

    pub fn weight_communication(&self) -> u64 {
        self.weights_up + self.weights_down
    }
}

impl AddAssign for ClientCost {
    fn add_assign(&mut self, o: Self) {
        self.items += o.items;
        self.weight_updates += o.weight_updates;
        self.smashed_up += o.smashed_up;
        self.gradients_down += o.gradients_down;
        self.weights_up += o.weights_up;
        self.weights_down += o.weights_down;
        self.broadcast_down += o.broadcast_down;
        self.broadcast_up += o.broadcast_up;
    }
}

/// Counters per epoch per client.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CostLedger {
    epochs: BTreeMap<usize, BTreeMap<usize, ClientCost>>,
}

impl CostLedger {
    pub fn entry(&mut self, epoch: usize, client: usize) -> &mut ClientCost {
        self.epochs
            .entry(epoch)
            .or_default()
            .entry(client)
            .or_default()
    }

    pub fn epoch(&self, epoch: usize) -> Option<&BTreeMap<usize, ClientCost>> {
        self.epochs.get(&epoch)
    }

    pub fn epochs(&self) -> impl Iterator<Item = (usize, &BTreeMap<usize, ClientCost>)> {
        self.epochs.iter().map(|(&e, m)| (e, m))
    }

    /// Sum over all epochs for one client.
    pub fn total(&self, client: usize) -> ClientCost {
        let mut acc = ClientCost::default();
        for m in self.epochs.values() {
            if let Some(c) = m.get(&client) {
                acc += *c;
            }
        }
        acc
    }

    pub fn absorb(&mut self, other: CostLedger) {
        for (e, m) in other.epochs {
            for (c, cost) in m {
                *self.entry(e, c) += cost;
            }
        }
    }
}

/// Inputs of the closed-form cost model.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CostModel {
    pub clients: usize,
    pub dataset_items: usize,
    /// Split-layer size per sample (S).
    pub split_size: usize,
    /// Client-part parameter count (|U|).
    pub client_params: usize,
}

impl CostModel {
    fn shares_weights(scheme: Scheme) -> bool {
        matches!(scheme, Scheme::SlRoundrobin | Scheme::Sfl)
    }

    /// `|X| / N` (integer division; exact for balanced shards).
    pub fn items_per_client(&self) -> u64 {
        (self.dataset_items / self.clients) as u64
    }

    /// `(C^P multiplier, C^U count)` per client per epoch.
    pub fn computation(&self, scheme: Scheme) -> (u64, u64) {
        let cu = if Self::shares_weights(scheme) && self.clients > 1 {
            1
        } else {
            0
        };
        (self.items_per_client(), cu)
    }

    /// `2 |X|/N S (+ 2 |U|)` scalars per client per epoch.
    pub fn communication(&self, scheme: Scheme) -> u64 {
        let data = 2 * self.items_per_client() * self.split_size as u64;
        if Self::shares_weights(scheme) && self.clients > 1 {
            data + 2 * self.client_params as u64
        } else {
            data
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostRow {
    pub epoch: usize,
    pub client: usize,
    pub measured_items: u64,
    pub measured_weight_updates: u64,
    pub measured_communication: u64,
    pub measured_weight_communication: u64,
    pub predicted_items: u64,
    pub predicted_weight_updates: u64,
    pub predicted_communication: u64,
    pub communication_delta: i64,
}

/// Measured per-epoch counters next to the closed-form predictions.
pub fn cost_report(ledger: &CostLedger, scheme: Scheme, model: &CostModel) -> Vec<CostRow> {
    let (items, cu) = model.computation(scheme);
    let comm = model.communication(scheme);
    let mut rows = Vec::new();
    for (epoch, clients) in ledger.epochs() {
        for (&client, c) in clients {
            rows.push(CostRow {
                epoch,
                client,
                measured_items: c.items,
                measured_weight_updates: c.weight_updates,
                measured_communication: c.communication(),
                measured_weight_communication: c.weight_communication(),
                predicted_items: items,
                predicted_weight_updates: cu,
                predicted_communication: comm,
                communication_delta: c.communication() as i64 - comm as i64,
            });
        }
    }
    rows
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn closed_forms() {
        let m = CostModel {
            clients: 6,
            dataset_items: 60_000,
            split_size: 10,
            client_params: 100,
        };
        assert_eq!(m.items_per_client(), 10_000);
        assert_eq!(m.computation(Scheme::Psl), (10_000, 0));
        assert_eq!(m.computation(Scheme::SlRoundrobin), (10_000, 1));
        assert_eq!(m.communication(Scheme::Psl), 200_000);
        assert_eq!(
            m.communication(Scheme::Sfl) - m.communication(Scheme::Psl),
            200
        );
    }

    #[test]
    fn ledger_totals() {
        let mut l = CostLedger::default();
        l.entry(0, 1).items += 5;
        l.entry(1, 1).items += 7;
        l.entry(1, 2).smashed_up += 3;
        assert_eq!(l.total(1).items, 12);
        assert_eq!(l.total(2).communication(), 3);
        let mut other = CostLedger::default();
        other.entry(1, 1).items += 1;
        l.absorb(other);
        assert_eq!(l.total(1).items, 13);
    }
}
