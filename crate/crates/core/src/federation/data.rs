//! Labelled datasets and their split into client shards.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Gamma};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::oracle::{ClientId, Example};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Dataset {
    examples: Vec<Example>,
    num_classes: usize,
}

impl Dataset {
    pub fn new(examples: Vec<Example>, num_classes: usize) -> Result<Self> {
        if num_classes == 0 {
            return Err(Error::config("dataset needs at least one class"));
        }
        if let Some(e) = examples.iter().find(|e| e.label >= num_classes) {
            return Err(Error::config(format!(
                "example {} has label {} outside {num_classes} classes",
                e.input_id, e.label
            )));
        }
        Ok(Dataset {
            examples,
            num_classes,
        })
    }

    /// `per_class` examples of every class, with consecutive input ids.
    pub fn synthetic(num_classes: usize, per_class: usize) -> Result<Self> {
        Self::with_class_counts(&vec![per_class; num_classes])
    }

    pub fn with_class_counts(counts: &[usize]) -> Result<Self> {
        let mut examples = Vec::with_capacity(counts.iter().sum());
        let mut id = 0u64;
        for (label, &count) in counts.iter().enumerate() {
            for _ in 0..count {
                examples.push(Example { input_id: id, label });
                id += 1;
            }
        }
        Self::new(examples, counts.len())
    }

    pub fn examples(&self) -> &[Example] {
        &self.examples
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    fn by_class(&self) -> Vec<Vec<Example>> {
        let mut groups = vec![Vec::new(); self.num_classes];
        for e in &self.examples {
            groups[e.label].push(*e);
        }
        groups
    }
}

/// One client's local data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClientShard {
    pub client_id: ClientId,
    pub examples: Vec<Example>,
}

impl ClientShard {
    pub fn len(&self) -> usize {
        self.examples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.examples.is_empty()
    }

    pub fn class_histogram(&self, num_classes: usize) -> Vec<usize> {
        let mut h = vec![0; num_classes];
        for e in &self.examples {
            h[e.label] += 1;
        }
        h
    }
}

fn check_clients(num_clients: usize) -> Result<()> {
    if num_clients == 0 {
        return Err(Error::config("number of clients must be at least 1"));
    }
    Ok(())
}

/// Every client gets exactly `k_per_class` examples of every class, drawn
/// without replacement.
pub fn partition_kshot<R: Rng + ?Sized>(
    dataset: &Dataset,
    num_clients: usize,
    k_per_class: usize,
    rng: &mut R,
) -> Result<Vec<ClientShard>> {
    check_clients(num_clients)?;
    if k_per_class == 0 {
        return Err(Error::config("k_per_class must be at least 1"));
    }
    let mut shards: Vec<ClientShard> = (0..num_clients)
        .map(|client_id| ClientShard {
            client_id,
            examples: Vec::with_capacity(k_per_class * dataset.num_classes),
        })
        .collect();
    for (label, mut group) in dataset.by_class().into_iter().enumerate() {
        let needed = num_clients * k_per_class;
        if group.len() < needed {
            return Err(Error::config(format!(
                "class {label} has {} examples, {needed} needed for {num_clients} clients x {k_per_class} shots",
                group.len()
            )));
        }
        group.shuffle(rng);
        for (shard, chunk) in shards.iter_mut().zip(group.chunks(k_per_class)) {
            shard.examples.extend_from_slice(chunk);
        }
    }
    Ok(shards)
}

/// Shuffled round-robin split; shard sizes differ by at most one.
pub fn partition_even<R: Rng + ?Sized>(
    dataset: &Dataset,
    num_clients: usize,
    rng: &mut R,
) -> Result<Vec<ClientShard>> {
    check_clients(num_clients)?;
    if dataset.len() < num_clients {
        return Err(Error::config(format!(
            "{} examples cannot fill {num_clients} shards",
            dataset.len()
        )));
    }
    let mut all = dataset.examples.clone();
    all.shuffle(rng);
    let mut shards: Vec<ClientShard> = (0..num_clients)
        .map(|client_id| ClientShard {
            client_id,
            examples: Vec::new(),
        })
        .collect();
    for (i, e) in all.into_iter().enumerate() {
        shards[i % num_clients].examples.push(e);
    }
    Ok(shards)
}

/// Label-skewed split: for each class, client proportions are drawn from a
/// symmetric Dirichlet with the given concentration. Empty shards are
/// repaired by moving one example from the currently largest shard.
pub fn partition_dirichlet<R: Rng + ?Sized>(
    dataset: &Dataset,
    num_clients: usize,
    concentration: f64,
    rng: &mut R,
) -> Result<Vec<ClientShard>> {
    check_clients(num_clients)?;
    if !(concentration > 0.0 && concentration.is_finite()) {
        return Err(Error::config(format!(
            "dirichlet concentration must be positive, got {concentration}"
        )));
    }
    if dataset.len() < num_clients {
        return Err(Error::config(format!(
            "{} examples cannot fill {num_clients} shards",
            dataset.len()
        )));
    }
    let gamma = Gamma::new(concentration, 1.0)
        .map_err(|e| Error::config(format!("dirichlet concentration: {e}")))?;
    let mut shards: Vec<ClientShard> = (0..num_clients)
        .map(|client_id| ClientShard {
            client_id,
            examples: Vec::new(),
        })
        .collect();

    for mut group in dataset.by_class() {
        if group.is_empty() {
            continue;
        }
        group.shuffle(rng);
        let mut props: Vec<f64> = (0..num_clients).map(|_| gamma.sample(rng)).collect();
        let total: f64 = props.iter().sum();
        if !(total > 0.0) || !total.is_finite() {
            // every gamma draw underflowed: put the whole class on one client
            props.iter_mut().for_each(|p| *p = 0.0);
            props[rng.random_range(0..num_clients)] = 1.0;
        } else {
            props.iter_mut().for_each(|p| *p /= total);
        }
        let m = group.len();
        let mut cum = 0.0;
        let mut start = 0usize;
        for (k, p) in props.iter().enumerate() {
            cum += p;
            let end = if k + 1 == num_clients {
                m
            } else {
                ((cum * m as f64).round() as usize).clamp(start, m)
            };
            shards[k].examples.extend_from_slice(&group[start..end]);
            start = end;
        }
    }

    while let Some(empty) = shards.iter().position(|s| s.examples.is_empty()) {
        let largest = shards
            .iter()
            .enumerate()
            .max_by_key(|(i, s)| (s.examples.len(), std::cmp::Reverse(*i)))
            .map(|(i, _)| i)
            .expect("at least one shard");
        let moved = shards[largest].examples.pop().expect("largest shard is non-empty");
        shards[empty].examples.push(moved);
    }
    Ok(shards)
}
