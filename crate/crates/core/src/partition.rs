//! Class-to-partition assignment and enumeration of expert domains.
//!
//! Partitions are numbered from 1 to `S`; classes from 0 to `N - 1` so they
//! line up with the columns of a logit matrix. An expert is identified by the
//! ascending set of partitions it specializes in, written as `"1+3"`.

use std::fmt;
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Partition index in `1..=S`.
pub type PartitionId = u16;

/// Total, non-overlapping assignment of classes to partitions.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PartitionMap {
    /// `assignment[c]` is the partition of class `c`.
    assignment: Vec<PartitionId>,
    num_partitions: usize,
}

/// On-disk form: classes listed per partition, partition `i` is the i-th array.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct PartitionConfig {
    pub num_classes: usize,
    pub partitions: Vec<Vec<usize>>,
}

impl PartitionMap {
    pub fn from_config(cfg: &PartitionConfig) -> Result<Self> {
        let n = cfg.num_classes;
        if n < 2 {
            return Err(Error::validation(format!(
                "num_classes must be at least 2, got {n}"
            )));
        }
        let s = cfg.partitions.len();
        if s == 0 {
            return Err(Error::validation("at least one partition is required"));
        }
        if s > PartitionId::MAX as usize {
            return Err(Error::validation(format!("too many partitions: {s}")));
        }
        let mut assignment: Vec<PartitionId> = vec![0; n];
        for (i, classes) in cfg.partitions.iter().enumerate() {
            let pid = (i + 1) as PartitionId;
            if classes.is_empty() {
                return Err(Error::validation(format!("partition {pid} is empty")));
            }
            for &c in classes {
                if c >= n {
                    return Err(Error::validation(format!(
                        "class {c} in partition {pid} is out of range [0, {n})"
                    )));
                }
                if assignment[c] != 0 {
                    return Err(Error::validation(format!(
                        "class {c} appears in partitions {} and {pid}",
                        assignment[c]
                    )));
                }
                assignment[c] = pid;
            }
        }
        if let Some(c) = assignment.iter().position(|&p| p == 0) {
            let missing: Vec<usize> = assignment
                .iter()
                .enumerate()
                .filter(|(_, &p)| p == 0)
                .map(|(c, _)| c)
                .collect();
            return Err(Error::validation(format!(
                "class {c} is not assigned to any partition (unassigned: {missing:?})"
            )));
        }
        Ok(PartitionMap {
            assignment,
            num_partitions: s,
        })
    }

    /// Builds a map from a per-class assignment (`assignment[c]` in `1..=S`).
    pub fn from_assignment(assignment: Vec<PartitionId>, num_partitions: usize) -> Result<Self> {
        let mut partitions = vec![Vec::new(); num_partitions];
        for (c, &p) in assignment.iter().enumerate() {
            if p == 0 || p as usize > num_partitions {
                return Err(Error::validation(format!(
                    "class {c} assigned to partition {p}, outside [1, {num_partitions}]"
                )));
            }
            partitions[p as usize - 1].push(c);
        }
        Self::from_config(&PartitionConfig {
            num_classes: assignment.len(),
            partitions,
        })
    }

    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PartitionConfig =
            serde_json::from_str(text).map_err(|e| Error::json("partition config", e))?;
        Self::from_config(&cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn to_config(&self) -> PartitionConfig {
        let mut partitions = vec![Vec::new(); self.num_partitions];
        for (c, &p) in self.assignment.iter().enumerate() {
            partitions[p as usize - 1].push(c);
        }
        PartitionConfig {
            num_classes: self.assignment.len(),
            partitions,
        }
    }

    pub fn num_classes(&self) -> usize {
        self.assignment.len()
    }

    pub fn num_partitions(&self) -> usize {
        self.num_partitions
    }

    /// The subset mapping: partition containing class `c`.
    pub fn partition_of(&self, c: usize) -> Result<PartitionId> {
        self.assignment.get(c).copied().ok_or_else(|| {
            Error::validation(format!(
                "class {c} out of range [0, {})",
                self.assignment.len()
            ))
        })
    }

    pub fn partition_size(&self, p: PartitionId) -> usize {
        self.assignment.iter().filter(|&&q| q == p).count()
    }

    /// Union of the partitions of the given top-k classes.
    pub fn domain_of_topk(&self, topk: &[usize]) -> Result<DomainSet> {
        if topk.is_empty() {
            return Err(Error::validation("top-k class list is empty"));
        }
        let mut parts = Vec::with_capacity(topk.len());
        for &c in topk {
            parts.push(self.partition_of(c)?);
        }
        parts.sort_unstable();
        parts.dedup();
        Ok(DomainSet(parts))
    }

    /// True if class `c` belongs to one of the partitions in `domain`.
    pub fn class_in_domain(&self, c: usize, domain: &DomainSet) -> bool {
        match self.assignment.get(c) {
            Some(p) => domain.contains(*p),
            None => false,
        }
    }
}

/// Non-empty, strictly ascending set of partition indices.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct DomainSet(Vec<PartitionId>);

impl DomainSet {
    pub fn new(mut indices: Vec<PartitionId>) -> Result<Self> {
        if indices.is_empty() {
            return Err(Error::validation("domain set must be non-empty"));
        }
        if indices.contains(&0) {
            return Err(Error::validation("partition indices are 1-based"));
        }
        indices.sort_unstable();
        let len = indices.len();
        indices.dedup();
        if indices.len() != len {
            return Err(Error::validation(format!(
                "duplicate partition index in domain {indices:?}"
            )));
        }
        Ok(DomainSet(indices))
    }

    pub fn indices(&self) -> &[PartitionId] {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.len()
    }

    pub fn is_empty(&self) -> bool {
        self.0.is_empty()
    }

    pub fn contains(&self, p: PartitionId) -> bool {
        self.0.binary_search(&p).is_ok()
    }

    /// Checks the domain against a partition count and routing width.
    pub fn check(&self, num_partitions: usize, k: usize) -> Result<()> {
        if self.0.len() > k {
            return Err(Error::validation(format!(
                "domain {self} has more than k={k} partitions"
            )));
        }
        if let Some(&p) = self.0.last() {
            if p as usize > num_partitions {
                return Err(Error::validation(format!(
                    "domain {self} references partition {p} > S={num_partitions}"
                )));
            }
        }
        Ok(())
    }
}

impl fmt::Display for DomainSet {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        for (i, p) in self.0.iter().enumerate() {
            if i > 0 {
                f.write_str("+")?;
            }
            write!(f, "{p}")?;
        }
        Ok(())
    }
}

impl FromStr for DomainSet {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let indices = s
            .split('+')
            .map(|t| {
                t.trim()
                    .parse::<PartitionId>()
                    .map_err(|_| Error::validation(format!("bad domain id {s:?}")))
            })
            .collect::<Result<Vec<_>>>()?;
        let d = DomainSet::new(indices)?;
        if d.to_string() != s.trim() {
            return Err(Error::validation(format!(
                "domain id {s:?} is not in canonical ascending form"
            )));
        }
        Ok(d)
    }
}

impl Serialize for DomainSet {
    fn serialize<S: serde::Serializer>(&self, serializer: S) -> Result<S::Ok, S::Error> {
        self.0.serialize(serializer)
    }
}

impl<'de> Deserialize<'de> for DomainSet {
    fn deserialize<D: serde::Deserializer<'de>>(deserializer: D) -> Result<Self, D::Error> {
        let v = Vec::<PartitionId>::deserialize(deserializer)?;
        DomainSet::new(v).map_err(serde::de::Error::custom)
    }
}

/// Number of experts needed to cover every routing outcome: sum of C(S, i) for i in 1..=k.
pub fn expert_count(num_partitions: usize, k: usize) -> u128 {
    let mut total = 0u128;
    let mut binom = 1u128;
    for i in 1..=k.min(num_partitions) {
        binom = binom * (num_partitions - i + 1) as u128 / i as u128;
        total += binom;
    }
    total
}

/// Every domain of cardinality 1..=k over partitions 1..=S, ordered by
/// cardinality and then lexicographically.
pub fn enumerate_expert_domains(num_partitions: usize, k: usize) -> Result<Vec<DomainSet>> {
    if num_partitions == 0 {
        return Err(Error::validation("S must be at least 1"));
    }
    if k == 0 || k > num_partitions {
        return Err(Error::validation(format!(
            "k must satisfy 1 <= k <= S (k={k}, S={num_partitions})"
        )));
    }
    if num_partitions > PartitionId::MAX as usize {
        return Err(Error::validation(format!("S={num_partitions} too large")));
    }
    let mut out = Vec::new();
    let mut combo: Vec<PartitionId> = Vec::with_capacity(k);
    for size in 1..=k {
        // lexicographic combinations of `size` elements from 1..=S
        combo.clear();
        combo.extend(1..=size as PartitionId);
        loop {
            out.push(DomainSet(combo.clone()));
            let s = num_partitions as PartitionId;
            let mut i = size;
            while i > 0 && combo[i - 1] == s - (size - i) as PartitionId {
                i -= 1;
            }
            if i == 0 {
                break;
            }
            combo[i - 1] += 1;
            for j in i..size {
                combo[j] = combo[j - 1] + 1;
            }
        }
    }
    Ok(out)
}
