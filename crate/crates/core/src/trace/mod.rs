//! Prediction traces: per-model logit matrices over a labeled sample set.
//!
//! A trace stands in for a deployed classifier. Routing only ever looks at a
//! row of edge logits; refinement only ever looks at a row of expert logits.

mod io;
pub mod synth;

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::partition::{enumerate_expert_domains, DomainSet, PartitionMap};

pub use io::{read_labels, read_logits, write_labels, write_logits, TraceEntry, TraceManifest, ExpertEntry};

/// Logits of one model over `num_samples` rows and `num_classes` columns.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictionTrace {
    name: String,
    num_classes: usize,
    logits: Vec<f32>,
    labels: Vec<u32>,
}

impl PredictionTrace {
    pub fn new(
        name: impl Into<String>,
        num_classes: usize,
        logits: Vec<f32>,
        labels: Vec<u32>,
    ) -> Result<Self> {
        let name = name.into();
        if num_classes == 0 {
            return Err(Error::validation(format!("{name}: num_classes is zero")));
        }
        let expected = labels.len() * num_classes;
        if logits.len() != expected {
            return Err(Error::Shape {
                what: format!("{name} logits"),
                expected: (expected * 4) as u64,
                actual: (logits.len() * 4) as u64,
            });
        }
        if let Some(i) = labels.iter().position(|&y| y as usize >= num_classes) {
            return Err(Error::validation(format!(
                "{name}: label {} at row {i} out of range [0, {num_classes})",
                labels[i]
            )));
        }
        if let Some(i) = logits.iter().position(|x| !x.is_finite()) {
            return Err(Error::NonFinite {
                file: name,
                offset: (i * 4) as u64,
            });
        }
        Ok(PredictionTrace {
            name,
            num_classes,
            logits,
            labels,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn num_samples(&self) -> usize {
        self.labels.len()
    }

    pub fn num_classes(&self) -> usize {
        self.num_classes
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn label(&self, i: usize) -> usize {
        self.labels[i] as usize
    }

    pub fn logits(&self) -> &[f32] {
        &self.logits
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.logits[i * self.num_classes..(i + 1) * self.num_classes]
    }

    pub fn rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        self.logits.chunks_exact(self.num_classes)
    }

    pub fn renamed(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    fn permuted(&self, order: &[usize]) -> Self {
        let n = self.num_classes;
        let mut logits = Vec::with_capacity(self.logits.len());
        let mut labels = Vec::with_capacity(self.labels.len());
        for &i in order {
            logits.extend_from_slice(self.row(i));
            labels.push(self.labels[i]);
        }
        PredictionTrace {
            name: self.name.clone(),
            num_classes: n,
            logits,
            labels,
        }
    }
}

/// Numerically stable softmax of one logit row.
pub fn softmax_row<T: Copy + Into<f64>>(row: &[T]) -> Result<Vec<f64>> {
    if row.is_empty() {
        return Err(Error::validation("softmax of an empty row"));
    }
    let max = row
        .iter()
        .map(|&x| x.into())
        .fold(f64::NEG_INFINITY, f64::max);
    let mut out: Vec<f64> = row.iter().map(|&x| (x.into() - max).exp()).collect();
    let sum: f64 = out.iter().sum();
    for p in &mut out {
        *p /= sum;
    }
    Ok(out)
}

/// Maximum softmax probability.
pub fn confidence(probs: &[f64]) -> f64 {
    probs.iter().copied().fold(0.0, f64::max)
}

/// Index of the largest entry; the lowest index wins ties.
pub fn argmax<T: Copy + PartialOrd>(row: &[T]) -> Option<usize> {
    let mut best: Option<(usize, T)> = None;
    for (i, &x) in row.iter().enumerate() {
        match best {
            Some((_, b)) if !(x > b) => {}
            _ => best = Some((i, x)),
        }
    }
    best.map(|(i, _)| i)
}

/// Indices of the `k` largest probabilities, descending, ties by ascending index.
pub fn topk_indices(probs: &[f64], k: usize) -> Result<Vec<usize>> {
    if k > probs.len() {
        return Err(Error::validation(format!(
            "k={k} exceeds the number of classes {}",
            probs.len()
        )));
    }
    let mut out: Vec<usize> = Vec::with_capacity(k);
    // selection keeps this O(N k); k is small in practice
    for _ in 0..k {
        let mut best: Option<usize> = None;
        for (i, &p) in probs.iter().enumerate() {
            if out.contains(&i) {
                continue;
            }
            match best {
                Some(b) if !(p > probs[b]) => {}
                _ => best = Some(i),
            }
        }
        out.push(best.expect("k <= N"));
    }
    Ok(out)
}

/// 1-based rank of `class` in the row under the top-k ordering.
pub fn rank_of(probs: &[f64], class: usize) -> usize {
    let pc = probs[class];
    1 + probs
        .iter()
        .enumerate()
        .filter(|&(i, &p)| p > pc || (p == pc && i < class))
        .count()
}

/// Fraction of rows whose label is among the top-k predictions.
pub fn topk_accuracy(trace: &PredictionTrace, k: usize) -> Result<f64> {
    if k > trace.num_classes() {
        return Err(Error::validation(format!(
            "k={k} exceeds the number of classes {}",
            trace.num_classes()
        )));
    }
    if trace.num_samples() == 0 {
        return Ok(0.0);
    }
    let mut hits = 0usize;
    for (i, row) in trace.rows().enumerate() {
        let probs = softmax_row(row)?;
        if rank_of(&probs, trace.label(i)) <= k {
            hits += 1;
        }
    }
    Ok(hits as f64 / trace.num_samples() as f64)
}

/// Top-k accuracy minus top-1 accuracy.
pub fn recall_gap(trace: &PredictionTrace, k: usize) -> Result<f64> {
    if k < 2 {
        return Err(Error::validation(format!("recall gap needs k >= 2, got {k}")));
    }
    let gap = topk_accuracy(trace, k)? - topk_accuracy(trace, 1)?;
    Ok(gap.max(0.0))
}

/// Edge trace plus one expert trace per routable domain.
#[derive(Debug, Clone, PartialEq)]
pub struct TraceSet {
    pub edge: PredictionTrace,
    pub experts: BTreeMap<DomainSet, PredictionTrace>,
    /// Near-edge generalist, used for the Near-Edge-Only baseline.
    pub generalist: Option<PredictionTrace>,
}

impl TraceSet {
    pub fn new(
        edge: PredictionTrace,
        experts: BTreeMap<DomainSet, PredictionTrace>,
        generalist: Option<PredictionTrace>,
    ) -> Result<Self> {
        let ts = TraceSet {
            edge,
            experts,
            generalist,
        };
        for t in ts.experts.values().chain(ts.generalist.iter()) {
            ts.check_consistent(t)?;
        }
        Ok(ts)
    }

    fn check_consistent(&self, t: &PredictionTrace) -> Result<()> {
        let e = &self.edge;
        if t.num_classes() != e.num_classes() || t.num_samples() != e.num_samples() {
            return Err(Error::validation(format!(
                "trace {} is {}x{}, edge trace {} is {}x{}",
                t.name(),
                t.num_samples(),
                t.num_classes(),
                e.name(),
                e.num_samples(),
                e.num_classes()
            )));
        }
        if t.labels() != e.labels() {
            let i = t
                .labels()
                .iter()
                .zip(e.labels())
                .position(|(a, b)| a != b)
                .unwrap_or(0);
            return Err(Error::validation(format!(
                "trace {} disagrees with edge labels at row {i}",
                t.name()
            )));
        }
        Ok(())
    }

    /// Coverage check against the partition map and routing width.
    pub fn validate(&self, pm: &PartitionMap, k: usize) -> Result<()> {
        if self.edge.num_classes() != pm.num_classes() {
            return Err(Error::validation(format!(
                "traces have {} classes but the partition map has {}",
                self.edge.num_classes(),
                pm.num_classes()
            )));
        }
        for d in self.experts.keys() {
            d.check(pm.num_partitions(), k)?;
        }
        for d in enumerate_expert_domains(pm.num_partitions(), k)? {
            if !self.experts.contains_key(&d) {
                return Err(Error::MissingExpert(d.to_string()));
            }
        }
        Ok(())
    }

    pub fn expert(&self, domain: &DomainSet) -> Result<&PredictionTrace> {
        self.experts
            .get(domain)
            .ok_or_else(|| Error::MissingExpert(domain.to_string()))
    }

    pub fn num_samples(&self) -> usize {
        self.edge.num_samples()
    }

    pub fn num_classes(&self) -> usize {
        self.edge.num_classes()
    }

    /// Applies one seeded permutation to every member trace.
    pub fn shuffled(&self, seed: u64) -> Self {
        let mut order: Vec<usize> = (0..self.num_samples()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        TraceSet {
            edge: self.edge.permuted(&order),
            experts: self
                .experts
                .iter()
                .map(|(d, t)| (d.clone(), t.permuted(&order)))
                .collect(),
            generalist: self.generalist.as_ref().map(|t| t.permuted(&order)),
        }
    }

    /// Every expert replaced by the same trace (generalist co-inference).
    pub fn with_uniform_experts(&self, pm: &PartitionMap, k: usize, t: &PredictionTrace) -> Result<Self> {
        let experts = enumerate_expert_domains(pm.num_partitions(), k)?
            .into_iter()
            .map(|d| (d, t.clone()))
            .collect();
        TraceSet::new(self.edge.clone(), experts, self.generalist.clone())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn trace(rows: &[&[f32]], labels: &[u32]) -> PredictionTrace {
        let n = rows[0].len();
        PredictionTrace::new("t", n, rows.concat(), labels.to_vec()).unwrap()
    }

    #[test]
    fn softmax_examples() {
        assert_eq!(softmax_row(&[0.0f32, 0.0]).unwrap(), vec![0.5, 0.5]);
        let p = softmax_row(&[1.0f64, 0.0]).unwrap();
        let e = std::f64::consts::E;
        assert!((p[0] - e / (e + 1.0)).abs() < 1e-12);
        assert!((p[0] - 0.731059).abs() < 1e-6 && (p[1] - 0.268941).abs() < 1e-6);
        let p = softmax_row(&[1000.0f32, 0.0]).unwrap();
        assert_eq!(p[0], 1.0);
        assert!(p[1] >= 0.0 && p[1] < 1e-300);
        assert!(softmax_row::<f32>(&[]).is_err());
    }

    #[test]
    fn confidence_examples() {
        assert_eq!(confidence(&[0.5, 0.5]), 0.5);
        assert_eq!(confidence(&[0.7311, 0.2689]), 0.7311);
        assert_eq!(confidence(&[0.0, 1.0, 0.0]), 1.0);
    }

    #[test]
    fn topk_examples() {
        assert_eq!(topk_indices(&[0.1, 0.7, 0.2], 2).unwrap(), vec![1, 2]);
        assert_eq!(topk_indices(&[0.5, 0.5], 1).unwrap(), vec![0]);
        let mut all = topk_indices(&[0.2, 0.1, 0.4, 0.3], 4).unwrap();
        assert_eq!(all, vec![2, 3, 0, 1]);
        all.sort();
        assert_eq!(all, vec![0, 1, 2, 3]);
        assert!(topk_indices(&[0.5, 0.5], 3).is_err());
    }

    #[test]
    fn argmax_ties_go_low() {
        assert_eq!(argmax(&[0.1, 0.9]), Some(1));
        assert_eq!(argmax(&[0.5, 0.5]), Some(0));
        assert_eq!(argmax::<f64>(&[]), None);
    }

    #[test]
    fn hand_trace_accuracy_and_gap() {
        // labels hit at ranks 1, 2 and 4
        let t = trace(
            &[
                &[4.0, 3.0, 2.0, 1.0],
                &[4.0, 3.0, 2.0, 1.0],
                &[4.0, 3.0, 2.0, 1.0],
            ],
            &[0, 1, 3],
        );
        assert!((topk_accuracy(&t, 1).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!((topk_accuracy(&t, 2).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert!((topk_accuracy(&t, 3).unwrap() - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(topk_accuracy(&t, 4).unwrap(), 1.0);
        assert!((recall_gap(&t, 2).unwrap() - 1.0 / 3.0).abs() < 1e-15);
        assert!(recall_gap(&t, 1).is_err());
        assert!(topk_accuracy(&t, 5).is_err());
    }

    #[test]
    fn perfect_trace() {
        let t = trace(&[&[5.0, 0.0, 0.0], &[0.0, 0.0, 5.0]], &[0, 2]);
        assert_eq!(topk_accuracy(&t, 1).unwrap(), 1.0);
        assert_eq!(recall_gap(&t, 2).unwrap(), 0.0);
        assert_eq!(recall_gap(&t, 3).unwrap(), 0.0);
    }

    #[test]
    fn rejects_bad_traces() {
        assert!(PredictionTrace::new("x", 2, vec![0.0; 3], vec![0, 1]).is_err());
        assert!(PredictionTrace::new("x", 2, vec![0.0; 4], vec![0, 2]).is_err());
        let e = PredictionTrace::new("x", 2, vec![0.0, f32::NAN, 0.0, 0.0], vec![0, 1]).unwrap_err();
        assert!(matches!(e, Error::NonFinite { offset: 4, .. }));
    }

    #[test]
    fn shuffle_keeps_rows_aligned() {
        let edge = trace(&[&[1.0, 0.0], &[0.0, 1.0], &[2.0, 0.0]], &[0, 1, 0]);
        let expert = edge.clone().renamed("x");
        let mut experts = BTreeMap::new();
        experts.insert(DomainSet::new(vec![1]).unwrap(), expert);
        let ts = TraceSet::new(edge, experts, None).unwrap();
        let sh = ts.shuffled(7);
        assert_eq!(sh.shuffled(7).edge.num_samples(), 3);
        let ex = sh.experts.values().next().unwrap();
        for i in 0..3 {
            assert_eq!(sh.edge.row(i), ex.row(i));
            assert_eq!(sh.edge.label(i), ex.label(i));
        }
        assert_eq!(ts.shuffled(7).edge, sh.edge);
    }
}
