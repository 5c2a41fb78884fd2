//! Confidence-gated Top-k routing.
//!
//! A sample whose edge confidence reaches the threshold keeps the edge
//! argmax. Everything else is offloaded to the expert whose domain is the
//! union of the partitions of the edge's top-k classes. The router has no
//! parameters of its own: it reads the edge row, the threshold, `k` and the
//! partition map, nothing else.

use std::borrow::Cow;
use std::collections::BTreeMap;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::{DomainSet, PartitionMap};
use crate::trace::{argmax, confidence, softmax_row, topk_indices, PredictionTrace, TraceSet};

#[derive(Debug, Clone, PartialEq)]
pub enum RoutingDecision {
    Local {
        predicted: usize,
        confidence: f64,
    },
    Offload {
        domain: DomainSet,
        topk: Vec<usize>,
        confidence: f64,
    },
}

impl RoutingDecision {
    pub fn confidence(&self) -> f64 {
        match self {
            RoutingDecision::Local { confidence, .. } | RoutingDecision::Offload { confidence, .. } => {
                *confidence
            }
        }
    }

    pub fn is_offload(&self) -> bool {
        matches!(self, RoutingDecision::Offload { .. })
    }

    pub fn domain(&self) -> Option<&DomainSet> {
        match self {
            RoutingDecision::Offload { domain, .. } => Some(domain),
            RoutingDecision::Local { .. } => None,
        }
    }
}

/// How an expert's output is turned into a class.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RefineMode {
    /// Argmax over the full label space.
    #[default]
    Full,
    /// Argmax restricted to classes inside the routed domain.
    MaskToDomain,
}

fn check_gate(tau: f64, k: usize, num_classes: usize) -> Result<()> {
    if !(0.0..=1.0).contains(&tau) {
        return Err(Error::validation(format!("threshold {tau} outside [0, 1]")));
    }
    if k == 0 || k > num_classes {
        return Err(Error::validation(format!(
            "k={k} must be in [1, {num_classes}]"
        )));
    }
    Ok(())
}

/// Gate one edge row.
pub fn route_sample(row: &[f32], tau: f64, k: usize, pm: &PartitionMap) -> Result<RoutingDecision> {
    check_gate(tau, k, row.len())?;
    let probs = softmax_row(row)?;
    let conf = confidence(&probs);
    if conf >= tau {
        let predicted = argmax(&probs).expect("non-empty row");
        return Ok(RoutingDecision::Local {
            predicted,
            confidence: conf,
        });
    }
    let topk = topk_indices(&probs, k)?;
    let domain = pm.domain_of_topk(&topk)?;
    Ok(RoutingDecision::Offload {
        domain,
        topk,
        confidence: conf,
    })
}

/// Final class from an expert's output row.
pub fn refine(expert_row: &[f32], domain: &DomainSet, pm: &PartitionMap, mode: RefineMode) -> Result<usize> {
    if expert_row.is_empty() {
        return Err(Error::validation("empty expert row"));
    }
    match mode {
        RefineMode::Full => Ok(argmax(expert_row).expect("non-empty")),
        RefineMode::MaskToDomain => {
            let mut best: Option<usize> = None;
            for (c, &x) in expert_row.iter().enumerate() {
                if !pm.class_in_domain(c, domain) {
                    continue;
                }
                match best {
                    Some(b) if !(x > expert_row[b]) => {}
                    _ => best = Some(c),
                }
            }
            best.ok_or_else(|| Error::validation(format!("domain {domain} contains no classes")))
        }
    }
}

/// Identifies a sample for an expert backend.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SampleRef<'a> {
    Index(u64),
    Payload(&'a [u8]),
}

/// Source of expert outputs. Traces are one implementation; a live model
/// runtime would be another with the same per-sample contract.
pub trait ExpertBackend: Send + Sync {
    fn num_classes(&self) -> usize;

    fn has_expert(&self, domain: &DomainSet) -> bool;

    fn expert_logits(&self, domain: &DomainSet, sample: SampleRef<'_>) -> Result<Cow<'_, [f32]>>;
}

impl ExpertBackend for TraceSet {
    fn num_classes(&self) -> usize {
        TraceSet::num_classes(self)
    }

    fn has_expert(&self, domain: &DomainSet) -> bool {
        self.experts.contains_key(domain)
    }

    fn expert_logits(&self, domain: &DomainSet, sample: SampleRef<'_>) -> Result<Cow<'_, [f32]>> {
        let expert = self.expert(domain)?;
        match sample {
            SampleRef::Index(i) if (i as usize) < expert.num_samples() && i <= usize::MAX as u64 => {
                Ok(Cow::Borrowed(expert.row(i as usize)))
            }
            SampleRef::Index(i) => Err(Error::validation(format!(
                "sample index {i} out of range [0, {})",
                expert.num_samples()
            ))),
            SampleRef::Payload(_) => Err(Error::validation(
                "trace backend cannot evaluate raw payloads",
            )),
        }
    }
}

/// Per-sample predictions and aggregate routing statistics.
#[derive(Debug, Clone, PartialEq)]
pub struct CollabOutcome {
    pub predictions: Vec<usize>,
    pub decisions: Vec<RoutingDecision>,
    pub accuracy: f64,
    pub offload_count: usize,
    pub offload_proportion: f64,
    pub histogram: BTreeMap<DomainSet, usize>,
}

impl CollabOutcome {
    /// Aggregates per-sample results against the labels.
    pub fn from_parts(
        predictions: Vec<usize>,
        decisions: Vec<RoutingDecision>,
        labels: &[u32],
    ) -> Self {
        let m = predictions.len();
        let correct = predictions
            .iter()
            .zip(labels)
            .filter(|(&p, &y)| p == y as usize)
            .count();
        let mut histogram = BTreeMap::new();
        for d in decisions.iter().filter_map(|d| d.domain()) {
            *histogram.entry(d.clone()).or_insert(0) += 1;
        }
        let offload_count = decisions.iter().filter(|d| d.is_offload()).count();
        let (accuracy, offload_proportion) = if m == 0 {
            (0.0, 0.0)
        } else {
            (correct as f64 / m as f64, offload_count as f64 / m as f64)
        };
        CollabOutcome {
            predictions,
            decisions,
            accuracy,
            offload_count,
            offload_proportion,
            histogram,
        }
    }
}

/// Routes every sample of the trace set and refines the offloaded ones.
pub fn collaborative_infer(ts: &TraceSet, pm: &PartitionMap, tau: f64, k: usize) -> Result<CollabOutcome> {
    collaborative_infer_with(ts, pm, tau, k, RefineMode::Full)
}

pub fn collaborative_infer_with(
    ts: &TraceSet,
    pm: &PartitionMap,
    tau: f64,
    k: usize,
    mode: RefineMode,
) -> Result<CollabOutcome> {
    check_gate(tau, k, ts.num_classes())?;
    ts.validate(pm, k)?;
    let per_sample: Vec<(usize, RoutingDecision)> = (0..ts.num_samples())
        .into_par_iter()
        .map(|i| {
            let decision = route_sample(ts.edge.row(i), tau, k, pm)?;
            let predicted = match &decision {
                RoutingDecision::Local { predicted, .. } => *predicted,
                RoutingDecision::Offload { domain, .. } => {
                    let expert = ts.expert(domain)?;
                    refine(expert.row(i), domain, pm, mode)?
                }
            };
            Ok((predicted, decision))
        })
        .collect::<Result<_>>()?;
    let (predictions, decisions) = per_sample.into_iter().unzip();
    Ok(CollabOutcome::from_parts(predictions, decisions, ts.edge.labels()))
}

/// Edge confidences, one per sample.
pub fn confidences(edge: &PredictionTrace) -> Result<Vec<f64>> {
    edge.rows().map(|r| softmax_row(r).map(|p| confidence(&p))).collect()
}

/// Offload proportion for each threshold, by exact counting of `conf < tau`.
pub fn offload_proportion_curve(edge: &PredictionTrace, taus: &[f64]) -> Result<Vec<(f64, f64)>> {
    for &t in taus {
        if !(0.0..=1.0).contains(&t) {
            return Err(Error::validation(format!("threshold {t} outside [0, 1]")));
        }
    }
    let mut confs = confidences(edge)?;
    confs.sort_by(f64::total_cmp);
    let m = confs.len();
    Ok(taus
        .iter()
        .map(|&t| {
            let below = confs.partition_point(|&c| c < t);
            let alpha = if m == 0 { 0.0 } else { below as f64 / m as f64 };
            (t, alpha)
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn pm4() -> PartitionMap {
        // classes 0..8, partition = c / 2 + 1
        PartitionMap::from_assignment((0..8).map(|c| (c / 2 + 1) as u16).collect(), 4).unwrap()
    }

    fn logits_with_conf(n: usize, top: &[usize], p: f64) -> Vec<f32> {
        // top[0] gets probability p, top[1] most of the rest
        let mut probs = vec![1e-4; n];
        let rest = 1.0 - p - 1e-4 * (n - top.len()) as f64;
        probs[top[0]] = p;
        for (j, &c) in top.iter().enumerate().skip(1) {
            probs[c] = rest / (top.len() - 1) as f64 * (1.0 - 0.01 * j as f64);
        }
        probs.iter().map(|q| q.ln() as f32).collect()
    }

    #[test]
    fn confident_stays_local() {
        let row = logits_with_conf(8, &[5, 2], 0.95);
        let d = route_sample(&row, 0.9, 2, &pm4()).unwrap();
        match d {
            RoutingDecision::Local { predicted, confidence } => {
                assert_eq!(predicted, 5);
                assert!(confidence > 0.9 && confidence < 1.0);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn uncertain_routes_to_union_domain() {
        // classes 0 and 4 live in partitions 1 and 3
        let row = logits_with_conf(8, &[0, 4], 0.6);
        let d = route_sample(&row, 0.9, 2, &pm4()).unwrap();
        match d {
            RoutingDecision::Offload { domain, topk, .. } => {
                assert_eq!(topk, vec![0, 4]);
                assert_eq!(domain.indices(), &[1, 3]);
            }
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn zero_threshold_is_always_local() {
        let row = vec![0.0f32; 8];
        assert!(!route_sample(&row, 0.0, 2, &pm4()).unwrap().is_offload());
    }

    #[test]
    fn boundary_confidence_stays_local() {
        let row = [0.0f32, 0.0];
        let pm = PartitionMap::from_assignment(vec![1, 2], 2).unwrap();
        assert!(!route_sample(&row, 0.5, 1, &pm).unwrap().is_offload());
        assert!(route_sample(&row, 0.5000001, 1, &pm).unwrap().is_offload());
    }

    #[test]
    fn rejects_bad_gate() {
        let row = vec![0.0f32; 8];
        assert!(route_sample(&row, 1.5, 2, &pm4()).is_err());
        assert!(route_sample(&row, -0.1, 2, &pm4()).is_err());
        assert!(route_sample(&row, 0.5, 0, &pm4()).is_err());
        assert!(route_sample(&row, 0.5, 9, &pm4()).is_err());
    }

    #[test]
    fn refine_examples() {
        let pm = PartitionMap::from_assignment(vec![1, 1, 2, 2], 2).unwrap();
        let d1 = DomainSet::new(vec![1]).unwrap();
        let mut onehot = vec![0.0f32; 10];
        onehot[7] = 1.0;
        let pm10 = PartitionMap::from_assignment((0..10).map(|c| (c % 2 + 1) as u16).collect(), 2).unwrap();
        assert_eq!(refine(&onehot, &d1, &pm10, RefineMode::Full).unwrap(), 7);
        let row = [0.1f32, 0.2, 0.6, 0.1];
        assert_eq!(refine(&row, &d1, &pm, RefineMode::Full).unwrap(), 2);
        // masked to partition 1 = classes {0, 1}
        assert_eq!(refine(&row, &d1, &pm, RefineMode::MaskToDomain).unwrap(), 1);
    }

    #[test]
    fn alpha_curve_by_counting() {
        let rows: Vec<f32> = [0.95, 0.8, 0.5]
            .iter()
            .flat_map(|&p: &f64| [p.ln() as f32, (1.0 - p).ln() as f32])
            .collect();
        // p=0.5 row: both logits equal; confidence 0.5
        let t = PredictionTrace::new("e", 2, rows, vec![0, 0, 0]).unwrap();
        let curve = offload_proportion_curve(&t, &[0.9, 0.0, 1.0]).unwrap();
        assert!((curve[0].1 - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(curve[1].1, 0.0);
        assert_eq!(curve[2].1, 1.0);
        assert!(offload_proportion_curve(&t, &[1.2]).is_err());
    }

    #[test]
    fn trace_backend_errors() {
        let edge = PredictionTrace::new("e", 2, vec![1.0, 0.0], vec![0]).unwrap();
        let d = DomainSet::new(vec![1]).unwrap();
        let mut experts = BTreeMap::new();
        experts.insert(d.clone(), edge.clone());
        let ts = TraceSet::new(edge, experts, None).unwrap();
        assert!(ts.expert_logits(&d, SampleRef::Index(0)).is_ok());
        assert!(ts.expert_logits(&d, SampleRef::Index(1)).is_err());
        assert!(ts.expert_logits(&d, SampleRef::Payload(b"x")).is_err());
        let missing = DomainSet::new(vec![2]).unwrap();
        assert!(matches!(
            ts.expert_logits(&missing, SampleRef::Index(0)),
            Err(Error::MissingExpert(_))
        ));
    }
}
