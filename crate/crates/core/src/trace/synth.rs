//! Calibration-controlled synthetic traces.
//!
//! Row construction, for a trace with `N` classes:
//!
//! 1. Labels come from their own stream (`seed::fork(seed, 0)`): one
//!    `index(N)` draw per row.
//! 2. Rows come from `seed::fork(seed, 1)`. Per row, in this order:
//!    `z_conf = normal()`, `z_aux = normal()`, then `N - 1` draws for a
//!    Fisher-Yates shuffle of the non-label classes (for `i` from `N - 2`
//!    down to 1, swap `i` with `index(i + 1)`).
//! 3. Confidence: `u = Phi(z_conf)` is pushed through the piecewise-linear
//!    inverse of the confidence CDF with knots `(1/N, 0)`, every target
//!    `(tau, alpha)` and `(1, 1)`. The result is clamped to
//!    `[1/N + 1e-3 (1 - 1/N), 1 - 1e-9]`.
//! 4. Rank of the true label: `v = 1 - Phi(rho z_conf + sqrt(1 - rho^2) z_aux)`.
//!    With cumulative targets `a_1 <= .. <= a_K`, the rank is the first `j`
//!    with `v < a_j`; otherwise `K + 1 + floor((v - a_K) / (1 - a_K) (N - K))`,
//!    capped at `N`. `rho` couples confidence to correctness; both marginals are
//!    exact in distribution for any `rho`.
//! 5. Logits: the shuffled distractors fill every rank except the label's.
//!    The class at rank `j >= 2` gets logit `-(j - 2) delta`, the rank-1 class
//!    gets `ln(S0 p / (1 - p))` with `S0 = sum_{j=0}^{N-2} exp(-j delta)`, so
//!    its softmax probability is exactly `p`. `delta` is 0.05 unless that makes
//!    `S0 <= (1 - p) / p`; then `delta` is bisected (100 steps on `[0, 0.05]`)
//!    until `S0` reaches the midpoint of `(1 - p) / p` and `N - 1`.
//! 6. Logits are stored as f32.

use serde::{Deserialize, Serialize};
use statrs::distribution::{ContinuousCDF, Normal};

use super::{PredictionTrace, TraceSet};
use crate::error::{Error, Result};
use crate::partition::{enumerate_expert_domains, DomainSet, PartitionMap};
use crate::seed;

const DEFAULT_DELTA: f64 = 0.05;

/// Targets the synthesizer reproduces in distribution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CalibrationTargets {
    /// Cumulative top-k accuracies for k = 1, 2, ...
    pub topk_accuracy: Vec<f64>,
    /// `(tau, alpha)` pairs: fraction of rows with confidence below `tau`.
    #[serde(default)]
    pub confidence_quantiles: Vec<(f64, f64)>,
    /// Gaussian-copula correlation between confidence and correctness.
    #[serde(default = "default_rho")]
    pub rank_correlation: f64,
}

fn default_rho() -> f64 {
    0.6
}

impl CalibrationTargets {
    /// DeiT-3H on CIFAR-100: top-1/2/3 accuracy and the measured offload
    /// proportions at six thresholds.
    pub fn deit3h_cifar100() -> Self {
        CalibrationTargets {
            topk_accuracy: vec![0.8016, 0.8973, 0.9340],
            confidence_quantiles: vec![
                (0.50, 0.133),
                (0.60, 0.208),
                (0.70, 0.278),
                (0.80, 0.358),
                (0.90, 0.462),
                (0.99, 0.747),
            ],
            rank_correlation: default_rho(),
        }
    }

    /// Targets with only a top-k profile and a flat confidence CDF.
    pub fn accuracy_only(topk_accuracy: Vec<f64>) -> Self {
        CalibrationTargets {
            topk_accuracy,
            confidence_quantiles: Vec::new(),
            rank_correlation: default_rho(),
        }
    }

    pub fn validate(&self, num_classes: usize) -> Result<()> {
        let n = num_classes;
        if n < 2 {
            return Err(Error::validation("synthetic traces need at least 2 classes"));
        }
        let acc = &self.topk_accuracy;
        if acc.is_empty() {
            return Err(Error::validation("at least a top-1 accuracy target is required"));
        }
        if acc.len() > n {
            return Err(Error::validation(format!(
                "{} top-k targets for only {n} classes",
                acc.len()
            )));
        }
        let mut prev = 0.0;
        for (i, &a) in acc.iter().enumerate() {
            if !(0.0..=1.0).contains(&a) {
                return Err(Error::validation(format!("top-{} target {a} outside [0, 1]", i + 1)));
            }
            if a < prev {
                return Err(Error::validation(format!(
                    "top-{} target {a} below top-{} target {prev}",
                    i + 1,
                    i
                )));
            }
            prev = a;
        }
        if acc.len() == n && prev < 1.0 {
            return Err(Error::validation(format!("top-{n} accuracy must be 1 with {n} classes")));
        }
        let mut prev = (0.0, 0.0);
        for &(tau, alpha) in &self.confidence_quantiles {
            if !(tau > 0.0 && tau <= 1.0) || !(0.0..=1.0).contains(&alpha) {
                return Err(Error::validation(format!(
                    "confidence target ({tau}, {alpha}) outside (0, 1] x [0, 1]"
                )));
            }
            if tau <= prev.0 || alpha < prev.1 {
                return Err(Error::validation(format!(
                    "confidence targets must have increasing tau and non-decreasing alpha at ({tau}, {alpha})"
                )));
            }
            if tau <= 1.0 / n as f64 && alpha > 0.0 {
                return Err(Error::validation(format!(
                    "alpha({tau}) = {alpha} is impossible: confidence is at least 1/{n}"
                )));
            }
            if tau == 1.0 && alpha < 1.0 {
                return Err(Error::validation("alpha(1) must be 1"));
            }
            prev = (tau, alpha);
        }
        if !(-1.0..=1.0).contains(&self.rank_correlation) {
            return Err(Error::validation(format!(
                "rank_correlation {} outside [-1, 1]",
                self.rank_correlation
            )));
        }
        Ok(())
    }

    fn confidence_knots(&self, n: usize) -> Vec<(f64, f64)> {
        let floor = 1.0 / n as f64;
        let mut knots = vec![(floor, 0.0)];
        for &(tau, alpha) in &self.confidence_quantiles {
            if tau > floor {
                knots.push((tau, alpha));
            }
        }
        if knots.last().unwrap().0 < 1.0 {
            knots.push((1.0, 1.0));
        }
        knots
    }
}

fn inverse_cdf(knots: &[(f64, f64)], u: f64) -> f64 {
    for w in knots.windows(2) {
        let ((t0, a0), (t1, a1)) = (w[0], w[1]);
        if u < a1 && a1 > a0 {
            return t0 + (u - a0) / (a1 - a0) * (t1 - t0);
        }
    }
    knots.last().unwrap().0
}

fn rank_from_quantile(acc: &[f64], v: f64, n: usize) -> usize {
    for (j, &a) in acc.iter().enumerate() {
        if v < a {
            return j + 1;
        }
    }
    let k = acc.len();
    let last = acc[k - 1];
    if k >= n || last >= 1.0 {
        return k.min(n);
    }
    let w = (v - last) / (1.0 - last);
    (k + 1 + (w * (n - k) as f64) as usize).min(n)
}

fn geometric_sum(delta: f64, terms: usize) -> f64 {
    (0..terms).map(|j| (-(j as f64) * delta).exp()).sum()
}

/// Logits in rank order (rank 1 first) whose softmax maximum is exactly `p`.
fn ranked_logits(p: f64, n: usize) -> Vec<f64> {
    let ratio = (1.0 - p) / p;
    let terms = n - 1;
    let mut delta = DEFAULT_DELTA;
    let mut s0 = geometric_sum(delta, terms);
    if s0 <= ratio {
        let target = 0.5 * (ratio + terms as f64);
        let (mut lo, mut hi) = (0.0, DEFAULT_DELTA);
        for _ in 0..100 {
            let mid = 0.5 * (lo + hi);
            if geometric_sum(mid, terms) >= target {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        delta = lo;
        s0 = geometric_sum(delta, terms);
    }
    let mut out = Vec::with_capacity(n);
    out.push((s0 / ratio).ln());
    out.extend((0..terms).map(|j| -(j as f64) * delta));
    out
}

/// Shuffled non-label classes, per the documented Fisher-Yates order.
fn shuffled_distractors(rng: &mut impl rand::RngCore, label: usize, n: usize) -> Vec<usize> {
    let mut others: Vec<usize> = (0..n).filter(|&c| c != label).collect();
    for i in (1..others.len()).rev() {
        let j = seed::index(rng, i + 1);
        others.swap(i, j);
    }
    others
}

fn write_row(out: &mut Vec<f32>, label: usize, rank: usize, p: f64, others: &[usize], n: usize) {
    let ranked = ranked_logits(p, n);
    let start = out.len();
    out.resize(start + n, 0.0);
    let row = &mut out[start..];
    let mut it = others.iter();
    for (r, &logit) in ranked.iter().enumerate() {
        let class = if r + 1 == rank {
            label
        } else {
            *it.next().expect("N - 1 distractors")
        };
        row[class] = logit as f32;
    }
}

fn clamp_conf(p: f64, n: usize) -> f64 {
    let floor = 1.0 / n as f64;
    p.clamp(floor + 1e-3 * (1.0 - floor), 1.0 - 1e-9)
}

/// Uniform labels from the label stream of `seed`.
pub fn synthesize_labels(num_samples: usize, num_classes: usize, seed: u64) -> Vec<u32> {
    let mut rng = seed::rng(seed::fork(seed, 0));
    (0..num_samples)
        .map(|_| seed::index(&mut rng, num_classes) as u32)
        .collect()
}

/// Calibrated rows over given labels, from the row stream of `seed`.
pub fn synthesize_rows(
    name: &str,
    targets: &CalibrationTargets,
    labels: Vec<u32>,
    num_classes: usize,
    seed: u64,
) -> Result<PredictionTrace> {
    let n = num_classes;
    targets.validate(n)?;
    let knots = targets.confidence_knots(n);
    let std_normal = Normal::new(0.0, 1.0).expect("unit normal");
    let rho = targets.rank_correlation;
    let rho_c = (1.0 - rho * rho).max(0.0).sqrt();
    let mut rng = seed::rng(seed::fork(seed, 1));
    let mut logits = Vec::with_capacity(labels.len() * n);
    for &y in &labels {
        let y = y as usize;
        let z_conf = seed::normal(&mut rng);
        let z_aux = seed::normal(&mut rng);
        let others = shuffled_distractors(&mut rng, y, n);
        let p = clamp_conf(inverse_cdf(&knots, std_normal.cdf(z_conf)), n);
        let v = 1.0 - std_normal.cdf(rho * z_conf + rho_c * z_aux);
        let rank = rank_from_quantile(&targets.topk_accuracy, v, n);
        write_row(&mut logits, y, rank, p, &others, n);
    }
    PredictionTrace::new(name, n, logits, labels)
}

/// Synthetic trace reproducing the given top-k and confidence marginals.
pub fn synthesize_trace(
    targets: &CalibrationTargets,
    num_samples: usize,
    num_classes: usize,
    seed: u64,
) -> Result<PredictionTrace> {
    targets.validate(num_classes)?;
    let labels = synthesize_labels(num_samples, num_classes, seed);
    synthesize_rows("synthetic", targets, labels, num_classes, seed)
}

/// Top-1 accuracy of a synthetic expert inside and outside its domain.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ExpertQuality {
    pub in_domain_top1: f64,
    pub out_domain_top1: f64,
}

impl Default for ExpertQuality {
    fn default() -> Self {
        ExpertQuality {
            in_domain_top1: 0.90,
            out_domain_top1: 0.80,
        }
    }
}

/// Expert trace: per row one `uniform()` decides correctness against the
/// in- or out-of-domain target, one `uniform()` picks the confidence
/// `1/N + (1 - 1/N)(0.5 + 0.45 u)`, then wrong rows draw their rank with
/// `2 + index(N - 1)` before the distractor shuffle.
pub fn synthesize_expert(
    name: &str,
    labels: &[u32],
    num_classes: usize,
    pm: &PartitionMap,
    domain: &DomainSet,
    quality: ExpertQuality,
    seed: u64,
) -> Result<PredictionTrace> {
    for (what, q) in [
        ("in_domain_top1", quality.in_domain_top1),
        ("out_domain_top1", quality.out_domain_top1),
    ] {
        if !(0.0..=1.0).contains(&q) {
            return Err(Error::validation(format!("{what} = {q} outside [0, 1]")));
        }
    }
    let n = num_classes;
    if n < 2 {
        return Err(Error::validation("synthetic traces need at least 2 classes"));
    }
    let floor = 1.0 / n as f64;
    let mut rng = seed::rng(seed);
    let mut logits = Vec::with_capacity(labels.len() * n);
    for &y in labels {
        let y = y as usize;
        let target = if pm.class_in_domain(y, domain) {
            quality.in_domain_top1
        } else {
            quality.out_domain_top1
        };
        let correct = seed::uniform(&mut rng) < target;
        let p = clamp_conf(floor + (1.0 - floor) * (0.5 + 0.45 * seed::uniform(&mut rng)), n);
        let rank = if correct { 1 } else { 2 + seed::index(&mut rng, n - 1) };
        let others = shuffled_distractors(&mut rng, y, n);
        write_row(&mut logits, y, rank, p, &others, n);
    }
    PredictionTrace::new(name, n, logits, labels.to_vec())
}

/// Expert that always puts a margin of 20 on the true label.
pub fn oracle_trace(name: &str, labels: &[u32], num_classes: usize) -> Result<PredictionTrace> {
    let mut logits = vec![0.0f32; labels.len() * num_classes];
    for (i, &y) in labels.iter().enumerate() {
        logits[i * num_classes + y as usize] = 20.0;
    }
    PredictionTrace::new(name, num_classes, logits, labels.to_vec())
}

/// Everything needed to synthesize a full trace set.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TraceSetSpec {
    pub num_samples: usize,
    pub edge: CalibrationTargets,
    #[serde(default)]
    pub expert: ExpertQuality,
    #[serde(default)]
    pub generalist: Option<CalibrationTargets>,
}

/// Edge, one expert per routable domain, and optionally a near-edge generalist,
/// all sharing one label vector. Streams: edge uses `seed`; expert `i` (in
/// enumeration order) uses `fork(seed, 100 + i)`; the generalist uses
/// `fork(seed, 99)` for its rows.
pub fn synthesize_trace_set(
    spec: &TraceSetSpec,
    pm: &PartitionMap,
    k: usize,
    seed: u64,
) -> Result<TraceSet> {
    let n = pm.num_classes();
    spec.edge.validate(n)?;
    let labels = synthesize_labels(spec.num_samples, n, seed);
    let edge = synthesize_rows("edge", &spec.edge, labels.clone(), n, seed)?;
    let mut experts = std::collections::BTreeMap::new();
    for (i, d) in enumerate_expert_domains(pm.num_partitions(), k)?.into_iter().enumerate() {
        let t = synthesize_expert(
            &format!("expert_{d}"),
            &labels,
            n,
            pm,
            &d,
            spec.expert,
            seed::fork(seed, 100 + i as u64),
        )?;
        experts.insert(d, t);
    }
    let generalist = match &spec.generalist {
        Some(g) => Some(synthesize_rows("generalist", g, labels, n, seed::fork(seed, 99))?),
        None => None,
    };
    TraceSet::new(edge, experts, generalist)
}
