//! Reference implementations used as test oracles. Written independently of
//! the library: plain loops, no shared helpers.

#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::PathBuf;

use covi::partition::PartitionConfig;
use covi::trace::PredictionTrace;
use covi::{DomainSet, PartitionMap, TraceSet};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn repo_root() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../..")
}

pub fn configs_dir() -> PathBuf {
    repo_root().join("configs")
}

pub fn binomial(n: u64, r: u64) -> u64 {
    if r > n {
        return 0;
    }
    let mut acc = 1u64;
    for i in 0..r {
        acc = acc * (n - i) / (i + 1);
    }
    acc
}

/// Every non-empty subset of {1..=s} with at most k members, by bitmask.
pub fn brute_force_domains(s: usize, k: usize) -> Vec<Vec<u16>> {
    let mut out = Vec::new();
    for mask in 1u32..(1u32 << s) {
        if mask.count_ones() as usize <= k {
            out.push((0..s).filter(|b| mask >> b & 1 == 1).map(|b| b as u16 + 1).collect());
        }
    }
    out
}

pub fn ref_softmax(row: &[f32]) -> Vec<f64> {
    let mut m = f64::NEG_INFINITY;
    for &x in row {
        if (x as f64) > m {
            m = x as f64;
        }
    }
    let e: Vec<f64> = row.iter().map(|&x| (x as f64 - m).exp()).collect();
    let mut z = 0.0;
    for v in &e {
        z += v;
    }
    e.into_iter().map(|v| v / z).collect()
}

/// Classes ordered by descending probability, ascending index on ties.
pub fn ref_ranking(p: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..p.len()).collect();
    idx.sort_by(|&a, &b| p[b].partial_cmp(&p[a]).unwrap().then(a.cmp(&b)));
    idx
}

pub fn ref_argmax_f32(row: &[f32]) -> usize {
    let mut best = 0;
    for i in 1..row.len() {
        if row[i] > row[best] {
            best = i;
        }
    }
    best
}

#[derive(Debug, Clone, PartialEq)]
pub struct RefSample {
    pub predicted: usize,
    pub offloaded: bool,
    pub domain: Vec<u16>,
}

/// Per-sample reference of the collaborative pipeline: gate on max softmax,
/// union the top-k classes' partitions, take the expert's argmax.
pub fn ref_collab(
    edge: &[f32],
    experts: &BTreeMap<Vec<u16>, Vec<f32>>,
    assignment: &[u16],
    n: usize,
    tau: f64,
    k: usize,
) -> Vec<RefSample> {
    let m = edge.len() / n;
    let mut out = Vec::with_capacity(m);
    for i in 0..m {
        let row = &edge[i * n..(i + 1) * n];
        let p = ref_softmax(row);
        let order = ref_ranking(&p);
        let conf = p[order[0]];
        if conf >= tau {
            out.push(RefSample {
                predicted: order[0],
                offloaded: false,
                domain: vec![],
            });
            continue;
        }
        let mut dom: Vec<u16> = order[..k].iter().map(|&c| assignment[c]).collect();
        dom.sort();
        dom.dedup();
        let ex = &experts[&dom][i * n..(i + 1) * n];
        out.push(RefSample {
            predicted: ref_argmax_f32(ex),
            offloaded: true,
            domain: dom,
        });
    }
    out
}

/// Random partition of `n` classes into `s` non-empty 1-based partitions.
pub fn random_assignment(rng: &mut ChaCha8Rng, n: usize, s: usize) -> Vec<u16> {
    let mut a: Vec<u16> = (0..n).map(|c| if c < s { c as u16 + 1 } else { rng.gen_range(1..=s as u16) }).collect();
    for i in (1..n).rev() {
        let j = rng.gen_range(0..=i);
        a.swap(i, j);
    }
    a
}

pub fn random_logits(rng: &mut ChaCha8Rng, len: usize, scale: f32) -> Vec<f32> {
    (0..len).map(|_| (rng.gen::<f32>() - 0.5) * 2.0 * scale).collect()
}

pub struct RandomSet {
    pub pm: PartitionMap,
    pub assignment: Vec<u16>,
    pub traces: TraceSet,
    pub edge: Vec<f32>,
    pub experts: BTreeMap<Vec<u16>, Vec<f32>>,
    pub n: usize,
}

/// Random trace set with an expert for every domain of up to `k` partitions.
pub fn random_trace_set(seed: u64, m: usize, n: usize, s: usize, k: usize) -> RandomSet {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let assignment = random_assignment(&mut rng, n, s);
    let mut parts = vec![Vec::new(); s];
    for (c, &p) in assignment.iter().enumerate() {
        parts[p as usize - 1].push(c);
    }
    let pm = PartitionMap::from_config(&PartitionConfig {
        num_classes: n,
        partitions: parts,
    })
    .unwrap();
    let labels: Vec<u32> = (0..m).map(|_| rng.gen_range(0..n as u32)).collect();
    let scale = rng.gen_range(1.0..6.0);
    let edge = random_logits(&mut rng, m * n, scale);
    let mut experts = BTreeMap::new();
    let mut expert_traces = BTreeMap::new();
    for dom in brute_force_domains(s, k) {
        let logits = random_logits(&mut rng, m * n, 4.0);
        let t = PredictionTrace::new("x", n, logits.clone(), labels.clone()).unwrap();
        expert_traces.insert(DomainSet::new(dom.clone()).unwrap(), t);
        experts.insert(dom, logits);
    }
    let edge_trace = PredictionTrace::new("edge", n, edge.clone(), labels).unwrap();
    let traces = TraceSet::new(edge_trace, expert_traces, None).unwrap();
    RandomSet {
        pm,
        assignment,
        traces,
        edge,
        experts,
        n,
    }
}
