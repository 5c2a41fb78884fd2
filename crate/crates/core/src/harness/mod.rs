//! Threshold sweeps over a trace set, the Edge-Only and Near-Edge-Only
//! baselines, return-on-investment ratios and report emission.
//!
//! The sample stream is cut into consecutive batches of `batch_size` in trace
//! order. Each batch is gated sample by sample, and its realized offload
//! histogram is charged through [`compose_batch_cost`]. Cost columns are
//! per-batch means; totals are kept alongside.

mod report;

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::cost::{
    compose_batch_cost, AggregationMode, BatchCost, CommModel, CostProfile, NearEdgeProfiles,
    ProfileSet,
};
use crate::error::{Error, Result};
use crate::partition::{DomainSet, PartitionMap};
use crate::router::{collaborative_infer_with, CollabOutcome, RefineMode, RoutingDecision};
use crate::seed;
use crate::trace::{topk_accuracy, TraceSet};

pub use report::{format_sig6, round_sig6, CSV_COLUMNS, REPORT_SCHEMA_VERSION};

/// Names a cost profile.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProfileRef {
    pub device: String,
    pub model: String,
}

impl ProfileRef {
    fn resolve<'a>(&self, set: &'a ProfileSet) -> Result<&'a CostProfile> {
        set.require(&self.device, &self.model)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Baseline {
    #[default]
    EdgeOnly,
    NearEdgeOnly,
}

impl std::str::FromStr for Baseline {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "edge_only" => Ok(Baseline::EdgeOnly),
            "near_edge_only" => Ok(Baseline::NearEdgeOnly),
            _ => Err(Error::validation(format!(
                "unknown baseline {s:?} (edge_only, near_edge_only)"
            ))),
        }
    }
}

impl Baseline {
    pub fn name(&self) -> &'static str {
        match self {
            Baseline::EdgeOnly => "edge_only",
            Baseline::NearEdgeOnly => "near_edge_only",
        }
    }
}

fn default_k() -> usize {
    2
}

fn default_batch() -> usize {
    10
}

/// Sweep configuration. Relative paths resolve against `base_dir`, which the
/// loader sets to the config file's directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SweepConfig {
    pub taus: Vec<f64>,
    #[serde(default = "default_k")]
    pub k: usize,
    pub partition_config: PathBuf,
    pub trace_manifest: PathBuf,
    pub cost_profiles: Vec<PathBuf>,
    /// Edge device running the edge generalist.
    pub edge: ProfileRef,
    /// Shared near-edge profile for every expert.
    pub near: ProfileRef,
    /// Per-expert profile overrides, keyed by domain id such as `"1+3"`.
    #[serde(default)]
    pub expert_profiles: BTreeMap<String, ProfileRef>,
    /// Near-edge generalist for the Near-Edge-Only baseline; defaults to `near`.
    #[serde(default)]
    pub near_generalist: Option<ProfileRef>,
    #[serde(default)]
    pub comm: CommModel,
    #[serde(default)]
    pub aggregation_mode: AggregationMode,
    #[serde(default = "default_batch")]
    pub batch_size: usize,
    #[serde(default)]
    pub normalize_against: Baseline,
    #[serde(default)]
    pub refine_mode: RefineMode,
    /// Shuffle samples (seeded) before batching.
    #[serde(default)]
    pub shuffle: bool,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub output: Option<PathBuf>,
    #[serde(skip)]
    pub base_dir: PathBuf,
}

impl SweepConfig {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self> {
        let mut cfg: SweepConfig =
            serde_json::from_str(text).map_err(|e| Error::json("sweep config", e))?;
        cfg.base_dir = base_dir.into();
        cfg.normalize()?;
        Ok(cfg)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text, base)
    }

    /// Validates and sorts thresholds in descending order.
    pub fn normalize(&mut self) -> Result<()> {
        if let Some(t) = self.taus.iter().find(|t| !(0.0..=1.0).contains(*t)) {
            return Err(Error::validation(format!("threshold {t} outside [0, 1]")));
        }
        self.taus.sort_by(|a, b| b.total_cmp(a));
        if self.batch_size == 0 {
            return Err(Error::validation("batch_size must be at least 1"));
        }
        if self.k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        self.comm.validate()
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_absolute() {
            p.to_path_buf()
        } else {
            self.base_dir.join(p)
        }
    }

    /// Loads partitions, traces and profiles named by the config.
    pub fn load_inputs(&self) -> Result<SweepInputs> {
        let pm = PartitionMap::load(self.resolve(&self.partition_config))?;
        let mut traces = TraceSet::load(self.resolve(&self.trace_manifest))?;
        traces.validate(&pm, self.k)?;
        if self.shuffle {
            traces = traces.shuffled(seed::fork(self.seed, 0x5348_5546));
        }
        let mut profiles = ProfileSet::default();
        for p in &self.cost_profiles {
            profiles.extend(ProfileSet::load(self.resolve(p))?)?;
        }
        Ok(SweepInputs {
            pm,
            traces,
            profiles,
        })
    }
}

/// Validated inputs of a sweep.
#[derive(Debug, Clone)]
pub struct SweepInputs {
    pub pm: PartitionMap,
    pub traces: TraceSet,
    pub profiles: ProfileSet,
}

/// One report row. Cost fields are per-batch means.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub tau: f64,
    pub alpha: f64,
    pub accuracy: f64,
    pub offload_count: usize,
    pub cost: BatchCost,
    pub total: BatchCost,
    pub acc_to_latency: Option<f64>,
    pub acc_to_energy: Option<f64>,
    pub norm_latency: Option<f64>,
    pub norm_energy: Option<f64>,
    /// Offloaded samples per expert, keyed by domain id.
    pub histogram: BTreeMap<String, usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineRow {
    pub name: String,
    /// Missing when no trace for that model was supplied.
    pub accuracy: Option<f64>,
    pub alpha: f64,
    pub cost: BatchCost,
    pub total: BatchCost,
    pub norm_latency: Option<f64>,
    pub norm_energy: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepMeta {
    pub num_samples: usize,
    pub num_classes: usize,
    pub num_partitions: usize,
    pub k: usize,
    pub batch_size: usize,
    pub num_batches: usize,
    pub aggregation_mode: AggregationMode,
    pub refine_mode: RefineMode,
    pub comm: CommModel,
    pub edge_profile: ProfileRef,
    pub near_profile: ProfileRef,
    pub near_generalist_profile: ProfileRef,
    pub normalize_against: String,
    pub seed: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub schema_version: u32,
    pub meta: SweepMeta,
    pub edge_only: BaselineRow,
    pub near_edge_only: BaselineRow,
    pub rows: Vec<SweepRow>,
}

/// Accuracy gain per unit of extra latency and per unit of extra energy.
/// A ratio is `None` when its cost difference is not positive.
pub fn roi_ratios(
    acc_co: f64,
    acc_edge: f64,
    t_co: f64,
    t_edge: f64,
    e_co: f64,
    e_edge: f64,
) -> (Option<f64>, Option<f64>) {
    let gain = acc_co - acc_edge;
    let ratio = |d: f64| if d > 0.0 { Some(gain / d) } else { None };
    (ratio(t_co - t_edge), ratio(e_co - e_edge))
}

fn batches(m: usize, b: usize) -> impl Iterator<Item = std::ops::Range<usize>> {
    (0..m.div_ceil(b)).map(move |i| i * b..((i + 1) * b).min(m))
}

fn mean(total: &BatchCost, n: usize) -> BatchCost {
    if n == 0 {
        return BatchCost::default();
    }
    let d = n as f64;
    BatchCost {
        t_edge: total.t_edge / d,
        t_near: total.t_near / d,
        t_comm: total.t_comm / d,
        t_total: total.t_total / d,
        e_edge: total.e_edge / d,
        e_near: total.e_near / d,
        e_comm: total.e_comm / d,
        e_total: total.e_total / d,
    }
}

struct CostContext<'a> {
    edge: &'a CostProfile,
    near: NearEdgeProfiles,
    near_generalist: &'a CostProfile,
    comm: CommModel,
    mode: AggregationMode,
    batch_size: usize,
}

impl<'a> CostContext<'a> {
    fn new(cfg: &SweepConfig, profiles: &'a ProfileSet) -> Result<Self> {
        let edge = cfg.edge.resolve(profiles)?;
        let shared = cfg.near.resolve(profiles)?.clone();
        let mut per_expert = BTreeMap::new();
        for (id, r) in &cfg.expert_profiles {
            let d: DomainSet = id.parse()?;
            per_expert.insert(d, r.resolve(profiles)?.clone());
        }
        let near_generalist = cfg.near_generalist.as_ref().unwrap_or(&cfg.near).resolve(profiles)?;
        Ok(CostContext {
            edge,
            near: NearEdgeProfiles {
                shared: Some(shared),
                per_expert,
            },
            near_generalist,
            comm: cfg.comm,
            mode: cfg.aggregation_mode,
            batch_size: cfg.batch_size,
        })
    }

    /// Summed cost over consecutive batches of the decision stream.
    fn charge(&self, decisions: &[RoutingDecision]) -> Result<(BatchCost, usize)> {
        let mut total = BatchCost::default();
        let mut n = 0;
        for range in batches(decisions.len(), self.batch_size) {
            let mut hist: BTreeMap<DomainSet, usize> = BTreeMap::new();
            for d in decisions[range.clone()].iter().filter_map(RoutingDecision::domain) {
                *hist.entry(d.clone()).or_insert(0) += 1;
            }
            total += compose_batch_cost(range.len(), &hist, self.edge, &self.near, &self.comm, self.mode)?;
            n += 1;
        }
        Ok((total, n))
    }

    fn near_only(&self, m: usize) -> (BatchCost, usize) {
        let mut total = BatchCost::default();
        let mut n = 0;
        for range in batches(m, self.batch_size) {
            let b = range.len();
            let p = self.near_generalist;
            total += BatchCost::from_terms(
                0.0,
                p.latency_at(b),
                self.comm.latency(b),
                0.0,
                p.energy_at(b),
                self.comm.energy(b),
            );
            n += 1;
        }
        (total, n)
    }
}

fn normalized(value: f64, base: f64) -> Option<f64> {
    if base > 0.0 {
        Some(value / base)
    } else {
        None
    }
}

/// Edge-Only and Near-Edge-Only rows, without normalization.
pub fn baseline_costs(cfg: &SweepConfig, inputs: &SweepInputs) -> Result<(BaselineRow, BaselineRow)> {
    let ctx = CostContext::new(cfg, &inputs.profiles)?;
    baselines_with(&ctx, &inputs.traces)
}

fn baselines_with(ctx: &CostContext<'_>, ts: &TraceSet) -> Result<(BaselineRow, BaselineRow)> {
    let m = ts.num_samples();
    // Edge-Only goes through the same charging path with nothing offloaded
    let all_local = vec![
        RoutingDecision::Local {
            predicted: 0,
            confidence: 1.0
        };
        m
    ];
    let (edge_total, n) = ctx.charge(&all_local)?;
    let edge_only = BaselineRow {
        name: Baseline::EdgeOnly.name().into(),
        accuracy: Some(topk_accuracy(&ts.edge, 1)?),
        alpha: 0.0,
        cost: mean(&edge_total, n),
        total: edge_total,
        norm_latency: None,
        norm_energy: None,
    };
    let (near_total, n) = ctx.near_only(m);
    let near_edge_only = BaselineRow {
        name: Baseline::NearEdgeOnly.name().into(),
        accuracy: ts.generalist.as_ref().map(|g| topk_accuracy(g, 1)).transpose()?,
        alpha: 1.0,
        cost: mean(&near_total, n),
        total: near_total,
        norm_latency: None,
        norm_energy: None,
    };
    Ok((edge_only, near_edge_only))
}

fn sweep_point(
    cfg: &SweepConfig,
    inputs: &SweepInputs,
    ctx: &CostContext<'_>,
    tau: f64,
) -> Result<(CollabOutcome, BatchCost, usize)> {
    let outcome = collaborative_infer_with(&inputs.traces, &inputs.pm, tau, cfg.k, cfg.refine_mode)?;
    let (total, n) = ctx.charge(&outcome.decisions)?;
    Ok((outcome, total, n))
}

/// Runs every threshold of the config on already loaded inputs.
pub fn run_sweep_with(cfg: &SweepConfig, inputs: &SweepInputs) -> Result<SweepResult> {
    let mut cfg = cfg.clone();
    cfg.normalize()?;
    inputs.traces.validate(&inputs.pm, cfg.k)?;
    let ctx = CostContext::new(&cfg, &inputs.profiles)?;
    let (mut edge_only, mut near_edge_only) = baselines_with(&ctx, &inputs.traces)?;
    let base = match cfg.normalize_against {
        Baseline::EdgeOnly => edge_only.cost,
        Baseline::NearEdgeOnly => near_edge_only.cost,
    };
    for b in [&mut edge_only, &mut near_edge_only] {
        b.norm_latency = normalized(b.cost.t_total, base.t_total);
        b.norm_energy = normalized(b.cost.e_total, base.e_total);
    }
    let acc_edge = edge_only.accuracy.unwrap_or(0.0);

    let points: Vec<(CollabOutcome, BatchCost, usize)> = cfg
        .taus
        .par_iter()
        .map(|&tau| {
            sweep_point(&cfg, inputs, &ctx, tau).map_err(|e| Error::AtThreshold {
                tau,
                source: Box::new(e),
            })
        })
        .collect::<Result<_>>()?;

    let rows = cfg
        .taus
        .iter()
        .zip(points)
        .map(|(&tau, (outcome, total, n))| {
            let cost = mean(&total, n);
            let (acc_to_latency, acc_to_energy) = roi_ratios(
                outcome.accuracy,
                acc_edge,
                cost.t_total,
                edge_only.cost.t_total,
                cost.e_total,
                edge_only.cost.e_total,
            );
            SweepRow {
                tau,
                alpha: outcome.offload_proportion,
                accuracy: outcome.accuracy,
                offload_count: outcome.offload_count,
                cost,
                total,
                acc_to_latency,
                acc_to_energy,
                norm_latency: normalized(cost.t_total, base.t_total),
                norm_energy: normalized(cost.e_total, base.e_total),
                histogram: outcome
                    .histogram
                    .iter()
                    .map(|(d, &c)| (d.to_string(), c))
                    .collect(),
            }
        })
        .collect();

    let ts = &inputs.traces;
    Ok(SweepResult {
        schema_version: REPORT_SCHEMA_VERSION,
        meta: SweepMeta {
            num_samples: ts.num_samples(),
            num_classes: ts.num_classes(),
            num_partitions: inputs.pm.num_partitions(),
            k: cfg.k,
            batch_size: cfg.batch_size,
            num_batches: ts.num_samples().div_ceil(cfg.batch_size),
            aggregation_mode: cfg.aggregation_mode,
            refine_mode: cfg.refine_mode,
            comm: cfg.comm,
            edge_profile: cfg.edge.clone(),
            near_profile: cfg.near.clone(),
            near_generalist_profile: cfg.near_generalist.clone().unwrap_or_else(|| cfg.near.clone()),
            normalize_against: cfg.normalize_against.name().into(),
            seed: cfg.seed,
        },
        edge_only,
        near_edge_only,
        rows,
    })
}

/// Loads every input named by the config and runs the sweep.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepResult> {
    let inputs = cfg.load_inputs()?;
    run_sweep_with(cfg, &inputs)
}
