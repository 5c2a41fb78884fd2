//! Profiled latency and energy as functions of batch size, plus the
//! composition of one batch's cost from edge, near-edge and link terms.

use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::partition::DomainSet;

/// One profiled batch size. Energy is always held in millijoules.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProfilePoint {
    pub batch: usize,
    pub latency_ms: f64,
    pub energy_mj: f64,
}

/// Latency/energy table for one (device, model) pair. The origin `(0, 0, 0)`
/// is implied and never stored.
#[derive(Debug, Clone, PartialEq)]
pub struct CostProfile {
    pub device: String,
    pub model: String,
    points: Vec<ProfilePoint>,
}

impl CostProfile {
    pub fn new(device: impl Into<String>, model: impl Into<String>, points: Vec<ProfilePoint>) -> Result<Self> {
        let device = device.into();
        let model = model.into();
        let who = || format!("profile ({device}, {model})");
        if points.is_empty() {
            return Err(Error::validation(format!("{} has no points", who())));
        }
        let mut prev = 0usize;
        for p in &points {
            if p.batch <= prev {
                return Err(Error::validation(format!(
                    "{}: batch sizes must be strictly increasing and positive, got {} after {prev}",
                    who(),
                    p.batch
                )));
            }
            if !(p.latency_ms >= 0.0 && p.latency_ms.is_finite())
                || !(p.energy_mj >= 0.0 && p.energy_mj.is_finite())
            {
                return Err(Error::validation(format!(
                    "{}: negative or non-finite value at batch {}",
                    who(),
                    p.batch
                )));
            }
            prev = p.batch;
        }
        Ok(CostProfile {
            device,
            model,
            points,
        })
    }

    pub fn points(&self) -> &[ProfilePoint] {
        &self.points
    }

    fn interpolate(&self, b: usize, value: impl Fn(&ProfilePoint) -> f64) -> f64 {
        if b == 0 {
            return 0.0;
        }
        let origin = ProfilePoint {
            batch: 0,
            latency_ms: 0.0,
            energy_mj: 0.0,
        };
        let idx = self.points.partition_point(|p| p.batch < b);
        if let Some(p) = self.points.get(idx) {
            if p.batch == b {
                return value(p);
            }
        }
        // segment [lo, hi] containing b, or the last segment for extrapolation
        let (lo, hi) = if idx < self.points.len() {
            let lo = if idx == 0 { origin } else { self.points[idx - 1] };
            (lo, self.points[idx])
        } else {
            let n = self.points.len();
            let lo = if n >= 2 { self.points[n - 2] } else { origin };
            (lo, self.points[n - 1])
        };
        let (x0, x1) = (lo.batch as f64, hi.batch as f64);
        let (y0, y1) = (value(&lo), value(&hi));
        y0 + (b as f64 - x0) * (y1 - y0) / (x1 - x0)
    }

    /// Latency in ms for a batch of `b` samples.
    pub fn latency_at(&self, b: usize) -> f64 {
        self.interpolate(b, |p| p.latency_ms)
    }

    /// Energy in mJ for a batch of `b` samples.
    pub fn energy_at(&self, b: usize) -> f64 {
        self.interpolate(b, |p| p.energy_mj)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PointDoc {
    batch: usize,
    latency_ms: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    energy_mj: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    power_w: Option<f64>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProfileDoc {
    device: String,
    model: String,
    points: Vec<PointDoc>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct ProfilesDoc {
    profiles: Vec<ProfileDoc>,
}

/// All profiles from one or more documents, looked up by (device, model).
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ProfileSet {
    profiles: Vec<CostProfile>,
}

impl ProfileSet {
    pub fn from_json(text: &str) -> Result<Self> {
        let doc: ProfilesDoc =
            serde_json::from_str(text).map_err(|e| Error::json("cost profile document", e))?;
        let mut set = ProfileSet::default();
        for p in doc.profiles {
            let mut points = Vec::with_capacity(p.points.len());
            for pt in &p.points {
                let energy_mj = match (pt.energy_mj, pt.power_w) {
                    (Some(e), None) => e,
                    // W x ms = mJ
                    (None, Some(w)) => {
                        if w < 0.0 {
                            return Err(Error::validation(format!(
                                "profile ({}, {}): negative power at batch {}",
                                p.device, p.model, pt.batch
                            )));
                        }
                        w * pt.latency_ms
                    }
                    _ => {
                        return Err(Error::validation(format!(
                            "profile ({}, {}) batch {}: exactly one of energy_mj or power_w is required",
                            p.device, p.model, pt.batch
                        )))
                    }
                };
                points.push(ProfilePoint {
                    batch: pt.batch,
                    latency_ms: pt.latency_ms,
                    energy_mj,
                });
            }
            set.insert(CostProfile::new(p.device, p.model, points)?)?;
        }
        Ok(set)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::file(path, e))?;
        Self::from_json(&text)
    }

    pub fn insert(&mut self, profile: CostProfile) -> Result<()> {
        if self.get(&profile.device, &profile.model).is_some() {
            return Err(Error::validation(format!(
                "duplicate profile ({}, {})",
                profile.device, profile.model
            )));
        }
        self.profiles.push(profile);
        Ok(())
    }

    /// Merges another set; duplicates are an error.
    pub fn extend(&mut self, other: ProfileSet) -> Result<()> {
        for p in other.profiles {
            self.insert(p)?;
        }
        Ok(())
    }

    pub fn get(&self, device: &str, model: &str) -> Option<&CostProfile> {
        self.profiles
            .iter()
            .find(|p| p.device == device && p.model == model)
    }

    pub fn require(&self, device: &str, model: &str) -> Result<&CostProfile> {
        self.get(device, model).ok_or_else(|| Error::MissingProfile {
            device: device.to_string(),
            model: model.to_string(),
        })
    }

    pub fn iter(&self) -> impl Iterator<Item = &CostProfile> {
        self.profiles.iter()
    }
}

/// Affine link model: a fixed round trip whenever anything is offloaded, plus
/// a per-sample charge.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct CommModel {
    #[serde(default)]
    pub rtt_ms: f64,
    #[serde(default)]
    pub per_sample_ms: f64,
    #[serde(default)]
    pub per_sample_mj: f64,
}

impl CommModel {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("rtt_ms", self.rtt_ms),
            ("per_sample_ms", self.per_sample_ms),
            ("per_sample_mj", self.per_sample_mj),
        ] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::validation(format!("comm {name} must be non-negative, got {v}")));
            }
        }
        Ok(())
    }

    pub fn latency(&self, offloaded: usize) -> f64 {
        if offloaded == 0 {
            0.0
        } else {
            self.rtt_ms + self.per_sample_ms * offloaded as f64
        }
    }

    pub fn energy(&self, offloaded: usize) -> f64 {
        self.per_sample_mj * offloaded as f64
    }
}

/// How the near-edge time of several experts in one batch is charged.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMode {
    /// One call on the shared profile with all offloaded samples.
    #[default]
    Monolithic,
    /// Experts run one after another; latencies add.
    Serial,
    /// Experts run concurrently; latency is the slowest one. Energy still adds.
    Parallel,
}

impl std::str::FromStr for AggregationMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "monolithic" => Ok(AggregationMode::Monolithic),
            "serial" => Ok(AggregationMode::Serial),
            "parallel" => Ok(AggregationMode::Parallel),
            _ => Err(Error::validation(format!(
                "unknown aggregation mode {s:?} (monolithic, serial, parallel)"
            ))),
        }
    }
}

/// Near-edge profiles: one shared profile, optionally overridden per expert.
#[derive(Debug, Clone, Default)]
pub struct NearEdgeProfiles {
    pub shared: Option<CostProfile>,
    pub per_expert: BTreeMap<DomainSet, CostProfile>,
}

impl NearEdgeProfiles {
    pub fn shared(profile: CostProfile) -> Self {
        NearEdgeProfiles {
            shared: Some(profile),
            per_expert: BTreeMap::new(),
        }
    }

    pub fn for_expert(&self, domain: &DomainSet) -> Result<&CostProfile> {
        self.per_expert
            .get(domain)
            .or(self.shared.as_ref())
            .ok_or_else(|| Error::MissingProfile {
                device: "near-edge".into(),
                model: format!("expert {domain}"),
            })
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct BatchCost {
    pub t_edge: f64,
    pub t_near: f64,
    pub t_comm: f64,
    pub t_total: f64,
    pub e_edge: f64,
    pub e_near: f64,
    pub e_comm: f64,
    pub e_total: f64,
}

impl BatchCost {
    pub fn from_terms(t_edge: f64, t_near: f64, t_comm: f64, e_edge: f64, e_near: f64, e_comm: f64) -> Self {
        BatchCost {
            t_edge,
            t_near,
            t_comm,
            t_total: t_edge + t_near + t_comm,
            e_edge,
            e_near,
            e_comm,
            e_total: e_edge + e_near + e_comm,
        }
    }
}

impl std::ops::AddAssign for BatchCost {
    fn add_assign(&mut self, o: BatchCost) {
        self.t_edge += o.t_edge;
        self.t_near += o.t_near;
        self.t_comm += o.t_comm;
        self.t_total += o.t_total;
        self.e_edge += o.e_edge;
        self.e_near += o.e_near;
        self.e_comm += o.e_comm;
        self.e_total += o.e_total;
    }
}

/// Cost of one batch of `batch` samples whose offloaded part is split across
/// experts as in `histogram`. The edge always processes the whole batch.
pub fn compose_batch_cost(
    batch: usize,
    histogram: &BTreeMap<DomainSet, usize>,
    edge: &CostProfile,
    near: &NearEdgeProfiles,
    comm: &CommModel,
    mode: AggregationMode,
) -> Result<BatchCost> {
    let offloaded: usize = histogram.values().sum();
    if offloaded > batch {
        return Err(Error::validation(format!(
            "{offloaded} offloaded samples in a batch of {batch}"
        )));
    }
    let (t_near, e_near) = match mode {
        AggregationMode::Monolithic => {
            if offloaded == 0 {
                (0.0, 0.0)
            } else {
                let p = near.shared.as_ref().ok_or_else(|| Error::MissingProfile {
                    device: "near-edge".into(),
                    model: "shared expert profile".into(),
                })?;
                (p.latency_at(offloaded), p.energy_at(offloaded))
            }
        }
        AggregationMode::Serial | AggregationMode::Parallel => {
            let mut t = 0.0f64;
            let mut e = 0.0f64;
            for (d, &count) in histogram.iter().filter(|(_, &c)| c > 0) {
                let p = near.for_expert(d)?;
                let lt = p.latency_at(count);
                t = if mode == AggregationMode::Serial { t + lt } else { t.max(lt) };
                e += p.energy_at(count);
            }
            (t, e)
        }
    };
    Ok(BatchCost::from_terms(
        edge.latency_at(batch),
        t_near,
        comm.latency(offloaded),
        edge.energy_at(batch),
        e_near,
        comm.energy(offloaded),
    ))
}

/// Offloaded samples for an analytic offload proportion: `ceil(B * alpha)`,
/// treating products within 1e-9 of an integer as that integer.
pub fn analytic_offload_count(batch: usize, alpha: f64) -> usize {
    let x = batch as f64 * alpha.clamp(0.0, 1.0);
    let r = x.round();
    if (x - r).abs() < 1e-9 {
        r as usize
    } else {
        x.ceil() as usize
    }
}

/// Monolithic batch cost from an offload proportion instead of a realized
/// histogram.
pub fn analytic_batch_cost(
    batch: usize,
    alpha: f64,
    edge: &CostProfile,
    near: &CostProfile,
    comm: &CommModel,
) -> BatchCost {
    let off = analytic_offload_count(batch, alpha);
    let (t_near, e_near) = if off == 0 {
        (0.0, 0.0)
    } else {
        (near.latency_at(off), near.energy_at(off))
    };
    BatchCost::from_terms(
        edge.latency_at(batch),
        t_near,
        comm.latency(off),
        edge.energy_at(batch),
        e_near,
        comm.energy(off),
    )
}
