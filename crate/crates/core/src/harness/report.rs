//! CSV and JSON sweep reports. Every number is written with at most six
//! significant digits; undefined values are empty CSV fields and JSON nulls.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use super::{BaselineRow, SweepResult, SweepRow};
use crate::cost::BatchCost;
use crate::error::{Error, Result};

pub const REPORT_SCHEMA_VERSION: u32 = 1;

pub const CSV_COLUMNS: [&str; 17] = [
    "tau",
    "alpha",
    "accuracy",
    "offload_count",
    "t_total_ms",
    "e_total_mj",
    "t_edge_ms",
    "t_near_ms",
    "t_comm_ms",
    "e_edge_mj",
    "e_near_mj",
    "e_comm_mj",
    "acc_to_latency",
    "acc_to_energy",
    "norm_latency",
    "norm_energy",
    "histogram",
];

pub fn round_sig6(x: f64) -> f64 {
    if x == 0.0 || !x.is_finite() {
        return x;
    }
    format!("{x:.5e}").parse().expect("formatted float parses")
}

pub fn format_sig6(x: f64) -> String {
    let r = round_sig6(x);
    if r == 0.0 {
        "0".into()
    } else {
        r.to_string()
    }
}

fn opt(x: Option<f64>) -> String {
    x.map(format_sig6).unwrap_or_default()
}

fn round_cost(c: &BatchCost) -> BatchCost {
    BatchCost {
        t_edge: round_sig6(c.t_edge),
        t_near: round_sig6(c.t_near),
        t_comm: round_sig6(c.t_comm),
        t_total: round_sig6(c.t_total),
        e_edge: round_sig6(c.e_edge),
        e_near: round_sig6(c.e_near),
        e_comm: round_sig6(c.e_comm),
        e_total: round_sig6(c.e_total),
    }
}

fn round_baseline(b: &BaselineRow) -> BaselineRow {
    BaselineRow {
        name: b.name.clone(),
        accuracy: b.accuracy.map(round_sig6),
        alpha: round_sig6(b.alpha),
        cost: round_cost(&b.cost),
        total: round_cost(&b.total),
        norm_latency: b.norm_latency.map(round_sig6),
        norm_energy: b.norm_energy.map(round_sig6),
    }
}

fn round_row(r: &SweepRow) -> SweepRow {
    SweepRow {
        tau: round_sig6(r.tau),
        alpha: round_sig6(r.alpha),
        accuracy: round_sig6(r.accuracy),
        offload_count: r.offload_count,
        cost: round_cost(&r.cost),
        total: round_cost(&r.total),
        acc_to_latency: r.acc_to_latency.map(round_sig6),
        acc_to_energy: r.acc_to_energy.map(round_sig6),
        norm_latency: r.norm_latency.map(round_sig6),
        norm_energy: r.norm_energy.map(round_sig6),
        histogram: r.histogram.clone(),
    }
}

fn baseline_line(b: &BaselineRow) -> String {
    format!(
        "# baseline {}: accuracy={} alpha={} t_total_ms={} e_total_mj={} t_edge_ms={} t_near_ms={} t_comm_ms={} norm_latency={} norm_energy={}",
        b.name,
        opt(b.accuracy),
        format_sig6(b.alpha),
        format_sig6(b.cost.t_total),
        format_sig6(b.cost.e_total),
        format_sig6(b.cost.t_edge),
        format_sig6(b.cost.t_near),
        format_sig6(b.cost.t_comm),
        opt(b.norm_latency),
        opt(b.norm_energy),
    )
}

impl SweepResult {
    /// The result as it reads back from a JSON report.
    pub fn rounded(&self) -> SweepResult {
        SweepResult {
            schema_version: self.schema_version,
            meta: self.meta.clone(),
            edge_only: round_baseline(&self.edge_only),
            near_edge_only: round_baseline(&self.near_edge_only),
            rows: self.rows.iter().map(round_row).collect(),
        }
    }

    pub fn to_csv(&self) -> String {
        let m = &self.meta;
        let mut out = String::new();
        let _ = writeln!(out, "# covi sweep report, schema v{}", self.schema_version);
        let _ = writeln!(out, "# columns: {}", CSV_COLUMNS.join(","));
        let _ = writeln!(
            out,
            "# units: costs are per-batch means (ms, mJ); batch_size={} batches={} samples={} classes={} partitions={} k={}",
            m.batch_size, m.num_batches, m.num_samples, m.num_classes, m.num_partitions, m.k
        );
        let _ = writeln!(
            out,
            "# aggregation_mode={} refine_mode={} rtt_ms={} per_sample_ms={} per_sample_mj={} seed={}",
            serde_plain(&m.aggregation_mode),
            serde_plain(&m.refine_mode),
            format_sig6(m.comm.rtt_ms),
            format_sig6(m.comm.per_sample_ms),
            format_sig6(m.comm.per_sample_mj),
            m.seed
        );
        let _ = writeln!(
            out,
            "# profiles: edge={}/{} near={}/{} near_generalist={}/{}",
            m.edge_profile.device,
            m.edge_profile.model,
            m.near_profile.device,
            m.near_profile.model,
            m.near_generalist_profile.device,
            m.near_generalist_profile.model
        );
        let _ = writeln!(out, "# normalized against: {}", m.normalize_against);
        let _ = writeln!(out, "{}", baseline_line(&self.edge_only));
        let _ = writeln!(out, "{}", baseline_line(&self.near_edge_only));
        let _ = writeln!(out, "{}", CSV_COLUMNS.join(","));
        for r in &self.rows {
            let hist: Vec<String> = r.histogram.iter().map(|(d, c)| format!("{d}:{c}")).collect();
            let fields = [
                format_sig6(r.tau),
                format_sig6(r.alpha),
                format_sig6(r.accuracy),
                r.offload_count.to_string(),
                format_sig6(r.cost.t_total),
                format_sig6(r.cost.e_total),
                format_sig6(r.cost.t_edge),
                format_sig6(r.cost.t_near),
                format_sig6(r.cost.t_comm),
                format_sig6(r.cost.e_edge),
                format_sig6(r.cost.e_near),
                format_sig6(r.cost.e_comm),
                opt(r.acc_to_latency),
                opt(r.acc_to_energy),
                opt(r.norm_latency),
                opt(r.norm_energy),
                hist.join(";"),
            ];
            let _ = writeln!(out, "{}", fields.join(","));
        }
        out
    }

    pub fn to_json(&self) -> Result<String> {
        let mut s = serde_json::to_string_pretty(&self.rounded())
            .map_err(|e| Error::json("sweep report", e))?;
        s.push('\n');
        Ok(s)
    }

    pub fn from_json(text: &str) -> Result<SweepResult> {
        let r: SweepResult =
            serde_json::from_str(text).map_err(|e| Error::json("sweep report", e))?;
        if r.schema_version != REPORT_SCHEMA_VERSION {
            return Err(Error::validation(format!(
                "report schema v{} is not supported (expected v{REPORT_SCHEMA_VERSION})",
                r.schema_version
            )));
        }
        Ok(r)
    }

    /// Writes `<prefix>.csv` and `<prefix>.json`; returns both paths.
    pub fn emit(&self, prefix: &Path) -> Result<(PathBuf, PathBuf)> {
        let csv = prefix.with_extension("csv");
        let json = prefix.with_extension("json");
        if let Some(dir) = prefix.parent().filter(|d| !d.as_os_str().is_empty()) {
            std::fs::create_dir_all(dir).map_err(|e| Error::file(dir, e))?;
        }
        std::fs::write(&csv, self.to_csv()).map_err(|e| Error::file(&csv, e))?;
        std::fs::write(&json, self.to_json()?).map_err(|e| Error::file(&json, e))?;
        Ok((csv, json))
    }
}

fn serde_plain<T: serde::Serialize>(v: &T) -> String {
    serde_json::to_value(v)
        .ok()
        .and_then(|v| v.as_str().map(str::to_string))
        .unwrap_or_default()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn six_significant_digits() {
        assert_eq!(format_sig6(0.462), "0.462");
        assert_eq!(format_sig6(78.1), "78.1");
        assert_eq!(format_sig6(1.0 / 3.0), "0.333333");
        assert_eq!(format_sig6(123456789.0), "123457000");
        assert_eq!(format_sig6(0.0), "0");
        assert_eq!(format_sig6(-2.0 / 3.0), "-0.666667");
        assert_eq!(format_sig6(0.00012345678), "0.000123457");
    }
}
