use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{bail, Context};
use clap::{Args, Parser, Subcommand};
use covi::harness::SweepConfig;
use covi::router::RefineMode;
use covi::sched::{omega, sample_weight, ScheduleParams};
use covi::trace::synth::{synthesize_trace_set, CalibrationTargets, ExpertQuality, TraceSetSpec};
use covi::trace::{recall_gap, topk_accuracy, TraceManifest};
use covi::wire::{run_edge_client, serve_near_edge, ClientConfig, NearEdgeServer};
use covi::{run_sweep, PartitionMap, ProfileSet, TraceSet};
use serde_json::{json, Map, Value};

#[derive(Parser)]
#[command(name = "covi", version, about = "Confidence-gated edge/near-edge collaborative inference")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Run one threshold and print its report row as JSON.
    Simulate {
        #[command(flatten)]
        sweep: SweepArgs,
        /// Confidence threshold (overrides the config's list).
        #[arg(long)]
        tau: f64,
    },
    /// Run every threshold and write `<output>.csv` and `<output>.json`.
    Sweep(SweepArgs),
    /// Serve expert traces over TCP.
    Serve {
        #[arg(long, default_value = "127.0.0.1:7878")]
        listen: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        partition_config: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, value_parser = parse_refine, default_value = "full")]
        refine_mode: RefineMode,
    },
    /// Gate the edge trace locally and offload to a running server.
    Client {
        #[arg(long)]
        server: String,
        #[arg(long)]
        manifest: PathBuf,
        #[arg(long)]
        partition_config: PathBuf,
        #[arg(long)]
        tau: f64,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 3)]
        retries: u32,
        #[arg(long, default_value_t = 30_000)]
        timeout_ms: u64,
    },
    /// Write a calibrated synthetic trace set.
    Synth {
        #[arg(long)]
        partition_config: PathBuf,
        #[arg(long)]
        out: PathBuf,
        #[arg(long, default_value_t = 2)]
        k: usize,
        #[arg(long, default_value_t = 10_000)]
        num_samples: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// JSON trace-set spec; defaults to DeiT-3H edge targets.
        #[arg(long)]
        spec: Option<PathBuf>,
    },
    /// Check configs, manifests and profile documents without running anything.
    Validate {
        #[arg(long)]
        config: Option<PathBuf>,
        #[arg(long)]
        partition_config: Option<PathBuf>,
        #[arg(long)]
        manifest: Option<PathBuf>,
        #[arg(long)]
        profiles: Vec<PathBuf>,
        #[arg(long, default_value_t = 2)]
        k: usize,
    },
    /// Print the specialist weighting schedule at given epochs.
    SchedEval {
        #[arg(long, default_value_t = 200)]
        epochs: u32,
        #[arg(long, default_value_t = 14.0)]
        max_weight: f64,
        /// Epochs to evaluate; defaults to 0, T/4, T/2, 3T/4, T.
        #[arg(long, value_delimiter = ',')]
        at: Vec<f64>,
    },
}

/// Flags mirror the sweep config fields and override values from `--config`.
#[derive(Args, Clone, Default)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long, value_delimiter = ',')]
    taus: Option<Vec<f64>>,
    #[arg(long)]
    k: Option<usize>,
    #[arg(long)]
    partition_config: Option<PathBuf>,
    #[arg(long)]
    trace_manifest: Option<PathBuf>,
    #[arg(long)]
    cost_profiles: Vec<PathBuf>,
    /// `device/model`
    #[arg(long)]
    edge: Option<String>,
    #[arg(long)]
    near: Option<String>,
    #[arg(long)]
    near_generalist: Option<String>,
    #[arg(long)]
    rtt_ms: Option<f64>,
    #[arg(long)]
    per_sample_ms: Option<f64>,
    #[arg(long)]
    per_sample_mj: Option<f64>,
    #[arg(long)]
    aggregation_mode: Option<String>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    normalize_against: Option<String>,
    #[arg(long)]
    refine_mode: Option<String>,
    #[arg(long)]
    shuffle: bool,
    #[arg(long)]
    seed: Option<u64>,
    /// Report path prefix.
    #[arg(long)]
    output: Option<PathBuf>,
}

fn parse_refine(s: &str) -> Result<RefineMode, String> {
    serde_json::from_value(Value::String(s.into())).map_err(|_| format!("unknown refine mode {s:?} (full, mask_to_domain)"))
}

fn profile_ref(s: &str) -> anyhow::Result<Value> {
    match s.split_once('/') {
        Some((d, m)) if !d.is_empty() && !m.is_empty() => Ok(json!({"device": d, "model": m})),
        _ => Err(covi::Error::Validation(format!("profile reference {s:?} is not device/model")).into()),
    }
}

fn abs(p: &Path) -> anyhow::Result<String> {
    let p = if p.is_absolute() {
        p.to_path_buf()
    } else {
        std::env::current_dir()?.join(p)
    };
    Ok(p.to_string_lossy().into_owned())
}

impl SweepArgs {
    fn into_config(self) -> anyhow::Result<SweepConfig> {
        let (mut doc, base) = match &self.config {
            Some(path) => {
                let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
                let v: Value = serde_json::from_str(&text)
                    .map_err(|e| covi::Error::Validation(format!("{}: {e}", path.display())))?;
                let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
                (v, base)
            }
            None => (Value::Object(Map::new()), PathBuf::new()),
        };
        let Some(obj) = doc.as_object_mut() else {
            bail!(covi::Error::Validation("config must be a JSON object".into()));
        };
        let mut set = |key: &str, v: Value| {
            obj.insert(key.to_string(), v);
        };
        if let Some(t) = self.taus {
            set("taus", json!(t));
        }
        if let Some(k) = self.k {
            set("k", json!(k));
        }
        if let Some(p) = &self.partition_config {
            set("partition_config", json!(abs(p)?));
        }
        if let Some(p) = &self.trace_manifest {
            set("trace_manifest", json!(abs(p)?));
        }
        if !self.cost_profiles.is_empty() {
            let v: Vec<String> = self.cost_profiles.iter().map(|p| abs(p)).collect::<anyhow::Result<_>>()?;
            set("cost_profiles", json!(v));
        }
        if let Some(s) = &self.edge {
            set("edge", profile_ref(s)?);
        }
        if let Some(s) = &self.near {
            set("near", profile_ref(s)?);
        }
        if let Some(s) = &self.near_generalist {
            set("near_generalist", profile_ref(s)?);
        }
        if let Some(m) = self.aggregation_mode {
            set("aggregation_mode", json!(m));
        }
        if let Some(b) = self.batch_size {
            set("batch_size", json!(b));
        }
        if let Some(n) = self.normalize_against {
            set("normalize_against", json!(n));
        }
        if let Some(r) = self.refine_mode {
            set("refine_mode", json!(r));
        }
        if self.shuffle {
            set("shuffle", json!(true));
        }
        if let Some(s) = self.seed {
            set("seed", json!(s));
        }
        if let Some(o) = &self.output {
            set("output", json!(abs(o)?));
        }
        let comm = obj.entry("comm").or_insert_with(|| json!({}));
        if let Some(c) = comm.as_object_mut() {
            for (key, v) in [
                ("rtt_ms", self.rtt_ms),
                ("per_sample_ms", self.per_sample_ms),
                ("per_sample_mj", self.per_sample_mj),
            ] {
                if let Some(v) = v {
                    c.insert(key.into(), json!(v));
                }
            }
        }
        Ok(SweepConfig::from_json(&doc.to_string(), base)?)
    }
}

fn print_out(text: &str) -> anyhow::Result<()> {
    let mut out = std::io::stdout().lock();
    match writeln!(out, "{text}").and_then(|_| out.flush()) {
        Err(e) if e.kind() == std::io::ErrorKind::BrokenPipe => Ok(()),
        r => Ok(r?),
    }
}

fn print_json(v: &Value) -> anyhow::Result<()> {
    print_out(&serde_json::to_string_pretty(v)?)
}

fn run(cli: Cli) -> anyhow::Result<()> {
    match cli.command {
        Command::Simulate { mut sweep, tau } => {
            sweep.taus = Some(vec![tau]);
            let cfg = sweep.into_config()?;
            let res = run_sweep(&cfg)?.rounded();
            print_json(&json!({
                "row": res.rows[0],
                "edge_only": res.edge_only,
                "near_edge_only": res.near_edge_only,
            }))?;
        }
        Command::Sweep(args) => {
            let cfg = args.into_config()?;
            let Some(out) = cfg.output.clone() else {
                bail!(covi::Error::Validation("sweep needs an output prefix (--output or \"output\")".into()));
            };
            let out = cfg.resolve(&out);
            let res = run_sweep(&cfg)?;
            let (csv, json) = res.emit(&out)?;
            eprintln!("wrote {} and {}", csv.display(), json.display());
        }
        Command::Serve {
            listen,
            manifest,
            partition_config,
            k,
            refine_mode,
        } => {
            let pm = PartitionMap::load(&partition_config)?;
            let ts = TraceSet::load(&manifest)?;
            let server = NearEdgeServer::new(ts, pm, k)?.with_refine_mode(refine_mode);
            let handle = serve_near_edge(listen.as_str(), server)?;
            eprintln!("serving on {}", handle.local_addr());
            handle.join();
        }
        Command::Client {
            server,
            manifest,
            partition_config,
            tau,
            k,
            retries,
            timeout_ms,
        } => {
            let pm = PartitionMap::load(&partition_config)?;
            let m = TraceManifest::load(&manifest)?;
            let base = manifest.parent().map(Path::to_path_buf).unwrap_or_default();
            let edge = m.load_traces(&base)?.edge;
            let cfg = ClientConfig {
                retries,
                read_timeout: Duration::from_millis(timeout_ms),
                ..ClientConfig::default()
            };
            let run = run_edge_client(server.as_str(), &edge, tau, k, &pm, &cfg)?;
            let o = &run.outcome;
            print_json(&json!({
                "tau": tau,
                "samples": o.predictions.len(),
                "accuracy": o.accuracy,
                "alpha": o.offload_proportion,
                "offload_count": o.offload_count,
                "requests": run.stats.requests,
                "reconnects": run.stats.reconnects,
                "mean_round_trip_ms": run.stats.mean_round_trip_ms(),
                "histogram": o.histogram.iter().map(|(d, c)| (d.to_string(), json!(c))).collect::<Map<_, _>>(),
            }))?;
        }
        Command::Synth {
            partition_config,
            out,
            k,
            num_samples,
            seed,
            spec,
        } => {
            let pm = PartitionMap::load(&partition_config)?;
            let spec = match spec {
                Some(p) => {
                    let text = std::fs::read_to_string(&p).with_context(|| format!("reading {}", p.display()))?;
                    serde_json::from_str(&text)
                        .map_err(|e| covi::Error::Validation(format!("{}: {e}", p.display())))?
                }
                None => TraceSetSpec {
                    num_samples,
                    edge: CalibrationTargets::deit3h_cifar100(),
                    expert: ExpertQuality::default(),
                    generalist: Some(CalibrationTargets::accuracy_only(vec![0.9136, 0.9655])),
                },
            };
            let ts = synthesize_trace_set(&spec, &pm, k, seed)?;
            TraceManifest::write_trace_set(&out, &ts)?;
            print_json(&json!({
                "manifest": out.join("manifest.json"),
                "samples": ts.num_samples(),
                "experts": ts.experts.len(),
                "edge_top1": topk_accuracy(&ts.edge, 1)?,
                "edge_top2": topk_accuracy(&ts.edge, 2)?,
                "edge_recall_gap_2": recall_gap(&ts.edge, 2)?,
            }))?;
        }
        Command::Validate {
            config,
            partition_config,
            manifest,
            profiles,
            k,
        } => {
            let mut checked = Vec::new();
            if let Some(c) = &config {
                let cfg = SweepConfig::load(c)?;
                let inputs = cfg.load_inputs()?;
                covi::harness::baseline_costs(&cfg, &inputs)?;
                checked.push(c.display().to_string());
            }
            let pm = partition_config.as_ref().map(PartitionMap::load).transpose()?;
            if let Some(p) = &partition_config {
                checked.push(p.display().to_string());
            }
            if let Some(m) = &manifest {
                let ts = TraceSet::load(m)?;
                if let Some(pm) = &pm {
                    ts.validate(pm, k)?;
                }
                checked.push(m.display().to_string());
            }
            for p in &profiles {
                ProfileSet::load(p)?;
                checked.push(p.display().to_string());
            }
            if checked.is_empty() {
                bail!(covi::Error::Validation("nothing to validate".into()));
            }
            let lines: Vec<String> = checked.iter().map(|c| format!("ok {c}")).collect();
            print_out(&lines.join("\n"))?;
        }
        Command::SchedEval { epochs, max_weight, at } => {
            let p = ScheduleParams::new(epochs, max_weight)?;
            let t_max = epochs as f64;
            let at = if at.is_empty() {
                vec![0.0, t_max / 4.0, t_max / 2.0, 3.0 * t_max / 4.0, t_max]
            } else {
                at
            };
            let mut table = String::from("epoch,omega,weight_in_domain,weight_out_of_domain");
            for t in at {
                table += &format!(
                    "\n{t},{},{},{}",
                    omega(t, &p)?,
                    sample_weight(true, t, &p)?,
                    sample_weight(false, t, &p)?
                );
            }
            print_out(&table)?;
        }
    }
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            let validation = e.downcast_ref::<covi::Error>().is_some_and(covi::Error::is_validation);
            ExitCode::from(if validation { 2 } else { 3 })
        }
    }
}
