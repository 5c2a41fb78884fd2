use std::fs;

use covi::trace::synth::{synthesize_trace_set, CalibrationTargets, ExpertQuality, TraceSetSpec};
use covi::trace::{TraceManifest, TraceSet};
use covi::{Error, PartitionMap};

fn fixture(dir: &std::path::Path) -> (PartitionMap, TraceSet) {
    let pm = PartitionMap::from_json(r#"{"num_classes": 8, "partitions": [[0, 1], [2, 3], [4, 5], [6, 7]]}"#).unwrap();
    let spec = TraceSetSpec {
        num_samples: 50,
        edge: CalibrationTargets::accuracy_only(vec![0.7, 0.85]),
        expert: ExpertQuality::default(),
        generalist: Some(CalibrationTargets::accuracy_only(vec![0.9])),
    };
    let ts = synthesize_trace_set(&spec, &pm, 2, 11).unwrap();
    TraceManifest::write_trace_set(dir, &ts).unwrap();
    (pm, ts)
}

#[test]
fn written_set_loads_back_identically() {
    let dir = tempfile::tempdir().unwrap();
    let (pm, ts) = fixture(dir.path());
    let back = TraceSet::load(dir.path().join("manifest.json")).unwrap();
    assert_eq!(back, ts);
    assert_eq!(back.experts.len(), 10);
    back.validate(&pm, 2).unwrap();
}

#[test]
fn missing_expert_is_named() {
    let dir = tempfile::tempdir().unwrap();
    let (pm, _) = fixture(dir.path());
    let path = dir.path().join("manifest.json");
    let mut m: serde_json::Value = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
    m["experts"].as_array_mut().unwrap().retain(|e| e["domain"] != serde_json::json!([1, 3]));
    fs::write(&path, m.to_string()).unwrap();
    let ts = TraceSet::load(&path).unwrap();
    match ts.validate(&pm, 2) {
        Err(Error::MissingExpert(d)) => assert_eq!(d, "1+3"),
        other => panic!("{other:?}"),
    }
}

#[test]
fn wrong_byte_length_reports_sizes() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let edge = dir.path().join("edge.f32");
    let mut bytes = fs::read(&edge).unwrap();
    bytes.truncate(bytes.len() - 4);
    fs::write(&edge, &bytes).unwrap();
    match TraceSet::load(dir.path().join("manifest.json")) {
        Err(Error::Shape { expected, actual, .. }) => {
            assert_eq!(expected, 50 * 8 * 4);
            assert_eq!(actual, 50 * 8 * 4 - 4);
        }
        other => panic!("{other:?}"),
    }
}

#[test]
fn non_finite_logit_reports_offset() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let edge = dir.path().join("edge.f32");
    let mut bytes = fs::read(&edge).unwrap();
    bytes[12..16].copy_from_slice(&f32::NAN.to_le_bytes());
    fs::write(&edge, &bytes).unwrap();
    match TraceSet::load(dir.path().join("manifest.json")) {
        Err(Error::NonFinite { offset, .. }) => assert_eq!(offset, 12),
        other => panic!("{other:?}"),
    }
}

#[test]
fn out_of_range_label_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    fixture(dir.path());
    let labels = dir.path().join("labels.u32");
    let mut bytes = fs::read(&labels).unwrap();
    bytes[..4].copy_from_slice(&8u32.to_le_bytes());
    fs::write(&labels, &bytes).unwrap();
    let err = TraceSet::load(dir.path().join("manifest.json")).unwrap_err();
    assert!(err.is_validation(), "{err}");
}

#[test]
fn synthesis_is_deterministic() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let (_, ta) = fixture(a.path());
    let (_, tb) = fixture(b.path());
    assert_eq!(ta, tb);
    for f in ["edge.f32", "labels.u32", "manifest.json", "generalist.f32"] {
        assert_eq!(fs::read(a.path().join(f)).unwrap(), fs::read(b.path().join(f)).unwrap(), "{f}");
    }
}
