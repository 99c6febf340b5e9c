//! The checked-in fuzz corpus seeds must all parse through the entry points
//! the fuzz targets exercise. Keeps the harness contracts covered on the
//! stable toolchain.

use std::path::PathBuf;

fn corpus(target: &str) -> Vec<(PathBuf, Vec<u8>)> {
    let dir = PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../fuzz/corpus").join(target);
    let mut out = Vec::new();
    for entry in std::fs::read_dir(&dir).unwrap_or_else(|e| panic!("{}: {e}", dir.display())) {
        let path = entry.unwrap().path();
        let bytes = std::fs::read(&path).unwrap();
        out.push((path, bytes));
    }
    assert!(!out.is_empty(), "no seeds in {}", dir.display());
    out
}

#[test]
fn tnsr_seeds_decode_and_round_trip() {
    for (path, bytes) in corpus("tnsr_decode") {
        let t = avfusion_core::io::tnsr::decode_exact(&bytes)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let re = match &t {
            avfusion_core::io::tnsr::AnyTensor::F32(t) => avfusion_core::io::tnsr::encode(t),
            avfusion_core::io::tnsr::AnyTensor::F64(t) => avfusion_core::io::tnsr::encode(t),
        };
        assert_eq!(re, bytes, "{} does not round-trip", path.display());
    }
}

#[test]
fn wav_seeds_decode() {
    for (path, bytes) in corpus("wav_decode") {
        let chunk = avfusion_core::io::wav::decode(&bytes)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(chunk.channels() >= 1);
        assert!(chunk.samples.data().iter().all(|v| (-1.0..=1.0).contains(v)));
    }
}

#[test]
fn manifest_seeds_parse() {
    for (path, bytes) in corpus("manifest_parse") {
        let records = avfusion_core::data::parse_manifest(&bytes)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(!records.is_empty());
    }
}

#[test]
fn detections_seeds_parse() {
    for (path, bytes) in corpus("detections_parse") {
        let records = avfusion_core::io::detections::parse_jsonl(&bytes)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        for r in &records {
            for d in &r.detections {
                assert!(d.to_detection().ranking_score().is_finite());
            }
        }
    }
}

#[test]
fn checkpoint_seeds_rebuild_models() {
    for (path, bytes) in corpus("checkpoint_decode") {
        let (header, tensors) = avfusion_core::io::checkpoint::decode(&bytes)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        let model = avfusion_core::io::checkpoint::model_from_parts(&header, &tensors)
            .unwrap_or_else(|e| panic!("{}: {e}", path.display()));
        assert!(model.num_params() > 0);
    }
}
