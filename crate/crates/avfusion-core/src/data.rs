//! Dataset manifests and sample access.
//!
//! A manifest is JSON Lines, one record per sample:
//! `{id, video_path, audio_path, boxes: [{cx, cy, w, h, class}]}` with paths
//! relative to the manifest file. Loading validates every record and names
//! the offending sample on failure. Splits take the leading fraction as
//! training data.

use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};

use serde::{Deserialize, Serialize};

use crate::boxes::BoundingBox;
use crate::dsp;
use crate::error::{AvError, Result};
use crate::io::{tnsr, wav};
use crate::synth;
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub id: String,
    pub video_path: String,
    pub audio_path: String,
    pub boxes: Vec<BoundingBox>,
}

pub fn write_manifest(records: &[ManifestRecord]) -> Result<String> {
    let mut out = String::new();
    for r in records {
        let line =
            serde_json::to_string(r).map_err(|e| AvError::Format(format!("manifest record: {e}")))?;
        out.push_str(&line);
        out.push('\n');
    }
    Ok(out)
}

/// Parse and validate manifest text. Duplicate ids, out-of-range boxes and
/// empty manifests are errors.
pub fn parse_manifest(bytes: &[u8]) -> Result<Vec<ManifestRecord>> {
    let text = std::str::from_utf8(bytes)
        .map_err(|_| AvError::Format("manifest: not valid UTF-8".into()))?;
    let mut out: Vec<ManifestRecord> = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let record: ManifestRecord = serde_json::from_str(line)
            .map_err(|e| AvError::Format(format!("manifest line {}: {e}", lineno + 1)))?;
        if record.id.is_empty() {
            return Err(AvError::Validation(format!("manifest line {}: empty id", lineno + 1)));
        }
        if out.iter().any(|r| r.id == record.id) {
            return Err(AvError::Validation(format!("duplicate sample id {:?}", record.id)));
        }
        for b in &record.boxes {
            b.validate()
                .map_err(|e| AvError::Validation(format!("sample {:?}: {e}", record.id)))?;
        }
        out.push(record);
    }
    if out.is_empty() {
        return Err(AvError::Validation("empty manifest".into()));
    }
    Ok(out)
}

/// One training/evaluation sample, ready for the model.
pub struct PreparedSample {
    pub id: String,
    /// `[3, 16, 224, 224]`, values in [0, 1].
    pub video: Tensor<f32>,
    /// `[mics, 128, 469]` log-mel stack.
    pub mel: Arc<Tensor<f32>>,
    pub boxes: Vec<BoundingBox>,
}

/// Index-addressable source of prepared samples.
pub trait Dataset: Sync {
    fn len(&self) -> usize;
    fn id(&self, i: usize) -> String;
    fn boxes(&self, i: usize) -> Result<Vec<BoundingBox>>;
    fn sample(&self, i: usize) -> Result<PreparedSample>;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A contiguous view into another dataset.
pub struct Slice<'a> {
    inner: &'a dyn Dataset,
    start: usize,
    len: usize,
}

impl<'a> Slice<'a> {
    pub fn new(inner: &'a dyn Dataset, start: usize, len: usize) -> Slice<'a> {
        assert!(start + len <= inner.len(), "slice out of range");
        Slice { inner, start, len }
    }
}

impl Dataset for Slice<'_> {
    fn len(&self) -> usize {
        self.len
    }

    fn id(&self, i: usize) -> String {
        self.inner.id(self.start + i)
    }

    fn boxes(&self, i: usize) -> Result<Vec<BoundingBox>> {
        self.inner.boxes(self.start + i)
    }

    fn sample(&self, i: usize) -> Result<PreparedSample> {
        self.inner.sample(self.start + i)
    }
}

/// Split a dataset into leading-train / trailing-validation views.
pub fn split(dataset: &dyn Dataset, train_fraction: f64) -> Result<(Slice<'_>, Slice<'_>)> {
    if !(0.0..=1.0).contains(&train_fraction) {
        return Err(AvError::Validation(format!(
            "train fraction {train_fraction} outside [0, 1]"
        )));
    }
    let n = dataset.len();
    let n_train = ((n as f64) * train_fraction).floor() as usize;
    Ok((Slice::new(dataset, 0, n_train), Slice::new(dataset, n_train, n - n_train)))
}

/// Disk-backed dataset described by a manifest.
#[derive(Debug)]
pub struct FileDataset {
    root: PathBuf,
    records: Vec<ManifestRecord>,
    mel_cache: Mutex<Vec<Option<Arc<Tensor<f32>>>>>,
}

/// Load a manifest and validate every referenced file: existence, video
/// geometry 3x16x224x224 and canonical audio geometry. Errors carry the
/// sample id.
pub fn load_manifest(path: &Path) -> Result<FileDataset> {
    let bytes = std::fs::read(path).map_err(|e| {
        AvError::Validation(format!("manifest {}: {e}", path.display()))
    })?;
    let records = parse_manifest(&bytes)?;
    let root = path.parent().unwrap_or_else(|| Path::new(".")).to_path_buf();
    for r in &records {
        let video_path = root.join(&r.video_path);
        let (_, dims) = tnsr::load_header(&video_path)
            .map_err(|e| AvError::Validation(format!("sample {:?}: video: {e}", r.id)))?;
        let want = [synth::IMG_CHANNELS, synth::FRAMES, synth::IMG_SIZE, synth::IMG_SIZE];
        if dims != want {
            return Err(AvError::Validation(format!(
                "sample {:?}: video geometry {dims:?}, want {want:?}",
                r.id
            )));
        }
        let audio_path = root.join(&r.audio_path);
        let info = wav::load_info(&audio_path)
            .map_err(|e| AvError::Validation(format!("sample {:?}: audio: {e}", r.id)))?;
        if info.channels != dsp::MIC_COUNT
            || info.sample_rate != dsp::SAMPLE_RATE
            || info.n_samples != dsp::CHUNK_SAMPLES
        {
            return Err(AvError::Validation(format!(
                "sample {:?}: audio geometry {}ch {} Hz {} samples, want {}ch {} Hz {}",
                r.id,
                info.channels,
                info.sample_rate,
                info.n_samples,
                dsp::MIC_COUNT,
                dsp::SAMPLE_RATE,
                dsp::CHUNK_SAMPLES
            )));
        }
    }
    let cache = Mutex::new(vec![None; records.len()]);
    Ok(FileDataset { root, records, mel_cache: cache })
}

impl FileDataset {
    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }
}

impl Dataset for FileDataset {
    fn len(&self) -> usize {
        self.records.len()
    }

    fn id(&self, i: usize) -> String {
        self.records[i].id.clone()
    }

    fn boxes(&self, i: usize) -> Result<Vec<BoundingBox>> {
        Ok(self.records[i].boxes.clone())
    }

    fn sample(&self, i: usize) -> Result<PreparedSample> {
        let r = &self.records[i];
        let video = tnsr::load(&self.root.join(&r.video_path))
            .map_err(|e| AvError::Validation(format!("sample {:?}: video: {e}", r.id)))?
            .into_f32();
        let cached = self.mel_cache.lock().expect("mel cache lock")[i].clone();
        let mel = match cached {
            Some(m) => m,
            None => {
                let audio = wav::load(&self.root.join(&r.audio_path))
                    .map_err(|e| AvError::Validation(format!("sample {:?}: audio: {e}", r.id)))?;
                let m = Arc::new(dsp::mel_spectrogram(&audio)?.values.cast::<f32>());
                self.mel_cache.lock().expect("mel cache lock")[i] = Some(Arc::clone(&m));
                m
            }
        };
        Ok(PreparedSample { id: r.id.clone(), video, mel, boxes: r.boxes.clone() })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::boxes::VehicleClass;

    fn record(id: &str) -> ManifestRecord {
        ManifestRecord {
            id: id.into(),
            video_path: format!("video/{id}.tnsr"),
            audio_path: format!("audio/{id}.wav"),
            boxes: vec![BoundingBox {
                cx: 0.5,
                cy: 0.5,
                w: 0.2,
                h: 0.2,
                class: VehicleClass::Idling,
            }],
        }
    }

    #[test]
    fn manifest_round_trip() {
        let recs = vec![record("a"), record("b")];
        let text = write_manifest(&recs).unwrap();
        assert_eq!(parse_manifest(text.as_bytes()).unwrap(), recs);
    }

    #[test]
    fn empty_manifest_is_an_error() {
        assert!(parse_manifest(b"").is_err());
        assert!(parse_manifest(b"\n\n").is_err());
    }

    #[test]
    fn bad_box_names_the_record() {
        let mut r = record("broken");
        r.boxes[0].w = 0.0;
        let text = write_manifest(&[r]).unwrap();
        let err = parse_manifest(text.as_bytes()).unwrap_err();
        assert!(err.to_string().contains("broken"), "{err}");
    }

    #[test]
    fn duplicate_ids_are_rejected() {
        let text = write_manifest(&[record("x"), record("x")]).unwrap();
        assert!(parse_manifest(text.as_bytes()).is_err());
    }

    #[test]
    fn missing_file_is_reported_with_id() {
        let dir = std::env::temp_dir().join("avf_data_test_missing");
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        let manifest = dir.join("manifest.jsonl");
        std::fs::write(&manifest, write_manifest(&[record("ghost")]).unwrap()).unwrap();
        let err = load_manifest(&manifest).unwrap_err();
        assert!(err.to_string().contains("ghost"), "{err}");
        let _ = std::fs::remove_dir_all(&dir);
    }

    #[test]
    fn split_takes_leading_fraction() {
        struct Fake(usize);
        impl Dataset for Fake {
            fn len(&self) -> usize {
                self.0
            }
            fn id(&self, i: usize) -> String {
                format!("{i}")
            }
            fn boxes(&self, _: usize) -> Result<Vec<BoundingBox>> {
                Ok(vec![])
            }
            fn sample(&self, _: usize) -> Result<PreparedSample> {
                unreachable!("not needed")
            }
        }
        let ds = Fake(8);
        let (train, val) = split(&ds, 0.75).unwrap();
        assert_eq!(train.len(), 6);
        assert_eq!(val.len(), 2);
        assert_eq!(train.id(0), "0");
        assert_eq!(val.id(0), "6");
    }
}
