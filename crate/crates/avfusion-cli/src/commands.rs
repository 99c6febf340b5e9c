//! Subcommand implementations.

use std::path::{Path, PathBuf};
use std::sync::Arc;

use serde::Serialize;

use avfusion_core::data::{self, Dataset};
use avfusion_core::detect::{self, AnchorSet};
use avfusion_core::dsp;
use avfusion_core::encoder::EncoderConfig;
use avfusion_core::eval;
use avfusion_core::io::checkpoint::{self, TrainState};
use avfusion_core::io::detections::{DetectionEntry, DetectionRecord};
use avfusion_core::io::{tnsr, wav, ReproStanza};
use avfusion_core::model::{Model, ModelConfig};
use avfusion_core::synth::{self, SynthConfig};
use avfusion_core::tensor::Tensor;
use avfusion_core::train::{self, TrainConfig};
use avfusion_core::{workers, AvError, Result};

use crate::args::{switch, val, Args, FlagSpec};

fn write_text(path: &Path, text: &str) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| AvError::io(parent.display().to_string(), e))?;
        }
    }
    std::fs::write(path, text).map_err(|e| AvError::io(path.display().to_string(), e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let json = serde_json::to_string_pretty(value)
        .map_err(|e| AvError::Format(format!("serializing {}: {e}", path.display())))?;
    write_text(path, &(json + "\n"))
}

fn write_meta<C: Serialize>(out: &Path, seed: u64, config: &C) -> Result<()> {
    let stanza = ReproStanza::for_config(seed, config)?;
    let meta = out.with_extension(match out.extension().and_then(|e| e.to_str()) {
        Some(ext) => format!("{ext}.meta.json"),
        None => "meta.json".to_string(),
    });
    write_json(&meta, &stanza)
}

// ---------------------------------------------------------------------------
// synth
// ---------------------------------------------------------------------------

pub fn synth(raw: &[String]) -> Result<()> {
    const SPEC: &[FlagSpec] = &[
        val("out"),
        val("n"),
        val("seed"),
        val("vehicles"),
        val("noise"),
        val("video-noise"),
        val("attenuation"),
    ];
    let args = Args::parse(raw, SPEC)?;
    let out_dir = PathBuf::from(args.require("out")?);
    let defaults = SynthConfig::default();
    let cfg = SynthConfig {
        n_samples: args.parse_or("n", 100usize)?,
        seed: args.parse_or("seed", 0u64)?,
        vehicle_count: args.parse_pair_or("vehicles", defaults.vehicle_count)?,
        noise_amplitude: args.parse_or("noise", defaults.noise_amplitude)?,
        video_noise: args.parse_or("video-noise", defaults.video_noise)?,
        attenuation_scale: args.parse_or("attenuation", defaults.attenuation_scale)?,
        ..defaults
    };
    cfg.validate()?;
    let records = synth::generate(&cfg, &out_dir)?;
    let stanza = ReproStanza::for_config(cfg.seed, &cfg)?;
    #[derive(Serialize)]
    struct SynthMeta<'a> {
        repro: &'a ReproStanza,
        n_samples: usize,
        config: &'a SynthConfig,
    }
    write_json(
        &out_dir.join("synth.meta.json"),
        &SynthMeta { repro: &stanza, n_samples: records.len(), config: &cfg },
    )?;
    println!("wrote {} samples to {}", records.len(), out_dir.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// anchors
// ---------------------------------------------------------------------------

fn split_range(args: &Args, n: usize, frac: f64) -> Result<(usize, usize)> {
    let n_train = ((n as f64) * frac).floor() as usize;
    match args.get("split").unwrap_or("train") {
        "train" => Ok((0, n_train)),
        "val" => Ok((n_train, n - n_train)),
        "all" => Ok((0, n)),
        other => Err(AvError::Usage(format!("--split must be train|val|all, got {other:?}"))),
    }
}

pub fn anchors(raw: &[String]) -> Result<()> {
    const SPEC: &[FlagSpec] =
        &[val("manifest"), val("k"), val("seed"), val("out"), val("split"), val("split-frac")];
    let args = Args::parse(raw, SPEC)?;
    let manifest = PathBuf::from(args.require("manifest")?);
    let out = PathBuf::from(args.require("out")?);
    let k = args.parse_or("k", detect::DEFAULT_ANCHOR_COUNT)?;
    let seed = args.parse_or("seed", 0u64)?;
    let frac = args.parse_or("split-frac", 0.75f64)?;

    let dataset = data::load_manifest(&manifest)?;
    let (start, len) = split_range(&args, dataset.len(), frac)?;
    let mut shapes = Vec::new();
    for i in start..start + len {
        for b in dataset.boxes(i)? {
            shapes.push((b.w, b.h));
        }
    }
    let anchors = detect::kmeans_anchors(&shapes, k, seed)?;

    #[derive(Serialize)]
    struct AnchorsOut<'a> {
        priors: &'a [(f64, f64)],
        repro: ReproStanza,
    }
    let repro = ReproStanza::for_config(seed, &(k, seed, &shapes))?;
    write_json(&out, &AnchorsOut { priors: anchors.priors(), repro })?;
    println!("wrote {k} anchors from {} boxes to {}", shapes.len(), out.display());
    Ok(())
}

fn read_anchors(path: &Path) -> Result<AnchorSet> {
    #[derive(serde::Deserialize)]
    struct AnchorsIn {
        priors: Vec<(f64, f64)>,
    }
    let bytes = std::fs::read(path).map_err(|e| AvError::io(path.display().to_string(), e))?;
    let parsed: AnchorsIn = serde_json::from_slice(&bytes)
        .map_err(|e| AvError::Format(format!("anchors {}: {e}", path.display())))?;
    AnchorSet::new(parsed.priors)
}

// ---------------------------------------------------------------------------
// melspec
// ---------------------------------------------------------------------------

pub fn melspec(raw: &[String]) -> Result<()> {
    const SPEC: &[FlagSpec] = &[val("wav"), val("out"), val("dtype"), val("csv"), val("pgm")];
    let args = Args::parse(raw, SPEC)?;
    let wav_path = PathBuf::from(args.require("wav")?);
    let out = PathBuf::from(args.require("out")?);
    let chunk = wav::load(&wav_path)?;
    let mel = dsp::mel_spectrogram(&chunk)?;
    match args.get("dtype").unwrap_or("f32") {
        "f32" => tnsr::save(&out, &mel.values.cast::<f32>())?,
        "f64" => tnsr::save(&out, &mel.values)?,
        other => return Err(AvError::Usage(format!("--dtype must be f32|f64, got {other:?}"))),
    }
    if let Some(csv_path) = args.get("csv") {
        let mut csv = String::from("channel,mel_bin,frame,value\n");
        let (mels, frames) = (mel.n_mels(), mel.n_frames());
        for c in 0..mel.channels() {
            for m in 0..mels {
                for t in 0..frames {
                    csv.push_str(&format!("{c},{m},{t},{}\n", mel.values.at(&[c, m, t])));
                }
            }
        }
        write_text(Path::new(csv_path), &csv)?;
    }
    if let Some(prefix) = args.get("pgm") {
        for c in 0..mel.channels() {
            write_pgm(&PathBuf::from(format!("{prefix}_{c}.pgm")), &mel, c)?;
        }
    }
    write_meta(&out, 0, &(wav_path.display().to_string(), dsp::N_MELS, dsp::WIN_SIZE, dsp::HOP_SIZE))?;
    println!(
        "wrote {}x{}x{} mel stack to {}",
        mel.channels(),
        mel.n_mels(),
        mel.n_frames(),
        out.display()
    );
    Ok(())
}

/// Greyscale rendering: mel bins top-down, min-max normalized per channel.
fn write_pgm(path: &Path, mel: &dsp::MelSpectrogram, channel: usize) -> Result<()> {
    let (mels, frames) = (mel.n_mels(), mel.n_frames());
    let plane = mels * frames;
    let data = &mel.values.data()[channel * plane..(channel + 1) * plane];
    let (lo, hi) = data.iter().fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let scale = if hi > lo { 255.0 / (hi - lo) } else { 0.0 };
    let mut out = format!("P5\n{frames} {mels}\n255\n").into_bytes();
    for m in (0..mels).rev() {
        for t in 0..frames {
            out.push(((data[m * frames + t] - lo) * scale).round() as u8);
        }
    }
    std::fs::write(path, out).map_err(|e| AvError::io(path.display().to_string(), e))
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

pub fn train_cmd(raw: &[String]) -> Result<()> {
    const SPEC: &[FlagSpec] = &[
        val("manifest"),
        val("out-dir"),
        val("anchors"),
        val("epochs"),
        val("lr"),
        val("batch-size"),
        val("seed"),
        val("grid"),
        val("feat-dim"),
        val("split-frac"),
        val("checkpoint-every"),
    ];
    let args = Args::parse(raw, SPEC)?;
    let manifest = PathBuf::from(args.require("manifest")?);
    let out_dir = PathBuf::from(args.require("out-dir")?);
    std::fs::create_dir_all(&out_dir).map_err(|e| AvError::io(out_dir.display().to_string(), e))?;

    let defaults = TrainConfig::default();
    let tc = TrainConfig {
        epochs: args.parse_or("epochs", defaults.epochs)?,
        learning_rate: args.parse_or("lr", defaults.learning_rate)?,
        batch_size: args.parse_or("batch-size", defaults.batch_size)?,
        seed: args.parse_or("seed", defaults.seed)?,
        checkpoint_every: args.parse_or("checkpoint-every", defaults.checkpoint_every)?,
        ..defaults
    };
    let frac = args.parse_or("split-frac", 0.75f64)?;

    let dataset = data::load_manifest(&manifest)?;
    let (train_view, _) = data::split(&dataset, frac)?;
    if train_view.is_empty() {
        return Err(AvError::Validation("training split is empty".into()));
    }

    let anchors = match args.get("anchors") {
        Some(path) => read_anchors(Path::new(path))?,
        None => {
            let mut shapes = Vec::new();
            for i in 0..train_view.len() {
                for b in train_view.boxes(i)? {
                    shapes.push((b.w, b.h));
                }
            }
            detect::kmeans_anchors(&shapes, detect::DEFAULT_ANCHOR_COUNT, tc.seed)?
        }
    };

    let mut encoder = EncoderConfig::default();
    encoder.grid = args.parse_pair_or("grid", encoder.grid)?;
    encoder.feat_dim = args.parse_or("feat-dim", encoder.feat_dim)?;
    let model_cfg = ModelConfig { encoder, anchors };
    let mut model = Model::<f32>::init(model_cfg, tc.seed)?;
    println!("model: {} parameters, {} anchors", model.num_params(), model.cfg.anchors.len());

    let ckpt_every = tc.checkpoint_every;
    let epochs = tc.epochs;
    let seed = tc.seed;
    let out_dir2 = out_dir.clone();
    let trace = train::train(&mut model, &train_view, &tc, |epoch, m, mean_loss| {
        println!("epoch {epoch}: mean loss {mean_loss:.6}");
        if ckpt_every > 0 && (epoch + 1) % ckpt_every == 0 && epoch + 1 < epochs {
            let state = TrainState { epochs_done: epoch + 1, steps_done: 0, seed };
            checkpoint::save(&out_dir2.join(format!("checkpoint_ep{:03}.avck", epoch + 1)), m, &state)?;
        }
        Ok(())
    })?;

    let state = TrainState {
        epochs_done: tc.epochs,
        steps_done: trace.len() as u64,
        seed: tc.seed,
    };
    let ckpt_path = out_dir.join("checkpoint.avck");
    checkpoint::save(&ckpt_path, &model, &state)?;

    let mut csv = String::from("epoch,step,l_total,l_focal,l_x,l_y,l_w,l_h,l_conf\n");
    for row in &trace {
        let t = row.terms;
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            row.epoch,
            row.step,
            t.total(),
            t.focal,
            t.lx,
            t.ly,
            t.lw,
            t.lh,
            t.lconf
        ));
    }
    write_text(&out_dir.join("loss.csv"), &csv)?;
    write_meta(&out_dir.join("train"), tc.seed, &(&tc, &model.cfg))?;
    println!("checkpoint: {}", ckpt_path.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// detect
// ---------------------------------------------------------------------------

pub fn detect_cmd(raw: &[String]) -> Result<()> {
    const SPEC: &[FlagSpec] = &[
        val("checkpoint"),
        val("manifest"),
        val("out"),
        val("split"),
        val("split-frac"),
        val("conf-thresh"),
        val("nms-iou"),
        val("dump-attention"),
        switch("zero-audio"),
    ];
    let args = Args::parse(raw, SPEC)?;
    let ckpt_path = PathBuf::from(args.require("checkpoint")?);
    let manifest = PathBuf::from(args.require("manifest")?);
    let out = PathBuf::from(args.require("out")?);
    let conf_thresh = args.parse_or("conf-thresh", detect::DEFAULT_CONF_THRESH)?;
    let nms_iou = args.parse_or("nms-iou", detect::DEFAULT_NMS_IOU)?;
    let frac = args.parse_or("split-frac", 0.75f64)?;
    let zero_audio = args.has("zero-audio");
    let dump_dir = args.get("dump-attention").map(PathBuf::from);

    let (model, header) = checkpoint::load(&ckpt_path)?;
    let dataset = data::load_manifest(&manifest)?;
    let n = dataset.len();
    let (start, len) = {
        let n_train = ((n as f64) * frac).floor() as usize;
        match args.get("split").unwrap_or("val") {
            "train" => (0, n_train),
            "val" => (n_train, n - n_train),
            "all" => (0, n),
            other => {
                return Err(AvError::Usage(format!("--split must be train|val|all, got {other:?}")))
            }
        }
    };
    let view = data::Slice::new(&dataset, start, len);
    if let Some(dir) = &dump_dir {
        std::fs::create_dir_all(dir).map_err(|e| AvError::io(dir.display().to_string(), e))?;
    }

    let records = run_detection(&model, &view, conf_thresh, nms_iou, zero_audio, dump_dir.as_deref())?;
    let text = avfusion_core::io::detections::write_jsonl(&records)?;
    write_text(&out, &text)?;
    write_meta(&out, header.train_state.seed, &(conf_thresh, nms_iou, zero_audio, &header.repro))?;
    let total: usize = records.iter().map(|r| r.detections.len()).sum();
    println!("wrote {total} detections over {} samples to {}", records.len(), out.display());
    Ok(())
}

/// Forward + decode + NMS over a dataset view, in parallel, results in
/// index order.
pub fn run_detection(
    model: &Model<f32>,
    view: &dyn Dataset,
    conf_thresh: f64,
    nms_iou: f64,
    zero_audio: bool,
    dump_attention: Option<&Path>,
) -> Result<Vec<DetectionRecord>> {
    let silence = if zero_audio {
        let (c, m, f) = model.audio.input_shape();
        Some(Arc::new(Tensor::filled(&[c, m, f], dsp::LOG_EPS.ln() as f32)))
    } else {
        None
    };
    workers::try_parallel_map(view.len(), |i| {
        let sample = view.sample(i)?;
        let mel = silence.as_ref().unwrap_or(&sample.mel);
        let fwd = model.forward(&sample.video, mel)?;
        let decoded = detect::decode_boxes(&fwd.raw, &model.cfg.anchors)?;
        let kept = detect::nms(&decoded, nms_iou, conf_thresh);
        if let Some(dir) = dump_attention {
            let state = fwd.attention_state();
            tnsr::save(&dir.join(format!("w_av_{}.tnsr", sample.id)), &state.w_av)?;
            tnsr::save(&dir.join(format!("w_va_{}.tnsr", sample.id)), &state.w_va)?;
        }
        Ok::<_, AvError>(DetectionRecord {
            sample_id: sample.id,
            detections: kept.iter().map(DetectionEntry::from_detection).collect(),
        })
    })
}

// ---------------------------------------------------------------------------
// eval
// ---------------------------------------------------------------------------

pub fn eval_cmd(raw: &[String]) -> Result<()> {
    const SPEC: &[FlagSpec] = &[
        val("detections"),
        val("manifest"),
        val("out"),
        val("split"),
        val("split-frac"),
        val("iou"),
        val("pr-csv"),
    ];
    let args = Args::parse(raw, SPEC)?;
    let det_path = PathBuf::from(args.require("detections")?);
    let manifest = PathBuf::from(args.require("manifest")?);
    let out = PathBuf::from(args.require("out")?);
    let iou_thresh = args.parse_or("iou", eval::DEFAULT_AP_IOU)?;
    let frac = args.parse_or("split-frac", 0.75f64)?;

    let bytes =
        std::fs::read(&det_path).map_err(|e| AvError::io(det_path.display().to_string(), e))?;
    let det_records = avfusion_core::io::detections::parse_jsonl(&bytes)?;

    let dataset = data::load_manifest(&manifest)?;
    let n = dataset.len();
    let n_train = ((n as f64) * frac).floor() as usize;
    let (start, len) = match args.get("split").unwrap_or("val") {
        "train" => (0, n_train),
        "val" => (n_train, n - n_train),
        "all" => (0, n),
        other => return Err(AvError::Usage(format!("--split must be train|val|all, got {other:?}"))),
    };
    let view = data::Slice::new(&dataset, start, len);

    let scenes = scenes_from_records(&view, &det_records)?;
    let mut report = eval::evaluate(&scenes, iou_thresh);
    report.repro = Some(ReproStanza::for_config(0, &(iou_thresh, det_path.display().to_string()))?);
    write_json(&out, &report)?;
    if let Some(pr_path) = args.get("pr-csv") {
        let mut csv = String::from("class,score,recall,precision\n");
        for cls in &report.per_class {
            for p in &cls.pr_curve {
                csv.push_str(&format!("{},{},{},{}\n", cls.class, p.score, p.recall, p.precision));
            }
        }
        write_text(Path::new(pr_path), &csv)?;
    }
    for cls in &report.per_class {
        match cls.ap {
            Some(ap) => println!("AP {}: {:.4}", cls.class, ap),
            None => println!("AP {}: n/a (no ground truth)", cls.class),
        }
    }
    println!("mAP@{iou_thresh}: {:.4}", report.map);
    Ok(())
}

/// Join detection records onto the ground truth of a dataset view. Records
/// for unknown sample ids are validation errors.
pub fn scenes_from_records(
    view: &dyn Dataset,
    records: &[DetectionRecord],
) -> Result<Vec<eval::Scene>> {
    let mut by_id: std::collections::BTreeMap<&str, &DetectionRecord> = std::collections::BTreeMap::new();
    for r in records {
        if by_id.insert(r.sample_id.as_str(), r).is_some() {
            return Err(AvError::Validation(format!("duplicate detections for {:?}", r.sample_id)));
        }
    }
    let mut known = std::collections::BTreeSet::new();
    let mut scenes = Vec::with_capacity(view.len());
    for i in 0..view.len() {
        let id = view.id(i);
        known.insert(id.clone());
        let detections = by_id
            .get(id.as_str())
            .map(|r| r.detections.iter().map(|d| d.to_detection()).collect())
            .unwrap_or_default();
        scenes.push(eval::Scene { sample_id: id, detections, ground_truth: view.boxes(i)? });
    }
    for r in records {
        if !known.contains(&r.sample_id) {
            return Err(AvError::Validation(format!(
                "detections reference unknown sample {:?}",
                r.sample_id
            )));
        }
    }
    Ok(scenes)
}

// ---------------------------------------------------------------------------
// export-traj
// ---------------------------------------------------------------------------

pub fn export_traj(raw: &[String]) -> Result<()> {
    const SPEC: &[FlagSpec] = &[val("detections"), val("fps"), val("out")];
    let args = Args::parse(raw, SPEC)?;
    let det_path = PathBuf::from(args.require("detections")?);
    let out = PathBuf::from(args.require("out")?);
    let fps = args.parse_or("fps", 25.0f64)?;

    let bytes =
        std::fs::read(&det_path).map_err(|e| AvError::io(det_path.display().to_string(), e))?;
    let records = avfusion_core::io::detections::parse_jsonl(&bytes)?;
    // records in file order are the frame sequence
    let per_frame: Vec<(usize, Vec<avfusion_core::boxes::Detection>)> = records
        .iter()
        .enumerate()
        .map(|(f, r)| (f, r.detections.iter().map(|d| d.to_detection()).collect()))
        .collect();
    let csv = eval::export_trajectory(&per_frame, fps)?;
    write_text(&out, &csv)?;
    write_meta(&out, 0, &(fps, det_path.display().to_string()))?;
    println!("wrote {} trajectory rows to {}", csv.lines().count() - 1, out.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

pub fn gradcheck_cmd(raw: &[String]) -> Result<()> {
    const SPEC: &[FlagSpec] = &[val("tolerance")];
    let args = Args::parse(raw, SPEC)?;
    let tolerance = args.parse_or("tolerance", 1e-4f64)?;
    let table = avfusion_core::gradcheck::standard_table()?;
    println!("{:<20} {:>12}  status", "op", "max rel err");
    let mut ok = true;
    for entry in &table {
        let pass = entry.max_rel_err < tolerance;
        ok &= pass;
        println!(
            "{:<20} {:>12.3e}  {}",
            entry.name,
            entry.max_rel_err,
            if pass { "ok" } else { "FAIL" }
        );
    }
    if ok {
        Ok(())
    } else {
        Err(AvError::NonFinite(format!("gradient checks above tolerance {tolerance}")))
    }
}

