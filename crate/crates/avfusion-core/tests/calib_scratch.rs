use std::time::Instant;

use avfusion_core::boxes::VehicleClass;
use avfusion_core::data::{split, Dataset, Slice};
use avfusion_core::detect::{self, AnchorSet};
use avfusion_core::dsp;
use avfusion_core::encoder::EncoderConfig;
use avfusion_core::eval::{self, Scene};
use avfusion_core::model::{Model, ModelConfig};
use avfusion_core::synth::{SynthConfig, SynthDataset};
use avfusion_core::tensor::Tensor;
use avfusion_core::train::{self, TrainConfig};
use avfusion_core::workers;

fn evaluate_model_nms(
    model: &Model<f32>,
    view: &dyn Dataset,
    zero_audio: bool,
    conf_thresh: f64,
    nms_iou: f64,
) -> eval::EvalReport {
    let silence = if zero_audio {
        let (c, m, f) = model.audio.input_shape();
        Some(std::sync::Arc::new(Tensor::filled(&[c, m, f], dsp::LOG_EPS.ln() as f32)))
    } else {
        None
    };
    let scenes: Vec<Scene> = workers::try_parallel_map(view.len(), |i| {
        let s = view.sample(i)?;
        let mel = silence.as_ref().unwrap_or(&s.mel);
        let fwd = model.forward(&s.video, mel)?;
        let decoded = detect::decode_boxes(&fwd.raw, &model.cfg.anchors)?;
        let kept = detect::nms(&decoded, nms_iou, conf_thresh);
        Ok::<_, avfusion_core::AvError>(Scene {
            sample_id: s.id,
            detections: kept,
            ground_truth: s.boxes,
        })
    })
    .unwrap();
    let max_conf = scenes
        .iter()
        .flat_map(|s| s.detections.iter().map(|d| d.confidence))
        .fold(0.0f64, f64::max);
    let n_dets: usize = scenes.iter().map(|s| s.detections.len()).sum();
    eprintln!("    [conf>{conf_thresh}] {} detections, max conf {max_conf:.3}", n_dets);
    eval::evaluate(&scenes, 0.5)
}

fn evaluate_model(model: &Model<f32>, view: &dyn Dataset, zero_audio: bool, conf_thresh: f64) -> eval::EvalReport {
    evaluate_model_nms(model, view, zero_audio, conf_thresh, 0.5)
}

fn ap_of(report: &eval::EvalReport, class: VehicleClass) -> f64 {
    report.per_class[class.index()].ap.unwrap_or(0.0)
}

#[test]
fn overfit_probe() {
    if std::env::var("CAL_OVERFIT").is_err() {
        return;
    }
    let n = 8;
    let ds = SynthDataset::prepare(SynthConfig { n_samples: n, seed: 5, ..SynthConfig::default() })
        .unwrap();
    let mut shapes = Vec::new();
    for i in 0..n {
        for b in ds.boxes(i).unwrap() {
            shapes.push((b.w, b.h));
        }
    }
    let anchors = detect::kmeans_anchors(&shapes, 5, 1).unwrap();
    let cfg = ModelConfig { encoder: EncoderConfig::default(), anchors };
    let mut model = Model::<f32>::init(cfg, 1).unwrap();
    let tc = TrainConfig {
        epochs: 120,
        batch_size: 8,
        learning_rate: 2e-3,
        seed: 1,
        checkpoint_every: 0,
        ..TrainConfig::default()
    };
    let t0 = Instant::now();
    train::train(&mut model, &ds, &tc, |e, m, mean| {
        if e % 20 == 19 {
            eprintln!("epoch {e}: loss {mean:.5} ({:?})", t0.elapsed());
            // probe best IoU any-conf per GT + rank quality on sample 0
            let s = ds.sample(0).unwrap();
            let fwd = m.forward(&s.video, &s.mel).unwrap();
            let decoded = detect::decode_boxes(&fwd.raw, &m.cfg.anchors).unwrap();
            for gt in &s.boxes {
                let best = decoded
                    .iter()
                    .map(|d| avfusion_core::boxes::iou(&d.bbox, gt))
                    .fold(0.0f64, f64::max);
                let best_ranked = decoded
                    .iter()
                    .max_by(|a, b| a.ranking_score().partial_cmp(&b.ranking_score()).unwrap())
                    .unwrap();
                eprintln!(
                    "  gt {:?} {:?}: best iou {:.3}; top det iou {:.3} conf {:.3} class {:?}",
                    gt.class,
                    (gt.cx, gt.cy),
                    best,
                    avfusion_core::boxes::iou(&best_ranked.bbox, gt),
                    best_ranked.confidence,
                    best_ranked.bbox.class
                );
            }
        }
        Ok(())
    })
    .unwrap();
    let report = evaluate_model(&model, &Slice::new(&ds, 0, n), false, 0.01);
    eprintln!(
        "train-set mAP {:.3} moving {:.3} idling {:.3} engine_off {:.3}",
        report.map,
        ap_of(&report, VehicleClass::Moving),
        ap_of(&report, VehicleClass::Idling),
        ap_of(&report, VehicleClass::EngineOff)
    );
}

#[test]
fn audio_signal_probe() {
    if std::env::var("CAL_SIGNAL_PROBE").is_err() {
        return;
    }
    // single static vehicle per scene; how separable is tone presence in
    // (a) raw mel band means, (b) pooled random-init audio encoder features
    let cfg = SynthConfig {
        n_samples: 100,
        seed: 91,
        vehicle_count: (1, 1),
        class_proportions: [0.0, 0.5, 0.5],
        ..SynthConfig::default()
    };
    let ds = SynthDataset::prepare(cfg).unwrap();
    let model = Model::<f32>::init(
        ModelConfig {
            encoder: EncoderConfig::default(),
            anchors: detect::AnchorSet::new(vec![(0.2, 0.2)]).unwrap(),
        },
        3,
    )
    .unwrap();
    let mut idle_feats: Vec<Vec<f64>> = Vec::new();
    let mut off_feats: Vec<Vec<f64>> = Vec::new();
    let mut idle_mel = Vec::new();
    let mut off_mel = Vec::new();
    for i in 0..ds.len() {
        let s = ds.sample(i).unwrap();
        let cls = s.boxes[0].class;
        // mel tone-band mean (bins 0..16) as the raw reference
        let mel = &s.mel;
        let (mels, frames) = (mel.shape()[1], mel.shape()[2]);
        let mut band = 0.0;
        for c in 0..mel.shape()[0] {
            for m in 0..16 {
                for t in 0..frames {
                    band += mel.data()[(c * mels + m) * frames + t] as f64;
                }
            }
        }
        band /= (mel.shape()[0] * 16 * frames) as f64;
        // pooled audio encoder output
        let out = model.audio.forward(&s.mel).unwrap().output;
        let n_cells = out.shape()[1] * out.shape()[2];
        let d = out.shape()[0];
        let pooled: Vec<f64> = (0..d)
            .map(|ch| {
                out.data()[ch * n_cells..(ch + 1) * n_cells].iter().map(|&v| v as f64).sum::<f64>()
                    / n_cells as f64
            })
            .collect();
        if cls == VehicleClass::Idling {
            idle_feats.push(pooled);
            idle_mel.push(band);
        } else {
            off_feats.push(pooled);
            off_mel.push(band);
        }
    }
    let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len() as f64;
    let std = |v: &[f64], m: f64| (v.iter().map(|x| (x - m).powi(2)).sum::<f64>() / v.len() as f64).sqrt();
    let mi = mean(&idle_mel);
    let mo = mean(&off_mel);
    eprintln!(
        "raw mel band: idle {mi:.3}±{:.3} vs off {mo:.3}±{:.3} -> separation {:.2} sigmas",
        std(&idle_mel, mi),
        std(&off_mel, mo),
        (mi - mo).abs() / (std(&idle_mel, mi) + std(&off_mel, mo)).max(1e-9)
    );
    // best single-feature separation in the pooled encoder output
    let d = idle_feats[0].len();
    let mut best = (0usize, 0.0f64);
    for ch in 0..d {
        let iv: Vec<f64> = idle_feats.iter().map(|f| f[ch]).collect();
        let ov: Vec<f64> = off_feats.iter().map(|f| f[ch]).collect();
        let (mi, mo) = (mean(&iv), mean(&ov));
        let sep = (mi - mo).abs() / (std(&iv, mi) + std(&ov, mo)).max(1e-9);
        if sep > best.1 {
            best = (ch, sep);
        }
    }
    eprintln!("pooled encoder features: best channel {} separation {:.2} sigmas", best.0, best.1);
}

#[test]
fn audio_only_probe() {
    if std::env::var("CAL_AUDIO_PROBE").is_err() {
        return;
    }
    // static vehicles only: the idling/engine_off split is carried purely
    // by the audio channel
    let epochs: usize = std::env::var("CAL_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(24);
    let lr: f64 = std::env::var("CAL_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(2e-3);
    let (n_train, n_val) = (300usize, 80usize);
    let ds = SynthDataset::prepare(SynthConfig {
        n_samples: n_train + n_val,
        seed: 55,
        class_proportions: [0.0, 0.5, 0.5],
        ..SynthConfig::default()
    })
    .unwrap();
    let train_view = Slice::new(&ds, 0, n_train);
    let val_view = Slice::new(&ds, n_train, n_val);
    let mut shapes = Vec::new();
    for i in 0..train_view.len() {
        for b in train_view.boxes(i).unwrap() {
            shapes.push((b.w, b.h));
        }
    }
    let anchors = detect::kmeans_anchors(&shapes, 5, 1).unwrap();
    let cfg = ModelConfig { encoder: EncoderConfig::default(), anchors };
    let mut model = Model::<f32>::init(cfg, 1).unwrap();
    let tc = TrainConfig { epochs, learning_rate: lr, seed: 1, checkpoint_every: 0, ..TrainConfig::default() };
    let t0 = Instant::now();
    train::train(&mut model, &train_view, &tc, |e, m, mean| {
        if e % 4 == 3 {
            let full = evaluate_model(m, &val_view, false, 0.25);
            let abl = evaluate_model(m, &val_view, true, 0.25);
            eprintln!(
                "epoch {e}: loss {mean:.4} idling {:.3}/{:.3} engine_off {:.3}/{:.3} (full/ablated) ({:?})",
                ap_of(&full, VehicleClass::Idling),
                ap_of(&abl, VehicleClass::Idling),
                ap_of(&full, VehicleClass::EngineOff),
                ap_of(&abl, VehicleClass::EngineOff),
                t0.elapsed()
            );
        }
        Ok(())
    })
    .unwrap();
}

#[test]
fn calibrate_end_to_end() {
    if std::env::var("CAL_TRAIN").is_err() {
        return;
    }
    let n_train: usize = std::env::var("CAL_TRAIN").ok().and_then(|v| v.parse().ok()).unwrap_or(400);
    let n_val: usize = std::env::var("CAL_VAL").ok().and_then(|v| v.parse().ok()).unwrap_or(150);
    let epochs: usize = std::env::var("CAL_EPOCHS").ok().and_then(|v| v.parse().ok()).unwrap_or(8);
    let lr: f64 = std::env::var("CAL_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let seed: u64 = std::env::var("CAL_SEED").ok().and_then(|v| v.parse().ok()).unwrap_or(1);

    let t0 = Instant::now();
    let ds = SynthDataset::prepare(SynthConfig {
        n_samples: n_train + n_val,
        seed: 77,
        ..SynthConfig::default()
    })
    .unwrap();
    eprintln!("prepare {} samples: {:?}", ds.len(), t0.elapsed());

    let train_view = Slice::new(&ds, 0, n_train);
    let val_view = Slice::new(&ds, n_train, n_val);

    // anchors from training boxes
    let mut shapes = Vec::new();
    for i in 0..train_view.len() {
        for b in train_view.boxes(i).unwrap() {
            shapes.push((b.w, b.h));
        }
    }
    let anchors = detect::kmeans_anchors(&shapes, 5, seed).unwrap();
    eprintln!("anchors: {:?}", anchors.priors());

    let cfg = ModelConfig { encoder: EncoderConfig::default(), anchors };
    let mut model = Model::<f32>::init(cfg, seed).unwrap();
    let tc = TrainConfig { epochs, learning_rate: lr, seed, ..TrainConfig::default() };

    let t0 = Instant::now();
    let trace = train::train(&mut model, &train_view, &tc, |epoch, m, mean| {
        eprintln!("epoch {epoch}: loss {mean:.4} ({:?})", t0.elapsed());
        if std::env::var("CAL_EVAL_EACH").is_ok() {
            let r = evaluate_model(m, &val_view, false, 0.01);
            eprintln!(
                "  val mAP {:.3} moving {:.3} idling {:.3} engine_off {:.3}",
                r.map,
                ap_of(&r, VehicleClass::Moving),
                ap_of(&r, VehicleClass::Idling),
                ap_of(&r, VehicleClass::EngineOff)
            );
        }
        Ok(())
    })
    .unwrap();
    let means = train::epoch_means(&trace);
    eprintln!("epoch means: {:?}", means.iter().map(|(_, m)| *m).collect::<Vec<_>>());

    let full = evaluate_model(&model, &val_view, false, 0.01);
    let ablated = evaluate_model(&model, &val_view, true, 0.01);
    eprintln!(
        "FULL    mAP {:.3} moving {:.3} idling {:.3} engine_off {:.3}",
        full.map,
        ap_of(&full, VehicleClass::Moving),
        ap_of(&full, VehicleClass::Idling),
        ap_of(&full, VehicleClass::EngineOff)
    );
    eprintln!(
        "ABLATED mAP {:.3} moving {:.3} idling {:.3} engine_off {:.3}",
        ablated.map,
        ap_of(&ablated, VehicleClass::Moving),
        ap_of(&ablated, VehicleClass::Idling),
        ap_of(&ablated, VehicleClass::EngineOff)
    );
    eprintln!(
        "criteria: loss ratio {:.3} (<0.5), idling gap {:.3} (>=0.2), moving {:.3} (>=0.8)",
        means.last().unwrap().1 / means[0].1,
        ap_of(&full, VehicleClass::Idling) - ap_of(&ablated, VehicleClass::Idling),
        ap_of(&full, VehicleClass::Moving)
    );

    for (conf_t, nms_t) in [(0.1, 0.4), (0.2, 0.4), (0.25, 0.4), (0.1, 0.5), (0.25, 0.3)] {
        let f = evaluate_model_nms(&model, &val_view, false, conf_t, nms_t);
        let a = evaluate_model_nms(&model, &val_view, true, conf_t, nms_t);
        eprintln!(
            "  sweep conf {conf_t} nms {nms_t}: moving {:.3} idling {:.3}/{:.3} gap {:.3} mAP {:.3}",
            ap_of(&f, VehicleClass::Moving),
            ap_of(&f, VehicleClass::Idling),
            ap_of(&a, VehicleClass::Idling),
            ap_of(&f, VehicleClass::Idling) - ap_of(&a, VehicleClass::Idling),
            f.map
        );
    }

    // diagnostics: what do the kept detections look like vs ground truth
    for i in 0..3 {
        let s = val_view.sample(i).unwrap();
        let fwd = model.forward(&s.video, &s.mel).unwrap();
        let decoded = detect::decode_boxes(&fwd.raw, &model.cfg.anchors).unwrap();
        let kept = detect::nms(&decoded, 0.5, 0.25);
        eprintln!("sample {} ({} kept):", s.id, kept.len());
        for gt in &s.boxes {
            eprintln!("  gt {:?} cx {:.2} cy {:.2} w {:.2} h {:.2}", gt.class, gt.cx, gt.cy, gt.w, gt.h);
        }
        for d in kept.iter().take(6) {
            let best_iou = s
                .boxes
                .iter()
                .map(|g| avfusion_core::boxes::iou(&d.bbox, g))
                .fold(0.0f64, f64::max);
            eprintln!(
                "  det {:?} conf {:.3} score {:.3} iou-vs-gt {:.2} cx {:.2} cy {:.2} w {:.2} h {:.2}",
                d.bbox.class, d.confidence, d.ranking_score(), best_iou, d.bbox.cx, d.bbox.cy, d.bbox.w, d.bbox.h
            );
        }
    }
    let _ = split(&ds, 0.75).unwrap();
}
