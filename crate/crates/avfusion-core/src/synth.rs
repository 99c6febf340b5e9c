//! Deterministic synthetic scene generator.
//!
//! Each sample is a 16-frame clip of textured rectangles on a noisy
//! background plus a 5-second 6-channel audio chunk. Moving vehicles
//! translate across the clip; idling and engine-off vehicles stand still.
//! Vehicles with a running engine (moving or idling) emit a harmonic tone
//! attenuated per microphone by 1 / (1 + |x_vehicle - x_mic| / sigma), with
//! the six microphones evenly spaced along x. Engine-off vehicles emit
//! nothing.
//!
//! The construction carries the label structure the detector has to learn:
//! video alone cannot separate idling from engine-off (the renders are
//! bit-identical), and audio alone cannot separate moving from idling (both
//! emit the same tone model).
//!
//! Every random choice comes from a stream keyed by (master seed, sample
//! index, purpose), so samples are reproducible in any generation order.
//! Geometry, class assignment, audio parameters and the two noise fields
//! use separate streams; flipping one vehicle's class between idling and
//! engine-off therefore changes nothing else.

use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};

use crate::boxes::{iou, BoundingBox, VehicleClass};
use crate::data::{Dataset, ManifestRecord, PreparedSample};
use crate::dsp::{self, AudioChunk};
use crate::error::{AvError, Result};
use crate::rng::DetRng;
use crate::tensor::Tensor;
use crate::workers;

pub const FRAMES: usize = 16;
pub const IMG_SIZE: usize = 224;
pub const IMG_CHANNELS: usize = 3;

// stream labels
const STREAM_GEOM: u64 = 0;
const STREAM_CLASS: u64 = 1;
const STREAM_AUDIO: u64 = 2;
const STREAM_VIDEO_NOISE: u64 = 3;
const STREAM_AUDIO_NOISE: u64 = 4;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SynthConfig {
    pub n_samples: usize,
    pub seed: u64,
    /// Vehicles per sample, inclusive range.
    pub vehicle_count: (usize, usize),
    pub mic_count: usize,
    /// Engine fundamental in Hz, inclusive range.
    pub engine_fundamental_hz: (f64, f64),
    pub harmonics: usize,
    /// Peak amplitude of the white background noise per channel.
    pub noise_amplitude: f64,
    /// Moving-vehicle speed in pixels per frame, inclusive range.
    pub moving_speed_px: (f64, f64),
    /// Attenuation length scale in normalized x units.
    pub attenuation_scale: f64,
    pub class_proportions: [f64; 3],
    /// Peak amplitude of the background pixel noise around mid-gray.
    pub video_noise: f64,
}

impl Default for SynthConfig {
    fn default() -> SynthConfig {
        SynthConfig {
            n_samples: 100,
            seed: 0,
            vehicle_count: (1, 3),
            mic_count: dsp::MIC_COUNT,
            engine_fundamental_hz: (80.0, 120.0),
            harmonics: 4,
            noise_amplitude: 0.005,
            moving_speed_px: (2.0, 6.0),
            attenuation_scale: 0.12,
            class_proportions: [1.0 / 3.0; 3],
            video_noise: 0.1,
        }
    }
}

impl SynthConfig {
    pub fn validate(&self) -> Result<()> {
        let ok = self.n_samples > 0
            && self.vehicle_count.0 >= 1
            && self.vehicle_count.0 <= self.vehicle_count.1
            && self.mic_count >= 1
            && self.engine_fundamental_hz.0 > 0.0
            && self.engine_fundamental_hz.0 <= self.engine_fundamental_hz.1
            && self.harmonics >= 1
            && self.noise_amplitude >= 0.0
            && self.moving_speed_px.0 > 0.0
            && self.moving_speed_px.0 <= self.moving_speed_px.1
            && self.attenuation_scale > 0.0
            && self.class_proportions.iter().all(|&p| p >= 0.0)
            && self.class_proportions.iter().sum::<f64>() > 0.0
            && self.video_noise >= 0.0;
        if ok {
            Ok(())
        } else {
            Err(AvError::Validation("synth config has an empty or non-positive range".into()))
        }
    }

    pub fn sample_id(index: usize) -> String {
        format!("sample_{index:06}")
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct VehicleSpec {
    pub class: VehicleClass,
    /// Box at the final frame, normalized.
    pub cx: f64,
    pub cy: f64,
    pub w: f64,
    pub h: f64,
    /// Per-frame displacement, normalized units; applied only when moving.
    pub step_x: f64,
    pub step_y: f64,
    pub color: [f64; 3],
    pub stripe_period: usize,
    pub stripe_contrast: f64,
    /// Engine tone parameters; used only when the engine runs.
    pub tone_f0: f64,
    pub tone_gain: f64,
    pub tone_phases: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SceneSpec {
    pub index: usize,
    pub vehicles: Vec<VehicleSpec>,
}

/// Deterministic scene for one sample index.
pub fn scene(cfg: &SynthConfig, index: usize) -> SceneSpec {
    let idx = index as u64;
    let mut geom = DetRng::with_streams(cfg.seed, &[idx, STREAM_GEOM]);
    let mut class_rng = DetRng::with_streams(cfg.seed, &[idx, STREAM_CLASS]);
    let mut audio_rng = DetRng::with_streams(cfg.seed, &[idx, STREAM_AUDIO]);

    let want = cfg.vehicle_count.0 + geom.below(cfg.vehicle_count.1 - cfg.vehicle_count.0 + 1);
    let mut vehicles: Vec<VehicleSpec> = Vec::with_capacity(want);
    for _ in 0..want {
        let mut placed = false;
        for _attempt in 0..100 {
            // wide size spread keeps the clustered anchors distinct; the
            // floor stays above one grid cell so boxes are localizable
            let w = geom.range_f64(0.12, 0.45);
            let h = geom.range_f64(0.10, 0.35);
            let cx = geom.range_f64(0.15, 0.85);
            let cy = geom.range_f64(0.15, 0.85);
            let speed_px = geom.range_f64(cfg.moving_speed_px.0, cfg.moving_speed_px.1);
            let angle = geom.range_f64(0.0, 2.0 * std::f64::consts::PI);
            let color = [geom.uniform(), geom.uniform(), geom.uniform()];
            let stripe_period = 3 + geom.below(5);
            let stripe_contrast = geom.range_f64(0.12, 0.3);

            let candidate = BoundingBox { cx, cy, w, h, class: VehicleClass::Moving };
            let clash = vehicles.iter().any(|v| {
                let b = BoundingBox { cx: v.cx, cy: v.cy, w: v.w, h: v.h, class: v.class };
                iou(&candidate, &b) > 0.3
            });
            if clash {
                continue;
            }
            vehicles.push(VehicleSpec {
                class: VehicleClass::Moving, // assigned below
                cx,
                cy,
                w,
                h,
                step_x: speed_px * angle.cos() / IMG_SIZE as f64,
                step_y: speed_px * angle.sin() / IMG_SIZE as f64,
                color,
                stripe_period,
                stripe_contrast,
                tone_f0: 0.0,
                tone_gain: 0.0,
                tone_phases: Vec::new(),
            });
            placed = true;
            break;
        }
        if !placed {
            break; // sample keeps fewer vehicles
        }
    }
    for v in &mut vehicles {
        let c = class_rng.weighted(&cfg.class_proportions);
        v.class = VehicleClass::from_index(c).expect("three proportions");
        v.tone_f0 = audio_rng.range_f64(cfg.engine_fundamental_hz.0, cfg.engine_fundamental_hz.1);
        v.tone_gain = audio_rng.range_f64(0.12, 0.22);
        v.tone_phases =
            (0..cfg.harmonics).map(|_| audio_rng.range_f64(0.0, 2.0 * std::f64::consts::PI)).collect();
    }
    SceneSpec { index, vehicles }
}

/// Ground truth at the final frame.
pub fn ground_truth(spec: &SceneSpec) -> Vec<BoundingBox> {
    spec.vehicles
        .iter()
        .map(|v| BoundingBox { cx: v.cx, cy: v.cy, w: v.w, h: v.h, class: v.class })
        .collect()
}

/// Render the 16-frame clip `[3, 16, 224, 224]`, values in [0, 1].
pub fn render_video(cfg: &SynthConfig, spec: &SceneSpec) -> Tensor<f32> {
    let size = IMG_SIZE;
    let mut noise = DetRng::with_streams(cfg.seed, &[spec.index as u64, STREAM_VIDEO_NOISE]);
    // static background, rendered once
    let mut background = vec![0.0f32; IMG_CHANNELS * size * size];
    for px in background.iter_mut() {
        *px = (0.5 + cfg.video_noise * (2.0 * noise.uniform() - 1.0)).clamp(0.0, 1.0) as f32;
    }
    let mut data = vec![0.0f32; IMG_CHANNELS * FRAMES * size * size];
    let plane = size * size;
    for c in 0..IMG_CHANNELS {
        for t in 0..FRAMES {
            let dst = (c * FRAMES + t) * plane;
            data[dst..dst + plane].copy_from_slice(&background[c * plane..(c + 1) * plane]);
        }
    }
    for t in 0..FRAMES {
        let back_steps = (FRAMES - 1 - t) as f64;
        for v in &spec.vehicles {
            let (cx, cy) = if v.class == VehicleClass::Moving {
                (v.cx - back_steps * v.step_x, v.cy - back_steps * v.step_y)
            } else {
                (v.cx, v.cy)
            };
            let x0 = (((cx - v.w / 2.0) * size as f64).round() as isize).clamp(0, size as isize);
            let x1 = (((cx + v.w / 2.0) * size as f64).round() as isize).clamp(0, size as isize);
            let y0 = (((cy - v.h / 2.0) * size as f64).round() as isize).clamp(0, size as isize);
            let y1 = (((cy + v.h / 2.0) * size as f64).round() as isize).clamp(0, size as isize);
            for y in y0..y1 {
                for x in x0..x1 {
                    let stripe = ((x as usize / v.stripe_period + y as usize / v.stripe_period) % 2)
                        as f64
                        * 2.0
                        - 1.0;
                    for c in 0..IMG_CHANNELS {
                        let val = (v.color[c] + stripe * v.stripe_contrast).clamp(0.0, 1.0);
                        data[(c * FRAMES + t) * plane + y as usize * size + x as usize] = val as f32;
                    }
                }
            }
        }
    }
    Tensor::from_vec(&[IMG_CHANNELS, FRAMES, size, size], data).expect("video shape is fixed")
}

/// Render the 5-second multichannel audio chunk.
pub fn render_audio(cfg: &SynthConfig, spec: &SceneSpec) -> AudioChunk {
    let n = dsp::CHUNK_SAMPLES;
    let mics = cfg.mic_count;
    let mut noise = DetRng::with_streams(cfg.seed, &[spec.index as u64, STREAM_AUDIO_NOISE]);
    let mut data = vec![0.0f64; mics * n];
    for v in data.iter_mut() {
        *v = cfg.noise_amplitude * (2.0 * noise.uniform() - 1.0);
    }
    let mut mono = vec![0.0f64; n];
    for v in &spec.vehicles {
        if !v.class.emits_sound() {
            continue;
        }
        mono.iter_mut().for_each(|s| *s = 0.0);
        for (m, &phase) in v.tone_phases.iter().enumerate() {
            let harmonic = (m + 1) as f64;
            let amp = v.tone_gain / harmonic;
            let omega = 2.0 * std::f64::consts::PI * v.tone_f0 * harmonic / dsp::SAMPLE_RATE as f64;
            // rotating phasor instead of a sin() per sample
            let (rot_re, rot_im) = (omega.cos(), omega.sin());
            let (mut re, mut im) = (phase.cos(), phase.sin());
            for s in mono.iter_mut() {
                *s += amp * im;
                let nre = re * rot_re - im * rot_im;
                im = re * rot_im + im * rot_re;
                re = nre;
            }
        }
        for c in 0..mics {
            let mic_x = (c as f64 + 0.5) / mics as f64;
            let att = 1.0 / (1.0 + (v.cx - mic_x).abs() / cfg.attenuation_scale);
            let ch = &mut data[c * n..(c + 1) * n];
            for (dst, &src) in ch.iter_mut().zip(&mono) {
                *dst += att * src;
            }
        }
    }
    for v in data.iter_mut() {
        *v = v.clamp(-1.0, 1.0);
    }
    AudioChunk::new(
        Tensor::from_vec(&[mics, n], data).expect("audio shape is fixed"),
        dsp::SAMPLE_RATE,
    )
    .expect("rank 2 by construction")
}

/// Generate `n_samples` to disk: TNSR clips under `video/`, WAV chunks under
/// `audio/`, plus `manifest.jsonl`. Returns the manifest records in index
/// order. Workers render distinct samples; output bytes do not depend on
/// the worker count.
pub fn generate(cfg: &SynthConfig, out_dir: &Path) -> Result<Vec<ManifestRecord>> {
    cfg.validate()?;
    let video_dir = out_dir.join("video");
    let audio_dir = out_dir.join("audio");
    std::fs::create_dir_all(&video_dir)
        .map_err(|e| AvError::io(video_dir.display().to_string(), e))?;
    std::fs::create_dir_all(&audio_dir)
        .map_err(|e| AvError::io(audio_dir.display().to_string(), e))?;

    let records: Vec<ManifestRecord> = workers::try_parallel_map(cfg.n_samples, |i| {
        let spec = scene(cfg, i);
        let id = SynthConfig::sample_id(i);
        let video = render_video(cfg, &spec);
        let audio = render_audio(cfg, &spec);
        let video_rel = format!("video/{id}.tnsr");
        let audio_rel = format!("audio/{id}.wav");
        crate::io::tnsr::save(&out_dir.join(&video_rel), &video)?;
        crate::io::wav::save(&out_dir.join(&audio_rel), &audio)?;
        Ok::<_, AvError>(ManifestRecord {
            id,
            video_path: video_rel,
            audio_path: audio_rel,
            boxes: ground_truth(&spec),
        })
    })?;

    let manifest_path = out_dir.join("manifest.jsonl");
    let text = crate::data::write_manifest(&records)?;
    std::fs::write(&manifest_path, text)
        .map_err(|e| AvError::io(manifest_path.display().to_string(), e))?;
    Ok(records)
}

/// Procedural dataset: identical sample content to [`generate`] without
/// touching disk. Mel spectrograms are precomputed and held in memory;
/// video tensors are re-rendered on each access.
pub struct SynthDataset {
    cfg: SynthConfig,
    mels: Vec<Arc<Tensor<f32>>>,
    boxes: Vec<Vec<BoundingBox>>,
}

impl SynthDataset {
    pub fn prepare(cfg: SynthConfig) -> Result<SynthDataset> {
        cfg.validate()?;
        let per_sample: Vec<(Arc<Tensor<f32>>, Vec<BoundingBox>)> =
            workers::try_parallel_map(cfg.n_samples, |i| {
                let spec = scene(&cfg, i);
                let mut audio = render_audio(&cfg, &spec);
                // round through 16-bit PCM so the spectrograms match a
                // generated-then-loaded dataset bit for bit
                for v in audio.samples.data_mut() {
                    *v = (*v * 32767.0).round().clamp(-32768.0, 32767.0) / 32768.0;
                }
                let mel = dsp::mel_spectrogram(&audio)?;
                Ok::<_, AvError>((Arc::new(mel.values.cast::<f32>()), ground_truth(&spec)))
            })?;
        let (mels, boxes) = per_sample.into_iter().unzip();
        Ok(SynthDataset { cfg, mels, boxes })
    }

    pub fn config(&self) -> &SynthConfig {
        &self.cfg
    }
}

impl Dataset for SynthDataset {
    fn len(&self) -> usize {
        self.cfg.n_samples
    }

    fn id(&self, i: usize) -> String {
        SynthConfig::sample_id(i)
    }

    fn boxes(&self, i: usize) -> Result<Vec<BoundingBox>> {
        Ok(self.boxes[i].clone())
    }

    fn sample(&self, i: usize) -> Result<PreparedSample> {
        let spec = scene(&self.cfg, i);
        Ok(PreparedSample {
            id: self.id(i),
            video: render_video(&self.cfg, &spec),
            mel: Arc::clone(&self.mels[i]),
            boxes: self.boxes[i].clone(),
        })
    }
}
