//! The assembled detector: encoders, attention fusion, detection head.

use serde::{Deserialize, Serialize};

use crate::attention::{self, AttentionCache, AttentionState};
use crate::boxes::NUM_CLASSES;
use crate::detect::{self, AnchorSet, BOX_FIELDS};
use crate::encoder::{AudioCache, AudioEncoder, EncoderConfig, VideoCache, VideoEncoder};
use crate::error::{AvError, Result};
use crate::rng::DetRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub anchors: AnchorSet,
}

impl ModelConfig {
    pub fn fields_per_anchor(&self) -> usize {
        BOX_FIELDS + NUM_CLASSES
    }

    pub fn validate(&self) -> Result<()> {
        self.encoder.validate()
    }
}

/// Full forward state of one sample, kept for the backward pass.
pub struct ModelForward<T: Scalar> {
    pub video: VideoCache<T>,
    pub audio: AudioCache<T>,
    pub attn: AttentionCache<T>,
    pub fused: Tensor<T>,
    /// Raw head output `[H, W, K, 5 + classes]`.
    pub raw: Tensor<T>,
}

impl<T: Scalar> ModelForward<T> {
    pub fn attention_state(&self) -> AttentionState<T> {
        AttentionState {
            gamma_a: self.attn.gamma_a,
            gamma_v: self.attn.gamma_v,
            w_av: self.attn.w_av.clone(),
            w_va: self.attn.w_va.clone(),
        }
    }
}

/// Gradients for every parameter, ordered like [`Model::param_names`].
pub type ModelGrads<T> = Vec<Tensor<T>>;

#[derive(Debug, Clone)]
pub struct Model<T: Scalar> {
    pub cfg: ModelConfig,
    pub video: VideoEncoder<T>,
    pub audio: AudioEncoder<T>,
    pub gamma_a: Tensor<T>,
    pub gamma_v: Tensor<T>,
    pub rpn_weight: Tensor<T>,
    pub rpn_bias: Tensor<T>,
}

impl<T: Scalar> Model<T> {
    /// Seeded initialization. The audio residual scale starts at one, so
    /// the attention block begins as a diffuse pool that hands every visual
    /// cell an average of the audio features; without that, the per-cell
    /// detection head never sees engine evidence (a zero start makes the
    /// block the exact identity, and the scalar's own gradient is too weak
    /// to escape it). The visual residual scale starts at zero: pooling
    /// visual features across cells early on blurs localization.
    pub fn init(cfg: ModelConfig, seed: u64) -> Result<Model<T>> {
        cfg.validate()?;
        let mut rng = DetRng::with_streams(seed, &[0x1417]);
        let video = VideoEncoder::init(&cfg.encoder, &mut rng)?;
        let audio = AudioEncoder::init(&cfg.encoder, &mut rng)?;
        let out_ch = cfg.anchors.len() * cfg.fields_per_anchor();
        let in_ch = 2 * cfg.encoder.feat_dim;
        let bound = (6.0 / in_ch as f64).sqrt();
        let rpn_weight = Tensor::from_vec(
            &[out_ch, in_ch],
            (0..out_ch * in_ch).map(|_| T::from_f64(rng.range_f64(-bound, bound))).collect(),
        )?;
        Ok(Model {
            cfg,
            video,
            audio,
            gamma_a: Tensor::scalar(T::ONE),
            gamma_v: Tensor::scalar(T::ZERO),
            rpn_weight,
            rpn_bias: Tensor::zeros(&[out_ch]),
        })
    }

    pub fn forward(&self, clip: &Tensor<T>, mel: &Tensor<T>) -> Result<ModelForward<T>> {
        let video = self.video.forward(clip)?;
        let audio = self.audio.forward(mel)?;
        let (f_v_rw, f_a_rw, attn) = attention::bidir_attention(
            &video.output,
            &audio.output,
            self.gamma_a.data()[0],
            self.gamma_v.data()[0],
        )?;
        let fused = attention::concat_features(&f_v_rw, &f_a_rw)?;
        let raw = detect::rpn_forward(&fused, &self.rpn_weight, &self.rpn_bias, self.cfg.anchors.len())?;
        Ok(ModelForward { video, audio, attn, fused, raw })
    }

    /// Backpropagate a gradient w.r.t. the raw head output through the whole
    /// network. Returns one gradient tensor per parameter.
    pub fn backward(&self, fwd: &ModelForward<T>, d_raw: &Tensor<T>) -> Result<ModelGrads<T>> {
        let (d_fused, d_rpn_w, d_rpn_b) =
            detect::rpn_backward(&fwd.fused, &self.rpn_weight, d_raw)?;
        let (d_v_rw, d_a_rw) = attention::split_features(&d_fused)?;
        let (d_fv, d_fa, d_gamma_a, d_gamma_v) =
            attention::bidir_attention_backward(&fwd.attn, &d_v_rw, &d_a_rw)?;
        let video_grads = self.video.backward(&fwd.video, &d_fv)?;
        let audio_grads = self.audio.backward(&fwd.audio, &d_fa)?;

        let mut out = Vec::with_capacity(self.param_count_tensors());
        for (dk, db) in video_grads {
            out.push(dk);
            out.push(db);
        }
        for (dk, db) in audio_grads {
            out.push(dk);
            out.push(db);
        }
        out.push(Tensor::scalar(d_gamma_a));
        out.push(Tensor::scalar(d_gamma_v));
        out.push(d_rpn_w);
        out.push(d_rpn_b);
        Ok(out)
    }

    fn param_count_tensors(&self) -> usize {
        2 * (self.video.layers.len() + self.audio.layers.len()) + 4
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::with_capacity(self.param_count_tensors());
        for i in 0..self.video.layers.len() {
            names.push(format!("video.{i}.kernel"));
            names.push(format!("video.{i}.bias"));
        }
        for i in 0..self.audio.layers.len() {
            names.push(format!("audio.{i}.kernel"));
            names.push(format!("audio.{i}.bias"));
        }
        names.push("gamma_a".into());
        names.push("gamma_v".into());
        names.push("rpn.weight".into());
        names.push("rpn.bias".into());
        names
    }

    pub fn params(&self) -> Vec<&Tensor<T>> {
        let mut refs = Vec::with_capacity(self.param_count_tensors());
        for l in &self.video.layers {
            refs.push(&l.kernel);
            refs.push(&l.bias);
        }
        for l in &self.audio.layers {
            refs.push(&l.kernel);
            refs.push(&l.bias);
        }
        refs.push(&self.gamma_a);
        refs.push(&self.gamma_v);
        refs.push(&self.rpn_weight);
        refs.push(&self.rpn_bias);
        refs
    }

    pub fn params_mut(&mut self) -> Vec<&mut Tensor<T>> {
        let mut refs: Vec<&mut Tensor<T>> = Vec::with_capacity(self.param_count_tensors());
        for l in &mut self.video.layers {
            refs.push(&mut l.kernel);
            refs.push(&mut l.bias);
        }
        for l in &mut self.audio.layers {
            refs.push(&mut l.kernel);
            refs.push(&mut l.bias);
        }
        refs.push(&mut self.gamma_a);
        refs.push(&mut self.gamma_v);
        refs.push(&mut self.rpn_weight);
        refs.push(&mut self.rpn_bias);
        refs
    }

    pub fn num_params(&self) -> usize {
        self.params().iter().map(|t| t.numel()).sum()
    }

    /// Flatten all parameters into one vector (gradient-check plumbing).
    pub fn flatten_params(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for p in self.params() {
            out.extend(p.data().iter().map(|v| v.to_f64()));
        }
        out
    }

    /// Load parameters from a flat vector, inverse of [`Self::flatten_params`].
    pub fn unflatten_params(&mut self, flat: &[f64]) -> Result<()> {
        if flat.len() != self.num_params() {
            return Err(AvError::Shape(format!(
                "expected {} parameter values, got {}",
                self.num_params(),
                flat.len()
            )));
        }
        let mut off = 0;
        for p in self.params_mut() {
            let n = p.numel();
            for (dst, &src) in p.data_mut().iter_mut().zip(&flat[off..off + n]) {
                *dst = T::from_f64(src);
            }
            off += n;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> Model<U> {
        Model {
            cfg: self.cfg.clone(),
            video: VideoEncoder {
                layers: self
                    .video
                    .layers
                    .iter()
                    .map(|l| crate::encoder::Conv3dLayer {
                        kernel: l.kernel.cast(),
                        bias: l.bias.cast(),
                        stride: l.stride,
                        padding: l.padding,
                    })
                    .collect(),
                norm: self.video.norm,
                input_shape: self.video.input_shape(),
            },
            audio: AudioEncoder {
                layers: self
                    .audio
                    .layers
                    .iter()
                    .map(|l| crate::encoder::Conv2dLayer {
                        kernel: l.kernel.cast(),
                        bias: l.bias.cast(),
                        stride: l.stride,
                        padding: l.padding,
                        transposed: l.transposed,
                    })
                    .collect(),
                norm: self.audio.norm,
                input_shape: self.audio.input_shape(),
            },
            gamma_a: self.gamma_a.cast(),
            gamma_v: self.gamma_v.cast(),
            rpn_weight: self.rpn_weight.cast(),
            rpn_bias: self.rpn_bias.cast(),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    pub fn tiny_model(seed: u64) -> Model<f64> {
        let cfg = ModelConfig {
            encoder: EncoderConfig::tiny(),
            anchors: AnchorSet::new(vec![(0.2, 0.25), (0.5, 0.4)]).unwrap(),
        };
        Model::init(cfg, seed).unwrap()
    }

    fn tiny_inputs(seed: u64) -> (Tensor<f64>, Tensor<f64>) {
        let mut rng = DetRng::new(seed);
        let clip = Tensor::from_vec(
            &[3, 4, 12, 12],
            (0..3 * 4 * 12 * 12).map(|_| rng.uniform()).collect(),
        )
        .unwrap();
        let mel = Tensor::from_vec(
            &[2, 8, 11],
            (0..2 * 8 * 11).map(|_| rng.range_f64(-20.0, -2.0)).collect(),
        )
        .unwrap();
        (clip, mel)
    }

    #[test]
    fn forward_produces_expected_raw_shape() {
        let model = tiny_model(5);
        let (clip, mel) = tiny_inputs(6);
        let fwd = model.forward(&clip, &mel).unwrap();
        assert_eq!(fwd.raw.shape(), &[3, 3, 2, 8]);
        assert_eq!(fwd.fused.shape(), &[16, 3, 3]);
    }

    #[test]
    fn default_model_stays_under_param_budget() {
        let cfg = ModelConfig {
            encoder: EncoderConfig::default(),
            anchors: AnchorSet::new(vec![(0.1, 0.1), (0.2, 0.2), (0.3, 0.2), (0.2, 0.4), (0.5, 0.5)])
                .unwrap(),
        };
        let model = Model::<f32>::init(cfg, 1).unwrap();
        let n = model.num_params();
        assert!(n <= 200_000, "model has {n} params");
    }

    #[test]
    fn init_is_seed_deterministic() {
        let a = tiny_model(9);
        let b = tiny_model(9);
        let c = tiny_model(10);
        assert_eq!(a.flatten_params(), b.flatten_params());
        assert_ne!(a.flatten_params(), c.flatten_params());
    }

    #[test]
    fn flatten_unflatten_round_trip() {
        let mut m = tiny_model(11);
        let flat = m.flatten_params();
        let mut tweaked = flat.clone();
        tweaked[3] += 0.5;
        m.unflatten_params(&tweaked).unwrap();
        assert_eq!(m.flatten_params(), tweaked);
    }

    #[test]
    fn param_names_align_with_params() {
        let m = tiny_model(12);
        assert_eq!(m.param_names().len(), m.params().len());
        let grads_shape: Vec<Vec<usize>> = m.params().iter().map(|p| p.shape().to_vec()).collect();
        let (clip, mel) = tiny_inputs(13);
        let fwd = m.forward(&clip, &mel).unwrap();
        let d_raw = Tensor::filled(fwd.raw.shape(), 0.01);
        let grads = m.backward(&fwd, &d_raw).unwrap();
        assert_eq!(grads.len(), m.params().len());
        for (g, s) in grads.iter().zip(&grads_shape) {
            assert_eq!(g.shape(), &s[..]);
        }
    }
}
