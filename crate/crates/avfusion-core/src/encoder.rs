//! Trainable video and audio encoders.
//!
//! Both encoders end at the same grid: `feat_dim x grid_h x grid_w`. The
//! video path is a strided 3D conv stack that collapses the 16 frames down
//! to a single temporal slice; every spatial cell of its output corresponds
//! to a region of the final frame. The audio path runs a strided 2D conv
//! stack over (mel, time), bottlenecks to a small intermediate map, then
//! upsamples through transposed convolutions onto the same grid, which is
//! what lets engine sound land at image positions.
//!
//! Inputs are shifted and scaled by fixed constants before the first layer,
//! so an all-silence spectrogram enters as exact zeros. Each conv is
//! followed by a leaky ReLU (slope 0.1). Kernels use uniform fan-in
//! initialization from the seeded generator; biases start at zero.

use serde::{Deserialize, Serialize};

use crate::error::{AvError, Result};
use crate::ops::{self, PointwiseFn};
use crate::rng::DetRng;
use crate::tensor::{Scalar, Tensor};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv3Spec {
    pub out_ch: usize,
    pub kernel: (usize, usize, usize),
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Conv2Spec {
    pub out_ch: usize,
    pub kernel: (usize, usize),
    pub stride: (usize, usize),
    pub padding: (usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EncoderConfig {
    /// Output grid (H, W) shared by both encoders.
    pub grid: (usize, usize),
    /// Feature width D of each encoder output.
    pub feat_dim: usize,
    /// Video input (channels, frames, height, width).
    pub video_input: (usize, usize, usize, usize),
    /// Audio input (channels, mel bands, frames).
    pub audio_input: (usize, usize, usize),
    pub video_layers: Vec<Conv3Spec>,
    pub audio_layers: Vec<Conv2Spec>,
    pub audio_deconv: Vec<Conv2Spec>,
    /// Fixed input normalization (shift, scale): x' = (x - shift) / scale.
    pub video_norm: (f64, f64),
    pub audio_norm: (f64, f64),
}

impl Default for EncoderConfig {
    fn default() -> EncoderConfig {
        EncoderConfig {
            grid: (7, 7),
            feat_dim: 64,
            video_input: (3, 16, 224, 224),
            audio_input: (6, 128, 469),
            video_layers: vec![
                Conv3Spec { out_ch: 4, kernel: (2, 8, 8), stride: (2, 8, 8), padding: (0, 0, 0) },
                Conv3Spec { out_ch: 24, kernel: (4, 4, 4), stride: (2, 2, 2), padding: (1, 1, 1) },
                Conv3Spec { out_ch: 40, kernel: (4, 4, 4), stride: (2, 2, 2), padding: (1, 1, 1) },
                Conv3Spec { out_ch: 64, kernel: (2, 3, 3), stride: (2, 1, 1), padding: (0, 1, 1) },
            ],
            audio_layers: vec![
                Conv2Spec { out_ch: 8, kernel: (8, 5), stride: (4, 8), padding: (2, 0) },
                Conv2Spec { out_ch: 24, kernel: (4, 7), stride: (2, 4), padding: (1, 0) },
                Conv2Spec { out_ch: 32, kernel: (4, 4), stride: (2, 2), padding: (1, 1) },
                Conv2Spec { out_ch: 32, kernel: (4, 3), stride: (2, 2), padding: (1, 1) },
            ],
            audio_deconv: vec![
                Conv2Spec { out_ch: 32, kernel: (3, 3), stride: (2, 2), padding: (1, 1) },
                Conv2Spec { out_ch: 64, kernel: (3, 3), stride: (1, 1), padding: (1, 1) },
            ],
            video_norm: (0.5, 0.5),
            audio_norm: (crate::dsp::LOG_EPS.ln(), 8.0),
        }
    }
}

impl EncoderConfig {
    /// Small configuration for gradient checking: 3x3 grid, 8 features.
    pub fn tiny() -> EncoderConfig {
        EncoderConfig {
            grid: (3, 3),
            feat_dim: 8,
            video_input: (3, 4, 12, 12),
            audio_input: (2, 8, 11),
            video_layers: vec![
                Conv3Spec { out_ch: 4, kernel: (2, 4, 4), stride: (2, 4, 4), padding: (0, 0, 0) },
                Conv3Spec { out_ch: 8, kernel: (2, 3, 3), stride: (2, 1, 1), padding: (0, 1, 1) },
            ],
            audio_layers: vec![
                Conv2Spec { out_ch: 4, kernel: (2, 3), stride: (2, 2), padding: (0, 0) },
                Conv2Spec { out_ch: 6, kernel: (2, 3), stride: (2, 2), padding: (0, 0) },
            ],
            audio_deconv: vec![
                Conv2Spec { out_ch: 8, kernel: (2, 2), stride: (1, 1), padding: (0, 0) },
            ],
            video_norm: (0.5, 0.5),
            audio_norm: (crate::dsp::LOG_EPS.ln(), 8.0),
        }
    }

    /// Video chain shapes, layer by layer, starting at the input.
    pub fn video_chain(&self) -> Result<Vec<(usize, usize, usize, usize)>> {
        let mut shapes = vec![self.video_input];
        let (_, mut t, mut h, mut w) = self.video_input;
        for (i, spec) in self.video_layers.iter().enumerate() {
            t = ops::conv_out_dim(t, spec.kernel.0, spec.stride.0, spec.padding.0)
                .map_err(|e| AvError::Shape(format!("video layer {i} (time): {e}")))?;
            h = ops::conv_out_dim(h, spec.kernel.1, spec.stride.1, spec.padding.1)
                .map_err(|e| AvError::Shape(format!("video layer {i} (height): {e}")))?;
            w = ops::conv_out_dim(w, spec.kernel.2, spec.stride.2, spec.padding.2)
                .map_err(|e| AvError::Shape(format!("video layer {i} (width): {e}")))?;
            shapes.push((spec.out_ch, t, h, w));
        }
        Ok(shapes)
    }

    /// Audio chain shapes through the conv and deconv stages.
    pub fn audio_chain(&self) -> Result<Vec<(usize, usize, usize)>> {
        let mut shapes = vec![self.audio_input];
        let (_, mut h, mut w) = self.audio_input;
        for (i, spec) in self.audio_layers.iter().enumerate() {
            h = ops::conv_out_dim(h, spec.kernel.0, spec.stride.0, spec.padding.0)
                .map_err(|e| AvError::Shape(format!("audio layer {i} (height): {e}")))?;
            w = ops::conv_out_dim(w, spec.kernel.1, spec.stride.1, spec.padding.1)
                .map_err(|e| AvError::Shape(format!("audio layer {i} (width): {e}")))?;
            shapes.push((spec.out_ch, h, w));
        }
        for (i, spec) in self.audio_deconv.iter().enumerate() {
            h = ops::deconv_out_dim(h, spec.kernel.0, spec.stride.0, spec.padding.0)
                .map_err(|e| AvError::Shape(format!("audio deconv {i} (height): {e}")))?;
            w = ops::deconv_out_dim(w, spec.kernel.1, spec.stride.1, spec.padding.1)
                .map_err(|e| AvError::Shape(format!("audio deconv {i} (width): {e}")))?;
            shapes.push((spec.out_ch, h, w));
        }
        Ok(shapes)
    }

    /// Confirm both chains land on `feat_dim x grid`, with time collapsed.
    pub fn validate(&self) -> Result<()> {
        let video = self.video_chain()?;
        let (c, t, h, w) = *video.last().expect("chain has at least the input");
        if t != 1 || (h, w) != self.grid || c != self.feat_dim {
            return Err(AvError::Shape(format!(
                "video chain ends at {c}x{t}x{h}x{w}, want {}x1x{}x{}",
                self.feat_dim, self.grid.0, self.grid.1
            )));
        }
        let audio = self.audio_chain()?;
        let (c, h, w) = *audio.last().expect("chain has at least the input");
        if (h, w) != self.grid || c != self.feat_dim {
            return Err(AvError::Shape(format!(
                "audio chain ends at {c}x{h}x{w}, want {}x{}x{}",
                self.feat_dim, self.grid.0, self.grid.1
            )));
        }
        if self.audio_norm.1 == 0.0 || self.video_norm.1 == 0.0 {
            return Err(AvError::Validation("normalization scale must be nonzero".into()));
        }
        Ok(())
    }

    /// Total learnable parameters in both encoders (kernels and biases).
    pub fn encoder_param_count(&self) -> Result<usize> {
        let mut n = 0;
        let video = self.video_chain()?;
        for (i, spec) in self.video_layers.iter().enumerate() {
            let c_in = video[i].0;
            let (kt, kh, kw) = spec.kernel;
            n += spec.out_ch * c_in * kt * kh * kw + spec.out_ch;
        }
        let audio = self.audio_chain()?;
        for (i, spec) in self.audio_layers.iter().enumerate() {
            let c_in = audio[i].0;
            n += spec.out_ch * c_in * spec.kernel.0 * spec.kernel.1 + spec.out_ch;
        }
        let off = self.audio_layers.len();
        for (i, spec) in self.audio_deconv.iter().enumerate() {
            let c_in = audio[off + i].0;
            n += c_in * spec.out_ch * spec.kernel.0 * spec.kernel.1 + spec.out_ch;
        }
        Ok(n)
    }
}

fn he_uniform<T: Scalar>(shape: &[usize], fan_in: usize, rng: &mut DetRng) -> Tensor<T> {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n).map(|_| T::from_f64(rng.range_f64(-bound, bound))).collect();
    Tensor::from_vec(shape, data).expect("init shape is valid")
}

// ---------------------------------------------------------------------------
// video encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv3dLayer<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: (usize, usize, usize),
    pub padding: (usize, usize, usize),
}

#[derive(Debug, Clone)]
pub struct VideoEncoder<T: Scalar> {
    pub layers: Vec<Conv3dLayer<T>>,
    pub norm: (f64, f64),
    pub(crate) input_shape: (usize, usize, usize, usize),
}

pub struct VideoCache<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    preacts: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

impl<T: Scalar> VideoEncoder<T> {
    pub fn input_shape(&self) -> (usize, usize, usize, usize) {
        self.input_shape
    }

    pub fn init(cfg: &EncoderConfig, rng: &mut DetRng) -> Result<VideoEncoder<T>> {
        cfg.validate()?;
        let chain = cfg.video_chain()?;
        let layers = cfg
            .video_layers
            .iter()
            .enumerate()
            .map(|(i, spec)| {
                let c_in = chain[i].0;
                let (kt, kh, kw) = spec.kernel;
                let fan_in = c_in * kt * kh * kw;
                Conv3dLayer {
                    kernel: he_uniform(&[spec.out_ch, c_in, kt, kh, kw], fan_in, rng),
                    bias: Tensor::zeros(&[spec.out_ch]),
                    stride: spec.stride,
                    padding: spec.padding,
                }
            })
            .collect();
        Ok(VideoEncoder { layers, norm: cfg.video_norm, input_shape: cfg.video_input })
    }

    /// Clip `[C,T,H,W]` -> feature map `[D,grid_h,grid_w]` plus caches.
    pub fn forward(&self, clip: &Tensor<T>) -> Result<VideoCache<T>> {
        let (c, t, h, w) = self.input_shape;
        if clip.shape() != [c, t, h, w] {
            return Err(AvError::Shape(format!(
                "video input {:?} does not match configured {:?}",
                clip.shape(),
                [c, t, h, w]
            )));
        }
        let shift = T::from_f64(self.norm.0);
        let inv = T::from_f64(1.0 / self.norm.1);
        let mut x = clip.map(|v| (v - shift) * inv);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut z = ops::conv3d(&x, &layer.kernel, layer.stride, layer.padding)?;
            ops::add_channel_bias(&mut z, &layer.bias)?;
            let a = ops::pointwise(&z, PointwiseFn::LeakyRelu)?;
            inputs.push(x);
            preacts.push(z);
            x = a;
        }
        // collapse the singleton time axis
        let s = x.shape().to_vec();
        let output = x.reshape(&[s[0], s[2], s[3]])?;
        Ok(VideoCache { inputs, preacts, output })
    }

    /// Pull a gradient w.r.t. the output map back through the stack.
    /// Returns (kernel_grad, bias_grad) per layer, first layer first.
    pub fn backward(&self, cache: &VideoCache<T>, d_out: &Tensor<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let s = cache.output.shape();
        let mut d_x = d_out.clone().reshape(&[s[0], 1, s[1], s[2]])?;
        let mut grads = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let d_z = ops::pointwise_backward(&cache.preacts[i], PointwiseFn::LeakyRelu, &d_x)?;
            let d_bias = ops::channel_bias_grad(&d_z);
            let ks = layer.kernel.shape();
            let d_kernel = ops::conv3d_backward_kernel(
                &d_z,
                &cache.inputs[i],
                layer.stride,
                layer.padding,
                (ks[0], ks[1], ks[2], ks[3], ks[4]),
            )?;
            if i > 0 {
                let xs = cache.inputs[i].shape();
                d_x = ops::conv3d_backward_input(
                    &d_z,
                    &layer.kernel,
                    layer.stride,
                    layer.padding,
                    (xs[0], xs[1], xs[2], xs[3]),
                )?;
            }
            grads[i] = Some((d_kernel, d_bias));
        }
        Ok(grads.into_iter().map(|g| g.expect("all layers visited")).collect())
    }
}

// ---------------------------------------------------------------------------
// audio encoder
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct Conv2dLayer<T: Scalar> {
    pub kernel: Tensor<T>,
    pub bias: Tensor<T>,
    pub stride: (usize, usize),
    pub padding: (usize, usize),
    /// Transposed convolution when set; kernel layout is then
    /// `[C_in, C_out, kh, kw]`.
    pub transposed: bool,
}

#[derive(Debug, Clone)]
pub struct AudioEncoder<T: Scalar> {
    pub layers: Vec<Conv2dLayer<T>>,
    pub norm: (f64, f64),
    pub(crate) input_shape: (usize, usize, usize),
}

pub struct AudioCache<T: Scalar> {
    inputs: Vec<Tensor<T>>,
    preacts: Vec<Tensor<T>>,
    pub output: Tensor<T>,
}

impl<T: Scalar> AudioEncoder<T> {
    pub fn input_shape(&self) -> (usize, usize, usize) {
        self.input_shape
    }

    pub fn init(cfg: &EncoderConfig, rng: &mut DetRng) -> Result<AudioEncoder<T>> {
        cfg.validate()?;
        let chain = cfg.audio_chain()?;
        let mut layers = Vec::with_capacity(cfg.audio_layers.len() + cfg.audio_deconv.len());
        for (i, spec) in cfg.audio_layers.iter().enumerate() {
            let c_in = chain[i].0;
            let fan_in = c_in * spec.kernel.0 * spec.kernel.1;
            layers.push(Conv2dLayer {
                kernel: he_uniform(&[spec.out_ch, c_in, spec.kernel.0, spec.kernel.1], fan_in, rng),
                bias: Tensor::zeros(&[spec.out_ch]),
                stride: spec.stride,
                padding: spec.padding,
                transposed: false,
            });
        }
        let off = cfg.audio_layers.len();
        for (i, spec) in cfg.audio_deconv.iter().enumerate() {
            let c_in = chain[off + i].0;
            let fan_in = c_in * spec.kernel.0 * spec.kernel.1;
            layers.push(Conv2dLayer {
                kernel: he_uniform(&[c_in, spec.out_ch, spec.kernel.0, spec.kernel.1], fan_in, rng),
                bias: Tensor::zeros(&[spec.out_ch]),
                stride: spec.stride,
                padding: spec.padding,
                transposed: true,
            });
        }
        Ok(AudioEncoder { layers, norm: cfg.audio_norm, input_shape: cfg.audio_input })
    }

    /// Mel stack `[C,mels,frames]` -> feature map `[D,grid_h,grid_w]`.
    pub fn forward(&self, mel: &Tensor<T>) -> Result<AudioCache<T>> {
        let (c, m, f) = self.input_shape;
        if mel.shape() != [c, m, f] {
            return Err(AvError::Shape(format!(
                "audio input {:?} does not match configured {:?}",
                mel.shape(),
                [c, m, f]
            )));
        }
        let shift = T::from_f64(self.norm.0);
        let inv = T::from_f64(1.0 / self.norm.1);
        let mut x = mel.map(|v| (v - shift) * inv);
        let mut inputs = Vec::with_capacity(self.layers.len());
        let mut preacts = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let mut z = if layer.transposed {
                ops::conv_transpose2d(&x, &layer.kernel, layer.stride, layer.padding)?
            } else {
                ops::conv2d(&x, &layer.kernel, layer.stride, layer.padding)?
            };
            ops::add_channel_bias(&mut z, &layer.bias)?;
            let a = ops::pointwise(&z, PointwiseFn::LeakyRelu)?;
            inputs.push(x);
            preacts.push(z);
            x = a;
        }
        Ok(AudioCache { inputs, preacts, output: x })
    }

    pub fn backward(&self, cache: &AudioCache<T>, d_out: &Tensor<T>) -> Result<Vec<(Tensor<T>, Tensor<T>)>> {
        let mut d_x = d_out.clone();
        let mut grads = vec![None; self.layers.len()];
        for (i, layer) in self.layers.iter().enumerate().rev() {
            let d_z = ops::pointwise_backward(&cache.preacts[i], PointwiseFn::LeakyRelu, &d_x)?;
            let d_bias = ops::channel_bias_grad(&d_z);
            let ks = layer.kernel.shape();
            let kshape = (ks[0], ks[1], ks[2], ks[3]);
            let xs = cache.inputs[i].shape();
            let xshape = (xs[0], xs[1], xs[2]);
            let d_kernel = if layer.transposed {
                ops::conv_transpose2d_backward_kernel(&d_z, &cache.inputs[i], layer.stride, layer.padding, kshape)?
            } else {
                ops::conv2d_backward_kernel(&d_z, &cache.inputs[i], layer.stride, layer.padding, kshape)?
            };
            if i > 0 {
                d_x = if layer.transposed {
                    ops::conv_transpose2d_backward_input(&d_z, &layer.kernel, layer.stride, layer.padding, xshape)?
                } else {
                    ops::conv2d_backward_input(&d_z, &layer.kernel, layer.stride, layer.padding, xshape)?
                };
            }
            grads[i] = Some((d_kernel, d_bias));
        }
        Ok(grads.into_iter().map(|g| g.expect("all layers visited")).collect())
    }
}
