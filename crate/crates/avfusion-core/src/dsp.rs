//! Audio front end: STFT and stacked log-mel spectrograms.
//!
//! Fixed processing chain per channel: Hann window of 1024, hop 512,
//! centered frames with reflect padding, one-sided power spectrum, HTK-mel
//! triangular filterbank with 128 bands, log(x + 1e-10) compression. A
//! canonical 5 s, 48 kHz, 6-channel chunk comes out as 6 x 128 x 469.

use crate::error::{AvError, Result};
use crate::fft::{Complex, FftPlan};
use crate::tensor::Tensor;
use crate::workers;

pub const SAMPLE_RATE: u32 = 48_000;
pub const CHUNK_SECONDS: usize = 5;
pub const MIC_COUNT: usize = 6;
pub const WIN_SIZE: usize = 1024;
pub const HOP_SIZE: usize = 512;
pub const N_MELS: usize = 128;
pub const N_BINS: usize = WIN_SIZE / 2 + 1;
pub const LOG_EPS: f64 = 1e-10;

/// Samples in a canonical chunk (5 s at 48 kHz).
pub const CHUNK_SAMPLES: usize = CHUNK_SECONDS * SAMPLE_RATE as usize;
/// Frames a canonical chunk produces.
pub const CHUNK_FRAMES: usize = 1 + CHUNK_SAMPLES / HOP_SIZE;

/// Multichannel PCM audio in [-1, 1], shape `[channels, samples]`.
#[derive(Debug, Clone, PartialEq)]
pub struct AudioChunk {
    pub samples: Tensor<f64>,
    pub sample_rate: u32,
}

impl AudioChunk {
    pub fn new(samples: Tensor<f64>, sample_rate: u32) -> Result<AudioChunk> {
        if samples.shape().len() != 2 {
            return Err(AvError::Shape(format!(
                "audio chunk expects [channels, samples], got {:?}",
                samples.shape()
            )));
        }
        Ok(AudioChunk { samples, sample_rate })
    }

    pub fn channels(&self) -> usize {
        self.samples.shape()[0]
    }

    pub fn len(&self) -> usize {
        self.samples.shape()[1]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.len();
        &self.samples.data()[c * n..(c + 1) * n]
    }

    /// Check the canonical pipeline geometry: 6 channels, 5 s at 48 kHz,
    /// values in [-1, 1].
    pub fn validate_canonical(&self) -> Result<()> {
        if self.channels() != MIC_COUNT {
            return Err(AvError::Validation(format!(
                "expected {MIC_COUNT} channels, got {}",
                self.channels()
            )));
        }
        if self.sample_rate != SAMPLE_RATE {
            return Err(AvError::Validation(format!(
                "expected {SAMPLE_RATE} Hz, got {}",
                self.sample_rate
            )));
        }
        if self.len() != CHUNK_SAMPLES {
            return Err(AvError::Validation(format!(
                "expected {CHUNK_SAMPLES} samples per channel, got {}",
                self.len()
            )));
        }
        if self.samples.data().iter().any(|&v| !(-1.0..=1.0).contains(&v)) {
            return Err(AvError::Validation("audio samples outside [-1, 1]".into()));
        }
        Ok(())
    }
}

/// Stacked log-mel spectrograms, shape `[channels, n_mels, n_frames]`.
#[derive(Debug, Clone, PartialEq)]
pub struct MelSpectrogram {
    pub values: Tensor<f64>,
}

impl MelSpectrogram {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }

    pub fn n_mels(&self) -> usize {
        self.values.shape()[1]
    }

    pub fn n_frames(&self) -> usize {
        self.values.shape()[2]
    }
}

/// One-sided complex spectrogram, `n_bins x n_frames`.
pub struct ComplexSpec {
    pub n_bins: usize,
    pub n_frames: usize,
    data: Vec<Complex>,
}

impl ComplexSpec {
    pub fn at(&self, bin: usize, frame: usize) -> Complex {
        self.data[bin * self.n_frames + frame]
    }

    pub fn frame_count(signal_len: usize, hop: usize) -> usize {
        1 + signal_len / hop
    }
}

fn reflect_index(i: isize, n: isize) -> usize {
    if n == 1 {
        return 0;
    }
    let mut i = i;
    loop {
        if i < 0 {
            i = -i;
        } else if i >= n {
            i = 2 * n - 2 - i;
        } else {
            return i as usize;
        }
    }
}

/// Periodic Hann window of length `win`.
pub fn hann_window(win: usize) -> Vec<f64> {
    (0..win)
        .map(|j| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * j as f64 / win as f64).cos())
        .collect()
}

/// Short-time Fourier transform with centered frames.
///
/// The signal is reflect-padded by `win/2` on both ends; frame `t` covers
/// padded samples `[t*hop, t*hop + win)`, giving `1 + floor(N/hop)` frames
/// and `win/2 + 1` one-sided bins.
pub fn stft(signal: &[f64], win: usize, hop: usize) -> Result<ComplexSpec> {
    if signal.is_empty() {
        return Err(AvError::Validation("stft: empty signal".into()));
    }
    if !win.is_power_of_two() || hop == 0 {
        return Err(AvError::Validation("stft: window must be a power of two, hop positive".into()));
    }
    let n = signal.len();
    let pad = win / 2;
    let mut padded = Vec::with_capacity(n + 2 * pad);
    for i in 0..(n + 2 * pad) {
        padded.push(signal[reflect_index(i as isize - pad as isize, n as isize)]);
    }
    let window = hann_window(win);
    let n_frames = ComplexSpec::frame_count(n, hop);
    let n_bins = win / 2 + 1;
    let plan = FftPlan::new(win);

    let mut data = vec![Complex::ZERO; n_bins * n_frames];
    let zero_frame = vec![0.0f64; win];
    let mut frame_a = vec![0.0f64; win];
    let mut frame_b = vec![0.0f64; win];
    let mut out_a = vec![Complex::ZERO; n_bins];
    let mut out_b = vec![Complex::ZERO; n_bins];
    let mut t = 0;
    while t < n_frames {
        for (j, fa) in frame_a.iter_mut().enumerate() {
            *fa = padded[t * hop + j] * window[j];
        }
        let second = t + 1 < n_frames;
        if second {
            for (j, fb) in frame_b.iter_mut().enumerate() {
                *fb = padded[(t + 1) * hop + j] * window[j];
            }
        } else {
            frame_b.copy_from_slice(&zero_frame);
        }
        plan.forward_real_pair(&frame_a, &frame_b, &mut out_a, &mut out_b);
        for (bin, &v) in out_a.iter().enumerate() {
            data[bin * n_frames + t] = v;
        }
        if second {
            for (bin, &v) in out_b.iter().enumerate() {
                data[bin * n_frames + t + 1] = v;
            }
        }
        t += 2;
    }
    Ok(ComplexSpec { n_bins, n_frames, data })
}

/// Triangular mel filterbank on the HTK scale.
pub struct MelFilterbank {
    pub n_mels: usize,
    pub n_bins: usize,
    /// Peak frequency of each filter in Hz.
    pub peak_hz: Vec<f64>,
    /// Per filter: first nonzero bin and the weights from there on.
    sparse: Vec<(usize, Vec<f64>)>,
}

pub fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

pub fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

impl MelFilterbank {
    /// Build `n_mels` filters with peaks equally spaced on the mel scale
    /// between `f_min` and `f_max` (n_mels + 2 support points in total),
    /// evaluated at the FFT bin centers `k * sample_rate / n_fft`.
    pub fn new(n_fft: usize, n_mels: usize, f_min: f64, f_max: f64, sample_rate: u32) -> Result<MelFilterbank> {
        if !(f_max > f_min && f_min >= 0.0) || f_max > sample_rate as f64 / 2.0 + 1e-9 {
            return Err(AvError::Validation(format!(
                "degenerate mel frequency range [{f_min}, {f_max}] at {sample_rate} Hz"
            )));
        }
        if n_mels == 0 {
            return Err(AvError::Validation("n_mels must be positive".into()));
        }
        let n_bins = n_fft / 2 + 1;
        let mel_lo = hz_to_mel(f_min);
        let mel_hi = hz_to_mel(f_max);
        let hz: Vec<f64> = (0..n_mels + 2)
            .map(|i| mel_to_hz(mel_lo + (mel_hi - mel_lo) * i as f64 / (n_mels + 1) as f64))
            .collect();
        let bin_hz: Vec<f64> =
            (0..n_bins).map(|k| k as f64 * sample_rate as f64 / n_fft as f64).collect();

        let mut sparse = Vec::with_capacity(n_mels);
        for m in 0..n_mels {
            let (left, peak, right) = (hz[m], hz[m + 1], hz[m + 2]);
            let mut start = None;
            let mut weights = Vec::new();
            for (k, &f) in bin_hz.iter().enumerate() {
                let w = ((f - left) / (peak - left)).min((right - f) / (right - peak)).max(0.0);
                if w > 0.0 {
                    if start.is_none() {
                        start = Some(k);
                    }
                    weights.push(w);
                } else if start.is_some() {
                    break;
                }
            }
            sparse.push((start.unwrap_or(0), weights));
        }
        Ok(MelFilterbank {
            n_mels,
            n_bins,
            peak_hz: hz[1..=n_mels].to_vec(),
            sparse,
        })
    }

    pub fn canonical() -> MelFilterbank {
        MelFilterbank::new(WIN_SIZE, N_MELS, 0.0, SAMPLE_RATE as f64 / 2.0, SAMPLE_RATE)
            .expect("canonical filterbank parameters are valid")
    }

    /// Dense `[n_mels, n_bins]` weight matrix.
    pub fn dense(&self) -> Tensor<f64> {
        let mut t = Tensor::zeros(&[self.n_mels, self.n_bins]);
        for (m, (start, ws)) in self.sparse.iter().enumerate() {
            for (off, &w) in ws.iter().enumerate() {
                t.data_mut()[m * self.n_bins + start + off] = w;
            }
        }
        t
    }

    /// Project one power-spectrum frame onto the mel bands.
    pub fn apply_frame(&self, power: &[f64], out: &mut [f64]) {
        debug_assert_eq!(power.len(), self.n_bins);
        debug_assert_eq!(out.len(), self.n_mels);
        for (m, (start, ws)) in self.sparse.iter().enumerate() {
            let mut acc = 0.0;
            for (off, &w) in ws.iter().enumerate() {
                acc += w * power[start + off];
            }
            out[m] = acc;
        }
    }
}

/// Log-mel spectrogram of every channel, stacked on the leading axis.
///
/// Per channel: `log(|STFT|^2 projected on the mel bands + 1e-10)`.
/// Channels are processed in parallel with per-channel deterministic
/// results.
pub fn mel_spectrogram(chunk: &AudioChunk) -> Result<MelSpectrogram> {
    mel_spectrogram_with(chunk, &MelFilterbank::canonical())
}

pub fn mel_spectrogram_with(chunk: &AudioChunk, fb: &MelFilterbank) -> Result<MelSpectrogram> {
    if chunk.is_empty() {
        return Err(AvError::Validation("mel_spectrogram: empty signal".into()));
    }
    let channels = chunk.channels();
    let n_frames = ComplexSpec::frame_count(chunk.len(), HOP_SIZE);
    let per_channel: Vec<Vec<f64>> = workers::try_parallel_map(channels, |c| {
        mel_channel(chunk.channel(c), fb, n_frames)
    })?;
    let mut values = Tensor::zeros(&[channels, fb.n_mels, n_frames]);
    let plane = fb.n_mels * n_frames;
    for (c, ch) in per_channel.iter().enumerate() {
        values.data_mut()[c * plane..(c + 1) * plane].copy_from_slice(ch);
    }
    values.ensure_finite("mel_spectrogram")?;
    Ok(MelSpectrogram { values })
}

fn mel_channel(signal: &[f64], fb: &MelFilterbank, n_frames: usize) -> Result<Vec<f64>> {
    let spec = stft(signal, WIN_SIZE, HOP_SIZE)?;
    debug_assert_eq!(spec.n_frames, n_frames);
    let mut out = vec![0.0f64; fb.n_mels * n_frames];
    let mut power = vec![0.0f64; spec.n_bins];
    let mut mel = vec![0.0f64; fb.n_mels];
    for t in 0..n_frames {
        for (bin, p) in power.iter_mut().enumerate() {
            *p = spec.at(bin, t).norm_sq();
        }
        fb.apply_frame(&power, &mut mel);
        for (m, &v) in mel.iter().enumerate() {
            out[m * n_frames + t] = (v + LOG_EPS).ln();
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::DetRng;

    #[test]
    fn canonical_frame_count_is_469() {
        assert_eq!(CHUNK_FRAMES, 469);
        assert_eq!(ComplexSpec::frame_count(CHUNK_SAMPLES, HOP_SIZE), 469);
    }

    #[test]
    fn zero_signal_gives_zero_spectrum() {
        let spec = stft(&vec![0.0; 4096], WIN_SIZE, HOP_SIZE).unwrap();
        for bin in 0..spec.n_bins {
            for t in 0..spec.n_frames {
                assert_eq!(spec.at(bin, t), Complex::ZERO);
            }
        }
    }

    #[test]
    fn stft_rejects_empty_signal() {
        assert!(stft(&[], WIN_SIZE, HOP_SIZE).is_err());
    }

    #[test]
    fn stft_matches_naive_dft_oracle() {
        // naive O(N^2) reference: reflect pad, window, direct DFT per frame
        let mut rng = DetRng::new(30);
        let n = 4800;
        let signal: Vec<f64> = (0..n).map(|_| rng.range_f64(-1.0, 1.0)).collect();
        let spec = stft(&signal, WIN_SIZE, HOP_SIZE).unwrap();
        assert_eq!(spec.n_frames, 1 + n / HOP_SIZE);

        let pad = WIN_SIZE / 2;
        let padded: Vec<f64> = (0..n + 2 * pad)
            .map(|i| signal[reflect_index(i as isize - pad as isize, n as isize)])
            .collect();
        let window = hann_window(WIN_SIZE);
        let mut max_err = 0.0f64;
        for t in [0usize, 3, spec.n_frames - 1] {
            for bin in [0usize, 1, 200, 512] {
                let mut re = 0.0;
                let mut im = 0.0;
                for j in 0..WIN_SIZE {
                    let v = padded[t * HOP_SIZE + j] * window[j];
                    let ang = -2.0 * std::f64::consts::PI * (bin * j) as f64 / WIN_SIZE as f64;
                    re += v * ang.cos();
                    im += v * ang.sin();
                }
                let got = spec.at(bin, t);
                max_err = max_err.max((got.re - re).abs()).max((got.im - im).abs());
            }
        }
        assert!(max_err < 1e-5, "max abs err {max_err}");
    }

    #[test]
    fn filterbank_peaks_strictly_increase() {
        let fb = MelFilterbank::canonical();
        assert_eq!(fb.n_mels, 128);
        for w in fb.peak_hz.windows(2) {
            assert!(w[1] > w[0]);
        }
    }

    #[test]
    fn filterbank_rows_are_unimodal() {
        let fb = MelFilterbank::canonical();
        let dense = fb.dense();
        for m in 0..fb.n_mels {
            let row = &dense.data()[m * fb.n_bins..(m + 1) * fb.n_bins];
            let peak = row
                .iter()
                .enumerate()
                .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
                .unwrap()
                .0;
            for i in 1..=peak {
                assert!(row[i] >= row[i - 1]);
            }
            for i in peak + 1..row.len() {
                assert!(row[i] <= row[i - 1]);
            }
            assert!(row.iter().all(|&v| v >= 0.0));
        }
    }

    #[test]
    fn interior_bins_are_covered() {
        let fb = MelFilterbank::canonical();
        let dense = fb.dense();
        for bin in 1..fb.n_bins - 1 {
            let covered = (0..fb.n_mels).any(|m| dense.data()[m * fb.n_bins + bin] > 0.0);
            assert!(covered, "bin {bin} uncovered");
        }
    }

    #[test]
    fn sine_energy_concentrates_at_its_filter() {
        let fb = MelFilterbank::canonical();
        let m = 40;
        let f = fb.peak_hz[m];
        let n = 24_000; // half a second
        let signal: Vec<f64> = (0..n)
            .map(|i| 0.5 * (2.0 * std::f64::consts::PI * f * i as f64 / SAMPLE_RATE as f64).sin())
            .collect();
        let spec = stft(&signal, WIN_SIZE, HOP_SIZE).unwrap();
        let mut per_filter = vec![0.0f64; fb.n_mels];
        let mut power = vec![0.0f64; spec.n_bins];
        let mut mel = vec![0.0f64; fb.n_mels];
        for t in 0..spec.n_frames {
            for (bin, p) in power.iter_mut().enumerate() {
                *p = spec.at(bin, t).norm_sq();
            }
            fb.apply_frame(&power, &mut mel);
            for (i, &v) in mel.iter().enumerate() {
                per_filter[i] += v;
            }
        }
        let total: f64 = per_filter.iter().sum();
        let local: f64 = per_filter[m - 1] + per_filter[m] + per_filter[m + 1];
        assert!(local / total > 0.9, "concentration {}", local / total);
    }

    #[test]
    fn silence_maps_to_log_eps() {
        let chunk = AudioChunk::new(Tensor::zeros(&[2, 2048]), SAMPLE_RATE).unwrap();
        let mel = mel_spectrogram(&chunk).unwrap();
        for &v in mel.values.data() {
            assert!((v - LOG_EPS.ln()).abs() < 1e-12);
        }
    }

    #[test]
    fn canonical_chunk_shape_is_6_128_469() {
        let mut rng = DetRng::new(31);
        let data: Vec<f64> = (0..MIC_COUNT * CHUNK_SAMPLES).map(|_| rng.range_f64(-0.5, 0.5)).collect();
        let chunk = AudioChunk::new(
            Tensor::from_vec(&[MIC_COUNT, CHUNK_SAMPLES], data).unwrap(),
            SAMPLE_RATE,
        )
        .unwrap();
        chunk.validate_canonical().unwrap();
        let mel = mel_spectrogram(&chunk).unwrap();
        assert_eq!(mel.values.shape(), &[6, 128, 469]);
    }

    #[test]
    fn doubling_amplitude_adds_log4() {
        let mut rng = DetRng::new(32);
        let n = 4096;
        let base: Vec<f64> = (0..n).map(|_| rng.range_f64(-0.4, 0.4)).collect();
        let twice: Vec<f64> = base.iter().map(|v| v * 2.0).collect();
        let c1 = AudioChunk::new(Tensor::from_vec(&[1, n], base).unwrap(), SAMPLE_RATE).unwrap();
        let c2 = AudioChunk::new(Tensor::from_vec(&[1, n], twice).unwrap(), SAMPLE_RATE).unwrap();
        let m1 = mel_spectrogram(&c1).unwrap();
        let m2 = mel_spectrogram(&c2).unwrap();
        let log4 = 4.0f64.ln();
        for (&a, &b) in m1.values.data().iter().zip(m2.values.data()) {
            // the identity only holds away from the eps floor
            if a > LOG_EPS.ln() + 20.0 {
                assert!((b - a - log4).abs() < 1e-6, "a={a} b={b}");
            }
        }
    }

    #[test]
    fn channel_permutation_permutes_output() {
        let mut rng = DetRng::new(33);
        let n = 3072;
        let ch: Vec<Vec<f64>> = (0..3)
            .map(|_| (0..n).map(|_| rng.range_f64(-0.5, 0.5)).collect())
            .collect();
        let stack = |order: &[usize]| {
            let mut data = Vec::with_capacity(3 * n);
            for &c in order {
                data.extend_from_slice(&ch[c]);
            }
            AudioChunk::new(Tensor::from_vec(&[3, n], data).unwrap(), SAMPLE_RATE).unwrap()
        };
        let m_abc = mel_spectrogram(&stack(&[0, 1, 2])).unwrap();
        let m_cab = mel_spectrogram(&stack(&[2, 0, 1])).unwrap();
        let plane = m_abc.n_mels() * m_abc.n_frames();
        for (dst, src) in [(0usize, 2usize), (1, 0), (2, 1)] {
            assert_eq!(
                &m_cab.values.data()[dst * plane..(dst + 1) * plane],
                &m_abc.values.data()[src * plane..(src + 1) * plane]
            );
        }
    }

    #[test]
    fn scaling_never_decreases_mel_power() {
        let mut rng = DetRng::new(34);
        let n = 2048;
        let base: Vec<f64> = (0..n).map(|_| rng.range_f64(-0.3, 0.3)).collect();
        let scaled: Vec<f64> = base.iter().map(|v| v * 1.7).collect();
        let c1 = AudioChunk::new(Tensor::from_vec(&[1, n], base).unwrap(), SAMPLE_RATE).unwrap();
        let c2 = AudioChunk::new(Tensor::from_vec(&[1, n], scaled).unwrap(), SAMPLE_RATE).unwrap();
        let m1 = mel_spectrogram(&c1).unwrap();
        let m2 = mel_spectrogram(&c2).unwrap();
        for (&a, &b) in m1.values.data().iter().zip(m2.values.data()) {
            assert!(b >= a - 1e-12);
        }
    }
}
