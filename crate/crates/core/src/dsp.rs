//! Shared audio front-end: framing, learned band-pass filtering and a small
//! frozen convolution stack producing the frame-level spectral features that
//! both cache levels consume.
//!
//! The stack is: Hamming-windowed frames (401 samples, hop 80) -> 60
//! band-pass sinc filters -> two causal 1D conv layers (60 filters, kernel 5,
//! stride 1), each followed by average pooling (kernel 2, stride 2), frozen
//! batch normalization and leaky ReLU (slope 0.2).
//!
//! Extraction is streaming-capable: processing in fixed frame steps carries
//! explicit state and reproduces the whole-input result bit for bit.

use thiserror::Error;

use crate::audio::Waveform;
use crate::rng::{derive_seed, rng_from};
use crate::tensorfile::{TensorContainer, TensorFileError};
use rand::Rng;

pub const DEFAULT_WINDOW_LEN: usize = 401;
pub const DEFAULT_HOP: usize = 80;
pub const DEFAULT_CHANNELS: usize = 60;
pub const CONV_KERNEL: usize = 5;
pub const LEAKY_SLOPE: f32 = 0.2;
pub const BN_EPS: f32 = 1e-5;
/// Streaming step: features are flushed every this many input frames.
pub const STREAM_STEP_FRAMES: usize = 10;

#[derive(Debug, Error)]
pub enum DspError {
    #[error("input of {samples} samples is shorter than the {needed} required")]
    InputTooShort { samples: usize, needed: usize },
    #[error("waveform holds non-finite samples")]
    InvalidAudio,
    #[error("invalid band-pass filter: need 0 < f_low < f_high < Nyquist, got [{f_low}, {f_high}] at {sample_rate} Hz")]
    InvalidFilter {
        f_low: f64,
        f_high: f64,
        sample_rate: u32,
    },
    #[error("model file: {0}")]
    Model(#[from] TensorFileError),
}

/// Frame geometry of the front-end.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FrameSpec {
    pub window_len: usize,
    pub hop: usize,
}

impl Default for FrameSpec {
    fn default() -> Self {
        Self {
            window_len: DEFAULT_WINDOW_LEN,
            hop: DEFAULT_HOP,
        }
    }
}

impl FrameSpec {
    /// Number of whole frames in `samples` samples.
    pub fn frame_count(&self, samples: usize) -> Option<usize> {
        if samples < self.window_len {
            None
        } else {
            Some((samples - self.window_len) / self.hop + 1)
        }
    }
}

/// Frame-level spectral features (rows) plus nominal frame start times.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureSequence {
    pub frames: Vec<Vec<f32>>,
    pub frame_times: Vec<f64>,
}

impl FeatureSequence {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.frames.first().map(|f| f.len()).unwrap_or(0)
    }
}

fn hamming(len: usize) -> Vec<f32> {
    // symmetric window, mirrored so w[i] == w[len-1-i] holds exactly
    let mut w = vec![0.0f32; len];
    let denom = (len - 1) as f64;
    for i in 0..len.div_ceil(2) {
        let v = (0.54 - 0.46 * (2.0 * std::f64::consts::PI * i as f64 / denom).cos()) as f32;
        w[i] = v;
        w[len - 1 - i] = v;
    }
    w
}

/// Split a waveform into Hamming-tapered frames.
///
/// Frame `i` covers samples `[i*hop, i*hop + window_len)`.
pub fn frame(waveform: &Waveform, spec: &FrameSpec) -> Result<Vec<Vec<f32>>, DspError> {
    if waveform.samples.iter().any(|s| !s.is_finite()) {
        return Err(DspError::InvalidAudio);
    }
    let t = spec
        .frame_count(waveform.len())
        .ok_or(DspError::InputTooShort {
            samples: waveform.len(),
            needed: spec.window_len,
        })?;
    let taper = hamming(spec.window_len);
    let mut frames = Vec::with_capacity(t);
    for i in 0..t {
        let start = i * spec.hop;
        let row: Vec<f32> = taper
            .iter()
            .zip(&waveform.samples[start..start + spec.window_len])
            .map(|(t, s)| t * s)
            .collect();
        frames.push(row);
    }
    Ok(frames)
}

/// Band-pass filter kernel: difference of two Hamming-windowed sinc low-pass
/// filters. Symmetric about its center by construction.
pub fn sinc_kernel(
    f_low: f64,
    f_high: f64,
    length: usize,
    sample_rate: u32,
) -> Result<Vec<f32>, DspError> {
    let nyquist = sample_rate as f64 / 2.0;
    if !(0.0 < f_low && f_low < f_high && f_high < nyquist) {
        return Err(DspError::InvalidFilter {
            f_low,
            f_high,
            sample_rate,
        });
    }
    let center = (length - 1) as f64 / 2.0;
    let lo = f_low / sample_rate as f64;
    let hi = f_high / sample_rate as f64;
    let taper = hamming(length);
    let sinc = |x: f64| -> f64 {
        if x == 0.0 {
            1.0
        } else {
            (std::f64::consts::PI * x).sin() / (std::f64::consts::PI * x)
        }
    };
    let mut k = vec![0.0f32; length];
    for i in 0..length.div_ceil(2) {
        let n = i as f64 - center;
        let v = 2.0 * hi * sinc(2.0 * hi * n) - 2.0 * lo * sinc(2.0 * lo * n);
        let v = v as f32 * taper[i];
        k[i] = v;
        k[length - 1 - i] = v;
    }
    Ok(k)
}

/// One causal conv layer with its frozen post-pool normalization.
#[derive(Debug, Clone, PartialEq)]
struct ConvLayer {
    in_ch: usize,
    out_ch: usize,
    kernel: usize,
    /// weights[out][in][k], k indexes from oldest to newest input
    weights: Vec<f32>,
    bias: Vec<f32>,
    bn_gamma: Vec<f32>,
    bn_beta: Vec<f32>,
    bn_mean: Vec<f32>,
    bn_var: Vec<f32>,
}

impl ConvLayer {
    fn seeded(seed: u64, in_ch: usize, out_ch: usize, kernel: usize) -> Self {
        let mut rng = rng_from(seed);
        let fan_in = (in_ch * kernel) as f32;
        let bound = 1.0 / fan_in.sqrt();
        let weights = (0..out_ch * in_ch * kernel)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        let bias = (0..out_ch).map(|_| rng.gen_range(-bound..bound)).collect();
        let bn_gamma = (0..out_ch).map(|_| rng.gen_range(0.9..1.1)).collect();
        let bn_beta = (0..out_ch).map(|_| rng.gen_range(-0.1..0.1)).collect();
        ConvLayer {
            in_ch,
            out_ch,
            kernel,
            weights,
            bias,
            bn_gamma,
            bn_beta,
            bn_mean: vec![0.0; out_ch],
            bn_var: vec![1.0; out_ch],
        }
    }

    /// Convolve at one output position given the `kernel` most recent input
    /// rows, oldest first.
    fn conv_at(&self, history: &[&[f32]]) -> Vec<f32> {
        debug_assert_eq!(history.len(), self.kernel);
        let mut out = Vec::with_capacity(self.out_ch);
        for o in 0..self.out_ch {
            let mut acc = self.bias[o];
            // weights laid out [out][in][k], k oldest-to-newest
            for (k, row) in history.iter().enumerate() {
                for c in 0..self.in_ch {
                    acc += self.weights[(o * self.in_ch + c) * self.kernel + k] * row[c];
                }
            }
            out.push(acc);
        }
        out
    }

    fn bn_relu(&self, row: &mut [f32]) {
        for (c, x) in row.iter_mut().enumerate() {
            let norm = (*x - self.bn_mean[c]) / (self.bn_var[c] + BN_EPS).sqrt();
            let y = self.bn_gamma[c] * norm + self.bn_beta[c];
            *x = if y >= 0.0 { y } else { LEAKY_SLOPE * y };
        }
    }
}

/// The frozen feature extractor shared by both cache levels.
#[derive(Debug, Clone, PartialEq)]
pub struct FrontendModel {
    sample_rate: u32,
    cutoffs: Vec<(f64, f64)>,
    sinc_kernels: Vec<Vec<f32>>,
    conv1: ConvLayer,
    conv2: ConvLayer,
    window_len: usize,
}

impl FrontendModel {
    /// A random-but-fixed front-end: mel-spaced band-pass filters with seeded
    /// jitter, seeded conv weights, frozen normalization statistics.
    pub fn seeded(seed: u64, sample_rate: u32, spec: &FrameSpec) -> Self {
        Self::seeded_with_channels(seed, sample_rate, spec, DEFAULT_CHANNELS)
    }

    /// As [`FrontendModel::seeded`] with an explicit channel count (the
    /// feature dimension follows from it).
    pub fn seeded_with_channels(
        seed: u64,
        sample_rate: u32,
        spec: &FrameSpec,
        channels: usize,
    ) -> Self {
        let mut model = Self::seeded_uncalibrated(seed, sample_rate, spec, channels);
        model.calibrate_normalization(derive_seed(seed, "frontend-calibration"), spec);
        model
    }

    fn seeded_uncalibrated(seed: u64, sample_rate: u32, spec: &FrameSpec, channels: usize) -> Self {
        let mut rng = rng_from(derive_seed(seed, "frontend-sinc"));
        let mel = |f: f64| 2595.0 * (1.0 + f / 700.0).log10();
        let inv_mel = |m: f64| 700.0 * (10f64.powf(m / 2595.0) - 1.0);
        let lo_hz = 30.0;
        let hi_hz = sample_rate as f64 / 2.0 - 200.0;
        let (mlo, mhi) = (mel(lo_hz), mel(hi_hz));
        let mut cutoffs = Vec::with_capacity(channels);
        let mut sinc_kernels = Vec::with_capacity(channels);
        for i in 0..channels {
            let a = mlo + (mhi - mlo) * i as f64 / channels as f64;
            let b = mlo + (mhi - mlo) * (i + 1) as f64 / channels as f64;
            let jitter = 1.0 + rng.gen_range(-0.02..0.02);
            // round to f32 so a serialized model regenerates identical kernels
            let f_low = ((inv_mel(a) * jitter).max(20.0) as f32) as f64;
            let f_high = ((inv_mel(b) * jitter).min(sample_rate as f64 / 2.0 - 1.0) as f32) as f64;
            let k = sinc_kernel(f_low, f_high, spec.window_len, sample_rate)
                .expect("seeded cutoffs are ordered");
            cutoffs.push((f_low, f_high));
            sinc_kernels.push(k);
        }
        FrontendModel {
            sample_rate,
            cutoffs,
            sinc_kernels,
            conv1: ConvLayer::seeded(
                derive_seed(seed, "frontend-conv1"),
                channels,
                channels,
                CONV_KERNEL,
            ),
            conv2: ConvLayer::seeded(
                derive_seed(seed, "frontend-conv2"),
                channels,
                channels,
                CONV_KERNEL,
            ),
            window_len: spec.window_len,
        }
    }

    pub fn channels(&self) -> usize {
        self.sinc_kernels.len()
    }

    pub fn sample_rate(&self) -> u32 {
        self.sample_rate
    }

    /// Output feature dimension (fixed by construction: the final conv width).
    pub fn feature_dim(&self) -> usize {
        self.conv2.out_ch
    }

    /// Output length for a given input frame count: each stage is a valid
    /// convolution (length - kernel + 1) followed by a floor-halving pool.
    pub fn output_len(&self, input_frames: usize) -> usize {
        let stage = |n: usize, kernel: usize| n.saturating_sub(kernel - 1) / 2;
        stage(stage(input_frames, self.conv1.kernel), self.conv2.kernel)
    }

    /// Minimum number of samples that produce at least one output frame.
    pub fn min_samples(&self, spec: &FrameSpec) -> usize {
        // smallest t with output_len(t) >= 1
        let mut t = 1;
        while self.output_len(t) == 0 {
            t += 1;
        }
        spec.window_len + (t - 1) * spec.hop
    }

    pub fn to_container(&self) -> TensorContainer {
        let mut c = TensorContainer::new();
        let ch = self.channels();
        c.insert(
            "sinc.low",
            vec![ch],
            self.cutoffs.iter().map(|&(l, _)| l as f32).collect(),
        );
        c.insert(
            "sinc.high",
            vec![ch],
            self.cutoffs.iter().map(|&(_, h)| h as f32).collect(),
        );
        c.insert(
            "meta",
            vec![2],
            vec![self.sample_rate as f32, self.window_len as f32],
        );
        for (name, layer) in [("conv1", &self.conv1), ("conv2", &self.conv2)] {
            c.insert(
                &format!("{name}.weight"),
                vec![layer.out_ch, layer.in_ch, layer.kernel],
                layer.weights.clone(),
            );
            c.insert(
                &format!("{name}.bias"),
                vec![layer.out_ch],
                layer.bias.clone(),
            );
            c.insert(
                &format!("{name}.bn.gamma"),
                vec![layer.out_ch],
                layer.bn_gamma.clone(),
            );
            c.insert(
                &format!("{name}.bn.beta"),
                vec![layer.out_ch],
                layer.bn_beta.clone(),
            );
            c.insert(
                &format!("{name}.bn.mean"),
                vec![layer.out_ch],
                layer.bn_mean.clone(),
            );
            c.insert(
                &format!("{name}.bn.var"),
                vec![layer.out_ch],
                layer.bn_var.clone(),
            );
        }
        c
    }

    pub fn from_container(c: &TensorContainer) -> Result<Self, DspError> {
        let meta = c.get("meta")?;
        let sample_rate = meta.data[0] as u32;
        let window_len = meta.data[1] as usize;
        let low = c.get("sinc.low")?.data.clone();
        let high = c.get("sinc.high")?.data.clone();
        let ch = low.len();
        let mut cutoffs = Vec::with_capacity(ch);
        let mut sinc_kernels = Vec::with_capacity(ch);
        for i in 0..ch {
            let (l, h) = (low[i] as f64, high[i] as f64);
            let k = sinc_kernel(l, h, window_len, sample_rate)?;
            cutoffs.push((l, h));
            sinc_kernels.push(k);
        }
        let load_layer = |name: &str| -> Result<ConvLayer, DspError> {
            let w = c.get(&format!("{name}.weight"))?;
            let (out_ch, in_ch, kernel) = (w.shape[0], w.shape[1], w.shape[2]);
            Ok(ConvLayer {
                in_ch,
                out_ch,
                kernel,
                weights: w.data.clone(),
                bias: c.get_shaped(&format!("{name}.bias"), &[out_ch])?.to_vec(),
                bn_gamma: c
                    .get_shaped(&format!("{name}.bn.gamma"), &[out_ch])?
                    .to_vec(),
                bn_beta: c
                    .get_shaped(&format!("{name}.bn.beta"), &[out_ch])?
                    .to_vec(),
                bn_mean: c
                    .get_shaped(&format!("{name}.bn.mean"), &[out_ch])?
                    .to_vec(),
                bn_var: c.get_shaped(&format!("{name}.bn.var"), &[out_ch])?.to_vec(),
            })
        };
        Ok(FrontendModel {
            sample_rate,
            cutoffs,
            sinc_kernels,
            conv1: load_layer("conv1")?,
            conv2: load_layer("conv2")?,
            window_len,
        })
    }

    pub fn content_hash(&self) -> String {
        self.to_container().content_hash()
    }

    /// Fix the frozen normalization statistics: run seeded broadband audio
    /// through each conv stage and set the running mean/variance so that
    /// pooled pre-activation channels are standardized. This is the
    /// "pretraining" the shipped front-end carries; the statistics never
    /// change afterwards.
    fn calibrate_normalization(&mut self, seed: u64, spec: &FrameSpec) {
        let wave = calibration_audio(seed, self.sample_rate);
        let frames = frame(&wave, spec).expect("calibration audio is long enough");
        let sinc_rows: Vec<Vec<f32>> = frames
            .iter()
            .map(|fr| {
                self.sinc_kernels
                    .iter()
                    .map(|k| k.iter().zip(fr.iter()).map(|(a, b)| a * b).sum::<f32>())
                    .collect()
            })
            .collect();
        let pre1 = conv_pool(&self.conv1, &sinc_rows);
        set_stats_from(&mut self.conv1, &pre1);
        let post1: Vec<Vec<f32>> = pre1
            .into_iter()
            .map(|mut row| {
                self.conv1.bn_relu(&mut row);
                row
            })
            .collect();
        let pre2 = conv_pool(&self.conv2, &post1);
        set_stats_from(&mut self.conv2, &pre2);
    }
}

/// Valid stride-1 convolution followed by the 2x average pool, without the
/// normalization step (calibration path).
fn conv_pool(layer: &ConvLayer, input: &[Vec<f32>]) -> Vec<Vec<f32>> {
    let mut conv_rows = Vec::new();
    if input.len() >= layer.kernel {
        for t in 0..=input.len() - layer.kernel {
            let view: Vec<&[f32]> = input[t..t + layer.kernel]
                .iter()
                .map(|r| r.as_slice())
                .collect();
            conv_rows.push(layer.conv_at(&view));
        }
    }
    conv_rows
        .chunks_exact(2)
        .map(|pair| {
            pair[0]
                .iter()
                .zip(pair[1].iter())
                .map(|(a, b)| (a + b) * 0.5)
                .collect()
        })
        .collect()
}

fn set_stats_from(layer: &mut ConvLayer, rows: &[Vec<f32>]) {
    let n = rows.len().max(1) as f32;
    for c in 0..layer.out_ch {
        let mean = rows.iter().map(|r| r[c]).sum::<f32>() / n;
        let var = rows
            .iter()
            .map(|r| (r[c] - mean) * (r[c] - mean))
            .sum::<f32>()
            / n;
        layer.bn_mean[c] = mean;
        layer.bn_var[c] = var.max(1e-6);
    }
}

/// Three seconds of seeded broadband audio (tone chords over light noise)
/// used to fix the normalization statistics.
fn calibration_audio(seed: u64, sample_rate: u32) -> Waveform {
    let mut rng = rng_from(seed);
    let seconds = 3.0;
    let n = (seconds * sample_rate as f64) as usize;
    let mut samples = vec![0.0f32; n];
    let segment = sample_rate as usize / 4;
    let mut start = 0usize;
    while start < n {
        let end = (start + segment).min(n);
        let f1: f64 = rng.gen_range(120.0..2200.0);
        let f2: f64 = f1 * rng.gen_range(1.5..3.5);
        let a1: f64 = rng.gen_range(0.2..0.5);
        let a2: f64 = rng.gen_range(0.1..0.3);
        for (i, s) in samples[start..end].iter_mut().enumerate() {
            let t = i as f64 / sample_rate as f64;
            *s = (a1 * (2.0 * std::f64::consts::PI * f1 * t).sin()
                + a2 * (2.0 * std::f64::consts::PI * f2 * t).sin()) as f32;
        }
        start = end;
    }
    for s in &mut samples {
        *s = (*s + 0.02 * (rng.gen::<f32>() * 2.0 - 1.0)).clamp(-1.0, 1.0);
    }
    Waveform::new(samples, sample_rate).expect("calibration audio is valid")
}

/// Per-frame band-pass responses (the pre-pooling representation): one row of
/// `channels` filter outputs per input frame.
pub fn sinc_features(
    waveform: &Waveform,
    model: &FrontendModel,
    spec: &FrameSpec,
) -> Result<Vec<Vec<f32>>, DspError> {
    let frames = frame(waveform, spec)?;
    Ok(frames
        .iter()
        .map(|fr| {
            model
                .sinc_kernels
                .iter()
                .map(|k| k.iter().zip(fr.iter()).map(|(a, b)| a * b).sum::<f32>())
                .collect()
        })
        .collect())
}

/// Streaming state for one conv+pool stage. Convolution is valid (no
/// padding): the first output fires once `kernel` rows have been buffered.
struct StageState {
    /// most recent input rows, oldest first, at most `kernel` of them
    history: Vec<Vec<f32>>,
    /// unpaired pooling row, if any
    pending: Option<Vec<f32>>,
}

impl StageState {
    fn new(kernel: usize) -> Self {
        StageState {
            history: Vec::with_capacity(kernel),
            pending: None,
        }
    }

    /// Feed one input row; returns at most one pooled+normalized output row.
    fn push(&mut self, layer: &ConvLayer, row: Vec<f32>) -> Option<Vec<f32>> {
        self.history.push(row);
        if self.history.len() < layer.kernel {
            return None;
        }
        let view: Vec<&[f32]> = self.history.iter().map(|h| h.as_slice()).collect();
        let conv = layer.conv_at(&view);
        self.history.remove(0);
        match self.pending.take() {
            None => {
                self.pending = Some(conv);
                None
            }
            Some(prev) => {
                let mut pooled: Vec<f32> = prev
                    .iter()
                    .zip(conv.iter())
                    .map(|(a, b)| (a + b) * 0.5)
                    .collect();
                layer.bn_relu(&mut pooled);
                Some(pooled)
            }
        }
    }
}

/// Whole-input feature extraction.
pub fn extract_features(
    waveform: &Waveform,
    model: &FrontendModel,
    spec: &FrameSpec,
) -> Result<FeatureSequence, DspError> {
    let rows = sinc_features(waveform, model, spec)?;
    features_from_sinc_rows(&rows, model, spec, waveform.len())
}

fn features_from_sinc_rows(
    rows: &[Vec<f32>],
    model: &FrontendModel,
    spec: &FrameSpec,
    total_samples: usize,
) -> Result<FeatureSequence, DspError> {
    if model.output_len(rows.len()) == 0 {
        return Err(DspError::InputTooShort {
            samples: total_samples,
            needed: model.min_samples(spec),
        });
    }
    let mut stage1 = StageState::new(model.conv1.kernel);
    let mut stage2 = StageState::new(model.conv2.kernel);
    let mut out = Vec::new();
    for row in rows {
        if let Some(mid) = stage1.push(&model.conv1, row.clone()) {
            if let Some(feat) = stage2.push(&model.conv2, mid) {
                out.push(feat);
            }
        }
    }
    let stride_s = 4.0 * spec.hop as f64 / model.sample_rate as f64;
    let frame_times = (0..out.len()).map(|i| i as f64 * stride_s).collect();
    Ok(FeatureSequence {
        frames: out,
        frame_times,
    })
}

/// Chunked feature extraction: processes the input in `step_frames`-frame
/// segments with carried state. Produces exactly the same output as
/// [`extract_features`], bit for bit.
pub fn extract_features_streaming(
    waveform: &Waveform,
    model: &FrontendModel,
    spec: &FrameSpec,
    step_frames: usize,
) -> Result<FeatureSequence, DspError> {
    assert!(step_frames >= 1);
    if waveform.samples.iter().any(|s| !s.is_finite()) {
        return Err(DspError::InvalidAudio);
    }
    let t = spec
        .frame_count(waveform.len())
        .ok_or(DspError::InputTooShort {
            samples: waveform.len(),
            needed: spec.window_len,
        })?;
    if model.output_len(t) == 0 {
        return Err(DspError::InputTooShort {
            samples: waveform.len(),
            needed: model.min_samples(spec),
        });
    }
    let taper = hamming(spec.window_len);
    let mut stage1 = StageState::new(model.conv1.kernel);
    let mut stage2 = StageState::new(model.conv2.kernel);
    let mut out = Vec::new();
    let mut next_frame = 0usize;
    while next_frame < t {
        let end = (next_frame + step_frames).min(t);
        for i in next_frame..end {
            let start = i * spec.hop;
            let windowed: Vec<f32> = taper
                .iter()
                .zip(&waveform.samples[start..start + spec.window_len])
                .map(|(t, s)| t * s)
                .collect();
            let row: Vec<f32> = model
                .sinc_kernels
                .iter()
                .map(|k| {
                    k.iter()
                        .zip(windowed.iter())
                        .map(|(a, b)| a * b)
                        .sum::<f32>()
                })
                .collect();
            if let Some(mid) = stage1.push(&model.conv1, row) {
                if let Some(feat) = stage2.push(&model.conv2, mid) {
                    out.push(feat);
                }
            }
        }
        next_frame = end;
    }
    let stride_s = 4.0 * spec.hop as f64 / model.sample_rate as f64;
    let frame_times = (0..out.len()).map(|i| i as f64 * stride_s).collect();
    Ok(FeatureSequence {
        frames: out,
        frame_times,
    })
}
