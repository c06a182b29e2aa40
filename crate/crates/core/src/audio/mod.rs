//! Log-mel audio front-end.
//!
//! Pipeline: resample to 16 kHz mono, magnitude STFT (25 ms periodic Hann
//! window, 10 ms hop, 512-point FFT), 64-band mel mapping over 125-7500 Hz,
//! ln(x + 0.01) stabilization, framing into non-overlapping 96-frame
//! (0.96 s) patches, and a frozen seeded encoder mapping each patch to a
//! 128-D embedding.

pub mod wav;

use std::sync::OnceLock;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rustfft::{num_complex::Complex, FftPlanner};

use crate::error::{Error, Result};
use crate::tensor::{init, Tensor};

pub const TARGET_RATE: u32 = 16_000;
pub const WINDOW: usize = 400; // 25 ms at 16 kHz
pub const HOP: usize = 160; // 10 ms
pub const FFT_SIZE: usize = 512;
pub const FREQ_BINS: usize = FFT_SIZE / 2 + 1;
pub const MEL_BANDS: usize = 64;
pub const MEL_LOW_HZ: f64 = 125.0;
pub const MEL_HIGH_HZ: f64 = 7500.0;
pub const LOG_OFFSET: f64 = 0.01;
pub const PATCH_FRAMES: usize = 96;
pub const PATCH_SECONDS: f64 = 0.96;
pub const EMBED_DIM: usize = 128;

/// Seed for the frozen stand-in encoder. The encoder is a deterministic
/// random projection, never trained; it preserves the patch -> 128-D
/// contract without pretrained weights.
pub const ENCODER_SEED: u64 = 0x4d52_4156;

/// Mono audio signal.
#[derive(Debug, Clone, PartialEq)]
pub struct Waveform {
    pub samples: Vec<f64>,
    pub sample_rate: u32,
}

/// One 96x64 log-mel block spanning 0.96 s.
#[derive(Debug, Clone)]
pub struct LogMelPatch {
    /// [96, 64] time frames x mel bands.
    pub values: Tensor<f64>,
    pub start_time: f64,
}

/// Sequence of patch embeddings, one row per complete 0.96 s patch.
#[derive(Debug, Clone)]
pub struct AudioEmbeddingSequence {
    /// [T, 128].
    pub embeddings: Tensor<f32>,
    pub hop_seconds: f64,
}

/// Linear-interpolation resampler to 16 kHz. Already-16 kHz input is
/// returned unchanged; empty input stays empty.
pub fn resample_to_16k(w: &Waveform) -> Result<Waveform> {
    if w.sample_rate == 0 {
        return Err(Error::Contract("sample rate must be positive".into()));
    }
    if w.sample_rate == TARGET_RATE || w.samples.is_empty() {
        return Ok(Waveform {
            samples: w.samples.clone(),
            sample_rate: TARGET_RATE,
        });
    }
    let n = w.samples.len();
    let ratio = TARGET_RATE as f64 / w.sample_rate as f64;
    let out_len = ((n - 1) as f64 * ratio).floor() as usize + 1;
    let step = w.sample_rate as f64 / TARGET_RATE as f64;
    let mut out = Vec::with_capacity(out_len);
    for i in 0..out_len {
        let pos = i as f64 * step;
        let i0 = (pos.floor() as usize).min(n - 1);
        let i1 = (i0 + 1).min(n - 1);
        let frac = pos - i0 as f64;
        out.push(w.samples[i0] * (1.0 - frac) + w.samples[i1] * frac);
    }
    Ok(Waveform {
        samples: out,
        sample_rate: TARGET_RATE,
    })
}

/// Periodic Hann window: w[n] = 0.5 - 0.5 cos(2 pi n / N).
fn hann_periodic(n: usize) -> Vec<f64> {
    (0..n)
        .map(|i| 0.5 - 0.5 * (std::f64::consts::TAU * i as f64 / n as f64).cos())
        .collect()
}

/// Magnitude STFT of a 16 kHz waveform: [num_frames, 257].
///
/// num_frames = 1 + floor((N - 400)/160); shorter input yields zero frames.
pub fn stft_magnitude(w: &Waveform) -> Result<Tensor<f64>> {
    if w.sample_rate != TARGET_RATE {
        return Err(Error::Contract(format!(
            "stft expects {TARGET_RATE} Hz input, got {}",
            w.sample_rate
        )));
    }
    let n = w.samples.len();
    let num_frames = if n >= WINDOW { 1 + (n - WINDOW) / HOP } else { 0 };
    let window = hann_periodic(WINDOW);
    let mut planner = FftPlanner::<f64>::new();
    let fft = planner.plan_fft_forward(FFT_SIZE);
    let mut buf = vec![Complex::new(0.0, 0.0); FFT_SIZE];
    let mut out = Vec::with_capacity(num_frames * FREQ_BINS);
    for f in 0..num_frames {
        let start = f * HOP;
        for i in 0..FFT_SIZE {
            let v = if i < WINDOW {
                w.samples[start + i] * window[i]
            } else {
                0.0
            };
            buf[i] = Complex::new(v, 0.0);
        }
        fft.process(&mut buf);
        out.extend(buf[..FREQ_BINS].iter().map(|c| c.norm()));
    }
    Tensor::new(vec![num_frames, FREQ_BINS], out)
}

/// Hz -> mel, HTK convention.
pub fn hz_to_mel(hz: f64) -> f64 {
    2595.0 * (1.0 + hz / 700.0).log10()
}

/// [257, 64] triangular filter matrix; band edges equally spaced on the mel
/// scale between mel(125) and mel(7500), each filter's edges being its
/// neighbors' centers.
pub fn mel_filterbank_matrix() -> &'static Tensor<f64> {
    static MATRIX: OnceLock<Tensor<f64>> = OnceLock::new();
    MATRIX.get_or_init(|| {
        let mel_lo = hz_to_mel(MEL_LOW_HZ);
        let mel_hi = hz_to_mel(MEL_HIGH_HZ);
        let edges: Vec<f64> = (0..MEL_BANDS + 2)
            .map(|i| mel_lo + (mel_hi - mel_lo) * i as f64 / (MEL_BANDS + 1) as f64)
            .collect();
        let bin_hz = TARGET_RATE as f64 / FFT_SIZE as f64;
        let mut data = vec![0.0; FREQ_BINS * MEL_BANDS];
        for bin in 0..FREQ_BINS {
            let mel = hz_to_mel(bin as f64 * bin_hz);
            for band in 0..MEL_BANDS {
                let (lower, center, upper) = (edges[band], edges[band + 1], edges[band + 2]);
                let up = (mel - lower) / (center - lower);
                let down = (upper - mel) / (upper - center);
                data[bin * MEL_BANDS + band] = up.min(down).max(0.0);
            }
        }
        Tensor::new(vec![FREQ_BINS, MEL_BANDS], data).expect("static shape")
    })
}

/// Maps a [F, 257] magnitude spectrogram onto [F, 64] mel energies.
pub fn mel_filterbank(spec: &Tensor<f64>) -> Result<Tensor<f64>> {
    if spec.rank() != 2 || spec.shape()[1] != FREQ_BINS {
        return Err(Error::Contract(format!(
            "mel filterbank expects [frames, {FREQ_BINS}], got {:?}",
            spec.shape()
        )));
    }
    let frames = spec.shape()[0];
    let fb = mel_filterbank_matrix();
    let out = crate::tensor::ops::matmul(spec.data(), fb.data(), frames, FREQ_BINS, MEL_BANDS);
    Tensor::new(vec![frames, MEL_BANDS], out)
}

/// ln(x + 0.01); inputs must be nonnegative.
pub fn log_stabilize(mel: &Tensor<f64>) -> Result<Tensor<f64>> {
    if mel.data().iter().any(|&v| v < 0.0) {
        return Err(Error::Contract("log stabilization requires nonnegative input".into()));
    }
    Ok(mel.map(|v| (v + LOG_OFFSET).ln()))
}

/// Splits a [F, 64] log-mel map into consecutive disjoint 96-frame patches;
/// a trailing remainder shorter than 96 frames is dropped.
pub fn frame_patches(logmel: &Tensor<f64>) -> Result<Vec<LogMelPatch>> {
    if logmel.rank() != 2 || logmel.shape()[1] != MEL_BANDS {
        return Err(Error::Contract(format!(
            "patching expects [frames, {MEL_BANDS}], got {:?}",
            logmel.shape()
        )));
    }
    let frames = logmel.shape()[0];
    let n_patches = frames / PATCH_FRAMES;
    let mut out = Vec::with_capacity(n_patches);
    for p in 0..n_patches {
        let start = p * PATCH_FRAMES * MEL_BANDS;
        let data = logmel.data()[start..start + PATCH_FRAMES * MEL_BANDS].to_vec();
        out.push(LogMelPatch {
            values: Tensor::new(vec![PATCH_FRAMES, MEL_BANDS], data)?,
            start_time: p as f64 * PATCH_SECONDS,
        });
    }
    Ok(out)
}

struct FrozenEncoder {
    w1: Vec<f32>, // [6144, 128]
    w2: Vec<f32>, // [128, 128]
}

fn encoder() -> &'static FrozenEncoder {
    static ENC: OnceLock<FrozenEncoder> = OnceLock::new();
    ENC.get_or_init(|| {
        let mut rng = ChaCha8Rng::seed_from_u64(ENCODER_SEED);
        let flat = PATCH_FRAMES * MEL_BANDS;
        let w1: Tensor<f32> = init::uniform_fan_in(vec![flat, EMBED_DIM], flat, &mut rng);
        let w2: Tensor<f32> = init::uniform_fan_in(vec![EMBED_DIM, EMBED_DIM], EMBED_DIM, &mut rng);
        FrozenEncoder {
            w1: w1.into_data(),
            w2: w2.into_data(),
        }
    })
}

/// Maps patches to 128-D embeddings with the frozen seeded two-layer map
/// (flatten, linear, relu, linear). Bit-deterministic.
pub fn encode_patches(patches: &[LogMelPatch]) -> Result<AudioEmbeddingSequence> {
    let enc = encoder();
    let flat = PATCH_FRAMES * MEL_BANDS;
    let mut rows = Vec::with_capacity(patches.len() * EMBED_DIM);
    for p in patches {
        if p.values.shape() != [PATCH_FRAMES, MEL_BANDS] {
            return Err(Error::Contract(format!(
                "patch must be [{PATCH_FRAMES}, {MEL_BANDS}], got {:?}",
                p.values.shape()
            )));
        }
        let x: Vec<f32> = p.values.data().iter().map(|&v| v as f32).collect();
        let mut h = crate::tensor::ops::matmul(&x, &enc.w1, 1, flat, EMBED_DIM);
        h.iter_mut().for_each(|v| *v = v.max(0.0));
        let e = crate::tensor::ops::matmul(&h, &enc.w2, 1, EMBED_DIM, EMBED_DIM);
        rows.extend(e);
    }
    Ok(AudioEmbeddingSequence {
        embeddings: Tensor::new(vec![patches.len(), EMBED_DIM], rows)?,
        hop_seconds: PATCH_SECONDS,
    })
}

/// Full front-end: waveform of any rate to the embedding sequence.
pub fn waveform_to_embeddings(w: &Waveform) -> Result<AudioEmbeddingSequence> {
    let w16 = resample_to_16k(w)?;
    let spec = stft_magnitude(&w16)?;
    let mel = mel_filterbank(&spec)?;
    let logmel = log_stabilize(&mel)?;
    let patches = frame_patches(&logmel)?;
    encode_patches(&patches)
}

/// Embedding count for an N-sample 16 kHz signal:
/// floor((1 + floor((N - 400)/160)) / 96), zero below one window.
pub fn expected_embedding_count(n_samples: usize) -> usize {
    if n_samples < WINDOW {
        return 0;
    }
    (1 + (n_samples - WINDOW) / HOP) / PATCH_FRAMES
}
