use ndarray::Array2;
use rustfft::num_complex::Complex;
use rustfft::FftPlanner;

use super::MelSpectrogram;
use crate::error::{Error, Result};

/// Floor applied before the natural log.
pub const LOG_FLOOR: f64 = 1e-5;

fn hz_to_mel(f: f64) -> f64 {
    2595.0 * (1.0 + f / 700.0).log10()
}

fn mel_to_hz(m: f64) -> f64 {
    700.0 * (10f64.powf(m / 2595.0) - 1.0)
}

/// Triangular HTK-scale filter bank, `n_mels x (n_fft/2 + 1)`, spanning
/// 0 Hz to Nyquist.
pub fn mel_filterbank(sample_rate: u32, n_fft: usize, n_mels: usize) -> Array2<f64> {
    let n_bins = n_fft / 2 + 1;
    let nyquist = sample_rate as f64 / 2.0;
    let top = hz_to_mel(nyquist);
    let edges: Vec<f64> = (0..n_mels + 2)
        .map(|i| mel_to_hz(top * i as f64 / (n_mels + 1) as f64))
        .collect();
    let mut fb = Array2::zeros((n_mels, n_bins));
    for m in 0..n_mels {
        let (lo, mid, hi) = (edges[m], edges[m + 1], edges[m + 2]);
        for k in 0..n_bins {
            let f = k as f64 * sample_rate as f64 / n_fft as f64;
            let w = if f >= lo && f <= mid && mid > lo {
                (f - lo) / (mid - lo)
            } else if f > mid && f <= hi && hi > mid {
                (hi - f) / (hi - mid)
            } else {
                0.0
            };
            fb[[m, k]] = w;
        }
    }
    fb
}

/// Magnitude STFT (Hann window of `win` samples, zero centre padding of
/// `win/2`) -> Mel filter bank -> `ln(max(x, 1e-5))`.
/// Produces `floor(len / hop) + 1` frames.
pub fn mel_featurize(
    samples: &[f64],
    sample_rate: u32,
    n_mels: usize,
    hop: usize,
    win: usize,
) -> Result<MelSpectrogram> {
    if samples.is_empty() {
        return Err(Error::EmptySignal);
    }
    if sample_rate == 0 || hop == 0 || win == 0 || n_mels == 0 {
        return Err(Error::Config(
            "sample_rate, hop, win and n_mels must be positive".into(),
        ));
    }
    let n_frames = samples.len() / hop + 1;
    let pad = win / 2;
    let padded_len = (n_frames - 1) * hop + win;
    let mut padded = vec![0.0; padded_len.max(samples.len() + pad)];
    padded[pad..pad + samples.len()].copy_from_slice(samples);

    let window: Vec<f64> = (0..win)
        .map(|i| 0.5 - 0.5 * (2.0 * std::f64::consts::PI * i as f64 / win as f64).cos())
        .collect();
    let fb = mel_filterbank(sample_rate, win, n_mels);
    let n_bins = win / 2 + 1;
    let fft = FftPlanner::<f64>::new().plan_fft_forward(win);
    let mut buf = vec![Complex::new(0.0, 0.0); win];
    let mut mag = vec![0.0; n_bins];
    let mut out = Array2::zeros((n_frames, n_mels));
    for f in 0..n_frames {
        let start = f * hop;
        for (i, b) in buf.iter_mut().enumerate() {
            *b = Complex::new(padded[start + i] * window[i], 0.0);
        }
        fft.process(&mut buf);
        for (k, m) in mag.iter_mut().enumerate() {
            *m = buf[k].norm();
        }
        for m in 0..n_mels {
            let e: f64 = fb.row(m).iter().zip(&mag).map(|(w, x)| w * x).sum();
            out[[f, m]] = e.max(LOG_FLOOR).ln();
        }
    }
    MelSpectrogram::new(out, hop as f64 / sample_rate as f64)
}
