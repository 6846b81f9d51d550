//! Deterministic preprocessing: FIR bandpass filtering, rational
//! resampling, per-trial channel normalization, Euclidean alignment and
//! baseline correction.

use nalgebra::{DMatrix, SymmetricEigen};
use thiserror::Error;

use crate::dataio::TrialSet;

#[derive(Debug, Error)]
pub enum SigError {
    #[error("invalid filter band: need 0 < low < high < fs/2, got low={low}, high={high}, fs={fs}")]
    BadBand { low: f64, high: f64, fs: f64 },
    #[error("filter order must be a positive even integer, got {0}")]
    BadOrder(usize),
    #[error("sampling rate mismatch: filter designed at {filter_hz} Hz, data at {data_hz} Hz")]
    RateMismatch { filter_hz: f64, data_hz: f64 },
    #[error("upsampling {from} Hz to {to} Hz is not supported")]
    Upsample { from: f64, to: f64 },
    #[error("cannot express {target_hz}/{source_hz} as a small rational ratio")]
    IrrationalRatio { target_hz: f64, source_hz: f64 },
    #[error("zero-variance channel: trial {trial}, channel {channel}")]
    ZeroVariance { trial: usize, channel: usize },
    #[error("mean covariance is singular beyond ridge rescue (eigenvalue {0:e})")]
    SingularCovariance(f64),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error(transparent)]
    Data(#[from] crate::dataio::DataError),
}

/// Linear-phase FIR bandpass filter.
#[derive(Debug, Clone)]
pub struct FirFilter {
    pub taps: Vec<f64>,
    pub fs_hz: f64,
    pub low_hz: f64,
    pub high_hz: f64,
}

impl FirFilter {
    pub fn order(&self) -> usize {
        self.taps.len() - 1
    }
}

fn sinc(x: f64) -> f64 {
    if x == 0.0 {
        1.0
    } else {
        let px = std::f64::consts::PI * x;
        px.sin() / px
    }
}

fn blackman(n: usize, order: usize) -> f64 {
    let t = n as f64 / order as f64;
    0.42 - 0.5 * (2.0 * std::f64::consts::PI * t).cos() + 0.08 * (4.0 * std::f64::consts::PI * t).cos()
}

/// Magnitude of the filter's frequency response at `f_hz`.
pub fn magnitude_at(taps: &[f64], f_hz: f64, fs_hz: f64) -> f64 {
    let w = 2.0 * std::f64::consts::PI * f_hz / fs_hz;
    let (mut re, mut im) = (0.0, 0.0);
    for (n, t) in taps.iter().enumerate() {
        re += t * (w * n as f64).cos();
        im -= t * (w * n as f64).sin();
    }
    (re * re + im * im).sqrt()
}

/// Windowed-sinc bandpass: the difference of two sinc lowpasses (cutoffs
/// `high_hz` and `low_hz`) under a Blackman window, gain normalized to 1 at
/// the geometric band center sqrt(low*high).
pub fn design_bandpass(order: usize, low_hz: f64, high_hz: f64, fs_hz: f64) -> Result<FirFilter, SigError> {
    if order == 0 || order % 2 != 0 {
        return Err(SigError::BadOrder(order));
    }
    if !(0.0 < low_hz && low_hz < high_hz && high_hz < fs_hz / 2.0) {
        return Err(SigError::BadBand { low: low_hz, high: high_hz, fs: fs_hz });
    }
    let m = order as f64 / 2.0;
    let (fl, fh) = (2.0 * low_hz / fs_hz, 2.0 * high_hz / fs_hz);
    let mut taps: Vec<f64> = (0..=order)
        .map(|n| {
            let k = n as f64 - m;
            (fh * sinc(fh * k) - fl * sinc(fl * k)) * blackman(n, order)
        })
        .collect();
    let center = (low_hz * high_hz).sqrt();
    let g = magnitude_at(&taps, center, fs_hz);
    for t in taps.iter_mut() {
        *t /= g;
    }
    Ok(FirFilter { taps, fs_hz, low_hz, high_hz })
}

/// Filters every channel of every trial with zero-padded direct-form
/// convolution, compensating the order/2 group delay so the output stays
/// aligned with the input. Output length equals input length.
pub fn filter_trials(x: &TrialSet, f: &FirFilter) -> Result<TrialSet, SigError> {
    if f.fs_hz != x.fs_hz {
        return Err(SigError::RateMismatch { filter_hz: f.fs_hz, data_hz: x.fs_hz });
    }
    let t = x.n_samples();
    let delay = f.order() / 2;
    let mut out = x.clone();
    let mut buf = vec![0.0; t];
    for i in 0..x.n_trials() {
        for c in 0..x.n_channels() {
            let row = x.trial_channel(i, c);
            for (ti, b) in buf.iter_mut().enumerate() {
                let mut acc = 0.0;
                // y[ti] = sum_k taps[k] * x[ti + delay - k], zero outside
                let shift = ti + delay;
                let k_lo = shift.saturating_sub(t - 1);
                let k_hi = shift.min(f.taps.len() - 1);
                for k in k_lo..=k_hi {
                    acc += f.taps[k] * row[shift - k];
                }
                *b = acc;
            }
            out.trial_channel_mut(i, c).copy_from_slice(&buf);
        }
    }
    Ok(out)
}

/// Lowest-terms rational approximation of target/source via scaled gcd.
pub fn rational_ratio(target_hz: f64, source_hz: f64) -> Result<(u64, u64), SigError> {
    let mut scale = 1.0;
    for _ in 0..7 {
        let p = target_hz * scale;
        let q = source_hz * scale;
        if (p - p.round()).abs() < 1e-9 && (q - q.round()).abs() < 1e-9 {
            let (mut p, mut q) = (p.round() as u64, q.round() as u64);
            let g = gcd(p, q);
            p /= g;
            q /= g;
            return Ok((p, q));
        }
        scale *= 10.0;
    }
    Err(SigError::IrrationalRatio { target_hz, source_hz })
}

fn gcd(a: u64, b: u64) -> u64 {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

/// Rational downsampling by p/q: conceptual zero-stuffing by p, windowed-
/// sinc anti-alias lowpass at 0.9 * target/2, decimation by q. Output
/// length floor(T*p/q).
pub fn resample(x: &TrialSet, target_hz: f64) -> Result<TrialSet, SigError> {
    if target_hz > x.fs_hz {
        return Err(SigError::Upsample { from: x.fs_hz, to: target_hz });
    }
    let (p, q) = rational_ratio(target_hz, x.fs_hz)?;
    if p == q {
        return Ok(x.clone());
    }
    let (p, q) = (p as i64, q as i64);
    // anti-alias kernel at the upsampled rate fs*p; cutoff 0.9*target/2
    // means a normalized cutoff of 0.9/(2q) cycles per upsampled sample.
    let half = 10 * q.max(p);
    let order = (2 * half) as usize;
    let fc = 0.9 / q as f64;
    let mut kernel: Vec<f64> = (-half..=half)
        .map(|k| fc * sinc(fc * k as f64) * blackman((k + half) as usize, order))
        .collect();
    let s: f64 = kernel.iter().sum();
    for v in kernel.iter_mut() {
        *v *= p as f64 / s;
    }

    let t_in = x.n_samples() as i64;
    let t_out = (x.n_samples() * p as usize) / q as usize;
    let mut data = Vec::with_capacity(x.n_trials() * x.n_channels() * t_out);
    for i in 0..x.n_trials() {
        for c in 0..x.n_channels() {
            let row = x.trial_channel(i, c);
            for m in 0..t_out as i64 {
                // y[m] = sum_n x[n] * h[m*q - n*p], h centered at index `half`
                let pos = m * q;
                let n_lo = ((pos - half) as f64 / p as f64).ceil() as i64;
                let n_hi = ((pos + half) as f64 / p as f64).floor() as i64;
                let mut acc = 0.0;
                for n in n_lo.max(0)..=n_hi.min(t_in - 1) {
                    acc += row[n as usize] * kernel[(pos - n * p + half) as usize];
                }
                data.push(acc);
            }
        }
    }
    let mut out = x.with_data(data, t_out)?;
    out.fs_hz = target_hz;
    Ok(out)
}

/// Per trial and channel: subtract the mean and divide by the population
/// standard deviation over the trial's time axis.
pub fn channel_normalize(x: &TrialSet) -> Result<TrialSet, SigError> {
    let mut out = x.clone();
    let t = x.n_samples() as f64;
    for i in 0..x.n_trials() {
        for c in 0..x.n_channels() {
            let row = out.trial_channel_mut(i, c);
            let mean: f64 = row.iter().sum::<f64>() / t;
            let var: f64 = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / t;
            if var <= 0.0 {
                return Err(SigError::ZeroVariance { trial: i, channel: c });
            }
            let inv_std = 1.0 / var.sqrt();
            for v in row.iter_mut() {
                *v = (*v - mean) * inv_std;
            }
        }
    }
    Ok(out)
}

/// Whitening transform estimated from a reference set: the inverse square
/// root of the mean per-trial covariance.
#[derive(Debug, Clone)]
pub struct Alignment {
    inv_sqrt: DMatrix<f64>,
}

/// Computes the alignment transform from `x`: R = mean_i X_i X_i^T / T,
/// ridged by 1e-10*trace(R)/C on the diagonal, inverted through its
/// symmetric eigendecomposition.
pub fn compute_alignment(x: &TrialSet) -> Result<Alignment, SigError> {
    let c = x.n_channels();
    let t = x.n_samples();
    let mut r = DMatrix::<f64>::zeros(c, c);
    for i in 0..x.n_trials() {
        for a in 0..c {
            let ra = x.trial_channel(i, a);
            for b in a..c {
                let rb = x.trial_channel(i, b);
                let dot: f64 = ra.iter().zip(rb).map(|(u, v)| u * v).sum();
                r[(a, b)] += dot;
            }
        }
    }
    let scale = 1.0 / (x.n_trials() as f64 * t as f64);
    for a in 0..c {
        for b in a..c {
            let v = r[(a, b)] * scale;
            r[(a, b)] = v;
            r[(b, a)] = v;
        }
    }
    let ridge = 1e-10 * r.trace() / c as f64;
    for a in 0..c {
        r[(a, a)] += ridge;
    }
    let eig = SymmetricEigen::new(r);
    let mut d = DMatrix::<f64>::zeros(c, c);
    for (k, &l) in eig.eigenvalues.iter().enumerate() {
        if l <= 0.0 {
            return Err(SigError::SingularCovariance(l));
        }
        d[(k, k)] = 1.0 / l.sqrt();
    }
    let inv_sqrt = &eig.eigenvectors * d * eig.eigenvectors.transpose();
    Ok(Alignment { inv_sqrt })
}

/// Applies a previously computed alignment to every trial of `x`.
pub fn apply_alignment(x: &TrialSet, a: &Alignment) -> Result<TrialSet, SigError> {
    let c = x.n_channels();
    if a.inv_sqrt.nrows() != c {
        return Err(SigError::Shape(format!(
            "alignment built for {} channels, data has {}",
            a.inv_sqrt.nrows(),
            c
        )));
    }
    let t = x.n_samples();
    let mut out = x.clone();
    let mut buf = vec![0.0; c * t];
    for i in 0..x.n_trials() {
        for row in 0..c {
            let dst = &mut buf[row * t..(row + 1) * t];
            dst.fill(0.0);
            for col in 0..c {
                let w = a.inv_sqrt[(row, col)];
                for (d, v) in dst.iter_mut().zip(x.trial_channel(i, col)) {
                    *d += w * v;
                }
            }
        }
        for row in 0..c {
            out.trial_channel_mut(i, row).copy_from_slice(&buf[row * t..(row + 1) * t]);
        }
    }
    Ok(out)
}

/// Computes and applies the alignment on the same set.
pub fn euclidean_align(x: &TrialSet) -> Result<TrialSet, SigError> {
    let a = compute_alignment(x)?;
    apply_alignment(x, &a)
}

/// Subtracts, per trial and channel, the mean of the matching baseline
/// segment.
pub fn baseline_correct(x: &TrialSet, baseline: &TrialSet) -> Result<TrialSet, SigError> {
    if baseline.n_trials() != x.n_trials() || baseline.n_channels() != x.n_channels() {
        return Err(SigError::Shape(format!(
            "baseline is {}x{} trials x channels, data is {}x{}",
            baseline.n_trials(),
            baseline.n_channels(),
            x.n_trials(),
            x.n_channels()
        )));
    }
    let mut out = x.clone();
    for i in 0..x.n_trials() {
        for c in 0..x.n_channels() {
            let b = baseline.trial_channel(i, c);
            let mean: f64 = b.iter().sum::<f64>() / b.len() as f64;
            for v in out.trial_channel_mut(i, c) {
                *v -= mean;
            }
        }
    }
    Ok(out)
}

/// Baseline correction against the first `n` samples of each trial itself.
pub fn baseline_correct_prefix(x: &TrialSet, n: usize) -> Result<TrialSet, SigError> {
    if n == 0 || n > x.n_samples() {
        return Err(SigError::Shape(format!(
            "baseline prefix {} outside 1..={} samples",
            n,
            x.n_samples()
        )));
    }
    let mut out = x.clone();
    for i in 0..x.n_trials() {
        for c in 0..x.n_channels() {
            let row = out.trial_channel_mut(i, c);
            let mean: f64 = row[..n].iter().sum::<f64>() / n as f64;
            for v in row.iter_mut() {
                *v -= mean;
            }
        }
    }
    Ok(out)
}
