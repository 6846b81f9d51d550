//! Synthetic ERP and ERD trial generators, deterministic in their seed.
//!
//! These stand in for real recordings at desk scale: the ERP generator
//! injects a stereotyped deflection at a known latency on a known channel,
//! the ERD generator modulates a 10 Hz rhythm on known lateral channels,
//! so downstream decoding and interpretability results can be checked
//! against ground truth.

use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::{DataError, TrialSet};

/// Latency of the injected positive deflection (seconds after cue).
pub const ERP_POS_PEAK_S: f64 = 0.365;
/// Latency of the preceding negative deflection.
pub const ERP_NEG_PEAK_S: f64 = 0.25;

const GAUSS_WIDTH_S: f64 = 0.05;

/// Index of the central deflection channel for a `c`-channel ERP set.
pub fn erp_center_channel(c: usize) -> usize {
    c / 2
}

/// Index of the attenuated channel for class 0 ("left") in an ERD set.
pub fn erd_left_channel(c: usize) -> usize {
    c / 2 - 1
}

/// Index of the attenuated channel for class 1 ("right") in an ERD set.
pub fn erd_right_channel(c: usize) -> usize {
    c / 2 + 1
}

/// Designated discriminative channel for a class in an ERD set: the
/// lateral channel whose rhythm stays intact for that class, which is
/// the channel the opposite class attenuates. Rectified activation maps
/// localize signal presence, so this is the channel a class-specific
/// spatial map should single out.
pub fn erd_discriminative_channel(class: usize, c: usize) -> usize {
    if class == 0 {
        erd_right_channel(c)
    } else {
        erd_left_channel(c)
    }
}

/// Fills `c` channel slots with 10-20 names: designated slots first, the
/// rest from a fixed pool so montage lookups resolve for c <= 22.
fn channel_names(c: usize, designated: &[(usize, &str)]) -> Vec<String> {
    let mut names: Vec<Option<String>> = vec![None; c];
    for &(i, n) in designated {
        names[i] = Some(n.to_string());
    }
    let pool = [
        "Fz", "Pz", "F3", "F4", "P3", "P4", "F7", "F8", "P7", "P8", "T7", "T8", "Fp1", "Fp2",
        "O1", "O2", "Fpz", "Oz", "POz",
    ];
    let used: Vec<&str> = designated.iter().map(|&(_, n)| n).collect();
    let mut pool_iter = pool.iter().filter(|n| !used.contains(*n));
    let mut extra = 0usize;
    for slot in names.iter_mut() {
        if slot.is_none() {
            *slot = Some(match pool_iter.next() {
                Some(n) => n.to_string(),
                None => {
                    extra += 1;
                    format!("X{extra}")
                }
            });
        }
    }
    names.into_iter().map(Option::unwrap).collect()
}

#[derive(Debug, Clone)]
pub struct ErpParams {
    pub n_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub fs_hz: f64,
    pub seed: u64,
    /// Stationary standard deviation of the background noise.
    pub noise_std: f64,
}

impl ErpParams {
    pub fn new(n_per_class: usize, channels: usize, samples: usize, fs_hz: f64, seed: u64) -> Self {
        ErpParams { n_per_class, channels, samples, fs_hz, seed, noise_std: 1.0 }
    }
}

pub fn synth_erp(
    n_per_class: usize,
    c: usize,
    t: usize,
    fs_hz: f64,
    seed: u64,
) -> Result<TrialSet, DataError> {
    synth_erp_with(&ErpParams::new(n_per_class, c, t, fs_hz, seed))
}

/// Two-class ERP set: class 1 ("error feedback") carries a positive
/// deflection at [`ERP_POS_PEAK_S`] (3x noise std) on the central channel
/// with half-amplitude copies on its neighbours, preceded by a negative
/// deflection at [`ERP_NEG_PEAK_S`]; class 0 is background only. Background
/// is 1/f-shaped Gaussian noise (an AR(1) process).
pub fn synth_erp_with(p: &ErpParams) -> Result<TrialSet, DataError> {
    if p.n_per_class == 0 {
        return Err(DataError::Invariant("n_per_class must be >= 1".into()));
    }
    if p.channels < 3 {
        return Err(DataError::Invariant(format!("ERP generator needs >= 3 channels, got {}", p.channels)));
    }
    if p.fs_hz <= 0.0 || p.samples as f64 / p.fs_hz <= 0.5 {
        return Err(DataError::Invariant(format!(
            "trial duration {:.3}s too short; need > 0.5s",
            p.samples as f64 / p.fs_hz
        )));
    }
    let (c, t) = (p.channels, p.samples);
    let center = erp_center_channel(c);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    // deflection template on the central channel
    let mut template = vec![0.0; t];
    for (i, v) in template.iter_mut().enumerate() {
        let ts = i as f64 / p.fs_hz;
        let pos = 3.0 * p.noise_std * gauss(ts - ERP_POS_PEAK_S);
        let neg = -1.5 * p.noise_std * gauss(ts - ERP_NEG_PEAK_S);
        *v = pos + neg;
    }

    let n = 2 * p.n_per_class;
    let mut data = Vec::with_capacity(n * c * t);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u16;
        labels.push(label);
        for ch in 0..c {
            let weight = if ch == center {
                1.0
            } else if ch + 1 == center || ch == center + 1 {
                0.5
            } else {
                0.0
            };
            let mut row = ar1_noise(&mut rng, t, p.noise_std);
            if label == 1 && weight > 0.0 {
                for (r, s) in row.iter_mut().zip(&template) {
                    *r += weight * s;
                }
            }
            data.extend_from_slice(&row);
        }
    }
    TrialSet::new(
        data,
        labels,
        c,
        t,
        p.fs_hz,
        vec!["correct".into(), "error".into()],
        channel_names(c, &[(center - 1, "C3"), (center, "Cz"), (center + 1, "C4")]),
        None,
    )
}

#[derive(Debug, Clone)]
pub struct ErdParams {
    pub n_per_class: usize,
    pub channels: usize,
    pub samples: usize,
    pub fs_hz: f64,
    pub seed: u64,
    pub noise_std: f64,
    pub osc_amp: f64,
    pub osc_freq_hz: f64,
    /// Amplitude factor on the desynchronized channel (0.4 = 60% drop).
    pub attenuation: f64,
}

impl ErdParams {
    pub fn new(n_per_class: usize, channels: usize, samples: usize, fs_hz: f64, seed: u64) -> Self {
        ErdParams {
            n_per_class,
            channels,
            samples,
            fs_hz,
            seed,
            noise_std: 1.0,
            osc_amp: 2.0,
            osc_freq_hz: 10.0,
            attenuation: 0.4,
        }
    }
}

pub fn synth_erd(
    n_per_class: usize,
    c: usize,
    t: usize,
    fs_hz: f64,
    seed: u64,
) -> Result<TrialSet, DataError> {
    synth_erd_with(&ErdParams::new(n_per_class, c, t, fs_hz, seed))
}

/// Two-class ERD set: a 10 Hz rhythm rides on every channel; class 0
/// attenuates it on the designated left channel, class 1 on the right
/// (contralateral desynchronization analogue), plus white Gaussian noise.
pub fn synth_erd_with(p: &ErdParams) -> Result<TrialSet, DataError> {
    if p.n_per_class == 0 {
        return Err(DataError::Invariant("n_per_class must be >= 1".into()));
    }
    if p.channels < 4 {
        return Err(DataError::Invariant(format!("ERD generator needs >= 4 channels, got {}", p.channels)));
    }
    if p.fs_hz < 64.0 {
        return Err(DataError::Invariant(format!("ERD generator needs fs >= 64 Hz, got {}", p.fs_hz)));
    }
    let (c, t) = (p.channels, p.samples);
    if t == 0 {
        return Err(DataError::Invariant("samples must be >= 1".into()));
    }
    let left = erd_left_channel(c);
    let right = erd_right_channel(c);
    let mut rng = ChaCha8Rng::seed_from_u64(p.seed);

    let osc: Vec<f64> = (0..t)
        .map(|i| p.osc_amp * (2.0 * std::f64::consts::PI * p.osc_freq_hz * i as f64 / p.fs_hz).sin())
        .collect();

    let n = 2 * p.n_per_class;
    let mut data = Vec::with_capacity(n * c * t);
    let mut labels = Vec::with_capacity(n);
    for i in 0..n {
        let label = (i % 2) as u16;
        labels.push(label);
        let attenuated = if label == 0 { left } else { right };
        for ch in 0..c {
            let amp = if ch == attenuated { p.attenuation } else { 1.0 };
            for s in &osc {
                let noise: f64 = rng.sample::<f64, _>(StandardNormal) * p.noise_std;
                data.push(amp * s + noise);
            }
        }
    }
    TrialSet::new(
        data,
        labels,
        c,
        t,
        p.fs_hz,
        vec!["left".into(), "right".into()],
        channel_names(c, &[(left, "C3"), (c / 2, "Cz"), (right, "C4")]),
        None,
    )
}

fn gauss(dt: f64) -> f64 {
    (-dt * dt / (2.0 * GAUSS_WIDTH_S * GAUSS_WIDTH_S)).exp()
}

/// AR(1) process with unit-lag coefficient 0.95, scaled so the stationary
/// standard deviation equals `std`. Its spectrum falls off roughly as 1/f
/// over the EEG band.
fn ar1_noise(rng: &mut ChaCha8Rng, t: usize, std: f64) -> Vec<f64> {
    const A: f64 = 0.95;
    let innov = std * (1.0 - A * A).sqrt();
    let mut out = Vec::with_capacity(t);
    let mut x: f64 = rng.sample::<f64, _>(StandardNormal) * std;
    for _ in 0..t {
        out.push(x);
        x = A * x + innov * rng.sample::<f64, _>(StandardNormal);
    }
    out
}
