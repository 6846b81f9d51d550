//! Trial container, the EEGB v1 on-disk format, synthetic paradigm
//! generators and the electrode montage.

mod montage;
mod synth;

pub use montage::{builtin_montage, Montage};
pub use synth::{
    erd_discriminative_channel, erd_left_channel, erd_right_channel, erp_center_channel, synth_erd, synth_erd_with, synth_erp,
    synth_erp_with, ErdParams, ErpParams, ERP_NEG_PEAK_S, ERP_POS_PEAK_S,
};

use std::fs;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("bad magic: not an EEGB file")]
    BadMagic,
    #[error("unsupported EEGB version {0}")]
    UnsupportedVersion(u32),
    #[error("truncated file: expected {expected} more bytes for {what}")]
    Truncated { what: &'static str, expected: usize },
    #[error("header/payload size disagreement: header claims {claimed} {what}, payload holds {actual}")]
    SizeDisagreement { what: &'static str, claimed: usize, actual: usize },
    #[error("invalid header: {0}")]
    InvalidHeader(String),
    #[error("invariant violation: {0}")]
    Invariant(String),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

/// A labeled collection of EEG trials, `[N trials × C channels × T samples]`
/// row-major, with sampling rate and channel metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TrialSet {
    data: Vec<f64>,
    labels: Vec<u16>,
    n_channels: usize,
    n_samples: usize,
    pub fs_hz: f64,
    pub class_names: Vec<String>,
    pub channel_names: Vec<String>,
    pub channel_pos: Option<Vec<(f64, f64)>>,
}

impl TrialSet {
    pub fn new(
        data: Vec<f64>,
        labels: Vec<u16>,
        n_channels: usize,
        n_samples: usize,
        fs_hz: f64,
        class_names: Vec<String>,
        channel_names: Vec<String>,
        channel_pos: Option<Vec<(f64, f64)>>,
    ) -> Result<Self, DataError> {
        let n_trials = labels.len();
        if n_trials == 0 || n_channels == 0 || n_samples == 0 {
            return Err(DataError::Invariant("trials, channels and samples must all be >= 1".into()));
        }
        if data.len() != n_trials * n_channels * n_samples {
            return Err(DataError::Invariant(format!(
                "data length {} != {}x{}x{}",
                data.len(),
                n_trials,
                n_channels,
                n_samples
            )));
        }
        let k = class_names.len();
        if let Some(bad) = labels.iter().find(|&&l| (l as usize) >= k) {
            return Err(DataError::Invariant(format!("label {} out of range for {} classes", bad, k)));
        }
        if channel_names.len() != n_channels {
            return Err(DataError::Invariant(format!(
                "{} channel names for {} channels",
                channel_names.len(),
                n_channels
            )));
        }
        if let Some(pos) = &channel_pos {
            if pos.len() != n_channels {
                return Err(DataError::Invariant(format!(
                    "{} channel positions for {} channels",
                    pos.len(),
                    n_channels
                )));
            }
            if let Some((x, y)) = pos.iter().find(|(x, y)| x * x + y * y > 1.0 + 1e-12) {
                return Err(DataError::Invariant(format!("channel position ({x},{y}) outside the unit disk")));
            }
        }
        Ok(TrialSet { data, labels, n_channels, n_samples, fs_hz, class_names, channel_names, channel_pos })
    }

    pub fn n_trials(&self) -> usize {
        self.labels.len()
    }

    pub fn n_channels(&self) -> usize {
        self.n_channels
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }

    pub fn n_classes(&self) -> usize {
        self.class_names.len()
    }

    pub fn labels(&self) -> &[u16] {
        &self.labels
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn trial(&self, i: usize) -> &[f64] {
        let stride = self.n_channels * self.n_samples;
        &self.data[i * stride..(i + 1) * stride]
    }

    pub fn trial_channel(&self, i: usize, c: usize) -> &[f64] {
        let base = (i * self.n_channels + c) * self.n_samples;
        &self.data[base..base + self.n_samples]
    }

    pub fn trial_channel_mut(&mut self, i: usize, c: usize) -> &mut [f64] {
        let base = (i * self.n_channels + c) * self.n_samples;
        &mut self.data[base..base + self.n_samples]
    }

    /// Same metadata, new sample buffer (possibly with a different T).
    pub fn with_data(&self, data: Vec<f64>, n_samples: usize) -> Result<Self, DataError> {
        TrialSet::new(
            data,
            self.labels.clone(),
            self.n_channels,
            n_samples,
            self.fs_hz,
            self.class_names.clone(),
            self.channel_names.clone(),
            self.channel_pos.clone(),
        )
    }

    /// New TrialSet keeping only the given trial indices, in order.
    pub fn subset(&self, indices: &[usize]) -> Result<Self, DataError> {
        let stride = self.n_channels * self.n_samples;
        let mut data = Vec::with_capacity(indices.len() * stride);
        let mut labels = Vec::with_capacity(indices.len());
        for &i in indices {
            data.extend_from_slice(self.trial(i));
            labels.push(self.labels[i]);
        }
        TrialSet::new(
            data,
            labels,
            self.n_channels,
            self.n_samples,
            self.fs_hz,
            self.class_names.clone(),
            self.channel_names.clone(),
            self.channel_pos.clone(),
        )
    }
}

#[derive(Serialize, Deserialize)]
struct Header {
    n_trials: usize,
    n_channels: usize,
    n_samples: usize,
    fs_hz: f64,
    class_names: Vec<String>,
    channel_names: Vec<String>,
    #[serde(skip_serializing_if = "Option::is_none")]
    channel_pos: Option<Vec<(f64, f64)>>,
}

const MAGIC: &[u8; 4] = b"EEGB";
const VERSION: u32 = 1;

/// Serializes to the EEGB v1 container. The write is atomic: a temporary
/// sibling file is renamed into place.
pub fn save(x: &TrialSet, path: impl AsRef<Path>) -> Result<(), DataError> {
    let path = path.as_ref();
    let header = Header {
        n_trials: x.n_trials(),
        n_channels: x.n_channels,
        n_samples: x.n_samples,
        fs_hz: x.fs_hz,
        class_names: x.class_names.clone(),
        channel_names: x.channel_names.clone(),
        channel_pos: x.channel_pos.clone(),
    };
    let hjson = serde_json::to_vec(&header).expect("header serialization cannot fail");
    let mut buf = Vec::with_capacity(16 + hjson.len() + x.labels.len() * 2 + x.data.len() * 4);
    buf.extend_from_slice(MAGIC);
    buf.extend_from_slice(&VERSION.to_le_bytes());
    buf.extend_from_slice(&(hjson.len() as u32).to_le_bytes());
    buf.extend_from_slice(&hjson);
    for l in &x.labels {
        buf.extend_from_slice(&l.to_le_bytes());
    }
    for v in &x.data {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    crate::util::atomic_write(path, &buf).map_err(|source| DataError::Io { path: path.display().to_string(), source })
}

pub fn load(path: impl AsRef<Path>) -> Result<TrialSet, DataError> {
    let path = path.as_ref();
    let mut file = fs::File::open(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    let mut bytes = Vec::new();
    file.read_to_end(&mut bytes)
        .map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    load_bytes(&bytes)
}

pub fn load_bytes(bytes: &[u8]) -> Result<TrialSet, DataError> {
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    let mut off = 4usize;
    let take = |off: &mut usize, n: usize, what: &'static str| -> Result<&[u8], DataError> {
        if bytes.len() < *off + n {
            return Err(DataError::Truncated { what, expected: *off + n - bytes.len() });
        }
        let s = &bytes[*off..*off + n];
        *off += n;
        Ok(s)
    };
    let version = u32::from_le_bytes(take(&mut off, 4, "version")?.try_into().unwrap());
    if version != VERSION {
        return Err(DataError::UnsupportedVersion(version));
    }
    let hlen = u32::from_le_bytes(take(&mut off, 4, "header length")?.try_into().unwrap()) as usize;
    let hbytes = take(&mut off, hlen, "header")?;
    let header: Header =
        serde_json::from_slice(hbytes).map_err(|e| DataError::InvalidHeader(e.to_string()))?;

    let mut labels = Vec::with_capacity(header.n_trials);
    {
        let lb = take(&mut off, header.n_trials * 2, "labels")?;
        for chunk in lb.chunks_exact(2) {
            labels.push(u16::from_le_bytes(chunk.try_into().unwrap()));
        }
    }
    let n_values = header.n_trials * header.n_channels * header.n_samples;
    let remaining = bytes.len() - off;
    if remaining != n_values * 4 {
        return Err(DataError::SizeDisagreement {
            what: "samples",
            claimed: n_values,
            actual: remaining / 4,
        });
    }
    let mut data = Vec::with_capacity(n_values);
    for chunk in bytes[off..].chunks_exact(4) {
        data.push(f32::from_le_bytes(chunk.try_into().unwrap()) as f64);
    }
    TrialSet::new(
        data,
        labels,
        header.n_channels,
        header.n_samples,
        header.fs_hz,
        header.class_names,
        header.channel_names,
        header.channel_pos,
    )
}

/// Reads just the JSON header of an EEGB file (for `info`).
pub fn read_header_json(path: impl AsRef<Path>) -> Result<String, DataError> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|source| DataError::Io { path: path.display().to_string(), source })?;
    if bytes.len() < 4 || &bytes[..4] != MAGIC {
        return Err(DataError::BadMagic);
    }
    if bytes.len() < 12 {
        return Err(DataError::Truncated { what: "header", expected: 12 - bytes.len() });
    }
    let hlen = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
    if bytes.len() < 12 + hlen {
        return Err(DataError::Truncated { what: "header", expected: 12 + hlen - bytes.len() });
    }
    String::from_utf8(bytes[12..12 + hlen].to_vec()).map_err(|e| DataError::InvalidHeader(e.to_string()))
}
