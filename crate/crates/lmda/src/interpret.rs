//! Feature attribution: Eigen-CAM over intermediate activations, the
//! temporal/spatial interpretation pipelines built on it, and scalp
//! topography export.

use std::path::Path;

use thiserror::Error;

use crate::dataio::{Montage, TrialSet};
use crate::model::{LmdaModel, ModelError};
use crate::tensor::{Tape, Tensor};
use crate::train::{predict_probs, TrainError};
use crate::util::{atomic_write, fmt_sig6};

#[derive(Debug, Error)]
pub enum InterpretError {
    #[error("power iteration failed to converge within {0} iterations")]
    NonConvergent(usize),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("class {0} has no correctly predicted trials")]
    ClassEmpty(usize),
    #[error("all trials of class {0} produced zero activation maps")]
    AllZero(usize),
    #[error("unknown channels: {0:?}")]
    UnknownChannels(Vec<String>),
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error("io error on {path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CamLayer {
    TemporalConv,
    SpatialConv,
}

/// Rectified class activation maps at input resolution, one per trial.
#[derive(Debug, Clone)]
pub struct CamResult {
    /// `[N × C × T]` row-major, non-negative.
    pub values: Vec<f64>,
    pub n_trials: usize,
    pub n_channels: usize,
    pub n_samples: usize,
    pub layer: CamLayer,
    pub class_id: usize,
}

impl CamResult {
    pub fn trial(&self, i: usize) -> &[f64] {
        let stride = self.n_channels * self.n_samples;
        &self.values[i * stride..(i + 1) * stride]
    }
}

const POWER_TOL: f64 = 1e-10;
const POWER_MAX_ITERS: usize = 1000;

/// Principal left singular direction of the `d x m` matrix `a` via power
/// iteration on its `d x d` Gram matrix. Returns `None` for a zero matrix.
fn principal_direction(a: &[f64], d: usize, m: usize) -> Result<Option<Vec<f64>>, InterpretError> {
    if a.iter().all(|&v| v == 0.0) {
        return Ok(None);
    }
    let mut gram = vec![0.0; d * d];
    for r in 0..d {
        for c in r..d {
            let dot: f64 = a[r * m..(r + 1) * m].iter().zip(&a[c * m..(c + 1) * m]).map(|(x, y)| x * y).sum();
            gram[r * d + c] = dot;
            gram[c * d + r] = dot;
        }
    }
    let mut v = vec![1.0 / (d as f64).sqrt(); d];
    for _ in 0..POWER_MAX_ITERS {
        let mut next = vec![0.0; d];
        for r in 0..d {
            next[r] = gram[r * d..(r + 1) * d].iter().zip(&v).map(|(g, x)| g * x).sum();
        }
        let norm = next.iter().map(|x| x * x).sum::<f64>().sqrt();
        if norm == 0.0 {
            // started orthogonal to the range; perturb deterministically
            v.iter_mut().enumerate().for_each(|(i, x)| *x += 1e-3 * (i + 1) as f64);
            let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
            v.iter_mut().for_each(|x| *x /= n);
            continue;
        }
        next.iter_mut().for_each(|x| *x /= norm);
        let aligned: f64 = next.iter().zip(&v).map(|(a, b)| a * b).sum();
        let flip = if aligned < 0.0 { -1.0 } else { 1.0 };
        let delta: f64 =
            next.iter().zip(&v).map(|(a, b)| (a - flip * b) * (a - flip * b)).sum::<f64>().sqrt();
        v = next;
        if delta < POWER_TOL {
            return Ok(Some(v));
        }
    }
    Err(InterpretError::NonConvergent(POWER_MAX_ITERS))
}

/// Linear interpolation of each length-`t_in` row to length `t_out`.
fn interp_time(row: &[f64], t_out: usize) -> Vec<f64> {
    let t_in = row.len();
    if t_in == t_out {
        return row.to_vec();
    }
    if t_in == 1 {
        return vec![row[0]; t_out];
    }
    (0..t_out)
        .map(|t| {
            let pos = t as f64 * (t_in - 1) as f64 / (t_out - 1) as f64;
            let lo = pos.floor() as usize;
            let hi = lo.min(t_in - 2) + 1;
            let frac = pos - lo as f64;
            row[lo] * (1.0 - frac) + row[hi.min(t_in - 1)] * frac
        })
        .collect()
}

/// Eigen-CAM: per trial, project the `[D' x (C'·T')]` feature matrix onto
/// its principal depth direction, fix the sign so the map's sum is
/// non-negative, rectify, and map to input resolution (linear time
/// interpolation; channel broadcast when the spatial axis is collapsed).
pub fn eigen_cam(
    features: &Tensor,
    upsample_to: (usize, usize),
    layer: CamLayer,
    class_id: usize,
) -> Result<CamResult, InterpretError> {
    let shape = features.shape();
    if shape.len() != 4 {
        return Err(InterpretError::Shape(format!("features rank {} != 4", shape.len())));
    }
    let (n, d, cf, tf) = (shape[0], shape[1], shape[2], shape[3]);
    let (c, t) = upsample_to;
    if cf != c && cf != 1 {
        return Err(InterpretError::Shape(format!(
            "cannot map {cf} feature channels onto {c} input channels"
        )));
    }
    let fd = features.to_vec();
    let m = cf * tf;
    let mut values = vec![0.0; n * c * t];
    for i in 0..n {
        let a = &fd[i * d * m..(i + 1) * d * m];
        let mut cam = vec![0.0; m];
        if let Some(u) = principal_direction(a, d, m)? {
            for (di, &ud) in u.iter().enumerate() {
                for (cv, &av) in cam.iter_mut().zip(&a[di * m..(di + 1) * m]) {
                    *cv += ud * av;
                }
            }
            let total: f64 = cam.iter().sum();
            if total < 0.0 {
                cam.iter_mut().for_each(|v| *v = -*v);
            }
            cam.iter_mut().for_each(|v| {
                if *v < 0.0 {
                    *v = 0.0
                }
            });
        }
        for ci in 0..c {
            let src = if cf == 1 { &cam[..tf] } else { &cam[ci * tf..(ci + 1) * tf] };
            let row = interp_time(src, t);
            values[(i * c + ci) * t..(i * c + ci + 1) * t].copy_from_slice(&row);
        }
    }
    Ok(CamResult { values, n_trials: n, n_channels: c, n_samples: t, layer, class_id })
}

/// Per-class subsets of correctly predicted trials, ranked by confidence.
pub struct ConfidentSelection {
    pub per_class: Vec<TrialSet>,
    /// How many trials each class fell short of the request.
    pub shortfall: Vec<usize>,
}

/// Pure core of the selection: per class, indices of correctly predicted
/// trials with the highest predicted-class probability, ties broken by
/// lower trial index.
pub fn confident_indices(
    probs: &[Vec<f64>],
    labels: &[u16],
    n_classes: usize,
    per_class: usize,
) -> Result<(Vec<Vec<usize>>, Vec<usize>), InterpretError> {
    let mut chosen = Vec::with_capacity(n_classes);
    let mut shortfall = Vec::with_capacity(n_classes);
    for j in 0..n_classes {
        let mut candidates: Vec<(usize, f64)> = probs
            .iter()
            .zip(labels)
            .enumerate()
            .filter(|(_, (p, &l))| {
                let pred = p.iter().enumerate().max_by(|a, b| a.1.partial_cmp(b.1).unwrap()).unwrap().0;
                l as usize == j && pred == j
            })
            .map(|(i, (p, _))| (i, p[j]))
            .collect();
        if candidates.is_empty() {
            return Err(InterpretError::ClassEmpty(j));
        }
        candidates.sort_by(|a, b| b.1.partial_cmp(&a.1).unwrap().then(a.0.cmp(&b.0)));
        let take = per_class.min(candidates.len());
        shortfall.push(per_class - take);
        let mut idx: Vec<usize> = candidates[..take].iter().map(|&(i, _)| i).collect();
        idx.sort_unstable();
        chosen.push(idx);
    }
    Ok((chosen, shortfall))
}

pub fn select_confident(
    model: &mut LmdaModel,
    data: &TrialSet,
    per_class: usize,
) -> Result<ConfidentSelection, InterpretError> {
    let probs = predict_probs(model, data, 32)?;
    let (indices, shortfall) = confident_indices(&probs, data.labels(), data.n_classes(), per_class)?;
    let per_class_sets = indices
        .iter()
        .map(|idx| data.subset(idx).expect("indices in range"))
        .collect();
    Ok(ConfidentSelection { per_class: per_class_sets, shortfall })
}

/// Both activation maps for one class subset.
pub struct ClassCams {
    pub temporal: CamResult,
    pub spatial: CamResult,
}

/// Runs the network over a class subset and extracts temporal and spatial
/// Eigen-CAMs at input resolution.
pub fn class_cams(model: &mut LmdaModel, set: &TrialSet, class_id: usize) -> Result<ClassCams, InterpretError> {
    let (c, t) = (set.n_channels(), set.n_samples());
    let mut temporal: Option<CamResult> = None;
    let mut spatial: Option<CamResult> = None;
    let indices: Vec<usize> = (0..set.n_trials()).collect();
    for chunk in indices.chunks(32) {
        let tape = Tape::new();
        let mut data = Vec::with_capacity(chunk.len() * c * t);
        for &i in chunk {
            data.extend_from_slice(set.trial(i));
        }
        let x = Tensor::new(&[chunk.len(), 1, c, t], data).expect("dense trials");
        let art = model.forward_full(&tape, &x, false)?;
        let tc = eigen_cam(&art.temporal_features, (c, t), CamLayer::TemporalConv, class_id)?;
        let sc = eigen_cam(&art.spatial_features, (c, t), CamLayer::SpatialConv, class_id)?;
        match (&mut temporal, &mut spatial) {
            (None, None) => {
                temporal = Some(tc);
                spatial = Some(sc);
            }
            (Some(tacc), Some(sacc)) => {
                tacc.values.extend_from_slice(&tc.values);
                tacc.n_trials += tc.n_trials;
                sacc.values.extend_from_slice(&sc.values);
                sacc.n_trials += sc.n_trials;
            }
            _ => unreachable!(),
        }
    }
    Ok(ClassCams { temporal: temporal.expect("non-empty set"), spatial: spatial.expect("non-empty set") })
}

/// Per-class output of the temporal/spatial interpretation pipeline.
#[derive(Debug, Clone)]
pub struct ErnClassResult {
    pub class_id: usize,
    /// Trial- and channel-averaged temporal activation, length T.
    pub temporal_heat: Vec<f64>,
    /// Most prominent feature time, in seconds.
    pub prominent_time_s: f64,
    pub prominent_index: usize,
    /// Spatial activation slice at the prominent time, length C.
    pub spatial_values: Vec<f64>,
    /// Class mean of the raw reference channel, length T.
    pub erp_curve: Vec<f64>,
    /// Class mean of the raw input at the prominent time, length C.
    pub input_topography: Vec<f64>,
}

fn mean_over_trials(values: &[f64], n: usize, stride: usize) -> Vec<f64> {
    let mut out = vec![0.0; stride];
    for i in 0..n {
        for (o, v) in out.iter_mut().zip(&values[i * stride..(i + 1) * stride]) {
            *o += v;
        }
    }
    out.iter_mut().for_each(|v| *v /= n as f64);
    out
}

/// Pure core: given the two activation maps and the raw trials of one
/// class, derive the temporal trace, prominent time, spatial slice, the
/// reference-channel ERP and the input topography.
pub fn ern_class_result(
    cams: &ClassCams,
    raw: &TrialSet,
    reference_channel: usize,
    class_id: usize,
) -> ErnClassResult {
    let (n, c, t) = (cams.temporal.n_trials, cams.temporal.n_channels, cams.temporal.n_samples);
    let tmean = mean_over_trials(&cams.temporal.values, n, c * t); // [C,T]
    let mut temporal_heat = vec![0.0; t];
    for ci in 0..c {
        for (h, v) in temporal_heat.iter_mut().zip(&tmean[ci * t..(ci + 1) * t]) {
            *h += v / c as f64;
        }
    }
    let prominent_index = temporal_heat
        .iter()
        .enumerate()
        .max_by(|a, b| a.1.partial_cmp(b.1).unwrap())
        .map(|(i, _)| i)
        .unwrap_or(0);
    let smean = mean_over_trials(&cams.spatial.values, n, c * t);
    let spatial_values: Vec<f64> = (0..c).map(|ci| smean[ci * t + prominent_index]).collect();

    let raw_mean = mean_over_trials(raw.data(), raw.n_trials(), c * t);
    let erp_curve = raw_mean[reference_channel * t..(reference_channel + 1) * t].to_vec();
    let input_topography: Vec<f64> = (0..c).map(|ci| raw_mean[ci * t + prominent_index]).collect();

    ErnClassResult {
        class_id,
        temporal_heat,
        prominent_time_s: prominent_index as f64 / raw.fs_hz,
        prominent_index,
        spatial_values,
        erp_curve,
        input_topography,
    }
}

/// Finds the reference channel by name, defaulting to the central index.
fn reference_channel(set: &TrialSet) -> usize {
    set.channel_names
        .iter()
        .position(|n| n.eq_ignore_ascii_case("Cz"))
        .unwrap_or(set.n_channels() / 2)
}

/// Temporal/spatial interpretation over per-class confident trials.
pub fn algorithm1_ern(
    model: &mut LmdaModel,
    confident: &[TrialSet],
) -> Result<Vec<ErnClassResult>, InterpretError> {
    confident
        .iter()
        .enumerate()
        .map(|(j, set)| {
            let cams = class_cams(model, set, j)?;
            Ok(ern_class_result(&cams, set, reference_channel(set), j))
        })
        .collect()
}

/// Pure core of the spatial-weight pipeline: per trial, the `top_t` most
/// active times of the channel-averaged temporal map select spatial-map
/// columns, whose per-trial sums are normalized to distributions and then
/// averaged. Returns the class weight vector and the count of skipped
/// all-zero trials.
pub fn mi_channel_weights(
    cams: &ClassCams,
    top_t: usize,
) -> Result<(Vec<f64>, usize), InterpretError> {
    let (n, c, t) = (cams.temporal.n_trials, cams.temporal.n_channels, cams.temporal.n_samples);
    if top_t > t {
        return Err(InterpretError::Shape(format!("top_t {top_t} exceeds {t} samples")));
    }
    let mut acc = vec![0.0; c];
    let mut used = 0usize;
    let mut skipped = 0usize;
    for i in 0..n {
        let tcam = cams.temporal.trial(i);
        let scam = cams.spatial.trial(i);
        let mut trace = vec![0.0; t];
        for ci in 0..c {
            for (tr, v) in trace.iter_mut().zip(&tcam[ci * t..(ci + 1) * t]) {
                *tr += v / c as f64;
            }
        }
        let mut order: Vec<usize> = (0..t).collect();
        order.sort_by(|&a, &b| trace[b].partial_cmp(&trace[a]).unwrap().then(a.cmp(&b)));
        let mut channel_sum = vec![0.0; c];
        for &ti in &order[..top_t] {
            for ci in 0..c {
                channel_sum[ci] += scam[ci * t + ti];
            }
        }
        let total: f64 = channel_sum.iter().sum();
        if total == 0.0 {
            skipped += 1;
            continue;
        }
        for (a, v) in acc.iter_mut().zip(&channel_sum) {
            *a += v / total;
        }
        used += 1;
    }
    if used == 0 {
        return Err(InterpretError::AllZero(cams.temporal.class_id));
    }
    acc.iter_mut().for_each(|v| *v /= used as f64);
    Ok((acc, skipped))
}

/// Per-class channel weight distributions over confident trials.
pub fn algorithm2_mi(
    model: &mut LmdaModel,
    confident: &[TrialSet],
    top_t: usize,
) -> Result<Vec<Vec<f64>>, InterpretError> {
    confident
        .iter()
        .enumerate()
        .map(|(j, set)| {
            let cams = class_cams(model, set, j)?;
            Ok(mi_channel_weights(&cams, top_t)?.0)
        })
        .collect()
}

/// Channel values with their scalp positions and an optional interpolated
/// grid (row-major, NaN outside the unit disk).
#[derive(Debug, Clone)]
pub struct Topography {
    pub channel_values: Vec<f64>,
    pub channel_names: Vec<String>,
    pub positions: Vec<(f64, f64)>,
    pub grid_size: usize,
    pub grid: Vec<f64>,
}

/// Inverse-distance-weighted (power 2) interpolation of channel values
/// onto a `g x g` grid over the unit disk.
pub fn topo_export(
    values: &[f64],
    names: &[String],
    montage: &Montage,
    g: usize,
) -> Result<Topography, InterpretError> {
    let mut positions = Vec::with_capacity(names.len());
    let mut missing = Vec::new();
    for name in names {
        match montage.lookup(name) {
            Some(p) => positions.push(p),
            None => missing.push(name.clone()),
        }
    }
    if !missing.is_empty() {
        return Err(InterpretError::UnknownChannels(missing));
    }
    let mut grid = vec![f64::NAN; g * g];
    for gy in 0..g {
        for gx in 0..g {
            // cell centers spanning [-1, 1]
            let x = -1.0 + 2.0 * (gx as f64 + 0.5) / g as f64;
            let y = 1.0 - 2.0 * (gy as f64 + 0.5) / g as f64;
            if x * x + y * y > 1.0 {
                continue;
            }
            let mut num = 0.0;
            let mut den = 0.0;
            let mut exact = None;
            for (i, &(px, py)) in positions.iter().enumerate() {
                let d2 = (x - px) * (x - px) + (y - py) * (y - py);
                if d2 == 0.0 {
                    exact = Some(values[i]);
                    break;
                }
                num += values[i] / d2;
                den += 1.0 / d2;
            }
            grid[gy * g + gx] = exact.unwrap_or(num / den);
        }
    }
    Ok(Topography {
        channel_values: values.to_vec(),
        channel_names: names.to_vec(),
        positions,
        grid_size: g,
        grid,
    })
}

pub fn topo_csv(topo: &Topography) -> String {
    let mut s = String::from("channel,value\n");
    for (name, v) in topo.channel_names.iter().zip(&topo.channel_values) {
        s.push_str(&format!("{},{}\n", name, fmt_sig6(*v)));
    }
    s
}

/// Simple SVG rendering: colored grid cells clipped to the scalp disk,
/// electrode markers on top.
pub fn topo_svg(topo: &Topography) -> String {
    let g = topo.grid_size;
    let size = 400.0;
    let cell = size / g as f64;
    let finite: Vec<f64> = topo.grid.iter().cloned().filter(|v| v.is_finite()).collect();
    let lo = finite.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = finite.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let mut s = format!(
        "<svg xmlns=\"http://www.w3.org/2000/svg\" width=\"{size}\" height=\"{size}\" viewBox=\"0 0 {size} {size}\">\n"
    );
    for gy in 0..g {
        for gx in 0..g {
            let v = topo.grid[gy * g + gx];
            if !v.is_finite() {
                continue;
            }
            let frac = (v - lo) / span;
            let r = (255.0 * frac) as u8;
            let b = (255.0 * (1.0 - frac)) as u8;
            s.push_str(&format!(
                "<rect x=\"{:.1}\" y=\"{:.1}\" width=\"{:.1}\" height=\"{:.1}\" fill=\"rgb({},64,{})\"/>\n",
                gx as f64 * cell,
                gy as f64 * cell,
                cell,
                cell,
                r,
                b
            ));
        }
    }
    s.push_str(&format!(
        "<circle cx=\"{0}\" cy=\"{0}\" r=\"{0}\" fill=\"none\" stroke=\"black\" stroke-width=\"2\"/>\n",
        size / 2.0
    ));
    for (name, &(px, py)) in topo.channel_names.iter().zip(&topo.positions) {
        let cx = (px + 1.0) / 2.0 * size;
        let cy = (1.0 - py) / 2.0 * size;
        s.push_str(&format!(
            "<circle cx=\"{cx:.1}\" cy=\"{cy:.1}\" r=\"3\" fill=\"black\"/><text x=\"{:.1}\" y=\"{:.1}\" font-size=\"10\">{name}</text>\n",
            cx + 4.0,
            cy - 4.0
        ));
    }
    s.push_str("</svg>\n");
    s
}

fn write(path: &Path, bytes: &[u8]) -> Result<(), InterpretError> {
    atomic_write(path, bytes).map_err(|source| InterpretError::Io { path: path.display().to_string(), source })
}

/// Emits the per-class artifact files: `cam_temporal_<class>.csv`,
/// `erp_<class>.csv`, `topo_<class>.csv` and `topo_<class>.svg`.
pub fn export_class_artifacts(
    dir: &Path,
    class_name: &str,
    result: &ErnClassResult,
    fs_hz: f64,
    names: &[String],
    montage: &Montage,
    grid: usize,
) -> Result<(), InterpretError> {
    let mut cam = String::from("time_s,value\n");
    for (i, v) in result.temporal_heat.iter().enumerate() {
        cam.push_str(&format!("{},{}\n", fmt_sig6(i as f64 / fs_hz), fmt_sig6(*v)));
    }
    write(&dir.join(format!("cam_temporal_{class_name}.csv")), cam.as_bytes())?;

    let mut erp = String::from("time_s,value\n");
    for (i, v) in result.erp_curve.iter().enumerate() {
        erp.push_str(&format!("{},{}\n", fmt_sig6(i as f64 / fs_hz), fmt_sig6(*v)));
    }
    write(&dir.join(format!("erp_{class_name}.csv")), erp.as_bytes())?;

    let topo = topo_export(&result.spatial_values, names, montage, grid)?;
    write(&dir.join(format!("topo_{class_name}.csv")), topo_csv(&topo).as_bytes())?;
    write(&dir.join(format!("topo_{class_name}.svg")), topo_svg(&topo).as_bytes())?;
    Ok(())
}
