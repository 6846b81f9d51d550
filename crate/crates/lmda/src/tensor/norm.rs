//! Batch normalization over the depth axis of `[B, D, H, W]` tensors.

use super::{accumulate, out_grad, shape_err, Tape, Tensor, TensorError};

pub const BN_MOMENTUM: f64 = 0.1;
pub const BN_EPS: f64 = 1e-5;

/// Running statistics of one batch-norm layer, updated in training mode and
/// consumed in inference mode.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchNormState {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
}

impl BatchNormState {
    pub fn new(depth: usize) -> Self {
        BatchNormState { running_mean: vec![0.0; depth], running_var: vec![1.0; depth] }
    }
}

impl Tape {
    /// Per-depth batch normalization with affine scale/shift.
    ///
    /// Training mode normalizes with batch statistics (biased variance) and
    /// updates `state` with momentum [`BN_MOMENTUM`]; inference mode uses the
    /// stored running statistics.
    pub fn batch_norm(
        &self,
        x: &Tensor,
        gamma: &Tensor,
        beta: &Tensor,
        state: &mut BatchNormState,
        training: bool,
    ) -> Result<Tensor, TensorError> {
        let xs = x.shape();
        if xs.len() != 4 {
            return Err(shape_err("batch_norm", format!("expected rank 4, got {:?}", xs)));
        }
        let (b, d, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        if gamma.len() != d || beta.len() != d || state.running_mean.len() != d {
            return Err(shape_err(
                "batch_norm",
                format!("depth {} vs gamma {} / beta {} / state {}", d, gamma.len(), beta.len(), state.running_mean.len()),
            ));
        }
        let plane = h * w;
        let count = b * plane;
        let xd = x.to_vec();
        let gd = gamma.to_vec();
        let bd = beta.to_vec();

        let (mean, var) = if training {
            let mut mean = vec![0.0; d];
            let mut var = vec![0.0; d];
            for di in 0..d {
                let mut s = 0.0;
                for bi in 0..b {
                    let base = (bi * d + di) * plane;
                    s += xd[base..base + plane].iter().sum::<f64>();
                }
                let mu = s / count as f64;
                let mut v = 0.0;
                for bi in 0..b {
                    let base = (bi * d + di) * plane;
                    v += xd[base..base + plane].iter().map(|x| (x - mu) * (x - mu)).sum::<f64>();
                }
                mean[di] = mu;
                var[di] = v / count as f64;
            }
            for di in 0..d {
                state.running_mean[di] = (1.0 - BN_MOMENTUM) * state.running_mean[di] + BN_MOMENTUM * mean[di];
                state.running_var[di] = (1.0 - BN_MOMENTUM) * state.running_var[di] + BN_MOMENTUM * var[di];
            }
            (mean, var)
        } else {
            (state.running_mean.clone(), state.running_var.clone())
        };

        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut data = vec![0.0; xd.len()];
        for bi in 0..b {
            for di in 0..d {
                let base = (bi * d + di) * plane;
                for j in 0..plane {
                    let xh = (xd[base + j] - mean[di]) * inv_std[di];
                    xhat[base + j] = xh;
                    data[base + j] = gd[di] * xh + bd[di];
                }
            }
        }
        let out = Tensor::new(&xs, data)?;
        let (x2, g2, b2, o2) = (x.clone(), gamma.clone(), beta.clone(), out.clone());
        self.record_if(&[x, gamma, beta], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            let gd = g2.to_vec();
            if b2.requires_grad() {
                let mut dbeta = vec![0.0; d];
                for bi in 0..b {
                    for di in 0..d {
                        let base = (bi * d + di) * plane;
                        dbeta[di] += g[base..base + plane].iter().sum::<f64>();
                    }
                }
                accumulate(&b2, &dbeta);
            }
            let mut dgamma = vec![0.0; d];
            for bi in 0..b {
                for di in 0..d {
                    let base = (bi * d + di) * plane;
                    dgamma[di] += g[base..base + plane]
                        .iter()
                        .zip(&xhat[base..base + plane])
                        .map(|(a, b)| a * b)
                        .sum::<f64>();
                }
            }
            if g2.requires_grad() {
                accumulate(&g2, &dgamma);
            }
            if x2.requires_grad() {
                let mut dx = vec![0.0; xhat.len()];
                if training {
                    // dx = γ/σ · (g − mean(g) − x̂·mean(g·x̂)), reductions per depth.
                    let mut gsum = vec![0.0; d];
                    for bi in 0..b {
                        for di in 0..d {
                            let base = (bi * d + di) * plane;
                            gsum[di] += g[base..base + plane].iter().sum::<f64>();
                        }
                    }
                    for bi in 0..b {
                        for di in 0..d {
                            let base = (bi * d + di) * plane;
                            let gm = gsum[di] / count as f64;
                            let gxm = dgamma[di] / count as f64;
                            let coef = gd[di] * inv_std[di];
                            for j in 0..plane {
                                dx[base + j] = coef * (g[base + j] - gm - xhat[base + j] * gxm);
                            }
                        }
                    }
                } else {
                    for bi in 0..b {
                        for di in 0..d {
                            let base = (bi * d + di) * plane;
                            let coef = gd[di] * inv_std[di];
                            for j in 0..plane {
                                dx[base + j] = coef * g[base + j];
                            }
                        }
                    }
                }
                accumulate(&x2, &dx);
            }
        });
        Ok(out)
    }
}
