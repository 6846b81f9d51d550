//! Grouped 2-D cross-correlation and the channel-contraction product.
//!
//! Inner loops run over the contiguous last axis so the compiler can
//! vectorize them; this is the hot path of training.

use super::{accumulate, arg_err, out_grad, shape_err, Tape, Tensor, TensorError};

struct ConvDims {
    b: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    ipg: usize, // input channels per group
    kh: usize,
    kw: usize,
    groups: usize,
    ho: usize,
    wo: usize,
}

fn conv_forward(x: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut out = vec![0.0; d.b * d.cout * d.ho * d.wo];
    let opg = d.cout / d.groups;
    for b in 0..d.b {
        for o in 0..d.cout {
            let g = o / opg;
            let obase = (b * d.cout + o) * d.ho * d.wo;
            for ig in 0..d.ipg {
                let ci = g * d.ipg + ig;
                let xbase = (b * d.cin + ci) * d.h * d.w;
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let alpha = k[((o * d.ipg + ig) * d.kh + kh) * d.kw + kw];
                        if alpha == 0.0 {
                            continue;
                        }
                        for ho in 0..d.ho {
                            let xrow = &x[xbase + (ho + kh) * d.w + kw..xbase + (ho + kh) * d.w + kw + d.wo];
                            let orow = &mut out[obase + ho * d.wo..obase + (ho + 1) * d.wo];
                            for (ov, xv) in orow.iter_mut().zip(xrow) {
                                *ov += alpha * xv;
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward_input(g: &[f64], k: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dx = vec![0.0; d.b * d.cin * d.h * d.w];
    let opg = d.cout / d.groups;
    for b in 0..d.b {
        for o in 0..d.cout {
            let grp = o / opg;
            let gbase = (b * d.cout + o) * d.ho * d.wo;
            for ig in 0..d.ipg {
                let ci = grp * d.ipg + ig;
                let xbase = (b * d.cin + ci) * d.h * d.w;
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let alpha = k[((o * d.ipg + ig) * d.kh + kh) * d.kw + kw];
                        if alpha == 0.0 {
                            continue;
                        }
                        for ho in 0..d.ho {
                            let grow = &g[gbase + ho * d.wo..gbase + (ho + 1) * d.wo];
                            let start = xbase + (ho + kh) * d.w + kw;
                            let xrow = &mut dx[start..start + d.wo];
                            for (xv, gv) in xrow.iter_mut().zip(grow) {
                                *xv += alpha * gv;
                            }
                        }
                    }
                }
            }
        }
    }
    dx
}

fn conv_backward_kernel(g: &[f64], x: &[f64], d: &ConvDims) -> Vec<f64> {
    let mut dk = vec![0.0; d.cout * d.ipg * d.kh * d.kw];
    let opg = d.cout / d.groups;
    for b in 0..d.b {
        for o in 0..d.cout {
            let grp = o / opg;
            let gbase = (b * d.cout + o) * d.ho * d.wo;
            for ig in 0..d.ipg {
                let ci = grp * d.ipg + ig;
                let xbase = (b * d.cin + ci) * d.h * d.w;
                for kh in 0..d.kh {
                    for kw in 0..d.kw {
                        let mut acc = 0.0;
                        for ho in 0..d.ho {
                            let grow = &g[gbase + ho * d.wo..gbase + (ho + 1) * d.wo];
                            let start = xbase + (ho + kh) * d.w + kw;
                            let xrow = &x[start..start + d.wo];
                            acc += grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                        }
                        dk[((o * d.ipg + ig) * d.kh + kh) * d.kw + kw] += acc;
                    }
                }
            }
        }
    }
    dk
}

fn pad_2d(x: &[f64], b: usize, c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    let hp = h + 2 * ph;
    let wp = w + 2 * pw;
    let mut out = vec![0.0; b * c * hp * wp];
    for bc in 0..b * c {
        for row in 0..h {
            let src = &x[bc * h * w + row * w..bc * h * w + (row + 1) * w];
            let dst = bc * hp * wp + (row + ph) * wp + pw;
            out[dst..dst + w].copy_from_slice(src);
        }
    }
    out
}

fn crop_2d(x: &[f64], b: usize, c: usize, h: usize, w: usize, ph: usize, pw: usize) -> Vec<f64> {
    let hp = h + 2 * ph;
    let wp = w + 2 * pw;
    let mut out = vec![0.0; b * c * h * w];
    for bc in 0..b * c {
        for row in 0..h {
            let src = bc * hp * wp + (row + ph) * wp + pw;
            out[bc * h * w + row * w..bc * h * w + (row + 1) * w].copy_from_slice(&x[src..src + w]);
        }
    }
    out
}

impl Tape {
    /// Grouped zero-padded 2-D convolution in the cross-correlation
    /// convention (no kernel flip).
    ///
    /// `input` is `[B, Cin, H, W]`, `kernel` is `[Cout, Cin/groups, Kh, Kw]`;
    /// the output is `[B, Cout, H + 2·pad_h − Kh + 1, W + 2·pad_w − Kw + 1]`.
    pub fn conv2d_valid(
        &self,
        input: &Tensor,
        kernel: &Tensor,
        groups: usize,
        pad_h: usize,
        pad_w: usize,
    ) -> Result<Tensor, TensorError> {
        let xs = input.shape();
        let ks = kernel.shape();
        if xs.len() != 4 {
            return Err(shape_err("conv2d_valid", format!("input rank {} != 4 (shape {:?})", xs.len(), xs)));
        }
        if ks.len() != 4 {
            return Err(shape_err("conv2d_valid", format!("kernel rank {} != 4 (shape {:?})", ks.len(), ks)));
        }
        if groups == 0 || xs[1] % groups != 0 {
            return Err(arg_err(
                "conv2d_valid",
                format!("input depth {} not divisible by groups {}", xs[1], groups),
            ));
        }
        if ks[0] % groups != 0 {
            return Err(arg_err(
                "conv2d_valid",
                format!("output depth {} not divisible by groups {}", ks[0], groups),
            ));
        }
        if ks[1] != xs[1] / groups {
            return Err(shape_err(
                "conv2d_valid",
                format!("kernel depth {} != input depth {} / groups {}", ks[1], xs[1], groups),
            ));
        }
        let hp = xs[2] + 2 * pad_h;
        let wp = xs[3] + 2 * pad_w;
        if ks[2] > hp {
            return Err(shape_err("conv2d_valid", format!("kernel height {} exceeds padded input height {}", ks[2], hp)));
        }
        if ks[3] > wp {
            return Err(shape_err("conv2d_valid", format!("kernel width {} exceeds padded input width {}", ks[3], wp)));
        }
        let dims = ConvDims {
            b: xs[0],
            cin: xs[1],
            h: hp,
            w: wp,
            cout: ks[0],
            ipg: ks[1],
            kh: ks[2],
            kw: ks[3],
            groups,
            ho: hp - ks[2] + 1,
            wo: wp - ks[3] + 1,
        };
        // padding is rare on the hot path; borrow the raw buffer when
        // none is needed instead of copying the input
        let out_data = if pad_h == 0 && pad_w == 0 {
            conv_forward(&input.data(), &kernel.data(), &dims)
        } else {
            let padded = pad_2d(&input.data(), xs[0], xs[1], xs[2], xs[3], pad_h, pad_w);
            conv_forward(&padded, &kernel.data(), &dims)
        };
        let out = Tensor::new(&[dims.b, dims.cout, dims.ho, dims.wo], out_data)?;
        let (x2, k2, o2) = (input.clone(), kernel.clone(), out.clone());
        self.record_if(&[input, kernel], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            let xs = x2.shape();
            if x2.requires_grad() {
                let dpad = conv_backward_input(&g, &k2.data(), &dims);
                let dx = if pad_h == 0 && pad_w == 0 {
                    dpad
                } else {
                    crop_2d(&dpad, xs[0], xs[1], xs[2], xs[3], pad_h, pad_w)
                };
                accumulate(&x2, &dx);
            }
            if k2.requires_grad() {
                let dk = if pad_h == 0 && pad_w == 0 {
                    conv_backward_kernel(&g, &x2.data(), &dims)
                } else {
                    let padded = pad_2d(&x2.data(), xs[0], xs[1], xs[2], xs[3], pad_h, pad_w);
                    conv_backward_kernel(&g, &padded, &dims)
                };
                accumulate(&k2, &dk);
            }
        });
        Ok(out)
    }

    /// Contracts the depth axis of `x[B,Dx,C,T]` against `w[H,Dx,C]`:
    /// `out[b,h,c,t] = Σ_d x[b,d,c,t]·w[h,d,c]`.
    pub fn channel_contract(&self, x: &Tensor, w: &Tensor) -> Result<Tensor, TensorError> {
        let xs = x.shape();
        let ws = w.shape();
        if xs.len() != 4 || ws.len() != 3 {
            return Err(shape_err("channel_contract", format!("x {:?}, w {:?}", xs, ws)));
        }
        if ws[1] != xs[1] {
            return Err(shape_err(
                "channel_contract",
                format!("depth extent disagrees: x has {}, w has {}", xs[1], ws[1]),
            ));
        }
        if ws[2] != xs[2] {
            return Err(shape_err(
                "channel_contract",
                format!("channel extent disagrees: x has {}, w has {}", xs[2], ws[2]),
            ));
        }
        let (b, dx_depth, c, t) = (xs[0], xs[1], xs[2], xs[3]);
        let h = ws[0];
        let xd = x.data();
        let wd = w.data();
        let mut out_data = vec![0.0; b * h * c * t];
        for bi in 0..b {
            for hi in 0..h {
                for ci in 0..c {
                    let obase = ((bi * h + hi) * c + ci) * t;
                    for di in 0..dx_depth {
                        let alpha = wd[(hi * dx_depth + di) * c + ci];
                        if alpha == 0.0 {
                            continue;
                        }
                        let xbase = ((bi * dx_depth + di) * c + ci) * t;
                        let orow = &mut out_data[obase..obase + t];
                        let xrow = &xd[xbase..xbase + t];
                        for (ov, xv) in orow.iter_mut().zip(xrow) {
                            *ov += alpha * xv;
                        }
                    }
                }
            }
        }
        drop(xd);
        drop(wd);
        let out = Tensor::new(&[b, h, c, t], out_data)?;
        let (x2, w2, o2) = (x.clone(), w.clone(), out.clone());
        self.record_if(&[x, w], &out, move || {
            let Some(g) = out_grad(&o2) else { return };
            if x2.requires_grad() {
                // the data borrow must end before accumulate re-borrows
                let wd = w2.data();
                let mut dxv = vec![0.0; x2.len()];
                for bi in 0..b {
                    for hi in 0..h {
                        for ci in 0..c {
                            let gbase = ((bi * h + hi) * c + ci) * t;
                            for di in 0..dx_depth {
                                let alpha = wd[(hi * dx_depth + di) * c + ci];
                                if alpha == 0.0 {
                                    continue;
                                }
                                let xbase = ((bi * dx_depth + di) * c + ci) * t;
                                let drow = &mut dxv[xbase..xbase + t];
                                let grow = &g[gbase..gbase + t];
                                for (dv, gv) in drow.iter_mut().zip(grow) {
                                    *dv += alpha * gv;
                                }
                            }
                        }
                    }
                }
                drop(wd);
                accumulate(&x2, &dxv);
            }
            if w2.requires_grad() {
                let xd = x2.data();
                let mut dwv = vec![0.0; w2.len()];
                for bi in 0..b {
                    for hi in 0..h {
                        for ci in 0..c {
                            let gbase = ((bi * h + hi) * c + ci) * t;
                            let grow = &g[gbase..gbase + t];
                            for di in 0..dx_depth {
                                let xbase = ((bi * dx_depth + di) * c + ci) * t;
                                let xrow = &xd[xbase..xbase + t];
                                dwv[(hi * dx_depth + di) * c + ci] +=
                                    grow.iter().zip(xrow).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                }
                drop(xd);
                accumulate(&w2, &dwv);
            }
        });
        Ok(out)
    }
}
