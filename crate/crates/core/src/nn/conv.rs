//! Valid/zero-padded 2-D convolution followed by ReLU and 2x2 max pooling,
//! one sample at a time. Layouts are channel-major: `[channel][row][col]`.

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) struct ConvGeom {
    pub cin: usize,
    pub h: usize,
    pub w: usize,
    pub cout: usize,
    pub k: usize,
    pub pad: usize,
    pub oh: usize,
    pub ow: usize,
    pub ph: usize,
    pub pw: usize,
}

impl ConvGeom {
    pub fn new(cin: usize, h: usize, w: usize, cout: usize, k: usize, pad: usize) -> Option<Self> {
        let oh = (h + 2 * pad).checked_sub(k)? + 1;
        let ow = (w + 2 * pad).checked_sub(k)? + 1;
        let (ph, pw) = (oh / 2, ow / 2);
        if cin == 0 || cout == 0 || k == 0 || ph == 0 || pw == 0 {
            return None;
        }
        Some(ConvGeom {
            cin,
            h,
            w,
            cout,
            k,
            pad,
            oh,
            ow,
            ph,
            pw,
        })
    }

    pub fn weight_count(&self) -> usize {
        self.cout * self.cin * self.k * self.k
    }

    pub fn param_count(&self) -> usize {
        self.weight_count() + self.cout
    }

    pub fn pre_len(&self) -> usize {
        self.cout * self.oh * self.ow
    }

    pub fn output_len(&self) -> usize {
        self.cout * self.ph * self.pw
    }

    pub fn fan_in(&self) -> usize {
        self.cin * self.k * self.k
    }

    /// Input pixel index feeding output `(oy, ox)` through kernel tap `(ky, kx)`.
    #[inline]
    fn source(&self, ci: usize, oy: usize, ox: usize, ky: usize, kx: usize) -> Option<usize> {
        let iy = (oy + ky).checked_sub(self.pad)?;
        let ix = (ox + kx).checked_sub(self.pad)?;
        if iy >= self.h || ix >= self.w {
            return None;
        }
        Some((ci * self.h + iy) * self.w + ix)
    }
}

/// Fills `pre` with post-ReLU convolution maps, `out` with pooled values and
/// `argmax` with the index into `pre` each pooled value came from.
pub(crate) fn forward_sample(
    g: &ConvGeom,
    params: &[f64],
    x: &[f64],
    pre: &mut [f64],
    out: &mut [f64],
    argmax: &mut [usize],
) {
    let (weights, bias) = params.split_at(g.weight_count());
    for co in 0..g.cout {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let mut s = bias[co];
                for ci in 0..g.cin {
                    let wbase = (co * g.cin + ci) * g.k * g.k;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            if let Some(src) = g.source(ci, oy, ox, ky, kx) {
                                s += weights[wbase + ky * g.k + kx] * x[src];
                            }
                        }
                    }
                }
                pre[(co * g.oh + oy) * g.ow + ox] = s.max(0.0);
            }
        }
    }
    for co in 0..g.cout {
        for py in 0..g.ph {
            for px in 0..g.pw {
                let mut best = (co * g.oh + 2 * py) * g.ow + 2 * px;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = (co * g.oh + 2 * py + dy) * g.ow + 2 * px + dx;
                    if pre[idx] > pre[best] {
                        best = idx;
                    }
                }
                let o = (co * g.ph + py) * g.pw + px;
                out[o] = pre[best];
                argmax[o] = best;
            }
        }
    }
}

/// Accumulates parameter gradients into `grad` and, when requested, the
/// gradient with respect to the layer input into `dx`.
pub(crate) fn backward_sample(
    g: &ConvGeom,
    params: &[f64],
    x: &[f64],
    pre: &[f64],
    argmax: &[usize],
    dout: &[f64],
    grad: &mut [f64],
    mut dx: Option<&mut [f64]>,
) {
    let mut dpre = vec![0.0; g.pre_len()];
    for (o, &d) in dout.iter().enumerate() {
        let idx = argmax[o];
        if pre[idx] > 0.0 {
            dpre[idx] += d;
        }
    }
    let wc = g.weight_count();
    let weights = &params[..wc];
    let (gw, gb) = grad.split_at_mut(wc);
    for co in 0..g.cout {
        for oy in 0..g.oh {
            for ox in 0..g.ow {
                let d = dpre[(co * g.oh + oy) * g.ow + ox];
                if d == 0.0 {
                    continue;
                }
                gb[co] += d;
                for ci in 0..g.cin {
                    let wbase = (co * g.cin + ci) * g.k * g.k;
                    for ky in 0..g.k {
                        for kx in 0..g.k {
                            if let Some(src) = g.source(ci, oy, ox, ky, kx) {
                                gw[wbase + ky * g.k + kx] += d * x[src];
                                if let Some(dx) = dx.as_deref_mut() {
                                    dx[src] += d * weights[wbase + ky * g.k + kx];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}
