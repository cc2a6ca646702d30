//! Layer kinds and their batched forward/backward kernels.
//!
//! All activations are batch-first: dense layers take `[B, in]`, 1D
//! convolutions `[B, C, L]`, 2D convolutions and pooling `[B, C, H, W]`.
//! Shapes passed to [`LayerSpec::output_shape`] exclude the batch axis.

use serde::{Deserialize, Serialize};

use super::tensor::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum LayerSpec {
    Dense {
        units: usize,
    },
    Conv2d {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Conv1d {
        channels: usize,
        kernel: usize,
        #[serde(default = "one")]
        stride: usize,
        #[serde(default)]
        padding: usize,
    },
    Relu,
    Sigmoid,
    Flatten,
    #[serde(rename = "maxpool2d")]
    MaxPool2d {
        size: usize,
    },
}

fn one() -> usize {
    1
}

/// Per-layer state recorded during forward for use by backward.
#[derive(Debug, Clone)]
pub(crate) enum Aux {
    None,
    /// Sigmoid keeps its output.
    Output(Tensor),
    /// Max-pool keeps the flat input offset of each selected maximum.
    Argmax(Vec<usize>),
}

/// Geometry of a convolution, with 1D treated as height 1.
#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    oh: usize,
    ow: usize,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Conv2d { .. } => "conv2d",
            LayerSpec::Conv1d { .. } => "conv1d",
            LayerSpec::Relu => "relu",
            LayerSpec::Sigmoid => "sigmoid",
            LayerSpec::Flatten => "flatten",
            LayerSpec::MaxPool2d { .. } => "maxpool2d",
        }
    }

    pub fn has_params(&self) -> bool {
        matches!(
            self,
            LayerSpec::Dense { .. } | LayerSpec::Conv2d { .. } | LayerSpec::Conv1d { .. }
        )
    }

    /// Output shape (without batch axis) for the given input shape.
    pub fn output_shape(&self, input: &[usize]) -> Result<Vec<usize>> {
        let bad = |why: &str| {
            Err(Error::shape(format!(
                "{} cannot take input {input:?}: {why}",
                self.name()
            )))
        };
        match *self {
            LayerSpec::Dense { units } => {
                if input.len() != 1 {
                    return bad("dense expects a flat input");
                }
                if units == 0 {
                    return bad("zero units");
                }
                Ok(vec![units])
            }
            LayerSpec::Conv2d { .. } => {
                if input.len() != 3 {
                    return bad("expected [C, H, W]");
                }
                let g = self.geom(input)?;
                Ok(vec![g.cout, g.oh, g.ow])
            }
            LayerSpec::Conv1d { .. } => {
                if input.len() != 2 {
                    return bad("expected [C, L]");
                }
                let g = self.geom(input)?;
                Ok(vec![g.cout, g.ow])
            }
            LayerSpec::Relu | LayerSpec::Sigmoid => Ok(input.to_vec()),
            LayerSpec::Flatten => Ok(vec![input.iter().product()]),
            LayerSpec::MaxPool2d { size } => {
                if input.len() != 3 {
                    return bad("expected [C, H, W]");
                }
                if size == 0 || input[1] < size || input[2] < size {
                    return bad("pool window larger than input");
                }
                Ok(vec![input[0], input[1] / size, input[2] / size])
            }
        }
    }

    /// Weight and bias shapes, if the layer is parameterized.
    pub fn param_shapes(&self, input: &[usize]) -> Result<Option<(Vec<usize>, Vec<usize>)>> {
        Ok(match *self {
            LayerSpec::Dense { units } => Some((vec![units, input[0]], vec![units])),
            LayerSpec::Conv2d {
                channels, kernel, ..
            } => Some((vec![channels, input[0], kernel, kernel], vec![channels])),
            LayerSpec::Conv1d {
                channels, kernel, ..
            } => Some((vec![channels, input[0], kernel], vec![channels])),
            _ => None,
        })
    }

    /// `(fan_in, fan_out)` for Glorot-style initialization.
    pub fn fans(&self, input: &[usize]) -> Option<(usize, usize)> {
        match *self {
            LayerSpec::Dense { units } => Some((input[0], units)),
            LayerSpec::Conv2d {
                channels, kernel, ..
            } => Some((input[0] * kernel * kernel, channels * kernel * kernel)),
            LayerSpec::Conv1d {
                channels, kernel, ..
            } => Some((input[0] * kernel, channels * kernel)),
            _ => None,
        }
    }

    fn geom(&self, input: &[usize]) -> Result<ConvGeom> {
        let (cin, h, w, cout, kh, kw, sh, sw, ph, pw) = match *self {
            LayerSpec::Conv2d {
                channels,
                kernel,
                stride,
                padding,
            } => (
                input[0], input[1], input[2], channels, kernel, kernel, stride, stride, padding,
                padding,
            ),
            LayerSpec::Conv1d {
                channels,
                kernel,
                stride,
                padding,
            } => (
                input[0], 1, input[1], channels, 1, kernel, 1, stride, 0, padding,
            ),
            _ => unreachable!("geometry requested for non-convolution"),
        };
        if cout == 0 || kh == 0 || kw == 0 || sh == 0 || sw == 0 {
            return Err(Error::shape(format!(
                "{} has a zero channel, kernel or stride",
                self.name()
            )));
        }
        if h + 2 * ph < kh || w + 2 * pw < kw {
            return Err(Error::shape(format!(
                "{} kernel larger than padded input {input:?}",
                self.name()
            )));
        }
        Ok(ConvGeom {
            cin,
            h,
            w,
            cout,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            oh: (h + 2 * ph - kh) / sh + 1,
            ow: (w + 2 * pw - kw) / sw + 1,
        })
    }

    /// Applies the layer to a batch. `in_shape` excludes the batch axis.
    pub(crate) fn forward(
        &self,
        in_shape: &[usize],
        params: Option<(&Tensor, &Tensor)>,
        x: &Tensor,
    ) -> Result<(Tensor, Aux)> {
        let batch = x.batch();
        let out_shape = self.output_shape(in_shape)?;
        let mut full = vec![batch];
        full.extend_from_slice(&out_shape);
        match *self {
            LayerSpec::Dense { units } => {
                let (w, b) =
                    params.ok_or_else(|| Error::shape("dense layer missing parameters"))?;
                let n_in = in_shape[0];
                let (wd, bd, xd) = (w.data(), b.data(), x.data());
                let mut out = vec![0.0; batch * units];
                for s in 0..batch {
                    let xs = &xd[s * n_in..(s + 1) * n_in];
                    for o in 0..units {
                        let row = &wd[o * n_in..(o + 1) * n_in];
                        let mut acc = bd[o];
                        for (wi, xi) in row.iter().zip(xs) {
                            acc += wi * xi;
                        }
                        out[s * units + o] = acc;
                    }
                }
                Ok((Tensor::new(full, out)?, Aux::None))
            }
            LayerSpec::Conv2d { .. } | LayerSpec::Conv1d { .. } => {
                let (w, b) = params.ok_or_else(|| Error::shape("conv layer missing parameters"))?;
                let g = self.geom(in_shape)?;
                let out = conv_forward(&g, batch, x.data(), w.data(), b.data());
                Ok((Tensor::new(full, out)?, Aux::None))
            }
            LayerSpec::Relu => Ok((x.map(|v| if v > 0.0 { v } else { 0.0 }), Aux::None)),
            LayerSpec::Sigmoid => {
                let y = x.map(sigmoid);
                Ok((y.clone(), Aux::Output(y)))
            }
            LayerSpec::Flatten => Ok((x.clone().reshape(full)?, Aux::None)),
            LayerSpec::MaxPool2d { size } => {
                let (c, h, w) = (in_shape[0], in_shape[1], in_shape[2]);
                let (oh, ow) = (h / size, w / size);
                let xd = x.data();
                let mut out = Vec::with_capacity(batch * c * oh * ow);
                let mut arg = Vec::with_capacity(batch * c * oh * ow);
                for plane in 0..batch * c {
                    let base = plane * h * w;
                    for oy in 0..oh {
                        for ox in 0..ow {
                            let mut best = base + oy * size * w + ox * size;
                            for ky in 0..size {
                                for kx in 0..size {
                                    let idx = base + (oy * size + ky) * w + ox * size + kx;
                                    // strict comparison keeps the first maximum
                                    if xd[idx] > xd[best] {
                                        best = idx;
                                    }
                                }
                            }
                            out.push(xd[best]);
                            arg.push(best);
                        }
                    }
                }
                Ok((Tensor::new(full, out)?, Aux::Argmax(arg)))
            }
        }
    }

    /// Returns `(weight_grad, bias_grad)` for parameterized layers and the input gradient.
    pub(crate) fn backward(
        &self,
        in_shape: &[usize],
        params: Option<(&Tensor, &Tensor)>,
        x: &Tensor,
        aux: &Aux,
        grad_out: &Tensor,
    ) -> Result<(Option<(Tensor, Tensor)>, Tensor)> {
        let batch = x.batch();
        match *self {
            LayerSpec::Dense { units } => {
                let (w, _) =
                    params.ok_or_else(|| Error::shape("dense layer missing parameters"))?;
                let n_in = in_shape[0];
                let (wd, xd, gd) = (w.data(), x.data(), grad_out.data());
                let mut gw = vec![0.0; units * n_in];
                let mut gb = vec![0.0; units];
                let mut gx = vec![0.0; batch * n_in];
                for s in 0..batch {
                    let xs = &xd[s * n_in..(s + 1) * n_in];
                    let gxs = &mut gx[s * n_in..(s + 1) * n_in];
                    for o in 0..units {
                        let go = gd[s * units + o];
                        gb[o] += go;
                        let grow = &mut gw[o * n_in..(o + 1) * n_in];
                        for (gwi, xi) in grow.iter_mut().zip(xs) {
                            *gwi += go * xi;
                        }
                        let wrow = &wd[o * n_in..(o + 1) * n_in];
                        for (gxi, wi) in gxs.iter_mut().zip(wrow) {
                            *gxi += wi * go;
                        }
                    }
                }
                Ok((
                    Some((
                        Tensor::new(vec![units, n_in], gw)?,
                        Tensor::new(vec![units], gb)?,
                    )),
                    Tensor::new(x.shape().to_vec(), gx)?,
                ))
            }
            LayerSpec::Conv2d { .. } | LayerSpec::Conv1d { .. } => {
                let (w, b) = params.ok_or_else(|| Error::shape("conv layer missing parameters"))?;
                let g = self.geom(in_shape)?;
                let (gw, gb, gx) = conv_backward(&g, batch, x.data(), w.data(), grad_out.data());
                Ok((
                    Some((
                        Tensor::new(w.shape().to_vec(), gw)?,
                        Tensor::new(b.shape().to_vec(), gb)?,
                    )),
                    Tensor::new(x.shape().to_vec(), gx)?,
                ))
            }
            LayerSpec::Relu => {
                let data = x
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&v, &g)| if v > 0.0 { g } else { 0.0 })
                    .collect();
                Ok((None, Tensor::new(x.shape().to_vec(), data)?))
            }
            LayerSpec::Sigmoid => {
                let Aux::Output(y) = aux else {
                    return Err(Error::State("sigmoid tape entry lacks its output".into()));
                };
                let data = y
                    .data()
                    .iter()
                    .zip(grad_out.data())
                    .map(|(&s, &g)| g * s * (1.0 - s))
                    .collect();
                Ok((None, Tensor::new(x.shape().to_vec(), data)?))
            }
            LayerSpec::Flatten => Ok((None, grad_out.clone().reshape(x.shape().to_vec())?)),
            LayerSpec::MaxPool2d { .. } => {
                let Aux::Argmax(arg) = aux else {
                    return Err(Error::State("max-pool tape entry lacks argmax".into()));
                };
                let mut gx = vec![0.0; x.len()];
                for (&idx, &g) in arg.iter().zip(grad_out.data()) {
                    gx[idx] += g;
                }
                Ok((None, Tensor::new(x.shape().to_vec(), gx)?))
            }
        }
    }
}

pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Input index range `[lo, hi)` of output positions `o` for which
/// `o * stride + k - pad` falls inside `0..len`.
fn valid_outputs(
    k: usize,
    stride: usize,
    pad: usize,
    len: usize,
    out_len: usize,
) -> (usize, usize) {
    // o * stride + k >= pad
    let lo = if k >= pad {
        0
    } else {
        (pad - k).div_ceil(stride)
    };
    // o * stride + k - pad < len  <=>  o * stride < len + pad - k
    let hi = if len + pad > k {
        (len + pad - k).div_ceil(stride).min(out_len)
    } else {
        0
    };
    (lo, hi.max(lo))
}

fn conv_forward(g: &ConvGeom, batch: usize, x: &[f64], w: &[f64], b: &[f64]) -> Vec<f64> {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let mut out = vec![0.0; batch * g.cout * plane_out];
    for s in 0..batch {
        for co in 0..g.cout {
            let o = &mut out[(s * g.cout + co) * plane_out..(s * g.cout + co + 1) * plane_out];
            o.fill(b[co]);
            for ci in 0..g.cin {
                let xin = &x[(s * g.cin + ci) * plane_in..(s * g.cin + ci + 1) * plane_in];
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_outputs(ky, g.sh, g.ph, g.h, g.oh);
                    for kx in 0..g.kw {
                        let wv = w[((co * g.cin + ci) * g.kh + ky) * g.kw + kx];
                        let (ox0, ox1) = valid_outputs(kx, g.sw, g.pw, g.w, g.ow);
                        for oy in oy0..oy1 {
                            let iy = oy * g.sh + ky - g.ph;
                            let orow = &mut o[oy * g.ow + ox0..oy * g.ow + ox1];
                            let irow = &xin[iy * g.w..(iy + 1) * g.w];
                            if g.sw == 1 {
                                let start = ox0 + kx - g.pw;
                                for (ov, iv) in
                                    orow.iter_mut().zip(&irow[start..start + (ox1 - ox0)])
                                {
                                    *ov += wv * iv;
                                }
                            } else {
                                for (j, ov) in orow.iter_mut().enumerate() {
                                    *ov += wv * irow[(ox0 + j) * g.sw + kx - g.pw];
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    out
}

fn conv_backward(
    g: &ConvGeom,
    batch: usize,
    x: &[f64],
    w: &[f64],
    grad: &[f64],
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let plane_out = g.oh * g.ow;
    let plane_in = g.h * g.w;
    let mut gw = vec![0.0; w.len()];
    let mut gb = vec![0.0; g.cout];
    let mut gx = vec![0.0; x.len()];
    for s in 0..batch {
        for co in 0..g.cout {
            let go = &grad[(s * g.cout + co) * plane_out..(s * g.cout + co + 1) * plane_out];
            gb[co] += go.iter().sum::<f64>();
            for ci in 0..g.cin {
                let off = (s * g.cin + ci) * plane_in;
                for ky in 0..g.kh {
                    let (oy0, oy1) = valid_outputs(ky, g.sh, g.ph, g.h, g.oh);
                    for kx in 0..g.kw {
                        let widx = ((co * g.cin + ci) * g.kh + ky) * g.kw + kx;
                        let wv = w[widx];
                        let (ox0, ox1) = valid_outputs(kx, g.sw, g.pw, g.w, g.ow);
                        let mut acc = 0.0;
                        for oy in oy0..oy1 {
                            let iy = oy * g.sh + ky - g.ph;
                            let grow = &go[oy * g.ow + ox0..oy * g.ow + ox1];
                            let base = off + iy * g.w;
                            if g.sw == 1 {
                                let start = base + ox0 + kx - g.pw;
                                let end = start + (ox1 - ox0);
                                for ((gv, xv), gxv) in
                                    grow.iter().zip(&x[start..end]).zip(&mut gx[start..end])
                                {
                                    acc += gv * xv;
                                    *gxv += wv * gv;
                                }
                            } else {
                                for (j, gv) in grow.iter().enumerate() {
                                    let ix = base + (ox0 + j) * g.sw + kx - g.pw;
                                    acc += gv * x[ix];
                                    gx[ix] += wv * gv;
                                }
                            }
                        }
                        gw[widx] += acc;
                    }
                }
            }
        }
    }
    (gw, gb, gx)
}
