//! Axis-factorized depthwise 3-D convolution and 1×1×1 pointwise
//! projection, both with zero same-padding.

use super::{make_op, Tensor};
use crate::error::{Error, Result};
use ndarray::{ArrayD, Axis, Ix2, Ix3, IxDyn};

/// Which spatial axis a 3-tap depthwise kernel runs along.
fn kernel_axis(kshape: &[usize]) -> Result<usize> {
    if kshape.len() != 4 {
        return Err(Error::Dim(format!(
            "depthwise kernel must be [C×kd×kh×kw], got {:?}",
            kshape
        )));
    }
    let spatial = &kshape[1..];
    let threes: Vec<usize> = (0..3).filter(|&i| spatial[i] == 3).collect();
    if threes.len() != 1 || spatial.iter().any(|&k| k != 1 && k != 3) {
        return Err(Error::Dim(format!(
            "unsupported kernel {:?}: exactly one spatial extent must be 3, the others 1",
            kshape
        )));
    }
    Ok(threes[0])
}

/// 3-tap depthwise convolution along one axis of each lane: zero pad.
fn dw_lanes(
    x: &ArrayD<f64>,
    k: &ArrayD<f64>, // (C, 3)
    axis: usize,     // spatial axis index 0..3 (maps to tensor axis 2+axis)
    flip: bool,
) -> ArrayD<f64> {
    let ax = Axis(2 + axis);
    let c_count = x.shape()[1];
    let mut out = ArrayD::zeros(x.raw_dim());
    // lanes iterate row-major over the remaining axes; recover the
    // channel index from the lane counter.
    let rem: usize = x
        .shape()
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != 2 + axis && i >= 2)
        .map(|(_, &d)| d)
        .product();
    let mut lane_idx = 0usize;
    let k2 = k.view().into_dimensionality::<Ix2>().unwrap();
    for (lane_in, mut lane_out) in x.lanes(ax).into_iter().zip(out.lanes_mut(ax)) {
        let c = (lane_idx / rem) % c_count;
        lane_idx += 1;
        let (k0, k1, k2v) = if flip {
            (k2[[c, 2]], k2[[c, 1]], k2[[c, 0]])
        } else {
            (k2[[c, 0]], k2[[c, 1]], k2[[c, 2]])
        };
        let n = lane_in.len();
        for i in 0..n {
            let mut acc = k1 * lane_in[i];
            if i > 0 {
                acc += k0 * lane_in[i - 1];
            }
            if i + 1 < n {
                acc += k2v * lane_in[i + 1];
            }
            lane_out[i] = acc;
        }
    }
    out
}

/// Per-channel-and-tap weight gradient for a depthwise convolution.
fn dw_kernel_grad(x: &ArrayD<f64>, g: &ArrayD<f64>, axis: usize, c_count: usize) -> ArrayD<f64> {
    let ax = Axis(2 + axis);
    let rem: usize = x
        .shape()
        .iter()
        .enumerate()
        .filter(|&(i, _)| i != 2 + axis && i >= 2)
        .map(|(_, &d)| d)
        .product();
    let mut gk = ndarray::Array2::<f64>::zeros((c_count, 3));
    let mut lane_idx = 0usize;
    for (lane_x, lane_g) in x.lanes(ax).into_iter().zip(g.lanes(ax)) {
        let c = (lane_idx / rem) % c_count;
        lane_idx += 1;
        let n = lane_x.len();
        for i in 0..n {
            let gv = lane_g[i];
            gk[[c, 1]] += gv * lane_x[i];
            if i > 0 {
                gk[[c, 0]] += gv * lane_x[i - 1];
            }
            if i + 1 < n {
                gk[[c, 2]] += gv * lane_x[i + 1];
            }
        }
    }
    gk.into_dyn()
}

impl Tensor {
    /// Depthwise 3-D convolution with an axis-aligned 3-tap kernel
    /// `[C×kd×kh×kw]` (exactly one spatial extent is 3) and zero
    /// same-padding. Output shape equals input shape.
    pub fn depthwise_conv3d(&self, kernel: &Tensor) -> Result<Tensor> {
        let xv = self.value();
        let kv = kernel.value();
        if xv.ndim() != 5 {
            return Err(Error::Dim(format!(
                "depthwise_conv3d input must be 5-D, got {:?}",
                xv.shape()
            )));
        }
        let axis = kernel_axis(kv.shape())?;
        let c = xv.shape()[1];
        if kv.shape()[0] != c {
            return Err(Error::Dim(format!(
                "kernel channels {} != input channels {}",
                kv.shape()[0],
                c
            )));
        }
        let kflat = kv
            .as_ref()
            .clone()
            .into_shape_with_order(IxDyn(&[c, 3]))
            .unwrap();
        let out = dw_lanes(&xv, &kflat, axis, false);
        let kshape = kv.shape().to_vec();
        Ok(make_op(&[self, kernel], out, move |g, needs| {
            let gx = needs[0].then(|| dw_lanes(g, &kflat, axis, true));
            let gk = needs[1].then(|| {
                dw_kernel_grad(&xv, g, axis, c)
                    .into_shape_with_order(IxDyn(&kshape))
                    .unwrap()
            });
            vec![gx, gk]
        }))
    }

    /// 1×1×1 projection across channels: `w` is `[Cout×Cin]`, optional
    /// bias `[Cout]`. Equivalent to a matmul at every voxel.
    pub fn pointwise_conv3d(&self, w: &Tensor, bias: Option<&Tensor>) -> Result<Tensor> {
        let xv = self.value();
        let wv = w.value();
        if xv.ndim() != 5 {
            return Err(Error::Dim(format!(
                "pointwise_conv3d input must be 5-D, got {:?}",
                xv.shape()
            )));
        }
        let (b, cin) = (xv.shape()[0], xv.shape()[1]);
        let spatial = xv.shape()[2..].to_vec();
        let vox: usize = spatial.iter().product();
        let w2 = wv
            .view()
            .into_dimensionality::<Ix2>()
            .map_err(|e| Error::Dim(e.to_string()))?;
        let (cout, cin_w) = (w2.nrows(), w2.ncols());
        if cin_w != cin {
            return Err(Error::Dim(format!(
                "pointwise weight expects {} input channels, got {}",
                cin_w, cin
            )));
        }
        let xs = xv.as_standard_layout();
        let x3 = xs.view().into_shape_with_order((b, cin, vox)).unwrap();
        let mut out = ndarray::Array3::<f64>::zeros((b, cout, vox));
        for i in 0..b {
            out.index_axis_mut(Axis(0), i)
                .assign(&w2.dot(&x3.index_axis(Axis(0), i)));
        }
        if let Some(bias) = bias {
            let bv = bias.value();
            for i in 0..b {
                for o in 0..cout {
                    let bval = bv[[o]];
                    out.index_axis_mut(Axis(0), i)
                        .index_axis_mut(Axis(0), o)
                        .mapv_inplace(|v| v + bval);
                }
            }
        }
        let mut out_shape = vec![b, cout];
        out_shape.extend_from_slice(&spatial);
        let out = out
            .into_dyn()
            .into_shape_with_order(IxDyn(&out_shape))
            .unwrap();
        let has_bias = bias.is_some();
        let inputs: Vec<&Tensor> = match bias {
            Some(bt) => vec![self, w, bt],
            None => vec![self, w],
        };
        Ok(make_op(&inputs, out, move |g, needs| {
            let g3 = g
                .view()
                .into_shape_with_order((b, cout, vox))
                .unwrap()
                .into_dimensionality::<Ix3>()
                .unwrap();
            let xs = xv.as_standard_layout();
            let x3 = xs.view().into_shape_with_order((b, cin, vox)).unwrap();
            let w2 = wv.view().into_dimensionality::<Ix2>().unwrap();
            let gx = needs[0].then(|| {
                let mut gx = ndarray::Array3::<f64>::zeros((b, cin, vox));
                for i in 0..b {
                    gx.index_axis_mut(Axis(0), i)
                        .assign(&w2.t().dot(&g3.index_axis(Axis(0), i)));
                }
                gx.into_dyn()
                    .into_shape_with_order(IxDyn(xv.shape()))
                    .unwrap()
            });
            let gw = needs[1].then(|| {
                let mut gw = ndarray::Array2::<f64>::zeros((cout, cin));
                for i in 0..b {
                    gw += &g3
                        .index_axis(Axis(0), i)
                        .dot(&x3.index_axis(Axis(0), i).t());
                }
                gw.into_dyn()
            });
            let mut grads = vec![gx, gw];
            if has_bias {
                grads.push(needs[2].then(|| {
                    g3.sum_axis(Axis(2)).sum_axis(Axis(0)).into_dyn()
                }));
            }
            grads
        }))
    }
}
