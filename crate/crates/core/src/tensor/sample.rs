//! Continuous sampling of voxel volumes: trilinear reads, nearest-voxel
//! deposits, and the cached normalized coordinate grid.
//!
//! Coordinates follow the (x, y, z) ↔ (W, H, D) convention and are
//! corner-aligned: −1 maps to index 0 and +1 to index extent−1, so the
//! outermost voxel centers sit exactly on the cube corners.

use super::{make_op, Tensor};
use crate::error::{Error, Result};
use ndarray::{ArrayD, IxDyn};

/// Normalized center coordinate of voxel `i` along an axis of extent `n`.
pub fn voxel_center(i: usize, n: usize) -> f64 {
    if n == 1 {
        0.0
    } else {
        -1.0 + 2.0 * i as f64 / (n - 1) as f64
    }
}

/// Cached coordinate grid of shape `[1×3×D×H×W]`, channels (x, y, z).
pub fn coord_grid(d: usize, h: usize, w: usize) -> Tensor {
    let mut grid = ArrayD::zeros(IxDyn(&[1, 3, d, h, w]));
    for zi in 0..d {
        for yi in 0..h {
            for xi in 0..w {
                grid[[0, 0, zi, yi, xi]] = voxel_center(xi, w);
                grid[[0, 1, zi, yi, xi]] = voxel_center(yi, h);
                grid[[0, 2, zi, yi, xi]] = voxel_center(zi, d);
            }
        }
    }
    Tensor::constant(grid)
}

/// Continuous index and interpolation cell along one axis: returns
/// `(i0, frac, dscale)` with `i0` clamped so `i0 + 1` is valid.
fn cell(coord: f64, n: usize) -> (usize, f64, f64) {
    let scale = (n - 1) as f64 / 2.0;
    let f = (coord.clamp(-1.0, 1.0) + 1.0) * scale;
    let mut i0 = f.floor() as isize;
    if i0 > n as isize - 2 {
        i0 = n as isize - 2;
    }
    if i0 < 0 {
        i0 = 0;
    }
    (i0 as usize, f - i0 as f64, scale)
}

impl Tensor {
    /// Trilinear read of `h: [B×C×D×H×W]` at `mu: [B×3]` in [−1,1]³,
    /// differentiable in both the volume and the coordinate.
    pub fn trilinear_read(&self, mu: &Tensor) -> Result<Tensor> {
        let hv = self.value();
        let mv = mu.value();
        if hv.ndim() != 5 || mv.ndim() != 2 || mv.shape()[1] != 3 {
            return Err(Error::Dim(format!(
                "trilinear_read expects [B×C×D×H×W] and [B×3], got {:?} and {:?}",
                hv.shape(),
                mv.shape()
            )));
        }
        let (b, c, d, hh, w) = (
            hv.shape()[0],
            hv.shape()[1],
            hv.shape()[2],
            hv.shape()[3],
            hv.shape()[4],
        );
        if mv.shape()[0] != b {
            return Err(Error::Dim("trilinear_read: batch mismatch".into()));
        }
        if d < 2 || hh < 2 || w < 2 {
            return Err(Error::Dim("trilinear_read: every grid extent must be ≥ 2".into()));
        }
        let mut out = ArrayD::zeros(IxDyn(&[b, c]));
        for bi in 0..b {
            let (ix, fx, _) = cell(mv[[bi, 0]], w);
            let (iy, fy, _) = cell(mv[[bi, 1]], hh);
            let (iz, fz, _) = cell(mv[[bi, 2]], d);
            for ci in 0..c {
                let mut acc = 0.0;
                for (dz, wz) in [(0, 1.0 - fz), (1, fz)] {
                    for (dy, wy) in [(0, 1.0 - fy), (1, fy)] {
                        for (dx, wx) in [(0, 1.0 - fx), (1, fx)] {
                            acc += wz * wy * wx
                                * hv[[bi, ci, iz + dz, iy + dy, ix + dx]];
                        }
                    }
                }
                out[[bi, ci]] = acc;
            }
        }
        Ok(make_op(&[self, mu], out, move |g, needs| {
            let mut gh = needs[0].then(|| ArrayD::zeros(IxDyn(&[b, c, d, hh, w])));
            let mut gm = needs[1].then(|| ArrayD::zeros(IxDyn(&[b, 3])));
            for bi in 0..b {
                let (ix, fx, sx) = cell(mv[[bi, 0]], w);
                let (iy, fy, sy) = cell(mv[[bi, 1]], hh);
                let (iz, fz, sz) = cell(mv[[bi, 2]], d);
                for ci in 0..c {
                    let go = g[[bi, ci]];
                    for (dz, wz, dwz) in [(0, 1.0 - fz, -1.0), (1, fz, 1.0)] {
                        for (dy, wy, dwy) in [(0, 1.0 - fy, -1.0), (1, fy, 1.0)] {
                            for (dx, wx, dwx) in [(0, 1.0 - fx, -1.0), (1, fx, 1.0)] {
                                let hval = hv[[bi, ci, iz + dz, iy + dy, ix + dx]];
                                if let Some(gh) = gh.as_mut() {
                                    gh[[bi, ci, iz + dz, iy + dy, ix + dx]] +=
                                        go * wz * wy * wx;
                                }
                                if let Some(gm) = gm.as_mut() {
                                    gm[[bi, 0]] += go * hval * wz * wy * dwx * sx;
                                    gm[[bi, 1]] += go * hval * wz * dwy * wx * sy;
                                    gm[[bi, 2]] += go * hval * dwz * wy * wx * sz;
                                }
                            }
                        }
                    }
                }
            }
            vec![gh, gm]
        }))
    }

    /// Deposit `content: [B×C]` into the single voxel nearest
    /// `mu: [B×3]` (ties toward the lower index). Gradient flows
    /// through `content` only.
    pub fn hard_write(content: &Tensor, mu: &Tensor, dims: (usize, usize, usize)) -> Result<Tensor> {
        let cv = content.value();
        let mv = mu.value();
        let (d, h, w) = dims;
        let (b, c) = (cv.shape()[0], cv.shape()[1]);
        if mv.shape() != [b, 3] {
            return Err(Error::Dim("hard_write: mu must be [B×3]".into()));
        }
        let nearest = |coord: f64, n: usize| -> usize {
            let f = (coord.clamp(-1.0, 1.0) + 1.0) / 2.0 * (n - 1) as f64;
            // ties toward the lower index
            let i = (f - 0.5).ceil() as isize;
            i.clamp(0, n as isize - 1) as usize
        };
        let mut voxels = Vec::with_capacity(b);
        let mut out = ArrayD::zeros(IxDyn(&[b, c, d, h, w]));
        for bi in 0..b {
            let ix = nearest(mv[[bi, 0]], w);
            let iy = nearest(mv[[bi, 1]], h);
            let iz = nearest(mv[[bi, 2]], d);
            voxels.push((iz, iy, ix));
            for ci in 0..c {
                out[[bi, ci, iz, iy, ix]] = cv[[bi, ci]];
            }
        }
        Ok(make_op(&[content, mu], out, move |g, needs| {
            let gc = needs[0].then(|| {
                let mut gc = ArrayD::zeros(IxDyn(&[b, c]));
                for (bi, &(iz, iy, ix)) in voxels.iter().enumerate() {
                    for ci in 0..c {
                        gc[[bi, ci]] = g[[bi, ci, iz, iy, ix]];
                    }
                }
                gc
            });
            vec![gc, None]
        }))
    }
}
