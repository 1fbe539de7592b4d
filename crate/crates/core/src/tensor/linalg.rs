//! Matrix products: plain 2-D matmul and batched matmul.

use super::{make_op, Tensor};
use crate::error::{Error, Result};
use ndarray::{ArrayD, Axis, Ix2, Ix3};

fn as2(v: &ArrayD<f64>) -> Result<ndarray::ArrayView2<'_, f64>> {
    v.view()
        .into_dimensionality::<Ix2>()
        .map_err(|e| Error::Dim(e.to_string()))
}

impl Tensor {
    /// `[M×K] · [K×N] -> [M×N]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let av = self.value();
        let bv = other.value();
        let a = as2(&av)?;
        let b = as2(&bv)?;
        if a.ncols() != b.nrows() {
            return Err(Error::Dim(format!(
                "matmul: inner extents disagree ({:?} vs {:?})",
                a.shape(),
                b.shape()
            )));
        }
        let out = a.dot(&b).into_dyn();
        Ok(make_op(&[self, other], out, move |g, needs| {
            let g2 = g.view().into_dimensionality::<Ix2>().unwrap();
            let a = as2(&av).unwrap();
            let b = as2(&bv).unwrap();
            let ga = needs[0].then(|| g2.dot(&b.t()).into_dyn());
            let gb = needs[1].then(|| a.t().dot(&g2).into_dyn());
            vec![ga, gb]
        }))
    }

    /// Batched matmul: `[P×M×K] · [P×K×N] -> [P×M×N]`.
    pub fn bmm(&self, other: &Tensor) -> Result<Tensor> {
        let av = self.value();
        let bv = other.value();
        let a = av
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::Dim(e.to_string()))?;
        let b = bv
            .view()
            .into_dimensionality::<Ix3>()
            .map_err(|e| Error::Dim(e.to_string()))?;
        let (p, m, k) = a.dim();
        let (pb, kb, n) = b.dim();
        if p != pb || k != kb {
            return Err(Error::Dim(format!(
                "bmm: shapes disagree ({:?} vs {:?})",
                a.shape(),
                b.shape()
            )));
        }
        let mut out = ndarray::Array3::<f64>::zeros((p, m, n));
        for i in 0..p {
            out.index_axis_mut(Axis(0), i)
                .assign(&a.index_axis(Axis(0), i).dot(&b.index_axis(Axis(0), i)));
        }
        Ok(make_op(&[self, other], out.into_dyn(), move |g, needs| {
            let g3 = g.view().into_dimensionality::<Ix3>().unwrap();
            let a = av.view().into_dimensionality::<Ix3>().unwrap();
            let b = bv.view().into_dimensionality::<Ix3>().unwrap();
            let ga = needs[0].then(|| {
                let mut ga = ndarray::Array3::<f64>::zeros((p, m, k));
                for i in 0..p {
                    ga.index_axis_mut(Axis(0), i).assign(
                        &g3.index_axis(Axis(0), i)
                            .dot(&b.index_axis(Axis(0), i).t()),
                    );
                }
                ga.into_dyn()
            });
            let gb = needs[1].then(|| {
                let mut gb = ndarray::Array3::<f64>::zeros((p, k, n));
                for i in 0..p {
                    gb.index_axis_mut(Axis(0), i).assign(
                        &a.index_axis(Axis(0), i)
                            .t()
                            .dot(&g3.index_axis(Axis(0), i)),
                    );
                }
                gb.into_dyn()
            });
            vec![ga, gb]
        }))
    }

    /// Affine map over the trailing axis: flattens leading axes, applies
    /// `x · w + b`, restores the leading axes. `w` is `[in × out]`.
    pub fn linear(&self, w: &Tensor, b: Option<&Tensor>) -> Result<Tensor> {
        let shape = self.shape();
        let d_in = *shape.last().ok_or_else(|| Error::Dim("linear on scalar".into()))?;
        let rows: usize = shape[..shape.len() - 1].iter().product();
        let d_out = w.shape()[1];
        let flat = self.reshape(&[rows, d_in])?;
        let mut y = flat.matmul(w)?;
        if let Some(b) = b {
            y = y.add(b)?;
        }
        let mut out_shape = shape[..shape.len() - 1].to_vec();
        out_shape.push(d_out);
        y.reshape(&out_shape)
    }
}
