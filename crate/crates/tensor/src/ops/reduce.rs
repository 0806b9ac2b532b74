use crate::error::{Result, TensorError};
use crate::tape::{Op, Var};

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(TensorError::Axis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    Ok(())
}

pub(crate) fn softmax_into(x: &[f64], out: &mut [f64], outer: usize, len: usize, inner: usize) {
    for o in 0..outer {
        for i in 0..inner {
            let at = |k: usize| o * len * inner + k * inner + i;
            let max = (0..len).map(|k| x[at(k)]).fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for k in 0..len {
                let e = (x[at(k)] - max).exp();
                out[at(k)] = e;
                total += e;
            }
            for k in 0..len {
                out[at(k)] /= total;
            }
        }
    }
}

impl<'t> Var<'t> {
    /// Sum of all elements, as a scalar.
    pub fn sum(&self) -> Var<'t> {
        let total = self.value().iter().sum();
        self.tape
            .push(Vec::new(), vec![total], Op::SumAll { x: self.id })
    }

    /// Sum along `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("sum_axis", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value();
        let mut out = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..len {
                let src = &x[(o * len + k) * inner..(o * len + k + 1) * inner];
                for (dst, v) in out[o * inner..(o + 1) * inner].iter_mut().zip(src) {
                    *dst += v;
                }
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        Ok(self
            .tape
            .push(out_shape, out, Op::SumAxis { x: self.id, axis }))
    }

    /// Mean along `axis`, removing it.
    pub fn mean_axis(&self, axis: usize) -> Result<Var<'t>> {
        let len = *self.shape().get(axis).ok_or(TensorError::Axis {
            op: "mean_axis",
            axis,
            shape: self.shape(),
        })?;
        Ok(self.sum_axis(axis)?.scale(1.0 / len as f64))
    }

    /// Mean of all elements, as a scalar.
    pub fn mean(&self) -> Var<'t> {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Softmax along `axis`, stabilised by subtracting the running maximum.
    pub fn softmax(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        check_axis("softmax", &shape, axis)?;
        let (outer, len, inner) = axis_split(&shape, axis);
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        softmax_into(&x, &mut out, outer, len, inner);
        Ok(self.tape.push(shape, out, Op::Softmax { x: self.id, axis }))
    }

    /// Normalises each slice along the last axis to zero mean and unit
    /// variance. No affine parameters.
    pub fn layer_norm(&self, eps: f64) -> Result<Var<'t>> {
        let shape = self.shape();
        let Some(&d) = shape.last() else {
            return Err(TensorError::Invalid {
                op: "layer_norm",
                msg: "scalar input".into(),
            });
        };
        let x = self.value();
        let mut out = vec![0.0; x.len()];
        for (src, dst) in x.chunks(d).zip(out.chunks_mut(d)) {
            let mean = src.iter().sum::<f64>() / d as f64;
            let var = src.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rstd = 1.0 / (var + eps).sqrt();
            for (o, v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * rstd;
            }
        }
        Ok(self.tape.push(shape, out, Op::LayerNorm { x: self.id, eps }))
    }
}
