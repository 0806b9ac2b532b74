use std::rc::Rc;

use crate::error::{Result, TensorError};
use crate::ops::elementwise::{broadcast_shape, BroadcastIndex};
use crate::ops::reduce::axis_split;
use crate::tape::{Op, Var, ZERO_INDEX};
use crate::tensor::numel;

impl<'t> Var<'t> {
    pub fn reshape(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        if numel(&shape) != self.numel() {
            return Err(TensorError::Shape {
                op: "reshape",
                lhs: self.shape(),
                rhs: shape,
            });
        }
        Ok(self
            .tape
            .push(shape, self.value().to_vec(), Op::Reshape { x: self.id }))
    }

    /// Explicit broadcast to `shape` under trailing-dimension alignment.
    pub fn broadcast_to(&self, shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        let own = self.shape();
        if broadcast_shape(&own, &shape).as_deref() != Some(shape.as_slice()) {
            return Err(TensorError::Shape {
                op: "broadcast_to",
                lhs: own,
                rhs: shape,
            });
        }
        let idx = BroadcastIndex::new(&shape, &own);
        let x = self.value();
        let out = (0..numel(&shape)).map(|i| x[idx.get(i)]).collect();
        Ok(self.tape.push(shape, out, Op::BroadcastTo { x: self.id }))
    }

    /// Concatenates along `axis`; all other extents must agree.
    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts.first().ok_or(TensorError::Invalid {
            op: "concat",
            msg: "no operands".into(),
        })?;
        let base = first.shape();
        if axis >= base.len() {
            return Err(TensorError::Axis {
                op: "concat",
                axis,
                shape: base,
            });
        }
        let mut total = 0;
        for p in parts {
            first.same_tape(p);
            let s = p.shape();
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: s,
                });
            }
            total += s[axis];
        }
        let mut out_shape = base.clone();
        out_shape[axis] = total;
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = vec![0.0; numel(&out_shape)];
        let mut at = 0;
        for p in parts {
            let len = p.shape()[axis];
            let v = p.value();
            for o in 0..outer {
                let dst = (o * total + at) * inner;
                out[dst..dst + len * inner].copy_from_slice(&v[o * len * inner..(o + 1) * len * inner]);
            }
            at += len;
        }
        Ok(first.tape.push(
            out_shape,
            out,
            Op::Concat {
                parts: parts.iter().map(|p| p.id).collect(),
                axis,
            },
        ))
    }

    /// The slice `start..start + len` along `axis`.
    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(TensorError::Invalid {
                op: "narrow",
                msg: format!("range {start}..{} on axis {axis} of {shape:?}", start + len),
            });
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let x = self.value();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * full + start) * inner;
            out.extend_from_slice(&x[src..src + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        Ok(self.tape.push(
            out_shape,
            out,
            Op::Narrow {
                x: self.id,
                axis,
                start,
            },
        ))
    }

    /// Rows `start..start + len` of the leading axis.
    pub fn rows(&self, start: usize, len: usize) -> Result<Var<'t>> {
        self.narrow(0, start, len)
    }

    /// `out[i] = self[index[i]]` on flattened buffers; [`ZERO_INDEX`]
    /// entries produce zeros. The backward pass scatter-adds.
    pub fn gather(&self, index: &[usize], shape: impl Into<Vec<usize>>) -> Result<Var<'t>> {
        let shape = shape.into();
        if numel(&shape) != index.len() {
            return Err(TensorError::DataLength {
                len: index.len(),
                shape,
            });
        }
        let x = self.value();
        let n = x.len();
        let mut out = Vec::with_capacity(index.len());
        for &i in index {
            if i == ZERO_INDEX {
                out.push(0.0);
            } else if i < n {
                out.push(x[i]);
            } else {
                return Err(TensorError::Invalid {
                    op: "gather",
                    msg: format!("index {i} out of range for {n} elements"),
                });
            }
        }
        Ok(self.tape.push(
            shape,
            out,
            Op::Gather {
                x: self.id,
                index: Rc::from(index),
            },
        ))
    }

    /// Selects whole rows of a 2-D value.
    pub fn select_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "select_rows",
                msg: format!("expected a matrix, got {shape:?}"),
            });
        }
        let c = shape[1];
        let index: Vec<usize> = rows
            .iter()
            .flat_map(|&r| (0..c).map(move |j| r * c + j))
            .collect();
        self.gather(&index, vec![rows.len(), c])
    }

    /// Sparse row mixing: `out[r] = Σ weight · self[src]` over `taps[r]`.
    pub fn weighted_rows(&self, taps: Rc<Vec<Vec<(usize, f64)>>>) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.len() != 2 {
            return Err(TensorError::Invalid {
                op: "weighted_rows",
                msg: format!("expected a matrix, got {shape:?}"),
            });
        }
        let (n, c) = (shape[0], shape[1]);
        let x = self.value();
        let mut out = vec![0.0; taps.len() * c];
        for (r, row_taps) in taps.iter().enumerate() {
            let dst = &mut out[r * c..(r + 1) * c];
            for &(src, w) in row_taps {
                if src >= n {
                    return Err(TensorError::Invalid {
                        op: "weighted_rows",
                        msg: format!("source row {src} out of range for {n} rows"),
                    });
                }
                for (o, v) in dst.iter_mut().zip(&x[src * c..(src + 1) * c]) {
                    *o += w * v;
                }
            }
        }
        let rows = taps.len();
        Ok(self
            .tape
            .push(vec![rows, c], out, Op::WeightedRows { x: self.id, taps }))
    }
}
