//! Parameterized building blocks shared by the encoder and decoder.

use cqvad_tensor::{Bound, ParamId, ParamStore, Tensor, Var, ZERO_INDEX};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::Result;

pub const LN_EPS: f64 = 1e-5;

/// Glorot-uniform matrix of shape `[d_in, d_out]`.
pub fn glorot(rng: &mut ChaCha8Rng, d_in: usize, d_out: usize, gain: f64) -> Tensor {
    let a = gain * (6.0 / (d_in + d_out) as f64).sqrt();
    Tensor::from_fn([d_in, d_out], |_| rng.random_range(-a..a))
}

/// `y = x W + b` on row vectors.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
    pub d_in: usize,
    pub d_out: usize,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_in: usize,
        d_out: usize,
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Self {
        let w = store.add(format!("{name}.w"), glorot(rng, d_in, d_out, gain));
        let b = store.add(format!("{name}.b"), Tensor::zeros([d_out]));
        Self { w, b, d_in, d_out }
    }

    /// Weights and bias start at zero.
    pub fn zeros(store: &mut ParamStore, name: &str, d_in: usize, d_out: usize) -> Self {
        let w = store.add(format!("{name}.w"), Tensor::zeros([d_in, d_out]));
        let b = store.add(format!("{name}.b"), Tensor::zeros([d_out]));
        Self { w, b, d_in, d_out }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(x.matmul(&p.get(self.w))?.add(&p.get(self.b))?)
    }
}

/// Layer normalization over the last axis with a learned affine map.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, d: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.gamma"), Tensor::full([d], 1.0)),
            beta: store.add(format!("{name}.beta"), Tensor::zeros([d])),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        Ok(x
            .layer_norm(LN_EPS)?
            .mul(&p.get(self.gamma))?
            .add(&p.get(self.beta))?)
    }
}

/// Two-layer perceptron with a ReLU in between.
#[derive(Clone, Debug)]
pub struct Mlp {
    pub l1: Linear,
    pub l2: Linear,
}

impl Mlp {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, rng, gain),
            l2: Linear::new(store, &format!("{name}.1"), dims.1, dims.2, rng, gain),
        }
    }

    /// Like [`new`](Self::new) with the output layer zeroed.
    pub fn zero_output(
        store: &mut ParamStore,
        name: &str,
        dims: (usize, usize, usize),
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Self {
        Self {
            l1: Linear::new(store, &format!("{name}.0"), dims.0, dims.1, rng, gain),
            l2: Linear::zeros(store, &format!("{name}.1"), dims.1, dims.2),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        self.l2.forward(p, &self.l1.forward(p, x)?.relu())
    }
}

/// Gather indices turning an `[h·w, c]` map into `[h·w, 9·c]` rows of 3×3
/// neighbourhoods (zero outside the map), tap-major.
pub fn im2col3x3(h: usize, w: usize, c: usize) -> Vec<usize> {
    let mut index = Vec::with_capacity(h * w * 9 * c);
    for y in 0..h {
        for x in 0..w {
            for dy in 0..3 {
                for dx in 0..3 {
                    let sy = y as isize + dy as isize - 1;
                    let sx = x as isize + dx as isize - 1;
                    let inside = sy >= 0 && sx >= 0 && (sy as usize) < h && (sx as usize) < w;
                    for ch in 0..c {
                        index.push(if inside {
                            (sy as usize * w + sx as usize) * c + ch
                        } else {
                            ZERO_INDEX
                        });
                    }
                }
            }
        }
    }
    index
}

/// Same-padded 3×3 convolution on row-major `[h·w, c_in]` maps. The kernel
/// is stored as `[9·c_in, c_out]`, tap-major (`dy`, then `dx`, then input
/// channel).
#[derive(Clone, Debug)]
pub struct Conv3x3 {
    pub lin: Linear,
}

impl Conv3x3 {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        c_in: usize,
        c_out: usize,
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Self {
        Self {
            lin: Linear::new(store, name, 9 * c_in, c_out, rng, gain),
        }
    }

    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>, h: usize, w: usize) -> Result<Var<'t>> {
        let c = self.lin.d_in / 9;
        let cols = x.gather(&im2col3x3(h, w, c), [h * w, 9 * c])?;
        self.lin.forward(p, &cols)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use cqvad_tensor::Tape;
    use rand::SeedableRng;

    #[test]
    fn conv_matches_direct_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let conv = Conv3x3::new(&mut store, "c", 2, 3, &mut rng, 1.0);
        let (h, w) = (3, 4);
        let x = Tensor::from_fn([h * w, 2], |i| (i as f64 * 0.7).cos());
        let tape = Tape::new();
        let p = store.bind(&tape);
        let out = conv.forward(&p, &tape.constant(&x), h, w).unwrap();
        let k = store.get(conv.lin.w).data();
        let o = out.value();
        for y in 0..h {
            for xx in 0..w {
                for co in 0..3 {
                    let mut acc = 0.0;
                    for dy in 0..3 {
                        for dx in 0..3 {
                            let (sy, sx) = (y as isize + dy - 1, xx as isize + dx - 1);
                            if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                                continue;
                            }
                            for ci in 0..2 {
                                let tap = (dy * 3 + dx) as usize;
                                acc += x.data()[(sy as usize * w + sx as usize) * 2 + ci]
                                    * k[(tap * 2 + ci) * 3 + co];
                            }
                        }
                    }
                    assert!((o[(y * w + xx) * 3 + co] - acc).abs() < 1e-12);
                }
            }
        }
    }
}
