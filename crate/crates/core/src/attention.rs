//! Multi-head attention, sinusoidal encodings and box modulation.

use std::sync::atomic::{AtomicUsize, Ordering};

use cqvad_tensor::{Bound, ParamStore, Tensor, Var};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::nn::Linear;

/// Lower bound applied to box widths and heights before division.
pub const BOX_EPS: f64 = 1e-4;

static BOX_CLAMPS: AtomicUsize = AtomicUsize::new(0);

/// Number of box sides clamped to [`BOX_EPS`] so far in this process.
pub fn box_clamp_count() -> usize {
    BOX_CLAMPS.load(Ordering::Relaxed)
}

/// Angular frequencies `2π / 10000^(2k/dim)` for `k < dim / 2`.
pub fn frequencies(dim: usize) -> Vec<f64> {
    (0..dim / 2)
        .map(|k| std::f64::consts::TAU / 10000f64.powf(2.0 * k as f64 / dim as f64))
        .collect()
}

/// Sinusoidal code of a scalar: `dim / 2` sines followed by `dim / 2`
/// cosines.
pub fn sine_code(v: f64, dim: usize) -> Vec<f64> {
    let f = frequencies(dim);
    let mut out: Vec<f64> = f.iter().map(|w| (v * w).sin()).collect();
    out.extend(f.iter().map(|w| (v * w).cos()));
    out
}

/// Row-wise [`sine_code`] of a `[n, 1]` column on the tape, giving
/// `[n, dim]`.
pub fn sine_code_var<'t>(v: &Var<'t>, dim: usize) -> Result<Var<'t>> {
    let n = v.shape()[0];
    let f = frequencies(dim);
    let row = v.tape().constant(&Tensor::new([1, f.len()], f)?);
    let arg = v.reshape(vec![n, 1])?.matmul(&row)?;
    Ok(Var::concat(&[arg.sin(), arg.cos()], 1)?)
}

/// Positional code of each column of `[n, 4]` boxes, each `[n, d_model/2]`.
pub fn box_codes<'t>(boxes: &Var<'t>, d_model: usize) -> Result<[Var<'t>; 4]> {
    let half = d_model / 2;
    let col = |j| -> Result<Var<'t>> { sine_code_var(&boxes.narrow(1, j, 1)?, half) };
    Ok([col(0)?, col(1)?, col(2)?, col(3)?])
}

/// Box modulation: `[PE(x)·w_ref/w, PE(y)·h_ref/h]`, where `wh_ref` is
/// `[n, 2]` and `boxes` is `[n, 4]`. Widths and heights below
/// [`BOX_EPS`] are clamped.
pub fn box_modulate_with_ref<'t>(
    pe_x: &Var<'t>,
    pe_y: &Var<'t>,
    boxes: &Var<'t>,
    wh_ref: &Var<'t>,
) -> Result<Var<'t>> {
    let wh = boxes.narrow(1, 2, 2)?;
    let clamped = wh.value().iter().filter(|&&v| v < BOX_EPS).count();
    if clamped > 0 {
        BOX_CLAMPS.fetch_add(clamped, Ordering::Relaxed);
    }
    let ratio = wh_ref.div(&wh.clamp(BOX_EPS, f64::INFINITY))?;
    let px = pe_x.mul(&ratio.narrow(1, 0, 1)?)?;
    let py = pe_y.mul(&ratio.narrow(1, 1, 1)?)?;
    Ok(Var::concat(&[px, py], 1)?)
}

/// Reference size head: `(w_ref, h_ref) = 2·σ(FC(AE))`.
#[derive(Clone, Debug)]
pub struct BoxModulator {
    pub fc: Linear,
}

impl BoxModulator {
    pub fn new(store: &mut ParamStore, name: &str, d: usize, rng: &mut ChaCha8Rng, gain: f64) -> Self {
        Self {
            fc: Linear::new(store, name, d, 2, rng, gain),
        }
    }

    pub fn reference<'t>(&self, p: &Bound<'t>, ae: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.fc.forward(p, ae)?.sigmoid().scale(2.0))
    }

    /// Modulated positional query `[n, D]` for boxes `[n, 4]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, boxes: &Var<'t>, ae: &Var<'t>) -> Result<Var<'t>> {
        let d = ae.shape()[1];
        let [px, py, _, _] = box_codes(boxes, d)?;
        box_modulate_with_ref(&px, &py, boxes, &self.reference(p, ae)?)
    }
}

/// Fixed sinusoidal embedding of a `t × h × w` grid, `[t·h·w, d]`
/// row-major. Each axis gets `2·⌊d/6⌋` channels coding the normalized cell
/// center; leftover channels are zero.
pub fn positional_embed_3d(t: usize, h: usize, w: usize, d: usize) -> Tensor {
    let per_axis = 2 * (d / 6);
    let mut out = vec![0.0; t * h * w * d];
    let axes = [t, h, w];
    for ti in 0..t {
        for hi in 0..h {
            for wi in 0..w {
                let row = &mut out[((ti * h + hi) * w + wi) * d..][..d];
                for (a, &j) in [ti, hi, wi].iter().enumerate() {
                    let c = (j as f64 + 0.5) / axes[a] as f64;
                    row[a * per_axis..(a + 1) * per_axis].copy_from_slice(&sine_code(c, per_axis));
                }
            }
        }
    }
    Tensor::new([t * h * w, d], out).expect("grid embedding shape")
}

/// Multi-head scaled dot-product attention with separate query, key and
/// value input widths.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub wq: Linear,
    pub wk: Linear,
    pub wv: Linear,
    pub wo: Linear,
    pub heads: usize,
}

/// Attention output `[n_q, D]` with the head-averaged weights `[n_q, n_k]`.
pub struct Attended<'t> {
    pub out: Var<'t>,
    pub map: Tensor,
}

impl MultiHeadAttention {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        d_q: usize,
        d_k: usize,
        d_v: usize,
        d: usize,
        heads: usize,
        rng: &mut ChaCha8Rng,
        gain: f64,
    ) -> Self {
        Self {
            wq: Linear::new(store, &format!("{name}.q"), d_q, d, rng, gain),
            wk: Linear::new(store, &format!("{name}.k"), d_k, d, rng, gain),
            wv: Linear::new(store, &format!("{name}.v"), d_v, d, rng, gain),
            wo: Linear::new(store, &format!("{name}.o"), d, d, rng, gain),
            heads,
        }
    }

    pub fn forward<'t>(
        &self,
        p: &Bound<'t>,
        query: &Var<'t>,
        key: &Var<'t>,
        value: &Var<'t>,
    ) -> Result<Attended<'t>> {
        let (qs, ks, vs) = (query.shape(), key.shape(), value.shape());
        if qs.len() != 2 || ks.len() != 2 || vs.len() != 2 || ks[0] != vs[0] {
            return Err(Error::Format(format!(
                "attention inputs query {qs:?}, key {ks:?}, value {vs:?}"
            )));
        }
        let q = self.wq.forward(p, query)?;
        let k = self.wk.forward(p, key)?;
        let v = self.wv.forward(p, value)?;
        self.attend_projected(p, &q, &k, &v)
    }

    /// Attention on already projected `q`, `k`, `v`.
    pub fn attend_projected<'t>(
        &self,
        p: &Bound<'t>,
        q: &Var<'t>,
        k: &Var<'t>,
        v: &Var<'t>,
    ) -> Result<Attended<'t>> {
        let d = q.shape()[1];
        let dh = d / self.heads;
        let (n_q, n_k) = (q.shape()[0], k.shape()[0]);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut map = vec![0.0; n_q * n_k];
        for m in 0..self.heads {
            let qh = q.narrow(1, m * dh, dh)?;
            let kh = k.narrow(1, m * dh, dh)?;
            let vh = v.narrow(1, m * dh, dh)?;
            let w = qh.matmul(&kh.transpose()?)?.scale(scale).softmax(1)?;
            for (acc, x) in map.iter_mut().zip(w.value().iter()) {
                *acc += x / self.heads as f64;
            }
            outs.push(w.matmul(&vh)?);
        }
        let out = self.wo.forward(p, &Var::concat(&outs, 1)?)?;
        Ok(Attended {
            out,
            map: Tensor::new([n_q, n_k], map)?,
        })
    }
}
