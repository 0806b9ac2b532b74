use cqvad::attention::{
    box_codes, box_modulate_with_ref, positional_embed_3d, sine_code, BoxModulator, MultiHeadAttention,
};
use cqvad_tensor::{gradcheck, Bound, ParamStore, Tape, Tensor};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: [usize; 2]) -> Tensor {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

/// Random weights and biases everywhere, so biases are exercised too.
fn mha(rng: &mut ChaCha8Rng, d_q: usize, d_k: usize, d_v: usize, d: usize, heads: usize) -> (ParamStore, MultiHeadAttention) {
    let mut store = ParamStore::new();
    let m = MultiHeadAttention::new(&mut store, "a", d_q, d_k, d_v, d, heads, rng, 1.0);
    for t in store.tensors_mut() {
        for v in t.data_mut() {
            *v = rng.random_range(-0.5..0.5);
        }
    }
    (store, m)
}

fn linear_loop(x: &[f64], rows: usize, w: &Tensor, b: &Tensor) -> Vec<f64> {
    let (d_in, d_out) = (w.shape()[0], w.shape()[1]);
    let mut out = vec![0.0; rows * d_out];
    for r in 0..rows {
        for j in 0..d_out {
            let mut s = b.data()[j];
            for k in 0..d_in {
                s += x[r * d_in + k] * w.data()[k * d_out + j];
            }
            out[r * d_out + j] = s;
        }
    }
    out
}

/// Scalar-loop multi-head attention returning `(out, head-averaged map)`.
fn attention_loop(
    store: &ParamStore,
    m: &MultiHeadAttention,
    q: &Tensor,
    k: &Tensor,
    v: &Tensor,
) -> (Vec<f64>, Vec<f64>) {
    let (n_q, n_k) = (q.shape()[0], k.shape()[0]);
    let lin = |l: &cqvad::nn::Linear, x: &Tensor, rows| linear_loop(x.data(), rows, store.get(l.w), store.get(l.b));
    let (qp, kp, vp) = (lin(&m.wq, q, n_q), lin(&m.wk, k, n_k), lin(&m.wv, v, n_k));
    let d = m.wq.d_out;
    let dh = d / m.heads;
    let mut heads_out = vec![0.0; n_q * d];
    let mut map = vec![0.0; n_q * n_k];
    for h in 0..m.heads {
        for i in 0..n_q {
            let mut logits = vec![0.0; n_k];
            for j in 0..n_k {
                let mut s = 0.0;
                for c in 0..dh {
                    s += qp[i * d + h * dh + c] * kp[j * d + h * dh + c];
                }
                logits[j] = s / (dh as f64).sqrt();
            }
            let mx = logits.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = logits.iter().map(|l| (l - mx).exp()).collect();
            let z: f64 = e.iter().sum();
            for j in 0..n_k {
                let a = e[j] / z;
                map[i * n_k + j] += a / m.heads as f64;
                for c in 0..dh {
                    heads_out[i * d + h * dh + c] += a * vp[j * d + h * dh + c];
                }
            }
        }
    }
    let out = linear_loop(&heads_out, n_q, store.get(m.wo.w), store.get(m.wo.b));
    (out, map)
}

#[test]
fn matches_scalar_loop() {
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, m) = mha(&mut rng, 6, 6, 4, 4, 2);
        let (q, k, v) = (random(&mut rng, [2, 6]), random(&mut rng, [3, 6]), random(&mut rng, [3, 4]));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let a = m.forward(&p, &tape.constant(&q), &tape.constant(&k), &tape.constant(&v)).unwrap();
        let (out, map) = attention_loop(&store, &m, &q, &k, &v);
        for (x, y) in a.out.value().iter().zip(&out) {
            assert!((x - y).abs() < 1e-12);
        }
        for (x, y) in a.map.data().iter().zip(&map) {
            assert!((x - y).abs() < 1e-12);
        }
    }
}

#[test]
fn single_key_gets_full_weight() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let (store, m) = mha(&mut rng, 4, 4, 4, 4, 2);
    let (q, k, v) = (random(&mut rng, [3, 4]), random(&mut rng, [1, 4]), random(&mut rng, [1, 4]));
    let tape = Tape::new();
    let p = store.bind(&tape);
    let a = m.forward(&p, &tape.constant(&q), &tape.constant(&k), &tape.constant(&v)).unwrap();
    assert!(a.map.data().iter().all(|&w| w == 1.0));
    let vp = linear_loop(v.data(), 1, store.get(m.wv.w), store.get(m.wv.b));
    let expect = linear_loop(&vp, 1, store.get(m.wo.w), store.get(m.wo.b));
    for row in a.out.value().chunks(4) {
        for (x, y) in row.iter().zip(&expect) {
            assert!((x - y).abs() < 1e-14);
        }
    }
}

#[test]
fn zero_logits_are_uniform() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (mut store, m) = mha(&mut rng, 4, 4, 4, 4, 2);
    for id in [m.wq.w, m.wq.b] {
        store.get_mut(id).data_mut().fill(0.0);
    }
    let (q, k, v) = (random(&mut rng, [2, 4]), random(&mut rng, [5, 4]), random(&mut rng, [5, 4]));
    let tape = Tape::new();
    let p = store.bind(&tape);
    let a = m.forward(&p, &tape.constant(&q), &tape.constant(&k), &tape.constant(&v)).unwrap();
    for &w in a.map.data() {
        assert!((w - 0.2).abs() < 1e-15);
    }
}

#[test]
fn rejects_mismatched_keys_and_values() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let (store, m) = mha(&mut rng, 4, 4, 4, 4, 2);
    let tape = Tape::new();
    let p = store.bind(&tape);
    let (q, k, v) = (random(&mut rng, [2, 4]), random(&mut rng, [5, 4]), random(&mut rng, [4, 4]));
    assert!(m.forward(&p, &tape.constant(&q), &tape.constant(&k), &tape.constant(&v)).is_err());
}

proptest! {
    #[test]
    fn rows_sum_to_one_and_keys_permute(seed in any::<u64>(), n_k in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (store, m) = mha(&mut rng, 4, 4, 4, 4, 2);
        let (q, k, v) = (random(&mut rng, [3, 4]), random(&mut rng, [n_k, 4]), random(&mut rng, [n_k, 4]));
        let tape = Tape::new();
        let p = store.bind(&tape);
        let a = m.forward(&p, &tape.constant(&q), &tape.constant(&k), &tape.constant(&v)).unwrap();
        for row in a.map.data().chunks(n_k) {
            prop_assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
        }
        let perm: Vec<usize> = (0..n_k).rev().collect();
        let kp = tape.constant(&k).select_rows(&perm).unwrap();
        let vp = tape.constant(&v).select_rows(&perm).unwrap();
        let b = m.forward(&p, &tape.constant(&q), &kp, &vp).unwrap();
        for i in 0..3 {
            for (j, &pj) in perm.iter().enumerate() {
                prop_assert!((b.map.data()[i * n_k + j] - a.map.data()[i * n_k + pj]).abs() < 1e-12);
            }
        }
        for (x, y) in a.out.value().iter().zip(b.out.value().iter()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }
}

fn boxes(rng: &mut ChaCha8Rng, n: usize) -> Tensor {
    Tensor::from_fn([n, 4], |k| if k % 4 < 2 { rng.random_range(0.2..0.8) } else { rng.random_range(0.05..0.5) })
}

#[test]
fn unit_ratio_modulation_is_plain_code() {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let d = 16;
    let b = boxes(&mut rng, 5);
    let tape = Tape::new();
    let bv = tape.constant(&b);
    let [px, py, _, _] = box_codes(&bv, d).unwrap();
    let wh = bv.narrow(1, 2, 2).unwrap();
    let p = box_modulate_with_ref(&px, &py, &bv, &wh).unwrap();
    for (i, row) in p.value().chunks(d).enumerate() {
        let mut plain = sine_code(b.data()[i * 4], d / 2);
        plain.extend(sine_code(b.data()[i * 4 + 1], d / 2));
        assert_eq!(row, plain.as_slice());
    }
}

#[test]
fn doubling_reference_doubles_each_half() {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let d = 8;
    let b = boxes(&mut rng, 3);
    let r = Tensor::from_fn([3, 2], |_| rng.random_range(0.1..1.9));
    let tape = Tape::new();
    let bv = tape.constant(&b);
    let [px, py, _, _] = box_codes(&bv, d).unwrap();
    let base = box_modulate_with_ref(&px, &py, &bv, &tape.constant(&r)).unwrap().value();
    for half in 0..2 {
        let mut r2 = r.clone();
        for i in 0..3 {
            r2.data_mut()[i * 2 + half] *= 2.0;
        }
        let p = box_modulate_with_ref(&px, &py, &bv, &tape.constant(&r2)).unwrap().value();
        for i in 0..3 {
            for c in 0..d {
                let factor = if c / (d / 2) == half { 2.0 } else { 1.0 };
                assert_eq!(p[i * d + c], base[i * d + c] * factor);
            }
        }
    }
}

#[test]
fn modulation_gradients() {
    let mut worst: f64 = 0.0;
    for seed in 0..20 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let modulator = BoxModulator::new(&mut store, "m", 8, &mut rng, 1.0);
        let mut inputs = vec![boxes(&mut rng, 3), random(&mut rng, [3, 8])];
        inputs.extend(store.iter().map(|(_, _, t)| t.clone()));
        let proj = random(&mut rng, [3, 8]);
        let r = gradcheck(
            |tape, v| {
                let p = Bound::from_vars(v[2..].to_vec());
                let out = modulator.forward(&p, &v[0], &v[1]).expect("modulation");
                Ok(out.mul(&tape.constant(&proj))?.sum())
            },
            &inputs,
        )
        .unwrap();
        worst = worst.max(r.max_rel_error);
    }
    assert!(worst < 1e-5, "{worst}");
}

#[test]
fn grid_embedding_is_deterministic() {
    let a = positional_embed_3d(2, 3, 4, 12);
    assert_eq!(a, positional_embed_3d(2, 3, 4, 12));
    assert_eq!(a.shape(), &[24, 12]);
    assert!(a.data().iter().all(|v| v.abs() <= 1.0));
}

#[test]
fn grid_embedding_rows_are_distinct() {
    let e = positional_embed_3d(5, 6, 7, 12);
    let rows: Vec<&[f64]> = e.data().chunks(12).collect();
    for i in 0..rows.len() {
        for j in i + 1..rows.len() {
            let d = rows[i].iter().zip(rows[j]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
            assert!(d > 1e-3, "rows {i} and {j}");
        }
    }
    // every axis code separates all cell centers up to 32 cells, so rows
    // of any grid up to 32³ differ
    for n in 1..=32 {
        let codes: Vec<Vec<f64>> = (0..n).map(|j| sine_code((j as f64 + 0.5) / n as f64, 4)).collect();
        for i in 0..n {
            for j in i + 1..n {
                let d = codes[i].iter().zip(&codes[j]).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max);
                assert!(d > 1e-3, "axis of {n} cells, {i} vs {j}");
            }
        }
    }
}
