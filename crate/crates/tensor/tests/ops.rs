use cqvad_tensor::{Tape, Tensor, TensorError, ZERO_INDEX};

fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
    a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
}

#[test]
fn matmul_examples() {
    let tape = Tape::new();
    let m = Tensor::new([3, 3], vec![1.0, -2.0, 3.5, 0.0, 4.0, 5.0, -1.0, 2.0, 9.0]).unwrap();
    let i = tape.constant(&Tensor::eye(3));
    let vm = tape.constant(&m);
    assert_eq!(&*i.matmul(&vm).unwrap().value(), m.data());

    let a = tape.constant(&Tensor::new([1, 2], vec![1.0, 2.0]).unwrap());
    let b = tape.constant(&Tensor::new([2, 1], vec![3.0, 4.0]).unwrap());
    let c = a.matmul(&b).unwrap();
    assert_eq!(c.shape(), vec![1, 1]);
    assert_eq!(c.item(), 11.0);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros([2, 3]));
    let b = tape.constant(&Tensor::zeros([2, 3]));
    match a.matmul(&b) {
        Err(TensorError::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn softmax_examples() {
    let tape = Tape::new();
    let u = tape.constant(&Tensor::full([5], 0.7));
    assert!(close(&u.softmax(0).unwrap().value(), &[0.2; 5], 1e-15));

    let x = tape.constant(&Tensor::new([2], vec![0.0, 3f64.ln()]).unwrap());
    assert!(close(&x.softmax(0).unwrap().value(), &[0.25, 0.75], 1e-15));

    let base = Tensor::new([2, 3], vec![0.1, -2.0, 0.5, 3.0, 1.0, -1.0]).unwrap();
    let shifted = Tensor::from_fn([2, 3], |i| base.data()[i] + 123.0);
    let a = tape.constant(&base).softmax(1).unwrap();
    let b = tape.constant(&shifted).softmax(1).unwrap();
    assert!(close(&a.value(), &b.value(), 1e-14));
}

#[test]
fn elementwise_examples() {
    let tape = Tape::new();
    assert_eq!(tape.scalar(0.0).sigmoid().item(), 0.5);
    let ln = tape.constant(&Tensor::full([2, 5], 3.25)).layer_norm(1e-5).unwrap();
    assert!(ln.value().iter().all(|&v| v == 0.0));
    let m = tape.constant(&Tensor::full([3, 4], 1.0)).mean_axis(1).unwrap();
    assert_eq!(&*m.value(), &[1.0, 1.0, 1.0]);
}

#[test]
fn broadcast_incompatibility_is_a_dimension_error() {
    let tape = Tape::new();
    let a = tape.constant(&Tensor::zeros([2, 3]));
    let b = tape.constant(&Tensor::zeros([2]));
    assert!(matches!(a.add(&b), Err(TensorError::Shape { .. })));
    let c = tape.constant(&Tensor::zeros([3]));
    assert_eq!(a.add(&c).unwrap().shape(), vec![2, 3]);
}

#[test]
fn trilinear_on_nodes_and_midpoints() {
    let tape = Tape::new();
    let grid = (2, 3, 2);
    let v = Tensor::from_fn([12, 2], |i| (i as f64 * 0.37).sin());
    let value = tape.constant(&v);
    let loc = tape.constant(&Tensor::new([2, 3], vec![1.0, 2.0, 1.0, 0.0, 1.5, 0.0]).unwrap());
    let out = value.trilinear_sample(&loc, grid).unwrap();
    let o = out.value();
    let row = |t: usize, h: usize, w: usize| (t * 3 + h) * 2 + w;
    assert_eq!(&o[0..2], &v.data()[row(1, 2, 1) * 2..row(1, 2, 1) * 2 + 2]);
    for c in 0..2 {
        let mean = 0.5 * (v.data()[row(0, 1, 0) * 2 + c] + v.data()[row(0, 2, 0) * 2 + c]);
        assert!((o[2 + c] - mean).abs() < 1e-15);
    }
}

#[test]
fn gather_zero_index() {
    let tape = Tape::new();
    let x = tape.constant(&Tensor::new([3], vec![1.0, 2.0, 3.0]).unwrap());
    let g = x.gather(&[2, ZERO_INDEX, 0, 2], [4]).unwrap();
    assert_eq!(&*g.value(), &[3.0, 0.0, 1.0, 3.0]);
    assert!(x.gather(&[3], [1]).is_err());
}

#[test]
fn logit_shift_zero_delta_is_exact() {
    let tape = Tape::new();
    let base = Tensor::new([4], vec![0.2, 0.5, 0.731, 0.99]).unwrap();
    let a = tape.constant(&base);
    let d = tape.constant(&Tensor::zeros([4]));
    assert_eq!(&*d.logit_shift(&a, 1e-4).unwrap().value(), base.data());
}
