use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use tgtensor::layers::{Conv2d, Linear};
use tgtensor::{ParamStore, Tape, Tensor, TensorError};

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

#[test]
fn identity_graph_returns_input() {
    let mut tape = Tape::new();
    let x = t(&[2, 3], &[1.0, -2.0, 3.0, 0.5, 0.25, -7.0]);
    let v = tape.input(x.clone()).unwrap();
    assert_eq!(tape.value(v).unwrap(), &x);
    let g = tape.backward(v, None).unwrap();
    assert_eq!(g.wrt(v).unwrap(), &Tensor::full(vec![2, 3], 1.0));
}

#[test]
fn zero_kernel_conv_outputs_bias() {
    let mut tape = Tape::new();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = tape.input(Tensor::randn(vec![2, 3, 5, 5], 1.0, &mut rng)).unwrap();
    let w = tape.input(Tensor::zeros(vec![4, 3, 3, 3])).unwrap();
    let b = tape.input(t(&[4], &[0.5, -1.0, 2.0, 0.0])).unwrap();
    let y = tape.conv2d(x, w, Some(b), 1, 1).unwrap();
    let yv = tape.value(y).unwrap();
    assert_eq!(yv.shape(), [2, 4, 5, 5]);
    for (p, plane) in yv.data().chunks(25).enumerate() {
        let expect = [0.5, -1.0, 2.0, 0.0][p % 4];
        assert!(plane.iter().all(|&v| v == expect));
    }
}

#[test]
fn conv_matches_direct_sum() {
    // Direct 4-loop convolution as the reference path.
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let x = Tensor::randn(vec![1, 2, 5, 6], 1.0, &mut rng);
    let w = Tensor::randn(vec![3, 2, 3, 3], 1.0, &mut rng);
    for (stride, pad) in [(1, 1), (2, 1), (1, 0), (2, 0)] {
        let mut tape = Tape::new();
        let xv = tape.input(x.clone()).unwrap();
        let wv = tape.input(w.clone()).unwrap();
        let y = tape.conv2d(xv, wv, None, stride, pad).unwrap();
        let yv = tape.value(y).unwrap();
        let (ho, wo) = (yv.dim(2), yv.dim(3));
        for co in 0..3 {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut s = 0.0;
                    for ci in 0..2 {
                        for ky in 0..3 {
                            for kx in 0..3 {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy < 0 || ix < 0 || iy >= 5 || ix >= 6 {
                                    continue;
                                }
                                s += x.data()[(ci * 5 + iy as usize) * 6 + ix as usize]
                                    * w.data()[((co * 2 + ci) * 3 + ky) * 3 + kx];
                            }
                        }
                    }
                    let got = yv.data()[(co * ho + oy) * wo + ox];
                    assert!((got - s).abs() < 1e-12, "stride {stride} pad {pad}");
                }
            }
        }
    }
}

#[test]
fn two_layer_perceptron_matches_hand_arithmetic() {
    // y = W2 * softplus(W1 x + b1) + b2 with small fixed weights.
    let mut store = ParamStore::new();
    let w1 = store.insert("w1", t(&[2, 2], &[1.0, -1.0, 0.5, 2.0]));
    let b1 = store.insert("b1", t(&[2], &[0.0, -1.0]));
    let w2 = store.insert("w2", t(&[1, 2], &[3.0, -0.5]));
    let b2 = store.insert("b2", t(&[1], &[0.25]));
    let mut tape = Tape::new();
    let x = tape.input(t(&[1, 2], &[0.3, -0.2])).unwrap();
    let (w1v, b1v) = (tape.param(&store, w1), tape.param(&store, b1));
    let h = tape.linear(x, w1v, Some(b1v)).unwrap();
    let h = tape.softplus(h).unwrap();
    let (w2v, b2v) = (tape.param(&store, w2), tape.param(&store, b2));
    let y = tape.linear(h, w2v, Some(b2v)).unwrap();

    let h0: f64 = 1.0 * 0.3 + -1.0 * -0.2;
    let h1: f64 = 0.5 * 0.3 + 2.0 * -0.2 - 1.0;
    let sp = |v: f64| (1.0 + v.exp()).ln();
    let expect = 3.0 * sp(h0) - 0.5 * sp(h1) + 0.25;
    assert!((tape.value(y).unwrap().data()[0] - expect).abs() < 1e-12);
}

#[test]
fn linear_input_gradient_is_transpose_product() {
    let w = t(&[3, 2], &[1.0, 2.0, -1.0, 0.5, 4.0, -3.0]);
    let mut tape = Tape::new();
    let x = tape.input(t(&[1, 2], &[0.7, -1.1])).unwrap();
    let wv = tape.input(w.clone()).unwrap();
    let y = tape.linear(x, wv, None).unwrap();
    let gy = t(&[1, 3], &[0.2, -1.0, 3.0]);
    let g = tape.backward(y, Some(gy.clone())).unwrap();
    let gx = g.wrt(x).unwrap();
    for j in 0..2 {
        let expect: f64 = (0..3).map(|i| w.data()[i * 2 + j] * gy.data()[i]).sum();
        assert!((gx.data()[j] - expect).abs() < 1e-14);
    }
}

#[test]
fn sum_of_inputs_broadcasts_output_gradient() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::full(vec![2, 2], 1.5)).unwrap();
    let b = tape.input(Tensor::full(vec![2, 2], -0.5)).unwrap();
    let s = tape.add(a, b).unwrap();
    let total = tape.sum(s).unwrap();
    let g = tape.backward(total, Some(Tensor::scalar(3.0))).unwrap();
    assert_eq!(g.wrt(a).unwrap(), &Tensor::full(vec![2, 2], 3.0));
    assert_eq!(g.wrt(b).unwrap(), &Tensor::full(vec![2, 2], 3.0));
}

#[test]
fn backward_after_reset_is_stale() {
    let mut tape = Tape::new();
    let x = tape.input(Tensor::scalar(1.0)).unwrap();
    tape.reset();
    assert!(matches!(tape.backward(x, None), Err(TensorError::StaleGraph)));
    assert!(matches!(tape.value(x), Err(TensorError::StaleGraph)));
}

#[test]
fn shape_mismatch_names_node() {
    let mut tape = Tape::new();
    let a = tape.input(Tensor::zeros(vec![2, 3])).unwrap();
    let b = tape.input(Tensor::zeros(vec![3, 2])).unwrap();
    match tape.add(a, b) {
        Err(TensorError::Shape { node, op, .. }) => {
            assert_eq!(node, 2);
            assert_eq!(op, "add");
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn non_finite_inputs_rejected() {
    let mut tape = Tape::new();
    assert!(matches!(tape.input(Tensor::scalar(f64::NAN)), Err(TensorError::NonFinite(_))));
}

#[test]
fn log_sigmoid_is_nonpositive_and_stable() {
    let mut tape = Tape::new();
    let x = tape.input(t(&[4], &[-800.0, -1.0, 3.0, 800.0])).unwrap();
    let y = tape.log_sigmoid(x).unwrap();
    let yv = tape.value(y).unwrap();
    assert!(yv.data().iter().all(|&v| v <= 0.0 && v.is_finite()));
    assert!((yv.data()[0] + 800.0).abs() < 1e-9);
    assert_eq!(yv.data()[3], 0.0);
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut store = ParamStore::new();
        let conv = Conv2d::new(&mut store, "c", 2, 4, 3, 2, &mut rng);
        let fc = Linear::new(&mut store, "fc", 4, 1, &mut rng);
        let mut tape = Tape::new();
        let x = tape.input(Tensor::randn(vec![3, 2, 8, 8], 1.0, &mut rng)).unwrap();
        let h = conv.forward(&mut tape, &store, x).unwrap();
        let h = tape.silu(h).unwrap();
        let h = tape.global_avg_pool(h).unwrap();
        let y = fc.forward(&mut tape, &store, h).unwrap();
        tape.value(y).unwrap().clone()
    };
    let a = run();
    let b = run();
    assert!(a.data().iter().zip(b.data()).all(|(p, q)| p.to_bits() == q.to_bits()));
}
