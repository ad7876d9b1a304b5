use super::gradcheck::check_gradients;
use super::*;
use crate::rng::{streams, RngStream};
use crate::Tensor;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::from_f64(shape.to_vec(), data).unwrap()
}

fn random(shape: &[usize], rng: &mut RngStream) -> Tensor {
    Tensor::from_fn(shape.to_vec(), |_| rng.uniform_in(-1.0, 1.0))
}

fn naive_matmul(a: &Tensor, b: &Tensor) -> Tensor {
    let (m, k, n) = (a.shape()[0], a.shape()[1], b.shape()[1]);
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for j in 0..n {
            for p in 0..k {
                out[i * n + j] += a.at(&[i, p]) * b.at(&[p, j]);
            }
        }
    }
    Tensor::new([m, n], out).unwrap()
}

#[test]
fn matmul_identity_and_dot() {
    let tape = Tape::<f64>::inference();
    let eye = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
    let b = tape.constant(t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]));
    assert_eq!(eye.matmul(b).unwrap().value().data(), &[2.0, 3.0, 4.0, 5.0]);

    let row = tape.constant(t(&[1, 2], &[1.0, 2.0]));
    let col = tape.constant(t(&[2, 1], &[3.0, 4.0]));
    assert_eq!(row.matmul(col).unwrap().value().data(), &[11.0]);
}

#[test]
fn matmul_matches_triple_loop_oracle() {
    let mut rng = RngStream::new(11, streams::INIT);
    // Small integers make every summation order exact.
    let a = Tensor::from_fn([4, 5], |_| (rng.below(19) as f64) - 9.0);
    let b = Tensor::from_fn([5, 3], |_| (rng.below(19) as f64) - 9.0);
    let tape = Tape::<f64>::inference();
    let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    assert_eq!(*c.value(), naive_matmul(&a, &b));

    let a = random(&[7, 9], &mut rng);
    let b = random(&[9, 6], &mut rng);
    let c = tape.constant(a.clone()).matmul(tape.constant(b.clone())).unwrap();
    assert!(c.value().max_abs_diff(&naive_matmul(&a, &b)) < 1e-12);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::<f64>::inference();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([4, 2]));
    let err = a.matmul(b).unwrap_err();
    let msg = err.to_string();
    assert!(msg.contains("[2, 3]") && msg.contains("[4, 2]"), "{msg}");
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f64>::inference();
    let s = tape.constant(t(&[4], &[0.0; 4])).softmax(0).unwrap();
    assert_eq!(s.value().data(), &[0.25; 4]);

    let s = tape.constant(t(&[2], &[0.0, 3f64.ln()])).softmax(0).unwrap();
    let d = s.value();
    assert!((d.data()[0] - 0.25).abs() < 1e-15 && (d.data()[1] - 0.75).abs() < 1e-15);

    let s = tape.constant(t(&[2], &[1000.0, 1000.0])).softmax(0).unwrap();
    assert_eq!(s.value().data(), &[0.5, 0.5]);
}

#[test]
fn softmax_slices_sum_to_one_on_any_axis() {
    let mut rng = RngStream::new(5, streams::INIT);
    let x = Tensor::from_fn([3, 4, 5], |_| rng.uniform_in(-20.0, 20.0));
    let tape = Tape::<f64>::inference();
    for axis in 0..3 {
        let y = tape.constant(x.clone()).softmax(axis).unwrap();
        let sums = y.sum_axis(axis).unwrap().value();
        assert!(sums.data().iter().all(|s| (s - 1.0).abs() < 1e-12));
        assert!(y.value().data().iter().all(|&v| v >= 0.0));
    }
}

#[test]
fn dropout_degenerate_cases() {
    let mut rng = RngStream::new(1, streams::DROPOUT);
    let tape = Tape::<f64>::inference();
    let x = tape.constant(t(&[4], &[1.0, -2.0, 3.0, 4.0]));
    assert_eq!(dropout(x, 0.0, &mut rng, true).unwrap().value().data(), x.value().data());
    assert_eq!(dropout(x, 0.5, &mut rng, false).unwrap().value().data(), x.value().data());
    assert_eq!(dropout(x, 1.0, &mut rng, true).unwrap_err().kind(), "config");
}

#[test]
fn dropout_law_of_large_numbers() {
    let mut rng = RngStream::new(2, streams::DROPOUT);
    let tape = Tape::<f64>::inference();
    let n = 100_000;
    let y = dropout(tape.constant(Tensor::ones([n])), 0.5, &mut rng, true).unwrap().value();
    let mean = y.sum() / n as f64;
    let zeros = y.data().iter().filter(|&&v| v == 0.0).count() as f64 / n as f64;
    assert!((mean - 1.0).abs() < 0.02, "mean {mean}");
    assert!((zeros - 0.5).abs() < 0.02, "zero fraction {zeros}");
}

#[test]
fn backward_simple_closed_forms() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
    let grads = tape.backward(x.sum()).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

    let tape = Tape::new();
    let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]));
    let grads = tape.backward(x.mul(x).unwrap().sum()).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
}

#[test]
fn backward_requires_scalar_loss() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    assert_eq!(tape.backward(x).unwrap_err().kind(), "non-scalar-loss");
}

#[test]
fn consumed_twice_accumulates() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[1], &[3.0]));
    let y = x.add(x).unwrap();
    let grads = tape.backward(y.sum()).unwrap();
    assert_eq!(grads.get(x).unwrap().data(), &[2.0]);
}

#[test]
fn constants_receive_no_gradient() {
    let tape = Tape::new();
    let x = tape.leaf(t(&[2], &[1.0, 2.0]));
    let c = tape.constant(t(&[2], &[3.0, 4.0]));
    let grads = tape.backward(x.mul(c).unwrap().sum()).unwrap();
    assert!(grads.get(c).is_none());
    assert_eq!(grads.get(x).unwrap().data(), &[3.0, 4.0]);
}

#[test]
#[should_panic(expected = "non-finite")]
fn finite_checks_catch_nan() {
    let tape = Tape::<f64>::inference().with_finite_checks();
    let x = tape.constant(t(&[1], &[0.0]));
    let _ = x.div(x);
}

// --- finite-difference checks, 5 random inputs per operation ---------------

const H: f64 = 1e-5;
const TOL: f64 = 1e-4;

fn fd<F>(shapes: &[&[usize]], f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> crate::Result<Var<'t, f64>>,
{
    for trial in 0..5u64 {
        let mut rng = RngStream::new(100 + trial, streams::INIT);
        let inputs: Vec<Tensor> = shapes.iter().map(|s| random(s, &mut rng)).collect();
        let report = check_gradients(&inputs, H, 1, &f).unwrap();
        assert!(report.passes(TOL), "trial {trial}: {report:?}");
    }
}

/// Weighted sum so every output element gets a distinct upstream gradient.
fn probe<'t>(y: Var<'t, f64>) -> crate::Result<Var<'t, f64>> {
    let shape = y.shape();
    let w = Tensor::from_fn(shape, |i| ((i as f64) * 0.7).sin() + 0.3);
    Ok(y.mul(y.tape().constant(w))?.sum())
}

#[test]
fn fd_elementwise_and_broadcast() {
    fd(&[&[3, 4], &[4]], |_, v| probe(v[0].add(v[1])?));
    fd(&[&[3, 4], &[3, 1]], |_, v| probe(v[0].sub(v[1])?));
    fd(&[&[3, 4], &[1, 4]], |_, v| probe(v[0].mul(v[1])?));
    fd(&[&[3, 4], &[3, 4]], |_, v| probe(v[0].div(v[1].square().add_scalar(0.5))?));
    fd(&[&[2, 3]], |_, v| probe(v[0].scale(-1.7).add_scalar(0.3)));
    fd(&[&[3]], |_, v| probe(v[0].broadcast_to(&[2, 3])?));
}

#[test]
fn fd_shape_ops() {
    fd(&[&[2, 3, 4]], |_, v| probe(v[0].permute(&[2, 0, 1])?));
    fd(&[&[2, 3, 4]], |_, v| probe(v[0].reshape(&[6, 4])?.t()?));
    fd(&[&[2, 3, 4]], |_, v| probe(v[0].sum_axis(1)?));
    fd(&[&[2, 3, 4]], |_, v| probe(v[0].mean_axis(2)?));
    fd(&[&[2, 3]], |_, v| Ok(v[0].mean()));
}

#[test]
fn fd_matmul_variants() {
    fd(&[&[3, 4], &[4, 5]], |_, v| probe(v[0].matmul(v[1])?));
    fd(&[&[3, 4], &[5, 4]], |_, v| probe(v[0].matmul_t(v[1])?));
    fd(&[&[2, 3, 4], &[2, 4, 2]], |_, v| probe(v[0].matmul(v[1])?));
    fd(&[&[2, 3, 4], &[2, 5, 4]], |_, v| probe(v[0].matmul_t(v[1])?));
}

#[test]
fn fd_nonlinearities() {
    fd(&[&[3, 5]], |_, v| probe(v[0].softmax(1)?));
    fd(&[&[3, 5]], |_, v| probe(v[0].softmax(0)?));
    fd(&[&[3, 5]], |_, v| probe(v[0].scale(3.0).gelu()));
    fd(&[&[3, 6]], |_, v| probe(v[0].layer_norm(1e-5)));
    fd(&[&[3, 4]], |_, v| probe(v[0].l2_norm()));
    // relu and clamp are checked away from their kinks
    fd(&[&[3, 4]], |_, v| probe(v[0].square().add_scalar(0.1).relu()));
    fd(&[&[3, 4]], |_, v| probe(v[0].square().clamp_min(-1.0)));
}

#[test]
fn fd_gather_scatter() {
    fd(&[&[4, 3]], |_, v| probe(v[0].gather_rows(&[2, 0, 2])?));
    fd(&[&[4, 3]], |_, v| probe(v[0].gather(&[11, 0, 5, 5])?));
    fd(&[&[2, 3], &[1, 3]], |tape, v| {
        probe(tape.scatter_rows(&[(v[0], vec![3, 1]), (v[1], vec![1])], 4)?)
    });
}

#[test]
fn fd_conv2d() {
    fd(&[&[2, 3, 5, 4], &[4, 3, 3, 3], &[4]], |_, v| probe(v[0].conv2d(v[1], v[2])?));
    fd(&[&[1, 2, 3, 3], &[1, 2, 1, 1], &[1]], |_, v| probe(v[0].conv2d(v[1], v[2])?));
}

#[test]
fn conv2d_matches_direct_oracle() {
    let mut rng = RngStream::new(8, streams::INIT);
    let x = random(&[2, 2, 4, 5], &mut rng);
    let w = random(&[3, 2, 3, 3], &mut rng);
    let b = random(&[3], &mut rng);
    let tape = Tape::<f64>::inference();
    let y = tape
        .constant(x.clone())
        .conv2d(tape.constant(w.clone()), tape.constant(b.clone()))
        .unwrap()
        .value();
    for n in 0..2 {
        for o in 0..3 {
            for i in 0..4 {
                for j in 0..5 {
                    let mut acc = b.data()[o];
                    for c in 0..2 {
                        for ki in 0..3 {
                            for kj in 0..3 {
                                let (si, sj) = (i as isize + ki as isize - 1, j as isize + kj as isize - 1);
                                if (0..4).contains(&si) && (0..5).contains(&sj) {
                                    acc += w.at(&[o, c, ki, kj]) * x.at(&[n, c, si as usize, sj as usize]);
                                }
                            }
                        }
                    }
                    assert!((y.at(&[n, o, i, j]) - acc).abs() < 1e-12);
                }
            }
        }
    }
}

#[test]
fn composite_graph_gradient() {
    // a small MLP with shared weights consumed twice
    fd(&[&[4, 3], &[3, 3], &[3]], |_, v| {
        let h = v[0].matmul(v[1])?.add(v[2])?.gelu();
        let h2 = h.matmul(v[1])?.layer_norm(1e-5);
        probe(h2.softmax(1)?)
    });
}

#[test]
fn forward_is_bit_deterministic() {
    let run = || {
        let mut rng = RngStream::new(77, streams::DROPOUT);
        let tape = Tape::<f64>::inference();
        let x = tape.constant(Tensor::from_fn([50, 8], |i| (i as f64 * 0.1).sin()));
        let y = dropout(x, 0.3, &mut rng, true).unwrap().softmax(1).unwrap();
        y.value().to_f64_vec()
    };
    let (a, b) = (run(), run());
    assert!(a.iter().zip(&b).all(|(x, y)| x.to_bits() == y.to_bits()));
}
