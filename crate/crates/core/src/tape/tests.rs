use super::*;
use crate::gradcheck::grad_check;
use alloc::format;
use approx::assert_abs_diff_eq;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn t(shape: &[usize], data: &[f64]) -> Tensor {
    Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
}

fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    signed_tensor(rng, shape, true)
}

fn signed_tensor(rng: &mut ChaCha8Rng, shape: &[usize], mixed_signs: bool) -> Tensor {
    let n = shape.iter().product();
    // Keep entries away from zero so relu kinks and tiny gradients are avoided.
    let data = (0..n)
        .map(|_| {
            let m: f64 = rng.random_range(0.2..1.5);
            if !mixed_signs || rng.random::<bool>() {
                m
            } else {
                -m
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).unwrap()
}

/// Weighted-sum probe: loss = Σ c_k · out_k with fixed positive weights, so
/// every output entry reaches the loss with an O(1) coefficient.
fn probe(tape: &mut Tape, out: &Tensor) -> Tensor {
    let c: Vec<f64> = (0..out.len()).map(|k| 0.5 + (k % 7) as f64 * 0.25).collect();
    let c = Tensor::new(out.shape().to_vec(), c).unwrap();
    let w = tape.mul(out, &c).unwrap();
    tape.sum(&w)
}

#[test]
fn matmul_identity() {
    let a = t(&[3, 3], &[1., 2., 3., 4., 5., 6., 7., 8., 9.]);
    let i3 = t(&[3, 3], &[1., 0., 0., 0., 1., 0., 0., 0., 1.]);
    let mut tape = Tape::inference();
    assert_eq!(tape.matmul(&i3, &a).unwrap(), a);
}

#[test]
fn tanh_of_zero() {
    let mut tape = Tape::inference();
    let z = Tensor::zeros(vec![2, 4]);
    assert_eq!(tape.tanh(&z), z);
}

#[test]
fn concat_along_last_axis() {
    let mut tape = Tape::inference();
    let out = tape.concat_last(&[&Tensor::from_vec(vec![1., 2.]), &Tensor::from_vec(vec![3.])]).unwrap();
    assert_eq!(out.data(), &[1., 2., 3.]);
    let rows = tape
        .concat_rows(&[&t(&[1, 2], &[1., 2.]), &t(&[2, 2], &[3., 4., 5., 6.])])
        .unwrap();
    assert_eq!(rows.shape(), &[3, 2]);
    assert_eq!(rows.data(), &[1., 2., 3., 4., 5., 6.]);
}

#[test]
fn shape_mismatch_names_both_shapes() {
    let mut tape = Tape::inference();
    let err = tape
        .add(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![3, 2]))
        .unwrap_err();
    assert_eq!(
        err,
        Error::ShapeMismatch {
            op: "add",
            left: vec![2, 3],
            right: vec![3, 2]
        }
    );
    let msg = format!("{err}");
    assert!(msg.contains("[2, 3]") && msg.contains("[3, 2]"), "{msg}");
    assert!(tape.matmul(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![2, 3])).is_err());
    assert!(tape.linear(&Tensor::zeros(vec![2, 3]), &Tensor::zeros(vec![3, 4]), &Tensor::zeros(vec![3])).is_err());
}

#[test]
fn only_scalar_broadcasting() {
    let mut tape = Tape::inference();
    let x = t(&[2, 2], &[1., 2., 3., 4.]);
    let y = tape.mul(&x, &Tensor::scalar(2.0)).unwrap();
    assert_eq!(y.data(), &[2., 4., 6., 8.]);
    let y = tape.sub(&Tensor::scalar(1.0), &x).unwrap();
    assert_eq!(y.data(), &[0., -1., -2., -3.]);
    assert!(tape.add(&x, &Tensor::from_vec(vec![1., 2.])).is_err());
}

#[test]
fn tensor_rejects_bad_shape() {
    assert!(Tensor::new(vec![2, 2], vec![1.0; 3]).is_err());
    assert!(Tensor::new(vec![0, 2], vec![]).is_err());
}

#[test]
fn layer_norm_constant_vector_is_zero() {
    let mut tape = Tape::inference();
    let x = Tensor::full(vec![1, 5], 2.5);
    let y = tape
        .layer_norm(&x, &Tensor::full(vec![5], 1.0), &Tensor::zeros(vec![5]), 1e-5)
        .unwrap();
    assert!(y.data().iter().all(|&v| v == 0.0));
}

#[test]
fn layer_norm_symmetric_pair() {
    let mut tape = Tape::inference();
    let y = tape
        .layer_norm(&Tensor::from_vec(vec![1., 3.]), &Tensor::full(vec![2], 1.0), &Tensor::zeros(vec![2]), 1e-14)
        .unwrap();
    assert_abs_diff_eq!(y.data()[0], -1.0, epsilon = 1e-12);
    assert_abs_diff_eq!(y.data()[1], 1.0, epsilon = 1e-12);
}

#[test]
fn layer_norm_random_rows_are_standardized() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = rand_tensor(&mut rng, &[6, 16]);
    let mut tape = Tape::inference();
    let y = tape
        .layer_norm(&x, &Tensor::full(vec![16], 1.0), &Tensor::zeros(vec![16]), 1e-300)
        .unwrap();
    for r in 0..6 {
        let row = y.row(r);
        let mean = row.iter().sum::<f64>() / 16.0;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / 16.0;
        assert_abs_diff_eq!(mean, 0.0, epsilon = 1e-12);
        assert_abs_diff_eq!(var, 1.0, epsilon = 1e-12);
    }
}

#[test]
fn layer_norm_rejects_non_positive_eps() {
    let mut tape = Tape::inference();
    let x = Tensor::from_vec(vec![1., 2.]);
    let g = Tensor::full(vec![2], 1.0);
    let b = Tensor::zeros(vec![2]);
    assert!(tape.layer_norm(&x, &g, &b, 0.0).is_err());
    assert!(tape.layer_norm(&x, &g, &b, -1.0).is_err());
    assert!(tape.layer_norm(&x, &Tensor::full(vec![3], 1.0), &b, 1e-5).is_err());
}

#[test]
fn gradient_of_sum_is_ones() {
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::zeros(vec![3, 2]));
    let loss = tape.sum(&p);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&p), vec![1.0; 6]);
}

#[test]
fn gradient_of_mean_square() {
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::from_vec(vec![2.0]));
    let sq = tape.mul(&p, &p).unwrap();
    let loss = tape.mean(&sq);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&p), vec![4.0]);
}

#[test]
fn unused_parameter_has_zero_gradient() {
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
    let q = tape.leaf(&Tensor::from_vec(vec![3.0]));
    let loss = tape.sum(&p);
    let g = tape.backward(&loss).unwrap();
    assert!(g.get(&q).is_none());
    assert_eq!(g.wrt(&q), vec![0.0]);
}

#[test]
fn non_scalar_loss_rejected() {
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
    let y = tape.scale(&p, 2.0);
    assert!(matches!(tape.backward(&y), Err(Error::NonScalarLoss(_))));
    let c = Tensor::scalar(1.0);
    assert!(matches!(tape.backward(&c), Err(Error::NotRecorded)));
}

#[test]
fn shared_parameter_accumulates() {
    // loss = Σ (p ⊙ p + 3 p) → ∂/∂p = 2p + 3, both uses contribute.
    let mut tape = Tape::new();
    let p = tape.leaf(&Tensor::from_vec(vec![1.0, -2.0, 0.5]));
    let sq = tape.mul(&p, &p).unwrap();
    let lin = tape.scale(&p, 3.0);
    let s = tape.add(&sq, &lin).unwrap();
    let loss = tape.sum(&s);
    let g = tape.backward(&loss).unwrap();
    assert_eq!(g.wrt(&p), vec![5.0, -1.0, 4.0]);
}

#[test]
fn inference_tape_records_nothing() {
    let mut tape = Tape::inference();
    let p = tape.leaf(&Tensor::from_vec(vec![1.0, 2.0]));
    let y = tape.tanh(&p);
    assert!(!y.is_recorded());
    assert!(tape.is_empty());
}

#[test]
fn replay_is_bitwise_identical() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = rand_tensor(&mut rng, &[4, 6]);
    let w = rand_tensor(&mut rng, &[6, 3]);
    let b = rand_tensor(&mut rng, &[3]);
    let run = || {
        let mut tape = Tape::new();
        let (x, w, b) = (tape.leaf(&x), tape.leaf(&w), tape.leaf(&b));
        let h = tape.linear(&x, &w, &b).unwrap();
        let h = tape.tanh(&h);
        let loss = tape.mean(&h);
        let g = tape.backward(&loss).unwrap();
        (h.to_vec(), g.wrt(&w))
    };
    let (a, ga) = run();
    let (b2, gb) = run();
    assert!(a.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    assert!(ga.iter().zip(&gb).all(|(x, y)| x.to_bits() == y.to_bits()));
}

#[test]
fn mlp_gradient_matches_finite_differences() {
    let mut rng = ChaCha8Rng::seed_from_u64(99);
    let x = rand_tensor(&mut rng, &[5, 4]);
    let params = [
        rand_tensor(&mut rng, &[4, 6]),
        rand_tensor(&mut rng, &[6]),
        rand_tensor(&mut rng, &[6, 2]),
        rand_tensor(&mut rng, &[2]),
    ];
    let r = grad_check(
        |tape, p| {
            let h = tape.linear(&x, &p[0], &p[1])?;
            let h = tape.tanh(&h);
            let y = tape.linear(&h, &p[2], &p[3])?;
            let sq = tape.mul(&y, &y)?;
            Ok(tape.mean(&sq))
        },
        &params,
        1e-6,
    )
    .unwrap();
    assert!(r.max_rel_err < 1e-6, "{r:?}");
}

/// Every primitive, 100 seeded draws each, checked against central differences.
/// Names starting with `+` draw positive operands: their gradients are sums of
/// products, and a mixed-sign draw can land arbitrarily close to zero where the
/// relative error is dominated by difference-quotient rounding.
#[test]
fn primitives_match_finite_differences() {
    type Case = fn(&mut Tape, &[Tensor]) -> Result<Tensor>;
    let cases: &[(&str, &[&[usize]], Case)] = &[
        ("add", &[&[3, 2], &[3, 2]], |t, p| t.add(&p[0], &p[1])),
        ("sub", &[&[3, 2], &[3, 2]], |t, p| t.sub(&p[0], &p[1])),
        ("mul", &[&[3, 2], &[3, 2]], |t, p| t.mul(&p[0], &p[1])),
        ("mul_scalar", &[&[3, 2], &[]], |t, p| t.mul(&p[0], &p[1])),
        ("add_scalar", &[&[], &[4]], |t, p| t.add(&p[0], &p[1])),
        ("scale", &[&[2, 3]], |t, p| Ok(t.scale(&p[0], -1.7))),
        ("+matmul", &[&[3, 4], &[4, 2]], |t, p| t.matmul(&p[0], &p[1])),
        ("+linear", &[&[3, 4], &[4, 2], &[2]], |t, p| t.linear(&p[0], &p[1], &p[2])),
        ("tanh", &[&[2, 3]], |t, p| Ok(t.tanh(&p[0]))),
        ("relu", &[&[2, 3]], |t, p| Ok(t.relu(&p[0]))),
        ("concat_last", &[&[2, 3], &[2, 1]], |t, p| t.concat_last(&[&p[0], &p[1]])),
        ("concat_rows", &[&[2, 3], &[1, 3]], |t, p| t.concat_rows(&[&p[0], &p[1]])),
        ("sum", &[&[2, 3]], |t, p| Ok(t.sum(&p[0]))),
        ("mean", &[&[2, 3]], |t, p| Ok(t.mean(&p[0]))),
        ("row_scale", &[&[3, 2]], |t, p| t.row_scale(&p[0], &[0.5, -2.0, 1.25])),
        ("row_combine", &[&[3, 2]], |t, p| {
            let mut plan = RowPlan::new(2);
            plan.push(0, 2, 0.75);
            plan.push(0, 0, -1.5);
            plan.push(1, 2, 2.0);
            t.row_combine(&p[0], plan)
        }),
        ("reshape", &[&[2, 3]], |t, p| t.reshape(&p[0], &[3, 2])),
        ("layer_norm", &[&[3, 4], &[4], &[4]], |t, p| t.layer_norm(&p[0], &p[1], &p[2], 1e-5)),
    ];
    for (name, shapes, f) in cases {
        let mut worst = 0.0f64;
        for seed in 0..100u64 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mixed = !name.starts_with('+');
            let params: Vec<Tensor> = shapes.iter().map(|s| signed_tensor(&mut rng, s, mixed)).collect();
            let r = grad_check(
                |tape, p| {
                    let out = f(tape, p)?;
                    // Square the output before the probe so linear ops still
                    // have input-dependent gradients.
                    let sq = tape.mul(&out, &out)?;
                    let l1 = probe(tape, &sq);
                    let l2 = probe(tape, &out);
                    tape.add(&l1, &l2)
                },
                &params,
                1e-6,
            )
            .unwrap();
            worst = worst.max(r.max_rel_err);
        }
        assert!(worst < 1e-6, "{name}: max relative error {worst:e}");
    }
}
