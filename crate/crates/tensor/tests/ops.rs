use clim_tensor::gradcheck::{check_gradients, GradCheck};
use clim_tensor::{Result, Tape, Tensor, TensorError, Var};
use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
    Tensor::from_f64(shape, data).unwrap()
}

fn assert_grad<F>(inputs: &[Tensor<f64>], tol: f64, f: F)
where
    F: for<'t> Fn(&'t Tape<f64>, &[Var<'t, f64>]) -> Result<Var<'t, f64>>,
{
    let report = check_gradients(inputs, f, &GradCheck::default(), &mut rng(11)).unwrap();
    assert!(
        report.max_rel_err < tol,
        "rel err {} >= {tol}, worst {:?}",
        report.max_rel_err,
        report.worst
    );
}

#[test]
fn matmul_identity_and_hand_case() {
    let tape = Tape::<f64>::new();
    let x = Tensor::randn([3, 4], 1.0, &mut rng(1));
    let i = tape.constant(Tensor::eye(3));
    let xv = tape.constant(x.clone());
    assert_eq!(i.matmul(xv).unwrap().to_tensor(), x);

    let a = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
    let b = tape.constant(t(&[2, 1], &[1.0, 1.0]));
    let c = a.matmul(b).unwrap();
    assert_eq!(c.shape(), vec![2, 1]);
    assert_eq!(c.value().data(), &[3.0, 7.0]);
}

#[test]
fn matmul_shape_error_names_both_shapes() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::zeros([2, 3]));
    let b = tape.constant(Tensor::zeros([4, 5]));
    match a.matmul(b) {
        Err(TensorError::ShapeMismatch { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![4, 5]);
        }
        other => panic!("expected shape mismatch, got {other:?}"),
    }
}

#[test]
fn matmul_gradient() {
    let mut r = rng(2);
    let a = Tensor::randn([4, 5], 1.0, &mut r);
    let b = Tensor::randn([5, 3], 1.0, &mut r);
    assert_grad(&[a.clone(), b], 1e-6, |_, v| v[0].matmul(v[1]));
    let bt = Tensor::randn([3, 5], 1.0, &mut r);
    assert_grad(&[a, bt], 1e-6, |_, v| v[0].matmul_t(v[1]));
}

#[test]
fn softmax_examples() {
    let tape = Tape::<f64>::new();
    let u = tape.constant(Tensor::zeros([3])).softmax(0).unwrap();
    for &p in u.value().data() {
        assert!((p - 1.0 / 3.0).abs() < 1e-15);
    }
    let big = tape.constant(t(&[2], &[1000.0, 1000.0])).softmax(0).unwrap();
    assert_eq!(big.value().data(), &[0.5, 0.5]);

    let nan = tape.constant(t(&[2], &[f64::NAN, 0.0]));
    assert!(matches!(nan.softmax(0), Err(TensorError::NonFinite { .. })));
}

#[test]
fn softmax_rows_sum_to_one_on_either_axis() {
    let tape = Tape::<f64>::new();
    let x = tape.constant(Tensor::randn([3, 4], 3.0, &mut rng(3)));
    let rows = x.softmax(1).unwrap().to_tensor();
    for r in 0..3 {
        assert!((rows.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
    let cols = x.softmax(0).unwrap().to_tensor();
    for c in 0..4 {
        let s: f64 = (0..3).map(|r| cols.at2(r, c)).sum();
        assert!((s - 1.0).abs() < 1e-12);
    }
}

#[test]
fn softmax_gradient() {
    let x = Tensor::randn([7], 1.0, &mut rng(4));
    assert_grad(&[x], 1e-6, |_, v| v[0].softmax(0));
    let m = Tensor::randn([3, 4], 1.0, &mut rng(5));
    assert_grad(&[m], 1e-6, |_, v| v[0].softmax(0));
}

#[test]
fn layer_norm_examples() {
    let tape = Tape::<f64>::new();
    let ones = tape.constant(Tensor::ones([2]));
    let zeros = tape.constant(Tensor::zeros([2]));
    let y = tape
        .constant(t(&[2], &[1.0, 3.0]))
        .layer_norm(ones, zeros, 0.0)
        .unwrap();
    assert_eq!(y.value().data(), &[-1.0, 1.0]);

    let g4 = tape.constant(Tensor::ones([4]));
    let b4 = tape.constant(Tensor::zeros([4]));
    let c = tape.constant(Tensor::full([4], 5.0)).layer_norm(g4, b4, 1e-5).unwrap();
    assert!(c.value().data().iter().all(|&v| v == 0.0));

    let narrow = tape.constant(Tensor::zeros([3, 1]));
    let g1 = tape.constant(Tensor::ones([1]));
    let b1 = tape.constant(Tensor::zeros([1]));
    assert!(narrow.layer_norm(g1, b1, 1e-5).is_err());
}

#[test]
fn layer_norm_gradient() {
    let mut r = rng(6);
    let x = Tensor::randn([3, 6], 1.0, &mut r);
    let g = Tensor::randn([6], 1.0, &mut r);
    let b = Tensor::randn([6], 1.0, &mut r);
    assert_grad(&[x, g, b], 1e-5, |_, v| v[0].layer_norm(v[1], v[2], 1e-5));
}

#[test]
fn elementwise_gradients() {
    let mut r = rng(7);
    let a = Tensor::randn([3, 4], 1.0, &mut r);
    let b = Tensor::randn([3, 4], 1.0, &mut r);
    let row = Tensor::randn([4], 1.0, &mut r);
    let s = Tensor::scalar(0.7);
    assert_grad(&[a.clone(), b.clone()], 1e-6, |_, v| v[0].add(v[1]));
    assert_grad(&[a.clone(), b.clone()], 1e-6, |_, v| v[0].sub(v[1]));
    assert_grad(&[a.clone(), b.clone()], 1e-6, |_, v| v[0].mul(v[1]));
    assert_grad(&[a.clone(), row.clone()], 1e-6, |_, v| v[0].add_row(v[1]));
    assert_grad(&[a.clone(), row], 1e-6, |_, v| v[0].mul_row(v[1]));
    assert_grad(&[a.clone(), s], 1e-6, |_, v| v[0].mul_scalar(v[1]));
    assert_grad(&[a.clone()], 1e-6, |_, v| Ok(v[0].scale(-2.5).add_scalar(1.0)));
    assert_grad(&[a.clone()], 1e-6, |_, v| Ok(v[0].gelu()));
    assert_grad(&[a.clone()], 1e-6, |_, v| Ok(v[0].exp()));
    let pos = a.map(|x| x.abs() + 0.5);
    assert_grad(&[pos], 1e-6, |_, v| Ok(v[0].log()));
}

#[test]
fn reduction_and_shape_gradients() {
    let mut r = rng(8);
    let a = Tensor::randn([3, 4], 1.0, &mut r);
    let b = Tensor::randn([2, 4], 1.0, &mut r);
    assert_grad(&[a.clone()], 1e-6, |_, v| Ok(v[0].sum()));
    assert_grad(&[a.clone()], 1e-6, |_, v| Ok(v[0].mean()));
    assert_grad(&[a.clone()], 1e-6, |_, v| v[0].sum_axis(0));
    assert_grad(&[a.clone()], 1e-6, |_, v| v[0].mean_axis(1));
    assert_grad(&[a.clone()], 1e-6, |_, v| v[0].transpose());
    assert_grad(&[a.clone()], 1e-6, |_, v| v[0].reshape([6, 2]));
    assert_grad(&[a.clone(), b], 1e-6, |_, v| Var::concat(&[v[0], v[1]], 0));
    let c = Tensor::randn([3, 2], 1.0, &mut r);
    assert_grad(&[a.clone(), c], 1e-6, |_, v| Var::concat(&[v[0], v[1], v[0]], 1));
    assert_grad(&[a.clone()], 1e-6, |_, v| v[0].slice(1, 1, 2));
    assert_grad(&[a], 1e-6, |_, v| v[0].gather_rows(&[2, 0, 2]));
}

#[test]
fn normalization_and_similarity_gradients() {
    let mut r = rng(9);
    let a = Tensor::randn([3, 5], 1.0, &mut r);
    let b = Tensor::randn([4, 5], 1.0, &mut r);
    assert_grad(&[a.clone()], 1e-6, |_, v| v[0].l2_normalize());
    assert_grad(&[a, b], 1e-6, |_, v| v[0].cosine_similarity(v[1]));
}

#[test]
fn loss_gradients() {
    let mut r = rng(10);
    let logits = Tensor::randn([3, 4], 2.0, &mut r);
    assert_grad(&[logits.clone()], 1e-6, |_, v| v[0].cross_entropy(&[1, 3, 0]));
    let soft = t(
        &[3, 4],
        &[0.5, 0.5, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.25, 0.25, 0.25, 0.25],
    );
    assert_grad(&[logits.clone()], 1e-6, |_, v| v[0].soft_cross_entropy(&soft));
    let bin = t(&[3, 4], &[1.0, 0.0, 0.0, 1.0, 0.0, 1.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0]);
    assert_grad(&[logits], 1e-6, |_, v| v[0].bce_with_logits(&bin));
}

#[test]
fn soft_cross_entropy_with_one_hot_is_bit_equal_to_cross_entropy() {
    let tape = Tape::<f64>::new();
    let logits = tape.param(Tensor::randn([5, 6], 3.0, &mut rng(12)));
    let targets = [4, 0, 5, 2, 2];
    let mut one_hot = Tensor::<f64>::zeros([5, 6]);
    for (r, &c) in targets.iter().enumerate() {
        one_hot.data_mut()[r * 6 + c] = 1.0;
    }
    let ce = logits.cross_entropy(&targets).unwrap();
    let soft = logits.soft_cross_entropy(&one_hot).unwrap();
    assert_eq!(ce.item().unwrap().to_bits(), soft.item().unwrap().to_bits());
}

#[test]
fn composite_graph_gradient() {
    // A small two-layer network reusing one weight twice.
    let mut r = rng(13);
    let x = Tensor::randn([4, 6], 1.0, &mut r);
    let w = Tensor::randn([6, 6], 0.5, &mut r);
    let g = Tensor::randn([6], 1.0, &mut r);
    let b = Tensor::randn([6], 1.0, &mut r);
    assert_grad(&[x, w, g, b], 1e-5, |_, v| {
        let h = v[0].matmul(v[1])?.gelu();
        let h = h.layer_norm(v[2], v[3], 1e-5)?.matmul(v[1])?;
        let att = h.matmul_t(h)?.scale(0.3).softmax(1)?;
        att.matmul(h)?.l2_normalize()
    });
}

#[test]
fn backward_is_deterministic() {
    let run = || {
        let mut r = rng(14);
        let tape = Tape::<f64>::new();
        let a = tape.param(Tensor::randn([8, 8], 1.0, &mut r));
        let b = tape.param(Tensor::randn([8, 8], 1.0, &mut r));
        let y = a.matmul(b).unwrap().gelu().softmax(1).unwrap();
        let loss = y.matmul_t(a).unwrap().cross_entropy(&[0, 1, 2, 3, 4, 5, 6, 7]).unwrap();
        let grads = tape.backward(loss).unwrap();
        let bits: Vec<u64> = grads.get(a).unwrap().data().iter().map(|v| v.to_bits()).collect();
        bits
    };
    assert_eq!(run(), run());
}

#[test]
fn reachable_params_get_gradients_and_others_do_not() {
    let tape = Tape::<f64>::new();
    let used = tape.param(Tensor::ones([2, 2]));
    let unused = tape.param(Tensor::ones([2, 2]));
    let data = tape.constant(Tensor::ones([2, 2]));
    let loss = used.mul(data).unwrap().sum();
    let grads = tape.backward(loss).unwrap();
    assert!(grads.get(used).is_some());
    assert!(grads.get(unused).is_none());
    assert!(grads.get(data).is_none());
    assert_eq!(grads.get(used).unwrap().shape(), &[2, 2]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let tape = Tape::<f64>::new();
    let x = tape.param(Tensor::ones([2]));
    assert!(matches!(tape.backward(x), Err(TensorError::NonScalarLoss(_))));
}

#[test]
fn broadcasting_is_limited_to_rows_and_scalars() {
    let tape = Tape::<f64>::new();
    let a = tape.constant(Tensor::ones([2, 3]));
    let b = tape.constant(Tensor::ones([3, 2]));
    assert!(a.add(b).is_err());
    let bad_row = tape.constant(Tensor::ones([2]));
    assert!(a.add_row(bad_row).is_err());
    let vec2 = tape.constant(Tensor::ones([2]));
    assert!(a.mul_scalar(vec2).is_err());
}

#[test]
fn f32_tape_works() {
    let tape = Tape::<f32>::new();
    let a = tape.param(Tensor::from_f64([1, 2], &[3.0, 4.0]).unwrap());
    let n = a.l2_normalize().unwrap();
    assert!((n.value().norm() - 1.0).abs() < 1e-6);
    let grads = tape.backward(n.sum()).unwrap();
    assert_eq!(grads.get(a).unwrap().shape(), &[1, 2]);
}

proptest! {
    #[test]
    fn l2_normalize_gives_unit_rows(data in prop::collection::vec(-1e3f64..1e3, 12)) {
        prop_assume!(data.chunks(4).all(|c| c.iter().any(|v| v.abs() > 1e-6)));
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([3, 4], data).unwrap());
        let y = x.l2_normalize().unwrap().to_tensor();
        for r in 0..3 {
            let n: f64 = y.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
            prop_assert!((n - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_is_shift_invariant(data in prop::collection::vec(-50f64..50.0, 5), shift in -100f64..100.0) {
        let tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::new([5], data.clone()).unwrap());
        let xs = tape.constant(Tensor::new([5], data.iter().map(|v| v + shift).collect()).unwrap());
        let a = x.softmax(0).unwrap().to_tensor();
        let b = xs.softmax(0).unwrap().to_tensor();
        for (p, q) in a.data().iter().zip(b.data()) {
            prop_assert!((p - q).abs() < 1e-9);
        }
    }
}
