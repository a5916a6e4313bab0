mod common;

use common::*;
use ebpl_core::diffcore::{backward, forward, grad_wrt_input, Activation, DiffError, Tape, Tensor};
use ebpl_core::hybrid_model::{HybridModel, ModelConfig};
use proptest::prelude::*;

#[test]
fn matmul_shapes() {
    let a = Tensor::matrix(2, 3, vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]).unwrap();
    let b = Tensor::matrix(3, 1, vec![1.0, 0.0, -1.0]).unwrap();
    let (out, _) = forward(|t, v| t.matmul(v[0], v[1]), &[a, b]).unwrap();
    assert_eq!(out.shape(), &[2, 1]);
    assert_eq!(out.data(), &[-2.0, -2.0]);
}

#[test]
fn matmul_shape_error_names_op() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 1]);
    let err = forward(|t, v| t.matmul(v[0], v[1]), &[a, b]).unwrap_err();
    match err {
        DiffError::ShapeMismatch { op, lhs, rhs } => {
            assert_eq!(op, "matmul");
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 1]);
        }
        other => panic!("unexpected {other:?}"),
    }
}

#[test]
fn identity_graph() {
    let x = Tensor::vector(vec![0.5, -1.5, 2.0]).with_grad(true);
    let (out, tape) = forward(|_, v| Ok(v[0]), std::slice::from_ref(&x)).unwrap();
    assert_eq!(out.data(), x.data());
    let g = backward(&tape, &Tensor::full(&[3], 1.0)).unwrap();
    let (_, gx) = g.iter().next().unwrap();
    assert_eq!(gx.data(), &[1.0, 1.0, 1.0]);
}

#[test]
fn sum_of_squares() {
    let x = Tensor::vector(vec![1.0, 2.0]).with_grad(true);
    let (out, tape) = forward(
        |t, v| {
            let s = t.square(v[0]);
            Ok(t.sum(s))
        },
        &[x],
    )
    .unwrap();
    assert_eq!(out.item(), 5.0);
    let g = backward(&tape, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.iter().next().unwrap().1.data(), &[2.0, 4.0]);
}

#[test]
fn product_rule() {
    let x = Tensor::scalar(3.0).with_grad(true);
    let y = Tensor::scalar(4.0).with_grad(true);
    let (out, tape) = forward(|t, v| t.mul(v[0], v[1]), &[x, y]).unwrap();
    assert_eq!(out.item(), 12.0);
    let g = backward(&tape, &Tensor::scalar(1.0)).unwrap();
    let gs: Vec<f64> = g.iter().map(|(_, t)| t.item()).collect();
    assert_eq!(gs, vec![4.0, 3.0]);
}

#[test]
fn logsumexp_symmetric_gradient() {
    let x = Tensor::matrix(1, 2, vec![0.0, 0.0])
        .unwrap()
        .with_grad(true);
    let (out, tape) = forward(|t, v| t.logsumexp_rows(v[0]), &[x]).unwrap();
    assert!((out.item() - 2f64.ln()).abs() < 1e-15);
    let g = backward(&tape, &Tensor::full(out.shape(), 1.0)).unwrap();
    assert_eq!(g.iter().next().unwrap().1.data(), &[0.5, 0.5]);
}

#[test]
fn untouched_leaf_gets_zero_gradient() {
    let x = Tensor::vector(vec![1.0, 2.0]).with_grad(true);
    let unused = Tensor::vector(vec![3.0]).with_grad(true);
    let (_, tape) = forward(|t, v| Ok(t.sum(v[0])), &[x, unused]).unwrap();
    let g = backward(&tape, &Tensor::scalar(1.0)).unwrap();
    assert_eq!(g.len(), 2);
    let grads: Vec<&Tensor> = g.iter().map(|(_, t)| t).collect();
    assert_eq!(grads[1].data(), &[0.0]);
}

#[test]
fn seed_shape_mismatch() {
    let x = Tensor::vector(vec![1.0, 2.0]).with_grad(true);
    let (_, tape) = forward(|t, v| Ok(t.square(v[0])), &[x]).unwrap();
    let err = backward(&tape, &Tensor::scalar(1.0)).unwrap_err();
    assert!(matches!(err, DiffError::SeedShape { .. }));
}

#[test]
fn grad_wrt_input_quadratic() {
    let x = Tensor::matrix(1, 3, vec![0.3, -1.2, 2.5]).unwrap();
    let (e, g) = grad_wrt_input(
        |t, x| {
            let s = t.square(x);
            let s = t.sum(s);
            Ok(t.scale(s, 0.5))
        },
        &x,
    )
    .unwrap();
    assert!((e - 0.5 * (0.09 + 1.44 + 6.25)).abs() < 1e-12);
    assert_eq!(g.data(), x.data());
}

#[test]
fn grad_wrt_input_constant() {
    let x = Tensor::vector(vec![0.3, -1.2]);
    let (e, g) = grad_wrt_input(|t, _| Ok(t.constant(Tensor::scalar(7.0))), &x).unwrap();
    assert_eq!(e, 7.0);
    assert_eq!(g.data(), &[0.0, 0.0]);
}

#[test]
fn grad_wrt_input_rejects_vector_output() {
    let x = Tensor::vector(vec![0.3, -1.2]);
    let err = grad_wrt_input(|t, x| Ok(t.square(x)), &x).unwrap_err();
    assert!(matches!(err, DiffError::NonScalar { .. }));
}

#[test]
fn grad_wrt_input_gaussian_energy_matches_fd() {
    let mut rng = rng(11);
    for _ in 0..10 {
        let d = 3;
        let mut m = HybridModel::init(
            &ModelConfig {
                input_dim: d,
                hidden: vec![4],
                feature_dim: d,
                classes: 1,
                ..ModelConfig::default()
            },
            &mut rng,
        )
        .unwrap();
        perturb_heads(&mut m, &mut rng);
        let x = normal_tensor(&[1, d], &mut rng);
        let energy = |x: &Tensor| m.class_energy(x, 0).unwrap();
        let (e, g) = grad_wrt_input(
            |t, xv| {
                let mut b = m.bind(t, false);
                let f = m.features_on(t, &b, xv).map_err(|_| DiffError::NoOutput)?;
                let en = m.energies_on(t, &mut b, f)?;
                Ok(t.sum(en))
            },
            &x,
        )
        .unwrap();
        assert!((e - energy(&x)).abs() < 1e-12);
        for j in 0..d {
            let mut up = x.clone();
            up.data_mut()[j] += FD_STEP;
            let mut down = x.clone();
            down.data_mut()[j] -= FD_STEP;
            let numeric = (energy(&up) - energy(&down)) / (2.0 * FD_STEP);
            assert!(rel_err(g.data()[j], numeric) < FD_TOL);
        }
    }
}

#[test]
fn every_op_matches_finite_differences() {
    let mut rng = rng(1);
    let mut checked = 0;
    for _ in 0..6 {
        for case in op_cases(&mut rng) {
            let err = check_graph(case.graph.as_ref(), &case.inputs, &mut rng);
            assert!(err < FD_TOL, "{}: relative error {err:e}", case.name);
            checked += 1;
        }
    }
    assert!(checked >= 100);
}

#[test]
fn three_layer_mlp_matches_finite_differences() {
    let mut rng = rng(2);
    for act in [
        Activation::Tanh,
        Activation::Relu,
        Activation::LeakyRelu { slope: 0.2 },
    ] {
        for _ in 0..5 {
            let case = mlp_case(act, &mut rng);
            let err = check_graph(case.graph.as_ref(), &case.inputs, &mut rng);
            assert!(err < FD_TOL, "{}: relative error {err:e}", case.name);
        }
    }
}

#[test]
fn joint_loss_terms_match_finite_differences() {
    let mut rng = rng(3);
    let term_sets = [
        Terms {
            ce: true,
            nll: false,
            lambda: 0.0,
        },
        Terms {
            ce: false,
            nll: true,
            lambda: 0.0,
        },
        Terms {
            ce: false,
            nll: false,
            lambda: 1.0,
        },
        Terms {
            ce: true,
            nll: true,
            lambda: 0.5,
        },
    ];
    for terms in term_sets {
        for _ in 0..6 {
            let cfg = small_model_config(&mut rng);
            let err = check_joint_loss(&cfg, terms, &mut rng);
            assert!(err < FD_TOL, "{terms:?} {cfg:?}: relative error {err:e}");
        }
    }
}

#[test]
fn backward_is_linear_in_seed() {
    let mut rng = rng(4);
    for case in op_cases(&mut rng) {
        let leaves: Vec<Tensor> = case
            .inputs
            .iter()
            .map(|t| t.clone().with_grad(true))
            .collect();
        let (out, tape) = forward(|t, v| (case.graph)(t, v), &leaves).unwrap();
        let a = normal_tensor(out.shape(), &mut rng);
        let b = normal_tensor(out.shape(), &mut rng);
        let ab = Tensor::new(
            out.shape().to_vec(),
            a.data().iter().zip(b.data()).map(|(x, y)| x + y).collect(),
        )
        .unwrap();
        let (ga, gb, gab) = (
            backward(&tape, &a).unwrap(),
            backward(&tape, &b).unwrap(),
            backward(&tape, &ab).unwrap(),
        );
        for ((va, ta), ((_, tb), (_, tab))) in ga.iter().zip(gb.iter().zip(gab.iter())) {
            for k in 0..ta.len() {
                let sum = ta.data()[k] + tb.data()[k];
                assert!(
                    (sum - tab.data()[k]).abs() <= 1e-12 * (1.0 + sum.abs()),
                    "{} leaf {}",
                    case.name,
                    va.index()
                );
            }
        }
    }
}

#[test]
fn forward_is_deterministic() {
    let mut r1 = rng(5);
    let mut r2 = rng(5);
    for (c1, c2) in op_cases(&mut r1).into_iter().zip(op_cases(&mut r2)) {
        let (o1, _) = forward(|t, v| (c1.graph)(t, v), &c1.inputs).unwrap();
        let (o2, _) = forward(|t, v| (c2.graph)(t, v), &c2.inputs).unwrap();
        let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&o1), bits(&o2), "{}", c1.name);
    }
}

#[test]
fn tape_parents_precede_children() {
    let mut tape = Tape::new();
    let a = tape.leaf(Tensor::vector(vec![1.0]));
    let b = tape.tanh(a);
    let c = tape.add(a, b).unwrap();
    assert!(a.index() < b.index() && b.index() < c.index());
    assert_eq!(tape.len(), 3);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(16))]

    #[test]
    fn prop_random_ops_match_finite_differences(seed in any::<u64>()) {
        let mut rng = rng(seed);
        for case in op_cases(&mut rng) {
            let err = check_graph(case.graph.as_ref(), &case.inputs, &mut rng);
            prop_assert!(err < FD_TOL, "{}: relative error {:e}", case.name, err);
        }
    }

    #[test]
    fn prop_joint_loss_matches_finite_differences(seed in any::<u64>()) {
        let mut rng = rng(seed);
        let cfg = small_model_config(&mut rng);
        let terms = Terms { ce: true, nll: true, lambda: 0.1 };
        let err = check_joint_loss(&cfg, terms, &mut rng);
        prop_assert!(err < FD_TOL, "{:?}: relative error {:e}", cfg, err);
    }
}
