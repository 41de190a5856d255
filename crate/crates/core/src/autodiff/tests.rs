use proptest::prelude::*;

use super::check::{check_gradients, Differentiable, DEFAULT_STEP};
use super::*;
use crate::error::{Error, Result};
use crate::gradcheck::{primitive_cases, PRIMITIVE_TOL};

fn mat(rows: &[Vec<f32>]) -> Tensor {
    Tensor::from_rows(rows).unwrap()
}

#[test]
fn matmul_identity_and_dot() {
    let mut g = Graph::<f32>::new();
    let i = g.constant(mat(&[vec![1., 0.], vec![0., 1.]]));
    let b = g.constant(mat(&[vec![5., 6.], vec![7., 8.]]));
    let c = g.matmul(i, b).unwrap();
    assert_eq!(g.value(c).data(), &[5., 6., 7., 8.]);

    let a = g.constant(mat(&[vec![1., 2.]]));
    let b = g.constant(mat(&[vec![3.], vec![4.]]));
    let c = g.matmul(a, b).unwrap();
    assert_eq!(g.value(c).shape(), &[1, 1]);
    assert_eq!(g.value(c).data(), &[11.]);
}

#[test]
fn matmul_mismatch_names_both_shapes() {
    let mut g = Graph::<f32>::new();
    let a = g.constant(Tensor::zeros(&[2, 3]));
    let b = g.constant(Tensor::zeros(&[2, 3]));
    let err = g.matmul(a, b).unwrap_err();
    let msg = err.to_string();
    assert!(matches!(err, Error::Shape { .. }));
    assert!(msg.contains("[2, 3] x [2, 3]"), "{msg}");
}

struct SumOfProduct(Tensor<f64>, Tensor<f64>);

impl Differentiable for SumOfProduct {
    fn name(&self) -> String {
        "sum(A x B)".into()
    }
    fn inputs(&self) -> Vec<Tensor<f64>> {
        vec![self.0.clone(), self.1.clone()]
    }
    fn build<T: Scalar>(&self, g: &mut Graph<T>, x: &[Var]) -> Result<Var> {
        let c = g.matmul(x[0], x[1])?;
        g.sum(c)
    }
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    let a = Tensor::new(
        vec![3, 3],
        vec![0.3, -1.2, 0.7, 1.9, -0.4, 0.05, -1.5, 0.8, 1.1],
    )
    .unwrap();
    let b = Tensor::new(
        vec![3, 3],
        vec![-0.9, 0.2, 1.4, 0.6, -1.7, 0.35, 1.2, -0.25, -0.6],
    )
    .unwrap();
    let rep = check_gradients(&SumOfProduct(a, b), DEFAULT_STEP).unwrap();
    assert!(rep.passes(1e-4), "{rep:?}");
}

#[test]
fn softmax_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(mat(&[
        vec![0., 0.],
        vec![1000., 1000.],
        vec![0., 3f32.ln()],
    ]));
    let y = g.softmax(x).unwrap();
    let d = g.value(y).data();
    assert_eq!(&d[..4], &[0.5, 0.5, 0.5, 0.5]);
    assert!(
        (d[4] - 0.25).abs() < 1e-6 && (d[5] - 0.75).abs() < 1e-6,
        "{d:?}"
    );
}

#[test]
fn layer_norm_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(mat(&[vec![2., 4.]]));
    let gain = g.constant(Tensor::new(vec![2], vec![1., 1.]).unwrap());
    let bias = g.constant(Tensor::zeros(&[2]));
    let y = g.layer_norm(x, gain, bias, 1e-12).unwrap();
    let d = g.value(y).data();
    assert!(
        (d[0] + 1.).abs() < 1e-6 && (d[1] - 1.).abs() < 1e-6,
        "{d:?}"
    );

    let x = g.constant(mat(&[vec![5., 5., 5.]]));
    let gain = g.constant(Tensor::new(vec![3], vec![1.; 3]).unwrap());
    let bias = g.constant(Tensor::zeros(&[3]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    assert_eq!(g.value(y).data(), &[0., 0., 0.]);

    assert!(g.layer_norm(x, gain, bias, 0.0).is_err());
}

#[test]
fn gelu_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(vec![3], vec![0., 10., 30.]).unwrap());
    let y = g.gelu(x).unwrap();
    let d = g.value(y).data();
    assert_eq!(d[0], 0.);
    assert!(
        (d[1] - 10.).abs() < 1e-5 && (d[2] - 30.).abs() < 1e-5,
        "{d:?}"
    );
}

#[test]
fn gelu_is_monotone_on_tested_range() {
    let mut g = Graph::<f64>::new();
    let xs: Vec<f64> = (0..=400).map(|i| -0.7 + i as f64 * 0.02).collect();
    let x = g.constant(Tensor::new(vec![xs.len()], xs).unwrap());
    let y = g.gelu(x).unwrap();
    assert!(g.value(y).data().windows(2).all(|w| w[1] > w[0]));
}

#[test]
fn l2_normalize_examples() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(mat(&[vec![3., 4.], vec![0., 0.]]));
    let y = g.l2_normalize(x, 1e-6).unwrap();
    let d = g.value(y).data();
    assert!((d[0] - 0.6).abs() < 1e-7 && (d[1] - 0.8).abs() < 1e-7);
    assert_eq!(&d[2..], &[0., 0.]);
}

#[test]
fn backward_seeds_one_and_accumulates() {
    let mut g = Graph::<f32>::new();
    let w = g.param(Tensor::new(vec![3], vec![0.5, -1., 2.]).unwrap());
    let s = g.sum(w).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[1., 1., 1.]);

    let mut g = Graph::<f32>::new();
    let w = g.param(Tensor::new(vec![2], vec![1., 2.]).unwrap());
    let sq = g.mul(w, w).unwrap();
    let s = g.sum(sq).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[2., 4.]);

    // a second sweep adds on top of the first
    g.backward(s).unwrap();
    assert_eq!(g.grad(w).unwrap(), &[4., 8.]);
}

#[test]
fn backward_rejects_non_scalar_loss() {
    let mut g = Graph::<f32>::new();
    let w = g.param(Tensor::zeros(&[2]));
    assert!(matches!(g.backward(w), Err(Error::Contract(_))));
}

#[test]
fn unreached_params_get_zero_grad() {
    let mut g = Graph::<f32>::new();
    let used = g.param(Tensor::new(vec![2], vec![1., 2.]).unwrap());
    let unused = g.param(Tensor::new(vec![2], vec![3., 4.]).unwrap());
    let s = g.sum(used).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(unused).unwrap(), &[0., 0.]);
}

#[test]
fn every_primitive_matches_finite_differences() {
    for seed in [1, 2, 3] {
        for case in primitive_cases(seed) {
            let rep = check_gradients(&case, DEFAULT_STEP).unwrap();
            assert!(rep.passes(PRIMITIVE_TOL), "seed {seed}: {rep:?}");
        }
    }
}

#[test]
fn shared_subexpression_sums_path_contributions() {
    // f(x) = sum(x*x + x) built via a duplicated input must equal 2x + 1.
    let x0 = [0.5f32, -1.5, 2.0];
    let mut g = Graph::<f32>::new();
    let x = g.param(Tensor::new(vec![3], x0.to_vec()).unwrap());
    let sq = g.mul(x, x).unwrap();
    let y = g.add(sq, x).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let expect: Vec<f32> = x0.iter().map(|v| 2. * v + 1.).collect();
    assert_eq!(g.grad(x).unwrap(), expect.as_slice());

    // the same graph with the input split into two independent leaves
    let mut g = Graph::<f32>::new();
    let a = g.param(Tensor::new(vec![3], x0.to_vec()).unwrap());
    let b = g.param(Tensor::new(vec![3], x0.to_vec()).unwrap());
    let c = g.param(Tensor::new(vec![3], x0.to_vec()).unwrap());
    let sq = g.mul(a, b).unwrap();
    let y = g.add(sq, c).unwrap();
    let s = g.sum(y).unwrap();
    g.backward(s).unwrap();
    let paths: Vec<f32> = (0..3)
        .map(|i| g.grad(a).unwrap()[i] + g.grad(b).unwrap()[i] + g.grad(c).unwrap()[i])
        .collect();
    assert_eq!(paths, expect);
}

#[test]
fn rebuilt_graphs_give_bit_identical_gradients() {
    let run = || {
        let case = &primitive_cases(9)[16]; // attention
        check::analytic_gradients::<_, f32>(case).unwrap()
    };
    let (a, b) = (run(), run());
    let bits = |v: &Vec<Vec<f64>>| v.iter().flatten().map(|x| x.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a), bits(&b));
}

#[test]
fn gather_rows_contract() {
    let mut g = Graph::<f32>::new();
    let x = g.param(mat(&[vec![1., 2.], vec![3., 4.], vec![5., 6.]]));
    let all = g.gather_rows(x, &[0, 1, 2]).unwrap();
    assert_eq!(g.value(all).data(), g.value(x).data());
    let one = g.gather_rows(x, &[1]).unwrap();
    assert_eq!(g.value(one).shape(), &[1, 2]);
    assert!(g.gather_rows(x, &[3]).is_err());
    assert!(g.gather_rows(x, &[]).is_err());

    let s = g.sum(one).unwrap();
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap(), &[0., 0., 1., 1., 0., 0.]);
}

#[test]
fn first_non_finite_reports_op() {
    let mut g = Graph::<f32>::new();
    let x = g.constant(Tensor::new(vec![2], vec![0., 1.]).unwrap());
    let l = g.log_clamped(x, 0.0).unwrap();
    let (v, op) = g.first_non_finite().unwrap();
    assert_eq!(v, l);
    assert_eq!(op, "log_clamped");
}

proptest! {
    #[test]
    fn softmax_rows_are_distributions(rows in proptest::collection::vec(proptest::collection::vec(-50f32..50., 5), 1..6)) {
        let mut g = Graph::<f32>::new();
        let x = g.constant(Tensor::from_rows(&rows).unwrap());
        let y = g.softmax(x).unwrap();
        for row in g.value(y).data().chunks(5) {
            prop_assert!(row.iter().all(|&p| p >= 0.));
            let s: f64 = row.iter().map(|&p| p as f64).sum();
            prop_assert!((s - 1.).abs() <= 1e-6);
        }
    }

    #[test]
    fn gather_backward_conserves_gradient_mass(
        idx in proptest::collection::vec(0usize..5, 1..12),
        w in proptest::collection::vec(-2f64..2., 36),
    ) {
        let mut g = Graph::<f64>::new();
        let x = g.param(Tensor::new(vec![5, 3], vec![0.5; 15]).unwrap());
        let y = g.gather_rows(x, &idx).unwrap();
        let n = idx.len() * 3;
        let wv = g.constant(Tensor::new(vec![idx.len(), 3], w[..n].to_vec()).unwrap());
        let p = g.mul(y, wv).unwrap();
        let s = g.sum(p).unwrap();
        g.backward(s).unwrap();
        let in_mass: f64 = g.grad(x).unwrap().iter().sum();
        let out_mass: f64 = g.grad(y).unwrap().iter().sum();
        prop_assert!((in_mass - out_mass).abs() < 1e-9);
    }
}
