use neuroseq_autodiff::{grad_check, AdamW, Error, Graph, ParamStore, Tensor, Var};

fn store_with(values: Vec<f64>) -> ParamStore {
    let mut s = ParamStore::new();
    s.add("w", Tensor::vector(values)).unwrap();
    s
}

#[test]
fn zero_gradient_without_decay_is_a_no_op() {
    let mut s = store_with(vec![1.5, -2.0]);
    let before = s.clone();
    AdamW::new(0.1, 0.0).step(&mut s).unwrap();
    assert_eq!(s.get(s.id("w").unwrap()).value, before.get(before.id("w").unwrap()).value);
}

#[test]
fn zero_gradient_applies_decoupled_decay() {
    let mut s = store_with(vec![2.0]);
    AdamW::new(0.1, 0.01).step(&mut s).unwrap();
    let w = s.get(s.id("w").unwrap()).value.item();
    assert!((w - 2.0 * (1.0 - 0.1 * 0.01)).abs() < 1e-15);
}

#[test]
fn first_step_moves_by_learning_rate() {
    // m_hat = v_hat = 1 after bias correction, so the update is lr / (1 + eps).
    let mut s = store_with(vec![3.0]);
    let id = s.id("w").unwrap();
    s.get_mut(id).grad = Tensor::vector(vec![1.0]);
    AdamW::new(0.1, 0.0).step(&mut s).unwrap();
    let w = s.get(id).value.item();
    assert!((w - (3.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-15);
}

#[test]
fn non_finite_gradient_names_parameter() {
    let mut s = store_with(vec![1.0]);
    let id = s.id("w").unwrap();
    s.get_mut(id).grad = Tensor::vector(vec![f64::NAN]);
    let err = AdamW::new(0.1, 0.0).step(&mut s).unwrap_err();
    assert!(err.to_string().contains('w'));
    assert_eq!(s.get(id).value.item(), 1.0);
}

#[test]
fn frozen_parameters_do_not_move() {
    let mut s = store_with(vec![1.0]);
    let id = s.id("w").unwrap();
    s.get_mut(id).grad = Tensor::vector(vec![1.0]);
    s.get_mut(id).frozen = true;
    AdamW::new(0.1, 0.1).step(&mut s).unwrap();
    assert_eq!(s.get(id).value.item(), 1.0);
}

#[test]
fn tensor_rejects_inconsistent_shape() {
    assert!(Tensor::new(vec![2, 3], vec![0.0; 5]).is_err());
}

#[test]
fn matmul_shape_error_reports_both_shapes() {
    let a = Tensor::zeros(&[2, 3]);
    let b = Tensor::zeros(&[2, 3]);
    match a.matmul(&b) {
        Err(Error::Shape { lhs, rhs, .. }) => {
            assert_eq!(lhs, vec![2, 3]);
            assert_eq!(rhs, vec![2, 3]);
        }
        other => panic!("expected shape error, got {other:?}"),
    }
}

#[test]
fn matmul_with_transpose_matches_manual_product() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0, 3.0], vec![4.0, 5.0, 6.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![1.0, 0.5, 2.0], vec![-1.0, 3.0, 0.0]]).unwrap();
    let c = a.matmul(&b.transpose()).unwrap();
    assert_eq!(c.data(), &[8.0, 5.0, 18.5, 11.0]);
}

#[test]
fn quadratic_gradcheck_matches_closed_form() {
    let x = Tensor::vector(vec![1.0, 2.0]);
    let f = |g: &mut Graph, v: &[Var]| {
        let sq = g.mul(v[0], v[0])?;
        Ok(g.sum(sq))
    };
    let mut g = Graph::new();
    let xv = g.input(x.clone());
    let y = f(&mut g, &[xv]).unwrap();
    g.backward(y).unwrap();
    assert_eq!(g.grad(xv).unwrap().data(), &[2.0, 4.0]);
    let report = grad_check(f, &[x], 1e-8).unwrap();
    assert!(report.passed, "{report:?}");
    assert!(report.max_abs_error < 1e-8);
}
