use neuroseq_autodiff::{
    grad_check, CustomOp, Error, Graph, Padding, Result, Tensor, Var,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

/// `sum(out * r)` for a fixed random projection `r`, so every output element
/// contributes a distinct weight to the scalar being differentiated.
fn project(g: &mut Graph, out: Var, seed: u64) -> Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37);
    let r = random(&mut rng, g.shape(out));
    let rv = g.constant(r);
    let prod = g.mul(out, rv)?;
    Ok(g.sum(prod))
}

fn assert_check<F>(name: &str, seeds: u64, tol: f64, make: impl Fn(&mut ChaCha8Rng) -> Vec<Tensor>, f: F)
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var> + Copy,
{
    for seed in 0..seeds {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let inputs = make(&mut rng);
        let report = grad_check(f, &inputs, tol).unwrap();
        assert!(report.passed, "{name} seed {seed}: {report:?}");
    }
}

#[test]
fn matmul_examples() {
    let a = Tensor::from_rows(&[vec![1.0, 2.0], vec![3.0, 4.0]]).unwrap();
    let b = Tensor::from_rows(&[vec![1.0], vec![1.0]]).unwrap();
    let mut g = Graph::new();
    let (av, bv) = (g.constant(a), g.constant(b));
    let c = g.matmul(av, bv).unwrap();
    assert_eq!(g.value(c).data(), &[3.0, 7.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let r = random(&mut rng, &[2, 2]);
    let mut g = Graph::new();
    let (rv, iv) = (g.constant(r.clone()), g.constant(Tensor::eye(2)));
    let out = g.matmul(rv, iv).unwrap();
    assert_eq!(g.value(out), &r);
}

#[test]
fn matmul_gradient_matches_finite_differences() {
    assert_check(
        "matmul",
        20,
        1e-6,
        |rng| vec![random(rng, &[3, 4]), random(rng, &[4, 2])],
        |g, v| {
            let c = g.matmul(v[0], v[1])?;
            project(g, c, 1)
        },
    );
}

#[test]
fn conv1d_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::matrix(4, 1, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
    let w = g.constant(Tensor::new(vec![1, 1, 3], vec![1.0, 0.0, -1.0]).unwrap());
    let y = g.conv1d(x, w, 1, Padding::Valid).unwrap();
    assert_eq!(g.value(y).data(), &[-2.0, -2.0]);

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let xs = random(&mut rng, &[9, 1]);
    let x = g.constant(xs.clone());
    let id = g.constant(Tensor::new(vec![1, 1, 1], vec![1.0]).unwrap());
    let y = g.conv1d(x, id, 1, Padding::Same).unwrap();
    assert_eq!(g.value(y), &xs);

    let x = g.constant(Tensor::zeros(&[100, 2]));
    let w = g.constant(Tensor::zeros(&[3, 2, 5]));
    let y = g.conv1d(x, w, 4, Padding::Same).unwrap();
    assert_eq!(g.shape(y), &[25, 3]);
}

#[test]
fn conv1d_rejects_empty_and_short_inputs() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[0, 2]));
    let w = g.constant(Tensor::zeros(&[1, 2, 3]));
    assert!(matches!(g.conv1d(x, w, 1, Padding::Same), Err(Error::EmptyInput { .. })));
    let x = g.constant(Tensor::zeros(&[2, 2]));
    assert!(matches!(g.conv1d(x, w, 1, Padding::Valid), Err(Error::InputTooShort { .. })));
}

#[test]
fn conv1d_same_padding_length_law() {
    for t in 5..=200 {
        for stride in 1..=4 {
            let (len, l, r) = neuroseq_autodiff::conv1d_geometry(t, 5, stride, Padding::Same).unwrap();
            assert_eq!(len, t.div_ceil(stride), "t={t} stride={stride}");
            assert!(r == l || r == l + 1);
        }
    }
}

#[test]
fn conv1d_gradient_matches_finite_differences() {
    for (stride, padding) in [(1, Padding::Same), (4, Padding::Same), (2, Padding::Valid)] {
        assert_check(
            "conv1d",
            20,
            1e-6,
            |rng| vec![random(rng, &[11, 3]), random(rng, &[2, 3, 5])],
            move |g, v| {
                let y = g.conv1d(v[0], v[1], stride, padding)?;
                project(g, y, 2)
            },
        );
    }
}

#[test]
fn softmax_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::vector(vec![0.0; 4]));
    let y = g.softmax_rows(x);
    assert_eq!(g.value(y).data(), &[0.25; 4]);
    let x = g.constant(Tensor::vector(vec![1000.0, 0.0]));
    let y = g.softmax_rows(x);
    let v = g.value(y).data();
    assert!(v.iter().all(|p| p.is_finite()));
    assert!((v[0] - 1.0).abs() < 1e-15 && v[1] < 1e-300);
}

#[test]
fn softmax_rows_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for _ in 0..50 {
        let x = random(&mut rng, &[6, 9]).map(|v| v * 30.0);
        let mut g = Graph::new();
        let xv = g.constant(x);
        let y = g.softmax_rows(xv);
        for r in 0..6 {
            let s: f64 = g.value(y).row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
            assert!(g.value(y).row(r).iter().all(|&p| p >= 0.0));
        }
    }
}

#[test]
fn softmax_gradient_matches_finite_differences() {
    assert_check(
        "softmax",
        20,
        1e-6,
        |rng| vec![random(rng, &[1, 5])],
        |g, v| {
            let y = g.softmax_rows(v[0]);
            project(g, y, 3)
        },
    );
    assert_check(
        "masked softmax",
        20,
        1e-6,
        |rng| vec![random(rng, &[4, 4])],
        |g, v| {
            let causal: Vec<bool> = (0..16).map(|i| i % 4 <= i / 4).collect();
            let y = g.softmax_rows_masked(v[0], Some(&causal))?;
            project(g, y, 4)
        },
    );
    assert_check(
        "log_softmax",
        20,
        1e-6,
        |rng| vec![random(rng, &[3, 5])],
        |g, v| {
            let y = g.log_softmax_rows(v[0]);
            project(g, y, 5)
        },
    );
}

fn layer_norm_of(x: Tensor) -> Tensor {
    let d = x.cols();
    let mut g = Graph::new();
    let xv = g.constant(x);
    let gain = g.constant(Tensor::vector(vec![1.0; d]));
    let bias = g.constant(Tensor::vector(vec![0.0; d]));
    let y = g.layer_norm(xv, gain, bias, 1e-5).unwrap();
    g.value(y).clone()
}

#[test]
fn layer_norm_examples() {
    assert_eq!(layer_norm_of(Tensor::vector(vec![3.0; 6])).data(), &[0.0; 6]);
    let y = layer_norm_of(Tensor::vector(vec![1.0, 3.0]));
    let expected = 1.0 / (1.0 + 1e-5f64).sqrt();
    assert!((y.data()[0] + expected).abs() < 1e-15);
    assert!((y.data()[1] - expected).abs() < 1e-15);

    // Constant rows normalize to zero, so the output is exactly the bias.
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[3, 4], -2.5));
    let gain = g.constant(Tensor::vector(vec![0.3, 2.0, -1.0, 4.0]));
    let bias = g.constant(Tensor::vector(vec![0.1, 0.2, 0.3, 0.4]));
    let y = g.layer_norm(x, gain, bias, 1e-5).unwrap();
    for r in 0..3 {
        assert_eq!(g.value(y).row(r), &[0.1, 0.2, 0.3, 0.4]);
    }
}

#[test]
fn layer_norm_gradient_matches_finite_differences() {
    assert_check(
        "layer_norm",
        20,
        1e-6,
        |rng| vec![random(rng, &[3, 6]), random(rng, &[6]), random(rng, &[6])],
        |g, v| {
            let y = g.layer_norm(v[0], v[1], v[2], 1e-5)?;
            project(g, y, 6)
        },
    );
}

#[test]
fn cross_entropy_examples() {
    let mut g = Graph::new();
    let x = g.constant(Tensor::zeros(&[3, 4]));
    let l = g.cross_entropy(x, &[0, 3, 1], None).unwrap();
    assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-15);

    let mut last = f64::INFINITY;
    for margin in [1.0, 5.0, 20.0, 60.0] {
        let x = g.constant(Tensor::from_rows(&[vec![margin, 0.0, 0.0]]).unwrap());
        let l = g.cross_entropy(x, &[0], None).unwrap();
        let v = g.value(l).item();
        assert!(v < last);
        last = v;
    }
    assert!(last < 1e-25);

    let x = g.constant(Tensor::zeros(&[2, 3]));
    assert_eq!(g.cross_entropy(x, &[2, 2], Some(2)).unwrap_err(), Error::EmptyLoss);
}

#[test]
fn cross_entropy_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let logits = random(&mut rng, &[6, 5]).map(|v| 3.0 * v);
    let targets = [0usize, 4, 2, 2, 1, 3];
    let mut g = Graph::new();
    let x = g.constant(logits.clone());
    let l = g.cross_entropy(x, &targets, None).unwrap();
    let mut direct = 0.0;
    for (r, &t) in targets.iter().enumerate() {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        direct += -(row[t].exp() / z).ln();
    }
    direct /= 6.0;
    assert!((g.value(l).item() - direct).abs() < 1e-12);

    // Ignored rows drop out of both the sum and the count.
    let l = g.cross_entropy(x, &[0, 9, 2, 9, 1, 3], Some(9)).unwrap();
    let kept = [(0usize, 0usize), (2, 2), (4, 1), (5, 3)];
    let mut direct = 0.0;
    for (r, t) in kept {
        let row = logits.row(r);
        let z: f64 = row.iter().map(|v| v.exp()).sum();
        direct += -(row[t].exp() / z).ln();
    }
    assert!((g.value(l).item() - direct / 4.0).abs() < 1e-12);
}

#[test]
fn cross_entropy_and_mse_gradients() {
    assert_check(
        "cross_entropy",
        20,
        1e-6,
        |rng| vec![random(rng, &[5, 4])],
        |g, v| g.cross_entropy(v[0], &[1, 3, 7, 0, 2], Some(7)),
    );
    assert_check(
        "mse",
        20,
        1e-6,
        |rng| vec![random(rng, &[3, 4])],
        |g, v| g.mse(v[0], &Tensor::full(&[3, 4], 0.25)),
    );
}

#[test]
fn elementwise_and_structural_gradients() {
    assert_check(
        "activations",
        20,
        1e-6,
        |rng| vec![random(rng, &[4, 3]), random(rng, &[4, 3])],
        |g, v| {
            let a = g.gelu(v[0]);
            let b = g.sigmoid(v[1]);
            let c = g.mul(a, b)?;
            let d = g.tanh(c);
            let e = g.sub(d, v[0])?;
            let f = g.affine(e, -1.5, 0.2);
            project(g, f, 7)
        },
    );
    assert_check(
        "broadcast",
        20,
        1e-6,
        |rng| vec![random(rng, &[4, 3]), random(rng, &[3]), random(rng, &[3]), random(rng, &[])],
        |g, v| {
            let a = g.add_row(v[0], v[1])?;
            let b = g.mul_row(a, v[2])?;
            let c = g.scale_by(b, v[3])?;
            project(g, c, 8)
        },
    );
    assert_check(
        "slicing",
        20,
        1e-6,
        |rng| vec![random(rng, &[5, 6]), random(rng, &[7, 3])],
        |g, v| {
            let l = g.slice_cols(v[0], 0, 2)?;
            let r = g.slice_cols(v[0], 3, 6)?;
            let c = g.concat_cols(&[r, l])?;
            let t = g.transpose(c);
            let rows = g.slice_rows(t, 1, 4)?;
            let e = g.gather_rows(v[1], &[0, 6, 6, 2, 1])?;
            let et = g.transpose(e);
            let st = g.concat_rows(&[rows, et])?;
            let m = g.mean(st);
            let s = project(g, st, 9)?;
            g.add(s, m)
        },
    );
}

#[test]
fn dropout_is_inverted_and_replayable() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut g = Graph::new();
    let x = g.constant(Tensor::full(&[50, 40], 1.0));
    let y = g.dropout(x, 0.4, || rng.gen::<f64>()).unwrap();
    let vals = g.value(y).data();
    assert!(vals.iter().all(|&v| v == 0.0 || (v - 1.0 / 0.6).abs() < 1e-15));
    let mean = vals.iter().sum::<f64>() / vals.len() as f64;
    assert!((mean - 1.0).abs() < 0.1);

    let mut rng2 = ChaCha8Rng::seed_from_u64(1);
    let z = g.dropout(x, 0.4, || rng2.gen::<f64>()).unwrap();
    assert_eq!(g.value(y), g.value(z));
}

#[test]
fn repeated_runs_give_bit_identical_gradients() {
    let run = || {
        let mut rng = ChaCha8Rng::seed_from_u64(42);
        let a = random(&mut rng, &[6, 8]);
        let w = random(&mut rng, &[8, 8]);
        let mut g = Graph::new();
        let (av, wv) = (g.input(a), g.input(w));
        let h = g.matmul(av, wv).unwrap();
        let s = g.softmax_rows(h);
        let l = g.log_softmax_rows(s);
        let loss = g.cross_entropy(l, &[0, 1, 2, 3, 4, 5], None).unwrap();
        g.backward(loss).unwrap();
        (g.grad(av).unwrap().clone(), g.grad(wv).unwrap().clone())
    };
    let (a1, w1) = run();
    let (a2, w2) = run();
    let bits = |t: &Tensor| t.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>();
    assert_eq!(bits(&a1), bits(&a2));
    assert_eq!(bits(&w1), bits(&w2));
}

#[test]
fn gradients_accumulate_over_reused_nodes() {
    let mut g = Graph::new();
    let x = g.input(Tensor::vector(vec![3.0]));
    let y = g.add(x, x).unwrap();
    let z = g.mul(y, x).unwrap(); // 2x^2
    let s = g.sum(z);
    g.backward(s).unwrap();
    assert_eq!(g.grad(x).unwrap().item(), 12.0);
}

struct SquareWithWrongSign;

impl CustomOp for SquareWithWrongSign {
    fn name(&self) -> &'static str {
        "bad_square"
    }

    fn backward(&self, inputs: &[&Tensor], _: &Tensor, g: &Tensor) -> Vec<Option<Tensor>> {
        vec![Some(inputs[0].zip_map(g, |x, d| -2.0 * x * d))]
    }
}

#[test]
fn sign_flipped_backward_fails_the_check() {
    let x = Tensor::vector(vec![1.0, -2.0, 0.5]);
    let report = grad_check(
        |g: &mut Graph, v: &[Var]| {
            let value = g.value(v[0]).map(|x| x * x);
            let y = g.custom(&[v[0]], value, Box::new(SquareWithWrongSign));
            Ok(g.sum(y))
        },
        &[x],
        1e-4,
    )
    .unwrap();
    assert!(!report.passed);
    assert!(report.max_rel_error > 1.0);
}
