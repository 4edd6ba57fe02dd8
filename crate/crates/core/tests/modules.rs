use neuroseq::ctc::{
    collapse, ctc_greedy_decode, ctc_loss, ctc_neg_log_likelihood, min_frames, CtcHead, Gru, GruCell,
    GruConfig,
};
use neuroseq::daycal::{DayCalConfig, DayCalKind, DayCalibration, Phi};
use neuroseq::frontend::{FrontEnd, FrontEndConfig};
use neuroseq::model::{Architecture, Model, ModelConfig, Variant};
use neuroseq::nn::{Builder, Ctx, EncoderLayer};
use neuroseq::seq2seq::{pool_rows, Encoder, MfccHead, TokenDecoder, TransformerConfig};
use neuroseq::vocab::PhonemeVocab;
use neuroseq::Error;
use neuroseq_autodiff::{gelu, grad_check_with_params, GradCheckConfig, Graph, ParamStore, Tensor, Var};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn random(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect()).unwrap()
}

fn project(g: &mut Graph, out: Var, seed: u64) -> neuroseq_autodiff::Result<Var> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x51);
    let shape = g.shape(out).to_vec();
    let r = random(&mut rng, shape[0], shape[1]);
    let rv = g.constant(r);
    let p = g.mul(out, rv)?;
    Ok(g.sum(p))
}

fn set(store: &mut ParamStore, name: &str, value: Tensor) {
    let id = store.id(name).unwrap_or_else(|| panic!("no parameter {name}"));
    assert_eq!(store.value(id).shape(), value.shape(), "{name}");
    store.get_mut(id).value = value;
}

fn check(store: &ParamStore, inputs: &[Tensor], f: impl Fn(&mut Graph, &[Var]) -> neuroseq::Result<Var>) {
    let cfg = GradCheckConfig {
        tol: 1e-4,
        max_per_tensor: Some(12),
        ..GradCheckConfig::default()
    };
    let report = grad_check_with_params(
        store,
        inputs,
        |g, v| f(g, v).map_err(|e| match e {
            Error::Tensor(t) => t,
            other => panic!("{other}"),
        }),
        &cfg,
    )
    .unwrap();
    assert!(report.passed, "{report:?}");
}

fn small_frontend() -> FrontEndConfig {
    FrontEndConfig {
        channels: 3,
        kernel: 3,
        layers: 2,
        latent_dim: 4,
        stride: 2,
    }
}

// ------------------------------------------------------------ front end

#[test]
fn frontend_output_length_is_ceil_over_stride() {
    let cfg = FrontEndConfig::default();
    assert_eq!(cfg.output_len(100), 25);
    let mut store = ParamStore::new();
    let fe = FrontEnd::new(&mut Builder::new(&mut store, 0, 0), &cfg).unwrap();
    for t in [cfg.kernel, 6, 99, 100, 101, 257] {
        let mut g = Graph::with_params(&store);
        let x = g.constant(Tensor::zeros(&[t, 2 * cfg.channels]));
        let y = fe.forward(&mut g, x).unwrap();
        assert_eq!(g.shape(y), &[t.div_ceil(4), cfg.latent_dim]);
    }
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::zeros(&[cfg.kernel - 1, 2 * cfg.channels]));
    assert!(fe.forward(&mut g, x).is_err());
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]
    #[test]
    fn frontend_length_law(t in 5usize..1000) {
        let cfg = FrontEndConfig::default();
        let mut store = ParamStore::new();
        let fe = FrontEnd::new(&mut Builder::new(&mut store, 0, 0), &cfg).unwrap();
        let mut g = Graph::inference(&store);
        let x = g.constant(Tensor::zeros(&[t, 2 * cfg.channels]));
        let y = fe.forward(&mut g, x).unwrap();
        prop_assert_eq!(g.shape(y)[0], t.div_ceil(cfg.stride));
    }
}

#[test]
fn zero_input_with_zero_biases_gives_zero_latent() {
    let mut store = ParamStore::new();
    let fe = FrontEnd::new(&mut Builder::new(&mut store, 3, 0), &FrontEndConfig::default()).unwrap();
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::zeros(&[40, 32]));
    let y = fe.forward(&mut g, x).unwrap();
    assert!(g.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn content_gate_saturates_and_never_amplifies() {
    let mut store = ParamStore::new();
    let fe = FrontEnd::new(&mut Builder::new(&mut store, 1, 0), &small_frontend()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let x = random(&mut rng, 6, 4);
    let (wid, bid) = (fe.gate.linear.w, fe.gate.linear.b.unwrap());
    store.get_mut(wid).value = Tensor::zeros(&[4, 4]);
    for (bias, expect_input) in [(1e4, true), (-1e4, false)] {
        store.get_mut(bid).value = Tensor::full(&[1, 4], bias);
        let mut g = Graph::with_params(&store);
        let xv = g.constant(x.clone());
        let y = fe.gate.forward(&mut g, xv).unwrap();
        let want = if expect_input { x.clone() } else { Tensor::zeros(&[6, 4]) };
        assert_eq!(g.value(y), &want);
    }
    let mut store = ParamStore::new();
    let fe = FrontEnd::new(&mut Builder::new(&mut store, 2, 0), &small_frontend()).unwrap();
    let mut g = Graph::with_params(&store);
    let xv = g.constant(x.clone());
    let y = fe.gate.forward(&mut g, xv).unwrap();
    for (o, i) in g.value(y).data().iter().zip(x.data()) {
        assert!(o.abs() <= i.abs());
    }
}

#[test]
fn frontend_gradients_match_finite_differences() {
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let fe = FrontEnd::new(&mut Builder::new(&mut store, seed, 0), &small_frontend()).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(&store, &[random(&mut rng, 9, 6)], |g, v| {
            let y = fe.forward(g, v[0])?;
            Ok(project(g, y, seed)?)
        });
    }
}

// ------------------------------------------------------- day calibration

fn calibration(kind: DayCalKind, phi: Phi, dim: usize, seed: u64) -> (ParamStore, DayCalibration) {
    let mut store = ParamStore::new();
    let cfg = DayCalConfig {
        kind,
        phi,
        embed_dim: 3,
        scalpel_hidden: 5,
    };
    let cal = DayCalibration::new(&mut Builder::new(&mut store, seed, 0), &cfg, dim, &[0, 2]).unwrap();
    (store, cal)
}

fn apply(store: &ParamStore, cal: &DayCalibration, x: &Tensor, day: usize) -> neuroseq::Result<Tensor> {
    let mut g = Graph::with_params(store);
    let xv = g.constant(x.clone());
    let y = cal.forward(&mut g, xv, day)?;
    Ok(g.value(y).clone())
}

fn max_diff(a: &Tensor, b: &Tensor) -> f64 {
    a.data().iter().zip(b.data()).map(|(x, y)| (x - y).abs()).fold(0.0, f64::max)
}

#[test]
fn unknown_day_is_calibration_missing() {
    for kind in [DayCalKind::Nhs, DayCalKind::Linear] {
        let (store, cal) = calibration(kind, Phi::Gelu, 4, 0);
        let x = Tensor::zeros(&[3, 4]);
        assert!(matches!(apply(&store, &cal, &x, 1), Err(Error::CalibrationMissing { day: 1 })));
        assert!(!cal.has_day(1));
    }
    let (store, cal) = calibration(DayCalKind::None, Phi::Gelu, 4, 0);
    assert_eq!(apply(&store, &cal, &Tensor::full(&[2, 4], 0.5), 7).unwrap(), Tensor::full(&[2, 4], 0.5));
}

#[test]
fn parameter_counts_are_ordered() {
    let count = |kind| {
        let (store, cal) = calibration(kind, Phi::Gelu, 8, 0);
        let audit = cal.audit(&store);
        assert_eq!(audit.total, store.numel());
        audit.total
    };
    let (nhs, lin, none) = (count(DayCalKind::Nhs), count(DayCalKind::Linear), count(DayCalKind::None));
    assert!(nhs > lin && lin > none && none == 0, "{nhs} {lin} {none}");
    assert_eq!(lin, 2 * (8 * 8 + 8));
}

#[test]
fn nhs_algebra_with_identity_phi() {
    let dim = 4;
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let x = random(&mut rng, 5, dim);
    let (mut store, cal) = calibration(DayCalKind::Nhs, Phi::Identity, dim, 3);

    // Hammer is the identity map and the gate is saturated open.
    set(&mut store, "daycal.day0.gate", Tensor::full(&[1, 1], 40.0));
    assert!(max_diff(&apply(&store, &cal, &x, 0).unwrap(), &x) < 1e-12);

    // Scalpel is the identity modulation at initialization; gate closed.
    let mut w = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        w.set(i, i, 3.0);
    }
    set(&mut store, "daycal.day0.hammer_w", w);
    set(&mut store, "daycal.day0.gate", Tensor::full(&[1, 1], -40.0));
    assert!(max_diff(&apply(&store, &cal, &x, 0).unwrap(), &x) < 1e-12);

    // Hammer doubles, scalpel zeroes (gamma = 0, beta = 0), even blend.
    let mut w = Tensor::zeros(&[dim, dim]);
    for i in 0..dim {
        w.set(i, i, 2.0);
    }
    set(&mut store, "daycal.day0.hammer_w", w);
    set(&mut store, "daycal.day0.gate", Tensor::full(&[1, 1], 0.0));
    let mut out_b = Tensor::zeros(&[1, 2 * dim]);
    for i in 0..dim {
        out_b.set(0, i, -1.0);
    }
    set(&mut store, "daycal.scalpel.out.b", out_b);
    assert!(max_diff(&apply(&store, &cal, &x, 0).unwrap(), &x) < 1e-12);
}

#[test]
fn nhs_initialization_is_near_gelu() {
    let (store, cal) = calibration(DayCalKind::Nhs, Phi::Gelu, 6, 4);
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = random(&mut rng, 7, 6);
    let y = apply(&store, &cal, &x, 2).unwrap();
    let want = x.map(gelu);
    let rel = y.zip_map(&want, |a, b| a - b).frobenius_norm() / x.frobenius_norm();
    assert!(rel < 1e-6, "{rel}");
    assert_eq!(cal.gate_value(&store, 2).unwrap(), Some(0.5));
}

#[test]
fn linear_equals_saturated_nhs() {
    let dim = 4;
    let (mut nhs_store, nhs) = calibration(DayCalKind::Nhs, Phi::Identity, dim, 5);
    let (mut lin_store, lin) = calibration(DayCalKind::Linear, Phi::Identity, dim, 6);
    let mut rng = ChaCha8Rng::seed_from_u64(9);
    let w = random(&mut rng, dim, dim);
    let b = random(&mut rng, 1, dim);
    for s in [&mut nhs_store, &mut lin_store] {
        set(s, "daycal.day2.hammer_w", w.clone());
        set(s, "daycal.day2.hammer_b", b.clone());
    }
    set(&mut nhs_store, "daycal.day2.gate", Tensor::full(&[1, 1], 40.0));
    let x = random(&mut rng, 6, dim);
    let a = apply(&nhs_store, &nhs, &x, 2).unwrap();
    let c = apply(&lin_store, &lin, &x, 2).unwrap();
    assert!(max_diff(&a, &c) < 1e-9);
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(32))]
    #[test]
    fn nhs_output_is_convex_in_the_gate(logit in -6.0f64..6.0, seed in 0u64..1000) {
        let dim = 3;
        let (mut store, cal) = calibration(DayCalKind::Nhs, Phi::Identity, dim, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        set(&mut store, "daycal.day0.hammer_w", random(&mut rng, dim, dim));
        set(&mut store, "daycal.scalpel.out.w", random(&mut rng, 5, 2 * dim));
        let x = random(&mut rng, 4, dim);
        let at = |store: &mut ParamStore, l: f64| {
            set(store, "daycal.day0.gate", Tensor::full(&[1, 1], l));
            apply(store, &cal, &x, 0).unwrap()
        };
        let hammer = at(&mut store, 60.0);
        let scalpel = at(&mut store, -60.0);
        let mixed = at(&mut store, logit);
        let gv = 1.0 / (1.0 + (-logit).exp());
        let want = hammer.zip_map(&scalpel, |h, s| gv * h + (1.0 - gv) * s);
        prop_assert!(max_diff(&mixed, &want) < 1e-9);
    }
}

#[test]
fn nhs_gradients_match_finite_differences() {
    for seed in 0..3 {
        let (mut store, cal) = calibration(DayCalKind::Nhs, Phi::Gelu, 4, seed);
        let mut rng = ChaCha8Rng::seed_from_u64(seed + 100);
        // Move away from the zero initialization so every path carries gradient.
        set(&mut store, "daycal.scalpel.out.w", random(&mut rng, 5, 8));
        set(&mut store, "daycal.day0.gate", random(&mut rng, 1, 1));
        let x = random(&mut rng, 5, 4);
        check(&store, &[x], |g, v| {
            let y = cal.forward(g, v[0], 0)?;
            Ok(project(g, y, seed)?)
        });
    }
}

// ------------------------------------------------------------- seq2seq

fn tiny_transformer(positional: bool) -> TransformerConfig {
    TransformerConfig {
        d_model: 8,
        heads: 2,
        encoder_layers: 2,
        phoneme_layers: 1,
        word_layers: 1,
        ffn: 12,
        positional,
    }
}

#[test]
fn encoder_shapes_and_attention_rows() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut Builder::new(&mut store, 0, 0), &tiny_transformer(true), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::with_params(&store);
    let x = g.constant(random(&mut rng, 7, 5));
    let out = enc.forward(&mut g, x, &mut Ctx::capture()).unwrap();
    assert_eq!(out.states.len(), 2);
    assert_eq!(g.shape(out.memory), &[7, 8]);
    assert_eq!(out.attention.len(), 2);
    for a in &out.attention {
        assert_eq!(a.shape(), &[7, 7]);
        for r in 0..7 {
            assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
        }
    }
}

#[test]
fn encoder_without_positions_is_permutation_equivariant() {
    let mut store = ParamStore::new();
    let enc = Encoder::new(&mut Builder::new(&mut store, 1, 0), &tiny_transformer(false), 5).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = random(&mut rng, 6, 5);
    let perm = [3, 0, 5, 1, 4, 2];
    let mut px = Tensor::zeros(&[6, 5]);
    for (i, &p) in perm.iter().enumerate() {
        px.row_mut(i).copy_from_slice(x.row(p));
    }
    let run = |t: &Tensor| {
        let mut g = Graph::with_params(&store);
        let xv = g.constant(t.clone());
        let m = enc.forward(&mut g, xv, &mut Ctx::eval()).unwrap().memory;
        g.value(m).clone()
    };
    let (y, py) = (run(&x), run(&px));
    for (i, &p) in perm.iter().enumerate() {
        for c in 0..8 {
            assert!((py.get(i, c) - y.get(p, c)).abs() < 1e-10);
        }
    }
}

#[test]
fn decoder_is_causal_and_checks_tokens() {
    let mut store = ParamStore::new();
    let cfg = tiny_transformer(true);
    let dec = TokenDecoder::new(&mut Builder::new(&mut store, 2, 0), "dec", &cfg, 2, 10, 6).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let memory = random(&mut rng, 4, 6);
    let run = |tokens: &[usize]| {
        let mut g = Graph::with_params(&store);
        let m = g.constant(memory.clone());
        let out = dec.forward(&mut g, m, tokens, &mut Ctx::capture()).unwrap();
        for a in out.self_attention.iter().chain(&out.cross_attention) {
            for r in 0..a.rows() {
                assert!((a.row(r).iter().sum::<f64>() - 1.0).abs() < 1e-9);
            }
        }
        g.value(out.logits).clone()
    };
    let a = run(&[8, 1, 2, 3, 4]);
    let b = run(&[8, 1, 2, 7, 9]);
    assert_eq!(a.shape(), &[5, 10]);
    for t in 0..3 {
        assert_eq!(a.row(t), b.row(t));
    }
    assert_ne!(a.row(3), b.row(3));

    let mut g = Graph::with_params(&store);
    let m = g.constant(memory.clone());
    assert!(matches!(dec.forward(&mut g, m, &[8, 10], &mut Ctx::eval()), Err(Error::InvalidTarget(_))));
}

#[test]
fn encoder_layer_gradients_match_finite_differences() {
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let layer = EncoderLayer::new(&mut Builder::new(&mut store, seed, 0), "l", 4, 2, 6).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(&store, &[random(&mut rng, 5, 4)], |g, v| {
            let (y, _) = layer.forward(g, v[0], &mut Ctx::eval())?;
            Ok(project(g, y, seed)?)
        });
    }
}

#[test]
fn token_decoder_gradients_match_finite_differences() {
    for seed in 0..2 {
        let mut store = ParamStore::new();
        let cfg = TransformerConfig {
            d_model: 4,
            heads: 2,
            ffn: 6,
            ..tiny_transformer(true)
        };
        let dec = TokenDecoder::new(&mut Builder::new(&mut store, seed, 0), "dec", &cfg, 1, 6, 4).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(&store, &[random(&mut rng, 3, 4)], |g, v| {
            let out = dec.forward(g, v[0], &[4, 0, 2], &mut Ctx::eval())?;
            Ok(g.cross_entropy(out.logits, &[0, 2, 5], None)?)
        });
    }
}

#[test]
fn mfcc_head_losses() {
    let mut store = ParamStore::new();
    let head = MfccHead::new(&mut Builder::new(&mut store, 0, 0), 3).unwrap();
    let target_row: Vec<f64> = (0..14).map(|i| i as f64 * 0.1 - 0.5).collect();
    set(&mut store, "mfcc_head.w", Tensor::zeros(&[3, 14]));
    set(&mut store, "mfcc_head.b", Tensor::matrix(1, 14, target_row.clone()).unwrap());
    let targets = Tensor::from_rows(&[target_row.clone(), target_row.clone()]).unwrap();
    let mut g = Graph::with_params(&store);
    let s = g.constant(Tensor::full(&[2, 3], 0.7));
    let l = head.loss(&mut g, s, &targets).unwrap();
    assert_eq!(g.value(l).item(), 0.0);

    // Zero prediction against a hand-picked 2 x 14 target.
    set(&mut store, "mfcc_head.b", Tensor::zeros(&[1, 14]));
    let mut rows = vec![vec![0.0; 14], vec![0.0; 14]];
    rows[0][0] = 1.0;
    rows[1][5] = -2.0;
    rows[1][13] = 3.0;
    let targets = Tensor::from_rows(&rows).unwrap();
    let mut g = Graph::with_params(&store);
    let s = g.constant(Tensor::full(&[2, 3], 0.7));
    let l = head.loss(&mut g, s, &targets).unwrap();
    assert!((g.value(l).item() - 14.0 / 28.0).abs() < 1e-15);

    let mut g = Graph::with_params(&store);
    let s = g.constant(Tensor::full(&[2, 3], 0.7));
    assert!(matches!(head.loss(&mut g, s, &Tensor::zeros(&[2, 13])), Err(Error::InvalidTarget(_))));
}

#[test]
fn pool_rows_averages_groups() {
    let x = Tensor::matrix(5, 1, vec![1.0, 3.0, 5.0, 7.0, 9.0]).unwrap();
    assert_eq!(pool_rows(&x, 2).data(), &[2.0, 6.0, 9.0]);
}

fn tiny_model(variant: Variant, mfcc_head: bool, word_decoder: bool) -> (ParamStore, Model) {
    let model = ModelConfig {
        variant,
        frontend: FrontEndConfig {
            channels: 2,
            kernel: 3,
            layers: 1,
            latent_dim: 4,
            stride: 2,
        },
        daycal: DayCalConfig {
            embed_dim: 2,
            scalpel_hidden: 3,
            ..DayCalConfig::default()
        },
        transformer: TransformerConfig {
            d_model: 4,
            heads: 2,
            ffn: 6,
            ..tiny_transformer(true)
        },
        gru: GruConfig {
            hidden: 3,
            layers: 2,
            bidirectional: false,
        },
        mfcc_tap: 1,
    };
    let arch = Architecture {
        model,
        days: vec![0],
        n_words: 5,
        mfcc_head,
        word_decoder,
    };
    let mut store = ParamStore::new();
    let m = Model::build(&mut store, &arch, 0).unwrap();
    (store, m)
}

fn tiny_example(phonemes: Vec<usize>) -> neuroseq::dataset::Example {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    neuroseq::dataset::Example {
        day: 0,
        features: random(&mut rng, 12, 4),
        phonemes,
        words: vec![1, 3],
        text: "x y".into(),
        mfcc: random(&mut rng, 12, 14),
    }
}

#[test]
fn blank_and_special_targets_are_rejected() {
    for variant in [Variant::Seq2seq, Variant::Ctc] {
        let (store, model) = tiny_model(variant, true, false);
        for bad in [PhonemeVocab::BLANK, PhonemeVocab::EOS] {
            let mut g = Graph::with_params(&store);
            let ex = tiny_example(vec![1, bad]);
            let r = model.loss(&mut g, &ex, &Default::default(), &mut Ctx::eval());
            assert!(matches!(r, Err(Error::InvalidTarget(_))), "{variant:?} {bad}");
        }
    }
}

#[test]
fn stage_two_model_has_no_mfcc_head() {
    let (store, model) = tiny_model(Variant::Seq2seq, false, true);
    assert!(model.has_word_decoder());
    let mut g = Graph::with_params(&store);
    let x = g.constant(tiny_example(vec![1]).features);
    let enc = model.encode(&mut g, x, 0, &mut Ctx::eval()).unwrap();
    assert!(model.mfcc_prediction(&mut g, &enc).unwrap().is_none());
    assert!(store.names().all(|n| !n.starts_with("mfcc_head")));
}

#[test]
fn full_model_gradients_match_finite_differences() {
    for variant in [Variant::Seq2seq, Variant::Ctc] {
        let (store, model) = tiny_model(variant, true, variant == Variant::Seq2seq);
        let ex = tiny_example(vec![1, 4, 4]);
        check(&store, &[], |g, _| {
            let weights = neuroseq::model::LossWeights {
                mfcc: 0.5,
                ..Default::default()
            };
            Ok(model.loss(g, &ex, &weights, &mut Ctx::eval())?.total)
        });
    }
}

// ------------------------------------------------------------------ CTC

fn log_softmax(t: &Tensor) -> Tensor {
    let mut out = t.clone();
    for r in 0..t.rows() {
        let m = t.row(r).iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = m + t.row(r).iter().map(|v| (v - m).exp()).sum::<f64>().ln();
        out.row_mut(r).iter_mut().for_each(|v| *v -= lse);
    }
    out
}

/// Sums path probabilities over all `V^T` frame paths.
fn brute_force_nll(lp: &Tensor, target: &[usize], blank: usize) -> f64 {
    let (t, v) = (lp.rows(), lp.cols());
    let mut total = 0.0;
    let mut path = vec![0usize; t];
    for code in 0..v.pow(t as u32) {
        let mut c = code;
        for p in path.iter_mut() {
            *p = c % v;
            c /= v;
        }
        if collapse(&path, blank) == target {
            total += path.iter().enumerate().map(|(i, &k)| lp.get(i, k)).sum::<f64>().exp();
        }
    }
    -total.ln()
}

#[test]
fn ctc_single_label_examples() {
    let half = (0.5f64).ln();
    let lp = Tensor::matrix(1, 2, vec![half, half]).unwrap();
    assert!((ctc_neg_log_likelihood(&lp, &[0], 1).unwrap() - 0.6931).abs() < 1e-4);
    let lp = Tensor::matrix(2, 2, vec![half, half, half, half]).unwrap();
    // Paths a-a, a-blank, blank-a: 3/4.
    assert!((ctc_neg_log_likelihood(&lp, &[0], 1).unwrap() - 0.2877).abs() < 1e-4);
}

#[test]
fn ctc_matches_exhaustive_enumeration() {
    let mut rng = ChaCha8Rng::seed_from_u64(17);
    let mut done = 0;
    while done < 60 {
        let v = rng.gen_range(2..=4);
        let t = rng.gen_range(1..=6);
        let len = rng.gen_range(0..=3);
        let blank = v - 1;
        let target: Vec<usize> = (0..len).map(|_| rng.gen_range(0..blank)).collect();
        if min_frames(&target) > t {
            continue;
        }
        let lp = log_softmax(&random(&mut rng, t, v).map(|x| 2.0 * x));
        let got = ctc_neg_log_likelihood(&lp, &target, blank).unwrap();
        let want = brute_force_nll(&lp, &target, blank);
        assert!((got - want).abs() < 1e-9, "{target:?} {got} {want}");
        done += 1;
    }
}

#[test]
fn ctc_probabilities_sum_to_one() {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let lp = log_softmax(&random(&mut rng, 3, 2));
    // With one label and T = 3 the feasible targets are [], [a] and [a, a].
    let total: f64 = [vec![], vec![0], vec![0, 0]]
        .iter()
        .map(|t| (-ctc_neg_log_likelihood(&lp, t, 1).unwrap()).exp())
        .sum();
    assert!((total - 1.0).abs() < 1e-12, "{total}");
}

#[test]
fn ctc_rejects_bad_inputs() {
    let lp = log_softmax(&Tensor::zeros(&[2, 3]));
    assert!(matches!(ctc_neg_log_likelihood(&lp, &[0, 2], 2), Err(Error::InvalidTarget(_))));
    assert!(matches!(
        ctc_neg_log_likelihood(&lp, &[0, 0], 2),
        Err(Error::InfeasibleAlignment { frames: 2, required: 3 })
    ));
    assert_eq!(min_frames(&[1, 1, 2, 2, 2]), 8);
}

#[test]
fn ctc_gradients_match_finite_differences() {
    let cfg = GradCheckConfig::with_tol(1e-4);
    for seed in 0..5 {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let logits = random(&mut rng, 6, 4);
        let target = [0, 2, 2];
        let report = grad_check_with_params(
            &ParamStore::new(),
            &[logits],
            |g, v| {
                let lp = g.log_softmax_rows(v[0]);
                ctc_loss(g, lp, &target, 3).map_err(|e| match e {
                    Error::Tensor(t) => t,
                    other => panic!("{other}"),
                })
            },
            &cfg,
        )
        .unwrap();
        assert!(report.passed, "{report:?}");
    }
}

#[test]
fn greedy_ctc_decoding() {
    let blank = 2;
    let onehot = |path: &[usize]| {
        let mut t = Tensor::zeros(&[path.len(), 3]);
        for (i, &k) in path.iter().enumerate() {
            t.set(i, k, 1.0);
        }
        t
    };
    assert_eq!(ctc_greedy_decode(&onehot(&[0, 0, 2, 0]), blank), vec![0, 0]);
    assert_eq!(ctc_greedy_decode(&onehot(&[2, 2, 2]), blank), Vec::<usize>::new());
    assert_eq!(ctc_greedy_decode(&onehot(&[1, 0, 0, 1]), blank), vec![1, 0, 1]);
}

// ------------------------------------------------------------------ GRU

#[test]
fn zero_weight_gru_gives_bias_logits() {
    let mut store = ParamStore::new();
    let (gru, head) = {
        let mut b = Builder::new(&mut store, 0, 0);
        let cfg = GruConfig {
            hidden: 3,
            layers: 2,
            bidirectional: true,
        };
        (Gru::new(&mut b, &cfg, 4).unwrap(), CtcHead::new(&mut b, 6, 5).unwrap())
    };
    let names: Vec<String> = store.names().filter(|n| n.starts_with("gru.")).map(String::from).collect();
    for n in names {
        let id = store.id(&n).unwrap();
        let shape = store.value(id).shape().to_vec();
        store.get_mut(id).value = Tensor::zeros(&shape);
    }
    let bias = Tensor::matrix(1, 5, vec![0.1, -0.2, 0.3, 0.0, 1.5]).unwrap();
    set(&mut store, "ctc_head.b", bias.clone());
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    let mut g = Graph::with_params(&store);
    let x = g.constant(random(&mut rng, 4, 4));
    let states = gru.forward(&mut g, x).unwrap();
    let logits = head.forward(&mut g, *states.last().unwrap()).unwrap();
    for r in 0..4 {
        assert_eq!(g.value(logits).row(r), bias.row(0));
    }
}

#[test]
fn gru_step_matches_hand_computation() {
    let mut store = ParamStore::new();
    let cell = GruCell::new(&mut Builder::new(&mut store, 0, 0), "cell", 1, 2).unwrap();
    // Columns ordered r1 r2 z1 z2 n1 n2.
    let wi = Tensor::matrix(1, 6, vec![0.5, -1.0, 0.25, 0.0, 1.0, -0.5]).unwrap();
    let bi = Tensor::matrix(1, 6, vec![0.0, 0.1, 0.0, 0.2, 0.0, 0.3]).unwrap();
    let wh = Tensor::matrix(2, 6, vec![1.0, 0.0, 0.5, 0.0, 2.0, 0.0, 0.0, 1.0, 0.0, 0.5, 0.0, 2.0]).unwrap();
    let bh = Tensor::matrix(1, 6, vec![0.0, 0.0, 0.0, 0.0, 0.1, -0.1]).unwrap();
    store.get_mut(cell.w_input).value = wi.clone();
    store.get_mut(cell.b_input).value = bi.clone();
    store.get_mut(cell.w_hidden).value = wh.clone();
    store.get_mut(cell.b_hidden).value = bh.clone();

    let sig = |v: f64| 1.0 / (1.0 + (-v).exp());
    let xs = [1.0, -2.0];
    let mut h = [0.0f64; 2];
    let mut want = Vec::new();
    for &x in &xs {
        let pre = |c: usize| x * wi.get(0, c) + bi.get(0, c);
        let hid = |c: usize| h[0] * wh.get(0, c) + h[1] * wh.get(1, c) + bh.get(0, c);
        let mut next = [0.0; 2];
        for j in 0..2 {
            let r = sig(pre(j) + hid(j));
            let z = sig(pre(2 + j) + hid(2 + j));
            let n = (pre(4 + j) + r * hid(4 + j)).tanh();
            next[j] = (1.0 - z) * n + z * h[j];
        }
        h = next;
        want.extend(h);
    }
    let mut g = Graph::with_params(&store);
    let x = g.constant(Tensor::matrix(2, 1, xs.to_vec()).unwrap());
    let out = cell.forward(&mut g, x, false).unwrap();
    for (a, b) in g.value(out).data().iter().zip(&want) {
        assert!((a - b).abs() < 1e-14);
    }
}

#[test]
fn gru_gradients_match_finite_differences() {
    for seed in 0..3 {
        let mut store = ParamStore::new();
        let cfg = GruConfig {
            hidden: 3,
            layers: 2,
            bidirectional: true,
        };
        let gru = Gru::new(&mut Builder::new(&mut store, seed, 0), &cfg, 2).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        check(&store, &[random(&mut rng, 4, 2)], |g, v| {
            let states = gru.forward(g, v[0])?;
            Ok(project(g, *states.last().unwrap(), seed)?)
        });
    }
}
