//! Every differentiable op checked against central finite differences.

use std::rc::Rc;

use proptest::prelude::*;
use stfm_tensor::nn::{pixel_shuffle, pixel_unshuffle, upsample_nearest, Conv2d};
use stfm_tensor::{concat_cols, concat_rows, randn, rng, Mask, ParamStore, Tape, Tensor, Var};

/// Checks d(sum(f(x) * w))/dx for a random projection `w`.
fn check(inputs: &[Tensor], f: impl for<'t> Fn(&[Var<'t>]) -> Var<'t>) -> f64 {
    let mut r = rng(99);
    let probe = {
        let tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        f(&vars).value().shape().to_vec()
    };
    let w = randn(&probe, &mut r);
    let eval = |xs: &[Tensor]| -> f64 {
        let tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|t| tape.constant(t.clone())).collect();
        let y = f(&vars).value();
        y.data().iter().zip(w.data()).map(|(a, b)| a * b).sum()
    };
    let tape = Tape::new();
    let leaves: Vec<Var> = inputs.iter().map(|t| tape.leaf(t.clone())).collect();
    let y = f(&leaves);
    let loss = y.mul(tape.constant(w.clone())).sum();
    let grads = tape.backward_leaves(loss, &leaves);
    let h = 1e-6;
    let mut worst: f64 = 0.0;
    for (i, input) in inputs.iter().enumerate() {
        let analytic = grads[i].clone().unwrap_or_else(|| Tensor::zeros(input.shape()));
        for j in 0..input.numel() {
            let mut plus: Vec<Tensor> = inputs.to_vec();
            plus[i].data_mut()[j] += h;
            let mut minus: Vec<Tensor> = inputs.to_vec();
            minus[i].data_mut()[j] -= h;
            let numeric = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let a = analytic.data()[j];
            let err = (a - numeric).abs() / (a.abs() + numeric.abs()).max(1e-3);
            worst = worst.max(err);
        }
    }
    worst
}

fn rand(shape: &[usize], seed: u64) -> Tensor {
    randn(shape, &mut rng(seed))
}

#[test]
fn elementwise_ops() {
    let a = rand(&[3, 4], 1);
    let b = rand(&[3, 4], 2);
    assert!(check(&[a.clone(), b.clone()], |v| v[0].add(v[1])) < 1e-6);
    assert!(check(&[a.clone(), b.clone()], |v| v[0].sub(v[1])) < 1e-6);
    assert!(check(&[a.clone(), b.clone()], |v| v[0].mul(v[1])) < 1e-6);
    for (name, err) in [
        ("gelu", check(std::slice::from_ref(&a), |v| v[0].gelu())),
        ("silu", check(std::slice::from_ref(&a), |v| v[0].silu())),
        ("tanh", check(std::slice::from_ref(&a), |v| v[0].tanh())),
        ("sigmoid", check(std::slice::from_ref(&a), |v| v[0].sigmoid())),
        ("exp", check(std::slice::from_ref(&a), |v| v[0].exp())),
        ("square", check(std::slice::from_ref(&a), |v| v[0].square())),
        ("softplus", check(std::slice::from_ref(&a), |v| v[0].softplus())),
        ("sqrt", check(std::slice::from_ref(&a), |v| v[0].square().add_scalar(0.5).sqrt())),
        ("scale", check(std::slice::from_ref(&a), |v| v[0].scale(-0.3).add_scalar(2.0))),
        ("abs", check(std::slice::from_ref(&a), |v| v[0].abs())),
        ("relu", check(std::slice::from_ref(&a), |v| v[0].relu())),
    ] {
        assert!(err < 1e-6, "{name}: {err}");
    }
}

#[test]
fn matmul_family() {
    let a = rand(&[3, 5], 3);
    let b = rand(&[5, 2], 4);
    let c = rand(&[4, 5], 5);
    assert!(check(&[a.clone(), b], |v| v[0].matmul(v[1])) < 1e-5);
    assert!(check(&[a.clone(), c], |v| v[0].matmul_nt(v[1])) < 1e-5);
    assert!(check(&[a], |v| v[0].transpose()) < 1e-5);
}

#[test]
fn broadcast_and_norm() {
    let x = rand(&[4, 6], 6);
    let g = rand(&[6], 7);
    let b = rand(&[6], 8);
    assert!(check(&[x.clone(), b.clone()], |v| v[0].add_bias(v[1])) < 1e-5);
    assert!(check(&[x.clone(), g.clone()], |v| v[0].mul_bias(v[1])) < 1e-5);
    assert!(check(&[x.clone(), g, b], |v| v[0].layer_norm(v[1], v[2], 1e-5)) < 1e-5);
    assert!(check(std::slice::from_ref(&x), |v| v[0].mean_rows()) < 1e-5);
    assert!(check(&[x], |v| v[0].mean()) < 1e-5);
}

#[test]
fn masked_softmax() {
    let x = rand(&[3, 5], 9);
    let mask = Mask::Cols(Rc::from(vec![true, false, true, true, false]));
    assert!(check(std::slice::from_ref(&x), |v| v[0].softmax_rows(None)) < 1e-6);
    assert!(check(std::slice::from_ref(&x), move |v| v[0].softmax_rows(Some(&mask))) < 1e-6);
    let tape = Tape::new();
    let m = Mask::Cols(Rc::from(vec![true, false, true, true, false]));
    let y = tape.constant(x).softmax_rows(Some(&m)).value();
    for r in 0..3 {
        let row = y.row(r);
        assert_eq!(row[1], 0.0);
        assert_eq!(row[4], 0.0);
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }
}

#[test]
fn structural_ops() {
    let a = rand(&[2, 3], 10);
    let b = rand(&[4, 3], 11);
    let c = rand(&[2, 5], 12);
    assert!(check(&[a.clone(), b], |v| concat_rows(&[v[0], v[1]])) < 1e-5);
    assert!(check(&[a.clone(), c], |v| concat_cols(&[v[0], v[1]])) < 1e-5);
    let x = rand(&[5, 4], 13);
    assert!(check(std::slice::from_ref(&x), |v| v[0].slice_rows(1, 3)) < 1e-5);
    assert!(check(std::slice::from_ref(&x), |v| v[0].slice_cols(1, 2)) < 1e-5);
    assert!(check(&[x], |v| v[0].reshape(&[2, 10])) < 1e-5);
}

#[test]
fn image_ops() {
    let img = rand(&[2, 4, 4, 3], 14);
    let e = check(std::slice::from_ref(&img), |v| upsample_nearest(v[0], 2));
    assert!(e < 1e-5, "upsample {e}");
    assert!(check(std::slice::from_ref(&img), |v| pixel_unshuffle(v[0], 2)) < 1e-5);
    let packed = rand(&[1, 2, 2, 12], 15);
    assert!(check(&[packed], |v| pixel_shuffle(v[0], 2)) < 1e-5);

    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "c", 3, 2, 3, 2, 1, &mut rng(16));
    let store = Rc::new(store);
    let s2 = Rc::clone(&store);
    let err = check(&[img], move |v| conv.forward(v[0].tape(), &s2, v[0]));
    assert!(err < 1e-6, "conv {err}");
}

#[test]
fn conv_matches_direct_loop() {
    let mut store = ParamStore::new();
    let conv = Conv2d::new(&mut store, "c", 2, 3, 3, 1, 1, &mut rng(17));
    let x = rand(&[1, 5, 5, 2], 18);
    let tape = Tape::new();
    let y = conv.forward(&tape, &store, tape.constant(x.clone())).value();
    let w = store.value(conv.weight);
    for oy in 0..5 {
        for ox in 0..5 {
            for co in 0..3 {
                let mut acc = 0.0;
                for ky in 0..3 {
                    for kx in 0..3 {
                        let (iy, ix) = (oy as isize + ky as isize - 1, ox as isize + kx as isize - 1);
                        if iy < 0 || ix < 0 || iy >= 5 || ix >= 5 {
                            continue;
                        }
                        for ci in 0..2 {
                            let xv = x.data()[((iy as usize) * 5 + ix as usize) * 2 + ci];
                            acc += xv * w.at2((ky * 3 + kx) * 2 + ci, co);
                        }
                    }
                }
                let got = y.data()[(oy * 5 + ox) * 3 + co];
                assert!((got - acc).abs() < 1e-12);
            }
        }
    }
}

#[test]
fn param_gradients_accumulate_over_reuse() {
    let mut store = ParamStore::new();
    let w = store.add("w", stfm_tensor::ParamKind::Weight, Tensor::new(&[1], vec![3.0]).unwrap());
    let tape = Tape::new();
    let a = tape.param(&store, w);
    let b = tape.param(&store, w);
    let loss = a.mul(b).sum();
    let g = tape.backward(loss, &store);
    assert_eq!(g.get(w).unwrap().data(), &[6.0]);
}

#[test]
fn frozen_params_get_no_gradient() {
    let mut store = ParamStore::new();
    let w = store.add("frozen.w", stfm_tensor::ParamKind::Weight, Tensor::ones(&[2]));
    store.set_trainable("frozen", false);
    let tape = Tape::new();
    let loss = tape.param(&store, w).square().sum();
    let g = tape.backward(loss, &store);
    assert!(g.get(w).is_none());
}

proptest! {
    #[test]
    fn pixel_shuffle_inverts_unshuffle(seed in 0u64..1000) {
        let x = rand(&[1, 4, 6, 2], seed);
        let tape = Tape::new();
        let v = tape.constant(x.clone());
        let back = pixel_shuffle(pixel_unshuffle(v, 2), 2).value();
        prop_assert_eq!(back.data(), x.data());
    }

    #[test]
    fn softmax_rows_are_distributions(seed in 0u64..1000, keep in proptest::collection::vec(any::<bool>(), 6)) {
        prop_assume!(keep.iter().any(|&k| k));
        let x = rand(&[4, 6], seed).map(|v| v * 10.0);
        let tape = Tape::new();
        let y = tape.constant(x).softmax_rows(Some(&Mask::Cols(Rc::from(keep.clone())))).value();
        for r in 0..4 {
            let s: f64 = y.row(r).iter().sum();
            prop_assert!((s - 1.0).abs() < 1e-12);
            for (c, &k) in keep.iter().enumerate() {
                if !k { prop_assert_eq!(y.row(r)[c], 0.0); }
            }
        }
    }
}
