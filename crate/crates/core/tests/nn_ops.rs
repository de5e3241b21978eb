mod common;

use common::{grad_check, op_cases, randn, store_grad_check};
use predann::nn::layers::{Attention, Block};
use predann::nn::{Graph, ParamStore, Tape, Tensor};
use predann::rng::substream;

#[test]
fn every_op_matches_central_differences() {
    for (name, inputs, build) in op_cases() {
        let err = grad_check(&inputs, 1e-3, |t, v| build(t, v));
        assert!(err < 1e-4, "{name}: relative error {err:e}");
    }
}

#[test]
fn layer_norm_of_constant_is_zero() {
    let mut t: Tape<'_, f64> = Tape::new();
    let x = t.leaf(Tensor::full(&[2, 5], 3.7), false);
    let g = t.leaf(Tensor::full(&[5], 1.0), false);
    let b = t.leaf(Tensor::zeros(&[5]), false);
    let y = t.layer_norm(x, g, b, 1e-5).unwrap();
    assert!(t.value(y).data().iter().all(|&v| v == 0.0));
}

#[test]
fn conv_identity_kernel_passes_input_through() {
    let mut t: Tape<'_, f64> = Tape::new();
    let xv = randn(&[2, 1, 9], 3);
    let x = t.leaf(xv.clone(), false);
    let w = t.leaf(Tensor::new(&[1, 1, 1], vec![1.0]).unwrap(), false);
    let b = t.leaf(Tensor::zeros(&[1]), false);
    let y = t.conv1d(x, w, b, 1).unwrap();
    assert_eq!(t.value(y).data(), xv.data());
}

#[test]
fn softmax_rows_are_distributions() {
    let mut t: Tape<'_, f64> = Tape::new();
    let x = t.leaf(randn(&[6, 7], 4).map_values(|v| v * 30.0), false);
    let y = t.softmax(x);
    for r in 0..6 {
        let row = t.value(y).row(r);
        assert!(row.iter().all(|&p| p >= 0.0));
        assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    }
}

#[test]
fn cross_entropy_values() {
    let mut t: Tape<'_, f64> = Tape::new();
    let x = t.leaf(Tensor::zeros(&[2, 10]), true);
    let l = t.cross_entropy(x, &[3, 9]).unwrap();
    assert!((t.value(l).data()[0] - 10f64.ln()).abs() < 1e-12);

    let x = t.leaf(Tensor::new(&[1, 2], vec![10.0, 0.0]).unwrap(), true);
    let l = t.cross_entropy(x, &[0]).unwrap();
    let expected = -(1.0 / (1.0 + (-10f64).exp())).ln();
    assert!((t.value(l).data()[0] - expected).abs() < 1e-15);
    assert!((expected - 4.54e-5).abs() < 1e-7);

    // Gradient equals softmax - one_hot.
    let g = t.backward_scalar(l).unwrap().get(x).unwrap();
    let p0 = 1.0 / (1.0 + (-10f64).exp());
    assert!((g.data()[0] - (p0 - 1.0)).abs() < 1e-15);
    assert!((g.data()[1] - (1.0 - p0)).abs() < 1e-15);

    assert!(t.cross_entropy(x, &[2]).is_err());
}

#[test]
fn batch_norm_eval_is_affine_and_deterministic() {
    let run = || {
        let mut t: Tape<'_, f64> = Tape::new();
        let x = t.leaf(randn(&[3, 2], 5), false);
        let g = t.leaf(Tensor::new(&[2], vec![2.0, 0.5]).unwrap(), false);
        let b = t.leaf(Tensor::new(&[2], vec![1.0, -1.0]).unwrap(), false);
        let y = t.batch_norm_eval(x, g, b, &[0.5, -0.5], &[4.0, 0.25], 0.0).unwrap();
        t.value(y).clone()
    };
    let y = run();
    assert_eq!(y, run());
    let x = randn(&[3, 2], 5);
    for r in 0..3 {
        let e0 = (x.row(r)[0] - 0.5) / 2.0 * 2.0 + 1.0;
        let e1 = (x.row(r)[1] + 0.5) / 0.5 * 0.5 - 1.0;
        assert!((y.row(r)[0] - e0).abs() < 1e-12);
        assert!((y.row(r)[1] - e1).abs() < 1e-12);
    }
}

fn attention_layer() -> (ParamStore<f64>, Attention) {
    let mut store = ParamStore::new();
    let mut rng = substream(3, "attn", &[]);
    let attn = Attention::new(&mut store, "attn", 8, 2, &mut rng).unwrap();
    (store, attn)
}

#[test]
fn single_token_attention_returns_projected_value() {
    let (mut store, attn) = attention_layer();
    // Identity output projection: the result is exactly the value row.
    *store.get_mut(attn.proj.w) = Tensor::from_fn(&[8, 8], |i| if i / 8 == i % 8 { 1.0 } else { 0.0 });
    let x = randn(&[1, 8], 7);
    let mut g = Graph::new(&store);
    let xv = g.input(x.clone());
    let y = attn.forward(&mut g, xv).unwrap();
    let wqkv = store.get(attn.qkv.w);
    let bqkv = store.get(attn.qkv.b);
    for j in 0..8 {
        let v: f64 = (0..8).map(|k| x.data()[k] * wqkv.data()[k * 24 + 16 + j]).sum::<f64>()
            + bqkv.data()[16 + j];
        assert!((g.tape.value(y).data()[j] - v).abs() < 1e-12);
    }
}

#[test]
fn attention_is_permutation_equivariant() {
    let (store, attn) = attention_layer();
    let x = randn(&[4, 8], 8);
    let perm = [2usize, 0, 3, 1];
    let xp = Tensor::new(&[4, 8], perm.iter().flat_map(|&p| x.row(p).to_vec()).collect()).unwrap();
    let run = |x: Tensor<f64>| {
        let mut g = Graph::new(&store);
        let xv = g.input(x);
        let y = attn.forward(&mut g, xv).unwrap();
        g.tape.value(y).clone()
    };
    let (y, yp) = (run(x), run(xp));
    for (i, &p) in perm.iter().enumerate() {
        for (a, b) in yp.row(i).iter().zip(y.row(p)) {
            assert!((a - b).abs() < 1e-12);
        }
    }
}

#[test]
fn transformer_block_gradients() {
    let mut store = ParamStore::new();
    let mut rng = substream(5, "block", &[]);
    let block = Block::new(&mut store, "blk", 8, 2, 2.0, 0.0, &mut rng).unwrap();
    let x = randn(&[3, 8], 9);
    let err = store_grad_check(&store, 1e-3, usize::MAX, |g| {
        let xv = g.input(x.clone());
        block.forward(g, xv).unwrap()
    });
    assert!(err < 1e-4, "block relative error {err:e}");
}
