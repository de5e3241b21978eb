#![allow(dead_code)]

pub mod oracles;
pub mod tiny;

use predann::nn::{Tape, Tensor, Var};
use predann::rng::substream;
use rand::Rng;

/// Central-difference gradient check in f64.
///
/// `build` maps input variables to an arbitrary output; the output is reduced
/// to a scalar by a fixed random projection so every output element matters.
/// Returns the norm-wise relative error `‖analytic − numeric‖ / max(‖analytic‖, ‖numeric‖)`
/// over all inputs.
pub fn grad_check<F>(inputs: &[Tensor<f64>], h: f64, build: F) -> f64
where
    F: Fn(&mut Tape<'_, f64>, &[Var]) -> Var,
{
    let eval = |ins: &[Tensor<f64>]| -> (f64, Vec<Vec<f64>>) {
        let mut tape = Tape::new();
        let vars: Vec<Var> = ins.iter().map(|t| tape.leaf(t.clone(), true)).collect();
        let out = build(&mut tape, &vars);
        let n = tape.value(out).len();
        let mut rng = substream(99, "projection", &[n as u64]);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let flat = tape.reshape(out, &[1, n]).unwrap();
        let wv = tape.leaf(Tensor::new(&[n, 1], w).unwrap(), false);
        let loss = tape.matmul(flat, wv).unwrap();
        let value = tape.value(loss).data()[0];
        let mut grads = tape.backward_scalar(loss).unwrap();
        let g = vars
            .iter()
            .zip(ins)
            .map(|(&v, t)| {
                grads
                    .take(v)
                    .map(|g| g.into_data())
                    .unwrap_or_else(|| vec![0.0; t.len()])
            })
            .collect();
        (value, g)
    };
    let (_, analytic) = eval(inputs);
    let mut diff = 0.0;
    let mut na = 0.0;
    let mut nn = 0.0;
    for (k, t) in inputs.iter().enumerate() {
        for i in 0..t.len() {
            let mut plus = inputs.to_vec();
            plus[k].data_mut()[i] += h;
            let mut minus = inputs.to_vec();
            minus[k].data_mut()[i] -= h;
            let numeric = (eval(&plus).0 - eval(&minus).0) / (2.0 * h);
            let a = analytic[k][i];
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

pub fn randn(shape: &[usize], seed: u64) -> Tensor<f64> {
    let mut rng = substream(seed, "randn", &[]);
    Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
}

pub type Builder = Box<dyn Fn(&mut Tape<'_, f64>, &[Var]) -> Var>;

/// One randomized small instance per differentiable op.
pub fn op_cases() -> Vec<(&'static str, Vec<Tensor<f64>>, Builder)> {
    let mut cases: Vec<(&'static str, Vec<Tensor<f64>>, Builder)> = Vec::new();
    cases.push((
        "linear",
        vec![randn(&[3, 4], 1), randn(&[4, 5], 2), randn(&[5], 3)],
        Box::new(|t, v| {
            let y = t.matmul(v[0], v[1]).unwrap();
            t.add_bias(y, v[2]).unwrap()
        }),
    ));
    cases.push((
        "matmul_nt",
        vec![randn(&[3, 4], 4), randn(&[5, 4], 5)],
        Box::new(|t, v| t.matmul_nt(v[0], v[1]).unwrap()),
    ));
    cases.push((
        "conv1d",
        vec![randn(&[2, 3, 17], 6), randn(&[4, 3, 5], 7), randn(&[4], 8)],
        Box::new(|t, v| t.conv1d(v[0], v[1], v[2], 2).unwrap()),
    ));
    cases.push((
        "group_norm",
        vec![randn(&[2, 4, 6], 9), randn(&[4], 10), randn(&[4], 11)],
        Box::new(|t, v| t.group_norm(v[0], v[1], v[2], 2, 1e-5).unwrap()),
    ));
    cases.push((
        "layer_norm",
        vec![randn(&[3, 6], 12), randn(&[6], 13), randn(&[6], 14)],
        Box::new(|t, v| t.layer_norm(v[0], v[1], v[2], 1e-5).unwrap()),
    ));
    cases.push((
        "batch_norm",
        vec![randn(&[5, 3], 15), randn(&[3], 16), randn(&[3], 17)],
        Box::new(|t, v| t.batch_norm(v[0], v[1], v[2], 1e-5).unwrap().0),
    ));
    cases.push((
        "batch_norm_eval",
        vec![randn(&[4, 3], 18), randn(&[3], 19), randn(&[3], 20)],
        Box::new(|t, v| {
            t.batch_norm_eval(v[0], v[1], v[2], &[0.1, -0.2, 0.3], &[0.5, 1.5, 2.0], 1e-5)
                .unwrap()
        }),
    ));
    cases.push((
        "gelu",
        vec![randn(&[3, 5], 21)],
        Box::new(|t, v| t.gelu(v[0])),
    ));
    cases.push((
        "relu",
        // Keep inputs away from the kink.
        vec![randn(&[3, 5], 22).map_values(|x| if x.abs() < 0.05 { x + 0.2 } else { x })],
        Box::new(|t, v| t.relu(v[0])),
    ));
    cases.push((
        "softmax",
        vec![randn(&[3, 5], 23)],
        Box::new(|t, v| t.softmax(v[0])),
    ));
    cases.push((
        "embedding_lookup",
        vec![randn(&[6, 4], 24)],
        Box::new(|t, v| t.gather_rows(v[0], &[2, 0, 2, 5]).unwrap()),
    ));
    cases.push((
        "add",
        vec![randn(&[3, 4], 25), randn(&[3, 4], 26)],
        Box::new(|t, v| {
            let s = t.add(v[0], v[1]).unwrap();
            t.gelu(s)
        }),
    ));
    cases.push((
        "concat",
        vec![randn(&[2, 3], 27), randn(&[4, 3], 28), randn(&[6, 2], 29)],
        Box::new(|t, v| {
            let r = t.concat_rows(&[v[0], v[1]]).unwrap();
            let c = t.concat_cols(&[r, v[2]]).unwrap();
            let s = t.slice_cols(c, 1, 4).unwrap();
            t.slice_rows(s, 1, 5).unwrap()
        }),
    ));
    cases.push((
        "mean_last",
        vec![randn(&[2, 3, 4], 30)],
        Box::new(|t, v| t.mean_last(v[0]).unwrap()),
    ));
    cases.push((
        "cross_entropy",
        vec![randn(&[4, 5], 31)],
        Box::new(|t, v| t.cross_entropy(v[0], &[0, 3, 4, 3]).unwrap()),
    ));
    cases.push((
        "attention",
        // 3 tokens, 2 heads, d = 8: qkv weight, q/k norm affine, output projection.
        vec![
            randn(&[3, 8], 32),
            randn(&[8, 24], 33),
            randn(&[4], 34),
            randn(&[4], 35),
            randn(&[8, 8], 36),
        ],
        Box::new(|t, v| attention_by_hand(t, v[0], v[1], v[2], v[3], v[4], 2)),
    ));
    cases
}

/// Attention written against the tape directly so it can be grad-checked
/// with every weight as an input.
pub fn attention_by_hand(
    t: &mut Tape<'_, f64>,
    x: Var,
    wqkv: Var,
    qn: Var,
    kn: Var,
    wo: Var,
    heads: usize,
) -> Var {
    let d = t.shape(x)[1];
    let dh = d / heads;
    let zeros = t.leaf(Tensor::zeros(&[dh]), false);
    let qkv = t.matmul(x, wqkv).unwrap();
    let mut outs = Vec::new();
    for h in 0..heads {
        let q = t.slice_cols(qkv, h * dh, (h + 1) * dh).unwrap();
        let k = t.slice_cols(qkv, d + h * dh, d + (h + 1) * dh).unwrap();
        let v = t.slice_cols(qkv, 2 * d + h * dh, 2 * d + (h + 1) * dh).unwrap();
        let q = t.layer_norm(q, qn, zeros, 1e-5).unwrap();
        let k = t.layer_norm(k, kn, zeros, 1e-5).unwrap();
        let s = t.matmul_nt(q, k).unwrap();
        let s = t.scale(s, 1.0 / (dh as f64).sqrt());
        let p = t.softmax(s);
        outs.push(t.matmul(p, v).unwrap());
    }
    let o = t.concat_cols(&outs).unwrap();
    t.matmul(o, wo).unwrap()
}

/// Gradient check of every trainable parameter in `store` against the real
/// layer code. `build` returns any output; it is projected to a scalar as in
/// [`grad_check`]. At most `max_per_tensor` evenly spaced elements of each
/// tensor are perturbed.
pub fn store_grad_check<F>(
    store: &predann::nn::ParamStore<f64>,
    h: f64,
    max_per_tensor: usize,
    build: F,
) -> f64
where
    F: Fn(&mut predann::nn::Graph<'_, f64>) -> Var,
{
    use predann::nn::Graph;
    let eval = |s: &predann::nn::ParamStore<f64>, with_grads: bool| {
        let mut g = Graph::new(s);
        let out = build(&mut g);
        let n = g.tape.value(out).len();
        let mut rng = substream(99, "projection", &[n as u64]);
        let w: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        let flat = g.tape.reshape(out, &[1, n]).unwrap();
        let wv = g.tape.leaf(Tensor::new(&[n, 1], w).unwrap(), false);
        let loss = g.tape.matmul(flat, wv).unwrap();
        let value = g.tape.value(loss).data()[0];
        let grads = if with_grads {
            let mut gr = g.tape.backward_scalar(loss).unwrap();
            g.param_grads(&mut gr)
        } else {
            Vec::new()
        };
        (value, grads)
    };
    let (_, analytic) = eval(store, true);
    let (mut diff, mut na, mut nn) = (0.0, 0.0, 0.0);
    for (pi, p) in store.iter().enumerate() {
        if !p.trainable {
            continue;
        }
        let len = p.value.len();
        let step = len.div_ceil(max_per_tensor.min(len)).max(1);
        let id = store.id(&p.name).unwrap();
        for i in (0..len).step_by(step) {
            let mut plus = store.clone();
            plus.get_mut(id).data_mut()[i] += h;
            let mut minus = store.clone();
            minus.get_mut(id).data_mut()[i] -= h;
            let numeric = (eval(&plus, false).0 - eval(&minus, false).0) / (2.0 * h);
            let a = analytic
                .get(pi)
                .and_then(|g| g.as_ref())
                .map(|g| g.data()[i])
                .unwrap_or(0.0);
            diff += (a - numeric).powi(2);
            na += a * a;
            nn += numeric * numeric;
        }
    }
    let denom = na.sqrt().max(nn.sqrt());
    if denom == 0.0 {
        0.0
    } else {
        diff.sqrt() / denom
    }
}

/// Desk preset rooted at `dir`, with synthetic data, split and teachers built.
pub fn desk_pipeline(dir: &std::path::Path) -> predann::pipeline::Pipeline {
    let mut cfg = predann::config::PipelineConfig::desk();
    cfg.paths.work_dir = dir.to_path_buf();
    desk_pipeline_with(cfg)
}

pub fn desk_pipeline_with(cfg: predann::config::PipelineConfig) -> predann::pipeline::Pipeline {
    let p = predann::pipeline::Pipeline::new(cfg, predann::par::Execution::Parallel).unwrap();
    p.synth().unwrap();
    p.prep().unwrap();
    p.features().unwrap();
    p
}
