//! Reverse-mode automatic differentiation over a Wengert list.
//!
//! A [`Tape`] records every operation applied to its variables. Calling
//! [`Tape::backward`] sweeps the list in reverse and returns the gradients of
//! every leaf marked as requiring them. Parameter leaves can borrow their
//! values, so building one tape per sample does not copy the model.

use std::borrow::Cow;

use super::tensor::{Real, Tensor};
use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulNt(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Relu(Var),
    MulConst(Var, Vec<T>),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    GroupNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        inv_std: Vec<T>,
    },
    Softmax(Var),
    Conv1d {
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
    },
    MeanLast(Var),
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    Reshape(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

struct Node<'a, T: Real> {
    value: Cow<'a, Tensor<T>>,
    op: Op<T>,
    requires_grad: bool,
}

pub struct Tape<'a, T: Real> {
    nodes: Vec<Node<'a, T>>,
}

/// Gradients produced by [`Tape::backward`], kept for leaf variables only.
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
    shapes: Vec<Vec<usize>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .as_ref()
            .map(|g| Tensor::new(&self.shapes[v.0], g.clone()).expect("grad shape"))
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads[v.0]
            .take()
            .map(|g| Tensor::new(&self.shapes[v.0], g).expect("grad shape"))
    }
}

fn last_dim(shape: &[usize]) -> usize {
    *shape.last().unwrap_or(&1)
}

fn acc<T: Real>(slot: &mut Option<Vec<T>>, len: usize) -> &mut Vec<T> {
    slot.get_or_insert_with(|| vec![T::zero(); len])
}

impl<'a, T: Real> Default for Tape<'a, T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'a, T: Real> Tape<'a, T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Owned(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn leaf_ref(&mut self, t: &'a Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value: Cow::Borrowed(t),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value: Cow::Owned(value),
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn dims2(&self, v: Var) -> Result<(usize, usize)> {
        self.value(v).dims2()
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (k2, n) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!("matmul [{m},{k}] x [{k2},{n}]")));
        }
        let mut out = vec![T::zero(); m * n];
        matmul_into(self.data(a), self.data(b), &mut out, m, k, n);
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` for `a: [m,k]`, `b: [n,k]`.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a)?;
        let (n, k2) = self.dims2(b)?;
        if k != k2 {
            return Err(Error::shape(format!("matmul_nt [{m},{k}] x [{n},{k2}]^T")));
        }
        let (ad, bd) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); m * n];
        for i in 0..m {
            let ar = &ad[i * k..(i + 1) * k];
            for j in 0..n {
                out[i * n + j] = dot(ar, &bd[j * k..(j + 1) * k]);
            }
        }
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(t, Op::MatMulNt(a, b), &[a, b]))
    }

    /// Adds a vector along the last dimension.
    pub fn add_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.value(b).len() != n {
            return Err(Error::shape(format!(
                "bias of {} for last dim {n}",
                self.value(b).len()
            )));
        }
        let bd = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            for (o, &bv) in row.iter_mut().zip(bd) {
                *o += bv;
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::AddBias(x, b), &[x, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(format!(
                "add {:?} + {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.shape(a), out)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        let out: Vec<T> = self.data(x).iter().map(|&v| v * c).collect();
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(t, Op::Scale(x, c), &[x])
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.data(x).iter().map(|&v| gelu(v)).collect();
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(t, Op::Gelu(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self
            .data(x)
            .iter()
            .map(|&v| if v > T::zero() { v } else { T::zero() })
            .collect();
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(t, Op::Relu(x), &[x])
    }

    /// Elementwise product with a constant (non-differentiable) tensor, e.g. a dropout mask.
    pub fn mul_const(&mut self, x: Var, mask: Vec<T>) -> Result<Var> {
        if mask.len() != self.value(x).len() {
            return Err(Error::shape("mask length"));
        }
        let out: Vec<T> = self
            .data(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(t, Op::MulConst(x, mask), &[x]))
    }

    /// Layer normalization over the last dimension with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm affine size"));
        }
        let xd = self.data(x);
        let rows = xd.len() / n;
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); rows];
        for r in 0..rows {
            let xs = &xd[r * n..(r + 1) * n];
            let (mean, var) = mean_var(xs);
            let is = T::one() / (var + T::from_f64(eps)).sqrt();
            inv_std[r] = is;
            for (h, &v) in xhat[r * n..(r + 1) * n].iter_mut().zip(xs) {
                *h = (v - mean) * is;
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % n] + b[i % n])
            .collect();
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Group normalization of `x: [P, C, L]` with per-channel affine.
    pub fn group_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        groups: usize,
        eps: f64,
    ) -> Result<Var> {
        let (p, c, l) = match self.shape(x) {
            &[p, c, l] => (p, c, l),
            s => return Err(Error::shape(format!("group_norm expects [P,C,L], got {s:?}"))),
        };
        if groups == 0 || c % groups != 0 {
            return Err(Error::shape(format!("{c} channels into {groups} groups")));
        }
        if self.value(gamma).len() != c || self.value(beta).len() != c {
            return Err(Error::shape("group_norm affine size"));
        }
        let span = (c / groups) * l;
        let xd = self.data(x);
        let mut xhat = vec![T::zero(); xd.len()];
        let mut inv_std = vec![T::zero(); p * groups];
        for gi in 0..p * groups {
            let xs = &xd[gi * span..(gi + 1) * span];
            let (mean, var) = mean_var(xs);
            let is = T::one() / (var + T::from_f64(eps)).sqrt();
            inv_std[gi] = is;
            for (h, &v) in xhat[gi * span..(gi + 1) * span].iter_mut().zip(xs) {
                *h = (v - mean) * is;
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| {
                let ch = (i / l) % c;
                h * g[ch] + b[ch]
            })
            .collect();
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            t,
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Training-mode batch normalization of `x: [B, n]` over the batch axis.
    ///
    /// Returns the output plus the batch mean and unbiased batch variance, which
    /// the caller folds into its running statistics.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: f64,
    ) -> Result<(Var, Vec<T>, Vec<T>)> {
        let (bsz, n) = self.dims2(x)?;
        if bsz < 2 {
            return Err(Error::shape("batch_norm needs a batch of at least 2"));
        }
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("batch_norm affine size"));
        }
        let xd = self.data(x);
        let mut mean = vec![T::zero(); n];
        let mut var = vec![T::zero(); n];
        let inv_b = T::one() / T::from_f64(bsz as f64);
        for r in 0..bsz {
            for j in 0..n {
                mean[j] += xd[r * n + j];
            }
        }
        for m in &mut mean {
            *m *= inv_b;
        }
        for r in 0..bsz {
            for j in 0..n {
                let d = xd[r * n + j] - mean[j];
                var[j] += d * d;
            }
        }
        let unbiased: Vec<T> = var
            .iter()
            .map(|&v| v / T::from_f64((bsz - 1) as f64))
            .collect();
        for v in &mut var {
            *v *= inv_b;
        }
        let inv_std: Vec<T> = var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let mut xhat = vec![T::zero(); xd.len()];
        for r in 0..bsz {
            for j in 0..n {
                xhat[r * n + j] = (xd[r * n + j] - mean[j]) * inv_std[j];
            }
        }
        let (g, b) = (self.data(gamma), self.data(beta));
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % n] + b[i % n])
            .collect();
        let t = Tensor::new(&[bsz, n], out)?;
        let v = self.push(
            t,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        );
        Ok((v, mean, unbiased))
    }

    /// Inference-mode batch normalization with frozen statistics: an affine map per column.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[T],
        running_var: &[T],
        eps: f64,
    ) -> Result<Var> {
        let n = last_dim(self.shape(x));
        if running_mean.len() != n
            || running_var.len() != n
            || self.value(gamma).len() != n
            || self.value(beta).len() != n
        {
            return Err(Error::shape("batch_norm_eval size"));
        }
        let inv_std: Vec<T> = running_var
            .iter()
            .map(|&v| T::one() / (v + T::from_f64(eps)).sqrt())
            .collect();
        let xhat: Vec<T> = self
            .data(x)
            .iter()
            .enumerate()
            .map(|(i, &v)| (v - running_mean[i % n]) * inv_std[i % n])
            .collect();
        let (g, b) = (self.data(gamma), self.data(beta));
        let out: Vec<T> = xhat
            .iter()
            .enumerate()
            .map(|(i, &h)| h * g[i % n] + b[i % n])
            .collect();
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            t,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    /// Softmax over the last dimension.
    pub fn softmax(&mut self, x: Var) -> Var {
        let n = last_dim(self.shape(x));
        let mut out = self.data(x).to_vec();
        for row in out.chunks_mut(n) {
            softmax_in_place(row);
        }
        let t = Tensor::new(self.shape(x), out).expect("same shape");
        self.push(t, Op::Softmax(x), &[x])
    }

    /// Valid 1-D convolution: `x: [P, Cin, L]`, `w: [Cout, Cin, K]`, `b: [Cout]`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize) -> Result<Var> {
        let (p, cin, l) = match self.shape(x) {
            &[p, c, l] => (p, c, l),
            s => return Err(Error::shape(format!("conv1d input {s:?}"))),
        };
        let (cout, cin2, k) = match self.shape(w) {
            &[o, i, k] => (o, i, k),
            s => return Err(Error::shape(format!("conv1d weight {s:?}"))),
        };
        if cin != cin2 || self.value(b).len() != cout || stride == 0 || k > l {
            return Err(Error::shape(format!(
                "conv1d x[{p},{cin},{l}] w[{cout},{cin2},{k}] stride {stride}"
            )));
        }
        let lout = (l - k) / stride + 1;
        let (xd, wd, bd) = (self.data(x), self.data(w), self.data(b));
        let mut out = vec![T::zero(); p * cout * lout];
        for pi in 0..p {
            for o in 0..cout {
                let orow = &mut out[(pi * cout + o) * lout..(pi * cout + o + 1) * lout];
                for v in orow.iter_mut() {
                    *v = bd[o];
                }
                for i in 0..cin {
                    let xr = &xd[(pi * cin + i) * l..(pi * cin + i + 1) * l];
                    let wr = &wd[(o * cin + i) * k..(o * cin + i + 1) * k];
                    for (t, ov) in orow.iter_mut().enumerate() {
                        *ov += dot(wr, &xr[t * stride..t * stride + k]);
                    }
                }
            }
        }
        let t = Tensor::new(&[p, cout, lout], out)?;
        Ok(self.push(t, Op::Conv1d { x, w, b, stride }, &[x, w, b]))
    }

    /// Mean over the last dimension, dropping it.
    pub fn mean_last(&mut self, x: Var) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 {
            return Err(Error::shape("mean_last needs rank >= 2"));
        }
        let n = last_dim(&shape);
        let inv = T::one() / T::from_f64(n as f64);
        let out: Vec<T> = self
            .data(x)
            .chunks(n)
            .map(|c| c.iter().copied().sum::<T>() * inv)
            .collect();
        let t = Tensor::new(&shape[..shape.len() - 1], out)?;
        Ok(self.push(t, Op::MeanLast(x), &[x]))
    }

    /// Row lookup: `table: [V, n]` indexed by `idx`, giving `[idx.len(), n]`.
    pub fn gather_rows(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let (v, n) = self.dims2(table)?;
        if let Some(&bad) = idx.iter().find(|&&i| i >= v) {
            return Err(Error::shape(format!("row index {bad} out of {v}")));
        }
        let td = self.data(table);
        let mut out = Vec::with_capacity(idx.len() * n);
        for &i in idx {
            out.extend_from_slice(&td[i * n..(i + 1) * n]);
        }
        let t = Tensor::new(&[idx.len(), n], out)?;
        Ok(self.push(
            t,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        ))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let n = self.dims2(parts[0])?.1;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if c != n {
                return Err(Error::shape(format!("concat_rows width {c} vs {n}")));
            }
            rows += r;
            out.extend_from_slice(self.data(p));
        }
        let t = Tensor::new(&[rows, n], out)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let m = self.dims2(parts[0])?.0;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (r, c) = self.dims2(p)?;
            if r != m {
                return Err(Error::shape(format!("concat_cols height {r} vs {m}")));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for (&p, &w) in parts.iter().zip(&widths) {
                out.extend_from_slice(&self.data(p)[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::new(&[m, total], out)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start > end || end > m {
            return Err(Error::shape(format!("rows {start}..{end} of {m}")));
        }
        let out = self.data(x)[start * n..end * n].to_vec();
        let t = Tensor::new(&[end - start, n], out)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims2(x)?;
        if start > end || end > n {
            return Err(Error::shape(format!("cols {start}..{end} of {n}")));
        }
        let w = end - start;
        let xd = self.data(x);
        let mut out = Vec::with_capacity(m * w);
        for i in 0..m {
            out.extend_from_slice(&xd[i * n + start..i * n + end]);
        }
        let t = Tensor::new(&[m, w], out)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape)?;
        Ok(self.push(t, Op::Reshape(x), &[x]))
    }

    /// Mean softmax cross-entropy of `logits: [m, n]` against class indices.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (m, n) = self.dims2(logits)?;
        if targets.len() != m {
            return Err(Error::shape(format!("{} targets for {m} rows", targets.len())));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= n) {
            return Err(Error::invalid(format!("target {bad} out of {n} classes")));
        }
        if m == 0 {
            return Err(Error::invalid("cross_entropy over zero rows"));
        }
        let mut probs = self.data(logits).to_vec();
        let mut loss = T::zero();
        for (row, &t) in probs.chunks_mut(n).zip(targets) {
            loss += -log_softmax_at(row, t);
            softmax_in_place(row);
        }
        let loss = loss / T::from_f64(m as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
        ))
    }

    pub fn backward_scalar(&self, loss: Var) -> Result<Grads<T>> {
        let one = Tensor::scalar(T::one());
        self.backward(&[(loss, &one)])
    }

    /// Reverse sweep seeded with `(variable, upstream gradient)` pairs.
    pub fn backward(&self, seeds: &[(Var, &Tensor<T>)]) -> Result<Grads<T>> {
        let nn = self.nodes.len();
        let mut grads: Vec<Option<Vec<T>>> = (0..nn).map(|_| None).collect();
        for &(v, g) in seeds {
            if g.len() != self.value(v).len() {
                return Err(Error::shape("seed gradient size"));
            }
            let slot = acc(&mut grads[v.0], g.len());
            for (s, &x) in slot.iter_mut().zip(g.data()) {
                *s += x;
            }
        }
        for i in (0..nn).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad || matches!(node.op, Op::Leaf) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }
        let shapes = self
            .nodes
            .iter()
            .map(|n| n.value.shape().to_vec())
            .collect();
        for (i, node) in self.nodes.iter().enumerate() {
            if !matches!(node.op, Op::Leaf) || !node.requires_grad {
                grads[i] = None;
            }
        }
        Ok(Grads { grads, shapes })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let out = self.nodes[i].value.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).dims2().unwrap().1;
                let (ad, bd) = (self.data(a), self.data(b));
                if self.wants(a) {
                    let ga = acc(&mut grads[a.0], m * k);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            ga[r * k + p] += dot(gr, &bd[p * n..(p + 1) * n]);
                        }
                    }
                }
                if self.wants(b) {
                    let gb = acc(&mut grads[b.0], k * n);
                    for r in 0..m {
                        let gr = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let av = ad[r * k + p];
                            axpy(av, gr, &mut gb[p * n..(p + 1) * n]);
                        }
                    }
                }
            }
            &Op::MatMulNt(a, b) => {
                let (m, k) = self.value(a).dims2().unwrap();
                let n = self.value(b).dims2().unwrap().0;
                let (ad, bd) = (self.data(a), self.data(b));
                if self.wants(a) {
                    let ga = acc(&mut grads[a.0], m * k);
                    for r in 0..m {
                        for j in 0..n {
                            axpy(g[r * n + j], &bd[j * k..(j + 1) * k], &mut ga[r * k..(r + 1) * k]);
                        }
                    }
                }
                if self.wants(b) {
                    let gb = acc(&mut grads[b.0], n * k);
                    for r in 0..m {
                        for j in 0..n {
                            axpy(g[r * n + j], &ad[r * k..(r + 1) * k], &mut gb[j * k..(j + 1) * k]);
                        }
                    }
                }
            }
            &Op::AddBias(x, b) => {
                if self.wants(x) {
                    let gx = acc(&mut grads[x.0], g.len());
                    for (s, &v) in gx.iter_mut().zip(g) {
                        *s += v;
                    }
                }
                if self.wants(b) {
                    let n = self.value(b).len();
                    let gb = acc(&mut grads[b.0], n);
                    for row in g.chunks(n) {
                        for (s, &v) in gb.iter_mut().zip(row) {
                            *s += v;
                        }
                    }
                }
            }
            &Op::Add(a, b) => {
                for p in [a, b] {
                    if self.wants(p) {
                        let gp = acc(&mut grads[p.0], g.len());
                        for (s, &v) in gp.iter_mut().zip(g) {
                            *s += v;
                        }
                    }
                }
            }
            &Op::Scale(x, c) => {
                let gx = acc(&mut grads[x.0], g.len());
                for (s, &v) in gx.iter_mut().zip(g) {
                    *s += v * c;
                }
            }
            &Op::Gelu(x) => {
                let xd = self.data(x);
                let gx = acc(&mut grads[x.0], g.len());
                for ((s, &v), &xv) in gx.iter_mut().zip(g).zip(xd) {
                    *s += v * gelu_grad(xv);
                }
            }
            &Op::Relu(x) => {
                let xd = self.data(x);
                let gx = acc(&mut grads[x.0], g.len());
                for ((s, &v), &xv) in gx.iter_mut().zip(g).zip(xd) {
                    if xv > T::zero() {
                        *s += v;
                    }
                }
            }
            Op::MulConst(x, mask) => {
                let gx = acc(&mut grads[x.0], g.len());
                for ((s, &v), &m) in gx.iter_mut().zip(g).zip(mask) {
                    *s += v * m;
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = self.value(*gamma).len();
                self.norm_affine_grads(*gamma, *beta, g, xhat, n, 1, grads);
                if self.wants(*x) {
                    let gd = self.data(*gamma);
                    let gx = acc(&mut grads[x.0], g.len());
                    let mut dxhat = vec![T::zero(); n];
                    for (r, &is) in inv_std.iter().enumerate() {
                        for j in 0..n {
                            dxhat[j] = g[r * n + j] * gd[j];
                        }
                        norm_input_grad(
                            &dxhat,
                            &xhat[r * n..(r + 1) * n],
                            is,
                            &mut gx[r * n..(r + 1) * n],
                        );
                    }
                }
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                xhat,
                inv_std,
            } => {
                let shape = self.shape(*x);
                let (c, l) = (shape[1], shape[2]);
                self.norm_affine_grads(*gamma, *beta, g, xhat, c, l, grads);
                if self.wants(*x) {
                    let span = (c / groups) * l;
                    let gd = self.data(*gamma);
                    let gx = acc(&mut grads[x.0], g.len());
                    let mut dxhat = vec![T::zero(); span];
                    for (gi, &is) in inv_std.iter().enumerate() {
                        let base = gi * span;
                        for (j, d) in dxhat.iter_mut().enumerate() {
                            let ch = ((base + j) / l) % c;
                            *d = g[base + j] * gd[ch];
                        }
                        norm_input_grad(
                            &dxhat,
                            &xhat[base..base + span],
                            is,
                            &mut gx[base..base + span],
                        );
                    }
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = inv_std.len();
                let bsz = g.len() / n;
                self.norm_affine_grads(*gamma, *beta, g, xhat, n, 1, grads);
                if self.wants(*x) {
                    let gd = self.data(*gamma);
                    let gx = acc(&mut grads[x.0], g.len());
                    let mut dxhat = vec![T::zero(); bsz];
                    let mut col = vec![T::zero(); bsz];
                    let mut out_col = vec![T::zero(); bsz];
                    for j in 0..n {
                        for r in 0..bsz {
                            dxhat[r] = g[r * n + j] * gd[j];
                            col[r] = xhat[r * n + j];
                            out_col[r] = T::zero();
                        }
                        norm_input_grad(&dxhat, &col, inv_std[j], &mut out_col);
                        for r in 0..bsz {
                            gx[r * n + j] += out_col[r];
                        }
                    }
                }
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let n = inv_std.len();
                self.norm_affine_grads(*gamma, *beta, g, xhat, n, 1, grads);
                if self.wants(*x) {
                    let gd = self.data(*gamma);
                    let gx = acc(&mut grads[x.0], g.len());
                    for (i, (s, &v)) in gx.iter_mut().zip(g).enumerate() {
                        *s += v * gd[i % n] * inv_std[i % n];
                    }
                }
            }
            &Op::Softmax(x) => {
                let n = last_dim(self.shape(x));
                let gx = acc(&mut grads[x.0], g.len());
                for ((gr, yr), sr) in g.chunks(n).zip(out.chunks(n)).zip(gx.chunks_mut(n)) {
                    let s = dot(gr, yr);
                    for j in 0..n {
                        sr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            &Op::Conv1d { x, w, b, stride } => {
                let (p, cin, l) = {
                    let s = self.shape(x);
                    (s[0], s[1], s[2])
                };
                let (cout, k) = {
                    let s = self.shape(w);
                    (s[0], s[2])
                };
                let lout = (l - k) / stride + 1;
                if self.wants(b) {
                    let gb = acc(&mut grads[b.0], cout);
                    for pi in 0..p {
                        for (o, s) in gb.iter_mut().enumerate() {
                            let base = (pi * cout + o) * lout;
                            *s += g[base..base + lout].iter().copied().sum::<T>();
                        }
                    }
                }
                let (xd, wd) = (self.data(x), self.data(w));
                if self.wants(w) {
                    let gw = acc(&mut grads[w.0], cout * cin * k);
                    for pi in 0..p {
                        for o in 0..cout {
                            let gr = &g[(pi * cout + o) * lout..(pi * cout + o + 1) * lout];
                            for i in 0..cin {
                                let xr = &xd[(pi * cin + i) * l..(pi * cin + i + 1) * l];
                                let gwr = &mut gw[(o * cin + i) * k..(o * cin + i + 1) * k];
                                for (t, &gv) in gr.iter().enumerate() {
                                    axpy(gv, &xr[t * stride..t * stride + k], gwr);
                                }
                            }
                        }
                    }
                }
                if self.wants(x) {
                    let gx = acc(&mut grads[x.0], p * cin * l);
                    for pi in 0..p {
                        for o in 0..cout {
                            let gr = &g[(pi * cout + o) * lout..(pi * cout + o + 1) * lout];
                            for i in 0..cin {
                                let wr = &wd[(o * cin + i) * k..(o * cin + i + 1) * k];
                                let gxr = &mut gx[(pi * cin + i) * l..(pi * cin + i + 1) * l];
                                for (t, &gv) in gr.iter().enumerate() {
                                    axpy(gv, wr, &mut gxr[t * stride..t * stride + k]);
                                }
                            }
                        }
                    }
                }
            }
            &Op::MeanLast(x) => {
                let n = last_dim(self.shape(x));
                let inv = T::one() / T::from_f64(n as f64);
                let gx = acc(&mut grads[x.0], g.len() * n);
                for (chunk, &gv) in gx.chunks_mut(n).zip(g) {
                    for s in chunk {
                        *s += gv * inv;
                    }
                }
            }
            Op::Gather { table, idx } => {
                let (v, n) = self.value(*table).dims2().unwrap();
                let gt = acc(&mut grads[table.0], v * n);
                for (r, &ti) in idx.iter().enumerate() {
                    for j in 0..n {
                        gt[ti * n + j] += g[r * n + j];
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    if self.wants(p) {
                        let gp = acc(&mut grads[p.0], len);
                        for (s, &v) in gp.iter_mut().zip(&g[off..off + len]) {
                            *s += v;
                        }
                    }
                    off += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = last_dim(self.nodes[i].value.shape());
                let m = g.len() / total;
                let mut col = 0;
                for &p in parts {
                    let w = self.value(p).dims2().unwrap().1;
                    if self.wants(p) {
                        let gp = acc(&mut grads[p.0], m * w);
                        for r in 0..m {
                            for j in 0..w {
                                gp[r * w + j] += g[r * total + col + j];
                            }
                        }
                    }
                    col += w;
                }
            }
            &Op::SliceRows { x, start } => {
                let (m, n) = self.value(x).dims2().unwrap();
                let gx = acc(&mut grads[x.0], m * n);
                for (s, &v) in gx[start * n..start * n + g.len()].iter_mut().zip(g) {
                    *s += v;
                }
            }
            &Op::SliceCols { x, start } => {
                let (m, n) = self.value(x).dims2().unwrap();
                let w = g.len() / m;
                let gx = acc(&mut grads[x.0], m * n);
                for r in 0..m {
                    for j in 0..w {
                        gx[r * n + start + j] += g[r * w + j];
                    }
                }
            }
            &Op::Reshape(x) => {
                let gx = acc(&mut grads[x.0], g.len());
                for (s, &v) in gx.iter_mut().zip(g) {
                    *s += v;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let n = last_dim(self.shape(*logits));
                let m = targets.len();
                let scale = g[0] / T::from_f64(m as f64);
                let gl = acc(&mut grads[logits.0], m * n);
                for (r, &t) in targets.iter().enumerate() {
                    for j in 0..n {
                        let onehot = if j == t { T::one() } else { T::zero() };
                        gl[r * n + j] += (probs[r * n + j] - onehot) * scale;
                    }
                }
            }
        }
    }

    /// Shared gamma/beta gradient for the normalization ops. `n` is the number of
    /// affine channels and `inner` the contiguous run length per channel.
    #[allow(clippy::too_many_arguments)]
    fn norm_affine_grads(
        &self,
        gamma: Var,
        beta: Var,
        g: &[T],
        xhat: &[T],
        n: usize,
        inner: usize,
        grads: &mut [Option<Vec<T>>],
    ) {
        if self.wants(gamma) {
            let gg = acc(&mut grads[gamma.0], n);
            for (i, (&gv, &h)) in g.iter().zip(xhat).enumerate() {
                gg[(i / inner) % n] += gv * h;
            }
        }
        if self.wants(beta) {
            let gb = acc(&mut grads[beta.0], n);
            for (i, &gv) in g.iter().enumerate() {
                gb[(i / inner) % n] += gv;
            }
        }
    }
}

/// Input gradient of a standardization `xhat = (x - mean) * inv_std`, given `dL/dxhat`.
fn norm_input_grad<T: Real>(dxhat: &[T], xhat: &[T], inv_std: T, out: &mut [T]) {
    let n = T::from_f64(dxhat.len() as f64);
    let sum_d: T = dxhat.iter().copied().sum();
    let sum_dx: T = dot(dxhat, xhat);
    for ((o, &d), &h) in out.iter_mut().zip(dxhat).zip(xhat) {
        *o += inv_std / n * (n * d - sum_d - h * sum_dx);
    }
}

fn mean_var<T: Real>(xs: &[T]) -> (T, T) {
    let n = T::from_f64(xs.len() as f64);
    let mean = xs.iter().copied().sum::<T>() / n;
    let var = xs
        .iter()
        .map(|&v| {
            let d = v - mean;
            d * d
        })
        .sum::<T>()
        / n;
    (mean, var)
}

pub(crate) fn dot<T: Real>(a: &[T], b: &[T]) -> T {
    let mut s = T::zero();
    for (&x, &y) in a.iter().zip(b) {
        s += x * y;
    }
    s
}

fn axpy<T: Real>(a: T, x: &[T], y: &mut [T]) {
    for (yv, &xv) in y.iter_mut().zip(x) {
        *yv += a * xv;
    }
}

pub(crate) fn matmul_into<T: Real>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            axpy(a[i * k + p], &b[p * n..(p + 1) * n], orow);
        }
    }
}

/// Numerically stable in-place softmax (max subtraction).
pub fn softmax_in_place<T: Real>(row: &mut [T]) {
    let mx = row.iter().copied().fold(row[0], T::max);
    let mut s = T::zero();
    for v in row.iter_mut() {
        *v = (*v - mx).exp();
        s += *v;
    }
    for v in row.iter_mut() {
        *v = *v / s;
    }
}

/// `log softmax(row)[t]` via log-sum-exp.
pub fn log_softmax_at<T: Real>(row: &[T], t: usize) -> T {
    let mx = row.iter().copied().fold(row[0], T::max);
    let s: T = row.iter().map(|&v| (v - mx).exp()).sum();
    row[t] - mx - s.ln()
}

fn gelu<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    half * x * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf())
}

fn gelu_grad<T: Real>(x: T) -> T {
    let half = T::from_f64(0.5);
    let cdf = half * (T::one() + (x * T::from_f64(std::f64::consts::FRAC_1_SQRT_2)).erf());
    let pdf = (-(x * x) * half).exp() * T::from_f64(1.0 / (2.0 * std::f64::consts::PI).sqrt());
    cdf + x * pdf
}
