//! Define-by-run tape. Every operation appends a node whose parents all have
//! smaller indices, so reverse index order is a valid backward schedule.

use rand::Rng;

use crate::error::{Error, Result};
use crate::tensor::{matrix_dims, strides, Scalar, Tensor};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

type Derivative<S> = Box<dyn Fn(S) -> S + Send + Sync>;

enum Op<S> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    AddBias {
        x: Var,
        bias: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    Scale {
        x: Var,
        factor: S,
    },
    Relu {
        x: Var,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<S>,
        inv_std: Vec<S>,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Permute {
        x: Var,
        perm: Vec<usize>,
    },
    Reshape {
        x: Var,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Narrow {
        x: Var,
        axis: usize,
        start: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        eps: S,
        pad: usize,
        probs: Vec<S>,
        count: usize,
    },
    Elementwise {
        x: Var,
        derivative: Derivative<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

/// Operation tape holding values, gradients, and backward rules.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    backward_done: bool,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Trainable leaf: gradients are accumulated into it.
    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.push(value, true, Op::Leaf)
    }

    /// Frozen leaf: never receives gradients.
    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.push(value, false, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let node = &self.nodes[v.0];
        node.grad.as_ref().map(|g| {
            Tensor::new(node.value.shape().to_vec(), g.clone()).expect("grad shape matches value")
        })
    }

    /// Clears every gradient so that `backward` may run again.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
        self.backward_done = false;
    }

    fn push(&mut self, value: Tensor<S>, requires_grad: bool, op: Op<S>) -> Var {
        self.nodes.push(Node {
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn unary(&mut self, x: Var, value: Tensor<S>, op: Op<S>) -> Var {
        let rg = self.nodes[x.0].requires_grad;
        self.push(value, rg, op)
    }

    /// Batched matrix product. Leading batch dimensions must match, or one
    /// operand must be a plain matrix that is reused for every batch entry.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let plan = MatMulPlan::new(&sa, &sb)?;
        let mut out = vec![S::zero(); plan.batch * plan.m * plan.n];
        plan.forward(self.value(a).data(), self.value(b).data(), &mut out);
        let value = Tensor::new(plan.out_shape.clone(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::MatMul { a, b }))
    }

    /// Adds `b` to `a`, where `b`'s shape is a suffix of `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::shape("add", sa, sb));
        }
        let bd = self.value(b).data();
        let out: Vec<S> = self
            .value(a)
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bd[i % bd.len()])
            .collect();
        let value = Tensor::new(sa.to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Add { a, b }))
    }

    /// Adds a bias row to every row of `x` (`[..batch, n, d]`). The bias is
    /// either `[d]` or carries the same batch dimensions as `x`: `[..batch, d]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        let sb = self.shape(bias).to_vec();
        let layout = BiasLayout::new(&sx, &sb)?;
        let xd = self.value(x).data();
        let bd = self.value(bias).data();
        let mut out = xd.to_vec();
        for (chunk_idx, chunk) in out.chunks_mut(layout.d).enumerate() {
            let row = layout.bias_row(chunk_idx);
            for (o, &b) in chunk.iter_mut().zip(&bd[row * layout.d..(row + 1) * layout.d]) {
                *o = *o + b;
            }
        }
        let value = Tensor::new(sx, out)?;
        let rg = self.any_grad(&[x, bias]);
        Ok(self.push(value, rg, Op::AddBias { x, bias }))
    }

    /// `x·w + b` where `w` and `b` may themselves be outputs of other
    /// operations; gradients flow into whatever produced them.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_bias(y, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape("mul", self.shape(a), self.shape(b)));
        }
        let out = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a).to_vec(), out)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, rg, Op::Mul { a, b }))
    }

    pub fn scale(&mut self, x: Var, factor: S) -> Var {
        let t = self.value(x);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v * factor).collect(),
        )
        .expect("same shape");
        self.unary(x, value, Op::Scale { x, factor })
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let value = Tensor::new(
            t.shape().to_vec(),
            t.data().iter().map(|&v| v.max(S::zero())).collect(),
        )
        .expect("same shape");
        self.unary(x, value, Op::Relu { x })
    }

    /// Elementwise map with a caller-supplied derivative.
    pub fn elementwise(
        &mut self,
        x: Var,
        f: impl Fn(S) -> S,
        derivative: impl Fn(S) -> S + Send + Sync + 'static,
    ) -> Var {
        let t = self.value(x);
        let value = Tensor::new(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
            .expect("same shape");
        self.unary(
            x,
            value,
            Op::Elementwise {
                x,
                derivative: Box::new(derivative),
            },
        )
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        let shape = t.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if t.data().iter().any(|v| v.is_nan()) {
            return Err(Error::Numeric("NaN input to softmax".into()));
        }
        let (outer, len, inner) = axis_split(&shape, axis);
        let mut out = t.data().to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = S::neg_infinity();
                for k in 0..len {
                    max = max.max(out[base + k * inner]);
                }
                let mut total = S::zero();
                for k in 0..len {
                    let e = (out[base + k * inner] - max).exp();
                    out[base + k * inner] = e;
                    total = total + e;
                }
                for k in 0..len {
                    out[base + k * inner] = out[base + k * inner] / total;
                }
            }
        }
        let value = Tensor::new(shape, out)?;
        Ok(self.unary(x, value, Op::Softmax { x, axis }))
    }

    /// Normalizes each row over the last dimension, then applies `gain` and `bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or(Error::Empty("layer_norm input"))?;
        if self.shape(gain) != [d] || self.shape(bias) != [d] {
            return Err(Error::shape("layer_norm", &shape, self.shape(gain)));
        }
        let eps = S::from_f64(eps);
        let n = S::from_f64(d as f64);
        let xd = self.value(x).data();
        let gd = self.value(gain).data();
        let bd = self.value(bias).data();
        let rows = xd.len() / d;
        let mut normalized = vec![S::zero(); xd.len()];
        let mut inv_std = vec![S::zero(); rows];
        let mut out = vec![S::zero(); xd.len()];
        for r in 0..rows {
            let row = &xd[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<S>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<S>() / n;
            let is = S::one() / (var + eps).sqrt();
            inv_std[r] = is;
            for c in 0..d {
                let xh = (row[c] - mean) * is;
                normalized[r * d + c] = xh;
                out[r * d + c] = xh * gd[c] + bd[c];
            }
        }
        let value = Tensor::new(shape, out)?;
        let rg = self.any_grad(&[x, gain, bias]);
        Ok(self.push(
            value,
            rg,
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            },
        ))
    }

    /// Gathers rows of `table` (`[V, d]`) into a `[ids.len(), d]` tensor.
    pub fn embedding(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let shape = self.shape(table);
        if shape.len() != 2 {
            return Err(Error::shape("embedding", shape, &[]));
        }
        let (vocab, d) = (shape[0], shape[1]);
        let td = self.value(table).data();
        let mut out = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= vocab {
                return Err(Error::Vocabulary { id, size: vocab });
            }
            out.extend_from_slice(&td[id * d..(id + 1) * d]);
        }
        let value = Tensor::new(vec![ids.len(), d], out)?;
        Ok(self.unary(
            table,
            value,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
        ))
    }

    pub fn permute(&mut self, x: Var, perm: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if perm.len() != shape.len()
            || perm.iter().any(|&p| p >= shape.len() || std::mem::replace(&mut seen[p], true))
        {
            return Err(Error::shape("permute", &shape, perm));
        }
        let (out_shape, out) = permute_data(self.value(x).data(), &shape, perm);
        let value = Tensor::new(out_shape, out)?;
        Ok(self.unary(
            x,
            value,
            Op::Permute {
                x,
                perm: perm.to_vec(),
            },
        ))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let r = self.shape(x).len();
        if r < 2 {
            return Err(Error::Axis { axis: 1, rank: r });
        }
        let mut perm: Vec<usize> = (0..r).collect();
        perm.swap(r - 2, r - 1);
        self.permute(x, &perm)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        Ok(self.unary(x, value, Op::Reshape { x }))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self.shape(*parts.first().ok_or(Error::Empty("concat"))?).to_vec();
        if axis >= first.len() {
            return Err(Error::Axis {
                axis,
                rank: first.len(),
            });
        }
        let mut out_shape = first.clone();
        out_shape[axis] = 0;
        for &p in parts {
            let s = self.shape(p);
            let compatible = s.len() == first.len()
                && s.iter()
                    .zip(&first)
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", &first, s));
            }
            out_shape[axis] += s[axis];
        }
        let (outer, _, inner) = axis_split(&out_shape, axis);
        let mut out = Vec::with_capacity(out_shape.iter().product());
        for o in 0..outer {
            for &p in parts {
                let chunk = self.shape(p)[axis] * inner;
                out.extend_from_slice(&self.value(p).data()[o * chunk..(o + 1) * chunk]);
            }
        }
        let value = Tensor::new(out_shape, out)?;
        let rg = self.any_grad(parts);
        Ok(self.push(
            value,
            rg,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
        ))
    }

    /// Slice `start..start + len` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(Error::Axis {
                axis,
                rank: shape.len(),
            });
        }
        if start + len > shape[axis] {
            return Err(Error::shape("narrow", &shape, &[start, len]));
        }
        let (outer, full, inner) = axis_split(&shape, axis);
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let base = o * full * inner + start * inner;
            out.extend_from_slice(&src[base..base + len * inner]);
        }
        let mut out_shape = shape;
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, out)?;
        Ok(self.unary(x, value, Op::Narrow { x, axis, start }))
    }

    /// Inverted dropout: zeroes each element with probability `p` and scales
    /// survivors by `1 / (1 - p)`. Identity when `p == 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let keep = 1.0 - p;
        let scale = S::from_f64(1.0 / keep);
        let t = self.value(x);
        let mask: Vec<S> = (0..t.len())
            .map(|_| {
                if rng.gen_bool(keep) {
                    scale
                } else {
                    S::zero()
                }
            })
            .collect();
        let out = t.data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let value = Tensor::new(t.shape().to_vec(), out).expect("same shape");
        self.unary(x, value, Op::Dropout { x, mask })
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let total = self.value(x).data().iter().copied().sum();
        self.unary(x, Tensor::scalar(total), Op::Sum { x })
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let total: S = t.data().iter().copied().sum();
        let value = Tensor::scalar(total / S::from_f64(t.len() as f64));
        self.unary(x, value, Op::Mean { x })
    }

    /// Mean over non-pad rows of the cross-entropy between `softmax(logits)`
    /// and the smoothed target `(1 - eps)·onehot + eps / V`.
    pub fn cross_entropy_label_smoothed(
        &mut self,
        logits: Var,
        targets: &[usize],
        eps: f64,
        pad: usize,
    ) -> Result<Var> {
        if !(0.0..1.0).contains(&eps) {
            return Err(Error::Config(format!("label smoothing {eps} not in [0, 1)")));
        }
        let shape = self.shape(logits).to_vec();
        let vocab = *shape.last().ok_or(Error::Empty("logits"))?;
        let rows = self.value(logits).len() / vocab.max(1);
        if rows != targets.len() {
            return Err(Error::shape("cross_entropy", &shape, &[targets.len()]));
        }
        let eps_s = S::from_f64(eps);
        let uniform = eps_s / S::from_f64(vocab as f64);
        let on = S::one() - eps_s + uniform;
        let ld = self.value(logits).data();
        let mut probs = vec![S::zero(); ld.len()];
        let mut total = S::zero();
        let mut count = 0;
        for (r, &t) in targets.iter().enumerate() {
            if t == pad {
                continue;
            }
            if t >= vocab {
                return Err(Error::Vocabulary { id: t, size: vocab });
            }
            count += 1;
            let row = &ld[r * vocab..(r + 1) * vocab];
            let max = row.iter().copied().fold(S::neg_infinity(), S::max);
            let z: S = row.iter().map(|&v| (v - max).exp()).sum();
            let log_z = max + z.ln();
            let mut loss = S::zero();
            for (v, &l) in row.iter().enumerate() {
                let logp = l - log_z;
                probs[r * vocab + v] = logp.exp();
                let q = if v == t { on } else { uniform };
                if q > S::zero() {
                    loss = loss - q * logp;
                }
            }
            total = total + loss;
        }
        if count == 0 {
            return Err(Error::DegenerateBatch);
        }
        let value = Tensor::scalar(total / S::from_f64(count as f64));
        Ok(self.unary(
            logits,
            value,
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                eps: eps_s,
                pad,
                probs,
                count,
            },
        ))
    }

    /// Reverse pass from a scalar `loss`. Gradients are kept on every node
    /// that requires them, intermediates included. Calling this twice without
    /// [`Graph::reset_grads`] is an error.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::Backward("backward called twice without reset"));
        }
        if self.value(loss).len() != 1 {
            return Err(Error::Backward("loss must be a scalar"));
        }
        self.backward_done = true;
        if !self.nodes[loss.0].requires_grad {
            return Ok(());
        }
        self.nodes[loss.0].grad = Some(vec![S::one()]);
        for i in (0..=loss.0).rev() {
            let (before, rest) = self.nodes.split_at_mut(i);
            let node = &rest[0];
            let Some(g) = node.grad.as_deref() else {
                continue;
            };
            backprop(node, g, before);
        }
        Ok(())
    }
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<S: Copy>(data: &[S], shape: &[usize], perm: &[usize]) -> (Vec<usize>, Vec<S>) {
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let in_strides = strides(shape);
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let mut out = Vec::with_capacity(data.len());
    let mut idx = vec![0usize; out_shape.len()];
    let mut offset = 0usize;
    for _ in 0..data.len() {
        out.push(data[offset]);
        for ax in (0..idx.len()).rev() {
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * out_shape[ax];
            idx[ax] = 0;
        }
    }
    (out_shape, out)
}

struct MatMulPlan {
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
    out_shape: Vec<usize>,
}

impl MatMulPlan {
    fn new(sa: &[usize], sb: &[usize]) -> Result<Self> {
        if sa.len() < 2 || sb.len() < 2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let (ba, m, k) = matrix_dims(sa);
        let (bb, k2, n) = matrix_dims(sb);
        let batch_a = &sa[..sa.len() - 2];
        let batch_b = &sb[..sb.len() - 2];
        if k != k2 {
            return Err(Error::shape("matmul", sa, sb));
        }
        let out_batch = if batch_a == batch_b || batch_b.is_empty() {
            batch_a
        } else if batch_a.is_empty() {
            batch_b
        } else {
            return Err(Error::shape("matmul", sa, sb));
        };
        let mut out_shape = out_batch.to_vec();
        out_shape.extend([m, n]);
        Ok(Self {
            batch: ba.max(bb),
            a_batched: !batch_a.is_empty(),
            b_batched: !batch_b.is_empty(),
            m,
            k,
            n,
            out_shape,
        })
    }

    fn a_off(&self, i: usize) -> usize {
        if self.a_batched {
            i * self.m * self.k
        } else {
            0
        }
    }

    fn b_off(&self, i: usize) -> usize {
        if self.b_batched {
            i * self.k * self.n
        } else {
            0
        }
    }

    fn forward<S: Scalar>(&self, a: &[S], b: &[S], out: &mut [S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched {
            // fold the batch of `a` into rows
            let rows = self.batch * m;
            S::gemm(rows, k, n, a, (k as isize, 1), b, (n as isize, 1), S::zero(), out, (n as isize, 1));
            return;
        }
        for i in 0..self.batch {
            S::gemm(
                m,
                k,
                n,
                &a[self.a_off(i)..],
                (k as isize, 1),
                &b[self.b_off(i)..],
                (n as isize, 1),
                S::zero(),
                &mut out[i * m * n..],
                (n as isize, 1),
            );
        }
    }

    /// `ga += g·bᵀ`
    fn grad_a<S: Scalar>(&self, g: &[S], b: &[S], ga: &mut [S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched {
            let rows = self.batch * m;
            S::gemm(rows, n, k, g, (n as isize, 1), b, (1, n as isize), S::one(), ga, (k as isize, 1));
            return;
        }
        for i in 0..self.batch {
            S::gemm(
                m,
                n,
                k,
                &g[i * m * n..],
                (n as isize, 1),
                &b[self.b_off(i)..],
                (1, n as isize),
                S::one(),
                &mut ga[self.a_off(i)..],
                (k as isize, 1),
            );
        }
    }

    /// `gb += aᵀ·g`
    fn grad_b<S: Scalar>(&self, g: &[S], a: &[S], gb: &mut [S]) {
        let (m, k, n) = (self.m, self.k, self.n);
        if !self.b_batched {
            let rows = self.batch * m;
            S::gemm(k, rows, n, a, (1, k as isize), g, (n as isize, 1), S::one(), gb, (n as isize, 1));
            return;
        }
        for i in 0..self.batch {
            S::gemm(
                k,
                m,
                n,
                &a[self.a_off(i)..],
                (1, k as isize),
                &g[i * m * n..],
                (n as isize, 1),
                S::one(),
                &mut gb[self.b_off(i)..],
                (n as isize, 1),
            );
        }
    }
}

struct BiasLayout {
    d: usize,
    rows: usize,
    batched: bool,
}

impl BiasLayout {
    fn new(sx: &[usize], sb: &[usize]) -> Result<Self> {
        let bad = || Error::shape("add_bias", sx, sb);
        let d = *sx.last().ok_or_else(bad)?;
        if sb.last() != Some(&d) {
            return Err(bad());
        }
        if sb.len() == 1 {
            return Ok(Self {
                d,
                rows: 1,
                batched: false,
            });
        }
        if sx.len() < 2 || sb[..sb.len() - 1] != sx[..sx.len() - 2] {
            return Err(bad());
        }
        Ok(Self {
            d,
            rows: sx[sx.len() - 2],
            batched: true,
        })
    }

    fn bias_row(&self, chunk_idx: usize) -> usize {
        if self.batched {
            chunk_idx / self.rows
        } else {
            0
        }
    }
}

/// Accumulates into `v`'s gradient buffer, allocating it on first touch.
fn accumulate<S: Scalar>(nodes: &mut [Node<S>], v: Var, f: impl FnOnce(&mut [S], &Tensor<S>)) {
    let node = &mut nodes[v.0];
    if !node.requires_grad {
        return;
    }
    let len = node.value.len();
    let grad = node.grad.get_or_insert_with(|| vec![S::zero(); len]);
    f(grad, &node.value);
}

fn add_into<S: Scalar>(dst: &mut [S], src: impl IntoIterator<Item = S>) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + s;
    }
}

fn backprop<S: Scalar>(node: &Node<S>, g: &[S], nodes: &mut [Node<S>]) {
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let sa = nodes[a.0].value.shape().to_vec();
            let sb = nodes[b.0].value.shape().to_vec();
            let plan = MatMulPlan::new(&sa, &sb).expect("validated in forward");
            if nodes[a.0].requires_grad {
                let bv = nodes[b.0].value.data().to_vec();
                accumulate(nodes, *a, |ga, _| plan.grad_a(g, &bv, ga));
            }
            if nodes[b.0].requires_grad {
                let av = nodes[a.0].value.data().to_vec();
                accumulate(nodes, *b, |gb, _| plan.grad_b(g, &av, gb));
            }
        }
        Op::Add { a, b } => {
            accumulate(nodes, *a, |ga, _| add_into(ga, g.iter().copied()));
            accumulate(nodes, *b, |gb, _| {
                let n = gb.len();
                for (i, &gi) in g.iter().enumerate() {
                    gb[i % n] = gb[i % n] + gi;
                }
            });
        }
        Op::AddBias { x, bias } => {
            let layout =
                BiasLayout::new(nodes[x.0].value.shape(), nodes[bias.0].value.shape()).unwrap();
            accumulate(nodes, *x, |gx, _| add_into(gx, g.iter().copied()));
            accumulate(nodes, *bias, |gb, _| {
                for (chunk_idx, chunk) in g.chunks(layout.d).enumerate() {
                    let row = layout.bias_row(chunk_idx);
                    add_into(&mut gb[row * layout.d..(row + 1) * layout.d], chunk.iter().copied());
                }
            });
        }
        Op::Mul { a, b } => {
            let av = nodes[a.0].value.data().to_vec();
            let bv = nodes[b.0].value.data().to_vec();
            accumulate(nodes, *a, |ga, _| {
                add_into(ga, g.iter().zip(&bv).map(|(&gi, &bi)| gi * bi))
            });
            accumulate(nodes, *b, |gb, _| {
                add_into(gb, g.iter().zip(&av).map(|(&gi, &ai)| gi * ai))
            });
        }
        Op::Scale { x, factor } => {
            accumulate(nodes, *x, |gx, _| add_into(gx, g.iter().map(|&gi| gi * *factor)));
        }
        Op::Relu { x } => {
            accumulate(nodes, *x, |gx, xv| {
                add_into(
                    gx,
                    g.iter().zip(xv.data()).map(|(&gi, &xi)| {
                        if xi > S::zero() {
                            gi
                        } else {
                            S::zero()
                        }
                    }),
                )
            });
        }
        Op::Elementwise { x, derivative } => {
            accumulate(nodes, *x, |gx, xv| {
                add_into(gx, g.iter().zip(xv.data()).map(|(&gi, &xi)| gi * derivative(xi)))
            });
        }
        Op::Softmax { x, axis } => {
            let y = node.value.data();
            let (outer, len, inner) = axis_split(node.value.shape(), *axis);
            accumulate(nodes, *x, |gx, _| {
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let dot: S = (0..len)
                            .map(|k| g[base + k * inner] * y[base + k * inner])
                            .sum();
                        for k in 0..len {
                            let j = base + k * inner;
                            gx[j] = gx[j] + y[j] * (g[j] - dot);
                        }
                    }
                }
            });
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let d = nodes[gain.0].value.len();
            let gain_v = nodes[gain.0].value.data().to_vec();
            accumulate(nodes, *gain, |gg, _| {
                for (gr, xr) in g.chunks(d).zip(normalized.chunks(d)) {
                    add_into(gg, gr.iter().zip(xr).map(|(&a, &b)| a * b));
                }
            });
            accumulate(nodes, *bias, |gb, _| {
                for gr in g.chunks(d) {
                    add_into(gb, gr.iter().copied());
                }
            });
            accumulate(nodes, *x, |gx, _| {
                let n = S::from_f64(d as f64);
                for (r, (gr, xr)) in g.chunks(d).zip(normalized.chunks(d)).enumerate() {
                    let gxhat: Vec<S> = gr.iter().zip(&gain_v).map(|(&a, &b)| a * b).collect();
                    let mean_g = gxhat.iter().copied().sum::<S>() / n;
                    let mean_gx = gxhat.iter().zip(xr).map(|(&a, &b)| a * b).sum::<S>() / n;
                    for c in 0..d {
                        let j = r * d + c;
                        gx[j] = gx[j] + inv_std[r] * (gxhat[c] - mean_g - xr[c] * mean_gx);
                    }
                }
            });
        }
        Op::Embedding { table, ids } => {
            accumulate(nodes, *table, |gt, tv| {
                let d = tv.shape()[1];
                for (row, &id) in ids.iter().enumerate() {
                    add_into(&mut gt[id * d..(id + 1) * d], g[row * d..(row + 1) * d].iter().copied());
                }
            });
        }
        Op::Permute { x, perm } => {
            let mut inverse = vec![0; perm.len()];
            for (i, &p) in perm.iter().enumerate() {
                inverse[p] = i;
            }
            let (_, back) = permute_data(g, node.value.shape(), &inverse);
            accumulate(nodes, *x, |gx, _| add_into(gx, back));
        }
        Op::Reshape { x } => {
            accumulate(nodes, *x, |gx, _| add_into(gx, g.iter().copied()));
        }
        Op::Concat { parts, axis } => {
            let (outer, _, inner) = axis_split(node.value.shape(), *axis);
            let widths: Vec<usize> = parts
                .iter()
                .map(|p| nodes[p.0].value.shape()[*axis] * inner)
                .collect();
            let row: usize = widths.iter().sum();
            let mut offset = 0;
            for (p, &w) in parts.iter().zip(&widths) {
                accumulate(nodes, *p, |gp, _| {
                    for o in 0..outer {
                        let src = &g[o * row + offset..o * row + offset + w];
                        add_into(&mut gp[o * w..(o + 1) * w], src.iter().copied());
                    }
                });
                offset += w;
            }
        }
        Op::Narrow { x, axis, start } => {
            let len = node.value.shape()[*axis];
            accumulate(nodes, *x, |gx, xv| {
                let (outer, full, inner) = axis_split(xv.shape(), *axis);
                for o in 0..outer {
                    let base = o * full * inner + start * inner;
                    add_into(
                        &mut gx[base..base + len * inner],
                        g[o * len * inner..(o + 1) * len * inner].iter().copied(),
                    );
                }
            });
        }
        Op::Dropout { x, mask } => {
            accumulate(nodes, *x, |gx, _| {
                add_into(gx, g.iter().zip(mask).map(|(&gi, &m)| gi * m))
            });
        }
        Op::Sum { x } => {
            accumulate(nodes, *x, |gx, _| add_into(gx, std::iter::repeat(g[0])));
        }
        Op::Mean { x } => {
            accumulate(nodes, *x, |gx, _| {
                let scaled = g[0] / S::from_f64(gx.len() as f64);
                add_into(gx, std::iter::repeat(scaled))
            });
        }
        Op::CrossEntropy {
            logits,
            targets,
            eps,
            pad,
            probs,
            count,
        } => {
            accumulate(nodes, *logits, |gl, _| {
                let vocab = probs.len() / targets.len();
                let uniform = *eps / S::from_f64(vocab as f64);
                let on = S::one() - *eps + uniform;
                let scale = g[0] / S::from_f64(*count as f64);
                for (r, &t) in targets.iter().enumerate() {
                    if t == *pad {
                        continue;
                    }
                    for v in 0..vocab {
                        let q = if v == t { on } else { uniform };
                        let j = r * vocab + v;
                        gl[j] = gl[j] + (probs[j] - q) * scale;
                    }
                }
            });
        }
    }
}
