//! Dynamic tape for reverse-mode differentiation.
//!
//! Every op appends a node holding its forward value. `backward` walks the
//! tape from a scalar root towards the leaves. Gradients accumulate into
//! node grads across calls until [`Graph::zero_grad`] is called.

use crate::error::{Error, Result};

use super::tensor::{c, strides, Element, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        batch_a: usize,
        batch_b: usize,
        m: usize,
        k: usize,
        n: usize,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddSuffix(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    MeanAxis {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    SumAll(Var),
    MeanAll(Var),
    Concat0(Vec<Var>),
    SliceRows {
        x: Var,
        start: usize,
    },
    GatherRows {
        table: Var,
        indices: Vec<usize>,
    },
    BceWithLogits {
        logits: Var,
        targets: Vec<T>,
    },
    AsymmetricLoss {
        logits: Var,
        targets: Vec<T>,
        gamma_neg: T,
        gamma_pos: T,
        clip: T,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<T>,
    },
}

#[derive(Debug, Clone)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    grad: Option<Vec<T>>,
}

#[derive(Debug, Clone, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
}

impl<T: Element> Graph<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn data(&self, v: Var) -> &[T] {
        self.nodes[v.0].value.data()
    }

    // ---- linear algebra -------------------------------------------------

    /// `a[.., m, k] x b[.., k, n]`. Batch dims must be equal, or one operand
    /// must be a plain matrix which is then shared across the batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || Error::Shape {
            op: "matmul",
            lhs: sa.clone(),
            rhs: sb.clone(),
        };
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (k2, n) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        if k != k2 {
            return Err(mismatch());
        }
        let bda = &sa[..sa.len() - 2];
        let bdb = &sb[..sb.len() - 2];
        let batch_dims = if bda == bdb || bdb.is_empty() {
            bda.to_vec()
        } else if bda.is_empty() {
            bdb.to_vec()
        } else {
            return Err(mismatch());
        };
        let batch_a: usize = bda.iter().product();
        let batch_b: usize = bdb.iter().product();
        let batch = batch_a.max(batch_b);
        let (da, db) = (self.data(a), self.data(b));
        let mut out = vec![T::zero(); batch * m * n];
        for bi in 0..batch {
            let ao = if batch_a == 1 { 0 } else { bi * m * k };
            let bo = if batch_b == 1 { 0 } else { bi * k * n };
            mm_acc(
                &da[ao..ao + m * k],
                &db[bo..bo + k * n],
                &mut out[bi * m * n..(bi + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let mut shape = batch_dims;
        shape.extend([m, n]);
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::MatMul {
                a,
                b,
                batch_a,
                batch_b,
                m,
                k,
                n,
            },
            rg,
        ))
    }

    /// Swap the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let nd = self.shape(x).len();
        if nd < 2 {
            return Err(Error::Shape {
                op: "transpose",
                lhs: self.shape(x).to_vec(),
                rhs: vec![],
            });
        }
        let mut axes: Vec<usize> = (0..nd).collect();
        axes.swap(nd - 2, nd - 1);
        self.permute(x, &axes)
    }

    // ---- elementwise ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Shape {
                op,
                lhs: self.shape(a).to_vec(),
                rhs: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    fn zip_op(&mut self, a: Var, b: Var, op: Op<T>, f: impl Fn(T, T) -> T) -> Var {
        let out: Vec<T> = self
            .data(a)
            .iter()
            .zip(self.data(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        let rg = self.rg(&[a, b]);
        self.push(Tensor::new(shape, out).expect("same shape"), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        Ok(self.zip_op(a, b, Op::Add(a, b), |x, y| x + y))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        Ok(self.zip_op(a, b, Op::Sub(a, b), |x, y| x - y))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        Ok(self.zip_op(a, b, Op::Mul(a, b), |x, y| x * y))
    }

    /// `a + b` where `b`'s shape equals a trailing suffix of `a`'s shape
    /// (bias rows, positional tables, masks).
    pub fn add_broadcast(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a);
        let sb = self.shape(b);
        if sb.len() > sa.len() || sa[sa.len() - sb.len()..] != *sb {
            return Err(Error::Shape {
                op: "add_broadcast",
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        let inner = self.value(b).numel();
        let db = self.data(b);
        let out: Vec<T> = self
            .data(a)
            .iter()
            .enumerate()
            .map(|(i, &x)| x + db[i % inner])
            .collect();
        let shape = sa.to_vec();
        let rg = self.rg(&[a, b]);
        Ok(self.push(Tensor::new(shape, out)?, Op::AddSuffix(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out: Vec<T> = self.data(x).iter().map(|&v| v * s).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Scale(x, s),
            rg,
        )
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, x: Var) -> Var {
        let out: Vec<T> = self.data(x).iter().map(|&v| gelu(v)).collect();
        let shape = self.shape(x).to_vec();
        let rg = self.rg(&[x]);
        self.push(
            Tensor::new(shape, out).expect("same shape"),
            Op::Gelu(x),
            rg,
        )
    }

    // ---- normalisation --------------------------------------------------

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis, "softmax")?;
        let mut out = self.data(x).to_vec();
        for o in 0..outer {
            for i in 0..inner {
                let base = o * len * inner + i;
                let mut max = T::neg_infinity();
                for l in 0..len {
                    max = max.max(out[base + l * inner]);
                }
                let mut sum = T::zero();
                for l in 0..len {
                    let e = (out[base + l * inner] - max).exp();
                    out[base + l * inner] = e;
                    sum = sum + e;
                }
                for l in 0..len {
                    out[base + l * inner] = out[base + l * inner] / sum;
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let d = *shape.last().ok_or_else(|| Error::Shape {
            op: "layer_norm",
            lhs: vec![],
            rhs: vec![],
        })?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(Error::Shape {
                    op: "layer_norm",
                    lhs: shape.clone(),
                    rhs: self.shape(p).to_vec(),
                });
            }
        }
        let rows = self.value(x).numel() / d;
        let (dx, dg, dbeta) = (self.data(x), self.data(gamma), self.data(beta));
        let mut xhat = vec![T::zero(); rows * d];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); rows * d];
        let dn = c::<T>(d as f64);
        for r in 0..rows {
            let row = &dx[r * d..(r + 1) * d];
            let mean = row.iter().copied().sum::<T>() / dn;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / dn;
            let rs = T::one() / (var + c(eps)).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = h * dg[j] + dbeta[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    // ---- shape ----------------------------------------------------------

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let mut seen = vec![false; shape.len()];
        if axes.len() != shape.len()
            || axes
                .iter()
                .any(|&a| a >= shape.len() || std::mem::replace(&mut seen[a], true))
        {
            return Err(Error::Shape {
                op: "permute",
                lhs: shape,
                rhs: axes.to_vec(),
            });
        }
        let (data, new_shape) = permute_data(self.data(x), &shape, axes);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(new_shape, data)?,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            rg,
        ))
    }

    /// Concatenate along axis 0. Trailing dims must agree.
    pub fn concat0(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Validation("concat of zero tensors".into()))?;
        let tail = self.shape(*first)[1..].to_vec();
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s.is_empty() || s[1..] != tail[..] {
                return Err(Error::Shape {
                    op: "concat0",
                    lhs: self.shape(*first).to_vec(),
                    rhs: s.to_vec(),
                });
            }
            rows += s[0];
            data.extend_from_slice(self.data(p));
        }
        let mut shape = vec![rows];
        shape.extend(tail);
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(shape, data)?, Op::Concat0(parts.to_vec()), rg))
    }

    /// Stack equally shaped tensors along a new leading axis.
    pub fn stack0(&mut self, parts: &[Var]) -> Result<Var> {
        let mut lifted = Vec::with_capacity(parts.len());
        for &p in parts {
            let mut s = vec![1];
            s.extend_from_slice(self.shape(p));
            lifted.push(self.reshape(p, &s)?);
        }
        self.concat0(&lifted)
    }

    /// Rows `start..start+len` along axis 0.
    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.is_empty() || start + len > shape[0] || len == 0 {
            return Err(Error::Shape {
                op: "slice_rows",
                lhs: shape,
                rhs: vec![start, len],
            });
        }
        let inner: usize = shape[1..].iter().product();
        let data = self.data(x)[start * inner..(start + len) * inner].to_vec();
        let mut out_shape = shape;
        out_shape[0] = len;
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, data)?,
            Op::SliceRows { x, start },
            rg,
        ))
    }

    /// Embedding lookup: rows of a `[V, D]` table.
    pub fn gather_rows(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let shape = self.shape(table).to_vec();
        if shape.len() != 2 || indices.iter().any(|&i| i >= shape[0]) || indices.is_empty() {
            return Err(Error::Shape {
                op: "gather_rows",
                lhs: shape,
                rhs: indices.to_vec(),
            });
        }
        let d = shape[1];
        let src = self.data(table);
        let mut data = Vec::with_capacity(indices.len() * d);
        for &i in indices {
            data.extend_from_slice(&src[i * d..(i + 1) * d]);
        }
        let rg = self.rg(&[table]);
        Ok(self.push(
            Tensor::new(vec![indices.len(), d], data)?,
            Op::GatherRows {
                table,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    // ---- reductions -----------------------------------------------------

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis(&shape, axis, "mean_axis")?;
        let src = self.data(x);
        let ln = c::<T>(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut s = T::zero();
                for l in 0..len {
                    s = s + src[o * len * inner + l * inner + i];
                }
                out[o * inner + i] = s / ln;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::new(out_shape, out)?,
            Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s: T = self.data(x).iter().copied().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::SumAll(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = c::<T>(self.value(x).numel() as f64);
        let s: T = self.data(x).iter().copied().sum::<T>() / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::MeanAll(x), rg)
    }

    // ---- losses ---------------------------------------------------------

    /// Mean binary cross-entropy over logits, targets in {0, 1}.
    pub fn bce_with_logits(&mut self, logits: Var, targets: &[T]) -> Result<Var> {
        self.check_targets("bce_with_logits", logits, targets)?;
        let z = self.data(logits);
        let n = c::<T>(z.len().max(1) as f64);
        let total: T = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| {
                // log(1 + exp(-s z)), s = +-1
                let sz = if t > c(0.5) { z } else { -z };
                softplus(-sz)
            })
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::BceWithLogits {
                logits,
                targets: targets.to_vec(),
            },
            rg,
        ))
    }

    /// Mean asymmetric loss with probability clipping on negatives.
    pub fn asymmetric_loss(
        &mut self,
        logits: Var,
        targets: &[T],
        gamma_neg: f64,
        gamma_pos: f64,
        clip: f64,
    ) -> Result<Var> {
        self.check_targets("asymmetric_loss", logits, targets)?;
        let (gn, gp, m) = (c::<T>(gamma_neg), c::<T>(gamma_pos), c::<T>(clip));
        let z = self.data(logits);
        let n = c::<T>(z.len().max(1) as f64);
        let total: T = z
            .iter()
            .zip(targets)
            .map(|(&z, &t)| asl_term(z, t > c(0.5), gn, gp, m).0)
            .sum();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / n),
            Op::AsymmetricLoss {
                logits,
                targets: targets.to_vec(),
                gamma_neg: gn,
                gamma_pos: gp,
                clip: m,
            },
            rg,
        ))
    }

    fn check_targets(&self, op: &'static str, logits: Var, targets: &[T]) -> Result<()> {
        if self.value(logits).numel() != targets.len() {
            return Err(Error::Shape {
                op,
                lhs: self.shape(logits).to_vec(),
                rhs: vec![targets.len()],
            });
        }
        if let Some(bad) = targets.iter().find(|&&t| t != T::zero() && t != T::one()) {
            return Err(Error::Validation(format!(
                "{op}: target {} outside {{0,1}}",
                bad.as_f64()
            )));
        }
        Ok(())
    }

    /// Mean of `-log softmax(row)[target]` over the rows of `[L, V]` (or a
    /// single `[V]` vector with one target).
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let shape = self.shape(logits).to_vec();
        let v = *shape.last().unwrap_or(&0);
        let rows = if v == 0 {
            0
        } else {
            self.value(logits).numel() / v
        };
        if rows != targets.len() || rows == 0 {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: shape,
                rhs: vec![targets.len()],
            });
        }
        if let Some(&bad) = targets.iter().find(|&&t| t >= v) {
            return Err(Error::Validation(format!(
                "cross_entropy: target index {bad} out of range for {v} classes"
            )));
        }
        let z = self.data(logits);
        let mut probs = vec![T::zero(); rows * v];
        let mut total = T::zero();
        for r in 0..rows {
            let row = &z[r * v..(r + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            for j in 0..v {
                probs[r * v + j] = (row[j] - lse).exp();
            }
            total = total + (lse - row[targets[r]]);
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / c(rows as f64)),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        ))
    }

    // ---- reverse pass ---------------------------------------------------

    /// Accumulate d(root)/d(node) into every grad-requiring node reachable
    /// from `root`. `root` must be a scalar.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::Shape {
                op: "backward",
                lhs: self.shape(root).to_vec(),
                rhs: vec![1],
            });
        }
        if !self.nodes[root.0].requires_grad {
            return Ok(());
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; root.0 + 1];
        grads[root.0] = Some(vec![T::one()]);
        for idx in (0..=root.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            self.propagate(idx, &g, &mut grads);
            let node = &mut self.nodes[idx];
            match &mut node.grad {
                Some(acc) => acc.iter_mut().zip(&g).for_each(|(a, &b)| *a = *a + b),
                None => node.grad = Some(g),
            }
        }
        Ok(())
    }

    fn propagate(&self, idx: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[idx];
        let mut send = |v: Var, contrib: Vec<T>| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut grads[v.0] {
                Some(acc) => acc.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul {
                a,
                b,
                batch_a,
                batch_b,
                m,
                k,
                n,
            } => {
                let batch = batch_a.max(batch_b);
                let (da, db) = (self.data(a), self.data(b));
                if self.nodes[a.0].requires_grad {
                    let mut ga = vec![T::zero(); batch_a * m * k];
                    for bi in 0..batch {
                        let ao = if batch_a == 1 { 0 } else { bi * m * k };
                        let bo = if batch_b == 1 { 0 } else { bi * k * n };
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let bm = &db[bo..bo + k * n];
                        let out = &mut ga[ao..ao + m * k];
                        // dA = dC . B^T
                        for i in 0..m {
                            for p in 0..k {
                                let mut s = T::zero();
                                for j in 0..n {
                                    s = s + gc[i * n + j] * bm[p * n + j];
                                }
                                out[i * k + p] = out[i * k + p] + s;
                            }
                        }
                    }
                    send(a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    let mut gb = vec![T::zero(); batch_b * k * n];
                    for bi in 0..batch {
                        let ao = if batch_a == 1 { 0 } else { bi * m * k };
                        let bo = if batch_b == 1 { 0 } else { bi * k * n };
                        let gc = &g[bi * m * n..(bi + 1) * m * n];
                        let am = &da[ao..ao + m * k];
                        let out = &mut gb[bo..bo + k * n];
                        // dB = A^T . dC
                        for i in 0..m {
                            for p in 0..k {
                                let av = am[i * k + p];
                                for j in 0..n {
                                    out[p * n + j] = out[p * n + j] + av * gc[i * n + j];
                                }
                            }
                        }
                    }
                    send(b, gb);
                }
            }
            &Op::Add(a, b) => {
                send(a, g.to_vec());
                send(b, g.to_vec());
            }
            &Op::Sub(a, b) => {
                send(a, g.to_vec());
                send(b, g.iter().map(|&x| -x).collect());
            }
            &Op::Mul(a, b) => {
                let (da, db) = (self.data(a), self.data(b));
                send(a, g.iter().zip(db).map(|(&x, &y)| x * y).collect());
                send(b, g.iter().zip(da).map(|(&x, &y)| x * y).collect());
            }
            &Op::AddSuffix(a, b) => {
                send(a, g.to_vec());
                let inner = self.value(b).numel();
                let mut gb = vec![T::zero(); inner];
                for (i, &x) in g.iter().enumerate() {
                    gb[i % inner] = gb[i % inner] + x;
                }
                send(b, gb);
            }
            &Op::Scale(x, s) => send(x, g.iter().map(|&v| v * s).collect()),
            &Op::Gelu(x) => {
                let dx = self.data(x);
                send(
                    x,
                    g.iter()
                        .zip(dx)
                        .map(|(&gv, &xv)| gv * gelu_grad(xv))
                        .collect(),
                );
            }
            &Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let y = node.value.data();
                let mut gx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let base = o * len * inner + i;
                        let mut dot = T::zero();
                        for l in 0..len {
                            dot = dot + g[base + l * inner] * y[base + l * inner];
                        }
                        for l in 0..len {
                            let at = base + l * inner;
                            gx[at] = y[at] * (g[at] - dot);
                        }
                    }
                }
                send(x, gx);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let d = self.value(*gamma).numel();
                let rows = rstd.len();
                let gm = self.data(*gamma);
                let dn = c::<T>(d as f64);
                if self.nodes[x.0].requires_grad {
                    let mut gx = vec![T::zero(); rows * d];
                    for r in 0..rows {
                        let mut mean_dh = T::zero();
                        let mut mean_dh_h = T::zero();
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            mean_dh = mean_dh + dh;
                            mean_dh_h = mean_dh_h + dh * xhat[r * d + j];
                        }
                        mean_dh = mean_dh / dn;
                        mean_dh_h = mean_dh_h / dn;
                        for j in 0..d {
                            let dh = g[r * d + j] * gm[j];
                            gx[r * d + j] = rstd[r] * (dh - mean_dh - xhat[r * d + j] * mean_dh_h);
                        }
                    }
                    send(*x, gx);
                }
                let mut gg = vec![T::zero(); d];
                let mut gb = vec![T::zero(); d];
                for r in 0..rows {
                    for j in 0..d {
                        gg[j] = gg[j] + g[r * d + j] * xhat[r * d + j];
                        gb[j] = gb[j] + g[r * d + j];
                    }
                }
                send(*gamma, gg);
                send(*beta, gb);
            }
            &Op::Reshape(x) => send(x, g.to_vec()),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                let (gx, _) = permute_data(g, node.value.shape(), &inverse);
                send(*x, gx);
            }
            &Op::MeanAxis {
                x,
                outer,
                len,
                inner,
            } => {
                let ln = c::<T>(len as f64);
                let mut gx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            gx[o * len * inner + l * inner + i] = g[o * inner + i] / ln;
                        }
                    }
                }
                send(x, gx);
            }
            &Op::SumAll(x) => send(x, vec![g[0]; self.value(x).numel()]),
            &Op::MeanAll(x) => {
                let n = self.value(x).numel();
                send(x, vec![g[0] / c(n as f64); n]);
            }
            Op::Concat0(parts) => {
                let mut off = 0;
                for &p in parts {
                    let n = self.value(p).numel();
                    send(p, g[off..off + n].to_vec());
                    off += n;
                }
            }
            &Op::SliceRows { x, start } => {
                let shape = self.shape(x);
                let inner: usize = shape[1..].iter().product();
                let mut gx = vec![T::zero(); self.value(x).numel()];
                gx[start * inner..start * inner + g.len()].copy_from_slice(g);
                send(x, gx);
            }
            Op::GatherRows { table, indices } => {
                let d = self.shape(*table)[1];
                let mut gt = vec![T::zero(); self.value(*table).numel()];
                for (r, &i) in indices.iter().enumerate() {
                    for j in 0..d {
                        gt[i * d + j] = gt[i * d + j] + g[r * d + j];
                    }
                }
                send(*table, gt);
            }
            Op::BceWithLogits { logits, targets } => {
                let z = self.data(*logits);
                let n = c::<T>(z.len().max(1) as f64);
                send(
                    *logits,
                    z.iter()
                        .zip(targets)
                        .map(|(&z, &t)| g[0] * (sigmoid(z) - t) / n)
                        .collect(),
                );
            }
            Op::AsymmetricLoss {
                logits,
                targets,
                gamma_neg,
                gamma_pos,
                clip,
            } => {
                let z = self.data(*logits);
                let n = c::<T>(z.len().max(1) as f64);
                send(
                    *logits,
                    z.iter()
                        .zip(targets)
                        .map(|(&z, &t)| {
                            g[0] * asl_term(z, t > c(0.5), *gamma_neg, *gamma_pos, *clip).1 / n
                        })
                        .collect(),
                );
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let v = probs.len() / rows;
                let scale = g[0] / c(rows as f64);
                let mut gz: Vec<T> = probs.iter().map(|&p| p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    gz[r * v + t] = gz[r * v + t] - scale;
                }
                send(*logits, gz);
            }
        }
    }
}

/// `out[m,n] += a[m,k] . b[k,n]`; each output element sums over `k` in order.
fn mm_acc<T: Element>(a: &[T], b: &[T], out: &mut [T], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let row = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in row.iter_mut().zip(brow) {
                *o = *o + av * bv;
            }
        }
    }
}

fn split_axis(shape: &[usize], axis: usize, op: &'static str) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Shape {
            op,
            lhs: shape.to_vec(),
            rhs: vec![axis],
        });
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

pub(crate) fn permute_data<T: Copy>(
    data: &[T],
    shape: &[usize],
    axes: &[usize],
) -> (Vec<T>, Vec<usize>) {
    let new_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides = strides(shape);
    // stride in the source for each output axis
    let mapped: Vec<usize> = axes.iter().map(|&a| src_strides[a]).collect();
    let n = data.len();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; new_shape.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        out.push(data[offset]);
        for ax in (0..new_shape.len()).rev() {
            idx[ax] += 1;
            offset += mapped[ax];
            if idx[ax] < new_shape[ax] {
                break;
            }
            offset -= mapped[ax] * new_shape[ax];
            idx[ax] = 0;
        }
    }
    (out, new_shape)
}

pub(crate) fn sigmoid<T: Element>(z: T) -> T {
    if z >= T::zero() {
        T::one() / (T::one() + (-z).exp())
    } else {
        let e = z.exp();
        e / (T::one() + e)
    }
}

/// `log(1 + exp(x))` without overflow.
pub(crate) fn softplus<T: Element>(x: T) -> T {
    if x > T::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

const GELU_K: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

fn gelu<T: Element>(x: T) -> T {
    let inner = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    c::<T>(0.5) * x * (T::one() + inner.tanh())
}

fn gelu_grad<T: Element>(x: T) -> T {
    let inner = c::<T>(GELU_K) * (x + c::<T>(GELU_A) * x * x * x);
    let t = inner.tanh();
    let dinner = c::<T>(GELU_K) * (T::one() + c::<T>(3.0 * GELU_A) * x * x);
    c::<T>(0.5) * (T::one() + t) + c::<T>(0.5) * x * (T::one() - t * t) * dinner
}

/// Loss value and d(loss)/dz for one asymmetric-loss term.
fn asl_term<T: Element>(z: T, positive: bool, gn: T, gp: T, clip: T) -> (T, T) {
    let p = sigmoid(z);
    let dp = p * (T::one() - p);
    if positive {
        // -(1-p)^gp log p
        let log_p = -softplus(-z);
        let q = T::one() - p;
        if gp == T::zero() {
            return (-log_p, p - T::one());
        }
        let loss = -q.powf(gp) * log_p;
        let dl_dp = gp * q.powf(gp - T::one()) * log_p - q.powf(gp) / p;
        (loss, dl_dp * dp)
    } else {
        // -pm^gn log(1 - pm), pm = max(p - clip, 0)
        let pm = p - clip;
        if pm <= T::zero() {
            return (T::zero(), T::zero());
        }
        let log_q = (-pm).ln_1p();
        let loss = -pm.powf(gn) * log_q;
        let dl_dpm = if gn == T::zero() {
            T::one() / (T::one() - pm)
        } else {
            -gn * pm.powf(gn - T::one()) * log_q + pm.powf(gn) / (T::one() - pm)
        };
        (loss, dl_dpm * dp)
    }
}
