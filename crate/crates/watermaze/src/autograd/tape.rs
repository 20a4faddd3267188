//! Gradient tape: an append-only arena of executed operations.
//!
//! Ops record their input indices, so the arena order is a topological
//! order and `backward` is a single reverse sweep. Leaves may borrow their
//! storage (model parameters bind without copying); intermediate values are
//! owned by the tape. A tape lives on one thread.

use std::cell::RefCell;

use rand::Rng;

use super::{AutogradError, Scalar, Tensor};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

enum Value<'a, S> {
    Owned(Vec<S>),
    Borrowed(&'a [S]),
}

impl<S> Value<'_, S> {
    fn as_slice(&self) -> &[S] {
        match self {
            Value::Owned(v) => v,
            Value::Borrowed(s) => s,
        }
    }
}

enum Op<S> {
    Leaf,
    /// C = A * B
    MatMul { a: usize, b: usize },
    Add { a: usize, b: usize },
    Sub { a: usize, b: usize },
    Mul { a: usize, b: usize },
    Scale { a: usize, factor: S },
    /// Matrix plus a `1 x m` bias row broadcast over rows.
    AddRow { a: usize, bias: usize },
    /// Row-wise softmax over a square matrix, optionally causal.
    MaskedSoftmax { a: usize, causal: bool },
    /// Scaled dot-product attention over `windows` stacked sequences and
    /// `heads` column blocks at once. Softmax probabilities are cached for
    /// the backward pass.
    Attention {
        q: usize,
        k: usize,
        v: usize,
        windows: usize,
        heads: usize,
        causal: bool,
        probs: Vec<S>,
    },
    /// Per-row standardization with affine gain/bias; caches (mean, inv_std).
    LayerNorm {
        x: usize,
        gain: usize,
        bias: usize,
        stats: Vec<(S, S)>,
    },
    Gelu { a: usize },
    /// Inverted dropout; mask entries are 0 or 1/(1-p).
    Dropout { a: usize, mask: Vec<S> },
    ConcatCols { parts: Vec<usize> },
    /// x[r, :] + pos[r mod window_len, :], tiling the positional table over
    /// stacked windows.
    AddPositional {
        x: usize,
        pos: usize,
        window_len: usize,
    },
    /// out[i] = a[i, idx[i]]
    GatherRows { a: usize, idx: Vec<usize> },
    /// sum_i w[i] * (a[i] - t[i])^2
    WeightedSse {
        a: usize,
        target: Vec<S>,
        weight: Vec<S>,
    },
    Sum { a: usize },
    /// Test-only negative control: forward scales, backward lies.
    #[cfg(test)]
    ScaleBadGrad { a: usize, factor: S },
}

struct Node<'a, S> {
    rows: usize,
    cols: usize,
    value: Value<'a, S>,
    grad: Option<Vec<S>>,
    requires_grad: bool,
    op: Op<S>,
}

pub struct Tape<'a, S: Scalar> {
    nodes: RefCell<Vec<Node<'a, S>>>,
}

/// Numerical stability floor inside layer-norm's square root.
pub const LAYER_NORM_EPS: f64 = 1e-5;

const GELU_COEFF: f64 = 0.044715;

impl<'a, S: Scalar> Tape<'a, S> {
    pub fn new() -> Self {
        Self {
            nodes: RefCell::new(Vec::new()),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.borrow().is_empty()
    }

    /// Bind a tensor to the tape without copying its storage.
    pub fn leaf(&self, tensor: &'a Tensor<S>, requires_grad: bool) -> Var {
        self.push(
            tensor.rows(),
            tensor.cols(),
            Value::Borrowed(tensor.data()),
            requires_grad,
            Op::Leaf,
        )
    }

    /// Bind an owned tensor (inputs assembled on the fly).
    pub fn leaf_owned(&self, tensor: Tensor<S>, requires_grad: bool) -> Var {
        let (rows, cols) = (tensor.rows(), tensor.cols());
        self.push(rows, cols, Value::Owned(tensor.data.clone()), requires_grad, Op::Leaf)
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let nodes = self.nodes.borrow();
        (nodes[v.0].rows, nodes[v.0].cols)
    }

    /// Copy a node's value out of the tape.
    pub fn value(&self, v: Var) -> Tensor<S> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        Tensor::from_vec(n.rows, n.cols, n.value.as_slice().to_vec())
    }

    /// Accumulated gradient of a node, if any backward pass reached it.
    pub fn grad(&self, v: Var) -> Option<Tensor<S>> {
        let nodes = self.nodes.borrow();
        let n = &nodes[v.0];
        n.grad
            .as_ref()
            .map(|g| Tensor::from_vec(n.rows, n.cols, g.clone()))
    }

    fn push(
        &self,
        rows: usize,
        cols: usize,
        value: Value<'a, S>,
        requires_grad: bool,
        op: Op<S>,
    ) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node {
            rows,
            cols,
            value,
            grad: None,
            requires_grad,
            op,
        });
        Var(nodes.len() - 1)
    }

    fn with_node<R>(&self, v: Var, f: impl FnOnce(&Node<'a, S>) -> R) -> R {
        let nodes = self.nodes.borrow();
        f(&nodes[v.0])
    }

    fn requires(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    // ---- operations -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (m, ka) = self.shape(a);
        let (kb, n) = self.shape(b);
        if ka != kb {
            return Err(AutogradError::ShapeMismatch(format!(
                "matmul: {m}x{ka} * {kb}x{n}"
            )));
        }
        let mut out = vec![S::ZERO; m * n];
        self.with_node(a, |na| {
            self.with_node(b, |nb| {
                gemm(
                    &mut out,
                    S::ZERO,
                    m,
                    ka,
                    n,
                    S::ONE,
                    na.value.as_slice(),
                    false,
                    nb.value.as_slice(),
                    false,
                );
            })
        });
        let rg = self.requires(&[a, b]);
        Ok(self.push(m, n, Value::Owned(out), rg, Op::MatMul { a: a.0, b: b.0 }))
    }

    fn elementwise(
        &self,
        a: Var,
        b: Var,
        name: &str,
        f: impl Fn(S, S) -> S,
        op: Op<S>,
    ) -> Result<Var, AutogradError> {
        let (ra, ca) = self.shape(a);
        let (rb, cb) = self.shape(b);
        if (ra, ca) != (rb, cb) {
            return Err(AutogradError::ShapeMismatch(format!(
                "{name}: {ra}x{ca} vs {rb}x{cb}"
            )));
        }
        let out: Vec<S> = self.with_node(a, |na| {
            self.with_node(b, |nb| {
                na.value
                    .as_slice()
                    .iter()
                    .zip(nb.value.as_slice())
                    .map(|(&x, &y)| f(x, y))
                    .collect()
            })
        });
        let rg = self.requires(&[a, b]);
        Ok(self.push(ra, ca, Value::Owned(out), rg, op))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.elementwise(a, b, "add", |x, y| x + y, Op::Add { a: a.0, b: b.0 })
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.elementwise(a, b, "sub", |x, y| x - y, Op::Sub { a: a.0, b: b.0 })
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var, AutogradError> {
        self.elementwise(a, b, "mul", |x, y| x * y, Op::Mul { a: a.0, b: b.0 })
    }

    pub fn scale(&self, a: Var, factor: S) -> Var {
        let (r, c) = self.shape(a);
        let out: Vec<S> = self.with_node(a, |na| {
            na.value.as_slice().iter().map(|&x| x * factor).collect()
        });
        let rg = self.requires(&[a]);
        self.push(r, c, Value::Owned(out), rg, Op::Scale { a: a.0, factor })
    }

    /// `a[r x m] + bias[1 x m]`, broadcast over rows.
    pub fn add_row(&self, a: Var, bias: Var) -> Result<Var, AutogradError> {
        let (r, m) = self.shape(a);
        let (rb, mb) = self.shape(bias);
        if rb != 1 || mb != m {
            return Err(AutogradError::ShapeMismatch(format!(
                "add_row: {r}x{m} + {rb}x{mb}"
            )));
        }
        let out: Vec<S> = self.with_node(a, |na| {
            self.with_node(bias, |nb| {
                let bias = nb.value.as_slice();
                na.value
                    .as_slice()
                    .chunks_exact(m)
                    .flat_map(|row| row.iter().zip(bias).map(|(&x, &b)| x + b))
                    .collect()
            })
        });
        let rg = self.requires(&[a, bias]);
        Ok(self.push(
            r,
            m,
            Value::Owned(out),
            rg,
            Op::AddRow {
                a: a.0,
                bias: bias.0,
            },
        ))
    }

    /// Row-wise softmax of a square score matrix. With `causal` set, entries
    /// above the diagonal receive probability exactly zero.
    pub fn masked_softmax(&self, a: Var, causal: bool) -> Result<Var, AutogradError> {
        let (r, c) = self.shape(a);
        if r != c {
            return Err(AutogradError::ShapeMismatch(format!(
                "masked_softmax requires a square matrix, got {r}x{c}"
            )));
        }
        let mut out = self.with_node(a, |na| na.value.as_slice().to_vec());
        softmax_rows(&mut out, r, c, causal);
        let rg = self.requires(&[a]);
        Ok(self.push(r, c, Value::Owned(out), rg, Op::MaskedSoftmax { a: a.0, causal }))
    }

    /// Scaled dot-product attention, `softmax(Q K^T / sqrt(d_k)) V`.
    ///
    /// `q`, `k`, `v` hold `windows` stacked sequences of equal length as row
    /// blocks and `heads` column blocks of width `cols / heads`; attention
    /// runs independently per (window, head). Plain single-sequence,
    /// single-head attention is the `windows = heads = 1` case.
    pub fn attention(
        &self,
        q: Var,
        k: Var,
        v: Var,
        windows: usize,
        heads: usize,
        causal: bool,
    ) -> Result<Var, AutogradError> {
        let (rows, d) = self.shape(q);
        if self.shape(k) != (rows, d) || self.shape(v) != (rows, d) {
            return Err(AutogradError::ShapeMismatch(format!(
                "attention: q {rows}x{d}, k {:?}, v {:?}",
                self.shape(k),
                self.shape(v)
            )));
        }
        if windows == 0 || heads == 0 || rows % windows != 0 || d % heads != 0 {
            return Err(AutogradError::InvalidArgument(format!(
                "attention: {rows} rows / {windows} windows, {d} cols / {heads} heads"
            )));
        }
        let n = rows / windows;
        let dk = d / heads;
        let alpha = S::from_f64(1.0 / (dk as f64).sqrt());

        let mut out = vec![S::ZERO; rows * d];
        let mut probs = vec![S::ZERO; windows * heads * n * n];
        self.with_node(q, |nq| {
            self.with_node(k, |nk| {
                self.with_node(v, |nv| {
                    let (qd, kd, vd) = (
                        nq.value.as_slice(),
                        nk.value.as_slice(),
                        nv.value.as_slice(),
                    );
                    for w in 0..windows {
                        for h in 0..heads {
                            let block = w * n * d + h * dk;
                            let p = &mut probs[(w * heads + h) * n * n..][..n * n];
                            // scores = alpha * Q_blk K_blk^T
                            unsafe {
                                S::gemm_strided(
                                    n,
                                    dk,
                                    n,
                                    alpha,
                                    qd.as_ptr().add(block),
                                    d as isize,
                                    1,
                                    kd.as_ptr().add(block),
                                    1,
                                    d as isize,
                                    S::ZERO,
                                    p.as_mut_ptr(),
                                    n as isize,
                                    1,
                                );
                            }
                            softmax_rows(p, n, n, causal);
                            // out_blk = P V_blk
                            unsafe {
                                S::gemm_strided(
                                    n,
                                    n,
                                    dk,
                                    S::ONE,
                                    p.as_ptr(),
                                    n as isize,
                                    1,
                                    vd.as_ptr().add(block),
                                    d as isize,
                                    1,
                                    S::ZERO,
                                    out.as_mut_ptr().add(block),
                                    d as isize,
                                    1,
                                );
                            }
                        }
                    }
                })
            })
        });
        let rg = self.requires(&[q, k, v]);
        Ok(self.push(
            rows,
            d,
            Value::Owned(out),
            rg,
            Op::Attention {
                q: q.0,
                k: k.0,
                v: v.0,
                windows,
                heads,
                causal,
                probs,
            },
        ))
    }

    /// Per-row standardization to mean 0, variance 1 (eps inside the square
    /// root), followed by elementwise gain and bias.
    pub fn layer_norm(&self, x: Var, gain: Var, bias: Var) -> Result<Var, AutogradError> {
        let (r, d) = self.shape(x);
        if self.shape(gain) != (1, d) || self.shape(bias) != (1, d) {
            return Err(AutogradError::ShapeMismatch(format!(
                "layer_norm: x {r}x{d}, gain {:?}, bias {:?}",
                self.shape(gain),
                self.shape(bias)
            )));
        }
        let eps = S::from_f64(LAYER_NORM_EPS);
        let inv_d = S::from_f64(1.0 / d as f64);
        let mut out = vec![S::ZERO; r * d];
        let mut stats = Vec::with_capacity(r);
        self.with_node(x, |nx| {
            self.with_node(gain, |ng| {
                self.with_node(bias, |nb| {
                    let (xd, g, b) = (
                        nx.value.as_slice(),
                        ng.value.as_slice(),
                        nb.value.as_slice(),
                    );
                    for (row, out_row) in xd.chunks_exact(d).zip(out.chunks_exact_mut(d)) {
                        let mut mean = S::ZERO;
                        for &v in row {
                            mean += v;
                        }
                        mean *= inv_d;
                        let mut var = S::ZERO;
                        for &v in row {
                            let c = v - mean;
                            var += c * c;
                        }
                        var *= inv_d;
                        let inv_std = S::ONE / (var + eps).sqrt();
                        stats.push((mean, inv_std));
                        for ((o, &v), (&gj, &bj)) in
                            out_row.iter_mut().zip(row).zip(g.iter().zip(b))
                        {
                            *o = (v - mean) * inv_std * gj + bj;
                        }
                    }
                })
            })
        });
        let rg = self.requires(&[x, gain, bias]);
        Ok(self.push(
            r,
            d,
            Value::Owned(out),
            rg,
            Op::LayerNorm {
                x: x.0,
                gain: gain.0,
                bias: bias.0,
                stats,
            },
        ))
    }

    /// Elementwise GELU, tanh approximation.
    pub fn gelu(&self, a: Var) -> Var {
        let (r, c) = self.shape(a);
        let out: Vec<S> = self.with_node(a, |na| {
            na.value.as_slice().iter().map(|&x| gelu_value(x)).collect()
        });
        let rg = self.requires(&[a]);
        self.push(r, c, Value::Owned(out), rg, Op::Gelu { a: a.0 })
    }

    /// Inverted dropout: zero with probability `p`, scale survivors by
    /// `1/(1-p)`. Outside training (or at p = 0) this is the identity and
    /// adds no node.
    pub fn dropout(
        &self,
        a: Var,
        p: f64,
        training: bool,
        rng: &mut impl Rng,
    ) -> Result<Var, AutogradError> {
        if !(0.0..1.0).contains(&p) {
            return Err(AutogradError::InvalidArgument(format!(
                "dropout probability {p} outside [0, 1)"
            )));
        }
        if !training || p == 0.0 {
            return Ok(a);
        }
        let (r, c) = self.shape(a);
        let keep_scale = S::from_f64(1.0 / (1.0 - p));
        let mask: Vec<S> = (0..r * c)
            .map(|_| {
                if rng.gen::<f64>() < p {
                    S::ZERO
                } else {
                    keep_scale
                }
            })
            .collect();
        let out: Vec<S> = self.with_node(a, |na| {
            na.value
                .as_slice()
                .iter()
                .zip(&mask)
                .map(|(&x, &m)| x * m)
                .collect()
        });
        let rg = self.requires(&[a]);
        Ok(self.push(r, c, Value::Owned(out), rg, Op::Dropout { a: a.0, mask }))
    }

    /// Concatenate matrices with equal row counts along columns.
    pub fn concat_cols(&self, parts: &[Var]) -> Result<Var, AutogradError> {
        if parts.is_empty() {
            return Err(AutogradError::InvalidArgument(
                "concat_cols of zero parts".into(),
            ));
        }
        let (r, _) = self.shape(parts[0]);
        let mut total = 0;
        for &p in parts {
            let (rp, cp) = self.shape(p);
            if rp != r {
                return Err(AutogradError::ShapeMismatch(format!(
                    "concat_cols: {rp} rows vs {r}"
                )));
            }
            total += cp;
        }
        let mut out = vec![S::ZERO; r * total];
        let mut offset = 0;
        for &p in parts {
            let (_, cp) = self.shape(p);
            self.with_node(p, |np| {
                for (i, row) in np.value.as_slice().chunks_exact(cp).enumerate() {
                    out[i * total + offset..i * total + offset + cp].copy_from_slice(row);
                }
            });
            offset += cp;
        }
        let rg = self.requires(parts);
        Ok(self.push(
            r,
            total,
            Value::Owned(out),
            rg,
            Op::ConcatCols {
                parts: parts.iter().map(|p| p.0).collect(),
            },
        ))
    }

    /// Add learned positional rows: `x[r, :] += pos[r mod window_len, :]`,
    /// tiling the table over stacked windows.
    pub fn add_positional(
        &self,
        x: Var,
        pos: Var,
        window_len: usize,
    ) -> Result<Var, AutogradError> {
        let (r, d) = self.shape(x);
        let (max_len, dp) = self.shape(pos);
        if dp != d {
            return Err(AutogradError::ShapeMismatch(format!(
                "add_positional: width {d} vs table width {dp}"
            )));
        }
        if window_len == 0 || r % window_len != 0 || window_len > max_len {
            return Err(AutogradError::ShapeMismatch(format!(
                "add_positional: {r} rows, window {window_len}, table {max_len}"
            )));
        }
        let out: Vec<S> = self.with_node(x, |nx| {
            self.with_node(pos, |np| {
                let pos_data = np.value.as_slice();
                nx.value
                    .as_slice()
                    .chunks_exact(d)
                    .enumerate()
                    .flat_map(|(i, row)| {
                        let p = &pos_data[(i % window_len) * d..][..d];
                        row.iter().zip(p).map(|(&a, &b)| a + b).collect::<Vec<_>>()
                    })
                    .collect()
            })
        });
        let rg = self.requires(&[x, pos]);
        Ok(self.push(
            r,
            d,
            Value::Owned(out),
            rg,
            Op::AddPositional {
                x: x.0,
                pos: pos.0,
                window_len,
            },
        ))
    }

    /// Select one column per row: `out[i] = a[i, idx[i]]`.
    pub fn gather_rows(&self, a: Var, idx: &[usize]) -> Result<Var, AutogradError> {
        let (r, c) = self.shape(a);
        if idx.len() != r {
            return Err(AutogradError::ShapeMismatch(format!(
                "gather_rows: {r} rows vs {} indices",
                idx.len()
            )));
        }
        if let Some(&bad) = idx.iter().find(|&&j| j >= c) {
            return Err(AutogradError::InvalidArgument(format!(
                "gather_rows: column {bad} out of {c}"
            )));
        }
        let out: Vec<S> = self.with_node(a, |na| {
            let d = na.value.as_slice();
            idx.iter().enumerate().map(|(i, &j)| d[i * c + j]).collect()
        });
        let rg = self.requires(&[a]);
        Ok(self.push(
            r,
            1,
            Value::Owned(out),
            rg,
            Op::GatherRows {
                a: a.0,
                idx: idx.to_vec(),
            },
        ))
    }

    /// Weighted sum of squared errors against constant targets:
    /// `sum_i w[i] (a[i] - t[i])^2`, reduced to a scalar.
    pub fn weighted_sse(
        &self,
        a: Var,
        target: &[S],
        weight: &[S],
    ) -> Result<Var, AutogradError> {
        let (r, c) = self.shape(a);
        if c != 1 || target.len() != r || weight.len() != r {
            return Err(AutogradError::ShapeMismatch(format!(
                "weighted_sse: a {r}x{c}, {} targets, {} weights",
                target.len(),
                weight.len()
            )));
        }
        let total = self.with_node(a, |na| {
            na.value
                .as_slice()
                .iter()
                .zip(target)
                .zip(weight)
                .fold(S::ZERO, |acc, ((&x, &t), &w)| {
                    let e = x - t;
                    acc + w * e * e
                })
        });
        let rg = self.requires(&[a]);
        Ok(self.push(
            1,
            1,
            Value::Owned(vec![total]),
            rg,
            Op::WeightedSse {
                a: a.0,
                target: target.to_vec(),
                weight: weight.to_vec(),
            },
        ))
    }

    /// Sum all entries to a scalar.
    pub fn sum(&self, a: Var) -> Var {
        let total = self.with_node(a, |na| {
            na.value
                .as_slice()
                .iter()
                .fold(S::ZERO, |acc, &x| acc + x)
        });
        let rg = self.requires(&[a]);
        self.push(1, 1, Value::Owned(vec![total]), rg, Op::Sum { a: a.0 })
    }

    #[cfg(test)]
    /// Negative control for the gradient checker: forward scales by
    /// `factor`, backward deliberately uses a wrong constant.
    pub fn scale_bad_grad(&self, a: Var, factor: S) -> Var {
        let (r, c) = self.shape(a);
        let out: Vec<S> = self.with_node(a, |na| {
            na.value.as_slice().iter().map(|&x| x * factor).collect()
        });
        let rg = self.requires(&[a]);
        self.push(r, c, Value::Owned(out), rg, Op::ScaleBadGrad { a: a.0, factor })
    }

    // ---- backward ---------------------------------------------------

    /// Reverse sweep from a scalar loss. Gradients accumulate additively
    /// into every `requires_grad` node reachable from the loss; calling
    /// backward again keeps accumulating. The sweep itself runs on
    /// pass-local buffers so earlier accumulations are not re-propagated.
    pub fn backward(&self, loss: Var) -> Result<(), AutogradError> {
        let mut nodes = self.nodes.borrow_mut();
        if nodes.is_empty() {
            return Err(AutogradError::InvalidArgument("empty tape".into()));
        }
        {
            let l = &nodes[loss.0];
            if l.rows != 1 || l.cols != 1 {
                return Err(AutogradError::NonScalarLoss);
            }
        }
        let mut pass: Vec<Option<Vec<S>>> = vec![None; nodes.len()];
        pass[loss.0] = Some(vec![S::ONE]);

        for i in (0..=loss.0).rev() {
            if !nodes[i].requires_grad {
                continue;
            }
            let Some(grad_out) = pass[i].take() else {
                continue;
            };
            backprop_node(i, &grad_out, &nodes, &mut pass);
            let len = nodes[i].rows * nodes[i].cols;
            let acc = nodes[i].grad.get_or_insert_with(|| vec![S::ZERO; len]);
            axpy(acc, &grad_out, S::ONE);
        }
        Ok(())
    }
}

impl<S: Scalar> Default for Tape<'_, S> {
    fn default() -> Self {
        Self::new()
    }
}

/// Pass-local gradient buffer of node `idx`, allocated on first touch.
fn pass_grad<'p, S: Scalar>(
    pass: &'p mut [Option<Vec<S>>],
    nodes: &[Node<'_, S>],
    idx: usize,
) -> &'p mut Vec<S> {
    let len = nodes[idx].rows * nodes[idx].cols;
    pass[idx].get_or_insert_with(|| vec![S::ZERO; len])
}

/// Distribute `grad_out` of node `i` to the pass-local gradients of its
/// inputs, all of which live strictly earlier in the arena.
fn backprop_node<S: Scalar>(
    i: usize,
    grad_out: &[S],
    nodes: &[Node<'_, S>],
    pass: &mut [Option<Vec<S>>],
) {
    let node = &nodes[i];
    let (rows, cols) = (node.rows, node.cols);
    let val = |idx: usize| nodes[idx].value.as_slice();
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b } => {
            let (a, b) = (*a, *b);
            let m = rows;
            let n = cols;
            let k = nodes[a].cols;
            if nodes[a].requires_grad {
                // dA += dC * B^T
                gemm(
                    pass_grad(pass, nodes, a),
                    S::ONE,
                    m,
                    n,
                    k,
                    S::ONE,
                    grad_out,
                    false,
                    val(b),
                    true,
                );
            }
            if nodes[b].requires_grad {
                // dB += A^T * dC
                gemm(
                    pass_grad(pass, nodes, b),
                    S::ONE,
                    k,
                    m,
                    n,
                    S::ONE,
                    val(a),
                    true,
                    grad_out,
                    false,
                );
            }
        }
        Op::Add { a, b } => {
            let (a, b) = (*a, *b);
            if nodes[a].requires_grad {
                axpy(pass_grad(pass, nodes, a), grad_out, S::ONE);
            }
            if nodes[b].requires_grad {
                axpy(pass_grad(pass, nodes, b), grad_out, S::ONE);
            }
        }
        Op::Sub { a, b } => {
            let (a, b) = (*a, *b);
            if nodes[a].requires_grad {
                axpy(pass_grad(pass, nodes, a), grad_out, S::ONE);
            }
            if nodes[b].requires_grad {
                axpy(pass_grad(pass, nodes, b), grad_out, -S::ONE);
            }
        }
        Op::Mul { a, b } => {
            let (a, b) = (*a, *b);
            if nodes[a].requires_grad {
                let other = val(b);
                let ga = pass_grad(pass, nodes, a);
                for ((g, &d), &o) in ga.iter_mut().zip(grad_out).zip(other) {
                    *g += d * o;
                }
            }
            if nodes[b].requires_grad {
                let other = val(a);
                let gb = pass_grad(pass, nodes, b);
                for ((g, &d), &o) in gb.iter_mut().zip(grad_out).zip(other) {
                    *g += d * o;
                }
            }
        }
        Op::Scale { a, factor } => {
            let (a, factor) = (*a, *factor);
            if nodes[a].requires_grad {
                axpy(pass_grad(pass, nodes, a), grad_out, factor);
            }
        }
        Op::AddRow { a, bias } => {
            let (a, bias) = (*a, *bias);
            if nodes[a].requires_grad {
                axpy(pass_grad(pass, nodes, a), grad_out, S::ONE);
            }
            if nodes[bias].requires_grad {
                let gb = pass_grad(pass, nodes, bias);
                for row in grad_out.chunks_exact(cols) {
                    for (g, &d) in gb.iter_mut().zip(row) {
                        *g += d;
                    }
                }
            }
        }
        Op::MaskedSoftmax { a, causal } => {
            let (a, causal) = (*a, *causal);
            if nodes[a].requires_grad {
                let probs = node.value.as_slice();
                let mut d_scores = vec![S::ZERO; rows * cols];
                softmax_backward(&mut d_scores, probs, grad_out, rows, cols, causal);
                axpy(pass_grad(pass, nodes, a), &d_scores, S::ONE);
            }
        }
        Op::Attention {
            q,
            k,
            v,
            windows,
            heads,
            causal,
            probs,
        } => {
            attention_backward(
                grad_out,
                probs,
                (*q, *k, *v),
                (*windows, *heads, *causal),
                (rows, cols),
                nodes,
                pass,
            );
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            stats,
        } => {
            let (x, gain, bias) = (*x, *gain, *bias);
            let d = cols;
            let inv_d = S::from_f64(1.0 / d as f64);

            if nodes[gain].requires_grad {
                let x_val = val(x);
                let gg = pass_grad(pass, nodes, gain);
                for (i, row) in grad_out.chunks_exact(d).enumerate() {
                    let (mean, inv_std) = stats[i];
                    let x_row = &x_val[i * d..(i + 1) * d];
                    for ((g, &dy), &xv) in gg.iter_mut().zip(row).zip(x_row) {
                        *g += dy * (xv - mean) * inv_std;
                    }
                }
            }
            if nodes[bias].requires_grad {
                let gb = pass_grad(pass, nodes, bias);
                for row in grad_out.chunks_exact(d) {
                    for (g, &dy) in gb.iter_mut().zip(row) {
                        *g += dy;
                    }
                }
            }
            if nodes[x].requires_grad {
                let x_val = val(x);
                let gain_val = val(gain);
                let gx = pass_grad(pass, nodes, x);
                for (i, row) in grad_out.chunks_exact(d).enumerate() {
                    let (mean, inv_std) = stats[i];
                    let x_row = &x_val[i * d..(i + 1) * d];
                    let mut m1 = S::ZERO;
                    let mut m2 = S::ZERO;
                    for ((&dy, &g), &xv) in row.iter().zip(gain_val).zip(x_row) {
                        let dxhat = dy * g;
                        m1 += dxhat;
                        m2 += dxhat * (xv - mean) * inv_std;
                    }
                    m1 *= inv_d;
                    m2 *= inv_d;
                    for (((gx, &dy), &g), &xv) in gx[i * d..(i + 1) * d]
                        .iter_mut()
                        .zip(row)
                        .zip(gain_val)
                        .zip(x_row)
                    {
                        let xhat = (xv - mean) * inv_std;
                        *gx += inv_std * (dy * g - m1 - xhat * m2);
                    }
                }
            }
        }
        Op::Gelu { a } => {
            let a = *a;
            if nodes[a].requires_grad {
                let x_val = val(a);
                let ga = pass_grad(pass, nodes, a);
                for ((g, &d), &x) in ga.iter_mut().zip(grad_out).zip(x_val) {
                    *g += d * gelu_derivative(x);
                }
            }
        }
        Op::Dropout { a, mask } => {
            let a = *a;
            if nodes[a].requires_grad {
                let ga = pass_grad(pass, nodes, a);
                for ((g, &d), &m) in ga.iter_mut().zip(grad_out).zip(mask) {
                    *g += d * m;
                }
            }
        }
        Op::ConcatCols { parts } => {
            let mut offset = 0;
            for &p in parts {
                let cp = nodes[p].cols;
                if nodes[p].requires_grad {
                    let gp = pass_grad(pass, nodes, p);
                    for i in 0..rows {
                        let src = &grad_out[i * cols + offset..i * cols + offset + cp];
                        for (g, &d) in gp[i * cp..(i + 1) * cp].iter_mut().zip(src) {
                            *g += d;
                        }
                    }
                }
                offset += cp;
            }
        }
        Op::AddPositional { x, pos, window_len } => {
            let (x, pos, window_len) = (*x, *pos, *window_len);
            let d = cols;
            if nodes[x].requires_grad {
                axpy(pass_grad(pass, nodes, x), grad_out, S::ONE);
            }
            if nodes[pos].requires_grad {
                let gp = pass_grad(pass, nodes, pos);
                for (i, row) in grad_out.chunks_exact(d).enumerate() {
                    let j = i % window_len;
                    for (g, &dv) in gp[j * d..(j + 1) * d].iter_mut().zip(row) {
                        *g += dv;
                    }
                }
            }
        }
        Op::GatherRows { a, idx } => {
            let a = *a;
            if nodes[a].requires_grad {
                let c = nodes[a].cols;
                let ga = pass_grad(pass, nodes, a);
                for (i, &j) in idx.iter().enumerate() {
                    ga[i * c + j] += grad_out[i];
                }
            }
        }
        Op::WeightedSse { a, target, weight } => {
            let a = *a;
            if nodes[a].requires_grad {
                let two = S::from_f64(2.0);
                let vals = val(a);
                let ga = pass_grad(pass, nodes, a);
                for (((g, &x), &t), &w) in ga.iter_mut().zip(vals).zip(target).zip(weight) {
                    *g += grad_out[0] * two * w * (x - t);
                }
            }
        }
        Op::Sum { a } => {
            let a = *a;
            if nodes[a].requires_grad {
                let ga = pass_grad(pass, nodes, a);
                for g in ga.iter_mut() {
                    *g += grad_out[0];
                }
            }
        }
        #[cfg(test)]
        Op::ScaleBadGrad { a, factor } => {
            let (a, factor) = (*a, *factor);
            if nodes[a].requires_grad {
                let wrong = factor + S::from_f64(0.5);
                axpy(pass_grad(pass, nodes, a), grad_out, wrong);
            }
        }
    }
}

fn attention_backward<S: Scalar>(
    grad_out: &[S],
    probs: &[S],
    (q, k, v): (usize, usize, usize),
    (windows, heads, causal): (usize, usize, bool),
    (rows, d): (usize, usize),
    nodes: &[Node<'_, S>],
    pass: &mut [Option<Vec<S>>],
) {
    let n = rows / windows;
    let dk = d / heads;
    let alpha = S::from_f64(1.0 / (dk as f64).sqrt());
    let mut d_p = vec![S::ZERO; n * n];
    let mut d_scores = vec![S::ZERO; n * n];

    let q_val = nodes[q].value.as_slice();
    let k_val = nodes[k].value.as_slice();
    let v_val = nodes[v].value.as_slice();

    // Block gradients are staged locally and flushed afterwards; q, k, v may
    // alias the same node in self-attention.
    let mut gq = vec![S::ZERO; rows * d];
    let mut gk = vec![S::ZERO; rows * d];
    let mut gv = vec![S::ZERO; rows * d];

    for w in 0..windows {
        for h in 0..heads {
            let block = w * n * d + h * dk;
            let p = &probs[(w * heads + h) * n * n..][..n * n];
            unsafe {
                // dV_blk += P^T dOut_blk
                S::gemm_strided(
                    n,
                    n,
                    dk,
                    S::ONE,
                    p.as_ptr(),
                    1,
                    n as isize,
                    grad_out.as_ptr().add(block),
                    d as isize,
                    1,
                    S::ONE,
                    gv.as_mut_ptr().add(block),
                    d as isize,
                    1,
                );
                // dP = dOut_blk V_blk^T
                S::gemm_strided(
                    n,
                    dk,
                    n,
                    S::ONE,
                    grad_out.as_ptr().add(block),
                    d as isize,
                    1,
                    v_val.as_ptr().add(block),
                    1,
                    d as isize,
                    S::ZERO,
                    d_p.as_mut_ptr(),
                    n as isize,
                    1,
                );
            }
            d_scores.fill(S::ZERO);
            softmax_backward(&mut d_scores, p, &d_p, n, n, causal);
            unsafe {
                // dQ_blk += alpha * dS K_blk
                S::gemm_strided(
                    n,
                    n,
                    dk,
                    alpha,
                    d_scores.as_ptr(),
                    n as isize,
                    1,
                    k_val.as_ptr().add(block),
                    d as isize,
                    1,
                    S::ONE,
                    gq.as_mut_ptr().add(block),
                    d as isize,
                    1,
                );
                // dK_blk += alpha * dS^T Q_blk
                S::gemm_strided(
                    n,
                    n,
                    dk,
                    alpha,
                    d_scores.as_ptr(),
                    1,
                    n as isize,
                    q_val.as_ptr().add(block),
                    d as isize,
                    1,
                    S::ONE,
                    gk.as_mut_ptr().add(block),
                    d as isize,
                    1,
                );
            }
        }
    }

    if nodes[q].requires_grad {
        axpy(pass_grad(pass, nodes, q), &gq, S::ONE);
    }
    if nodes[k].requires_grad {
        axpy(pass_grad(pass, nodes, k), &gk, S::ONE);
    }
    if nodes[v].requires_grad {
        axpy(pass_grad(pass, nodes, v), &gv, S::ONE);
    }
}

/// y += alpha * x
fn axpy<S: Scalar>(y: &mut [S], x: &[S], alpha: S) {
    debug_assert_eq!(y.len(), x.len());
    for (yi, &xi) in y.iter_mut().zip(x) {
        *yi += alpha * xi;
    }
}

/// Row-major gemm over contiguous matrices with optional logical transposes:
/// `C[m x n] = alpha * op(A) op(B) + beta * C`.
#[allow(clippy::too_many_arguments)]
fn gemm<S: Scalar>(
    c: &mut [S],
    beta: S,
    m: usize,
    k: usize,
    n: usize,
    alpha: S,
    a: &[S],
    transpose_a: bool,
    b: &[S],
    transpose_b: bool,
) {
    debug_assert_eq!(c.len(), m * n);
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    if m == 0 || n == 0 {
        return;
    }
    let (rsa, csa) = if transpose_a {
        (1, m as isize)
    } else {
        (k as isize, 1)
    };
    let (rsb, csb) = if transpose_b {
        (1, k as isize)
    } else {
        (n as isize, 1)
    };
    unsafe {
        S::gemm_strided(
            m,
            k,
            n,
            alpha,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// In-place row-wise softmax with max-subtraction. Causal masking zeroes
/// columns strictly above the diagonal exactly.
fn softmax_rows<S: Scalar>(data: &mut [S], rows: usize, cols: usize, causal: bool) {
    for i in 0..rows {
        let row = &mut data[i * cols..(i + 1) * cols];
        let limit = if causal { i + 1 } else { cols };
        let mut max = row[0];
        for &x in &row[..limit] {
            if x > max {
                max = x;
            }
        }
        let mut sum = S::ZERO;
        for x in &mut row[..limit] {
            *x = (*x - max).exp();
            sum += *x;
        }
        let inv = S::ONE / sum;
        for x in &mut row[..limit] {
            *x *= inv;
        }
        for x in &mut row[limit..] {
            *x = S::ZERO;
        }
    }
}

/// dS[i,j] = P[i,j] * (dP[i,j] - sum_l dP[i,l] P[i,l]) on the unmasked part.
fn softmax_backward<S: Scalar>(
    d_scores: &mut [S],
    probs: &[S],
    d_probs: &[S],
    rows: usize,
    cols: usize,
    causal: bool,
) {
    for i in 0..rows {
        let limit = if causal { i + 1 } else { cols };
        let p = &probs[i * cols..i * cols + limit];
        let dp = &d_probs[i * cols..i * cols + limit];
        let mut dot = S::ZERO;
        for (&pj, &dj) in p.iter().zip(dp) {
            dot += pj * dj;
        }
        let out = &mut d_scores[i * cols..i * cols + limit];
        for ((o, &pj), &dj) in out.iter_mut().zip(p).zip(dp) {
            *o = pj * (dj - dot);
        }
    }
}

/// Tanh-approximation GELU.
pub fn gelu_value<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let coeff = S::from_f64(GELU_COEFF);
    let root = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let inner = root * (x + coeff * x * x * x);
    half * x * (S::ONE + inner.tanh())
}

fn gelu_derivative<S: Scalar>(x: S) -> S {
    let half = S::from_f64(0.5);
    let coeff = S::from_f64(GELU_COEFF);
    let three = S::from_f64(3.0);
    let root = S::from_f64((2.0 / std::f64::consts::PI).sqrt());
    let inner = root * (x + coeff * x * x * x);
    let t = inner.tanh();
    let sech2 = S::ONE - t * t;
    half * (S::ONE + t) + half * x * sech2 * root * (S::ONE + three * coeff * x * x)
}
