use std::collections::{BTreeMap, HashMap};

use super::{AutogradError, ParamId, ParamStore, Real, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Batch statistics produced by a train-mode batchnorm, for running-stat updates.
#[derive(Clone, Debug)]
pub struct BatchStats<R> {
    pub mean: Vec<R>,
    /// Unbiased (n - 1) variance per feature.
    pub var_unbiased: Vec<R>,
}

#[derive(Debug)]
enum Op<R> {
    Leaf {
        param: Option<ParamId>,
    },
    MatMul {
        a: Var,
        b: Var,
    },
    Add {
        a: Var,
        b: Var,
    },
    Sub {
        a: Var,
        b: Var,
    },
    Mul {
        a: Var,
        b: Var,
    },
    AddRow {
        a: Var,
        row: Var,
    },
    Scale {
        a: Var,
        factor: R,
    },
    AddScalar {
        a: Var,
    },
    Relu {
        a: Var,
    },
    LeakyRelu {
        a: Var,
        slope: R,
    },
    Tanh {
        a: Var,
    },
    Sigmoid {
        a: Var,
    },
    LogProb {
        a: Var,
        lo: R,
        hi: R,
    },
    Sum {
        a: Var,
    },
    Mean {
        a: Var,
    },
    MeanRows {
        a: Var,
    },
    L2Norm {
        a: Var,
    },
    ConcatRows {
        parts: Vec<Var>,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    Transpose {
        a: Var,
    },
    BatchNormTrain {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        inv_std: Vec<R>,
    },
    BatchNormEval {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<R>,
        inv_std: Vec<R>,
    },
    SoftmaxCrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<R>,
    },
}

#[derive(Debug)]
struct Node<R> {
    value: Tensor<R>,
    op: Op<R>,
    requires_grad: bool,
}

/// Linear record of forward operations, replayed in reverse by [`Tape::backward`].
///
/// Nodes are appended in execution order, so every op's inputs precede it.
#[derive(Debug, Default)]
pub struct Tape<R> {
    nodes: Vec<Node<R>>,
}

/// Result of a backward pass.
#[derive(Debug, Clone)]
pub struct Gradients<R> {
    leaves: HashMap<Var, Tensor<R>>,
    params: BTreeMap<ParamId, Tensor<R>>,
}

impl<R: Real> Gradients<R> {
    /// Gradient of a leaf variable, if it was reachable from the loss.
    pub fn get(&self, var: Var) -> Option<&Tensor<R>> {
        self.leaves.get(&var)
    }

    /// Gradient of a store parameter, summed over every binding of it.
    pub fn param(&self, id: ParamId) -> Option<&Tensor<R>> {
        self.params.get(&id)
    }

    pub fn param_ids(&self) -> impl Iterator<Item = ParamId> + '_ {
        self.params.keys().copied()
    }

    /// Writes parameter gradients into the store's `grad` fields, replacing prior values.
    pub fn write_to(&self, store: &mut ParamStore<R>) {
        for (&id, g) in &self.params {
            store.get_mut(id).grad = Some(g.data().to_vec());
        }
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> AutogradError {
    AutogradError::ShapeMismatch {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

impl<R: Real> Tape<R> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<R> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(
        &mut self,
        op: &'static str,
        value: Tensor<R>,
        node_op: Op<R>,
        requires_grad: bool,
    ) -> Result<Var, AutogradError> {
        if !value.all_finite() {
            return Err(AutogradError::NonFinite { op });
        }
        let value = value.with_requires_grad(requires_grad);
        self.nodes.push(Node {
            value,
            op: node_op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    fn dims2(&self, op: &'static str, v: Var) -> Result<(usize, usize), AutogradError> {
        self.value(v)
            .dims2()
            .ok_or_else(|| AutogradError::RankMismatch {
                op,
                expected: 2,
                shape: self.shape(v).to_vec(),
            })
    }

    /// Records a leaf; gradients are tracked when `tensor.requires_grad` is set.
    pub fn leaf(&mut self, tensor: Tensor<R>) -> Result<Var, AutogradError> {
        let rg = tensor.requires_grad;
        let mut t = tensor;
        t.grad = None;
        self.push("leaf", t, Op::Leaf { param: None }, rg)
    }

    pub fn constant(&mut self, tensor: Tensor<R>) -> Result<Var, AutogradError> {
        self.leaf(tensor.with_requires_grad(false))
    }

    /// Binds a store entry as a trainable leaf.
    pub fn param(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        let t = store.get(id).detached();
        let rg = store.get(id).requires_grad;
        self.nodes.push(Node {
            value: t.with_requires_grad(rg),
            op: Op::Leaf { param: Some(id) },
            requires_grad: rg,
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a store entry as a constant (no gradient flows to it).
    pub fn param_frozen(&mut self, store: &ParamStore<R>, id: ParamId) -> Var {
        self.nodes.push(Node {
            value: store.get(id).detached(),
            op: Op::Leaf { param: None },
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    /// Copy of `v` that blocks gradient flow.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).detached();
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf { param: None },
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let (m, k) = self.dims2("matmul", a)?;
        let (k2, n) = self.dims2("matmul", b)?;
        if k != k2 {
            return Err(shape_err("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![R::zero(); m * n];
        R::gemm(
            m,
            k,
            n,
            R::one(),
            self.value(a).data(),
            (k as isize, 1),
            self.value(b).data(),
            (n as isize, 1),
            R::zero(),
            &mut out,
            (n as isize, 1),
        );
        let rg = self.rg(&[a, b]);
        self.push(
            "matmul",
            Tensor::new(&[m, n], out)?,
            Op::MatMul { a, b },
            rg,
        )
    }

    fn zip_same(
        &mut self,
        op: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(R, R) -> R,
    ) -> Result<Tensor<R>, AutogradError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(op, ta.shape(), tb.shape()));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(ta.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let t = self.zip_same("add", a, b, |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        self.push("add", t, Op::Add { a, b }, rg)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let t = self.zip_same("sub", a, b, |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        self.push("sub", t, Op::Sub { a, b }, rg)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutogradError> {
        let t = self.zip_same("mul", a, b, |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        self.push("mul", t, Op::Mul { a, b }, rg)
    }

    /// Broadcast-add of a `[d]` row vector to every row of an `[n, d]` matrix.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutogradError> {
        let (n, d) = self.dims2("add_row", a)?;
        if self.shape(row) != [d] {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for i in 0..n {
            for (x, &b) in data[i * d..(i + 1) * d].iter_mut().zip(r) {
                *x += b;
            }
        }
        let rg = self.rg(&[a, row]);
        self.push(
            "add_row",
            Tensor::new(&[n, d], data)?,
            Op::AddRow { a, row },
            rg,
        )
    }

    fn map(&self, a: Var, f: impl Fn(R) -> R) -> Tensor<R> {
        let t = self.value(a);
        Tensor::new(t.shape(), t.data().iter().map(|&x| f(x)).collect()).expect("same shape")
    }

    pub fn scale(&mut self, a: Var, factor: R) -> Result<Var, AutogradError> {
        let t = self.map(a, |x| x * factor);
        let rg = self.rg(&[a]);
        self.push("scale", t, Op::Scale { a, factor }, rg)
    }

    pub fn add_scalar(&mut self, a: Var, c: R) -> Result<Var, AutogradError> {
        let t = self.map(a, |x| x + c);
        let rg = self.rg(&[a]);
        self.push("add_scalar", t, Op::AddScalar { a }, rg)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, AutogradError> {
        let t = self.map(a, |x| if x > R::zero() { x } else { R::zero() });
        let rg = self.rg(&[a]);
        self.push("relu", t, Op::Relu { a }, rg)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: R) -> Result<Var, AutogradError> {
        let t = self.map(a, |x| if x > R::zero() { x } else { x * slope });
        let rg = self.rg(&[a]);
        self.push("leaky_relu", t, Op::LeakyRelu { a, slope }, rg)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, AutogradError> {
        let t = self.map(a, |x| x.tanh());
        let rg = self.rg(&[a]);
        self.push("tanh", t, Op::Tanh { a }, rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, AutogradError> {
        let t = self.map(a, |x| {
            if x >= R::zero() {
                R::one() / (R::one() + (-x).exp())
            } else {
                let e = x.exp();
                e / (R::one() + e)
            }
        });
        let rg = self.rg(&[a]);
        self.push("sigmoid", t, Op::Sigmoid { a }, rg)
    }

    /// Elementwise `ln(clamp(a, eps, 1 - eps))` for probabilities.
    ///
    /// Clamped entries receive zero gradient; clamping is logged as a warning.
    pub fn log_prob(&mut self, a: Var, eps: R) -> Result<Var, AutogradError> {
        let (lo, hi) = (eps, R::one() - eps);
        let clamped = self
            .value(a)
            .data()
            .iter()
            .filter(|&&x| x < lo || x > hi)
            .count();
        if clamped > 0 {
            log::warn!("log_prob: clamped {clamped} probabilities to [{lo}, {hi}]");
        }
        let t = self.map(a, |x| x.max(lo).min(hi).ln());
        let rg = self.rg(&[a]);
        self.push("log_prob", t, Op::LogProb { a, lo, hi }, rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, AutogradError> {
        let s: R = self.value(a).data().iter().copied().sum();
        let rg = self.rg(&[a]);
        self.push("sum", Tensor::scalar(s), Op::Sum { a }, rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, AutogradError> {
        let t = self.value(a);
        let s: R = t.data().iter().copied().sum();
        let m = s / R::lit(t.numel() as f64);
        let rg = self.rg(&[a]);
        self.push("mean", Tensor::scalar(m), Op::Mean { a }, rg)
    }

    /// Column means of an `[n, d]` matrix, giving `[d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var, AutogradError> {
        let (n, d) = self.dims2("mean_rows", a)?;
        let t = self.value(a);
        let mut out = vec![R::zero(); d];
        for i in 0..n {
            for (o, &x) in out.iter_mut().zip(t.row(i)) {
                *o += x;
            }
        }
        let inv = R::one() / R::lit(n as f64);
        out.iter_mut().for_each(|x| *x *= inv);
        let rg = self.rg(&[a]);
        self.push("mean_rows", Tensor::new(&[d], out)?, Op::MeanRows { a }, rg)
    }

    /// Euclidean norm of all entries, as a scalar.
    pub fn l2_norm(&mut self, a: Var) -> Result<Var, AutogradError> {
        let s: R = self.value(a).data().iter().map(|&x| x * x).sum();
        let rg = self.rg(&[a]);
        self.push("l2_norm", Tensor::scalar(s.sqrt()), Op::L2Norm { a }, rg)
    }

    /// Stacks tensors along the leading axis; trailing dimensions must agree.
    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var, AutogradError> {
        let first = *parts.first().ok_or(AutogradError::InvalidArgument(
            "concat of zero tensors".into(),
        ))?;
        let tail = self.shape(first)[1..].to_vec();
        let mut lead = 0;
        let mut data = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            if s[1..] != tail[..] {
                return Err(shape_err("concat_rows", self.shape(first), s));
            }
            lead += s[0];
            data.extend_from_slice(self.value(p).data());
        }
        let mut shape = vec![lead];
        shape.extend_from_slice(&tail);
        let rg = self.rg(parts);
        self.push(
            "concat_rows",
            Tensor::new(&shape, data)?,
            Op::ConcatRows {
                parts: parts.to_vec(),
            },
            rg,
        )
    }

    /// Rows `start..end` along the leading axis.
    pub fn slice_rows(&mut self, a: Var, start: usize, end: usize) -> Result<Var, AutogradError> {
        let s = self.shape(a).to_vec();
        if start >= end || end > s[0] {
            return Err(AutogradError::InvalidArgument(format!(
                "slice_rows {start}..{end} out of range for shape {s:?}"
            )));
        }
        let inner: usize = s[1..].iter().product();
        let data = self.value(a).data()[start * inner..end * inner].to_vec();
        let mut shape = s.clone();
        shape[0] = end - start;
        let rg = self.rg(&[a]);
        self.push(
            "slice_rows",
            Tensor::new(&shape, data)?,
            Op::SliceRows { a, start },
            rg,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, AutogradError> {
        let (r, c) = self.dims2("transpose", a)?;
        let src = self.value(a).data();
        let mut out = vec![R::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        let rg = self.rg(&[a]);
        self.push(
            "transpose",
            Tensor::new(&[c, r], out)?,
            Op::Transpose { a },
            rg,
        )
    }

    /// Batchnorm over the batch axis of `x: [n, d]` using batch statistics.
    pub fn batch_norm_train(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        eps: R,
    ) -> Result<(Var, BatchStats<R>), AutogradError> {
        let (n, d) = self.dims2("batch_norm", x)?;
        if n < 2 {
            return Err(AutogradError::InvalidArgument(format!(
                "batch_norm in train mode needs batch >= 2, got {n}"
            )));
        }
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(shape_err("batch_norm", self.shape(x), self.shape(p)));
            }
        }
        let xs = self.value(x).data();
        let nf = R::lit(n as f64);
        let mut mean = vec![R::zero(); d];
        for i in 0..n {
            for (m, &v) in mean.iter_mut().zip(&xs[i * d..(i + 1) * d]) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= nf);
        let mut ss = vec![R::zero(); d];
        for i in 0..n {
            for j in 0..d {
                let c = xs[i * d + j] - mean[j];
                ss[j] += c * c;
            }
        }
        let inv_std: Vec<R> = ss
            .iter()
            .map(|&s| R::one() / (s / nf + eps).sqrt())
            .collect();
        let var_unbiased: Vec<R> = ss.iter().map(|&s| s / R::lit((n - 1) as f64)).collect();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![R::zero(); n * d];
        let mut out = vec![R::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (xs[i * d + j] - mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        let v = self.push(
            "batch_norm",
            Tensor::new(&[n, d], out)?,
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )?;
        Ok((v, BatchStats { mean, var_unbiased }))
    }

    /// Batchnorm using fixed (running) statistics.
    pub fn batch_norm_eval(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        running_mean: &[R],
        running_var: &[R],
        eps: R,
    ) -> Result<Var, AutogradError> {
        let (n, d) = self.dims2("batch_norm", x)?;
        for p in [gamma, beta] {
            if self.shape(p) != [d] {
                return Err(shape_err("batch_norm", self.shape(x), self.shape(p)));
            }
        }
        if running_mean.len() != d || running_var.len() != d {
            return Err(shape_err("batch_norm", &[n, d], &[running_mean.len()]));
        }
        let inv_std: Vec<R> = running_var
            .iter()
            .map(|&v| R::one() / (v + eps).sqrt())
            .collect();
        let xs = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let mut xhat = vec![R::zero(); n * d];
        let mut out = vec![R::zero(); n * d];
        for i in 0..n {
            for j in 0..d {
                let h = (xs[i * d + j] - running_mean[j]) * inv_std[j];
                xhat[i * d + j] = h;
                out[i * d + j] = h * g[j] + b[j];
            }
        }
        let rg = self.rg(&[x, gamma, beta]);
        self.push(
            "batch_norm",
            Tensor::new(&[n, d], out)?,
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            rg,
        )
    }

    /// Mean over rows of `-log softmax(logits)[target]`, computed with max subtraction.
    pub fn softmax_cross_entropy(
        &mut self,
        logits: Var,
        targets: &[usize],
    ) -> Result<Var, AutogradError> {
        let (n, k) = self.dims2("softmax_cross_entropy", logits)?;
        if targets.len() != n {
            return Err(shape_err(
                "softmax_cross_entropy",
                &[n, k],
                &[targets.len()],
            ));
        }
        if let Some(&t) = targets.iter().find(|&&t| t >= k) {
            return Err(AutogradError::TargetOutOfRange {
                target: t,
                classes: k,
            });
        }
        let z = self.value(logits).data();
        let mut probs = vec![R::zero(); n * k];
        let mut total = R::zero();
        for i in 0..n {
            let row = &z[i * k..(i + 1) * k];
            let mx = row.iter().copied().fold(R::neg_infinity(), R::max);
            let mut s = R::zero();
            for (p, &v) in probs[i * k..(i + 1) * k].iter_mut().zip(row) {
                *p = (v - mx).exp();
                s += *p;
            }
            probs[i * k..(i + 1) * k].iter_mut().for_each(|p| *p /= s);
            total += s.ln() + mx - row[targets[i]];
        }
        let loss = total / R::lit(n as f64);
        let rg = self.rg(&[logits]);
        self.push(
            "softmax_cross_entropy",
            Tensor::scalar(loss),
            Op::SoftmaxCrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            rg,
        )
    }

    /// Reverse-mode sweep from a scalar `loss`, consuming the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients<R>, AutogradError> {
        if self.nodes.is_empty() {
            return Err(AutogradError::EmptyTape);
        }
        if !self.value(loss).is_scalar() {
            return Err(AutogradError::NotScalar(self.shape(loss).to_vec()));
        }
        let mut grads: Vec<Option<Vec<R>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![R::one()]);

        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            if let Op::Leaf { .. } = node.op {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(node, &g, &mut grads);
        }

        let mut leaves = HashMap::new();
        let mut params: BTreeMap<ParamId, Tensor<R>> = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            let Op::Leaf { param } = node.op else {
                continue;
            };
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let t = Tensor::new(node.value.shape(), g)?;
            if let Some(pid) = param {
                match params.get_mut(&pid) {
                    Some(acc) => acc
                        .data_mut()
                        .iter_mut()
                        .zip(t.data())
                        .for_each(|(a, &b)| *a += b),
                    None => {
                        params.insert(pid, t.clone());
                    }
                }
            }
            leaves.insert(Var(i), t);
        }
        Ok(Gradients { leaves, params })
    }

    fn backward_node(&self, node: &Node<R>, g: &[R], grads: &mut [Option<Vec<R>>]) {
        let val = |v: Var| self.nodes[v.0].value.data();
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [R])| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            let n = self.nodes[v.0].value.numel();
            let buf = grads[v.0].get_or_insert_with(|| vec![R::zero(); n]);
            f(buf);
        };
        match &node.op {
            Op::Leaf { .. } => {}
            Op::MatMul { a, b } => {
                let (m, k) = self.nodes[a.0].value.dims2().unwrap();
                let n = self.nodes[b.0].value.dims2().unwrap().1;
                // dA = G · Bᵀ
                acc(*a, &mut |ga| {
                    R::gemm(
                        m,
                        n,
                        k,
                        R::one(),
                        g,
                        (n as isize, 1),
                        val(*b),
                        (1, n as isize),
                        R::one(),
                        ga,
                        (k as isize, 1),
                    )
                });
                // dB = Aᵀ · G
                acc(*b, &mut |gb| {
                    R::gemm(
                        k,
                        m,
                        n,
                        R::one(),
                        val(*a),
                        (1, k as isize),
                        g,
                        (n as isize, 1),
                        R::one(),
                        gb,
                        (n as isize, 1),
                    )
                });
            }
            Op::Add { a, b } => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
            }
            Op::Sub { a, b } => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
                acc(*b, &mut |gb| {
                    gb.iter_mut().zip(g).for_each(|(x, &y)| *x -= y)
                });
            }
            Op::Mul { a, b } => {
                let (va, vb) = (val(*a), val(*b));
                acc(*a, &mut |ga| {
                    for ((x, &gy), &o) in ga.iter_mut().zip(g).zip(vb) {
                        *x += gy * o;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, &gy), &o) in gb.iter_mut().zip(g).zip(va) {
                        *x += gy * o;
                    }
                });
            }
            Op::AddRow { a, row } => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
                let d = self.nodes[row.0].value.numel();
                acc(*row, &mut |gr| {
                    for chunk in g.chunks(d) {
                        gr.iter_mut().zip(chunk).for_each(|(x, &y)| *x += y);
                    }
                });
            }
            Op::Scale { a, factor } => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y * *factor)
                });
            }
            Op::AddScalar { a } => {
                acc(*a, &mut |ga| {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y)
                });
            }
            Op::Relu { a } => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(va) {
                        if v > R::zero() {
                            *x += gy;
                        }
                    }
                });
            }
            Op::LeakyRelu { a, slope } => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(va) {
                        *x += if v > R::zero() { gy } else { gy * *slope };
                    }
                });
            }
            Op::Tanh { a } => {
                let out = node.value.data();
                acc(*a, &mut |ga| {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * (R::one() - y * y);
                    }
                });
            }
            Op::Sigmoid { a } => {
                let out = node.value.data();
                acc(*a, &mut |ga| {
                    for ((x, &gy), &y) in ga.iter_mut().zip(g).zip(out) {
                        *x += gy * y * (R::one() - y);
                    }
                });
            }
            Op::LogProb { a, lo, hi } => {
                let va = val(*a);
                acc(*a, &mut |ga| {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(va) {
                        if v >= *lo && v <= *hi {
                            *x += gy / v;
                        }
                    }
                });
            }
            Op::Sum { a } => {
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0]));
            }
            Op::Mean { a } => {
                let n = R::lit(self.nodes[a.0].value.numel() as f64);
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0] / n));
            }
            Op::MeanRows { a } => {
                let (n, d) = self.nodes[a.0].value.dims2().unwrap();
                let inv = R::one() / R::lit(n as f64);
                acc(*a, &mut |ga| {
                    for chunk in ga.chunks_mut(d) {
                        chunk.iter_mut().zip(g).for_each(|(x, &y)| *x += y * inv);
                    }
                });
            }
            Op::L2Norm { a } => {
                let norm = node.value.data()[0];
                if norm > R::zero() {
                    let va = val(*a);
                    acc(*a, &mut |ga| {
                        for (x, &v) in ga.iter_mut().zip(va) {
                            *x += g[0] * v / norm;
                        }
                    });
                }
            }
            Op::ConcatRows { parts } => {
                let mut offset = 0;
                for p in parts {
                    let len = self.nodes[p.0].value.numel();
                    let slice = &g[offset..offset + len];
                    acc(*p, &mut |gp| {
                        gp.iter_mut().zip(slice).for_each(|(x, &y)| *x += y)
                    });
                    offset += len;
                }
            }
            Op::SliceRows { a, start } => {
                let inner: usize = self.nodes[a.0].value.shape()[1..].iter().product();
                let off = start * inner;
                acc(*a, &mut |ga| {
                    ga[off..off + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(x, &y)| *x += y)
                });
            }
            Op::Transpose { a } => {
                let (r, c) = self.nodes[a.0].value.dims2().unwrap();
                acc(*a, &mut |ga| {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                });
            }
            Op::BatchNormTrain {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = node.value.dims2().unwrap();
                let gam = val(*gamma);
                let mut sum_dy = vec![R::zero(); d];
                let mut sum_dy_xhat = vec![R::zero(); d];
                for i in 0..n {
                    for j in 0..d {
                        sum_dy[j] += g[i * d + j];
                        sum_dy_xhat[j] += g[i * d + j] * xhat[i * d + j];
                    }
                }
                acc(*gamma, &mut |gg| {
                    gg.iter_mut().zip(&sum_dy_xhat).for_each(|(x, &y)| *x += y)
                });
                acc(*beta, &mut |gb| {
                    gb.iter_mut().zip(&sum_dy).for_each(|(x, &y)| *x += y)
                });
                let nf = R::lit(n as f64);
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        for j in 0..d {
                            let k = i * d + j;
                            let dxhat_term = nf * g[k] - sum_dy[j] - xhat[k] * sum_dy_xhat[j];
                            gx[k] += gam[j] * inv_std[j] / nf * dxhat_term;
                        }
                    }
                });
            }
            Op::BatchNormEval {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            } => {
                let (n, d) = node.value.dims2().unwrap();
                let gam = val(*gamma);
                acc(*gamma, &mut |gg| {
                    for i in 0..n {
                        for j in 0..d {
                            gg[j] += g[i * d + j] * xhat[i * d + j];
                        }
                    }
                });
                acc(*beta, &mut |gb| {
                    for i in 0..n {
                        for j in 0..d {
                            gb[j] += g[i * d + j];
                        }
                    }
                });
                acc(*x, &mut |gx| {
                    for i in 0..n {
                        for j in 0..d {
                            gx[i * d + j] += g[i * d + j] * gam[j] * inv_std[j];
                        }
                    }
                });
            }
            Op::SoftmaxCrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let k = probs.len() / targets.len();
                let scale = g[0] / R::lit(targets.len() as f64);
                acc(*logits, &mut |gl| {
                    for (i, &t) in targets.iter().enumerate() {
                        for j in 0..k {
                            let onehot = if j == t { R::one() } else { R::zero() };
                            gl[i * k + j] += scale * (probs[i * k + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}
