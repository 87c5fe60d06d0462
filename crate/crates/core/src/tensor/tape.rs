//! Reverse-mode differentiation over an append-only tape.
//!
//! Nodes are appended in evaluation order, so reverse index order is a valid
//! topological order and cycles cannot be expressed.

use super::batchnorm::{bn_backward, bn_forward, RunningStats};
use super::ops::{
    self, axis_split, check_targets, conv3d_backward, conv3d_raw, cross_entropy_parts,
    dropout_mask, inverse_permutation, temporal_as_3d, ConvDims, ConvGeometry, DropoutKey, Mode,
};
use super::{gemm, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<S> {
    Leaf,
    Conv3d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeometry,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, S),
    Sum(Var),
    Reshape(Var),
    Permute {
        x: Var,
        axes: Vec<usize>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Bmm {
        a: Var,
        b: Var,
        trans_b: bool,
    },
    Softmax {
        x: Var,
        axis: usize,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<S>,
        inv_std: Vec<S>,
        mode: Mode,
    },
    Elu(Var),
    Relu(Var),
    Dropout {
        x: Var,
        mask: Vec<S>,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        probs: Vec<S>,
    },
}

struct Node<S> {
    value: Tensor<S>,
    op: Op<S>,
}

/// Computation graph recorder. Build values with the op methods, then call
/// [`Tape::backward`] on a scalar.
pub struct Tape<S> {
    nodes: Vec<Node<S>>,
}

impl<S: Scalar> Default for Tape<S> {
    fn default() -> Self {
        Self::new()
    }
}

impl<S: Scalar> Tape<S> {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<S> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Gradient of the last backward pass with respect to a leaf.
    pub fn grad(&self, v: Var) -> Option<&[S]> {
        self.nodes[v.0].value.grad()
    }

    fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].value.requires_grad()
    }

    fn push(&mut self, value: Tensor<S>, op: Op<S>, parents: &[Var], name: &str) -> Result<Var> {
        value.ensure_finite(name)?;
        let rg = parents.iter().any(|&p| self.requires_grad(p));
        self.nodes.push(Node {
            value: value.with_requires_grad(rg),
            op,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Records an input. Gradients are kept for leaves with `requires_grad`.
    pub fn leaf(&mut self, value: Tensor<S>) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value.with_requires_grad(false))
    }

    pub fn param(&mut self, value: Tensor<S>) -> Var {
        self.leaf(value.with_requires_grad(true))
    }

    pub fn conv3d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let d = ConvDims::new(self.shape(x), self.shape(w), geom)?;
        if let Some(b) = b {
            if self.shape(b) != [d.cout] {
                return Err(shape_err!(
                    "conv bias {:?}, expected [{}]",
                    self.shape(b),
                    d.cout
                ));
            }
        }
        let out = conv3d_raw(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &d,
        );
        let value = Tensor::new(&d.out_shape(), out)?;
        let mut parents = vec![x, w];
        parents.extend(b);
        self.push(value, Op::Conv3d { x, w, b, geom }, &parents, "conv3d")
    }

    /// Temporal convolution `B×Cin×P×T` by `Cout×Cin×1×kt` with symmetric
    /// "same" padding.
    pub fn conv_temporal(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (xs, ws) = temporal_as_3d(self.shape(x), self.shape(w))?;
        let x5 = self.reshape(x, &xs)?;
        let w5 = self.reshape(w, &ws)?;
        let y = self.conv3d(x5, w5, b, ConvGeometry::same_temporal(1, ws[4]))?;
        let s = self.shape(y).to_vec();
        self.reshape(y, &[s[0], s[1], s[2], s[4]])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("add {:?} + {:?}", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(va.shape(), |i| va.data()[i] + vb.data()[i]);
        self.push(value, Op::Add(a, b), &[a, b], "add")
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err!("mul {:?} * {:?}", self.shape(a), self.shape(b)));
        }
        let (va, vb) = (self.value(a), self.value(b));
        let value = Tensor::from_fn(va.shape(), |i| va.data()[i] * vb.data()[i]);
        self.push(value, Op::Mul(a, b), &[a, b], "mul")
    }

    pub fn scale(&mut self, x: Var, s: S) -> Result<Var> {
        let vx = self.value(x);
        let value = Tensor::from_fn(vx.shape(), |i| vx.data()[i] * s);
        self.push(value, Op::Scale(x, s), &[x], "scale")
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let total: S = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x], "sum")
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        self.push(value, Op::Reshape(x), &[x], "reshape")
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = ops::permute(self.value(x), axes)?;
        self.push(
            value,
            Op::Permute {
                x,
                axes: axes.to_vec(),
            },
            &[x],
            "permute",
        )
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let values: Vec<&Tensor<S>> = parts.iter().map(|&p| self.value(p)).collect();
        let value = ops::concat(&values, axis)?;
        self.push(
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
            "concat",
        )
    }

    pub fn bmm(&mut self, a: Var, b: Var, trans_b: bool) -> Result<Var> {
        let value = ops::bmm(self.value(a), self.value(b), trans_b)?;
        self.push(value, Op::Bmm { a, b, trans_b }, &[a, b], "bmm")
    }

    /// 2-D matrix product, recorded as a single-batch [`Tape::bmm`].
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 {
            return Err(shape_err!(
                "matmul needs matrices, got {:?} and {:?}",
                sa,
                sb
            ));
        }
        let a3 = self.reshape(a, &[1, sa[0], sa[1]])?;
        let b3 = self.reshape(b, &[1, sb[0], sb[1]])?;
        let c = self.bmm(a3, b3, false)?;
        self.reshape(c, &[sa[0], sb[1]])
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let value = ops::softmax(self.value(x), axis)?;
        self.push(value, Op::Softmax { x, axis }, &[x], "softmax")
    }

    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        stats: &mut RunningStats<S>,
        mode: Mode,
    ) -> Result<Var> {
        let fwd = bn_forward(
            self.value(x).data(),
            self.shape(x),
            self.value(gamma).data(),
            self.value(beta).data(),
            stats,
            mode,
        )?;
        let value = Tensor::new(self.shape(x), fwd.out)?;
        self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat: fwd.xhat,
                inv_std: fwd.inv_std,
                mode,
            },
            &[x, gamma, beta],
            "batchnorm",
        )
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        let value = ops::elu(self.value(x));
        self.push(value, Op::Elu(x), &[x], "elu")
    }

    pub fn relu(&mut self, x: Var) -> Result<Var> {
        let value = ops::relu(self.value(x));
        self.push(value, Op::Relu(x), &[x], "relu")
    }

    pub fn dropout(&mut self, x: Var, prob: f64, mode: Mode, key: DropoutKey) -> Result<Var> {
        if !(0.0..1.0).contains(&prob) {
            return Err(Error::InvalidArgument(format!(
                "dropout probability {prob} outside [0, 1)"
            )));
        }
        if mode == Mode::Eval || prob == 0.0 {
            return Ok(x);
        }
        let mask = dropout_mask::<S>(self.value(x).numel(), prob, key);
        let vx = self.value(x);
        let value = Tensor::from_fn(vx.shape(), |i| vx.data()[i] * mask[i]);
        self.push(value, Op::Dropout { x, mask }, &[x], "dropout")
    }

    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let value = ops::linear(self.value(x), self.value(w), self.value(b))?;
        self.push(value, Op::Linear { x, w, b }, &[x, w, b], "linear")
    }

    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize]) -> Result<Var> {
        let (rows, k) = check_targets(self.shape(logits), targets)?;
        let (loss, probs) = cross_entropy_parts(self.value(logits).data(), rows, k, targets);
        self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
            },
            &[logits],
            "cross_entropy",
        )
    }

    /// Reverse-mode accumulation from a scalar root. Afterwards every leaf
    /// with `requires_grad` that influences the root carries its gradient
    /// (leaves that do not influence it get none). Intermediate gradients are
    /// released as soon as they have been propagated.
    pub fn backward(&mut self, root: Var) -> Result<()> {
        if self.value(root).numel() != 1 {
            return Err(Error::InvalidArgument(format!(
                "backward needs a scalar root, got shape {:?}",
                self.shape(root)
            )));
        }
        self.value(root).ensure_finite("backward root")?;
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
        if !self.requires_grad(root) {
            return Ok(());
        }
        self.nodes[root.0].value.set_grad(Some(vec![S::of(1.0)]));

        for i in (0..=root.0).rev() {
            if matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let Some(grad) = self.nodes[i].value.take_grad() else {
                continue;
            };
            let contributions = self.adjoints(i, &grad)?;
            for (var, g) in contributions {
                assert!(var.0 < i, "tape order violated");
                if !self.requires_grad(var) {
                    continue;
                }
                let target = self.nodes[var.0].value.grad_mut_or_zeroed();
                for (t, v) in target.iter_mut().zip(&g) {
                    *t += *v;
                }
            }
        }
        for node in &self.nodes {
            if let Some(g) = node.value.grad() {
                if g.iter().any(|v| !v.is_finite()) {
                    return Err(Error::NonFinite("backward".into()));
                }
            }
        }
        Ok(())
    }

    /// Vector-Jacobian products of node `i` for every parent needing one.
    fn adjoints(&self, i: usize, dy: &[S]) -> Result<Vec<(Var, Vec<S>)>> {
        let node = &self.nodes[i];
        let need = |v: Var| self.requires_grad(v);
        let zero = S::of(0.0);
        let mut out = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, geom } => {
                let d = ConvDims::new(self.shape(*x), self.shape(*w), *geom)?;
                let g = conv3d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    dy,
                    &d,
                    (need(*x), need(*w), b.is_some_and(need)),
                );
                out.extend(g.dx.map(|g| (*x, g)));
                out.extend(g.dw.map(|g| (*w, g)));
                if let (Some(b), Some(db)) = (b, g.db) {
                    out.push((*b, db));
                }
            }
            Op::Add(a, b) => {
                out.push((*a, dy.to_vec()));
                out.push((*b, dy.to_vec()));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                out.push((*a, dy.iter().zip(vb).map(|(g, v)| *g * *v).collect()));
                out.push((*b, dy.iter().zip(va).map(|(g, v)| *g * *v).collect()));
            }
            Op::Scale(x, s) => out.push((*x, dy.iter().map(|g| *g * *s).collect())),
            Op::Sum(x) => out.push((*x, vec![dy[0]; self.value(*x).numel()])),
            Op::Reshape(x) => out.push((*x, dy.to_vec())),
            Op::Permute { x, axes } => {
                let g = Tensor::new(node.value.shape(), dy.to_vec())?;
                let back = ops::permute(&g, &inverse_permutation(axes))?;
                out.push((*x, back.into_data()));
            }
            Op::Concat { parts, axis } => {
                let (outer, _, inner) = axis_split(node.value.shape(), *axis)?;
                let total = node.value.shape()[*axis] * inner;
                let mut offset = 0;
                for &p in parts {
                    let n = self.shape(p)[*axis] * inner;
                    if need(p) {
                        let mut g = Vec::with_capacity(outer * n);
                        for o in 0..outer {
                            let start = o * total + offset;
                            g.extend_from_slice(&dy[start..start + n]);
                        }
                        out.push((p, g));
                    }
                    offset += n;
                }
            }
            Op::Bmm { a, b, trans_b } => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (bt, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if need(*a) {
                    // dA = dC · Bᵀ  (or dC · B when B was transposed)
                    let mut g = vec![zero; bt * m * k];
                    for t in 0..bt {
                        let bi = &vb[t * k * n..(t + 1) * k * n];
                        let bview = if *trans_b { (bi, k, 1) } else { (bi, 1, n) };
                        gemm(
                            m,
                            n,
                            k,
                            (&dy[t * m * n..(t + 1) * m * n], n, 1),
                            bview,
                            zero,
                            &mut g[t * m * k..(t + 1) * m * k],
                            k,
                            1,
                        );
                    }
                    out.push((*a, g));
                }
                if need(*b) {
                    let mut g = vec![zero; bt * sb[1] * sb[2]];
                    for t in 0..bt {
                        let ai = &va[t * m * k..(t + 1) * m * k];
                        let dyi = &dy[t * m * n..(t + 1) * m * n];
                        let gi = &mut g[t * k * n..(t + 1) * k * n];
                        if *trans_b {
                            // B is n×k: dB = dCᵀ · A
                            gemm(n, m, k, (dyi, 1, n), (ai, k, 1), zero, gi, k, 1);
                        } else {
                            // dB = Aᵀ · dC
                            gemm(k, m, n, (ai, 1, k), (dyi, n, 1), zero, gi, n, 1);
                        }
                    }
                    out.push((*b, g));
                }
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis)?;
                let y = node.value.data();
                let mut g = vec![zero; y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let idx = |r: usize| (o * n + r) * inner + j;
                        let dot: S = (0..n).map(|r| dy[idx(r)] * y[idx(r)]).sum();
                        for r in 0..n {
                            g[idx(r)] = y[idx(r)] * (dy[idx(r)] - dot);
                        }
                    }
                }
                out.push((*x, g));
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                mode,
            } => {
                let (dx, dg, db) = bn_backward(
                    dy,
                    self.shape(*x),
                    self.value(*gamma).data(),
                    xhat,
                    inv_std,
                    *mode,
                );
                out.push((*x, dx));
                out.push((*gamma, dg));
                out.push((*beta, db));
            }
            Op::Elu(x) => {
                let vx = self.value(*x).data();
                let y = node.value.data();
                let one = S::of(1.0);
                out.push((
                    *x,
                    dy.iter()
                        .zip(vx.iter().zip(y))
                        .map(|(g, (xv, yv))| if *xv >= zero { *g } else { *g * (*yv + one) })
                        .collect(),
                ));
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                out.push((
                    *x,
                    dy.iter()
                        .zip(vx)
                        .map(|(g, v)| if *v > zero { *g } else { zero })
                        .collect(),
                ));
            }
            Op::Dropout { x, mask } => {
                out.push((*x, dy.iter().zip(mask).map(|(g, m)| *g * *m).collect()));
            }
            Op::Linear { x, w, b } => {
                let (sx, sw) = (self.shape(*x), self.shape(*w));
                let (rows, n, m) = (sx[0], sx[1], sw[1]);
                if need(*x) {
                    let mut g = vec![zero; rows * n];
                    gemm(
                        rows,
                        m,
                        n,
                        (dy, m, 1),
                        (self.value(*w).data(), 1, m),
                        zero,
                        &mut g,
                        n,
                        1,
                    );
                    out.push((*x, g));
                }
                if need(*w) {
                    let mut g = vec![zero; n * m];
                    gemm(
                        n,
                        rows,
                        m,
                        (self.value(*x).data(), 1, n),
                        (dy, m, 1),
                        zero,
                        &mut g,
                        m,
                        1,
                    );
                    out.push((*w, g));
                }
                if need(*b) {
                    let mut g = vec![zero; m];
                    for r in 0..rows {
                        for (gj, d) in g.iter_mut().zip(&dy[r * m..(r + 1) * m]) {
                            *gj += *d;
                        }
                    }
                    out.push((*b, g));
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
            } => {
                let rows = targets.len();
                let k = probs.len() / rows;
                let scale = dy[0] / S::of(rows as f64);
                let mut g: Vec<S> = probs.iter().map(|p| *p * scale).collect();
                for (r, &t) in targets.iter().enumerate() {
                    g[r * k + t] -= scale;
                }
                out.push((*logits, g));
            }
        }
        Ok(out)
    }
}
