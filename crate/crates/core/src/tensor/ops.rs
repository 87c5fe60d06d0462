//! Forward kernels. Each function validates shapes, computes its output and
//! rejects non-finite results. The tape reuses these and adds the adjoints.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{gemm, Scalar, Tensor};
use crate::error::{shape_err, Error, Result};

/// Train/eval switch for BatchNorm and Dropout.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Spatial stride and symmetric temporal zero padding of a 3-D convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub stride: usize,
    pub pad_front: usize,
    pub pad_back: usize,
}

impl ConvGeometry {
    pub fn valid(stride: usize) -> Self {
        Self {
            stride,
            pad_front: 0,
            pad_back: 0,
        }
    }

    /// Padding that keeps the temporal extent. For even kernels the extra
    /// zero goes to the trailing side.
    pub fn same_temporal(stride: usize, kt: usize) -> Self {
        let total = kt.saturating_sub(1);
        let pad_front = total / 2;
        Self {
            stride,
            pad_front,
            pad_back: total - pad_front,
        }
    }
}

/// Resolved extents of a conv3d call.
#[derive(Clone, Copy, Debug)]
pub(crate) struct ConvDims {
    pub batch: usize,
    pub cin: usize,
    pub d1: usize,
    pub d2: usize,
    pub t: usize,
    pub cout: usize,
    pub k1: usize,
    pub k2: usize,
    pub kt: usize,
    pub o1: usize,
    pub o2: usize,
    pub ot: usize,
    pub stride: usize,
    pub pad_front: usize,
}

impl ConvDims {
    pub fn new(x: &[usize], w: &[usize], geom: ConvGeometry) -> Result<Self> {
        if x.len() != 5 || w.len() != 5 {
            return Err(shape_err!(
                "conv3d expects rank-5 input and kernel, got {:?} and {:?}",
                x,
                w
            ));
        }
        if geom.stride == 0 {
            return Err(Error::InvalidArgument(
                "conv stride must be positive".into(),
            ));
        }
        let [batch, cin, d1, d2, t] = [x[0], x[1], x[2], x[3], x[4]];
        let [cout, wcin, k1, k2, kt] = [w[0], w[1], w[2], w[3], w[4]];
        if wcin != cin {
            return Err(shape_err!(
                "conv3d kernel expects {} input channels, input has {}",
                wcin,
                cin
            ));
        }
        if k1 > d1 || k2 > d2 {
            return Err(shape_err!(
                "spatial kernel {}x{} larger than input {}x{}",
                k1,
                k2,
                d1,
                d2
            ));
        }
        let padded = t + geom.pad_front + geom.pad_back;
        if kt > padded {
            return Err(shape_err!(
                "temporal kernel {} longer than padded length {}",
                kt,
                padded
            ));
        }
        Ok(Self {
            batch,
            cin,
            d1,
            d2,
            t,
            cout,
            k1,
            k2,
            kt,
            o1: (d1 - k1) / geom.stride + 1,
            o2: (d2 - k2) / geom.stride + 1,
            ot: padded - kt + 1,
            stride: geom.stride,
            pad_front: geom.pad_front,
        })
    }

    /// Rows of the unfolded patch matrix.
    pub fn rows(&self) -> usize {
        self.cin * self.k1 * self.k2 * self.kt
    }

    /// Output positions per sample.
    pub fn cols(&self) -> usize {
        self.o1 * self.o2 * self.ot
    }

    pub fn in_len(&self) -> usize {
        self.cin * self.d1 * self.d2 * self.t
    }

    pub fn out_len(&self) -> usize {
        self.cout * self.cols()
    }

    /// Point-wise case where the patch matrix is the input itself.
    pub fn is_pointwise(&self) -> bool {
        self.k1 == 1
            && self.k2 == 1
            && self.kt == 1
            && self.stride == 1
            && self.pad_front == 0
            && self.ot == self.t
    }

    pub fn out_shape(&self) -> [usize; 5] {
        [self.batch, self.cout, self.o1, self.o2, self.ot]
    }
}

/// Unfold one sample into a `rows × cols` patch matrix.
pub(crate) fn im2col<S: Scalar>(x: &[S], d: &ConvDims, cols: &mut [S]) {
    let l = d.cols();
    debug_assert_eq!(cols.len(), d.rows() * l);
    let zero = S::of(0.0);
    let mut r = 0;
    for ci in 0..d.cin {
        for a in 0..d.k1 {
            for b in 0..d.k2 {
                for c in 0..d.kt {
                    let row = &mut cols[r * l..(r + 1) * l];
                    let (lo, hi) = temporal_range(d, c);
                    for o1 in 0..d.o1 {
                        let i1 = o1 * d.stride + a;
                        for o2 in 0..d.o2 {
                            let i2 = o2 * d.stride + b;
                            let src = ((ci * d.d1 + i1) * d.d2 + i2) * d.t;
                            let dst = (o1 * d.o2 + o2) * d.ot;
                            let out = &mut row[dst..dst + d.ot];
                            out[..lo].fill(zero);
                            out[hi..].fill(zero);
                            // ot + c - pad_front indexes the source frame.
                            let s0 = src + lo + c - d.pad_front;
                            out[lo..hi].copy_from_slice(&x[s0..s0 + (hi - lo)]);
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Inverse of [`im2col`]: scatter-add a patch matrix back onto a sample.
pub(crate) fn col2im_add<S: Scalar>(cols: &[S], d: &ConvDims, dx: &mut [S]) {
    let l = d.cols();
    let mut r = 0;
    for ci in 0..d.cin {
        for a in 0..d.k1 {
            for b in 0..d.k2 {
                for c in 0..d.kt {
                    let row = &cols[r * l..(r + 1) * l];
                    let (lo, hi) = temporal_range(d, c);
                    for o1 in 0..d.o1 {
                        let i1 = o1 * d.stride + a;
                        for o2 in 0..d.o2 {
                            let i2 = o2 * d.stride + b;
                            let dst = ((ci * d.d1 + i1) * d.d2 + i2) * d.t + lo + c - d.pad_front;
                            let src = (o1 * d.o2 + o2) * d.ot;
                            for (o, v) in dx[dst..dst + (hi - lo)]
                                .iter_mut()
                                .zip(&row[src + lo..src + hi])
                            {
                                *o += *v;
                            }
                        }
                    }
                    r += 1;
                }
            }
        }
    }
}

/// Output frames `lo..hi` whose source frame `ot + c - pad_front` is in range.
fn temporal_range(d: &ConvDims, c: usize) -> (usize, usize) {
    let lo = d.pad_front.saturating_sub(c).min(d.ot);
    let hi = (d.t + d.pad_front).saturating_sub(c).min(d.ot).max(lo);
    (lo, hi)
}

/// 3-D convolution over `B×Cin×M1×M2×T` with kernels `Cout×Cin×km×km'×kt`,
/// spatial stride, no spatial padding and zero temporal padding.
pub fn conv3d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    geom: ConvGeometry,
) -> Result<Tensor<S>> {
    let d = ConvDims::new(x.shape(), w.shape(), geom)?;
    if let Some(b) = bias {
        if b.shape() != [d.cout] {
            return Err(shape_err!(
                "bias shape {:?}, expected [{}]",
                b.shape(),
                d.cout
            ));
        }
    }
    let out = conv3d_raw(x.data(), w.data(), bias.map(|b| b.data()), &d);
    let t = Tensor::new(&d.out_shape(), out)?;
    t.ensure_finite("conv3d")?;
    Ok(t)
}

pub(crate) fn conv3d_raw<S: Scalar>(x: &[S], w: &[S], bias: Option<&[S]>, d: &ConvDims) -> Vec<S> {
    let (rows, l) = (d.rows(), d.cols());
    let mut out = vec![S::of(0.0); d.batch * d.out_len()];
    let mut cols = if d.is_pointwise() {
        Vec::new()
    } else {
        vec![S::of(0.0); rows * l]
    };
    for b in 0..d.batch {
        let xb = &x[b * d.in_len()..(b + 1) * d.in_len()];
        let patches: &[S] = if d.is_pointwise() {
            xb
        } else {
            im2col(xb, d, &mut cols);
            &cols
        };
        let ob = &mut out[b * d.out_len()..(b + 1) * d.out_len()];
        if let Some(bias) = bias {
            for (co, chunk) in ob.chunks_mut(l).enumerate() {
                chunk.fill(bias[co]);
            }
        }
        let beta = S::of(if bias.is_some() { 1.0 } else { 0.0 });
        gemm(
            d.cout,
            rows,
            l,
            (w, rows, 1),
            (patches, l, 1),
            beta,
            ob,
            l,
            1,
        );
    }
    out
}

/// Gradients of conv3d with respect to input, kernel and bias.
pub(crate) struct ConvGrads<S> {
    pub dx: Option<Vec<S>>,
    pub dw: Option<Vec<S>>,
    pub db: Option<Vec<S>>,
}

pub(crate) fn conv3d_backward<S: Scalar>(
    x: &[S],
    w: &[S],
    dy: &[S],
    d: &ConvDims,
    need: (bool, bool, bool),
) -> ConvGrads<S> {
    let (rows, l) = (d.rows(), d.cols());
    let zero = S::of(0.0);
    let mut dx = need.0.then(|| vec![zero; d.batch * d.in_len()]);
    let mut dw = need.1.then(|| vec![zero; d.cout * rows]);
    let db = need.2.then(|| {
        let mut db = vec![zero; d.cout];
        for b in 0..d.batch {
            let dyb = &dy[b * d.out_len()..(b + 1) * d.out_len()];
            for (co, chunk) in dyb.chunks(l).enumerate() {
                db[co] += chunk.iter().copied().sum::<S>();
            }
        }
        db
    });
    let mut cols = vec![zero; if d.is_pointwise() { 0 } else { rows * l }];
    for b in 0..d.batch {
        let dyb = &dy[b * d.out_len()..(b + 1) * d.out_len()];
        if let Some(dw) = dw.as_mut() {
            let xb = &x[b * d.in_len()..(b + 1) * d.in_len()];
            let patches: &[S] = if d.is_pointwise() {
                xb
            } else {
                im2col(xb, d, &mut cols);
                &cols
            };
            // dW += dY · colsᵀ
            gemm(
                d.cout,
                l,
                rows,
                (dyb, l, 1),
                (patches, 1, l),
                S::of(1.0),
                dw,
                rows,
                1,
            );
        }
        if let Some(dx) = dx.as_mut() {
            let dxb = &mut dx[b * d.in_len()..(b + 1) * d.in_len()];
            if d.is_pointwise() {
                gemm(
                    rows,
                    d.cout,
                    l,
                    (w, 1, rows),
                    (dyb, l, 1),
                    S::of(1.0),
                    dxb,
                    l,
                    1,
                );
            } else {
                gemm(
                    rows,
                    d.cout,
                    l,
                    (w, 1, rows),
                    (dyb, l, 1),
                    zero,
                    &mut cols,
                    l,
                    1,
                );
                col2im_add(&cols, d, dxb);
            }
        }
    }
    ConvGrads { dx, dw, db }
}

/// Temporal convolution of `B×Cin×P×T` with kernels `Cout×Cin×1×kt`.
/// With `kt = 1` and no bias this is the point-wise projection.
pub fn conv_temporal<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    bias: Option<&Tensor<S>>,
    pad_front: usize,
    pad_back: usize,
) -> Result<Tensor<S>> {
    let (xs, ws) = temporal_as_3d(x.shape(), w.shape())?;
    let x5 = x.reshape(&xs)?;
    let w5 = w.reshape(&ws)?;
    let y = conv3d(
        &x5,
        &w5,
        bias,
        ConvGeometry {
            stride: 1,
            pad_front,
            pad_back,
        },
    )?;
    let s = y.shape().to_vec();
    y.into_reshaped(&[s[0], s[1], s[2], s[4]])
}

/// Shapes that embed a temporal convolution into conv3d:
/// `B×C×P×T → B×C×P×1×T` and `O×C×1×kt → O×C×1×1×kt`.
pub(crate) fn temporal_as_3d(x: &[usize], w: &[usize]) -> Result<([usize; 5], [usize; 5])> {
    if x.len() != 4 || w.len() != 4 || w[2] != 1 {
        return Err(shape_err!(
            "conv_temporal expects B×C×P×T input and Cout×Cin×1×kt kernel, got {:?} and {:?}",
            x,
            w
        ));
    }
    Ok(([x[0], x[1], x[2], 1, x[3]], [w[0], w[1], 1, 1, w[3]]))
}

/// 2-D matrix product.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (as_, bs) = (a.shape(), b.shape());
    if as_.len() != 2 || bs.len() != 2 || as_[1] != bs[0] {
        return Err(shape_err!("matmul {:?} · {:?}", as_, bs));
    }
    let (m, k, n) = (as_[0], as_[1], bs[1]);
    let mut out = vec![S::of(0.0); m * n];
    gemm(
        m,
        k,
        n,
        (a.data(), k, 1),
        (b.data(), n, 1),
        S::of(0.0),
        &mut out,
        n,
        1,
    );
    let t = Tensor::new(&[m, n], out)?;
    t.ensure_finite("matmul")?;
    Ok(t)
}

/// Batched product `Bt×m×k · Bt×k×n`, or `Bt×m×k · (Bt×n×k)ᵀ` when `trans_b`.
pub fn bmm<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>, trans_b: bool) -> Result<Tensor<S>> {
    let (as_, bs) = (a.shape(), b.shape());
    if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
        return Err(shape_err!("bmm {:?} · {:?}", as_, bs));
    }
    let (bt, m, k) = (as_[0], as_[1], as_[2]);
    let (bk, n) = if trans_b {
        (bs[2], bs[1])
    } else {
        (bs[1], bs[2])
    };
    if bk != k {
        return Err(shape_err!("bmm inner dims {} vs {}", k, bk));
    }
    let mut out = vec![S::of(0.0); bt * m * n];
    for i in 0..bt {
        let ai = &a.data()[i * m * k..(i + 1) * m * k];
        let bi = &b.data()[i * k * n..(i + 1) * k * n];
        let bview = if trans_b { (bi, 1, k) } else { (bi, n, 1) };
        gemm(
            m,
            k,
            n,
            (ai, k, 1),
            bview,
            S::of(0.0),
            &mut out[i * m * n..(i + 1) * m * n],
            n,
            1,
        );
    }
    let t = Tensor::new(&[bt, m, n], out)?;
    t.ensure_finite("bmm")?;
    Ok(t)
}

/// `(outer, n, inner)` decomposition around `axis`.
pub(crate) fn axis_split(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(shape_err!(
            "axis {} out of range for rank {}",
            axis,
            shape.len()
        ));
    }
    Ok((
        shape[..axis].iter().product(),
        shape[axis],
        shape[axis + 1..].iter().product(),
    ))
}

/// Max-subtracted softmax along `axis`.
pub fn softmax<S: Scalar>(x: &Tensor<S>, axis: usize) -> Result<Tensor<S>> {
    let (outer, n, inner) = axis_split(x.shape(), axis)?;
    let src = x.data();
    let mut out = vec![S::of(0.0); src.len()];
    for o in 0..outer {
        for i in 0..inner {
            let idx = |j: usize| (o * n + j) * inner + i;
            let max = (0..n).map(|j| src[idx(j)]).fold(S::neg_infinity(), S::max);
            let mut total = S::of(0.0);
            for j in 0..n {
                let e = (src[idx(j)] - max).exp();
                out[idx(j)] = e;
                total += e;
            }
            for j in 0..n {
                out[idx(j)] /= total;
            }
        }
    }
    let t = Tensor::new(x.shape(), out)?;
    t.ensure_finite("softmax")?;
    Ok(t)
}

/// Reorders axes: output axis `i` is input axis `axes[i]`.
pub fn permute<S: Scalar>(x: &Tensor<S>, axes: &[usize]) -> Result<Tensor<S>> {
    let shape = x.shape();
    let rank = shape.len();
    let mut seen = vec![false; rank];
    if axes.len() != rank
        || axes
            .iter()
            .any(|&a| a >= rank || std::mem::replace(&mut seen[a], true))
    {
        return Err(shape_err!(
            "invalid permutation {:?} for rank {}",
            axes,
            rank
        ));
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let mut in_strides = vec![1usize; rank];
    for i in (0..rank.saturating_sub(1)).rev() {
        in_strides[i] = in_strides[i + 1] * shape[i + 1];
    }
    let strides: Vec<usize> = axes.iter().map(|&a| in_strides[a]).collect();
    let src = x.data();
    let mut out = Vec::with_capacity(src.len());
    let mut index = vec![0usize; rank];
    let inner = out_shape[rank - 1];
    let inner_stride = strides[rank - 1];
    loop {
        let base: usize = index.iter().zip(&strides).map(|(i, s)| i * s).sum();
        out.extend((0..inner).map(|j| src[base + j * inner_stride]));
        // advance all but the last axis
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return Tensor::new(&out_shape, out);
            }
            ax -= 1;
            index[ax] += 1;
            if index[ax] < out_shape[ax] {
                break;
            }
            index[ax] = 0;
        }
    }
}

pub fn inverse_permutation(axes: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; axes.len()];
    for (i, &a) in axes.iter().enumerate() {
        inv[a] = i;
    }
    inv
}

/// Concatenate along `axis`.
pub fn concat<S: Scalar>(parts: &[&Tensor<S>], axis: usize) -> Result<Tensor<S>> {
    let first = parts
        .first()
        .ok_or_else(|| Error::InvalidArgument("concat of zero tensors".into()))?;
    let (outer, _, inner) = axis_split(first.shape(), axis)?;
    let mut total = 0;
    for p in parts {
        let s = p.shape();
        if s.len() != first.rank()
            || s.iter()
                .zip(first.shape())
                .enumerate()
                .any(|(i, (a, b))| i != axis && a != b)
        {
            return Err(shape_err!(
                "concat shape mismatch {:?} vs {:?}",
                s,
                first.shape()
            ));
        }
        total += s[axis];
    }
    let mut out = Vec::with_capacity(outer * total * inner);
    for o in 0..outer {
        for p in parts {
            let n = p.shape()[axis] * inner;
            out.extend_from_slice(&p.data()[o * n..(o + 1) * n]);
        }
    }
    let mut shape = first.shape().to_vec();
    shape[axis] = total;
    Tensor::new(&shape, out)
}

pub fn elu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    let one = S::of(1.0);
    map(x, |v| if v >= S::of(0.0) { v } else { v.exp() - one })
}

pub fn relu<S: Scalar>(x: &Tensor<S>) -> Tensor<S> {
    map(x, |v| v.max(S::of(0.0)))
}

fn map<S: Scalar>(x: &Tensor<S>, f: impl Fn(S) -> S) -> Tensor<S> {
    Tensor::from_fn(x.shape(), |i| f(x.data()[i]))
}

/// Identifies one dropout draw: runs are replayable from `(seed, layer, step)`.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct DropoutKey {
    pub seed: u64,
    pub layer: u32,
    pub step: u64,
}

impl DropoutKey {
    fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(((self.layer as u64) << 48) ^ (self.step & ((1 << 48) - 1)));
        rng
    }
}

/// Inverted-dropout multiplier per element: 0 for dropped, `1/(1-p)` for kept.
pub(crate) fn dropout_mask<S: Scalar>(len: usize, prob: f64, key: DropoutKey) -> Vec<S> {
    let mut rng = key.rng();
    let keep = S::of(1.0 / (1.0 - prob));
    (0..len)
        .map(|_| {
            if rng.random::<f64>() < prob {
                S::of(0.0)
            } else {
                keep
            }
        })
        .collect()
}

pub fn dropout<S: Scalar>(
    x: &Tensor<S>,
    prob: f64,
    mode: Mode,
    key: DropoutKey,
) -> Result<Tensor<S>> {
    if !(0.0..1.0).contains(&prob) {
        return Err(Error::InvalidArgument(format!(
            "dropout probability {prob} outside [0, 1)"
        )));
    }
    if mode == Mode::Eval || prob == 0.0 {
        return Ok(x.clone());
    }
    let mask = dropout_mask::<S>(x.numel(), prob, key);
    Ok(Tensor::from_fn(x.shape(), |i| x.data()[i] * mask[i]))
}

/// `x·W + b` for `x: B×n`, `W: n×m`, `b: m`.
pub fn linear<S: Scalar>(x: &Tensor<S>, w: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[0] || b.shape() != [ws[1]] {
        return Err(shape_err!("linear {:?} · {:?} + {:?}", xs, ws, b.shape()));
    }
    let (rows, n, m) = (xs[0], xs[1], ws[1]);
    let mut out: Vec<S> = (0..rows * m).map(|i| b.data()[i % m]).collect();
    gemm(
        rows,
        n,
        m,
        (x.data(), n, 1),
        (w.data(), m, 1),
        S::of(1.0),
        &mut out,
        m,
        1,
    );
    let t = Tensor::new(&[rows, m], out)?;
    t.ensure_finite("linear")?;
    Ok(t)
}

pub(crate) fn check_targets(logits: &[usize], targets: &[usize]) -> Result<(usize, usize)> {
    if logits.len() != 2 || logits[0] != targets.len() {
        return Err(shape_err!(
            "cross entropy needs B×K logits and B targets, got {:?} and {}",
            logits,
            targets.len()
        ));
    }
    let k = logits[1];
    if let Some(bad) = targets.iter().find(|&&t| t >= k) {
        return Err(Error::InvalidArgument(format!(
            "target label {bad} out of range for {k} classes"
        )));
    }
    Ok((logits[0], k))
}

/// Row-wise softmax probabilities and mean negative log-likelihood.
pub(crate) fn cross_entropy_parts<S: Scalar>(
    logits: &[S],
    rows: usize,
    k: usize,
    targets: &[usize],
) -> (S, Vec<S>) {
    let mut probs = vec![S::of(0.0); rows * k];
    let mut total = 0.0f64;
    for r in 0..rows {
        let row = &logits[r * k..(r + 1) * k];
        let max = row.iter().copied().fold(S::neg_infinity(), S::max);
        let sum: S = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for j in 0..k {
            probs[r * k + j] = (row[j] - lse).exp();
        }
        total += (lse - row[targets[r]]).as_f64();
    }
    (S::of(total / rows as f64), probs)
}

/// Mean over the batch of `-log softmax(logits)[target]`.
pub fn cross_entropy<S: Scalar>(logits: &Tensor<S>, targets: &[usize]) -> Result<Tensor<S>> {
    let (rows, k) = check_targets(logits.shape(), targets)?;
    let (loss, _) = cross_entropy_parts(logits.data(), rows, k, targets);
    let t = Tensor::scalar(loss);
    t.ensure_finite("cross_entropy")?;
    Ok(t)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn rand_tensor(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f64> {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    /// Direct six-nested-loop transcription of the convolution sum.
    fn conv3d_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &[f64],
        s: usize,
        p: usize,
    ) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let (o1, o2) = ((xs[2] - ws[2]) / s + 1, (xs[3] - ws[3]) / s + 1);
        let ot = xs[4] + 2 * p - ws[4] + 1;
        let mut out = Tensor::zeros(&[xs[0], ws[0], o1, o2, ot]);
        for bi in 0..xs[0] {
            for co in 0..ws[0] {
                for m in 0..o1 {
                    for n in 0..o2 {
                        for t in 0..ot {
                            let mut acc = b[co];
                            for ci in 0..xs[1] {
                                for h in 0..ws[2] {
                                    for v in 0..ws[3] {
                                        for r in 0..ws[4] {
                                            let tt = t as isize + r as isize - p as isize;
                                            if tt < 0 || tt >= xs[4] as isize {
                                                continue;
                                            }
                                            acc +=
                                                x.get(&[bi, ci, m * s + h, n * s + v, tt as usize])
                                                    * w.get(&[co, ci, h, v, r]);
                                        }
                                    }
                                }
                            }
                            let off = out.offset(&[bi, co, m, n, t]);
                            out.data_mut()[off] = acc;
                        }
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv3d_all_ones_sums_kernel_volume() {
        let x = Tensor::<f64>::full(&[1, 1, 8, 8, 3], 1.0);
        let w = Tensor::<f64>::full(&[1, 1, 8, 8, 3], 1.0);
        let y = conv3d(&x, &w, Some(&Tensor::zeros(&[1])), ConvGeometry::valid(4)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 1, 1, 1]);
        assert_eq!(y.data()[0], 192.0);
    }

    #[test]
    fn conv3d_delta_kernel_is_strided_slice() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = rand_tensor(&[1, 1, 10, 10, 4], &mut rng);
        let mut w = Tensor::<f64>::zeros(&[1, 1, 3, 3, 1]);
        let off = w.offset(&[0, 0, 1, 2, 0]);
        w.data_mut()[off] = 1.0;
        let y = conv3d(&x, &w, None, ConvGeometry::valid(2)).unwrap();
        assert_eq!(y.shape(), &[1, 1, 4, 4, 4]);
        for m in 0..4 {
            for n in 0..4 {
                for t in 0..4 {
                    assert_eq!(
                        y.get(&[0, 0, m, n, t]),
                        x.get(&[0, 0, 2 * m + 1, 2 * n + 2, t])
                    );
                }
            }
        }
    }

    #[test]
    fn conv3d_matches_nested_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = rand_tensor(&[1, 2, 6, 6, 4], &mut rng);
        for (s, kt, p) in [(1, 3, 1), (2, 3, 0), (2, 5, 2), (1, 1, 0)] {
            let w = rand_tensor(&[3, 2, 3, 2, kt], &mut rng);
            let b: Vec<f64> = (0..3).map(|_| rng.random_range(-1.0..1.0)).collect();
            let bt = Tensor::new(&[3], b.clone()).unwrap();
            let geom = ConvGeometry {
                stride: s,
                pad_front: p,
                pad_back: p,
            };
            let got = conv3d(&x, &w, Some(&bt), geom).unwrap();
            let want = conv3d_oracle(&x, &w, &b, s, p);
            assert!(got.max_abs_diff(&want) < 1e-6, "s={s} kt={kt} p={p}");
        }
    }

    #[test]
    fn conv3d_rejects_bad_input() {
        let x = Tensor::<f64>::zeros(&[1, 1, 4, 4, 3]);
        assert!(conv3d(
            &x,
            &Tensor::zeros(&[1, 1, 5, 4, 1]),
            None,
            ConvGeometry::valid(1)
        )
        .is_err());
        assert!(conv3d(
            &x,
            &Tensor::zeros(&[1, 2, 2, 2, 1]),
            None,
            ConvGeometry::valid(1)
        )
        .is_err());
        assert!(conv3d(
            &x,
            &Tensor::zeros(&[1, 1, 2, 2, 1]),
            None,
            ConvGeometry::valid(0)
        )
        .is_err());
    }

    #[test]
    fn conv_temporal_identity_pointwise() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&[2, 3, 4, 5], &mut rng);
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| if i / 3 == i % 3 { 1.0 } else { 0.0 });
        let y = conv_temporal(&x, &w, None, 0, 0).unwrap();
        assert_eq!(y, x);
    }

    #[test]
    fn conv_temporal_zero_padding_boundary() {
        let x = Tensor::<f64>::new(&[1, 1, 1, 4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let w = Tensor::<f64>::full(&[1, 1, 1, 3], 1.0);
        let y = conv_temporal(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.data(), &[3.0, 6.0, 9.0, 7.0]);
    }

    #[test]
    fn conv_temporal_matches_nested_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let x = rand_tensor(&[2, 3, 5, 7], &mut rng);
        let w = rand_tensor(&[4, 3, 1, 5], &mut rng);
        let b: Vec<f64> = (0..4).map(|_| rng.random_range(-1.0..1.0)).collect();
        let y = conv_temporal(&x, &w, Some(&Tensor::new(&[4], b.clone()).unwrap()), 2, 2).unwrap();
        for bi in 0..2 {
            for co in 0..4 {
                for p in 0..5 {
                    for t in 0..7 {
                        let mut acc = b[co];
                        for ci in 0..3 {
                            for r in 0..5 {
                                let tt = t as isize + r as isize - 2;
                                if (0..7).contains(&tt) {
                                    acc +=
                                        x.get(&[bi, ci, p, tt as usize]) * w.get(&[co, ci, 0, r]);
                                }
                            }
                        }
                        assert!((y.get(&[bi, co, p, t]) - acc).abs() < 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn same_temporal_padding_puts_extra_zero_last() {
        assert_eq!(
            ConvGeometry::same_temporal(1, 3),
            ConvGeometry {
                stride: 1,
                pad_front: 1,
                pad_back: 1
            }
        );
        assert_eq!(
            ConvGeometry::same_temporal(1, 4),
            ConvGeometry {
                stride: 1,
                pad_front: 1,
                pad_back: 2
            }
        );
    }

    #[test]
    fn softmax_small_cases() {
        let one = softmax(&Tensor::<f64>::scalar(3.7), 0).unwrap();
        assert_eq!(one.data(), &[1.0]);
        let z = softmax(&Tensor::<f64>::zeros(&[3]), 0).unwrap();
        for v in z.data() {
            assert!((v - 1.0 / 3.0).abs() < 1e-15);
        }
        // large logits do not overflow
        let big = Tensor::<f32>::new(&[2], vec![1000.0, 1000.0]).unwrap();
        assert_eq!(softmax(&big, 0).unwrap().data(), &[0.5, 0.5]);
    }

    #[test]
    fn softmax_rows_sum_to_one_on_inner_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x = rand_tensor(&[2, 5, 3], &mut rng);
        let y = softmax(&x, 1).unwrap();
        for o in 0..2 {
            for i in 0..3 {
                let s: f64 = (0..5).map(|j| y.get(&[o, j, i])).sum();
                assert!((s - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matmul_matches_triple_loop() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&[3, 2], &mut rng);
        let b = rand_tensor(&[2, 3], &mut rng);
        let c = matmul(&a, &b).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                let want: f64 = (0..2).map(|k| a.get(&[i, k]) * b.get(&[k, j])).sum();
                assert!((c.get(&[i, j]) - want).abs() < 1e-7);
            }
        }
        assert!(matmul(&a, &a).is_err());
    }

    #[test]
    fn bmm_transposed_matches_manual() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let a = rand_tensor(&[2, 3, 4], &mut rng);
        let b = rand_tensor(&[2, 5, 4], &mut rng);
        let c = bmm(&a, &b, true).unwrap();
        for i in 0..2 {
            for m in 0..3 {
                for n in 0..5 {
                    let want: f64 = (0..4).map(|k| a.get(&[i, m, k]) * b.get(&[i, n, k])).sum();
                    assert!((c.get(&[i, m, n]) - want).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn permute_round_trips() {
        let x = Tensor::<f64>::from_fn(&[2, 3, 4, 5], |i| i as f64);
        let axes = [0, 2, 1, 3];
        let y = permute(&x, &axes).unwrap();
        assert_eq!(y.shape(), &[2, 4, 3, 5]);
        assert_eq!(y.get(&[1, 3, 2, 4]), x.get(&[1, 2, 3, 4]));
        let back = permute(&y, &inverse_permutation(&axes)).unwrap();
        assert_eq!(back, x);
        assert!(permute(&x, &[0, 0, 1, 2]).is_err());
    }

    #[test]
    fn concat_along_channels() {
        let a = Tensor::<f64>::from_fn(&[2, 1, 3], |i| i as f64);
        let b = Tensor::<f64>::from_fn(&[2, 2, 3], |i| 100.0 + i as f64);
        let c = concat(&[&a, &b], 1).unwrap();
        assert_eq!(c.shape(), &[2, 3, 3]);
        assert_eq!(c.get(&[1, 0, 2]), a.get(&[1, 0, 2]));
        assert_eq!(c.get(&[1, 2, 1]), b.get(&[1, 1, 1]));
    }

    #[test]
    fn activations() {
        let x = Tensor::<f64>::new(&[3], vec![0.0, -1e30, -3.0]).unwrap();
        let e = elu(&x);
        assert_eq!(e.data()[0], 0.0);
        assert!((e.data()[1] + 1.0).abs() < 1e-15);
        assert_eq!(relu(&x).data()[2], 0.0);
    }

    #[test]
    fn dropout_eval_is_identity_and_rejects_bad_prob() {
        let key = DropoutKey {
            seed: 1,
            layer: 0,
            step: 0,
        };
        let x = Tensor::<f32>::full(&[10], 2.0);
        assert_eq!(dropout(&x, 0.5, Mode::Eval, key).unwrap(), x);
        assert!(dropout(&x, 1.0, Mode::Train, key).is_err());
        assert!(dropout(&x, -0.1, Mode::Train, key).is_err());
    }

    #[test]
    fn dropout_keep_rate_and_mean() {
        let key = DropoutKey {
            seed: 42,
            layer: 3,
            step: 9,
        };
        let n = 1_000_000;
        let x = Tensor::<f64>::full(&[n], 1.0);
        let y = dropout(&x, 0.5, Mode::Train, key).unwrap();
        let kept = y.data().iter().filter(|&&v| v != 0.0).count() as f64 / n as f64;
        let mean = y.data().iter().sum::<f64>() / n as f64;
        assert!((kept - 0.5).abs() < 0.005, "keep rate {kept}");
        assert!((mean - 1.0).abs() < 0.01, "mean {mean}");
        // replayable from the key, different across steps
        assert_eq!(dropout(&x, 0.5, Mode::Train, key).unwrap(), y);
        let other = dropout(&x, 0.5, Mode::Train, DropoutKey { step: 10, ..key }).unwrap();
        assert_ne!(other, y);
    }

    #[test]
    fn cross_entropy_reference_values() {
        let k = 6;
        let uniform = Tensor::<f64>::zeros(&[2, k]);
        let l = cross_entropy(&uniform, &[0, 5]).unwrap();
        assert!((l.data()[0] - (k as f64).ln()).abs() < 1e-12);

        let confident = Tensor::<f64>::new(&[1, 3], vec![0.0, 500.0, 0.0]).unwrap();
        assert!(cross_entropy(&confident, &[1]).unwrap().data()[0] < 1e-12);
        assert!(cross_entropy(&confident, &[3]).is_err());

        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let x = rand_tensor(&[4, 6], &mut rng);
        let targets = [0, 3, 5, 2];
        let want: f64 = (0..4)
            .map(|r| {
                let z: f64 = (0..6).map(|j| x.get(&[r, j]).exp()).sum();
                -(x.get(&[r, targets[r]]).exp() / z).ln()
            })
            .sum::<f64>()
            / 4.0;
        assert!((cross_entropy(&x, &targets).unwrap().data()[0] - want).abs() < 1e-7);
    }

    #[test]
    fn linear_adds_bias() {
        let x = Tensor::<f64>::new(&[1, 2], vec![1.0, 2.0]).unwrap();
        let w = Tensor::<f64>::new(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let b = Tensor::<f64>::new(&[2], vec![0.5, -0.5]).unwrap();
        assert_eq!(linear(&x, &w, &b).unwrap().data(), &[1.5, 1.5]);
    }
}
