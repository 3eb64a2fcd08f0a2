//! The recording tape and its reverse pass.

use super::conv::{
    conv3d_backward, conv3d_forward, conv_transpose3d_backward, conv_transpose3d_forward,
    ConvPlan,
};
use super::{axis_split, resample, ParamId, ParamStore, Real, Tensor, PROB_EPS};
use crate::error::{Error, Result};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv3d { x: Var, w: Var, b: Var, plan: ConvPlan },
    ConvT3d { x: Var, w: Var, b: Var, plan: ConvPlan },
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Sigmoid(Var),
    Softplus(Var),
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    LogSumExp { x: Var, axis: usize },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, T),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Narrow { x: Var, axis: usize, start: usize },
    RowNorm(Var),
    MaskedBce { pred: Var, target: Vec<T>, mask: Vec<bool>, count: usize },
    CategoricalCe { logits: Var, labels: Vec<usize>, mask: Vec<bool>, count: usize },
    Resample { vol: Var, scale: Var, trans: Var },
    GmmNll { logw: Var, mu: Var, sigma: Var, f: Var },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Append-only tape of tensor operations.
///
/// Nodes are stored in creation order, which is already a topological order,
/// so the reverse pass is a single backwards sweep.
#[derive(Debug, Default)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Tensor<T>>>,
}

fn same_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<()> {
    if a != b {
        return Err(Error::shape(op, format!("{a:?} vs {b:?}")));
    }
    Ok(())
}

fn check_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(
            op,
            format!("axis {axis} out of range for {shape:?}"),
        ));
    }
    Ok(())
}

#[inline]
fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

#[inline]
fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

/// Numerically shifted log-sum-exp of a strided lane.
fn lane_lse<T: Real>(x: &[T], base: usize, n: usize, stride: usize) -> T {
    let mut mx = T::neg_infinity();
    for k in 0..n {
        mx = mx.max(x[base + k * stride]);
    }
    if mx == T::neg_infinity() {
        return mx;
    }
    let mut s = T::zero();
    for k in 0..n {
        s = s + (x[base + k * stride] - mx).exp();
    }
    mx + s.ln()
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph {
            nodes: Vec::new(),
            grads: Vec::new(),
        }
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    /// A constant input (no gradient).
    pub fn input(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Places a parameter on the tape. Frozen parameters do not request
    /// gradients.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        let p = store.get(id);
        let v = self.push(p.value.clone(), Op::Leaf, p.trainable);
        self.nodes[v.0].param = Some(id);
        v
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

    /// Gradient after [`Graph::backward`]; `None` if the node was not reached.
    pub fn grad(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    // ---------------------------------------------------------------- layers

    pub fn conv3d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        let plan = ConvPlan::forward(self.shape(x), self.shape(w), self.shape(b), stride, pad)?;
        let out = conv3d_forward(
            &plan,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let t = Tensor::new(plan.forward_output_shape(), out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::Conv3d { x, w, b, plan }, rg))
    }

    /// Transposed convolution; `w` is laid out `[in, out, kd, kh, kw]`.
    pub fn conv_transpose3d(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
    ) -> Result<Var> {
        let plan = ConvPlan::transpose(self.shape(x), self.shape(w), self.shape(b), stride, pad)?;
        let out = conv_transpose3d_forward(
            &plan,
            self.value(x).data(),
            self.value(w).data(),
            self.value(b).data(),
        );
        let t = Tensor::new(plan.transpose_output_shape(), out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(t, Op::ConvT3d { x, w, b, plan }, rg))
    }

    /// `y = x·wᵀ + b` with `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        if xs.len() != 2 || ws.len() != 2 || ws[1] != xs[1] || bs != [ws[0]] {
            return Err(Error::shape(
                "linear",
                format!("input {xs:?}, weight {ws:?}, bias {bs:?}"),
            ));
        }
        let (batch, inp, out) = (xs[0], xs[1], ws[0]);
        let mut y = Vec::with_capacity(batch * out);
        for _ in 0..batch {
            y.extend_from_slice(self.value(b).data());
        }
        T::gemm(
            batch,
            inp,
            out,
            T::one(),
            self.value(x).data(),
            inp as isize,
            1,
            self.value(w).data(),
            1,
            inp as isize,
            T::one(),
            &mut y,
            out as isize,
            1,
        );
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(vec![batch, out], y)?, Op::Linear { x, w, b }, rg))
    }

    // ----------------------------------------------------------- pointwise

    fn unary(&mut self, x: Var, f: impl Fn(T) -> T, op: Op<T>) -> Var {
        let t = self.value(x).map(f);
        let rg = self.rg(&[x]);
        self.push(t, op, rg)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        self.unary(x, |v| v.max(T::zero()), Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        self.unary(x, sigmoid, Op::Sigmoid(x))
    }

    pub fn softplus(&mut self, x: Var) -> Var {
        self.unary(x, softplus, Op::Softplus(x))
    }

    pub fn add_scalar(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v + c, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: T) -> Var {
        self.unary(x, |v| v * c, Op::Scale(x, c))
    }

    fn binary(&mut self, name: &'static str, a: Var, b: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        same_shape(name, self.shape(a), self.shape(b))?;
        let (va, vb) = (self.value(a), self.value(b));
        let data = va.data().iter().zip(vb.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(va.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |p, q| p + q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |p, q| p - q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |p, q| p * q)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(t, Op::Mul(a, b), rg))
    }

    // ----------------------------------------------------------- reductions

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().copied().sum::<T>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let v = self.value(x);
        let n = T::from_usize(v.numel().max(1)).unwrap();
        let s = v.data().iter().copied().sum::<T>() / n;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("softmax", self.shape(x), axis)?;
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let lse = lane_lse(src, base, n, inner);
                for k in 0..n {
                    out[base + k * inner] = (src[base + k * inner] - lse).exp();
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Softmax { x, axis }, rg))
    }

    pub fn log_softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("log_softmax", self.shape(x), axis)?;
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let base = o * n * inner + i;
                let lse = lane_lse(src, base, n, inner);
                for k in 0..n {
                    out[base + k * inner] = src[base + k * inner] - lse;
                }
            }
        }
        let t = Tensor::new(v.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSoftmax { x, axis }, rg))
    }

    /// Reduces `axis` with a max-shifted log-sum-exp.
    pub fn log_sum_exp(&mut self, x: Var, axis: usize) -> Result<Var> {
        check_axis("log_sum_exp", self.shape(x), axis)?;
        let v = self.value(x);
        let (outer, n, inner) = axis_split(v.shape(), axis);
        let src = v.data();
        let mut out = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                out.push(lane_lse(src, o * n * inner + i, n, inner));
            }
        }
        let mut shape = v.shape().to_vec();
        shape.remove(axis);
        let t = Tensor::new(shape, out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::LogSumExp { x, axis }, rg))
    }

    /// Euclidean norm of each row of a `[B, k]` tensor.
    pub fn row_norm(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x);
        if s.len() != 2 {
            return Err(Error::shape("row_norm", format!("expected [B, k], got {s:?}")));
        }
        let (b, k) = (s[0], s[1]);
        let out = self
            .value(x)
            .data()
            .chunks(k)
            .map(|r| r.iter().map(|&v| v * v).sum::<T>().sqrt())
            .collect();
        let t = Tensor::new(vec![b], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::RowNorm(x), rg))
    }

    // ---------------------------------------------------------------- shape

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshape(shape.to_vec())?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = *parts
            .first()
            .ok_or_else(|| Error::invalid("concat of zero tensors"))?;
        let base = self.shape(first).to_vec();
        check_axis("concat", &base, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != base.len()
                || s.iter()
                    .zip(&base)
                    .enumerate()
                    .any(|(i, (a, b))| i != axis && a != b)
            {
                return Err(Error::shape("concat", format!("{s:?} vs {base:?}")));
            }
            total += s[axis];
        }
        let outer: usize = base[..axis].iter().product();
        let inner: usize = base[axis + 1..].iter().product();
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let n = self.shape(p)[axis];
                let src = self.value(p).data();
                data.extend_from_slice(&src[o * n * inner..(o + 1) * n * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(parts);
        Ok(self.push(
            t,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(x).to_vec();
        check_axis("narrow", &s, axis)?;
        if start + len > s[axis] {
            return Err(Error::shape(
                "narrow",
                format!("[{start}, {}) exceeds extent {} of {s:?}", start + len, s[axis]),
            ));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let off = (o * n + start) * inner;
            data.extend_from_slice(&src[off..off + len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        let t = Tensor::new(shape, data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(t, Op::Narrow { x, axis, start }, rg))
    }

    // --------------------------------------------------------------- losses

    /// Mean binary cross-entropy over voxels where `mask` is set.
    ///
    /// Probabilities are clamped to `[1e-7, 1 - 1e-7]` before the logarithm;
    /// clamped entries pass no gradient.
    pub fn masked_bce_mean(&mut self, pred: Var, target: &[T], mask: &[bool]) -> Result<Var> {
        let n = self.value(pred).numel();
        if target.len() != n || mask.len() != n {
            return Err(Error::shape(
                "masked_bce_mean",
                format!(
                    "pred has {n} elements, target {}, mask {}",
                    target.len(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::invalid("masked_bce_mean: empty mask"));
        }
        let (lo, hi) = (T::from_f64_lossy(PROB_EPS), T::from_f64_lossy(1.0 - PROB_EPS));
        let mut acc = T::zero();
        for ((&p, &t), &m) in self.value(pred).data().iter().zip(target).zip(mask) {
            if m {
                let p = p.max(lo).min(hi);
                acc = acc + t * p.ln() + (T::one() - t) * (T::one() - p).ln();
            }
        }
        let loss = -acc / T::from_usize(count).unwrap();
        let rg = self.rg(&[pred]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::MaskedBce {
                pred,
                target: target.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Mean softmax cross-entropy of `logits: [B, M, ...]` against per-site
    /// labels, over sites where `mask` is set. Sites are enumerated as
    /// `b * prod(...) + spatial`.
    pub fn categorical_ce_mean(&mut self, logits: Var, labels: &[usize], mask: &[bool]) -> Result<Var> {
        let s = self.shape(logits).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(
                "categorical_ce_mean",
                format!("logits must be [B, M, ...], got {s:?}"),
            ));
        }
        let (batch, m) = (s[0], s[1]);
        let inner: usize = s[2..].iter().product();
        let sites = batch * inner;
        if labels.len() != sites || mask.len() != sites {
            return Err(Error::shape(
                "categorical_ce_mean",
                format!(
                    "{sites} sites but {} labels and {} mask entries",
                    labels.len(),
                    mask.len()
                ),
            ));
        }
        let count = mask.iter().filter(|&&v| v).count();
        if count == 0 {
            return Err(Error::invalid("categorical_ce_mean: empty mask"));
        }
        let x = self.value(logits).data();
        let mut acc = T::zero();
        for b in 0..batch {
            for i in 0..inner {
                let site = b * inner + i;
                if !mask[site] {
                    continue;
                }
                let l = labels[site];
                if l >= m {
                    return Err(Error::invalid(format!("label {l} out of range for {m} classes")));
                }
                let base = b * m * inner + i;
                acc = acc + lane_lse(x, base, m, inner) - x[base + l * inner];
            }
        }
        let loss = acc / T::from_usize(count).unwrap();
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CategoricalCe {
                logits,
                labels: labels.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            rg,
        ))
    }

    /// Places `vol: [B, 1, D, H, W]` under per-item scale/translation
    /// `[B, 3]` with trilinear sampling.
    pub fn trilinear_resample(&mut self, vol: Var, scale: Var, trans: Var) -> Result<Var> {
        let vs = self.shape(vol).to_vec();
        if vs.len() != 5 || vs[1] != 1 {
            return Err(Error::shape(
                "trilinear_resample",
                format!("volume must be [B, 1, D, H, W], got {vs:?}"),
            ));
        }
        let b = vs[0];
        for (what, v) in [("scale", scale), ("translation", trans)] {
            if self.shape(v) != [b, 3] {
                return Err(Error::shape(
                    "trilinear_resample",
                    format!("{what} must be [{b}, 3], got {:?}", self.shape(v)),
                ));
            }
        }
        if self.value(scale).data().iter().any(|&s| !(s > T::zero())) {
            return Err(Error::invalid("trilinear_resample: scale must be positive"));
        }
        let dims = [vs[2], vs[3], vs[4]];
        let per = dims.iter().product::<usize>();
        let mut out = vec![T::zero(); b * per];
        let (vd, sd, td) = (
            self.value(vol).data(),
            self.value(scale).data(),
            self.value(trans).data(),
        );
        for i in 0..b {
            resample::forward_into(
                &vd[i * per..(i + 1) * per],
                dims,
                [sd[3 * i], sd[3 * i + 1], sd[3 * i + 2]],
                [td[3 * i], td[3 * i + 1], td[3 * i + 2]],
                &mut out[i * per..(i + 1) * per],
            );
        }
        let t = Tensor::new(vs, out)?;
        let rg = self.rg(&[vol, scale, trans]);
        Ok(self.push(t, Op::Resample { vol, scale, trans }, rg))
    }

    /// Negative log-likelihood of points under diagonal Gaussian mixtures.
    ///
    /// `logw: [B, N]` log mixture weights, `mu`/`sigma: [B, N, d]`,
    /// `f: [B, d]`. Returns `[B]` values
    /// `-log Σ_k exp(logw_k) · N(f | mu_k, diag(sigma_k²))`.
    pub fn gmm_nll(&mut self, logw: Var, mu: Var, sigma: Var, f: Var) -> Result<Var> {
        let ws = self.shape(logw).to_vec();
        if ws.len() != 2 {
            return Err(Error::shape("gmm_nll", format!("weights {ws:?} must be [B, N]")));
        }
        let (b, n) = (ws[0], ws[1]);
        let fs = self.shape(f).to_vec();
        if fs.len() != 2 || fs[0] != b {
            return Err(Error::shape("gmm_nll", format!("points {fs:?} must be [{b}, d]")));
        }
        let d = fs[1];
        for v in [mu, sigma] {
            if self.shape(v) != [b, n, d] {
                return Err(Error::shape(
                    "gmm_nll",
                    format!("component tensor {:?} must be [{b}, {n}, {d}]", self.shape(v)),
                ));
            }
        }
        if self.value(sigma).data().iter().any(|&s| !(s > T::zero())) {
            return Err(Error::invalid("gmm_nll: standard deviations must be positive"));
        }
        let a = gmm_log_terms(
            self.value(logw).data(),
            self.value(mu).data(),
            self.value(sigma).data(),
            self.value(f).data(),
            b,
            n,
            d,
        );
        let out = (0..b).map(|i| -lane_lse(&a, i * n, n, 1)).collect();
        let t = Tensor::new(vec![b], out)?;
        let rg = self.rg(&[logw, mu, sigma, f]);
        Ok(self.push(t, Op::GmmNll { logw, mu, sigma, f }, rg))
    }

    // ------------------------------------------------------------- backward

    /// Reverse pass from a scalar loss. Gradients accumulate additively when
    /// a node feeds several consumers.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.value(loss).numel() != 1 {
            return Err(Error::shape(
                "backward",
                format!("loss must be scalar, got {:?}", self.shape(loss)),
            ));
        }
        self.grads = (0..self.nodes.len()).map(|_| None).collect();
        let shape = self.shape(loss).to_vec();
        self.grads[loss.0] = Some(Tensor::full(shape, T::one()));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.propagate(i, &g)?;
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    /// Adds the gradients of all parameter leaves into `store`.
    pub fn write_param_grads(&self, store: &mut ParamStore<T>) {
        for (node, g) in self.nodes.iter().zip(&self.grads) {
            if let (Some(id), Some(g)) = (node.param, g.as_ref()) {
                store.accumulate_grad(id, g);
            }
        }
    }

    fn acc(&mut self, v: Var, delta: Vec<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        match self.grads[v.0].as_mut() {
            Some(g) => {
                for (a, b) in g.data_mut().iter_mut().zip(delta) {
                    *a = *a + b;
                }
            }
            None => {
                let shape = self.nodes[v.0].value.shape().to_vec();
                self.grads[v.0] = Some(Tensor { shape, data: delta });
            }
        }
    }

    fn propagate(&mut self, i: usize, g: &Tensor<T>) -> Result<()> {
        let gd = g.data();
        // Split borrows: read values from `nodes`, write into `grads`.
        let node = &self.nodes[i];
        let y = node.value.data();
        let mut deltas: Vec<(Var, Vec<T>)> = Vec::new();
        match &node.op {
            Op::Leaf => {}
            Op::Conv3d { x, w, b, plan } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let (dx, dw, db) = conv3d_backward(
                    plan,
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    gd,
                    need_dx,
                );
                if let Some(dx) = dx {
                    deltas.push((*x, dx));
                }
                deltas.push((*w, dw));
                deltas.push((*b, db));
            }
            Op::ConvT3d { x, w, b, plan } => {
                let need_dx = self.nodes[x.0].requires_grad;
                let (dx, dw, db) = conv_transpose3d_backward(
                    plan,
                    self.nodes[x.0].value.data(),
                    self.nodes[w.0].value.data(),
                    gd,
                    need_dx,
                );
                if let Some(dx) = dx {
                    deltas.push((*x, dx));
                }
                deltas.push((*w, dw));
                deltas.push((*b, db));
            }
            Op::Linear { x, w, b } => {
                let xs = self.nodes[x.0].value.shape();
                let (batch, inp) = (xs[0], xs[1]);
                let out = self.nodes[w.0].value.shape()[0];
                let xv = self.nodes[x.0].value.data();
                let wv = self.nodes[w.0].value.data();
                if self.nodes[x.0].requires_grad {
                    let mut dx = vec![T::zero(); batch * inp];
                    T::gemm(
                        batch, out, inp, T::one(), gd, out as isize, 1, wv, inp as isize, 1,
                        T::zero(), &mut dx, inp as isize, 1,
                    );
                    deltas.push((*x, dx));
                }
                if self.nodes[w.0].requires_grad {
                    let mut dw = vec![T::zero(); out * inp];
                    T::gemm(
                        out, batch, inp, T::one(), gd, 1, out as isize, xv, inp as isize, 1,
                        T::zero(), &mut dw, inp as isize, 1,
                    );
                    deltas.push((*w, dw));
                }
                let mut db = vec![T::zero(); out];
                for row in gd.chunks(out) {
                    for (a, &v) in db.iter_mut().zip(row) {
                        *a = *a + v;
                    }
                }
                deltas.push((*b, db));
            }
            Op::Relu(x) => {
                let xv = self.nodes[x.0].value.data();
                let d = xv
                    .iter()
                    .zip(gd)
                    .map(|(&v, &g)| if v > T::zero() { g } else { T::zero() })
                    .collect();
                deltas.push((*x, d));
            }
            Op::Sigmoid(x) => {
                let d = y.iter().zip(gd).map(|(&s, &g)| g * s * (T::one() - s)).collect();
                deltas.push((*x, d));
            }
            Op::Softplus(x) => {
                let xv = self.nodes[x.0].value.data();
                let d = xv.iter().zip(gd).map(|(&v, &g)| g * sigmoid(v)).collect();
                deltas.push((*x, d));
            }
            Op::Softmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * n * inner + j;
                        let mut dot = T::zero();
                        for k in 0..n {
                            dot = dot + gd[base + k * inner] * y[base + k * inner];
                        }
                        for k in 0..n {
                            let p = base + k * inner;
                            d[p] = y[p] * (gd[p] - dot);
                        }
                    }
                }
                deltas.push((*x, d));
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let mut d = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let base = o * n * inner + j;
                        let mut total = T::zero();
                        for k in 0..n {
                            total = total + gd[base + k * inner];
                        }
                        for k in 0..n {
                            let p = base + k * inner;
                            d[p] = gd[p] - y[p].exp() * total;
                        }
                    }
                }
                deltas.push((*x, d));
            }
            Op::LogSumExp { x, axis } => {
                let xn = &self.nodes[x.0].value;
                let (outer, n, inner) = axis_split(xn.shape(), *axis);
                let xv = xn.data();
                let mut d = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for j in 0..inner {
                        let r = o * inner + j;
                        let base = o * n * inner + j;
                        for k in 0..n {
                            let p = base + k * inner;
                            d[p] = gd[r] * (xv[p] - y[r]).exp();
                        }
                    }
                }
                deltas.push((*x, d));
            }
            Op::Add(a, b) => {
                deltas.push((*a, gd.to_vec()));
                deltas.push((*b, gd.to_vec()));
            }
            Op::Sub(a, b) => {
                deltas.push((*a, gd.to_vec()));
                deltas.push((*b, gd.iter().map(|&v| -v).collect()));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.nodes[a.0].value.data(), self.nodes[b.0].value.data());
                deltas.push((*a, gd.iter().zip(bv).map(|(&g, &q)| g * q).collect()));
                deltas.push((*b, gd.iter().zip(av).map(|(&g, &p)| g * p).collect()));
            }
            Op::AddScalar(x) | Op::Reshape(x) => deltas.push((*x, gd.to_vec())),
            Op::Scale(x, c) => deltas.push((*x, gd.iter().map(|&v| v * *c).collect())),
            Op::Sum(x) => {
                let n = self.nodes[x.0].value.numel();
                deltas.push((*x, vec![gd[0]; n]));
            }
            Op::Mean(x) => {
                let n = self.nodes[x.0].value.numel();
                let v = gd[0] / T::from_usize(n.max(1)).unwrap();
                deltas.push((*x, vec![v; n]));
            }
            Op::Concat { parts, axis } => {
                let shape = node.value.shape();
                let outer: usize = shape[..*axis].iter().product();
                let inner: usize = shape[axis + 1..].iter().product();
                let total = shape[*axis];
                let mut offset = 0;
                for p in parts {
                    let n = self.nodes[p.0].value.shape()[*axis];
                    let mut d = Vec::with_capacity(outer * n * inner);
                    for o in 0..outer {
                        let s = (o * total + offset) * inner;
                        d.extend_from_slice(&gd[s..s + n * inner]);
                    }
                    offset += n;
                    deltas.push((*p, d));
                }
            }
            Op::Narrow { x, axis, start } => {
                let xs = self.nodes[x.0].value.shape();
                let (outer, n, inner) = axis_split(xs, *axis);
                let len = node.value.shape()[*axis];
                let mut d = vec![T::zero(); outer * n * inner];
                for o in 0..outer {
                    let dst = (o * n + start) * inner;
                    let src = o * len * inner;
                    d[dst..dst + len * inner].copy_from_slice(&gd[src..src + len * inner]);
                }
                deltas.push((*x, d));
            }
            Op::RowNorm(x) => {
                let xv = self.nodes[x.0].value.data();
                let k = self.nodes[x.0].value.shape()[1];
                let mut d = vec![T::zero(); xv.len()];
                for (r, (&norm, &g)) in y.iter().zip(gd).enumerate() {
                    if norm > T::zero() {
                        for c in 0..k {
                            d[r * k + c] = g * xv[r * k + c] / norm;
                        }
                    }
                }
                deltas.push((*x, d));
            }
            Op::MaskedBce {
                pred,
                target,
                mask,
                count,
            } => {
                let (lo, hi) = (T::from_f64_lossy(PROB_EPS), T::from_f64_lossy(1.0 - PROB_EPS));
                let scale = gd[0] / T::from_usize(*count).unwrap();
                let pv = self.nodes[pred.0].value.data();
                let d = pv
                    .iter()
                    .zip(target)
                    .zip(mask)
                    .map(|((&p, &t), &m)| {
                        if !m || p < lo || p > hi {
                            T::zero()
                        } else {
                            -scale * (t / p - (T::one() - t) / (T::one() - p))
                        }
                    })
                    .collect();
                deltas.push((*pred, d));
            }
            Op::CategoricalCe {
                logits,
                labels,
                mask,
                count,
            } => {
                let ln = &self.nodes[logits.0].value;
                let s = ln.shape();
                let (batch, m) = (s[0], s[1]);
                let inner: usize = s[2..].iter().product();
                let x = ln.data();
                let scale = gd[0] / T::from_usize(*count).unwrap();
                let mut d = vec![T::zero(); x.len()];
                for b in 0..batch {
                    for j in 0..inner {
                        let site = b * inner + j;
                        if !mask[site] {
                            continue;
                        }
                        let base = b * m * inner + j;
                        let lse = lane_lse(x, base, m, inner);
                        for k in 0..m {
                            let p = base + k * inner;
                            d[p] = scale * (x[p] - lse).exp();
                        }
                        let p = base + labels[site] * inner;
                        d[p] = d[p] - scale;
                    }
                }
                deltas.push((*logits, d));
            }
            Op::Resample { vol, scale, trans } => {
                let vs = self.nodes[vol.0].value.shape();
                let dims = [vs[2], vs[3], vs[4]];
                let (b, per) = (vs[0], dims.iter().product::<usize>());
                let vd = self.nodes[vol.0].value.data();
                let sd = self.nodes[scale.0].value.data();
                let td = self.nodes[trans.0].value.data();
                let need_vol = self.nodes[vol.0].requires_grad;
                let mut dvol = need_vol.then(|| vec![T::zero(); vd.len()]);
                let mut ds = vec![T::zero(); b * 3];
                let mut dt = vec![T::zero(); b * 3];
                for item in 0..b {
                    let mut dsi = [T::zero(); 3];
                    let mut dti = [T::zero(); 3];
                    resample::backward_item(
                        &vd[item * per..(item + 1) * per],
                        dims,
                        [sd[3 * item], sd[3 * item + 1], sd[3 * item + 2]],
                        [td[3 * item], td[3 * item + 1], td[3 * item + 2]],
                        &gd[item * per..(item + 1) * per],
                        dvol.as_mut().map(|d| &mut d[item * per..(item + 1) * per]),
                        &mut dsi,
                        &mut dti,
                    );
                    ds[3 * item..3 * item + 3].copy_from_slice(&dsi);
                    dt[3 * item..3 * item + 3].copy_from_slice(&dti);
                }
                if let Some(dv) = dvol {
                    deltas.push((*vol, dv));
                }
                deltas.push((*scale, ds));
                deltas.push((*trans, dt));
            }
            Op::GmmNll { logw, mu, sigma, f } => {
                let ws = self.nodes[logw.0].value.shape();
                let (b, n) = (ws[0], ws[1]);
                let d = self.nodes[f.0].value.shape()[1];
                let (lw, mv, sv, fv) = (
                    self.nodes[logw.0].value.data(),
                    self.nodes[mu.0].value.data(),
                    self.nodes[sigma.0].value.data(),
                    self.nodes[f.0].value.data(),
                );
                let a = gmm_log_terms(lw, mv, sv, fv, b, n, d);
                let mut dlw = vec![T::zero(); b * n];
                let mut dmu = vec![T::zero(); b * n * d];
                let mut dsig = vec![T::zero(); b * n * d];
                let mut df = vec![T::zero(); b * d];
                for i in 0..b {
                    let lse = lane_lse(&a, i * n, n, 1);
                    for k in 0..n {
                        // dE/da_k = -responsibility_k
                        let r = -gd[i] * (a[i * n + k] - lse).exp();
                        dlw[i * n + k] = r;
                        for j in 0..d {
                            let p = (i * n + k) * d + j;
                            let s = sv[p];
                            let z = (fv[i * d + j] - mv[p]) / s;
                            dmu[p] = r * z / s;
                            dsig[p] = r * (z * z - T::one()) / s;
                            df[i * d + j] = df[i * d + j] - r * z / s;
                        }
                    }
                }
                deltas.push((*logw, dlw));
                deltas.push((*mu, dmu));
                deltas.push((*sigma, dsig));
                deltas.push((*f, df));
            }
        }
        for (v, d) in deltas {
            self.acc(v, d);
        }
        Ok(())
    }
}

/// Per-component log terms `log w_k + Σ_j log N(f_j | mu_kj, sigma_kj)`.
fn gmm_log_terms<T: Real>(
    logw: &[T],
    mu: &[T],
    sigma: &[T],
    f: &[T],
    b: usize,
    n: usize,
    d: usize,
) -> Vec<T> {
    let half = T::from_f64_lossy(0.5);
    let half_log_2pi = T::from_f64_lossy(0.5 * (2.0 * std::f64::consts::PI).ln());
    let mut a = vec![T::zero(); b * n];
    for i in 0..b {
        for k in 0..n {
            let mut acc = logw[i * n + k];
            for j in 0..d {
                let p = (i * n + k) * d + j;
                let z = (f[i * d + j] - mu[p]) / sigma[p];
                acc = acc - sigma[p].ln() - half_log_2pi - half * z * z;
            }
            a[i * n + k] = acc;
        }
    }
    a
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn softmax_of_zeros_is_uniform() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![4]));
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.25; 4]);
    }

    #[test]
    fn relu_values() {
        let mut g = Graph::<f64>::new();
        let x = g.input(t(&[2], &[-1.0, 2.0]));
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 2.0]);
    }

    #[test]
    fn log_sum_exp_does_not_overflow() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::new(vec![2], vec![1000.0, 1000.0]).unwrap());
        let y = g.log_sum_exp(x, 0).unwrap();
        let v = g.value(y).item();
        assert!((v - (1000.0 + std::f32::consts::LN_2)).abs() < 1e-3);
    }

    #[test]
    fn sum_backward_gives_ones() {
        let mut g = Graph::<f64>::new();
        let x = g.leaf(t(&[3], &[1.0, -2.0, 5.0]), true);
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap().data(), &[1.0; 3]);
    }

    #[test]
    fn reused_node_accumulates() {
        let mut g = Graph::<f64>::new();
        let y = g.leaf(t(&[2], &[0.3, 0.4]), true);
        let a = g.sum(y);
        let b = g.sum(y);
        let l = g.add(a, b).unwrap();
        g.backward(l).unwrap();
        assert_eq!(g.grad(y).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g = Graph::<f64>::new();
        let y = g.leaf(t(&[2], &[0.3, 0.4]), true);
        assert!(g.backward(y).is_err());
    }

    #[test]
    fn bce_of_half_is_ln2() {
        let mut g = Graph::<f64>::new();
        let p = g.leaf(Tensor::full(vec![5], 0.5), true);
        let target = [1.0, 0.0, 1.0, 0.0, 1.0];
        let l = g.masked_bce_mean(p, &target, &[true; 5]).unwrap();
        assert!((g.value(l).item() - std::f64::consts::LN_2).abs() < 1e-12);
        assert!(g.masked_bce_mean(p, &target, &[false; 5]).is_err());
    }

    #[test]
    fn bce_perfect_prediction_hits_clamp() {
        let eps = PROB_EPS;
        let mut g = Graph::<f64>::new();
        let target = [1.0, 0.0, 0.0, 1.0];
        let pred: Vec<f64> = target.iter().map(|&t| if t > 0.5 { 1.0 - eps } else { eps }).collect();
        let p = g.input(t(&[4], &pred));
        let l = g.masked_bce_mean(p, &target, &[true; 4]).unwrap();
        assert!((g.value(l).item() + (1.0 - eps).ln()).abs() < 1e-12);
    }

    #[test]
    fn categorical_ce_limits() {
        let mut g = Graph::<f64>::new();
        let x = g.input(Tensor::zeros(vec![1, 4, 3]));
        let l = g.categorical_ce_mean(x, &[0, 1, 3], &[true; 3]).unwrap();
        assert!((g.value(l).item() - 4f64.ln()).abs() < 1e-12);

        let mut logits = vec![0.0; 4];
        logits[2] = 1e3;
        let x = g.input(t(&[1, 4], &logits));
        let l = g.categorical_ce_mean(x, &[2], &[true]).unwrap();
        assert!(g.value(l).item().abs() < 1e-12);
    }

    #[test]
    fn conv_identity_kernel() {
        let mut g = Graph::<f32>::new();
        let data: Vec<f32> = (0..64).map(|i| i as f32 - 10.0).collect();
        let x = g.input(Tensor::new(vec![1, 1, 4, 4, 4], data.clone()).unwrap());
        let w = g.input(Tensor::full(vec![1, 1, 1, 1, 1], 1.0));
        let b = g.input(Tensor::zeros(vec![1]));
        let y = g.conv3d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(y).data(), &data[..]);
        let yt = g.conv_transpose3d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.value(yt).data(), &data[..]);
    }

    #[test]
    fn conv_of_zeros_is_bias() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![2, 3, 5, 5, 5]));
        let w = g.input(Tensor::full(vec![4, 3, 3, 3, 3], 0.7));
        let b = g.input(Tensor::new(vec![4], vec![1.0, -2.0, 0.5, 3.0]).unwrap());
        let y = g.conv3d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[2, 4, 3, 3, 3]);
        for (i, chunk) in g.value(y).data().chunks(27).enumerate() {
            let bias = [1.0, -2.0, 0.5, 3.0][i % 4];
            assert!(chunk.iter().all(|&v| v == bias));
        }
    }

    #[test]
    fn conv_rejects_channel_mismatch() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![1, 2, 4, 4, 4]));
        let w = g.input(Tensor::zeros(vec![1, 3, 1, 1, 1]));
        let b = g.input(Tensor::zeros(vec![1]));
        let err = g.conv3d(x, w, b, 1, 0).unwrap_err();
        assert!(err.to_string().contains("channels"));
    }

    #[test]
    fn transposed_conv_doubles_extent() {
        let mut g = Graph::<f32>::new();
        let x = g.input(Tensor::zeros(vec![1, 2, 8, 8, 8]));
        let w = g.input(Tensor::zeros(vec![2, 3, 4, 4, 4]));
        let b = g.input(Tensor::zeros(vec![3]));
        let y = g.conv_transpose3d(x, w, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 3, 16, 16, 16]);
    }

    #[test]
    fn resample_rejects_nonpositive_scale() {
        let mut g = Graph::<f64>::new();
        let v = g.input(Tensor::zeros(vec![1, 1, 2, 2, 2]));
        let s = g.input(t(&[1, 3], &[1.0, 0.0, 1.0]));
        let tr = g.input(Tensor::zeros(vec![1, 3]));
        assert!(g.trilinear_resample(v, s, tr).is_err());
    }
}
