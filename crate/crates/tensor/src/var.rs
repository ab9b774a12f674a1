//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Var`] is an immutable node holding its forward value and, when any
//! input requires a gradient, a closure that maps the output gradient to the
//! gradients of its parents. [`Var::backward`] walks the graph once in
//! reverse topological order.

use std::collections::{HashMap, HashSet};
use std::rc::Rc;

use crate::error::{invalid, Result, TensorError};
use crate::kernels;
use crate::params::ParamId;
use crate::scalar::Scalar;
use crate::tensor::Tensor;

type BackFn<T> = Box<dyn Fn(&Tensor<T>, &Tensor<T>, &[Var<T>]) -> Result<Vec<Option<Tensor<T>>>>>;

struct Node<T: Scalar> {
    value: Tensor<T>,
    parents: Vec<Var<T>>,
    backward: Option<BackFn<T>>,
    requires_grad: bool,
    param: Option<ParamId>,
}

#[derive(Clone)]
pub struct Var<T: Scalar>(Rc<Node<T>>);

impl<T: Scalar> std::fmt::Debug for Var<T> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Var")
            .field("shape", &self.shape())
            .field("requires_grad", &self.0.requires_grad)
            .field("param", &self.0.param)
            .finish()
    }
}

/// Gradients produced by [`Var::backward`].
#[derive(Debug, Default)]
pub struct Grads<T> {
    params: HashMap<ParamId, Tensor<T>>,
    watched: HashMap<usize, Tensor<T>>,
}

impl<T: Scalar> Grads<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.params.get(&id)
    }

    /// Gradient with respect to a watched leaf passed to [`Var::backward_watch`].
    pub fn wrt(&self, v: &Var<T>) -> Option<&Tensor<T>> {
        self.watched.get(&v.id())
    }

    pub fn params(&self) -> impl Iterator<Item = (&ParamId, &Tensor<T>)> {
        self.params.iter()
    }

    pub fn all_finite(&self) -> bool {
        self.params.values().all(Tensor::all_finite)
    }
}

fn accumulate<T: Scalar, K: std::hash::Hash + Eq>(map: &mut HashMap<K, Tensor<T>>, key: K, g: Tensor<T>) -> Result<()> {
    match map.get_mut(&key) {
        Some(acc) => acc.add_assign(&g),
        None => {
            map.insert(key, g);
            Ok(())
        }
    }
}

fn broadcast_to<T: Scalar>(g: &Tensor<T>, shape: &[usize]) -> Result<Tensor<T>> {
    if g.shape() == shape {
        return Ok(g.clone());
    }
    Tensor::zeros(shape).zip_map(g, |_, v| v)
}

impl<T: Scalar> Var<T> {
    /// A value that never receives a gradient.
    pub fn constant(value: Tensor<T>) -> Self {
        Var(Rc::new(Node { value, parents: Vec::new(), backward: None, requires_grad: false, param: None }))
    }

    /// A differentiable input whose gradient can be read back through [`Grads::wrt`].
    pub fn leaf(value: Tensor<T>) -> Self {
        Var(Rc::new(Node { value, parents: Vec::new(), backward: None, requires_grad: true, param: None }))
    }

    pub(crate) fn param_leaf(value: Tensor<T>, id: ParamId) -> Self {
        Var(Rc::new(Node { value, parents: Vec::new(), backward: None, requires_grad: true, param: Some(id) }))
    }

    fn from_op(
        value: Tensor<T>,
        parents: Vec<Var<T>>,
        back: impl Fn(&Tensor<T>, &Tensor<T>, &[Var<T>]) -> Result<Vec<Option<Tensor<T>>>> + 'static,
    ) -> Self {
        if !parents.iter().any(Var::requires_grad) {
            return Self::constant(value);
        }
        Var(Rc::new(Node { value, parents, backward: Some(Box::new(back)), requires_grad: true, param: None }))
    }

    fn id(&self) -> usize {
        Rc::as_ptr(&self.0) as *const () as usize
    }

    pub fn value(&self) -> &Tensor<T> {
        &self.0.value
    }

    pub fn shape(&self) -> &[usize] {
        self.0.value.shape()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn detach(&self) -> Self {
        Self::constant(self.value().clone())
    }

    pub fn backward(&self) -> Result<Grads<T>> {
        self.backward_watch(&[])
    }

    /// Back-propagates a unit gradient from `self` (summed if not scalar),
    /// additionally recording gradients of the `watch` leaves.
    pub fn backward_watch(&self, watch: &[&Var<T>]) -> Result<Grads<T>> {
        let mut out = Grads { params: HashMap::new(), watched: HashMap::new() };
        if !self.requires_grad() {
            return Ok(out);
        }
        let watch: HashSet<usize> = watch.iter().map(|v| v.id()).collect();
        let mut order = Vec::new();
        let mut visited = HashSet::new();
        let mut stack = vec![(self.clone(), false)];
        while let Some((v, expanded)) = stack.pop() {
            if expanded {
                order.push(v);
                continue;
            }
            if !visited.insert(v.id()) {
                continue;
            }
            stack.push((v.clone(), true));
            for p in &v.0.parents {
                if p.requires_grad() && !visited.contains(&p.id()) {
                    stack.push((p.clone(), false));
                }
            }
        }
        let mut grads: HashMap<usize, Tensor<T>> = HashMap::new();
        grads.insert(self.id(), Tensor::ones(self.shape()));
        for v in order.iter().rev() {
            let Some(g) = grads.remove(&v.id()) else { continue };
            if watch.contains(&v.id()) {
                accumulate(&mut out.watched, v.id(), g.clone())?;
            }
            if let Some(pid) = v.0.param {
                accumulate(&mut out.params, pid, g.clone())?;
            }
            if let Some(back) = &v.0.backward {
                let pgs = back(&g, &v.0.value, &v.0.parents)?;
                for (p, pg) in v.0.parents.iter().zip(pgs) {
                    if let Some(pg) = pg {
                        if p.requires_grad() {
                            accumulate(&mut grads, p.id(), pg)?;
                        }
                    }
                }
            }
        }
        Ok(out)
    }

    fn unary(&self, f: impl Fn(T) -> T, df: impl Fn(T, T) -> T + 'static) -> Self {
        let value = self.value().map(f);
        Self::from_op(value, vec![self.clone()], move |g, y, ps| {
            let x = ps[0].value();
            let d = x
                .data()
                .iter()
                .zip(y.data())
                .zip(g.data())
                .map(|((&x, &y), &g)| g * df(x, y))
                .collect();
            Ok(vec![Some(Tensor::new(x.shape(), d)?)])
        })
    }

    pub fn add(&self, other: &Var<T>) -> Result<Self> {
        let value = self.value().zip_map(other.value(), |a, b| a + b)?;
        Ok(Self::from_op(value, vec![self.clone(), other.clone()], |g, _, ps| {
            Ok(vec![
                ps[0].requires_grad().then(|| g.sum_to_shape(ps[0].shape())).transpose()?,
                ps[1].requires_grad().then(|| g.sum_to_shape(ps[1].shape())).transpose()?,
            ])
        }))
    }

    pub fn sub(&self, other: &Var<T>) -> Result<Self> {
        let value = self.value().zip_map(other.value(), |a, b| a - b)?;
        Ok(Self::from_op(value, vec![self.clone(), other.clone()], |g, _, ps| {
            Ok(vec![
                ps[0].requires_grad().then(|| g.sum_to_shape(ps[0].shape())).transpose()?,
                ps[1]
                    .requires_grad()
                    .then(|| g.map(|v| -v).sum_to_shape(ps[1].shape()))
                    .transpose()?,
            ])
        }))
    }

    pub fn mul(&self, other: &Var<T>) -> Result<Self> {
        let value = self.value().zip_map(other.value(), |a, b| a * b)?;
        Ok(Self::from_op(value, vec![self.clone(), other.clone()], |g, _, ps| {
            let ga = if ps[0].requires_grad() {
                Some(g.zip_map(ps[1].value(), |g, b| g * b)?.sum_to_shape(ps[0].shape())?)
            } else {
                None
            };
            let gb = if ps[1].requires_grad() {
                Some(g.zip_map(ps[0].value(), |g, a| g * a)?.sum_to_shape(ps[1].shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn div(&self, other: &Var<T>) -> Result<Self> {
        let value = self.value().zip_map(other.value(), |a, b| a / b)?;
        Ok(Self::from_op(value, vec![self.clone(), other.clone()], |g, y, ps| {
            let ga = if ps[0].requires_grad() {
                Some(g.zip_map(ps[1].value(), |g, b| g / b)?.sum_to_shape(ps[0].shape())?)
            } else {
                None
            };
            let gb = if ps[1].requires_grad() {
                // d(a/b)/db = -y/b
                let gy = g.zip_map(y, |g, y| g * y)?;
                Some(gy.zip_map(ps[1].value(), |v, b| -v / b)?.sum_to_shape(ps[1].shape())?)
            } else {
                None
            };
            Ok(vec![ga, gb])
        }))
    }

    pub fn add_scalar(&self, s: T) -> Self {
        self.unary(|x| x + s, |_, _| T::one())
    }

    pub fn mul_scalar(&self, s: T) -> Self {
        self.unary(|x| x * s, move |_, _| s)
    }

    pub fn neg(&self) -> Self {
        self.mul_scalar(-T::one())
    }

    pub fn square(&self) -> Self {
        self.unary(|x| x * x, |x, _| x + x)
    }

    pub fn exp(&self) -> Self {
        self.unary(|x| x.exp(), |_, y| y)
    }

    pub fn ln(&self) -> Self {
        self.unary(|x| x.ln(), |x, _| T::one() / x)
    }

    pub fn sqrt(&self) -> Self {
        self.unary(|x| x.sqrt(), |_, y| T::lit(0.5) / y)
    }

    pub fn abs(&self) -> Self {
        self.unary(
            |x| x.abs(),
            |x, _| {
                if x > T::zero() {
                    T::one()
                } else if x < T::zero() {
                    -T::one()
                } else {
                    T::zero()
                }
            },
        )
    }

    pub fn sigmoid(&self) -> Self {
        self.unary(|x| T::one() / (T::one() + (-x).exp()), |_, y| y * (T::one() - y))
    }

    pub fn tanh(&self) -> Self {
        self.unary(|x| x.tanh(), |_, y| T::one() - y * y)
    }

    pub fn relu(&self) -> Self {
        self.leaky_relu(T::zero())
    }

    pub fn leaky_relu(&self, slope: T) -> Self {
        self.unary(
            move |x| if x > T::zero() { x } else { x * slope },
            move |x, _| if x > T::zero() { T::one() } else { slope },
        )
    }

    /// `max(x, lo)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&self, lo: T) -> Self {
        self.unary(move |x| x.max(lo), move |x, _| if x > lo { T::one() } else { T::zero() })
    }

    pub fn clamp(&self, lo: T, hi: T) -> Self {
        self.unary(
            move |x| x.max(lo).min(hi),
            move |x, _| if x > lo && x < hi { T::one() } else { T::zero() },
        )
    }

    /// Sum over `axes`, keeping them with size 1.
    pub fn sum_axes(&self, axes: &[usize]) -> Result<Self> {
        let value = self.value().sum_axes(axes)?;
        Ok(Self::from_op(value, vec![self.clone()], |g, _, ps| Ok(vec![Some(broadcast_to(g, ps[0].shape())?)])))
    }

    pub fn mean_axes(&self, axes: &[usize]) -> Result<Self> {
        let count: usize = axes.iter().map(|&a| self.shape().get(a).copied().unwrap_or(1)).product();
        Ok(self.sum_axes(axes)?.mul_scalar(T::one() / T::from_usize(count.max(1)).unwrap()))
    }

    /// Sum of all elements as a rank-0 value.
    pub fn sum_all(&self) -> Self {
        let value = Tensor::scalar(self.value().sum());
        Self::from_op(value, vec![self.clone()], |g, _, ps| Ok(vec![Some(Tensor::full(ps[0].shape(), g.item()))]))
    }

    pub fn mean_all(&self) -> Self {
        let n = T::from_usize(self.value().numel().max(1)).unwrap();
        self.sum_all().mul_scalar(T::one() / n)
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Self> {
        let value = self.value().reshape(shape)?;
        Ok(Self::from_op(value, vec![self.clone()], |g, _, ps| Ok(vec![Some(g.reshape(ps[0].shape())?)])))
    }

    pub fn permute(&self, perm: &[usize]) -> Result<Self> {
        let value = self.value().permute(perm)?;
        let mut inv = vec![0; perm.len()];
        for (i, &p) in perm.iter().enumerate() {
            inv[p] = i;
        }
        Ok(Self::from_op(value, vec![self.clone()], move |g, _, _| Ok(vec![Some(g.permute(&inv)?)])))
    }

    pub fn concat(parts: &[Var<T>], axis: usize) -> Result<Self> {
        let tensors: Vec<&Tensor<T>> = parts.iter().map(Var::value).collect();
        let value = Tensor::concat(&tensors, axis)?;
        let sizes: Vec<usize> = parts.iter().map(|p| p.shape()[axis]).collect();
        Ok(Self::from_op(value, parts.to_vec(), move |g, _, ps| {
            let mut start = 0;
            let mut out = Vec::with_capacity(sizes.len());
            for (p, &len) in ps.iter().zip(&sizes) {
                out.push(p.requires_grad().then(|| g.narrow(axis, start, len)).transpose()?);
                start += len;
            }
            Ok(out)
        }))
    }

    pub fn narrow(&self, axis: usize, start: usize, len: usize) -> Result<Self> {
        let value = self.value().narrow(axis, start, len)?;
        let full = self.shape()[axis];
        Ok(Self::from_op(value, vec![self.clone()], move |g, _, _| Ok(vec![Some(g.pad_axis(axis, start, full)?)])))
    }

    pub fn roll(&self, axis: usize, shift: isize) -> Result<Self> {
        let value = self.value().roll(axis, shift)?;
        Ok(Self::from_op(value, vec![self.clone()], move |g, _, _| Ok(vec![Some(g.roll(axis, -shift)?)])))
    }

    /// Shift along `axis` by `offset` filling vacated positions with zeros:
    /// `out[i] = in[i - offset]`.
    pub fn shift_zero(&self, axis: usize, offset: isize) -> Result<Self> {
        let n = self.shape()[axis];
        let k = offset.unsigned_abs();
        if k == 0 {
            return Ok(self.clone());
        }
        if k >= n {
            return Ok(Var::constant(Tensor::zeros(self.shape())));
        }
        let kept = if offset > 0 { self.narrow(axis, 0, n - k)? } else { self.narrow(axis, k, n - k)? };
        let start = if offset > 0 { k } else { 0 };
        let value = kept.value().pad_axis(axis, start, n)?;
        Ok(Self::from_op(value, vec![kept], move |g, _, _| Ok(vec![Some(g.narrow(axis, start, n - k)?)])))
    }

    pub fn matmul(&self, other: &Var<T>) -> Result<Self> {
        let value = kernels::matmul(self.value(), other.value())?;
        Ok(Self::from_op(value, vec![self.clone(), other.clone()], |g, _, ps| {
            let (ga, gb) = kernels::matmul_grads(g, ps[0].value(), ps[1].value())?;
            Ok(vec![Some(ga), Some(gb)])
        }))
    }

    /// 2-D cross-correlation, `self` `[N,C,H,W]`, `weight` `[O,C,k,k]`.
    pub fn conv2d(&self, weight: &Var<T>, stride: usize, pad: usize) -> Result<Self> {
        let value = kernels::conv2d(self.value(), weight.value(), stride, pad)?;
        Ok(Self::from_op(value, vec![self.clone(), weight.clone()], move |g, _, ps| {
            let gx = if ps[0].requires_grad() {
                Some(kernels::conv2d_grad_input(g, ps[1].value(), ps[0].shape(), stride, pad)?)
            } else {
                None
            };
            let gw = if ps[1].requires_grad() {
                Some(kernels::conv2d_grad_weight(g, ps[0].value(), ps[1].shape(), stride, pad)?)
            } else {
                None
            };
            Ok(vec![gx, gw])
        }))
    }

    /// Numerically stable softmax over the last axis.
    pub fn softmax_last(&self) -> Result<Self> {
        let shape = self.shape().to_vec();
        let d = *shape.last().ok_or_else(|| invalid("softmax_last", "rank-0 input"))?;
        if d == 0 {
            return Err(invalid("softmax_last", "empty last axis"));
        }
        let mut out = self.value().data().to_vec();
        for row in out.chunks_mut(d) {
            let m = row.iter().fold(T::neg_infinity(), |m, &v| m.max(v));
            let mut s = T::zero();
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                s = s + *v;
            }
            for v in row.iter_mut() {
                *v = *v / s;
            }
        }
        let value = Tensor::new(&shape, out)?;
        Ok(Self::from_op(value, vec![self.clone()], move |g, y, _| {
            let mut dx = vec![T::zero(); y.numel()];
            for ((dr, yr), gr) in dx.chunks_mut(d).zip(y.data().chunks(d)).zip(g.data().chunks(d)) {
                let dot: T = yr.iter().zip(gr).map(|(&a, &b)| a * b).sum();
                for ((o, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                    *o = yv * (gv - dot);
                }
            }
            Ok(vec![Some(Tensor::new(y.shape(), dx)?)])
        }))
    }

    /// Normalises each `[H,W]` plane of `[N,C,H,W]` to zero mean and unit
    /// (biased) variance, `eps` added to the variance.
    pub fn instance_norm(&self, eps: T) -> Result<Self> {
        let (n, c, h, w) = self.value().dims4()?;
        let hw = h * w;
        let count = T::from_usize(hw.max(1)).unwrap();
        let x = self.value().data();
        let mut y = vec![T::zero(); x.len()];
        let mut rstd = vec![T::zero(); n * c];
        for p in 0..n * c {
            let xs = &x[p * hw..(p + 1) * hw];
            let mean = xs.iter().copied().sum::<T>() / count;
            let var = xs.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let r = T::one() / (var + eps).sqrt();
            rstd[p] = r;
            for (o, &v) in y[p * hw..(p + 1) * hw].iter_mut().zip(xs) {
                *o = (v - mean) * r;
            }
        }
        let value = Tensor::new(self.shape(), y)?;
        Ok(Self::from_op(value, vec![self.clone()], move |g, y, _| {
            let mut dx = vec![T::zero(); g.numel()];
            for p in 0..rstd.len() {
                let gs = &g.data()[p * hw..(p + 1) * hw];
                let ys = &y.data()[p * hw..(p + 1) * hw];
                let mg = gs.iter().copied().sum::<T>() / count;
                let mgy = gs.iter().zip(ys).map(|(&a, &b)| a * b).sum::<T>() / count;
                for ((o, &gv), &yv) in dx[p * hw..(p + 1) * hw].iter_mut().zip(gs).zip(ys) {
                    *o = rstd[p] * (gv - mg - yv * mgy);
                }
            }
            Ok(vec![Some(Tensor::new(g.shape(), dx)?)])
        }))
    }

    pub fn avg_pool(&self, f: usize) -> Result<Self> {
        if f == 1 {
            return Ok(self.clone());
        }
        let value = kernels::avg_pool(self.value(), f)?;
        Ok(Self::from_op(value, vec![self.clone()], move |g, _, _| Ok(vec![Some(kernels::avg_pool_grad(g, f)?)])))
    }

    pub fn upsample_nearest(&self, f: usize) -> Result<Self> {
        if f == 1 {
            return Ok(self.clone());
        }
        let value = kernels::upsample_nearest(self.value(), f)?;
        Ok(Self::from_op(value, vec![self.clone()], move |g, _, _| {
            Ok(vec![Some(kernels::upsample_nearest_grad(g, f)?)])
        }))
    }

    pub fn upsample_bilinear(&self, f: usize) -> Result<Self> {
        if f == 1 {
            return Ok(self.clone());
        }
        let value = kernels::upsample_bilinear(self.value(), f)?;
        Ok(Self::from_op(value, vec![self.clone()], move |g, _, _| {
            Ok(vec![Some(kernels::upsample_bilinear_grad(g, f)?)])
        }))
    }

    /// Resizes the spatial dims of `[N,C,H,W]` to `(h, w)` by an integer
    /// factor: average pooling down, bilinear or nearest interpolation up.
    pub fn resize(&self, h: usize, w: usize, nearest: bool) -> Result<Self> {
        let (_, _, sh, sw) = self.value().dims4()?;
        if (sh, sw) == (h, w) {
            return Ok(self.clone());
        }
        if sh >= h && sh % h == 0 && sw % w == 0 && sh / h == sw / w {
            return self.avg_pool(sh / h);
        }
        if h >= sh && h % sh == 0 && w % sw == 0 && h / sh == w / sw {
            let f = h / sh;
            return if nearest { self.upsample_nearest(f) } else { self.upsample_bilinear(f) };
        }
        Err(TensorError::ShapeMismatch { op: "resize", lhs: self.shape().to_vec(), rhs: vec![h, w] })
    }
}
