//! Reverse-mode differentiation over 2-D float arrays.
//!
//! A [`Tape`] records every operation of a forward pass; [`Tape::backward`]
//! walks it in reverse and returns the gradient of a scalar node with
//! respect to every node.

use ndarray::{s, Array2, Axis, LinalgScalar, ScalarOperand};
use num_traits::Float;
use std::fmt::Debug;
use std::iter::Sum;
use std::ops::{AddAssign, DivAssign, MulAssign};

/// Element type of a [`Tape`]: `f64` for checks, `f32` for training.
pub trait Real: Float + LinalgScalar + ScalarOperand + AddAssign + MulAssign + DivAssign + Sum + Debug + Send + Sync {
    fn of(x: f64) -> Self;
}

impl Real for f64 {
    fn of(x: f64) -> Self {
        x
    }
}

impl Real for f32 {
    fn of(x: f64) -> Self {
        x as f32
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Mutations of a backward rule, used to show that gradient checks catch
/// wrong derivatives.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum GradFault {
    #[default]
    None,
    /// SiLU derivative drops its second term.
    Silu,
    /// Right-operand matmul gradient scaled by 0.9.
    MatMulRhs,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddRow(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Silu(Var),
    Mish(Var),
    LayerNorm { x: Var, gain: Var, bias: Var, xhat: Array2<T>, inv_std: Vec<T> },
    Concat(Vec<Var>),
    Slice(Var, usize),
    ScaleRows(Var, Vec<T>),
    Interleave(Vec<Var>),
    PickRows { x: Var, j: usize, seq: usize },
    Attention { q: Var, k: Var, v: Var, heads: usize, seq: usize, probs: Vec<Array2<T>> },
    Mse { x: Var, target: Array2<T>, weight: Array2<T>, denom: T },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Array2<T>,
    op: Op<T>,
}

pub struct Tape<T = f64> {
    nodes: Vec<Node<T>>,
}

impl<T: Real> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

fn softplus<T: Real>(x: T) -> T {
    if x > T::of(30.0) {
        x
    } else {
        x.exp().ln_1p()
    }
}

impl<T: Real> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    fn push(&mut self, value: Array2<T>, op: Op<T>) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &Array2<T> {
        &self.nodes[v.0].value
    }

    pub fn leaf(&mut self, value: Array2<T>) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a).dot(self.value(b));
        self.push(v, Op::MatMul(a, b))
    }

    /// `a + bias` with a `1 x n` bias broadcast over rows.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Var {
        let v = self.value(a) + self.value(bias);
        self.push(v, Op::AddRow(a, bias))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) + self.value(b);
        self.push(v, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let v = self.value(a) * self.value(b);
        self.push(v, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Var {
        let v = self.value(a) * c;
        self.push(v, Op::Scale(a, c))
    }

    pub fn silu(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * sigmoid(x));
        self.push(v, Op::Silu(a))
    }

    pub fn mish(&mut self, a: Var) -> Var {
        let v = self.value(a).mapv(|x| x * softplus(x).tanh());
        self.push(v, Op::Mish(a))
    }

    /// Row-wise layer norm with `1 x n` gain and bias.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Var {
        let xv = self.value(x);
        let n = T::of(xv.ncols() as f64);
        let mut xhat = xv.clone();
        let mut inv_std = Vec::with_capacity(xv.nrows());
        for mut row in xhat.rows_mut() {
            let mean = row.sum() / n;
            let var = row.iter().map(|&v| (v - mean).powi(2)).sum::<T>() / n;
            let is = T::one() / (var + T::of(1e-5)).sqrt();
            row.mapv_inplace(|v| (v - mean) * is);
            inv_std.push(is);
        }
        let out = &xhat * self.value(gain) + self.value(bias);
        self.push(out, Op::LayerNorm { x, gain, bias, xhat, inv_std })
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let views: Vec<_> = parts.iter().map(|p| self.value(*p).view()).collect();
        let v = ndarray::concatenate(Axis(1), &views).expect("concat needs equal row counts");
        self.push(v, Op::Concat(parts.to_vec()))
    }

    /// Columns `start..start+len`.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Var {
        let v = self.value(a).slice(s![.., start..start + len]).to_owned();
        self.push(v, Op::Slice(a, start))
    }

    /// Multiplies row `i` by `w[i]`.
    pub fn scale_rows(&mut self, a: Var, w: Vec<T>) -> Var {
        let mut v = self.value(a).clone();
        for (mut row, wi) in v.rows_mut().into_iter().zip(&w) {
            row *= *wi;
        }
        self.push(v, Op::ScaleRows(a, w))
    }

    /// Row `b*n + j` of the result is row `b` of `parts[j]`.
    pub fn interleave(&mut self, parts: &[Var]) -> Var {
        let n = parts.len();
        let (rows, cols) = self.value(parts[0]).dim();
        let mut v = Array2::<T>::zeros((rows * n, cols));
        for (j, p) in parts.iter().enumerate() {
            let pv = self.value(*p);
            for b in 0..rows {
                v.row_mut(b * n + j).assign(&pv.row(b));
            }
        }
        self.push(v, Op::Interleave(parts.to_vec()))
    }

    /// Rows `b*seq + j` of `x` for every group `b`.
    pub fn pick_rows(&mut self, x: Var, j: usize, seq: usize) -> Var {
        let xv = self.value(x);
        let groups = xv.nrows() / seq;
        let mut v = Array2::<T>::zeros((groups, xv.ncols()));
        for b in 0..groups {
            v.row_mut(b).assign(&xv.row(b * seq + j));
        }
        self.push(v, Op::PickRows { x, j, seq })
    }

    /// Multi-head self-attention core over groups of `seq` consecutive rows.
    /// `key_mask[r]` is false for padded rows, which are never attended to.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, seq: usize, key_mask: &[bool]) -> Var {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (rows, d) = qv.dim();
        let dh = d / heads;
        let scale = T::one() / T::of(dh as f64).sqrt();
        let mut out = Array2::<T>::zeros((rows, d));
        let mut probs = Vec::with_capacity(rows / seq * heads);
        for g in 0..rows / seq {
            let r0 = g * seq;
            for h in 0..heads {
                let c0 = h * dh;
                let qs = qv.slice(s![r0..r0 + seq, c0..c0 + dh]);
                let ks = kv.slice(s![r0..r0 + seq, c0..c0 + dh]);
                let vs = vv.slice(s![r0..r0 + seq, c0..c0 + dh]);
                let mut sc = qs.dot(&ks.t()) * scale;
                for mut row in sc.rows_mut() {
                    let mut mx = T::neg_infinity();
                    for (j, x) in row.iter().enumerate() {
                        if key_mask[r0 + j] {
                            mx = mx.max(*x);
                        }
                    }
                    let mut sum = T::zero();
                    for (j, x) in row.iter_mut().enumerate() {
                        *x = if key_mask[r0 + j] { (*x - mx).exp() } else { T::zero() };
                        sum += *x;
                    }
                    if sum > T::zero() {
                        row /= sum;
                    }
                }
                out.slice_mut(s![r0..r0 + seq, c0..c0 + dh]).assign(&sc.dot(&vs));
                probs.push(sc);
            }
        }
        self.push(out, Op::Attention { q, k, v, heads, seq, probs })
    }

    /// `sum(weight * (x - target)^2) / denom` as a `1 x 1` node.
    pub fn mse(&mut self, x: Var, target: Array2<T>, weight: Array2<T>, denom: T) -> Var {
        let d = self.value(x) - &target;
        let loss = (&d * &d * &weight).sum() / denom;
        self.push(Array2::from_elem((1, 1), loss), Op::Mse { x, target, weight, denom })
    }

    /// Gradients of the scalar `root` with respect to every leaf; other
    /// entries are `None`.
    pub fn backward(&self, root: Var, fault: GradFault) -> Vec<Option<Array2<T>>> {
        let mut grads: Vec<Option<Array2<T>>> = vec![None; self.nodes.len()];
        grads[root.0] = Some(Array2::ones(self.nodes[root.0].value.raw_dim()));
        fn acc<T: Real>(grads: &mut [Option<Array2<T>>], v: Var, g: Array2<T>) {
            match &mut grads[v.0] {
                Some(e) => *e += &g,
                slot => *slot = Some(g),
            }
        }
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf => grads[i] = Some(g),
                Op::MatMul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    acc(&mut grads, *a, g.dot(&bv.t()));
                    let mut gb = av.t().dot(&g);
                    if fault == GradFault::MatMulRhs {
                        gb *= T::of(0.9);
                    }
                    acc(&mut grads, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *a, g);
                }
                Op::Add(a, b) => {
                    acc(&mut grads, *b, g.clone());
                    acc(&mut grads, *a, g);
                }
                Op::Mul(a, b) => {
                    acc(&mut grads, *a, &g * self.value(*b));
                    acc(&mut grads, *b, &g * self.value(*a));
                }
                Op::Scale(a, c) => acc(&mut grads, *a, g * *c),
                Op::Silu(a) => {
                    let x = self.value(*a);
                    let mut d = x.mapv(|x| {
                        let s = sigmoid(x);
                        if fault == GradFault::Silu {
                            s
                        } else {
                            s * (T::one() + x * (T::one() - s))
                        }
                    });
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::Mish(a) => {
                    let x = self.value(*a);
                    let mut d = x.mapv(|x| {
                        let t = softplus(x).tanh();
                        t + x * (T::one() - t * t) * sigmoid(x)
                    });
                    d *= &g;
                    acc(&mut grads, *a, d);
                }
                Op::LayerNorm { x, gain, bias, xhat, inv_std } => {
                    acc(&mut grads, *bias, g.sum_axis(Axis(0)).insert_axis(Axis(0)));
                    acc(&mut grads, *gain, (&g * xhat).sum_axis(Axis(0)).insert_axis(Axis(0)));
                    let gx = &g * self.value(*gain);
                    let n = T::of(gx.ncols() as f64);
                    let mut dx = Array2::<T>::zeros(gx.raw_dim());
                    for r in 0..gx.nrows() {
                        let gr = gx.row(r);
                        let xr = xhat.row(r);
                        let m1 = gr.sum() / n;
                        let m2 = gr.iter().zip(xr.iter()).map(|(&a, &b)| a * b).sum::<T>() / n;
                        for c in 0..gx.ncols() {
                            dx[[r, c]] = inv_std[r] * (gr[c] - m1 - xr[c] * m2);
                        }
                    }
                    acc(&mut grads, *x, dx);
                }
                Op::Concat(parts) => {
                    let mut c0 = 0;
                    for p in parts {
                        let w = self.value(*p).ncols();
                        acc(&mut grads, *p, g.slice(s![.., c0..c0 + w]).to_owned());
                        c0 += w;
                    }
                }
                Op::Slice(a, start) => {
                    let mut d = Array2::<T>::zeros(self.value(*a).raw_dim());
                    d.slice_mut(s![.., *start..*start + g.ncols()]).assign(&g);
                    acc(&mut grads, *a, d);
                }
                Op::ScaleRows(a, w) => {
                    let mut d = g;
                    for (mut row, wi) in d.rows_mut().into_iter().zip(w) {
                        row *= *wi;
                    }
                    acc(&mut grads, *a, d);
                }
                Op::Interleave(parts) => {
                    let n = parts.len();
                    for (j, p) in parts.iter().enumerate() {
                        let rows = self.value(*p).nrows();
                        let mut d = Array2::<T>::zeros(self.value(*p).raw_dim());
                        for b in 0..rows {
                            d.row_mut(b).assign(&g.row(b * n + j));
                        }
                        acc(&mut grads, *p, d);
                    }
                }
                Op::PickRows { x, j, seq } => {
                    let mut d = Array2::<T>::zeros(self.value(*x).raw_dim());
                    for b in 0..g.nrows() {
                        d.row_mut(b * seq + j).assign(&g.row(b));
                    }
                    acc(&mut grads, *x, d);
                }
                Op::Attention { q, k, v, heads, seq, probs } => {
                    let (heads, seq) = (*heads, *seq);
                    let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                    let (rows, d) = qv.dim();
                    let dh = d / heads;
                    let scale = T::one() / T::of(dh as f64).sqrt();
                    let mut gq = Array2::<T>::zeros((rows, d));
                    let mut gk = Array2::<T>::zeros((rows, d));
                    let mut gv = Array2::<T>::zeros((rows, d));
                    for gi in 0..rows / seq {
                        let r0 = gi * seq;
                        for h in 0..heads {
                            let c0 = h * dh;
                            let p = &probs[gi * heads + h];
                            let go = g.slice(s![r0..r0 + seq, c0..c0 + dh]);
                            let qs = qv.slice(s![r0..r0 + seq, c0..c0 + dh]);
                            let ks = kv.slice(s![r0..r0 + seq, c0..c0 + dh]);
                            let vs = vv.slice(s![r0..r0 + seq, c0..c0 + dh]);
                            gv.slice_mut(s![r0..r0 + seq, c0..c0 + dh]).assign(&p.t().dot(&go));
                            let gp = go.dot(&vs.t());
                            let mut gs = Array2::<T>::zeros((seq, seq));
                            for r in 0..seq {
                                let dot: T = (0..seq).map(|j| gp[[r, j]] * p[[r, j]]).sum();
                                for j in 0..seq {
                                    gs[[r, j]] = p[[r, j]] * (gp[[r, j]] - dot) * scale;
                                }
                            }
                            gq.slice_mut(s![r0..r0 + seq, c0..c0 + dh]).assign(&gs.dot(&ks));
                            gk.slice_mut(s![r0..r0 + seq, c0..c0 + dh]).assign(&gs.t().dot(&qs));
                        }
                    }
                    acc(&mut grads, *q, gq);
                    acc(&mut grads, *k, gk);
                    acc(&mut grads, *v, gv);
                }
                Op::Mse { x, target, weight, denom } => {
                    let d = (self.value(*x) - target) * weight * (T::of(2.0) * g[[0, 0]] / *denom);
                    acc(&mut grads, *x, d);
                }
            }
        }
        grads
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::array;

    fn numeric(f: &dyn Fn(&Array2<f64>) -> f64, x: &Array2<f64>) -> Array2<f64> {
        let mut g = Array2::zeros(x.raw_dim());
        let h = 1e-6;
        for idx in 0..x.len() {
            let (r, c) = (idx / x.ncols(), idx % x.ncols());
            let mut a = x.clone();
            a[[r, c]] += h;
            let mut b = x.clone();
            b[[r, c]] -= h;
            g[[r, c]] = (f(&a) - f(&b)) / (2.0 * h);
        }
        g
    }

    fn close(a: &Array2<f64>, b: &Array2<f64>, tol: f64) -> bool {
        a.iter().zip(b.iter()).all(|(x, y)| (x - y).abs() <= tol * (1.0 + x.abs().max(y.abs())))
    }

    #[test]
    fn elementwise_and_norm_gradients() {
        let x0 = array![[0.3, -1.2, 2.0], [0.1, 0.5, -0.7]];
        let build = |t: &mut Tape, x: Var| {
            let gain = t.leaf(array![[1.1, 0.9, 1.3]]);
            let bias = t.leaf(array![[0.1, -0.2, 0.0]]);
            let a = t.silu(x);
            let b = t.mish(a);
            let c = t.layer_norm(b, gain, bias);
            let d = t.mul(c, x);
            let e = t.scale_rows(d, vec![0.5, 2.0]);
            t.mse(e, Array2::zeros((2, 3)), Array2::ones((2, 3)), 6.0)
        };
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let l = build(&mut t, v);
            t.value(l)[[0, 0]]
        };
        let mut t = Tape::new();
        let v = t.leaf(x0.clone());
        let l = build(&mut t, v);
        let g = t.backward(l, GradFault::None)[v.0].clone().unwrap();
        assert!(close(&g, &numeric(&f, &x0), 1e-6));
    }

    #[test]
    fn attention_gradient_with_padding() {
        let x0 = Array2::from_shape_fn((6, 4), |(r, c)| ((r * 7 + c * 3) % 5) as f64 * 0.3 - 0.6);
        let mask = [true, true, false, true, true, true];
        let build = |t: &mut Tape, x: Var| {
            let w = t.leaf(Array2::from_shape_fn((4, 4), |(r, c)| ((r + 2 * c) % 3) as f64 * 0.2 - 0.2));
            let q = t.matmul(x, w);
            let a = t.attention(q, x, x, 2, 3, &mask);
            t.mse(a, Array2::from_elem((6, 4), 0.1), Array2::ones((6, 4)), 24.0)
        };
        let f = |x: &Array2<f64>| {
            let mut t = Tape::new();
            let v = t.leaf(x.clone());
            let l = build(&mut t, v);
            t.value(l)[[0, 0]]
        };
        let mut t = Tape::new();
        let v = t.leaf(x0.clone());
        let l = build(&mut t, v);
        let g = t.backward(l, GradFault::None)[v.0].clone().unwrap();
        assert!(close(&g, &numeric(&f, &x0), 1e-6));
    }
}
