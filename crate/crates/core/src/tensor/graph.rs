use super::kernels::{self, axis_split, ConvGeom, GroupStats, Padding};
use super::{Real, Tensor};
use crate::error::{bail, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Relu(Var),
    Log(Var),
    Exp(Var),
    Sum(Var),
    Mean(Var),
    SumAxis { x: Var, axis: usize },
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    L2Normalize { x: Var, axis: usize, eps: T },
    Softmax { x: Var, axis: usize },
    LogSoftmax { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Var, geom: ConvGeom },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, stats: GroupStats<T> },
    Upsample2x(Var),
    GatherPixels { map: Var, coords: Vec<(usize, usize)> },
    ConcatCols(Var, Var),
    Pick { x: Var, index: Vec<usize> },
    AddRowBias { x: Var, bias: Var },
    Huber { pred: Var, target: Vec<T>, delta: T },
    L1 { pred: Var, target: Vec<T> },
}

#[derive(Clone, Debug)]
struct Node<T> {
    shape: Vec<usize>,
    data: Vec<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Dynamically recorded computation tape.
///
/// Nodes are appended in evaluation order, so the tape is topologically sorted
/// by construction and [`Graph::backward`] is a single reverse sweep.
#[derive(Clone, Debug, Default)]
pub struct Graph<T: Real = f32> {
    nodes: Vec<Node<T>>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
#[derive(Clone, Debug)]
pub struct Grads<T> {
    grads: Vec<Option<Vec<T>>>,
}

impl<T: Real> Grads<T> {
    pub fn get(&self, var: Var) -> Option<&[T]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }
}

fn same_shape(a: &[usize], b: &[usize], what: &str) -> Result<()> {
    if a != b {
        bail!(Dimension, "{what}: shapes {a:?} and {b:?} differ");
    }
    Ok(())
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        bail!(Dimension, "axis {axis} out of range for shape {shape:?}");
    }
    Ok(())
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<T>, op: Op<T>, inputs: &[Var]) -> Result<Var> {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if data.iter().any(|v| !v.is_finite()) {
            bail!(Numerical, "non-finite value produced by {}", op_name(&op));
        }
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            shape,
            data,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Adds an input tensor. Only leaves with `requires_grad` receive gradients.
    pub fn leaf(&mut self, t: Tensor<T>, requires_grad: bool) -> Var {
        let shape = t.shape().to_vec();
        self.nodes.push(Node {
            shape,
            data: t.into_data(),
            op: Op::Leaf,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        self.leaf(t, false)
    }

    pub fn value(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(&n.shape, n.data.clone()).expect("node shape is consistent")
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Branch taken at every non-smooth point of the tape (ReLU signs, L1 and
    /// Huber residual regimes), in tape order. Finite-difference checks use it
    /// to detect when a perturbation crosses a kink.
    pub fn kink_pattern(&self) -> Vec<bool> {
        let mut out = Vec::new();
        for node in &self.nodes {
            match &node.op {
                Op::Relu(x) => out.extend(self.nodes[x.0].data.iter().map(|v| *v > T::zero())),
                Op::L1 { pred, target } => out.extend(
                    self.nodes[pred.0]
                        .data
                        .iter()
                        .zip(target)
                        .map(|(&p, &t)| p > t),
                ),
                Op::Huber { pred, target, delta } => {
                    out.extend(self.nodes[pred.0].data.iter().zip(target).flat_map(|(&p, &t)| {
                        let r = p - t;
                        [r > *delta, r < -*delta]
                    }))
                }
                _ => {}
            }
        }
        out
    }

    fn binary(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<(Vec<usize>, Vec<T>)> {
        same_shape(self.shape(a), self.shape(b), what)?;
        let data = self
            .value(a)
            .iter()
            .zip(self.value(b))
            .map(|(&x, &y)| f(x, y))
            .collect();
        Ok((self.shape(a).to_vec(), data))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "add", |x, y| x + y)?;
        self.push(s, d, Op::Add(a, b), &[a, b])
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "sub", |x, y| x - y)?;
        self.push(s, d, Op::Sub(a, b), &[a, b])
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (s, d) = self.binary(a, b, "mul", |x, y| x * y)?;
        self.push(s, d, Op::Mul(a, b), &[a, b])
    }

    pub fn scalar_mul(&mut self, a: Var, s: T) -> Result<Var> {
        let d = self.value(a).iter().map(|&x| x * s).collect();
        self.push(self.shape(a).to_vec(), d, Op::Scale(a, s), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).iter().map(|&x| x.max(T::zero())).collect();
        self.push(self.shape(a).to_vec(), d, Op::Relu(a), &[a])
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        if self.value(a).iter().any(|&x| x <= T::zero()) {
            bail!(Numerical, "log of non-positive value");
        }
        let d = self.value(a).iter().map(|&x| x.ln()).collect();
        self.push(self.shape(a).to_vec(), d, Op::Log(a), &[a])
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let d = self.value(a).iter().map(|&x| x.exp()).collect();
        self.push(self.shape(a).to_vec(), d, Op::Exp(a), &[a])
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).iter().copied().sum();
        self.push(vec![], vec![s], Op::Sum(a), &[a])
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            bail!(Dimension, "mean of empty tensor");
        }
        let s = self.value(a).iter().copied().sum::<T>() / T::of(n as f64);
        self.push(vec![], vec![s], Op::Mean(a), &[a])
    }

    /// Sums out `axis`, removing it from the shape.
    pub fn sum_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(a), axis)?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let x = self.value(a);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for l in 0..len {
                for i in 0..inner {
                    out[o * inner + i] = out[o * inner + i] + x[(o * len + l) * inner + i];
                }
            }
        }
        let mut shape = self.shape(a).to_vec();
        shape.remove(axis);
        self.push(shape, out, Op::SumAxis { x: a, axis }, &[a])
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa.len() != 2 || sb.len() != 2 || sa[1] != sb[0] {
            bail!(Dimension, "matmul of {sa:?} and {sb:?}");
        }
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        let mut out = vec![T::zero(); m * n];
        kernels::gemm(m, k, n, self.value(a), false, self.value(b), false, &mut out, false);
        self.push(vec![m, n], out, Op::Matmul(a, b), &[a, b])
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a);
        if s.len() != 2 {
            bail!(Dimension, "transpose expects a matrix, got {s:?}");
        }
        let (r, c) = (s[0], s[1]);
        let x = self.value(a);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = x[i * c + j];
            }
        }
        self.push(vec![c, r], out, Op::Transpose(a), &[a])
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        if shape.iter().product::<usize>() != self.value(a).len() {
            bail!(Dimension, "cannot reshape {:?} to {shape:?}", self.shape(a));
        }
        let d = self.value(a).to_vec();
        self.push(shape.to_vec(), d, Op::Reshape(a), &[a])
    }

    /// `x / max(‖x‖, eps)` along `axis`.
    pub fn l2_normalize(&mut self, a: Var, axis: usize, eps: T) -> Result<Var> {
        check_axis(self.shape(a), axis)?;
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let norm = (0..len).map(|l| x[idx(l)] * x[idx(l)]).sum::<T>().sqrt().max(eps);
                for l in 0..len {
                    out[idx(l)] = x[idx(l)] / norm;
                }
            }
        }
        self.push(self.shape(a).to_vec(), out, Op::L2Normalize { x: a, axis, eps }, &[a])
    }

    fn softmax_impl(&self, a: Var, axis: usize, log: bool) -> Vec<T> {
        let (outer, len, inner) = axis_split(self.shape(a), axis);
        let x = self.value(a);
        let mut out = vec![T::zero(); x.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |l: usize| (o * len + l) * inner + i;
                let m = (0..len).map(|l| x[idx(l)]).fold(T::neg_infinity(), T::max);
                let z: T = (0..len).map(|l| (x[idx(l)] - m).exp()).sum();
                let lz = z.ln();
                for l in 0..len {
                    out[idx(l)] = if log {
                        x[idx(l)] - m - lz
                    } else {
                        (x[idx(l)] - m).exp() / z
                    };
                }
            }
        }
        out
    }

    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(a), axis)?;
        let out = self.softmax_impl(a, axis, false);
        self.push(self.shape(a).to_vec(), out, Op::Softmax { x: a, axis }, &[a])
    }

    pub fn log_softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        check_axis(self.shape(a), axis)?;
        let out = self.softmax_impl(a, axis, true);
        self.push(self.shape(a).to_vec(), out, Op::LogSoftmax { x: a, axis }, &[a])
    }

    /// Cross-correlation of `x: [C,H,W]` with `w: [O,C,kh,kw]` plus `b: [O]`.
    /// Output size is `⌊(H + 2·pad − kh) / stride⌋ + 1`, so a stride-2 3×3 conv
    /// with pad 1 halves an even input.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv2d_padded(x, w, b, stride, pad, Padding::Zeros)
    }

    /// [`Graph::conv2d`] with a choice of border handling. Reflect padding
    /// needs `pad` smaller than both spatial sizes.
    pub fn conv2d_padded(
        &mut self,
        x: Var,
        w: Var,
        b: Var,
        stride: usize,
        pad: usize,
        padding: Padding,
    ) -> Result<Var> {
        let (sx, sw, sb) = (self.shape(x), self.shape(w), self.shape(b));
        if sx.len() != 3 || sw.len() != 4 || sb.len() != 1 {
            bail!(Dimension, "conv2d ranks: input {sx:?}, weight {sw:?}, bias {sb:?}");
        }
        let (c, h, wd) = (sx[0], sx[1], sx[2]);
        let (o, ci, kh, kw) = (sw[0], sw[1], sw[2], sw[3]);
        if ci != c || sb[0] != o {
            bail!(Dimension, "conv2d channels: input {sx:?}, weight {sw:?}, bias {sb:?}");
        }
        if kh % 2 == 0 || kw % 2 == 0 || stride == 0 {
            bail!(Dimension, "conv2d needs odd kernels and stride ≥ 1, got {kh}x{kw}/{stride}");
        }
        let (ph, pw) = (h + 2 * pad, wd + 2 * pad);
        if ph < kh || pw < kw || pad >= kh.max(kw) {
            bail!(
                Dimension,
                "conv2d: {h}x{wd} input too small for kernel {kh}x{kw} with pad {pad}"
            );
        }
        if padding == Padding::Reflect && (pad >= h || pad >= wd) {
            bail!(Dimension, "reflect padding {pad} needs an input larger than {h}x{wd}");
        }
        let geom = ConvGeom {
            c,
            h,
            w: wd,
            o,
            kh,
            kw,
            stride,
            pad,
            padding,
            ho: (ph - kh) / stride + 1,
            wo: (pw - kw) / stride + 1,
        };
        let out = kernels::conv2d_forward(&geom, self.value(x), self.value(w), self.value(b));
        self.push(vec![o, geom.ho, geom.wo], out, Op::Conv2d { x, w, b, geom }, &[x, w, b])
    }

    pub fn group_norm(&mut self, x: Var, groups: usize, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let sx = self.shape(x).to_vec();
        if sx.len() != 3 {
            bail!(Dimension, "group_norm expects [C,H,W], got {sx:?}");
        }
        let c = sx[0];
        if groups == 0 || c % groups != 0 {
            bail!(Config, "{c} channels not divisible into {groups} groups");
        }
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            bail!(Dimension, "group_norm affine parameters must have shape [{c}]");
        }
        if eps <= T::zero() {
            bail!(Config, "group_norm eps must be positive");
        }
        let (y, stats) = kernels::group_norm_forward(
            self.value(x),
            c,
            sx[1] * sx[2],
            groups,
            self.value(gamma),
            self.value(beta),
            eps,
        );
        self.push(sx, y, Op::GroupNorm { x, gamma, beta, groups, stats }, &[x, gamma, beta])
    }

    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 3 || s[1] == 0 || s[2] == 0 {
            bail!(Dimension, "upsample2x expects non-empty [C,H,W], got {s:?}");
        }
        let out = kernels::upsample2x_forward(self.value(x), s[0], s[1], s[2]);
        self.push(vec![s[0], 2 * s[1], 2 * s[2]], out, Op::Upsample2x(x), &[x])
    }

    /// Collects the channel vectors of `map: [C,H,W]` at `coords` into `[P,C]`.
    pub fn gather_pixels(&mut self, map: Var, coords: &[(usize, usize)]) -> Result<Var> {
        let s = self.shape(map).to_vec();
        if s.len() != 3 {
            bail!(Dimension, "gather_pixels expects [C,H,W], got {s:?}");
        }
        let (c, h, w) = (s[0], s[1], s[2]);
        if let Some(&(r, col)) = coords.iter().find(|&&(r, col)| r >= h || col >= w) {
            bail!(Usage, "pixel ({r},{col}) outside {h}x{w} map");
        }
        let x = self.value(map);
        let mut out = Vec::with_capacity(coords.len() * c);
        for &(r, col) in coords {
            out.extend((0..c).map(|ch| x[(ch * h + r) * w + col]));
        }
        let op = Op::GatherPixels {
            map,
            coords: coords.to_vec(),
        };
        self.push(vec![coords.len(), c], out, op, &[map])
    }

    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        if sa.len() != 2 || sb.len() != 2 || sa[0] != sb[0] {
            bail!(Dimension, "concat_cols of {sa:?} and {sb:?}");
        }
        let (xa, xb) = (self.value(a), self.value(b));
        let mut out = Vec::with_capacity(xa.len() + xb.len());
        for r in 0..sa[0] {
            out.extend_from_slice(&xa[r * sa[1]..(r + 1) * sa[1]]);
            out.extend_from_slice(&xb[r * sb[1]..(r + 1) * sb[1]]);
        }
        self.push(vec![sa[0], sa[1] + sb[1]], out, Op::ConcatCols(a, b), &[a, b])
    }

    /// `out[i] = x[i, index[i]]` for `x: [N,C]`.
    pub fn pick(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let s = self.shape(x).to_vec();
        if s.len() != 2 || s[0] != index.len() {
            bail!(Dimension, "pick: {s:?} with {} indices", index.len());
        }
        if index.iter().any(|&i| i >= s[1]) {
            bail!(Usage, "pick index out of range for {} columns", s[1]);
        }
        let xv = self.value(x);
        let out = index.iter().enumerate().map(|(r, &i)| xv[r * s[1] + i]).collect();
        let op = Op::Pick {
            x,
            index: index.to_vec(),
        };
        self.push(vec![s[0]], out, op, &[x])
    }

    /// `x: [N,C] + bias: [C]` broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (s, sb) = (self.shape(x).to_vec(), self.shape(bias).to_vec());
        if s.len() != 2 || sb != [s[1]] {
            bail!(Dimension, "add_row_bias of {s:?} and {sb:?}");
        }
        let b = self.value(bias).to_vec();
        let out = self
            .value(x)
            .chunks(s[1])
            .flat_map(|row| row.iter().zip(&b).map(|(&v, &bb)| v + bb))
            .collect();
        self.push(s, out, Op::AddRowBias { x, bias }, &[x, bias])
    }

    /// Mean Huber loss against a fixed target.
    pub fn huber_loss(&mut self, pred: Var, target: &[T], delta: T) -> Result<Var> {
        if self.value(pred).len() != target.len() || target.is_empty() {
            bail!(Dimension, "huber_loss: {} predictions, {} targets", self.value(pred).len(), target.len());
        }
        let half = T::of(0.5);
        let n = T::of(target.len() as f64);
        let s: T = self
            .value(pred)
            .iter()
            .zip(target)
            .map(|(&p, &t)| {
                let r = (p - t).abs();
                if r <= delta {
                    half * r * r
                } else {
                    delta * (r - half * delta)
                }
            })
            .sum();
        let op = Op::Huber {
            pred,
            target: target.to_vec(),
            delta,
        };
        self.push(vec![], vec![s / n], op, &[pred])
    }

    /// Mean absolute error against a fixed target.
    pub fn l1_loss(&mut self, pred: Var, target: &[T]) -> Result<Var> {
        if self.value(pred).len() != target.len() || target.is_empty() {
            bail!(Dimension, "l1_loss: {} predictions, {} targets", self.value(pred).len(), target.len());
        }
        let n = T::of(target.len() as f64);
        let s: T = self.value(pred).iter().zip(target).map(|(&p, &t)| (p - t).abs()).sum();
        let op = Op::L1 {
            pred,
            target: target.to_vec(),
        };
        self.push(vec![], vec![s / n], op, &[pred])
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Grads<T>> {
        let n = &self.nodes[loss.0];
        if n.data.len() != 1 {
            bail!(Usage, "backward needs a scalar loss, got shape {:?}", n.shape);
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            let Some(dy) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.backward_node(node, &dy, &mut grads)?;
            grads[i] = Some(dy);
        }
        for g in grads.iter().flatten() {
            if g.iter().any(|v| !v.is_finite()) {
                bail!(Numerical, "non-finite gradient");
            }
        }
        Ok(Grads { grads })
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn backward_node(&self, node: &Node<T>, dy: &[T], grads: &mut [Option<Vec<T>>]) -> Result<()> {
        let mut acc = |v: Var, g: Vec<T>| {
            if !self.wants(v) {
                return;
            }
            match &mut grads[v.0] {
                Some(buf) => {
                    for (b, x) in buf.iter_mut().zip(g) {
                        *b = *b + x;
                    }
                }
                slot => *slot = Some(g),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.to_vec());
            }
            Op::Sub(a, b) => {
                acc(*a, dy.to_vec());
                acc(*b, dy.iter().map(|&g| -g).collect());
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a), self.value(*b));
                acc(*a, dy.iter().zip(vb).map(|(&g, &y)| g * y).collect());
                acc(*b, dy.iter().zip(va).map(|(&g, &x)| g * x).collect());
            }
            Op::Scale(a, s) => acc(*a, dy.iter().map(|&g| g * *s).collect()),
            Op::Relu(a) => {
                let x = self.value(*a);
                acc(
                    *a,
                    dy.iter()
                        .zip(x)
                        .map(|(&g, &v)| if v > T::zero() { g } else { T::zero() })
                        .collect(),
                );
            }
            Op::Log(a) => {
                let x = self.value(*a);
                acc(*a, dy.iter().zip(x).map(|(&g, &v)| g / v).collect());
            }
            Op::Exp(a) => {
                acc(*a, dy.iter().zip(&node.data).map(|(&g, &y)| g * y).collect());
            }
            Op::Sum(a) => acc(*a, vec![dy[0]; self.value(*a).len()]),
            Op::Mean(a) => {
                let n = self.value(*a).len();
                acc(*a, vec![dy[0] / T::of(n as f64); n]);
            }
            Op::SumAxis { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let mut dx = vec![T::zero(); outer * len * inner];
                for o in 0..outer {
                    for l in 0..len {
                        for i in 0..inner {
                            dx[(o * len + l) * inner + i] = dy[o * inner + i];
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Matmul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                if self.wants(*a) {
                    let mut da = vec![T::zero(); m * k];
                    kernels::gemm(m, n, k, dy, false, self.value(*b), true, &mut da, false);
                    acc(*a, da);
                }
                if self.wants(*b) {
                    let mut db = vec![T::zero(); k * n];
                    kernels::gemm(k, m, n, self.value(*a), true, dy, false, &mut db, false);
                    acc(*b, db);
                }
            }
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[0], s[1]);
                let mut dx = vec![T::zero(); r * c];
                for i in 0..r {
                    for j in 0..c {
                        dx[i * c + j] = dy[j * r + i];
                    }
                }
                acc(*a, dx);
            }
            Op::Reshape(a) => acc(*a, dy.to_vec()),
            Op::L2Normalize { x, axis, eps } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let xv = self.value(*x);
                let y = &node.data;
                let mut dx = vec![T::zero(); xv.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let raw = (0..len).map(|l| xv[idx(l)] * xv[idx(l)]).sum::<T>().sqrt();
                        if raw > *eps {
                            let dot: T = (0..len).map(|l| y[idx(l)] * dy[idx(l)]).sum();
                            for l in 0..len {
                                dx[idx(l)] = (dy[idx(l)] - y[idx(l)] * dot) / raw;
                            }
                        } else {
                            for l in 0..len {
                                dx[idx(l)] = dy[idx(l)] / *eps;
                            }
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Softmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let y = &node.data;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let dot: T = (0..len).map(|l| y[idx(l)] * dy[idx(l)]).sum();
                        for l in 0..len {
                            dx[idx(l)] = y[idx(l)] * (dy[idx(l)] - dot);
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::LogSoftmax { x, axis } => {
                let (outer, len, inner) = axis_split(self.shape(*x), *axis);
                let y = &node.data;
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let idx = |l: usize| (o * len + l) * inner + i;
                        let total: T = (0..len).map(|l| dy[idx(l)]).sum();
                        for l in 0..len {
                            dx[idx(l)] = dy[idx(l)] - y[idx(l)].exp() * total;
                        }
                    }
                }
                acc(*x, dx);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (dx, dw, db) = kernels::conv2d_backward(
                    geom,
                    self.value(*x),
                    self.value(*w),
                    dy,
                    self.wants(*x),
                    self.wants(*w),
                );
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                if let Some(dw) = dw {
                    acc(*w, dw);
                }
                acc(*b, db);
            }
            Op::GroupNorm {
                x,
                gamma,
                beta,
                groups,
                stats,
            } => {
                let s = self.shape(*x);
                let (dx, dg, db) =
                    kernels::group_norm_backward(dy, s[0], s[1] * s[2], *groups, self.value(*gamma), stats);
                acc(*x, dx);
                acc(*gamma, dg);
                acc(*beta, db);
            }
            Op::Upsample2x(x) => {
                let s = self.shape(*x);
                acc(*x, kernels::upsample2x_backward(dy, s[0], s[1], s[2]));
            }
            Op::GatherPixels { map, coords } => {
                let s = self.shape(*map);
                let (c, h, w) = (s[0], s[1], s[2]);
                let mut dx = vec![T::zero(); c * h * w];
                for (p, &(r, col)) in coords.iter().enumerate() {
                    for ch in 0..c {
                        let d = &mut dx[(ch * h + r) * w + col];
                        *d = *d + dy[p * c + ch];
                    }
                }
                acc(*map, dx);
            }
            Op::ConcatCols(a, b) => {
                let (ca, cb) = (self.shape(*a)[1], self.shape(*b)[1]);
                let rows = self.shape(*a)[0];
                let mut da = Vec::with_capacity(rows * ca);
                let mut db = Vec::with_capacity(rows * cb);
                for r in 0..rows {
                    let row = &dy[r * (ca + cb)..(r + 1) * (ca + cb)];
                    da.extend_from_slice(&row[..ca]);
                    db.extend_from_slice(&row[ca..]);
                }
                acc(*a, da);
                acc(*b, db);
            }
            Op::Pick { x, index } => {
                let cols = self.shape(*x)[1];
                let mut dx = vec![T::zero(); self.value(*x).len()];
                for (r, &i) in index.iter().enumerate() {
                    dx[r * cols + i] = dy[r];
                }
                acc(*x, dx);
            }
            Op::AddRowBias { x, bias } => {
                let cols = self.shape(*x)[1];
                let mut db = vec![T::zero(); cols];
                for row in dy.chunks(cols) {
                    for (d, &g) in db.iter_mut().zip(row) {
                        *d = *d + g;
                    }
                }
                acc(*x, dy.to_vec());
                acc(*bias, db);
            }
            Op::Huber { pred, target, delta } => {
                let n = T::of(target.len() as f64);
                let g = dy[0] / n;
                let dx = self
                    .value(*pred)
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| (p - t).max(-*delta).min(*delta) * g)
                    .collect();
                acc(*pred, dx);
            }
            Op::L1 { pred, target } => {
                let n = T::of(target.len() as f64);
                let g = dy[0] / n;
                let dx = self
                    .value(*pred)
                    .iter()
                    .zip(target)
                    .map(|(&p, &t)| {
                        let r = p - t;
                        if r > T::zero() {
                            g
                        } else if r < T::zero() {
                            -g
                        } else {
                            T::zero()
                        }
                    })
                    .collect();
                acc(*pred, dx);
            }
        }
        Ok(())
    }
}

fn op_name<T>(op: &Op<T>) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Mul(..) => "mul",
        Op::Scale(..) => "scalar_mul",
        Op::Relu(_) => "relu",
        Op::Log(_) => "log",
        Op::Exp(_) => "exp",
        Op::Sum(_) => "sum",
        Op::Mean(_) => "mean",
        Op::SumAxis { .. } => "sum_axis",
        Op::Matmul(..) => "matmul",
        Op::Transpose(_) => "transpose",
        Op::Reshape(_) => "reshape",
        Op::L2Normalize { .. } => "l2_normalize",
        Op::Softmax { .. } => "softmax",
        Op::LogSoftmax { .. } => "log_softmax",
        Op::Conv2d { .. } => "conv2d",
        Op::GroupNorm { .. } => "group_norm",
        Op::Upsample2x(_) => "upsample2x",
        Op::GatherPixels { .. } => "gather_pixels",
        Op::ConcatCols(..) => "concat_cols",
        Op::Pick { .. } => "pick",
        Op::AddRowBias { .. } => "add_row_bias",
        Op::Huber { .. } => "huber_loss",
        Op::L1 { .. } => "l1_loss",
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        Tensor::from_fn(shape, |_| rng.random_range(-1.0..1.0))
    }

    fn conv_oracle(x: &Tensor, w: &Tensor, b: &Tensor, stride: usize, pad: usize) -> Vec<f32> {
        let (c, h, wd) = (x.shape()[0], x.shape()[1], x.shape()[2]);
        let (o, kh, kw) = (w.shape()[0], w.shape()[2], w.shape()[3]);
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (wd + 2 * pad - kw) / stride + 1;
        let mut out = vec![0.0; o * ho * wo];
        for oc in 0..o {
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b.data()[oc];
                    for ic in 0..c {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += x.at(&[ic, iy as usize, ix as usize]) * w.at(&[oc, ic, ky, kx]);
                                }
                            }
                        }
                    }
                    out[(oc * ho + oy) * wo + ox] = acc;
                }
            }
        }
        out
    }

    #[test]
    fn conv_identity_kernel() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = rand_tensor(&mut rng, &[2, 5, 3]);
        let mut w = Tensor::zeros(&[2, 2, 1, 1]);
        w.data_mut()[0] = 1.0;
        w.data_mut()[3] = 1.0;
        let mut g: Graph = Graph::new();
        let (xv, wv, bv) = (g.constant(x.clone()), g.constant(w), g.constant(Tensor::zeros(&[2])));
        let y = g.conv2d(xv, wv, bv, 1, 0).unwrap();
        assert_eq!(g.value(y), x.data());
    }

    #[test]
    fn conv_all_ones_is_nine() {
        let mut g: Graph = Graph::new();
        let x = g.constant(Tensor::full(&[1, 3, 3], 1.0));
        let w = g.constant(Tensor::full(&[1, 1, 3, 3], 1.0));
        let b = g.constant(Tensor::zeros(&[1]));
        let y = g.conv2d(x, w, b, 1, 0).unwrap();
        assert_eq!(g.shape(y), &[1, 1, 1]);
        assert_eq!(g.value(y), &[9.0]);
    }

    #[test]
    fn conv_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for (stride, pad) in [(1, 0), (1, 1), (2, 1), (2, 0)] {
            let x = rand_tensor(&mut rng, &[2, 4, 4]);
            let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let b = rand_tensor(&mut rng, &[3]);
            let expected = conv_oracle(&x, &w, &b, stride, pad);
            let mut g: Graph = Graph::new();
            let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
            let y = g.conv2d(xv, wv, bv, stride, pad).unwrap();
            for (a, e) in g.value(y).iter().zip(&expected) {
                assert!((a - e).abs() < 1e-5, "stride {stride} pad {pad}: {a} vs {e}");
            }
        }
    }

    fn mirror_pad(x: &Tensor, pad: usize) -> Tensor {
        let (h, w) = (x.shape()[1], x.shape()[2]);
        let fold = |i: usize, n: usize| {
            let i = i as isize - pad as isize;
            let last = n as isize - 1;
            i.abs().min(2 * last - i) as usize
        };
        let (hp, wp) = (h + 2 * pad, w + 2 * pad);
        Tensor::from_fn(&[x.shape()[0], hp, wp], |i| {
            x.at(&[i / (hp * wp), fold(i / wp % hp, h), fold(i % wp, w)])
        })
    }

    #[test]
    fn reflect_conv_matches_mirrored_input() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for (stride, side) in [(1, 4), (2, 5), (1, 2)] {
            let x = rand_tensor(&mut rng, &[2, side, side + 1]);
            let w = rand_tensor(&mut rng, &[3, 2, 3, 3]);
            let b = rand_tensor(&mut rng, &[3]);
            let expected = conv_oracle(&mirror_pad(&x, 1), &w, &b, stride, 0);
            let mut g: Graph = Graph::new();
            let (xv, wv, bv) = (g.constant(x), g.constant(w), g.constant(b));
            let y = g.conv2d_padded(xv, wv, bv, stride, 1, Padding::Reflect).unwrap();
            assert_eq!(g.value(y).len(), expected.len());
            for (a, e) in g.value(y).iter().zip(&expected) {
                assert!((a - e).abs() < 1e-5, "stride {stride}: {a} vs {e}");
            }
        }
        let mut g: Graph = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 4]));
        let w = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(g.conv2d_padded(x, w, b, 1, 1, Padding::Reflect).is_err());
    }

    #[test]
    fn conv_shape_errors() {
        let mut g: Graph = Graph::new();
        let x = g.constant(Tensor::zeros(&[2, 4, 4]));
        let w = g.constant(Tensor::zeros(&[1, 3, 3, 3]));
        let b = g.constant(Tensor::zeros(&[1]));
        assert!(matches!(g.conv2d(x, w, b, 1, 1), Err(crate::Error::Dimension(_))));
        let w2 = g.constant(Tensor::zeros(&[1, 2, 2, 2]));
        assert!(g.conv2d(x, w2, b, 1, 0).is_err());
        let w3 = g.constant(Tensor::zeros(&[1, 2, 3, 3]));
        assert!(g.conv2d(x, w3, b, 1, 3).is_err());
        let y = g.conv2d(x, w3, b, 2, 1).unwrap();
        assert_eq!(g.shape(y), &[1, 2, 2]);
    }

    #[test]
    fn group_norm_trivial_cases() {
        let mut g: Graph = Graph::new();
        let x = g.constant(Tensor::full(&[4, 2, 2], 3.5));
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        let y = g.group_norm(x, 2, one, zero, 1e-5).unwrap();
        assert!(g.value(y).iter().all(|&v| v == 0.0));

        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let xr = g.constant(rand_tensor(&mut rng, &[4, 2, 2]));
        let beta = g.constant(Tensor::new(&[4], vec![0.5, -1.0, 2.0, 3.0]).unwrap());
        let y = g.group_norm(xr, 2, zero, beta, 1e-5).unwrap();
        for c in 0..4 {
            for i in 0..4 {
                assert_eq!(g.value(y)[c * 4 + i], g.value(beta)[c]);
            }
        }
        assert!(matches!(g.group_norm(xr, 3, one, zero, 1e-5), Err(crate::Error::Config(_))));
    }

    #[test]
    fn group_norm_statistics() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g: Graph = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[4, 2, 2]));
        let one = g.constant(Tensor::full(&[4], 1.0));
        let zero = g.constant(Tensor::zeros(&[4]));
        let y = g.group_norm(x, 2, one, zero, 1e-5).unwrap();
        for grp in g.value(y).chunks(8) {
            let mean = grp.iter().map(|&v| v as f64).sum::<f64>() / 8.0;
            let var = grp.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / 8.0;
            assert!(mean.abs() < 1e-5);
            assert!((var - 1.0).abs() < 1e-3, "variance {var}");
        }
    }

    #[test]
    fn upsample_trivial_and_hand_weights() {
        let mut g: Graph = Graph::new();
        let c = g.constant(Tensor::full(&[2, 3, 2], 0.7));
        let y = g.upsample2x(c).unwrap();
        assert!(g.value(y).iter().all(|&v| (v - 0.7).abs() < 1e-7));
        let one = g.constant(Tensor::full(&[1, 1, 1], 4.0));
        let y = g.upsample2x(one).unwrap();
        assert_eq!(g.value(y), &[4.0; 4]);

        let x = [0.3f32, -1.2, 2.5, 0.9];
        let xv = g.constant(Tensor::new(&[1, 2, 2], x.to_vec()).unwrap());
        let y = g.upsample2x(xv).unwrap();
        let w = [[1.0, 0.0], [0.75, 0.25], [0.25, 0.75], [0.0, 1.0]];
        for oy in 0..4 {
            for ox in 0..4 {
                let mut e = 0.0;
                for iy in 0..2 {
                    for ix in 0..2 {
                        e += w[oy][iy] * w[ox][ix] * x[iy * 2 + ix];
                    }
                }
                assert!((g.value(y)[oy * 4 + ox] - e).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn softmax_uniform_and_l2_basis() {
        let mut g: Graph = Graph::new();
        let x = g.constant(Tensor::full(&[5], 2.3));
        let y = g.softmax(x, 0).unwrap();
        assert!(g.value(y).iter().all(|&v| (v - 0.2).abs() < 1e-7));
        let e = g.constant(Tensor::new(&[3], vec![0.0, 1.0, 0.0]).unwrap());
        let y = g.l2_normalize(e, 0, 1e-12).unwrap();
        assert_eq!(g.value(y), &[0.0, 1.0, 0.0]);
        let z = g.constant(Tensor::zeros(&[3]));
        let y = g.l2_normalize(z, 0, 1e-12).unwrap();
        assert!(g.value(y).iter().all(|v| v.is_finite()));
        assert!(matches!(g.softmax(x, 1), Err(crate::Error::Dimension(_))));
        assert!(g.l2_normalize(x, 2, 1e-12).is_err());
    }

    #[test]
    fn matmul_matches_loop_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let a = rand_tensor(&mut rng, &[2, 3]);
        let b = rand_tensor(&mut rng, &[3, 2]);
        let mut g: Graph = Graph::new();
        let (av, bv) = (g.constant(a.clone()), g.constant(b.clone()));
        let y = g.matmul(av, bv).unwrap();
        for i in 0..2 {
            for j in 0..2 {
                let e: f32 = (0..3).map(|k| a.at(&[i, k]) * b.at(&[k, j])).sum();
                assert!((g.value(y)[i * 2 + j] - e).abs() < 1e-6);
            }
        }
        assert!(g.matmul(av, av).is_err());
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = rand_tensor(&mut rng, &[3, 4]);
        let mut g: Graph = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let s = g.sum(xv).unwrap();
        assert!(g.backward(s).unwrap().get(xv).unwrap().iter().all(|&v| v == 1.0));

        let mut g: Graph = Graph::new();
        let xv = g.leaf(x.clone(), true);
        let sq = g.mul(xv, xv).unwrap();
        let s = g.sum(sq).unwrap();
        let grads = g.backward(s).unwrap();
        for (d, v) in grads.get(xv).unwrap().iter().zip(x.data()) {
            assert_eq!(*d, 2.0 * v);
        }
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut g: Graph = Graph::new();
        let x = g.leaf(Tensor::zeros(&[2]), true);
        assert!(matches!(g.backward(x), Err(crate::Error::Usage(_))));
    }

    #[test]
    fn constants_get_no_gradient() {
        let mut g: Graph = Graph::new();
        let x = g.leaf(Tensor::full(&[2], 1.0), true);
        let c = g.constant(Tensor::full(&[2], 3.0));
        let y = g.mul(x, c).unwrap();
        let s = g.sum(y).unwrap();
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[3.0, 3.0]);
        assert!(grads.get(c).is_none());
    }

    #[test]
    fn log_of_non_positive_is_numerical_error() {
        let mut g: Graph = Graph::new();
        let x = g.constant(Tensor::new(&[2], vec![1.0, 0.0]).unwrap());
        assert!(matches!(g.log(x), Err(crate::Error::Numerical(_))));
    }

    #[test]
    fn forward_is_deterministic() {
        let run = || {
            let mut rng = ChaCha8Rng::seed_from_u64(6);
            let mut g: Graph = Graph::new();
            let x = g.constant(rand_tensor(&mut rng, &[3, 8, 8]));
            let w = g.constant(rand_tensor(&mut rng, &[4, 3, 3, 3]));
            let b = g.constant(rand_tensor(&mut rng, &[4]));
            let y = g.conv2d(x, w, b, 2, 1).unwrap();
            let y = g.upsample2x(y).unwrap();
            g.value(y).iter().map(|v| v.to_bits()).collect::<Vec<_>>()
        };
        assert_eq!(run(), run());
    }
}
