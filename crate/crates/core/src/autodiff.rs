//! Reverse-mode automatic differentiation on a flat tape.
//!
//! Every primitive appends one node holding its forward value and the
//! handles of its inputs. [`Tape::backward`] walks the nodes in reverse and
//! accumulates adjoints additively, so a tensor used twice receives the sum
//! of both contributions.

use crate::error::{dim_err, Error, Result};
use crate::kernels::{self, ConvGeometry, ConvShape};
use crate::tensor::{numel_of, Scalar, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Target id marking a pixel excluded from a loss.
pub const IGNORE: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UpsampleMode {
    Bilinear,
    Nearest,
}

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddChannels(Var, Var),
    MulChannels(Var, Var),
    Scale(Var, T),
    AddScalar(Var),
    Relu(Var),
    Matmul(Var, Var),
    Softmax { x: Var, axis: usize },
    Reshape(Var),
    Permute { x: Var, axes: Vec<usize> },
    Concat { inputs: Vec<Var>, axis: usize },
    GatherChannels { x: Var, index: Vec<usize> },
    Sum(Var),
    MeanAlong { x: Var, axis: usize },
    Conv2d { x: Var, w: Var, b: Option<Var>, geom: ConvGeometry },
    AdaptiveAvgPool { x: Var, bins: usize },
    Upsample { x: Var, mode: UpsampleMode },
    PixelCrossEntropy { logits: Var, targets: Vec<usize>, weights: Vec<T> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Adjoints produced by one backward pass.
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, v: Var) -> Option<&Tensor<T>> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor<T>> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }
}

#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
}

fn split_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn permute_data<T: Scalar>(x: &Tensor<T>, axes: &[usize]) -> Tensor<T> {
    let shape = x.shape();
    let rank = shape.len();
    let mut strides = vec![1usize; rank];
    for d in (0..rank.saturating_sub(1)).rev() {
        strides[d] = strides[d + 1] * shape[d + 1];
    }
    let out_shape: Vec<usize> = axes.iter().map(|&a| shape[a]).collect();
    let src_strides: Vec<usize> = axes.iter().map(|&a| strides[a]).collect();
    let n = x.numel();
    let mut out = Vec::with_capacity(n);
    let mut idx = vec![0usize; rank];
    let data = x.data();
    for _ in 0..n {
        let off: usize = idx.iter().zip(&src_strides).map(|(i, s)| i * s).sum();
        out.push(data[off]);
        for d in (0..rank).rev() {
            idx[d] += 1;
            if idx[d] < out_shape[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Tensor::new(&out_shape, out).expect("permute preserves element count")
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op: Op::Leaf, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// A trainable leaf.
    pub fn param(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, true)
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

    fn push(&mut self, value: Tensor<T>, op: Op<T>, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(dim_err(format!(
                "{what}: shapes {:?} and {:?} differ",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn zip_map(&mut self, a: Var, b: Var, what: &str, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        self.same_shape(a, b, what)?;
        let (x, y) = (self.value(a), self.value(b));
        let data = x.data().iter().zip(y.data()).map(|(&p, &q)| f(p, q)).collect();
        Tensor::new(x.shape(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map(a, b, "add", |p, q| p + q)?;
        Ok(self.push(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map(a, b, "sub", |p, q| p - q)?;
        Ok(self.push(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.zip_map(a, b, "mul", |p, q| p * q)?;
        Ok(self.push(out, Op::Mul(a, b), &[a, b]))
    }

    /// Resolves a per-channel operand of shape `[C]` or `[B, C]` against
    /// `x: [B, C, ...]`; returns (batch, channels, spatial size, batched).
    fn channel_broadcast(&self, x: Var, v: Var) -> Result<(usize, usize, usize, bool)> {
        let xs = self.shape(x);
        let vs = self.shape(v);
        if xs.len() < 2 {
            return Err(dim_err(format!("per-channel op needs rank >= 2, got {xs:?}")));
        }
        let spatial = xs[2..].iter().product();
        match vs {
            [c] if *c == xs[1] => Ok((xs[0], xs[1], spatial, false)),
            [b, c] if *b == xs[0] && *c == xs[1] => Ok((xs[0], xs[1], spatial, true)),
            _ => Err(dim_err(format!("cannot broadcast {vs:?} over channels of {xs:?}"))),
        }
    }

    fn channel_map(&mut self, x: Var, v: Var, f: impl Fn(T, T) -> T) -> Result<Tensor<T>> {
        let (b, c, s, batched) = self.channel_broadcast(x, v)?;
        let xv = self.value(x);
        let vv = self.value(v).data();
        let mut out = xv.data().to_vec();
        for bi in 0..b {
            for ci in 0..c {
                let k = vv[if batched { bi * c + ci } else { ci }];
                for o in &mut out[(bi * c + ci) * s..(bi * c + ci + 1) * s] {
                    *o = f(*o, k);
                }
            }
        }
        Tensor::new(xv.shape(), out)
    }

    /// `x + v` with `v` broadcast over every position of each channel.
    pub fn add_channels(&mut self, x: Var, v: Var) -> Result<Var> {
        let out = self.channel_map(x, v, |p, q| p + q)?;
        Ok(self.push(out, Op::AddChannels(x, v), &[x, v]))
    }

    /// `x ⊙ s` with `s` broadcast over every position of each channel.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Result<Var> {
        let out = self.channel_map(x, s, |p, q| p * q)?;
        Ok(self.push(out, Op::MulChannels(x, s), &[x, s]))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v * s);
        self.push(out, Op::Scale(x, s), &[x])
    }

    pub fn add_scalar(&mut self, x: Var, s: T) -> Var {
        let out = self.value(x).map(|v| v + s);
        self.push(out, Op::AddScalar(x), &[x])
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        self.push(out, Op::Relu(x), &[x])
    }

    /// Matrix product of rank-2 operands, or batched product of rank-3
    /// operands with equal batch extent.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let (batch, m, k, k2, n) = match (&sa[..], &sb[..]) {
            ([m, k], [k2, n]) => (1, *m, *k, *k2, *n),
            ([ba, m, k], [bb, k2, n]) if ba == bb => (*ba, *m, *k, *k2, *n),
            _ => return Err(dim_err(format!("matmul: incompatible shapes {sa:?} and {sb:?}"))),
        };
        if k != k2 {
            return Err(dim_err(format!("matmul: inner extents differ in {sa:?} and {sb:?}")));
        }
        let mut out = vec![T::zero(); batch * m * n];
        let (av, bv) = (self.value(a).data(), self.value(b).data());
        for i in 0..batch {
            kernels::mm_nn(
                &av[i * m * k..(i + 1) * m * k],
                &bv[i * k * n..(i + 1) * k * n],
                &mut out[i * m * n..(i + 1) * m * n],
                m,
                k,
                n,
            );
        }
        let shape = if sa.len() == 2 { vec![m, n] } else { vec![batch, m, n] };
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Matmul(a, b), &[a, b]))
    }

    /// Numerically stable softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err(format!("softmax axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |a: usize| (o * len + a) * inner + i;
                let mut max = T::neg_infinity();
                for a in 0..len {
                    max = max.max(xv[at(a)]);
                }
                let mut total = T::zero();
                for a in 0..len {
                    let e = (xv[at(a)] - max).exp();
                    out[at(a)] = e;
                    total = total + e;
                }
                for a in 0..len {
                    out[at(a)] = out[at(a)] / total;
                }
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Softmax { x, axis }, &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).clone().reshaped(shape)?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    /// Reorders axes so output axis `d` is input axis `axes[d]`.
    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let rank = self.shape(x).len();
        let mut seen = vec![false; rank];
        if axes.len() != rank || axes.iter().any(|&a| a >= rank || std::mem::replace(&mut seen[a], true)) {
            return Err(dim_err(format!(
                "permute: {axes:?} is not a permutation of {rank} axes"
            )));
        }
        let out = permute_data(self.value(x), axes);
        Ok(self.push(out, Op::Permute { x, axes: axes.to_vec() }, &[x]))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.shape(x).len();
        if rank < 2 {
            return Err(dim_err("transpose needs rank >= 2"));
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*inputs.first().ok_or_else(|| dim_err("concat of nothing"))?)
            .to_vec();
        if axis >= first.len() {
            return Err(dim_err(format!("concat axis {axis} out of range for {first:?}")));
        }
        let mut total = 0;
        for &v in inputs {
            let s = self.shape(v);
            let compatible = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (a, b))| d == axis || a == b);
            if !compatible {
                return Err(dim_err(format!("concat: {s:?} incompatible with {first:?} on axis {axis}")));
            }
            total += s[axis];
        }
        let mut shape = first.clone();
        shape[axis] = total;
        let (outer, _, inner) = split_axis(&first, axis);
        let mut out = Vec::with_capacity(numel_of(&shape));
        for o in 0..outer {
            for &v in inputs {
                let len = self.shape(v)[axis] * inner;
                out.extend_from_slice(&self.value(v).data()[o * len..(o + 1) * len]);
            }
        }
        let out = Tensor::new(&shape, out)?;
        Ok(self.push(out, Op::Concat { inputs: inputs.to_vec(), axis }, inputs))
    }

    /// Concatenates NCHW maps along the channel axis.
    pub fn concat_channels(&mut self, inputs: &[Var]) -> Result<Var> {
        self.concat(inputs, 1)
    }

    /// Output channel `j` is input channel `index[j]`.
    pub fn gather_channels(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if shape.len() < 2 || index.iter().any(|&i| i >= shape[1]) {
            return Err(dim_err(format!("gather_channels: bad index for shape {shape:?}")));
        }
        let inner: usize = shape[2..].iter().product();
        let mut out_shape = shape.clone();
        out_shape[1] = index.len();
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(numel_of(&out_shape));
        for b in 0..shape[0] {
            for &src in index {
                let start = (b * shape[1] + src) * inner;
                out.extend_from_slice(&xv[start..start + inner]);
            }
        }
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::GatherChannels { x, index: index.to_vec() }, &[x]))
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn sum(&mut self, x: Var) -> Var {
        let total: T = self.value(x).data().iter().copied().sum();
        self.push(Tensor::scalar(total), Op::Sum(x), &[x])
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).numel();
        let s = self.sum(x);
        self.scale(s, T::one() / T::from_f64(n as f64))
    }

    /// Mean over `axis`, which is removed from the shape.
    pub fn mean_along(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        if axis >= shape.len() {
            return Err(dim_err(format!("mean_along axis {axis} out of range for {shape:?}")));
        }
        let (outer, len, inner) = split_axis(&shape, axis);
        let xv = self.value(x).data();
        let denom = T::from_f64(len as f64);
        let mut out = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for i in 0..inner {
                let mut acc = T::zero();
                for a in 0..len {
                    acc = acc + xv[(o * len + a) * inner + i];
                }
                out[o * inner + i] = acc / denom;
            }
        }
        let mut out_shape = shape;
        out_shape.remove(axis);
        let out = Tensor::new(&out_shape, out)?;
        Ok(self.push(out, Op::MeanAlong { x, axis }, &[x]))
    }

    fn conv_shape(&self, x: Var, w: Var, geom: ConvGeometry) -> Result<(usize, usize, ConvShape)> {
        let (batch, c_in, h, wd) = self.value(x).dims4()?;
        let (c_out, wc_in, kh, kw) = self.value(w).dims4()?;
        if wc_in != c_in {
            return Err(dim_err(format!(
                "conv2d: input has {c_in} channels but weight {:?} expects {wc_in}",
                self.shape(w)
            )));
        }
        let (ho, wo) = geom.output_extent(h, wd, kh, kw).ok_or_else(|| {
            dim_err(format!("conv2d: kernel {kh}x{kw} does not fit input {h}x{wd} with {geom:?}"))
        })?;
        Ok((batch, c_out, ConvShape { c_in, h, w: wd, kh, kw, ho, wo, geom }))
    }

    /// 2-D cross-correlation with optional per-output-channel bias.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, geom: ConvGeometry) -> Result<Var> {
        let (batch, c_out, cs) = self.conv_shape(x, w, geom)?;
        if let Some(b) = b {
            if self.shape(b) != [c_out] {
                return Err(dim_err(format!("conv2d: bias {:?} for {c_out} outputs", self.shape(b))));
            }
        }
        let out = kernels::conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            batch,
            c_out,
            &cs,
        );
        let out = Tensor::new(&[batch, c_out, cs.ho, cs.wo], out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom }, &inputs))
    }

    /// Adaptive average pooling of an NCHW map to `bins × bins`.
    pub fn adaptive_avg_pool(&mut self, x: Var, bins: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if bins == 0 || bins > h || bins > w {
            return Err(Error::Config(format!("pooling bin {bins} does not fit a {h}x{w} map")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * bins * bins);
        for plane in xv.chunks(h * w) {
            for by in 0..bins {
                let (y0, y1) = kernels::adaptive_range(by, bins, h);
                for bx in 0..bins {
                    let (x0, x1) = kernels::adaptive_range(bx, bins, w);
                    let mut acc = T::zero();
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            acc = acc + plane[yy * w + xx];
                        }
                    }
                    out.push(acc / T::from_f64(((y1 - y0) * (x1 - x0)) as f64));
                }
            }
        }
        let out = Tensor::new(&[n, c, bins, bins], out)?;
        Ok(self.push(out, Op::AdaptiveAvgPool { x, bins }, &[x]))
    }

    /// Resamples an NCHW map to `(h, w)`.
    pub fn upsample(&mut self, x: Var, size: (usize, usize), mode: UpsampleMode) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let (oh, ow) = size;
        if oh == 0 || ow == 0 {
            return Err(dim_err("upsample target must be at least 1x1"));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        match mode {
            UpsampleMode::Bilinear => {
                let ty = kernels::bilinear_taps(h, oh);
                let tx = kernels::bilinear_taps(w, ow);
                for plane in xv.chunks(h * w) {
                    for &(y0, y1, fy) in &ty {
                        let fy = T::from_f64(fy);
                        for &(x0, x1, fx) in &tx {
                            let fx = T::from_f64(fx);
                            let top = plane[y0 * w + x0] * (T::one() - fx) + plane[y0 * w + x1] * fx;
                            let bot = plane[y1 * w + x0] * (T::one() - fx) + plane[y1 * w + x1] * fx;
                            out.push(top * (T::one() - fy) + bot * fy);
                        }
                    }
                }
            }
            UpsampleMode::Nearest => {
                for plane in xv.chunks(h * w) {
                    for oy in 0..oh {
                        let sy = kernels::nearest_index(oy, h, oh);
                        for ox in 0..ow {
                            out.push(plane[sy * w + kernels::nearest_index(ox, w, ow)]);
                        }
                    }
                }
            }
        }
        let out = Tensor::new(&[n, c, oh, ow], out)?;
        Ok(self.push(out, Op::Upsample { x, mode }, &[x]))
    }

    /// Weighted sum of per-pixel cross entropies, `Σ_p w_p · −log softmax(z_p)[t_p]`.
    ///
    /// `targets` and `weights` are indexed by flattened `(batch, y, x)`.
    /// Pixels with target [`IGNORE`] contribute nothing.
    pub fn pixel_cross_entropy(&mut self, logits: Var, targets: &[usize], weights: &[T]) -> Result<Var> {
        let (n, k, h, w) = self.value(logits).dims4()?;
        if targets.len() != n * h * w || weights.len() != n * h * w {
            return Err(dim_err(format!(
                "pixel_cross_entropy: {} targets / {} weights for logits {:?}",
                targets.len(),
                weights.len(),
                self.shape(logits)
            )));
        }
        if let Some(&bad) = targets.iter().find(|&&t| t != IGNORE && t >= k) {
            return Err(Error::Data(format!("target class {bad} out of range for {k} classes")));
        }
        let per_pixel = pixel_ce_values(self.value(logits), targets)?;
        let mut total = T::zero();
        for (l, &wt) in per_pixel.iter().zip(weights) {
            if wt != T::zero() {
                total = total + wt * *l;
            }
        }
        let op = Op::PixelCrossEntropy { logits, targets: targets.to_vec(), weights: weights.to_vec() };
        Ok(self.push(Tensor::scalar(total), op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients<T>> {
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            self.propagate(node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        for (id, node) in self.nodes.iter().enumerate() {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(Tensor::zeros(node.value.shape()));
            }
        }
        Ok(Gradients { grads })
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], v: Var, g: Tensor<T>) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        debug_assert_eq!(g.shape(), self.shape(v));
        match &mut grads[v.0] {
            Some(existing) => existing.accumulate(&g),
            slot @ None => *slot = Some(g),
        }
    }

    fn propagate(&self, node: &Node<T>, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) -> Result<()> {
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                if self.requires_grad(*a) {
                    let d = gd.iter().zip(bv.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *a, Tensor::new(av.shape(), d)?);
                }
                if self.requires_grad(*b) {
                    let d = gd.iter().zip(av.data()).map(|(&x, &y)| x * y).collect();
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), d)?);
                }
            }
            Op::AddChannels(x, v) | Op::MulChannels(x, v) => {
                let is_mul = matches!(node.op, Op::MulChannels(..));
                let (b, c, s, batched) = self.channel_broadcast(*x, *v)?;
                let xv = self.value(*x).data();
                let vv = self.value(*v).data();
                if self.requires_grad(*x) {
                    let dx = if is_mul {
                        let mut d = gd.to_vec();
                        for bi in 0..b {
                            for ci in 0..c {
                                let k = vv[if batched { bi * c + ci } else { ci }];
                                for o in &mut d[(bi * c + ci) * s..(bi * c + ci + 1) * s] {
                                    *o = *o * k;
                                }
                            }
                        }
                        d
                    } else {
                        gd.to_vec()
                    };
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if self.requires_grad(*v) {
                    let mut dv = vec![T::zero(); vv.len()];
                    for bi in 0..b {
                        for ci in 0..c {
                            let range = (bi * c + ci) * s..(bi * c + ci + 1) * s;
                            let mut acc = T::zero();
                            for (i, &gv) in range.clone().zip(&gd[range]) {
                                acc = acc + if is_mul { gv * xv[i] } else { gv };
                            }
                            let slot = &mut dv[if batched { bi * c + ci } else { ci }];
                            *slot = *slot + acc;
                        }
                    }
                    self.accumulate(grads, *v, Tensor::new(self.shape(*v), dv)?);
                }
            }
            Op::Scale(x, s) => self.accumulate(grads, *x, g.map(|v| v * *s)),
            Op::AddScalar(x) => self.accumulate(grads, *x, g.clone()),
            Op::Relu(x) => {
                let xv = self.value(*x).data();
                let d = gd
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &v)| if v > T::zero() { gv } else { T::zero() })
                    .collect();
                self.accumulate(grads, *x, Tensor::new(g.shape(), d)?);
            }
            Op::Matmul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                let sa = av.shape();
                let (batch, m, k) = match sa {
                    [m, k] => (1, *m, *k),
                    [bt, m, k] => (*bt, *m, *k),
                    _ => unreachable!("checked in forward"),
                };
                let n = *bv.shape().last().expect("rank >= 2");
                if self.requires_grad(*a) {
                    let mut da = vec![T::zero(); av.numel()];
                    for i in 0..batch {
                        kernels::mm_nt(
                            &gd[i * m * n..(i + 1) * m * n],
                            &bv.data()[i * k * n..(i + 1) * k * n],
                            &mut da[i * m * k..(i + 1) * m * k],
                            m,
                            n,
                            k,
                        );
                    }
                    self.accumulate(grads, *a, Tensor::new(sa, da)?);
                }
                if self.requires_grad(*b) {
                    let mut db = vec![T::zero(); bv.numel()];
                    for i in 0..batch {
                        kernels::mm_tn(
                            &av.data()[i * m * k..(i + 1) * m * k],
                            &gd[i * m * n..(i + 1) * m * n],
                            &mut db[i * k * n..(i + 1) * k * n],
                            k,
                            m,
                            n,
                        );
                    }
                    self.accumulate(grads, *b, Tensor::new(bv.shape(), db)?);
                }
            }
            Op::Softmax { x, axis } => {
                let y = node.value.data();
                let (outer, len, inner) = split_axis(node.value.shape(), *axis);
                let mut dx = vec![T::zero(); y.len()];
                for o in 0..outer {
                    for i in 0..inner {
                        let at = |a: usize| (o * len + a) * inner + i;
                        let mut dot = T::zero();
                        for a in 0..len {
                            dot = dot + gd[at(a)] * y[at(a)];
                        }
                        for a in 0..len {
                            dx[at(a)] = y[at(a)] * (gd[at(a)] - dot);
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(node.value.shape(), dx)?);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, g.clone().reshaped(self.shape(*x))?),
            Op::Permute { x, axes } => {
                let mut inverse = vec![0; axes.len()];
                for (d, &a) in axes.iter().enumerate() {
                    inverse[a] = d;
                }
                self.accumulate(grads, *x, permute_data(g, &inverse));
            }
            Op::Concat { inputs, axis } => {
                let (outer, _, inner) = split_axis(node.value.shape(), *axis);
                let total = node.value.shape()[*axis] * inner;
                let mut start = 0;
                for &v in inputs {
                    let len = self.shape(v)[*axis] * inner;
                    if self.requires_grad(v) {
                        let mut d = Vec::with_capacity(outer * len);
                        for o in 0..outer {
                            d.extend_from_slice(&gd[o * total + start..o * total + start + len]);
                        }
                        self.accumulate(grads, v, Tensor::new(self.shape(v), d)?);
                    }
                    start += len;
                }
            }
            Op::GatherChannels { x, index } => {
                let xs = self.shape(*x);
                let inner: usize = xs[2..].iter().product();
                let mut dx = vec![T::zero(); numel_of(xs)];
                for b in 0..xs[0] {
                    for (j, &src) in index.iter().enumerate() {
                        let from = (b * index.len() + j) * inner;
                        let to = (b * xs[1] + src) * inner;
                        for t in 0..inner {
                            dx[to + t] = dx[to + t] + gd[from + t];
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::Sum(x) => self.accumulate(grads, *x, Tensor::full(self.shape(*x), gd[0])),
            Op::MeanAlong { x, axis } => {
                let xs = self.shape(*x);
                let (outer, len, inner) = split_axis(xs, *axis);
                let denom = T::from_f64(len as f64);
                let mut dx = vec![T::zero(); numel_of(xs)];
                for o in 0..outer {
                    for a in 0..len {
                        for i in 0..inner {
                            dx[(o * len + a) * inner + i] = gd[o * inner + i] / denom;
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(xs, dx)?);
            }
            Op::Conv2d { x, w, b, geom } => {
                let (batch, c_out, cs) = self.conv_shape(*x, *w, *geom)?;
                let want = (
                    self.requires_grad(*x),
                    self.requires_grad(*w),
                    b.is_some_and(|b| self.requires_grad(b)),
                );
                let cg = kernels::conv2d_backward(
                    self.value(*x).data(),
                    self.value(*w).data(),
                    gd,
                    batch,
                    c_out,
                    &cs,
                    want,
                );
                if let Some(dx) = cg.dx {
                    self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
                }
                if let Some(dw) = cg.dw {
                    self.accumulate(grads, *w, Tensor::new(self.shape(*w), dw)?);
                }
                if let (Some(b), Some(db)) = (b, cg.db) {
                    self.accumulate(grads, *b, Tensor::new(&[c_out], db)?);
                }
            }
            Op::AdaptiveAvgPool { x, bins } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                let cells = bins * bins;
                for (plane, gplane) in dx.chunks_mut(h * w).zip(gd.chunks(cells)) {
                    for by in 0..*bins {
                        let (y0, y1) = kernels::adaptive_range(by, *bins, h);
                        for bx in 0..*bins {
                            let (x0, x1) = kernels::adaptive_range(bx, *bins, w);
                            let share = gplane[by * bins + bx]
                                / T::from_f64(((y1 - y0) * (x1 - x0)) as f64);
                            for yy in y0..y1 {
                                for xx in x0..x1 {
                                    plane[yy * w + xx] = plane[yy * w + xx] + share;
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::Upsample { x, mode } => {
                let (_, _, h, w) = self.value(*x).dims4()?;
                let (_, _, oh, ow) = node.value.dims4()?;
                let mut dx = vec![T::zero(); self.value(*x).numel()];
                match mode {
                    UpsampleMode::Bilinear => {
                        let ty = kernels::bilinear_taps(h, oh);
                        let tx = kernels::bilinear_taps(w, ow);
                        for (plane, gplane) in dx.chunks_mut(h * w).zip(gd.chunks(oh * ow)) {
                            for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                                let fy = T::from_f64(fy);
                                for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                                    let fx = T::from_f64(fx);
                                    let gv = gplane[oy * ow + ox];
                                    let top = gv * (T::one() - fy);
                                    let bot = gv * fy;
                                    plane[y0 * w + x0] = plane[y0 * w + x0] + top * (T::one() - fx);
                                    plane[y0 * w + x1] = plane[y0 * w + x1] + top * fx;
                                    plane[y1 * w + x0] = plane[y1 * w + x0] + bot * (T::one() - fx);
                                    plane[y1 * w + x1] = plane[y1 * w + x1] + bot * fx;
                                }
                            }
                        }
                    }
                    UpsampleMode::Nearest => {
                        for (plane, gplane) in dx.chunks_mut(h * w).zip(gd.chunks(oh * ow)) {
                            for oy in 0..oh {
                                let sy = kernels::nearest_index(oy, h, oh);
                                for ox in 0..ow {
                                    let sx = kernels::nearest_index(ox, w, ow);
                                    plane[sy * w + sx] = plane[sy * w + sx] + gplane[oy * ow + ox];
                                }
                            }
                        }
                    }
                }
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), dx)?);
            }
            Op::PixelCrossEntropy { logits, targets, weights } => {
                let lv = self.value(*logits);
                let (n, k, h, w) = lv.dims4()?;
                let hw = h * w;
                let z = lv.data();
                let mut dz = vec![T::zero(); z.len()];
                for b in 0..n {
                    for p in 0..hw {
                        let t = targets[b * hw + p];
                        let wt = weights[b * hw + p];
                        if t == IGNORE || wt == T::zero() {
                            continue;
                        }
                        let at = |c: usize| (b * k + c) * hw + p;
                        let max = (0..k).map(|c| z[at(c)]).fold(T::neg_infinity(), T::max);
                        let total: T = (0..k).map(|c| (z[at(c)] - max).exp()).sum();
                        let scale = gd[0] * wt;
                        for c in 0..k {
                            let prob = (z[at(c)] - max).exp() / total;
                            let ind = if c == t { T::one() } else { T::zero() };
                            dz[at(c)] = scale * (prob - ind);
                        }
                    }
                }
                self.accumulate(grads, *logits, Tensor::new(lv.shape(), dz)?);
            }
        }
        Ok(())
    }
}

/// Per-pixel `−log softmax(z)[t]` in `(batch, y, x)` order; ignored pixels yield 0.
pub fn pixel_ce_values<T: Scalar>(logits: &Tensor<T>, targets: &[usize]) -> Result<Vec<T>> {
    let (n, k, h, w) = logits.dims4()?;
    let hw = h * w;
    if targets.len() != n * hw {
        return Err(dim_err(format!("{} targets for logits {:?}", targets.len(), logits.shape())));
    }
    let z = logits.data();
    let mut out = vec![T::zero(); n * hw];
    for b in 0..n {
        for p in 0..hw {
            let t = targets[b * hw + p];
            if t == IGNORE {
                continue;
            }
            if t >= k {
                return Err(Error::Data(format!("target class {t} out of range for {k} classes")));
            }
            let at = |c: usize| (b * k + c) * hw + p;
            let max = (0..k).map(|c| z[at(c)]).fold(T::neg_infinity(), T::max);
            let total: T = (0..k).map(|c| (z[at(c)] - max).exp()).sum();
            out[b * hw + p] = total.ln() + max - z[at(t)];
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::from_f64(shape, data).unwrap()
    }

    #[test]
    fn matmul_identity_and_selection() {
        let mut tape = Tape::<f64>::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let sel = tape.constant(t(&[2, 1], &[0.0, 1.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);
        let q = tape.matmul(m, sel).unwrap();
        assert_eq!(tape.value(q).data(), &[2.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_shapes() {
        let mut tape = Tape::<f32>::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_closed_forms() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax(x, 0).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);
        let x = tape.constant(t(&[2], &[0.0, 3f64.ln()]));
        let y = tape.softmax(x, 0).unwrap();
        assert!((tape.value(y).data()[0] - 0.25).abs() < 1e-12);
        assert!((tape.value(y).data()[1] - 0.75).abs() < 1e-12);
    }

    #[test]
    fn softmax_survives_huge_logits() {
        let mut tape = Tape::<f32>::new();
        let x = tape.constant(Tensor::new(&[3], vec![1000.0, 999.0, -1000.0]).unwrap());
        let y = tape.softmax(x, 0).unwrap();
        assert!(tape.value(y).is_finite());
    }

    #[test]
    fn transpose_and_its_gradient() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let y = tape.transpose(x).unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 3.0, 2.0, 4.0]);
        let s = tape.sum(y);
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0; 4]);
    }

    #[test]
    fn reshape_round_trip_is_exact() {
        let mut tape = Tape::<f32>::new();
        let src = Tensor::new(&[1, 2, 2], vec![0.1, -2.5, 3.25, 7.0]).unwrap();
        let x = tape.constant(src.clone());
        let flat = tape.reshape(x, &[1, 4]).unwrap();
        let back = tape.reshape(flat, &[1, 2, 2]).unwrap();
        assert_eq!(tape.value(back), &src);
        assert!(tape.reshape(x, &[3]).is_err());
    }

    #[test]
    fn elementwise_basics() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let z = tape.constant(t(&[2], &[0.0, 0.0]));
        let s = tape.add(x, z).unwrap();
        assert_eq!(tape.value(s), tape.value(x));
        let r = tape.relu(x);
        assert_eq!(tape.value(r).data(), &[0.0, 2.0]);
        let bad = tape.constant(t(&[3], &[0.0; 3]));
        assert!(tape.add(x, bad).is_err());
    }

    #[test]
    fn concat_channels_orders_blocks() {
        let mut tape = Tape::<f64>::new();
        let a = tape.constant(Tensor::from_fn(&[1, 2, 2, 2], |i| i as f64));
        let b = tape.constant(Tensor::from_fn(&[1, 3, 2, 2], |i| 100.0 + i as f64));
        let c = tape.concat_channels(&[a, b]).unwrap();
        let v = tape.value(c);
        assert_eq!(v.shape(), &[1, 5, 2, 2]);
        assert_eq!(&v.data()[..8], tape.value(a).data());
        assert_eq!(&v.data()[8..], tape.value(b).data());
    }

    #[test]
    fn backward_of_sum_and_square() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[3], &[1.0, -2.0, 0.5]));
        let s = tape.sum(x);
        assert_eq!(tape.backward(s).unwrap().get(x).unwrap().data(), &[1.0; 3]);
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        assert_eq!(tape.backward(l).unwrap().get(x).unwrap().data(), &[2.0, -4.0, 1.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        assert!(matches!(tape.backward(x), Err(Error::Contract(_))));
    }

    #[test]
    fn unused_param_gets_zero_grad() {
        let mut tape = Tape::<f64>::new();
        let x = tape.param(t(&[2], &[1.0, 2.0]));
        let unused = tape.param(t(&[3], &[1.0, 2.0, 3.0]));
        let l = tape.sum(x);
        let g = tape.backward(l).unwrap();
        assert_eq!(g.get(unused).unwrap().data(), &[0.0; 3]);
    }

    #[test]
    fn mean_along_divides_by_extent() {
        let mut tape = Tape::<f64>::new();
        let x = tape.constant(Tensor::from_fn(&[2, 3], |i| i as f64));
        let m = tape.mean_along(x, 1).unwrap();
        assert_eq!(tape.value(m).data(), &[1.0, 4.0]);
        let m0 = tape.mean_along(x, 0).unwrap();
        assert_eq!(tape.value(m0).data(), &[1.5, 2.5, 3.5]);
    }
}
