//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! Every operation evaluates eagerly and records enough state to propagate
//! gradients later. Node ids are assigned in creation order, which is a valid
//! topological order, so [`Graph::backward`] is a single reverse sweep.

use std::collections::HashMap;

use crate::conv::{col2im, im2col, ConvGeometry, ConvParams};
use crate::param::{ParamId, ParamSet};
use crate::real::{matmul, Layout, Real};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct NodeId(usize);

#[derive(Debug)]
enum Op<T> {
    Leaf,
    Conv { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry },
    ConvTranspose { x: NodeId, w: NodeId, b: Option<NodeId>, geom: ConvGeometry },
    InstanceNorm { x: NodeId, inv_std: Vec<T> },
    Relu { x: NodeId },
    LeakyRelu { x: NodeId, slope: T },
    Tanh { x: NodeId },
    Add { a: NodeId, b: NodeId },
    Sub { a: NodeId, b: NodeId },
    Scale { x: NodeId, c: T },
    AddPerSample { x: NodeId, s: NodeId },
    BroadcastPerSample { s: NodeId },
    ConcatChannels { a: NodeId, b: NodeId, split: usize },
    Linear { x: NodeId, w: NodeId, b: Option<NodeId> },
    Reshape { x: NodeId },
    Mask { x: NodeId, mask: Vec<T> },
    MeanAbsDiff { a: NodeId, b: NodeId },
    MeanSqToConst { x: NodeId, target: T },
    BceWithLogits { x: NodeId, target: T },
    WeightedSum { terms: Vec<(NodeId, T)> },
}

#[derive(Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    tracked: bool,
}

/// A recorded computation.
#[derive(Debug)]
pub struct Graph<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<(u64, usize), NodeId>,
}

impl<T: Real> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

fn sample_len(shape: &[usize]) -> usize {
    shape[1..].iter().product()
}

fn spatial5(shape: &[usize], what: &str) -> (usize, usize, [usize; 3]) {
    assert_eq!(shape.len(), 5, "{what} expects (N, C, D, H, W), got {shape:?}");
    (shape[0], shape[1], [shape[2], shape[3], shape[4]])
}

impl<T: Real> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, id: NodeId) -> &Tensor<T> {
        &self.nodes[id.0].value
    }

    pub fn shape(&self, id: NodeId) -> &[usize] {
        self.nodes[id.0].value.shape()
    }

    fn tracked(&self, id: NodeId) -> bool {
        self.nodes[id.0].tracked
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, tracked: bool) -> NodeId {
        self.nodes.push(Node { value, op, tracked });
        NodeId(self.nodes.len() - 1)
    }

    /// Constant input; no gradient flows into it.
    pub fn constant(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, false)
    }

    /// Input whose gradient is wanted (see [`Gradients::wrt`]).
    pub fn variable(&mut self, value: Tensor<T>) -> NodeId {
        self.push(value, Op::Leaf, true)
    }

    /// Value of `id` as a new constant, cutting the gradient path.
    pub fn detach(&mut self, id: NodeId) -> NodeId {
        let v = self.value(id).clone();
        self.constant(v)
    }

    /// Leaf for a parameter. Requesting the same parameter twice in one graph
    /// returns the same node so gradients from every use accumulate.
    pub fn param(&mut self, set: &ParamSet<T>, id: ParamId) -> NodeId {
        let key = (set.id(), id.0);
        if let Some(&node) = self.params.get(&key) {
            return node;
        }
        let node = self.push(set.get(id).clone(), Op::Leaf, true);
        self.params.insert(key, node);
        node
    }

    /// 3D convolution. `x`: (N, C, D, H, W); `w`: (OC, C, kd, kh, kw);
    /// `b`: (OC).
    pub fn conv3d(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>, params: ConvParams) -> NodeId {
        let (n, c, input) = spatial5(self.shape(x), "conv3d");
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 5, "conv3d weight must be 5-D");
        assert_eq!(ws[1], c, "conv3d channel mismatch: input {c}, weight {}", ws[1]);
        assert_eq!(&ws[2..], &params.kernel, "conv3d kernel mismatch");
        let oc = ws[0];
        let output = params
            .output_extent(input)
            .unwrap_or_else(|| panic!("kernel {:?} does not fit input {input:?}", params.kernel));
        let geom = ConvGeometry { params, channels: c, input, output };
        let (rows, ncols) = (geom.rows(), geom.cols());

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let mut out = vec![T::zero(); n * oc * ncols];
        let mut cols = vec![T::zero(); rows * ncols];
        for s in 0..n {
            im2col(&geom, &xv[s * geom.input_len()..(s + 1) * geom.input_len()], &mut cols);
            let dst = &mut out[s * oc * ncols..(s + 1) * oc * ncols];
            matmul(oc, rows, ncols, T::one(), wv, Layout::N, &cols, Layout::N, T::zero(), dst);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), oc, "conv3d bias length");
            for (plane, &bias) in out.chunks_mut(ncols).zip(bv.iter().cycle()) {
                plane.iter_mut().for_each(|v| *v += bias);
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        let value = Tensor::new(&[n, oc, output[0], output[1], output[2]], out);
        self.push(value, Op::Conv { x, w, b, geom }, tracked)
    }

    /// Transposed 3D convolution (the adjoint of [`Graph::conv3d`] in its
    /// input). `x`: (N, IC, D, H, W); `w`: (IC, OC, kd, kh, kw); `b`: (OC).
    pub fn conv_transpose3d(
        &mut self,
        x: NodeId,
        w: NodeId,
        b: Option<NodeId>,
        params: ConvParams,
        output_padding: [usize; 3],
    ) -> NodeId {
        let (n, ic, input) = spatial5(self.shape(x), "conv_transpose3d");
        let ws = self.shape(w).to_vec();
        assert_eq!(ws.len(), 5, "conv_transpose3d weight must be 5-D");
        assert_eq!(ws[0], ic, "conv_transpose3d channel mismatch");
        assert_eq!(&ws[2..], &params.kernel, "conv_transpose3d kernel mismatch");
        let oc = ws[1];
        let output = params
            .transposed_extent(input, output_padding)
            .expect("invalid transposed convolution geometry");
        // Geometry of the forward convolution this operation transposes.
        let geom = ConvGeometry { params, channels: oc, input: output, output: input };
        assert_eq!(params.output_extent(output), Some(input));
        let (rows, ncols) = (geom.rows(), geom.cols());

        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let out_len = geom.input_len();
        let mut out = vec![T::zero(); n * out_len];
        let mut cols = vec![T::zero(); rows * ncols];
        for s in 0..n {
            let xs = &xv[s * ic * ncols..(s + 1) * ic * ncols];
            matmul(rows, ic, ncols, T::one(), wv, Layout::T, xs, Layout::N, T::zero(), &mut cols);
            col2im(&geom, &cols, &mut out[s * out_len..(s + 1) * out_len]);
        }
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), oc, "conv_transpose3d bias length");
            let plane = output.iter().product::<usize>();
            for (chunk, &bias) in out.chunks_mut(plane).zip(bv.iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        let value = Tensor::new(&[n, oc, output[0], output[1], output[2]], out);
        self.push(value, Op::ConvTranspose { x, w, b, geom }, tracked)
    }

    /// Per-sample, per-channel normalization over the spatial axes (no
    /// learned affine).
    pub fn instance_norm(&mut self, x: NodeId, eps: f64) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert!(shape.len() >= 3, "instance_norm expects (N, C, spatial...)");
        let spatial: usize = shape[2..].iter().product();
        let xv = self.value(x).data();
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(shape[0] * shape[1]);
        let count = T::of(spatial as f64);
        for (src, dst) in xv.chunks(spatial).zip(out.chunks_mut(spatial)) {
            let mean = src.iter().copied().sum::<T>() / count;
            let var = src.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / count;
            let inv = T::one() / (var + T::of(eps)).sqrt();
            for (o, &v) in dst.iter_mut().zip(src) {
                *o = (v - mean) * inv;
            }
            inv_std.push(inv);
        }
        let tracked = self.tracked(x);
        self.push(Tensor::new(&shape, out), Op::InstanceNorm { x, inv_std }, tracked)
    }

    pub fn relu(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| if v > T::zero() { v } else { T::zero() });
        let tracked = self.tracked(x);
        self.push(v, Op::Relu { x }, tracked)
    }

    pub fn leaky_relu(&mut self, x: NodeId, slope: f64) -> NodeId {
        let slope = T::of(slope);
        let v = self.value(x).map(|v| if v > T::zero() { v } else { v * slope });
        let tracked = self.tracked(x);
        self.push(v, Op::LeakyRelu { x, slope }, tracked)
    }

    pub fn tanh(&mut self, x: NodeId) -> NodeId {
        let v = self.value(x).map(|v| v.tanh());
        let tracked = self.tracked(x);
        self.push(v, Op::Tanh { x }, tracked)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let mut v = self.value(a).clone();
        v.add_assign(self.value(b));
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Add { a, b }, tracked)
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "sub shape mismatch");
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x - y)
            .collect();
        let v = Tensor::new(self.shape(a), data);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(v, Op::Sub { a, b }, tracked)
    }

    pub fn scale(&mut self, x: NodeId, c: f64) -> NodeId {
        let c = T::of(c);
        let v = self.value(x).map(|v| v * c);
        let tracked = self.tracked(x);
        self.push(v, Op::Scale { x, c }, tracked)
    }

    /// Adds `s[n]` to every element of sample `n`. `s`: (N).
    pub fn add_per_sample(&mut self, x: NodeId, s: NodeId) -> NodeId {
        let shape = self.shape(x).to_vec();
        assert_eq!(self.shape(s), &[shape[0]], "per-sample scalar shape");
        let per = sample_len(&shape);
        let sv = self.value(s).data().to_vec();
        let mut v = self.value(x).clone();
        for (chunk, &add) in v.data_mut().chunks_mut(per).zip(&sv) {
            chunk.iter_mut().for_each(|e| *e += add);
        }
        let tracked = self.tracked(x) || self.tracked(s);
        self.push(v, Op::AddPerSample { x, s }, tracked)
    }

    /// Expands `s` of shape (N) to (N, 1, spatial...).
    pub fn broadcast_per_sample(&mut self, s: NodeId, spatial: &[usize]) -> NodeId {
        let sv = self.value(s).data().to_vec();
        assert_eq!(self.shape(s).len(), 1, "per-sample scalar must be 1-D");
        let per: usize = spatial.iter().product();
        let mut shape = vec![sv.len(), 1];
        shape.extend_from_slice(spatial);
        let data = sv.iter().flat_map(|&v| std::iter::repeat_n(v, per)).collect();
        let tracked = self.tracked(s);
        self.push(Tensor::new(&shape, data), Op::BroadcastPerSample { s }, tracked)
    }

    /// Concatenates along axis 1.
    pub fn concat_channels(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(
            sa.len() >= 2 && sa.len() == sb.len() && sa[0] == sb[0] && sa[2..] == sb[2..],
            "concat_channels shape mismatch {sa:?} vs {sb:?}"
        );
        let (pa, pb) = (sample_len(&sa), sample_len(&sb));
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for n in 0..sa[0] {
            data.extend_from_slice(&va[n * pa..(n + 1) * pa]);
            data.extend_from_slice(&vb[n * pb..(n + 1) * pb]);
        }
        let mut shape = sa.clone();
        shape[1] += sb[1];
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::new(&shape, data), Op::ConcatChannels { a, b, split: pa }, tracked)
    }

    /// `x`: (N, K); `w`: (M, K); `b`: (M). Returns `x wᵀ + b`.
    pub fn linear(&mut self, x: NodeId, w: NodeId, b: Option<NodeId>) -> NodeId {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        assert!(xs.len() == 2 && ws.len() == 2 && xs[1] == ws[1], "linear shape mismatch {xs:?} x {ws:?}");
        let (n, k, m) = (xs[0], xs[1], ws[0]);
        let mut out = vec![T::zero(); n * m];
        matmul(n, k, m, T::one(), self.value(x).data(), Layout::N, self.value(w).data(), Layout::T, T::zero(), &mut out);
        if let Some(b) = b {
            let bv = self.value(b).data();
            assert_eq!(bv.len(), m, "linear bias length");
            for row in out.chunks_mut(m) {
                row.iter_mut().zip(bv).for_each(|(o, &bb)| *o += bb);
            }
        }
        let tracked = self.tracked(x) || self.tracked(w) || b.is_some_and(|b| self.tracked(b));
        self.push(Tensor::new(&[n, m], out), Op::Linear { x, w, b }, tracked)
    }

    pub fn reshape(&mut self, x: NodeId, shape: &[usize]) -> NodeId {
        let v = self.value(x).clone().reshape(shape);
        let tracked = self.tracked(x);
        self.push(v, Op::Reshape { x }, tracked)
    }

    /// Element-wise multiplication by a fixed mask (used for dropout).
    pub fn mask(&mut self, x: NodeId, mask: Vec<T>) -> NodeId {
        assert_eq!(mask.len(), self.value(x).len(), "mask length");
        let data = self.value(x).data().iter().zip(&mask).map(|(&v, &m)| v * m).collect();
        let v = Tensor::new(self.shape(x), data);
        let tracked = self.tracked(x);
        self.push(v, Op::Mask { x, mask }, tracked)
    }

    /// Scalar `mean(|a - b|)`.
    pub fn mean_abs_diff(&mut self, a: NodeId, b: NodeId) -> NodeId {
        assert_eq!(self.shape(a), self.shape(b), "mean_abs_diff shape mismatch");
        let (va, vb) = (self.value(a).data(), self.value(b).data());
        let n = T::of(va.len() as f64);
        let v = va.iter().zip(vb).map(|(&x, &y)| (x - y).abs()).sum::<T>() / n;
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::scalar(v), Op::MeanAbsDiff { a, b }, tracked)
    }

    /// Scalar `mean((x - target)^2)`.
    pub fn mean_sq_to_const(&mut self, x: NodeId, target: f64) -> NodeId {
        let t = T::of(target);
        let xv = self.value(x).data();
        let v = xv.iter().map(|&v| (v - t) * (v - t)).sum::<T>() / T::of(xv.len() as f64);
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(v), Op::MeanSqToConst { x, target: t }, tracked)
    }

    /// Scalar binary cross-entropy of logits `x` against a constant label,
    /// averaged over elements, evaluated through a stable softplus.
    pub fn bce_with_logits(&mut self, x: NodeId, target: f64) -> NodeId {
        let t = T::of(target);
        let xv = self.value(x).data();
        let v = xv.iter().map(|&v| softplus(v) - t * v).sum::<T>() / T::of(xv.len() as f64);
        let tracked = self.tracked(x);
        self.push(Tensor::scalar(v), Op::BceWithLogits { x, target: t }, tracked)
    }

    /// Scalar `sum_i c_i * term_i` over scalar nodes.
    pub fn weighted_sum(&mut self, terms: &[(NodeId, f64)]) -> NodeId {
        let terms: Vec<(NodeId, T)> = terms.iter().map(|&(id, c)| (id, T::of(c))).collect();
        let mut v = T::zero();
        for &(id, c) in &terms {
            v += c * self.value(id).item();
        }
        let tracked = terms.iter().any(|&(id, _)| self.tracked(id));
        self.push(Tensor::scalar(v), Op::WeightedSum { terms }, tracked)
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: NodeId) -> Gradients<T> {
        assert_eq!(self.value(loss).len(), 1, "backward from non-scalar");
        let mut grads: Vec<Option<Tensor<T>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Tensor::full(self.shape(loss), T::one()));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.propagate(NodeId(i), &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients {
            grads,
            params: self.params.clone(),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<T>>], id: NodeId, delta: Tensor<T>) {
        if !self.tracked(id) {
            return;
        }
        match &mut grads[id.0] {
            Some(g) => g.add_assign(&delta),
            slot => *slot = Some(delta),
        }
    }

    fn zeros_like(&self, id: NodeId) -> Tensor<T> {
        Tensor::zeros(self.shape(id))
    }

    fn propagate(&self, id: NodeId, g: &Tensor<T>, grads: &mut [Option<Tensor<T>>]) {
        let out = &self.nodes[id.0].value;
        let gd = g.data();
        match &self.nodes[id.0].op {
            Op::Leaf => {}
            Op::Conv { x, w, b, geom } => {
                let (x, w) = (*x, *w);
                let n = self.shape(x)[0];
                let oc = self.shape(w)[0];
                let (rows, ncols) = (geom.rows(), geom.cols());
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut cols = vec![T::zero(); rows * ncols];
                let mut dw = self.tracked(w).then(|| self.zeros_like(w));
                let mut dx = self.tracked(x).then(|| self.zeros_like(x));
                for s in 0..n {
                    let gs = &gd[s * oc * ncols..(s + 1) * oc * ncols];
                    if let Some(dw) = dw.as_mut() {
                        im2col(geom, &xv[s * geom.input_len()..(s + 1) * geom.input_len()], &mut cols);
                        matmul(oc, ncols, rows, T::one(), gs, Layout::N, &cols, Layout::T, T::one(), dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        matmul(rows, oc, ncols, T::one(), wv, Layout::T, gs, Layout::N, T::zero(), &mut cols);
                        let len = geom.input_len();
                        col2im(geom, &cols, &mut dx.data_mut()[s * len..(s + 1) * len]);
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(b) = *b {
                    self.accumulate(grads, b, channel_sums(gd, oc, ncols));
                }
            }
            Op::ConvTranspose { x, w, b, geom } => {
                let (x, w) = (*x, *w);
                let n = self.shape(x)[0];
                let ic = self.shape(x)[1];
                let oc = geom.channels;
                let (rows, ncols) = (geom.rows(), geom.cols());
                let out_len = geom.input_len();
                let xv = self.value(x).data();
                let wv = self.value(w).data();
                let mut cols = vec![T::zero(); rows * ncols];
                let mut dw = self.tracked(w).then(|| self.zeros_like(w));
                let mut dx = self.tracked(x).then(|| self.zeros_like(x));
                for s in 0..n {
                    im2col(geom, &gd[s * out_len..(s + 1) * out_len], &mut cols);
                    let xs = &xv[s * ic * ncols..(s + 1) * ic * ncols];
                    if let Some(dw) = dw.as_mut() {
                        matmul(ic, ncols, rows, T::one(), xs, Layout::N, &cols, Layout::T, T::one(), dw.data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        let dst = &mut dx.data_mut()[s * ic * ncols..(s + 1) * ic * ncols];
                        matmul(ic, rows, ncols, T::one(), wv, Layout::N, &cols, Layout::N, T::zero(), dst);
                    }
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, dw);
                }
                if let Some(dx) = dx {
                    self.accumulate(grads, x, dx);
                }
                if let Some(b) = *b {
                    let plane = geom.input.iter().product();
                    self.accumulate(grads, b, channel_sums(gd, oc, plane));
                }
            }
            Op::InstanceNorm { x, inv_std } => {
                let shape = out.shape();
                let spatial: usize = shape[2..].iter().product();
                let count = T::of(spatial as f64);
                let mut dx = vec![T::zero(); gd.len()];
                for (((gy, y), dst), &inv) in gd
                    .chunks(spatial)
                    .zip(out.data().chunks(spatial))
                    .zip(dx.chunks_mut(spatial))
                    .zip(inv_std)
                {
                    let mean_g = gy.iter().copied().sum::<T>() / count;
                    let mean_gy = gy.iter().zip(y).map(|(&a, &b)| a * b).sum::<T>() / count;
                    for ((d, &gv), &yv) in dst.iter_mut().zip(gy).zip(y) {
                        *d = inv * (gv - mean_g - yv * mean_gy);
                    }
                }
                self.accumulate(grads, *x, Tensor::new(shape, dx));
            }
            Op::Relu { x } => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { T::zero() }).collect();
                self.accumulate(grads, *x, Tensor::new(out.shape(), d));
            }
            Op::LeakyRelu { x, slope } => {
                let xv = self.value(*x).data();
                let d = gd.iter().zip(xv).map(|(&g, &v)| if v > T::zero() { g } else { g * *slope }).collect();
                self.accumulate(grads, *x, Tensor::new(out.shape(), d));
            }
            Op::Tanh { x } => {
                let d = gd.iter().zip(out.data()).map(|(&g, &y)| g * (T::one() - y * y)).collect();
                self.accumulate(grads, *x, Tensor::new(out.shape(), d));
            }
            Op::Add { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.clone());
            }
            Op::Sub { a, b } => {
                self.accumulate(grads, *a, g.clone());
                self.accumulate(grads, *b, g.map(|v| -v));
            }
            Op::Scale { x, c } => {
                let c = *c;
                self.accumulate(grads, *x, g.map(|v| v * c));
            }
            Op::AddPerSample { x, s } => {
                self.accumulate(grads, *x, g.clone());
                let per = sample_len(out.shape());
                let ds = gd.chunks(per).map(|c| c.iter().copied().sum()).collect();
                self.accumulate(grads, *s, Tensor::new(self.shape(*s), ds));
            }
            Op::BroadcastPerSample { s } => {
                let per = sample_len(out.shape());
                let ds = gd.chunks(per).map(|c| c.iter().copied().sum()).collect();
                self.accumulate(grads, *s, Tensor::new(self.shape(*s), ds));
            }
            Op::ConcatChannels { a, b, split } => {
                let per = sample_len(out.shape());
                let (mut da, mut db) = (Vec::new(), Vec::new());
                for chunk in gd.chunks(per) {
                    da.extend_from_slice(&chunk[..*split]);
                    db.extend_from_slice(&chunk[*split..]);
                }
                self.accumulate(grads, *a, Tensor::new(self.shape(*a), da));
                self.accumulate(grads, *b, Tensor::new(self.shape(*b), db));
            }
            Op::Linear { x, w, b } => {
                let (n, k) = (self.shape(*x)[0], self.shape(*x)[1]);
                let m = self.shape(*w)[0];
                if self.tracked(*x) {
                    let mut dx = vec![T::zero(); n * k];
                    matmul(n, m, k, T::one(), gd, Layout::N, self.value(*w).data(), Layout::N, T::zero(), &mut dx);
                    self.accumulate(grads, *x, Tensor::new(&[n, k], dx));
                }
                if self.tracked(*w) {
                    let mut dw = vec![T::zero(); m * k];
                    matmul(m, n, k, T::one(), gd, Layout::T, self.value(*x).data(), Layout::N, T::zero(), &mut dw);
                    self.accumulate(grads, *w, Tensor::new(&[m, k], dw));
                }
                if let Some(b) = *b {
                    let mut db = vec![T::zero(); m];
                    for row in gd.chunks(m) {
                        db.iter_mut().zip(row).for_each(|(d, &v)| *d += v);
                    }
                    self.accumulate(grads, b, Tensor::new(&[m], db));
                }
            }
            Op::Reshape { x } => {
                let d = g.clone().reshape(self.shape(*x));
                self.accumulate(grads, *x, d);
            }
            Op::Mask { x, mask } => {
                let d = gd.iter().zip(mask).map(|(&g, &m)| g * m).collect();
                self.accumulate(grads, *x, Tensor::new(out.shape(), d));
            }
            Op::MeanAbsDiff { a, b } => {
                let g0 = g.item();
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                let scale = g0 / T::of(va.len() as f64);
                let da: Vec<T> = va.iter().zip(vb).map(|(&x, &y)| sign(x - y) * scale).collect();
                let db = da.iter().map(|&v| -v).collect();
                self.accumulate(grads, *a, Tensor::new(self.shape(*a), da));
                self.accumulate(grads, *b, Tensor::new(self.shape(*b), db));
            }
            Op::MeanSqToConst { x, target } => {
                let xv = self.value(*x).data();
                let scale = g.item() * T::of(2.0) / T::of(xv.len() as f64);
                let d = xv.iter().map(|&v| (v - *target) * scale).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), d));
            }
            Op::BceWithLogits { x, target } => {
                let xv = self.value(*x).data();
                let scale = g.item() / T::of(xv.len() as f64);
                let d = xv.iter().map(|&v| (sigmoid(v) - *target) * scale).collect();
                self.accumulate(grads, *x, Tensor::new(self.shape(*x), d));
            }
            Op::WeightedSum { terms } => {
                let g0 = g.item();
                for &(t, c) in terms {
                    let shape = self.shape(t).to_vec();
                    self.accumulate(grads, t, Tensor::full(&shape, g0 * c));
                }
            }
        }
    }
}

fn channel_sums<T: Real>(data: &[T], channels: usize, plane: usize) -> Tensor<T> {
    let mut sums = vec![T::zero(); channels];
    for (i, chunk) in data.chunks(plane).enumerate() {
        sums[i % channels] += chunk.iter().copied().sum::<T>();
    }
    Tensor::new(&[channels], sums)
}

fn sign<T: Real>(v: T) -> T {
    if v > T::zero() {
        T::one()
    } else if v < T::zero() {
        -T::one()
    } else {
        T::zero()
    }
}

/// `ln(1 + e^x)` without overflow.
pub fn softplus<T: Real>(x: T) -> T {
    x.max(T::zero()) + (-x.abs()).exp().ln_1p()
}

pub fn sigmoid<T: Real>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Result of [`Graph::backward`].
#[derive(Debug)]
pub struct Gradients<T> {
    grads: Vec<Option<Tensor<T>>>,
    params: HashMap<(u64, usize), NodeId>,
}

impl<T: Real> Gradients<T> {
    /// Gradient of the loss with respect to a node, if any flowed into it.
    pub fn wrt(&self, id: NodeId) -> Option<&Tensor<T>> {
        self.grads.get(id.0).and_then(Option::as_ref)
    }

    /// Gradients for every tensor of `set`, in set order. Parameters the loss
    /// did not touch get `None`.
    pub fn for_params(&self, set: &ParamSet<T>) -> Vec<Option<Tensor<T>>> {
        (0..set.len())
            .map(|i| {
                self.params
                    .get(&(set.id(), i))
                    .and_then(|node| self.grads[node.0].clone())
            })
            .collect()
    }
}
