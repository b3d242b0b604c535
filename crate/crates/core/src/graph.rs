//! Tape-based reverse-mode automatic differentiation.
//!
//! A [`Graph`] records every operation applied during one forward pass.
//! [`Graph::backward`] walks the tape in reverse and returns the gradient of a
//! scalar output with respect to every parameter and tracked input.
//! Shape errors inside the graph are programming errors and panic; public
//! entry points validate shapes before building a graph.

use std::collections::HashMap;

use crate::params::{ParamId, ParamStore};
use crate::tensor::{gemm, MatRef, Real, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone, Copy)]
enum Unary {
    LeakyRelu(f64),
    Sigmoid,
    Softplus,
    Log,
    Exp,
    Square,
    Sqrt,
    Clamp(f64, f64),
}

#[derive(Debug, Clone, Copy)]
enum Op {
    Leaf,
    Param(ParamId),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    Unary(Var, Unary),
    Conv2d { x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize },
    Linear { x: Var, w: Var, b: Option<Var> },
    AvgPool2(Var),
    MaxPool2(Var),
    Upsample2(Var),
    ConcatChannels(Var, Var),
    SpatialMean(Var),
    SpatialStd(Var),
    InstanceNorm(Var, f64),
    MulChannels(Var, Var),
    AddChannels(Var, Var),
    MeanAll(Var),
    SumAll(Var),
    Reshape(Var),
}

struct Node<F> {
    value: Option<Tensor<F>>,
    op: Op,
    needs_grad: bool,
}

pub struct Graph<'p, F: Real> {
    params: Option<&'p ParamStore<F>>,
    nodes: Vec<Node<F>>,
    param_vars: HashMap<ParamId, Var>,
}

/// Gradients produced by [`Graph::backward`].
pub struct Gradients<F> {
    by_node: Vec<Option<Tensor<F>>>,
    params: HashMap<ParamId, Var>,
}

impl<F: Real> Gradients<F> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<F>> {
        self.params.get(&id).and_then(|v| self.by_node[v.0].as_ref())
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor<F>> {
        self.by_node.get(v.0).and_then(|g| g.as_ref())
    }

    /// Parameter gradients, consuming `self`.
    pub fn into_param_grads(mut self) -> HashMap<ParamId, Tensor<F>> {
        let mut out = HashMap::new();
        for (id, v) in self.params {
            if let Some(g) = self.by_node[v.0].take() {
                out.insert(id, g);
            }
        }
        out
    }
}

impl<'p, F: Real> Default for Graph<'p, F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p, F: Real> Graph<'p, F> {
    pub fn new() -> Self {
        Graph { params: None, nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn with_params(params: &'p ParamStore<F>) -> Self {
        Graph { params: Some(params), nodes: Vec::new(), param_vars: HashMap::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor<F>, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node { value: Some(value), op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    /// A constant input; no gradient is tracked.
    pub fn input(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, false)
    }

    /// An input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor<F>) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(&v) = self.param_vars.get(&id) {
            return v;
        }
        assert!(self.params.is_some(), "graph has no parameter store");
        self.nodes.push(Node { value: None, op: Op::Param(id), needs_grad: true });
        let v = Var(self.nodes.len() - 1);
        self.param_vars.insert(id, v);
        v
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        let node = &self.nodes[v.0];
        match (&node.value, node.op) {
            (Some(t), _) => t,
            (None, Op::Param(id)) => self.params.expect("parameter store").get(id),
            _ => unreachable!("node without value"),
        }
    }

    pub fn scalar(&self, v: Var) -> F {
        let t = self.value(v);
        assert_eq!(t.numel(), 1, "scalar() on a tensor of shape {:?}", t.shape());
        t.data()[0]
    }

    fn binary(&mut self, a: Var, b: Var, op: Op, f: impl Fn(F, F) -> F) -> Var {
        let va = self.value(a);
        let vb = self.value(b);
        assert_eq!(va.shape(), vb.shape(), "elementwise op on mismatched shapes");
        let out = va.zip_map(vb, f).expect("same shape");
        let needs = self.needs(a) || self.needs(b);
        self.push(out, op, needs)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Var {
        self.binary(a, b, Op::Div(a, b), |x, y| x / y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let k = F::lit(c);
        let out = self.value(a).map(|x| x * k);
        let needs = self.needs(a);
        self.push(out, Op::Scale(a, c), needs)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let k = F::lit(c);
        let out = self.value(a).map(|x| x + k);
        let needs = self.needs(a);
        self.push(out, Op::Offset(a), needs)
    }

    fn unary(&mut self, a: Var, u: Unary) -> Var {
        let out = self.value(a).map(|x| unary_forward(u, x));
        let needs = self.needs(a);
        self.push(out, Op::Unary(a, u), needs)
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        self.unary(a, Unary::LeakyRelu(slope))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sigmoid)
    }

    pub fn softplus(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Softplus)
    }

    pub fn log(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Log)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Exp)
    }

    pub fn square(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Square)
    }

    pub fn sqrt(&mut self, a: Var) -> Var {
        self.unary(a, Unary::Sqrt)
    }

    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Var {
        self.unary(a, Unary::Clamp(lo, hi))
    }

    /// 2-D convolution. `x: (B, Cin, H, W)`, `w: (Cout, Cin, K, K)`, `b: (Cout)`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, pad: usize) -> Var {
        let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad);
        let out = conv2d_forward(
            self.value(x).data(),
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            &geom,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        let t = Tensor::new(geom.out_shape(), out).expect("conv output");
        self.push(t, Op::Conv2d { x, w, b, stride, pad }, needs)
    }

    /// Affine map `x @ w^T + b`. `x: (B, In)`, `w: (Out, In)`, `b: (Out)`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Var {
        let (batch, fin) = self.value(x).dims2().expect("linear input");
        let (fout, fin2) = self.value(w).dims2().expect("linear weight");
        assert_eq!(fin, fin2, "linear: input features");
        let mut out = vec![F::zero(); batch * fout];
        let mut beta = F::zero();
        if let Some(b) = b {
            let bias = self.value(b).data();
            assert_eq!(bias.len(), fout, "linear: bias length");
            for row in out.chunks_mut(fout) {
                row.copy_from_slice(bias);
            }
            beta = F::one();
        }
        gemm(
            MatRef::new(self.value(x).data(), batch, fin),
            MatRef::new(self.value(w).data(), fout, fin).t(),
            beta,
            &mut out,
        );
        let needs = self.needs(x) || self.needs(w) || b.is_some_and(|b| self.needs(b));
        self.push(Tensor::new([batch, fout], out).unwrap(), Op::Linear { x, w, b }, needs)
    }

    /// 2x2 average pooling with stride 2.
    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4().expect("avg_pool2 input");
        assert!(h % 2 == 0 && w % 2 == 0, "avg_pool2 needs even spatial size");
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); b * c * ho * wo];
        let quarter = F::lit(0.25);
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for oy in 0..ho {
                let r0 = &plane[2 * oy * w..(2 * oy + 1) * w];
                let r1 = &plane[(2 * oy + 1) * w..(2 * oy + 2) * w];
                for ox in 0..wo {
                    dst[oy * wo + ox] =
                        (r0[2 * ox] + r0[2 * ox + 1] + r1[2 * ox] + r1[2 * ox + 1]) * quarter;
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new([b, c, ho, wo], out).unwrap(), Op::AvgPool2(x), needs)
    }

    /// 2x2 max pooling with stride 2; ties go to the first element in
    /// row-major order.
    pub fn max_pool2(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4().expect("max_pool2 input");
        assert!(h % 2 == 0 && w % 2 == 0, "max_pool2 needs even spatial size");
        let (ho, wo) = (h / 2, w / 2);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); b * c * ho * wo];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for oy in 0..ho {
                for ox in 0..wo {
                    dst[oy * wo + ox] = plane[max_pool_source(plane, w, oy, ox)];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new([b, c, ho, wo], out).unwrap(), Op::MaxPool2(x), needs)
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4().expect("upsample2 input");
        let (ho, wo) = (2 * h, 2 * w);
        let src = self.value(x).data();
        let mut out = vec![F::zero(); b * c * ho * wo];
        for (plane, dst) in src.chunks(h * w).zip(out.chunks_mut(ho * wo)) {
            for oy in 0..ho {
                let row = &plane[(oy / 2) * w..(oy / 2 + 1) * w];
                let drow = &mut dst[oy * wo..(oy + 1) * wo];
                for (ox, d) in drow.iter_mut().enumerate() {
                    *d = row[ox / 2];
                }
            }
        }
        let needs = self.needs(x);
        self.push(Tensor::new([b, c, ho, wo], out).unwrap(), Op::Upsample2(x), needs)
    }

    pub fn concat_channels(&mut self, a: Var, b: Var) -> Var {
        let out = self.value(a).concat_channels(self.value(b)).expect("concat_channels");
        let needs = self.needs(a) || self.needs(b);
        self.push(out, Op::ConcatChannels(a, b), needs)
    }

    /// Per-channel spatial mean, `(B, C, H, W) -> (B, C)`.
    pub fn spatial_mean(&mut self, x: Var) -> Var {
        let (b, c, h, w) = self.value(x).dims4().expect("spatial_mean input");
        let inv = F::lit(1.0 / (h * w) as f64);
        let out: Vec<F> =
            self.value(x).data().chunks(h * w).map(|p| p.iter().copied().sum::<F>() * inv).collect();
        let needs = self.needs(x);
        self.push(Tensor::new([b, c], out).unwrap(), Op::SpatialMean(x), needs)
    }

    /// Per-channel `sqrt(population variance + eps)`, `(B, C, H, W) -> (B, C)`.
    pub fn spatial_std(&mut self, x: Var, eps: f64) -> Var {
        let (b, c, h, w) = self.value(x).dims4().expect("spatial_std input");
        let out: Vec<F> =
            self.value(x).data().chunks(h * w).map(|p| plane_stats(p, eps).1).collect();
        let needs = self.needs(x);
        self.push(Tensor::new([b, c], out).unwrap(), Op::SpatialStd(x), needs)
    }

    /// `(x - mean) / sqrt(var + eps)` per channel plane.
    pub fn instance_norm(&mut self, x: Var, eps: f64) -> Var {
        let shape = self.value(x).shape().to_vec();
        let (_, _, h, w) = self.value(x).dims4().expect("instance_norm input");
        let mut out = Vec::with_capacity(self.value(x).numel());
        for p in self.value(x).data().chunks(h * w) {
            let (m, s) = plane_stats(p, eps);
            out.extend(p.iter().map(|&v| (v - m) / s));
        }
        let needs = self.needs(x);
        self.push(Tensor::new(shape, out).unwrap(), Op::InstanceNorm(x, eps), needs)
    }

    /// `x[b, c, :, :] * s[b, c]`.
    pub fn mul_channels(&mut self, x: Var, s: Var) -> Var {
        let out = channel_broadcast(self.value(x), self.value(s), |v, k| v * k);
        let needs = self.needs(x) || self.needs(s);
        self.push(out, Op::MulChannels(x, s), needs)
    }

    /// `x[b, c, :, :] + s[b, c]`.
    pub fn add_channels(&mut self, x: Var, s: Var) -> Var {
        let out = channel_broadcast(self.value(x), self.value(s), |v, k| v + k);
        let needs = self.needs(x) || self.needs(s);
        self.push(out, Op::AddChannels(x, s), needs)
    }

    pub fn mean_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).mean());
        let needs = self.needs(x);
        self.push(out, Op::MeanAll(x), needs)
    }

    pub fn sum_all(&mut self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).sum());
        let needs = self.needs(x);
        self.push(out, Op::SumAll(x), needs)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let out = self.value(x).clone().reshape(shape.to_vec()).expect("reshape");
        let needs = self.needs(x);
        self.push(out, Op::Reshape(x), needs)
    }

    /// Reverse-mode sweep from a scalar output.
    pub fn backward(&self, output: Var) -> Gradients<F> {
        assert_eq!(self.value(output).numel(), 1, "backward needs a scalar output");
        let mut grads: Vec<Option<Tensor<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[output.0] = Some(Tensor::ones(self.value(output).shape().to_vec()));

        for i in (0..=output.0).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                grads[i] = None;
                continue;
            }
            if matches!(node.op, Op::Leaf | Op::Param(_)) {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backward_node(i, &g, &mut grads);
        }

        Gradients { by_node: grads, params: self.param_vars.clone() }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor<F>>], v: Var, g: Tensor<F>) {
        if !self.needs(v) {
            return;
        }
        match &mut grads[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += *b;
                }
            }
            slot @ None => *slot = Some(g),
        }
    }

    fn backward_node(&self, i: usize, g: &Tensor<F>, grads: &mut [Option<Tensor<F>>]) {
        let out = self.nodes[i].value.as_ref().expect("op node value");
        match self.nodes[i].op {
            Op::Leaf | Op::Param(_) => {}
            Op::Add(a, b) => {
                self.accumulate(grads, a, g.clone());
                self.accumulate(grads, b, g.clone());
            }
            Op::Sub(a, b) => {
                self.accumulate(grads, a, g.clone());
                if self.needs(b) {
                    self.accumulate(grads, b, g.map(|v| -v));
                }
            }
            Op::Mul(a, b) => {
                if self.needs(a) {
                    self.accumulate(grads, a, g.zip_map(self.value(b), |d, y| d * y).unwrap());
                }
                if self.needs(b) {
                    self.accumulate(grads, b, g.zip_map(self.value(a), |d, x| d * x).unwrap());
                }
            }
            Op::Div(a, b) => {
                let vb = self.value(b);
                if self.needs(a) {
                    self.accumulate(grads, a, g.zip_map(vb, |d, y| d / y).unwrap());
                }
                if self.needs(b) {
                    // d(x/y)/dy = -out / y
                    let t = Tensor::from_fn(g.shape().to_vec(), |k| {
                        -g.data()[k] * out.data()[k] / vb.data()[k]
                    });
                    self.accumulate(grads, b, t);
                }
            }
            Op::Scale(a, c) => {
                let k = F::lit(c);
                self.accumulate(grads, a, g.map(|d| d * k));
            }
            Op::Offset(a) => self.accumulate(grads, a, g.clone()),
            Op::Unary(a, u) => {
                let x = self.value(a);
                let t = Tensor::from_fn(g.shape().to_vec(), |k| {
                    g.data()[k] * unary_derivative(u, x.data()[k], out.data()[k])
                });
                self.accumulate(grads, a, t);
            }
            Op::Conv2d { x, w, b, stride, pad } => {
                let geom = ConvGeom::new(self.value(x).shape(), self.value(w).shape(), stride, pad);
                let want_b = b.is_some_and(|b| self.needs(b));
                let (dx, dw, db) = conv2d_backward(
                    self.value(x).data(),
                    self.value(w).data(),
                    g.data(),
                    &geom,
                    self.needs(x),
                    self.needs(w),
                    want_b,
                );
                if let Some(dx) = dx {
                    self.accumulate(grads, x, Tensor::new(self.value(x).shape().to_vec(), dx).unwrap());
                }
                if let Some(dw) = dw {
                    self.accumulate(grads, w, Tensor::new(self.value(w).shape().to_vec(), dw).unwrap());
                }
                if let (Some(b), Some(db)) = (b, db) {
                    self.accumulate(grads, b, Tensor::from_vec(db));
                }
            }
            Op::Linear { x, w, b } => {
                let (batch, fin) = self.value(x).dims2().unwrap();
                let fout = g.shape()[1];
                if self.needs(x) {
                    let mut dx = vec![F::zero(); batch * fin];
                    gemm(
                        MatRef::new(g.data(), batch, fout),
                        MatRef::new(self.value(w).data(), fout, fin),
                        F::zero(),
                        &mut dx,
                    );
                    self.accumulate(grads, x, Tensor::new([batch, fin], dx).unwrap());
                }
                if self.needs(w) {
                    let mut dw = vec![F::zero(); fout * fin];
                    gemm(
                        MatRef::new(g.data(), batch, fout).t(),
                        MatRef::new(self.value(x).data(), batch, fin),
                        F::zero(),
                        &mut dw,
                    );
                    self.accumulate(grads, w, Tensor::new([fout, fin], dw).unwrap());
                }
                if let Some(b) = b.filter(|&b| self.needs(b)) {
                    let mut db = vec![F::zero(); fout];
                    for row in g.data().chunks(fout) {
                        for (d, &v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    self.accumulate(grads, b, Tensor::from_vec(db));
                }
            }
            Op::AvgPool2(x) => {
                let shape = self.value(x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (h / 2, w / 2);
                let quarter = F::lit(0.25);
                let mut dx = vec![F::zero(); self.value(x).numel()];
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(ho * wo)) {
                    for y in 0..h {
                        for xx in 0..w {
                            dplane[y * w + xx] = gplane[(y / 2) * wo + xx / 2] * quarter;
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(shape, dx).unwrap());
            }
            Op::MaxPool2(x) => {
                let shape = self.value(x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let (ho, wo) = (h / 2, w / 2);
                let src = self.value(x).data();
                let mut dx = vec![F::zero(); src.len()];
                for ((plane, dplane), gplane) in
                    src.chunks(h * w).zip(dx.chunks_mut(h * w)).zip(g.data().chunks(ho * wo))
                {
                    for oy in 0..ho {
                        for ox in 0..wo {
                            dplane[max_pool_source(plane, w, oy, ox)] += gplane[oy * wo + ox];
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(shape, dx).unwrap());
            }
            Op::Upsample2(x) => {
                let shape = self.value(x).shape().to_vec();
                let (h, w) = (shape[2], shape[3]);
                let wo = 2 * w;
                let mut dx = vec![F::zero(); self.value(x).numel()];
                for (dplane, gplane) in dx.chunks_mut(h * w).zip(g.data().chunks(4 * h * w)) {
                    for y in 0..h {
                        for xx in 0..w {
                            let r0 = 2 * y * wo + 2 * xx;
                            let r1 = r0 + wo;
                            dplane[y * w + xx] = gplane[r0] + gplane[r0 + 1] + gplane[r1] + gplane[r1 + 1];
                        }
                    }
                }
                self.accumulate(grads, x, Tensor::new(shape, dx).unwrap());
            }
            Op::ConcatChannels(a, b) => {
                let (bsz, c1, h, w) = self.value(a).dims4().unwrap();
                let c2 = self.value(b).shape()[1];
                let plane = h * w;
                let mut da = Vec::with_capacity(bsz * c1 * plane);
                let mut db = Vec::with_capacity(bsz * c2 * plane);
                for chunk in g.data().chunks((c1 + c2) * plane) {
                    da.extend_from_slice(&chunk[..c1 * plane]);
                    db.extend_from_slice(&chunk[c1 * plane..]);
                }
                if self.needs(a) {
                    self.accumulate(grads, a, Tensor::new([bsz, c1, h, w], da).unwrap());
                }
                if self.needs(b) {
                    self.accumulate(grads, b, Tensor::new([bsz, c2, h, w], db).unwrap());
                }
            }
            Op::SpatialMean(x) => {
                let shape = self.value(x).shape().to_vec();
                let plane = shape[2] * shape[3];
                let inv = F::lit(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(self.value(x).numel());
                for &d in g.data() {
                    dx.extend(std::iter::repeat_n(d * inv, plane));
                }
                self.accumulate(grads, x, Tensor::new(shape, dx).unwrap());
            }
            Op::SpatialStd(x) => {
                let xv = self.value(x);
                let plane = xv.shape()[2] * xv.shape()[3];
                let inv = F::lit(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(xv.numel());
                for ((p, &d), &s) in xv.data().chunks(plane).zip(g.data()).zip(out.data()) {
                    let m = p.iter().copied().sum::<F>() * inv;
                    let k = d * inv / s;
                    dx.extend(p.iter().map(|&v| (v - m) * k));
                }
                self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::InstanceNorm(x, eps) => {
                let xv = self.value(x);
                let plane = xv.shape()[2] * xv.shape()[3];
                let inv = F::lit(1.0 / plane as f64);
                let mut dx = Vec::with_capacity(xv.numel());
                for ((p, gp), yp) in
                    xv.data().chunks(plane).zip(g.data().chunks(plane)).zip(out.data().chunks(plane))
                {
                    let (_, s) = plane_stats(p, eps);
                    let mean_g = gp.iter().copied().sum::<F>() * inv;
                    let mean_gy = gp.iter().zip(yp).map(|(&a, &b)| a * b).sum::<F>() * inv;
                    dx.extend(gp.iter().zip(yp).map(|(&d, &y)| (d - mean_g - y * mean_gy) / s));
                }
                self.accumulate(grads, x, Tensor::new(xv.shape().to_vec(), dx).unwrap());
            }
            Op::MulChannels(x, s) => {
                let xv = self.value(x);
                let sv = self.value(s);
                let plane = xv.shape()[2] * xv.shape()[3];
                if self.needs(x) {
                    self.accumulate(grads, x, channel_broadcast(g, sv, |d, k| d * k));
                }
                if self.needs(s) {
                    let ds: Vec<F> = g
                        .data()
                        .chunks(plane)
                        .zip(xv.data().chunks(plane))
                        .map(|(gp, xp)| gp.iter().zip(xp).map(|(&a, &b)| a * b).sum())
                        .collect();
                    self.accumulate(grads, s, Tensor::new(sv.shape().to_vec(), ds).unwrap());
                }
            }
            Op::AddChannels(x, s) => {
                let sv = self.value(s);
                let plane = g.shape()[2] * g.shape()[3];
                self.accumulate(grads, x, g.clone());
                if self.needs(s) {
                    let ds: Vec<F> = g.data().chunks(plane).map(|p| p.iter().copied().sum()).collect();
                    self.accumulate(grads, s, Tensor::new(sv.shape().to_vec(), ds).unwrap());
                }
            }
            Op::MeanAll(x) => {
                let xv = self.value(x);
                let k = g.data()[0] / F::lit(xv.numel() as f64);
                self.accumulate(grads, x, Tensor::full(xv.shape().to_vec(), k));
            }
            Op::SumAll(x) => {
                let xv = self.value(x);
                self.accumulate(grads, x, Tensor::full(xv.shape().to_vec(), g.data()[0]));
            }
            Op::Reshape(x) => {
                let shape = self.value(x).shape().to_vec();
                self.accumulate(grads, x, g.clone().reshape(shape).unwrap());
            }
        }
    }
}

fn unary_forward<F: Real>(u: Unary, x: F) -> F {
    match u {
        Unary::LeakyRelu(slope) => {
            if x > F::zero() {
                x
            } else {
                x * F::lit(slope)
            }
        }
        Unary::Sigmoid => sigmoid(x),
        Unary::Softplus => softplus(x),
        Unary::Log => x.ln(),
        Unary::Exp => x.exp(),
        Unary::Square => x * x,
        Unary::Sqrt => x.sqrt(),
        Unary::Clamp(lo, hi) => x.max(F::lit(lo)).min(F::lit(hi)),
    }
}

fn unary_derivative<F: Real>(u: Unary, x: F, y: F) -> F {
    match u {
        Unary::LeakyRelu(slope) => {
            if x > F::zero() {
                F::one()
            } else {
                F::lit(slope)
            }
        }
        Unary::Sigmoid => y * (F::one() - y),
        Unary::Softplus => sigmoid(x),
        Unary::Log => x.recip(),
        Unary::Exp => y,
        Unary::Square => x + x,
        Unary::Sqrt => F::lit(0.5) / y,
        Unary::Clamp(lo, hi) => {
            if x >= F::lit(lo) && x <= F::lit(hi) {
                F::one()
            } else {
                F::zero()
            }
        }
    }
}

pub(crate) fn sigmoid<F: Real>(x: F) -> F {
    if x >= F::zero() {
        F::one() / (F::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (F::one() + e)
    }
}

/// `log(1 + exp(x))`, evaluated without overflow.
pub(crate) fn softplus<F: Real>(x: F) -> F {
    x.max(F::zero()) + (-x.abs()).exp().ln_1p()
}

/// Mean and `sqrt(population variance + eps)` of one plane, two-pass.
pub(crate) fn plane_stats<F: Real>(p: &[F], eps: f64) -> (F, F) {
    let n = F::lit(p.len() as f64);
    let mean = p.iter().copied().sum::<F>() / n;
    let var = p.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / n;
    (mean, (var + F::lit(eps)).sqrt())
}

fn channel_broadcast<F: Real>(x: &Tensor<F>, s: &Tensor<F>, f: impl Fn(F, F) -> F) -> Tensor<F> {
    let (b, c, h, w) = x.dims4().expect("channel broadcast input");
    assert_eq!(s.shape(), &[b, c], "channel broadcast operand must be (B, C)");
    let plane = h * w;
    let mut out = Vec::with_capacity(x.numel());
    for (p, &k) in x.data().chunks(plane).zip(s.data()) {
        out.extend(p.iter().map(|&v| f(v, k)));
    }
    Tensor::new(x.shape().to_vec(), out).unwrap()
}

#[derive(Debug, Clone, Copy)]
struct ConvGeom {
    batch: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(xs: &[usize], ws: &[usize], stride: usize, pad: usize) -> Self {
        let [batch, cin, h, w] = *xs else { panic!("conv2d input must be rank 4, got {xs:?}") };
        let [cout, cin2, kh, kw] = *ws else { panic!("conv2d weight must be rank 4, got {ws:?}") };
        assert_eq!(cin, cin2, "conv2d: input has {cin} channels, weight expects {cin2}");
        assert!(stride >= 1);
        assert!(h + 2 * pad >= kh && w + 2 * pad >= kw, "conv2d kernel larger than input");
        let ho = (h + 2 * pad - kh) / stride + 1;
        let wo = (w + 2 * pad - kw) / stride + 1;
        ConvGeom { batch, cin, h, w, cout, kh, kw, stride, pad, ho, wo }
    }

    fn out_shape(&self) -> Vec<usize> {
        vec![self.batch, self.cout, self.ho, self.wo]
    }

    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }

    fn pointwise(&self) -> bool {
        self.kh == 1 && self.kw == 1 && self.stride == 1 && self.pad == 0
    }

    /// Valid output columns `[lo, hi)` for kernel column `kx`.
    fn col_range(&self, kx: usize) -> (usize, usize) {
        let s = self.stride;
        let lo = if kx >= self.pad { 0 } else { (self.pad - kx).div_ceil(s) };
        let hi = (self.w + self.pad).saturating_sub(kx).div_ceil(s).min(self.wo);
        (lo.min(hi), hi)
    }
}

fn im2col<F: Real>(x: &[F], g: &ConvGeom, cols: &mut [F]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &x[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let dst = &mut cols[row * p..(row + 1) * p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.ho {
                    let drow = &mut dst[oy * g.wo..(oy + 1) * g.wo];
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        drow.fill(F::zero());
                        continue;
                    }
                    let srow = &plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    drow[..lo].fill(F::zero());
                    drow[hi..].fill(F::zero());
                    if g.stride == 1 {
                        let start = lo + kx - g.pad;
                        drow[lo..hi].copy_from_slice(&srow[start..start + (hi - lo)]);
                    } else {
                        for ox in lo..hi {
                            drow[ox] = srow[ox * g.stride + kx - g.pad];
                        }
                    }
                }
            }
        }
    }
}

fn col2im_add<F: Real>(cols: &[F], g: &ConvGeom, dx: &mut [F]) {
    let p = g.p();
    for c in 0..g.cin {
        let plane = &mut dx[c * g.h * g.w..(c + 1) * g.h * g.w];
        for ky in 0..g.kh {
            for kx in 0..g.kw {
                let row = (c * g.kh + ky) * g.kw + kx;
                let src = &cols[row * p..(row + 1) * p];
                let (lo, hi) = g.col_range(kx);
                for oy in 0..g.ho {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= g.h as isize {
                        continue;
                    }
                    let srow = &src[oy * g.wo..(oy + 1) * g.wo];
                    let drow = &mut plane[iy as usize * g.w..(iy as usize + 1) * g.w];
                    for ox in lo..hi {
                        drow[ox * g.stride + kx - g.pad] += srow[ox];
                    }
                }
            }
        }
    }
}

fn conv2d_forward<F: Real>(x: &[F], w: &[F], b: Option<&[F]>, g: &ConvGeom) -> Vec<F> {
    let (k, p) = (g.k(), g.p());
    let mut out = vec![F::zero(); g.batch * g.cout * p];
    let mut cols = if g.pointwise() { Vec::new() } else { vec![F::zero(); k * p] };
    let in_len = g.cin * g.h * g.w;
    for n in 0..g.batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let out_n = &mut out[n * g.cout * p..(n + 1) * g.cout * p];
        let mut beta = F::zero();
        if let Some(bias) = b {
            for (row, &bv) in out_n.chunks_mut(p).zip(bias) {
                row.fill(bv);
            }
            beta = F::one();
        }
        let cols_ref: &[F] = if g.pointwise() {
            xs
        } else {
            im2col(xs, g, &mut cols);
            &cols
        };
        gemm(MatRef::new(w, g.cout, k), MatRef::new(cols_ref, k, p), beta, out_n);
    }
    out
}

type ConvGrads<F> = (Option<Vec<F>>, Option<Vec<F>>, Option<Vec<F>>);

fn conv2d_backward<F: Real>(
    x: &[F],
    w: &[F],
    gout: &[F],
    g: &ConvGeom,
    want_x: bool,
    want_w: bool,
    want_b: bool,
) -> ConvGrads<F> {
    let (k, p) = (g.k(), g.p());
    let in_len = g.cin * g.h * g.w;
    let mut dx = want_x.then(|| vec![F::zero(); g.batch * in_len]);
    let mut dw = want_w.then(|| vec![F::zero(); g.cout * k]);
    let mut db = want_b.then(|| vec![F::zero(); g.cout]);
    let mut cols = if g.pointwise() || !want_w { Vec::new() } else { vec![F::zero(); k * p] };
    let mut dcols = if want_x && !g.pointwise() { vec![F::zero(); k * p] } else { Vec::new() };

    for n in 0..g.batch {
        let xs = &x[n * in_len..(n + 1) * in_len];
        let gn = &gout[n * g.cout * p..(n + 1) * g.cout * p];
        if let Some(dw) = dw.as_mut() {
            let cols_ref: &[F] = if g.pointwise() {
                xs
            } else {
                im2col(xs, g, &mut cols);
                &cols
            };
            gemm(MatRef::new(gn, g.cout, p), MatRef::new(cols_ref, k, p).t(), F::one(), dw);
        }
        if let Some(db) = db.as_mut() {
            for (d, row) in db.iter_mut().zip(gn.chunks(p)) {
                *d += row.iter().copied().sum::<F>();
            }
        }
        if let Some(dx) = dx.as_mut() {
            let dxn = &mut dx[n * in_len..(n + 1) * in_len];
            let wt = MatRef::new(w, g.cout, k).t();
            if g.pointwise() {
                gemm(wt, MatRef::new(gn, g.cout, p), F::one(), dxn);
            } else {
                gemm(wt, MatRef::new(gn, g.cout, p), F::zero(), &mut dcols);
                col2im_add(&dcols, g, dxn);
            }
        }
    }
    (dx, dw, db)
}

fn max_pool_source<F: Real>(plane: &[F], w: usize, oy: usize, ox: usize) -> usize {
    let base = 2 * oy * w + 2 * ox;
    let mut best = base;
    for idx in [base + 1, base + w, base + w + 1] {
        if plane[idx] > plane[best] {
            best = idx;
        }
    }
    best
}
