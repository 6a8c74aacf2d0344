//! Define-by-run reverse-mode differentiation.
//!
//! A [`Graph`] is built fresh for every forward pass. Each op evaluates
//! eagerly, stores its output and whatever it needs for the backward sweep,
//! and returns a [`Var`] handle. [`Graph::backward`] walks the tape in
//! reverse creation order, which is a valid topological order because a node
//! can only reference nodes created before it.

use std::collections::BTreeMap;

use super::tensor::{gemm, numel, ShapeDisplay, Tensor};
use super::RuntimeError;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Index of a learnable tensor inside a [`super::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Stride and zero padding of a convolution along (rows, cols).
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub stride: (usize, usize),
    pub pad: (usize, usize),
}

impl ConvGeom {
    pub fn new(stride: usize, pad: usize) -> Self {
        Self {
            stride: (stride, stride),
            pad: (pad, pad),
        }
    }
}

#[derive(Clone, Copy, Debug)]
struct ConvDims {
    n: usize,
    cin: usize,
    h: usize,
    w: usize,
    cout: usize,
    kh: usize,
    kw: usize,
    sh: usize,
    sw: usize,
    ph: usize,
    pw: usize,
    ho: usize,
    wo: usize,
}

impl ConvDims {
    fn k(&self) -> usize {
        self.cin * self.kh * self.kw
    }

    fn p(&self) -> usize {
        self.ho * self.wo
    }
}

enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    AddChannel(Var, Var),
    MatMul { a: Var, b: Var, m: usize, k: usize, n: usize },
    Conv { x: Var, w: Var, b: Option<Var>, dims: ConvDims, cols: Vec<f64> },
    Relu(Var),
    Sigmoid(Var),
    Sum(Var),
    Mean(Var),
    Reshape(Var),
    Concat { parts: Vec<Var>, axis: usize },
    Gather { x: Var, index: Vec<usize> },
    BceLogits { logits: Var, target: Vec<f64> },
}

struct Node {
    shape: Vec<usize>,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients produced by one backward sweep.
pub struct Gradients {
    nodes: Vec<Option<Vec<f64>>>,
    params: BTreeMap<ParamId, Vec<f64>>,
}

impl Gradients {
    /// Gradient of the loss with respect to a node, if it was reachable.
    pub fn wrt(&self, v: Var) -> Option<&[f64]> {
        self.nodes.get(v.0).and_then(|g| g.as_deref())
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(&id).map(Vec::as_slice)
    }

    pub fn params(&self) -> &BTreeMap<ParamId, Vec<f64>> {
        &self.params
    }
}

fn mismatch(op: &'static str, a: &[usize], b: &[usize]) -> RuntimeError {
    RuntimeError::ShapeMismatch {
        op,
        lhs: ShapeDisplay(a).to_string(),
        rhs: ShapeDisplay(b).to_string(),
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        Tensor::new(node.shape.clone(), node.value.clone()).expect("node shape is consistent")
    }

    fn push(&mut self, shape: Vec<usize>, value: Vec<f64>, op: Op, requires_grad: bool) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        self.nodes.push(Node {
            shape,
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn leaf(&mut self, t: &Tensor, requires_grad: bool) -> Result<Var, RuntimeError> {
        if !t.is_finite() {
            return Err(RuntimeError::NonFinite("graph input"));
        }
        Ok(self.push(t.shape().to_vec(), t.data().to_vec(), Op::Leaf, requires_grad))
    }

    /// Constant input; no gradient is tracked for it.
    pub fn input(&mut self, t: &Tensor) -> Result<Var, RuntimeError> {
        self.leaf(t, false)
    }

    /// Leaf whose gradient is reported by [`Graph::backward`].
    pub fn watch(&mut self, t: &Tensor) -> Result<Var, RuntimeError> {
        self.leaf(t, true)
    }

    /// Learnable parameter; its gradient is keyed by `id`.
    pub fn param(&mut self, id: ParamId, t: &Tensor) -> Result<Var, RuntimeError> {
        let v = self.leaf(t, true)?;
        self.nodes[v.0].param = Some(id);
        Ok(v)
    }

    fn elementwise(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var, RuntimeError> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape != nb.shape {
            return Err(mismatch(name, &na.shape, &nb.shape));
        }
        let value = na.value.iter().zip(&nb.value).map(|(&x, &y)| f(x, y)).collect();
        let shape = na.shape.clone();
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(shape, value, op, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, RuntimeError> {
        self.elementwise("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, RuntimeError> {
        self.elementwise("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, RuntimeError> {
        self.elementwise("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let node = &self.nodes[a.0];
        let value = node.value.iter().map(|x| x * s).collect();
        let shape = node.shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, Op::Scale(a, s), rg)
    }

    /// `x[..., c] + bias[c]`, broadcasting over the leading axes.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var, RuntimeError> {
        let (nx, nb) = (&self.nodes[x.0], &self.nodes[bias.0]);
        let c = *nx.shape.last().unwrap_or(&0);
        if nb.shape != [c] || c == 0 {
            return Err(mismatch("add_bias", &nx.shape, &nb.shape));
        }
        let value = nx
            .value
            .chunks(c)
            .flat_map(|row| row.iter().zip(&nb.value).map(|(a, b)| a + b))
            .collect();
        let shape = nx.shape.clone();
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(shape, value, Op::AddBias(x, bias), rg))
    }

    /// `x[n, c, ...] + shift[n, c]`, broadcasting over the trailing axes.
    pub fn add_channel(&mut self, x: Var, shift: Var) -> Result<Var, RuntimeError> {
        let (nx, ns) = (&self.nodes[x.0], &self.nodes[shift.0]);
        if nx.shape.len() < 2 || ns.shape != nx.shape[..2] {
            return Err(mismatch("add_channel", &nx.shape, &ns.shape));
        }
        let inner = numel(&nx.shape[2..]);
        let value = if inner == 0 {
            Vec::new()
        } else {
            nx.value
                .chunks(inner)
                .zip(&ns.value)
                .flat_map(|(chunk, s)| chunk.iter().map(move |v| v + s))
                .collect()
        };
        let shape = nx.shape.clone();
        let rg = self.rg(x) || self.rg(shift);
        Ok(self.push(shape, value, Op::AddChannel(x, shift), rg))
    }

    /// `[m, k] @ [k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, RuntimeError> {
        let (na, nb) = (&self.nodes[a.0], &self.nodes[b.0]);
        if na.shape.len() != 2 || nb.shape.len() != 2 || na.shape[1] != nb.shape[0] {
            return Err(mismatch("matmul", &na.shape, &nb.shape));
        }
        let (m, k, n) = (na.shape[0], na.shape[1], nb.shape[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, &na.value, (k, 1), &nb.value, (n, 1), 0.0, &mut out, (n, 1));
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// 2-D convolution of `x: [n, cin, h, w]` with `w: [cout, cin, kh, kw]`
    /// and optional `bias: [cout]`, zero padded.
    pub fn conv2d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
    ) -> Result<Var, RuntimeError> {
        let (xs, ws) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
            return Err(mismatch("conv2d", xs, ws));
        }
        let (xs, ws) = (xs.clone(), ws.clone());
        self.conv(x, w, bias, geom, [xs[0], xs[1], xs[2], xs[3]], [ws[0], ws[2], ws[3]], "conv2d")
            .map(|(v, _)| v)
    }

    /// 1-D convolution of `x: [n, cin, l]` with `w: [cout, cin, k]` and
    /// optional `bias: [cout]`, zero padded.
    pub fn conv1d(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        stride: usize,
        pad: usize,
    ) -> Result<Var, RuntimeError> {
        let (xs, ws) = (&self.nodes[x.0].shape, &self.nodes[w.0].shape);
        if xs.len() != 3 || ws.len() != 3 || xs[1] != ws[1] {
            return Err(mismatch("conv1d", xs, ws));
        }
        let (xs, ws) = (xs.clone(), ws.clone());
        let geom = ConvGeom {
            stride: (1, stride),
            pad: (0, pad),
        };
        let (v, dims) = self.conv(x, w, bias, geom, [xs[0], xs[1], 1, xs[2]], [ws[0], 1, ws[2]], "conv1d")?;
        self.nodes[v.0].shape = vec![dims.n, dims.cout, dims.wo];
        Ok(v)
    }

    #[allow(clippy::too_many_arguments)]
    fn conv(
        &mut self,
        x: Var,
        w: Var,
        bias: Option<Var>,
        geom: ConvGeom,
        [n, cin, h, wd]: [usize; 4],
        [cout, kh, kw]: [usize; 3],
        name: &'static str,
    ) -> Result<(Var, ConvDims), RuntimeError> {
        if let Some(b) = bias {
            if self.nodes[b.0].shape != [cout] {
                return Err(mismatch(name, &self.nodes[w.0].shape, &self.nodes[b.0].shape));
            }
        }
        let (sh, sw) = geom.stride;
        let (ph, pw) = geom.pad;
        if sh == 0 || sw == 0 || h + 2 * ph < kh || wd + 2 * pw < kw {
            return Err(mismatch(name, &self.nodes[x.0].shape, &self.nodes[w.0].shape));
        }
        let dims = ConvDims {
            n,
            cin,
            h,
            w: wd,
            cout,
            kh,
            kw,
            sh,
            sw,
            ph,
            pw,
            ho: (h + 2 * ph - kh) / sh + 1,
            wo: (wd + 2 * pw - kw) / sw + 1,
        };
        let (k, p) = (dims.k(), dims.p());
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let mut cols = vec![0.0; n * k * p];
        let mut out = vec![0.0; n * cout * p];
        for s in 0..n {
            let xs = &xv[s * cin * h * wd..(s + 1) * cin * h * wd];
            let cs = &mut cols[s * k * p..(s + 1) * k * p];
            im2col(xs, cs, &dims);
            gemm(cout, k, p, wv, (k, 1), cs, (p, 1), 0.0, &mut out[s * cout * p..(s + 1) * cout * p], (p, 1));
        }
        if let Some(b) = bias {
            let bv = &self.nodes[b.0].value;
            for (chunk, bias) in out.chunks_mut(p).zip(bv.iter().cycle()) {
                chunk.iter_mut().for_each(|v| *v += bias);
            }
        }
        let rg = self.rg(x) || self.rg(w) || bias.map_or(false, |b| self.rg(b));
        let v = self.push(
            vec![n, cout, dims.ho, dims.wo],
            out,
            Op::Conv { x, w, b: bias, dims, cols },
            rg,
        );
        Ok((v, dims))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let value = node.value.iter().map(|&x| x.max(0.0)).collect();
        let shape = node.shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, Op::Relu(a), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let node = &self.nodes[a.0];
        let value = node.value.iter().map(|&x| sigmoid(x)).collect();
        let shape = node.shape.clone();
        let rg = self.rg(a);
        self.push(shape, value, Op::Sigmoid(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.nodes[a.0].value.iter().sum();
        let rg = self.rg(a);
        self.push(vec![], vec![s], Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, RuntimeError> {
        let node = &self.nodes[a.0];
        if node.value.is_empty() {
            return Err(RuntimeError::Empty("mean"));
        }
        let m = node.value.iter().sum::<f64>() / node.value.len() as f64;
        let rg = self.rg(a);
        Ok(self.push(vec![], vec![m], Op::Mean(a), rg))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var, RuntimeError> {
        let node = &self.nodes[a.0];
        if numel(shape) != node.value.len() {
            return Err(mismatch("reshape", &node.shape, shape));
        }
        let value = node.value.clone();
        let rg = self.rg(a);
        Ok(self.push(shape.to_vec(), value, Op::Reshape(a), rg))
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var, RuntimeError> {
        let first = parts.first().ok_or(RuntimeError::Empty("concat"))?;
        let base = self.nodes[first.0].shape.clone();
        if axis >= base.len() {
            return Err(mismatch("concat", &base, &[axis]));
        }
        let mut axis_len = 0;
        for p in parts {
            let s = &self.nodes[p.0].shape;
            if s.len() != base.len() || s[..axis] != base[..axis] || s[axis + 1..] != base[axis + 1..] {
                return Err(mismatch("concat", &base, s));
            }
            axis_len += s[axis];
        }
        let outer = numel(&base[..axis]);
        let inner = numel(&base[axis + 1..]);
        let mut value = Vec::with_capacity(outer * axis_len * inner);
        for o in 0..outer {
            for p in parts {
                let node = &self.nodes[p.0];
                let chunk = node.shape[axis] * inner;
                value.extend_from_slice(&node.value[o * chunk..(o + 1) * chunk]);
            }
        }
        let mut shape = base;
        shape[axis] = axis_len;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(
            shape,
            value,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            rg,
        ))
    }

    /// Selects positions along the last axis: `out[..., j] = x[..., index[j]]`.
    pub fn gather_last(&mut self, x: Var, index: &[usize]) -> Result<Var, RuntimeError> {
        let node = &self.nodes[x.0];
        let l = *node.shape.last().ok_or(RuntimeError::Empty("gather_last"))?;
        if index.iter().any(|&i| i >= l) {
            return Err(mismatch("gather_last", &node.shape, &[index.len()]));
        }
        let value = if l == 0 {
            Vec::new()
        } else {
            node.value
                .chunks(l)
                .flat_map(|row| index.iter().map(move |&i| row[i]))
                .collect()
        };
        let mut shape = node.shape.clone();
        *shape.last_mut().unwrap() = index.len();
        let rg = self.rg(x);
        Ok(self.push(
            shape,
            value,
            Op::Gather {
                x,
                index: index.to_vec(),
            },
            rg,
        ))
    }

    /// Elementwise binary cross-entropy of `sigmoid(logits)` against constant
    /// targets, in the overflow-free logit form.
    pub fn bce_with_logits(&mut self, logits: Var, target: &Tensor) -> Result<Var, RuntimeError> {
        let node = &self.nodes[logits.0];
        if node.shape != target.shape() {
            return Err(mismatch("bce_with_logits", &node.shape, target.shape()));
        }
        if !target.is_finite() {
            return Err(RuntimeError::NonFinite("bce target"));
        }
        let value = node
            .value
            .iter()
            .zip(target.data())
            .map(|(&x, &y)| x.max(0.0) - x * y + (-x.abs()).exp().ln_1p())
            .collect();
        let shape = node.shape.clone();
        let rg = self.rg(logits);
        Ok(self.push(
            shape,
            value,
            Op::BceLogits {
                logits,
                target: target.data().to_vec(),
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar loss.
    pub fn backward(&self, loss: Var) -> Result<Gradients, RuntimeError> {
        let root = &self.nodes[loss.0];
        if root.value.len() != 1 {
            return Err(RuntimeError::NonScalarLoss(ShapeDisplay(&root.shape).to_string()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if node.requires_grad {
                self.propagate(node, &g, &mut grads);
            }
            grads[i] = Some(g);
        }

        let mut params = BTreeMap::new();
        for (node, g) in self.nodes.iter().zip(&grads) {
            if let (Some(id), Some(g)) = (node.param, g) {
                params
                    .entry(id)
                    .and_modify(|acc: &mut Vec<f64>| acc.iter_mut().zip(g).for_each(|(a, b)| *a += b))
                    .or_insert_with(|| g.clone());
            }
        }
        Ok(Gradients {
            nodes: grads,
            params,
        })
    }

    fn propagate(&self, node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let mut acc = |v: Var, f: &mut dyn FnMut(&mut [f64])| {
            if self.nodes[v.0].requires_grad {
                let slot = grads[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.len()]);
                f(slot);
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x += d));
            }
            Op::Sub(a, b) => {
                acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d));
                acc(*b, &mut |gb| gb.iter_mut().zip(g).for_each(|(x, d)| *x -= d));
            }
            Op::Mul(a, b) => {
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                acc(*a, &mut |ga| {
                    for ((x, d), y) in ga.iter_mut().zip(g).zip(bv) {
                        *x += d * y;
                    }
                });
                acc(*b, &mut |gb| {
                    for ((x, d), y) in gb.iter_mut().zip(g).zip(av) {
                        *x += d * y;
                    }
                });
            }
            Op::Scale(a, s) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d * s)),
            Op::AddBias(x, b) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(v, d)| *v += d));
                let c = self.nodes[b.0].value.len();
                acc(*b, &mut |gb| {
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(v, d)| *v += d);
                    }
                });
            }
            Op::AddChannel(x, s) => {
                acc(*x, &mut |gx| gx.iter_mut().zip(g).for_each(|(v, d)| *v += d));
                let inner = numel(&node.shape[2..]);
                acc(*s, &mut |gs| {
                    if inner > 0 {
                        for (v, chunk) in gs.iter_mut().zip(g.chunks(inner)) {
                            *v += chunk.iter().sum::<f64>();
                        }
                    }
                });
            }
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                // dA = G @ B^T, dB = A^T @ G
                acc(*a, &mut |ga| gemm(m, n, k, g, (n, 1), bv, (1, n), 1.0, ga, (k, 1)));
                acc(*b, &mut |gb| gemm(k, m, n, av, (1, k), g, (n, 1), 1.0, gb, (n, 1)));
            }
            Op::Conv { x, w, b, dims, cols } => {
                let d = *dims;
                let (k, p) = (d.k(), d.p());
                let wv = &self.nodes[w.0].value;
                acc(*w, &mut |gw| {
                    for s in 0..d.n {
                        let gs = &g[s * d.cout * p..(s + 1) * d.cout * p];
                        let cs = &cols[s * k * p..(s + 1) * k * p];
                        gemm(d.cout, p, k, gs, (p, 1), cs, (1, p), 1.0, gw, (k, 1));
                    }
                });
                if let Some(b) = b {
                    acc(*b, &mut |gb| {
                        for (chunk, i) in g.chunks(p).zip((0..d.cout).cycle()) {
                            gb[i] += chunk.iter().sum::<f64>();
                        }
                    });
                }
                acc(*x, &mut |gx| {
                    let mut dcols = vec![0.0; k * p];
                    let img = d.cin * d.h * d.w;
                    for s in 0..d.n {
                        let gs = &g[s * d.cout * p..(s + 1) * d.cout * p];
                        gemm(k, d.cout, p, wv, (1, k), gs, (p, 1), 0.0, &mut dcols, (p, 1));
                        col2im(&dcols, &mut gx[s * img..(s + 1) * img], &d);
                    }
                });
            }
            Op::Relu(a) => {
                let av = &self.nodes[a.0].value;
                acc(*a, &mut |ga| {
                    for ((x, d), v) in ga.iter_mut().zip(g).zip(av) {
                        if *v > 0.0 {
                            *x += d;
                        }
                    }
                });
            }
            Op::Sigmoid(a) => {
                let out = &node.value;
                acc(*a, &mut |ga| {
                    for ((x, d), s) in ga.iter_mut().zip(g).zip(out) {
                        *x += d * s * (1.0 - s);
                    }
                });
            }
            Op::Sum(a) => acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += g[0])),
            Op::Mean(a) => {
                let scale = g[0] / self.nodes[a.0].value.len() as f64;
                acc(*a, &mut |ga| ga.iter_mut().for_each(|x| *x += scale));
            }
            Op::Reshape(a) => acc(*a, &mut |ga| ga.iter_mut().zip(g).for_each(|(x, d)| *x += d)),
            Op::Concat { parts, axis } => {
                let outer = numel(&node.shape[..*axis]);
                let inner = numel(&node.shape[*axis + 1..]);
                let row = node.shape[*axis] * inner;
                let mut offset = 0;
                for p in parts {
                    let chunk = self.nodes[p.0].shape[*axis] * inner;
                    acc(*p, &mut |gp| {
                        for o in 0..outer {
                            let src = &g[o * row + offset..o * row + offset + chunk];
                            gp[o * chunk..(o + 1) * chunk]
                                .iter_mut()
                                .zip(src)
                                .for_each(|(x, d)| *x += d);
                        }
                    });
                    offset += chunk;
                }
            }
            Op::Gather { x, index } => {
                let l = *self.nodes[x.0].shape.last().unwrap();
                let m = index.len();
                acc(*x, &mut |gx| {
                    if m == 0 {
                        return;
                    }
                    for (row, grow) in gx.chunks_mut(l).zip(g.chunks(m)) {
                        for (&i, d) in index.iter().zip(grow) {
                            row[i] += d;
                        }
                    }
                });
            }
            Op::BceLogits { logits, target } => {
                let xv = &self.nodes[logits.0].value;
                acc(*logits, &mut |gl| {
                    for (((v, d), &x), y) in gl.iter_mut().zip(g).zip(xv).zip(target) {
                        *v += d * (sigmoid(x) - y);
                    }
                });
            }
        }
    }
}

fn im2col(x: &[f64], cols: &mut [f64], d: &ConvDims) {
    let p = d.p();
    let mut row = 0;
    for ci in 0..d.cin {
        let plane = &x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let dst = &mut cols[row * p..(row + 1) * p];
                for oi in 0..d.ho {
                    let ii = (oi * d.sh + ki) as isize - d.ph as isize;
                    let out_row = &mut dst[oi * d.wo..(oi + 1) * d.wo];
                    if ii < 0 || ii >= d.h as isize {
                        out_row.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let src = &plane[ii as usize * d.w..(ii as usize + 1) * d.w];
                    for (oj, v) in out_row.iter_mut().enumerate() {
                        let jj = (oj * d.sw + kj) as isize - d.pw as isize;
                        *v = if jj < 0 || jj >= d.w as isize {
                            0.0
                        } else {
                            src[jj as usize]
                        };
                    }
                }
                row += 1;
            }
        }
    }
}

fn col2im(cols: &[f64], x: &mut [f64], d: &ConvDims) {
    let p = d.p();
    let mut row = 0;
    for ci in 0..d.cin {
        let plane = &mut x[ci * d.h * d.w..(ci + 1) * d.h * d.w];
        for ki in 0..d.kh {
            for kj in 0..d.kw {
                let src = &cols[row * p..(row + 1) * p];
                for oi in 0..d.ho {
                    let ii = (oi * d.sh + ki) as isize - d.ph as isize;
                    if ii < 0 || ii >= d.h as isize {
                        continue;
                    }
                    let dst = &mut plane[ii as usize * d.w..(ii as usize + 1) * d.w];
                    for oj in 0..d.wo {
                        let jj = (oj * d.sw + kj) as isize - d.pw as isize;
                        if jj >= 0 && jj < d.w as isize {
                            dst[jj as usize] += src[oi * d.wo + oj];
                        }
                    }
                }
                row += 1;
            }
        }
    }
}
