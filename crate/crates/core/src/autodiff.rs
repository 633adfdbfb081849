//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation as a node holding its value and a
//! backward rule. Nodes are appended in evaluation order, so the tape is
//! already topologically sorted and [`Graph::backward`] is a single
//! reverse sweep. Trainable leaves are tied to a [`ParamId`] in a
//! [`ParamStore`]; the sweep returns one gradient per parameter.
//!
//! Only nodes that depend on a trainable leaf carry gradients, so a frozen
//! network can be evaluated on the same tape as a trained one at no extra
//! backward cost.

use std::collections::BTreeMap;

use crate::error::{dim_err, Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Named trainable tensors of one network.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: Vec<(String, Tensor)>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.entries.push((name, value));
        ParamId(self.entries.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].1
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].1
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        let slot = &mut self.entries[id.0].1;
        if slot.shape() != value.shape() {
            return Err(dim_err("ParamStore::set", slot.shape(), value.shape()));
        }
        *slot = value;
        Ok(())
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].0
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|(n, _)| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &str, &Tensor)> {
        self.entries
            .iter()
            .enumerate()
            .map(|(i, (n, t))| (ParamId(i), n.as_str(), t))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }
}

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

/// Geometry of a 2-D convolution over NHWC input.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

impl ConvGeom {
    pub fn out_size(&self, input: usize) -> Option<usize> {
        let padded = input + 2 * self.pad;
        (padded >= self.kernel).then(|| (padded - self.kernel) / self.stride + 1)
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Square(Var),
    Sum(Var),
    Mean(Var),
    Tanh(Var),
    Sigmoid(Var),
    LeakyRelu(Var, f64),
    AddBias(Var, Var),
    Reshape(Var),
    RepeatRows(Var, usize),
    Concat(Var, Var),
    Upsample2x(Var),
    Conv2d {
        input: Var,
        weight: Var,
        geom: ConvGeom,
        cols: Vec<f64>,
    },
    Gather(Var, Vec<usize>),
    Bilinear(Var, Var, Var),
    SoftmaxXent {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
}

impl Op {
    fn parents(&self) -> Vec<Var> {
        use Op::*;
        match self {
            Leaf => vec![],
            MatMul(a, b) | Add(a, b) | Sub(a, b) | Mul(a, b) | AddBias(a, b) | Concat(a, b) => {
                vec![*a, *b]
            }
            Transpose(a) | Scale(a, _) | AddScalar(a) | Square(a) | Sum(a) | Mean(a) | Tanh(a)
            | Sigmoid(a) | LeakyRelu(a, _) | Reshape(a) | RepeatRows(a, _) | Upsample2x(a)
            | Gather(a, _) => vec![*a],
            Conv2d { input, weight, .. } => vec![*input, *weight],
            Bilinear(x, w, c) => vec![*x, *w, *c],
            SoftmaxXent { logits, .. } => vec![*logits],
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Gradients keyed by parameter, in ascending id order.
pub type Gradients = BTreeMap<ParamId, Tensor>;

#[derive(Debug, Default)]
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn scalar(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = op.parents().iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            param: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Non-trainable leaf.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Trainable leaf bound to `id`.
    pub fn param(&mut self, id: ParamId, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: true,
            param: Some(id),
        });
        Var(self.nodes.len() - 1)
    }

    /// Binds a stored parameter, trainable or frozen.
    pub fn bind(&mut self, store: &ParamStore, id: ParamId, trainable: bool) -> Var {
        let value = store.get(id).clone();
        if trainable {
            self.param(id, value)
        } else {
            self.constant(value)
        }
    }

    /// Index of the first node holding a non-finite value, with its rule.
    pub fn first_non_finite(&self) -> Option<String> {
        self.nodes.iter().enumerate().find_map(|(i, n)| {
            (!n.value.all_finite()).then(|| {
                let kind = format!("{:?}", n.op);
                let kind = kind.split(['(', ' ', '{']).next().unwrap_or("?").to_string();
                format!("node {i} ({kind}, shape {:?})", n.value.shape())
            })
        })
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).matmul(self.value(b))?;
        Ok(self.push(v, Op::MatMul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).transpose()?;
        Ok(self.push(v, Op::Transpose(a)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        Ok(self.push(v, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).sub(self.value(b))?;
        Ok(self.push(v, Op::Sub(a, b)))
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).hadamard(self.value(b))?;
        Ok(self.push(v, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        self.push(v, Op::Scale(a, s))
    }

    pub fn add_scalar(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a))
    }

    pub fn square(&mut self, a: Var) -> Var {
        let v = self.value(a).map(|x| x * x);
        self.push(v, Op::Square(a))
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).sum());
        self.push(v, Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let v = Tensor::scalar(self.value(a).mean());
        self.push(v, Op::Mean(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.value(a).map(f64::tanh);
        self.push(v, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.value(a).map(sigmoid);
        self.push(v, Op::Sigmoid(a))
    }

    pub fn leaky_relu(&mut self, a: Var, slope: f64) -> Var {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { slope * x });
        self.push(v, Op::LeakyRelu(a, slope))
    }

    /// Adds `bias[C]` to every length-`C` row of `x[..., C]`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let b = self.value(bias);
        let c = *xs.shape().last().expect("rank >= 1");
        if b.rank() != 1 || b.len() != c {
            return Err(dim_err("add_bias", xs.shape(), b.shape()));
        }
        let mut out = xs.clone();
        for row in out.data_mut().chunks_exact_mut(c) {
            for (o, bv) in row.iter_mut().zip(b.data()) {
                *o += bv;
            }
        }
        Ok(self.push(out, Op::AddBias(x, bias)))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(a).reshape(shape)?;
        Ok(self.push(v, Op::Reshape(a)))
    }

    /// See [`Tensor::repeat_rows`].
    pub fn repeat_rows(&mut self, a: Var, times: usize) -> Var {
        let v = self.value(a).repeat_rows(times);
        self.push(v, Op::RepeatRows(a, times))
    }

    /// Joins two tensors along their last axis; leading shapes must agree.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (sa, sb) = (ta.shape(), tb.shape());
        if sa.len() != sb.len() || sa[..sa.len() - 1] != sb[..sb.len() - 1] {
            return Err(dim_err("concat", sa, sb));
        }
        let (ca, cb) = (sa[sa.len() - 1], sb[sb.len() - 1]);
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for (ra, rb) in ta.data().chunks_exact(ca).zip(tb.data().chunks_exact(cb)) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = sa.to_vec();
        *shape.last_mut().unwrap() = ca + cb;
        let v = Tensor::new(&shape, data)?;
        Ok(self.push(v, Op::Concat(a, b)))
    }

    /// Nearest-neighbour 2x upsampling of `[N, H, W, C]`.
    pub fn upsample2x(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let [n, h, w, c] = nhwc(t.shape(), "upsample2x")?;
        let mut data = vec![0.0; n * 4 * h * w * c];
        for b in 0..n {
            for y in 0..2 * h {
                for x in 0..2 * w {
                    let src = ((b * h + y / 2) * w + x / 2) * c;
                    let dst = ((b * 2 * h + y) * 2 * w + x) * c;
                    data[dst..dst + c].copy_from_slice(&t.data()[src..src + c]);
                }
            }
        }
        let v = Tensor::new(&[n, 2 * h, 2 * w, c], data)?;
        Ok(self.push(v, Op::Upsample2x(a)))
    }

    /// 2-D convolution of `input[N, H, W, Cin]` with
    /// `weight[k, k, Cin, Cout]`, zero padding, no bias.
    pub fn conv2d(&mut self, input: Var, weight: Var, geom: ConvGeom) -> Result<Var> {
        let x = self.value(input);
        let w = self.value(weight);
        let [n, h, wd, cin] = nhwc(x.shape(), "conv2d")?;
        let ws = w.shape();
        if ws.len() != 4 || ws[0] != geom.kernel || ws[1] != geom.kernel || ws[2] != cin {
            return Err(dim_err("conv2d", x.shape(), ws));
        }
        let cout = ws[3];
        let (ho, wo) = match (geom.out_size(h), geom.out_size(wd)) {
            (Some(a), Some(b)) => (a, b),
            _ => return Err(dim_err("conv2d", x.shape(), ws)),
        };
        let kdim = geom.kernel * geom.kernel * cin;
        let cols = im2col(x.data(), [n, h, wd, cin], geom, ho, wo);
        let out = gemm(&cols, w.data(), n * ho * wo, kdim, cout);
        let v = Tensor::new(&[n, ho, wo, cout], out)?;
        Ok(self.push(
            v,
            Op::Conv2d {
                input,
                weight,
                geom,
                cols,
            },
        ))
    }

    /// Selects rows of `table[V, D]`: the result is `[ids.len(), D]`.
    pub fn gather(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (rows, cols) = t.dims2()?;
        let mut data = Vec::with_capacity(ids.len() * cols);
        for &id in ids {
            if id >= rows {
                return Err(Error::Vocabulary { id, size: rows });
            }
            data.extend_from_slice(t.row(id));
        }
        let v = Tensor::new(&[ids.len(), cols], data)?;
        Ok(self.push(v, Op::Gather(table, ids.to_vec())))
    }

    /// Full bilinear form: `out[n, i] = x[n] · W[i] · c[n]ᵀ` for
    /// `x[N, D]`, `W[O, D, D']`, `c[N, D']`.
    pub fn bilinear(&mut self, x: Var, w: Var, c: Var) -> Result<Var> {
        let (tx, tw, tc) = (self.value(x), self.value(w), self.value(c));
        let (n, d) = tx.dims2()?;
        let (n2, dc) = tc.dims2()?;
        let ws = tw.shape();
        if n != n2 || ws.len() != 3 || ws[1] != d || ws[2] != dc {
            return Err(dim_err("bilinear", &[n, d, dc], ws));
        }
        let o = ws[0];
        let mut out = Vec::with_capacity(n * o);
        for s in 0..n {
            let xr = tx.row(s);
            let cr = tc.row(s);
            for i in 0..o {
                let wi = &tw.data()[i * d * dc..(i + 1) * d * dc];
                let mut acc = 0.0;
                for (a, wrow) in xr.iter().zip(wi.chunks_exact(dc)) {
                    let mut inner = 0.0;
                    for (wv, cv) in wrow.iter().zip(cr) {
                        inner += wv * cv;
                    }
                    acc += a * inner;
                }
                out.push(acc);
            }
        }
        let v = Tensor::new(&[n, o], out)?;
        Ok(self.push(v, Op::Bilinear(x, w, c)))
    }

    /// Mean softmax cross-entropy of `logits[N, C]` against class labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        let (n, c) = t.dims2()?;
        if labels.len() != n {
            return Err(dim_err("softmax_cross_entropy", t.shape(), &[labels.len()]));
        }
        let mut probs = Vec::with_capacity(n * c);
        let mut loss = 0.0;
        for (row, &y) in t.data().chunks_exact(c).zip(labels) {
            if y >= c {
                return Err(Error::Vocabulary { id: y, size: c });
            }
            let p = softmax(row);
            loss -= p[y].max(1e-300).ln();
            probs.extend(p);
        }
        let v = Tensor::scalar(loss / n as f64);
        Ok(self.push(
            v,
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let rv = self.value(root);
        if rv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar root, got shape {:?}",
                rv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        let mut out = Gradients::new();
        if !self.nodes[root.0].requires_grad {
            return Ok(out);
        }
        grads[root.0] = Some(Tensor::ones(rv.shape()));
        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if let Some(id) = node.param {
                match out.get_mut(&id) {
                    Some(acc) => acc.add_assign(&g)?,
                    None => {
                        out.insert(id, g);
                    }
                }
                continue;
            }
            for (parent, pg) in self.local_grads(node, &g)? {
                if !self.nodes[parent.0].requires_grad {
                    continue;
                }
                match &mut grads[parent.0] {
                    Some(acc) => acc.add_assign(&pg)?,
                    slot @ None => *slot = Some(pg),
                }
            }
        }
        Ok(out)
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Contributions of `node`'s upstream gradient `g` to its parents,
    /// in parent-registration order.
    fn local_grads(&self, node: &Node, g: &Tensor) -> Result<Vec<(Var, Tensor)>> {
        use Op::*;
        let val = |v: Var| self.value(v);
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Leaf => {}
            MatMul(a, b) => {
                let (m, k) = val(*a).dims2()?;
                let n = val(*b).shape()[1];
                if self.needs(*a) {
                    let ga = gemm_nt(g.data(), val(*b).data(), m, n, k);
                    out.push((*a, Tensor::new(&[m, k], ga)?));
                }
                if self.needs(*b) {
                    let gb = gemm_tn(val(*a).data(), g.data(), m, k, n);
                    out.push((*b, Tensor::new(&[k, n], gb)?));
                }
            }
            Transpose(a) => out.push((*a, g.transpose()?)),
            Add(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.clone()));
            }
            Sub(a, b) => {
                out.push((*a, g.clone()));
                out.push((*b, g.scale(-1.0)));
            }
            Mul(a, b) => {
                if self.needs(*a) {
                    out.push((*a, g.hadamard(val(*b))?));
                }
                if self.needs(*b) {
                    out.push((*b, g.hadamard(val(*a))?));
                }
            }
            Scale(a, s) => out.push((*a, g.scale(*s))),
            AddScalar(a) | Reshape(a) => {
                out.push((*a, g.reshape(val(*a).shape())?));
            }
            Square(a) => out.push((*a, g.hadamard(&val(*a).scale(2.0))?)),
            Sum(a) => out.push((*a, Tensor::full(val(*a).shape(), g.data()[0]))),
            Mean(a) => {
                let n = val(*a).len() as f64;
                out.push((*a, Tensor::full(val(*a).shape(), g.data()[0] / n)));
            }
            Tanh(a) => out.push((*a, g.hadamard(&node.value.map(|y| 1.0 - y * y))?)),
            Sigmoid(a) => out.push((*a, g.hadamard(&node.value.map(|y| y * (1.0 - y)))?)),
            LeakyRelu(a, slope) => {
                let s = *slope;
                let d = val(*a).map(|x| if x > 0.0 { 1.0 } else { s });
                out.push((*a, g.hadamard(&d)?));
            }
            AddBias(x, b) => {
                out.push((*x, g.clone()));
                if self.needs(*b) {
                    let c = val(*b).len();
                    let mut gb = vec![0.0; c];
                    for row in g.data().chunks_exact(c) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*b, Tensor::new(&[c], gb)?));
                }
            }
            RepeatRows(a, times) => {
                let src = val(*a);
                let cols = g.shape()[1];
                let mut acc = vec![0.0; src.len()];
                for (r, row) in g.data().chunks_exact(cols).enumerate() {
                    let dst = &mut acc[(r / times) * cols..(r / times + 1) * cols];
                    for (d, v) in dst.iter_mut().zip(row) {
                        *d += v;
                    }
                }
                out.push((*a, Tensor::new(src.shape(), acc)?));
            }
            Concat(a, b) => {
                let ca = *val(*a).shape().last().unwrap();
                let cb = *val(*b).shape().last().unwrap();
                let mut ga = Vec::with_capacity(val(*a).len());
                let mut gb = Vec::with_capacity(val(*b).len());
                for row in g.data().chunks_exact(ca + cb) {
                    ga.extend_from_slice(&row[..ca]);
                    gb.extend_from_slice(&row[ca..]);
                }
                out.push((*a, Tensor::new(val(*a).shape(), ga)?));
                out.push((*b, Tensor::new(val(*b).shape(), gb)?));
            }
            Upsample2x(a) => {
                let [n, h, w, c] = nhwc(val(*a).shape(), "upsample2x")?;
                let mut acc = vec![0.0; n * h * w * c];
                for b in 0..n {
                    for y in 0..2 * h {
                        for x in 0..2 * w {
                            let dst = ((b * h + y / 2) * w + x / 2) * c;
                            let src = ((b * 2 * h + y) * 2 * w + x) * c;
                            for k in 0..c {
                                acc[dst + k] += g.data()[src + k];
                            }
                        }
                    }
                }
                out.push((*a, Tensor::new(val(*a).shape(), acc)?));
            }
            Conv2d {
                input,
                weight,
                geom,
                cols,
            } => {
                let xs = val(*input).shape();
                let [n, h, w, cin] = nhwc(xs, "conv2d")?;
                let ws = val(*weight).shape();
                let cout = ws[3];
                let kdim = geom.kernel * geom.kernel * cin;
                let rows = g.len() / cout;
                let (ho, wo) = (g.shape()[1], g.shape()[2]);
                if self.needs(*input) {
                    let gcols = gemm_nt(g.data(), val(*weight).data(), rows, cout, kdim);
                    let gx = col2im(&gcols, [n, h, w, cin], *geom, ho, wo);
                    out.push((*input, Tensor::new(xs, gx)?));
                }
                if self.needs(*weight) {
                    let gw = gemm_tn(cols, g.data(), rows, kdim, cout);
                    out.push((*weight, Tensor::new(ws, gw)?));
                }
            }
            Gather(table, ids) => {
                let t = val(*table);
                let cols = t.shape()[1];
                let mut acc = vec![0.0; t.len()];
                for (row, &id) in g.data().chunks_exact(cols).zip(ids) {
                    for (d, v) in acc[id * cols..(id + 1) * cols].iter_mut().zip(row) {
                        *d += v;
                    }
                }
                out.push((*table, Tensor::new(t.shape(), acc)?));
            }
            Bilinear(x, w, c) => {
                let (tx, tw, tc) = (val(*x), val(*w), val(*c));
                let (n, d) = tx.dims2()?;
                let dc = tc.shape()[1];
                let o = tw.shape()[0];
                let mut gx = vec![0.0; n * d];
                let mut gw = vec![0.0; tw.len()];
                let mut gc = vec![0.0; n * dc];
                for s in 0..n {
                    let xr = tx.row(s);
                    let cr = tc.row(s);
                    for i in 0..o {
                        let gi = g.data()[s * o + i];
                        let wi = &tw.data()[i * d * dc..(i + 1) * d * dc];
                        for a in 0..d {
                            let wrow = &wi[a * dc..(a + 1) * dc];
                            let mut inner = 0.0;
                            for (b, (&wv, &cv)) in wrow.iter().zip(cr).enumerate() {
                                inner += wv * cv;
                                gc[s * dc + b] += gi * xr[a] * wv;
                                gw[i * d * dc + a * dc + b] += gi * xr[a] * cv;
                            }
                            gx[s * d + a] += gi * inner;
                        }
                    }
                }
                out.push((*x, Tensor::new(tx.shape(), gx)?));
                out.push((*w, Tensor::new(tw.shape(), gw)?));
                out.push((*c, Tensor::new(tc.shape(), gc)?));
            }
            SoftmaxXent {
                logits,
                labels,
                probs,
            } => {
                let t = val(*logits);
                let (n, c) = t.dims2()?;
                let scale = g.data()[0] / n as f64;
                let mut gl = probs.clone();
                for (row, &y) in gl.chunks_exact_mut(c).zip(labels) {
                    row[y] -= 1.0;
                    for v in row.iter_mut() {
                        *v *= scale;
                    }
                }
                out.push((*logits, Tensor::new(t.shape(), gl)?));
            }
        }
        Ok(out)
    }
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax of one row.
pub fn softmax(row: &[f64]) -> Vec<f64> {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
    let z: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / z).collect()
}

fn nhwc(shape: &[usize], op: &'static str) -> Result<[usize; 4]> {
    shape
        .try_into()
        .map_err(|_| dim_err(op, shape, &[0, 0, 0, 0]))
}

fn im2col(x: &[f64], [n, h, w, c]: [usize; 4], g: ConvGeom, ho: usize, wo: usize) -> Vec<f64> {
    let k = g.kernel;
    let kdim = k * k * c;
    let mut cols = vec![0.0; n * ho * wo * kdim];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * kdim;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = ((b * h + iy as usize) * w + ix as usize) * c;
                        let dst = row + (ky * k + kx) * c;
                        cols[dst..dst + c].copy_from_slice(&x[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], [n, h, w, c]: [usize; 4], g: ConvGeom, ho: usize, wo: usize) -> Vec<f64> {
    let k = g.kernel;
    let kdim = k * k * c;
    let mut x = vec![0.0; n * h * w * c];
    for b in 0..n {
        for oy in 0..ho {
            for ox in 0..wo {
                let row = ((b * ho + oy) * wo + ox) * kdim;
                for ky in 0..k {
                    let iy = (oy * g.stride + ky) as isize - g.pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for kx in 0..k {
                        let ix = (ox * g.stride + kx) as isize - g.pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = ((b * h + iy as usize) * w + ix as usize) * c;
                        let src = row + (ky * k + kx) * c;
                        for j in 0..c {
                            x[dst + j] += cols[src + j];
                        }
                    }
                }
            }
        }
    }
    x
}

/// Central-difference gradient of a scalar function:
/// `(f(x + h·eᵢ) − f(x − h·eᵢ)) / 2h` for every coordinate `i`.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Parameter(format!("step must be positive, got {h}")));
    }
    let mut probe = x.clone();
    let mut grad = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + h;
        let up = f(&probe)?;
        probe.data_mut()[i] = orig - h;
        let down = f(&probe)?;
        probe.data_mut()[i] = orig;
        if !up.is_finite() || !down.is_finite() {
            return Err(Error::NonFinite(format!(
                "objective evaluated at coordinate {i}"
            )));
        }
        grad.push((up - down) / (2.0 * h));
    }
    Tensor::new(x.shape(), grad)
}

/// Default finite-difference step.
pub const FD_STEP: f64 = 1e-5;

/// Largest elementwise relative error between two gradients. Entries
/// whose absolute difference is at most `abs_floor` count as agreeing.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64], abs_floor: f64) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &b)| {
            let diff = (a - b).abs();
            if diff <= abs_floor {
                0.0
            } else {
                diff / a.abs().max(b.abs())
            }
        })
        .fold(0.0, f64::max)
}
