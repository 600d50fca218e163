//! Reverse-mode differentiation over matrix-valued nodes.
//!
//! A [`Tape`] records every primitive evaluated during a forward pass along
//! with the values backward needs. [`Tape::backward`] walks the record once,
//! newest node first, accumulating adjoints. Spike nodes are differentiated
//! with the configured surrogate; everything else is exact.

use std::collections::{BTreeMap, HashMap};

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::neuron::{heaviside, surrogate_grad, SurrogateSpec};
use crate::scalar::Scalar;
use crate::tensor::{matmul_at_into, matmul_bt_into, Tensor};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index of a trainable tensor inside a [`crate::training::ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

/// How spike nodes evaluate in the forward pass.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub enum SpikeForward {
    /// Heaviside step; the normal mode.
    #[default]
    Hard,
    /// The surrogate's antiderivative. Only used to build finite-difference
    /// references whose derivative equals the surrogate backward pass.
    Smoothed,
}

/// Geometry of a 2-D convolution over channel-major rows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeometry {
    pub in_channels: usize,
    pub in_h: usize,
    pub in_w: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl ConvGeometry {
    pub fn out_h(&self) -> usize {
        conv_out(self.in_h, self.kernel, self.stride, self.padding)
    }

    pub fn out_w(&self) -> usize {
        conv_out(self.in_w, self.kernel, self.stride, self.padding)
    }

    pub fn in_len(&self) -> usize {
        self.in_channels * self.in_h * self.in_w
    }

    pub fn out_len(&self) -> usize {
        self.out_channels * self.out_h() * self.out_w()
    }

    pub fn patch_len(&self) -> usize {
        self.in_channels * self.kernel * self.kernel
    }

    /// For every (output pixel, patch element) the flat input index, or
    /// `u32::MAX` inside the zero padding.
    fn gather_map(&self) -> Vec<u32> {
        let (oh, ow, k) = (self.out_h(), self.out_w(), self.kernel);
        let q_len = self.patch_len();
        let mut map = vec![u32::MAX; oh * ow * q_len];
        for oy in 0..oh {
            for ox in 0..ow {
                let p = oy * ow + ox;
                for c in 0..self.in_channels {
                    for ky in 0..k {
                        for kx in 0..k {
                            let y = (oy * self.stride + ky) as isize - self.padding as isize;
                            let x = (ox * self.stride + kx) as isize - self.padding as isize;
                            if y < 0 || x < 0 || y >= self.in_h as isize || x >= self.in_w as isize {
                                continue;
                            }
                            let q = (c * k + ky) * k + kx;
                            map[p * q_len + q] =
                                (c * self.in_h * self.in_w + y as usize * self.in_w + x as usize) as u32;
                        }
                    }
                }
            }
        }
        map
    }
}

/// Output length of a convolution along one axis; 0 when the kernel does
/// not fit.
pub fn conv_out(input: usize, kernel: usize, stride: usize, padding: usize) -> usize {
    let span = input + 2 * padding;
    if kernel == 0 || stride == 0 || span < kernel {
        0
    } else {
        (span - kernel) / stride + 1
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    AddBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MulConst(Var, Tensor<T>),
    Scale(Var, T),
    Sigmoid(Var),
    Tanh(Var),
    Spike {
        v: Var,
        v_th: T,
        surrogate: SurrogateSpec<T>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Var,
        geom: ConvGeometry,
        map: Vec<u32>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        spatial: usize,
        inv_std: Vec<T>,
        xhat: Tensor<T>,
        batch_stats: bool,
    },
    SliceRows {
        a: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    SliceCols {
        a: Var,
        start: usize,
    },
    RowNorm {
        a: Var,
        start: usize,
        len: usize,
    },
    Mean(Var),
    Reshape(Var),
}

struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
    param: Option<ParamId>,
}

/// Batch statistics produced by a training-mode batch norm, per channel.
#[derive(Clone, Debug)]
pub struct BatchStats<T> {
    pub mean: Vec<T>,
    pub var: Vec<T>,
}

pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    params: HashMap<ParamId, Var>,
    spike_forward: SpikeForward,
    spent: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

/// Adjoints of every trainable leaf reached from the root.
#[derive(Clone, Debug)]
pub struct Gradients<T> {
    by_param: BTreeMap<ParamId, Tensor<T>>,
    by_leaf: BTreeMap<usize, Tensor<T>>,
    /// Node indices in the order backward processed them.
    pub visit_order: Vec<usize>,
}

impl<T: Scalar> Gradients<T> {
    pub fn param(&self, id: ParamId) -> Option<&Tensor<T>> {
        self.by_param.get(&id)
    }

    pub fn leaf(&self, v: Var) -> Option<&Tensor<T>> {
        self.by_leaf.get(&v.0)
    }

    pub fn params(&self) -> impl Iterator<Item = (ParamId, &Tensor<T>)> {
        self.by_param.iter().map(|(&k, v)| (k, v))
    }

    /// Weighted sum `sum_k w_k * g_k` over gradient sets of the same model.
    pub fn combine(parts: &[(T, Gradients<T>)]) -> Self {
        let mut by_param: BTreeMap<ParamId, Tensor<T>> = BTreeMap::new();
        for (w, g) in parts {
            for (&id, t) in &g.by_param {
                let scaled = t.map(|x| x * *w);
                match by_param.get_mut(&id) {
                    Some(acc) => acc.add_assign(&scaled),
                    None => {
                        by_param.insert(id, scaled);
                    }
                }
            }
        }
        Self {
            by_param,
            by_leaf: BTreeMap::new(),
            visit_order: Vec::new(),
        }
    }

    pub fn scale(&mut self, k: T) {
        for t in self.by_param.values_mut() {
            t.scale_assign(k);
        }
    }

    pub fn is_finite(&self) -> bool {
        self.by_param.values().all(|t| t.is_finite())
    }

    pub fn global_norm(&self) -> T {
        self.by_param.values().map(|g| g.sum_squares()).sum::<T>().sqrt()
    }
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            params: HashMap::new(),
            spike_forward: SpikeForward::Hard,
            spent: false,
        }
    }

    pub fn with_spike_forward(mode: SpikeForward) -> Self {
        Self {
            spike_forward: mode,
            ..Self::new()
        }
    }

    pub fn spike_forward(&self) -> SpikeForward {
        self.spike_forward
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
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

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Non-differentiable input.
    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable input that is not a parameter.
    pub fn leaf(&mut self, value: Tensor<T>) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Parameter leaf; repeated calls with the same id return the same node.
    pub fn param(&mut self, id: ParamId, value: &Tensor<T>) -> Var {
        if let Some(&v) = self.params.get(&id) {
            return v;
        }
        let v = self.push(value.clone(), Op::Leaf, true);
        self.nodes[v.0].param = Some(id);
        self.params.insert(id, v);
        v
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa == sb {
            Ok(())
        } else {
            Err(Error::Shape(format!("{what}: {sa:?} vs {sb:?}")))
        }
    }

    pub fn matmul(&mut self, a: Var, w: Var) -> Result<Var> {
        let out = self.value(a).matmul(self.value(w))?;
        let rg = self.rg(a) || self.rg(w);
        Ok(self.push(out, Op::MatMul(a, w), rg))
    }

    /// Adds a `1 x cols` row to every row of `a`.
    pub fn add_bias(&mut self, a: Var, bias: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(Error::Shape(format!(
                "bias {:?} for activations {:?}",
                bv.shape(),
                av.shape()
            )));
        }
        let mut out = av.clone();
        for r in 0..out.rows() {
            for (o, &b) in out.row_mut(r).iter_mut().zip(bv.data()) {
                *o += b;
            }
        }
        let rg = self.rg(a) || self.rg(bias);
        Ok(self.push(out, Op::AddBias(a, bias), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "sub")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let out = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(out, Op::Mul(a, b), rg))
    }

    /// Hadamard product with a constant; the constant receives no gradient.
    pub fn mul_const(&mut self, a: Var, k: Tensor<T>) -> Result<Var> {
        if self.value(a).shape() != k.shape() {
            return Err(Error::Shape(format!(
                "mul_const: {:?} vs {:?}",
                self.value(a).shape(),
                k.shape()
            )));
        }
        let out = self.value(a).zip_map(&k, |x, y| x * y);
        let rg = self.rg(a);
        Ok(self.push(out, Op::MulConst(a, k), rg))
    }

    pub fn scale(&mut self, a: Var, k: T) -> Var {
        let out = self.value(a).map(|x| x * k);
        let rg = self.rg(a);
        self.push(out, Op::Scale(a, k), rg)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        let rg = self.rg(a);
        self.push(out, Op::Sigmoid(a), rg)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| x.tanh());
        let rg = self.rg(a);
        self.push(out, Op::Tanh(a), rg)
    }

    /// Firing nonlinearity. Forward is the Heaviside step (or the surrogate
    /// antiderivative in [`SpikeForward::Smoothed`] mode); backward uses the
    /// surrogate derivative.
    pub fn spike(&mut self, v: Var, v_th: T, surrogate: SurrogateSpec<T>) -> Var {
        let out = match self.spike_forward {
            SpikeForward::Hard => self.value(v).map(|x| heaviside(x, v_th)),
            SpikeForward::Smoothed => self.value(v).map(|x| surrogate.antiderivative(x, v_th)),
        };
        let rg = self.rg(v);
        self.push(out, Op::Spike { v, v_th, surrogate }, rg)
    }

    /// `x: rows x (C_in*H*W)`, `w: C_out x (C_in*k*k)`, `b: 1 x C_out`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var, geom: ConvGeometry) -> Result<Var> {
        let (xv, wv, bv) = (self.value(x), self.value(w), self.value(b));
        if xv.cols() != geom.in_len() {
            return Err(Error::Shape(format!(
                "conv input has {} columns, geometry expects {}",
                xv.cols(),
                geom.in_len()
            )));
        }
        if wv.shape() != (geom.out_channels, geom.patch_len()) || bv.shape() != (1, geom.out_channels) {
            return Err(Error::Shape(format!(
                "conv weights {:?} / bias {:?} do not match geometry {geom:?}",
                wv.shape(),
                bv.shape()
            )));
        }
        if geom.out_h() == 0 || geom.out_w() == 0 {
            return Err(Error::Shape(format!("conv output is empty for {geom:?}")));
        }
        let map = geom.gather_map();
        let p_len = geom.out_h() * geom.out_w();
        let q_len = geom.patch_len();
        let cout = geom.out_channels;
        let mut out = Tensor::zeros(xv.rows(), geom.out_len());
        let (xd, wd, bd) = (xv.data(), wv.data(), bv.data());
        let in_len = geom.in_len();
        out.data_mut()
            .par_chunks_mut(cout * p_len)
            .enumerate()
            .for_each(|(r, orow)| {
                let xrow = &xd[r * in_len..(r + 1) * in_len];
                let mut nz: Vec<(usize, T)> = Vec::with_capacity(q_len);
                for p in 0..p_len {
                    nz.clear();
                    for q in 0..q_len {
                        let idx = map[p * q_len + q];
                        if idx != u32::MAX {
                            let val = xrow[idx as usize];
                            if val != T::zero() {
                                nz.push((q, val));
                            }
                        }
                    }
                    for co in 0..cout {
                        let wrow = &wd[co * q_len..(co + 1) * q_len];
                        let mut acc = bd[co];
                        for &(q, val) in &nz {
                            acc += wrow[q] * val;
                        }
                        orow[co * p_len + p] = acc;
                    }
                }
            });
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(out, Op::Conv2d { x, w, b, geom, map }, rg))
    }

    /// Batch normalisation over all rows and spatial positions of each
    /// channel. With `running = None` the batch statistics are used (and
    /// returned); otherwise the supplied frozen mean/variance are applied.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        channels: usize,
        eps: T,
        running: Option<(&[T], &[T])>,
    ) -> Result<(Var, BatchStats<T>)> {
        let xv = self.value(x);
        if channels == 0 || xv.cols() % channels != 0 {
            return Err(Error::Shape(format!(
                "{} columns do not split into {channels} channels",
                xv.cols()
            )));
        }
        let (gv, bv) = (self.value(gamma), self.value(beta));
        if gv.shape() != (1, channels) || bv.shape() != (1, channels) {
            return Err(Error::Shape("batch norm affine shape".into()));
        }
        let spatial = xv.cols() / channels;
        let n = T::lit((xv.rows() * spatial) as f64);
        let mut mean = vec![T::zero(); channels];
        let mut var = vec![T::zero(); channels];
        match running {
            Some((m, v)) => {
                mean.copy_from_slice(m);
                var.copy_from_slice(v);
            }
            None => {
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    for c in 0..channels {
                        mean[c] += row[c * spatial..(c + 1) * spatial].iter().copied().sum::<T>();
                    }
                }
                for m in &mut mean {
                    *m /= n;
                }
                for r in 0..xv.rows() {
                    let row = xv.row(r);
                    for c in 0..channels {
                        for &val in &row[c * spatial..(c + 1) * spatial] {
                            let d = val - mean[c];
                            var[c] += d * d;
                        }
                    }
                }
                for v in &mut var {
                    *v /= n;
                }
            }
        }
        let inv_std: Vec<T> = var.iter().map(|&v| T::one() / (v + eps).sqrt()).collect();
        let mut xhat = xv.clone();
        let mut out = xv.clone();
        for r in 0..xv.rows() {
            let xr = xhat.row_mut(r);
            for c in 0..channels {
                for val in &mut xr[c * spatial..(c + 1) * spatial] {
                    *val = (*val - mean[c]) * inv_std[c];
                }
            }
            let orow = out.row_mut(r);
            for c in 0..channels {
                let (g, b) = (gv.data()[c], bv.data()[c]);
                for (o, &h) in orow[c * spatial..(c + 1) * spatial]
                    .iter_mut()
                    .zip(&xr[c * spatial..(c + 1) * spatial])
                {
                    *o = g * h + b;
                }
            }
        }
        let rg = self.rg(x) || self.rg(gamma) || self.rg(beta);
        let stats = BatchStats { mean, var };
        let node = self.push(
            out,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                spatial,
                inv_std,
                xhat,
                batch_stats: running.is_none(),
            },
            rg,
        );
        Ok((node, stats))
    }

    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        if start + len > self.value(a).rows() {
            return Err(Error::Shape("row slice out of range".into()));
        }
        let out = self.value(a).slice_rows(start, len);
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceRows { a, start }, rg))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor<T>> = parts.iter().map(|&p| self.value(p)).collect();
        let out = Tensor::concat_rows(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(out, Op::ConcatRows(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::Shape("column slice out of range".into()));
        }
        let mut out = Tensor::zeros(av.rows(), len);
        for r in 0..av.rows() {
            out.row_mut(r).copy_from_slice(&av.row(r)[start..start + len]);
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::SliceCols { a, start }, rg))
    }

    /// Euclidean norm of columns `start..start+len` of every row: `rows x 1`.
    pub fn row_norm(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let av = self.value(a);
        if start + len > av.cols() {
            return Err(Error::Shape("row norm range out of bounds".into()));
        }
        let mut out = Tensor::zeros(av.rows(), 1);
        for r in 0..av.rows() {
            let s: T = av.row(r)[start..start + len].iter().map(|&x| x * x).sum();
            out.set(r, 0, s.sqrt());
        }
        let rg = self.rg(a);
        Ok(self.push(out, Op::RowNorm { a, start, len }, rg))
    }

    pub fn reshape(&mut self, a: Var, rows: usize, cols: usize) -> Result<Var> {
        let out = self.value(a).clone().reshape(rows, cols)?;
        let rg = self.rg(a);
        Ok(self.push(out, Op::Reshape(a), rg))
    }

    /// Mean of all elements: `1 x 1`.
    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let av = self.value(a);
        if av.is_empty() {
            return Err(Error::Empty("mean of an empty tensor"));
        }
        let m = av.sum() / T::lit(av.len() as f64);
        let rg = self.rg(a);
        Ok(self.push(Tensor::scalar(m), Op::Mean(a), rg))
    }

    /// Gradients of the scalar `root`. Consumes the record; a second call
    /// fails with [`Error::TapeSpent`].
    pub fn backward(&mut self, root: Var) -> Result<Gradients<T>> {
        Ok(self.backward_parts(&[root])?.pop().expect("one root"))
    }

    /// Independent gradients for several scalar roots sharing one forward
    /// pass.
    pub fn backward_parts(&mut self, roots: &[Var]) -> Result<Vec<Gradients<T>>> {
        if self.spent {
            return Err(Error::TapeSpent);
        }
        for &r in roots {
            if self.value(r).shape() != (1, 1) {
                return Err(Error::Shape(format!(
                    "backward root must be 1x1, got {:?}",
                    self.value(r).shape()
                )));
            }
        }
        self.spent = true;
        Ok(roots.iter().map(|&r| self.sweep(r)).collect())
    }

    fn sweep(&self, root: Var) -> Gradients<T> {
        let mut adj: Vec<Option<Tensor<T>>> = (0..=root.0).map(|_| None).collect();
        adj[root.0] = Some(Tensor::scalar(T::one()));
        let mut out = Gradients {
            by_param: BTreeMap::new(),
            by_leaf: BTreeMap::new(),
            visit_order: Vec::new(),
        };
        for i in (0..=root.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            out.visit_order.push(i);
            self.propagate(node, g, &mut adj, &mut out, i);
        }
        out
    }

    fn propagate(
        &self,
        node: &Node<T>,
        g: Tensor<T>,
        adj: &mut [Option<Tensor<T>>],
        out: &mut Gradients<T>,
        index: usize,
    ) {
        let nodes = &self.nodes;
        let mut acc = |v: Var, delta: Tensor<T>| {
            if !nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(t) => t.add_assign(&delta),
                slot @ None => *slot = Some(delta),
            }
        };
        match &node.op {
            Op::Leaf => {
                if let Some(id) = node.param {
                    out.by_param.insert(id, g);
                } else {
                    out.by_leaf.insert(index, g);
                }
            }
            Op::MatMul(a, w) => {
                let (av, wv) = (self.value(*a), self.value(*w));
                if self.rg(*a) {
                    let mut da = Tensor::zeros(av.rows(), av.cols());
                    matmul_bt_into(&g, wv, &mut da);
                    acc(*a, da);
                }
                if self.rg(*w) {
                    let mut dw = Tensor::zeros(wv.rows(), wv.cols());
                    matmul_at_into(av, &g, &mut dw);
                    acc(*w, dw);
                }
            }
            Op::AddBias(a, b) => {
                if self.rg(*b) {
                    let mut db = Tensor::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (d, &x) in db.data_mut().iter_mut().zip(g.row(r)) {
                            *d += x;
                        }
                    }
                    acc(*b, db);
                }
                acc(*a, g);
            }
            Op::Add(a, b) => {
                acc(*a, g.clone());
                acc(*b, g);
            }
            Op::Sub(a, b) => {
                acc(*b, g.map(|x| -x));
                acc(*a, g);
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a), self.value(*b));
                acc(*a, g.zip_map(bv, |x, y| x * y));
                acc(*b, g.zip_map(av, |x, y| x * y));
            }
            Op::MulConst(a, k) => acc(*a, g.zip_map(k, |x, y| x * y)),
            Op::Scale(a, k) => {
                let k = *k;
                acc(*a, g.map(|x| x * k));
            }
            Op::Sigmoid(a) => {
                acc(*a, g.zip_map(&node.value, |x, s| x * s * (T::one() - s)));
            }
            Op::Tanh(a) => {
                acc(*a, g.zip_map(&node.value, |x, t| x * (T::one() - t * t)));
            }
            Op::Spike { v, v_th, surrogate } => {
                let vv = self.value(*v);
                acc(*v, g.zip_map(vv, |x, p| x * surrogate_grad(p, *v_th, surrogate)));
            }
            Op::Conv2d { x, w, b, geom, map } => {
                let (dx, dw, db) = conv_backward(&g, self.value(*x), self.value(*w), geom, map, self.rg(*x));
                if let Some(dx) = dx {
                    acc(*x, dx);
                }
                acc(*w, dw);
                acc(*b, db);
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                spatial,
                inv_std,
                xhat,
                batch_stats,
            } => {
                let channels = inv_std.len();
                let s = *spatial;
                let gv = self.value(*gamma);
                let mut dgamma = Tensor::zeros(1, channels);
                let mut dbeta = Tensor::zeros(1, channels);
                for r in 0..g.rows() {
                    let (gr, hr) = (g.row(r), xhat.row(r));
                    for c in 0..channels {
                        for k in c * s..(c + 1) * s {
                            dgamma.data_mut()[c] += gr[k] * hr[k];
                            dbeta.data_mut()[c] += gr[k];
                        }
                    }
                }
                if self.rg(*x) {
                    let n = T::lit((g.rows() * s) as f64);
                    let mut dx = Tensor::zeros(g.rows(), g.cols());
                    for r in 0..g.rows() {
                        let (gr, hr) = (g.row(r), xhat.row(r));
                        let dr = dx.row_mut(r);
                        for c in 0..channels {
                            let scale = gv.data()[c] * inv_std[c];
                            for k in c * s..(c + 1) * s {
                                dr[k] = if *batch_stats {
                                    scale / n * (n * gr[k] - dbeta.data()[c] - hr[k] * dgamma.data()[c])
                                } else {
                                    scale * gr[k]
                                };
                            }
                        }
                    }
                    acc(*x, dx);
                }
                acc(*gamma, dgamma);
                acc(*beta, dbeta);
            }
            Op::SliceRows { a, start } => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                let c = av.cols();
                da.data_mut()[start * c..start * c + g.len()].copy_from_slice(g.data());
                acc(*a, da);
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let rows = self.value(p).rows();
                    if self.rg(p) {
                        acc(p, g.slice_rows(offset, rows));
                    }
                    offset += rows;
                }
            }
            Op::SliceCols { a, start } => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..g.rows() {
                    da.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                }
                acc(*a, da);
            }
            Op::RowNorm { a, start, len } => {
                let av = self.value(*a);
                let mut da = Tensor::zeros(av.rows(), av.cols());
                for r in 0..av.rows() {
                    let norm = node.value.get(r, 0);
                    if norm == T::zero() {
                        continue;
                    }
                    let k = g.get(r, 0) / norm;
                    for c in *start..*start + *len {
                        da.set(r, c, k * av.get(r, c));
                    }
                }
                acc(*a, da);
            }
            Op::Reshape(a) => {
                let (r, c) = self.value(*a).shape();
                acc(*a, g.reshape(r, c).expect("same element count"));
            }
            Op::Mean(a) => {
                let av = self.value(*a);
                let k = g.get(0, 0) / T::lit(av.len() as f64);
                acc(*a, Tensor::filled(av.rows(), av.cols(), k));
            }
        }
    }
}

#[inline]
pub fn sigmoid<T: Scalar>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

const CONV_CHUNK: usize = 4;

fn conv_backward<T: Scalar>(
    g: &Tensor<T>,
    x: &Tensor<T>,
    w: &Tensor<T>,
    geom: &ConvGeometry,
    map: &[u32],
    want_dx: bool,
) -> (Option<Tensor<T>>, Tensor<T>, Tensor<T>) {
    let p_len = geom.out_h() * geom.out_w();
    let q_len = geom.patch_len();
    let cout = geom.out_channels;
    let in_len = geom.in_len();
    let rows = x.rows();
    // Partial weight gradients per fixed row chunk, summed in chunk order so
    // the result does not depend on the thread count.
    let partials: Vec<(Vec<T>, Vec<T>)> = (0..rows.div_ceil(CONV_CHUNK))
        .into_par_iter()
        .map(|chunk| {
            let mut dw = vec![T::zero(); cout * q_len];
            let mut db = vec![T::zero(); cout];
            let mut nz: Vec<(usize, T)> = Vec::with_capacity(q_len);
            for r in chunk * CONV_CHUNK..((chunk + 1) * CONV_CHUNK).min(rows) {
                let xrow = x.row(r);
                let grow = g.row(r);
                for p in 0..p_len {
                    nz.clear();
                    for q in 0..q_len {
                        let idx = map[p * q_len + q];
                        if idx != u32::MAX {
                            let val = xrow[idx as usize];
                            if val != T::zero() {
                                nz.push((q, val));
                            }
                        }
                    }
                    for co in 0..cout {
                        let gv = grow[co * p_len + p];
                        if gv == T::zero() {
                            continue;
                        }
                        db[co] += gv;
                        let dwrow = &mut dw[co * q_len..(co + 1) * q_len];
                        for &(q, val) in &nz {
                            dwrow[q] += gv * val;
                        }
                    }
                }
            }
            (dw, db)
        })
        .collect();
    let mut dw = Tensor::zeros(cout, q_len);
    let mut db = Tensor::zeros(1, cout);
    for (pw, pb) in partials {
        for (d, s) in dw.data_mut().iter_mut().zip(pw) {
            *d += s;
        }
        for (d, s) in db.data_mut().iter_mut().zip(pb) {
            *d += s;
        }
    }
    let dx = want_dx.then(|| {
        let mut dx = Tensor::zeros(rows, in_len);
        dx.data_mut().par_chunks_mut(in_len).enumerate().for_each(|(r, dxrow)| {
            let grow = g.row(r);
            for p in 0..p_len {
                for co in 0..cout {
                    let gv = grow[co * p_len + p];
                    if gv == T::zero() {
                        continue;
                    }
                    let wrow = w.row(co);
                    for q in 0..q_len {
                        let idx = map[p * q_len + q];
                        if idx != u32::MAX {
                            dxrow[idx as usize] += gv * wrow[q];
                        }
                    }
                }
            }
        });
        dx
    });
    (dx, dw, db)
}
