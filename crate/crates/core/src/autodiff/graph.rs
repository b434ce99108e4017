use std::collections::HashMap;

use super::tensor::{gemm, gemm_nt, gemm_tn};
use super::{ParamGrads, ParamStore, Tensor};
use crate::error::{Error, Result};

/// Handle to a node in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct Var(usize);

enum Value {
    Owned(Tensor),
    Param(usize),
}

type BackwardFn = Box<dyn Fn(&Graph<'_>, &[f32], &mut Grads) + Send + Sync>;

struct Node {
    value: Value,
    requires_grad: bool,
    backward: Option<BackwardFn>,
}

/// Gradient buffers indexed by node.
pub struct Grads {
    bufs: Vec<Option<Vec<f32>>>,
}

impl Grads {
    fn acc(&mut self, g: &Graph<'_>, v: Var) -> Option<&mut [f32]> {
        if !g.nodes[v.0].requires_grad {
            return None;
        }
        let n = g.value(v).len();
        Some(self.bufs[v.0].get_or_insert_with(|| vec![0.0; n]))
    }

    pub fn wrt(&self, v: Var) -> Option<&[f32]> {
        self.bufs.get(v.0).and_then(|b| b.as_deref())
    }
}

/// Dynamic reverse-mode tape.
///
/// Every op records its output value and, when any input requires a
/// gradient and recording is enabled, a closure that pushes the output
/// gradient back to its inputs. Parameters are borrowed from a
/// [`ParamStore`] rather than copied.
pub struct Graph<'p> {
    store: Option<&'p ParamStore>,
    nodes: Vec<Node>,
    param_nodes: HashMap<usize, Var>,
    record: bool,
}

const LN_EPS: f32 = 1e-5;

impl<'p> Graph<'p> {
    /// A recording graph over `store`.
    pub fn new(store: &'p ParamStore) -> Self {
        Self {
            store: Some(store),
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            record: true,
        }
    }

    /// Forward-only graph: no backward closures are kept.
    pub fn inference(store: &'p ParamStore) -> Self {
        Self {
            record: false,
            ..Self::new(store)
        }
    }

    /// Recording graph without a parameter store, for leaf-only computations.
    pub fn detached() -> Graph<'static> {
        Graph {
            store: None,
            nodes: Vec::new(),
            param_nodes: HashMap::new(),
            record: true,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        match &self.nodes[v.0].value {
            Value::Owned(t) => t,
            Value::Param(id) => &self.store.expect("param node without store").by_id(*id).value,
        }
    }

    pub fn data(&self, v: Var) -> &[f32] {
        self.value(v).data()
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.value(v).shape()
    }

    fn dims(&self, v: Var) -> (usize, usize) {
        self.value(v).dims2()
    }

    fn requires(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, inputs: &[Var], backward: BackwardFn) -> Var {
        let requires_grad = self.record && inputs.iter().any(|&i| self.requires(i));
        self.nodes.push(Node {
            value: Value::Owned(value),
            requires_grad,
            backward: if requires_grad { Some(backward) } else { None },
        });
        Var(self.nodes.len() - 1)
    }

    /// Constant input; never receives a gradient.
    pub fn input(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            requires_grad: false,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Free variable that receives a gradient.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: Value::Owned(t),
            requires_grad: self.record,
            backward: None,
        });
        Var(self.nodes.len() - 1)
    }

    /// Parameter by name. Repeated lookups return the same node.
    pub fn param(&mut self, name: &str) -> Result<Var> {
        let store = self
            .store
            .ok_or_else(|| Error::Config(format!("graph has no parameter store (asked for `{name}`)")))?;
        let id = store
            .id(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        if let Some(&v) = self.param_nodes.get(&id) {
            return Ok(v);
        }
        self.nodes.push(Node {
            value: Value::Param(id),
            requires_grad: self.record,
            backward: None,
        });
        let v = Var(self.nodes.len() - 1);
        self.param_nodes.insert(id, v);
        Ok(v)
    }

    /// Runs the reverse pass from a single-element output.
    pub fn backward(&self, out: Var) -> Result<Grads> {
        if self.value(out).len() != 1 {
            return Err(Error::shape("backward", self.shape(out), &[1]));
        }
        let mut grads = Grads {
            bufs: (0..self.nodes.len()).map(|_| None).collect(),
        };
        if !self.requires(out) {
            return Ok(grads);
        }
        grads.bufs[out.0] = Some(vec![1.0]);
        for i in (0..=out.0).rev() {
            let node = &self.nodes[i];
            let Some(bw) = &node.backward else { continue };
            let Some(g) = grads.bufs[i].take() else { continue };
            bw(self, &g, &mut grads);
        }
        Ok(grads)
    }

    /// Collects parameter gradients out of a reverse pass.
    pub fn param_grads(&self, grads: &Grads) -> ParamGrads {
        let n = self.store.map(|s| s.len()).unwrap_or(0);
        let mut out = ParamGrads::new(n);
        let mut ids: Vec<_> = self.param_nodes.iter().collect();
        ids.sort();
        for (&id, &v) in ids {
            if let Some(g) = grads.wrt(v) {
                out.add(id, g);
            }
        }
        out
    }

    // ---- elementwise -------------------------------------------------

    fn check_same(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(op, self.shape(a), self.shape(b)));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("add", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            t,
            &[a, b],
            Box::new(move |g, dy, gr| {
                for v in [a, b] {
                    if let Some(d) = gr.acc(g, v) {
                        d.iter_mut().zip(dy).for_each(|(x, y)| *x += y);
                    }
                }
            }),
        ))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("sub", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x - y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            t,
            &[a, b],
            Box::new(move |g, dy, gr| {
                if let Some(d) = gr.acc(g, a) {
                    d.iter_mut().zip(dy).for_each(|(x, y)| *x += y);
                }
                if let Some(d) = gr.acc(g, b) {
                    d.iter_mut().zip(dy).for_each(|(x, y)| *x -= y);
                }
            }),
        ))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same("mul", a, b)?;
        let data = self.data(a).iter().zip(self.data(b)).map(|(x, y)| x * y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            t,
            &[a, b],
            Box::new(move |g, dy, gr| {
                if g.requires(a) {
                    let bv = g.data(b);
                    let d = gr.acc(g, a).unwrap();
                    for i in 0..d.len() {
                        d[i] += dy[i] * bv[i];
                    }
                }
                if g.requires(b) {
                    let av = g.data(a);
                    let d = gr.acc(g, b).unwrap();
                    for i in 0..d.len() {
                        d[i] += dy[i] * av[i];
                    }
                }
            }),
        ))
    }

    pub fn scale(&mut self, a: Var, s: f32) -> Var {
        let t = Tensor::new(self.shape(a), self.data(a).iter().map(|x| x * s).collect()).unwrap();
        self.push(
            t,
            &[a],
            Box::new(move |g, dy, gr| {
                if let Some(d) = gr.acc(g, a) {
                    d.iter_mut().zip(dy).for_each(|(x, y)| *x += s * y);
                }
            }),
        )
    }

    /// Adds a constant tensor (no gradient flows into it).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        if self.shape(a) != c.shape() {
            return Err(Error::shape("add_const", self.shape(a), c.shape()));
        }
        let data = self.data(a).iter().zip(c.data()).map(|(x, y)| x + y).collect();
        let t = Tensor::new(self.shape(a), data)?;
        Ok(self.push(
            t,
            &[a],
            Box::new(move |g, dy, gr| {
                if let Some(d) = gr.acc(g, a) {
                    d.iter_mut().zip(dy).for_each(|(x, y)| *x += y);
                }
            }),
        ))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let t = Tensor::new(self.shape(a), self.data(a).iter().map(|x| x.max(0.0)).collect()).unwrap();
        self.push(
            t,
            &[a],
            Box::new(move |g, dy, gr| {
                let x = g.data(a);
                if let Some(d) = gr.acc(g, a) {
                    for i in 0..d.len() {
                        if x[i] > 0.0 {
                            d[i] += dy[i];
                        }
                    }
                }
            }),
        )
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).clone().reshaped(shape)?;
        Ok(self.push(
            t,
            &[a],
            Box::new(move |g, dy, gr| {
                if let Some(d) = gr.acc(g, a) {
                    d.iter_mut().zip(dy).for_each(|(x, y)| *x += y);
                }
            }),
        ))
    }

    // ---- matrix ops --------------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.matmul_impl(a, b, false)
    }

    /// With `sorted`, every inner product is summed in ascending term order,
    /// which makes the result exactly invariant to a joint permutation of
    /// `a`'s columns and `b`'s rows.
    fn matmul_impl(&mut self, a: Var, b: Var, sorted: bool) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 || self.shape(a).len() > 2 || self.shape(b).len() > 2 {
            return Err(Error::shape("matmul", self.shape(a), self.shape(b)));
        }
        let mut out = vec![0.0; m * n];
        if sorted {
            let (av, bv) = (self.data(a), self.data(b));
            let mut buf = vec![0.0f32; k];
            for i in 0..m {
                for j in 0..n {
                    for p in 0..k {
                        buf[p] = av[i * k + p] * bv[p * n + j];
                    }
                    out[i * n + j] = sorted_sum(&mut buf);
                }
            }
        } else {
            gemm(self.data(a), self.data(b), &mut out, m, k, n);
        }
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            t,
            &[a, b],
            Box::new(move |g, dy, gr| {
                if g.requires(a) {
                    let bv = g.data(b);
                    gemm_nt(dy, &bv, gr.acc(g, a).unwrap(), m, n, k);
                }
                if g.requires(b) {
                    let av = g.data(a);
                    gemm_tn(&av, dy, gr.acc(g, b).unwrap(), k, m, n);
                }
            }),
        ))
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let (m, n) = self.dims(a);
        let x = self.data(a);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = x[i * n + j];
            }
        }
        let t = Tensor::new(&[n, m], out).unwrap();
        self.push(
            t,
            &[a],
            Box::new(move |g, dy, gr| {
                if let Some(d) = gr.acc(g, a) {
                    for i in 0..m {
                        for j in 0..n {
                            d[i * n + j] += dy[j * m + i];
                        }
                    }
                }
            }),
        )
    }

    /// `x[m×n] + b` with `b` of `n` elements added to every row.
    pub fn add_row_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(b).len() != n {
            return Err(Error::shape("add_row_bias", self.shape(x), self.shape(b)));
        }
        let bv = self.data(b);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(bv).for_each(|(o, b)| *o += b);
        }
        let t = Tensor::new(&[m, n], out)?;
        Ok(self.push(
            t,
            &[x, b],
            Box::new(move |g, dy, gr| {
                if let Some(d) = gr.acc(g, x) {
                    d.iter_mut().zip(dy).for_each(|(o, y)| *o += y);
                }
                if let Some(d) = gr.acc(g, b) {
                    for row in dy.chunks_exact(n) {
                        d.iter_mut().zip(row).for_each(|(o, y)| *o += y);
                    }
                }
            }),
        ))
    }

    /// `x[c×l] + b` with `b` of `c` elements added to every column
    /// (one offset per channel).
    pub fn add_col_bias(&mut self, x: Var, b: Var) -> Result<Var> {
        self.add_seg_bias(x, b, 1)
    }

    /// Segmented channel bias: `x[c × S·l]` holds `S` sequences side by side
    /// and `b[S × c]` gives each sequence its own per-channel offset.
    pub fn add_seg_bias(&mut self, x: Var, b: Var, segs: usize) -> Result<Var> {
        let (c, n) = self.dims(x);
        if segs == 0 || n % segs != 0 || self.value(b).len() != segs * c {
            return Err(Error::shape("add_seg_bias", self.shape(x), self.shape(b)));
        }
        let l = n / segs;
        let bv = self.data(b);
        let mut out = self.data(x).to_vec();
        for (ci, row) in out.chunks_exact_mut(n).enumerate() {
            for (si, seg) in row.chunks_exact_mut(l).enumerate() {
                let bi = bv[si * c + ci];
                seg.iter_mut().for_each(|o| *o += bi);
            }
        }
        let t = Tensor::new(&[c, n], out)?;
        Ok(self.push(
            t,
            &[x, b],
            Box::new(move |g, dy, gr| {
                if let Some(d) = gr.acc(g, x) {
                    d.iter_mut().zip(dy).for_each(|(o, y)| *o += y);
                }
                if let Some(d) = gr.acc(g, b) {
                    for (ci, row) in dy.chunks_exact(n).enumerate() {
                        for (si, seg) in row.chunks_exact(l).enumerate() {
                            d[si * c + ci] += seg.iter().sum::<f32>();
                        }
                    }
                }
            }),
        ))
    }

    /// `x[c×l] ⊙ s` with `s` of `c` elements scaling each channel.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Result<Var> {
        self.mul_seg(x, s, 1)
    }

    /// Segmented channel scaling, the multiplicative twin of
    /// [`Graph::add_seg_bias`].
    pub fn mul_seg(&mut self, x: Var, s: Var, segs: usize) -> Result<Var> {
        let (c, n) = self.dims(x);
        if segs == 0 || n % segs != 0 || self.value(s).len() != segs * c {
            return Err(Error::shape("mul_seg", self.shape(x), self.shape(s)));
        }
        let l = n / segs;
        let sv = self.data(s);
        let mut out = self.data(x).to_vec();
        for (ci, row) in out.chunks_exact_mut(n).enumerate() {
            for (si, seg) in row.chunks_exact_mut(l).enumerate() {
                let f = sv[si * c + ci];
                seg.iter_mut().for_each(|o| *o *= f);
            }
        }
        let t = Tensor::new(&[c, n], out)?;
        Ok(self.push(
            t,
            &[x, s],
            Box::new(move |g, dy, gr| {
                if g.requires(x) {
                    let sv = g.data(s);
                    let d = gr.acc(g, x).unwrap();
                    for (ci, (drow, yrow)) in d.chunks_exact_mut(n).zip(dy.chunks_exact(n)).enumerate() {
                        for (si, (dseg, yseg)) in drow.chunks_exact_mut(l).zip(yrow.chunks_exact(l)).enumerate() {
                            let f = sv[si * c + ci];
                            dseg.iter_mut().zip(yseg).for_each(|(o, y)| *o += f * y);
                        }
                    }
                }
                if g.requires(s) {
                    let xv = g.data(x);
                    let d = gr.acc(g, s).unwrap();
                    for (ci, (xrow, yrow)) in xv.chunks_exact(n).zip(dy.chunks_exact(n)).enumerate() {
                        for (si, (xseg, yseg)) in xrow.chunks_exact(l).zip(yrow.chunks_exact(l)).enumerate() {
                            d[si * c + ci] += xseg.iter().zip(yseg).map(|(a, b)| a * b).sum::<f32>();
                        }
                    }
                }
            }),
        ))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > n {
            return Err(Error::shape("slice_cols", self.shape(x), &[start, end]));
        }
        let w = end - start;
        let xv = self.data(x);
        let mut out = Vec::with_capacity(m * w);
        for row in xv.chunks_exact(n) {
            out.extend_from_slice(&row[start..end]);
        }
        let t = Tensor::new(&[m, w], out)?;
        Ok(self.push(
            t,
            &[x],
            Box::new(move |g, dy, gr| {
                if let Some(d) = gr.acc(g, x) {
                    for (drow, yrow) in d.chunks_exact_mut(n).zip(dy.chunks_exact(w)) {
                        drow[start..end].iter_mut().zip(yrow).for_each(|(o, y)| *o += y);
                    }
                }
            }),
        ))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let (m, n) = self.dims(x);
        if start >= end || end > m {
            return Err(Error::shape("slice_rows", self.shape(x), &[start, end]));
        }
        let out = self.data(x)[start * n..end * n].to_vec();
        let t = Tensor::new(&[end - start, n], out)?;
        Ok(self.push(
            t,
            &[x],
            Box::new(move |g, dy, gr| {
                if let Some(d) = gr.acc(g, x) {
                    d[start * n..end * n].iter_mut().zip(dy).for_each(|(o, y)| *o += y);
                }
            }),
        ))
    }

    pub fn concat_cols(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::EmptyInput("concat_cols of nothing".into()));
        };
        let m = self.dims(first).0;
        let widths: Vec<usize> = xs.iter().map(|&x| self.dims(x).1).collect();
        for &x in xs {
            if self.dims(x).0 != m {
                return Err(Error::shape("concat_cols", self.shape(first), self.shape(x)));
            }
        }
        let total: usize = widths.iter().sum();
        let mut out = vec![0.0; m * total];
        let mut off = 0;
        for (&x, &w) in xs.iter().zip(&widths) {
            let xv = self.data(x);
            for i in 0..m {
                out[i * total + off..i * total + off + w].copy_from_slice(&xv[i * w..(i + 1) * w]);
            }
            off += w;
        }
        let t = Tensor::new(&[m, total], out)?;
        let xs = xs.to_vec();
        Ok(self.push(
            t,
            &xs.clone(),
            Box::new(move |g, dy, gr| {
                let mut off = 0;
                for (&x, &w) in xs.iter().zip(&widths) {
                    if let Some(d) = gr.acc(g, x) {
                        for i in 0..m {
                            d[i * w..(i + 1) * w]
                                .iter_mut()
                                .zip(&dy[i * total + off..i * total + off + w])
                                .for_each(|(o, y)| *o += y);
                        }
                    }
                    off += w;
                }
            }),
        ))
    }

    pub fn concat_rows(&mut self, xs: &[Var]) -> Result<Var> {
        let Some(&first) = xs.first() else {
            return Err(Error::EmptyInput("concat_rows of nothing".into()));
        };
        let n = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = Vec::with_capacity(xs.len());
        for &x in xs {
            let (m, n2) = self.dims(x);
            if n2 != n {
                return Err(Error::shape("concat_rows", self.shape(first), self.shape(x)));
            }
            out.extend_from_slice(self.data(x));
            rows.push(m);
        }
        let total: usize = rows.iter().sum();
        let t = Tensor::new(&[total, n], out)?;
        let xs = xs.to_vec();
        Ok(self.push(
            t,
            &xs.clone(),
            Box::new(move |g, dy, gr| {
                let mut off = 0;
                for (&x, &m) in xs.iter().zip(&rows) {
                    if let Some(d) = gr.acc(g, x) {
                        d.iter_mut().zip(&dy[off * n..(off + m) * n]).for_each(|(o, y)| *o += y);
                    }
                    off += m;
                }
            }),
        ))
    }

    // ---- normalization / activation ----------------------------------

    /// Row-wise layer normalization over the last axis, `ε = 1e-5`, with
    /// learnable `gamma` and `beta` of that axis' length.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let (m, n) = self.dims(x);
        if self.value(gamma).len() != n || self.value(beta).len() != n {
            return Err(Error::shape("layer_norm", self.shape(x), self.shape(gamma)));
        }
        let xv = self.data(x);
        let gv = self.data(gamma);
        let bv = self.data(beta);
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row = &xv[i * n..(i + 1) * n];
            let (mu, inv) = moments(row);
            for j in 0..n {
                out[i * n + j] = (row[j] - mu) * inv * gv[j] + bv[j];
            }
        }
        let t = Tensor::new(self.shape(x), out)?;
        Ok(self.push(
            t,
            &[x, gamma, beta],
            Box::new(move |g, dy, gr| {
                let xv = g.data(x);
                let gv = g.data(gamma);
                let mut dgamma = vec![0.0; n];
                let mut dbeta = vec![0.0; n];
                let mut dx = vec![0.0; m * n];
                for i in 0..m {
                    let row = &xv[i * n..(i + 1) * n];
                    let dyr = &dy[i * n..(i + 1) * n];
                    let (mu, inv) = moments(row);
                    let mut mean_dxh = 0.0;
                    let mut mean_dxh_xh = 0.0;
                    for j in 0..n {
                        let xh = (row[j] - mu) * inv;
                        let dxh = dyr[j] * gv[j];
                        dgamma[j] += dyr[j] * xh;
                        dbeta[j] += dyr[j];
                        mean_dxh += dxh;
                        mean_dxh_xh += dxh * xh;
                    }
                    mean_dxh /= n as f32;
                    mean_dxh_xh /= n as f32;
                    for j in 0..n {
                        let xh = (row[j] - mu) * inv;
                        let dxh = dyr[j] * gv[j];
                        dx[i * n + j] = inv * (dxh - mean_dxh - xh * mean_dxh_xh);
                    }
                }
                if let Some(d) = gr.acc(g, x) {
                    d.iter_mut().zip(&dx).for_each(|(o, v)| *o += v);
                }
                if let Some(d) = gr.acc(g, gamma) {
                    d.iter_mut().zip(&dgamma).for_each(|(o, v)| *o += v);
                }
                if let Some(d) = gr.acc(g, beta) {
                    d.iter_mut().zip(&dbeta).for_each(|(o, v)| *o += v);
                }
            }),
        ))
    }

    /// Softmax along `axis` (0 = down columns, 1 = along rows) of a matrix.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        match axis {
            1 => Ok(self.softmax_rows_impl(x, false)),
            0 => {
                let t = self.transpose(x);
                let s = self.softmax_rows_impl(t, false);
                Ok(self.transpose(s))
            }
            _ => Err(Error::shape("softmax", self.shape(x), &[axis])),
        }
    }

    /// Row softmax; `sorted` sums each denominator in ascending order so the
    /// result does not depend on column order.
    fn softmax_rows_impl(&mut self, x: Var, sorted: bool) -> Var {
        let (m, n) = self.dims(x);
        let mut out = self.data(x).to_vec();
        for row in out.chunks_exact_mut(n) {
            if sorted {
                let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                row.iter_mut().for_each(|v| *v = (*v - mx).exp());
                let mut buf = row.to_vec();
                let denom = sorted_sum(&mut buf);
                row.iter_mut().for_each(|v| *v /= denom);
            } else {
                softmax_in_place(row);
            }
        }
        let t = Tensor::new(self.shape(x), out).unwrap();
        let id = self.nodes.len();
        self.push(
            t,
            &[x],
            Box::new(move |g, dy, gr| {
                let y = g.data(Var(id)).to_vec();
                if let Some(d) = gr.acc(g, x) {
                    for i in 0..m {
                        let yr = &y[i * n..(i + 1) * n];
                        let dyr = &dy[i * n..(i + 1) * n];
                        let dot: f32 = yr.iter().zip(dyr).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            d[i * n + j] += yr[j] * (dyr[j] - dot);
                        }
                    }
                }
            }),
        )
    }

    // ---- convolution / pooling ---------------------------------------

    /// 1D cross-correlation of `x[c_in × l]` with `w[c_out × c_in × k]` and
    /// bias `b[c_out]`. Output length is `(l + 2·pad − k) / stride + 1`.
    pub fn conv1d(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize) -> Result<Var> {
        self.conv1d_seg(x, w, b, stride, pad, 1)
    }

    /// [`Graph::conv1d`] applied independently to `segs` equal-length
    /// sequences laid side by side in `x[c_in × segs·l]`. Padding never
    /// reads across a segment boundary.
    pub fn conv1d_seg(&mut self, x: Var, w: Var, b: Var, stride: usize, pad: usize, segs: usize) -> Result<Var> {
        let (cin, n) = self.dims(x);
        let ws = self.shape(w).to_vec();
        if ws.len() != 3 || ws[1] != cin || self.value(b).len() != ws[0] || stride == 0 || segs == 0 || n % segs != 0 {
            return Err(Error::shape("conv1d", self.shape(x), &ws));
        }
        let l = n / segs;
        let (cout, k) = (ws[0], ws[2]);
        if k > l + 2 * pad {
            return Err(Error::shape("conv1d", self.shape(x), &ws));
        }
        let lo = (l + 2 * pad - k) / stride + 1;
        let geo = ConvGeom { cin, l, k, stride, pad, lo, segs };
        let no = segs * lo;
        let cols = im2col(self.data(x), &geo);
        let mut out = vec![0.0; cout * no];
        gemm(self.data(w), &cols, &mut out, cout, cin * k, no);
        let bv = self.data(b);
        for (row, bi) in out.chunks_exact_mut(no).zip(bv) {
            row.iter_mut().for_each(|o| *o += bi);
        }
        let t = Tensor::new(&[cout, no], out)?;
        Ok(self.push(
            t,
            &[x, w, b],
            Box::new(move |g, dy, gr| {
                if g.requires(w) {
                    let cols = im2col(g.data(x), &geo);
                    gemm_nt(dy, &cols, gr.acc(g, w).unwrap(), cout, no, cin * k);
                }
                if let Some(d) = gr.acc(g, b) {
                    for (di, row) in d.iter_mut().zip(dy.chunks_exact(no)) {
                        *di += row.iter().sum::<f32>();
                    }
                }
                if g.requires(x) {
                    let wv = g.data(w);
                    let mut dcols = vec![0.0; cin * k * no];
                    gemm_tn(&wv, dy, &mut dcols, cin * k, cout, no);
                    col2im_acc(&dcols, &geo, gr.acc(g, x).unwrap());
                }
            }),
        ))
    }

    /// Per-feature max over the first `valid_len` rows of `x[n × d]`;
    /// returns `[1 × d]`. Rows past `valid_len` are never read.
    pub fn max_pool_global(&mut self, x: Var, valid_len: usize) -> Result<Var> {
        let (n, d) = self.dims(x);
        if valid_len == 0 {
            return Err(Error::EmptyInput("max_pool_global with valid_len = 0".into()));
        }
        if valid_len > n {
            return Err(Error::shape("max_pool_global", self.shape(x), &[valid_len]));
        }
        let xv = self.data(x);
        let mut arg = vec![0usize; d];
        let mut out = xv[..d].to_vec();
        for i in 1..valid_len {
            for j in 0..d {
                let v = xv[i * d + j];
                if v > out[j] {
                    out[j] = v;
                    arg[j] = i;
                }
            }
        }
        let t = Tensor::new(&[1, d], out)?;
        Ok(self.push(
            t,
            &[x],
            Box::new(move |g, dy, gr| {
                if let Some(dx) = gr.acc(g, x) {
                    for j in 0..d {
                        dx[arg[j] * d + j] += dy[j];
                    }
                }
            }),
        ))
    }

    /// Mean over rows of `x[n × d]`, giving `[1 × d]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let (n, d) = self.dims(x);
        let mut out = vec![0.0; d];
        for row in self.data(x).chunks_exact(d) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        let inv = 1.0 / n as f32;
        out.iter_mut().for_each(|o| *o *= inv);
        let t = Tensor::new(&[1, d], out).unwrap();
        self.push(
            t,
            &[x],
            Box::new(move |g, dy, gr| {
                if let Some(dx) = gr.acc(g, x) {
                    for row in dx.chunks_exact_mut(d) {
                        row.iter_mut().zip(dy).for_each(|(o, y)| *o += y * inv);
                    }
                }
            }),
        )
    }

    /// Nearest-neighbour resampling of `x[c × l]` to `[c × l_out]`.
    pub fn upsample_nearest(&mut self, x: Var, l_out: usize) -> Result<Var> {
        self.upsample_nearest_seg(x, l_out, 1)
    }

    /// Segment-wise [`Graph::upsample_nearest`]: each of the `segs`
    /// sequences in `x[c × segs·l]` is resampled to `l_out`.
    pub fn upsample_nearest_seg(&mut self, x: Var, l_out: usize, segs: usize) -> Result<Var> {
        let (c, n) = self.dims(x);
        if l_out == 0 || segs == 0 || n % segs != 0 {
            return Err(Error::shape("upsample_nearest", self.shape(x), &[l_out]));
        }
        let l = n / segs;
        let no = segs * l_out;
        let src: Vec<usize> = (0..no).map(|i| (i / l_out) * l + (i % l_out) * l / l_out).collect();
        let xv = self.data(x);
        let mut out = vec![0.0; c * no];
        for ci in 0..c {
            for (o, &s) in src.iter().enumerate() {
                out[ci * no + o] = xv[ci * n + s];
            }
        }
        let t = Tensor::new(&[c, no], out)?;
        Ok(self.push(
            t,
            &[x],
            Box::new(move |g, dy, gr| {
                if let Some(dx) = gr.acc(g, x) {
                    for ci in 0..c {
                        for (o, &s) in src.iter().enumerate() {
                            dx[ci * n + s] += dy[ci * no + o];
                        }
                    }
                }
            }),
        ))
    }

    // ---- attention ---------------------------------------------------

    /// Scaled dot-product attention split over `heads`, on already
    /// projected `q[t × d]`, `k[s × d]`, `v[s × d]`. Key positions at or past
    /// `key_valid_len` get an additive `-1e9` before the softmax. Heads are
    /// concatenated back to `[t × d]`; the output projection is the caller's.
    pub fn multi_head_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        heads: usize,
        key_valid_len: Option<usize>,
    ) -> Result<Var> {
        let (t, d) = self.dims(q);
        let (s, dk) = self.dims(k);
        if heads == 0 || d % heads != 0 {
            return Err(Error::Config(format!(
                "model dim {d} is not divisible by {heads} heads"
            )));
        }
        if dk != d || self.dims(v) != (s, d) {
            return Err(Error::shape("multi_head_attention", self.shape(q), self.shape(k)));
        }
        let mask = match key_valid_len {
            Some(valid) if valid < s => {
                let mut m = Tensor::zeros(&[t, s]);
                for i in 0..t {
                    for j in valid..s {
                        m.data_mut()[i * s + j] = -1e9;
                    }
                }
                Some(m)
            }
            _ => None,
        };
        let dh = d / heads;
        let scale = 1.0 / (dh as f32).sqrt();
        let mut outs = Vec::with_capacity(heads);
        for h in 0..heads {
            let (qh, kh, vh) = if heads == 1 {
                (q, k, v)
            } else {
                (
                    self.slice_cols(q, h * dh, (h + 1) * dh)?,
                    self.slice_cols(k, h * dh, (h + 1) * dh)?,
                    self.slice_cols(v, h * dh, (h + 1) * dh)?,
                )
            };
            let kt = self.transpose(kh);
            let scores = self.matmul(qh, kt)?;
            let mut scores = self.scale(scores, scale);
            if let Some(m) = &mask {
                scores = self.add_const(scores, m)?;
            }
            let attn = self.softmax_rows_impl(scores, true);
            outs.push(self.matmul_impl(attn, vh, true)?);
        }
        if outs.len() == 1 {
            Ok(outs[0])
        } else {
            self.concat_cols(&outs)
        }
    }

    // ---- reductions / losses -----------------------------------------

    pub fn sum(&mut self, x: Var) -> Var {
        let s: f32 = self.data(x).iter().sum();
        self.push(
            Tensor::row_vector(vec![s]).reshaped(&[1]).unwrap(),
            &[x],
            Box::new(move |g, dy, gr| {
                if let Some(d) = gr.acc(g, x) {
                    d.iter_mut().for_each(|o| *o += dy[0]);
                }
            }),
        )
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let s: f32 = self.data(x).iter().map(|v| v * v).sum();
        self.push(
            Tensor::new(&[1], vec![s]).unwrap(),
            &[x],
            Box::new(move |g, dy, gr| {
                let xv = g.data(x);
                if let Some(d) = gr.acc(g, x) {
                    d.iter_mut().zip(xv).for_each(|(o, v)| *o += 2.0 * v * dy[0]);
                }
            }),
        )
    }

    /// Softmax cross-entropy of `logits` (any shape, flattened) against
    /// class `target`.
    pub fn cross_entropy(&mut self, logits: Var, target: usize) -> Result<Var> {
        let z = self.data(logits).to_vec();
        if target >= z.len() {
            return Err(Error::invalid(format!(
                "target class {target} out of range for {} logits",
                z.len()
            )));
        }
        let mut p = z.clone();
        softmax_in_place(&mut p);
        let max = z.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f32>().ln();
        let loss = lse - z[target];
        Ok(self.push(
            Tensor::new(&[1], vec![loss])?,
            &[logits],
            Box::new(move |g, dy, gr| {
                if let Some(d) = gr.acc(g, logits) {
                    for (i, o) in d.iter_mut().enumerate() {
                        let onehot = if i == target { 1.0 } else { 0.0 };
                        *o += dy[0] * (p[i] - onehot);
                    }
                }
            }),
        ))
    }
}

fn moments(row: &[f32]) -> (f32, f32) {
    let n = row.len() as f32;
    let mu = row.iter().sum::<f32>() / n;
    let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f32>() / n;
    (mu, 1.0 / (var + LN_EPS).sqrt())
}

pub(crate) fn softmax_in_place(row: &mut [f32]) {
    let max = row.iter().cloned().fold(f32::NEG_INFINITY, f32::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

/// Order-independent sum: terms are added in ascending order.
fn sorted_sum(terms: &mut [f32]) -> f32 {
    terms.sort_unstable_by(|a, b| a.total_cmp(b));
    terms.iter().sum()
}

#[derive(Clone, Copy)]
struct ConvGeom {
    cin: usize,
    l: usize,
    k: usize,
    stride: usize,
    pad: usize,
    lo: usize,
    segs: usize,
}

/// Column matrix `[c_in·k × segs·lo]`, each segment padded on its own.
fn im2col(x: &[f32], g: &ConvGeom) -> Vec<f32> {
    let (n, no) = (g.segs * g.l, g.segs * g.lo);
    let mut cols = vec![0.0; g.cin * g.k * no];
    for ci in 0..g.cin {
        for kk in 0..g.k {
            let crow = &mut cols[(ci * g.k + kk) * no..(ci * g.k + kk + 1) * no];
            for si in 0..g.segs {
                for o in 0..g.lo {
                    let pos = (o * g.stride + kk) as isize - g.pad as isize;
                    if pos >= 0 && (pos as usize) < g.l {
                        crow[si * g.lo + o] = x[ci * n + si * g.l + pos as usize];
                    }
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`], accumulated into `dx`.
fn col2im_acc(dcols: &[f32], g: &ConvGeom, dx: &mut [f32]) {
    let (n, no) = (g.segs * g.l, g.segs * g.lo);
    for ci in 0..g.cin {
        for kk in 0..g.k {
            let crow = &dcols[(ci * g.k + kk) * no..(ci * g.k + kk + 1) * no];
            for si in 0..g.segs {
                for o in 0..g.lo {
                    let pos = (o * g.stride + kk) as isize - g.pad as isize;
                    if pos >= 0 && (pos as usize) < g.l {
                        dx[ci * n + si * g.l + pos as usize] += crow[si * g.lo + o];
                    }
                }
            }
        }
    }
}
