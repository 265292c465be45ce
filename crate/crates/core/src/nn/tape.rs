//! Minimal reverse-mode differentiation over dense `[C, Z, Y, X]` tensors.
//!
//! A [`Tape`] records every operation of one forward pass. [`Tape::backward`]
//! walks it in reverse and returns the gradient of a scalar node with respect
//! to every parameter that was read through [`Tape::param`].

use super::params::{ParamId, ParamStore};

/// `[channels, z, y, x]`
pub type Shape = [usize; 4];

fn numel(s: &Shape) -> usize {
    s.iter().product()
}

fn spatial(s: &Shape) -> usize {
    s[1] * s[2] * s[3]
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Conv { x: Var, w: Var, b: Var, k: usize },
    GroupNorm { x: Var, gamma: Var, beta: Var, groups: usize, mean: Vec<f64>, rstd: Vec<f64> },
    Silu(Var),
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    AddChannel { x: Var, v: Var },
    ScaleChannel { x: Var, v: Var },
    Pool(Var),
    Upsample2(Var),
    Concat(Vec<Var>),
    Attention { q: Var, k: Var, v: Var, probs: Vec<f64> },
    GlobalAvg(Var),
    GlobalMax { x: Var, argmax: Vec<usize> },
    Mse { x: Var, target: Vec<f64> },
}

#[derive(Debug)]
struct Node {
    shape: Shape,
    value: Vec<f64>,
    op: Op,
    requires_grad: bool,
}

fn inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => vec![],
        Op::Conv { x, w, b, .. } => vec![*x, *w, *b],
        Op::GroupNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::Silu(x) | Op::Relu(x) | Op::Sigmoid(x) | Op::Pool(x) | Op::Upsample2(x) | Op::GlobalAvg(x) => vec![*x],
        Op::Add(a, b) => vec![*a, *b],
        Op::AddChannel { x, v } | Op::ScaleChannel { x, v } => vec![*x, *v],
        Op::Concat(parts) => parts.clone(),
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
        Op::GlobalMax { x, .. } | Op::Mse { x, .. } => vec![*x],
    }
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Start/end of adaptive-pool bin `i` when mapping `n_in` to `n_out`.
fn bin(i: usize, n_in: usize, n_out: usize) -> (usize, usize) {
    let start = i * n_in / n_out;
    let end = ((i + 1) * n_in).div_ceil(n_out);
    (start, end)
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op) -> Var {
        debug_assert_eq!(numel(&shape), value.len());
        let requires_grad = matches!(op, Op::Param(_)) || inputs(&op).iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node { shape, value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> &[f64] {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Constant input.
    pub fn leaf(&mut self, shape: Shape, value: Vec<f64>) -> Var {
        assert_eq!(numel(&shape), value.len(), "leaf shape/value mismatch");
        self.push(shape, value, Op::Leaf)
    }

    /// Reads a parameter; its gradient is reported by [`Tape::backward`].
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let data = store.data(id).to_vec();
        let n = data.len();
        self.push([n, 1, 1, 1], data, Op::Param(id))
    }

    /// Same-padded, stride-1 cubic convolution. `w` is `[co, ci, k, k, k]`
    /// flattened, `b` is `[co]`.
    pub fn conv(&mut self, x: Var, w: Var, b: Var, k: usize) -> Var {
        let xs = self.shape(x);
        let ci = xs[0];
        let wl = self.nodes[w.0].value.len();
        let co = wl / (ci * k * k * k);
        assert_eq!(co * ci * k * k * k, wl, "conv weight size mismatch");
        assert_eq!(self.nodes[b.0].value.len(), co, "conv bias size mismatch");
        let n = spatial(&xs);
        let kk = ci * k * k * k;
        let wv = &self.nodes[w.0].value;
        let bv = &self.nodes[b.0].value;
        let mut out = vec![0.0; co * n];
        let cols_owned;
        let cols: &[f64] = if k == 1 {
            &self.nodes[x.0].value
        } else {
            cols_owned = im2col(&self.nodes[x.0].value, xs, k);
            &cols_owned
        };
        for o in 0..co {
            let row = &mut out[o * n..(o + 1) * n];
            row.fill(bv[o]);
            let wrow = &wv[o * kk..(o + 1) * kk];
            for (j, &wj) in wrow.iter().enumerate() {
                if wj == 0.0 {
                    continue;
                }
                let c = &cols[j * n..(j + 1) * n];
                for (r, &cv) in row.iter_mut().zip(c) {
                    *r += wj * cv;
                }
            }
        }
        self.push([co, xs[1], xs[2], xs[3]], out, Op::Conv { x, w, b, k })
    }

    pub fn group_norm(&mut self, x: Var, gamma: Var, beta: Var, groups: usize) -> Var {
        const EPS: f64 = 1e-5;
        let s = self.shape(x);
        let (c, n) = (s[0], spatial(&s));
        assert!(groups >= 1 && c % groups == 0, "{c} channels not divisible into {groups} groups");
        let cg = c / groups;
        let xv = &self.nodes[x.0].value;
        let g = &self.nodes[gamma.0].value;
        let bt = &self.nodes[beta.0].value;
        let mut out = vec![0.0; c * n];
        let mut means = Vec::with_capacity(groups);
        let mut rstds = Vec::with_capacity(groups);
        for gi in 0..groups {
            let block = &xv[gi * cg * n..(gi + 1) * cg * n];
            let m = block.iter().sum::<f64>() / block.len() as f64;
            let var = block.iter().map(|v| (v - m) * (v - m)).sum::<f64>() / block.len() as f64;
            let r = 1.0 / (var + EPS).sqrt();
            for ch in gi * cg..(gi + 1) * cg {
                for i in 0..n {
                    out[ch * n + i] = (xv[ch * n + i] - m) * r * g[ch] + bt[ch];
                }
            }
            means.push(m);
            rstds.push(r);
        }
        self.push(s, out, Op::GroupNorm { x, gamma, beta, groups, mean: means, rstd: rstds })
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v / (1.0 + (-v).exp())).collect();
        self.push(self.shape(x), out, Op::Silu(x))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| v.max(0.0)).collect();
        self.push(self.shape(x), out, Op::Relu(x))
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.nodes[x.0].value.iter().map(|&v| sigmoid(v)).collect();
        self.push(self.shape(x), out, Op::Sigmoid(x))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "add shape mismatch");
        let out = self.nodes[a.0].value.iter().zip(&self.nodes[b.0].value).map(|(x, y)| x + y).collect();
        self.push(self.shape(a), out, Op::Add(a, b))
    }

    /// `x[c, ·] + v[c]`
    pub fn add_channel(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x);
        let n = spatial(&s);
        let vv = &self.nodes[v.0].value;
        assert_eq!(vv.len(), s[0], "add_channel length mismatch");
        let out = self.nodes[x.0].value.iter().enumerate().map(|(i, &a)| a + vv[i / n]).collect();
        self.push(s, out, Op::AddChannel { x, v })
    }

    /// `x[c, ·] · v[c]`
    pub fn scale_channel(&mut self, x: Var, v: Var) -> Var {
        let s = self.shape(x);
        let n = spatial(&s);
        let vv = &self.nodes[v.0].value;
        assert_eq!(vv.len(), s[0], "scale_channel length mismatch");
        let out = self.nodes[x.0].value.iter().enumerate().map(|(i, &a)| a * vv[i / n]).collect();
        self.push(s, out, Op::ScaleChannel { x, v })
    }

    /// Adaptive average pooling to a `[z, y, x]` grid.
    pub fn pool(&mut self, x: Var, grid: [usize; 3]) -> Var {
        let s = self.shape(x);
        let xv = &self.nodes[x.0].value;
        let out_shape = [s[0], grid[0], grid[1], grid[2]];
        let mut out = vec![0.0; numel(&out_shape)];
        for_each_pool_bin(s, grid, |o_idx, in_idx, inv| {
            out[o_idx] += xv[in_idx] * inv;
        });
        self.push(out_shape, out, Op::Pool(x))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let os = [s[0], 2 * s[1], 2 * s[2], 2 * s[3]];
        let xv = &self.nodes[x.0].value;
        let mut out = vec![0.0; numel(&os)];
        for c in 0..s[0] {
            for z in 0..os[1] {
                for y in 0..os[2] {
                    for xx in 0..os[3] {
                        out[((c * os[1] + z) * os[2] + y) * os[3] + xx] =
                            xv[((c * s[1] + z / 2) * s[2] + y / 2) * s[3] + xx / 2];
                    }
                }
            }
        }
        self.push(os, out, Op::Upsample2(x))
    }

    /// Channel concatenation.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let s0 = self.shape(parts[0]);
        let mut c = 0;
        let mut out = Vec::new();
        for &p in parts {
            let s = self.shape(p);
            assert_eq!(&s[1..], &s0[1..], "concat spatial mismatch");
            c += s[0];
            out.extend_from_slice(&self.nodes[p.0].value);
        }
        self.push([c, s0[1], s0[2], s0[3]], out, Op::Concat(parts.to_vec()))
    }

    /// Single-head scaled dot-product attention over spatial positions.
    /// `q`, `k`, `v` are `[C, N]`; output is `[C, N]` with the shape of `v`.
    pub fn attention(&mut self, q: Var, k: Var, v: Var) -> Var {
        let s = self.shape(v);
        assert_eq!(self.shape(q), s);
        assert_eq!(self.shape(k), s);
        let (c, n) = (s[0], spatial(&s));
        let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
        let scale = 1.0 / (c as f64).sqrt();
        let mut probs = vec![0.0; n * n];
        for i in 0..n {
            let row = &mut probs[i * n..(i + 1) * n];
            for (j, r) in row.iter_mut().enumerate() {
                let mut d = 0.0;
                for ch in 0..c {
                    d += qv[ch * n + i] * kv[ch * n + j];
                }
                *r = d * scale;
            }
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for r in row.iter_mut() {
                *r = (*r - mx).exp();
                sum += *r;
            }
            for r in row.iter_mut() {
                *r /= sum;
            }
        }
        let mut out = vec![0.0; c * n];
        for ch in 0..c {
            for i in 0..n {
                let mut acc = 0.0;
                for j in 0..n {
                    acc += probs[i * n + j] * vv[ch * n + j];
                }
                out[ch * n + i] = acc;
            }
        }
        self.push(s, out, Op::Attention { q, k, v, probs })
    }

    pub fn global_avg(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let n = spatial(&s);
        let xv = &self.nodes[x.0].value;
        let out = (0..s[0]).map(|c| xv[c * n..(c + 1) * n].iter().sum::<f64>() / n as f64).collect();
        self.push([s[0], 1, 1, 1], out, Op::GlobalAvg(x))
    }

    pub fn global_max(&mut self, x: Var) -> Var {
        let s = self.shape(x);
        let n = spatial(&s);
        let xv = &self.nodes[x.0].value;
        let mut out = Vec::with_capacity(s[0]);
        let mut argmax = Vec::with_capacity(s[0]);
        for c in 0..s[0] {
            let (mut bi, mut bv) = (0, f64::NEG_INFINITY);
            for (i, &v) in xv[c * n..(c + 1) * n].iter().enumerate() {
                if v > bv {
                    bi = i;
                    bv = v;
                }
            }
            out.push(bv);
            argmax.push(c * n + bi);
        }
        self.push([s[0], 1, 1, 1], out, Op::GlobalMax { x, argmax })
    }

    /// `mean((x - target)²)` as a scalar node.
    pub fn mse(&mut self, x: Var, target: &[f64]) -> Var {
        let xv = &self.nodes[x.0].value;
        assert_eq!(xv.len(), target.len(), "mse length mismatch");
        let l = xv.iter().zip(target).map(|(a, b)| (a - b) * (a - b)).sum::<f64>() / xv.len() as f64;
        self.push([1, 1, 1, 1], vec![l], Op::Mse { x, target: target.to_vec() })
    }

    /// Gradients of scalar `root` with respect to every parameter read on this
    /// tape, accumulated into `grads` (same layout as the parameter store).
    pub fn backward(&self, root: Var, grads: &mut [Vec<f64>]) {
        assert_eq!(self.nodes[root.0].value.len(), 1, "backward needs a scalar root");
        let mut g: Vec<Option<Vec<f64>>> = (0..self.nodes.len()).map(|_| None).collect();
        g[root.0] = Some(vec![1.0]);

        fn acc<'a>(g: &'a mut [Option<Vec<f64>>], nodes: &[Node], v: Var) -> &'a mut Vec<f64> {
            g[v.0].get_or_insert_with(|| vec![0.0; nodes[v.0].value.len()])
        }

        for idx in (0..=root.0).rev() {
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            let Some(dy) = g[idx].take() else { continue };
            match &node.op {
                Op::Leaf => {}
                Op::Param(id) => {
                    for (a, b) in grads[id.index()].iter_mut().zip(&dy) {
                        *a += b;
                    }
                }
                Op::Conv { x, w, b, k } => {
                    let xs = self.shape(*x);
                    let ci = xs[0];
                    let n = spatial(&xs);
                    let co = node.shape[0];
                    let kk = ci * k * k * k;
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let cols_owned;
                    let cols: &[f64] = if *k == 1 {
                        xv
                    } else {
                        cols_owned = im2col(xv, xs, *k);
                        &cols_owned
                    };
                    {
                        let db = acc(&mut g, &self.nodes, *b);
                        for o in 0..co {
                            db[o] += dy[o * n..(o + 1) * n].iter().sum::<f64>();
                        }
                    }
                    if self.nodes[w.0].requires_grad {
                        let dw = acc(&mut g, &self.nodes, *w);
                        for o in 0..co {
                            let dyo = &dy[o * n..(o + 1) * n];
                            for j in 0..kk {
                                let c = &cols[j * n..(j + 1) * n];
                                dw[o * kk + j] += dyo.iter().zip(c).map(|(a, b)| a * b).sum::<f64>();
                            }
                        }
                    }
                    if !self.nodes[x.0].requires_grad {
                        continue;
                    }
                    let mut dcols = vec![0.0; kk * n];
                    for o in 0..co {
                        let dyo = &dy[o * n..(o + 1) * n];
                        for j in 0..kk {
                            let wj = wv[o * kk + j];
                            if wj == 0.0 {
                                continue;
                            }
                            for (d, &v) in dcols[j * n..(j + 1) * n].iter_mut().zip(dyo) {
                                *d += wj * v;
                            }
                        }
                    }
                    let dx = acc(&mut g, &self.nodes, *x);
                    if *k == 1 {
                        for (a, b) in dx.iter_mut().zip(&dcols) {
                            *a += b;
                        }
                    } else {
                        col2im_add(&dcols, xs, *k, dx);
                    }
                }
                Op::GroupNorm { x, gamma, beta, groups, mean, rstd } => {
                    let s = node.shape;
                    let (c, n) = (s[0], spatial(&s));
                    let cg = c / groups;
                    let xv = &self.nodes[x.0].value;
                    let gv = &self.nodes[gamma.0].value;
                    let mut dgamma = vec![0.0; c];
                    let mut dbeta = vec![0.0; c];
                    let mut dx_local = vec![0.0; c * n];
                    for gi in 0..*groups {
                        let (m, r) = (mean[gi], rstd[gi]);
                        let cnt = (cg * n) as f64;
                        let (mut sum_dxh, mut sum_dxh_xh) = (0.0, 0.0);
                        for ch in gi * cg..(gi + 1) * cg {
                            for i in 0..n {
                                let xh = (xv[ch * n + i] - m) * r;
                                let d = dy[ch * n + i];
                                dgamma[ch] += d * xh;
                                dbeta[ch] += d;
                                let dxh = d * gv[ch];
                                sum_dxh += dxh;
                                sum_dxh_xh += dxh * xh;
                            }
                        }
                        let (mdxh, mdxhxh) = (sum_dxh / cnt, sum_dxh_xh / cnt);
                        for ch in gi * cg..(gi + 1) * cg {
                            for i in 0..n {
                                let xh = (xv[ch * n + i] - m) * r;
                                let dxh = dy[ch * n + i] * gv[ch];
                                dx_local[ch * n + i] = r * (dxh - mdxh - xh * mdxhxh);
                            }
                        }
                    }
                    add_into(acc(&mut g, &self.nodes, *gamma), &dgamma);
                    add_into(acc(&mut g, &self.nodes, *beta), &dbeta);
                    add_into(acc(&mut g, &self.nodes, *x), &dx_local);
                }
                Op::Silu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let d: Vec<f64> = xv
                        .iter()
                        .zip(&dy)
                        .map(|(&v, &d)| {
                            let s = sigmoid(v);
                            d * s * (1.0 + v * (1.0 - s))
                        })
                        .collect();
                    add_into(acc(&mut g, &self.nodes, *x), &d);
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let d: Vec<f64> = xv.iter().zip(&dy).map(|(&v, &d)| if v > 0.0 { d } else { 0.0 }).collect();
                    add_into(acc(&mut g, &self.nodes, *x), &d);
                }
                Op::Sigmoid(x) => {
                    let d: Vec<f64> = node.value.iter().zip(&dy).map(|(&s, &d)| d * s * (1.0 - s)).collect();
                    add_into(acc(&mut g, &self.nodes, *x), &d);
                }
                Op::Add(a, b) => {
                    add_into(acc(&mut g, &self.nodes, *a), &dy);
                    add_into(acc(&mut g, &self.nodes, *b), &dy);
                }
                Op::AddChannel { x, v } => {
                    let n = spatial(&node.shape);
                    let dv: Vec<f64> = dy.chunks(n).map(|c| c.iter().sum()).collect();
                    add_into(acc(&mut g, &self.nodes, *x), &dy);
                    add_into(acc(&mut g, &self.nodes, *v), &dv);
                }
                Op::ScaleChannel { x, v } => {
                    let n = spatial(&node.shape);
                    let xv = &self.nodes[x.0].value;
                    let vv = &self.nodes[v.0].value;
                    let dv: Vec<f64> = dy
                        .chunks(n)
                        .zip(xv.chunks(n))
                        .map(|(d, xc)| d.iter().zip(xc).map(|(a, b)| a * b).sum())
                        .collect();
                    let dx: Vec<f64> = dy.iter().enumerate().map(|(i, d)| d * vv[i / n]).collect();
                    add_into(acc(&mut g, &self.nodes, *x), &dx);
                    add_into(acc(&mut g, &self.nodes, *v), &dv);
                }
                Op::Pool(x) => {
                    let xs = self.shape(*x);
                    let grid = [node.shape[1], node.shape[2], node.shape[3]];
                    let dx = acc(&mut g, &self.nodes, *x);
                    for_each_pool_bin(xs, grid, |o_idx, in_idx, inv| {
                        dx[in_idx] += dy[o_idx] * inv;
                    });
                }
                Op::Upsample2(x) => {
                    let s = self.shape(*x);
                    let os = node.shape;
                    let dx = acc(&mut g, &self.nodes, *x);
                    for c in 0..s[0] {
                        for z in 0..os[1] {
                            for y in 0..os[2] {
                                for xx in 0..os[3] {
                                    dx[((c * s[1] + z / 2) * s[2] + y / 2) * s[3] + xx / 2] +=
                                        dy[((c * os[1] + z) * os[2] + y) * os[3] + xx];
                                }
                            }
                        }
                    }
                }
                Op::Concat(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let len = self.nodes[p.0].value.len();
                        add_into(acc(&mut g, &self.nodes, p), &dy[off..off + len]);
                        off += len;
                    }
                }
                Op::Attention { q, k, v, probs } => {
                    let s = node.shape;
                    let (c, n) = (s[0], spatial(&s));
                    let scale = 1.0 / (c as f64).sqrt();
                    let (qv, kv, vv) = (&self.nodes[q.0].value, &self.nodes[k.0].value, &self.nodes[v.0].value);
                    let mut dv = vec![0.0; c * n];
                    let mut dprob = vec![0.0; n * n];
                    for ch in 0..c {
                        for i in 0..n {
                            let d = dy[ch * n + i];
                            for j in 0..n {
                                dv[ch * n + j] += probs[i * n + j] * d;
                                dprob[i * n + j] += d * vv[ch * n + j];
                            }
                        }
                    }
                    let mut dscore = vec![0.0; n * n];
                    for i in 0..n {
                        let row = &probs[i * n..(i + 1) * n];
                        let drow = &dprob[i * n..(i + 1) * n];
                        let dot: f64 = row.iter().zip(drow).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dscore[i * n + j] = row[j] * (drow[j] - dot) * scale;
                        }
                    }
                    let mut dq = vec![0.0; c * n];
                    let mut dk = vec![0.0; c * n];
                    for ch in 0..c {
                        for i in 0..n {
                            for j in 0..n {
                                let ds = dscore[i * n + j];
                                dq[ch * n + i] += ds * kv[ch * n + j];
                                dk[ch * n + j] += ds * qv[ch * n + i];
                            }
                        }
                    }
                    add_into(acc(&mut g, &self.nodes, *q), &dq);
                    add_into(acc(&mut g, &self.nodes, *k), &dk);
                    add_into(acc(&mut g, &self.nodes, *v), &dv);
                }
                Op::GlobalAvg(x) => {
                    let xs = self.shape(*x);
                    let n = spatial(&xs);
                    let dx = acc(&mut g, &self.nodes, *x);
                    for (c, d) in dy.iter().enumerate() {
                        for v in &mut dx[c * n..(c + 1) * n] {
                            *v += d / n as f64;
                        }
                    }
                }
                Op::GlobalMax { x, argmax } => {
                    let dx = acc(&mut g, &self.nodes, *x);
                    for (d, &i) in dy.iter().zip(argmax) {
                        dx[i] += d;
                    }
                }
                Op::Mse { x, target } => {
                    let xv = &self.nodes[x.0].value;
                    let k = 2.0 * dy[0] / xv.len() as f64;
                    let d: Vec<f64> = xv.iter().zip(target).map(|(a, b)| k * (a - b)).collect();
                    add_into(acc(&mut g, &self.nodes, *x), &d);
                }
            }
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (a, b) in dst.iter_mut().zip(src) {
        *a += b;
    }
}

#[inline]
pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// Calls `f(out_index, in_index, 1/bin_volume)` for every input voxel of every
/// adaptive-pool bin.
fn for_each_pool_bin(s: Shape, grid: [usize; 3], mut f: impl FnMut(usize, usize, f64)) {
    let [c, dz, dy, dx] = s;
    for ch in 0..c {
        for oz in 0..grid[0] {
            let (z0, z1) = bin(oz, dz, grid[0]);
            for oy in 0..grid[1] {
                let (y0, y1) = bin(oy, dy, grid[1]);
                for ox in 0..grid[2] {
                    let (x0, x1) = bin(ox, dx, grid[2]);
                    let inv = 1.0 / ((z1 - z0) * (y1 - y0) * (x1 - x0)) as f64;
                    let o = ((ch * grid[0] + oz) * grid[1] + oy) * grid[2] + ox;
                    for z in z0..z1 {
                        for y in y0..y1 {
                            for x in x0..x1 {
                                f(o, ((ch * dz + z) * dy + y) * dx + x, inv);
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Unfolds `[ci, Z, Y, X]` into `[(ci·k³), Z·Y·X]` columns with zero padding `k/2`.
fn im2col(x: &[f64], s: Shape, k: usize) -> Vec<f64> {
    let [ci, nz, ny, nx] = s;
    let n = nz * ny * nx;
    let p = (k / 2) as isize;
    let mut cols = vec![0.0; ci * k * k * k * n];
    let mut j = 0;
    for c in 0..ci {
        for dz in 0..k {
            for dy in 0..k {
                for dx in 0..k {
                    let col = &mut cols[j * n..(j + 1) * n];
                    let ox = dx as isize - p;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (nx as isize - ox).min(nx as isize).max(0) as usize;
                    for z in 0..nz {
                        let zz = z as isize + dz as isize - p;
                        if zz < 0 || zz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let yy = y as isize + dy as isize - p;
                            if yy < 0 || yy >= ny as isize {
                                continue;
                            }
                            if x_lo >= x_hi {
                                continue;
                            }
                            let src = ((c * nz + zz as usize) * ny + yy as usize) * nx;
                            let dst = (z * ny + y) * nx;
                            let sx = (x_lo as isize + ox) as usize;
                            col[dst + x_lo..dst + x_hi].copy_from_slice(&x[src + sx..src + sx + (x_hi - x_lo)]);
                        }
                    }
                    j += 1;
                }
            }
        }
    }
    cols
}

/// Adjoint of [`im2col`]: scatters column gradients back onto `dx`.
fn col2im_add(cols: &[f64], s: Shape, k: usize, dx_out: &mut [f64]) {
    let [ci, nz, ny, nx] = s;
    let n = nz * ny * nx;
    let p = (k / 2) as isize;
    let mut j = 0;
    for c in 0..ci {
        for dz in 0..k {
            for dy in 0..k {
                for dx in 0..k {
                    let col = &cols[j * n..(j + 1) * n];
                    let ox = dx as isize - p;
                    let x_lo = (-ox).max(0) as usize;
                    let x_hi = (nx as isize - ox).min(nx as isize).max(0) as usize;
                    for z in 0..nz {
                        let zz = z as isize + dz as isize - p;
                        if zz < 0 || zz >= nz as isize {
                            continue;
                        }
                        for y in 0..ny {
                            let yy = y as isize + dy as isize - p;
                            if yy < 0 || yy >= ny as isize || x_lo >= x_hi {
                                continue;
                            }
                            let dst = ((c * nz + zz as usize) * ny + yy as usize) * nx;
                            let src = (z * ny + y) * nx;
                            let sx = (x_lo as isize + ox) as usize;
                            for (a, b) in dx_out[dst + sx..dst + sx + (x_hi - x_lo)]
                                .iter_mut()
                                .zip(&col[src + x_lo..src + x_hi])
                            {
                                *a += b;
                            }
                        }
                    }
                    j += 1;
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params::ParamStore;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_vec(rng: &mut ChaCha8Rng, n: usize) -> Vec<f64> {
        (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()
    }

    /// Direct-loop convolution used as an oracle.
    fn naive_conv(x: &[f64], s: Shape, w: &[f64], b: &[f64], k: usize) -> Vec<f64> {
        let [ci, nz, ny, nx] = s;
        let co = b.len();
        let p = (k / 2) as isize;
        let mut out = vec![0.0; co * nz * ny * nx];
        for o in 0..co {
            for z in 0..nz {
                for y in 0..ny {
                    for xx in 0..nx {
                        let mut acc = b[o];
                        for c in 0..ci {
                            for dz in 0..k {
                                for dy in 0..k {
                                    for dx in 0..k {
                                        let (zz, yy, x2) = (
                                            z as isize + dz as isize - p,
                                            y as isize + dy as isize - p,
                                            xx as isize + dx as isize - p,
                                        );
                                        if zz < 0 || yy < 0 || x2 < 0 || zz >= nz as isize || yy >= ny as isize || x2 >= nx as isize {
                                            continue;
                                        }
                                        acc += w[(((o * ci + c) * k + dz) * k + dy) * k + dx]
                                            * x[((c * nz + zz as usize) * ny + yy as usize) * nx + x2 as usize];
                                    }
                                }
                            }
                        }
                        out[((o * nz + z) * ny + y) * nx + xx] = acc;
                    }
                }
            }
        }
        out
    }

    #[test]
    fn conv_matches_direct_loops() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for &(k, s) in &[(3usize, [3usize, 4, 5, 6]), (1, [4, 2, 3, 2]), (3, [2, 1, 1, 1])] {
            let co = 3;
            let x = rand_vec(&mut rng, numel(&s));
            let w = rand_vec(&mut rng, co * s[0] * k * k * k);
            let b = rand_vec(&mut rng, co);
            let mut store = ParamStore::default();
            let wid = store.add("w", vec![co, s[0], k, k, k], w.clone());
            let bid = store.add("b", vec![co], b.clone());
            let mut tape = Tape::new();
            let xv = tape.leaf(s, x.clone());
            let wv = tape.param(&store, wid);
            let bv = tape.param(&store, bid);
            let y = tape.conv(xv, wv, bv, k);
            let want = naive_conv(&x, s, &w, &b, k);
            for (a, b) in tape.value(y).iter().zip(&want) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn pool_bins_cover_input() {
        assert_eq!(bin(0, 5, 2), (0, 3));
        assert_eq!(bin(1, 5, 2), (2, 5));
        assert_eq!(bin(3, 8, 4), (6, 8));
        let mut tape = Tape::new();
        let x = tape.leaf([1, 2, 2, 2], (0..8).map(|v| v as f64).collect());
        let p = tape.pool(x, [1, 1, 1]);
        assert_eq!(tape.value(p), &[3.5]);
    }

    /// Finite-difference check through a chain touching every op.
    #[test]
    fn op_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut store = ParamStore::default();
        let s: Shape = [4, 3, 2, 3];
        let w = store.add("w", vec![4, 4, 3, 3, 3], rand_vec(&mut rng, 4 * 4 * 27));
        let b = store.add("b", vec![4], rand_vec(&mut rng, 4));
        let gm = store.add("g", vec![4], rand_vec(&mut rng, 4));
        let bt = store.add("bt", vec![4], rand_vec(&mut rng, 4));
        let cv = store.add("cv", vec![4], rand_vec(&mut rng, 4));
        let x0 = rand_vec(&mut rng, numel(&s));
        let target = rand_vec(&mut rng, 8 * 8 * 4 * 8);

        let run = |store: &ParamStore| -> (Tape, Var) {
            let mut t = Tape::new();
            let x = t.leaf(s, x0.clone());
            let (wv, bv, gv, btv, cvv) =
                (t.param(store, w), t.param(store, b), t.param(store, gm), t.param(store, bt), t.param(store, cv));
            let h = t.conv(x, wv, bv, 3);
            let h = t.group_norm(h, gv, btv, 2);
            let h = t.silu(h);
            let a = t.attention(h, x, h);
            let h = t.add(a, h);
            let h = t.add_channel(h, cvv);
            let r = t.relu(h);
            let avg = t.global_avg(r);
            let mx = t.global_max(h);
            let sum = t.add(avg, mx);
            let gate = t.sigmoid(sum);
            let h = t.scale_channel(h, gate);
            let p = t.pool(h, [2, 1, 2]);
            let cat = t.concat(&[p, p]);
            let cat = t.concat(&[cat]);
            let half = t.pool(cat, [2, 1, 2]);
            let up = t.upsample2(half);
            let up = t.upsample2(up);
            let l = t.mse(up, &target);
            (t, l)
        };
        let (tape, root) = run(&store);
        let mut grads = store.zeros_like();
        tape.backward(root, &mut grads);
        let h = 1e-6;
        for id in store.ids() {
            for i in 0..store.data(id).len() {
                let mut plus = store.clone();
                plus.data_mut(id)[i] += h;
                let mut minus = store.clone();
                minus.data_mut(id)[i] -= h;
                let (tp, lp) = run(&plus);
                let (tm, lm) = run(&minus);
                let fd = (tp.value(lp)[0] - tm.value(lm)[0]) / (2.0 * h);
                let an = grads[id.index()][i];
                assert!((fd - an).abs() < 1e-6 * (1.0 + an.abs()), "{} [{i}]: fd {fd} vs {an}", store.name(id));
            }
        }
    }
}
