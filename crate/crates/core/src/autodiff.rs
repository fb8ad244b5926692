//! A small reverse-mode tape over [`Tensor`]s.
//!
//! The graph is built eagerly: every op computes its value immediately and
//! records how to push a gradient back to its inputs. Only the handful of ops
//! the toy denoisers need are provided. Feature maps are `[C, H, W]`; matrices
//! are `[rows, cols]`.

use crate::tensor::{avg_pool2, gemm, upsample2, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Scale(Var, f64),
    /// `x[c, ..] + b[c]`
    AddLeadBias(Var, Var),
    /// `x[.., j] + b[j]`
    AddTrailBias(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Conv { x: Var, w: Var, k: usize },
    Silu(Var),
    AvgPool2(Var),
    Upsample2(Var),
    Concat(Var, Var),
    SoftmaxRows(Var),
    /// rows of `x[s, d]` scaled by `m[s]`
    MulRows(Var, Var),
    Reshape(Var),
    SumSquares(Var),
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// An eagerly evaluated computation graph.
#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads[v.0].as_ref()
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads[v.0].take()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn ng(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// A leaf that gradients flow into.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// A leaf treated as a constant.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x + y)
            .expect("add shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Add(a, b), ng)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let v = self
            .value(a)
            .zip_map(self.value(b), |x, y| x - y)
            .expect("sub shapes");
        let ng = self.ng(a) || self.ng(b);
        self.push(v, Op::Sub(a, b), ng)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let v = self.value(a).scale(s);
        let ng = self.ng(a);
        self.push(v, Op::Scale(a, s), ng)
    }

    pub fn add_lead_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let c = xv.shape()[0];
        assert_eq!(bv.len(), c, "lead bias length");
        let inner = xv.len() / c;
        let mut out = xv.clone();
        for (ch, chunk) in out.data_mut().chunks_mut(inner).enumerate() {
            let bias = bv.data()[ch];
            chunk.iter_mut().for_each(|v| *v += bias);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddLeadBias(x, b), ng)
    }

    pub fn add_trail_bias(&mut self, x: Var, b: Var) -> Var {
        let xv = self.value(x);
        let bv = self.value(b);
        let n = bv.len();
        assert_eq!(*xv.shape().last().unwrap(), n, "trail bias length");
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            row.iter_mut().zip(bv.data()).for_each(|(v, b)| *v += b);
        }
        let ng = self.ng(x) || self.ng(b);
        self.push(out, Op::AddTrailBias(x, b), ng)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        let (m, k) = (av.shape()[0], av.shape()[1]);
        assert_eq!(bv.shape()[0], k, "matmul inner dims");
        let n = bv.shape()[1];
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, 1.0, av.data(), false, bv.data(), false, 0.0, &mut out);
        let ng = self.ng(a) || self.ng(b);
        self.push(
            Tensor::new(&[m, n], out).unwrap(),
            Op::MatMul(a, b),
            ng,
        )
    }

    pub fn transpose(&mut self, a: Var) -> Var {
        let av = self.value(a);
        let (r, c) = (av.shape()[0], av.shape()[1]);
        let out = transpose2(r, c, av.data());
        let ng = self.ng(a);
        self.push(Tensor::new(&[c, r], out).unwrap(), Op::Transpose(a), ng)
    }

    /// Same-padded stride-1 convolution; `w` is `[out, in * k * k]`.
    pub fn conv(&mut self, x: Var, w: Var, k: usize) -> Var {
        let (c, h, wd) = self.value(x).chw();
        let wv = self.value(w);
        let o = wv.shape()[0];
        assert_eq!(wv.shape()[1], c * k * k, "conv weight shape");
        let cols = im2col(self.value(x).data(), c, h, wd, k);
        let mut out = vec![0.0; o * h * wd];
        gemm(o, c * k * k, h * wd, 1.0, wv.data(), false, &cols, false, 0.0, &mut out);
        let ng = self.ng(x) || self.ng(w);
        self.push(
            Tensor::new(&[o, h, wd], out).unwrap(),
            Op::Conv { x, w, k },
            ng,
        )
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(|z| z * sigmoid(z));
        let ng = self.ng(x);
        self.push(v, Op::Silu(x), ng)
    }

    pub fn avg_pool2(&mut self, x: Var) -> Var {
        let v = avg_pool2(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::AvgPool2(x), ng)
    }

    pub fn upsample2(&mut self, x: Var) -> Var {
        let v = upsample2(self.value(x));
        let ng = self.ng(x);
        self.push(v, Op::Upsample2(x), ng)
    }

    /// Concatenate along the leading axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Var {
        let (av, bv) = (self.value(a), self.value(b));
        assert_eq!(av.shape()[1..], bv.shape()[1..], "concat trailing dims");
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let ng = self.ng(a) || self.ng(b);
        self.push(Tensor::new(&shape, data).unwrap(), Op::Concat(a, b), ng)
    }

    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let xv = self.value(x);
        let n = xv.shape()[1];
        let mut out = xv.clone();
        for row in out.data_mut().chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                total += *v;
            }
            row.iter_mut().for_each(|v| *v /= total);
        }
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    pub fn mul_rows(&mut self, x: Var, m: Var) -> Var {
        let (xv, mv) = (self.value(x), self.value(m));
        let d = xv.shape()[1];
        assert_eq!(mv.len(), xv.shape()[0], "row mask length");
        let mut out = xv.clone();
        for (row, &s) in out.data_mut().chunks_mut(d).zip(mv.data()) {
            row.iter_mut().for_each(|v| *v *= s);
        }
        let ng = self.ng(x) || self.ng(m);
        self.push(out, Op::MulRows(x, m), ng)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let v = self.value(x).clone().reshape(shape).expect("reshape");
        let ng = self.ng(x);
        self.push(v, Op::Reshape(x), ng)
    }

    pub fn sum_squares(&mut self, x: Var) -> Var {
        let v = self.value(x).data().iter().map(|z| z * z).sum();
        let ng = self.ng(x);
        self.push(Tensor::scalar(v), Op::SumSquares(x), ng)
    }

    /// Back-propagate from a scalar output with seed gradient 1.
    pub fn backward(&self, out: Var) -> Gradients {
        self.backward_with(out, Tensor::full(self.value(out).shape(), 1.0))
    }

    /// Back-propagate an arbitrary upstream gradient from `out`.
    pub fn backward_with(&self, out: Var, seed: Tensor) -> Gradients {
        let mut grads: Vec<Option<Tensor>> = vec![None; self.nodes.len()];
        grads[out.0] = Some(seed);
        for idx in (0..=out.0).rev() {
            if !self.nodes[idx].needs_grad {
                continue;
            }
            let Some(g) = grads[idx].take() else {
                continue;
            };
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    grads[idx] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    self.accum(&mut grads, *b, || g.clone());
                    self.accum(&mut grads, *a, || g.clone());
                }
                Op::Sub(a, b) => {
                    self.accum(&mut grads, *b, || g.scale(-1.0));
                    self.accum(&mut grads, *a, || g.clone());
                }
                Op::Scale(a, s) => self.accum(&mut grads, *a, || g.scale(*s)),
                Op::AddLeadBias(x, b) => {
                    let c = self.value(*b).len();
                    self.accum(&mut grads, *b, || {
                        let inner = g.len() / c;
                        let sums = g.data().chunks(inner).map(|ch| ch.iter().sum()).collect();
                        Tensor::new(&[c], sums).unwrap()
                    });
                    self.accum(&mut grads, *x, || g.clone());
                }
                Op::AddTrailBias(x, b) => {
                    let n = self.value(*b).len();
                    self.accum(&mut grads, *b, || {
                        let mut sums = vec![0.0; n];
                        for row in g.data().chunks(n) {
                            sums.iter_mut().zip(row).for_each(|(s, v)| *s += v);
                        }
                        Tensor::new(self.value(*b).shape(), sums).unwrap()
                    });
                    self.accum(&mut grads, *x, || g.clone());
                }
                Op::MatMul(a, b) => {
                    let (av, bv) = (self.value(*a), self.value(*b));
                    let (m, k, n) = (av.shape()[0], av.shape()[1], bv.shape()[1]);
                    self.accum(&mut grads, *a, || {
                        let mut da = vec![0.0; m * k];
                        gemm(m, n, k, 1.0, g.data(), false, bv.data(), true, 0.0, &mut da);
                        Tensor::new(&[m, k], da).unwrap()
                    });
                    self.accum(&mut grads, *b, || {
                        let mut db = vec![0.0; k * n];
                        gemm(k, m, n, 1.0, av.data(), true, g.data(), false, 0.0, &mut db);
                        Tensor::new(&[k, n], db).unwrap()
                    });
                }
                Op::Transpose(a) => {
                    let (r, c) = (g.shape()[0], g.shape()[1]);
                    self.accum(&mut grads, *a, || {
                        Tensor::new(&[c, r], transpose2(r, c, g.data())).unwrap()
                    });
                }
                Op::Conv { x, w, k } => {
                    let (c, h, wd) = self.value(*x).chw();
                    let wv = self.value(*w);
                    let o = wv.shape()[0];
                    let ckk = c * k * k;
                    let hw = h * wd;
                    if self.ng(*w) {
                        let cols = im2col(self.value(*x).data(), c, h, wd, *k);
                        let mut dw = vec![0.0; o * ckk];
                        gemm(o, hw, ckk, 1.0, g.data(), false, &cols, true, 0.0, &mut dw);
                        self.accum(&mut grads, *w, || Tensor::new(&[o, ckk], dw).unwrap());
                    }
                    if self.ng(*x) {
                        let mut dcols = vec![0.0; ckk * hw];
                        gemm(ckk, o, hw, 1.0, wv.data(), true, g.data(), false, 0.0, &mut dcols);
                        let dx = col2im(&dcols, c, h, wd, *k);
                        self.accum(&mut grads, *x, || Tensor::new(&[c, h, wd], dx).unwrap());
                    }
                }
                Op::Silu(x) => {
                    let xv = self.value(*x);
                    self.accum(&mut grads, *x, || {
                        xv.zip_map(&g, |z, gz| {
                            let s = sigmoid(z);
                            gz * (s + z * s * (1.0 - s))
                        })
                        .unwrap()
                    });
                }
                Op::AvgPool2(x) => {
                    self.accum(&mut grads, *x, || upsample2(&g).scale(0.25));
                }
                Op::Upsample2(x) => {
                    // adjoint of nearest upsampling is 2x2 sum pooling
                    self.accum(&mut grads, *x, || avg_pool2(&g).scale(4.0));
                }
                Op::Concat(a, b) => {
                    let na = self.value(*a).len();
                    let (ga, gb) = g.data().split_at(na);
                    let sa = self.value(*a).shape().to_vec();
                    let sb = self.value(*b).shape().to_vec();
                    self.accum(&mut grads, *b, || Tensor::new(&sb, gb.to_vec()).unwrap());
                    self.accum(&mut grads, *a, || Tensor::new(&sa, ga.to_vec()).unwrap());
                }
                Op::SoftmaxRows(x) => {
                    let y = &node.value;
                    let n = y.shape()[1];
                    self.accum(&mut grads, *x, || {
                        let mut dx = g.clone();
                        for (drow, yrow) in dx.data_mut().chunks_mut(n).zip(y.data().chunks(n)) {
                            let dot: f64 = drow.iter().zip(yrow).map(|(a, b)| a * b).sum();
                            for (d, &yv) in drow.iter_mut().zip(yrow) {
                                *d = yv * (*d - dot);
                            }
                        }
                        dx
                    });
                }
                Op::MulRows(x, m) => {
                    let (xv, mv) = (self.value(*x), self.value(*m));
                    let d = xv.shape()[1];
                    self.accum(&mut grads, *m, || {
                        let v = g
                            .data()
                            .chunks(d)
                            .zip(xv.data().chunks(d))
                            .map(|(gr, xr)| gr.iter().zip(xr).map(|(a, b)| a * b).sum())
                            .collect();
                        Tensor::new(mv.shape(), v).unwrap()
                    });
                    self.accum(&mut grads, *x, || {
                        let mut dx = g.clone();
                        for (row, &s) in dx.data_mut().chunks_mut(d).zip(mv.data()) {
                            row.iter_mut().for_each(|v| *v *= s);
                        }
                        dx
                    });
                }
                Op::Reshape(x) => {
                    let shape = self.value(*x).shape().to_vec();
                    self.accum(&mut grads, *x, || g.clone().reshape(&shape).unwrap());
                }
                Op::SumSquares(x) => {
                    let s = g.data()[0];
                    self.accum(&mut grads, *x, || self.value(*x).scale(2.0 * s));
                }
            }
        }
        Gradients { grads }
    }

    fn accum(&self, grads: &mut [Option<Tensor>], v: Var, make: impl FnOnce() -> Tensor) {
        if !self.ng(v) {
            return;
        }
        let g = make();
        match &mut grads[v.0] {
            Some(existing) => existing.add_scaled(&g, 1.0),
            slot => *slot = Some(g),
        }
    }
}

pub fn sigmoid(z: f64) -> f64 {
    1.0 / (1.0 + (-z).exp())
}

fn transpose2(r: usize, c: usize, a: &[f64]) -> Vec<f64> {
    let mut out = vec![0.0; r * c];
    for i in 0..r {
        for j in 0..c {
            out[j * r + i] = a[i * c + j];
        }
    }
    out
}

fn im2col(x: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut cols = vec![0.0; c * k * k * hw];
    for ch in 0..c {
        let plane = &x[ch * hw..(ch + 1) * hw];
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let dst = &mut cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let src_row = &plane[si as usize * w..(si as usize + 1) * w];
                    let dst_row = &mut dst[i * w..(i + 1) * w];
                    let j0 = (-dx).max(0) as usize;
                    let j1 = (w as isize - dx).min(w as isize) as usize;
                    for j in j0..j1 {
                        dst_row[j] = src_row[(j as isize + dx) as usize];
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &[f64], c: usize, h: usize, w: usize, k: usize) -> Vec<f64> {
    let pad = (k / 2) as isize;
    let hw = h * w;
    let mut x = vec![0.0; c * hw];
    for ch in 0..c {
        for ky in 0..k {
            for kx in 0..k {
                let row = (ch * k + ky) * k + kx;
                let src = &cols[row * hw..(row + 1) * hw];
                let dy = ky as isize - pad;
                let dx = kx as isize - pad;
                for i in 0..h {
                    let si = i as isize + dy;
                    if si < 0 || si >= h as isize {
                        continue;
                    }
                    let j0 = (-dx).max(0) as usize;
                    let j1 = (w as isize - dx).min(w as isize) as usize;
                    for j in j0..j1 {
                        x[ch * hw + si as usize * w + (j as isize + dx) as usize] += src[i * w + j];
                    }
                }
            }
        }
    }
    x
}
