//! Tape-based reverse-mode differentiation over [`Tensor`]s.
//!
//! Only the operations the encoders and losses need are provided. Losses
//! whose gradients are cheaper to derive in closed form enter the tape as
//! fused scalar nodes carrying their local Jacobian.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Linear { x: Var, w: Var, b: Var },
    Relu(Var),
    Conv2d { x: Var, w: Var, b: Var },
    MaxPool2 { x: Var, argmax: Vec<usize> },
    Reshape(Var),
    ConcatRows(Var, Var),
    GatherRows(Var, Vec<usize>),
    Add(Var, Var),
    Scale(Var, f64),
    /// Scalar output with precomputed d(out)/d(input) per input.
    Fused(Vec<(Var, Tensor)>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients of one scalar with respect to every node that required them.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
}

impl Gradients {
    /// Gradient for `v`; zeros when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Tensor {
        match &self.grads[v.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(&self.shapes[v.0]),
        }
    }
}

fn shape_err(what: &str, a: &[usize], b: &[usize]) -> Error {
    Error::Shape(format!("{what}: {a:?} vs {b:?}"))
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Differentiable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// `x · wᵀ + b` for `x: [B, in]`, `w: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.value(x).shape(), self.value(w).shape(), self.value(b).shape());
        if xs.len() != 2 || ws.len() != 2 || xs[1] != ws[1] {
            return Err(shape_err("linear input/weight", xs, ws));
        }
        if bs != [ws[0]] {
            return Err(shape_err("linear bias", bs, &ws[..1]));
        }
        let (batch, n_in, n_out) = (xs[0], xs[1], ws[0]);
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![0.0; batch * n_out];
        for r in 0..batch {
            let xr = &xv[r * n_in..(r + 1) * n_in];
            let orow = &mut out[r * n_out..(r + 1) * n_out];
            for (o, slot) in orow.iter_mut().enumerate() {
                let wr = &wv[o * n_in..(o + 1) * n_in];
                *slot = bv[o] + crate::tensor::dot(xr, wr);
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&[batch, n_out], out)?, Op::Linear { x, w, b }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut v = self.value(x).clone();
        for a in v.data_mut() {
            if *a < 0.0 {
                *a = 0.0;
            }
        }
        let rg = self.rg(x);
        self.push(v, Op::Relu(x), rg)
    }

    /// Same-padded, stride-1 convolution. `x: [B, C, H, W]`, `w: [O, C, K, K]` with odd `K`.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        let ws = self.value(w).shape().to_vec();
        if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] || ws[2] != ws[3] || ws[2].is_multiple_of(2) {
            return Err(shape_err("conv2d input/kernel", &xs, &ws));
        }
        if self.value(b).shape() != [ws[0]] {
            return Err(shape_err("conv2d bias", self.value(b).shape(), &ws[..1]));
        }
        let geo = ConvGeometry { c: xs[1], h: xs[2], w: xs[3], o: ws[0], k: ws[2] };
        let batch = xs[0];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let hw = geo.h * geo.w;
        let mut out = vec![0.0; batch * geo.o * hw];
        let mut cols = vec![0.0; geo.patch() * hw];
        for s in 0..batch {
            geo.im2col(&xv[s * geo.c * hw..(s + 1) * geo.c * hw], &mut cols);
            let os = &mut out[s * geo.o * hw..(s + 1) * geo.o * hw];
            for o in 0..geo.o {
                let orow = &mut os[o * hw..(o + 1) * hw];
                orow.fill(bv[o]);
                let wrow = &wv[o * geo.patch()..(o + 1) * geo.patch()];
                for (r, &wr) in wrow.iter().enumerate() {
                    let crow = &cols[r * hw..(r + 1) * hw];
                    for (a, c) in orow.iter_mut().zip(crow) {
                        *a += wr * c;
                    }
                }
            }
        }
        let rg = self.rg(x) || self.rg(w) || self.rg(b);
        let t = Tensor::from_vec(&[batch, geo.o, geo.h, geo.w], out)?;
        Ok(self.push(t, Op::Conv2d { x, w, b }, rg))
    }

    /// 2×2 max pooling with stride 2. Spatial sizes must be even.
    pub fn max_pool2(&mut self, x: Var) -> Result<Var> {
        let xs = self.value(x).shape().to_vec();
        if xs.len() != 4 || !xs[2].is_multiple_of(2) || !xs[3].is_multiple_of(2) {
            return Err(Error::Shape(format!("max_pool2 needs even [B,C,H,W], got {xs:?}")));
        }
        let (planes, h, w) = (xs[0] * xs[1], xs[2], xs[3]);
        let (oh, ow) = (h / 2, w / 2);
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(planes * oh * ow);
        let mut argmax = Vec::with_capacity(planes * oh * ow);
        for p in 0..planes {
            let base = p * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = base + 2 * i * w + 2 * j;
                    for (di, dj) in [(0, 1), (1, 0), (1, 1)] {
                        let idx = base + (2 * i + di) * w + 2 * j + dj;
                        if xv[idx] > xv[best] {
                            best = idx;
                        }
                    }
                    out.push(xv[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(x);
        let t = Tensor::from_vec(&[xs[0], xs[1], oh, ow], out)?;
        Ok(self.push(t, Op::MaxPool2 { x, argmax }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(x).clone().reshaped(shape)?;
        let rg = self.rg(x);
        Ok(self.push(t, Op::Reshape(x), rg))
    }

    /// Stacks `b`'s rows under `a`'s. Trailing shapes must agree.
    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.shape().len() != bv.shape().len() || av.shape()[1..] != bv.shape()[1..] {
            return Err(shape_err("concat_rows", av.shape(), bv.shape()));
        }
        let mut shape = av.shape().to_vec();
        shape[0] += bv.shape()[0];
        let mut data = av.data().to_vec();
        data.extend_from_slice(bv.data());
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Tensor::from_vec(&shape, data)?, Op::ConcatRows(a, b), rg))
    }

    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Var {
        let t = self.value(x).gather_rows(idx);
        let rg = self.rg(x);
        self.push(t, Op::GatherRows(x, idx.to_vec()), rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        if !av.same_shape(bv) {
            return Err(shape_err("add", av.shape(), bv.shape()));
        }
        let mut t = av.clone();
        t.add_assign(bv);
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(t, Op::Add(a, b), rg))
    }

    pub fn scale(&mut self, x: Var, alpha: f64) -> Var {
        let mut t = self.value(x).clone();
        t.scale(alpha);
        let rg = self.rg(x);
        self.push(t, Op::Scale(x, alpha), rg)
    }

    /// Records a scalar computed outside the tape, with its gradient with
    /// respect to each listed input.
    pub fn fused_scalar(&mut self, value: f64, local: Vec<(Var, Tensor)>) -> Result<Var> {
        for (v, g) in &local {
            if !self.value(*v).same_shape(g) {
                return Err(shape_err("fused gradient", g.shape(), self.value(*v).shape()));
            }
        }
        let rg = local.iter().any(|(v, _)| self.rg(*v));
        Ok(self.push(Tensor::scalar(value), Op::Fused(local), rg))
    }

    /// Reverse sweep from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if self.value(loss).len() != 1 {
            return Err(Error::Shape(format!(
                "backward needs a scalar, got {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Tensor>> = (0..n).map(|_| None).collect();
        let shapes = self.nodes.iter().map(|nd| nd.value.shape().to_vec()).collect();
        let mut seed = self.value(loss).clone();
        seed.data_mut()[0] = 1.0;
        grads[loss.0] = Some(seed);

        for id in (0..=loss.0).rev() {
            let node = &self.nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            match &node.op {
                Op::Leaf => {
                    grads[id] = Some(g);
                    continue;
                }
                Op::Linear { x, w, b } => self.back_linear(&g, *x, *w, *b, &mut grads),
                Op::Relu(x) => {
                    if self.rg(*x) {
                        let mut dx = g.clone();
                        for (d, y) in dx.data_mut().iter_mut().zip(node.value.data()) {
                            if *y <= 0.0 {
                                *d = 0.0;
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Conv2d { x, w, b } => self.back_conv(&g, *x, *w, *b, &mut grads),
                Op::MaxPool2 { x, argmax } => {
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(self.value(*x).shape());
                        for (&i, gv) in argmax.iter().zip(g.data()) {
                            dx.data_mut()[i] += gv;
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Reshape(x) => {
                    if self.rg(*x) {
                        let dx = g.clone().reshaped(self.value(*x).shape())?;
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::ConcatRows(a, b) => {
                    let split = self.value(*a).len();
                    if self.rg(*a) {
                        let da = Tensor::from_vec(self.value(*a).shape(), g.data()[..split].to_vec())?;
                        accumulate(&mut grads, *a, da);
                    }
                    if self.rg(*b) {
                        let db = Tensor::from_vec(self.value(*b).shape(), g.data()[split..].to_vec())?;
                        accumulate(&mut grads, *b, db);
                    }
                }
                Op::GatherRows(x, idx) => {
                    if self.rg(*x) {
                        let mut dx = Tensor::zeros(self.value(*x).shape());
                        let w = dx.row_len();
                        for (r, &i) in idx.iter().enumerate() {
                            let src = &g.data()[r * w..(r + 1) * w];
                            for (d, s) in dx.data_mut()[i * w..(i + 1) * w].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone());
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.clone());
                    }
                }
                Op::Scale(x, alpha) => {
                    if self.rg(*x) {
                        let mut dx = g.clone();
                        dx.scale(*alpha);
                        accumulate(&mut grads, *x, dx);
                    }
                }
                Op::Fused(local) => {
                    let up = g.item();
                    for (v, lg) in local {
                        if self.rg(*v) {
                            let mut dv = lg.clone();
                            dv.scale(up);
                            accumulate(&mut grads, *v, dv);
                        }
                    }
                }
            }
        }
        Ok(Gradients { grads, shapes })
    }

    fn back_linear(&self, g: &Tensor, x: Var, w: Var, b: Var, grads: &mut [Option<Tensor>]) {
        let xt = self.value(x);
        let wt = self.value(w);
        let (batch, n_in) = (xt.shape()[0], xt.shape()[1]);
        let n_out = wt.shape()[0];
        let gv = g.data();
        if self.rg(x) {
            let mut dx = Tensor::zeros(xt.shape());
            for r in 0..batch {
                let drow = &mut dx.data_mut()[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    let go = gv[r * n_out + o];
                    let wr = &wt.data()[o * n_in..(o + 1) * n_in];
                    for (d, wv) in drow.iter_mut().zip(wr) {
                        *d += go * wv;
                    }
                }
            }
            accumulate(grads, x, dx);
        }
        if self.rg(w) {
            let mut dw = Tensor::zeros(wt.shape());
            for r in 0..batch {
                let xr = &xt.data()[r * n_in..(r + 1) * n_in];
                for o in 0..n_out {
                    let go = gv[r * n_out + o];
                    for (d, xv) in dw.data_mut()[o * n_in..(o + 1) * n_in].iter_mut().zip(xr) {
                        *d += go * xv;
                    }
                }
            }
            accumulate(grads, w, dw);
        }
        if self.rg(b) {
            let mut db = Tensor::zeros(&[n_out]);
            for r in 0..batch {
                for (d, gvv) in db.data_mut().iter_mut().zip(&gv[r * n_out..(r + 1) * n_out]) {
                    *d += gvv;
                }
            }
            accumulate(grads, b, db);
        }
    }

    fn back_conv(&self, g: &Tensor, x: Var, w: Var, b: Var, grads: &mut [Option<Tensor>]) {
        let xt = self.value(x);
        let wt = self.value(w);
        let xs = xt.shape();
        let geo = ConvGeometry { c: xs[1], h: xs[2], w: xs[3], o: wt.shape()[0], k: wt.shape()[2] };
        let batch = xs[0];
        let hw = geo.h * geo.w;
        let patch = geo.patch();
        let (need_x, need_w, need_b) = (self.rg(x), self.rg(w), self.rg(b));
        let mut dx = need_x.then(|| Tensor::zeros(xs));
        let mut dw = need_w.then(|| Tensor::zeros(wt.shape()));
        let mut db = need_b.then(|| Tensor::zeros(&[geo.o]));
        let mut cols = vec![0.0; patch * hw];
        let mut dcols = vec![0.0; patch * hw];
        for s in 0..batch {
            let gs = &g.data()[s * geo.o * hw..(s + 1) * geo.o * hw];
            if let Some(db) = db.as_mut() {
                for o in 0..geo.o {
                    db.data_mut()[o] += gs[o * hw..(o + 1) * hw].iter().sum::<f64>();
                }
            }
            if let Some(dw) = dw.as_mut() {
                geo.im2col(&xt.data()[s * geo.c * hw..(s + 1) * geo.c * hw], &mut cols);
                let dwd = dw.data_mut();
                for o in 0..geo.o {
                    let grow = &gs[o * hw..(o + 1) * hw];
                    for r in 0..patch {
                        dwd[o * patch + r] += crate::tensor::dot(grow, &cols[r * hw..(r + 1) * hw]);
                    }
                }
            }
            if let Some(dx) = dx.as_mut() {
                dcols.fill(0.0);
                for o in 0..geo.o {
                    let grow = &gs[o * hw..(o + 1) * hw];
                    for r in 0..patch {
                        let wv = wt.data()[o * patch + r];
                        for (d, gv) in dcols[r * hw..(r + 1) * hw].iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
                geo.col2im(&dcols, &mut dx.data_mut()[s * geo.c * hw..(s + 1) * geo.c * hw]);
            }
        }
        if let Some(dx) = dx {
            accumulate(grads, x, dx);
        }
        if let Some(dw) = dw {
            accumulate(grads, w, dw);
        }
        if let Some(db) = db {
            accumulate(grads, b, db);
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, g: Tensor) {
    match &mut grads[v.0] {
        Some(existing) => existing.add_assign(&g),
        slot @ None => *slot = Some(g),
    }
}

struct ConvGeometry {
    c: usize,
    h: usize,
    w: usize,
    o: usize,
    k: usize,
}

impl ConvGeometry {
    fn patch(&self) -> usize {
        self.c * self.k * self.k
    }

    /// Rows indexed by (channel, ky, kx), columns by output pixel.
    fn im2col(&self, x: &[f64], cols: &mut [f64]) {
        let pad = (self.k / 2) as isize;
        let hw = self.h * self.w;
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    let row = &mut cols[r * hw..(r + 1) * hw];
                    for y in 0..self.h {
                        let sy = y as isize + ky as isize - pad;
                        for xx in 0..self.w {
                            let sx = xx as isize + kx as isize - pad;
                            row[y * self.w + xx] = if sy >= 0
                                && sy < self.h as isize
                                && sx >= 0
                                && sx < self.w as isize
                            {
                                x[c * hw + sy as usize * self.w + sx as usize]
                            } else {
                                0.0
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im(&self, cols: &[f64], dx: &mut [f64]) {
        let pad = (self.k / 2) as isize;
        let hw = self.h * self.w;
        for c in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let r = (c * self.k + ky) * self.k + kx;
                    let row = &cols[r * hw..(r + 1) * hw];
                    for y in 0..self.h {
                        let sy = y as isize + ky as isize - pad;
                        if sy < 0 || sy >= self.h as isize {
                            continue;
                        }
                        for xx in 0..self.w {
                            let sx = xx as isize + kx as isize - pad;
                            if sx >= 0 && sx < self.w as isize {
                                dx[c * hw + sy as usize * self.w + sx as usize] += row[y * self.w + xx];
                            }
                        }
                    }
                }
            }
        }
    }
}
