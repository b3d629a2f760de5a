//! Reverse-mode differentiation over a recorded tape of tensor operations.
//!
//! A [`Graph`] is built fresh for every forward pass. Parameters enter as
//! leaves bound to a [`ParamStore`] id; after [`Graph::backward`] the
//! accumulated gradient of each parameter is returned keyed by that id.
//!
//! Piecewise-linear operations (ReLU, max pooling) can optionally fold their
//! active branch into a running signature. Two forward passes with the same
//! signature are on the same smooth piece, which lets finite-difference
//! checks detect when a perturbation crossed a kink.

use std::collections::hash_map::DefaultHasher;
use std::hash::Hasher;

use crate::error::{GaitError, Result};
use crate::params::{ParamId, ParamStore};
use crate::scalar::{lit, Scalar};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

enum Op<F> {
    Input,
    Param(ParamId),
    Linear {
        x: Var,
        w: Var,
        b: Option<Var>,
    },
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        spec: Conv2dSpec,
    },
    Relu(Var),
    Sigmoid(Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, F),
    Bmm {
        a: Var,
        b: Var,
        ta: bool,
        tb: bool,
    },
    SoftmaxRows(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<F>,
        rstd: Vec<F>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    GroupMax {
        x: Var,
        group: usize,
        argmax: Vec<u32>,
    },
    Transpose12(Var),
    Reshape(Var),
    StripPool {
        x: Var,
        strips: usize,
        argmax: Vec<u32>,
    },
    MeanAxis1(Var),
    MulBcast1 {
        x: Var,
        g: Var,
    },
    StripLinear {
        x: Var,
        w: Var,
        b: Var,
    },
}

struct Node<F> {
    value: Tensor<F>,
    op: Op<F>,
    needs_grad: bool,
}

/// Gradients of all parameters touched by a graph, indexed by [`ParamId`].
pub struct ParamGrads<F> {
    grads: Vec<Option<Vec<F>>>,
}

impl<F: Scalar> ParamGrads<F> {
    pub fn get(&self, id: ParamId) -> Option<&[F]> {
        self.grads.get(id.0).and_then(|g| g.as_deref())
    }

    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut Vec<F>> {
        self.grads.get_mut(id.0).and_then(|g| g.as_mut())
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }
}

pub struct Graph<F> {
    nodes: Vec<Node<F>>,
    signature: Option<DefaultHasher>,
}

impl<F: Scalar> Default for Graph<F> {
    fn default() -> Self {
        Self::new()
    }
}

fn shape_err(msg: String) -> GaitError {
    GaitError::Shape(msg)
}

impl<F: Scalar> Graph<F> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            signature: None,
        }
    }

    /// Graph that records the active branch of every piecewise op.
    pub fn with_signature() -> Self {
        Self {
            nodes: Vec::new(),
            signature: Some(DefaultHasher::new()),
        }
    }

    pub fn signature(&self) -> Option<u64> {
        self.signature.as_ref().map(|h| h.finish())
    }

    /// Fold an external discrete decision (e.g. an active hinge set) into the signature.
    pub fn note_switch(&mut self, bits: &[bool]) {
        if let Some(h) = self.signature.as_mut() {
            for &b in bits {
                h.write_u8(b as u8);
            }
        }
    }

    pub fn value(&self, v: Var) -> &Tensor<F> {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor<F>, op: Op<F>, needs_grad: bool) -> Var {
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

    pub fn input(&mut self, value: Tensor<F>) -> Var {
        self.push(value, Op::Input, false)
    }

    pub fn param(&mut self, store: &ParamStore<F>, id: ParamId) -> Var {
        self.push(store.get(id).clone(), Op::Param(id), true)
    }

    /// `x · wᵀ + b` over the last axis of `x`; `w` is `[out, in]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        let inp = *xs.last().ok_or_else(|| shape_err("linear on scalar".into()))?;
        if ws.len() != 2 || ws[1] != inp {
            return Err(shape_err(format!("linear: x {xs:?} vs w {ws:?}")));
        }
        let out = ws[0];
        if let Some(b) = b {
            if self.shape(b) != [out] {
                return Err(shape_err(format!("linear bias {:?}", self.shape(b))));
            }
        }
        let rows = self.value(x).numel() / inp;
        let mut y = vec![F::zero(); rows * out];
        if let Some(b) = b {
            let bv = self.value(b).data();
            for r in 0..rows {
                y[r * out..(r + 1) * out].copy_from_slice(bv);
            }
        }
        let beta = if b.is_some() { F::one() } else { F::zero() };
        F::gemm(
            rows,
            inp,
            out,
            F::one(),
            self.value(x).data(),
            false,
            self.value(w).data(),
            true,
            beta,
            &mut y,
        );
        let mut shape = xs;
        *shape.last_mut().unwrap() = out;
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(Tensor::from_vec(&shape, y)?, Op::Linear { x, w, b }, ng))
    }

    /// 2-D convolution of `[B, C, H, W]` by `[O, C, K, K]` with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: Conv2dSpec) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 4 || ws.len() != 4 || ws[1] != xs[1] || ws[2] != ws[3] {
            return Err(shape_err(format!("conv2d: x {xs:?} vs w {ws:?}")));
        }
        let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (o, k) = (ws[0], ws[2]);
        let geo = ConvGeom::new(c, h, wd, k, spec)?;
        let (ho, wo) = (geo.ho, geo.wo);
        let plane = ho * wo;
        let mut y = vec![F::zero(); bn * o * plane];
        let mut cols = vec![F::zero(); geo.rows() * plane];
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = b.map(|b| self.value(b).data());
        for n in 0..bn {
            let img = &xv[n * c * h * wd..(n + 1) * c * h * wd];
            geo.im2col(img, &mut cols);
            let out = &mut y[n * o * plane..(n + 1) * o * plane];
            if let Some(bv) = bv {
                for (oc, chunk) in out.chunks_mut(plane).enumerate() {
                    chunk.fill(bv[oc]);
                }
            }
            F::gemm(
                o,
                geo.rows(),
                plane,
                F::one(),
                wv,
                false,
                &cols,
                false,
                if bv.is_some() { F::one() } else { F::zero() },
                out,
            );
        }
        let ng = self.ng(x) || self.ng(w) || b.is_some_and(|b| self.ng(b));
        Ok(self.push(
            Tensor::from_vec(&[bn, o, ho, wo], y)?,
            Op::Conv2d { x, w, b, spec },
            ng,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for e in out.data_mut() {
            if *e <= F::zero() {
                *e = F::zero();
            }
        }
        if let Some(h) = self.signature.as_mut() {
            for e in out.data() {
                h.write_u8((*e > F::zero()) as u8);
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::Relu(x), ng)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        for e in out.data_mut() {
            *e = F::one() / (F::one() + (-*e).exp());
        }
        let ng = self.ng(x);
        self.push(out, Op::Sigmoid(x), ng)
    }

    fn same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(format!(
                "{what}: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o + *v;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Add(a, b), ng))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let mut out = self.value(a).clone();
        for (o, v) in out.data_mut().iter_mut().zip(self.value(b).data()) {
            *o = *o * *v;
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(out, Op::Mul(a, b), ng))
    }

    pub fn scale(&mut self, x: Var, s: F) -> Var {
        let mut out = self.value(x).clone();
        for e in out.data_mut() {
            *e = *e * s;
        }
        let ng = self.ng(x);
        self.push(out, Op::Scale(x, s), ng)
    }

    /// Batched matmul of `[B, M, K]` by `[B, K, N]`; the transpose flags
    /// describe the storage of each operand relative to that logical shape.
    pub fn bmm(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Result<Var> {
        let as_ = self.shape(a).to_vec();
        let bs = self.shape(b).to_vec();
        if as_.len() != 3 || bs.len() != 3 || as_[0] != bs[0] {
            return Err(shape_err(format!("bmm: {as_:?} vs {bs:?}")));
        }
        let (m, ka) = if ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
        let (kb, n) = if tb { (bs[2], bs[1]) } else { (bs[1], bs[2]) };
        if ka != kb {
            return Err(shape_err(format!("bmm inner dims: {as_:?} vs {bs:?}")));
        }
        let batch = as_[0];
        let mut y = vec![F::zero(); batch * m * n];
        let av = self.value(a).data();
        let bv = self.value(b).data();
        for i in 0..batch {
            F::gemm(
                m,
                ka,
                n,
                F::one(),
                &av[i * m * ka..(i + 1) * m * ka],
                ta,
                &bv[i * ka * n..(i + 1) * ka * n],
                tb,
                F::zero(),
                &mut y[i * m * n..(i + 1) * m * n],
            );
        }
        let ng = self.ng(a) || self.ng(b);
        Ok(self.push(
            Tensor::from_vec(&[batch, m, n], y)?,
            Op::Bmm { a, b, ta, tb },
            ng,
        ))
    }

    /// Softmax over the last axis.
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let mut out = self.value(x).clone();
        let c = *out.shape().last().unwrap();
        for row in out.data_mut().chunks_mut(c) {
            let mx = row.iter().fold(F::neg_infinity(), |a, &b| a.max(b));
            let mut s = F::zero();
            for e in row.iter_mut() {
                *e = (*e - mx).exp();
                s = s + *e;
            }
            for e in row.iter_mut() {
                *e = *e / s;
            }
        }
        let ng = self.ng(x);
        self.push(out, Op::SoftmaxRows(x), ng)
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let c = *self.shape(x).last().unwrap();
        if self.shape(gamma) != [c] || self.shape(beta) != [c] {
            return Err(shape_err("layer_norm affine shape".into()));
        }
        let eps: F = lit(1e-5);
        let xv = self.value(x);
        let rows = xv.numel() / c;
        let cf = F::from_usize(c).unwrap();
        let mut xhat = vec![F::zero(); xv.numel()];
        let mut rstd = vec![F::zero(); rows];
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let mut out = vec![F::zero(); xv.numel()];
        for r in 0..rows {
            let row = &xv.data()[r * c..(r + 1) * c];
            let mean = row.iter().copied().sum::<F>() / cf;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<F>() / cf;
            let rs = F::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let xh = (row[j] - mean) * rs;
                xhat[r * c + j] = xh;
                out[r * c + j] = xh * g[j] + bt[j];
            }
        }
        let shape = xv.shape().to_vec();
        let ng = self.ng(x) || self.ng(gamma) || self.ng(beta);
        Ok(self.push(
            Tensor::from_vec(&shape, out)?,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            ng,
        ))
    }

    /// Select rows of a `[R, C]` matrix.
    pub fn gather_rows(&mut self, x: Var, idx: Vec<usize>) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 {
            return Err(shape_err(format!("gather_rows on {xs:?}")));
        }
        let (r, c) = (xs[0], xs[1]);
        if let Some(bad) = idx.iter().find(|&&i| i >= r) {
            return Err(shape_err(format!("gather index {bad} out of {r} rows")));
        }
        let xv = self.value(x).data();
        let mut out = Vec::with_capacity(idx.len() * c);
        for &i in &idx {
            out.extend_from_slice(&xv[i * c..(i + 1) * c]);
        }
        let n = idx.len();
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_vec(&[n, c], out)?,
            Op::GatherRows { x, idx },
            ng,
        ))
    }

    /// Elementwise max over consecutive groups of `group` rows:
    /// `[G * group, C] -> [G, C]`. Ties resolve to the first row.
    pub fn group_max(&mut self, x: Var, group: usize) -> Result<Var> {
        let xs = self.shape(x);
        if xs.len() != 2 || group == 0 || xs[0] % group != 0 {
            return Err(shape_err(format!("group_max({group}) on {xs:?}")));
        }
        let (r, c) = (xs[0], xs[1]);
        let g = r / group;
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); g * c];
        let mut argmax = vec![0u32; g * c];
        for gi in 0..g {
            let base = gi * group;
            out[gi * c..(gi + 1) * c].copy_from_slice(&xv[base * c..(base + 1) * c]);
            for j in 1..group {
                let row = &xv[(base + j) * c..(base + j + 1) * c];
                for ch in 0..c {
                    if row[ch] > out[gi * c + ch] {
                        out[gi * c + ch] = row[ch];
                        argmax[gi * c + ch] = j as u32;
                    }
                }
            }
        }
        if let Some(h) = self.signature.as_mut() {
            for a in &argmax {
                h.write_u32(*a);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_vec(&[g, c], out)?,
            Op::GroupMax { x, group, argmax },
            ng,
        ))
    }

    /// `[B, X, Y] -> [B, Y, X]`.
    pub fn transpose12(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err(format!("transpose12 on {xs:?}")));
        }
        let (b, p, q) = (xs[0], xs[1], xs[2]);
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); b * p * q];
        for n in 0..b {
            let src = &xv[n * p * q..(n + 1) * p * q];
            let dst = &mut out[n * p * q..(n + 1) * p * q];
            for i in 0..p {
                for j in 0..q {
                    dst[j * p + i] = src[i * q + j];
                }
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_vec(&[b, q, p], out)?,
            Op::Transpose12(x),
            ng,
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let v = self.value(x).clone().reshaped(shape)?;
        let ng = self.ng(x);
        Ok(self.push(v, Op::Reshape(x), ng))
    }

    /// Horizontal strip pooling `[S, C, H, W] -> [S, P, C]`: each strip covers
    /// `H / P` consecutive rows and pools them by `max + mean`.
    pub fn strip_pool(&mut self, x: Var, strips: usize) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 4 || strips == 0 || xs[2] % strips != 0 {
            return Err(shape_err(format!("strip_pool({strips}) on {xs:?}")));
        }
        let (s, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
        let rows = h / strips;
        let cell = rows * w;
        let inv = F::one() / F::from_usize(cell).unwrap();
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); s * strips * c];
        let mut argmax = vec![0u32; s * strips * c];
        for n in 0..s {
            for ch in 0..c {
                let plane = &xv[(n * c + ch) * h * w..(n * c + ch + 1) * h * w];
                for p in 0..strips {
                    let seg = &plane[p * cell..(p + 1) * cell];
                    let mut best = seg[0];
                    let mut arg = 0u32;
                    let mut sum = F::zero();
                    for (i, &v) in seg.iter().enumerate() {
                        sum = sum + v;
                        if v > best {
                            best = v;
                            arg = i as u32;
                        }
                    }
                    let o = (n * strips + p) * c + ch;
                    out[o] = best + sum * inv;
                    argmax[o] = arg;
                }
            }
        }
        if let Some(hs) = self.signature.as_mut() {
            for a in &argmax {
                hs.write_u32(*a);
            }
        }
        let ng = self.ng(x);
        Ok(self.push(
            Tensor::from_vec(&[s, strips, c], out)?,
            Op::StripPool { x, strips, argmax },
            ng,
        ))
    }

    /// `[S, P, C] -> [S, C]` mean over the middle axis.
    pub fn mean_axis1(&mut self, x: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        if xs.len() != 3 {
            return Err(shape_err(format!("mean_axis1 on {xs:?}")));
        }
        let (s, p, c) = (xs[0], xs[1], xs[2]);
        let inv = F::one() / F::from_usize(p).unwrap();
        let xv = self.value(x).data();
        let mut out = vec![F::zero(); s * c];
        for n in 0..s {
            for i in 0..p {
                for ch in 0..c {
                    out[n * c + ch] = out[n * c + ch] + xv[(n * p + i) * c + ch];
                }
            }
            for ch in 0..c {
                out[n * c + ch] = out[n * c + ch] * inv;
            }
        }
        let ng = self.ng(x);
        Ok(self.push(Tensor::from_vec(&[s, c], out)?, Op::MeanAxis1(x), ng))
    }

    /// `[S, P, C] ⊙ [S, C]` broadcast over the middle axis.
    pub fn mul_bcast1(&mut self, x: Var, g: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let gs = self.shape(g).to_vec();
        if xs.len() != 3 || gs != [xs[0], xs[2]] {
            return Err(shape_err(format!("mul_bcast1: {xs:?} vs {gs:?}")));
        }
        let (s, p, c) = (xs[0], xs[1], xs[2]);
        let mut out = self.value(x).clone();
        let gv = self.value(g).data();
        let od = out.data_mut();
        for n in 0..s {
            for i in 0..p {
                for ch in 0..c {
                    od[(n * p + i) * c + ch] = od[(n * p + i) * c + ch] * gv[n * c + ch];
                }
            }
        }
        let ng = self.ng(x) || self.ng(g);
        Ok(self.push(out, Op::MulBcast1 { x, g }, ng))
    }

    /// Independent affine map per strip: `[S, P, I]` by `w: [P, O, I]`, `b: [P, O]`.
    pub fn strip_linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let xs = self.shape(x).to_vec();
        let ws = self.shape(w).to_vec();
        if xs.len() != 3 || ws.len() != 3 || ws[0] != xs[1] || ws[2] != xs[2] {
            return Err(shape_err(format!("strip_linear: x {xs:?} vs w {ws:?}")));
        }
        let (s, p, i) = (xs[0], xs[1], xs[2]);
        let o = ws[1];
        if self.shape(b) != [p, o] {
            return Err(shape_err(format!("strip_linear bias {:?}", self.shape(b))));
        }
        let xv = self.value(x).data();
        let wv = self.value(w).data();
        let bv = self.value(b).data();
        let mut out = vec![F::zero(); s * p * o];
        let mut xp = vec![F::zero(); s * i];
        let mut yp = vec![F::zero(); s * o];
        for pi in 0..p {
            for n in 0..s {
                xp[n * i..(n + 1) * i].copy_from_slice(&xv[(n * p + pi) * i..(n * p + pi + 1) * i]);
                yp[n * o..(n + 1) * o].copy_from_slice(&bv[pi * o..(pi + 1) * o]);
            }
            F::gemm(
                s,
                i,
                o,
                F::one(),
                &xp,
                false,
                &wv[pi * o * i..(pi + 1) * o * i],
                true,
                F::one(),
                &mut yp,
            );
            for n in 0..s {
                out[(n * p + pi) * o..(n * p + pi + 1) * o].copy_from_slice(&yp[n * o..(n + 1) * o]);
            }
        }
        let ng = self.ng(x) || self.ng(w) || self.ng(b);
        Ok(self.push(
            Tensor::from_vec(&[s, p, o], out)?,
            Op::StripLinear { x, w, b },
            ng,
        ))
    }

    /// Propagate seed gradients back to every parameter leaf.
    pub fn backward(&self, seeds: &[(Var, &[F])], num_params: usize) -> Result<ParamGrads<F>> {
        let mut grads: Vec<Option<Vec<F>>> = (0..self.nodes.len()).map(|_| None).collect();
        for (v, g) in seeds {
            if g.len() != self.value(*v).numel() {
                return Err(shape_err("seed gradient length".into()));
            }
            let slot = acc(&mut grads, *v, g.len());
            for (s, x) in slot.iter_mut().zip(g.iter()) {
                *s = *s + *x;
            }
        }
        let mut out = ParamGrads {
            grads: (0..num_params).map(|_| None).collect(),
        };
        for i in (0..self.nodes.len()).rev() {
            let node = &self.nodes[i];
            if !node.needs_grad {
                continue;
            }
            let Some(gy) = grads[i].take() else { continue };
            self.backward_node(node, &gy, &mut grads, &mut out)?;
        }
        Ok(out)
    }

    fn backward_node(
        &self,
        node: &Node<F>,
        gy: &[F],
        grads: &mut [Option<Vec<F>>],
        out: &mut ParamGrads<F>,
    ) -> Result<()> {
        match &node.op {
            Op::Input => {}
            Op::Param(id) => {
                let slot = out
                    .grads
                    .get_mut(id.0)
                    .ok_or_else(|| shape_err("param id beyond store".into()))?;
                match slot {
                    Some(g) => {
                        for (a, b) in g.iter_mut().zip(gy) {
                            *a = *a + *b;
                        }
                    }
                    None => *slot = Some(gy.to_vec()),
                }
            }
            Op::Linear { x, w, b } => {
                let inp = self.shape(*w)[1];
                let o = self.shape(*w)[0];
                let rows = gy.len() / o;
                if self.ng(*x) {
                    let n = self.value(*x).numel();
                    let gx = acc(grads, *x, n);
                    F::gemm(rows, o, inp, F::one(), gy, false, self.value(*w).data(), false, F::one(), gx);
                }
                if self.ng(*w) {
                    let gw = acc(grads, *w, o * inp);
                    F::gemm(o, rows, inp, F::one(), gy, true, self.value(*x).data(), false, F::one(), gw);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let gb = acc(grads, *b, o);
                        for r in 0..rows {
                            for j in 0..o {
                                gb[j] = gb[j] + gy[r * o + j];
                            }
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let xs = self.shape(*x).to_vec();
                let ws = self.shape(*w).to_vec();
                let (bn, c, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
                let (o, k) = (ws[0], ws[2]);
                let geo = ConvGeom::new(c, h, wd, k, *spec)?;
                let plane = geo.ho * geo.wo;
                let rows = geo.rows();
                let mut cols = vec![F::zero(); rows * plane];
                let mut dcols = vec![F::zero(); rows * plane];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let need_x = self.ng(*x);
                let need_w = self.ng(*w);
                let mut gw_local = if need_w { vec![F::zero(); wv.len()] } else { Vec::new() };
                let mut gx_local = if need_x { vec![F::zero(); xv.len()] } else { Vec::new() };
                for n in 0..bn {
                    let gyn = &gy[n * o * plane..(n + 1) * o * plane];
                    if need_w {
                        geo.im2col(&xv[n * c * h * wd..(n + 1) * c * h * wd], &mut cols);
                        F::gemm(o, plane, rows, F::one(), gyn, false, &cols, true, F::one(), &mut gw_local);
                    }
                    if need_x {
                        F::gemm(rows, o, plane, F::one(), wv, true, gyn, false, F::zero(), &mut dcols);
                        geo.col2im_add(&dcols, &mut gx_local[n * c * h * wd..(n + 1) * c * h * wd]);
                    }
                }
                if need_w {
                    add_into(acc(grads, *w, wv.len()), &gw_local);
                }
                if need_x {
                    add_into(acc(grads, *x, xv.len()), &gx_local);
                }
                if let Some(b) = b {
                    if self.ng(*b) {
                        let gb = acc(grads, *b, o);
                        for n in 0..bn {
                            for oc in 0..o {
                                let s: F = gy[(n * o + oc) * plane..(n * o + oc + 1) * plane]
                                    .iter()
                                    .copied()
                                    .sum();
                                gb[oc] = gb[oc] + s;
                            }
                        }
                    }
                }
            }
            Op::Relu(x) => {
                if self.ng(*x) {
                    let yv = node.value.data();
                    let gx = acc(grads, *x, yv.len());
                    for j in 0..yv.len() {
                        if yv[j] > F::zero() {
                            gx[j] = gx[j] + gy[j];
                        }
                    }
                }
            }
            Op::Sigmoid(x) => {
                if self.ng(*x) {
                    let yv = node.value.data();
                    let gx = acc(grads, *x, yv.len());
                    for j in 0..yv.len() {
                        gx[j] = gx[j] + gy[j] * yv[j] * (F::one() - yv[j]);
                    }
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.ng(v) {
                        add_into(acc(grads, v, gy.len()), gy);
                    }
                }
            }
            Op::Mul(a, b) => {
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.ng(*a) {
                    let ga = acc(grads, *a, gy.len());
                    for j in 0..gy.len() {
                        ga[j] = ga[j] + gy[j] * bv[j];
                    }
                }
                if self.ng(*b) {
                    let gb = acc(grads, *b, gy.len());
                    for j in 0..gy.len() {
                        gb[j] = gb[j] + gy[j] * av[j];
                    }
                }
            }
            Op::Scale(x, s) => {
                if self.ng(*x) {
                    let gx = acc(grads, *x, gy.len());
                    for j in 0..gy.len() {
                        gx[j] = gx[j] + gy[j] * *s;
                    }
                }
            }
            Op::Bmm { a, b, ta, tb } => {
                let as_ = self.shape(*a).to_vec();
                let bs = self.shape(*b).to_vec();
                let (m, k) = if *ta { (as_[2], as_[1]) } else { (as_[1], as_[2]) };
                let n = if *tb { bs[1] } else { bs[2] };
                let batch = as_[0];
                let av = self.value(*a).data();
                let bv = self.value(*b).data();
                if self.ng(*a) {
                    let ga = acc(grads, *a, av.len());
                    for i in 0..batch {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let bi = &bv[i * k * n..(i + 1) * k * n];
                        let gai = &mut ga[i * m * k..(i + 1) * m * k];
                        if *ta {
                            // stored k x m: op(B) · dCᵀ
                            F::gemm(k, n, m, F::one(), bi, *tb, gyi, true, F::one(), gai);
                        } else {
                            F::gemm(m, n, k, F::one(), gyi, false, bi, !*tb, F::one(), gai);
                        }
                    }
                }
                if self.ng(*b) {
                    let gb = acc(grads, *b, bv.len());
                    for i in 0..batch {
                        let gyi = &gy[i * m * n..(i + 1) * m * n];
                        let ai = &av[i * m * k..(i + 1) * m * k];
                        let gbi = &mut gb[i * k * n..(i + 1) * k * n];
                        if *tb {
                            // stored n x k: dCᵀ · op(A)
                            F::gemm(n, m, k, F::one(), gyi, true, ai, *ta, F::one(), gbi);
                        } else {
                            F::gemm(k, m, n, F::one(), ai, !*ta, gyi, false, F::one(), gbi);
                        }
                    }
                }
            }
            Op::SoftmaxRows(x) => {
                if self.ng(*x) {
                    let yv = node.value.data();
                    let c = *node.value.shape().last().unwrap();
                    let gx = acc(grads, *x, yv.len());
                    for r in 0..yv.len() / c {
                        let y = &yv[r * c..(r + 1) * c];
                        let g = &gy[r * c..(r + 1) * c];
                        let dot: F = y.iter().zip(g).map(|(a, b)| *a * *b).sum();
                        for j in 0..c {
                            gx[r * c + j] = gx[r * c + j] + y[j] * (g[j] - dot);
                        }
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let c = self.shape(*gamma)[0];
                let rows = xhat.len() / c;
                let g = self.value(*gamma).data();
                if self.ng(*gamma) {
                    let gg = acc(grads, *gamma, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gg[j] = gg[j] + gy[r * c + j] * xhat[r * c + j];
                        }
                    }
                }
                if self.ng(*beta) {
                    let gb = acc(grads, *beta, c);
                    for r in 0..rows {
                        for j in 0..c {
                            gb[j] = gb[j] + gy[r * c + j];
                        }
                    }
                }
                if self.ng(*x) {
                    let cf = F::from_usize(c).unwrap();
                    let gx = acc(grads, *x, xhat.len());
                    let mut dxh = vec![F::zero(); c];
                    for r in 0..rows {
                        let mut m1 = F::zero();
                        let mut m2 = F::zero();
                        for j in 0..c {
                            dxh[j] = gy[r * c + j] * g[j];
                            m1 = m1 + dxh[j];
                            m2 = m2 + dxh[j] * xhat[r * c + j];
                        }
                        m1 = m1 / cf;
                        m2 = m2 / cf;
                        for j in 0..c {
                            gx[r * c + j] =
                                gx[r * c + j] + rstd[r] * (dxh[j] - m1 - xhat[r * c + j] * m2);
                        }
                    }
                }
            }
            Op::GatherRows { x, idx } => {
                if self.ng(*x) {
                    let c = self.shape(*x)[1];
                    let n = self.value(*x).numel();
                    let gx = acc(grads, *x, n);
                    for (r, &src) in idx.iter().enumerate() {
                        for j in 0..c {
                            gx[src * c + j] = gx[src * c + j] + gy[r * c + j];
                        }
                    }
                }
            }
            Op::GroupMax { x, group, argmax } => {
                if self.ng(*x) {
                    let c = self.shape(*x)[1];
                    let n = self.value(*x).numel();
                    let gx = acc(grads, *x, n);
                    for (o, &a) in argmax.iter().enumerate() {
                        let (gi, ch) = (o / c, o % c);
                        let row = gi * group + a as usize;
                        gx[row * c + ch] = gx[row * c + ch] + gy[o];
                    }
                }
            }
            Op::Transpose12(x) => {
                if self.ng(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (b, p, q) = (xs[0], xs[1], xs[2]);
                    let gx = acc(grads, *x, b * p * q);
                    for n in 0..b {
                        for i in 0..p {
                            for j in 0..q {
                                let d = n * p * q + i * q + j;
                                gx[d] = gx[d] + gy[n * p * q + j * p + i];
                            }
                        }
                    }
                }
            }
            Op::Reshape(x) => {
                if self.ng(*x) {
                    add_into(acc(grads, *x, gy.len()), gy);
                }
            }
            Op::StripPool { x, strips, argmax } => {
                if self.ng(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (s, c, h, w) = (xs[0], xs[1], xs[2], xs[3]);
                    let cell = (h / strips) * w;
                    let inv = F::one() / F::from_usize(cell).unwrap();
                    let gx = acc(grads, *x, s * c * h * w);
                    for n in 0..s {
                        for p in 0..*strips {
                            for ch in 0..c {
                                let o = (n * strips + p) * c + ch;
                                let base = (n * c + ch) * h * w + p * cell;
                                let share = gy[o] * inv;
                                for e in &mut gx[base..base + cell] {
                                    *e = *e + share;
                                }
                                let a = base + argmax[o] as usize;
                                gx[a] = gx[a] + gy[o];
                            }
                        }
                    }
                }
            }
            Op::MeanAxis1(x) => {
                if self.ng(*x) {
                    let xs = self.shape(*x).to_vec();
                    let (s, p, c) = (xs[0], xs[1], xs[2]);
                    let inv = F::one() / F::from_usize(p).unwrap();
                    let gx = acc(grads, *x, s * p * c);
                    for n in 0..s {
                        for i in 0..p {
                            for ch in 0..c {
                                let d = (n * p + i) * c + ch;
                                gx[d] = gx[d] + gy[n * c + ch] * inv;
                            }
                        }
                    }
                }
            }
            Op::MulBcast1 { x, g } => {
                let xs = self.shape(*x).to_vec();
                let (s, p, c) = (xs[0], xs[1], xs[2]);
                let xv = self.value(*x).data();
                let gv = self.value(*g).data();
                if self.ng(*x) {
                    let gx = acc(grads, *x, s * p * c);
                    for n in 0..s {
                        for i in 0..p {
                            for ch in 0..c {
                                let d = (n * p + i) * c + ch;
                                gx[d] = gx[d] + gy[d] * gv[n * c + ch];
                            }
                        }
                    }
                }
                if self.ng(*g) {
                    let gg = acc(grads, *g, s * c);
                    for n in 0..s {
                        for i in 0..p {
                            for ch in 0..c {
                                let d = (n * p + i) * c + ch;
                                gg[n * c + ch] = gg[n * c + ch] + gy[d] * xv[d];
                            }
                        }
                    }
                }
            }
            Op::StripLinear { x, w, b } => {
                let xs = self.shape(*x).to_vec();
                let (s, p, i) = (xs[0], xs[1], xs[2]);
                let o = self.shape(*w)[1];
                let xv = self.value(*x).data();
                let wv = self.value(*w).data();
                let mut gyp = vec![F::zero(); s * o];
                let mut xp = vec![F::zero(); s * i];
                let mut gxp = vec![F::zero(); s * i];
                let need_x = self.ng(*x);
                let need_w = self.ng(*w);
                let need_b = self.ng(*b);
                let mut gx_local = if need_x { vec![F::zero(); s * p * i] } else { Vec::new() };
                let mut gw_local = if need_w { vec![F::zero(); p * o * i] } else { Vec::new() };
                let mut gb_local = if need_b { vec![F::zero(); p * o] } else { Vec::new() };
                for pi in 0..p {
                    for n in 0..s {
                        gyp[n * o..(n + 1) * o]
                            .copy_from_slice(&gy[(n * p + pi) * o..(n * p + pi + 1) * o]);
                        xp[n * i..(n + 1) * i]
                            .copy_from_slice(&xv[(n * p + pi) * i..(n * p + pi + 1) * i]);
                    }
                    if need_w {
                        F::gemm(
                            o,
                            s,
                            i,
                            F::one(),
                            &gyp,
                            true,
                            &xp,
                            false,
                            F::one(),
                            &mut gw_local[pi * o * i..(pi + 1) * o * i],
                        );
                    }
                    if need_x {
                        F::gemm(
                            s,
                            o,
                            i,
                            F::one(),
                            &gyp,
                            false,
                            &wv[pi * o * i..(pi + 1) * o * i],
                            false,
                            F::zero(),
                            &mut gxp,
                        );
                        for n in 0..s {
                            gx_local[(n * p + pi) * i..(n * p + pi + 1) * i]
                                .copy_from_slice(&gxp[n * i..(n + 1) * i]);
                        }
                    }
                    if need_b {
                        for n in 0..s {
                            for j in 0..o {
                                gb_local[pi * o + j] = gb_local[pi * o + j] + gyp[n * o + j];
                            }
                        }
                    }
                }
                if need_x {
                    add_into(acc(grads, *x, s * p * i), &gx_local);
                }
                if need_w {
                    add_into(acc(grads, *w, p * o * i), &gw_local);
                }
                if need_b {
                    add_into(acc(grads, *b, p * o), &gb_local);
                }
            }
        }
        Ok(())
    }
}

fn acc<F: Scalar>(grads: &mut [Option<Vec<F>>], v: Var, len: usize) -> &mut Vec<F> {
    grads[v.0].get_or_insert_with(|| vec![F::zero(); len])
}

fn add_into<F: Scalar>(dst: &mut [F], src: &[F]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d = *d + *s;
    }
}

struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn new(c: usize, h: usize, w: usize, k: usize, spec: Conv2dSpec) -> Result<Self> {
        if spec.stride == 0 || h + 2 * spec.pad < k || w + 2 * spec.pad < k {
            return Err(shape_err(format!(
                "conv geometry: {h}x{w} kernel {k} {spec:?}"
            )));
        }
        Ok(Self {
            c,
            h,
            w,
            k,
            stride: spec.stride,
            pad: spec.pad,
            ho: (h + 2 * spec.pad - k) / spec.stride + 1,
            wo: (w + 2 * spec.pad - k) / spec.stride + 1,
        })
    }

    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn im2col<F: Scalar>(&self, img: &[F], cols: &mut [F]) {
        let plane = self.ho * self.wo;
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            dst[oy * self.wo + ox] = if iy >= 0
                                && ix >= 0
                                && (iy as usize) < self.h
                                && (ix as usize) < self.w
                            {
                                img[(ch * self.h + iy as usize) * self.w + ix as usize]
                            } else {
                                F::zero()
                            };
                        }
                    }
                }
            }
        }
    }

    fn col2im_add<F: Scalar>(&self, cols: &[F], img: &mut [F]) {
        let plane = self.ho * self.wo;
        for ch in 0..self.c {
            for ky in 0..self.k {
                for kx in 0..self.k {
                    let row = (ch * self.k + ky) * self.k + kx;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix < 0 || ix as usize >= self.w {
                                continue;
                            }
                            let d = (ch * self.h + iy as usize) * self.w + ix as usize;
                            img[d] = img[d] + src[oy * self.wo + ox];
                        }
                    }
                }
            }
        }
    }
}
