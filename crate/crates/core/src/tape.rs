//! Reverse-mode automatic differentiation over a linear tape.
//!
//! Every operation evaluates eagerly and appends one record holding its
//! output value and the handles of its operands. Because operands must
//! already exist when a record is appended, the tape is always in
//! topological order and [`Tape::backward`] is a single reverse sweep.
//!
//! Parameters enter the tape through [`Tape::param`], which copies the
//! current value out of a [`ParamStore`]; the backward sweep accumulates
//! their gradients back into the same store.

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::param::{ParamId, ParamStore};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

/// Deliberate gradient corruption used to prove the gradient checker can fail.
#[doc(hidden)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Fault {
    /// Scales the convolution weight gradient by 1.5.
    ConvWeightGrad,
}

#[derive(Clone, Debug)]
enum Op<T> {
    Leaf,
    Param(ParamId),
    Conv2d { input: Var, weight: Var, bias: Option<Var>, stride: usize, padding: usize },
    Relu(Var),
    GlobalAvgPool(Var),
    Linear { x: Var, weight: Var, bias: Var },
    Add(Var, Var),
    MseLoss { pred: Var, label: Var },
    Reshape(Var),
    Sum(Var),
    Affine { x: Var, scale: T },
}

#[derive(Clone, Debug)]
struct Node<T> {
    value: Tensor<T>,
    op: Op<T>,
    requires_grad: bool,
}

/// Operation record for one training or inference context.
#[derive(Debug, Default)]
pub struct Tape<T> {
    nodes: Vec<Node<T>>,
    fault: Option<Fault>,
}

/// Gradients of leaf values created with `requires_grad = true`.
#[derive(Debug, Default)]
pub struct Gradients<T> {
    leaves: HashMap<Var, Tensor<T>>,
}

impl<T: Scalar> Gradients<T> {
    pub fn get(&self, var: Var) -> Option<&Tensor<T>> {
        self.leaves.get(&var)
    }
}

/// Output extent of a strided, zero-padded window sweep.
pub fn conv_output_extent(input: usize, kernel: usize, stride: usize, padding: usize) -> Option<usize> {
    let padded = input + 2 * padding;
    if stride == 0 || kernel == 0 || kernel > padded {
        return None;
    }
    Some((padded - kernel) / stride + 1)
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), fault: None }
    }

    #[doc(hidden)]
    pub fn with_fault(fault: Fault) -> Self {
        Self { nodes: Vec::new(), fault: Some(fault) }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, var: Var) -> &Tensor<T> {
        &self.nodes[var.0].value
    }

    pub fn requires_grad(&self, var: Var) -> bool {
        self.nodes[var.0].requires_grad
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node { value, op, requires_grad });
        Var(self.nodes.len() - 1)
    }

    /// Records an input value. Gradients of leaves with `requires_grad` are
    /// returned by [`Tape::backward`].
    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    /// Records the current value of a trainable parameter.
    pub fn param(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id), true)
    }

    /// Records a parameter value without gradient tracking (inference).
    pub fn frozen(&mut self, store: &ParamStore<T>, id: ParamId) -> Var {
        self.constant(store.get(id).value.clone())
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// 2-D cross-correlation over an `[N, C, H, W]` input with an
    /// `[O, C, kh, kw]` kernel.
    pub fn conv2d(
        &mut self,
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be positive"));
        }
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let (n, c, h, wd) = x.dims4()?;
        let (o, wc, kh, kw) = w.dims4()?;
        if wc != c {
            return Err(Error::shape(format!(
                "conv2d input {:?} has {c} channels but weight {:?} expects {wc}",
                x.shape(),
                w.shape()
            )));
        }
        let (ho, wo) = match (
            conv_output_extent(h, kh, stride, padding),
            conv_output_extent(wd, kw, stride, padding),
        ) {
            (Some(a), Some(b)) => (a, b),
            _ => {
                return Err(Error::shape(format!(
                    "conv2d kernel {:?} does not fit input {:?} with padding {padding}",
                    w.shape(),
                    x.shape()
                )))
            }
        };
        let b = match bias {
            Some(bv) => {
                let bt = &self.nodes[bv.0].value;
                if bt.shape() != [o] {
                    return Err(Error::shape(format!(
                        "conv2d bias {:?} does not match weight {:?}",
                        bt.shape(),
                        w.shape()
                    )));
                }
                Some(bt.data())
            }
            None => None,
        };
        let geom = ConvGeom { c, h, w: wd, kh, kw, ho, wo, stride, padding };
        let ckk = c * kh * kw;
        let plane = ho * wo;
        let mut out = vec![T::zero(); n * o * plane];
        let mut cols = vec![T::zero(); ckk * plane];
        for s in 0..n {
            let xs = &x.data()[s * c * h * wd..(s + 1) * c * h * wd];
            geom.im2col(xs, &mut cols);
            let os = &mut out[s * o * plane..(s + 1) * o * plane];
            for oc in 0..o {
                let row = &mut os[oc * plane..(oc + 1) * plane];
                let init = b.map_or(T::zero(), |b| b[oc]);
                row.iter_mut().for_each(|v| *v = init);
                let wrow = &w.data()[oc * ckk..(oc + 1) * ckk];
                for (k, &wv) in wrow.iter().enumerate() {
                    let col = &cols[k * plane..(k + 1) * plane];
                    for (r, &cv) in row.iter_mut().zip(col) {
                        *r += wv * cv;
                    }
                }
            }
        }
        let mut operands = vec![input, weight];
        operands.extend(bias);
        let rg = self.any_grad(&operands);
        let value = Tensor::new(vec![n, o, ho, wo], out)?;
        Ok(self.push(value, Op::Conv2d { input, weight, bias, stride, padding }, rg))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.nodes[x.0].value.map(|v| if v > T::zero() { v } else { T::zero() });
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    /// Mean over each `H x W` plane: `[N, C, H, W] -> [N, C]`.
    pub fn global_avg_pool(&mut self, x: Var) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let (n, c, h, w) = xt.dims4()?;
        let plane = h * w;
        let denom = T::from_usize_lossy(plane);
        let data: Vec<T> = xt
            .data()
            .chunks_exact(plane)
            .map(|p| p.iter().copied().sum::<T>() / denom)
            .collect();
        let rg = self.any_grad(&[x]);
        let value = Tensor::new(vec![n, c], data)?;
        Ok(self.push(value, Op::GlobalAvgPool(x), rg))
    }

    /// Affine map `x W^T + b` with `x: [N, F]`, `W: [G, F]`, `b: [G]`.
    pub fn linear(&mut self, x: Var, weight: Var, bias: Var) -> Result<Var> {
        let xt = &self.nodes[x.0].value;
        let wt = &self.nodes[weight.0].value;
        let bt = &self.nodes[bias.0].value;
        let (n, f) = xt.dims2()?;
        let (g, wf) = wt.dims2()?;
        if wf != f || bt.shape() != [g] {
            return Err(Error::shape(format!(
                "linear input {:?} incompatible with weight {:?} and bias {:?}",
                xt.shape(),
                wt.shape(),
                bt.shape()
            )));
        }
        let mut out = Vec::with_capacity(n * g);
        for row in xt.data().chunks_exact(f) {
            for (gi, wrow) in wt.data().chunks_exact(f).enumerate() {
                let dot: T = row.iter().zip(wrow).map(|(&a, &b)| a * b).sum();
                out.push(dot + bt.data()[gi]);
            }
        }
        let rg = self.any_grad(&[x, weight, bias]);
        let value = Tensor::new(vec![n, g], out)?;
        Ok(self.push(value, Op::Linear { x, weight, bias }, rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let at = &self.nodes[a.0].value;
        let bt = &self.nodes[b.0].value;
        if at.shape() != bt.shape() {
            return Err(Error::shape(format!("add operands {:?} and {:?} differ", at.shape(), bt.shape())));
        }
        let data = at.data().iter().zip(bt.data()).map(|(&x, &y)| x + y).collect();
        let value = Tensor::new(at.shape().to_vec(), data)?;
        let rg = self.any_grad(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    /// Mean squared error `(1/N) sum (pred - label)^2` of two length-N vectors.
    pub fn mse_loss(&mut self, pred: Var, label: Var) -> Result<Var> {
        let p = &self.nodes[pred.0].value;
        let l = &self.nodes[label.0].value;
        if p.rank() != 1 || p.shape() != l.shape() {
            return Err(Error::shape(format!(
                "mse_loss expects equal-length vectors, got {:?} and {:?}",
                p.shape(),
                l.shape()
            )));
        }
        let n = T::from_usize_lossy(p.len());
        let loss = p.data().iter().zip(l.data()).map(|(&a, &b)| (a - b) * (a - b)).sum::<T>() / n;
        let rg = self.any_grad(&[pred, label]);
        Ok(self.push(Tensor::scalar(loss), Op::MseLoss { pred, label }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.clone().reshape(shape)?;
        let rg = self.any_grad(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.nodes[x.0].value.sum());
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Sum(x), rg)
    }

    /// Elementwise `scale * x + shift` with constant coefficients.
    pub fn affine(&mut self, x: Var, scale: T, shift: T) -> Var {
        let value = self.nodes[x.0].value.map(|v| scale * v + shift);
        let rg = self.any_grad(&[x]);
        self.push(value, Op::Affine { x, scale }, rg)
    }

    /// Propagates `d loss / d value` back through the tape.
    ///
    /// Parameter gradients are added to `params`; gradients of tracked leaves
    /// are returned. The tape is cleared afterwards.
    pub fn backward(&mut self, loss: Var, params: &mut ParamStore<T>) -> Result<Gradients<T>> {
        let loss_len = self.nodes[loss.0].value.len();
        if loss_len != 1 {
            return Err(Error::shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.nodes[loss.0].value.shape()
            )));
        }
        let mut grads: Vec<Option<Vec<T>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![T::one()]);
        let mut out = Gradients::default();

        for idx in (0..=loss.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].requires_grad {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {
                    let t = Tensor::new(node.value.shape().to_vec(), g)?;
                    out.leaves.insert(Var(idx), t);
                }
                Op::Param(id) => params.accumulate_grad(*id, &g),
                Op::Conv2d { input, weight, bias, stride, padding } => {
                    self.conv2d_backward(&mut grads, &g, *input, *weight, *bias, *stride, *padding)?;
                }
                Op::Relu(x) => {
                    let xv = &self.nodes[x.0].value;
                    let d = g
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &v)| if v > T::zero() { gi } else { T::zero() })
                        .collect();
                    self.accumulate(&mut grads, *x, d);
                }
                Op::GlobalAvgPool(x) => {
                    let (_, _, h, w) = self.nodes[x.0].value.dims4()?;
                    let plane = h * w;
                    let denom = T::from_usize_lossy(plane);
                    let mut d = Vec::with_capacity(g.len() * plane);
                    for &gi in &g {
                        d.extend(std::iter::repeat_n(gi / denom, plane));
                    }
                    self.accumulate(&mut grads, *x, d);
                }
                Op::Linear { x, weight, bias } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[weight.0].value;
                    let (n, f) = xv.dims2()?;
                    let (gout, _) = wv.dims2()?;
                    if self.nodes[x.0].requires_grad {
                        let mut dx = vec![T::zero(); n * f];
                        for r in 0..n {
                            let dxr = &mut dx[r * f..(r + 1) * f];
                            for gi in 0..gout {
                                let dy = g[r * gout + gi];
                                let wrow = &wv.data()[gi * f..(gi + 1) * f];
                                for (a, &wv) in dxr.iter_mut().zip(wrow) {
                                    *a += dy * wv;
                                }
                            }
                        }
                        self.accumulate(&mut grads, *x, dx);
                    }
                    if self.nodes[weight.0].requires_grad {
                        let mut dw = vec![T::zero(); gout * f];
                        for r in 0..n {
                            let xr = &xv.data()[r * f..(r + 1) * f];
                            for gi in 0..gout {
                                let dy = g[r * gout + gi];
                                let dwr = &mut dw[gi * f..(gi + 1) * f];
                                for (a, &xv) in dwr.iter_mut().zip(xr) {
                                    *a += dy * xv;
                                }
                            }
                        }
                        self.accumulate(&mut grads, *weight, dw);
                    }
                    if self.nodes[bias.0].requires_grad {
                        let mut db = vec![T::zero(); gout];
                        for row in g.chunks_exact(gout) {
                            for (a, &d) in db.iter_mut().zip(row) {
                                *a += d;
                            }
                        }
                        self.accumulate(&mut grads, *bias, db);
                    }
                }
                Op::Add(a, b) => {
                    let (a, b) = (*a, *b);
                    self.accumulate(&mut grads, b, g.clone());
                    self.accumulate(&mut grads, a, g);
                }
                Op::MseLoss { pred, label } => {
                    let p = &self.nodes[pred.0].value;
                    let l = &self.nodes[label.0].value;
                    let scale = T::lit(2.0) * g[0] / T::from_usize_lossy(p.len());
                    let dp: Vec<T> = p.data().iter().zip(l.data()).map(|(&a, &b)| scale * (a - b)).collect();
                    let dl = dp.iter().map(|&v| -v).collect();
                    let (pred, label) = (*pred, *label);
                    self.accumulate(&mut grads, label, dl);
                    self.accumulate(&mut grads, pred, dp);
                }
                Op::Reshape(x) => self.accumulate(&mut grads, *x, g),
                Op::Sum(x) => {
                    let n = self.nodes[x.0].value.len();
                    self.accumulate(&mut grads, *x, vec![g[0]; n]);
                }
                Op::Affine { x, scale } => {
                    let s = *scale;
                    let d = g.iter().map(|&v| v * s).collect();
                    self.accumulate(&mut grads, *x, d);
                }
            }
        }
        self.nodes.clear();
        Ok(out)
    }

    fn accumulate(&self, grads: &mut [Option<Vec<T>>], var: Var, delta: Vec<T>) {
        if !self.nodes[var.0].requires_grad {
            return;
        }
        match &mut grads[var.0] {
            Some(existing) => {
                for (e, d) in existing.iter_mut().zip(delta) {
                    *e += d;
                }
            }
            slot @ None => *slot = Some(delta),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn conv2d_backward(
        &self,
        grads: &mut [Option<Vec<T>>],
        g: &[T],
        input: Var,
        weight: Var,
        bias: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<()> {
        let x = &self.nodes[input.0].value;
        let w = &self.nodes[weight.0].value;
        let (n, c, h, wd) = x.dims4()?;
        let (o, _, kh, kw) = w.dims4()?;
        let ho = conv_output_extent(h, kh, stride, padding).expect("validated in forward");
        let wo = conv_output_extent(wd, kw, stride, padding).expect("validated in forward");
        let geom = ConvGeom { c, h, w: wd, kh, kw, ho, wo, stride, padding };
        let ckk = c * kh * kw;
        let plane = ho * wo;
        let want_x = self.nodes[input.0].requires_grad;
        let want_w = self.nodes[weight.0].requires_grad;

        if let Some(bv) = bias {
            if self.nodes[bv.0].requires_grad {
                let mut db = vec![T::zero(); o];
                for s in 0..n {
                    for (oc, acc) in db.iter_mut().enumerate() {
                        let base = (s * o + oc) * plane;
                        *acc += g[base..base + plane].iter().copied().sum::<T>();
                    }
                }
                self.accumulate(grads, bv, db);
            }
        }
        if !want_x && !want_w {
            return Ok(());
        }

        let mut cols = vec![T::zero(); ckk * plane];
        let mut dcols = vec![T::zero(); ckk * plane];
        let mut dw = if want_w { vec![T::zero(); o * ckk] } else { Vec::new() };
        let mut dx = if want_x { vec![T::zero(); n * c * h * wd] } else { Vec::new() };
        for s in 0..n {
            let gs = &g[s * o * plane..(s + 1) * o * plane];
            if want_w {
                let xs = &x.data()[s * c * h * wd..(s + 1) * c * h * wd];
                geom.im2col(xs, &mut cols);
                for oc in 0..o {
                    let grow = &gs[oc * plane..(oc + 1) * plane];
                    let dwr = &mut dw[oc * ckk..(oc + 1) * ckk];
                    for (k, acc) in dwr.iter_mut().enumerate() {
                        let col = &cols[k * plane..(k + 1) * plane];
                        *acc += grow.iter().zip(col).map(|(&a, &b)| a * b).sum::<T>();
                    }
                }
            }
            if want_x {
                dcols.iter_mut().for_each(|v| *v = T::zero());
                for oc in 0..o {
                    let grow = &gs[oc * plane..(oc + 1) * plane];
                    let wrow = &w.data()[oc * ckk..(oc + 1) * ckk];
                    for (k, &wv) in wrow.iter().enumerate() {
                        let dcol = &mut dcols[k * plane..(k + 1) * plane];
                        for (d, &gv) in dcol.iter_mut().zip(grow) {
                            *d += wv * gv;
                        }
                    }
                }
                geom.col2im_add(&dcols, &mut dx[s * c * h * wd..(s + 1) * c * h * wd]);
            }
        }
        if want_w {
            if self.fault == Some(Fault::ConvWeightGrad) {
                dw.iter_mut().for_each(|v| *v *= T::lit(1.5));
            }
            self.accumulate(grads, weight, dw);
        }
        if want_x {
            self.accumulate(grads, input, dx);
        }
        Ok(())
    }
}

/// Geometry of one convolution, used to unfold input windows into columns.
struct ConvGeom {
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    ho: usize,
    wo: usize,
    stride: usize,
    padding: usize,
}

impl ConvGeom {
    /// Unfolds one `[C, H, W]` sample into `[C*kh*kw, ho*wo]` columns.
    fn im2col<T: Scalar>(&self, x: &[T], cols: &mut [T]) {
        let plane = self.ho * self.wo;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let dst = &mut cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &x[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            *v = if ix < 0 || ix >= self.w as isize { T::zero() } else { src[ix as usize] };
                        }
                    }
                }
            }
        }
    }

    /// Adjoint of [`ConvGeom::im2col`]: scatters columns back onto the input grid.
    fn col2im_add<T: Scalar>(&self, cols: &[T], dx: &mut [T]) {
        let plane = self.ho * self.wo;
        for ci in 0..self.c {
            for ki in 0..self.kh {
                for kj in 0..self.kw {
                    let row = (ci * self.kh + ki) * self.kw + kj;
                    let src = &cols[row * plane..(row + 1) * plane];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ki) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut dx[(ci * self.h + iy as usize) * self.w..][..self.w];
                        for ox in 0..self.wo {
                            let ix = (ox * self.stride + kj) as isize - self.padding as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += src[oy * self.wo + ox];
                            }
                        }
                    }
                }
            }
        }
    }
}
