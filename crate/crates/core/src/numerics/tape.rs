//! Reverse-mode autodiff on a linear tape.
//!
//! Ops append nodes to the tape in execution order, so tape order is already
//! a topological order; the backward pass walks it once in reverse. Shape
//! mismatches are contract violations and panic with the op name and both
//! shapes.

use super::array::Array;
use super::gemm::{gemm_nn, gemm_nt, gemm_tn};

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(usize, usize),
    AddScalar(usize),
    Scale(usize, f32),
    Mul(usize, usize),
    Minimum(usize, usize),
    Maximum(usize, usize),
    Relu(usize),
    Tanh(usize),
    Sigmoid(usize),
    Exp(usize),
    Log(usize),
    Clamp(usize, f32, f32),
    Matmul(usize, usize),
    AddRowBias(usize, usize),
    AddChanBias(usize, usize),
    RowSum(usize),
    Sum(usize),
    Mean(usize),
    Concat(usize, usize, usize),
    Reshape(usize),
    Conv2d { x: usize, w: usize, stride: usize, pad: usize },
    ConvT2d { x: usize, w: usize, stride: usize, pad: usize },
    GaussianSample { mu: usize, logvar: usize, noise: usize },
    BceLogits { logits: usize, target: usize },
}

struct Node {
    value: Array,
    op: Op,
    needs_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Array>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Array> {
        self.grads[v.0].as_ref()
    }

    /// Gradient of a variable that participated in the loss.
    pub fn wrt(&self, v: Var) -> &Array {
        self.grads[v.0].as_ref().expect("variable has no gradient")
    }
}

#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Self { nodes: Vec::new() }
    }

    pub fn value(&self, v: Var) -> &Array {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Array, op: Op, needs_grad: bool) -> Var {
        value.debug_check_finite("tape op");
        self.nodes.push(Node { value, op, needs_grad });
        Var(self.nodes.len() - 1)
    }

    fn needs(&self, i: usize) -> bool {
        self.nodes[i].needs_grad
    }

    /// Constant input; no gradient flows to it.
    pub fn input(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// Differentiable leaf (a parameter).
    pub fn param(&mut self, value: Array) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "add: shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x + y).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::Add(a.0, b.0), ng)
    }

    pub fn add_scalar(&mut self, a: Var, c: f32) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x + c).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::AddScalar(a.0), ng)
    }

    pub fn scale(&mut self, a: Var, c: f32) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x * c).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::Scale(a.0, c), ng)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "mul: shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::Mul(a.0, b.0), ng)
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "minimum: shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x.min(*y)).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::Minimum(a.0, b.0), ng)
    }

    pub fn maximum(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(va.shape(), vb.shape(), "maximum: shape mismatch {:?} vs {:?}", va.shape(), vb.shape());
        let data = va.data().iter().zip(vb.data()).map(|(x, y)| x.max(*y)).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::Maximum(a.0, b.0), ng)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.max(0.0)).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::Relu(a.0), ng)
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.tanh()).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::Tanh(a.0), ng)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| sigmoid(*x)).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::Sigmoid(a.0), ng)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.exp()).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::Exp(a.0), ng)
    }

    pub fn log(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.ln()).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::Log(a.0), ng)
    }

    /// Elementwise clamp. Gradient passes only strictly inside the bounds.
    pub fn clamp(&mut self, a: Var, lo: f32, hi: f32) -> Var {
        let va = &self.nodes[a.0].value;
        let data = va.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0);
        self.push(out, Op::Clamp(a.0, lo, hi), ng)
    }

    /// (n x k) * (k x m) -> (n x m).
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert!(
            va.shape().len() == 2 && vb.shape().len() == 2 && va.shape()[1] == vb.shape()[0],
            "matmul: shape mismatch {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let (n, k) = (va.shape()[0], va.shape()[1]);
        let m = vb.shape()[1];
        let mut out = Array::zeros(&[n, m]);
        gemm_nn(n, k, m, va.data(), vb.data(), out.data_mut());
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::Matmul(a.0, b.0), ng)
    }

    /// (n x d) + (d) broadcast over rows.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert!(
            va.shape().len() == 2 && vb.shape() == [va.shape()[1]],
            "add_row_bias: shape mismatch {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let d = va.shape()[1];
        let mut data = va.data().to_vec();
        for row in data.chunks_mut(d) {
            for (x, b) in row.iter_mut().zip(vb.data()) {
                *x += *b;
            }
        }
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0) || self.needs(bias.0);
        self.push(out, Op::AddRowBias(a.0, bias.0), ng)
    }

    /// (n x c x h x w) + (c) broadcast over batch and spatial dims.
    pub fn add_chan_bias(&mut self, a: Var, bias: Var) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert!(
            va.shape().len() == 4 && vb.shape() == [va.shape()[1]],
            "add_chan_bias: shape mismatch {:?} vs {:?}",
            va.shape(),
            vb.shape()
        );
        let (n, c, h, w) = shape4(va.shape());
        let hw = h * w;
        let mut data = va.data().to_vec();
        for ni in 0..n {
            for ci in 0..c {
                let b = vb.data()[ci];
                let base = (ni * c + ci) * hw;
                for x in &mut data[base..base + hw] {
                    *x += b;
                }
            }
        }
        let out = Array::from_vec(va.shape(), data);
        let ng = self.needs(a.0) || self.needs(bias.0);
        self.push(out, Op::AddChanBias(a.0, bias.0), ng)
    }

    /// (n x d) -> (n): sum over the last axis.
    pub fn row_sum(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(va.shape().len() == 2, "row_sum: need 2-d input, got {:?}", va.shape());
        let (n, d) = (va.shape()[0], va.shape()[1]);
        let mut data = vec![0.0f32; n];
        for (i, row) in va.data().chunks(d).enumerate() {
            data[i] = row.iter().sum();
        }
        let out = Array::from_vec(&[n], data);
        let ng = self.needs(a.0);
        self.push(out, Op::RowSum(a.0), ng)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        let s: f32 = va.data().iter().sum();
        let ng = self.needs(a.0);
        self.push(Array::scalar(s), Op::Sum(a.0), ng)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let va = &self.nodes[a.0].value;
        assert!(!va.is_empty(), "mean: empty input");
        let s: f32 = va.data().iter().sum();
        let m = s / va.len() as f32;
        let ng = self.needs(a.0);
        self.push(Array::scalar(m), Op::Mean(a.0), ng)
    }

    /// Concatenate along `axis`; all other dims must match.
    pub fn concat(&mut self, a: Var, b: Var, axis: usize) -> Var {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (sa, sb) = (va.shape(), vb.shape());
        assert!(
            sa.len() == sb.len()
                && axis < sa.len()
                && sa.iter().zip(sb).enumerate().all(|(i, (x, y))| i == axis || x == y),
            "concat(axis {axis}): shape mismatch {:?} vs {:?}",
            sa,
            sb
        );
        let outer: usize = sa[..axis].iter().product();
        let ia: usize = sa[axis..].iter().product();
        let ib: usize = sb[axis..].iter().product();
        let mut data = Vec::with_capacity(va.len() + vb.len());
        for o in 0..outer {
            data.extend_from_slice(&va.data()[o * ia..(o + 1) * ia]);
            data.extend_from_slice(&vb.data()[o * ib..(o + 1) * ib]);
        }
        let mut shape = sa.to_vec();
        shape[axis] = sa[axis] + sb[axis];
        let out = Array::from_vec(&shape, data);
        let ng = self.needs(a.0) || self.needs(b.0);
        self.push(out, Op::Concat(a.0, b.0, axis), ng)
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Var {
        let va = &self.nodes[a.0].value;
        let out = va.clone().reshaped(shape);
        let ng = self.needs(a.0);
        self.push(out, Op::Reshape(a.0), ng)
    }

    /// 2-d convolution: x (n,c,h,w) * w (o,c,kh,kw) -> (n,o,oh,ow).
    pub fn conv2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (sx, sw) = (vx.shape(), vw.shape());
        assert!(
            sx.len() == 4 && sw.len() == 4 && sx[1] == sw[1],
            "conv2d: shape mismatch {:?} vs {:?}",
            sx,
            sw
        );
        let (n, c, h, wdt) = shape4(sx);
        let (o, _, kh, kw) = shape4(sw);
        let (oh, ow) = conv_out(h, wdt, kh, kw, stride, pad);
        let ckk = c * kh * kw;
        let p = oh * ow;
        let mut out = Array::zeros(&[n, o, oh, ow]);
        let mut col = vec![0.0f32; ckk * p];
        for ni in 0..n {
            im2col(&vx.data()[ni * c * h * wdt..], c, h, wdt, kh, kw, stride, pad, oh, ow, &mut col);
            gemm_nn(o, ckk, p, vw.data(), &col, &mut out.data_mut()[ni * o * p..(ni + 1) * o * p]);
        }
        let ng = self.needs(x.0) || self.needs(w.0);
        self.push(out, Op::Conv2d { x: x.0, w: w.0, stride, pad }, ng)
    }

    /// Transposed 2-d convolution: x (n,ci,h,w) * w (ci,co,kh,kw) -> (n,co,oh,ow)
    /// with oh = (h-1)*stride + kh - 2*pad.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, stride: usize, pad: usize) -> Var {
        let (vx, vw) = (&self.nodes[x.0].value, &self.nodes[w.0].value);
        let (sx, sw) = (vx.shape(), vw.shape());
        assert!(
            sx.len() == 4 && sw.len() == 4 && sx[1] == sw[0],
            "conv_transpose2d: shape mismatch {:?} vs {:?}",
            sx,
            sw
        );
        let (n, ci, h, wdt) = shape4(sx);
        let (_, co, kh, kw) = shape4(sw);
        let oh = (h - 1) * stride + kh - 2 * pad;
        let ow = (wdt - 1) * stride + kw - 2 * pad;
        let ckk = co * kh * kw;
        let p = h * wdt;
        let mut out = Array::zeros(&[n, co, oh, ow]);
        let mut col = vec![0.0f32; ckk * p];
        for ni in 0..n {
            // col = w^T (ckk x ci) * x[n] (ci x p), then scatter back to image.
            col.iter_mut().for_each(|v| *v = 0.0);
            gemm_tn(ckk, ci, p, vw.data(), &vx.data()[ni * ci * p..(ni + 1) * ci * p], &mut col);
            col2im_add(
                &col,
                co,
                oh,
                ow,
                kh,
                kw,
                stride,
                pad,
                h,
                wdt,
                &mut out.data_mut()[ni * co * oh * ow..(ni + 1) * co * oh * ow],
            );
        }
        let ng = self.needs(x.0) || self.needs(w.0);
        self.push(out, Op::ConvT2d { x: x.0, w: w.0, stride, pad }, ng)
    }

    /// Reparameterized Gaussian sample: mu + exp(0.5*logvar) * noise.
    pub fn gaussian_sample(&mut self, mu: Var, logvar: Var, noise: Var) -> Var {
        let (vm, vl, vn) =
            (&self.nodes[mu.0].value, &self.nodes[logvar.0].value, &self.nodes[noise.0].value);
        assert!(
            vm.shape() == vl.shape() && vm.shape() == vn.shape(),
            "gaussian_sample: shape mismatch {:?} vs {:?} vs {:?}",
            vm.shape(),
            vl.shape(),
            vn.shape()
        );
        let data = vm
            .data()
            .iter()
            .zip(vl.data())
            .zip(vn.data())
            .map(|((m, l), e)| m + (0.5 * l).exp() * e)
            .collect();
        let out = Array::from_vec(vm.shape(), data);
        let ng = self.needs(mu.0) || self.needs(logvar.0);
        self.push(out, Op::GaussianSample { mu: mu.0, logvar: logvar.0, noise: noise.0 }, ng)
    }

    /// Elementwise binary cross-entropy evaluated on pre-sigmoid logits,
    /// numerically stable: max(x,0) - x*t + ln(1 + exp(-|x|)).
    pub fn bce_logits(&mut self, logits: Var, target: Var) -> Var {
        let (vx, vt) = (&self.nodes[logits.0].value, &self.nodes[target.0].value);
        assert_eq!(
            vx.shape(),
            vt.shape(),
            "bce_logits: shape mismatch {:?} vs {:?}",
            vx.shape(),
            vt.shape()
        );
        debug_assert!(vt.data().iter().all(|t| (0.0..=1.0).contains(t)), "bce target outside [0,1]");
        let data = vx
            .data()
            .iter()
            .zip(vt.data())
            .map(|(x, t)| x.max(0.0) - x * t + (-x.abs()).exp().ln_1p())
            .collect();
        let out = Array::from_vec(vx.shape(), data);
        let ng = self.needs(logits.0);
        self.push(out, Op::BceLogits { logits: logits.0, target: target.0 }, ng)
    }

    /// Reverse pass from a scalar loss. Each node is visited exactly once.
    pub fn backward(&self, loss: Var) -> Gradients {
        let lv = &self.nodes[loss.0].value;
        assert_eq!(lv.len(), 1, "backward: loss must be scalar, got shape {:?}", lv.shape());
        let mut grads: Vec<Option<Array>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss.0] = Some(Array::full(lv.shape(), 1.0));

        for i in (0..self.nodes.len()).rev() {
            if grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            let g = grads[i].take().unwrap();
            self.accumulate(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Gradients { grads }
    }

    fn accumulate(&self, i: usize, g: &Array, grads: &mut Vec<Option<Array>>) {
        let add_to = |grads: &mut Vec<Option<Array>>, idx: usize, contrib: Array| {
            if !self.nodes[idx].needs_grad {
                return;
            }
            match &mut grads[idx] {
                Some(acc) => {
                    for (a, c) in acc.data_mut().iter_mut().zip(contrib.data()) {
                        *a += *c;
                    }
                }
                slot @ None => *slot = Some(contrib),
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                add_to(grads, *a, g.clone());
                add_to(grads, *b, g.clone());
            }
            Op::AddScalar(a) => add_to(grads, *a, g.clone()),
            Op::Scale(a, c) => {
                let d = g.data().iter().map(|x| x * c).collect();
                add_to(grads, *a, Array::from_vec(g.shape(), d));
            }
            Op::Mul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let da = g.data().iter().zip(vb.data()).map(|(x, y)| x * y).collect();
                add_to(grads, *a, Array::from_vec(g.shape(), da));
                let db = g.data().iter().zip(va.data()).map(|(x, y)| x * y).collect();
                add_to(grads, *b, Array::from_vec(g.shape(), db));
            }
            Op::Minimum(a, b) | Op::Maximum(a, b) => {
                let is_min = matches!(self.nodes[i].op, Op::Minimum(..));
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let mut da = vec![0.0f32; g.len()];
                let mut db = vec![0.0f32; g.len()];
                for (k, gv) in g.data().iter().enumerate() {
                    let take_a = if is_min {
                        va.data()[k] <= vb.data()[k]
                    } else {
                        va.data()[k] >= vb.data()[k]
                    };
                    if take_a {
                        da[k] = *gv;
                    } else {
                        db[k] = *gv;
                    }
                }
                add_to(grads, *a, Array::from_vec(g.shape(), da));
                add_to(grads, *b, Array::from_vec(g.shape(), db));
            }
            Op::Relu(a) => {
                let va = &self.nodes[*a].value;
                let d = g.data().iter().zip(va.data()).map(|(x, v)| if *v > 0.0 { *x } else { 0.0 }).collect();
                add_to(grads, *a, Array::from_vec(g.shape(), d));
            }
            Op::Tanh(a) => {
                let y = &self.nodes[i].value;
                let d = g.data().iter().zip(y.data()).map(|(x, t)| x * (1.0 - t * t)).collect();
                add_to(grads, *a, Array::from_vec(g.shape(), d));
            }
            Op::Sigmoid(a) => {
                let y = &self.nodes[i].value;
                let d = g.data().iter().zip(y.data()).map(|(x, s)| x * s * (1.0 - s)).collect();
                add_to(grads, *a, Array::from_vec(g.shape(), d));
            }
            Op::Exp(a) => {
                let y = &self.nodes[i].value;
                let d = g.data().iter().zip(y.data()).map(|(x, e)| x * e).collect();
                add_to(grads, *a, Array::from_vec(g.shape(), d));
            }
            Op::Log(a) => {
                let va = &self.nodes[*a].value;
                let d = g.data().iter().zip(va.data()).map(|(x, v)| x / v).collect();
                add_to(grads, *a, Array::from_vec(g.shape(), d));
            }
            Op::Clamp(a, lo, hi) => {
                let va = &self.nodes[*a].value;
                let d = g
                    .data()
                    .iter()
                    .zip(va.data())
                    .map(|(x, v)| if *v > *lo && *v < *hi { *x } else { 0.0 })
                    .collect();
                add_to(grads, *a, Array::from_vec(g.shape(), d));
            }
            Op::Matmul(a, b) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let (n, k) = (va.shape()[0], va.shape()[1]);
                let m = vb.shape()[1];
                if self.nodes[*a].needs_grad {
                    let mut da = Array::zeros(va.shape());
                    gemm_nt(n, m, k, g.data(), vb.data(), da.data_mut());
                    add_to(grads, *a, da);
                }
                if self.nodes[*b].needs_grad {
                    let mut db = Array::zeros(vb.shape());
                    gemm_tn(k, n, m, va.data(), g.data(), db.data_mut());
                    add_to(grads, *b, db);
                }
            }
            Op::AddRowBias(a, bias) => {
                add_to(grads, *a, g.clone());
                if self.nodes[*bias].needs_grad {
                    let d = self.nodes[*bias].value.shape()[0];
                    let mut db = vec![0.0f32; d];
                    for row in g.data().chunks(d) {
                        for (acc, x) in db.iter_mut().zip(row) {
                            *acc += *x;
                        }
                    }
                    add_to(grads, *bias, Array::from_vec(&[d], db));
                }
            }
            Op::AddChanBias(a, bias) => {
                add_to(grads, *a, g.clone());
                if self.nodes[*bias].needs_grad {
                    let (n, c, h, w) = shape4(g.shape());
                    let hw = h * w;
                    let mut db = vec![0.0f32; c];
                    for ni in 0..n {
                        for ci in 0..c {
                            let base = (ni * c + ci) * hw;
                            db[ci] += g.data()[base..base + hw].iter().sum::<f32>();
                        }
                    }
                    add_to(grads, *bias, Array::from_vec(&[c], db));
                }
            }
            Op::RowSum(a) => {
                let va = &self.nodes[*a].value;
                let (n, d) = (va.shape()[0], va.shape()[1]);
                let mut da = vec![0.0f32; n * d];
                for r in 0..n {
                    let gv = g.data()[r];
                    for x in &mut da[r * d..(r + 1) * d] {
                        *x = gv;
                    }
                }
                add_to(grads, *a, Array::from_vec(va.shape(), da));
            }
            Op::Sum(a) => {
                let va = &self.nodes[*a].value;
                add_to(grads, *a, Array::full(va.shape(), g.item()));
            }
            Op::Mean(a) => {
                let va = &self.nodes[*a].value;
                add_to(grads, *a, Array::full(va.shape(), g.item() / va.len() as f32));
            }
            Op::Concat(a, b, axis) => {
                let (va, vb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                let sa = va.shape();
                let outer: usize = sa[..*axis].iter().product();
                let ia: usize = sa[*axis..].iter().product();
                let ib: usize = vb.shape()[*axis..].iter().product();
                let mut da = vec![0.0f32; va.len()];
                let mut db = vec![0.0f32; vb.len()];
                for o in 0..outer {
                    let src = &g.data()[o * (ia + ib)..(o + 1) * (ia + ib)];
                    da[o * ia..(o + 1) * ia].copy_from_slice(&src[..ia]);
                    db[o * ib..(o + 1) * ib].copy_from_slice(&src[ia..]);
                }
                add_to(grads, *a, Array::from_vec(sa, da));
                add_to(grads, *b, Array::from_vec(vb.shape(), db));
            }
            Op::Reshape(a) => {
                let va = &self.nodes[*a].value;
                add_to(grads, *a, g.clone().reshaped(va.shape()));
            }
            Op::Conv2d { x, w, stride, pad } => {
                let (vx, vw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (n, c, h, wdt) = shape4(vx.shape());
                let (o, _, kh, kw) = shape4(vw.shape());
                let (oh, ow) = conv_out(h, wdt, kh, kw, *stride, *pad);
                let ckk = c * kh * kw;
                let p = oh * ow;
                let mut col = vec![0.0f32; ckk * p];
                let mut dx = self.nodes[*x].needs_grad.then(|| Array::zeros(vx.shape()));
                let mut dw = self.nodes[*w].needs_grad.then(|| Array::zeros(vw.shape()));
                for ni in 0..n {
                    let gslice = &g.data()[ni * o * p..(ni + 1) * o * p];
                    if dw.is_some() {
                        im2col(&vx.data()[ni * c * h * wdt..], c, h, wdt, kh, kw, *stride, *pad, oh, ow, &mut col);
                        gemm_nt(o, p, ckk, gslice, &col, dw.as_mut().unwrap().data_mut());
                    }
                    if let Some(dx) = dx.as_mut() {
                        col.iter_mut().for_each(|v| *v = 0.0);
                        gemm_tn(ckk, o, p, vw.data(), gslice, &mut col);
                        col2im_add(
                            &col,
                            c,
                            h,
                            wdt,
                            kh,
                            kw,
                            *stride,
                            *pad,
                            oh,
                            ow,
                            &mut dx.data_mut()[ni * c * h * wdt..(ni + 1) * c * h * wdt],
                        );
                    }
                }
                if let Some(dx) = dx {
                    add_to(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    add_to(grads, *w, dw);
                }
            }
            Op::ConvT2d { x, w, stride, pad } => {
                let (vx, vw) = (&self.nodes[*x].value, &self.nodes[*w].value);
                let (n, ci, h, wdt) = shape4(vx.shape());
                let (_, co, kh, kw) = shape4(vw.shape());
                let oh = (h - 1) * stride + kh - 2 * pad;
                let ow = (wdt - 1) * stride + kw - 2 * pad;
                let ckk = co * kh * kw;
                let p = h * wdt;
                let mut col = vec![0.0f32; ckk * p];
                let mut dx = self.nodes[*x].needs_grad.then(|| Array::zeros(vx.shape()));
                let mut dw = self.nodes[*w].needs_grad.then(|| Array::zeros(vw.shape()));
                for ni in 0..n {
                    let gslice = &g.data()[ni * co * oh * ow..(ni + 1) * co * oh * ow];
                    im2col(gslice, co, oh, ow, kh, kw, *stride, *pad, h, wdt, &mut col);
                    if let Some(dx) = dx.as_mut() {
                        // dx[n] = w (ci x ckk) * col
                        gemm_nn(ci, ckk, p, vw.data(), &col, &mut dx.data_mut()[ni * ci * p..(ni + 1) * ci * p]);
                    }
                    if let Some(dw) = dw.as_mut() {
                        // dw += x[n] (ci x p) * col^T (p x ckk)
                        gemm_nt(ci, p, ckk, &vx.data()[ni * ci * p..(ni + 1) * ci * p], &col, dw.data_mut());
                    }
                }
                if let Some(dx) = dx {
                    add_to(grads, *x, dx);
                }
                if let Some(dw) = dw {
                    add_to(grads, *w, dw);
                }
            }
            Op::GaussianSample { mu, logvar, noise } => {
                add_to(grads, *mu, g.clone());
                if self.nodes[*logvar].needs_grad {
                    let (vl, vn) = (&self.nodes[*logvar].value, &self.nodes[*noise].value);
                    let d = g
                        .data()
                        .iter()
                        .zip(vl.data().iter().zip(vn.data()))
                        .map(|(gv, (l, e))| gv * 0.5 * (0.5 * l).exp() * e)
                        .collect();
                    add_to(grads, *logvar, Array::from_vec(g.shape(), d));
                }
            }
            Op::BceLogits { logits, target } => {
                let (vx, vt) = (&self.nodes[*logits].value, &self.nodes[*target].value);
                let d = g
                    .data()
                    .iter()
                    .zip(vx.data().iter().zip(vt.data()))
                    .map(|(gv, (x, t))| gv * (sigmoid(*x) - t))
                    .collect();
                add_to(grads, *logits, Array::from_vec(g.shape(), d));
            }
        }
    }
}

fn sigmoid(x: f32) -> f32 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn shape4(s: &[usize]) -> (usize, usize, usize, usize) {
    assert_eq!(s.len(), 4, "expected 4-d shape, got {:?}", s);
    (s[0], s[1], s[2], s[3])
}

fn conv_out(h: usize, w: usize, kh: usize, kw: usize, stride: usize, pad: usize) -> (usize, usize) {
    assert!(
        h + 2 * pad >= kh && w + 2 * pad >= kw && (h + 2 * pad - kh) % stride == 0 && (w + 2 * pad - kw) % stride == 0,
        "conv2d: kernel {kh}x{kw} stride {stride} pad {pad} does not tile input {h}x{w}"
    );
    ((h + 2 * pad - kh) / stride + 1, (w + 2 * pad - kw) / stride + 1)
}

/// Unfold (c,h,w) into (c*kh*kw, oh*ow) patches.
#[allow(clippy::too_many_arguments)]
fn im2col(
    src: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    col: &mut [f32],
) {
    let p = oh * ow;
    for ci in 0..c {
        let plane = &src[ci * h * w..(ci + 1) * h * w];
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = &mut col[((ci * kh + khi) * kw + kwi) * p..((ci * kh + khi) * kw + kwi + 1) * p];
                for ohi in 0..oh {
                    let iy = (ohi * stride + khi) as isize - pad as isize;
                    let dst = &mut row[ohi * ow..(ohi + 1) * ow];
                    if iy < 0 || iy >= h as isize {
                        dst.iter_mut().for_each(|v| *v = 0.0);
                        continue;
                    }
                    let iy = iy as usize;
                    for (owi, d) in dst.iter_mut().enumerate() {
                        let ix = (owi * stride + kwi) as isize - pad as isize;
                        *d = if ix < 0 || ix >= w as isize { 0.0 } else { plane[iy * w + ix as usize] };
                    }
                }
            }
        }
    }
}

/// Fold (c*kh*kw, oh*ow) patch gradients back onto the (c,h,w) image, adding.
#[allow(clippy::too_many_arguments)]
fn col2im_add(
    col: &[f32],
    c: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
    oh: usize,
    ow: usize,
    dst: &mut [f32],
) {
    let p = oh * ow;
    for ci in 0..c {
        let plane = &mut dst[ci * h * w..(ci + 1) * h * w];
        for khi in 0..kh {
            for kwi in 0..kw {
                let row = &col[((ci * kh + khi) * kw + kwi) * p..((ci * kh + khi) * kw + kwi + 1) * p];
                for ohi in 0..oh {
                    let iy = (ohi * stride + khi) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    let iy = iy as usize;
                    for owi in 0..ow {
                        let ix = (owi * stride + kwi) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        plane[iy * w + ix as usize] += row[ohi * ow + owi];
                    }
                }
            }
        }
    }
}
