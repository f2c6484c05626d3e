use super::{Op, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::kernels;
use crate::nn::ConvSpec;
use crate::tensor::{numel, Real, Tensor};

const GELU_SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_CUBIC: f64 = 0.044_715;

/// For each element of `a`, the offset of the `b` element it pairs with.
/// `None` when the shapes are equal. `b` aligns to the trailing axes of `a`;
/// each of its dims must equal the matching dim of `a` or be 1.
fn broadcast_map(a: &[usize], b: &[usize]) -> Result<Option<Vec<usize>>> {
    if a == b {
        return Ok(None);
    }
    let incompatible = || Error::shape(format!("cannot broadcast {b:?} against {a:?}"));
    if b.len() > a.len() {
        return Err(incompatible());
    }
    let lead = a.len() - b.len();
    let mut strides = vec![0usize; a.len()];
    let mut stride = 1;
    for d in (0..b.len()).rev() {
        let (ad, bd) = (a[lead + d], b[d]);
        if bd == ad {
            strides[lead + d] = stride;
        } else if bd != 1 {
            return Err(incompatible());
        }
        stride *= bd;
    }
    let n = numel(a);
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    let mut offset = 0usize;
    for _ in 0..n {
        map.push(offset);
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            offset += strides[d];
            if idx[d] < a[d] {
                break;
            }
            offset -= strides[d] * a[d];
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

/// `(outer, len, inner)` split of a shape around `axis`.
fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn check_axis(shape: &[usize], axis: usize) -> Result<()> {
    if axis >= shape.len() {
        return Err(Error::shape(format!("axis {axis} out of range for {shape:?}")));
    }
    Ok(())
}

fn gelu_fwd(x: f64) -> f64 {
    let t = (GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x)).tanh();
    0.5 * x * (1.0 + t)
}

fn gelu_grad(x: f64) -> f64 {
    let u = GELU_SQRT_2_OVER_PI * (x + GELU_CUBIC * x * x * x);
    let t = u.tanh();
    let du = GELU_SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_CUBIC * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

#[derive(Clone, Copy)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

impl<T: Real> Tape<T> {
    fn binary(&mut self, a: Var, b: Var, kind: Binary) -> Result<Var> {
        let (av, bv) = (self.value(a), self.value(b));
        let map = broadcast_map(av.shape(), bv.shape())?;
        if matches!(kind, Binary::Div) && self.is_strict_division() {
            if let Some(pos) = bv.data().iter().position(|v| v.is_zero()) {
                return Err(Error::numeric(format!(
                    "division by zero at flat index {pos} of divisor {:?}",
                    bv.shape()
                )));
            }
        }
        let f = |x: T, y: T| match kind {
            Binary::Add => x + y,
            Binary::Sub => x - y,
            Binary::Mul => x * y,
            Binary::Div => x / y,
        };
        let (ad, bd) = (av.data(), bv.data());
        let data: Vec<T> = match &map {
            None => ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect(),
            Some(m) => ad.iter().zip(m).map(|(&x, &j)| f(x, bd[j])).collect(),
        };
        let out = Tensor::new(av.shape().to_vec(), data)?;
        let op = match kind {
            Binary::Add => Op::Add(a, b),
            Binary::Sub => Op::Sub(a, b),
            Binary::Mul => Op::Mul(a, b),
            Binary::Div => Op::Div(a, b),
        };
        self.push(out, op)
    }

    /// `a + b`, with `b` broadcast over the leading axes / singleton dims of `a`.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Mul)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(a, b, Binary::Div)
    }

    pub fn scale(&mut self, a: Var, factor: T) -> Result<Var> {
        let out = self.value(a).map(|v| v * factor);
        self.push(out, Op::Scale(a, factor))
    }

    pub fn add_scalar(&mut self, a: Var, c: T) -> Result<Var> {
        let out = self.value(a).map(|v| v + c);
        self.push(out, Op::AddScalar(a))
    }

    /// Matrix product over the last two axes. Leading (batch) axes of `b`
    /// must equal those of `a`, or `b` may be a plain matrix shared by every batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        let mismatch = || Error::shape(format!("matmul of {sa:?} and {sb:?}"));
        if sa.len() < 2 || sb.len() < 2 {
            return Err(mismatch());
        }
        let (m, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (n2, p) = (sb[sb.len() - 2], sb[sb.len() - 1]);
        let (abatch, bbatch) = (&sa[..sa.len() - 2], &sb[..sb.len() - 2]);
        if n != n2 || !(bbatch.is_empty() || bbatch == abatch) {
            return Err(mismatch());
        }
        let batches = numel(abatch);
        let b_step = if bbatch.is_empty() { 0 } else { n * p };
        let mut data = vec![T::zero(); batches * m * p];
        {
            let (ad, bd) = (self.value(a).data(), self.value(b).data());
            for i in 0..batches {
                T::gemm(
                    m,
                    n,
                    p,
                    T::one(),
                    &ad[i * m * n..],
                    n,
                    1,
                    &bd[i * b_step..],
                    p,
                    1,
                    T::zero(),
                    &mut data[i * m * p..],
                    p,
                    1,
                );
            }
        }
        let mut shape = abatch.to_vec();
        shape.extend([m, p]);
        self.push(Tensor::new(shape, data)?, Op::Matmul { a, b })
    }

    /// [`Tape::matmul`] whose multiply-adds are added to the attention counter.
    pub fn attention_matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let out = self.matmul(a, b)?;
        let sa = self.shape(a);
        let inner = sa[sa.len() - 1] as u64;
        let macs = self.value(out).len() as u64 * inner;
        self.count_attention(macs);
        Ok(out)
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let s = self.shape(a).to_vec();
        if s.len() < 2 {
            return Err(Error::shape(format!("transpose needs rank ≥ 2, got {s:?}")));
        }
        let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        for (blk_in, blk_out) in src.chunks_exact(r * c).zip(data.chunks_exact_mut(r * c)) {
            for i in 0..r {
                for j in 0..c {
                    blk_out[j * r + i] = blk_in[i * c + j];
                }
            }
        }
        let mut shape = s.clone();
        let k = shape.len();
        shape.swap(k - 2, k - 1);
        self.push(Tensor::new(shape, data)?, Op::Transpose(a))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(a).clone().reshape(shape.to_vec())?;
        self.push(out, Op::Reshape(a))
    }

    /// `len` consecutive entries of `a` along `axis`, starting at `start`.
    pub fn narrow(&mut self, a: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis(&s, axis)?;
        if len == 0 || start + len > s[axis] {
            return Err(Error::shape(format!(
                "narrow [{start}, {}) out of range for axis {axis} of {s:?}",
                start + len
            )));
        }
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&src[(o * n + start) * inner..][..len * inner]);
        }
        let mut shape = s;
        shape[axis] = len;
        self.push(Tensor::new(shape, data)?, Op::Narrow { a, axis, start })
    }

    /// Splits `a` along `axis` into consecutive parts of the given sizes.
    pub fn split(&mut self, a: Var, axis: usize, sizes: &[usize]) -> Result<Vec<Var>> {
        let s = self.shape(a).to_vec();
        check_axis(&s, axis)?;
        if sizes.iter().sum::<usize>() != s[axis] {
            return Err(Error::shape(format!("split sizes {sizes:?} do not cover axis {axis} of {s:?}")));
        }
        let mut start = 0;
        let mut parts = Vec::with_capacity(sizes.len());
        for &len in sizes {
            parts.push(self.narrow(a, axis, start, len)?);
            start += len;
        }
        Ok(parts)
    }

    pub fn concat(&mut self, parts: &[Var], axis: usize) -> Result<Var> {
        let first = self
            .shape(*parts.first().ok_or_else(|| Error::shape("concat of no tensors"))?)
            .to_vec();
        check_axis(&first, axis)?;
        let mut total = 0;
        for &p in parts {
            let s = self.shape(p);
            let off_axis_equal = s.len() == first.len()
                && s.iter().zip(&first).enumerate().all(|(d, (x, y))| d == axis || x == y);
            if !off_axis_equal {
                return Err(Error::shape(format!(
                    "concat along axis {axis}: {s:?} does not match {first:?}"
                )));
            }
            total += s[axis];
        }
        let (outer, _, inner) = axis_split(&first, axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for &p in parts {
                let len = self.shape(p)[axis];
                data.extend_from_slice(&self.value(p).data()[o * len * inner..][..len * inner]);
            }
        }
        let mut shape = first;
        shape[axis] = total;
        self.push(Tensor::new(shape, data)?, Op::Concat { parts: parts.to_vec(), axis })
    }

    /// Mean along `axis`, keeping it as a singleton dimension.
    pub fn mean_over_axis(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis(&s, axis)?;
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let inv = T::one() / T::from_usize(n).unwrap();
        let mut data = vec![T::zero(); outer * inner];
        for o in 0..outer {
            for j in 0..n {
                let row = &src[(o * n + j) * inner..][..inner];
                for (d, &v) in data[o * inner..][..inner].iter_mut().zip(row) {
                    *d = *d + v;
                }
            }
        }
        data.iter_mut().for_each(|v| *v = *v * inv);
        let mut shape = s;
        shape[axis] = 1;
        self.push(Tensor::new(shape, data)?, Op::MeanAxis { a, axis })
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let m = self.value(a).mean();
        self.push(Tensor::scalar(m), Op::Mean(a))
    }

    /// Elementwise absolute value; the subgradient at 0 is 0.
    pub fn abs(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| v.abs());
        self.push(out, Op::Abs(a))
    }

    /// Softmax along `axis`; the per-slice maximum is subtracted before exponentiating.
    pub fn softmax(&mut self, a: Var, axis: usize) -> Result<Var> {
        let s = self.shape(a).to_vec();
        check_axis(&s, axis)?;
        let (outer, n, inner) = axis_split(&s, axis);
        let src = self.value(a).data();
        let mut data = vec![T::zero(); src.len()];
        for o in 0..outer {
            for i in 0..inner {
                let at = |j: usize| (o * n + j) * inner + i;
                let mx = (0..n).map(|j| src[at(j)]).fold(T::neg_infinity(), T::max);
                let mut total = T::zero();
                for j in 0..n {
                    let e = (src[at(j)] - mx).exp();
                    data[at(j)] = e;
                    total = total + e;
                }
                for j in 0..n {
                    data[at(j)] = data[at(j)] / total;
                }
            }
        }
        self.push(Tensor::new(s, data)?, Op::Softmax { a, axis })
    }

    /// GELU, tanh approximation.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let out = self.value(a).map(|v| T::from_f64_lossy(gelu_fwd(v.to_f64_lossy())));
        self.push(out, Op::Gelu(a))
    }

    /// `sign(a)·max(|a|, min)`; gradient passes only where `|a| ≥ min`.
    pub fn floor_abs(&mut self, a: Var, min: T) -> Result<Var> {
        let out = self.value(a).map(|v| {
            if v.abs() >= min {
                v
            } else if v < T::zero() {
                -min
            } else {
                min
            }
        });
        self.push(out, Op::FloorAbs { a, min })
    }

    /// Normalizes over the last axis, then applies `gamma`/`beta` (both shaped `[C]`).
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: T) -> Result<Var> {
        let s = self.shape(x).to_vec();
        let c = *s.last().ok_or_else(|| Error::shape("layer_norm on rank-0 tensor"))?;
        for p in [gamma, beta] {
            if self.shape(p) != [c] {
                return Err(Error::shape(format!(
                    "layer_norm affine term {:?} does not match {c} channels",
                    self.shape(p)
                )));
            }
        }
        let src = self.value(x).data();
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let rows = src.len() / c;
        let inv_c = T::one() / T::from_usize(c).unwrap();
        let mut xhat = vec![T::zero(); src.len()];
        let mut rstd = vec![T::zero(); rows];
        let mut out = vec![T::zero(); src.len()];
        for r in 0..rows {
            let row = &src[r * c..][..c];
            let mean = row.iter().copied().sum::<T>() * inv_c;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_c;
            let rs = T::one() / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[r * c + j] = h;
                out[r * c + j] = h * g[j] + b[j];
            }
        }
        self.push(Tensor::new(s, out)?, Op::LayerNorm { x, gamma, beta, xhat, rstd })
    }

    /// Cross-correlation of an `H×W×Cin` input with zero padding.
    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, spec: ConvSpec) -> Result<Var> {
        spec.validate()?;
        let (h, wd, c) = self.value(x).hwc()?;
        if c != spec.in_channels {
            return Err(Error::config(format!(
                "conv expects {} input channels, got {c}",
                spec.in_channels
            )));
        }
        if self.shape(w) != spec.weight_shape() {
            return Err(Error::config(format!(
                "conv weight {:?} does not match {:?}",
                self.shape(w),
                spec.weight_shape()
            )));
        }
        if let Some(b) = b {
            if self.shape(b) != [spec.out_channels] {
                return Err(Error::config(format!("conv bias {:?}", self.shape(b))));
            }
        }
        let (oh, ow) = spec.output_size(h, wd)?;
        let data = kernels::conv2d_forward(
            self.value(x).data(),
            h,
            wd,
            &spec,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
            oh,
            ow,
        );
        let out = Tensor::new(vec![oh, ow, spec.out_channels], data)?;
        self.push(out, Op::Conv2d { x, w, b, spec })
    }

    /// 2×2, stride-2 transposed convolution with weight `[Cin, 2, 2, Cout]`.
    pub fn conv_transpose2d(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let (h, wd, cin) = self.value(x).hwc()?;
        let ws = self.shape(w).to_vec();
        if ws.len() != 4 || ws[0] != cin || ws[1] != 2 || ws[2] != 2 {
            return Err(Error::shape(format!(
                "transposed conv weight {ws:?} incompatible with {cin} input channels"
            )));
        }
        let cout = ws[3];
        if let Some(b) = b {
            if self.shape(b) != [cout] {
                return Err(Error::shape(format!("transposed conv bias {:?}", self.shape(b))));
            }
        }
        let data = kernels::conv_transpose2x2_forward(
            self.value(x).data(),
            h,
            wd,
            cin,
            cout,
            self.value(w).data(),
            b.map(|b| self.value(b).data()),
        );
        let out = Tensor::new(vec![2 * h, 2 * wd, cout], data)?;
        self.push(out, Op::ConvTranspose2d { x, w, b })
    }

    pub(super) fn backward_node(&self, i: usize, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::Div(a, b) => {
                self.backward_binary(&node.op, *a, *b, g, grads)
            }
            Op::Scale(a, f) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v * *f);
                }
            }
            Op::AddScalar(a) | Op::Reshape(a) => {
                if let Some(ga) = self.grad_slot(grads, *a) {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
            }
            Op::Matmul { a, b } => self.backward_matmul(*a, *b, g, grads),
            Op::Transpose(a) => {
                let s = self.shape(*a);
                let (r, c) = (s[s.len() - 2], s[s.len() - 1]);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for (blk_g, blk_a) in g.chunks_exact(r * c).zip(ga.chunks_exact_mut(r * c)) {
                        for i in 0..r {
                            for j in 0..c {
                                blk_a[i * c + j] = blk_a[i * c + j] + blk_g[j * r + i];
                            }
                        }
                    }
                }
            }
            Op::Narrow { a, axis, start } => {
                let s = self.shape(*a).to_vec();
                let len = node.value.shape()[*axis];
                let (outer, n, inner) = axis_split(&s, *axis);
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for o in 0..outer {
                        let dst = &mut ga[(o * n + start) * inner..][..len * inner];
                        let src = &g[o * len * inner..][..len * inner];
                        dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                    }
                }
            }
            Op::Concat { parts, axis } => {
                let (outer, total, inner) = axis_split(node.value.shape(), *axis);
                let mut offset = 0;
                for &p in parts {
                    let len = self.shape(p)[*axis];
                    if let Some(gp) = self.grad_slot(grads, p) {
                        for o in 0..outer {
                            let src = &g[(o * total + offset) * inner..][..len * inner];
                            let dst = &mut gp[o * len * inner..][..len * inner];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v);
                        }
                    }
                    offset += len;
                }
            }
            Op::MeanAxis { a, axis } => {
                let (outer, n, inner) = axis_split(self.shape(*a), *axis);
                let inv = T::one() / T::from_usize(n).unwrap();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for o in 0..outer {
                        for j in 0..n {
                            let dst = &mut ga[(o * n + j) * inner..][..inner];
                            let src = &g[o * inner..][..inner];
                            dst.iter_mut().zip(src).for_each(|(d, &v)| *d = *d + v * inv);
                        }
                    }
                }
            }
            Op::Sum(a) | Op::Mean(a) => {
                let scale = if matches!(node.op, Op::Mean(_)) {
                    T::one() / T::from_usize(self.value(*a).len()).unwrap()
                } else {
                    T::one()
                };
                if let Some(ga) = self.grad_slot(grads, *a) {
                    let v = g[0] * scale;
                    ga.iter_mut().for_each(|d| *d = *d + v);
                }
            }
            Op::Abs(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv > T::zero() {
                            *d = *d + gv;
                        } else if xv < T::zero() {
                            *d = *d - gv;
                        }
                    }
                }
            }
            Op::Softmax { a, axis } => {
                let (outer, n, inner) = axis_split(node.value.shape(), *axis);
                let y = node.value.data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for o in 0..outer {
                        for i in 0..inner {
                            let at = |j: usize| (o * n + j) * inner + i;
                            let dot: T = (0..n).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..n {
                                ga[at(j)] = ga[at(j)] + y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                }
            }
            Op::Gelu(a) => {
                let x = self.value(*a).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        *d = *d + gv * T::from_f64_lossy(gelu_grad(xv.to_f64_lossy()));
                    }
                }
            }
            Op::FloorAbs { a, min } => {
                let x = self.value(*a).data();
                if let Some(ga) = self.grad_slot(grads, *a) {
                    for ((d, &gv), &xv) in ga.iter_mut().zip(g).zip(x) {
                        if xv.abs() >= *min {
                            *d = *d + gv;
                        }
                    }
                }
            }
            Op::LayerNorm { x, gamma, beta, xhat, rstd } => {
                let c = self.value(*gamma).len();
                let gam = self.value(*gamma).data();
                if let Some(gg) = self.grad_slot(grads, *gamma) {
                    for (gr, hr) in g.chunks_exact(c).zip(xhat.chunks_exact(c)) {
                        for j in 0..c {
                            gg[j] = gg[j] + gr[j] * hr[j];
                        }
                    }
                }
                if let Some(gb) = self.grad_slot(grads, *beta) {
                    for gr in g.chunks_exact(c) {
                        gb.iter_mut().zip(gr).for_each(|(d, &v)| *d = *d + v);
                    }
                }
                if let Some(gx) = self.grad_slot(grads, *x) {
                    let inv_c = T::one() / T::from_usize(c).unwrap();
                    let mut dxhat = vec![T::zero(); c];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let gr = &g[r * c..][..c];
                        let hr = &xhat[r * c..][..c];
                        let mut sum_d = T::zero();
                        let mut sum_dh = T::zero();
                        for j in 0..c {
                            dxhat[j] = gr[j] * gam[j];
                            sum_d = sum_d + dxhat[j];
                            sum_dh = sum_dh + dxhat[j] * hr[j];
                        }
                        let (md, mdh) = (sum_d * inv_c, sum_dh * inv_c);
                        let dst = &mut gx[r * c..][..c];
                        for j in 0..c {
                            dst[j] = dst[j] + rs * (dxhat[j] - md - hr[j] * mdh);
                        }
                    }
                }
            }
            Op::Conv2d { x, w, b, spec } => {
                let (h, wd, _) = self.value(*x).hwc().expect("conv input rank");
                let (oh, ow, _) = node.value.hwc().expect("conv output rank");
                let mut gx = self.grad_slot(grads, *x).map(std::mem::take);
                let mut gw = self.grad_slot(grads, *w).map(std::mem::take);
                let mut gb = b.and_then(|b| self.grad_slot(grads, b)).map(std::mem::take);
                kernels::conv2d_backward(
                    self.value(*x).data(),
                    h,
                    wd,
                    spec,
                    self.value(*w).data(),
                    g,
                    oh,
                    ow,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                restore(grads, *x, gx);
                restore(grads, *w, gw);
                if let Some(b) = b {
                    restore(grads, *b, gb);
                }
            }
            Op::ConvTranspose2d { x, w, b } => {
                let (h, wd, cin) = self.value(*x).hwc().expect("deconv input rank");
                let cout = node.value.shape()[2];
                let mut gx = self.grad_slot(grads, *x).map(std::mem::take);
                let mut gw = self.grad_slot(grads, *w).map(std::mem::take);
                let mut gb = b.and_then(|b| self.grad_slot(grads, b)).map(std::mem::take);
                kernels::conv_transpose2x2_backward(
                    self.value(*x).data(),
                    h,
                    wd,
                    cin,
                    cout,
                    self.value(*w).data(),
                    g,
                    gx.as_deref_mut(),
                    gw.as_deref_mut(),
                    gb.as_deref_mut(),
                );
                restore(grads, *x, gx);
                restore(grads, *w, gw);
                if let Some(b) = b {
                    restore(grads, *b, gb);
                }
            }
        }
    }

    fn backward_binary(&self, op: &Op<T>, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (av, bv) = (self.value(a), self.value(b));
        let map = broadcast_map(av.shape(), bv.shape()).expect("validated in forward");
        let (ad, bd) = (av.data(), bv.data());
        let bi = |i: usize| map.as_ref().map_or(i, |m| m[i]);
        if let Some(ga) = self.grad_slot(grads, a) {
            match op {
                Op::Add(..) | Op::Sub(..) => {
                    ga.iter_mut().zip(g).for_each(|(d, &v)| *d = *d + v);
                }
                Op::Mul(..) => {
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d = *d + g[i] * bd[bi(i)];
                    }
                }
                Op::Div(..) => {
                    for (i, d) in ga.iter_mut().enumerate() {
                        *d = *d + g[i] / bd[bi(i)];
                    }
                }
                _ => unreachable!(),
            }
        }
        if let Some(gb) = self.grad_slot(grads, b) {
            for i in 0..g.len() {
                let j = bi(i);
                let contrib = match op {
                    Op::Add(..) => g[i],
                    Op::Sub(..) => -g[i],
                    Op::Mul(..) => g[i] * ad[i],
                    Op::Div(..) => -g[i] * ad[i] / (bd[j] * bd[j]),
                    _ => unreachable!(),
                };
                gb[j] = gb[j] + contrib;
            }
        }
    }

    fn backward_matmul(&self, a: Var, b: Var, g: &[T], grads: &mut [Option<Vec<T>>]) {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, n) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let p = sb[sb.len() - 1];
        let batches = numel(&sa[..sa.len() - 2]);
        let b_step = if sb.len() == 2 { 0 } else { n * p };
        let (ad, bd) = (self.value(a).data(), self.value(b).data());
        if let Some(ga) = self.grad_slot(grads, a) {
            // dA = dC · Bᵀ
            for i in 0..batches {
                T::gemm(
                    m,
                    p,
                    n,
                    T::one(),
                    &g[i * m * p..],
                    p,
                    1,
                    &bd[i * b_step..],
                    1,
                    p,
                    T::one(),
                    &mut ga[i * m * n..],
                    n,
                    1,
                );
            }
        }
        if let Some(gb) = self.grad_slot(grads, b) {
            // dB = Aᵀ · dC, summed over batches when B is shared
            for i in 0..batches {
                T::gemm(
                    n,
                    m,
                    p,
                    T::one(),
                    &ad[i * m * n..],
                    1,
                    n,
                    &g[i * m * p..],
                    p,
                    1,
                    T::one(),
                    &mut gb[i * b_step..],
                    p,
                    1,
                );
            }
        }
    }
}

fn restore<T>(grads: &mut [Option<Vec<T>>], v: Var, g: Option<Vec<T>>) {
    if let Some(g) = g {
        grads[v.0] = Some(g);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn broadcast_trailing_singleton() {
        let m = broadcast_map(&[2, 2, 3], &[2, 2, 1]).unwrap().unwrap();
        assert_eq!(m, vec![0, 0, 0, 1, 1, 1, 2, 2, 2, 3, 3, 3]);
        let m = broadcast_map(&[2, 3], &[3]).unwrap().unwrap();
        assert_eq!(m, vec![0, 1, 2, 0, 1, 2]);
        let m = broadcast_map(&[2, 3], &[1]).unwrap().unwrap();
        assert_eq!(m, vec![0; 6]);
        assert!(broadcast_map(&[2, 3], &[2]).is_err());
        assert!(broadcast_map(&[3], &[2, 3]).is_err());
    }

    #[test]
    fn gelu_reference_values() {
        assert_eq!(gelu_fwd(0.0), 0.0);
        assert!((gelu_fwd(1.0) - 0.841_19).abs() < 1e-4);
        assert!((gelu_fwd(10.0) - 10.0).abs() < 1e-6);
    }
}
