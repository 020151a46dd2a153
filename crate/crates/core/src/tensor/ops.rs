use super::{numel, GradStore, Op, Tensor};
use crate::error::{Error, Result};

/// `c = alpha * a·b + beta * c` on strided row/column layouts.
///
/// `a` is `m×k` with strides `(rsa, csa)`, `b` is `k×n`, `c` is `m×n`
/// row-major.
#[allow(clippy::too_many_arguments)]
pub fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    (rsa, csa): (usize, usize),
    b: &[f64],
    (rsb, csb): (usize, usize),
    beta: f64,
    c: &mut [f64],
) {
    assert!(m == 0 || k == 0 || (m - 1) * rsa + (k - 1) * csa < a.len());
    assert!(k == 0 || n == 0 || (k - 1) * rsb + (n - 1) * csb < b.len());
    assert!(c.len() >= m * n);
    // SAFETY: the asserts above bound every index dgemm touches.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa as isize,
            csa as isize,
            b.as_ptr(),
            rsb as isize,
            csb as isize,
            beta,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

/// Output shape for a binary op: equal shapes, or one shape a suffix of the
/// other (leading-dimension broadcast).
fn broadcast_shape(op: &'static str, a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let (big, small) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    if big[big.len() - small.len()..] == *small {
        Ok(big.to_vec())
    } else {
        Err(Error::shape(op, a, b))
    }
}

fn check_axis(axis: usize, rank: usize) -> Result<()> {
    if axis >= rank {
        Err(Error::Axis { axis, rank })
    } else {
        Ok(())
    }
}

/// `(outer, extent, inner)` split of a shape around `axis`.
fn split_at_axis(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    (numel(&shape[..axis]), shape[axis], numel(&shape[axis + 1..]))
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

impl Tensor {
    fn binary(
        &self,
        other: &Tensor,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
        op: impl FnOnce(Tensor, Tensor) -> Op,
    ) -> Result<Tensor> {
        let shape = broadcast_shape(name, self.shape(), other.shape())?;
        let (a, b) = (self.data(), other.data());
        let (na, nb) = (a.len(), b.len());
        let data = if na == nb {
            a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
        } else if na > nb {
            a.chunks_exact(nb)
                .flat_map(|ch| ch.iter().zip(b).map(|(&x, &y)| f(x, y)))
                .collect()
        } else {
            b.chunks_exact(na)
                .flat_map(|ch| a.iter().zip(ch).map(|(&x, &y)| f(x, y)))
                .collect()
        };
        Ok(Tensor::from_op(data, shape, op(self.clone(), other.clone())))
    }

    fn unary(&self, f: impl Fn(f64) -> f64, op: impl FnOnce(Tensor) -> Op) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), op(self.clone()))
    }

    pub fn add(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "add", |x, y| x + y, Op::Add)
    }

    pub fn sub(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "sub", |x, y| x - y, Op::Sub)
    }

    pub fn mul(&self, other: &Tensor) -> Result<Tensor> {
        self.binary(other, "mul", |x, y| x * y, Op::Mul)
    }

    pub fn scale(&self, c: f64) -> Tensor {
        self.unary(|x| c * x, |t| Op::Scale(t, c))
    }

    pub fn sigmoid(&self) -> Tensor {
        self.unary(sigmoid, Op::Sigmoid)
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(f64::tanh, Op::Tanh)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(|x| if x > 0.0 { x } else { 0.0 }, Op::Relu)
    }

    pub fn log10(&self) -> Tensor {
        self.unary(f64::log10, Op::Log10)
    }

    /// Matrix product of `[m×k]` and `[k×n]`.
    pub fn matmul(&self, other: &Tensor) -> Result<Tensor> {
        let (a, b) = (self.shape(), other.shape());
        if a.len() != 2 || b.len() != 2 || a[1] != b[0] {
            return Err(Error::shape("matmul", a, b));
        }
        let (m, k, n) = (a[0], a[1], b[1]);
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), (k, 1), other.data(), (n, 1), 0.0, &mut out);
        Ok(Tensor::from_op(
            out,
            vec![m, n],
            Op::MatMul(self.clone(), other.clone()),
        ))
    }

    /// Valid (unpadded) strided correlation: `[C_in×L] * [C_out×C_in×W] -> [C_out×L']`
    /// with `L' = (L−W)/stride + 1`.
    pub fn conv1d(&self, kernels: &Tensor, stride: usize) -> Result<Tensor> {
        let (x, k) = (self.shape(), kernels.shape());
        if x.len() != 2 || k.len() != 3 || k[1] != x[0] || stride == 0 {
            return Err(Error::shape("conv1d", x, k));
        }
        let (c_in, len) = (x[0], x[1]);
        let (c_out, width) = (k[0], k[2]);
        if len < width {
            return Err(Error::InputTooShort { len, min: width });
        }
        let frames = (len - width) / stride + 1;
        let (xd, kd) = (self.data(), kernels.data());
        let mut out = vec![0.0; c_out * frames];
        for o in 0..c_out {
            for c in 0..c_in {
                let krow = &kd[(o * c_in + c) * width..][..width];
                let xrow = &xd[c * len..][..len];
                for (t, y) in out[o * frames..][..frames].iter_mut().enumerate() {
                    let win = &xrow[t * stride..][..width];
                    *y += krow.iter().zip(win).map(|(a, b)| a * b).sum::<f64>();
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![c_out, frames],
            Op::Conv1d {
                input: self.clone(),
                kernels: kernels.clone(),
                stride,
            },
        ))
    }

    /// Transposed convolution `[C_in×L] * [C_in×C_out×W] -> [C_out×((L−1)·stride+W)]`;
    /// overlapping kernel contributions add.
    pub fn conv1d_transpose(&self, kernels: &Tensor, stride: usize) -> Result<Tensor> {
        let (x, k) = (self.shape(), kernels.shape());
        if x.len() != 2 || k.len() != 3 || k[0] != x[0] || stride == 0 {
            return Err(Error::shape("conv1d_transpose", x, k));
        }
        let (c_in, len) = (x[0], x[1]);
        let (c_out, width) = (k[1], k[2]);
        let out_len = (len - 1) * stride + width;
        let (xd, kd) = (self.data(), kernels.data());
        let mut out = vec![0.0; c_out * out_len];
        for c in 0..c_in {
            for o in 0..c_out {
                let krow = &kd[(c * c_out + o) * width..][..width];
                let orow = &mut out[o * out_len..][..out_len];
                for t in 0..len {
                    let v = xd[c * len + t];
                    for (y, kv) in orow[t * stride..][..width].iter_mut().zip(krow) {
                        *y += v * kv;
                    }
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![c_out, out_len],
            Op::ConvTranspose1d {
                input: self.clone(),
                kernels: kernels.clone(),
                stride,
            },
        ))
    }

    fn reduce(&self, axis: Option<usize>, mean: bool) -> Result<Tensor> {
        let (data, shape) = match axis {
            None => {
                let s: f64 = self.data().iter().sum();
                let n = self.numel() as f64;
                (vec![if mean { s / n } else { s }], Vec::new())
            }
            Some(ax) => {
                check_axis(ax, self.rank())?;
                let (outer, n, inner) = split_at_axis(self.shape(), ax);
                let d = self.data();
                let mut out = vec![0.0; outer * inner];
                for o in 0..outer {
                    for j in 0..n {
                        let src = &d[(o * n + j) * inner..][..inner];
                        for (y, x) in out[o * inner..][..inner].iter_mut().zip(src) {
                            *y += x;
                        }
                    }
                }
                if mean {
                    out.iter_mut().for_each(|v| *v /= n as f64);
                }
                let mut shape = self.shape().to_vec();
                shape.remove(ax);
                (out, shape)
            }
        };
        let input = self.clone();
        let op = if mean {
            Op::Mean { input, axis }
        } else {
            Op::Sum { input, axis }
        };
        Ok(Tensor::from_op(data, shape, op))
    }

    /// Sum along `axis` (removed from the shape).
    pub fn sum(&self, axis: usize) -> Result<Tensor> {
        self.reduce(Some(axis), false)
    }

    pub fn mean(&self, axis: usize) -> Result<Tensor> {
        self.reduce(Some(axis), true)
    }

    /// Sum of every element, as a 0-d tensor.
    pub fn sum_all(&self) -> Tensor {
        self.reduce(None, false).expect("full reduction cannot fail")
    }

    pub fn mean_all(&self) -> Tensor {
        self.reduce(None, true).expect("full reduction cannot fail")
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.contains(&0) || numel(shape) != self.numel() {
            return Err(Error::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            Op::Reshape(self.clone()),
        ))
    }

    /// Reorders axes: output axis `i` is input axis `perm[i]`.
    pub fn permute(&self, perm: &[usize]) -> Result<Tensor> {
        let rank = self.rank();
        let mut seen = vec![false; rank];
        if perm.len() != rank || perm.iter().any(|&p| p >= rank || std::mem::replace(&mut seen[p], true)) {
            return Err(Error::shape("permute", self.shape(), perm));
        }
        let out_shape: Vec<usize> = perm.iter().map(|&p| self.shape()[p]).collect();
        let data = permute_data(self.data(), self.shape(), perm);
        Ok(Tensor::from_op(
            data,
            out_shape,
            Op::Permute(self.clone(), perm.to_vec()),
        ))
    }

    /// Swap the two axes of a matrix.
    pub fn transpose(&self) -> Result<Tensor> {
        if self.rank() != 2 {
            return Err(Error::shape("transpose", self.shape(), &[2]));
        }
        self.permute(&[1, 0])
    }

    /// Joins tensors along `axis`; every other extent must agree.
    pub fn concat(parts: &[Tensor], axis: usize) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat of zero tensors".into()))?;
        check_axis(axis, first.rank())?;
        let mut total = 0;
        for p in parts {
            let compatible = p.rank() == first.rank()
                && p.shape()
                    .iter()
                    .zip(first.shape())
                    .enumerate()
                    .all(|(i, (a, b))| i == axis || a == b);
            if !compatible {
                return Err(Error::shape("concat", first.shape(), p.shape()));
            }
            total += p.shape()[axis];
        }
        let (outer, _, inner) = split_at_axis(first.shape(), axis);
        let mut data = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for p in parts {
                let chunk = p.shape()[axis] * inner;
                data.extend_from_slice(&p.data()[o * chunk..][..chunk]);
            }
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = total;
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Concat {
                inputs: parts.to_vec(),
                axis,
            },
        ))
    }

    /// `len` entries along `axis` starting at `start`.
    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Tensor> {
        check_axis(axis, self.rank())?;
        let (outer, n, inner) = split_at_axis(self.shape(), axis);
        if len == 0 || start + len > n {
            return Err(Error::shape("slice", self.shape(), &[axis, start, len]));
        }
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            data.extend_from_slice(&self.data()[(o * n + start) * inner..][..len * inner]);
        }
        let mut shape = self.shape().to_vec();
        shape[axis] = len;
        Ok(Tensor::from_op(
            data,
            shape,
            Op::Slice {
                input: self.clone(),
                axis,
                start,
            },
        ))
    }

    /// Fused LSTM state update. `self: [B × 4H]` holds input, forget, cell
    /// and output pre-activations in that order; `c_prev: [B × H]` (zero when
    /// `None`). Returns `[B × 2H]` holding the new hidden and cell states.
    pub fn lstm_cell(&self, c_prev: Option<&Tensor>) -> Result<Tensor> {
        let shape = self.shape();
        if shape.len() != 2 || !shape[1].is_multiple_of(4) {
            return Err(Error::shape("lstm_cell", shape, &[0, 4]));
        }
        let (rows, hd) = (shape[0], shape[1] / 4);
        if let Some(c) = c_prev {
            if c.shape() != [rows, hd] {
                return Err(Error::shape("lstm_cell", shape, c.shape()));
            }
        }
        let z = self.data();
        let cp = c_prev.map(Tensor::data);
        let mut gates = vec![0.0; z.len()];
        let mut tanh_c = vec![0.0; rows * hd];
        let mut out = vec![0.0; rows * 2 * hd];
        for r in 0..rows {
            let zr = &z[r * 4 * hd..][..4 * hd];
            let gt = &mut gates[r * 4 * hd..][..4 * hd];
            for j in 0..4 * hd {
                gt[j] = if (2 * hd..3 * hd).contains(&j) {
                    zr[j].tanh()
                } else {
                    sigmoid(zr[j])
                };
            }
            for j in 0..hd {
                let c_old = cp.map_or(0.0, |c| c[r * hd + j]);
                let c = gt[hd + j] * c_old + gt[j] * gt[2 * hd + j];
                let tc = c.tanh();
                tanh_c[r * hd + j] = tc;
                out[r * 2 * hd + j] = gt[3 * hd + j] * tc;
                out[r * 2 * hd + hd + j] = c;
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![rows, 2 * hd],
            Op::LstmCell {
                z: self.clone(),
                c_prev: c_prev.cloned(),
                gates,
                tanh_c,
            },
        ))
    }

    /// Normalises each vector along the last axis to zero mean and unit
    /// (biased) variance, then applies `gain` and `bias`.
    pub fn layer_norm(&self, gain: &Tensor, bias: &Tensor, eps: f64) -> Result<Tensor> {
        let d = *self
            .shape()
            .last()
            .ok_or_else(|| Error::shape("layer_norm", self.shape(), gain.shape()))?;
        if gain.shape() != [d] || bias.shape() != [d] {
            return Err(Error::shape("layer_norm", self.shape(), gain.shape()));
        }
        let rows = self.numel() / d;
        let (x, g, b) = (self.data(), gain.data(), bias.data());
        let mut normalized = vec![0.0; x.len()];
        let mut inv_std = vec![0.0; rows];
        let mut out = vec![0.0; x.len()];
        for r in 0..rows {
            let row = &x[r * d..][..d];
            let mu = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mu) * (v - mu)).sum::<f64>() / d as f64;
            let inv = 1.0 / (var + eps).sqrt();
            inv_std[r] = inv;
            for j in 0..d {
                let xh = (row[j] - mu) * inv;
                normalized[r * d + j] = xh;
                out[r * d + j] = xh * g[j] + b[j];
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            Op::LayerNorm {
                input: self.clone(),
                gain: gain.clone(),
                bias: bias.clone(),
                normalized,
                inv_std,
            },
        ))
    }
}

fn strides(shape: &[usize]) -> Vec<usize> {
    let mut s = vec![1; shape.len()];
    for i in (0..shape.len().saturating_sub(1)).rev() {
        s[i] = s[i + 1] * shape[i + 1];
    }
    s
}

fn permute_data(data: &[f64], shape: &[usize], perm: &[usize]) -> Vec<f64> {
    let in_strides = strides(shape);
    let out_shape: Vec<usize> = perm.iter().map(|&p| shape[p]).collect();
    let src_strides: Vec<usize> = perm.iter().map(|&p| in_strides[p]).collect();
    let rank = shape.len();
    let mut out = Vec::with_capacity(data.len());
    if rank == 0 {
        return data.to_vec();
    }
    let inner = out_shape[rank - 1];
    let inner_stride = src_strides[rank - 1];
    let mut idx = vec![0usize; rank];
    let mut offset = 0usize;
    loop {
        for j in 0..inner {
            out.push(data[offset + j * inner_stride]);
        }
        // advance the multi-index over all but the last axis
        let mut ax = rank - 1;
        loop {
            if ax == 0 {
                return out;
            }
            ax -= 1;
            idx[ax] += 1;
            offset += src_strides[ax];
            if idx[ax] < out_shape[ax] {
                break;
            }
            offset -= src_strides[ax] * idx[ax];
            idx[ax] = 0;
        }
    }
}

fn inverse_perm(perm: &[usize]) -> Vec<usize> {
    let mut inv = vec![0; perm.len()];
    for (i, &p) in perm.iter().enumerate() {
        inv[p] = i;
    }
    inv
}

/// Adds the broadcast-reduced `contrib(i)` into `t`'s gradient slot.
fn acc_broadcast(store: &mut GradStore, t: &Tensor, n: usize, contrib: impl Fn(usize) -> f64) {
    if let Some(slot) = store.slot(t) {
        let m = slot.len();
        for base in (0..n).step_by(m) {
            for (j, v) in slot.iter_mut().enumerate() {
                *v += contrib(base + j);
            }
        }
    }
}

fn acc_elementwise(store: &mut GradStore, t: &Tensor, contrib: impl Fn(usize) -> f64) {
    if let Some(slot) = store.slot(t) {
        for (i, v) in slot.iter_mut().enumerate() {
            *v += contrib(i);
        }
    }
}

/// Propagates `g` (gradient w.r.t. `out`) into the inputs of `op`.
pub(crate) fn backward(op: &Op, out: &Tensor, g: &[f64], store: &mut GradStore) {
    let n = g.len();
    match op {
        Op::Add(a, b) => {
            acc_broadcast(store, a, n, |i| g[i]);
            acc_broadcast(store, b, n, |i| g[i]);
        }
        Op::Sub(a, b) => {
            acc_broadcast(store, a, n, |i| g[i]);
            acc_broadcast(store, b, n, |i| -g[i]);
        }
        Op::Mul(a, b) => {
            let (ad, bd) = (a.data(), b.data());
            let (na, nb) = (ad.len(), bd.len());
            if na == nb {
                acc_elementwise(store, a, |i| g[i] * bd[i]);
                acc_elementwise(store, b, |i| g[i] * ad[i]);
            } else {
                acc_broadcast(store, a, n, |i| g[i] * bd[i % nb]);
                acc_broadcast(store, b, n, |i| g[i] * ad[i % na]);
            }
        }
        Op::Scale(a, c) => acc_elementwise(store, a, |i| c * g[i]),
        Op::Sigmoid(a) => {
            let y = out.data();
            acc_elementwise(store, a, |i| g[i] * y[i] * (1.0 - y[i]));
        }
        Op::Tanh(a) => {
            let y = out.data();
            acc_elementwise(store, a, |i| g[i] * (1.0 - y[i] * y[i]));
        }
        Op::Relu(a) => {
            let x = a.data();
            acc_elementwise(store, a, |i| if x[i] > 0.0 { g[i] } else { 0.0 });
        }
        Op::Log10(a) => {
            let x = a.data();
            acc_elementwise(store, a, |i| g[i] / (x[i] * std::f64::consts::LN_10));
        }
        Op::MatMul(a, b) => {
            let (m, k, nn) = (a.shape()[0], a.shape()[1], b.shape()[1]);
            if let Some(slot) = store.slot(a) {
                // dA = G·Bᵀ
                gemm(m, nn, k, g, (nn, 1), b.data(), (1, nn), 1.0, slot);
            }
            if let Some(slot) = store.slot(b) {
                // dB = Aᵀ·G
                gemm(k, m, nn, a.data(), (1, k), g, (nn, 1), 1.0, slot);
            }
        }
        Op::Conv1d { input, kernels, stride } => {
            let (c_in, len) = (input.shape()[0], input.shape()[1]);
            let (c_out, width) = (kernels.shape()[0], kernels.shape()[2]);
            let frames = out.shape()[1];
            let (xd, kd) = (input.data(), kernels.data());
            if let Some(slot) = store.slot(input) {
                for o in 0..c_out {
                    for c in 0..c_in {
                        let krow = &kd[(o * c_in + c) * width..][..width];
                        for t in 0..frames {
                            let gv = g[o * frames + t];
                            let dst = &mut slot[c * len + t * stride..][..width];
                            dst.iter_mut().zip(krow).for_each(|(d, kv)| *d += gv * kv);
                        }
                    }
                }
            }
            if let Some(slot) = store.slot(kernels) {
                for o in 0..c_out {
                    for c in 0..c_in {
                        let krow = &mut slot[(o * c_in + c) * width..][..width];
                        for t in 0..frames {
                            let gv = g[o * frames + t];
                            let win = &xd[c * len + t * stride..][..width];
                            krow.iter_mut().zip(win).for_each(|(d, xv)| *d += gv * xv);
                        }
                    }
                }
            }
        }
        Op::ConvTranspose1d { input, kernels, stride } => {
            let (c_in, len) = (input.shape()[0], input.shape()[1]);
            let (c_out, width) = (kernels.shape()[1], kernels.shape()[2]);
            let out_len = out.shape()[1];
            let (xd, kd) = (input.data(), kernels.data());
            if let Some(slot) = store.slot(input) {
                for c in 0..c_in {
                    for o in 0..c_out {
                        let krow = &kd[(c * c_out + o) * width..][..width];
                        for t in 0..len {
                            let win = &g[o * out_len + t * stride..][..width];
                            slot[c * len + t] += krow.iter().zip(win).map(|(a, b)| a * b).sum::<f64>();
                        }
                    }
                }
            }
            if let Some(slot) = store.slot(kernels) {
                for c in 0..c_in {
                    for o in 0..c_out {
                        let krow = &mut slot[(c * c_out + o) * width..][..width];
                        for t in 0..len {
                            let xv = xd[c * len + t];
                            let win = &g[o * out_len + t * stride..][..width];
                            krow.iter_mut().zip(win).for_each(|(d, gv)| *d += xv * gv);
                        }
                    }
                }
            }
        }
        Op::Sum { input, axis } | Op::Mean { input, axis } => {
            let is_mean = matches!(op, Op::Mean { .. });
            match axis {
                None => {
                    let scale = if is_mean { 1.0 / input.numel() as f64 } else { 1.0 };
                    acc_elementwise(store, input, |_| g[0] * scale);
                }
                Some(ax) => {
                    let (_, ext, inner) = split_at_axis(input.shape(), *ax);
                    let scale = if is_mean { 1.0 / ext as f64 } else { 1.0 };
                    acc_elementwise(store, input, |i| {
                        let o = i / (ext * inner);
                        g[o * inner + i % inner] * scale
                    });
                }
            }
        }
        Op::Reshape(a) => acc_elementwise(store, a, |i| g[i]),
        Op::Permute(a, perm) => {
            let back = permute_data(g, out.shape(), &inverse_perm(perm));
            acc_elementwise(store, a, |i| back[i]);
        }
        Op::Concat { inputs, axis } => {
            let (outer, total, inner) = split_at_axis(out.shape(), *axis);
            let mut offset = 0;
            for p in inputs {
                let ext = p.shape()[*axis];
                if let Some(slot) = store.slot(p) {
                    for o in 0..outer {
                        let src = &g[(o * total + offset) * inner..][..ext * inner];
                        let dst = &mut slot[o * ext * inner..][..ext * inner];
                        dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                    }
                }
                offset += ext;
            }
        }
        Op::Slice { input, axis, start } => {
            let (outer, n_in, inner) = split_at_axis(input.shape(), *axis);
            let len = out.shape()[*axis];
            if let Some(slot) = store.slot(input) {
                for o in 0..outer {
                    let src = &g[o * len * inner..][..len * inner];
                    let dst = &mut slot[(o * n_in + start) * inner..][..len * inner];
                    dst.iter_mut().zip(src).for_each(|(d, s)| *d += s);
                }
            }
        }
        Op::LayerNorm {
            input,
            gain,
            bias,
            normalized,
            inv_std,
        } => {
            let d = gain.numel();
            let rows = inv_std.len();
            let gd = gain.data();
            if let Some(slot) = store.slot(input) {
                for r in 0..rows {
                    let gr = &g[r * d..][..d];
                    let xh = &normalized[r * d..][..d];
                    let gxh: Vec<f64> = gr.iter().zip(gd).map(|(a, b)| a * b).collect();
                    let m1 = gxh.iter().sum::<f64>() / d as f64;
                    let m2 = gxh.iter().zip(xh).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                    for j in 0..d {
                        slot[r * d + j] += inv_std[r] * (gxh[j] - m1 - xh[j] * m2);
                    }
                }
            }
            acc_broadcast(store, gain, n, |i| g[i] * normalized[i]);
            acc_broadcast(store, bias, n, |i| g[i]);
        }
        Op::LstmCell {
            z,
            c_prev,
            gates,
            tanh_c,
        } => {
            let rows = z.shape()[0];
            let hd = z.shape()[1] / 4;
            let cp = c_prev.as_ref().map(|c| c.data());
            let mut dz = vec![0.0; rows * 4 * hd];
            let mut dc_prev = vec![0.0; rows * hd];
            for r in 0..rows {
                let gt = &gates[r * 4 * hd..][..4 * hd];
                let gh = &g[r * 2 * hd..][..hd];
                let gc = &g[r * 2 * hd + hd..][..hd];
                let tc = &tanh_c[r * hd..][..hd];
                let dzr = &mut dz[r * 4 * hd..][..4 * hd];
                for j in 0..hd {
                    let (i, f, gg, o) = (gt[j], gt[hd + j], gt[2 * hd + j], gt[3 * hd + j]);
                    let dc = gc[j] + gh[j] * o * (1.0 - tc[j] * tc[j]);
                    let c_old = cp.map_or(0.0, |c| c[r * hd + j]);
                    dzr[j] = dc * gg * i * (1.0 - i);
                    dzr[hd + j] = dc * c_old * f * (1.0 - f);
                    dzr[2 * hd + j] = dc * i * (1.0 - gg * gg);
                    dzr[3 * hd + j] = gh[j] * tc[j] * o * (1.0 - o);
                    dc_prev[r * hd + j] = dc * f;
                }
            }
            acc_elementwise(store, z, |i| dz[i]);
            if let Some(c) = c_prev {
                acc_elementwise(store, c, |i| dc_prev[i]);
            }
        }
    }
}
