//! Differentiable tensor operations.
//!
//! Each op computes its forward value eagerly and records a backward rule
//! capturing whatever the adjoint needs. Matrix products use plain loops in
//! i-k-j order; everything here is exercised against independent references
//! in the test suites.

use super::{numel, BackwardOp, Tensor};
use crate::error::{Error, Result};
use crate::scalar::Scalar;

// ---------------------------------------------------------------------------
// dense 2-d matmul kernels shared by forward and adjoint passes

/// out += a[m,k] @ b[k,n]
fn mm_acc<T: Scalar>(a: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let out_row = &mut out[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let b_row = &b[p * n..(p + 1) * n];
            for (o, &bv) in out_row.iter_mut().zip(b_row) {
                *o = *o + a_ip * bv;
            }
        }
    }
}

/// out += g[m,n] @ b[k,n]^T  (adjoint w.r.t. the left operand)
fn mm_acc_nt<T: Scalar>(g: &[T], b: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let g_row = &g[i * n..(i + 1) * n];
        let out_row = &mut out[i * k..(i + 1) * k];
        for p in 0..k {
            let b_row = &b[p * n..(p + 1) * n];
            let mut acc = T::zero();
            for (&gv, &bv) in g_row.iter().zip(b_row) {
                acc = acc + gv * bv;
            }
            out_row[p] = out_row[p] + acc;
        }
    }
}

/// out += a[m,k]^T @ g[m,n]  (adjoint w.r.t. the right operand)
fn mm_acc_tn<T: Scalar>(a: &[T], g: &[T], m: usize, k: usize, n: usize, out: &mut [T]) {
    for i in 0..m {
        let a_row = &a[i * k..(i + 1) * k];
        let g_row = &g[i * n..(i + 1) * n];
        for (p, &a_ip) in a_row.iter().enumerate() {
            let out_row = &mut out[p * n..(p + 1) * n];
            for (o, &gv) in out_row.iter_mut().zip(g_row) {
                *o = *o + a_ip * gv;
            }
        }
    }
}

// ---------------------------------------------------------------------------
// elementwise and shape ops

struct AddOp;

impl<T: Scalar> BackwardOp<T> for AddOp {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        parents
            .iter()
            .map(|p| p.requires_grad().then(|| grad.to_vec()))
            .collect()
    }
}

struct MulOp;

impl<T: Scalar> BackwardOp<T> for MulOp {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let da = a
            .requires_grad()
            .then(|| grad.iter().zip(b.data()).map(|(&g, &v)| g * v).collect());
        let db = b
            .requires_grad()
            .then(|| grad.iter().zip(a.data()).map(|(&g, &v)| g * v).collect());
        vec![da, db]
    }
}

struct ScaleOp<T>(T);

impl<T: Scalar> BackwardOp<T> for ScaleOp<T> {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let c = self.0;
        vec![parents[0]
            .requires_grad()
            .then(|| grad.iter().map(|&g| g * c).collect())]
    }
}

struct ReluOp;

impl<T: Scalar> BackwardOp<T> for ReluOp {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let p = &parents[0];
        vec![p.requires_grad().then(|| {
            grad.iter()
                .zip(p.data())
                .map(|(&g, &x)| if x > T::zero() { g } else { T::zero() })
                .collect()
        })]
    }
}

struct ReshapeOp;

impl<T: Scalar> BackwardOp<T> for ReshapeOp {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        vec![parents[0].requires_grad().then(|| grad.to_vec())]
    }
}

struct Transpose12Op;

fn transpose12_data<T: Scalar>(src: &[T], b: usize, m: usize, n: usize) -> Vec<T> {
    let mut out = vec![T::zero(); src.len()];
    for k in 0..b {
        let s = &src[k * m * n..(k + 1) * m * n];
        let d = &mut out[k * m * n..(k + 1) * m * n];
        for i in 0..m {
            for j in 0..n {
                d[j * m + i] = s[i * n + j];
            }
        }
    }
    out
}

impl<T: Scalar> BackwardOp<T> for Transpose12Op {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let p = &parents[0];
        let (b, m, n) = (p.shape()[0], p.shape()[1], p.shape()[2]);
        // grad has shape [b, n, m]; transpose it back to [b, m, n].
        vec![p
            .requires_grad()
            .then(|| transpose12_data(grad, b, n, m))]
    }
}

struct Concat0Op;

impl<T: Scalar> BackwardOp<T> for Concat0Op {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let mut offset = 0;
        parents
            .iter()
            .map(|p| {
                let len = p.numel();
                let slice = &grad[offset..offset + len];
                offset += len;
                p.requires_grad().then(|| slice.to_vec())
            })
            .collect()
    }
}

struct SumAxis0Op;

impl<T: Scalar> BackwardOp<T> for SumAxis0Op {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let p = &parents[0];
        let b = p.shape()[0];
        vec![p.requires_grad().then(|| {
            let mut out = Vec::with_capacity(p.numel());
            for _ in 0..b {
                out.extend_from_slice(grad);
            }
            out
        })]
    }
}

struct SumAllOp;

impl<T: Scalar> BackwardOp<T> for SumAllOp {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let p = &parents[0];
        vec![p.requires_grad().then(|| vec![grad[0]; p.numel()])]
    }
}

/// Broadcast multiply by a spatial field over all leading dimensions:
/// out[q, p] = x[q, p] * field[p] with x viewed as [Q, P].
struct SpatialGateOp;

impl<T: Scalar> BackwardOp<T> for SpatialGateOp {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (x, field) = (&parents[0], &parents[1]);
        let p_len = field.numel();
        let dx = x.requires_grad().then(|| {
            grad.iter()
                .enumerate()
                .map(|(i, &g)| g * field.data()[i % p_len])
                .collect()
        });
        let dfield = field.requires_grad().then(|| {
            let mut acc = vec![T::zero(); p_len];
            for (i, &g) in grad.iter().enumerate() {
                let p = i % p_len;
                acc[p] = acc[p] + g * x.data()[i];
            }
            acc
        });
        vec![dx, dfield]
    }
}

struct MatmulBatchedOp;

impl<T: Scalar> BackwardOp<T> for MatmulBatchedOp {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (a, b) = (&parents[0], &parents[1]);
        let (ba, m, k) = (a.shape()[0], a.shape()[1], a.shape()[2]);
        let (bb, n) = (b.shape()[0], b.shape()[2]);
        let bo = ba.max(bb);
        let mut da = a.requires_grad().then(|| vec![T::zero(); a.numel()]);
        let mut db = b.requires_grad().then(|| vec![T::zero(); b.numel()]);
        for batch in 0..bo {
            let ai = if ba == 1 { 0 } else { batch };
            let bi = if bb == 1 { 0 } else { batch };
            let g = &grad[batch * m * n..(batch + 1) * m * n];
            if let Some(da) = da.as_mut() {
                mm_acc_nt(
                    g,
                    &b.data()[bi * k * n..(bi + 1) * k * n],
                    m,
                    k,
                    n,
                    &mut da[ai * m * k..(ai + 1) * m * k],
                );
            }
            if let Some(db) = db.as_mut() {
                mm_acc_tn(
                    &a.data()[ai * m * k..(ai + 1) * m * k],
                    g,
                    m,
                    k,
                    n,
                    &mut db[bi * k * n..(bi + 1) * k * n],
                );
            }
        }
        vec![da, db]
    }
}

struct SoftmaxLastOp;

impl<T: Scalar> BackwardOp<T> for SoftmaxLastOp {
    fn backward(&self, grad: &[T], out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let p = &parents[0];
        let last = *p.shape().last().unwrap();
        vec![p.requires_grad().then(|| {
            let mut dx = vec![T::zero(); out.len()];
            for (slice, (g_slice, dx_slice)) in out
                .chunks_exact(last)
                .zip(grad.chunks_exact(last).zip(dx.chunks_exact_mut(last)))
            {
                let mut dot = T::zero();
                for (&s, &g) in slice.iter().zip(g_slice) {
                    dot = dot + s * g;
                }
                for ((d, &s), &g) in dx_slice.iter_mut().zip(slice).zip(g_slice) {
                    *d = s * (g - dot);
                }
            }
            dx
        })]
    }
}

struct UpsampleNearestOp {
    factor: usize,
}

impl<T: Scalar> BackwardOp<T> for UpsampleNearestOp {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let p = &parents[0];
        let f = self.factor;
        let (b, c, h, w) = (p.shape()[0], p.shape()[1], p.shape()[2], p.shape()[3]);
        let (ho, wo) = (h * f, w * f);
        vec![p.requires_grad().then(|| {
            let mut dx = vec![T::zero(); p.numel()];
            for bc in 0..b * c {
                let g_plane = &grad[bc * ho * wo..(bc + 1) * ho * wo];
                let dx_plane = &mut dx[bc * h * w..(bc + 1) * h * w];
                for yo in 0..ho {
                    let yi = yo / f;
                    for xo in 0..wo {
                        let idx = yi * w + xo / f;
                        dx_plane[idx] = dx_plane[idx] + g_plane[yo * wo + xo];
                    }
                }
            }
            dx
        })]
    }
}

// ---------------------------------------------------------------------------
// convolution

struct Conv2dOp {
    stride: usize,
    padding: usize,
}

impl<T: Scalar> BackwardOp<T> for Conv2dOp {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let (input, weight, bias) = (&parents[0], &parents[1], &parents[2]);
        let (b, cin, hi, wi) = (
            input.shape()[0],
            input.shape()[1],
            input.shape()[2],
            input.shape()[3],
        );
        let (cout, ksize) = (weight.shape()[0], weight.shape()[2]);
        let (s, p) = (self.stride, self.padding);
        let ho = (hi + 2 * p - ksize) / s + 1;
        let wo = (wi + 2 * p - ksize) / s + 1;

        let mut dinput = input.requires_grad().then(|| vec![T::zero(); input.numel()]);
        let mut dweight = weight.requires_grad().then(|| vec![T::zero(); weight.numel()]);
        let mut dbias = bias.requires_grad().then(|| vec![T::zero(); bias.numel()]);

        let in_data = input.data();
        let w_data = weight.data();

        let krange = |o: usize, limit: usize| -> (usize, usize) {
            let base = o * s;
            let lo = p.saturating_sub(base);
            let hi_excl = (limit + p).saturating_sub(base).min(ksize);
            (lo, hi_excl)
        };

        for bi in 0..b {
            for co in 0..cout {
                let g_plane = &grad[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
                if let Some(dbias) = dbias.as_mut() {
                    let mut acc = T::zero();
                    for &g in g_plane {
                        acc = acc + g;
                    }
                    dbias[co] = dbias[co] + acc;
                }
                for yo in 0..ho {
                    let (ky_lo, ky_hi) = krange(yo, hi);
                    for xo in 0..wo {
                        let g = g_plane[yo * wo + xo];
                        if g == T::zero() {
                            continue;
                        }
                        let (kx_lo, kx_hi) = krange(xo, wi);
                        for ci in 0..cin {
                            let in_plane = (bi * cin + ci) * hi * wi;
                            let w_plane = ((co * cin) + ci) * ksize * ksize;
                            for ky in ky_lo..ky_hi {
                                let yi = yo * s + ky - p;
                                let xi0 = xo * s + kx_lo - p;
                                let in_base = in_plane + yi * wi + xi0;
                                let w_base = w_plane + ky * ksize + kx_lo;
                                let span = kx_hi - kx_lo;
                                if let Some(dw) = dweight.as_mut() {
                                    let in_row = &in_data[in_base..in_base + span];
                                    let dw_row = &mut dw[w_base..w_base + span];
                                    for i in 0..span {
                                        dw_row[i] = dw_row[i] + g * in_row[i];
                                    }
                                }
                                if let Some(di) = dinput.as_mut() {
                                    let w_row = &w_data[w_base..w_base + span];
                                    let di_row = &mut di[in_base..in_base + span];
                                    for i in 0..span {
                                        di_row[i] = di_row[i] + g * w_row[i];
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        vec![dinput, dweight, dbias]
    }
}

/// Cross-correlation of `input` [B,Cin,Hi,Wi] with `weight` [Cout,Cin,k,k]
/// plus `bias` [Cout]. Gradients flow to all three operands.
pub fn conv2d<T: Scalar>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    padding: usize,
) -> Result<Tensor<T>> {
    if input.shape().len() != 4 || weight.shape().len() != 4 {
        return Err(Error::dim(format!(
            "conv2d expects 4-d input and weight, got {:?} and {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    let (b, cin, hi, wi) = (
        input.shape()[0],
        input.shape()[1],
        input.shape()[2],
        input.shape()[3],
    );
    let (cout, wcin, kh, kw) = (
        weight.shape()[0],
        weight.shape()[1],
        weight.shape()[2],
        weight.shape()[3],
    );
    if wcin != cin {
        return Err(Error::dim(format!(
            "conv2d channel mismatch: input {:?} vs weight {:?}",
            input.shape(),
            weight.shape()
        )));
    }
    if kh != kw {
        return Err(Error::config(format!(
            "conv2d requires square kernels, got {kh}x{kw}"
        )));
    }
    if bias.shape() != [cout] {
        return Err(Error::dim(format!(
            "conv2d bias shape {:?}, expected [{cout}]",
            bias.shape()
        )));
    }
    if stride == 0 {
        return Err(Error::config("conv2d stride must be positive".to_string()));
    }
    let span_h = hi + 2 * padding;
    let span_w = wi + 2 * padding;
    if span_h < kh || span_w < kh || (span_h - kh) % stride != 0 || (span_w - kh) % stride != 0 {
        return Err(Error::config(format!(
            "conv2d output size is not integral: input {hi}x{wi}, kernel {kh}, stride {stride}, padding {padding}"
        )));
    }
    let ho = (span_h - kh) / stride + 1;
    let wo = (span_w - kh) / stride + 1;

    let in_data = input.data();
    let w_data = weight.data();
    let b_data = bias.data();
    let mut out = vec![T::zero(); b * cout * ho * wo];

    // Valid kernel index range per output coordinate, padding hoisted out
    // of the inner loops.
    let krange = |o: usize, limit: usize| -> (usize, usize) {
        let base = o * stride;
        let lo = padding.saturating_sub(base);
        let hi_excl = (limit + padding).saturating_sub(base).min(kh);
        (lo, hi_excl)
    };

    for bi in 0..b {
        for co in 0..cout {
            let out_plane = &mut out[(bi * cout + co) * ho * wo..(bi * cout + co + 1) * ho * wo];
            for yo in 0..ho {
                let (ky_lo, ky_hi) = krange(yo, hi);
                for xo in 0..wo {
                    let (kx_lo, kx_hi) = krange(xo, wi);
                    let mut acc = b_data[co];
                    for ci in 0..cin {
                        let in_plane = (bi * cin + ci) * hi * wi;
                        let w_plane = ((co * cin) + ci) * kh * kh;
                        for ky in ky_lo..ky_hi {
                            let yi = yo * stride + ky - padding;
                            let xi0 = xo * stride + kx_lo - padding;
                            let in_row = &in_data[in_plane + yi * wi + xi0..];
                            let w_row = &w_data[w_plane + ky * kh + kx_lo..];
                            for i in 0..kx_hi - kx_lo {
                                acc = acc + in_row[i] * w_row[i];
                            }
                        }
                    }
                    out_plane[yo * wo + xo] = acc;
                }
            }
        }
    }

    Ok(Tensor::from_op(
        out,
        vec![b, cout, ho, wo],
        vec![input.clone(), weight.clone(), bias.clone()],
        Box::new(Conv2dOp { stride, padding }),
    ))
}

// ---------------------------------------------------------------------------
// cross-entropy

struct CrossEntropyOp {
    labels: Vec<u8>,
    ignore: Option<u8>,
    valid: usize,
}

impl<T: Scalar> BackwardOp<T> for CrossEntropyOp {
    fn backward(&self, grad: &[T], _out: &[T], parents: &[Tensor<T>]) -> Vec<Option<Vec<T>>> {
        let logits = &parents[0];
        let (b, k, h, w) = (
            logits.shape()[0],
            logits.shape()[1],
            logits.shape()[2],
            logits.shape()[3],
        );
        vec![logits.requires_grad().then(|| {
            let hw = h * w;
            let data = logits.data();
            let mut dx = vec![T::zero(); logits.numel()];
            let scale = grad[0] / T::from_f64(self.valid as f64);
            for bi in 0..b {
                for pix in 0..hw {
                    let label = self.labels[bi * hw + pix];
                    if Some(label) == self.ignore {
                        continue;
                    }
                    let base = bi * k * hw + pix;
                    let mut max = T::neg_infinity();
                    for c in 0..k {
                        max = max.max(data[base + c * hw]);
                    }
                    let mut denom = T::zero();
                    for c in 0..k {
                        denom = denom + (data[base + c * hw] - max).exp();
                    }
                    for c in 0..k {
                        let soft = (data[base + c * hw] - max).exp() / denom;
                        let target = if c as u8 == label { T::one() } else { T::zero() };
                        dx[base + c * hw] = scale * (soft - target);
                    }
                }
            }
            dx
        })]
    }
}

/// Mean over non-ignored pixels of `-log softmax(logits)[label]`.
/// `labels` is a row-major `[B,H,W]` raster of class ids.
pub fn cross_entropy<T: Scalar>(
    logits: &Tensor<T>,
    labels: &[u8],
    ignore: Option<u8>,
) -> Result<Tensor<T>> {
    if logits.shape().len() != 4 {
        return Err(Error::dim(format!(
            "cross_entropy expects [B,K,H,W] logits, got {:?}",
            logits.shape()
        )));
    }
    let (b, k, h, w) = (
        logits.shape()[0],
        logits.shape()[1],
        logits.shape()[2],
        logits.shape()[3],
    );
    if labels.len() != b * h * w {
        return Err(Error::dim(format!(
            "label raster has {} entries, logits imply {}",
            labels.len(),
            b * h * w
        )));
    }
    let hw = h * w;
    let data = logits.data();
    let mut total = T::zero();
    let mut valid = 0usize;
    for bi in 0..b {
        for pix in 0..hw {
            let label = labels[bi * hw + pix];
            if Some(label) == ignore {
                continue;
            }
            if label as usize >= k {
                return Err(Error::data(format!(
                    "label {} out of range [0,{}) at batch {}, pixel ({}, {})",
                    label,
                    k,
                    bi,
                    pix / w,
                    pix % w
                )));
            }
            let base = bi * k * hw + pix;
            let mut max = T::neg_infinity();
            for c in 0..k {
                max = max.max(data[base + c * hw]);
            }
            let mut denom = T::zero();
            for c in 0..k {
                denom = denom + (data[base + c * hw] - max).exp();
            }
            let log_soft = data[base + label as usize * hw] - max - denom.ln();
            total = total - log_soft;
            valid += 1;
        }
    }
    if valid == 0 {
        return Err(Error::usage(
            "cross_entropy: every pixel carries the ignore label".to_string(),
        ));
    }
    let mean = total / T::from_f64(valid as f64);
    Ok(Tensor::from_op(
        vec![mean],
        vec![1],
        vec![logits.clone()],
        Box::new(CrossEntropyOp {
            labels: labels.to_vec(),
            ignore,
            valid,
        }),
    ))
}

// ---------------------------------------------------------------------------
// tensor methods

impl<T: Scalar> Tensor<T> {
    fn check_same_shape(&self, other: &Tensor<T>, op: &str) -> Result<()> {
        if self.shape() != other.shape() {
            return Err(Error::dim(format!(
                "{op}: shapes {:?} and {:?} differ",
                self.shape(),
                other.shape()
            )));
        }
        Ok(())
    }

    pub fn add(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "add")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a + b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(AddOp),
        ))
    }

    pub fn mul(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        self.check_same_shape(other, "mul")?;
        let data = self
            .data()
            .iter()
            .zip(other.data())
            .map(|(&a, &b)| a * b)
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), other.clone()],
            Box::new(MulOp),
        ))
    }

    pub fn scale(&self, c: T) -> Result<Tensor<T>> {
        let data = self.data().iter().map(|&a| a * c).collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(ScaleOp(c)),
        ))
    }

    pub fn relu(&self) -> Tensor<T> {
        // max(x, 0) written so the output never carries a negative zero.
        let data = self
            .data()
            .iter()
            .map(|&x| if x > T::zero() { x } else { T::zero() })
            .collect();
        Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(ReluOp),
        )
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor<T>> {
        if numel(shape) != self.numel() {
            return Err(Error::dim(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(),
                shape
            )));
        }
        Ok(Tensor::from_op(
            self.to_vec(),
            shape.to_vec(),
            vec![self.clone()],
            Box::new(ReshapeOp),
        ))
    }

    /// Swap the last two axes of a 3-d tensor.
    pub fn transpose12(&self) -> Result<Tensor<T>> {
        if self.shape().len() != 3 {
            return Err(Error::dim(format!(
                "transpose12 expects a 3-d tensor, got {:?}",
                self.shape()
            )));
        }
        let (b, m, n) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        Ok(Tensor::from_op(
            transpose12_data(self.data(), b, m, n),
            vec![b, n, m],
            vec![self.clone()],
            Box::new(Transpose12Op),
        ))
    }

    /// Concatenate along axis 0; trailing dimensions must agree.
    pub fn concat0(parts: &[&Tensor<T>]) -> Result<Tensor<T>> {
        if parts.is_empty() {
            return Err(Error::usage("concat0 of zero tensors".to_string()));
        }
        let rest = &parts[0].shape()[1..];
        let mut dim0 = 0;
        for p in parts {
            if &p.shape()[1..] != rest {
                return Err(Error::dim(format!(
                    "concat0: trailing dims {:?} vs {:?}",
                    &p.shape()[1..],
                    rest
                )));
            }
            dim0 += p.shape()[0];
        }
        let mut data = Vec::with_capacity(dim0 * numel(rest));
        for p in parts {
            data.extend_from_slice(p.data());
        }
        let mut shape = vec![dim0];
        shape.extend_from_slice(rest);
        Ok(Tensor::from_op(
            data,
            shape,
            parts.iter().map(|p| (*p).clone()).collect(),
            Box::new(Concat0Op),
        ))
    }

    /// Sum over axis 0, keeping it with size 1.
    pub fn sum_axis0(&self) -> Result<Tensor<T>> {
        if self.shape().is_empty() {
            return Err(Error::dim("sum_axis0 on a 0-d tensor".to_string()));
        }
        let b = self.shape()[0];
        let rest = self.numel() / b;
        let mut out = vec![T::zero(); rest];
        for chunk in self.data().chunks_exact(rest) {
            for (o, &v) in out.iter_mut().zip(chunk) {
                *o = *o + v;
            }
        }
        let mut shape = self.shape().to_vec();
        shape[0] = 1;
        Ok(Tensor::from_op(
            out,
            shape,
            vec![self.clone()],
            Box::new(SumAxis0Op),
        ))
    }

    /// Sum of all elements, as a `[1]` tensor.
    pub fn sum_all(&self) -> Tensor<T> {
        let mut acc = T::zero();
        for &v in self.data() {
            acc = acc + v;
        }
        Tensor::from_op(vec![acc], vec![1], vec![self.clone()], Box::new(SumAllOp))
    }

    /// Multiply by a spatial field broadcast over all leading dimensions:
    /// `out[.., p] = self[.., p] * field[p]`.
    pub fn mul_spatial(&self, field: &Tensor<T>) -> Result<Tensor<T>> {
        let p_len = field.numel();
        if p_len == 0 || self.numel() % p_len != 0 {
            return Err(Error::config(format!(
                "spatial field of {} elements does not divide tensor {:?}",
                p_len,
                self.shape()
            )));
        }
        let f = field.data();
        let data = self
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * f[i % p_len])
            .collect();
        Ok(Tensor::from_op(
            data,
            self.shape().to_vec(),
            vec![self.clone(), field.clone()],
            Box::new(SpatialGateOp),
        ))
    }

    /// Batched matrix product `[Ba,M,K] x [Bb,K,N] -> [max(Ba,Bb),M,N]`;
    /// batch dims must be equal or one of them 1 (broadcast).
    pub fn matmul_batched(&self, other: &Tensor<T>) -> Result<Tensor<T>> {
        if self.shape().len() != 3 || other.shape().len() != 3 {
            return Err(Error::dim(format!(
                "matmul_batched expects 3-d tensors, got {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let (ba, m, ka) = (self.shape()[0], self.shape()[1], self.shape()[2]);
        let (bb, kb, n) = (other.shape()[0], other.shape()[1], other.shape()[2]);
        if ka != kb || !(ba == bb || ba == 1 || bb == 1) {
            return Err(Error::dim(format!(
                "matmul_batched: incompatible shapes {:?} and {:?}",
                self.shape(),
                other.shape()
            )));
        }
        let bo = ba.max(bb);
        let mut out = vec![T::zero(); bo * m * n];
        for batch in 0..bo {
            let ai = if ba == 1 { 0 } else { batch };
            let bi = if bb == 1 { 0 } else { batch };
            mm_acc(
                &self.data()[ai * m * ka..(ai + 1) * m * ka],
                &other.data()[bi * ka * n..(bi + 1) * ka * n],
                m,
                ka,
                n,
                &mut out[batch * m * n..(batch + 1) * m * n],
            );
        }
        Ok(Tensor::from_op(
            out,
            vec![bo, m, n],
            vec![self.clone(), other.clone()],
            Box::new(MatmulBatchedOp),
        ))
    }

    /// Numerically stable softmax along the last axis.
    pub fn softmax_last(&self) -> Result<Tensor<T>> {
        let last = *self
            .shape()
            .last()
            .ok_or_else(|| Error::dim("softmax on a 0-d tensor".to_string()))?;
        if self.data().iter().any(|v| !v.is_finite()) {
            return Err(Error::numeric(
                "softmax input contains non-finite values".to_string(),
            ));
        }
        let mut out = vec![T::zero(); self.numel()];
        for (src, dst) in self
            .data()
            .chunks_exact(last)
            .zip(out.chunks_exact_mut(last))
        {
            let mut max = T::neg_infinity();
            for &v in src {
                max = max.max(v);
            }
            let mut sum = T::zero();
            for (d, &v) in dst.iter_mut().zip(src) {
                *d = (v - max).exp();
                sum = sum + *d;
            }
            for d in dst.iter_mut() {
                *d = *d / sum;
            }
        }
        Ok(Tensor::from_op(
            out,
            self.shape().to_vec(),
            vec![self.clone()],
            Box::new(SoftmaxLastOp),
        ))
    }

    /// Replicate each pixel of a `[B,C,H,W]` tensor into an f-by-f block.
    pub fn upsample_nearest(&self, factor: usize) -> Result<Tensor<T>> {
        if self.shape().len() != 4 {
            return Err(Error::dim(format!(
                "upsample_nearest expects [B,C,H,W], got {:?}",
                self.shape()
            )));
        }
        if factor == 0 {
            return Err(Error::config("upsample factor must be >= 1".to_string()));
        }
        let (b, c, h, w) = (
            self.shape()[0],
            self.shape()[1],
            self.shape()[2],
            self.shape()[3],
        );
        let (ho, wo) = (h * factor, w * factor);
        let mut out = vec![T::zero(); b * c * ho * wo];
        for bc in 0..b * c {
            let src = &self.data()[bc * h * w..(bc + 1) * h * w];
            let dst = &mut out[bc * ho * wo..(bc + 1) * ho * wo];
            for yo in 0..ho {
                let src_row = &src[(yo / factor) * w..(yo / factor + 1) * w];
                let dst_row = &mut dst[yo * wo..(yo + 1) * wo];
                for (xo, d) in dst_row.iter_mut().enumerate() {
                    *d = src_row[xo / factor];
                }
            }
        }
        Ok(Tensor::from_op(
            out,
            vec![b, c, ho, wo],
            vec![self.clone()],
            Box::new(UpsampleNearestOp { factor }),
        ))
    }
}
