//! Forward and backward kernels. Image tensors are NCHW, dense tensors are
//! `(N, features)`.

use rand::Rng;

use super::{NnError, Real, Result, Tensor};

/// Output extent of a window of size `k` sliding with `stride` over a padded axis.
pub fn out_extent(input: usize, k: usize, stride: usize, pad: usize) -> Option<usize> {
    let padded = input + 2 * pad;
    if stride == 0 || k == 0 || padded < k {
        return None;
    }
    Some((padded - k) / stride + 1)
}

fn dims4(t: &Tensor<impl Real>, what: &str) -> Result<[usize; 4]> {
    match *t.shape() {
        [n, c, h, w] => Ok([n, c, h, w]),
        ref s => Err(NnError::ShapeMismatch(format!(
            "{what}: expected NCHW, got {s:?}"
        ))),
    }
}

fn dims2(t: &Tensor<impl Real>, what: &str) -> Result<[usize; 2]> {
    match *t.shape() {
        [n, f] => Ok([n, f]),
        ref s => Err(NnError::ShapeMismatch(format!(
            "{what}: expected (N, F), got {s:?}"
        ))),
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
    fn rows(&self) -> usize {
        self.c * self.k * self.k
    }

    fn cols(&self) -> usize {
        self.ho * self.wo
    }

    /// Unfolds one CHW image into a `(C*k*k, Ho*Wo)` matrix.
    fn im2col<T: Real>(&self, img: &[T], cols: &mut [T]) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let ncols = self.cols();
        for c in 0..self.c {
            let plane = &img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let dst = &mut cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s - p + ky as isize;
                        let line = &mut dst[oy * self.wo..(oy + 1) * self.wo];
                        if iy < 0 || iy >= self.h as isize {
                            line.iter_mut().for_each(|v| *v = T::zero());
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for (ox, v) in line.iter_mut().enumerate() {
                            let ix = ox as isize * s - p + kx as isize;
                            *v = if ix < 0 || ix >= self.w as isize {
                                T::zero()
                            } else {
                                src[ix as usize]
                            };
                        }
                    }
                }
            }
        }
    }

    /// Scatter-adds a `(C*k*k, Ho*Wo)` matrix back onto one CHW image.
    fn col2im<T: Real>(&self, cols: &[T], img: &mut [T]) {
        let (k, s, p) = (self.k, self.stride as isize, self.pad as isize);
        let ncols = self.cols();
        for c in 0..self.c {
            let plane = &mut img[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = (c * k + ky) * k + kx;
                    let src = &cols[row * ncols..(row + 1) * ncols];
                    for oy in 0..self.ho {
                        let iy = oy as isize * s - p + ky as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..(iy as usize + 1) * self.w];
                        for ox in 0..self.wo {
                            let ix = ox as isize * s - p + kx as isize;
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

fn conv_geom<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(usize, usize, ConvGeom)> {
    let [n, c, h, w] = dims4(input, "conv input")?;
    let [o, wc, kh, kw] = dims4(weight, "conv weight")?;
    if wc != c {
        return Err(NnError::ShapeMismatch(format!(
            "conv: input has {c} channels, weight expects {wc}"
        )));
    }
    if kh != kw {
        return Err(NnError::ShapeMismatch(format!(
            "conv: non-square kernel {kh}x{kw}"
        )));
    }
    if bias.shape() != [o] {
        return Err(NnError::ShapeMismatch(format!(
            "conv: bias shape {:?}, expected [{o}]",
            bias.shape()
        )));
    }
    let ho = out_extent(h, kh, stride, pad);
    let wo = out_extent(w, kw, stride, pad);
    let (Some(ho), Some(wo)) = (ho, wo) else {
        return Err(NnError::ShapeMismatch(format!(
            "conv: {h}x{w} input too small for kernel {kh}, stride {stride}, pad {pad}"
        )));
    };
    Ok((
        n,
        o,
        ConvGeom {
            c,
            h,
            w,
            k: kh,
            stride,
            pad,
            ho,
            wo,
        },
    ))
}

/// Cross-correlation plus bias: `(N,C,H,W) * (O,C,k,k) -> (N,O,Ho,Wo)`.
pub fn conv2d_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<T>> {
    let (n, o, g) = conv_geom(input, weight, bias, stride, pad)?;
    let (rows, ncols) = (g.rows(), g.cols());
    let in_sz = g.c * g.h * g.w;
    let out_sz = o * ncols;
    let mut out = Tensor::zeros(&[n, o, g.ho, g.wo]);
    let mut cols = vec![T::zero(); rows * ncols];
    let x = input.data();
    let wt = weight.data();
    let b = bias.data();
    let y = out.data_mut();
    for i in 0..n {
        g.im2col(&x[i * in_sz..(i + 1) * in_sz], &mut cols);
        let yi = &mut y[i * out_sz..(i + 1) * out_sz];
        for (oc, plane) in yi.chunks_exact_mut(ncols).enumerate() {
            plane.iter_mut().for_each(|v| *v = b[oc]);
        }
        T::gemm(
            false,
            false,
            o,
            ncols,
            rows,
            T::one(),
            wt,
            &cols,
            T::one(),
            yi,
        );
    }
    Ok(out)
}

/// Gradients of [`conv2d_forward`]: `(d_input, d_weight, d_bias)`.
pub fn conv2d_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
    stride: usize,
    pad: usize,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let o = weight.shape().first().copied().unwrap_or(0);
    let bias_shape = Tensor::<T>::zeros(&[o]);
    let (n, o, g) = conv_geom(input, weight, &bias_shape, stride, pad)?;
    if grad_out.shape() != [n, o, g.ho, g.wo] {
        return Err(NnError::ShapeMismatch(format!(
            "conv backward: grad {:?}, expected {:?}",
            grad_out.shape(),
            [n, o, g.ho, g.wo]
        )));
    }
    let (rows, ncols) = (g.rows(), g.cols());
    let in_sz = g.c * g.h * g.w;
    let out_sz = o * ncols;
    let mut d_input = Tensor::zeros(input.shape());
    let mut d_weight = Tensor::zeros(weight.shape());
    let mut d_bias_acc = vec![0.0f64; o];
    let mut cols = vec![T::zero(); rows * ncols];
    let mut d_cols = vec![T::zero(); rows * ncols];
    let x = input.data();
    let wt = weight.data();
    let gy = grad_out.data();
    for i in 0..n {
        let gyi = &gy[i * out_sz..(i + 1) * out_sz];
        for (oc, plane) in gyi.chunks_exact(ncols).enumerate() {
            d_bias_acc[oc] += plane.iter().map(|v| v.as_f64()).sum::<f64>();
        }
        g.im2col(&x[i * in_sz..(i + 1) * in_sz], &mut cols);
        // dW += dY_i (O x P) * cols^T (P x R)
        T::gemm(
            false,
            true,
            o,
            rows,
            ncols,
            T::one(),
            gyi,
            &cols,
            T::one(),
            d_weight.data_mut(),
        );
        // dcols = W^T (R x O) * dY_i (O x P)
        T::gemm(
            true,
            false,
            rows,
            ncols,
            o,
            T::one(),
            wt,
            gyi,
            T::zero(),
            &mut d_cols,
        );
        g.col2im(&d_cols, &mut d_input.data_mut()[i * in_sz..(i + 1) * in_sz]);
    }
    let d_bias = Tensor::from_f64(&[o], &d_bias_acc)?;
    Ok((d_input, d_weight, d_bias))
}

/// Max pooling without padding. Returns the output and the flat input index
/// of each selected maximum.
pub fn maxpool_forward<T: Real>(
    input: &Tensor<T>,
    k: usize,
    stride: usize,
) -> Result<(Tensor<T>, Vec<usize>)> {
    let [n, c, h, w] = dims4(input, "maxpool input")?;
    let (Some(ho), Some(wo)) = (out_extent(h, k, stride, 0), out_extent(w, k, stride, 0)) else {
        return Err(NnError::ShapeMismatch(format!(
            "maxpool: {h}x{w} input too small for window {k}"
        )));
    };
    let mut out = Tensor::zeros(&[n, c, ho, wo]);
    let mut argmax = Vec::with_capacity(n * c * ho * wo);
    let x = input.data();
    let y = out.data_mut();
    let mut oi = 0;
    for plane in 0..n * c {
        let base = plane * h * w;
        for oy in 0..ho {
            for ox in 0..wo {
                let mut best = base + oy * stride * w + ox * stride;
                for ky in 0..k {
                    let row = base + (oy * stride + ky) * w + ox * stride;
                    for idx in row..row + k {
                        // first maximum in raster order wins
                        if x[idx] > x[best] {
                            best = idx;
                        }
                    }
                }
                y[oi] = x[best];
                argmax.push(best);
                oi += 1;
            }
        }
    }
    Ok((out, argmax))
}

pub fn maxpool_backward<T: Real>(
    grad_out: &Tensor<T>,
    argmax: &[usize],
    input_shape: &[usize],
) -> Result<Tensor<T>> {
    if grad_out.len() != argmax.len() {
        return Err(NnError::ShapeMismatch(format!(
            "maxpool backward: {} grads for {} windows",
            grad_out.len(),
            argmax.len()
        )));
    }
    let mut d = Tensor::zeros(input_shape);
    let dx = d.data_mut();
    for (&idx, &g) in argmax.iter().zip(grad_out.data()) {
        dx[idx] += g;
    }
    Ok(d)
}

pub fn relu_forward<T: Real>(input: &Tensor<T>) -> Tensor<T> {
    let mut out = input.clone();
    for v in out.data_mut() {
        if *v < T::zero() {
            *v = T::zero();
        }
    }
    out
}

/// Passes gradient where the forward input was strictly positive.
pub fn relu_backward<T: Real>(input: &Tensor<T>, grad_out: &Tensor<T>) -> Result<Tensor<T>> {
    if input.shape() != grad_out.shape() {
        return Err(NnError::ShapeMismatch(format!(
            "relu backward: {:?} vs {:?}",
            input.shape(),
            grad_out.shape()
        )));
    }
    let data = input
        .data()
        .iter()
        .zip(grad_out.data())
        .map(|(&x, &g)| if x > T::zero() { g } else { T::zero() })
        .collect();
    Tensor::from_vec(input.shape(), data)
}

/// Inverted dropout: kept units are scaled by `1/(1-p)`. Returns the output
/// and the per-element multiplier for the backward pass.
pub fn dropout_forward<T: Real>(
    input: &Tensor<T>,
    p: f64,
    rng: &mut impl Rng,
) -> (Tensor<T>, Vec<T>) {
    let keep = T::from_f64_lossy(1.0 / (1.0 - p));
    let mask: Vec<T> = (0..input.len())
        .map(|_| {
            if rng.random::<f64>() < p {
                T::zero()
            } else {
                keep
            }
        })
        .collect();
    let mut out = input.clone();
    for (v, m) in out.data_mut().iter_mut().zip(&mask) {
        *v *= *m;
    }
    (out, mask)
}

pub fn dropout_backward<T: Real>(grad_out: &Tensor<T>, mask: &[T]) -> Result<Tensor<T>> {
    if grad_out.len() != mask.len() {
        return Err(NnError::ShapeMismatch(
            "dropout backward: mask length".into(),
        ));
    }
    let data = grad_out
        .data()
        .iter()
        .zip(mask)
        .map(|(&g, &m)| g * m)
        .collect();
    Tensor::from_vec(grad_out.shape(), data)
}

/// `y = x W^T + b` with `x: (N, in)`, `W: (out, in)`, `b: (out)`.
pub fn fc_forward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    bias: &Tensor<T>,
) -> Result<Tensor<T>> {
    let [n, fin] = dims2(input, "fc input")?;
    let [fout, win] = dims2(weight, "fc weight")?;
    if win != fin || bias.shape() != [fout] {
        return Err(NnError::ShapeMismatch(format!(
            "fc: input {:?}, weight {:?}, bias {:?}",
            input.shape(),
            weight.shape(),
            bias.shape()
        )));
    }
    let mut out = Tensor::zeros(&[n, fout]);
    for row in out.data_mut().chunks_exact_mut(fout) {
        row.copy_from_slice(bias.data());
    }
    T::gemm(
        false,
        true,
        n,
        fout,
        fin,
        T::one(),
        input.data(),
        weight.data(),
        T::one(),
        out.data_mut(),
    );
    Ok(out)
}

/// Gradients of [`fc_forward`]: `(d_input, d_weight, d_bias)`.
pub fn fc_backward<T: Real>(
    input: &Tensor<T>,
    weight: &Tensor<T>,
    grad_out: &Tensor<T>,
) -> Result<(Tensor<T>, Tensor<T>, Tensor<T>)> {
    let [n, fin] = dims2(input, "fc input")?;
    let [fout, _] = dims2(weight, "fc weight")?;
    if grad_out.shape() != [n, fout] {
        return Err(NnError::ShapeMismatch(format!(
            "fc backward: grad {:?}, expected [{n}, {fout}]",
            grad_out.shape()
        )));
    }
    let mut d_input = Tensor::zeros(&[n, fin]);
    T::gemm(
        false,
        false,
        n,
        fin,
        fout,
        T::one(),
        grad_out.data(),
        weight.data(),
        T::zero(),
        d_input.data_mut(),
    );
    let mut d_weight = Tensor::zeros(&[fout, fin]);
    T::gemm(
        true,
        false,
        fout,
        fin,
        n,
        T::one(),
        grad_out.data(),
        input.data(),
        T::zero(),
        d_weight.data_mut(),
    );
    let mut acc = vec![0.0f64; fout];
    for row in grad_out.data().chunks_exact(fout) {
        for (a, g) in acc.iter_mut().zip(row) {
            *a += g.as_f64();
        }
    }
    Ok((d_input, d_weight, Tensor::from_f64(&[fout], &acc)?))
}

/// Concatenates along `axis`; all other dimensions must agree.
pub fn concat<T: Real>(a: &Tensor<T>, b: &Tensor<T>, axis: usize) -> Result<Tensor<T>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != sb.len()
        || axis >= sa.len()
        || sa
            .iter()
            .zip(sb)
            .enumerate()
            .any(|(i, (x, y))| i != axis && x != y)
    {
        return Err(NnError::ShapeMismatch(format!(
            "concat axis {axis}: {sa:?} vs {sb:?}"
        )));
    }
    let outer: usize = sa[..axis].iter().product();
    let inner_a: usize = sa[axis..].iter().product();
    let inner_b: usize = sb[axis..].iter().product();
    let mut data = Vec::with_capacity(a.len() + b.len());
    for o in 0..outer {
        data.extend_from_slice(&a.data()[o * inner_a..(o + 1) * inner_a]);
        data.extend_from_slice(&b.data()[o * inner_b..(o + 1) * inner_b]);
    }
    let mut shape = sa.to_vec();
    shape[axis] += sb[axis];
    Tensor::from_vec(&shape, data)
}

/// Splits a gradient of a concatenation back into its two parts.
pub fn concat_backward<T: Real>(
    grad: &Tensor<T>,
    axis: usize,
    first: usize,
) -> Result<(Tensor<T>, Tensor<T>)> {
    let s = grad.shape();
    if axis >= s.len() || first > s[axis] {
        return Err(NnError::ShapeMismatch(format!(
            "concat backward: axis {axis}, split {first}, shape {s:?}"
        )));
    }
    let outer: usize = s[..axis].iter().product();
    let tail: usize = s[axis + 1..].iter().product();
    let (ia, ib) = (first * tail, (s[axis] - first) * tail);
    let mut da = Vec::with_capacity(outer * ia);
    let mut db = Vec::with_capacity(outer * ib);
    for o in 0..outer {
        let chunk = &grad.data()[o * (ia + ib)..(o + 1) * (ia + ib)];
        da.extend_from_slice(&chunk[..ia]);
        db.extend_from_slice(&chunk[ia..]);
    }
    let mut sa = s.to_vec();
    sa[axis] = first;
    let mut sb = s.to_vec();
    sb[axis] = s[axis] - first;
    Ok((Tensor::from_vec(&sa, da)?, Tensor::from_vec(&sb, db)?))
}

/// `(N, ...) -> (N, prod(...))`.
pub fn flatten<T: Real>(t: Tensor<T>) -> Result<Tensor<T>> {
    let n = *t
        .shape()
        .first()
        .ok_or_else(|| NnError::ShapeMismatch("flatten of scalar".into()))?;
    let rest = if n == 0 { 0 } else { t.len() / n };
    t.reshape(&[n, rest])
}
