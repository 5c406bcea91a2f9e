//! Raw forward/backward kernels behind the differentiable ops.
//!
//! Summation order inside the convolutions is fixed (input-channel major,
//! then kernel positions row-major) so repeated runs are bit-identical.

use super::{numel, Result, Tensor, TensorError};
use crate::scalar::Scalar;

fn conv_out_dim(input: usize, kernel: usize, stride: usize, pad: usize) -> Result<usize> {
    let padded = input + 2 * pad;
    if kernel == 0 || kernel > padded {
        return Err(TensorError::KernelTooLarge(format!(
            "kernel {kernel} on input {input} with pad {pad}"
        )));
    }
    if stride == 0 {
        return Err(TensorError::BadSize("stride must be >= 1".into()));
    }
    Ok((padded - kernel) / stride + 1)
}

/// Batched matrix product `[.., m, k] x [.., k, n] -> [.., m, n]`.
///
/// A rank-2 right operand is shared across all batch indices of the left.
pub fn matmul<S: Scalar>(a: &Tensor<S>, b: &Tensor<S>) -> Result<Tensor<S>> {
    let (ash, bsh) = (a.shape(), b.shape());
    if ash.len() < 2 || bsh.len() < 2 {
        return Err(TensorError::ShapeMismatch(format!("matmul {ash:?} x {bsh:?}")));
    }
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let (kb, n) = (bsh[bsh.len() - 2], bsh[bsh.len() - 1]);
    let shared_rhs = bsh.len() == 2 && ash.len() > 2;
    if k != kb || (!shared_rhs && ash[..ash.len() - 2] != bsh[..bsh.len() - 2]) {
        return Err(TensorError::ShapeMismatch(format!("matmul {ash:?} x {bsh:?}")));
    }
    let batch = numel(&ash[..ash.len() - 2]);
    let mut out_shape = ash[..ash.len() - 2].to_vec();
    out_shape.extend([m, n]);
    let (ad, bd) = (a.data(), b.data());
    let mut out = vec![S::zero(); batch * m * n];
    for p in 0..batch {
        let abase = p * m * k;
        let bbase = if shared_rhs { 0 } else { p * k * n };
        let obase = p * m * n;
        for i in 0..m {
            for j in 0..n {
                let mut acc = S::zero();
                for l in 0..k {
                    acc += ad[abase + i * k + l] * bd[bbase + l * n + j];
                }
                out[obase + i * n + j] = acc;
            }
        }
    }
    Tensor::new(out_shape, out)
}

/// Gradients of [`matmul`] w.r.t. both operands.
pub fn matmul_backward<S: Scalar>(
    a: &Tensor<S>,
    b: &Tensor<S>,
    grad: &Tensor<S>,
) -> (Tensor<S>, Tensor<S>) {
    let (ash, bsh) = (a.shape(), b.shape());
    let (m, k) = (ash[ash.len() - 2], ash[ash.len() - 1]);
    let n = bsh[bsh.len() - 1];
    let shared_rhs = bsh.len() == 2 && ash.len() > 2;
    let batch = numel(&ash[..ash.len() - 2]);
    let (ad, bd, gd) = (a.data(), b.data(), grad.data());
    let mut da = vec![S::zero(); ad.len()];
    let mut db = vec![S::zero(); bd.len()];
    for p in 0..batch {
        let abase = p * m * k;
        let bbase = if shared_rhs { 0 } else { p * k * n };
        let gbase = p * m * n;
        for i in 0..m {
            for l in 0..k {
                let mut acc = S::zero();
                for j in 0..n {
                    acc += gd[gbase + i * n + j] * bd[bbase + l * n + j];
                }
                da[abase + i * k + l] += acc;
            }
        }
        for l in 0..k {
            for j in 0..n {
                let mut acc = S::zero();
                for i in 0..m {
                    acc += ad[abase + i * k + l] * gd[gbase + i * n + j];
                }
                db[bbase + l * n + j] += acc;
            }
        }
    }
    (
        Tensor::new(ash.to_vec(), da).expect("da shape"),
        Tensor::new(bsh.to_vec(), db).expect("db shape"),
    )
}

/// 2D cross-correlation with zero padding.
/// `x: [N, Cin, H, W]`, `w: [Cout, Cin, kh, kw]`, `b: [Cout]`.
pub fn conv2d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 4 || ws.len() != 4 || xs[1] != ws[1] {
        return Err(TensorError::ShapeMismatch(format!("conv2d {xs:?} with kernel {ws:?}")));
    }
    if let Some(bias) = b {
        if bias.shape() != [ws[0]] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv2d bias {:?} for {} output channels",
                bias.shape(),
                ws[0]
            )));
        }
    }
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(wd, kw, stride, pad)?;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![S::zero(); n * cout * oh * ow];
    for ni in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = S::zero();
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                                acc += xd[xi] * wdat[wi];
                            }
                        }
                    }
                    if let Some(bias) = b {
                        acc += bias.data()[oc];
                    }
                    out[((ni * cout + oc) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(vec![n, cout, oh, ow], out)
}

/// Gradients of [`conv2d`]: `(dx, dw, db)`.
pub fn conv2d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    grad: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (xs, ws, gs) = (x.shape(), w.shape(), grad.shape());
    let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
    let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
    let (oh, ow) = (gs[2], gs[3]);
    let (xd, wdat, gd) = (x.data(), w.data(), grad.data());
    let mut dx = vec![S::zero(); xd.len()];
    let mut dw = vec![S::zero(); wdat.len()];
    let mut db = vec![S::zero(); cout];
    for ni in 0..n {
        for oc in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let g = gd[((ni * cout + oc) * oh + oy) * ow + ox];
                    db[oc] += g;
                    for ic in 0..cin {
                        for ky in 0..kh {
                            let iy = (oy * stride + ky) as isize - pad as isize;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..kw {
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if ix < 0 || ix >= wd as isize {
                                    continue;
                                }
                                let xi = ((ni * cin + ic) * h + iy as usize) * wd + ix as usize;
                                let wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                                dx[xi] += wdat[wi] * g;
                                dw[wi] += xd[xi] * g;
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(xs.to_vec(), dx).expect("dx shape"),
        Tensor::new(ws.to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![cout], db).expect("db shape"),
    )
}

/// 3D cross-correlation with zero padding on all three axes.
/// `x: [N, Cin, T, H, W]`, `w: [Cout, Cin, kt, kh, kw]`, `b: [Cout]`.
pub fn conv3d<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    b: Option<&Tensor<S>>,
    stride: usize,
    pad: usize,
) -> Result<Tensor<S>> {
    let (xs, ws) = (x.shape(), w.shape());
    if xs.len() != 5 || ws.len() != 5 || xs[1] != ws[1] {
        return Err(TensorError::ShapeMismatch(format!("conv3d {xs:?} with kernel {ws:?}")));
    }
    if let Some(bias) = b {
        if bias.shape() != [ws[0]] {
            return Err(TensorError::ShapeMismatch(format!(
                "conv3d bias {:?} for {} output channels",
                bias.shape(),
                ws[0]
            )));
        }
    }
    let (n, cin, t, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let ot = conv_out_dim(t, kt, stride, pad)?;
    let oh = conv_out_dim(h, kh, stride, pad)?;
    let ow = conv_out_dim(wd, kw, stride, pad)?;
    let (xd, wdat) = (x.data(), w.data());
    let mut out = vec![S::zero(); n * cout * ot * oh * ow];
    for ni in 0..n {
        for oc in 0..cout {
            for oz in 0..ot {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let mut acc = S::zero();
                        for ic in 0..cin {
                            for kz in 0..kt {
                                let iz = (oz * stride + kz) as isize - pad as isize;
                                if iz < 0 || iz >= t as isize {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((ni * cin + ic) * t + iz as usize) * h
                                            + iy as usize)
                                            * wd
                                            + ix as usize;
                                        let wi =
                                            (((oc * cin + ic) * kt + kz) * kh + ky) * kw + kx;
                                        acc += xd[xi] * wdat[wi];
                                    }
                                }
                            }
                        }
                        if let Some(bias) = b {
                            acc += bias.data()[oc];
                        }
                        out[(((ni * cout + oc) * ot + oz) * oh + oy) * ow + ox] = acc;
                    }
                }
            }
        }
    }
    Tensor::new(vec![n, cout, ot, oh, ow], out)
}

/// Gradients of [`conv3d`]: `(dx, dw, db)`.
pub fn conv3d_backward<S: Scalar>(
    x: &Tensor<S>,
    w: &Tensor<S>,
    grad: &Tensor<S>,
    stride: usize,
    pad: usize,
) -> (Tensor<S>, Tensor<S>, Tensor<S>) {
    let (xs, ws, gs) = (x.shape(), w.shape(), grad.shape());
    let (n, cin, t, h, wd) = (xs[0], xs[1], xs[2], xs[3], xs[4]);
    let (cout, kt, kh, kw) = (ws[0], ws[2], ws[3], ws[4]);
    let (ot, oh, ow) = (gs[2], gs[3], gs[4]);
    let (xd, wdat, gd) = (x.data(), w.data(), grad.data());
    let mut dx = vec![S::zero(); xd.len()];
    let mut dw = vec![S::zero(); wdat.len()];
    let mut db = vec![S::zero(); cout];
    for ni in 0..n {
        for oc in 0..cout {
            for oz in 0..ot {
                for oy in 0..oh {
                    for ox in 0..ow {
                        let g = gd[(((ni * cout + oc) * ot + oz) * oh + oy) * ow + ox];
                        db[oc] += g;
                        for ic in 0..cin {
                            for kz in 0..kt {
                                let iz = (oz * stride + kz) as isize - pad as isize;
                                if iz < 0 || iz >= t as isize {
                                    continue;
                                }
                                for ky in 0..kh {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..kw {
                                        let ix = (ox * stride + kx) as isize - pad as isize;
                                        if ix < 0 || ix >= wd as isize {
                                            continue;
                                        }
                                        let xi = (((ni * cin + ic) * t + iz as usize) * h
                                            + iy as usize)
                                            * wd
                                            + ix as usize;
                                        let wi =
                                            (((oc * cin + ic) * kt + kz) * kh + ky) * kw + kx;
                                        dx[xi] += wdat[wi] * g;
                                        dw[wi] += xd[xi] * g;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
    (
        Tensor::new(xs.to_vec(), dx).expect("dx shape"),
        Tensor::new(ws.to_vec(), dw).expect("dw shape"),
        Tensor::new(vec![cout], db).expect("db shape"),
    )
}

/// Interpolation weights for one output axis under the half-pixel
/// (align-corners = false) convention: `src = (i + 0.5) * in/out - 0.5`,
/// clamped to the valid range.
fn bilinear_axis(in_dim: usize, out_dim: usize) -> Vec<(usize, usize, f64)> {
    let scale = in_dim as f64 / out_dim as f64;
    (0..out_dim)
        .map(|i| {
            let src = ((i as f64 + 0.5) * scale - 0.5).clamp(0.0, (in_dim - 1) as f64);
            let lo = src.floor() as usize;
            let hi = (lo + 1).min(in_dim - 1);
            (lo, hi, src - lo as f64)
        })
        .collect()
}

/// Spatial bilinear resize of `[N, C, T, H, W]` to `(out_h, out_w)`;
/// the temporal axis passes through untouched.
pub fn upsample_bilinear<S: Scalar>(
    x: &Tensor<S>,
    out_h: usize,
    out_w: usize,
) -> Result<Tensor<S>> {
    let xs = x.shape();
    if xs.len() != 5 {
        return Err(TensorError::ShapeMismatch(format!("upsample expects rank 5, got {xs:?}")));
    }
    if out_h == 0 || out_w == 0 {
        return Err(TensorError::BadSize("upsample target must be >= 1".into()));
    }
    let (h, w) = (xs[3], xs[4]);
    let rows = bilinear_axis(h, out_h);
    let cols = bilinear_axis(w, out_w);
    let planes = xs[0] * xs[1] * xs[2];
    let xd = x.data();
    let mut out = vec![S::zero(); planes * out_h * out_w];
    for p in 0..planes {
        let ibase = p * h * w;
        let obase = p * out_h * out_w;
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let v00 = xd[ibase + y0 * w + x0];
                let v01 = xd[ibase + y0 * w + x1];
                let v10 = xd[ibase + y1 * w + x0];
                let v11 = xd[ibase + y1 * w + x1];
                let (fy, fx) = (S::from_f64(fy), S::from_f64(fx));
                let top = v00 * (S::one() - fx) + v01 * fx;
                let bot = v10 * (S::one() - fx) + v11 * fx;
                out[obase + oy * out_w + ox] = top * (S::one() - fy) + bot * fy;
            }
        }
    }
    Tensor::new(vec![xs[0], xs[1], xs[2], out_h, out_w], out)
}

/// Adjoint of [`upsample_bilinear`]: scatters output gradients back onto
/// the source grid with the same interpolation weights.
pub fn upsample_bilinear_backward<S: Scalar>(
    grad: &Tensor<S>,
    in_h: usize,
    in_w: usize,
) -> Tensor<S> {
    let gs = grad.shape();
    let (out_h, out_w) = (gs[3], gs[4]);
    let rows = bilinear_axis(in_h, out_h);
    let cols = bilinear_axis(in_w, out_w);
    let planes = gs[0] * gs[1] * gs[2];
    let gd = grad.data();
    let mut dx = vec![S::zero(); planes * in_h * in_w];
    for p in 0..planes {
        let obase = p * out_h * out_w;
        let ibase = p * in_h * in_w;
        for (oy, &(y0, y1, fy)) in rows.iter().enumerate() {
            for (ox, &(x0, x1, fx)) in cols.iter().enumerate() {
                let g = gd[obase + oy * out_w + ox];
                let (fy, fx) = (S::from_f64(fy), S::from_f64(fx));
                dx[ibase + y0 * in_w + x0] += g * (S::one() - fy) * (S::one() - fx);
                dx[ibase + y0 * in_w + x1] += g * (S::one() - fy) * fx;
                dx[ibase + y1 * in_w + x0] += g * fy * (S::one() - fx);
                dx[ibase + y1 * in_w + x1] += g * fy * fx;
            }
        }
    }
    Tensor::new(vec![gs[0], gs[1], gs[2], in_h, in_w], dx).expect("dx shape")
}

/// Normalized 1D Gaussian taps of length `2 * radius + 1`.
pub fn gaussian_kernel1d<S: Scalar>(sigma: f64, radius: usize) -> Result<Vec<S>> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(TensorError::BadSigma(sigma));
    }
    if radius == 0 {
        return Err(TensorError::BadSize("blur radius must be >= 1".into()));
    }
    let taps: Vec<f64> = (-(radius as i64)..=radius as i64)
        .map(|j| (-((j * j) as f64) / (2.0 * sigma * sigma)).exp())
        .collect();
    let total: f64 = taps.iter().sum();
    Ok(taps.into_iter().map(|t| S::from_f64(t / total)).collect())
}

/// Mirror-without-repeat boundary (index -1 maps to 1, n maps to n-2).
fn reflect101(i: isize, n: usize) -> usize {
    if n == 1 {
        return 0;
    }
    let period = 2 * (n as isize - 1);
    let mut i = i.rem_euclid(period);
    if i >= n as isize {
        i = period - i;
    }
    i as usize
}

/// Separable Gaussian blur over the last two axes with reflect padding.
pub fn gaussian_blur2d<S: Scalar>(x: &Tensor<S>, kernel: &[S]) -> Result<Tensor<S>> {
    let xs = x.shape();
    if xs.len() < 2 {
        return Err(TensorError::ShapeMismatch(format!("blur expects rank >= 2, got {xs:?}")));
    }
    let (h, w) = (xs[xs.len() - 2], xs[xs.len() - 1]);
    let planes = numel(&xs[..xs.len() - 2]);
    let radius = (kernel.len() - 1) / 2;
    let xd = x.data();
    let mut mid = vec![S::zero(); xd.len()];
    // horizontal pass
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for ox in 0..w {
                let mut acc = S::zero();
                for (j, &k) in kernel.iter().enumerate() {
                    let ix = reflect101(ox as isize + j as isize - radius as isize, w);
                    acc += k * xd[base + y * w + ix];
                }
                mid[base + y * w + ox] = acc;
            }
        }
    }
    // vertical pass
    let mut out = vec![S::zero(); xd.len()];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..h {
            for x_ in 0..w {
                let mut acc = S::zero();
                for (j, &k) in kernel.iter().enumerate() {
                    let iy = reflect101(oy as isize + j as isize - radius as isize, h);
                    acc += k * mid[base + iy * w + x_];
                }
                out[base + oy * w + x_] = acc;
            }
        }
    }
    Tensor::new(xs.to_vec(), out)
}

/// Exact adjoint of [`gaussian_blur2d`]: scatters through the same
/// reflected taps in reverse pass order.
pub fn gaussian_blur2d_backward<S: Scalar>(grad: &Tensor<S>, kernel: &[S]) -> Tensor<S> {
    let gs = grad.shape();
    let (h, w) = (gs[gs.len() - 2], gs[gs.len() - 1]);
    let planes = numel(&gs[..gs.len() - 2]);
    let radius = (kernel.len() - 1) / 2;
    let gd = grad.data();
    // adjoint of the vertical pass
    let mut mid = vec![S::zero(); gd.len()];
    for p in 0..planes {
        let base = p * h * w;
        for oy in 0..h {
            for x_ in 0..w {
                let g = gd[base + oy * w + x_];
                for (j, &k) in kernel.iter().enumerate() {
                    let iy = reflect101(oy as isize + j as isize - radius as isize, h);
                    mid[base + iy * w + x_] += k * g;
                }
            }
        }
    }
    // adjoint of the horizontal pass
    let mut dx = vec![S::zero(); gd.len()];
    for p in 0..planes {
        let base = p * h * w;
        for y in 0..h {
            for ox in 0..w {
                let g = mid[base + y * w + ox];
                for (j, &k) in kernel.iter().enumerate() {
                    let ix = reflect101(ox as isize + j as isize - radius as isize, w);
                    dx[base + y * w + ix] += k * g;
                }
            }
        }
    }
    Tensor::new(gs.to_vec(), dx).expect("dx shape")
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t<S: Scalar>(shape: &[usize], data: Vec<S>) -> Tensor<S> {
        Tensor::new(shape.to_vec(), data).unwrap()
    }

    #[test]
    fn matmul_hand_contraction() {
        let a = t(&[2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        let b = t(&[2, 2], vec![5.0, 6.0, 7.0, 8.0]);
        let c = matmul(&a, &b).unwrap();
        assert_eq!(c.data(), &[19.0, 22.0, 43.0, 50.0]);
    }

    #[test]
    fn matmul_identity_and_mismatch() {
        let a = t(&[2, 3], vec![1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let eye = t(&[3, 3], vec![1.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(matmul(&a, &eye).unwrap(), a);
        let bad = t(&[2, 2], vec![1.0; 4]);
        assert!(matches!(matmul(&a, &bad), Err(TensorError::ShapeMismatch(_))));
    }

    #[test]
    fn conv2d_unit_kernel_is_identity() {
        let x = t(&[1, 1, 3, 3], (1..=9).map(|v| v as f64).collect());
        let w = t(&[1, 1, 1, 1], vec![1.0]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.data(), x.data());
    }

    #[test]
    fn conv2d_box_kernel_counts_volume() {
        let x = Tensor::<f64>::ones(&[1, 1, 5, 5]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3]);
        let y = conv2d(&x, &w, None, 1, 0).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3]);
        assert!(y.data().iter().all(|&v| v == 9.0));
    }

    // Independent scatter-style oracle: accumulates every input
    // contribution instead of gathering per output cell.
    fn conv2d_scatter_oracle(
        x: &Tensor<f64>,
        w: &Tensor<f64>,
        b: &Tensor<f64>,
        pad: usize,
    ) -> Tensor<f64> {
        let (xs, ws) = (x.shape(), w.shape());
        let (n, cin, h, wd) = (xs[0], xs[1], xs[2], xs[3]);
        let (cout, kh, kw) = (ws[0], ws[2], ws[3]);
        let oh = h + 2 * pad - kh + 1;
        let ow = wd + 2 * pad - kw + 1;
        let mut out = vec![0.0; n * cout * oh * ow];
        for ni in 0..n {
            for ic in 0..cin {
                for iy in 0..h {
                    for ix in 0..wd {
                        let v = x.data()[((ni * cin + ic) * h + iy) * wd + ix];
                        for oc in 0..cout {
                            for ky in 0..kh {
                                for kx in 0..kw {
                                    let oy = iy as isize + pad as isize - ky as isize;
                                    let ox = ix as isize + pad as isize - kx as isize;
                                    if oy < 0 || ox < 0 || oy >= oh as isize || ox >= ow as isize
                                    {
                                        continue;
                                    }
                                    let wi = ((oc * cin + ic) * kh + ky) * kw + kx;
                                    out[((ni * cout + oc) * oh + oy as usize) * ow
                                        + ox as usize] += v * w.data()[wi];
                                }
                            }
                        }
                    }
                }
            }
        }
        for ni in 0..n {
            for oc in 0..cout {
                for i in 0..oh * ow {
                    out[(ni * cout + oc) * oh * ow + i] += b.data()[oc];
                }
            }
        }
        Tensor::new(vec![n, cout, oh, ow], out).unwrap()
    }

    #[test]
    fn conv2d_matches_scatter_oracle() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
        let x = Tensor::from_fn(&[2, 3, 5, 4], |_| rng.gen::<f64>() - 0.5);
        let w = Tensor::from_fn(&[4, 3, 3, 3], |_| rng.gen::<f64>() - 0.5);
        let b = Tensor::from_fn(&[4], |_| rng.gen::<f64>() - 0.5);
        let got = conv2d(&x, &w, Some(&b), 1, 1).unwrap();
        let want = conv2d_scatter_oracle(&x, &w, &b, 1);
        for (g, e) in got.data().iter().zip(want.data()) {
            assert!((g - e).abs() < 1e-12, "{g} vs {e}");
        }
    }

    #[test]
    fn conv3d_allones_counts_overlap() {
        // pad 1 on a 3x3x3 all-ones volume: the padded corner sees a
        // 2x2x2 slab of ones, the center the full 3x3x3.
        let x = Tensor::<f64>::ones(&[1, 1, 3, 3, 3]);
        let w = Tensor::<f64>::ones(&[1, 1, 3, 3, 3]);
        let y = conv3d(&x, &w, None, 1, 1).unwrap();
        assert_eq!(y.shape(), &[1, 1, 3, 3, 3]);
        let d = y.data();
        assert_eq!(d[0], 8.0);
        assert_eq!(d[13], 27.0);
    }

    #[test]
    fn conv3d_kt1_equals_per_bin_conv2d_bitwise() {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
        let x = Tensor::from_fn(&[2, 3, 4, 5, 5], |_| rng.gen::<f64>() - 0.5);
        let w3 = Tensor::from_fn(&[2, 3, 1, 3, 3], |_| rng.gen::<f64>() - 0.5);
        let b = Tensor::from_fn(&[2], |_| rng.gen::<f64>() - 0.5);
        let w2 = w3.reshape(&[2, 3, 3, 3]).unwrap();
        let y3 = conv3d(&x, &w3, Some(&b), 1, 1).unwrap();
        // temporal pad widens T; slice the valid center back out
        let y3 = y3.narrow(2, 1, 4).unwrap();
        for bin in 0..4 {
            let xi = x.narrow(2, bin, 1).unwrap().reshape(&[2, 3, 5, 5]).unwrap();
            let y2 = conv2d(&xi, &w2, Some(&b), 1, 1).unwrap();
            let y3bin = y3.narrow(2, bin, 1).unwrap().reshape(&[2, 2, 5, 5]).unwrap();
            assert_eq!(y2.data(), y3bin.data(), "bin {bin} differs");
        }
    }

    #[test]
    fn upsample_identity_and_constant() {
        let x = t(&[1, 1, 1, 2, 2], vec![1.0, 2.0, 3.0, 4.0]);
        assert_eq!(upsample_bilinear(&x, 2, 2).unwrap(), x);
        let c = Tensor::<f64>::full(&[1, 1, 1, 3, 3], 0.7);
        let up = upsample_bilinear(&c, 7, 5).unwrap();
        assert!(up.data().iter().all(|&v| (v - 0.7).abs() < 1e-15));
    }

    #[test]
    fn upsample_1d_analog_closed_form() {
        // [0, 1] -> 4 samples along H under the half-pixel rule
        let x = t(&[1, 1, 1, 2, 1], vec![0.0, 1.0]);
        let y = upsample_bilinear(&x, 4, 1).unwrap();
        let want = [0.0, 0.25, 0.75, 1.0];
        for (g, e) in y.data().iter().zip(want) {
            assert!((g - e).abs() < 1e-15, "{g} vs {e}");
        }
    }

    #[test]
    fn blur_constant_fixed_point_and_impulse() {
        let kernel = gaussian_kernel1d::<f64>(2.0, 4).unwrap();
        let c = Tensor::<f64>::full(&[1, 9, 9], 0.37);
        let blurred = gaussian_blur2d(&c, &kernel).unwrap();
        for &v in blurred.data() {
            assert!((v - 0.37).abs() < 1e-12);
        }
        // interior impulse spreads to the separable outer product
        let mut imp = Tensor::<f64>::zeros(&[1, 11, 11]);
        imp.data_mut()[5 * 11 + 5] = 1.0;
        let sp = gaussian_blur2d(&imp, &kernel).unwrap();
        let total: f64 = sp.data().iter().sum();
        assert!((total - 1.0).abs() < 1e-9);
        for dy in -4i64..=4 {
            for dx in -4i64..=4 {
                let got = sp.data()[((5 + dy) * 11 + 5 + dx) as usize];
                let want = kernel[(dy + 4) as usize] * kernel[(dx + 4) as usize];
                assert!((got - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn blur_rejects_bad_sigma() {
        assert!(matches!(gaussian_kernel1d::<f64>(0.0, 3), Err(TensorError::BadSigma(_))));
        assert!(matches!(gaussian_kernel1d::<f64>(-1.0, 3), Err(TensorError::BadSigma(_))));
    }

    #[test]
    fn kernel_too_large_detected() {
        let x = Tensor::<f64>::ones(&[1, 1, 2, 2]);
        let w = Tensor::<f64>::ones(&[1, 1, 5, 5]);
        assert!(matches!(conv2d(&x, &w, None, 1, 0), Err(TensorError::KernelTooLarge(_))));
    }
}
