//! Forward and backward kernels for the differentiable primitives.
//!
//! Feature maps are NHWC. Every kernel accepts a single `[H, W, C]` map or a
//! batch `[B, H, W, C]` and returns a tensor of the same rank.

use crate::error::{Error, Result};
use crate::tensor::{gemm, Layout, Real, Tensor};

/// Upper bound on the number of scalars in one im2col buffer.
const IM2COL_BUDGET: usize = 1 << 21;

fn out_shape(x: &Tensor<impl Real>, b: usize, h: usize, w: usize, c: usize) -> Vec<usize> {
    if x.rank() == 3 {
        vec![h, w, c]
    } else {
        vec![b, h, w, c]
    }
}

/// `out[.., i] = sum_j w[i, j] * x[.., j] + b[i]` with `w` of shape `(d_out, d_in)`.
pub fn linear_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (rows, d_in, d_out) = linear_dims(x, w, b)?;
    let mut out = vec![T::zero(); rows * d_out];
    for row in out.chunks_exact_mut(d_out) {
        row.copy_from_slice(b.data());
    }
    gemm(
        rows,
        d_in,
        d_out,
        T::one(),
        x.data(),
        Layout::Normal,
        w.data(),
        Layout::Transposed,
        T::one(),
        &mut out,
    );
    let shape = if x.rank() == 1 {
        vec![d_out]
    } else {
        vec![rows, d_out]
    };
    Tensor::new(shape, out)
}

fn linear_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize)> {
    let (d_out, d_in) = match *w.shape() {
        [o, i] => (o, i),
        _ => return Err(Error::dim("weight", format!("expected (d_out, d_in), got {:?}", w.shape()))),
    };
    b.expect_shape(&[d_out], "bias")?;
    let rows = match *x.shape() {
        [d] if d == d_in => 1,
        [n, d] if d == d_in => n,
        _ => {
            return Err(Error::dim(
                "input",
                format!("expected trailing extent {d_in}, got {:?}", x.shape()),
            ))
        }
    };
    Ok((rows, d_in, d_out))
}

/// Gradients of [`linear_forward`] given the upstream gradient.
pub struct LinearGrads<T: Real> {
    pub x: Option<Tensor<T>>,
    pub w: Option<Tensor<T>>,
    pub b: Option<Tensor<T>>,
}

pub fn linear_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    gout: &Tensor<T>,
    need_x: bool,
    need_params: bool,
) -> Result<LinearGrads<T>> {
    let (rows, d_in, d_out) = linear_dims(x, w, b)?;
    if gout.len() != rows * d_out {
        return Err(Error::dim("upstream gradient", format!("{:?}", gout.shape())));
    }
    let gx = need_x.then(|| {
        let mut gx = vec![T::zero(); rows * d_in];
        gemm(rows, d_out, d_in, T::one(), gout.data(), Layout::Normal, w.data(), Layout::Normal, T::zero(), &mut gx);
        Tensor::new(x.shape().to_vec(), gx).expect("shape")
    });
    let (gw, gb) = if need_params {
        let mut gw = vec![T::zero(); d_out * d_in];
        gemm(d_out, rows, d_in, T::one(), gout.data(), Layout::Transposed, x.data(), Layout::Normal, T::zero(), &mut gw);
        let mut gb = vec![T::zero(); d_out];
        for row in gout.data().chunks_exact(d_out) {
            for (acc, &g) in gb.iter_mut().zip(row) {
                *acc += g;
            }
        }
        (
            Some(Tensor::new(vec![d_out, d_in], gw)?),
            Some(Tensor::new(vec![d_out], gb)?),
        )
    } else {
        (None, None)
    };
    Ok(LinearGrads { x: gx, w: gw, b: gb })
}

fn conv_dims<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<(usize, usize, usize, usize, usize)> {
    let (n, h, wd, ci) = x.nhwc("input")?;
    let co = match *w.shape() {
        [3, 3, i, o] if i == ci => o,
        [3, 3, i, _] => {
            return Err(Error::dim(
                "weight",
                format!("kernel expects {i} input channels, input has {ci}"),
            ))
        }
        _ => return Err(Error::dim("weight", format!("expected (3,3,C_in,C_out), got {:?}", w.shape()))),
    };
    b.expect_shape(&[co], "bias")?;
    Ok((n, h, wd, ci, co))
}

/// Fills `cols` (`imgs * h * w` rows of `9 * c` values) with zero-padded 3x3 patches.
fn im2col<T: Real>(x: &[T], imgs: usize, h: usize, w: usize, c: usize, cols: &mut [T]) {
    let k = 9 * c;
    for img in 0..imgs {
        let src = &x[img * h * w * c..(img + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let row = &mut cols[((img * h + y) * w + xx) * k..][..k];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        let dst = &mut row[(ky * 3 + kx) * c..][..c];
                        if sy < 0 || sy >= h as isize || sx < 0 || sx >= w as isize {
                            dst.fill(T::zero());
                        } else {
                            let off = (sy as usize * w + sx as usize) * c;
                            dst.copy_from_slice(&src[off..off + c]);
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-adds patch gradients back onto the input map.
fn col2im<T: Real>(cols: &[T], imgs: usize, h: usize, w: usize, c: usize, gx: &mut [T]) {
    let k = 9 * c;
    for img in 0..imgs {
        let dst = &mut gx[img * h * w * c..(img + 1) * h * w * c];
        for y in 0..h {
            for xx in 0..w {
                let row = &cols[((img * h + y) * w + xx) * k..][..k];
                for ky in 0..3 {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    for kx in 0..3 {
                        let sx = xx as isize + kx as isize - 1;
                        if sx < 0 || sx >= w as isize {
                            continue;
                        }
                        let off = (sy as usize * w + sx as usize) * c;
                        let src = &row[(ky * 3 + kx) * c..][..c];
                        for (d, &s) in dst[off..off + c].iter_mut().zip(src) {
                            *d += s;
                        }
                    }
                }
            }
        }
    }
}

fn images_per_chunk(h: usize, w: usize, c: usize) -> usize {
    (IM2COL_BUDGET / (h * w * 9 * c).max(1)).max(1)
}

/// 3x3 cross-correlation, stride 1, zero padding 1.
pub fn conv3x3_forward<T: Real>(x: &Tensor<T>, w: &Tensor<T>, b: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, wd, ci, co) = conv_dims(x, w, b)?;
    let k = 9 * ci;
    let px = h * wd;
    let mut out = vec![T::zero(); n * px * co];
    for row in out.chunks_exact_mut(co) {
        row.copy_from_slice(b.data());
    }
    let chunk = images_per_chunk(h, wd, ci).min(n);
    let mut cols = vec![T::zero(); chunk * px * k];
    let mut start = 0;
    while start < n {
        let imgs = chunk.min(n - start);
        let rows = imgs * px;
        im2col(&x.data()[start * px * ci..], imgs, h, wd, ci, &mut cols[..rows * k]);
        gemm(
            rows,
            k,
            co,
            T::one(),
            &cols[..rows * k],
            Layout::Normal,
            w.data(),
            Layout::Normal,
            T::one(),
            &mut out[start * px * co..(start + imgs) * px * co],
        );
        start += imgs;
    }
    Tensor::new(out_shape(x, n, h, wd, co), out)
}

pub struct ConvGrads<T: Real> {
    pub x: Option<Tensor<T>>,
    pub w: Option<Tensor<T>>,
    pub b: Option<Tensor<T>>,
}

pub fn conv3x3_backward<T: Real>(
    x: &Tensor<T>,
    w: &Tensor<T>,
    b: &Tensor<T>,
    gout: &Tensor<T>,
    need_x: bool,
    need_params: bool,
) -> Result<ConvGrads<T>> {
    let (n, h, wd, ci, co) = conv_dims(x, w, b)?;
    if gout.len() != n * h * wd * co {
        return Err(Error::dim("upstream gradient", format!("{:?}", gout.shape())));
    }
    let k = 9 * ci;
    let px = h * wd;
    let mut gx = need_x.then(|| vec![T::zero(); x.len()]);
    let mut gw = need_params.then(|| vec![T::zero(); k * co]);
    let chunk = images_per_chunk(h, wd, ci).min(n);
    let mut cols = vec![T::zero(); chunk * px * k];
    let mut start = 0;
    while start < n {
        let imgs = chunk.min(n - start);
        let rows = imgs * px;
        let g = &gout.data()[start * px * co..(start + imgs) * px * co];
        if let Some(gw) = gw.as_mut() {
            im2col(&x.data()[start * px * ci..], imgs, h, wd, ci, &mut cols[..rows * k]);
            gemm(k, rows, co, T::one(), &cols[..rows * k], Layout::Transposed, g, Layout::Normal, T::one(), gw);
        }
        if let Some(gx) = gx.as_mut() {
            gemm(rows, co, k, T::one(), g, Layout::Normal, w.data(), Layout::Transposed, T::zero(), &mut cols[..rows * k]);
            col2im(&cols[..rows * k], imgs, h, wd, ci, &mut gx[start * px * ci..]);
        }
        start += imgs;
    }
    let gb = need_params.then(|| {
        let mut gb = vec![T::zero(); co];
        for row in gout.data().chunks_exact(co) {
            for (acc, &v) in gb.iter_mut().zip(row) {
                *acc += v;
            }
        }
        Tensor::new(vec![co], gb).expect("bias shape")
    });
    Ok(ConvGrads {
        x: gx.map(|d| Tensor::new(x.shape().to_vec(), d).expect("input shape")),
        w: gw.map(|d| Tensor::new(w.shape().to_vec(), d).expect("weight shape")),
        b: gb,
    })
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = x.nhwc("input")?;
    let (oh, ow) = (2 * h, 2 * w);
    let mut out = vec![T::zero(); n * oh * ow * c];
    let src = x.data();
    for img in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let s = ((img * h + y / 2) * w + xx / 2) * c;
                let d = ((img * oh + y) * ow + xx) * c;
                out[d..d + c].copy_from_slice(&src[s..s + c]);
            }
        }
    }
    Tensor::new(out_shape(x, n, oh, ow, c), out)
}

pub fn upsample_backward<T: Real>(x_shape: &[usize], gout: &Tensor<T>) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(x_shape);
    let (n, h, w, c) = probe.nhwc("input")?;
    let (oh, ow) = (2 * h, 2 * w);
    if gout.len() != n * oh * ow * c {
        return Err(Error::dim("upstream gradient", format!("{:?}", gout.shape())));
    }
    let mut gx = vec![T::zero(); n * h * w * c];
    let g = gout.data();
    for img in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let d = ((img * h + y / 2) * w + xx / 2) * c;
                let s = ((img * oh + y) * ow + xx) * c;
                for (a, &v) in gx[d..d + c].iter_mut().zip(&g[s..s + c]) {
                    *a += v;
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

/// 2x2 average pooling with stride 2.
pub fn downsample_forward<T: Real>(x: &Tensor<T>) -> Result<Tensor<T>> {
    let (n, h, w, c) = x.nhwc("input")?;
    if h % 2 != 0 || w % 2 != 0 {
        return Err(Error::dim("input", format!("average pooling needs even extents, got {h}x{w}")));
    }
    let (oh, ow) = (h / 2, w / 2);
    let quarter = T::lit(0.25);
    let src = x.data();
    let mut out = vec![T::zero(); n * oh * ow * c];
    for img in 0..n {
        for y in 0..oh {
            for xx in 0..ow {
                let d = ((img * oh + y) * ow + xx) * c;
                for (dy, dx) in [(0, 0), (0, 1), (1, 0), (1, 1)] {
                    let s = ((img * h + 2 * y + dy) * w + 2 * xx + dx) * c;
                    for (a, &v) in out[d..d + c].iter_mut().zip(&src[s..s + c]) {
                        *a += v;
                    }
                }
                for a in &mut out[d..d + c] {
                    *a *= quarter;
                }
            }
        }
    }
    Tensor::new(out_shape(x, n, oh, ow, c), out)
}

pub fn downsample_backward<T: Real>(x_shape: &[usize], gout: &Tensor<T>) -> Result<Tensor<T>> {
    let probe = Tensor::<T>::zeros(x_shape);
    let (n, h, w, c) = probe.nhwc("input")?;
    let (oh, ow) = (h / 2, w / 2);
    if gout.len() != n * oh * ow * c {
        return Err(Error::dim("upstream gradient", format!("{:?}", gout.shape())));
    }
    let quarter = T::lit(0.25);
    let g = gout.data();
    let mut gx = vec![T::zero(); n * h * w * c];
    for img in 0..n {
        for y in 0..h {
            for xx in 0..w {
                let s = ((img * oh + y / 2) * ow + xx / 2) * c;
                let d = ((img * h + y) * w + xx) * c;
                for (a, &v) in gx[d..d + c].iter_mut().zip(&g[s..s + c]) {
                    *a = v * quarter;
                }
            }
        }
    }
    Tensor::new(x_shape.to_vec(), gx)
}

pub fn relu<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

pub fn leaky_relu<T: Real>(x: &Tensor<T>, slope: T) -> Tensor<T> {
    x.map(|v| if v >= T::zero() { v } else { v * slope })
}

pub fn tanh<T: Real>(x: &Tensor<T>) -> Tensor<T> {
    x.map(|v| v.tanh())
}

pub fn relu_backward<T: Real>(x: &Tensor<T>, gout: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(gout, |v, g| if v > T::zero() { g } else { T::zero() })
}

pub fn leaky_relu_backward<T: Real>(x: &Tensor<T>, slope: T, gout: &Tensor<T>) -> Result<Tensor<T>> {
    x.zip_map(gout, |v, g| if v >= T::zero() { g } else { g * slope })
}

/// Uses the forward output `y = tanh(x)`.
pub fn tanh_backward<T: Real>(y: &Tensor<T>, gout: &Tensor<T>) -> Result<Tensor<T>> {
    y.zip_map(gout, |v, g| g * (T::one() - v * v))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn t(shape: &[usize], data: &[f64]) -> Tensor<f64> {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn linear_hand_example() {
        let out = linear_forward(&t(&[2], &[1.0, 0.0]), &t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]), &t(&[2], &[0.0, 0.0])).unwrap();
        assert_eq!(out.data(), &[2.0, 4.0]);
        let zero = linear_forward(&t(&[2], &[0.0, 0.0]), &t(&[2, 2], &[2.0, 3.0, 4.0, 5.0]), &t(&[2], &[7.0, -1.0])).unwrap();
        assert_eq!(zero.data(), &[7.0, -1.0]);
        let id = linear_forward(&t(&[1], &[1.0]), &t(&[1, 1], &[1.0]), &t(&[1], &[0.0])).unwrap();
        assert_eq!(id.data(), &[1.0]);
    }

    #[test]
    fn linear_shape_errors_name_operand() {
        let err = linear_forward(&t(&[3], &[1.0; 3]), &t(&[2, 2], &[0.0; 4]), &t(&[2], &[0.0; 2])).unwrap_err();
        assert!(err.to_string().contains("input"), "{err}");
        let err = linear_forward(&t(&[2], &[1.0; 2]), &t(&[2, 2], &[0.0; 4]), &t(&[3], &[0.0; 3])).unwrap_err();
        assert!(err.to_string().contains("bias"), "{err}");
    }

    /// Direct sliding-window oracle.
    fn conv_direct(x: &Tensor<f64>, w: &Tensor<f64>, b: &Tensor<f64>) -> Tensor<f64> {
        let (_, h, wd, ci) = x.nhwc("x").unwrap();
        let co = w.shape()[3];
        Tensor::from_fn(&[h, wd, co], |idx| {
            let o = idx % co;
            let xx = (idx / co) % wd;
            let y = idx / co / wd;
            let mut acc = b.data()[o];
            for ky in 0..3 {
                for kx in 0..3 {
                    let (sy, sx) = (y as isize + ky as isize - 1, xx as isize + kx as isize - 1);
                    if sy < 0 || sx < 0 || sy >= h as isize || sx >= wd as isize {
                        continue;
                    }
                    for i in 0..ci {
                        acc += x.data()[(sy as usize * wd + sx as usize) * ci + i]
                            * w.data()[((ky * 3 + kx) * ci + i) * co + o];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_impulse_reproduces_kernel() {
        let mut x = Tensor::<f64>::zeros(&[5, 5, 1]);
        x.data_mut()[2 * 5 + 2] = 1.0;
        let w = Tensor::from_fn(&[3, 3, 1, 1], |i| (i + 1) as f64);
        let out = conv3x3_forward(&x, &w, &t(&[1], &[0.0])).unwrap();
        // cross-correlation: out[2+dy, 2+dx] = w[1-dy, 1-dx]
        for dy in -1i32..=1 {
            for dx in -1i32..=1 {
                let o = out.data()[((2 + dy) * 5 + 2 + dx) as usize];
                let k = w.data()[((1 - dy) * 3 + (1 - dx)) as usize];
                assert_eq!(o, k);
            }
        }
        assert_eq!(out, conv_direct(&x, &w, &t(&[1], &[0.0])));
    }

    #[test]
    fn conv_constant_cases() {
        let x = Tensor::<f64>::full(&[4, 4, 1], 1.0);
        let ones = Tensor::full(&[3, 3, 1, 1], 1.0);
        let out = conv3x3_forward(&x, &ones, &t(&[1], &[0.0])).unwrap();
        assert_eq!(out.data()[5], 9.0);
        assert_eq!(out.data()[0], 4.0);
        let zeros = Tensor::zeros(&[3, 3, 1, 2]);
        let out = conv3x3_forward(&x, &zeros, &t(&[2], &[1.5, -2.0])).unwrap();
        assert!(out.data().chunks(2).all(|p| p == [1.5, -2.0]));
    }

    #[test]
    fn conv_matches_direct_oracle_batched() {
        let x = Tensor::from_fn(&[3, 6, 5, 4], |i| ((i * 37 % 17) as f64 - 8.0) / 5.0);
        let w = Tensor::from_fn(&[3, 3, 4, 3], |i| ((i * 13 % 11) as f64 - 5.0) / 7.0);
        let b = t(&[3], &[0.1, -0.2, 0.3]);
        let out = conv3x3_forward(&x, &w, &b).unwrap();
        for (i, img) in x.unstack().iter().enumerate() {
            let want = conv_direct(img, &w, &b);
            for (a, e) in out.batch_item(i).data().iter().zip(want.data()) {
                assert!((a - e).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn conv_channel_mismatch() {
        let x = Tensor::<f64>::zeros(&[4, 4, 2]);
        let w = Tensor::zeros(&[3, 3, 3, 1]);
        assert!(matches!(conv3x3_forward(&x, &w, &t(&[1], &[0.0])), Err(Error::Dimension { .. })));
    }

    #[test]
    fn conv_translation_covariance() {
        let x = Tensor::from_fn(&[8, 8, 2], |i| ((i * 29 % 23) as f64) / 23.0);
        let mut shifted = Tensor::zeros(&[8, 8, 2]);
        for y in 0..7 {
            for xx in 0..7 {
                for c in 0..2 {
                    shifted.data_mut()[((y + 1) * 8 + xx + 1) * 2 + c] = x.data()[(y * 8 + xx) * 2 + c];
                }
            }
        }
        let w = Tensor::from_fn(&[3, 3, 2, 1], |i| (i as f64 - 8.0) / 9.0);
        let b = t(&[1], &[0.25]);
        let a = conv3x3_forward(&x, &w, &b).unwrap();
        let s = conv3x3_forward(&shifted, &w, &b).unwrap();
        // interior positions whose windows stay away from both borders
        for y in 1..6 {
            for xx in 1..6 {
                assert!((a.data()[y * 8 + xx] - s.data()[(y + 1) * 8 + xx + 1]).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn up_down_pair() {
        let x = t(&[2, 2, 1], &[1.0, 2.0, 3.0, 4.0]);
        let up = upsample_forward(&x).unwrap();
        assert_eq!(up.shape(), &[4, 4, 1]);
        assert_eq!(
            up.data(),
            &[1.0, 1.0, 2.0, 2.0, 1.0, 1.0, 2.0, 2.0, 3.0, 3.0, 4.0, 4.0, 3.0, 3.0, 4.0, 4.0]
        );
        assert_eq!(up.sum(), 4.0 * x.sum());
        assert_eq!(downsample_forward(&up).unwrap(), x);
        assert_eq!(downsample_forward(&x).unwrap().data(), &[2.5]);
        let c = Tensor::<f64>::full(&[4, 6, 2], 0.7);
        assert_eq!(downsample_forward(&c).unwrap(), Tensor::full(&[2, 3, 2], 0.7));
        assert_eq!(upsample_forward(&c).unwrap(), Tensor::full(&[8, 12, 2], 0.7));
    }

    #[test]
    fn downsample_odd_extent_rejected() {
        assert!(downsample_forward(&Tensor::<f64>::zeros(&[3, 4, 1])).is_err());
    }

    #[test]
    fn activation_values() {
        let x = t(&[3], &[-1.0, 0.0, 2.0]);
        assert_eq!(relu(&x).data(), &[0.0, 0.0, 2.0]);
        assert_eq!(leaky_relu(&x, 0.2).data(), &[-0.2, 0.0, 2.0]);
        assert_eq!(tanh(&t(&[1], &[0.0])).data(), &[0.0]);
        assert!(tanh(&t(&[2], &[50.0, -50.0])).data().iter().all(|v| v.abs() <= 1.0));
    }
}
