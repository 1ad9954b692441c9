//! Tensor kernels the network needs beyond what candle ships.
//!
//! Activations are kept channels-last (`[N, H, W, C]`) so a convolution is a
//! patch extraction followed by a single matrix product. The patch
//! extraction and its adjoint are custom ops so both directions of the
//! convolution run through gemm.

use candle_core::{CpuStorage, CustomOp1, Layout, Shape, Tensor, D};

use crate::error::{Error, Result};

/// Geometry of a square-kernel patch extraction over a channels-last tensor.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PatchGeometry {
    pub batch: usize,
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub padding: usize,
}

impl PatchGeometry {
    pub fn out_height(&self) -> usize {
        (self.height + 2 * self.padding - self.kernel) / self.stride + 1
    }

    pub fn out_width(&self) -> usize {
        (self.width + 2 * self.padding - self.kernel) / self.stride + 1
    }

    fn row_len(&self) -> usize {
        self.kernel * self.kernel * self.channels
    }

    fn patches_shape(&self) -> Shape {
        Shape::from((
            self.batch * self.out_height() * self.out_width(),
            self.row_len(),
        ))
    }

    fn image_shape(&self) -> Shape {
        Shape::from((self.batch, self.height, self.width, self.channels))
    }

    /// Calls `f(patch_offset, image_offset)` for every in-bounds kernel tap;
    /// both offsets address a run of `channels` contiguous values.
    fn for_each_tap(&self, mut f: impl FnMut(usize, usize)) {
        let (ho, wo) = (self.out_height(), self.out_width());
        let row = self.row_len();
        for n in 0..self.batch {
            for oy in 0..ho {
                for ox in 0..wo {
                    let base = ((n * ho + oy) * wo + ox) * row;
                    for ky in 0..self.kernel {
                        let iy = (oy * self.stride + ky) as isize - self.padding as isize;
                        if iy < 0 || iy >= self.height as isize {
                            continue;
                        }
                        for kx in 0..self.kernel {
                            let ix = (ox * self.stride + kx) as isize - self.padding as isize;
                            if ix < 0 || ix >= self.width as isize {
                                continue;
                            }
                            let img = ((n * self.height + iy as usize) * self.width + ix as usize)
                                * self.channels;
                            f(base + (ky * self.kernel + kx) * self.channels, img);
                        }
                    }
                }
            }
        }
    }

    fn extract<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        let c = self.channels;
        let mut out = vec![T::default(); self.patches_shape().elem_count()];
        self.for_each_tap(|p, i| out[p..p + c].copy_from_slice(&src[i..i + c]));
        out
    }

    fn scatter_add<T: Copy + Default + std::ops::AddAssign>(&self, patches: &[T]) -> Vec<T> {
        let c = self.channels;
        let mut out = vec![T::default(); self.image_shape().elem_count()];
        self.for_each_tap(|p, i| {
            for (dst, src) in out[i..i + c].iter_mut().zip(&patches[p..p + c]) {
                *dst += *src;
            }
        });
        out
    }
}

fn contiguous_slice<'a, T>(data: &'a [T], layout: &Layout, op: &str) -> candle_core::Result<&'a [T]> {
    match layout.contiguous_offsets() {
        Some((start, end)) => Ok(&data[start..end]),
        None => candle_core::bail!("{op} requires a contiguous input"),
    }
}

/// Patch extraction (im2col): `[N, H, W, C]` to `[N·Ho·Wo, k·k·C]`.
struct Im2Col(PatchGeometry);

/// Adjoint of [`Im2Col`]: overlapping patches are summed back into the image.
struct Col2Im(PatchGeometry);

impl CustomOp1 for Im2Col {
    fn name(&self) -> &'static str {
        "im2col-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        if layout.shape() != &g.image_shape() {
            candle_core::bail!("im2col: input {:?} does not match {:?}", layout.shape(), g);
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.extract(contiguous_slice(v, layout, "im2col")?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.extract(contiguous_slice(v, layout, "im2col")?)),
            _ => candle_core::bail!("im2col: unsupported dtype"),
        };
        Ok((out, g.patches_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Col2Im(self.0))?))
    }
}

impl CustomOp1 for Col2Im {
    fn name(&self) -> &'static str {
        "col2im-nhwc"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        if layout.shape() != &g.patches_shape() {
            candle_core::bail!("col2im: input {:?} does not match {:?}", layout.shape(), g);
        }
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(g.scatter_add(contiguous_slice(v, layout, "col2im")?)),
            CpuStorage::F64(v) => CpuStorage::F64(g.scatter_add(contiguous_slice(v, layout, "col2im")?)),
            _ => candle_core::bail!("col2im: unsupported dtype"),
        };
        Ok((out, g.image_shape()))
    }

    fn bwd(&self, _arg: &Tensor, _res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        Ok(Some(grad_res.contiguous()?.apply_op1_no_bwd(&Im2Col(self.0))?))
    }
}

/// Extracts `kernel × kernel` patches from a channels-last tensor.
pub fn im2col(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, height, width, channels) = x.dims4()?;
    if height + 2 * padding < kernel || width + 2 * padding < kernel {
        return Err(Error::Shape(format!(
            "kernel {kernel} larger than padded input {height}x{width}"
        )));
    }
    let geometry = PatchGeometry {
        batch,
        height,
        width,
        channels,
        kernel,
        stride,
        padding,
    };
    Ok(x.contiguous()?.apply_op1(Im2Col(geometry))?)
}

/// 2-D convolution without bias over a channels-last input.
///
/// `weight` uses the conventional `[C_out, C_in, k, k]` layout so archives
/// exported from other frameworks load unchanged.
pub fn conv2d_nhwc(x: &Tensor, weight: &Tensor, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, height, width, c_in) = x.dims4()?;
    let (c_out, w_in, kh, kw) = weight.dims4()?;
    if w_in != c_in || kh != kw {
        return Err(Error::Shape(format!(
            "conv weight {:?} incompatible with input channels {c_in}",
            weight.dims()
        )));
    }
    let kernel = kh;
    if kernel == 1 && stride == 1 && padding == 0 {
        let w = weight.reshape((c_out, c_in))?.t()?;
        let y = x.reshape((batch * height * width, c_in))?.matmul(&w)?;
        return Ok(y.reshape((batch, height, width, c_out))?);
    }
    let patches = im2col(x, kernel, stride, padding)?;
    let ho = (height + 2 * padding - kernel) / stride + 1;
    let wo = (width + 2 * padding - kernel) / stride + 1;
    let w = weight
        .permute((2, 3, 1, 0))?
        .reshape((kernel * kernel * c_in, c_out))?;
    Ok(patches.matmul(&w)?.reshape((batch, ho, wo, c_out))?)
}

/// Max pooling over a channels-last tensor.
///
/// Out-of-bounds taps read as zero, so the input must be nonnegative (it
/// always follows a rectifier in this network).
pub fn max_pool_nhwc(x: &Tensor, kernel: usize, stride: usize, padding: usize) -> Result<Tensor> {
    let (batch, height, width, channels) = x.dims4()?;
    let patches = im2col(x, kernel, stride, padding)?;
    let ho = (height + 2 * padding - kernel) / stride + 1;
    let wo = (width + 2 * padding - kernel) / stride + 1;
    let pooled = patches
        .reshape((batch * ho * wo, kernel * kernel, channels))?
        .max(1)?;
    Ok(pooled.reshape((batch, ho, wo, channels))?)
}

/// Global max pooling of a channels-last map to `[N, C]`.
pub fn global_max_pool(x: &Tensor) -> Result<Tensor> {
    let (batch, height, width, channels) = x.dims4()?;
    Ok(x
        .contiguous()?
        .reshape((batch, height * width, channels))?
        .max(1)?)
}

/// Square root whose gradient is defined as zero where the input is zero.
struct SafeSqrt;

impl CustomOp1 for SafeSqrt {
    fn name(&self) -> &'static str {
        "safe-sqrt"
    }

    fn cpu_fwd(&self, storage: &CpuStorage, layout: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let out = match storage {
            CpuStorage::F32(v) => CpuStorage::F32(
                contiguous_slice(v, layout, "safe-sqrt")?
                    .iter()
                    .map(|x| x.max(0.0).sqrt())
                    .collect(),
            ),
            CpuStorage::F64(v) => CpuStorage::F64(
                contiguous_slice(v, layout, "safe-sqrt")?
                    .iter()
                    .map(|x| x.max(0.0).sqrt())
                    .collect(),
            ),
            _ => candle_core::bail!("safe-sqrt: unsupported dtype"),
        };
        Ok((out, layout.shape().clone()))
    }

    fn bwd(&self, _arg: &Tensor, res: &Tensor, grad_res: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let zeros = res.zeros_like()?;
        let positive = res.gt(&zeros)?;
        // Where the result is zero the denominator is replaced by one before
        // masking so no inf/NaN is ever formed.
        let denom = positive.where_cond(&(res * 2.0)?, &res.ones_like()?)?;
        let grad = positive.where_cond(&(grad_res / denom)?, &zeros)?;
        Ok(Some(grad))
    }
}

/// Element-wise `sqrt(max(x, 0))` with a zero subgradient at zero.
pub fn safe_sqrt(x: &Tensor) -> Result<Tensor> {
    Ok(x.contiguous()?.apply_op1(SafeSqrt)?)
}

/// L2 norm over the channel axis of a channels-last map: `[N, H, W, C]` to
/// `[N, H, W]`.
pub fn channel_norm(x: &Tensor) -> Result<Tensor> {
    Ok(x.sqr()?.sum(D::Minus1)?.sqrt()?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use candle_core::{Device, Var};

    fn naive_conv(
        x: &[f64],
        (n, h, w, c): (usize, usize, usize, usize),
        wt: &[f64],
        (co, k): (usize, usize),
        stride: usize,
        pad: usize,
    ) -> Vec<f64> {
        let ho = (h + 2 * pad - k) / stride + 1;
        let wo = (w + 2 * pad - k) / stride + 1;
        let mut out = vec![0.0; n * ho * wo * co];
        for b in 0..n {
            for oy in 0..ho {
                for ox in 0..wo {
                    for o in 0..co {
                        let mut acc = 0.0;
                        for i in 0..c {
                            for ky in 0..k {
                                for kx in 0..k {
                                    let iy = (oy * stride + ky) as isize - pad as isize;
                                    let ix = (ox * stride + kx) as isize - pad as isize;
                                    if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                        continue;
                                    }
                                    let xv = x[((b * h + iy as usize) * w + ix as usize) * c + i];
                                    let wv = wt[((o * c + i) * k + ky) * k + kx];
                                    acc += xv * wv;
                                }
                            }
                        }
                        out[((b * ho + oy) * wo + ox) * co + o] = acc;
                    }
                }
            }
        }
        out
    }

    fn ramp(len: usize, scale: f64) -> Vec<f64> {
        (0..len).map(|i| ((i * 7919 % 97) as f64 / 97.0 - 0.5) * scale).collect()
    }

    #[test]
    fn conv_matches_direct_loops() {
        let dev = Device::Cpu;
        for &(k, stride, pad) in &[(3, 1, 1), (3, 2, 1), (7, 2, 3), (1, 2, 0), (1, 1, 0)] {
            let dims = (2, 9, 6, 3);
            let x = ramp(2 * 9 * 6 * 3, 2.0);
            let w = ramp(4 * 3 * k * k, 1.0);
            let xt = Tensor::from_vec(x.clone(), dims, &dev).unwrap();
            let wt = Tensor::from_vec(w.clone(), (4, 3, k, k), &dev).unwrap();
            let got = conv2d_nhwc(&xt, &wt, stride, pad)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f64>()
                .unwrap();
            let want = naive_conv(&x, dims, &w, (4, k), stride, pad);
            assert_eq!(got.len(), want.len());
            for (a, b) in got.iter().zip(&want) {
                assert!((a - b).abs() < 1e-12, "k={k} s={stride}: {a} vs {b}");
            }
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        // <im2col(x), y> == <x, col2im(y)>
        let dev = Device::Cpu;
        let x = Tensor::from_vec(ramp(1 * 5 * 4 * 2, 1.0), (1, 5, 4, 2), &dev).unwrap();
        let cols = im2col(&x, 3, 2, 1).unwrap();
        let y = Tensor::from_vec(ramp(cols.elem_count(), 3.0), cols.shape(), &dev).unwrap();
        let lhs = (&cols * &y).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        let g = PatchGeometry {
            batch: 1,
            height: 5,
            width: 4,
            channels: 2,
            kernel: 3,
            stride: 2,
            padding: 1,
        };
        let back = y.apply_op1_no_bwd(&Col2Im(g)).unwrap();
        let rhs = (&x * &back).unwrap().sum_all().unwrap().to_scalar::<f64>().unwrap();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn conv_gradient_matches_finite_differences() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::from_vec(ramp(2 * 5 * 4 * 2, 1.0), (2, 5, 4, 2), &dev).unwrap()).unwrap();
        let w = Var::from_tensor(&Tensor::from_vec(ramp(3 * 2 * 9, 1.0), (3, 2, 3, 3), &dev).unwrap()).unwrap();
        let loss = |x: &Tensor, w: &Tensor| {
            conv2d_nhwc(x, w, 2, 1).unwrap().sqr().unwrap().sum_all().unwrap()
        };
        let grads = loss(x.as_tensor(), w.as_tensor()).backward().unwrap();
        let gx = grads.get(x.as_tensor()).unwrap().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let xv = x.as_tensor().flatten_all().unwrap().to_vec1::<f64>().unwrap();
        let eps = 1e-6;
        for i in [0, 5, 17, 39] {
            let mut plus = xv.clone();
            plus[i] += eps;
            let mut minus = xv.clone();
            minus[i] -= eps;
            let fp = loss(&Tensor::from_vec(plus, (2, 5, 4, 2), &dev).unwrap(), w.as_tensor())
                .to_scalar::<f64>()
                .unwrap();
            let fm = loss(&Tensor::from_vec(minus, (2, 5, 4, 2), &dev).unwrap(), w.as_tensor())
                .to_scalar::<f64>()
                .unwrap();
            let numeric = (fp - fm) / (2.0 * eps);
            assert!((numeric - gx[i]).abs() < 1e-5 * (1.0 + numeric.abs()), "{numeric} vs {}", gx[i]);
        }
    }

    #[test]
    fn max_pool_halves_and_takes_window_max() {
        let dev = Device::Cpu;
        let x = Tensor::arange(0f32, 16.0, &dev).unwrap().reshape((1, 4, 4, 1)).unwrap();
        let y = max_pool_nhwc(&x, 3, 2, 1).unwrap();
        assert_eq!(y.dims(), &[1, 2, 2, 1]);
        let v = y.flatten_all().unwrap().to_vec1::<f32>().unwrap();
        assert_eq!(v, vec![5.0, 7.0, 13.0, 15.0]);
    }

    #[test]
    fn safe_sqrt_has_zero_gradient_at_zero() {
        let dev = Device::Cpu;
        let x = Var::from_tensor(&Tensor::new(&[0.0f64, 4.0], &dev).unwrap()).unwrap();
        let y = safe_sqrt(x.as_tensor()).unwrap();
        assert_eq!(y.to_vec1::<f64>().unwrap(), vec![0.0, 2.0]);
        let g = y.sum_all().unwrap().backward().unwrap();
        let gx = g.get(x.as_tensor()).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(gx, vec![0.0, 0.25]);
    }
}
