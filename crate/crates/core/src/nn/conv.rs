//! 2D convolution as im2col followed by a matrix product, with a hand-written
//! backward pass. Grouping and dilation are not supported.

use candle_core::{CpuStorage, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::{Error, Result};

/// `[B, Ci, H, W]` convolved with `[Co, Ci, KH, KW]`.
pub fn conv2d(x: &Tensor, w: &Tensor, padding: usize, stride: usize) -> Result<Tensor> {
    let (_, ci, h, wd) = x.dims4()?;
    let (_, wci, kh, kw) = w.dims4()?;
    if ci != wci {
        return Err(Error::Shape(format!(
            "convolution expects {wci} input channels, got {ci}"
        )));
    }
    if stride == 0 || h + 2 * padding < kh || wd + 2 * padding < kw {
        return Err(Error::Shape(format!(
            "kernel {kh}x{kw} does not fit input {h}x{wd} with padding {padding}"
        )));
    }
    Ok(x.contiguous()?
        .apply_op2(&w.contiguous()?, Conv { padding, stride })?)
}

#[derive(Debug, Clone, Copy)]
struct Geom {
    b: usize,
    ci: usize,
    h: usize,
    w: usize,
    co: usize,
    kh: usize,
    kw: usize,
    oh: usize,
    ow: usize,
    padding: usize,
    stride: usize,
}

impl Geom {
    fn new(x: [usize; 4], k: [usize; 4], padding: usize, stride: usize) -> Self {
        Self {
            b: x[0],
            ci: x[1],
            h: x[2],
            w: x[3],
            co: k[0],
            kh: k[2],
            kw: k[3],
            oh: (x[2] + 2 * padding - k[2]) / stride + 1,
            ow: (x[3] + 2 * padding - k[3]) / stride + 1,
            padding,
            stride,
        }
    }

    fn rows(&self) -> usize {
        self.ci * self.kh * self.kw
    }

    fn cols(&self) -> usize {
        self.oh * self.ow
    }

    /// Calls `f(col_offset, image_offset)` for every in-bounds entry of the
    /// patch matrix of one image, row by row.
    fn for_each_patch(&self, mut f: impl FnMut(usize, usize)) {
        let cols = self.cols();
        let mut row = 0;
        for c in 0..self.ci {
            for i in 0..self.kh {
                for j in 0..self.kw {
                    for y in 0..self.oh {
                        let iy = (y * self.stride + i) as isize - self.padding as isize;
                        if iy < 0 || iy as usize >= self.h {
                            continue;
                        }
                        let src = (c * self.h + iy as usize) * self.w;
                        let dst = row * cols + y * self.ow;
                        for x in 0..self.ow {
                            let ix = (x * self.stride + j) as isize - self.padding as isize;
                            if ix >= 0 && (ix as usize) < self.w {
                                f(dst + x, src + ix as usize);
                            }
                        }
                    }
                    row += 1;
                }
            }
        }
    }
}

trait Gemm: WithDType + Default + std::ops::AddAssign {
    /// `c = alpha * a b + beta * c` with explicit row and column strides.
    #[allow(clippy::too_many_arguments)]
    fn gemm(
        m: usize,
        k: usize,
        n: usize,
        a: (&[Self], isize, isize),
        b: (&[Self], isize, isize),
        beta: Self,
        c: (&mut [Self], isize, isize),
    );
}

macro_rules! impl_gemm {
    ($t:ty, $f:path) => {
        impl Gemm for $t {
            fn gemm(
                m: usize,
                k: usize,
                n: usize,
                a: (&[Self], isize, isize),
                b: (&[Self], isize, isize),
                beta: Self,
                c: (&mut [Self], isize, isize),
            ) {
                assert!(a.0.len() >= m * k && b.0.len() >= k * n && c.0.len() >= m * n);
                // SAFETY: the slices hold at least the addressed elements for these strides.
                unsafe {
                    $f(
                        m,
                        k,
                        n,
                        1.0,
                        a.0.as_ptr(),
                        a.1,
                        a.2,
                        b.0.as_ptr(),
                        b.1,
                        b.2,
                        beta,
                        c.0.as_mut_ptr(),
                        c.1,
                        c.2,
                    )
                }
            }
        }
    };
}

impl_gemm!(f32, matrixmultiply::sgemm);
impl_gemm!(f64, matrixmultiply::dgemm);

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = l
        .contiguous_offsets()
        .ok_or_else(|| candle_core::Error::Msg("conv2d expects contiguous operands".into()))?;
    Ok(&s.as_slice::<T>()?[a..b])
}

fn dims(l: &Layout) -> candle_core::Result<[usize; 4]> {
    let (a, b, c, d) = l.shape().dims4()?;
    Ok([a, b, c, d])
}

fn im2col<T: Gemm>(img: &[T], g: &Geom, col: &mut [T]) {
    col.fill(T::zero());
    g.for_each_patch(|c, i| col[c] = img[i]);
}

fn forward<T: Gemm>(x: &[T], k: &[T], g: Geom) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let mut col = vec![T::zero(); rows * cols];
    let mut out = vec![T::zero(); g.b * g.co * cols];
    let img = g.ci * g.h * g.w;
    for n in 0..g.b {
        im2col(&x[n * img..(n + 1) * img], &g, &mut col);
        let dst = &mut out[n * g.co * cols..(n + 1) * g.co * cols];
        T::gemm(
            g.co,
            rows,
            cols,
            (k, rows as isize, 1),
            (&col, cols as isize, 1),
            T::zero(),
            (dst, cols as isize, 1),
        );
    }
    out
}

fn input_grad<T: Gemm>(grad: &[T], k: &[T], g: Geom) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let img = g.ci * g.h * g.w;
    let mut dcol = vec![T::zero(); rows * cols];
    let mut dx = vec![T::zero(); g.b * img];
    for n in 0..g.b {
        let gn = &grad[n * g.co * cols..(n + 1) * g.co * cols];
        // dcol = k^T grad
        T::gemm(
            rows,
            g.co,
            cols,
            (k, 1, rows as isize),
            (gn, cols as isize, 1),
            T::zero(),
            (&mut dcol, cols as isize, 1),
        );
        let dst = &mut dx[n * img..(n + 1) * img];
        g.for_each_patch(|c, i| dst[i] += dcol[c]);
    }
    dx
}

fn kernel_grad<T: Gemm>(x: &[T], grad: &[T], g: Geom) -> Vec<T> {
    let (rows, cols) = (g.rows(), g.cols());
    let img = g.ci * g.h * g.w;
    let mut col = vec![T::zero(); rows * cols];
    let mut dk = vec![T::zero(); g.co * rows];
    for n in 0..g.b {
        im2col(&x[n * img..(n + 1) * img], &g, &mut col);
        let gn = &grad[n * g.co * cols..(n + 1) * g.co * cols];
        // dk += grad col^T
        T::gemm(
            g.co,
            cols,
            rows,
            (gn, cols as isize, 1),
            (&col, 1, cols as isize),
            T::one(),
            (&mut dk, rows as isize, 1),
        );
    }
    dk
}

macro_rules! dispatch {
    ($s:expr, $l:expr, $s2:expr, $l2:expr, |$a:ident, $b:ident| $body:expr) => {
        match ($s, $s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => {
                let ($a, $b) = (slice::<f32>($s, $l)?, slice::<f32>($s2, $l2)?);
                CpuStorage::F32($body)
            }
            (CpuStorage::F64(_), CpuStorage::F64(_)) => {
                let ($a, $b) = (slice::<f64>($s, $l)?, slice::<f64>($s2, $l2)?);
                CpuStorage::F64($body)
            }
            _ => {
                return Err(candle_core::Error::Msg(
                    "conv2d supports matching f32 or f64 operands".into(),
                ))
            }
        }
    };
}

struct Conv {
    padding: usize,
    stride: usize,
}

impl CustomOp2 for Conv {
    fn name(&self) -> &'static str {
        "im2col-conv2d"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = Geom::new(dims(l1)?, dims(l2)?, self.padding, self.stride);
        let out = dispatch!(s1, l1, s2, l2, |x, k| forward(x, k, g));
        Ok((out, Shape::from((g.b, g.co, g.oh, g.ow))))
    }

    fn bwd(
        &self,
        x: &Tensor,
        k: &Tensor,
        _res: &Tensor,
        grad: &Tensor,
    ) -> candle_core::Result<(Option<Tensor>, Option<Tensor>)> {
        let grad = grad.contiguous()?;
        let (xd, kd) = (x.dims4()?, k.dims4()?);
        let g = Geom::new(
            [xd.0, xd.1, xd.2, xd.3],
            [kd.0, kd.1, kd.2, kd.3],
            self.padding,
            self.stride,
        );
        let dx = grad.apply_op2_no_bwd(k, &InputGrad(g))?;
        let dk = x.apply_op2_no_bwd(&grad, &KernelGrad(g))?;
        Ok((Some(dx), Some(dk)))
    }
}

struct InputGrad(Geom);

impl CustomOp2 for InputGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-input-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |grad, k| input_grad(grad, k, g));
        Ok((out, Shape::from((g.b, g.ci, g.h, g.w))))
    }
}

struct KernelGrad(Geom);

impl CustomOp2 for KernelGrad {
    fn name(&self) -> &'static str {
        "im2col-conv2d-kernel-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let g = self.0;
        let out = dispatch!(s1, l1, s2, l2, |x, grad| kernel_grad(x, grad, g));
        Ok((out, Shape::from((g.co, g.ci, g.kh, g.kw))))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;
    use candle_core::{DType, Var};

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &device()).unwrap()
    }

    #[test]
    fn matches_candle_forward_and_backward() {
        for (shape, k, pad, stride) in [
            ([2, 3, 8, 8], [4, 3, 3, 3], 1, 1),
            ([2, 3, 8, 8], [5, 3, 4, 4], 1, 2),
            ([1, 2, 7, 5], [3, 2, 1, 1], 0, 1),
            ([3, 4, 6, 6], [2, 4, 3, 3], 0, 2),
        ] {
            let x = Var::from_tensor(&randn(&shape, 1)).unwrap();
            let w = Var::from_tensor(&randn(&k, 2)).unwrap();
            let probe = randn(&[shape[0], k[0], 1, 1], 3);
            let ours = conv2d(&x, &w, pad, stride).unwrap();
            let reference = x.conv2d(&w, pad, stride, 1, 1).unwrap();
            let diff = (&ours - &reference)
                .unwrap()
                .abs()
                .unwrap()
                .max_all()
                .unwrap();
            assert!(diff.to_scalar::<f64>().unwrap() < 1e-10);

            let loss = |y: &Tensor| {
                y.broadcast_mul(&probe)
                    .unwrap()
                    .sqr()
                    .unwrap()
                    .sum_all()
                    .unwrap()
            };
            let ga = loss(&ours).backward().unwrap();
            let gb = loss(&reference).backward().unwrap();
            for v in [&x, &w] {
                let a = ga.get(v).unwrap();
                let b = gb.get(v).unwrap();
                let d = (a - b).unwrap().abs().unwrap().max_all().unwrap();
                assert!(d.to_scalar::<f64>().unwrap() < 1e-9, "{shape:?} {k:?}");
            }
        }
    }

    #[test]
    fn f32_supported_and_channel_mismatch_rejected() {
        let x = randn(&[1, 2, 4, 4], 0).to_dtype(DType::F32).unwrap();
        let w = randn(&[1, 2, 3, 3], 1).to_dtype(DType::F32).unwrap();
        assert_eq!(conv2d(&x, &w, 1, 1).unwrap().dims(), &[1, 1, 4, 4]);
        let bad = randn(&[1, 3, 3, 3], 1).to_dtype(DType::F32).unwrap();
        assert!(conv2d(&x, &bad, 1, 1).is_err());
    }
}
