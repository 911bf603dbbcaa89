//! Instance normalization as a single op with an analytic backward pass.

use candle_core::{CpuStorage, CustomOp1, CustomOp2, Layout, Shape, Tensor, WithDType};

use crate::error::Result;

/// Normalizes every `[H, W]` plane of `[B, C, H, W]` to zero mean and unit
/// (biased) variance, with `eps` added to the variance.
pub fn instance_norm_op(x: &Tensor, eps: f64) -> Result<Tensor> {
    x.dims4()?;
    Ok(x.contiguous()?.apply_op1(InstanceNorm { eps })?)
}

fn plane(l: &Layout) -> candle_core::Result<usize> {
    let (_, _, h, w) = l.shape().dims4()?;
    Ok(h * w)
}

fn slice<'a, T: WithDType>(s: &'a CpuStorage, l: &Layout) -> candle_core::Result<&'a [T]> {
    let (a, b) = l.contiguous_offsets().ok_or_else(|| {
        candle_core::Error::Msg("instance norm expects a contiguous input".into())
    })?;
    Ok(&s.as_slice::<T>()?[a..b])
}

/// Mean and `1 / sqrt(var + eps)` of one plane.
fn moments(p: &[f64], eps: f64) -> (f64, f64) {
    let n = p.len() as f64;
    let mean = p.iter().sum::<f64>() / n;
    let var = p.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / (var + eps).sqrt())
}

fn forward<T: WithDType>(x: &[T], n: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let mut buf = vec![0.0; n];
    for p in x.chunks_exact(n) {
        for (b, v) in buf.iter_mut().zip(p) {
            *b = v.to_f64();
        }
        let (mean, inv) = moments(&buf, eps);
        out.extend(buf.iter().map(|v| T::from_f64((v - mean) * inv)));
    }
    out
}

/// `dx = inv * (g - mean(g) - y * mean(g * y))` per plane.
fn backward<T: WithDType>(x: &[T], g: &[T], n: usize, eps: f64) -> Vec<T> {
    let mut out = Vec::with_capacity(x.len());
    let mut y = vec![0.0; n];
    for (xp, gp) in x.chunks_exact(n).zip(g.chunks_exact(n)) {
        for (b, v) in y.iter_mut().zip(xp) {
            *b = v.to_f64();
        }
        let (mean, inv) = moments(&y, eps);
        y.iter_mut().for_each(|v| *v = (*v - mean) * inv);
        let gm = gp.iter().map(|v| v.to_f64()).sum::<f64>() / n as f64;
        let gy = gp.iter().zip(&y).map(|(a, b)| a.to_f64() * b).sum::<f64>() / n as f64;
        out.extend(
            gp.iter()
                .zip(&y)
                .map(|(a, b)| T::from_f64(inv * (a.to_f64() - gm - b * gy))),
        );
    }
    out
}

struct InstanceNorm {
    eps: f64,
}

impl CustomOp1 for InstanceNorm {
    fn name(&self) -> &'static str {
        "instance-norm"
    }

    fn cpu_fwd(&self, s: &CpuStorage, l: &Layout) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = plane(l)?;
        let out = match s {
            CpuStorage::F32(_) => CpuStorage::F32(forward(slice::<f32>(s, l)?, n, self.eps)),
            CpuStorage::F64(_) => CpuStorage::F64(forward(slice::<f64>(s, l)?, n, self.eps)),
            _ => {
                return Err(candle_core::Error::Msg(
                    "instance norm needs f32 or f64".into(),
                ))
            }
        };
        Ok((out, l.shape().clone()))
    }

    fn bwd(&self, x: &Tensor, _res: &Tensor, grad: &Tensor) -> candle_core::Result<Option<Tensor>> {
        let grad = grad.contiguous()?;
        Ok(Some(x.apply_op2_no_bwd(
            &grad,
            &InstanceNormGrad { eps: self.eps },
        )?))
    }
}

struct InstanceNormGrad {
    eps: f64,
}

impl CustomOp2 for InstanceNormGrad {
    fn name(&self) -> &'static str {
        "instance-norm-grad"
    }

    fn cpu_fwd(
        &self,
        s1: &CpuStorage,
        l1: &Layout,
        s2: &CpuStorage,
        l2: &Layout,
    ) -> candle_core::Result<(CpuStorage, Shape)> {
        let n = plane(l1)?;
        let out = match (s1, s2) {
            (CpuStorage::F32(_), CpuStorage::F32(_)) => CpuStorage::F32(backward(
                slice::<f32>(s1, l1)?,
                slice::<f32>(s2, l2)?,
                n,
                self.eps,
            )),
            (CpuStorage::F64(_), CpuStorage::F64(_)) => CpuStorage::F64(backward(
                slice::<f64>(s1, l1)?,
                slice::<f64>(s2, l2)?,
                n,
                self.eps,
            )),
            _ => {
                return Err(candle_core::Error::Msg(
                    "instance norm needs f32 or f64".into(),
                ))
            }
        };
        Ok((out, l1.shape().clone()))
    }
}
