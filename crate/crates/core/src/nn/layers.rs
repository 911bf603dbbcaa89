use candle_core::{Tensor, D};
use serde::{Deserialize, Serialize};

use super::params::{Init, ParamStore};
use crate::error::Result;

pub const INSTANCE_NORM_EPS: f64 = 1e-5;

#[derive(Debug, Clone)]
pub struct Conv2d {
    weight: Tensor,
    bias: Option<Tensor>,
    stride: usize,
    padding: usize,
}

impl Conv2d {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        gain: f64,
    ) -> Result<Self> {
        let fan_in = in_channels * kernel * kernel;
        let weight = store.get_or_init(
            &format!("{name}.weight"),
            &[out_channels, in_channels, kernel, kernel],
            Init::Normal { fan_in, gain },
        )?;
        let bias = store.get_or_init(&format!("{name}.bias"), &[out_channels], Init::Zeros)?;
        Ok(Self {
            weight,
            bias: Some(bias),
            stride,
            padding,
        })
    }

    pub fn out_channels(&self) -> usize {
        self.weight.dims()[0]
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let y = super::conv2d(x, &self.weight, self.padding, self.stride)?;
        Ok(match &self.bias {
            Some(b) => y.broadcast_add(&b.reshape((1, b.dims()[0], 1, 1))?)?,
            None => y,
        })
    }
}

#[derive(Debug, Clone)]
pub struct Linear {
    weight: Tensor,
    bias: Tensor,
}

impl Linear {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        gain: f64,
    ) -> Result<Self> {
        let weight = store.get_or_init(
            &format!("{name}.weight"),
            &[outputs, inputs],
            Init::Normal {
                fan_in: inputs,
                gain,
            },
        )?;
        let bias = store.get_or_init(&format!("{name}.bias"), &[outputs], Init::Zeros)?;
        Ok(Self { weight, bias })
    }

    /// `[B, in] -> [B, out]`
    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        Ok(x.matmul(&self.weight.t()?)?.broadcast_add(&self.bias)?)
    }
}

/// Per-sample, per-channel normalization over the spatial axes of `[B, C, H, W]`.
pub fn instance_norm(x: &Tensor, eps: f64) -> Result<Tensor> {
    super::instance_norm_op(x, eps)
}

/// Nearest-neighbour upsampling of `[B, C, H, W]` by an integer factor.
pub fn upsample_nearest(x: &Tensor, factor: usize) -> Result<Tensor> {
    let (b, c, h, w) = x.dims4()?;
    Ok(x.reshape((b, c, h, 1, w, 1))?
        .broadcast_as((b, c, h, factor, w, factor))?
        .reshape((b, c, h * factor, w * factor))?)
}

/// Instance normalization followed by the style affine `gamma * x + beta`,
/// with `gamma` and `beta` of shape `[B, C]`.
pub fn adain(x: &Tensor, gamma: &Tensor, beta: &Tensor, eps: f64) -> Result<Tensor> {
    let (b, c) = gamma.dims2()?;
    let normed = instance_norm(x, eps)?;
    Ok(normed
        .broadcast_mul(&gamma.reshape((b, c, 1, 1))?)?
        .broadcast_add(&beta.reshape((b, c, 1, 1))?)?)
}

pub fn leaky_relu(x: &Tensor, slope: f64) -> Result<Tensor> {
    Ok((x.relu()? - (x.neg()?.relu()? * slope)?)?)
}

/// Softmax over the class axis of `[B, K, H, W]`.
pub fn softmax_channels(x: &Tensor) -> Result<Tensor> {
    let max = x.max_keepdim(1)?.detach();
    let e = x.broadcast_sub(&max)?.exp()?;
    let s = e.sum_keepdim(1)?;
    Ok(e.broadcast_div(&s)?)
}

/// `[B, C, H, W] -> [B, C]`
pub fn global_avg_pool(x: &Tensor) -> Result<Tensor> {
    Ok(x.mean(D::Minus1)?.mean(D::Minus1)?)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Norm {
    #[default]
    None,
    Instance,
}

impl Norm {
    pub fn apply(self, x: &Tensor) -> Result<Tensor> {
        match self {
            Norm::None => Ok(x.clone()),
            Norm::Instance => instance_norm(x, INSTANCE_NORM_EPS),
        }
    }
}

/// Two 3x3 convolutions with an identity shortcut; no activation after the sum.
#[derive(Debug, Clone)]
pub struct ResBlock {
    conv1: Conv2d,
    conv2: Conv2d,
    norm: Norm,
}

impl ResBlock {
    pub fn new(store: &mut ParamStore, name: &str, channels: usize, norm: Norm) -> Result<Self> {
        let gain = 2f64.sqrt();
        Ok(Self {
            conv1: Conv2d::new(
                store,
                &format!("{name}.conv1"),
                channels,
                channels,
                3,
                1,
                1,
                gain,
            )?,
            // small residual branch at init keeps deep stacks near identity
            conv2: Conv2d::new(
                store,
                &format!("{name}.conv2"),
                channels,
                channels,
                3,
                1,
                1,
                0.5,
            )?,
            norm,
        })
    }

    pub fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let h = self.norm.apply(&self.conv1.forward(x)?)?.relu()?;
        let h = self.norm.apply(&self.conv2.forward(&h)?)?;
        Ok((x + h)?)
    }

    /// Residual block whose normalizations are AdaIN with the given affines.
    pub fn forward_adain(
        &self,
        x: &Tensor,
        first: (&Tensor, &Tensor),
        second: (&Tensor, &Tensor),
    ) -> Result<Tensor> {
        let h = adain(&self.conv1.forward(x)?, first.0, first.1, INSTANCE_NORM_EPS)?.relu()?;
        let h = adain(
            &self.conv2.forward(&h)?,
            second.0,
            second.1,
            INSTANCE_NORM_EPS,
        )?;
        Ok((x + h)?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::device;
    use candle_core::DType;

    fn randn(shape: &[usize], seed: u64) -> Tensor {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let n: usize = shape.iter().product();
        let v: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        Tensor::from_vec(v, shape, &device()).unwrap()
    }

    #[test]
    fn instance_norm_statistics() {
        let x = (randn(&[2, 3, 8, 8], 1) * 3.0)
            .unwrap()
            .affine(1.0, 5.0)
            .unwrap();
        let y = instance_norm(&x, INSTANCE_NORM_EPS).unwrap();
        let mean = y
            .mean_keepdim((2, 3))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        let var = y
            .sqr()
            .unwrap()
            .mean_keepdim((2, 3))
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        for (m, v) in mean.iter().zip(&var) {
            assert!(m.abs() < 1e-4);
            assert!((v - 1.0).abs() < 1e-3);
        }
    }

    #[test]
    fn adain_identity_affine_is_instance_norm() {
        let x = randn(&[2, 4, 8, 8], 2);
        let ones = Tensor::ones((2, 4), DType::F64, &device()).unwrap();
        let zeros = Tensor::zeros((2, 4), DType::F64, &device()).unwrap();
        let a = adain(&x, &ones, &zeros, INSTANCE_NORM_EPS).unwrap();
        let b = instance_norm(&x, INSTANCE_NORM_EPS).unwrap();
        let diff = (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f64>()
            .unwrap();
        assert!(diff < 1e-5);
    }

    #[test]
    fn constant_map_collapses_to_beta() {
        let x = Tensor::full(3.5f64, (1, 2, 4, 4), &device()).unwrap();
        let gamma = Tensor::new(&[[2.0f64, -1.0]], &device()).unwrap();
        let beta = Tensor::new(&[[0.25f64, -0.75]], &device()).unwrap();
        let y = adain(&x, &gamma, &beta, INSTANCE_NORM_EPS).unwrap();
        let v = y.flatten_all().unwrap().to_vec1::<f64>().unwrap();
        for (i, val) in v.iter().enumerate() {
            let expected = if i < 16 { 0.25 } else { -0.75 };
            assert!((val - expected).abs() < 1e-6);
        }
    }

    #[test]
    fn softmax_columns_sum_to_one() {
        let x = (randn(&[2, 3, 4, 4], 3) * 20.0).unwrap();
        let p = softmax_channels(&x).unwrap();
        let s = p
            .sum(1)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f64>()
            .unwrap();
        assert!(s.iter().all(|v| (v - 1.0).abs() < 1e-12));
    }

    #[test]
    fn leaky_relu_values() {
        let x = Tensor::new(&[-2.0f64, 0.0, 3.0], &device()).unwrap();
        let y = leaky_relu(&x, 0.2).unwrap().to_vec1::<f64>().unwrap();
        assert_eq!(y, vec![-0.4, 0.0, 3.0]);
    }
}
