//! Data model: domain specs, samples, datasets, folds and synthetic tasks.

mod folds;
mod format;
mod synthetic;

pub use folds::{make_folds, FoldPlan};
pub use format::{
    load_dataset, load_sample, load_task, save_dataset, save_sample, save_task, Manifest, Sidecar,
    TASK_PARTS,
};
pub use synthetic::{generate_synthetic_task, SyntheticTask, SyntheticTaskConfig};

use candle_core::{DType, Device, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::pseudo::PseudoInfo;

/// Names a domain and fixes the shape of its images.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DomainSpec {
    pub name: String,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
    pub num_classes: usize,
}

impl DomainSpec {
    pub fn new(name: impl Into<String>, channels: usize, height: usize, width: usize) -> Self {
        Self {
            name: name.into(),
            channels,
            height,
            width,
            num_classes: 2,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.name.is_empty() {
            return Err(Error::InvalidArgument("domain name is empty".into()));
        }
        if self.channels == 0 || self.height == 0 || self.width == 0 {
            return Err(Error::InvalidArgument(format!(
                "domain `{}` has a zero dimension: channels={}, height={}, width={}",
                self.name, self.channels, self.height, self.width
            )));
        }
        if self.num_classes < 2 {
            return Err(Error::InvalidArgument(format!(
                "domain `{}` needs at least 2 classes, got {}",
                self.name, self.num_classes
            )));
        }
        Ok(())
    }

    pub fn image_shape(&self) -> [usize; 3] {
        [self.channels, self.height, self.width]
    }

    pub fn mask_shape(&self) -> [usize; 3] {
        [self.num_classes, self.height, self.width]
    }

    /// Both domains of one task must be pixel-aligned.
    pub fn check_aligned(&self, other: &DomainSpec) -> Result<()> {
        if self.height != other.height || self.width != other.width {
            return Err(Error::Shape(format!(
                "domains `{}` ({}x{}) and `{}` ({}x{}) differ in spatial size",
                self.name, self.height, self.width, other.name, other.height, other.width
            )));
        }
        if self.num_classes != other.num_classes {
            return Err(Error::Shape(format!(
                "domains `{}` and `{}` differ in class count",
                self.name, other.name
            )));
        }
        Ok(())
    }
}

/// A dense `[d0, d1, d2]` array of `f32` in row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor3 {
    shape: [usize; 3],
    data: Vec<f32>,
}

impl Tensor3 {
    pub fn zeros(shape: [usize; 3]) -> Self {
        Self {
            shape,
            data: vec![0.0; shape.iter().product()],
        }
    }

    pub fn from_vec(shape: [usize; 3], data: Vec<f32>) -> Result<Self> {
        let expected: usize = shape.iter().product();
        if data.len() != expected {
            return Err(Error::Shape(format!(
                "shape {:?} needs {} values, got {}",
                shape,
                expected,
                data.len()
            )));
        }
        Ok(Self { shape, data })
    }

    pub fn shape(&self) -> [usize; 3] {
        self.shape
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f32] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    #[inline]
    pub fn index(&self, c: usize, h: usize, w: usize) -> usize {
        (c * self.shape[1] + h) * self.shape[2] + w
    }

    #[inline]
    pub fn get(&self, c: usize, h: usize, w: usize) -> f32 {
        self.data[self.index(c, h, w)]
    }

    #[inline]
    pub fn set(&mut self, c: usize, h: usize, w: usize, v: f32) {
        let i = self.index(c, h, w);
        self.data[i] = v;
    }

    /// One plane `[d1, d2]` of the first axis.
    pub fn plane(&self, c: usize) -> &[f32] {
        let n = self.shape[1] * self.shape[2];
        &self.data[c * n..(c + 1) * n]
    }

    /// Builds a one-hot mask from per-pixel class indices.
    pub fn one_hot(num_classes: usize, height: usize, width: usize, labels: &[usize]) -> Self {
        let mut t = Self::zeros([num_classes, height, width]);
        for (p, &k) in labels.iter().enumerate() {
            t.data[k * height * width + p] = 1.0;
        }
        t
    }

    /// Every pixel column sums to exactly 1 with 0/1 entries.
    pub fn is_one_hot(&self) -> bool {
        self.column_sums_in(&[1.0])
    }

    /// Every pixel column is one-hot or all zero.
    pub fn is_one_hot_or_zero(&self) -> bool {
        self.column_sums_in(&[0.0, 1.0])
    }

    fn column_sums_in(&self, allowed: &[f32]) -> bool {
        let [c, h, w] = self.shape;
        if self.data.iter().any(|&v| v != 0.0 && v != 1.0) {
            return false;
        }
        (0..h * w).all(|p| {
            let s: f32 = (0..c).map(|k| self.data[k * h * w + p]).sum();
            allowed.contains(&s)
        })
    }

    pub fn to_tensor(&self, dtype: DType, device: &Device) -> Result<Tensor> {
        Ok(Tensor::from_slice(&self.data, &self.shape, device)?.to_dtype(dtype)?)
    }

    pub fn from_tensor(t: &Tensor) -> Result<Self> {
        let dims = t.dims();
        if dims.len() != 3 {
            return Err(Error::Shape(format!(
                "expected a rank-3 tensor, got {:?}",
                dims
            )));
        }
        let data = t.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
        Self::from_vec([dims[0], dims[1], dims[2]], data)
    }
}

/// One 2D slice of a patient volume with its optional one-hot mask.
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    /// File stem used when the sample is persisted.
    pub name: String,
    pub patient_id: String,
    /// Name of the [`DomainSpec`] the image belongs to.
    pub domain: String,
    pub image: Tensor3,
    pub mask: Option<Tensor3>,
    /// Set when `mask` is a pseudo-label rather than an annotation.
    pub pseudo: Option<PseudoInfo>,
}

impl Sample {
    pub fn validate(&self, spec: &DomainSpec) -> Result<()> {
        if self.domain != spec.name {
            return Err(Error::Shape(format!(
                "sample `{}` belongs to domain `{}`, expected `{}`",
                self.name, self.domain, spec.name
            )));
        }
        if self.image.shape() != spec.image_shape() {
            return Err(Error::Shape(format!(
                "sample `{}` image has shape {:?}, domain `{}` expects {:?}",
                self.name,
                self.image.shape(),
                spec.name,
                spec.image_shape()
            )));
        }
        if let Some(mask) = &self.mask {
            if mask.shape() != spec.mask_shape() {
                return Err(Error::Shape(format!(
                    "sample `{}` mask has shape {:?}, expected {:?}",
                    self.name,
                    mask.shape(),
                    spec.mask_shape()
                )));
            }
            let valid = if self.pseudo.is_some() {
                mask.is_one_hot_or_zero()
            } else {
                mask.is_one_hot()
            };
            if !valid {
                return Err(Error::Shape(format!(
                    "sample `{}` mask is not a valid one-hot mask",
                    self.name
                )));
            }
        }
        Ok(())
    }
}

/// An immutable collection of samples from one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub spec: DomainSpec,
    pub samples: Vec<Sample>,
}

impl Dataset {
    pub fn new(spec: DomainSpec, samples: Vec<Sample>) -> Result<Self> {
        spec.validate()?;
        for s in &samples {
            s.validate(&spec)?;
        }
        Ok(Self { spec, samples })
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    /// Distinct patient ids in first-appearance order.
    pub fn patients(&self) -> Vec<String> {
        let mut seen = std::collections::BTreeSet::new();
        self.samples
            .iter()
            .filter(|s| seen.insert(s.patient_id.clone()))
            .map(|s| s.patient_id.clone())
            .collect()
    }

    pub fn is_fully_labeled(&self) -> bool {
        self.samples.iter().all(|s| s.mask.is_some())
    }

    /// Samples whose patient satisfies `keep`.
    pub fn filter_patients(&self, keep: impl Fn(&str) -> bool) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            samples: self
                .samples
                .iter()
                .filter(|s| keep(&s.patient_id))
                .cloned()
                .collect(),
        }
    }

    /// Same images with masks removed.
    pub fn without_masks(&self) -> Dataset {
        Dataset {
            spec: self.spec.clone(),
            samples: self
                .samples
                .iter()
                .map(|s| Sample {
                    mask: None,
                    pseudo: None,
                    ..s.clone()
                })
                .collect(),
        }
    }

    /// Stacks the images at `indices` into a `[B, C, H, W]` tensor.
    pub fn image_batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let [c, h, w] = self.spec.image_shape();
        let mut data = Vec::with_capacity(indices.len() * c * h * w);
        for &i in indices {
            data.extend_from_slice(self.samples[i].image.data());
        }
        Ok(Tensor::from_vec(data, (indices.len(), c, h, w), device)?.to_dtype(dtype)?)
    }

    /// Stacks the masks at `indices` into a `[B, K, H, W]` tensor.
    pub fn mask_batch(&self, indices: &[usize], dtype: DType, device: &Device) -> Result<Tensor> {
        let [k, h, w] = self.spec.mask_shape();
        let mut data = Vec::with_capacity(indices.len() * k * h * w);
        for &i in indices {
            let s = &self.samples[i];
            let mask = s.mask.as_ref().ok_or_else(|| {
                Error::InvalidArgument(format!("sample `{}` has no mask", s.name))
            })?;
            data.extend_from_slice(mask.data());
        }
        Ok(Tensor::from_vec(data, (indices.len(), k, h, w), device)?.to_dtype(dtype)?)
    }
}
