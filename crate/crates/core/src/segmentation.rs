//! Encoder-decoder segmentation networks.
//!
//! The encoder is a small residual network; the decoder upsamples back to
//! input resolution, concatenating the encoder feature map of each scale.
//! Outputs are per-pixel class probabilities.

use std::path::Path;

use candle_core::{DType, Tensor};
use serde::{Deserialize, Serialize};

use crate::data::DomainSpec;
use crate::error::{ConfigIssue, Error, Result};
use crate::nn::{
    device, read_checkpoint, softmax_channels, upsample_nearest, write_checkpoint, Conv2d, Norm,
    ParamStore, ResBlock,
};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SegmenterConfig {
    pub in_channels: usize,
    pub num_classes: usize,
    pub width: usize,
    /// Number of stride-2 stages; inputs must be divisible by `2^depth`.
    pub depth: usize,
    pub res_blocks: usize,
    #[serde(default)]
    pub norm: Norm,
    /// Channel count of a second input domain fed through a learned 1x1
    /// projection to `in_channels`.
    #[serde(default)]
    pub adapter_channels: Option<usize>,
}

impl SegmenterConfig {
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            num_classes: 2,
            width: 8,
            depth: 3,
            res_blocks: 1,
            norm: Norm::Instance,
            adapter_channels: None,
        }
    }

    pub fn full(in_channels: usize) -> Self {
        Self {
            in_channels,
            num_classes: 2,
            width: 64,
            depth: 4,
            res_blocks: 2,
            norm: Norm::Instance,
            adapter_channels: None,
        }
    }

    pub fn for_domain(self, spec: &DomainSpec) -> Self {
        Self {
            in_channels: spec.channels,
            num_classes: spec.num_classes,
            ..self
        }
    }

    pub fn total_stride(&self) -> usize {
        1 << self.depth
    }

    pub fn validate(&self) -> Result<()> {
        let mut issues = Vec::new();
        if self.in_channels == 0 {
            issues.push(ConfigIssue::new(
                "segmenter.in_channels",
                "must be positive",
            ));
        }
        if self.num_classes < 2 {
            issues.push(ConfigIssue::new(
                "segmenter.num_classes",
                "must be at least 2",
            ));
        }
        if self.width == 0 {
            issues.push(ConfigIssue::new("segmenter.width", "must be positive"));
        }
        if self.depth == 0 || self.depth > 8 {
            issues.push(ConfigIssue::new("segmenter.depth", "must be in 1..=8"));
        }
        if self.adapter_channels == Some(0) {
            issues.push(ConfigIssue::new(
                "segmenter.adapter_channels",
                "must be positive",
            ));
        }
        if issues.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(issues))
        }
    }

    /// Explicit error unless `height` and `width` divide by the total stride.
    pub fn check_size(&self, height: usize, width: usize) -> Result<()> {
        let s = self.total_stride();
        if !height.is_multiple_of(s) || !width.is_multiple_of(s) {
            return Err(Error::Shape(format!(
                "segmenter of depth {} needs height and width divisible by {s}, got {height}x{width}",
                self.depth
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
struct Stage {
    down: Option<Conv2d>,
    res: Vec<ResBlock>,
}

#[derive(Debug, Clone)]
struct Up {
    conv: Conv2d,
}

#[derive(Debug, Clone)]
pub struct Segmenter {
    cfg: SegmenterConfig,
    store: ParamStore,
    adapter: Option<Conv2d>,
    stem: Conv2d,
    stages: Vec<Stage>,
    ups: Vec<Up>,
    head: Conv2d,
}

impl Segmenter {
    pub fn new(cfg: SegmenterConfig, seed: u64, dtype: DType) -> Result<Self> {
        Self::from_store(cfg, ParamStore::new(seed, dtype))
    }

    fn from_store(cfg: SegmenterConfig, mut store: ParamStore) -> Result<Self> {
        cfg.validate()?;
        let g = 2f64.sqrt();
        let adapter = match cfg.adapter_channels {
            Some(c) => Some(Conv2d::new(
                &mut store,
                "adapter",
                c,
                cfg.in_channels,
                1,
                1,
                0,
                1.0,
            )?),
            None => None,
        };
        let w = cfg.width;
        let stem = Conv2d::new(&mut store, "stem", cfg.in_channels, w, 3, 1, 1, g)?;
        let mut stages = Vec::with_capacity(cfg.depth + 1);
        for i in 0..=cfg.depth {
            let ch = w << i;
            let down = if i == 0 {
                None
            } else {
                Some(Conv2d::new(
                    &mut store,
                    &format!("down{i}"),
                    ch / 2,
                    ch,
                    4,
                    2,
                    1,
                    g,
                )?)
            };
            let res = (0..cfg.res_blocks)
                .map(|j| ResBlock::new(&mut store, &format!("stage{i}.res{j}"), ch, cfg.norm))
                .collect::<Result<_>>()?;
            stages.push(Stage { down, res });
        }
        let mut ups = Vec::with_capacity(cfg.depth);
        for i in (0..cfg.depth).rev() {
            let (deep, skip) = (w << (i + 1), w << i);
            ups.push(Up {
                conv: Conv2d::new(&mut store, &format!("up{i}"), deep + skip, skip, 3, 1, 1, g)?,
            });
        }
        let head = Conv2d::new(&mut store, "head", w, cfg.num_classes, 1, 1, 0, 1.0)?;
        Ok(Self {
            cfg,
            store,
            adapter,
            stem,
            stages,
            ups,
            head,
        })
    }

    pub fn config(&self) -> &SegmenterConfig {
        &self.cfg
    }

    pub fn params(&self) -> &ParamStore {
        &self.store
    }

    pub fn dtype(&self) -> DType {
        self.store.dtype()
    }

    pub fn checksum(&self) -> Result<u64> {
        self.store.checksum()
    }

    /// Copy that shares parameters but never receives gradients.
    pub fn frozen(&self) -> Result<Self> {
        Self::from_store(self.cfg, self.store.frozen())
    }

    pub fn deep_copy(&self, dtype: DType) -> Result<Self> {
        Self::from_store(self.cfg, self.store.deep_copy(dtype)?)
    }

    /// Overwrites every parameter with those of `other` (same config).
    pub fn copy_from(&self, other: &Segmenter) -> Result<()> {
        if self.cfg != other.cfg {
            return Err(Error::InvalidArgument("segmenter configs differ".into()));
        }
        self.store.copy_from(&other.store)
    }

    fn check_input(&self, x: &Tensor, channels: usize) -> Result<()> {
        let dims = x.dims();
        if dims.len() != 4 || dims[1] != channels {
            return Err(Error::Shape(format!(
                "segmenter expects [B, {channels}, H, W] input, got {dims:?}"
            )));
        }
        self.cfg.check_size(dims[2], dims[3])
    }

    fn norm(&self, x: &Tensor) -> Result<Tensor> {
        self.cfg.norm.apply(x)
    }

    /// Class logits `[B, K, H, W]`.
    pub fn logits(&self, x: &Tensor) -> Result<Tensor> {
        self.check_input(x, self.cfg.in_channels)?;
        let x = x.to_dtype(self.dtype())?;
        let mut h = self.norm(&self.stem.forward(&x)?)?.relu()?;
        let mut skips = Vec::with_capacity(self.stages.len());
        for stage in &self.stages {
            if let Some(d) = &stage.down {
                h = self.norm(&d.forward(&h)?)?.relu()?;
            }
            for r in &stage.res {
                h = r.forward(&h)?;
            }
            skips.push(h.clone());
        }
        let mut h = skips.pop().expect("depth >= 1");
        for up in &self.ups {
            let skip = skips.pop().expect("one skip per decoder level");
            let (_, _, sh, _) = skip.dims4()?;
            let u = upsample_nearest(&h, sh / h.dims4()?.2)?;
            h = up.conv.forward(&Tensor::cat(&[&u, &skip], 1)?)?.relu()?;
        }
        self.head.forward(&h)
    }

    /// Per-pixel class probabilities `[B, K, H, W]`; differentiable.
    pub fn predict_soft(&self, x: &Tensor) -> Result<Tensor> {
        softmax_channels(&self.logits(x)?)
    }

    /// Applies the channel adapter before the network.
    pub fn predict_soft_adapted(&self, x: &Tensor) -> Result<Tensor> {
        let adapter = self
            .adapter
            .as_ref()
            .ok_or_else(|| Error::InvalidArgument("segmenter has no channel adapter".into()))?;
        let c = self.cfg.adapter_channels.unwrap_or_default();
        self.check_input(x, c)?;
        self.predict_soft(&adapter.forward(&x.to_dtype(self.dtype())?)?)
    }

    /// One-hot argmax of the soft prediction.
    pub fn predict_hard(&self, x: &Tensor) -> Result<Tensor> {
        argmax_one_hot(&self.predict_soft(x)?)
    }

    pub fn save(&self, path: &Path, iteration: u64) -> Result<()> {
        let config = serde_json::to_value(self.cfg)?;
        write_checkpoint(path, "segmenter", config, iteration, &self.store.tensors())
    }

    pub fn load(path: &Path, dtype: DType) -> Result<(Self, u64)> {
        let (header, tensors) = read_checkpoint(path)?;
        if header.kind != "segmenter" {
            return Err(Error::data(
                path,
                format!("expected a segmenter checkpoint, found `{}`", header.kind),
            ));
        }
        let cfg: SegmenterConfig =
            serde_json::from_value(header.config).map_err(|e| Error::data(path, e.to_string()))?;
        let n = tensors.len();
        let seg = Self::from_store(cfg, ParamStore::from_tensors(tensors, dtype)?)?;
        if seg.store.len() != n {
            return Err(Error::data(
                path,
                "checkpoint tensors do not match the network layout",
            ));
        }
        Ok((seg, header.iteration))
    }
}

/// One-hot argmax over dim 1 of `[B, K, H, W]`; ties go to the lower class.
pub fn argmax_one_hot(p: &Tensor) -> Result<Tensor> {
    let (b, k, h, w) = p.dims4()?;
    let v = p.to_dtype(DType::F32)?.flatten_all()?.to_vec1::<f32>()?;
    let hw = h * w;
    let mut out = vec![0f32; v.len()];
    for n in 0..b {
        let base = n * k * hw;
        for px in 0..hw {
            let mut best = 0;
            for c in 1..k {
                if v[base + c * hw + px] > v[base + best * hw + px] {
                    best = c;
                }
            }
            out[base + best * hw + px] = 1.0;
        }
    }
    Ok(Tensor::from_vec(out, (b, k, h, w), &device())?.to_dtype(p.dtype())?)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(shape: (usize, usize, usize, usize), seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.0 * shape.1 * shape.2 * shape.3;
        let v: Vec<f32> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
        Tensor::from_vec(v, shape, &device()).unwrap()
    }

    #[test]
    fn outputs_are_on_the_simplex() {
        for c in [5, 15] {
            let seg = Segmenter::new(SegmenterConfig::desk(c), 0, DType::F32).unwrap();
            let p = seg.predict_soft(&random((2, c, 32, 32), 1)).unwrap();
            assert_eq!(p.dims(), &[2, 2, 32, 32]);
            let sums = p
                .sum(1)
                .unwrap()
                .flatten_all()
                .unwrap()
                .to_vec1::<f32>()
                .unwrap();
            assert!(sums.iter().all(|s| (s - 1.0).abs() < 1e-5));
            let v = p.flatten_all().unwrap().to_vec1::<f32>().unwrap();
            assert!(v.iter().all(|&x| (0.0..=1.0).contains(&x)));
        }
    }

    #[test]
    fn hard_prediction_matches_brute_force() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let (b, k, h, w) = (2, 3, 4, 5);
        let mut v: Vec<f32> = (0..b * k * h * w)
            .map(|_| rng.random_range(0..4) as f32 / 4.0)
            .collect();
        v[0] = 0.5;
        v[h * w] = 0.5;
        let p = Tensor::from_vec(v.clone(), (b, k, h, w), &device()).unwrap();
        let hard = argmax_one_hot(&p)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        for n in 0..b {
            for y in 0..h {
                for x in 0..w {
                    let at = |c: usize| ((n * k + c) * h + y) * w + x;
                    let max = (0..k).map(|c| v[at(c)]).fold(f32::MIN, f32::max);
                    let first = (0..k).find(|&c| v[at(c)] == max).unwrap();
                    for c in 0..k {
                        assert_eq!(hard[at(c)], if c == first { 1.0 } else { 0.0 });
                    }
                }
            }
        }
    }

    #[test]
    fn tie_goes_to_background() {
        let p = Tensor::from_vec(vec![0.5f32, 0.5], (1, 2, 1, 1), &device()).unwrap();
        let hard = argmax_one_hot(&p)
            .unwrap()
            .flatten_all()
            .unwrap()
            .to_vec1::<f32>()
            .unwrap();
        assert_eq!(hard, vec![1.0, 0.0]);
    }

    #[test]
    fn checkpoint_round_trip_is_exact() {
        let dir = tempfile::tempdir().unwrap();
        let seg = Segmenter::new(SegmenterConfig::desk(5), 3, DType::F32).unwrap();
        let path = dir.path().join("seg.ckpt");
        seg.save(&path, 4).unwrap();
        let (back, it) = Segmenter::load(&path, DType::F32).unwrap();
        assert_eq!(it, 4);
        let x = random((1, 5, 32, 32), 9);
        let a = seg.predict_soft(&x).unwrap();
        let b = back.predict_soft(&x).unwrap();
        let d = (a - b)
            .unwrap()
            .abs()
            .unwrap()
            .max_all()
            .unwrap()
            .to_scalar::<f32>()
            .unwrap();
        assert_eq!(d, 0.0);
    }

    #[test]
    fn indivisible_input_is_rejected() {
        let seg = Segmenter::new(SegmenterConfig::desk(5), 0, DType::F32).unwrap();
        let err = seg.predict_soft(&random((1, 5, 20, 20), 0)).unwrap_err();
        assert!(err.to_string().contains("divisible by 8"), "{err}");
    }

    #[test]
    fn channel_mismatch_is_rejected() {
        let seg = Segmenter::new(SegmenterConfig::desk(5), 0, DType::F32).unwrap();
        assert!(matches!(
            seg.predict_soft(&random((1, 15, 32, 32), 0)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn adapter_maps_foreign_channels() {
        let cfg = SegmenterConfig {
            adapter_channels: Some(5),
            ..SegmenterConfig::desk(15)
        };
        let seg = Segmenter::new(cfg, 0, DType::F32).unwrap();
        let p = seg
            .predict_soft_adapted(&random((1, 5, 32, 32), 0))
            .unwrap();
        assert_eq!(p.dims(), &[1, 2, 32, 32]);
    }
}
