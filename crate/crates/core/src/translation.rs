//! Stochastic cross-domain translation networks.
//!
//! Each domain has a content encoder (to a spatial code shared by both
//! domains), a style encoder (to a small vector), a decoder that re-imposes a
//! style through AdaIN, and a patch discriminator. Translating an image means
//! decoding its content code with a style drawn for the other domain.

use std::collections::BTreeMap;
use std::path::Path;

use candle_core::{DType, Tensor};
use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::data::DomainSpec;
use crate::error::{Error, Result};
use crate::nn::{
    device, global_avg_pool, instance_norm, leaky_relu, read_checkpoint, upsample_nearest,
    write_checkpoint, Conv2d, Linear, Norm, ParamStore, ResBlock, INSTANCE_NORM_EPS,
};

/// Architecture of the translation networks.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NetConfig {
    pub base_channels: usize,
    pub content_channels: usize,
    pub style_dim: usize,
    pub res_blocks: usize,
    /// Stride-2 stages in the content encoder; the spatial factor is `2^downsamples`.
    pub downsamples: usize,
    pub mapper_hidden: usize,
    pub disc_channels: usize,
    /// Stride-2 stages in each discriminator; one score per `2^n x 2^n` patch.
    pub disc_downsamples: usize,
}

impl NetConfig {
    /// Small enough to train on a CPU in minutes.
    pub fn desk() -> Self {
        Self {
            base_channels: 8,
            content_channels: 16,
            style_dim: 8,
            res_blocks: 1,
            downsamples: 2,
            mapper_hidden: 32,
            disc_channels: 8,
            disc_downsamples: 3,
        }
    }

    pub fn full() -> Self {
        Self {
            base_channels: 64,
            content_channels: 256,
            style_dim: 8,
            res_blocks: 4,
            downsamples: 2,
            mapper_hidden: 256,
            disc_channels: 64,
            disc_downsamples: 4,
        }
    }

    pub fn downsampling_factor(&self) -> usize {
        1 << self.downsamples
    }

    pub fn validate(&self) -> Result<()> {
        let fields = [
            ("base_channels", self.base_channels),
            ("content_channels", self.content_channels),
            ("style_dim", self.style_dim),
            ("downsamples", self.downsamples),
            ("mapper_hidden", self.mapper_hidden),
            ("disc_channels", self.disc_channels),
            ("disc_downsamples", self.disc_downsamples),
        ];
        for (k, v) in fields {
            if v == 0 {
                return Err(Error::config(format!("net.{k}"), "must be positive"));
            }
        }
        Ok(())
    }

    /// Checks that `spec` images survive every stride-2 stage.
    pub fn check_spec(&self, spec: &DomainSpec) -> Result<()> {
        let factor = self.downsampling_factor().max(1 << self.disc_downsamples);
        if !spec.height.is_multiple_of(factor) || !spec.width.is_multiple_of(factor) {
            return Err(Error::Shape(format!(
                "domain `{}` is {}x{}; translation networks need both sides divisible by {factor}",
                spec.name, spec.height, spec.width
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Domain {
    Source,
    Target,
}

impl Domain {
    pub fn other(self) -> Self {
        match self {
            Domain::Source => Domain::Target,
            Domain::Target => Domain::Source,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    SourceToTarget,
    TargetToSource,
}

impl Direction {
    pub fn from_domain(self) -> Domain {
        match self {
            Direction::SourceToTarget => Domain::Source,
            Direction::TargetToSource => Domain::Target,
        }
    }

    pub fn to_domain(self) -> Domain {
        self.from_domain().other()
    }
}

fn down_channels(cfg: &NetConfig, i: usize) -> usize {
    if i + 1 == cfg.downsamples {
        cfg.content_channels
    } else {
        cfg.base_channels << (i + 1)
    }
}

#[derive(Debug, Clone)]
struct ContentEncoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    res: Vec<ResBlock>,
}

impl ContentEncoder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        cfg: &NetConfig,
    ) -> Result<Self> {
        let g = 2f64.sqrt();
        let stem = Conv2d::new(
            store,
            &format!("{name}.stem"),
            in_channels,
            cfg.base_channels,
            3,
            1,
            1,
            g,
        )?;
        let mut ch = cfg.base_channels;
        let mut downs = Vec::new();
        for i in 0..cfg.downsamples {
            let out = down_channels(cfg, i);
            downs.push(Conv2d::new(
                store,
                &format!("{name}.down{i}"),
                ch,
                out,
                4,
                2,
                1,
                g,
            )?);
            ch = out;
        }
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(store, &format!("{name}.res{i}"), ch, Norm::Instance))
            .collect::<Result<_>>()?;
        Ok(Self { stem, downs, res })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = instance_norm(&self.stem.forward(x)?, INSTANCE_NORM_EPS)?.relu()?;
        for d in &self.downs {
            h = instance_norm(&d.forward(&h)?, INSTANCE_NORM_EPS)?.relu()?;
        }
        for r in &self.res {
            h = r.forward(&h)?;
        }
        Ok(h)
    }
}

#[derive(Debug, Clone)]
struct StyleEncoder {
    stem: Conv2d,
    downs: Vec<Conv2d>,
    head: Linear,
}

impl StyleEncoder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        cfg: &NetConfig,
    ) -> Result<Self> {
        let g = 2f64.sqrt();
        let stem = Conv2d::new(
            store,
            &format!("{name}.stem"),
            in_channels,
            cfg.base_channels,
            3,
            1,
            1,
            g,
        )?;
        let mut ch = cfg.base_channels;
        let mut downs = Vec::new();
        for i in 0..cfg.downsamples {
            let out = cfg.base_channels << (i + 1);
            downs.push(Conv2d::new(
                store,
                &format!("{name}.down{i}"),
                ch,
                out,
                4,
                2,
                1,
                g,
            )?);
            ch = out;
        }
        let head = Linear::new(store, &format!("{name}.fc"), ch, cfg.style_dim, 1.0)?;
        Ok(Self { stem, downs, head })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = self.stem.forward(x)?.relu()?;
        for d in &self.downs {
            h = d.forward(&h)?.relu()?;
        }
        self.head.forward(&global_avg_pool(&h)?)
    }
}

#[derive(Debug, Clone)]
struct Decoder {
    res: Vec<ResBlock>,
    mapper_hidden: Linear,
    mapper_out: Linear,
    ups: Vec<Conv2d>,
    out: Conv2d,
    content_channels: usize,
}

impl Decoder {
    fn new(
        store: &mut ParamStore,
        name: &str,
        out_channels: usize,
        cfg: &NetConfig,
    ) -> Result<Self> {
        let g = 2f64.sqrt();
        let c = cfg.content_channels;
        let res = (0..cfg.res_blocks)
            .map(|i| ResBlock::new(store, &format!("{name}.res{i}"), c, Norm::None))
            .collect::<Result<_>>()?;
        let n_affine = 2 * cfg.res_blocks;
        let mapper_hidden = Linear::new(
            store,
            &format!("{name}.mlp0"),
            cfg.style_dim,
            cfg.mapper_hidden,
            g,
        )?;
        // small output gain: AdaIN starts close to gamma = 1, beta = 0
        let mapper_out = Linear::new(
            store,
            &format!("{name}.mlp1"),
            cfg.mapper_hidden,
            2 * n_affine * c,
            0.1,
        )?;
        let mut ch = c;
        let mut ups = Vec::new();
        for i in (0..cfg.downsamples).rev() {
            let out = cfg.base_channels << i;
            ups.push(Conv2d::new(
                store,
                &format!("{name}.up{i}"),
                ch,
                out,
                3,
                1,
                1,
                g,
            )?);
            ch = out;
        }
        let out = Conv2d::new(
            store,
            &format!("{name}.out"),
            ch,
            out_channels,
            3,
            1,
            1,
            1.0,
        )?;
        Ok(Self {
            res,
            mapper_hidden,
            mapper_out,
            ups,
            out,
            content_channels: c,
        })
    }

    /// Per-layer `(gamma, beta)` pairs of shape `[B, C]` produced from a style code.
    fn affines(&self, style: &Tensor) -> Result<Vec<(Tensor, Tensor)>> {
        let raw = self
            .mapper_out
            .forward(&self.mapper_hidden.forward(style)?.relu()?)?;
        let c = self.content_channels;
        (0..2 * self.res.len())
            .map(|i| {
                let gamma = (raw.narrow(1, 2 * i * c, c)? + 1.0)?;
                let beta = raw.narrow(1, (2 * i + 1) * c, c)?;
                Ok((gamma, beta))
            })
            .collect()
    }

    fn forward(&self, content: &Tensor, style: &Tensor) -> Result<Tensor> {
        let affines = self.affines(style)?;
        let mut h = content.clone();
        for (i, r) in self.res.iter().enumerate() {
            let (g1, b1) = &affines[2 * i];
            let (g2, b2) = &affines[2 * i + 1];
            h = r.forward_adain(&h, (g1, b1), (g2, b2))?;
        }
        for up in &self.ups {
            h = up.forward(&upsample_nearest(&h, 2)?)?.relu()?;
        }
        self.out.forward(&h)
    }
}

#[derive(Debug, Clone)]
struct Discriminator {
    downs: Vec<Conv2d>,
    head: Conv2d,
}

impl Discriminator {
    fn new(
        store: &mut ParamStore,
        name: &str,
        in_channels: usize,
        cfg: &NetConfig,
    ) -> Result<Self> {
        let g = 2f64.sqrt();
        let mut ch = in_channels;
        let mut downs = Vec::new();
        for i in 0..cfg.disc_downsamples {
            let out = cfg.disc_channels << i;
            downs.push(Conv2d::new(
                store,
                &format!("{name}.down{i}"),
                ch,
                out,
                4,
                2,
                1,
                g,
            )?);
            ch = out;
        }
        let head = Conv2d::new(store, &format!("{name}.head"), ch, 1, 1, 1, 0, 1.0)?;
        Ok(Self { downs, head })
    }

    fn forward(&self, x: &Tensor) -> Result<Tensor> {
        let mut h = x.clone();
        for d in &self.downs {
            h = leaky_relu(&d.forward(&h)?, 0.2)?;
        }
        self.head.forward(&h)
    }
}

#[derive(Debug, Clone)]
struct Networks {
    content: [ContentEncoder; 2],
    style: [StyleEncoder; 2],
    decoder: [Decoder; 2],
    disc: [Discriminator; 2],
}

fn idx(d: Domain) -> usize {
    match d {
        Domain::Source => 0,
        Domain::Target => 1,
    }
}

impl Networks {
    fn build(
        gen: &mut ParamStore,
        disc: &mut ParamStore,
        cfg: &NetConfig,
        source: &DomainSpec,
        target: &DomainSpec,
    ) -> Result<Self> {
        let (cs, ct) = (source.channels, target.channels);
        Ok(Self {
            content: [
                ContentEncoder::new(gen, "content_source", cs, cfg)?,
                ContentEncoder::new(gen, "content_target", ct, cfg)?,
            ],
            style: [
                StyleEncoder::new(gen, "style_source", cs, cfg)?,
                StyleEncoder::new(gen, "style_target", ct, cfg)?,
            ],
            decoder: [
                Decoder::new(gen, "decoder_source", cs, cfg)?,
                Decoder::new(gen, "decoder_target", ct, cfg)?,
            ],
            disc: [
                Discriminator::new(disc, "disc_source", cs, cfg)?,
                Discriminator::new(disc, "disc_target", ct, cfg)?,
            ],
        })
    }
}

/// Outputs of one translation forward pass through both directions.
#[derive(Debug, Clone)]
pub struct TranslationPass {
    pub content_source: Tensor,
    pub content_target: Tensor,
    pub style_source: Tensor,
    pub style_target: Tensor,
    pub recon_source: Tensor,
    pub recon_target: Tensor,
    /// Source images rendered in the target domain with a prior style.
    pub source_to_target: Tensor,
    pub target_to_source: Tensor,
    pub content_source_rec: Tensor,
    pub content_target_rec: Tensor,
    pub style_target_rec: Tensor,
    pub style_source_rec: Tensor,
    pub cycle_source: Tensor,
    pub cycle_target: Tensor,
}

/// The translation model: six generator networks and two discriminators.
#[derive(Debug, Clone)]
pub struct TranslationModel {
    cfg: NetConfig,
    source: DomainSpec,
    target: DomainSpec,
    generators: ParamStore,
    discriminators: ParamStore,
    nets: Networks,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
struct CheckpointConfig {
    net: NetConfig,
    source: DomainSpec,
    target: DomainSpec,
}

impl TranslationModel {
    pub fn new(
        source: &DomainSpec,
        target: &DomainSpec,
        cfg: NetConfig,
        seed: u64,
        dtype: DType,
    ) -> Result<Self> {
        let generators = ParamStore::new(seed, dtype);
        let discriminators = ParamStore::new(seed ^ 0xD15C, dtype);
        Self::from_stores(source, target, cfg, generators, discriminators)
    }

    fn from_stores(
        source: &DomainSpec,
        target: &DomainSpec,
        cfg: NetConfig,
        mut generators: ParamStore,
        mut discriminators: ParamStore,
    ) -> Result<Self> {
        cfg.validate()?;
        source.validate()?;
        target.validate()?;
        source.check_aligned(target)?;
        cfg.check_spec(source)?;
        let nets = Networks::build(&mut generators, &mut discriminators, &cfg, source, target)?;
        Ok(Self {
            cfg,
            source: source.clone(),
            target: target.clone(),
            generators,
            discriminators,
            nets,
        })
    }

    pub fn config(&self) -> &NetConfig {
        &self.cfg
    }

    pub fn spec(&self, d: Domain) -> &DomainSpec {
        match d {
            Domain::Source => &self.source,
            Domain::Target => &self.target,
        }
    }

    pub fn dtype(&self) -> DType {
        self.generators.dtype()
    }

    pub fn generator_params(&self) -> &ParamStore {
        &self.generators
    }

    pub fn discriminator_params(&self) -> &ParamStore {
        &self.discriminators
    }

    /// Copy whose networks never receive gradients.
    pub fn frozen(&self) -> Result<Self> {
        Self::from_stores(
            &self.source,
            &self.target,
            self.cfg,
            self.generators.frozen(),
            self.discriminators.frozen(),
        )
    }

    /// Independent copy (own storage), optionally in another dtype.
    pub fn deep_copy(&self, dtype: DType) -> Result<Self> {
        Self::from_stores(
            &self.source,
            &self.target,
            self.cfg,
            self.generators.deep_copy(dtype)?,
            self.discriminators.deep_copy(dtype)?,
        )
    }

    pub fn checksum(&self) -> Result<u64> {
        Ok(self.generators.checksum()? ^ self.discriminators.checksum()?.rotate_left(1))
    }

    fn check_input(&self, x: &Tensor, d: Domain) -> Result<()> {
        let spec = self.spec(d);
        let dims = x.dims();
        if dims.len() != 4
            || dims[1] != spec.channels
            || dims[2] != spec.height
            || dims[3] != spec.width
        {
            return Err(Error::Shape(format!(
                "expected [B, {}, {}, {}] for domain `{}`, got {:?}",
                spec.channels, spec.height, spec.width, spec.name, dims
            )));
        }
        Ok(())
    }

    fn check_style(&self, s: &Tensor) -> Result<()> {
        let dims = s.dims();
        if dims.len() != 2 || dims[1] != self.cfg.style_dim {
            return Err(Error::Shape(format!(
                "style codes must be [B, {}], got {:?}",
                self.cfg.style_dim, dims
            )));
        }
        Ok(())
    }

    /// `[B, C_d, H, W] -> [B, C_c, H/f, W/f]`
    pub fn encode_content(&self, x: &Tensor, d: Domain) -> Result<Tensor> {
        self.check_input(x, d)?;
        self.nets.content[idx(d)].forward(&x.to_dtype(self.dtype())?)
    }

    /// `[B, C_d, H, W] -> [B, d_s]`
    pub fn encode_style(&self, x: &Tensor, d: Domain) -> Result<Tensor> {
        self.check_input(x, d)?;
        self.nets.style[idx(d)].forward(&x.to_dtype(self.dtype())?)
    }

    /// Decodes content codes with style codes into domain `d` images.
    pub fn decode(&self, content: &Tensor, style: &Tensor, d: Domain) -> Result<Tensor> {
        let dims = content.dims();
        let f = self.cfg.downsampling_factor();
        let spec = self.spec(d);
        if dims.len() != 4
            || dims[1] != self.cfg.content_channels
            || dims[2] * f != spec.height
            || dims[3] * f != spec.width
        {
            return Err(Error::Shape(format!(
                "content codes must be [B, {}, {}, {}], got {:?}",
                self.cfg.content_channels,
                spec.height / f,
                spec.width / f,
                dims
            )));
        }
        self.check_style(style)?;
        if style.dims()[0] != dims[0] {
            return Err(Error::Shape("content and style batch sizes differ".into()));
        }
        self.nets.decoder[idx(d)].forward(content, style)
    }

    /// Standard-normal style codes `[batch, d_s]`.
    pub fn sample_style_prior(&self, rng: &mut impl Rng, batch: usize) -> Result<Tensor> {
        sample_style_prior(rng, batch, self.cfg.style_dim, self.dtype())
    }

    /// `decode(encode_content(x), s)` in the other domain.
    pub fn translate(&self, x: &Tensor, direction: Direction, style: &Tensor) -> Result<Tensor> {
        let c = self.encode_content(x, direction.from_domain())?;
        self.decode(&c, style, direction.to_domain())
    }

    /// Source image through the target domain and back, re-using its own style:
    /// `G_S(E_T^c(G_T(E_S^c(x), s_T)), E_S^s(x))`.
    pub fn cycle(&self, x_source: &Tensor, style_target: &Tensor) -> Result<Tensor> {
        let fake = self.translate(x_source, Direction::SourceToTarget, style_target)?;
        let c = self.encode_content(&fake, Domain::Target)?;
        let s = self.encode_style(x_source, Domain::Source)?;
        self.decode(&c, &s, Domain::Source)
    }

    /// Per-patch logits `[B, 1, H/p, W/p]`.
    pub fn discriminate_logits(&self, x: &Tensor, d: Domain) -> Result<Tensor> {
        self.check_input(x, d)?;
        self.nets.disc[idx(d)].forward(&x.to_dtype(self.dtype())?)
    }

    /// Per-patch real/fake probabilities in `(0, 1)`.
    pub fn discriminate(&self, x: &Tensor, d: Domain) -> Result<Tensor> {
        Ok(candle_nn::ops::sigmoid(&self.discriminate_logits(x, d)?)?)
    }

    /// Every image the translation objective needs for one batch pair.
    pub fn forward_pass(
        &self,
        x_source: &Tensor,
        x_target: &Tensor,
        prior_source: &Tensor,
        prior_target: &Tensor,
    ) -> Result<TranslationPass> {
        let content_source = self.encode_content(x_source, Domain::Source)?;
        let content_target = self.encode_content(x_target, Domain::Target)?;
        let style_source = self.encode_style(x_source, Domain::Source)?;
        let style_target = self.encode_style(x_target, Domain::Target)?;
        let recon_source = self.decode(&content_source, &style_source, Domain::Source)?;
        let recon_target = self.decode(&content_target, &style_target, Domain::Target)?;
        let source_to_target = self.decode(&content_source, prior_target, Domain::Target)?;
        let target_to_source = self.decode(&content_target, prior_source, Domain::Source)?;
        let content_source_rec = self.encode_content(&source_to_target, Domain::Target)?;
        let content_target_rec = self.encode_content(&target_to_source, Domain::Source)?;
        let style_target_rec = self.encode_style(&source_to_target, Domain::Target)?;
        let style_source_rec = self.encode_style(&target_to_source, Domain::Source)?;
        let cycle_source = self.decode(&content_source_rec, &style_source, Domain::Source)?;
        let cycle_target = self.decode(&content_target_rec, &style_target, Domain::Target)?;
        Ok(TranslationPass {
            content_source,
            content_target,
            style_source,
            style_target,
            recon_source,
            recon_target,
            source_to_target,
            target_to_source,
            content_source_rec,
            content_target_rec,
            style_target_rec,
            style_source_rec,
            cycle_source,
            cycle_target,
        })
    }

    pub fn save(&self, path: &Path, iteration: u64) -> Result<()> {
        let mut tensors = BTreeMap::new();
        for (k, t) in self.generators.tensors() {
            tensors.insert(format!("gen/{k}"), t);
        }
        for (k, t) in self.discriminators.tensors() {
            tensors.insert(format!("disc/{k}"), t);
        }
        let config = serde_json::to_value(CheckpointConfig {
            net: self.cfg,
            source: self.source.clone(),
            target: self.target.clone(),
        })?;
        write_checkpoint(path, "translation", config, iteration, &tensors)
    }

    /// Loads a model and its training-iteration counter.
    pub fn load(path: &Path, dtype: DType) -> Result<(Self, u64)> {
        let (header, tensors) = read_checkpoint(path)?;
        if header.kind != "translation" {
            return Err(Error::data(
                path,
                format!("expected a translation checkpoint, found `{}`", header.kind),
            ));
        }
        let cfg: CheckpointConfig =
            serde_json::from_value(header.config).map_err(|e| Error::data(path, e.to_string()))?;
        let mut gen = BTreeMap::new();
        let mut disc = BTreeMap::new();
        for (k, t) in tensors {
            if let Some(rest) = k.strip_prefix("gen/") {
                gen.insert(rest.to_string(), t);
            } else if let Some(rest) = k.strip_prefix("disc/") {
                disc.insert(rest.to_string(), t);
            } else {
                return Err(Error::data(path, format!("unexpected tensor `{k}`")));
            }
        }
        let gen_store = ParamStore::from_tensors(gen, dtype)?;
        let disc_store = ParamStore::from_tensors(disc, dtype)?;
        let (n_gen, n_disc) = (gen_store.len(), disc_store.len());
        let model = Self::from_stores(&cfg.source, &cfg.target, cfg.net, gen_store, disc_store)?;
        if model.generators.len() != n_gen || model.discriminators.len() != n_disc {
            return Err(Error::data(
                path,
                "checkpoint tensors do not match the network layout",
            ));
        }
        Ok((model, header.iteration))
    }
}

/// Standard-normal style codes `[batch, dim]`.
pub fn sample_style_prior(
    rng: &mut impl Rng,
    batch: usize,
    dim: usize,
    dtype: DType,
) -> Result<Tensor> {
    let v: Vec<f32> = (0..batch * dim)
        .map(|_| rng.sample(StandardNormal))
        .collect();
    Ok(Tensor::from_vec(v, (batch, dim), &device())?.to_dtype(dtype)?)
}
