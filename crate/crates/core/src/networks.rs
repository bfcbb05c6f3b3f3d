//! The shared encoder-decoder generator and the patch discriminators.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::frames::{batch_tensor, Clip, Frame, CHANNELS};
use crate::nn::{join, Conv2d, ConvTranspose2d, Init, InstanceNorm, Module, Param};
use crate::tensor::{Real, Tensor};

const LEAK: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct GeneratorConfig {
    pub image_size: usize,
    /// Number of stride-2 down/up levels.
    pub depth: usize,
    /// Channels at the first level; doubles per level up to 8x.
    pub base_width: usize,
    pub in_channels: usize,
    pub out_channels: usize,
}

impl GeneratorConfig {
    pub fn desk() -> Self {
        Self { image_size: 64, depth: 6, base_width: 32, in_channels: 6, out_channels: 3 }
    }

    /// 256-pixel frames, eight levels, 64 base channels.
    pub fn full_scale() -> Self {
        Self { image_size: 256, depth: 8, base_width: 64, in_channels: 6, out_channels: 3 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.depth < 2 {
            return Err(Error::config(format!("generator depth {} < 2", self.depth)));
        }
        if self.depth >= usize::BITS as usize || self.image_size % (1 << self.depth) != 0 || self.image_size == 0 {
            return Err(Error::config(format!(
                "image size {} is not divisible by 2^{}",
                self.image_size, self.depth
            )));
        }
        if self.base_width < 8 {
            return Err(Error::config(format!("generator base width {} < 8", self.base_width)));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::config("generator channel counts must be positive"));
        }
        Ok(())
    }

    fn width(&self, level: usize) -> usize {
        self.base_width << level.min(3)
    }
}

#[derive(Clone, Debug)]
struct DownBlock<F> {
    conv: Conv2d<F>,
    norm: Option<InstanceNorm<F>>,
}

#[derive(Clone, Debug)]
struct UpBlock<F> {
    deconv: ConvTranspose2d<F>,
    norm: Option<InstanceNorm<F>>,
}

/// U-Net style encoder-decoder with skip connections and a `tanh` output.
#[derive(Clone, Debug)]
pub struct Generator<F> {
    config: GeneratorConfig,
    down: Vec<DownBlock<F>>,
    /// Indexed by level; `up[0]` produces the full-resolution output.
    up: Vec<UpBlock<F>>,
}

/// Graph-level generator result.
#[derive(Clone, Debug)]
pub struct GeneratorOutput {
    pub image: Var,
    /// Decoder activations, coarsest first; the last entry is the
    /// full-resolution pre-activation output map.
    pub pyramid: Vec<Var>,
}

/// Decoder activations of one forward pass, coarsest first.
pub type FeaturePyramid<F> = Vec<Tensor<F>>;

pub fn build_generator<F: Real>(cfg: GeneratorConfig, init_seed: u64) -> Result<Generator<F>> {
    cfg.validate()?;
    let mut init = Init::new(init_seed);
    let d = cfg.depth;
    let down = (0..d)
        .map(|k| {
            let cin = if k == 0 { cfg.in_channels } else { cfg.width(k - 1) };
            let norm = k > 0 && k + 1 < d;
            DownBlock {
                conv: Conv2d::new(&mut init, cin, cfg.width(k), 4, 2, 1, !norm),
                norm: norm.then(|| InstanceNorm::new(&mut init, cfg.width(k))),
            }
        })
        .collect();
    let mut up: Vec<UpBlock<F>> = (0..d)
        .rev()
        .map(|k| {
            let cin = if k + 1 == d { cfg.width(k) } else { 2 * cfg.width(k) };
            let cout = if k == 0 { cfg.out_channels } else { cfg.width(k - 1) };
            let norm = k > 0;
            UpBlock {
                deconv: ConvTranspose2d::new(&mut init, cin, cout, 4, 2, 1, !norm),
                norm: norm.then(|| InstanceNorm::new(&mut init, cout)),
            }
        })
        .collect();
    up.reverse();
    Ok(Generator { config: cfg, down, up })
}

impl<F: Real> Generator<F> {
    pub fn config(&self) -> &GeneratorConfig {
        &self.config
    }

    /// `frame` and `sem` are `[N, 3, H, W]`; they are concatenated channel-wise.
    pub fn forward_graph(&self, g: &Graph<F>, frame: Var, sem: Var) -> GeneratorOutput {
        let mut h = g.cat_channels(&[frame, sem]);
        let mut skips = Vec::with_capacity(self.config.depth);
        for (k, block) in self.down.iter().enumerate() {
            if k > 0 {
                h = g.leaky_relu(h, LEAK);
            }
            h = block.conv.forward(g, h);
            if let Some(n) = &block.norm {
                h = n.forward(g, h);
            }
            skips.push(h);
        }
        let mut pyramid = Vec::with_capacity(self.config.depth);
        let mut x = skips[self.config.depth - 1];
        for k in (0..self.config.depth).rev() {
            let block = &self.up[k];
            x = g.relu(x);
            x = block.deconv.forward(g, x);
            if let Some(n) = &block.norm {
                x = n.forward(g, x);
            }
            pyramid.push(x);
            if k > 0 {
                x = g.cat_channels(&[x, skips[k - 1]]);
            }
        }
        GeneratorOutput { image: g.tanh(x), pyramid }
    }

    pub fn cast<G: Real>(&self) -> Generator<G> {
        Generator {
            config: self.config,
            down: self.down.iter().map(|b| DownBlock { conv: b.conv.cast(), norm: b.norm.as_ref().map(InstanceNorm::cast) }).collect(),
            up: self
                .up
                .iter()
                .map(|b| UpBlock { deconv: b.deconv.cast(), norm: b.norm.as_ref().map(InstanceNorm::cast) })
                .collect(),
        }
    }
}

impl<F: Real> Module<F> for Generator<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        for (k, b) in self.down.iter().enumerate() {
            b.conv.visit(&join(prefix, &format!("down{k}.conv")), f);
            if let Some(n) = &b.norm {
                n.visit(&join(prefix, &format!("down{k}.norm")), f);
            }
        }
        for (k, b) in self.up.iter().enumerate() {
            b.deconv.visit(&join(prefix, &format!("up{k}.deconv")), f);
            if let Some(n) = &b.norm {
                n.visit(&join(prefix, &format!("up{k}.norm")), f);
            }
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (k, b) in self.down.iter_mut().enumerate() {
            b.conv.visit_mut(&join(prefix, &format!("down{k}.conv")), f);
            if let Some(n) = &mut b.norm {
                n.visit_mut(&join(prefix, &format!("down{k}.norm")), f);
            }
        }
        for (k, b) in self.up.iter_mut().enumerate() {
            b.deconv.visit_mut(&join(prefix, &format!("up{k}.deconv")), f);
            if let Some(n) = &mut b.norm {
                n.visit_mut(&join(prefix, &format!("up{k}.norm")), f);
            }
        }
    }
}

fn check_frame_size(frame: &Frame, size: usize, what: &str) -> Result<()> {
    if frame.size() != (size, size) {
        return Err(Error::shape(format!(
            "{what} is {}x{}, network expects {size}x{size}",
            frame.height(),
            frame.width()
        )));
    }
    Ok(())
}

/// `G(frame, sem)` for a single frame, with the decoder feature pyramid.
pub fn generator_forward<F: Real>(gen: &Generator<F>, frame: &Frame, sem: &Frame) -> Result<(Frame, FeaturePyramid<F>)> {
    if frame.size() != sem.size() {
        return Err(Error::shape(format!(
            "frame {}x{} and semantic map {}x{} differ",
            frame.height(),
            frame.width(),
            sem.height(),
            sem.width()
        )));
    }
    check_frame_size(frame, gen.config.image_size, "frame")?;
    let g = Graph::new();
    let out = gen.forward_graph(&g, g.input(frame.to_tensor()), g.input(sem.to_tensor()));
    let image = Frame::from_batch(&g.value(out.image), 0)?;
    let pyramid = out.pyramid.iter().map(|&v| (*g.value(v)).clone()).collect();
    Ok((image, pyramid))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DiscriminatorConfig {
    pub image_size: usize,
    pub in_channels: usize,
    pub base_width: usize,
    /// Number of stride-2 convolutions before the two stride-1 layers.
    pub n_down: usize,
}

impl DiscriminatorConfig {
    /// Spatial discriminator over `(x_t, y_t)` pairs.
    pub fn spatial(image_size: usize, base_width: usize, n_down: usize) -> Self {
        Self { image_size, in_channels: 2 * CHANNELS, base_width, n_down }
    }

    /// Temporal discriminator over an anchor frame plus `clip_length` frames.
    pub fn temporal(image_size: usize, base_width: usize, n_down: usize, clip_length: usize) -> Self {
        Self { image_size, in_channels: CHANNELS * (clip_length + 1), base_width, n_down }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_down == 0 || self.base_width == 0 {
            return Err(Error::config("discriminator needs at least one down-sampling layer and positive width"));
        }
        let reduced = self.image_size >> self.n_down;
        if self.image_size % (1 << self.n_down) != 0 || reduced < 3 {
            return Err(Error::config(format!(
                "image size {} too small for a {}-level patch discriminator",
                self.image_size, self.n_down
            )));
        }
        Ok(())
    }

    pub fn grid_size(&self) -> usize {
        logit_grid_size(self.image_size, self.n_down)
    }
}

/// Side of the patch logit grid: each stride-2 layer halves the input, each
/// of the two trailing 4x4 stride-1 layers (padding 1) removes one pixel.
pub fn logit_grid_size(image_size: usize, n_down: usize) -> usize {
    (image_size >> n_down) - 2
}

#[derive(Clone, Debug)]
struct DiscBlock<F> {
    conv: Conv2d<F>,
    norm: Option<InstanceNorm<F>>,
}

/// Fully convolutional discriminator emitting a grid of raw logits.
#[derive(Clone, Debug)]
pub struct PatchDiscriminator<F> {
    config: DiscriminatorConfig,
    blocks: Vec<DiscBlock<F>>,
    head: Conv2d<F>,
}

pub fn build_discriminator<F: Real>(cfg: DiscriminatorConfig, init_seed: u64) -> Result<PatchDiscriminator<F>> {
    cfg.validate()?;
    let mut init = Init::new(init_seed);
    let width = |i: usize| cfg.base_width << i.min(3);
    let mut blocks = Vec::with_capacity(cfg.n_down + 1);
    for i in 0..=cfg.n_down {
        let cin = if i == 0 { cfg.in_channels } else { width(i - 1) };
        let stride = if i < cfg.n_down { 2 } else { 1 };
        let norm = i > 0;
        blocks.push(DiscBlock {
            conv: Conv2d::new(&mut init, cin, width(i), 4, stride, 1, !norm),
            norm: norm.then(|| InstanceNorm::new(&mut init, width(i))),
        });
    }
    let head = Conv2d::new(&mut init, width(cfg.n_down), 1, 4, 1, 1, true);
    Ok(PatchDiscriminator { config: cfg, blocks, head })
}

impl<F: Real> PatchDiscriminator<F> {
    pub fn config(&self) -> &DiscriminatorConfig {
        &self.config
    }

    /// `input` is the channel-concatenated conditional input `[N, C, H, W]`.
    pub fn forward_graph(&self, g: &Graph<F>, input: Var) -> Var {
        let mut h = input;
        for b in &self.blocks {
            h = b.conv.forward(g, h);
            if let Some(n) = &b.norm {
                h = n.forward(g, h);
            }
            h = g.leaky_relu(h, LEAK);
        }
        self.head.forward(g, h)
    }

    pub fn cast<G: Real>(&self) -> PatchDiscriminator<G> {
        PatchDiscriminator {
            config: self.config,
            blocks: self
                .blocks
                .iter()
                .map(|b| DiscBlock { conv: b.conv.cast(), norm: b.norm.as_ref().map(InstanceNorm::cast) })
                .collect(),
            head: self.head.cast(),
        }
    }
}

impl<F: Real> Module<F> for PatchDiscriminator<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        for (i, b) in self.blocks.iter().enumerate() {
            b.conv.visit(&join(prefix, &format!("layer{i}.conv")), f);
            if let Some(n) = &b.norm {
                n.visit(&join(prefix, &format!("layer{i}.norm")), f);
            }
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (i, b) in self.blocks.iter_mut().enumerate() {
            b.conv.visit_mut(&join(prefix, &format!("layer{i}.conv")), f);
            if let Some(n) = &mut b.norm {
                n.visit_mut(&join(prefix, &format!("layer{i}.norm")), f);
            }
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// `D_S(x_t, y_t)`: raw logit grid `[1, 1, g, g]`.
pub fn discriminator_forward_spatial<F: Real>(
    disc: &PatchDiscriminator<F>,
    x_frame: &Frame,
    y_frame: &Frame,
) -> Result<Tensor<F>> {
    if disc.config.in_channels != 2 * CHANNELS {
        return Err(Error::shape(format!("spatial discriminator has {} input channels", disc.config.in_channels)));
    }
    if x_frame.size() != y_frame.size() {
        return Err(Error::shape("discriminator inputs differ in size"));
    }
    check_frame_size(x_frame, disc.config.image_size, "discriminator input")?;
    let g = Graph::new();
    let x = g.input(x_frame.to_tensor());
    let y = g.input(y_frame.to_tensor());
    let out = disc.forward_graph(&g, g.cat_channels(&[x, y]));
    Ok((*g.value(out)).clone())
}

/// `D_T(anchor, seq)`: the anchor and all frames are channel-concatenated.
pub fn discriminator_forward_temporal<F: Real>(
    disc: &PatchDiscriminator<F>,
    anchor: &Frame,
    seq: &Clip,
) -> Result<Tensor<F>> {
    let expected = disc.config.in_channels / CHANNELS - 1;
    if seq.len() != expected {
        return Err(Error::shape(format!("temporal discriminator expects {expected} frames, got {}", seq.len())));
    }
    check_frame_size(anchor, disc.config.image_size, "anchor frame")?;
    if seq.frame_size() != anchor.size() {
        return Err(Error::shape("sequence frames differ in size from the anchor"));
    }
    let g = Graph::new();
    let mut parts = vec![g.input(anchor.to_tensor())];
    parts.extend(seq.frames().iter().map(|f| g.input(f.to_tensor())));
    let out = disc.forward_graph(&g, g.cat_channels(&parts));
    Ok((*g.value(out)).clone())
}

/// Stack frames into a graph input.
pub fn input_batch<F: Real>(g: &Graph<F>, frames: &[&Frame]) -> Result<Var> {
    Ok(g.input(batch_tensor(frames)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::nn::params_equal;

    fn noise_frame(size: usize, seed: u32) -> Frame {
        let data = (0..3 * size * size).map(|i| (i as f32 * 0.731 + seed as f32 * 1.7).sin()).collect();
        Frame::new(size, size, data).unwrap()
    }

    fn small_cfg() -> GeneratorConfig {
        GeneratorConfig { image_size: 16, depth: 3, base_width: 8, in_channels: 6, out_channels: 3 }
    }

    #[test]
    fn generator_build_is_seeded() {
        let a: Generator<f32> = build_generator(small_cfg(), 11).unwrap();
        let b: Generator<f32> = build_generator(small_cfg(), 11).unwrap();
        let c: Generator<f32> = build_generator(small_cfg(), 12).unwrap();
        assert!(params_equal(&a, &b));
        assert!(!params_equal(&a, &c));
    }

    #[test]
    fn generator_depth_too_large_for_image() {
        let cfg = GeneratorConfig { depth: 7, ..GeneratorConfig::desk() };
        assert!(matches!(build_generator::<f32>(cfg, 0), Err(Error::Config(_))));
    }

    #[test]
    fn full_scale_config_is_valid() {
        assert!(GeneratorConfig::full_scale().validate().is_ok());
        assert_eq!(GeneratorConfig::full_scale().image_size, 256);
    }

    #[test]
    fn generator_output_range_shape_and_pyramid() {
        let gen: Generator<f32> = build_generator(small_cfg(), 1).unwrap();
        let (out, pyramid) = generator_forward(&gen, &noise_frame(16, 1), &noise_frame(16, 2)).unwrap();
        assert_eq!(out.size(), (16, 16));
        assert!(out.in_range());
        assert_eq!(pyramid.len(), 3);
        assert_eq!(pyramid.last().unwrap().shape(), &[1, 3, 16, 16]);
        assert_eq!(pyramid[0].shape(), &[1, 16, 4, 4]);
        let (again, _) = generator_forward(&gen, &noise_frame(16, 1), &noise_frame(16, 2)).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn generator_rejects_mismatched_inputs() {
        let gen: Generator<f32> = build_generator(small_cfg(), 1).unwrap();
        assert!(matches!(generator_forward(&gen, &noise_frame(16, 1), &noise_frame(8, 2)), Err(Error::Shape(_))));
        assert!(matches!(generator_forward(&gen, &noise_frame(8, 1), &noise_frame(8, 2)), Err(Error::Shape(_))));
    }

    #[test]
    fn saturated_generator_stays_in_range() {
        let mut gen: Generator<f32> = build_generator(small_cfg(), 1).unwrap();
        gen.visit_mut("", &mut |_, p| p.value_mut().data_mut().iter_mut().for_each(|v| *v *= 500.0));
        let big = Frame::new(16, 16, vec![1e3; 3 * 256]).unwrap();
        let (out, _) = generator_forward(&gen, &big, &noise_frame(16, 3)).unwrap();
        assert!(out.all_finite() && out.in_range());
    }

    #[test]
    fn spatial_grid_sizes() {
        assert_eq!(logit_grid_size(64, 3), 6);
        assert_eq!(logit_grid_size(256, 3), 30);
        let d: PatchDiscriminator<f32> = build_discriminator(DiscriminatorConfig::spatial(64, 8, 3), 2).unwrap();
        let out = discriminator_forward_spatial(&d, &noise_frame(64, 1), &noise_frame(64, 2)).unwrap();
        assert_eq!(out.shape(), &[1, 1, 6, 6]);
        let again = discriminator_forward_spatial(&d, &noise_frame(64, 1), &noise_frame(64, 2).clone()).unwrap();
        assert_eq!(out, again);
    }

    #[test]
    fn temporal_discriminator_shapes_and_order_sensitivity() {
        let cfg = DiscriminatorConfig::temporal(64, 8, 3, 5);
        assert_eq!(cfg.in_channels, 18);
        let d: PatchDiscriminator<f32> = build_discriminator(cfg, 3).unwrap();
        let frames: Vec<Frame> = (0..5).map(|i| noise_frame(64, 10 + i)).collect();
        let seq = Clip::new(frames.clone()).unwrap();
        let anchor = noise_frame(64, 0);
        let out = discriminator_forward_temporal(&d, &anchor, &seq).unwrap();
        assert_eq!(out.shape(), &[1, 1, 6, 6]);
        assert_eq!(out, discriminator_forward_temporal(&d, &anchor, &seq).unwrap());
        let mut permuted = frames;
        permuted.swap(0, 3);
        let out_p = discriminator_forward_temporal(&d, &anchor, &Clip::new(permuted).unwrap()).unwrap();
        assert!(out.max_abs_diff(&out_p) > 0.0);
        let short = Clip::new(seq.frames()[..4].to_vec()).unwrap();
        assert!(matches!(discriminator_forward_temporal(&d, &anchor, &short), Err(Error::Shape(_))));
    }

    #[test]
    fn discriminator_rejects_size_mismatch() {
        let d: PatchDiscriminator<f32> = build_discriminator(DiscriminatorConfig::spatial(16, 8, 1), 2).unwrap();
        assert!(discriminator_forward_spatial(&d, &noise_frame(16, 1), &noise_frame(8, 1)).is_err());
        assert!(build_discriminator::<f32>(DiscriminatorConfig::spatial(8, 8, 2), 0).is_err());
    }
}
