//! Attention fusion of the four branch outputs into the final sequence.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::branches::{Branch, GenerationBundle};
use crate::error::{Error, Result};
use crate::frames::{batch_tensor, Clip, Frame};
use crate::nn::{join, Conv2d, ConvTranspose2d, Init, Module, Param};
use crate::tensor::{Real, Tensor};

const LEAK: f64 = 0.2;

/// What the per-branch feature stacks consume.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionInput {
    /// The generated frames themselves.
    #[default]
    Frames,
    /// The generator's half-resolution decoder activations.
    DecoderFeatures,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FusionConfig {
    pub image_size: usize,
    /// Channels produced by each per-branch stack.
    pub feature_width: usize,
    pub input: FusionInput,
    /// Channels of the decoder activation when `input` is `DecoderFeatures`.
    pub decoder_channels: usize,
}

impl FusionConfig {
    pub fn new(image_size: usize, feature_width: usize) -> Self {
        Self { image_size, feature_width, input: FusionInput::Frames, decoder_channels: 0 }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 2 || self.image_size % 2 != 0 {
            return Err(Error::config(format!("fusion image size {} must be even and positive", self.image_size)));
        }
        if self.feature_width == 0 {
            return Err(Error::config("fusion feature width must be positive"));
        }
        if self.input == FusionInput::DecoderFeatures && self.decoder_channels == 0 {
            return Err(Error::config("decoder-feature fusion needs the decoder channel count"));
        }
        Ok(())
    }
}

/// Per-branch conv stacks, a concatenation, one transposed-conv upsampling
/// stage and a 4-channel softmax attention head.
#[derive(Clone, Debug)]
pub struct FusionNet<F> {
    config: FusionConfig,
    pub stacks: [Conv2d<F>; 4],
    pub up: ConvTranspose2d<F>,
    pub head: Conv2d<F>,
}

/// Per-pixel weights of the four branches for one frame, each `H*W`.
#[derive(Clone, Debug, PartialEq)]
pub struct AttentionMaps {
    pub height: usize,
    pub width: usize,
    pub maps: [Vec<f32>; 4],
}

impl AttentionMaps {
    /// Sample `index` of an `[N, 4, H, W]` attention tensor.
    pub fn from_batch<F: Real>(t: &Tensor<F>, index: usize) -> Self {
        let (_, _, height, width) = t.dims4();
        let hw = height * width;
        let base = index * 4 * hw;
        Self {
            height,
            width,
            maps: std::array::from_fn(|k| t.data()[base + k * hw..base + (k + 1) * hw].iter().map(|v| v.as_f64() as f32).collect()),
        }
    }

    pub fn weight(&self, branch: Branch, y: usize, x: usize) -> f32 {
        self.maps[branch.index()][y * self.width + x]
    }

    pub fn sum_at(&self, y: usize, x: usize) -> f32 {
        self.maps.iter().map(|m| m[y * self.width + x]).sum()
    }
}

#[derive(Clone, Copy, Debug)]
pub struct FusionOutput {
    /// Fused frames, `[N, 3, H, W]`.
    pub image: Var,
    /// Softmax weights, `[N, 4, H, W]`, channel `k` belonging to `Branch::ALL[k]`.
    pub attention: Var,
}

pub fn build_fusion_net<F: Real>(cfg: FusionConfig, seed: u64) -> Result<FusionNet<F>> {
    cfg.validate()?;
    let mut init = Init::new(seed);
    let fw = cfg.feature_width;
    let stacks = std::array::from_fn(|_| match cfg.input {
        FusionInput::Frames => Conv2d::new(&mut init, 3, fw, 4, 2, 1, true),
        FusionInput::DecoderFeatures => Conv2d::new(&mut init, cfg.decoder_channels, fw, 3, 1, 1, true),
    });
    let up = ConvTranspose2d::new(&mut init, 4 * fw, fw, 4, 2, 1, true);
    let head = Conv2d::new(&mut init, fw, 4, 3, 1, 1, true);
    Ok(FusionNet { config: cfg, stacks, up, head })
}

impl<F: Real> FusionNet<F> {
    pub fn config(&self) -> &FusionConfig {
        &self.config
    }

    /// `frames[k]` are the branch outputs `[N, 3, H, W]` in [`Branch::ALL`]
    /// order; `inputs[k]` is what stack `k` sees (the frames themselves, or
    /// the matching decoder activations).
    pub fn forward_graph(&self, g: &Graph<F>, frames: [Var; 4], inputs: [Var; 4]) -> FusionOutput {
        let feats: Vec<Var> = self.stacks.iter().zip(inputs).map(|(c, x)| g.leaky_relu(c.forward(g, x), LEAK)).collect();
        let cat = g.cat_channels(&feats);
        let resized = g.relu(self.up.forward(g, cat));
        let attention = g.softmax_channels(self.head.forward(g, resized));
        // y1 + sum_k a_k (y_k - y1): exact when all branches agree or a_1 = 1
        let mut terms = vec![frames[0]];
        for k in 1..4 {
            let a = g.slice_channels(attention, k, 1);
            terms.push(g.mul_channel(a, g.sub(frames[k], frames[0])));
        }
        FusionOutput { image: g.sum(&terms), attention }
    }

    pub fn cast<G: Real>(&self) -> FusionNet<G> {
        FusionNet {
            config: self.config,
            stacks: std::array::from_fn(|k| self.stacks[k].cast()),
            up: self.up.cast(),
            head: self.head.cast(),
        }
    }
}

impl<F: Real> Module<F> for FusionNet<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        for (k, s) in self.stacks.iter().enumerate() {
            s.visit(&join(prefix, &format!("stack{k}")), f);
        }
        self.up.visit(&join(prefix, "up"), f);
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        for (k, s) in self.stacks.iter_mut().enumerate() {
            s.visit_mut(&join(prefix, &format!("stack{k}")), f);
        }
        self.up.visit_mut(&join(prefix, "up"), f);
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Fuses a four-branch bundle of frames, one time step at a time with shared
/// weights.
pub fn fuse<F: Real>(net: &FusionNet<F>, bundle: &GenerationBundle<Frame>) -> Result<(Clip, Vec<AttentionMaps>)> {
    if net.config.input != FusionInput::Frames {
        return Err(Error::config("this fusion net consumes decoder features, not frames"));
    }
    if bundle.branches() != Branch::ALL {
        return Err(Error::shape(format!("fusion needs all four branches, bundle has {}", bundle.len())));
    }
    let size = net.config.image_size;
    let t_len = bundle.clip_length();
    for seq in bundle.sequences() {
        if let Some(f) = seq.frames.iter().find(|f| f.size() != (size, size)) {
            return Err(Error::shape(format!("branch {} frame is {}x{}, fusion expects {size}x{size}", seq.branch, f.height(), f.width())));
        }
    }
    let g = Graph::new();
    let vars: Vec<Var> = bundle
        .sequences()
        .iter()
        .map(|seq| batch_tensor::<F>(&seq.frames.iter().collect::<Vec<_>>()).map(|t| g.input(t)))
        .collect::<Result<_>>()?;
    let frames = [vars[0], vars[1], vars[2], vars[3]];
    let out = net.forward_graph(&g, frames, frames);
    let fused = g.value(out.image);
    let attn = g.value(out.attention);
    let mut result = Vec::with_capacity(t_len);
    let mut maps = Vec::with_capacity(t_len);
    for t in 0..t_len {
        result.push(Frame::from_batch(&fused, t)?);
        maps.push(AttentionMaps::from_batch(&attn, t));
    }
    Ok((Clip::new(result)?, maps))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::branches::GeneratedSequence;
    use crate::nn::params_equal;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_frame(rng: &mut ChaCha8Rng, size: usize) -> Frame {
        Frame::new(size, size, (0..3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn bundle(per_branch: [Vec<Frame>; 4]) -> GenerationBundle<Frame> {
        let seqs = Branch::ALL.iter().zip(per_branch).map(|(&branch, frames)| GeneratedSequence { branch, frames }).collect();
        GenerationBundle::new(seqs).unwrap()
    }

    #[test]
    fn build_is_seeded() {
        let cfg = FusionConfig::new(16, 8);
        let a: FusionNet<f32> = build_fusion_net(cfg, 5).unwrap();
        let b: FusionNet<f32> = build_fusion_net(cfg, 5).unwrap();
        assert!(params_equal(&a, &b));
        assert_eq!(a.head.out_channels(), 4);
    }

    #[test]
    fn zeros_give_finite_output() {
        let net: FusionNet<f32> = build_fusion_net(FusionConfig::new(8, 4), 1).unwrap();
        let z = vec![Frame::filled(8, 8, 0.0); 2];
        let (clip, maps) = fuse(&net, &bundle([z.clone(), z.clone(), z.clone(), z])).unwrap();
        assert!(clip.frames().iter().all(Frame::all_finite));
        assert_eq!(maps.len(), 2);
    }

    #[test]
    fn attention_normalized_and_output_convex() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let net: FusionNet<f32> = build_fusion_net(FusionConfig::new(8, 4), 2).unwrap();
        let b = bundle(std::array::from_fn(|_| (0..3).map(|_| random_frame(&mut rng, 8)).collect()));
        let (clip, maps) = fuse(&net, &b).unwrap();
        for (t, (frame, m)) in clip.frames().iter().zip(&maps).enumerate() {
            for y in 0..8 {
                for x in 0..8 {
                    assert!((m.sum_at(y, x) - 1.0).abs() <= 1e-5);
                    for c in 0..3 {
                        let vals: Vec<f32> = b.sequences().iter().map(|s| s.frames[t].get(c, y, x)).collect();
                        let lo = vals.iter().copied().fold(f32::INFINITY, f32::min);
                        let hi = vals.iter().copied().fold(f32::NEG_INFINITY, f32::max);
                        let v = frame.get(c, y, x);
                        assert!(v >= lo - 1e-6 && v <= hi + 1e-6);
                    }
                }
            }
        }
    }

    #[test]
    fn identical_branches_pass_through() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let net: FusionNet<f32> = build_fusion_net(FusionConfig::new(8, 4), 3).unwrap();
        let frames: Vec<Frame> = (0..2).map(|_| random_frame(&mut rng, 8)).collect();
        let (clip, _) = fuse(&net, &bundle(std::array::from_fn(|_| frames.clone()))).unwrap();
        assert_eq!(clip.frames(), &frames[..]);
    }

    #[test]
    fn one_hot_attention_selects_first_branch() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut net: FusionNet<f32> = build_fusion_net(FusionConfig::new(8, 4), 3).unwrap();
        net.head.weight.value_mut().data_mut().fill(0.0);
        *net.head.bias.as_mut().unwrap().value_mut() = Tensor::from_vec(&[4], vec![200.0, -200.0, -200.0, -200.0]);
        let b = bundle(std::array::from_fn(|_| (0..2).map(|_| random_frame(&mut rng, 8)).collect()));
        let (clip, _) = fuse(&net, &b).unwrap();
        assert_eq!(clip.frames(), &b.get(Branch::TemporalDown).unwrap().frames[..]);
    }

    #[test]
    fn rejects_incomplete_or_mismatched_bundles() {
        let net: FusionNet<f32> = build_fusion_net(FusionConfig::new(8, 4), 1).unwrap();
        let z = vec![Frame::filled(8, 8, 0.0); 2];
        let partial = GenerationBundle::new(vec![GeneratedSequence { branch: Branch::SpatialUp, frames: z }]).unwrap();
        assert!(fuse(&net, &partial).is_err());
        let small = vec![Frame::filled(4, 4, 0.0); 2];
        assert!(fuse(&net, &bundle([small.clone(), small.clone(), small.clone(), small])).is_err());
    }

    #[test]
    fn branch_permutation_with_stack_weights_is_equivariant() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let net: FusionNet<f64> = build_fusion_net(FusionConfig::new(8, 4), 7).unwrap();
        let frames: [Vec<Frame>; 4] = std::array::from_fn(|_| vec![random_frame(&mut rng, 8)]);
        let (a, _) = fuse(&net, &bundle(frames.clone())).unwrap();
        // swap branches 2 and 3 together with their stacks, the matching input
        // slices of the upsampling weight and the head channels
        let mut p = net.clone();
        p.stacks.swap(2, 3);
        let fw = net.config.feature_width;
        let w = net.up.weight.value();
        let per_in = w.numel() / (4 * fw);
        let mut wd = w.data().to_vec();
        for i in 0..fw {
            for j in 0..per_in {
                wd.swap((2 * fw + i) * per_in + j, (3 * fw + i) * per_in + j);
            }
        }
        *p.up.weight.value_mut() = Tensor::from_vec(w.shape(), wd);
        let hw = net.head.weight.value();
        let per_out = hw.numel() / 4;
        let mut hd = hw.data().to_vec();
        for j in 0..per_out {
            hd.swap(2 * per_out + j, 3 * per_out + j);
        }
        *p.head.weight.value_mut() = Tensor::from_vec(hw.shape(), hd);
        let mut bias = net.head.bias.as_ref().unwrap().value().data().to_vec();
        bias.swap(2, 3);
        *p.head.bias.as_mut().unwrap().value_mut() = Tensor::from_vec(&[4], bias);
        let mut swapped = frames;
        swapped.swap(2, 3);
        let (b, _) = fuse(&p, &bundle(swapped)).unwrap();
        for (fa, fb) in a.frames().iter().zip(b.frames()) {
            assert!(fa.data().iter().zip(fb.data()).all(|(x, y)| (x - y).abs() < 1e-6));
        }
    }
}
