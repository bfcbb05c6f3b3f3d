use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::autograd::{Graph, Var};
use crate::branches::{run_branches, GenerationBundle, GraphGenerator};
use crate::error::{Error, Result};
use crate::frames::{batch_tensor, Clip, Frame, PairedSample};
use crate::fusion::{build_fusion_net, AttentionMaps, FusionInput, FusionNet};
use crate::metrics::ClipSynthesizer;
use crate::networks::{build_discriminator, build_generator, Generator, PatchDiscriminator};
use crate::nn::{join, param_ids, Module, Param, ParamId};
use crate::tensor::Real;

use super::config::{Ablation, TrainConfig};

/// Every network a setting of the ablation ladder uses. Components the
/// setting does not use are absent, so they are neither trained nor saved.
#[derive(Clone, Debug)]
pub struct Networks<F = f32> {
    pub generator: Generator<F>,
    pub d_spatial: PatchDiscriminator<F>,
    pub d_temporal: Option<PatchDiscriminator<F>>,
    pub fusion: Option<FusionNet<F>>,
}

impl Networks {
    /// Initialization seeds are drawn in a fixed order, so the generator and
    /// spatial discriminator start identical across ablation settings.
    pub fn build(cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let mut seeds = ChaCha8Rng::seed_from_u64(cfg.seed);
        let [sg, sd, st, sf]: [u64; 4] = std::array::from_fn(|_| seeds.random());
        let ablation = cfg.ablation;
        Ok(Self {
            generator: build_generator(cfg.generator, sg)?,
            d_spatial: build_discriminator(cfg.d_spatial_config(), sd)?,
            d_temporal: match ablation.temporal_discriminator() {
                true => Some(build_discriminator(cfg.d_temporal_config(), st)?),
                false => None,
            },
            fusion: match ablation.attention_fusion() {
                true => Some(build_fusion_net(cfg.fusion_config(), sf)?),
                false => None,
            },
        })
    }

}

impl<F: Real> Networks<F> {
    pub fn cast<G: Real>(&self) -> Networks<G> {
        Networks {
            generator: self.generator.cast(),
            d_spatial: self.d_spatial.cast(),
            d_temporal: self.d_temporal.as_ref().map(|d| d.cast()),
            fusion: self.fusion.as_ref().map(|f| f.cast()),
        }
    }

    /// Parameters updated by the generator step.
    pub fn generator_ids(&self) -> Vec<ParamId> {
        let mut ids = param_ids(&self.generator);
        if let Some(f) = &self.fusion {
            ids.extend(param_ids(f));
        }
        ids
    }

    pub fn discriminator_ids(&self) -> Vec<ParamId> {
        let mut ids = param_ids(&self.d_spatial);
        if let Some(d) = &self.d_temporal {
            ids.extend(param_ids(d));
        }
        ids
    }
}

impl<F: Real> Module<F> for Networks<F> {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<F>)) {
        self.generator.visit(&join(prefix, "generator"), f);
        self.d_spatial.visit(&join(prefix, "d_spatial"), f);
        if let Some(d) = &self.d_temporal {
            d.visit(&join(prefix, "d_temporal"), f);
        }
        if let Some(n) = &self.fusion {
            n.visit(&join(prefix, "fusion"), f);
        }
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<F>)) {
        self.generator.visit_mut(&join(prefix, "generator"), f);
        self.d_spatial.visit_mut(&join(prefix, "d_spatial"), f);
        if let Some(d) = &mut self.d_temporal {
            d.visit_mut(&join(prefix, "d_temporal"), f);
        }
        if let Some(n) = &mut self.fusion {
            n.visit_mut(&join(prefix, "fusion"), f);
        }
    }
}

/// Graph variables of one pipeline evaluation.
pub struct PipelineOutput {
    pub bundle: GenerationBundle<Var>,
    /// Final frames, one `[N, 3, H, W]` variable per time step.
    pub frames: Vec<Var>,
    /// `[N, 4, H, W]` attention per time step, with fusion only.
    pub attention: Option<Vec<Var>>,
}

/// Runs the setting's branches on `x` and `s` (one `[N, 3, H, W]` variable
/// per time step) and merges them: attention fusion in setting F, a plain
/// average otherwise.
pub fn forward<F: Real>(nets: &Networks<F>, ablation: Ablation, g: &Graph<F>, x: &[Var], s: &[Var]) -> Result<PipelineOutput> {
    let fusion = match (ablation.attention_fusion(), &nets.fusion) {
        (true, Some(f)) => Some(f),
        (true, None) => return Err(Error::config("setting F needs a fusion network")),
        (false, _) => None,
    };
    let decoder = fusion.is_some_and(|f| f.config().input == FusionInput::DecoderFeatures);
    let mut gen = GraphGenerator::new(&nets.generator, g);
    if decoder {
        gen = gen.with_features();
    }
    let bundle = run_branches(&mut gen, x, s, ablation.branches())?;
    let t_len = bundle.clip_length();
    let Some(net) = fusion else {
        let scale = 1.0 / bundle.len() as f64;
        let frames = (0..t_len)
            .map(|t| g.scale(g.sum(&bundle.sequences().iter().map(|q| q.frames[t]).collect::<Vec<_>>()), scale))
            .collect();
        return Ok(PipelineOutput { bundle, frames, attention: None });
    };
    // all time steps go through the fusion net as one batch
    let n = g.shape(x[0])[0];
    let seqs = bundle.sequences();
    let frames: [Var; 4] = std::array::from_fn(|k| g.cat_batch(&seqs[k].frames));
    let inputs = if decoder {
        let mut inputs = Vec::with_capacity(4);
        for q in seqs {
            let feats = q
                .frames
                .iter()
                .map(|&f| gen.feature(f).ok_or_else(|| Error::shape("missing decoder features for a branch output")))
                .collect::<Result<Vec<_>>>()?;
            inputs.push(g.cat_batch(&feats));
        }
        [inputs[0], inputs[1], inputs[2], inputs[3]]
    } else {
        frames
    };
    let out = net.forward_graph(g, frames, inputs);
    let frames = (0..t_len).map(|t| g.slice_batch(out.image, t * n, n)).collect();
    let attention = (0..t_len).map(|t| g.slice_batch(out.attention, t * n, n)).collect();
    Ok(PipelineOutput { bundle, frames, attention: Some(attention) })
}

/// Inference on one clip: the final frames and, with fusion, the attention
/// maps of every frame.
pub fn synthesize_clip<F: Real>(nets: &Networks<F>, ablation: Ablation, exo: &Clip, sem: &Clip) -> Result<(Clip, Option<Vec<AttentionMaps>>)> {
    if exo.len() != sem.len() {
        return Err(Error::shape(format!("{} exo frames but {} semantic maps", exo.len(), sem.len())));
    }
    let size = nets.generator.config().image_size;
    for f in exo.frames().iter().chain(sem.frames()) {
        if f.size() != (size, size) {
            return Err(Error::shape(format!("frame is {}x{}, the checkpoint expects {size}x{size}", f.height(), f.width())));
        }
    }
    let g = Graph::new();
    let one = |f: &Frame| batch_tensor::<F>(&[f]).map(|t| g.input(t));
    let x = exo.frames().iter().map(one).collect::<Result<Vec<_>>>()?;
    let s = sem.frames().iter().map(one).collect::<Result<Vec<_>>>()?;
    let out = forward(nets, ablation, &g, &x, &s)?;
    let frames = out.frames.iter().map(|&v| Frame::from_batch(&g.value(v), 0)).collect::<Result<Vec<_>>>()?;
    let maps = out.attention.map(|a| a.iter().map(|&v| AttentionMaps::from_batch(&g.value(v), 0)).collect());
    Ok((Clip::new(frames)?, maps))
}

/// A trained pipeline as a [`ClipSynthesizer`] for evaluation.
pub struct Pipeline<'a> {
    pub nets: &'a Networks,
    pub ablation: Ablation,
}

impl ClipSynthesizer for Pipeline<'_> {
    fn synthesize_clip(&self, sample: &PairedSample) -> Result<Clip> {
        synthesize_clip(self.nets, self.ablation, &sample.exo, &sample.sem).map(|r| r.0)
    }
}
