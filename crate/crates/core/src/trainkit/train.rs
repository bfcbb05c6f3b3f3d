use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autograd::{Graph, Var};
use crate::branches::Branch;
use crate::error::{Error, Result};
use crate::frames::{batch_tensor, Frame, PairedSample};
use crate::losses::{
    branch_discriminator_loss, branch_loss, d_spatial_loss, d_temporal_loss, generator_adversarial_losses,
    reconstruction_loss, total_generator_loss, LossReport, PatchCritic,
};
use crate::optim::Adam;
use crate::synthdata::load_paired_dataset;
use crate::tensor::{Real, Tensor};

use super::checkpoint::save_checkpoint;
use super::config::TrainConfig;
use super::pipeline::{forward, Networks, PipelineOutput};

/// One training batch: per time step, `[B, 3, H, W]` exo, ego and semantic tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Batch {
    pub x: Vec<Tensor<f32>>,
    pub y: Vec<Tensor<f32>>,
    pub s: Vec<Tensor<f32>>,
}

/// Networks, optimizer moments, sampling RNG and step counter: everything
/// needed to resume a run.
#[derive(Clone, Debug)]
pub struct TrainState {
    pub config: TrainConfig,
    pub nets: Networks,
    pub opt_g: Adam<f32>,
    pub opt_d: Adam<f32>,
    pub rng: ChaCha8Rng,
    pub step: u64,
}

const SAMPLER_SALT: u64 = 0x5a3c_9e1b_77d4_0f21;

/// Generator-side graph terms of one step.
pub struct GeneratorObjective {
    pub output: PipelineOutput,
    pub branches: Vec<(Branch, Var)>,
    pub reconstruction: Var,
    pub adv_spatial: Var,
    pub adv_temporal: Option<Var>,
    pub total: Var,
}

/// Builds the full generator objective: per-branch losses, reconstruction
/// of the final output and the adversarial terms on it.
pub fn generator_objective<F: Real>(
    nets: &Networks<F>,
    cfg: &TrainConfig,
    g: &Graph<F>,
    x: &[Var],
    y: &[Var],
    s: &[Var],
) -> Result<GeneratorObjective> {
    let output = forward(nets, cfg.ablation, g, x, s)?;
    generator_terms(nets, cfg, g, x, y, output)
}

/// Generator objective on an already evaluated pipeline. Critic parameters
/// are bound when first used, so calling this after a discriminator update
/// scores the output with the updated critics.
pub fn generator_terms<F: Real>(
    nets: &Networks<F>,
    cfg: &TrainConfig,
    g: &Graph<F>,
    x: &[Var],
    y: &[Var],
    output: PipelineOutput,
) -> Result<GeneratorObjective> {
    let d_s: &dyn PatchCritic<F> = &nets.d_spatial;
    let d_t = temporal_critic(nets, cfg);
    let mut branches = Vec::new();
    for seq in output.bundle.sequences() {
        branches.push((seq.branch, branch_loss(g, d_s, seq.branch, x, y, &seq.frames, &cfg.loss, cfg.adversarial_form)?));
    }
    let reconstruction = reconstruction_loss(g, y, &output.frames, cfg.loss.lambda_r)?;
    let adv = generator_adversarial_losses(g, d_s, d_t, x, &output.frames, &cfg.loss, cfg.adversarial_form)?;
    let mut terms: Vec<Var> = branches.iter().map(|b| b.1).collect();
    terms.push(reconstruction);
    terms.push(adv.total);
    let total = g.sum(&terms);
    Ok(GeneratorObjective { output, branches, reconstruction, adv_spatial: adv.spatial, adv_temporal: adv.temporal, total })
}

fn temporal_critic<'a, F: Real>(nets: &'a Networks<F>, cfg: &TrainConfig) -> Option<&'a dyn PatchCritic<F>> {
    match cfg.ablation.temporal_discriminator() {
        true => nets.d_temporal.as_ref().map(|d| d as &dyn PatchCritic<F>),
        false => None,
    }
}

/// Discriminator-side graph terms; every fake input is detached.
pub struct DiscriminatorObjective {
    pub spatial: Var,
    pub temporal: Option<Var>,
    pub total: Var,
}

/// `fakes` is the final output per time step; `branch_fakes` the branch
/// outputs, used when the configuration trains D_S on them too.
pub fn discriminator_objective<F: Real>(
    nets: &Networks<F>,
    cfg: &TrainConfig,
    g: &Graph<F>,
    x: &[Var],
    y: &[Var],
    fakes: &[Var],
    branch_fakes: &[(Branch, Vec<Var>)],
) -> Result<DiscriminatorObjective> {
    let d_s: &dyn PatchCritic<F> = &nets.d_spatial;
    let mut spatial = d_spatial_loss(g, d_s, x, y, fakes)?;
    if cfg.branch_discriminator_terms {
        let mut terms = vec![spatial];
        for (branch, frames) in branch_fakes {
            terms.push(branch_discriminator_loss(g, d_s, *branch, x, y, frames, &cfg.loss)?);
        }
        spatial = g.sum(&terms);
    }
    let temporal = temporal_critic(nets, cfg).map(|d| d_temporal_loss(g, d, x, y, fakes)).transpose()?;
    let total = match temporal {
        Some(t) => g.add(spatial, t),
        None => spatial,
    };
    Ok(DiscriminatorObjective { spatial, temporal, total })
}

fn finite(term: &str, value: f64) -> Result<f64> {
    match value.is_finite() {
        true => Ok(value),
        false => Err(Error::Numeric { term: term.to_string(), value }),
    }
}

impl TrainState {
    pub fn new(config: TrainConfig) -> Result<Self> {
        let nets = Networks::build(&config)?;
        Ok(Self {
            opt_g: Adam::new(config.optimizer),
            opt_d: Adam::new(config.optimizer),
            rng: ChaCha8Rng::seed_from_u64(config.seed ^ SAMPLER_SALT),
            step: 0,
            nets,
            config,
        })
    }

    /// Clip order of one pass over the data, a pure function of seed and epoch.
    fn epoch_order(&self, epoch: u64, n: usize) -> Vec<usize> {
        let mut order: Vec<usize> = (0..n).collect();
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ SAMPLER_SALT.rotate_left(17) ^ epoch);
        order.shuffle(&mut rng);
        order
    }

    /// The batch of the current step: clips in per-epoch shuffled order, each
    /// cut to a random window of `clip_length` frames and optionally augmented.
    pub fn sample_batch(&mut self, data: &[PairedSample]) -> Result<Batch> {
        check_dataset(data, &self.config)?;
        let (b, t_len, n) = (self.config.batch_size, self.config.clip_length, data.len());
        let mut order: Option<(u64, Vec<usize>)> = None;
        let mut picks = Vec::with_capacity(b);
        for j in 0..b {
            let i = self.step * b as u64 + j as u64;
            let epoch = i / n as u64;
            if order.as_ref().is_none_or(|(e, _)| *e != epoch) {
                order = Some((epoch, self.epoch_order(epoch, n)));
            }
            let clip = &data[order.as_ref().expect("set above").1[(i % n as u64) as usize]];
            let start = self.rng.random_range(0..=clip.ego.len() - t_len);
            let aug = self.config.augment.then(|| Augment::draw(&mut self.rng, self.config.image_size()));
            picks.push((clip, start, aug));
        }
        let view = |pick: fn(&PairedSample) -> &[Frame]| -> Result<Vec<Tensor<f32>>> {
            (0..t_len)
                .map(|t| {
                    let frames: Vec<Frame> = picks
                        .iter()
                        .map(|(c, start, aug)| {
                            let f = &pick(c)[start + t];
                            aug.map_or_else(|| f.clone(), |a| a.apply(f))
                        })
                        .collect();
                    batch_tensor(&frames.iter().collect::<Vec<_>>())
                })
                .collect()
        };
        Ok(Batch { x: view(|c| c.exo.frames())?, y: view(|c| c.ego.frames())?, s: view(|c| c.sem.frames())? })
    }

    /// One discriminator update on detached fakes, then one generator (and
    /// fusion) update against the updated discriminators.
    pub fn train_step(&mut self, batch: &Batch) -> Result<LossReport> {
        let cfg = self.config.clone();
        let g = Graph::with_trainable(self.nets.generator_ids());
        let (x, y, s) = (vars_in(&g, &batch.x), vars_in(&g, &batch.y), vars_in(&g, &batch.s));
        let output = forward(&self.nets, cfg.ablation, &g, &x, &s)?;

        let gd = Graph::with_trainable(self.nets.discriminator_ids());
        let consts = |vs: &[Var]| vs.iter().map(|&v| gd.input((*g.value(v)).clone())).collect::<Vec<_>>();
        let (dx, dy) = (vars_in(&gd, &batch.x), vars_in(&gd, &batch.y));
        let fakes = consts(&output.frames);
        let branch_fakes: Vec<(Branch, Vec<Var>)> = match cfg.branch_discriminator_terms {
            true => output.bundle.sequences().iter().map(|q| (q.branch, consts(&q.frames))).collect(),
            false => Vec::new(),
        };
        let d = discriminator_objective(&self.nets, &cfg, &gd, &dx, &dy, &fakes, &branch_fakes)?;
        let d_spatial = finite("d_spatial", gd.value(d.spatial).item().as_f64())?;
        let d_temporal = d.temporal.map(|v| finite("d_temporal", gd.value(v).item().as_f64())).transpose()?;
        let grads = gd.backward(d.total);
        self.opt_d.step(&mut self.nets.d_spatial, "d_spatial", &grads);
        if let Some(dt) = &mut self.nets.d_temporal {
            self.opt_d.step(dt, "d_temporal", &grads);
        }

        let obj = generator_terms(&self.nets, &cfg, &g, &x, &y, output)?;
        let value = |v: Var| g.value(v).item().as_f64();
        let mut report = LossReport {
            reconstruction: value(obj.reconstruction),
            adv_spatial: Some(value(obj.adv_spatial)),
            adv_temporal: obj.adv_temporal.map(value),
            d_spatial: Some(d_spatial),
            d_temporal,
            ..LossReport::default()
        };
        for &(branch, v) in &obj.branches {
            let slot = match branch {
                Branch::TemporalDown => &mut report.temporal_down,
                Branch::TemporalUp => &mut report.temporal_up,
                Branch::SpatialDown => &mut report.spatial_down,
                Branch::SpatialUp => &mut report.spatial_up,
            };
            *slot = Some(value(v));
        }
        let report = total_generator_loss(report)?;
        finite("total", value(obj.total))?;
        let grads = g.backward(obj.total);
        self.opt_g.step(&mut self.nets.generator, "generator", &grads);
        if let Some(f) = &mut self.nets.fusion {
            self.opt_g.step(f, "fusion", &grads);
        }
        self.step += 1;
        Ok(report)
    }

    /// Runs `steps` steps on `data`, calling `hook` after each.
    pub fn fit(
        &mut self,
        data: &[PairedSample],
        steps: u64,
        mut hook: impl FnMut(&TrainState, &LossReport) -> Result<()>,
    ) -> Result<Vec<LossReport>> {
        check_dataset(data, &self.config)?;
        let mut reports = Vec::with_capacity(steps as usize);
        for _ in 0..steps {
            let batch = self.sample_batch(data)?;
            let report = self.train_step(&batch)?;
            hook(self, &report)?;
            reports.push(report);
        }
        Ok(reports)
    }
}

fn vars_in(g: &Graph<f32>, ts: &[Tensor<f32>]) -> Vec<Var> {
    ts.iter().map(|t| g.input(t.clone())).collect()
}

/// Rejects data the configuration cannot train on.
pub fn check_dataset(data: &[PairedSample], cfg: &TrainConfig) -> Result<()> {
    if data.is_empty() {
        return Err(Error::config("training split has no clips"));
    }
    let size = cfg.image_size();
    for c in data {
        if c.ego.len() < cfg.clip_length || c.exo.len() != c.ego.len() || c.sem.len() != c.ego.len() {
            return Err(Error::shape(format!(
                "clip {} has {}/{}/{} exo/ego/sem frames, need {} of each",
                c.clip_id,
                c.exo.len(),
                c.ego.len(),
                c.sem.len(),
                cfg.clip_length
            )));
        }
        if c.ego.frame_size() != (size, size) || c.exo.frame_size() != (size, size) || c.sem.frame_size() != (size, size) {
            return Err(Error::shape(format!("clip {} frames are not {size}x{size}", c.clip_id)));
        }
    }
    Ok(())
}

/// Horizontal flip and a crop of the image enlarged by 1/8, shared by every
/// frame and view of a clip.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Augment {
    pub flip: bool,
    pub offset: (usize, usize),
}

impl Augment {
    fn enlarged(size: usize) -> usize {
        size + size / 8
    }

    pub fn draw(rng: &mut impl Rng, size: usize) -> Self {
        let slack = Self::enlarged(size) - size;
        Self { flip: rng.random_bool(0.5), offset: (rng.random_range(0..=slack), rng.random_range(0..=slack)) }
    }

    /// Nearest-neighbour resampling, so semantic colors stay exact.
    pub fn apply(&self, f: &Frame) -> Frame {
        let (h, w) = f.size();
        let big = Self::enlarged(h);
        let mut out = Frame::filled(h, w, 0.0);
        for y in 0..h {
            for x in 0..w {
                let xx = if self.flip { w - 1 - x } else { x };
                let sy = ((y + self.offset.0) * h / big).min(h - 1);
                let sx = ((xx + self.offset.1) * w / big).min(w - 1);
                out.set_pixel(y, x, f.pixel(sy, sx));
            }
        }
        out
    }
}

/// One line of the JSON-lines training log.
#[derive(Serialize)]
struct LogRecord<'a> {
    step: u64,
    #[serde(flatten)]
    report: &'a LossReport,
}

pub fn log_line(step: u64, report: &LossReport) -> String {
    serde_json::to_string(&LogRecord { step, report }).expect("loss report serializes")
}

/// Number of steps `cfg` asks for on a dataset of `n_clips`.
pub fn planned_steps(cfg: &TrainConfig, n_clips: usize) -> u64 {
    cfg.steps.unwrap_or_else(|| (cfg.epochs * n_clips.div_ceil(cfg.batch_size)) as u64)
}

pub struct TrainOutcome {
    pub state: TrainState,
    pub reports: Vec<LossReport>,
}

/// Loads the training split, trains, writes the log and checkpoints.
pub fn train(cfg: TrainConfig) -> Result<TrainOutcome> {
    cfg.validate()?;
    let root = cfg.data_root.clone().ok_or_else(|| Error::config("data_root is required for training"))?;
    let data = load_paired_dataset(&root, &cfg.train_split)?;
    check_dataset(&data, &cfg)?;
    let steps = planned_steps(&cfg, data.len());
    let mut state = TrainState::new(cfg.clone())?;
    let mut log = match &cfg.log_path {
        Some(p) => Some(create_log(p)?),
        None => None,
    };
    let reports = state.fit(&data, steps, |st, report| {
        if let (Some(w), Some(p)) = (log.as_mut(), cfg.log_path.as_ref()) {
            writeln!(w, "{}", log_line(st.step, report)).and_then(|_| w.flush()).map_err(|e| Error::io(p, e))?;
        }
        match &cfg.checkpoint_dir {
            Some(dir) if cfg.checkpoint_every > 0 && st.step % cfg.checkpoint_every == 0 && st.step < steps => {
                save_checkpoint(st, &dir.join(format!("step_{:06}", st.step)))
            }
            _ => Ok(()),
        }
    })?;
    if let Some(dir) = &cfg.checkpoint_dir {
        save_checkpoint(&state, &dir.join("final"))?;
    }
    Ok(TrainOutcome { state, reports })
}

fn create_log(path: &Path) -> Result<BufWriter<File>> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    File::create(path).map(BufWriter::new).map_err(|e| Error::io(path, e))
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::frames::Clip;
    use crate::nn::{named_tensors, params_equal};
    use crate::trainkit::config::Ablation;

    pub(crate) fn tiny_clips(n: usize, t: usize) -> Vec<PairedSample> {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let mut clip = |len: usize| {
            Clip::new((0..len).map(|_| Frame::new(8, 8, (0..192).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()).collect())
                .unwrap()
        };
        (0..n)
            .map(|i| PairedSample { clip_id: format!("c{i}"), exo: clip(t), ego: clip(t), sem: clip(t) })
            .collect()
    }

    #[test]
    fn steps_are_deterministic() {
        let data = tiny_clips(3, 3);
        let run = || {
            let mut st = TrainState::new(TrainConfig::tiny()).unwrap();
            st.fit(&data, 3, |_, _| Ok(())).unwrap()
        };
        assert_eq!(run(), run());
    }

    #[test]
    fn spatial_only_setting_logs_no_temporal_terms() {
        let data = tiny_clips(2, 2);
        let mut st = TrainState::new(TrainConfig { ablation: Ablation::A, ..TrainConfig::tiny() }).unwrap();
        let r = st.fit(&data, 1, |_, _| Ok(())).unwrap().remove(0);
        assert!(r.temporal_down.is_none() && r.temporal_up.is_none() && r.adv_temporal.is_none() && r.d_temporal.is_none());
        assert!(r.spatial_down.is_some() && r.spatial_up.is_some());
        let line = log_line(1, &r);
        assert!(!line.contains("temporal"), "{line}");
        assert!(line.starts_with("{\"step\":1,"));
    }

    #[test]
    fn full_setting_reports_every_term() {
        let data = tiny_clips(2, 2);
        let mut st = TrainState::new(TrainConfig::tiny()).unwrap();
        let r = st.fit(&data, 1, |_, _| Ok(())).unwrap().remove(0);
        assert_eq!(r.terms().len(), 10);
    }

    #[test]
    fn updates_touch_only_their_own_side() {
        let data = tiny_clips(2, 2);
        let mut st = TrainState::new(TrainConfig::tiny()).unwrap();
        let batch = st.sample_batch(&data).unwrap();
        let before = st.nets.clone();
        st.train_step(&batch).unwrap();
        assert!(!params_equal(&before.generator, &st.nets.generator));
        assert!(!params_equal(&before.d_spatial, &st.nets.d_spatial));
        let g_names: Vec<String> = named_tensors(&st.nets.generator, "generator").into_iter().map(|p| p.0).collect();
        assert!(st.opt_d.state.keys().all(|k| !g_names.contains(k)));
        assert!(st.opt_g.state.keys().all(|k| k.starts_with("generator.") || k.starts_with("fusion.")));
        assert!(st.opt_d.state.keys().all(|k| k.starts_with("d_spatial.") || k.starts_with("d_temporal.")));
    }

    #[test]
    fn batches_follow_epochs_and_windows() {
        let data = tiny_clips(3, 4);
        let mut cfg = TrainConfig::tiny();
        cfg.batch_size = 3;
        let mut st = TrainState::new(cfg).unwrap();
        let b = st.sample_batch(&data).unwrap();
        assert_eq!(b.x.len(), 2);
        assert_eq!(b.x[0].shape(), &[3, 3, 8, 8]);
        // one epoch covers each clip once: the exo frames of the batch are
        // windows of three distinct clips
        let firsts: Vec<&[f32]> = (0..3).map(|i| &b.x[0].data()[i * 192..(i + 1) * 192]).collect();
        for (i, f) in firsts.iter().enumerate() {
            let owner = data.iter().position(|c| c.exo.frames().iter().any(|fr| fr.data() == *f)).unwrap();
            assert!(firsts.iter().enumerate().all(|(j, g)| j == i || !data[owner].exo.frames().iter().any(|fr| fr.data() == *g)));
        }
    }

    #[test]
    fn bad_data_is_rejected_before_training() {
        let mut st = TrainState::new(TrainConfig::tiny()).unwrap();
        assert!(st.fit(&[], 1, |_, _| Ok(())).is_err());
        let short = tiny_clips(1, 1);
        assert!(st.fit(&short, 1, |_, _| Ok(())).is_err());
        assert_eq!(st.step, 0);
    }

    #[test]
    fn augmentation_is_shared_and_preserves_colors() {
        let mut f = Frame::filled(16, 16, -1.0);
        f.set_pixel(3, 0, [1.0, 0.5, -0.5]);
        let a = Augment { flip: true, offset: (0, 0) };
        let out = a.apply(&f);
        let colors: std::collections::BTreeSet<[u32; 3]> =
            (0..16).flat_map(|y| (0..16).map(move |x| (y, x))).map(|(y, x)| out.pixel(y, x).map(f32::to_bits)).collect();
        assert!(colors.iter().all(|c| *c == [-1.0f32; 3].map(f32::to_bits) || *c == [1.0f32, 0.5, -0.5].map(f32::to_bits)));
        assert_eq!(Augment { flip: false, offset: (0, 0) }.apply(&f).pixel(0, 0), f.pixel(0, 0));
    }
}
