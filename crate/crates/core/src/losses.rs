//! Branch losses, adversarial terms, reconstruction, and the weighted total.
//!
//! Every sequence argument is a slice of graph variables, one `[N, 3, H, W]`
//! batch per time step. Per-frame terms are means over the batch and the
//! patch grid, summed over time.

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::branches::Branch;
use crate::error::{Error, Result};
use crate::networks::PatchDiscriminator;
use crate::tensor::{Real, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    /// Temporal downstream.
    pub lambda_u: f64,
    /// Temporal upstream.
    pub lambda_d: f64,
    /// Spatial downstream.
    pub lambda_n: f64,
    /// Spatial upstream.
    pub lambda_p: f64,
    /// Temporal adversarial term, generator side.
    pub lambda_g: f64,
    pub lambda_r: f64,
    /// Frame offset of the spatial-loss conditioning frame.
    pub time_truncate: usize,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self { lambda_u: 1.0, lambda_d: 0.1, lambda_n: 1.0, lambda_p: 0.1, lambda_g: 10.0, lambda_r: 10.0, time_truncate: 3 }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let named = [
            ("lambda_u", self.lambda_u),
            ("lambda_d", self.lambda_d),
            ("lambda_n", self.lambda_n),
            ("lambda_p", self.lambda_p),
            ("lambda_g", self.lambda_g),
            ("lambda_r", self.lambda_r),
        ];
        if let Some((name, v)) = named.iter().find(|(_, v)| !v.is_finite() || *v < 0.0) {
            return Err(Error::config(format!("loss weight {name} = {v} must be finite and non-negative")));
        }
        if self.time_truncate == 0 {
            return Err(Error::config("time_truncate must be at least 1"));
        }
        Ok(())
    }

    /// Weight of a branch's loss.
    pub fn branch(&self, branch: Branch) -> f64 {
        match branch {
            Branch::TemporalDown => self.lambda_u,
            Branch::TemporalUp => self.lambda_d,
            Branch::SpatialDown => self.lambda_n,
            Branch::SpatialUp => self.lambda_p,
        }
    }
}

/// Generator-side adversarial objective.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AdversarialForm {
    /// `-log D(fake)`.
    #[default]
    NonSaturating,
    /// `log(1 - D(fake))`.
    Minimax,
}

/// Something that scores a channel-concatenated conditional input with a
/// grid of logits.
pub trait PatchCritic<F: Real> {
    fn logits(&self, g: &Graph<F>, input: Var) -> Var;
}

impl<F: Real> PatchCritic<F> for PatchDiscriminator<F> {
    fn logits(&self, g: &Graph<F>, input: Var) -> Var {
        self.forward_graph(g, input)
    }
}

/// Emits the same logit everywhere, ignoring its input.
#[derive(Clone, Copy, Debug)]
pub struct ConstantCritic {
    pub logit: f64,
    pub grid: usize,
}

impl<F: Real> PatchCritic<F> for ConstantCritic {
    fn logits(&self, g: &Graph<F>, input: Var) -> Var {
        let n = g.shape(input)[0];
        g.input(Tensor::full(&[n, 1, self.grid, self.grid], F::lit(self.logit)))
    }
}

/// Binary cross-entropy of logits against an all-real or all-fake target.
pub fn bce<F: Real>(g: &Graph<F>, logits: Var, real: bool) -> Var {
    g.softplus_mean(logits, if real { -1.0 } else { 1.0 })
}

pub fn generator_adversarial<F: Real>(g: &Graph<F>, logits: Var, form: AdversarialForm) -> Var {
    match form {
        AdversarialForm::NonSaturating => bce(g, logits, true),
        AdversarialForm::Minimax => g.scale(bce(g, logits, false), -1.0),
    }
}

pub fn l1<F: Real>(g: &Graph<F>, a: Var, b: Var) -> Var {
    g.mean_abs_diff(a, b)
}

/// 1-based index of the input frame that conditions the discriminator for
/// output frame `t` of a spatial branch, clamped into `1..=t_len`.
pub fn conditioning_index(t: usize, time_truncate: usize, t_len: usize, upstream: bool) -> usize {
    let idx = if upstream { t.saturating_add(time_truncate) } else { t.saturating_sub(time_truncate) };
    idx.clamp(1, t_len)
}

/// Conditioning frame (0-based) of output frame `t` (0-based) for `branch`.
fn condition_frame(branch: Branch, t: usize, w: &LossWeights, t_len: usize) -> usize {
    if branch.is_temporal() {
        t
    } else {
        conditioning_index(t + 1, w.time_truncate, t_len, branch.is_upstream()) - 1
    }
}

fn check_lengths(named: &[(&str, usize)]) -> Result<usize> {
    let t = named[0].1;
    if t == 0 {
        return Err(Error::shape(format!("{} sequence is empty", named[0].0)));
    }
    if let Some((name, len)) = named.iter().find(|(_, l)| *l != t) {
        return Err(Error::shape(format!("{name} has {len} frames, expected {t}")));
    }
    Ok(t)
}

fn zero<F: Real>(g: &Graph<F>) -> Var {
    g.input(Tensor::scalar(F::zero()))
}

/// `sum_t mean(bce(D(cond_t ++ frame_t)))`, one discriminator call for all `t`.
fn critic_sum<F: Real>(g: &Graph<F>, d: &dyn PatchCritic<F>, cond: &[Var], frames: &[Var], f: impl Fn(Var) -> Var) -> Var {
    let pairs: Vec<Var> = cond.iter().zip(frames).map(|(&c, &y)| g.cat_channels(&[c, y])).collect();
    let logits = d.logits(g, g.cat_batch(&pairs));
    g.scale(f(logits), frames.len() as f64)
}

/// `sum_t mae(a_t, b_t)`.
fn l1_sum<F: Real>(g: &Graph<F>, a: &[Var], b: &[Var]) -> Var {
    g.scale(l1(g, g.cat_batch(a), g.cat_batch(b)), a.len() as f64)
}

/// Generator-side loss of one branch:
/// `lambda * sum_t [ |y_t - fake_t|_1 + adv(D_S(x_c(t), fake_t)) ]`.
#[allow(clippy::too_many_arguments)]
pub fn branch_loss<F: Real>(
    g: &Graph<F>,
    d_s: &dyn PatchCritic<F>,
    branch: Branch,
    x: &[Var],
    y: &[Var],
    fake: &[Var],
    w: &LossWeights,
    form: AdversarialForm,
) -> Result<Var> {
    let t_len = check_lengths(&[("x", x.len()), ("y", y.len()), (branch.name(), fake.len())])?;
    let lambda = w.branch(branch);
    if lambda == 0.0 {
        return Ok(zero(g));
    }
    let cond: Vec<Var> = (0..t_len).map(|t| x[condition_frame(branch, t, w, t_len)]).collect();
    let adv = critic_sum(g, d_s, &cond, fake, |l| generator_adversarial(g, l, form));
    Ok(g.scale(g.add(l1_sum(g, y, fake), adv), lambda))
}

/// Discriminator-side counterpart of a branch loss: real pairs `(x_c(t), y_t)`
/// against detached fakes `(x_c(t), fake_t)`, weighted like the branch.
pub fn branch_discriminator_loss<F: Real>(
    g: &Graph<F>,
    d_s: &dyn PatchCritic<F>,
    branch: Branch,
    x: &[Var],
    y: &[Var],
    fake: &[Var],
    w: &LossWeights,
) -> Result<Var> {
    let t_len = check_lengths(&[("x", x.len()), ("y", y.len()), (branch.name(), fake.len())])?;
    let lambda = w.branch(branch);
    if lambda == 0.0 {
        return Ok(zero(g));
    }
    let cond: Vec<Var> = (0..t_len).map(|t| x[condition_frame(branch, t, w, t_len)]).collect();
    let fake: Vec<Var> = fake.iter().map(|&f| g.detach(f)).collect();
    Ok(g.scale(real_fake_sum(g, d_s, &cond, y, &fake), lambda))
}

/// Real and fake pairs scored in one discriminator call.
fn real_fake_sum<F: Real>(g: &Graph<F>, d: &dyn PatchCritic<F>, cond: &[Var], real: &[Var], fake: &[Var]) -> Var {
    let t_len = real.len();
    let pairs: Vec<Var> =
        cond.iter().zip(real).chain(cond.iter().zip(fake)).map(|(&c, &y)| g.cat_channels(&[c, y])).collect();
    let logits = d.logits(g, g.cat_batch(&pairs));
    let n = g.shape(logits)[0] / 2;
    let r = bce(g, g.slice_batch(logits, 0, n), true);
    let f = bce(g, g.slice_batch(logits, n, n), false);
    g.scale(g.add(r, f), t_len as f64)
}

/// Downstream, upstream and combined terms of a loss family.
#[derive(Clone, Copy, Debug)]
pub struct DirectionalLoss {
    pub down: Var,
    pub up: Var,
    pub total: Var,
}

#[allow(clippy::too_many_arguments)]
fn directional<F: Real>(
    g: &Graph<F>,
    d_s: &dyn PatchCritic<F>,
    branches: [Branch; 2],
    x: &[Var],
    y: &[Var],
    down: &[Var],
    up: &[Var],
    w: &LossWeights,
    form: AdversarialForm,
) -> Result<DirectionalLoss> {
    let down = branch_loss(g, d_s, branches[0], x, y, down, w, form)?;
    let up = branch_loss(g, d_s, branches[1], x, y, up, w, form)?;
    Ok(DirectionalLoss { down, up, total: g.add(down, up) })
}

/// Temporal loss of the two recursive branches.
#[allow(clippy::too_many_arguments)]
pub fn temporal_loss<F: Real>(
    g: &Graph<F>,
    d_s: &dyn PatchCritic<F>,
    x: &[Var],
    y: &[Var],
    down: &[Var],
    up: &[Var],
    w: &LossWeights,
    form: AdversarialForm,
) -> Result<DirectionalLoss> {
    directional(g, d_s, [Branch::TemporalDown, Branch::TemporalUp], x, y, down, up, w, form)
}

/// Spatial loss of the two anchored branches; the discriminator is
/// conditioned on the clamped frame `t - i` (downstream) or `t + i` (upstream).
#[allow(clippy::too_many_arguments)]
pub fn spatial_loss<F: Real>(
    g: &Graph<F>,
    d_s: &dyn PatchCritic<F>,
    x: &[Var],
    y: &[Var],
    down: &[Var],
    up: &[Var],
    w: &LossWeights,
    form: AdversarialForm,
) -> Result<DirectionalLoss> {
    directional(g, d_s, [Branch::SpatialDown, Branch::SpatialUp], x, y, down, up, w, form)
}

/// `lambda_r * sum_t mae(y_t, fake_t)`.
pub fn reconstruction_loss<F: Real>(g: &Graph<F>, y: &[Var], fake: &[Var], lambda_r: f64) -> Result<Var> {
    check_lengths(&[("y", y.len()), ("output", fake.len())])?;
    for (a, b) in y.iter().zip(fake) {
        if g.shape(*a) != g.shape(*b) {
            return Err(Error::shape(format!("target {:?} and output {:?} differ", g.shape(*a), g.shape(*b))));
        }
    }
    Ok(g.scale(l1_sum(g, y, fake), lambda_r))
}

/// `[N, 3(T+1), H, W]` inputs for both anchors `x_1` and `x_T`, stacked on the batch axis.
fn temporal_inputs<F: Real>(g: &Graph<F>, x: &[Var], seq: &[Var]) -> Var {
    let with = |anchor: Var| {
        let mut parts = vec![anchor];
        parts.extend_from_slice(seq);
        g.cat_channels(&parts)
    };
    g.cat_batch(&[with(x[0]), with(x[x.len() - 1])])
}

/// Spatial discriminator loss on the final output: `(x_t, y_t)` real,
/// `(x_t, fake_t)` fake, fakes detached.
pub fn d_spatial_loss<F: Real>(g: &Graph<F>, d_s: &dyn PatchCritic<F>, x: &[Var], y: &[Var], fake: &[Var]) -> Result<Var> {
    check_lengths(&[("x", x.len()), ("y", y.len()), ("output", fake.len())])?;
    let fake: Vec<Var> = fake.iter().map(|&f| g.detach(f)).collect();
    Ok(real_fake_sum(g, d_s, x, y, &fake))
}

/// Temporal discriminator loss, summed over the anchors `x_1` and `x_T`.
pub fn d_temporal_loss<F: Real>(g: &Graph<F>, d_t: &dyn PatchCritic<F>, x: &[Var], y: &[Var], fake: &[Var]) -> Result<Var> {
    check_lengths(&[("x", x.len()), ("y", y.len()), ("output", fake.len())])?;
    let fake: Vec<Var> = fake.iter().map(|&f| g.detach(f)).collect();
    let logits = d_t.logits(g, g.cat_batch(&[temporal_inputs(g, x, y), temporal_inputs(g, x, &fake)]));
    let n = g.shape(logits)[0] / 4;
    let terms: Vec<Var> = (0..4).map(|k| bce(g, g.slice_batch(logits, k * n, n), k < 2)).collect();
    Ok(g.sum(&terms))
}

/// Generator-side adversarial terms on the final output. The temporal term
/// is already multiplied by `lambda_g`.
#[derive(Clone, Copy, Debug)]
pub struct GeneratorAdversarial {
    pub spatial: Var,
    pub temporal: Option<Var>,
    pub total: Var,
}

pub fn generator_adversarial_losses<F: Real>(
    g: &Graph<F>,
    d_s: &dyn PatchCritic<F>,
    d_t: Option<&dyn PatchCritic<F>>,
    x: &[Var],
    fake: &[Var],
    w: &LossWeights,
    form: AdversarialForm,
) -> Result<GeneratorAdversarial> {
    check_lengths(&[("x", x.len()), ("output", fake.len())])?;
    let spatial = critic_sum(g, d_s, x, fake, |l| generator_adversarial(g, l, form));
    let temporal = d_t.map(|d| {
        let logits = d.logits(g, temporal_inputs(g, x, fake));
        let n = g.shape(logits)[0] / 2;
        let a = generator_adversarial(g, g.slice_batch(logits, 0, n), form);
        let b = generator_adversarial(g, g.slice_batch(logits, n, n), form);
        g.scale(g.add(a, b), w.lambda_g)
    });
    let total = match temporal {
        Some(t) => g.add(spatial, t),
        None => spatial,
    };
    Ok(GeneratorAdversarial { spatial, temporal, total })
}

/// Both sides of the adversarial game on the final output.
#[derive(Clone, Copy, Debug)]
pub struct AdversarialLosses {
    pub generator: GeneratorAdversarial,
    pub d_spatial: Var,
    pub d_temporal: Option<Var>,
}

#[allow(clippy::too_many_arguments)]
pub fn adversarial_losses<F: Real>(
    g: &Graph<F>,
    d_s: &dyn PatchCritic<F>,
    d_t: Option<&dyn PatchCritic<F>>,
    x: &[Var],
    y: &[Var],
    fake: &[Var],
    w: &LossWeights,
    form: AdversarialForm,
) -> Result<AdversarialLosses> {
    let generator = generator_adversarial_losses(g, d_s, d_t, x, fake, w, form)?;
    let d_spatial = d_spatial_loss(g, d_s, x, y, fake)?;
    let d_temporal = d_t.map(|d| d_temporal_loss(g, d, x, y, fake)).transpose()?;
    Ok(AdversarialLosses { generator, d_spatial, d_temporal })
}

/// Named scalar breakdown of one step's objective. Terms absent from the
/// active configuration are `None` and left out of the serialized record.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub temporal_down: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub temporal_up: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spatial_down: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub spatial_up: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_spatial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub adv_temporal: Option<f64>,
    pub reconstruction: f64,
    pub total: f64,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d_spatial: Option<f64>,
    #[serde(skip_serializing_if = "Option::is_none", default)]
    pub d_temporal: Option<f64>,
}

impl LossReport {
    /// `(name, value)` of every present term, totals included.
    pub fn terms(&self) -> Vec<(&'static str, f64)> {
        let opt = [
            ("temporal_down", self.temporal_down),
            ("temporal_up", self.temporal_up),
            ("spatial_down", self.spatial_down),
            ("spatial_up", self.spatial_up),
            ("adv_spatial", self.adv_spatial),
            ("adv_temporal", self.adv_temporal),
            ("reconstruction", Some(self.reconstruction)),
            ("total", Some(self.total)),
            ("d_spatial", self.d_spatial),
            ("d_temporal", self.d_temporal),
        ];
        opt.into_iter().filter_map(|(n, v)| v.map(|v| (n, v))).collect()
    }

    pub fn temporal(&self) -> f64 {
        self.temporal_down.unwrap_or(0.0) + self.temporal_up.unwrap_or(0.0)
    }

    pub fn spatial(&self) -> f64 {
        self.spatial_down.unwrap_or(0.0) + self.spatial_up.unwrap_or(0.0)
    }

    pub fn adversarial(&self) -> f64 {
        self.adv_spatial.unwrap_or(0.0) + self.adv_temporal.unwrap_or(0.0)
    }

    /// First non-finite term, if any.
    pub fn non_finite(&self) -> Option<(&'static str, f64)> {
        self.terms().into_iter().find(|(_, v)| !v.is_finite())
    }
}

/// Fills in `report.total` as adversarial + reconstruction + temporal +
/// spatial, each already weighted. Fails on the first non-finite term.
pub fn total_generator_loss(mut report: LossReport) -> Result<LossReport> {
    report.total = 0.0;
    if let Some((term, value)) = report.non_finite() {
        return Err(Error::Numeric { term: term.to_string(), value });
    }
    report.total = report.adversarial() + report.reconstruction + report.temporal() + report.spatial();
    Ok(report)
}
