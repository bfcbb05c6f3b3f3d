//! The four generation schedules that turn an exocentric clip plus semantic
//! guidance into candidate egocentric sequences.
//!
//! Schedules are written against [`FrameGenerator`], so the same code drives
//! the differentiable generator inside a training graph, plain per-frame
//! inference, and instrumented stubs in tests.

use std::collections::HashMap;
use std::fmt;

use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::frames::{batch_tensor, Frame};
use crate::networks::Generator;
use crate::tensor::Real;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Branch {
    TemporalDown,
    TemporalUp,
    SpatialDown,
    SpatialUp,
}

impl Branch {
    pub const ALL: [Branch; 4] = [Branch::TemporalDown, Branch::TemporalUp, Branch::SpatialDown, Branch::SpatialUp];

    /// Position in the fusion stack (0..4).
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn name(self) -> &'static str {
        match self {
            Branch::TemporalDown => "temporal_down",
            Branch::TemporalUp => "temporal_up",
            Branch::SpatialDown => "spatial_down",
            Branch::SpatialUp => "spatial_up",
        }
    }

    pub fn is_temporal(self) -> bool {
        matches!(self, Branch::TemporalDown | Branch::TemporalUp)
    }

    pub fn is_upstream(self) -> bool {
        matches!(self, Branch::TemporalUp | Branch::SpatialUp)
    }
}

impl fmt::Display for Branch {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Anything that maps `(image, semantic map)` to a generated image.
pub trait FrameGenerator {
    type Image: Clone;

    fn generate(&mut self, image: &Self::Image, sem: &Self::Image) -> Result<Self::Image>;

    /// Independent calls that may be evaluated together. The default runs
    /// them one by one, in order.
    fn generate_batch(&mut self, calls: &[(Self::Image, Self::Image)]) -> Result<Vec<Self::Image>> {
        calls.iter().map(|(image, sem)| self.generate(image, sem)).collect()
    }
}

impl<G: FrameGenerator + ?Sized> FrameGenerator for &mut G {
    type Image = G::Image;

    fn generate(&mut self, image: &Self::Image, sem: &Self::Image) -> Result<Self::Image> {
        (**self).generate(image, sem)
    }

    fn generate_batch(&mut self, calls: &[(Self::Image, Self::Image)]) -> Result<Vec<Self::Image>> {
        (**self).generate_batch(calls)
    }
}

/// One branch's output, always stored in forward time order.
#[derive(Clone, Debug, PartialEq)]
pub struct GeneratedSequence<I> {
    pub branch: Branch,
    pub frames: Vec<I>,
}

impl<I> GeneratedSequence<I> {
    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }
}

/// The branch outputs for one input, in [`Branch::ALL`] order.
#[derive(Clone, Debug, PartialEq)]
pub struct GenerationBundle<I> {
    sequences: Vec<GeneratedSequence<I>>,
}

impl<I> GenerationBundle<I> {
    pub fn new(mut sequences: Vec<GeneratedSequence<I>>) -> Result<Self> {
        sequences.sort_by_key(|s| s.branch);
        if sequences.windows(2).any(|w| w[0].branch == w[1].branch) {
            return Err(Error::config("generation bundle holds a branch twice"));
        }
        if let Some(first) = sequences.first() {
            if sequences.iter().any(|s| s.len() != first.len()) {
                return Err(Error::shape("branch sequences differ in length"));
            }
        }
        Ok(Self { sequences })
    }

    pub fn get(&self, branch: Branch) -> Option<&GeneratedSequence<I>> {
        self.sequences.iter().find(|s| s.branch == branch)
    }

    pub fn sequences(&self) -> &[GeneratedSequence<I>] {
        &self.sequences
    }

    pub fn branches(&self) -> Vec<Branch> {
        self.sequences.iter().map(|s| s.branch).collect()
    }

    pub fn len(&self) -> usize {
        self.sequences.len()
    }

    pub fn is_empty(&self) -> bool {
        self.sequences.is_empty()
    }

    /// Clip length shared by every sequence.
    pub fn clip_length(&self) -> usize {
        self.sequences.first().map_or(0, GeneratedSequence::len)
    }
}

fn check_inputs<I>(x: &[I], s: &[I]) -> Result<usize> {
    if x.is_empty() {
        return Err(Error::shape("empty input clip"));
    }
    if x.len() != s.len() {
        return Err(Error::shape(format!("clip has {} frames but {} semantic maps", x.len(), s.len())));
    }
    Ok(x.len())
}

/// `y_1 = G(x_1, s_1)`, then `y_t = G(y_{t-1}, s_t)`.
pub fn temporal_downstream<G: FrameGenerator>(gen: &mut G, x: &[G::Image], s: &[G::Image]) -> Result<GeneratedSequence<G::Image>> {
    let t_len = check_inputs(x, s)?;
    let mut frames: Vec<G::Image> = Vec::with_capacity(t_len);
    for t in 0..t_len {
        let input = if t == 0 { &x[0] } else { &frames[t - 1] };
        let y = gen.generate(input, &s[t])?;
        frames.push(y);
    }
    Ok(GeneratedSequence { branch: Branch::TemporalDown, frames })
}

/// `y_T = G(x_T, s_T)`, then `y_{t-1} = G(y_t, s_{t-1})`.
pub fn temporal_upstream<G: FrameGenerator>(gen: &mut G, x: &[G::Image], s: &[G::Image]) -> Result<GeneratedSequence<G::Image>> {
    let t_len = check_inputs(x, s)?;
    let mut rev: Vec<G::Image> = Vec::with_capacity(t_len);
    for (k, t) in (0..t_len).rev().enumerate() {
        let input = if k == 0 { &x[t_len - 1] } else { &rev[k - 1] };
        let y = gen.generate(input, &s[t])?;
        rev.push(y);
    }
    rev.reverse();
    Ok(GeneratedSequence { branch: Branch::TemporalUp, frames: rev })
}

/// `y_t = G(x_1, s_t)` for every `t`.
pub fn spatial_downstream<G: FrameGenerator>(gen: &mut G, x: &[G::Image], s: &[G::Image]) -> Result<GeneratedSequence<G::Image>> {
    check_inputs(x, s)?;
    let frames = s.iter().map(|st| gen.generate(&x[0], st)).collect::<Result<_>>()?;
    Ok(GeneratedSequence { branch: Branch::SpatialDown, frames })
}

/// `y_t = G(x_T, s_t)`, evaluated from `t = T` down to 1.
pub fn spatial_upstream<G: FrameGenerator>(gen: &mut G, x: &[G::Image], s: &[G::Image]) -> Result<GeneratedSequence<G::Image>> {
    let t_len = check_inputs(x, s)?;
    let mut frames = s.iter().rev().map(|st| gen.generate(&x[t_len - 1], st)).collect::<Result<Vec<_>>>()?;
    frames.reverse();
    Ok(GeneratedSequence { branch: Branch::SpatialUp, frames })
}

pub fn run_all_branches<G: FrameGenerator>(gen: &mut G, x: &[G::Image], s: &[G::Image]) -> Result<GenerationBundle<G::Image>> {
    run_branches(gen, x, s, &Branch::ALL)
}

/// Runs the requested branches with every independent call of a time step
/// grouped into one [`FrameGenerator::generate_batch`]: both spatial branches
/// go in the first group, and each later group advances both temporal
/// recursions by one frame. Each branch still makes exactly `T` generator
/// calls with the same arguments as its standalone schedule.
pub fn run_branches<G: FrameGenerator>(
    gen: &mut G,
    x: &[G::Image],
    s: &[G::Image],
    branches: &[Branch],
) -> Result<GenerationBundle<G::Image>> {
    let t_len = check_inputs(x, s)?;
    let want = |b: Branch| branches.contains(&b);
    let mut down: Vec<G::Image> = Vec::with_capacity(t_len);
    let mut up_rev: Vec<G::Image> = Vec::with_capacity(t_len);
    let mut spatial_down = Vec::new();
    let mut spatial_up_rev = Vec::new();
    for k in 0..t_len {
        let mut calls = Vec::new();
        if want(Branch::TemporalDown) {
            let input = if k == 0 { x[0].clone() } else { down[k - 1].clone() };
            calls.push((input, s[k].clone()));
        }
        if want(Branch::TemporalUp) {
            let input = if k == 0 { x[t_len - 1].clone() } else { up_rev[k - 1].clone() };
            calls.push((input, s[t_len - 1 - k].clone()));
        }
        if k == 0 {
            if want(Branch::SpatialDown) {
                calls.extend(s.iter().map(|st| (x[0].clone(), st.clone())));
            }
            if want(Branch::SpatialUp) {
                calls.extend(s.iter().rev().map(|st| (x[t_len - 1].clone(), st.clone())));
            }
        }
        if calls.is_empty() {
            break;
        }
        let mut out = gen.generate_batch(&calls)?.into_iter();
        let mut next = || out.next().ok_or_else(|| Error::shape("generator returned too few outputs"));
        if want(Branch::TemporalDown) {
            down.push(next()?);
        }
        if want(Branch::TemporalUp) {
            up_rev.push(next()?);
        }
        if k == 0 {
            if want(Branch::SpatialDown) {
                spatial_down = (0..t_len).map(|_| next()).collect::<Result<_>>()?;
            }
            if want(Branch::SpatialUp) {
                spatial_up_rev = (0..t_len).map(|_| next()).collect::<Result<_>>()?;
            }
        }
    }
    let mut sequences = Vec::new();
    if want(Branch::TemporalDown) {
        sequences.push(GeneratedSequence { branch: Branch::TemporalDown, frames: down });
    }
    if want(Branch::TemporalUp) {
        up_rev.reverse();
        sequences.push(GeneratedSequence { branch: Branch::TemporalUp, frames: up_rev });
    }
    if want(Branch::SpatialDown) {
        sequences.push(GeneratedSequence { branch: Branch::SpatialDown, frames: spatial_down });
    }
    if want(Branch::SpatialUp) {
        spatial_up_rev.reverse();
        sequences.push(GeneratedSequence { branch: Branch::SpatialUp, frames: spatial_up_rev });
    }
    GenerationBundle::new(sequences)
}

/// The generator evaluated inside a computation graph. Images are `[N, 3, H, W]`
/// variables; batched calls are concatenated along the batch axis.
pub struct GraphGenerator<'a, F: Real> {
    gen: &'a Generator<F>,
    graph: &'a Graph<F>,
    /// Decoder features at half resolution, keyed by the output they belong to.
    features: Option<HashMap<Var, Var>>,
}

impl<'a, F: Real> GraphGenerator<'a, F> {
    pub fn new(gen: &'a Generator<F>, graph: &'a Graph<F>) -> Self {
        Self { gen, graph, features: None }
    }

    /// Also record the half-resolution decoder activation of every output.
    pub fn with_features(mut self) -> Self {
        self.features = Some(HashMap::new());
        self
    }

    pub fn feature(&self, output: Var) -> Option<Var> {
        self.features.as_ref()?.get(&output).copied()
    }

    fn half_res(&self, pyramid: &[Var]) -> Var {
        pyramid[pyramid.len() - 2]
    }
}

impl<F: Real> FrameGenerator for GraphGenerator<'_, F> {
    type Image = Var;

    fn generate(&mut self, image: &Var, sem: &Var) -> Result<Var> {
        check_var_pair(self.graph, *image, *sem, self.gen.config().image_size)?;
        let out = self.gen.forward_graph(self.graph, *image, *sem);
        if self.features.is_some() {
            let f = self.half_res(&out.pyramid);
            self.features.as_mut().expect("checked").insert(out.image, f);
        }
        Ok(out.image)
    }

    fn generate_batch(&mut self, calls: &[(Var, Var)]) -> Result<Vec<Var>> {
        if calls.len() <= 1 {
            return calls.iter().map(|(i, s)| self.generate(i, s)).collect();
        }
        let g = self.graph;
        let size = self.gen.config().image_size;
        let mut counts = Vec::with_capacity(calls.len());
        for &(i, s) in calls {
            check_var_pair(g, i, s, size)?;
            counts.push(g.shape(i)[0]);
        }
        let images = g.cat_batch(&calls.iter().map(|c| c.0).collect::<Vec<_>>());
        let sems = g.cat_batch(&calls.iter().map(|c| c.1).collect::<Vec<_>>());
        let out = self.gen.forward_graph(g, images, sems);
        let feat = self.features.is_some().then(|| self.half_res(&out.pyramid));
        let mut start = 0;
        let mut result = Vec::with_capacity(calls.len());
        for n in counts {
            let y = g.slice_batch(out.image, start, n);
            if let (Some(f), Some(map)) = (feat, self.features.as_mut()) {
                map.insert(y, g.slice_batch(f, start, n));
            }
            result.push(y);
            start += n;
        }
        Ok(result)
    }
}

fn check_var_pair<F: Real>(g: &Graph<F>, image: Var, sem: Var, size: usize) -> Result<()> {
    let (a, b) = (g.shape(image), g.shape(sem));
    if a != b {
        return Err(Error::shape(format!("image {a:?} and semantic map {b:?} differ")));
    }
    if a.len() != 4 || a[1] != 3 || a[2] != size || a[3] != size {
        return Err(Error::shape(format!("generator expects [N, 3, {size}, {size}], got {a:?}")));
    }
    Ok(())
}

/// Plain inference on [`Frame`]s.
pub struct FrameInference<'a, F: Real> {
    gen: &'a Generator<F>,
}

impl<'a, F: Real> FrameInference<'a, F> {
    pub fn new(gen: &'a Generator<F>) -> Self {
        Self { gen }
    }
}

impl<F: Real> FrameGenerator for FrameInference<'_, F> {
    type Image = Frame;

    fn generate(&mut self, image: &Frame, sem: &Frame) -> Result<Frame> {
        self.generate_batch(&[(image.clone(), sem.clone())]).map(|mut v| v.remove(0))
    }

    fn generate_batch(&mut self, calls: &[(Frame, Frame)]) -> Result<Vec<Frame>> {
        let g = Graph::new();
        let images = batch_tensor::<F>(&calls.iter().map(|c| &c.0).collect::<Vec<_>>())?;
        let sems = batch_tensor::<F>(&calls.iter().map(|c| &c.1).collect::<Vec<_>>())?;
        let (i, s) = (g.input(images), g.input(sems));
        let mut gg = GraphGenerator::new(self.gen, &g);
        let y = gg.generate(&i, &s)?;
        let out = g.value(y);
        (0..calls.len()).map(|k| Frame::from_batch(&out, k)).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Records every call; images are labelled strings.
    #[derive(Default)]
    struct Tracer {
        calls: Vec<(String, String)>,
    }

    impl FrameGenerator for Tracer {
        type Image = String;

        fn generate(&mut self, image: &String, sem: &String) -> Result<String> {
            self.calls.push((image.clone(), sem.clone()));
            Ok(format!("G({image},{sem})"))
        }
    }

    struct SemEcho;

    impl FrameGenerator for SemEcho {
        type Image = String;

        fn generate(&mut self, _image: &String, sem: &String) -> Result<String> {
            Ok(sem.clone())
        }
    }

    fn clip(prefix: &str, t: usize) -> Vec<String> {
        (1..=t).map(|i| format!("{prefix}{i}")).collect()
    }

    fn pairs(v: &[(&str, &str)]) -> Vec<(String, String)> {
        v.iter().map(|(a, b)| (a.to_string(), b.to_string())).collect()
    }

    #[test]
    fn temporal_downstream_trace() {
        let mut g = Tracer::default();
        let out = temporal_downstream(&mut g, &clip("x", 3), &clip("s", 3)).unwrap();
        assert_eq!(g.calls, pairs(&[("x1", "s1"), ("G(x1,s1)", "s2"), ("G(G(x1,s1),s2)", "s3")]));
        assert_eq!(out.branch, Branch::TemporalDown);
        assert_eq!(out.frames[2], "G(G(G(x1,s1),s2),s3)");
    }

    #[test]
    fn temporal_upstream_trace_and_order() {
        let mut g = Tracer::default();
        let out = temporal_upstream(&mut g, &clip("x", 3), &clip("s", 3)).unwrap();
        assert_eq!(g.calls, pairs(&[("x3", "s3"), ("G(x3,s3)", "s2"), ("G(G(x3,s3),s2)", "s1")]));
        assert_eq!(out.frames[2], "G(x3,s3)");
        assert_eq!(out.frames[0], "G(G(G(x3,s3),s2),s1)");
    }

    #[test]
    fn spatial_branches_use_fixed_anchors() {
        let mut g = Tracer::default();
        let down = spatial_downstream(&mut g, &clip("x", 4), &clip("s", 4)).unwrap();
        assert!(g.calls.iter().all(|(i, _)| i == "x1"));
        assert_eq!(down.frames, ["G(x1,s1)", "G(x1,s2)", "G(x1,s3)", "G(x1,s4)"]);
        let mut g = Tracer::default();
        let up = spatial_upstream(&mut g, &clip("x", 4), &clip("s", 4)).unwrap();
        assert!(g.calls.iter().all(|(i, _)| i == "x4"));
        assert_eq!(g.calls[0].1, "s4");
        assert_eq!(up.frames, ["G(x4,s1)", "G(x4,s2)", "G(x4,s3)", "G(x4,s4)"]);
    }

    #[test]
    fn semantic_echo_returns_semantics() {
        let s = clip("s", 3);
        let out = temporal_downstream(&mut SemEcho, &clip("x", 3), &s).unwrap();
        assert_eq!(out.frames, s);
    }

    #[test]
    fn single_frame_collapses_to_one_call() {
        let (x, s) = (clip("x", 1), clip("s", 1));
        let bundle = run_all_branches(&mut Tracer::default(), &x, &s).unwrap();
        for seq in bundle.sequences() {
            assert_eq!(seq.frames, ["G(x1,s1)"]);
        }
    }

    #[test]
    fn all_branches_make_four_t_calls_and_match_standalone_schedules() {
        let (x, s) = (clip("x", 5), clip("s", 5));
        let mut g = Tracer::default();
        let bundle = run_all_branches(&mut g, &x, &s).unwrap();
        assert_eq!(g.calls.len(), 20);
        assert_eq!(bundle.branches(), Branch::ALL);
        let solo = [
            temporal_downstream(&mut Tracer::default(), &x, &s).unwrap(),
            temporal_upstream(&mut Tracer::default(), &x, &s).unwrap(),
            spatial_downstream(&mut Tracer::default(), &x, &s).unwrap(),
            spatial_upstream(&mut Tracer::default(), &x, &s).unwrap(),
        ];
        for seq in solo {
            assert_eq!(bundle.get(seq.branch).unwrap(), &seq);
        }
    }

    #[test]
    fn subset_of_branches() {
        let (x, s) = (clip("x", 3), clip("s", 3));
        let mut g = Tracer::default();
        let bundle = run_branches(&mut g, &x, &s, &[Branch::SpatialUp, Branch::TemporalDown]).unwrap();
        assert_eq!(bundle.branches(), [Branch::TemporalDown, Branch::SpatialUp]);
        assert_eq!(g.calls.len(), 6);
        assert!(bundle.get(Branch::SpatialDown).is_none());
    }

    #[test]
    fn length_mismatch_is_an_error() {
        assert!(temporal_downstream(&mut Tracer::default(), &clip("x", 3), &clip("s", 2)).is_err());
        assert!(run_all_branches(&mut Tracer::default(), &clip("x", 0), &clip("s", 0)).is_err());
    }

    #[test]
    fn bundle_rejects_duplicates() {
        let seq = GeneratedSequence { branch: Branch::SpatialUp, frames: vec![1, 2] };
        assert!(GenerationBundle::new(vec![seq.clone(), seq]).is_err());
    }
}
