//! Image-quality and distribution metrics, and the small classifier that
//! provides class probabilities and embeddings for KL, FID and top-k.
//!
//! Pixel metrics work in `[0, 1]`: frames are mapped with `(v + 1) / 2`.

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autograd::{Graph, Var};
use crate::error::{Error, Result};
use crate::frames::{batch_tensor, Clip, Frame, PairedSample};
use crate::nn::{join, param_ids, Conv2d, Init, Linear, Module, Param};
use crate::optim::{Adam, AdamConfig};
use crate::synthdata::dominant_class;

/// Reported for identical inputs instead of infinity.
pub const DB_CAP: f64 = 100.0;
pub const KL_EPS: f64 = 1e-8;

const SSIM_WINDOW: usize = 11;
const SSIM_SIGMA: f64 = 1.5;
const SSIM_K1: f64 = 0.01;
const SSIM_K2: f64 = 0.03;

fn check_same(a: &Frame, b: &Frame) -> Result<()> {
    if a.size() != b.size() {
        return Err(Error::shape(format!(
            "frames are {}x{} and {}x{}",
            a.height(),
            a.width(),
            b.height(),
            b.width()
        )));
    }
    Ok(())
}

fn gaussian_kernel(size: usize, sigma: f64) -> Vec<f64> {
    let c = (size as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..size).map(|i| (-((i as f64 - c).powi(2)) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable "valid" filtering of an `h x w` plane.
fn filter_valid(plane: &[f64], h: usize, w: usize, k: &[f64]) -> (Vec<f64>, usize, usize) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    let mut rows = vec![0.0; h * ow];
    for y in 0..h {
        for x in 0..ow {
            rows[y * ow + x] = (0..n).map(|i| plane[y * w + x + i] * k[i]).sum();
        }
    }
    let mut out = vec![0.0; oh * ow];
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| rows[(y + i) * ow + x] * k[i]).sum();
        }
    }
    (out, oh, ow)
}

/// Windowed SSIM: 11x11 Gaussian window (sigma 1.5, shrunk to the largest odd
/// size that fits smaller frames), K1 = 0.01, K2 = 0.03, dynamic range 1,
/// averaged over valid windows and channels.
pub fn ssim(a: &Frame, b: &Frame) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = a.size();
    let mut size = SSIM_WINDOW.min(h).min(w);
    if size % 2 == 0 {
        size -= 1;
    }
    let k = gaussian_kernel(size, SSIM_SIGMA);
    let (c1, c2) = (SSIM_K1 * SSIM_K1, SSIM_K2 * SSIM_K2);
    let (ua, ub) = (a.to_unit_range(), b.to_unit_range());
    let m = h * w;
    let mut total = 0.0;
    for c in 0..3 {
        let pa = &ua[c * m..(c + 1) * m];
        let pb = &ub[c * m..(c + 1) * m];
        let prod = |f: &dyn Fn(f64, f64) -> f64| pa.iter().zip(pb).map(|(&x, &y)| f(x, y)).collect::<Vec<f64>>();
        let (mu_a, oh, ow) = filter_valid(pa, h, w, &k);
        let (mu_b, ..) = filter_valid(pb, h, w, &k);
        let (aa, ..) = filter_valid(&prod(&|x, _| x * x), h, w, &k);
        let (bb, ..) = filter_valid(&prod(&|_, y| y * y), h, w, &k);
        let (ab, ..) = filter_valid(&prod(&|x, y| x * y), h, w, &k);
        let mut s = 0.0;
        for i in 0..oh * ow {
            let (ma, mb) = (mu_a[i], mu_b[i]);
            let va = aa[i] - ma * ma;
            let vb = bb[i] - mb * mb;
            let cov = ab[i] - ma * mb;
            s += ((2.0 * ma * mb + c1) * (2.0 * cov + c2)) / ((ma * ma + mb * mb + c1) * (va + vb + c2));
        }
        total += s / (oh * ow) as f64;
    }
    Ok(total / 3.0)
}

fn db(inv: f64) -> f64 {
    if inv <= 0.0 {
        DB_CAP
    } else {
        (10.0 * (1.0 / inv).log10()).min(DB_CAP)
    }
}

/// `10 log10(1 / MSE)`, capped at 100 dB.
pub fn psnr(a: &Frame, b: &Frame) -> Result<f64> {
    check_same(a, b)?;
    let (ua, ub) = (a.to_unit_range(), b.to_unit_range());
    let mse = ua.iter().zip(&ub).map(|(x, y)| (x - y).powi(2)).sum::<f64>() / ua.len() as f64;
    Ok(db(mse))
}

/// `|d/dx| + |d/dy|` with forward differences, zero on the last column/row.
fn gradient_sum(u: &[f64], h: usize, w: usize) -> Vec<f64> {
    let mut out = vec![0.0; u.len()];
    for c in 0..3 {
        let p = &u[c * h * w..(c + 1) * h * w];
        for y in 0..h {
            for x in 0..w {
                let gx = if x + 1 < w { (p[y * w + x + 1] - p[y * w + x]).abs() } else { 0.0 };
                let gy = if y + 1 < h { (p[(y + 1) * w + x] - p[y * w + x]).abs() } else { 0.0 };
                out[c * h * w + y * w + x] = gx + gy;
            }
        }
    }
    out
}

/// Sharpness difference `10 log10(1 / mean|grad(a) - grad(b)|)`, capped at 100 dB.
pub fn sharpness_difference(a: &Frame, b: &Frame) -> Result<f64> {
    check_same(a, b)?;
    let (h, w) = a.size();
    let ga = gradient_sum(&a.to_unit_range(), h, w);
    let gb = gradient_sum(&b.to_unit_range(), h, w);
    let mean = ga.iter().zip(&gb).map(|(x, y)| (x - y).abs()).sum::<f64>() / ga.len() as f64;
    Ok(db(mean))
}

/// `sum_i p_i ln(max(p_i, eps) / max(q_i, eps))`.
pub fn kl_divergence(p: &[f64], q: &[f64]) -> Result<f64> {
    if p.len() != q.len() {
        return Err(Error::shape(format!("distributions have {} and {} classes", p.len(), q.len())));
    }
    Ok(p.iter().zip(q).map(|(&pi, &qi)| pi * (pi.max(KL_EPS) / qi.max(KL_EPS)).ln()).sum())
}

/// Mean and population standard deviation.
pub fn mean_std(v: &[f64]) -> (f64, f64) {
    if v.is_empty() {
        return (0.0, 0.0);
    }
    let n = v.len() as f64;
    let mean = v.iter().sum::<f64>() / n;
    let var = v.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
    (mean, var.sqrt())
}

/// Per-pair KL between generated and real class distributions.
pub fn kl_from_probs(gen: &[Vec<f64>], real: &[Vec<f64>]) -> Result<(f64, f64)> {
    if gen.len() != real.len() {
        return Err(Error::shape(format!("{} generated vs {} real frames", gen.len(), real.len())));
    }
    let kls = gen.iter().zip(real).map(|(p, q)| kl_divergence(p, q)).collect::<Result<Vec<_>>>()?;
    Ok(mean_std(&kls))
}

pub fn kl_score(gen: &[Frame], real: &[Frame], model: &EmbeddingModel) -> Result<(f64, f64)> {
    if gen.len() != real.len() {
        return Err(Error::shape(format!("{} generated vs {} real frames", gen.len(), real.len())));
    }
    kl_from_probs(&model.probabilities(gen)?, &model.probabilities(real)?)
}

fn moments(x: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if x.len() < 2 {
        return Err(Error::shape(format!("need at least 2 feature vectors, got {}", x.len())));
    }
    let d = x[0].len();
    if x.iter().any(|v| v.len() != d) {
        return Err(Error::shape("feature vectors differ in dimension"));
    }
    let m = DMatrix::from_fn(x.len(), d, |i, j| x[i][j]);
    let mean = DVector::from_fn(d, |j, _| m.column(j).mean());
    let centered = DMatrix::from_fn(x.len(), d, |i, j| m[(i, j)] - mean[j]);
    let cov = centered.transpose() * &centered / (x.len() - 1) as f64;
    Ok((mean, cov))
}

fn sqrt_psd(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym);
    let roots = eig.eigenvalues.map(|v| v.max(0.0).sqrt());
    &eig.eigenvectors * DMatrix::from_diagonal(&roots) * eig.eigenvectors.transpose()
}

/// Frechet distance between Gaussian fits (unbiased covariance). The cross
/// term is `Tr sqrt(sqrt(S_g) S_r sqrt(S_g))`, computed by symmetric
/// eigendecomposition with negative eigenvalues clipped to 0.
pub fn fid(gen: &[Vec<f64>], real: &[Vec<f64>]) -> Result<f64> {
    let (mg, sg) = moments(gen)?;
    let (mr, sr) = moments(real)?;
    if mg.len() != mr.len() {
        return Err(Error::shape(format!("feature dimensions {} and {} differ", mg.len(), mr.len())));
    }
    let root_g = sqrt_psd(&sg);
    let cross = sqrt_psd(&(&root_g * &sr * &root_g)).trace();
    let d = (&mg - &mr).norm_squared() + sg.trace() + sr.trace() - 2.0 * cross;
    Ok(d.max(0.0))
}

/// Whether `label` is among the `k` most probable classes (ties favour the label).
pub fn in_top_k(probs: &[f64], label: usize, k: usize) -> bool {
    let p = probs[label];
    probs.iter().filter(|&&q| q > p).count() < k
}

/// Top-k accuracy in percent over all frames, and over frames whose paired
/// real image has top-1 confidence above 0.5 (`None` when there are none).
pub fn topk_from_probs(gen: &[Vec<f64>], labels: &[usize], real_conf: &[f64], k: usize) -> Result<(f64, Option<f64>)> {
    if gen.len() != labels.len() || gen.len() != real_conf.len() {
        return Err(Error::shape("predictions, labels and confidences differ in count"));
    }
    if gen.is_empty() {
        return Err(Error::shape("no frames to score"));
    }
    let hits: Vec<bool> = gen.iter().zip(labels).map(|(p, &l)| in_top_k(p, l, k)).collect();
    let pct = |sel: &mut dyn Iterator<Item = bool>| {
        let (n, c) = sel.fold((0usize, 0usize), |(n, c), h| (n + 1, c + h as usize));
        (n > 0).then(|| 100.0 * c as f64 / n as f64)
    };
    let all = pct(&mut hits.iter().copied()).expect("non-empty");
    let conf = pct(&mut hits.iter().zip(real_conf).filter(|(_, &c)| c > 0.5).map(|(&h, _)| h));
    Ok((all, conf))
}

pub fn topk_accuracy(gen: &[Frame], real: &[Frame], labels: &[usize], model: &EmbeddingModel, k: usize) -> Result<(f64, Option<f64>)> {
    let real_conf: Vec<f64> = model.probabilities(real)?.iter().map(|p| p.iter().copied().fold(0.0, f64::max)).collect();
    topk_from_probs(&model.probabilities(gen)?, labels, &real_conf, k)
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingConfig {
    pub image_size: usize,
    pub n_classes: usize,
    pub width: usize,
    pub steps: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub seed: u64,
}

impl EmbeddingConfig {
    pub fn new(image_size: usize, n_classes: usize, seed: u64) -> Self {
        Self { image_size, n_classes, width: 16, steps: 300, batch_size: 16, lr: 1e-3, seed }
    }
}

/// Three stride-2 convolutions, global average pooling (the embedding) and a
/// linear classifier.
#[derive(Clone, Debug)]
pub struct EmbeddingModel {
    config: EmbeddingConfig,
    convs: [Conv2d<f32>; 3],
    head: Linear<f32>,
}

const LEAK: f64 = 0.2;
const EMBED_CHUNK: usize = 64;

impl EmbeddingModel {
    pub fn new(cfg: EmbeddingConfig) -> Result<Self> {
        if cfg.n_classes < 2 || cfg.width == 0 || cfg.image_size < 8 {
            return Err(Error::config("embedding model needs >= 2 classes, positive width and image size >= 8"));
        }
        let mut init = Init::new(cfg.seed);
        let w = cfg.width;
        let convs = [
            Conv2d::new(&mut init, 3, w, 4, 2, 1, true),
            Conv2d::new(&mut init, w, 2 * w, 4, 2, 1, true),
            Conv2d::new(&mut init, 2 * w, 4 * w, 4, 2, 1, true),
        ];
        let head = Linear::new(&mut init, 4 * w, cfg.n_classes);
        Ok(Self { config: cfg, convs, head })
    }

    pub fn config(&self) -> &EmbeddingConfig {
        &self.config
    }

    /// Returns `(features [N, 4w], logits [N, classes])`.
    fn forward(&self, g: &Graph<f32>, x: Var) -> (Var, Var) {
        let mut h = x;
        for c in &self.convs {
            h = g.leaky_relu(c.forward(g, h), LEAK);
        }
        let feats = g.global_avg_pool(h);
        (feats, self.head.forward(g, feats))
    }

    fn check(&self, frames: &[Frame]) -> Result<()> {
        let s = self.config.image_size;
        match frames.iter().find(|f| f.size() != (s, s)) {
            Some(f) => Err(Error::shape(format!("embedding model expects {s}x{s}, got {}x{}", f.height(), f.width()))),
            None => Ok(()),
        }
    }

    fn run(&self, frames: &[Frame]) -> Result<(Vec<Vec<f64>>, Vec<Vec<f64>>)> {
        self.check(frames)?;
        let (mut feats, mut probs) = (Vec::new(), Vec::new());
        for chunk in frames.chunks(EMBED_CHUNK) {
            let g = Graph::new();
            let x = g.input(batch_tensor(&chunk.iter().collect::<Vec<_>>())?);
            let (f, l) = self.forward(&g, x);
            let (fv, lv) = (g.value(f), g.value(l));
            let (fd, k) = (fv.shape()[1], lv.shape()[1]);
            for i in 0..chunk.len() {
                feats.push(fv.data()[i * fd..(i + 1) * fd].iter().map(|&v| f64::from(v)).collect());
                let row: Vec<f64> = lv.data()[i * k..(i + 1) * k].iter().map(|&v| f64::from(v)).collect();
                let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                let e: Vec<f64> = row.iter().map(|v| (v - max).exp()).collect();
                let z: f64 = e.iter().sum();
                probs.push(e.into_iter().map(|v| v / z).collect());
            }
        }
        Ok((feats, probs))
    }

    pub fn probabilities(&self, frames: &[Frame]) -> Result<Vec<Vec<f64>>> {
        self.run(frames).map(|r| r.1)
    }

    pub fn features(&self, frames: &[Frame]) -> Result<Vec<Vec<f64>>> {
        self.run(frames).map(|r| r.0)
    }

    pub fn predict(&self, frames: &[Frame]) -> Result<Vec<usize>> {
        Ok(self
            .probabilities(frames)?
            .iter()
            .map(|p| (0..p.len()).max_by(|&a, &b| p[a].total_cmp(&p[b])).unwrap_or(0))
            .collect())
    }

    /// Seeded mini-batch training with cross-entropy; returns the last loss.
    pub fn fit(&mut self, frames: &[Frame], labels: &[usize]) -> Result<f64> {
        self.check(frames)?;
        if frames.len() != labels.len() || frames.is_empty() {
            return Err(Error::shape("need one label per frame and at least one frame"));
        }
        if let Some(&l) = labels.iter().find(|&&l| l >= self.config.n_classes) {
            return Err(Error::config(format!("label {l} out of range for {} classes", self.config.n_classes)));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed ^ 0x5eed);
        let mut opt = Adam::new(AdamConfig { lr: self.config.lr, beta1: 0.9, ..AdamConfig::default() });
        let mut order: Vec<usize> = (0..frames.len()).collect();
        let mut cursor = order.len();
        let mut last = f64::NAN;
        for _ in 0..self.config.steps {
            let mut idx = Vec::with_capacity(self.config.batch_size);
            while idx.len() < self.config.batch_size.min(frames.len()) {
                if cursor == order.len() {
                    order.shuffle(&mut rng);
                    cursor = 0;
                }
                idx.push(order[cursor]);
                cursor += 1;
            }
            let g = Graph::with_trainable(param_ids(self));
            let x = g.input(batch_tensor(&idx.iter().map(|&i| &frames[i]).collect::<Vec<_>>())?);
            let (_, logits) = self.forward(&g, x);
            let y: Vec<usize> = idx.iter().map(|&i| labels[i]).collect();
            let loss = g.cross_entropy(logits, &y);
            last = f64::from(g.value(loss).item());
            let grads = g.backward(loss);
            opt.step(self, "", &grads);
        }
        Ok(last)
    }
}

impl Module<f32> for EmbeddingModel {
    fn visit(&self, prefix: &str, f: &mut dyn FnMut(String, &Param<f32>)) {
        for (k, c) in self.convs.iter().enumerate() {
            c.visit(&join(prefix, &format!("conv{k}")), f);
        }
        self.head.visit(&join(prefix, "head"), f);
    }

    fn visit_mut(&mut self, prefix: &str, f: &mut dyn FnMut(String, &mut Param<f32>)) {
        for (k, c) in self.convs.iter_mut().enumerate() {
            c.visit_mut(&join(prefix, &format!("conv{k}")), f);
        }
        self.head.visit_mut(&join(prefix, "head"), f);
    }
}

/// Class label of every ego frame of `samples` (dominant semantic class).
pub fn frame_labels(samples: &[PairedSample], palette: &[[u8; 3]]) -> Vec<usize> {
    samples.iter().flat_map(|s| s.sem.frames().iter().map(|f| dominant_class(f, palette))).collect()
}

/// Trains a classifier on the real ego frames of `samples`.
pub fn train_embedding_model(samples: &[PairedSample], palette: &[[u8; 3]], seed: u64) -> Result<EmbeddingModel> {
    let frames: Vec<Frame> = samples.iter().flat_map(|s| s.ego.frames().iter().cloned()).collect();
    let size = frames.first().ok_or_else(|| Error::shape("no frames to train on"))?.height();
    let mut model = EmbeddingModel::new(EmbeddingConfig::new(size, palette.len(), seed))?;
    model.fit(&frames, &frame_labels(samples, palette))?;
    Ok(model)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub ssim: f64,
    pub psnr: f64,
    pub sd: f64,
    pub kl_mean: f64,
    pub kl_std: f64,
    pub fid: f64,
    pub top1_all: f64,
    pub top1_conf: Option<f64>,
    pub top5_all: f64,
    pub top5_conf: Option<f64>,
    pub frames: usize,
}

impl MetricsReport {
    /// One-row text table: SSIM, PSNR, SD, KL, FID and top-1/top-5 accuracy.
    pub fn table(&self, label: &str) -> String {
        let opt = |v: Option<f64>| v.map_or_else(|| "n/a".to_string(), |v| format!("{v:.2}"));
        let header = format!(
            "{:<12} {:>8} {:>8} {:>8} {:>14} {:>9} {:>9} {:>9} {:>9} {:>9}",
            "method", "SSIM", "PSNR", "SD", "KL", "FID", "top1-all", "top1-conf", "top5-all", "top5-conf"
        );
        let row = format!(
            "{:<12} {:>8.4} {:>8.4} {:>8.4} {:>14} {:>9.3} {:>9.2} {:>9} {:>9.2} {:>9}",
            label,
            self.ssim,
            self.psnr,
            self.sd,
            format!("{:.2} ± {:.2}", self.kl_mean, self.kl_std),
            self.fid,
            self.top1_all,
            opt(self.top1_conf),
            self.top5_all,
            opt(self.top5_conf)
        );
        format!("{header}\n{row}\n")
    }
}

/// Produces the egocentric clip for a paired sample.
pub trait ClipSynthesizer {
    fn synthesize_clip(&self, sample: &PairedSample) -> Result<Clip>;
}

impl<T: Fn(&PairedSample) -> Result<Clip>> ClipSynthesizer for T {
    fn synthesize_clip(&self, sample: &PairedSample) -> Result<Clip> {
        self(sample)
    }
}

/// Synthesizes every sample and scores the result against its ego clip.
pub fn evaluate_dataset(
    synth: &dyn ClipSynthesizer,
    samples: &[PairedSample],
    model: &EmbeddingModel,
    palette: &[[u8; 3]],
) -> Result<MetricsReport> {
    let (mut gen, mut real) = (Vec::new(), Vec::new());
    for s in samples {
        let out = synth.synthesize_clip(s)?;
        if out.len() != s.ego.len() {
            return Err(Error::shape(format!("clip {}: synthesized {} frames for {}", s.clip_id, out.len(), s.ego.len())));
        }
        gen.extend(out.into_frames());
        real.extend(s.ego.frames().iter().cloned());
    }
    if gen.is_empty() {
        return Err(Error::shape("no frames to evaluate"));
    }
    let n = gen.len() as f64;
    let (mut ssim_sum, mut psnr_sum, mut sd_sum) = (0.0, 0.0, 0.0);
    for (a, b) in gen.iter().zip(&real) {
        ssim_sum += ssim(a, b)?;
        psnr_sum += psnr(a, b)?;
        sd_sum += sharpness_difference(a, b)?;
    }
    let (gen_feats, gen_probs) = model.run(&gen)?;
    let (real_feats, real_probs) = model.run(&real)?;
    let (kl_mean, kl_std) = kl_from_probs(&gen_probs, &real_probs)?;
    let labels = frame_labels(samples, palette);
    let conf: Vec<f64> = real_probs.iter().map(|p| p.iter().copied().fold(0.0, f64::max)).collect();
    let (top1_all, top1_conf) = topk_from_probs(&gen_probs, &labels, &conf, 1)?;
    let (top5_all, top5_conf) = topk_from_probs(&gen_probs, &labels, &conf, 5)?;
    Ok(MetricsReport {
        ssim: ssim_sum / n,
        psnr: psnr_sum / n,
        sd: sd_sum / n,
        kl_mean,
        kl_std,
        fid: fid(&gen_feats, &real_feats)?,
        top1_all,
        top1_conf,
        top5_all,
        top5_conf,
        frames: gen.len(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::Rng;

    fn random_frame(seed: u64, size: usize) -> Frame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Frame::new(size, size, (0..3 * size * size).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
    }

    fn checkerboard(size: usize, invert: bool) -> Frame {
        let mut f = Frame::filled(size, size, 0.0);
        for y in 0..size {
            for x in 0..size {
                let on = ((x + y) % 2 == 0) != invert;
                f.set_pixel(y, x, [if on { 1.0 } else { -1.0 }; 3]);
            }
        }
        f
    }

    /// Direct per-window SSIM for one channel, no separable filtering.
    fn brute_ssim(a: &Frame, b: &Frame) -> f64 {
        let (h, w) = a.size();
        let k = gaussian_kernel(11, 1.5);
        let (ua, ub) = (a.to_unit_range(), b.to_unit_range());
        let mut total = 0.0;
        for c in 0..3 {
            let mut s = 0.0;
            for y0 in 0..=h - 11 {
                for x0 in 0..=w - 11 {
                    let (mut ma, mut mb, mut aa, mut bb, mut ab) = (0.0, 0.0, 0.0, 0.0, 0.0);
                    for i in 0..11 {
                        for j in 0..11 {
                            let wgt = k[i] * k[j];
                            let p = c * h * w + (y0 + i) * w + x0 + j;
                            ma += wgt * ua[p];
                            mb += wgt * ub[p];
                            aa += wgt * ua[p] * ua[p];
                            bb += wgt * ub[p] * ub[p];
                            ab += wgt * ua[p] * ub[p];
                        }
                    }
                    let (c1, c2) = (1e-4, 9e-4);
                    s += ((2.0 * ma * mb + c1) * (2.0 * (ab - ma * mb) + c2))
                        / ((ma * ma + mb * mb + c1) * (aa - ma * ma + bb - mb * mb + c2));
                }
            }
            total += s / ((h - 10) * (w - 10)) as f64;
        }
        total / 3.0
    }

    #[test]
    fn ssim_identity_symmetry_and_oracle() {
        let a = random_frame(1, 16);
        let b = random_frame(2, 16);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
        assert!((ssim(&a, &b).unwrap() - ssim(&b, &a).unwrap()).abs() < 1e-9);
        assert!((ssim(&a, &b).unwrap() - brute_ssim(&a, &b)).abs() < 1e-9);
        let board = checkerboard(16, false);
        let inv = checkerboard(16, true);
        let v = ssim(&board, &inv).unwrap();
        assert!(v < 0.2);
        assert!((v - brute_ssim(&board, &inv)).abs() < 1e-9);
    }

    #[test]
    fn ssim_small_frames_use_a_smaller_window() {
        let a = random_frame(3, 8);
        assert!((ssim(&a, &a).unwrap() - 1.0).abs() < 1e-6);
    }

    #[test]
    fn psnr_cases() {
        let a = Frame::filled(8, 8, -1.0);
        let b = Frame::filled(8, 8, 0.0);
        assert_eq!(psnr(&a, &a).unwrap(), DB_CAP);
        assert!((psnr(&a, &b).unwrap() - 6.0206).abs() < 1e-3);
        let (x, y) = (random_frame(4, 8), random_frame(5, 8));
        assert_eq!(psnr(&x, &y).unwrap(), psnr(&y, &x).unwrap());
    }

    #[test]
    fn sharpness_step_edge() {
        let size = 8;
        let flat = Frame::filled(size, size, -1.0);
        let mut edge = flat.clone();
        for y in 0..size {
            for x in size / 2..size {
                edge.set_pixel(y, x, [1.0; 3]);
            }
        }
        // one unit step per row on a single column, per channel
        let expected_mean = size as f64 / (size * size) as f64;
        let sd = sharpness_difference(&flat, &edge).unwrap();
        assert!((sd - 10.0 * (1.0 / expected_mean).log10()).abs() < 1e-6);
        assert_eq!(sharpness_difference(&edge, &edge).unwrap(), DB_CAP);
        assert_eq!(sd, sharpness_difference(&edge, &flat).unwrap());
    }

    #[test]
    fn kl_cases() {
        let p = [0.7, 0.2, 0.1];
        let q = [0.1, 0.2, 0.7];
        assert!((kl_divergence(&p, &q).unwrap() - 1.1675).abs() < 1e-4);
        assert_eq!(kl_divergence(&p, &p).unwrap(), 0.0);
        let (m, s) = kl_from_probs(&[p.to_vec()], &[p.to_vec()]).unwrap();
        assert_eq!((m, s), (0.0, 0.0));
        assert!(kl_divergence(&p, &q[..2]).is_err());
    }

    #[test]
    fn fid_cases() {
        let g: Vec<Vec<f64>> = [-1.0, 0.0, 1.0].iter().map(|&v| vec![v]).collect();
        let r: Vec<Vec<f64>> = [0.0, 1.0, 2.0].iter().map(|&v| vec![v]).collect();
        assert!((fid(&g, &r).unwrap() - 1.0).abs() < 1e-3);
        assert!(fid(&g, &g).unwrap() <= 1e-6);
        assert!((fid(&g, &r).unwrap() - fid(&r, &g).unwrap()).abs() < 1e-9);
        assert!(fid(&g[..1], &r).is_err());
        assert!(fid(&g, &[vec![0.0, 1.0], vec![1.0, 0.0]]).is_err());
    }

    #[test]
    fn fid_two_dimensional_gaussian_closed_form() {
        // diagonal covariances: sum of 1-D Frechet distances
        let g = vec![vec![-1.0, 0.0], vec![1.0, 0.0], vec![0.0, -2.0], vec![0.0, 2.0]];
        let r = vec![vec![1.0, 1.0], vec![3.0, 1.0], vec![2.0, -1.0], vec![2.0, 3.0]];
        let (vgx, vgy) = (2.0 / 3.0, 8.0 / 3.0);
        let want = 4.0 + 1.0 + (vgx + vgx - 2.0 * vgx) + (vgy + vgy - 2.0 * vgy);
        assert!((fid(&g, &r).unwrap() - want).abs() < 1e-9);
    }

    #[test]
    fn planted_top1_table() {
        let onehot = |k: usize| (0..4).map(|i| if i == k { 0.9 } else { 0.1 / 3.0 }).collect::<Vec<f64>>();
        let preds = [0, 1, 2, 3, 0, 1, 3, 2].map(onehot).to_vec();
        let labels = [0, 1, 2, 3, 0, 1, 2, 3];
        let (all, conf) = topk_from_probs(&preds, &labels, &[0.9; 8], 1).unwrap();
        assert_eq!(all, 75.0);
        assert_eq!(conf, Some(75.0));
        let (all, _) = topk_from_probs(&preds, &labels, &[0.9; 8], 4).unwrap();
        assert_eq!(all, 100.0);
        let (_, conf) = topk_from_probs(&preds, &labels, &[0.4; 8], 1).unwrap();
        assert_eq!(conf, None);
    }

    #[test]
    fn embedding_model_learns_a_separable_task() {
        let frames: Vec<Frame> = (0..16).map(|i| Frame::filled(16, 16, if i % 2 == 0 { -0.8 } else { 0.8 })).collect();
        let labels: Vec<usize> = (0..16).map(|i| i % 2).collect();
        let mut cfg = EmbeddingConfig::new(16, 2, 3);
        cfg.steps = 60;
        let mut m = EmbeddingModel::new(cfg).unwrap();
        m.fit(&frames, &labels).unwrap();
        assert_eq!(m.predict(&frames).unwrap(), labels);
        for p in m.probabilities(&frames).unwrap() {
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-5);
        }
        assert_eq!(m.features(&frames[..1]).unwrap()[0].len(), 64);
    }
}
