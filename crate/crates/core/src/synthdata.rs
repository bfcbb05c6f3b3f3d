//! Procedural paired exo/ego scenes and the on-disk dataset layout.
//!
//! A scene is a textured plane with a few colored shapes moving on linear
//! trajectories and an agent marker. The exo view shows the whole plane; the
//! ego view is the agent-centered square crop, nearest-upscaled back to the
//! full image size; the semantic map colors each ego pixel by its class.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use image::RgbImage;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::frames::{
    denormalize_frame, normalize_frame, normalize_image, validate_paired_sample, Clip, Frame, PairedSample, SampleShape,
};

/// Semantic colors; class `k` is drawn with `PALETTE[k]`, class 0 is background.
pub const PALETTE: [[u8; 3]; 8] = [
    [0, 0, 0],
    [230, 25, 75],
    [60, 180, 75],
    [0, 130, 200],
    [255, 225, 25],
    [245, 130, 48],
    [145, 30, 180],
    [70, 240, 240],
];

/// Exo rendering colors of the object classes (index 0 unused).
const OBJECT_COLORS: [[f32; 3]; 8] = [
    [0.0, 0.0, 0.0],
    [200.0, 40.0, 40.0],
    [40.0, 190.0, 60.0],
    [50.0, 80.0, 220.0],
    [230.0, 210.0, 40.0],
    [230.0, 120.0, 30.0],
    [150.0, 50.0, 190.0],
    [40.0, 210.0, 210.0],
];

const MARKER_COLOR: [u8; 3] = [255, 255, 255];
const MARKER_RADIUS: f32 = 1.5;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub image_size: usize,
    pub clip_length: usize,
    pub n_shapes: usize,
    /// Including background.
    pub n_classes: usize,
    /// Side of the ego field of view as a fraction of the exo scene.
    pub agent_crop_fraction: f64,
    pub seed: u64,
}

impl Default for SceneConfig {
    fn default() -> Self {
        Self { image_size: 64, clip_length: 5, n_shapes: 3, n_classes: 5, agent_crop_fraction: 0.5, seed: 0 }
    }
}

impl SceneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.image_size < 32 {
            return Err(Error::config(format!("scene image size {} < 32", self.image_size)));
        }
        if self.clip_length == 0 {
            return Err(Error::config("clip length must be positive"));
        }
        if self.n_shapes > 4 {
            return Err(Error::config(format!("n_shapes {} exceeds 4", self.n_shapes)));
        }
        if self.n_classes < 2 || self.n_classes > PALETTE.len() {
            return Err(Error::config(format!("n_classes {} outside 2..={}", self.n_classes, PALETTE.len())));
        }
        if !(self.agent_crop_fraction > 0.2 && self.agent_crop_fraction < 0.8) {
            return Err(Error::config(format!("agent_crop_fraction {} outside (0.2, 0.8)", self.agent_crop_fraction)));
        }
        Ok(())
    }

    /// Pixel side of the ego crop in the exo frame.
    pub fn crop_side(&self) -> usize {
        (self.agent_crop_fraction * self.image_size as f64).round() as usize
    }

    /// Hex SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let json = serde_json::to_vec(self).expect("scene config serializes");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Kind {
    Disc,
    Square,
}

#[derive(Clone, Debug, PartialEq)]
struct Shape {
    class: usize,
    kind: Kind,
    radius: f32,
    pos: [f32; 2],
    vel: [f32; 2],
}

/// Scene state at one time step, in exo pixel coordinates.
#[derive(Clone, Debug, PartialEq)]
pub struct SceneState {
    size: usize,
    shapes: Vec<Shape>,
    agent: [f32; 2],
    agent_vel: [f32; 2],
    crop: usize,
}

/// What a world point shows.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Sample {
    pub class: usize,
    pub rgb: [u8; 3],
}

/// Background texture and object shading as a function of world position.
fn shade(x: f32, y: f32) -> f32 {
    0.8 + 0.2 * ((x * 0.21).sin() * (y * 0.17).cos())
}

fn background(x: f32, y: f32) -> [u8; 3] {
    let r = 70.0 + 45.0 * (x * 0.19).sin();
    let g = 80.0 + 40.0 * (y * 0.23).cos();
    let b = 95.0 + 35.0 * ((x + y) * 0.11).sin();
    [r.round() as u8, g.round() as u8, b.round() as u8]
}

fn reflect(p: &mut f32, v: &mut f32, lo: f32, hi: f32) {
    *p += *v;
    if hi <= lo {
        *p = (lo + hi) / 2.0;
        return;
    }
    while *p < lo || *p > hi {
        if *p < lo {
            *p = 2.0 * lo - *p;
        } else {
            *p = 2.0 * hi - *p;
        }
        *v = -*v;
    }
}

impl SceneState {
    fn random(cfg: &SceneConfig, rng: &mut ChaCha8Rng) -> Self {
        let s = cfg.image_size as f32;
        let crop = cfg.crop_side();
        let half = crop as f32 / 2.0;
        let speed = s / 24.0;
        let shapes = (0..cfg.n_shapes)
            .map(|k| {
                let radius = rng.random_range(s * 0.08..s * 0.16);
                Shape {
                    class: 1 + k % (cfg.n_classes - 1),
                    kind: if rng.random_bool(0.5) { Kind::Disc } else { Kind::Square },
                    radius,
                    pos: [rng.random_range(radius..s - radius), rng.random_range(radius..s - radius)],
                    vel: [rng.random_range(-speed..speed), rng.random_range(-speed..speed)],
                }
            })
            .collect();
        let agent = [rng.random_range(half..=s - half), rng.random_range(half..=s - half)];
        let agent_vel = [rng.random_range(-speed..speed) * 0.5, rng.random_range(-speed..speed) * 0.5];
        Self { size: cfg.image_size, shapes, agent, agent_vel, crop }
    }

    fn advance(&mut self) {
        let s = self.size as f32;
        for sh in &mut self.shapes {
            for d in 0..2 {
                reflect(&mut sh.pos[d], &mut sh.vel[d], sh.radius, s - sh.radius);
            }
        }
        let half = self.crop as f32 / 2.0;
        for d in 0..2 {
            reflect(&mut self.agent[d], &mut self.agent_vel[d], half, s - half);
        }
    }

    /// Top-left exo pixel of the ego crop.
    pub fn crop_origin(&self) -> (usize, usize) {
        let max = (self.size - self.crop) as f32;
        let o = |c: f32| (c - self.crop as f32 / 2.0).round().clamp(0.0, max) as usize;
        (o(self.agent[0]), o(self.agent[1]))
    }

    pub fn crop_side(&self) -> usize {
        self.crop
    }

    /// Appearance and class of the world point `(x, y)`; later shapes are on top.
    /// The agent marker is drawn over everything and labelled background.
    pub fn sample(&self, x: f32, y: f32) -> Sample {
        let (dx, dy) = (x - self.agent[0], y - self.agent[1]);
        if dx.abs() + dy.abs() <= MARKER_RADIUS {
            return Sample { class: 0, rgb: MARKER_COLOR };
        }
        for sh in self.shapes.iter().rev() {
            let (dx, dy) = (x - sh.pos[0], y - sh.pos[1]);
            let inside = match sh.kind {
                Kind::Disc => dx * dx + dy * dy <= sh.radius * sh.radius,
                Kind::Square => dx.abs() <= sh.radius && dy.abs() <= sh.radius,
            };
            if inside {
                let k = shade(x, y);
                let c = OBJECT_COLORS[sh.class];
                return Sample { class: sh.class, rgb: [0, 1, 2].map(|i| (c[i] * k).round().clamp(0.0, 255.0) as u8) };
            }
        }
        Sample { class: 0, rgb: background(x, y) }
    }

    /// Sample at the center of exo pixel `(px, py)`.
    pub fn sample_pixel(&self, px: usize, py: usize) -> Sample {
        self.sample(px as f32 + 0.5, py as f32 + 0.5)
    }

    pub fn render_exo(&self) -> RgbImage {
        RgbImage::from_fn(self.size as u32, self.size as u32, |x, y| image::Rgb(self.sample_pixel(x as usize, y as usize).rgb))
    }

    /// Exo pixel shown at ego pixel `(u, v)`.
    pub fn ego_source(&self, u: usize, v: usize) -> (usize, usize) {
        let (x0, y0) = self.crop_origin();
        (x0 + u * self.crop / self.size, y0 + v * self.crop / self.size)
    }

    /// Ego view rendered straight from the scene.
    pub fn render_ego(&self) -> (RgbImage, RgbImage) {
        let n = self.size as u32;
        let mut ego = RgbImage::new(n, n);
        let mut sem = RgbImage::new(n, n);
        for v in 0..self.size {
            for u in 0..self.size {
                let (px, py) = self.ego_source(u, v);
                let s = self.sample_pixel(px, py);
                ego.put_pixel(u as u32, v as u32, image::Rgb(s.rgb));
                sem.put_pixel(u as u32, v as u32, image::Rgb(PALETTE[s.class]));
            }
        }
        (ego, sem)
    }

    /// Ego view as the upscaled crop of an exo render.
    pub fn crop_exo(&self, exo: &RgbImage) -> RgbImage {
        RgbImage::from_fn(self.size as u32, self.size as u32, |u, v| {
            let (px, py) = self.ego_source(u as usize, v as usize);
            *exo.get_pixel(px as u32, py as u32)
        })
    }
}

fn clip_rng(cfg: &SceneConfig, clip_seed: u64) -> ChaCha8Rng {
    let mut seed = [0u8; 32];
    seed[..8].copy_from_slice(&cfg.seed.to_le_bytes());
    seed[8..16].copy_from_slice(&clip_seed.to_le_bytes());
    ChaCha8Rng::from_seed(seed)
}

/// Scene states of a clip, one per frame.
pub fn scene_trajectory(cfg: &SceneConfig, clip_seed: u64) -> Result<Vec<SceneState>> {
    cfg.validate()?;
    let mut rng = clip_rng(cfg, clip_seed);
    let mut state = SceneState::random(cfg, &mut rng);
    let mut out = Vec::with_capacity(cfg.clip_length);
    for _ in 0..cfg.clip_length {
        out.push(state.clone());
        state.advance();
    }
    Ok(out)
}

pub fn clip_id(clip_seed: u64) -> String {
    format!("clip_{clip_seed:06}")
}

/// A deterministic paired sample; the ego frames are crops of the exo renders.
pub fn generate_scene_clip(cfg: &SceneConfig, clip_seed: u64) -> Result<PairedSample> {
    let states = scene_trajectory(cfg, clip_seed)?;
    let (mut exo, mut ego, mut sem) = (Vec::new(), Vec::new(), Vec::new());
    for st in &states {
        let exo_img = st.render_exo();
        let (_, sem_img) = st.render_ego();
        ego.push(normalize_image(&st.crop_exo(&exo_img)));
        exo.push(normalize_image(&exo_img));
        sem.push(normalize_image(&sem_img));
    }
    Ok(PairedSample { clip_id: clip_id(clip_seed), exo: Clip::new(exo)?, ego: Clip::new(ego)?, sem: Clip::new(sem)? })
}

/// `n` clips with seeds `first_seed..first_seed + n`.
pub fn generate_clips(cfg: &SceneConfig, first_seed: u64, n: usize) -> Result<Vec<PairedSample>> {
    (0..n as u64).map(|k| generate_scene_clip(cfg, first_seed + k)).collect()
}

/// Class of a semantic-map pixel: the nearest palette color.
pub fn class_of_color(rgb: [u8; 3], palette: &[[u8; 3]]) -> usize {
    let dist = |p: &[u8; 3]| (0..3).map(|i| (i32::from(p[i]) - i32::from(rgb[i])).pow(2)).sum::<i32>();
    (0..palette.len()).min_by_key(|&k| dist(&palette[k])).unwrap_or(0)
}

/// Majority non-background class of a semantic map, or 0 if there is none.
pub fn dominant_class(sem: &Frame, palette: &[[u8; 3]]) -> usize {
    let mut counts = vec![0usize; palette.len()];
    let img = denormalize_frame(sem);
    for px in img.pixels() {
        counts[class_of_color(px.0, palette)] += 1;
    }
    (1..palette.len()).filter(|&k| counts[k] > 0).max_by_key(|&k| (counts[k], std::cmp::Reverse(k))).unwrap_or(0)
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FramePaths {
    pub exo: Vec<String>,
    pub ego: Vec<String>,
    pub sem: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClipRecord {
    pub clip_id: String,
    pub split: String,
    /// Paths relative to the dataset root.
    pub frames: FramePaths,
    #[serde(rename = "T")]
    pub t: usize,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub seed: u64,
    pub config_hash: String,
    /// Semantic colors by class; the built-in palette when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub palette: Option<Vec<[u8; 3]>>,
    pub clips: Vec<ClipRecord>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

fn frame_path(split: &str, clip_id: &str, view: &str, index: usize) -> String {
    format!("{split}/{clip_id}/{view}/frame_{index:04}.png")
}

impl DatasetManifest {
    /// Records for `samples` in the standard layout under `split`.
    pub fn describe(samples: &[PairedSample], split: &str, cfg: &SceneConfig) -> Self {
        let clips = samples
            .iter()
            .map(|s| {
                let paths = |view: &str| (0..s.ego.len()).map(|i| frame_path(split, &s.clip_id, view, i)).collect();
                ClipRecord {
                    clip_id: s.clip_id.clone(),
                    split: split.to_string(),
                    frames: FramePaths { exo: paths("exo"), ego: paths("ego"), sem: paths("sem") },
                    t: s.ego.len(),
                }
            })
            .collect();
        Self {
            seed: cfg.seed,
            config_hash: cfg.hash(),
            palette: Some(PALETTE[..cfg.n_classes].to_vec()),
            clips,
        }
    }

    pub fn palette(&self) -> Vec<[u8; 3]> {
        self.palette.clone().unwrap_or_else(|| PALETTE.to_vec())
    }

    /// Structural checks that need no file system access.
    pub fn validate(&self) -> Result<()> {
        let mut seen = BTreeSet::new();
        for r in &self.clips {
            if !seen.insert(r.clip_id.as_str()) {
                return Err(Error::Manifest(format!("duplicate clip_id `{}`", r.clip_id)));
            }
            let f = &r.frames;
            if f.exo.len() != r.t || f.ego.len() != r.t || f.sem.len() != r.t {
                return Err(Error::Manifest(format!("clip `{}` lists frame counts that disagree with T = {}", r.clip_id, r.t)));
            }
        }
        Ok(())
    }

    pub fn read(root: &Path) -> Result<Self> {
        let path = root.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
        let m: Self = serde_json::from_str(&text).map_err(|e| Error::json(&path, e))?;
        m.validate()?;
        Ok(m)
    }

    pub fn splits(&self) -> BTreeSet<String> {
        self.clips.iter().map(|r| r.split.clone()).collect()
    }
}

fn write_png(img: &RgbImage, path: &Path) -> Result<()> {
    if let Some(dir) = path.parent() {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    img.save_with_format(path, image::ImageFormat::Png).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Writes every frame of `samples` as 8-bit RGB PNG at the paths of
/// `manifest`, then `manifest.json`. Records already present in an existing
/// root manifest are kept, so splits can be written one at a time.
pub fn write_dataset(samples: &[PairedSample], manifest: &DatasetManifest, root: &Path) -> Result<()> {
    manifest.validate()?;
    let mut merged = match root.join(MANIFEST_FILE).exists() {
        true => DatasetManifest::read(root)?,
        false => DatasetManifest { clips: Vec::new(), ..manifest.clone() },
    };
    if merged.config_hash != manifest.config_hash || merged.seed != manifest.seed {
        return Err(Error::Manifest(format!("{} was written with a different scene configuration", root.display())));
    }
    for r in &manifest.clips {
        let sample = samples
            .iter()
            .find(|s| s.clip_id == r.clip_id)
            .ok_or_else(|| Error::Manifest(format!("no sample for clip `{}`", r.clip_id)))?;
        if sample.ego.len() != r.t || sample.exo.len() != r.t || sample.sem.len() != r.t {
            return Err(Error::Manifest(format!("clip `{}` does not have T = {} frames", r.clip_id, r.t)));
        }
        let views = [(&r.frames.exo, &sample.exo), (&r.frames.ego, &sample.ego), (&r.frames.sem, &sample.sem)];
        for (paths, clip) in views {
            for (rel, frame) in paths.iter().zip(clip.frames()) {
                write_png(&denormalize_frame(frame), &root.join(rel))?;
            }
        }
    }
    merged.clips.retain(|old| !manifest.clips.iter().any(|r| r.clip_id == old.clip_id && r.split == old.split));
    merged.clips.extend(manifest.clips.iter().cloned());
    merged.palette = manifest.palette.clone().or(merged.palette);
    merged.validate()?;
    let path = root.join(MANIFEST_FILE);
    let text = serde_json::to_string_pretty(&merged).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// Reads one PNG as a normalized frame.
pub fn read_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })?;
    let channels = usize::from(img.color().channel_count());
    if img.color() != image::ColorType::Rgb8 {
        return Err(Error::shape(format!("{}: expected 8-bit RGB, found {channels} channel(s) {:?}", path.display(), img.color())));
    }
    let (w, h) = (img.width() as usize, img.height() as usize);
    normalize_frame(w, h, channels, img.as_bytes())
}

/// Loads every clip of `split`, ordered by clip_id, each validated.
pub fn load_paired_dataset(root: &Path, split: &str) -> Result<Vec<PairedSample>> {
    let manifest = DatasetManifest::read(root)?;
    let mut records: Vec<&ClipRecord> = manifest.clips.iter().filter(|r| r.split == split).collect();
    records.sort_by(|a, b| a.clip_id.cmp(&b.clip_id));
    records.into_iter().map(|r| load_record(root, r)).collect()
}

fn load_record(root: &Path, r: &ClipRecord) -> Result<PairedSample> {
    let load_view = |view: &str, paths: &[String]| -> Result<Clip> {
        let frames = paths
            .iter()
            .enumerate()
            .map(|(index, rel)| {
                let path: PathBuf = root.join(rel);
                if !path.is_file() {
                    return Err(Error::MissingFrame { clip_id: r.clip_id.clone(), view: view.to_string(), index, path });
                }
                read_frame(&path)
            })
            .collect::<Result<Vec<_>>>()?;
        Clip::new(frames)
    };
    let sample = PairedSample {
        clip_id: r.clip_id.clone(),
        exo: load_view("exo", &r.frames.exo)?,
        ego: load_view("ego", &r.frames.ego)?,
        sem: load_view("sem", &r.frames.sem)?,
    };
    let violations = validate_paired_sample(&sample, SampleShape { image_size: None, clip_length: Some(r.t) });
    if !violations.is_empty() {
        return Err(Error::Validation { clip_id: r.clip_id.clone(), violations });
    }
    Ok(sample)
}
