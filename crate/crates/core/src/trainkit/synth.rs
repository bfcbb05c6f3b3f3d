use std::fs;
use std::path::{Path, PathBuf};

use image::GrayImage;

use crate::branches::Branch;
use crate::error::{Error, Result};
use crate::frames::{denormalize_frame, Clip};
use crate::fusion::AttentionMaps;
use crate::metrics::{evaluate_dataset, train_embedding_model, MetricsReport};
use crate::synthdata::{load_paired_dataset, read_frame, DatasetManifest};

use super::config::Ablation;
use super::pipeline::{synthesize_clip, Networks, Pipeline};

/// Paths written by [`synthesize`].
#[derive(Clone, Debug, Default, PartialEq)]
pub struct SynthesisFiles {
    pub frames: Vec<PathBuf>,
    /// Per frame, one map per branch in [`Branch::ALL`] order.
    pub attention: Vec<[PathBuf; 4]>,
}

/// Attention weight of `branch` as 8-bit gray, `round(255 a)`.
pub fn attention_image(maps: &AttentionMaps, branch: Branch) -> GrayImage {
    let k = branch.index();
    GrayImage::from_fn(maps.width as u32, maps.height as u32, |x, y| {
        let a = maps.maps[k][y as usize * maps.width + x as usize];
        image::Luma([(a.clamp(0.0, 1.0) * 255.0).round() as u8])
    })
}

fn save(img: impl FnOnce(&Path) -> image::ImageResult<()>, path: &Path) -> Result<()> {
    img(path).map_err(|e| Error::Image { path: path.to_path_buf(), source: e })
}

/// Writes `frame_%04d.png` for every synthesized frame into `out_dir` and,
/// when asked and the setting fuses, `attention/frame_%04d_<branch>.png`.
pub fn synthesize(
    nets: &Networks,
    ablation: Ablation,
    exo: &Clip,
    sem: &Clip,
    out_dir: &Path,
    with_attention: bool,
) -> Result<SynthesisFiles> {
    let (clip, maps) = synthesize_clip(nets, ablation, exo, sem)?;
    fs::create_dir_all(out_dir).map_err(|e| Error::io(out_dir, e))?;
    let mut files = SynthesisFiles::default();
    for (t, frame) in clip.frames().iter().enumerate() {
        let path = out_dir.join(format!("frame_{t:04}.png"));
        save(|p| denormalize_frame(frame).save_with_format(p, image::ImageFormat::Png), &path)?;
        files.frames.push(path);
    }
    if let (true, Some(maps)) = (with_attention, maps) {
        let dir = out_dir.join("attention");
        fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        for (t, m) in maps.iter().enumerate() {
            let mut paths: [PathBuf; 4] = Default::default();
            for b in Branch::ALL {
                let path = dir.join(format!("frame_{t:04}_{}.png", b.name()));
                save(|p| attention_image(m, b).save_with_format(p, image::ImageFormat::Png), &path)?;
                paths[b.index()] = path;
            }
            files.attention.push(paths);
        }
    }
    Ok(files)
}

fn read_view(dir: &Path) -> Result<Clip> {
    let mut paths: Vec<PathBuf> = fs::read_dir(dir)
        .map_err(|e| Error::io(dir, e))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x.eq_ignore_ascii_case("png")))
        .collect();
    paths.sort();
    if paths.is_empty() {
        return Err(Error::shape(format!("{} holds no PNG frames", dir.display())));
    }
    Clip::new(paths.iter().map(|p| read_frame(p)).collect::<Result<Vec<_>>>()?)
}

/// Reads the `exo/` and `sem/` frame directories of a clip directory (the
/// dataset layout), frames ordered by file name.
pub fn load_input_clip(dir: &Path) -> Result<(Clip, Clip)> {
    let exo = read_view(&dir.join("exo"))?;
    let sem = read_view(&dir.join("sem"))?;
    if exo.len() != sem.len() {
        return Err(Error::shape(format!("{}: {} exo frames but {} semantic maps", dir.display(), exo.len(), sem.len())));
    }
    Ok((exo, sem))
}

/// Scores `nets` on `split` of the dataset at `root`. The classifier behind
/// KL, FID and top-k is trained on `train_split` (or on `split` itself when
/// the dataset has no training clips) with `seed`.
pub fn evaluate_split(
    nets: &Networks,
    ablation: Ablation,
    root: &Path,
    split: &str,
    train_split: &str,
    seed: u64,
) -> Result<MetricsReport> {
    let manifest = DatasetManifest::read(root)?;
    let palette = manifest.palette();
    let samples = load_paired_dataset(root, split)?;
    if samples.is_empty() {
        return Err(Error::config(format!("split `{split}` has no clips")));
    }
    let train = match manifest.splits().contains(train_split) && train_split != split {
        true => load_paired_dataset(root, train_split)?,
        false => samples.clone(),
    };
    let model = train_embedding_model(&train, &palette, seed)?;
    evaluate_dataset(&Pipeline { nets, ablation }, &samples, &model, &palette)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::Frame;
    use crate::trainkit::config::TrainConfig;

    #[test]
    fn writes_frames_and_normalized_attention() {
        let nets = Networks::build(&TrainConfig::tiny()).unwrap();
        let exo = Clip::new((0..3).map(|i| Frame::filled(8, 8, i as f32 * 0.3 - 0.5)).collect()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = synthesize(&nets, Ablation::F, &exo, &exo, dir.path(), true).unwrap();
        assert_eq!(files.frames.len(), 3);
        assert_eq!(files.attention.len(), 3);
        for paths in &files.attention {
            let imgs: Vec<GrayImage> = paths.iter().map(|p| image::open(p).unwrap().into_luma8()).collect();
            for (x, y, _) in imgs[0].enumerate_pixels() {
                let sum: i32 = imgs.iter().map(|im| i32::from(im.get_pixel(x, y).0[0])).sum();
                assert!((sum - 255).abs() <= 2, "sum {sum}");
            }
        }
        let again = tempfile::tempdir().unwrap();
        let files2 = synthesize(&nets, Ablation::F, &exo, &exo, again.path(), true).unwrap();
        for (a, b) in files.frames.iter().zip(&files2.frames) {
            assert_eq!(fs::read(a).unwrap(), fs::read(b).unwrap());
        }
    }

    #[test]
    fn averaging_settings_write_no_attention() {
        let cfg = TrainConfig { ablation: Ablation::D, ..TrainConfig::tiny() };
        let nets = Networks::build(&cfg).unwrap();
        let exo = Clip::new(vec![Frame::filled(8, 8, 0.0); 2]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let files = synthesize(&nets, Ablation::D, &exo, &exo, dir.path(), true).unwrap();
        assert_eq!((files.frames.len(), files.attention.len()), (2, 0));
    }
}
