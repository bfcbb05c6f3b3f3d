//! Checkpoint directories: `manifest.json` (names, shapes, dtypes, byte
//! offsets, config, step, RNG position) plus one flat little-endian f32 blob.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::path::Path;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{CheckpointError, Error, Result};
use crate::nn::Module;
use crate::optim::{Adam, Moments};
use crate::tensor::Tensor;

use super::config::TrainConfig;
use super::pipeline::Networks;
use super::train::TrainState;

pub const CHECKPOINT_MANIFEST: &str = "manifest.json";
pub const CHECKPOINT_BLOB: &str = "tensors.bin";
const FORMAT_VERSION: u32 = 1;
const DTYPE: &str = "f32";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub dtype: String,
    /// Byte offset into the blob.
    pub offset: u64,
}

impl TensorEntry {
    fn bytes(&self) -> u64 {
        self.shape.iter().product::<usize>() as u64 * 4
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RngState {
    pub seed: String,
    pub stream: u64,
    /// Decimal, since the position does not fit a JSON number.
    pub word_pos: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub format: u32,
    pub step: u64,
    pub config: TrainConfig,
    pub rng: RngState,
    /// Update counts of every optimizer moment pair, by tensor name.
    pub optimizer_steps: BTreeMap<String, u64>,
    pub tensors: Vec<TensorEntry>,
}

const OPT_G: &str = "optimizer.generator";
const OPT_D: &str = "optimizer.discriminator";

fn moments_names(opt: &str, param: &str) -> (String, String) {
    (format!("{opt}/{param}/m"), format!("{opt}/{param}/v"))
}

/// Writes `state` into directory `dir`, replacing an earlier checkpoint there.
pub fn save_checkpoint(state: &TrainState, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut blob: Vec<u8> = Vec::new();
    let mut tensors = Vec::new();
    let mut push = |name: String, t: &Tensor<f32>| {
        tensors.push(TensorEntry { name, shape: t.shape().to_vec(), dtype: DTYPE.into(), offset: blob.len() as u64 });
        for v in t.data() {
            blob.extend_from_slice(&v.to_le_bytes());
        }
    };
    state.nets.visit("", &mut |name, p| push(name, p.value()));
    let mut optimizer_steps = BTreeMap::new();
    for (opt_name, opt) in [(OPT_G, &state.opt_g), (OPT_D, &state.opt_d)] {
        for (param, m) in &opt.state {
            let (mn, vn) = moments_names(opt_name, param);
            push(mn.clone(), &m.m);
            push(vn, &m.v);
            optimizer_steps.insert(mn, m.steps);
        }
    }
    let manifest = CheckpointManifest {
        format: FORMAT_VERSION,
        step: state.step,
        config: state.config.clone(),
        rng: RngState {
            seed: hex::encode(state.rng.get_seed()),
            stream: state.rng.get_stream(),
            word_pos: state.rng.get_word_pos().to_string(),
        },
        optimizer_steps,
        tensors,
    };
    let blob_path = dir.join(CHECKPOINT_BLOB);
    fs::write(&blob_path, &blob).map_err(|e| Error::io(&blob_path, e))?;
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = serde_json::to_string_pretty(&manifest).map_err(|e| Error::json(&path, e))?;
    fs::write(&path, text).map_err(|e| Error::io(&path, e))
}

/// A read checkpoint: the manifest and the decoded tensors by name.
#[derive(Clone, Debug)]
pub struct CheckpointData {
    pub manifest: CheckpointManifest,
    pub tensors: BTreeMap<String, Tensor<f32>>,
}

pub fn read_checkpoint(dir: &Path) -> Result<CheckpointData> {
    let path = dir.join(CHECKPOINT_MANIFEST);
    let text = fs::read_to_string(&path).map_err(|e| Error::io(&path, e))?;
    let manifest: CheckpointManifest =
        serde_json::from_str(&text).map_err(|e| CheckpointError::CorruptManifest(format!("{}: {e}", path.display())))?;
    if manifest.format != FORMAT_VERSION {
        return Err(CheckpointError::CorruptManifest(format!("unsupported format version {}", manifest.format)).into());
    }
    let blob_path = dir.join(CHECKPOINT_BLOB);
    let blob = fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let mut tensors = BTreeMap::new();
    let mut needed = 0u64;
    for e in &manifest.tensors {
        if e.dtype != DTYPE {
            return Err(CheckpointError::DtypeMismatch { name: e.name.clone(), dtype: e.dtype.clone() }.into());
        }
        needed = needed.max(e.offset + e.bytes());
    }
    if (blob.len() as u64) < needed {
        return Err(CheckpointError::TruncatedBlob { expected: needed, found: blob.len() as u64 }.into());
    }
    for e in &manifest.tensors {
        let bytes = &blob[e.offset as usize..(e.offset + e.bytes()) as usize];
        let data = bytes.chunks_exact(4).map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]])).collect();
        if tensors.insert(e.name.clone(), Tensor::from_vec(&e.shape, data)).is_some() {
            return Err(CheckpointError::CorruptManifest(format!("tensor `{}` listed twice", e.name)).into());
        }
    }
    Ok(CheckpointData { manifest, tensors })
}

impl CheckpointData {
    /// Copies the network tensors into `nets`. Every parameter of `nets` must
    /// be present with its shape, and no network tensor may be left over.
    pub fn load_networks(&self, nets: &mut Networks) -> Result<()> {
        let mut missing = Vec::new();
        let mut mismatch = None;
        let mut used = BTreeSet::new();
        nets.visit_mut("", &mut |name, p| match self.tensors.get(&name) {
            None => missing.push(name),
            Some(t) if t.shape() != p.value().shape() => {
                mismatch.get_or_insert(CheckpointError::ShapeMismatch {
                    name: name.clone(),
                    expected: p.value().shape().to_vec(),
                    found: t.shape().to_vec(),
                });
            }
            Some(t) => {
                *p.value_mut() = t.clone();
                used.insert(name);
            }
        });
        if !missing.is_empty() {
            return Err(CheckpointError::MissingParameters(missing).into());
        }
        if let Some(e) = mismatch {
            return Err(e.into());
        }
        let extra: Vec<String> =
            self.tensors.keys().filter(|k| !k.starts_with("optimizer.") && !used.contains(*k)).cloned().collect();
        if !extra.is_empty() {
            return Err(CheckpointError::UnexpectedParameters(extra).into());
        }
        Ok(())
    }

    fn optimizer(&self, opt_name: &str, nets: &Networks) -> Result<Adam<f32>> {
        let mut opt = Adam::new(self.manifest.config.optimizer);
        let mut names = Vec::new();
        nets.visit("", &mut |name, _| names.push(name));
        for param in names {
            let (mn, vn) = moments_names(opt_name, &param);
            match (self.tensors.get(&mn), self.tensors.get(&vn)) {
                (Some(m), Some(v)) => {
                    let steps = *self.manifest.optimizer_steps.get(&mn).ok_or_else(|| {
                        CheckpointError::CorruptManifest(format!("no update count for `{mn}`"))
                    })?;
                    opt.state.insert(param, Moments { m: m.clone(), v: v.clone(), steps });
                }
                (None, None) => {}
                _ => return Err(CheckpointError::CorruptManifest(format!("incomplete moments for `{param}`")).into()),
            }
        }
        Ok(opt)
    }

    fn rng(&self) -> Result<ChaCha8Rng> {
        let r = &self.manifest.rng;
        let bad = |what: &str| CheckpointError::CorruptManifest(format!("bad rng {what}"));
        let seed: [u8; 32] = hex::decode(&r.seed).ok().and_then(|v| v.try_into().ok()).ok_or_else(|| bad("seed"))?;
        let word_pos: u128 = r.word_pos.parse().map_err(|_| bad("position"))?;
        let mut rng = ChaCha8Rng::from_seed(seed);
        rng.set_stream(r.stream);
        rng.set_word_pos(word_pos);
        Ok(rng)
    }
}

/// Restores a full training state, built from the stored configuration.
pub fn load_checkpoint(dir: &Path) -> Result<TrainState> {
    let data = read_checkpoint(dir)?;
    let config = data.manifest.config.clone();
    let mut state = TrainState::new(config)?;
    data.load_networks(&mut state.nets)?;
    state.opt_g = data.optimizer(OPT_G, &state.nets)?;
    state.opt_d = data.optimizer(OPT_D, &state.nets)?;
    state.rng = data.rng()?;
    state.step = data.manifest.step;
    Ok(state)
}

/// Loads the network weights of a checkpoint into the networks `cfg`
/// describes, failing when the two disagree.
pub fn load_networks_as(dir: &Path, cfg: &TrainConfig) -> Result<Networks> {
    let data = read_checkpoint(dir)?;
    let mut nets = Networks::build(cfg)?;
    data.load_networks(&mut nets)?;
    Ok(nets)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frames::{Clip, Frame};
    use crate::trainkit::config::Ablation;
    use crate::trainkit::pipeline::synthesize_clip;

    fn trained(ablation: Ablation) -> TrainState {
        let mut st = TrainState::new(TrainConfig { ablation, ..TrainConfig::tiny() }).unwrap();
        let data = crate::trainkit::train::tests::tiny_clips(2, 2);
        st.fit(&data, 2, |_, _| Ok(())).unwrap();
        st
    }

    #[test]
    fn round_trip_is_exact() {
        let st = trained(Ablation::F);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&st, dir.path()).unwrap();
        let back = load_checkpoint(dir.path()).unwrap();
        assert_eq!(back.step, st.step);
        assert_eq!(back.config, st.config);
        assert_eq!(back.rng, st.rng);
        assert_eq!(back.opt_g.state, st.opt_g.state);
        assert_eq!(back.opt_d.state, st.opt_d.state);
        let exo = Clip::new(vec![Frame::filled(8, 8, 0.25), Frame::filled(8, 8, -0.5)]).unwrap();
        let a = synthesize_clip(&st.nets, Ablation::F, &exo, &exo).unwrap();
        let b = synthesize_clip(&back.nets, Ablation::F, &exo, &exo).unwrap();
        assert_eq!(a.0, b.0);
    }

    #[test]
    fn edited_shape_is_a_shape_error() {
        let st = trained(Ablation::A);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&st, dir.path()).unwrap();
        let path = dir.path().join(CHECKPOINT_MANIFEST);
        let mut m: CheckpointManifest = serde_json::from_str(&fs::read_to_string(&path).unwrap()).unwrap();
        let e = m.tensors.iter_mut().find(|e| e.shape.len() == 4).unwrap();
        e.shape.swap(0, 1);
        e.shape[2] = 1;
        fs::write(&path, serde_json::to_string(&m).unwrap()).unwrap();
        let err = load_checkpoint(dir.path()).unwrap_err();
        assert!(matches!(err, Error::Checkpoint(CheckpointError::ShapeMismatch { .. })), "{err}");
    }

    #[test]
    fn corrupt_truncated_and_dtype_errors_are_distinct() {
        let st = trained(Ablation::A);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&st, dir.path()).unwrap();
        let manifest = dir.path().join(CHECKPOINT_MANIFEST);
        let blob = dir.path().join(CHECKPOINT_BLOB);
        let text = fs::read_to_string(&manifest).unwrap();
        let bytes = fs::read(&blob).unwrap();

        fs::write(&blob, &bytes[..bytes.len() - 8]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(CheckpointError::TruncatedBlob { .. }))));
        fs::write(&blob, &bytes).unwrap();

        fs::write(&manifest, &text[..text.len() / 2]).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(CheckpointError::CorruptManifest(_)))));

        fs::write(&manifest, text.replacen("\"f32\"", "\"f16\"", 1)).unwrap();
        assert!(matches!(load_checkpoint(dir.path()), Err(Error::Checkpoint(CheckpointError::DtypeMismatch { .. }))));
    }

    #[test]
    fn spatial_only_checkpoint_does_not_load_into_full_model() {
        let st = trained(Ablation::A);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&st, dir.path()).unwrap();
        let err = load_networks_as(dir.path(), &TrainConfig::tiny()).unwrap_err();
        match err {
            Error::Checkpoint(CheckpointError::MissingParameters(names)) => {
                assert!(names.iter().any(|n| n.starts_with("d_temporal.")));
                assert!(names.iter().any(|n| n.starts_with("fusion.")));
                assert!(names.iter().all(|n| !n.starts_with("generator.")));
            }
            other => panic!("unexpected {other}"),
        }
        let full = trained(Ablation::F);
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&full, dir.path()).unwrap();
        let cfg = TrainConfig { ablation: Ablation::A, ..TrainConfig::tiny() };
        assert!(matches!(
            load_networks_as(dir.path(), &cfg),
            Err(Error::Checkpoint(CheckpointError::UnexpectedParameters(_)))
        ));
    }

    #[test]
    fn resumed_training_matches_uninterrupted() {
        let data = crate::trainkit::train::tests::tiny_clips(3, 3);
        let mut a = TrainState::new(TrainConfig::tiny()).unwrap();
        let full = a.fit(&data, 4, |_, _| Ok(())).unwrap();
        let mut b = TrainState::new(TrainConfig::tiny()).unwrap();
        b.fit(&data, 2, |_, _| Ok(())).unwrap();
        let dir = tempfile::tempdir().unwrap();
        save_checkpoint(&b, dir.path()).unwrap();
        let mut c = load_checkpoint(dir.path()).unwrap();
        let rest = c.fit(&data, 2, |_, _| Ok(())).unwrap();
        assert_eq!(&full[2..], &rest[..]);
    }
}
