//! Dataset generation, the text manifest and the `VCLP` clip file.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_xoshiro::SplitMix64;

use super::{render_clip, ActionClassSpec, SceneConfig, SynthError};
use crate::flow::{self, TvL1Params};
use crate::tensor::Tensor;

pub const CLIP_MAGIC: &[u8; 4] = b"VCLP";
pub const MANIFEST_FILE: &str = "manifest.txt";

/// Inputs that fully determine a dataset.
#[derive(Clone, Debug, PartialEq)]
pub struct DatasetConfig {
    pub seed: u64,
    pub num_classes: usize,
    pub clips_per_class: usize,
    pub clip_shape: [usize; 3],
    pub camera_noise_sigma: f32,
    pub appearance_cue: bool,
    pub speed: f32,
    pub train_fraction: f32,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            num_classes: 8,
            clips_per_class: 20,
            clip_shape: [8, 32, 32],
            camera_noise_sigma: 0.0,
            appearance_cue: false,
            speed: 2.0,
            train_fraction: 0.8,
        }
    }
}

impl DatasetConfig {
    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: &str| Err(SynthError::Config(m.into()));
        if !(1..=8).contains(&self.num_classes) {
            return bad("num_classes must be in 1..=8");
        }
        if self.clips_per_class < 2 {
            return bad("clips_per_class must be at least 2");
        }
        if !(self.camera_noise_sigma >= 0.0 && self.camera_noise_sigma.is_finite()) {
            return bad("camera_noise_sigma must be finite and >= 0");
        }
        if !(self.speed >= 0.0 && self.speed.is_finite()) {
            return bad("speed must be finite and >= 0");
        }
        if !(self.train_fraction > 0.0 && self.train_fraction < 1.0) {
            return bad("train_fraction must lie in (0, 1)");
        }
        let [t, h, w] = self.clip_shape;
        if t == 0 || h < super::MIN_FRAME || w < super::MIN_FRAME {
            return Err(SynthError::FrameTooSmall { height: h, width: w });
        }
        Ok(())
    }

    pub fn scene(&self) -> SceneConfig {
        SceneConfig {
            camera_noise_sigma: self.camera_noise_sigma,
            appearance_cue: self.appearance_cue,
        }
    }

    pub fn classes(&self) -> Vec<ActionClassSpec> {
        ActionClassSpec::standard(self.num_classes, self.speed)
    }

    /// Train clips per class; at least one clip lands on each side.
    pub fn train_per_class(&self) -> usize {
        let n = (self.clips_per_class as f64 * self.train_fraction as f64).round() as usize;
        n.clamp(1, self.clips_per_class - 1)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ClipRecord {
    pub id: String,
    pub class_id: usize,
    pub split: Split,
    pub render_seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    pub config: DatasetConfig,
    pub clips: Vec<ClipRecord>,
}

impl DatasetManifest {
    /// Stratified split and per-clip render seeds, all from `config.seed`.
    pub fn plan(config: &DatasetConfig) -> Result<Self, SynthError> {
        config.validate()?;
        let mut rng = SplitMix64::seed_from_u64(config.seed);
        let per_train = config.train_per_class();
        let mut clips = Vec::with_capacity(config.num_classes * config.clips_per_class);
        for class_id in 0..config.num_classes {
            let mut order: Vec<usize> = (0..config.clips_per_class).collect();
            order.shuffle(&mut rng);
            let mut is_train = vec![false; config.clips_per_class];
            for &i in &order[..per_train] {
                is_train[i] = true;
            }
            for (i, train) in is_train.into_iter().enumerate() {
                clips.push(ClipRecord {
                    id: format!("c{class_id}_{i:04}"),
                    class_id,
                    split: if train { Split::Train } else { Split::Test },
                    render_seed: rng.random(),
                });
            }
        }
        Ok(Self {
            config: config.clone(),
            clips,
        })
    }

    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipRecord> {
        self.clips.iter().filter(move |c| c.split == split)
    }

    pub fn render(&self, record: &ClipRecord) -> Result<Tensor<f32>, SynthError> {
        let spec = self.config.classes()[record.class_id];
        render_clip(&spec, &self.config.scene(), self.config.clip_shape, record.render_seed)
    }

    pub fn to_text(&self) -> String {
        let c = &self.config;
        let [t, h, w] = c.clip_shape;
        let mut s = String::new();
        let _ = writeln!(s, "seed = {}", c.seed);
        let _ = writeln!(s, "num_classes = {}", c.num_classes);
        let _ = writeln!(s, "clips_per_class = {}", c.clips_per_class);
        let _ = writeln!(s, "clip_shape = {t},{h},{w}");
        let _ = writeln!(s, "camera_noise_sigma = {}", c.camera_noise_sigma);
        let _ = writeln!(s, "appearance_cue = {}", c.appearance_cue);
        let _ = writeln!(s, "speed = {}", c.speed);
        let _ = writeln!(s, "train_fraction = {}", c.train_fraction);
        for r in &self.clips {
            let _ = writeln!(s, "clip {} {} {} {}", r.id, r.class_id, r.split.name(), r.render_seed);
        }
        s
    }

    pub fn parse(text: &str) -> Result<Self, SynthError> {
        let bad = |n: usize, m: String| SynthError::Manifest(format!("line {}: {m}", n + 1));
        let mut config = DatasetConfig::default();
        let mut clips = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            if let Some(rest) = line.strip_prefix("clip ") {
                let f: Vec<&str> = rest.split_whitespace().collect();
                let [id, class, split, seed] = f[..] else {
                    return Err(bad(n, "expected `clip <id> <class> <split> <render_seed>`".into()));
                };
                let split = match split {
                    "train" => Split::Train,
                    "test" => Split::Test,
                    o => return Err(bad(n, format!("unknown split `{o}`"))),
                };
                clips.push(ClipRecord {
                    id: id.to_string(),
                    class_id: class.parse().map_err(|e| bad(n, format!("class: {e}")))?,
                    split,
                    render_seed: seed.parse().map_err(|e| bad(n, format!("render seed: {e}")))?,
                });
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .map(|(k, v)| (k.trim(), v.trim()))
                .ok_or_else(|| bad(n, format!("expected `key = value`, got `{line}`")))?;
            let num = |e: String| bad(n, format!("{key}: {e}"));
            match key {
                "seed" => config.seed = value.parse().map_err(|e| num(format!("{e}")))?,
                "num_classes" => config.num_classes = value.parse().map_err(|e| num(format!("{e}")))?,
                "clips_per_class" => config.clips_per_class = value.parse().map_err(|e| num(format!("{e}")))?,
                "clip_shape" => {
                    let parts: Vec<usize> = value
                        .split(',')
                        .map(|p| p.trim().parse())
                        .collect::<Result<_, _>>()
                        .map_err(|e| num(format!("{e}")))?;
                    config.clip_shape = parts.try_into().map_err(|_| num("expected T,H,W".into()))?;
                }
                "camera_noise_sigma" => config.camera_noise_sigma = value.parse().map_err(|e| num(format!("{e}")))?,
                "appearance_cue" => config.appearance_cue = value.parse().map_err(|e| num(format!("{e}")))?,
                "speed" => config.speed = value.parse().map_err(|e| num(format!("{e}")))?,
                "train_fraction" => config.train_fraction = value.parse().map_err(|e| num(format!("{e}")))?,
                other => return Err(bad(n, format!("unknown key `{other}`"))),
            }
        }
        config.validate()?;
        if let Some(r) = clips.iter().find(|r| r.class_id >= config.num_classes) {
            return Err(SynthError::Manifest(format!("clip {} has class {} out of range", r.id, r.class_id)));
        }
        Ok(Self { config, clips })
    }

    pub fn load(dir: &Path) -> Result<Self, SynthError> {
        let path = dir.join(MANIFEST_FILE);
        let text = fs::read_to_string(&path).map_err(|e| io_err(&path, e))?;
        Self::parse(&text)
    }
}

fn io_err(path: &Path, source: std::io::Error) -> SynthError {
    SynthError::Io {
        path: path.display().to_string(),
        source,
    }
}

pub fn clip_path(dir: &Path, id: &str) -> PathBuf {
    dir.join("clips").join(format!("{id}.vclp"))
}

pub fn flow_path(dir: &Path, id: &str) -> PathBuf {
    flow::cache::cache_path(&dir.join("flow"), id)
}

pub fn encode_clip(clip: &Tensor<f32>) -> Vec<u8> {
    let &[c, t, h, w] = clip.shape() else {
        panic!("clip must be [C, T, H, W], got {:?}", clip.shape());
    };
    let mut out = Vec::with_capacity(20 + 4 * clip.len());
    out.extend_from_slice(CLIP_MAGIC);
    for d in [c, t, h, w] {
        out.extend_from_slice(&(d as u32).to_le_bytes());
    }
    for v in clip.data() {
        out.extend_from_slice(&v.to_le_bytes());
    }
    out
}

pub fn decode_clip(bytes: &[u8]) -> Result<Tensor<f32>, SynthError> {
    if bytes.len() < 20 || &bytes[..4] != CLIP_MAGIC {
        return Err(SynthError::Clip("missing VCLP header".into()));
    }
    let dims: Vec<usize> = (0..4)
        .map(|i| u32::from_le_bytes(bytes[4 + 4 * i..8 + 4 * i].try_into().unwrap()) as usize)
        .collect();
    let n = dims.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
    if n.is_none_or(|n| n == 0 || bytes.len() != 20 + 4 * n) {
        return Err(SynthError::Clip(format!("{} bytes do not match extents {dims:?}", bytes.len())));
    }
    let data = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
        .collect();
    Tensor::new(dims, data).map_err(|e| SynthError::Clip(e.to_string()))
}

pub fn save_clip(path: &Path, clip: &Tensor<f32>) -> Result<(), SynthError> {
    if let Some(parent) = path.parent() {
        fs::create_dir_all(parent).map_err(|e| io_err(parent, e))?;
    }
    fs::write(path, encode_clip(clip)).map_err(|e| io_err(path, e))
}

pub fn load_clip(path: &Path) -> Result<Tensor<f32>, SynthError> {
    decode_clip(&fs::read(path).map_err(|e| io_err(path, e))?)
}

/// Writes `manifest.txt`, `clips/<id>.vclp` and, with `flow_params`, the
/// flow cache `flow/<id>.flo3`.
pub fn generate_dataset(
    config: &DatasetConfig,
    dir: &Path,
    flow_params: Option<&TvL1Params>,
) -> Result<DatasetManifest, SynthError> {
    let manifest = DatasetManifest::plan(config)?;
    fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    for record in &manifest.clips {
        let clip = manifest.render(record)?;
        save_clip(&clip_path(dir, &record.id), &clip)?;
        if let Some(p) = flow_params {
            let fc = flow::clip_to_flow_clip(&clip, p)?;
            let path = flow_path(dir, &record.id);
            flow::cache::save(&path, &fc).map_err(|e| io_err(&path, e))?;
        }
    }
    let path = dir.join(MANIFEST_FILE);
    fs::write(&path, manifest.to_text()).map_err(|e| io_err(&path, e))?;
    Ok(manifest)
}
