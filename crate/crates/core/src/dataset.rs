//! In-memory clips for training: RGB and flow tensors per split.

use std::path::Path;

use crate::flow::{self, TvL1Params};
use crate::stream::StreamKind;
use crate::synth::{self, DatasetManifest, Split, SynthError};
use crate::tensor::Tensor;

/// Clips of one split, index-aligned: `rgb[i]`, `flow[i]` and `labels[i]`
/// describe the same clip.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ClipSet {
    pub ids: Vec<String>,
    /// `[3, T, H, W]` each.
    pub rgb: Vec<Tensor<f32>>,
    /// `[2, T, H, W]` each.
    pub flow: Vec<Tensor<f32>>,
    pub labels: Vec<usize>,
}

impl ClipSet {
    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn clips(&self, kind: StreamKind) -> &[Tensor<f32>] {
        match kind {
            StreamKind::Rgb => &self.rgb,
            StreamKind::Flow => &self.flow,
        }
    }

    /// `[N, C, T, H, W]` batch of the listed clips.
    pub fn batch(&self, kind: StreamKind, indices: &[usize]) -> Tensor<f32> {
        let clips = self.clips(kind);
        let items: Vec<&Tensor<f32>> = indices.iter().map(|&i| &clips[i]).collect();
        Tensor::stack(&items).expect("clips of one set share a shape")
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub train: ClipSet,
    pub test: ClipSet,
}

impl Dataset {
    pub fn num_classes(&self) -> usize {
        self.manifest.config.num_classes
    }

    pub fn split(&self, split: Split) -> &ClipSet {
        match split {
            Split::Train => &self.train,
            Split::Test => &self.test,
        }
    }

    /// Renders every clip and its flow without touching the disk.
    pub fn render(manifest: &DatasetManifest, flow_params: &TvL1Params) -> Result<Self, SynthError> {
        Self::assemble(manifest, |record| {
            let rgb = manifest.render(record)?;
            let fl = flow::clip_to_flow_clip(&rgb, flow_params)?;
            Ok((rgb, fl))
        })
    }

    /// Loads a generated dataset directory. Flow comes from the cache when
    /// present and is computed with `flow_params` otherwise.
    pub fn load(dir: &Path, flow_params: &TvL1Params) -> Result<Self, SynthError> {
        let manifest = DatasetManifest::load(dir)?;
        Self::assemble(&manifest, |record| {
            let rgb = synth::load_clip(&synth::clip_path(dir, &record.id))?;
            let cached = synth::flow_path(dir, &record.id);
            let fl = if cached.exists() {
                flow::cache::load(&cached).map_err(|e| SynthError::Io {
                    path: cached.display().to_string(),
                    source: e,
                })?
            } else {
                flow::clip_to_flow_clip(&rgb, flow_params)?
            };
            Ok((rgb, fl))
        })
    }

    fn assemble(
        manifest: &DatasetManifest,
        mut clip: impl FnMut(&synth::ClipRecord) -> Result<(Tensor<f32>, Tensor<f32>), SynthError>,
    ) -> Result<Self, SynthError> {
        let mut train = ClipSet::default();
        let mut test = ClipSet::default();
        for record in &manifest.clips {
            let (rgb, fl) = clip(record)?;
            let [t, h, w] = manifest.config.clip_shape;
            if rgb.shape() != [3, t, h, w] || fl.shape() != [2, t, h, w] {
                return Err(SynthError::Clip(format!(
                    "clip {} has shapes {:?}/{:?}, manifest says {t}x{h}x{w}",
                    record.id,
                    rgb.shape(),
                    fl.shape()
                )));
            }
            let set = match record.split {
                Split::Train => &mut train,
                Split::Test => &mut test,
            };
            set.ids.push(record.id.clone());
            set.rgb.push(rgb);
            set.flow.push(fl);
            set.labels.push(record.class_id);
        }
        Ok(Self {
            manifest: manifest.clone(),
            train,
            test,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synth::DatasetConfig;

    #[test]
    fn render_and_load_agree() {
        let cfg = DatasetConfig {
            num_classes: 2,
            clips_per_class: 3,
            clip_shape: [3, 16, 16],
            seed: 11,
            ..DatasetConfig::default()
        };
        let params = TvL1Params::default();
        let dir = tempfile::tempdir().unwrap();
        let manifest = synth::generate_dataset(&cfg, dir.path(), Some(&params)).unwrap();
        let a = Dataset::render(&manifest, &params).unwrap();
        let b = Dataset::load(dir.path(), &params).unwrap();
        assert_eq!(a, b);
        assert_eq!(a.train.len() + a.test.len(), 6);
        assert_eq!(a.train.batch(StreamKind::Flow, &[0, 1]).shape(), &[2, 2, 3, 16, 16]);
    }
}
