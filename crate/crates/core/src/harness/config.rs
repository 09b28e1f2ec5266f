//! Flat `key = value` run configuration with dotted keys.

use std::fmt::Write as _;
use std::path::PathBuf;
use std::str::FromStr;

use super::HarnessError;
use crate::distill::{BridgeConfig, DistillDirection, LossWeights, TrainConfig};
use crate::flow::TvL1Params;
use crate::stream::StreamSpec;
use crate::synth::{make_regime, DatasetConfig, Regime};
use crate::tensor::OptimizerConfig;

/// Where a dataset's noise and colour cue come from.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RegimeChoice {
    Preset(Regime),
    /// `data.camera_noise_sigma` and `data.appearance_cue` as given.
    Custom,
}

impl RegimeChoice {
    pub fn name(self) -> &'static str {
        match self {
            RegimeChoice::Preset(r) => r.name(),
            RegimeChoice::Custom => "custom",
        }
    }
}

impl FromStr for RegimeChoice {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        if s == "custom" {
            return Ok(RegimeChoice::Custom);
        }
        s.parse::<Regime>()
            .map(RegimeChoice::Preset)
            .map_err(|_| format!("unknown regime `{s}` (motion-favored | camera-noisy | custom)"))
    }
}

/// Every tunable of a run. Empty paths resolve relative to `out`.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub out: PathBuf,
    pub parallel: usize,
    /// Empty means `<out>/data`.
    pub data_dir: Option<PathBuf>,
    pub regime: RegimeChoice,
    pub data: DatasetConfig,
    pub flow: TvL1Params,
    pub block_channels: Vec<usize>,
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    pub direction: DistillDirection,
    pub bridge: BridgeConfig,
    pub weights: LossWeights,
    /// Empty means `<out>/teacher`.
    pub teacher_dir: Option<PathBuf>,
    pub record_wall_time: bool,
}

impl Default for RunConfig {
    fn default() -> Self {
        let regime = Regime::MotionFavored;
        Self {
            seed: 0,
            out: PathBuf::from("runs"),
            parallel: 1,
            data_dir: None,
            regime: RegimeChoice::Preset(regime),
            data: make_regime(regime, 0),
            flow: TvL1Params::default(),
            block_channels: StreamSpec::default().block_channels,
            epochs: TrainConfig::default().epochs,
            batch_size: TrainConfig::default().batch_size,
            optimizer: OptimizerConfig::default(),
            direction: DistillDirection::FlowTeachesRgb,
            bridge: BridgeConfig::default(),
            weights: LossWeights::default(),
            teacher_dir: None,
            record_wall_time: false,
        }
    }
}

fn list<T: ToString>(items: &[T]) -> String {
    items.iter().map(T::to_string).collect::<Vec<_>>().join(",")
}

fn parse_list(value: &str) -> Result<Vec<usize>, String> {
    value
        .split(',')
        .map(|p| p.trim().parse::<usize>().map_err(|e| format!("`{p}`: {e}")))
        .collect()
}

fn path_or_empty(p: &Option<PathBuf>) -> String {
    p.as_ref().map_or(String::new(), |p| p.display().to_string())
}

impl RunConfig {
    /// The resolved config, one `key = value` per line in a fixed order.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let mut kv = |k: &str, v: String| {
            let _ = writeln!(s, "{k} = {v}");
        };
        kv("seed", self.seed.to_string());
        kv("out", self.out.display().to_string());
        kv("parallel", self.parallel.to_string());
        kv("data.dir", path_or_empty(&self.data_dir));
        kv("data.regime", self.regime.name().into());
        kv("data.num_classes", self.data.num_classes.to_string());
        kv("data.clips_per_class", self.data.clips_per_class.to_string());
        kv("data.clip_shape", list(&self.data.clip_shape));
        kv("data.speed", self.data.speed.to_string());
        kv("data.train_fraction", self.data.train_fraction.to_string());
        kv("data.camera_noise_sigma", self.data.camera_noise_sigma.to_string());
        kv("data.appearance_cue", self.data.appearance_cue.to_string());
        kv("flow.lambda", self.flow.lambda.to_string());
        kv("flow.theta", self.flow.theta.to_string());
        kv("flow.tau", self.flow.tau.to_string());
        kv("flow.warps_per_level", self.flow.warps_per_level.to_string());
        kv("flow.iterations_per_warp", self.flow.iterations_per_warp.to_string());
        kv("flow.pyramid_scale", self.flow.pyramid_scale.to_string());
        kv("flow.min_level_size", self.flow.min_level_size.to_string());
        kv("flow.clip_limit", self.flow.clip_limit.to_string());
        kv("stream.block_channels", list(&self.block_channels));
        kv("train.epochs", self.epochs.to_string());
        kv("train.batch_size", self.batch_size.to_string());
        kv("optimizer.learning_rate", self.optimizer.learning_rate.to_string());
        kv("optimizer.momentum", self.optimizer.momentum.to_string());
        kv("optimizer.weight_decay", self.optimizer.weight_decay.to_string());
        kv("distill.direction", self.direction.to_string());
        kv("distill.bridge", self.bridge.to_string());
        kv("distill.alpha", self.weights.alpha.to_string());
        kv("distill.beta", self.weights.beta.to_string());
        kv("distill.gamma", self.weights.gamma.to_string());
        kv("teacher.dir", path_or_empty(&self.teacher_dir));
        kv("metrics.record_wall_time", self.record_wall_time.to_string());
        s
    }

    /// Applies one setting. Regime presets own the noise and cue keys, which
    /// may only be changed under `data.regime = custom`.
    pub fn set(&mut self, key: &str, value: &str) -> Result<(), HarnessError> {
        let value = value.trim();
        let bad = |e: String| HarnessError::Config(format!("{key}: {e}"));
        macro_rules! parse {
            () => {
                value.parse().map_err(|e| bad(format!("{e}")))?
            };
        }
        let opt_path = |v: &str| (!v.is_empty()).then(|| PathBuf::from(v));
        match key {
            "seed" => {
                self.seed = parse!();
                self.data.seed = self.seed;
            }
            "out" => self.out = PathBuf::from(value),
            "parallel" => self.parallel = parse!(),
            "data.dir" => self.data_dir = opt_path(value),
            "data.regime" => {
                self.regime = value.parse().map_err(bad)?;
                if let RegimeChoice::Preset(r) = self.regime {
                    let preset = make_regime(r, self.seed);
                    self.data.camera_noise_sigma = preset.camera_noise_sigma;
                    self.data.appearance_cue = preset.appearance_cue;
                }
            }
            "data.num_classes" => self.data.num_classes = parse!(),
            "data.clips_per_class" => self.data.clips_per_class = parse!(),
            "data.clip_shape" => {
                let v = parse_list(value).map_err(bad)?;
                self.data.clip_shape = v.try_into().map_err(|_| bad("expected T,H,W".into()))?;
            }
            "data.speed" => self.data.speed = parse!(),
            "data.train_fraction" => self.data.train_fraction = parse!(),
            "data.camera_noise_sigma" | "data.appearance_cue" => {
                let mut d = self.data.clone();
                if key == "data.appearance_cue" {
                    d.appearance_cue = parse!();
                } else {
                    d.camera_noise_sigma = parse!();
                }
                if self.regime != RegimeChoice::Custom && d != self.data {
                    return Err(bad(format!(
                        "fixed by data.regime = {}; set data.regime = custom to change it",
                        self.regime.name()
                    )));
                }
                self.data = d;
            }
            "flow.lambda" => self.flow.lambda = parse!(),
            "flow.theta" => self.flow.theta = parse!(),
            "flow.tau" => self.flow.tau = parse!(),
            "flow.warps_per_level" => self.flow.warps_per_level = parse!(),
            "flow.iterations_per_warp" => self.flow.iterations_per_warp = parse!(),
            "flow.pyramid_scale" => self.flow.pyramid_scale = parse!(),
            "flow.min_level_size" => self.flow.min_level_size = parse!(),
            "flow.clip_limit" => self.flow.clip_limit = parse!(),
            "stream.block_channels" => self.block_channels = parse_list(value).map_err(bad)?,
            "train.epochs" => self.epochs = parse!(),
            "train.batch_size" => self.batch_size = parse!(),
            "optimizer.learning_rate" => self.optimizer.learning_rate = parse!(),
            "optimizer.momentum" => self.optimizer.momentum = parse!(),
            "optimizer.weight_decay" => self.optimizer.weight_decay = parse!(),
            "distill.direction" => self.direction = value.parse().map_err(bad)?,
            "distill.bridge" => self.bridge = value.parse().map_err(bad)?,
            "distill.alpha" => self.weights.alpha = parse!(),
            "distill.beta" => self.weights.beta = parse!(),
            "distill.gamma" => self.weights.gamma = parse!(),
            "teacher.dir" => self.teacher_dir = opt_path(value),
            "metrics.record_wall_time" => self.record_wall_time = parse!(),
            _ => return Err(HarnessError::Config(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Applies a `key = value` document on top of `self`.
    pub fn apply_text(&mut self, text: &str) -> Result<(), HarnessError> {
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("line {}: expected `key = value`", n + 1)))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// Parses a document over the defaults and validates the result.
    pub fn parse(text: &str) -> Result<Self, HarnessError> {
        let mut c = Self::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    /// Applies `key=value` overrides in order (last wins).
    pub fn apply_overrides<'a>(&mut self, sets: impl IntoIterator<Item = &'a str>) -> Result<(), HarnessError> {
        for s in sets {
            let (k, v) = s
                .split_once('=')
                .ok_or_else(|| HarnessError::Config(format!("override `{s}` is not key=value")))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        let cfg = |e: String| HarnessError::Config(e);
        self.dataset_config().validate().map_err(|e| cfg(e.to_string()))?;
        self.flow.validate().map_err(|e| cfg(e.to_string()))?;
        self.stream_spec().block_extents().map_err(|e| cfg(e.to_string()))?;
        self.train_config().validate().map_err(|e| cfg(e.to_string()))?;
        self.weights.validate().map_err(|e| cfg(e.to_string()))?;
        if self.parallel == 0 {
            return Err(cfg("parallel must be at least 1".into()));
        }
        let [_, h, w] = self.data.clip_shape;
        if h.min(w) < self.flow.min_level_size {
            return Err(cfg(format!(
                "clip frames {h}x{w} are smaller than flow.min_level_size = {}",
                self.flow.min_level_size
            )));
        }
        Ok(())
    }

    pub fn data_dir(&self) -> PathBuf {
        self.data_dir.clone().unwrap_or_else(|| self.out.join("data"))
    }

    pub fn teacher_dir(&self) -> PathBuf {
        self.teacher_dir.clone().unwrap_or_else(|| self.out.join("teacher"))
    }

    pub fn dataset_config(&self) -> DatasetConfig {
        DatasetConfig {
            seed: self.seed,
            ..self.data.clone()
        }
    }

    pub fn stream_spec(&self) -> StreamSpec {
        StreamSpec {
            num_classes: self.data.num_classes,
            block_channels: self.block_channels.clone(),
            clip_shape: self.data.clip_shape,
        }
    }

    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            batch_size: self.batch_size,
            seed: self.seed,
            optimizer: self.optimizer.clone(),
            record_wall_time: self.record_wall_time,
        }
    }

    /// `baseline` when no mimicry term is active, `enhanced` otherwise.
    pub fn pipeline_name(&self) -> &'static str {
        if self.weights.alpha == 0.0 && self.weights.beta == 0.0 {
            "baseline"
        } else {
            "enhanced"
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn default_round_trips() {
        let c = RunConfig::default();
        assert_eq!(RunConfig::parse(&c.to_text()).unwrap(), c);
    }

    #[test]
    fn edited_config_round_trips() {
        let mut c = RunConfig::default();
        c.apply_overrides([
            "seed=7",
            "data.regime=custom",
            "data.camera_noise_sigma=1.25",
            "data.appearance_cue=true",
            "optimizer.learning_rate=0.01",
            "distill.bridge=front->rear",
            "distill.direction=rgb-teaches-flow",
            "distill.alpha=0",
            "teacher.dir=elsewhere/teacher",
            "flow.clip_limit=12.5",
        ])
        .unwrap();
        let back = RunConfig::parse(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert_eq!(back.to_text(), c.to_text());
    }

    #[test]
    fn regime_presets_own_noise_and_cue() {
        let c = RunConfig::parse("data.regime = camera-noisy\n").unwrap();
        assert_eq!((c.data.camera_noise_sigma, c.data.appearance_cue), (3.0, true));
        // restating the preset value is fine, changing it is not
        assert!(RunConfig::parse("data.regime = camera-noisy\ndata.camera_noise_sigma = 3\n").is_ok());
        assert!(matches!(
            RunConfig::parse("data.regime = camera-noisy\ndata.camera_noise_sigma = 1\n"),
            Err(HarnessError::Config(_))
        ));
    }

    #[test]
    fn rejects_unknown_keys_and_bad_values() {
        assert!(matches!(RunConfig::parse("optimizer.nesterov = true"), Err(HarnessError::Config(_))));
        assert!(matches!(RunConfig::parse("train.epochs = many"), Err(HarnessError::Config(_))));
        assert!(matches!(RunConfig::parse("flow.tau = 0.5"), Err(HarnessError::Config(_))));
        assert!(matches!(RunConfig::parse("distill.alpha = 0\ndistill.beta = 0\ndistill.gamma = 0"), Err(HarnessError::Config(_))));
        assert!(matches!(RunConfig::parse("no equals sign"), Err(HarnessError::Config(_))));
    }

    #[test]
    fn overrides_apply_in_order() {
        let mut c = RunConfig::default();
        c.apply_overrides(["train.epochs=3", "train.epochs=5"]).unwrap();
        assert_eq!(c.epochs, 5);
    }
}
