//! Seeded moving-shape clips with two knobs: global camera jitter, which
//! corrupts motion everywhere in the frame, and a colour cue that ties the
//! foreground colour to the label.
//!
//! Every trajectory is anchored at frame `T / 2`: position and size there are
//! drawn from the same distribution for every class, so a single middle frame
//! says nothing about the label when the colour cue is off.

mod manifest;

use std::f32::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_distr::{Distribution, Normal};
use rand_xoshiro::SplitMix64;
use thiserror::Error;

use crate::tensor::Tensor;

pub use manifest::{
    clip_path, decode_clip, encode_clip, flow_path, generate_dataset, load_clip, save_clip, ClipRecord, DatasetConfig,
    DatasetManifest, Split, CLIP_MAGIC, MANIFEST_FILE,
};

pub const MIN_FRAME: usize = 16;
/// Supersampling factor per axis for anti-aliased coverage.
const AA: usize = 4;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("frame {height}x{width} is below the {MIN_FRAME} px minimum")]
    FrameTooSmall { height: usize, width: usize },
    #[error("invalid dataset config: {0}")]
    Config(String),
    #[error("manifest: {0}")]
    Manifest(String),
    #[error("clip file: {0}")]
    Clip(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Flow(#[from] crate::flow::FlowError),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum MotionPattern {
    TranslateLeft,
    TranslateRight,
    TranslateUp,
    TranslateDown,
    OrbitCw,
    OrbitCcw,
    Expand,
    Contract,
}

impl MotionPattern {
    pub const ALL: [MotionPattern; 8] = [
        MotionPattern::TranslateLeft,
        MotionPattern::TranslateRight,
        MotionPattern::TranslateUp,
        MotionPattern::TranslateDown,
        MotionPattern::OrbitCw,
        MotionPattern::OrbitCcw,
        MotionPattern::Expand,
        MotionPattern::Contract,
    ];

    pub fn name(self) -> &'static str {
        match self {
            MotionPattern::TranslateLeft => "translate-left",
            MotionPattern::TranslateRight => "translate-right",
            MotionPattern::TranslateUp => "translate-up",
            MotionPattern::TranslateDown => "translate-down",
            MotionPattern::OrbitCw => "orbit-cw",
            MotionPattern::OrbitCcw => "orbit-ccw",
            MotionPattern::Expand => "expand",
            MotionPattern::Contract => "contract",
        }
    }
}

impl fmt::Display for MotionPattern {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MotionPattern {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == s)
            .ok_or_else(|| format!("unknown motion pattern `{s}`"))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ActionClassSpec {
    pub class_id: usize,
    pub motion_pattern: MotionPattern,
    /// Pixels per frame: path speed for translations and orbits, radius
    /// change for expand/contract (scaled by [`RADIAL_RATE`]).
    pub speed: f32,
}

/// Expand/contract change the radius by `speed * RADIAL_RATE` px per frame.
pub const RADIAL_RATE: f32 = 0.4;
const ORBIT_RADIUS: f32 = 5.0;

impl ActionClassSpec {
    /// Class `i` gets the `i`-th pattern of [`MotionPattern::ALL`].
    pub fn standard(num_classes: usize, speed: f32) -> Vec<ActionClassSpec> {
        assert!((1..=8).contains(&num_classes), "1..=8 classes supported");
        MotionPattern::ALL[..num_classes]
            .iter()
            .enumerate()
            .map(|(class_id, &motion_pattern)| ActionClassSpec {
                class_id,
                motion_pattern,
                speed,
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ShapeKind {
    Square,
    Disc,
    Triangle,
}

impl ShapeKind {
    const ALL: [ShapeKind; 3] = [ShapeKind::Square, ShapeKind::Disc, ShapeKind::Triangle];

    /// Whether `(dx, dy)` relative to the centre lies inside a shape of
    /// circumradius-like size `r`.
    fn contains(self, dx: f32, dy: f32, r: f32) -> bool {
        match self {
            ShapeKind::Square => dx.abs() <= r * 0.85 && dy.abs() <= r * 0.85,
            ShapeKind::Disc => dx * dx + dy * dy <= r * r,
            ShapeKind::Triangle => {
                // apex up, base at dy = r/2
                let top = -r;
                let base = 0.5 * r;
                if dy < top || dy > base {
                    return false;
                }
                let half = (dy - top) / (base - top) * r * 0.866 * 1.0;
                dx.abs() <= half
            }
        }
    }
}

/// Clip-level scene knobs; per-clip draws (shape, colours, start jitter)
/// happen inside [`render_clip`] from the render seed.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct SceneConfig {
    pub camera_noise_sigma: f32,
    pub appearance_cue: bool,
}

/// Fixed foreground palette used when the colour cue is on.
const CUE_PALETTE: [[f32; 3]; 8] = [
    [0.95, 0.20, 0.20],
    [0.20, 0.90, 0.25],
    [0.25, 0.35, 0.95],
    [0.95, 0.90, 0.20],
    [0.90, 0.25, 0.90],
    [0.20, 0.90, 0.90],
    [0.98, 0.60, 0.15],
    [0.95, 0.95, 0.95],
];

/// Everything about one clip that the seed decides.
#[derive(Clone, Debug, PartialEq)]
pub struct ClipDraws {
    pub shape: ShapeKind,
    pub fg: [f32; 3],
    pub bg: [f32; 3],
    /// Object centre and radius at the anchor frame.
    pub anchor: (f32, f32),
    pub radius: f32,
    /// Start angle for orbits.
    pub phase: f32,
    /// Cumulative integer camera offset per frame.
    pub camera: Vec<(i32, i32)>,
    texture: [(f32, f32, f32, f32); 2],
}

/// Integer-rounded `N(0, σ)` per-frame camera increments.
pub fn camera_increments(rng: &mut impl Rng, sigma: f32, frames: usize) -> Vec<(i32, i32)> {
    if sigma <= 0.0 {
        return vec![(0, 0); frames];
    }
    let normal = Normal::new(0.0f32, sigma).expect("finite sigma");
    (0..frames)
        .map(|_| (normal.sample(rng).round() as i32, normal.sample(rng).round() as i32))
        .collect()
}

fn draw(scene: &SceneConfig, class_id: usize, t: usize, h: usize, w: usize, render_seed: u64) -> ClipDraws {
    let mut rng = SplitMix64::seed_from_u64(render_seed);
    let shape = ShapeKind::ALL[rng.random_range(0..3)];
    // contrast polarity is random, so brightness says nothing about motion
    let (fg_range, bg_range) = if rng.random_bool(0.5) {
        (0.55..1.0, 0.0..0.35)
    } else {
        (0.0..0.35, 0.55..1.0)
    };
    let mut fg = [0.0; 3];
    for c in &mut fg {
        *c = rng.random_range(fg_range.clone());
    }
    let mut bg = [0.0; 3];
    for c in &mut bg {
        *c = rng.random_range(bg_range.clone());
    }
    if scene.appearance_cue {
        fg = CUE_PALETTE[class_id % CUE_PALETTE.len()];
    }
    let jitter = (w.min(h) as f32 / 8.0).max(1.0);
    let anchor = (
        (w as f32 - 1.0) / 2.0 + rng.random_range(-jitter..jitter),
        (h as f32 - 1.0) / 2.0 + rng.random_range(-jitter..jitter),
    );
    let base_r = w.min(h) as f32 / 6.0;
    let radius = rng.random_range(0.8 * base_r..1.2 * base_r);
    let phase = rng.random_range(0.0..TAU);
    let mut texture = [(0.0, 0.0, 0.0, 0.0); 2];
    for tx in &mut texture {
        // integer cycles per frame so the toroidal wrap is seamless
        *tx = (
            rng.random_range(1..4) as f32,
            rng.random_range(1..4) as f32,
            rng.random_range(0.0..TAU),
            rng.random_range(0.10..0.18),
        );
    }
    let steps = camera_increments(&mut rng, scene.camera_noise_sigma, t.saturating_sub(1));
    let mut camera = vec![(0, 0)];
    for (dx, dy) in steps {
        let (px, py) = *camera.last().unwrap();
        camera.push((px + dx, py + dy));
    }
    ClipDraws {
        shape,
        fg,
        bg,
        anchor,
        radius,
        phase,
        camera,
        texture,
    }
}

/// Object centre and radius at frame `ti`, before camera motion, clamped so
/// the object stays inside the frame.
pub fn object_state(spec: &ActionClassSpec, d: &ClipDraws, ti: usize, t: usize, h: usize, w: usize) -> ((f32, f32), f32) {
    let dt = ti as f32 - (t / 2) as f32;
    let s = spec.speed;
    let (ax, ay) = d.anchor;
    let (mut cx, mut cy, mut r) = (ax, ay, d.radius);
    match spec.motion_pattern {
        MotionPattern::TranslateLeft => cx -= s * dt,
        MotionPattern::TranslateRight => cx += s * dt,
        MotionPattern::TranslateUp => cy -= s * dt,
        MotionPattern::TranslateDown => cy += s * dt,
        MotionPattern::OrbitCw | MotionPattern::OrbitCcw => {
            // image y points down, so a positive angle step turns clockwise on screen
            let dir = if spec.motion_pattern == MotionPattern::OrbitCw { 1.0 } else { -1.0 };
            let omega = dir * s / ORBIT_RADIUS;
            let (ox, oy) = (ax - ORBIT_RADIUS * d.phase.cos(), ay - ORBIT_RADIUS * d.phase.sin());
            let a = d.phase + omega * dt;
            cx = ox + ORBIT_RADIUS * a.cos();
            cy = oy + ORBIT_RADIUS * a.sin();
        }
        MotionPattern::Expand => r += s * RADIAL_RATE * dt,
        MotionPattern::Contract => r -= s * RADIAL_RATE * dt,
    }
    let r = r.clamp(1.5, w.min(h) as f32 / 2.0 - 1.0);
    let cx = cx.clamp(r, w as f32 - 1.0 - r);
    let cy = cy.clamp(r, h as f32 - 1.0 - r);
    ((cx, cy), r)
}

/// Renders an RGB clip `[3, T, H, W]` with values in `[0, 1]`.
pub fn render_clip(
    spec: &ActionClassSpec,
    scene: &SceneConfig,
    clip_shape: [usize; 3],
    render_seed: u64,
) -> Result<Tensor<f32>, SynthError> {
    let [t, h, w] = clip_shape;
    if h < MIN_FRAME || w < MIN_FRAME {
        return Err(SynthError::FrameTooSmall { height: h, width: w });
    }
    if t == 0 {
        return Err(SynthError::Config("clip needs at least one frame".into()));
    }
    let d = draw(scene, spec.class_id, t, h, w, render_seed);
    let mut data = vec![0.0f32; 3 * t * h * w];
    let mut frame = vec![[0.0f32; 3]; h * w];
    for ti in 0..t {
        let ((cx, cy), r) = object_state(spec, &d, ti, t, h, w);
        for y in 0..h {
            for x in 0..w {
                let shade: f32 = d
                    .texture
                    .iter()
                    .map(|&(fx, fy, ph, amp)| amp * (TAU * (fx * x as f32 / w as f32 + fy * y as f32 / h as f32) + ph).sin())
                    .sum();
                let mut hits = 0;
                for sy in 0..AA {
                    for sx in 0..AA {
                        let px = x as f32 + (sx as f32 + 0.5) / AA as f32 - 0.5;
                        let py = y as f32 + (sy as f32 + 0.5) / AA as f32 - 0.5;
                        if d.shape.contains(px - cx, py - cy, r) {
                            hits += 1;
                        }
                    }
                }
                let a = hits as f32 / (AA * AA) as f32;
                let px = &mut frame[y * w + x];
                for c in 0..3 {
                    px[c] = ((d.bg[c] + shade) * (1.0 - a) + d.fg[c] * a).clamp(0.0, 1.0);
                }
            }
        }
        // toroidal global shift: content moves by the camera offset
        let (ox, oy) = d.camera[ti];
        for y in 0..h {
            let sy = (y as i64 - oy as i64).rem_euclid(h as i64) as usize;
            for x in 0..w {
                let sx = (x as i64 - ox as i64).rem_euclid(w as i64) as usize;
                let px = frame[sy * w + sx];
                for c in 0..3 {
                    data[((c * t + ti) * h + y) * w + x] = px[c];
                }
            }
        }
    }
    Ok(Tensor::new(vec![3, t, h, w], data).expect("clip extents"))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Regime {
    MotionFavored,
    CameraNoisy,
}

impl Regime {
    pub const ALL: [Regime; 2] = [Regime::MotionFavored, Regime::CameraNoisy];

    pub fn name(self) -> &'static str {
        match self {
            Regime::MotionFavored => "motion-favored",
            Regime::CameraNoisy => "camera-noisy",
        }
    }
}

impl fmt::Display for Regime {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Regime {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        Self::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| format!("unknown regime `{s}` (motion-favored | camera-noisy)"))
    }
}

/// Preset dataset inputs for a regime; everything else keeps its default.
pub fn make_regime(regime: Regime, seed: u64) -> DatasetConfig {
    let base = DatasetConfig {
        seed,
        ..DatasetConfig::default()
    };
    match regime {
        Regime::MotionFavored => DatasetConfig {
            camera_noise_sigma: 0.0,
            appearance_cue: false,
            ..base
        },
        Regime::CameraNoisy => DatasetConfig {
            camera_noise_sigma: 3.0,
            appearance_cue: true,
            ..base
        },
    }
}
