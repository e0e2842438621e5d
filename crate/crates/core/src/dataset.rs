//! Synthetic moving-shapes clips with action labels and exact object masks.

use std::fs;
use std::path::{Path, PathBuf};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::VideoClip;
use crate::error::{Error, Result};
use crate::stf;
use crate::tensor::Tensor;

/// Pixels moved per frame by the translation actions.
pub const TRANSLATE_STEP: f64 = 2.0;
/// Size change per frame of the grow and shrink actions.
pub const RESIZE_STEP: f64 = 1.0;
/// Orbit radius and angular step of the rotate-orbit action.
pub const ORBIT_RADIUS: f64 = 6.0;
pub const ORBIT_STEP: f64 = std::f64::consts::FRAC_PI_4;
const MIN_SIZE: f64 = 3.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Action {
    TranslateLeft,
    TranslateRight,
    TranslateUp,
    Grow,
    Shrink,
    RotateOrbit,
}

impl Action {
    pub const ALL: [Action; 6] = [
        Action::TranslateLeft,
        Action::TranslateRight,
        Action::TranslateUp,
        Action::Grow,
        Action::Shrink,
        Action::RotateOrbit,
    ];

    pub fn id(self) -> usize {
        Self::ALL.iter().position(|&a| a == self).expect("listed")
    }

    pub fn from_id(id: usize) -> Result<Self> {
        Self::ALL
            .get(id)
            .copied()
            .ok_or_else(|| Error::config(format!("unknown action id {id}")))
    }

    pub fn name(self) -> &'static str {
        match self {
            Action::TranslateLeft => "translate-left",
            Action::TranslateRight => "translate-right",
            Action::TranslateUp => "translate-up",
            Action::Grow => "grow",
            Action::Shrink => "shrink",
            Action::RotateOrbit => "rotate-orbit",
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Shape {
    Square,
    Circle,
    Triangle,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub shape: Shape,
    /// Side length or diameter in pixels.
    pub size: f64,
    pub color: [f64; 3],
    /// Center `(x, y)` at frame 0.
    pub start: (f64, f64),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub seed: u64,
    /// `(height, width)`
    pub canvas: (usize, usize),
    pub objects: Vec<ObjectSpec>,
    pub action: Action,
    pub frames: usize,
}

pub const PALETTE: [[f64; 3]; 6] = [
    [1.0, 0.2, 0.2],
    [0.2, 1.0, 0.2],
    [0.2, 0.4, 1.0],
    [1.0, 1.0, 0.2],
    [1.0, 0.2, 1.0],
    [0.2, 1.0, 1.0],
];

impl SceneSpec {
    /// Draws 1 to 3 objects with distinct palette colors and integer start
    /// positions from `seed`.
    pub fn random(seed: u64, action: Action, frames: usize, canvas: (usize, usize)) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(1..=3);
        let mut colors: Vec<usize> = (0..PALETTE.len()).collect();
        let (h, w) = (canvas.0 as f64, canvas.1 as f64);
        // 8 to 14 pixels on a 64-pixel canvas, scaled with the shorter side
        let side = canvas.0.min(canvas.1);
        let lo = (side / 8).max(3);
        let hi = (side * 7 / 32).max(lo);
        let objects = (0..count)
            .map(|_| {
                let c = colors.swap_remove(rng.random_range(0..colors.len()));
                let shape = [Shape::Square, Shape::Circle, Shape::Triangle][rng.random_range(0..3)];
                let size = rng.random_range(lo..=hi) as f64;
                let ((x0, x1), (y0, y1)) = start_range(action, size, frames, (h, w));
                let x = rng.random_range(x0..=x1) as f64;
                let y = rng.random_range(y0..=y1) as f64;
                ObjectSpec {
                    shape,
                    size,
                    color: PALETTE[c],
                    start: (x, y),
                }
            })
            .collect();
        Self {
            seed,
            canvas,
            objects,
            action,
            frames,
        }
    }

    /// Center and size of `obj` at frame `t`, clamped to stay on the canvas.
    pub fn state_at(&self, obj: &ObjectSpec, t: usize) -> ((f64, f64), f64) {
        let tf = t as f64;
        let (h, w) = (self.canvas.0 as f64, self.canvas.1 as f64);
        let limit = h.min(w);
        let (mut x, mut y) = obj.start;
        let mut size = obj.size;
        match self.action {
            Action::TranslateLeft => x -= TRANSLATE_STEP * tf,
            Action::TranslateRight => x += TRANSLATE_STEP * tf,
            Action::TranslateUp => y -= TRANSLATE_STEP * tf,
            Action::Grow => size = (size + RESIZE_STEP * tf).min(limit),
            Action::Shrink => size = (size - RESIZE_STEP * tf).max(MIN_SIZE),
            Action::RotateOrbit => {
                let angle = ORBIT_STEP * tf;
                x += ORBIT_RADIUS * (angle.cos() - 1.0);
                y += ORBIT_RADIUS * angle.sin();
            }
        }
        let half = size / 2.0;
        ((x.clamp(half, w - half), y.clamp(half, h - half)), size)
    }
}

/// Integer start-center ranges that keep an object of `size` fully inside
/// the canvas for the whole clip, falling back to the static range when the
/// canvas is too small for the motion.
fn start_range(action: Action, size: f64, frames: usize, (h, w): (f64, f64)) -> ((usize, usize), (usize, usize)) {
    let travel = TRANSLATE_STEP * (frames.saturating_sub(1)) as f64;
    let mut half = size / 2.0;
    // extra room needed on each side: (left, right, top, bottom)
    let (l, r, t, b) = match action {
        Action::TranslateLeft => (travel, 0.0, 0.0, 0.0),
        Action::TranslateRight => (0.0, travel, 0.0, 0.0),
        Action::TranslateUp => (0.0, 0.0, travel, 0.0),
        Action::Grow => {
            half = (size + RESIZE_STEP * frames.saturating_sub(1) as f64).min(h.min(w)) / 2.0;
            (0.0, 0.0, 0.0, 0.0)
        }
        Action::Shrink => (0.0, 0.0, 0.0, 0.0),
        Action::RotateOrbit => (2.0 * ORBIT_RADIUS, 0.0, ORBIT_RADIUS, ORBIT_RADIUS),
    };
    let range = |lo: f64, hi: f64, fallback: (f64, f64)| -> (usize, usize) {
        let (lo, hi) = (lo.ceil(), hi.floor());
        if lo <= hi {
            (lo as usize, hi as usize)
        } else {
            (fallback.0.ceil() as usize, fallback.1.floor().max(fallback.0.ceil()) as usize)
        }
    };
    let base = size / 2.0;
    (
        range(half + l, w - half - r, (base, w - base)),
        range(half + t, h - half - b, (base, h - base)),
    )
}

fn covers(shape: Shape, dx: f64, dy: f64, size: f64) -> bool {
    let half = size / 2.0;
    match shape {
        Shape::Square => dx.abs() < half && dy.abs() < half,
        Shape::Circle => dx * dx + dy * dy < half * half,
        // apex up, base at the bottom edge of the bounding box
        Shape::Triangle => dy.abs() < half && dx.abs() < (dy + half) / 2.0,
    }
}

/// Renders a scene. Later objects occlude earlier ones; mask id of object
/// `i` is `i + 1`, background is 0.
pub fn generate(spec: &SceneSpec) -> Result<VideoClip> {
    if spec.objects.is_empty() {
        return Err(Error::config("a scene needs at least one object"));
    }
    if spec.objects.len() > 3 {
        return Err(Error::config("a scene holds at most 3 objects"));
    }
    if spec.frames < 2 {
        return Err(Error::config("a clip needs at least 2 frames"));
    }
    let (h, w) = spec.canvas;
    let t = spec.frames;
    let mut frames = vec![0.0; t * 3 * h * w];
    let mut masks = vec![0.0; t * h * w];
    for f in 0..t {
        for (i, obj) in spec.objects.iter().enumerate() {
            let ((cx, cy), size) = spec.state_at(obj, f);
            for y in 0..h {
                for x in 0..w {
                    if covers(obj.shape, x as f64 + 0.5 - cx, y as f64 + 0.5 - cy, size) {
                        masks[(f * h + y) * w + x] = (i + 1) as f64;
                        for c in 0..3 {
                            frames[((f * 3 + c) * h + y) * w + x] = obj.color[c];
                        }
                    }
                }
            }
        }
    }
    VideoClip::new(
        Tensor::new(vec![t, 3, h, w], frames)?,
        spec.action.id(),
        Some(Tensor::new(vec![t, h, w], masks)?),
    )
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" => Ok(Split::Val),
            other => Err(Error::config(format!("unknown split '{other}' (expected train or val)"))),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FeaturePaths {
    pub cls: String,
    pub grid: String,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ClipEntry {
    pub id: String,
    pub label: usize,
    pub split: Split,
    pub seed: u64,
    /// Paths relative to the manifest's directory.
    pub frames: String,
    pub masks: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub features: Option<FeaturePaths>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub version: u32,
    pub classes: Vec<String>,
    pub frames: usize,
    pub canvas: (usize, usize),
    pub seed: u64,
    pub clips: Vec<ClipEntry>,
}

pub const MANIFEST_FILE: &str = "manifest.json";

impl Manifest {
    pub fn split(&self, split: Split) -> Vec<&ClipEntry> {
        self.clips.iter().filter(|c| c.split == split).collect()
    }

    pub fn find(&self, id: &str) -> Option<&ClipEntry> {
        self.clips.iter().find(|c| c.id == id)
    }

    pub fn spec(&self, entry: &ClipEntry) -> Result<SceneSpec> {
        Ok(SceneSpec::random(entry.seed, Action::from_id(entry.label)?, self.frames, self.canvas))
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string_pretty(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let m: Manifest = serde_json::from_str(&fs::read_to_string(path)?)?;
        if m.version != 1 {
            return Err(Error::format(format!("unsupported manifest version {}", m.version)));
        }
        if let Some(c) = m.clips.iter().find(|c| c.label >= m.classes.len()) {
            return Err(Error::format(format!("clip {} has label {} outside the class list", c.id, c.label)));
        }
        Ok(m)
    }
}

/// Balanced class assignment with a per-class 80/20 train/val split. Clip
/// seeds are drawn from `seed`.
pub fn make_split(n_clips: usize, classes: usize, seed: u64, frames: usize, canvas: (usize, usize)) -> Result<Manifest> {
    if classes == 0 || classes > Action::ALL.len() {
        return Err(Error::config(format!("class count must be in 1..={}", Action::ALL.len())));
    }
    if n_clips < classes {
        return Err(Error::config(format!("{n_clips} clips cannot cover {classes} classes")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut clips = Vec::with_capacity(n_clips);
    for label in 0..classes {
        let count = n_clips / classes + usize::from(label < n_clips % classes);
        let n_val = (count as f64 * 0.2).round() as usize;
        for k in 0..count {
            let id = format!("clip_{:04}", clips.len());
            clips.push(ClipEntry {
                frames: format!("clips/{id}_frames.stf"),
                masks: format!("clips/{id}_masks.stf"),
                id,
                label,
                split: if k < count - n_val { Split::Train } else { Split::Val },
                seed: rng.random(),
                features: None,
            });
        }
    }
    Ok(Manifest {
        version: 1,
        classes: Action::ALL[..classes].iter().map(|a| a.name().to_string()).collect(),
        frames,
        canvas,
        seed,
        clips,
    })
}

/// Generates every clip of `manifest` under `dir` and writes the manifest
/// itself. Returns the manifest path.
pub fn write_dataset(manifest: &Manifest, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for entry in &manifest.clips {
        let clip = generate(&manifest.spec(entry)?)?;
        for rel in [&entry.frames, &entry.masks] {
            if let Some(parent) = dir.join(rel).parent() {
                fs::create_dir_all(parent)?;
            }
        }
        stf::save(dir.join(&entry.frames), &clip.frames)?;
        stf::save(dir.join(&entry.masks), clip.gt_masks.as_ref().expect("generated clips carry masks"))?;
    }
    let path = dir.join(MANIFEST_FILE);
    manifest.save(&path)?;
    Ok(path)
}

/// Reads one clip's frames and masks relative to `root`.
pub fn load_clip(root: impl AsRef<Path>, entry: &ClipEntry) -> Result<VideoClip> {
    let root = root.as_ref();
    let frames = stf::load(root.join(&entry.frames))?;
    let masks = match fs::metadata(root.join(&entry.masks)) {
        Ok(_) => Some(stf::load(root.join(&entry.masks))?),
        Err(_) => None,
    };
    VideoClip::new(frames, entry.label, masks)
}
