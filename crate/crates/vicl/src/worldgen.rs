//! Synthetic sprite videos with contrastive action semantics.
//!
//! Every clip shows a single sprite (square or disc) on a black background
//! performing one of six actions: translation along an axis or isotropic
//! growth/shrinkage. Clips are pure functions of (label, seed, n_frames),
//! which makes datasets reproducible and lets an analytic motion oracle stand
//! in for a pretrained video classifier: the generating action is always
//! recoverable from centroid displacement and pixel-mass trend.

use rand::Rng;
use serde::{Deserialize, Serialize};
use std::fs;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};

use crate::error::{Error, Result};
use crate::seeds;

pub const FRAME_W: usize = 32;
pub const FRAME_H: usize = 32;

/// Translation speed of Move* sprites, px per frame.
pub const MOVE_SPEED: f32 = 2.0;
/// Per-frame multiplicative size change for Grow/Shrink.
pub const SCALE_RATE: f32 = 0.08;
/// Sprites are guaranteed unclamped motion for this many leading frames
/// (or the whole clip when shorter). Afterwards they may hit a border and
/// freeze, which is deliberate: frozen tails are part of the world.
pub const CLEAN_FRAMES: usize = 8;

/// Oracle noise floor: total centroid displacement below this is "no motion".
pub const DISP_FLOOR: f64 = 0.5;
/// Oracle noise floor: relative mass change below this is "no size trend".
pub const MASS_FLOOR: f64 = 0.02;

pub const NUM_CLASSES: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ActionClass {
    MoveLeft,
    MoveRight,
    MoveUp,
    MoveDown,
    Grow,
    Shrink,
}

pub const ALL_CLASSES: [ActionClass; NUM_CLASSES] = [
    ActionClass::MoveLeft,
    ActionClass::MoveRight,
    ActionClass::MoveUp,
    ActionClass::MoveDown,
    ActionClass::Grow,
    ActionClass::Shrink,
];

impl ActionClass {
    pub fn id(self) -> usize {
        match self {
            ActionClass::MoveLeft => 0,
            ActionClass::MoveRight => 1,
            ActionClass::MoveUp => 2,
            ActionClass::MoveDown => 3,
            ActionClass::Grow => 4,
            ActionClass::Shrink => 5,
        }
    }

    pub fn from_id(id: usize) -> Result<Self> {
        ALL_CLASSES
            .get(id)
            .copied()
            .ok_or_else(|| Error::invalid(format!("class id {id} out of range")))
    }

    pub fn name(self) -> &'static str {
        match self {
            ActionClass::MoveLeft => "MoveLeft",
            ActionClass::MoveRight => "MoveRight",
            ActionClass::MoveUp => "MoveUp",
            ActionClass::MoveDown => "MoveDown",
            ActionClass::Grow => "Grow",
            ActionClass::Shrink => "Shrink",
        }
    }

    /// The designated opposite action. An involution pairing
    /// (Left,Right), (Up,Down), (Grow,Shrink).
    pub fn contrast(self) -> Self {
        match self {
            ActionClass::MoveLeft => ActionClass::MoveRight,
            ActionClass::MoveRight => ActionClass::MoveLeft,
            ActionClass::MoveUp => ActionClass::MoveDown,
            ActionClass::MoveDown => ActionClass::MoveUp,
            ActionClass::Grow => ActionClass::Shrink,
            ActionClass::Shrink => ActionClass::Grow,
        }
    }
}

/// What the motion oracle decided.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum OraclePrediction {
    Class(ActionClass),
    Unknown,
}

impl OraclePrediction {
    pub fn matches(self, label: ActionClass) -> bool {
        self == OraclePrediction::Class(label)
    }
}

/// A single grayscale frame, intensities in [0,1], quantized to the u8 grid
/// so that file round-trips are exact.
#[derive(Debug, Clone, PartialEq)]
pub struct Frame {
    pub width: usize,
    pub height: usize,
    pub pixels: Vec<f32>,
}

impl Frame {
    pub fn zeros(width: usize, height: usize) -> Self {
        Frame {
            width,
            height,
            pixels: vec![0.0; width * height],
        }
    }

    #[inline]
    pub fn at(&self, y: usize, x: usize) -> f32 {
        self.pixels[y * self.width + x]
    }

    /// Total intensity.
    pub fn mass(&self) -> f64 {
        self.pixels.iter().map(|&p| p as f64).sum()
    }

    /// Intensity-weighted centroid (x, y). Falls back to the frame center
    /// when the frame is empty.
    pub fn centroid(&self) -> (f64, f64) {
        let m = self.mass();
        if m <= 0.0 {
            return (self.width as f64 / 2.0, self.height as f64 / 2.0);
        }
        let mut sx = 0.0;
        let mut sy = 0.0;
        for y in 0..self.height {
            for x in 0..self.width {
                let p = self.at(y, x) as f64;
                sx += p * (x as f64 + 0.5);
                sy += p * (y as f64 + 0.5);
            }
        }
        (sx / m, sy / m)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum SpriteShape {
    Square,
    Disc,
}

/// How the sprite evolves over time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Motion {
    /// Constant velocity in px/frame; position clamps at the borders.
    Translate { vx: f32, vy: f32 },
    /// Multiplicative size change per frame; size clamps at 2 px and at the
    /// largest sprite that still fits around the (fixed) center.
    Scale { rate: f32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpriteParams {
    pub shape: SpriteShape,
    pub start_x: f32,
    pub start_y: f32,
    pub size: f32,
    pub intensity: f32,
    pub motion: Motion,
}

#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub frames: Vec<Frame>,
    pub label: ActionClass,
    pub seed: u64,
    pub sprite: SpriteParams,
}

fn quantize(v: f32) -> f32 {
    (v.clamp(0.0, 1.0) * 255.0).round() / 255.0
}

/// Render one frame: anti-aliased coverage times intensity, quantized to the
/// u8 grid. Square coverage is exact; disc coverage uses 8x8 supersampling.
pub fn render_sprite(shape: SpriteShape, cx: f32, cy: f32, size: f32, intensity: f32) -> Frame {
    let mut frame = Frame::zeros(FRAME_W, FRAME_H);
    let half = size / 2.0;
    let x0 = (cx - half).floor().max(0.0) as usize;
    let x1 = ((cx + half).ceil() as usize).min(FRAME_W);
    let y0 = (cy - half).floor().max(0.0) as usize;
    let y1 = ((cy + half).ceil() as usize).min(FRAME_H);
    for y in y0..y1 {
        for x in x0..x1 {
            let coverage = match shape {
                SpriteShape::Square => {
                    let ox = (x as f32 + 1.0).min(cx + half) - (x as f32).max(cx - half);
                    let oy = (y as f32 + 1.0).min(cy + half) - (y as f32).max(cy - half);
                    ox.max(0.0) * oy.max(0.0)
                }
                SpriteShape::Disc => {
                    const SS: usize = 8;
                    let r2 = half * half;
                    let mut inside = 0u32;
                    for sy in 0..SS {
                        for sx in 0..SS {
                            let px = x as f32 + (sx as f32 + 0.5) / SS as f32;
                            let py = y as f32 + (sy as f32 + 0.5) / SS as f32;
                            let dx = px - cx;
                            let dy = py - cy;
                            if dx * dx + dy * dy <= r2 {
                                inside += 1;
                            }
                        }
                    }
                    inside as f32 / (SS * SS) as f32
                }
            };
            if coverage > 0.0 {
                frame.pixels[y * FRAME_W + x] = quantize(coverage * intensity);
            }
        }
    }
    frame
}

/// Sprite parameters for (label, seed, n_frames), without rendering.
///
/// Start positions are sampled so that the first `min(n_frames, CLEAN_FRAMES)`
/// frames evolve without hitting a border; beyond that the sprite may clamp.
pub fn clip_params(label: ActionClass, seed: u64, n_frames: usize) -> Result<SpriteParams> {
    check_n_frames(n_frames)?;
    let mut rng = seeds::rng_for(seed, "sprite");
    let shape = if rng.gen::<bool>() {
        SpriteShape::Square
    } else {
        SpriteShape::Disc
    };
    let size = rng.gen_range(6.0f32..10.0);
    let intensity = rng.gen_range(0.6f32..1.0);
    let clean_steps = (n_frames.min(CLEAN_FRAMES) - 1) as f32;
    let w = FRAME_W as f32;
    let h = FRAME_H as f32;
    let half = size / 2.0;

    let (motion, start_x, start_y) = match label {
        ActionClass::MoveRight => {
            let d = MOVE_SPEED * clean_steps;
            let x = rng.gen_range(half..(w - half - d));
            let y = rng.gen_range(half..(h - half));
            (Motion::Translate { vx: MOVE_SPEED, vy: 0.0 }, x, y)
        }
        ActionClass::MoveLeft => {
            let d = MOVE_SPEED * clean_steps;
            let x = rng.gen_range((half + d)..(w - half));
            let y = rng.gen_range(half..(h - half));
            (Motion::Translate { vx: -MOVE_SPEED, vy: 0.0 }, x, y)
        }
        ActionClass::MoveDown => {
            let d = MOVE_SPEED * clean_steps;
            let x = rng.gen_range(half..(w - half));
            let y = rng.gen_range(half..(h - half - d));
            (Motion::Translate { vx: 0.0, vy: MOVE_SPEED }, x, y)
        }
        ActionClass::MoveUp => {
            let d = MOVE_SPEED * clean_steps;
            let x = rng.gen_range(half..(w - half));
            let y = rng.gen_range((half + d)..(h - half));
            (Motion::Translate { vx: 0.0, vy: -MOVE_SPEED }, x, y)
        }
        ActionClass::Grow => {
            // room for the fully grown clean-phase sprite
            let grown_half = half * (1.0 + SCALE_RATE).powf(clean_steps);
            let x = rng.gen_range(grown_half..(w - grown_half));
            let y = rng.gen_range(grown_half..(h - grown_half));
            (Motion::Scale { rate: SCALE_RATE }, x, y)
        }
        ActionClass::Shrink => {
            let x = rng.gen_range(half..(w - half));
            let y = rng.gen_range(half..(h - half));
            (Motion::Scale { rate: -SCALE_RATE }, x, y)
        }
    };

    Ok(SpriteParams {
        shape,
        start_x,
        start_y,
        size,
        intensity,
        motion,
    })
}

fn check_n_frames(n_frames: usize) -> Result<()> {
    if !(2..=32).contains(&n_frames) {
        return Err(Error::invalid(format!(
            "n_frames must be in [2, 32], got {n_frames}"
        )));
    }
    Ok(())
}

/// Generate a clip. Deterministic in (label, seed, n_frames).
pub fn gen_clip(label: ActionClass, seed: u64, n_frames: usize) -> Result<VideoClip> {
    let sprite = clip_params(label, seed, n_frames)?;
    let half0 = sprite.size / 2.0;
    let w = FRAME_W as f32;
    let h = FRAME_H as f32;
    let mut frames = Vec::with_capacity(n_frames);
    for t in 0..n_frames {
        let (cx, cy, size) = match sprite.motion {
            Motion::Translate { vx, vy } => {
                let cx = (sprite.start_x + vx * t as f32).clamp(half0, w - half0);
                let cy = (sprite.start_y + vy * t as f32).clamp(half0, h - half0);
                (cx, cy, sprite.size)
            }
            Motion::Scale { rate } => {
                let raw = sprite.size * (1.0 + rate).powi(t as i32);
                let max_fit = 2.0
                    * sprite
                        .start_x
                        .min(w - sprite.start_x)
                        .min(sprite.start_y)
                        .min(h - sprite.start_y);
                (sprite.start_x, sprite.start_y, raw.clamp(2.0, max_fit))
            }
        };
        frames.push(render_sprite(sprite.shape, cx, cy, size, sprite.intensity));
    }
    Ok(VideoClip {
        frames,
        label,
        seed,
        sprite,
    })
}

/// Per-clip motion statistics the oracle (and the Fréchet features) build on.
#[derive(Debug, Clone, Copy)]
pub struct MotionStats {
    /// Centroid displacement, last frame minus first.
    pub disp_x: f64,
    pub disp_y: f64,
    /// Relative mass change, (m_last - m_first) / m_first.
    pub mass_rel: f64,
    /// Mean centroid over frames.
    pub mean_x: f64,
    pub mean_y: f64,
    /// Mean mass over frames.
    pub mean_mass: f64,
    /// Variance of per-step centroid displacement, per axis.
    pub step_var_x: f64,
    pub step_var_y: f64,
}

pub fn motion_stats(frames: &[Frame]) -> Result<MotionStats> {
    if frames.len() < 2 {
        return Err(Error::invalid("motion stats need at least 2 frames"));
    }
    let cents: Vec<(f64, f64)> = frames.iter().map(|f| f.centroid()).collect();
    let masses: Vec<f64> = frames.iter().map(|f| f.mass()).collect();
    let n = frames.len();
    let m0 = masses[0];
    let mass_rel = if m0 > 1e-9 {
        (masses[n - 1] - m0) / m0
    } else if masses[n - 1] > 1e-9 {
        f64::INFINITY
    } else {
        0.0
    };
    let mean_x = cents.iter().map(|c| c.0).sum::<f64>() / n as f64;
    let mean_y = cents.iter().map(|c| c.1).sum::<f64>() / n as f64;
    let steps_x: Vec<f64> = cents.windows(2).map(|w| w[1].0 - w[0].0).collect();
    let steps_y: Vec<f64> = cents.windows(2).map(|w| w[1].1 - w[0].1).collect();
    let var = |v: &[f64]| {
        let mu = v.iter().sum::<f64>() / v.len() as f64;
        v.iter().map(|x| (x - mu) * (x - mu)).sum::<f64>() / v.len() as f64
    };
    Ok(MotionStats {
        disp_x: cents[n - 1].0 - cents[0].0,
        disp_y: cents[n - 1].1 - cents[0].1,
        mass_rel,
        mean_x,
        mean_y,
        mean_mass: masses.iter().sum::<f64>() / n as f64,
        step_var_x: var(&steps_x),
        step_var_y: var(&steps_y),
    })
}

/// Classify a clip from pixels alone.
///
/// Decision rule: below both noise floors (total displacement < 0.5 px and
/// relative mass change < 2%) the clip is Unknown. Otherwise the stronger of
/// the two signals, each normalized by its floor, picks the family: dominant
/// signed displacement axis for Move*, mass trend sign for Grow/Shrink.
pub fn oracle_classify(frames: &[Frame]) -> Result<OraclePrediction> {
    if frames.len() < 2 {
        return Err(Error::invalid("oracle needs at least 2 frames"));
    }
    let s = motion_stats(frames)?;
    let disp = (s.disp_x * s.disp_x + s.disp_y * s.disp_y).sqrt();
    let mass_mag = if s.mass_rel.is_finite() {
        s.mass_rel.abs()
    } else {
        f64::INFINITY
    };
    if disp < DISP_FLOOR && mass_mag < MASS_FLOOR {
        return Ok(OraclePrediction::Unknown);
    }
    let move_score = disp / DISP_FLOOR;
    let mass_score = mass_mag / MASS_FLOOR;
    let class = if move_score >= mass_score {
        if s.disp_x.abs() >= s.disp_y.abs() {
            if s.disp_x > 0.0 {
                ActionClass::MoveRight
            } else {
                ActionClass::MoveLeft
            }
        } else if s.disp_y > 0.0 {
            ActionClass::MoveDown
        } else {
            ActionClass::MoveUp
        }
    } else if s.mass_rel > 0.0 {
        ActionClass::Grow
    } else {
        ActionClass::Shrink
    };
    Ok(OraclePrediction::Class(class))
}

// ---------------------------------------------------------------------------
// Dataset generation and the VIML frame-file format
// ---------------------------------------------------------------------------

pub const VIML_MAGIC: &[u8; 4] = b"VIML";
pub const VIML_VERSION: u16 = 1;

/// Write frames as raw u8 pixels with a 16-byte header:
/// magic "VIML", version u16, n_frames u16, H u16, W u16, 4 reserved bytes.
/// All integers little-endian; pixels row-major, frame-major.
pub fn write_viml(path: &Path, frames: &[Frame]) -> Result<()> {
    if frames.is_empty() {
        return Err(Error::invalid("cannot write an empty clip"));
    }
    let (w, h) = (frames[0].width, frames[0].height);
    let mut buf = Vec::with_capacity(16 + frames.len() * w * h);
    buf.extend_from_slice(VIML_MAGIC);
    buf.extend_from_slice(&VIML_VERSION.to_le_bytes());
    buf.extend_from_slice(&(frames.len() as u16).to_le_bytes());
    buf.extend_from_slice(&(h as u16).to_le_bytes());
    buf.extend_from_slice(&(w as u16).to_le_bytes());
    buf.extend_from_slice(&[0u8; 4]);
    for f in frames {
        if f.width != w || f.height != h {
            return Err(Error::invalid("inconsistent frame dimensions"));
        }
        buf.extend(f.pixels.iter().map(|&p| (p.clamp(0.0, 1.0) * 255.0).round() as u8));
    }
    let mut file = fs::File::create(path)?;
    file.write_all(&buf)?;
    Ok(())
}

pub fn read_viml(path: &Path) -> Result<Vec<Frame>> {
    let mut bytes = Vec::new();
    fs::File::open(path)
        .map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?
        .read_to_end(&mut bytes)?;
    if bytes.len() < 16 || &bytes[0..4] != VIML_MAGIC {
        return Err(Error::Format(format!("{}: not a VIML file", path.display())));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != VIML_VERSION {
        return Err(Error::Format(format!("unsupported VIML version {version}")));
    }
    let n_frames = u16::from_le_bytes([bytes[6], bytes[7]]) as usize;
    let h = u16::from_le_bytes([bytes[8], bytes[9]]) as usize;
    let w = u16::from_le_bytes([bytes[10], bytes[11]]) as usize;
    let expect = 16 + n_frames * h * w;
    if bytes.len() != expect {
        return Err(Error::Format(format!(
            "{}: expected {} bytes, found {}",
            path.display(),
            expect,
            bytes.len()
        )));
    }
    let mut frames = Vec::with_capacity(n_frames);
    for i in 0..n_frames {
        let off = 16 + i * h * w;
        frames.push(Frame {
            width: w,
            height: h,
            pixels: bytes[off..off + h * w]
                .iter()
                .map(|&b| b as f32 / 255.0)
                .collect(),
        });
    }
    Ok(frames)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DatasetSpec {
    /// Clips per class, across all splits. Split 80/10/10 per class.
    pub n_per_class: usize,
    pub n_frames: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct ClipEntry {
    pub clip_id: u32,
    pub class_id: usize,
    pub seed: u64,
    pub n_frames: usize,
    pub split: Split,
    pub file: String,
}

impl ClipEntry {
    pub fn label(&self) -> ActionClass {
        ActionClass::from_id(self.class_id).expect("manifest class id")
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub spec: DatasetSpec,
    pub classes: Vec<String>,
    pub clips: Vec<ClipEntry>,
}

impl DatasetManifest {
    pub fn split(&self, split: Split) -> impl Iterator<Item = &ClipEntry> {
        self.clips.iter().filter(move |c| c.split == split)
    }
}

/// Generate a balanced dataset under `dir`: one VIML file per clip plus a
/// `manifest.json`. Byte-identical for identical specs.
pub fn gen_dataset(spec: &DatasetSpec, dir: &Path) -> Result<DatasetManifest> {
    if spec.n_per_class < 10 {
        return Err(Error::invalid("n_per_class must be at least 10"));
    }
    check_n_frames(spec.n_frames)?;
    let n_val = (spec.n_per_class / 10).max(1);
    let n_test = (spec.n_per_class / 10).max(1);
    let n_train = spec.n_per_class - n_val - n_test;

    fs::create_dir_all(dir.join("clips"))?;
    let mut clips = Vec::with_capacity(NUM_CLASSES * spec.n_per_class);
    for class in ALL_CLASSES {
        for i in 0..spec.n_per_class {
            let clip_id = (class.id() * spec.n_per_class + i) as u32;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            let clip_seed = seeds::indexed_seed(spec.seed, "clips", clip_id as u64);
            let clip = gen_clip(class, clip_seed, spec.n_frames)?;
            let file = format!("clips/{clip_id:06}.viml");
            write_viml(&dir.join(&file), &clip.frames)?;
            clips.push(ClipEntry {
                clip_id,
                class_id: class.id(),
                seed: clip_seed,
                n_frames: spec.n_frames,
                split,
                file,
            });
        }
    }
    let manifest = DatasetManifest {
        version: 1,
        spec: *spec,
        classes: ALL_CLASSES.iter().map(|c| c.name().to_string()).collect(),
        clips,
    };
    let json = serde_json::to_string_pretty(&manifest)
        .map_err(|e| Error::Format(e.to_string()))?;
    fs::write(dir.join("manifest.json"), json + "\n")?;
    Ok(manifest)
}

/// An on-disk dataset opened for reading.
#[derive(Debug, Clone)]
pub struct Dataset {
    pub dir: PathBuf,
    pub manifest: DatasetManifest,
}

impl Dataset {
    pub fn open(dir: &Path) -> Result<Self> {
        let path = dir.join("manifest.json");
        let text = fs::read_to_string(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::NotFound {
                Error::NotFound(path.display().to_string())
            } else {
                Error::Io(e)
            }
        })?;
        let manifest: DatasetManifest =
            serde_json::from_str(&text).map_err(|e| Error::Format(e.to_string()))?;
        Ok(Dataset {
            dir: dir.to_path_buf(),
            manifest,
        })
    }

    pub fn load_clip(&self, entry: &ClipEntry) -> Result<VideoClip> {
        let frames = read_viml(&self.dir.join(&entry.file))?;
        let sprite = clip_params(entry.label(), entry.seed, entry.n_frames)?;
        Ok(VideoClip {
            frames,
            label: entry.label(),
            seed: entry.seed,
            sprite,
        })
    }
}
