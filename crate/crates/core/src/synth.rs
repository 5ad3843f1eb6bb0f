//! Synthetic flow sequences with known motion groups.
//!
//! A scene is a uniformly translating background plus a list of rigid shapes,
//! each with its own flow vector and per-frame displacement. Every flow
//! component receives i.i.d. Gaussian noise drawn from a seeded stream, so a
//! scene file fully determines the generated sequence.

use std::fmt::Write as _;
use std::path::Path;
use std::str::FromStr;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::flow::{write_flo, FlowField};
use crate::mask::Mask;

// shape, motion, trajectory as parsed so far
type PartialObject = (Option<Shape>, Option<[f64; 2]>, Option<[f64; 2]>);

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Shape {
    /// Top-left corner and size, in pixels.
    Rect { x: f64, y: f64, w: f64, h: f64 },
    /// Center and semi-axes, in pixels.
    Ellipse { cx: f64, cy: f64, rx: f64, ry: f64 },
}

impl Shape {
    fn translated(&self, dx: f64, dy: f64) -> Shape {
        match *self {
            Shape::Rect { x, y, w, h } => Shape::Rect {
                x: x + dx,
                y: y + dy,
                w,
                h,
            },
            Shape::Ellipse { cx, cy, rx, ry } => Shape::Ellipse {
                cx: cx + dx,
                cy: cy + dy,
                rx,
                ry,
            },
        }
    }

    /// Whether the pixel whose center is `(px + 0.5, py + 0.5)` lies inside.
    pub fn contains(&self, px: usize, py: usize) -> bool {
        let (fx, fy) = (px as f64 + 0.5, py as f64 + 0.5);
        match *self {
            Shape::Rect { x, y, w, h } => fx >= x && fx < x + w && fy >= y && fy < y + h,
            Shape::Ellipse { cx, cy, rx, ry } => {
                let (ex, ey) = ((fx - cx) / rx, (fy - cy) / ry);
                ex * ex + ey * ey <= 1.0
            }
        }
    }

    fn bounds(&self) -> (f64, f64, f64, f64) {
        match *self {
            Shape::Rect { x, y, w, h } => (x, y, x + w, y + h),
            Shape::Ellipse { cx, cy, rx, ry } => (cx - rx, cy - ry, cx + rx, cy + ry),
        }
    }

    fn is_valid(&self) -> bool {
        let (w, h) = match *self {
            Shape::Rect { w, h, .. } => (w, h),
            Shape::Ellipse { rx, ry, .. } => (rx, ry),
        };
        let (x0, y0, x1, y1) = self.bounds();
        w > 0.0 && h > 0.0 && [x0, y0, x1, y1].iter().all(|v| v.is_finite())
    }
}

impl FromStr for Shape {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let (kind, args) = s
            .split_once(':')
            .ok_or_else(|| Error::Parse(format!("shape {s:?} lacks a kind prefix")))?;
        let v = parse_list(args, 4)?;
        match kind.trim() {
            "rect" => Ok(Shape::Rect {
                x: v[0],
                y: v[1],
                w: v[2],
                h: v[3],
            }),
            "ellipse" => Ok(Shape::Ellipse {
                cx: v[0],
                cy: v[1],
                rx: v[2],
                ry: v[3],
            }),
            other => Err(Error::Parse(format!("unknown shape kind {other:?}"))),
        }
    }
}

impl std::fmt::Display for Shape {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match *self {
            Shape::Rect { x, y, w, h } => write!(f, "rect:{x},{y},{w},{h}"),
            Shape::Ellipse { cx, cy, rx, ry } => write!(f, "ellipse:{cx},{cy},{rx},{ry}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneObject {
    /// Geometry on frame 0.
    pub shape: Shape,
    /// Flow vector written inside the shape, pixels/frame.
    pub motion: [f64; 2],
    /// Displacement of the shape between consecutive frames.
    pub trajectory: [f64; 2],
}

impl SceneObject {
    pub fn shape_at(&self, frame: usize) -> Shape {
        let t = frame as f64;
        self.shape.translated(self.trajectory[0] * t, self.trajectory[1] * t)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SceneSpec {
    pub width: usize,
    pub height: usize,
    pub background_motion: [f64; 2],
    /// Later objects occlude earlier ones.
    pub objects: Vec<SceneObject>,
    pub noise_sigma: f64,
    pub frames: usize,
    pub seed: u64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct LabeledSequence {
    pub flows: Vec<FlowField>,
    pub masks: Vec<Mask>,
}

impl SceneSpec {
    pub fn validate(&self) -> Result<()> {
        if self.width == 0 || self.height == 0 {
            return Err(Error::InvalidScene("width and height must be positive".into()));
        }
        if self.frames == 0 {
            return Err(Error::InvalidScene("frames must be at least 1".into()));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(Error::InvalidScene(format!(
                "noise_sigma must be a finite non-negative number, got {}",
                self.noise_sigma
            )));
        }
        if !self.background_motion.iter().all(|v| v.is_finite()) {
            return Err(Error::InvalidScene("background motion is not finite".into()));
        }
        for (i, obj) in self.objects.iter().enumerate() {
            if !obj.shape.is_valid() || !obj.motion.iter().chain(&obj.trajectory).all(|v| v.is_finite()) {
                return Err(Error::InvalidScene(format!("object {i} is malformed")));
            }
            for frame in 0..self.frames {
                let (x0, y0, x1, y1) = obj.shape_at(frame).bounds();
                if x0 < 0.0 || y0 < 0.0 || x1 > self.width as f64 || y1 > self.height as f64 {
                    return Err(Error::ShapeOutOfBounds { object: i, frame });
                }
            }
        }
        Ok(())
    }

    /// Parses the flat `key=value` scene format (see [`SceneSpec::to_text`]).
    pub fn parse(text: &str) -> Result<Self> {
        let mut spec = SceneSpec {
            width: 0,
            height: 0,
            background_motion: [0.0, 0.0],
            objects: Vec::new(),
            noise_sigma: 0.0,
            frames: 1,
            seed: 0,
        };
        let mut objects: Vec<PartialObject> = Vec::new();
        for (lineno, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| Error::Parse(format!("line {}: expected key=value", lineno + 1)))?;
            let (key, value) = (key.trim(), value.trim());
            let bad = |what: &str| Error::Parse(format!("line {}: bad {what} {value:?}", lineno + 1));
            match key {
                "width" => spec.width = value.parse().map_err(|_| bad("width"))?,
                "height" => spec.height = value.parse().map_err(|_| bad("height"))?,
                "frames" => spec.frames = value.parse().map_err(|_| bad("frames"))?,
                "seed" => spec.seed = value.parse().map_err(|_| bad("seed"))?,
                "noise_sigma" => spec.noise_sigma = value.parse().map_err(|_| bad("noise_sigma"))?,
                "background_motion" => spec.background_motion = parse_pair(value)?,
                _ => {
                    let rest = key
                        .strip_prefix("object.")
                        .ok_or_else(|| Error::Parse(format!("unknown key {key:?}")))?;
                    let (idx, field) = rest
                        .split_once('.')
                        .ok_or_else(|| Error::Parse(format!("unknown key {key:?}")))?;
                    let idx: usize = idx.parse().map_err(|_| bad("object index"))?;
                    if idx >= 1024 {
                        return Err(bad("object index"));
                    }
                    if objects.len() <= idx {
                        objects.resize(idx + 1, (None, None, None));
                    }
                    match field {
                        "shape" => objects[idx].0 = Some(value.parse()?),
                        "motion" => objects[idx].1 = Some(parse_pair(value)?),
                        "trajectory" => objects[idx].2 = Some(parse_pair(value)?),
                        _ => return Err(Error::Parse(format!("unknown key {key:?}"))),
                    }
                }
            }
        }
        for (i, (shape, motion, trajectory)) in objects.into_iter().enumerate() {
            let shape = shape.ok_or_else(|| Error::Parse(format!("object {i} has no shape")))?;
            let motion = motion.unwrap_or([0.0, 0.0]);
            spec.objects.push(SceneObject {
                shape,
                motion,
                trajectory: trajectory.unwrap_or(motion),
            });
        }
        spec.validate()?;
        Ok(spec)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "width={}", self.width);
        let _ = writeln!(out, "height={}", self.height);
        let _ = writeln!(out, "frames={}", self.frames);
        let _ = writeln!(out, "seed={}", self.seed);
        let _ = writeln!(out, "noise_sigma={}", self.noise_sigma);
        let [bu, bv] = self.background_motion;
        let _ = writeln!(out, "background_motion={bu},{bv}");
        for (i, obj) in self.objects.iter().enumerate() {
            let _ = writeln!(out, "object.{i}.shape={}", obj.shape);
            let _ = writeln!(out, "object.{i}.motion={},{}", obj.motion[0], obj.motion[1]);
            let _ = writeln!(out, "object.{i}.trajectory={},{}", obj.trajectory[0], obj.trajectory[1]);
        }
        out
    }
}

fn parse_list(s: &str, n: usize) -> Result<Vec<f64>> {
    let v: Vec<f64> = s
        .split(',')
        .map(|t| t.trim().parse::<f64>())
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| Error::Parse(format!("bad number list {s:?}")))?;
    if v.len() != n {
        return Err(Error::Parse(format!("expected {n} numbers in {s:?}")));
    }
    Ok(v)
}

fn parse_pair(s: &str) -> Result<[f64; 2]> {
    let v = parse_list(s, 2)?;
    Ok([v[0], v[1]])
}

/// Renders every frame of the scene.
pub fn generate(spec: &SceneSpec) -> Result<LabeledSequence> {
    spec.validate()?;
    let (w, h) = (spec.width, spec.height);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let noise = if spec.noise_sigma > 0.0 {
        Some(Normal::new(0.0, spec.noise_sigma).expect("sigma validated"))
    } else {
        None
    };
    let mut flows = Vec::with_capacity(spec.frames);
    let mut masks = Vec::with_capacity(spec.frames);
    for frame in 0..spec.frames {
        let shapes: Vec<Shape> = spec.objects.iter().map(|o| o.shape_at(frame)).collect();
        let mut vectors = Vec::with_capacity(w * h);
        let mut bits = Vec::with_capacity(w * h);
        for y in 0..h {
            for x in 0..w {
                let owner = shapes.iter().rposition(|s| s.contains(x, y));
                let mut motion = match owner {
                    Some(i) => spec.objects[i].motion,
                    None => spec.background_motion,
                };
                if let Some(dist) = &noise {
                    motion[0] += dist.sample(&mut rng);
                    motion[1] += dist.sample(&mut rng);
                }
                vectors.push([motion[0] as f32, motion[1] as f32]);
                bits.push(owner.is_some());
            }
        }
        flows.push(FlowField::new(w, h, vectors)?);
        masks.push(Mask::new(w, h, bits)?);
    }
    Ok(LabeledSequence { flows, masks })
}

/// Knobs for [`random_scene`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RandomSceneConfig {
    pub width: usize,
    pub height: usize,
    pub frames: usize,
    pub noise_sigma: f64,
    /// Range of the object's larger extent, in pixels.
    pub size: (f64, f64),
    /// Range of both motion magnitudes, pixels/frame.
    pub speed: (f64, f64),
    /// Smallest angle between object and background motion, degrees.
    pub min_angle_deg: f64,
}

impl Default for RandomSceneConfig {
    fn default() -> Self {
        Self {
            width: 128,
            height: 128,
            frames: 20,
            noise_sigma: 0.1,
            size: (36.0, 56.0),
            speed: (1.0, 3.0),
            min_angle_deg: 45.0,
        }
    }
}

/// A moving background with one rigid rectangle or ellipse whose motion direction
/// differs by at least `min_angle_deg`. The object drifts along its own motion,
/// slowed down if needed so it stays inside the frame.
pub fn random_scene(seed: u64, cfg: &RandomSceneConfig) -> SceneSpec {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let polar = |angle: f64, speed: f64| [speed * angle.cos(), speed * angle.sin()];
    let bg_angle = rng.random_range(0.0..std::f64::consts::TAU);
    let bg = polar(bg_angle, rng.random_range(cfg.speed.0..=cfg.speed.1));
    let offset = rng.random_range(cfg.min_angle_deg..=180.0).to_radians();
    let sign = if rng.random::<bool>() { 1.0 } else { -1.0 };
    let motion = polar(bg_angle + sign * offset, rng.random_range(cfg.speed.0..=cfg.speed.1));

    let major = rng.random_range(cfg.size.0..=cfg.size.1);
    let minor = rng.random_range(0.7..=1.0) * major;
    let (sw, sh) = if rng.random::<bool>() {
        (major, minor)
    } else {
        (minor, major)
    };
    let ellipse = rng.random::<bool>();

    let span = cfg.frames.saturating_sub(1) as f64;
    let room_x = (cfg.width as f64 - sw - 2.0).max(0.0);
    let room_y = (cfg.height as f64 - sh - 2.0).max(0.0);
    let need_x = (motion[0] * span).abs();
    let need_y = (motion[1] * span).abs();
    let slow = [1.0, room_x / need_x.max(1e-12), room_y / need_y.max(1e-12)]
        .into_iter()
        .fold(f64::INFINITY, f64::min);
    let trajectory = [motion[0] * slow, motion[1] * slow];
    let drift = [trajectory[0] * span, trajectory[1] * span];
    let mut start = |room: f64, d: f64| {
        let lo = 1.0 + (-d).max(0.0);
        let hi = 1.0 + room - d.max(0.0);
        if hi > lo {
            rng.random_range(lo..hi)
        } else {
            lo
        }
    };
    let x0 = start(room_x, drift[0]);
    let y0 = start(room_y, drift[1]);
    let shape = if ellipse {
        Shape::Ellipse {
            cx: x0 + sw / 2.0,
            cy: y0 + sh / 2.0,
            rx: sw / 2.0,
            ry: sh / 2.0,
        }
    } else {
        Shape::Rect {
            x: x0,
            y: y0,
            w: sw,
            h: sh,
        }
    };
    SceneSpec {
        width: cfg.width,
        height: cfg.height,
        background_motion: bg,
        objects: vec![SceneObject {
            shape,
            motion,
            trajectory,
        }],
        noise_sigma: cfg.noise_sigma,
        frames: cfg.frames,
        seed,
    }
}

/// File stem used for frame `index` by [`write_sequence`].
pub fn frame_stem(index: usize) -> String {
    format!("{index:05}")
}

/// Writes `flows/NNNNN.flo` and `masks/NNNNN.pgm` under `dir`.
pub fn write_sequence(seq: &LabeledSequence, dir: &Path) -> Result<()> {
    let flow_dir = dir.join("flows");
    let mask_dir = dir.join("masks");
    std::fs::create_dir_all(&flow_dir)?;
    std::fs::create_dir_all(&mask_dir)?;
    for (i, (flow, mask)) in seq.flows.iter().zip(&seq.masks).enumerate() {
        let stem = frame_stem(i);
        let file = std::fs::File::create(flow_dir.join(format!("{stem}.flo")))?;
        write_flo(flow, std::io::BufWriter::new(file))?;
        mask.save_pgm(&mask_dir.join(format!("{stem}.pgm")))?;
    }
    Ok(())
}
