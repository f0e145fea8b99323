//! Procedural depth scenes of a stylised hand with exact labels.
//!
//! A palm ellipse with five capsule fingers, a disk at each fingertip, an
//! optional occluding disk held in front of the hand, a far background plane
//! and Gaussian sensor noise. Labels are rasterised before noise.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_distr::{Distribution, Normal};

use crate::preprocess::{BBox, RgbdFrame};
use crate::{pgm, seeding, Error, Result};

pub const CLASSES: usize = 7;
pub const FINGERS: [&str; 5] = ["thumb", "index", "middle", "ring", "pinky"];

/// Per-pixel labels for both tasks plus the fingertip centres.
///
/// `components`: 0 background, 1 palm, 2..=6 fingers thumb to pinky.
/// `fingertips`: 0 background, 1 hand, 2..=6 fingertips thumb to pinky.
#[derive(Debug, Clone, PartialEq)]
pub struct LabelPair {
    pub width: usize,
    pub height: usize,
    pub components: Vec<u8>,
    pub fingertips: Vec<u8>,
    pub tips: [Option<[f32; 2]>; 5],
}

impl LabelPair {
    /// Checks that tip pixels lie on the hand and every present tip point
    /// sits on a pixel of its own class.
    pub fn check(&self) -> std::result::Result<(), String> {
        for (i, (&c, &t)) in self.components.iter().zip(&self.fingertips).enumerate() {
            if t >= 2 && c == 0 {
                return Err(format!("fingertip pixel {i} lies on background"));
            }
            if (t == 0) != (c == 0) {
                return Err(format!("pixel {i}: hand masks disagree"));
            }
        }
        for (f, tip) in self.tips.iter().enumerate() {
            if let Some([x, y]) = *tip {
                let inside = x >= 0.0 && y >= 0.0 && (x as usize) < self.width && (y as usize) < self.height;
                if !inside || self.fingertips[y as usize * self.width + x as usize] != f as u8 + 2 {
                    return Err(format!("{} tip ({x},{y}) is off its class", FINGERS[f]));
                }
            }
        }
        Ok(())
    }

    /// Tight box around every hand pixel, grown by `margin`.
    pub fn hand_bbox(&self, margin: usize) -> Option<BBox> {
        let mut b: Option<BBox> = None;
        for (i, _) in self.components.iter().enumerate().filter(|(_, &c)| c != 0) {
            let (x, y) = (i % self.width, i / self.width);
            b = Some(match b {
                None => BBox { x0: x, y0: y, x1: x, y1: y },
                Some(b) => BBox {
                    x0: b.x0.min(x),
                    y0: b.y0.min(y),
                    x1: b.x1.max(x),
                    y1: b.y1.max(y),
                },
            });
        }
        b.map(|b| b.expand(margin, self.width, self.height))
    }

    pub fn class_count(map: &[u8], class: u8) -> usize {
        map.iter().filter(|&&c| c == class).count()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Finger {
    /// Direction relative to the palm's axis, radians; positive turns clockwise.
    pub angle: f32,
    pub length: f32,
    /// Capsule radius.
    pub width: f32,
    /// Depth change from base to tip, millimetres.
    pub depth_offset: f32,
}

/// A disk held in front of the hand.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Occluder {
    pub center: [f32; 2],
    pub radius: f32,
    /// Relative to the hand's base depth; negative is nearer the camera.
    pub depth_offset: f32,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Background {
    Zero,
    /// `depth + slope · (x, y)` in millimetres.
    Plane { depth: f32, slope: [f32; 2] },
}

#[derive(Debug, Clone, PartialEq)]
pub struct HandPose {
    pub center: [f32; 2],
    /// Rotation of the palm axis from image-up, radians, clockwise.
    pub orientation: f32,
    /// Half-axes across and along the palm.
    pub palm_radii: [f32; 2],
    pub fingers: [Finger; 5],
    /// Tip disk radius; `None` uses each finger's width.
    pub tip_radius: Option<f32>,
    pub base_depth: f32,
    pub noise_sigma: f32,
    pub occluder: Option<Occluder>,
    pub background: Background,
}

impl HandPose {
    /// An upright hand centred in the frame, without noise or occluder.
    pub fn canonical(width: usize, height: usize) -> Self {
        let finger = |deg: f32, length: f32, width: f32| Finger {
            angle: deg.to_radians(),
            length,
            width,
            depth_offset: -10.0,
        };
        HandPose {
            center: [(width / 2) as f32, (height / 2 + 10) as f32],
            orientation: 0.0,
            palm_radii: [12.0, 14.0],
            fingers: [
                finger(-80.0, 16.0, 4.0),
                finger(-36.0, 22.0, 3.0),
                finger(-10.0, 24.0, 3.0),
                finger(16.0, 22.0, 3.0),
                finger(42.0, 17.0, 3.0),
            ],
            tip_radius: None,
            base_depth: 700.0,
            noise_sigma: 0.0,
            occluder: None,
            background: Background::Plane {
                depth: 1500.0,
                slope: [0.0, 0.0],
            },
        }
    }

    /// A random pose that fits a `width`×`height` frame.
    pub fn random<R: Rng + ?Sized>(rng: &mut R, width: usize, height: usize, cfg: &SynthConfig) -> Self {
        let mut pose = HandPose::canonical(width, height);
        let s: f32 = rng.random_range(0.85..=1.15);
        let mirror = rng.random_bool(0.5);
        pose.orientation = rng.random_range(-30f32..=30.0).to_radians();
        pose.palm_radii = [pose.palm_radii[0] * s * rng.random_range(0.9..=1.1), pose.palm_radii[1] * s * rng.random_range(0.9..=1.1)];
        for f in &mut pose.fingers {
            f.angle += rng.random_range(-3f32..=3.0).to_radians();
            if mirror {
                f.angle = -f.angle;
            }
            f.length *= s * rng.random_range(0.85..=1.05);
            f.width = (f.width * s * rng.random_range(0.9..=1.1)).max(1.5);
            f.depth_offset = rng.random_range(-20.0..=20.0);
        }
        let reach = pose.reach();
        let span = |n: usize| (reach.min(n as f32 / 2.0 - 1.0), (n as f32 - reach).max(n as f32 / 2.0 + 1.0));
        let (xs, ys) = (span(width), span(height));
        pose.center = [rng.random_range(xs.0..=xs.1), rng.random_range(ys.0..=ys.1)];
        pose.base_depth = rng.random_range(550.0..=900.0);
        pose.noise_sigma = cfg.noise_sigma;
        pose.background = tilted_plane(rng, &pose, width, height);
        if rng.random_bool(cfg.occlusion_probability) {
            let f = rng.random_range(0..5);
            let jitter = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
            pose.occluder = Some(pose.occluder_over(f, jitter));
        }
        pose
    }

    /// Distance from the centre to the farthest hand pixel, plus a margin.
    pub fn reach(&self) -> f32 {
        let palm = self.palm_radii[0].max(self.palm_radii[1]);
        let finger = self.fingers.iter().map(|f| f.length + f.width.max(self.tip_radius.unwrap_or(0.0))).fold(0.0, f32::max);
        palm + finger + 2.0
    }

    /// An occluder that fully hides the tip disk of finger `f`.
    pub fn occluder_over(&self, f: usize, jitter: [f32; 2]) -> Occluder {
        let tip = self.finger_segment(f).1;
        let r = self.tip_radius.unwrap_or(self.fingers[f].width);
        Occluder {
            center: [tip[0] + jitter[0], tip[1] + jitter[1]],
            radius: r + 1.0 + jitter[0].hypot(jitter[1]) + 1.5,
            depth_offset: -400.0,
        }
    }

    fn to_world(&self, v: [f32; 2]) -> [f32; 2] {
        let (sin, cos) = self.orientation.sin_cos();
        [v[0] * cos - v[1] * sin, v[0] * sin + v[1] * cos]
    }

    /// Base and tip of finger `f` in image coordinates.
    pub fn finger_segment(&self, f: usize) -> ([f32; 2], [f32; 2]) {
        let fin = &self.fingers[f];
        let u = [fin.angle.sin(), -fin.angle.cos()];
        let [a, b] = self.palm_radii;
        let r = 1.0 / ((u[0] / a).powi(2) + (u[1] / b).powi(2)).sqrt();
        let d = self.to_world(u);
        let base = [self.center[0] + r * d[0], self.center[1] + r * d[1]];
        (base, [base[0] + fin.length * d[0], base[1] + fin.length * d[1]])
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidArgument { op: "HandPose", msg });
        if !(self.palm_radii[0] > 0.0 && self.palm_radii[1] > 0.0) {
            return bad(format!("palm radii {:?} must be positive", self.palm_radii));
        }
        for (f, fin) in self.fingers.iter().enumerate() {
            if !(fin.length > 0.0 && fin.width > 0.0) {
                return bad(format!("{} finger needs positive length and width", FINGERS[f]));
            }
        }
        if self.tip_radius.is_some_and(|r| r <= 0.0) || !(self.base_depth > 0.0) || self.noise_sigma < 0.0 {
            return bad("tip radius, base depth and noise must be positive".into());
        }
        if self.occluder.is_some_and(|o| o.radius <= 0.0) {
            return bad("occluder radius must be positive".into());
        }
        Ok(())
    }
}

/// A plane tilted 1.5 to 3.5 mm/px in a random direction, 600 to 1000 mm
/// behind the hand at its centre, raised if needed so no pixel comes within
/// 400 mm of the hand.
fn tilted_plane<R: Rng + ?Sized>(rng: &mut R, pose: &HandPose, width: usize, height: usize) -> Background {
    let magnitude: f32 = rng.random_range(1.5..=3.5);
    let dir: f32 = rng.random_range(0.0..std::f32::consts::TAU);
    let slope = [magnitude * dir.cos(), magnitude * dir.sin()];
    let at_centre = pose.base_depth + rng.random_range(600.0..=1000.0);
    let mut depth = at_centre - slope[0] * pose.center[0] - slope[1] * pose.center[1];
    let corners = [[0.0, 0.0], [width as f32 - 1.0, 0.0], [0.0, height as f32 - 1.0], [width as f32 - 1.0, height as f32 - 1.0]];
    let lowest = corners.iter().map(|c| depth + slope[0] * c[0] + slope[1] * c[1]).fold(f32::INFINITY, f32::min);
    depth += (pose.base_depth + 400.0 - lowest).max(0.0);
    Background::Plane { depth, slope }
}

fn segment_param(p: [f32; 2], a: [f32; 2], b: [f32; 2]) -> (f32, f32) {
    let (dx, dy) = (b[0] - a[0], b[1] - a[1]);
    let t = (((p[0] - a[0]) * dx + (p[1] - a[1]) * dy) / (dx * dx + dy * dy)).clamp(0.0, 1.0);
    let dist = (p[0] - a[0] - t * dx).hypot(p[1] - a[1] - t * dy);
    (t, dist)
}

/// Renders one hand. Deterministic in `(pose, size, seed)`.
pub fn render(pose: &HandPose, width: usize, height: usize, seed: u64) -> Result<(RgbdFrame, LabelPair)> {
    render_hands(std::slice::from_ref(pose), width, height, seed)
}

/// Renders several hands over the first pose's background, with its noise
/// level. Later hands are drawn over earlier ones.
pub fn render_hands(poses: &[HandPose], width: usize, height: usize, seed: u64) -> Result<(RgbdFrame, LabelPair)> {
    if width == 0 || height == 0 || poses.is_empty() {
        return Err(Error::InvalidArgument {
            op: "render",
            msg: "need at least one pose and a non-empty frame".into(),
        });
    }
    poses.iter().try_for_each(HandPose::validate)?;
    let n = width * height;
    let mut depth = vec![0f32; n];
    if let Background::Plane { depth: d0, slope } = poses[0].background {
        for (i, d) in depth.iter_mut().enumerate() {
            *d = d0 + slope[0] * (i % width) as f32 + slope[1] * (i / width) as f32;
        }
    }
    let mut labels = LabelPair {
        width,
        height,
        components: vec![0; n],
        fingertips: vec![0; n],
        tips: [None; 5],
    };
    for pose in poses {
        draw_hand(pose, &mut depth, &mut labels);
    }
    let sigma = poses[0].noise_sigma;
    let mut rng = seeding::stream(seed, &[0x6e6f697365]);
    let noise = Normal::new(0.0f32, sigma.max(f32::MIN_POSITIVE)).expect("finite sigma");
    let depth = depth
        .iter()
        .map(|&d| {
            if d <= 0.0 {
                return 0;
            }
            let v = if sigma > 0.0 { d + noise.sample(&mut rng) } else { d };
            v.round().clamp(1.0, 65535.0) as u16
        })
        .collect();
    Ok((RgbdFrame::new(width, height, depth)?, labels))
}

fn draw_hand(pose: &HandPose, depth: &mut [f32], labels: &mut LabelPair) {
    let (w, h) = (labels.width, labels.height);
    let reach = pose.reach();
    let x_range = (pose.center[0] - reach).floor().max(0.0) as usize..=((pose.center[0] + reach).ceil().max(0.0) as usize).min(w - 1);
    let y_range = (pose.center[1] - reach).floor().max(0.0) as usize..=((pose.center[1] + reach).ceil().max(0.0) as usize).min(h - 1);
    let segments: Vec<_> = (0..5).map(|f| pose.finger_segment(f)).collect();
    let tip_px: Vec<[f32; 2]> = segments.iter().map(|s| [s.1[0].round(), s.1[1].round()]).collect();
    let tip_r: Vec<f32> = pose.fingers.iter().map(|f| pose.tip_radius.unwrap_or(f.width)).collect();
    let (sin, cos) = pose.orientation.sin_cos();
    for y in y_range.clone() {
        for x in x_range.clone() {
            let p = [x as f32, y as f32];
            let (dx, dy) = (p[0] - pose.center[0], p[1] - pose.center[1]);
            let (lx, ly) = (dx * cos + dy * sin, -dx * sin + dy * cos);
            let rho = (lx / pose.palm_radii[0]).powi(2) + (ly / pose.palm_radii[1]).powi(2);
            let mut hit: Option<(u8, u8, f32)> = None;
            if rho <= 1.0 {
                hit = Some((1, 1, pose.base_depth + 12.0 * rho));
            }
            for (f, (a, b)) in segments.iter().enumerate() {
                let finger_depth = |t: f32| pose.base_depth + pose.fingers[f].depth_offset * t;
                let (t, dist) = segment_param(p, *a, *b);
                if rho > 1.0 && dist <= pose.fingers[f].width {
                    hit = Some((f as u8 + 2, 1, finger_depth(t)));
                }
                let tip = tip_px[f];
                if (p[0] - tip[0]).powi(2) + (p[1] - tip[1]).powi(2) <= tip_r[f] * tip_r[f] {
                    hit = Some((f as u8 + 2, f as u8 + 2, finger_depth(t)));
                }
            }
            if let Some((c, t, d)) = hit {
                let i = y * w + x;
                labels.components[i] = c;
                labels.fingertips[i] = t;
                depth[i] = d;
            }
        }
    }
    if let Some(o) = pose.occluder {
        let reach = o.radius.ceil() as isize + 1;
        let (cx, cy) = (o.center[0].round() as isize, o.center[1].round() as isize);
        for y in (cy - reach).max(0)..=(cy + reach).min(h as isize - 1) {
            for x in (cx - reach).max(0)..=(cx + reach).min(w as isize - 1) {
                if (x as f32 - o.center[0]).powi(2) + (y as f32 - o.center[1]).powi(2) <= o.radius * o.radius {
                    let i = y as usize * w + x as usize;
                    labels.components[i] = 0;
                    labels.fingertips[i] = 0;
                    depth[i] = pose.base_depth + o.depth_offset;
                }
            }
        }
    }
    for (f, tip) in tip_px.iter().enumerate() {
        let class = f as u8 + 2;
        let inside = tip[0] >= 0.0 && tip[1] >= 0.0 && (tip[0] as usize) < w && (tip[1] as usize) < h;
        let visible = inside && labels.fingertips[tip[1] as usize * w + tip[0] as usize] == class;
        labels.tips[f] = visible.then_some(*tip);
        if !visible {
            labels.fingertips.iter_mut().filter(|c| **c == class).for_each(|c| *c = 1);
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthConfig {
    pub width: usize,
    pub height: usize,
    pub noise_sigma: f32,
    pub occlusion_probability: f64,
    /// Train and test shares of the split.
    pub split: (u32, u32),
    /// Margin added around the hand in the written detections.
    pub bbox_margin: usize,
}

impl Default for SynthConfig {
    fn default() -> Self {
        SynthConfig {
            width: 160,
            height: 120,
            noise_sigma: 2.0,
            occlusion_probability: 0.25,
            split: (7, 3),
            bbox_margin: 4,
        }
    }
}

/// Scene `index` of the dataset keyed by `seed`.
pub fn scene(cfg: &SynthConfig, seed: u64, index: u64) -> Result<(RgbdFrame, LabelPair)> {
    let mut rng = seeding::stream(seed, &[0x706f7365, index]);
    let pose = HandPose::random(&mut rng, cfg.width, cfg.height, cfg);
    render(&pose, cfg.width, cfg.height, seeding::derive(seed, &[0x72656e646572, index]))
}

/// Scene `index` of a set in which one random finger's tip is always hidden
/// behind an occluder. Returns that finger too.
pub fn occlusion_scene(cfg: &SynthConfig, seed: u64, index: u64) -> Result<(RgbdFrame, LabelPair, usize)> {
    let mut rng = seeding::stream(seed, &[0x6f63636c, index]);
    let plain = SynthConfig {
        occlusion_probability: 0.0,
        ..cfg.clone()
    };
    let mut pose = HandPose::random(&mut rng, cfg.width, cfg.height, &plain);
    let f = rng.random_range(0..5);
    let jitter = [rng.random_range(-1.0..=1.0), rng.random_range(-1.0..=1.0)];
    pose.occluder = Some(pose.occluder_over(f, jitter));
    let (frame, labels) = render(&pose, cfg.width, cfg.height, seeding::derive(seed, &[0x72656e646572, index]))?;
    Ok((frame, labels, f))
}

/// Indices assigned to the training side: exactly `round(count · a / (a + b))`
/// of them, chosen by ranking a per-index hash.
pub fn train_indices(count: usize, seed: u64, split: (u32, u32)) -> Vec<bool> {
    let total = (split.0 + split.1).max(1) as f64;
    let n_train = ((count as f64 * split.0 as f64 / total).round() as usize).min(count);
    let mut order: Vec<usize> = (0..count).collect();
    order.sort_by_key(|&i| (seeding::derive(seed, &[0x73706c6974, i as u64]), i));
    let mut is_train = vec![false; count];
    order[..n_train].iter().for_each(|&i| is_train[i] = true);
    is_train
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn manifest_name(self) -> &'static str {
        match self {
            Split::Train => "manifest_train.txt",
            Split::Test => "manifest_test.txt",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ManifestRow {
    pub id: String,
    pub depth: PathBuf,
    pub components: PathBuf,
    pub fingertips: PathBuf,
    pub tips: [Option<[f32; 2]>; 5],
}

impl ManifestRow {
    pub fn to_line(&self) -> String {
        let mut s = format!("{} {} {} {}", self.id, self.depth.display(), self.components.display(), self.fingertips.display());
        for tip in &self.tips {
            let [x, y] = tip.unwrap_or([-1.0, -1.0]);
            write!(s, " {x} {y}").expect("writing to a String");
        }
        s
    }

    pub fn parse(line: &str) -> std::result::Result<Self, String> {
        let f: Vec<&str> = line.split_whitespace().collect();
        if f.len() != 14 {
            return Err(format!("expected 14 fields, found {}", f.len()));
        }
        let mut tips = [None; 5];
        for (k, tip) in tips.iter_mut().enumerate() {
            let coord = |s: &str| s.parse::<f32>().map_err(|_| format!("bad tip coordinate {s:?}"));
            let (x, y) = (coord(f[4 + 2 * k])?, coord(f[5 + 2 * k])?);
            *tip = match (x, y) {
                (-1.0, -1.0) => None,
                (x, y) if x >= 0.0 && y >= 0.0 => Some([x, y]),
                _ => return Err(format!("tip ({x},{y}) is neither absent nor a pixel")),
            };
        }
        Ok(ManifestRow {
            id: f[0].to_string(),
            depth: f[1].into(),
            components: f[2].into(),
            fingertips: f[3].into(),
            tips,
        })
    }
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestRow>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| {
            ManifestRow::parse(l).map_err(|msg| Error::Parse {
                path: path.to_path_buf(),
                line: i + 1,
                msg,
            })
        })
        .collect()
}

/// Loads the frame and labels of one manifest row; paths are relative to `dir`.
pub fn load_row(dir: &Path, row: &ManifestRow) -> Result<(RgbdFrame, LabelPair)> {
    let (w, h, depth) = pgm::read16(&dir.join(&row.depth))?;
    let (cw, ch, components) = pgm::read8(&dir.join(&row.components))?;
    let (tw, th, fingertips) = pgm::read8(&dir.join(&row.fingertips))?;
    if (cw, ch) != (w, h) || (tw, th) != (w, h) {
        return Err(Error::Format {
            path: dir.join(&row.components),
            msg: format!("label maps do not match the {w}x{h} depth image"),
        });
    }
    if let Some(c) = components.iter().chain(&fingertips).find(|&&c| c as usize >= CLASSES) {
        return Err(Error::Format {
            path: dir.join(&row.components),
            msg: format!("label {c} is not a class"),
        });
    }
    Ok((
        RgbdFrame::new(w, h, depth)?,
        LabelPair {
            width: w,
            height: h,
            components,
            fingertips,
            tips: row.tips,
        },
    ))
}

pub const DETECTIONS_FILE: &str = "detections.txt";

/// Writes `count` scenes under `dir`: PGM images in `depth/`, `components/`
/// and `fingertips/`, one manifest per split, and a detections file holding
/// each hand's true box. Returns the train and test rows.
pub fn make_dataset(dir: &Path, count: usize, seed: u64, cfg: &SynthConfig) -> Result<(Vec<ManifestRow>, Vec<ManifestRow>)> {
    if count == 0 {
        return Err(Error::InvalidArgument {
            op: "make_dataset",
            msg: "count must be at least 1".into(),
        });
    }
    for sub in ["depth", "components", "fingertips"] {
        let p = dir.join(sub);
        fs::create_dir_all(&p).map_err(|e| Error::io(format!("creating {}", p.display()), e))?;
    }
    let is_train = train_indices(count, seed, cfg.split);
    let (mut train, mut test) = (Vec::new(), Vec::new());
    let mut detections = std::collections::BTreeMap::new();
    for i in 0..count {
        let (frame, labels) = scene(cfg, seed, i as u64)?;
        let id = format!("{i:06}");
        let row = ManifestRow {
            depth: format!("depth/{id}.pgm").into(),
            components: format!("components/{id}.pgm").into(),
            fingertips: format!("fingertips/{id}.pgm").into(),
            tips: labels.tips,
            id: id.clone(),
        };
        pgm::write16(&dir.join(&row.depth), frame.width, frame.height, &frame.depth)?;
        pgm::write8(&dir.join(&row.components), frame.width, frame.height, &labels.components)?;
        pgm::write8(&dir.join(&row.fingertips), frame.width, frame.height, &labels.fingertips)?;
        if let Some(b) = labels.hand_bbox(cfg.bbox_margin) {
            detections.insert(
                id,
                crate::detect::DetectionRecord {
                    boxes: vec![(b, 1.0)],
                },
            );
        }
        if is_train[i] { &mut train } else { &mut test }.push(row);
    }
    for (split, rows) in [(Split::Train, &train), (Split::Test, &test)] {
        let text: String = rows.iter().map(|r| r.to_line() + "\n").collect();
        crate::checkpoint::write_atomic(&dir.join(split.manifest_name()), text.as_bytes())?;
    }
    crate::detect::save_detections(&dir.join(DETECTIONS_FILE), &detections)?;
    Ok((train, test))
}
