//! Depth thresholding, crop and resize to the network input, and augmentation.

use rand::Rng;

use crate::seeding;
use crate::synth::LabelPair;
use crate::tensor::{Shape4, Tensor4};
use crate::{Error, Result};

pub const DEFAULT_INPUT_SIZE: usize = 96;

/// A registered depth (millimetres, 0 = no reading) and optional colour frame.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RgbdFrame {
    pub width: usize,
    pub height: usize,
    pub depth: Vec<u16>,
    pub color: Option<Vec<[u8; 3]>>,
}

impl RgbdFrame {
    pub fn new(width: usize, height: usize, depth: Vec<u16>) -> Result<Self> {
        if width == 0 || height == 0 || depth.len() != width * height {
            return Err(Error::InvalidArgument {
                op: "RgbdFrame::new",
                msg: format!("{} depth samples for a {width}x{height} frame", depth.len()),
            });
        }
        Ok(RgbdFrame {
            width,
            height,
            depth,
            color: None,
        })
    }

    pub fn with_color(mut self, color: Vec<[u8; 3]>) -> Result<Self> {
        if color.len() != self.depth.len() {
            return Err(Error::InvalidArgument {
                op: "RgbdFrame::with_color",
                msg: format!("{} colour pixels for {} depth pixels", color.len(), self.depth.len()),
            });
        }
        self.color = Some(color);
        Ok(self)
    }

    pub fn at(&self, x: usize, y: usize) -> u16 {
        self.depth[y * self.width + x]
    }

    pub fn full_box(&self) -> BBox {
        BBox {
            x0: 0,
            y0: 0,
            x1: self.width - 1,
            y1: self.height - 1,
        }
    }
}

/// Pixel box with inclusive corners.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct BBox {
    pub x0: usize,
    pub y0: usize,
    pub x1: usize,
    pub y1: usize,
}

impl BBox {
    pub fn new(x0: usize, y0: usize, x1: usize, y1: usize) -> Result<Self> {
        if x1 < x0 || y1 < y0 {
            return Err(Error::InvalidArgument {
                op: "BBox::new",
                msg: format!("corners ({x0},{y0})-({x1},{y1}) are reversed"),
            });
        }
        Ok(BBox { x0, y0, x1, y1 })
    }

    pub fn check(&self, width: usize, height: usize) -> Result<()> {
        if self.x1 < self.x0 || self.y1 < self.y0 || self.x1 >= width || self.y1 >= height {
            return Err(Error::InvalidArgument {
                op: "BBox::check",
                msg: format!("box ({},{})-({},{}) does not fit a {width}x{height} frame", self.x0, self.y0, self.x1, self.y1),
            });
        }
        Ok(())
    }

    pub fn width(&self) -> usize {
        self.x1 - self.x0 + 1
    }

    pub fn height(&self) -> usize {
        self.y1 - self.y0 + 1
    }

    pub fn area(&self) -> usize {
        self.width() * self.height()
    }

    pub fn contains(&self, x: usize, y: usize) -> bool {
        (self.x0..=self.x1).contains(&x) && (self.y0..=self.y1).contains(&y)
    }

    /// Grown by `margin` on every side, clamped to the frame.
    pub fn expand(&self, margin: usize, width: usize, height: usize) -> BBox {
        BBox {
            x0: self.x0.saturating_sub(margin),
            y0: self.y0.saturating_sub(margin),
            x1: (self.x1 + margin).min(width - 1),
            y1: (self.y1 + margin).min(height - 1),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ThresholdParams {
    /// Half-width of the accepted depth band around the mode.
    pub t: u16,
    pub mode_bin_width: u16,
}

impl Default for ThresholdParams {
    fn default() -> Self {
        ThresholdParams { t: 300, mode_bin_width: 1 }
    }
}

impl ThresholdParams {
    pub fn validate(&self) -> Result<()> {
        if self.t == 0 || self.mode_bin_width == 0 {
            return Err(Error::InvalidArgument {
                op: "ThresholdParams",
                msg: format!("t ({}) and mode_bin_width ({}) must be positive", self.t, self.mode_bin_width),
            });
        }
        Ok(())
    }
}

/// Most frequent depth bin among the valid pixels of `bbox`. Ties go to the
/// nearer bin. Returns the bin centre, rounded down.
pub fn depth_mode(frame: &RgbdFrame, bbox: &BBox, params: &ThresholdParams) -> Result<u16> {
    params.validate()?;
    bbox.check(frame.width, frame.height)?;
    let bin = params.mode_bin_width as usize;
    let mut hist = vec![0u32; 65536 / bin + 1];
    for y in bbox.y0..=bbox.y1 {
        for &d in &frame.depth[y * frame.width + bbox.x0..=y * frame.width + bbox.x1] {
            if d != 0 {
                hist[d as usize / bin] += 1;
            }
        }
    }
    let (best, count) = hist.iter().enumerate().fold((0, 0), |acc, (i, &c)| if c > acc.1 { (i, c) } else { acc });
    if count == 0 {
        return Err(Error::EmptyRegion);
    }
    Ok((best * bin + (bin - 1) / 2).min(u16::MAX as usize) as u16)
}

/// The bbox crop with every pixel outside the depth band zeroed.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DepthCrop {
    pub bbox: BBox,
    pub mode: u16,
    pub depth: Vec<u16>,
}

impl DepthCrop {
    pub fn width(&self) -> usize {
        self.bbox.width()
    }

    pub fn height(&self) -> usize {
        self.bbox.height()
    }
}

pub fn threshold_hand(frame: &RgbdFrame, bbox: &BBox, params: &ThresholdParams) -> Result<DepthCrop> {
    let mode = depth_mode(frame, bbox, params)?;
    let mut depth = Vec::with_capacity(bbox.area());
    for y in bbox.y0..=bbox.y1 {
        for x in bbox.x0..=bbox.x1 {
            let d = frame.at(x, y);
            let keep = (d as i32 - mode as i32).abs() < params.t as i32;
            depth.push(if keep { d } else { 0 });
        }
    }
    Ok(DepthCrop { bbox: *bbox, mode, depth })
}

/// Aspect-preserving placement of a `src_w`×`src_h` image, centred in a
/// zero `size`×`size` canvas.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Placement {
    pub src_w: usize,
    pub src_h: usize,
    pub size: usize,
    pub dst_w: usize,
    pub dst_h: usize,
    pub off_x: usize,
    pub off_y: usize,
}

impl Placement {
    pub fn new(src_w: usize, src_h: usize, size: usize) -> Self {
        let scale = size as f64 / src_w.max(src_h) as f64;
        let dst_w = ((src_w as f64 * scale).round() as usize).clamp(1, size);
        let dst_h = ((src_h as f64 * scale).round() as usize).clamp(1, size);
        Placement {
            src_w,
            src_h,
            size,
            dst_w,
            dst_h,
            off_x: (size - dst_w) / 2,
            off_y: (size - dst_h) / 2,
        }
    }

    /// Nearest-neighbour resample into the canvas; uncovered pixels get `T::default()`.
    pub fn resample<T: Copy + Default>(&self, src: &[T]) -> Vec<T> {
        assert_eq!(src.len(), self.src_w * self.src_h);
        let mut out = vec![T::default(); self.size * self.size];
        let sx: Vec<usize> = (0..self.dst_w).map(|u| ((u * 2 + 1) * self.src_w / (2 * self.dst_w)).min(self.src_w - 1)).collect();
        for v in 0..self.dst_h {
            let sy = ((v * 2 + 1) * self.src_h / (2 * self.dst_h)).min(self.src_h - 1);
            let row = &mut out[(v + self.off_y) * self.size + self.off_x..][..self.dst_w];
            for (d, &x) in row.iter_mut().zip(&sx) {
                *d = src[sy * self.src_w + x];
            }
        }
        out
    }

    /// Inverse of `resample`: each source pixel takes the canvas pixel its
    /// centre falls in.
    pub fn unresample<T: Copy>(&self, canvas: &[T]) -> Vec<T> {
        assert_eq!(canvas.len(), self.size * self.size);
        let cx: Vec<usize> = (0..self.src_w).map(|x| ((x * 2 + 1) * self.dst_w / (2 * self.src_w)).min(self.dst_w - 1) + self.off_x).collect();
        let mut out = Vec::with_capacity(self.src_w * self.src_h);
        for y in 0..self.src_h {
            let cy = ((y * 2 + 1) * self.dst_h / (2 * self.src_h)).min(self.dst_h - 1) + self.off_y;
            out.extend(cx.iter().map(|&x| canvas[cy * self.size + x]));
        }
        out
    }

    /// Source pixel coordinates to canvas coordinates.
    pub fn map_point(&self, p: [f32; 2]) -> [f32; 2] {
        let fx = self.dst_w as f64 / self.src_w as f64;
        let fy = self.dst_h as f64 / self.src_h as f64;
        [
            ((p[0] as f64 + 0.5) * fx - 0.5 + self.off_x as f64) as f32,
            ((p[1] as f64 + 0.5) * fy - 0.5 + self.off_y as f64) as f32,
        ]
    }

    /// Canvas coordinates back to source pixel coordinates.
    pub fn unmap_point(&self, p: [f32; 2]) -> [f32; 2] {
        let fx = self.dst_w as f64 / self.src_w as f64;
        let fy = self.dst_h as f64 / self.src_h as f64;
        [
            ((p[0] as f64 - self.off_x as f64 + 0.5) / fx - 0.5) as f32,
            ((p[1] as f64 - self.off_y as f64 + 0.5) / fy - 0.5) as f32,
        ]
    }
}

/// Resizes the crop into a `size`×`size` canvas and rescales valid depths
/// into (0, 1) as `(d - lo + 1) / (hi - lo + 2)`, so they stay distinct from
/// the invalid 0. A crop of constant depth maps to 0.5.
pub fn to_network_input(crop: &DepthCrop, size: usize) -> Result<(Tensor4, Placement)> {
    if size == 0 {
        return Err(Error::InvalidArgument {
            op: "to_network_input",
            msg: "input size must be positive".into(),
        });
    }
    let placement = Placement::new(crop.width(), crop.height(), size);
    let canvas = placement.resample(&crop.depth);
    let valid = canvas.iter().filter(|&&d| d != 0);
    let (lo, hi) = valid.fold((u16::MAX, 0u16), |(lo, hi), &d| (lo.min(d), hi.max(d)));
    if hi == 0 {
        return Err(Error::EmptyRegion);
    }
    let span = (hi - lo) as f64 + 2.0;
    let data = canvas
        .iter()
        .map(|&d| if d == 0 { 0.0 } else { ((d - lo) as f64 + 1.0) / span } as f32)
        .collect();
    Ok((Tensor4::from_vec(Shape4::new(1, 1, size, size), data)?, placement))
}

/// A network-resolution sample: normalised depth, both label maps and the
/// fingertip points (integer pixel coordinates).
#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub size: usize,
    pub input: Vec<f32>,
    pub components: Vec<u8>,
    pub fingertips: Vec<u8>,
    pub tips: [Option<[f32; 2]>; 5],
}

impl Sample {
    pub fn input_tensor(&self) -> Tensor4 {
        Tensor4::from_vec(Shape4::new(1, 1, self.size, self.size), self.input.clone()).expect("sample input matches its size")
    }
}

/// Thresholds, crops and resizes a labelled frame. Labels are cleared wherever
/// the thresholded depth is 0, and a tip whose class vanishes becomes absent.
pub fn prepare_sample(frame: &RgbdFrame, labels: &LabelPair, bbox: &BBox, params: &ThresholdParams, size: usize) -> Result<Sample> {
    if labels.width != frame.width || labels.height != frame.height {
        return Err(Error::InvalidArgument {
            op: "prepare_sample",
            msg: format!("labels are {}x{}, frame is {}x{}", labels.width, labels.height, frame.width, frame.height),
        });
    }
    let crop = threshold_hand(frame, bbox, params)?;
    let (input, placement) = to_network_input(&crop, size)?;
    let cut = |map: &[u8]| -> Vec<u8> {
        let mut out = Vec::with_capacity(bbox.area());
        for y in bbox.y0..=bbox.y1 {
            for x in bbox.x0..=bbox.x1 {
                let valid = crop.depth[(y - bbox.y0) * bbox.width() + x - bbox.x0] != 0;
                out.push(if valid { map[y * frame.width + x] } else { 0 });
            }
        }
        placement.resample(&out)
    };
    let components = cut(&labels.components);
    let fingertips = cut(&labels.fingertips);
    let mut tips = [None; 5];
    for (f, tip) in labels.tips.iter().enumerate() {
        if let Some([x, y]) = *tip {
            let p = placement.map_point([x - bbox.x0 as f32, y - bbox.y0 as f32]);
            tips[f] = snap_tip(&fingertips, size, f as u8 + 2, p);
        }
    }
    Ok(Sample {
        size,
        input: input.into_vec(),
        components,
        fingertips,
        tips,
    })
}

/// Rounds `p` to a pixel of `class`, moving to the nearest such pixel if the
/// rounded one belongs to another class. None when the class is absent.
pub fn snap_tip(map: &[u8], size: usize, class: u8, p: [f32; 2]) -> Option<[f32; 2]> {
    let (rx, ry) = (p[0].round(), p[1].round());
    if rx >= 0.0 && ry >= 0.0 && (rx as usize) < size && (ry as usize) < size && map[ry as usize * size + rx as usize] == class {
        return Some([rx, ry]);
    }
    map.iter()
        .enumerate()
        .filter(|(_, &c)| c == class)
        .map(|(i, _)| [(i % size) as f32, (i / size) as f32])
        .min_by(|a, b| {
            let da = (a[0] - p[0]).powi(2) + (a[1] - p[1]).powi(2);
            let db = (b[0] - p[0]).powi(2) + (b[1] - p[1]).powi(2);
            da.total_cmp(&db)
        })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentRanges {
    /// Maximum translation per axis as a fraction of the side.
    pub shift_fraction: f64,
    pub max_rotation_deg: f64,
    pub scale: (f64, f64),
    pub mirror_probability: f64,
}

impl Default for AugmentRanges {
    fn default() -> Self {
        AugmentRanges {
            shift_fraction: 0.1,
            max_rotation_deg: 25.0,
            scale: (0.85, 1.15),
            mirror_probability: 0.5,
        }
    }
}

/// One draw of the geometric augmentation. Applied about the canvas centre
/// as mirror, then rotation and scale, then shift (in pixels).
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AugmentParams {
    pub shift: [f64; 2],
    pub rotation: f64,
    pub scale: f64,
    pub mirror: bool,
}

impl AugmentParams {
    pub const IDENTITY: AugmentParams = AugmentParams {
        shift: [0.0, 0.0],
        rotation: 0.0,
        scale: 1.0,
        mirror: false,
    };

    pub fn sample<R: Rng + ?Sized>(rng: &mut R, size: usize, ranges: &AugmentRanges) -> Self {
        let s = ranges.shift_fraction * size as f64;
        let r = ranges.max_rotation_deg.to_radians();
        AugmentParams {
            shift: [rng.random_range(-s..=s), rng.random_range(-s..=s)],
            rotation: rng.random_range(-r..=r),
            scale: rng.random_range(ranges.scale.0..=ranges.scale.1),
            mirror: rng.random_bool(ranges.mirror_probability),
        }
    }

    /// The draw for sample `index` under `seed`, independent of visiting order.
    pub fn for_index(seed: u64, index: u64, size: usize, ranges: &AugmentRanges) -> Self {
        Self::sample(&mut seeding::stream(seed, &[0x617567, index]), size, ranges)
    }

    fn forward(&self, c: f64, p: [f64; 2]) -> [f64; 2] {
        let (sin, cos) = self.rotation.sin_cos();
        let dx = if self.mirror { c - p[0] } else { p[0] - c };
        let dy = p[1] - c;
        [
            c + self.shift[0] + self.scale * (cos * dx - sin * dy),
            c + self.shift[1] + self.scale * (sin * dx + cos * dy),
        ]
    }

    fn inverse(&self, c: f64, p: [f64; 2]) -> [f64; 2] {
        let (sin, cos) = self.rotation.sin_cos();
        let dx = (p[0] - c - self.shift[0]) / self.scale;
        let dy = (p[1] - c - self.shift[1]) / self.scale;
        let x = cos * dx + sin * dy;
        let y = -sin * dx + cos * dy;
        [if self.mirror { c - x } else { c + x }, c + y]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Augmented {
    pub sample: Sample,
    /// Tips that were present before and are absent now.
    pub clipped: [bool; 5],
}

/// Applies one geometric draw to the input, both label maps and the tips,
/// resampling by nearest neighbour through the inverse map.
pub fn augment(sample: &Sample, params: &AugmentParams) -> Augmented {
    let n = sample.size;
    let c = (n as f64 - 1.0) / 2.0;
    let mut out = Sample {
        size: n,
        input: vec![0.0; n * n],
        components: vec![0; n * n],
        fingertips: vec![0; n * n],
        tips: [None; 5],
    };
    for v in 0..n {
        for u in 0..n {
            let [qx, qy] = params.inverse(c, [u as f64, v as f64]);
            let (qx, qy) = (qx.round(), qy.round());
            if qx < 0.0 || qy < 0.0 || qx >= n as f64 || qy >= n as f64 {
                continue;
            }
            let (src, dst) = (qy as usize * n + qx as usize, v * n + u);
            out.input[dst] = sample.input[src];
            out.components[dst] = sample.components[src];
            out.fingertips[dst] = sample.fingertips[src];
        }
    }
    let mut clipped = [false; 5];
    for (f, tip) in sample.tips.iter().enumerate() {
        let Some([x, y]) = *tip else { continue };
        let [px, py] = params.forward(c, [x as f64, y as f64]);
        let inside = px.round() >= 0.0 && py.round() >= 0.0 && px.round() < n as f64 && py.round() < n as f64;
        out.tips[f] = if inside { snap_tip(&out.fingertips, n, f as u8 + 2, [px as f32, py as f32]) } else { None };
        clipped[f] = out.tips[f].is_none();
    }
    Augmented { sample: out, clipped }
}

pub fn augment_seeded(sample: &Sample, seed: u64, index: u64, ranges: &AugmentRanges) -> Augmented {
    augment(sample, &AugmentParams::for_index(seed, index, sample.size, ranges))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn frame(w: usize, h: usize, depth: &[u16]) -> RgbdFrame {
        RgbdFrame::new(w, h, depth.to_vec()).unwrap()
    }

    #[test]
    fn mode_examples() {
        let p = ThresholdParams::default();
        let f = frame(3, 1, &[800, 800, 1200]);
        assert_eq!(depth_mode(&f, &f.full_box(), &p).unwrap(), 800);
        let f = frame(2, 1, &[700, 500]);
        assert_eq!(depth_mode(&f, &f.full_box(), &p).unwrap(), 500);
        let f = frame(3, 1, &[0, 0, 900]);
        assert_eq!(depth_mode(&f, &f.full_box(), &p).unwrap(), 900);
        let f = frame(2, 1, &[0, 0]);
        assert!(matches!(depth_mode(&f, &f.full_box(), &p), Err(Error::EmptyRegion)));
    }

    #[test]
    fn coarse_bins_report_bin_centre() {
        let p = ThresholdParams { t: 300, mode_bin_width: 10 };
        let f = frame(4, 1, &[801, 809, 812, 1200]);
        assert_eq!(depth_mode(&f, &f.full_box(), &p).unwrap(), 804);
    }

    #[test]
    fn threshold_examples() {
        let f = frame(4, 1, &[800, 800, 1200, 950]);
        let crop = threshold_hand(&f, &f.full_box(), &ThresholdParams::default()).unwrap();
        assert_eq!(crop.depth, vec![800, 800, 0, 950]);
        let bbox = BBox::new(1, 0, 2, 0).unwrap();
        let crop = threshold_hand(&f, &bbox, &ThresholdParams::default()).unwrap();
        assert_eq!(crop.depth.len(), 2);
        assert!(BBox::new(2, 0, 1, 0).is_err());
        assert!(BBox::new(0, 0, 4, 0).unwrap().check(4, 1).is_err());
    }

    #[test]
    fn constant_depth_maps_to_half() {
        let crop = DepthCrop {
            bbox: BBox::new(0, 0, 3, 1).unwrap(),
            mode: 700,
            depth: vec![700, 0, 700, 700, 0, 700, 700, 0],
        };
        let (t, placement) = to_network_input(&crop, 8).unwrap();
        assert!(t.data().iter().all(|&v| v == 0.0 || v == 0.5));
        assert_eq!(t.data().iter().filter(|&&v| v == 0.5).count(), 5 * 4);
        assert_eq!((placement.dst_w, placement.dst_h, placement.off_y), (8, 4, 2));
    }

    #[test]
    fn full_size_crop_only_normalizes() {
        let depth: Vec<u16> = (0..16).map(|i| if i % 5 == 0 { 0 } else { 600 + i as u16 * 10 }).collect();
        let crop = DepthCrop {
            bbox: BBox::new(0, 0, 3, 3).unwrap(),
            mode: 0,
            depth: depth.clone(),
        };
        let (t, placement) = to_network_input(&crop, 4).unwrap();
        assert_eq!(placement.resample(&depth), depth);
        assert_eq!(t.data()[0], 0.0);
        assert_eq!(t.data()[1], (1.0f64 / 132.0) as f32);
        assert_eq!(t.data()[14], (131.0f64 / 132.0) as f32);
        assert_eq!(placement.map_point([2.0, 3.0]), [2.0, 3.0]);
    }

    #[test]
    fn placement_points_round_trip() {
        let p = Placement::new(37, 52, 96);
        let q = p.map_point([10.0, 40.0]);
        let r = p.unmap_point(q);
        assert!((r[0] - 10.0).abs() < 1e-4 && (r[1] - 40.0).abs() < 1e-4);
    }

    #[test]
    fn unresample_inverts_upscaling() {
        for (w, h) in [(37, 52), (96, 96), (5, 3), (60, 20)] {
            let p = Placement::new(w, h, 96);
            let src: Vec<u32> = (0..(w * h) as u32).collect();
            assert_eq!(p.unresample(&p.resample(&src)), src, "{w}x{h}");
        }
    }

    fn toy_sample() -> Sample {
        let n = 16;
        let mut s = Sample {
            size: n,
            input: (0..n * n).map(|i| (i % 7) as f32 / 7.0).collect(),
            components: vec![0; n * n],
            fingertips: vec![0; n * n],
            tips: [None; 5],
        };
        for y in 3..9 {
            for x in 4..7 {
                s.components[y * n + x] = 2;
                s.fingertips[y * n + x] = if y < 5 { 2 } else { 1 };
            }
        }
        s.tips[0] = Some([5.0, 3.0]);
        s
    }

    #[test]
    fn identity_draw_changes_nothing() {
        let s = toy_sample();
        let a = augment(&s, &AugmentParams::IDENTITY);
        assert_eq!(a.sample, s);
        assert_eq!(a.clipped, [false; 5]);
    }

    #[test]
    fn mirror_is_an_involution() {
        let s = toy_sample();
        let m = AugmentParams { mirror: true, ..AugmentParams::IDENTITY };
        let once = augment(&s, &m);
        assert_eq!(once.sample.tips[0], Some([10.0, 3.0]));
        assert_eq!(augment(&once.sample, &m).sample, s);
    }

    #[test]
    fn tips_follow_their_class() {
        let s = toy_sample();
        for i in 0..50 {
            let a = augment_seeded(&s, 9, i, &AugmentRanges::default());
            match a.sample.tips[0] {
                Some([x, y]) => assert_eq!(a.sample.fingertips[y as usize * 16 + x as usize], 2),
                None => assert!(a.clipped[0]),
            }
        }
    }

    #[test]
    fn shift_off_canvas_clips() {
        let s = toy_sample();
        let a = augment(&s, &AugmentParams { shift: [20.0, 0.0], ..AugmentParams::IDENTITY });
        assert!(a.sample.tips[0].is_none() && a.clipped[0]);
        assert!(a.sample.fingertips.iter().all(|&c| c == 0));
    }
}
