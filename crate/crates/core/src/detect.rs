//! Hand boxes from an external detector, and a depth-only fallback proposer.
//!
//! The detections file holds one box per line: `frame_id x y x' y' conf`,
//! corners inclusive, confidence in [0, 1]. Blank lines and lines starting
//! with `#` are ignored.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::Path;

use crate::labeling;
use crate::preprocess::{BBox, RgbdFrame};
use crate::{Error, Result};

pub const DEFAULT_DEPTH_BAND: u16 = 300;

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DetectionRecord {
    pub boxes: Vec<(BBox, f32)>,
}

impl DetectionRecord {
    pub fn check(&self, width: usize, height: usize) -> Result<()> {
        self.boxes.iter().try_for_each(|(b, _)| b.check(width, height))
    }

    /// The most confident box; ties keep the first listed.
    pub fn best(&self) -> Option<BBox> {
        self.boxes.iter().fold(None, |acc: Option<&(BBox, f32)>, b| match acc {
            Some(a) if a.1 >= b.1 => Some(a),
            _ => Some(b),
        })
        .map(|b| b.0)
    }
}

fn parse_line(line: &str, bounds: Option<(usize, usize)>) -> std::result::Result<(String, BBox, f32), String> {
    let f: Vec<&str> = line.split_whitespace().collect();
    if f.len() != 6 {
        return Err(format!("expected `frame_id x y x' y' conf`, found {} fields", f.len()));
    }
    let mut c = [0usize; 4];
    for (v, s) in c.iter_mut().zip(&f[1..5]) {
        *v = s.parse().map_err(|_| format!("bad coordinate {s:?}"))?;
    }
    let conf: f32 = f[5].parse().map_err(|_| format!("bad confidence {:?}", f[5]))?;
    if !(0.0..=1.0).contains(&conf) {
        return Err(format!("confidence {conf} outside [0, 1]"));
    }
    if c[2] < c[0] || c[3] < c[1] {
        return Err(format!("box ({},{})-({},{}) has x' < x or y' < y", c[0], c[1], c[2], c[3]));
    }
    let b = BBox {
        x0: c[0],
        y0: c[1],
        x1: c[2],
        y1: c[3],
    };
    if let Some((w, h)) = bounds {
        b.check(w, h).map_err(|e| e.to_string())?;
    }
    Ok((f[0].to_string(), b, conf))
}

/// Parses a detections file. With `bounds = Some((width, height))` every box
/// must also fit that frame size.
pub fn load_detections(path: &Path, bounds: Option<(usize, usize)>) -> Result<BTreeMap<String, DetectionRecord>> {
    let text = fs::read_to_string(path).map_err(|e| Error::io(format!("reading {}", path.display()), e))?;
    let mut out: BTreeMap<String, DetectionRecord> = BTreeMap::new();
    for (i, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let (id, b, conf) = parse_line(line, bounds).map_err(|msg| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            msg,
        })?;
        out.entry(id).or_default().boxes.push((b, conf));
    }
    Ok(out)
}

pub fn format_detections(records: &BTreeMap<String, DetectionRecord>) -> String {
    let mut s = String::new();
    for (id, rec) in records {
        for (b, conf) in &rec.boxes {
            writeln!(s, "{id} {} {} {} {} {conf}", b.x0, b.y0, b.x1, b.y1).expect("writing to a String");
        }
    }
    s
}

pub fn save_detections(path: &Path, records: &BTreeMap<String, DetectionRecord>) -> Result<()> {
    for (id, rec) in records {
        if id.is_empty() || id.contains(char::is_whitespace) || id.starts_with('#') {
            return Err(Error::InvalidArgument {
                op: "save_detections",
                msg: format!("frame id {id:?} cannot be written"),
            });
        }
        if let Some((_, c)) = rec.boxes.iter().find(|(_, c)| !(0.0..=1.0).contains(c)) {
            return Err(Error::InvalidArgument {
                op: "save_detections",
                msg: format!("confidence {c} outside [0, 1]"),
            });
        }
    }
    crate::checkpoint::write_atomic(path, format_detections(records).as_bytes())
}

/// Boxes around the connected regions lying within `depth_band` of the
/// nearest valid depth, keeping those of at least `min_area` pixels.
/// Sorted by each region's nearest depth, then raster order.
pub fn propose_regions(frame: &RgbdFrame, min_area: usize, depth_band: u16) -> Result<Vec<BBox>> {
    let nearest = frame.depth.iter().copied().filter(|&d| d != 0).min().ok_or(Error::EmptyRegion)?;
    let mask: Vec<bool> = frame.depth.iter().map(|&d| d != 0 && ((d - nearest) as u32) < depth_band as u32).collect();
    let mut found: Vec<(u16, BBox)> = labeling::components(&mask, frame.width, frame.height)
        .into_iter()
        .filter(|c| c.area >= min_area)
        .map(|c| {
            let b = c.bbox;
            let near = (b.y0..=b.y1)
                .flat_map(|y| (b.x0..=b.x1).map(move |x| (x, y)))
                .filter(|&(x, y)| mask[y * frame.width + x])
                .map(|(x, y)| frame.at(x, y))
                .min()
                .expect("component has pixels");
            (near, b)
        })
        .collect();
    found.sort_by_key(|(near, _)| *near);
    Ok(found.into_iter().map(|(_, b)| b).collect())
}
