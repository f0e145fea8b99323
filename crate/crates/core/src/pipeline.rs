//! End-to-end inference on one depth frame: region, thresholding, network,
//! and label maps carried back to frame resolution.

use crate::detect;
use crate::eval::{tip_centers, MIN_BLOB};
use crate::network::{argmax_classes, Network};
use crate::preprocess::{threshold_hand, to_network_input, BBox, RgbdFrame, ThresholdParams};
use crate::{Error, Result};

/// Smallest region `propose_regions` may return when no box is given.
pub const MIN_REGION_AREA: usize = 50;

/// Labels at frame resolution; pixels outside the box or the depth band are 0.
#[derive(Debug, Clone, PartialEq)]
pub struct FramePrediction {
    pub bbox: BBox,
    pub width: usize,
    pub height: usize,
    pub components: Vec<u8>,
    pub fingertips: Vec<u8>,
    /// Tip centres in frame pixel coordinates.
    pub tips: [Option<[f32; 2]>; 5],
}

pub fn infer_frame(net: &Network, frame: &RgbdFrame, bbox: &BBox, params: &ThresholdParams) -> Result<FramePrediction> {
    bbox.check(frame.width, frame.height)?;
    params.validate()?;
    let (h, w) = net.spec().input_size;
    if h != w {
        return Err(Error::InvalidArgument {
            op: "infer_frame",
            msg: format!("network input {h}x{w} is not square"),
        });
    }
    let crop = threshold_hand(frame, bbox, params)?;
    let (input, placement) = to_network_input(&crop, w)?;
    let out = net.forward(&input)?;
    let canvas = [argmax_classes(&out.components), argmax_classes(&out.fingertips)];
    let back = |c: &[u8]| -> Vec<u8> {
        let crop_labels = placement.unresample(c);
        let mut full = vec![0u8; frame.width * frame.height];
        for (i, (&l, &d)) in crop_labels.iter().zip(&crop.depth).enumerate() {
            if d != 0 {
                full[(bbox.y0 + i / crop.width()) * frame.width + bbox.x0 + i % crop.width()] = l;
            }
        }
        full
    };
    let tips = tip_centers(&canvas[1], w, w, MIN_BLOB).map(|t| {
        t.map(|p| {
            let [x, y] = placement.unmap_point(p);
            [x + bbox.x0 as f32, y + bbox.y0 as f32]
        })
    });
    Ok(FramePrediction {
        bbox: *bbox,
        width: frame.width,
        height: frame.height,
        components: back(&canvas[0]),
        fingertips: back(&canvas[1]),
        tips,
    })
}

/// The nearest region found by `propose_regions`.
pub fn nearest_region(frame: &RgbdFrame) -> Result<BBox> {
    detect::propose_regions(frame, MIN_REGION_AREA, detect::DEFAULT_DEPTH_BAND)?.into_iter().next().ok_or(Error::EmptyRegion)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::network::{NetworkSpec, WidthMultiplier};
    use crate::synth::{render, HandPose};

    fn net() -> Network {
        let spec = NetworkSpec::default().with_width(WidthMultiplier::new(1, 16).unwrap()).with_input(16, 16).with_stages(2);
        Network::build(spec, 1).unwrap()
    }

    #[test]
    fn labels_stay_inside_the_band() {
        let (frame, _) = render(&HandPose::canonical(80, 60), 80, 60, 0).unwrap();
        let bbox = nearest_region(&frame).unwrap();
        let p = infer_frame(&net(), &frame, &bbox, &ThresholdParams::default()).unwrap();
        let crop = threshold_hand(&frame, &bbox, &ThresholdParams::default()).unwrap();
        for y in 0..60 {
            for x in 0..80 {
                let inside = bbox.contains(x, y) && crop.depth[(y - bbox.y0) * bbox.width() + x - bbox.x0] != 0;
                if !inside {
                    assert_eq!(p.components[y * 80 + x], 0);
                    assert_eq!(p.fingertips[y * 80 + x], 0);
                }
            }
        }
    }

    #[test]
    fn rejects_box_outside_frame() {
        let (frame, _) = render(&HandPose::canonical(80, 60), 80, 60, 0).unwrap();
        let bbox = BBox::new(70, 0, 85, 10).unwrap();
        assert!(infer_frame(&net(), &frame, &bbox, &ThresholdParams::default()).is_err());
    }

    #[test]
    fn empty_frame_has_no_region() {
        let frame = RgbdFrame::new(8, 8, vec![0; 64]).unwrap();
        assert!(matches!(nearest_region(&frame), Err(Error::EmptyRegion)));
    }
}
