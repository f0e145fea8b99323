use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use handseg::detect::{load_detections, propose_regions, DEFAULT_DEPTH_BAND};
use handseg::eval::{tip_centers, MIN_BLOB};
use handseg::preprocess::{depth_mode, BBox, ThresholdParams};
use handseg::synth::*;

fn no_occlusion() -> SynthConfig {
    SynthConfig {
        occlusion_probability: 0.0,
        ..SynthConfig::default()
    }
}

#[test]
fn generated_labels_are_consistent() {
    let cfg = SynthConfig::default();
    for i in 0..300 {
        let (frame, labels) = scene(&cfg, 21, i).unwrap();
        labels.check().unwrap_or_else(|e| panic!("scene {i}: {e}"));
        assert_eq!(frame.depth.len(), labels.components.len());
        for (p, &c) in labels.components.iter().enumerate() {
            if c != 0 {
                assert_ne!(frame.depth[p], 0);
            }
        }
    }
}

#[test]
fn every_class_appears_in_unoccluded_scenes() {
    let cfg = no_occlusion();
    let n = 1000;
    let mut complete = 0;
    for i in 0..n {
        let (_, labels) = scene(&cfg, 5, i).unwrap();
        let all = |map: &[u8]| (0..7u8).all(|c| LabelPair::class_count(map, c) > 0);
        if all(&labels.components) && all(&labels.fingertips) {
            complete += 1;
        }
    }
    assert!(complete * 100 >= n * 99, "{complete} of {n} scenes hold every class");
}

#[test]
fn occluded_tip_is_absent() {
    let mut pose = HandPose::canonical(160, 120);
    pose.occluder = Some(pose.occluder_over(1, [0.0, 0.0]));
    let (_, labels) = render(&pose, 160, 120, 0).unwrap();
    assert_eq!(labels.tips[1], None);
    assert_eq!(LabelPair::class_count(&labels.fingertips, 3), 0);
    assert!(labels.tips.iter().enumerate().all(|(f, t)| f == 1 || t.is_some()));
}

#[test]
fn same_seed_same_scene() {
    let cfg = SynthConfig::default();
    assert_eq!(scene(&cfg, 3, 17).unwrap(), scene(&cfg, 3, 17).unwrap());
    assert_ne!(scene(&cfg, 3, 17).unwrap().0, scene(&cfg, 4, 17).unwrap().0);
}

fn files(dir: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in fs::read_dir(&d).unwrap() {
            let p = entry.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                out.insert(p.strip_prefix(dir).unwrap().display().to_string(), fs::read(&p).unwrap());
            }
        }
    }
    out
}

#[test]
fn dataset_regenerates_byte_identical() {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let cfg = SynthConfig::default();
    let (train, test) = make_dataset(a.path(), 10, 99, &cfg).unwrap();
    assert_eq!((train.len(), test.len()), (7, 3));
    make_dataset(b.path(), 10, 99, &cfg).unwrap();
    let (fa, fb) = (files(a.path()), files(b.path()));
    assert_eq!(fa.len(), 3 * 10 + 3);
    assert_eq!(fa, fb);
}

#[test]
fn manifest_rows_load() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = SynthConfig::default();
    let (train, test) = make_dataset(dir.path(), 12, 4, &cfg).unwrap();
    let dets = load_detections(&dir.path().join(DETECTIONS_FILE), Some((cfg.width, cfg.height))).unwrap();
    for split in [Split::Train, Split::Test] {
        let rows = read_manifest(&dir.path().join(split.manifest_name())).unwrap();
        assert_eq!(&rows, if split == Split::Train { &train } else { &test });
        for row in &rows {
            let (frame, labels) = load_row(dir.path(), row).unwrap();
            let i: u64 = row.id.parse().unwrap();
            let (want_frame, want_labels) = scene(&cfg, 4, i).unwrap();
            assert_eq!(frame, want_frame);
            assert_eq!(labels, want_labels);
            assert_eq!(dets[&row.id].best(), labels.hand_bbox(cfg.bbox_margin));
        }
    }
}

#[test]
fn split_counts_are_exact() {
    for count in 1..60 {
        let n = train_indices(count, 8, (7, 3)).iter().filter(|&&t| t).count();
        assert_eq!(n, (count * 7 * 2 + 10) / 20, "count {count}");
    }
}

fn assert_tight(mask: impl Fn(usize, usize) -> bool, b: &BBox) {
    let row = |y: usize| (b.x0..=b.x1).any(|x| mask(x, y));
    let col = |x: usize| (b.y0..=b.y1).any(|y| mask(x, y));
    assert!(row(b.y0) && row(b.y1) && col(b.x0) && col(b.x1), "{b:?} is not tight");
}

#[test]
fn one_hand_gives_one_tight_box() {
    let cfg = no_occlusion();
    for i in 0..30 {
        let (frame, labels) = scene(&cfg, 12, i).unwrap();
        let boxes = propose_regions(&frame, 50, DEFAULT_DEPTH_BAND).unwrap();
        assert_eq!(boxes, vec![labels.hand_bbox(0).unwrap()], "scene {i}");
        assert_tight(|x, y| labels.components[y * frame.width + x] != 0, &boxes[0]);
    }
}

#[test]
fn two_hands_give_two_boxes() {
    let (w, h) = (240, 120);
    let mut left = HandPose::canonical(w, h);
    left.center[0] = 60.0;
    let mut right = HandPose::canonical(w, h);
    right.center[0] = 180.0;
    let (frame, labels) = render_hands(&[left, right], w, h, 1).unwrap();
    let mut boxes = propose_regions(&frame, 50, DEFAULT_DEPTH_BAND).unwrap();
    assert_eq!(boxes.len(), 2);
    boxes.sort_by_key(|b| b.x0);
    let hand = |x: usize, y: usize| labels.components[y * w + x] != 0;
    for b in &boxes {
        assert_tight(hand, b);
        for y in 0..h {
            for x in 0..w {
                let same_side = (x < w / 2) == (b.x0 < w / 2);
                if same_side && hand(x, y) {
                    assert!(b.contains(x, y));
                }
            }
        }
    }
    assert!(boxes[0].x1 < w / 2 && boxes[1].x0 >= w / 2);
}

#[test]
fn tip_centres_recovered_from_truth_masks() {
    let cfg = SynthConfig {
        noise_sigma: 0.0,
        ..SynthConfig::default()
    };
    let mut seen = 0;
    for i in 0..100 {
        let (frame, labels) = scene(&cfg, 31, i).unwrap();
        let got = tip_centers(&labels.fingertips, frame.width, frame.height, MIN_BLOB);
        for f in 0..5 {
            match (got[f], labels.tips[f]) {
                (Some(p), Some(t)) => {
                    assert!((p[0] - t[0]).hypot(p[1] - t[1]) <= 1.0, "scene {i} finger {f}: {p:?} vs {t:?}");
                    seen += 1;
                }
                (None, None) => {}
                (p, t) => panic!("scene {i} finger {f}: {p:?} vs {t:?}"),
            }
        }
    }
    assert!(seen > 300);
}

#[test]
fn depth_mode_lands_on_the_hand() {
    let cfg = SynthConfig::default();
    for i in 0..200 {
        let (frame, labels) = scene(&cfg, 2, i).unwrap();
        let bbox = labels.hand_bbox(cfg.bbox_margin).unwrap();
        let m = depth_mode(&frame, &bbox, &ThresholdParams::default()).unwrap();
        let hand: Vec<u16> = (0..frame.depth.len()).filter(|&p| labels.components[p] != 0).map(|p| frame.depth[p]).collect();
        assert!(hand.contains(&m), "scene {i}: mode {m} is not a hand depth");
    }
}

#[test]
fn occlusion_scenes_hide_their_finger() {
    let cfg = SynthConfig::default();
    for i in 0..100 {
        let (_, labels, f) = occlusion_scene(&cfg, 8, i).unwrap();
        assert_eq!(labels.tips[f], None, "scene {i}");
        assert_eq!(LabelPair::class_count(&labels.fingertips, f as u8 + 2), 0, "scene {i}");
        labels.check().unwrap();
    }
}
